//! Distill-then-prune compression for tri-encoder vision-language transformers.
//!
//! A deep teacher is trained on synthetic image-caption data, halved into a student that keeps
//! every second layer, distilled through attention maps, hidden states and logits, and finally
//! pruned with Hard-Concrete gates held to a parameter budget by Lagrangian controllers.

pub mod distill;
pub mod error;
pub mod harness;
pub mod l0prune;
pub mod persist;
pub mod trimodel;

pub use error::{Result, VlpError};
