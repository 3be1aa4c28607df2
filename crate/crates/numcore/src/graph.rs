//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a node holding
//! its output value and the rule needed to push gradients back to its inputs. Nodes that do
//! not depend on any parameter are marked constant and skipped by [`Graph::backward`].

use std::collections::BTreeMap;

use crate::error::{NumError, Result};
use crate::tensor::{gemm, gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulCols(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        r: usize,
        k: usize,
        c: usize,
    },
    BmmNt {
        a: Var,
        b: Var,
        batch: usize,
        r: usize,
        k: usize,
        c: usize,
    },
    Transpose {
        x: Var,
        m: usize,
        n: usize,
    },
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Gelu(Var),
    Square(Var),
    Clamp01(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        dk: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        dk: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    MeanPool {
        x: Var,
        group: usize,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    RepeatEach {
        x: Var,
        times: usize,
    },
    AddKeyBias {
        x: Var,
    },
    ConcatRows(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    name: Option<String>,
    requires_grad: bool,
}

/// Per-pass computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    named: BTreeMap<String, usize>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros if `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get_named(&self, name: &str) -> Option<Tensor> {
        self.named.get(name).map(|&i| self.get(Var(i)))
    }

    /// Gradient of every named leaf; unreachable leaves map to zeros.
    pub fn by_name(&self) -> BTreeMap<String, Tensor> {
        self.named
            .iter()
            .map(|(k, &i)| (k.clone(), self.get(Var(i))))
            .collect()
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    // tanh approximation
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * A * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            name: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].name = Some(name.into());
        v
    }

    /// Unnamed trainable leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NumError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn check_row_vector(&self, op: &'static str, x: Var, v: Var) -> Result<usize> {
        let c = self.value(x).cols();
        if self.shape(v) != [c] {
            return Err(NumError::ShapeMismatch {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        Ok(c)
    }

    /// `x[.., c] + bias[c]`, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.check_row_vector("add_bias", x, bias)?;
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    /// `x[.., c] * g[c]`, scaling each column.
    pub fn mul_cols(&mut self, x: Var, g: Var) -> Result<Var> {
        let c = self.check_row_vector("mul_cols", x, g)?;
        let mut out = self.value(x).clone();
        let gv = self.value(g).data().to_vec();
        for row in out.data_mut().chunks_mut(c) {
            for (o, s) in row.iter_mut().zip(&gv) {
                *o *= s;
            }
        }
        let rg = self.rg(&[x, g]);
        Ok(self.push(out, Op::MulCols(x, g), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// `x * s` for a single-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(NumError::BadShape {
                op: "scale_by",
                detail: format!("scale must have one element, got {:?}", self.shape(s)),
            });
        }
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| v * sv);
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::ScaleBy(x, s), rg))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// Matrix product. `a` may have rank ≥ 2 (leading axes act as rows); `b` is `k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() < 2 || bsh.len() != 2 || ash[ash.len() - 1] != bsh[0] {
            return Err(NumError::ShapeMismatch {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let k = bsh[0];
        let n = bsh[1];
        let m = self.value(a).numel() / k.max(1);
        let data = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let mut shape = ash;
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Batched product `[n,r,k] · [n,k,c] → [n,r,c]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
            return Err(NumError::ShapeMismatch {
                op: "bmm",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (batch, r, k, c) = (ash[0], ash[1], ash[2], bsh[2]);
        let mut data = vec![0.0; batch * r * c];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm_acc(
                &av[i * r * k..(i + 1) * r * k],
                &bv[i * k * c..(i + 1) * k * c],
                &mut data[i * r * c..(i + 1) * r * c],
                r,
                k,
                c,
            );
        }
        let out = Tensor::new(vec![batch, r, c], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            out,
            Op::Bmm {
                a,
                b,
                batch,
                r,
                k,
                c,
            },
            rg,
        ))
    }

    /// Batched product with transposed right operand `[n,r,k] · [n,c,k]ᵀ → [n,r,c]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[2] {
            return Err(NumError::ShapeMismatch {
                op: "bmm_nt",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (batch, r, k, c) = (ash[0], ash[1], ash[2], bsh[1]);
        let mut data = vec![0.0; batch * r * c];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm_nt_acc(
                &av[i * r * k..(i + 1) * r * k],
                &bv[i * c * k..(i + 1) * c * k],
                &mut data[i * r * c..(i + 1) * r * c],
                r,
                k,
                c,
            );
        }
        let out = Tensor::new(vec![batch, r, c], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            out,
            Op::BmmNt {
                a,
                b,
                batch,
                r,
                k,
                c,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 2 {
            return Err(NumError::BadShape {
                op: "transpose",
                detail: format!("expected rank 2, got {sh:?}"),
            });
        }
        let (m, n) = (sh[0], sh[1]);
        let xv = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xv[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose { x, m, n }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        let rg = self.rg(&[x]);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        let rg = self.rg(&[x]);
        self.push(out, Op::Ln(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu_parts(v).0);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let rg = self.rg(&[x]);
        self.push(out, Op::Square(x), rg)
    }

    /// `min(1, max(0, x))`; gradient passes only strictly inside (0, 1).
    pub fn clamp01(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.clamp(0.0, 1.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Clamp01(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    /// Mean over all elements; an empty tensor has mean 0.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let m = if n == 0 {
            0.0
        } else {
            self.value(x).sum() / n as f64
        };
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    fn check_finite(&self, op: &'static str, x: Var) -> Result<()> {
        if !self.value(x).all_finite() {
            return Err(NumError::NonFinite { op });
        }
        Ok(())
    }

    /// Softmax along the last axis, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check_finite("softmax_rows", x)?;
        let mut out = self.value(x).clone();
        let c = out.cols();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check_finite("log_softmax_rows", x)?;
        let mut out = self.value(x).clone();
        let c = out.cols();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LogSoftmaxRows(x), rg))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.check_row_vector("layer_norm", x, gamma)?;
        self.check_row_vector("layer_norm", x, beta)?;
        let xv = self.value(x);
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (j, v) in row.iter().enumerate() {
                xhat[r * c + j] = (v - mean) * is;
            }
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let data: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, h)| h * gv[i % c] + bv[i % c])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// `[batch·seq, heads·dk] → [batch·heads, seq, dk]`
    pub fn split_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        let total = self.value(x).numel();
        let width = self.value(x).cols();
        if heads == 0
            || batch == 0
            || !width.is_multiple_of(heads)
            || !total.is_multiple_of(batch * width.max(1))
        {
            return Err(NumError::BadShape {
                op: "split_heads",
                detail: format!("cannot split {sh:?} into batch {batch} × {heads} heads"),
            });
        }
        let dk = width / heads;
        let seq = total / (batch * width);
        let xv = self.value(x).data();
        let mut data = vec![0.0; total];
        for b in 0..batch {
            for s in 0..seq {
                for h in 0..heads {
                    let src = (b * seq + s) * width + h * dk;
                    let dst = ((b * heads + h) * seq + s) * dk;
                    data[dst..dst + dk].copy_from_slice(&xv[src..src + dk]);
                }
            }
        }
        let out = Tensor::new(vec![batch * heads, seq, dk], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
                dk,
            },
            rg,
        ))
    }

    /// Inverse of [`Graph::split_heads`]: `[batch·heads, seq, dk] → [batch·seq, heads·dk]`.
    pub fn merge_heads(&mut self, x: Var, batch: usize) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 3 || batch == 0 || !sh[0].is_multiple_of(batch) {
            return Err(NumError::BadShape {
                op: "merge_heads",
                detail: format!("cannot merge {sh:?} with batch {batch}"),
            });
        }
        let (heads, seq, dk) = (sh[0] / batch, sh[1], sh[2]);
        let xv = self.value(x).data();
        let mut data = vec![0.0; xv.len()];
        for b in 0..batch {
            for h in 0..heads {
                for s in 0..seq {
                    let src = ((b * heads + h) * seq + s) * dk;
                    let dst = (b * seq + s) * heads * dk + h * dk;
                    data[dst..dst + dk].copy_from_slice(&xv[src..src + dk]);
                }
            }
        }
        let out = Tensor::new(vec![batch * seq, heads * dk], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
                dk,
            },
            rg,
        ))
    }

    /// Rows of a rank-2 tensor selected (with repetition) by `idx`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(NumError::BadShape {
                op: "gather_rows",
                detail: format!("expected rank 2, got {:?}", xv.shape()),
            });
        }
        let rows = xv.shape()[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(NumError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                extent: rows,
            });
        }
        let out = xv.select_rows(idx);
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// `out[r] = x[r, idx[r]]` for rank-2 `x`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.shape()[0] != idx.len() {
            return Err(NumError::BadShape {
                op: "pick",
                detail: format!("{} indices for shape {:?}", idx.len(), xv.shape()),
            });
        }
        let c = xv.cols();
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(NumError::IndexOutOfRange {
                op: "pick",
                index: bad,
                extent: c,
            });
        }
        let data = idx.iter().enumerate().map(|(r, &j)| xv.at2(r, j)).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::vector(data),
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Mean over consecutive groups of `group` rows: `[n·group, c] → [n, c]`.
    pub fn mean_pool(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let rows = xv.rows();
        if group == 0 || !rows.is_multiple_of(group) {
            return Err(NumError::BadShape {
                op: "mean_pool",
                detail: format!("{rows} rows not divisible into groups of {group}"),
            });
        }
        let n = rows / group;
        let mut data = vec![0.0; n * c];
        for r in 0..rows {
            let dst = &mut data[(r / group) * c..(r / group + 1) * c];
            for (d, v) in dst.iter_mut().zip(xv.row(r)) {
                *d += v;
            }
        }
        for v in &mut data {
            *v /= group as f64;
        }
        let out = Tensor::new(vec![n, c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MeanPool { x, group }, rg))
    }

    /// Each row divided by its Euclidean norm (plus `1e-12` inside the root).
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        let mut norms = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_mut(c.max(1)) {
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
            norms.push(norm);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::NormalizeRows { x, norms }, rg)
    }

    /// `[n] → [n·times]`, repeating each element `times` times in place.
    pub fn repeat_each(&mut self, x: Var, times: usize) -> Result<Var> {
        if self.value(x).rank() != 1 {
            return Err(NumError::BadShape {
                op: "repeat_each",
                detail: format!("expected rank 1, got {:?}", self.shape(x)),
            });
        }
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, times))
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::vector(data), Op::RepeatEach { x, times }, rg))
    }

    /// Adds a constant per-key bias `[batch, k]` to scores `[batch·heads, q, k]`.
    pub fn add_key_bias(&mut self, x: Var, bias: &Tensor, heads: usize) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 3
            || bias.rank() != 2
            || bias.shape()[0] * heads != sh[0]
            || bias.shape()[1] != sh[2]
        {
            return Err(NumError::ShapeMismatch {
                op: "add_key_bias",
                lhs: sh,
                rhs: bias.shape().to_vec(),
            });
        }
        let (q, k) = (sh[1], sh[2]);
        let mut out = self.value(x).clone();
        for (blk, chunk) in out.data_mut().chunks_mut(q * k).enumerate() {
            let brow = bias.row(blk / heads);
            for row in chunk.chunks_mut(k) {
                for (v, b) in row.iter_mut().zip(brow) {
                    *v += b;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::AddKeyBias { x }, rg))
    }

    /// Stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(NumError::BadShape {
            op: "concat_rows",
            detail: "no inputs".into(),
        })?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.cols() != c {
                return Err(NumError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(*first).to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NumError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let mut named = BTreeMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if let Some(name) = &n.name {
                named.insert(name.clone(), i);
            }
        }
        grads.resize(self.nodes.len(), None);
        // keep gradients only for leaves; interior values are no longer needed
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            named,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        let out = node.value.data();
        // Accumulates into input `v` if it participates in differentiation.
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let shape = self.nodes[v.0].value.shape().to_vec();
                    accumulate(&mut grads[v.0], &shape, |$buf| $body);
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |buf| buf.iter_mut().zip(gd).for_each(|(o, g)| *o += g));
                acc!(*b, |buf| buf.iter_mut().zip(gd).for_each(|(o, g)| *o += g));
            }
            Op::Sub(a, b) => {
                acc!(*a, |buf| buf.iter_mut().zip(gd).for_each(|(o, g)| *o += g));
                acc!(*b, |buf| buf.iter_mut().zip(gd).for_each(|(o, g)| *o -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc!(*a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gd[i] * bv[i];
                    }
                });
                acc!(*b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gd[i] * av[i];
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc!(*x, |buf| buf.iter_mut().zip(gd).for_each(|(o, g)| *o += g));
                acc!(*b, |buf| {
                    let c = buf.len();
                    for row in gd.chunks(c) {
                        buf.iter_mut().zip(row).for_each(|(o, g)| *o += g);
                    }
                });
            }
            Op::MulCols(x, s) => {
                let sv = self.value(*s).data();
                let xv = self.value(*x).data();
                let c = sv.len();
                acc!(*x, |buf| {
                    for (i, o) in buf.iter_mut().enumerate() {
                        *o += gd[i] * sv[i % c];
                    }
                });
                acc!(*s, |buf| {
                    for (i, (&g, &xi)) in gd.iter().zip(xv).enumerate() {
                        buf[i % c] += g * xi;
                    }
                });
            }
            Op::Scale(x, c) => {
                acc!(*x, |buf| buf
                    .iter_mut()
                    .zip(gd)
                    .for_each(|(o, g)| *o += g * c));
            }
            Op::ScaleBy(x, s) => {
                let sv = self.value(*s).item();
                let xv = self.value(*x).data();
                acc!(*x, |buf| buf
                    .iter_mut()
                    .zip(gd)
                    .for_each(|(o, g)| *o += g * sv));
                acc!(*s, |buf| {
                    buf[0] += gd.iter().zip(xv).map(|(g, x)| g * x).sum::<f64>();
                });
            }
            Op::AddScalar(x) | Op::Reshape(x) | Op::AddKeyBias { x } => {
                acc!(*x, |buf| buf.iter_mut().zip(gd).for_each(|(o, g)| *o += g));
            }
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc!(*a, |buf| gemm_nt_acc(gd, bv, buf, *m, *n, *k));
                acc!(*b, |buf| gemm_tn_acc(av, gd, buf, *m, *k, *n));
            }
            Op::Bmm {
                a,
                b,
                batch,
                r,
                k,
                c,
            } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (r, k, c) = (*r, *k, *c);
                acc!(*a, |buf| {
                    for i in 0..*batch {
                        gemm_nt_acc(
                            &gd[i * r * c..(i + 1) * r * c],
                            &bv[i * k * c..(i + 1) * k * c],
                            &mut buf[i * r * k..(i + 1) * r * k],
                            r,
                            c,
                            k,
                        );
                    }
                });
                acc!(*b, |buf| {
                    for i in 0..*batch {
                        gemm_tn_acc(
                            &av[i * r * k..(i + 1) * r * k],
                            &gd[i * r * c..(i + 1) * r * c],
                            &mut buf[i * k * c..(i + 1) * k * c],
                            r,
                            k,
                            c,
                        );
                    }
                });
            }
            Op::BmmNt {
                a,
                b,
                batch,
                r,
                k,
                c,
            } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (r, k, c) = (*r, *k, *c);
                // out = a · bᵀ ; da = g · b ; db = gᵀ · a
                acc!(*a, |buf| {
                    for i in 0..*batch {
                        gemm_acc(
                            &gd[i * r * c..(i + 1) * r * c],
                            &bv[i * c * k..(i + 1) * c * k],
                            &mut buf[i * r * k..(i + 1) * r * k],
                            r,
                            c,
                            k,
                        );
                    }
                });
                acc!(*b, |buf| {
                    for i in 0..*batch {
                        gemm_tn_acc(
                            &gd[i * r * c..(i + 1) * r * c],
                            &av[i * r * k..(i + 1) * r * k],
                            &mut buf[i * c * k..(i + 1) * c * k],
                            r,
                            c,
                            k,
                        );
                    }
                });
            }
            Op::Transpose { x, m, n } => {
                let (m, n) = (*m, *n);
                acc!(*x, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += gd[j * m + i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                acc!(*x, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gd[i] * out[i] * (1.0 - out[i]);
                    }
                });
            }
            Op::Exp(x) => {
                acc!(*x, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gd[i] * out[i];
                    }
                });
            }
            Op::Ln(x) => {
                let xv = self.value(*x).data();
                acc!(*x, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gd[i] / xv[i];
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc!(*x, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gd[i] * gelu_parts(xv[i]).1;
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                acc!(*x, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += 2.0 * gd[i] * xv[i];
                    }
                });
            }
            Op::Clamp01(x) => {
                let xv = self.value(*x).data();
                acc!(*x, |buf| {
                    for i in 0..buf.len() {
                        if xv[i] > 0.0 && xv[i] < 1.0 {
                            buf[i] += gd[i];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                acc!(*x, |buf| buf.iter_mut().for_each(|o| *o += g0));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel().max(1) as f64;
                let g0 = gd[0] / n;
                acc!(*x, |buf| buf.iter_mut().for_each(|o| *o += g0));
            }
            Op::SoftmaxRows(x) => {
                let c = node.value.cols();
                acc!(*x, |buf| {
                    for ((brow, grow), yrow) in
                        buf.chunks_mut(c).zip(gd.chunks(c)).zip(out.chunks(c))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for j in 0..c {
                            brow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let c = node.value.cols();
                acc!(*x, |buf| {
                    for ((brow, grow), yrow) in
                        buf.chunks_mut(c).zip(gd.chunks(c)).zip(out.chunks(c))
                    {
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..c {
                            brow[j] += grow[j] - yrow[j].exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma).data();
                let c = gv.len();
                acc!(*gamma, |buf| {
                    for (i, (&g, &h)) in gd.iter().zip(xhat).enumerate() {
                        buf[i % c] += g * h;
                    }
                });
                acc!(*beta, |buf| {
                    for (i, &g) in gd.iter().enumerate() {
                        buf[i % c] += g;
                    }
                });
                acc!(*x, |buf| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let grow = &gd[r * c..(r + 1) * c];
                        let hrow = &xhat[r * c..(r + 1) * c];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..c {
                            let dh = grow[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh /= c as f64;
                        mean_dh_h /= c as f64;
                        for j in 0..c {
                            let dh = grow[j] * gv[j];
                            buf[r * c + j] += is * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
                dk,
            } => {
                let (seq, heads, dk) = (*seq, *heads, *dk);
                let width = heads * dk;
                acc!(*x, |buf| {
                    for b in 0..*batch {
                        for s in 0..seq {
                            for h in 0..heads {
                                let dst = (b * seq + s) * width + h * dk;
                                let src = ((b * heads + h) * seq + s) * dk;
                                for t in 0..dk {
                                    buf[dst + t] += gd[src + t];
                                }
                            }
                        }
                    }
                });
            }
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
                dk,
            } => {
                let (seq, heads, dk) = (*seq, *heads, *dk);
                acc!(*x, |buf| {
                    for b in 0..*batch {
                        for h in 0..heads {
                            for s in 0..seq {
                                let dst = ((b * heads + h) * seq + s) * dk;
                                let src = (b * seq + s) * heads * dk + h * dk;
                                for t in 0..dk {
                                    buf[dst + t] += gd[src + t];
                                }
                            }
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = node.value.cols();
                acc!(*x, |buf| {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            buf[src * c + j] += gd[r * c + j];
                        }
                    }
                });
            }
            Op::Pick { x, idx } => {
                let c = self.value(*x).cols();
                acc!(*x, |buf| {
                    for (r, &j) in idx.iter().enumerate() {
                        buf[r * c + j] += gd[r];
                    }
                });
            }
            Op::MeanPool { x, group } => {
                let c = node.value.cols();
                let inv = 1.0 / *group as f64;
                acc!(*x, |buf| {
                    for (r, row) in buf.chunks_mut(c).enumerate() {
                        let g = &gd[(r / group) * c..(r / group + 1) * c];
                        for j in 0..c {
                            row[j] += g[j] * inv;
                        }
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let c = node.value.cols().max(1);
                acc!(*x, |buf| {
                    for (r, n) in norms.iter().enumerate() {
                        let y = &out[r * c..(r + 1) * c];
                        let g = &gd[r * c..(r + 1) * c];
                        let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            buf[r * c + j] += (g[j] - y[j] * dot) / n;
                        }
                    }
                });
            }
            Op::RepeatEach { x, times } => {
                acc!(*x, |buf| {
                    for (i, o) in buf.iter_mut().enumerate() {
                        *o += gd[i * times..(i + 1) * times].iter().sum::<f64>();
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let slice = &gd[offset..offset + n];
                    acc!(p, |buf| buf
                        .iter_mut()
                        .zip(slice)
                        .for_each(|(o, g)| *o += g));
                    offset += n;
                }
            }
        }
    }
}
