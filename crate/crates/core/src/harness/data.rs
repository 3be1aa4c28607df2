use std::fmt;
use std::str::FromStr;

use numcore::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VlpError};
use crate::trimodel::{ModelInput, VlmConfig};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const MASK: usize = 2;
const A: usize = 3;
const IN: usize = 4;
const HAS: usize = 5;
const AT: usize = 6;
const SHAPE_BASE: usize = 8;
const COLOR_BASE: usize = 11;
const SIZE_BASE: usize = 15;
const VERT_BASE: usize = 17;
const HORIZ_BASE: usize = 19;
/// Highest token id used by any caption, plus one.
pub const WORDS: usize = 21;

pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
const RGB: [[f64; 3]; 4] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
];
pub const SIZES: [&str; 2] = ["small", "large"];
const RADII: [f64; 2] = [2.0, 3.5];
/// Distinct latent combinations: shape × color × size × quadrant.
pub const COMBOS: usize = 3 * 4 * 2 * 4;
const TEMPLATES: usize = 3;

const IMAGE_SIDE: usize = 16;
const CHANNELS: usize = 3;
const HELD_OUT_SALT: u64 = 0x5EED_0F_4E1D_0017;
const BLOCK_SALT: u64 = 0xB10C_C0DE;

/// Latent scene factors shared by an image and a caption.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Latent {
    pub shape: usize,
    pub color: usize,
    pub size: usize,
    /// 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
    pub quadrant: usize,
}

impl Latent {
    pub fn from_index(i: usize) -> Self {
        let i = i % COMBOS;
        Self {
            shape: i % 3,
            color: (i / 3) % 4,
            size: (i / 12) % 2,
            quadrant: i / 24,
        }
    }

    pub fn index(&self) -> usize {
        self.shape + 3 * self.color + 12 * self.size + 24 * self.quadrant
    }

    fn random(rng: &mut Rng) -> Self {
        Self::from_index(rng.below(COMBOS))
    }

    /// The same scene with exactly one factor changed to a different value.
    fn perturbed(&self, rng: &mut Rng) -> Self {
        let mut out = *self;
        let bump = |v: &mut usize, n: usize, rng: &mut Rng| *v = (*v + 1 + rng.below(n - 1)) % n;
        match rng.below(4) {
            0 => bump(&mut out.shape, 3, rng),
            1 => bump(&mut out.color, 4, rng),
            2 => bump(&mut out.size, 2, rng),
            _ => bump(&mut out.quadrant, 4, rng),
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Matched image-caption pairs; scored by in-batch recall@1.
    Retrieval,
    /// Half matched, half captions that differ from the image in one factor; binary label.
    Match,
    /// Label is the image's shape; the caption describes an unrelated scene.
    VisionOnly,
    /// Label is the caption's shape; the image shows an unrelated scene.
    TextOnly,
    /// Label is image shape × 4 + caption color; needs both modalities.
    Balanced,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Retrieval,
        TaskKind::Match,
        TaskKind::VisionOnly,
        TaskKind::TextOnly,
        TaskKind::Balanced,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Retrieval => "retrieval",
            TaskKind::Match => "match",
            TaskKind::VisionOnly => "vision_only",
            TaskKind::TextOnly => "text_only",
            TaskKind::Balanced => "balanced",
        }
    }

    /// Classes of the classification head, for tasks that use it.
    pub fn num_classes(self) -> Option<usize> {
        match self {
            TaskKind::VisionOnly | TaskKind::TextOnly => Some(3),
            TaskKind::Balanced => Some(12),
            TaskKind::Retrieval | TaskKind::Match => None,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = VlpError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| VlpError::InvalidArgument(format!("unknown task {s:?}")))
    }
}

/// Synthetic corpus description. Every sample is a pure function of `(seed, index)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub task: TaskKind,
    pub seed: u64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[patches, patch_dim]` pixel features, patches in row-major grid order.
    pub image: Vec<f64>,
    /// CLS followed by the caption, padded to the maximum text length.
    pub tokens: Vec<usize>,
    pub image_latent: Latent,
    pub caption_latent: Latent,
    /// Class id for classification tasks, 1/0 for match, 0 for retrieval.
    pub label: usize,
}

impl SynthSpec {
    pub fn new(task: TaskKind, seed: u64) -> Self {
        Self {
            task,
            seed,
            noise: 0.1,
        }
    }

    /// A disjoint stream for held-out evaluation.
    pub fn held_out(&self) -> Self {
        Self {
            seed: self.seed ^ HELD_OUT_SALT,
            ..self.clone()
        }
    }

    pub fn check_config(&self, config: &VlmConfig) -> Result<()> {
        if config.patch_grid * config.patch_size != IMAGE_SIDE || config.image_channels != CHANNELS
        {
            return Err(VlpError::Config(format!(
                "synthetic images are {IMAGE_SIDE}×{IMAGE_SIDE}×{CHANNELS}; model expects {}×{}×{}",
                config.patch_grid * config.patch_size,
                config.patch_grid * config.patch_size,
                config.image_channels
            )));
        }
        if config.vocab_size < WORDS || config.max_text_len < 8 {
            return Err(VlpError::Config(
                "vocabulary or text length too small for the caption templates".into(),
            ));
        }
        if let Some(c) = self.task.num_classes() {
            if config.num_classes < c {
                return Err(VlpError::Config(format!(
                    "task {} needs {c} classes",
                    self.task
                )));
            }
        }
        Ok(())
    }

    /// Retrieval latents come from a fresh permutation of all combinations per block of
    /// `COMBOS` indices, so no two samples in a block share a caption.
    fn retrieval_latent(&self, index: usize) -> Latent {
        let block = index / COMBOS;
        let mut order: Vec<usize> = (0..COMBOS).collect();
        Rng::stream(self.seed ^ BLOCK_SALT, block as u64).shuffle(&mut order);
        Latent::from_index(order[index % COMBOS])
    }

    pub fn sample(&self, index: usize) -> Sample {
        let mut rng = Rng::stream(self.seed, index as u64);
        let (image_latent, caption_latent, label) = match self.task {
            TaskKind::Retrieval => {
                let l = self.retrieval_latent(index);
                (l, l, 0)
            }
            TaskKind::Match => {
                let img = Latent::random(&mut rng);
                if rng.below(2) == 1 {
                    (img, img, 1)
                } else {
                    (img, img.perturbed(&mut rng), 0)
                }
            }
            TaskKind::VisionOnly => {
                let (img, cap) = (Latent::random(&mut rng), Latent::random(&mut rng));
                (img, cap, img.shape)
            }
            TaskKind::TextOnly => {
                let (img, cap) = (Latent::random(&mut rng), Latent::random(&mut rng));
                (img, cap, cap.shape)
            }
            TaskKind::Balanced => {
                let (img, cap) = (Latent::random(&mut rng), Latent::random(&mut rng));
                (img, cap, img.shape * 4 + cap.color)
            }
        };
        let template = rng.below(TEMPLATES);
        let image = render(&image_latent, self.noise, &mut rng);
        Sample {
            image,
            tokens: caption(&caption_latent, template),
            image_latent,
            caption_latent,
            label,
        }
    }

    pub fn samples(&self, start: usize, n: usize) -> Vec<Sample> {
        (start..start + n).map(|i| self.sample(i)).collect()
    }
}

/// The first `n` samples of `spec`.
pub fn generate(spec: &SynthSpec, n: usize) -> Vec<Sample> {
    spec.samples(0, n)
}

/// Caption tokens: CLS, then one of three templates over the latent factors, padded to 8.
pub fn caption(l: &Latent, template: usize) -> Vec<usize> {
    let shape = SHAPE_BASE + l.shape;
    let color = COLOR_BASE + l.color;
    let size = SIZE_BASE + l.size;
    let vert = VERT_BASE + l.quadrant / 2;
    let horiz = HORIZ_BASE + l.quadrant % 2;
    let mut t = match template % TEMPLATES {
        0 => vec![CLS, A, size, color, shape, AT, vert, horiz],
        1 => vec![CLS, vert, horiz, HAS, size, color, shape],
        _ => vec![CLS, size, color, shape, IN, vert, horiz],
    };
    t.resize(8, PAD);
    t
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        _ => {
            // apex up: half-width grows linearly from the top edge to the base
            let t = (dy + r) / (2.0 * r);
            (0.0..=1.0).contains(&t) && dx.abs() <= t * r
        }
    }
}

/// Renders a 16×16 RGB scene and returns it as 4×4 patches of `(y, x, channel)` pixels.
pub fn render(l: &Latent, noise: f64, rng: &mut Rng) -> Vec<f64> {
    let half = IMAGE_SIDE / 2;
    let jx = rng.below(3) as f64 - 1.0;
    let jy = rng.below(3) as f64 - 1.0;
    let cx = ((l.quadrant % 2) * half) as f64 + half as f64 / 2.0 + jx * 0.5;
    let cy = ((l.quadrant / 2) * half) as f64 + half as f64 / 2.0 + jy * 0.5;
    let r = RADII[l.size];
    let mut pixels = vec![0.0; IMAGE_SIDE * IMAGE_SIDE * CHANNELS];
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let on = inside(l.shape, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r);
            for c in 0..CHANNELS {
                let base = if on { RGB[l.color][c] } else { 0.0 };
                pixels[(y * IMAGE_SIDE + x) * CHANNELS + c] = base + noise * rng.normal();
            }
        }
    }
    let p = 4;
    let grid = IMAGE_SIDE / p;
    let mut out = Vec::with_capacity(pixels.len());
    for py in 0..grid {
        for px in 0..grid {
            for y in 0..p {
                for x in 0..p {
                    let at = ((py * p + y) * IMAGE_SIDE + px * p + x) * CHANNELS;
                    out.extend_from_slice(&pixels[at..at + CHANNELS]);
                }
            }
        }
    }
    out
}

/// A training or evaluation batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub input: ModelInput,
    pub labels: Vec<usize>,
    pub image_latents: Vec<Latent>,
    pub caption_latents: Vec<Latent>,
}

impl Batch {
    pub fn from_samples(samples: &[Sample]) -> Self {
        let patches = samples[0].image.len() / (16 * CHANNELS);
        let patch_dim = 16 * CHANNELS;
        let images: Vec<f64> = samples
            .iter()
            .flat_map(|s| s.image.iter().copied())
            .collect();
        let text_len = samples[0].tokens.len();
        Self {
            input: ModelInput {
                batch: samples.len(),
                images: Tensor::new(vec![samples.len() * patches, patch_dim], images)
                    .expect("uniform sample sizes"),
                tokens: samples
                    .iter()
                    .flat_map(|s| s.tokens.iter().copied())
                    .collect(),
                text_len,
            },
            labels: samples.iter().map(|s| s.label).collect(),
            image_latents: samples.iter().map(|s| s.image_latent).collect(),
            caption_latents: samples.iter().map(|s| s.caption_latent).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.input.batch
    }

    pub fn is_empty(&self) -> bool {
        self.input.batch == 0
    }

    /// Replaces each caption word with MASK with probability `prob` (CLS and padding never),
    /// forcing at least one masked position. Returns the masked tokens, the flat positions and
    /// the original tokens there.
    pub fn mask_tokens(&self, prob: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let tokens = &self.input.tokens;
        let eligible: Vec<usize> = (0..tokens.len())
            .filter(|&i| tokens[i] != PAD && tokens[i] != CLS)
            .collect();
        let mut positions: Vec<usize> = eligible
            .iter()
            .copied()
            .filter(|_| rng.uniform_f64() < prob)
            .collect();
        if positions.is_empty() && !eligible.is_empty() {
            positions.push(eligible[rng.below(eligible.len())]);
        }
        let mut masked = tokens.clone();
        let targets = positions.iter().map(|&i| tokens[i]).collect();
        for &i in &positions {
            masked[i] = MASK;
        }
        (masked, positions, targets)
    }
}
