//! Conditioning vectors: sinusoidal timestep codes and a learned prompt
//! embedder over the structured scene vocabulary.
//!
//! A prompt mentions exactly one token per slot — shape, color, direction,
//! speed bucket, background, and the two start-position bins — and the
//! per-slot vocabularies occupy disjoint id ranges, so sum-pooling the
//! embedding table rows encodes the prompt without ambiguity. Two extra
//! learned vectors ride along: a fill-in task marker added for the
//! interpolation roles (whose job is completing a partially known grid,
//! not free generation), and a null embedding that stands in for "no
//! prompt" during classifier-free guidance and conditioning dropout.

use super::nn::{Grads, ParamGroup, ParamId, Params};
use crate::corpus::{shape_radius, Background, Direction, SceneSpec, Shape, ShapeColor,
    SPEED_QUANTUM};
use rand::Rng;
use rand_distr::StandardNormal;

/// Dimension of the sinusoidal timestep code.
pub const TIME_EMBED_DIM: usize = 16;

/// Number of start-position bins per axis.
pub const POSITION_BINS: usize = 4;

/// Number of speed buckets (speed is quantized to multiples of
/// [`SPEED_QUANTUM`] up to 4.0).
pub const SPEED_BUCKETS: usize = 16;

/// Total token vocabulary: 3 shapes, 8 colors, 6 directions, 4
/// backgrounds, 16 speed buckets, 4 x-bins, 4 y-bins.
pub const VOCAB_SIZE: usize = Shape::ALL.len()
    + ShapeColor::ALL.len()
    + Direction::ALL.len()
    + Background::ALL.len()
    + SPEED_BUCKETS
    + 2 * POSITION_BINS;

/// Classic transformer sinusoid: pairs `(sin(t·ω_k), cos(t·ω_k))` with
/// `ω_k = 10000^(−k/8)`.
pub fn timestep_embedding(t: u32) -> [f64; TIME_EMBED_DIM] {
    let mut out = [0.0; TIME_EMBED_DIM];
    for k in 0..TIME_EMBED_DIM / 2 {
        let omega = 10_000f64.powf(-(k as f64) / (TIME_EMBED_DIM as f64 / 2.0));
        let phase = t as f64 * omega;
        out[2 * k] = phase.sin();
        out[2 * k + 1] = phase.cos();
    }
    out
}

/// One token id per prompt slot, in a fixed slot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTokens {
    ids: [u16; 7],
}

impl PromptTokens {
    pub fn ids(&self) -> &[u16; 7] {
        &self.ids
    }
}

fn speed_bucket(speed: f32) -> usize {
    ((speed / SPEED_QUANTUM).round() as usize).saturating_sub(1).min(SPEED_BUCKETS - 1)
}

/// Maps a start coordinate to one of [`POSITION_BINS`] bins over the valid
/// center range for this frame size.
fn position_bin(coord: i32, frame_size: u32) -> usize {
    let r = shape_radius(frame_size) as i64;
    let lo = r;
    let hi = frame_size as i64 - 1 - r;
    let span = (hi - lo + 1).max(1);
    let rel = (coord as i64 - lo).clamp(0, span - 1);
    ((rel * POSITION_BINS as i64 / span) as usize).min(POSITION_BINS - 1)
}

fn index_of<T: PartialEq + Copy>(all: &[T], item: T) -> usize {
    all.iter().position(|&x| x == item).expect("vocab member")
}

/// Tokenizes a scene into its seven prompt slots. Ids are globally unique
/// across slots (disjoint ranges).
pub fn tokenize(scene: &SceneSpec) -> PromptTokens {
    let mut base = 0usize;
    let shape = base + index_of(Shape::ALL, scene.shape);
    base += Shape::ALL.len();
    let color = base + index_of(ShapeColor::ALL, scene.color);
    base += ShapeColor::ALL.len();
    let direction = base + index_of(Direction::ALL, scene.direction);
    base += Direction::ALL.len();
    let background = base + index_of(Background::ALL, scene.background);
    base += Background::ALL.len();
    let speed = base + speed_bucket(scene.speed);
    base += SPEED_BUCKETS;
    let xbin = base + position_bin(scene.start.0, scene.frame_size);
    base += POSITION_BINS;
    let ybin = base + position_bin(scene.start.1, scene.frame_size);
    let ids = [shape, color, direction, background, speed, xbin, ybin]
        .map(|id| id as u16);
    PromptTokens { ids }
}

/// The vector a denoiser consumes. Plain values; produced by
/// [`PromptEmbedder`] or built directly in tests.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    values: Vec<f64>,
}

impl PromptEmbedding {
    pub fn from_values(values: Vec<f64>) -> Self {
        PromptEmbedding { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Learned embedding table plus the fill-in marker and null vectors.
#[derive(Debug, Clone, Copy)]
pub struct PromptEmbedder {
    table: ParamId,
    fill_marker: ParamId,
    null: ParamId,
    dim: u32,
}

impl PromptEmbedder {
    pub fn init<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        dim: u32,
        rng: &mut R,
    ) -> Self {
        let vector = |n: usize, rng: &mut R| -> Vec<f64> {
            (0..n)
                .map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let table = params.register(
            &format!("{name}.table"),
            ParamGroup::Other,
            vec![VOCAB_SIZE as u32, dim],
            vector(VOCAB_SIZE * dim as usize, rng),
        );
        let fill_marker = params.register(
            &format!("{name}.fill_marker"),
            ParamGroup::Other,
            vec![dim],
            vector(dim as usize, rng),
        );
        let null = params.register(
            &format!("{name}.null"),
            ParamGroup::Other,
            vec![dim],
            vector(dim as usize, rng),
        );
        PromptEmbedder {
            table,
            fill_marker,
            null,
            dim,
        }
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    /// Sum of the seven token rows, plus the fill-in marker when the
    /// consuming role completes partially known grids.
    pub fn embed(
        &self,
        params: &Params,
        tokens: &PromptTokens,
        fill_marker: bool,
    ) -> PromptEmbedding {
        let d = self.dim as usize;
        let table = params.get(self.table).data();
        let mut values = vec![0.0f64; d];
        for &id in tokens.ids() {
            let row = &table[id as usize * d..(id as usize + 1) * d];
            for (v, r) in values.iter_mut().zip(row) {
                *v += r;
            }
        }
        if fill_marker {
            for (v, m) in values.iter_mut().zip(params.get(self.fill_marker).data()) {
                *v += m;
            }
        }
        PromptEmbedding { values }
    }

    /// The learned stand-in for an absent prompt.
    pub fn null_embedding(&self, params: &Params) -> PromptEmbedding {
        PromptEmbedding {
            values: params.get(self.null).data().to_vec(),
        }
    }

    /// Routes `d_out` back onto the rows [`embed`](Self::embed) summed.
    pub fn backward(
        &self,
        tokens: &PromptTokens,
        fill_marker: bool,
        d_out: &[f64],
        grads: &mut Grads,
    ) {
        let d = self.dim as usize;
        assert_eq!(d_out.len(), d, "prompt gradient dim");
        let slot = grads.slot_mut(self.table);
        for &id in tokens.ids() {
            for (g, &v) in slot[id as usize * d..(id as usize + 1) * d]
                .iter_mut()
                .zip(d_out)
            {
                *g += v;
            }
        }
        if fill_marker {
            for (g, &v) in grads.slot_mut(self.fill_marker).iter_mut().zip(d_out) {
                *g += v;
            }
        }
    }

    /// Backward for [`null_embedding`](Self::null_embedding).
    pub fn null_backward(&self, d_out: &[f64], grads: &mut Grads) {
        for (g, &v) in grads.slot_mut(self.null).iter_mut().zip(d_out) {
            *g += v;
        }
    }
}
