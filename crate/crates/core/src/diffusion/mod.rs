//! Denoising-diffusion machinery: noise schedule, forward noising, the
//! ε-prediction training objective, and a strided ancestral sampler with
//! classifier-free guidance.
//!
//! The schedule is the plain linear-β DDPM construction. Everything here is
//! written against the [`Denoiser`] trait, so the same sampler drives the
//! trainable convolutional network ([`denoiser::ConvDenoiser`]), the exact
//! oracle used in tests, and the trivial denoisers the verification suite
//! leans on.
//!
//! Conventions: timesteps run 1..=T with ᾱ_0 ≡ 1; `z_t = √ᾱ_t·z_0 +
//! √(1−ᾱ_t)·ε`; the loss is the squared L2 norm of the ε-prediction error
//! summed over elements, averaged over the batch (so a zero denoiser scores
//! ≈ the latent dimensionality).

pub mod adam;
pub mod denoiser;
pub mod embed;
pub mod nn;

use crate::latent::{Latent, LatentError};
use embed::PromptEmbedding;
use nn::ParamGroup;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// Errors from schedule construction, noising, and sampling.
#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("beta range must satisfy 0 < start <= end < 1, got {start}..{end}")]
    BadBetaRange { start: f64, end: f64 },
    #[error("a schedule needs at least one timestep")]
    ZeroTimesteps,
    #[error("timestep {t} outside 0..={max}")]
    TimestepOutOfRange { t: u32, max: u32 },
    #[error("sampler steps {steps} outside 1..={max}")]
    StepsOutOfRange { steps: u32, max: u32 },
    #[error("shape mismatch in {what}")]
    ShapeMismatch { what: &'static str },
    #[error("guidance_scale != 1 requires a null prompt embedding")]
    MissingNullEmbedding,
    #[error("training batch is empty")]
    EmptyBatch,
    #[error("unknown freeze mode {got:?}; expected none, freeze_conv or freeze_attn")]
    BadFreezeMode { got: String },
    #[error(transparent)]
    Latent(#[from] LatentError),
}

/// Which tagged parameter group an optimizer step must leave untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FreezeMode {
    #[default]
    None,
    FreezeConv,
    FreezeAttn,
}

impl FreezeMode {
    pub fn word(self) -> &'static str {
        match self {
            FreezeMode::None => "none",
            FreezeMode::FreezeConv => "freeze_conv",
            FreezeMode::FreezeAttn => "freeze_attn",
        }
    }

    pub fn from_word(word: &str) -> Result<Self, DiffusionError> {
        match word {
            "none" => Ok(FreezeMode::None),
            "freeze_conv" => Ok(FreezeMode::FreezeConv),
            "freeze_attn" => Ok(FreezeMode::FreezeAttn),
            other => Err(DiffusionError::BadFreezeMode {
                got: other.to_owned(),
            }),
        }
    }

    /// True if parameters in `group` must not be updated.
    pub fn freezes(self, group: ParamGroup) -> bool {
        matches!(
            (self, group),
            (FreezeMode::FreezeConv, ParamGroup::Conv)
                | (FreezeMode::FreezeAttn, ParamGroup::Attention)
        )
    }
}

/// Linear-β noise schedule with precomputed α and ᾱ tables.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Builds a `t_max`-step schedule with β linearly interpolated from
/// `beta_start` to `beta_end` (a single-step schedule uses `beta_start`).
pub fn make_schedule(
    t_max: u32,
    beta_start: f64,
    beta_end: f64,
) -> Result<DiffusionSchedule, DiffusionError> {
    if t_max == 0 {
        return Err(DiffusionError::ZeroTimesteps);
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::BadBetaRange {
            start: beta_start,
            end: beta_end,
        });
    }
    let betas: Vec<f64> = (0..t_max)
        .map(|i| {
            if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
            }
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(t_max as usize);
    let mut acc = 1.0;
    for &beta in &betas {
        acc *= 1.0 - beta;
        alpha_bars.push(acc);
    }
    Ok(DiffusionSchedule { betas, alpha_bars })
}

impl DiffusionSchedule {
    pub fn t_max(&self) -> u32 {
        self.betas.len() as u32
    }

    /// β_t for t in 1..=T.
    pub fn beta(&self, t: u32) -> f64 {
        self.betas[(t - 1) as usize]
    }

    /// ᾱ_t for t in 0..=T, with ᾱ_0 ≡ 1.
    pub fn alpha_bar(&self, t: u32) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[(t - 1) as usize]
        }
    }
}

/// A standard-normal latent of the given shape.
pub fn randn_latent<R: Rng + ?Sized>(shape: (u32, u32, u32), rng: &mut R) -> Latent {
    let (c, h, w) = shape;
    let data: Vec<f64> = (0..c as usize * h as usize * w as usize)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Latent::new(c, h, w, data).expect("shape is nonzero")
}

/// `z_t = √ᾱ_t·z_0 + √(1−ᾱ_t)·ε`. Accepts t = 0 (identity) through T.
pub fn forward_noise(
    z0: &Latent,
    t: u32,
    eps: &Latent,
    sched: &DiffusionSchedule,
) -> Result<Latent, DiffusionError> {
    if t > sched.t_max() {
        return Err(DiffusionError::TimestepOutOfRange {
            t,
            max: sched.t_max(),
        });
    }
    if !z0.same_shape(eps) {
        return Err(DiffusionError::ShapeMismatch {
            what: "forward_noise z0 vs eps",
        });
    }
    let ab = sched.alpha_bar(t);
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| signal * z + noise * e)
        .collect();
    Ok(Latent::new(z0.channels(), z0.height(), z0.width(), data)?)
}

/// The conditional ε-predictor contract: output has `z_t`'s shape; image
/// conditioning arrives as extra latents that implementations concatenate
/// with `z_t` along channels.
pub trait Denoiser {
    /// `(channels, height, width)` of the latents being denoised.
    fn latent_shape(&self) -> (u32, u32, u32);

    /// Predicts the noise component of `z_t` at timestep `t`.
    fn predict_eps(
        &self,
        z_t: &Latent,
        t: u32,
        conditions: &[Latent],
        prompt: &PromptEmbedding,
    ) -> Result<Latent, DiffusionError>;
}

/// One training example: clean latent, image conditions, prompt embedding.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub z0: Latent,
    pub conditions: Vec<Latent>,
    pub prompt: PromptEmbedding,
}

/// Draws `(t, ε)` for one item and returns `(t, ε, z_t)`. Shared by the
/// loss value, the analytic-gradient path, and the trainer so they consume
/// the RNG stream identically.
pub fn noise_draw<R: Rng + ?Sized>(
    z0: &Latent,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<(u32, Latent, Latent), DiffusionError> {
    let t = rng.random_range(1..=sched.t_max());
    let eps = randn_latent(z0.shape(), rng);
    let z_t = forward_noise(z0, t, &eps, sched)?;
    Ok((t, eps, z_t))
}

/// Mean over the batch of `‖ε − ε̂‖²` (sum over elements), with t uniform
/// in 1..=T and ε standard normal.
pub fn training_loss<R: Rng + ?Sized>(
    denoiser: &dyn Denoiser,
    batch: &[TrainItem],
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<f64, DiffusionError> {
    if batch.is_empty() {
        return Err(DiffusionError::EmptyBatch);
    }
    let mut total = 0.0;
    for item in batch {
        let (t, eps, z_t) = noise_draw(&item.z0, sched, rng)?;
        let eps_hat = denoiser.predict_eps(&z_t, t, &item.conditions, &item.prompt)?;
        if !eps_hat.same_shape(&eps) {
            return Err(DiffusionError::ShapeMismatch {
                what: "denoiser output vs z_t",
            });
        }
        total += eps
            .data()
            .iter()
            .zip(eps_hat.data())
            .map(|(&e, &p)| (e - p) * (e - p))
            .sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// The descending timestep subsequence the sampler visits: `steps` values,
/// evenly spaced, always including T and 1.
pub fn strided_timesteps(t_max: u32, steps: u32) -> Result<Vec<u32>, DiffusionError> {
    if steps == 0 || steps > t_max {
        return Err(DiffusionError::StepsOutOfRange {
            steps,
            max: t_max,
        });
    }
    if steps == 1 {
        return Ok(vec![t_max]);
    }
    let mut taus: Vec<u32> = (0..steps)
        .map(|i| 1 + ((t_max - 1) as f64 * i as f64 / (steps - 1) as f64).round() as u32)
        .collect();
    taus.dedup();
    taus.reverse();
    Ok(taus)
}

/// Ancestral sampling over [`strided_timesteps`], starting from standard
/// normal noise. With `guidance_scale != 1` each visited step evaluates the
/// denoiser twice and mixes `ε̂ = ε̂_null + s·(ε̂_prompt − ε̂_null)`
/// (classifier-free guidance); the null embedding is required then and
/// unused otherwise. The final step to t = 0 is deterministic (zero
/// posterior variance), so an exact denoiser reconstructs its target
/// exactly.
#[allow(clippy::too_many_arguments)]
pub fn sample<R: Rng + ?Sized>(
    denoiser: &dyn Denoiser,
    conditions: &[Latent],
    prompt: &PromptEmbedding,
    null_prompt: Option<&PromptEmbedding>,
    steps: u32,
    guidance_scale: f64,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Latent, DiffusionError> {
    let taus = strided_timesteps(sched.t_max(), steps)?;
    let guided = guidance_scale != 1.0;
    if guided && null_prompt.is_none() {
        return Err(DiffusionError::MissingNullEmbedding);
    }
    let mut z = randn_latent(denoiser.latent_shape(), rng);
    for (i, &t) in taus.iter().enumerate() {
        let t_prev = taus.get(i + 1).copied().unwrap_or(0);
        let eps_prompt = denoiser.predict_eps(&z, t, conditions, prompt)?;
        if !eps_prompt.same_shape(&z) {
            return Err(DiffusionError::ShapeMismatch {
                what: "denoiser output vs z_t",
            });
        }
        let eps_hat = if guided {
            let eps_null =
                denoiser.predict_eps(&z, t, conditions, null_prompt.expect("checked above"))?;
            let mut mixed = eps_null.clone();
            for ((m, &c), &u) in mixed
                .data_mut()
                .iter_mut()
                .zip(eps_prompt.data())
                .zip(eps_null.data())
            {
                *m = u + guidance_scale * (c - u);
            }
            mixed
        } else {
            eps_prompt
        };

        let ab_t = sched.alpha_bar(t);
        let ab_prev = sched.alpha_bar(t_prev);
        // Posterior of z_{t_prev} given (z_t, x0_hat) under the strided
        // chain with effective alpha ᾱ_t / ᾱ_prev.
        let alpha_eff = ab_t / ab_prev;
        let beta_eff = 1.0 - alpha_eff;
        let coef_x0 = ab_prev.sqrt() * beta_eff / (1.0 - ab_t);
        let coef_z = alpha_eff.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let sigma = if t_prev == 0 {
            0.0
        } else {
            (beta_eff * (1.0 - ab_prev) / (1.0 - ab_t)).sqrt()
        };
        let mut next = Latent::zeros(z.channels(), z.height(), z.width());
        for i in 0..z.len() {
            let x0_hat = (z.data()[i] - (1.0 - ab_t).sqrt() * eps_hat.data()[i]) / ab_t.sqrt();
            let mut v = coef_x0 * x0_hat + coef_z * z.data()[i];
            if sigma > 0.0 {
                let n: f64 = StandardNormal.sample(rng);
                v += sigma * n;
            }
            next.data_mut()[i] = v;
        }
        z = next;
    }
    Ok(z)
}

/// Two-parameter toy denoiser `ε̂ = a·z_t + b` with an analytic gradient of
/// [`training_loss`]; the verification suite checks the analytic gradient
/// against central finite differences.
#[derive(Debug, Clone, Copy)]
pub struct AffineToyDenoiser {
    pub a: f64,
    pub b: f64,
    pub shape: (u32, u32, u32),
}

impl Denoiser for AffineToyDenoiser {
    fn latent_shape(&self) -> (u32, u32, u32) {
        self.shape
    }

    fn predict_eps(
        &self,
        z_t: &Latent,
        _t: u32,
        _conditions: &[Latent],
        _prompt: &PromptEmbedding,
    ) -> Result<Latent, DiffusionError> {
        let data = z_t.data().iter().map(|&z| self.a * z + self.b).collect();
        Ok(Latent::new(z_t.channels(), z_t.height(), z_t.width(), data)?)
    }
}

impl AffineToyDenoiser {
    /// Loss and `(dL/da, dL/db)` for one batch, consuming the RNG exactly
    /// like [`training_loss`] does.
    pub fn loss_and_grad<R: Rng + ?Sized>(
        &self,
        batch: &[TrainItem],
        sched: &DiffusionSchedule,
        rng: &mut R,
    ) -> Result<(f64, f64, f64), DiffusionError> {
        if batch.is_empty() {
            return Err(DiffusionError::EmptyBatch);
        }
        let (mut loss, mut da, mut db) = (0.0, 0.0, 0.0);
        for item in batch {
            let (_t, eps, z_t) = noise_draw(&item.z0, sched, rng)?;
            for (&e, &z) in eps.data().iter().zip(z_t.data()) {
                let r = e - (self.a * z + self.b);
                loss += r * r;
                da += -2.0 * r * z;
                db += -2.0 * r;
            }
        }
        let n = batch.len() as f64;
        Ok((loss / n, da / n, db / n))
    }
}

/// The exact ε for a known clean latent: `ε*(z_t, t) = (z_t − √ᾱ_t·z_0) /
/// √(1−ᾱ_t)`. Sampling with this denoiser must reconstruct `z0`.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub z0: Latent,
    pub sched: DiffusionSchedule,
}

impl Denoiser for OracleDenoiser {
    fn latent_shape(&self) -> (u32, u32, u32) {
        self.z0.shape()
    }

    fn predict_eps(
        &self,
        z_t: &Latent,
        t: u32,
        _conditions: &[Latent],
        _prompt: &PromptEmbedding,
    ) -> Result<Latent, DiffusionError> {
        let ab = self.sched.alpha_bar(t);
        let data = z_t
            .data()
            .iter()
            .zip(self.z0.data())
            .map(|(&zt, &z0)| (zt - ab.sqrt() * z0) / (1.0 - ab).sqrt())
            .collect();
        Ok(Latent::new(z_t.channels(), z_t.height(), z_t.width(), data)?)
    }
}

/// ε̂ ≡ 0; useful as a fixed point for regression snapshots.
#[derive(Debug, Clone, Copy)]
pub struct ZeroDenoiser {
    pub shape: (u32, u32, u32),
}

impl Denoiser for ZeroDenoiser {
    fn latent_shape(&self) -> (u32, u32, u32) {
        self.shape
    }

    fn predict_eps(
        &self,
        z_t: &Latent,
        _t: u32,
        _conditions: &[Latent],
        _prompt: &PromptEmbedding,
    ) -> Result<Latent, DiffusionError> {
        Ok(Latent::zeros(z_t.channels(), z_t.height(), z_t.width()))
    }
}
