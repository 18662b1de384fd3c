//! The trainable ε-predictor: a small two-scale U-Net over latents.
//!
//! Layout (base width b): a stem conv, one encoder block per scale with
//! 2× average pooling between them, a bottleneck of two blocks around a
//! single-head self-attention, then the mirrored decoder with nearest
//! upsampling and additive skip connections. Every block is
//! conv3×3 → FiLM → SiLU; FiLM is driven by a two-layer MLP over the
//! concatenated timestep sinusoid and prompt embedding, so both time and
//! text conditioning reach every scale. The output projection is
//! zero-initialized: an untrained network predicts ε̂ = 0.
//!
//! Image conditioning (key frames, known grid cells) is concatenated to
//! `z_t` along channels at the stem. The backward pass returns the
//! gradient with respect to the prompt embedding so the caller can route
//! it into the embedding table.

use super::embed::{timestep_embedding, PromptEmbedding, TIME_EMBED_DIM};
use super::nn::{
    add, avgpool2, avgpool2_back, silu, silu_back, upsample2, upsample2_back, Attention, Conv3x3,
    Film, Grads, Linear, ParamGroup, Params,
};
use super::{Denoiser, DiffusionError};
use crate::latent::Latent;
use rand::Rng;

/// Static shape contract of a [`ConvDenoiser`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    /// Channels of the latent being denoised (network output channels).
    pub latent_channels: u32,
    /// Total channels of the concatenated image conditioning (0 if none).
    pub cond_channels: u32,
    /// Base width b; deeper scales use 2b and 4b.
    pub base: u32,
    /// Prompt embedding dimension the conditioning MLP expects.
    pub embed_dim: u32,
}

fn silu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v / (1.0 + (-v).exp())).collect()
}

fn silu_vec_back(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let s = 1.0 / (1.0 + (-v).exp());
            g * (s + v * s * (1.0 - s))
        })
        .collect()
}

/// conv3×3 → FiLM → SiLU.
#[derive(Debug, Clone, Copy)]
struct Block {
    conv: Conv3x3,
    film: Film,
}

/// Forward intermediates one [`Block`] needs for its backward pass.
#[derive(Debug, Clone)]
struct BlockTrace {
    conv_out: Latent,
    film_out: Latent,
    act_out: Latent,
}

impl Block {
    fn init<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        in_c: u32,
        out_c: u32,
        cond_dim: u32,
        rng: &mut R,
    ) -> Self {
        Block {
            conv: Conv3x3::init(params, &format!("{name}.conv"), in_c, out_c, false, rng),
            film: Film::init(params, &format!("{name}.film"), cond_dim, out_c, rng),
        }
    }

    fn forward(&self, params: &Params, x: &Latent, v: &[f64]) -> BlockTrace {
        let conv_out = self.conv.forward(params, x);
        let film_out = self.film.forward(params, &conv_out, v);
        let act_out = silu(&film_out);
        BlockTrace {
            conv_out,
            film_out,
            act_out,
        }
    }

    /// Returns dX; adds this block's FiLM conditioning gradient to `dv`.
    fn backward(
        &self,
        params: &Params,
        x: &Latent,
        trace: &BlockTrace,
        v: &[f64],
        d_out: &Latent,
        grads: &mut Grads,
        dv: &mut [f64],
    ) -> Latent {
        let d_film = silu_back(&trace.film_out, d_out);
        let (d_conv, dv_block) = self.film.backward(params, &trace.conv_out, v, &d_film, grads);
        for (a, b) in dv.iter_mut().zip(&dv_block) {
            *a += b;
        }
        self.conv.backward(params, x, &d_conv, grads)
    }
}

/// Two-scale conditional U-Net (see module docs).
#[derive(Debug, Clone, Copy)]
pub struct ConvDenoiser {
    cfg: DenoiserConfig,
    cond_dim: u32,
    mlp1: Linear,
    mlp2: Linear,
    stem: Block,
    enc0: Block,
    enc1: Block,
    mid1: Block,
    attn: Attention,
    mid2: Block,
    dec1: Block,
    dec1b: Block,
    dec0: Block,
    dec0b: Block,
    conv_out: Conv3x3,
}

/// Everything the backward pass replays. Produced by
/// [`ConvDenoiser::forward_cached`].
pub struct ForwardCache {
    v_in: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
    v: Vec<f64>,
    z_in: Latent,
    stem: BlockTrace,
    enc0: BlockTrace,
    x1: Latent,
    enc1: BlockTrace,
    x2: Latent,
    mid1: BlockTrace,
    attn_out: Latent,
    mid2: BlockTrace,
    u1: Latent,
    dec1: BlockTrace,
    r1: Latent,
    dec1b: BlockTrace,
    u0: Latent,
    dec0: BlockTrace,
    r0: Latent,
    dec0b: BlockTrace,
}

impl ConvDenoiser {
    /// Registers all parameters into `params` under the prefix `name`.
    pub fn init<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        cfg: DenoiserConfig,
        rng: &mut R,
    ) -> Self {
        let b = cfg.base;
        let cond_dim = 2 * b;
        let in_c = cfg.latent_channels + cfg.cond_channels;
        let mlp_in = TIME_EMBED_DIM as u32 + cfg.embed_dim;
        let mlp1 = Linear::init(
            params,
            &format!("{name}.mlp1"),
            ParamGroup::Other,
            mlp_in,
            cond_dim,
            false,
            rng,
        );
        let mlp2 = Linear::init(
            params,
            &format!("{name}.mlp2"),
            ParamGroup::Other,
            cond_dim,
            cond_dim,
            false,
            rng,
        );
        let stem = Block::init(params, &format!("{name}.stem"), in_c, b, cond_dim, rng);
        let enc0 = Block::init(params, &format!("{name}.enc0"), b, b, cond_dim, rng);
        let enc1 = Block::init(params, &format!("{name}.enc1"), b, 2 * b, cond_dim, rng);
        let mid1 = Block::init(params, &format!("{name}.mid1"), 2 * b, 4 * b, cond_dim, rng);
        let attn = Attention::init(params, &format!("{name}.attn"), 4 * b, rng);
        let mid2 = Block::init(params, &format!("{name}.mid2"), 4 * b, 4 * b, cond_dim, rng);
        let dec1 = Block::init(params, &format!("{name}.dec1"), 4 * b, 2 * b, cond_dim, rng);
        let dec1b = Block::init(params, &format!("{name}.dec1b"), 2 * b, 2 * b, cond_dim, rng);
        let dec0 = Block::init(params, &format!("{name}.dec0"), 2 * b, b, cond_dim, rng);
        let dec0b = Block::init(params, &format!("{name}.dec0b"), b, b, cond_dim, rng);
        let conv_out = Conv3x3::init(
            params,
            &format!("{name}.out"),
            b,
            cfg.latent_channels,
            true,
            rng,
        );
        ConvDenoiser {
            cfg,
            cond_dim,
            mlp1,
            mlp2,
            stem,
            enc0,
            enc1,
            mid1,
            attn,
            mid2,
            dec1,
            dec1b,
            dec0,
            dec0b,
            conv_out,
        }
    }

    pub fn config(&self) -> DenoiserConfig {
        self.cfg
    }

    fn assemble_input(
        &self,
        z_t: &Latent,
        conditions: &[Latent],
    ) -> Result<Latent, DiffusionError> {
        if z_t.channels() != self.cfg.latent_channels {
            return Err(DiffusionError::ShapeMismatch {
                what: "denoiser z_t channels",
            });
        }
        if z_t.height() % 4 != 0 || z_t.width() % 4 != 0 {
            return Err(DiffusionError::ShapeMismatch {
                what: "denoiser spatial size must divide by 4",
            });
        }
        let cond_total: u32 = conditions.iter().map(Latent::channels).sum();
        if cond_total != self.cfg.cond_channels {
            return Err(DiffusionError::ShapeMismatch {
                what: "denoiser conditioning channels",
            });
        }
        if conditions
            .iter()
            .any(|c| c.height() != z_t.height() || c.width() != z_t.width())
        {
            return Err(DiffusionError::ShapeMismatch {
                what: "denoiser conditioning spatial size",
            });
        }
        let mut parts = vec![z_t];
        parts.extend(conditions);
        Ok(Latent::concat_channels(&parts)?)
    }

    /// Forward pass keeping every intermediate for [`backward`](Self::backward).
    pub fn forward_cached(
        &self,
        params: &Params,
        z_t: &Latent,
        t: u32,
        conditions: &[Latent],
        prompt: &PromptEmbedding,
    ) -> Result<(Latent, ForwardCache), DiffusionError> {
        if prompt.dim() != self.cfg.embed_dim as usize {
            return Err(DiffusionError::ShapeMismatch {
                what: "prompt embedding dim",
            });
        }
        let z_in = self.assemble_input(z_t, conditions)?;

        let mut v_in = timestep_embedding(t).to_vec();
        v_in.extend_from_slice(prompt.values());
        let h_pre = self.mlp1.forward(params, &v_in);
        let h_act = silu_vec(&h_pre);
        let v = self.mlp2.forward(params, &h_act);

        let stem = self.stem.forward(params, &z_in, &v);
        let enc0 = self.enc0.forward(params, &stem.act_out, &v);
        let x1 = avgpool2(&enc0.act_out);
        let enc1 = self.enc1.forward(params, &x1, &v);
        let x2 = avgpool2(&enc1.act_out);
        let mid1 = self.mid1.forward(params, &x2, &v);
        let attn_out = self.attn.forward(params, &mid1.act_out);
        let mid2 = self.mid2.forward(params, &attn_out, &v);
        let u1 = upsample2(&mid2.act_out);
        let dec1 = self.dec1.forward(params, &u1, &v);
        let r1 = add(&dec1.act_out, &enc1.act_out);
        let dec1b = self.dec1b.forward(params, &r1, &v);
        let u0 = upsample2(&dec1b.act_out);
        let dec0 = self.dec0.forward(params, &u0, &v);
        let r0 = add(&dec0.act_out, &enc0.act_out);
        let dec0b = self.dec0b.forward(params, &r0, &v);
        let out = self.conv_out.forward(params, &dec0b.act_out);

        Ok((
            out,
            ForwardCache {
                v_in,
                h_pre,
                h_act,
                v,
                z_in,
                stem,
                enc0,
                x1,
                enc1,
                x2,
                mid1,
                attn_out,
                mid2,
                u1,
                dec1,
                r1,
                dec1b,
                u0,
                dec0,
                r0,
                dec0b,
            },
        ))
    }

    /// Plain forward (no cache).
    pub fn forward(
        &self,
        params: &Params,
        z_t: &Latent,
        t: u32,
        conditions: &[Latent],
        prompt: &PromptEmbedding,
    ) -> Result<Latent, DiffusionError> {
        Ok(self.forward_cached(params, z_t, t, conditions, prompt)?.0)
    }

    /// Accumulates all parameter gradients for `d_out` and returns the
    /// gradient with respect to the prompt embedding values.
    pub fn backward(
        &self,
        params: &Params,
        cache: &ForwardCache,
        d_out: &Latent,
        grads: &mut Grads,
    ) -> Vec<f64> {
        let mut dv = vec![0.0f64; self.cond_dim as usize];
        let c = cache;

        let d_dec0b = self.conv_out.backward(params, &c.dec0b.act_out, d_out, grads);
        let d_r0 = self
            .dec0b
            .backward(params, &c.r0, &c.dec0b, &c.v, &d_dec0b, grads, &mut dv);
        // r0 = dec0 + enc0: gradient flows to both.
        let d_u0 = self
            .dec0
            .backward(params, &c.u0, &c.dec0, &c.v, &d_r0, grads, &mut dv);
        let d_dec1b_out = upsample2_back(&d_u0);
        let d_r1 = self
            .dec1b
            .backward(params, &c.r1, &c.dec1b, &c.v, &d_dec1b_out, grads, &mut dv);
        let d_u1 = self
            .dec1
            .backward(params, &c.u1, &c.dec1, &c.v, &d_r1, grads, &mut dv);
        let d_mid2_out = upsample2_back(&d_u1);
        let d_attn_out = self
            .mid2
            .backward(params, &c.attn_out, &c.mid2, &c.v, &d_mid2_out, grads, &mut dv);
        let d_mid1_out = self.attn.backward(params, &c.mid1.act_out, &d_attn_out, grads);
        let d_x2 = self
            .mid1
            .backward(params, &c.x2, &c.mid1, &c.v, &d_mid1_out, grads, &mut dv);
        // enc1 output feeds both the pool chain and the r1 skip.
        let d_enc1_out = add(&avgpool2_back(&d_x2), &d_r1);
        let d_x1 = self
            .enc1
            .backward(params, &c.x1, &c.enc1, &c.v, &d_enc1_out, grads, &mut dv);
        // enc0 output feeds both the pool chain and the r0 skip.
        let d_enc0_out = add(&avgpool2_back(&d_x1), &d_r0);
        let d_stem_out = self
            .enc0
            .backward(params, &c.stem.act_out, &c.enc0, &c.v, &d_enc0_out, grads, &mut dv);
        let _d_z_in = self
            .stem
            .backward(params, &c.z_in, &c.stem, &c.v, &d_stem_out, grads, &mut dv);

        // Conditioning MLP.
        let d_h_act = self.mlp2.backward(params, &c.h_act, &dv, grads);
        let d_h_pre = silu_vec_back(&c.h_pre, &d_h_act);
        let d_v_in = self.mlp1.backward(params, &c.v_in, &d_h_pre, grads);
        d_v_in[TIME_EMBED_DIM..].to_vec()
    }
}

/// Binds a [`ConvDenoiser`] to its parameters and a concrete latent shape
/// so the generic sampler can drive it.
#[derive(Debug, Clone, Copy)]
pub struct Bound<'a> {
    pub net: &'a ConvDenoiser,
    pub params: &'a Params,
    pub shape: (u32, u32, u32),
}

impl Denoiser for Bound<'_> {
    fn latent_shape(&self) -> (u32, u32, u32) {
        self.shape
    }

    fn predict_eps(
        &self,
        z_t: &Latent,
        t: u32,
        conditions: &[Latent],
        prompt: &PromptEmbedding,
    ) -> Result<Latent, DiffusionError> {
        self.net.forward(self.params, z_t, t, conditions, prompt)
    }
}
