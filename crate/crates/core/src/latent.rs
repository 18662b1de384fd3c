//! Image ↔ latent codecs: exact, invertible stand-ins for a learned
//! autoencoder.
//!
//! Two codecs are provided. `identity` re-lays the canvas out as planar
//! channels without touching values. `s2d:p` (space-to-depth) additionally
//! folds every p×p pixel block into p² extra channels, so diffusion runs at
//! 1/p spatial resolution — the compression of a latent model without its
//! reconstruction error. Both are pure permutations: `decode(encode(x))`
//! reproduces `x` bit for bit.
//!
//! Latents are `f64` planar (channel-major) tensors; they double as the
//! activation type for the denoising network.

use crate::grid::{Frame, GridError};
use thiserror::Error;

/// Errors from codec parsing and shape mismatches.
#[derive(Debug, Error)]
pub enum LatentError {
    #[error("unknown codec id {got:?}; expected \"identity\" or \"s2d:<p>\"")]
    BadCodecId { got: String },
    #[error("codec factor must be at least 2, got {got}")]
    BadFactor { got: u32 },
    #[error("spatial size {size} is not divisible by the codec factor {factor}")]
    Indivisible { size: u32, factor: u32 },
    #[error("latent channel count {channels} is not divisible by {factor}")]
    ChannelsIndivisible { channels: u32, factor: u32 },
    #[error("latent data length {got} does not match {channels}x{height}x{width}")]
    DataLength {
        got: usize,
        channels: u32,
        height: u32,
        width: u32,
    },
    #[error("latent dimensions must be nonzero")]
    EmptyLatent,
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Planar (channel, row, column) tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    channels: u32,
    height: u32,
    width: u32,
    data: Vec<f64>,
}

impl Latent {
    pub fn new(channels: u32, height: u32, width: u32, data: Vec<f64>) -> Result<Self, LatentError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(LatentError::EmptyLatent);
        }
        let want = channels as usize * height as usize * width as usize;
        if data.len() != want {
            return Err(LatentError::DataLength {
                got: data.len(),
                channels,
                height,
                width,
            });
        }
        Ok(Latent {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: u32, height: u32, width: u32) -> Self {
        let len = channels as usize * height as usize * width as usize;
        Latent {
            channels,
            height,
            width,
            data: vec![0.0; len],
        }
    }

    pub fn channels(&self) -> u32 {
        self.channels
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    /// `(channels, height, width)`.
    pub fn shape(&self) -> (u32, u32, u32) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, c: u32, y: u32, x: u32) -> f64 {
        self.data[(c as usize * self.height as usize + y as usize) * self.width as usize
            + x as usize]
    }

    /// True when both latents have identical shape.
    pub fn same_shape(&self, other: &Latent) -> bool {
        self.shape() == other.shape()
    }

    /// Concatenates latents along the channel axis. All inputs must share
    /// spatial dimensions; the caller guarantees the list is nonempty.
    pub fn concat_channels(parts: &[&Latent]) -> Result<Latent, LatentError> {
        let (_, h, w) = parts[0].shape();
        let mut channels = 0u32;
        for p in parts {
            if p.height() != h || p.width() != w {
                return Err(LatentError::EmptyLatent);
            }
            channels += p.channels();
        }
        let mut data = Vec::with_capacity(channels as usize * h as usize * w as usize);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        Latent::new(channels, h, w, data)
    }
}

/// The codec choice; see the module docs. Selected by the config key
/// `latent_codec = identity | s2d:p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentCodec {
    Identity,
    SpaceToDepth { factor: u32 },
}

impl LatentCodec {
    /// Parses a codec id string.
    pub fn parse(id: &str) -> Result<Self, LatentError> {
        if id == "identity" {
            return Ok(LatentCodec::Identity);
        }
        if let Some(rest) = id.strip_prefix("s2d:") {
            let factor: u32 = rest.parse().map_err(|_| LatentError::BadCodecId {
                got: id.to_owned(),
            })?;
            if factor < 2 {
                return Err(LatentError::BadFactor { got: factor });
            }
            return Ok(LatentCodec::SpaceToDepth { factor });
        }
        Err(LatentError::BadCodecId { got: id.to_owned() })
    }

    /// Canonical id string (inverse of [`parse`](Self::parse)).
    pub fn id(&self) -> String {
        match self {
            LatentCodec::Identity => "identity".into(),
            LatentCodec::SpaceToDepth { factor } => format!("s2d:{factor}"),
        }
    }

    /// Spatial compression factor p (1 for identity).
    pub fn factor(&self) -> u32 {
        match self {
            LatentCodec::Identity => 1,
            LatentCodec::SpaceToDepth { factor } => *factor,
        }
    }

    /// Latent channel count for an image with `image_channels`.
    pub fn latent_channels(&self, image_channels: u32) -> u32 {
        image_channels * self.factor() * self.factor()
    }

    /// Re-lays an image out as a latent. Space-to-depth requires the
    /// spatial size to divide by the factor.
    pub fn encode(&self, image: &Frame) -> Result<Latent, LatentError> {
        let p = self.factor();
        let (w, h, c) = (image.width(), image.height(), image.channels());
        if w % p != 0 || h % p != 0 {
            return Err(LatentError::Indivisible {
                size: if w % p != 0 { w } else { h },
                factor: p,
            });
        }
        let (lw, lh, lc) = (w / p, h / p, c * p * p);
        let mut data = vec![0.0f64; (lc * lh * lw) as usize];
        for c_img in 0..c {
            for dy in 0..p {
                for dx in 0..p {
                    let oc = c_img * p * p + dy * p + dx;
                    for y in 0..lh {
                        for x in 0..lw {
                            let v = image.sample(x * p + dx, y * p + dy, c_img);
                            data[((oc * lh + y) * lw + x) as usize] = v as f64;
                        }
                    }
                }
            }
        }
        Latent::new(lc, lh, lw, data)
    }

    /// Exact inverse of [`encode`](Self::encode). Values that left the
    /// valid sample range (e.g. raw sampler output) are clamped into
    /// `[-1, 1]`; in-range values pass through bit-exact.
    pub fn decode(&self, latent: &Latent) -> Result<Frame, LatentError> {
        let p = self.factor();
        let (lc, lh, lw) = latent.shape();
        if lc % (p * p) != 0 {
            return Err(LatentError::ChannelsIndivisible {
                channels: lc,
                factor: p * p,
            });
        }
        let (c, h, w) = (lc / (p * p), lh * p, lw * p);
        let mut data = vec![0.0f32; (c * h * w) as usize];
        for c_img in 0..c {
            for dy in 0..p {
                for dx in 0..p {
                    let oc = c_img * p * p + dy * p + dx;
                    for y in 0..lh {
                        for x in 0..lw {
                            let v = latent.at(oc, y, x) as f32;
                            let idx = (((y * p + dy) * w + (x * p + dx)) * c + c_img) as usize;
                            data[idx] = v;
                        }
                    }
                }
            }
        }
        Ok(Frame::from_clamped(w, h, c, data)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(rng: &mut ChaCha8Rng, w: u32, h: u32, c: u32) -> Frame {
        let data: Vec<f32> = (0..(w * h * c) as usize)
            .map(|_| rng.random_range(-1.0f32..=1.0))
            .collect();
        Frame::new(w, h, c, data).unwrap()
    }

    #[test]
    fn codec_ids_round_trip() {
        for id in ["identity", "s2d:2", "s2d:4"] {
            assert_eq!(LatentCodec::parse(id).unwrap().id(), id);
        }
        assert!(matches!(
            LatentCodec::parse("vae"),
            Err(LatentError::BadCodecId { .. })
        ));
        assert!(matches!(
            LatentCodec::parse("s2d:x"),
            Err(LatentError::BadCodecId { .. })
        ));
        assert!(matches!(
            LatentCodec::parse("s2d:1"),
            Err(LatentError::BadFactor { got: 1 })
        ));
    }

    #[test]
    fn identity_is_a_pure_relayout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = random_frame(&mut rng, 5, 5, 3);
        let codec = LatentCodec::Identity;
        let latent = codec.encode(&frame).unwrap();
        assert_eq!(latent.shape(), (3, 5, 5));
        // Same values, planar order.
        assert_eq!(latent.at(2, 4, 1), frame.sample(1, 4, 2) as f64);
        assert_eq!(codec.decode(&latent).unwrap(), frame);
    }

    #[test]
    fn space_to_depth_matches_hand_blocks() {
        // 4x4 single-channel image -> 2x2 latent with 4 channels holding
        // the same 16 values, block-wise.
        let vals: Vec<f32> = (0..16).map(|v| v as f32 / 16.0).collect();
        let frame = Frame::new(4, 4, 1, vals.clone()).unwrap();
        let codec = LatentCodec::parse("s2d:2").unwrap();
        let latent = codec.encode(&frame).unwrap();
        assert_eq!(latent.shape(), (4, 2, 2));
        // Channel oc = dy*2+dx holds pixel (2x+dx, 2y+dy).
        assert_eq!(latent.at(0, 0, 0), frame.sample(0, 0, 0) as f64);
        assert_eq!(latent.at(1, 0, 0), frame.sample(1, 0, 0) as f64);
        assert_eq!(latent.at(2, 0, 0), frame.sample(0, 1, 0) as f64);
        assert_eq!(latent.at(3, 1, 1), frame.sample(3, 3, 0) as f64);
        // Value conservation: same multiset.
        let mut a: Vec<f64> = latent.data().to_vec();
        let mut b: Vec<f64> = vals.iter().map(|&v| v as f64).collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        assert_eq!(codec.decode(&latent).unwrap(), frame);
    }

    #[test]
    fn round_trips_are_bit_exact_for_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let c = rng.random_range(1..=4);
            let frame = random_frame(&mut rng, 8, 8, c);
            for codec in [LatentCodec::Identity, LatentCodec::SpaceToDepth { factor: 2 }] {
                let back = codec.decode(&codec.encode(&frame).unwrap()).unwrap();
                assert_eq!(back, frame);
            }
        }
    }

    #[test]
    fn indivisible_sizes_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frame = random_frame(&mut rng, 5, 5, 3);
        let codec = LatentCodec::SpaceToDepth { factor: 2 };
        assert!(matches!(
            codec.encode(&frame),
            Err(LatentError::Indivisible { size: 5, factor: 2 })
        ));
        let latent = Latent::zeros(3, 2, 2);
        assert!(matches!(
            codec.decode(&latent),
            Err(LatentError::ChannelsIndivisible { channels: 3, factor: 4 })
        ));
    }

    #[test]
    fn channel_concat_stacks_planes() {
        let a = Latent::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Latent::new(2, 2, 2, (0..8).map(f64::from).collect()).unwrap();
        let cat = Latent::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), (3, 2, 2));
        assert_eq!(cat.at(0, 0, 1), 2.0);
        assert_eq!(cat.at(1, 0, 0), 0.0);
        assert_eq!(cat.at(2, 1, 1), 7.0);
    }
}
