//! Evaluation metrics: Fréchet distance over Gaussian moments, FVD and
//! Block-FVD over per-video features, Inception Score over a pluggable
//! classifier, and a prompt-similarity proxy — all deterministic, with
//! hand-rolled feature extractors standing in for pretrained networks.
//! Swapping in a real embedder means implementing [`FeatureExtractor`];
//! the metric code never changes.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{self, CorpusError, Shape, ShapeColor, Video};
use crate::grid::Frame;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("feature dimensions differ: {a} vs {b}")]
    DimensionMismatch { a: usize, b: usize },
    #[error("need at least 2 samples to estimate moments, got {got}")]
    InsufficientSamples { got: usize },
    #[error("covariance matrix is not symmetric")]
    NotSymmetric,
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
    #[error("matrix eigenvalue {value} is more negative than the clip threshold")]
    IndefiniteMatrix { value: f64 },
    #[error("metric needs at least {need} videos per set, got {got}")]
    SetTooSmall { need: usize, got: usize },
    #[error("video {index} has {got} frames, the set started with {want}")]
    UnevenFrameCounts { index: usize, want: usize, got: usize },
    #[error("block length {block_len} exceeds the video length {video_len}")]
    BlockTooLong { block_len: u64, video_len: u64 },
    #[error("classifier output for sample {index} is not a probability simplex")]
    NotASimplex { index: usize },
    #[error("no samples to score")]
    EmptySet,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Fixed-dimension real feature vector; the dimension is constant per
/// extractor and documented on it.
pub type FeatureVector = Vec<f64>;

/// Length of [`frame_signature`]: 8 histogram bins for each of 3
/// channels, 6 foreground-moment descriptors, 16 projection components.
pub const SIGNATURE_DIM: usize = 24 + 6 + 16;

/// Length of [`SignatureExtractor`] video features: per-dimension mean,
/// standard deviation, and mean absolute lag-1 difference of the frame
/// signature sequence, concatenated.
pub const VIDEO_FEATURE_DIM: usize = 3 * SIGNATURE_DIM;

/// Seed of the fixed random projection inside [`frame_signature`].
const PROJECTION_SEED: u64 = 0x7369_676e;

/// L-infinity distance from the per-channel median beyond which a pixel
/// counts as foreground. Corpus palettes separate foreground from every
/// background by at least 1.2 per frame, so the margin is wide.
const FOREGROUND_DELTA: f32 = 0.25;

/// Edge length of the downsampled thumbnail feeding the projection.
const THUMB_SIDE: usize = 8;

/// One-pass statistics of the foreground mask (pixels far from the
/// per-channel median, which for corpus scenes is exactly the shape).
#[derive(Debug, Clone, Copy)]
pub struct Foreground {
    pub count: u64,
    pub sum_x: f64,
    pub sum_y: f64,
    pub sum_xx: f64,
    pub sum_yy: f64,
    pub sum_xy: f64,
    pub min_x: u32,
    pub max_x: u32,
    pub min_y: u32,
    pub max_y: u32,
    pub color_sum: [f64; 3],
}

impl Foreground {
    /// Mean foreground pixel position `(x, y)`.
    pub fn centroid(&self) -> (f64, f64) {
        let n = self.count as f64;
        (self.sum_x / n, self.sum_y / n)
    }
}

fn channel_median(frame: &Frame, channel: u32) -> f32 {
    let c = frame.channels() as usize;
    let mut vals: Vec<f32> = frame
        .data()
        .iter()
        .skip(channel as usize)
        .step_by(c)
        .copied()
        .collect();
    vals.sort_by(f32::total_cmp);
    vals[vals.len() / 2]
}

/// Foreground statistics of a frame, or `None` for a featureless frame.
/// A pixel is foreground when any channel sits more than 0.25 from that
/// channel's median.
pub fn foreground(frame: &Frame) -> Option<Foreground> {
    let (w, h, c) = (frame.width(), frame.height(), frame.channels());
    let medians: Vec<f32> = (0..c).map(|ch| channel_median(frame, ch)).collect();
    let mut fg = Foreground {
        count: 0,
        sum_x: 0.0,
        sum_y: 0.0,
        sum_xx: 0.0,
        sum_yy: 0.0,
        sum_xy: 0.0,
        min_x: u32::MAX,
        max_x: 0,
        min_y: u32::MAX,
        max_y: 0,
        color_sum: [0.0; 3],
    };
    let data = frame.data();
    for y in 0..h {
        for x in 0..w {
            let base = ((y * w + x) * c) as usize;
            let is_fg = (0..c as usize)
                .any(|ch| (data[base + ch] - medians[ch]).abs() > FOREGROUND_DELTA);
            if !is_fg {
                continue;
            }
            fg.count += 1;
            let (xf, yf) = (x as f64, y as f64);
            fg.sum_x += xf;
            fg.sum_y += yf;
            fg.sum_xx += xf * xf;
            fg.sum_yy += yf * yf;
            fg.sum_xy += xf * yf;
            fg.min_x = fg.min_x.min(x);
            fg.max_x = fg.max_x.max(x);
            fg.min_y = fg.min_y.min(y);
            fg.max_y = fg.max_y.max(y);
            for ch in 0..(c as usize).min(3) {
                fg.color_sum[ch] += data[base + ch] as f64;
            }
        }
    }
    (fg.count > 0).then_some(fg)
}

/// Deterministic frame embedding, [`SIGNATURE_DIM`] long: an 8-bin
/// histogram per channel over `[-1, 1]`, foreground-mask moments (area
/// fraction, centroid, central second moments, all normalized by the
/// frame size), and a fixed-seed Gaussian random projection of an 8x8
/// thumbnail. Channels beyond the third are ignored; missing ones read
/// as zero, so the dimension never varies.
pub fn frame_signature(frame: &Frame) -> FeatureVector {
    let (w, h, c) = (frame.width(), frame.height(), frame.channels());
    let data = frame.data();
    let pixels = (w * h) as f64;
    let mut out = Vec::with_capacity(SIGNATURE_DIM);

    for ch in 0..3u32 {
        let mut bins = [0.0f64; 8];
        if ch < c {
            for px in 0..(w * h) {
                let v = data[(px * c + ch) as usize];
                let bin = (((v + 1.0) * 0.5 * 8.0) as i32).clamp(0, 7);
                bins[bin as usize] += 1.0;
            }
            for b in &mut bins {
                *b /= pixels;
            }
        }
        out.extend_from_slice(&bins);
    }

    match foreground(frame) {
        Some(fg) => {
            let n = fg.count as f64;
            let (mx, my) = (fg.sum_x / n, fg.sum_y / n);
            let var_x = (fg.sum_xx / n - mx * mx).max(0.0);
            let var_y = (fg.sum_yy / n - my * my).max(0.0);
            let cov_xy = fg.sum_xy / n - mx * my;
            out.push(n / pixels);
            out.push(mx / w as f64);
            out.push(my / h as f64);
            out.push(var_x.sqrt() / w as f64);
            out.push(var_y.sqrt() / h as f64);
            out.push(cov_xy / (w as f64 * h as f64));
        }
        None => out.extend_from_slice(&[0.0; 6]),
    }

    // Nearest-pixel 8x8 thumbnail, then a frozen Gaussian projection.
    let mut thumb = [0.0f64; THUMB_SIDE * THUMB_SIDE * 3];
    for gy in 0..THUMB_SIDE {
        let py = (((gy as f64 + 0.5) * h as f64 / THUMB_SIDE as f64) as u32).min(h - 1);
        for gx in 0..THUMB_SIDE {
            let px = (((gx as f64 + 0.5) * w as f64 / THUMB_SIDE as f64) as u32).min(w - 1);
            for ch in 0..3u32 {
                if ch < c {
                    thumb[(gy * THUMB_SIDE + gx) * 3 + ch as usize] =
                        data[((py * w + px) * c + ch) as usize] as f64;
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
    let scale = 1.0 / (thumb.len() as f64).sqrt();
    for _ in 0..16 {
        let mut acc = 0.0;
        for &t in &thumb {
            let g: f64 = StandardNormal.sample(&mut rng);
            acc += g * t;
        }
        out.push(acc * scale);
    }
    out
}

/// Cosine similarity over equal-length slices; if either vector is all
/// zero the score is 0 by convention.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Mean cosine similarity between each frame's signature and the
/// expected signature of the prompt's scene (the mean signature of that
/// scene rendered for the same number of frames). The scene is rendered
/// at the video's width.
pub fn clipsim_proxy(video: &Video, prompt: &str) -> Result<f64, MetricsError> {
    let scene = corpus::parse_prompt(prompt)?.into_scene(video.width())?;
    let n = video.frames().len();
    let mut expected = vec![0.0f64; SIGNATURE_DIM];
    for t in 0..n {
        for (e, v) in expected
            .iter_mut()
            .zip(frame_signature(&corpus::render(&scene, t as u64)))
        {
            *e += v;
        }
    }
    for e in &mut expected {
        *e /= n as f64;
    }
    let score: f64 = video
        .frames()
        .iter()
        .map(|f| cosine(&frame_signature(f), &expected))
        .sum();
    Ok(score / n as f64)
}

/// Sample mean and covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianMoments {
    pub fn new(mean: Vec<f64>, cov_rows: Vec<Vec<f64>>) -> Result<Self, MetricsError> {
        let d = mean.len();
        if cov_rows.len() != d || cov_rows.iter().any(|r| r.len() != d) {
            return Err(MetricsError::DimensionMismatch {
                a: d,
                b: cov_rows.len(),
            });
        }
        let flat: Vec<f64> = cov_rows.into_iter().flatten().collect();
        let out = GaussianMoments {
            mean: DVector::from_vec(mean),
            cov: DMatrix::from_row_slice(d, d, &flat),
        };
        out.check()?;
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Finite entries, symmetric within 1e-9.
    fn check(&self) -> Result<(), MetricsError> {
        if self.mean.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite { what: "mean" });
        }
        if self.cov.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite { what: "covariance" });
        }
        let d = self.dim();
        for i in 0..d {
            for j in (i + 1)..d {
                if (self.cov[(i, j)] - self.cov[(j, i)]).abs() > 1e-9 {
                    return Err(MetricsError::NotSymmetric);
                }
            }
        }
        Ok(())
    }
}

/// Sample mean and unbiased covariance, symmetry enforced exactly.
pub fn estimate_moments(features: &[FeatureVector]) -> Result<GaussianMoments, MetricsError> {
    let n = features.len();
    if n < 2 {
        return Err(MetricsError::InsufficientSamples { got: n });
    }
    let d = features[0].len();
    for f in features {
        if f.len() != d {
            return Err(MetricsError::DimensionMismatch { a: d, b: f.len() });
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite {
                what: "feature vector",
            });
        }
    }
    let mut mean = DVector::zeros(d);
    for f in features {
        mean += DVector::from_column_slice(f);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let x = DVector::from_column_slice(f) - &mean;
        cov += &x * x.transpose();
    }
    cov /= (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianMoments { mean, cov })
}

/// Regularization knobs for [`frechet_distance_with`].
#[derive(Debug, Clone, Copy)]
pub struct FrechetConfig {
    /// Added to both covariance diagonals before any decomposition.
    pub epsilon: f64,
    /// Eigenvalues in `[-eigen_clip, 0)` are clipped to 0; anything more
    /// negative is a numerical error.
    pub eigen_clip: f64,
}

impl Default for FrechetConfig {
    fn default() -> Self {
        FrechetConfig {
            epsilon: 1e-6,
            eigen_clip: 1e-8,
        }
    }
}

fn sqrt_psd(m: &DMatrix<f64>, clip: f64) -> Result<DMatrix<f64>, MetricsError> {
    let eig = m.clone().symmetric_eigen();
    let mut vals = eig.eigenvalues;
    for v in vals.iter_mut() {
        if *v < -clip {
            return Err(MetricsError::IndefiniteMatrix { value: *v });
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// Squared Fréchet distance between two Gaussians:
/// `||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2)`,
/// the quantity FID/FVD report. Default regularization.
pub fn frechet_distance(a: &GaussianMoments, b: &GaussianMoments) -> Result<f64, MetricsError> {
    frechet_distance_with(a, b, &FrechetConfig::default())
}

pub fn frechet_distance_with(
    a: &GaussianMoments,
    b: &GaussianMoments,
    cfg: &FrechetConfig,
) -> Result<f64, MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::DimensionMismatch {
            a: a.dim(),
            b: b.dim(),
        });
    }
    a.check()?;
    b.check()?;
    let d = a.dim();
    let eye = DMatrix::<f64>::identity(d, d);
    let ca = &a.cov + &eye * cfg.epsilon;
    let cb = &b.cov + &eye * cfg.epsilon;
    let a_half = sqrt_psd(&ca, cfg.eigen_clip)?;
    let product = &a_half * &cb * &a_half;
    let product = (&product + product.transpose()) * 0.5;
    let eig = product.symmetric_eigen();
    let mut trace_sqrt = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < -cfg.eigen_clip {
            return Err(MetricsError::IndefiniteMatrix { value: v });
        }
        trace_sqrt += v.max(0.0).sqrt();
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    Ok((mean_term + ca.trace() + cb.trace() - 2.0 * trace_sqrt).max(0.0))
}

/// Turns a video into one fixed-dimension feature vector. `Sync` so sets
/// can be featurized in parallel.
pub trait FeatureExtractor: Sync {
    /// Stable identifier recorded alongside scores.
    fn id(&self) -> &'static str;
    fn dim(&self) -> usize;
    fn video_features(&self, video: &Video) -> FeatureVector;
}

/// Default extractor: the frame-signature sequence summarized per
/// dimension by mean, population standard deviation, and mean absolute
/// lag-1 difference (zero for single-frame videos).
#[derive(Debug, Clone, Copy, Default)]
pub struct SignatureExtractor;

impl FeatureExtractor for SignatureExtractor {
    fn id(&self) -> &'static str {
        "signature-v1"
    }

    fn dim(&self) -> usize {
        VIDEO_FEATURE_DIM
    }

    fn video_features(&self, video: &Video) -> FeatureVector {
        let sigs: Vec<FeatureVector> = video.frames().iter().map(frame_signature).collect();
        let n = sigs.len() as f64;
        let mut out = Vec::with_capacity(VIDEO_FEATURE_DIM);
        for k in 0..SIGNATURE_DIM {
            out.push(sigs.iter().map(|s| s[k]).sum::<f64>() / n);
        }
        for k in 0..SIGNATURE_DIM {
            let mean = out[k];
            let var = sigs.iter().map(|s| (s[k] - mean).powi(2)).sum::<f64>() / n;
            out.push(var.max(0.0).sqrt());
        }
        for k in 0..SIGNATURE_DIM {
            let diff = if sigs.len() < 2 {
                0.0
            } else {
                sigs.windows(2).map(|w| (w[1][k] - w[0][k]).abs()).sum::<f64>()
                    / (sigs.len() - 1) as f64
            };
            out.push(diff);
        }
        out
    }
}

fn set_features(
    set: &[Video],
    extractor: &dyn FeatureExtractor,
) -> Result<Vec<FeatureVector>, MetricsError> {
    if set.len() < 2 {
        return Err(MetricsError::SetTooSmall {
            need: 2,
            got: set.len(),
        });
    }
    let want = set[0].frames().len();
    for (index, v) in set.iter().enumerate() {
        if v.frames().len() != want {
            return Err(MetricsError::UnevenFrameCounts {
                index,
                want,
                got: v.frames().len(),
            });
        }
    }
    Ok(set.par_iter().map(|v| extractor.video_features(v)).collect())
}

/// Fréchet distance between the feature distributions of two video sets.
/// Videos within each set must share a frame count.
pub fn fvd(
    a: &[Video],
    b: &[Video],
    extractor: &dyn FeatureExtractor,
) -> Result<f64, MetricsError> {
    let ma = estimate_moments(&set_features(a, extractor)?)?;
    let mb = estimate_moments(&set_features(b, extractor)?)?;
    frechet_distance(&ma, &mb)
}

/// Splits every video into consecutive `block_len`-frame clips (any
/// trailing remainder is dropped), computes FVD per clip position, and
/// averages. Positions past the shorter set's clip count are dropped.
pub fn block_fvd(
    a: &[Video],
    b: &[Video],
    block_len: u64,
    extractor: &dyn FeatureExtractor,
) -> Result<f64, MetricsError> {
    let blocks = |set: &[Video]| -> Result<u64, MetricsError> {
        let len = set
            .first()
            .map(|v| v.frames().len() as u64)
            .ok_or(MetricsError::SetTooSmall { need: 2, got: 0 })?;
        if block_len == 0 || block_len > len {
            return Err(MetricsError::BlockTooLong {
                block_len,
                video_len: len,
            });
        }
        Ok(len / block_len)
    };
    let positions = blocks(a)?.min(blocks(b)?);
    let clip = |set: &[Video], p: u64| -> Result<Vec<Video>, MetricsError> {
        set.iter()
            .map(|v| {
                let lo = (p * block_len) as usize;
                let frames = v.frames()[lo..lo + block_len as usize].to_vec();
                Ok(Video::new(frames, v.prompt().to_owned())?)
            })
            .collect()
    };
    let mut total = 0.0;
    for p in 0..positions {
        total += fvd(&clip(a, p)?, &clip(b, p)?, extractor)?;
    }
    Ok(total / positions as f64)
}

/// Maps a video to a probability distribution over `classes()` labels.
pub trait Classifier: Sync {
    fn id(&self) -> &'static str;
    fn classes(&self) -> usize;
    fn classify(&self, video: &Video) -> Vec<f64>;
}

/// `exp(E_x KL(p(y|x) || p(y)))` with `p(y)` the sample marginal. Every
/// classifier output must be a probability simplex (within 1e-6).
pub fn inception_score(
    videos: &[Video],
    classifier: &dyn Classifier,
) -> Result<f64, MetricsError> {
    if videos.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let c = classifier.classes();
    let mut rows = Vec::with_capacity(videos.len());
    for (index, v) in videos.iter().enumerate() {
        let p = classifier.classify(v);
        let sum: f64 = p.iter().sum();
        if p.len() != c || p.iter().any(|&x| !x.is_finite() || x < 0.0) || (sum - 1.0).abs() > 1e-6
        {
            return Err(MetricsError::NotASimplex { index });
        }
        rows.push(p);
    }
    let n = rows.len() as f64;
    let mut marginal = vec![0.0f64; c];
    for p in &rows {
        for (m, &x) in marginal.iter_mut().zip(p) {
            *m += x / n;
        }
    }
    let mut kl_sum = 0.0;
    for p in &rows {
        for (j, &x) in p.iter().enumerate() {
            if x > 0.0 {
                kl_sum += x * (x.ln() - marginal[j].ln());
            }
        }
    }
    Ok((kl_sum / n).exp())
}

/// Analytic shape-and-color classifier over the corpus vocabulary:
/// 3 shapes x 8 colors = 24 classes. Each frame votes with its
/// foreground mask — bounding-box fill ratio and vertical centroid
/// asymmetry pick the shape, nearest palette entry picks the color —
/// and the video's answer is a one-hot of the majority vote. Videos
/// with no foreground anywhere get the uniform distribution.
#[derive(Debug, Clone, Copy, Default)]
pub struct GrammarClassifier;

impl GrammarClassifier {
    pub const CLASSES: usize = Shape::ALL.len() * ShapeColor::ALL.len();

    /// Class index for a (shape, color) pair, row-major over shapes.
    pub fn class_of(shape: Shape, color: ShapeColor) -> usize {
        let s = Shape::ALL.iter().position(|&x| x == shape).expect("in ALL");
        let c = ShapeColor::ALL
            .iter()
            .position(|&x| x == color)
            .expect("in ALL");
        s * ShapeColor::ALL.len() + c
    }

    fn frame_class(frame: &Frame) -> Option<usize> {
        let fg = foreground(frame)?;
        let n = fg.count as f64;
        let bw = (fg.max_x - fg.min_x + 1) as f64;
        let bh = (fg.max_y - fg.min_y + 1) as f64;
        let fill = n / (bw * bh);
        let asym = (fg.sum_y / n - (fg.min_y + fg.max_y) as f64 / 2.0) / bh;
        // Rendered shapes sit at fill 1.0 (square), ~0.67 (circle), ~0.50
        // with bottom-heavy mass (triangle); thresholds leave wide margins.
        let shape = if asym > 0.1 {
            Shape::Triangle
        } else if fill >= 0.85 {
            Shape::Square
        } else {
            Shape::Circle
        };
        let mean = [
            fg.color_sum[0] / n,
            fg.color_sum[1] / n,
            fg.color_sum[2] / n,
        ];
        let color = ShapeColor::ALL
            .iter()
            .copied()
            .min_by(|&a, &b| {
                let dist = |col: ShapeColor| -> f64 {
                    col.rgb()
                        .iter()
                        .zip(&mean)
                        .map(|(&p, &m)| (p as f64 - m).powi(2))
                        .sum()
                };
                dist(a).total_cmp(&dist(b))
            })
            .expect("palette is non-empty");
        Some(Self::class_of(shape, color))
    }
}

impl Classifier for GrammarClassifier {
    fn id(&self) -> &'static str {
        "grammar-v1"
    }

    fn classes(&self) -> usize {
        Self::CLASSES
    }

    fn classify(&self, video: &Video) -> Vec<f64> {
        let mut votes = vec![0u64; Self::CLASSES];
        for frame in video.frames() {
            if let Some(class) = Self::frame_class(frame) {
                votes[class] += 1;
            }
        }
        let mut out = vec![0.0; Self::CLASSES];
        match votes.iter().max() {
            Some(&best) if best > 0 => {
                let winner = votes.iter().position(|&v| v == best).expect("max exists");
                out[winner] = 1.0;
            }
            _ => out.fill(1.0 / Self::CLASSES as f64),
        }
        out
    }
}
