//! Neural-network building blocks with explicit backward passes.
//!
//! All parameters live in a [`Params`] registry; layers hold [`ParamId`]
//! handles plus their shape metadata. Forward passes read `&Params`;
//! backward passes take the same inputs the forward saw (the caller keeps
//! them), accumulate parameter gradients into a [`Grads`] buffer that
//! mirrors the registry, and return the input gradient. Keeping gradients
//! out of the parameter structs lets batch items run in parallel and be
//! reduced in a fixed order afterwards, so training is deterministic under
//! a fixed seed regardless of thread count.
//!
//! Every layer's backward pass is checked against central finite
//! differences in this module's tests.

use crate::latent::Latent;
use rand::Rng;
use rand_distr::StandardNormal;

/// Optimizer-visible parameter grouping. Freeze modes address these groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Convolution kernels and their biases.
    Conv,
    /// Attention projection matrices.
    Attention,
    /// Everything else: FiLM/linear conditioning, embeddings.
    Other,
}

impl ParamGroup {
    pub fn word(self) -> &'static str {
        match self {
            ParamGroup::Conv => "conv",
            ParamGroup::Attention => "attention",
            ParamGroup::Other => "other",
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        match word {
            "conv" => Some(ParamGroup::Conv),
            "attention" => Some(ParamGroup::Attention),
            "other" => Some(ParamGroup::Other),
            _ => None,
        }
    }
}

/// One named parameter tensor (flat storage, explicit shape).
#[derive(Debug, Clone)]
pub struct ParamTensor {
    name: String,
    group: ParamGroup,
    shape: Vec<u32>,
    data: Vec<f64>,
}

impl ParamTensor {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn shape(&self) -> &[u32] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Handle into a [`Params`] registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Registry of all learnable tensors of one model.
#[derive(Debug, Clone, Default)]
pub struct Params {
    tensors: Vec<ParamTensor>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    /// Registers a tensor; names must be unique (used as checkpoint keys).
    pub fn register(
        &mut self,
        name: &str,
        group: ParamGroup,
        shape: Vec<u32>,
        data: Vec<f64>,
    ) -> ParamId {
        assert!(
            self.tensors.iter().all(|t| t.name != name),
            "duplicate parameter name {name}"
        );
        let want: usize = shape.iter().map(|&d| d as usize).product();
        assert_eq!(data.len(), want, "data length mismatch for {name}");
        self.tensors.push(ParamTensor {
            name: name.to_owned(),
            group,
            shape,
            data,
        });
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn by_name(&self, name: &str) -> Option<(ParamId, &ParamTensor)> {
        self.tensors
            .iter()
            .position(|t| t.name == name)
            .map(|i| (ParamId(i), &self.tensors[i]))
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// A zeroed gradient buffer mirroring this registry.
    pub fn zero_grads(&self) -> Grads {
        Grads {
            slots: self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }
}

/// Gradient buffer parallel to a [`Params`] registry.
#[derive(Debug, Clone)]
pub struct Grads {
    slots: Vec<Vec<f64>>,
}

impl Grads {
    pub fn slot(&self, id: ParamId) -> &[f64] {
        &self.slots[id.0]
    }

    pub fn slot_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.slots[id.0]
    }

    /// Elementwise `self += other` (other must mirror the same registry).
    pub fn add_from(&mut self, other: &Grads) {
        assert_eq!(self.slots.len(), other.slots.len());
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for slot in &mut self.slots {
            for v in slot.iter_mut() {
                *v *= s;
            }
        }
    }

    /// Iterates slots in registry order (for the optimizer).
    pub fn slots(&self) -> &[Vec<f64>] {
        &self.slots
    }

    pub fn l2_norm(&self) -> f64 {
        self.slots
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// He-style normal init: std = sqrt(2 / fan_in).
pub fn he_normal<R: Rng + ?Sized>(n: usize, fan_in: usize, rng: &mut R) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn latent(c: u32, h: u32, w: u32, data: Vec<f64>) -> Latent {
    Latent::new(c, h, w, data).expect("layer-internal shape")
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// 3×3 convolution, stride 1, zero padding 1 (shape-preserving).
#[derive(Debug, Clone, Copy)]
pub struct Conv3x3 {
    w: ParamId,
    b: ParamId,
    in_c: u32,
    out_c: u32,
}

impl Conv3x3 {
    /// Registers weights `[out_c, in_c, 3, 3]` and biases `[out_c]`.
    /// `zero_init` starts the layer as the constant-zero map (used for the
    /// output projection so an untrained network predicts ε̂ = 0).
    pub fn init<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        in_c: u32,
        out_c: u32,
        zero_init: bool,
        rng: &mut R,
    ) -> Self {
        let n = (out_c * in_c * 9) as usize;
        let w_data = if zero_init {
            vec![0.0; n]
        } else {
            he_normal(n, (in_c * 9) as usize, rng)
        };
        let w = params.register(
            &format!("{name}.w"),
            ParamGroup::Conv,
            vec![out_c, in_c, 3, 3],
            w_data,
        );
        let b = params.register(
            &format!("{name}.b"),
            ParamGroup::Conv,
            vec![out_c],
            vec![0.0; out_c as usize],
        );
        Conv3x3 { w, b, in_c, out_c }
    }

    pub fn forward(&self, params: &Params, x: &Latent) -> Latent {
        assert_eq!(x.channels(), self.in_c, "conv input channels");
        let (h, w) = (x.height() as usize, x.width() as usize);
        let (ic, oc) = (self.in_c as usize, self.out_c as usize);
        let wt = params.get(self.w).data();
        let bias = params.get(self.b).data();
        let xd = x.data();
        let mut out = vec![0.0f64; oc * h * w];
        for o in 0..oc {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = bias[o];
                    for c in 0..ic {
                        for (di, ii) in kernel_span(i, h) {
                            let xrow = (c * h + ii) * w;
                            let wrow = ((o * ic + c) * 3 + di) * 3;
                            for (dj, jj) in kernel_span(j, w) {
                                acc += wt[wrow + dj] * xd[xrow + jj];
                            }
                        }
                    }
                    out[(o * h + i) * w + j] = acc;
                }
            }
        }
        latent(self.out_c, x.height(), x.width(), out)
    }

    /// Accumulates dW, db into `grads` and returns dX. `x` is the forward
    /// input.
    pub fn backward(&self, params: &Params, x: &Latent, dy: &Latent, grads: &mut Grads) -> Latent {
        let (h, w) = (x.height() as usize, x.width() as usize);
        let (ic, oc) = (self.in_c as usize, self.out_c as usize);
        let wt = params.get(self.w).data();
        let xd = x.data();
        let dyd = dy.data();
        let mut dx = vec![0.0f64; ic * h * w];
        {
            let dw = grads.slot_mut(self.w);
            for o in 0..oc {
                for i in 0..h {
                    for j in 0..w {
                        let g = dyd[(o * h + i) * w + j];
                        if g == 0.0 {
                            continue;
                        }
                        for c in 0..ic {
                            for (di, ii) in kernel_span(i, h) {
                                let xrow = (c * h + ii) * w;
                                let wrow = ((o * ic + c) * 3 + di) * 3;
                                for (dj, jj) in kernel_span(j, w) {
                                    dw[wrow + dj] += g * xd[xrow + jj];
                                    dx[xrow + jj] += g * wt[wrow + dj];
                                }
                            }
                        }
                    }
                }
            }
        }
        {
            let db = grads.slot_mut(self.b);
            for o in 0..oc {
                db[o] += dyd[o * h * w..(o + 1) * h * w].iter().sum::<f64>();
            }
        }
        latent(self.in_c, x.height(), x.width(), dx)
    }
}

/// Kernel offsets (index-in-kernel, input-coordinate) valid at position
/// `p` in an axis of length `n`, for a 3-tap kernel with padding 1.
fn kernel_span(p: usize, n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..3).filter_map(move |d| {
        let q = p as isize + d as isize - 1;
        (q >= 0 && (q as usize) < n).then_some((d, q as usize))
    })
}

// ---------------------------------------------------------------------------
// Resampling and activation (stateless)
// ---------------------------------------------------------------------------

/// 2×2 average pooling; spatial dims must be even.
pub fn avgpool2(x: &Latent) -> Latent {
    let (c, h, w) = x.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "avgpool2 needs even dims");
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let (hu, wu, ohu, owu) = (h as usize, w as usize, oh as usize, ow as usize);
    let mut out = vec![0.0f64; c as usize * ohu * owu];
    for cc in 0..c as usize {
        for i in 0..ohu {
            for j in 0..owu {
                let base = (cc * hu + 2 * i) * wu + 2 * j;
                out[(cc * ohu + i) * owu + j] =
                    0.25 * (xd[base] + xd[base + 1] + xd[base + wu] + xd[base + wu + 1]);
            }
        }
    }
    latent(c, oh, ow, out)
}

/// Backward of [`avgpool2`]: spreads each output gradient over its 2×2
/// source block.
pub fn avgpool2_back(dy: &Latent) -> Latent {
    let (c, oh, ow) = dy.shape();
    let (h, w) = (oh * 2, ow * 2);
    let dyd = dy.data();
    let (hu, wu, ohu, owu) = (h as usize, w as usize, oh as usize, ow as usize);
    let mut dx = vec![0.0f64; c as usize * hu * wu];
    for cc in 0..c as usize {
        for i in 0..ohu {
            for j in 0..owu {
                let g = 0.25 * dyd[(cc * ohu + i) * owu + j];
                let base = (cc * hu + 2 * i) * wu + 2 * j;
                dx[base] += g;
                dx[base + 1] += g;
                dx[base + wu] += g;
                dx[base + wu + 1] += g;
            }
        }
    }
    latent(c, h, w, dx)
}

/// Nearest-neighbor 2× upsampling.
pub fn upsample2(x: &Latent) -> Latent {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h * 2, w * 2);
    let xd = x.data();
    let (hu, wu, ohu, owu) = (h as usize, w as usize, oh as usize, ow as usize);
    let mut out = vec![0.0f64; c as usize * ohu * owu];
    for cc in 0..c as usize {
        for i in 0..ohu {
            for j in 0..owu {
                out[(cc * ohu + i) * owu + j] = xd[(cc * hu + i / 2) * wu + j / 2];
            }
        }
    }
    latent(c, oh, ow, out)
}

/// Backward of [`upsample2`]: sums each 2×2 replicated block.
pub fn upsample2_back(dy: &Latent) -> Latent {
    let (c, oh, ow) = dy.shape();
    assert!(oh % 2 == 0 && ow % 2 == 0);
    let (h, w) = (oh / 2, ow / 2);
    let dyd = dy.data();
    let (hu, wu, ohu, owu) = (h as usize, w as usize, oh as usize, ow as usize);
    let mut dx = vec![0.0f64; c as usize * hu * wu];
    for cc in 0..c as usize {
        for i in 0..ohu {
            for j in 0..owu {
                dx[(cc * hu + i / 2) * wu + j / 2] += dyd[(cc * ohu + i) * owu + j];
            }
        }
    }
    latent(c, h, w, dx)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SiLU activation `x·σ(x)`, elementwise.
pub fn silu(x: &Latent) -> Latent {
    let data = x.data().iter().map(|&v| v * sigmoid(v)).collect();
    latent(x.channels(), x.height(), x.width(), data)
}

/// Backward of [`silu`]; `x` is the forward input.
pub fn silu_back(x: &Latent, dy: &Latent) -> Latent {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * (s + v * s * (1.0 - s))
        })
        .collect();
    latent(x.channels(), x.height(), x.width(), data)
}

/// Elementwise sum of two same-shape latents.
pub fn add(a: &Latent, b: &Latent) -> Latent {
    assert!(a.same_shape(b), "add shape mismatch");
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    latent(a.channels(), a.height(), a.width(), data)
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Dense layer on plain vectors: `y = W·x + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
    in_dim: u32,
    out_dim: u32,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        group: ParamGroup,
        in_dim: u32,
        out_dim: u32,
        zero_init: bool,
        rng: &mut R,
    ) -> Self {
        let n = (in_dim * out_dim) as usize;
        let w_data = if zero_init {
            vec![0.0; n]
        } else {
            he_normal(n, in_dim as usize, rng)
        };
        let w = params.register(&format!("{name}.w"), group, vec![out_dim, in_dim], w_data);
        let b = params.register(
            &format!("{name}.b"),
            group,
            vec![out_dim],
            vec![0.0; out_dim as usize],
        );
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, params: &Params, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.in_dim as usize, "linear input dim");
        let wt = params.get(self.w).data();
        let bias = params.get(self.b).data();
        let n_in = self.in_dim as usize;
        (0..self.out_dim as usize)
            .map(|o| {
                bias[o]
                    + wt[o * n_in..(o + 1) * n_in]
                        .iter()
                        .zip(x)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn backward(
        &self,
        params: &Params,
        x: &[f64],
        dy: &[f64],
        grads: &mut Grads,
    ) -> Vec<f64> {
        let n_in = self.in_dim as usize;
        let wt = params.get(self.w).data();
        let mut dx = vec![0.0f64; n_in];
        {
            let dw = grads.slot_mut(self.w);
            for (o, &g) in dy.iter().enumerate() {
                for (i, &v) in x.iter().enumerate() {
                    dw[o * n_in + i] += g * v;
                }
                for (i, item) in dx.iter_mut().enumerate() {
                    *item += g * wt[o * n_in + i];
                }
            }
        }
        let db = grads.slot_mut(self.b);
        for (o, &g) in dy.iter().enumerate() {
            db[o] += g;
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// FiLM conditioning
// ---------------------------------------------------------------------------

/// Feature-wise affine modulation from a conditioning vector:
/// `y[c] = x[c]·(1 + s[c]) + t[c]` where `(s, t) = Linear(v)`.
/// The linear map is zero-initialized, so the layer starts as identity.
#[derive(Debug, Clone, Copy)]
pub struct Film {
    lin: Linear,
    channels: u32,
}

impl Film {
    pub fn init<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        cond_dim: u32,
        channels: u32,
        rng: &mut R,
    ) -> Self {
        let lin = Linear::init(
            params,
            &format!("{name}.lin"),
            ParamGroup::Other,
            cond_dim,
            2 * channels,
            true,
            rng,
        );
        Film { lin, channels }
    }

    pub fn forward(&self, params: &Params, x: &Latent, v: &[f64]) -> Latent {
        assert_eq!(x.channels(), self.channels, "film channels");
        let st = self.lin.forward(params, v);
        let (c, h, w) = x.shape();
        let plane = (h * w) as usize;
        let mut out = x.data().to_vec();
        for cc in 0..c as usize {
            let (scale, shift) = (1.0 + st[cc], st[c as usize + cc]);
            for val in &mut out[cc * plane..(cc + 1) * plane] {
                *val = *val * scale + shift;
            }
        }
        latent(c, h, w, out)
    }

    /// Returns `(dx, dv)`.
    pub fn backward(
        &self,
        params: &Params,
        x: &Latent,
        v: &[f64],
        dy: &Latent,
        grads: &mut Grads,
    ) -> (Latent, Vec<f64>) {
        let st = self.lin.forward(params, v);
        let (c, h, w) = x.shape();
        let plane = (h * w) as usize;
        let xd = x.data();
        let dyd = dy.data();
        let mut dx = vec![0.0f64; xd.len()];
        let mut dst = vec![0.0f64; 2 * c as usize];
        for cc in 0..c as usize {
            let scale = 1.0 + st[cc];
            let (mut ds, mut dt) = (0.0, 0.0);
            for k in cc * plane..(cc + 1) * plane {
                dx[k] = dyd[k] * scale;
                ds += dyd[k] * xd[k];
                dt += dyd[k];
            }
            dst[cc] = ds;
            dst[c as usize + cc] = dt;
        }
        let dv = self.lin.backward(params, v, &dst, grads);
        (latent(c, h, w, dx), dv)
    }
}

// ---------------------------------------------------------------------------
// Single-head self-attention over spatial positions
// ---------------------------------------------------------------------------

/// Single-head scaled dot-product self-attention across the H·W positions
/// of a feature map, with a residual connection:
/// `out = x + W_o·softmax(QᵀK/√C)·V` where `Q,K,V = W_{q,k,v}·x`.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    channels: u32,
}

impl Attention {
    pub fn init<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        channels: u32,
        rng: &mut R,
    ) -> Self {
        let c = channels as usize;
        let mut proj = |suffix: &str, rng: &mut R| {
            let std = (1.0 / c as f64).sqrt();
            let data: Vec<f64> = (0..c * c)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            params.register(
                &format!("{name}.{suffix}"),
                ParamGroup::Attention,
                vec![channels, channels],
                data,
            )
        };
        let wq = proj("wq", rng);
        let wk = proj("wk", rng);
        let wv = proj("wv", rng);
        let wo = proj("wo", rng);
        Attention {
            wq,
            wk,
            wv,
            wo,
            channels,
        }
    }

    /// `W·X` for `W: C×C`, `X: C×N` (both row-major).
    fn matmul(w: &[f64], x: &[f64], c: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0f64; c * n];
        for a in 0..c {
            for b in 0..c {
                let coeff = w[a * c + b];
                if coeff == 0.0 {
                    continue;
                }
                let src = &x[b * n..(b + 1) * n];
                let dst = &mut out[a * n..(a + 1) * n];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += coeff * s;
                }
            }
        }
        out
    }

    /// `Wᵀ·X`.
    fn matmul_t(w: &[f64], x: &[f64], c: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0f64; c * n];
        for a in 0..c {
            for b in 0..c {
                let coeff = w[a * c + b];
                if coeff == 0.0 {
                    continue;
                }
                let src = &x[a * n..(a + 1) * n];
                let dst = &mut out[b * n..(b + 1) * n];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += coeff * s;
                }
            }
        }
        out
    }

    /// Rows of `softmax(QᵀK/√C)`: `A[n][m]`, n the query position.
    fn attn_rows(q: &[f64], k: &[f64], c: usize, n: usize) -> Vec<f64> {
        let scale = 1.0 / (c as f64).sqrt();
        let mut a = vec![0.0f64; n * n];
        for p in 0..n {
            let row = &mut a[p * n..(p + 1) * n];
            for (m, slot) in row.iter_mut().enumerate() {
                let mut dot = 0.0;
                for cc in 0..c {
                    dot += q[cc * n + p] * k[cc * n + m];
                }
                *slot = dot * scale;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for slot in row.iter_mut() {
                *slot = (*slot - max).exp();
                sum += *slot;
            }
            for slot in row.iter_mut() {
                *slot /= sum;
            }
        }
        a
    }

    pub fn forward(&self, params: &Params, x: &Latent) -> Latent {
        let (cu, h, w) = x.shape();
        assert_eq!(cu, self.channels, "attention channels");
        let (c, n) = (cu as usize, (h * w) as usize);
        let xd = x.data();
        let q = Self::matmul(params.get(self.wq).data(), xd, c, n);
        let k = Self::matmul(params.get(self.wk).data(), xd, c, n);
        let v = Self::matmul(params.get(self.wv).data(), xd, c, n);
        let a = Self::attn_rows(&q, &k, c, n);
        // Y[c,p] = Σ_m A[p,m] V[c,m]
        let mut y = vec![0.0f64; c * n];
        for cc in 0..c {
            for p in 0..n {
                let mut acc = 0.0;
                for m in 0..n {
                    acc += a[p * n + m] * v[cc * n + m];
                }
                y[cc * n + p] = acc;
            }
        }
        let o = Self::matmul(params.get(self.wo).data(), &y, c, n);
        let data = xd.iter().zip(&o).map(|(xv, ov)| xv + ov).collect();
        latent(cu, h, w, data)
    }

    /// Recomputes the forward intermediates from `x`, accumulates the four
    /// projection gradients, and returns dX (including the residual path).
    pub fn backward(&self, params: &Params, x: &Latent, dy: &Latent, grads: &mut Grads) -> Latent {
        let (cu, h, w) = x.shape();
        let (c, n) = (cu as usize, (h * w) as usize);
        let xd = x.data();
        let wq = params.get(self.wq).data();
        let wk = params.get(self.wk).data();
        let wv = params.get(self.wv).data();
        let wo = params.get(self.wo).data();
        let q = Self::matmul(wq, xd, c, n);
        let k = Self::matmul(wk, xd, c, n);
        let v = Self::matmul(wv, xd, c, n);
        let a = Self::attn_rows(&q, &k, c, n);
        let mut y = vec![0.0f64; c * n];
        for cc in 0..c {
            for p in 0..n {
                let mut acc = 0.0;
                for m in 0..n {
                    acc += a[p * n + m] * v[cc * n + m];
                }
                y[cc * n + p] = acc;
            }
        }
        let dyd = dy.data();

        // d(out)/d(o) = 1: dWo += dY·Yᵀ, dY_attn = Woᵀ·dOut.
        {
            let dwo = grads.slot_mut(self.wo);
            for aa in 0..c {
                for bb in 0..c {
                    let mut acc = 0.0;
                    for p in 0..n {
                        acc += dyd[aa * n + p] * y[bb * n + p];
                    }
                    dwo[aa * c + bb] += acc;
                }
            }
        }
        let dyo = Self::matmul_t(wo, dyd, c, n);

        // dV[c,m] = Σ_p A[p,m]·dY[c,p]; dA[p,m] = Σ_c dY[c,p]·V[c,m].
        let mut dv = vec![0.0f64; c * n];
        let mut da = vec![0.0f64; n * n];
        for cc in 0..c {
            for p in 0..n {
                let g = dyo[cc * n + p];
                if g == 0.0 {
                    continue;
                }
                for m in 0..n {
                    dv[cc * n + m] += a[p * n + m] * g;
                    da[p * n + m] += g * v[cc * n + m];
                }
            }
        }

        // Softmax rows: dS[p,m] = A[p,m]·(dA[p,m] − Σ_k dA[p,k]·A[p,k]).
        let mut ds = vec![0.0f64; n * n];
        for p in 0..n {
            let row_a = &a[p * n..(p + 1) * n];
            let row_da = &da[p * n..(p + 1) * n];
            let dot: f64 = row_a.iter().zip(row_da).map(|(x, y)| x * y).sum();
            for m in 0..n {
                ds[p * n + m] = row_a[m] * (row_da[m] - dot);
            }
        }

        // S[p,m] = (1/√C)·Σ_c Q[c,p]K[c,m].
        let scale = 1.0 / (c as f64).sqrt();
        let mut dq = vec![0.0f64; c * n];
        let mut dk = vec![0.0f64; c * n];
        for p in 0..n {
            for m in 0..n {
                let g = ds[p * n + m] * scale;
                if g == 0.0 {
                    continue;
                }
                for cc in 0..c {
                    dq[cc * n + p] += g * k[cc * n + m];
                    dk[cc * n + m] += g * q[cc * n + p];
                }
            }
        }

        // Projection weight grads: dW = dZ·Xᵀ; input grads: Wᵀ·dZ.
        let mut dx: Vec<f64> = dyd.to_vec(); // residual path
        for (wid, dz, wmat) in [
            (self.wq, &dq, wq),
            (self.wk, &dk, wk),
            (self.wv, &dv, wv),
        ] {
            {
                let dw = grads.slot_mut(wid);
                for aa in 0..c {
                    for bb in 0..c {
                        let mut acc = 0.0;
                        for p in 0..n {
                            acc += dz[aa * n + p] * xd[bb * n + p];
                        }
                        dw[aa * c + bb] += acc;
                    }
                }
            }
            let back = Self::matmul_t(wmat, dz, c, n);
            for (d, s) in dx.iter_mut().zip(&back) {
                *d += s;
            }
        }
        latent(cu, h, w, dx)
    }
}
