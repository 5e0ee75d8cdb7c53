//! Region-token transformer predicting per-region noise under mixed noise levels.
//!
//! Each region is one token. A token's input embedding is the sum of a linear
//! map of its (noisy) region vector, a linear map of sinusoidal features of
//! its own noise level and a learned position vector. `L` pre-norm blocks of
//! multi-head self-attention and a SiLU MLP mix information across all tokens,
//! and a linear head maps each token back to region space.
//!
//! Gradients are computed by hand; see [`DenoiserModel::loss_and_grad`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::{matmul, matmul_a_bt, matmul_at_b, Scalar};
use crate::schedule::{NoiseSchedule, RegionSample};

/// Number of sinusoidal noise-level features per region.
pub const LEVEL_FEATURES: usize = 16;

const RMS_EPS: f64 = 1e-5;

/// How the head output becomes `eps_hat`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputParam {
    /// `eps_hat = head(h)`.
    Direct,
    /// `eps_hat = c_skip(t) x_t + c_out(t) head(h)` where `c_skip` is the
    /// optimal linear denoiser for data of standard deviation `data_std` and
    /// `c_out` is the residual standard deviation. Keeps `x0_hat` bounded as
    /// `alpha(t) -> 0`. The network also sees `x_t` rescaled to unit variance.
    Preconditioned,
}

impl OutputParam {
    pub fn as_str(&self) -> &'static str {
        match self {
            OutputParam::Direct => "direct",
            OutputParam::Preconditioned => "preconditioned",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(OutputParam::Direct),
            "preconditioned" => Ok(OutputParam::Preconditioned),
            other => Err(Error::Config(format!("unknown output parametrization '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_regions: usize,
    pub dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// MLP width as a multiple of `hidden`.
    pub ff_mult: usize,
    pub output: OutputParam,
    /// Per-coordinate standard deviation of clean data, used by
    /// [`OutputParam::Preconditioned`].
    pub data_std: f64,
}

impl ModelConfig {
    pub fn new(n_regions: usize, dim: usize, hidden: usize, layers: usize) -> Self {
        Self {
            n_regions,
            dim,
            hidden,
            layers,
            heads: 4.min(hidden).max(1),
            ff_mult: 2,
            output: OutputParam::Preconditioned,
            data_std: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_regions == 0 || self.dim == 0 || self.hidden == 0 || self.heads == 0 || self.ff_mult == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(self.data_std > 0.0) {
            return Err(Error::Config("data_std must be positive".into()));
        }
        Ok(())
    }

    fn ff(&self) -> usize {
        self.ff_mult * self.hidden
    }

    /// Named parameter tensors in declaration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h, f, n) = (self.dim, self.hidden, self.ff(), self.n_regions);
        let mut v = vec![
            ("region_embed.weight".to_string(), vec![d, h]),
            ("region_embed.bias".to_string(), vec![h]),
            ("level_embed.weight".to_string(), vec![LEVEL_FEATURES, h]),
            ("level_embed.bias".to_string(), vec![h]),
            ("position_embed".to_string(), vec![n, h]),
        ];
        for l in 0..self.layers {
            for (name, shape) in [
                ("attn_norm.gain", vec![h]),
                ("attn.query", vec![h, h]),
                ("attn.key", vec![h, h]),
                ("attn.value", vec![h, h]),
                ("attn.out.weight", vec![h, h]),
                ("attn.out.bias", vec![h]),
                ("mlp_norm.gain", vec![h]),
                ("mlp.up.weight", vec![h, f]),
                ("mlp.up.bias", vec![f]),
                ("mlp.down.weight", vec![f, h]),
                ("mlp.down.bias", vec![h]),
            ] {
                v.push((format!("layer{l}.{name}"), shape));
            }
        }
        v.push(("final_norm.gain".to_string(), vec![h]));
        v.push(("head.weight".to_string(), vec![h, d]));
        v.push(("head.bias".to_string(), vec![d]));
        v
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Debug)]
struct LayerOffsets {
    g1: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
    g2: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct Offsets {
    w_in: usize,
    b_in: usize,
    w_lvl: usize,
    b_lvl: usize,
    pos: usize,
    layers: Vec<LayerOffsets>,
    g_final: usize,
    w_out: usize,
    b_out: usize,
}

impl Offsets {
    fn new(cfg: &ModelConfig) -> Self {
        let shapes = cfg.param_shapes();
        let mut starts = Vec::with_capacity(shapes.len());
        let mut at = 0;
        for (_, s) in &shapes {
            starts.push(at);
            at += s.iter().product::<usize>();
        }
        let mut it = starts.into_iter();
        let mut next = || it.next().expect("offset table matches shapes");
        let w_in = next();
        let b_in = next();
        let w_lvl = next();
        let b_lvl = next();
        let pos = next();
        let layers = (0..cfg.layers)
            .map(|_| LayerOffsets {
                g1: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                bo: next(),
                g2: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
            .collect();
        Offsets {
            w_in,
            b_in,
            w_lvl,
            b_lvl,
            pos,
            layers,
            g_final: next(),
            w_out: next(),
            b_out: next(),
        }
    }
}

/// Activations retained for the backward pass.
#[derive(Default)]
struct LayerCache<T> {
    h_in: Vec<T>,
    r1: Vec<T>,
    n1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    p: Vec<T>,
    a: Vec<T>,
    h_mid: Vec<T>,
    r2: Vec<T>,
    n2: Vec<T>,
    z: Vec<T>,
    u: Vec<T>,
}

#[derive(Default)]
struct Cache<T> {
    x_in: Vec<T>,
    feats: Vec<T>,
    layers: Vec<LayerCache<T>>,
    h_last: Vec<T>,
    r_f: Vec<T>,
    n_f: Vec<T>,
    c_out: Vec<T>,
    out: Vec<T>,
}

#[derive(Default)]
struct BackwardBufs<T> {
    d_out: Vec<T>,
    d_head: Vec<T>,
    dn: Vec<T>,
    dh: Vec<T>,
    dh_mid: Vec<T>,
    dh_in: Vec<T>,
    du: Vec<T>,
    dp: Vec<T>,
    ds: Vec<T>,
    da: Vec<T>,
    dq: Vec<T>,
    dk: Vec<T>,
    dv: Vec<T>,
}

/// Scratch buffers reused across forward and backward passes; keeping one
/// alive avoids reallocating every activation on each call.
#[derive(Default)]
pub struct Workspace<T> {
    cache: Cache<T>,
    bufs: BackwardBufs<T>,
}

impl<T: Scalar> Workspace<T> {
    pub fn new() -> Self {
        Self {
            cache: Cache::default(),
            bufs: BackwardBufs::default(),
        }
    }
}

fn zeroed<T: Scalar>(v: &mut Vec<T>, len: usize) {
    v.clear();
    v.resize(len, T::zero());
}

fn copy_into<T: Scalar>(v: &mut Vec<T>, src: &[T]) {
    v.clear();
    v.extend_from_slice(src);
}

/// The trainable noise predictor `eps_theta`.
#[derive(Clone, Debug)]
pub struct DenoiserModel<T> {
    config: ModelConfig,
    schedule: NoiseSchedule,
    params: Vec<T>,
    offs: Offsets,
}

/// Sinusoidal features of a noise level, `sin/cos((pi/2) 2^k t)` for `k < 8`.
pub fn level_features<T: Scalar>(t: T, out: &mut [T]) {
    let half = LEVEL_FEATURES / 2;
    for k in 0..half {
        let w = T::lit(std::f64::consts::FRAC_PI_2 * (1u64 << k) as f64);
        let (s, c) = (w * t).sin_cos();
        out[2 * k] = s;
        out[2 * k + 1] = c;
    }
}

fn rms_norm<T: Scalar>(x: &[T], gain: &[T], h: usize, r: &mut [T], y: &mut [T]) {
    let eps = T::lit(RMS_EPS);
    let inv_h = T::one() / T::lit(h as f64);
    for (row, (xr, yr)) in x.chunks_exact(h).zip(y.chunks_exact_mut(h)).enumerate() {
        let ms = xr.iter().map(|v| *v * *v).sum::<T>() * inv_h;
        let rr = (ms + eps).sqrt();
        r[row] = rr;
        for ((yv, xv), g) in yr.iter_mut().zip(xr).zip(gain) {
            *yv = *xv / rr * *g;
        }
    }
}

/// Accumulates into `dx` and `dgain`.
fn rms_norm_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    r: &[T],
    gain: &[T],
    h: usize,
    dx: &mut [T],
    dgain: &mut [T],
) {
    let inv_h = T::one() / T::lit(h as f64);
    for (row, ((dyr, xr), dxr)) in dy
        .chunks_exact(h)
        .zip(x.chunks_exact(h))
        .zip(dx.chunks_exact_mut(h))
        .enumerate()
    {
        let rr = r[row];
        let mut dot = T::zero();
        for j in 0..h {
            dgain[j] += dyr[j] * xr[j] / rr;
            dot += gain[j] * dyr[j] * xr[j];
        }
        let coef = dot * inv_h / (rr * rr * rr);
        for j in 0..h {
            dxr[j] += gain[j] * dyr[j] / rr - xr[j] * coef;
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

fn add_bias<T: Scalar>(y: &mut [T], b: &[T]) {
    for row in y.chunks_exact_mut(b.len()) {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += *bb;
        }
    }
}

fn col_sum_into<T: Scalar>(x: &[T], width: usize, out: &mut [T]) {
    for row in x.chunks_exact(width) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += *v;
        }
    }
}

impl<T: Scalar> DenoiserModel<T> {
    /// Randomly initialised model.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let cfg = model.config.clone();
        let (d, h, f) = (cfg.dim, cfg.hidden, cfg.ff());
        let depth_scale = 1.0 / (2.0 * cfg.layers.max(1) as f64).sqrt();
        let mut fill = |params: &mut [T], off: usize, len: usize, std: f64| {
            for p in &mut params[off..off + len] {
                let z: f64 = StandardNormal.sample(rng);
                *p = T::lit(z * std);
            }
        };
        let o = model.offs.clone();
        let p = &mut model.params;
        fill(p, o.w_in, d * h, 1.0 / (d as f64).sqrt());
        fill(p, o.w_lvl, LEVEL_FEATURES * h, 1.0 / (LEVEL_FEATURES as f64).sqrt());
        fill(p, o.pos, cfg.n_regions * h, 0.5);
        let hs = 1.0 / (h as f64).sqrt();
        for l in &o.layers {
            fill(p, l.wq, h * h, hs);
            fill(p, l.wk, h * h, hs);
            fill(p, l.wv, h * h, hs);
            fill(p, l.wo, h * h, hs * depth_scale);
            fill(p, l.w1, h * f, hs);
            fill(p, l.w2, f * h, depth_scale / (f as f64).sqrt());
        }
        fill(p, o.w_out, h * d, 0.1 * hs);
        Ok(model)
    }

    /// All weights zero except the normalisation gains (which are one).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let offs = Offsets::new(&config);
        let mut params = vec![T::zero(); config.param_count()];
        let h = config.hidden;
        for l in &offs.layers {
            params[l.g1..l.g1 + h].fill(T::one());
            params[l.g2..l.g2 + h].fill(T::one());
        }
        params[offs.g_final..offs.g_final + h].fill(T::one());
        Ok(Self {
            config,
            schedule: NoiseSchedule::linear(),
            params,
            offs,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        if params.len() != m.params.len() {
            return Err(Error::Dimension(format!(
                "{} parameters supplied, model needs {}",
                params.len(),
                m.params.len()
            )));
        }
        m.params = params;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Slice of one named tensor (see [`ModelConfig::param_shapes`]).
    pub fn param_range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let mut at = 0;
        for (n, s) in self.config.param_shapes() {
            let len: usize = s.iter().product();
            if n == name {
                return Some(at..at + len);
            }
            at += len;
        }
        None
    }

    pub fn cast<U: Scalar>(&self) -> DenoiserModel<U> {
        DenoiserModel {
            config: self.config.clone(),
            schedule: self.schedule,
            params: self.params.iter().map(|p| U::lit(p.as_f64())).collect(),
            offs: self.offs.clone(),
        }
    }

    /// `(c_skip, c_out)` for the configured output parametrisation.
    pub fn output_coefficients(&self, t: T) -> (T, T) {
        match self.config.output {
            OutputParam::Direct => (T::zero(), T::one()),
            OutputParam::Preconditioned => {
                let a = self.schedule.alpha(t);
                let s = self.schedule.sigma(t);
                let sd = T::lit(self.config.data_std);
                let var = a * a * sd * sd + s * s;
                (s / var, a * sd / var.sqrt())
            }
        }
    }

    /// `1 / sqrt(alpha^2 data_std^2 + sigma^2)` per region when preconditioned.
    fn scale_input(&self, x: &[T], levels: &[T], out: &mut Vec<T>) {
        let d = self.config.dim;
        out.clear();
        if self.config.output == OutputParam::Direct {
            out.extend_from_slice(x);
            return;
        }
        let sd = T::lit(self.config.data_std);
        for (row, t) in x.chunks_exact(d).zip(levels) {
            let (a, s) = (self.schedule.alpha(*t), self.schedule.sigma(*t));
            let c_in = T::one() / (a * a * sd * sd + s * s).sqrt();
            out.extend(row.iter().map(|v| *v * c_in));
        }
    }

    /// `eps_hat` for one sample (`denoise_predict`).
    pub fn predict(&self, sample: &RegionSample<T>) -> Result<Vec<T>> {
        if sample.n_regions() != self.config.n_regions || sample.dim() != self.config.dim {
            return Err(Error::Dimension(format!(
                "model expects {} regions of dim {}, sample has {} of dim {}",
                self.config.n_regions,
                self.config.dim,
                sample.n_regions(),
                sample.dim()
            )));
        }
        if !sample.is_finite() {
            return Err(Error::Numeric("denoiser input"));
        }
        let out = self.predict_batch(sample.as_slice(), sample.levels().as_slice(), 1);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("denoiser output"));
        }
        Ok(out)
    }

    /// `eps_hat` for a batch of `batch` samples laid out back to back:
    /// `x` is `batch * N * d`, `levels` is `batch * N`.
    pub fn predict_batch(&self, x: &[T], levels: &[T], batch: usize) -> Vec<T> {
        let mut ws = Workspace::new();
        self.predict_batch_in(&mut ws, x, levels, batch).to_vec()
    }

    /// [`predict_batch`](Self::predict_batch) reusing the buffers in `ws`.
    pub fn predict_batch_in<'w>(&self, ws: &'w mut Workspace<T>, x: &[T], levels: &[T], batch: usize) -> &'w [T] {
        self.check_batch(x, levels, batch);
        self.forward(x, levels, batch, &mut ws.cache);
        &ws.cache.out
    }

    /// Mean squared error between `eps_hat` and `eps` over all coordinates,
    /// each region's terms scaled by its entry of `weights` when given.
    pub fn loss(&self, x: &[T], levels: &[T], eps: &[T], weights: Option<&[T]>, batch: usize) -> T {
        let out = self.predict_batch(x, levels, batch);
        weighted_mse(&out, eps, weights, self.config.dim)
    }

    /// Loss plus its gradient with respect to every parameter, accumulated
    /// into `grad` (which must be `param_count` long).
    pub fn loss_and_grad(
        &self,
        x: &[T],
        levels: &[T],
        eps: &[T],
        weights: Option<&[T]>,
        batch: usize,
        grad: &mut [T],
    ) -> T {
        self.loss_and_grad_in(&mut Workspace::new(), x, levels, eps, weights, batch, grad)
    }

    /// [`loss_and_grad`](Self::loss_and_grad) reusing the buffers in `ws`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_and_grad_in(
        &self,
        ws: &mut Workspace<T>,
        x: &[T],
        levels: &[T],
        eps: &[T],
        weights: Option<&[T]>,
        batch: usize,
        grad: &mut [T],
    ) -> T {
        self.check_batch(x, levels, batch);
        assert_eq!(grad.len(), self.params.len(), "gradient buffer size");
        assert_eq!(eps.len(), x.len(), "target size");
        if let Some(w) = weights {
            assert_eq!(w.len(), levels.len(), "one weight per region");
        }
        self.forward(x, levels, batch, &mut ws.cache);
        let d = self.config.dim;
        let out = &ws.cache.out;
        let scale = T::lit(2.0) / T::lit(out.len() as f64);
        let d_out = &mut ws.bufs.d_out;
        d_out.clear();
        d_out.extend(out.iter().zip(eps).map(|(o, e)| (*o - *e) * scale));
        if let Some(w) = weights {
            for (row, wr) in d_out.chunks_exact_mut(d).zip(w) {
                row.iter_mut().for_each(|v| *v *= *wr);
            }
        }
        self.backward(batch, &ws.cache, &mut ws.bufs, grad);
        weighted_mse(&ws.cache.out, eps, weights, d)
    }

    fn check_batch(&self, x: &[T], levels: &[T], batch: usize) {
        let rows = batch * self.config.n_regions;
        assert_eq!(levels.len(), rows, "noise level count");
        assert_eq!(x.len(), rows * self.config.dim, "region value count");
    }

    fn forward(&self, x: &[T], levels: &[T], batch: usize, c: &mut Cache<T>) {
        let cfg = &self.config;
        let (n, d, h, f) = (cfg.n_regions, cfg.dim, cfg.hidden, cfg.ff());
        let (nh, hd) = (cfg.heads, cfg.hidden / cfg.heads);
        let rows = batch * n;
        let p = &self.params;
        let o = &self.offs;
        let scale = T::one() / T::lit(hd as f64).sqrt();

        zeroed(&mut c.feats, rows * LEVEL_FEATURES);
        for (t, fr) in levels.iter().zip(c.feats.chunks_exact_mut(LEVEL_FEATURES)) {
            level_features(*t, fr);
        }

        self.scale_input(x, levels, &mut c.x_in);
        // c.h_last holds the running hidden state
        let hs = &mut c.h_last;
        zeroed(hs, rows * h);
        matmul(rows, d, h, &c.x_in, &p[o.w_in..o.w_in + d * h], hs, false);
        matmul(
            rows,
            LEVEL_FEATURES,
            h,
            &c.feats,
            &p[o.w_lvl..o.w_lvl + LEVEL_FEATURES * h],
            hs,
            true,
        );
        for (row, hr) in hs.chunks_exact_mut(h).enumerate() {
            let pos = &p[o.pos + (row % n) * h..o.pos + (row % n + 1) * h];
            for j in 0..h {
                hr[j] += p[o.b_in + j] + p[o.b_lvl + j] + pos[j];
            }
        }

        c.layers.resize_with(o.layers.len(), LayerCache::default);
        for (l, lc) in o.layers.iter().zip(c.layers.iter_mut()) {
            copy_into(&mut lc.h_in, hs);
            zeroed(&mut lc.r1, rows);
            zeroed(&mut lc.n1, rows * h);
            zeroed(&mut lc.q, rows * h);
            zeroed(&mut lc.k, rows * h);
            zeroed(&mut lc.v, rows * h);
            zeroed(&mut lc.p, batch * nh * n * n);
            zeroed(&mut lc.a, rows * h);
            zeroed(&mut lc.r2, rows);
            zeroed(&mut lc.n2, rows * h);
            zeroed(&mut lc.z, rows * f);
            zeroed(&mut lc.u, rows * f);

            rms_norm(hs, &p[l.g1..l.g1 + h], h, &mut lc.r1, &mut lc.n1);
            matmul(rows, h, h, &lc.n1, &p[l.wq..l.wq + h * h], &mut lc.q, false);
            matmul(rows, h, h, &lc.n1, &p[l.wk..l.wk + h * h], &mut lc.k, false);
            matmul(rows, h, h, &lc.n1, &p[l.wv..l.wv + h * h], &mut lc.v, false);
            for b in 0..batch {
                for g in 0..nh {
                    let off = b * n * h + g * hd;
                    let pb = &mut lc.p[(b * nh + g) * n * n..(b * nh + g + 1) * n * n];
                    T::gemm(n, hd, n, scale, &lc.q[off..], h, 1, &lc.k[off..], 1, h, T::zero(), pb, n, 1);
                    for row in pb.chunks_exact_mut(n) {
                        let m = row.iter().fold(T::neg_infinity(), |a, v| a.max(*v));
                        let mut s = T::zero();
                        for v in row.iter_mut() {
                            *v = (*v - m).exp();
                            s += *v;
                        }
                        for v in row.iter_mut() {
                            *v /= s;
                        }
                    }
                    T::gemm(n, n, hd, T::one(), pb, n, 1, &lc.v[off..], h, 1, T::zero(), &mut lc.a[off..], h, 1);
                }
            }
            copy_into(&mut lc.h_mid, hs);
            matmul(rows, h, h, &lc.a, &p[l.wo..l.wo + h * h], &mut lc.h_mid, true);
            add_bias(&mut lc.h_mid, &p[l.bo..l.bo + h]);

            rms_norm(&lc.h_mid, &p[l.g2..l.g2 + h], h, &mut lc.r2, &mut lc.n2);
            matmul(rows, h, f, &lc.n2, &p[l.w1..l.w1 + h * f], &mut lc.z, false);
            add_bias(&mut lc.z, &p[l.b1..l.b1 + f]);
            for (u, z) in lc.u.iter_mut().zip(&lc.z) {
                *u = *z * sigmoid(*z);
            }
            hs.copy_from_slice(&lc.h_mid);
            matmul(rows, f, h, &lc.u, &p[l.w2..l.w2 + f * h], hs, true);
            add_bias(hs, &p[l.b2..l.b2 + h]);
        }

        zeroed(&mut c.r_f, rows);
        zeroed(&mut c.n_f, rows * h);
        rms_norm(hs, &p[o.g_final..o.g_final + h], h, &mut c.r_f, &mut c.n_f);
        let out = &mut c.out;
        zeroed(out, rows * d);
        matmul(rows, h, d, &c.n_f, &p[o.w_out..o.w_out + h * d], out, false);
        add_bias(out, &p[o.b_out..o.b_out + d]);

        c.c_out.clear();
        if self.config.output == OutputParam::Preconditioned {
            for (row, (orow, xrow)) in out.chunks_exact_mut(d).zip(x.chunks_exact(d)).enumerate() {
                let (cs, co) = self.output_coefficients(levels[row]);
                for (ov, xv) in orow.iter_mut().zip(xrow) {
                    *ov = cs * *xv + co * *ov;
                }
                c.c_out.push(co);
            }
        }
    }

    fn backward(&self, batch: usize, cache: &Cache<T>, bufs: &mut BackwardBufs<T>, grad: &mut [T]) {
        let cfg = &self.config;
        let (n, d, h, f) = (cfg.n_regions, cfg.dim, cfg.hidden, cfg.ff());
        let (nh, hd) = (cfg.heads, cfg.hidden / cfg.heads);
        let rows = batch * n;
        let p = &self.params;
        let o = &self.offs;
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let BackwardBufs {
            d_out,
            d_head,
            dn,
            dh,
            dh_mid,
            dh_in,
            du,
            dp,
            ds,
            da,
            dq,
            dk,
            dv,
        } = bufs;

        copy_into(d_head, d_out);
        if self.config.output == OutputParam::Preconditioned {
            for (row, dr) in d_head.chunks_exact_mut(d).enumerate() {
                let co = cache.c_out[row];
                for v in dr.iter_mut() {
                    *v *= co;
                }
            }
        }

        matmul_at_b(h, rows, d, &cache.n_f, d_head, &mut grad[o.w_out..o.w_out + h * d]);
        col_sum_into(d_head, d, &mut grad[o.b_out..o.b_out + d]);
        zeroed(dn, rows * h);
        matmul_a_bt(rows, d, h, d_head, &p[o.w_out..o.w_out + h * d], dn, false);
        zeroed(dh, rows * h);
        {
            let (gp, gg) = (&p[o.g_final..o.g_final + h], o.g_final);
            rms_norm_backward(dn, &cache.h_last, &cache.r_f, gp, h, dh, &mut grad[gg..gg + h]);
        }

        zeroed(du, rows * f);
        zeroed(dp, n * n);
        zeroed(ds, n * n);
        zeroed(da, rows * h);
        zeroed(dq, rows * h);
        zeroed(dk, rows * h);
        zeroed(dv, rows * h);
        for (l, lc) in o.layers.iter().zip(&cache.layers).rev() {
            // MLP block: h_out = h_mid + silu(n2 W1 + b1) W2 + b2
            copy_into(dh_mid, dh);
            matmul_at_b(f, rows, h, &lc.u, dh, &mut grad[l.w2..l.w2 + f * h]);
            col_sum_into(dh, h, &mut grad[l.b2..l.b2 + h]);
            matmul_a_bt(rows, h, f, dh, &p[l.w2..l.w2 + f * h], du, false);
            for (g, z) in du.iter_mut().zip(&lc.z) {
                let s = sigmoid(*z);
                *g *= s * (T::one() + *z * (T::one() - s));
            }
            matmul_at_b(h, rows, f, &lc.n2, du, &mut grad[l.w1..l.w1 + h * f]);
            col_sum_into(du, f, &mut grad[l.b1..l.b1 + f]);
            matmul_a_bt(rows, f, h, du, &p[l.w1..l.w1 + h * f], dn, false);
            rms_norm_backward(dn, &lc.h_mid, &lc.r2, &p[l.g2..l.g2 + h], h, dh_mid, &mut grad[l.g2..l.g2 + h]);

            // Attention block: h_mid = h_in + attn(n1) Wo + bo
            copy_into(dh_in, dh_mid);
            matmul_at_b(h, rows, h, &lc.a, dh_mid, &mut grad[l.wo..l.wo + h * h]);
            col_sum_into(dh_mid, h, &mut grad[l.bo..l.bo + h]);
            matmul_a_bt(rows, h, h, dh_mid, &p[l.wo..l.wo + h * h], da, false);

            for b in 0..batch {
                for g in 0..nh {
                    let off = b * n * h + g * hd;
                    let pb = &lc.p[(b * nh + g) * n * n..(b * nh + g + 1) * n * n];
                    T::gemm(n, hd, n, T::one(), &da[off..], h, 1, &lc.v[off..], 1, h, T::zero(), dp, n, 1);
                    T::gemm(n, n, hd, T::one(), pb, 1, n, &da[off..], h, 1, T::zero(), &mut dv[off..], h, 1);
                    for ((dsr, dpr), pr) in ds.chunks_exact_mut(n).zip(dp.chunks_exact(n)).zip(pb.chunks_exact(n)) {
                        let dot = dpr.iter().zip(pr).map(|(a, b)| *a * *b).sum::<T>();
                        for j in 0..n {
                            dsr[j] = pr[j] * (dpr[j] - dot);
                        }
                    }
                    T::gemm(n, n, hd, scale, ds, n, 1, &lc.k[off..], h, 1, T::zero(), &mut dq[off..], h, 1);
                    T::gemm(n, n, hd, scale, ds, 1, n, &lc.q[off..], h, 1, T::zero(), &mut dk[off..], h, 1);
                }
            }
            matmul_at_b(h, rows, h, &lc.n1, dq, &mut grad[l.wq..l.wq + h * h]);
            matmul_at_b(h, rows, h, &lc.n1, dk, &mut grad[l.wk..l.wk + h * h]);
            matmul_at_b(h, rows, h, &lc.n1, dv, &mut grad[l.wv..l.wv + h * h]);
            matmul_a_bt(rows, h, h, dq, &p[l.wq..l.wq + h * h], dn, false);
            matmul_a_bt(rows, h, h, dk, &p[l.wk..l.wk + h * h], dn, true);
            matmul_a_bt(rows, h, h, dv, &p[l.wv..l.wv + h * h], dn, true);
            rms_norm_backward(dn, &lc.h_in, &lc.r1, &p[l.g1..l.g1 + h], h, dh_in, &mut grad[l.g1..l.g1 + h]);
            std::mem::swap(dh, dh_in);
        }

        matmul_at_b(d, rows, h, &cache.x_in, dh, &mut grad[o.w_in..o.w_in + d * h]);
        col_sum_into(dh, h, &mut grad[o.b_in..o.b_in + h]);
        matmul_at_b(
            LEVEL_FEATURES,
            rows,
            h,
            &cache.feats,
            dh,
            &mut grad[o.w_lvl..o.w_lvl + LEVEL_FEATURES * h],
        );
        col_sum_into(dh, h, &mut grad[o.b_lvl..o.b_lvl + h]);
        for (row, dr) in dh.chunks_exact(h).enumerate() {
            let at = o.pos + (row % n) * h;
            for (g, v) in grad[at..at + h].iter_mut().zip(dr.iter()) {
                *g += *v;
            }
        }
    }
}

pub(crate) fn mse<T: Scalar>(a: &[T], b: &[T]) -> T {
    if a.is_empty() {
        return T::zero();
    }
    let s: T = a.iter().zip(b).map(|(x, y)| (*x - *y) * (*x - *y)).sum();
    s / T::lit(a.len() as f64)
}

fn weighted_mse<T: Scalar>(a: &[T], b: &[T], weights: Option<&[T]>, d: usize) -> T {
    let Some(w) = weights else {
        return mse(a, b);
    };
    if a.is_empty() {
        return T::zero();
    }
    let s: T = a
        .chunks_exact(d)
        .zip(b.chunks_exact(d))
        .zip(w)
        .map(|((ar, br), wr)| *wr * ar.iter().zip(br).map(|(x, y)| (*x - *y) * (*x - *y)).sum::<T>())
        .sum();
    s / T::lit(a.len() as f64)
}
