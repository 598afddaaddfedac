//! Denoiser interface and the default windowed per-token network.
//!
//! A batch of `B` trajectories with `T` tokens and `C` channels is a
//! `C × (B·T)` matrix; sample `b` occupies columns `b·T .. (b+1)·T`.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Reader, Writer};
use crate::nn::{silu, silu_grad, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    /// States only.
    S,
    /// States with actions; token `t` is `[s_t, a_t]`, the last action row is padding.
    SA,
    /// Actions only, states follow by rollout from `s_0`.
    A,
}

pub const MODALITY_NAMES: &[&str] = &["S", "SA", "A"];

impl Modality {
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "S" | "s" => Ok(Modality::S),
            "SA" | "sa" => Ok(Modality::SA),
            "A" | "a" => Ok(Modality::A),
            other => Err(Error::unknown("modality", other, MODALITY_NAMES)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::S => "S",
            Modality::SA => "SA",
            Modality::A => "A",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Modality::S => 0,
            Modality::SA => 1,
            Modality::A => 2,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Modality::S),
            1 => Ok(Modality::SA),
            2 => Ok(Modality::A),
            c => Err(Error::Format(format!("unknown modality code {c}"))),
        }
    }

    pub fn has_actions(self) -> bool {
        !matches!(self, Modality::S)
    }
}

/// Shape of the denoised tensor and of its conditioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub modality: Modality,
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    /// Normalised `s_0` is part of the conditioning vector.
    pub condition_on_s0: bool,
    /// Extra user-supplied conditioning channels.
    pub context_dim: usize,
}

impl Layout {
    pub fn tokens(&self) -> usize {
        match self.modality {
            Modality::A => self.horizon,
            _ => self.horizon + 1,
        }
    }

    pub fn channels(&self) -> usize {
        match self.modality {
            Modality::S => self.n_states,
            Modality::SA => self.n_states + self.n_actions,
            Modality::A => self.n_actions,
        }
    }

    /// Length of the per-sample conditioning vector.
    pub fn cond_dim(&self) -> usize {
        self.context_dim + if self.condition_on_s0 { self.n_states } else { 0 }
    }
}

pub trait Denoiser: Send + Sync {
    fn layout(&self) -> &Layout;

    /// `D(x; σ)` for a batch; `sigma[b]` and `cond.column(b)` belong to sample `b`.
    fn denoise(&self, x: &DMatrix<f64>, sigma: &[f64], cond: &DMatrix<f64>) -> DMatrix<f64>;
}

/// One sampler step, `(σ_{i+1}/σ_i) x + (1 − σ_{i+1}/σ_i) D(x; σ_i)`.
pub fn denoise_step(
    denoiser: &dyn Denoiser,
    x: &DMatrix<f64>,
    sigma: f64,
    sigma_next: f64,
    cond: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidInput(format!("denoising needs σ_i > 0, got {sigma}")));
    }
    if !(sigma_next >= 0.0 && sigma_next < sigma) {
        return Err(Error::InvalidInput(format!(
            "denoising needs 0 <= σ_(i+1) < σ_i, got {sigma_next} and {sigma}"
        )));
    }
    let batch = x.ncols() / denoiser.layout().tokens();
    let d = denoiser.denoise(x, &vec![sigma; batch], cond);
    Ok(blend(x, &d, sigma, sigma_next))
}

pub(crate) fn blend(x: &DMatrix<f64>, d: &DMatrix<f64>, sigma: f64, sigma_next: f64) -> DMatrix<f64> {
    if sigma_next == 0.0 {
        return d.clone();
    }
    let r = sigma_next / sigma;
    x.zip_map(d, |xi, di| r * xi + (1.0 - r) * di)
}

const SIGMA_FEATURES: usize = 16;
const POSITION_FEATURES: usize = 8;

fn sigma_embedding(sigma: f64) -> [f64; SIGMA_FEATURES] {
    let c = 0.25 * sigma.max(1e-12).ln();
    let mut out = [0.0; SIGMA_FEATURES];
    for j in 0..SIGMA_FEATURES / 2 {
        let w = 1.5f64.powi(j as i32);
        out[2 * j] = (w * c).sin();
        out[2 * j + 1] = (w * c).cos();
    }
    out
}

fn position_embedding(t: usize, tokens: usize) -> [f64; POSITION_FEATURES] {
    let u = if tokens > 1 { t as f64 / (tokens - 1) as f64 } else { 0.0 };
    let mut out = [0.0; POSITION_FEATURES];
    for j in 0..POSITION_FEATURES / 2 {
        let w = std::f64::consts::PI * (1 << j) as f64;
        out[2 * j] = (w * u).sin();
        out[2 * j + 1] = (w * u).cos();
    }
    out
}

/// Shared per-token network over a window of neighbouring tokens, with two
/// trajectory-wide mean-pooled features:
///
/// ```text
/// h1 = silu(L1 [window · c_in(σ), emb(σ), emb(t), cond])
/// h2 = silu(L2 [h1, mean_t h1])
/// h3 = silu(L3 [h2, mean_t h2])
/// D  = L4 h3
/// ```
///
/// with `c_in(σ) = 1/sqrt(σ² + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowMlp {
    layout: Layout,
    pub radius: usize,
    pub width: usize,
    pub layers: [Linear; 4],
}

pub(crate) struct WindowCache {
    features: DMatrix<f64>,
    z1: DMatrix<f64>,
    a2: DMatrix<f64>,
    z2: DMatrix<f64>,
    a3: DMatrix<f64>,
    z3: DMatrix<f64>,
    h3: DMatrix<f64>,
}

/// Per-sample token mean, repeated over the sample's tokens.
fn pooled(h: &DMatrix<f64>, tokens: usize) -> DMatrix<f64> {
    let batch = h.ncols() / tokens;
    let mut out = DMatrix::zeros(h.nrows(), h.ncols());
    for b in 0..batch {
        let mean = h.columns(b * tokens, tokens).column_mean();
        for t in 0..tokens {
            out.set_column(b * tokens + t, &mean);
        }
    }
    out
}

fn stack(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    out
}

/// Gradient of `[h, pooled(h)]` folded back onto `h`.
fn unstack_pooled(g: &DMatrix<f64>, width: usize, tokens: usize) -> DMatrix<f64> {
    let direct = g.rows(0, width).into_owned();
    let through_pool = pooled(&g.rows(width, width).into_owned(), tokens);
    direct + through_pool
}

impl WindowMlp {
    pub fn new<R: Rng + ?Sized>(layout: Layout, radius: usize, width: usize, rng: &mut R) -> Self {
        let c = layout.channels();
        let input = (2 * radius + 1) * c + SIGMA_FEATURES + POSITION_FEATURES + layout.cond_dim();
        Self {
            layout,
            radius,
            width,
            layers: [
                Linear::new(input, width, 1.0, rng),
                Linear::new(2 * width, width, 1.0, rng),
                Linear::new(2 * width, width, 1.0, rng),
                Linear::new(width, c, 0.3, rng),
            ],
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Linear::n_params).sum()
    }

    fn features(&self, x: &DMatrix<f64>, sigma: &[f64], cond: &DMatrix<f64>) -> DMatrix<f64> {
        let c = self.layout.channels();
        let tokens = self.layout.tokens();
        let batch = x.ncols() / tokens;
        let window = 2 * self.radius + 1;
        let cond_dim = self.layout.cond_dim();
        let rows = window * c + SIGMA_FEATURES + POSITION_FEATURES + cond_dim;
        let mut f = DMatrix::zeros(rows, x.ncols());
        for b in 0..batch {
            let c_in = 1.0 / (sigma[b] * sigma[b] + 1.0).sqrt();
            let semb = sigma_embedding(sigma[b]);
            for t in 0..tokens {
                let col = b * tokens + t;
                for k in 0..window {
                    let tt = t as isize + k as isize - self.radius as isize;
                    if tt < 0 || tt >= tokens as isize {
                        continue;
                    }
                    let src = b * tokens + tt as usize;
                    for ch in 0..c {
                        f[(k * c + ch, col)] = c_in * x[(ch, src)];
                    }
                }
                let mut r = window * c;
                for v in semb {
                    f[(r, col)] = v;
                    r += 1;
                }
                for v in position_embedding(t, tokens) {
                    f[(r, col)] = v;
                    r += 1;
                }
                for k in 0..cond_dim {
                    f[(r + k, col)] = cond[(k, b)];
                }
            }
        }
        f
    }

    fn check(&self, x: &DMatrix<f64>, sigma: &[f64], cond: &DMatrix<f64>) {
        let tokens = self.layout.tokens();
        assert_eq!(x.nrows(), self.layout.channels(), "channel count");
        assert_eq!(x.ncols() % tokens, 0, "token count");
        let batch = x.ncols() / tokens;
        assert_eq!(sigma.len(), batch, "one σ per sample");
        assert!(cond.nrows() == self.layout.cond_dim() && (cond.ncols() == batch || cond.nrows() == 0));
    }

    pub(crate) fn forward_cached(
        &self,
        x: &DMatrix<f64>,
        sigma: &[f64],
        cond: &DMatrix<f64>,
    ) -> (DMatrix<f64>, WindowCache) {
        self.check(x, sigma, cond);
        let tokens = self.layout.tokens();
        let features = self.features(x, sigma, cond);
        let z1 = self.layers[0].forward(&features);
        let h1 = z1.map(silu);
        let a2 = stack(&h1, &pooled(&h1, tokens));
        let z2 = self.layers[1].forward(&a2);
        let h2 = z2.map(silu);
        let a3 = stack(&h2, &pooled(&h2, tokens));
        let z3 = self.layers[2].forward(&a3);
        let h3 = z3.map(silu);
        let out = self.layers[3].forward(&h3);
        (
            out,
            WindowCache {
                features,
                z1,
                a2,
                z2,
                a3,
                z3,
                h3,
            },
        )
    }

    /// Accumulate parameter gradients for output gradient `gy`.
    pub(crate) fn backward(&self, cache: &WindowCache, gy: &DMatrix<f64>, grad: &mut WindowMlp) {
        let tokens = self.layout.tokens();
        let w = self.width;
        let [g0, g1, g2, g3] = &mut grad.layers;
        let mut g = self.layers[3].backward(&cache.h3, gy, g3);
        g.zip_apply(&cache.z3, |gi, z| *gi *= silu_grad(z));
        let g = self.layers[2].backward(&cache.a3, &g, g2);
        let mut g = unstack_pooled(&g, w, tokens);
        g.zip_apply(&cache.z2, |gi, z| *gi *= silu_grad(z));
        let g = self.layers[1].backward(&cache.a2, &g, g1);
        let mut g = unstack_pooled(&g, w, tokens);
        g.zip_apply(&cache.z1, |gi, z| *gi *= silu_grad(z));
        g0.w.gemm(1.0, &g, &cache.features.transpose(), 1.0);
        for col in g.column_iter() {
            g0.b += col;
        }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    pub(crate) fn fill_zero(&mut self) {
        self.layers.iter_mut().for_each(Linear::fill_zero);
    }

    pub(crate) fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.slices_mut()).collect()
    }

    pub(crate) fn slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.slices()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.u32(self.radius as u32);
        w.u32(self.width as u32);
        self.layers.iter().for_each(|l| l.write(w));
    }

    pub(crate) fn read(r: &mut Reader, layout: Layout) -> Result<Self> {
        let radius = r.u32()? as usize;
        let width = r.u32()? as usize;
        let layers = [Linear::read(r)?, Linear::read(r)?, Linear::read(r)?, Linear::read(r)?];
        let c = layout.channels();
        let input = (2 * radius + 1) * c + SIGMA_FEATURES + POSITION_FEATURES + layout.cond_dim();
        let shapes = [(input, width), (2 * width, width), (2 * width, width), (width, c)];
        for (l, (i, o)) in layers.iter().zip(shapes) {
            if l.fan_in() != i || l.fan_out() != o {
                return Err(Error::Format("denoiser layer shapes disagree with layout".into()));
            }
        }
        Ok(Self {
            layout,
            radius,
            width,
            layers,
        })
    }
}

impl Denoiser for WindowMlp {
    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn denoise(&self, x: &DMatrix<f64>, sigma: &[f64], cond: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_cached(x, sigma, cond).0
    }
}
