//! Minimal dense layers with manual backpropagation and Adam.
//!
//! Batches are column-major: a `(features × batch)` matrix holds one sample
//! per column.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::io::{Reader, Writer};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Linear {
    /// Uniform fan-in initialisation, `U(-k, k)` with `k = gain / sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) -> Self {
        let k = gain / (fan_in.max(1) as f64).sqrt();
        let w = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-k..=k));
        Self {
            w,
            b: DVector::zeros(fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: DMatrix::zeros(fan_out, fan_in),
            b: DVector::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = &self.w * x;
        for mut col in y.column_iter_mut() {
            col += &self.b;
        }
        y
    }

    /// Accumulate parameter gradients into `grad` and return `∂L/∂x`.
    pub fn backward(&self, x: &DMatrix<f64>, gy: &DMatrix<f64>, grad: &mut Linear) -> DMatrix<f64> {
        grad.w.gemm(1.0, gy, &x.transpose(), 1.0);
        for col in gy.column_iter() {
            grad.b += col;
        }
        self.w.tr_mul(gy)
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 2] {
        [self.w.as_mut_slice(), self.b.as_mut_slice()]
    }

    pub fn slices(&self) -> [&[f64]; 2] {
        [self.w.as_slice(), self.b.as_slice()]
    }

    pub fn fill_zero(&mut self) {
        self.w.fill(0.0);
        self.b.fill(0.0);
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.u32(self.fan_in() as u32);
        w.u32(self.fan_out() as u32);
        w.block(self.w.as_slice());
        w.block(self.b.as_slice());
    }

    pub(crate) fn read(r: &mut Reader) -> Result<Self> {
        let fan_in = r.u32()? as usize;
        let fan_out = r.u32()? as usize;
        let w = r.block()?;
        let b = r.block()?;
        if w.len() != fan_in * fan_out || b.len() != fan_out {
            return Err(Error::Format("layer parameter block has wrong length".into()));
        }
        if !w.iter().chain(&b).all(|x| x.is_finite()) {
            return Err(Error::Format("non-finite layer parameter".into()));
        }
        Ok(Self {
            w: DMatrix::from_vec(fan_out, fan_in, w),
            b: DVector::from_vec(b),
        })
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Feedforward network with SiLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Pre-activations kept for the backward pass.
pub struct MlpCache {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(w[0], w[1], if i == last { 0.5 } else { 1.0 }, rng))
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.fan_in(), l.fan_out()))
                .collect(),
        }
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().unwrap().fan_out()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            inputs.push(h);
            if i + 1 == self.layers.len() {
                h = z.clone();
            } else {
                h = z.map(silu);
            }
            pre.push(z);
        }
        (h, MlpCache { inputs, pre })
    }

    pub fn backward(&self, cache: &MlpCache, gy: &DMatrix<f64>, grad: &mut Mlp) -> DMatrix<f64> {
        let mut g = gy.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 != self.layers.len() {
                g.zip_apply(&cache.pre[i], |gi, z| *gi *= silu_grad(z));
            }
            g = self.layers[i].backward(&cache.inputs[i], &g, &mut grad.layers[i]);
        }
        g
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.slices_mut()).collect()
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.slices()).collect()
    }

    pub fn fill_zero(&mut self) {
        self.layers.iter_mut().for_each(Linear::fill_zero);
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.u32(self.layers.len() as u32);
        self.layers.iter().for_each(|l| l.write(w));
    }

    pub(crate) fn read(r: &mut Reader) -> Result<Self> {
        let n = r.u32()? as usize;
        if n == 0 || n > 64 {
            return Err(Error::Format(format!("implausible layer count {n}")));
        }
        let layers = (0..n).map(|_| Linear::read(r)).collect::<Result<Vec<_>>>()?;
        for pair in layers.windows(2) {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::Format("layer sizes do not chain".into()));
            }
        }
        Ok(Self { layers })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Mlp::new(&[3, 5, 4, 2], &mut rng);
        let x = DMatrix::from_fn(3, 4, |i, j| (i as f64 - j as f64) * 0.3);
        let loss = |n: &Mlp| n.forward(&x).iter().map(|y| y * y).sum::<f64>();
        let (y, cache) = net.forward_cached(&x);
        let mut grad = net.zeros_like();
        let gx = net.backward(&cache, &(2.0 * y), &mut grad);
        let h = 1e-6;
        for (l, (li, ji)) in [(0, (2, 1)), (1, (3, 4)), (2, (1, 0))] {
            let analytic = grad.layers[l].w[(li, ji)];
            net.layers[l].w[(li, ji)] += h;
            let up = loss(&net);
            net.layers[l].w[(li, ji)] -= 2.0 * h;
            let down = loss(&net);
            net.layers[l].w[(li, ji)] += h;
            assert!((analytic - (up - down) / (2.0 * h)).abs() < 1e-6);
        }
        let mut xp = x.clone();
        xp[(1, 2)] += h;
        let up = net.forward(&xp).iter().map(|y| y * y).sum::<f64>();
        xp[(1, 2)] -= 2.0 * h;
        let down = net.forward(&xp).iter().map(|y| y * y).sum::<f64>();
        assert!((gx[(1, 2)] - (up - down) / (2.0 * h)).abs() < 1e-6);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(vec![&mut p], vec![&g]);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-3));
    }

    #[test]
    fn mlp_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[4, 8, 3], &mut rng);
        let mut w = Writer::default();
        net.write(&mut w);
        let mut r = Reader::new(&w.buf);
        assert_eq!(Mlp::read(&mut r).unwrap(), net);
    }
}
