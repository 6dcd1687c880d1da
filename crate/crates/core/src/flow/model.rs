//! Conditional velocity network with hand-written reverse-mode gradients.
//!
//! Inputs are the state `x`, a sinusoidal embedding of `t` and a learned
//! embedding of the condition index. Parameters live in one flat `Vec<f64>`
//! so optimizers and finite-difference checks can treat them uniformly.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::rng::{NoiseKey, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => {
                let th = z.tanh();
                1.0 - th * th
            }
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Silu => 1,
            Activation::Tanh => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Activation::Silu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Network shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub data_dim: usize,
    pub n_conditions: usize,
    pub cond_dim: usize,
    /// Number of sinusoid frequencies; the time embedding has `2 * time_freqs` features.
    pub time_freqs: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            data_dim: 2,
            n_conditions: 8,
            cond_dim: 4,
            time_freqs: 4,
            hidden: vec![64, 64],
            activation: Activation::Silu,
        }
    }
}

impl Arch {
    /// A compact variant (< 1k parameters) for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            hidden: vec![16, 16],
            ..Self::default()
        }
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + 2 * self.time_freqs + self.cond_dim
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim();
        for &w in &self.hidden {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims.push((fan_in, self.data_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.n_conditions * self.cond_dim
            + self
                .layer_dims()
                .iter()
                .map(|&(i, o)| i * o + o)
                .sum::<usize>()
    }
}

/// Per-evaluation intermediate values needed by [`VelocityModel::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    cond: usize,
    /// Layer inputs; `acts[0]` is the network input.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    arch: Arch,
    params: Vec<f64>,
}

impl VelocityModel {
    /// Random initialization keyed by `seed`.
    pub fn new(arch: Arch, seed: u64) -> Self {
        let mut rng = NoiseKey::new(Stream::ModelInit, seed).rng();
        let mut params = Vec::with_capacity(arch.param_count());
        for _ in 0..arch.n_conditions * arch.cond_dim {
            params.push(rng.sample::<f64, _>(StandardNormal));
        }
        let dims = arch.layer_dims();
        let last = dims.len() - 1;
        for (li, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let scale = if li == last { 0.1 } else { 1.0 } / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(scale * rng.sample::<f64, _>(StandardNormal));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        debug_assert_eq!(params.len(), arch.param_count());
        Self { arch, params }
    }

    pub fn from_params(arch: Arch, params: Vec<f64>) -> crate::Result<Self> {
        if params.len() != arch.param_count() {
            return Err(crate::Error::Dimension {
                expected: arch.param_count(),
                got: params.len(),
            });
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    pub fn n_conditions(&self) -> usize {
        self.arch.n_conditions
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn check_condition(&self, cond: usize) -> crate::Result<()> {
        if cond < self.arch.n_conditions {
            Ok(())
        } else {
            Err(crate::Error::UnknownCondition(cond))
        }
    }

    fn input(&self, x: &[f64], t: f64, cond: usize) -> Vec<f64> {
        let a = &self.arch;
        assert_eq!(x.len(), a.data_dim, "state dimension");
        assert!(cond < a.n_conditions, "condition {cond} out of range");
        let mut inp = Vec::with_capacity(a.input_dim());
        inp.extend_from_slice(x);
        let mut freq = PI;
        for _ in 0..a.time_freqs {
            inp.push((freq * t).sin());
            inp.push((freq * t).cos());
            freq *= 2.0;
        }
        let off = cond * a.cond_dim;
        inp.extend_from_slice(&self.params[off..off + a.cond_dim]);
        inp
    }

    /// v_θ(x, t, c).
    ///
    /// # Panics
    /// If `x` has the wrong dimension or `cond` is out of range.
    pub fn forward(&self, x: &[f64], t: f64, cond: usize) -> Vec<f64> {
        self.forward_tape(x, t, cond).0
    }

    pub fn forward_tape(&self, x: &[f64], t: f64, cond: usize) -> (Vec<f64>, Tape) {
        let act = self.arch.activation;
        let dims = self.arch.layer_dims();
        let last = dims.len() - 1;
        let mut acts = vec![self.input(x, t, cond)];
        let mut pre = Vec::with_capacity(last);
        let mut off = self.arch.n_conditions * self.arch.cond_dim;
        let mut out = Vec::new();
        for (li, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = &self.params[off..off + fan_in * fan_out];
            let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            let h = acts.last().expect("input layer");
            let z: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    row.iter().zip(h).fold(b[o], |s, (wi, hi)| s + wi * hi)
                })
                .collect();
            if li == last {
                out = z;
            } else {
                acts.push(z.iter().map(|&zi| act.apply(zi)).collect());
                pre.push(z);
            }
        }
        (out, Tape { cond, acts, pre })
    }

    /// Accumulates `dout^T · ∂v/∂θ` into `grad`.
    pub fn backward(&self, tape: &Tape, dout: &[f64], grad: &mut [f64]) {
        assert_eq!(grad.len(), self.params.len());
        assert_eq!(dout.len(), self.arch.data_dim);
        let act = self.arch.activation;
        let dims = self.arch.layer_dims();
        let emb = self.arch.n_conditions * self.arch.cond_dim;
        let mut offsets = Vec::with_capacity(dims.len());
        let mut off = emb;
        for &(i, o) in &dims {
            offsets.push(off);
            off += i * o + o;
        }

        let mut delta = dout.to_vec();
        for li in (0..dims.len()).rev() {
            let (fan_in, fan_out) = dims[li];
            let off = offsets[li];
            let h = &tape.acts[li];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let gw = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
                for (g, hi) in gw.iter_mut().zip(h) {
                    *g += d * hi;
                }
                grad[off + fan_in * fan_out + o] += d;
            }
            let w = &self.params[off..off + fan_in * fan_out];
            let mut prev = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * fan_in..(o + 1) * fan_in];
                for (p, wi) in prev.iter_mut().zip(row) {
                    *p += d * wi;
                }
            }
            if li > 0 {
                for (p, z) in prev.iter_mut().zip(&tape.pre[li - 1]) {
                    *p *= act.derivative(*z);
                }
            }
            delta = prev;
        }
        // delta now holds the gradient w.r.t. the network input
        let a = &self.arch;
        let start = a.data_dim + 2 * a.time_freqs;
        let row = tape.cond * a.cond_dim;
        for j in 0..a.cond_dim {
            grad[row + j] += delta[start + j];
        }
    }

    /// Forward pass plus vector-Jacobian product in one call; returns v.
    pub fn vjp_with(
        &self,
        x: &[f64],
        t: f64,
        cond: usize,
        grad: &mut [f64],
        cotangent: impl FnOnce(&[f64]) -> Vec<f64>,
    ) -> Vec<f64> {
        let (v, tape) = self.forward_tape(x, t, cond);
        let dv = cotangent(&v);
        self.backward(&tape, &dv, grad);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(model: &VelocityModel, x: &[f64], t: f64, c: usize, dout: &[f64]) -> f64 {
        let mut grad = vec![0.0; model.num_params()];
        let (_, tape) = model.forward_tape(x, t, c);
        model.backward(&tape, dout, &mut grad);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut m = model.clone();
        for i in 0..model.num_params() {
            let orig = m.params[i];
            m.params[i] = orig + h;
            let fp: f64 = m.forward(x, t, c).iter().zip(dout).map(|(a, b)| a * b).sum();
            m.params[i] = orig - h;
            let fm: f64 = m.forward(x, t, c).iter().zip(dout).map(|(a, b)| a * b).sum();
            m.params[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - grad[i]).abs() / (1e-6 + fd.abs().max(grad[i].abs()));
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn param_count_matches_layout() {
        let arch = Arch::tiny();
        assert!(arch.param_count() < 1000);
        let m = VelocityModel::new(arch.clone(), 3);
        assert_eq!(m.num_params(), arch.param_count());
        assert_eq!(Arch::default().param_count(), m_default_count());
    }

    fn m_default_count() -> usize {
        // 8*4 embedding + (14*64+64) + (64*64+64) + (64*2+2)
        32 + 960 + 4160 + 130
    }

    #[test]
    fn backward_matches_finite_differences() {
        for act in [Activation::Silu, Activation::Tanh] {
            let arch = Arch {
                activation: act,
                ..Arch::tiny()
            };
            let m = VelocityModel::new(arch, 11);
            let err = fd_check(&m, &[0.3, -1.2], 0.37, 5, &[0.7, -0.4]);
            assert!(err < 1e-6, "{act:?}: {err}");
        }
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let m = VelocityModel::new(Arch::default(), 0);
        let a = m.forward(&[1e3, -1e3], 1.0, 7);
        assert_eq!(a, m.forward(&[1e3, -1e3], 1.0, 7));
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a.len(), 2);
    }
}
