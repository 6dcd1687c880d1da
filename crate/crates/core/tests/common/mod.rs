#![allow(dead_code)]

use flowrft_core::flow::{Arch, VelocityModel};

/// Arch with the given hidden widths and the default input layout.
pub fn arch(hidden: &[usize]) -> Arch {
    Arch {
        hidden: hidden.to_vec(),
        ..Arch::default()
    }
}

/// A model whose velocity is the constant `u` everywhere: all weights zero,
/// output bias `u`.
pub fn constant_field(u: [f64; 2]) -> VelocityModel {
    let a = Arch::tiny();
    let mut p = vec![0.0; a.param_count()];
    let n = p.len();
    p[n - 2] = u[0];
    p[n - 1] = u[1];
    VelocityModel::from_params(a, p).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let s: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / s.max(1e-300)
}
