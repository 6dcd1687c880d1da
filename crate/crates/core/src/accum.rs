//! Deterministic parallel reduction of (loss, gradient) contributions.

use rayon::prelude::*;

/// Scalar loss together with its exact parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

impl LossGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            loss: 0.0,
            grad: vec![0.0; n],
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &LossGrad, scale: f64) {
        self.loss += scale * other.loss;
        for (a, b) in self.grad.iter_mut().zip(&other.grad) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.loss *= s;
        self.grad.iter_mut().for_each(|g| *g *= s);
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

const CHUNK: usize = 8;

/// Runs `f(i, grad)` for every item, each chunk of items accumulating into its
/// own buffer; chunk buffers are then summed in index order, so the result
/// does not depend on the thread pool.
pub fn accumulate<F>(n_items: usize, n_params: usize, f: F) -> LossGrad
where
    F: Fn(usize, &mut [f64]) -> f64 + Sync,
{
    try_accumulate(n_items, n_params, |i, g| Ok::<_, ()>(f(i, g))).unwrap_or_else(|_| unreachable!())
}

/// Fallible variant of [`accumulate`]; the first error in index order wins.
pub fn try_accumulate<F, E>(n_items: usize, n_params: usize, f: F) -> Result<LossGrad, E>
where
    F: Fn(usize, &mut [f64]) -> Result<f64, E> + Sync,
    E: Send,
{
    let n_chunks = n_items.div_ceil(CHUNK);
    let parts: Vec<Result<LossGrad, E>> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let mut part = LossGrad::zeros(n_params);
            for i in ci * CHUNK..((ci + 1) * CHUNK).min(n_items) {
                part.loss += f(i, &mut part.grad)?;
            }
            Ok(part)
        })
        .collect();
    let mut total = LossGrad::zeros(n_params);
    for p in parts {
        total.add_scaled(&p?, 1.0);
    }
    Ok(total)
}
