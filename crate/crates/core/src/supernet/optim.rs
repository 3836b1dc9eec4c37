use serde::{Deserialize, Serialize};
use unas_autodiff::Array;

/// Cosine annealing from `start` to `end` over `total` steps.
pub fn cosine(start: f64, end: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return end;
    }
    let frac = (step.min(total) as f64) / total as f64;
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Adam over a list of arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update of `params` given `grads`. A zero rate leaves the
    /// parameters bitwise unchanged.
    pub fn step(&mut self, params: &mut [Array], grads: &[Array], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gj;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gj * gj;
                if lr != 0.0 {
                    *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                }
            }
        }
    }
}
