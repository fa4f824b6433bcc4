//! First-order optimizers and learning-rate schedules over plain arrays.

use std::f64::consts::PI;

use sadag_autodiff::Array;

use crate::error::{invalid, Result};

fn check_lengths(params: usize, grads: usize) -> Result<()> {
    if params != grads {
        return Err(invalid("optimizer step", format!("{params} parameters but {grads} gradients")));
    }
    Ok(())
}

/// Heavy-ball SGD with coupled L2 weight decay.
#[derive(Clone, Debug)]
pub struct MomentumSgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Array>,
}

impl MomentumSgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut Array], grads: &[Array], lr: f64) -> Result<()> {
        check_lengths(params.len(), grads.len())?;
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Array::zeros(p.shape())).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let (pd, gd, vd) = (p.data_mut(), g.data(), v.data_mut());
            for i in 0..pd.len() {
                let gi = gd[i] + self.weight_decay * pd[i];
                vd[i] = self.momentum * vd[i] + gi;
                pd[i] -= lr * vd[i];
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub hp: AdamParams,
    m: Vec<Array>,
    v: Vec<Array>,
    t: u64,
}

impl Adam {
    pub fn new(hp: AdamParams) -> Self {
        Self { hp, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn step(&mut self, params: &mut [&mut Array], grads: &[Array], lr: f64) -> Result<()> {
        check_lengths(params.len(), grads.len())?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Array::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamParams { beta1, beta2, eps } = self.hp;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (self.m[k].data_mut(), self.v[k].data_mut());
            for i in 0..pd.len() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * gd[i];
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gd[i] * gd[i];
                pd[i] -= lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Adam over the rows of one matrix, with a separate step count per row so
/// that each embedding behaves as if it had its own optimizer.
#[derive(Clone, Debug)]
pub struct RowAdam {
    pub hp: AdamParams,
    m: Array,
    v: Array,
    t: Vec<u64>,
}

impl RowAdam {
    pub fn new(hp: AdamParams, rows: usize, cols: usize) -> Self {
        Self { hp, m: Array::zeros([rows, cols]), v: Array::zeros([rows, cols]), t: vec![0; rows] }
    }

    /// Updates rows `start..start + grads.rows` of `param`.
    pub fn step_rows(&mut self, param: &mut Array, start: usize, grads: &Array, lr: f64) -> Result<()> {
        let cols = param.shape()[1];
        let rows = grads.shape()[0];
        if grads.shape()[1] != cols || start + rows > param.shape()[0] {
            return Err(invalid(
                "row optimizer step",
                format!("rows {start}..{} of {:?} with gradient {:?}", start + rows, param.shape(), grads.shape()),
            ));
        }
        let AdamParams { beta1, beta2, eps } = self.hp;
        for r in 0..rows {
            let row = start + r;
            self.t[row] += 1;
            let c1 = 1.0 - beta1.powi(self.t[row] as i32);
            let c2 = 1.0 - beta2.powi(self.t[row] as i32);
            for c in 0..cols {
                let i = row * cols + c;
                let g = grads.data()[r * cols + c];
                let m = beta1 * self.m.data()[i] + (1.0 - beta1) * g;
                let v = beta2 * self.v.data()[i] + (1.0 - beta2) * g * g;
                self.m.data_mut()[i] = m;
                self.v.data_mut()[i] = v;
                param.data_mut()[i] -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` to 0 over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (PI * step as f64 / total as f64).cos())
}

/// Multiplies the rate by `gamma` on every epoch boundary.
#[derive(Clone, Debug)]
pub struct ExponentialLr {
    pub lr: f64,
    pub gamma: f64,
}

impl ExponentialLr {
    pub fn step(&mut self) {
        self.lr *= self.gamma;
    }
}

/// Halves (by `factor`) the rate once the monitored loss has failed to improve
/// by a relative `threshold` for more than `patience` epochs.
#[derive(Clone, Debug)]
pub struct PlateauLr {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauLr {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self { lr, factor, patience, threshold: 1e-4, best: f64::INFINITY, bad_epochs: 0 }
    }

    pub fn step(&mut self, loss: f64) {
        if loss < self.best * (1.0 - self.threshold) {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Array::from_vec(vec![1.0, -2.0]);
        let mut opt = Adam::new(AdamParams::default());
        opt.step(&mut [&mut p], &[Array::from_vec(vec![0.3, -5.0])], 0.1).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn row_adam_matches_adam_on_a_single_row() {
        let mut a = Array::new(vec![1, 3], vec![0.5, 1.0, -1.0]).unwrap();
        let mut b = a.clone();
        let mut ra = RowAdam::new(AdamParams::default(), 1, 3);
        let mut ad = Adam::new(AdamParams::default());
        for k in 0..5 {
            let g = Array::new(vec![1, 3], vec![k as f64, 1.0 - k as f64, 0.25]).unwrap();
            ra.step_rows(&mut a, 0, &g, 0.01).unwrap();
            ad.step(&mut [&mut b], &[g], 0.01).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = Array::from_vec(vec![0.0]);
        let mut opt = MomentumSgd::new(0.9, 0.0);
        let g = [Array::from_vec(vec![1.0])];
        opt.step(&mut [&mut p], &g, 1.0).unwrap();
        opt.step(&mut [&mut p], &g, 1.0).unwrap();
        assert!((p.data()[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn schedules() {
        assert_eq!(cosine_lr(0.05, 0, 10), 0.05);
        assert!(cosine_lr(0.05, 10, 10).abs() < 1e-15);
        let mut e = ExponentialLr { lr: 0.1, gamma: 0.95 };
        e.step();
        assert!((e.lr - 0.095).abs() < 1e-15);
        let mut p = PlateauLr::new(0.01, 0.5, 3);
        p.step(1.0);
        for _ in 0..3 {
            p.step(1.0);
        }
        assert_eq!(p.lr, 0.01);
        p.step(1.0);
        assert_eq!(p.lr, 0.005);
    }
}
