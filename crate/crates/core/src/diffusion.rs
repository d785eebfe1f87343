//! Noise schedule, per-token forward noising and the reverse posterior.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const ALPHA_BAR_FLOOR: f64 = 1e-4;
pub const BETA_MAX: f64 = 0.999;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `ᾱ_t = max(1 - t/(T+1), 1e-4)`.
    #[default]
    TruncatedLinear,
    /// β linear from `1e-4·s` to `0.02·s` with `s = 1000/T`.
    LinearBeta,
}

/// Per-step tables. `beta[t]`, `posterior_var[t]` are defined for `t ≥ 1`;
/// index 0 holds 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub posterior_var: Vec<f64>,
}

pub fn build_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::Config("diffusion steps must be at least 1".into()));
    }
    let mut beta = vec![0.0; steps + 1];
    match kind {
        ScheduleKind::TruncatedLinear => {
            let ab = |t: usize| (1.0 - t as f64 / (steps + 1) as f64).max(ALPHA_BAR_FLOOR);
            for (t, b) in beta.iter_mut().enumerate().skip(1) {
                *b = 1.0 - ab(t) / ab(t - 1);
            }
        }
        ScheduleKind::LinearBeta => {
            let s = 1000.0 / steps as f64;
            let (lo, hi) = (1e-4 * s, 0.02 * s);
            for (t, b) in beta.iter_mut().enumerate().skip(1) {
                let frac = if steps == 1 { 0.0 } else { (t - 1) as f64 / (steps - 1) as f64 };
                *b = lo + (hi - lo) * frac;
            }
        }
    }
    for b in beta.iter_mut().skip(1) {
        *b = b.clamp(f64::MIN_POSITIVE, BETA_MAX);
    }
    let mut alpha_bar = vec![1.0; steps + 1];
    for t in 1..=steps {
        alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t]);
    }
    let mut posterior_var = vec![0.0; steps + 1];
    for t in 1..=steps {
        posterior_var[t] = (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t];
    }
    Ok(NoiseSchedule {
        steps,
        kind,
        beta,
        alpha_bar,
        posterior_var,
    })
}

impl NoiseSchedule {
    fn check_grid(&self, grid: &[usize]) -> Result<()> {
        match grid.iter().find(|&&t| t > self.steps) {
            Some(&t) => Err(Error::Domain(format!("timestep {t} outside [0, {}]", self.steps))),
            None => Ok(()),
        }
    }

    fn forward_coefs(&self, grid: &[usize]) -> (Vec<f64>, Vec<f64>) {
        grid.iter()
            .map(|&t| (self.alpha_bar[t].sqrt(), (1.0 - self.alpha_bar[t]).sqrt()))
            .unzip()
    }

    /// `√ᾱ_t x0 + √(1-ᾱ_t) ε` with one `t` per token (row of the last axis).
    pub fn q_sample(&self, x0: &Tensor, grid: &[usize], eps: &Tensor) -> Result<Tensor> {
        self.check_grid(grid)?;
        let d = x0.last_dim();
        if x0.shape() != eps.shape() || grid.len() * d != x0.len() {
            return Err(Error::Shape {
                op: "q_sample",
                lhs: x0.shape().to_vec(),
                rhs: vec![grid.len(), d],
            });
        }
        let mut out = x0.clone();
        for (r, &t) in grid.iter().enumerate() {
            if t == 0 {
                continue;
            }
            let (a, s) = (self.alpha_bar[t].sqrt(), (1.0 - self.alpha_bar[t]).sqrt());
            let row = &mut out.data_mut()[r * d..(r + 1) * d];
            for (x, e) in row.iter_mut().zip(eps.row(r)) {
                *x = a * *x + s * e;
            }
        }
        Ok(out)
    }

    /// Tracked variant of [`q_sample`](Self::q_sample): gradients reach `x0`.
    pub fn q_sample_var(&self, g: &mut Graph, x0: Var, grid: &[usize], eps: Tensor) -> Result<Var> {
        self.check_grid(grid)?;
        if g.shape(x0) != eps.shape() {
            return Err(Error::Shape {
                op: "q_sample",
                lhs: g.shape(x0).to_vec(),
                rhs: eps.shape().to_vec(),
            });
        }
        let (a, s) = self.forward_coefs(grid);
        let signal = g.row_scale(x0, a)?;
        let e = g.constant(eps);
        let noise = g.row_scale(e, s)?;
        g.add(signal, noise)
    }

    /// Coefficients `(c_xt, c_x0)` of the `x0`-parameterised posterior mean.
    pub fn posterior_coefs(&self, t: usize) -> Result<(f64, f64)> {
        if t == 0 || t > self.steps {
            return Err(Error::Domain(format!(
                "reverse step needs 1 <= t <= {}, got {t}",
                self.steps
            )));
        }
        let (ab, ab_prev, b) = (self.alpha_bar[t], self.alpha_bar[t - 1], self.beta[t]);
        let c_xt = (1.0 - b).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let c_x0 = ab_prev.sqrt() * b / (1.0 - ab);
        Ok((c_xt, c_x0))
    }

    pub fn posterior_mean(&self, x_t: &[f64], x0_hat: &[f64], t: usize) -> Result<Vec<f64>> {
        if x_t.len() != x0_hat.len() {
            return Err(Error::Shape {
                op: "posterior_mean",
                lhs: vec![x_t.len()],
                rhs: vec![x0_hat.len()],
            });
        }
        let (a, b) = self.posterior_coefs(t)?;
        Ok(x_t.iter().zip(x0_hat).map(|(x, y)| a * x + b * y).collect())
    }

    /// One reverse step: posterior mean plus `√γ_t` noise for `t ≥ 2`.
    pub fn reverse_step(&self, x_t: &[f64], x0_hat: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        let mut mu = self.posterior_mean(x_t, x0_hat, t)?;
        if t >= 2 {
            let s = self.posterior_var[t].sqrt();
            mu.iter_mut().zip(eps).for_each(|(m, e)| *m += s * e);
        }
        Ok(mu)
    }
}

/// Uniform steps in `1..=T` at valid positions, 0 at padding.
pub fn sample_train_grid<R: Rng + ?Sized>(valid: &[bool], steps: usize, rng: &mut R) -> Vec<usize> {
    valid
        .iter()
        .map(|&v| if v { rng.random_range(1..=steps) } else { 0 })
        .collect()
}

/// `[0, …, 0, step]` of length `len`.
pub fn inference_grid(len: usize, step: usize) -> Vec<usize> {
    let mut g = vec![0; len];
    if let Some(last) = g.last_mut() {
        *last = step;
    }
    g
}
