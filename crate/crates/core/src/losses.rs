//! Self-supervised objective: equivariance, shifted cross-entropy and
//! invariance terms, with the k-transposition utilities they rely on.
//!
//! Each loss has a value function and a `*_grad` twin returning gradients
//! with respect to both distributions. All logs clamp their argument at
//! `eps_log`; a clamped entry contributes no gradient.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Guard added to the denominator of the projection ratio.
const EPS_RATIO: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Constant `lambda_*` weights.
    Fixed,
    /// Per-step weights from gradient norms at the output layer.
    GradBalanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Ratio of successive projection weights, one bin apart.
    pub alpha: f64,
    /// Huber threshold.
    pub tau: f64,
    pub weighting: Weighting,
    pub lambda_inv: f64,
    pub lambda_equiv: f64,
    pub lambda_sce: f64,
    pub use_inv: bool,
    pub use_equiv: bool,
    pub use_sce: bool,
    pub eps_log: f64,
    /// Added to gradient norms in the balanced weighting.
    pub balance_eps: f64,
    /// Clamp range of balanced weights.
    pub balance_clamp: [f64; 2],
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: (1.0f64 / 36.0).exp2(),
            tau: 0.1,
            weighting: Weighting::Fixed,
            lambda_inv: 1.0,
            // The Huber term is orders of magnitude below the cross-entropies.
            lambda_equiv: 20.0,
            lambda_sce: 1.0,
            use_inv: true,
            use_equiv: true,
            use_sce: true,
            eps_log: 1e-12,
            balance_eps: 1e-12,
            balance_clamp: [1e-2, 1e2],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0) || !self.alpha.is_finite() {
            return invalid(format!("loss.alpha must exceed 1, got {}", self.alpha));
        }
        if !(self.tau > 0.0) {
            return invalid(format!("loss.tau must be positive, got {}", self.tau));
        }
        for (name, v) in [
            ("lambda_inv", self.lambda_inv),
            ("lambda_equiv", self.lambda_equiv),
            ("lambda_sce", self.lambda_sce),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return invalid(format!("loss.{name} must be a non-negative number, got {v}"));
            }
        }
        if !(self.eps_log > 0.0) {
            return invalid("loss.eps_log must be positive");
        }
        let [lo, hi] = self.balance_clamp;
        if !(lo > 0.0 && lo <= hi) {
            return invalid("loss.balance_clamp must be a positive, ordered interval");
        }
        if !(self.use_inv || self.use_equiv || self.use_sce) {
            return invalid("at least one loss term must be enabled");
        }
        Ok(())
    }

    pub fn enabled(&self) -> [bool; 3] {
        [self.use_inv, self.use_equiv, self.use_sce]
    }

    fn fixed_lambdas(&self) -> [f64; 3] {
        [self.lambda_inv, self.lambda_equiv, self.lambda_sce]
    }
}

/// Term values and the weights that combined them.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub inv: f64,
    pub equiv: f64,
    pub sce: f64,
    pub lambda_inv: f64,
    pub lambda_equiv: f64,
    pub lambda_sce: f64,
}

impl LossReport {
    pub fn terms(&self) -> [f64; 3] {
        [self.inv, self.equiv, self.sce]
    }

    pub fn lambdas(&self) -> [f64; 3] {
        [self.lambda_inv, self.lambda_equiv, self.lambda_sce]
    }
}

/// k-transposition: `out[i + k] = y[i]`, vacated entries zero, mass pushed
/// past either end dropped.
pub fn shift_distribution(y: &[f64], k: i64) -> Result<Vec<f64>> {
    let d = y.len() as i64;
    if k.abs() >= d {
        return invalid(format!("shift {k} out of range for {d} classes"));
    }
    let mut out = vec![0.0; y.len()];
    for (i, &v) in y.iter().enumerate() {
        let t = i as i64 + k;
        if (0..d).contains(&t) {
            out[t as usize] = v;
        }
    }
    Ok(out)
}

/// Projection `sum_i alpha^(i+1) y_i`.
pub fn phi(y: &[f64], alpha: f64) -> f64 {
    let mut w = alpha;
    let mut acc = 0.0;
    for &v in y {
        acc += w * v;
        w *= alpha;
    }
    acc
}

fn phi_weights(d: usize, alpha: f64) -> Vec<f64> {
    let mut w = alpha;
    (0..d)
        .map(|_| {
            let c = w;
            w *= alpha;
            c
        })
        .collect()
}

pub fn huber(x: f64, tau: f64) -> f64 {
    if x.abs() <= tau {
        0.5 * x * x
    } else {
        tau * (x.abs() - 0.5 * tau)
    }
}

pub fn huber_grad(x: f64, tau: f64) -> f64 {
    if x.abs() <= tau {
        x
    } else {
        tau * x.signum()
    }
}

/// Huber penalty on `phi(y_k) / phi(y) - alpha^k`.
pub fn loss_equiv(y: &[f64], y_k: &[f64], k: i64, cfg: &LossConfig) -> f64 {
    let ratio = phi(y_k, cfg.alpha) / (phi(y, cfg.alpha) + EPS_RATIO);
    huber(ratio - cfg.alpha.powi(k as i32), cfg.tau)
}

/// Value and gradients `(d/dy, d/dy_k)` of [`loss_equiv`].
pub fn loss_equiv_grad(y: &[f64], y_k: &[f64], k: i64, cfg: &LossConfig) -> (f64, Vec<f64>, Vec<f64>) {
    let w = phi_weights(y.len(), cfg.alpha);
    let p: f64 = w.iter().zip(y).map(|(a, b)| a * b).sum();
    let pk: f64 = w.iter().zip(y_k).map(|(a, b)| a * b).sum();
    let den = p + EPS_RATIO;
    let e = pk / den - cfg.alpha.powi(k as i32);
    let h = huber_grad(e, cfg.tau);
    let d_pk = h / den;
    let d_p = -h * pk / (den * den);
    (
        huber(e, cfg.tau),
        w.iter().map(|&a| d_p * a).collect(),
        w.iter().map(|&a| d_pk * a).collect(),
    )
}

/// Shifted cross-entropy `-sum_i y[i] log y_k[i + k]`, out-of-range terms 0.
pub fn loss_sce(y: &[f64], y_k: &[f64], k: i64, eps_log: f64) -> f64 {
    let d = y.len() as i64;
    let mut acc = 0.0;
    for (i, &v) in y.iter().enumerate() {
        let t = i as i64 + k;
        if (0..d).contains(&t) && v != 0.0 {
            acc -= v * y_k[t as usize].max(eps_log).ln();
        }
    }
    acc
}

pub fn loss_sce_grad(y: &[f64], y_k: &[f64], k: i64, eps_log: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let d = y.len() as i64;
    let mut gy = vec![0.0; y.len()];
    let mut gyk = vec![0.0; y.len()];
    let mut acc = 0.0;
    for (i, &v) in y.iter().enumerate() {
        let t = i as i64 + k;
        if !(0..d).contains(&t) {
            continue;
        }
        let q = y_k[t as usize];
        let lq = q.max(eps_log).ln();
        acc -= v * lq;
        gy[i] = -lq;
        if q > eps_log {
            gyk[t as usize] = -v / q;
        }
    }
    (acc, gy, gyk)
}

/// Cross-entropy `-sum_i y[i] log y_tilde[i]`.
pub fn loss_inv(y: &[f64], y_tilde: &[f64], eps_log: f64) -> f64 {
    loss_sce(y, y_tilde, 0, eps_log)
}

pub fn loss_inv_grad(y: &[f64], y_tilde: &[f64], eps_log: f64) -> (f64, Vec<f64>, Vec<f64>) {
    loss_sce_grad(y, y_tilde, 0, eps_log)
}

/// Shannon entropy in nats.
pub fn entropy(y: &[f64]) -> f64 {
    -y.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Weights for this step. `grad_norms` (order inv, equiv, sce) are only read
/// in balanced mode and only for enabled terms; disabled terms get 0.
pub fn lambdas(cfg: &LossConfig, grad_norms: Option<[f64; 3]>) -> Result<[f64; 3]> {
    let enabled = cfg.enabled();
    if !enabled.iter().any(|&e| e) {
        return invalid("at least one loss term must be enabled");
    }
    let mut out = [0.0; 3];
    match cfg.weighting {
        Weighting::Fixed => {
            let fixed = cfg.fixed_lambdas();
            for i in 0..3 {
                if enabled[i] {
                    out[i] = fixed[i];
                }
            }
        }
        Weighting::GradBalanced => {
            let Some(norms) = grad_norms else {
                return invalid("balanced weighting needs per-term gradient norms");
            };
            let active: Vec<usize> = (0..3).filter(|&i| enabled[i]).collect();
            let g_ref = (active
                .iter()
                .map(|&i| (norms[i] + cfg.balance_eps).ln())
                .sum::<f64>()
                / active.len() as f64)
                .exp();
            let [lo, hi] = cfg.balance_clamp;
            for &i in &active {
                out[i] = (g_ref / (norms[i] + cfg.balance_eps)).clamp(lo, hi);
            }
        }
    }
    Ok(out)
}

/// Weighted sum of per-term values (order inv, equiv, sce).
pub fn combine(terms: [f64; 3], grad_norms: Option<[f64; 3]>, cfg: &LossConfig) -> Result<LossReport> {
    let l = lambdas(cfg, grad_norms)?;
    let enabled = cfg.enabled();
    let mut total = 0.0;
    for i in 0..3 {
        if enabled[i] {
            total += l[i] * terms[i];
        }
    }
    Ok(LossReport {
        total,
        inv: terms[0],
        equiv: terms[1],
        sce: terms[2],
        lambda_inv: l[0],
        lambda_equiv: l[1],
        lambda_sce: l[2],
    })
}
