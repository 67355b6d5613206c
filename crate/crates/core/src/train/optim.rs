//! Adam, learning-rate schedules, sign-constrained parameters and
//! gradient-norm loss balancing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelParams, ModelSpec, Role, Sign};

/// Biophysical parameters in unconstrained coordinates: `lambda = +exp(z)`,
/// `-exp(z)` or `z` for positive, negative and free parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedParams {
    pub names: Vec<String>,
    pub signs: Vec<Sign>,
    pub z: Vec<f64>,
}

impl ConstrainedParams {
    /// Reparameterizes the estimated entries of `params`.
    pub fn from_params(spec: &ModelSpec, params: &ModelParams) -> Result<Self> {
        let mut names = Vec::new();
        let mut signs = Vec::new();
        let mut z = Vec::new();
        for (meta, &v) in spec.params.iter().zip(params.values()) {
            if meta.role != Role::Estimated {
                continue;
            }
            let zj = match meta.sign {
                Sign::Positive if v > 0.0 => v.ln(),
                Sign::Negative if v < 0.0 => (-v).ln(),
                Sign::Free => v,
                _ => {
                    return Err(Error::contract(format!(
                        "initial {} = {v} violates its {:?} sign constraint",
                        meta.name, meta.sign
                    )))
                }
            };
            names.push(meta.name.clone());
            signs.push(meta.sign);
            z.push(zj);
        }
        Ok(ConstrainedParams { names, signs, z })
    }

    /// The non-informative start: every magnitude 1, i.e. `z = 0` with the
    /// declared sign (free parameters start at 1).
    pub fn ones(spec: &ModelSpec) -> Self {
        let mut cp = ConstrainedParams {
            names: Vec::new(),
            signs: Vec::new(),
            z: Vec::new(),
        };
        for meta in spec.params.iter().filter(|m| m.role == Role::Estimated) {
            cp.names.push(meta.name.clone());
            cp.signs.push(meta.sign);
            cp.z.push(if meta.sign == Sign::Free { 1.0 } else { 0.0 });
        }
        cp
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn lambda(&self) -> Vec<f64> {
        (0..self.len()).map(|j| self.lambda_at(j)).collect()
    }

    pub fn lambda_at(&self, j: usize) -> f64 {
        match self.signs[j] {
            Sign::Positive => self.z[j].exp(),
            Sign::Negative => -self.z[j].exp(),
            Sign::Free => self.z[j],
        }
    }

    /// `d lambda_j / d z_j`.
    pub fn jacobian_at(&self, j: usize) -> f64 {
        match self.signs[j] {
            Sign::Free => 1.0,
            _ => self.lambda_at(j),
        }
    }

    /// Writes the current values into a full parameter set.
    pub fn apply(&self, spec: &ModelSpec, base: &ModelParams) -> Result<ModelParams> {
        let mut out = base.clone();
        for (j, name) in self.names.iter().enumerate() {
            out.set(name, self.lambda_at(j))?;
        }
        spec.validate(&out)?;
        Ok(out)
    }

    /// True when every value satisfies its sign constraint.
    pub fn signs_hold(&self) -> bool {
        (0..self.len()).all(|j| {
            let l = self.lambda_at(j);
            match self.signs[j] {
                Sign::Positive => l > 0.0,
                Sign::Negative => l < 0.0,
                Sign::Free => l.is_finite(),
            }
        })
    }
}

/// Bias-corrected Adam moments for one parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
        }
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::contract(format!(
            "Adam state has {} entries, got {} parameters and {} gradients",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    state.step_count += 1;
    let k = state.step_count as i32;
    let c1 = 1.0 - state.beta1.powi(k);
    let c2 = 1.0 - state.beta2.powi(k);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + state.eps_adam);
    }
    Ok(())
}

/// Staircase exponential decay: `initial * decay_factor^floor(k / decay_every)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            initial: lr,
            decay_factor: 1.0,
            decay_every: u64::MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0) || !(self.decay_factor > 0.0) || self.decay_every == 0 {
            return Err(Error::contract(format!("invalid learning-rate schedule {self:?}")));
        }
        Ok(())
    }

    pub fn lr(&self, k: u64) -> f64 {
        self.initial * self.decay_factor.powi((k / self.decay_every) as i32)
    }
}

/// Moving-average loss weights, one per residual equation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceState {
    pub weights: Vec<f64>,
    pub alpha: f64,
    pub eps: f64,
    pub update_every: u64,
}

impl BalanceState {
    pub fn new(n_eq: usize, alpha: f64, eps: f64, update_every: u64) -> Self {
        BalanceState {
            weights: vec![1.0; n_eq],
            alpha,
            eps,
            update_every,
        }
    }
}

/// `w <- alpha w + (1 - alpha) w_hat` with
/// `w_hat_j = sum_k (g_k + eps) / (g_j + eps)`.
pub fn update_balance(bs: &mut BalanceState, grad_norms: &[f64]) -> Result<()> {
    if grad_norms.len() != bs.weights.len() {
        return Err(Error::contract(format!(
            "{} gradient norms for {} weights",
            grad_norms.len(),
            bs.weights.len()
        )));
    }
    if grad_norms.iter().any(|g| !(*g >= 0.0) || !g.is_finite()) {
        return Err(Error::NonFiniteInput(format!("gradient norms {grad_norms:?}")));
    }
    let total: f64 = grad_norms.iter().map(|g| g + bs.eps).sum();
    for (w, g) in bs.weights.iter_mut().zip(grad_norms) {
        let target = total / (g + bs.eps);
        *w = bs.alpha * *w + (1.0 - bs.alpha) * target;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Regime;

    #[test]
    fn ones_maps_to_zero_with_signs() {
        let (spec, _) = Regime::Hopf.load();
        let cp = ConstrainedParams::ones(&spec);
        assert!(cp.z.iter().all(|&z| z == 0.0));
        let lam = cp.lambda();
        let v1 = cp.names.iter().position(|n| n == "V1").unwrap();
        assert_eq!(lam[v1], -1.0);
        assert_eq!(lam.iter().filter(|&&l| l == 1.0).count(), lam.len() - 1);
    }

    #[test]
    fn reparameterization_round_trips() {
        let (spec, truth) = Regime::PbcDefault.load();
        let cp = ConstrainedParams::from_params(&spec, &truth).unwrap();
        let back = cp.apply(&spec, &truth).unwrap();
        for (a, b) in back.values().iter().zip(truth.values()) {
            assert!((a - b).abs() <= 1e-14 * b.abs());
        }
        assert!(cp.signs_hold());
    }

    #[test]
    fn wrong_sign_is_rejected() {
        let (spec, truth) = Regime::Hopf.load();
        let bad = truth.with("V1", 1.0).unwrap();
        assert!(ConstrainedParams::from_params(&spec, &bad).is_err());
    }

    #[test]
    fn adam_first_step_has_unit_magnitude() {
        let mut st = AdamState::new(3);
        let mut p = vec![0.0, 0.0, 0.0];
        adam_step(&mut st, &mut p, &[2.0, -0.5, 0.0], 0.01).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-9);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn adam_minimizes_a_parabola() {
        let mut st = AdamState::new(1);
        let mut x = vec![1.0];
        for _ in 0..1000 {
            let g = [2.0 * x[0]];
            adam_step(&mut st, &mut x, &g, 1e-2).unwrap();
        }
        assert!(x[0].abs() < 0.1, "x = {}", x[0]);
    }

    #[test]
    fn staircase_schedule() {
        let s = LrSchedule {
            initial: 1e-3,
            decay_factor: 0.5,
            decay_every: 10_000,
        };
        assert_eq!(s.lr(0), 1e-3);
        assert_eq!(s.lr(9_999), 1e-3);
        assert_eq!(s.lr(10_000), 5e-4);
        assert_eq!(s.lr(25_000), 2.5e-4);
        assert_eq!(LrSchedule::constant(1e-4).lr(1_000_000), 1e-4);
    }

    #[test]
    fn balance_symmetric_step() {
        let mut bs = BalanceState::new(3, 0.9, 1e-6, 1000);
        update_balance(&mut bs, &[2.0, 2.0, 2.0]).unwrap();
        for w in &bs.weights {
            assert!((w - 1.2).abs() < 1e-12);
        }
    }

    #[test]
    fn balance_zero_norm_stays_finite() {
        let mut bs = BalanceState::new(3, 0.0, 1e-6, 1);
        update_balance(&mut bs, &[0.0, 1.0, 1.0]).unwrap();
        let expected = (2.0 + 3e-6) / 1e-6;
        assert!((bs.weights[0] - expected).abs() < 1e-6 * expected);
        assert!(bs.weights.iter().all(|w| w.is_finite() && *w > 0.0));
    }

    #[test]
    fn balance_alpha_one_freezes() {
        let mut bs = BalanceState::new(2, 1.0, 1e-6, 1);
        bs.weights = vec![0.3, 7.0];
        update_balance(&mut bs, &[5.0, 0.1]).unwrap();
        assert_eq!(bs.weights, vec![0.3, 7.0]);
    }
}
