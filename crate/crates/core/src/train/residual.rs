//! ODE residual losses over a batch of collocation times and their gradients
//! with respect to the network parameters and the reparameterized biophysical
//! parameters.

use crate::error::{Error, Result};
use crate::models::{ModelParams, ModelSpec, RoleFilter};
use crate::net::{FourierNet, Tape};
use serde::{Deserialize, Serialize};

use super::optim::ConstrainedParams;

/// Values and time derivatives of one state over a batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StateBatch {
    pub value: Vec<f64>,
    pub dvalue: Vec<f64>,
}

impl From<&Tape> for StateBatch {
    fn from(t: &Tape) -> Self {
        StateBatch {
            value: t.value.clone(),
            dvalue: t.dvalue_dt.clone(),
        }
    }
}

/// How each equation's residual is weighted pointwise before squaring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualScaling {
    /// `dX/dt - F(X; lambda)` as written.
    #[default]
    None,
    /// Gate residuals multiplied by their voltage-dependent time constant.
    Timescale,
}

/// Residuals `r_e = s_e (dX_e/dt - F_e(X; lambda))` with the partials of `F`
/// and of the scale `s`.
#[derive(Debug)]
pub struct ResidualCore {
    dim: usize,
    n_par: usize,
    batch: usize,
    /// Per equation: mean squared residual.
    pub losses: Vec<f64>,
    r: Vec<f64>,
    dfdx: Vec<f64>,
    dfdl: Vec<f64>,
    scale: Option<ScaleTerms>,
}

#[derive(Debug)]
struct ScaleTerms {
    s: Vec<f64>,
    dsdx: Vec<f64>,
    dsdl: Vec<f64>,
}

/// Loss adjoints for each state's value and time derivative, and the
/// gradient with respect to `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adjoints {
    pub value: Vec<Vec<f64>>,
    pub dvalue: Vec<Vec<f64>>,
    pub z: Vec<f64>,
}

/// Full parameter vector with the estimated slots taken from `cp`.
pub(crate) fn fill_params(spec: &ModelSpec, base: &ModelParams, cp: &ConstrainedParams) -> Vec<f64> {
    let mut p = base.values().to_vec();
    for (j, slot) in spec.indices(RoleFilter::Estimated).into_iter().enumerate() {
        p[slot] = cp.lambda_at(j);
    }
    p
}

pub fn residual_core(
    spec: &ModelSpec,
    params: &[f64],
    wrt: &[usize],
    ts: &[f64],
    states: &[StateBatch],
    scaling: ResidualScaling,
) -> Result<ResidualCore> {
    let d = spec.dim();
    let b = ts.len();
    if states.len() != d {
        return Err(Error::contract(format!("{} state batches for a {d}-state model", states.len())));
    }
    if states.iter().any(|s| s.value.len() != b || s.dvalue.len() != b) {
        return Err(Error::contract("state batches disagree with the number of times"));
    }
    if b == 0 {
        return Err(Error::contract("empty collocation batch"));
    }
    let np = wrt.len();
    let mut r = vec![0.0; b * d];
    let mut dfdx = vec![0.0; b * d * d];
    let mut dfdl = vec![0.0; b * d * np];
    let mut losses = vec![0.0; d];
    let mut x = vec![0.0; d];
    let mut f = vec![0.0; d];
    let mut scale = (scaling == ResidualScaling::Timescale).then(|| ScaleTerms {
        s: vec![0.0; b * d],
        dsdx: vec![0.0; b * d * d],
        dsdl: vec![0.0; b * d * np],
    });
    for i in 0..b {
        for (xj, s) in x.iter_mut().zip(states) {
            *xj = s.value[i];
        }
        spec.eval_with_partials(
            &x,
            params,
            wrt,
            &mut f,
            &mut dfdx[i * d * d..(i + 1) * d * d],
            &mut dfdl[i * d * np..(i + 1) * d * np],
        );
        if let Some(sc) = scale.as_mut() {
            spec.residual_scale_with_partials(
                &x,
                params,
                wrt,
                &mut sc.s[i * d..(i + 1) * d],
                &mut sc.dsdx[i * d * d..(i + 1) * d * d],
                &mut sc.dsdl[i * d * np..(i + 1) * d * np],
            );
        }
        for e in 0..d {
            let re = states[e].dvalue[i] - f[e];
            let se = scale.as_ref().map_or(1.0, |sc| sc.s[i * d + e]);
            if !(re * se).is_finite() {
                return Err(Error::NonFiniteInput(format!(
                    "residual of the {} equation at t = {} ms",
                    spec.state_names[e], ts[i]
                )));
            }
            r[i * d + e] = re;
            losses[e] += (se * re) * (se * re);
        }
    }
    for l in &mut losses {
        *l /= b as f64;
    }
    Ok(ResidualCore {
        dim: d,
        n_par: np,
        batch: b,
        losses,
        r,
        dfdx,
        dfdl,
        scale,
    })
}

impl ResidualCore {
    pub fn weighted_loss(&self, weights: &[f64]) -> f64 {
        self.losses.iter().zip(weights).map(|(l, w)| l * w).sum()
    }

    /// Adjoints of `sum_e weights[e] * loss_e`.
    pub fn adjoints(&self, weights: &[f64], cp: &ConstrainedParams) -> Adjoints {
        let (d, np, b) = (self.dim, self.n_par, self.batch);
        let scale = 2.0 / b as f64;
        let mut value = vec![vec![0.0; b]; d];
        let mut dvalue = vec![vec![0.0; b]; d];
        let mut dl = vec![0.0; np];
        for i in 0..b {
            for e in 0..d {
                let r = self.r[i * d + e];
                let row = &self.dfdx[i * d * d + e * d..][..d];
                let prow = &self.dfdl[i * d * np + e * np..][..np];
                match &self.scale {
                    None => {
                        let c = weights[e] * scale * r;
                        if c == 0.0 {
                            continue;
                        }
                        dvalue[e][i] += c;
                        for j in 0..d {
                            value[j][i] -= c * row[j];
                        }
                        for k in 0..np {
                            dl[k] -= c * prow[k];
                        }
                    }
                    Some(sc) => {
                        // loss term (s r)^2 with s = s(X, lambda)
                        let s = sc.s[i * d + e];
                        let c = weights[e] * scale * s * r;
                        if c == 0.0 {
                            continue;
                        }
                        let srow = &sc.dsdx[i * d * d + e * d..][..d];
                        let sprow = &sc.dsdl[i * d * np + e * np..][..np];
                        dvalue[e][i] += c * s;
                        for j in 0..d {
                            value[j][i] += c * (srow[j] * r - s * row[j]);
                        }
                        for k in 0..np {
                            dl[k] += c * (sprow[k] * r - s * prow[k]);
                        }
                    }
                }
            }
        }
        let z = dl.iter().enumerate().map(|(k, g)| g * cp.jacobian_at(k)).collect();
        Adjoints { value, dvalue, z }
    }
}

/// One network per state, some of which may be frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct NetBundle {
    pub nets: Vec<FourierNet>,
    pub trainable: Vec<bool>,
}

/// Gradient over all stage-2 unknowns: an entry per trainable network (empty
/// for frozen ones) and the `z` block.
#[derive(Clone, Debug, PartialEq)]
pub struct StageGrads {
    pub nets: Vec<Vec<f64>>,
    pub z: Vec<f64>,
}

impl StageGrads {
    pub fn zeros(bundle: &NetBundle, n_z: usize) -> Self {
        StageGrads {
            nets: bundle
                .nets
                .iter()
                .zip(&bundle.trainable)
                .map(|(n, &t)| if t { vec![0.0; n.param_count()] } else { Vec::new() })
                .collect(),
            z: vec![0.0; n_z],
        }
    }

    pub fn norm(&self) -> f64 {
        self.nets
            .iter()
            .flatten()
            .chain(&self.z)
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Flattened in bundle order, then `z`.
    pub fn flatten(&self) -> Vec<f64> {
        self.nets.iter().flatten().chain(&self.z).copied().collect()
    }
}

/// Backpropagates `adj` through the trainable networks into `out`.
pub(crate) fn accumulate(
    bundle: &NetBundle,
    tapes: &[Option<Tape>],
    adj: &Adjoints,
    out: &mut StageGrads,
) -> Result<()> {
    for (j, net) in bundle.nets.iter().enumerate() {
        if !bundle.trainable[j] {
            continue;
        }
        let tape = tapes[j].as_ref().expect("trainable nets are evaluated");
        net.backward_batch(tape, &adj.value[j], &adj.dvalue[j], &mut out.nets[j])?;
    }
    for (g, a) in out.z.iter_mut().zip(&adj.z) {
        *g += a;
    }
    Ok(())
}

fn evaluate(bundle: &NetBundle, ts: &[f64]) -> (Vec<Option<Tape>>, Vec<StateBatch>) {
    let tapes: Vec<Tape> = bundle.nets.iter().map(|n| n.eval_batch(ts)).collect();
    let states = tapes.iter().map(StateBatch::from).collect();
    (tapes.into_iter().map(Some).collect(), states)
}

/// Per-equation losses and the gradient of each equation's loss.
pub struct ResidualLosses {
    pub losses: Vec<f64>,
    pub per_equation: Vec<StageGrads>,
}

pub fn residual_losses(
    bundle: &NetBundle,
    spec: &ModelSpec,
    base: &ModelParams,
    cp: &ConstrainedParams,
    t_batch: &[f64],
    scaling: ResidualScaling,
) -> Result<ResidualLosses> {
    check_bundle(bundle, spec)?;
    let (tapes, states) = evaluate(bundle, t_batch);
    let params = fill_params(spec, base, cp);
    let wrt = spec.indices(RoleFilter::Estimated);
    let core = residual_core(spec, &params, &wrt, t_batch, &states, scaling)?;
    let d = spec.dim();
    let mut per_equation = Vec::with_capacity(d);
    for e in 0..d {
        let mut w = vec![0.0; d];
        w[e] = 1.0;
        let adj = core.adjoints(&w, cp);
        let mut g = StageGrads::zeros(bundle, cp.len());
        accumulate(bundle, &tapes, &adj, &mut g)?;
        per_equation.push(g);
    }
    Ok(ResidualLosses {
        losses: core.losses,
        per_equation,
    })
}

/// Stage-2 objective `sum_e w_e L_e + data_weight * L_u` and its gradient.
/// The data term uses observations of the observed state at the same times.
#[allow(clippy::too_many_arguments)]
pub fn stage_loss(
    bundle: &NetBundle,
    spec: &ModelSpec,
    base: &ModelParams,
    cp: &ConstrainedParams,
    t_batch: &[f64],
    weights: &[f64],
    data: Option<(&[f64], f64)>,
    scaling: ResidualScaling,
) -> Result<(f64, StageGrads)> {
    check_bundle(bundle, spec)?;
    let (tapes, states) = evaluate(bundle, t_batch);
    let params = fill_params(spec, base, cp);
    let wrt = spec.indices(RoleFilter::Estimated);
    let core = residual_core(spec, &params, &wrt, t_batch, &states, scaling)?;
    let mut loss = core.weighted_loss(weights);
    let mut adj = core.adjoints(weights, cp);
    if let Some((obs, w_u)) = data {
        loss += w_u * add_data_term(&states[spec.observed_index], obs, w_u, &mut adj.value[spec.observed_index])?;
    }
    let mut g = StageGrads::zeros(bundle, cp.len());
    accumulate(bundle, &tapes, &adj, &mut g)?;
    Ok((loss, g))
}

/// Adds the adjoint of `w_u * mean((v - obs)^2)` and returns the unweighted misfit.
pub(crate) fn add_data_term(state: &StateBatch, obs: &[f64], w_u: f64, adj: &mut [f64]) -> Result<f64> {
    if obs.len() != state.value.len() {
        return Err(Error::contract("observations disagree with the batch"));
    }
    let b = obs.len() as f64;
    let mut l = 0.0;
    for ((a, v), o) in adj.iter_mut().zip(&state.value).zip(obs) {
        let e = v - o;
        l += e * e;
        *a += w_u * 2.0 * e / b;
    }
    Ok(l / b)
}

pub(crate) fn check_bundle(bundle: &NetBundle, spec: &ModelSpec) -> Result<()> {
    if bundle.nets.len() != spec.dim() || bundle.trainable.len() != spec.dim() {
        return Err(Error::contract(format!(
            "bundle has {} networks, model {} has {} states",
            bundle.nets.len(),
            spec.id,
            spec.dim()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{steady_state, Regime};
    use crate::net::{init_network, FourierEmbedding, NetLayout, OutputMap, RwfInit};

    #[test]
    fn constant_states_zero_gate_residual() {
        let (spec, p) = Regime::Hopf.load();
        let v = -20.0;
        let n = steady_state(&spec, &p, "n", v).unwrap();
        let states = vec![
            StateBatch {
                value: vec![v],
                dvalue: vec![0.0],
            },
            StateBatch {
                value: vec![n],
                dvalue: vec![0.0],
            },
        ];
        let wrt = spec.indices(RoleFilter::Estimated);
        let core = residual_core(&spec, p.values(), &wrt, &[1.0], &states, ResidualScaling::None).unwrap();
        assert!(core.losses[1] < 1e-28);
        assert!(core.losses[0] > 0.0);
    }

    #[test]
    fn non_finite_residual_names_equation() {
        let (spec, p) = Regime::Hopf.load();
        let states = vec![
            StateBatch {
                value: vec![0.0],
                dvalue: vec![f64::NAN],
            },
            StateBatch {
                value: vec![0.5],
                dvalue: vec![0.0],
            },
        ];
        let err = residual_core(&spec, p.values(), &[], &[3.5], &states, ResidualScaling::None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("V equation") && msg.contains("3.5"), "{msg}");
    }

    #[test]
    fn z_gradient_matches_differences() {
        for scaling in [ResidualScaling::None, ResidualScaling::Timescale] {
            check_z_gradient(scaling);
        }
    }

    fn check_z_gradient(scaling: ResidualScaling) {
        let (spec, truth) = Regime::Hopf.load();
        let nets = spec
            .state_names
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let emb = FourierEmbedding::hybrid(vec![0.05, 0.2], j, 3).unwrap();
                init_network(&NetLayout { hidden: vec![6] }, emb, OutputMap::for_state(s), RwfInit::default(), j as u64)
                    .unwrap()
            })
            .collect();
        let bundle = NetBundle {
            nets,
            trainable: vec![false, true],
        };
        let mut cp = ConstrainedParams::from_params(&spec, &truth).unwrap();
        for (k, z) in cp.z.iter_mut().enumerate() {
            *z += 0.05 * k as f64 - 0.2;
        }
        let ts = [1.0, 17.0, 60.0, 133.0];
        let w = [0.7, 1.3];
        let (_, g) = stage_loss(&bundle, &spec, &truth, &cp, &ts, &w, None, scaling).unwrap();
        for k in 0..cp.len() {
            let h = 1e-4;
            let at = |dz: f64| {
                let mut cpp = cp.clone();
                cpp.z[k] += dz;
                stage_loss(&bundle, &spec, &truth, &cpp, &ts, &w, None, scaling).unwrap().0
            };
            // fourth-order central stencil
            let fd = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            let err = (fd - g.z[k]).abs() / fd.abs().max(g.z[k].abs()).max(1e-6);
            assert!(err < 1e-5, "{scaling:?} z[{k}]: {} vs {fd}", g.z[k]);
        }
        assert!(g.nets[0].is_empty());
    }
}
