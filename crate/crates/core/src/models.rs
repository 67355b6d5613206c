//! Conductance-based neuron models as evaluatable vector fields.
//!
//! Three systems are provided: the 2-D spiking Morris–Lecar model (`sml`),
//! the 3-D bursting Morris–Lecar model with a slow calcium variable (`bml`),
//! and the pre-Bötzinger complex model (`pbc`). The fast `(V, n)` subsystem of
//! the pBC model with `h` frozen as a parameter is available as `pbc-fast`
//! for bifurcation sweeps. Two small analytic systems (`linear`, `saddle-node`)
//! back the numerical tests.
//!
//! Parameters are carried in the units of the source tables without
//! conversion: Morris–Lecar conductances, capacitance and currents in model
//! units, potentials in mV; pBC conductances in nS, capacitance in pF, times
//! in ms, potentials in mV.

use std::fmt;

use nalgebra::DMatrix;
use serde::de::Deserializer;
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};

use crate::dual::{Dual, Scalar};
use crate::error::{Error, Result};

/// Maximum number of tangent directions used when differentiating a vector field.
pub const MAX_DUAL: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelId {
    Sml,
    Bml,
    Pbc,
    PbcFast,
    /// `dX/dt = A X`, parameters are the entries of `A` in row-major order.
    Linear { dim: usize },
    /// `dx/dt = mu - x^2`.
    SaddleNode,
}

impl ModelId {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sml" => Ok(ModelId::Sml),
            "bml" => Ok(ModelId::Bml),
            "pbc" => Ok(ModelId::Pbc),
            "pbc-fast" => Ok(ModelId::PbcFast),
            "saddle-node" => Ok(ModelId::SaddleNode),
            _ => Err(Error::Unknown {
                kind: "model",
                name: s.to_string(),
            }),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelId::Sml => "sml",
            ModelId::Bml => "bml",
            ModelId::Pbc => "pbc",
            ModelId::PbcFast => "pbc-fast",
            ModelId::Linear { .. } => "linear",
            ModelId::SaddleNode => "saddle-node",
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Positive,
    Negative,
    Free,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Estimated,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoleFilter {
    Estimated,
    Fixed,
    All,
}

impl RoleFilter {
    fn accepts(self, role: Role) -> bool {
        match self {
            RoleFilter::All => true,
            RoleFilter::Estimated => role == Role::Estimated,
            RoleFilter::Fixed => role == Role::Fixed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub default: f64,
    pub sign: Sign,
    pub role: Role,
    pub unit: String,
}

fn meta(name: &str, default: f64, sign: Sign, role: Role, unit: &str) -> ParamMeta {
    ParamMeta {
        name: name.to_string(),
        default,
        sign,
        role,
        unit: unit.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub id: ModelId,
    pub state_names: Vec<String>,
    pub params: Vec<ParamMeta>,
    pub observed_index: usize,
}

// Parameter slots, in declaration order.
mod ml {
    pub const G_L: usize = 0;
    pub const G_K: usize = 1;
    pub const G_CA: usize = 2;
    pub const PHI: usize = 3;
    pub const V1: usize = 4;
    pub const V2: usize = 5;
    pub const V3: usize = 6;
    pub const V4: usize = 7;
    // SML fixed
    pub const S_CM: usize = 8;
    pub const S_EL: usize = 9;
    pub const S_EK: usize = 10;
    pub const S_ECA: usize = 11;
    pub const S_IAPP: usize = 12;
    // BML
    pub const G_KCA: usize = 8;
    pub const B_CM: usize = 9;
    pub const B_EL: usize = 10;
    pub const B_EK: usize = 11;
    pub const B_ECA: usize = 12;
    pub const B_IAPP: usize = 13;
    pub const B_EPS: usize = 14;
    pub const B_MU: usize = 15;
}

mod pbc {
    pub const G_NAP: usize = 0;
    pub const G_L: usize = 1;
    pub const G_K: usize = 2;
    pub const G_NA: usize = 3;
    pub const V_L: usize = 4;
    pub const V_K: usize = 5;
    pub const V_NA: usize = 6;
    pub const CM: usize = 7;
    pub const IAPP: usize = 8;
    pub const TH_M: usize = 9;
    pub const SG_M: usize = 10;
    pub const TH_N: usize = 11;
    pub const SG_N: usize = 12;
    pub const TH_MP: usize = 13;
    pub const SG_MP: usize = 14;
    pub const TH_H: usize = 15;
    pub const SG_H: usize = 16;
    pub const TAU_N: usize = 17;
    pub const TAU_H: usize = 18;
    /// Frozen slow variable of the fast subsystem.
    pub const H_FROZEN: usize = 19;
}

fn morris_lecar_common(extra_estimated: bool) -> Vec<ParamMeta> {
    use Role::*;
    use Sign::*;
    let mut v = vec![
        meta("g_L", 2.0, Positive, Estimated, "model conductance"),
        meta("g_K", 8.0, Positive, Estimated, "model conductance"),
        meta("g_Ca", 4.0, Positive, Estimated, "model conductance"),
        meta("phi", 0.04, Positive, Estimated, "dimensionless"),
        meta("V1", -1.2, Negative, Estimated, "mV"),
        meta("V2", 18.0, Positive, Estimated, "mV"),
        meta("V3", 2.0, Positive, Estimated, "mV"),
        meta("V4", 30.0, Positive, Estimated, "mV"),
    ];
    if extra_estimated {
        v.push(meta("g_KCa", 0.25, Positive, Estimated, "model conductance"));
    }
    v.extend([
        meta("C_m", 20.0, Positive, Fixed, "model capacitance"),
        meta("E_L", -60.0, Free, Fixed, "mV"),
        meta("E_K", -84.0, Free, Fixed, "mV"),
        meta("E_Ca", 120.0, Free, Fixed, "mV"),
        meta("I_app", 100.0, Free, Fixed, "model current"),
    ]);
    v
}

fn pbc_params(fast: bool) -> Vec<ParamMeta> {
    use Role::*;
    use Sign::*;
    let mut v = vec![
        meta("g_NaP", 2.0, Positive, Estimated, "nS"),
        meta("g_L", 2.3, Positive, Estimated, "nS"),
        meta("g_K", 11.2, Positive, Estimated, "nS"),
        meta("g_Na", 28.0, Positive, Estimated, "nS"),
        meta("V_L", -58.0, Negative, Estimated, "mV"),
        meta("V_K", -85.0, Negative, Estimated, "mV"),
        meta("V_Na", 50.0, Positive, Estimated, "mV"),
        meta("C_m", 21.0, Positive, Fixed, "pF"),
        meta("I_app", 0.0, Free, Fixed, "pA"),
        meta("theta_m", -34.0, Free, Fixed, "mV"),
        meta("sigma_m", -5.0, Free, Fixed, "mV"),
        meta("theta_n", -29.0, Free, Fixed, "mV"),
        meta("sigma_n", -4.0, Free, Fixed, "mV"),
        meta("theta_mp", -40.0, Free, Fixed, "mV"),
        meta("sigma_mp", -6.0, Free, Fixed, "mV"),
        meta("theta_h", -48.0, Free, Fixed, "mV"),
        meta("sigma_h", 5.0, Free, Fixed, "mV"),
        meta("tau_n_bar", 10.0, Positive, Fixed, "ms"),
        meta("tau_h_bar", 10_000.0, Positive, Fixed, "ms"),
    ];
    if fast {
        v.push(meta("h", 0.5, Free, Fixed, "dimensionless"));
    }
    v
}

impl ModelSpec {
    pub fn new(id: ModelId) -> Self {
        let names = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        match id {
            ModelId::Sml => ModelSpec {
                id,
                state_names: names(&["V", "n"]),
                params: morris_lecar_common(false),
                observed_index: 0,
            },
            ModelId::Bml => {
                let mut params = morris_lecar_common(true);
                params.extend([
                    meta("eps", 0.005, Sign::Positive, Role::Fixed, "dimensionless"),
                    meta("mu", 0.02, Sign::Positive, Role::Fixed, "dimensionless"),
                ]);
                ModelSpec {
                    id,
                    state_names: names(&["V", "n", "Ca"]),
                    params,
                    observed_index: 0,
                }
            }
            ModelId::Pbc => ModelSpec {
                id,
                state_names: names(&["V", "n", "h"]),
                params: pbc_params(false),
                observed_index: 0,
            },
            ModelId::PbcFast => ModelSpec {
                id,
                state_names: names(&["V", "n"]),
                params: pbc_params(true),
                observed_index: 0,
            },
            ModelId::Linear { dim } => {
                let mut params = Vec::with_capacity(dim * dim);
                for i in 0..dim {
                    for j in 0..dim {
                        let d = if i == j { -1.0 } else { 0.0 };
                        params.push(meta(
                            &format!("a{}{}", i + 1, j + 1),
                            d,
                            Sign::Free,
                            Role::Fixed,
                            "1/ms",
                        ));
                    }
                }
                ModelSpec {
                    id,
                    state_names: (0..dim).map(|i| format!("x{}", i + 1)).collect(),
                    params,
                    observed_index: 0,
                }
            }
            ModelId::SaddleNode => ModelSpec {
                id,
                state_names: names(&["x"]),
                params: vec![meta("mu", 1.0, Sign::Free, Role::Fixed, "")],
                observed_index: 0,
            },
        }
    }

    /// Looks up a model by its catalog id (`sml`, `bml`, `pbc`, `pbc-fast`, `saddle-node`).
    pub fn by_name(name: &str) -> Result<Self> {
        Ok(Self::new(ModelId::parse(name)?))
    }

    pub fn dim(&self) -> usize {
        self.state_names.len()
    }

    pub fn param_index(&self, name: &str) -> Result<usize> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::Unknown {
                kind: "parameter",
                name: name.to_string(),
            })
    }

    pub fn state_index(&self, name: &str) -> Result<usize> {
        self.state_names
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::Unknown {
                kind: "state",
                name: name.to_string(),
            })
    }

    /// Slot indices (into the full parameter vector) selected by `filter`, in declaration order.
    pub fn indices(&self, filter: RoleFilter) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| filter.accepts(p.role))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn estimated_names(&self) -> Vec<String> {
        self.indices(RoleFilter::Estimated)
            .into_iter()
            .map(|i| self.params[i].name.clone())
            .collect()
    }

    pub fn default_params(&self) -> ModelParams {
        ModelParams {
            names: self.params.iter().map(|p| p.name.clone()).collect(),
            values: self.params.iter().map(|p| p.default).collect(),
        }
    }

    /// Checks completeness and the declared sign constraints.
    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        if params.names.len() != self.params.len()
            || params.names.iter().zip(&self.params).any(|(a, b)| *a != b.name)
        {
            return Err(Error::contract(format!(
                "parameter set does not match model {}",
                self.id
            )));
        }
        for (m, &v) in self.params.iter().zip(&params.values) {
            if !v.is_finite() {
                return Err(Error::NonFiniteInput(format!("parameter {} = {v}", m.name)));
            }
            let ok = match m.sign {
                Sign::Positive => v > 0.0,
                Sign::Negative => v < 0.0,
                Sign::Free => true,
            };
            if !ok {
                return Err(Error::contract(format!(
                    "parameter {} = {v} violates its {:?} sign constraint",
                    m.name, m.sign
                )));
            }
        }
        Ok(())
    }

    /// Flattens the parameters selected by `filter` in declaration order.
    pub fn param_vector(&self, params: &ModelParams, filter: RoleFilter) -> Vec<f64> {
        self.indices(filter)
            .into_iter()
            .map(|i| params.values[i])
            .collect()
    }

    /// Inverse of [`ModelSpec::param_vector`]: overwrites the selected slots of `base`.
    pub fn param_from_vector(
        &self,
        base: &ModelParams,
        filter: RoleFilter,
        v: &[f64],
    ) -> Result<ModelParams> {
        let idx = self.indices(filter);
        if idx.len() != v.len() {
            return Err(Error::contract(format!(
                "expected {} values, got {}",
                idx.len(),
                v.len()
            )));
        }
        let mut out = base.clone();
        for (&i, &x) in idx.iter().zip(v) {
            out.values[i] = x;
        }
        Ok(out)
    }

    fn check_inputs(&self, state: &[f64], params: &ModelParams) -> Result<()> {
        if state.len() != self.dim() {
            return Err(Error::contract(format!(
                "state has length {}, model {} expects {}",
                state.len(),
                self.id,
                self.dim()
            )));
        }
        if params.values.len() != self.params.len() {
            return Err(Error::contract(format!(
                "parameter vector has length {}, model {} expects {}",
                params.values.len(),
                self.id,
                self.params.len()
            )));
        }
        if let Some(x) = state.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput(format!("state component {x}")));
        }
        if let Some(x) = params.values.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput(format!("parameter value {x}")));
        }
        Ok(())
    }

    /// `dX/dt` at `state`.
    pub fn eval_vector_field(&self, state: &[f64], params: &ModelParams) -> Result<Vec<f64>> {
        self.check_inputs(state, params)?;
        let mut out = vec![0.0; self.dim()];
        rhs(self.id, state, &params.values, &mut out);
        Ok(out)
    }

    /// Unchecked evaluation into a caller buffer, used in inner loops.
    #[inline]
    pub fn rhs_into(&self, state: &[f64], params: &[f64], out: &mut [f64]) {
        rhs(self.id, state, params, out);
    }

    /// Central-difference Jacobian `dF_i/dX_j` with step `1e-6 * max(1, |X_j|)`.
    pub fn eval_jacobian(&self, state: &[f64], params: &ModelParams) -> Result<DMatrix<f64>> {
        self.check_inputs(state, params)?;
        Ok(self.jacobian_unchecked(state, &params.values))
    }

    pub(crate) fn jacobian_unchecked(&self, state: &[f64], params: &[f64]) -> DMatrix<f64> {
        let d = self.dim();
        let mut jac = DMatrix::zeros(d, d);
        let mut xp = state.to_vec();
        let mut fp = vec![0.0; d];
        let mut fm = vec![0.0; d];
        for j in 0..d {
            let h = 1e-6 * state[j].abs().max(1.0);
            xp[j] = state[j] + h;
            rhs(self.id, &xp, params, &mut fp);
            xp[j] = state[j] - h;
            rhs(self.id, &xp, params, &mut fm);
            xp[j] = state[j];
            for i in 0..d {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        jac
    }

    /// Vector field with exact partials with respect to the state and to the
    /// parameter slots listed in `wrt`. Returns `(F, dF/dX [d x d], dF/dp [d x wrt.len()])`,
    /// matrices row-major.
    pub fn eval_with_partials(
        &self,
        state: &[f64],
        params: &[f64],
        wrt: &[usize],
        f: &mut [f64],
        dfdx: &mut [f64],
        dfdp: &mut [f64],
    ) {
        let id = self.id;
        self.dual_eval(|x, p, out| rhs(id, x, p, out), state, params, wrt, f, dfdx, dfdp);
    }

    /// Per-equation residual scale with partials, laid out as in
    /// [`ModelSpec::eval_with_partials`]. Gate equations `dx/dt = (x_inf - x) / tau_x`
    /// get `tau_x(V) / tau_bar_x`, which turns their residual into the relaxation
    /// form `tau dx/dt - (x_inf - x)` up to constants; other equations get 1.
    pub fn residual_scale_with_partials(
        &self,
        state: &[f64],
        params: &[f64],
        wrt: &[usize],
        s: &mut [f64],
        dsdx: &mut [f64],
        dsdp: &mut [f64],
    ) {
        let id = self.id;
        self.dual_eval(|x, p, out| residual_scale(id, x, p, out), state, params, wrt, s, dsdx, dsdp);
    }

    #[allow(clippy::too_many_arguments)]
    fn dual_eval(
        &self,
        func: impl Fn(&[Dual<MAX_DUAL>], &[Dual<MAX_DUAL>], &mut [Dual<MAX_DUAL>]),
        state: &[f64],
        params: &[f64],
        wrt: &[usize],
        f: &mut [f64],
        dfdx: &mut [f64],
        dfdp: &mut [f64],
    ) {
        let d = self.dim();
        assert!(d + wrt.len() <= MAX_DUAL, "too many tangent directions");
        let mut xs = [Dual::<MAX_DUAL>::constant(0.0); 4];
        for i in 0..d {
            xs[i] = Dual::var(state[i], i);
        }
        let mut ps = [Dual::<MAX_DUAL>::constant(0.0); 24];
        debug_assert!(params.len() <= ps.len());
        for (i, &p) in params.iter().enumerate() {
            ps[i] = Dual::constant(p);
        }
        for (k, &slot) in wrt.iter().enumerate() {
            ps[slot] = Dual::var(params[slot], d + k);
        }
        let mut out = [Dual::<MAX_DUAL>::constant(0.0); 4];
        func(&xs[..d], &ps[..params.len()], &mut out[..d]);
        let np = wrt.len();
        for i in 0..d {
            f[i] = out[i].v;
            for j in 0..d {
                dfdx[i * d + j] = out[i].d[j];
            }
            for k in 0..np {
                dfdp[i * np + k] = out[i].d[d + k];
            }
        }
    }
}

/// Parameter values, ordered as the owning model declares them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i])
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Unknown {
                kind: "parameter",
                name: name.to_string(),
            })?;
        self.values[i] = value;
        Ok(())
    }

    pub fn with(mut self, name: &str, value: f64) -> Result<Self> {
        self.set(name, value)?;
        Ok(self)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().copied())
    }

    /// Builds a complete parameter set for `spec` from a name→value map. Missing
    /// names fall back to the model defaults only when `allow_defaults` is set.
    pub fn from_pairs<'a>(
        spec: &ModelSpec,
        pairs: impl IntoIterator<Item = (&'a str, f64)>,
        allow_defaults: bool,
    ) -> Result<Self> {
        let mut out = spec.default_params();
        let mut seen = vec![false; out.values.len()];
        for (name, v) in pairs {
            let i = spec.param_index(name)?;
            out.values[i] = v;
            seen[i] = true;
        }
        if !allow_defaults {
            if let Some(i) = seen.iter().position(|s| !s) {
                return Err(Error::contract(format!(
                    "parameter {} missing",
                    spec.params[i].name
                )));
            }
        }
        Ok(out)
    }
}

impl Serialize for ModelParams {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(self.values.len()))?;
        for (k, v) in self.iter() {
            m.serialize_entry(k, &v)?;
        }
        m.end()
    }
}

/// Name→value pairs as read from JSON; resolve against a model with
/// [`ModelParams::from_pairs`].
#[derive(Clone, Debug, Default)]
pub struct ParamMap(pub Vec<(String, f64)>);

impl<'de> Deserialize<'de> for ParamMap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = serde_json::Map::<String, serde_json::Value>::deserialize(d)?;
        let mut out = Vec::with_capacity(m.len());
        for (k, v) in m {
            let x = v
                .as_f64()
                .ok_or_else(|| serde::de::Error::custom(format!("{k} is not a number")))?;
            out.push((k, x));
        }
        Ok(ParamMap(out))
    }
}

impl ParamMap {
    pub fn resolve(&self, spec: &ModelSpec, allow_defaults: bool) -> Result<ModelParams> {
        ModelParams::from_pairs(
            spec,
            self.0.iter().map(|(k, v)| (k.as_str(), *v)),
            allow_defaults,
        )
    }
}

// Auxiliary gating functions. All are smooth for finite voltage.

/// Morris–Lecar `m_inf(V) = (1 + tanh((V - V1)/V2)) / 2`.
pub fn ml_m_inf<T: Scalar>(v: T, v1: T, v2: T) -> T {
    (((v - v1) / v2).tanh() + 1.0) * 0.5
}

/// Morris–Lecar `n_inf(V) = (1 + tanh((V - V3)/V4)) / 2`.
pub fn ml_n_inf<T: Scalar>(v: T, v3: T, v4: T) -> T {
    (((v - v3) / v4).tanh() + 1.0) * 0.5
}

/// Morris–Lecar `1 / tau_n(V) = cosh((V - V3) / (2 V4))`.
pub fn ml_inv_tau_n<T: Scalar>(v: T, v3: T, v4: T) -> T {
    ((v - v3) / (v4 * 2.0)).cosh()
}

/// Logistic `1 / (1 + exp((V - theta)/sigma))`, written through `tanh` so it
/// cannot overflow.
pub fn pbc_x_inf<T: Scalar>(v: T, theta: T, sigma: T) -> T {
    (-((v - theta) / (sigma * 2.0)).tanh() + 1.0) * 0.5
}

/// `1 / tau_x(V) = cosh((V - theta)/(2 sigma)) / tau_bar`.
pub fn pbc_inv_tau<T: Scalar>(v: T, theta: T, sigma: T, tau_bar: T) -> T {
    ((v - theta) / (sigma * 2.0)).cosh() / tau_bar
}

/// BML calcium saturation `z = Ca / (Ca + 1)`.
pub fn bml_saturation<T: Scalar>(ca: T) -> T {
    ca / (ca + 1.0)
}

fn rhs<T: Scalar>(id: ModelId, x: &[T], p: &[T], out: &mut [T]) {
    match id {
        ModelId::Sml => {
            use ml::*;
            let (v, n) = (x[0], x[1]);
            let m_inf = ml_m_inf(v, p[V1], p[V2]);
            let i_ion = p[G_L] * (v - p[S_EL])
                + p[G_K] * n * (v - p[S_EK])
                + p[G_CA] * m_inf * (v - p[S_ECA]);
            out[0] = (p[S_IAPP] - i_ion) / p[S_CM];
            out[1] = p[PHI] * (ml_n_inf(v, p[V3], p[V4]) - n) * ml_inv_tau_n(v, p[V3], p[V4]);
        }
        ModelId::Bml => {
            use ml::*;
            let (v, n, ca) = (x[0], x[1], x[2]);
            let m_inf = ml_m_inf(v, p[V1], p[V2]);
            let i_ca = p[G_CA] * m_inf * (v - p[B_ECA]);
            let i_ion = p[G_L] * (v - p[B_EL])
                + p[G_K] * n * (v - p[B_EK])
                + i_ca
                + p[G_KCA] * bml_saturation(ca) * (v - p[B_EK]);
            out[0] = (p[B_IAPP] - i_ion) / p[B_CM];
            out[1] = p[PHI] * (ml_n_inf(v, p[V3], p[V4]) - n) * ml_inv_tau_n(v, p[V3], p[V4]);
            out[2] = p[B_EPS] * (-(p[B_MU] * i_ca) - ca);
        }
        ModelId::Pbc | ModelId::PbcFast => {
            use pbc::*;
            let (v, n) = (x[0], x[1]);
            let h = if id == ModelId::Pbc { x[2] } else { p[H_FROZEN] };
            let m_inf = pbc_x_inf(v, p[TH_M], p[SG_M]);
            let mp_inf = pbc_x_inf(v, p[TH_MP], p[SG_MP]);
            let i_ion = p[G_L] * (v - p[V_L])
                + p[G_K] * n.powi(4) * (v - p[V_K])
                + p[G_NA] * m_inf.powi(3) * (-n + 1.0) * (v - p[V_NA])
                + p[G_NAP] * mp_inf * h * (v - p[V_NA]);
            out[0] = (p[IAPP] - i_ion) / p[CM];
            out[1] = (pbc_x_inf(v, p[TH_N], p[SG_N]) - n)
                * pbc_inv_tau(v, p[TH_N], p[SG_N], p[TAU_N]);
            if id == ModelId::Pbc {
                out[2] = (pbc_x_inf(v, p[TH_H], p[SG_H]) - h)
                    * pbc_inv_tau(v, p[TH_H], p[SG_H], p[TAU_H]);
            }
        }
        ModelId::Linear { dim } => {
            for i in 0..dim {
                let mut acc = T::cst(0.0);
                for j in 0..dim {
                    acc = acc + p[i * dim + j] * x[j];
                }
                out[i] = acc;
            }
        }
        ModelId::SaddleNode => {
            out[0] = p[0] - x[0] * x[0];
        }
    }
}

fn residual_scale<T: Scalar>(id: ModelId, x: &[T], p: &[T], out: &mut [T]) {
    for o in out.iter_mut() {
        *o = T::cst(1.0);
    }
    match id {
        ModelId::Sml | ModelId::Bml => {
            use ml::*;
            out[1] = ml_inv_tau_n(x[0], p[V3], p[V4]).recip();
        }
        ModelId::Pbc | ModelId::PbcFast => {
            use pbc::*;
            out[1] = ((x[0] - p[TH_N]) / (p[SG_N] * 2.0)).cosh().recip();
            if id == ModelId::Pbc {
                out[2] = ((x[0] - p[TH_H]) / (p[SG_H] * 2.0)).cosh().recip();
            }
        }
        ModelId::Linear { .. } | ModelId::SaddleNode => {}
    }
}

/// Named ground-truth parameter sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Hopf,
    Snic,
    Homoclinic,
    SquareWave,
    Elliptic,
    PbcDefault,
}

impl Regime {
    pub const ALL: [Regime; 6] = [
        Regime::Hopf,
        Regime::Snic,
        Regime::Homoclinic,
        Regime::SquareWave,
        Regime::Elliptic,
        Regime::PbcDefault,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hopf" => Ok(Regime::Hopf),
            "snic" => Ok(Regime::Snic),
            "homoclinic" | "hc" => Ok(Regime::Homoclinic),
            "square-wave" | "squarewave" => Ok(Regime::SquareWave),
            "elliptic" => Ok(Regime::Elliptic),
            "pbc-default" | "pbc" => Ok(Regime::PbcDefault),
            _ => Err(Error::Unknown {
                kind: "regime",
                name: s.to_string(),
            }),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Hopf => "hopf",
            Regime::Snic => "snic",
            Regime::Homoclinic => "homoclinic",
            Regime::SquareWave => "square-wave",
            Regime::Elliptic => "elliptic",
            Regime::PbcDefault => "pbc-default",
        }
    }

    pub fn model(&self) -> ModelId {
        match self {
            Regime::Hopf | Regime::Snic | Regime::Homoclinic => ModelId::Sml,
            Regime::SquareWave | Regime::Elliptic => ModelId::Bml,
            Regime::PbcDefault => ModelId::Pbc,
        }
    }

    /// First regime listed for a model.
    pub fn default_for(id: ModelId) -> Result<Self> {
        Regime::ALL.iter().copied().find(|r| r.model() == id).ok_or_else(|| Error::Unknown {
            kind: "regime for model",
            name: id.as_str().to_string(),
        })
    }

    /// The model and its ground-truth parameter values for this regime.
    pub fn load(&self) -> (ModelSpec, ModelParams) {
        let spec = ModelSpec::new(self.model());
        let mut p = spec.default_params();
        let set = |p: &mut ModelParams, kv: &[(&str, f64)]| {
            for (k, v) in kv {
                p.set(k, *v).expect("preset names are declared by the model");
            }
        };
        match self {
            Regime::Hopf => set(&mut p, &[("phi", 0.04), ("V3", 2.0), ("V4", 30.0)]),
            Regime::Snic => set(&mut p, &[("phi", 0.067), ("V3", 12.0), ("V4", 17.4)]),
            Regime::Homoclinic => set(&mut p, &[("phi", 0.23), ("V3", 12.0), ("V4", 17.4)]),
            Regime::SquareWave => set(
                &mut p,
                &[
                    ("phi", 0.23),
                    ("g_Ca", 4.0),
                    ("V3", 12.0),
                    ("V4", 17.4),
                    ("g_KCa", 0.25),
                    ("I_app", 45.0),
                ],
            ),
            Regime::Elliptic => set(
                &mut p,
                &[
                    ("phi", 0.04),
                    ("g_Ca", 4.4),
                    ("V3", 2.0),
                    ("V4", 30.0),
                    ("g_KCa", 0.75),
                    ("I_app", 120.0),
                ],
            ),
            Regime::PbcDefault => {}
        }
        (spec, p)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Standard initial condition: `V = -60 mV`, gating variables at their
/// steady state for that voltage, `Ca = 1`.
pub fn initial_state(spec: &ModelSpec, params: &ModelParams) -> Vec<f64> {
    const V0: f64 = -60.0;
    let p = params.values();
    match spec.id {
        ModelId::Sml => vec![V0, ml_n_inf(V0, p[ml::V3], p[ml::V4])],
        ModelId::Bml => vec![V0, ml_n_inf(V0, p[ml::V3], p[ml::V4]), 1.0],
        ModelId::Pbc => vec![
            V0,
            pbc_x_inf(V0, p[pbc::TH_N], p[pbc::SG_N]),
            pbc_x_inf(V0, p[pbc::TH_H], p[pbc::SG_H]),
        ],
        ModelId::PbcFast => vec![V0, pbc_x_inf(V0, p[pbc::TH_N], p[pbc::SG_N])],
        ModelId::Linear { dim } => vec![1.0; dim],
        ModelId::SaddleNode => vec![0.0],
    }
}

/// Steady-state value of hidden variable `state` at voltage `v`, when the model
/// defines one (`n`, and `h` for pBC).
pub fn steady_state(spec: &ModelSpec, params: &ModelParams, state: &str, v: f64) -> Option<f64> {
    let p = params.values();
    match (spec.id, state) {
        (ModelId::Sml | ModelId::Bml, "n") => Some(ml_n_inf(v, p[ml::V3], p[ml::V4])),
        (ModelId::Pbc | ModelId::PbcFast, "n") => Some(pbc_x_inf(v, p[pbc::TH_N], p[pbc::SG_N])),
        (ModelId::Pbc, "h") => Some(pbc_x_inf(v, p[pbc::TH_H], p[pbc::SG_H])),
        _ => None,
    }
}

/// Hand-derived Jacobian of the spiking Morris–Lecar field.
pub fn sml_analytic_jacobian(state: &[f64], params: &ModelParams) -> [[f64; 2]; 2] {
    use ml::*;
    let p = params.values();
    let (v, n) = (state[0], state[1]);
    let (v1, v2, v3, v4) = (p[V1], p[V2], p[V3], p[V4]);
    let tm = ((v - v1) / v2).tanh();
    let m_inf = 0.5 * (1.0 + tm);
    let dm = 0.5 * (1.0 - tm * tm) / v2;
    let tn = ((v - v3) / v4).tanh();
    let n_inf = 0.5 * (1.0 + tn);
    let dn_inf = 0.5 * (1.0 - tn * tn) / v4;
    let arg = (v - v3) / (2.0 * v4);
    let c = arg.cosh();
    let dc = arg.sinh() / (2.0 * v4);
    let cm = p[S_CM];
    let dvdv = -(p[G_L] + p[G_K] * n + p[G_CA] * (dm * (v - p[S_ECA]) + m_inf)) / cm;
    let dvdn = -p[G_K] * (v - p[S_EK]) / cm;
    let dndv = p[PHI] * (dn_inf * c + (n_inf - n) * dc);
    let dndn = -p[PHI] * c;
    [[dvdv, dvdn], [dndv, dndn]]
}
