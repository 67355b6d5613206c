//! Ground-truth trajectory generation and observation noise.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelId, ModelParams, ModelSpec};

/// Uniformly sampled scalar signal; sample `i` sits at `t0 + i * dt` (ms).
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    pub t0: f64,
    pub dt: f64,
    pub values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(t0: f64, dt: f64, values: Vec<f64>) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::contract(format!("time step must be positive, got {dt}")));
        }
        Ok(TimeSeries { t0, dt, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.time(i)).collect()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.len() as f64
    }

    /// Population (1/N) standard deviation.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.len() as f64).sqrt()
    }
}

/// Vector-valued trajectory on a uniform grid, stored row-major (`N x d`).
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub model: ModelId,
    pub state_names: Vec<String>,
    pub t0: f64,
    pub dt: f64,
    data: Vec<f64>,
}

impl Trajectory {
    pub fn from_rows(
        model: ModelId,
        state_names: Vec<String>,
        t0: f64,
        dt: f64,
        data: Vec<f64>,
    ) -> Result<Self> {
        let d = state_names.len();
        if d == 0 || data.len() % d != 0 {
            return Err(Error::contract("trajectory data is not a whole number of rows"));
        }
        if !(dt > 0.0) {
            return Err(Error::contract(format!("time step must be positive, got {dt}")));
        }
        if data.len() / d < 2 {
            return Err(Error::contract("trajectory needs at least two rows"));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput("trajectory entry".into()));
        }
        Ok(Trajectory {
            model,
            state_names,
            t0,
            dt,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.state_names.len()
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn duration(&self) -> f64 {
        (self.len() - 1) as f64 * self.dt
    }

    /// One state component as a [`TimeSeries`].
    pub fn component(&self, j: usize) -> TimeSeries {
        let d = self.dim();
        TimeSeries {
            t0: self.t0,
            dt: self.dt,
            values: self.data.iter().skip(j).step_by(d).copied().collect(),
        }
    }

    pub fn component_by_name(&self, name: &str) -> Result<TimeSeries> {
        let j = self
            .state_names
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::Unknown {
                kind: "state",
                name: name.to_string(),
            })?;
        Ok(self.component(j))
    }

    /// Writes `t,<state names...>` CSV with round-trip float formatting.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "t")?;
        for s in &self.state_names {
            write!(w, ",{s}")?;
        }
        writeln!(w)?;
        for i in 0..self.len() {
            write!(w, "{:?}", self.time(i))?;
            for x in self.row(i) {
                write!(w, ",{x:?}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Reads a CSV written by [`Trajectory::write_csv`]. The grid is recovered
    /// from the first two time stamps.
    pub fn read_csv<R: BufRead>(model: ModelId, r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::contract("empty CSV"))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.first() != Some(&"t") || cols.len() < 2 {
            return Err(Error::contract("CSV header must start with `t`"));
        }
        let names: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
        let mut times = Vec::new();
        let mut data = Vec::new();
        for (ln, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.trim().split(',');
            let parse = |s: Option<&str>| -> Result<f64> {
                s.ok_or_else(|| Error::contract(format!("short CSV row {}", ln + 2)))?
                    .parse::<f64>()
                    .map_err(|e| Error::contract(format!("CSV row {}: {e}", ln + 2)))
            };
            times.push(parse(it.next())?);
            for _ in 0..names.len() {
                data.push(parse(it.next())?);
            }
        }
        if times.len() < 2 {
            return Err(Error::contract("CSV needs at least two rows"));
        }
        let dt = times[1] - times[0];
        for (i, t) in times.iter().enumerate() {
            let expect = times[0] + i as f64 * dt;
            if (t - expect).abs() > 1e-6 * dt.max(1.0) {
                return Err(Error::contract(format!("non-uniform grid at row {}", i + 2)));
            }
        }
        Trajectory::from_rows(model, names, times[0], dt, data)
    }
}

/// Integrates with Heun's explicit trapezoid method:
/// `x* = x + dt F(x)`, `x' = x + dt/2 (F(x) + F(x*))`.
pub fn integrate(
    spec: &ModelSpec,
    params: &ModelParams,
    x0: &[f64],
    dt: f64,
    n_steps: usize,
) -> Result<Trajectory> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::contract(format!("time step must be positive, got {dt}")));
    }
    if x0.len() != spec.dim() {
        return Err(Error::contract(format!(
            "initial state has length {}, expected {}",
            x0.len(),
            spec.dim()
        )));
    }
    if x0.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput("initial state".into()));
    }
    spec.validate_len(params)?;
    let d = spec.dim();
    let p = params.values();
    let mut data = Vec::with_capacity((n_steps + 1) * d);
    data.extend_from_slice(x0);
    let mut x = x0.to_vec();
    let mut f0 = vec![0.0; d];
    let mut f1 = vec![0.0; d];
    let mut xs = vec![0.0; d];
    for step in 1..=n_steps {
        spec.rhs_into(&x, p, &mut f0);
        for i in 0..d {
            xs[i] = x[i] + dt * f0[i];
        }
        spec.rhs_into(&xs, p, &mut f1);
        for i in 0..d {
            x[i] += 0.5 * dt * (f0[i] + f1[i]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationBlowup {
                step,
                detail: format!("state {x:?}"),
            });
        }
        data.extend_from_slice(&x);
    }
    Trajectory::from_rows(spec.id, spec.state_names.clone(), 0.0, dt, data)
}

/// Keeps rows `0, stride, 2*stride, ...`.
pub fn downsample(traj: &Trajectory, stride: usize) -> Result<Trajectory> {
    if stride == 0 {
        return Err(Error::contract("stride must be at least 1"));
    }
    let d = traj.dim();
    let mut data = Vec::with_capacity(traj.len() / stride * d + d);
    for i in (0..traj.len()).step_by(stride) {
        data.extend_from_slice(traj.row(i));
    }
    Trajectory::from_rows(
        traj.model,
        traj.state_names.clone(),
        traj.t0,
        traj.dt * stride as f64,
        data,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// `V + r * std(V) * eps`.
    Relative,
    /// `V + r * mean(V) * eps`.
    Absolute,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub level: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn relative(level: f64, seed: u64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Relative,
            level,
            seed,
        }
    }

    pub fn absolute(level: f64, seed: u64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Absolute,
            level,
            seed,
        }
    }

    /// Parses `relative:0.01` / `absolute:0.03`.
    pub fn parse(s: &str, seed: u64) -> Result<Self> {
        let (kind, level) = s
            .split_once(':')
            .ok_or_else(|| Error::contract(format!("noise must be kind:level, got `{s}`")))?;
        let level: f64 = level
            .parse()
            .map_err(|_| Error::contract(format!("bad noise level `{level}`")))?;
        let kind = match kind {
            "relative" => NoiseKind::Relative,
            "absolute" => NoiseKind::Absolute,
            other => {
                return Err(Error::Unknown {
                    kind: "noise kind",
                    name: other.into(),
                })
            }
        };
        if !(level >= 0.0) {
            return Err(Error::contract("noise level must be non-negative"));
        }
        Ok(NoiseSpec { kind, level, seed })
    }
}

/// Adds seeded Gaussian observation noise. Normals come from a ChaCha8 stream
/// seeded with `ns.seed`, mapped through `rand_distr::StandardNormal`.
pub fn add_noise(series: &TimeSeries, ns: &NoiseSpec) -> Result<TimeSeries> {
    if series.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("series to perturb".into()));
    }
    if !(ns.level >= 0.0) {
        return Err(Error::contract("noise level must be non-negative"));
    }
    if ns.level == 0.0 {
        return Ok(series.clone());
    }
    let scale = match ns.kind {
        NoiseKind::Relative => ns.level * series.std(),
        NoiseKind::Absolute => ns.level * series.mean(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(ns.seed);
    let values = series
        .values
        .iter()
        .map(|v| {
            let e: f64 = StandardNormal.sample(&mut rng);
            v + scale * e
        })
        .collect();
    Ok(TimeSeries {
        t0: series.t0,
        dt: series.dt,
        values,
    })
}

/// Warm-up simulated and discarded before the recorded window, in ms.
pub const DEFAULT_TRANSIENT_MS: f64 = 2000.0;

/// Data-generation protocol for one model: integration step, stride, discarded
/// warm-up and recorded window. The recorded window starts at `t = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Protocol {
    pub dt: f64,
    pub stride: usize,
    pub transient_ms: f64,
    pub duration_ms: f64,
}

impl Protocol {
    pub fn for_model(id: ModelId) -> Self {
        match id {
            ModelId::Sml => Protocol {
                dt: 0.1,
                stride: 1,
                transient_ms: DEFAULT_TRANSIENT_MS,
                duration_ms: 200.0,
            },
            ModelId::Bml => Protocol {
                dt: 0.1,
                stride: 1,
                transient_ms: DEFAULT_TRANSIENT_MS,
                duration_ms: 2000.0,
            },
            _ => Protocol {
                dt: 0.01,
                stride: 10,
                transient_ms: DEFAULT_TRANSIENT_MS,
                duration_ms: 6000.0,
            },
        }
    }

    pub fn n_steps(&self) -> usize {
        (self.duration_ms / self.dt).round() as usize
    }

    pub fn transient_steps(&self) -> usize {
        (self.transient_ms / self.dt).round() as usize
    }

    pub fn with_transient(mut self, ms: f64) -> Self {
        self.transient_ms = ms;
        self
    }
}

/// Advances `x0` by `n_steps` Heun steps without recording the path.
pub fn settle(
    spec: &ModelSpec,
    params: &ModelParams,
    x0: &[f64],
    dt: f64,
    n_steps: usize,
) -> Result<Vec<f64>> {
    // Chunked so memory stays bounded for long warm-ups.
    const CHUNK: usize = 10_000;
    let mut x = x0.to_vec();
    let mut done = 0;
    while done < n_steps {
        let k = CHUNK.min(n_steps - done);
        let tr = integrate(spec, params, &x, dt, k).map_err(|e| match e {
            Error::IntegrationBlowup { step, detail } => Error::IntegrationBlowup {
                step: done + step,
                detail,
            },
            e => e,
        })?;
        x = tr.row(tr.len() - 1).to_vec();
        done += k;
    }
    Ok(x)
}

/// Simulates a protocol from the standard initial condition, discards the
/// warm-up and returns the observation-grid trajectory.
pub fn generate_with(spec: &ModelSpec, params: &ModelParams, proto: &Protocol) -> Result<Trajectory> {
    if !(proto.transient_ms >= 0.0) || !(proto.duration_ms > 0.0) || proto.stride == 0 {
        return Err(Error::contract("protocol needs a positive window, stride and a non-negative warm-up"));
    }
    let x0 = crate::models::initial_state(spec, params);
    let start = settle(spec, params, &x0, proto.dt, proto.transient_steps())?;
    let traj = integrate(spec, params, &start, proto.dt, proto.n_steps())?;
    downsample(&traj, proto.stride)
}

/// [`generate_with`] using the model's standard protocol.
pub fn generate(spec: &ModelSpec, params: &ModelParams) -> Result<Trajectory> {
    generate_with(spec, params, &Protocol::for_model(spec.id))
}

impl ModelSpec {
    pub(crate) fn validate_len(&self, params: &ModelParams) -> Result<()> {
        if params.values().len() != self.params.len() {
            return Err(Error::contract(format!(
                "parameter vector has length {}, model {} expects {}",
                params.values().len(),
                self.id,
                self.params.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Regime;

    fn decay() -> (ModelSpec, ModelParams) {
        let spec = ModelSpec::new(ModelId::Linear { dim: 1 });
        let p = spec.default_params();
        (spec, p)
    }

    #[test]
    fn one_heun_step_by_hand() {
        let (spec, p) = decay();
        let tr = integrate(&spec, &p, &[1.0], 0.1, 1).unwrap();
        assert!((tr.row(1)[0] - 0.905).abs() < 1e-15);
        assert_eq!(tr.len(), 2);
    }

    #[test]
    fn sml_window_has_2001_rows() {
        let (spec, p) = Regime::Hopf.load();
        let tr = generate(&spec, &p).unwrap();
        assert_eq!(tr.len(), 2001);
        assert_eq!(tr.dt, 0.1);
    }

    #[test]
    fn warmup_shifts_the_window() {
        let (spec, p) = decay();
        let proto = Protocol {
            dt: 0.01,
            stride: 1,
            transient_ms: 30.0,
            duration_ms: 1.0,
        };
        let tr = generate_with(&spec, &p, &proto).unwrap();
        let direct = integrate(&spec, &p, &crate::models::initial_state(&spec, &p), 0.01, 3100).unwrap();
        assert_eq!(tr.len(), 101);
        assert_eq!(tr.t0, 0.0);
        for i in 0..tr.len() {
            assert!((tr.row(i)[0] - direct.row(3000 + i)[0]).abs() <= 1e-15 * direct.row(3000 + i)[0].abs());
        }
    }

    #[test]
    fn downsample_index_arithmetic() {
        let (spec, p) = decay();
        let tr = integrate(&spec, &p, &[1.0], 0.1, 10).unwrap();
        let ds = downsample(&tr, 5).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.row(1), tr.row(5));
        assert_eq!(ds.row(2), tr.row(10));
        assert!((ds.dt - 0.5).abs() < 1e-15);
        assert_eq!(downsample(&tr, 1).unwrap(), tr);
        assert!(downsample(&tr, 0).is_err());
    }

    #[test]
    fn blowup_reports_step() {
        let spec = ModelSpec::new(ModelId::Linear { dim: 1 });
        let p = spec.default_params().with("a11", 1e4).unwrap();
        match integrate(&spec, &p, &[1.0], 1.0, 500) {
            Err(Error::IntegrationBlowup { step, .. }) => assert!(step > 1),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let s = TimeSeries::new(0.0, 0.1, vec![1.0, -2.0, 3.5, 0.25]).unwrap();
        assert_eq!(add_noise(&s, &NoiseSpec::relative(0.0, 9)).unwrap(), s);
    }

    #[test]
    fn noise_is_seed_reproducible() {
        let s = TimeSeries::new(0.0, 0.1, (0..500).map(|i| (i as f64 * 0.1).sin()).collect())
            .unwrap();
        let a = add_noise(&s, &NoiseSpec::relative(0.05, 3)).unwrap();
        let b = add_noise(&s, &NoiseSpec::relative(0.05, 3)).unwrap();
        let c = add_noise(&s, &NoiseSpec::relative(0.05, 4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let (spec, p) = Regime::Hopf.load();
        let x0 = crate::models::initial_state(&spec, &p);
        let tr = integrate(&spec, &p, &x0, 0.1, 50).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,V,n\n"));
        let back = Trajectory::read_csv(ModelId::Sml, &buf[..]).unwrap();
        assert_eq!(back.len(), tr.len());
        for i in 0..tr.len() {
            assert_eq!(back.row(i), tr.row(i));
        }
    }

    #[test]
    fn noise_spec_parsing() {
        let n = NoiseSpec::parse("absolute:0.03", 1).unwrap();
        assert_eq!(n.kind, NoiseKind::Absolute);
        assert_eq!(n.level, 0.03);
        assert!(NoiseSpec::parse("relative", 1).is_err());
        assert!(NoiseSpec::parse("pink:0.1", 1).is_err());
        assert!(NoiseSpec::parse("relative:-1", 1).is_err());
    }
}
