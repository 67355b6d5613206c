//! One-parameter bifurcation diagrams: equilibrium continuation with fold and
//! Hopf detection, stable-orbit voltage envelopes by direct simulation, and a
//! distance between two diagrams.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{initial_state, ModelId, ModelParams, ModelSpec};
use crate::sim::{integrate, settle, Protocol};

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 50;
const EVENT_TOL: f64 = 1e-4;
/// Eigenvalues with a smaller imaginary part count as real.
const IMAG_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stability {
    Stable,
    Unstable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Fold,
    Hopf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumPoint {
    pub bif_param: f64,
    pub state: Vec<f64>,
    pub eigen_real_parts: Vec<f64>,
    pub stability: Stability,
}

impl EquilibriumPoint {
    pub fn max_real_part(&self) -> f64 {
        self.eigen_real_parts.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BifurcationEvent {
    pub kind: EventKind,
    pub bif_param: f64,
    /// Final bisection bracket in the bifurcation parameter.
    pub bracket: (f64, f64),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumBranch {
    pub points: Vec<EquilibriumPoint>,
    pub events: Vec<BifurcationEvent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrbitSample {
    pub bif_param: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub period: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OrbitExtremaBranch {
    pub samples: Vec<OrbitSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BifurcationDiagram {
    pub model: ModelId,
    pub bif_param_name: String,
    pub range: (f64, f64),
    pub equilibria: Vec<EquilibriumBranch>,
    pub orbits: OrbitExtremaBranch,
    /// Parameter values where the period exceeds ten times its median.
    pub period_blowups: Vec<f64>,
}

impl BifurcationDiagram {
    pub fn events(&self) -> impl Iterator<Item = &BifurcationEvent> {
        self.equilibria.iter().flat_map(|b| b.events.iter())
    }

    pub fn events_of(&self, kind: EventKind) -> Vec<f64> {
        let mut v: Vec<f64> = self.events().filter(|e| e.kind == kind).map(|e| e.bif_param).collect();
        v.sort_by(f64::total_cmp);
        v
    }

    /// `bif_param, <state...>, max_re_eig, stability`
    pub fn write_equilibria_csv<W: Write>(&self, mut w: W, state_names: &[String]) -> Result<()> {
        write!(w, "bif_param")?;
        for s in state_names {
            write!(w, ",{s}")?;
        }
        writeln!(w, ",max_re_eig,stability")?;
        for b in &self.equilibria {
            for p in &b.points {
                write!(w, "{}", p.bif_param)?;
                for x in &p.state {
                    write!(w, ",{x}")?;
                }
                let tag = match p.stability {
                    Stability::Stable => "stable",
                    Stability::Unstable => "unstable",
                };
                writeln!(w, ",{},{tag}", p.max_real_part())?;
            }
        }
        Ok(())
    }

    /// `kind, bif_param`; period blow-ups are listed as `oscillation-boundary`.
    pub fn write_events_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "kind,bif_param")?;
        for e in self.events() {
            let kind = match e.kind {
                EventKind::Fold => "fold",
                EventKind::Hopf => "hopf",
            };
            writeln!(w, "{kind},{}", e.bif_param)?;
        }
        for p in &self.period_blowups {
            writeln!(w, "oscillation-boundary,{p}")?;
        }
        Ok(())
    }

    /// `bif_param, v_min, v_max, period` with an empty period when quiescent.
    pub fn write_orbits_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "bif_param,v_min,v_max,period")?;
        for s in &self.orbits.samples {
            let period = s.period.map(|p| p.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{period}", s.bif_param, s.v_min, s.v_max)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContinuationOptions {
    /// Parameter values of the coarse seeding grid.
    pub seed_grid: usize,
    /// Random Newton starts per grid value.
    pub starts_per_value: usize,
    pub seed: u64,
    /// Largest step, in scaled arclength (state and parameter normalized).
    pub max_step: f64,
    pub min_step: f64,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        ContinuationOptions {
            seed_grid: 64,
            starts_per_value: 8,
            seed: 0,
            max_step: 0.01,
            min_step: 1e-7,
        }
    }
}

/// Newton-solved equilibria curves over `range` of parameter `bif_param_name`.
pub fn continue_equilibria(
    spec: &ModelSpec,
    params: &ModelParams,
    bif_param_name: &str,
    range: (f64, f64),
    max_points: usize,
) -> Result<Vec<EquilibriumBranch>> {
    continue_equilibria_with(spec, params, bif_param_name, range, max_points, &ContinuationOptions::default())
}

pub fn continue_equilibria_with(
    spec: &ModelSpec,
    params: &ModelParams,
    bif_param_name: &str,
    range: (f64, f64),
    max_points: usize,
    opts: &ContinuationOptions,
) -> Result<Vec<EquilibriumBranch>> {
    spec.validate_len(params)?;
    let (lo, hi) = range;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::contract(format!("invalid range [{lo}, {hi}]")));
    }
    if max_points < 2 || opts.seed_grid < 2 {
        return Err(Error::contract("need at least two points and two seed values"));
    }
    let slot = spec.param_index(bif_param_name)?;
    let sys = System::new(spec, params, slot, range);

    let seeds = sys.seeds(opts);
    if seeds.is_empty() {
        log::warn!("no equilibrium found for {bif_param_name} in [{lo}, {hi}]");
        return Ok(Vec::new());
    }

    let mut curves: Vec<Vec<Node>> = Vec::new();
    let mut covered = vec![false; seeds.len()];
    for i in 0..seeds.len() {
        if covered[i] {
            continue;
        }
        let curve = sys.trace(&seeds[i], max_points, opts);
        for (j, s) in seeds.iter().enumerate() {
            if !covered[j] && sys.curve_passes(&curve, s) {
                covered[j] = true;
            }
        }
        covered[i] = true;
        curves.push(curve);
    }

    let mut branches = Vec::new();
    for curve in curves {
        branches.extend(sys.finish(curve));
    }
    Ok(branches)
}

/// A converged point in raw coordinates `(x, mu)` with its unit tangent in
/// scaled coordinates.
#[derive(Clone, Debug)]
struct Node {
    y: Vec<f64>,
    tangent: Vec<f64>,
}

struct System<'a> {
    spec: &'a ModelSpec,
    base: Vec<f64>,
    slot: usize,
    range: (f64, f64),
    /// Coordinate scales; the last entry is the parameter's.
    scale: Vec<f64>,
}

impl<'a> System<'a> {
    fn new(spec: &'a ModelSpec, params: &ModelParams, slot: usize, range: (f64, f64)) -> Self {
        let mut scale: Vec<f64> = spec.state_names.iter().map(|s| state_box(s).2).collect();
        scale.push(range.1 - range.0);
        System {
            spec,
            base: params.values().to_vec(),
            slot,
            range,
            scale,
        }
    }

    fn d(&self) -> usize {
        self.spec.dim()
    }

    fn params_at(&self, mu: f64) -> Vec<f64> {
        let mut p = self.base.clone();
        p[self.slot] = mu;
        p
    }

    /// `F`, `dF/dx` and `dF/dmu` at raw `(x, mu)`.
    fn eval(&self, x: &[f64], mu: f64) -> (Vec<f64>, DMatrix<f64>, DVector<f64>) {
        let d = self.d();
        let p = self.params_at(mu);
        let mut f = vec![0.0; d];
        let mut fx = vec![0.0; d * d];
        let mut fp = vec![0.0; d];
        self.spec.eval_with_partials(x, &p, &[self.slot], &mut f, &mut fx, &mut fp);
        (f, DMatrix::from_row_slice(d, d, &fx), DVector::from_vec(fp))
    }

    fn residual(&self, x: &[f64], mu: f64) -> Vec<f64> {
        let mut f = vec![0.0; self.d()];
        self.spec.rhs_into(x, &self.params_at(mu), &mut f);
        f
    }

    fn in_range(&self, mu: f64) -> bool {
        mu >= self.range.0 && mu <= self.range.1
    }

    /// Newton at fixed `mu` with backtracking on the residual norm.
    fn newton_fixed(&self, x0: &[f64], mu: f64) -> Option<Vec<f64>> {
        let mut x = x0.to_vec();
        for _ in 0..NEWTON_MAX_ITER {
            let (f, fx, _) = self.eval(&x, mu);
            let norm = inf_norm(&f);
            if !norm.is_finite() {
                return None;
            }
            if norm < NEWTON_TOL {
                return Some(x);
            }
            let step = fx.lu().solve(&DVector::from_iterator(f.len(), f.iter().map(|v| -v)))?;
            let mut lambda = 1.0;
            loop {
                let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a + lambda * s).collect();
                let n = inf_norm(&self.residual(&trial, mu));
                if n.is_finite() && (n < norm || lambda < 1e-3) {
                    x = trial;
                    break;
                }
                lambda *= 0.5;
            }
        }
        (inf_norm(&self.residual(&x, mu)) < NEWTON_TOL).then_some(x)
    }

    /// Distinct equilibria at each value of a uniform grid, from random starts.
    fn seeds(&self, opts: &ContinuationOptions) -> Vec<Vec<f64>> {
        let d = self.d();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let boxes: Vec<(f64, f64, f64)> = self.spec.state_names.iter().map(|s| state_box(s)).collect();
        let mut out: Vec<Vec<f64>> = Vec::new();
        for k in 0..opts.seed_grid {
            let mu = self.range.0 + (self.range.1 - self.range.0) * k as f64 / (opts.seed_grid - 1) as f64;
            let mut found: Vec<Vec<f64>> = Vec::new();
            for _ in 0..opts.starts_per_value {
                let x0: Vec<f64> = boxes.iter().map(|&(a, b, _)| rng.random_range(a..=b)).collect();
                if let Some(x) = self.newton_fixed(&x0, mu) {
                    if !found.iter().any(|f| same_state(f, &x)) {
                        found.push(x);
                    }
                }
            }
            for mut x in found {
                x.push(mu);
                debug_assert_eq!(x.len(), d + 1);
                out.push(x);
            }
        }
        out
    }

    /// Jacobian of `F` with respect to scaled coordinates, `d x (d+1)`.
    fn scaled_jacobian(&self, y: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let d = self.d();
        let (f, fx, fp) = self.eval(&y[..d], y[d]);
        let mut j = DMatrix::zeros(d, d + 1);
        for r in 0..d {
            for c in 0..d {
                j[(r, c)] = fx[(r, c)] * self.scale[c];
            }
            j[(r, d)] = fp[r] * self.scale[d];
        }
        (f, j)
    }

    /// Unit null vector of the scaled Jacobian, oriented along `prev` when given
    /// and towards increasing parameter otherwise.
    fn tangent(&self, y: &[f64], prev: Option<&[f64]>) -> Option<Vec<f64>> {
        let d = self.d();
        let (_, j) = self.scaled_jacobian(y);
        let mut t = match prev {
            Some(p) => {
                let mut a = DMatrix::zeros(d + 1, d + 1);
                a.view_mut((0, 0), (d, d + 1)).copy_from(&j);
                for c in 0..=d {
                    a[(d, c)] = p[c];
                }
                let mut rhs = DVector::zeros(d + 1);
                rhs[d] = 1.0;
                a.lu().solve(&rhs)?.as_slice().to_vec()
            }
            None => {
                let mut a = DMatrix::zeros(d + 1, d + 1);
                a.view_mut((0, 0), (d, d + 1)).copy_from(&j);
                let svd = a.svd(false, true);
                let vt = svd.v_t?;
                let k = svd
                    .singular_values
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)?;
                let mut t: Vec<f64> = vt.row(k).iter().copied().collect();
                if t[d] < 0.0 {
                    t.iter_mut().for_each(|v| *v = -*v);
                }
                t
            }
        };
        let n = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return None;
        }
        t.iter_mut().for_each(|v| *v /= n);
        Some(t)
    }

    /// Newton on `F = 0` plus the pseudo-arclength constraint
    /// `t . (u - u_pred) = 0`, in scaled coordinates. Returns the raw point and
    /// the iteration count.
    fn correct(&self, y_pred: &[f64], t: &[f64]) -> Option<(Vec<f64>, usize)> {
        let d = self.d();
        let mut y = y_pred.to_vec();
        for it in 0..NEWTON_MAX_ITER {
            let (f, j) = self.scaled_jacobian(&y);
            let c: f64 = (0..=d).map(|i| t[i] * (y[i] - y_pred[i]) / self.scale[i]).sum();
            let norm = inf_norm(&f);
            if !norm.is_finite() {
                return None;
            }
            if norm < NEWTON_TOL && c.abs() < 1e-12 {
                return Some((y, it));
            }
            let mut a = DMatrix::zeros(d + 1, d + 1);
            a.view_mut((0, 0), (d, d + 1)).copy_from(&j);
            for k in 0..=d {
                a[(d, k)] = t[k];
            }
            let mut rhs = DVector::zeros(d + 1);
            for r in 0..d {
                rhs[r] = -f[r];
            }
            rhs[d] = -c;
            let du = a.lu().solve(&rhs)?;
            for i in 0..=d {
                y[i] += du[i] * self.scale[i];
            }
        }
        None
    }

    fn scaled_dist(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.scale)
            .map(|((x, y), s)| ((x - y) / s).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Continues both ways from `seed` and joins the halves.
    fn trace(&self, seed: &[f64], max_points: usize, opts: &ContinuationOptions) -> Vec<Node> {
        let Some(t0) = self.tangent(seed, None) else {
            return vec![];
        };
        let start = Node {
            y: seed.to_vec(),
            tangent: t0.clone(),
        };
        let half = (max_points / 2).max(1);
        let fwd = self.march(&start, half, opts);
        let back_start = Node {
            y: seed.to_vec(),
            tangent: t0.iter().map(|v| -v).collect(),
        };
        let mut back = self.march(&back_start, half, opts);
        back.reverse();
        for n in back.iter_mut() {
            n.tangent.iter_mut().for_each(|v| *v = -*v);
        }
        back.push(start);
        back.extend(fwd);
        back
    }

    /// Points after `start` in the direction of its tangent, excluding `start`.
    fn march(&self, start: &Node, max_points: usize, opts: &ContinuationOptions) -> Vec<Node> {
        let d = self.d();
        let mut out: Vec<Node> = Vec::new();
        let mut cur = start.clone();
        let mut h = opts.max_step * 0.2;
        while out.len() < max_points {
            let pred: Vec<f64> = (0..=d).map(|i| cur.y[i] + h * cur.tangent[i] * self.scale[i]).collect();
            let accepted = self.correct(&pred, &cur.tangent).and_then(|(y, iters)| {
                if self.scaled_dist(&y, &cur.y) > 2.0 * h {
                    return None;
                }
                let t = self.tangent(&y, Some(&cur.tangent))?;
                Some((Node { y, tangent: t }, iters))
            });
            match accepted {
                Some((node, iters)) => {
                    if !self.in_range(node.y[d]) {
                        out.extend(self.clip(&cur, &node));
                        break;
                    }
                    let closed = out.len() > 3 && self.scaled_dist(&node.y, &start.y) < h;
                    out.push(node.clone());
                    if closed {
                        break;
                    }
                    cur = node;
                    if iters <= 3 {
                        h = (h * 1.5).min(opts.max_step);
                    }
                }
                None => {
                    h *= 0.5;
                    if h < opts.min_step {
                        break;
                    }
                }
            }
        }
        out
    }

    /// The point where the chord `inside -> outside` meets the range boundary.
    fn clip(&self, inside: &Node, outside: &Node) -> Option<Node> {
        let d = self.d();
        let mu = outside.y[d].clamp(self.range.0, self.range.1);
        let span = outside.y[d] - inside.y[d];
        let frac = if span != 0.0 { (mu - inside.y[d]) / span } else { 1.0 };
        let guess: Vec<f64> = (0..d).map(|i| inside.y[i] + frac * (outside.y[i] - inside.y[i])).collect();
        let mut y = self.newton_fixed(&guess, mu)?;
        y.push(mu);
        let tangent = self.tangent(&y, Some(&inside.tangent))?;
        Some(Node { y, tangent })
    }

    /// True when `curve` passes through the seed equilibrium `s`.
    fn curve_passes(&self, curve: &[Node], s: &[f64]) -> bool {
        let d = self.d();
        let mu = s[d];
        for w in curve.windows(2) {
            let (a, b) = (&w[0].y, &w[1].y);
            if (a[d] - mu) * (b[d] - mu) > 0.0 {
                continue;
            }
            let span = b[d] - a[d];
            let frac = if span.abs() > 0.0 { (mu - a[d]) / span } else { 0.0 };
            let guess: Vec<f64> = (0..d).map(|i| a[i] + frac * (b[i] - a[i])).collect();
            if let Some(x) = self.newton_fixed(&guess, mu) {
                if same_state(&x, &s[..d]) {
                    return true;
                }
            }
        }
        curve.iter().any(|n| same_state(&n.y, s))
    }

    fn point(&self, y: &[f64]) -> EquilibriumPoint {
        let d = self.d();
        let (_, fx, _) = self.eval(&y[..d], y[d]);
        let re = real_parts(&fx);
        let stable = re.iter().all(|r| *r < 0.0);
        EquilibriumPoint {
            bif_param: y[d],
            state: y[..d].to_vec(),
            eigen_real_parts: re,
            stability: if stable { Stability::Stable } else { Stability::Unstable },
        }
    }

    /// Largest real part among complex eigenvalues, when any exist.
    fn hopf_test(&self, y: &[f64]) -> Option<f64> {
        let d = self.d();
        let (_, fx, _) = self.eval(&y[..d], y[d]);
        fx.complex_eigenvalues()
            .iter()
            .filter(|z| z.im.abs() > IMAG_EPS)
            .map(|z| z.re)
            .reduce(f64::max)
    }

    /// Bisects along the chord from `a` for the sign change of `test`,
    /// until the parameter bracket is narrower than the event tolerance.
    fn bisect<F>(&self, a: &Node, b: &Node, test: F) -> Option<(f64, (f64, f64))>
    where
        F: Fn(&Node) -> Option<f64>,
    {
        let d = self.d();
        let s_total = self.scaled_dist(&a.y, &b.y);
        let at = |s: f64| -> Option<Node> {
            let pred: Vec<f64> = (0..=d).map(|i| a.y[i] + s * a.tangent[i] * self.scale[i]).collect();
            let (y, _) = self.correct(&pred, &a.tangent)?;
            let t = self.tangent(&y, Some(&a.tangent))?;
            Some(Node { y, tangent: t })
        };
        let sign_a = test(a)?.signum();
        let (mut lo, mut hi) = (0.0, s_total);
        let (mut mu_lo, mut mu_hi) = (a.y[d], b.y[d]);
        for _ in 0..200 {
            if (mu_hi - mu_lo).abs() < EVENT_TOL {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let node = at(mid)?;
            if test(&node)?.signum() == sign_a {
                lo = mid;
                mu_lo = node.y[d];
            } else {
                hi = mid;
                mu_hi = node.y[d];
            }
        }
        if (mu_hi - mu_lo).abs() >= EVENT_TOL {
            return None;
        }
        Some((0.5 * (mu_lo + mu_hi), (mu_lo.min(mu_hi), mu_lo.max(mu_hi))))
    }

    /// Labels points, locates events, and splits the curve at folds.
    fn finish(&self, curve: Vec<Node>) -> Vec<EquilibriumBranch> {
        let d = self.d();
        if curve.is_empty() {
            return vec![];
        }
        let mut branches = Vec::new();
        let mut cur = EquilibriumBranch::default();
        cur.points.push(self.point(&curve[0].y));
        for w in curve.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            let pb = self.point(&b.y);
            if let (Some(ha), Some(hb)) = (self.hopf_test(&a.y), self.hopf_test(&b.y)) {
                if ha.signum() != hb.signum() {
                    match self.bisect(a, b, |n| self.hopf_test(&n.y)) {
                        Some((mu, bracket)) => cur.events.push(BifurcationEvent {
                            kind: EventKind::Hopf,
                            bif_param: mu,
                            bracket,
                        }),
                        None => log::debug!("Hopf refinement failed near {}", a.y[d]),
                    }
                }
            }
            let fold = a.tangent[d].signum() != b.tangent[d].signum();
            if fold {
                match self.bisect(a, b, |n| Some(n.tangent[d])) {
                    Some((mu, bracket)) => cur.events.push(BifurcationEvent {
                        kind: EventKind::Fold,
                        bif_param: mu,
                        bracket,
                    }),
                    None => log::debug!("fold refinement failed near {}", a.y[d]),
                }
                branches.push(std::mem::take(&mut cur));
            }
            cur.points.push(pb);
        }
        branches.push(cur);
        branches.retain(|b| !b.points.is_empty());
        branches
    }
}

/// Sampling box `(lo, hi)` and continuation scale for a state variable.
fn state_box(name: &str) -> (f64, f64, f64) {
    match name {
        "V" => (-100.0, 60.0, 100.0),
        "n" | "h" => (0.0, 1.0, 1.0),
        "Ca" => (0.0, 5.0, 1.0),
        _ => (-5.0, 5.0, 1.0),
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| if x.is_nan() { f64::NAN } else { m.max(x.abs()) })
}

fn same_state(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-6 * (1.0 + x.abs().max(y.abs())))
}

fn real_parts(m: &DMatrix<f64>) -> Vec<f64> {
    let mut re: Vec<f64> = m.complex_eigenvalues().iter().map(|z| z.re).collect();
    re.sort_by(|a, b| b.total_cmp(a));
    re
}

/// Warm-up and measurement windows for orbit sampling, in ms.
pub fn default_orbit_windows(id: ModelId) -> (f64, f64) {
    match id {
        ModelId::Pbc | ModelId::PbcFast => (4000.0, 4000.0),
        _ => (2000.0, 2000.0),
    }
}

/// Envelope of `V` on the attractor reached from the standard initial
/// condition with the bifurcation parameter set to `value`.
pub fn orbit_extrema(
    spec: &ModelSpec,
    params: &ModelParams,
    bif_param_name: &str,
    value: f64,
    t_transient: f64,
    t_measure: f64,
) -> Result<OrbitSample> {
    if !(t_transient >= 0.0) || !(t_measure > 0.0) {
        return Err(Error::contract("orbit windows must be positive"));
    }
    let p = params.clone().with(bif_param_name, value)?;
    let dt = Protocol::for_model(spec.id).dt;
    let x0 = initial_state(spec, &p);
    let settled = settle(spec, &p, &x0, dt, (t_transient / dt).round() as usize)?;
    let traj = integrate(spec, &p, &settled, dt, (t_measure / dt).round() as usize)?;
    let v = traj.component(spec.observed_index).values;
    let (v_min, v_max) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    Ok(OrbitSample {
        bif_param: value,
        v_min,
        v_max,
        period: estimate_period(&v, dt),
    })
}

/// Mean spacing of upward crossings of the mid level; `None` below three
/// crossings or when the envelope is under 1 mV.
pub fn estimate_period(v: &[f64], dt: f64) -> Option<f64> {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if !(hi - lo >= 1.0) {
        return None;
    }
    let mid = 0.5 * (lo + hi);
    let mut crossings = Vec::new();
    for i in 1..v.len() {
        if v[i - 1] < mid && v[i] >= mid {
            let frac = (mid - v[i - 1]) / (v[i] - v[i - 1]);
            crossings.push((i as f64 - 1.0 + frac) * dt);
        }
    }
    if crossings.len() < 3 {
        return None;
    }
    Some((crossings[crossings.len() - 1] - crossings[0]) / (crossings.len() - 1) as f64)
}

/// Equilibrium branches plus orbit envelopes on `n_orbit_samples` evenly
/// spaced parameter values.
pub fn sweep_diagram(
    spec: &ModelSpec,
    params: &ModelParams,
    bif_param_name: &str,
    range: (f64, f64),
    n_orbit_samples: usize,
) -> Result<BifurcationDiagram> {
    let (tt, tm) = default_orbit_windows(spec.id);
    sweep_diagram_with(spec, params, bif_param_name, range, n_orbit_samples, 2000, (tt, tm), &ContinuationOptions::default())
}

#[allow(clippy::too_many_arguments)]
pub fn sweep_diagram_with(
    spec: &ModelSpec,
    params: &ModelParams,
    bif_param_name: &str,
    range: (f64, f64),
    n_orbit_samples: usize,
    max_points: usize,
    windows: (f64, f64),
    opts: &ContinuationOptions,
) -> Result<BifurcationDiagram> {
    let equilibria = continue_equilibria_with(spec, params, bif_param_name, range, max_points, opts)?;
    let grid: Vec<f64> = match n_orbit_samples {
        0 => vec![],
        1 => vec![0.5 * (range.0 + range.1)],
        n => (0..n)
            .map(|k| range.0 + (range.1 - range.0) * k as f64 / (n - 1) as f64)
            .collect(),
    };
    let samples = grid
        .par_iter()
        .map(|&mu| orbit_extrema(spec, params, bif_param_name, mu, windows.0, windows.1))
        .collect::<Result<Vec<_>>>()?;
    let period_blowups = period_blowups(&samples);
    Ok(BifurcationDiagram {
        model: spec.id,
        bif_param_name: bif_param_name.to_string(),
        range,
        equilibria,
        orbits: OrbitExtremaBranch { samples },
        period_blowups,
    })
}

fn period_blowups(samples: &[OrbitSample]) -> Vec<f64> {
    let mut periods: Vec<f64> = samples.iter().filter_map(|s| s.period).collect();
    if periods.is_empty() {
        return vec![];
    }
    periods.sort_by(f64::total_cmp);
    let median = periods[periods.len() / 2];
    samples
        .iter()
        .filter(|s| s.period.is_some_and(|p| p > 10.0 * median))
        .map(|s| s.bif_param)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagramDistance {
    /// Mean of `|dv_min| + |dv_max|` over shared orbit samples.
    pub orbit: f64,
    /// Symmetric Hausdorff distance between equilibrium curves in `(param, V)`.
    pub equilibria: f64,
}

impl DiagramDistance {
    pub fn total(&self) -> f64 {
        self.orbit + self.equilibria
    }
}

pub fn diagram_distance(a: &BifurcationDiagram, b: &BifurcationDiagram) -> DiagramDistance {
    let mut sum = 0.0;
    let mut n = 0usize;
    for sa in &a.orbits.samples {
        if let Some(sb) = b
            .orbits
            .samples
            .iter()
            .find(|sb| (sb.bif_param - sa.bif_param).abs() <= 1e-9 * (1.0 + sa.bif_param.abs()))
        {
            sum += (sa.v_min - sb.v_min).abs() + (sa.v_max - sb.v_max).abs();
            n += 1;
        }
    }
    let orbit = if n > 0 { sum / n as f64 } else { 0.0 };
    let pa = polylines(a);
    let pb = polylines(b);
    let equilibria = match (pa.is_empty(), pb.is_empty()) {
        (true, true) => 0.0,
        (false, false) => directed_hausdorff(&pa, &pb).max(directed_hausdorff(&pb, &pa)),
        _ => f64::INFINITY,
    };
    DiagramDistance { orbit, equilibria }
}

fn polylines(d: &BifurcationDiagram) -> Vec<Vec<(f64, f64)>> {
    d.equilibria
        .iter()
        .map(|b| b.points.iter().map(|p| (p.bif_param, p.state[0])).collect::<Vec<_>>())
        .filter(|p: &Vec<(f64, f64)>| !p.is_empty())
        .collect()
}

/// Largest distance from a vertex of `a` to the nearest segment of `b`.
fn directed_hausdorff(a: &[Vec<(f64, f64)>], b: &[Vec<(f64, f64)>]) -> f64 {
    a.iter()
        .flatten()
        .map(|&p| {
            b.iter()
                .map(|line| {
                    if line.len() == 1 {
                        return dist(p, line[0]);
                    }
                    line.windows(2)
                        .map(|w| segment_dist(p, w[0], w[1]))
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn segment_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return dist(p, a);
    }
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
    dist(p, (a.0 + t * dx, a.1 + t * dy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Regime;

    fn saddle_node() -> (ModelSpec, ModelParams) {
        let spec = ModelSpec::new(ModelId::SaddleNode);
        let p = spec.default_params();
        (spec, p)
    }

    #[test]
    fn saddle_node_normal_form() {
        let (spec, p) = saddle_node();
        let branches = continue_equilibria(&spec, &p, "mu", (-1.0, 1.0), 2000).unwrap();
        assert_eq!(branches.len(), 2);
        let folds: Vec<_> = branches
            .iter()
            .flat_map(|b| &b.events)
            .filter(|e| e.kind == EventKind::Fold)
            .collect();
        assert_eq!(folds.len(), 1);
        assert!(folds[0].bif_param.abs() < 1e-4, "{:?}", folds[0]);
        assert!(folds[0].bracket.1 - folds[0].bracket.0 < 1e-4);
        for b in &branches {
            let upper = b.points.iter().map(|p| p.state[0]).sum::<f64>() > 0.0;
            for pt in &b.points {
                assert!((pt.bif_param - pt.state[0].powi(2)).abs() < 1e-10);
                if pt.state[0].abs() > 1e-3 {
                    let want = if upper { Stability::Stable } else { Stability::Unstable };
                    assert_eq!(pt.stability, want, "{pt:?}");
                }
            }
        }
    }

    #[test]
    fn no_equilibrium_gives_empty() {
        let (spec, p) = saddle_node();
        let branches = continue_equilibria(&spec, &p, "mu", (-2.0, -1.0), 500).unwrap();
        assert!(branches.is_empty());
    }

    #[test]
    fn hopf_regime_has_hopf_event() {
        let (spec, p) = Regime::Hopf.load();
        let branches = continue_equilibria(&spec, &p, "I_app", (0.0, 250.0), 2000).unwrap();
        let hopfs: Vec<f64> = branches
            .iter()
            .flat_map(|b| &b.events)
            .filter(|e| e.kind == EventKind::Hopf)
            .map(|e| e.bif_param)
            .collect();
        assert!(!hopfs.is_empty());
        for b in &branches {
            for pt in &b.points {
                let f = spec.eval_vector_field(&pt.state, &p.clone().with("I_app", pt.bif_param).unwrap()).unwrap();
                assert!(inf_norm(&f) < 1e-10);
            }
        }
    }

    #[test]
    fn pbc_fast_lower_branch_folds() {
        let (_, p) = Regime::PbcDefault.load();
        let spec = ModelSpec::new(ModelId::PbcFast);
        let mut fast = spec.default_params();
        for (k, v) in p.iter() {
            fast.set(k, v).unwrap();
        }
        let branches = continue_equilibria(&spec, &fast, "h", (0.0, 1.0), 4000).unwrap();
        let folds = branches
            .iter()
            .flat_map(|b| &b.events)
            .filter(|e| e.kind == EventKind::Fold)
            .count();
        assert!(folds >= 1);
    }

    #[test]
    fn quiescent_and_oscillating_orbits() {
        let (spec, p) = Regime::Hopf.load();
        let osc = orbit_extrema(&spec, &p, "I_app", 100.0, 2000.0, 2000.0).unwrap();
        assert!(osc.v_max - osc.v_min > 30.0);
        assert!(osc.period.is_some());
        let rest = orbit_extrema(&spec, &p, "I_app", 0.0, 2000.0, 2000.0).unwrap();
        assert!(rest.v_max - rest.v_min < 1.0);
        assert!(rest.period.is_none());
        let long = orbit_extrema(&spec, &p, "I_app", 100.0, 2000.0, 4000.0).unwrap();
        assert!((long.v_min - osc.v_min).abs() < 0.5);
        assert!((long.v_max - osc.v_max).abs() < 0.5);
    }

    #[test]
    fn period_of_sampled_sine() {
        let dt = 0.1;
        let v: Vec<f64> = (0..10_000).map(|i| 10.0 * (2.0 * std::f64::consts::PI * i as f64 * dt / 25.0).sin()).collect();
        let p = estimate_period(&v, dt).unwrap();
        assert!((p - 25.0).abs() < 1e-3);
        assert!(estimate_period(&[0.0; 100], dt).is_none());
    }

    fn toy_diagram(shift: f64) -> BifurcationDiagram {
        BifurcationDiagram {
            model: ModelId::SaddleNode,
            bif_param_name: "mu".into(),
            range: (0.0, 1.0),
            equilibria: vec![EquilibriumBranch {
                points: (0..5)
                    .map(|i| EquilibriumPoint {
                        bif_param: i as f64 * 0.25,
                        state: vec![i as f64],
                        eigen_real_parts: vec![-1.0],
                        stability: Stability::Stable,
                    })
                    .collect(),
                events: vec![],
            }],
            orbits: OrbitExtremaBranch {
                samples: (0..4)
                    .map(|i| OrbitSample {
                        bif_param: i as f64 / 3.0,
                        v_min: -50.0 + shift,
                        v_max: 20.0 + shift,
                        period: Some(30.0),
                    })
                    .collect(),
            },
            period_blowups: vec![],
        }
    }

    #[test]
    fn distance_definitions() {
        let a = toy_diagram(0.0);
        let d0 = diagram_distance(&a, &a);
        assert_eq!(d0.total(), 0.0);
        let d1 = diagram_distance(&a, &toy_diagram(1.0));
        assert!((d1.orbit - 2.0).abs() < 1e-12);
        assert_eq!(d1.equilibria, 0.0);
    }

    #[test]
    fn csv_headers() {
        let a = toy_diagram(0.0);
        let mut buf = Vec::new();
        a.write_equilibria_csv(&mut buf, &["x".to_string()]).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("bif_param,x,max_re_eig,stability\n"));
        let mut buf = Vec::new();
        a.write_orbits_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }
}
