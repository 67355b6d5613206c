//! Two-stage estimation: fit the voltage network to the observations, then
//! train the hidden-state networks jointly with the biophysical parameters
//! against the ODE residuals.

mod config;
mod metrics;
mod optim;
mod residual;

pub use config::{
    merge, BalanceConfig, EstimationConfig, FftConfig, NetConfig, ProtocolConfig, Stage1Config, Stage2Config,
};
pub use metrics::{normalized_l2, normalized_l2_slices, param_rel_error, NamedValues};
pub use optim::{adam_step, update_balance, AdamState, BalanceState, ConstrainedParams, LrSchedule};
pub use residual::{
    residual_core, residual_losses, ResidualScaling, stage_loss, Adjoints, NetBundle, ResidualCore, ResidualLosses, StageGrads,
    StateBatch,
};

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelId, ModelParams, ModelSpec, Regime, RoleFilter};
use crate::net::{init_network, FourierEmbedding, FourierNet, NetLayout, OutputMap, RwfInit, Tape};
use crate::sim::{add_noise, generate_with, Protocol, TimeSeries, Trajectory};
use crate::spectral::{power_spectrum, select_with_policy, FrequencySelection};

use residual::{accumulate, add_data_term, fill_params};

/// Derives an independent stream seed from a user seed and a purpose tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_VNET: u64 = 1;
const TAG_STAGE1_BATCH: u64 = 2;
const TAG_STAGE2_BATCH: u64 = 3;
const TAG_HIDDEN_NET: u64 = 16;
const TAG_HIDDEN_FREQS: u64 = 32;

/// Evaluates a network on a long grid in chunks.
pub fn eval_on_grid(net: &FourierNet, ts: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut v = Vec::with_capacity(ts.len());
    let mut dv = Vec::with_capacity(ts.len());
    for chunk in ts.chunks(4096) {
        let tape = net.eval_batch(chunk);
        v.extend_from_slice(&tape.value);
        dv.extend_from_slice(&tape.dvalue_dt);
    }
    (v, dv)
}

fn sample_indices(rng: &mut ChaCha8Rng, n: usize, b: usize) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(0..n)).collect()
}

/// Fits `net` to `obs` by mini-batch Adam on the mean squared misfit.
/// Returns the loss at every iteration.
pub fn pretrain_voltage(
    net: &mut FourierNet,
    obs: &TimeSeries,
    schedule: LrSchedule,
    batch_size: usize,
    iterations: u64,
    seed: u64,
) -> Result<Vec<f64>> {
    schedule.validate()?;
    let n = obs.len();
    if batch_size == 0 || batch_size > n {
        return Err(Error::contract(format!("batch size {batch_size} outside 1..={n}")));
    }
    let times = obs.times();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = AdamState::new(net.param_count());
    let mut grad = vec![0.0; net.param_count()];
    let mut history = Vec::with_capacity(iterations as usize);
    for k in 0..iterations {
        let idx = sample_indices(&mut rng, n, batch_size);
        let ts: Vec<f64> = idx.iter().map(|&i| times[i]).collect();
        let target: Vec<f64> = idx.iter().map(|&i| obs.values[i]).collect();
        let tape = net.eval_batch(&ts);
        let state = StateBatch::from(&tape);
        let mut adj = vec![0.0; batch_size];
        let loss = add_data_term(&state, &target, 1.0, &mut adj)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                iteration: k as usize,
                detail: format!("voltage misfit is {loss}"),
            });
        }
        history.push(loss);
        grad.fill(0.0);
        net.backward_batch(&tape, &adj, &vec![0.0; batch_size], &mut grad)?;
        adam_step(&mut adam, net.params_mut(), &grad, schedule.lr(k))?;
    }
    Ok(history)
}

/// One row of the stage-2 loss history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: u64,
    pub total: f64,
    pub per_eq: Vec<f64>,
    pub weights: Vec<f64>,
    /// Data misfit of the voltage network (only when it is trained).
    pub data: Option<f64>,
}

pub fn write_loss_csv<W: Write>(mut w: W, state_names: &[String], history: &[LossRecord]) -> Result<()> {
    write!(w, "iter,loss_total")?;
    for s in state_names {
        write!(w, ",loss_{s}")?;
    }
    for s in state_names {
        write!(w, ",weight_{s}")?;
    }
    writeln!(w)?;
    for r in history {
        write!(w, "{},{:?}", r.iter, r.total)?;
        for x in r.per_eq.iter().chain(&r.weights) {
            write!(w, ",{x:?}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Everything stage 2 needs.
pub struct EstimationProblem {
    pub spec: ModelSpec,
    /// Known parameters are taken from here; estimated slots are ignored.
    pub base: ModelParams,
    pub cp: ConstrainedParams,
    pub bundle: NetBundle,
    pub obs: TimeSeries,
    pub theta_schedule: LrSchedule,
    pub lambda_lr: f64,
    pub iters: u64,
    pub batch: usize,
    pub balance: BalanceState,
    pub data_weight: f64,
    pub seed: u64,
    pub log_every: u64,
    /// Grid samples at each end of the window left out of the collocation set.
    pub edge_trim: usize,
    pub scaling: ResidualScaling,
}

pub struct PhysicsOutcome {
    pub bundle: NetBundle,
    pub cp: ConstrainedParams,
    pub balance: BalanceState,
    pub history: Vec<LossRecord>,
}

/// Residual-driven training of the trainable networks and `z`.
pub fn run_physics_stage(problem: EstimationProblem) -> Result<PhysicsOutcome> {
    run_physics_stage_with(problem, &mut |_, _| {})
}

/// As [`run_physics_stage`], calling `progress(iter, record)` at every logged
/// iteration.
pub fn run_physics_stage_with(
    problem: EstimationProblem,
    progress: &mut dyn FnMut(u64, &LossRecord),
) -> Result<PhysicsOutcome> {
    let EstimationProblem {
        spec,
        base,
        mut cp,
        mut bundle,
        obs,
        theta_schedule,
        lambda_lr,
        iters,
        batch,
        mut balance,
        data_weight,
        seed,
        log_every,
        edge_trim,
        scaling,
    } = problem;
    residual::check_bundle(&bundle, &spec)?;
    theta_schedule.validate()?;
    LrSchedule::constant(lambda_lr).validate()?;
    let d = spec.dim();
    if balance.weights.len() != d {
        return Err(Error::contract("one balance weight per equation is required"));
    }
    if batch == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    let n = obs.len();
    if 2 * edge_trim >= n {
        return Err(Error::contract("edge trim leaves no collocation points"));
    }
    let grid = obs.times();
    let observed = spec.observed_index;
    let train_v = bundle.trainable[observed];

    // Frozen networks only ever see grid times, so evaluate them once.
    let cache: Vec<Option<(Vec<f64>, Vec<f64>)>> = bundle
        .nets
        .iter()
        .zip(&bundle.trainable)
        .map(|(net, &t)| if t { None } else { Some(eval_on_grid(net, &grid)) })
        .collect();

    let wrt = spec.indices(RoleFilter::Estimated);
    let mut adam_nets: Vec<Option<AdamState>> = bundle
        .nets
        .iter()
        .zip(&bundle.trainable)
        .map(|(net, &t)| t.then(|| AdamState::new(net.param_count())))
        .collect();
    let mut adam_z = AdamState::new(cp.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = Vec::new();
    let mut grads = StageGrads::zeros(&bundle, cp.len());

    for k in 0..iters {
        let idx: Vec<usize> = sample_indices(&mut rng, n - 2 * edge_trim, batch)
            .into_iter()
            .map(|i| i + edge_trim)
            .collect();
        let ts: Vec<f64> = idx.iter().map(|&i| grid[i]).collect();
        let mut tapes: Vec<Option<Tape>> = Vec::with_capacity(d);
        let mut states: Vec<StateBatch> = Vec::with_capacity(d);
        for (j, net) in bundle.nets.iter().enumerate() {
            match &cache[j] {
                Some((v, dv)) => {
                    states.push(StateBatch {
                        value: idx.iter().map(|&i| v[i]).collect(),
                        dvalue: idx.iter().map(|&i| dv[i]).collect(),
                    });
                    tapes.push(None);
                }
                None => {
                    let tape = net.eval_batch(&ts);
                    states.push(StateBatch::from(&tape));
                    tapes.push(Some(tape));
                }
            }
        }
        let params = fill_params(&spec, &base, &cp);
        let core = residual_core(&spec, &params, &wrt, &ts, &states, scaling).map_err(|e| diverged(k, e))?;

        if k % balance.update_every == 0 {
            let mut norms = Vec::with_capacity(d);
            for e in 0..d {
                let mut w = vec![0.0; d];
                w[e] = 1.0;
                let adj = core.adjoints(&w, &cp);
                let mut g = StageGrads::zeros(&bundle, cp.len());
                accumulate(&bundle, &tapes, &adj, &mut g)?;
                norms.push(g.norm());
            }
            update_balance(&mut balance, &norms).map_err(|e| diverged(k, e))?;
            if !cp.signs_hold() {
                return Err(Error::TrainingDiverged {
                    iteration: k as usize,
                    detail: "a parameter left its sign orthant".into(),
                });
            }
        }

        let mut adj = core.adjoints(&balance.weights, &cp);
        let mut total = core.weighted_loss(&balance.weights);
        let mut data = None;
        if train_v {
            let target: Vec<f64> = idx.iter().map(|&i| obs.values[i]).collect();
            let l = add_data_term(&states[observed], &target, data_weight, &mut adj.value[observed])?;
            total += data_weight * l;
            data = Some(l);
        }
        if !total.is_finite() {
            return Err(Error::TrainingDiverged {
                iteration: k as usize,
                detail: format!("stage-2 loss is {total}"),
            });
        }
        if k % log_every == 0 || k + 1 == iters {
            let rec = LossRecord {
                iter: k,
                total,
                per_eq: core.losses.clone(),
                weights: balance.weights.clone(),
                data,
            };
            progress(k, &rec);
            history.push(rec);
        }

        for g in grads.nets.iter_mut() {
            g.fill(0.0);
        }
        grads.z.fill(0.0);
        accumulate(&bundle, &tapes, &adj, &mut grads)?;
        let lr = theta_schedule.lr(k);
        for (j, net) in bundle.nets.iter_mut().enumerate() {
            if let Some(st) = adam_nets[j].as_mut() {
                adam_step(st, net.params_mut(), &grads.nets[j], lr)?;
            }
        }
        adam_step(&mut adam_z, &mut cp.z, &grads.z, lambda_lr)?;
        if cp.z.iter().any(|z| !z.is_finite()) {
            return Err(Error::TrainingDiverged {
                iteration: k as usize,
                detail: "non-finite biophysical parameter".into(),
            });
        }
    }
    Ok(PhysicsOutcome {
        bundle,
        cp,
        balance,
        history,
    })
}

fn diverged(k: u64, e: Error) -> Error {
    match e {
        Error::NonFiniteInput(detail) => Error::TrainingDiverged {
            iteration: k as usize,
            detail,
        },
        e => e,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterCounts {
    pub stage1: u64,
    pub stage2: u64,
}

/// The deterministic part of a run, written as the result JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultSummary {
    pub lambda_hat: NamedValues,
    pub rel_errors: NamedValues,
    pub state_errors: NamedValues,
    pub iters: IterCounts,
}

pub struct EstimationResult {
    pub spec: ModelSpec,
    pub truth: ModelParams,
    pub lambda_hat: ModelParams,
    pub per_param_rel_error: NamedValues,
    pub state_errors: NamedValues,
    pub iters: IterCounts,
    pub selection: FrequencySelection,
    pub pretrain_history: Vec<f64>,
    pub loss_history: Vec<LossRecord>,
    pub final_weights: Vec<f64>,
    /// One network per state, in state order.
    pub nets: Vec<FourierNet>,
    pub clean: Trajectory,
    pub observations: TimeSeries,
    /// Network predictions on the observation grid.
    pub reconstruction: Trajectory,
    /// Wall-clock seconds per phase; not part of the summary.
    pub phase_seconds: NamedValues,
}

impl EstimationResult {
    pub fn summary(&self) -> ResultSummary {
        let mut lambda_hat = NamedValues::default();
        for name in self.spec.estimated_names() {
            lambda_hat.push(&name, self.lambda_hat.get(&name).expect("estimated names exist"));
        }
        ResultSummary {
            lambda_hat,
            rel_errors: self.per_param_rel_error.clone(),
            state_errors: self.state_errors.clone(),
            iters: self.iters.clone(),
        }
    }

    /// Parameter count of each network, by state.
    pub fn param_counts(&self) -> Vec<(String, usize)> {
        self.spec
            .state_names
            .iter()
            .cloned()
            .zip(self.nets.iter().map(FourierNet::param_count))
            .collect()
    }
}

/// Observed data, frequency selection and ground truth for a config.
pub struct PreparedData {
    pub spec: ModelSpec,
    pub truth: ModelParams,
    pub clean: Trajectory,
    pub observations: TimeSeries,
    pub selection: FrequencySelection,
}

pub fn prepare_data(cfg: &EstimationConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let (spec, truth) = cfg.regime()?.load();
    let proto = Protocol::for_model(spec.id).with_transient(cfg.protocol.transient_ms);
    let clean = generate_with(&spec, &truth, &proto)?;
    let v = clean.component(spec.observed_index);
    let observations = add_noise(&v, &cfg.noise)?;
    let selection = select_with_policy(&power_spectrum(&observations)?, cfg.fft.p, cfg.fft.dc)?;
    Ok(PreparedData {
        spec,
        truth,
        clean,
        observations,
        selection,
    })
}

/// Wraps externally supplied data. `clean` is the reference trajectory used for
/// the state errors; the frequency selection is recomputed from `observations`.
pub fn prepare_from(cfg: &EstimationConfig, clean: Trajectory, observations: TimeSeries) -> Result<PreparedData> {
    cfg.validate()?;
    let (spec, truth) = cfg.regime()?.load();
    if clean.state_names != spec.state_names {
        return Err(Error::contract(format!(
            "trajectory columns {:?} do not match model {}",
            clean.state_names, spec.id
        )));
    }
    if clean.len() != observations.len() || clean.dt != observations.dt {
        return Err(Error::contract("trajectory and observations are on different grids"));
    }
    let selection = select_with_policy(&power_spectrum(&observations)?, cfg.fft.p, cfg.fft.dc)?;
    Ok(PreparedData {
        spec,
        truth,
        clean,
        observations,
        selection,
    })
}

/// Initial biophysical parameters named by the config.
pub fn initial_guess(cfg: &EstimationConfig, spec: &ModelSpec) -> Result<ConstrainedParams> {
    if cfg.init_guess == "ones" {
        return Ok(ConstrainedParams::ones(spec));
    }
    let (_, p) = Regime::parse(&cfg.init_guess)?.load();
    ConstrainedParams::from_params(spec, &p)
}

/// Builds the untrained networks: the observed state gets the fixed
/// frequencies only, hidden states add as many trainable ones.
pub fn build_networks(cfg: &EstimationConfig, spec: &ModelSpec, sel: &FrequencySelection) -> Result<Vec<FourierNet>> {
    let layout = NetLayout {
        hidden: cfg.net.widths.clone(),
    };
    let rwf = RwfInit {
        mu: cfg.net.rwf_mu,
        sigma: cfg.net.rwf_sigma,
    };
    let fixed = sel.angular_freqs.clone();
    spec.state_names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let out = OutputMap::for_state(name);
            if j == spec.observed_index {
                init_network(&layout, FourierEmbedding::fixed(fixed.clone()), out, rwf, derive_seed(cfg.net.seed, TAG_VNET))
            } else {
                let emb = FourierEmbedding::hybrid(
                    fixed.clone(),
                    fixed.len(),
                    derive_seed(cfg.net.seed, TAG_HIDDEN_FREQS + j as u64),
                )?;
                init_network(&layout, emb, out, rwf, derive_seed(cfg.net.seed, TAG_HIDDEN_NET + j as u64))
            }
        })
        .collect()
}

/// The full two-stage pipeline for a config.
pub fn run_estimation(cfg: &EstimationConfig) -> Result<EstimationResult> {
    run_estimation_with(cfg, &mut |_, _| {})
}

pub fn run_estimation_with(
    cfg: &EstimationConfig,
    progress: &mut dyn FnMut(u64, &LossRecord),
) -> Result<EstimationResult> {
    let start = Instant::now();
    let data = prepare_data(cfg)?;
    let mut res = run_estimation_on(cfg, data, progress)?;
    res.phase_seconds.0.insert(0, ("data".into(), 0.0));
    let total: f64 = res.phase_seconds.iter().skip(1).map(|(_, s)| s).sum();
    res.phase_seconds.0[0].1 = (start.elapsed().as_secs_f64() - total).max(0.0);
    Ok(res)
}

/// Runs both stages on already prepared data, e.g. observations read from disk.
pub fn run_estimation_on(
    cfg: &EstimationConfig,
    data: PreparedData,
    progress: &mut dyn FnMut(u64, &LossRecord),
) -> Result<EstimationResult> {
    cfg.validate()?;
    if data.spec.id != ModelId::parse(&cfg.model)? {
        return Err(Error::contract("prepared data belongs to another model"));
    }
    let mut phase_seconds = NamedValues::default();
    let mut clock = Instant::now();
    let PreparedData {
        spec,
        truth,
        clean,
        observations,
        selection,
    } = data;
    log::info!(
        "{}: m* = {} ({} embedded frequencies)",
        cfg.regime,
        selection.m_star,
        selection.angular_freqs.len()
    );
    let mut nets = build_networks(cfg, &spec, &selection)?;
    let obs_idx = spec.observed_index;
    let batch1 = cfg.stage1.batch.min(observations.len());
    let pretrain_history = pretrain_voltage(
        &mut nets[obs_idx],
        &observations,
        cfg.stage1_schedule(),
        batch1,
        cfg.stage1.iters,
        derive_seed(cfg.batch_seed, TAG_STAGE1_BATCH),
    )?;
    if let Some(l) = pretrain_history.last() {
        log::info!("voltage pretraining finished, misfit {l:.4e}");
    }
    phase_seconds.push("pretrain", clock.elapsed().as_secs_f64());
    clock = Instant::now();

    let mut trainable = vec![true; spec.dim()];
    trainable[obs_idx] = cfg.stage2.train_v;
    let cp = initial_guess(cfg, &spec)?;
    let b = &cfg.stage2.balance;
    let problem = EstimationProblem {
        spec: spec.clone(),
        base: truth.clone(),
        cp,
        bundle: NetBundle { nets, trainable },
        obs: observations.clone(),
        theta_schedule: cfg.theta_schedule(),
        lambda_lr: cfg.stage2.lr_lambda,
        iters: cfg.stage2.iters,
        batch: cfg.stage2.batch,
        balance: BalanceState::new(spec.dim(), b.alpha, b.eps, b.update_every),
        data_weight: cfg.stage2.data_weight,
        seed: derive_seed(cfg.batch_seed, TAG_STAGE2_BATCH),
        log_every: cfg.log_every,
        edge_trim: (cfg.stage2.edge_trim_ms / observations.dt).round() as usize,
        scaling: cfg.stage2.residual_scaling,
    };
    let outcome = run_physics_stage_with(problem, progress)?;
    phase_seconds.push("physics", clock.elapsed().as_secs_f64());
    clock = Instant::now();

    let lambda_hat = outcome.cp.apply(&spec, &truth)?;
    let mut per_param_rel_error = NamedValues::default();
    for name in spec.estimated_names() {
        let t = truth.get(&name).expect("declared");
        let e = lambda_hat.get(&name).expect("declared");
        per_param_rel_error.push(&name, param_rel_error(t, e)?);
    }
    let grid = observations.times();
    let mut cols = Vec::with_capacity(spec.dim());
    let mut state_errors = NamedValues::default();
    for (j, net) in outcome.bundle.nets.iter().enumerate() {
        let (v, _) = eval_on_grid(net, &grid);
        let truth_j = clean.component(j);
        state_errors.push(&spec.state_names[j], normalized_l2_slices(&truth_j.values, &v)?);
        cols.push(v);
    }
    let data: Vec<f64> = (0..grid.len()).flat_map(|i| cols.iter().map(move |c| c[i])).collect();
    let reconstruction = Trajectory::from_rows(spec.id, spec.state_names.clone(), clean.t0, clean.dt, data)?;
    phase_seconds.push("evaluate", clock.elapsed().as_secs_f64());
    Ok(EstimationResult {
        spec,
        truth,
        lambda_hat,
        per_param_rel_error,
        state_errors,
        iters: IterCounts {
            stage1: cfg.stage1.iters,
            stage2: cfg.stage2.iters,
        },
        selection,
        pretrain_history,
        loss_history: outcome.history,
        final_weights: outcome.balance.weights,
        nets: outcome.bundle.nets,
        clean,
        observations,
        reconstruction,
        phase_seconds,
    })
}
