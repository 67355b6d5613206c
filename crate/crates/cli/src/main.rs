use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use neuropinn::bifurcation::{
    diagram_distance, sweep_diagram_with, BifurcationDiagram, ContinuationOptions, EventKind,
};
use neuropinn::models::ParamMap;
use neuropinn::net::{Checkpoint, FourierNet};
use neuropinn::sim::{add_noise, generate_with, NoiseSpec, Protocol, TimeSeries, Trajectory};
use neuropinn::spectral::{power_spectrum, select_with_policy, DcPolicy};
use neuropinn::train::{
    eval_on_grid, normalized_l2_slices, param_rel_error, prepare_data, prepare_from, run_estimation_on,
    write_loss_csv, EstimationConfig, NamedValues,
};
use neuropinn::{Error, ModelId, ModelParams, ModelSpec, Regime};

#[derive(Parser)]
#[command(name = "neuropinn", version, about = "PINN parameter estimation for conductance-based neuron models")]
struct Cli {
    /// Output directory; defaults to $NEUROPINN_OUT_DIR, then `./out`.
    #[arg(long, global = true, env = "NEUROPINN_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a model and write the trajectory and observation CSVs.
    Simulate(SimulateArgs),
    /// Power spectrum and dominant-frequency selection of an observation CSV.
    Spectrum(SpectrumArgs),
    /// Run the two-stage estimation.
    Train(TrainArgs),
    /// Recompute metrics and the reconstruction from a train output directory.
    Evaluate(EvaluateArgs),
    /// Bifurcation diagram over one parameter.
    Bifurcate(BifurcateArgs),
    /// Distance between two diagrams written by `bifurcate`.
    Diff(DiffArgs),
}

#[derive(Args)]
struct ModelSel {
    /// Model id (sml, bml, pbc, pbc-fast).
    #[arg(long)]
    model: Option<String>,
    /// Regime preset supplying the parameter values.
    #[arg(long)]
    regime: Option<String>,
    /// JSON object of parameter values, or a result JSON with `lambda_hat`.
    #[arg(long)]
    params_file: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    sel: ModelSel,
    /// `relative:<level>` or `absolute:<mV>`.
    #[arg(long, default_value = "relative:0.01")]
    noise: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Warm-up discarded before the window, in ms.
    #[arg(long)]
    transient_ms: Option<f64>,
}

#[derive(Args)]
struct SpectrumArgs {
    /// Observation CSV (`t,V`); defaults to `<out-dir>/observations.csv`.
    #[arg(long)]
    observations: Option<PathBuf>,
    #[arg(long, default_value_t = 95.0)]
    p: f64,
    /// `include` or `exclude` the zero-frequency bin.
    #[arg(long, default_value = "include")]
    dc: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Partial JSON config merged over the regime defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    regime: Option<String>,
    /// Initial guess: a regime name or `ones`.
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    noise: Option<String>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    net_seed: Option<u64>,
    #[arg(long)]
    batch_seed: Option<u64>,
    #[arg(long)]
    stage1_iters: Option<u64>,
    #[arg(long)]
    stage2_iters: Option<u64>,
    /// Keep training the voltage network in stage 2 with the data misfit.
    #[arg(long)]
    train_v: bool,
    /// Trajectory CSV from `simulate`; requires `--observations`.
    #[arg(long, requires = "observations")]
    trajectory: Option<PathBuf>,
    /// Observation CSV from `simulate`; requires `--trajectory`.
    #[arg(long, requires = "trajectory")]
    observations: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory written by `train`.
    #[arg(long)]
    run_dir: PathBuf,
}

#[derive(Args)]
struct BifurcateArgs {
    #[command(flatten)]
    sel: ModelSel,
    #[arg(long, default_value = "I_app")]
    param: String,
    /// `a:b`
    #[arg(long, default_value = "0:250", allow_hyphen_values = true)]
    range: String,
    #[arg(long, default_value_t = 51)]
    orbit_samples: usize,
    #[arg(long, default_value_t = 2000)]
    max_points: usize,
    /// Multi-start seed of the continuation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DiffArgs {
    /// Reference `diagram.json`.
    #[arg(long)]
    a: PathBuf,
    /// Compared `diagram.json`.
    #[arg(long)]
    b: PathBuf,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_hash: String,
    tool_version: String,
    seeds: BTreeMap<String, u64>,
    outputs: Vec<String>,
    phase_seconds: NamedValues,
    wall_time_s: f64,
}

struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: PathBuf) -> anyhow::Result<Self> {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Outputs { dir, files: Vec::new() })
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> neuropinn::Result<()>) -> anyhow::Result<()> {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        f(&mut w)?;
        w.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)?;
            Ok(())
        })
    }

    fn manifest(
        mut self,
        command: &str,
        canonical: &Value,
        seeds: BTreeMap<String, u64>,
        phase_seconds: NamedValues,
        start: Instant,
    ) -> anyhow::Result<()> {
        let manifest = RunManifest {
            command: command.to_string(),
            config_hash: config_hash(canonical),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds,
            outputs: self.files.clone(),
            phase_seconds,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        self.json("manifest.json", &manifest)
    }
}

fn config_hash(canonical: &Value) -> String {
    let bytes = serde_json::to_vec(canonical).expect("JSON values serialize");
    hex::encode(Sha256::digest(&bytes))
}

/// Exit code for a failure: 2 config, 3 numeric, 4 divergence.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::TrainingDiverged { .. }) => 4,
        Some(Error::NonFiniteInput(_) | Error::IntegrationBlowup { .. } | Error::NoSignal | Error::UndefinedMetric(_)) => 3,
        _ if err.downcast_ref::<NumericFailure>().is_some() => 3,
        _ => 2,
    }
}

#[derive(Debug)]
struct NumericFailure(String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let out_dir = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    let result = match cli.cmd {
        Command::Simulate(a) => simulate(a, out_dir),
        Command::Spectrum(a) => spectrum(a, out_dir),
        Command::Train(a) => train(a, out_dir),
        Command::Evaluate(a) => evaluate(a, out_dir),
        Command::Bifurcate(a) => bifurcate(a, out_dir),
        Command::Diff(a) => diff(a, out_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn read_json(path: &Path) -> anyhow::Result<Value> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

/// Resolves the model and parameter values from `--model`, `--regime` and
/// `--params-file`, in increasing priority.
fn resolve_params(sel: &ModelSel) -> anyhow::Result<(ModelSpec, ModelParams)> {
    let regime = sel.regime.as_deref().map(Regime::parse).transpose()?;
    let model = match (&sel.model, regime) {
        (Some(m), Some(r)) => {
            let id = ModelId::parse(m)?;
            let fast_of_pbc = id == ModelId::PbcFast && r.model() == ModelId::Pbc;
            if r.model() != id && !fast_of_pbc {
                return Err(Error::Contract(format!("regime {r} does not belong to model {id}")).into());
            }
            id
        }
        (Some(m), None) => ModelId::parse(m)?,
        (None, Some(r)) => r.model(),
        (None, None) => return Err(Error::Contract("give --model or --regime".into()).into()),
    };
    let spec = ModelSpec::new(model);
    let mut params = spec.default_params();
    if let Some(r) = regime {
        let (_, preset) = r.load();
        for (k, v) in preset.iter() {
            if spec.param_index(k).is_ok() {
                params.set(k, v)?;
            }
        }
    }
    if let Some(path) = &sel.params_file {
        let mut v = read_json(path)?;
        if let Some(inner) = v.get("lambda_hat") {
            v = inner.clone();
        }
        let map: ParamMap = serde_json::from_value(v).map_err(|e| Error::Contract(format!("params file: {e}")))?;
        for (k, x) in &map.0 {
            params.set(k, *x)?;
        }
    }
    spec.validate(&params)?;
    Ok((spec, params))
}

fn simulate(a: SimulateArgs, out_dir: PathBuf) -> anyhow::Result<()> {
    let start = Instant::now();
    let (spec, params) = resolve_params(&a.sel)?;
    let noise = NoiseSpec::parse(&a.noise, a.seed)?;
    let mut proto = Protocol::for_model(spec.id);
    if let Some(t) = a.transient_ms {
        proto = proto.with_transient(t);
    }
    let clean = generate_with(&spec, &params, &proto)?;
    let v = clean.component(spec.observed_index);
    let noisy = add_noise(&v, &noise)?;
    let obs_name = spec.state_names[spec.observed_index].clone();
    let as_traj = |s: &TimeSeries| Trajectory::from_rows(spec.id, vec![obs_name.clone()], s.t0, s.dt, s.values.clone());
    let clean_obs = as_traj(&v)?;
    let noisy_obs = as_traj(&noisy)?;

    let mut out = Outputs::new(out_dir)?;
    out.write("trajectory.csv", |w| clean.write_csv(w))?;
    out.write("observations_clean.csv", |w| clean_obs.write_csv(w))?;
    out.write("observations.csv", |w| noisy_obs.write_csv(w))?;
    out.json("params.json", &params)?;
    let canonical = json!({
        "model": spec.id.as_str(),
        "params": params,
        "noise": noise,
        "transient_ms": proto.transient_ms,
    });
    out.json("config.json", &canonical)?;
    let seeds = BTreeMap::from([("data".to_string(), a.seed)]);
    out.manifest("simulate", &canonical, seeds, NamedValues::default(), start)
}

fn read_trajectory(model: ModelId, path: &Path) -> anyhow::Result<Trajectory> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(Trajectory::read_csv(model, BufReader::new(f))?)
}

fn spectrum(a: SpectrumArgs, out_dir: PathBuf) -> anyhow::Result<()> {
    let start = Instant::now();
    let path = a.observations.clone().unwrap_or_else(|| out_dir.join("observations.csv"));
    let traj = read_trajectory(ModelId::Sml, &path)?;
    let series = traj.component(0);
    let dc = DcPolicy::parse(&a.dc)?;
    let spec = power_spectrum(&series)?;
    let sel = select_with_policy(&spec, a.p, dc)?;
    let mut out = Outputs::new(out_dir)?;
    out.write("spectrum.csv", |w| spec.write_csv(w))?;
    out.json("selection.json", &sel)?;
    let canonical = json!({"observations": path.display().to_string(), "p": a.p, "dc": a.dc});
    out.manifest("spectrum", &canonical, BTreeMap::new(), NamedValues::default(), start)
}

fn train_config(a: &TrainArgs) -> anyhow::Result<EstimationConfig> {
    let mut user = match &a.config {
        Some(p) => read_json(p)?,
        None => json!({}),
    };
    let obj = user
        .as_object_mut()
        .ok_or_else(|| Error::Contract("config must be a JSON object".into()))?;
    if let Some(r) = &a.regime {
        obj.insert("regime".into(), json!(r));
        let model = Regime::parse(r)?.model();
        obj.insert("model".into(), json!(model.as_str()));
    }
    if let Some(i) = &a.init {
        obj.insert("init_guess".into(), json!(i));
    }
    let mut patch = json!({});
    if let Some(n) = &a.noise {
        let seed = a.data_seed.unwrap_or(1);
        let ns = NoiseSpec::parse(n, seed)?;
        patch["noise"] = json!({"kind": ns.kind, "level": ns.level});
    }
    if let Some(s) = a.data_seed {
        patch["noise"]["seed"] = json!(s);
    }
    if let Some(s) = a.net_seed {
        patch["net"] = json!({"seed": s});
    }
    if let Some(s) = a.batch_seed {
        patch["batch_seed"] = json!(s);
    }
    if let Some(n) = a.stage1_iters {
        patch["stage1"] = json!({"iters": n});
    }
    if let Some(n) = a.stage2_iters {
        patch["stage2"]["iters"] = json!(n);
    }
    if a.train_v {
        patch["stage2"]["train_v"] = json!(true);
    }
    neuropinn::train::merge(&mut user, &patch);
    Ok(EstimationConfig::from_json(&user)?)
}

fn train(a: TrainArgs, out_dir: PathBuf) -> anyhow::Result<()> {
    let start = Instant::now();
    let cfg = train_config(&a)?;
    let canonical = serde_json::to_value(&cfg)?;
    let data = match (&a.trajectory, &a.observations) {
        (Some(tp), Some(op)) => {
            let model = ModelId::parse(&cfg.model)?;
            let clean = read_trajectory(model, tp)?;
            let obs = read_trajectory(model, op)?.component(0);
            prepare_from(&cfg, clean, obs)?
        }
        _ => prepare_data(&cfg)?,
    };
    let data_seconds = start.elapsed().as_secs_f64();
    let res = run_estimation_on(&cfg, data, &mut |k, r| {
        log::debug!("iter {k}: loss {:.4e}", r.total);
    })?;

    let mut out = Outputs::new(out_dir)?;
    out.json("config.json", &canonical)?;
    out.json("result.json", &res.summary())?;
    out.write("loss.csv", |w| write_loss_csv(w, &res.spec.state_names, &res.loss_history))?;
    out.write("pretrain_loss.csv", |w| {
        writeln!(w, "iter,loss")?;
        for (i, l) in res.pretrain_history.iter().enumerate() {
            writeln!(w, "{i},{l:?}")?;
        }
        Ok(())
    })?;
    out.write("reconstruction.csv", |w| res.reconstruction.write_csv(w))?;
    out.json("selection.json", &res.selection)?;
    for (name, net) in res.spec.state_names.iter().zip(&res.nets) {
        out.json(&format!("checkpoint_{name}.json"), &net.to_checkpoint())?;
    }
    let mut phases = NamedValues::default();
    phases.push("data", data_seconds);
    for (k, v) in res.phase_seconds.iter() {
        phases.push(k, v);
    }
    let seeds = BTreeMap::from([
        ("data".to_string(), cfg.noise.seed),
        ("net_init".to_string(), cfg.net.seed),
        ("training_batch".to_string(), cfg.batch_seed),
    ]);
    let summary = res.summary();
    if let Some((name, e)) = summary.rel_errors.max() {
        log::info!("largest parameter error: {name} {:.2}%", 100.0 * e);
    }
    out.manifest("train", &canonical, seeds, phases, start)
}

fn evaluate(a: EvaluateArgs, out_dir: PathBuf) -> anyhow::Result<()> {
    let start = Instant::now();
    let cfg = EstimationConfig::from_json(&read_json(&a.run_dir.join("config.json"))?)?;
    let result = read_json(&a.run_dir.join("result.json"))?;
    let data = prepare_data(&cfg)?;
    let spec = &data.spec;
    let lambda: ParamMap = serde_json::from_value(
        result
            .get("lambda_hat")
            .cloned()
            .ok_or_else(|| Error::Contract("result.json lacks lambda_hat".into()))?,
    )
    .map_err(|e| Error::Contract(format!("lambda_hat: {e}")))?;
    let mut rel_errors = NamedValues::default();
    for (name, est) in &lambda.0 {
        let truth = data
            .truth
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        rel_errors.push(name, param_rel_error(truth, *est)?);
    }
    let grid = data.observations.times();
    let mut state_errors = NamedValues::default();
    let mut cols = Vec::new();
    for (j, name) in spec.state_names.iter().enumerate() {
        let c: Checkpoint = serde_json::from_value(read_json(&a.run_dir.join(format!("checkpoint_{name}.json")))?)?;
        let net = FourierNet::from_checkpoint(c)?;
        let (v, _) = eval_on_grid(&net, &grid);
        state_errors.push(name, normalized_l2_slices(&data.clean.component(j).values, &v)?);
        cols.push(v);
    }
    let rows: Vec<f64> = (0..grid.len()).flat_map(|i| cols.iter().map(move |c| c[i])).collect();
    let recon = Trajectory::from_rows(spec.id, spec.state_names.clone(), data.clean.t0, data.clean.dt, rows)?;

    let mut out = Outputs::new(out_dir)?;
    out.json("evaluation.json", &json!({"rel_errors": rel_errors, "state_errors": state_errors}))?;
    out.write("reconstruction.csv", |w| recon.write_csv(w))?;
    let canonical = serde_json::to_value(&cfg)?;
    out.manifest("evaluate", &canonical, BTreeMap::new(), NamedValues::default(), start)
}

fn parse_range(s: &str) -> anyhow::Result<(f64, f64)> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| Error::Contract(format!("range `{s}` is not `a:b`")))?;
    let parse = |x: &str| x.trim().parse::<f64>().map_err(|e| Error::Contract(format!("range `{s}`: {e}")));
    Ok((parse(a)?, parse(b)?))
}

fn bifurcate(a: BifurcateArgs, out_dir: PathBuf) -> anyhow::Result<()> {
    let start = Instant::now();
    let (spec, params) = resolve_params(&a.sel)?;
    let range = parse_range(&a.range)?;
    let opts = ContinuationOptions {
        seed: a.seed,
        ..ContinuationOptions::default()
    };
    let windows = neuropinn::bifurcation::default_orbit_windows(spec.id);
    let diagram = sweep_diagram_with(&spec, &params, &a.param, range, a.orbit_samples, a.max_points, windows, &opts)?;
    if diagram.equilibria.is_empty() {
        return Err(NumericFailure(format!("no equilibrium found for {} in {}", a.param, a.range)).into());
    }
    let mut out = Outputs::new(out_dir)?;
    out.write("equilibria.csv", |w| diagram.write_equilibria_csv(w, &spec.state_names))?;
    out.write("events.csv", |w| diagram.write_events_csv(w))?;
    out.write("orbits.csv", |w| diagram.write_orbits_csv(w))?;
    out.json("diagram.json", &diagram)?;
    let canonical = json!({
        "model": spec.id.as_str(),
        "params": params,
        "param": a.param,
        "range": [range.0, range.1],
        "orbit_samples": a.orbit_samples,
        "max_points": a.max_points,
    });
    let seeds = BTreeMap::from([("continuation".to_string(), a.seed)]);
    out.manifest("bifurcate", &canonical, seeds, NamedValues::default(), start)
}

fn read_diagram(path: &Path) -> anyhow::Result<BifurcationDiagram> {
    serde_json::from_value(read_json(path)?).map_err(|e| anyhow!(Error::Contract(format!("{}: {e}", path.display()))))
}

/// Relative shift of each event in `b` from the nearest event of the same kind in `a`.
fn event_shifts(a: &BifurcationDiagram, b: &BifurcationDiagram, kind: EventKind) -> Vec<Value> {
    let ea = a.events_of(kind);
    b.events_of(kind)
        .into_iter()
        .filter_map(|x| {
            let nearest = ea.iter().copied().min_by(|p, q| (p - x).abs().total_cmp(&(q - x).abs()))?;
            let rel = if nearest != 0.0 { (x - nearest).abs() / nearest.abs() } else { (x - nearest).abs() };
            Some(json!({"reference": nearest, "compared": x, "rel_shift": rel}))
        })
        .collect()
}

fn diff(a: DiffArgs, out_dir: PathBuf) -> anyhow::Result<()> {
    let start = Instant::now();
    let da = read_diagram(&a.a)?;
    let db = read_diagram(&a.b)?;
    let d = diagram_distance(&da, &db);
    let report = json!({
        "orbit": d.orbit,
        "equilibria": d.equilibria,
        "total": d.total(),
        "hopf": event_shifts(&da, &db, EventKind::Hopf),
        "fold": event_shifts(&da, &db, EventKind::Fold),
    });
    let mut out = Outputs::new(out_dir)?;
    out.json("distance.json", &report)?;
    let canonical = json!({"a": a.a.display().to_string(), "b": a.b.display().to_string()});
    out.manifest("diff", &canonical, BTreeMap::new(), NamedValues::default(), start)
}
