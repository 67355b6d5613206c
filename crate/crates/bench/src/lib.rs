//! Shared fixtures for the kernel benchmarks.

use neuropinn::sim::{generate, TimeSeries};
use neuropinn::spectral::{power_spectrum, select_dominant_frequencies};
use neuropinn::train::{build_networks, ConstrainedParams, EstimationConfig, NetBundle};
use neuropinn::{ModelParams, ModelSpec, Regime};

/// Everything one stage-2 step needs for the oscillating Morris–Lecar model.
pub struct HopfFixture {
    pub spec: ModelSpec,
    pub truth: ModelParams,
    pub voltage: TimeSeries,
    pub bundle: NetBundle,
    pub cp: ConstrainedParams,
    pub batch: Vec<f64>,
}

pub fn hopf_fixture(batch: usize) -> HopfFixture {
    let cfg = EstimationConfig::from_json(&serde_json::json!({ "regime": "hopf" })).expect("config");
    let (spec, truth) = Regime::Hopf.load();
    let traj = generate(&spec, &truth).expect("simulation");
    let voltage = traj.component(spec.observed_index);
    let sel = select_dominant_frequencies(&power_spectrum(&voltage).expect("spectrum"), cfg.fft.p).expect("selection");
    let nets = build_networks(&cfg, &spec, &sel).expect("networks");
    let trainable = (0..nets.len()).map(|j| j != spec.observed_index).collect();
    let cp = ConstrainedParams::from_params(&spec, &truth).expect("constrained params");
    let span = voltage.dt * (voltage.len() - 1) as f64;
    let batch = (0..batch).map(|i| span * i as f64 / batch as f64).collect();
    HopfFixture {
        spec,
        truth,
        voltage,
        bundle: NetBundle { nets, trainable },
        cp,
        batch,
    }
}
