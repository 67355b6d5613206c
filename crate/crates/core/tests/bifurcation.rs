use neuropinn::bifurcation::{continue_equilibria, Stability};
use neuropinn::sim::integrate;
use neuropinn::Regime;

fn stable_points_return(regime: Regime, range: (f64, f64)) -> usize {
    let (spec, params) = regime.load();
    let branches = continue_equilibria(&spec, &params, "I_app", range, 2000).unwrap();
    let slot = spec.param_index("I_app").unwrap();
    let mut checked = 0;
    for branch in &branches {
        let stable: Vec<_> = branch.points.iter().filter(|p| p.stability == Stability::Stable).collect();
        let stride = (stable.len() / 10).max(1);
        for point in stable.iter().step_by(stride).take(10) {
            let mut p = params.clone();
            p.set(&spec.params[slot].name, point.bif_param).unwrap();
            let f = spec.eval_vector_field(&point.state, &p).unwrap();
            assert!(f.iter().all(|v| v.abs() < 1e-10), "residual {f:?}");
            let mut x0 = point.state.clone();
            x0[spec.observed_index] += 0.1;
            let tr = integrate(&spec, &p, &x0, 0.01, 50_000).unwrap();
            let end = tr.row(tr.len() - 1)[spec.observed_index];
            let drift = (end - point.state[spec.observed_index]).abs();
            assert!(drift < 0.5, "{regime} at I_app = {}: drift {drift} mV", point.bif_param);
            checked += 1;
        }
    }
    checked
}

#[test]
fn stable_equilibria_attract_perturbations() {
    assert!(stable_points_return(Regime::Hopf, (0.0, 250.0)) >= 10);
    assert!(stable_points_return(Regime::Snic, (0.0, 150.0)) >= 10);
}

#[test]
fn continuation_is_deterministic() {
    let (spec, params) = Regime::Homoclinic.load();
    let a = continue_equilibria(&spec, &params, "I_app", (0.0, 100.0), 2000).unwrap();
    let b = continue_equilibria(&spec, &params, "I_app", (0.0, 100.0), 2000).unwrap();
    assert_eq!(a, b);
}
