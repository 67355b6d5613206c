//! Fourier-feature MLP surrogate for a single state variable.
//!
//! Input time `t` (ms) is embedded as interleaved `[sin(w t), cos(w t)]` pairs,
//! fixed frequencies first, then trainable ones. Every dense layer uses random
//! weight factorization: the effective weight is `diag(exp(s)) * W_N`, with one
//! scale per input row. Hidden layers use the logistic sigmoid.
//!
//! Evaluation carries a tangent along `t` next to every activation, so the
//! time derivative is exact. The backward pass reverses that augmented forward
//! pass and returns gradients of any scalar built from the value and its time
//! derivative. Parameters live in one flat buffer:
//! `[trainable freqs | per layer: W_N (row-major, in x out), s (in), b (out)]`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Map applied to the last pre-activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputMap {
    Identity,
    Sigmoid,
    Softplus,
}

impl OutputMap {
    /// Value, first and second derivative at `z`.
    #[inline]
    fn eval(self, z: f64) -> (f64, f64, f64) {
        match self {
            OutputMap::Identity => (z, 1.0, 0.0),
            OutputMap::Sigmoid => {
                let y = sigmoid(z);
                let d1 = y * (1.0 - y);
                (y, d1, d1 * (1.0 - 2.0 * y))
            }
            OutputMap::Softplus => {
                let sg = sigmoid(z);
                (softplus(z), sg, sg * (1.0 - sg))
            }
        }
    }

    /// Output map suited to a state: voltage unbounded, gates in (0, 1),
    /// concentrations positive.
    pub fn for_state(name: &str) -> Self {
        match name {
            "n" | "h" => OutputMap::Sigmoid,
            "Ca" => OutputMap::Softplus,
            _ => OutputMap::Identity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierEmbedding {
    /// rad/ms
    pub fixed_freqs: Vec<f64>,
    /// rad/ms
    pub trainable_freqs: Vec<f64>,
}

impl FourierEmbedding {
    pub fn fixed(freqs: Vec<f64>) -> Self {
        FourierEmbedding {
            fixed_freqs: freqs,
            trainable_freqs: Vec::new(),
        }
    }

    /// Fixed frequencies plus `m` trainable ones drawn uniformly over the
    /// fixed range.
    pub fn hybrid(fixed: Vec<f64>, m: usize, seed: u64) -> Result<Self> {
        if fixed.is_empty() {
            return Err(Error::contract("embedding needs at least one fixed frequency"));
        }
        let lo = fixed.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = fixed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trainable = (0..m)
            .map(|_| if hi > lo { rng.random_range(lo..hi) } else { lo })
            .collect();
        Ok(FourierEmbedding {
            fixed_freqs: fixed,
            trainable_freqs: trainable,
        })
    }

    pub fn n_freqs(&self) -> usize {
        self.fixed_freqs.len() + self.trainable_freqs.len()
    }

    pub fn dim(&self) -> usize {
        2 * self.n_freqs()
    }

    pub fn freqs(&self) -> impl Iterator<Item = f64> + '_ {
        self.fixed_freqs.iter().chain(&self.trainable_freqs).copied()
    }
}

/// Features and their time derivatives at `t`.
pub fn embed(t: f64, emb: &FourierEmbedding) -> (Vec<f64>, Vec<f64>) {
    let mut f = Vec::with_capacity(emb.dim());
    let mut df = Vec::with_capacity(emb.dim());
    for w in emb.freqs() {
        let (sn, cs) = (w * t).sin_cos();
        f.extend([sn, cs]);
        df.extend([w * cs, -w * sn]);
    }
    (f, df)
}

/// Hidden widths of the dense stack; the output width is always 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetLayout {
    pub hidden: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RwfInit {
    pub mu: f64,
    pub sigma: f64,
}

impl Default for RwfInit {
    fn default() -> Self {
        RwfInit { mu: 0.5, sigma: 0.1 }
    }
}

/// Borrowed view of one factorized layer.
pub struct RwfLayer<'a> {
    pub w_n: ArrayView2<'a, f64>,
    pub s: ArrayView1<'a, f64>,
    pub b: ArrayView1<'a, f64>,
}

impl RwfLayer<'_> {
    pub fn effective_weight(&self) -> Array2<f64> {
        let mut w = self.w_n.to_owned();
        for (mut row, &si) in w.rows_mut().into_iter().zip(self.s.iter()) {
            row *= si.exp();
        }
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerSlots {
    n_in: usize,
    n_out: usize,
    w: usize,
    s: usize,
    b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FourierNet {
    fixed_freqs: Vec<f64>,
    n_trainable: usize,
    dims: Vec<usize>,
    output: OutputMap,
    slots: Vec<LayerSlots>,
    params: Vec<f64>,
}

fn layer_slots(n_trainable: usize, dims: &[usize]) -> (Vec<LayerSlots>, usize) {
    let mut off = n_trainable;
    let mut slots = Vec::with_capacity(dims.len() - 1);
    for win in dims.windows(2) {
        let (n_in, n_out) = (win[0], win[1]);
        let w = off;
        let s = w + n_in * n_out;
        let b = s + n_in;
        off = b + n_out;
        slots.push(LayerSlots { n_in, n_out, w, s, b });
    }
    (slots, off)
}

pub fn init_network(
    layout: &NetLayout,
    emb: FourierEmbedding,
    output: OutputMap,
    rwf: RwfInit,
    seed: u64,
) -> Result<FourierNet> {
    if layout.hidden.iter().any(|&w| w == 0) {
        return Err(Error::contract("layer widths must be at least 1"));
    }
    if emb.n_freqs() == 0 {
        return Err(Error::contract("embedding has no frequencies"));
    }
    if !(rwf.sigma >= 0.0) || !rwf.mu.is_finite() {
        return Err(Error::contract("invalid RWF initialization"));
    }
    let mut dims = vec![emb.dim()];
    dims.extend(&layout.hidden);
    dims.push(1);
    let n_trainable = emb.trainable_freqs.len();
    let (slots, total) = layer_slots(n_trainable, &dims);
    let mut params = vec![0.0; total];
    params[..n_trainable].copy_from_slice(&emb.trainable_freqs);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = Normal::new(rwf.mu, rwf.sigma).map_err(|e| Error::contract(e.to_string()))?;
    for sl in &slots {
        let limit = (6.0 / (sl.n_in + sl.n_out) as f64).sqrt();
        let glorot = Uniform::new(-limit, limit).expect("positive limit");
        for p in &mut params[sl.w..sl.s] {
            *p = glorot.sample(&mut rng);
        }
        for p in &mut params[sl.s..sl.b] {
            *p = scale.sample(&mut rng);
        }
        for p in &mut params[sl.b..sl.b + sl.n_out] {
            *p = glorot.sample(&mut rng);
        }
    }
    Ok(FourierNet {
        fixed_freqs: emb.fixed_freqs,
        n_trainable,
        dims,
        output,
        slots,
        params,
    })
}

/// Activations recorded by [`FourierNet::eval_batch`] for the backward pass.
pub struct Tape {
    ts: Vec<f64>,
    /// Input of each layer and its tangent, batch along rows.
    inputs: Vec<(Array2<f64>, Array2<f64>)>,
    /// Pre-activation tangents of the hidden layers.
    hidden_zdot: Vec<Array2<f64>>,
    out_z: Array1<f64>,
    out_zdot: Array1<f64>,
    weights: Vec<Array2<f64>>,
    pub value: Vec<f64>,
    pub dvalue_dt: Vec<f64>,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.ts
    }
}

impl FourierNet {
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn output_map(&self) -> OutputMap {
        self.output
    }

    /// Widths from embedding dimension to the scalar output.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn n_layers(&self) -> usize {
        self.slots.len()
    }

    pub fn embedding(&self) -> FourierEmbedding {
        FourierEmbedding {
            fixed_freqs: self.fixed_freqs.clone(),
            trainable_freqs: self.params[..self.n_trainable].to_vec(),
        }
    }

    /// Index range of the trainable frequencies in the flat buffer.
    pub fn freq_range(&self) -> std::ops::Range<usize> {
        0..self.n_trainable
    }

    /// Index range of layer `l`'s RWF scales in the flat buffer.
    pub fn scale_range(&self, l: usize) -> std::ops::Range<usize> {
        self.slots[l].s..self.slots[l].b
    }

    pub fn layer(&self, l: usize) -> RwfLayer<'_> {
        let sl = self.slots[l];
        let p = &self.params;
        RwfLayer {
            w_n: ArrayView2::from_shape((sl.n_in, sl.n_out), &p[sl.w..sl.s]).expect("layout"),
            s: ArrayView1::from(&p[sl.s..sl.b]),
            b: ArrayView1::from(&p[sl.b..sl.b + sl.n_out]),
        }
    }

    fn features(&self, ts: &[f64]) -> (Array2<f64>, Array2<f64>) {
        let d = self.dims[0];
        let mut a = Array2::zeros((ts.len(), d));
        let mut ad = Array2::zeros((ts.len(), d));
        let freqs: Vec<f64> = self
            .fixed_freqs
            .iter()
            .chain(&self.params[..self.n_trainable])
            .copied()
            .collect();
        for (i, &t) in ts.iter().enumerate() {
            for (k, &w) in freqs.iter().enumerate() {
                let (sn, cs) = (w * t).sin_cos();
                a[[i, 2 * k]] = sn;
                a[[i, 2 * k + 1]] = cs;
                ad[[i, 2 * k]] = w * cs;
                ad[[i, 2 * k + 1]] = -w * sn;
            }
        }
        (a, ad)
    }

    /// Values and exact time derivatives at every `t`, with the record needed
    /// for [`FourierNet::backward_batch`].
    pub fn eval_batch(&self, ts: &[f64]) -> Tape {
        let (mut a, mut ad) = self.features(ts);
        let n_layers = self.slots.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut hidden_zdot = Vec::with_capacity(n_layers - 1);
        let mut weights = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let layer = self.layer(l);
            let w = layer.effective_weight();
            let mut z = a.dot(&w);
            z += &layer.b;
            let zd = ad.dot(&w);
            inputs.push((a, ad));
            weights.push(w);
            if l + 1 < n_layers {
                let na = z.mapv(sigmoid);
                let mut nad = zd.clone();
                Zip::from(&mut nad).and(&na).for_each(|d, &y| *d *= y * (1.0 - y));
                hidden_zdot.push(zd);
                a = na;
                ad = nad;
            } else {
                let out_z = z.column(0).to_owned();
                let out_zdot = zd.column(0).to_owned();
                let mut value = Vec::with_capacity(ts.len());
                let mut dvalue_dt = Vec::with_capacity(ts.len());
                for (&zi, &zdi) in out_z.iter().zip(&out_zdot) {
                    let (y, g1, _) = self.output.eval(zi);
                    value.push(y);
                    dvalue_dt.push(g1 * zdi);
                }
                return Tape {
                    ts: ts.to_vec(),
                    inputs,
                    hidden_zdot,
                    out_z,
                    out_zdot,
                    weights,
                    value,
                    dvalue_dt,
                };
            }
        }
        unreachable!("a network has at least one layer")
    }

    pub fn forward(&self, t: f64) -> f64 {
        self.eval_batch(&[t]).value[0]
    }

    pub fn forward_dt(&self, t: f64) -> (f64, f64) {
        let tape = self.eval_batch(&[t]);
        (tape.value[0], tape.dvalue_dt[0])
    }

    /// Adds to `grad` the parameter gradient of `sum_i (adj_value[i] * y_i +
    /// adj_dvalue[i] * dy_i/dt)`, i.e. of any loss whose partials with respect
    /// to the outputs and their time derivatives are the given adjoints.
    pub fn backward_batch(
        &self,
        tape: &Tape,
        adj_value: &[f64],
        adj_dvalue: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        let n = tape.len();
        if adj_value.len() != n || adj_dvalue.len() != n {
            return Err(Error::contract(format!(
                "adjoints have lengths {}/{}, batch has {n}",
                adj_value.len(),
                adj_dvalue.len()
            )));
        }
        if grad.len() != self.params.len() {
            return Err(Error::contract(format!(
                "gradient buffer has length {}, network has {} parameters",
                grad.len(),
                self.params.len()
            )));
        }
        let mut zbar = Array2::zeros((n, 1));
        let mut zdbar = Array2::zeros((n, 1));
        for i in 0..n {
            let (_, g1, g2) = self.output.eval(tape.out_z[i]);
            zbar[[i, 0]] = g1 * adj_value[i] + g2 * tape.out_zdot[i] * adj_dvalue[i];
            zdbar[[i, 0]] = g1 * adj_dvalue[i];
        }

        for l in (0..self.slots.len()).rev() {
            let sl = self.slots[l];
            let (a, ad) = &tape.inputs[l];
            let w = &tape.weights[l];
            let wbar = a.t().dot(&zbar) + ad.t().dot(&zdbar);
            for i in 0..sl.n_in {
                let e = self.params[sl.s + i].exp();
                let mut gs = 0.0;
                for j in 0..sl.n_out {
                    let wb = wbar[[i, j]];
                    grad[sl.w + i * sl.n_out + j] += e * wb;
                    gs += wb * w[[i, j]];
                }
                grad[sl.s + i] += gs;
            }
            for (g, v) in grad[sl.b..sl.b + sl.n_out].iter_mut().zip(zbar.sum_axis(Axis(0))) {
                *g += v;
            }
            if l == 0 && self.n_trainable == 0 {
                break;
            }
            let abar = zbar.dot(&w.t());
            let adbar = zdbar.dot(&w.t());
            if l == 0 {
                self.freq_grads(tape, &abar, &adbar, grad);
                break;
            }
            // The input of layer l is the sigmoid output of layer l - 1.
            let zd = &tape.hidden_zdot[l - 1];
            let mut nz = Array2::zeros(abar.raw_dim());
            let mut nzd = Array2::zeros(abar.raw_dim());
            Zip::from(&mut nz)
                .and(&mut nzd)
                .and(a)
                .and(zd)
                .and(&abar)
                .and(&adbar)
                .for_each(|zb, zdb, &y, &zdot, &ab, &adb| {
                    let d1 = y * (1.0 - y);
                    let d2 = d1 * (1.0 - 2.0 * y);
                    *zb = d1 * ab + d2 * zdot * adb;
                    *zdb = d1 * adb;
                });
            zbar = nz;
            zdbar = nzd;
        }
        Ok(())
    }

    fn freq_grads(&self, tape: &Tape, abar: &Array2<f64>, adbar: &Array2<f64>, grad: &mut [f64]) {
        let nf = self.fixed_freqs.len();
        for j in 0..self.n_trainable {
            let w = self.params[j];
            let (cs, cc) = (2 * (nf + j), 2 * (nf + j) + 1);
            let mut g = 0.0;
            for (i, &t) in tape.ts.iter().enumerate() {
                let (sn, cn) = (w * t).sin_cos();
                g += abar[[i, cs]] * t * cn - abar[[i, cc]] * t * sn
                    + adbar[[i, cs]] * (cn - w * t * sn)
                    - adbar[[i, cc]] * (sn + w * t * cn);
            }
            grad[j] += g;
        }
    }

    /// Gradient for a single time point.
    pub fn backward(&self, t: f64, adj_value: f64, adj_dvalue: f64) -> Vec<f64> {
        let tape = self.eval_batch(&[t]);
        let mut g = vec![0.0; self.params.len()];
        self.backward_batch(&tape, &[adj_value], &[adj_dvalue], &mut g)
            .expect("shapes agree by construction");
        g
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            fixed_freqs: self.fixed_freqs.clone(),
            n_trainable_freqs: self.n_trainable,
            dims: self.dims.clone(),
            output: self.output,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        if c.dims.len() < 2 || c.dims.last() != Some(&1) || c.dims.iter().any(|&d| d == 0) {
            return Err(Error::contract("checkpoint dims must end with a single output"));
        }
        if c.dims[0] != 2 * (c.fixed_freqs.len() + c.n_trainable_freqs) {
            return Err(Error::contract("checkpoint input width does not match its embedding"));
        }
        let (slots, total) = layer_slots(c.n_trainable_freqs, &c.dims);
        if c.params.len() != total {
            return Err(Error::contract(format!(
                "checkpoint has {} parameters, layout needs {total}",
                c.params.len()
            )));
        }
        Ok(FourierNet {
            fixed_freqs: c.fixed_freqs,
            n_trainable: c.n_trainable_freqs,
            dims: c.dims,
            output: c.output,
            slots,
            params: c.params,
        })
    }
}

/// Portable JSON form of a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub fixed_freqs: Vec<f64>,
    pub n_trainable_freqs: usize,
    pub dims: Vec<usize>,
    pub output: OutputMap,
    pub params: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn small_net(seed: u64, n_trainable: usize, output: OutputMap) -> FourierNet {
        let emb = FourierEmbedding::hybrid(vec![0.3, 1.1], n_trainable, seed + 100).unwrap();
        init_network(&NetLayout { hidden: vec![5, 4] }, emb, output, RwfInit::default(), seed).unwrap()
    }

    #[test]
    fn embedding_at_zero() {
        let emb = FourierEmbedding::fixed(vec![0.5, 2.0, 7.0]);
        let (f, df) = embed(0.0, &emb);
        assert_eq!(f, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(df[0], 0.5);
        assert_eq!(df[2], 2.0);
        assert_eq!(df[1], 0.0);
    }

    #[test]
    fn embedding_derivative_matches_differences() {
        let emb = FourierEmbedding::hybrid(vec![0.2, 0.9, 3.1], 2, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 1e-5;
        for _ in 0..20 {
            let t: f64 = rng.random_range(0.0..200.0);
            let (_, df) = embed(t, &emb);
            let (fp, _) = embed(t + h, &emb);
            let (fm, _) = embed(t - h, &emb);
            for k in 0..df.len() {
                let fd = (fp[k] - fm[k]) / (2.0 * h);
                assert!((fd - df[k]).abs() <= 1e-6 * df[k].abs().max(1.0), "{fd} vs {}", df[k]);
            }
        }
    }

    #[test]
    fn trainable_freqs_within_fixed_range() {
        let emb = FourierEmbedding::hybrid(vec![0.4, 2.5, 1.0], 50, 3).unwrap();
        assert_eq!(emb.dim(), 106);
        assert!(emb.trainable_freqs.iter().all(|&w| (0.4..=2.5).contains(&w)));
    }

    #[test]
    fn rwf_scales_are_seeded_normal() {
        let emb = FourierEmbedding::fixed(vec![0.1, 0.2, 0.3, 0.4]);
        let net = init_network(&NetLayout { hidden: vec![50, 50] }, emb, OutputMap::Identity, RwfInit::default(), 11)
            .unwrap();
        let s: Vec<f64> = (0..net.n_layers()).flat_map(|l| net.layer(l).s.to_vec()).collect();
        assert_eq!(s.len(), 8 + 50 + 50);
        let first: Vec<f64> = s.iter().take(150.min(s.len())).copied().collect();
        let mean = first.iter().sum::<f64>() / first.len() as f64;
        assert!((mean - 0.5).abs() < 0.05, "mean {mean}");
        let again = init_network(
            &NetLayout { hidden: vec![50, 50] },
            FourierEmbedding::fixed(vec![0.1, 0.2, 0.3, 0.4]),
            OutputMap::Identity,
            RwfInit::default(),
            11,
        )
        .unwrap();
        assert_eq!(net, again);
    }

    #[test]
    fn parameter_count_for_voltage_net() {
        let emb = FourierEmbedding::fixed(vec![0.1, 0.2, 0.3, 0.4]);
        let net = init_network(&NetLayout { hidden: vec![50, 50] }, emb, OutputMap::Identity, RwfInit::default(), 0)
            .unwrap();
        let expected = (8 * 50 + 50) + (50 * 50 + 50) + (50 + 1) + (8 + 50 + 50);
        assert_eq!(net.param_count(), expected);
    }

    #[test]
    fn zero_scale_gives_raw_weights() {
        let mut net = small_net(2, 0, OutputMap::Identity);
        for l in 0..net.n_layers() {
            let sl = net.slots[l];
            net.params[sl.s..sl.b].fill(0.0);
            let layer = net.layer(l);
            assert_eq!(layer.effective_weight(), layer.w_n.to_owned());
        }
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut net = small_net(4, 0, OutputMap::Identity);
        for l in 0..net.n_layers() {
            let sl = net.slots[l];
            net.params[sl.w..sl.s].fill(0.0);
        }
        let last = *net.slots.last().unwrap();
        net.params[last.b] = 2.5;
        for t in [0.0, 3.0, 77.7] {
            assert_eq!(net.forward_dt(t), (2.5, 0.0));
        }
        let g = net.backward(1.3, 1.0, 0.0);
        assert_eq!(g[last.b], 1.0);
        // Layers below the zero output weights receive no signal.
        for l in 0..net.n_layers() - 1 {
            let sl = net.slots[l];
            assert!(g[sl.w..sl.s].iter().all(|&x| x == 0.0));
        }
        // The output layer sees the constant hidden activations.
        let hidden_b = &net.params[net.slots[net.n_layers() - 2].b..][..last.n_in];
        for i in 0..last.n_in {
            let expected = net.params[last.s + i].exp() * sigmoid(hidden_b[i]);
            assert!((g[last.w + i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn single_linear_layer_derivative() {
        let w = 0.7;
        let mut net = init_network(
            &NetLayout { hidden: vec![] },
            FourierEmbedding::fixed(vec![w]),
            OutputMap::Identity,
            RwfInit { mu: 0.0, sigma: 0.0 },
            0,
        )
        .unwrap();
        let sl = net.slots[0];
        net.params[sl.w..sl.b + 1].copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 0.0]);
        for t in [0.0, 1.0, 4.2] {
            let (y, dy) = net.forward_dt(t);
            assert!((y - (w * t).sin()).abs() < 1e-15);
            assert!((dy - w * (w * t).cos()).abs() < 1e-15);
        }
    }

    #[test]
    fn trainable_frequency_gradient_is_analytic() {
        let mut net = init_network(
            &NetLayout { hidden: vec![] },
            FourierEmbedding {
                fixed_freqs: vec![0.2],
                trainable_freqs: vec![0.9],
            },
            OutputMap::Identity,
            RwfInit { mu: 0.0, sigma: 0.0 },
            0,
        )
        .unwrap();
        let sl = net.slots[0];
        let w = net.params[0];
        let mut wn = vec![0.0; 4];
        wn[2] = 1.0; // sin of the trainable frequency
        net.params[sl.w..sl.s].copy_from_slice(&wn);
        net.params[sl.b] = 0.0;
        let t = 3.3;
        let g = net.backward(t, 1.0, 0.0);
        assert!((g[0] - t * (w * t).cos()).abs() < 1e-14);
    }

    #[test]
    fn time_derivative_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (k, out) in [OutputMap::Identity, OutputMap::Sigmoid, OutputMap::Softplus].iter().enumerate() {
            let net = small_net(k as u64, 2, *out);
            for _ in 0..50 {
                let t: f64 = rng.random_range(0.0..2.0 * PI * 10.0);
                let h = 1e-5;
                let (_, dy) = net.forward_dt(t);
                let fd = (net.forward(t + h) - net.forward(t - h)) / (2.0 * h);
                assert!((fd - dy).abs() <= 1e-6 * dy.abs().max(1e-3), "{fd} vs {dy}");
            }
        }
    }

    fn composite_loss(net: &FourierNet, ts: &[f64], a: f64, b: f64) -> f64 {
        let tape = net.eval_batch(ts);
        tape.value.iter().zip(&tape.dvalue_dt).map(|(y, d)| a * y * y + b * d * d).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..10u64 {
            let out = [OutputMap::Identity, OutputMap::Sigmoid, OutputMap::Softplus][trial as usize % 3];
            let mut net = small_net(trial, (trial % 3) as usize, out);
            let ts: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..30.0)).collect();
            let (a, b) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
            let tape = net.eval_batch(&ts);
            let av: Vec<f64> = tape.value.iter().map(|y| 2.0 * a * y).collect();
            let ad: Vec<f64> = tape.dvalue_dt.iter().map(|d| 2.0 * b * d).collect();
            let mut g = vec![0.0; net.param_count()];
            net.backward_batch(&tape, &av, &ad, &mut g).unwrap();
            for i in 0..net.param_count() {
                let p0 = net.params[i];
                let h = 1e-6 * p0.abs().max(1.0);
                net.params[i] = p0 + h;
                let lp = composite_loss(&net, &ts, a, b);
                net.params[i] = p0 - h;
                let lm = composite_loss(&net, &ts, a, b);
                net.params[i] = p0;
                let fd = (lp - lm) / (2.0 * h);
                let err = (fd - g[i]).abs() / g[i].abs().max(fd.abs()).max(1e-4);
                assert!(err < 1e-5, "trial {trial} param {i}: analytic {} vs fd {fd}", g[i]);
            }
        }
    }

    #[test]
    fn batch_gradient_is_sum_of_singles() {
        let net = small_net(21, 1, OutputMap::Sigmoid);
        let ts = [0.5, 4.0, 9.5];
        let tape = net.eval_batch(&ts);
        let mut g = vec![0.0; net.param_count()];
        net.backward_batch(&tape, &[1.0, -0.5, 2.0], &[0.3, 0.7, -1.0], &mut g).unwrap();
        let mut sum = vec![0.0; net.param_count()];
        for (i, &t) in ts.iter().enumerate() {
            let gi = net.backward(t, [1.0, -0.5, 2.0][i], [0.3, 0.7, -1.0][i]);
            for (s, x) in sum.iter_mut().zip(gi) {
                *s += x;
            }
        }
        for (x, y) in g.iter().zip(&sum) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn backward_rejects_shape_mismatch() {
        let net = small_net(1, 0, OutputMap::Identity);
        let tape = net.eval_batch(&[1.0, 2.0]);
        let mut g = vec![0.0; net.param_count()];
        assert!(net.backward_batch(&tape, &[1.0], &[1.0, 1.0], &mut g).is_err());
        let mut short = vec![0.0; 3];
        assert!(net.backward_batch(&tape, &[1.0, 1.0], &[1.0, 1.0], &mut short).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let net = small_net(8, 3, OutputMap::Softplus);
        let json = serde_json::to_string(&net.to_checkpoint()).unwrap();
        let back = FourierNet::from_checkpoint(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.param_count(), net.param_count());
        for (a, b) in back.params().iter().zip(net.params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back, net);
    }

    #[test]
    fn outputs_respect_their_ranges() {
        let sig = small_net(3, 0, OutputMap::Sigmoid);
        let sp = small_net(3, 0, OutputMap::Softplus);
        for t in [0.0, 10.0, 100.0] {
            let y = sig.forward(t);
            assert!(y > 0.0 && y < 1.0);
            assert!(sp.forward(t) > 0.0);
        }
    }
}
