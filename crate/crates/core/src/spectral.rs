//! Dominant-frequency extraction from the observed voltage.
//!
//! The power spectrum is `|X_k|^2` of the raw signal, one-sided, with physical
//! frequency `f_k = k / (N dt)` in cycles/ms. Selection ranks bins by power and
//! keeps the shortest prefix whose share of the ranked energy reaches `p / 100`.
//! By default the DC bin takes part in the ranking and counts towards `m_star`,
//! but it never enters `angular_freqs`: `sin(0 t)` vanishes and `cos(0 t)` is a
//! constant already covered by the network biases. [`DcPolicy::Exclude`] drops
//! the DC bin entirely and normalizes over the nonzero bins of the
//! mean-removed signal.
//!
//! Selected frequencies are angular, `2 pi f` in rad/ms, so that `sin(w t)` with
//! `t` in ms matches the data.

use std::f64::consts::PI;
use std::io::Write;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::TimeSeries;

#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    /// Cycles per ms, `k / (N dt)` for `k = 0..=N/2`.
    pub freqs: Vec<f64>,
    pub psd: Vec<f64>,
    pub n_samples: usize,
    pub dt: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DcPolicy {
    /// Rank the DC bin with the rest; it counts towards `m_star` when selected.
    #[default]
    Include,
    /// Ignore the DC bin; only nonzero bins are ranked and normalized.
    Exclude,
}

impl DcPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "include" => Ok(DcPolicy::Include),
            "exclude" => Ok(DcPolicy::Exclude),
            _ => Err(Error::Unknown {
                kind: "dc policy",
                name: s.to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencySelection {
    pub p: f64,
    /// Number of selected bins, including DC when it was selected.
    pub m_star: usize,
    #[serde(default)]
    pub dc_selected: bool,
    /// rad/ms, ordered by descending power.
    pub angular_freqs: Vec<f64>,
    /// Bin indices of the nonzero selected frequencies, same order.
    #[serde(default)]
    pub bins: Vec<usize>,
}

fn forward_fft(values: &[f64]) -> Vec<Complex<f64>> {
    let n = values.len();
    let mut buf: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf
}

pub fn power_spectrum(series: &TimeSeries) -> Result<Spectrum> {
    let n = series.len();
    if n < 4 {
        return Err(Error::contract(format!("need at least 4 samples, got {n}")));
    }
    if !(series.dt > 0.0) {
        return Err(Error::contract("non-uniform or degenerate grid"));
    }
    if series.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("series".into()));
    }
    let spec = forward_fft(&series.values);
    let half = n / 2;
    let freqs = (0..=half).map(|k| k as f64 / (n as f64 * series.dt)).collect();
    let psd = spec[..=half].iter().map(|c| c.norm_sqr()).collect();
    Ok(Spectrum {
        freqs,
        psd,
        n_samples: n,
        dt: series.dt,
    })
}

impl Spectrum {
    /// Energy of the full two-sided spectrum reconstructed from the one-sided bins.
    pub fn two_sided_energy(&self) -> f64 {
        let n = self.n_samples;
        let last = self.psd.len() - 1;
        self.psd
            .iter()
            .enumerate()
            .map(|(k, p)| {
                if k == 0 || (n % 2 == 0 && k == last) {
                    *p
                } else {
                    2.0 * p
                }
            })
            .sum()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "freq,psd")?;
        for (f, p) in self.freqs.iter().zip(&self.psd) {
            writeln!(w, "{f:?},{p:?}")?;
        }
        Ok(())
    }
}

pub fn select_dominant_frequencies(spec: &Spectrum, p: f64) -> Result<FrequencySelection> {
    select_with_policy(spec, p, DcPolicy::Include)
}

pub fn select_with_policy(spec: &Spectrum, p: f64, dc: DcPolicy) -> Result<FrequencySelection> {
    if !(p > 0.0 && p < 100.0) {
        return Err(Error::contract(format!("threshold p must be in (0, 100), got {p}")));
    }
    let first = match dc {
        DcPolicy::Include => 0,
        DcPolicy::Exclude => 1,
    };
    let mut bins: Vec<usize> = (first..spec.psd.len()).collect();
    let total: f64 = bins.iter().map(|&k| spec.psd[k]).sum();
    if !(total > 0.0) {
        return Err(Error::NoSignal);
    }
    // Stable sort keeps ties in ascending-frequency order.
    bins.sort_by(|&a, &b| spec.psd[b].total_cmp(&spec.psd[a]));
    let target = p / 100.0;
    let mut acc = 0.0;
    let mut m_star = bins.len();
    for (i, &k) in bins.iter().enumerate() {
        acc += spec.psd[k];
        if acc / total >= target {
            m_star = i + 1;
            break;
        }
    }
    let strongest_ac = bins.iter().copied().find(|&k| k != 0 && spec.psd[k] > 0.0);
    bins.truncate(m_star);
    let dc_selected = bins.contains(&0);
    bins.retain(|&k| k != 0);
    if bins.is_empty() {
        // Only the mean cleared the threshold. Keep the strongest oscillatory
        // bin so the embedding is never empty.
        bins.push(strongest_ac.ok_or(Error::NoSignal)?);
    }
    Ok(FrequencySelection {
        p,
        m_star,
        dc_selected,
        angular_freqs: bins.iter().map(|&k| 2.0 * PI * spec.freqs[k]).collect(),
        bins,
    })
}

/// Inverse DFT keeping the mean and only the selected nonzero bins with their
/// conjugates.
pub fn filtered_reconstruction(series: &TimeSeries, sel: &FrequencySelection) -> Result<TimeSeries> {
    let n = series.len();
    if n < 4 {
        return Err(Error::contract("series too short"));
    }
    let spec = forward_fft(&series.values);
    let mut keep = vec![Complex::new(0.0, 0.0); n];
    keep[0] = spec[0];
    for &k in &sel.bins {
        if k == 0 || k > n / 2 {
            return Err(Error::contract(format!("bin {k} outside the one-sided range")));
        }
        keep[k] = spec[k];
        keep[n - k] = spec[n - k];
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut keep);
    let values = keep.iter().map(|c| c.re / n as f64).collect();
    Ok(TimeSeries {
        t0: series.t0,
        dt: series.dt,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(f: f64, amp: f64, n: usize, dt: f64) -> Vec<f64> {
        (0..n).map(|i| amp * (2.0 * PI * f * i as f64 * dt).sin()).collect()
    }

    fn series(v: Vec<f64>, dt: f64) -> TimeSeries {
        TimeSeries::new(0.0, dt, v).unwrap()
    }

    #[test]
    fn pure_tone_single_dominant_bin() {
        // 2000 samples at 0.1 ms = 200 ms = 10 periods of 0.05 cycles/ms
        let s = series(tone(0.05, 1.0, 2000, 0.1), 0.1);
        let sp = power_spectrum(&s).unwrap();
        let k = sp
            .psd
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!((sp.freqs[k] - 0.05).abs() < 1e-12);
        let mut sorted = sp.psd.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        assert!(sorted[0] > 100.0 * sorted[1].max(1e-300));
        let sel = select_dominant_frequencies(&sp, 99.0).unwrap();
        assert_eq!(sel.m_star, 1);
        assert!((sel.angular_freqs[0] - 2.0 * PI * 0.05).abs() < 1e-12);
    }

    #[test]
    fn constant_signal_has_no_energy() {
        let s = series(vec![3.7; 64], 0.1);
        let sp = power_spectrum(&s).unwrap();
        assert!(sp.psd[1..].iter().all(|&p| p < 1e-20));
        for dc in [DcPolicy::Include, DcPolicy::Exclude] {
            assert!(matches!(select_with_policy(&sp, 95.0, dc), Err(Error::NoSignal)));
        }
        let zero = power_spectrum(&series(vec![0.0; 64], 0.1)).unwrap();
        assert!(matches!(select_dominant_frequencies(&zero, 50.0), Err(Error::NoSignal)));
    }

    #[test]
    fn dc_only_selection_still_embeds_one_frequency() {
        let v: Vec<f64> = tone(0.05, 0.01, 2000, 0.1).iter().map(|x| x + 10.0).collect();
        let sp = power_spectrum(&series(v, 0.1)).unwrap();
        let sel = select_dominant_frequencies(&sp, 95.0).unwrap();
        assert_eq!(sel.m_star, 1);
        assert!(sel.dc_selected);
        assert_eq!(sel.bins, vec![10]);
    }

    #[test]
    fn offset_tone_counts_dc() {
        // mean 4, unit-amplitude tone: DC carries N^2 * 16, the tone bin N^2 / 4
        let v: Vec<f64> = tone(0.05, 1.0, 2000, 0.1).iter().map(|x| x + 4.0).collect();
        let sp = power_spectrum(&series(v, 0.1)).unwrap();
        let sel = select_dominant_frequencies(&sp, 99.0).unwrap();
        assert_eq!(sel.m_star, 2);
        assert!(sel.dc_selected);
        assert_eq!(sel.bins, vec![10]);
        let excl = select_with_policy(&sp, 99.0, DcPolicy::Exclude).unwrap();
        assert_eq!(excl.m_star, 1);
        assert!(!excl.dc_selected);
        assert_eq!(excl.angular_freqs, sel.angular_freqs);
    }

    #[test]
    fn two_tone_power_ratio() {
        let n = 4000;
        let a: Vec<f64> = tone(0.05, 2.0, n, 0.1)
            .into_iter()
            .zip(tone(0.15, 1.0, n, 0.1))
            .map(|(x, y)| x + y)
            .collect();
        let sp = power_spectrum(&series(a, 0.1)).unwrap();
        let bin = |f: f64| (f * n as f64 * 0.1).round() as usize;
        let ratio = sp.psd[bin(0.05)] / sp.psd[bin(0.15)];
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn parseval_identity() {
        for n in [101usize, 256] {
            let v: Vec<f64> = (0..n).map(|i| ((i * i) as f64 * 0.37).sin() + 0.1 * i as f64).collect();
            let s = series(v, 0.2);
            let sp = power_spectrum(&s).unwrap();
            let sum_sq: f64 = s.values.iter().map(|x| x * x).sum();
            let expected = n as f64 * sum_sq;
            assert!((sp.two_sided_energy() - expected).abs() < 1e-9 * expected);
            // without the DC bin the energy is that of the mean-removed signal
            let var = s.std().powi(2);
            let ac = sp.two_sided_energy() - sp.psd[0];
            let expected_ac = (n * n) as f64 * var;
            assert!((ac - expected_ac).abs() < 1e-9 * expected_ac);
        }
    }

    #[test]
    fn threshold_out_of_range() {
        let sp = power_spectrum(&series(tone(0.05, 1.0, 64, 0.1), 0.1)).unwrap();
        assert!(select_dominant_frequencies(&sp, 0.0).is_err());
        assert!(select_dominant_frequencies(&sp, 100.0).is_err());
    }

    #[test]
    fn reconstruction_with_all_bins_is_identity() {
        let v: Vec<f64> = (0..257).map(|i| (i as f64 * 0.3).cos() + (i as f64 * 0.01).powi(2)).collect();
        let s = series(v, 0.1);
        let sp = power_spectrum(&s).unwrap();
        let sel = FrequencySelection {
            p: 100.0,
            m_star: sp.psd.len(),
            dc_selected: true,
            angular_freqs: vec![],
            bins: (1..sp.psd.len()).collect(),
        };
        let r = filtered_reconstruction(&s, &sel).unwrap();
        for (a, b) in r.values.iter().zip(&s.values) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn pure_tone_reconstruction() {
        let clean = tone(0.05, 1.5, 2000, 0.1);
        let s = series(clean.iter().map(|v| v + 0.5).collect(), 0.1);
        let sp = power_spectrum(&s).unwrap();
        let sel = select_dominant_frequencies(&sp, 90.0).unwrap();
        assert!(sel.dc_selected);
        assert_eq!(sel.m_star, 2);
        let r = filtered_reconstruction(&s, &sel).unwrap();
        for (a, b) in r.values.iter().zip(&clean) {
            assert!((a - 0.5 - b).abs() < 1e-9);
        }
    }

    #[test]
    fn selection_is_monotone_in_threshold() {
        let v: Vec<f64> = (0..1000)
            .map(|i| {
                let t = i as f64 * 0.1;
                (0.3 * t).sin() + 0.5 * (1.1 * t).sin() + 0.2 * (2.3 * t).cos() + 0.05 * (t * t * 0.01).sin()
            })
            .collect();
        let sp = power_spectrum(&series(v, 0.1)).unwrap();
        for dc in [DcPolicy::Include, DcPolicy::Exclude] {
            let mut last = 0;
            for p in [10.0, 50.0, 80.0, 90.0, 95.0, 99.0, 99.9] {
                let m = select_with_policy(&sp, p, dc).unwrap().m_star;
                assert!(m >= last);
                last = m;
            }
        }
    }
}
