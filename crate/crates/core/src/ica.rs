//! FastICA decomposition (logcosh contrast, symmetric decorrelation) of a
//! continuous recording, artifact removal by zeroing mixing columns, and
//! variance-ordered component subsets.
//!
//! `U = W X` with `W` components x channels. The model is fit on centred data
//! but applied without re-centring, so `A W X = X` exactly for a full-rank
//! decomposition.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{from_na, sym_decorrelate, sym_eig_desc, to_na};
use crate::signal::{abstract_montage, EpochSet, Recording};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcaOptions {
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    /// Number of components; `None` means one per channel.
    pub n_components: Option<usize>,
    /// Fit on every `decim`-th sample.
    pub decim: usize,
}

impl Default for IcaOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            max_iter: 1000,
            tol: 1e-6,
            n_components: None,
            decim: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcaModel {
    /// Channels x components.
    pub mixing: Array2<f64>,
    /// Components x channels.
    pub unmixing: Array2<f64>,
    /// Components x channels whitening matrix of the fit data.
    pub whitener: Array2<f64>,
    pub mean: Array1<f64>,
    /// `component_order[k]` is the pre-sorting index of component `k`.
    pub component_order: Vec<usize>,
    pub artifact_flags: Vec<bool>,
    pub seed: u64,
    pub iterations: usize,
}

impl IcaModel {
    pub fn n_channels(&self) -> usize {
        self.mixing.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.mixing.ncols()
    }

    fn check_channels(&self, rec: &Recording) -> Result<()> {
        if rec.n_channels() != self.n_channels() {
            return Err(Error::Dimension {
                what: "recording channels vs ICA model",
                expected: self.n_channels(),
                actual: rec.n_channels(),
            });
        }
        Ok(())
    }
}

pub fn fit_ica(rec: &Recording, opts: &IcaOptions) -> Result<IcaModel> {
    let channels = rec.n_channels();
    let decim = opts.decim.max(1);
    let cols: Vec<usize> = (0..rec.n_samples()).step_by(decim).collect();
    let n = cols.len();
    let k = opts.n_components.unwrap_or(channels);
    if k == 0 || k > channels {
        return Err(Error::invalid(format!("n_components {k} outside 1..={channels}")));
    }
    if n < 2 * channels {
        return Err(Error::invalid(format!("{n} samples are too few for {channels} channels")));
    }
    if n < 20 * channels * channels {
        log::warn!(
            "ICA fit on {n} samples; at least {} recommended for {channels} channels",
            20 * channels * channels
        );
    }

    let sub = rec.data().select(Axis(1), &cols);
    let mean = sub.mean_axis(Axis(1)).expect("non-empty");
    let mut xc = to_na(&sub);
    for (i, m) in mean.iter().enumerate() {
        xc.row_mut(i).add_scalar_mut(-m);
    }
    let cov = &xc * xc.transpose() / n as f64;
    let (values, vectors) = sym_eig_desc(&cov);
    let top = values[0].max(0.0);
    let rank = values.iter().filter(|&&v| v > 1e-10 * top).count();
    if top <= 0.0 || rank < k {
        return Err(Error::RankDeficient { rank, requested: k });
    }
    let e_k = vectors.columns(0, k).into_owned();
    let d_sqrt = values.rows(0, k).map(f64::sqrt);
    let whitener = DMatrix::from_diagonal(&d_sqrt.map(|v| 1.0 / v)) * e_k.transpose();
    let dewhitener = &e_k * DMatrix::from_diagonal(&d_sqrt);
    let z = &whitener * &xc;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let init = DMatrix::from_fn(k, k, |_, _| StandardNormal.sample(&mut rng));
    let mut w = sym_decorrelate(&init);
    let mut last_change = f64::INFINITY;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let mut g = &w * &z;
        let mut mean_dg = vec![0.0; k];
        for i in 0..k {
            let mut acc = 0.0;
            for v in g.row_mut(i).iter_mut() {
                let t = v.tanh();
                *v = t;
                acc += 1.0 - t * t;
            }
            mean_dg[i] = acc / n as f64;
        }
        let mut w_new = &g * z.transpose() / n as f64;
        for i in 0..k {
            let wi = w.row(i).clone_owned();
            let mut row = w_new.row_mut(i);
            row -= wi * mean_dg[i];
        }
        let w_new = sym_decorrelate(&w_new);
        last_change = (0..k)
            .map(|i| {
                let a = w_new.row(i);
                let b = w.row(i);
                let plus = (a - b).amax();
                let minus = (a + b).amax();
                plus.min(minus)
            })
            .fold(0.0, f64::max);
        w = w_new;
        if last_change < opts.tol {
            break;
        }
    }
    if last_change >= opts.tol {
        return Err(Error::NoConvergence {
            iterations,
            last_change,
            tol: opts.tol,
        });
    }

    let unmixing = &w * &whitener;
    let mixing = &dewhitener * w.transpose();

    // order by variance of the mixing-scaled activations
    let u = &w * &z;
    let score: Vec<f64> = (0..k)
        .map(|i| {
            let row = u.row(i);
            let m = row.mean();
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            mixing.column(i).norm_squared() * var
        })
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));

    let mut a_sorted = Array2::zeros((channels, k));
    let mut w_sorted = Array2::zeros((k, channels));
    for (dst, &src) in order.iter().enumerate() {
        // sign: largest-magnitude mixing weight positive
        let col = mixing.column(src);
        let peak = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if peak < 0.0 { -1.0 } else { 1.0 };
        for c in 0..channels {
            a_sorted[[c, dst]] = sign * mixing[(c, src)];
            w_sorted[[dst, c]] = sign * unmixing[(src, c)];
        }
    }

    Ok(IcaModel {
        mixing: a_sorted,
        unmixing: w_sorted,
        whitener: from_na(&whitener),
        mean,
        component_order: order,
        artifact_flags: vec![false; k],
        seed: opts.seed,
        iterations,
    })
}

/// Component activations `U = W X` as a pseudo-recording named `IC0..`.
pub fn components(model: &IcaModel, rec: &Recording) -> Result<Recording> {
    model.check_channels(rec)?;
    let u = model.unmixing.dot(rec.data());
    rec.derived(u, abstract_montage("IC", model.n_components()))
}

/// `V = Â U` where `Â` is the mixing matrix with flagged columns zeroed.
pub fn remove_artifacts(model: &IcaModel, rec: &Recording, flags: &[bool]) -> Result<Recording> {
    model.check_channels(rec)?;
    if flags.len() != model.n_components() {
        return Err(Error::Dimension {
            what: "artifact flags",
            expected: model.n_components(),
            actual: flags.len(),
        });
    }
    if flags.iter().all(|&f| f) {
        return Err(Error::NothingRetained(flags.len()));
    }
    let mut a_hat = model.mixing.clone();
    for (k, &f) in flags.iter().enumerate() {
        if f {
            a_hat.column_mut(k).fill(0.0);
        }
    }
    let u = model.unmixing.dot(rec.data());
    rec.with_data(a_hat.dot(&u))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArtifactThresholds {
    /// Fraction of component power below 3 Hz.
    pub blink_low_freq: f64,
    /// Fraction of the squared mixing column on frontal electrodes.
    pub blink_frontal: f64,
    /// Fraction of component power above 32 Hz.
    pub muscle_high_freq: f64,
    /// Upper edge of the spectrum the fractions are taken over.
    pub max_freq: f64,
}

impl Default for ArtifactThresholds {
    fn default() -> Self {
        Self {
            blink_low_freq: 0.5,
            blink_frontal: 0.5,
            muscle_high_freq: 0.4,
            max_freq: 45.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentStats {
    pub low_freq_fraction: f64,
    pub high_freq_fraction: f64,
    pub frontal_fraction: f64,
}

/// Spectral and topographic summary of every component.
pub fn component_stats(model: &IcaModel, rec: &Recording, max_freq: f64) -> Result<Vec<ComponentStats>> {
    let u = components(model, rec)?;
    let frontal = rec.montage().frontal_channels();
    let fs = rec.fs();
    Ok(u.data()
        .outer_iter()
        .enumerate()
        .map(|(k, row)| {
            let (freqs, psd) = welch(&row.to_vec(), fs);
            let total: f64 = freqs
                .iter()
                .zip(&psd)
                .filter(|(f, _)| **f <= max_freq)
                .map(|(_, p)| p)
                .sum::<f64>()
                .max(f64::MIN_POSITIVE);
            let low: f64 = freqs.iter().zip(&psd).filter(|(f, _)| **f < 3.0).map(|(_, p)| p).sum();
            let high: f64 = freqs.iter().zip(&psd).filter(|(f, _)| **f > 32.0 && **f <= max_freq).map(|(_, p)| p).sum();
            let col = model.mixing.column(k);
            let energy: f64 = col.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
            let front: f64 = frontal.iter().map(|&c| col[c] * col[c]).sum();
            ComponentStats {
                low_freq_fraction: low / total,
                high_freq_fraction: high / total,
                frontal_fraction: front / energy,
            }
        })
        .collect())
}

/// Flags eye-blink-like components (low-frequency, frontal) and muscle-like
/// components (high-frequency). An explicit exclusion list replaces the
/// heuristic entirely.
pub fn flag_artifacts_heuristic(
    model: &IcaModel,
    rec: &Recording,
    thresholds: &ArtifactThresholds,
    exclude: Option<&[usize]>,
) -> Result<Vec<bool>> {
    let k = model.n_components();
    if let Some(list) = exclude {
        let mut flags = vec![false; k];
        for &i in list {
            if i >= k {
                return Err(Error::invalid(format!("excluded component {i} >= {k}")));
            }
            flags[i] = true;
        }
        return Ok(flags);
    }
    Ok(component_stats(model, rec, thresholds.max_freq)?
        .into_iter()
        .map(|s| {
            let blink = s.low_freq_fraction >= thresholds.blink_low_freq
                && s.frontal_fraction >= thresholds.blink_frontal;
            let muscle = s.high_freq_fraction >= thresholds.muscle_high_freq;
            blink || muscle
        })
        .collect())
}

/// First `k` variance-ordered components.
pub fn component_subset(epochs: &EpochSet, k: usize) -> Result<EpochSet> {
    if k == 0 || k > epochs.n_channels() {
        return Err(Error::invalid(format!(
            "component count {k} outside 1..={}",
            epochs.n_channels()
        )));
    }
    epochs.first_channels(k)
}

/// Welch power spectrum with Hann segments of ~4 s, half overlap.
fn welch(x: &[f64], fs: f64) -> (Vec<f64>, Vec<f64>) {
    let target = ((4.0 * fs) as usize).next_power_of_two();
    let seg = target.min(x.len().next_power_of_two() / 2).max(8).min(x.len());
    let step = (seg / 2).max(1);
    let window: Vec<f64> = (0..seg)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / seg as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(seg);
    let bins = seg / 2 + 1;
    let mut psd = vec![0.0; bins];
    let mut buf = vec![Complex::new(0.0, 0.0); seg];
    let mut start = 0;
    while start + seg <= x.len() {
        let chunk = &x[start..start + seg];
        let m = chunk.iter().sum::<f64>() / seg as f64;
        for (b, (&v, &w)) in buf.iter_mut().zip(chunk.iter().zip(&window)) {
            *b = Complex::new((v - m) * w, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in psd.iter_mut().zip(&buf) {
            *p += c.norm_sqr();
        }
        start += step;
    }
    let freqs = (0..bins).map(|i| i as f64 * fs / seg as f64).collect();
    (freqs, psd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::Montage;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn laplace(rng: &mut ChaCha8Rng) -> f64 {
        let u: f64 = rng.gen_range(-0.5..0.5);
        -u.signum() * (1.0 - 2.0 * u.abs()).ln()
    }

    fn rec_from(data: Array2<f64>) -> Recording {
        let m = Montage::for_channels(data.nrows()).unwrap();
        Recording::new(data, 500.0, m, vec![]).unwrap()
    }

    fn laplace_sources(k: usize, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((k, n), |_| laplace(&mut rng) / 2f64.sqrt())
    }

    #[test]
    fn identity_mixing_recovers_signed_permutation() {
        let s = laplace_sources(4, 20_000, 1);
        let model = fit_ica(&rec_from(s.clone()), &IcaOptions::default()).unwrap();
        let p = model.unmixing.clone();
        for row in p.rows() {
            let mut mags: Vec<f64> = row.iter().map(|v| v.abs()).collect();
            mags.sort_by(|a, b| b.total_cmp(a));
            assert!(mags[1] < 0.05, "off-pattern {mags:?}");
        }
    }

    #[test]
    fn reconstruction_and_ordering() {
        let s = laplace_sources(5, 20_000, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Array2::from_shape_fn((5, 5), |_| rng.gen_range(-1.0..1.0));
        let x = a.dot(&s);
        let rec = rec_from(x.clone());
        let model = fit_ica(&rec, &IcaOptions { seed: 4, ..Default::default() }).unwrap();
        let u = components(&model, &rec).unwrap();
        let back = model.mixing.dot(u.data());
        let err = (&back - &x).mapv(|v| v * v).sum().sqrt() / x.mapv(|v| v * v).sum().sqrt();
        assert!(err < 1e-6, "relative reconstruction error {err}");
        let scaled: Vec<f64> = (0..5)
            .map(|k| {
                let row = u.data().row(k);
                let m = row.mean().unwrap();
                let var = row.mapv(|v| (v - m).powi(2)).mean().unwrap();
                var * model.mixing.column(k).mapv(|v| v * v).sum()
            })
            .collect();
        for w in scaled.windows(2) {
            assert!(w[0] >= w[1] - 1e-9, "{scaled:?}");
        }
    }

    #[test]
    fn remove_artifacts_no_flags_is_identity_and_additive() {
        let s = laplace_sources(4, 10_000, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0));
        let rec = rec_from(a.dot(&s));
        let model = fit_ica(&rec, &IcaOptions::default()).unwrap();
        let v = remove_artifacts(&model, &rec, &[false; 4]).unwrap();
        for (p, q) in v.data().iter().zip(rec.data()) {
            assert_abs_diff_eq!(p, q, epsilon = 1e-6 * 10.0);
        }
        let flags = [false, false, true, false];
        let v2 = remove_artifacts(&model, &rec, &flags).unwrap();
        let u = components(&model, &rec).unwrap();
        let col = model.mixing.column(2).to_owned().insert_axis(Axis(1));
        let row = u.data().row(2).to_owned().insert_axis(Axis(0));
        let restored = v2.data() + &col.dot(&row);
        for (p, q) in restored.iter().zip(rec.data()) {
            assert_abs_diff_eq!(p, q, epsilon = 1e-6);
        }
        assert!(matches!(
            remove_artifacts(&model, &rec, &[true; 4]),
            Err(Error::NothingRetained(4))
        ));
        assert!(remove_artifacts(&model, &rec, &[false; 3]).is_err());
    }

    #[test]
    fn rank_deficient_rejected() {
        let s = laplace_sources(3, 5_000, 4);
        let mut x = Array2::zeros((4, 5_000));
        x.slice_mut(ndarray::s![..3, ..]).assign(&s);
        let last = &s.row(0) + &s.row(1);
        x.row_mut(3).assign(&last);
        let err = fit_ica(&rec_from(x.clone()), &IcaOptions::default()).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { rank: 3, requested: 4 }));
        let reduced = fit_ica(
            &rec_from(x),
            &IcaOptions { n_components: Some(3), ..Default::default() },
        )
        .unwrap();
        assert_eq!(reduced.mixing.dim(), (4, 3));
    }

    #[test]
    fn non_convergence_reports_iterations() {
        let s = laplace_sources(6, 5_000, 6);
        let err = fit_ica(&rec_from(s), &IcaOptions { max_iter: 1, tol: 1e-14, ..Default::default() })
            .unwrap_err();
        assert!(matches!(err, Error::NoConvergence { iterations: 1, .. }));
    }

    #[test]
    fn exclusion_list_overrides() {
        let s = laplace_sources(6, 5_000, 7);
        let rec = rec_from(s);
        let model = fit_ica(&rec, &IcaOptions::default()).unwrap();
        let flags = flag_artifacts_heuristic(&model, &rec, &ArtifactThresholds::default(), Some(&[2, 5])).unwrap();
        let on: Vec<usize> = flags.iter().enumerate().filter(|(_, f)| **f).map(|(i, _)| i).collect();
        assert_eq!(on, vec![2, 5]);
    }

    #[test]
    fn ten_hz_component_not_flagged() {
        // two channels: a 10 Hz rhythm and a Laplace source
        let n = 30_000;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = Array2::from_shape_fn((2, n), |(c, t)| {
            if c == 0 {
                (2.0 * std::f64::consts::PI * 10.0 * t as f64 / 500.0).sin()
            } else {
                laplace(&mut rng)
            }
        });
        let rec = rec_from(data);
        let model = fit_ica(&rec, &IcaOptions::default()).unwrap();
        let flags = flag_artifacts_heuristic(&model, &rec, &ArtifactThresholds::default(), None).unwrap();
        let u = components(&model, &rec).unwrap();
        let sine = rec.data().row(0);
        let corr = |k: usize| u.data().row(k).dot(&sine).abs();
        let k_sine = if corr(0) > corr(1) { 0 } else { 1 };
        assert!(!flags[k_sine]);
    }

    #[test]
    fn muscle_burst_flagged_white_noise_not() {
        let (n, fs) = (60_000, 500.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tones: Vec<(f64, f64)> = (0..12).map(|_| (rng.gen_range(20.0..45.0), rng.gen_range(0.0..6.28))).collect();
        let data = Array2::from_shape_fn((2, n), |(c, t)| {
            if c == 0 {
                let tt = t as f64 / fs;
                tones.iter().map(|(f, p)| (2.0 * std::f64::consts::PI * f * tt + p).sin()).sum::<f64>()
            } else {
                0.0
            }
        });
        let mut data = data;
        data.row_mut(1).mapv_inplace(|_| StandardNormal.sample(&mut rng));
        let rec = rec_from(data);
        let model = fit_ica(&rec, &IcaOptions::default()).unwrap();
        let flags = flag_artifacts_heuristic(&model, &rec, &ArtifactThresholds::default(), None).unwrap();
        let u = components(&model, &rec).unwrap();
        let tone = rec.data().row(0);
        let corr = |k: usize| u.data().row(k).dot(&tone).abs();
        let k_muscle = if corr(0) > corr(1) { 0 } else { 1 };
        assert!(flags[k_muscle]);
        assert!(!flags[1 - k_muscle]);
    }
}
