//! Zero-phase FIR filtering: Hamming-windowed sinc design and symmetric
//! application with the group delay removed.
//!
//! Design rule: order is the smallest even integer `>= 3.3 * fs / tbw`, and
//! the -6 dB point sits half a transition band outside each passband edge.
//! Every lowpass prototype is scaled to unit DC gain, so bandpass and
//! highpass responses are exactly zero at DC.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{EpochSet, Recording};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandName {
    Delta,
    Theta,
    Alpha,
    Beta,
    Gamma,
    DeltaTheta,
    Broadband,
}

impl BandName {
    pub const ALL: [BandName; 7] = [
        BandName::Delta,
        BandName::Theta,
        BandName::Alpha,
        BandName::Beta,
        BandName::Gamma,
        BandName::Broadband,
        BandName::DeltaTheta,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BandName::Delta => "delta",
            BandName::Theta => "theta",
            BandName::Alpha => "alpha",
            BandName::Beta => "beta",
            BandName::Gamma => "gamma",
            BandName::DeltaTheta => "delta_theta",
            BandName::Broadband => "combined",
        }
    }

    /// Column heading used in the accuracy tables.
    pub fn title(self) -> &'static str {
        match self {
            BandName::Delta => "Delta",
            BandName::Theta => "Theta",
            BandName::Alpha => "Alpha",
            BandName::Beta => "Beta",
            BandName::Gamma => "Gamma",
            BandName::DeltaTheta => "Delta+Theta",
            BandName::Broadband => "Combined",
        }
    }

    pub fn spec(self) -> BandSpec {
        band_registry()
            .into_iter()
            .find(|b| b.name == self)
            .expect("every band name is registered")
    }
}

impl fmt::Display for BandName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for BandName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "delta" => BandName::Delta,
            "theta" => BandName::Theta,
            "alpha" => BandName::Alpha,
            "beta" => BandName::Beta,
            "gamma" => BandName::Gamma,
            "delta_theta" | "delta+theta" => BandName::DeltaTheta,
            "combined" | "broadband" | "complete" => BandName::Broadband,
            other => return Err(Error::invalid(format!("unknown band {other}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BandKind {
    Lowpass { edge: f64 },
    Highpass { edge: f64 },
    Bandpass { low: f64, high: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub name: BandName,
    pub kind: BandKind,
    pub transition_bw: f64,
}

impl BandSpec {
    pub fn validate(&self, fs: f64) -> Result<()> {
        let nyquist = fs / 2.0;
        let half = self.transition_bw / 2.0;
        if !(self.transition_bw > 0.0) {
            return Err(Error::invalid("transition bandwidth must be positive"));
        }
        let top = match self.kind {
            BandKind::Lowpass { edge } | BandKind::Highpass { edge } => {
                if !(edge > 0.0) {
                    return Err(Error::invalid("band edge must be positive"));
                }
                edge + half
            }
            BandKind::Bandpass { low, high } => {
                if !(low > 0.0 && high > low) {
                    return Err(Error::invalid("bandpass edges must be positive and increasing"));
                }
                high + half
            }
        };
        if top >= nyquist {
            return Err(Error::AboveNyquist {
                band: self.name.to_string(),
                limit: top,
                nyquist,
            });
        }
        Ok(())
    }

    /// Passband interval in Hz.
    pub fn passband(&self, fs: f64) -> (f64, f64) {
        match self.kind {
            BandKind::Lowpass { edge } => (0.0, edge),
            BandKind::Highpass { edge } => (edge, fs / 2.0),
            BandKind::Bandpass { low, high } => (low, high),
        }
    }

    /// Stopband intervals in Hz (possibly degenerate at DC).
    pub fn stopbands(&self, fs: f64) -> Vec<(f64, f64)> {
        let tbw = self.transition_bw;
        match self.kind {
            BandKind::Lowpass { edge } => vec![(edge + tbw, fs / 2.0)],
            BandKind::Highpass { edge } => vec![(0.0, (edge - tbw).max(0.0))],
            BandKind::Bandpass { low, high } => {
                vec![(0.0, (low - tbw).max(0.0)), (high + tbw, fs / 2.0)]
            }
        }
    }
}

/// The seven analysis bands.
pub fn band_registry() -> Vec<BandSpec> {
    use BandKind::*;
    vec![
        BandSpec { name: BandName::Delta, kind: Lowpass { edge: 4.0 }, transition_bw: 2.0 },
        BandSpec { name: BandName::Theta, kind: Bandpass { low: 4.0, high: 8.0 }, transition_bw: 2.0 },
        BandSpec { name: BandName::Alpha, kind: Bandpass { low: 8.0, high: 12.0 }, transition_bw: 2.0 },
        BandSpec { name: BandName::Beta, kind: Bandpass { low: 12.0, high: 32.0 }, transition_bw: 3.0 },
        BandSpec { name: BandName::Gamma, kind: Highpass { edge: 32.0 }, transition_bw: 8.0 },
        BandSpec { name: BandName::DeltaTheta, kind: Lowpass { edge: 8.0 }, transition_bw: 2.0 },
        BandSpec { name: BandName::Broadband, kind: Bandpass { low: 0.5, high: 45.0 }, transition_bw: 0.5 },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct FirFilter {
    taps: Arc<[f64]>,
    band: BandSpec,
    fs: f64,
}

impl FirFilter {
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn order(&self) -> usize {
        self.taps.len() - 1
    }

    pub fn band(&self) -> &BandSpec {
        &self.band
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn window_kind(&self) -> &'static str {
        "hamming"
    }

    /// Real zero-phase amplitude at `freq` Hz.
    pub fn amplitude(&self, freq: f64) -> f64 {
        let m = self.order() as f64 / 2.0;
        let w = 2.0 * PI * freq / self.fs;
        self.taps
            .iter()
            .enumerate()
            .map(|(k, &h)| h * (w * (k as f64 - m)).cos())
            .sum()
    }

    /// Filter one signal with the group delay removed.
    pub fn apply(&self, x: &[f64], edge: EdgeMode) -> Result<Vec<f64>> {
        let order = self.order();
        if x.len() <= order {
            return Err(Error::SignalTooShort { len: x.len(), order });
        }
        let padded = pad(x, order, edge);
        let full = if (x.len() as u64) * (order as u64 + 1) > 4_000_000 {
            fft_convolve(&padded, &self.taps)
        } else {
            direct_convolve(&padded, &self.taps)
        };
        // padded[order + n] holds x[n]; full[j] = sum_k h[k] padded[j - k];
        // centring on the tap midpoint gives index order + n + order/2.
        let shift = order + order / 2;
        Ok(full[shift..shift + x.len()].to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    #[default]
    Reflect,
    Zero,
}

pub fn filter_order(transition_bw: f64, fs: f64) -> usize {
    let raw = 3.3 * fs / transition_bw;
    let mut n = (raw - 1e-9).ceil() as usize;
    if n % 2 == 1 {
        n += 1;
    }
    n.max(2)
}

/// Hamming-windowed sinc filter for `band` at sampling rate `fs`.
pub fn design_fir(band: &BandSpec, fs: f64) -> Result<FirFilter> {
    band.validate(fs)?;
    let order = filter_order(band.transition_bw, fs);
    let half = band.transition_bw / 2.0;
    let taps: Vec<f64> = match band.kind {
        BandKind::Lowpass { edge } => lowpass_prototype(edge + half, fs, order, true),
        BandKind::Highpass { edge } => {
            let lp = lowpass_prototype(edge - half, fs, order, true);
            spectral_inverse(&lp)
        }
        BandKind::Bandpass { low, high } => {
            let hi = lowpass_prototype(high + half, fs, order, false);
            let lo = lowpass_prototype(low - half, fs, order, false);
            let mut h: Vec<f64> = hi.iter().zip(&lo).map(|(a, b)| a - b).collect();
            // cancel DC leakage with a window-shaped term
            let w = hamming(order);
            let (dc, wsum) = (h.iter().sum::<f64>(), w.iter().sum::<f64>());
            h.iter_mut().zip(&w).for_each(|(v, wk)| *v -= dc * wk / wsum);
            h
        }
    };
    Ok(FirFilter {
        taps: taps.into(),
        band: *band,
        fs,
    })
}

fn hamming(order: usize) -> Vec<f64> {
    (0..=order)
        .map(|k| 0.54 - 0.46 * (2.0 * PI * k as f64 / order as f64).cos())
        .collect()
}

fn lowpass_prototype(cutoff: f64, fs: f64, order: usize, unit_dc: bool) -> Vec<f64> {
    let fc = cutoff / fs;
    let m = order as f64 / 2.0;
    let mut h: Vec<f64> = hamming(order)
        .into_iter()
        .enumerate()
        .map(|(k, w)| {
            let t = k as f64 - m;
            let sinc = if t == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * t).sin() / (PI * t)
            };
            sinc * w
        })
        .collect();
    if unit_dc {
        let dc: f64 = h.iter().sum();
        h.iter_mut().for_each(|v| *v /= dc);
    }
    // exact symmetry regardless of rounding in the sin evaluations
    for k in 0..order / 2 {
        let avg = 0.5 * (h[k] + h[order - k]);
        h[k] = avg;
        h[order - k] = avg;
    }
    h
}

fn spectral_inverse(lp: &[f64]) -> Vec<f64> {
    let mid = (lp.len() - 1) / 2;
    lp.iter()
        .enumerate()
        .map(|(k, &v)| if k == mid { 1.0 - v } else { -v })
        .collect()
}

fn pad(x: &[f64], n: usize, edge: EdgeMode) -> Vec<f64> {
    let len = x.len();
    let mut out = Vec::with_capacity(len + 2 * n);
    match edge {
        EdgeMode::Zero => {
            out.resize(n, 0.0);
            out.extend_from_slice(x);
            out.resize(len + 2 * n, 0.0);
        }
        EdgeMode::Reflect => {
            out.extend((1..=n).rev().map(|i| x[i]));
            out.extend_from_slice(x);
            out.extend((1..=n).map(|i| x[len - 1 - i]));
        }
    }
    out
}

/// Full linear convolution.
fn direct_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len() + h.len() - 1];
    for (k, &hk) in h.iter().enumerate() {
        let dst = &mut out[k..k + x.len()];
        for (d, &v) in dst.iter_mut().zip(x) {
            *d += hk * v;
        }
    }
    out
}

fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n_out = x.len() + h.len() - 1;
    let n = n_out.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    a.resize(n, Complex::new(0.0, 0.0));
    let mut b: Vec<Complex<f64>> = h.iter().map(|&v| Complex::new(v, 0.0)).collect();
    b.resize(n, Complex::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (u, v) in a.iter_mut().zip(&b) {
        *u *= v;
    }
    inv.process(&mut a);
    let scale = 1.0 / n as f64;
    a.truncate(n_out);
    a.into_iter().map(|c| c.re * scale).collect()
}

/// Anything that can be band filtered along its time axis.
pub trait Filterable: Sized {
    fn filtered(&self, filter: &FirFilter, edge: EdgeMode) -> Result<Self>;
}

fn filter_rows(data: &Array2<f64>, filter: &FirFilter, edge: EdgeMode) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = data
        .axis_iter(Axis(0))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|row| filter.apply(&row.to_vec(), edge))
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros(data.dim());
    for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(rows) {
        dst.assign(&ndarray::ArrayView1::from(&src));
    }
    Ok(out)
}

impl Filterable for Recording {
    fn filtered(&self, filter: &FirFilter, edge: EdgeMode) -> Result<Self> {
        check_rate(filter, self.fs())?;
        self.with_data(filter_rows(self.data(), filter, edge)?)
    }
}

impl Filterable for EpochSet {
    fn filtered(&self, filter: &FirFilter, edge: EdgeMode) -> Result<Self> {
        check_rate(filter, self.fs())?;
        let mut out = Array3::zeros(self.data().dim());
        for (mut dst, src) in out.outer_iter_mut().zip(self.data().outer_iter()) {
            dst.assign(&filter_rows(&src.to_owned(), filter, edge)?);
        }
        self.map_channels(out, self.channel_names().to_vec())
    }
}

fn check_rate(filter: &FirFilter, fs: f64) -> Result<()> {
    if (filter.fs - fs).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "filter designed for {} Hz applied to {} Hz data",
            filter.fs, fs
        )));
    }
    Ok(())
}

/// Zero-phase filtering of a recording or epoch set with reflection edges.
pub fn filtfilt_zero_phase<T: Filterable>(signal: &T, filter: &FirFilter) -> Result<T> {
    signal.filtered(filter, EdgeMode::Reflect)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * freq * i as f64 / fs).sin()).collect()
    }

    #[test]
    fn registry_contents() {
        let reg = band_registry();
        assert_eq!(reg.len(), 7);
        let theta = BandName::Theta.spec();
        assert_eq!(theta.kind, BandKind::Bandpass { low: 4.0, high: 8.0 });
        assert_eq!(theta.transition_bw, 2.0);
        let gamma = BandName::Gamma.spec();
        assert_eq!(gamma.kind, BandKind::Highpass { edge: 32.0 });
        assert_eq!(gamma.transition_bw, 8.0);
        assert_eq!(
            BandName::DeltaTheta.spec().kind,
            BandKind::Lowpass { edge: 8.0 }
        );
    }

    #[test]
    fn delta_order_and_cutoff() {
        let f = design_fir(&BandName::Delta.spec(), 500.0).unwrap();
        assert_eq!(f.order(), 826);
        // -6 dB is an amplitude of one half
        let a = f.amplitude(5.0);
        assert!((a - 0.5).abs() < 0.01, "amplitude at 5 Hz = {a}");
        assert_abs_diff_eq!(f.taps().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn broadband_order() {
        let f = design_fir(&BandName::Broadband.spec(), 500.0).unwrap();
        assert_eq!(f.order(), 3300);
    }

    #[test]
    fn edge_above_nyquist_rejected() {
        let band = BandSpec {
            name: BandName::Delta,
            kind: BandKind::Lowpass { edge: 250.0 },
            transition_bw: 2.0,
        };
        assert!(matches!(design_fir(&band, 500.0), Err(Error::AboveNyquist { .. })));
    }

    #[test]
    fn taps_symmetric() {
        for band in band_registry() {
            let f = design_fir(&band, 500.0).unwrap();
            let n = f.order();
            for k in 0..=n {
                assert_abs_diff_eq!(f.taps()[k], f.taps()[n - k], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn impulse_response_is_centred() {
        let f = design_fir(&BandName::Theta.spec(), 500.0).unwrap();
        let mut x = vec![0.0; 3001];
        x[1500] = 1.0;
        let y = f.apply(&x, EdgeMode::Zero).unwrap();
        for d in 1..800 {
            assert_abs_diff_eq!(y[1500 - d], y[1500 + d], epsilon = 1e-14);
        }
    }

    #[test]
    fn fft_and_direct_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..5000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..101).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = direct_convolve(&x, &h);
        let b = fft_convolve(&x, &h);
        for (u, v) in a.iter().zip(&b) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-10);
        }
    }

    #[test]
    fn passband_sine_preserved_stopband_sine_removed() {
        let fs = 500.0;
        let f = design_fir(&BandName::Delta.spec(), fs).unwrap();
        let n = 10_000;
        let x = sine(2.0, fs, n);
        let y = f.apply(&x, EdgeMode::Reflect).unwrap();
        // least-squares fit of a sin + b cos on the interior
        let (mut ss, mut sc, mut cc, mut ys, mut yc) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 1000..n - 1000 {
            let w = 2.0 * PI * 2.0 * i as f64 / fs;
            let (s, c) = w.sin_cos();
            ss += s * s;
            sc += s * c;
            cc += c * c;
            ys += y[i] * s;
            yc += y[i] * c;
        }
        let det = ss * cc - sc * sc;
        let a = (ys * cc - yc * sc) / det;
        let b = (yc * ss - ys * sc) / det;
        let amp = (a * a + b * b).sqrt();
        let phase = b.atan2(a);
        assert!((0.99..=1.01).contains(&amp), "amp {amp}");
        assert!(phase.abs() < 0.01, "phase {phase}");

        let z = f.apply(&sine(20.0, fs, n), EdgeMode::Reflect).unwrap();
        let rms = |v: &[f64]| (v.iter().map(|t| t * t).sum::<f64>() / v.len() as f64).sqrt();
        let att = 20.0 * (rms(&z[1000..n - 1000]) / (0.5f64).sqrt()).log10();
        assert!(att <= -50.0, "attenuation {att} dB");
    }

    #[test]
    fn short_signal_rejected() {
        let f = design_fir(&BandName::Delta.spec(), 500.0).unwrap();
        assert!(matches!(
            f.apply(&vec![0.0; 826], EdgeMode::Reflect),
            Err(Error::SignalTooShort { .. })
        ));
    }

    #[test]
    fn band_names_parse() {
        assert_eq!("combined".parse::<BandName>().unwrap(), BandName::Broadband);
        assert_eq!("delta_theta".parse::<BandName>().unwrap(), BandName::DeltaTheta);
        assert!("kappa".parse::<BandName>().is_err());
    }
}
