//! Signal containers shared by every stage: electrode montage, continuous
//! recordings with event markers, labelled epoch tensors, and the
//! re-referencing / epoching / normalization steps that operate on them.
//!
//! Angles follow the convention used by the harmonic bases: `theta` is the
//! elevation measured from the vertex (Cz at 0), `phi` the azimuth in
//! `[0, 2π)`. The azimuth zero direction is whatever the montage data says;
//! the built-in montage puts it at the nose with positive angles towards the
//! left ear.

use std::collections::HashSet;
use std::f64::consts::PI;

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default head radius in metres. Only angles enter the harmonic bases, so
/// the radius is carried for completeness and never changes a feature.
pub const DEFAULT_HEAD_RADIUS: f64 = 0.09;

pub const N_CLASSES: usize = 26;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub theta: f64,
    pub phi: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Montage {
    names: Vec<String>,
    positions: Vec<Position>,
}

impl Montage {
    pub fn new(names: Vec<String>, positions: Vec<Position>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::invalid("montage needs at least one channel"));
        }
        if names.len() != positions.len() {
            return Err(Error::Dimension {
                what: "montage positions",
                expected: names.len(),
                actual: positions.len(),
            });
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::invalid(format!("duplicate channel name {n}")));
            }
        }
        for (n, p) in names.iter().zip(&positions) {
            if !(0.0..=PI).contains(&p.theta) {
                return Err(Error::invalid(format!("{n}: theta {} outside [0, pi]", p.theta)));
            }
            if !(0.0..2.0 * PI).contains(&p.phi) {
                return Err(Error::invalid(format!("{n}: phi {} outside [0, 2pi)", p.phi)));
            }
            if !(p.radius > 0.0) {
                return Err(Error::invalid(format!("{n}: radius must be positive")));
            }
        }
        Ok(Self { names, positions })
    }

    /// Build from angle arrays in radians at the default head radius.
    pub fn from_angles(names: Vec<String>, theta: &[f64], phi: &[f64]) -> Result<Self> {
        if theta.len() != phi.len() {
            return Err(Error::Dimension {
                what: "montage phi",
                expected: theta.len(),
                actual: phi.len(),
            });
        }
        let positions = theta
            .iter()
            .zip(phi)
            .map(|(&theta, &phi)| Position {
                theta,
                phi: phi.rem_euclid(2.0 * PI),
                radius: DEFAULT_HEAD_RADIUS,
            })
            .collect();
        Self::new(names, positions)
    }

    /// 31-electrode 10-20 layout (spherical head model, degrees converted to radians).
    pub fn standard_31() -> Self {
        const LAYOUT: [(&str, f64, f64); 31] = [
            ("Fp1", 90.0, 18.0),
            ("Fp2", 90.0, 342.0),
            ("F7", 90.0, 54.0),
            ("F3", 60.0, 39.0),
            ("Fz", 45.0, 0.0),
            ("F4", 60.0, 321.0),
            ("F8", 90.0, 306.0),
            ("FT9", 110.0, 72.0),
            ("FC5", 72.0, 69.0),
            ("FC1", 32.0, 45.0),
            ("FC2", 32.0, 315.0),
            ("FC6", 72.0, 291.0),
            ("FT10", 110.0, 288.0),
            ("T7", 90.0, 90.0),
            ("C3", 45.0, 90.0),
            ("Cz", 0.0, 0.0),
            ("C4", 45.0, 270.0),
            ("T8", 90.0, 270.0),
            ("TP9", 110.0, 108.0),
            ("CP5", 72.0, 111.0),
            ("CP1", 32.0, 135.0),
            ("CP2", 32.0, 225.0),
            ("CP6", 72.0, 249.0),
            ("TP10", 110.0, 252.0),
            ("P7", 90.0, 126.0),
            ("P3", 60.0, 141.0),
            ("Pz", 45.0, 180.0),
            ("P4", 60.0, 219.0),
            ("P8", 90.0, 234.0),
            ("O1", 90.0, 162.0),
            ("O2", 90.0, 198.0),
        ];
        let names = LAYOUT.iter().map(|(n, _, _)| n.to_string()).collect();
        let theta: Vec<f64> = LAYOUT.iter().map(|(_, t, _)| t.to_radians()).collect();
        let phi: Vec<f64> = LAYOUT.iter().map(|(_, _, p)| p.to_radians()).collect();
        Self::from_angles(names, &theta, &phi).expect("built-in montage is valid")
    }

    /// `n` electrodes spread over the upper cap (theta <= 110 degrees) on a
    /// Fibonacci spiral, named `E1..En`. Used when no 10-20 layout exists for `n`.
    pub fn spiral(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("montage needs at least one channel"));
        }
        let max_theta = 110f64.to_radians();
        let golden = PI * (3.0 - 5f64.sqrt());
        let mut theta = Vec::with_capacity(n);
        let mut phi = Vec::with_capacity(n);
        for i in 0..n {
            let z = 1.0 - (1.0 - max_theta.cos()) * (i as f64 + 0.5) / n as f64;
            theta.push(z.clamp(-1.0, 1.0).acos());
            phi.push((golden * i as f64).rem_euclid(2.0 * PI));
        }
        let names = (1..=n).map(|i| format!("E{i}")).collect();
        Self::from_angles(names, &theta, &phi)
    }

    /// The 10-20 layout for 31 channels, a spiral cap otherwise.
    pub fn for_channels(n: usize) -> Result<Self> {
        if n == 31 {
            Ok(Self::standard_31())
        } else {
            Self::spiral(n)
        }
    }

    /// Named channels with no electrode geometry (all placed at the vertex).
    pub fn abstract_named(names: Vec<String>) -> Result<Self> {
        let positions = vec![
            Position {
                theta: 0.0,
                phi: 0.0,
                radius: DEFAULT_HEAD_RADIUS,
            };
            names.len()
        ];
        Self::new(names, positions)
    }

    /// True when every channel sits at the vertex, i.e. the channels are not electrodes.
    pub fn is_abstract(&self) -> bool {
        self.positions.iter().all(|p| p.theta == 0.0 && p.phi == 0.0)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    pub fn thetas(&self) -> Vec<f64> {
        self.positions.iter().map(|p| p.theta).collect()
    }

    pub fn phis(&self) -> Vec<f64> {
        self.positions.iter().map(|p| p.phi).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n.eq_ignore_ascii_case(name))
    }

    /// Unit vectors (x towards the azimuth zero, z through the vertex).
    pub fn unit_vectors(&self) -> Vec<[f64; 3]> {
        self.positions
            .iter()
            .map(|p| {
                [
                    p.theta.sin() * p.phi.cos(),
                    p.theta.sin() * p.phi.sin(),
                    p.theta.cos(),
                ]
            })
            .collect()
    }

    /// Channels whose 10-20 name marks them as frontal (Fp, AF, F but not FC/FT).
    pub fn frontal_channels(&self) -> Vec<usize> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| is_frontal_name(n))
            .map(|(i, _)| i)
            .collect()
    }
}

fn is_frontal_name(name: &str) -> bool {
    let up = name.to_ascii_uppercase();
    if up.starts_with("FP") || up.starts_with("AF") {
        return true;
    }
    up.starts_with('F') && !up.starts_with("FC") && !up.starts_with("FT")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub sample: usize,
    pub label: usize,
}

/// Continuous multichannel signal, channels x samples, in microvolts.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    data: Array2<f64>,
    fs: f64,
    montage: Montage,
    annotations: Vec<Annotation>,
}

impl Recording {
    pub fn new(
        data: Array2<f64>,
        fs: f64,
        montage: Montage,
        annotations: Vec<Annotation>,
    ) -> Result<Self> {
        if data.nrows() != montage.len() {
            return Err(Error::Dimension {
                what: "recording rows vs montage channels",
                expected: montage.len(),
                actual: data.nrows(),
            });
        }
        if !(fs > 0.0) || !fs.is_finite() {
            return Err(Error::invalid(format!("sampling rate must be positive, got {fs}")));
        }
        for w in annotations.windows(2) {
            if w[1].sample <= w[0].sample {
                return Err(Error::invalid(format!(
                    "annotation samples must be strictly increasing ({} then {})",
                    w[0].sample, w[1].sample
                )));
            }
        }
        if let Some(last) = annotations.last() {
            if last.sample >= data.ncols() {
                return Err(Error::invalid(format!(
                    "annotation at sample {} beyond recording length {}",
                    last.sample,
                    data.ncols()
                )));
            }
        }
        Ok(Self {
            data,
            fs,
            montage,
            annotations,
        })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn montage(&self) -> &Montage {
        &self.montage
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn n_channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    /// Same metadata, new payload of identical shape.
    pub fn with_data(&self, data: Array2<f64>) -> Result<Self> {
        if data.dim() != self.data.dim() {
            return Err(Error::Dimension {
                what: "replacement data rows",
                expected: self.data.nrows(),
                actual: data.nrows(),
            });
        }
        Ok(Self {
            data,
            ..self.clone()
        })
    }

    /// Payload with a different channel set (components, scouts, harmonic
    /// coefficients) keeping sampling rate and events.
    pub fn derived(&self, data: Array2<f64>, montage: Montage) -> Result<Self> {
        Self::new(data, self.fs, montage, self.annotations.clone())
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    /// Concatenate recordings sharing montage and rate, shifting later
    /// annotations by the running sample offset.
    pub fn merge(parts: &[Recording]) -> Result<Recording> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("nothing to merge"))?;
        let total: usize = parts.iter().map(|r| r.n_samples()).sum();
        let mut data = Array2::zeros((first.n_channels(), total));
        let mut annotations = Vec::new();
        let mut offset = 0;
        for r in parts {
            if r.montage != first.montage || r.fs != first.fs {
                return Err(Error::invalid("merged recordings must share montage and fs"));
            }
            data.slice_mut(s![.., offset..offset + r.n_samples()])
                .assign(&r.data);
            annotations.extend(r.annotations.iter().map(|a| Annotation {
                sample: a.sample + offset,
                label: a.label,
            }));
            offset += r.n_samples();
        }
        Recording::new(data, first.fs, first.montage.clone(), annotations)
    }
}

/// Pseudo-montage for derived channels that are not electrodes.
pub fn abstract_montage(prefix: &str, n: usize) -> Montage {
    Montage::abstract_named((0..n).map(|i| format!("{prefix}{i}")).collect()).expect("abstract montage is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    Raw,
    ZScored,
}

/// Labelled trials x channels x samples tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSet {
    data: Array3<f64>,
    labels: Vec<usize>,
    fs: f64,
    window: (f64, f64),
    units: Units,
    channel_names: Vec<String>,
}

impl EpochSet {
    pub fn new(
        data: Array3<f64>,
        labels: Vec<usize>,
        fs: f64,
        window: (f64, f64),
        channel_names: Vec<String>,
    ) -> Result<Self> {
        let (trials, channels, samples) = data.dim();
        if trials == 0 {
            return Err(Error::invalid("epoch set needs at least one trial"));
        }
        if labels.len() != trials {
            return Err(Error::Dimension {
                what: "labels vs trials",
                expected: trials,
                actual: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= N_CLASSES) {
            return Err(Error::invalid(format!("label {bad} outside 0..{N_CLASSES}")));
        }
        if !(fs > 0.0) {
            return Err(Error::invalid("sampling rate must be positive"));
        }
        if window.1 <= window.0 {
            return Err(Error::invalid("epoch window end must follow its start"));
        }
        let expected = window_samples(window, fs);
        if expected != samples {
            return Err(Error::Dimension {
                what: "samples per trial vs window",
                expected,
                actual: samples,
            });
        }
        if channel_names.len() != channels {
            return Err(Error::Dimension {
                what: "channel names",
                expected: channels,
                actual: channel_names.len(),
            });
        }
        Ok(Self {
            data,
            labels,
            fs,
            window,
            units: Units::Raw,
            channel_names,
        })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn window(&self) -> (f64, f64) {
        self.window
    }

    pub fn units(&self) -> Units {
        self.units
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn n_trials(&self) -> usize {
        self.data.dim().0
    }

    pub fn n_channels(&self) -> usize {
        self.data.dim().1
    }

    pub fn n_samples(&self) -> usize {
        self.data.dim().2
    }

    /// Replace the tensor, keeping trial count and sample count; the channel
    /// dimension may change (features), in which case names are regenerated.
    pub fn map_channels(&self, data: Array3<f64>, names: Vec<String>) -> Result<Self> {
        if data.dim().0 != self.n_trials() || data.dim().2 != self.n_samples() {
            return Err(Error::Dimension {
                what: "mapped epoch tensor trials",
                expected: self.n_trials(),
                actual: data.dim().0,
            });
        }
        let mut out = Self::new(data, self.labels.clone(), self.fs, self.window, names)?;
        out.units = self.units;
        Ok(out)
    }

    pub fn with_units(mut self, units: Units) -> Self {
        self.units = units;
        self
    }

    /// Trials at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n_trials()) {
            return Err(Error::invalid(format!("trial index {bad} out of range")));
        }
        let data = self.data.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let mut out = Self::new(data, labels, self.fs, self.window, self.channel_names.clone())?;
        out.units = self.units;
        Ok(out)
    }

    /// Keep the first `k` channels.
    pub fn first_channels(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.n_channels() {
            return Err(Error::invalid(format!(
                "channel count {k} outside 1..={}",
                self.n_channels()
            )));
        }
        let data = self.data.slice(s![.., ..k, ..]).to_owned();
        self.map_channels(data, self.channel_names[..k].to_vec())
    }
}

pub fn window_samples(window: (f64, f64), fs: f64) -> usize {
    ((window.1 - window.0) * fs).round() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ClassLabel(u8);

impl ClassLabel {
    pub fn from_index(index: usize) -> Option<Self> {
        (index < N_CLASSES).then_some(ClassLabel(index as u8))
    }

    pub fn from_letter(letter: char) -> Option<Self> {
        let up = letter.to_ascii_uppercase();
        up.is_ascii_uppercase().then(|| ClassLabel(up as u8 - b'A'))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn letter(self) -> char {
        (b'A' + self.0) as char
    }
}

impl std::fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Subtract the instantaneous mean across channels from every channel.
pub fn common_average_reference(rec: &Recording) -> Result<Recording> {
    if rec.n_channels() < 2 {
        return Err(Error::CarUndefined(rec.n_channels()));
    }
    let mean = rec.data.mean_axis(Axis(0)).expect("non-empty channel axis");
    let mut out = rec.data.clone();
    for mut row in out.rows_mut() {
        row -= &mean;
    }
    rec.with_data(out)
}

#[derive(Debug, Clone)]
pub struct Epoched {
    pub epochs: EpochSet,
    /// Annotations dropped for lack of pre-event history.
    pub skipped: usize,
}

/// One trial per annotation over `window` (seconds relative to the event);
/// trials running past the end of the recording are zero-padded at the tail.
pub fn epoch(rec: &Recording, window: (f64, f64)) -> Result<Epoched> {
    if window.1 <= window.0 {
        return Err(Error::invalid("epoch window end must follow its start"));
    }
    let n = window_samples(window, rec.fs);
    let offset = (window.0 * rec.fs).round() as i64;
    let len = rec.n_samples();
    let mut kept = Vec::new();
    let mut skipped = 0;
    for a in &rec.annotations {
        let start = a.sample as i64 + offset;
        if start < 0 {
            skipped += 1;
            continue;
        }
        kept.push((start as usize, a.label));
    }
    if skipped > 0 {
        log::warn!("{skipped} annotation(s) too close to recording start were skipped");
    }
    if kept.is_empty() {
        return Err(Error::invalid("no epochs could be extracted"));
    }
    let mut data = Array3::zeros((kept.len(), rec.n_channels(), n));
    for (t, &(start, _)) in kept.iter().enumerate() {
        let stop = (start + n).min(len);
        if stop > start {
            data.slice_mut(s![t, .., ..stop - start])
                .assign(&rec.data.slice(s![.., start..stop]));
        }
    }
    let labels = kept.iter().map(|&(_, l)| l).collect();
    let epochs = EpochSet::new(data, labels, rec.fs, window, rec.montage.names().to_vec())?;
    Ok(Epoched { epochs, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZScope {
    /// Statistics of each (trial, channel) row.
    #[default]
    PerTrialChannel,
    /// Statistics of each channel pooled over all trials.
    PerChannelDataset,
}

/// Zero-mean, unit-variance scaling. Rows with zero spread (padding) come out
/// as zeros instead of NaN.
pub fn znormalize(epochs: &EpochSet, scope: ZScope) -> EpochSet {
    let mut data = epochs.data.clone();
    match scope {
        ZScope::PerTrialChannel => {
            for mut trial in data.outer_iter_mut() {
                for mut row in trial.rows_mut() {
                    let (mean, sd) = mean_sd(row.iter().copied());
                    let scale = if sd > 0.0 { 1.0 / sd } else { 0.0 };
                    row.mapv_inplace(|v| (v - mean) * scale);
                }
            }
        }
        ZScope::PerChannelDataset => {
            for c in 0..epochs.n_channels() {
                let mut lane = data.slice_mut(s![.., c, ..]);
                let (mean, sd) = mean_sd(lane.iter().copied());
                let scale = if sd > 0.0 { 1.0 / sd } else { 0.0 };
                lane.mapv_inplace(|v| (v - mean) * scale);
            }
        }
    }
    EpochSet {
        data,
        units: Units::ZScored,
        ..epochs.clone()
    }
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let sd = var.sqrt();
    // constant rows: relative spread at rounding level counts as zero
    if sd <= 1e-12 * mean.abs().max(f64::MIN_POSITIVE) || sd == 0.0 {
        (mean, 0.0)
    } else {
        (mean, sd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(data: Array2<f64>, fs: f64, ann: Vec<Annotation>) -> Recording {
        let m = Montage::for_channels(data.nrows()).unwrap();
        Recording::new(data, fs, m, ann).unwrap()
    }

    #[test]
    fn car_two_channels() {
        let r = rec(array![[1.0, 3.0], [3.0, 5.0]], 500.0, vec![]);
        let out = common_average_reference(&r).unwrap();
        assert_eq!(out.data(), &array![[-1.0, -1.0], [1.0, 1.0]]);
    }

    #[test]
    fn car_single_channel_rejected() {
        let r = rec(array![[1.0, 2.0]], 500.0, vec![]);
        assert!(matches!(common_average_reference(&r), Err(Error::CarUndefined(1))));
    }

    #[test]
    fn car_matches_column_loop_and_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = Array2::from_shape_fn((31, 1000), |_| rng.gen_range(-50.0..50.0));
        let r = rec(data.clone(), 500.0, vec![]);
        let once = common_average_reference(&r).unwrap();
        for t in 0..1000 {
            let mut m = 0.0;
            for c in 0..31 {
                m += data[[c, t]];
            }
            m /= 31.0;
            let mut colsum = 0.0;
            for c in 0..31 {
                assert_abs_diff_eq!(once.data()[[c, t]], data[[c, t]] - m, epsilon = 1e-12);
                colsum += once.data()[[c, t]];
            }
            assert_abs_diff_eq!(colsum, 0.0, epsilon = 1e-10);
        }
        let twice = common_average_reference(&once).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn epoch_length_and_tail_padding() {
        let fs = 500.0;
        let len = 3000;
        let data = Array2::from_elem((2, len), 1.0);
        let ann = vec![
            Annotation { sample: 1000, label: 0 },
            Annotation { sample: len - 1, label: 3 },
        ];
        let r = rec(data, fs, ann);
        let out = epoch(&r, (-1.0, 2.0)).unwrap();
        assert_eq!(out.skipped, 0);
        let e = &out.epochs;
        assert_eq!(e.n_samples(), 1500);
        assert_eq!(e.labels(), &[0, 3]);
        let last = e.data().slice(s![1, 0, ..]);
        assert_eq!(last.iter().filter(|&&v| v == 1.0).count(), 501);
        assert!(last.slice(s![501..]).iter().all(|&v| v == 0.0));
        assert_eq!(last.len() - 501, 999);
    }

    #[test]
    fn epoch_skips_early_events() {
        let r = rec(
            Array2::zeros((2, 2000)),
            500.0,
            vec![Annotation { sample: 100, label: 1 }, Annotation { sample: 900, label: 2 }],
        );
        let out = epoch(&r, (-1.0, 2.0)).unwrap();
        assert_eq!(out.skipped, 1);
        assert_eq!(out.epochs.n_trials(), 1);
        assert_eq!(out.epochs.labels(), &[2]);
    }

    #[test]
    fn znorm_row_and_zero_padding() {
        let data = Array3::from_shape_vec((1, 2, 3), vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let e = EpochSet::new(data, vec![0], 1.0, (0.0, 3.0), vec!["a".into(), "b".into()]).unwrap();
        let z = znormalize(&e, ZScope::PerTrialChannel);
        let row: Vec<f64> = z.data().slice(s![0, 0, ..]).to_vec();
        let (m, sd) = mean_sd(row.iter().copied());
        assert_abs_diff_eq!(m, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sd, 1.0, epsilon = 1e-12);
        assert!(z.data().slice(s![0, 1, ..]).iter().all(|&v| v == 0.0));
        assert_eq!(z.units(), Units::ZScored);
    }

    #[test]
    fn znorm_random_tensor_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut data = Array3::from_shape_fn((4, 31, 1500), |_| rng.gen_range(-3.0..7.0));
        data.slice_mut(s![2, 5, ..]).fill(0.0);
        let names = (0..31).map(|i| i.to_string()).collect();
        let e = EpochSet::new(data, vec![0, 1, 2, 3], 500.0, (-1.0, 2.0), names).unwrap();
        let z = znormalize(&e, ZScope::PerTrialChannel);
        for t in 0..4 {
            for c in 0..31 {
                let row = z.data().slice(s![t, c, ..]);
                let n = row.len() as f64;
                let mean = row.sum() / n;
                let sd = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                if t == 2 && c == 5 {
                    assert!(row.iter().all(|&v| v == 0.0));
                } else {
                    assert!(mean.abs() < 1e-9);
                    assert!((sd - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn class_label_bijection() {
        for i in 0..N_CLASSES {
            let l = ClassLabel::from_index(i).unwrap();
            assert_eq!(ClassLabel::from_letter(l.letter()).unwrap().index(), i);
        }
        assert_eq!(ClassLabel::from_index(0).unwrap().letter(), 'A');
        assert_eq!(ClassLabel::from_index(25).unwrap().letter(), 'Z');
        assert!(ClassLabel::from_index(26).is_none());
    }

    #[test]
    fn standard_montage_shape() {
        let m = Montage::standard_31();
        assert_eq!(m.len(), 31);
        assert_eq!(m.frontal_channels().len(), 7);
        assert!(m.positions().iter().all(|p| p.theta <= 2.0 * PI / 3.0));
    }

    #[test]
    fn recording_rejects_bad_annotations() {
        let m = Montage::for_channels(2).unwrap();
        let bad = Recording::new(
            Array2::zeros((2, 10)),
            500.0,
            m.clone(),
            vec![Annotation { sample: 5, label: 0 }, Annotation { sample: 5, label: 1 }],
        );
        assert!(bad.is_err());
        let beyond = Recording::new(Array2::zeros((2, 10)), 500.0, m, vec![Annotation { sample: 10, label: 0 }]);
        assert!(beyond.is_err());
    }
}
