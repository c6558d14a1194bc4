//! Ground-truth synthetic EEG: independent sources with known mixing,
//! class-specific low-frequency signatures on a few sources, and blink and
//! muscle artifacts injected as extra sources.

use std::f64::consts::PI;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_eig_desc, to_na};
use crate::signal::{Annotation, Montage, Recording};

/// Seed for the class signatures; fixed so every dataset shares the same letters.
pub const SIGNATURE_SEED: u64 = 0x51_6e_a7_0e;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignatureSpec {
    /// Number of neural sources that carry the class signature.
    pub n_sources: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    /// Sinusoids per source and class.
    pub components: usize,
    pub amplitude: f64,
    /// Seconds after the trial onset, Hann-windowed.
    pub duration: f64,
}

impl Default for SignatureSpec {
    fn default() -> Self {
        Self { n_sources: 5, low_hz: 1.0, high_hz: 7.0, components: 2, amplitude: 5.0, duration: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArtifactSpec {
    /// Peak blink amplitude; zero disables the blink source.
    pub blink_amplitude: f64,
    /// Blinks per second.
    pub blink_rate: f64,
    /// Gaussian width of one blink in seconds.
    pub blink_width: f64,
    /// Peak muscle amplitude; zero disables the muscle source.
    pub muscle_amplitude: f64,
    pub muscle_rate: f64,
    pub muscle_low_hz: f64,
    pub muscle_high_hz: f64,
    pub muscle_duration: f64,
}

impl Default for ArtifactSpec {
    fn default() -> Self {
        Self {
            blink_amplitude: 150.0,
            blink_rate: 0.3,
            blink_width: 0.1,
            muscle_amplitude: 15.0,
            muscle_rate: 0.2,
            muscle_low_hz: 20.0,
            muscle_high_hz: 45.0,
            muscle_duration: 0.3,
        }
    }
}

impl ArtifactSpec {
    pub fn none() -> Self {
        Self { blink_amplitude: 0.0, muscle_amplitude: 0.0, ..Self::default() }
    }

    fn blink_on(&self) -> bool {
        self.blink_amplitude > 0.0 && self.blink_rate > 0.0
    }

    fn muscle_on(&self) -> bool {
        self.muscle_amplitude > 0.0 && self.muscle_rate > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub channels: usize,
    pub fs: f64,
    pub n_classes: usize,
    pub trials_per_class: usize,
    pub n_neural_sources: usize,
    /// Standard deviation of the Laplace background of each neural source.
    pub source_sd: f64,
    pub signature: SignatureSpec,
    pub artifacts: ArtifactSpec,
    /// Gaussian sensor noise added after mixing.
    pub noise_sd: f64,
    /// Seconds between consecutive trial onsets.
    pub trial_interval: f64,
    /// Seconds of signal before the first and after the last onset.
    pub margin: f64,
    /// Draws the mixing matrix from this seed instead of the generation seed.
    pub mixing_seed: Option<u64>,
    pub condition_bound: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            channels: 31,
            fs: 500.0,
            n_classes: 26,
            trials_per_class: 100,
            n_neural_sources: 29,
            source_sd: 5.0,
            signature: SignatureSpec::default(),
            artifacts: ArtifactSpec::default(),
            noise_sd: 1.0,
            trial_interval: 2.0,
            margin: 2.0,
            mixing_seed: None,
            condition_bound: 200.0,
        }
    }
}

impl SynthConfig {
    /// Reduced-rate variant for quick end-to-end runs: 100 Hz, 1.5 s between trials.
    pub fn desk() -> Self {
        Self { fs: 100.0, trial_interval: 1.5, ..Self::default() }
    }

    pub fn n_sources(&self) -> usize {
        self.n_neural_sources + usize::from(self.artifacts.blink_on()) + usize::from(self.artifacts.muscle_on())
    }

    pub fn n_trials(&self) -> usize {
        self.n_classes * self.trials_per_class
    }

    pub fn n_samples(&self) -> usize {
        let span = 2.0 * self.margin + self.trial_interval * self.n_trials().saturating_sub(1) as f64;
        (span * self.fs).round() as usize + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        let nyq = self.fs / 2.0;
        if self.channels == 0 || self.n_classes == 0 || self.trials_per_class == 0 || self.n_neural_sources == 0 {
            return bad("channels, classes, trials per class and neural sources must be positive".into());
        }
        if self.n_classes > 26 {
            return bad(format!("at most 26 classes, got {}", self.n_classes));
        }
        if !(self.fs > 0.0) {
            return bad(format!("sampling rate must be positive, got {}", self.fs));
        }
        let sig = &self.signature;
        if sig.n_sources > self.n_neural_sources {
            return bad(format!("{} signature sources exceed {} neural sources", sig.n_sources, self.n_neural_sources));
        }
        if !(sig.low_hz >= 0.5 && sig.high_hz >= sig.low_hz && sig.high_hz < nyq) {
            return bad(format!("signature band {}-{} Hz outside [0.5, {nyq})", sig.low_hz, sig.high_hz));
        }
        if sig.components == 0 || !(sig.duration > 0.0) || sig.amplitude < 0.0 {
            return bad("signature needs components, positive duration and non-negative amplitude".into());
        }
        let art = &self.artifacts;
        if art.muscle_on() && !(art.muscle_low_hz > 0.0 && art.muscle_high_hz > art.muscle_low_hz && art.muscle_high_hz < nyq) {
            return bad(format!("muscle band {}-{} Hz outside (0, {nyq})", art.muscle_low_hz, art.muscle_high_hz));
        }
        if art.blink_on() && !(art.blink_width > 0.0) {
            return bad("blink width must be positive".into());
        }
        if self.n_sources() > self.channels {
            return bad(format!("{} sources exceed {} channels", self.n_sources(), self.channels));
        }
        if !(self.trial_interval > 0.0) || self.margin < 0.0 || self.source_sd < 0.0 || self.noise_sd < 0.0 {
            return bad("interval must be positive; margin and noise levels non-negative".into());
        }
        if !(self.condition_bound >= 1.0) {
            return bad(format!("condition bound must be >= 1, got {}", self.condition_bound));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Neural,
    Signal,
    Blink,
    Muscle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Channels x sources.
    pub mixing: Array2<f64>,
    /// Sources x samples, before mixing.
    pub sources: Array2<f64>,
    pub kinds: Vec<SourceKind>,
    pub onsets: Vec<usize>,
    pub labels: Vec<usize>,
    pub condition_number: f64,
    pub seed: u64,
}

#[derive(Serialize)]
struct TruthJson<'a> {
    seed: u64,
    condition_number: f64,
    kinds: &'a [SourceKind],
    artifact_sources: Vec<usize>,
    signal_sources: Vec<usize>,
    mixing: Vec<Vec<f64>>,
    onsets: &'a [usize],
    labels: &'a [usize],
}

impl GroundTruth {
    pub fn indices_of(&self, kind: SourceKind) -> Vec<usize> {
        self.kinds.iter().enumerate().filter(|(_, k)| **k == kind).map(|(i, _)| i).collect()
    }

    pub fn artifact_sources(&self) -> Vec<usize> {
        self.kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| matches!(k, SourceKind::Blink | SourceKind::Muscle))
            .map(|(i, _)| i)
            .collect()
    }

    /// JSON summary without the source series.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(TruthJson {
            seed: self.seed,
            condition_number: self.condition_number,
            kinds: &self.kinds,
            artifact_sources: self.artifact_sources(),
            signal_sources: self.indices_of(SourceKind::Signal),
            mixing: self.mixing.rows().into_iter().map(|r| r.to_vec()).collect(),
            onsets: &self.onsets,
            labels: &self.labels,
        })
        .expect("plain data serializes")
    }
}

/// Per-class sinusoid parameters: `[class][source][component] = (freq, phase, weight)`.
fn signatures(cfg: &SynthConfig) -> Vec<Vec<Vec<(f64, f64, f64)>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(SIGNATURE_SEED);
    let sig = &cfg.signature;
    (0..cfg.n_classes)
        .map(|_| {
            (0..sig.n_sources)
                .map(|_| {
                    (0..sig.components)
                        .map(|_| {
                            let f = rng.gen_range(sig.low_hz..=sig.high_hz);
                            let phase = rng.gen_range(0.0..2.0 * PI);
                            let w: f64 = rng.sample(StandardNormal);
                            (f, phase, w)
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn laplace(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    // unit-variance Laplace has scale 1/sqrt(2)
    let u: f64 = rng.gen_range(-0.5..0.5);
    -sd / 2f64.sqrt() * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
}

fn condition_number(a: &Array2<f64>) -> f64 {
    let na = to_na(a);
    let (values, _) = sym_eig_desc(&(na.transpose() * &na));
    let max = values[0].max(0.0);
    let min = values[values.len() - 1].max(0.0);
    if min == 0.0 {
        f64::INFINITY
    } else {
        (max / min).sqrt()
    }
}

fn frontal_weights(montage: &Montage) -> Vec<f64> {
    let by_name = montage.frontal_channels();
    let units = montage.unit_vectors();
    (0..montage.len())
        .map(|i| {
            let frontal = if by_name.is_empty() { units[i][0] > 0.5 } else { by_name.contains(&i) };
            if frontal {
                0.5 + 0.5 * units[i][0].max(0.0)
            } else {
                0.0
            }
        })
        .collect()
}

fn lateral_weights(montage: &Montage) -> Vec<f64> {
    montage.unit_vectors().iter().map(|u| u[1] * u[1] * (1.0 - u[2].max(0.0))).collect()
}

fn draw_mixing(cfg: &SynthConfig, montage: &Montage, kinds: &[SourceKind], rng: &mut ChaCha8Rng) -> Result<(Array2<f64>, f64)> {
    const ATTEMPTS: usize = 200;
    let blink = frontal_weights(montage);
    let muscle = lateral_weights(montage);
    for _ in 0..ATTEMPTS {
        let mut a = Array2::from_shape_fn((cfg.channels, kinds.len()), |_| rng.sample::<f64, _>(StandardNormal));
        for (j, kind) in kinds.iter().enumerate() {
            let topo = match kind {
                SourceKind::Blink => &blink,
                SourceKind::Muscle => &muscle,
                _ => continue,
            };
            for i in 0..cfg.channels {
                a[[i, j]] = topo[i];
            }
        }
        let cond = condition_number(&a);
        if cond <= cfg.condition_bound {
            return Ok((a, cond));
        }
    }
    Err(Error::invalid(format!(
        "no mixing matrix with condition number <= {} after {ATTEMPTS} draws",
        cfg.condition_bound
    )))
}

/// Continuous recording `A (sources) + noise` with one annotation per trial onset.
pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<(Recording, GroundTruth)> {
    cfg.validate()?;
    let montage = Montage::for_channels(cfg.channels)?;
    let mut kinds: Vec<SourceKind> = (0..cfg.n_neural_sources)
        .map(|i| if i < cfg.signature.n_sources { SourceKind::Signal } else { SourceKind::Neural })
        .collect();
    if cfg.artifacts.blink_on() {
        kinds.push(SourceKind::Blink);
    }
    if cfg.artifacts.muscle_on() {
        kinds.push(SourceKind::Muscle);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mixing, cond) = match cfg.mixing_seed {
        Some(ms) => draw_mixing(cfg, &montage, &kinds, &mut ChaCha8Rng::seed_from_u64(ms))?,
        None => draw_mixing(cfg, &montage, &kinds, &mut rng)?,
    };

    let n = cfg.n_samples();
    let fs = cfg.fs;
    let mut sources = Array2::zeros((kinds.len(), n));
    for k in 0..cfg.n_neural_sources {
        for v in sources.row_mut(k) {
            *v = laplace(&mut rng, cfg.source_sd);
        }
    }

    let mut labels: Vec<usize> = (0..cfg.n_trials()).map(|i| i % cfg.n_classes).collect();
    labels.shuffle(&mut rng);
    let first = (cfg.margin * fs).round() as usize;
    let onsets: Vec<usize> = (0..labels.len())
        .map(|i| first + (i as f64 * cfg.trial_interval * fs).round() as usize)
        .collect();

    let sigs = signatures(cfg);
    let len = (cfg.signature.duration * fs).round() as usize;
    let hann: Vec<f64> = (0..len).map(|t| 0.5 - 0.5 * (2.0 * PI * (t as f64 + 0.5) / len as f64).cos()).collect();
    for (&onset, &label) in onsets.iter().zip(&labels) {
        for (k, comps) in sigs[label].iter().enumerate() {
            let mut row = sources.row_mut(k);
            for t in 0..len.min(n - onset) {
                let time = t as f64 / fs;
                let v: f64 = comps.iter().map(|(f, ph, w)| w * (2.0 * PI * f * time + ph).sin()).sum();
                row[onset + t] += cfg.signature.amplitude * hann[t] * v;
            }
        }
    }

    let art = &cfg.artifacts;
    let duration = n as f64 / fs;
    let mut next = cfg.n_neural_sources;
    if art.blink_on() {
        let mut row = sources.row_mut(next);
        let gaps = Exp::new(art.blink_rate).expect("positive rate");
        let mut t = gaps.sample(&mut rng);
        let reach = (4.0 * art.blink_width * fs).ceil() as isize;
        while t < duration {
            let amp = art.blink_amplitude * rng.gen_range(0.7..1.0);
            let centre = (t * fs) as isize;
            for i in (centre - reach).max(0)..(centre + reach).min(n as isize) {
                let d = (i as f64 / fs - t) / art.blink_width;
                row[i as usize] += amp * (-0.5 * d * d).exp();
            }
            t += gaps.sample(&mut rng);
        }
        next += 1;
    }
    if art.muscle_on() {
        let mut row = sources.row_mut(next);
        let gaps = Exp::new(art.muscle_rate).expect("positive rate");
        let mut t = gaps.sample(&mut rng);
        let blen = ((art.muscle_duration * fs).round() as usize).max(2);
        while t < duration {
            let start = (t * fs) as usize;
            let tones: Vec<(f64, f64)> = (0..8)
                .map(|_| (rng.gen_range(art.muscle_low_hz..art.muscle_high_hz), rng.gen_range(0.0..2.0 * PI)))
                .collect();
            for i in 0..blen.min(n.saturating_sub(start)) {
                let env = (PI * i as f64 / (blen - 1) as f64).sin();
                let time = i as f64 / fs;
                let v: f64 = tones.iter().map(|(f, p)| (2.0 * PI * f * time + p).sin()).sum::<f64>() / 8f64.sqrt();
                row[start + i] += art.muscle_amplitude * env * v;
            }
            t += gaps.sample(&mut rng);
        }
    }

    let mut data = mixing.dot(&sources);
    if cfg.noise_sd > 0.0 {
        for v in data.iter_mut() {
            *v += cfg.noise_sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    // stored as f32 on disk; keep the in-memory copy on that grid
    data.mapv_inplace(|v| v as f32 as f64);

    let annotations = onsets.iter().zip(&labels).map(|(&sample, &label)| Annotation { sample, label }).collect();
    let rec = Recording::new(data, fs, montage, annotations)?;
    let truth = GroundTruth { mixing, sources, kinds, onsets, labels, condition_number: cond, seed };
    Ok((rec, truth))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Separability {
    pub accuracy: f64,
    /// Mean of `(d_other - d_own) / (d_other + d_own)` over trials.
    pub margin: f64,
}

impl Separability {
    pub fn certify(&self, min_accuracy: f64) -> Result<()> {
        if self.accuracy >= min_accuracy {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "oracle accuracy {:.4} below required {min_accuracy} (margin {:.4})",
                self.accuracy, self.margin
            )))
        }
    }
}

/// Nearest-centroid classification of the signature sources recovered with the
/// true unmixing, using two-fold cross-fitting (centroids from one half of
/// each class, tested on the other).
pub fn separability_check(rec: &Recording, truth: &GroundTruth, cfg: &SynthConfig) -> Result<Separability> {
    let signal = truth.indices_of(SourceKind::Signal);
    if signal.is_empty() {
        return Err(Error::invalid("no signature sources to check"));
    }
    let pinv = to_na(&truth.mixing)
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::Singular(e.to_string()))?;
    let rows: Vec<usize> = signal.clone();
    let unmix = Array2::from_shape_fn((rows.len(), rec.n_channels()), |(i, j)| pinv[(rows[i], j)]);
    let len = (cfg.signature.duration * cfg.fs).round() as usize;
    let feats: Vec<Vec<f64>> = truth
        .onsets
        .iter()
        .map(|&o| {
            let end = (o + len).min(rec.n_samples());
            let seg = rec.data().slice(s![.., o..end]);
            let mut f = unmix.dot(&seg).into_raw_vec_and_offset().0;
            f.resize(rows.len() * len, 0.0);
            f
        })
        .collect();
    let k = cfg.n_classes;
    let dim = rows.len() * len;
    let mut half = vec![0usize; feats.len()];
    let mut seen = vec![0usize; k];
    for (i, &l) in truth.labels.iter().enumerate() {
        half[i] = seen[l] % 2;
        seen[l] += 1;
    }
    let mut correct = 0usize;
    let mut margin = 0.0;
    for h in 0..2 {
        let mut cent = vec![vec![0.0; dim]; k];
        let mut count = vec![0usize; k];
        for (i, f) in feats.iter().enumerate() {
            if half[i] != h {
                let l = truth.labels[i];
                count[l] += 1;
                for (c, v) in cent[l].iter_mut().zip(f) {
                    *c += v;
                }
            }
        }
        for (c, &m) in cent.iter_mut().zip(&count) {
            if m > 0 {
                c.iter_mut().for_each(|v| *v /= m as f64);
            }
        }
        for (i, f) in feats.iter().enumerate() {
            if half[i] != h {
                continue;
            }
            let l = truth.labels[i];
            let dist: Vec<f64> = cent
                .iter()
                .enumerate()
                .map(|(c, m)| if count[c] == 0 { f64::INFINITY } else { f.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() })
                .collect();
            let pred = crate::nets::argmax(&dist.iter().map(|d| -d).collect::<Vec<_>>());
            correct += usize::from(pred == l);
            let other = dist.iter().enumerate().filter(|(c, _)| *c != l).map(|(_, d)| *d).fold(f64::INFINITY, f64::min);
            let own = dist[l];
            margin += if own.is_finite() && other.is_finite() { (other - own) / (other + own) } else { 0.0 };
        }
    }
    let n = feats.len() as f64;
    Ok(Separability { accuracy: correct as f64 / n, margin: margin / n })
}

/// Power of each channel restricted to `[lo, hi)` Hz, by periodogram.
pub fn band_power(data: &Array2<f64>, fs: f64, lo: f64, hi: f64) -> Vec<f64> {
    use rustfft::{num_complex::Complex, FftPlanner};
    let n = data.ncols();
    let fft = FftPlanner::new().plan_fft_forward(n);
    data.axis_iter(Axis(0))
        .map(|row| {
            let mean = row.mean().unwrap_or(0.0);
            let mut buf: Vec<Complex<f64>> = row.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
            fft.process(&mut buf);
            let mut p = 0.0;
            for (k, c) in buf.iter().enumerate().take(n / 2 + 1) {
                let f = k as f64 * fs / n as f64;
                if f >= lo && f < hi {
                    p += c.norm_sqr() * if k == 0 || 2 * k == n { 1.0 } else { 2.0 };
                }
            }
            p / (n as f64 * n as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { fs: 100.0, trials_per_class: 8, trial_interval: 1.5, ..SynthConfig::default() }
    }

    #[test]
    fn counts_and_determinism() {
        let cfg = SynthConfig { trials_per_class: 100, ..small() };
        let (rec, truth) = generate(&cfg, 1).unwrap();
        assert_eq!(rec.annotations().len(), 2600);
        assert_eq!(rec.n_channels(), 31);
        assert_eq!(truth.kinds.len(), 31);
        assert!(truth.condition_number <= cfg.condition_bound);
        let (rec2, _) = generate(&cfg, 1).unwrap();
        assert_eq!(rec.data(), rec2.data());
        let (rec3, truth3) = generate(&cfg, 2).unwrap();
        assert_ne!(rec.data(), rec3.data());
        assert_eq!(signatures(&cfg), signatures(&SynthConfig { ..cfg.clone() }));
        assert_eq!(truth.artifact_sources(), vec![29, 30]);
        assert_eq!(truth3.indices_of(SourceKind::Signal), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn blink_dominates_frontal_low_frequencies() {
        let cfg = SynthConfig { signature: SignatureSpec { amplitude: 0.0, ..Default::default() }, ..small() };
        let (rec, _) = generate(&cfg, 3).unwrap();
        let p = band_power(rec.data(), rec.fs(), 0.0, 3.0);
        let m = rec.montage();
        let frontal: f64 = ["Fp1", "Fp2"].iter().map(|n| p[m.index_of(n).unwrap()]).sum::<f64>() / 2.0;
        let parietal: f64 = ["P3", "Pz", "P4"].iter().map(|n| p[m.index_of(n).unwrap()]).sum::<f64>() / 3.0;
        assert!(frontal >= 5.0 * parietal, "{frontal} vs {parietal}");
    }

    #[test]
    fn oracle_separability() {
        let cfg = SynthConfig { trials_per_class: 20, ..small() };
        let (rec, truth) = generate(&cfg, 4).unwrap();
        let s = separability_check(&rec, &truth, &cfg).unwrap();
        assert!(s.accuracy >= 0.99, "{s:?}");
        s.certify(0.99).unwrap();

        let flat = SynthConfig { signature: SignatureSpec { amplitude: 0.0, ..Default::default() }, ..cfg.clone() };
        let (rec, truth) = generate(&flat, 4).unwrap();
        let s = separability_check(&rec, &truth, &flat).unwrap();
        assert!(s.accuracy < 0.15, "{s:?}");
        assert!(s.certify(0.99).is_err());
    }

    #[test]
    fn more_noise_lowers_margin() {
        for seed in 0..5 {
            let base = SynthConfig { trials_per_class: 4, noise_sd: 4.0, ..small() };
            let loud = SynthConfig { noise_sd: 8.0, ..base.clone() };
            let (r1, t1) = generate(&base, seed).unwrap();
            let (r2, t2) = generate(&loud, seed).unwrap();
            let m1 = separability_check(&r1, &t1, &base).unwrap().margin;
            let m2 = separability_check(&r2, &t2, &loud).unwrap().margin;
            assert!(m2 < m1, "seed {seed}: {m2} !< {m1}");
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let too_many = SynthConfig { n_neural_sources: 31, ..small() };
        assert!(generate(&too_many, 0).is_err());
        let band = SynthConfig { signature: SignatureSpec { high_hz: 60.0, ..Default::default() }, ..small() };
        assert!(band.validate().is_err());
        let no_art = SynthConfig { n_neural_sources: 31, artifacts: ArtifactSpec::none(), ..small() };
        assert!(no_art.validate().is_ok());
    }
}
