//! Stratified k-fold protocol, sweeps over features x bands x models, paired
//! one-tailed t-tests and report rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::BandName;
use crate::ica::component_subset;
use crate::nets::{self, build, NetName, Samples, TrainConfig};
use crate::signal::EpochSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feature {
    Eeg,
    Ica,
    Scout,
    Shd,
    Hhd,
}

impl Feature {
    pub const ALL: [Feature; 5] = [Feature::Eeg, Feature::Ica, Feature::Scout, Feature::Shd, Feature::Hhd];

    pub fn as_str(self) -> &'static str {
        match self {
            Feature::Eeg => "eeg",
            Feature::Ica => "ica",
            Feature::Scout => "scout",
            Feature::Shd => "shd",
            Feature::Hhd => "hhd",
        }
    }

    pub fn needs_order(self) -> bool {
        matches!(self, Feature::Shd | Feature::Hhd)
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Feature::ALL
            .into_iter()
            .find(|f| f.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown feature {s:?} (eeg, ica, scout, shd, hhd)")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

/// Stratified k-fold split: each class is shuffled and cut into `k` equal test
/// chunks; for every fold a seeded `val_fraction` of each class's remaining
/// trials (rounded) becomes validation data.
pub fn make_folds(labels: &[usize], k: usize, val_fraction: f64, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::invalid(format!("validation fraction {val_fraction} outside [0, 1)")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    for (&class, idx) in &by_class {
        if idx.len() % k != 0 {
            return Err(Error::FoldImbalance { class, count: idx.len(), k, remainder: idx.len() % k });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chunks: Vec<Vec<Vec<usize>>> = Vec::new();
    for idx in by_class.values() {
        let mut idx = idx.clone();
        idx.shuffle(&mut rng);
        let size = idx.len() / k;
        chunks.push(idx.chunks(size).map(<[usize]>::to_vec).collect());
    }
    let folds = (0..k)
        .map(|f| {
            let mut fold = Fold { train: Vec::new(), val: Vec::new(), test: Vec::new() };
            for class_chunks in &chunks {
                fold.test.extend(&class_chunks[f]);
                let mut rest: Vec<usize> =
                    class_chunks.iter().enumerate().filter(|(g, _)| *g != f).flat_map(|(_, c)| c.iter().copied()).collect();
                rest.shuffle(&mut rng);
                let n_val = (rest.len() as f64 * val_fraction).round() as usize;
                fold.val.extend(&rest[..n_val]);
                fold.train.extend(&rest[n_val..]);
            }
            fold.train.sort_unstable();
            fold.val.sort_unstable();
            fold.test.sort_unstable();
            fold
        })
        .collect();
    Ok(FoldPlan { folds })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub subject: String,
    pub feature: Feature,
    pub band: BandName,
    pub model: NetName,
    /// Harmonic order, or the number of kept components in a component sweep.
    pub order: Option<usize>,
    pub fold: usize,
    pub accuracy: f64,
    pub n_test: usize,
    pub status: Status,
}

/// One prepared input: a subject's epochs for a feature and band.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub subject: String,
    pub feature: Feature,
    pub band: BandName,
    pub order: Option<usize>,
    pub epochs: EpochSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub folds: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub train: TrainConfig,
    /// Worker cap; `NEUROAIR_THREADS` applies when unset.
    pub threads: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { folds: 10, val_fraction: 0.2, seed: 0, train: TrainConfig::default(), threads: None }
    }
}

/// Worker count from `NEUROAIR_THREADS`, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("NEUROAIR_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// SplitMix64 finalizer.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold a sequence of keys into one seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

fn subject_key(subject: &str) -> u64 {
    subject.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

fn model_key(m: NetName) -> u64 {
    NetName::ALL.iter().position(|x| *x == m).expect("listed") as u64
}

/// Folds depend on subject only; training seeds on subject, fold and model,
/// so every feature and band sees the same splits and initializations.
fn fold_seed(cfg: &EvalConfig, subject: &str) -> u64 {
    derive_seed(cfg.seed, &[subject_key(subject), 0xf01d])
}

fn train_seed(cfg: &EvalConfig, subject: &str, fold: usize, model: NetName) -> u64 {
    derive_seed(cfg.seed, &[subject_key(subject), fold as u64, model_key(model)])
}

fn run_fold(set: &FeatureSet, fold_idx: usize, fold: &Fold, model: NetName, cfg: &EvalConfig) -> ResultRecord {
    let mut rec = ResultRecord {
        subject: set.subject.clone(),
        feature: set.feature,
        band: set.band,
        model,
        order: set.order,
        fold: fold_idx,
        accuracy: 0.0,
        n_test: fold.test.len(),
        status: Status::Failed,
    };
    let outcome = (|| -> Result<f64> {
        let all = Samples::from_epochs(&set.epochs);
        let spec = build(model, set.epochs.n_channels(), set.epochs.n_samples())?;
        let tcfg = TrainConfig { seed: train_seed(cfg, &set.subject, fold_idx, model), ..cfg.train.clone() };
        let trained = nets::train(&spec, &all.subset(&fold.train), &all.subset(&fold.val), &tcfg)?;
        Ok(nets::evaluate(&trained.network, &all.subset(&fold.test))?.accuracy)
    })();
    match outcome {
        Ok(acc) => {
            rec.accuracy = acc;
            rec.status = Status::Ok;
        }
        Err(e) => log::warn!(
            "{} {} {} {} fold {fold_idx} failed: {e}",
            set.subject,
            set.feature,
            set.band.as_str(),
            model
        ),
    }
    rec
}

/// Train and test every (feature set, model, fold). A failed fold is recorded
/// with status `failed` and the sweep continues.
pub fn run_sweep(sets: &[FeatureSet], models: &[NetName], cfg: &EvalConfig) -> Result<Vec<ResultRecord>> {
    let mut jobs = Vec::new();
    let mut plans = BTreeMap::new();
    for set in sets {
        if !plans.contains_key(&set.subject) {
            let plan = make_folds(set.epochs.labels(), cfg.folds, cfg.val_fraction, fold_seed(cfg, &set.subject))?;
            plans.insert(set.subject.clone(), plan);
        }
        let plan = &plans[&set.subject];
        for &model in models {
            for f in 0..plan.folds.len() {
                jobs.push((set, model, f));
            }
        }
    }
    let threads = cfg.threads.unwrap_or_else(worker_threads).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let records = pool.install(|| {
        jobs.par_iter()
            .map(|(set, model, f)| {
                let plan = &plans[&set.subject];
                run_fold(set, *f, &plan.folds[*f], *model, cfg)
            })
            .collect()
    });
    Ok(records)
}

/// Sweep over the first `k` ICA components for each `k`; `k` goes in the order column.
pub fn component_sweep(set: &FeatureSet, k_values: &[usize], models: &[NetName], cfg: &EvalConfig) -> Result<Vec<ResultRecord>> {
    if set.feature != Feature::Ica {
        return Err(Error::invalid("component sweep needs the ICA feature set"));
    }
    let subsets = k_values
        .iter()
        .map(|&k| {
            Ok(FeatureSet {
                subject: set.subject.clone(),
                feature: Feature::Ica,
                band: set.band,
                order: Some(k),
                epochs: component_subset(&set.epochs, k)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    run_sweep(&subsets, models, cfg)
}

/// Identifies one table cell: (feature, band, model, order).
pub type CellKey = (Feature, BandName, NetName, Option<usize>);

/// Per-subject mean accuracy over successful folds, per cell.
pub fn subject_means(records: &[ResultRecord]) -> BTreeMap<(CellKey, String), f64> {
    let mut acc: BTreeMap<(CellKey, String), (f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.status == Status::Ok) {
        let e = acc.entry(((r.feature, r.band, r.model, r.order), r.subject.clone())).or_default();
        e.0 += r.accuracy;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Mean over subjects of the per-subject fold means.
pub fn grand_means(records: &[ResultRecord]) -> BTreeMap<CellKey, f64> {
    let mut acc: BTreeMap<CellKey, (f64, usize)> = BTreeMap::new();
    for ((cell, _), m) in subject_means(records) {
        let e = acc.entry(cell).or_default();
        e.0 += m;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    /// One-tailed p-value for `mean(a - b) > 0`.
    pub p: f64,
    /// Zero variance with a non-zero mean difference.
    pub degenerate: bool,
}

/// Lanczos approximation (g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

pub fn t_density(x: f64, df: f64) -> f64 {
    let ln_c = ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
    (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp()
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Student t CDF by integrating the density from zero.
pub fn t_cdf(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return if t > 0.0 { 1.0 } else { 0.0 };
    }
    // integrate over u = atan(x) so the tail stays on a finite interval
    let f = |u: f64| {
        let c = u.cos();
        t_density(u.tan(), df) / (c * c)
    };
    let half = adaptive_simpson(&f, 0.0, t.abs().atan(), 1e-13);
    (0.5 + t.signum() * half).clamp(0.0, 1.0)
}

/// Paired one-tailed t-test of `mean(a - b) > 0`.
pub fn paired_t_one_tailed(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Dimension { what: "paired samples", expected: a.len(), actual: b.len() });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::invalid(format!("paired t-test needs at least 2 pairs, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, df, p: 0.5, degenerate: false }
        } else {
            let t = mean.signum() * f64::INFINITY;
            TTest { t, df, p: if mean > 0.0 { 0.0 } else { 1.0 }, degenerate: true }
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    Ok(TTest { t, df, p: 1.0 - t_cdf(t, df as f64), degenerate: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Model,
    Feature,
    Band,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "model" => Ok(Axis::Model),
            "feature" => Ok(Axis::Feature),
            "band" => Ok(Axis::Band),
            _ => Err(Error::invalid(format!("unknown axis {s:?} (model, feature, band)"))),
        }
    }
}

/// Row-vs-column p-values along one axis. Entry `[i][j]` tests whether level
/// `i` beats level `j`, pairing per-subject means over every cell that both
/// levels share on the other axes. `None` when fewer than two pairs exist.
#[derive(Debug, Clone, PartialEq)]
pub struct PValueMatrix {
    pub axis: Axis,
    pub levels: Vec<String>,
    pub p: Vec<Vec<Option<f64>>>,
}

pub fn pvalue_matrix(records: &[ResultRecord], axis: Axis) -> PValueMatrix {
    let means = subject_means(records);
    let split = |(f, b, m, o): CellKey, subject: &str| -> (String, String) {
        match axis {
            Axis::Model => (m.to_string(), format!("{f}|{}|{o:?}|{subject}", b.as_str())),
            Axis::Feature => (f.to_string(), format!("{m}|{}|{o:?}|{subject}", b.as_str())),
            Axis::Band => (b.as_str().to_string(), format!("{f}|{m}|{o:?}|{subject}")),
        }
    };
    let mut table: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for ((cell, subject), v) in &means {
        let (level, rest) = split(*cell, subject);
        if !order.contains(&level) {
            order.push(level.clone());
        }
        table.entry(level).or_default().insert(rest, *v);
    }
    let p = order
        .iter()
        .map(|li| {
            order
                .iter()
                .map(|lj| {
                    if li == lj {
                        return None;
                    }
                    let (ti, tj) = (&table[li], &table[lj]);
                    let (a, b): (Vec<f64>, Vec<f64>) =
                        ti.iter().filter_map(|(k, v)| tj.get(k).map(|w| (*v, *w))).unzip();
                    paired_t_one_tailed(&a, &b).ok().map(|t| t.p)
                })
                .collect()
        })
        .collect();
    PValueMatrix { axis, levels: order, p }
}

pub const CSV_HEADER: &str = "subject,feature,band,model,order,fold,accuracy,n_test,status";

pub fn records_to_csv(records: &[ResultRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.subject,
            r.feature,
            r.band.as_str(),
            r.model,
            r.order.map(|o| o.to_string()).unwrap_or_default(),
            r.fold,
            r.accuracy,
            r.n_test,
            match r.status {
                Status::Ok => "ok",
                Status::Failed => "failed",
            }
        );
    }
    out
}

pub fn records_from_csv(text: &str) -> Result<Vec<ResultRecord>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::Format(format!("results CSV must start with `{CSV_HEADER}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |what: &str| Error::Format(format!("results line {}: bad {what}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad("column count"));
            }
            Ok(ResultRecord {
                subject: f[0].to_string(),
                feature: f[1].parse().map_err(|_| bad("feature"))?,
                band: f[2].parse().map_err(|_| bad("band"))?,
                model: f[3].parse().map_err(|_| bad("model"))?,
                order: if f[4].is_empty() { None } else { Some(f[4].parse().map_err(|_| bad("order"))?) },
                fold: f[5].parse().map_err(|_| bad("fold"))?,
                accuracy: f[6].parse().map_err(|_| bad("accuracy"))?,
                n_test: f[7].parse().map_err(|_| bad("n_test"))?,
                status: match f[8].trim() {
                    "ok" => Status::Ok,
                    "failed" => Status::Failed,
                    _ => return Err(bad("status")),
                },
            })
        })
        .collect()
}

/// Accuracy grids (models x bands, in percent) for every feature and order.
pub fn render_tables(records: &[ResultRecord]) -> String {
    let means = grand_means(records);
    let groups: BTreeSet<(Feature, Option<usize>)> = means.keys().map(|(f, _, _, o)| (*f, *o)).collect();
    let bands: Vec<BandName> = BandName::ALL.iter().copied().filter(|b| means.keys().any(|k| k.1 == *b)).collect();
    let models: Vec<NetName> = NetName::ALL.iter().copied().filter(|m| means.keys().any(|k| k.2 == *m)).collect();
    let mut out = String::new();
    for (feature, order) in groups {
        match order {
            Some(o) => {
                let _ = writeln!(out, "Feature: {} (order {o})", feature.as_str().to_uppercase());
            }
            None => {
                let _ = writeln!(out, "Feature: {}", feature.as_str().to_uppercase());
            }
        }
        let _ = write!(out, "{:<10}", "Model");
        for b in &bands {
            let _ = write!(out, "{:>12}", b.title());
        }
        out.push('\n');
        for m in &models {
            let _ = write!(out, "{:<10}", m.as_str());
            for b in &bands {
                match means.get(&(feature, *b, *m, order)) {
                    Some(v) => {
                        let _ = write!(out, "{:>12.2}", v * 100.0);
                    }
                    None => {
                        let _ = write!(out, "{:>12}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    let failed = records.iter().filter(|r| r.status == Status::Failed).count();
    let _ = writeln!(out, "Folds: {} total, {failed} failed (excluded from means)", records.len());
    out
}

pub fn render_pvalues(m: &PValueMatrix) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "One-tailed paired t-test p-values ({:?}): row better than column; * p < 0.05", m.axis);
    let _ = write!(out, "{:<14}", "");
    for l in &m.levels {
        let _ = write!(out, "{l:>14}");
    }
    out.push('\n');
    for (i, l) in m.levels.iter().enumerate() {
        let _ = write!(out, "{l:<14}");
        for p in &m.p[i] {
            match p {
                Some(p) => {
                    let cell = format!("{p:.4}{}", if *p < 0.05 { "*" } else { "" });
                    let _ = write!(out, "{cell:>14}");
                }
                None => {
                    let _ = write!(out, "{:>14}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Writes `results.csv`, `tables.txt` and one p-value file per axis; returns the paths.
pub fn emit_report(records: &[ResultRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::invalid("no result records to report"));
    }
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, text)?;
        written.push(p);
        Ok(())
    };
    put("results.csv", records_to_csv(records))?;
    put("tables.txt", render_tables(records))?;
    for (axis, name) in [(Axis::Model, "pvalues_model.txt"), (Axis::Feature, "pvalues_feature.txt"), (Axis::Band, "pvalues_band.txt")] {
        put(name, render_pvalues(&pvalue_matrix(records, axis)))?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(classes: usize, per: usize) -> Vec<usize> {
        (0..classes * per).map(|i| i % classes).collect()
    }

    #[test]
    fn fold_counts_match_protocol() {
        let l = labels(26, 100);
        let plan = make_folds(&l, 10, 0.2, 7).unwrap();
        assert_eq!(plan.folds.len(), 10);
        let mut tested = vec![0; l.len()];
        for f in &plan.folds {
            assert_eq!(f.test.len(), 260);
            for c in 0..26 {
                let count = |v: &[usize]| v.iter().filter(|&&i| l[i] == c).count();
                assert_eq!((count(&f.train), count(&f.val), count(&f.test)), (72, 18, 10));
            }
            f.test.iter().for_each(|&i| tested[i] += 1);
            let all: BTreeSet<usize> = f.train.iter().chain(&f.val).chain(&f.test).copied().collect();
            assert_eq!(all.len(), l.len());
        }
        assert!(tested.iter().all(|&t| t == 1));
        assert_eq!(make_folds(&l, 10, 0.2, 7).unwrap(), plan);
    }

    #[test]
    fn fold_imbalance_reports_remainder() {
        let mut l = labels(3, 10);
        l.push(1);
        match make_folds(&l, 10, 0.2, 0) {
            Err(Error::FoldImbalance { class, count, remainder, .. }) => {
                assert_eq!((class, count, remainder), (1, 11, 1));
            }
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn folds_partition_any_permutation(seed in any::<u64>(), shuffle_seed in any::<u64>()) {
            let mut l = labels(4, 20);
            l.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
            let plan = make_folds(&l, 10, 0.2, seed).unwrap();
            let mut tested = vec![0; l.len()];
            for f in &plan.folds {
                for &i in &f.test { tested[i] += 1; }
                prop_assert!(f.train.iter().all(|i| !f.test.contains(i) && !f.val.contains(i)));
            }
            prop_assert!(tested.iter().all(|&t| t == 1));
        }
    }

    #[test]
    fn ttest_reference_values() {
        let r = paired_t_one_tailed(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap();
        assert!((r.t - 3.4641016).abs() < 1e-6);
        assert_eq!(r.df, 2);
        assert!((r.p - 0.0371).abs() < 1e-4, "{}", r.p);
        let same = paired_t_one_tailed(&[0.3, 0.4], &[0.3, 0.4]).unwrap();
        assert_eq!(same.p, 0.5);
        let a = [0.41, 0.52, 0.33, 0.47];
        let b = [0.40, 0.45, 0.35, 0.39];
        let ab = paired_t_one_tailed(&a, &b).unwrap().p;
        let ba = paired_t_one_tailed(&b, &a).unwrap().p;
        assert!((ab + ba - 1.0).abs() < 1e-12);
        let shift = paired_t_one_tailed(&[1.0, 2.0], &[0.0, 1.0]).unwrap();
        assert!(shift.degenerate && shift.p == 0.0);
    }

    #[test]
    fn t_cdf_matches_reference_distribution() {
        use statrs::distribution::{ContinuousCDF, StudentsT};
        for df in [1.0, 2.0, 5.0, 9.0, 30.0] {
            let oracle = StudentsT::new(0.0, 1.0, df).unwrap();
            for t in [-8.0, -2.5, -0.3, 0.0, 0.7, 1.8, 3.46, 12.0] {
                assert!((t_cdf(t, df) - oracle.cdf(t)).abs() < 1e-6, "df {df} t {t}");
            }
        }
    }

    #[test]
    fn p_decreases_with_t() {
        let mut last = 1.0;
        for t in [-2.0, -0.5, 0.0, 0.5, 1.0, 2.0, 4.0] {
            let p = 1.0 - t_cdf(t, 4.0);
            assert!(p < last && p > 0.0);
            last = p;
        }
    }

    fn record(subject: &str, band: BandName, model: NetName, fold: usize, acc: f64) -> ResultRecord {
        ResultRecord {
            subject: subject.into(),
            feature: Feature::Ica,
            band,
            model,
            order: None,
            fold,
            accuracy: acc,
            n_test: 260,
            status: Status::Ok,
        }
    }

    fn fake_records() -> Vec<ResultRecord> {
        let mut v = Vec::new();
        for (si, s) in ["S01", "S02", "S03"].iter().enumerate() {
            for (mi, m) in NetName::ALL.iter().enumerate() {
                for (bi, b) in BandName::ALL.iter().enumerate() {
                    for f in 0..10 {
                        let acc = 0.1 + 0.01 * (si + 3 * mi + bi) as f64 + 0.001 * ((f * 7 + si * 3 + bi) % 5) as f64;
                        v.push(record(s, *b, *m, f, acc));
                    }
                }
            }
        }
        v[5].status = Status::Failed;
        v
    }

    #[test]
    fn two_stage_means() {
        let recs = fake_records();
        let g = grand_means(&recs);
        let key = (Feature::Ica, BandName::ALL[1], NetName::DeepConvNet, None);
        let mut subject_avgs = Vec::new();
        for s in ["S01", "S02", "S03"] {
            let v: Vec<f64> = recs
                .iter()
                .filter(|r| r.subject == s && r.band == key.1 && r.model == key.2 && r.status == Status::Ok)
                .map(|r| r.accuracy)
                .collect();
            subject_avgs.push(v.iter().sum::<f64>() / v.len() as f64);
        }
        let expected = subject_avgs.iter().sum::<f64>() / 3.0;
        assert!((g[&key] - expected).abs() < 1e-15);
    }

    #[test]
    fn report_layout_and_csv_roundtrip() {
        let recs = fake_records();
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&recs, dir.path()).unwrap();
        assert_eq!(files.len(), 5);
        let csv = fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert_eq!(csv.lines().count(), recs.len() + 1);
        let back = records_from_csv(&csv).unwrap();
        assert_eq!(back, recs);
        assert_eq!(render_tables(&back), render_tables(&recs));
        let tables = render_tables(&recs);
        let grid: Vec<&str> = tables.lines().skip(1).take(4).collect();
        assert_eq!(grid.len(), 4);
        assert_eq!(grid[0].split_whitespace().count(), 1 + 7);
        for row in &grid[1..] {
            assert_eq!(row.split_whitespace().count(), 1 + 7);
        }
        let pm = pvalue_matrix(&recs, Axis::Model);
        assert_eq!(pm.levels.len(), 3);
        let i = pm.levels.iter().position(|l| l == "scnet").unwrap();
        let j = pm.levels.iter().position(|l| l == "eegnet").unwrap();
        assert!(pm.p[i][j].unwrap() < 0.05);
    }

    #[test]
    fn seeds_are_shared_across_features_and_bands() {
        let cfg = EvalConfig::default();
        assert_eq!(train_seed(&cfg, "S01", 3, NetName::Eegnet), train_seed(&cfg, "S01", 3, NetName::Eegnet));
        assert_ne!(train_seed(&cfg, "S01", 3, NetName::Eegnet), train_seed(&cfg, "S01", 4, NetName::Eegnet));
        assert_ne!(train_seed(&cfg, "S01", 3, NetName::Eegnet), train_seed(&cfg, "S02", 3, NetName::Eegnet));
    }
}
