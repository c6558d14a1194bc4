//! End-to-end runs: merge, reference, broadband filter, ICA, feature branch,
//! band filter, epoching, normalization, cross-validation and reporting,
//! with every intermediate hashed into a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::eval::{self, component_sweep, derive_seed, run_sweep, EvalConfig, Feature, FeatureSet, ResultRecord, Status};
use crate::filters::{design_fir, filtfilt_zero_phase, BandName};
use crate::harmonics::{build_basis, decompose_recording, HarmonicKind, SamplingWeights, ShiftConstants};
use crate::ica::{self, fit_ica, flag_artifacts_heuristic, remove_artifacts, ArtifactThresholds, IcaModel, IcaOptions};
use crate::io::{self, Dataset};
use crate::nets::{NetName, TrainConfig};
use crate::signal::{common_average_reference, epoch, znormalize, EpochSet, Recording, ZScope};
use crate::source::{default_lambda, sloreta_kernel, ScoutOperator};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Continuous NAIR recordings of one subject, concatenated in order.
    pub inputs: Vec<PathBuf>,
    pub subject: String,
    pub feature: Feature,
    pub bands: Vec<BandName>,
    pub models: Vec<NetName>,
    /// Harmonic order for shd/hhd.
    pub order: Option<usize>,
    pub head_shift: ShiftConstants,
    pub broadband: bool,
    /// `seed` is replaced by the derived ICA stage seed.
    pub ica: IcaOptions,
    /// Explicit artifact components; the heuristic runs when unset.
    pub exclude: Option<Vec<usize>>,
    pub thresholds: ArtifactThresholds,
    /// Remove flagged components before the eeg/scout/shd/hhd branches.
    pub clean: bool,
    pub leadfield: Option<PathBuf>,
    pub atlas: Option<PathBuf>,
    pub sloreta_lambda: Option<f64>,
    pub sloreta_snr: f64,
    pub window: (f64, f64),
    pub zscope: ZScope,
    /// `seed` is replaced per fold.
    pub train: TrainConfig,
    pub folds: usize,
    pub val_fraction: f64,
    pub threads: Option<usize>,
    /// Component counts to sweep instead of the standard ICA run.
    pub components: Option<Vec<usize>>,
    pub persist_epochs: bool,
    pub seed: u64,
    pub output: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            subject: "S01".into(),
            feature: Feature::Ica,
            bands: vec![BandName::DeltaTheta],
            models: vec![NetName::Eegnet],
            order: None,
            head_shift: ShiftConstants::Rounded,
            broadband: true,
            ica: IcaOptions::default(),
            exclude: None,
            thresholds: ArtifactThresholds::default(),
            clean: true,
            leadfield: None,
            atlas: None,
            sloreta_lambda: None,
            sloreta_snr: 3.0,
            window: (-1.0, 2.0),
            zscope: ZScope::PerTrialChannel,
            train: TrainConfig::default(),
            folds: 10,
            val_fraction: 0.2,
            threads: None,
            components: None,
            persist_epochs: true,
            seed: 0,
            output: PathBuf::from("run"),
        }
    }
}

fn config_err(path: &str, msg: impl Into<String>) -> Error {
    Error::Config { path: path.into(), msg: msg.into() }
}

impl PipelineConfig {
    /// Parse JSON, rejecting unknown fields, then validate.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| config_err(&format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(config_err("inputs", "at least one input recording is required"));
        }
        for (i, p) in self.inputs.iter().enumerate() {
            if !p.exists() {
                return Err(config_err(&format!("inputs[{i}]"), format!("{} does not exist", p.display())));
            }
        }
        if self.feature.needs_order() && self.order.is_none() {
            return Err(config_err("order", format!("feature {} requires a harmonic order", self.feature)));
        }
        if self.feature == Feature::Scout {
            for (name, p) in [("leadfield", &self.leadfield), ("atlas", &self.atlas)] {
                match p {
                    None => return Err(config_err(name, "feature scout requires a lead field and an atlas")),
                    Some(p) if !p.exists() => return Err(config_err(name, format!("{} does not exist", p.display()))),
                    _ => {}
                }
            }
        }
        if self.bands.is_empty() {
            return Err(config_err("bands", "at least one band is required"));
        }
        if self.models.is_empty() {
            return Err(config_err("models", "at least one model is required"));
        }
        if self.folds < 2 {
            return Err(config_err("folds", "at least 2 folds"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(config_err("val_fraction", "must lie in [0, 1)"));
        }
        if !(self.window.1 > self.window.0) {
            return Err(config_err("window", "end must follow start"));
        }
        if !(self.sloreta_snr > 0.0) {
            return Err(config_err("sloreta_snr", "must be positive"));
        }
        if self.ica.decim == 0 {
            return Err(config_err("ica.decim", "must be at least 1"));
        }
        self.train.validate().map_err(|e| config_err("train", e.to_string()))?;
        if let Some(ks) = &self.components {
            if self.feature != Feature::Ica {
                return Err(config_err("components", "component sweeps need feature ica"));
            }
            if ks.is_empty() || ks.contains(&0) {
                return Err(config_err("components", "component counts must be positive"));
            }
        }
        Ok(())
    }

    fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            folds: self.folds,
            val_fraction: self.val_fraction,
            seed: stage_seed(self.seed, "eval"),
            train: self.train.clone(),
            threads: self.threads,
        }
    }
}

/// Per-stage seed derived from the global seed and the stage name.
pub fn stage_seed(global: u64, stage: &str) -> u64 {
    let key = stage.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3));
    derive_seed(global, &[key])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory, or as given for inputs.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub artifacts: Vec<Artifact>,
    pub info: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<serde_json::Value>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Every artifact hash keyed by path.
    pub fn hashes(&self) -> Vec<(String, String)> {
        self.stages.iter().flat_map(|s| s.artifacts.iter().map(|a| (a.path.clone(), a.sha256.clone()))).collect()
    }
}

pub struct RunOutput {
    pub manifest: Manifest,
    pub records: Vec<ResultRecord>,
    pub dir: PathBuf,
}

struct Runner {
    dir: PathBuf,
    manifest: Manifest,
}

impl Runner {
    fn save(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(self.dir.join(MANIFEST), text + "\n")?;
        Ok(())
    }

    fn artifact(&self, rel: &str) -> Result<Artifact> {
        let p = self.dir.join(rel);
        Ok(Artifact { path: rel.into(), sha256: io::sha256_file(&p)?, bytes: fs::metadata(&p)?.len() })
    }

    fn stage<T>(&mut self, name: &str, seed: Option<u64>, f: impl FnOnce(&Self, &mut StageRecord) -> Result<T>) -> Result<T> {
        log::info!("stage {name}");
        let mut rec = StageRecord { name: name.into(), status: Status::Ok, seed, artifacts: Vec::new(), info: json!({}) };
        let out = f(self, &mut rec);
        if let Err(e) = &out {
            rec.status = Status::Failed;
            self.manifest.status = RunStatus::Failed;
            self.manifest.error = Some(json!({ "stage": name, "code": e.code(), "message": e.to_string() }));
        }
        self.manifest.stages.push(rec);
        self.save()?;
        out.map_err(|e| Error::Stage { stage: name.into(), source: Box::new(e) })
    }
}

/// Read and concatenate continuous NAIR recordings.
pub fn load_recordings(paths: &[PathBuf]) -> Result<Recording> {
    let parts = paths.iter().map(|p| io::read_nair(p)?.into_recording()).collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        return Ok(parts.into_iter().next().expect("one part"));
    }
    Recording::merge(&parts)
}

/// Common average reference, then the broadband filter when requested.
pub fn preprocess(rec: &Recording, broadband: bool) -> Result<Recording> {
    let car = common_average_reference(rec)?;
    if !broadband {
        return Ok(car);
    }
    filtfilt_zero_phase(&car, &design_fir(&BandName::Broadband.spec(), car.fs())?)
}

/// ICA on referenced data: one component fewer than channels unless set.
pub fn fit_referenced_ica(rec: &Recording, opts: &IcaOptions) -> Result<IcaModel> {
    let opts = IcaOptions { n_components: Some(opts.n_components.unwrap_or(rec.n_channels().saturating_sub(1).max(1))), ..*opts };
    fit_ica(rec, &opts)
}

/// Band filter, epoch and normalize a continuous feature signal.
pub fn band_epochs(rec: &Recording, band: BandName, window: (f64, f64), scope: ZScope) -> Result<EpochSet> {
    let filtered = filtfilt_zero_phase(rec, &design_fir(&band.spec(), rec.fs())?)?;
    let ep = epoch(&filtered, window)?;
    Ok(znormalize(&ep.epochs, scope))
}

fn harmonic_kind(feature: Feature, shift: ShiftConstants) -> HarmonicKind {
    match feature {
        Feature::Shd => HarmonicKind::Spherical,
        _ => HarmonicKind::Head(shift),
    }
}

/// Continuous harmonic coefficients of a recording.
pub fn harmonic_features(rec: &Recording, feature: Feature, order: usize, shift: ShiftConstants) -> Result<Recording> {
    if rec.montage().is_abstract() {
        return Err(Error::invalid("harmonic features need electrode positions"));
    }
    let basis = build_basis(harmonic_kind(feature, shift), order, rec.montage())?;
    decompose_recording(rec, &basis, &SamplingWeights::identity(rec.n_channels()))
}

/// Run the configured pipeline, writing artifacts and `manifest.json` under `cfg.output`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunOutput> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output)?;
    let mut r = Runner {
        dir: cfg.output.clone(),
        manifest: Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.seed,
            config: cfg.clone(),
            stages: Vec::new(),
            status: RunStatus::Running,
            error: None,
        },
    };
    r.save()?;

    let raw = r.stage("load", None, |_, st| {
        for p in &cfg.inputs {
            st.artifacts.push(Artifact {
                path: p.display().to_string(),
                sha256: io::sha256_file(p)?,
                bytes: fs::metadata(p)?.len(),
            });
        }
        let rec = load_recordings(&cfg.inputs)?;
        st.info = json!({
            "channels": rec.n_channels(),
            "fs": rec.fs(),
            "samples": rec.n_samples(),
            "events": rec.annotations().len(),
        });
        Ok(rec)
    })?;

    let clean_input = r.stage("preprocess", None, |run, st| {
        let rec = preprocess(&raw, cfg.broadband)?;
        io::write_nair(&run.dir.join("preprocessed.nair"), &Dataset::Continuous(rec.clone()))?;
        st.artifacts.push(run.artifact("preprocessed.nair")?);
        st.info = json!({ "reference": "average", "broadband": cfg.broadband });
        Ok(rec)
    })?;
    drop(raw);

    let needs_ica = cfg.feature == Feature::Ica || cfg.clean;
    let ica_seed = stage_seed(cfg.seed, "ica");
    let ica_out = if needs_ica {
        Some(r.stage("ica", Some(ica_seed), |run, st| {
            let model = fit_referenced_ica(&clean_input, &IcaOptions { seed: ica_seed, ..cfg.ica })?;
            let flags = flag_artifacts_heuristic(&model, &clean_input, &cfg.thresholds, cfg.exclude.as_deref())?;
            let mut stored = model.clone();
            stored.artifact_flags = flags.clone();
            io::write_ica_model(&run.dir.join("ica.bin"), &stored)?;
            st.artifacts.push(run.artifact("ica.bin")?);
            let flagged: Vec<usize> = flags.iter().enumerate().filter(|(_, f)| **f).map(|(i, _)| i).collect();
            st.info = json!({
                "components": model.n_components(),
                "iterations": model.iterations,
                "flagged": flagged,
            });
            Ok((model, flags))
        })?)
    } else {
        None
    };

    let feature_rec = r.stage("features", None, |_, st| {
        let cleaned = || -> Result<Recording> {
            match (&ica_out, cfg.clean) {
                (Some((model, flags)), true) if flags.iter().any(|&f| f) => remove_artifacts(model, &clean_input, flags),
                _ => Ok(clean_input.clone()),
            }
        };
        let rec = match cfg.feature {
            Feature::Eeg => cleaned()?,
            Feature::Ica => {
                let (model, _) = ica_out.as_ref().expect("ICA fitted for the ica feature");
                ica::components(model, &clean_input)?
            }
            Feature::Shd | Feature::Hhd => {
                harmonic_features(&cleaned()?, cfg.feature, cfg.order.expect("validated"), cfg.head_shift)?
            }
            Feature::Scout => {
                let lf = io::read_leadfield(cfg.leadfield.as_ref().expect("validated"))?;
                let atlas = io::read_atlas(cfg.atlas.as_ref().expect("validated"))?;
                let lambda = cfg.sloreta_lambda.unwrap_or_else(|| default_lambda(&lf, cfg.sloreta_snr));
                let op = ScoutOperator::new(&sloreta_kernel(&lf, lambda)?, &atlas)?;
                st.info["lambda"] = json!(lambda);
                op.apply(&cleaned()?)?
            }
        };
        st.info["feature"] = json!(cfg.feature);
        st.info["channels"] = json!(rec.n_channels());
        Ok(rec)
    })?;
    drop(clean_input);

    let mut sets = Vec::new();
    for &band in &cfg.bands {
        let set = r.stage(&format!("band:{band}"), None, |run, st| {
            let epochs = band_epochs(&feature_rec, band, cfg.window, cfg.zscope)?;
            if cfg.persist_epochs {
                let name = format!("epochs_{band}.nair");
                io::write_nair(&run.dir.join(&name), &Dataset::Epochs { epochs: epochs.clone(), montage: None })?;
                st.artifacts.push(run.artifact(&name)?);
            }
            st.info = json!({
                "trials": epochs.n_trials(),
                "channels": epochs.n_channels(),
                "samples": epochs.n_samples(),
            });
            Ok(FeatureSet { subject: cfg.subject.clone(), feature: cfg.feature, band, order: cfg.order, epochs })
        })?;
        sets.push(set);
    }
    drop(feature_rec);

    let ecfg = cfg.eval_config();
    let records = r.stage("evaluate", Some(ecfg.seed), |_, st| {
        let records = match &cfg.components {
            None => run_sweep(&sets, &cfg.models, &ecfg)?,
            Some(ks) => {
                let mut all = Vec::new();
                for set in &sets {
                    all.extend(component_sweep(set, ks, &cfg.models, &ecfg)?);
                }
                all
            }
        };
        let failed = records.iter().filter(|r| r.status == Status::Failed).count();
        st.info = json!({ "records": records.len(), "failed": failed });
        Ok(records)
    })?;

    r.stage("report", None, |run, st| {
        for p in eval::emit_report(&records, &run.dir)? {
            let rel = p.file_name().expect("file").to_string_lossy().into_owned();
            st.artifacts.push(run.artifact(&rel)?);
        }
        let means: Vec<_> = eval::grand_means(&records)
            .into_iter()
            .map(|((f, b, m, o), acc)| json!({ "feature": f, "band": b, "model": m, "order": o, "accuracy": acc }))
            .collect();
        st.info = json!({ "means": means });
        Ok(())
    })?;

    r.manifest.status = RunStatus::Complete;
    r.save()?;
    Ok(RunOutput { manifest: r.manifest, records, dir: r.dir })
}

/// One-line summary of a NAIR file header.
pub fn inspect(path: &Path) -> Result<String> {
    let h = io::read_nair_header(path)?;
    let mut s = format!(
        "format=NAIR v{} layout={} channels={} fs={} trials={} samples={}",
        h.version,
        match h.layout {
            io::Layout::Epochs => "epochs",
            io::Layout::Continuous => "continuous",
        },
        h.n_channels,
        h.fs,
        h.n_trials,
        h.n_samples
    );
    if !h.events.is_empty() {
        s += &format!(" events={}", h.events.len());
    }
    if let Some((a, b)) = h.window {
        s += &format!(" window={a},{b}");
    }
    s += &format!(" montage={}", if h.montage_theta.is_empty() { "none" } else { "electrodes" });
    Ok(s)
}

/// NAIR file to CSV directory or back, picked by the input kind.
pub fn convert(input: &Path, output: &Path) -> Result<()> {
    if input.is_dir() {
        io::write_nair(output, &io::read_csv_dir(input)?)
    } else {
        io::write_csv_dir(output, &io::read_nair(input)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_feature_requires_order() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("x.nair");
        fs::write(&input, b"").unwrap();
        let cfg = PipelineConfig { inputs: vec![input], feature: Feature::Shd, ..Default::default() };
        match cfg.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "order"),
            other => panic!("{other:?}"),
        }
        let ok = PipelineConfig { order: Some(3), ..cfg.clone() };
        ok.validate().unwrap();
        let scout = PipelineConfig { feature: Feature::Scout, ..cfg.clone() };
        assert!(matches!(scout.validate(), Err(Error::Config { path, .. }) if path == "leadfield"));
        let missing = PipelineConfig { inputs: vec![dir.path().join("nope.nair")], ..ok };
        assert!(matches!(missing.validate(), Err(Error::Config { path, .. }) if path == "inputs[0]"));
    }

    #[test]
    fn json_errors_name_location() {
        let err = PipelineConfig::from_json("{\"inputz\": []}").unwrap_err();
        assert_eq!(err.code(), "E_CONFIG");
        assert!(err.to_string().contains("inputz"));
    }

    #[test]
    fn stage_seeds_differ() {
        assert_ne!(stage_seed(1, "ica"), stage_seed(1, "eval"));
        assert_eq!(stage_seed(1, "ica"), stage_seed(1, "ica"));
        assert_ne!(stage_seed(1, "ica"), stage_seed(2, "ica"));
    }

    #[test]
    fn failed_stage_leaves_partial_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("bad.nair");
        fs::write(&input, b"not a dataset\n").unwrap();
        let cfg = PipelineConfig { inputs: vec![input], output: dir.path().join("out"), ..Default::default() };
        match run_pipeline(&cfg) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "load"),
            other => panic!("{:?}", other.err()),
        }
        let m = Manifest::load(&dir.path().join("out").join(MANIFEST)).unwrap();
        assert_eq!(m.status, RunStatus::Failed);
        assert_eq!(m.stages.len(), 1);
        assert_eq!(m.error.unwrap()["stage"], "load");
    }
}
