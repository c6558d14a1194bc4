use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use neuroair::eval::{self, Axis, Feature};
use neuroair::filters::BandName;
use neuroair::harmonics::{build_basis, decompose_recording, HarmonicKind, SamplingWeights, ShiftConstants};
use neuroair::ica::{self, ArtifactThresholds, IcaOptions};
use neuroair::io::{self, Dataset};
use neuroair::nets::{self, build, NetName, Samples, TrainConfig};
use neuroair::pipeline::{self, PipelineConfig};
use neuroair::signal::{epoch, znormalize, ZScope};
use neuroair::source::{default_lambda, sloreta_kernel, ScoutOperator};
use neuroair::synth::{self, SynthConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// EEG airwriting decoding toolkit.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    /// Worker thread cap for fold-level parallelism.
    #[arg(long, env = "NEUROAIR_THREADS", global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with ground truth.
    Synth {
        /// JSON generator configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start from the reduced desk preset (100 Hz, 1.5 s trials).
        #[arg(long)]
        desk: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Reject the dataset unless the oracle accuracy reaches this value.
        #[arg(long)]
        certify: Option<f64>,
    },
    /// Convert a NAIR file to a CSV directory, or a CSV directory to NAIR.
    Convert { input: PathBuf, output: PathBuf },
    /// Print a dataset header summary.
    Inspect { input: PathBuf },
    /// Common average reference and broadband filter; optionally band filter and epoch.
    Preprocess {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_broadband: bool,
        #[arg(long)]
        band: Option<BandName>,
        /// Epoch window in seconds, e.g. `-1,2`; writes z-normalized epochs.
        #[arg(long, value_parser = parse_window, allow_hyphen_values = true)]
        window: Option<(f64, f64)>,
    },
    /// Fit, apply or clean with ICA.
    Ica {
        #[command(subcommand)]
        cmd: IcaCmd,
    },
    /// Continuous feature extraction.
    Feat {
        #[command(subcommand)]
        cmd: FeatCmd,
    },
    /// Train one network on one cross-validation fold.
    Train(TrainArgs),
    /// Cross-validated sweeps and their statistics.
    Eval {
        #[command(subcommand)]
        cmd: EvalCmd,
    },
    /// Render tables and p-value matrices from a results CSV.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired one-tailed t-test of mean(a - b) > 0.
    Ttest {
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        a: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        b: Vec<f64>,
    },
}

#[derive(Subcommand)]
enum IcaCmd {
    /// Fit an ICA model (one component fewer than channels by default).
    Fit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        components: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        max_iter: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, default_value_t = 1)]
        decim: usize,
    },
    /// Write component activations.
    Apply {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Remove artifact components; flags come from the heuristic unless given.
    Clean {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        exclude: Option<Vec<usize>>,
    },
}

#[derive(Subcommand)]
enum FeatCmd {
    /// Spherical harmonic coefficients.
    Shd(HarmonicArgs),
    /// Head harmonic coefficients.
    Hhd(HarmonicArgs),
    /// sLORETA scout time series.
    Scout {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        leadfield: PathBuf,
        #[arg(long)]
        atlas: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 3.0)]
        snr: f64,
    },
}

#[derive(Args)]
struct HarmonicArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    order: usize,
    /// Use 4/3 and 1/3 instead of 1.33 and 0.33 for head harmonics.
    #[arg(long)]
    exact: bool,
}

#[derive(Args, Clone)]
struct TrainOpts {
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 500)]
    max_epochs: usize,
    #[arg(long, default_value_t = 20)]
    patience: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
}

impl TrainOpts {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            learning_rate: self.lr,
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Epoch set, or a continuous recording to band filter and epoch.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "eegnet")]
    model: NetName,
    #[arg(long)]
    band: Option<BandName>,
    #[arg(long, value_parser = parse_window, allow_hyphen_values = true, default_value = "-1,2")]
    window: (f64, f64),
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    train: TrainOpts,
    /// Checkpoint path; the epoch log goes next to it as `.log.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Full pipeline per feature with a merged report.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "ica")]
        features: Vec<Feature>,
    },
    /// p-value matrix along one axis of a results CSV.
    Ttest {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, default_value = "model")]
        axis: Axis,
    },
    /// Accuracy against the number of retained ICA components.
    Components {
        #[command(flatten)]
        run: RunArgs,
        /// Counts as `a..b` (inclusive) or a comma list.
        #[arg(long, default_value = "1..30")]
        k: String,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Base pipeline configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "input")]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    subject: Option<String>,
    #[arg(long, value_delimiter = ',')]
    bands: Vec<BandName>,
    #[arg(long, value_delimiter = ',')]
    models: Vec<NetName>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    leadfield: Option<PathBuf>,
    #[arg(long)]
    atlas: Option<PathBuf>,
    #[arg(long, value_parser = parse_window, allow_hyphen_values = true)]
    window: Option<(f64, f64)>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self, threads: Option<usize>) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("reading {}", p.display()))?,
            None => PipelineConfig::default(),
        };
        if !self.inputs.is_empty() {
            cfg.inputs = self.inputs.clone();
        }
        if let Some(s) = &self.subject {
            cfg.subject = s.clone();
        }
        if !self.bands.is_empty() {
            cfg.bands = self.bands.clone();
        }
        if !self.models.is_empty() {
            cfg.models = self.models.clone();
        }
        cfg.folds = self.folds.unwrap_or(cfg.folds);
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        cfg.order = self.order.or(cfg.order);
        cfg.leadfield = self.leadfield.clone().or(cfg.leadfield);
        cfg.atlas = self.atlas.clone().or(cfg.atlas);
        cfg.window = self.window.unwrap_or(cfg.window);
        cfg.train.max_epochs = self.max_epochs.unwrap_or(cfg.train.max_epochs);
        cfg.train.patience = self.patience.unwrap_or(cfg.train.patience);
        cfg.train.learning_rate = self.lr.unwrap_or(cfg.train.learning_rate);
        cfg.threads = threads.or(cfg.threads);
        if let Some(o) = &self.out {
            cfg.output = o.clone();
        }
        Ok(cfg)
    }
}

fn parse_window(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected start,end")?;
    let a: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
    if b <= a {
        return Err("window end must follow start".into());
    }
    Ok((a, b))
}

fn parse_counts(s: &str) -> std::result::Result<Vec<usize>, String> {
    let err = |e: std::num::ParseIntError| e.to_string();
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse().map_err(err)?, b.trim().parse().map_err(err)?);
        if a == 0 || b < a {
            return Err(format!("bad range {s}"));
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|v| v.trim().parse().map_err(err)).collect()
}

fn write_recording(path: &Path, rec: neuroair::signal::Recording) -> Result<()> {
    io::write_nair(path, &Dataset::Continuous(rec))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { config, desk, seed, out, truth, certify } => {
            let cfg = match config {
                Some(p) => serde_json::from_str(&fs::read_to_string(&p)?).with_context(|| format!("reading {}", p.display()))?,
                None if desk => SynthConfig::desk(),
                None => SynthConfig::default(),
            };
            let (rec, gt) = synth::generate(&cfg, seed)?;
            if let Some(min) = certify {
                let sep = synth::separability_check(&rec, &gt, &cfg)?;
                println!("oracle accuracy {:.4} margin {:.4}", sep.accuracy, sep.margin);
                sep.certify(min)?;
            }
            write_recording(&out, rec)?;
            if let Some(t) = truth {
                fs::write(t, serde_json::to_string_pretty(&gt.to_json())?)?;
            }
            println!("{}", pipeline::inspect(&out)?);
        }
        Cmd::Convert { input, output } => pipeline::convert(&input, &output)?,
        Cmd::Inspect { input } => println!("{}", pipeline::inspect(&input)?),
        Cmd::Preprocess { inputs, out, no_broadband, band, window } => {
            let mut rec = pipeline::preprocess(&pipeline::load_recordings(&inputs)?, !no_broadband)?;
            if let Some(band) = band {
                let filter = neuroair::filters::design_fir(&band.spec(), rec.fs())?;
                rec = neuroair::filters::filtfilt_zero_phase(&rec, &filter)?;
            }
            match window {
                Some(w) => {
                    let ep = epoch(&rec, w)?;
                    if ep.skipped > 0 {
                        eprintln!("skipped {} event(s)", ep.skipped);
                    }
                    let epochs = znormalize(&ep.epochs, ZScope::PerTrialChannel);
                    io::write_nair(&out, &Dataset::Epochs { epochs, montage: Some(rec.montage().clone()) })?;
                }
                None => write_recording(&out, rec)?,
            }
            println!("{}", pipeline::inspect(&out)?);
        }
        Cmd::Ica { cmd } => match cmd {
            IcaCmd::Fit { input, out, components, seed, max_iter, tol, decim } => {
                let rec = io::read_nair(&input)?.into_recording()?;
                let opts = IcaOptions { seed, max_iter, tol, n_components: components, decim };
                let model = pipeline::fit_referenced_ica(&rec, &opts)?;
                io::write_ica_model(&out, &model)?;
                println!("components={} iterations={}", model.n_components(), model.iterations);
            }
            IcaCmd::Apply { model, input, out } => {
                let model = io::read_ica_model(&model)?;
                let rec = io::read_nair(&input)?.into_recording()?;
                write_recording(&out, ica::components(&model, &rec)?)?;
            }
            IcaCmd::Clean { model, input, out, exclude } => {
                let model = io::read_ica_model(&model)?;
                let rec = io::read_nair(&input)?.into_recording()?;
                let flags = ica::flag_artifacts_heuristic(&model, &rec, &ArtifactThresholds::default(), exclude.as_deref())?;
                let removed: Vec<usize> = flags.iter().enumerate().filter(|(_, f)| **f).map(|(i, _)| i).collect();
                println!("removed components {removed:?}");
                let cleaned = if removed.is_empty() { rec } else { ica::remove_artifacts(&model, &rec, &flags)? };
                write_recording(&out, cleaned)?;
            }
        },
        Cmd::Feat { cmd } => match cmd {
            FeatCmd::Shd(a) => harmonic(&a, HarmonicKind::Spherical)?,
            FeatCmd::Hhd(a) => {
                let shift = if a.exact { ShiftConstants::Exact } else { ShiftConstants::Rounded };
                harmonic(&a, HarmonicKind::Head(shift))?
            }
            FeatCmd::Scout { input, out, leadfield, atlas, lambda, snr } => {
                let rec = io::read_nair(&input)?.into_recording()?;
                let lf = io::read_leadfield(&leadfield)?;
                let atlas = io::read_atlas(&atlas)?;
                let lambda = lambda.unwrap_or_else(|| default_lambda(&lf, snr));
                let op = ScoutOperator::new(&sloreta_kernel(&lf, lambda)?, &atlas)?;
                write_recording(&out, op.apply(&rec)?)?;
                println!("regions={} lambda={lambda:.4e}", atlas.n_regions());
            }
        },
        Cmd::Train(a) => train(a)?,
        Cmd::Eval { cmd } => match cmd {
            EvalCmd::Sweep { run, features } => {
                let base = run.config(cli.threads)?;
                let root = base.output.clone();
                let mut records = Vec::new();
                for f in features {
                    let cfg = PipelineConfig { feature: f, output: root.join(f.as_str()), ..base.clone() };
                    records.extend(pipeline::run_pipeline(&cfg)?.records);
                }
                eval::emit_report(&records, &root)?;
                print!("{}", eval::render_tables(&records));
            }
            EvalCmd::Ttest { results, axis } => {
                let records = eval::records_from_csv(&fs::read_to_string(&results)?)?;
                print!("{}", eval::render_pvalues(&eval::pvalue_matrix(&records, axis)));
            }
            EvalCmd::Components { run, k } => {
                let k = parse_counts(&k).map_err(anyhow::Error::msg)?;
                let cfg = PipelineConfig { feature: Feature::Ica, components: Some(k), ..run.config(cli.threads)? };
                let out = pipeline::run_pipeline(&cfg)?;
                for ((_, band, model, order), acc) in eval::grand_means(&out.records) {
                    println!("{band} {model} k={} accuracy={acc:.4}", order.unwrap_or(0));
                }
            }
        },
        Cmd::Report { results, out } => {
            let records = eval::records_from_csv(&fs::read_to_string(&results)?)?;
            for p in eval::emit_report(&records, &out)? {
                println!("{}", p.display());
            }
        }
        Cmd::Ttest { a, b } => {
            let r = eval::paired_t_one_tailed(&a, &b)?;
            println!("t={:.6} df={} p={:.6}{}", r.t, r.df, r.p, if r.degenerate { " (zero variance)" } else { "" });
        }
    }
    Ok(())
}

fn harmonic(a: &HarmonicArgs, kind: HarmonicKind) -> Result<()> {
    let rec = io::read_nair(&a.input)?.into_recording()?;
    if rec.montage().is_abstract() {
        bail!("{} carries no electrode positions", a.input.display());
    }
    let basis = build_basis(kind, a.order, rec.montage())?;
    let out = decompose_recording(&rec, &basis, &SamplingWeights::identity(rec.n_channels()))?;
    println!("coefficients={}", out.n_channels());
    write_recording(&a.out, out)
}

fn train(a: TrainArgs) -> Result<()> {
    let epochs = match io::read_nair(&a.input)? {
        Dataset::Epochs { epochs, .. } => epochs,
        Dataset::Continuous(rec) => match a.band {
            Some(band) => pipeline::band_epochs(&rec, band, a.window, ZScope::PerTrialChannel)?,
            None => znormalize(&epoch(&rec, a.window)?.epochs, ZScope::PerTrialChannel),
        },
    };
    let plan = eval::make_folds(epochs.labels(), a.folds, 0.2, a.seed)?;
    let fold = plan.folds.get(a.fold).with_context(|| format!("fold {} of {}", a.fold, a.folds))?;
    let all = Samples::from_epochs(&epochs);
    let spec = build(a.model, epochs.n_channels(), epochs.n_samples())?;
    let cfg = TrainConfig { seed: a.seed, ..a.train.config() };
    let trained = nets::train(&spec, &all.subset(&fold.train), &all.subset(&fold.val), &cfg)?;
    let test = nets::evaluate(&trained.network, &all.subset(&fold.test))?;
    io::write_checkpoint(&a.out, &trained.network, trained.best_epoch, &trained.log)?;
    fs::write(a.out.with_extension("log.json"), serde_json::to_string_pretty(&trained.log)?)?;
    println!(
        "model={} fold={} best_epoch={} test_accuracy={:.4} n_test={}",
        a.model,
        a.fold,
        trained.best_epoch,
        test.accuracy,
        fold.test.len()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.downcast_ref::<neuroair::Error>() {
            Some(err) => {
                eprintln!("error[{}]: {err}", err.code());
                let mut src = std::error::Error::source(err);
                while let Some(s) = src {
                    eprintln!("  caused by: {s}");
                    src = s.source();
                }
                ExitCode::from(err.exit_code() as u8)
            }
            None => {
                eprintln!("error[E_CLI]: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}
