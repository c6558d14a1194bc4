//! End-to-end run from a JSON configuration: preprocessing, ICA, band
//! epochs, cross-validated training and the report files.

use anyhow::Result;
use neuroair::io::{self, Dataset};
use neuroair::pipeline::{run_pipeline, PipelineConfig};
use neuroair::synth::{generate, SynthConfig};

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("neuroair-pipeline-example");
    std::fs::create_dir_all(&dir)?;
    let input = dir.join("S01.nair");
    let (rec, _) = generate(&SynthConfig { n_classes: 4, trials_per_class: 10, ..SynthConfig::desk() }, 2)?;
    io::write_nair(&input, &Dataset::Continuous(rec))?;

    let json = serde_json::json!({
        "inputs": [input],
        "subject": "S01",
        "feature": "ica",
        "bands": ["delta_theta"],
        "models": ["eegnet"],
        "window": [0.0, 1.0],
        "folds": 5,
        "ica": { "decim": 4 },
        "train": { "learning_rate": 0.005, "max_epochs": 20, "patience": 5 },
        "output": dir.join("run"),
    });
    let cfg = PipelineConfig::from_json(&json.to_string())?;
    let out = run_pipeline(&cfg)?;
    for stage in &out.manifest.stages {
        println!("stage {:<18} {:?}", stage.name, stage.status);
    }
    println!("{}", neuroair::eval::render_tables(&out.records));
    println!("artifacts in {}", out.dir.display());
    Ok(())
}
