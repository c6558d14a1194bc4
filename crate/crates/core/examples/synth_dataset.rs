//! Generate a small synthetic airwriting session, save it and check that the
//! planted class signatures are separable.

use anyhow::Result;
use neuroair::io::{self, Dataset};
use neuroair::synth::{generate, separability_check, SourceKind, SynthConfig};

fn main() -> Result<()> {
    let cfg = SynthConfig { n_classes: 6, trials_per_class: 20, ..SynthConfig::desk() };
    let (rec, truth) = generate(&cfg, 11)?;
    println!(
        "{} channels x {} samples at {} Hz, {} trials, mixing condition {:.1}",
        rec.n_channels(),
        rec.n_samples(),
        rec.fs(),
        rec.annotations().len(),
        truth.condition_number
    );
    println!("blink sources {:?}, muscle sources {:?}", truth.indices_of(SourceKind::Blink), truth.indices_of(SourceKind::Muscle));

    let sep = separability_check(&rec, &truth, &cfg)?;
    println!("oracle accuracy {:.3}, margin {:.3}", sep.accuracy, sep.margin);

    let dir = std::env::temp_dir().join("neuroair-synth-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("session.nair");
    io::write_nair(&path, &Dataset::Continuous(rec))?;
    std::fs::write(dir.join("truth.json"), serde_json::to_string_pretty(&truth.to_json())?)?;
    println!("wrote {} ({})", path.display(), io::sha256_file(&path)?);
    Ok(())
}
