//! Train EEGNet on band-filtered synthetic epochs and report test accuracy.

use anyhow::Result;
use neuroair::eval::make_folds;
use neuroair::filters::BandName;
use neuroair::nets::{build, evaluate, train, NetName, Samples, TrainConfig};
use neuroair::pipeline::{band_epochs, preprocess};
use neuroair::signal::ZScope;
use neuroair::synth::{generate, SynthConfig};

fn main() -> Result<()> {
    let cfg = SynthConfig { n_classes: 4, trials_per_class: 20, ..SynthConfig::desk() };
    let (raw, _) = generate(&cfg, 21)?;
    let rec = preprocess(&raw, true)?;
    let epochs = band_epochs(&rec, BandName::DeltaTheta, (0.0, 1.0), ZScope::default())?;
    let all = Samples::from_epochs(&epochs);

    let plan = make_folds(epochs.labels(), 5, 0.2, 1)?;
    let fold = &plan.folds[0];
    let spec = build(NetName::Eegnet, epochs.n_channels(), epochs.n_samples())?;
    let tc = TrainConfig { learning_rate: 5e-3, max_epochs: 30, patience: 8, seed: 1, ..TrainConfig::default() };
    let trained = train(&spec, &all.subset(&fold.train), &all.subset(&fold.val), &tc)?;
    for log in trained.log.iter().step_by(5) {
        println!(
            "epoch {:>3}: train loss {:.3} acc {:.3} | val loss {:.3} acc {:.3}",
            log.epoch, log.train_loss, log.train_accuracy, log.val_loss, log.val_accuracy
        );
    }
    let ev = evaluate(&trained.network, &all.subset(&fold.test))?;
    println!("best epoch {}, test accuracy {:.3} on {} trials", trained.best_epoch, ev.accuracy, fold.test.len());
    Ok(())
}
