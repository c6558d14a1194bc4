//! Project epochs onto spherical and head harmonics of increasing order.

use anyhow::Result;
use neuroair::harmonics::{build_basis, decompose, max_order, HarmonicKind, SamplingWeights, ShiftConstants};
use neuroair::signal::{epoch, Montage};
use neuroair::synth::{generate, SynthConfig};

fn main() -> Result<()> {
    let cfg = SynthConfig { n_classes: 3, trials_per_class: 4, ..SynthConfig::desk() };
    let (rec, _) = generate(&cfg, 5)?;
    let epochs = epoch(&rec, (0.0, 1.0))?.epochs;
    let montage = Montage::standard_31();
    let gamma = SamplingWeights::identity(montage.len());
    println!("highest order a 31-channel montage supports: {}", max_order(montage.len()));
    for kind in [HarmonicKind::Spherical, HarmonicKind::Head(ShiftConstants::default())] {
        for order in 1..=4 {
            let basis = build_basis(kind, order, &montage)?;
            let coef = decompose(&epochs, &basis, &gamma)?;
            println!(
                "{kind:?} order {order}: {} coefficients, epochs {}x{}x{}",
                basis.n_coefficients(),
                coef.n_trials(),
                coef.n_channels(),
                coef.n_samples()
            );
        }
    }
    Ok(())
}
