//! Build an sLORETA inverse for a synthetic lead field and reduce the
//! dipole estimates to regional scout time courses.

use anyhow::Result;
use neuroair::source::{default_lambda, sloreta_kernel, synth_leadfield, Atlas, ScoutOperator};
use neuroair::synth::{generate, SynthConfig};

fn main() -> Result<()> {
    let lf = synth_leadfield(31, 600, 7)?;
    let lambda = default_lambda(&lf, 3.0);
    let kernel = sloreta_kernel(&lf, lambda)?;
    println!("kernel {} dipoles x {} channels, lambda {lambda:.3e}", kernel.n_dipoles(), kernel.n_channels());

    let atlas = Atlas::nearest_centers(lf.positions().expect("synthetic lead fields carry positions"), 24)?;
    let scouts = ScoutOperator::new(&kernel, &atlas)?;

    let cfg = SynthConfig { n_classes: 2, trials_per_class: 3, ..SynthConfig::desk() };
    let (rec, _) = generate(&cfg, 9)?;
    let out = scouts.apply(&rec)?;
    println!("{} regions x {} samples; first regions {:?}", out.n_channels(), out.n_samples(), &atlas.names()[..3]);
    Ok(())
}
