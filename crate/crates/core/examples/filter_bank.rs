//! Design the named band filters and run one over a two-tone signal.

use std::f64::consts::PI;

use anyhow::Result;
use ndarray::Array2;
use neuroair::filters::{band_registry, design_fir, filtfilt_zero_phase, BandName};
use neuroair::signal::{Montage, Recording};

fn main() -> Result<()> {
    let fs = 500.0;
    for spec in band_registry() {
        let f = design_fir(&spec, fs)?;
        let (lo, hi) = spec.passband(fs);
        println!(
            "{:<12} order {:>4}  passband {lo:>5.1}-{hi:<5.1} Hz  |H(10 Hz)| {:.4}",
            spec.name,
            f.taps().len() - 1,
            f.amplitude(10.0).abs()
        );
    }

    // 2 Hz + 20 Hz, keep the 2 Hz part with the delta filter
    let n = 5000;
    let x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            (2.0 * PI * 2.0 * t).sin() + (2.0 * PI * 20.0 * t).sin()
        })
        .collect();
    let rec = Recording::new(Array2::from_shape_vec((1, n), x)?, fs, Montage::for_channels(1)?, Vec::new())?;
    let out = filtfilt_zero_phase(&rec, &design_fir(&BandName::Delta.spec(), fs)?)?;
    let err = (1000..4000)
        .map(|i| (out.data()[[0, i]] - (2.0 * PI * 2.0 * i as f64 / fs).sin()).abs())
        .fold(0.0, f64::max);
    println!("delta output vs pure 2 Hz component: max error {err:.2e}");
    Ok(())
}
