//! Paired one-tailed t-tests between fold accuracies and a p-value matrix
//! over the models of a result table.

use anyhow::Result;
use neuroair::eval::{paired_t_one_tailed, pvalue_matrix, render_pvalues, Axis, Feature, ResultRecord, Status};
use neuroair::filters::BandName;
use neuroair::nets::NetName;

fn main() -> Result<()> {
    let a = [0.91, 0.88, 0.93, 0.90, 0.87, 0.92, 0.89, 0.94, 0.90, 0.91];
    let b = [0.85, 0.86, 0.88, 0.84, 0.86, 0.87, 0.83, 0.90, 0.85, 0.86];
    let t = paired_t_one_tailed(&a, &b)?;
    println!("a > b: t = {:.3}, df = {}, p = {:.2e}", t.t, t.df, t.p);

    // three subjects, one accuracy per model and band
    let mut records = Vec::new();
    for (s, base) in [0.90, 0.85, 0.80].into_iter().enumerate() {
        for (band, shift) in [(BandName::DeltaTheta, 0.0), (BandName::Delta, -0.03), (BandName::Theta, -0.08)] {
            for (model, gap) in [(NetName::Eegnet, 0.0), (NetName::DeepConvNet, -0.04), (NetName::ShallowConvNet, -0.02)] {
                records.push(ResultRecord {
                    subject: format!("S{:02}", s + 1),
                    feature: Feature::Ica,
                    band,
                    model,
                    order: None,
                    fold: 0,
                    accuracy: base + shift + gap + 0.005 * s as f64,
                    n_test: 26,
                    status: Status::Ok,
                });
            }
        }
    }
    print!("{}", render_pvalues(&pvalue_matrix(&records, Axis::Model)));
    Ok(())
}
