//! Runs the three ablation grids: embedding strategy, normalization and
//! matching mode.

use ksi::experiment::{run_ablation, Ablation, Experiment, ExperimentConfig};

fn main() -> ksi::Result<()> {
    let exp = Experiment::new(ExperimentConfig::with_seed(1))?;
    for which in [Ablation::Embed, Ablation::Normalize, Ablation::Matchmode] {
        println!("{}:", which.name());
        for row in run_ablation(&exp, which)? {
            let d = row.summary.domains;
            println!(
                "  {:14} mean accuracy {:6.2}%  S-S {:.3} S-B {:.3} B-B {:.3} B-S {:.3}",
                row.label,
                row.summary.mean_accuracy.unwrap_or(f64::NAN),
                d.ss,
                d.sb,
                d.bb,
                d.bs
            );
        }
    }
    Ok(())
}
