//! Matches in-row frame pairs with each solver, with and without
//! enrichment, and scores semantic matching accuracy.

use ksi::enrich::EnrichmentMode;
use ksi::experiment::{summarize, Experiment, ExperimentConfig};
use ksi::matchcore::{MatchMode, Solver};

fn main() -> ksi::Result<()> {
    let mut exp = Experiment::new(ExperimentConfig::with_seed(1))?;
    let pairs: Vec<_> = exp.row_pairs().into_iter().step_by(4).collect();
    for solver in [Solver::MutualNn, Solver::Exact, Solver::Sinkhorn] {
        exp.config.matcher.solver = solver;
        for mode in [EnrichmentMode::Off, EnrichmentMode::Add] {
            let setup = exp.setup(mode, exp.config.normalization)?;
            let outcomes = exp.run_matching(&setup, MatchMode::Heterogeneous, &pairs)?;
            let s = summarize(&outcomes);
            println!(
                "{:9} {:3}: {} pairs, mean accuracy {:.2}%, {} correct / {} incorrect / {} unmatched",
                solver.name(),
                mode.name(),
                s.pairs,
                s.mean_accuracy.unwrap_or(f64::NAN),
                s.pooled.correct,
                s.pooled.incorrect,
                s.pooled.unmatched
            );
        }
    }
    Ok(())
}
