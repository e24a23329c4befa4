//! Builds a landmark map from every other frame and localizes revisit
//! queries against it by PnP.

use ksi::experiment::{EnrichmentSetup, Experiment, ExperimentConfig};
use ksi::matchcore::MatchMode;

fn main() -> ksi::Result<()> {
    let exp = Experiment::new(ExperimentConfig::with_seed(4))?;
    println!(
        "{} map frames, {} queries under condition {:?}",
        exp.map_frames().len(),
        exp.query_frames().len(),
        exp.config.localization.condition
    );
    for (name, setup) in [
        ("ksi", exp.configured_setup()?),
        ("baseline", EnrichmentSetup::off()),
    ] {
        let run = exp.run_localize(&setup, MatchMode::Heterogeneous)?;
        let r = run.report;
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.1}%"));
        println!(
            "{name:8}: MTE {} cm, recall@0.5m {}, @1m {}, @5m {}, {} failures, {} outliers",
            r.mte_cm
                .map_or("undefined".to_string(), |v| format!("{v:.2}")),
            pct(r.recall[0]),
            pct(r.recall[1]),
            pct(r.recall[2]),
            r.failures,
            r.outliers
        );
    }
    Ok(())
}
