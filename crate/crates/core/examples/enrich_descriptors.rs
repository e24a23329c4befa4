//! Enriches one frame by addition and by concatenation and checks the
//! invariants: unit norm, unchanged length, untouched background.

use ksi::descriptor::norm;
use ksi::enrich::{EnrichmentMode, NormalizationConfig};
use ksi::experiment::{Experiment, ExperimentConfig};

fn main() -> ksi::Result<()> {
    let exp = Experiment::new(ExperimentConfig::with_seed(2))?;
    let frame = exp.frame(5);
    for mode in [EnrichmentMode::Add, EnrichmentMode::Concat] {
        let setup = exp.setup(mode, NormalizationConfig::default())?;
        let set = setup.enricher().enrich_frame(frame)?;
        let worst = set
            .semantic_descriptors()
            .iter()
            .map(|d| (d.norm() - 1.0).abs())
            .fold(0.0, f64::max);
        let untouched = set
            .background
            .iter()
            .all(|k| k.keypoint.descriptor == frame.keypoints[k.index].descriptor);
        let moved = set
            .semantic
            .iter()
            .map(|k| {
                let before = frame.keypoints[k.index].descriptor.as_slice();
                let after = k.keypoint.descriptor.as_slice();
                norm(
                    &before
                        .iter()
                        .zip(after)
                        .map(|(a, b)| a - b)
                        .collect::<Vec<_>>(),
                )
            })
            .sum::<f64>()
            / set.semantic.len().max(1) as f64;
        println!(
            "{:6}: {} semantic + {} background keypoints, dim {:?}, max |norm-1| {worst:.1e}, \
             mean descriptor shift {moved:.3}, background untouched {untouched}",
            mode.name(),
            set.semantic.len(),
            set.background.len(),
            set.descriptor_dim(),
        );
    }
    Ok(())
}
