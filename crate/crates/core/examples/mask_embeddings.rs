//! Turns instance masks into semantic embeddings with both encoders.

use ksi::descriptor::norm;
use ksi::experiment::{Experiment, ExperimentConfig};
use ksi::maskenc::{
    ae_encode, ae_train, moment_features, rasterize_mask, MomentEncoder, SemanticEncoder,
    TrainingConfig,
};

fn main() -> ksi::Result<()> {
    let exp = Experiment::new(ExperimentConfig::with_seed(1))?;
    let frame = exp.frame(10);
    let encoder = MomentEncoder::new(256, 7, 1.0)?;
    for mask in frame.masks.iter().take(4) {
        let grid = rasterize_mask(&mask.bitmap, 16)?;
        let f = moment_features(&grid);
        let e = encoder.encode(mask)?;
        println!(
            "{} {:3}: area {:.4}, centroid ({:.2}, {:.2}), aspect {:.2}, embedding norm {:.3}",
            mask.class.name(),
            mask.instance_id,
            f[0],
            f[1],
            f[2],
            f[3],
            norm(&e)
        );
    }

    let grids = exp
        .frames()
        .iter()
        .flat_map(|f| f.masks.iter())
        .step_by(5)
        .take(64)
        .map(|m| rasterize_mask(&m.bitmap, 16))
        .collect::<ksi::Result<Vec<_>>>()?;
    let params = ae_train(&grids, 32, &TrainingConfig::default())?;
    let trace = &params.loss_trace;
    println!(
        "autoencoder on {} grids: loss {:.4} -> {:.4} over {} epochs, embedding length {}",
        grids.len(),
        trace[0],
        trace[trace.len() - 1],
        trace.len() - 1,
        ae_encode(&params, &grids[0])?.len()
    );
    Ok(())
}
