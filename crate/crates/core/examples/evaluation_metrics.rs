//! The evaluation tools on their own: IoU instance correspondence between
//! frames, localization summary statistics and trajectory error.

use ksi::evalkit::{
    identity_agreement, instance_correspondence, localization_metrics, trajectory_errors,
    QueryResult,
};
use ksi::experiment::{Experiment, ExperimentConfig};
use ksi::geom::{PoseSE3, Vec3};
use ksi::posekit::Trajectory;

fn main() -> ksi::Result<()> {
    let exp = Experiment::new(ExperimentConfig::with_seed(5))?;
    let (a, b) = (20, 22);
    let rel = PoseSE3::relative(&exp.frame(a).pose_gt, &exp.frame(b).pose_gt);
    let corr = instance_correspondence(
        exp.frame(a),
        exp.depth(a),
        exp.frame(b),
        &rel,
        &exp.scene.intrinsics,
        0.1,
    )?;
    for p in &corr.pairs {
        println!("instance {:3} -> {:3}  IoU {:.3}", p.a, p.b, p.iou);
    }
    println!("identity agreement {:?}", identity_agreement(&corr));

    let results = [
        QueryResult::Localized(0.2),
        QueryResult::Localized(0.7),
        QueryResult::Localized(3.0),
        QueryResult::Failed,
        QueryResult::Localized(2000.0),
    ];
    println!("{:?}", localization_metrics(&results, 1000.0)?);

    let gt = exp.gt_trajectory();
    let shifted: Vec<PoseSE3> = gt
        .poses
        .iter()
        .map(|p| PoseSE3::from_translation(Vec3::new(0.05, 0.0, 0.0)).compose(p))
        .collect();
    let est = Trajectory::new(gt.frame_indices.clone(), shifted)?;
    println!("{:?}", trajectory_errors(&est, &gt)?);
    Ok(())
}
