//! Recovers relative pose from matched keypoints and chains visual odometry
//! around the loop; writes both trajectories in TUM format.

use ksi::evalkit::trajectory_errors;
use ksi::experiment::{EnrichmentSetup, Experiment, ExperimentConfig};
use ksi::geom::PoseSE3;
use ksi::matchcore::{match_pair, MatchMode};
use ksi::posekit::{
    decompose_essential, ransac_essential, write_tum, Decomposition, RansacConfig, RansacOutcome,
};

fn main() -> ksi::Result<()> {
    let exp = Experiment::new(ExperimentConfig::with_seed(3))?;
    let setup = exp.configured_setup()?;
    let enriched = exp.enrich_all(&setup)?;
    let (a, b) = (12, 13);
    let matches = match_pair(
        &enriched[a],
        &enriched[b],
        MatchMode::Heterogeneous,
        &exp.config.matcher,
    )?;
    let intr = &exp.scene.intrinsics;
    let x1: Vec<_> = matches
        .pairs
        .iter()
        .map(|p| intr.normalize(&exp.frame(a).keypoints[p.a].position))
        .collect();
    let x2: Vec<_> = matches
        .pairs
        .iter()
        .map(|p| intr.normalize(&exp.frame(b).keypoints[p.b].position))
        .collect();
    if let RansacOutcome::Found {
        essential, inliers, ..
    } = ransac_essential(&x1, &x2, &RansacConfig::default())?
    {
        let in1: Vec<_> = inliers.iter().map(|&i| x1[i]).collect();
        let in2: Vec<_> = inliers.iter().map(|&i| x2[i]).collect();
        if let Decomposition::Found {
            rotation,
            translation,
            ..
        } = decompose_essential(&essential, &in1, &in2)?
        {
            let gt = PoseSE3::relative(&exp.frame(a).pose_gt, &exp.frame(b).pose_gt);
            println!(
                "frames {a}->{b}: {} matches, {} inliers, rotation error {:.4} deg, direction error {:.3} deg",
                matches.len(),
                inliers.len(),
                rotation.angle_to(&gt.rotation).to_degrees(),
                translation.normalize().angle(&gt.translation.normalize()).to_degrees()
            );
        }
    }

    let out = std::env::temp_dir().join("ksi-relative-pose");
    for (name, setup) in [("ksi", setup), ("baseline", EnrichmentSetup::off())] {
        let run = exp.run_pose(&setup, MatchMode::Heterogeneous)?;
        let r = run.report;
        println!(
            "{name:8}: RPE {:.3} +/- {:.3} cm, APE {:.2} +/- {:.2} cm, {} flagged frames",
            r.rpe_mean, r.rpe_std, r.ape_mean, r.ape_std, r.flagged_frames
        );
        write_tum(&out.join(format!("trajectory_{name}.tum")), &run.estimated)?;
        assert_eq!(trajectory_errors(&run.estimated, &run.ground_truth)?, r);
    }
    write_tum(&out.join("trajectory_gt.tum"), &exp.gt_trajectory())?;
    println!("trajectories in {}", out.display());
    Ok(())
}
