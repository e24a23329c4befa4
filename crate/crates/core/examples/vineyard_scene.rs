//! Generates the default desk-scale vineyard and prints what a camera sees.
//!
//! `cargo run --example vineyard_scene -- [seed]`

use ksi::scenesim::{generate_scene, render_frame, SceneConfig, SemanticClass};

fn main() -> ksi::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    let config = SceneConfig {
        seed,
        ..SceneConfig::default()
    };
    let scene = generate_scene(&config)?;
    let count = |class| scene.instances.iter().filter(|i| i.class == class).count();
    println!(
        "{} rows, {} trunks, {} buildings, {} background anchors, loop {:.1} m in {} frames",
        config.n_rows,
        count(SemanticClass::Trunk),
        count(SemanticClass::Building),
        scene.background_anchors.len(),
        config.loop_length(),
        scene.n_frames()
    );
    for i in (0..scene.n_frames()).step_by(scene.n_frames() / 6) {
        let frame = render_frame(&scene, i, &config)?;
        let semantic = frame
            .gt_instance_of_keypoint
            .iter()
            .filter(|k| k.is_some())
            .count();
        let c = frame.pose_gt.camera_center();
        println!(
            "frame {i:4}: camera ({:6.2}, {:6.2}), {:3} keypoints ({semantic} on instances), {} masks",
            c.x,
            c.y,
            frame.keypoints.len(),
            frame.masks.len()
        );
    }
    Ok(())
}
