//! Acceptance suite: every criterion at its stated tolerance, one pass/fail
//! line each. Runs without the libtest harness so the lines always print;
//! a positional argument selects criteria by number (`cargo test --test
//! acceptance -- 7`).

use std::collections::BTreeSet;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ksi::cli::{cmd_generate, cmd_match, cmd_pose, PairSelection};
use ksi::descriptor::norm;
use ksi::enrich::{enrich_add, Enricher, EnrichmentMode, NormalizationConfig};
use ksi::evalkit::{
    ape, identity_agreement, instance_correspondence, localization_metrics, QueryResult,
};
use ksi::experiment::{
    run_ablation, Ablation, AblationRow, EnrichmentSetup, Experiment, ExperimentConfig,
};
use ksi::geom::{PoseSE3, RotationMatrix, Vec2, Vec3};
use ksi::maskenc::{
    ae_gradient_check, ae_train, ae_train_vectors, rasterize_mask, MomentEncoder, TrainingConfig,
};
use ksi::matchcore::{
    brute_force_best, exact_scores, match_descriptors, match_exact, match_pair, sinkhorn_scores,
    MatchMode, MatcherConfig, ScoreMatrix, SinkhornConfig, Solver,
};
use ksi::posekit::{
    decompose_essential, ransac_essential, Decomposition, RansacConfig, RansacOutcome, Trajectory,
};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeds for the directional criteria.
const SEEDS: std::ops::RangeInclusive<u64> = 1..=10;

/// Mean in-row accuracies over the ten seeds, frozen from the first run of
/// this suite; observed values must stay within the stated tolerance.
const FROZEN_KSI_ACCURACY: f64 = 93.37;
const FROZEN_BASELINE_ACCURACY: f64 = 59.60;
const FROZEN_TOLERANCE: f64 = 5.0;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = norm(&v);
    v.iter().map(|x| x / n).collect()
}

fn c1_enrichment_contract() -> Verdict {
    let exp = experiment(1);
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_norm = 0.0f64;
    let mut dim_ok = true;
    for i in 0..10_000 {
        let dim = rng.random_range(2..=256);
        let d: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let scale = rng.random_range(0.0..5.0);
        let e: Vec<f64> = (0..dim)
            .map(|_| scale * rng.random_range(-1.0..1.0))
            .collect();
        let cfg = NormalizationConfig::ALL[i % 4];
        match enrich_add(&d, &e, cfg) {
            Ok(out) => {
                dim_ok &= out.len() == dim;
                worst_norm = worst_norm.max((norm(&out) - 1.0).abs());
            }
            Err(_) => dim_ok = false,
        }
    }
    // Background keypoints pass through enrichment untouched.
    let encoder = MomentEncoder::new(exp.scene.config.descriptor_dim, 3, 1.0).expect("encoder");
    let mut background_identical = true;
    let mut background_seen = 0;
    for cfg in NormalizationConfig::ALL {
        let enricher = Enricher::add(&encoder, cfg);
        for frame in exp.frames().iter().step_by(7) {
            let set = enricher.enrich_frame(frame).expect("enrich");
            for k in &set.background {
                background_seen += 1;
                let original = &frame.keypoints[k.index].descriptor.0;
                background_identical &= k
                    .keypoint
                    .descriptor
                    .0
                    .iter()
                    .zip(original)
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst_norm <= 1e-9 && dim_ok && background_identical && background_seen > 0 && within(elapsed, 5.0),
        format!(
            "max |norm-1| = {worst_norm:.1e}, dims preserved = {dim_ok}, {background_seen} background descriptors bit-identical = {background_identical}, {:.2} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn pair_set(pairs: impl IntoIterator<Item = (usize, usize)>) -> BTreeSet<(usize, usize)> {
    pairs.into_iter().collect()
}

fn c2_assignment_optimality() -> Verdict {
    let start = Instant::now();
    let cfg = MatcherConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (n, m) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let a: Vec<Vec<f64>> = (0..n).map(|_| random_unit(&mut rng, 4)).collect();
        let b: Vec<Vec<f64>> = (0..m).map(|_| random_unit(&mut rng, 4)).collect();
        let exact = match_exact(&a, &b, &cfg).expect("exact");
        let s = ScoreMatrix::from_descriptors(&a, &b).expect("scores");
        let (_, best) = brute_force_best(&s, cfg.min_score);
        if pair_set(exact.index_pairs()) != pair_set(best) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        mismatches == 0 && within(elapsed, 30.0),
        format!(
            "{mismatches}/1000 instances differ from enumeration, {:.2} s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Score matrix with a planted partial permutation scoring in [0.5, 1] and
/// every other entry in [-1, 0.15]: any swap away from the plan loses at
/// least 0.2, so no instance is a near-tie.
fn planted_instance(rng: &mut ChaCha8Rng) -> ScoreMatrix {
    let (n, m) = (rng.random_range(4..=8), rng.random_range(4..=8));
    let k = rng.random_range(n.min(m) - 2..=n.min(m));
    let mut rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..m).map(|_| rng.random_range(-1.0..0.15)).collect())
        .collect();
    let mut cols: Vec<usize> = (0..m).collect();
    for i in (1..m).rev() {
        cols.swap(i, rng.random_range(0..=i));
    }
    let mut row_ids: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        row_ids.swap(i, rng.random_range(0..=i));
    }
    for t in 0..k {
        rows[row_ids[t]][cols[t]] = rng.random_range(0.5..1.0);
    }
    ScoreMatrix::from_rows(&rows).expect("rows")
}

fn c3_sinkhorn_convergence() -> Verdict {
    let start = Instant::now();
    let cfg = MatcherConfig {
        solver: Solver::Sinkhorn,
        sinkhorn: SinkhornConfig {
            epsilon: 1e-3,
            iterations: 200,
            ..SinkhornConfig::default()
        },
        ..MatcherConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut agree = 0;
    for _ in 0..200 {
        let s = planted_instance(&mut rng);
        let sink = sinkhorn_scores(&s, &cfg).expect("sinkhorn");
        let exact = exact_scores(&s, &cfg).expect("exact");
        if pair_set(sink.index_pairs()) == pair_set(exact.index_pairs()) {
            agree += 1;
        }
    }
    let elapsed = start.elapsed();
    let rate = agree as f64 / 200.0;
    verdict(
        rate >= 0.95 && within(elapsed, 30.0),
        format!(
            "{agree}/200 instances agree ({:.1}%), {:.2} s",
            100.0 * rate,
            elapsed.as_secs_f64()
        ),
    )
}

fn c4_injectivity() -> Verdict {
    let solvers = [Solver::MutualNn, Solver::Exact, Solver::Sinkhorn];
    let match_modes = [MatchMode::Heterogeneous, MatchMode::Homogeneous];
    let mut checked = 0usize;
    let mut violations = 0usize;
    for seed in 1..=3 {
        let exp = experiment(seed);
        for mode in [
            EnrichmentMode::Off,
            EnrichmentMode::Add,
            EnrichmentMode::Concat,
        ] {
            let setup = exp.setup(mode, exp.config.normalization).expect("setup");
            let enriched = exp.enrich_all(&setup).expect("enrich");
            for solver in solvers {
                let cfg = MatcherConfig {
                    solver,
                    ..exp.config.matcher
                };
                for mm in match_modes {
                    for (a, b) in exp.all_pairs() {
                        let m = match_pair(&enriched[a], &enriched[b], mm, &cfg).expect("match");
                        checked += 1;
                        violations += usize::from(!m.is_injective());
                    }
                }
            }
        }
    }
    // Random score matrices with heavy ties for every solver.
    let mut runner = TestRunner::new(PropConfig {
        cases: 512,
        ..PropConfig::default()
    });
    let strategy = (0usize..=9, 0usize..=9, any::<u64>());
    let property = runner.run(&strategy, |(n, m, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = [-0.5, 0.0, 0.3, 0.5, 1.0];
        let a: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![levels[rng.random_range(0..5)], 1.0])
            .collect();
        let b: Vec<Vec<f64>> = (0..m)
            .map(|_| vec![levels[rng.random_range(0..5)], 1.0])
            .collect();
        for solver in solvers {
            let cfg = MatcherConfig {
                solver,
                ..MatcherConfig::default()
            };
            let matches = match_descriptors(&a, &b, &cfg).expect("match");
            prop_assert!(matches.is_injective());
        }
        Ok(())
    });
    verdict(
        violations == 0 && property.is_ok(),
        format!(
            "{checked} frame-pair match sets over 3 seeds x 3 modes x 3 solvers x 2 matching modes, {violations} repeat an index; tie-heavy property: {}",
            if property.is_ok() { "holds" } else { "violated" }
        ),
    )
}

struct GeometryCase {
    x1: Vec<Vec2>,
    x2: Vec<Vec2>,
    rotation: RotationMatrix,
    direction: Vec3,
}

fn geometry_case(seed: u64, outlier_fraction: f64) -> GeometryCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    )
    .normalize();
    let rotation = RotationMatrix::about_axis(&axis, rng.random_range(0.02..0.3));
    let direction = Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-0.3..0.3),
        rng.random_range(-1.0..1.0),
    )
    .normalize();
    let pose = PoseSE3::new(rotation, direction * rng.random_range(0.3..1.0));
    let (mut x1, mut x2) = (Vec::new(), Vec::new());
    while x1.len() < 100 {
        let p = Vec3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(4.0..10.0),
        );
        let q = pose.transform(&p);
        if q.z < 1.0 {
            continue;
        }
        x1.push(Vec2::new(p.x / p.z, p.y / p.z));
        x2.push(Vec2::new(q.x / q.z, q.y / q.z));
    }
    let n_out = (outlier_fraction * 100.0).round() as usize;
    for x in x2.iter_mut().take(n_out) {
        *x = Vec2::new(rng.random_range(-0.8..0.8), rng.random_range(-0.6..0.6));
    }
    GeometryCase {
        x1,
        x2,
        rotation,
        direction,
    }
}

/// Worst rotation and translation-direction errors, radians, over 100 cases.
fn recover(outlier_fraction: f64, inlier_threshold: f64) -> (f64, f64, usize) {
    let (mut rot, mut dir, mut failures) = (0.0f64, 0.0f64, 0);
    for seed in 0..100u64 {
        let c = geometry_case(1000 + seed, outlier_fraction);
        let cfg = RansacConfig {
            seed,
            inlier_threshold,
            ..RansacConfig::default()
        };
        let RansacOutcome::Found {
            essential, inliers, ..
        } = ransac_essential(&c.x1, &c.x2, &cfg).expect("ransac")
        else {
            failures += 1;
            continue;
        };
        let in1: Vec<Vec2> = inliers.iter().map(|&i| c.x1[i]).collect();
        let in2: Vec<Vec2> = inliers.iter().map(|&i| c.x2[i]).collect();
        let Decomposition::Found {
            rotation,
            translation,
            ..
        } = decompose_essential(&essential, &in1, &in2).expect("decompose")
        else {
            failures += 1;
            continue;
        };
        rot = rot.max(rotation.angle_to(&c.rotation));
        dir = dir.max(
            translation
                .normalize()
                .dot(&c.direction)
                .clamp(-1.0, 1.0)
                .acos(),
        );
    }
    (rot, dir, failures)
}

fn c5_geometric_recovery() -> Verdict {
    // Noise-free correspondences: the inlier threshold sits at the noise level.
    const NOISE_FREE_THRESHOLD: f64 = 1e-6;
    let start = Instant::now();
    let (r0, t0, f0) = recover(0.0, NOISE_FREE_THRESHOLD);
    let (r1, t1, f1) = recover(0.3, NOISE_FREE_THRESHOLD);
    let elapsed = start.elapsed();
    let default_threshold = RansacConfig::default().inlier_threshold;
    let (rd, td, fd) = recover(0.3, default_threshold);
    let deg = f64::to_degrees;
    verdict(
        f0 == 0 && f1 == 0 && r0 <= 1e-6 && t0 <= 1e-6 && deg(r1) <= 0.1 && deg(t1) <= 0.5 && within(elapsed, 60.0),
        format!(
            "threshold {NOISE_FREE_THRESHOLD:.0e}: noise-free rot {r0:.1e} rad, dir {t0:.1e} rad, {f0} failures; \
             30% outliers rot {:.2e} deg, dir {:.2e} deg, {f1} failures; {:.2} s \
             (info, threshold {default_threshold:.0e}: 30% outliers rot {:.2e} deg, dir {:.2e} deg, {fd} failures)",
            deg(r1),
            deg(t1),
            elapsed.as_secs_f64(),
            deg(rd),
            deg(td),
        ),
    )
}

fn c6_iou_consistency() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut agree, mut total) = (0usize, 0usize);
    for seed in SEEDS {
        let exp = experiment(seed);
        let in_row: Vec<usize> = (0..exp.n_frames() - 3)
            .filter(|&i| exp.in_rows(i) && exp.in_rows(i + 3))
            .collect();
        for _ in 0..5 {
            let a = in_row[rng.random_range(0..in_row.len())];
            let b = a + rng.random_range(1..=3);
            let rel = PoseSE3::relative(&exp.frame(a).pose_gt, &exp.frame(b).pose_gt);
            let corr = instance_correspondence(
                exp.frame(a),
                exp.depth(a),
                exp.frame(b),
                &rel,
                &exp.scene.intrinsics,
                0.1,
            )
            .expect("correspondence");
            if identity_agreement(&corr).is_some() {
                agree += corr.pairs.iter().filter(|p| p.a == p.b).count();
                total += corr.pairs.len();
            }
        }
    }
    let rate = agree as f64 / total.max(1) as f64;
    verdict(
        total > 0 && rate >= 0.99,
        format!(
            "{agree}/{total} instances with IoU >= 0.1 map to their own id ({:.2}%) over 50 pairs",
            100.0 * rate
        ),
    )
}

fn c7_directional_ksi() -> Verdict {
    let start = Instant::now();
    let cfg = ExperimentConfig::with_seed(1);
    let setup_ok = cfg.mode == EnrichmentMode::Add
        && !cfg.normalization.sn
        && cfg.normalization.kn
        && cfg.match_mode == MatchMode::Heterogeneous
        && cfg.matcher.solver == Solver::Exact
        && cfg.scene.aliasing_alpha == 0.05
        && cfg.scene.noise_sigma == 0.02
        && cfg.scene.visibility_fraction == 1.0;
    let rows = embed_rows();
    let ksi = mean_of(rows, "addition");
    let base = mean_of(rows, "without");
    let gain = ksi - base;
    let elapsed = start.elapsed();
    let frozen_ok = (ksi - FROZEN_KSI_ACCURACY).abs() <= FROZEN_TOLERANCE
        && (base - FROZEN_BASELINE_ACCURACY).abs() <= FROZEN_TOLERANCE;
    verdict(
        setup_ok && gain >= 20.0 && base <= 60.0 && frozen_ok && within(elapsed, 300.0),
        format!(
            "KSI {ksi:.2}% vs baseline {base:.2}% (gain {gain:.2} pts, frozen {FROZEN_KSI_ACCURACY}/{FROZEN_BASELINE_ACCURACY} +/- {FROZEN_TOLERANCE}), {:.1} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn c8_ablation_direction() -> Verdict {
    let add = mean_of(embed_rows(), "addition");
    let concat = mean_of(embed_rows(), "concatenation");
    let norm_rows = normalize_rows();
    let labels = [
        "sn=on kn=on",
        "sn=on kn=off",
        "sn=off kn=on",
        "sn=off kn=off",
    ];
    let means: Vec<f64> = labels.iter().map(|l| mean_of(norm_rows, l)).collect();
    let best = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let default = means[2];
    verdict(
        add >= concat && best - default <= 1.0,
        format!(
            "addition {add:.2}% vs concatenation {concat:.2}%; normalization {}; sn=off kn=on is {:.2} pts below the best",
            labels
                .iter()
                .zip(&means)
                .map(|(l, m)| format!("[{l}] {m:.2}"))
                .collect::<Vec<_>>()
                .join(" "),
            best - default
        ),
    )
}

fn c9_pose_direction() -> Verdict {
    let mut improved = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let exp = experiment(seed);
        let mm = exp.config.match_mode;
        let base = exp
            .run_pose(&EnrichmentSetup::off(), mm)
            .expect("pose")
            .report;
        let ksi = exp
            .run_pose(&exp.configured_setup().expect("setup"), mm)
            .expect("pose")
            .report;
        improved += usize::from(ksi.ape_mean <= base.ape_mean);
        lines.push(format!("{:.2}/{:.2}", ksi.ape_mean, base.ape_mean));
    }
    verdict(
        improved >= 9,
        format!(
            "KSI APE <= baseline on {improved}/10 seeds (KSI/baseline cm: {})",
            lines.join(" ")
        ),
    )
}

fn c10_metric_arithmetic() -> Verdict {
    let rel = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(f64::MIN_POSITIVE);
    let q: Vec<QueryResult> = [0.2, 0.4, 2.0]
        .into_iter()
        .map(QueryResult::Localized)
        .collect();
    let r = localization_metrics(&q, 1000.0).expect("metrics");
    let mte_ok = r.mte_cm.is_some_and(|m| rel(m, 40.0));
    let recall_ok = r.recall[0].is_some_and(|v| rel(v, 200.0 / 3.0));

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let gt_poses: Vec<PoseSE3> = (0..25)
        .map(|i| {
            let rot = RotationMatrix::about_z(rng.random_range(-3.0..3.0));
            PoseSE3::from_camera_center(
                rot,
                Vec3::new(i as f64 * 0.3, rng.random_range(-1.0..1.0), 1.0),
            )
        })
        .collect();
    let offset = Vec3::new(0.06, 0.0, -0.08);
    let est_poses: Vec<PoseSE3> = gt_poses
        .iter()
        .map(|p| {
            let c2w = p.inverse();
            PoseSE3::from_camera_center(c2w.rotation, p.camera_center() + offset)
        })
        .collect();
    let idx: Vec<usize> = (0..25).collect();
    let gt = Trajectory::new(idx.clone(), gt_poses).expect("gt");
    let est = Trajectory::new(idx, est_poses).expect("est");
    let off = ape(&est, &gt, false).expect("ape");
    let on = ape(&est, &gt, true).expect("ape");
    let offset_cm = 100.0 * offset.norm();
    let ape_ok =
        rel(off.mean, offset_cm) && off.std <= 1e-12 * offset_cm && on.mean <= 1e-12 * offset_cm;
    verdict(
        mte_ok && recall_ok && ape_ok,
        format!(
            "MTE {:?} cm, R@0.5 {:?}%, rigid-offset APE {:.15} cm (offset {offset_cm:.15}), aligned {:.1e}",
            r.mte_cm, r.recall[0], off.mean, on.mean
        ),
    )
}

fn c11_autoencoder_hygiene() -> Verdict {
    let exp = experiment(1);
    let grids: Vec<_> = exp
        .frames()
        .iter()
        .flat_map(|f| f.masks.iter())
        .step_by(11)
        .take(24)
        .map(|m| rasterize_mask(&m.bitmap, 16).expect("grid"))
        .collect();
    let training = TrainingConfig {
        epochs: 3,
        ..TrainingConfig::default()
    };
    let params = ae_train(&grids, 16, &training).expect("train");
    let samples: Vec<Vec<f64>> = grids.iter().map(|g| g.to_input()).collect();
    let grad_err = ae_gradient_check(&params, &samples, 1e-5, 11).expect("gradient check");
    let one = samples[0].clone();
    let memorized =
        ae_train_vectors(&[one.clone(), one], 13, &TrainingConfig::default()).expect("train");
    let final_loss = *memorized.loss_trace.last().expect("trace");
    verdict(
        grad_err < 1e-4 && final_loss < 1e-4,
        format!(
            "gradient check max relative error {grad_err:.2e}; single-sample loss {final_loss:.2e}"
        ),
    )
}

fn snapshot(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("read dir") {
            let p = entry.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p
                    .strip_prefix(dir)
                    .expect("prefix")
                    .to_string_lossy()
                    .into_owned();
                files.push((rel, std::fs::read(&p).expect("read")));
            }
        }
    }
    files.sort();
    files
}

fn c12_determinism() -> Verdict {
    let run = || {
        let dir = tempfile::tempdir().expect("tempdir");
        let mut cfg = ExperimentConfig::with_seed(12);
        cfg.output_dir = dir.path().to_path_buf();
        cmd_generate(&cfg).expect("generate");
        cmd_match(&cfg, &PairSelection::All, true).expect("match");
        cmd_pose(&cfg, true).expect("pose");
        (snapshot(dir.path()), dir)
    };
    let (a, _da) = run();
    let (b, _db) = run();
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let has_kinds = names.iter().any(|n| n.ends_with(".json"))
        && names.iter().any(|n| n.ends_with(".csv"))
        && names.iter().any(|n| n.ends_with(".tum"));
    verdict(
        a.len() == b.len() && differing.is_empty() && has_kinds,
        format!(
            "{} files compared, {} differ {:?}",
            a.len(),
            differing.len(),
            differing
        ),
    )
}

static EXPERIMENTS: OnceLock<Vec<Experiment>> = OnceLock::new();

fn experiments() -> &'static [Experiment] {
    EXPERIMENTS.get_or_init(|| {
        SEEDS
            .map(|s| Experiment::new(ExperimentConfig::with_seed(s)).expect("experiment"))
            .collect()
    })
}

fn experiment(seed: u64) -> &'static Experiment {
    &experiments()[(seed - SEEDS.start()) as usize]
}

static EMBED: OnceLock<Vec<Vec<AblationRow>>> = OnceLock::new();
static NORMALIZE: OnceLock<Vec<Vec<AblationRow>>> = OnceLock::new();

fn embed_rows() -> &'static [Vec<AblationRow>] {
    EMBED.get_or_init(|| {
        experiments()
            .iter()
            .map(|e| run_ablation(e, Ablation::Embed).expect("ablation"))
            .collect()
    })
}

fn normalize_rows() -> &'static [Vec<AblationRow>] {
    NORMALIZE.get_or_init(|| {
        experiments()
            .iter()
            .map(|e| run_ablation(e, Ablation::Normalize).expect("ablation"))
            .collect()
    })
}

/// Mean over seeds of the per-seed mean accuracy of the labelled row.
fn mean_of(per_seed: &[Vec<AblationRow>], label: &str) -> f64 {
    let values: Vec<f64> = per_seed
        .iter()
        .map(|rows| {
            rows.iter()
                .find(|r| r.label == label)
                .and_then(|r| r.summary.mean_accuracy)
                .expect("labelled row with defined accuracy")
        })
        .collect();
    values.iter().sum::<f64>() / values.len() as f64
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 12] = [
        ("enrichment contract", c1_enrichment_contract),
        ("assignment optimality", c2_assignment_optimality),
        ("sinkhorn convergence", c3_sinkhorn_convergence),
        ("one-to-one matches", c4_injectivity),
        ("geometric recovery", c5_geometric_recovery),
        ("IoU correspondence", c6_iou_consistency),
        ("directional KSI gain", c7_directional_ksi),
        ("ablation direction", c8_ablation_direction),
        ("pose improvement", c9_pose_direction),
        ("metric arithmetic", c10_metric_arithmetic),
        ("autoencoder hygiene", c11_autoencoder_hygiene),
        ("determinism", c12_determinism),
    ];
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let selected: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        println!(
            "criterion {n:>2} {:<4} {name}: {} [{:.1} s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
        if !v.pass {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
