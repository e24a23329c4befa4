use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use ksi::cli::{
    cmd_ablate, cmd_generate, cmd_localize, cmd_match, cmd_pose, cmd_report, load_config,
    Overrides, PairSelection, CONFIG_HASH_PREFIX, EXIT_UNDEFINED_METRICS,
};
use ksi::enrich::EnrichmentMode;
use ksi::experiment::{Ablation, ExperimentConfig};

struct Table {
    hash: String,
    header: Vec<String>,
    rows: Vec<HashMap<String, String>>,
}

fn read_table(path: &Path) -> Table {
    let text = fs::read_to_string(path).unwrap();
    let (first, body) = text.split_once('\n').unwrap();
    let hash = first
        .strip_prefix(CONFIG_HASH_PREFIX)
        .expect("hash line")
        .to_string();
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    let rows = reader
        .records()
        .map(|r| {
            header
                .iter()
                .cloned()
                .zip(r.unwrap().iter().map(String::from))
                .collect()
        })
        .collect();
    Table { hash, header, rows }
}

fn config(seed: u64, dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::with_seed(seed);
    cfg.output_dir = dir.to_path_buf();
    cfg
}

fn num(row: &HashMap<String, String>, key: &str) -> f64 {
    row[key]
        .parse()
        .unwrap_or_else(|_| panic!("{key} = {:?}", row[key]))
}

#[test]
fn generate_writes_two_rows_and_a_stable_manifest() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cmd_generate(&config(4, a.path())).unwrap();
    cmd_generate(&config(4, b.path())).unwrap();
    let manifest = |d: &Path| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap()
    };
    let (ma, mb) = (manifest(a.path()), manifest(b.path()));
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    assert_eq!(ma["config"]["scene"]["n_rows"], 2);
    let frames = ma["frame_files"].as_array().unwrap();
    assert_eq!(frames.len() as u64, ma["n_frames"].as_u64().unwrap());
    assert!(a.path().join(frames[0].as_str().unwrap()).exists());
    assert!(a.path().join("scene.json").exists());
}

#[test]
fn invalid_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"seed": 1, "iou_threshold": 2.0}"#).unwrap();
    let err = load_config(Some(&path), &Overrides::default()).unwrap_err();
    assert!(err.is_validation());
    assert!(err.to_string().contains("iou_threshold"), "{err}");
}

#[test]
fn empty_pair_range_gives_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let report = cmd_match(&config(2, dir.path()), &"5..5".parse().unwrap(), false).unwrap();
    assert!(report.undefined.is_empty());
    let t = read_table(&dir.path().join("accuracy.csv"));
    assert!(t.rows.is_empty());
    assert!(t.header.contains(&"accuracy".to_string()), "{:?}", t.header);
}

#[test]
fn baseline_column_equals_an_off_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let pairs: PairSelection = "0..12".parse().unwrap();
    let cfg = config(3, a.path());
    cmd_match(&cfg, &pairs, true).unwrap();
    let off = ExperimentConfig {
        mode: EnrichmentMode::Off,
        output_dir: b.path().to_path_buf(),
        ..cfg.clone()
    };
    cmd_match(&off, &pairs, false).unwrap();
    let compare = read_table(&a.path().join("accuracy.csv"));
    let plain = read_table(&b.path().join("accuracy.csv"));
    assert!(
        compare.header.contains(&"gain".to_string()),
        "{:?}",
        compare.header
    );
    assert_eq!(compare.rows.len(), plain.rows.len());
    for (c, p) in compare.rows.iter().zip(&plain.rows) {
        assert_eq!(c["baseline_accuracy"], p["accuracy"]);
    }
    let summary = read_table(&a.path().join("match_summary.csv"));
    assert_eq!(summary.hash, cfg.hash());
}

#[test]
fn noise_free_pose_run_is_centimeter_accurate() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(5, dir.path());
    cfg.scene.aliasing_alpha = 0.0;
    cfg.scene.noise_sigma = 0.0;
    cfg.scene.pixel_noise = 0.0;
    cmd_pose(&cfg, false).unwrap();
    let t = read_table(&dir.path().join("pose_errors.csv"));
    assert!(t.header.contains(&"flagged_frames".to_string()));
    let row = &t.rows[0];
    assert!(num(row, "ape_mean_cm") < 1.0, "{row:?}");
    assert!(dir.path().join("trajectory_gt.tum").exists());
}

#[test]
fn query_at_a_map_frame_localizes_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(6, dir.path());
    cfg.localization.query_offset = 0;
    cfg.localization.condition.visibility_fraction = 1.0;
    cfg.localization.condition.noise_sigma = 0.0;
    cfg.localization.condition.pixel_noise = 0.0;
    let report = cmd_localize(&cfg, false).unwrap();
    assert!(report.undefined.is_empty());
    let q = read_table(&dir.path().join("localization_queries.csv"));
    assert!(!q.rows.is_empty());
    let localized: Vec<f64> = q
        .rows
        .iter()
        .filter_map(|r| r["error_m"].parse().ok())
        .collect();
    assert!(
        localized.len() * 10 >= q.rows.len() * 9,
        "{} of {}",
        localized.len(),
        q.rows.len()
    );
    assert!(localized.iter().all(|&e| e < 1e-6), "{localized:?}");
    let summary = read_table(&dir.path().join("localization.csv"));
    assert_eq!(
        summary.header[summary.header.len() - 3..],
        ["recall_0.5m", "recall_1m", "recall_5m"]
    );
}

#[test]
fn all_failed_queries_leave_mte_undefined() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(6, dir.path());
    cfg.pnp.min_inliers = 1_000_000;
    let report = cmd_localize(&cfg, false).unwrap();
    assert_eq!(report.exit_code(), EXIT_UNDEFINED_METRICS);
    let row = &read_table(&dir.path().join("localization.csv")).rows[0];
    assert_eq!(row["failures"], row["queries"]);
    assert_eq!(num(row, "recall_5m"), 0.0);
    assert!(row["mte_cm"].parse::<f64>().is_err(), "{row:?}");
}

#[test]
fn ablations_mirror_their_table_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(7, dir.path());
    cfg.scene.n_trunks_per_row = 6;
    cfg.scene.row_length = 7.0;
    let rows = |which: Ablation| {
        cmd_ablate(&cfg, which).unwrap();
        read_table(&dir.path().join(format!("ablation_{}.csv", which.name()))).rows
    };
    let labels = |r: Vec<HashMap<String, String>>| {
        r.into_iter()
            .map(|m| m["label"].clone())
            .collect::<Vec<_>>()
    };
    assert_eq!(
        labels(rows(Ablation::Embed)),
        ["addition", "concatenation", "without"]
    );
    assert_eq!(rows(Ablation::Normalize).len(), 4);
    assert_eq!(
        labels(rows(Ablation::Matchmode)),
        ["homogeneous", "heterogeneous"]
    );
    assert!(dir.path().join("domains_matchmode.csv").exists());
}

#[test]
fn report_summarizes_partial_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(8, dir.path());
    cmd_match(&cfg, &"0..4".parse().unwrap(), false).unwrap();
    cmd_report(dir.path()).unwrap();
    let md = fs::read_to_string(dir.path().join("summary.md")).unwrap();
    assert!(
        md.contains("match_summary.csv") && md.contains(&cfg.hash()),
        "{md}"
    );
    assert!(!md.contains("pose_errors"));
}

fn ksi(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ksi"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(
        ksi(&["generate", "--out", out]).status.code(),
        Some(1),
        "missing seed"
    );
    assert_eq!(
        ksi(&["generate", "--seed", "1", "--mode", "sideways", "--out", out])
            .status
            .code(),
        Some(1)
    );
    let config = dir.path().join("c.json");
    fs::write(&config, r#"{"seed": 1, "colour": "red"}"#).unwrap();
    let bad = ksi(&[
        "generate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out,
    ]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("colour"));
    let blocked = dir.path().join("file");
    fs::write(&blocked, "").unwrap();
    assert_eq!(
        ksi(&[
            "generate",
            "--seed",
            "1",
            "--out",
            blocked.to_str().unwrap()
        ])
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        ksi(&["match", "--seed", "1", "--pairs", "0..2", "--out", out])
            .status
            .code(),
        Some(0)
    );
    let empty = tempfile::tempdir().unwrap();
    let report = ksi(&["report", "--out", empty.path().to_str().unwrap()]);
    assert_eq!(report.status.code(), Some(0));
    let md = fs::read_to_string(empty.path().join("summary.md")).unwrap();
    assert!(md.contains("no results"));
}

#[test]
fn binary_reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let out = d.path().to_str().unwrap();
        let s = ksi(&[
            "match",
            "--seed",
            "9",
            "--pairs",
            "0..6",
            "--compare-baseline",
            "--out",
            out,
        ]);
        assert!(s.status.success(), "{}", String::from_utf8_lossy(&s.stderr));
    }
    for name in ["matches.json", "accuracy.csv", "match_summary.csv"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}
