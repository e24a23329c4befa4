//! Command implementations behind the `ksi` binary.
//!
//! Each command regenerates the simulation from the configuration, so its
//! outputs depend only on the configuration and seed. JSON artifacts use the
//! 17-digit float format of [`crate::io`]; every CSV starts with a
//! `# config_hash=` comment followed by a header row.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::enrich::EnrichmentMode;
use crate::error::{Error, Result};
use crate::evalkit::RECALL_THRESHOLDS_M;
use crate::experiment::{
    run_ablation, summarize, Ablation, EnrichmentSetup, Experiment, ExperimentConfig,
    LocalizationOutcome, MatchSummary, PairOutcome, PoseOutcome,
};
use crate::io::{read_json, write_json};
use crate::matchcore::{MatchMode, MatchSet, Solver};
use crate::posekit::write_tum;
use crate::scenesim::Scene;

pub const DEFAULT_OUTPUT_DIR: &str = "ksi-out";
pub const CONFIG_HASH_PREFIX: &str = "# config_hash=";

/// Exit code for a run whose headline metric came out undefined.
pub const EXIT_UNDEFINED_METRICS: i32 = 3;

pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        1
    } else {
        2
    }
}

/// Command-line values that replace configuration fields.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<EnrichmentMode>,
    pub matcher: Option<Solver>,
    pub match_mode: Option<MatchMode>,
    pub out: Option<PathBuf>,
}

/// Reads the configuration file (if any) and applies the overrides. The
/// seed must come from one of the two.
pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut value = match path {
        Some(p) => {
            if !p.exists() {
                return Err(Error::validation(
                    "config",
                    format!("{} does not exist", p.display()),
                ));
            }
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str::<serde_json::Value>(&text)
                .map_err(|e| Error::validation("config", format!("{}: {e}", p.display())))?
        }
        None => serde_json::Value::Object(Default::default()),
    };
    let Some(obj) = value.as_object_mut() else {
        return Err(Error::validation("config", "must be a JSON object"));
    };
    if let Some(seed) = overrides.seed {
        obj.insert("seed".into(), seed.into());
    }
    if !obj.contains_key("seed") {
        return Err(Error::validation(
            "seed",
            "required (config field or --seed)",
        ));
    }
    let mut cfg: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| Error::validation("config", e.to_string()))?;
    if let Some(m) = overrides.mode {
        cfg.mode = m;
    }
    if let Some(s) = overrides.matcher {
        cfg.matcher.solver = s;
    }
    if let Some(m) = overrides.match_mode {
        cfg.match_mode = m;
    }
    if let Some(out) = &overrides.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    if cfg.output_dir.as_os_str().is_empty() {
        PathBuf::from(DEFAULT_OUTPUT_DIR)
    } else {
        cfg.output_dir.clone()
    }
}

/// Files a command wrote, and the metrics it could not define.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommandReport {
    pub files: Vec<PathBuf>,
    pub undefined: Vec<String>,
}

impl CommandReport {
    pub fn exit_code(&self) -> i32 {
        if self.undefined.is_empty() {
            0
        } else {
            EXIT_UNDEFINED_METRICS
        }
    }
}

/// Which consecutive frame pairs `match` evaluates.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum PairSelection {
    /// Pairs with both frames alongside the rows.
    #[default]
    Rows,
    All,
    /// Pairs `(i, i + 1)` for `i` in the range.
    Range(std::ops::Range<usize>),
}

impl std::str::FromStr for PairSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rows" => Ok(PairSelection::Rows),
            "all" => Ok(PairSelection::All),
            _ => {
                let bad = || {
                    Error::validation(
                        "pairs",
                        format!("expected rows, all or START..END, got {s:?}"),
                    )
                };
                let (a, b) = s.split_once("..").ok_or_else(bad)?;
                let start = a.parse().map_err(|_| bad())?;
                let end = b.parse().map_err(|_| bad())?;
                if start > end {
                    return Err(bad());
                }
                Ok(PairSelection::Range(start..end))
            }
        }
    }
}

impl PairSelection {
    pub fn resolve(&self, exp: &Experiment) -> Vec<(usize, usize)> {
        match self {
            PairSelection::Rows => exp.row_pairs(),
            PairSelection::All => exp.all_pairs(),
            PairSelection::Range(r) => exp.consecutive_pairs(r.clone()),
        }
    }
}

/// CSV text with the config-hash comment line on top.
fn csv_text(hash: &str, header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::Csv {
        path: PathBuf::from("<memory>"),
        source: e,
    };
    w.write_record(header).map_err(to_err)?;
    for r in rows {
        w.write_record(r).map_err(to_err)?;
    }
    let body = w.into_inner().map_err(|e| to_err(e.into_error().into()))?;
    let body = String::from_utf8(body).expect("csv of utf-8 fields is utf-8");
    Ok(format!("{CONFIG_HASH_PREFIX}{hash}\n{body}"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_csv(path: &Path, hash: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_text(path, &csv_text(hash, header, rows)?)
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_hash: String,
    seed: u64,
    n_frames: usize,
    scene_file: &'a str,
    frame_files: Vec<String>,
    /// Output directory blanked, as in the hash.
    config: ExperimentConfig,
}

pub fn frame_file_name(i: usize) -> String {
    format!("frames/frame_{i:05}.json")
}

/// Writes `scene.json`, `frames/*.json` and `manifest.json`.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<CommandReport> {
    let exp = Experiment::new(cfg.clone())?;
    let dir = output_dir(cfg);
    let mut files = Vec::new();
    let scene_path = dir.join("scene.json");
    write_json(&scene_path, &exp.scene)?;
    files.push(scene_path);
    let mut frame_files = Vec::new();
    for (i, f) in exp.frames().iter().enumerate() {
        let name = frame_file_name(i);
        let path = dir.join(&name);
        write_json(&path, f)?;
        frame_files.push(name);
        files.push(path);
    }
    let manifest = Manifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        n_frames: exp.n_frames(),
        scene_file: "scene.json",
        frame_files,
        config: ExperimentConfig {
            output_dir: PathBuf::new(),
            ..cfg.clone()
        },
    };
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    files.push(path);
    Ok(CommandReport {
        files,
        undefined: Vec::new(),
    })
}

/// Reads back a scene written by [`cmd_generate`].
pub fn read_scene(dir: &Path) -> Result<Scene> {
    read_json(&dir.join("scene.json"))
}

#[derive(Serialize)]
struct PairMatches<'a> {
    run: &'a str,
    frame_a: usize,
    frame_b: usize,
    matches: &'a MatchSet,
}

fn summary_row(run: &str, s: &MatchSummary) -> Vec<String> {
    vec![
        run.into(),
        s.pairs.to_string(),
        opt(s.mean_accuracy),
        opt(s.pooled.accuracy()),
        opt(s.pooled.accuracy_with_unmatched()),
        s.pooled.correct.to_string(),
        s.pooled.incorrect.to_string(),
        s.pooled.unmatched.to_string(),
    ]
}

const SUMMARY_HEADER: [&str; 8] = [
    "run",
    "pairs",
    "mean_accuracy",
    "pooled_accuracy",
    "pooled_accuracy_with_unmatched",
    "correct",
    "incorrect",
    "unmatched",
];

/// Matches the selected pairs with the configured setup and, when
/// `compare_baseline` is set, without enrichment too. Writes
/// `matches.json`, `accuracy.csv` (per pair) and `match_summary.csv`.
pub fn cmd_match(
    cfg: &ExperimentConfig,
    pairs: &PairSelection,
    compare_baseline: bool,
) -> Result<CommandReport> {
    let exp = Experiment::new(cfg.clone())?;
    let pairs = pairs.resolve(&exp);
    let corrs = exp.correspondences(&pairs)?;
    let run = |setup: &EnrichmentSetup| -> Result<Vec<PairOutcome>> {
        let enriched = exp.enrich_all(setup)?;
        exp.evaluate_matching(&enriched, cfg.match_mode, &pairs, &corrs)
    };
    let main = run(&exp.configured_setup()?)?;
    let baseline = if compare_baseline {
        Some(run(&EnrichmentSetup::off())?)
    } else {
        None
    };
    let run_name = cfg.mode.name();
    let dir = output_dir(cfg);
    let hash = cfg.hash();

    let mut records: Vec<PairMatches> = main
        .iter()
        .map(|o| PairMatches {
            run: run_name,
            frame_a: o.frame_a,
            frame_b: o.frame_b,
            matches: &o.matches,
        })
        .collect();
    if let Some(b) = &baseline {
        records.extend(b.iter().map(|o| PairMatches {
            run: "baseline",
            frame_a: o.frame_a,
            frame_b: o.frame_b,
            matches: &o.matches,
        }));
    }
    let matches_path = dir.join("matches.json");
    write_json(&matches_path, &records)?;

    let mut header = vec![
        "frame_a",
        "frame_b",
        "correct",
        "incorrect",
        "unmatched",
        "accuracy",
        "accuracy_with_unmatched",
    ];
    if baseline.is_some() {
        header.extend([
            "baseline_correct",
            "baseline_incorrect",
            "baseline_unmatched",
            "baseline_accuracy",
            "gain",
        ]);
    }
    let rows: Vec<Vec<String>> = main
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let acc = &o.accuracy;
            let mut row = vec![
                o.frame_a.to_string(),
                o.frame_b.to_string(),
                acc.correct.to_string(),
                acc.incorrect.to_string(),
                acc.unmatched.to_string(),
                opt(acc.accuracy()),
                opt(acc.accuracy_with_unmatched()),
            ];
            if let Some(b) = &baseline {
                let ba = &b[i].accuracy;
                let gain = acc.accuracy().zip(ba.accuracy()).map(|(k, b)| k - b);
                row.extend([
                    ba.correct.to_string(),
                    ba.incorrect.to_string(),
                    ba.unmatched.to_string(),
                    opt(ba.accuracy()),
                    opt(gain),
                ]);
            }
            row
        })
        .collect();
    let accuracy_path = dir.join("accuracy.csv");
    write_csv(&accuracy_path, &hash, &header, &rows)?;

    let main_summary = summarize(&main);
    let mut summary_rows = vec![summary_row(run_name, &main_summary)];
    let mut undefined = Vec::new();
    if !pairs.is_empty() && main_summary.mean_accuracy.is_none() {
        undefined.push(format!("{run_name} mean accuracy"));
    }
    let mut summary_header: Vec<&str> = SUMMARY_HEADER.to_vec();
    if let Some(b) = &baseline {
        let base_summary = summarize(b);
        if !pairs.is_empty() && base_summary.mean_accuracy.is_none() {
            undefined.push("baseline mean accuracy".into());
        }
        let gain = main_summary
            .mean_accuracy
            .zip(base_summary.mean_accuracy)
            .map(|(k, b)| k - b);
        summary_header.push("gain");
        summary_rows[0].push(opt(gain));
        let mut row = summary_row("baseline", &base_summary);
        row.push(String::new());
        summary_rows.push(row);
    }
    let summary_path = dir.join("match_summary.csv");
    write_csv(&summary_path, &hash, &summary_header, &summary_rows)?;
    Ok(CommandReport {
        files: vec![matches_path, accuracy_path, summary_path],
        undefined,
    })
}

const POSE_HEADER: [&str; 6] = [
    "run",
    "rpe_mean_cm",
    "rpe_std_cm",
    "ape_mean_cm",
    "ape_std_cm",
    "flagged_frames",
];

fn pose_row(run: &str, p: &PoseOutcome) -> Vec<String> {
    let r = &p.report;
    vec![
        run.into(),
        num(r.rpe_mean),
        num(r.rpe_std),
        num(r.ape_mean),
        num(r.ape_std),
        r.flagged_frames.to_string(),
    ]
}

/// Visual odometry over the loop. Writes TUM trajectories and
/// `pose_errors.csv`.
pub fn cmd_pose(cfg: &ExperimentConfig, compare_baseline: bool) -> Result<CommandReport> {
    let exp = Experiment::new(cfg.clone())?;
    let dir = output_dir(cfg);
    let run_name = cfg.mode.name();
    let main = exp.run_pose(&exp.configured_setup()?, cfg.match_mode)?;
    let mut files = Vec::new();
    let gt_path = dir.join("trajectory_gt.tum");
    write_tum(&gt_path, &main.ground_truth)?;
    files.push(gt_path);
    let est_path = dir.join(format!("trajectory_{run_name}.tum"));
    write_tum(&est_path, &main.estimated)?;
    files.push(est_path);
    let mut rows = vec![pose_row(run_name, &main)];
    if compare_baseline {
        let base = exp.run_pose(&EnrichmentSetup::off(), cfg.match_mode)?;
        let path = dir.join("trajectory_baseline.tum");
        write_tum(&path, &base.estimated)?;
        files.push(path);
        rows.push(pose_row("baseline", &base));
    }
    let csv_path = dir.join("pose_errors.csv");
    write_csv(&csv_path, &cfg.hash(), &POSE_HEADER, &rows)?;
    files.push(csv_path);
    Ok(CommandReport {
        files,
        undefined: Vec::new(),
    })
}

fn localization_rows(run: &str, l: &LocalizationOutcome) -> (Vec<String>, Vec<Vec<String>>) {
    let r = &l.report;
    let mut summary = vec![
        run.into(),
        l.condition.clone(),
        r.queries.to_string(),
        r.outliers.to_string(),
        r.failures.to_string(),
        opt(r.mte_cm),
    ];
    summary.extend(r.recall.iter().map(|v| opt(*v)));
    let queries = l
        .queries
        .iter()
        .map(|q| {
            let (status, err) = match q.result {
                crate::evalkit::QueryResult::Localized(e) => ("localized", num(e)),
                crate::evalkit::QueryResult::Failed => ("failed", String::new()),
            };
            let map: Vec<String> = q.map_frames.iter().map(|m| m.to_string()).collect();
            vec![
                run.into(),
                q.query_frame.to_string(),
                map.join(" "),
                q.matches.to_string(),
                q.inliers.to_string(),
                status.into(),
                err,
            ]
        })
        .collect();
    (summary, queries)
}

/// Localizes the query frames against the map frames. Writes
/// `localization.csv` and `localization_queries.csv`.
pub fn cmd_localize(cfg: &ExperimentConfig, compare_baseline: bool) -> Result<CommandReport> {
    let exp = Experiment::new(cfg.clone())?;
    let dir = output_dir(cfg);
    let run_name = cfg.mode.name();
    let mut runs = vec![(
        run_name,
        exp.run_localize(&exp.configured_setup()?, cfg.match_mode)?,
    )];
    if compare_baseline {
        runs.push((
            "baseline",
            exp.run_localize(&EnrichmentSetup::off(), cfg.match_mode)?,
        ));
    }
    let recall_names: Vec<String> = RECALL_THRESHOLDS_M
        .iter()
        .map(|t| format!("recall_{t}m"))
        .collect();
    let mut header = vec![
        "run",
        "condition",
        "queries",
        "outliers",
        "failures",
        "mte_cm",
    ];
    header.extend(recall_names.iter().map(String::as_str));
    let mut summary = Vec::new();
    let mut queries = Vec::new();
    let mut undefined = Vec::new();
    for (name, outcome) in &runs {
        if outcome.report.mte_cm.is_none() {
            undefined.push(format!("{name} MTE"));
        }
        let (s, q) = localization_rows(name, outcome);
        summary.push(s);
        queries.extend(q);
    }
    let hash = cfg.hash();
    let summary_path = dir.join("localization.csv");
    write_csv(&summary_path, &hash, &header, &summary)?;
    let queries_path = dir.join("localization_queries.csv");
    write_csv(
        &queries_path,
        &hash,
        &[
            "run",
            "query_frame",
            "map_frames",
            "matches",
            "inliers",
            "status",
            "error_m",
        ],
        &queries,
    )?;
    Ok(CommandReport {
        files: vec![summary_path, queries_path],
        undefined,
    })
}

/// Runs one ablation grid. Writes `ablation_<which>.csv`, plus
/// `domains_matchmode.csv` for the matching-mode sweep.
pub fn cmd_ablate(cfg: &ExperimentConfig, which: Ablation) -> Result<CommandReport> {
    let exp = Experiment::new(cfg.clone())?;
    let rows = run_ablation(&exp, which)?;
    let dir = output_dir(cfg);
    let hash = cfg.hash();
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                r.mode.name().into(),
                r.normalization.sn.to_string(),
                r.normalization.kn.to_string(),
                r.match_mode.name().into(),
                r.summary.pairs.to_string(),
                opt(r.summary.mean_accuracy),
                opt(r.summary.pooled.accuracy()),
            ]
        })
        .collect();
    let path = dir.join(format!("ablation_{}.csv", which.name()));
    write_csv(
        &path,
        &hash,
        &[
            "label",
            "mode",
            "sn",
            "kn",
            "match_mode",
            "pairs",
            "mean_accuracy",
            "pooled_accuracy",
        ],
        &table,
    )?;
    let mut files = vec![path];
    if which == Ablation::Matchmode {
        let domains: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                let d = &r.summary.domains;
                vec![
                    r.label.clone(),
                    num(100.0 * d.ss),
                    num(100.0 * d.sb),
                    num(100.0 * d.bb),
                    num(100.0 * d.bs),
                    d.total.to_string(),
                ]
            })
            .collect();
        let path = dir.join("domains_matchmode.csv");
        write_csv(
            &path,
            &hash,
            &[
                "label",
                "semantic_semantic",
                "semantic_background",
                "background_background",
                "background_semantic",
                "matches",
            ],
            &domains,
        )?;
        files.push(path);
    }
    let undefined = rows
        .iter()
        .filter(|r| r.summary.pairs > 0 && r.summary.mean_accuracy.is_none())
        .map(|r| format!("{} mean accuracy", r.label))
        .collect();
    Ok(CommandReport { files, undefined })
}

/// One CSV file as read back for the report.
struct Table {
    name: String,
    hash: Option<String>,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let hash = text
        .lines()
        .find_map(|l| l.strip_prefix(CONFIG_HASH_PREFIX))
        .map(str::to_string);
    let to_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = r
        .headers()
        .map_err(to_err)?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<_, _>>()
        .map_err(to_err)?;
    Ok(Table {
        name: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        hash,
        header,
        rows,
    })
}

/// Markdown summary of every CSV in `dir`, in file-name order.
pub fn report_markdown(dir: &Path) -> Result<String> {
    let mut paths: Vec<PathBuf> = match fs::read_dir(dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => {
            return Err(Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })
        }
    };
    paths.sort();
    let mut md = String::from("# KSI results\n\n");
    if paths.is_empty() {
        md.push_str("no results\n");
        return Ok(md);
    }
    if let Ok(manifest) = read_json::<serde_json::Value>(&dir.join("manifest.json")) {
        if let Some(h) = manifest.get("config_hash").and_then(|v| v.as_str()) {
            md.push_str(&format!("Generated scene config hash: `{h}`\n\n"));
        }
    }
    for p in &paths {
        let t = read_table(p)?;
        md.push_str(&format!("## {}\n\n", t.name));
        if let Some(h) = &t.hash {
            md.push_str(&format!("config hash: `{h}`\n\n"));
        }
        md.push_str(&format!("| {} |\n", t.header.join(" | ")));
        md.push_str(&format!("|{}\n", "---|".repeat(t.header.len())));
        for r in &t.rows {
            md.push_str(&format!("| {} |\n", r.join(" | ")));
        }
        if t.rows.is_empty() {
            md.push_str("\n(no rows)\n");
        }
        md.push('\n');
    }
    Ok(md)
}

/// Writes `summary.md` into `dir`.
pub fn cmd_report(dir: &Path) -> Result<CommandReport> {
    let md = report_markdown(dir)?;
    let path = dir.join("summary.md");
    write_text(&path, &md)?;
    Ok(CommandReport {
        files: vec![path],
        undefined: Vec::new(),
    })
}
