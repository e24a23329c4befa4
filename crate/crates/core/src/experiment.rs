//! Experiment driver: configuration, the cached simulation, and the
//! matching, pose, localization and ablation runs behind the command-line
//! tool.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::enrich::{
    EnrichedKeypointSet, Enricher, EnrichmentMode, IndexedKeypoint, NormalizationConfig,
    SemanticKeypoint,
};
use crate::error::{Error, Result};
use crate::evalkit::{
    instance_correspondence, localization_metrics, matching_accuracy, trajectory_errors,
    AccuracyReport, InstanceCorrespondence, LocalizationReport, QueryResult, TrajectoryErrorReport,
    DEFAULT_IOU_THRESHOLD, DEFAULT_OUTLIER_CUTOFF_M,
};
use crate::geom::{PoseSE3, Vec2, Vec3};
use crate::io::{content_hash, derive_seed, task_id};
use crate::mask::DepthMap;
use crate::maskenc::{
    ae_train, ae_train_vectors, rasterize_mask, Activation, AutoencoderEncoder, AutoencoderParams,
    MomentEncoder, SemanticEncoder, TrainingConfig,
};
use crate::matchcore::{
    domains_of, match_domain_stats, match_pair, DomainStats, MatchMode, MatchSet, MatcherConfig,
};
use crate::posekit::{
    chain_trajectory, decompose_essential, pnp_dlt_ransac, ransac_essential, scale_translation,
    Decomposition, PnpConfig, PnpOutcome, RansacConfig, RansacOutcome, RelativeEstimate,
    Trajectory,
};
use crate::scenesim::{
    generate_scene, render_frame, render_frame_with_depth, FrameObservation, Scene, SceneConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderChoice {
    #[default]
    Moments,
    Autoencoder,
}

impl std::str::FromStr for EncoderChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moments" => Ok(EncoderChoice::Moments),
            "autoencoder" => Ok(EncoderChoice::Autoencoder),
            other => Err(Error::validation(
                "encoder",
                format!("unknown encoder {other:?}"),
            )),
        }
    }
}

/// Mask autoencoder settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderSettings {
    pub grid_size: usize,
    pub max_samples: usize,
    pub training: TrainingConfig,
}

impl Default for AutoencoderSettings {
    fn default() -> Self {
        AutoencoderSettings {
            grid_size: 16,
            max_samples: 256,
            training: TrainingConfig::default(),
        }
    }
}

/// Descriptor compressor used by concat mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressorSettings {
    pub max_samples: usize,
    pub training: TrainingConfig,
}

impl Default for CompressorSettings {
    fn default() -> Self {
        CompressorSettings {
            max_samples: 512,
            training: TrainingConfig {
                learning_rate: 50.0,
                activation: Activation::Identity,
                ..TrainingConfig::default()
            },
        }
    }
}

/// Observation condition for localization queries; the analog of a
/// revisit in a different month.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Condition {
    pub name: String,
    pub visibility_fraction: f64,
    pub noise_sigma: f64,
    pub pixel_noise: f64,
}

impl Default for Condition {
    fn default() -> Self {
        Condition {
            name: "revisit".into(),
            visibility_fraction: 0.8,
            noise_sigma: 0.02,
            pixel_noise: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizationConfig {
    /// Every `map_stride`-th frame goes into the landmark map.
    pub map_stride: usize,
    /// Queries are the frames with `index % map_stride == query_offset`.
    pub query_offset: usize,
    /// Number of nearest map frames each query is matched against.
    pub neighbors: usize,
    pub condition: Condition,
    pub outlier_cutoff_m: f64,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        LocalizationConfig {
            map_stride: 2,
            query_offset: 1,
            neighbors: 2,
            condition: Condition::default(),
            outlier_cutoff_m: DEFAULT_OUTLIER_CUTOFF_M,
        }
    }
}

fn default_gain() -> f64 {
    1.0
}

fn default_iou() -> f64 {
    DEFAULT_IOU_THRESHOLD
}

fn default_mode() -> EnrichmentMode {
    EnrichmentMode::Add
}

fn default_match_mode() -> MatchMode {
    MatchMode::Heterogeneous
}

/// Everything an experiment depends on. `seed` is required; the scene seed
/// is replaced by it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub encoder: EncoderChoice,
    #[serde(default = "default_gain")]
    pub embedding_gain: f64,
    #[serde(default)]
    pub autoencoder: AutoencoderSettings,
    #[serde(default)]
    pub compressor: CompressorSettings,
    #[serde(default = "default_mode")]
    pub mode: EnrichmentMode,
    #[serde(default)]
    pub normalization: NormalizationConfig,
    #[serde(default)]
    pub matcher: MatcherConfig,
    #[serde(default = "default_match_mode")]
    pub match_mode: MatchMode,
    #[serde(default)]
    pub ransac: RansacConfig,
    #[serde(default)]
    pub pnp: PnpConfig,
    #[serde(default = "default_iou")]
    pub iou_threshold: f64,
    #[serde(default)]
    pub localization: LocalizationConfig,
    #[serde(default)]
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        ExperimentConfig {
            scene: SceneConfig::default(),
            encoder: EncoderChoice::default(),
            embedding_gain: default_gain(),
            autoencoder: AutoencoderSettings::default(),
            compressor: CompressorSettings::default(),
            mode: default_mode(),
            normalization: NormalizationConfig::default(),
            matcher: MatcherConfig::default(),
            match_mode: default_match_mode(),
            ransac: RansacConfig::default(),
            pnp: PnpConfig::default(),
            iou_threshold: default_iou(),
            localization: LocalizationConfig::default(),
            output_dir: PathBuf::new(),
            seed,
        }
    }

    /// Scene configuration with the experiment seed applied.
    pub fn effective_scene(&self) -> SceneConfig {
        SceneConfig {
            seed: self.seed,
            ..self.scene.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.effective_scene().validate()?;
        self.matcher.validate()?;
        self.ransac.validate()?;
        if !(self.embedding_gain.is_finite() && self.embedding_gain >= 0.0) {
            return Err(Error::validation(
                "embedding_gain",
                "must be finite and >= 0",
            ));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::validation("iou_threshold", "must lie in (0, 1]"));
        }
        let loc = &self.localization;
        if loc.map_stride == 0 || loc.query_offset >= loc.map_stride {
            return Err(Error::validation(
                "localization.query_offset",
                "must be below map_stride, which must be >= 1",
            ));
        }
        if loc.neighbors == 0 {
            return Err(Error::validation("localization.neighbors", "must be >= 1"));
        }
        if self.mode == EnrichmentMode::Concat && self.scene.descriptor_dim % 2 != 0 {
            return Err(Error::validation(
                "scene.descriptor_dim",
                "must be even for concat mode",
            ));
        }
        Ok(())
    }

    /// Hash of the configuration with the output directory blanked, so runs
    /// written to different places compare equal.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        content_hash(&c)
    }
}

/// Encoder plus, for concat mode, compressor, owned together so an
/// [`Enricher`] can borrow them.
pub struct EnrichmentSetup {
    pub mode: EnrichmentMode,
    pub normalization: NormalizationConfig,
    pub encoder: Option<Box<dyn SemanticEncoder>>,
    pub compressor: Option<AutoencoderParams>,
}

impl EnrichmentSetup {
    pub fn off() -> Self {
        EnrichmentSetup {
            mode: EnrichmentMode::Off,
            normalization: NormalizationConfig::default(),
            encoder: None,
            compressor: None,
        }
    }

    pub fn enricher(&self) -> Enricher<'_> {
        match self.mode {
            EnrichmentMode::Off => Enricher::off(),
            EnrichmentMode::Add => Enricher::add(
                self.encoder.as_deref().expect("built with encoder"),
                self.normalization,
            ),
            EnrichmentMode::Concat => Enricher::concat(
                self.encoder.as_deref().expect("built with encoder"),
                self.compressor.as_ref().expect("built with compressor"),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub frame_a: usize,
    pub frame_b: usize,
    pub matches: MatchSet,
    pub accuracy: AccuracyReport,
    pub domains: DomainStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSummary {
    pub pairs: usize,
    /// Mean of the defined per-pair accuracies, percent.
    pub mean_accuracy: Option<f64>,
    pub pooled: AccuracyReport,
    /// Mean domain fractions over pairs with matches.
    pub domains: DomainStats,
}

pub fn summarize(outcomes: &[PairOutcome]) -> MatchSummary {
    let accs: Vec<f64> = outcomes
        .iter()
        .filter_map(|o| o.accuracy.accuracy())
        .collect();
    let pooled = outcomes
        .iter()
        .fold(AccuracyReport::default(), |acc, o| acc.merge(&o.accuracy));
    let with_matches: Vec<&DomainStats> = outcomes
        .iter()
        .map(|o| &o.domains)
        .filter(|d| !d.empty)
        .collect();
    let n = with_matches.len() as f64;
    let domains = if with_matches.is_empty() {
        DomainStats {
            empty: true,
            ..DomainStats::default()
        }
    } else {
        DomainStats {
            ss: with_matches.iter().map(|d| d.ss).sum::<f64>() / n,
            sb: with_matches.iter().map(|d| d.sb).sum::<f64>() / n,
            bb: with_matches.iter().map(|d| d.bb).sum::<f64>() / n,
            bs: with_matches.iter().map(|d| d.bs).sum::<f64>() / n,
            total: with_matches.iter().map(|d| d.total).sum(),
            empty: false,
        }
    };
    MatchSummary {
        pairs: outcomes.len(),
        mean_accuracy: (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64),
        pooled,
        domains,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseOutcome {
    pub estimated: Trajectory,
    pub ground_truth: Trajectory,
    pub report: TrajectoryErrorReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_frame: usize,
    pub map_frames: Vec<usize>,
    pub matches: usize,
    pub inliers: usize,
    pub result: QueryResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationOutcome {
    pub condition: String,
    pub queries: Vec<QueryRecord>,
    pub report: LocalizationReport,
}

/// A generated scene with every frame rendered once.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub scene: Scene,
    frames: Vec<FrameObservation>,
    depths: Vec<DepthMap>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let scene_cfg = config.effective_scene();
        let scene = generate_scene(&scene_cfg)?;
        let rendered: Vec<(FrameObservation, DepthMap)> = (0..scene.n_frames())
            .into_par_iter()
            .map(|i| render_frame_with_depth(&scene, i, &scene_cfg))
            .collect::<Result<_>>()?;
        let (frames, depths) = rendered.into_iter().unzip();
        Ok(Experiment {
            config,
            scene,
            frames,
            depths,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frames(&self) -> &[FrameObservation] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &FrameObservation {
        &self.frames[i]
    }

    pub fn depth(&self, i: usize) -> &DepthMap {
        &self.depths[i]
    }

    fn child_seed(&self, label: &str) -> u64 {
        derive_seed(self.config.seed, task_id(label))
    }

    /// Consecutive pairs `(i, i + 1)` for `i` in `range`, clipped to the
    /// trajectory.
    pub fn consecutive_pairs(&self, range: std::ops::Range<usize>) -> Vec<(usize, usize)> {
        let last = self.n_frames().saturating_sub(1);
        (range.start.min(last)..range.end.min(last))
            .map(|i| (i, i + 1))
            .collect()
    }

    /// Whether the camera of frame `i` is driving alongside the rows.
    pub fn in_rows(&self, i: usize) -> bool {
        let x = self.frames[i].pose_gt.camera_center().x;
        (0.0..=self.scene.config.row_length).contains(&x)
    }

    /// Consecutive pairs with both frames inside the rows; the default
    /// matching evaluation set.
    pub fn row_pairs(&self) -> Vec<(usize, usize)> {
        self.all_pairs()
            .into_iter()
            .filter(|&(a, b)| self.in_rows(a) && self.in_rows(b))
            .collect()
    }

    pub fn all_pairs(&self) -> Vec<(usize, usize)> {
        self.consecutive_pairs(0..self.n_frames())
    }

    pub fn gt_trajectory(&self) -> Trajectory {
        Trajectory::new(
            (0..self.n_frames()).collect(),
            self.frames.iter().map(|f| f.pose_gt).collect(),
        )
        .expect("frame indices are increasing")
    }

    pub fn build_encoder(&self, mode: EnrichmentMode) -> Result<Box<dyn SemanticEncoder>> {
        let dim = mode.embedding_dim(self.scene.config.descriptor_dim);
        let gain = self.config.embedding_gain;
        match self.config.encoder {
            EncoderChoice::Moments => Ok(Box::new(MomentEncoder::new(
                dim,
                self.child_seed("moment-projection"),
                gain,
            )?)),
            EncoderChoice::Autoencoder => {
                let s = &self.config.autoencoder;
                let masks: Vec<_> = self.frames.iter().flat_map(|f| f.masks.iter()).collect();
                let stride = masks.len().div_ceil(s.max_samples.max(1)).max(1);
                let grids = masks
                    .iter()
                    .step_by(stride)
                    .map(|m| rasterize_mask(&m.bitmap, s.grid_size))
                    .collect::<Result<Vec<_>>>()?;
                let training = TrainingConfig {
                    seed: self.child_seed("mask-autoencoder"),
                    ..s.training.clone()
                };
                let params = ae_train(&grids, dim, &training)?;
                Ok(Box::new(AutoencoderEncoder {
                    params,
                    grid_size: s.grid_size,
                    gain,
                }))
            }
        }
    }

    /// Linear autoencoder taking descriptors to half their length, trained
    /// on descriptors observed along the trajectory.
    pub fn train_compressor(&self) -> Result<AutoencoderParams> {
        let s = &self.config.compressor;
        let descriptors: Vec<&[f64]> = self
            .frames
            .iter()
            .flat_map(|f| f.keypoints.iter().map(|k| k.descriptor.as_slice()))
            .collect();
        let stride = descriptors.len().div_ceil(s.max_samples.max(1)).max(1);
        let samples: Vec<Vec<f64>> = descriptors
            .iter()
            .step_by(stride)
            .map(|d| d.to_vec())
            .collect();
        let training = TrainingConfig {
            seed: self.child_seed("descriptor-compressor"),
            ..s.training.clone()
        };
        ae_train_vectors(&samples, self.scene.config.descriptor_dim / 2, &training)
    }

    pub fn setup(
        &self,
        mode: EnrichmentMode,
        normalization: NormalizationConfig,
    ) -> Result<EnrichmentSetup> {
        if mode == EnrichmentMode::Off {
            return Ok(EnrichmentSetup::off());
        }
        let compressor = match mode {
            EnrichmentMode::Concat => Some(self.train_compressor()?),
            _ => None,
        };
        Ok(EnrichmentSetup {
            mode,
            normalization,
            encoder: Some(self.build_encoder(mode)?),
            compressor,
        })
    }

    /// Setup for the configured mode and normalization.
    pub fn configured_setup(&self) -> Result<EnrichmentSetup> {
        self.setup(self.config.mode, self.config.normalization)
    }

    pub fn enrich_frames(
        &self,
        setup: &EnrichmentSetup,
        frames: &[FrameObservation],
    ) -> Result<Vec<EnrichedKeypointSet>> {
        let enricher = setup.enricher();
        frames
            .par_iter()
            .map(|f| enricher.enrich_frame(f))
            .collect()
    }

    pub fn enrich_all(&self, setup: &EnrichmentSetup) -> Result<Vec<EnrichedKeypointSet>> {
        self.enrich_frames(setup, &self.frames)
    }

    pub fn correspondences(&self, pairs: &[(usize, usize)]) -> Result<Vec<InstanceCorrespondence>> {
        let intr = self.scene.intrinsics;
        pairs
            .par_iter()
            .map(|&(a, b)| {
                let rel = PoseSE3::relative(&self.frames[a].pose_gt, &self.frames[b].pose_gt);
                instance_correspondence(
                    &self.frames[a],
                    &self.depths[a],
                    &self.frames[b],
                    &rel,
                    &intr,
                    self.config.iou_threshold,
                )
            })
            .collect()
    }

    /// Matches and scores each pair; `corrs` must line up with `pairs`.
    pub fn evaluate_matching(
        &self,
        enriched: &[EnrichedKeypointSet],
        match_mode: MatchMode,
        pairs: &[(usize, usize)],
        corrs: &[InstanceCorrespondence],
    ) -> Result<Vec<PairOutcome>> {
        Error::check_dim(pairs.len(), corrs.len())?;
        pairs
            .par_iter()
            .zip(corrs)
            .map(|(&(a, b), corr)| {
                let (ea, eb) = (&enriched[a], &enriched[b]);
                let matches = match_pair(ea, eb, match_mode, &self.config.matcher)?;
                let accuracy = matching_accuracy(
                    &matches,
                    corr,
                    &self.frames[a].gt_instance_of_keypoint,
                    &self.frames[b].gt_instance_of_keypoint,
                )?;
                let domains = match_domain_stats(&matches, &domains_of(ea), &domains_of(eb))?;
                Ok(PairOutcome {
                    frame_a: a,
                    frame_b: b,
                    matches,
                    accuracy,
                    domains,
                })
            })
            .collect()
    }

    /// Convenience: enrich, match and score with one setup.
    pub fn run_matching(
        &self,
        setup: &EnrichmentSetup,
        match_mode: MatchMode,
        pairs: &[(usize, usize)],
    ) -> Result<Vec<PairOutcome>> {
        let enriched = self.enrich_all(setup)?;
        let corrs = self.correspondences(pairs)?;
        self.evaluate_matching(&enriched, match_mode, pairs, &corrs)
    }

    /// Relative pose for one pair of frames from their matches, with the
    /// translation scaled from ground truth.
    pub fn relative_pose(
        &self,
        a: usize,
        b: usize,
        matches: &MatchSet,
        seed: u64,
    ) -> Result<RelativeEstimate> {
        if matches.len() < 8 {
            return Ok(RelativeEstimate::Skip);
        }
        let intr = &self.scene.intrinsics;
        let (fa, fb) = (&self.frames[a], &self.frames[b]);
        let x1: Vec<Vec2> = matches
            .pairs
            .iter()
            .map(|p| intr.normalize(&fa.keypoints[p.a].position))
            .collect();
        let x2: Vec<Vec2> = matches
            .pairs
            .iter()
            .map(|p| intr.normalize(&fb.keypoints[p.b].position))
            .collect();
        let cfg = RansacConfig {
            seed,
            ..self.config.ransac
        };
        let RansacOutcome::Found {
            essential, inliers, ..
        } = ransac_essential(&x1, &x2, &cfg)?
        else {
            return Ok(RelativeEstimate::Skip);
        };
        let in1: Vec<Vec2> = inliers.iter().map(|&i| x1[i]).collect();
        let in2: Vec<Vec2> = inliers.iter().map(|&i| x2[i]).collect();
        let Decomposition::Found {
            rotation,
            translation,
            ..
        } = decompose_essential(&essential, &in1, &in2)?
        else {
            return Ok(RelativeEstimate::Skip);
        };
        let gt_rel = PoseSE3::relative(&fa.pose_gt, &fb.pose_gt);
        Ok(RelativeEstimate::Pose(PoseSE3::new(
            rotation,
            scale_translation(&translation, &gt_rel)?,
        )))
    }

    /// Visual odometry over the whole trajectory.
    pub fn run_pose(&self, setup: &EnrichmentSetup, match_mode: MatchMode) -> Result<PoseOutcome> {
        let enriched = self.enrich_all(setup)?;
        let pairs = self.all_pairs();
        let base = self.child_seed("ransac");
        let relatives: Vec<RelativeEstimate> = pairs
            .par_iter()
            .map(|&(a, b)| {
                let matches =
                    match_pair(&enriched[a], &enriched[b], match_mode, &self.config.matcher)?;
                self.relative_pose(a, b, &matches, derive_seed(base, a as u64))
            })
            .collect::<Result<_>>()?;
        let gt = self.gt_trajectory();
        let estimated = chain_trajectory(&relatives, gt.poses[0], 0);
        let report = trajectory_errors(&estimated, &gt)?;
        Ok(PoseOutcome {
            estimated,
            ground_truth: gt,
            report,
        })
    }

    pub fn map_frames(&self) -> Vec<usize> {
        (0..self.n_frames())
            .step_by(self.config.localization.map_stride)
            .collect()
    }

    pub fn query_frames(&self) -> Vec<usize> {
        let l = &self.config.localization;
        (0..self.n_frames())
            .filter(|i| i % l.map_stride == l.query_offset)
            .collect()
    }

    /// Nearest map frames to `query` by index, ties to the lower index.
    pub fn neighbors_of(&self, query: usize, map: &[usize]) -> Vec<usize> {
        let mut m = map.to_vec();
        m.sort_by_key(|&i| (i.abs_diff(query), i));
        m.truncate(self.config.localization.neighbors);
        m.sort_unstable();
        m
    }

    /// Query observations under the configured revisit condition.
    pub fn render_queries(&self, queries: &[usize]) -> Result<Vec<FrameObservation>> {
        let c = &self.config.localization.condition;
        let cfg = SceneConfig {
            visibility_fraction: c.visibility_fraction,
            noise_sigma: c.noise_sigma,
            pixel_noise: c.pixel_noise,
            seed: self.child_seed(&format!("query-{}", c.name)),
            ..self.config.effective_scene()
        };
        queries
            .par_iter()
            .map(|&i| render_frame(&self.scene, i, &cfg))
            .collect()
    }

    /// Localizes each query against the landmarks of its nearest map frames.
    pub fn run_localize(
        &self,
        setup: &EnrichmentSetup,
        match_mode: MatchMode,
    ) -> Result<LocalizationOutcome> {
        let map = self.map_frames();
        let queries = self.query_frames();
        let query_obs = self.render_queries(&queries)?;
        let enriched_map = self.enrich_all(setup)?;
        let enriched_queries = self.enrich_frames(setup, &query_obs)?;
        let intr = self.scene.intrinsics;
        let base = self.child_seed("pnp");
        let records: Vec<QueryRecord> = queries
            .par_iter()
            .zip(&enriched_queries)
            .map(|(&q, eq)| {
                let near = self.neighbors_of(q, &map);
                let (landmarks, points) = self.landmark_set(&near, &enriched_map);
                let matches = match_pair(eq, &landmarks, match_mode, &self.config.matcher)?;
                let frame = &query_obs[eq_index(&queries, q)];
                let record = |result, inliers| QueryRecord {
                    query_frame: q,
                    map_frames: near.clone(),
                    matches: matches.len(),
                    inliers,
                    result,
                };
                if matches.len() < 6 {
                    return Ok(record(QueryResult::Failed, 0));
                }
                let px: Vec<Vec2> = matches
                    .pairs
                    .iter()
                    .map(|p| frame.keypoints[p.a].position)
                    .collect();
                let world: Vec<Vec3> = matches.pairs.iter().map(|p| points[p.b]).collect();
                let cfg = PnpConfig {
                    seed: derive_seed(base, q as u64),
                    ..self.config.pnp
                };
                Ok(match pnp_dlt_ransac(&px, &world, &intr, &cfg)? {
                    PnpOutcome::Found { pose, inliers } => {
                        let err =
                            (pose.camera_center() - self.frames[q].pose_gt.camera_center()).norm();
                        record(QueryResult::Localized(err), inliers.len())
                    }
                    PnpOutcome::Failed { best_inliers } => {
                        record(QueryResult::Failed, best_inliers)
                    }
                })
            })
            .collect::<Result<_>>()?;
        let results: Vec<QueryResult> = records.iter().map(|r| r.result).collect();
        let report = localization_metrics(&results, self.config.localization.outlier_cutoff_m)?;
        Ok(LocalizationOutcome {
            condition: self.config.localization.condition.name.clone(),
            queries: records,
            report,
        })
    }

    /// Map keypoints of `frames` merged into one set with fresh indices,
    /// and the world point behind each index.
    fn landmark_set(
        &self,
        frames: &[usize],
        enriched: &[EnrichedKeypointSet],
    ) -> (EnrichedKeypointSet, Vec<Vec3>) {
        let mut set = EnrichedKeypointSet {
            frame_index: frames.first().copied().unwrap_or(0),
            mode: enriched.first().map_or(EnrichmentMode::Off, |e| e.mode),
            background: Vec::new(),
            semantic: Vec::new(),
        };
        let mut points = Vec::new();
        let intr = &self.scene.intrinsics;
        for &f in frames {
            let frame = &self.frames[f];
            let cam_to_world = frame.pose_gt.inverse();
            let offset = points.len();
            for (kp, depth) in frame.keypoints.iter().zip(&frame.gt_depth_of_keypoint) {
                points.push(cam_to_world.transform(&intr.backproject(&kp.position, *depth)));
            }
            let e = &enriched[f];
            set.background
                .extend(e.background.iter().map(|k| IndexedKeypoint {
                    index: k.index + offset,
                    keypoint: k.keypoint.clone(),
                }));
            set.semantic
                .extend(e.semantic.iter().map(|k| SemanticKeypoint {
                    index: k.index + offset,
                    ..k.clone()
                }));
        }
        (set, points)
    }
}

fn eq_index(queries: &[usize], q: usize) -> usize {
    queries.iter().position(|&x| x == q).expect("query listed")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    Embed,
    Normalize,
    Matchmode,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embed" => Ok(Ablation::Embed),
            "normalize" => Ok(Ablation::Normalize),
            "matchmode" => Ok(Ablation::Matchmode),
            other => Err(Error::validation(
                "which",
                format!("unknown ablation {other:?}"),
            )),
        }
    }
}

impl Ablation {
    pub fn name(&self) -> &'static str {
        match self {
            Ablation::Embed => "embed",
            Ablation::Normalize => "normalize",
            Ablation::Matchmode => "matchmode",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub mode: EnrichmentMode,
    pub normalization: NormalizationConfig,
    pub match_mode: MatchMode,
    pub summary: MatchSummary,
}

/// Runs one ablation grid over the in-row pairs.
pub fn run_ablation(exp: &Experiment, which: Ablation) -> Result<Vec<AblationRow>> {
    let pairs = exp.row_pairs();
    let corrs = exp.correspondences(&pairs)?;
    let cfg = &exp.config;
    let grid: Vec<(String, EnrichmentMode, NormalizationConfig, MatchMode)> = match which {
        Ablation::Embed => vec![
            (
                "addition".into(),
                EnrichmentMode::Add,
                cfg.normalization,
                cfg.match_mode,
            ),
            (
                "concatenation".into(),
                EnrichmentMode::Concat,
                cfg.normalization,
                cfg.match_mode,
            ),
            (
                "without".into(),
                EnrichmentMode::Off,
                cfg.normalization,
                cfg.match_mode,
            ),
        ],
        Ablation::Normalize => NormalizationConfig::ALL
            .iter()
            .map(|n| {
                let label = format!("sn={} kn={}", on_off(n.sn), on_off(n.kn));
                (label, EnrichmentMode::Add, *n, cfg.match_mode)
            })
            .collect(),
        Ablation::Matchmode => [MatchMode::Homogeneous, MatchMode::Heterogeneous]
            .iter()
            .map(|m| (m.name().to_string(), cfg.mode, cfg.normalization, *m))
            .collect(),
    };
    let mut rows = Vec::new();
    for (label, mode, normalization, match_mode) in grid {
        let setup = exp.setup(mode, normalization)?;
        let enriched = exp.enrich_all(&setup)?;
        let outcomes = exp.evaluate_matching(&enriched, match_mode, &pairs, &corrs)?;
        rows.push(AblationRow {
            label,
            mode,
            normalization,
            match_mode,
            summary: summarize(&outcomes),
        });
    }
    Ok(rows)
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}
