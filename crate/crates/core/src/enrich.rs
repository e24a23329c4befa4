//! Semantic enrichment of keypoint descriptors.
//!
//! Keypoints that fall on a trunk or building mask get the mask's embedding
//! folded into their descriptor; all other keypoints are passed through
//! untouched.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::descriptor::{l2_normalize, Descriptor, Keypoint};
use crate::error::{Error, Result};
use crate::maskenc::{ae_compress, AutoencoderParams, SemanticEncoder};
use crate::scenesim::{FrameObservation, InstanceId, SemanticClass};

/// Which operands are L2-normalized before they are summed. The sum itself
/// is always normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizationConfig {
    /// Normalize the semantic embedding.
    pub sn: bool,
    /// Normalize the keypoint descriptor.
    pub kn: bool,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        NormalizationConfig {
            sn: false,
            kn: true,
        }
    }
}

impl NormalizationConfig {
    pub const ALL: [NormalizationConfig; 4] = [
        NormalizationConfig { sn: true, kn: true },
        NormalizationConfig {
            sn: true,
            kn: false,
        },
        NormalizationConfig {
            sn: false,
            kn: true,
        },
        NormalizationConfig {
            sn: false,
            kn: false,
        },
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnrichmentMode {
    Off,
    Add,
    Concat,
}

impl EnrichmentMode {
    pub fn name(&self) -> &'static str {
        match self {
            EnrichmentMode::Off => "off",
            EnrichmentMode::Add => "add",
            EnrichmentMode::Concat => "concat",
        }
    }

    /// Embedding length the mode needs for descriptors of length `dim`.
    pub fn embedding_dim(&self, descriptor_dim: usize) -> usize {
        match self {
            EnrichmentMode::Concat => descriptor_dim / 2,
            _ => descriptor_dim,
        }
    }
}

impl std::str::FromStr for EnrichmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(EnrichmentMode::Off),
            "add" => Ok(EnrichmentMode::Add),
            "concat" => Ok(EnrichmentMode::Concat),
            other => Err(Error::validation("mode", format!("unknown mode {other:?}"))),
        }
    }
}

pub const DEFAULT_ELIGIBLE: [SemanticClass; 2] = [SemanticClass::Trunk, SemanticClass::Building];

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Partition {
    /// `(keypoint index, instance id, class)` for keypoints on eligible masks.
    pub semantic: Vec<(usize, InstanceId, SemanticClass)>,
    pub background: Vec<usize>,
}

/// Assigns each keypoint to the eligible mask containing it. Where masks
/// overlap, the smallest one wins (ties go to the lower instance id).
pub fn partition(frame: &FrameObservation, eligible: &[SemanticClass]) -> Partition {
    let candidates: Vec<_> = frame
        .masks
        .iter()
        .filter(|m| eligible.contains(&m.class))
        .map(|m| (m.bitmap.count(), m))
        .collect();
    let mut out = Partition::default();
    for (i, kp) in frame.keypoints.iter().enumerate() {
        let owner = candidates
            .iter()
            .filter(|(_, m)| m.bitmap.contains_point(kp.position.x, kp.position.y))
            .min_by_key(|(area, m)| (*area, m.instance_id));
        match owner {
            Some((_, m)) => out.semantic.push((i, m.instance_id, m.class)),
            None => out.background.push(i),
        }
    }
    out
}

fn maybe_normalize(v: &[f64], on: bool) -> Result<Vec<f64>> {
    if on {
        l2_normalize(v)
    } else {
        Ok(v.to_vec())
    }
}

/// `normalize(d~ + e~)`, where `d~`, `e~` are `d`, `e` optionally normalized.
pub fn enrich_add(d: &[f64], e: &[f64], cfg: NormalizationConfig) -> Result<Vec<f64>> {
    Error::check_dim(d.len(), e.len())?;
    let d = maybe_normalize(d, cfg.kn)?;
    let sum: Vec<f64> = if cfg.sn && e.iter().all(|&v| v == 0.0) {
        // A zero embedding contributes nothing under either setting.
        d
    } else {
        let e = maybe_normalize(e, cfg.sn)?;
        d.iter().zip(&e).map(|(a, b)| a + b).collect()
    };
    l2_normalize(&sum)
}

/// `normalize([compress(d), e_half])`.
pub fn enrich_concat(
    d: &[f64],
    e_half: &[f64],
    compressor: &AutoencoderParams,
) -> Result<Vec<f64>> {
    Error::check_dim(compressor.input_dim, d.len())?;
    if d.len() % 2 != 0 {
        return Err(Error::validation(
            "descriptor_dim",
            "must be even for concat mode",
        ));
    }
    let half = d.len() / 2;
    Error::check_dim(half, compressor.bottleneck_dim)?;
    Error::check_dim(half, e_half.len())?;
    let mut v = ae_compress(compressor, d)?;
    v.extend_from_slice(e_half);
    l2_normalize(&v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexedKeypoint {
    /// Position of the keypoint in the source frame.
    pub index: usize,
    pub keypoint: Keypoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticKeypoint {
    pub index: usize,
    pub keypoint: Keypoint,
    pub instance_id: InstanceId,
    pub class: SemanticClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichedKeypointSet {
    pub frame_index: usize,
    pub mode: EnrichmentMode,
    pub background: Vec<IndexedKeypoint>,
    pub semantic: Vec<SemanticKeypoint>,
}

impl EnrichedKeypointSet {
    pub fn len(&self) -> usize {
        self.background.len() + self.semantic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn descriptor_dim(&self) -> Option<usize> {
        self.background
            .first()
            .map(|k| k.keypoint.descriptor.dim())
            .or_else(|| self.semantic.first().map(|k| k.keypoint.descriptor.dim()))
    }

    pub fn background_descriptors(&self) -> Vec<&Descriptor> {
        self.background
            .iter()
            .map(|k| &k.keypoint.descriptor)
            .collect()
    }

    pub fn semantic_descriptors(&self) -> Vec<&Descriptor> {
        self.semantic
            .iter()
            .map(|k| &k.keypoint.descriptor)
            .collect()
    }

    pub fn background_indices(&self) -> Vec<usize> {
        self.background.iter().map(|k| k.index).collect()
    }

    pub fn semantic_indices(&self) -> Vec<usize> {
        self.semantic.iter().map(|k| k.index).collect()
    }

    /// Frame-index-ordered descriptors, with the enriched ones substituted.
    pub fn frame_descriptors(&self) -> Vec<(usize, &Descriptor)> {
        let mut all: Vec<_> = self
            .background
            .iter()
            .map(|k| (k.index, &k.keypoint.descriptor))
            .chain(
                self.semantic
                    .iter()
                    .map(|k| (k.index, &k.keypoint.descriptor)),
            )
            .collect();
        all.sort_by_key(|(i, _)| *i);
        all
    }

    /// True when frame keypoint `index` was treated as semantic.
    pub fn is_semantic(&self, index: usize) -> bool {
        self.semantic.iter().any(|k| k.index == index)
    }
}

/// Encoder and, for concat mode, descriptor compressor.
pub struct Enricher<'a> {
    pub mode: EnrichmentMode,
    pub normalization: NormalizationConfig,
    pub encoder: Option<&'a dyn SemanticEncoder>,
    pub compressor: Option<&'a AutoencoderParams>,
    pub eligible: Vec<SemanticClass>,
}

impl<'a> Enricher<'a> {
    pub fn off() -> Self {
        Enricher {
            mode: EnrichmentMode::Off,
            normalization: NormalizationConfig::default(),
            encoder: None,
            compressor: None,
            eligible: DEFAULT_ELIGIBLE.to_vec(),
        }
    }

    pub fn add(encoder: &'a dyn SemanticEncoder, normalization: NormalizationConfig) -> Self {
        Enricher {
            mode: EnrichmentMode::Add,
            normalization,
            encoder: Some(encoder),
            compressor: None,
            eligible: DEFAULT_ELIGIBLE.to_vec(),
        }
    }

    pub fn concat(encoder: &'a dyn SemanticEncoder, compressor: &'a AutoencoderParams) -> Self {
        Enricher {
            mode: EnrichmentMode::Concat,
            normalization: NormalizationConfig::default(),
            encoder: Some(encoder),
            compressor: Some(compressor),
            eligible: DEFAULT_ELIGIBLE.to_vec(),
        }
    }

    fn check(&self, descriptor_dim: usize) -> Result<()> {
        if self.mode == EnrichmentMode::Off {
            return Ok(());
        }
        let encoder = self
            .encoder
            .ok_or_else(|| Error::validation("encoder", "required unless mode is off"))?;
        Error::check_dim(self.mode.embedding_dim(descriptor_dim), encoder.dim())?;
        if self.mode == EnrichmentMode::Concat {
            let c = self
                .compressor
                .ok_or_else(|| Error::validation("compressor", "required for concat mode"))?;
            Error::check_dim(descriptor_dim, c.input_dim)?;
            Error::check_dim(descriptor_dim / 2, c.bottleneck_dim)?;
        }
        Ok(())
    }

    pub fn enrich_frame(&self, frame: &FrameObservation) -> Result<EnrichedKeypointSet> {
        let part = partition(frame, &self.eligible);
        if let Some(kp) = frame.keypoints.first() {
            self.check(kp.descriptor.dim())?;
        }
        let background = part
            .background
            .iter()
            .map(|&i| IndexedKeypoint {
                index: i,
                keypoint: frame.keypoints[i].clone(),
            })
            .collect();
        let mut embeddings: BTreeMap<InstanceId, Vec<f64>> = BTreeMap::new();
        let mut semantic = Vec::with_capacity(part.semantic.len());
        for &(i, id, class) in &part.semantic {
            let kp = &frame.keypoints[i];
            let descriptor = match self.mode {
                EnrichmentMode::Off => kp.descriptor.clone(),
                mode => {
                    if !embeddings.contains_key(&id) {
                        let mask = frame
                            .mask_of(id)
                            .expect("partition only returns instances with masks");
                        let encoder = self.encoder.expect("checked");
                        embeddings.insert(id, encoder.encode(mask)?);
                    }
                    let e = &embeddings[&id];
                    let d = if mode == EnrichmentMode::Add {
                        enrich_add(&kp.descriptor, e, self.normalization)?
                    } else {
                        enrich_concat(&kp.descriptor, e, self.compressor.expect("checked"))?
                    };
                    Descriptor(d)
                }
            };
            semantic.push(SemanticKeypoint {
                index: i,
                keypoint: Keypoint::new(kp.position, descriptor),
                instance_id: id,
                class,
            });
        }
        Ok(EnrichedKeypointSet {
            frame_index: frame.frame_index,
            mode: self.mode,
            background,
            semantic,
        })
    }
}
