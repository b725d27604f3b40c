//! Model-ready samples: segmented streams turned into correlation features.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::{fvtc_stream, tdec_stream};
use crate::ingest::{
    pair_segments, segment_cohort, segment_utterance, CohortManifest, DropReport, FeatureStream, Label, Modality,
    Segment, SegmentConfig,
};
use crate::models::{Arch, BranchConfig, ModelConfig};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Identity of one analysis segment.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleKey {
    pub subject_id: String,
    pub session_id: String,
    pub utterance_id: String,
    pub segment: usize,
}

impl SampleKey {
    fn of(seg: &Segment) -> Self {
        let (subject_id, session_id, utterance_id, segment) = seg.pair_key();
        SampleKey {
            subject_id,
            session_id,
            utterance_id,
            segment,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub key: SampleKey,
    pub label: Label,
    /// One tensor per model input, shaped as [`ModelConfig::input_shapes`].
    pub inputs: Vec<Tensor<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedSample {
    pub key: SampleKey,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub skipped: Vec<SkippedSample>,
    pub drops: DropReport,
}

impl Dataset {
    /// Subjects with at least one sample, in first-appearance order.
    pub fn subjects(&self) -> Vec<(String, Label)> {
        let mut seen = Vec::<(String, Label)>::new();
        for s in &self.samples {
            if !seen.iter().any(|(id, _)| id == &s.key.subject_id) {
                seen.push((s.key.subject_id.clone(), s.label));
            }
        }
        seen
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }
}

/// Correlation features one branch computes from one segment.
pub fn branch_features(branch: &BranchConfig, stream: &FeatureStream) -> Result<Vec<Tensor<f64>>> {
    if stream.modality != branch.modality {
        return Err(Error::Validation(format!(
            "branch expects {} data, got {}",
            branch.modality, stream.modality
        )));
    }
    if stream.n_channels() != branch.channels() {
        return Err(Error::ChannelCountMismatch {
            modality: stream.modality.to_string(),
            expected: branch.channels(),
            found: stream.n_channels(),
        });
    }
    let coord = branch.coord_config();
    match branch.arch {
        Arch::Tdec => tdec_stream(stream, &coord)?
            .into_iter()
            .map(|m| {
                let d = m.dim();
                Tensor::new(vec![1, d, d], m.values.into_vec())
            })
            .collect(),
        Arch::Fvtc => {
            let map = fvtc_stream(stream, &coord)?;
            let (rows, cols) = (map.values.rows(), map.values.cols());
            Ok(vec![Tensor::new(vec![1, rows, cols], map.values.into_vec())?])
        }
    }
}

fn modalities(model: &ModelConfig) -> Vec<Modality> {
    model.branches.iter().map(|b| b.modality).collect()
}

/// Turns segments into samples. Segments whose features cannot be computed
/// (too short, constant channel) are skipped with a warning.
pub fn samples_from_segments(
    labels: &HashMap<String, Label>,
    segments: Vec<Segment>,
    model: &ModelConfig,
) -> Result<(Vec<Sample>, Vec<SkippedSample>)> {
    model.validate()?;
    let mods = modalities(model);
    let mut by_modality: BTreeMap<Modality, Vec<Segment>> = BTreeMap::new();
    for s in segments {
        if mods.contains(&s.stream.modality) {
            by_modality.entry(s.stream.modality).or_default().push(s);
        }
    }
    let groups: Vec<Vec<Segment>> = if mods.len() == 1 {
        by_modality
            .remove(&mods[0])
            .unwrap_or_default()
            .into_iter()
            .map(|s| vec![s])
            .collect()
    } else {
        let first = by_modality.remove(&mods[0]).unwrap_or_default();
        let second = by_modality.remove(&mods[1]).unwrap_or_default();
        pair_segments(first, second).into_iter().map(|(a, b)| vec![a, b]).collect()
    };

    let results: Vec<std::result::Result<Sample, SkippedSample>> = groups
        .par_iter()
        .map(|group| {
            let key = SampleKey::of(&group[0]);
            let Some(&label) = labels.get(&key.subject_id) else {
                return Err(SkippedSample {
                    reason: "subject not in manifest".into(),
                    key,
                });
            };
            let mut inputs = Vec::new();
            for (branch, seg) in model.branches.iter().zip(group) {
                match branch_features(branch, &seg.stream) {
                    Ok(t) => inputs.extend(t),
                    Err(e) => {
                        return Err(SkippedSample {
                            reason: format!("{}: {e}", branch.modality),
                            key,
                        })
                    }
                }
            }
            Ok(Sample { key, label, inputs })
        })
        .collect();

    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(s) => samples.push(s),
            Err(s) => {
                log::warn!("skipping {:?}: {}", s.key, s.reason);
                skipped.push(s);
            }
        }
    }
    Ok((samples, skipped))
}

fn label_map(manifest: &CohortManifest) -> HashMap<String, Label> {
    manifest.subjects.iter().map(|s| (s.subject_id.clone(), s.label)).collect()
}

/// Loads, segments and featurizes every utterance the model needs.
pub fn build_dataset(manifest: &CohortManifest, model: &ModelConfig, seg: &SegmentConfig) -> Result<Dataset> {
    let (segments, drops) = segment_cohort(manifest, &modalities(model), seg)?;
    let (samples, skipped) = samples_from_segments(&label_map(manifest), segments, model)?;
    Ok(Dataset {
        samples,
        skipped,
        drops,
    })
}

/// Same as [`build_dataset`] for streams already in memory.
pub fn build_dataset_from_streams<'a>(
    manifest: &CohortManifest,
    streams: impl IntoIterator<Item = &'a FeatureStream>,
    model: &ModelConfig,
    seg: &SegmentConfig,
) -> Result<Dataset> {
    let mods = modalities(model);
    let mut drops = DropReport::default();
    let mut segments = Vec::new();
    for stream in streams.into_iter().filter(|s| mods.contains(&s.modality)) {
        drops.utterances_seen += 1;
        let pieces = segment_utterance(stream, seg.chunk_s, seg.min_s);
        drops.segments_kept += pieces.len();
        segments.extend(pieces);
    }
    let (samples, skipped) = samples_from_segments(&label_map(manifest), segments, model)?;
    Ok(Dataset {
        samples,
        skipped,
        drops,
    })
}
