//! Cohort manifests, feature-stream files and utterance segmentation.
//!
//! A feature stream is stored as a CSV file with header `frame,<ch0>,<ch1>,...`
//! and one row per frame, plus a sidecar JSON file next to it (same stem,
//! `.json` extension) holding `{modality, rate_hz, subject_id, session_id,
//! utterance_id}`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Behavioral feature family carried by a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    /// Mouth-region facial action units (video).
    #[serde(rename = "FAU")]
    Fau,
    /// Six articulatory plus two glottal vocal tract variables (audio).
    #[serde(rename = "TV")]
    Tv,
    /// Twelve cepstral coefficients, the first coefficient discarded (audio).
    #[serde(rename = "MFCC")]
    Mfcc,
    /// The twelve cepstral coefficients plus the two glottal tract variables (audio).
    #[serde(rename = "MFCC_GLOTTAL")]
    MfccGlottal,
}

const FAU_CHANNELS: [&str; 10] = [
    "AU06", "AU07", "AU09", "AU10", "AU12", "AU14", "AU15", "AU17", "AU20", "AU23",
];
const TV_CHANNELS: [&str; 8] = ["LA", "LP", "TBCL", "TBCD", "TTCL", "TTCD", "PER", "APER"];

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::Fau,
        Modality::Tv,
        Modality::Mfcc,
        Modality::MfccGlottal,
    ];

    /// Required channel count M.
    pub fn channel_count(self) -> usize {
        match self {
            Modality::Fau => 10,
            Modality::Tv => 8,
            Modality::Mfcc => 12,
            Modality::MfccGlottal => 14,
        }
    }

    /// Nominal frame rate of the upstream extractor.
    pub fn default_rate_hz(self) -> f64 {
        match self {
            Modality::Fau => 28.0,
            _ => 100.0,
        }
    }

    pub fn is_video(self) -> bool {
        matches!(self, Modality::Fau)
    }

    pub fn default_channel_names(self) -> Vec<String> {
        let mfcc = (2..=13).map(|k| format!("MFCC{k}"));
        match self {
            Modality::Fau => FAU_CHANNELS.iter().map(|s| s.to_string()).collect(),
            Modality::Tv => TV_CHANNELS.iter().map(|s| s.to_string()).collect(),
            Modality::Mfcc => mfcc.collect(),
            Modality::MfccGlottal => mfcc
                .chain(["PER".to_string(), "APER".to_string()])
                .collect(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Fau => "FAU",
            Modality::Tv => "TV",
            Modality::Mfcc => "MFCC",
            Modality::MfccGlottal => "MFCC_GLOTTAL",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parse(format!("unknown modality {s:?}")))
    }
}

/// Binary diagnostic class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    /// Schizophrenia with strong positive symptoms (class "S").
    #[serde(rename = "SZ")]
    Sz,
    /// Healthy control (class "H").
    #[serde(rename = "HC")]
    Hc,
}

impl Label {
    /// Class index used by the classifiers: SZ = 0, HC = 1.
    pub fn index(self) -> usize {
        match self {
            Label::Sz => 0,
            Label::Hc => 1,
        }
    }

    pub fn from_index(i: usize) -> Label {
        if i == 0 {
            Label::Sz
        } else {
            Label::Hc
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Sz => "SZ",
            Label::Hc => "HC",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SZ" => Ok(Label::Sz),
            "HC" => Ok(Label::Hc),
            other => Err(Error::Validation(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub modality: Modality,
    /// Stream CSV path, relative to the manifest directory unless absolute.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub utterances: Vec<UtteranceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub label: Label,
    pub sessions: Vec<SessionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bprs_total: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hamd: Option<u32>,
}

/// Subjects, their sessions and the per-utterance stream files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub subjects: Vec<SubjectRecord>,
    /// Directory relative paths are resolved against. Not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl CohortManifest {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectRecord> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.subjects.iter().filter(|s| s.label == label).count()
    }

    /// Checks id uniqueness, non-emptiness and that every stream path is a readable file.
    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(Error::Validation("manifest lists no subjects".into()));
        }
        let mut subjects = HashSet::new();
        let mut sessions = HashSet::new();
        for subject in &self.subjects {
            if !subjects.insert(subject.subject_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate subject_id {:?}",
                    subject.subject_id
                )));
            }
            for session in &subject.sessions {
                if !sessions.insert(session.session_id.as_str()) {
                    return Err(Error::Validation(format!(
                        "session {:?} appears under more than one subject",
                        session.session_id
                    )));
                }
                let mut utterances = HashSet::new();
                for utt in &session.utterances {
                    if !utterances.insert((utt.utterance_id.as_str(), utt.modality)) {
                        return Err(Error::Validation(format!(
                            "duplicate {} utterance {:?} in session {:?}",
                            utt.modality, utt.utterance_id, session.session_id
                        )));
                    }
                    let full = self.resolve(&utt.path);
                    if fs::File::open(&full).is_err() || !full.is_file() {
                        return Err(Error::Validation(format!(
                            "stream file {} is not readable",
                            full.display()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Writes the manifest as pretty JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Loads and validates a cohort manifest; relative stream paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<CohortManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    // unknown labels are a validation problem, not a syntax problem
    if let Some(subjects) = value.get("subjects").and_then(|s| s.as_array()) {
        for subject in subjects {
            if let Some(label) = subject.get("label").and_then(|l| l.as_str()) {
                label.parse::<Label>()?;
            }
        }
    }
    let mut manifest: CohortManifest = serde_json::from_value(value)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    manifest.root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    manifest.validate()?;
    Ok(manifest)
}

/// What to do with NaN/Inf cells when loading a stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepairPolicy {
    #[default]
    Reject,
    /// Linear interpolation from the nearest finite neighbors in the same
    /// channel; edge cells take the nearest finite value.
    Interpolate,
}

/// Sidecar metadata stored next to each stream CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSidecar {
    pub modality: Modality,
    pub rate_hz: f64,
    pub subject_id: String,
    pub session_id: String,
    pub utterance_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_index: Option<usize>,
}

/// One modality's M-channel fixed-rate time series for one utterance (or segment).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStream {
    pub modality: Modality,
    pub channel_names: Vec<String>,
    pub rate_hz: f64,
    /// Row-major F×M frame matrix.
    frames: Vec<f64>,
    pub subject_id: String,
    pub session_id: String,
    pub utterance_id: String,
    pub segment_index: Option<usize>,
}

impl FeatureStream {
    /// Builds a stream from row-major frames, checking the channel count and finiteness.
    pub fn new(
        modality: Modality,
        channel_names: Vec<String>,
        rate_hz: f64,
        frames: Vec<f64>,
        ids: (&str, &str, &str),
    ) -> Result<Self> {
        let m = channel_names.len();
        if m != modality.channel_count() {
            return Err(Error::ChannelCountMismatch {
                modality: modality.to_string(),
                expected: modality.channel_count(),
                found: m,
            });
        }
        if !(rate_hz > 0.0 && rate_hz.is_finite()) {
            return Err(Error::Validation(format!("rate_hz must be positive, got {rate_hz}")));
        }
        if frames.len() % m != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form rows of {m} channels",
                frames.len()
            )));
        }
        if let Some(pos) = frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                frame: pos / m,
                channel: pos % m,
            });
        }
        Ok(FeatureStream {
            modality,
            channel_names,
            rate_hz,
            frames,
            subject_id: ids.0.to_string(),
            session_id: ids.1.to_string(),
            utterance_id: ids.2.to_string(),
            segment_index: None,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len() / self.n_channels()
    }

    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_frames() as f64 / self.rate_hz
    }

    pub fn frames(&self) -> &[f64] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let m = self.n_channels();
        &self.frames[t * m..(t + 1) * m]
    }

    /// Copies frames `[start, end)` into a new stream carrying the same ids.
    pub fn slice(&self, start: usize, end: usize) -> FeatureStream {
        let m = self.n_channels();
        FeatureStream {
            frames: self.frames[start * m..end * m].to_vec(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> FeatureStream {
        FeatureStream {
            modality: self.modality,
            channel_names: self.channel_names.clone(),
            rate_hz: self.rate_hz,
            frames: Vec::new(),
            subject_id: self.subject_id.clone(),
            session_id: self.session_id.clone(),
            utterance_id: self.utterance_id.clone(),
            segment_index: self.segment_index,
        }
    }

    pub fn sidecar(&self) -> StreamSidecar {
        StreamSidecar {
            modality: self.modality,
            rate_hz: self.rate_hz,
            subject_id: self.subject_id.clone(),
            session_id: self.session_id.clone(),
            utterance_id: self.utterance_id.clone(),
            segment_index: self.segment_index,
        }
    }
}

/// Path of the sidecar JSON belonging to a stream CSV.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

fn parse_cell(cell: &str) -> Result<f64> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(f64::NAN);
    }
    cell.parse::<f64>()
        .map_err(|_| Error::Parse(format!("bad numeric cell {cell:?}")))
}

/// Loads a stream CSV and its sidecar, enforcing the modality's channel count.
pub fn load_stream(path: &Path, modality: Modality, policy: RepairPolicy) -> Result<FeatureStream> {
    let side_path = sidecar_path(path);
    let side_text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: StreamSidecar = serde_json::from_str(&side_text)
        .map_err(|e| Error::Parse(format!("{}: {e}", side_path.display())))?;
    if side.modality != modality {
        return Err(Error::Validation(format!(
            "{} declares modality {} but {} was requested",
            side_path.display(),
            side.modality,
            modality
        )));
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let header = reader
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .clone();
    if header.get(0) != Some("frame") {
        return Err(Error::Parse(format!(
            "{}: first header column must be `frame`",
            path.display()
        )));
    }
    let channel_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let m = channel_names.len();
    if m != modality.channel_count() {
        return Err(Error::ChannelCountMismatch {
            modality: modality.to_string(),
            expected: modality.channel_count(),
            found: m,
        });
    }

    let mut frames = Vec::new();
    for (t, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        if record.len() != m + 1 {
            return Err(Error::Parse(format!(
                "{}: row {t} has {} cells, expected {}",
                path.display(),
                record.len(),
                m + 1
            )));
        }
        let index: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("{}: bad frame index {:?}", path.display(), &record[0])))?;
        if index != t {
            return Err(Error::Parse(format!(
                "{}: frame index {index} at row {t}",
                path.display()
            )));
        }
        for cell in record.iter().skip(1) {
            frames.push(parse_cell(cell)?);
        }
    }
    if frames.is_empty() {
        return Err(Error::Parse(format!("{}: no frames", path.display())));
    }

    if policy == RepairPolicy::Interpolate {
        repair_non_finite(&mut frames, m)?;
    }

    let mut stream = FeatureStream::new(
        modality,
        channel_names,
        side.rate_hz,
        frames,
        (&side.subject_id, &side.session_id, &side.utterance_id),
    )?;
    stream.segment_index = side.segment_index;
    Ok(stream)
}

/// Replaces non-finite cells by linear interpolation along each channel.
fn repair_non_finite(frames: &mut [f64], m: usize) -> Result<()> {
    let n = frames.len() / m;
    for ch in 0..m {
        let good: Vec<usize> = (0..n).filter(|&t| frames[t * m + ch].is_finite()).collect();
        if good.is_empty() {
            return Err(Error::NonFiniteValue { frame: 0, channel: ch });
        }
        if good.len() == n {
            continue;
        }
        let mut next = 0;
        for t in 0..n {
            if frames[t * m + ch].is_finite() {
                continue;
            }
            while next < good.len() && good[next] < t {
                next += 1;
            }
            let value = match (next.checked_sub(1).map(|i| good[i]), good.get(next)) {
                (Some(a), Some(&b)) => {
                    let va = frames[a * m + ch];
                    let vb = frames[b * m + ch];
                    let w = (t - a) as f64 / (b - a) as f64;
                    va + w * (vb - va)
                }
                (Some(a), None) => frames[a * m + ch],
                (None, Some(&b)) => frames[b * m + ch],
                (None, None) => unreachable!(),
            };
            frames[t * m + ch] = value;
        }
    }
    Ok(())
}

/// Writes a stream CSV and its sidecar. Values use the shortest round-trip decimal form.
pub fn save_stream(stream: &FeatureStream, path: &Path) -> Result<()> {
    let m = stream.n_channels();
    let mut out = String::with_capacity(stream.frames.len() * 12);
    out.push_str("frame");
    for name in &stream.channel_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for t in 0..stream.n_frames() {
        out.push_str(&t.to_string());
        for v in &stream.frames[t * m..(t + 1) * m] {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    let side = serde_json::to_string_pretty(&stream.sidecar()).expect("sidecar serializes");
    let side_path = sidecar_path(path);
    fs::write(&side_path, side + "\n").map_err(|e| Error::io(&side_path, e))
}

/// A contiguous piece of an utterance kept for analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// The segment's frames; `segment_index` is set to `ordinal`.
    pub stream: FeatureStream,
    pub ordinal: usize,
    pub start_frame: usize,
    pub end_frame: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub duration_s: f64,
}

impl Segment {
    /// Key used to pair segments across modalities.
    pub fn pair_key(&self) -> (String, String, String, usize) {
        (
            self.stream.subject_id.clone(),
            self.stream.session_id.clone(),
            self.stream.utterance_id.clone(),
            self.ordinal,
        )
    }
}

/// Frame-range plan for cutting an utterance of `n_frames` frames.
///
/// Full chunks of `chunk` frames are cut first; a remainder shorter than
/// `min` joins the last chunk, otherwise it becomes its own segment.
/// Utterances shorter than `min` produce no segments.
pub fn plan_segments(n_frames: usize, chunk: usize, min: usize) -> Vec<(usize, usize)> {
    if n_frames == 0 || n_frames < min {
        return Vec::new();
    }
    let chunk = chunk.max(1);
    let full = n_frames / chunk;
    let rem = n_frames % chunk;
    if full == 0 {
        return vec![(0, n_frames)];
    }
    let mut bounds: Vec<(usize, usize)> = (0..full).map(|k| (k * chunk, (k + 1) * chunk)).collect();
    if rem > 0 {
        if rem >= min {
            bounds.push((full * chunk, n_frames));
        } else {
            bounds.last_mut().expect("at least one chunk").1 = n_frames;
        }
    }
    bounds
}

/// Frames per chunk and minimum frames for a stream rate.
pub fn segment_frame_lengths(rate_hz: f64, chunk_s: f64, min_s: f64) -> (usize, usize) {
    let chunk = (chunk_s * rate_hz).round().max(1.0) as usize;
    // ceil keeps every produced segment at or above min_s
    let min = (min_s * rate_hz - 1e-9).ceil().max(1.0) as usize;
    (chunk, min)
}

/// Cuts an utterance into analysis segments of `chunk_s` seconds, folding a
/// remainder shorter than `min_s` into the final chunk.
pub fn segment_utterance(stream: &FeatureStream, chunk_s: f64, min_s: f64) -> Vec<Segment> {
    let (chunk, min) = segment_frame_lengths(stream.rate_hz, chunk_s, min_s);
    plan_segments(stream.n_frames(), chunk, min)
        .into_iter()
        .enumerate()
        .map(|(ordinal, (start, end))| {
            let mut piece = stream.slice(start, end);
            piece.segment_index = Some(ordinal);
            Segment {
                stream: piece,
                ordinal,
                start_frame: start,
                end_frame: end,
                start_s: start as f64 / stream.rate_hz,
                end_s: end as f64 / stream.rate_hz,
                duration_s: (end - start) as f64 / stream.rate_hz,
            }
        })
        .collect()
}

/// An utterance that produced no segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedUtterance {
    pub subject_id: String,
    pub session_id: String,
    pub utterance_id: String,
    pub modality: Modality,
    pub duration_s: f64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DropReport {
    pub utterances_seen: usize,
    pub segments_kept: usize,
    pub dropped: Vec<DroppedUtterance>,
}

/// Segmentation knobs shared by the CLI and the dataset builder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub chunk_s: f64,
    pub min_s: f64,
    #[serde(default)]
    pub repair: RepairPolicy,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            chunk_s: 40.0,
            min_s: 5.0,
            repair: RepairPolicy::Reject,
        }
    }
}

/// Loads and segments every utterance of the requested modalities in manifest order.
pub fn segment_cohort(
    manifest: &CohortManifest,
    modalities: &[Modality],
    config: &SegmentConfig,
) -> Result<(Vec<Segment>, DropReport)> {
    let mut segments = Vec::new();
    let mut report = DropReport::default();
    for subject in &manifest.subjects {
        for session in &subject.sessions {
            for utt in &session.utterances {
                if !modalities.contains(&utt.modality) {
                    continue;
                }
                report.utterances_seen += 1;
                let stream = load_stream(&manifest.resolve(&utt.path), utt.modality, config.repair)?;
                if stream.subject_id != subject.subject_id {
                    return Err(Error::Validation(format!(
                        "{} belongs to subject {:?}, listed under {:?}",
                        utt.path.display(),
                        stream.subject_id,
                        subject.subject_id
                    )));
                }
                let pieces = segment_utterance(&stream, config.chunk_s, config.min_s);
                if pieces.is_empty() {
                    report.dropped.push(DroppedUtterance {
                        subject_id: subject.subject_id.clone(),
                        session_id: session.session_id.clone(),
                        utterance_id: utt.utterance_id.clone(),
                        modality: utt.modality,
                        duration_s: stream.duration_s(),
                        reason: format!("shorter than {} s", config.min_s),
                    });
                }
                report.segments_kept += pieces.len();
                segments.extend(pieces);
            }
        }
    }
    Ok((segments, report))
}

/// Pairs video and audio segments by (subject, session, utterance, ordinal).
/// Unmatched segments are dropped with a warning.
pub fn pair_segments(video: Vec<Segment>, audio: Vec<Segment>) -> Vec<(Segment, Segment)> {
    let mut audio_by_key: BTreeMap<_, Segment> =
        audio.into_iter().map(|s| (s.pair_key(), s)).collect();
    let mut pairs = Vec::new();
    for v in video {
        let key = v.pair_key();
        match audio_by_key.remove(&key) {
            Some(a) => pairs.push((v, a)),
            None => log::warn!("no audio segment for {key:?}; excluded from fusion"),
        }
    }
    for key in audio_by_key.keys() {
        log::warn!("no video segment for {key:?}; excluded from fusion");
    }
    pairs
}
