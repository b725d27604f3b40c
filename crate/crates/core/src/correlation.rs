//! Channel-delay correlation structures.
//!
//! Both structures correlate delayed copies of the channels over one common
//! valid window, so every entry is a plain Pearson coefficient:
//!
//! - TDEC: `N` copies per channel spaced `scale` frames apart, giving an
//!   `MN×MN` matrix with entry `(i·N + k, j·N + l)` = corr(x_i(t + k·s), x_j(t + l·s))
//!   for `t ∈ [0, F − (N−1)·s)`.
//! - FVTC: for every ordered pair `(i, j)` and lag `d ∈ [0, D)`,
//!   entry `(i·M + j, d)` = corr(x_i(t), x_j(t + d)) for `t ∈ [0, F − D)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ingest::{FeatureStream, Modality};
use crate::matrix::{gemm_f64, gram_f64, Matrix};
use crate::{Error, Result};

/// Borrowed row-major F×M frame matrix.
#[derive(Debug, Clone, Copy)]
pub struct Frames<'a> {
    data: &'a [f64],
    channels: usize,
}

impl<'a> Frames<'a> {
    /// Panics if `data.len()` is not a multiple of `channels`.
    pub fn new(data: &'a [f64], channels: usize) -> Self {
        assert!(channels > 0 && data.len() % channels == 0, "frame data shape");
        Frames { data, channels }
    }

    pub fn n_frames(&self) -> usize {
        self.data.len() / self.channels
    }

    pub fn n_channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, t: usize, ch: usize) -> f64 {
        self.data[t * self.channels + ch]
    }
}

impl FeatureStream {
    pub fn view(&self) -> Frames<'_> {
        Frames::new(self.frames(), self.n_channels())
    }
}

/// Where a correlation structure came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceId {
    pub subject_id: String,
    pub session_id: String,
    pub utterance_id: String,
    pub segment_index: Option<usize>,
}

impl SourceId {
    pub fn of(stream: &FeatureStream) -> Self {
        SourceId {
            subject_id: stream.subject_id.clone(),
            session_id: stream.session_id.clone(),
            utterance_id: stream.utterance_id.clone(),
            segment_index: stream.segment_index,
        }
    }
}

/// MN×MN time-delay embedded correlation matrix at one delay scale.
#[derive(Debug, Clone, PartialEq)]
pub struct TdecMatrix {
    pub values: Matrix,
    pub channels: usize,
    pub delays: usize,
    pub scale: usize,
    pub source: Option<SourceId>,
}

impl TdecMatrix {
    pub fn dim(&self) -> usize {
        self.channels * self.delays
    }
}

/// M²×D lag-stacked auto/cross-correlation map.
#[derive(Debug, Clone, PartialEq)]
pub struct FvtcMap {
    pub values: Matrix,
    pub channels: usize,
    pub max_lag: usize,
    pub source: Option<SourceId>,
}

impl FvtcMap {
    pub fn at(&self, i: usize, j: usize, lag: usize) -> f64 {
        self.values[(i * self.channels + j, lag)]
    }
}

/// Embedding parameters for one modality.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoordConfig {
    /// Delayed copies per channel (N).
    pub n_delays: usize,
    /// Frame spacings between copies, one TDEC matrix per entry.
    pub scales: Vec<usize>,
    /// FVTC lag extent (D).
    pub fvtc_d: usize,
    /// Minimum frames left in the common window.
    pub min_frames: usize,
}

/// Candidate FVTC lag extents searched per modality.
pub const FVTC_D_GRID: [usize; 3] = [45, 50, 55];

pub const DEFAULT_MIN_FRAMES: usize = 20;

impl CoordConfig {
    pub fn for_modality(modality: Modality) -> Self {
        match modality {
            Modality::Fau => CoordConfig {
                n_delays: 15,
                scales: vec![3, 7],
                fvtc_d: 45,
                min_frames: DEFAULT_MIN_FRAMES,
            },
            _ => CoordConfig {
                n_delays: 15,
                scales: vec![7, 15],
                fvtc_d: 50,
                min_frames: DEFAULT_MIN_FRAMES,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_delays < 2 {
            return Err(Error::Config(format!("n_delays must be >= 2, got {}", self.n_delays)));
        }
        if self.scales.is_empty() {
            return Err(Error::Config("at least one delay scale is required".into()));
        }
        if self.scales.contains(&0) {
            return Err(Error::Config("delay scales must be positive".into()));
        }
        if self.fvtc_d < 1 {
            return Err(Error::Config("fvtc_d must be >= 1".into()));
        }
        if self.min_frames < 2 {
            return Err(Error::Config("min_frames must be >= 2".into()));
        }
        Ok(())
    }

    /// Frames a segment needs for every configured TDEC scale.
    pub fn tdec_required_frames(&self) -> usize {
        let widest = self.scales.iter().copied().max().unwrap_or(0);
        (self.n_delays - 1) * widest + self.min_frames
    }

    pub fn fvtc_required_frames(&self) -> usize {
        self.fvtc_d + self.min_frames
    }
}

/// Mean-centred, unit-norm copy of `x_ch(t + offset)` for `t ∈ [0, window)`.
fn normalized_copy(frames: Frames<'_>, ch: usize, offset: usize, window: usize, out: &mut [f64]) -> Result<()> {
    let mut sum = 0.0;
    let mut max_abs: f64 = 0.0;
    for t in 0..window {
        let v = frames.get(t + offset, ch);
        out[t] = v;
        sum += v;
        max_abs = max_abs.max(v.abs());
    }
    let mean = sum / window as f64;
    let mut ss = 0.0;
    for v in out.iter_mut().take(window) {
        *v -= mean;
        ss += *v * *v;
    }
    // residue of rounding a constant copy is ~eps·|x| per frame
    let floor = 100.0 * window as f64 * (f64::EPSILON * max_abs).powi(2);
    if !(ss > floor) {
        return Err(Error::ZeroVarianceChannel { channel: ch, offset });
    }
    let inv = 1.0 / ss.sqrt();
    for v in out.iter_mut().take(window) {
        *v *= inv;
    }
    Ok(())
}

/// Time-delay embedded correlation matrix of `frames` with `n_delays` copies
/// per channel spaced `scale` frames apart.
pub fn tdec(frames: Frames<'_>, n_delays: usize, scale: usize, min_frames: usize) -> Result<TdecMatrix> {
    if n_delays < 1 || scale < 1 {
        return Err(Error::Config("n_delays and scale must be positive".into()));
    }
    let f = frames.n_frames();
    let m = frames.n_channels();
    let span = (n_delays - 1) * scale;
    let required = span + min_frames.max(2);
    if f < required {
        return Err(Error::SegmentTooShort { frames: f, required });
    }
    let window = f - span;
    let dim = m * n_delays;
    let mut copies = vec![0.0; dim * window];
    for ch in 0..m {
        for k in 0..n_delays {
            let row = ch * n_delays + k;
            normalized_copy(frames, ch, k * scale, window, &mut copies[row * window..(row + 1) * window])?;
        }
    }
    let mut gram = vec![0.0; dim * dim];
    gram_f64(dim, window, &copies, &mut gram);
    let mut values = Matrix::from_vec(dim, dim, gram);
    for r in 0..dim {
        for c in r + 1..dim {
            values[(c, r)] = values[(r, c)];
        }
    }
    Ok(TdecMatrix {
        values,
        channels: m,
        delays: n_delays,
        scale,
        source: None,
    })
}

/// One TDEC matrix per configured scale, in `config.scales` order.
pub fn tdec_multi(frames: Frames<'_>, config: &CoordConfig) -> Result<Vec<TdecMatrix>> {
    config.validate()?;
    config
        .scales
        .iter()
        .map(|&s| tdec(frames, config.n_delays, s, config.min_frames))
        .collect()
}

/// TDEC matrices for a stream, tagged with its ids.
pub fn tdec_stream(stream: &FeatureStream, config: &CoordConfig) -> Result<Vec<TdecMatrix>> {
    let mut out = tdec_multi(stream.view(), config)?;
    for m in &mut out {
        m.source = Some(SourceId::of(stream));
    }
    Ok(out)
}

/// Lag-stacked correlation map with lags `0..max_lag`.
pub fn fvtc(frames: Frames<'_>, max_lag: usize, min_frames: usize) -> Result<FvtcMap> {
    if max_lag < 1 {
        return Err(Error::Config("FVTC lag extent must be >= 1".into()));
    }
    let f = frames.n_frames();
    let m = frames.n_channels();
    let required = max_lag + min_frames.max(2);
    if f < required {
        return Err(Error::SegmentTooShort { frames: f, required });
    }
    let window = f - max_lag;

    let mut base = vec![0.0; m * window];
    for ch in 0..m {
        normalized_copy(frames, ch, 0, window, &mut base[ch * window..(ch + 1) * window])?;
    }
    // lagged copies laid out column-wise: column (j·D + d) holds x_j(t + d)
    let cols = m * max_lag;
    let mut lagged = vec![0.0; window * cols];
    let mut scratch = vec![0.0; window];
    for j in 0..m {
        for d in 0..max_lag {
            normalized_copy(frames, j, d, window, &mut scratch)?;
            let col = j * max_lag + d;
            for (t, v) in scratch.iter().enumerate() {
                lagged[t * cols + col] = *v;
            }
        }
    }
    let mut cross = vec![0.0; m * cols];
    gemm_f64(m, window, cols, &base, &lagged, &mut cross);
    // cross is M × (M·D) with row i, column j·D + d; that is exactly row-major (i·M + j, d)
    let values = Matrix::from_vec(m * m, max_lag, cross);
    Ok(FvtcMap {
        values,
        channels: m,
        max_lag,
        source: None,
    })
}

pub fn fvtc_stream(stream: &FeatureStream, config: &CoordConfig) -> Result<FvtcMap> {
    config.validate()?;
    let mut map = fvtc(stream.view(), config.fvtc_d, config.min_frames)?;
    map.source = Some(SourceId::of(stream));
    Ok(map)
}

/// Kind byte of a matrix artifact record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatrixKind {
    Tdec = 1,
    Fvtc = 2,
}

/// One matrix in a `.cord` artifact file.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRecord {
    pub kind: MatrixKind,
    pub values: Matrix,
}

impl From<&TdecMatrix> for MatrixRecord {
    fn from(m: &TdecMatrix) -> Self {
        MatrixRecord {
            kind: MatrixKind::Tdec,
            values: m.values.clone(),
        }
    }
}

impl From<&FvtcMap> for MatrixRecord {
    fn from(m: &FvtcMap) -> Self {
        MatrixRecord {
            kind: MatrixKind::Fvtc,
            values: m.values.clone(),
        }
    }
}

pub const CORD_MAGIC: &[u8; 4] = b"CORD";
pub const CORD_VERSION: u32 = 1;

/// Serializes records back to back; each record is
/// `"CORD" | u32 version | u8 kind | u32 rows | u32 cols | rows·cols f64`, little-endian.
pub fn encode_records(records: &[MatrixRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for rec in records {
        out.extend_from_slice(CORD_MAGIC);
        out.extend_from_slice(&CORD_VERSION.to_le_bytes());
        out.push(rec.kind as u8);
        out.extend_from_slice(&(rec.values.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(rec.values.cols() as u32).to_le_bytes());
        for v in rec.values.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<MatrixRecord>> {
    fn take<'b>(bytes: &'b [u8], pos: &mut usize, n: usize) -> Result<&'b [u8]> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Parse("truncated CORD record".into()))?;
        let s = &bytes[*pos..end];
        *pos = end;
        Ok(s)
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));

    let mut pos = 0;
    let mut records = Vec::new();
    while pos < bytes.len() {
        if take(bytes, &mut pos, 4)? != CORD_MAGIC {
            return Err(Error::Parse("bad CORD magic".into()));
        }
        let version = u32_at(take(bytes, &mut pos, 4)?);
        if version != CORD_VERSION {
            return Err(Error::Parse(format!("unsupported CORD version {version}")));
        }
        let kind = match take(bytes, &mut pos, 1)?[0] {
            1 => MatrixKind::Tdec,
            2 => MatrixKind::Fvtc,
            k => return Err(Error::Parse(format!("unknown CORD kind {k}"))),
        };
        let rows = u32_at(take(bytes, &mut pos, 4)?) as usize;
        let cols = u32_at(take(bytes, &mut pos, 4)?) as usize;
        let payload = take(bytes, &mut pos, rows * cols * 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        records.push(MatrixRecord {
            kind,
            values: Matrix::from_vec(rows, cols, data),
        });
    }
    if records.is_empty() {
        return Err(Error::Parse("empty CORD file".into()));
    }
    Ok(records)
}

pub fn write_records(path: &Path, records: &[MatrixRecord]) -> Result<()> {
    fs::write(path, encode_records(records)).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<MatrixRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_records(&bytes)
}

/// Comma-separated rows, no header.
pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    let mut out = Vec::new();
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(f64::to_string).collect();
        writeln!(out, "{}", line.join(",")).expect("write to vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
