//! Seeded synthetic cohorts with controllable coordination complexity.
//!
//! Every utterance is driven by independent latent AR(2) processes with
//! resonant poles. The "complex" class (labelled SZ) uses as many latents as a
//! stream has channels, the "simple" class (HC) only a few, so complex-class
//! channels span more independent dimensions and give flatter eigenspectra.
//! Latents are mixed into channels through a fixed seeded orthonormal loading
//! matrix (rows rescaled to unit signal variance) and observed with white
//! noise. Half of each class's latents are shared between the video-like and
//! audio-like streams of an utterance.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ingest::{
    save_stream, CohortManifest, FeatureStream, Label, Modality, SessionRecord, SubjectRecord,
    UtteranceRecord,
};
use crate::{Error, Result};

/// Latent generation rate; streams are resampled from it.
const BASE_RATE_HZ: f64 = 100.0;
const BURN_IN: usize = 200;

/// One generated modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub modality: Modality,
    pub rate_hz: f64,
    /// Latent dimensionality of the simple (HC) class.
    pub k_simple: usize,
    /// Latent dimensionality of the complex (SZ) class.
    pub k_complex: usize,
}

impl StreamSpec {
    pub fn channels(&self) -> usize {
        self.modality.channel_count()
    }

    fn k(&self, label: Label) -> usize {
        match label {
            Label::Sz => self.k_complex,
            Label::Hc => self.k_simple,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub subjects_per_class: usize,
    pub sessions_per_subject: usize,
    pub utterances_per_session: usize,
    /// Utterance durations are uniform on `[min_duration_s, max_duration_s]`.
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub video: StreamSpec,
    pub audio: StreamSpec,
    /// Pole radius of every latent AR(2) process; the spectral radius of the
    /// block-diagonal latent coupling matrix.
    pub spectral_radius: f64,
    /// Latent resonance frequencies are spread over this band (Hz).
    pub freq_band_hz: (f64, f64),
    /// Per-subject multiplicative jitter of the resonance frequencies.
    pub freq_jitter: f64,
    /// Observation noise standard deviation relative to unit channel signal.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            subjects_per_class: 9,
            sessions_per_subject: 2,
            utterances_per_session: 6,
            min_duration_s: 4.0,
            max_duration_s: 50.0,
            video: StreamSpec {
                modality: Modality::Fau,
                rate_hz: 28.0,
                k_simple: 3,
                k_complex: 10,
            },
            audio: StreamSpec {
                modality: Modality::Tv,
                rate_hz: 100.0,
                k_simple: 3,
                k_complex: 8,
            },
            spectral_radius: 0.85,
            freq_band_hz: (0.5, 5.0),
            freq_jitter: 0.15,
            noise: 0.5,
            seed: 7,
        }
    }
}

impl SynthSpec {
    /// Named presets; `complex-vs-simple` is the default cohort.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "complex-vs-simple" => Ok(SynthSpec::default()),
            other => Err(Error::Config(format!("unknown synth preset {other:?}"))),
        }
    }

    /// Splits a total subject count across the two classes.
    pub fn with_total_subjects(mut self, total: usize) -> Result<Self> {
        if total < 2 || total % 2 != 0 {
            return Err(Error::Config(format!(
                "subject count must be even and at least 2, got {total}"
            )));
        }
        self.subjects_per_class = total / 2;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.spectral_radius > 0.0 && self.spectral_radius < 1.0) {
            return fail(format!(
                "spectral radius must lie in (0, 1) for stationarity, got {}",
                self.spectral_radius
            ));
        }
        if self.subjects_per_class == 0 || self.sessions_per_subject == 0 || self.utterances_per_session == 0 {
            return fail("subject, session and utterance counts must be >= 1".into());
        }
        if !(self.min_duration_s > 0.0 && self.min_duration_s <= self.max_duration_s) {
            return fail("durations must satisfy 0 < min <= max".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail("noise must be finite and non-negative".into());
        }
        let (lo, hi) = self.freq_band_hz;
        if !(lo > 0.0 && lo <= hi) || !(0.0..1.0).contains(&self.freq_jitter) {
            return fail("frequency band must be positive and ordered, jitter in [0, 1)".into());
        }
        for s in [&self.video, &self.audio] {
            let m = s.channels();
            if s.k_simple == 0 || s.k_complex == 0 || s.k_simple > m || s.k_complex > m {
                return fail(format!("{}: latent dims must be in 1..={m}", s.modality));
            }
            if !(s.rate_hz > 0.0) {
                return fail(format!("{}: rate must be positive", s.modality));
            }
            if hi * (1.0 + self.freq_jitter) >= s.rate_hz / 2.0 {
                return fail(format!("{}: frequency band exceeds Nyquist", s.modality));
            }
        }
        if !self.video.modality.is_video() || self.audio.modality.is_video() {
            return fail("video stream must be FAU and audio stream must be an audio modality".into());
        }
        Ok(())
    }
}

/// A cohort held in memory before it is written out.
#[derive(Debug, Clone)]
pub struct SynthCohort {
    /// Manifest with paths relative to the output directory.
    pub manifest: CohortManifest,
    pub streams: Vec<(PathBuf, FeatureStream)>,
}

impl SynthCohort {
    /// Writes `manifest.json` and every stream under `dir`.
    pub fn write(&self, dir: &Path) -> Result<CohortManifest> {
        for (rel, stream) in &self.streams {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            save_stream(stream, &path)?;
        }
        let mut manifest = self.manifest.clone();
        manifest.root = dir.to_path_buf();
        manifest.save(&dir.join("manifest.json"))?;
        Ok(manifest)
    }
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Random M×M orthonormal matrix (Gram-Schmidt on Gaussian columns), row-major.
fn random_orthonormal(m: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(m);
    while cols.len() < m {
        let mut v: Vec<f64> = (0..m).map(|_| gaussian(rng)).collect();
        for _ in 0..2 {
            for u in &cols {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut q = vec![0.0; m * m];
    for (c, col) in cols.iter().enumerate() {
        for r in 0..m {
            q[r * m + c] = col[r];
        }
    }
    q
}

/// M×k loading: the first k orthonormal columns, rows rescaled to unit norm.
fn loading_matrix(m: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let q = random_orthonormal(m, rng);
    let mut w = vec![0.0; m * k];
    for r in 0..m {
        let row = &q[r * m..r * m + k];
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for c in 0..k {
            w[r * k + c] = row[c] / norm;
        }
    }
    w
}

/// Unit-variance AR(2) process with poles `radius·e^{±iω}`, `ω = 2π·freq/rate`.
pub fn ar2_process(n: usize, freq_hz: f64, radius: f64, rate_hz: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let w = 2.0 * PI * freq_hz / rate_hz;
    let a1 = 2.0 * radius * w.cos();
    let a2 = -radius * radius;
    let var = (1.0 - a2) / ((1.0 + a2) * ((1.0 - a2).powi(2) - a1 * a1));
    let scale = 1.0 / var.sqrt();
    let (mut z1, mut z2) = (0.0, 0.0);
    let mut out = Vec::with_capacity(n);
    for t in 0..n + BURN_IN {
        let z = a1 * z1 + a2 * z2 + gaussian(rng);
        z2 = z1;
        z1 = z;
        if t >= BURN_IN {
            out.push(z * scale);
        }
    }
    out
}

/// Linear interpolation of a base-rate signal at `rate_hz` for `n_out` frames.
fn resample(signal: &[f64], rate_hz: f64, n_out: usize) -> Vec<f64> {
    (0..n_out)
        .map(|t| {
            let pos = t as f64 * BASE_RATE_HZ / rate_hz;
            let i = pos.floor() as usize;
            let frac = pos - i as f64;
            match (signal.get(i), signal.get(i + 1)) {
                (Some(a), Some(b)) => a + frac * (b - a),
                (Some(a), None) => *a,
                _ => *signal.last().expect("nonempty signal"),
            }
        })
        .collect()
}

struct ClassModel {
    video_loading: Vec<f64>,
    audio_loading: Vec<f64>,
    shared: usize,
    video_private: usize,
    audio_private: usize,
}

impl ClassModel {
    fn new(spec: &SynthSpec, label: Label, rng: &mut ChaCha8Rng) -> Self {
        let kv = spec.video.k(label);
        let ka = spec.audio.k(label);
        let shared = kv.min(ka) / 2;
        ClassModel {
            video_loading: loading_matrix(spec.video.channels(), kv, rng),
            audio_loading: loading_matrix(spec.audio.channels(), ka, rng),
            shared,
            video_private: kv - shared,
            audio_private: ka - shared,
        }
    }

    fn n_latents(&self) -> usize {
        self.shared + self.video_private + self.audio_private
    }
}

fn mix(
    latents: &[&Vec<f64>],
    loading: &[f64],
    stream: &StreamSpec,
    n_base: usize,
    noise: f64,
    offsets: &[f64],
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let m = stream.channels();
    let k = latents.len();
    let n_out = ((n_base as f64) * stream.rate_hz / BASE_RATE_HZ).floor() as usize;
    let mut base = vec![0.0; n_base * m];
    for t in 0..n_base {
        for c in 0..m {
            let mut v = 0.0;
            for (l, z) in latents.iter().enumerate() {
                v += loading[c * k + l] * z[t];
            }
            base[t * m + c] = v;
        }
    }
    let mut frames = vec![0.0; n_out * m];
    for c in 0..m {
        let channel: Vec<f64> = (0..n_base).map(|t| base[t * m + c]).collect();
        let resampled = if stream.rate_hz == BASE_RATE_HZ {
            channel
        } else {
            resample(&channel, stream.rate_hz, n_out)
        };
        for (t, v) in resampled.into_iter().take(n_out).enumerate() {
            frames[t * m + c] = offsets[c] + v + noise * gaussian(rng);
        }
    }
    frames
}

/// Generates the cohort in memory; identical specs give identical cohorts.
pub fn synthesize(spec: &SynthSpec) -> Result<SynthCohort> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let complex = ClassModel::new(spec, Label::Sz, &mut rng);
    let simple = ClassModel::new(spec, Label::Hc, &mut rng);
    let max_latents = complex.n_latents().max(simple.n_latents());
    let (lo, hi) = spec.freq_band_hz;
    // log-spaced base resonances shared by the cohort
    let base_freqs: Vec<f64> = (0..max_latents)
        .map(|l| {
            let u = if max_latents == 1 { 0.5 } else { l as f64 / (max_latents - 1) as f64 };
            lo * (hi / lo).powf(u)
        })
        .collect();
    let video_offsets: Vec<f64> = (0..spec.video.channels()).map(|_| rng.random_range(0.5..2.0)).collect();
    let audio_offsets: Vec<f64> = (0..spec.audio.channels()).map(|_| rng.random_range(-1.0..1.0)).collect();

    let subjects: Vec<(usize, Label)> = [Label::Sz, Label::Hc]
        .into_iter()
        .flat_map(|label| (0..spec.subjects_per_class).map(move |i| (i, label)))
        .collect();

    let per_subject: Vec<(SubjectRecord, Vec<(PathBuf, FeatureStream)>)> = subjects
        .par_iter()
        .enumerate()
        .map(|(index, &(i, label))| {
            let model = match label {
                Label::Sz => &complex,
                Label::Hc => &simple,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, index as u64 + 1));
            let subject_id = format!("{}{:02}", label.as_str(), i + 1);
            let mut freqs = base_freqs.clone();
            rng_shuffle(&mut freqs, &mut rng);
            for f in &mut freqs {
                *f *= 1.0 + spec.freq_jitter * (2.0 * rng.random::<f64>() - 1.0);
            }
            let mut streams = Vec::new();
            let mut sessions = Vec::new();
            for s in 0..spec.sessions_per_subject {
                let session_id = format!("{subject_id}-s{}", s + 1);
                let mut utterances = Vec::new();
                for u in 0..spec.utterances_per_session {
                    let utterance_id = format!("u{:02}", u + 1);
                    let duration = rng.random_range(spec.min_duration_s..=spec.max_duration_s);
                    let n_base = (duration * BASE_RATE_HZ).round() as usize;
                    let latents: Vec<Vec<f64>> = (0..model.n_latents())
                        .map(|l| ar2_process(n_base, freqs[l], spec.spectral_radius, BASE_RATE_HZ, &mut rng))
                        .collect();
                    let shared = &latents[..model.shared];
                    let video_private = &latents[model.shared..model.shared + model.video_private];
                    let audio_private = &latents[model.shared + model.video_private..];
                    let video_latents: Vec<&Vec<f64>> = shared.iter().chain(video_private).collect();
                    let audio_latents: Vec<&Vec<f64>> = shared.iter().chain(audio_private).collect();
                    for (stream_spec, latents, loading, offsets) in [
                        (&spec.video, &video_latents, &model.video_loading, &video_offsets),
                        (&spec.audio, &audio_latents, &model.audio_loading, &audio_offsets),
                    ] {
                        let frames = mix(latents, loading, stream_spec, n_base, spec.noise, offsets, &mut rng);
                        let stream = FeatureStream::new(
                            stream_spec.modality,
                            stream_spec.modality.default_channel_names(),
                            stream_spec.rate_hz,
                            frames,
                            (&subject_id, &session_id, &utterance_id),
                        )
                        .expect("generated stream is well formed");
                        let rel = PathBuf::from("streams")
                            .join(&subject_id)
                            .join(&session_id)
                            .join(format!("{utterance_id}_{}.csv", stream_spec.modality));
                        utterances.push(UtteranceRecord {
                            utterance_id: utterance_id.clone(),
                            modality: stream_spec.modality,
                            path: rel.clone(),
                        });
                        streams.push((rel, stream));
                    }
                }
                sessions.push(SessionRecord {
                    session_id,
                    utterances,
                });
            }
            let record = SubjectRecord {
                subject_id,
                label,
                sessions,
                bprs_total: None,
                hamd: None,
            };
            (record, streams)
        })
        .collect();

    let mut subjects = Vec::new();
    let mut streams = Vec::new();
    for (record, s) in per_subject {
        subjects.push(record);
        streams.extend(s);
    }
    Ok(SynthCohort {
        manifest: CohortManifest {
            subjects,
            root: PathBuf::new(),
        },
        streams,
    })
}

fn rng_shuffle(values: &mut [f64], rng: &mut ChaCha8Rng) {
    for i in (1..values.len()).rev() {
        let j = rng.random_range(0..=i);
        values.swap(i, j);
    }
}

/// Generates the cohort and writes it under `dir`.
pub fn generate_cohort(spec: &SynthSpec, dir: &Path) -> Result<CohortManifest> {
    synthesize(spec)?.write(dir)
}

/// Textbook two-pass Pearson correlation, kept independent of the correlation module.
pub fn oracle_pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::EmptyInput);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_examples() {
        assert!((oracle_pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((oracle_pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!((oracle_pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-15);
        assert!(matches!(oracle_pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::ZeroVariance)));
    }

    #[test]
    fn spectral_radius_bound() {
        let spec = SynthSpec {
            spectral_radius: 1.2,
            ..SynthSpec::default()
        };
        assert!(matches!(synthesize(&spec), Err(Error::Config(_))));
        let spec = SynthSpec {
            audio: StreamSpec {
                k_complex: 9,
                ..SynthSpec::default().audio
            },
            ..SynthSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn ar2_is_stationary_with_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = ar2_process(200_000, 2.0, 0.85, 100.0, &mut rng);
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
        assert!(mean.abs() < 0.05, "{mean}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
        let half = x.len() / 2;
        let m1 = x[..half].iter().sum::<f64>() / half as f64;
        let m2 = x[half..].iter().sum::<f64>() / half as f64;
        assert!((m1 - m2).abs() < 0.1, "drift {m1} vs {m2}");
    }

    #[test]
    fn loading_rows_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = loading_matrix(10, 3, &mut rng);
        for r in 0..10 {
            let n: f64 = w[r * 3..r * 3 + 3].iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn small_cohort_is_deterministic() {
        let spec = SynthSpec {
            subjects_per_class: 1,
            utterances_per_session: 1,
            sessions_per_subject: 1,
            ..SynthSpec::default()
        };
        let a = synthesize(&spec).unwrap();
        let b = synthesize(&spec).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.streams, b.streams);
        assert_eq!(a.manifest.subjects.len(), 2);
        assert_eq!(a.streams.len(), 4);
    }
}
