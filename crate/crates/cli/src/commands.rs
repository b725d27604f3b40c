use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use coordsync::correlation::{
    fvtc_stream, read_records, tdec_stream, write_matrix_csv, write_records, CoordConfig, MatrixKind, MatrixRecord,
    SourceId,
};
use coordsync::dataset::build_dataset;
use coordsync::eigen::{spectrum_of, write_spectrum_csv, read_spectrum_csv, Eigenspectrum};
use coordsync::ingest::{
    load_manifest, load_stream, save_stream, segment_cohort, sidecar_path, CohortManifest, Label, Modality,
    RepairPolicy, SegmentConfig, StreamSidecar,
};
use coordsync::models::{grad_check, ModelConfig, ModelGraph};
use coordsync::plot::SpectrumPlot;
use coordsync::synth::{derive_seed, generate_cohort, SynthSpec};
use coordsync::tensor::{GradCheckOptions, Tensor};
use coordsync::train::{config_hash, evaluate, grid_search, run_loso, FoldResult, TrainConfig};
use coordsync::Error;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::layer::need;
use crate::{
    CliError, CliResult, EigenArgs, FvtcArgs, GradcheckArgs, PlotArgs, ReportArgs, SegmentArgs, SynthArgs, TdecArgs,
    TrainArgs,
};

/// Metadata stored next to each `.cord` matrix file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MatrixMeta {
    kind: MatrixKind,
    modality: Modality,
    source: SourceId,
    /// One record per scale for TDEC files.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    scales: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_delays: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    d: Option<usize>,
}

/// Metadata stored next to each eigenspectrum CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SpectrumMeta {
    modality: Modality,
    scale: usize,
    source: SourceId,
}

#[derive(Serialize, Deserialize)]
struct FoldsFile {
    config_hash: String,
    folds: Vec<FoldResult>,
}

/// Refuses to write into a non-empty directory unless `force` is set.
fn prepare_out(dir: &Path, force: bool) -> CliResult {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(Error::Validation(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            ))
            .into());
        }
    }
    create_dir(dir)
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> CliResult {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())).into())
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes") + "\n"
}

fn parse_value<T: DeserializeOwned>(flag: &str, raw: &str) -> CliResult<T> {
    serde_json::from_value(serde_json::Value::String(raw.to_string()))
        .map_err(|_| CliError::Usage(format!("invalid --{flag} value {raw:?}")))
}

/// Files under `dir` with extension `ext`, in sorted path order.
fn files_with_ext(dir: &Path, ext: &str) -> CliResult<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Validation(format!("{} is not a directory", dir.display())).into());
    }
    let mut files = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Validation(format!("cannot walk {}: {e}", dir.display())))?;
        if entry.file_type().is_file() && entry.path().extension().is_some_and(|e| e == ext) {
            files.push(entry.into_path());
        }
    }
    Ok(files)
}

/// Output path mirroring `file`'s position under `input`, with a new file name suffix.
fn mirrored(input: &Path, out: &Path, file: &Path, suffix: &str) -> PathBuf {
    let rel = file.strip_prefix(input).unwrap_or(file);
    let stem = rel.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.join(rel.parent().unwrap_or(Path::new(""))).join(format!("{stem}{suffix}"))
}

/// Stream CSVs under `dir`, identified by a parseable sidecar.
fn stream_files(dir: &Path) -> CliResult<Vec<(PathBuf, StreamSidecar)>> {
    let mut found = Vec::new();
    for path in files_with_ext(dir, "csv")? {
        let side = sidecar_path(&path);
        if let Ok(text) = fs::read_to_string(&side) {
            if let Ok(meta) = serde_json::from_str::<StreamSidecar>(&text) {
                found.push((path, meta));
            }
        }
    }
    if found.is_empty() {
        return Err(Error::Validation(format!("no segment streams found under {}", dir.display())).into());
    }
    Ok(found)
}

fn summarize(what: &str, written: usize, skipped: &[(PathBuf, String)]) {
    for (path, why) in skipped {
        log::warn!("skipped {}: {why}", path.display());
    }
    println!("{what}: {written} written, {} skipped", skipped.len());
}

pub fn segment(a: SegmentArgs) -> CliResult {
    let manifest_path = need(&a.manifest, "manifest")?;
    let out = need(&a.out, "out")?;
    let mut config = SegmentConfig::default();
    if let Some(c) = a.chunk {
        config.chunk_s = c;
    }
    if let Some(m) = a.min {
        config.min_s = m;
    }
    if let Some(r) = &a.repair {
        config.repair = parse_value::<RepairPolicy>("repair", r)?;
    }
    if !(config.chunk_s > 0.0 && config.min_s > 0.0 && config.min_s <= config.chunk_s) {
        return Err(CliError::Usage("need 0 < --min <= --chunk".into()));
    }
    let manifest = load_manifest(&manifest_path)?;
    let modalities: Vec<Modality> = if a.modalities.is_empty() {
        Modality::ALL.to_vec()
    } else {
        a.modalities
            .iter()
            .map(|m| m.parse().map_err(|_| CliError::Usage(format!("unknown modality {m:?}"))))
            .collect::<CliResult<_>>()?
    };
    prepare_out(&out, a.force)?;

    let (segments, report) = segment_cohort(&manifest, &modalities, &config)?;
    let paths: Vec<PathBuf> = segments
        .iter()
        .map(|s| {
            let st = &s.stream;
            out.join(&st.subject_id)
                .join(&st.session_id)
                .join(format!("{}_{}_seg{:02}.csv", st.utterance_id, st.modality, s.ordinal))
        })
        .collect();
    segments
        .par_iter()
        .zip(&paths)
        .map(|(s, path)| {
            create_dir(path.parent().expect("segment path has a parent"))?;
            save_stream(&s.stream, path).map_err(CliError::from)
        })
        .collect::<CliResult<Vec<()>>>()?;

    let mut index = String::from("subject_id,session_id,utterance_id,modality,segment,start_s,end_s,path\n");
    for (s, path) in segments.iter().zip(&paths) {
        let st = &s.stream;
        let _ = writeln!(
            index,
            "{},{},{},{},{},{},{},{}",
            st.subject_id,
            st.session_id,
            st.utterance_id,
            st.modality,
            s.ordinal,
            s.start_s,
            s.end_s,
            path.strip_prefix(&out).unwrap_or(path).display()
        );
    }
    write(&out.join("segments_index.csv"), index)?;
    write(&out.join("drop_report.json"), to_json(&report))?;
    println!(
        "{} utterances, {} segments, {} dropped",
        report.utterances_seen,
        report.segments_kept,
        report.dropped.len()
    );
    Ok(())
}

/// Shared driver for `tdec` and `fvtc`: one matrix file per segment stream.
fn correlate(
    input: &Path,
    out: &Path,
    csv: bool,
    what: &str,
    build: impl Fn(&StreamSidecar) -> CoordConfig + Sync,
    compute: impl Fn(&coordsync::ingest::FeatureStream, &CoordConfig) -> coordsync::Result<(Vec<MatrixRecord>, MatrixMeta)> + Sync,
) -> CliResult {
    let streams = stream_files(input)?;
    let outcomes: Vec<Result<(), (PathBuf, String)>> = streams
        .par_iter()
        .map(|(path, side)| {
            let fail = |e: String| (path.clone(), e);
            let config = build(side);
            let stream = load_stream(path, side.modality, RepairPolicy::Reject).map_err(|e| fail(e.to_string()))?;
            let (records, meta) = compute(&stream, &config).map_err(|e| fail(e.to_string()))?;
            let target = mirrored(input, out, path, ".cord");
            if let Some(parent) = target.parent() {
                fs::create_dir_all(parent).map_err(|e| fail(e.to_string()))?;
            }
            write_records(&target, &records).map_err(|e| fail(e.to_string()))?;
            fs::write(target.with_extension("json"), to_json(&meta)).map_err(|e| fail(e.to_string()))?;
            if csv {
                for (i, r) in records.iter().enumerate() {
                    let p = mirrored(input, out, path, &format!("_{i}.csv"));
                    write_matrix_csv(&p, &r.values).map_err(|e| fail(e.to_string()))?;
                }
            }
            Ok(())
        })
        .collect();
    let written = outcomes.iter().filter(|o| o.is_ok()).count();
    let skipped: Vec<(PathBuf, String)> = outcomes.into_iter().filter_map(Result::err).collect();
    summarize(what, written, &skipped);
    Ok(())
}

pub fn tdec(a: TdecArgs) -> CliResult {
    let input = need(&a.input, "in")?;
    let out = need(&a.out, "out")?;
    let probe = |side: &StreamSidecar| {
        let mut c = CoordConfig::for_modality(side.modality);
        if !a.scales.is_empty() {
            c.scales = a.scales.clone();
        }
        if let Some(n) = a.delays {
            c.n_delays = n;
        }
        if let Some(m) = a.min_frames {
            c.min_frames = m;
        }
        c
    };
    // flag errors are usage errors, caught before any output is written
    probe(&StreamSidecar {
        modality: Modality::Fau,
        rate_hz: 1.0,
        subject_id: String::new(),
        session_id: String::new(),
        utterance_id: String::new(),
        segment_index: None,
    })
    .validate()
    .map_err(|e| CliError::Usage(e.to_string()))?;
    prepare_out(&out, a.force)?;
    correlate(&input, &out, a.csv, "tdec", probe, |stream, config| {
        let mats = tdec_stream(stream, config)?;
        let meta = MatrixMeta {
            kind: MatrixKind::Tdec,
            modality: stream.modality,
            source: SourceId::of(stream),
            scales: config.scales.clone(),
            n_delays: Some(config.n_delays),
            d: None,
        };
        Ok((mats.iter().map(MatrixRecord::from).collect(), meta))
    })
}

pub fn fvtc(a: FvtcArgs) -> CliResult {
    let input = need(&a.input, "in")?;
    let out = need(&a.out, "out")?;
    if a.d == Some(0) || a.min_frames.is_some_and(|m| m < 2) {
        return Err(CliError::Usage("--D must be positive and --min-frames at least 2".into()));
    }
    prepare_out(&out, a.force)?;
    let build = |side: &StreamSidecar| {
        let mut c = CoordConfig::for_modality(side.modality);
        if let Some(d) = a.d {
            c.fvtc_d = d;
        }
        if let Some(m) = a.min_frames {
            c.min_frames = m;
        }
        c
    };
    correlate(&input, &out, a.csv, "fvtc", build, |stream, config| {
        let map = fvtc_stream(stream, config)?;
        let meta = MatrixMeta {
            kind: MatrixKind::Fvtc,
            modality: stream.modality,
            source: SourceId::of(stream),
            scales: Vec::new(),
            n_delays: None,
            d: Some(config.fvtc_d),
        };
        Ok((vec![MatrixRecord::from(&map)], meta))
    })
}

pub fn eigen(a: EigenArgs) -> CliResult {
    let input = need(&a.input, "in")?;
    let out = need(&a.out, "out")?;
    let files = files_with_ext(&input, "cord")?;
    if files.is_empty() {
        return Err(Error::Validation(format!("no matrix files under {}", input.display())).into());
    }
    prepare_out(&out, a.force)?;
    let outcomes: Vec<Result<usize, (PathBuf, String)>> = files
        .par_iter()
        .map(|path| {
            let fail = |e: String| (path.clone(), e);
            let meta: MatrixMeta = read_json(&path.with_extension("json")).map_err(|e| fail(describe(e)))?;
            if meta.kind != MatrixKind::Tdec {
                return Err(fail("not a TDEC matrix file".into()));
            }
            let records = read_records(path).map_err(|e| fail(e.to_string()))?;
            if records.len() != meta.scales.len() {
                return Err(fail(format!("{} records for {} scales", records.len(), meta.scales.len())));
            }
            for (rec, &scale) in records.iter().zip(&meta.scales) {
                let values = spectrum_of(&rec.values).map_err(|e| fail(e.to_string()))?;
                let target = mirrored(&input, &out, path, &format!("_scale{scale}.csv"));
                if let Some(parent) = target.parent() {
                    fs::create_dir_all(parent).map_err(|e| fail(e.to_string()))?;
                }
                write_spectrum_csv(&target, &values).map_err(|e| fail(e.to_string()))?;
                let side = SpectrumMeta {
                    modality: meta.modality,
                    scale,
                    source: meta.source.clone(),
                };
                fs::write(target.with_extension("json"), to_json(&side)).map_err(|e| fail(e.to_string()))?;
            }
            Ok(records.len())
        })
        .collect();
    let written = outcomes.iter().filter_map(|o| o.as_ref().ok()).sum();
    let skipped: Vec<(PathBuf, String)> = outcomes.into_iter().filter_map(Result::err).collect();
    summarize("eigenspectra", written, &skipped);
    Ok(())
}

fn describe(e: CliError) -> String {
    match e {
        CliError::Usage(m) => m,
        CliError::Domain(e) => e.to_string(),
    }
}

/// Subject labels from a manifest JSON or a `subject_id,label` CSV.
fn load_labels(path: &Path) -> CliResult<HashMap<String, Label>> {
    if path.extension().is_some_and(|e| e == "json") {
        let manifest: CohortManifest = read_json(path)?;
        return Ok(manifest.subjects.into_iter().map(|s| (s.subject_id, s.label)).collect());
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut labels = HashMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let (Some(id), Some(label)) = (rec.get(0), rec.get(1)) else {
            return Err(Error::Parse(format!("{}: expected subject_id,label rows", path.display())).into());
        };
        labels.insert(id.trim().to_string(), label.trim().parse()?);
    }
    Ok(labels)
}

pub fn plot_eigenspectra(a: PlotArgs) -> CliResult {
    let input = need(&a.input, "in")?;
    let labels_path = need(&a.labels, "labels")?;
    let out = need(&a.out, "out")?;
    let labels = load_labels(&labels_path)?;

    let mut groups: BTreeMap<(Modality, usize), Vec<Eigenspectrum>> = BTreeMap::new();
    for path in files_with_ext(&input, "csv")? {
        let Ok(meta) = read_json::<SpectrumMeta>(&path.with_extension("json")) else {
            continue;
        };
        let Some(&label) = labels.get(&meta.source.subject_id) else {
            log::warn!("no label for subject {:?}; {} ignored", meta.source.subject_id, path.display());
            continue;
        };
        groups.entry((meta.modality, meta.scale)).or_default().push(Eigenspectrum {
            values: read_spectrum_csv(&path)?,
            source: Some(meta.source),
            label: Some(label),
        });
    }
    if groups.is_empty() {
        return Err(Error::Validation(format!("no labeled eigenspectra under {}", input.display())).into());
    }
    let plots = groups
        .iter()
        .map(|(key, spectra)| Ok((key, SpectrumPlot::from_spectra(spectra)?)))
        .collect::<CliResult<Vec<_>>>()?;
    prepare_out(&out, a.force)?;
    for ((modality, scale), plot) in plots {
        let stem = format!("eigenspectra_{}_scale{scale}", modality.as_str().to_lowercase());
        let title = a
            .title
            .clone()
            .unwrap_or_else(|| format!("{modality} eigenspectra, delay scale {scale}"));
        let (svg, csv) = plot.write(&out, &stem, &title)?;
        println!("{} ({} SZ, {} HC) -> {}, {}", stem, plot.n_sz, plot.n_hc, svg.display(), csv.display());
    }
    Ok(())
}

pub fn synth(a: SynthArgs) -> CliResult {
    let out = need(&a.out, "out")?;
    let mut spec = match &a.spec {
        Some(path) => read_json::<SynthSpec>(path)?,
        None => SynthSpec::preset(a.preset.as_deref().unwrap_or("complex-vs-simple"))
            .map_err(|e| CliError::Usage(e.to_string()))?,
    };
    if let Some(n) = a.subjects {
        spec = spec.with_total_subjects(n).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    prepare_out(&out, a.force)?;
    let manifest = generate_cohort(&spec, &out)?;
    write(&out.join("synth_spec.json"), to_json(&spec))?;
    println!(
        "{} subjects ({} SZ, {} HC) written to {}",
        manifest.subjects.len(),
        manifest.count_label(Label::Sz),
        manifest.count_label(Label::Hc),
        out.display()
    );
    Ok(())
}

struct TrainSetup {
    manifest: CohortManifest,
    model: ModelConfig,
    train: TrainConfig,
    segment: SegmentConfig,
    out: PathBuf,
}

fn train_setup(a: &TrainArgs) -> CliResult<TrainSetup> {
    let manifest_path = need(&a.manifest, "manifest")?;
    let model: ModelConfig = read_json(&need(&a.model, "model")?)?;
    let mut train: TrainConfig = match &a.train {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.lr {
        train.lr = v;
    }
    if let Some(v) = a.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = a.max_epochs {
        train.max_epochs = v;
    }
    if let Some(v) = a.patience {
        train.patience = v;
    }
    if let Some(v) = a.seed {
        train.seed = v;
    }
    if let Some(p) = &a.precision {
        train.precision = parse_value("precision", p)?;
    }
    if let Some(k) = a.grid_folds {
        train.grid_folds = Some(k);
    }
    model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut segment = SegmentConfig::default();
    if let Some(c) = a.chunk {
        segment.chunk_s = c;
    }
    if let Some(m) = a.min {
        segment.min_s = m;
    }
    Ok(TrainSetup {
        manifest: load_manifest(&manifest_path)?,
        model,
        train,
        segment,
        out: need(&a.out, "out")?,
    })
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn train(a: TrainArgs) -> CliResult {
    let s = train_setup(&a)?;
    prepare_out(&s.out, a.force)?;
    let hash = config_hash(&s.model, &s.train);
    let mut log = format!("started {}\ncoordsync {}\nconfig {hash}\n", unix_now(), coordsync::VERSION);
    write(&s.out.join("config/model.json"), to_json(&s.model))?;
    write(&s.out.join("config/train.json"), to_json(&s.train))?;
    write(&s.out.join("config/segment.json"), to_json(&s.segment))?;

    let dataset = build_dataset(&s.manifest, &s.model, &s.segment)?;
    let _ = writeln!(
        log,
        "samples {} ({} SZ, {} HC), skipped {}",
        dataset.samples.len(),
        dataset.count_label(Label::Sz),
        dataset.count_label(Label::Hc),
        dataset.skipped.len()
    );
    write(
        &s.out.join("dataset.json"),
        to_json(&serde_json::json!({
            "config_hash": hash,
            "drops": dataset.drops,
            "skipped": dataset.skipped,
        })),
    )?;

    let fold_dir = s.out.join("folds");
    create_dir(&fold_dir)?;
    let (report, folds) = run_loso(&dataset, &s.model, &s.train, Some(&fold_dir))?;
    write(
        &s.out.join("folds.json"),
        to_json(&FoldsFile {
            config_hash: hash.clone(),
            folds,
        }),
    )?;
    write(&s.out.join("report.json"), report.to_json())?;
    let table = report.to_table();
    write(&s.out.join("report.txt"), &table)?;
    let _ = writeln!(log, "accuracy {:.4} ({}/{})", report.accuracy, report.correct, report.n_folds);
    write(&s.out.join("run.log"), log)?;
    print!("{table}");
    Ok(())
}

pub fn report(a: ReportArgs) -> CliResult {
    let run = need(&a.run, "run")?;
    let folds: FoldsFile = read_json(&run.join("folds.json"))?;
    let report = evaluate(&folds.folds, &folds.config_hash)?;
    match a.format.as_deref().unwrap_or("table") {
        "table" => print!("{}", report.to_table()),
        "json" => print!("{}", report.to_json()),
        other => return Err(CliError::Usage(format!("unknown --format {other:?}; use table or json"))),
    }
    Ok(())
}

pub fn gridsearch(a: TrainArgs) -> CliResult {
    let s = train_setup(&a)?;
    prepare_out(&s.out, a.force)?;
    write(&s.out.join("config/model.json"), to_json(&s.model))?;
    write(&s.out.join("config/train.json"), to_json(&s.train))?;
    let dataset = build_dataset(&s.manifest, &s.model, &s.segment)?;
    let result = grid_search(&dataset, &s.model, &s.train)?;
    write(&s.out.join("grid.json"), to_json(&result))?;
    println!("{:>10} {:>6} {:>12}", "lr", "batch", "val loss");
    for c in &result.cells {
        let loss = match (c.mean_val_loss, &c.error) {
            (Some(l), _) => format!("{l:.6}"),
            (None, Some(e)) => format!("failed: {e}"),
            (None, None) => "-".into(),
        };
        println!("{:>10e} {:>6} {:>12}", c.lr, c.batch_size, loss);
    }
    println!("best lr {:e} batch {}", result.best_lr, result.best_batch_size);
    Ok(())
}

/// Deterministic pseudo-random value in [-1, 1).
fn unit(seed: u64, i: u64) -> f64 {
    (derive_seed(seed, i) >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

pub fn gradcheck(a: GradcheckArgs) -> CliResult {
    let model: ModelConfig = read_json(&need(&a.model, "model")?)?;
    model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let batch = a.batch.unwrap_or(2);
    if batch == 0 {
        return Err(CliError::Usage("--batch must be positive".into()));
    }
    let seed = a.seed.unwrap_or(0);
    let mut options = GradCheckOptions {
        seed,
        ..Default::default()
    };
    if let Some(t) = a.tolerance {
        options.tolerance = t;
    }
    if let Some(n) = a.samples {
        options.samples_per_param = n;
    }
    let mut graph = ModelGraph::<f64>::build(&model, seed)?;
    // zero-initialized biases put many relu inputs exactly on the kink
    for (k, p) in graph.store.params_mut().iter_mut().enumerate() {
        if p.name.ends_with(".b") {
            for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                *v += 0.1 * unit(seed ^ 0xb1a5, ((k as u64) << 32) | i as u64);
            }
        }
    }
    let mut counter = 0u64;
    let inputs = model
        .input_shapes()
        .into_iter()
        .map(|shape| {
            let mut full = vec![batch];
            full.extend(shape);
            let n: usize = full.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    counter += 1;
                    unit(seed ^ 0x5eed, counter)
                })
                .collect();
            Tensor::new(full, data)
        })
        .collect::<coordsync::Result<Vec<_>>>()?;
    let labels: Vec<usize> = (0..batch).map(|i| i % 2).collect();
    let report = grad_check(&mut graph, &inputs, &labels, &options)?;
    println!("{:<28} {:>8} {:>8} {:>12}  result", "parameter", "checked", "excluded", "max rel err");
    for p in &report.params {
        println!(
            "{:<28} {:>8} {:>8} {:>12.3e}  {}",
            p.name,
            p.checked,
            p.excluded,
            p.max_rel_error,
            if p.passed { "ok" } else { "FAIL" }
        );
    }
    if report.passed() {
        println!("passed (max relative error {:.3e} < {:e})", report.max_rel_error(), report.tolerance);
        Ok(())
    } else {
        Err(Error::Validation(format!("gradient check failed for {}", report.failures().join(", "))).into())
    }
}
