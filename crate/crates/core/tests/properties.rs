use coordsync::correlation::{fvtc, tdec, Frames};
use coordsync::eigen::{group_average, Eigenspectrum};
use coordsync::ingest::Label;
use coordsync::models::{ModelConfig, ModelGraph};
use coordsync::synth::oracle_pearson;
use coordsync::tensor::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
use coordsync::train::aggregate_subject;
use proptest::prelude::*;

/// Row-major F×M frames with a per-channel offset so no channel is constant.
fn frames_strategy(max_channels: usize, min_frames: usize, max_frames: usize) -> impl Strategy<Value = (Vec<f64>, usize)> {
    (1..=max_channels, min_frames..=max_frames).prop_flat_map(|(m, f)| {
        (prop::collection::vec(-50.0f64..50.0, f * m), Just(m)).prop_map(|(mut data, m)| {
            for (i, v) in data.iter_mut().enumerate() {
                *v += ((i / m) % 7) as f64 * (1.0 + (i % m) as f64);
            }
            (data, m)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tdec_matches_pairwise_pearson((data, m) in frames_strategy(3, 40, 120), n in 2usize..5, scale in 1usize..4) {
        let t = tdec(Frames::new(&data, m), n, scale, 20).unwrap();
        let f = data.len() / m;
        let w = f - (n - 1) * scale;
        let ch = |c: usize, start: usize| -> Vec<f64> { (start..start + w).map(|t| data[t * m + c]).collect() };
        for a in 0..m * n {
            for b in 0..m * n {
                let want = oracle_pearson(&ch(a / n, (a % n) * scale), &ch(b / n, (b % n) * scale)).unwrap();
                prop_assert!((t.values[(a, b)] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn correlations_ignore_channel_gain_and_offset(
        (data, m) in frames_strategy(3, 60, 120),
        gain in 1e-3f64..1e3,
        offset in -1e3f64..1e3,
    ) {
        let moved: Vec<f64> = data.iter().map(|v| gain * v + offset).collect();
        let a = tdec(Frames::new(&data, m), 3, 2, 20).unwrap();
        let b = tdec(Frames::new(&moved, m), 3, 2, 20).unwrap();
        for (x, y) in a.values.as_slice().iter().zip(b.values.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
        let a = fvtc(Frames::new(&data, m), 10, 20).unwrap();
        let b = fvtc(Frames::new(&moved, m), 10, 20).unwrap();
        for (x, y) in a.values.as_slice().iter().zip(b.values.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn group_average_ignores_order(
        rows in prop::collection::vec((prop::collection::vec(0.0f64..10.0, 6), any::<bool>()), 2..12),
        rotate in 0usize..12,
    ) {
        let spectra: Vec<Eigenspectrum> = rows
            .iter()
            .enumerate()
            .map(|(i, (values, sz))| Eigenspectrum {
                values: values.clone(),
                source: None,
                // keep both classes present
                label: Some(if i == 0 || (i > 1 && *sz) { Label::Sz } else { Label::Hc }),
            })
            .collect();
        let mut shuffled = spectra.clone();
        shuffled.rotate_left(rotate % spectra.len());
        shuffled.reverse();
        for label in [Label::Sz, Label::Hc] {
            let a = group_average(&spectra, label).unwrap();
            let b = group_average(&shuffled, label).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn aggregation_ignores_segment_order(
        ps in prop::collection::vec(0.0f64..1.0, 1..20),
        fraction in 0.05f64..1.0,
        rotate in 0usize..20,
    ) {
        let probs: Vec<[f64; 2]> = ps.iter().map(|&p| [p, 1.0 - p]).collect();
        let mut moved = probs.clone();
        moved.rotate_left(rotate % probs.len());
        moved.reverse();
        prop_assert_eq!(aggregate_subject(&probs, fraction).unwrap(), aggregate_subject(&moved, fraction).unwrap());
    }
}

#[test]
fn checkpoint_roundtrip_restores_every_tensor() {
    let config = ModelConfig::tdec_cnn(coordsync::ingest::Modality::Tv);
    let graph = ModelGraph::<f32>::build(&config, 3).unwrap();
    let bytes = encode_checkpoint(&graph.store);
    let decoded = decode_checkpoint(&bytes).unwrap();
    assert_eq!(decoded.len(), graph.store.named_tensors().len());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    write_checkpoint(&path, &graph.store).unwrap();
    let mut fresh = ModelGraph::<f32>::build(&config, 99).unwrap();
    assert_ne!(fresh.store, graph.store);
    read_checkpoint(&path, &mut fresh.store).unwrap();
    assert_eq!(fresh.store.named_tensors(), graph.store.named_tensors());
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}
