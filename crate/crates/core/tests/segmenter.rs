use ctxembed::frontend::{FeatureMatrix, N_MELS};
use ctxembed::segmenter::{
    extract_windows, index_records, load_manifest, parse_phn, segment_windows, write_manifest, Corpus,
    LabelledSegment, ManifestRecord, PhoneMark, Subset, WindowConfig,
};
use proptest::prelude::*;

/// Every value encodes its frame index, so windows can be read back.
fn ramp(frames: usize) -> FeatureMatrix {
    let data = (0..frames).flat_map(|t| std::iter::repeat_n(t as f32, N_MELS)).collect();
    FeatureMatrix::new("u", data, 0.01).unwrap()
}

fn frame_ids(rows: &[f32]) -> Vec<usize> {
    rows.chunks_exact(N_MELS).map(|r| r[0] as usize).collect()
}

#[test]
fn window_counts() {
    let cfg = WindowConfig::new(10, 10);
    let one = extract_windows(&ramp(30), &cfg);
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].t, 10);
    assert_eq!(frame_ids(&one[0].x), (10..20).collect::<Vec<_>>());
    assert_eq!(frame_ids(&one[0].y), (0..10).chain(20..30).collect::<Vec<_>>());
    assert_eq!(extract_windows(&ramp(100), &cfg).len(), 71);
    assert!(extract_windows(&ramp(29), &cfg).is_empty());
}

fn seg(start: usize, end: usize) -> LabelledSegment {
    LabelledSegment {
        utterance_id: "u".into(),
        start_frame: start,
        end_frame: end,
        label: "aa".into(),
    }
}

#[test]
fn segment_window_counts() {
    let cfg = WindowConfig::new(10, 10);
    let feats = ramp(60);
    assert_eq!(segment_windows(&feats, &seg(20, 32), &cfg).len(), 3);
    assert_eq!(segment_windows(&feats, &seg(20, 30), &cfg).len(), 1);
    let short = segment_windows(&feats, &seg(20, 24), &cfg);
    assert_eq!(short.len(), 1);
    assert_eq!(frame_ids(&short[0].x), vec![20, 20, 20, 20, 21, 22, 23, 23, 23, 23]);
}

#[test]
fn segment_context_is_edge_replicated_at_utterance_start() {
    let cfg = WindowConfig::new(2, 3);
    let w = segment_windows(&ramp(10), &seg(0, 2), &cfg);
    assert_eq!(w.len(), 1);
    assert_eq!(frame_ids(&w[0].y), vec![0, 0, 0, 2, 3, 4]);
}

proptest! {
    #[test]
    fn segment_targets_stay_inside(start in 0usize..40, len in 1usize..30, c in 1usize..12, n in 1usize..8) {
        let feats = ramp(80);
        let cfg = WindowConfig::new(c, n);
        let windows = segment_windows(&feats, &seg(start, start + len), &cfg);
        prop_assert_eq!(windows.len(), if len >= c { len - c + 1 } else { 1 });
        for w in &windows {
            prop_assert_eq!(w.x.len(), c * N_MELS);
            prop_assert_eq!(w.y.len(), 2 * n * N_MELS);
            prop_assert!(frame_ids(&w.x).iter().all(|&f| f >= start && f < start + len));
        }
    }
}

#[test]
fn phn_maps_to_frames() {
    let marks = parse_phn("0 3050 h#\n3050 4559 sh\n").unwrap();
    assert_eq!(marks.len(), 2);
    let rec = ManifestRecord {
        utterance_id: "u1".into(),
        audio_path: "u1.wav".into(),
        speaker_id: "s1".into(),
        subset: Subset::Train,
        phones: marks,
    };
    let index = index_records(vec![rec], 160, None).unwrap();
    let p = &index.utterances[0].phones[0];
    assert_eq!((p.start_frame, p.end_frame, p.label.as_str()), (0, 19, "h#"));
    assert!(parse_phn("0 10").is_err());
}

fn record(id: &str, speaker: &str, phones: Vec<PhoneMark>) -> ManifestRecord {
    ManifestRecord {
        utterance_id: id.into(),
        audio_path: format!("{id}.wav"),
        speaker_id: speaker.into(),
        subset: Subset::Train,
        phones,
    }
}

fn mark(a: u64, b: u64, label: &str) -> PhoneMark {
    PhoneMark {
        start_sample: a,
        end_sample: b,
        label: label.into(),
    }
}

#[test]
fn manifest_groups_speakers_and_checks_audio() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.jsonl");
    write_manifest(
        &path,
        &[record("b1", "spk2", vec![mark(0, 1600, "aa")]), record("a1", "spk1", vec![])],
    )
    .unwrap();
    let index = load_manifest(&path, 160, false).unwrap();
    assert_eq!(index.len(), 2);
    assert_eq!(index.utterances[0].id, "a1");
    assert_eq!(index.speakers["spk1"], vec![0]);
    assert_eq!(index.speakers["spk2"], vec![1]);

    let err = load_manifest(&path, 160, true).unwrap_err().to_string();
    assert!(err.contains("dangling") && err.contains("a1") && err.contains("b1"), "{err}");
    std::fs::write(dir.path().join("a1.wav"), b"").unwrap();
    std::fs::write(dir.path().join("b1.wav"), b"").unwrap();
    assert!(load_manifest(&path, 160, true).is_ok());
}

#[test]
fn manifest_errors() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "\n").unwrap();
    assert!(load_manifest(&empty, 160, false).unwrap_err().to_string().contains("empty"));

    let unknown = dir.path().join("unknown.jsonl");
    std::fs::write(&unknown, r#"{"utterance_id":"a","audio_path":"a.wav","speaker_id":"s","extra":1}"#).unwrap();
    assert!(load_manifest(&unknown, 160, false).is_err());

    let overlapping = record("x", "s", vec![mark(0, 500, "aa"), mark(400, 900, "iy")]);
    let err = index_records(vec![overlapping], 160, None).unwrap_err().to_string();
    assert!(err.contains("overlapping") && err.contains("x"), "{err}");

    let dup = vec![record("x", "s", vec![]), record("x", "s", vec![])];
    assert!(index_records(dup, 160, None).is_err());
}

#[test]
fn records_round_trip_through_index() {
    let recs = vec![record("a", "s", vec![mark(0, 320, "aa"), mark(320, 960, "iy")])];
    let index = index_records(recs.clone(), 160, None).unwrap();
    let back = index.to_records(160);
    assert_eq!(back[0].phones, recs[0].phones);
}

#[test]
fn corpus_subset_and_positions() {
    let recs = vec![record("a", "s1", vec![]), record("b", "s2", vec![])];
    let index = index_records(recs, 160, None).unwrap();
    let mut fa = ramp(25);
    fa.utterance_id = "a".into();
    let mut fb = ramp(5);
    fb.utterance_id = "b".into();
    let corpus = Corpus::new(index, vec![fa, fb]).unwrap();
    let cfg = WindowConfig::new(3, 2);
    assert_eq!(corpus.window_positions(&cfg).len(), 25 - 7 + 1);
    let only_b = corpus.subset(&[1]).unwrap();
    assert_eq!(only_b.len(), 1);
    assert_eq!(only_b.index.utterances[0].id, "b");
    assert!(only_b.window_positions(&cfg).is_empty());
}
