use std::fs;

use nextframe::config::{load_config, Manifest, RunConfig};
use nextframe::experiments::generate_leaves;
use nextframe::pgm::{self, crop_clip, encode_pgm, parse_pgm, CropGrid, GrayImage};
use nextframe::{bfun, vseq, FormatError};
use nextframe_core::leaves::{ImageSequence, LeavesConfig, SequenceSource};
use nextframe_core::net::{DenoiserModel, ModelArch};
use nextframe_core::{rng, Tensor};
use rand::Rng;

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn random_sequences(n: usize) -> Vec<ImageSequence> {
    let mut r = rng::stream(5, 0);
    (0..n)
        .map(|_| {
            let data: Vec<f32> = (0..3 * 4 * 4).map(|_| r.random::<f32>()).collect();
            ImageSequence::new(3, 4, 4, data, SequenceSource::Generated).unwrap()
        })
        .collect()
}

#[test]
fn vseq_round_trip_is_bit_exact() {
    let seqs = random_sequences(10);
    let meta = vseq::Metadata {
        sources: seqs.iter().map(|s| s.source.clone()).collect(),
        test: Some(vec![9]),
        extra: serde_json::json!({"k": 0.1f64 + 0.2}),
    };
    let buf = vseq::encode(&seqs, Some(&meta)).unwrap();
    let (back, m) = vseq::decode(&buf).unwrap();
    assert_eq!(back.len(), 10);
    for (a, b) in seqs.iter().zip(&back) {
        assert_eq!(bits(a.data()), bits(b.data()));
    }
    assert_eq!(m.unwrap(), meta);
}

#[test]
fn dataset_round_trip_keeps_split() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.vseq");
    let ds = generate_leaves(3, 20, &LeavesConfig::default()).unwrap();
    vseq::save_dataset(&p, &ds, serde_json::Value::Null).unwrap();
    let back = vseq::load_dataset(&p).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn vseq_corruption_reports_byte_offsets() {
    let buf = vseq::encode(&random_sequences(2), None).unwrap();

    let mut bad = buf.clone();
    bad[0] = b'X';
    match vseq::decode(&bad) {
        Err(FormatError::Corrupt { offset: 0, .. }) => {}
        other => panic!("{other:?}"),
    }

    let truncated = &buf[..buf.len() - 3];
    match vseq::decode(truncated) {
        Err(FormatError::Corrupt { offset, what }) => {
            // the second sequence starts right after the header and the first one
            assert_eq!(offset, 28 + 48 * 4, "{what}");
            assert!(what.contains("truncated"), "{what}");
        }
        other => panic!("{other:?}"),
    }

    let mut v2 = buf.clone();
    v2[4] = 2;
    assert!(matches!(vseq::decode(&v2), Err(FormatError::Corrupt { offset: 4, .. })));

    let msg = vseq::decode(&buf[..10]).unwrap_err().to_string();
    assert!(msg.starts_with("byte 8:"), "{msg}");
}

#[test]
fn read_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("junk.vseq");
    fs::write(&p, b"nope").unwrap();
    let msg = vseq::read_sequences(&p).unwrap_err().to_string();
    assert!(msg.contains("junk.vseq"), "{msg}");
}

fn perturbed_model(tau: usize) -> DenoiserModel {
    let mut m = DenoiserModel::new(ModelArch::new(tau, 4), &mut rng::stream(1, 0)).unwrap();
    let idx: Vec<usize> = (0..m.params().len()).collect();
    for (i, t) in m.params_mut_by(&idx).into_iter().enumerate() {
        *t = t.map(|v| v * (1.0 + 0.01 * i as f32));
    }
    m
}

#[test]
fn bfun_round_trip_forward_is_bitwise_equal() {
    let m = perturbed_model(2);
    let buf = bfun::encode(&m, serde_json::json!({"epoch": 3})).unwrap();
    let (m2, h) = bfun::decode(&buf, Some(m.arch())).unwrap();
    assert_eq!(h.info["epoch"], 3);
    let mut r = rng::stream(2, 0);
    let y = Tensor::randn(&[16, 16], 1.0, &mut r);
    let c = vec![Tensor::randn(&[16, 16], 1.0, &mut r), Tensor::randn(&[16, 16], 1.0, &mut r)];
    let a = m.forward(&y, &c).unwrap();
    let b = m2.forward(&y, &c).unwrap();
    assert_eq!(bits(a.data()), bits(b.data()));
}

#[test]
fn bfun_arch_mismatch_names_both() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.bfun");
    bfun::save_model(&p, &perturbed_model(2), serde_json::Value::Null).unwrap();
    let msg = bfun::load_model(&p, Some(ModelArch::new(3, 4))).unwrap_err().to_string();
    assert!(msg.contains("tau: 3") && msg.contains("tau: 2"), "{msg}");
}

#[test]
fn bfun_census_covers_three_scales_and_final_conv() {
    let m = DenoiserModel::new(ModelArch::new(2, 4), &mut rng::stream(0, 0)).unwrap();
    let buf = bfun::encode(&m, serde_json::Value::Null).unwrap();
    let (m2, _) = bfun::decode(&buf, None).unwrap();
    let names: Vec<&str> = m2.params().iter().map(|p| p.name.as_str()).collect();
    for scale in ["enc0", "enc1", "enc2", "dec0", "dec1", "dec2"] {
        assert!(names.iter().any(|n| n.starts_with(scale)), "{scale} missing from {names:?}");
    }
    assert!(names.contains(&"final.conv.weight"));
    // bias-free: only kernels, gains and running stds
    assert!(names
        .iter()
        .all(|n| n.ends_with("conv.weight") || n.ends_with("norm.gain") || n.ends_with("norm.running_std")));
}

#[test]
fn bfun_truncation_is_reported() {
    let buf = bfun::encode(&perturbed_model(1), serde_json::Value::Null).unwrap();
    let err = bfun::decode(&buf[..buf.len() - 1], None).unwrap_err();
    assert!(matches!(err, FormatError::Corrupt { .. }), "{err}");
    let mut bad = buf.clone();
    bad[1] = 0;
    assert!(matches!(bfun::decode(&bad, None), Err(FormatError::Corrupt { offset: 0, .. })));
}

#[test]
fn pgm_rescales_to_unit_range() {
    let mut buf = b"P5\n# comment\n2 1\n255\n".to_vec();
    buf.extend_from_slice(&[255, 0]);
    let img = parse_pgm(&buf, "a.pgm".as_ref()).unwrap();
    assert_eq!((img.height, img.width), (1, 2));
    assert_eq!(img.data, vec![1.0, 0.0]);
}

#[test]
fn non_p5_pgm_error_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("frame_007.pgm");
    fs::write(&p, b"P2\n1 1\n255\n0\n").unwrap();
    let msg = pgm::read_pgm(&p).unwrap_err().to_string();
    assert!(msg.contains("frame_007.pgm"), "{msg}");
}

#[test]
fn pgm_encode_parse_round_trip() {
    let data: Vec<f32> = (0..12).map(|i| i as f32 / 11.0).collect();
    let img = parse_pgm(&encode_pgm(3, 4, &data), "x".as_ref()).unwrap();
    for (a, b) in data.iter().zip(&img.data) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn crop_grid_three_by_three_gives_nine_sequences() {
    let frames: Vec<GrayImage> = (0..11)
        .map(|t| GrayImage {
            height: 96,
            width: 96,
            data: (0..96 * 96).map(|i| ((i + t) % 7) as f32 / 7.0).collect(),
        })
        .collect();
    let grid = CropGrid {
        rows: 3,
        cols: 3,
        scales: vec![1],
        ..CropGrid::default()
    };
    let seqs = crop_clip("clip", &frames, &grid).unwrap();
    assert_eq!(seqs.len(), 9);
    assert!(seqs.iter().all(|s| (s.len(), s.height(), s.width()) == (11, 32, 32)));
    // the top-left crop is the raw top-left window
    assert_eq!(seqs[0].frame(0)[..32], frames[0].data[..32]);
}

#[test]
fn ingest_reads_sorted_frames_from_subdirectories() {
    let dir = tempfile::tempdir().unwrap();
    for clip in ["a", "b"] {
        let d = dir.path().join(clip);
        fs::create_dir(&d).unwrap();
        for t in 0..11 {
            let v = vec![t as f32 / 10.0; 64 * 64];
            pgm::write_pgm(&d.join(format!("{t:03}.pgm")), 64, 64, &v).unwrap();
        }
    }
    let grid = CropGrid {
        rows: 1,
        cols: 2,
        scales: vec![1, 2],
        ..CropGrid::default()
    };
    let ds = pgm::ingest_frames(dir.path(), &grid).unwrap();
    // per clip: 2 crops at full scale, 2 at half scale (32x32 frame, both centered)
    assert_eq!(ds.sequences.len(), 8);
    let s = &ds.sequences[0];
    assert!((s.frame(10)[0] - 1.0).abs() < 1e-6 && s.frame(0)[0] == 0.0);
}

#[test]
fn config_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    fs::write(&p, r#"{"seed": 3, "params": {"size": 32, "colour": 1}}"#).unwrap();
    let err = load_config::<CropGrid>(Some(&p)).unwrap_err().to_string();
    assert!(err.contains("colour"), "{err}");
    fs::write(&p, r#"{"seed": 3, "surprise": true}"#).unwrap();
    assert!(load_config::<CropGrid>(Some(&p)).is_err());
    fs::write(&p, r#"{"seed": 3, "params": {"rows": 2}}"#).unwrap();
    let ok: RunConfig<CropGrid> = load_config(Some(&p)).unwrap();
    assert_eq!((ok.seed, ok.params.rows, ok.params.cols), (Some(3), 2, 7));
}

#[test]
fn manifest_is_reproducible_json() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.json");
    let m = Manifest::new("x", 4, &serde_json::json!({"a": 1})).unwrap();
    m.write(&p).unwrap();
    let first = fs::read(&p).unwrap();
    m.write(&p).unwrap();
    assert_eq!(first, fs::read(&p).unwrap());
    let back: Manifest = serde_json::from_slice(&first).unwrap();
    assert_eq!(back, m);
}
