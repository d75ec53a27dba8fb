use dyco::backbone::{BackboneConfig, Encoder};
use dyco::fusion::{FusionConfig, FusionModel};
use dyco::signal::{read_frames_from, synth_dataset, write_frames_to, DatasetSpec, FrameFile, IqFrame, Modulation};
use dyco::tensor::{read_checkpoint_from, write_checkpoint_to};
use dyco::{Error, Tensor};

fn frame(label: u16, snr: i16, n: usize) -> IqFrame {
    IqFrame {
        i: (0..n).map(|k| (k as f32 * 0.37).sin()).collect(),
        q: (0..n).map(|k| (k as f32 * 0.11).cos() - 0.5).collect(),
        label,
        snr_db: snr,
    }
}

fn encode_frames(file: &FrameFile) -> Vec<u8> {
    let mut buf = Vec::new();
    write_frames_to(&mut buf, file).unwrap();
    buf
}

fn offset_of(e: Error) -> u64 {
    match e {
        Error::Format { offset, .. } => offset,
        other => panic!("expected a format error, got {other}"),
    }
}

#[test]
fn frame_file_byte_layout() {
    let f = IqFrame { i: vec![1.0, -2.5], q: vec![0.25, 3.0], label: 3, snr_db: -7 };
    let file = FrameFile { length: 2, classes: vec!["AB".into(), "C".into()], frames: vec![f] };
    let mut want = b"DYCO".to_vec();
    want.extend(1u32.to_le_bytes());
    want.extend(2u32.to_le_bytes());
    want.extend(1u32.to_le_bytes());
    want.extend(2u16.to_le_bytes());
    want.extend([2, b'A', b'B', 1, b'C']);
    want.extend(3u16.to_le_bytes());
    want.extend((-7i16).to_le_bytes());
    for v in [1.0f32, 0.25, -2.5, 3.0] {
        want.extend(v.to_le_bytes());
    }
    assert_eq!(encode_frames(&file), want);
}

#[test]
fn single_frame_round_trip_is_bitwise() {
    let file = FrameFile::new(16, vec![frame(2, 10, 16)]);
    let back = read_frames_from(encode_frames(&file).as_slice()).unwrap();
    assert_eq!(back.length, 16);
    assert_eq!(back.classes, Modulation::names());
    let (a, b) = (&file.frames[0], &back.frames[0]);
    assert_eq!((a.label, a.snr_db), (b.label, b.snr_db));
    assert!(a.i.iter().zip(&b.i).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a.q.iter().zip(&b.q).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn special_floats_survive() {
    let f = IqFrame { i: vec![-0.0, f32::MIN_POSITIVE / 4.0, f32::MAX, 1e-30], q: vec![0.0; 4], label: 0, snr_db: 30 };
    let file = FrameFile::new(4, vec![f]);
    let back = read_frames_from(encode_frames(&file).as_slice()).unwrap();
    assert!(file.frames[0].i.iter().zip(&back.frames[0].i).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn empty_frame_list_is_a_valid_file() {
    let file = FrameFile::new(128, Vec::new());
    let bytes = encode_frames(&file);
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 0);
    let back = read_frames_from(bytes.as_slice()).unwrap();
    assert!(back.frames.is_empty());
    assert_eq!(back.length, 128);
}

#[test]
fn corrupt_magic_names_the_format() {
    let mut bytes = encode_frames(&FrameFile::new(8, vec![frame(0, 0, 8)]));
    bytes[0] = b'X';
    let err = read_frames_from(bytes.as_slice()).unwrap_err();
    assert!(err.to_string().contains("DYCO"), "{err}");
    assert_eq!(offset_of(err), 0);
}

#[test]
fn unknown_version_is_rejected_at_its_offset() {
    let mut bytes = encode_frames(&FrameFile::new(8, vec![frame(0, 0, 8)]));
    bytes[4] = 9;
    let err = read_frames_from(bytes.as_slice()).unwrap_err();
    assert!(err.to_string().contains("version"));
    assert_eq!(offset_of(err), 8);
}

#[test]
fn every_truncation_is_reported_with_an_offset() {
    let bytes = encode_frames(&FrameFile::new(8, vec![frame(1, 5, 8), frame(4, -3, 8)]));
    for cut in 0..bytes.len() {
        let err = read_frames_from(&bytes[..cut]).unwrap_err();
        let off = offset_of(err);
        assert!(off <= cut as u64, "cut {cut} reported at {off}");
    }
}

#[test]
fn trailing_bytes_are_rejected() {
    let mut bytes = encode_frames(&FrameFile::new(8, vec![frame(1, 5, 8)]));
    let n = bytes.len() as u64;
    bytes.push(0);
    assert_eq!(offset_of(read_frames_from(bytes.as_slice()).unwrap_err()), n);
}

#[test]
fn mismatched_frame_length_is_refused_on_write() {
    let file = FrameFile::new(16, vec![frame(0, 0, 8)]);
    assert!(write_frames_to(Vec::new(), &file).is_err());
}

#[test]
fn dataset_files_are_deterministic() {
    let spec = DatasetSpec { per_cell: 3, ..DatasetSpec::default() };
    let a = encode_frames(&FrameFile::new(128, synth_dataset(&spec, 42).unwrap()));
    let b = encode_frames(&FrameFile::new(128, synth_dataset(&spec, 42).unwrap()));
    let c = encode_frames(&FrameFile::new(128, synth_dataset(&spec, 43).unwrap()));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

fn encode_tensors(items: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint_to(&mut buf, items.iter().copied()).unwrap();
    buf
}

#[test]
fn checkpoint_byte_layout() {
    let t = Tensor::new(&[2], vec![1.5, -0.0]).unwrap();
    let mut want = b"DYTN".to_vec();
    want.extend(1u32.to_le_bytes());
    want.extend(1u32.to_le_bytes());
    want.extend(1u32.to_le_bytes());
    want.push(b'w');
    want.extend(1u32.to_le_bytes());
    want.extend(2u64.to_le_bytes());
    want.extend(1.5f64.to_le_bytes());
    want.extend((-0.0f64).to_le_bytes());
    assert_eq!(encode_tensors(&[("w", &t)]), want);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let a = Tensor::new(&[2, 3], vec![0.1, -0.0, f64::MIN_POSITIVE / 8.0, 1e300, -7.25, f64::EPSILON]).unwrap();
    let s = Tensor::scalar(std::f64::consts::PI);
    let e = Tensor::zeros(&[0, 4]);
    let back = read_checkpoint_from(encode_tensors(&[("a.w", &a), ("scalar", &s), ("empty", &e)]).as_slice()).unwrap();
    assert_eq!(back.len(), 3);
    for ((name, t), (want_name, want)) in back.iter().zip([("a.w", &a), ("scalar", &s), ("empty", &e)]) {
        assert_eq!(name, want_name);
        assert_eq!(t.shape(), want.shape());
        assert!(t.data().iter().zip(want.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn checkpoint_corruption_is_reported() {
    let t = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
    let bytes = encode_tensors(&[("t", &t)]);
    let mut bad = bytes.clone();
    bad[3] = b'X';
    let err = read_checkpoint_from(bad.as_slice()).unwrap_err();
    assert!(err.to_string().contains("DYTN"), "{err}");
    for cut in 0..bytes.len() {
        let off = offset_of(read_checkpoint_from(&bytes[..cut]).unwrap_err());
        assert!(off <= cut as u64);
    }
}

#[test]
fn encoder_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.dytn");
    let enc = Encoder::new(BackboneConfig::default(), 11).unwrap();
    enc.save(&path).unwrap();
    let back = Encoder::load(&path).unwrap();
    assert_eq!(back.config, enc.config);
    for ((n1, t1), (n2, t2)) in enc.params.iter().zip(back.params.iter()) {
        assert_eq!(n1, n2);
        assert!(t1.data().iter().zip(t2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn fusion_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fusion.dytn");
    let cfg = FusionConfig { seed: 3, ..FusionConfig::default() };
    let model = FusionModel::new(cfg, vec![0, 2, 5], 64).unwrap();
    model.save(&path).unwrap();
    let back = FusionModel::load(&path).unwrap();
    assert_eq!(back.classes, model.classes);
    assert_eq!(back.config, model.config);
    assert_eq!(back.params.len(), model.params.len());
    for ((n1, t1), (n2, t2)) in model.params.iter().zip(back.params.iter()) {
        assert_eq!(n1, n2);
        assert!(t1.data().iter().zip(t2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
