use bevtrack::geom::{crop_points_in_box, PointCloud};
use bevtrack::harness::*;
use bevtrack::Error;
use std::path::Path;

fn scene(n: usize, frames: usize, seed: u64) -> SceneConfig {
    SceneConfig {
        n_tracklets: n,
        frames,
        seed,
        ..SceneConfig::default()
    }
}

fn record(v: [f32; 4]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

#[test]
fn sensor_records_map_to_internal_frame() {
    let bytes = [record([1.0, 2.0, 3.0, 0.7]), record([-4.0, 0.5, -1.5, 0.0])].concat();
    let pc = decode_frame(&bytes, Path::new("x.bin")).unwrap();
    assert_eq!(pc.points, vec![[1.0, 3.0, -2.0], [-4.0, -1.5, -0.5]]);
    let again = decode_frame(&encode_frame(&pc), Path::new("y.bin")).unwrap();
    assert_eq!(again, pc);
    assert!(decode_frame(&[], Path::new("e.bin")).unwrap().is_empty());
}

#[test]
fn malformed_frames_report_offsets() {
    let mut bytes = [record([1.0; 4]), record([2.0; 4]), record([3.0; 4])].concat();
    bytes.extend_from_slice(&[0u8; 7]);
    match decode_frame(&bytes, Path::new("t.bin")) {
        Err(Error::Parse { offset, .. }) => assert_eq!(offset, 48),
        other => panic!("expected a parse error, got {other:?}"),
    }
    let bytes = [record([1.0; 4]), record([2.0, f32::NAN, 0.0, 0.0])].concat();
    match decode_frame(&bytes, Path::new("n.bin")) {
        Err(Error::Parse { offset, .. }) => assert_eq!(offset, 16),
        other => panic!("expected a parse error, got {other:?}"),
    }
    assert!(matches!(read_frame(Path::new("/nonexistent/000000.bin")), Err(Error::MissingFile(_))));
}

#[test]
fn dataset_round_trip_and_hash_check() {
    let cfg = scene(3, 6, 11);
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic(&cfg, dir.path()).unwrap();
    assert_eq!(manifest.tracklets.len(), 3);
    assert_eq!(manifest.frame_convention, "sensor_z_up");
    let data = load_sequence(dir.path(), false).unwrap();
    let original = synthesize(&cfg).unwrap();
    assert_eq!(data.tracklets.len(), original.len());
    for (a, b) in data.tracklets.iter().zip(&original) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.class, b.class);
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.boxes, b.boxes);
    }

    let other = tempfile::tempdir().unwrap();
    let again = generate_synthetic(&cfg, other.path()).unwrap();
    assert_eq!(again.content_hash, manifest.content_hash);
    let a = std::fs::read(dir.path().join("manifest.json")).unwrap();
    let b = std::fs::read(other.path().join("manifest.json")).unwrap();
    assert_eq!(a, b);

    let frame = dir.path().join("frames").join(&manifest.tracklets[1].id).join("000002.bin");
    let mut bytes = std::fs::read(&frame).unwrap();
    bytes[5] ^= 0x01;
    std::fs::write(&frame, &bytes).unwrap();
    assert!(matches!(load_sequence(dir.path(), false), Err(Error::HashMismatch { .. })));
    assert!(load_sequence(dir.path(), true).is_ok());

    std::fs::remove_file(&frame).unwrap();
    assert!(matches!(load_sequence(dir.path(), true), Err(Error::MissingFile(_))));
}

#[test]
fn synthetic_tracklets_are_rigid_and_observed() {
    let tracklets = synthesize(&scene(4, 10, 12)).unwrap();
    for t in &tracklets {
        assert_eq!(t.frames.len(), 10);
        assert_eq!(t.class, ObjectClass::Car);
        let spec = t.boxes[0].spec;
        for (f, b) in t.frames.iter().zip(&t.boxes) {
            assert_eq!(b.spec, spec);
            assert!(f.is_finite());
            let crop: PointCloud = crop_points_in_box(f, b);
            assert!(!crop.is_empty(), "tracklet {} has an empty target", t.id);
        }
        for w in t.boxes.windows(2) {
            let step = ((w[1].pose.x - w[0].pose.x).powi(2) + (w[1].pose.z - w[0].pose.z).powi(2)).sqrt();
            assert!(step < 1.5, "implausible step {step}");
        }
    }
    assert_eq!(synthesize(&scene(4, 10, 12)).unwrap(), tracklets);
    assert_ne!(synthesize(&scene(4, 10, 13)).unwrap(), tracklets);
}
