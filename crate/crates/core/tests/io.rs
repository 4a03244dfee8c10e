//! Sequence directories and checkpoints on disk.

use std::fs;

use dynagmap::io::{
    checkpoint_to_string, flow_path, load_checkpoint, load_sequence, read_ppm, rgb_path, save_checkpoint,
    write_sequence, SequenceDir,
};
use dynagmap::pipeline::{run_sequence, RunOptions};
use dynagmap::sim::{generate_scene, SceneSpec};
use dynagmap::frame::flow_is_known;
use dynagmap::{Error, ManageConfig};

#[test]
fn sequence_round_trips_within_format_precision() {
    let seq = generate_scene(&SceneSpec::moving_sphere(32, 24, 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_sequence(dir.path(), &seq.cam, &seq.frames).unwrap();
    let (cam, frames) = load_sequence(dir.path()).unwrap();
    assert_eq!(cam, seq.cam);
    assert_eq!(frames.len(), seq.frames.len());
    for (got, want) in frames.iter().zip(&seq.frames) {
        assert_eq!(got.timestamp, want.timestamp);
        for (a, b) in got.rgb.data().iter().zip(want.rgb.data()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        for (a, b) in got.depth.data().iter().zip(want.depth.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs());
        }
        match (&got.flow_back, &want.flow_back) {
            (Some(g), Some(w)) => {
                for (a, b) in g.data().iter().zip(w.data()) {
                    assert_eq!(flow_is_known(a), flow_is_known(b));
                    if flow_is_known(b) {
                        assert!((a[0] - b[0]).abs() <= 1e-5 * (1.0 + b[0].abs()));
                        assert!((a[1] - b[1]).abs() <= 1e-5 * (1.0 + b[1].abs()));
                    }
                }
            }
            (None, None) => {}
            other => panic!("flow presence differs: {:?}", (other.0.is_some(), other.1.is_some())),
        }
        assert_eq!(got.motion_mask, want.motion_mask);
        assert!((got.pose.translation - want.pose.translation).norm() < 1e-12);
        assert!(got.pose.rotation.angle_to(&want.pose.rotation) < 1e-12);
    }
}

#[test]
fn missing_flow_file_loads_as_none() {
    let seq = generate_scene(&SceneSpec::moving_sphere(16, 12, 3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_sequence(dir.path(), &seq.cam, &seq.frames).unwrap();
    fs::remove_file(flow_path(dir.path(), 2)).unwrap();
    let s = SequenceDir::open(dir.path()).unwrap();
    assert!(s.has_flow());
    assert!(s.load_frame(2).unwrap().flow_back.is_none());
    assert!(s.load_frame(1).unwrap().flow_back.is_some());
}

#[test]
fn truncated_image_error_names_the_file() {
    let seq = generate_scene(&SceneSpec::moving_sphere(16, 12, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_sequence(dir.path(), &seq.cam, &seq.frames).unwrap();
    let p = rgb_path(dir.path(), 1);
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
    let err = read_ppm(&p).unwrap_err();
    assert!(matches!(err, Error::Load { .. }));
    assert!(err.to_string().contains("frame_000001.rgb.ppm"), "{err}");
    let err = load_sequence(dir.path()).unwrap_err();
    assert!(err.to_string().contains("frame_000001.rgb.ppm"), "{err}");
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let seq = generate_scene(&SceneSpec::moving_sphere(32, 24, 4)).unwrap();
    let cfg = ManageConfig {
        iters_per_frame: 5,
        ..Default::default()
    };
    let map = run_sequence(&seq.frames, &seq.cam, &cfg, &RunOptions::default()).unwrap().map;
    assert!(!map.dynamic_set.is_empty() && !map.static_set.is_empty());
    assert!(map.dynamic_set.iter().any(|g| g.v_prev_plus.is_some()));

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("map.jsonl");
    save_checkpoint(&p, &map).unwrap();
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(back, map);
    let q = dir.path().join("again.jsonl");
    save_checkpoint(&q, &back).unwrap();
    assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
    assert_eq!(checkpoint_to_string(&back).unwrap(), fs::read_to_string(&p).unwrap());
}

#[test]
fn checkpoint_rejects_a_foreign_version() {
    let map = dynagmap::GaussianMap::new(ManageConfig::default());
    let text = checkpoint_to_string(&map).unwrap().replace("\"format_version\":1", "\"format_version\":7");
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("old.jsonl");
    fs::write(&p, text).unwrap();
    let err = load_checkpoint(&p).unwrap_err();
    assert!(err.to_string().contains("version 7"), "{err}");
}
