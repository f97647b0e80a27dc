use std::path::Path;

use editreg::io::{archive, blob, IoError};
use editreg::synth::{generate, NoiseSpec, Task};
use serde_json::json;

fn files_equal(a: &Path, b: &Path) {
    let mut names: Vec<_> = std::fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for n in names {
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap(), "{n:?} differs");
    }
}

#[test]
fn synthetic_scene_round_trips_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let s = generate(Task::Stacking, NoiseSpec { depth_sigma: 0.002, feature_noise: 0.05, flying_edge_fraction: 0.1 }, 3).unwrap();
    for (name, bundle) in [("obs", &s.obs), ("edit", &s.edit)] {
        let dir = tmp.path().join(name);
        archive::save_scene(bundle, &dir).unwrap();
        let back = archive::load_scene(&dir).unwrap();
        assert_eq!(&back, bundle);
        let again = tmp.path().join(format!("{name}_again"));
        archive::save_scene(&back, &again).unwrap();
        files_equal(&dir, &again);
    }
}

// Writes the archive with plain byte pushes so the reader is checked against
// the documented layout rather than against its own writer.
fn write_fixture(dir: &Path, w: usize, h: usize, dim: usize) {
    std::fs::create_dir_all(dir).unwrap();
    let meta = json!({
        "format_version": 1,
        "width": w,
        "height": h,
        "intrinsics": { "fx": 50.0, "fy": 50.0, "cx": 3.5, "cy": 2.5, "width": w, "height": h },
        "o2w": { "rotation": [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], "translation": [0.0, 0.0, 0.5] },
        "instruction": "put the block on the tray",
        "feature_dim": dim,
        "has_points": false,
        "has_grasps": false
    });
    std::fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta).unwrap()).unwrap();

    let mut ppm = format!("P6\n# fixture\n{w} {h}\n255\n").into_bytes();
    ppm.extend((0..w * h * 3).map(|i| (i % 251) as u8));
    std::fs::write(dir.join("image.ppm"), ppm).unwrap();

    let pgm = |f: &dyn Fn(usize, usize) -> bool| {
        let mut out = format!("P5 {w} {h} 255\n").into_bytes();
        for r in 0..h {
            for c in 0..w {
                out.push(if f(r, c) { 255 } else { 0 });
            }
        }
        out
    };
    std::fs::write(dir.join("mask_active.pgm"), pgm(&|r, c| r < 2 && c < 4)).unwrap();
    std::fs::write(dir.join("mask_passive.pgm"), pgm(&|r, _| r >= 3)).unwrap();

    let mut depth = b"EDREG_DEPTH_F32\0".to_vec();
    for v in [1u32, w as u32, h as u32] {
        depth.extend(v.to_le_bytes());
    }
    for i in 0..w * h {
        let d = if i == 5 { f32::NAN } else { 0.5 + 0.01 * i as f32 };
        depth.extend(d.to_le_bytes());
    }
    std::fs::write(dir.join("depth.bin"), depth).unwrap();

    let mut feats = b"EDREG_FEATS_F32\0".to_vec();
    for v in [1u32, w as u32, h as u32, dim as u32] {
        feats.extend(v.to_le_bytes());
    }
    for i in 0..w * h {
        for d in 0..dim {
            let v = if d == i % dim { 1.0f32 } else { 0.0 };
            feats.extend(v.to_le_bytes());
        }
    }
    std::fs::write(dir.join("features.bin"), feats).unwrap();
}

#[test]
fn independent_fixture_with_384_dim_features_loads() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("fixture");
    let (w, h, dim) = (8, 6, 384);
    write_fixture(&dir, w, h, dim);
    let b = archive::load_scene(&dir).unwrap();
    assert_eq!((b.width(), b.height(), b.features.dim()), (w, h, dim));
    assert_eq!(b.features.at(1, 2)[(8 + 2) % dim], 1.0);
    assert_eq!(b.features.at(1, 2).iter().filter(|&&v| v != 0.0).count(), 1);
    assert_eq!(b.depth.get(0, 5), None);
    assert_eq!(b.depth.get(2, 1), Some((0.5 + 0.01 * 17.0f32) as f64));
    assert_eq!(b.image.pixel(1, 0), [24, 25, 26]);
    assert!(b.masks.active.get(1, 3) && !b.masks.active.get(1, 4));
    assert_eq!(b.masks.passive.count(), 3 * w);
    assert_eq!(b.instruction, "put the block on the tray");

    let cloud = b.lift_objects().unwrap();
    assert_eq!(cloud.feature_dim(), dim);
    // 8 active pixels and 24 passive ones, all with valid depth.
    assert_eq!(cloud.len(), 32);
}

#[test]
fn truncated_feature_blob_names_the_array() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("fixture");
    write_fixture(&dir, 8, 6, 384);
    let path = dir.join("features.bin");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 10);
    std::fs::write(&path, &bytes).unwrap();
    match archive::load_scene(&dir) {
        Err(IoError::InvariantViolation { file, field, message }) => {
            assert_eq!(file, path);
            assert_eq!(field, "features");
            assert!(message.contains("array length mismatch"), "{message}");
        }
        other => panic!("expected invariant violation, got {other:?}"),
    }
    let err = blob::decode_features(&path, &bytes).unwrap_err().to_string();
    assert!(err.contains("features"), "{err}");
}

#[test]
fn version_mismatch_is_reported_for_meta_and_blobs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("fixture");
    write_fixture(&dir, 8, 6, 4);

    let depth = dir.join("depth.bin");
    let mut bytes = std::fs::read(&depth).unwrap();
    bytes[16..20].copy_from_slice(&2u32.to_le_bytes());
    std::fs::write(&depth, &bytes).unwrap();
    assert!(matches!(
        archive::load_scene(&dir),
        Err(IoError::FormatVersionMismatch { found: 2, expected: 1, ref file }) if *file == depth
    ));

    let meta = dir.join("meta.json");
    let text = std::fs::read_to_string(&meta).unwrap().replace("\"format_version\": 1", "\"format_version\": 7");
    std::fs::write(&meta, text).unwrap();
    assert!(matches!(archive::load_scene(&dir), Err(IoError::FormatVersionMismatch { found: 7, .. })));
}

#[test]
fn missing_archive_and_missing_member_are_distinguished() {
    let tmp = tempfile::tempdir().unwrap();
    let nowhere = tmp.path().join("nowhere");
    assert!(matches!(archive::load_scene(&nowhere), Err(IoError::MissingFile(p)) if p == nowhere));

    let dir = tmp.path().join("fixture");
    write_fixture(&dir, 8, 6, 4);
    std::fs::remove_file(dir.join("mask_passive.pgm")).unwrap();
    assert!(matches!(archive::load_scene(&dir), Err(IoError::MissingFile(p)) if p == dir.join("mask_passive.pgm")));
}

#[test]
fn feature_dim_must_match_meta() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("fixture");
    write_fixture(&dir, 8, 6, 4);
    let meta = dir.join("meta.json");
    let text = std::fs::read_to_string(&meta).unwrap().replace("\"feature_dim\": 4", "\"feature_dim\": 5");
    std::fs::write(&meta, text).unwrap();
    assert!(matches!(archive::load_scene(&dir), Err(IoError::InvariantViolation { field, .. }) if field == "dim"));
}
