//! Grid files and scene directories.
//!
//! A grid file is little-endian: magic `F32F`, `u32` rows, `u32` cols,
//! `f32` spacing, then `rows·cols` `f32` values in row-major order.

use std::fs;
use std::path::Path;

use crate::config::scene_manifest;
use crate::error::{Error, Result};
use crate::grid::{BitMask2D, Field2D};
use crate::scene::Scene;

pub const GRID_MAGIC: &[u8; 4] = b"F32F";
const HEADER_LEN: usize = 16;

pub const SCENE_FILES: [&str; 6] = [
    "dem.f32f",
    "sar_vh.f32f",
    "depth_true.f32f",
    "water_mask.f32f",
    "noise_var.f32f",
    "shadow_mask.f32f",
];

pub fn encode_grid(f: &Field2D) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * f.len());
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&(f.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(f.cols() as u32).to_le_bytes());
    out.extend_from_slice(&(f.spacing() as f32).to_le_bytes());
    for &v in f.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_grid(bytes: &[u8], path: &Path) -> Result<Field2D> {
    if bytes.len() < 4 || &bytes[..4] != GRID_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: "F32F",
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload { path: path.into() });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4-byte slice"));
    let rows = word(4) as usize;
    let cols = word(8) as usize;
    let spacing = f32::from_le_bytes(bytes[12..16].try_into().expect("4-byte slice")) as f64;
    let want = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Malformed {
            path: path.into(),
            reason: format!("{rows}x{cols} overflows"),
        })?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < want {
        return Err(Error::TruncatedPayload { path: path.into() });
    }
    if payload.len() > want {
        return Err(Error::Malformed {
            path: path.into(),
            reason: format!("{} trailing bytes", payload.len() - want),
        });
    }
    if rows == 0 || cols == 0 || !(spacing > 0.0) {
        return Err(Error::Malformed {
            path: path.into(),
            reason: format!("invalid header {rows}x{cols} spacing {spacing}"),
        });
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    Field2D::from_vec(rows, cols, spacing, values)
}

pub fn write_grid(path: &Path, f: &Field2D) -> Result<()> {
    fs::write(path, encode_grid(f)).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<Field2D> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.into())
        } else {
            Error::io(path, e)
        }
    })?;
    decode_grid(&bytes, path)
}

fn read_mask(path: &Path) -> Result<BitMask2D> {
    let f = read_grid(path)?;
    if let Some(v) = f.values().iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::Malformed {
            path: path.into(),
            reason: format!("mask value {v} is not 0 or 1"),
        });
    }
    Ok(BitMask2D::threshold(&f, 0.5))
}

/// Writes the six scene grids plus `manifest.txt` into `dir`, creating it.
pub fn write_scene(dir: &Path, scene: &Scene, manifest: &crate::scene::SceneConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let spacing = scene.dem.spacing();
    let fields = [
        scene.dem.clone(),
        scene.sar_vh.clone(),
        scene.depth_true.clone(),
        scene.water_mask.to_field(spacing),
        scene.noise_var_true.clone(),
        scene.shadow_mask.to_field(spacing),
    ];
    for (name, f) in SCENE_FILES.iter().zip(&fields) {
        write_grid(&dir.join(name), f)?;
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, scene_manifest(manifest)).map_err(|e| Error::io(path, e))
}

/// Reads a scene directory. Values come back at `f32` precision.
pub fn read_scene(dir: &Path) -> Result<Scene> {
    let manifest = dir.join("manifest.txt");
    if !manifest.is_file() {
        return Err(Error::MissingArtifact(manifest));
    }
    Ok(Scene {
        dem: read_grid(&dir.join(SCENE_FILES[0]))?,
        sar_vh: read_grid(&dir.join(SCENE_FILES[1]))?,
        depth_true: read_grid(&dir.join(SCENE_FILES[2]))?,
        water_mask: read_mask(&dir.join(SCENE_FILES[3]))?,
        noise_var_true: read_grid(&dir.join(SCENE_FILES[4]))?,
        shadow_mask: read_mask(&dir.join(SCENE_FILES[5]))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn grid_round_trip_is_bit_exact(
            rows in 1usize..6,
            cols in 1usize..6,
            spacing in 0.01f32..100.0,
            seed in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 36),
        ) {
            let vals: Vec<f64> = seed[..rows * cols].iter().map(|&v| v as f64).collect();
            let f = Field2D::from_vec(rows, cols, spacing as f64, vals).unwrap();
            let back = decode_grid(&encode_grid(&f), Path::new("mem")).unwrap();
            prop_assert_eq!(back.dims(), f.dims());
            prop_assert_eq!(back.spacing().to_bits(), f.spacing().to_bits());
            for (a, b) in back.values().iter().zip(f.values()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn header_layout() {
        let f = Field2D::from_vec(2, 3, 0.5, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = encode_grid(&f);
        assert_eq!(b.len(), 16 + 24);
        assert_eq!(&b[..4], b"F32F");
        assert_eq!(&b[4..8], &[2, 0, 0, 0]);
        assert_eq!(&b[8..12], &[3, 0, 0, 0]);
        assert_eq!(&b[12..16], &0.5f32.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
    }

    #[test]
    fn corrupt_grids_are_rejected() {
        let f = Field2D::filled(3, 3, 1.0, 2.0);
        let good = encode_grid(&f);
        let p = Path::new("x.f32f");
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_grid(&bad, p), Err(Error::BadMagic { .. })));
        assert!(matches!(decode_grid(&good[..good.len() - 4], p), Err(Error::TruncatedPayload { .. })));
        assert!(matches!(decode_grid(&good[..10], p), Err(Error::TruncatedPayload { .. })));
        let mut long = good.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(decode_grid(&long, p), Err(Error::Malformed { .. })));
    }

    #[test]
    fn scene_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig {
            grid_size: 16,
            ..Default::default()
        };
        let s = generate_scene(&cfg).unwrap();
        write_scene(dir.path(), &s, &cfg).unwrap();
        for name in SCENE_FILES.iter().chain(&["manifest.txt"]) {
            assert!(dir.path().join(name).is_file(), "{name}");
        }
        let back = read_scene(dir.path()).unwrap();
        assert_eq!(back.water_mask, s.water_mask);
        assert_eq!(back.shadow_mask, s.shadow_mask);
        for (a, b) in back.dem.values().iter().zip(s.dem.values()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        let parsed = crate::config::RunConfig::parse_str(&manifest).unwrap();
        assert_eq!(parsed.scene, cfg);
    }

    #[test]
    fn missing_scene_files_are_named() {
        let dir = tempfile::tempdir().unwrap();
        match read_scene(dir.path()) {
            Err(Error::MissingArtifact(p)) => assert!(p.ends_with("manifest.txt")),
            other => panic!("{other:?}"),
        }
    }
}
