//! On-disk dataset directory: `manifest.json` describing shape and
//! checksums, `values.f32` as little-endian floats in [time][channel]
//! [row][col] order, and `mask.bits` bit-packed LSB first.

use std::fs;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{hex, BitMask, ChannelSchema, GridSpec, UrbanDynamicsMap};
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    spec: GridSpec,
    schema: ChannelSchema,
    start: DateTime<Utc>,
    hours: usize,
    dtype: String,
    /// [time, channel, row, col]
    shape: [usize; 4],
    values_sha256: String,
    mask_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn save_dataset(map: &UrbanDynamicsMap, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut value_bytes = Vec::with_capacity(map.values().len() * 4);
    for v in map.values() {
        value_bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mask_bytes = map.mask().as_bytes();
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        spec: map.spec,
        schema: map.schema.clone(),
        start: map.start,
        hours: map.hours(),
        dtype: "f32le".to_string(),
        shape: [map.hours(), map.schema.len(), map.spec.rows, map.spec.cols],
        values_sha256: sha256_hex(&value_bytes),
        mask_sha256: sha256_hex(mask_bytes),
    };
    fs::write(dir.join("values.f32"), &value_bytes)?;
    fs::write(dir.join("mask.bits"), mask_bytes)?;
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<UrbanDynamicsMap> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::DatasetVersion {
            found: manifest.format_version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let n: usize = manifest.shape.iter().product();
    if manifest.shape[0] != manifest.hours
        || manifest.shape[1] != manifest.schema.len()
        || manifest.shape[2] != manifest.spec.rows
        || manifest.shape[3] != manifest.spec.cols
    {
        return Err(Error::Grid("manifest shape disagrees with spec/schema/hours".into()));
    }

    let value_bytes = fs::read(dir.join("values.f32"))?;
    if value_bytes.len() != n * 4 {
        return Err(Error::DatasetLength {
            file: "values.f32".into(),
            expected: (n * 4) as u64,
            found: value_bytes.len() as u64,
        });
    }
    if sha256_hex(&value_bytes) != manifest.values_sha256 {
        return Err(Error::DatasetChecksum {
            file: "values.f32".into(),
        });
    }
    let values: Vec<f32> = value_bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let mask_bytes = fs::read(dir.join("mask.bits"))?;
    if sha256_hex(&mask_bytes) != manifest.mask_sha256 {
        return Err(Error::DatasetChecksum {
            file: "mask.bits".into(),
        });
    }
    let mask = BitMask::from_bytes(mask_bytes, n)?;

    UrbanDynamicsMap::from_parts(
        manifest.spec,
        manifest.schema,
        manifest.start,
        manifest.hours,
        values,
        mask,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn start() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2017, 1, 1, 0, 0, 0).unwrap()
    }

    #[test]
    fn tiny_round_trip_is_identity() {
        let spec = GridSpec::new(15, 15, 3.0, (40.0, 116.0)).unwrap();
        let mut map = UrbanDynamicsMap::new(spec, ChannelSchema::canonical(), start(), 1).unwrap();
        map.set(0, 0, 0, 0, 1.5);
        map.set(0, 3, 14, 14, -2.25);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&map, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, map);
    }

    #[test]
    fn random_map_round_trip_preserves_checksum() {
        let spec = GridSpec::new(50, 55, 3.0, (40.0, 116.0)).unwrap();
        let mut map = UrbanDynamicsMap::new(spec, ChannelSchema::canonical(), start(), 48).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = map.values().len();
        for i in 0..n {
            if rng.gen_bool(0.3) {
                map.values_mut()[i] = rng.gen_range(-100.0..100.0);
                map.mask_mut().set(i, true);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&map, dir.path()).unwrap();

        let before = sha256_hex(&fs::read(dir.path().join("values.f32")).unwrap());
        let loaded = load_dataset(dir.path()).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(&loaded, dir2.path()).unwrap();
        let after = sha256_hex(&fs::read(dir2.path().join("values.f32")).unwrap());
        assert_eq!(before, after);
        assert_eq!(loaded, map);
    }

    #[test]
    fn version_mismatch_is_refused_with_both_versions() {
        let spec = GridSpec::new(15, 15, 3.0, (40.0, 116.0)).unwrap();
        let map = UrbanDynamicsMap::new(spec, ChannelSchema::canonical(), start(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&map, dir.path()).unwrap();
        let manifest_path = dir.path().join("manifest.json");
        let doctored = fs::read_to_string(&manifest_path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 99");
        fs::write(&manifest_path, doctored).unwrap();
        match load_dataset(dir.path()).unwrap_err() {
            Error::DatasetVersion { found, expected } => {
                assert_eq!(found, 99);
                assert_eq!(expected, DATASET_FORMAT_VERSION);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn truncated_values_reports_length_mismatch() {
        let spec = GridSpec::new(15, 15, 3.0, (40.0, 116.0)).unwrap();
        let map = UrbanDynamicsMap::new(spec, ChannelSchema::canonical(), start(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&map, dir.path()).unwrap();
        // Cut the binary down to what a 14-channel map would occupy.
        let path = dir.path().join("values.f32");
        let bytes = fs::read(&path).unwrap();
        let shorter = 2 * 14 * 15 * 15 * 4;
        fs::write(&path, &bytes[..shorter]).unwrap();
        match load_dataset(dir.path()).unwrap_err() {
            Error::DatasetLength { file, expected, found } => {
                assert_eq!(file, "values.f32");
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(found, shorter as u64);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let spec = GridSpec::new(15, 15, 3.0, (40.0, 116.0)).unwrap();
        let mut map = UrbanDynamicsMap::new(spec, ChannelSchema::canonical(), start(), 1).unwrap();
        map.set(0, 0, 0, 0, 1.0);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&map, dir.path()).unwrap();
        let path = dir.path().join("values.f32");
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_dataset(dir.path()).unwrap_err(),
            Error::DatasetChecksum { .. }
        ));
    }
}
