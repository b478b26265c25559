//! Dataset directories: `manifest.json` plus little-endian f32 arrays
//! `params.bin` `[N, P]` and `states.bin` `[N, T+1, V, X(, Y)]`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Dataset, EquationSpec, Manifest, PdeError, Result, Trajectory};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";
const STATES: &str = "states.bin";

fn encode(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| (v as f32).to_le_bytes()).collect()
}

fn decode(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `ds` into `dir` (created if missing), filling in checksums.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let params = encode(ds.trajectories.iter().flat_map(|t| t.params.iter().copied()));
    let states = encode(ds.trajectories.iter().flat_map(|t| t.states.data().iter().copied()));
    let mut manifest = ds.manifest.clone();
    manifest.count = ds.trajectories.len();
    manifest.params_shape[0] = manifest.count;
    manifest.states_shape[0] = manifest.count;
    manifest.checksums.clear();
    manifest.checksums.insert(PARAMS.into(), digest(&params));
    manifest.checksums.insert(STATES.into(), digest(&states));
    fs::write(dir.join(PARAMS), params)?;
    fs::write(dir.join(STATES), states)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| PdeError::Manifest(e.to_string()))?;
    fs::write(dir.join(MANIFEST), json + "\n")?;
    Ok(manifest)
}

fn read_checked(dir: &Path, name: &str, manifest: &Manifest) -> Result<Vec<f64>> {
    let bytes = fs::read(dir.join(name))?;
    let expected = manifest
        .checksums
        .get(name)
        .ok_or_else(|| PdeError::Manifest(format!("no checksum recorded for {name}")))?;
    if digest(&bytes) != *expected {
        return Err(PdeError::ChecksumMismatch { file: name.into() });
    }
    Ok(decode(&bytes))
}

/// Reads a dataset directory, verifying schema version, checksums and shapes.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| PdeError::Manifest(e.to_string()))?;
    let found = raw
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| PdeError::Manifest("missing schema_version".into()))? as u32;
    if found != SCHEMA_VERSION {
        return Err(PdeError::VersionMismatch {
            found,
            expected: SCHEMA_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| PdeError::Manifest(e.to_string()))?;
    if manifest.dtype != "float32" {
        return Err(PdeError::Manifest(format!("unsupported dtype {}", manifest.dtype)));
    }

    let params = read_checked(dir, PARAMS, &manifest)?;
    let states = read_checked(dir, STATES, &manifest)?;

    let n = manifest.count;
    let p = manifest.family.n_params();
    let mut expected_states = vec![n, manifest.grid.snapshots(), manifest.family.n_vars()];
    expected_states.extend_from_slice(&manifest.grid.points);
    if manifest.params_shape != [n, p] || manifest.states_shape != expected_states {
        return Err(PdeError::ShapeMismatch(format!(
            "manifest shapes {:?}/{:?} disagree with family and grid ({:?})",
            manifest.params_shape, manifest.states_shape, expected_states
        )));
    }
    let per_traj: usize = expected_states[1..].iter().product();
    if params.len() != n * p || states.len() != n * per_traj {
        return Err(PdeError::ShapeMismatch(format!(
            "array sizes {}/{} do not match shapes {:?}/{:?}",
            params.len(),
            states.len(),
            manifest.params_shape,
            expected_states
        )));
    }

    let mut trajectories = Vec::with_capacity(n);
    for i in 0..n {
        let par = params[i * p..(i + 1) * p].to_vec();
        let st = Tensor::new(
            expected_states[1..].to_vec(),
            states[i * per_traj..(i + 1) * per_traj].to_vec(),
        )
        .map_err(|e| PdeError::ShapeMismatch(e.to_string()))?;
        trajectories.push(Trajectory {
            equation: EquationSpec::from_params(manifest.family, &par)?,
            params: par,
            states: st,
            grid: manifest.grid.clone(),
        });
    }
    Ok(Dataset { trajectories, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde::{generate_dataset, Family, GenerateConfig, Preset, Split};

    fn tiny() -> Dataset {
        let mut cfg = GenerateConfig::preset(Family::ReactionDiffusion1d, Split::Train, Preset::Desk, 5);
        cfg.count = 3;
        cfg.grid.horizon = cfg.grid.snapshot_dt * 3.0;
        generate_dataset(&cfg).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.trajectories, ds.trajectories);
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&tiny(), dir.path()).unwrap();
        let path = dir.path().join(STATES);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(PdeError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&tiny(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"schema_version\": 1", "\"schema_version\": 99");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(PdeError::VersionMismatch { found: 99, .. })
        ));
    }
}
