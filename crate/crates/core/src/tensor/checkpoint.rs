use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{PirError, Result};

pub const CHECKPOINT_VERSION: &str = "pir-ckpt-1";

/// On-disk parameter snapshot plus arbitrary model metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub parameters: ParamStore,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub db_fingerprint: Option<String>,
}

impl Checkpoint {
    pub fn new(parameters: ParamStore) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION.to_string(),
            parameters,
            config: serde_json::Value::Null,
            db_fingerprint: None,
        }
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let text = serde_json::to_string_pretty(ckpt)?;
    fs::write(path, text)?;
    Ok(())
}

/// Reads and validates a checkpoint. Nothing is returned unless the whole
/// document parses and carries the expected version.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| PirError::Checkpoint(format!("{}: {e}", path.display())))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(PirError::Checkpoint(format!(
            "version mismatch: expected {CHECKPOINT_VERSION}, found {}",
            ckpt.version
        )));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let mut p = ParamStore::new();
        p.init_uniform("layer.w", &[3, 4], 7, 11);
        p.insert("tiny", Tensor::row_vector(vec![1e-300, -0.1 + 0.2, std::f64::consts::PI]));
        let ckpt = Checkpoint::new(p);
        write_checkpoint(&path, &ckpt).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        for (a, b) in back.parameters.flatten().iter().zip(ckpt.parameters.flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn version_and_corruption_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let mut ckpt = Checkpoint::new(ParamStore::new());
        ckpt.version = "pir-ckpt-0".into();
        write_checkpoint(&path, &ckpt).unwrap();
        assert!(read_checkpoint(&path).unwrap_err().to_string().contains("version mismatch"));

        fs::write(&path, "{\"version\": \"pir-ckpt-1\", \"parameters\": {\"w\": {\"shape\": [2]").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(PirError::Checkpoint(_))));
    }
}
