//! JSON checkpoints: `{"format", "config", "params": [{"name", "shape", "data"}]}`.
//!
//! Floats are written with shortest round-trip formatting and parsed with
//! exact rounding, so a save/load cycle reproduces every bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::Param;
use super::{EcgNet, EcgNetConfig};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::net::Classifier;

pub const CHECKPOINT_FORMAT: &str = "ecg-robust-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct StoredParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Stored {
    format: String,
    config: EcgNetConfig,
    params: Vec<StoredParam>,
}

pub fn save_checkpoint(net: &EcgNet, path: &Path) -> Result<()> {
    let stored = Stored {
        format: CHECKPOINT_FORMAT.into(),
        config: net.config().clone(),
        params: net
            .params()
            .iter()
            .map(|p| StoredParam {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.to_vec(),
            })
            .collect(),
    };
    let text = serde_json::to_string(&stored).map_err(|e| Error::data(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<EcgNet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stored: Stored =
        serde_json::from_str(&text).map_err(|e| Error::data(path, e.to_string()))?;
    if stored.format != CHECKPOINT_FORMAT {
        return Err(Error::data(
            path,
            format!("unknown checkpoint format {:?}", stored.format),
        ));
    }
    let params = stored
        .params
        .into_iter()
        .map(|p| {
            Ok(Param {
                value: Tensor::new(&p.shape, p.data)
                    .map_err(|e| Error::data(path, e.to_string()))?,
                name: p.name,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EcgNet::from_params(stored.config, params).map_err(|e| Error::data(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let net = EcgNet::new(EcgNetConfig::desk(3), 11).unwrap();
        save_checkpoint(&net, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config(), net.config());
        for (a, b) in net.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(net.checksum(), back.checksum());
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, "{\"format\":\"x\"}").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Data { .. })));
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing.json")),
            Err(Error::Io { .. })
        ));
    }
}
