use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

use super::{param_shapes, ArchConfig, NetworkHandle};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// One link of a network's lineage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub stage: String,
    /// Parameter hash of the network this stage started from.
    pub parent_hash: Option<String>,
    pub config_hash: String,
}

/// Serializable ChaCha position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal string; JSON numbers cannot hold a u128 portably.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos: u128 = self.word_pos.parse().map_err(|_| Error::Checkpoint("bad rng word position".into()))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StoredParam {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// On-disk checkpoint container (JSON).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub scalar: String,
    pub arch: ArchConfig,
    pub trainable: bool,
    pub params_hash: String,
    pub provenance: Vec<ProvenanceRecord>,
    pub rng_state: Option<RngState>,
    params: Vec<StoredParam>,
}

impl Checkpoint {
    pub fn from_handle<T: Scalar>(net: &NetworkHandle<T>, rng_state: Option<RngState>) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            scalar: T::NAME.to_string(),
            arch: net.arch.clone(),
            trainable: net.trainable,
            params_hash: net.params_hash(),
            provenance: net.provenance.clone(),
            rng_state,
            params: net
                .params
                .iter()
                .map(|p| StoredParam { shape: p.shape().to_vec(), data: p.data().iter().map(|v| v.to_f64_lossy()).collect() })
                .collect(),
        }
    }

    /// Rebuilds the handle, checking version, layout and (optionally) the
    /// expected architecture.
    pub fn into_handle<T: Scalar>(self, expected: Option<&ArchConfig>) -> Result<NetworkHandle<T>> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} (this build reads {CHECKPOINT_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if let Some(exp) = expected {
            if *exp != self.arch {
                return Err(Error::Checkpoint(format!("architecture mismatch: stored {:?}, expected {exp:?}", self.arch)));
            }
        }
        let shapes = param_shapes(&self.arch);
        if shapes.len() != self.params.len()
            || shapes.iter().zip(&self.params).any(|(s, p)| *s != p.shape || p.data.len() != s.iter().product::<usize>())
        {
            return Err(Error::Checkpoint("parameter layout does not match architecture".into()));
        }
        let net = NetworkHandle {
            arch: self.arch,
            params: self
                .params
                .into_iter()
                .map(|p| Tensor::from_vec(&p.shape, p.data.into_iter().map(cast).collect()))
                .collect(),
            trainable: self.trainable,
            provenance: self.provenance,
        };
        if net.params_hash() != self.params_hash {
            return Err(Error::Checkpoint("parameter hash mismatch (corrupt or lossy scalar conversion)".into()));
        }
        Ok(net)
    }
}

pub fn save_checkpoint<T: Scalar>(path: &Path, net: &NetworkHandle<T>, rng_state: Option<RngState>) -> Result<()> {
    let ck = Checkpoint::from_handle(net, rng_state);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string(&ck)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path, expected: Option<&ArchConfig>) -> Result<(NetworkHandle<T>, Option<RngState>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    let rng = ck.rng_state.clone();
    Ok((ck.into_handle(expected)?, rng))
}

#[cfg(test)]
mod tests {
    use rand::{RngCore, SeedableRng};

    use super::*;
    use crate::nets::{DetectorConfig, GeneratorConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.json");
        let mut g = NetworkHandle::<f32>::init(ArchConfig::Generator(GeneratorConfig { width: 4, res_blocks: 1 }), 3);
        g.provenance.push(ProvenanceRecord { stage: "train_gan".into(), parent_hash: None, config_hash: "abc".into() });
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.next_u64();
        save_checkpoint(&path, &g, Some(RngState::capture(&rng))).unwrap();
        let (back, state) = load_checkpoint::<f32>(&path, Some(&g.arch)).unwrap();
        assert_eq!(back, g);
        let mut restored = state.unwrap().restore().unwrap();
        assert_eq!(restored.next_u64(), rng.next_u64());
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        let t = NetworkHandle::<f64>::init(ArchConfig::Detector(DetectorConfig::default()), 3);
        save_checkpoint(&path, &t, None).unwrap();
        let other = ArchConfig::Detector(DetectorConfig { width: 8, ..DetectorConfig::default() });
        assert!(matches!(load_checkpoint::<f64>(&path, Some(&other)), Err(Error::Checkpoint(_))));
        assert!(load_checkpoint::<f64>(&path, None).is_ok());
    }
}
