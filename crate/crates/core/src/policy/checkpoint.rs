//! Checkpoint files: `OFRLCKPT` magic, `u32` version, `u64` header length,
//! a JSON header (architecture, training metadata, state normalization,
//! parameter names and shapes), `u64` scalar count, then the parameters as
//! little-endian `f64` in store order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DtPolicy, MlpPolicy, Policy, PolicyConfig, StateNorm};
use crate::dataset::RewardRegime;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"OFRLCKPT";
const VERSION: u32 = 1;

/// Training provenance stored with the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub method: String,
    pub env_name: String,
    pub seed: u64,
    /// Optimizer steps taken when the snapshot was written.
    pub step: u64,
    pub epoch: usize,
    /// Initial return-to-go used when rolling out a transformer policy.
    pub rtg_target: Option<f64>,
    /// Reward regime of the training data; picks the evaluation reward mode.
    #[serde(default)]
    pub regime: Option<RewardRegime>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub policy: Policy,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct Header {
    policy: PolicyConfig,
    meta: CheckpointMeta,
    state_norm: StateNorm,
    params: Vec<ParamHeader>,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let store = ckpt.policy.params();
    let header = Header {
        policy: ckpt.policy.config(),
        meta: ckpt.meta.clone(),
        state_norm: ckpt.policy.state_norm().clone(),
        params: store
            .names()
            .iter()
            .zip(store.tensors())
            .map(|(n, t)| ParamHeader {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let flat = store.flatten();
    let mut out = Vec::with_capacity(32 + json.len() + 8 * flat.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_owned());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated file"))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(8)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic bytes)"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header =
        serde_json::from_slice(take(hlen)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let payload = take(count.checked_mul(8).ok_or_else(|| bad("parameter count overflows"))?)?;
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if pos != bytes.len() {
        return Err(bad("trailing bytes after payload"));
    }
    let policy = match header.policy {
        PolicyConfig::Mlp(c) => Policy::Mlp(MlpPolicy::from_parts(c, &flat, header.state_norm)?),
        PolicyConfig::Dt(c) => Policy::Dt(DtPolicy::from_parts(c, &flat, header.state_norm)?),
    };
    let store = policy.params();
    let layout_matches = store.len() == header.params.len()
        && store
            .names()
            .iter()
            .zip(store.tensors())
            .zip(&header.params)
            .all(|((n, t), h)| *n == h.name && t.shape() == h.shape.as_slice());
    if !layout_matches {
        return Err(bad("parameter layout does not match the architecture"));
    }
    Ok(Checkpoint {
        policy,
        meta: header.meta,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{DtConfig, MlpConfig};
    use crate::rng::SeedPath;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            method: "dt".into(),
            env_name: "pointreach".into(),
            seed: 7,
            step: 1234,
            epoch: 3,
            rtg_target: Some(0.1 + 0.2),
            regime: Some(RewardRegime::Sparse),
        }
    }

    #[test]
    fn round_trip_both_architectures() {
        let mut rng = SeedPath::new(0).rng();
        let mut mlp = MlpPolicy::new(MlpConfig { hidden: 8, ..MlpConfig::new(4, 2) }, &mut rng).unwrap();
        mlp.set_state_norm(StateNorm {
            mean: vec![0.1, 0.2, 0.3, 1.0 / 3.0],
            std: vec![1.0, 2.0, 3.0, 0.7],
        })
        .unwrap();
        let dt = DtPolicy::new(DtConfig { embed_dim: 8, layers: 1, ..DtConfig::new(4, 2, 3) }, &mut rng).unwrap();
        for policy in [Policy::Mlp(mlp), Policy::Dt(dt)] {
            let ckpt = Checkpoint { policy, meta: meta() };
            let bytes = encode_checkpoint(&ckpt);
            let back = decode_checkpoint(&bytes).unwrap();
            assert_eq!(back, ckpt);
            assert_eq!(encode_checkpoint(&back), bytes);
        }
    }

    #[test]
    fn corrupt_files_rejected() {
        let mut rng = SeedPath::new(0).rng();
        let mlp = MlpPolicy::new(MlpConfig { hidden: 4, ..MlpConfig::new(2, 1) }, &mut rng).unwrap();
        let bytes = encode_checkpoint(&Checkpoint {
            policy: Policy::Mlp(mlp),
            meta: meta(),
        });
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_checkpoint(b"OFRLTRAJ").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }
}
