//! `.traj` interchange format.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! magic               8 bytes  "OFRLTRAJ"
//! version             u32      1
//! env_name            u32 byte length, then UTF-8 bytes
//! state_dim           u32
//! action_dim          u32
//! max_episode_length  u32
//! reward_regime       u8       0 dense, 1 sparse, 2 sparsified
//! n_trajectories      u64
//! n records:
//!   len               u32
//!   states            f64 * len * state_dim  (row-major)
//!   actions           f64 * len * action_dim
//!   rewards           f64 * len
//!   success           u8       0 absent, 1 false, 2 true
//! ```
//!
//! The text variant is JSON lines: a header object followed by one object per
//! trajectory. Floats are written in shortest round-trip form, so both
//! variants reproduce every `f64` bit-for-bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetMeta, RewardRegime, Trajectory, TrajectoryDataset};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"OFRLTRAJ";
const VERSION: u32 = 1;
const TEXT_FORMAT: &str = "offrl-traj";

pub fn encode_binary(ds: &TrajectoryDataset) -> Vec<u8> {
    let meta = ds.meta();
    let mut out = Vec::with_capacity(64 + ds.total_transitions() * 8 * (meta.state_dim + meta.action_dim + 1));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.env_name.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.env_name.as_bytes());
    out.extend_from_slice(&(meta.state_dim as u32).to_le_bytes());
    out.extend_from_slice(&(meta.action_dim as u32).to_le_bytes());
    out.extend_from_slice(&(meta.max_episode_length as u32).to_le_bytes());
    out.push(meta.reward_regime.code());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    for traj in ds.trajectories() {
        out.extend_from_slice(&(traj.len() as u32).to_le_bytes());
        for v in traj.states().iter().chain(traj.actions()).chain(traj.rewards()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(match traj.success() {
            None => 0,
            Some(false) => 1,
            Some(true) => 2,
        });
    }
    out
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TextHeader {
    format: String,
    version: u32,
    env_name: String,
    state_dim: usize,
    action_dim: usize,
    max_episode_length: usize,
    reward_regime: RewardRegime,
    n: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TextRecord {
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    #[serde(default)]
    success: Option<bool>,
}

pub fn encode_text(ds: &TrajectoryDataset) -> String {
    let meta = ds.meta();
    let header = TextHeader {
        format: TEXT_FORMAT.into(),
        version: VERSION,
        env_name: meta.env_name.clone(),
        state_dim: meta.state_dim,
        action_dim: meta.action_dim,
        max_episode_length: meta.max_episode_length,
        reward_regime: meta.reward_regime,
        n: ds.len(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for traj in ds.trajectories() {
        let rec = TextRecord {
            states: traj.states().chunks(meta.state_dim).map(<[f64]>::to_vec).collect(),
            actions: traj.actions().chunks(meta.action_dim).map(<[f64]>::to_vec).collect(),
            rewards: traj.rewards().to_vec(),
            success: traj.success(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn save_dataset(ds: &TrajectoryDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_binary(ds)).map_err(|e| Error::io(path, e))
}

pub fn save_dataset_text(ds: &TrajectoryDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_text(ds)).map_err(|e| Error::io(path, e))
}

/// Reads either variant; the format is detected from the leading bytes.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<TrajectoryDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn decode(bytes: &[u8]) -> Result<TrajectoryDataset> {
    if bytes.starts_with(MAGIC) {
        decode_binary(bytes)
    } else if bytes.iter().find(|b| !b.is_ascii_whitespace()) == Some(&b'{') {
        decode_text(bytes)
    } else {
        Err(Error::Format {
            location: "header".into(),
            message: "unrecognized magic bytes (expected OFRLTRAJ or a JSON header line)".into(),
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let slice = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(slice)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Option<Vec<f64>> {
        let raw = self.take(n.checked_mul(8)?)?;
        Some(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }
}

fn header_err(message: impl Into<String>) -> Error {
    Error::Format {
        location: "header".into(),
        message: message.into(),
    }
}

fn decode_binary(bytes: &[u8]) -> Result<TrajectoryDataset> {
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let truncated = || header_err("malformed header: unexpected end of file");
    let version = r.u32().ok_or_else(truncated)?;
    if version != VERSION {
        return Err(header_err(format!("malformed header: unsupported version {version}")));
    }
    let name_len = r.u32().ok_or_else(truncated)? as usize;
    let env_name = String::from_utf8(r.take(name_len).ok_or_else(truncated)?.to_vec())
        .map_err(|_| header_err("malformed header: env_name is not UTF-8"))?;
    let state_dim = r.u32().ok_or_else(truncated)? as usize;
    let action_dim = r.u32().ok_or_else(truncated)? as usize;
    let max_episode_length = r.u32().ok_or_else(truncated)? as usize;
    let regime_code = r.u8().ok_or_else(truncated)?;
    let reward_regime = RewardRegime::from_code(regime_code)
        .ok_or_else(|| header_err(format!("malformed header: unknown reward regime code {regime_code}")))?;
    let n = r.u64().ok_or_else(truncated)? as usize;
    let meta = DatasetMeta {
        env_name,
        state_dim,
        action_dim,
        max_episode_length,
        reward_regime,
    };
    super::validate_meta(&meta)?;

    let mut trajectories = Vec::with_capacity(n.min(1 << 20));
    for i in 0..n {
        let record = i + 1;
        let truncated = || Error::Format {
            location: format!("record {record} of {n}"),
            message: "truncated: unexpected end of file".into(),
        };
        let len = r.u32().ok_or_else(truncated)? as usize;
        let states = r.f64s(len * state_dim).ok_or_else(truncated)?;
        let actions = r.f64s(len * action_dim).ok_or_else(truncated)?;
        let rewards = r.f64s(len).ok_or_else(truncated)?;
        let success = match r.u8().ok_or_else(truncated)? {
            0 => None,
            1 => Some(false),
            2 => Some(true),
            other => {
                return Err(Error::Format {
                    location: format!("record {record} of {n}"),
                    message: format!("invalid success byte {other}"),
                })
            }
        };
        let traj = Trajectory::from_flat(state_dim, action_dim, states, actions, rewards, success)
            .map_err(|e| Error::Format {
                location: format!("record {record} of {n}"),
                message: e.to_string(),
            })?;
        trajectories.push(traj);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            location: format!("byte {}", r.pos),
            message: format!("{} trailing bytes after {n} records", bytes.len() - r.pos),
        });
    }
    TrajectoryDataset::new(meta, trajectories)
}

fn decode_text(bytes: &[u8]) -> Result<TrajectoryDataset> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Format {
        location: "text".into(),
        message: format!("not UTF-8: {e}"),
    })?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| header_err("empty file"))?;
    let header: TextHeader = serde_json::from_str(first).map_err(|e| Error::Format {
        location: "line 1 (header)".into(),
        message: format!("malformed header: {e}"),
    })?;
    if header.format != TEXT_FORMAT || header.version != VERSION {
        return Err(header_err(format!(
            "malformed header: expected format {TEXT_FORMAT:?} version {VERSION}"
        )));
    }
    let meta = DatasetMeta {
        env_name: header.env_name,
        state_dim: header.state_dim,
        action_dim: header.action_dim,
        max_episode_length: header.max_episode_length,
        reward_regime: header.reward_regime,
    };
    super::validate_meta(&meta)?;
    let mut trajectories = Vec::with_capacity(header.n);
    for (record, (lineno, line)) in (1..=header.n).zip(lines.by_ref()) {
        let location = format!("line {} (record {record} of {})", lineno + 1, header.n);
        let rec: TextRecord = serde_json::from_str(line).map_err(|e| Error::Format {
            location: location.clone(),
            message: e.to_string(),
        })?;
        let flatten = |rows: Vec<Vec<f64>>, dim: usize, what: &str| -> Result<Vec<f64>> {
            if let Some((t, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != dim) {
                return Err(Error::Format {
                    location: location.clone(),
                    message: format!("{what} at step {t} has length {}, expected {dim}", row.len()),
                });
            }
            Ok(rows.into_iter().flatten().collect())
        };
        let states = flatten(rec.states, meta.state_dim, "state")?;
        let actions = flatten(rec.actions, meta.action_dim, "action")?;
        let traj = Trajectory::from_flat(meta.state_dim, meta.action_dim, states, actions, rec.rewards, rec.success)
            .map_err(|e| Error::Format {
                location: location.clone(),
                message: e.to_string(),
            })?;
        trajectories.push(traj);
    }
    if trajectories.len() < header.n {
        return Err(Error::Format {
            location: format!("record {} of {}", trajectories.len() + 1, header.n),
            message: "truncated: missing record".into(),
        });
    }
    if let Some((lineno, _)) = lines.next() {
        return Err(Error::Format {
            location: format!("line {}", lineno + 1),
            message: format!("more records than the {} declared", header.n),
        });
    }
    TrajectoryDataset::new(meta, trajectories)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture() -> TrajectoryDataset {
        let meta = DatasetMeta {
            env_name: "fixture".into(),
            state_dim: 2,
            action_dim: 1,
            max_episode_length: 4,
            reward_regime: RewardRegime::Sparse,
        };
        let t = |len: usize, ok: bool, off: f64| {
            let mut rewards = vec![0.0; len];
            rewards[len - 1] = if ok { 1.0 } else { 0.0 };
            Trajectory::from_flat(
                2,
                1,
                (0..2 * len).map(|i| off + i as f64 * 0.1).collect(),
                (0..len).map(|i| -(i as f64) / 3.0).collect(),
                rewards,
                Some(ok),
            )
            .unwrap()
        };
        TrajectoryDataset::new(meta, vec![t(3, true, 0.0), t(1, false, 1.5), t(4, false, -2.0)]).unwrap()
    }

    #[test]
    fn binary_round_trip() {
        let ds = fixture();
        assert_eq!(decode(&encode_binary(&ds)).unwrap(), ds);
    }

    #[test]
    fn text_round_trip() {
        let ds = fixture();
        assert_eq!(decode(encode_text(&ds).as_bytes()).unwrap(), ds);
    }

    #[test]
    fn truncation_names_missing_record() {
        let ds = fixture();
        let mut bytes = encode_binary(&ds);
        // claim five records while only three are present
        let n_pos = 8 + 4 + 4 + ds.meta().env_name.len() + 4 + 4 + 4 + 1;
        bytes[n_pos..n_pos + 8].copy_from_slice(&5u64.to_le_bytes());
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("record 4 of 5"), "{err}");

        let mut text: Vec<&str> = Vec::new();
        let encoded = encode_text(&ds);
        text.extend(encoded.lines().take(3));
        let err = decode(text.join("\n").as_bytes()).unwrap_err();
        assert!(err.to_string().contains("record 3 of 3"), "{err}");
    }

    #[test]
    fn truncated_payload_reports_record() {
        let bytes = encode_binary(&fixture());
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("record 3 of 3"), "{err}");
    }

    #[test]
    fn bad_header() {
        assert!(matches!(decode(b"NOTATRAJ"), Err(Error::Format { .. })));
        let mut bytes = encode_binary(&fixture());
        bytes[8] = 9;
        assert!(decode(&bytes).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn zero_action_dim_rejected() {
        let line = r#"{"format":"offrl-traj","version":1,"env_name":"x","state_dim":2,"action_dim":0,"max_episode_length":3,"reward_regime":"dense","n":0}"#;
        assert!(matches!(decode(line.as_bytes()), Err(Error::Dimension { .. })));
    }

    #[test]
    fn text_dimension_mismatch() {
        let text = "{\"format\":\"offrl-traj\",\"version\":1,\"env_name\":\"x\",\"state_dim\":2,\"action_dim\":1,\"max_episode_length\":3,\"reward_regime\":\"dense\",\"n\":1}\n{\"states\":[[1.0]],\"actions\":[[0.0]],\"rewards\":[1.0]}\n";
        let err = decode(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    proptest! {
        #[test]
        fn arbitrary_floats_round_trip(
            vals in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 3..40),
            success in prop::option::of(any::<bool>()),
        ) {
            let len = vals.len() / 3;
            let meta = DatasetMeta {
                env_name: "p".into(),
                state_dim: 1,
                action_dim: 1,
                max_episode_length: len,
                reward_regime: RewardRegime::Dense,
            };
            let t = Trajectory::from_flat(1, 1, vals[..len].to_vec(), vals[len..2 * len].to_vec(), vals[2 * len..3 * len].to_vec(), success).unwrap();
            let ds = TrajectoryDataset::new(meta, vec![t]).unwrap();
            let back = decode(&encode_binary(&ds)).unwrap();
            prop_assert_eq!(&back, &ds);
            let back = decode(encode_text(&ds).as_bytes()).unwrap();
            for (a, b) in back.trajectories()[0].rewards().iter().zip(ds.trajectories()[0].rewards()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
