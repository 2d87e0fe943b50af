//! Demonstration datasets: generation, binary serialization, and the
//! companion human-readable index.
//!
//! File layout (all integers and floats little-endian, payload floats 32-bit):
//! magic `SDPDS`, format version, producing-config hash, instruction
//! vocabulary, scene arity, per-component action normalization statistics
//! (stored at 64-bit so normalized moments reproduce exactly), then
//! length-prefixed episode records.

use std::io::Write;
use std::path::Path;

use crate::error::{Result, SdpError};
use crate::numerics::Rng;

use super::expert::expert_rollout;
use super::tasks::{instruction_tokens, sample_task_args, vocab, TaskKind, TaskSpec};
use super::{
    Action, ContainerState, ObjectState, WorldConfig, WorldState, ACTION_DIM, NUM_OBJECTS,
    NUM_ZONES,
};

pub const DATASET_MAGIC: &[u8; 5] = b"SDPDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Episode {
    pub task: TaskSpec,
    pub success: bool,
    /// `n + 1` states; `states[i]` precedes `actions[i]`.
    pub states: Vec<WorldState>,
    pub actions: Vec<Action>,
    pub labels: Vec<u8>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn instruction(&self) -> [u16; super::tasks::INSTRUCTION_LEN] {
        instruction_tokens(&self.task)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config_hash: u64,
    pub vocab: Vec<String>,
    pub norm_mean: [f64; ACTION_DIM],
    pub norm_std: [f64; ACTION_DIM],
    pub episodes: Vec<Episode>,
}

impl Dataset {
    /// Per-component z-score; components with no variance pass through.
    pub fn normalize(&self, a: &Action) -> [f64; ACTION_DIM] {
        let mut out = [0.0f64; ACTION_DIM];
        for i in 0..ACTION_DIM {
            let std = if self.norm_std[i] > 1e-8 {
                self.norm_std[i]
            } else {
                1.0
            };
            out[i] = (f64::from(a.0[i]) - self.norm_mean[i]) / std;
        }
        out
    }

    pub fn denormalize(&self, v: &[f64; ACTION_DIM]) -> Action {
        let mut out = [0.0f32; ACTION_DIM];
        for i in 0..ACTION_DIM {
            let std = if self.norm_std[i] > 1e-8 {
                self.norm_std[i]
            } else {
                1.0
            };
            out[i] = (v[i] * std + self.norm_mean[i]) as f32;
        }
        Action::clipped(out)
    }

    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }
}

/// Generate expert demonstrations: `per_task` successful episodes for each
/// listed task kind. Failed expert attempts are discarded and redrawn.
pub fn generate_dataset(
    kinds: &[TaskKind],
    per_task: usize,
    seed: u64,
    config_hash: u64,
    cfg: &WorldConfig,
) -> Result<Dataset> {
    let env = Rng::stream(seed, "env");
    let mut episodes = Vec::with_capacity(kinds.len() * per_task);
    for kind in kinds {
        for ep in 0..per_task {
            let mut recorded = None;
            for attempt in 0u64..32 {
                let mut rng = env.substream(
                    (kind.index() as u64) * 1_000_000 + (ep as u64) * 64 + attempt,
                );
                let state = WorldState::reset(&mut rng);
                let task = sample_task_args(*kind, &mut rng);
                if let Some(rollout) = expert_rollout(&state, &task, cfg) {
                    if rollout.steps.is_empty() {
                        continue;
                    }
                    let mut states: Vec<WorldState> =
                        rollout.steps.iter().map(|(s, _, _)| s.clone()).collect();
                    states.push(rollout.final_state.clone());
                    episodes.push(Episode {
                        task,
                        success: true,
                        actions: rollout.steps.iter().map(|(_, a, _)| *a).collect(),
                        labels: rollout.steps.iter().map(|(_, _, l)| *l).collect(),
                        states,
                    });
                    recorded = Some(());
                    break;
                }
            }
            if recorded.is_none() {
                return Err(SdpError::Invalid(format!(
                    "expert could not complete {} episode {ep}",
                    kind.name()
                )));
            }
        }
    }

    let (norm_mean, norm_std) = action_stats(&episodes);
    Ok(Dataset {
        config_hash,
        vocab: vocab(),
        norm_mean,
        norm_std,
        episodes,
    })
}

fn action_stats(episodes: &[Episode]) -> ([f64; ACTION_DIM], [f64; ACTION_DIM]) {
    let mut mean = [0.0f64; ACTION_DIM];
    let mut count = 0usize;
    for ep in episodes {
        for a in &ep.actions {
            for i in 0..ACTION_DIM {
                mean[i] += f64::from(a.0[i]);
            }
            count += 1;
        }
    }
    let n = count.max(1) as f64;
    for m in &mut mean {
        *m /= n;
    }
    let mut var = [0.0f64; ACTION_DIM];
    for ep in episodes {
        for a in &ep.actions {
            for i in 0..ACTION_DIM {
                let d = f64::from(a.0[i]) - mean[i];
                var[i] += d * d;
            }
        }
    }
    let mut std = [0.0f64; ACTION_DIM];
    for i in 0..ACTION_DIM {
        std[i] = (var[i] / n).sqrt();
    }
    (mean, std)
}

// ---- binary encoding -------------------------------------------------------

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(SdpError::Format {
                what: "dataset",
                reason: format!("unexpected end of file at offset {}", self.pos),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn i16(&mut self) -> Result<i16> {
        Ok(i16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| SdpError::Format {
            what: "dataset",
            reason: "invalid utf-8 in vocabulary".into(),
        })
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn encode_state(out: &mut Vec<u8>, s: &WorldState) {
    for v in s.gripper_pos {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in s.gripper_rot {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&s.aperture.to_le_bytes());
    out.extend_from_slice(&s.held.map_or(-1i16, |h| i16::from(h)).to_le_bytes());
    for v in s.hold_offset {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for obj in &s.objects {
        for v in obj.pos {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(u8::from(obj.held));
        out.extend_from_slice(&obj.poured_over.map_or(-1i16, |z| i16::from(z)).to_le_bytes());
    }
    for z in &s.zones {
        out.extend_from_slice(&z[0].to_le_bytes());
        out.extend_from_slice(&z[1].to_le_bytes());
    }
    out.extend_from_slice(&s.container.pos[0].to_le_bytes());
    out.extend_from_slice(&s.container.pos[1].to_le_bytes());
    out.push(u8::from(s.container.lid_open));
    out.extend_from_slice(&s.container.twist.to_le_bytes());
}

fn decode_state(c: &mut Cursor) -> Result<WorldState> {
    let mut gripper_pos = [0.0f32; 3];
    for v in &mut gripper_pos {
        *v = c.f32()?;
    }
    let mut gripper_rot = [0.0f32; 3];
    for v in &mut gripper_rot {
        *v = c.f32()?;
    }
    let aperture = c.f32()?;
    let held_raw = c.i16()?;
    let mut hold_offset = [0.0f32; 3];
    for v in &mut hold_offset {
        *v = c.f32()?;
    }
    let mut objects = Vec::with_capacity(NUM_OBJECTS);
    for _ in 0..NUM_OBJECTS {
        let mut pos = [0.0f32; 3];
        for v in &mut pos {
            *v = c.f32()?;
        }
        let held = c.u8()? != 0;
        let poured = c.i16()?;
        objects.push(ObjectState {
            pos,
            held,
            poured_over: (poured >= 0).then_some(poured as u8),
        });
    }
    let mut zones = Vec::with_capacity(NUM_ZONES);
    for _ in 0..NUM_ZONES {
        zones.push([c.f32()?, c.f32()?]);
    }
    let container = ContainerState {
        pos: [c.f32()?, c.f32()?],
        lid_open: c.u8()? != 0,
        twist: c.f32()?,
    };
    Ok(WorldState {
        gripper_pos,
        gripper_rot,
        aperture,
        held: (held_raw >= 0).then_some(held_raw as u8),
        hold_offset,
        objects,
        zones,
        container,
    })
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&ds.config_hash.to_le_bytes());
    out.extend_from_slice(&(ds.vocab.len() as u16).to_le_bytes());
    for tok in &ds.vocab {
        put_string(&mut out, tok);
    }
    out.push(NUM_OBJECTS as u8);
    out.push(NUM_ZONES as u8);
    for v in ds.norm_mean {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in ds.norm_std {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(ds.episodes.len() as u32).to_le_bytes());
    for ep in &ds.episodes {
        let mut rec = Vec::new();
        rec.push(ep.task.kind.index() as u8);
        rec.push(ep.task.arg0);
        rec.push(ep.task.arg1);
        rec.push(u8::from(ep.success));
        for tok in ep.instruction() {
            rec.extend_from_slice(&tok.to_le_bytes());
        }
        rec.extend_from_slice(&(ep.len() as u32).to_le_bytes());
        for s in &ep.states {
            encode_state(&mut rec, s);
        }
        for a in &ep.actions {
            for v in a.0 {
                rec.extend_from_slice(&v.to_le_bytes());
            }
        }
        rec.extend_from_slice(&ep.labels);
        out.extend_from_slice(&(rec.len() as u32).to_le_bytes());
        out.extend_from_slice(&rec);
    }
    out
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset> {
    let mut c = Cursor::new(buf);
    if c.take(5)? != DATASET_MAGIC {
        return Err(SdpError::Format {
            what: "dataset",
            reason: "bad magic".into(),
        });
    }
    let version = c.u32()?;
    if version != DATASET_VERSION {
        return Err(SdpError::DatasetVersion {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let config_hash = c.u64()?;
    let vocab_len = c.u16()? as usize;
    let mut vocab = Vec::with_capacity(vocab_len);
    for _ in 0..vocab_len {
        vocab.push(c.string()?);
    }
    let objects = c.u8()? as usize;
    let zones = c.u8()? as usize;
    if objects != NUM_OBJECTS || zones != NUM_ZONES {
        return Err(SdpError::Format {
            what: "dataset",
            reason: format!("scene arity {objects}/{zones} does not match this build"),
        });
    }
    let mut norm_mean = [0.0f64; ACTION_DIM];
    for v in &mut norm_mean {
        *v = c.f64()?;
    }
    let mut norm_std = [0.0f64; ACTION_DIM];
    for v in &mut norm_std {
        *v = c.f64()?;
    }
    let count = c.u32()? as usize;
    let mut episodes = Vec::with_capacity(count);
    for _ in 0..count {
        let _rec_len = c.u32()?;
        let kind_idx = c.u8()? as usize;
        let kind = *super::tasks::ALL_TASK_KINDS
            .get(kind_idx)
            .ok_or(SdpError::Format {
                what: "dataset",
                reason: format!("task kind {kind_idx} out of range"),
            })?;
        let arg0 = c.u8()?;
        let arg1 = c.u8()?;
        let success = c.u8()? != 0;
        for _ in 0..super::tasks::INSTRUCTION_LEN {
            let _ = c.u16()?;
        }
        let n = c.u32()? as usize;
        let mut states = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            states.push(decode_state(&mut c)?);
        }
        let mut actions = Vec::with_capacity(n);
        for _ in 0..n {
            let mut a = [0.0f32; ACTION_DIM];
            for v in &mut a {
                *v = c.f32()?;
            }
            actions.push(Action(a));
        }
        let labels = c.take(n)?.to_vec();
        episodes.push(Episode {
            task: TaskSpec { kind, arg0, arg1 },
            success,
            states,
            actions,
            labels,
        });
    }
    Ok(Dataset {
        config_hash,
        vocab,
        norm_mean,
        norm_std,
        episodes,
    })
}

/// Write the dataset and its human-readable index (`<path>.idx`).
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(ds);
    std::fs::write(path, bytes).map_err(|e| SdpError::io(path.display().to_string(), e))?;
    let index_path = format!("{}.idx", path.display());
    let mut index = String::new();
    for ep in &ds.episodes {
        index.push_str(&format!(
            "{}\t{}\t{}\n",
            ep.task.describe(),
            ep.len(),
            if ep.success { "success" } else { "failure" }
        ));
    }
    let mut f =
        std::fs::File::create(&index_path).map_err(|e| SdpError::io(index_path.clone(), e))?;
    f.write_all(index.as_bytes())
        .map_err(|e| SdpError::io(index_path.clone(), e))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes =
        std::fs::read(path).map_err(|e| SdpError::io(path.display().to_string(), e))?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::tasks::ALL_TASK_KINDS;

    fn small_dataset(seed: u64) -> Dataset {
        generate_dataset(&ALL_TASK_KINDS, 3, seed, 0xfeed, &WorldConfig::default()).unwrap()
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let a = encode_dataset(&small_dataset(77));
        let b = encode_dataset(&small_dataset(77));
        assert_eq!(a, b);
        let c = encode_dataset(&small_dataset(78));
        assert_ne!(a, c);
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let ds = small_dataset(5);
        let decoded = decode_dataset(&encode_dataset(&ds)).unwrap();
        assert_eq!(decoded.vocab, ds.vocab);
        assert_eq!(decoded.norm_mean, ds.norm_mean);
        assert_eq!(decoded.norm_std, ds.norm_std);
        assert_eq!(decoded.episodes.len(), ds.episodes.len());
        for (a, b) in decoded.episodes.iter().zip(&ds.episodes) {
            assert_eq!(a.task, b.task);
            assert_eq!(a.states, b.states);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.actions, b.actions);
        }
    }

    #[test]
    fn normalization_stats_recompute_from_file() {
        let ds = small_dataset(9);
        let decoded = decode_dataset(&encode_dataset(&ds)).unwrap();
        let mut count = 0usize;
        let mut sums = [0.0f64; ACTION_DIM];
        let mut sq = [0.0f64; ACTION_DIM];
        for ep in &decoded.episodes {
            for a in &ep.actions {
                let n = decoded.normalize(a);
                for i in 0..ACTION_DIM {
                    sums[i] += n[i];
                    sq[i] += n[i] * n[i];
                }
                count += 1;
            }
        }
        for i in 0..ACTION_DIM {
            if decoded.norm_std[i] <= 1e-8 {
                continue;
            }
            let mean = sums[i] / count as f64;
            let std = (sq[i] / count as f64 - mean * mean).sqrt();
            assert!(mean.abs() < 1e-9, "component {i} mean {mean}");
            assert!((std - 1.0).abs() < 1e-9, "component {i} std {std}");
        }
    }

    #[test]
    fn rejects_future_version() {
        let ds = small_dataset(3);
        let mut bytes = encode_dataset(&ds);
        bytes[5..9].copy_from_slice(&99u32.to_le_bytes());
        let err = decode_dataset(&bytes).unwrap_err();
        assert!(matches!(err, SdpError::DatasetVersion { found: 99, .. }));
    }
}
