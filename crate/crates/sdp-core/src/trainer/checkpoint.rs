//! Checkpoints: every parameter tensor by name, the config snapshot, action
//! normalization, skill names and templates, and RNG stream counters.
//! Values are stored as 64-bit floats, which round-trips both precisions
//! exactly, so a reloaded checkpoint reproduces evaluation bit for bit.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Result, SdpError};
use crate::numerics::{Precision, Scalar, Tensor};
use crate::policy::Policy;
use crate::world::{ACTION_DIM, SKILL_NAMES};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SDPCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct CheckpointData {
    pub version: u32,
    pub config_hash: u64,
    pub precision: Precision,
    pub config_text: String,
    pub norm_mean: [f64; ACTION_DIM],
    pub norm_std: [f64; ACTION_DIM],
    pub skill_names: Vec<String>,
    pub templates: Vec<String>,
    pub rng_states: Vec<(String, u64)>,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(SdpError::Format {
                what: "checkpoint",
                reason: format!("unexpected end of file at offset {}", self.pos),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| SdpError::Format {
            what: "checkpoint",
            reason: "invalid utf-8".into(),
        })
    }
}

pub fn encode_checkpoint(data: &CheckpointData) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&data.version.to_le_bytes());
    out.extend_from_slice(&data.config_hash.to_le_bytes());
    out.push(match data.precision {
        Precision::F32 => 0,
        Precision::F64 => 1,
    });
    put_string(&mut out, &data.config_text);
    for v in data.norm_mean.iter().chain(&data.norm_std) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(data.skill_names.len() as u32).to_le_bytes());
    for s in &data.skill_names {
        put_string(&mut out, s);
    }
    out.extend_from_slice(&(data.templates.len() as u32).to_le_bytes());
    for s in &data.templates {
        put_string(&mut out, s);
    }
    out.extend_from_slice(&(data.rng_states.len() as u32).to_le_bytes());
    for (name, counter) in &data.rng_states {
        put_string(&mut out, name);
        out.extend_from_slice(&counter.to_le_bytes());
    }
    out.extend_from_slice(&(data.params.len() as u32).to_le_bytes());
    for (name, shape, values) in &data.params {
        put_string(&mut out, name);
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<CheckpointData> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(SdpError::Format {
            what: "checkpoint",
            reason: "bad magic".into(),
        });
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(SdpError::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config_hash = c.u64()?;
    let precision = match c.take(1)?[0] {
        0 => Precision::F32,
        1 => Precision::F64,
        other => {
            return Err(SdpError::Format {
                what: "checkpoint",
                reason: format!("unknown precision tag {other}"),
            })
        }
    };
    let config_text = c.string()?;
    let mut norm_mean = [0.0f64; ACTION_DIM];
    for v in &mut norm_mean {
        *v = c.f64()?;
    }
    let mut norm_std = [0.0f64; ACTION_DIM];
    for v in &mut norm_std {
        *v = c.f64()?;
    }
    let n_names = c.u32()? as usize;
    let skill_names = (0..n_names).map(|_| c.string()).collect::<Result<_>>()?;
    let n_templates = c.u32()? as usize;
    let templates = (0..n_templates).map(|_| c.string()).collect::<Result<_>>()?;
    let n_rng = c.u32()? as usize;
    let mut rng_states = Vec::with_capacity(n_rng);
    for _ in 0..n_rng {
        let name = c.string()?;
        rng_states.push((name, c.u64()?));
    }
    let n_params = c.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = c.string()?;
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(c.f64()?);
        }
        params.push((name, shape, values));
    }
    Ok(CheckpointData {
        version,
        config_hash,
        precision,
        config_text,
        norm_mean,
        norm_std,
        skill_names,
        templates,
        rng_states,
        params,
    })
}

pub fn checkpoint_of_policy<T: Scalar>(
    policy: &Policy<T>,
    rng_states: Vec<(String, u64)>,
) -> CheckpointData {
    CheckpointData {
        version: CHECKPOINT_VERSION,
        config_hash: policy.config_hash,
        precision: T::PRECISION,
        config_text: policy.run.to_toml(),
        norm_mean: policy.norm_mean,
        norm_std: policy.norm_std,
        skill_names: SKILL_NAMES.iter().map(|s| s.to_string()).collect(),
        templates: policy.run.skills.templates.clone(),
        rng_states,
        params: policy
            .store
            .iter()
            .map(|(_, name, t)| {
                (
                    name.to_string(),
                    t.shape().to_vec(),
                    t.data().iter().map(|v| v.as_f64()).collect(),
                )
            })
            .collect(),
    }
}

pub fn save_checkpoint<T: Scalar>(
    policy: &Policy<T>,
    rng_states: Vec<(String, u64)>,
    path: &Path,
) -> Result<()> {
    let data = checkpoint_of_policy(policy, rng_states);
    std::fs::write(path, encode_checkpoint(&data))
        .map_err(|e| SdpError::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let buf = std::fs::read(path).map_err(|e| SdpError::io(path.display().to_string(), e))?;
    decode_checkpoint(&buf)
}

/// Rebuild a runnable policy from checkpoint data. The requested precision
/// must match the stored one; parameter names and shapes must match the
/// architecture described by the embedded config.
pub fn restore_policy<T: Scalar>(data: &CheckpointData) -> Result<Policy<T>> {
    if data.precision != T::PRECISION {
        return Err(SdpError::Invalid(format!(
            "checkpoint precision {} does not match requested {}",
            data.precision,
            T::PRECISION
        )));
    }
    let run = RunConfig::from_toml(&data.config_text)?;
    let mut policy = Policy::<T>::new(run, data.norm_mean, data.norm_std)?;
    if data.params.len() != policy.store.len() {
        return Err(SdpError::Format {
            what: "checkpoint",
            reason: format!(
                "{} stored parameters but the architecture has {}",
                data.params.len(),
                policy.store.len()
            ),
        });
    }
    for (name, shape, values) in &data.params {
        let id = policy.store.lookup(name).ok_or_else(|| SdpError::Format {
            what: "checkpoint",
            reason: format!("unknown parameter `{name}`"),
        })?;
        let tensor = Tensor::new(shape.clone(), values.iter().map(|&v| T::of(v)).collect())?;
        policy.store.set_value(id, tensor)?;
    }
    policy.skills.rebuild_cache(&policy.store)?;
    Ok(policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::eval::{evaluate, EvalOptions};

    fn tiny_policy() -> Policy<f32> {
        let run = RunConfig::from_toml(
            "seed = 4\n\
             [encoder]\nwidth = 16\ndepth = 1\nheads = 2\nffn_mult = 2\n\
             [skills]\nd_text = 16\nprojector_hidden = 8\n\
             [denoiser]\nblocks = 1\nwidth = 16\nheads = 2\nchunk_len = 4\nlora_rank = 2\nffn_mult = 2\nsigma_embed_dim = 4\ncond_hidden = 8\nhyper_hidden = 4\n\
             [router]\nhidden = 8\n\
             [trainer]\ntasks = [\"lift\"]\neval_episodes = 2\nn_chains = 2\n",
        )
        .unwrap();
        Policy::new(run, [0.01; 7], [0.7; 7]).unwrap()
    }

    #[test]
    fn checkpoint_roundtrips_and_reproduces_evaluation_bit_exactly() {
        let policy = tiny_policy();
        let data = checkpoint_of_policy(&policy, vec![("noise".into(), 42)]);
        let decoded = decode_checkpoint(&encode_checkpoint(&data)).unwrap();
        assert_eq!(decoded.config_hash, policy.config_hash);
        assert_eq!(decoded.rng_states, vec![("noise".to_string(), 42)]);
        assert_eq!(decoded.skill_names.len(), 8);

        let restored: Policy<f32> = restore_policy(&decoded).unwrap();
        let opts = EvalOptions {
            seed: 5,
            n_chains: 2,
            chain_length: 5,
            eval_episodes: 2,
            oracle: false,
            threads: 2,
        };
        let (a, ta) = evaluate(&policy, &opts).unwrap();
        let (b, tb) = evaluate(&restored, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn version_mismatch_is_refused() {
        let policy = tiny_policy();
        let mut bytes = encode_checkpoint(&checkpoint_of_policy(&policy, vec![]));
        bytes[8..12].copy_from_slice(&9u32.to_le_bytes());
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(matches!(err, SdpError::CheckpointVersion { found: 9, .. }));
    }

    #[test]
    fn precision_mismatch_is_refused() {
        let policy = tiny_policy();
        let data = checkpoint_of_policy(&policy, vec![]);
        let err = match restore_policy::<f64>(&data) {
            Ok(_) => panic!("f64 restore of an f32 checkpoint must fail"),
            Err(e) => e,
        };
        assert!(err.to_string().contains("precision"), "{err}");
    }
}
