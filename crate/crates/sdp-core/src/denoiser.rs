//! The denoising network: action-chunk tokens through blocks of modulated
//! self-attention, cross-attention over the fused vision-language tokens, and
//! a skill-conditioned feed-forward layer.
//!
//! One modulation generator, fed by the noise level and proprioception, emits
//! a (scale, shift, gate) triple for the attention sublayer and one for the
//! FFN sublayer; every block reuses the same pair. The generator, the
//! cross-attention output maps, the skill branches, and the output head all
//! start at zero, so a fresh network is the constant-zero predictor and every
//! block begins as the identity.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SdpError};
use crate::numerics::{Binding, Graph, ParamId, ParamStore, Rng, Scalar, Tensor, Var};
use crate::skillspace::init_linear;
use crate::world::{ACTION_DIM, PROPRIO_DIM};

/// How the routed skill embedding conditions the feed-forward sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SkillConditioning {
    /// Skill-generated low-rank branch added to the ordinary FFN.
    #[serde(rename = "hyper-ffn")]
    HyperFfn,
    /// Projected skill embedding added to the FFN input.
    #[serde(rename = "addition")]
    Addition,
    /// Skill embedding concatenated onto the FFN input (split-weight form).
    #[serde(rename = "concatenation")]
    Concatenation,
    /// Feature-wise scale and shift of the FFN output.
    #[serde(rename = "film")]
    Film,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub blocks: usize,
    pub width: usize,
    pub heads: usize,
    pub chunk_len: usize,
    pub lora_rank: usize,
    pub ffn_mult: usize,
    pub sigma_embed_dim: usize,
    pub cond_hidden: usize,
    pub hyper_hidden: usize,
    pub skill_conditioning: SkillConditioning,
    /// Gated variant of the low-rank branch: the hypernetwork emits paired
    /// input projections (`C x 2r`, split in halves) instead of one `C x r`.
    pub swiglu_gate: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            blocks: 4,
            width: 128,
            heads: 4,
            chunk_len: 8,
            lora_rank: 16,
            ffn_mult: 4,
            sigma_embed_dim: 16,
            cond_hidden: 128,
            hyper_hidden: 64,
            skill_conditioning: SkillConditioning::HyperFfn,
            swiglu_gate: false,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(SdpError::Config(format!(
                "denoiser width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.lora_rank == 0 || self.blocks == 0 || self.chunk_len == 0 {
            return Err(SdpError::Config(
                "denoiser blocks, width, rank, and chunk length must be positive".into(),
            ));
        }
        if self.sigma_embed_dim % 2 != 0 {
            return Err(SdpError::Config(
                "sigma embedding dimension must be even".into(),
            ));
        }
        Ok(())
    }

    /// Flattened size of the per-state skill weights emitted for one block.
    pub fn hyper_out(&self) -> usize {
        let input_mats = if self.swiglu_gate { 2 } else { 1 };
        (input_mats + 1) * self.lora_rank * self.width
    }
}

enum SkillParams {
    HyperFfn {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
    Addition {
        proj: ParamId,
    },
    Concatenation {
        w1z: ParamId,
    },
    Film {
        scale: ParamId,
        shift: ParamId,
    },
}

struct Block {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    cross_wq: ParamId,
    cross_wk: ParamId,
    cross_wv: ParamId,
    cross_wo: ParamId,
    cross_bo: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    skill: SkillParams,
}

pub struct Denoiser<T> {
    pub cfg: DenoiserConfig,
    pub c_img: usize,
    chunk_w: ParamId,
    chunk_b: ParamId,
    pos_chunk: ParamId,
    cond_w1: ParamId,
    cond_b1: ParamId,
    cond_w2: ParamId,
    cond_b2: ParamId,
    gen_w: ParamId,
    gen_b: ParamId,
    ctx_w: ParamId,
    ctx_b: ParamId,
    ctx_gain: ParamId,
    blocks: Vec<Block>,
    head_w: ParamId,
    head_b: ParamId,
    _marker: std::marker::PhantomData<T>,
}

/// Per-state conditioning reused across denoising steps: projected context
/// tokens, the skill embedding, proprioception, and (for the hyper branch)
/// the generated per-block weight tensors.
pub struct Conditioning {
    pub context: Var,
    pub z: Var,
    proprio: Var,
    skill_inputs: Vec<SkillInputs>,
}

enum SkillInputs {
    HyperFfn { w1z: Var, w2z: Var },
    Shared,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(
        cfg: DenoiserConfig,
        c_img: usize,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.width;
        let chunk_w = store.add("denoiser.chunk.w", init_linear(ACTION_DIM, c, rng));
        let chunk_b = store.add("denoiser.chunk.b", Tensor::zeros(&[c]));
        let pos_chunk = store.add(
            "denoiser.pos_chunk",
            Tensor::from_fn(&[cfg.chunk_len, c], |_| T::of(rng.normal() * 0.02)),
        );
        let cond_in = cfg.sigma_embed_dim + PROPRIO_DIM;
        let cond_w1 = store.add("denoiser.cond.w1", init_linear(cond_in, cfg.cond_hidden, rng));
        let cond_b1 = store.add("denoiser.cond.b1", Tensor::zeros(&[cfg.cond_hidden]));
        let cond_w2 = store.add("denoiser.cond.w2", init_linear(cfg.cond_hidden, c, rng));
        let cond_b2 = store.add("denoiser.cond.b2", Tensor::zeros(&[c]));
        // Zero-initialized generator: every (scale, shift, gate) starts at 0.
        let gen_w = store.add("denoiser.adaln.w", Tensor::zeros(&[c, 6 * c]));
        let gen_b = store.add("denoiser.adaln.b", Tensor::zeros(&[6 * c]));
        let ctx_w = store.add("denoiser.ctx.w", init_linear(c_img, c, rng));
        let ctx_b = store.add("denoiser.ctx.b", Tensor::zeros(&[c]));
        let ctx_gain = store.add("denoiser.ctx.gain", Tensor::full(&[c], T::one()));

        let blocks = (0..cfg.blocks)
            .map(|i| {
                let skill = match cfg.skill_conditioning {
                    SkillConditioning::HyperFfn => SkillParams::HyperFfn {
                        w1: store.add(
                            format!("denoiser.block{i}.hyper.w1"),
                            init_linear(c_img, cfg.hyper_hidden, rng),
                        ),
                        b1: store.add(
                            format!("denoiser.block{i}.hyper.b1"),
                            Tensor::zeros(&[cfg.hyper_hidden]),
                        ),
                        w2: store.add(
                            format!("denoiser.block{i}.hyper.w2"),
                            Tensor::zeros(&[cfg.hyper_hidden, cfg.hyper_out()]),
                        ),
                        b2: store.add(
                            format!("denoiser.block{i}.hyper.b2"),
                            Tensor::zeros(&[cfg.hyper_out()]),
                        ),
                    },
                    SkillConditioning::Addition => SkillParams::Addition {
                        proj: store.add(
                            format!("denoiser.block{i}.skilladd.proj"),
                            Tensor::zeros(&[c_img, c]),
                        ),
                    },
                    SkillConditioning::Concatenation => SkillParams::Concatenation {
                        w1z: store.add(
                            format!("denoiser.block{i}.skillcat.w1z"),
                            Tensor::zeros(&[c_img, c * cfg.ffn_mult]),
                        ),
                    },
                    SkillConditioning::Film => SkillParams::Film {
                        scale: store.add(
                            format!("denoiser.block{i}.film.scale"),
                            Tensor::zeros(&[c_img, c]),
                        ),
                        shift: store.add(
                            format!("denoiser.block{i}.film.shift"),
                            Tensor::zeros(&[c_img, c]),
                        ),
                    },
                };
                Block {
                    wq: store.add(format!("denoiser.block{i}.attn.wq"), init_linear(c, c, rng)),
                    wk: store.add(format!("denoiser.block{i}.attn.wk"), init_linear(c, c, rng)),
                    wv: store.add(format!("denoiser.block{i}.attn.wv"), init_linear(c, c, rng)),
                    wo: store.add(format!("denoiser.block{i}.attn.wo"), init_linear(c, c, rng)),
                    bo: store.add(format!("denoiser.block{i}.attn.bo"), Tensor::zeros(&[c])),
                    cross_wq: store.add(
                        format!("denoiser.block{i}.cross.wq"),
                        init_linear(c, c, rng),
                    ),
                    cross_wk: store.add(
                        format!("denoiser.block{i}.cross.wk"),
                        init_linear(c, c, rng),
                    ),
                    cross_wv: store.add(
                        format!("denoiser.block{i}.cross.wv"),
                        init_linear(c, c, rng),
                    ),
                    // Zero-initialized: cross-attention joins the residual stream
                    // only once trained.
                    cross_wo: store.add(
                        format!("denoiser.block{i}.cross.wo"),
                        Tensor::zeros(&[c, c]),
                    ),
                    cross_bo: store.add(format!("denoiser.block{i}.cross.bo"), Tensor::zeros(&[c])),
                    ffn_w1: store.add(
                        format!("denoiser.block{i}.ffn.w1"),
                        init_linear(c, c * cfg.ffn_mult, rng),
                    ),
                    ffn_b1: store.add(
                        format!("denoiser.block{i}.ffn.b1"),
                        Tensor::zeros(&[c * cfg.ffn_mult]),
                    ),
                    ffn_w2: store.add(
                        format!("denoiser.block{i}.ffn.w2"),
                        init_linear(c * cfg.ffn_mult, c, rng),
                    ),
                    ffn_b2: store.add(format!("denoiser.block{i}.ffn.b2"), Tensor::zeros(&[c])),
                    skill,
                }
            })
            .collect();

        let head_w = store.add("denoiser.head.w", Tensor::zeros(&[c, ACTION_DIM]));
        let head_b = store.add("denoiser.head.b", Tensor::zeros(&[ACTION_DIM]));
        Ok(Denoiser {
            cfg,
            c_img,
            chunk_w,
            chunk_b,
            pos_chunk,
            cond_w1,
            cond_b1,
            cond_w2,
            cond_b2,
            gen_w,
            gen_b,
            ctx_w,
            ctx_b,
            ctx_gain,
            blocks,
            head_w,
            head_b,
            _marker: std::marker::PhantomData,
        })
    }

    /// Build the per-state conditioning: project and normalize the fused
    /// tokens, keep the skill embedding, and emit the per-block skill weights.
    pub fn prepare(
        &self,
        g: &mut Graph<T>,
        binding: &Binding,
        z_vl: Var,
        z: Var,
        proprio: Tensor<T>,
    ) -> Result<Conditioning> {
        let shape = g.shape(z_vl).to_vec();
        if shape.len() != 3 || shape[2] != self.c_img {
            return Err(SdpError::InvalidShape {
                op: "denoiser.prepare",
                shape,
                reason: format!("expected (B, T, {})", self.c_img),
            });
        }
        let (b, t) = (shape[0], shape[1]);
        let flat = g.reshape(z_vl, vec![b * t, self.c_img])?;
        let ctx = g.matmul(flat, binding.var(self.ctx_w))?;
        let ctx = g.add_bcast(ctx, binding.var(self.ctx_b))?;
        let ctx = g.rmsnorm(ctx, binding.var(self.ctx_gain))?;
        let context = g.reshape(ctx, vec![b, t, self.cfg.width])?;

        let proprio = g.constant(proprio);
        let skill_inputs = self
            .blocks
            .iter()
            .map(|blk| self.skill_inputs(g, binding, blk, z))
            .collect::<Result<Vec<_>>>()?;
        Ok(Conditioning {
            context,
            z,
            proprio,
            skill_inputs,
        })
    }

    fn skill_inputs(
        &self,
        g: &mut Graph<T>,
        binding: &Binding,
        blk: &Block,
        z: Var,
    ) -> Result<SkillInputs> {
        match &blk.skill {
            SkillParams::HyperFfn { w1, b1, w2, b2 } => {
                let b = g.shape(z)[0];
                let (c, r) = (self.cfg.width, self.cfg.lora_rank);
                let h = g.matmul(z, binding.var(*w1))?;
                let h = g.add_bcast(h, binding.var(*b1))?;
                let h = g.silu(h);
                let flat = g.matmul(h, binding.var(*w2))?;
                let flat = g.add_bcast(flat, binding.var(*b2))?;
                let in_cols = if self.cfg.swiglu_gate { 2 * r } else { r };
                let w1z = g.slice(flat, 1, 0, c * in_cols)?;
                let w1z = g.reshape(w1z, vec![b, c, in_cols])?;
                let w2z = g.slice(flat, 1, c * in_cols, c * in_cols + r * c)?;
                let w2z = g.reshape(w2z, vec![b, r, c])?;
                Ok(SkillInputs::HyperFfn { w1z, w2z })
            }
            _ => Ok(SkillInputs::Shared),
        }
    }

    /// Sinusoidal features of `log sigma`; rejects non-positive noise levels.
    fn sigma_features(&self, sigmas: &[f64]) -> Result<Tensor<T>> {
        let e = self.cfg.sigma_embed_dim;
        let half = e / 2;
        let mut data = Vec::with_capacity(sigmas.len() * e);
        for &s in sigmas {
            if !(s > 0.0) || !s.is_finite() {
                return Err(SdpError::Invalid(format!(
                    "noise level must be positive and finite, got {s}"
                )));
            }
            let t = s.ln();
            for i in 0..half {
                let w = (2.0f64).powi(i as i32);
                data.push(T::of((t * w).sin()));
                data.push(T::of((t * w).cos()));
            }
        }
        Tensor::new(vec![sigmas.len(), e], data)
    }

    /// Modulation vector from the noise level and proprioception, then the six
    /// shared per-sample (scale, shift, gate) channels.
    fn modulation(
        &self,
        g: &mut Graph<T>,
        binding: &Binding,
        cond: &Conditioning,
        sigmas: &[f64],
    ) -> Result<[Var; 6]> {
        let feats = g.constant(self.sigma_features(sigmas)?);
        let joined = g.concat(&[feats, cond.proprio], 1)?;
        let h = g.matmul(joined, binding.var(self.cond_w1))?;
        let h = g.add_bcast(h, binding.var(self.cond_b1))?;
        let h = g.silu(h);
        let m = g.matmul(h, binding.var(self.cond_w2))?;
        let m = g.add_bcast(m, binding.var(self.cond_b2))?;
        let m = g.silu(m);
        let six = g.matmul(m, binding.var(self.gen_w))?;
        let six = g.add_bcast(six, binding.var(self.gen_b))?;
        let c = self.cfg.width;
        let mut out = Vec::with_capacity(6);
        for i in 0..6 {
            out.push(g.slice(six, 1, i * c, (i + 1) * c)?);
        }
        Ok([out[0], out[1], out[2], out[3], out[4], out[5]])
    }

    fn linear_tokens(
        &self,
        g: &mut Graph<T>,
        x: Var,
        w: Var,
        bias: Option<Var>,
    ) -> Result<Var> {
        let (b, t, c) = {
            let s = g.shape(x);
            (s[0], s[1], s[2])
        };
        let cols = g.shape(w)[1];
        let flat = g.reshape(x, vec![b * t, c])?;
        let out = g.matmul(flat, w)?;
        let out = match bias {
            Some(bv) => g.add_bcast(out, bv)?,
            None => out,
        };
        g.reshape(out, vec![b, t, cols])
    }

    fn modulate(&self, g: &mut Graph<T>, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let one_plus = g.add_scalar(scale, T::one());
        let scaled = g.mul_mid_bcast(x, one_plus)?;
        g.add_mid_bcast(scaled, shift)
    }

    fn skill_ffn(
        &self,
        g: &mut Graph<T>,
        binding: &Binding,
        blk: &Block,
        inputs: &SkillInputs,
        cond: &Conditioning,
        x: Var,
    ) -> Result<Var> {
        let ffn_ori = |g: &mut Graph<T>, input: Var| -> Result<Var> {
            let mid = self.linear_tokens(g, input, binding.var(blk.ffn_w1), Some(binding.var(blk.ffn_b1)))?;
            let mid = g.silu(mid);
            self.linear_tokens(g, mid, binding.var(blk.ffn_w2), Some(binding.var(blk.ffn_b2)))
        };
        match (&blk.skill, inputs) {
            (SkillParams::HyperFfn { .. }, SkillInputs::HyperFfn { w1z, w2z }) => {
                let ori = ffn_ori(g, x)?;
                let hidden = g.bmm(x, *w1z)?;
                let hidden = if self.cfg.swiglu_gate {
                    let r = self.cfg.lora_rank;
                    let a = g.slice(hidden, 2, 0, r)?;
                    let b = g.slice(hidden, 2, r, 2 * r)?;
                    let a = g.silu(a);
                    g.mul(a, b)?
                } else {
                    g.silu(hidden)
                };
                let branch = g.bmm(hidden, *w2z)?;
                g.add(ori, branch)
            }
            (SkillParams::Addition { proj }, _) => {
                let zp = g.matmul(cond.z, binding.var(*proj))?;
                let shifted = g.add_mid_bcast(x, zp)?;
                ffn_ori(g, shifted)
            }
            (SkillParams::Concatenation { w1z }, _) => {
                let mid = self.linear_tokens(g, x, binding.var(blk.ffn_w1), Some(binding.var(blk.ffn_b1)))?;
                let zmid = g.matmul(cond.z, binding.var(*w1z))?;
                let mid = g.add_mid_bcast(mid, zmid)?;
                let mid = g.silu(mid);
                self.linear_tokens(g, mid, binding.var(blk.ffn_w2), Some(binding.var(blk.ffn_b2)))
            }
            (SkillParams::Film { scale, shift }, _) => {
                let ori = ffn_ori(g, x)?;
                let sc = g.matmul(cond.z, binding.var(*scale))?;
                let sh = g.matmul(cond.z, binding.var(*shift))?;
                self.modulate_film(g, ori, sc, sh)
            }
            _ => Err(SdpError::Invalid(
                "conditioning inputs do not match the configured strategy".into(),
            )),
        }
    }

    fn modulate_film(&self, g: &mut Graph<T>, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let one_plus = g.add_scalar(scale, T::one());
        let scaled = g.mul_mid_bcast(x, one_plus)?;
        g.add_mid_bcast(scaled, shift)
    }

    /// Predict the clean chunk from a noisy one. `noisy` is `(B, k, 7)` in the
    /// normalized action space; `sigmas` holds one noise level per sample.
    pub fn denoise(
        &self,
        g: &mut Graph<T>,
        binding: &Binding,
        cond: &Conditioning,
        noisy: Var,
        sigmas: &[f64],
    ) -> Result<Var> {
        let shape = g.shape(noisy).to_vec();
        let (k, c) = (self.cfg.chunk_len, self.cfg.width);
        if shape.len() != 3 || shape[1] != k || shape[2] != ACTION_DIM {
            return Err(SdpError::InvalidShape {
                op: "denoise",
                shape,
                reason: format!("expected (B, {k}, {ACTION_DIM})"),
            });
        }
        let b = shape[0];
        if sigmas.len() != b {
            return Err(SdpError::Invalid(format!(
                "{} noise levels for batch {b}",
                sigmas.len()
            )));
        }

        let [scale_a, shift_a, gate_a, scale_f, shift_f, gate_f] =
            self.modulation(g, binding, cond, sigmas)?;

        // Chunk tokens.
        let mut h = self.linear_tokens(
            g,
            noisy,
            binding.var(self.chunk_w),
            Some(binding.var(self.chunk_b)),
        )?;
        h = g.add_bcast(h, binding.var(self.pos_chunk))?;

        for (blk, inputs) in self.blocks.iter().zip(&cond.skill_inputs) {
            // Modulated self-attention.
            let n1 = g.layernorm(h, None, None)?;
            let n1 = self.modulate(g, n1, scale_a, shift_a)?;
            let q = self.linear_tokens(g, n1, binding.var(blk.wq), None)?;
            let key = self.linear_tokens(g, n1, binding.var(blk.wk), None)?;
            let v = self.linear_tokens(g, n1, binding.var(blk.wv), None)?;
            let attn = g.sdpa(q, key, v, self.cfg.heads)?;
            let attn = self.linear_tokens(g, attn, binding.var(blk.wo), Some(binding.var(blk.bo)))?;
            let gated = g.mul_mid_bcast(attn, gate_a)?;
            h = g.add(h, gated)?;

            // Cross-attention over the projected context tokens.
            let n2 = g.layernorm(h, None, None)?;
            let q = self.linear_tokens(g, n2, binding.var(blk.cross_wq), None)?;
            let key = self.linear_tokens(g, cond.context, binding.var(blk.cross_wk), None)?;
            let v = self.linear_tokens(g, cond.context, binding.var(blk.cross_wv), None)?;
            let cross = g.sdpa(q, key, v, self.cfg.heads)?;
            let cross = self.linear_tokens(
                g,
                cross,
                binding.var(blk.cross_wo),
                Some(binding.var(blk.cross_bo)),
            )?;
            h = g.add(h, cross)?;

            // Modulated skill-conditioned feed-forward.
            let n3 = g.layernorm(h, None, None)?;
            let n3 = self.modulate(g, n3, scale_f, shift_f)?;
            let y = self.skill_ffn(g, binding, blk, inputs, cond, n3)?;
            let gated = g.mul_mid_bcast(y, gate_f)?;
            h = g.add(h, gated)?;
        }

        let normed = g.layernorm(h, None, None)?;
        let flat = g.reshape(normed, vec![b * k, c])?;
        let out = g.matmul(flat, binding.var(self.head_w))?;
        let out = g.add_bcast(out, binding.var(self.head_b))?;
        g.reshape(out, vec![b, k, ACTION_DIM])
    }

    pub fn hyper_output_width(&self) -> usize {
        self.cfg.hyper_out()
    }
}
