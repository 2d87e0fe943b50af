//! Stand-in vision-language encoder: per-patch linear embedding of the
//! observation raster, a learned instruction-token table, and a small
//! self-attention transformer fusing `[text, image]` into the joint tokens
//! consumed by the router and the denoiser's cross-attention.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SdpError};
use crate::numerics::{Binding, Graph, ParamId, ParamStore, Rng, Scalar, Tensor, Var};
use crate::skillspace::init_linear;
use crate::world::RASTER_CHANNELS;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub instr_len: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_size: 6,
            instr_len: 4,
            width: 128,
            depth: 2,
            heads: 4,
            ffn_mult: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, raster_size: usize) -> Result<()> {
        if self.patch_size == 0 || raster_size % self.patch_size != 0 {
            return Err(SdpError::Config(format!(
                "raster side {raster_size} is not divisible by patch size {}",
                self.patch_size
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(SdpError::Config(format!(
                "encoder width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    pub fn n_img(&self, raster_size: usize) -> usize {
        let side = raster_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * RASTER_CHANNELS
    }
}

/// Cut an `(S, S, 3)` raster into row-major `(n_img, patch_dim)` patches.
pub fn extract_patches<T: Scalar>(raster: &[f32], size: usize, patch: usize) -> Vec<T> {
    let side = size / patch;
    let mut out = Vec::with_capacity(side * side * patch * patch * RASTER_CHANNELS);
    for py in 0..side {
        for px in 0..side {
            for y in 0..patch {
                for x in 0..patch {
                    let (ry, rx) = (py * patch + y, px * patch + x);
                    for c in 0..RASTER_CHANNELS {
                        out.push(T::of(f64::from(
                            raster[(ry * size + rx) * RASTER_CHANNELS + c],
                        )));
                    }
                }
            }
        }
    }
    out
}

struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

pub struct Percept<T> {
    pub cfg: EncoderConfig,
    pub raster_size: usize,
    pub vocab: usize,
    patch_w: ParamId,
    patch_b: ParamId,
    pos_img: ParamId,
    token_table: ParamId,
    pos_txt: ParamId,
    blocks: Vec<Block>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Percept<T> {
    pub fn new(
        cfg: EncoderConfig,
        raster_size: usize,
        vocab: usize,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate(raster_size)?;
        let c = cfg.width;
        let patch_w = store.add("percept.patch.w", init_linear(cfg.patch_dim(), c, rng));
        let patch_b = store.add("percept.patch.b", Tensor::zeros(&[c]));
        let pos_img = store.add(
            "percept.pos_img",
            Tensor::from_fn(&[cfg.n_img(raster_size), c], |_| T::of(rng.normal() * 0.02)),
        );
        let token_table = store.add(
            "percept.tokens",
            Tensor::from_fn(&[vocab, c], |_| T::of(rng.normal() * 0.02)),
        );
        let pos_txt = store.add(
            "percept.pos_txt",
            Tensor::from_fn(&[cfg.instr_len, c], |_| T::of(rng.normal() * 0.02)),
        );
        let blocks = (0..cfg.depth)
            .map(|i| Block {
                ln1_g: store.add(format!("percept.block{i}.ln1.g"), Tensor::full(&[c], T::one())),
                ln1_b: store.add(format!("percept.block{i}.ln1.b"), Tensor::zeros(&[c])),
                wq: store.add(format!("percept.block{i}.attn.wq"), init_linear(c, c, rng)),
                wk: store.add(format!("percept.block{i}.attn.wk"), init_linear(c, c, rng)),
                wv: store.add(format!("percept.block{i}.attn.wv"), init_linear(c, c, rng)),
                wo: store.add(format!("percept.block{i}.attn.wo"), init_linear(c, c, rng)),
                bo: store.add(format!("percept.block{i}.attn.bo"), Tensor::zeros(&[c])),
                ln2_g: store.add(format!("percept.block{i}.ln2.g"), Tensor::full(&[c], T::one())),
                ln2_b: store.add(format!("percept.block{i}.ln2.b"), Tensor::zeros(&[c])),
                w1: store.add(
                    format!("percept.block{i}.ffn.w1"),
                    init_linear(c, c * cfg.ffn_mult, rng),
                ),
                b1: store.add(
                    format!("percept.block{i}.ffn.b1"),
                    Tensor::zeros(&[c * cfg.ffn_mult]),
                ),
                w2: store.add(
                    format!("percept.block{i}.ffn.w2"),
                    init_linear(c * cfg.ffn_mult, c, rng),
                ),
                b2: store.add(format!("percept.block{i}.ffn.b2"), Tensor::zeros(&[c])),
            })
            .collect();
        Ok(Percept {
            cfg,
            raster_size,
            vocab,
            patch_w,
            patch_b,
            pos_img,
            token_table,
            pos_txt,
            blocks,
            _marker: std::marker::PhantomData,
        })
    }

    /// Patch tokens: per-patch linear embedding plus learned positions.
    /// `patches` is `(B, n_img, patch_dim)`.
    pub fn encode_observation(
        &self,
        g: &mut Graph<T>,
        binding: &Binding,
        patches: Var,
    ) -> Result<Var> {
        let shape = g.shape(patches).to_vec();
        let (n_img, pd) = (self.cfg.n_img(self.raster_size), self.cfg.patch_dim());
        if shape.len() != 3 || shape[1] != n_img || shape[2] != pd {
            return Err(SdpError::InvalidShape {
                op: "encode_observation",
                shape,
                reason: format!("expected (B, {n_img}, {pd})"),
            });
        }
        let b = shape[0];
        let flat = g.reshape(patches, vec![b * n_img, pd])?;
        let emb = g.matmul(flat, binding.var(self.patch_w))?;
        let emb = g.add_bcast(emb, binding.var(self.patch_b))?;
        let emb = g.reshape(emb, vec![b, n_img, self.cfg.width])?;
        g.add_bcast(emb, binding.var(self.pos_img))
    }

    /// Instruction tokens from the embedding table plus text positions.
    /// `ids` is row-major `B x instr_len`.
    pub fn encode_instruction(
        &self,
        g: &mut Graph<T>,
        binding: &Binding,
        ids: &[u16],
    ) -> Result<Var> {
        if ids.is_empty() || ids.len() % self.cfg.instr_len != 0 {
            return Err(SdpError::Invalid(format!(
                "instruction ids length {} is not a multiple of {}",
                ids.len(),
                self.cfg.instr_len
            )));
        }
        let b = ids.len() / self.cfg.instr_len;
        let flat_ids: Vec<u32> = ids.iter().map(|&i| u32::from(i)).collect();
        let rows = g.gather_rows(binding.var(self.token_table), &flat_ids)?;
        let rows = g.reshape(rows, vec![b, self.cfg.instr_len, self.cfg.width])?;
        g.add_bcast(rows, binding.var(self.pos_txt))
    }

    /// Concatenate `[text, image]` and run the fusion blocks.
    pub fn fuse(&self, g: &mut Graph<T>, binding: &Binding, text: Var, image: Var) -> Result<Var> {
        let mut h = g.concat(&[text, image], 1)?;
        let (b, t, c) = {
            let s = g.shape(h);
            (s[0], s[1], s[2])
        };
        for blk in &self.blocks {
            // Attention sublayer, pre-norm.
            let normed =
                g.layernorm(h, Some(binding.var(blk.ln1_g)), Some(binding.var(blk.ln1_b)))?;
            let flat = g.reshape(normed, vec![b * t, c])?;
            let q = g.matmul(flat, binding.var(blk.wq))?;
            let k = g.matmul(flat, binding.var(blk.wk))?;
            let v = g.matmul(flat, binding.var(blk.wv))?;
            let q = g.reshape(q, vec![b, t, c])?;
            let k = g.reshape(k, vec![b, t, c])?;
            let v = g.reshape(v, vec![b, t, c])?;
            let attn = g.sdpa(q, k, v, self.cfg.heads)?;
            let attn = g.reshape(attn, vec![b * t, c])?;
            let attn = g.matmul(attn, binding.var(blk.wo))?;
            let attn = g.add_bcast(attn, binding.var(blk.bo))?;
            let attn = g.reshape(attn, vec![b, t, c])?;
            h = g.add(h, attn)?;

            // Feed-forward sublayer, pre-norm.
            let normed =
                g.layernorm(h, Some(binding.var(blk.ln2_g)), Some(binding.var(blk.ln2_b)))?;
            let flat = g.reshape(normed, vec![b * t, c])?;
            let mid = g.matmul(flat, binding.var(blk.w1))?;
            let mid = g.add_bcast(mid, binding.var(blk.b1))?;
            let mid = g.silu(mid);
            let out = g.matmul(mid, binding.var(blk.w2))?;
            let out = g.add_bcast(out, binding.var(blk.b2))?;
            let out = g.reshape(out, vec![b, t, c])?;
            h = g.add(h, out)?;
        }
        Ok(h)
    }

    /// Full path: raster patches + instruction to fused tokens
    /// `(B, instr_len + n_img, width)`.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        binding: &Binding,
        patches: Var,
        ids: &[u16],
    ) -> Result<Var> {
        let text = self.encode_instruction(g, binding, ids)?;
        let image = self.encode_observation(g, binding, patches)?;
        self.fuse(g, binding, text, image)
    }

    pub fn token_count(&self) -> usize {
        self.cfg.instr_len + self.cfg.n_img(self.raster_size)
    }

    pub fn patch_w(&self) -> ParamId {
        self.patch_w
    }

    pub fn pos_img(&self) -> ParamId {
        self.pos_img
    }

    pub fn token_table(&self) -> ParamId {
        self.token_table
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selftest::gradcheck;

    fn tiny() -> (EncoderConfig, usize) {
        (
            EncoderConfig {
                patch_size: 6,
                instr_len: 4,
                width: 16,
                depth: 1,
                heads: 2,
                ffn_mult: 2,
            },
            24,
        )
    }

    #[test]
    fn raster_splits_into_sixteen_tokens() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.n_img(24), 16);
        assert_eq!(cfg.patch_dim(), 108);
        let raster = vec![0.5f32; 24 * 24 * 3];
        let patches = extract_patches::<f64>(&raster, 24, 6);
        assert_eq!(patches.len(), 16 * 108);
    }

    #[test]
    fn zero_raster_with_zeroed_projection_gives_positional_embeddings() {
        let (cfg, size) = tiny();
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::stream(1, "init");
        let p = Percept::new(cfg, size, 13, &mut store, &mut rng).unwrap();
        store
            .set_value(p.patch_w, Tensor::zeros(&[cfg.patch_dim(), cfg.width]))
            .unwrap();
        let mut g = Graph::new();
        let binding = store.bind(&mut g);
        let patches = g.constant(Tensor::zeros(&[1, 16, cfg.patch_dim()]));
        let tokens = p.encode_observation(&mut g, &binding, patches).unwrap();
        assert_eq!(g.value(tokens).data(), store.value(p.pos_img).data());
    }

    #[test]
    fn pad_only_instruction_yields_pad_rows() {
        let (cfg, size) = tiny();
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::stream(2, "init");
        let p = Percept::new(cfg, size, 13, &mut store, &mut rng).unwrap();
        let mut g = Graph::new();
        let binding = store.bind(&mut g);
        let tokens = p
            .encode_instruction(&mut g, &binding, &[0, 0, 0, 0])
            .unwrap();
        let table = store.value(p.token_table);
        let pos = store.value(p.pos_txt);
        let out = g.value(tokens);
        for t in 0..4 {
            for c in 0..cfg.width {
                let expected = table.data()[c] + pos.data()[t * cfg.width + c];
                assert_eq!(out.data()[t * cfg.width + c], expected);
            }
        }
    }

    #[test]
    fn unknown_token_id_is_rejected() {
        let (cfg, size) = tiny();
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::stream(3, "init");
        let p = Percept::new(cfg, size, 13, &mut store, &mut rng).unwrap();
        let mut g = Graph::new();
        let binding = store.bind(&mut g);
        let err = p
            .encode_instruction(&mut g, &binding, &[0, 99, 0, 0])
            .unwrap_err();
        assert!(matches!(err, SdpError::UnknownToken { id: 99, .. }));
    }

    #[test]
    fn depth_zero_fusion_is_concatenation() {
        let (mut cfg, size) = tiny();
        cfg.depth = 0;
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::stream(4, "init");
        let p = Percept::new(cfg, size, 13, &mut store, &mut rng).unwrap();
        let mut g = Graph::new();
        let binding = store.bind(&mut g);
        let text = g.constant(Tensor::from_fn(&[2, 4, 16], |i| i as f64));
        let image = g.constant(Tensor::from_fn(&[2, 16, 16], |i| -(i as f64)));
        let fused = p.fuse(&mut g, &binding, text, image).unwrap();
        assert_eq!(g.shape(fused), &[2, 20, 16]);
        let cat = g.concat(&[text, image], 1).unwrap();
        assert_eq!(g.value(fused).data(), g.value(cat).data());
    }

    #[test]
    fn permuting_patches_changes_the_output() {
        let (cfg, size) = tiny();
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::stream(5, "init");
        let p = Percept::new(cfg, size, 13, &mut store, &mut rng).unwrap();
        let pd = cfg.patch_dim();
        let base = Tensor::from_fn(&[1, 16, pd], |_| rng.normal());
        let swapped = Tensor::from_fn(&[1, 16, pd], |i| {
            let (tok, off) = (i / pd, i % pd);
            let src = match tok {
                0 => 1,
                1 => 0,
                t => t,
            };
            base.data()[src * pd + off]
        });
        let run = |input: Tensor<f64>| {
            let mut g = Graph::new();
            let binding = store.bind(&mut g);
            let patches = g.constant(input);
            let tokens = p.encode(&mut g, &binding, patches, &[1, 7, 0, 0]).unwrap();
            g.value(tokens).data().to_vec()
        };
        assert_ne!(run(base), run(swapped));
    }

    #[test]
    fn identical_instruction_encodes_identically() {
        let (cfg, size) = tiny();
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::stream(6, "init");
        let p = Percept::new(cfg, size, 13, &mut store, &mut rng).unwrap();
        let run = || {
            let mut g = Graph::new();
            let binding = store.bind(&mut g);
            let t = p
                .encode_instruction(&mut g, &binding, &[2, 8, 10, 0])
                .unwrap();
            g.value(t).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = EncoderConfig {
            patch_size: 3,
            instr_len: 4,
            width: 8,
            depth: 1,
            heads: 2,
            ffn_mult: 2,
        };
        let size = 6; // 4 patches of 3x3x3
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::stream(7, "init");
        let p = Percept::new(cfg, size, 13, &mut store, &mut rng).unwrap();

        let inputs: Vec<Tensor<f64>> = store.iter().map(|(_, _, t)| t.clone()).collect();
        let patches = Tensor::from_fn(&[2, 4, 27], |_| rng.normal());
        let proj = Tensor::from_fn(&[2, 8, 8], |_| rng.normal());
        gradcheck(
            &inputs,
            move |g, vars| {
                let binding = Binding::from_vars(vars.to_vec());
                let pt = g.constant(patches.clone());
                let tokens = p.encode(g, &binding, pt, &[1, 7, 0, 0, 2, 8, 9, 0])?;
                let pr = g.constant(proj.clone());
                let weighted = g.mul(tokens, pr)?;
                Ok(g.sum_all(weighted))
            },
            1e-4,
            6,
            &mut Rng::stream(8, "coords"),
        )
        .unwrap();
    }
}
