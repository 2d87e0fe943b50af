//! The eight primitive skills, their prompt ensemble, and the prompt-embedding
//! orthogonality loss.
//!
//! Prompt text goes through a frozen deterministic encoder (a fixed-salt hash
//! of the string seeds a unit-norm vector), templates are averaged per skill,
//! and a trainable two-layer projector maps the ensemble into the joint space
//! shared with the vision-language tokens. Prompt vectors are cached between
//! optimizer steps and rebuilt whenever the projector changes.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SdpError};
use crate::numerics::{Binding, Graph, ParamId, ParamStore, Rng, Scalar, Tensor, Var};
use crate::world::{NUM_SKILLS, SKILL_NAMES};

/// Salt for the frozen encoder; fixed so prompt embeddings never depend on the
/// run seed.
const ENCODER_SALT: u64 = 0x5d1f_37a9_c0de_0001;

pub fn default_templates() -> Vec<String> {
    vec![
        "the robot arm is going to {skill}.".to_string(),
        "the robot arm will {skill}.".to_string(),
        "next, the robot arm is going to {skill}.".to_string(),
        "the gripper prepares to {skill}.".to_string(),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkillConfig {
    pub d_text: usize,
    pub projector_hidden: usize,
    pub templates: Vec<String>,
}

impl Default for SkillConfig {
    fn default() -> Self {
        SkillConfig {
            d_text: 64,
            projector_hidden: 128,
            templates: default_templates(),
        }
    }
}

impl SkillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(SdpError::Config(
                "at least one prompt template required".into(),
            ));
        }
        for t in &self.templates {
            if !t.contains("{skill}") {
                return Err(SdpError::Config(format!(
                    "template `{t}` is missing the {{skill}} placeholder"
                )));
            }
        }
        if self.d_text == 0 || self.projector_hidden == 0 {
            return Err(SdpError::Config("skill dims must be positive".into()));
        }
        Ok(())
    }
}

/// Frozen deterministic text encoding: identical strings give identical
/// unit-norm vectors, and no gradient ever reaches them.
pub fn pseudo_text_encode(text: &str, d_text: usize) -> Vec<f64> {
    let mut rng = Rng::stream(
        ENCODER_SALT ^ crate::numerics::stream_hash(text),
        "pseudo-text",
    );
    let mut v: Vec<f64> = (0..d_text).map(|_| rng.normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Instantiated prompt strings, one row of `T` templates per skill.
pub fn prompt_strings(templates: &[String]) -> Vec<Vec<String>> {
    SKILL_NAMES
        .iter()
        .map(|skill| {
            templates
                .iter()
                .map(|t| t.replace("{skill}", skill))
                .collect()
        })
        .collect()
}

pub struct SkillSpace<T> {
    pub cfg: SkillConfig,
    pub c_img: usize,
    /// Per-skill template-ensemble means, `8 x d_text`; immutable.
    base_means: Tensor<T>,
    skip: Option<ParamId>,
    pub(crate) w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> SkillSpace<T> {
    pub fn new(
        cfg: SkillConfig,
        c_img: usize,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let t_count = cfg.templates.len();
        let mut means = vec![0.0f64; NUM_SKILLS * cfg.d_text];
        for (si, row) in prompt_strings(&cfg.templates).iter().enumerate() {
            for text in row {
                let e = pseudo_text_encode(text, cfg.d_text);
                for (j, v) in e.iter().enumerate() {
                    means[si * cfg.d_text + j] += v / t_count as f64;
                }
            }
        }
        let base_means = Tensor::new(
            vec![NUM_SKILLS, cfg.d_text],
            means.into_iter().map(T::of).collect(),
        )?;

        let skip = if cfg.d_text == c_img {
            None
        } else {
            Some(store.add("skills.proj.skip", init_linear(cfg.d_text, c_img, rng)))
        };
        let w1 = store.add(
            "skills.proj.w1",
            init_linear(cfg.d_text, cfg.projector_hidden, rng),
        );
        let b1 = store.add("skills.proj.b1", Tensor::zeros(&[cfg.projector_hidden]));
        // Residual branch starts at zero: the projector begins as the skip map.
        let w2 = store.add(
            "skills.proj.w2",
            Tensor::zeros(&[cfg.projector_hidden, c_img]),
        );
        let b2 = store.add("skills.proj.b2", Tensor::zeros(&[c_img]));
        Ok(SkillSpace {
            cfg,
            c_img,
            base_means,
            skip,
            w1,
            b1,
            w2,
            b2,
            cache: None,
        })
    }

    pub fn base_means(&self) -> &Tensor<T> {
        &self.base_means
    }

    /// Prompt matrix `8 x c_img` inside a graph, differentiable through the
    /// projector only; the base means enter as a constant.
    pub fn prompts_var(&self, g: &mut Graph<T>, binding: &Binding) -> Result<Var> {
        let base = g.constant(self.base_means.clone());
        let h = g.matmul(base, binding.var(self.w1))?;
        let h = g.add_bcast(h, binding.var(self.b1))?;
        let h = g.silu(h);
        let res = g.matmul(h, binding.var(self.w2))?;
        let res = g.add_bcast(res, binding.var(self.b2))?;
        let skipped = match self.skip {
            Some(w0) => g.matmul(base, binding.var(w0))?,
            None => base,
        };
        g.add(skipped, res)
    }

    /// Recompute the cached prompt matrix from current parameter values.
    pub fn rebuild_cache(&mut self, store: &ParamStore<T>) -> Result<()> {
        let mut g = Graph::new();
        let binding = store.bind(&mut g);
        let p = self.prompts_var(&mut g, &binding)?;
        self.cache = Some(g.value(p).clone());
        Ok(())
    }

    /// Cached `8 x c_img` prompt matrix for rollouts.
    pub fn cached_prompts(&self, store: &ParamStore<T>) -> Result<Tensor<T>> {
        match &self.cache {
            Some(t) => Ok(t.clone()),
            None => {
                let mut g = Graph::new();
                let binding = store.bind(&mut g);
                let p = self.prompts_var(&mut g, &binding)?;
                Ok(g.value(p).clone())
            }
        }
    }
}

pub(crate) fn init_linear<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor<T> {
    let scale = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| T::of(rng.normal() * scale))
}

/// Mean pairwise cosine similarity over all ordered skill pairs, diagonal
/// included, so mutually orthogonal prompts score `8/64` and identical prompts
/// score `1`.
pub fn orthogonal_loss_var<T: Scalar>(g: &mut Graph<T>, prompts: Var) -> Result<Var> {
    let shape = g.shape(prompts);
    if shape.len() != 2 || shape[0] != NUM_SKILLS {
        return Err(SdpError::InvalidShape {
            op: "orthogonal_loss",
            shape: shape.to_vec(),
            reason: format!("expected {NUM_SKILLS} prompt rows"),
        });
    }
    let normed = g.l2norm_rows(prompts)?;
    let gram = g.matmul_nt(normed, normed)?;
    let total = g.sum_all(gram);
    Ok(g.scale(total, T::of(1.0 / (NUM_SKILLS * NUM_SKILLS) as f64)))
}

/// Convenience evaluation outside a training graph.
pub fn orthogonal_loss<T: Scalar>(prompts: &Tensor<T>) -> Result<T> {
    let mut g = Graph::new();
    let p = g.constant(prompts.clone());
    let loss = orthogonal_loss_var(&mut g, p)?;
    Ok(g.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selftest::gradcheck;

    #[test]
    fn encoding_is_deterministic_and_unit_norm() {
        let a = pseudo_text_encode("the robot arm is going to roll.", 64);
        let b = pseudo_text_encode("the robot arm is going to roll.", 64);
        assert_eq!(a, b);
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn distinct_prompts_have_low_cosine_similarity() {
        let strings: Vec<String> = prompt_strings(&default_templates())
            .into_iter()
            .flatten()
            .collect();
        let encoded: Vec<Vec<f64>> = strings.iter().map(|s| pseudo_text_encode(s, 64)).collect();
        let mut worst = 0.0f64;
        for i in 0..encoded.len() {
            for j in i + 1..encoded.len() {
                let cos: f64 = encoded[i].iter().zip(&encoded[j]).map(|(a, b)| a * b).sum();
                worst = worst.max(cos.abs());
            }
        }
        assert!(worst < 0.5, "worst |cos| {worst}");
    }

    #[test]
    fn single_template_ensemble_equals_the_embedding() {
        let cfg = SkillConfig {
            templates: vec!["the robot arm is going to {skill}.".to_string()],
            ..SkillConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::stream(1, "init");
        let space = SkillSpace::new(cfg, 128, &mut store, &mut rng).unwrap();
        let direct = pseudo_text_encode("the robot arm is going to roll.", 64);
        let row = &space.base_means().data()[0..64];
        for (a, b) in row.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_initialized_projector_returns_template_means() {
        // d_text == c_img makes the skip path the identity; the residual branch
        // is zero-initialized.
        let cfg = SkillConfig {
            d_text: 32,
            ..SkillConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::stream(2, "init");
        let space = SkillSpace::new(cfg, 32, &mut store, &mut rng).unwrap();
        let p = space.cached_prompts(&store).unwrap();
        assert_eq!(p.shape(), &[NUM_SKILLS, 32]);
        assert_eq!(p.data(), space.base_means().data());
    }

    #[test]
    fn prompt_table_has_eight_rows() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::stream(3, "init");
        let space = SkillSpace::new(SkillConfig::default(), 96, &mut store, &mut rng).unwrap();
        let p = space.cached_prompts(&store).unwrap();
        assert_eq!(p.shape(), &[8, 96]);
        assert!(p.all_finite());
    }

    #[test]
    fn orthonormal_rows_score_exactly_one_eighth() {
        let eye = Tensor::<f64>::from_fn(&[8, 8], |i| if i % 9 == 0 { 1.0 } else { 0.0 });
        let loss = orthogonal_loss(&eye).unwrap();
        assert!((loss - 0.125).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn identical_rows_score_one() {
        let ones = Tensor::<f64>::full(&[8, 16], 0.7);
        let loss = orthogonal_loss(&ones).unwrap();
        assert!((loss - 1.0).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn zero_norm_row_is_rejected_with_index() {
        let mut data = vec![1.0f64; 8 * 4];
        for v in &mut data[3 * 4..4 * 4] {
            *v = 0.0;
        }
        let p = Tensor::new(vec![8, 4], data).unwrap();
        let err = orthogonal_loss(&p).unwrap_err();
        assert!(matches!(err, SdpError::ZeroNormRow { row: 3 }));
    }

    #[test]
    fn orthogonal_loss_gradient_matches_finite_differences() {
        let mut rng = Rng::stream(4, "gradcheck");
        let p = Tensor::from_fn(&[8, 12], |_| rng.normal()).requires_grad(true);
        gradcheck(&[p], |g, v| orthogonal_loss_var(g, v[0]), 1e-6, 32, &mut rng).unwrap();
    }

    #[test]
    fn gradients_reach_the_projector_but_not_the_frozen_base() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::stream(5, "init");
        let space = SkillSpace::new(SkillConfig::default(), 48, &mut store, &mut rng).unwrap();
        let mut g = Graph::new();
        let binding = store.bind(&mut g);
        let before = g.len();
        let p = space.prompts_var(&mut g, &binding).unwrap();
        let loss = orthogonal_loss_var(&mut g, p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(binding.var(space.w1)).is_some());
        // The base means enter as the first node recorded by prompts_var, a
        // constant leaf: it must receive no gradient.
        assert!(grads.get(Var::probe(before)).is_none());
    }

    proptest::proptest! {
        #[test]
        fn per_row_scaling_leaves_loss_unchanged(
            scales in proptest::collection::vec(0.05f64..20.0, 8)
        ) {
            let mut rng = Rng::stream(6, "prop");
            let base = Tensor::<f64>::from_fn(&[8, 10], |_| rng.normal());
            let scaled = Tensor::from_fn(&[8, 10], |i| base.data()[i] * scales[i / 10]);
            let a = orthogonal_loss(&base).unwrap();
            let b = orthogonal_loss(&scaled).unwrap();
            proptest::prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
    }
}
