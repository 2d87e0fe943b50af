//! Skill assignment: average the vision-language tokens, score the eight
//! skills with a small MLP, harden with top-1, and gate the selected prompt.
//!
//! The hard selection is trained straight-through: the top-1 mask enters the
//! graph as a constant, so gradients reach the selected prompt row, the router
//! MLP through the gate probability, and the tokens behind both.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SdpError};
use crate::numerics::{Binding, Graph, ParamId, ParamStore, Rng, Scalar, Tensor, Var};
use crate::skillspace::init_linear;
use crate::world::{NUM_SKILLS, SKILL_NAMES};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterConfig {
    pub hidden: usize,
    /// Optional entropy bonus on the routing distribution; an extension beyond
    /// the two-term training loss, off by default.
    pub entropy_bonus: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            hidden: 64,
            entropy_bonus: 0.0,
        }
    }
}

/// Per-sample routing outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterDecision {
    pub probs: [f64; NUM_SKILLS],
    pub selected: usize,
    pub gate: f64,
}

/// Graph handles produced by [`Router::route`].
pub struct RouteVars {
    /// `(B, 8)` routing probabilities.
    pub probs: Var,
    /// `(B, c_img)` gated skill embedding `g * p_selected`.
    pub z: Var,
}

pub struct Router<T> {
    pub cfg: RouterConfig,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Router<T> {
    pub fn new(
        cfg: RouterConfig,
        c_img: usize,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        if cfg.hidden == 0 {
            return Err(SdpError::Config("router hidden width must be positive".into()));
        }
        Ok(Router {
            cfg,
            w1: store.add("router.w1", init_linear(c_img, cfg.hidden, rng)),
            b1: store.add("router.b1", Tensor::zeros(&[cfg.hidden])),
            w2: store.add("router.w2", init_linear(cfg.hidden, NUM_SKILLS, rng)),
            b2: store.add("router.b2", Tensor::zeros(&[NUM_SKILLS])),
            _marker: std::marker::PhantomData,
        })
    }

    /// Route a batch of token matrices `(B, T, C)` against the prompt matrix
    /// `(8, C)`. Ties break to the lowest index.
    pub fn route(
        &self,
        g: &mut Graph<T>,
        binding: &Binding,
        z_vl: Var,
        prompts: Var,
    ) -> Result<(RouteVars, Vec<RouterDecision>)> {
        let avg = g.mean_axis(z_vl, 1)?;
        let h = g.matmul(avg, binding.var(self.w1))?;
        let h = g.add_bcast(h, binding.var(self.b1))?;
        let h = g.silu(h);
        let logits = g.matmul(h, binding.var(self.w2))?;
        let logits = g.add_bcast(logits, binding.var(self.b2))?;
        if !g.value(logits).all_finite() {
            return Err(SdpError::NonFinite {
                what: "router logits".into(),
            });
        }
        let probs = g.softmax(logits)?;

        let b = g.shape(probs)[0];
        let mut decisions = Vec::with_capacity(b);
        let mut mask = vec![T::zero(); b * NUM_SKILLS];
        {
            let pv = g.value(probs).data();
            for bi in 0..b {
                let row = &pv[bi * NUM_SKILLS..(bi + 1) * NUM_SKILLS];
                let mut selected = 0usize;
                for (i, &p) in row.iter().enumerate() {
                    if p > row[selected] {
                        selected = i;
                    }
                }
                mask[bi * NUM_SKILLS + selected] = T::one();
                let mut probs_out = [0.0f64; NUM_SKILLS];
                for (o, &p) in probs_out.iter_mut().zip(row) {
                    *o = p.as_f64();
                }
                decisions.push(RouterDecision {
                    probs: probs_out,
                    selected,
                    gate: row[selected].as_f64(),
                });
            }
        }
        // Straight-through: the mask is a constant, the gate stays attached.
        let mask = g.constant(Tensor::new(vec![b, NUM_SKILLS], mask)?);
        let gated = g.mul(probs, mask)?;
        let z = g.matmul(gated, prompts)?;
        Ok((RouteVars { probs, z }, decisions))
    }

    /// Mean routing entropy; used only when the entropy bonus is enabled.
    pub fn entropy(&self, g: &mut Graph<T>, probs: Var) -> Result<Var> {
        let logp = g.ln(probs)?;
        let plogp = g.mul(probs, logp)?;
        let row_sum = g.mean_axis(plogp, 1)?;
        let mean = g.mean_all(row_sum);
        Ok(g.scale(mean, T::of(-(NUM_SKILLS as f64))))
    }
}

// ---- traces -----------------------------------------------------------------

/// One routed step of one episode, exportable losslessly as a tab-separated
/// line: run id, episode, timestep, skill index, skill name, gate, then the
/// eight probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub run_id: u64,
    pub episode: u32,
    pub timestep: u32,
    pub skill: u8,
    pub gate: f64,
    pub probs: [f64; NUM_SKILLS],
}

impl TraceRecord {
    pub fn from_decision(run_id: u64, episode: u32, timestep: u32, d: &RouterDecision) -> Self {
        TraceRecord {
            run_id,
            episode,
            timestep,
            skill: d.selected as u8,
            gate: d.gate,
            probs: d.probs,
        }
    }

    pub fn tsv_line(&self) -> String {
        let mut line = format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.run_id,
            self.episode,
            self.timestep,
            self.skill,
            SKILL_NAMES[self.skill as usize],
            self.gate
        );
        for p in self.probs {
            line.push('\t');
            line.push_str(&p.to_string());
        }
        line
    }

    pub fn parse(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 6 + NUM_SKILLS {
            return Err(SdpError::Format {
                what: "trace",
                reason: format!("expected {} fields, got {}", 6 + NUM_SKILLS, parts.len()),
            });
        }
        let fail = |what: &str| SdpError::Format {
            what: "trace",
            reason: format!("bad {what} field"),
        };
        let skill: u8 = parts[3].parse().map_err(|_| fail("skill"))?;
        if skill as usize >= NUM_SKILLS {
            return Err(fail("skill"));
        }
        let mut probs = [0.0f64; NUM_SKILLS];
        for (i, p) in probs.iter_mut().enumerate() {
            *p = parts[6 + i].parse().map_err(|_| fail("probability"))?;
        }
        Ok(TraceRecord {
            run_id: parts[0].parse().map_err(|_| fail("run id"))?,
            episode: parts[1].parse().map_err(|_| fail("episode"))?,
            timestep: parts[2].parse().map_err(|_| fail("timestep"))?,
            skill,
            gate: parts[5].parse().map_err(|_| fail("gate"))?,
            probs,
        })
    }
}

pub const TRACE_HEADER: &str =
    "run_id\tepisode\ttimestep\tskill\tskill_name\tgate\tp0\tp1\tp2\tp3\tp4\tp5\tp6\tp7";

pub fn write_trace(records: &[TraceRecord]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.tsv_line());
        out.push('\n');
    }
    out
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line == TRACE_HEADER {
            continue;
        }
        if line.is_empty() {
            continue;
        }
        out.push(TraceRecord::parse(line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(bias: Option<[f64; NUM_SKILLS]>) -> (ParamStore<f64>, Router<f64>, Tensor<f64>) {
        let mut store = ParamStore::new();
        let mut rng = Rng::stream(1, "init");
        let router = Router::new(RouterConfig::default(), 12, &mut store, &mut rng).unwrap();
        // Zero the MLP so logits equal the output bias exactly.
        store
            .set_value(router.w1, Tensor::zeros(&[12, 64]))
            .unwrap();
        store
            .set_value(router.w2, Tensor::zeros(&[64, NUM_SKILLS]))
            .unwrap();
        if let Some(b) = bias {
            store
                .set_value(
                    router.b2,
                    Tensor::new(vec![NUM_SKILLS], b.to_vec()).unwrap(),
                )
                .unwrap();
        }
        let prompts = Tensor::from_fn(&[NUM_SKILLS, 12], |i| (i / 12) as f64 + 0.5);
        (store, router, prompts)
    }

    fn run_route(
        store: &ParamStore<f64>,
        router: &Router<f64>,
        prompts: &Tensor<f64>,
    ) -> (Vec<f64>, Vec<RouterDecision>, Vec<f64>) {
        let mut g = Graph::new();
        let binding = store.bind(&mut g);
        let z_vl = g.constant(Tensor::from_fn(&[1, 5, 12], |i| (i % 7) as f64 * 0.1));
        let p = g.constant(prompts.clone());
        let (vars, decisions) = router.route(&mut g, &binding, z_vl, p).unwrap();
        (
            g.value(vars.probs).data().to_vec(),
            decisions,
            g.value(vars.z).data().to_vec(),
        )
    }

    #[test]
    fn uniform_logits_tie_break_to_lowest_index() {
        let (store, router, prompts) = setup(None);
        let (probs, decisions, z) = run_route(&store, &router, &prompts);
        for &p in &probs {
            assert!((p - 0.125).abs() < 1e-12);
        }
        assert_eq!(decisions[0].selected, 0);
        assert!((decisions[0].gate - 0.125).abs() < 1e-12);
        // z = 0.125 * p_0 and p_0 is the all-0.5 row.
        for &v in &z {
            assert!((v - 0.125 * 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn unique_max_wins_and_other_gates_are_zeroed() {
        let mut bias = [0.0f64; NUM_SKILLS];
        bias[5] = 2.0;
        let (store, router, prompts) = setup(Some(bias));
        let (_, decisions, z) = run_route(&store, &router, &prompts);
        assert_eq!(decisions[0].selected, 5);
        // z must be gate * prompt row 5 (constant 5.5 in this setup).
        let gate = decisions[0].gate;
        for &v in &z {
            assert!((v - gate * 5.5).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_shift_leaves_selection_and_probabilities_unchanged() {
        let bias = [0.3, -1.2, 0.8, 0.0, 2.1, -0.5, 1.4, 0.9];
        let (store, router, prompts) = setup(Some(bias));
        let (probs_a, dec_a, _) = run_route(&store, &router, &prompts);

        let mut shifted = bias;
        for b in &mut shifted {
            *b += 7.5;
        }
        let (store_b, router_b, _) = setup(Some(shifted));
        let (probs_b, dec_b, _) = run_route(&store_b, &router_b, &prompts);

        assert_eq!(dec_a[0].selected, dec_b[0].selected);
        for (a, b) in probs_a.iter().zip(&probs_b) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn probabilities_form_a_simplex_with_one_active_gate() {
        let bias = [0.1, 0.9, -0.4, 0.0, 1.3, 0.2, -2.0, 0.5];
        let (store, router, prompts) = setup(Some(bias));
        let (probs, decisions, _) = run_route(&store, &router, &prompts);
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(decisions[0].gate > 0.0);
        assert_eq!(decisions[0].selected, 4);
    }

    #[test]
    fn gradients_flow_into_prompts_mlp_and_tokens() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::stream(2, "init");
        let router = Router::new(RouterConfig::default(), 6, &mut store, &mut rng).unwrap();
        let mut g = Graph::new();
        let binding = store.bind(&mut g);
        let z_vl = g.leaf(Tensor::from_fn(&[2, 3, 6], |_| rng.normal()).requires_grad(true));
        let prompts = g.leaf(Tensor::from_fn(&[8, 6], |_| rng.normal()).requires_grad(true));
        let (vars, decisions) = router.route(&mut g, &binding, z_vl, prompts).unwrap();
        let loss = g.sum_all(vars.z);
        let grads = g.backward(loss).unwrap();

        let prompt_grad = grads.get(prompts).expect("prompt grad");
        for bi in 0..2 {
            let sel = decisions[bi].selected;
            let row = &prompt_grad.data()[sel * 6..(sel + 1) * 6];
            assert!(row.iter().any(|&v| v != 0.0), "selected row must get grad");
        }
        let w1_grad = grads.get(binding.var(router.w1)).expect("router w1 grad");
        assert!(w1_grad.data().iter().any(|&v| v != 0.0));
        let token_grad = grads.get(z_vl).expect("token grad");
        assert!(token_grad.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn trace_lines_roundtrip_losslessly() {
        let records: Vec<TraceRecord> = (0..20)
            .map(|i| TraceRecord {
                run_id: 0xdead_beef,
                episode: i / 5,
                timestep: i % 5,
                skill: (i % 8) as u8,
                gate: 1.0 / (f64::from(i) + 3.7),
                probs: std::array::from_fn(|j| ((i as usize + j) as f64 * 0.817).fract()),
            })
            .collect();
        let text = write_trace(&records);
        let parsed = parse_trace(&text).unwrap();
        assert_eq!(parsed, records);
    }
}
