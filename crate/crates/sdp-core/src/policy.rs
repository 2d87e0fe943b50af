//! The composed policy: perception, skill routing, the conditioned denoiser,
//! and receding-horizon execution against the environment.

use crate::config::RunConfig;
use crate::denoiser::{Conditioning, Denoiser};
use crate::diffusion::{ddim_sample, sm_loss_from_predictions, DiffusionConfig};
use crate::error::{Result, SdpError};
use crate::numerics::{Binding, Graph, ParamStore, Rng, Scalar, Tensor, Var};
use crate::percept::{extract_patches, Percept};
use crate::router::{Router, RouterDecision, TraceRecord};
use crate::skillspace::{orthogonal_loss_var, SkillSpace};
use crate::world::{
    proprio, render_raster, step, success, vocab_size, Action, Dataset, TaskSpec, WorldState,
    ACTION_DIM, PROPRIO_DIM,
};

/// Everything trainable plus the frozen pieces needed to run it.
pub struct Policy<T> {
    pub store: ParamStore<T>,
    pub skills: SkillSpace<T>,
    pub percept: Percept<T>,
    pub router: Router<T>,
    pub denoiser: Denoiser<T>,
    pub run: RunConfig,
    pub norm_mean: [f64; ACTION_DIM],
    pub norm_std: [f64; ACTION_DIM],
    pub config_hash: u64,
}

/// One training minibatch, already rendered and normalized.
pub struct Batch<T> {
    /// `(B, n_img, patch_dim)`
    pub patches: Tensor<T>,
    /// `B x instr_len` token ids
    pub instr: Vec<u16>,
    /// `(B, 8)`
    pub proprio: Tensor<T>,
    /// `(B, k, 7)` clean normalized chunks
    pub chunks: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Graph handles for one training forward pass.
pub struct LossVars {
    pub sm: Var,
    pub orth: Var,
    pub total: Var,
    pub probs: Var,
}

pub struct PlanOutcome {
    pub actions: Vec<Action>,
    pub decision: RouterDecision,
}

pub struct EpisodeRollout {
    pub success: bool,
    pub steps: usize,
    pub trace: Vec<TraceRecord>,
    pub final_state: WorldState,
}

impl<T: Scalar> Policy<T> {
    /// Build a fresh policy; parameter registration order is fixed by
    /// construction order, which keeps runs reproducible.
    pub fn new(run: RunConfig, norm_mean: [f64; ACTION_DIM], norm_std: [f64; ACTION_DIM]) -> Result<Self> {
        run.validate()?;
        let config_hash = run.hash();
        let mut store = ParamStore::new();
        let mut rng = Rng::stream(run.seed, "init");
        let c_img = run.encoder.width;
        let mut skills = SkillSpace::new(run.skills.clone(), c_img, &mut store, &mut rng)?;
        let percept = Percept::new(
            run.encoder,
            run.world.raster_size,
            vocab_size(),
            &mut store,
            &mut rng,
        )?;
        let router = Router::new(run.router, c_img, &mut store, &mut rng)?;
        let denoiser = Denoiser::new(run.denoiser, c_img, &mut store, &mut rng)?;
        skills.rebuild_cache(&store)?;
        Ok(Policy {
            store,
            skills,
            percept,
            router,
            denoiser,
            run,
            norm_mean,
            norm_std,
            config_hash,
        })
    }

    pub fn diffusion(&self) -> &DiffusionConfig {
        &self.run.diffusion
    }

    pub fn chunk_len(&self) -> usize {
        self.run.denoiser.chunk_len
    }

    /// Render one world state into the policy's observation inputs.
    pub fn observe(&self, state: &WorldState) -> (Vec<T>, [f32; PROPRIO_DIM]) {
        let raster = render_raster(state, self.run.world.raster_size);
        (
            extract_patches::<T>(&raster, self.run.world.raster_size, self.run.encoder.patch_size),
            proprio(state),
        )
    }

    pub fn normalize_chunk(&self, actions: &[Action]) -> Vec<T> {
        let k = self.chunk_len();
        let mut out = Vec::with_capacity(k * ACTION_DIM);
        for i in 0..k {
            let a = actions.get(i).copied().unwrap_or(Action::NOOP);
            for c in 0..ACTION_DIM {
                let std = if self.norm_std[c] > 1e-8 { self.norm_std[c] } else { 1.0 };
                out.push(T::of((f64::from(a.0[c]) - self.norm_mean[c]) / std));
            }
        }
        out
    }

    pub fn denormalize_chunk(&self, data: &[T]) -> Vec<Action> {
        data.chunks(ACTION_DIM)
            .map(|row| {
                let mut a = [0.0f32; ACTION_DIM];
                for c in 0..ACTION_DIM {
                    let std = if self.norm_std[c] > 1e-8 { self.norm_std[c] } else { 1.0 };
                    a[c] = (row[c].as_f64() * std + self.norm_mean[c]) as f32;
                }
                Action::clipped(a)
            })
            .collect()
    }

    /// Full training forward pass: encode, route, corrupt, denoise, and the
    /// two-term loss. `noise` must already be scaled per-sample by `sigmas`.
    pub fn training_loss(
        &self,
        g: &mut Graph<T>,
        binding: &Binding,
        batch: &Batch<T>,
        sigmas: &[f64],
        noise: Tensor<T>,
        gamma: f64,
    ) -> Result<(LossVars, Vec<RouterDecision>)> {
        if batch.is_empty() {
            return Err(SdpError::Invalid("empty batch".into()));
        }
        let patches = g.constant(batch.patches.clone());
        let z_vl = self.percept.encode(g, binding, patches, &batch.instr)?;
        let prompts = self.skills.prompts_var(g, binding)?;
        let (route_vars, decisions) = self.router.route(g, binding, z_vl, prompts)?;
        let cond = self
            .denoiser
            .prepare(g, binding, z_vl, route_vars.z, batch.proprio.clone())?;

        let clean = g.constant(batch.chunks.clone());
        let noise = g.constant(noise);
        let noisy = g.add(clean, noise)?;
        let pred = self.denoiser.denoise(g, binding, &cond, noisy, sigmas)?;

        let sm = sm_loss_from_predictions(g, pred, clean, sigmas)?;
        let orth = orthogonal_loss_var(g, prompts)?;
        let weighted_orth = g.scale(orth, T::of(gamma));
        let mut total = g.add(sm, weighted_orth)?;
        if self.run.router.entropy_bonus > 0.0 {
            let entropy = self.router.entropy(g, route_vars.probs)?;
            let bonus = g.scale(entropy, T::of(-self.run.router.entropy_bonus));
            total = g.add(total, bonus)?;
        }
        Ok((
            LossVars {
                sm,
                orth,
                total,
                probs: route_vars.probs,
            },
            decisions,
        ))
    }

    /// Route a single state without planning; used for trace re-scoring.
    pub fn route_state(&self, state: &WorldState, task: &TaskSpec) -> Result<RouterDecision> {
        let (patches, _) = self.observe(state);
        let n_img = self.percept.cfg.n_img(self.run.world.raster_size);
        let patch_dim = self.percept.cfg.patch_dim();
        let mut g = Graph::new();
        let binding = self.store.bind(&mut g);
        let pt = g.constant(Tensor::new(vec![1, n_img, patch_dim], patches)?);
        let z_vl = self
            .percept
            .encode(&mut g, &binding, pt, &crate::world::instruction_tokens(task))?;
        let prompts = g.constant(self.skills.cached_prompts(&self.store)?);
        let (_, decisions) = self.router.route(&mut g, &binding, z_vl, prompts)?;
        Ok(decisions.into_iter().next().unwrap())
    }

    /// Sample one action chunk for a state: encode and route once, then run
    /// the deterministic sampler against the prepared conditioning.
    pub fn plan(
        &self,
        state: &WorldState,
        task: &TaskSpec,
        noise_rng: &mut Rng,
    ) -> Result<PlanOutcome> {
        let (patches, prop) = self.observe(state);
        let n_img = self.percept.cfg.n_img(self.run.world.raster_size);
        let patch_dim = self.percept.cfg.patch_dim();
        let k = self.chunk_len();

        let mut g = Graph::new();
        let binding = self.store.bind(&mut g);
        let pt = g.constant(Tensor::new(vec![1, n_img, patch_dim], patches)?);
        let z_vl = self
            .percept
            .encode(&mut g, &binding, pt, &crate::world::instruction_tokens(task))?;
        let prompts = g.constant(self.skills.cached_prompts(&self.store)?);
        let (route_vars, decisions) = self.router.route(&mut g, &binding, z_vl, prompts)?;
        let prop_t = Tensor::new(
            vec![1, PROPRIO_DIM],
            prop.iter().map(|&v| T::of(f64::from(v))).collect(),
        )?;
        let cond: Conditioning = self
            .denoiser
            .prepare(&mut g, &binding, z_vl, route_vars.z, prop_t)?;

        let chunk = ddim_sample(
            &self.run.diffusion,
            &[1, k, ACTION_DIM],
            noise_rng,
            |x, sigma| {
                let noisy = g.constant(x.clone());
                let out = self
                    .denoiser
                    .denoise(&mut g, &binding, &cond, noisy, &[sigma])?;
                Ok(g.value(out).clone())
            },
        )?;
        Ok(PlanOutcome {
            actions: self.denormalize_chunk(chunk.data()),
            decision: decisions.into_iter().next().unwrap(),
        })
    }

    /// Receding-horizon rollout: plan a chunk, execute the first `replan`
    /// actions, re-observe, repeat. The trace records one entry per planning
    /// step at the world timestep it was made.
    pub fn run_episode(
        &self,
        initial: &WorldState,
        task: &TaskSpec,
        episode_idx: u32,
        noise_rng: &mut Rng,
    ) -> Result<EpisodeRollout> {
        let cap = self.run.world.episode_cap;
        let m = self.run.diffusion.replan.min(self.chunk_len());
        let mut state = initial.clone();
        let mut trace = Vec::new();
        let mut t = 0usize;
        while t < cap {
            if success(&state, task) {
                return Ok(EpisodeRollout {
                    success: true,
                    steps: t,
                    trace,
                    final_state: state,
                });
            }
            let outcome = self.plan(&state, task, noise_rng)?;
            trace.push(TraceRecord::from_decision(
                self.config_hash,
                episode_idx,
                t as u32,
                &outcome.decision,
            ));
            for action in outcome.actions.iter().take(m) {
                if t >= cap || success(&state, task) {
                    break;
                }
                state = step(&state, action, &self.run.world);
                t += 1;
            }
        }
        let done = success(&state, task);
        Ok(EpisodeRollout {
            success: done,
            steps: t,
            trace,
            final_state: state,
        })
    }

    /// Normalization statistics copied from the training dataset.
    pub fn set_normalization(&mut self, dataset: &Dataset) {
        self.norm_mean = dataset.norm_mean;
        self.norm_std = dataset.norm_std;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::world::TaskKind;

    fn tiny_run() -> RunConfig {
        let mut run = RunConfig::from_toml(
            "[encoder]\nwidth = 16\ndepth = 1\nheads = 2\nffn_mult = 2\n\
             [skills]\nd_text = 16\nprojector_hidden = 8\n\
             [denoiser]\nblocks = 1\nwidth = 16\nheads = 2\nchunk_len = 4\nlora_rank = 2\nffn_mult = 2\nsigma_embed_dim = 4\ncond_hidden = 8\nhyper_hidden = 4\n\
             [router]\nhidden = 8\n",
        )
        .unwrap();
        run.diffusion.replan = 2;
        run
    }

    #[test]
    fn plan_is_deterministic_given_seed_and_checkpoint() {
        let policy = Policy::<f32>::new(tiny_run(), [0.0; 7], [1.0; 7]).unwrap();
        let mut rng = Rng::stream(5, "env");
        let state = WorldState::reset(&mut rng);
        let task = TaskSpec {
            kind: TaskKind::Lift,
            arg0: 0,
            arg1: 0,
        };
        let a = policy
            .plan(&state, &task, &mut Rng::stream(7, "noise"))
            .unwrap();
        let b = policy
            .plan(&state, &task, &mut Rng::stream(7, "noise"))
            .unwrap();
        assert_eq!(a.actions, b.actions);
        assert_eq!(a.decision, b.decision);
    }

    #[test]
    fn fresh_policy_predicts_near_mean_actions() {
        // Zero-initialized head: the sampled normalized chunk is exactly zero,
        // which denormalizes to the per-component means.
        let policy = Policy::<f64>::new(tiny_run(), [0.1; 7], [0.5; 7]).unwrap();
        let mut rng = Rng::stream(6, "env");
        let state = WorldState::reset(&mut rng);
        let task = TaskSpec {
            kind: TaskKind::Lift,
            arg0: 1,
            arg1: 0,
        };
        let plan = policy
            .plan(&state, &task, &mut Rng::stream(8, "noise"))
            .unwrap();
        for a in &plan.actions {
            for &v in &a.0 {
                assert!((f64::from(v) - 0.1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn open_loop_execution_when_replan_equals_chunk_len() {
        let mut run = tiny_run();
        run.diffusion.replan = run.denoiser.chunk_len;
        run.world.episode_cap = 9;
        let policy = Policy::<f32>::new(run, [0.0; 7], [1.0; 7]).unwrap();
        let mut rng = Rng::stream(9, "env");
        let state = WorldState::reset(&mut rng);
        let task = TaskSpec {
            kind: TaskKind::Lift,
            arg0: 0,
            arg1: 0,
        };
        let rollout = policy
            .run_episode(&state, &task, 0, &mut Rng::stream(1, "noise"))
            .unwrap();
        // Cap 9 with chunk length 4: planning happens at t = 0, 4, 8.
        assert!(!rollout.success);
        assert_eq!(rollout.steps, 9);
        assert_eq!(rollout.trace.len(), 3);
        assert_eq!(
            rollout.trace.iter().map(|r| r.timestep).collect::<Vec<_>>(),
            vec![0, 4, 8]
        );
    }

    #[test]
    fn rollouts_are_reproducible() {
        let policy = Policy::<f32>::new(tiny_run(), [0.0; 7], [1.0; 7]).unwrap();
        let mut rng = Rng::stream(10, "env");
        let state = WorldState::reset(&mut rng);
        let task = TaskSpec {
            kind: TaskKind::Push,
            arg0: 0,
            arg1: 1,
        };
        let run = |seed| {
            policy
                .run_episode(&state, &task, 3, &mut Rng::stream(seed, "noise"))
                .unwrap()
        };
        let (a, b) = (run(42), run(42));
        assert_eq!(a.final_state, b.final_state);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.steps, b.steps);
    }
}
