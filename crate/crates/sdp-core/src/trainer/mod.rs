//! Joint optimization of every trainable component under the two-term loss,
//! plus the evaluation harness and checkpointing.

mod checkpoint;
mod eval;

pub use checkpoint::{load_checkpoint, restore_policy, save_checkpoint, CheckpointData,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use eval::{evaluate, normalized_mutual_information, EvalOptions, EvalReport};

use crate::config::RunConfig;
use crate::diffusion::sample_noise;
use crate::error::{Result, SdpError};
use crate::numerics::{AdamWConfig, AdamWState, Rng, Scalar, Tensor};
use crate::policy::{Batch, Policy};
use crate::world::{instruction_tokens, Action, Dataset, ACTION_DIM, PROPRIO_DIM};

/// One appended row of the training log; serializes to a tab-separated line.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub sm: f64,
    pub orth: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step\tsm\torth\ttotal\tgrad_norm\tlr";

impl MetricsRow {
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.sm, self.orth, self.total, self.grad_norm, self.lr
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(SdpError::Format {
                what: "metrics",
                reason: format!("expected 6 fields, got {}", f.len()),
            });
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| SdpError::Format {
                what: "metrics",
                reason: format!("bad number `{s}`"),
            })
        };
        Ok(MetricsRow {
            step: f[0].parse().map_err(|_| SdpError::Format {
                what: "metrics",
                reason: "bad step".into(),
            })?,
            sm: num(f[1])?,
            orth: num(f[2])?,
            total: num(f[3])?,
            grad_norm: num(f[4])?,
            lr: num(f[5])?,
        })
    }
}

pub fn metrics_to_text(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.tsv_line());
        out.push('\n');
    }
    out
}

/// Index of one training window: an episode and a starting timestep.
#[derive(Debug, Clone, Copy)]
struct Window {
    episode: u32,
    t: u32,
}

/// Why a training run stopped.
#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    Completed,
    EarlyTarget { success_rate: f64, step: u64 },
}

pub struct Trainer<T> {
    pub policy: Policy<T>,
    pub dataset: Dataset,
    opt: AdamWState<T>,
    windows: Vec<Window>,
    instr_cache: Vec<[u16; crate::world::INSTRUCTION_LEN]>,
    pub metrics: Vec<MetricsRow>,
    shuffle_rng: Rng,
    noise_rng: Rng,
    step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(run: RunConfig, dataset: Dataset) -> Result<Self> {
        if dataset.episodes.is_empty() {
            return Err(SdpError::Invalid("dataset has no episodes".into()));
        }
        let mut policy = Policy::new(run.clone(), dataset.norm_mean, dataset.norm_std)?;
        policy.set_normalization(&dataset);
        let opt = AdamWState::new(
            &policy.store,
            AdamWConfig {
                lr: run.trainer.lr,
                weight_decay: run.trainer.weight_decay,
                ..AdamWConfig::default()
            },
        );
        let mut windows = Vec::new();
        for (ei, ep) in dataset.episodes.iter().enumerate() {
            for t in 0..ep.len() {
                windows.push(Window {
                    episode: ei as u32,
                    t: t as u32,
                });
            }
        }
        let instr_cache = dataset
            .episodes
            .iter()
            .map(|ep| instruction_tokens(&ep.task))
            .collect();
        let seed = run.seed;
        Ok(Trainer {
            policy,
            dataset,
            opt,
            windows,
            instr_cache,
            metrics: Vec::new(),
            shuffle_rng: Rng::stream(seed, "data-shuffle"),
            noise_rng: Rng::stream(seed, "noise"),
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn rng_states(&self) -> Vec<(String, u64)> {
        vec![
            ("data-shuffle".to_string(), self.shuffle_rng.counter()),
            ("noise".to_string(), self.noise_rng.counter()),
        ]
    }

    fn assemble_batch(&self, order: &[usize], start: usize, size: usize) -> Batch<T> {
        let slice = &order[start..(start + size).min(order.len())];
        let b = slice.len();
        let n_img = self
            .policy
            .percept
            .cfg
            .n_img(self.policy.run.world.raster_size);
        let patch_dim = self.policy.percept.cfg.patch_dim();
        let k = self.policy.chunk_len();
        let mut patches = Vec::with_capacity(b * n_img * patch_dim);
        let mut instr = Vec::with_capacity(b * crate::world::INSTRUCTION_LEN);
        let mut prop = Vec::with_capacity(b * PROPRIO_DIM);
        let mut chunks = Vec::with_capacity(b * k * ACTION_DIM);
        for &wi in slice {
            let w = self.windows[wi];
            let ep = &self.dataset.episodes[w.episode as usize];
            let state = &ep.states[w.t as usize];
            let (p, pr) = self.policy.observe(state);
            patches.extend_from_slice(&p);
            instr.extend_from_slice(&self.instr_cache[w.episode as usize]);
            prop.extend(pr.iter().map(|&v| T::of(f64::from(v))));
            let horizon: Vec<Action> = (0..k)
                .map(|j| {
                    ep.actions
                        .get(w.t as usize + j)
                        .copied()
                        .unwrap_or(Action::NOOP)
                })
                .collect();
            chunks.extend(self.policy.normalize_chunk(&horizon));
        }
        Batch {
            patches: Tensor::new(vec![b, n_img, patch_dim], patches).expect("batch patches"),
            instr,
            proprio: Tensor::new(vec![b, PROPRIO_DIM], prop).expect("batch proprio"),
            chunks: Tensor::new(vec![b, k, ACTION_DIM], chunks).expect("batch chunks"),
        }
    }

    /// One optimizer step on an assembled batch. Returns the logged row.
    fn train_step(&mut self, batch: &Batch<T>) -> Result<MetricsRow> {
        let b = batch.len();
        let run = self.policy.run.clone();
        let sigmas: Vec<f64> = (0..b)
            .map(|_| run.diffusion.sample_sigma(&mut self.noise_rng))
            .collect();
        let k = self.policy.chunk_len();
        let noise = sample_noise::<T>(&[b, k, ACTION_DIM], &sigmas, &mut self.noise_rng);

        let mut g = crate::numerics::Graph::new();
        let binding = self.policy.store.bind(&mut g);
        let (loss, _) = self
            .policy
            .training_loss(&mut g, &binding, batch, &sigmas, noise, run.trainer.gamma)?;
        let sm = g.value(loss.sm).item();
        let orth = g.value(loss.orth).item();
        let total = g.value(loss.total).item();
        if !total.is_finite() {
            return Err(SdpError::NonFinite {
                what: format!("training loss at step {}", self.step + 1),
            });
        }
        let grads = g.backward(loss.total)?;
        let mut norm_sq = 0.0f64;
        for (id, _, _) in self.policy.store.iter() {
            if let Some(grad) = grads.get(binding.var(id)) {
                for &v in grad.data() {
                    let v = v.as_f64();
                    norm_sq += v * v;
                }
            }
        }
        self.opt.step(&mut self.policy.store, &binding, &grads)?;
        self.policy.skills.rebuild_cache(&self.policy.store)?;
        self.step += 1;
        let row = MetricsRow {
            step: self.step,
            sm: sm.as_f64(),
            orth: orth.as_f64(),
            total: total.as_f64(),
            grad_norm: norm_sq.sqrt(),
            lr: run.trainer.lr,
        };
        self.metrics.push(row.clone());
        Ok(row)
    }

    /// Run the configured number of epochs. `on_step` sees every metrics row;
    /// returning `false` from `on_eval` stops training early.
    pub fn train(&mut self) -> Result<StopReason> {
        self.train_with(|_| {}, |_| {})
    }

    pub fn train_with(
        &mut self,
        mut on_step: impl FnMut(&MetricsRow),
        mut on_eval: impl FnMut(f64),
    ) -> Result<StopReason> {
        let run = self.policy.run.clone();
        let epochs = run.trainer.epochs;
        let bs = run.trainer.batch_size;
        for _epoch in 0..epochs {
            let mut order: Vec<usize> = (0..self.windows.len()).collect();
            self.shuffle_rng.shuffle(&mut order);
            let mut start = 0;
            while start < order.len() {
                let batch = self.assemble_batch(&order, start, bs);
                let row = self.train_step(&batch)?;
                on_step(&row);
                start += bs;

                if run.trainer.eval_every > 0 && self.step % run.trainer.eval_every as u64 == 0 {
                    let rate = self.quick_success_rate()?;
                    on_eval(rate);
                    if run.trainer.early_stop_success > 0.0
                        && rate >= run.trainer.early_stop_success
                    {
                        return Ok(StopReason::EarlyTarget {
                            success_rate: rate,
                            step: self.step,
                        });
                    }
                }
            }
        }
        Ok(StopReason::Completed)
    }

    /// Mean policy success over a few fresh episodes of each configured task;
    /// the in-training progress probe.
    pub fn quick_success_rate(&self) -> Result<f64> {
        let run = &self.policy.run;
        let kinds = run.task_kinds()?;
        let episodes = run.trainer.eval_episodes.max(1);
        let mut successes = 0usize;
        let mut total = 0usize;
        for (ki, kind) in kinds.iter().enumerate() {
            for e in 0..episodes {
                let mut env = Rng::stream(run.seed, "train-eval-env")
                    .substream((ki * 100_000 + e) as u64);
                let state = crate::world::WorldState::reset(&mut env);
                let task = crate::world::sample_task_args(*kind, &mut env);
                let mut noise =
                    Rng::stream(run.seed, "train-eval-noise").substream((ki * 100_000 + e) as u64);
                let rollout = self.policy.run_episode(&state, &task, e as u32, &mut noise)?;
                successes += usize::from(rollout.success);
                total += 1;
            }
        }
        Ok(successes as f64 / total as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_dataset, TaskKind, WorldConfig};

    fn tiny_run(tasks: &str, epochs: usize) -> RunConfig {
        RunConfig::from_toml(&format!(
            "seed = 11\n\
             [encoder]\nwidth = 16\ndepth = 1\nheads = 2\nffn_mult = 2\n\
             [skills]\nd_text = 16\nprojector_hidden = 8\n\
             [denoiser]\nblocks = 1\nwidth = 16\nheads = 2\nchunk_len = 4\nlora_rank = 2\nffn_mult = 2\nsigma_embed_dim = 4\ncond_hidden = 8\nhyper_hidden = 4\n\
             [router]\nhidden = 8\n\
             [trainer]\nepochs = {epochs}\nbatch_size = 16\nlr = 3e-4\ntasks = [\"{tasks}\"]\ndemos_per_task = 3\n"
        ))
        .unwrap()
    }

    fn tiny_dataset(run: &RunConfig) -> Dataset {
        generate_dataset(
            &run.task_kinds().unwrap(),
            run.trainer.demos_per_task,
            run.seed,
            run.hash(),
            &WorldConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn gamma_zero_total_equals_sm_bitwise() {
        let mut run = tiny_run("lift", 1);
        run.trainer.gamma = 0.0;
        let ds = tiny_dataset(&run);
        let mut trainer = Trainer::<f64>::new(run, ds).unwrap();
        let order: Vec<usize> = (0..trainer.windows.len()).collect();
        let batch = trainer.assemble_batch(&order, 0, 8);
        let row = trainer.train_step(&batch).unwrap();
        assert_eq!(row.total, row.sm);
    }

    #[test]
    fn loss_decomposition_is_exact_in_every_logged_row() {
        let run = tiny_run("lift", 1);
        let ds = tiny_dataset(&run);
        let mut trainer = Trainer::<f32>::new(run, ds).unwrap();
        trainer.train().unwrap();
        assert!(!trainer.metrics.is_empty());
        for row in &trainer.metrics {
            // Recompute in f32, matching the graph's own arithmetic.
            let total = (row.sm as f32) + 0.01f32 * (row.orth as f32);
            assert_eq!(row.total as f32, total, "step {}", row.step);
        }
    }

    #[test]
    fn identical_seeds_produce_identical_metrics_logs() {
        let run = tiny_run("place", 1);
        let ds = tiny_dataset(&run);
        let run_once = || {
            let mut t = Trainer::<f32>::new(run.clone(), ds.clone()).unwrap();
            t.train().unwrap();
            metrics_to_text(&t.metrics)
        };
        assert_eq!(run_once(), run_once());
    }

    #[test]
    fn smoothed_loss_decreases_over_training() {
        let run = tiny_run("lift", 6);
        let ds = tiny_dataset(&run);
        let mut trainer = Trainer::<f32>::new(run, ds).unwrap();
        trainer.train().unwrap();
        let rows = &trainer.metrics;
        assert!(rows.len() >= 12, "need enough steps, got {}", rows.len());
        let head: f64 = rows[..4].iter().map(|r| r.total).sum::<f64>() / 4.0;
        let tail: f64 =
            rows[rows.len() - 4..].iter().map(|r| r.total).sum::<f64>() / 4.0;
        assert!(
            tail < head,
            "loss should fall: first {head:.4} vs last {tail:.4}"
        );
    }

    #[test]
    fn metrics_rows_roundtrip_through_text() {
        let rows = vec![
            MetricsRow {
                step: 1,
                sm: 1.53e-2,
                orth: 0.1250001,
                total: 1.6550001e-2,
                grad_norm: 3.7,
                lr: 1e-4,
            },
            MetricsRow {
                step: 2,
                sm: f64::from(0.25f32),
                orth: 0.125,
                total: 0.2512500035762787,
                grad_norm: 0.0,
                lr: 1e-4,
            },
        ];
        let text = metrics_to_text(&rows);
        let parsed: Vec<MetricsRow> = text
            .lines()
            .skip(1)
            .map(|l| MetricsRow::parse(l).unwrap())
            .collect();
        assert_eq!(parsed, rows);
    }

    #[test]
    fn task_kind_parse_rejects_unknown() {
        assert!(TaskKind::parse("juggle").is_none());
    }
}
