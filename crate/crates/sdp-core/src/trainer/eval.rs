//! Evaluation harness: per-task success, five-task chains with the standard
//! position-wise protocol, and the router-alignment diagnostic.

use crate::error::{Result, SdpError};
use crate::numerics::{Rng, Scalar};
use crate::policy::Policy;
use crate::router::TraceRecord;
use crate::world::{
    expert_rollout, sample_chain, sample_task_args, success, TaskKind, WorldState, NUM_SKILLS,
};

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub seed: u64,
    pub n_chains: usize,
    pub chain_length: usize,
    pub eval_episodes: usize,
    /// Score the scripted expert instead of the policy.
    pub oracle: bool,
    /// Worker thread cap; 0 means automatic.
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub config_hash: u64,
    pub seed: u64,
    pub n_chains: usize,
    pub eval_episodes: usize,
    pub per_task: Vec<(String, f64)>,
    /// Fraction of chains completing at least `i + 1` tasks.
    pub chain_success: Vec<f64>,
    pub avg_length: f64,
    pub std_length: f64,
    pub nmi: f64,
    pub skill_usage: [u64; NUM_SKILLS],
    pub confusion: [[u64; NUM_SKILLS]; NUM_SKILLS],
}

/// Normalized mutual information between two discrete sequences, geometric
/// normalization; zero when either side is constant.
pub fn normalized_mutual_information(assigned: &[u8], labels: &[u8]) -> Result<f64> {
    if assigned.is_empty() || assigned.len() != labels.len() {
        return Err(SdpError::Invalid(
            "alignment needs matched, nonempty sequences".into(),
        ));
    }
    let n = assigned.len() as f64;
    let mut joint = [[0.0f64; NUM_SKILLS]; NUM_SKILLS];
    for (&a, &l) in assigned.iter().zip(labels) {
        joint[a as usize][l as usize] += 1.0;
    }
    let mut pa = [0.0f64; NUM_SKILLS];
    let mut pl = [0.0f64; NUM_SKILLS];
    for i in 0..NUM_SKILLS {
        for j in 0..NUM_SKILLS {
            joint[i][j] /= n;
            pa[i] += joint[i][j];
            pl[j] += joint[i][j];
        }
    }
    let entropy = |p: &[f64; NUM_SKILLS]| -> f64 {
        -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
    };
    let (ha, hl) = (entropy(&pa), entropy(&pl));
    if ha <= 0.0 || hl <= 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for i in 0..NUM_SKILLS {
        for j in 0..NUM_SKILLS {
            if joint[i][j] > 0.0 {
                mi += joint[i][j] * (joint[i][j] / (pa[i] * pl[j])).ln();
            }
        }
    }
    Ok((mi / (ha * hl).sqrt()).clamp(0.0, 1.0))
}

pub fn worker_count(requested: usize, jobs: usize) -> usize {
    let auto = std::env::var("SDP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0);
    let base = if requested > 0 {
        requested
    } else {
        auto.unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
    };
    base.clamp(1, jobs.max(1))
}

fn run_policy_task<T: Scalar>(
    policy: &Policy<T>,
    state: &WorldState,
    task: &crate::world::TaskSpec,
    episode: u32,
    noise: &mut Rng,
    trace: &mut Vec<TraceRecord>,
) -> Result<(bool, WorldState)> {
    let rollout = policy.run_episode(state, task, episode, noise)?;
    trace.extend(rollout.trace.iter().cloned());
    Ok((rollout.success, rollout.final_state))
}

fn run_oracle_task(
    cfg: &crate::world::WorldConfig,
    state: &WorldState,
    task: &crate::world::TaskSpec,
) -> (bool, WorldState) {
    match expert_rollout(state, task, cfg) {
        Some(r) => (true, r.final_state),
        None => (false, state.clone()),
    }
}

struct ChainOutcome {
    completed: usize,
    trace: Vec<TraceRecord>,
}

fn evaluate_one_chain<T: Scalar>(
    policy: &Policy<T>,
    opts: &EvalOptions,
    chain_idx: usize,
) -> Result<ChainOutcome> {
    let world_cfg = policy.run.world;
    let mut chain_rng = Rng::stream(opts.seed, "eval-chain").substream(chain_idx as u64);
    let (initial, tasks) = sample_chain(&world_cfg, &mut chain_rng, opts.chain_length);
    let mut state = initial;
    let mut completed = 0usize;
    let mut trace = Vec::new();
    for (pos, task) in tasks.iter().enumerate() {
        // A task already satisfied at hand-off counts as completed.
        if success(&state, task) {
            completed += 1;
            continue;
        }
        let (ok, next) = if opts.oracle {
            run_oracle_task(&world_cfg, &state, task)
        } else {
            let mut noise = Rng::stream(opts.seed, "eval-noise")
                .substream((chain_idx * 16 + pos) as u64);
            run_policy_task(policy, &state, task, chain_idx as u32, &mut noise, &mut trace)?
        };
        if !ok {
            break;
        }
        completed += 1;
        state = next;
    }
    Ok(ChainOutcome { completed, trace })
}

/// Full evaluation: per-task success rates, chains, and router alignment on
/// held-out expert episodes. Chains run on worker threads and are reduced by
/// chain index, so the report is independent of scheduling.
pub fn evaluate<T: Scalar>(policy: &Policy<T>, opts: &EvalOptions) -> Result<(EvalReport, Vec<TraceRecord>)> {
    let kinds = policy.run.task_kinds()?;
    let world_cfg = policy.run.world;

    // Per-task success.
    let mut per_task = Vec::with_capacity(kinds.len());
    for (ki, kind) in kinds.iter().enumerate() {
        let mut wins = 0usize;
        for e in 0..opts.eval_episodes {
            let mut env =
                Rng::stream(opts.seed, "eval-env").substream((ki * 1_000_000 + e) as u64);
            let state = WorldState::reset(&mut env);
            let task = sample_task_args(*kind, &mut env);
            let ok = if opts.oracle {
                run_oracle_task(&world_cfg, &state, &task).0
            } else {
                let mut noise =
                    Rng::stream(opts.seed, "eval-task-noise").substream((ki * 1_000_000 + e) as u64);
                policy
                    .run_episode(&state, &task, e as u32, &mut noise)?
                    .success
            };
            wins += usize::from(ok);
        }
        per_task.push((
            kind.name().to_string(),
            wins as f64 / opts.eval_episodes.max(1) as f64,
        ));
    }

    // Chains, in parallel, reduced deterministically by index.
    let workers = worker_count(opts.threads, opts.n_chains);
    let mut outcomes: Vec<Option<Result<ChainOutcome>>> = Vec::new();
    outcomes.resize_with(opts.n_chains, || None);
    {
        let outcomes = std::sync::Mutex::new(&mut outcomes);
        let next = std::sync::atomic::AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let idx = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if idx >= opts.n_chains {
                        break;
                    }
                    let result = evaluate_one_chain(policy, opts, idx);
                    outcomes.lock().expect("chain results lock")[idx] = Some(result);
                });
            }
        });
    }
    let mut completed = Vec::with_capacity(opts.n_chains);
    let mut trace = Vec::new();
    for (i, slot) in outcomes.into_iter().enumerate() {
        let outcome = slot.unwrap_or_else(|| panic!("chain {i} never ran"))?;
        completed.push(outcome.completed);
        trace.extend(outcome.trace);
    }
    let n = completed.len().max(1) as f64;
    let chain_success: Vec<f64> = (1..=opts.chain_length)
        .map(|i| completed.iter().filter(|&&c| c >= i).count() as f64 / n)
        .collect();
    let avg_length = completed.iter().sum::<usize>() as f64 / n;
    let std_length = {
        let var = completed
            .iter()
            .map(|&c| (c as f64 - avg_length).powi(2))
            .sum::<f64>()
            / n;
        var.sqrt()
    };

    // Router alignment on held-out expert episodes re-scored by the router.
    let mut assigned = Vec::new();
    let mut labels = Vec::new();
    let mut skill_usage = [0u64; NUM_SKILLS];
    let mut confusion = [[0u64; NUM_SKILLS]; NUM_SKILLS];
    for (ki, kind) in kinds.iter().enumerate() {
        for e in 0..2 {
            let mut env = Rng::stream(opts.seed, "eval-align").substream((ki * 64 + e) as u64);
            let state = WorldState::reset(&mut env);
            let task = sample_task_args(*kind, &mut env);
            let Some(rollout) = expert_rollout(&state, &task, &world_cfg) else {
                continue;
            };
            for (s, _, label) in &rollout.steps {
                let decision = policy.route_state(s, &task)?;
                assigned.push(decision.selected as u8);
                labels.push(*label);
                skill_usage[decision.selected] += 1;
                confusion[decision.selected][*label as usize] += 1;
            }
        }
    }
    let nmi = if assigned.is_empty() {
        return Err(SdpError::Invalid("no alignment traces collected".into()));
    } else {
        normalized_mutual_information(&assigned, &labels)?
    };

    Ok((
        EvalReport {
            config_hash: policy.config_hash,
            seed: opts.seed,
            n_chains: opts.n_chains,
            eval_episodes: opts.eval_episodes,
            per_task,
            chain_success,
            avg_length,
            std_length,
            nmi,
            skill_usage,
            confusion,
        },
        trace,
    ))
}

impl EvalReport {
    /// Fixed-key structured text; parses back exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::from("sdp-evalreport v1\n");
        s.push_str(&format!("config_hash = {:016x}\n", self.config_hash));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("n_chains = {}\n", self.n_chains));
        s.push_str(&format!("eval_episodes = {}\n", self.eval_episodes));
        for (name, rate) in &self.per_task {
            s.push_str(&format!("task {name} = {rate}\n"));
        }
        for (i, rate) in self.chain_success.iter().enumerate() {
            s.push_str(&format!("chain_{} = {rate}\n", i + 1));
        }
        s.push_str(&format!("avg_length = {}\n", self.avg_length));
        s.push_str(&format!("std_length = {}\n", self.std_length));
        s.push_str(&format!("nmi = {}\n", self.nmi));
        let usage: Vec<String> = self.skill_usage.iter().map(|v| v.to_string()).collect();
        s.push_str(&format!("skill_usage = {}\n", usage.join(",")));
        for (i, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&format!("confusion_{i} = {}\n", cells.join(",")));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("sdp-evalreport v1") {
            return Err(SdpError::Format {
                what: "eval report",
                reason: "missing header".into(),
            });
        }
        let mut report = EvalReport {
            config_hash: 0,
            seed: 0,
            n_chains: 0,
            eval_episodes: 0,
            per_task: Vec::new(),
            chain_success: Vec::new(),
            avg_length: 0.0,
            std_length: 0.0,
            nmi: 0.0,
            skill_usage: [0; NUM_SKILLS],
            confusion: [[0; NUM_SKILLS]; NUM_SKILLS],
        };
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once(" = ").ok_or(SdpError::Format {
                what: "eval report",
                reason: format!("bad line `{line}`"),
            })?;
            let bad = |what: &str| SdpError::Format {
                what: "eval report",
                reason: format!("bad {what}: `{value}`"),
            };
            match key {
                "config_hash" => {
                    report.config_hash =
                        u64::from_str_radix(value, 16).map_err(|_| bad("hash"))?;
                }
                "seed" => report.seed = value.parse().map_err(|_| bad("seed"))?,
                "n_chains" => report.n_chains = value.parse().map_err(|_| bad("n_chains"))?,
                "eval_episodes" => {
                    report.eval_episodes = value.parse().map_err(|_| bad("eval_episodes"))?;
                }
                "avg_length" => report.avg_length = value.parse().map_err(|_| bad("avg"))?,
                "std_length" => report.std_length = value.parse().map_err(|_| bad("std"))?,
                "nmi" => report.nmi = value.parse().map_err(|_| bad("nmi"))?,
                "skill_usage" => {
                    for (i, cell) in value.split(',').enumerate() {
                        report.skill_usage[i] = cell.parse().map_err(|_| bad("usage"))?;
                    }
                }
                k if k.starts_with("task ") => {
                    report
                        .per_task
                        .push((k[5..].to_string(), value.parse().map_err(|_| bad("task"))?));
                }
                k if k.starts_with("chain_") => {
                    report
                        .chain_success
                        .push(value.parse().map_err(|_| bad("chain"))?);
                }
                k if k.starts_with("confusion_") => {
                    let i: usize = k[10..].parse().map_err(|_| bad("confusion row"))?;
                    for (j, cell) in value.split(',').enumerate() {
                        report.confusion[i][j] = cell.parse().map_err(|_| bad("confusion"))?;
                    }
                }
                other => {
                    return Err(SdpError::Format {
                        what: "eval report",
                        reason: format!("unknown key `{other}`"),
                    });
                }
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sequences_have_unit_nmi() {
        let xs: Vec<u8> = (0..800).map(|i| (i % 8) as u8).collect();
        let nmi = normalized_mutual_information(&xs, &xs).unwrap();
        assert!((nmi - 1.0).abs() < 1e-12, "{nmi}");
    }

    #[test]
    fn constant_assignments_have_zero_nmi() {
        let assigned = vec![3u8; 500];
        let labels: Vec<u8> = (0..500).map(|i| (i % 8) as u8).collect();
        let nmi = normalized_mutual_information(&assigned, &labels).unwrap();
        assert_eq!(nmi, 0.0);
    }

    #[test]
    fn independent_uniform_sequences_have_near_zero_nmi() {
        let mut rng = Rng::stream(3, "nmi");
        let n = 10_000;
        let a: Vec<u8> = (0..n).map(|_| rng.below(8) as u8).collect();
        let b: Vec<u8> = (0..n).map(|_| rng.below(8) as u8).collect();
        let nmi = normalized_mutual_information(&a, &b).unwrap();
        assert!(nmi < 0.05, "{nmi}");
    }

    #[test]
    fn empty_traces_are_rejected() {
        assert!(normalized_mutual_information(&[], &[]).is_err());
    }

    #[test]
    fn report_roundtrips_through_text() {
        let report = EvalReport {
            config_hash: 0xabc123,
            seed: 7,
            n_chains: 100,
            eval_episodes: 20,
            per_task: vec![("lift".into(), 0.95), ("place".into(), 0.85)],
            chain_success: vec![0.9, 0.8, 0.7, 0.6, 0.5],
            avg_length: 3.5,
            std_length: 1.25,
            nmi: 0.4321,
            skill_usage: [1, 2, 3, 4, 5, 6, 7, 8],
            confusion: {
                let mut c = [[0u64; 8]; 8];
                c[2][3] = 17;
                c[7][7] = 4;
                c
            },
        };
        let text = report.to_text();
        let parsed = EvalReport::from_text(&text).unwrap();
        assert_eq!(parsed, report);
    }
}
