//! Task definitions, the instruction vocabulary, and chain sampling.

use crate::numerics::Rng;

use super::expert::expert_rollout;
use super::{
    success, WorldConfig, WorldState, CONTAINER_NAME, NUM_OBJECTS, NUM_ZONES, OBJECT_NAMES,
    STACK_RADIUS, ZONE_NAMES,
};

pub const INSTRUCTION_LEN: usize = 4;
pub const PAD_TOKEN: u16 = 0;

pub const NUM_TASK_KINDS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Lift,
    Place,
    Stack,
    Push,
    OpenContainer,
    PourMotion,
}

pub const ALL_TASK_KINDS: [TaskKind; NUM_TASK_KINDS] = [
    TaskKind::Lift,
    TaskKind::Place,
    TaskKind::Stack,
    TaskKind::Push,
    TaskKind::OpenContainer,
    TaskKind::PourMotion,
];

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Lift => "lift",
            TaskKind::Place => "place",
            TaskKind::Stack => "stack",
            TaskKind::Push => "push",
            TaskKind::OpenContainer => "open-container",
            TaskKind::PourMotion => "pour-motion",
        }
    }

    pub fn index(self) -> usize {
        ALL_TASK_KINDS.iter().position(|&k| k == self).unwrap()
    }

    pub fn parse(name: &str) -> Option<TaskKind> {
        ALL_TASK_KINDS.iter().copied().find(|k| k.name() == name)
    }
}

/// A task instance. `arg0` is always an object index; `arg1` is a zone index
/// for place/push/pour, an object index for stack, and unused otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub arg0: u8,
    pub arg1: u8,
}

impl TaskSpec {
    pub fn describe(&self) -> String {
        match self.kind {
            TaskKind::Lift => format!("lift {}", OBJECT_NAMES[self.arg0 as usize]),
            TaskKind::Place => format!(
                "place {} in {}",
                OBJECT_NAMES[self.arg0 as usize], ZONE_NAMES[self.arg1 as usize]
            ),
            TaskKind::Stack => format!(
                "stack {} on {}",
                OBJECT_NAMES[self.arg0 as usize], OBJECT_NAMES[self.arg1 as usize]
            ),
            TaskKind::Push => format!(
                "push {} to {}",
                OBJECT_NAMES[self.arg0 as usize], ZONE_NAMES[self.arg1 as usize]
            ),
            TaskKind::OpenContainer => format!("open the {CONTAINER_NAME}"),
            TaskKind::PourMotion => format!(
                "pour {} over {}",
                OBJECT_NAMES[self.arg0 as usize], ZONE_NAMES[self.arg1 as usize]
            ),
        }
    }
}

/// Token ids: pad, six task kinds, objects, zones, container.
pub fn vocab() -> Vec<String> {
    let mut v = vec!["<pad>".to_string()];
    v.extend(ALL_TASK_KINDS.iter().map(|k| k.name().to_string()));
    v.extend(OBJECT_NAMES.iter().map(|s| s.to_string()));
    v.extend(ZONE_NAMES.iter().map(|s| s.to_string()));
    v.push(CONTAINER_NAME.to_string());
    v
}

pub fn vocab_size() -> usize {
    1 + NUM_TASK_KINDS + NUM_OBJECTS + NUM_ZONES + 1
}

fn object_token(i: u8) -> u16 {
    (1 + NUM_TASK_KINDS + i as usize) as u16
}

fn zone_token(i: u8) -> u16 {
    (1 + NUM_TASK_KINDS + NUM_OBJECTS + i as usize) as u16
}

fn container_token() -> u16 {
    (1 + NUM_TASK_KINDS + NUM_OBJECTS + NUM_ZONES) as u16
}

/// Fixed-length instruction: task-type token, argument tokens, padding.
pub fn instruction_tokens(task: &TaskSpec) -> [u16; INSTRUCTION_LEN] {
    let kind = (1 + task.kind.index()) as u16;
    match task.kind {
        TaskKind::Lift => [kind, object_token(task.arg0), PAD_TOKEN, PAD_TOKEN],
        TaskKind::Place | TaskKind::Push | TaskKind::PourMotion => {
            [kind, object_token(task.arg0), zone_token(task.arg1), PAD_TOKEN]
        }
        TaskKind::Stack => {
            [kind, object_token(task.arg0), object_token(task.arg1), PAD_TOKEN]
        }
        TaskKind::OpenContainer => [kind, container_token(), PAD_TOKEN, PAD_TOKEN],
    }
}

pub fn task_label(task: &TaskSpec) -> String {
    task.describe()
}

/// Random arguments for a task kind.
pub fn sample_task_args(kind: TaskKind, rng: &mut Rng) -> TaskSpec {
    match kind {
        TaskKind::Lift => TaskSpec {
            kind,
            arg0: rng.below(NUM_OBJECTS) as u8,
            arg1: 0,
        },
        TaskKind::Place | TaskKind::Push | TaskKind::PourMotion => TaskSpec {
            kind,
            arg0: rng.below(NUM_OBJECTS) as u8,
            arg1: rng.below(NUM_ZONES) as u8,
        },
        TaskKind::Stack => {
            let a = rng.below(NUM_OBJECTS) as u8;
            let mut b = rng.below(NUM_OBJECTS) as u8;
            while b == a {
                b = rng.below(NUM_OBJECTS) as u8;
            }
            TaskSpec { kind, arg0: a, arg1: b }
        }
        TaskKind::OpenContainer => TaskSpec { kind, arg0: 0, arg1: 0 },
    }
}

/// Whether a task is worth issuing from this state: not already satisfied and
/// not structurally blocked.
pub fn task_valid(state: &WorldState, task: &TaskSpec) -> bool {
    if success(state, task) {
        return false;
    }
    match task.kind {
        TaskKind::OpenContainer => !state.container.lid_open,
        TaskKind::Stack => {
            // The base must be free: nothing already resting on it.
            let base = &state.objects[task.arg1 as usize];
            state.objects.iter().enumerate().all(|(i, o)| {
                if i == task.arg1 as usize || i == task.arg0 as usize || o.held {
                    return true;
                }
                let dx = f64::from(o.pos[0]) - f64::from(base.pos[0]);
                let dy = f64::from(o.pos[1]) - f64::from(base.pos[1]);
                (dx * dx + dy * dy).sqrt() > STACK_RADIUS
            })
        }
        TaskKind::Push => {
            // Pushing needs the object on the table, not buried under a stack.
            let obj = &state.objects[task.arg0 as usize];
            f64::from(obj.pos[2]) < 0.1
                && state.objects.iter().enumerate().all(|(i, o)| {
                    if i == task.arg0 as usize || o.held {
                        return true;
                    }
                    let dx = f64::from(o.pos[0]) - f64::from(obj.pos[0]);
                    let dy = f64::from(o.pos[1]) - f64::from(obj.pos[1]);
                    (dx * dx + dy * dy).sqrt() > STACK_RADIUS
                })
        }
        TaskKind::PourMotion => state.objects[task.arg0 as usize].poured_over != Some(task.arg1),
        _ => true,
    }
}

/// Sample a chain of five consecutive tasks by advancing a fresh world with
/// the scripted expert, mirroring how the chain will be scored.
///
/// Returns the initial state and the instruction sequence.
pub fn sample_chain(
    cfg: &WorldConfig,
    rng: &mut Rng,
    length: usize,
) -> (WorldState, Vec<TaskSpec>) {
    'outer: loop {
        let initial = WorldState::reset(rng);
        let mut state = initial.clone();
        let mut tasks = Vec::with_capacity(length);
        for _ in 0..length {
            let mut found = false;
            for _attempt in 0..64 {
                let kind = ALL_TASK_KINDS[rng.below(NUM_TASK_KINDS)];
                let task = sample_task_args(kind, rng);
                if !task_valid(&state, &task) {
                    continue;
                }
                match expert_rollout(&state, &task, cfg) {
                    Some(rollout) => {
                        state = rollout.final_state;
                        tasks.push(task);
                        found = true;
                        break;
                    }
                    None => continue,
                }
            }
            if !found {
                continue 'outer;
            }
        }
        return (initial, tasks);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_covers_all_instruction_tokens() {
        let v = vocab();
        assert_eq!(v.len(), vocab_size());
        for kind in ALL_TASK_KINDS {
            let task = TaskSpec {
                kind,
                arg0: (NUM_OBJECTS - 1) as u8,
                arg1: if kind == TaskKind::Stack { 0 } else { (NUM_ZONES - 1) as u8 },
            };
            for tok in instruction_tokens(&task) {
                assert!((tok as usize) < v.len(), "token {tok} out of vocab");
            }
        }
    }

    #[test]
    fn identical_task_yields_identical_tokens() {
        let t = TaskSpec {
            kind: TaskKind::Place,
            arg0: 1,
            arg1: 0,
        };
        assert_eq!(instruction_tokens(&t), instruction_tokens(&t));
    }
}
