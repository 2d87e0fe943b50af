//! Synthetic kinematic tabletop environment.
//!
//! No forces and no collision response beyond clipping, grasp logic, and a
//! lateral contact-push rule. State fields are `f32` and every step computes
//! in `f64` before rounding back down, so stored episodes replay bit-exactly
//! from their initial state.

mod dataset;
mod expert;
mod render;
mod tasks;

pub use dataset::{
    decode_dataset, encode_dataset, generate_dataset, load_dataset, save_dataset, Dataset,
    Episode, DATASET_MAGIC, DATASET_VERSION,
};
pub use expert::{
    expert_rollout, ExpertController, ExpertRollout, SKILL_CLOSE, SKILL_MOVE_DOWN, SKILL_MOVE_UP,
    SKILL_OPEN, SKILL_ROLL, SKILL_ROTATE, SKILL_TRANSLATE, SKILL_YAW,
};
pub use render::{proprio, render_raster, PROPRIO_DIM, RASTER_CHANNELS};
pub use tasks::{
    instruction_tokens, sample_chain, sample_task_args, task_label, task_valid, vocab, vocab_size,
    TaskKind, TaskSpec, ALL_TASK_KINDS, INSTRUCTION_LEN, NUM_TASK_KINDS, PAD_TOKEN,
};

use serde::{Deserialize, Serialize};

pub const ACTION_DIM: usize = 7;
pub const NUM_SKILLS: usize = 8;
pub const SKILL_NAMES: [&str; NUM_SKILLS] = [
    "roll",
    "yaw",
    "open the gripper",
    "move up",
    "translate",
    "close the gripper",
    "move down",
    "rotate",
];

pub const NUM_OBJECTS: usize = 3;
pub const NUM_ZONES: usize = 2;
pub const OBJECT_NAMES: [&str; NUM_OBJECTS] = ["red block", "green block", "blue block"];
pub const ZONE_NAMES: [&str; NUM_ZONES] = ["left zone", "right zone"];
pub const CONTAINER_NAME: &str = "box";

// Geometry, in world units on a [-1, 1]^2 table with z in [0, 1].
pub const OBJECT_HEIGHT: f64 = 0.06;
pub const REST_Z: f64 = 0.03;
pub const ZONE_RADIUS: f64 = 0.12;
pub const STACK_RADIUS: f64 = 0.06;
pub const STACK_Z_TOL: f64 = 0.02;
pub const CONTACT_RADIUS: f64 = 0.07;
pub const HANDLE_OFFSET: [f64; 3] = [0.12, 0.0, 0.05];
pub const TWIST_REQUIRED: f64 = 0.8;
pub const POUR_ROLL_MIN: f64 = 1.0;
pub const LIFT_Z: f64 = 0.30;
pub const GRASP_CMD: f64 = -0.5;
pub const RELEASE_CMD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub grasp_radius: f64,
    pub translation_step: f64,
    pub rotation_step: f64,
    pub aperture_rate: f64,
    pub raster_size: usize,
    pub episode_cap: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            grasp_radius: 0.08,
            translation_step: 0.05,
            rotation_step: 0.1,
            aperture_rate: 0.2,
            raster_size: 24,
            episode_cap: 200,
        }
    }
}

/// One action: (dx, dy, dz, droll, dpitch, dyaw, gripper command), each in
/// `[-1, 1]` and scaled by the per-component step sizes at application.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action(pub [f32; ACTION_DIM]);

impl Action {
    pub const NOOP: Action = Action([0.0; ACTION_DIM]);

    pub fn clipped(values: [f32; ACTION_DIM]) -> Self {
        let mut v = values;
        for x in &mut v {
            *x = x.clamp(-1.0, 1.0);
            if !x.is_finite() {
                *x = 0.0;
            }
        }
        Action(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectState {
    pub pos: [f32; 3],
    pub held: bool,
    /// Zone index this object has been poured over, if any.
    pub poured_over: Option<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContainerState {
    pub pos: [f32; 2],
    pub lid_open: bool,
    pub twist: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub gripper_pos: [f32; 3],
    /// (roll, pitch, yaw), wrapped to (-pi, pi].
    pub gripper_rot: [f32; 3],
    /// 1 = fully open, 0 = fully closed.
    pub aperture: f32,
    pub held: Option<u8>,
    /// World-frame offset of the held object from the gripper.
    pub hold_offset: [f32; 3],
    pub objects: Vec<ObjectState>,
    pub zones: Vec<[f32; 2]>,
    pub container: ContainerState,
}

fn wrap_angle(a: f64) -> f64 {
    let mut x = a % std::f64::consts::TAU;
    if x > std::f64::consts::PI {
        x -= std::f64::consts::TAU;
    } else if x <= -std::f64::consts::PI {
        x += std::f64::consts::TAU;
    }
    x
}

fn dist3(a: [f32; 3], b: [f32; 3]) -> f64 {
    let dx = f64::from(a[0]) - f64::from(b[0]);
    let dy = f64::from(a[1]) - f64::from(b[1]);
    let dz = f64::from(a[2]) - f64::from(b[2]);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

fn dist_xy(a: [f32; 3], b: [f32; 2]) -> f64 {
    let dx = f64::from(a[0]) - f64::from(b[0]);
    let dy = f64::from(a[1]) - f64::from(b[1]);
    (dx * dx + dy * dy).sqrt()
}

impl WorldState {
    pub fn handle_pos(&self) -> [f32; 3] {
        [
            (f64::from(self.container.pos[0]) + HANDLE_OFFSET[0]) as f32,
            (f64::from(self.container.pos[1]) + HANDLE_OFFSET[1]) as f32,
            HANDLE_OFFSET[2] as f32,
        ]
    }

    /// Sample a fresh tabletop: objects, zones, and the container mutually
    /// separated so every task is solvable; gripper open at a random pose.
    pub fn reset(rng: &mut crate::numerics::Rng) -> Self {
        let mut spots: Vec<[f64; 2]> = Vec::new();
        while spots.len() < NUM_OBJECTS + NUM_ZONES + 1 {
            let candidate = [rng.uniform_in(-0.7, 0.7), rng.uniform_in(-0.7, 0.7)];
            let clear = spots.iter().all(|s| {
                let (dx, dy) = (s[0] - candidate[0], s[1] - candidate[1]);
                (dx * dx + dy * dy).sqrt() >= 0.32
            });
            if clear {
                spots.push(candidate);
            }
        }
        let objects = (0..NUM_OBJECTS)
            .map(|i| ObjectState {
                pos: [spots[i][0] as f32, spots[i][1] as f32, REST_Z as f32],
                held: false,
                poured_over: None,
            })
            .collect();
        let zones = (0..NUM_ZONES)
            .map(|i| {
                let s = spots[NUM_OBJECTS + i];
                [s[0] as f32, s[1] as f32]
            })
            .collect();
        let c = spots[NUM_OBJECTS + NUM_ZONES];
        WorldState {
            gripper_pos: [
                rng.uniform_in(-0.5, 0.5) as f32,
                rng.uniform_in(-0.5, 0.5) as f32,
                rng.uniform_in(0.3, 0.6) as f32,
            ],
            gripper_rot: [0.0, 0.0, rng.uniform_in(-0.4, 0.4) as f32],
            aperture: 1.0,
            held: None,
            hold_offset: [0.0; 3],
            objects,
            zones,
            container: ContainerState {
                pos: [c[0] as f32, c[1] as f32],
                lid_open: false,
                twist: 0.0,
            },
        }
    }
}

/// Deterministic kinematics. All actions are admissible; out-of-bounds motion
/// is clipped.
pub fn step(state: &WorldState, action: &Action, cfg: &WorldConfig) -> WorldState {
    let mut next = state.clone();
    let a: Vec<f64> = action
        .0
        .iter()
        .map(|&v| {
            let x = f64::from(v);
            if x.is_finite() {
                x.clamp(-1.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();

    // Pose integration with clipping at bounds.
    let gp = [
        (f64::from(state.gripper_pos[0]) + a[0] * cfg.translation_step).clamp(-1.0, 1.0),
        (f64::from(state.gripper_pos[1]) + a[1] * cfg.translation_step).clamp(-1.0, 1.0),
        (f64::from(state.gripper_pos[2]) + a[2] * cfg.translation_step).clamp(0.0, 1.0),
    ];
    next.gripper_pos = [gp[0] as f32, gp[1] as f32, gp[2] as f32];
    let yaw_before = f64::from(state.gripper_rot[2]);
    let rot = [
        wrap_angle(f64::from(state.gripper_rot[0]) + a[3] * cfg.rotation_step),
        wrap_angle(f64::from(state.gripper_rot[1]) + a[4] * cfg.rotation_step),
        wrap_angle(f64::from(state.gripper_rot[2]) + a[5] * cfg.rotation_step),
    ];
    next.gripper_rot = [rot[0] as f32, rot[1] as f32, rot[2] as f32];
    next.aperture =
        ((f64::from(state.aperture) + a[6] * cfg.aperture_rate).clamp(0.0, 1.0)) as f32;

    let cmd = a[6];
    match state.held {
        Some(id) => {
            let idx = id as usize;
            // Held object rigidly tracks the gripper.
            let pos = [
                (gp[0] + f64::from(state.hold_offset[0])) as f32,
                (gp[1] + f64::from(state.hold_offset[1])) as f32,
                (gp[2] + f64::from(state.hold_offset[2])) as f32,
            ];
            next.objects[idx].pos = pos;

            // Pour detection: wrist rolled past the threshold over a zone.
            if rot[0].abs() > POUR_ROLL_MIN {
                for (zi, zone) in state.zones.iter().enumerate() {
                    if dist_xy(pos, *zone) <= ZONE_RADIUS {
                        next.objects[idx].poured_over = Some(zi as u8);
                    }
                }
            }

            if cmd >= RELEASE_CMD {
                next.held = None;
                next.hold_offset = [0.0; 3];
                next.objects[idx].held = false;
                next.objects[idx].pos = settle(&next, idx);
            }
        }
        None => {
            if cmd <= GRASP_CMD {
                // Grasp the nearest object within reach; ties go to the lowest index.
                let mut best: Option<(usize, f64)> = None;
                for (i, obj) in next.objects.iter().enumerate() {
                    let d = dist3(next.gripper_pos, obj.pos);
                    if d <= cfg.grasp_radius && best.map_or(true, |(_, bd)| d < bd) {
                        best = Some((i, d));
                    }
                }
                if let Some((idx, _)) = best {
                    next.held = Some(idx as u8);
                    next.objects[idx].held = true;
                    next.hold_offset = [
                        next.objects[idx].pos[0] - next.gripper_pos[0],
                        next.objects[idx].pos[1] - next.gripper_pos[1],
                        next.objects[idx].pos[2] - next.gripper_pos[2],
                    ];
                }
            }

            // Lateral contact push: a low, closed gripper shoves objects along
            // its own motion direction, so pushed objects track the heading
            // instead of sliding off the side of the jaws.
            if next.held.is_none() && gp[2] <= OBJECT_HEIGHT && f64::from(next.aperture) <= 0.5 {
                let mx = gp[0] - f64::from(state.gripper_pos[0]);
                let my = gp[1] - f64::from(state.gripper_pos[1]);
                let step_len = (mx * mx + my * my).sqrt();
                if step_len > 1e-9 {
                    let (ux, uy) = (mx / step_len, my / step_len);
                    for obj in next.objects.iter_mut() {
                        let rx = f64::from(obj.pos[0]) - gp[0];
                        let ry = f64::from(obj.pos[1]) - gp[1];
                        let d2 = rx * rx + ry * ry;
                        if d2 < CONTACT_RADIUS * CONTACT_RADIUS {
                            // Smallest shift along (ux, uy) that clears the contact circle.
                            let along = rx * ux + ry * uy;
                            let t = -along
                                + (along * along - d2 + CONTACT_RADIUS * CONTACT_RADIUS).sqrt();
                            obj.pos[0] =
                                ((f64::from(obj.pos[0]) + t * ux).clamp(-1.0, 1.0)) as f32;
                            obj.pos[1] =
                                ((f64::from(obj.pos[1]) + t * uy).clamp(-1.0, 1.0)) as f32;
                        }
                    }
                }
            }

            // Container twist: closed gripper at the handle accumulates yaw.
            if !next.container.lid_open {
                let handle = next.handle_pos();
                if f64::from(next.aperture) <= 0.5
                    && dist3(next.gripper_pos, handle) <= cfg.grasp_radius
                {
                    let dyaw = wrap_angle(rot[2] - yaw_before).abs();
                    let twist = f64::from(next.container.twist) + dyaw;
                    next.container.twist = twist as f32;
                    if twist >= TWIST_REQUIRED {
                        next.container.lid_open = true;
                    }
                }
            }
        }
    }
    next
}

/// Rest height for a dropped object: on top of the highest object it overlaps,
/// else on the table.
fn settle(state: &WorldState, idx: usize) -> [f32; 3] {
    let pos = state.objects[idx].pos;
    let mut z = REST_Z;
    for (i, other) in state.objects.iter().enumerate() {
        if i == idx || other.held {
            continue;
        }
        let dx = f64::from(pos[0]) - f64::from(other.pos[0]);
        let dy = f64::from(pos[1]) - f64::from(other.pos[1]);
        if (dx * dx + dy * dy).sqrt() <= STACK_RADIUS {
            z = z.max(f64::from(other.pos[2]) + OBJECT_HEIGHT);
        }
    }
    [pos[0], pos[1], z as f32]
}

/// Success predicates; pure functions of state.
pub fn success(state: &WorldState, task: &TaskSpec) -> bool {
    match task.kind {
        TaskKind::Lift => {
            state.held == Some(task.arg0)
                && f64::from(state.objects[task.arg0 as usize].pos[2]) >= LIFT_Z
        }
        TaskKind::Place => {
            let obj = &state.objects[task.arg0 as usize];
            !obj.held
                && dist_xy(obj.pos, state.zones[task.arg1 as usize]) <= ZONE_RADIUS
                && f64::from(obj.pos[2]) < 0.1
        }
        TaskKind::Stack => {
            let top = &state.objects[task.arg0 as usize];
            let base = &state.objects[task.arg1 as usize];
            let dx = f64::from(top.pos[0]) - f64::from(base.pos[0]);
            let dy = f64::from(top.pos[1]) - f64::from(base.pos[1]);
            !top.held
                && (dx * dx + dy * dy).sqrt() <= STACK_RADIUS
                && (f64::from(top.pos[2]) - (f64::from(base.pos[2]) + OBJECT_HEIGHT)).abs()
                    <= STACK_Z_TOL
        }
        TaskKind::Push => {
            let obj = &state.objects[task.arg0 as usize];
            !obj.held
                && dist_xy(obj.pos, state.zones[task.arg1 as usize]) <= ZONE_RADIUS
                && f64::from(obj.pos[2]) < 0.1
        }
        TaskKind::OpenContainer => state.container.lid_open,
        TaskKind::PourMotion => {
            state.objects[task.arg0 as usize].poured_over == Some(task.arg1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn zero_action_changes_nothing() {
        let mut rng = Rng::stream(1, "env");
        let s = WorldState::reset(&mut rng);
        let s2 = step(&s, &Action::NOOP, &WorldConfig::default());
        assert_eq!(s, s2);
    }

    #[test]
    fn close_command_at_object_grasps_next_step() {
        let mut rng = Rng::stream(2, "env");
        let mut s = WorldState::reset(&mut rng);
        let obj = s.objects[1].pos;
        s.gripper_pos = [obj[0], obj[1], obj[2] + 0.01];
        let s2 = step(
            &s,
            &Action([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0]),
            &WorldConfig::default(),
        );
        assert_eq!(s2.held, Some(1));
        assert!(s2.objects[1].held);
    }

    #[test]
    fn held_object_displacement_tracks_gripper() {
        let mut rng = Rng::stream(3, "env");
        let mut s = WorldState::reset(&mut rng);
        let obj = s.objects[0].pos;
        s.gripper_pos = [obj[0], obj[1], obj[2]];
        let cfg = WorldConfig::default();
        let s = step(&s, &Action([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0]), &cfg);
        assert_eq!(s.held, Some(0));
        let before_g = s.gripper_pos;
        let before_o = s.objects[0].pos;
        let s2 = step(&s, &Action([0.6, -0.4, 0.8, 0.0, 0.0, 0.0, 0.0]), &cfg);
        for i in 0..3 {
            let dg = s2.gripper_pos[i] - before_g[i];
            let dobj = s2.objects[0].pos[i] - before_o[i];
            assert!((dg - dobj).abs() < 1e-6, "axis {i}: {dg} vs {dobj}");
        }
    }

    #[test]
    fn release_settles_object_on_support() {
        let mut rng = Rng::stream(4, "env");
        let mut s = WorldState::reset(&mut rng);
        // Hold object 0 directly above object 1, then open.
        let target = s.objects[1].pos;
        s.gripper_pos = [target[0], target[1], 0.3];
        s.held = Some(0);
        s.objects[0].held = true;
        s.hold_offset = [0.0, 0.0, -0.02];
        s.objects[0].pos = [target[0], target[1], 0.28];
        let s2 = step(
            &s,
            &Action([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
            &WorldConfig::default(),
        );
        assert_eq!(s2.held, None);
        let z = f64::from(s2.objects[0].pos[2]);
        assert!((z - (REST_Z + OBJECT_HEIGHT)).abs() < 1e-6, "settled at {z}");
    }

    #[test]
    fn fresh_world_fails_lift_predicate() {
        let mut rng = Rng::stream(5, "env");
        let s = WorldState::reset(&mut rng);
        let task = TaskSpec {
            kind: TaskKind::Lift,
            arg0: 0,
            arg1: 0,
        };
        assert!(!success(&s, &task));
    }

    #[test]
    fn angles_stay_wrapped() {
        let mut rng = Rng::stream(6, "env");
        let mut s = WorldState::reset(&mut rng);
        let cfg = WorldConfig::default();
        for _ in 0..200 {
            s = step(&s, &Action([0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0]), &cfg);
            for a in s.gripper_rot {
                let a = f64::from(a);
                assert!(a > -std::f64::consts::PI - 1e-9 && a <= std::f64::consts::PI + 1e-6);
            }
        }
    }
}
