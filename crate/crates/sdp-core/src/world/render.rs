//! Top-down observation raster and proprioception vector.
//!
//! Channel 0 carries objects, channel 1 the gripper (height in the center
//! intensity, aperture in the finger spread, wrist angles in a heading tick),
//! channel 2 zones and the container. Values are in [0, 1]; overlaps keep the
//! brighter value so drawing order never matters.

use super::WorldState;

pub const RASTER_CHANNELS: usize = 3;
pub const PROPRIO_DIM: usize = 8;

fn to_px(v: f32, size: usize) -> i64 {
    let t = (f64::from(v) + 1.0) / 2.0 * (size as f64 - 1.0);
    t.round().clamp(0.0, size as f64 - 1.0) as i64
}

fn stamp(raster: &mut [f32], size: usize, x: i64, y: i64, channel: usize, value: f32) {
    if x < 0 || y < 0 || x >= size as i64 || y >= size as i64 {
        return;
    }
    let idx = ((y as usize * size) + x as usize) * RASTER_CHANNELS + channel;
    if raster[idx] < value {
        raster[idx] = value;
    }
}

fn stamp_block(raster: &mut [f32], size: usize, x: i64, y: i64, channel: usize, value: f32) {
    for dy in 0..2 {
        for dx in 0..2 {
            stamp(raster, size, x + dx, y + dy, channel, value);
        }
    }
}

/// Render the state into an `size x size x 3` row-major (y, x, channel) raster.
pub fn render_raster(state: &WorldState, size: usize) -> Vec<f32> {
    let mut raster = vec![0.0f32; size * size * RASTER_CHANNELS];

    // Zones and container on channel 2.
    for (i, zone) in state.zones.iter().enumerate() {
        let (x, y) = (to_px(zone[0], size), to_px(zone[1], size));
        stamp_block(&mut raster, size, x, y, 2, 0.4 + 0.2 * i as f32);
    }
    let c = &state.container;
    let (cx, cy) = (to_px(c.pos[0], size), to_px(c.pos[1], size));
    let body = if c.lid_open { 0.5 } else { 0.95 };
    for dy in -1..=1 {
        for dx in -1..=1 {
            stamp(&mut raster, size, cx + dx, cy + dy, 2, body);
        }
    }
    let handle = state.handle_pos();
    stamp(
        &mut raster,
        size,
        to_px(handle[0], size),
        to_px(handle[1], size),
        2,
        0.75,
    );

    // Objects on channel 0, brightness by identity.
    for (i, obj) in state.objects.iter().enumerate() {
        let (x, y) = (to_px(obj.pos[0], size), to_px(obj.pos[1], size));
        let value = (i as f32 + 1.0) / state.objects.len() as f32;
        stamp_block(&mut raster, size, x, y, 0, value);
    }

    // Gripper on channel 1.
    let g = state.gripper_pos;
    let (gx, gy) = (to_px(g[0], size), to_px(g[1], size));
    let height = 1.0 - (f64::from(g[2]) / 0.6).clamp(0.0, 1.0) as f32;
    stamp(&mut raster, size, gx, gy, 1, 0.3 + 0.7 * height);
    // Finger spread encodes the aperture.
    let spread = 1 + (f64::from(state.aperture) * 2.0).round() as i64;
    stamp(&mut raster, size, gx - spread, gy, 1, 0.5);
    stamp(&mut raster, size, gx + spread, gy, 1, 0.5);
    // Heading tick encodes yaw; its brightness shifts with roll and pitch.
    let yaw = f64::from(state.gripper_rot[2]);
    let tick = 0.5
        + 0.2 * f64::from(state.gripper_rot[0]).clamp(-1.0, 1.0) as f32
        + 0.1 * f64::from(state.gripper_rot[1]).clamp(-1.0, 1.0) as f32;
    stamp(
        &mut raster,
        size,
        gx + (yaw.cos() * 2.0).round() as i64,
        gy + (yaw.sin() * 2.0).round() as i64,
        1,
        tick.clamp(0.1, 0.9),
    );

    raster
}

/// Gripper pose, aperture, and a held flag: 8 scalars.
pub fn proprio(state: &WorldState) -> [f32; PROPRIO_DIM] {
    [
        state.gripper_pos[0],
        state.gripper_pos[1],
        state.gripper_pos[2],
        state.gripper_rot[0],
        state.gripper_rot[1],
        state.gripper_rot[2],
        state.aperture,
        if state.held.is_some() { 1.0 } else { 0.0 },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::world::WorldState;

    #[test]
    fn raster_is_deterministic_and_bounded() {
        let mut rng = Rng::stream(21, "env");
        let state = WorldState::reset(&mut rng);
        let a = render_raster(&state, 24);
        let b = render_raster(&state, 24);
        assert_eq!(a, b);
        assert_eq!(a.len(), 24 * 24 * 3);
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn gripper_height_changes_the_raster() {
        let mut rng = Rng::stream(22, "env");
        let mut state = WorldState::reset(&mut rng);
        state.gripper_pos = [0.0, 0.0, 0.1];
        let low = render_raster(&state, 24);
        state.gripper_pos = [0.0, 0.0, 0.5];
        let high = render_raster(&state, 24);
        assert_ne!(low, high);
    }
}
