//! Desk-scale synthetic highway traffic.
//!
//! Every vehicle designated for a lane change cruises at constant speed
//! towards a slower blocker placed ahead of it in the same lane, and starts
//! a quintic lateral manoeuvre as soon as the centre gap to its leader drops
//! to `trigger_gap`. From a middle lane the direction is drawn at random. The trigger is therefore visible in the interaction
//! features (gap and closing speed to the preceding vehicle). All other
//! vehicles follow their leader with an IDM-style longitudinal law and
//! never leave their lane.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Kinematics, LaneGeometry, Scene, SceneError, Track, VehicleId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub lanes: usize,
    pub lane_width: f64,
    pub fps: usize,
    pub duration_s: f64,
    pub n_vehicles: usize,
    pub lc_rate: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub lc_duration_min: f64,
    pub lc_duration_max: f64,
    /// Centre-to-centre gap to the leader that triggers a lane change (m).
    pub trigger_gap: f64,
    pub slowdown_min: f64,
    pub slowdown_max: f64,
    /// Earliest trigger time (s) of a designated lane change.
    pub lc_start_min_s: f64,
    /// Longitudinal extent over which vehicles are seeded (m).
    pub road_span: f64,
    /// Minimum free space kept around each seeded vehicle (m).
    pub min_spacing: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            lanes: 2,
            lane_width: 3.75,
            fps: 5,
            duration_s: 30.0,
            n_vehicles: 8,
            lc_rate: 0.8,
            speed_min: 22.0,
            speed_max: 32.0,
            lc_duration_min: 3.0,
            lc_duration_max: 5.0,
            trigger_gap: 35.0,
            slowdown_min: 4.0,
            slowdown_max: 8.0,
            lc_start_min_s: 4.0,
            road_span: 1500.0,
            min_spacing: 30.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::Config(m.to_string()));
        if self.lanes == 0 || !(self.lane_width > 0.0) {
            return bad("lanes and lane_width must be positive");
        }
        if self.fps == 0 || !(self.duration_s > 0.0) {
            return bad("fps and duration_s must be positive");
        }
        if !(0.0..=1.0).contains(&self.lc_rate) {
            return bad("lc_rate must lie in [0, 1]");
        }
        if !(self.speed_min > 0.0 && self.speed_min <= self.speed_max) {
            return bad("speed range must be positive and ordered");
        }
        if !(self.lc_duration_min > 0.0 && self.lc_duration_min <= self.lc_duration_max) {
            return bad("lane-change duration range must be positive and ordered");
        }
        if !(self.slowdown_min > 0.0 && self.slowdown_min <= self.slowdown_max) {
            return bad("slowdown range must be positive and ordered");
        }
        if self.slowdown_max >= self.speed_min {
            return bad("blockers would stand still: slowdown_max >= speed_min");
        }
        if self.lanes >= 2 && self.lc_rate > 0.0 && self.latest_trigger_s() < self.lc_start_min_s {
            return bad("duration too short for a lane change after lc_start_min_s");
        }
        Ok(())
    }

    fn latest_trigger_s(&self) -> f64 {
        self.duration_s - self.lc_duration_max - 1.0
    }

    pub fn steps(&self) -> usize {
        (self.duration_s * self.fps as f64).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    /// Follows its leader, never changes lanes.
    Follower,
    /// Performs exactly one lane change.
    LaneChanger,
    /// Slow vehicle seeded ahead of a lane changer.
    Blocker,
}

#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub scene: Scene,
    pub roles: Vec<(VehicleId, Role)>,
}

impl GeneratedScene {
    pub fn role(&self, id: VehicleId) -> Option<Role> {
        self.roles.iter().find(|(i, _)| *i == id).map(|(_, r)| *r)
    }
}

/// Quintic rest-to-rest profile `s(u) = 10u^3 - 15u^4 + 6u^5` and its first
/// two derivatives with respect to `u`.
pub fn quintic(u: f64) -> (f64, f64, f64) {
    let u = u.clamp(0.0, 1.0);
    let (u2, u3) = (u * u, u * u * u);
    (
        10.0 * u3 - 15.0 * u3 * u + 6.0 * u3 * u2,
        30.0 * u2 - 60.0 * u3 + 30.0 * u3 * u,
        60.0 * u - 180.0 * u2 + 120.0 * u3,
    )
}

/// Lateral offset, velocity and acceleration `tau` seconds into a lane change
/// of width `width` lasting `duration` seconds.
pub fn lane_change_profile(width: f64, duration: f64, tau: f64) -> (f64, f64, f64) {
    if tau <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if tau >= duration {
        return (width, 0.0, 0.0);
    }
    let (s, ds, dds) = quintic(tau / duration);
    (width * s, width * ds / duration, width * dds / (duration * duration))
}

struct Idm {
    a_max: f64,
    b: f64,
    s0: f64,
    headway: f64,
}

const IDM: Idm = Idm { a_max: 1.0, b: 1.5, s0: 2.0, headway: 1.2 };

impl Idm {
    fn accel(&self, v: f64, v0: f64, leader: Option<(f64, f64)>) -> f64 {
        let free = 1.0 - (v / v0).powi(4);
        match leader {
            None => self.a_max * free,
            Some((gap, dv)) => {
                let s_star = self.s0 + (v * self.headway + v * dv / (2.0 * (self.a_max * self.b).sqrt())).max(0.0);
                let gap = gap.max(0.1);
                self.a_max * (free - (s_star / gap).powi(2))
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Motion {
    Cruise,
    Changing { start: usize, y0: f64, width: f64, duration: f64 },
    Follow,
}

struct SimVehicle {
    id: VehicleId,
    role: Role,
    length: f64,
    width: f64,
    desired_speed: f64,
    lc_duration: f64,
    /// Direction taken when both adjacent lanes exist.
    prefer_left: bool,
    motion: Motion,
}

/// Generates one scene; identical `(cfg, seed)` pairs give bit-identical scenes.
pub fn generate_scene(cfg: &GenConfig, seed: u64) -> Result<GeneratedScene, SceneError> {
    cfg.validate()?;
    let geometry = LaneGeometry::straight(cfg.lanes, cfg.lane_width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = cfg.steps();
    let dt = 1.0 / cfg.fps as f64;

    // Occupied longitudinal intervals per lane at t = 0.
    let mut occupied: Vec<Vec<(f64, f64)>> = vec![Vec::new(); cfg.lanes];
    let mut vehicles = Vec::new();
    let mut initial = Vec::new();
    let free = |occ: &Vec<(f64, f64)>, lo: f64, hi: f64| occ.iter().all(|&(a, b)| hi <= a || lo >= b);
    let half = cfg.min_spacing * 0.5;
    let mut next_id: VehicleId = 1;

    for _ in 0..cfg.n_vehicles {
        let designated = cfg.lanes >= 2 && rng.random::<f64>() < cfg.lc_rate;
        let length = rng.random_range(4.2..=5.2);
        let width = rng.random_range(1.8..=2.0);
        let speed = rng.random_range(cfg.speed_min..=cfg.speed_max);
        let lc_duration = rng.random_range(cfg.lc_duration_min..=cfg.lc_duration_max);
        let trigger_s = if designated {
            rng.random_range(cfg.lc_start_min_s..=cfg.latest_trigger_s())
        } else {
            0.0
        };
        let slowdown = rng.random_range(cfg.slowdown_min..=cfg.slowdown_max);
        let prefer_left = rng.random::<bool>();
        let b_length = rng.random_range(4.2..=5.2);
        let b_width = rng.random_range(1.8..=2.0);

        let mut placed = None;
        for _ in 0..1000 {
            let lane = rng.random_range(0..cfg.lanes);
            let x = rng.random_range(0.0..=cfg.road_span);
            let (lo, hi) = if designated {
                (x - half, x + cfg.trigger_gap + slowdown * trigger_s + half)
            } else {
                (x - half, x + half)
            };
            if free(&occupied[lane], lo, hi) {
                occupied[lane].push((lo, hi));
                placed = Some((lane, x));
                break;
            }
        }
        let Some((lane, x)) = placed else {
            return Err(SceneError::Infeasible(format!(
                "could not place {} vehicles with {} m spacing on {} lanes over {} m",
                cfg.n_vehicles, cfg.min_spacing, cfg.lanes, cfg.road_span
            )));
        };
        let y = geometry.lane_center(lane);
        vehicles.push(SimVehicle {
            id: next_id,
            role: if designated { Role::LaneChanger } else { Role::Follower },
            length,
            width,
            desired_speed: speed,
            lc_duration,
            prefer_left,
            motion: if designated { Motion::Cruise } else { Motion::Follow },
        });
        initial.push(Kinematics { x, y, vx: speed, ..Default::default() });
        next_id += 1;
        if designated {
            let bspeed = speed - slowdown;
            vehicles.push(SimVehicle {
                id: next_id,
                role: Role::Blocker,
                length: b_length,
                width: b_width,
                desired_speed: bspeed,
                lc_duration: 0.0,
                prefer_left: false,
                motion: Motion::Follow,
            });
            initial.push(Kinematics {
                x: x + cfg.trigger_gap + slowdown * trigger_s,
                y,
                vx: bspeed,
                ..Default::default()
            });
            next_id += 1;
        }
    }

    let n = vehicles.len();
    let lengths: Vec<f64> = vehicles.iter().map(|v| v.length).collect();
    let mut history: Vec<Vec<Kinematics>> = initial.iter().map(|k| vec![*k]).collect();
    for step in 0..steps.saturating_sub(1) {
        let cur: Vec<Kinematics> = history.iter().map(|h| h[step]).collect();
        let lanes: Vec<Option<usize>> = cur.iter().map(|k| geometry.lane_of(k.y)).collect();
        let leader = |i: usize| -> Option<(usize, f64)> {
            let lane = lanes[i]?;
            (0..n)
                .filter(|&j| j != i && lanes[j] == Some(lane) && cur[j].x > cur[i].x)
                .map(|j| (j, cur[j].x - cur[i].x))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        };
        // Triggers are decided on the state at `step` for every vehicle before any update.
        for i in 0..n {
            if let Motion::Cruise = vehicles[i].motion {
                if let Some((_, gap)) = leader(i) {
                    if gap <= cfg.trigger_gap {
                        let lane = lanes[i].unwrap_or(0);
                        let left = lane + 1 < cfg.lanes && (lane == 0 || vehicles[i].prefer_left);
                        let target = if left { lane + 1 } else { lane - 1 };
                        vehicles[i].motion = Motion::Changing {
                            start: step,
                            y0: cur[i].y,
                            width: geometry.lane_center(target) - geometry.lane_center(lane),
                            duration: vehicles[i].lc_duration,
                        };
                    }
                }
            }
        }
        for i in 0..n {
            let k = cur[i];
            let ax = match vehicles[i].motion {
                Motion::Cruise | Motion::Changing { .. } => 0.0,
                Motion::Follow => {
                    let lead = leader(i).map(|(j, gap)| {
                        (gap - 0.5 * (lengths[i] + lengths[j]), k.vx - cur[j].vx)
                    });
                    IDM.accel(k.vx, vehicles[i].desired_speed, lead)
                }
            };
            let v = &mut vehicles[i];
            let vx = (k.vx + ax * dt).max(0.0);
            let x = k.x + 0.5 * (k.vx + vx) * dt;
            let (y, vy, ay) = match v.motion {
                Motion::Changing { start, y0, width, duration } => {
                    let tau = (step + 1 - start) as f64 * dt;
                    let (dy, vy, ay) = lane_change_profile(width, duration, tau);
                    if tau >= duration {
                        v.motion = Motion::Follow;
                    }
                    (y0 + dy, vy, ay)
                }
                _ => (k.y, 0.0, 0.0),
            };
            history[i][step].ax = ax;
            history[i].push(Kinematics { x, y, vx, vy, ax: 0.0, ay });
        }
    }

    let tracks = vehicles
        .iter()
        .zip(history)
        .map(|(v, states)| Track { id: v.id, length: v.length, width: v.width, first_frame: 0, states })
        .collect();
    let roles = vehicles.iter().map(|v| (v.id, v.role)).collect();
    Ok(GeneratedScene {
        scene: Scene { id: 0, fps: cfg.fps, geometry, tracks, duration: steps },
        roles,
    })
}
