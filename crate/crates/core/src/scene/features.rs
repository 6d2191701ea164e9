//! Surrounding-vehicle selection and the per-step interaction feature schema.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Scene, SceneError, VehicleId, VehicleState};

/// Number of features per observed step.
pub const FEATURE_COUNT: usize = 18;

/// Distance written for an absent surrounding vehicle (m).
pub const ABSENT_DISTANCE: f64 = 200.0;

/// Column names, in order.
pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "tv_lat_vel",
    "tv_lat_acc",
    "tv_long_vel",
    "tv_long_acc",
    "tv_lane_offset",
    "lane_left_exists",
    "lane_right_exists",
    "tv_lane_index",
    "preceding_dx",
    "preceding_dv",
    "following_dx",
    "following_dv",
    "left_dx",
    "left_dv",
    "right_dx",
    "right_dv",
    "preceding_exists",
    "following_exists",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SvRole {
    Preceding,
    Following,
    /// Rank (0 = nearest) among vehicles in the left adjacent lane.
    Left(u8),
    Right(u8),
}

/// Up to eight neighbours of a target vehicle; `None` marks an absent slot.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SvSlots {
    pub preceding: Option<VehicleId>,
    pub following: Option<VehicleId>,
    pub left: [Option<VehicleId>; 3],
    pub right: [Option<VehicleId>; 3],
}

impl SvSlots {
    pub fn present(&self) -> Vec<(SvRole, VehicleId)> {
        let mut out = Vec::new();
        if let Some(id) = self.preceding {
            out.push((SvRole::Preceding, id));
        }
        if let Some(id) = self.following {
            out.push((SvRole::Following, id));
        }
        for (rank, id) in self.left.iter().enumerate() {
            if let Some(id) = id {
                out.push((SvRole::Left(rank as u8), *id));
            }
        }
        for (rank, id) in self.right.iter().enumerate() {
            if let Some(id) = id {
                out.push((SvRole::Right(rank as u8), *id));
            }
        }
        out
    }
}

fn nearest_three(tv: &VehicleState, cands: &[VehicleState], lane: usize, scene: &Scene) -> [Option<VehicleId>; 3] {
    let mut v: Vec<(f64, VehicleId)> = cands
        .iter()
        .filter(|s| scene.geometry.lane_of(s.kin.y) == Some(lane))
        .map(|s| ((s.kin.x - tv.kin.x).abs(), s.id))
        .collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out = [None; 3];
    for (slot, (_, id)) in out.iter_mut().zip(v) {
        *slot = Some(id);
    }
    out
}

/// Preceding/following vehicle in the TV's lane plus the three nearest (by
/// longitudinal distance) in each adjacent lane. Vehicles level with the TV
/// count as preceding; distance ties go to the lower id.
pub fn select_svs(scene: &Scene, tv_id: VehicleId, t: usize) -> Result<SvSlots, SceneError> {
    let tv = scene.state(tv_id, t).ok_or(SceneError::MissingVehicle(tv_id))?;
    let others: Vec<VehicleState> = scene.states_at(t).into_iter().filter(|s| s.id != tv_id).collect();
    let g = &scene.geometry;
    let lane = g.nearest_lane(tv.kin.y);
    let mut slots = SvSlots::default();

    let mut best_ahead: Option<(f64, VehicleId)> = None;
    let mut best_behind: Option<(f64, VehicleId)> = None;
    for s in others.iter().filter(|s| g.lane_of(s.kin.y) == Some(lane)) {
        let dx = s.kin.x - tv.kin.x;
        let key = (dx.abs(), s.id);
        let slot = if dx >= 0.0 { &mut best_ahead } else { &mut best_behind };
        if slot.is_none_or(|b| key.0 < b.0 || (key.0 == b.0 && key.1 < b.1)) {
            *slot = Some(key);
        }
    }
    slots.preceding = best_ahead.map(|b| b.1);
    slots.following = best_behind.map(|b| b.1);
    if lane + 1 < g.lane_count {
        slots.left = nearest_three(&tv, &others, lane + 1, scene);
    }
    if lane > 0 {
        slots.right = nearest_three(&tv, &others, lane - 1, scene);
    }
    Ok(slots)
}

fn relative(scene: &Scene, tv: &VehicleState, id: Option<VehicleId>, t: usize) -> (f64, f64) {
    match id.and_then(|id| scene.state(id, t)) {
        Some(s) => (s.kin.x - tv.kin.x, s.kin.vx - tv.kin.vx),
        None => (ABSENT_DISTANCE, 0.0),
    }
}

/// Raw (unstandardized) feature row of the TV at time `t`.
pub fn feature_row(scene: &Scene, tv_id: VehicleId, t: usize) -> Result<[f64; FEATURE_COUNT], SceneError> {
    let tv = scene.state(tv_id, t).ok_or(SceneError::MissingVehicle(tv_id))?;
    let g = &scene.geometry;
    let lane = g.nearest_lane(tv.kin.y);
    let slots = select_svs(scene, tv_id, t)?;
    let (p_dx, p_dv) = relative(scene, &tv, slots.preceding, t);
    let (f_dx, f_dv) = relative(scene, &tv, slots.following, t);
    let (l_dx, l_dv) = relative(scene, &tv, slots.left[0], t);
    let (r_dx, r_dv) = relative(scene, &tv, slots.right[0], t);
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    Ok([
        tv.kin.vy,
        tv.kin.ay,
        tv.kin.vx,
        tv.kin.ax,
        tv.kin.y - g.lane_center(lane),
        flag(lane + 1 < g.lane_count),
        flag(lane > 0),
        lane as f64 / (g.lane_count.max(2) - 1) as f64,
        p_dx,
        p_dv,
        f_dx,
        f_dv,
        l_dx,
        l_dv,
        r_dx,
        r_dv,
        flag(slots.preceding.is_some()),
        flag(slots.following.is_some()),
    ])
}

/// `t_obs x 18` feature matrix for the window ending at `t_end` (inclusive).
pub fn extract_features(
    scene: &Scene,
    tv_id: VehicleId,
    t_end: usize,
    t_obs: usize,
) -> Result<Array2<f64>, SceneError> {
    let track = scene.track(tv_id).ok_or(SceneError::MissingVehicle(tv_id))?;
    let available = if t_end < track.first_frame || t_end > track.last_frame() {
        0
    } else {
        t_end - track.first_frame + 1
    };
    if t_obs == 0 || available < t_obs {
        return Err(SceneError::InsufficientHistory { id: tv_id, t_end, needed: t_obs, available });
    }
    let mut out = Array2::zeros((t_obs, FEATURE_COUNT));
    for (r, t) in (t_end + 1 - t_obs..=t_end).enumerate() {
        let row = feature_row(scene, tv_id, t)?;
        for (c, v) in row.iter().enumerate() {
            out[[r, c]] = *v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Kinematics, LaneGeometry, Track};

    fn scene_with(vehicles: &[(VehicleId, f64, f64, f64)]) -> Scene {
        let tracks = vehicles
            .iter()
            .map(|&(id, x, y, vx)| Track {
                id,
                length: 4.5,
                width: 1.9,
                first_frame: 0,
                states: (0..20)
                    .map(|t| Kinematics { x: x + vx * t as f64 * 0.2, y, vx, ..Default::default() })
                    .collect(),
            })
            .collect();
        Scene { id: 0, fps: 5, geometry: LaneGeometry::straight(3, 3.75).unwrap(), tracks, duration: 20 }
    }

    #[test]
    fn lone_vehicle_has_no_neighbours() {
        let s = scene_with(&[(1, 0.0, 5.6, 25.0)]);
        let slots = select_svs(&s, 1, 0).unwrap();
        assert_eq!(slots, SvSlots::default());
        assert!(slots.present().is_empty());
    }

    #[test]
    fn single_vehicle_ahead_is_preceding() {
        let s = scene_with(&[(1, 0.0, 5.6, 25.0), (2, 30.0, 5.6, 25.0)]);
        let slots = select_svs(&s, 1, 0).unwrap();
        assert_eq!(slots.present(), vec![(SvRole::Preceding, 2)]);
    }

    #[test]
    fn stationary_tv_without_svs() {
        let s = scene_with(&[(1, 0.0, 1.875, 0.0)]);
        let f = extract_features(&s, 1, 9, 10).unwrap();
        for r in 0..10 {
            for c in 0..4 {
                assert_eq!(f[[r, c]], 0.0);
            }
            for c in [8, 10, 12, 14] {
                assert_eq!(f[[r, c]], ABSENT_DISTANCE);
            }
            for c in [9, 11, 13, 15, 16, 17] {
                assert_eq!(f[[r, c]], 0.0);
            }
        }
    }

    #[test]
    fn constant_speed_column() {
        let s = scene_with(&[(1, 0.0, 1.875, 20.0)]);
        let f = extract_features(&s, 1, 14, 15).unwrap();
        assert!(f.column(2).iter().all(|&v| v == 20.0));
    }

    #[test]
    fn short_history_rejected() {
        let s = scene_with(&[(1, 0.0, 1.875, 20.0)]);
        assert!(matches!(
            extract_features(&s, 1, 5, 15),
            Err(SceneError::InsufficientHistory { available: 6, .. })
        ));
    }
}
