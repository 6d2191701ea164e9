//! Highway scenes: lane geometry, vehicle tracks, synthetic generation,
//! interaction features, Frenet conversion, datasets and highD-style CSV.

pub mod csv_io;
pub mod dataset;
pub mod features;
pub mod frenet;
pub mod generate;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::CodecError;

pub type VehicleId = u32;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid lane geometry: {0}")]
    Geometry(String),
    #[error("infeasible generator config: {0}")]
    Infeasible(String),
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("vehicle {id} has {available} observed steps before t={t_end}, need {needed}")]
    InsufficientHistory { id: VehicleId, t_end: usize, needed: usize, available: usize },
    #[error("vehicle {0} is not present at the requested time")]
    MissingVehicle(VehicleId),
    #[error("point {index} projects beyond the centerline extent")]
    OutOfRange { index: usize },
    #[error("centerline needs at least two distinct points")]
    DegenerateCenterline,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed recording: {0}")]
    Recording(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Lanes on a straight road (or along a reference line). Lateral positions
/// increase to the left; lane 0 is the rightmost lane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneGeometry {
    pub lane_count: usize,
    pub lane_width: f64,
    pub marking_lats: Vec<f64>,
    pub road_bounds: (f64, f64),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centerline: Option<Vec<(f64, f64)>>,
}

impl LaneGeometry {
    pub fn straight(lane_count: usize, lane_width: f64) -> Result<Self, SceneError> {
        let g = Self {
            lane_count,
            lane_width,
            marking_lats: (0..=lane_count).map(|i| i as f64 * lane_width).collect(),
            road_bounds: (0.0, lane_count as f64 * lane_width),
            centerline: None,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.lane_count == 0 || !(self.lane_width > 0.0) {
            return Err(SceneError::Geometry("need at least one lane of positive width".into()));
        }
        if self.marking_lats.len() != self.lane_count + 1 {
            return Err(SceneError::Geometry(format!(
                "{} markings for {} lanes",
                self.marking_lats.len(),
                self.lane_count
            )));
        }
        if self.marking_lats.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SceneError::Geometry("markings must be strictly increasing".into()));
        }
        let (lo, hi) = self.road_bounds;
        if lo > self.marking_lats[0] || hi < self.marking_lats[self.lane_count] {
            return Err(SceneError::Geometry("road bounds must bracket all markings".into()));
        }
        Ok(())
    }

    /// Lane containing `lat`, or `None` outside the outermost markings.
    pub fn lane_of(&self, lat: f64) -> Option<usize> {
        let region = crate::codec::marking_region(lat, &self.marking_lats);
        if region == 0 || region > self.lane_count {
            None
        } else {
            Some(region - 1)
        }
    }

    /// Like [`lane_of`](Self::lane_of) but snaps off-road positions to the nearest lane.
    pub fn nearest_lane(&self, lat: f64) -> usize {
        match self.lane_of(lat) {
            Some(l) => l,
            None if lat < self.marking_lats[0] => 0,
            None => self.lane_count - 1,
        }
    }

    pub fn lane_center(&self, lane: usize) -> f64 {
        0.5 * (self.marking_lats[lane] + self.marking_lats[lane + 1])
    }
}

/// Kinematic state along (long, lat) axes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Kinematics {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub ax: f64,
    pub ay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: VehicleId,
    pub kin: Kinematics,
    pub length: f64,
    pub width: f64,
}

impl VehicleState {
    pub fn aabb(&self) -> Aabb {
        Aabb::centered(self.kin.x, self.kin.y, self.length, self.width)
    }
}

/// Axis-aligned box in the road frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Aabb {
    pub fn centered(x: f64, y: f64, length: f64, width: f64) -> Self {
        Self {
            min: [x - 0.5 * length, y - 0.5 * width],
            max: [x + 0.5 * length, y + 0.5 * width],
        }
    }

    /// Strict overlap; boxes that only touch do not intersect.
    pub fn intersects(&self, other: &Aabb) -> bool {
        self.min[0] < other.max[0]
            && other.min[0] < self.max[0]
            && self.min[1] < other.max[1]
            && other.min[1] < self.max[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: VehicleId,
    pub length: f64,
    pub width: f64,
    pub first_frame: usize,
    pub states: Vec<Kinematics>,
}

impl Track {
    pub fn last_frame(&self) -> usize {
        self.first_frame + self.states.len() - 1
    }

    pub fn at(&self, t: usize) -> Option<&Kinematics> {
        t.checked_sub(self.first_frame).and_then(|i| self.states.get(i))
    }

    pub fn positions(&self) -> Vec<(f64, f64)> {
        self.states.iter().map(|k| (k.x, k.y)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: usize,
    pub fps: usize,
    pub geometry: LaneGeometry,
    pub tracks: Vec<Track>,
    pub duration: usize,
}

impl Scene {
    pub fn track(&self, id: VehicleId) -> Option<&Track> {
        self.tracks.iter().find(|t| t.id == id)
    }

    pub fn state(&self, id: VehicleId, t: usize) -> Option<VehicleState> {
        let tr = self.track(id)?;
        tr.at(t).map(|k| VehicleState { id, kin: *k, length: tr.length, width: tr.width })
    }

    /// All vehicles present at `t`, in track order.
    pub fn states_at(&self, t: usize) -> Vec<VehicleState> {
        self.tracks
            .iter()
            .filter_map(|tr| {
                tr.at(t).map(|k| VehicleState { id: tr.id, kin: *k, length: tr.length, width: tr.width })
            })
            .collect()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.fps as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_geometry_layout() {
        let g = LaneGeometry::straight(3, 3.5).unwrap();
        assert_eq!(g.marking_lats, vec![0.0, 3.5, 7.0, 10.5]);
        assert_eq!(g.lane_of(1.0), Some(0));
        assert_eq!(g.lane_of(8.0), Some(2));
        assert_eq!(g.lane_of(-0.1), None);
        assert_eq!(g.nearest_lane(11.0), 2);
        assert_eq!(g.lane_center(1), 5.25);
    }

    #[test]
    fn geometry_validation() {
        let mut g = LaneGeometry::straight(2, 3.5).unwrap();
        g.road_bounds = (0.5, 7.0);
        assert!(g.validate().is_err());
        assert!(LaneGeometry::straight(0, 3.5).is_err());
    }

    #[test]
    fn touching_boxes_do_not_intersect() {
        let a = Aabb::centered(0.0, 0.0, 4.0, 2.0);
        assert!(!a.intersects(&Aabb::centered(4.0, 0.0, 4.0, 2.0)));
        assert!(a.intersects(&Aabb::centered(3.9, 1.0, 4.0, 2.0)));
    }
}
