//! highD-style track CSV: one row per (frame, vehicle).
//!
//! `width` is the vehicle's longitudinal extent and `height` its lateral
//! extent, following the highD convention. `laneId` is 1-based from the
//! rightmost lane, 0 when the centre is off the road. Lines starting with
//! `#` are comments.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::frenet::{OutOfRange, Polyline};
use super::{Kinematics, LaneGeometry, Scene, SceneError, Track, VehicleId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackRow {
    pub frame: usize,
    pub id: VehicleId,
    pub x: f64,
    pub y: f64,
    #[serde(rename = "xVelocity")]
    pub x_velocity: f64,
    #[serde(rename = "yVelocity")]
    pub y_velocity: f64,
    #[serde(rename = "xAcceleration")]
    pub x_acceleration: f64,
    #[serde(rename = "yAcceleration")]
    pub y_acceleration: f64,
    pub width: f64,
    pub height: f64,
    #[serde(rename = "laneId")]
    pub lane_id: usize,
}

/// Scene metadata stored next to a track CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingMeta {
    pub id: usize,
    pub fps: usize,
    pub duration: usize,
    pub geometry: LaneGeometry,
}

impl RecordingMeta {
    pub fn of(scene: &Scene) -> Self {
        Self { id: scene.id, fps: scene.fps, duration: scene.duration, geometry: scene.geometry.clone() }
    }
}

pub fn write_tracks_csv<W: Write>(mut w: W, scene: &Scene, comment: Option<&str>) -> Result<(), SceneError> {
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(w, "# {line}")?;
        }
    }
    let mut wr = csv::Writer::from_writer(w);
    let mut rows = Vec::new();
    for tr in &scene.tracks {
        for (i, k) in tr.states.iter().enumerate() {
            rows.push(TrackRow {
                frame: tr.first_frame + i,
                id: tr.id,
                x: k.x,
                y: k.y,
                x_velocity: k.vx,
                y_velocity: k.vy,
                x_acceleration: k.ax,
                y_acceleration: k.ay,
                width: tr.length,
                height: tr.width,
                lane_id: scene.geometry.lane_of(k.y).map_or(0, |l| l + 1),
            });
        }
    }
    rows.sort_by_key(|r| (r.frame, r.id));
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_track_rows<R: Read>(r: R) -> Result<Vec<TrackRow>, SceneError> {
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(r);
    let rows = rd.deserialize().collect::<Result<Vec<TrackRow>, _>>()?;
    Ok(rows)
}

/// Groups rows into tracks. When the geometry carries a centerline, positions
/// are converted to Frenet coordinates (velocities and accelerations are kept
/// as recorded). Each track must cover a contiguous frame range.
pub fn scene_from_rows(
    rows: &[TrackRow],
    meta: &RecordingMeta,
) -> Result<Scene, SceneError> {
    meta.geometry.validate()?;
    let mut by_id: BTreeMap<VehicleId, Vec<&TrackRow>> = BTreeMap::new();
    for r in rows {
        by_id.entry(r.id).or_default().push(r);
    }
    let line = meta.geometry.centerline.as_deref().map(Polyline::new).transpose()?;
    let mut tracks = Vec::with_capacity(by_id.len());
    let mut last_frame = 0;
    for (id, mut rs) in by_id {
        rs.sort_by_key(|r| r.frame);
        if rs.windows(2).any(|w| w[1].frame != w[0].frame + 1) {
            return Err(SceneError::Recording(format!("track {id} has missing or duplicate frames")));
        }
        let mut states: Vec<Kinematics> = rs
            .iter()
            .map(|r| Kinematics {
                x: r.x,
                y: r.y,
                vx: r.x_velocity,
                vy: r.y_velocity,
                ax: r.x_acceleration,
                ay: r.y_acceleration,
            })
            .collect();
        if let Some(line) = &line {
            let pts: Vec<_> = states.iter().map(|k| (k.x, k.y)).collect();
            for (k, (s, d)) in states.iter_mut().zip(line.to_frenet(&pts, OutOfRange::Clamp)?) {
                k.x = s;
                k.y = d;
            }
        }
        let first = rs[0];
        if !(first.width > 0.0 && first.height > 0.0) {
            return Err(SceneError::Recording(format!("track {id} has non-positive dimensions")));
        }
        last_frame = last_frame.max(rs.last().unwrap().frame);
        tracks.push(Track { id, length: first.width, width: first.height, first_frame: first.frame, states });
    }
    Ok(Scene {
        id: meta.id,
        fps: meta.fps,
        geometry: meta.geometry.clone(),
        tracks,
        duration: meta.duration.max(last_frame + 1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let scene = Scene {
            id: 4,
            fps: 5,
            geometry: LaneGeometry::straight(2, 3.75).unwrap(),
            tracks: vec![
                Track {
                    id: 2,
                    length: 4.6,
                    width: 1.9,
                    first_frame: 3,
                    states: vec![
                        Kinematics { x: 1.0, y: 1.875, vx: 25.0, vy: 0.0, ax: 0.1, ay: 0.0 },
                        Kinematics { x: 6.0, y: 1.9, vx: 25.02, vy: 0.125, ax: 0.1, ay: 0.3 },
                    ],
                },
                Track {
                    id: 7,
                    length: 5.0,
                    width: 2.0,
                    first_frame: 0,
                    states: vec![Kinematics { x: 50.0, y: 5.6, vx: 20.0, ..Default::default() }; 4],
                },
            ],
            duration: 5,
        };
        let mut buf = Vec::new();
        write_tracks_csv(&mut buf, &scene, Some("run_config: {}")).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# run_config"));
        assert!(text.contains("frame,id,x,y,xVelocity,yVelocity,xAcceleration,yAcceleration,width,height,laneId"));
        let rows = read_track_rows(&buf[..]).unwrap();
        let back = scene_from_rows(&rows, &RecordingMeta::of(&scene)).unwrap();
        let mut expect = scene.clone();
        expect.tracks.sort_by_key(|t| t.id);
        assert_eq!(back, expect);
    }

    #[test]
    fn gaps_rejected() {
        let row = |frame| TrackRow {
            frame,
            id: 1,
            x: 0.0,
            y: 1.0,
            x_velocity: 0.0,
            y_velocity: 0.0,
            x_acceleration: 0.0,
            y_acceleration: 0.0,
            width: 4.0,
            height: 2.0,
            lane_id: 1,
        };
        let meta = RecordingMeta { id: 0, fps: 5, duration: 10, geometry: LaneGeometry::straight(1, 3.5).unwrap() };
        assert!(scene_from_rows(&[row(0), row(2)], &meta).is_err());
    }
}
