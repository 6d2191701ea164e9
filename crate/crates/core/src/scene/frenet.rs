//! Cartesian <-> Frenet conversion against a polyline reference line.

use super::SceneError;

/// What to do with points whose foot point falls before the first or after
/// the last vertex of the reference line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutOfRange {
    /// Clamp `s` to the line extent; `d` is the offset from the extended end segment.
    #[default]
    Clamp,
    Reject,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    points: Vec<(f64, f64)>,
    /// Arc length at each vertex.
    stations: Vec<f64>,
}

struct Projection {
    segment: usize,
    /// Segment parameter, unclamped.
    u: f64,
    dist2: f64,
}

impl Polyline {
    /// Builds a reference line, dropping consecutive duplicate vertices.
    pub fn new(points: &[(f64, f64)]) -> Result<Self, SceneError> {
        let mut pts: Vec<(f64, f64)> = Vec::with_capacity(points.len());
        for &p in points {
            if pts.last() != Some(&p) {
                pts.push(p);
            }
        }
        if pts.len() < 2 {
            return Err(SceneError::DegenerateCenterline);
        }
        let mut stations = vec![0.0];
        for w in pts.windows(2) {
            let len = (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
            stations.push(stations.last().unwrap() + len);
        }
        Ok(Self { points: pts, stations })
    }

    pub fn length(&self) -> f64 {
        *self.stations.last().unwrap()
    }

    pub fn segments(&self) -> usize {
        self.points.len() - 1
    }

    fn segment(&self, i: usize) -> ((f64, f64), (f64, f64), f64) {
        let a = self.points[i];
        let b = self.points[i + 1];
        (a, (b.0 - a.0, b.1 - a.1), self.stations[i + 1] - self.stations[i])
    }

    fn project_on(&self, i: usize, p: (f64, f64)) -> Projection {
        let (a, d, len) = self.segment(i);
        let u = ((p.0 - a.0) * d.0 + (p.1 - a.1) * d.1) / (len * len);
        let uc = u.clamp(0.0, 1.0);
        let f = (a.0 + uc * d.0, a.1 + uc * d.1);
        Projection { segment: i, u, dist2: (p.0 - f.0).powi(2) + (p.1 - f.1).powi(2) }
    }

    /// Converts points to `(s, d)`; `d` is positive to the left of the
    /// direction of travel. When two segments are equally near, the one
    /// continuing the previous point's match wins.
    pub fn to_frenet(&self, points: &[(f64, f64)], policy: OutOfRange) -> Result<Vec<(f64, f64)>, SceneError> {
        let mut prev: Option<usize> = None;
        let last = self.segments() - 1;
        points
            .iter()
            .enumerate()
            .map(|(idx, &p)| {
                let mut best = self.project_on(0, p);
                for i in 1..self.segments() {
                    let cand = self.project_on(i, p);
                    if cand.dist2 < best.dist2 {
                        best = cand;
                    }
                }
                if let Some(pi) = prev {
                    // Continuity tie-break among equally distant segments.
                    for i in [pi, pi + 1] {
                        if i <= last {
                            let cand = self.project_on(i, p);
                            if cand.dist2 == best.dist2 {
                                best = cand;
                                break;
                            }
                        }
                    }
                }
                let beyond = (best.segment == 0 && best.u < 0.0) || (best.segment == last && best.u > 1.0);
                if beyond && policy == OutOfRange::Reject {
                    return Err(SceneError::OutOfRange { index: idx });
                }
                prev = Some(best.segment);
                let (a, d, len) = self.segment(best.segment);
                let uc = best.u.clamp(0.0, 1.0);
                let s = self.stations[best.segment] + uc * len;
                let cross = (d.0 * (p.1 - a.1) - d.1 * (p.0 - a.0)) / len;
                let offset = if beyond || (best.u > 0.0 && best.u < 1.0) {
                    cross
                } else {
                    // Foot point on a vertex: signed distance to it.
                    best.dist2.sqrt().copysign(cross)
                };
                Ok((s, offset))
            })
            .collect()
    }

    /// Inverse of [`to_frenet`](Self::to_frenet) for foot points inside a segment.
    pub fn to_cartesian(&self, s: f64, d: f64) -> (f64, f64) {
        let i = match self.stations.partition_point(|&st| st <= s) {
            0 => 0,
            k => (k - 1).min(self.segments() - 1),
        };
        let (a, dir, len) = self.segment(i);
        let u = (s - self.stations[i]) / len;
        let (tx, ty) = (dir.0 / len, dir.1 / len);
        (a.0 + u * dir.0 - d * ty, a.1 + u * dir.1 + d * tx)
    }
}

/// Convenience wrapper: converts `points` against a centerline polyline.
pub fn cartesian_to_frenet(
    points: &[(f64, f64)],
    centerline: &[(f64, f64)],
    policy: OutOfRange,
) -> Result<Vec<(f64, f64)>, SceneError> {
    Polyline::new(centerline)?.to_frenet(points, policy)
}
