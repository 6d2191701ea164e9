//! Manoeuvre labels and the compact manoeuvre-vector representation.
//!
//! A future window of `t_pred` per-step labels is split into
//! `C = ceil(t_pred / t_change)` change periods. The vector stores the
//! manoeuvre type at the start of every period plus the type at the final
//! step (`U`, length `C + 1`) and, for each period, the normalized offset of
//! the first step carrying the new type (`V`, length `C`, `-1` when the
//! period holds no transition).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sentinel stored in `V` for periods without a transition.
pub const NO_TRANSITION: f64 = -1.0;

/// Default lateral speed below which a vehicle is considered settled (m/s).
pub const DEFAULT_LATERAL_SPEED_EPS: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("horizon lengths must be positive (t_pred={t_pred}, t_change={t_change})")]
    NonPositiveHorizon { t_pred: i64, t_change: i64 },
    #[error("t_change ({t_change}) exceeds t_pred ({t_pred})")]
    ChangeLongerThanHorizon { t_pred: usize, t_change: usize },
    #[error("fps must be positive")]
    ZeroFps,
    #[error("label sequence has length {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("{count} transitions in change period {period}; at most one is allowed")]
    MultipleTransitionsInPeriod { period: usize, count: usize },
    #[error("malformed manoeuvre vector: {0}")]
    InvalidVector(String),
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("lane markings must be strictly increasing and non-empty")]
    BadMarkings,
    #[error("unknown manoeuvre code {0:?}")]
    UnknownCode(char),
}

/// Manoeuvre type. The derived ordering `LK < RLC < LLC` is the tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Manoeuvre {
    #[serde(rename = "LK")]
    LaneKeep,
    #[serde(rename = "RLC")]
    RightLaneChange,
    #[serde(rename = "LLC")]
    LeftLaneChange,
}

impl Manoeuvre {
    pub const ALL: [Manoeuvre; 3] = [
        Manoeuvre::LaneKeep,
        Manoeuvre::RightLaneChange,
        Manoeuvre::LeftLaneChange,
    ];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            Manoeuvre::LaneKeep => 0,
            Manoeuvre::RightLaneChange => 1,
            Manoeuvre::LeftLaneChange => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Single-character CSV code.
    pub fn code(self) -> char {
        match self {
            Manoeuvre::LaneKeep => 'K',
            Manoeuvre::RightLaneChange => 'R',
            Manoeuvre::LeftLaneChange => 'L',
        }
    }

    pub fn from_code(c: char) -> Result<Self, CodecError> {
        match c {
            'K' => Ok(Manoeuvre::LaneKeep),
            'R' => Ok(Manoeuvre::RightLaneChange),
            'L' => Ok(Manoeuvre::LeftLaneChange),
            other => Err(CodecError::UnknownCode(other)),
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Manoeuvre::LaneKeep => "LK",
            Manoeuvre::RightLaneChange => "RLC",
            Manoeuvre::LeftLaneChange => "LLC",
        }
    }

    /// Index of the maximum entry; exact ties go to the earlier manoeuvre.
    pub fn argmax(probs: &[f64]) -> Manoeuvre {
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate().take(Self::COUNT) {
            if p > probs[best] {
                best = i;
            }
        }
        Manoeuvre::ALL[best]
    }
}

impl fmt::Display for Manoeuvre {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

/// Per-timestep manoeuvre labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct LabelSequence(pub Vec<Manoeuvre>);

impl LabelSequence {
    pub fn new(labels: Vec<Manoeuvre>) -> Self {
        Self(labels)
    }

    pub fn uniform(label: Manoeuvre, len: usize) -> Self {
        Self(vec![label; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Manoeuvre] {
        &self.0
    }

    pub fn transitions(&self) -> usize {
        self.0.windows(2).filter(|w| w[0] != w[1]).count()
    }

    /// Most frequent non-LK label, or LK when the sequence is all lane keeping.
    /// Count ties go to the earlier manoeuvre in the fixed order.
    pub fn dominant(&self) -> Manoeuvre {
        let mut counts = [0usize; Manoeuvre::COUNT];
        for m in &self.0 {
            counts[m.index()] += 1;
        }
        let mut best = Manoeuvre::LaneKeep;
        let mut best_count = 0;
        for m in [Manoeuvre::RightLaneChange, Manoeuvre::LeftLaneChange] {
            if counts[m.index()] > best_count {
                best = m;
                best_count = counts[m.index()];
            }
        }
        best
    }
}

impl fmt::Display for LabelSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in &self.0 {
            write!(f, "{}", m.code())?;
        }
        Ok(())
    }
}

impl FromStr for LabelSequence {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.chars().map(Manoeuvre::from_code).collect::<Result<Vec<_>, _>>().map(Self)
    }
}

impl Serialize for LabelSequence {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for LabelSequence {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Number of change periods, `ceil(t_pred / t_change)`.
pub fn num_change_periods(t_pred: i64, t_change: i64) -> Result<usize, CodecError> {
    if t_pred <= 0 || t_change <= 0 {
        return Err(CodecError::NonPositiveHorizon { t_pred, t_change });
    }
    Ok(((t_pred + t_change - 1) / t_change) as usize)
}

/// Prediction horizon and change-period length, both in timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HorizonConfig {
    pub t_pred: usize,
    pub t_change: usize,
    pub fps: usize,
}

impl HorizonConfig {
    pub fn new(t_pred: usize, t_change: usize, fps: usize) -> Result<Self, CodecError> {
        num_change_periods(t_pred as i64, t_change as i64)?;
        if t_change > t_pred {
            return Err(CodecError::ChangeLongerThanHorizon { t_pred, t_change });
        }
        if fps == 0 {
            return Err(CodecError::ZeroFps);
        }
        Ok(Self { t_pred, t_change, fps })
    }

    /// 5 s horizon at 5 FPS with 2.5 s periods, integerized to 13 steps.
    pub fn highway_default() -> Self {
        Self { t_pred: 25, t_change: 13, fps: 5 }
    }

    pub fn periods(&self) -> usize {
        self.t_pred.div_ceil(self.t_change)
    }

    /// 0-based first step of period `i` (1-based period index).
    pub fn period_start(&self, i: usize) -> usize {
        (i - 1) * self.t_change
    }

    pub fn period_len(&self, i: usize) -> usize {
        let start = self.period_start(i);
        self.t_change.min(self.t_pred - start)
    }
}

/// `(U, V)` pair: `C + 1` manoeuvre types and `C` transition times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManoeuvreVector {
    #[serde(rename = "U")]
    pub types: Vec<Manoeuvre>,
    #[serde(rename = "V")]
    pub times: Vec<f64>,
}

impl ManoeuvreVector {
    /// Builds a vector from hardened types and raw times, writing the
    /// sentinel wherever consecutive types agree.
    pub fn from_parts(types: Vec<Manoeuvre>, raw_times: &[f64]) -> Result<Self, CodecError> {
        if types.len() != raw_times.len() + 1 {
            return Err(CodecError::InvalidVector(format!(
                "|U|={} but |V|={}",
                types.len(),
                raw_times.len()
            )));
        }
        let times = raw_times
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if types[i] == types[i + 1] {
                    NO_TRANSITION
                } else {
                    v.clamp(0.0, 1.0)
                }
            })
            .collect();
        Ok(Self { types, times })
    }

    pub fn periods(&self) -> usize {
        self.times.len()
    }

    pub fn validate(&self, cfg: &HorizonConfig) -> Result<(), CodecError> {
        let c = cfg.periods();
        if self.types.len() != c + 1 || self.times.len() != c {
            return Err(CodecError::InvalidVector(format!(
                "expected |U|={} and |V|={}, got {} and {}",
                c + 1,
                c,
                self.types.len(),
                self.times.len()
            )));
        }
        for (i, &v) in self.times.iter().enumerate() {
            let same = self.types[i] == self.types[i + 1];
            if same && v != NO_TRANSITION {
                return Err(CodecError::InvalidVector(format!(
                    "v_{} = {v} but u_{} = u_{}",
                    i + 1,
                    i,
                    i + 1
                )));
            }
            if !same && !(0.0..=1.0).contains(&v) {
                return Err(CodecError::InvalidVector(format!(
                    "v_{} = {v} outside [0, 1] for a transition",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// Encodes a future label sequence into its manoeuvre vector.
pub fn encode_manoeuvre_vector(
    labels: &LabelSequence,
    cfg: &HorizonConfig,
) -> Result<ManoeuvreVector, CodecError> {
    let l = labels.as_slice();
    if l.len() != cfg.t_pred {
        return Err(CodecError::LengthMismatch { expected: cfg.t_pred, got: l.len() });
    }
    let c = cfg.periods();
    let mut types = Vec::with_capacity(c + 1);
    let mut times = Vec::with_capacity(c);
    types.push(l[0]);
    for i in 1..=c {
        let start = cfg.period_start(i);
        let len = cfg.period_len(i);
        // A transition belongs to period i when its first new-label step lies
        // in (start, start + len]; for the final period the range ends at t_pred - 1.
        let last = (start + len).min(cfg.t_pred - 1);
        let switches: Vec<usize> = (start + 1..=last).filter(|&p| l[p] != l[p - 1]).collect();
        if switches.len() > 1 {
            return Err(CodecError::MultipleTransitionsInPeriod { period: i, count: switches.len() });
        }
        let end_type = if i < c { l[cfg.period_start(i + 1)] } else { l[cfg.t_pred - 1] };
        types.push(end_type);
        times.push(match switches.first() {
            Some(&p) => (p - start) as f64 / len as f64,
            None => NO_TRANSITION,
        });
    }
    Ok(ManoeuvreVector { types, times })
}

/// Expands a manoeuvre vector into a piecewise-constant label sequence.
pub fn decode_manoeuvre_vector(
    mv: &ManoeuvreVector,
    cfg: &HorizonConfig,
) -> Result<LabelSequence, CodecError> {
    mv.validate(cfg)?;
    let mut out = Vec::with_capacity(cfg.t_pred);
    for i in 1..=cfg.periods() {
        let len = cfg.period_len(i);
        let (from, to) = (mv.types[i - 1], mv.types[i]);
        let v = mv.times[i - 1];
        let switch = if v == NO_TRANSITION {
            len
        } else {
            ((v * len as f64).round() as usize).min(len)
        };
        for k in 0..len {
            out.push(if k < switch { from } else { to });
        }
    }
    Ok(LabelSequence(out))
}

/// Lateral speed by central differences (one-sided at the ends).
pub fn lateral_speed(lats: &[f64], dt: f64) -> Vec<f64> {
    let n = lats.len();
    if n < 2 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|t| {
            if t == 0 {
                (lats[1] - lats[0]) / dt
            } else if t == n - 1 {
                (lats[n - 1] - lats[n - 2]) / dt
            } else {
                (lats[t + 1] - lats[t - 1]) / (2.0 * dt)
            }
        })
        .collect()
}

/// Index of the lane region containing `lat`: 0 below the first marking,
/// `markings.len()` above the last.
pub fn marking_region(lat: f64, markings: &[f64]) -> usize {
    markings.partition_point(|&m| m <= lat)
}

/// Options for [`auto_label_trajectory`].
#[derive(Debug, Clone, Copy)]
pub struct AutoLabelConfig {
    pub fps: usize,
    pub lateral_speed_eps: f64,
}

impl Default for AutoLabelConfig {
    fn default() -> Self {
        Self { fps: 5, lateral_speed_eps: DEFAULT_LATERAL_SPEED_EPS }
    }
}

/// Labels every step of a crossing episode as RLC/LLC and everything else LK.
///
/// The lateral axis points left, so a crossing towards larger lateral
/// coordinates is a left lane change. An episode grows outwards from the
/// crossing instant while `|lateral speed| > eps`.
pub fn auto_label_trajectory(
    traj: &[(f64, f64)],
    lane_markings: &[f64],
    cfg: &AutoLabelConfig,
) -> Result<LabelSequence, CodecError> {
    if traj.is_empty() {
        return Err(CodecError::EmptyTrajectory);
    }
    if lane_markings.is_empty() || lane_markings.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CodecError::BadMarkings);
    }
    if cfg.fps == 0 {
        return Err(CodecError::ZeroFps);
    }
    let n = traj.len();
    let mut labels = vec![Manoeuvre::LaneKeep; n];
    if n < 2 {
        return Ok(LabelSequence(labels));
    }
    let lats: Vec<f64> = traj.iter().map(|p| p.1).collect();
    let speed = lateral_speed(&lats, 1.0 / cfg.fps as f64);
    let moving = |t: usize| speed[t].abs() > cfg.lateral_speed_eps;
    for t in 0..n - 1 {
        let (r0, r1) = (marking_region(lats[t], lane_markings), marking_region(lats[t + 1], lane_markings));
        if r0 == r1 {
            continue;
        }
        let label = if r1 > r0 { Manoeuvre::LeftLaneChange } else { Manoeuvre::RightLaneChange };
        labels[t] = label;
        labels[t + 1] = label;
        let mut b = t;
        while b > 0 && moving(b - 1) {
            b -= 1;
            labels[b] = label;
        }
        let mut f = t + 1;
        while f + 1 < n && moving(f + 1) {
            f += 1;
            labels[f] = label;
        }
    }
    Ok(LabelSequence(labels))
}
