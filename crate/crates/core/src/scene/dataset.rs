//! Sliding-window samples and class balancing.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::extract_features;
use super::{Scene, SceneError, VehicleId};
use crate::codec::{
    auto_label_trajectory, encode_manoeuvre_vector, AutoLabelConfig, HorizonConfig, LabelSequence, Manoeuvre,
    DEFAULT_LATERAL_SPEED_EPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub t_obs: usize,
    pub horizon: HorizonConfig,
    /// Step between consecutive window ends of one vehicle.
    pub stride: usize,
    pub lateral_speed_eps: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            t_obs: 15,
            horizon: HorizonConfig::highway_default(),
            stride: 2,
            lateral_speed_eps: DEFAULT_LATERAL_SPEED_EPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleMeta {
    pub scene: usize,
    pub tv_id: VehicleId,
    /// Last observed frame.
    pub t_end: usize,
}

/// One training/evaluation window. Future positions are relative to the TV
/// position at `meta.t_end`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSample {
    pub features: Vec<Vec<f64>>,
    pub future_traj: Vec<[f64; 2]>,
    pub future_labels: LabelSequence,
    pub meta: SampleMeta,
}

impl DatasetSample {
    pub fn class(&self) -> Manoeuvre {
        self.future_labels.dominant()
    }

    pub fn is_finite(&self) -> bool {
        self.features.iter().flatten().all(|v| v.is_finite())
            && self.future_traj.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildStats {
    pub windows: usize,
    /// Windows dropped for holding more than one transition in a change period.
    pub dropped_multi_transition: usize,
}

fn scene_samples(scene: &Scene, cfg: &DatasetConfig) -> Result<(Vec<DatasetSample>, BuildStats), SceneError> {
    let label_cfg = AutoLabelConfig { fps: scene.fps, lateral_speed_eps: cfg.lateral_speed_eps };
    let t_pred = cfg.horizon.t_pred;
    let mut out = Vec::new();
    let mut stats = BuildStats::default();
    let mut tracks: Vec<_> = scene.tracks.iter().collect();
    tracks.sort_by_key(|t| t.id);
    for track in tracks {
        let n = track.states.len();
        if n < cfg.t_obs + t_pred {
            continue;
        }
        let labels = auto_label_trajectory(&track.positions(), &scene.geometry.marking_lats, &label_cfg)?;
        let mut i_end = cfg.t_obs - 1;
        while i_end + t_pred < n {
            stats.windows += 1;
            let future = LabelSequence(labels.0[i_end + 1..=i_end + t_pred].to_vec());
            if encode_manoeuvre_vector(&future, &cfg.horizon).is_err() {
                stats.dropped_multi_transition += 1;
                log::debug!("scene {} tv {} t_end {}: multiple transitions in a period", scene.id, track.id, i_end);
            } else {
                let t_end = track.first_frame + i_end;
                let feats = extract_features(scene, track.id, t_end, cfg.t_obs)?;
                let origin = track.states[i_end];
                let future_traj = track.states[i_end + 1..=i_end + t_pred]
                    .iter()
                    .map(|k| [k.x - origin.x, k.y - origin.y])
                    .collect();
                out.push(DatasetSample {
                    features: feats.outer_iter().map(|r| r.to_vec()).collect(),
                    future_traj,
                    future_labels: future,
                    meta: SampleMeta { scene: scene.id, tv_id: track.id, t_end },
                });
            }
            i_end += cfg.stride.max(1);
        }
    }
    Ok((out, stats))
}

/// Sliding-window samples from every track, ordered by `(scene, tv, t_end)`.
pub fn build_dataset(scenes: &[Scene], cfg: &DatasetConfig) -> Result<(Vec<DatasetSample>, BuildStats), SceneError> {
    let per_scene: Vec<_> = scenes.par_iter().map(|s| scene_samples(s, cfg)).collect::<Result<_, _>>()?;
    let mut samples = Vec::new();
    let mut stats = BuildStats::default();
    for (s, st) in per_scene {
        samples.extend(s);
        stats.windows += st.windows;
        stats.dropped_multi_transition += st.dropped_multi_transition;
    }
    samples.sort_by_key(|s| s.meta);
    if stats.dropped_multi_transition > 0 {
        log::info!("dropped {} of {} windows with >1 transition per period", stats.dropped_multi_transition, stats.windows);
    }
    Ok((samples, stats))
}

pub fn class_counts(samples: &[DatasetSample]) -> [usize; Manoeuvre::COUNT] {
    let mut c = [0; Manoeuvre::COUNT];
    for s in samples {
        c[s.class().index()] += 1;
    }
    c
}

/// Undersamples every present class to the smallest present class count.
/// The output keeps the input order.
pub fn balance_dataset(samples: Vec<DatasetSample>, seed: u64) -> Vec<DatasetSample> {
    let counts = class_counts(&samples);
    let Some(target) = counts.iter().copied().filter(|&c| c > 0).min() else {
        return samples;
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; samples.len()];
    for m in Manoeuvre::ALL {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].class() == m).collect();
        idx.shuffle(&mut rng);
        for &i in idx.iter().take(target) {
            keep[i] = true;
        }
    }
    samples.into_iter().zip(keep).filter_map(|(s, k)| k.then_some(s)).collect()
}

/// Writes samples as JSON lines, preceded by an optional header record.
pub fn write_samples<W: Write>(
    mut w: W,
    samples: &[DatasetSample],
    header: Option<&serde_json::Value>,
) -> Result<(), SceneError> {
    if let Some(h) = header {
        serde_json::to_writer(&mut w, h)?;
        w.write_all(b"\n")?;
    }
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads JSON-lines samples, skipping blank lines and header records
/// (objects without a `features` key).
pub fn read_samples<R: BufRead>(r: R) -> Result<Vec<DatasetSample>, SceneError> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line)?;
        if v.get("features").is_none() {
            continue;
        }
        out.push(serde_json::from_value(v)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Manoeuvre::*;

    fn sample(class: Manoeuvre, k: usize) -> DatasetSample {
        let mut labels = vec![LaneKeep; 25];
        if class != LaneKeep {
            labels[10..20].iter_mut().for_each(|l| *l = class);
        }
        DatasetSample {
            features: vec![vec![0.0; 18]; 15],
            future_traj: vec![[0.0, 0.0]; 25],
            future_labels: LabelSequence(labels),
            meta: SampleMeta { scene: 0, tv_id: k as u32, t_end: 14 },
        }
    }

    #[test]
    fn undersamples_majority() {
        let mut v: Vec<_> = (0..90).map(|k| sample(LaneKeep, k)).collect();
        v.extend((90..100).map(|k| sample(LeftLaneChange, k)));
        let b = balance_dataset(v, 3);
        assert_eq!(class_counts(&b), [10, 0, 10]);
        assert!(b.windows(2).all(|w| w[0].meta < w[1].meta));
    }

    #[test]
    fn balancing_is_seeded() {
        let mk = || {
            let mut v: Vec<_> = (0..50).map(|k| sample(LaneKeep, k)).collect();
            v.extend((50..60).map(|k| sample(RightLaneChange, k)));
            v.extend((60..75).map(|k| sample(LeftLaneChange, k)));
            v
        };
        let a = balance_dataset(mk(), 11);
        assert_eq!(a, balance_dataset(mk(), 11));
        assert_eq!(class_counts(&a), [10, 10, 10]);
        assert_ne!(a, balance_dataset(mk(), 12));
    }

    #[test]
    fn jsonl_round_trip_skips_header() {
        let v = vec![sample(LaneKeep, 1), sample(RightLaneChange, 2)];
        let mut buf = Vec::new();
        write_samples(&mut buf, &v, Some(&serde_json::json!({"run_config": {"seed": 1}}))).unwrap();
        assert_eq!(read_samples(&buf[..]).unwrap(), v);
    }
}
