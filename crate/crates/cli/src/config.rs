//! Run configuration: TOML file < `MMNTP_SEED` < command-line flags.
//!
//! Every artifact embeds the resolved [`RunConfig`] together with the
//! subcommand and its paths (see [`Provenance`]).

use std::collections::BTreeMap;
use std::path::Path;

use mmntp_core::codec::{HorizonConfig, DEFAULT_LATERAL_SPEED_EPS};
use mmntp_core::model::{ModeSelection, ModelConfig};
use mmntp_core::planner::PlannerConfig;
use mmntp_core::scene::dataset::DatasetConfig;
use mmntp_core::scene::features::FEATURE_COUNT;
use mmntp_core::scene::generate::GenConfig;
use mmntp_core::training::TrainConfig;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SEED_ENV: &str = "MMNTP_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub scenes: usize,
    /// Total samples kept after balancing (fewer if the scenes do not yield enough).
    pub samples: usize,
    pub balance: bool,
    /// Share of samples held out, assigned by whole scenes.
    pub test_fraction: f64,
    pub t_obs: usize,
    pub t_pred: usize,
    pub t_change: usize,
    pub stride: usize,
    pub lateral_speed_eps: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            scenes: 40,
            samples: 2000,
            balance: true,
            test_fraction: 0.2,
            t_obs: 15,
            t_pred: 25,
            t_change: 13,
            stride: 2,
            lateral_speed_eps: DEFAULT_LATERAL_SPEED_EPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: ModeSelection,
    pub n_modes: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub mlp_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk();
        Self {
            variant: d.variant,
            n_modes: d.n_modes,
            d_model: d.d_model,
            n_heads: d.n_heads,
            n_layers: d.n_layers,
            d_ff: d.d_ff,
            mlp_hidden: d.mlp_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_epochs: usize,
    pub grad_clip: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            warmup_epochs: d.warmup_epochs,
            grad_clip: d.grad_clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    pub horizons_s: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { ks: vec![1, 2, 3], horizons_s: vec![1.0, 2.0, 3.0, 4.0, 5.0] }
    }
}

/// Planner settings. Time step, horizon, lateral target (the lane left of
/// the ego, or its own lane on the leftmost lane) and desired speed (the
/// ego's current speed) come from the scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSection {
    pub ego: u32,
    pub frame: usize,
    pub w_track: f64,
    pub w_speed: f64,
    pub w_effort: f64,
    pub w_prox: f64,
    pub safe_ellipse: [f64; 2],
    pub a_long: [f64; 2],
    pub a_lat: [f64; 2],
    pub weight_floor: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PlanSection {
    fn default() -> Self {
        let d = PlannerConfig::default();
        Self {
            ego: 1,
            frame: 50,
            w_track: d.w_track,
            w_speed: d.w_speed,
            w_effort: d.w_effort,
            w_prox: d.w_prox,
            safe_ellipse: d.safe_ellipse,
            a_long: [d.a_long.0, d.a_long.1],
            a_lat: [d.a_lat.0, d.a_lat.1],
            weight_floor: d.weight_floor,
            tol: d.tol,
            max_iter: d.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub generator: GenConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub plan: PlanSection,
}

/// Independent seeds derived from the root seed, one per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Scenes = 1,
    Balance = 2,
    Split = 3,
    ModelInit = 4,
    Training = 5,
}

impl RunConfig {
    /// Layers the optional file, the seed environment variable and the flag
    /// overrides (`--seed`, then `--set section.key=value` in order).
    pub fn resolve(
        file: Option<&Path>,
        env_seed: Option<&str>,
        seed_flag: Option<u64>,
        sets: &[String],
    ) -> Result<Self, CliError> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::config(format!("config file {}: {e}", p.display())))?;
                let t: toml::Table = toml::from_str(&text)
                    .map_err(|e| CliError::config(format!("config file {}: {e}", p.display())))?;
                t
            }
            None => toml::Table::new(),
        };
        if let Some(s) = env_seed {
            let seed: u64 =
                s.trim().parse().map_err(|_| CliError::config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
            table.insert("seed".into(), toml::Value::Integer(seed_to_toml(seed)?));
        }
        if let Some(seed) = seed_flag {
            table.insert("seed".into(), toml::Value::Integer(seed_to_toml(seed)?));
        }
        for s in sets {
            apply_set(&mut table, s)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| CliError::config(e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.generator.validate()?;
        self.dataset_config()?;
        self.model_config()?.validate()?;
        self.train_config().validate()?;
        self.planner_config(1.0 / self.generator.fps as f64, self.data.t_pred, 0.0, 0.0).validate()?;
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(CliError::config("data.test_fraction must be in [0, 1)"));
        }
        if self.eval.ks.is_empty() || self.eval.horizons_s.is_empty() {
            return Err(CliError::config("eval.ks and eval.horizons_s must be non-empty"));
        }
        let horizon = self.horizon()?;
        for &h in &self.eval.horizons_s {
            mmntp_core::metrics::horizon_step(&horizon, h)?;
        }
        if let Some(&k) = self.eval.ks.iter().find(|&&k| k == 0 || k > self.model.n_modes) {
            return Err(CliError::config(format!("eval K = {k} is outside 1..={}", self.model.n_modes)));
        }
        Ok(())
    }

    pub fn horizon(&self) -> Result<HorizonConfig, CliError> {
        Ok(HorizonConfig::new(self.data.t_pred, self.data.t_change, self.generator.fps)?)
    }

    pub fn dataset_config(&self) -> Result<DatasetConfig, CliError> {
        Ok(DatasetConfig {
            t_obs: self.data.t_obs,
            horizon: self.horizon()?,
            stride: self.data.stride,
            lateral_speed_eps: self.data.lateral_speed_eps,
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let m = &self.model;
        Ok(ModelConfig {
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_layers: m.n_layers,
            d_ff: m.d_ff,
            mlp_hidden: m.mlp_hidden,
            n_modes: m.n_modes,
            t_obs: self.data.t_obs,
            horizon: self.horizon()?,
            n_features: FEATURE_COUNT,
            variant: m.variant,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            warmup_epochs: t.warmup_epochs,
            seed: self.stage_seed(Stage::Training),
            mode_selection: self.model.variant,
            grad_clip: t.grad_clip,
        }
    }

    /// Planner settings with the scene-dependent fields filled in.
    pub fn planner_config(&self, dt: f64, horizon: usize, target_lat: f64, desired_speed: f64) -> PlannerConfig {
        let p = &self.plan;
        PlannerConfig {
            dt,
            horizon,
            target_lat,
            desired_speed,
            w_track: p.w_track,
            w_speed: p.w_speed,
            w_effort: p.w_effort,
            w_prox: p.w_prox,
            safe_ellipse: p.safe_ellipse,
            a_long: (p.a_long[0], p.a_long[1]),
            a_lat: (p.a_lat[0], p.a_lat[1]),
            weight_floor: p.weight_floor,
            tol: p.tol,
            max_iter: p.max_iter,
        }
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stage as u64);
        rng.next_u64()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn seed_to_toml(seed: u64) -> Result<i64, CliError> {
    i64::try_from(seed).map_err(|_| CliError::config(format!("seed {seed} exceeds {}", i64::MAX)))
}

/// Applies one `section.key=value` override. The value is read as a TOML
/// value, falling back to a bare string.
fn apply_set(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("--set expects key=value, got {assignment:?}")))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("malformed key {key:?}")));
    }
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| CliError::config(format!("{key:?}: {part} is not a section")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

/// What produced an artifact: the subcommand, its paths and the full config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub paths: BTreeMap<String, String>,
    pub seed: u64,
    pub config: RunConfig,
}

impl Provenance {
    pub fn new(command: &str, paths: &[(&str, &Path)], config: &RunConfig) -> Self {
        Self {
            command: command.into(),
            paths: paths.iter().map(|(k, p)| (k.to_string(), p.display().to_string())).collect(),
            seed: config.seed,
            config: config.clone(),
        }
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("provenance serializes")
    }

    /// Compact JSON on one line, for comment headers.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("provenance serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = RunConfig::resolve(None, None, None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model_config().unwrap(), ModelConfig::desk());
    }

    #[test]
    fn layering_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "seed = 3\n[train]\nepochs = 7\n").unwrap();
        let cfg = RunConfig::resolve(Some(&p), None, None, &[]).unwrap();
        assert_eq!((cfg.seed, cfg.train.epochs), (3, 7));
        let cfg = RunConfig::resolve(Some(&p), Some("5"), None, &[]).unwrap();
        assert_eq!(cfg.seed, 5);
        let cfg = RunConfig::resolve(Some(&p), Some("5"), Some(9), &["train.epochs=2".into()]).unwrap();
        assert_eq!((cfg.seed, cfg.train.epochs), (9, 2));
        let cfg = RunConfig::resolve(None, None, None, &["model.variant=MTP".into(), "train.grad_clip=10.0".into()]).unwrap();
        assert_eq!(cfg.model.variant, ModeSelection::Mtp);
        assert_eq!(cfg.train_config().mode_selection, ModeSelection::Mtp);
        assert_eq!(cfg.train.grad_clip, Some(10.0));
    }

    #[test]
    fn bad_inputs_are_config_errors() {
        for sets in [vec!["train.epochs=0"], vec!["train.nope=1"], vec!["data.t_change=40"], vec!["eval.ks=[4]"], vec!["x"]] {
            let sets: Vec<String> = sets.into_iter().map(String::from).collect();
            let err = RunConfig::resolve(None, None, None, &sets).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{sets:?}: {err}");
        }
        assert_eq!(RunConfig::resolve(None, Some("abc"), None, &[]).unwrap_err().exit_code(), 2);
        let missing = RunConfig::resolve(Some(Path::new("/nonexistent/run.toml")), None, None, &[]);
        assert_eq!(missing.unwrap_err().exit_code(), 2);
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.grad_clip = Some(5.0);
        cfg.seed = 11;
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn stage_seeds_differ() {
        let cfg = RunConfig::default();
        let seeds = [Stage::Scenes, Stage::Balance, Stage::Split, Stage::ModelInit, Stage::Training].map(|s| cfg.stage_seed(s));
        for i in 0..seeds.len() {
            for j in 0..i {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
        assert_eq!(cfg.stage_seed(Stage::Split), RunConfig::default().stage_seed(Stage::Split));
    }
}
