//! Subcommand implementations. Each one writes only below its `out` path.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use mmntp_core::codec::{auto_label_trajectory, AutoLabelConfig, Manoeuvre};
use mmntp_core::metrics::{build_batch, MetricsReport};
use mmntp_core::model::Model;
use mmntp_core::planner::{
    plan_contingency, select_target_vehicle, ContingencyPlan, EgoState, PlannerConfig, TvPrediction,
};
use mmntp_core::scene::csv_io::{read_track_rows, scene_from_rows, write_tracks_csv, RecordingMeta};
use mmntp_core::scene::dataset::{balance_dataset, build_dataset, class_counts, read_samples, write_samples, DatasetSample};
use mmntp_core::scene::features::{extract_features, FEATURE_COUNT};
use mmntp_core::scene::generate::generate_scene;
use mmntp_core::scene::{LaneGeometry, Scene, VehicleId, VehicleState};
use mmntp_core::training::{fit, write_loss_csv, EpochLog};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{Provenance, RunConfig, Stage};
use crate::error::CliError;

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn make_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// Pretty JSON with a trailing newline.
fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub scenes: usize,
    pub windows: usize,
    pub dropped_multi_transition: usize,
    pub train: usize,
    pub test: usize,
    pub train_counts: [usize; Manoeuvre::COUNT],
    pub test_counts: [usize; Manoeuvre::COUNT],
    pub test_scenes: Vec<usize>,
}

/// Keeps at most `total` samples, spread as evenly as possible over the
/// present classes. Input order is preserved.
fn trim_balanced(samples: Vec<DatasetSample>, total: usize, rng: &mut ChaCha8Rng) -> Vec<DatasetSample> {
    if samples.len() <= total {
        return samples;
    }
    let present: Vec<Manoeuvre> =
        Manoeuvre::ALL.into_iter().filter(|m| samples.iter().any(|s| s.class() == *m)).collect();
    let mut keep = vec![false; samples.len()];
    for (i, m) in present.iter().enumerate() {
        let cap = total / present.len() + usize::from(i < total % present.len());
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&j| samples[j].class() == *m).collect();
        idx.shuffle(rng);
        for &j in idx.iter().take(cap) {
            keep[j] = true;
        }
    }
    samples.into_iter().zip(keep).filter_map(|(s, k)| k.then_some(s)).collect()
}

/// Moves whole scenes, in random order, to the test split until it holds at
/// least `fraction` of the samples.
fn split_by_scene(samples: Vec<DatasetSample>, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<DatasetSample>, Vec<DatasetSample>, Vec<usize>) {
    let mut ids: Vec<usize> = samples.iter().map(|s| s.meta.scene).collect::<BTreeSet<_>>().into_iter().collect();
    ids.shuffle(rng);
    let want = (fraction * samples.len() as f64).round() as usize;
    let mut test_ids = BTreeSet::new();
    let mut taken = 0;
    for id in ids {
        if taken >= want {
            break;
        }
        taken += samples.iter().filter(|s| s.meta.scene == id).count();
        test_ids.insert(id);
    }
    let (test, train): (Vec<_>, Vec<_>) = samples.into_iter().partition(|s| test_ids.contains(&s.meta.scene));
    (train, test, test_ids.into_iter().collect())
}

/// Generates scenes, writes them as track CSV + metadata, and writes the
/// balanced train/test windows as JSON lines.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<DataSummary, CliError> {
    let prov = Provenance::new("gen-data", &[("out", out)], cfg);
    let scene_dir = out.join("scenes");
    make_dir(&scene_dir)?;
    let base = cfg.stage_seed(Stage::Scenes);
    let mut scenes = Vec::with_capacity(cfg.data.scenes);
    for i in 0..cfg.data.scenes {
        let mut g = generate_scene(&cfg.generator, base.wrapping_add(i as u64))?;
        g.scene.id = i;
        let mut w = create(&scene_dir.join(format!("{i:03}_tracks.csv")))?;
        write_tracks_csv(&mut w, &g.scene, Some(&prov.to_line()))?;
        w.flush()?;
        write_json(
            &scene_dir.join(format!("{i:03}_meta.json")),
            &json!({ "provenance": prov, "recording": RecordingMeta::of(&g.scene) }),
        )?;
        scenes.push(g.scene);
    }

    let (mut samples, stats) = build_dataset(&scenes, &cfg.dataset_config()?)?;
    if cfg.data.balance {
        samples = balance_dataset(samples, cfg.stage_seed(Stage::Balance));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(Stage::Balance));
        samples = trim_balanced(samples, cfg.data.samples, &mut rng);
    } else {
        samples.truncate(cfg.data.samples);
    }
    if samples.len() < cfg.data.samples {
        log::warn!("only {} samples available, {} requested", samples.len(), cfg.data.samples);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(Stage::Split));
    let (train, test, test_scenes) = split_by_scene(samples, cfg.data.test_fraction, &mut rng);

    for (name, split) in [("train", &train), ("test", &test)] {
        let header = json!({
            "provenance": prov,
            "split": name,
            "samples": split.len(),
            "class_counts": class_counts(split),
        });
        let mut w = create(&out.join(format!("{name}.jsonl")))?;
        write_samples(&mut w, split, Some(&header))?;
        w.flush()?;
    }
    let summary = DataSummary {
        scenes: scenes.len(),
        windows: stats.windows,
        dropped_multi_transition: stats.dropped_multi_transition,
        train: train.len(),
        test: test.len(),
        train_counts: class_counts(&train),
        test_counts: class_counts(&test),
        test_scenes,
    };
    write_json(&out.join("summary.json"), &json!({ "provenance": prov, "summary": summary }))?;
    Ok(summary)
}

/// `NNN_tracks.csv` -> `NNN_meta.json` next to it.
pub fn default_meta_path(tracks: &Path) -> PathBuf {
    let name = tracks.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name.strip_suffix("_tracks.csv").or_else(|| name.strip_suffix(".csv")).unwrap_or(&name);
    tracks.with_file_name(format!("{stem}_meta.json"))
}

/// Reads a recording. The metadata file is either a bare [`RecordingMeta`]
/// or an object with a `recording` field.
pub fn load_scene(tracks: &Path, meta: &Path) -> Result<Scene, CliError> {
    let v: serde_json::Value =
        serde_json::from_reader(open(meta)?).map_err(|e| CliError::data(format!("{}: {e}", meta.display())))?;
    let rec: RecordingMeta = serde_json::from_value(v.get("recording").cloned().unwrap_or(v))
        .map_err(|e| CliError::data(format!("{}: {e}", meta.display())))?;
    let rows = read_track_rows(open(tracks)?).map_err(|e| CliError::from(e).context(tracks.display()))?;
    if rows.is_empty() {
        return Err(CliError::data(format!("{}: no track rows", tracks.display())));
    }
    scene_from_rows(&rows, &rec).map_err(|e| CliError::from(e).context(tracks.display()))
}

/// Every `*_meta.json` recording in a directory, in file-name order.
pub fn load_scene_dir(dir: &Path) -> Result<Vec<Scene>, CliError> {
    let mut metas: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().ends_with("_meta.json")))
        .collect();
    metas.sort();
    metas
        .iter()
        .map(|m| {
            let name = m.file_name().unwrap().to_string_lossy().replace("_meta.json", "_tracks.csv");
            load_scene(&m.with_file_name(name), m)
        })
        .collect()
}

/// Auto-labels every track of a recording; writes `id,frame,label` rows.
pub fn label(cfg: &RunConfig, input: &Path, meta: Option<&Path>, out: &Path) -> Result<usize, CliError> {
    let meta = meta.map(Path::to_path_buf).unwrap_or_else(|| default_meta_path(input));
    let scene = load_scene(input, &meta)?;
    let lc = AutoLabelConfig { fps: scene.fps, lateral_speed_eps: cfg.data.lateral_speed_eps };
    let prov = Provenance::new("label", &[("input", input), ("meta", &meta), ("out", out)], cfg);
    let mut w = create(out)?;
    writeln!(w, "# {}", prov.to_line())?;
    writeln!(w, "id,frame,label")?;
    let mut changes = 0;
    for tr in &scene.tracks {
        let labels = auto_label_trajectory(&tr.positions(), &scene.geometry.marking_lats, &lc)?;
        changes += labels.0.windows(2).filter(|p| p[0] != p[1] && p[1] != Manoeuvre::LaneKeep).count()
            + usize::from(labels.0.first().is_some_and(|l| *l != Manoeuvre::LaneKeep));
        for (k, l) in labels.0.iter().enumerate() {
            writeln!(w, "{},{},{l}", tr.id, tr.first_frame + k)?;
        }
    }
    w.flush()?;
    Ok(changes)
}

pub fn load_samples(path: &Path) -> Result<Vec<DatasetSample>, CliError> {
    read_samples(open(path)?).map_err(|e| CliError::from(e).context(path.display()))
}

fn check_shapes(samples: &[DatasetSample], t_obs: usize, t_pred: usize, path: &Path) -> Result<(), CliError> {
    for (i, s) in samples.iter().enumerate() {
        let ok = s.features.len() == t_obs
            && s.features.iter().all(|r| r.len() == FEATURE_COUNT)
            && s.future_traj.len() == t_pred
            && s.future_labels.len() == t_pred;
        if !ok {
            return Err(CliError::data(format!(
                "{}: sample {i} does not match t_obs = {t_obs}, t_pred = {t_pred}, {FEATURE_COUNT} features",
                path.display()
            )));
        }
    }
    Ok(())
}

/// Trains a fresh model; writes `checkpoint.json` and `loss.csv`.
pub fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Vec<EpochLog>, CliError> {
    let samples = load_samples(data)?;
    if samples.is_empty() {
        return Err(CliError::data(format!("{}: no samples", data.display())));
    }
    let mcfg = cfg.model_config()?;
    check_shapes(&samples, mcfg.t_obs, mcfg.horizon.t_pred, data)?;
    let mut model = Model::new(mcfg, cfg.stage_seed(Stage::ModelInit))?;
    let logs = fit(&mut model, &samples, &cfg.train_config(), &mut |_| {})?;

    make_dir(out)?;
    let prov = Provenance::new("train", &[("data", data), ("out", out)], cfg);
    let mut w = create(&out.join("checkpoint.json"))?;
    model.save(&mut w, Some(&prov.to_value()))?;
    w.flush()?;
    let mut w = create(&out.join("loss.csv"))?;
    write_loss_csv(&mut w, &logs, Some(&prov.to_line()))?;
    w.flush()?;
    Ok(logs)
}

pub fn load_model(path: &Path) -> Result<(Model, Option<serde_json::Value>), CliError> {
    Model::load(open(path)?).map_err(|e| CliError::from(e).context(path.display()))
}

/// Runs inference and the metric suite; writes `metrics.json` and the
/// per-horizon table `metrics.txt`.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, data: &Path, scenes: Option<&Path>, out: &Path) -> Result<MetricsReport, CliError> {
    let (model, trained_with) = load_model(checkpoint)?;
    let samples = load_samples(data)?;
    if samples.is_empty() {
        return Err(CliError::data(format!("{}: no samples", data.display())));
    }
    let mc = model.config();
    check_shapes(&samples, mc.t_obs, mc.horizon.t_pred, data)?;
    let scene_dir = match scenes {
        Some(d) => Some(d.to_path_buf()),
        None => data.parent().map(|p| p.join("scenes")).filter(|p| p.is_dir()),
    };
    let scene_list = match &scene_dir {
        Some(d) => load_scene_dir(d)?,
        None => Vec::new(),
    };
    let batch = build_batch(&model, &samples, &scene_list)?;
    let report = MetricsReport::compute(&batch, &cfg.eval.ks, &cfg.eval.horizons_s)?;

    make_dir(out)?;
    let mut paths = vec![("checkpoint", checkpoint), ("data", data), ("out", out)];
    if let Some(d) = &scene_dir {
        paths.push(("scenes", d.as_path()));
    }
    let prov = Provenance::new("eval", &paths, cfg);
    write_json(&out.join("metrics.json"), &json!({ "provenance": prov, "checkpoint": trained_with, "report": report }))?;
    let mut w = create(&out.join("metrics.txt"))?;
    writeln!(w, "# {}", prov.to_line())?;
    w.write_all(report.table().as_bytes())?;
    w.flush()?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanArtifact {
    pub provenance: Provenance,
    pub checkpoint: Option<serde_json::Value>,
    pub scene_id: usize,
    pub frame: usize,
    pub ego_id: VehicleId,
    pub tv_id: VehicleId,
    pub geometry: LaneGeometry,
    pub vehicles: Vec<VehicleState>,
    pub ego: EgoState,
    pub prediction: TvPrediction,
    pub planner: PlannerConfig,
    pub plan: ContingencyPlan,
}

/// Picks the TV for `plan.ego` at `plan.frame`, predicts its modes and
/// plans one contingency branch per mode; writes `plan.json`.
pub fn plan(cfg: &RunConfig, checkpoint: &Path, tracks: &Path, meta: Option<&Path>, out: &Path) -> Result<PlanArtifact, CliError> {
    let (model, trained_with) = load_model(checkpoint)?;
    let meta = meta.map(Path::to_path_buf).unwrap_or_else(|| default_meta_path(tracks));
    let scene = load_scene(tracks, &meta)?;
    let mc = *model.config();
    if scene.fps != mc.horizon.fps {
        return Err(CliError::data(format!("scene runs at {} fps, the model at {}", scene.fps, mc.horizon.fps)));
    }
    let (ego_id, t) = (cfg.plan.ego, cfg.plan.frame);
    let tv_id = select_target_vehicle(&scene, ego_id, t)?;
    let obs = extract_features(&scene, tv_id, t, mc.t_obs)?;
    let modes = model.infer(&obs)?;
    let tv = scene.state(tv_id, t).expect("target exists at the frame it was selected");
    let me = scene.state(ego_id, t).expect("ego checked by target selection");
    let ego = EgoState { position: [me.kin.x, me.kin.y], velocity: [me.kin.vx, me.kin.vy] };
    let g = &scene.geometry;
    let lane = g.nearest_lane(me.kin.y);
    let target_lat = g.lane_center((lane + 1).min(g.lane_count - 1));
    let planner = cfg.planner_config(scene.dt(), mc.horizon.t_pred, target_lat, me.kin.vx);
    let prediction = TvPrediction { origin: [tv.kin.x, tv.kin.y], modes };
    let plan = plan_contingency(&ego, &prediction, &planner)?;

    make_dir(out)?;
    let artifact = PlanArtifact {
        provenance: Provenance::new("plan", &[("checkpoint", checkpoint), ("tracks", tracks), ("meta", &meta), ("out", out)], cfg),
        checkpoint: trained_with,
        scene_id: scene.id,
        frame: t,
        ego_id,
        tv_id,
        geometry: scene.geometry.clone(),
        vehicles: scene.states_at(t),
        ego,
        prediction,
        planner,
        plan,
    };
    write_json(&out.join("plan.json"), &artifact)?;
    Ok(artifact)
}

/// Renders each input (plan JSON, metrics JSON or loss CSV) to
/// `<out>/<input stem>.svg`.
pub fn plot(cfg: &RunConfig, inputs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>, CliError> {
    if inputs.is_empty() {
        return Err(CliError::config("plot needs at least one input"));
    }
    make_dir(out)?;
    let mut written = Vec::new();
    for input in inputs {
        let prov = Provenance::new("plot", &[("input", input.as_path()), ("out", out)], cfg);
        let text = fs::read_to_string(input).map_err(|e| CliError::data(format!("{}: {e}", input.display())))?;
        let svg = if input.extension().is_some_and(|e| e == "csv") {
            crate::plot::loss_svg(&parse_loss_csv(&text).map_err(|e| e.context(input.display()))?, &prov)
        } else {
            let v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", input.display())))?;
            if v.get("plan").is_some() {
                let a: PlanArtifact =
                    serde_json::from_value(v).map_err(|e| CliError::data(format!("{}: {e}", input.display())))?;
                crate::plot::plan_svg(&a, &prov)
            } else if let Some(r) = v.get("report") {
                let r: MetricsReport =
                    serde_json::from_value(r.clone()).map_err(|e| CliError::data(format!("{}: {e}", input.display())))?;
                crate::plot::metrics_svg(&r, &prov)
            } else {
                return Err(CliError::data(format!("{}: not a plan, metrics or loss file", input.display())));
            }
        };
        let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "plot".into());
        let path = out.join(format!("{stem}.svg"));
        let mut w = create(&path)?;
        w.write_all(svg.as_bytes())?;
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}

fn parse_loss_csv(text: &str) -> Result<Vec<(usize, f64)>, CliError> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| CliError::data("empty loss file"))?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or_else(|| CliError::data(format!("missing column {name}")));
    let (ie, il) = (col("epoch")?, col("L_total")?);
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let epoch = f.get(ie).and_then(|v| v.parse().ok());
            let loss = f.get(il).and_then(|v| v.parse().ok());
            epoch.zip(loss).ok_or_else(|| CliError::data(format!("malformed loss row {l:?}")))
        })
        .collect()
}
