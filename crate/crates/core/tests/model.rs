use mmntp_core::codec::{HorizonConfig, LabelSequence, Manoeuvre};
use mmntp_core::model::*;
use mmntp_core::nn::positional_encoding;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(variant: ModeSelection) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 8,
        mlp_hidden: 8,
        n_modes: 3,
        t_obs: 5,
        horizon: HorizonConfig::new(10, 5, 5).unwrap(),
        variant,
        ..ModelConfig::desk()
    }
}

fn observation(rng: &mut ChaCha8Rng, cfg: &ModelConfig, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((cfg.t_obs, cfg.n_features), |_| rng.random_range(-scale..scale))
}

#[test]
fn a_thousand_seeds_give_finite_well_formed_outputs() {
    for seed in 0..1000u64 {
        let variant = if seed % 2 == 0 { ModeSelection::Mmp } else { ModeSelection::Mtp };
        let cfg = small(variant);
        let model = Model::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs = observation(&mut rng, &cfg, if seed % 10 == 0 { 1e3 } else { 3.0 });

        let pred = model.predict_manoeuvres(&obs).unwrap();
        assert!((pred.mode_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12, "seed {seed}");
        for mode in &pred.type_probs {
            assert_eq!(mode.len(), cfg.periods() + 1);
            for q in mode {
                assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12 && q.iter().all(|p| *p >= 0.0));
            }
        }
        assert!(pred.transition_times.iter().flatten().all(|v| (0.0..=1.0).contains(v)));

        let modes = model.infer(&obs).unwrap();
        assert_eq!(modes.len(), cfg.n_modes);
        assert!(modes.windows(2).all(|w| w[0].prob >= w[1].prob));
        for m in &modes {
            assert_eq!(m.traj_params.len(), cfg.t_pred());
            for g in &m.traj_params {
                assert!(g.is_valid(), "seed {seed}: {g:?}");
                assert!((SIGMA_MIN..=SIGMA_MAX).contains(&g.sigma_long));
                assert!((SIGMA_MIN..=SIGMA_MAX).contains(&g.sigma_lat));
                assert!(g.rho.abs() <= RHO_MAX);
            }
        }
    }
}

fn random_labels(rng: &mut ChaCha8Rng, len: usize) -> LabelSequence {
    LabelSequence((0..len).map(|_| Manoeuvre::from_index(rng.random_range(0..3)).unwrap()).collect())
}

fn random_traj(rng: &mut ChaCha8Rng, len: usize) -> Vec<[f64; 2]> {
    (1..=len).map(|k| [5.0 * k as f64 + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()
}

#[test]
fn decoder_output_at_step_t_ignores_later_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for variant in [ModeSelection::Mmp, ModeSelection::Mtp] {
        let cfg = small(variant);
        let tp = cfg.t_pred();
        for seed in 0..20 {
            let model = Model::new(cfg, seed).unwrap();
            let obs = observation(&mut rng, &cfg, 2.0);
            let labels = random_labels(&mut rng, tp);
            let traj = random_traj(&mut rng, tp);
            let base = model.decode_teacher_forced(&obs, &labels, &traj, 1).unwrap();
            let cut = rng.random_range(0..tp);
            // Step t sees positions up to t - 1 and labels up to t.
            let mut traj2 = traj.clone();
            for p in &mut traj2[cut..] {
                p[0] += rng.random_range(-5.0..5.0);
                p[1] += rng.random_range(-5.0..5.0);
            }
            let mut labels2 = labels.clone();
            for l in &mut labels2.0[cut + 1..] {
                *l = Manoeuvre::from_index((l.index() + 1) % 3).unwrap();
            }
            let out = model.decode_teacher_forced(&obs, &labels2, &traj2, 1).unwrap();
            assert_eq!(&out[..=cut], &base[..=cut], "{variant:?} seed {seed} cut {cut}");
            if cut + 2 < tp {
                assert_ne!(out[cut + 2], base[cut + 2]);
            }
        }
    }
}

fn head_tensors(model: &Model) -> (usize, usize) {
    let names = &model.params().names;
    (
        names.iter().position(|n| n == "dec.heads.w").unwrap(),
        names.iter().position(|n| n == "dec.heads.b").unwrap(),
    )
}

/// Scrambles the weights of head `h` only.
fn scramble_head(model: &mut Model, h: usize, rng: &mut ChaCha8Rng) {
    let (w, b) = head_tensors(model);
    let values = model.values_mut();
    for i in [w, b] {
        for mut row in values[i].rows_mut() {
            for c in HEAD_WIDTH * h..HEAD_WIDTH * (h + 1) {
                row[c] += rng.random_range(-1.0..1.0);
            }
        }
    }
}

#[test]
fn each_step_uses_the_head_of_its_label() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = small(ModeSelection::Mmp);
    let tp = cfg.t_pred();
    assert_eq!(cfg.routed_heads(), 3);
    for seed in 0..30 {
        let model = Model::new(cfg, seed).unwrap();
        let obs = observation(&mut rng, &cfg, 2.0);
        let labels = random_labels(&mut rng, tp);
        let traj = random_traj(&mut rng, tp);
        let base = model.decode_teacher_forced(&obs, &labels, &traj, 0).unwrap();
        for h in 0..3 {
            let mut changed = model.clone();
            scramble_head(&mut changed, h, &mut rng);
            let out = changed.decode_teacher_forced(&obs, &labels, &traj, 0).unwrap();
            // Means are cumulative, so only sigma and rho are per-step.
            for t in 0..tp {
                let same = (out[t].sigma_long, out[t].sigma_lat, out[t].rho)
                    == (base[t].sigma_long, base[t].sigma_lat, base[t].rho);
                assert_eq!(same, labels.0[t].index() != h, "seed {seed} head {h} step {t}");
            }
        }
    }
}

#[test]
fn mode_conditioned_variant_shares_one_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = small(ModeSelection::Mtp);
    assert_eq!(cfg.routed_heads(), 1);
    let model = Model::new(cfg, 0).unwrap();
    let obs = observation(&mut rng, &cfg, 2.0);
    let labels = random_labels(&mut rng, cfg.t_pred());
    let traj = random_traj(&mut rng, cfg.t_pred());
    let a = model.decode_teacher_forced(&obs, &labels, &traj, 0).unwrap();
    let b = model.decode_teacher_forced(&obs, &labels, &traj, 2).unwrap();
    assert_ne!(a, b);
    // Labels do not enter the mode-conditioned decoder.
    let other = random_labels(&mut rng, cfg.t_pred());
    assert_eq!(model.decode_teacher_forced(&obs, &other, &traj, 0).unwrap(), a);
}

#[test]
fn positional_encoding_matches_closed_form() {
    for d in [4usize, 8, 64] {
        let pe = positional_encoding(30, d);
        for pos in 0..30 {
            for i in 0..d / 2 {
                let angle = pos as f64 * (-((2 * i) as f64) * 10000f64.ln() / d as f64).exp();
                assert!((pe[[pos, 2 * i]] - angle.sin()).abs() < 1e-12);
                assert!((pe[[pos, 2 * i + 1]] - angle.cos()).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for variant in [ModeSelection::Mmp, ModeSelection::Mtp] {
        let cfg = small(variant);
        let model = Model::new(cfg, 5).unwrap();
        let obs = observation(&mut rng, &cfg, 2.0);
        let mut buf = Vec::new();
        let run = serde_json::json!({ "seed": 5 });
        model.save(&mut buf, Some(&run)).unwrap();
        let (back, embedded) = Model::load(buf.as_slice()).unwrap();
        assert_eq!(embedded, Some(run));
        assert_eq!(back.infer(&obs).unwrap(), model.infer(&obs).unwrap());
    }
}

#[test]
fn wrong_observation_shape_is_rejected() {
    let cfg = small(ModeSelection::Mmp);
    let model = Model::new(cfg, 0).unwrap();
    assert!(model.infer(&Array2::zeros((cfg.t_obs + 1, cfg.n_features))).is_err());
    assert!(model.infer(&Array2::zeros((cfg.t_obs, cfg.n_features - 1))).is_err());
    let mut bad = Array2::zeros((cfg.t_obs, cfg.n_features));
    bad[[0, 0]] = f64::NAN;
    assert!(model.infer(&bad).is_err());
}
