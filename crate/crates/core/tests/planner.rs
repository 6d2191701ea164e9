use mmntp_core::planner::*;
use mmntp_core::scene::{Kinematics, LaneGeometry, Scene, Track};
use nalgebra::{Matrix2, Matrix2x4, Matrix4, Matrix4x2, Vector2, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_ITERS: usize = 10_000;

/// Accelerated projected gradient in a diagonal (Jacobi) metric with
/// adaptive restart. The box projection stays a coordinate clamp in that metric.
fn fista(p: &ContingencyProblem) -> (Vec<f64>, usize) {
    let n = p.dim();
    let bound = p.hessian(&vec![0.0; n], true);
    let scale: Vec<f64> = (0..n).map(|i| 1.0 / bound[(i, i)].sqrt()).collect();
    let scaled = nalgebra::DMatrix::from_fn(n, n, |i, j| bound[(i, j)] * scale[i] * scale[j]);
    let step = 1.0 / scaled.symmetric_eigen().eigenvalues.max();
    let mut x = vec![0.0; n];
    p.project(&mut x);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut f_prev = p.objective(&x);
    for it in 0..ORACLE_ITERS {
        let g = p.gradient(&y);
        let mut next: Vec<f64> = (0..n).map(|i| y[i] - step * scale[i] * scale[i] * g[i]).collect();
        p.project(&mut next);
        let f = p.objective(&next);
        if f > f_prev {
            t = 1.0;
            y = x.clone();
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = next.iter().zip(&x).map(|(a, b)| a + (t - 1.0) / t_next * (a - b)).collect();
        x = next;
        t = t_next;
        f_prev = f;
        if it % 25 == 0 && p.kkt_residual(&x) < 1e-9 {
            return (x, it);
        }
    }
    (x, ORACLE_ITERS)
}

#[test]
fn fifty_merge_scenes_against_projected_gradient_oracle() {
    for seed in 0..50 {
        let n = 1 + (seed as usize % 4);
        let c = random_merge_case(seed, n, 25, 0.2);
        let plan = plan_contingency(&c.ego, &c.tv, &c.cfg).unwrap();
        for b in 0..n {
            assert_eq!(plan.controls[b][0].map(f64::to_bits), plan.controls[0][0].map(f64::to_bits), "seed {seed}");
            let mut s = plan.states[b][0];
            for (k, u) in plan.controls[b].iter().enumerate() {
                s = step_dynamics(s, *u, c.cfg.dt);
                for (a, e) in s.iter().zip(&plan.states[b][k + 1]) {
                    assert!((a - e).abs() <= 1e-9, "seed {seed} branch {b} step {k}");
                }
            }
        }
        assert!(plan.kkt_residual < 1e-6, "seed {seed}: residual {}", plan.kkt_residual);
        assert!(plan.objective_history.windows(2).all(|w| w[1] <= w[0]), "seed {seed}");

        let problem = ContingencyProblem::new(&c.ego, &c.tv, &c.cfg).unwrap();
        let (oracle, _) = fista(&problem);
        let f_oracle = problem.objective(&oracle);
        let scale = f_oracle.abs().max(1.0);
        // The Newton point is optimal: no feasible point may beat it, and the
        // slower first-order oracle must approach it from above.
        assert!(plan.objective <= f_oracle + 1e-10 * scale, "seed {seed}: {} vs {f_oracle}", plan.objective);
        assert!(f_oracle - plan.objective <= 1e-6 * scale, "seed {seed}: {} vs {f_oracle}", plan.objective);
    }
}

#[test]
fn identical_modes_give_identical_plans() {
    let mut c = random_merge_case(5, 1, 25, 0.2);
    let mut mode = c.tv.modes[0].clone();
    mode.prob = 0.25;
    c.tv.modes = vec![mode; 4];
    let plan = plan_contingency(&c.ego, &c.tv, &c.cfg).unwrap();
    for b in 1..4 {
        assert_eq!(plan.controls[b], plan.controls[0]);
        assert_eq!(plan.states[b], plan.states[0]);
    }
}

/// Finite-horizon Riccati recursion with affine tracking terms.
fn lqr(ego: &EgoState, cfg: &PlannerConfig) -> Vec<[f64; 2]> {
    let dt = cfg.dt;
    let a = Matrix4::new(1.0, 0.0, dt, 0.0, 0.0, 1.0, 0.0, dt, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let b = Matrix4x2::new(0.5 * dt * dt, 0.0, 0.0, 0.5 * dt * dt, dt, 0.0, 0.0, dt);
    let q = Matrix4::from_diagonal(&Vector4::new(0.0, cfg.w_track, cfg.w_speed, cfg.w_speed));
    let r = Matrix2::identity() * cfg.w_effort;
    let target = Vector4::new(0.0, cfg.target_lat, cfg.desired_speed, 0.0);
    let mut p = q;
    let mut lin = -(q * target);
    let mut gains: Vec<(Matrix2x4<f64>, Vector2<f64>)> = Vec::new();
    for _ in 0..cfg.horizon {
        let s_inv = (r + b.transpose() * p * b).try_inverse().unwrap();
        let k = s_inv * b.transpose() * p * a;
        let kff = s_inv * b.transpose() * lin;
        gains.push((k, kff));
        let closed = a - b * k;
        lin = -(q * target) + closed.transpose() * lin;
        p = q + a.transpose() * p * closed;
    }
    gains.reverse();
    let mut x = Vector4::new(ego.position[0], ego.position[1], ego.velocity[0], ego.velocity[1]);
    gains
        .iter()
        .map(|(k, kff)| {
            let u = -(k * x) - kff;
            x = a * x + b * u;
            [u[0], u[1]]
        })
        .collect()
}

#[test]
fn single_mode_without_proximity_matches_lqr() {
    for seed in 0..10 {
        let mut c = random_merge_case(100 + seed, 1, 25, 0.2);
        c.cfg.w_prox = 0.0;
        c.cfg.a_long = (-1e3, 1e3);
        c.cfg.a_lat = (-1e3, 1e3);
        let plan = plan_contingency(&c.ego, &c.tv, &c.cfg).unwrap();
        let expect = lqr(&c.ego, &c.cfg);
        for (u, e) in plan.controls[0].iter().zip(&expect) {
            assert!((u[0] - e[0]).abs() < 1e-6 && (u[1] - e[1]).abs() < 1e-6, "seed {seed}: {u:?} vs {e:?}");
        }
    }
}

fn scene_with(vehicles: &[(f64, f64)]) -> Scene {
    Scene {
        id: 0,
        fps: 5,
        geometry: LaneGeometry::straight(3, 3.75).unwrap(),
        tracks: vehicles
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| Track {
                id: i as u32,
                length: 4.5,
                width: 1.8,
                first_frame: 0,
                states: vec![Kinematics { x, y, vx: 20.0, ..Default::default() }],
            })
            .collect(),
        duration: 1,
    }
}

#[test]
fn target_selection_trivial_cases() {
    let s = scene_with(&[(100.0, 1.8), (90.0, 5.6)]);
    assert_eq!(select_target_vehicle(&s, 0, 0).unwrap(), 1);
    let s = scene_with(&[(100.0, 1.8), (130.0, 1.8), (80.0, 1.9)]);
    assert_eq!(select_target_vehicle(&s, 0, 0).unwrap(), 2);
    let s = scene_with(&[(100.0, 1.8)]);
    assert_eq!(select_target_vehicle(&s, 0, 0), Err(PlanError::EmptyScene(0)));
    assert!(matches!(select_target_vehicle(&s, 7, 0), Err(PlanError::UnknownVehicle { id: 7, .. })));
}

#[test]
fn target_selection_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..500 {
        let count = rng.random_range(2..25);
        let v: Vec<(f64, f64)> =
            (0..count).map(|_| (rng.random_range(0.0..200.0), rng.random_range(0.2..11.0))).collect();
        let s = scene_with(&v);
        let ego = rng.random_range(0..count) as u32;
        let (ex, ey) = v[ego as usize];
        let left = (ey / 3.75).floor() as i64 + 1;
        let mut best: Option<(f64, u32)> = None;
        for (i, &(x, y)) in v.iter().enumerate() {
            let lane = (y / 3.75).floor() as i64;
            if i as u32 != ego && lane == left && x < ex {
                let gap = ex - x;
                if best.is_none_or(|(g, _)| gap < g) {
                    best = Some((gap, i as u32));
                }
            }
        }
        if best.is_none() {
            for (i, &(x, y)) in v.iter().enumerate() {
                let d = (x - ex).hypot(y - ey);
                if i as u32 != ego && best.is_none_or(|(g, _)| d < g) {
                    best = Some((d, i as u32));
                }
            }
        }
        assert_eq!(select_target_vehicle(&s, ego, 0).unwrap(), best.unwrap().1);
    }
}
