//! Contingency planning for an ego vehicle against the predicted modes of one
//! target vehicle (TV).
//!
//! One ego plan is produced per mode. All plans share their first control, so
//! the ego can commit to that control before it knows which mode will unfold.
//! The plans come from a single convex program over the stacked controls:
//!
//! ```text
//! min  Σ_n w_n J_n(u_0, u^n_1..u^n_{T-1})   s.t.  a_long, a_lat inside their boxes
//! J_n = Σ_k  w_track (y_k - y_ref)² + w_speed ((vx_k - v_des)² + vy_k²)
//!          + w_effort |u_{k-1}|² + w_prox max(0, 1 - d_k)²
//! ```
//!
//! `w_n = max(p_n, floor)` and `d_k` is the ego-TV offset at step `k`, scaled
//! by the safe ellipse and projected on a fixed unit normal. The normal comes
//! from a constant-velocity ego reference, so the hinge stays convex. Ego states
//! follow a double integrator at the dataset frame rate.
//!
//! The solver is a projected Newton method with an Armijo search along the
//! projection arc. The Hessian is the generalized Hessian of the piecewise
//! quadratic objective.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Manoeuvre, ManoeuvreVector};
use crate::model::{GaussianParams, ModePrediction};
use crate::scene::{Scene, VehicleId, VehicleState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("no predicted modes")]
    NoModes,
    #[error("infeasible control box: {0}")]
    InfeasibleBox(String),
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("mode {mode} has {got} steps, the planning horizon is {want}")]
    HorizonMismatch { mode: usize, got: usize, want: usize },
    #[error("invalid planner config: {0}")]
    Config(String),
    #[error("no other vehicle in the scene at frame {0}")]
    EmptyScene(usize),
    #[error("vehicle {id} is not present at frame {frame}")]
    UnknownVehicle { id: VehicleId, frame: usize },
}

/// Ego position and velocity in road coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

impl EgoState {
    pub fn is_finite(&self) -> bool {
        self.position.iter().chain(&self.velocity).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    /// Frame period of the dynamics, s.
    pub dt: f64,
    /// Steps per plan; must equal the prediction horizon.
    pub horizon: usize,
    /// Lateral reference for the ego (centre of its target lane).
    pub target_lat: f64,
    pub desired_speed: f64,
    pub w_track: f64,
    pub w_speed: f64,
    pub w_effort: f64,
    pub w_prox: f64,
    /// Semi-axes of the safe ellipse around the TV (long, lat), m.
    pub safe_ellipse: [f64; 2],
    pub a_long: (f64, f64),
    pub a_lat: (f64, f64),
    /// Lower bound on branch weights so that unlikely modes stay well posed.
    pub weight_floor: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            dt: 0.2,
            horizon: 25,
            target_lat: 0.0,
            desired_speed: 25.0,
            w_track: 1.0,
            w_speed: 0.5,
            w_effort: 0.1,
            w_prox: 50.0,
            safe_ellipse: [10.0, 2.0],
            a_long: (-5.0, 3.0),
            a_lat: (-1.0, 1.0),
            weight_floor: 1e-3,
            tol: 1e-10,
            max_iter: 200,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        for (name, (lo, hi)) in [("a_long", self.a_long), ("a_lat", self.a_lat)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(PlanError::InfeasibleBox(format!("{name} = [{lo}, {hi}]")));
            }
        }
        let weights = [self.w_track, self.w_speed, self.w_prox];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(PlanError::Config("cost weights must be finite and non-negative".into()));
        }
        if !(self.w_effort > 0.0 && self.w_effort.is_finite()) {
            return Err(PlanError::Config("w_effort must be positive".into()));
        }
        if !(self.dt > 0.0 && self.horizon > 0) {
            return Err(PlanError::Config("dt and horizon must be positive".into()));
        }
        if !(self.safe_ellipse.iter().all(|s| *s > 0.0) && self.weight_floor > 0.0) {
            return Err(PlanError::Config("safe ellipse and weight floor must be positive".into()));
        }
        if !(self.target_lat.is_finite() && self.desired_speed.is_finite()) {
            return Err(PlanError::NonFinite("target_lat / desired_speed".into()));
        }
        Ok(())
    }

    fn bounds(&self, axis: usize) -> (f64, f64) {
        if axis == 0 {
            self.a_long
        } else {
            self.a_lat
        }
    }
}

/// Predicted modes of the TV with their common origin (TV position at the
/// prediction time); mode trajectories are relative to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvPrediction {
    pub origin: [f64; 2],
    pub modes: Vec<ModePrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContingencyPlan {
    /// `controls[n][k]` = (a_long, a_lat) applied over step `k`.
    pub controls: Vec<Vec<[f64; 2]>>,
    /// `states[n][k]` = (x, y, vx, vy) after `k` steps; `states[n][0]` is the ego.
    pub states: Vec<Vec<[f64; 4]>>,
    /// Unweighted branch costs `J_n`.
    pub costs: Vec<f64>,
    pub probs: Vec<f64>,
    pub weights: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub objective_history: Vec<f64>,
    pub kkt_residual: f64,
}

/// Advances one double-integrator step.
pub fn step_dynamics(s: [f64; 4], u: [f64; 2], dt: f64) -> [f64; 4] {
    [
        s[0] + s[2] * dt + 0.5 * u[0] * dt * dt,
        s[1] + s[3] * dt + 0.5 * u[1] * dt * dt,
        s[2] + u[0] * dt,
        s[3] + u[1] * dt,
    ]
}

pub fn rollout(ego: &EgoState, controls: &[[f64; 2]], dt: f64) -> Vec<[f64; 4]> {
    let mut s = [ego.position[0], ego.position[1], ego.velocity[0], ego.velocity[1]];
    let mut out = Vec::with_capacity(controls.len() + 1);
    out.push(s);
    for &u in controls {
        s = step_dynamics(s, u, dt);
        out.push(s);
    }
    out
}

/// One cost term `w φ(a·U + c)` of a branch, with `U` the branch's stacked
/// controls; `φ(s) = s²`, or `max(0, s)²` for hinge rows.
#[derive(Debug, Clone)]
struct Row {
    a: Vec<f64>,
    c: f64,
    w: f64,
    hinge: bool,
}

impl Row {
    fn eval(&self, u: &[f64]) -> f64 {
        self.c + self.a.iter().zip(u).map(|(a, x)| a * x).sum::<f64>()
    }

    fn active(&self, s: f64) -> bool {
        !self.hinge || s > 0.0
    }
}

/// The stacked program: variables are `u_0` followed by `u_1..u_{T-1}` of
/// every branch, each control as (a_long, a_lat).
///
/// Modes with bit-identical mean trajectories share one branch whose weight
/// is the sum of theirs; the optimal controls of a branch do not depend on
/// its weight, so every such mode gets exactly the same plan.
#[derive(Debug, Clone)]
pub struct ContingencyProblem {
    horizon: usize,
    branches: usize,
    /// Branch of every mode.
    branch_of: Vec<usize>,
    weights: Vec<f64>,
    rows: Vec<Vec<Row>>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl ContingencyProblem {
    pub fn new(ego: &EgoState, tv: &TvPrediction, cfg: &PlannerConfig) -> Result<Self, PlanError> {
        cfg.validate()?;
        if tv.modes.is_empty() {
            return Err(PlanError::NoModes);
        }
        if !ego.is_finite() || !tv.origin.iter().all(|v| v.is_finite()) {
            return Err(PlanError::NonFinite("ego state or TV origin".into()));
        }
        let t = cfg.horizon;
        for (n, m) in tv.modes.iter().enumerate() {
            if m.traj_params.len() != t {
                return Err(PlanError::HorizonMismatch { mode: n, got: m.traj_params.len(), want: t });
            }
            if !m.prob.is_finite() || m.traj_params.iter().any(|g| !(g.mu_long.is_finite() && g.mu_lat.is_finite())) {
                return Err(PlanError::NonFinite(format!("mode {n}")));
            }
        }
        let dt = cfg.dt;
        let width = 2 * t;
        // Position and velocity of axis `ax` after `k` steps as affine maps of U.
        let position = |k: usize, ax: usize| {
            let mut a = vec![0.0; width];
            for j in 0..k {
                a[2 * j + ax] = (k - j) as f64 * dt * dt - 0.5 * dt * dt;
            }
            (a, ego.position[ax] + k as f64 * dt * ego.velocity[ax])
        };
        let velocity = |k: usize, ax: usize| {
            let mut a = vec![0.0; width];
            for j in 0..k {
                a[2 * j + ax] = dt;
            }
            (a, ego.velocity[ax])
        };

        let mut branch_of = Vec::with_capacity(tv.modes.len());
        let mut leaders: Vec<usize> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for (n, mode) in tv.modes.iter().enumerate() {
            let w = mode.prob.max(cfg.weight_floor);
            let same = |&l: &usize| {
                tv.modes[l].traj_params.iter().zip(&mode.traj_params).all(|(a, b)| {
                    a.mu_long.to_bits() == b.mu_long.to_bits() && a.mu_lat.to_bits() == b.mu_lat.to_bits()
                })
            };
            match leaders.iter().position(same) {
                Some(b) => {
                    weights[b] += w;
                    branch_of.push(b);
                }
                None => {
                    branch_of.push(leaders.len());
                    leaders.push(n);
                    weights.push(w);
                }
            }
        }

        let mut rows = Vec::with_capacity(leaders.len());
        for mode in leaders.iter().map(|&l| &tv.modes[l]) {
            let mut r = Vec::with_capacity(6 * t);
            for k in 1..=t {
                let (a, c) = position(k, 1);
                r.push(Row { a, c: c - cfg.target_lat, w: cfg.w_track, hinge: false });
                let (a, c) = velocity(k, 0);
                r.push(Row { a, c: c - cfg.desired_speed, w: cfg.w_speed, hinge: false });
                let (a, c) = velocity(k, 1);
                r.push(Row { a, c, w: cfg.w_speed, hinge: false });
            }
            for i in 0..width {
                let mut a = vec![0.0; width];
                a[i] = 1.0;
                r.push(Row { a, c: 0.0, w: cfg.w_effort, hinge: false });
            }
            if cfg.w_prox > 0.0 {
                for (k, g) in (1..=t).zip(&mode.traj_params) {
                    let tv_pos = [tv.origin[0] + g.mu_long, tv.origin[1] + g.mu_lat];
                    let normal = proximity_normal(ego, tv_pos, k as f64 * dt, cfg.safe_ellipse);
                    // 1 - n·((p_k - m_k) / s) with p_k affine in U.
                    let mut a = vec![0.0; width];
                    let mut c = 1.0;
                    for ax in 0..2 {
                        let (pa, pc) = position(k, ax);
                        let f = normal[ax] / cfg.safe_ellipse[ax];
                        for (ai, pi) in a.iter_mut().zip(&pa) {
                            *ai -= f * pi;
                        }
                        c -= f * (pc - tv_pos[ax]);
                    }
                    r.push(Row { a, c, w: cfg.w_prox, hinge: true });
                }
            }
            rows.push(r);
        }
        let n = 2 + leaders.len() * (width - 2);
        let (lo, hi) = (0..n).map(|i| cfg.bounds(i % 2)).unzip();
        Ok(Self { horizon: t, branches: leaders.len(), branch_of, weights, rows, lo, hi })
    }

    pub fn branches(&self) -> usize {
        self.branches
    }

    pub fn branch_of_mode(&self, mode: usize) -> usize {
        self.branch_of[mode]
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lo
    }

    pub fn upper(&self) -> &[f64] {
        &self.hi
    }

    fn global(&self, branch: usize, local: usize) -> usize {
        if local < 2 {
            local
        } else {
            2 + branch * (2 * self.horizon - 2) + local - 2
        }
    }

    /// Stacked controls of one branch.
    pub fn branch_controls(&self, z: &[f64], branch: usize) -> Vec<[f64; 2]> {
        (0..self.horizon).map(|k| [z[self.global(branch, 2 * k)], z[self.global(branch, 2 * k + 1)]]).collect()
    }

    fn branch_vector(&self, z: &[f64], branch: usize) -> Vec<f64> {
        (0..2 * self.horizon).map(|i| z[self.global(branch, i)]).collect()
    }

    pub fn branch_cost(&self, z: &[f64], branch: usize) -> f64 {
        let u = self.branch_vector(z, branch);
        self.rows[branch]
            .iter()
            .map(|r| {
                let s = r.eval(&u);
                if r.active(s) {
                    r.w * s * s
                } else {
                    0.0
                }
            })
            .sum()
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        (0..self.branches).map(|b| self.weights[b] * self.branch_cost(z, b)).sum()
    }

    pub fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        for b in 0..self.branches {
            let u = self.branch_vector(z, b);
            for r in &self.rows[b] {
                let s = r.eval(&u);
                if !r.active(s) {
                    continue;
                }
                let f = 2.0 * self.weights[b] * r.w * s;
                for (i, a) in r.a.iter().enumerate().filter(|(_, a)| **a != 0.0) {
                    g[self.global(b, i)] += f * a;
                }
            }
        }
        g
    }

    /// Generalized Hessian at `z`; with `all_hinges` every hinge row counts as
    /// active, which bounds the Hessian everywhere.
    pub fn hessian(&self, z: &[f64], all_hinges: bool) -> DMatrix<f64> {
        let n = self.dim();
        let mut h = DMatrix::zeros(n, n);
        for b in 0..self.branches {
            let u = self.branch_vector(z, b);
            for r in &self.rows[b] {
                if !(all_hinges || r.active(r.eval(&u))) {
                    continue;
                }
                let f = 2.0 * self.weights[b] * r.w;
                let nz: Vec<(usize, f64)> =
                    r.a.iter().enumerate().filter(|(_, a)| **a != 0.0).map(|(i, a)| (self.global(b, i), *a)).collect();
                for &(i, ai) in &nz {
                    for &(j, aj) in &nz {
                        h[(i, j)] += f * ai * aj;
                    }
                }
            }
        }
        h
    }

    pub fn project(&self, z: &mut [f64]) {
        for ((v, lo), hi) in z.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(*lo, *hi);
        }
    }

    /// `‖z - P(z - ∇f(z))‖_∞`, zero exactly at the box-constrained optimum.
    pub fn kkt_residual(&self, z: &[f64]) -> f64 {
        let g = self.gradient(z);
        z.iter()
            .zip(&g)
            .zip(self.lo.iter().zip(&self.hi))
            .map(|((v, gi), (lo, hi))| (v - (v - gi).clamp(*lo, *hi)).abs())
            .fold(0.0, f64::max)
    }

    /// Projected Newton solve from `z = 0` (clamped into the box). Returns the
    /// solution and the objective after every iteration.
    pub fn solve(&self, tol: f64, max_iter: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.dim();
        let mut z = vec![0.0; n];
        self.project(&mut z);
        let mut f = self.objective(&z);
        let mut history = vec![f];
        for _ in 0..max_iter {
            let g = self.gradient(&z);
            let residual = self.kkt_residual(&z);
            if residual <= tol {
                break;
            }
            let eps = residual.min(1e-3);
            let active: Vec<bool> = (0..n)
                .map(|i| (z[i] <= self.lo[i] + eps && g[i] > 0.0) || (z[i] >= self.hi[i] - eps && g[i] < 0.0))
                .collect();
            let h = self.hessian(&z, false);
            let mut d = vec![0.0; n];
            let free: Vec<usize> = (0..n).filter(|&i| !active[i]).collect();
            for i in (0..n).filter(|&i| active[i]) {
                d[i] = -g[i] / h[(i, i)].max(1e-12);
            }
            if !free.is_empty() {
                let hff = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
                let gf = DVector::from_iterator(free.len(), free.iter().map(|&i| -g[i]));
                match hff.cholesky() {
                    Some(ch) => {
                        let sol = ch.solve(&gf);
                        for (k, &i) in free.iter().enumerate() {
                            d[i] = sol[k];
                        }
                    }
                    None => {
                        for &i in &free {
                            d[i] = -g[i] / h[(i, i)].max(1e-12);
                        }
                    }
                }
            }
            let mut alpha = 1.0;
            let mut accepted = None;
            while alpha > 1e-20 {
                let mut trial: Vec<f64> = z.iter().zip(&d).map(|(v, di)| v + alpha * di).collect();
                self.project(&mut trial);
                let decrease: f64 = g.iter().zip(trial.iter().zip(&z)).map(|(gi, (t, v))| gi * (t - v)).sum();
                let ft = self.objective(&trial);
                if ft <= f + 1e-4 * decrease && ft <= f {
                    accepted = Some((trial, ft));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((trial, ft)) = accepted else { break };
            z = trial;
            f = ft;
            history.push(f);
        }
        (z, history)
    }
}

/// Unit normal (in ellipse-scaled coordinates) from the TV towards a
/// constant-velocity ego reference `t` seconds ahead.
fn proximity_normal(ego: &EgoState, tv_pos: [f64; 2], t: f64, scale: [f64; 2]) -> [f64; 2] {
    let e = [
        (ego.position[0] + t * ego.velocity[0] - tv_pos[0]) / scale[0],
        (ego.position[1] + t * ego.velocity[1] - tv_pos[1]) / scale[1],
    ];
    let norm = e[0].hypot(e[1]);
    if norm < 1e-9 {
        [1.0, 0.0]
    } else {
        [e[0] / norm, e[1] / norm]
    }
}

pub fn plan_contingency(ego: &EgoState, tv: &TvPrediction, cfg: &PlannerConfig) -> Result<ContingencyPlan, PlanError> {
    let problem = ContingencyProblem::new(ego, tv, cfg)?;
    let (z, objective_history) = problem.solve(cfg.tol, cfg.max_iter);
    let modes = 0..tv.modes.len();
    let controls: Vec<Vec<[f64; 2]>> = modes.clone().map(|n| problem.branch_controls(&z, problem.branch_of[n])).collect();
    let states = controls.iter().map(|c| rollout(ego, c, cfg.dt)).collect();
    Ok(ContingencyPlan {
        costs: modes.clone().map(|n| problem.branch_cost(&z, problem.branch_of[n])).collect(),
        probs: tv.modes.iter().map(|m| m.prob).collect(),
        weights: modes.map(|n| tv.modes[n].prob.max(cfg.weight_floor)).collect(),
        objective: problem.objective(&z),
        iterations: objective_history.len() - 1,
        kkt_residual: problem.kkt_residual(&z),
        objective_history,
        controls,
        states,
    })
}

/// The nearest vehicle behind the ego in its left adjacent lane, or the
/// nearest other vehicle when that slot is empty. Ties go to the lower id.
pub fn select_target_vehicle(scene: &Scene, ego: VehicleId, t: usize) -> Result<VehicleId, PlanError> {
    let me = scene.state(ego, t).ok_or(PlanError::UnknownVehicle { id: ego, frame: t })?;
    let others: Vec<_> = scene.states_at(t).into_iter().filter(|s| s.id != ego).collect();
    if others.is_empty() {
        return Err(PlanError::EmptyScene(t));
    }
    let g = &scene.geometry;
    let left = g.nearest_lane(me.kin.y) + 1;
    let nearest = |key: &dyn Fn(&VehicleState) -> Option<f64>| {
        others
            .iter()
            .filter_map(|s| key(s).map(|d| (d, s.id)))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, id)| id)
    };
    let behind_left = nearest(&|s| {
        let gap = me.kin.x - s.kin.x;
        (left < g.lane_count && g.lane_of(s.kin.y) == Some(left) && gap > 0.0).then_some(gap)
    });
    Ok(behind_left
        .or_else(|| nearest(&|s| Some((s.kin.x - me.kin.x).hypot(s.kin.y - me.kin.y))))
        .expect("others is non-empty"))
}

/// A randomized merge situation: the ego sits in the right lane and wants the
/// left one, where the TV approaches from behind with `n_modes` possible
/// futures (keep speed, yield, speed up, move right).
#[derive(Debug, Clone, PartialEq)]
pub struct MergeCase {
    pub ego: EgoState,
    pub tv: TvPrediction,
    pub cfg: PlannerConfig,
}

pub fn random_merge_case(seed: u64, n_modes: usize, horizon: usize, dt: f64) -> MergeCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lane_width = 3.75;
    let ego = EgoState {
        position: [rng.random_range(0.0..50.0), 0.5 * lane_width + rng.random_range(-0.5..0.5)],
        velocity: [rng.random_range(15.0..30.0), rng.random_range(-0.3..0.3)],
    };
    let origin = [ego.position[0] - rng.random_range(2.0..30.0), 1.5 * lane_width + rng.random_range(-0.3..0.3)];
    let v_tv = rng.random_range(15.0..32.0);
    let raw: Vec<f64> = (0..n_modes).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let modes = (0..n_modes)
        .map(|n| {
            let accel = [0.0, -1.5, 1.0, 0.0][n % 4] + rng.random_range(-0.3..0.3);
            let shift = if n % 4 == 3 { -lane_width } else { 0.0 };
            let traj_params = (1..=horizon)
                .map(|k| {
                    let tk = k as f64 * dt;
                    let frac = (tk / (horizon as f64 * dt)).min(1.0);
                    GaussianParams {
                        mu_long: v_tv * tk + 0.5 * accel * tk * tk,
                        mu_lat: shift * frac * frac * (3.0 - 2.0 * frac),
                        sigma_long: 1.0,
                        sigma_lat: 0.5,
                        rho: 0.0,
                    }
                })
                .collect();
            let kind = if shift != 0.0 { Manoeuvre::RightLaneChange } else { Manoeuvre::LaneKeep };
            ModePrediction {
                manoeuvre: ManoeuvreVector::from_parts(vec![kind; 3], &[0.0, 0.0]).expect("three types, two times"),
                traj_params,
                prob: raw[n] / total,
            }
        })
        .collect();
    let cfg = PlannerConfig {
        dt,
        horizon,
        target_lat: 1.5 * lane_width,
        desired_speed: rng.random_range(20.0..30.0),
        ..PlannerConfig::default()
    };
    MergeCase { ego, tv: TvPrediction { origin, modes }, cfg }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case(seed: u64, n: usize) -> MergeCase {
        random_merge_case(seed, n, 25, 0.2)
    }

    #[test]
    fn first_control_is_shared_and_dynamics_hold() {
        let c = case(3, 3);
        let plan = plan_contingency(&c.ego, &c.tv, &c.cfg).unwrap();
        for b in 1..3 {
            assert_eq!(plan.controls[b][0].map(f64::to_bits), plan.controls[0][0].map(f64::to_bits));
        }
        for (ctrl, states) in plan.controls.iter().zip(&plan.states) {
            assert_eq!(states, &rollout(&c.ego, ctrl, c.cfg.dt));
        }
        assert!(plan.kkt_residual < 1e-6, "{}", plan.kkt_residual);
    }

    #[test]
    fn gradient_matches_differences() {
        let c = case(7, 2);
        let p = ContingencyProblem::new(&c.ego, &c.tv, &c.cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z: Vec<f64> = (0..p.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = p.gradient(&z);
        for i in (0..p.dim()).step_by(7) {
            let h = 1e-6;
            let mut zp = z.clone();
            zp[i] += h;
            let mut zm = z.clone();
            zm[i] -= h;
            let fd = (p.objective(&zp) - p.objective(&zm)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-5 * g[i].abs().max(1.0), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn objective_never_increases() {
        for seed in 0..5 {
            let c = case(seed, 4);
            let plan = plan_contingency(&c.ego, &c.tv, &c.cfg).unwrap();
            assert!(plan.objective_history.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn controls_respect_the_box() {
        let mut c = case(11, 3);
        c.cfg.a_long = (-0.5, 0.5);
        let plan = plan_contingency(&c.ego, &c.tv, &c.cfg).unwrap();
        for u in plan.controls.iter().flatten() {
            assert!((-0.5..=0.5).contains(&u[0]) && (-1.0..=1.0).contains(&u[1]));
        }
        assert!(plan.kkt_residual < 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = case(0, 2);
        let mut cfg = c.cfg.clone();
        cfg.a_lat = (1.0, -1.0);
        assert!(matches!(plan_contingency(&c.ego, &c.tv, &cfg), Err(PlanError::InfeasibleBox(_))));
        let mut tv = c.tv.clone();
        tv.modes[1].traj_params[4].mu_lat = f64::NAN;
        assert!(matches!(plan_contingency(&c.ego, &tv, &c.cfg), Err(PlanError::NonFinite(_))));
        tv.modes.clear();
        assert_eq!(plan_contingency(&c.ego, &tv, &c.cfg), Err(PlanError::NoModes));
        let mut tv = c.tv.clone();
        tv.modes[0].traj_params.pop();
        assert!(matches!(plan_contingency(&c.ego, &tv, &c.cfg), Err(PlanError::HorizonMismatch { mode: 0, .. })));
    }
}
