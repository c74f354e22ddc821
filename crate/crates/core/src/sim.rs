//! Closed-loop execution: EKF state estimation, policy playback with and
//! without feedback, and the repeated-run study.
//!
//! Noise is drawn from per-run counter-based streams so that a run is
//! reproducible from the master seed alone, and so that the open-loop and
//! closed-loop replays of the same run see identical disturbance and
//! measurement sequences.

use crate::constraints::ConstraintSet;
use crate::plant::{PlantModel, State};
use crate::scenario::Scenario;
use crate::solver::{GainSchedule, Trajectory};
use crate::{ControlVec, StateVec, Vec3};
use nalgebra::{Matrix3, Matrix6, Vector6};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Noise and disturbance configuration for execution, SI units.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Variance of the additive position measurement noise, m².
    pub position_noise_variance: f64,
    /// Master seed; per-run streams are derived from it.
    pub seed: u64,
    /// Std of the per-step velocity disturbance on the true plant, m/s.
    pub process_disturbance_std: f64,
    /// Std of the initial IPM position perturbation, m.
    pub initial_position_std: f64,
    /// Position measurements arrive every this many steps.
    pub measurement_decimation: usize,
}

impl NoiseModel {
    pub fn noiseless(&self) -> bool {
        self.position_noise_variance == 0.0
            && self.process_disturbance_std == 0.0
            && self.initial_position_std == 0.0
    }
}

/// Translational estimator state: mean `[p; v]` and covariance.
#[derive(Debug, Clone)]
pub struct EkfState {
    pub mean: Vector6<f64>,
    pub covariance: Matrix6<f64>,
}

impl EkfState {
    pub fn new(p: &Vec3, v: &Vec3, position_var: f64, velocity_var: f64) -> Self {
        let mut mean = Vector6::zeros();
        mean.fixed_rows_mut::<3>(0).copy_from(p);
        mean.fixed_rows_mut::<3>(3).copy_from(v);
        let mut cov = Matrix6::zeros();
        for i in 0..3 {
            cov[(i, i)] = position_var;
            cov[(3 + i, 3 + i)] = velocity_var;
        }
        Self {
            mean,
            covariance: cov,
        }
    }

    pub fn position(&self) -> Vec3 {
        self.mean.fixed_rows::<3>(0).into_owned()
    }

    pub fn velocity(&self) -> Vec3 {
        self.mean.fixed_rows::<3>(3).into_owned()
    }
}

fn symmetrize(m: &mut Matrix6<f64>) {
    *m = 0.5 * (*m + m.transpose());
}

/// Propagates the translational mean through the plant transition. Uses the
/// exact same integration code as the plant itself; when the estimate is
/// inside the dipole-model validity floor, falls back to drag-and-weight
/// dynamics instead of failing.
fn propagate_mean(
    plant: &PlantModel,
    p: &Vec3,
    v: &Vec3,
    q: &crate::JointVec,
    u: &ControlVec,
    dt: f64,
) -> (Vec3, Vec3) {
    let state = State {
        p: *p,
        v: *v,
        q: *q,
    };
    match plant.step(&state, u, dt) {
        Ok(next) => (next.p, next.v),
        Err(_) => {
            // RK4 on drag-and-weight only; positions never feed back into
            // this acceleration so only velocity stages matter.
            let a1 = plant.ballistic_acceleration(v);
            let v1 = v + 0.5 * dt * a1;
            let a2 = plant.ballistic_acceleration(&v1);
            let v2 = v + 0.5 * dt * a2;
            let a3 = plant.ballistic_acceleration(&v2);
            let v3 = v + dt * a3;
            let a4 = plant.ballistic_acceleration(&v3);
            let p_next = p + dt / 6.0 * (v + 2.0 * v1 + 2.0 * v2 + v3);
            let v_next = v + dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
            (p_next, v_next)
        }
    }
}

/// EKF time update through the plant model. The joint angles are commanded,
/// hence known exactly, and are passed alongside the input.
pub fn ekf_predict(
    plant: &PlantModel,
    ekf: &mut EkfState,
    q: &crate::JointVec,
    u: &ControlVec,
    dt: f64,
    process_velocity_std: f64,
) {
    let p = ekf.position();
    let v = ekf.velocity();
    let (p_next, v_next) = propagate_mean(plant, &p, &v, q, u, dt);

    // Jacobian of the translational transition, finite differences through
    // the same propagation.
    let mut f = Matrix6::zeros();
    for i in 0..6 {
        let h = 1e-6 * ekf.mean[i].abs().max(1.0);
        let mut mp = ekf.mean;
        let mut mm = ekf.mean;
        mp[i] += h;
        mm[i] -= h;
        let (pp, vp) = propagate_mean(
            plant,
            &mp.fixed_rows::<3>(0).into_owned(),
            &mp.fixed_rows::<3>(3).into_owned(),
            q,
            u,
            dt,
        );
        let (pm, vm) = propagate_mean(
            plant,
            &mm.fixed_rows::<3>(0).into_owned(),
            &mm.fixed_rows::<3>(3).into_owned(),
            q,
            u,
            dt,
        );
        for r in 0..3 {
            f[(r, i)] = (pp[r] - pm[r]) / (2.0 * h);
            f[(3 + r, i)] = (vp[r] - vm[r]) / (2.0 * h);
        }
    }

    let q_vel = process_velocity_std * process_velocity_std + 1e-10;
    let mut process = Matrix6::zeros();
    for i in 0..3 {
        process[(i, i)] = 1e-12;
        process[(3 + i, 3 + i)] = q_vel;
    }

    ekf.mean.fixed_rows_mut::<3>(0).copy_from(&p_next);
    ekf.mean.fixed_rows_mut::<3>(3).copy_from(&v_next);
    ekf.covariance = f * ekf.covariance * f.transpose() + process;
    symmetrize(&mut ekf.covariance);
}

/// EKF position measurement update, Joseph form. Non-finite measurements are
/// rejected (the filter coasts).
pub fn ekf_update(ekf: &mut EkfState, z: &Vec3, measurement_variance: f64) {
    if !z.iter().all(|e| e.is_finite()) {
        return;
    }
    // H = [I3 0]
    let p_pp = ekf.covariance.fixed_view::<3, 3>(0, 0).into_owned();
    let s = p_pp + Matrix3::from_diagonal_element(measurement_variance);
    let s_inv = match s.try_inverse() {
        Some(inv) => inv,
        None => return,
    };
    let ph_t = ekf.covariance.fixed_view::<6, 3>(0, 0).into_owned();
    let k = ph_t * s_inv;

    let innovation = z - ekf.position();
    ekf.mean += k * innovation;

    let mut i_kh = Matrix6::<f64>::identity();
    for r in 0..6 {
        for c in 0..3 {
            i_kh[(r, c)] -= k[(r, c)];
        }
    }
    ekf.covariance = i_kh * ekf.covariance * i_kh.transpose()
        + k * Matrix3::from_diagonal_element(measurement_variance) * k.transpose();
    symmetrize(&mut ekf.covariance);
}

/// Whether the policy feedback is applied during execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    ClosedLoop,
    OpenLoop,
}

/// One executed run.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub mode: ExecutionMode,
    /// True plant states, length horizon + 1.
    pub states: Vec<StateVec>,
    /// Estimator means aligned with `states`.
    pub estimates: Vec<Vector6<f64>>,
    /// Applied inputs, length horizon.
    pub inputs: Vec<ControlVec>,
    /// Distance from the final true IPM position to the goal, m.
    pub final_position_error: f64,
    /// Set when the run aborted early (e.g. separation violation).
    pub failure: Option<String>,
}

fn draw_vec3(rng: &mut impl Rng, std: f64) -> Vec3 {
    // Always consume three draws so parallel replays stay aligned even when
    // the magnitude is zero.
    let n: [f64; 3] = [
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    ];
    std * Vec3::new(n[0], n[1], n[2])
}

fn clamp_input(u: &ControlVec, cs: &ConstraintSet) -> ControlVec {
    ControlVec::from_fn(|i, _| u[i].clamp(cs.u_min[i], cs.u_max[i]))
}

/// Executes the planned policy against the true plant from a per-run RNG.
///
/// The RNG draw order per step is fixed (process disturbance, then
/// measurement noise) so that an open-loop replay with an identically seeded
/// RNG experiences the same noise sequence as the closed-loop run.
pub fn execute_run(
    plant: &PlantModel,
    constraints: &ConstraintSet,
    plan: &Trajectory,
    gains: &GainSchedule,
    goal_position: &Vec3,
    noise: &NoiseModel,
    mode: ExecutionMode,
    rng: &mut impl Rng,
) -> RunLog {
    let n = plan.horizon();
    let dt = plan.dt;
    let x0 = State::from_vector(&plan.states[0]);

    let initial_perturbation = draw_vec3(rng, noise.initial_position_std);
    let mut truth = State {
        p: x0.p + initial_perturbation,
        ..x0
    };
    let mut ekf = EkfState::new(
        &x0.p,
        &x0.v,
        noise.initial_position_std * noise.initial_position_std + 1e-8,
        1e-8,
    );

    let mut log = RunLog {
        mode,
        states: Vec::with_capacity(n + 1),
        estimates: Vec::with_capacity(n + 1),
        inputs: Vec::with_capacity(n),
        final_position_error: f64::NAN,
        failure: None,
    };
    log.states.push(truth.to_vector());
    log.estimates.push(ekf.mean);

    for k in 0..n {
        let u = match mode {
            ExecutionMode::OpenLoop => clamp_input(&plan.inputs[k], constraints),
            ExecutionMode::ClosedLoop => {
                let mut x_hat = StateVec::zeros();
                x_hat.fixed_rows_mut::<3>(0).copy_from(&ekf.position());
                x_hat.fixed_rows_mut::<3>(3).copy_from(&ekf.velocity());
                x_hat.fixed_rows_mut::<7>(6).copy_from(&truth.q);
                let u = plan.inputs[k] + gains.feedback[k] * (x_hat - plan.states[k]);
                clamp_input(&u, constraints)
            }
        };

        let disturbance = draw_vec3(rng, noise.process_disturbance_std);
        let measurement_noise = draw_vec3(rng, noise.position_noise_variance.sqrt());

        // The transition interpolates EPM poses from the joints at the start
        // of the step; the estimator must see those same joints.
        let q_pre = truth.q;
        match plant.step(&truth, &u, dt) {
            Ok(mut next) => {
                next.v += disturbance;
                truth = next;
            }
            Err(e) => {
                log.failure = Some(format!("step {k}: {e}"));
                break;
            }
        }

        ekf_predict(
            plant,
            &mut ekf,
            &q_pre,
            &u,
            dt,
            noise.process_disturbance_std,
        );
        if (k + 1) % noise.measurement_decimation == 0 {
            let z = truth.p + measurement_noise;
            ekf_update(&mut ekf, &z, noise.position_noise_variance.max(1e-12));
        }

        log.inputs.push(u);
        log.states.push(truth.to_vector());
        log.estimates.push(ekf.mean);
    }

    log.final_position_error = (truth.p - goal_position).norm();
    log
}

/// Per-run RNG stream: one ChaCha instance per run index, split from the
/// master seed via the stream counter.
pub fn run_rng(master_seed: u64, run_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(run_index);
    rng
}

/// Executes the plan once, closed loop, using the scenario's noise model.
pub fn closed_loop_run(
    scenario: &Scenario,
    plan: &Trajectory,
    gains: &GainSchedule,
    run_index: u64,
) -> RunLog {
    let plant = scenario.plant_model();
    let mut rng = run_rng(scenario.noise.seed, run_index);
    execute_run(
        &plant,
        &scenario.constraints,
        plan,
        gains,
        &scenario.goal_ipm_position,
        &scenario.noise,
        ExecutionMode::ClosedLoop,
        &mut rng,
    )
}

/// Executes the plan once, open loop, with the same noise stream as the
/// closed-loop run of the same index.
pub fn open_loop_run(
    scenario: &Scenario,
    plan: &Trajectory,
    gains: &GainSchedule,
    run_index: u64,
) -> RunLog {
    let plant = scenario.plant_model();
    let mut rng = run_rng(scenario.noise.seed, run_index);
    execute_run(
        &plant,
        &scenario.constraints,
        plan,
        gains,
        &scenario.goal_ipm_position,
        &scenario.noise,
        ExecutionMode::OpenLoop,
        &mut rng,
    )
}

/// Summary statistics over final position errors, m.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub median: f64,
}

impl ErrorStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        assert!(!samples.is_empty());
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = samples.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = if sorted.len() % 2 == 1 {
            sorted[sorted.len() / 2]
        } else {
            0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
        };
        Self {
            mean,
            std: var.sqrt(),
            min: sorted[0],
            max: *sorted.last().unwrap(),
            median,
        }
    }
}

/// Per-axis summary of the closed-loop terminal states, SI units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TerminalStateTable {
    pub initial_position: [f64; 3],
    pub goal_position: [f64; 3],
    pub mean_final_position: [f64; 3],
    pub std_final_position: [f64; 3],
    pub mean_final_velocity: [f64; 3],
    pub std_final_velocity: [f64; 3],
}

fn axis_mean_std(samples: impl Iterator<Item = Vec3> + Clone) -> ([f64; 3], [f64; 3]) {
    let n = samples.clone().count() as f64;
    let mut mean = Vec3::zeros();
    for s in samples.clone() {
        mean += s / n;
    }
    let mut var = Vec3::zeros();
    for s in samples {
        let d = s - mean;
        var += d.component_mul(&d) / n;
    }
    (mean.into(), [var.x.sqrt(), var.y.sqrt(), var.z.sqrt()])
}

/// Repeated-run study result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonteCarloStats {
    pub runs: usize,
    pub master_seed: u64,
    /// Run indices that aborted early, with reasons.
    pub failures: Vec<(usize, String)>,
    pub closed_loop: ErrorStats,
    pub open_loop: ErrorStats,
    /// Final position errors per run, m: `(closed, open)`.
    pub errors: Vec<(f64, f64)>,
    /// Per-axis terminal statistics of the closed-loop runs.
    pub terminal: TerminalStateTable,
}

/// Runs `runs` noisy executions of the plan, each both closed and open loop
/// on identical per-run noise streams, in parallel.
pub fn monte_carlo(
    scenario: &Scenario,
    plan: &Trajectory,
    gains: &GainSchedule,
    runs: usize,
) -> MonteCarloStats {
    assert!(runs > 0);
    let plant = scenario.plant_model();
    let results: Vec<(RunLog, RunLog)> = (0..runs)
        .into_par_iter()
        .map(|i| {
            let mut rng_c = run_rng(scenario.noise.seed, i as u64);
            let closed = execute_run(
                &plant,
                &scenario.constraints,
                plan,
                gains,
                &scenario.goal_ipm_position,
                &scenario.noise,
                ExecutionMode::ClosedLoop,
                &mut rng_c,
            );
            let mut rng_o = run_rng(scenario.noise.seed, i as u64);
            let open = execute_run(
                &plant,
                &scenario.constraints,
                plan,
                gains,
                &scenario.goal_ipm_position,
                &scenario.noise,
                ExecutionMode::OpenLoop,
                &mut rng_o,
            );
            (closed, open)
        })
        .collect();

    let mut failures = Vec::new();
    let mut errors = Vec::with_capacity(runs);
    for (i, (closed, open)) in results.iter().enumerate() {
        if let Some(reason) = &closed.failure {
            failures.push((i, format!("closed loop: {reason}")));
        }
        if let Some(reason) = &open.failure {
            failures.push((i, format!("open loop: {reason}")));
        }
        errors.push((closed.final_position_error, open.final_position_error));
    }
    let closed_samples: Vec<f64> = errors.iter().map(|e| e.0).collect();
    let open_samples: Vec<f64> = errors.iter().map(|e| e.1).collect();

    let final_states: Vec<State> = results
        .iter()
        .map(|(closed, _)| State::from_vector(closed.states.last().unwrap()))
        .collect();
    let (mean_p, std_p) = axis_mean_std(final_states.iter().map(|s| s.p));
    let (mean_v, std_v) = axis_mean_std(final_states.iter().map(|s| s.v));
    let terminal = TerminalStateTable {
        initial_position: scenario.initial_ipm_position.into(),
        goal_position: scenario.goal_ipm_position.into(),
        mean_final_position: mean_p,
        std_final_position: std_p,
        mean_final_velocity: mean_v,
        std_final_velocity: std_v,
    };

    MonteCarloStats {
        runs,
        master_seed: scenario.noise.seed,
        failures,
        closed_loop: ErrorStats::from_samples(&closed_samples),
        open_loop: ErrorStats::from_samples(&open_samples),
        errors,
        terminal,
    }
}
