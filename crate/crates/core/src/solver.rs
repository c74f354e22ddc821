//! Constrained iLQR engine: Riccati-style backward pass, line-searched
//! forward pass, and the augmented-Lagrangian outer loop.

use crate::constraints::{
    al_stage_expansion, al_terminal_expansion, max_violation, update_multipliers, AlParams,
    AlState, ConstraintEvaluator, ConstraintLayout,
};
use crate::cost::{ControlMat, GoalCost, StageExpansion, TerminalExpansion};
use crate::plant::{PlantError, PlantModel, State};
use crate::scenario::Scenario;
use crate::{ControlVec, GainMat, StateControlMat, StateMat, StateVec};
use nalgebra::{Cholesky, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Discrete-time state transition with Jacobians, as consumed by the engine.
pub trait Dynamics: Sync {
    fn step(&self, x: &StateVec, u: &ControlVec, dt: f64) -> Result<StateVec, PlantError>;
    fn linearize(
        &self,
        x: &StateVec,
        u: &ControlVec,
        dt: f64,
    ) -> Result<(StateMat, StateControlMat), PlantError>;
}

impl Dynamics for PlantModel {
    fn step(&self, x: &StateVec, u: &ControlVec, dt: f64) -> Result<StateVec, PlantError> {
        PlantModel::step(self, &State::from_vector(x), u, dt).map(|s| s.to_vector())
    }

    fn linearize(
        &self,
        x: &StateVec,
        u: &ControlVec,
        dt: f64,
    ) -> Result<(StateMat, StateControlMat), PlantError> {
        PlantModel::linearize(self, &State::from_vector(x), u, dt)
    }
}

/// Time-indexed stage/terminal cost with second-order expansions.
pub trait StageCost: Sync {
    fn stage_value(&self, k: usize, x: &StateVec, u: &ControlVec) -> f64;
    fn terminal_value(&self, x: &StateVec) -> f64;
    fn stage_expansion(&self, k: usize, x: &StateVec, u: &ControlVec) -> StageExpansion;
    fn terminal_expansion(&self, x: &StateVec) -> TerminalExpansion;
}

/// Dynamically feasible trajectory: `states[k+1] = step(states[k], inputs[k])`
/// holds by construction of every rollout.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<StateVec>,
    pub inputs: Vec<ControlVec>,
    pub dt: f64,
    pub cost: f64,
    pub max_violation: f64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }
}

/// Affine feedback policy from the final backward pass:
/// `u_k = u*_k + K_k (x - x*_k) + alpha d_k`.
#[derive(Debug, Clone)]
pub struct GainSchedule {
    pub feedback: Vec<GainMat>,
    pub feedforward: Vec<ControlVec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    Diverged,
}

/// Per-outer-iteration solver telemetry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OuterIteration {
    pub cost: f64,
    pub max_violation: f64,
    pub mu: f64,
    pub inner_iterations: usize,
    pub regularization: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverReport {
    pub iterations: Vec<OuterIteration>,
    pub status: SolveStatus,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Relative cost-decrease threshold ending the inner loop.
    pub tol_cost: f64,
    /// Maximum constraint violation (native units) ending the outer loop.
    pub tol_constraint: f64,
    pub max_inner_iterations: usize,
    pub max_outer_iterations: usize,
    pub regularization_initial: f64,
    pub regularization_max: f64,
    pub al: AlParams,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol_cost: 1e-6,
            tol_constraint: 1e-3,
            max_inner_iterations: 100,
            max_outer_iterations: 30,
            regularization_initial: 1e-6,
            regularization_max: 1e6,
            al: AlParams::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("initial rollout infeasible: {0}")]
    InfeasibleStart(PlantError),
    #[error("solver diverged: {0}")]
    Diverged(String),
    #[error("scenario invalid: {0}")]
    BadScenario(String),
}

/// Rolls out an input sequence from an initial state.
pub fn rollout<D: Dynamics>(
    dynamics: &D,
    x0: &StateVec,
    inputs: &[ControlVec],
    dt: f64,
) -> Result<Vec<StateVec>, PlantError> {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(*x0);
    for u in inputs {
        let next = dynamics.step(states.last().unwrap(), u, dt)?;
        states.push(next);
    }
    Ok(states)
}

/// Total cost of a state/input sequence under a cost model.
pub fn trajectory_cost<C: StageCost>(cost: &C, states: &[StateVec], inputs: &[ControlVec]) -> f64 {
    let running: f64 = inputs
        .iter()
        .enumerate()
        .map(|(k, u)| cost.stage_value(k, &states[k], u))
        .sum();
    running + cost.terminal_value(states.last().unwrap())
}

/// The iLQR inner engine for a fixed cost model.
pub struct IlqrEngine<'a, D: Dynamics, C: StageCost> {
    pub dynamics: &'a D,
    pub cost: &'a C,
    pub options: SolverOptions,
}

/// Result of one backward pass: gains plus the expected-decrease terms
/// `delta_1 = sum d' Q_u`, `delta_2 = 1/2 sum d' Q_uu d`.
pub struct BackwardPassResult {
    pub gains: GainSchedule,
    pub delta_1: f64,
    pub delta_2: f64,
}

#[derive(Debug, Error)]
pub enum BackwardPassError {
    #[error("Q_uu not positive definite at stage {0}")]
    Indefinite(usize),
    #[error("linearization failed: {0}")]
    Linearization(#[from] PlantError),
}

impl<'a, D: Dynamics, C: StageCost> IlqrEngine<'a, D, C> {
    /// Backward Riccati-style sweep over a feasible trajectory, with `reg`
    /// added to `Q_uu` before inversion.
    pub fn backward_pass(
        &self,
        traj: &Trajectory,
        reg: f64,
    ) -> Result<BackwardPassResult, BackwardPassError> {
        let n = traj.horizon();
        let lin: Vec<(StateMat, StateControlMat)> = (0..n)
            .into_par_iter()
            .map(|k| self.dynamics.linearize(&traj.states[k], &traj.inputs[k], traj.dt))
            .collect::<Result<_, _>>()?;
        let expansions: Vec<StageExpansion> = (0..n)
            .into_par_iter()
            .map(|k| self.cost.stage_expansion(k, &traj.states[k], &traj.inputs[k]))
            .collect();
        let terminal = self.cost.terminal_expansion(traj.states.last().unwrap());

        let mut v_x = terminal.lx;
        let mut v_xx = terminal.lxx;
        let mut feedback = vec![GainMat::zeros(); n];
        let mut feedforward = vec![ControlVec::zeros(); n];
        let mut delta_1 = 0.0;
        let mut delta_2 = 0.0;

        for k in (0..n).rev() {
            let (f_x, f_u) = &lin[k];
            let e = &expansions[k];
            let q_x = e.lx + f_x.transpose() * v_x;
            let q_u = e.lu + f_u.transpose() * v_x;
            let q_xx = e.lxx + f_x.transpose() * v_xx * f_x;
            let q_uu: ControlMat = e.luu + f_u.transpose() * v_xx * f_u;
            let q_ux: GainMat = e.lux + f_u.transpose() * v_xx * f_x;

            let mut q_uu_reg = q_uu;
            for i in 0..crate::CONTROL_DIM {
                q_uu_reg[(i, i)] += reg;
            }
            let chol = Cholesky::new(q_uu_reg).ok_or(BackwardPassError::Indefinite(k))?;
            let k_mat = -chol.solve(&q_ux);
            let d = -chol.solve(&q_u);

            delta_1 += d.dot(&q_u);
            delta_2 += 0.5 * (d.transpose() * q_uu * d)[(0, 0)];

            v_x = q_x
                + k_mat.transpose() * (q_uu * d)
                + k_mat.transpose() * q_u
                + q_ux.transpose() * d;
            v_xx = q_xx
                + k_mat.transpose() * q_uu * k_mat
                + k_mat.transpose() * q_ux
                + q_ux.transpose() * k_mat;
            v_xx = 0.5 * (v_xx + v_xx.transpose());

            feedback[k] = k_mat;
            feedforward[k] = d;
        }

        Ok(BackwardPassResult {
            gains: GainSchedule {
                feedback,
                feedforward,
            },
            delta_1,
            delta_2,
        })
    }

    /// Rolls out the affine policy at step scale `alpha`, returning the new
    /// feasible trajectory with its cost. Violation is left for the caller.
    pub fn forward_pass(
        &self,
        traj: &Trajectory,
        gains: &GainSchedule,
        alpha: f64,
    ) -> Result<Trajectory, PlantError> {
        let n = traj.horizon();
        let mut states = Vec::with_capacity(n + 1);
        let mut inputs = Vec::with_capacity(n);
        states.push(traj.states[0]);
        for k in 0..n {
            let x = states[k];
            let u = traj.inputs[k]
                + alpha * gains.feedforward[k]
                + gains.feedback[k] * (x - traj.states[k]);
            let next = self.dynamics.step(&x, &u, traj.dt)?;
            inputs.push(u);
            states.push(next);
        }
        let cost = trajectory_cost(self.cost, &states, &inputs);
        Ok(Trajectory {
            states,
            inputs,
            dt: traj.dt,
            cost,
            max_violation: 0.0,
        })
    }

    /// Inner iLQR loop for fixed multipliers: alternates backward passes and
    /// backtracking forward passes until the relative cost decrease falls
    /// below `tol_cost`.
    ///
    /// Returns the improved trajectory, the gains of the final backward pass,
    /// the iteration count, and the final regularization.
    pub fn run(
        &self,
        mut traj: Trajectory,
    ) -> Result<(Trajectory, GainSchedule, usize, f64), SolveError> {
        let opts = &self.options;
        let mut reg = opts.regularization_initial;
        let mut gains: Option<GainSchedule> = None;
        let mut iterations = 0;

        for _ in 0..opts.max_inner_iterations {
            iterations += 1;
            let bp = loop {
                match self.backward_pass(&traj, reg) {
                    Ok(bp) => break bp,
                    Err(BackwardPassError::Indefinite(_)) => {
                        reg *= 10.0;
                        if reg > opts.regularization_max {
                            return Err(SolveError::Diverged(
                                "Q_uu remained indefinite at maximum regularization".into(),
                            ));
                        }
                    }
                    Err(BackwardPassError::Linearization(e)) => {
                        return Err(SolveError::Diverged(format!("linearization failed: {e}")))
                    }
                }
            };

            let mut accepted = None;
            let mut alpha = 1.0;
            for _ in 0..11 {
                match self.forward_pass(&traj, &bp.gains, alpha) {
                    Ok(candidate)
                        if candidate.cost.is_finite() && candidate.cost < traj.cost =>
                    {
                        accepted = Some(candidate);
                        break;
                    }
                    _ => alpha *= 0.5,
                }
            }

            match accepted {
                Some(next) => {
                    let decrease = traj.cost - next.cost;
                    let rel = decrease / traj.cost.abs().max(1e-12);
                    traj = next;
                    gains = Some(bp.gains);
                    reg = (reg * 0.5).max(opts.regularization_initial);
                    if rel < opts.tol_cost {
                        break;
                    }
                }
                None => {
                    // No step length improved the cost; stiffen and retry, or
                    // settle for the current iterate.
                    gains = Some(bp.gains);
                    reg *= 10.0;
                    if reg > opts.regularization_max {
                        break;
                    }
                }
            }
        }

        let gains = match gains {
            Some(g) => g,
            None => self
                .backward_pass(&traj, reg.min(opts.regularization_max))
                .map_err(|e| SolveError::Diverged(e.to_string()))?
                .gains,
        };
        Ok((traj, gains, iterations, reg))
    }
}

/// Augmented-Lagrangian cost: base goal cost plus constraint penalty terms
/// for the current multipliers.
pub struct AlCost {
    pub base: GoalCost,
    pub evaluator: ConstraintEvaluator,
    pub al: AlState,
    pub stage_layout: ConstraintLayout,
    pub terminal_layout: ConstraintLayout,
}

impl StageCost for AlCost {
    fn stage_value(&self, k: usize, x: &StateVec, u: &ControlVec) -> f64 {
        let state = State::from_vector(x);
        let g = self.evaluator.evaluate(&state, Some(u));
        self.base.stage_value(x, u)
            + crate::constraints::al_penalty_value(
                &g,
                &self.al.lambda[k],
                self.al.mu,
                &self.stage_layout,
            )
            .expect("stage multiplier dimensions fixed at construction")
    }

    fn terminal_value(&self, x: &StateVec) -> f64 {
        let state = State::from_vector(x);
        let g = self.evaluator.evaluate(&state, None);
        self.base.terminal_value(x)
            + crate::constraints::al_penalty_value(
                &g,
                self.al.lambda.last().unwrap(),
                self.al.mu,
                &self.terminal_layout,
            )
            .expect("terminal multiplier dimensions fixed at construction")
    }

    fn stage_expansion(&self, k: usize, x: &StateVec, u: &ControlVec) -> StageExpansion {
        let state = State::from_vector(x);
        let (g, gx, gu) = self.evaluator.evaluate_with_jacobians(&state, Some(u));
        al_stage_expansion(
            self.base.stage(x, u),
            &g,
            &gx,
            &gu.unwrap(),
            &self.al.lambda[k],
            self.al.mu,
            &self.stage_layout,
        )
        .expect("stage multiplier dimensions fixed at construction")
    }

    fn terminal_expansion(&self, x: &StateVec) -> TerminalExpansion {
        let state = State::from_vector(x);
        let (g, gx, _) = self.evaluator.evaluate_with_jacobians(&state, None);
        al_terminal_expansion(
            self.base.terminal(x),
            &g,
            &gx,
            self.al.lambda.last().unwrap(),
            self.al.mu,
            &self.terminal_layout,
        )
        .expect("terminal multiplier dimensions fixed at construction")
    }
}

/// Constraint values along a trajectory, one vector per timestep with the
/// terminal vector last.
pub fn constraint_trace(
    evaluator: &ConstraintEvaluator,
    traj: &Trajectory,
) -> Vec<DVector<f64>> {
    let n = traj.horizon();
    let mut out: Vec<DVector<f64>> = (0..n)
        .map(|k| {
            evaluator.evaluate(
                &State::from_vector(&traj.states[k]),
                Some(&traj.inputs[k]),
            )
        })
        .collect();
    out.push(evaluator.evaluate(&State::from_vector(&traj.states[n]), None));
    out
}

/// Full constrained solve: inner iLQR loops alternating with augmented
/// Lagrangian multiplier updates until the worst violation falls below
/// `tol_constraint`.
pub fn solve(
    scenario: &Scenario,
) -> Result<(Trajectory, GainSchedule, SolverReport), SolveError> {
    let plant = scenario.plant_model();
    let evaluator = scenario.constraint_evaluator();
    let base = scenario.goal_cost();
    let options = scenario.solver_options();
    let n = scenario.horizon.steps;
    let dt = scenario.horizon.dt;
    let x0 = scenario.initial_state().to_vector();

    let initial_inputs = match &scenario.warm_start_inputs {
        Some(w) if w.len() == n => w.clone(),
        _ => vec![ControlVec::zeros(); n],
    };
    let states =
        rollout(&plant, &x0, &initial_inputs, dt).map_err(SolveError::InfeasibleStart)?;

    let stage_layout = ConstraintLayout::stage(&evaluator.set);
    let terminal_layout = ConstraintLayout::terminal(&evaluator.set);
    let mut al = AlState::new(&evaluator, n, &options.al);

    let mut cost_model = AlCost {
        base,
        evaluator: evaluator.clone(),
        al: al.clone(),
        stage_layout,
        terminal_layout,
    };
    let mut traj = Trajectory {
        cost: trajectory_cost(&cost_model, &states, &initial_inputs),
        states,
        inputs: initial_inputs,
        dt,
        max_violation: f64::INFINITY,
    };

    let mut report = SolverReport {
        iterations: Vec::new(),
        status: SolveStatus::MaxIterations,
    };
    let mut gains = GainSchedule {
        feedback: vec![GainMat::zeros(); n],
        feedforward: vec![ControlVec::zeros(); n],
    };

    for _outer in 0..options.max_outer_iterations {
        cost_model.al = al.clone();
        traj.cost = trajectory_cost(&cost_model, &traj.states, &traj.inputs);
        let engine = IlqrEngine {
            dynamics: &plant,
            cost: &cost_model,
            options,
        };
        let (next, next_gains, inner_iterations, regularization) = engine.run(traj)?;
        traj = next;
        gains = next_gains;

        let g_traj = constraint_trace(&evaluator, &traj);
        let violation = max_violation(&g_traj, &stage_layout, &terminal_layout);
        traj.max_violation = violation;
        report.iterations.push(OuterIteration {
            cost: traj.cost,
            max_violation: violation,
            mu: al.mu,
            inner_iterations,
            regularization,
        });

        if violation < options.tol_constraint {
            report.status = SolveStatus::Converged;
            break;
        }
        al = update_multipliers(&al, &g_traj, &stage_layout, &terminal_layout, &options.al);
    }

    // The AL solve only enforces the input box to `tol_constraint`; saturate
    // the published inputs exactly and re-roll so the plan replays verbatim
    // through an executor that clamps commands.
    let clamped: Vec<ControlVec> = traj
        .inputs
        .iter()
        .map(|u| {
            ControlVec::from_fn(|i, _| u[i].clamp(evaluator.set.u_min[i], evaluator.set.u_max[i]))
        })
        .collect();
    if clamped != traj.inputs {
        let states = rollout(&plant, &x0, &clamped, dt).map_err(SolveError::InfeasibleStart)?;
        let mut saturated = Trajectory {
            cost: trajectory_cost(&cost_model, &states, &clamped),
            states,
            inputs: clamped,
            dt,
            max_violation: 0.0,
        };
        let g_traj = constraint_trace(&evaluator, &saturated);
        saturated.max_violation = max_violation(&g_traj, &stage_layout, &terminal_layout);
        traj = saturated;
    }

    if !traj.cost.is_finite() {
        report.status = SolveStatus::Diverged;
    }
    Ok((traj, gains, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;

    /// Linear dynamics `x' = A x + B u`, dt-independent, for LQ checks.
    struct LinearDynamics {
        a: StateMat,
        b: StateControlMat,
    }

    impl Dynamics for LinearDynamics {
        fn step(&self, x: &StateVec, u: &ControlVec, _dt: f64) -> Result<StateVec, PlantError> {
            Ok(self.a * x + self.b * u)
        }
        fn linearize(
            &self,
            _x: &StateVec,
            _u: &ControlVec,
            _dt: f64,
        ) -> Result<(StateMat, StateControlMat), PlantError> {
            Ok((self.a, self.b))
        }
    }

    /// Plain quadratic cost without kinematics terms.
    struct LqCost {
        q: StateMat,
        r: ControlMat,
        qf: StateMat,
    }

    impl StageCost for LqCost {
        fn stage_value(&self, _k: usize, x: &StateVec, u: &ControlVec) -> f64 {
            (x.transpose() * self.q * x + u.transpose() * self.r * u)[(0, 0)]
        }
        fn terminal_value(&self, x: &StateVec) -> f64 {
            (x.transpose() * self.qf * x)[(0, 0)]
        }
        fn stage_expansion(&self, _k: usize, x: &StateVec, u: &ControlVec) -> StageExpansion {
            StageExpansion {
                value: self.stage_value(0, x, u),
                lx: 2.0 * self.q * x,
                lu: 2.0 * self.r * u,
                lxx: 2.0 * self.q,
                luu: 2.0 * self.r,
                lux: GainMat::zeros(),
            }
        }
        fn terminal_expansion(&self, x: &StateVec) -> TerminalExpansion {
            TerminalExpansion {
                value: self.terminal_value(x),
                lx: 2.0 * self.qf * x,
                lxx: 2.0 * self.qf,
            }
        }
    }

    fn random_lq(seed: u64) -> (LinearDynamics, LqCost, StateVec) {
        let mut rng = StdRng::seed_from_u64(seed);
        // Stable-ish A: contraction plus small random coupling.
        let a = StateMat::from_fn(|i, j| {
            let diag = if i == j { 0.9 } else { 0.0 };
            diag + 0.05 * rng.gen_range(-1.0..1.0)
        });
        let b = StateControlMat::from_fn(|_, _| 0.1 * rng.gen_range(-1.0..1.0));
        let q = StateMat::from_fn(|i, j| if i == j { rng.gen_range(0.5..2.0) } else { 0.0 });
        let r = ControlMat::from_fn(|i, j| if i == j { rng.gen_range(0.1..1.0) } else { 0.0 });
        let qf = 5.0 * q;
        let x0 = StateVec::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        (LinearDynamics { a, b }, LqCost { q, r, qf }, x0)
    }

    /// Independent oracle: time-varying discrete Riccati recursion for the
    /// same LQ problem (cost without the 1/2 convention).
    fn riccati_gains(
        dynamics: &LinearDynamics,
        cost: &LqCost,
        n: usize,
    ) -> (Vec<GainMat>, Vec<StateMat>) {
        let mut p = cost.qf;
        let mut gains = vec![GainMat::zeros(); n];
        let mut values = vec![StateMat::zeros(); n + 1];
        values[n] = p;
        for k in (0..n).rev() {
            let a = &dynamics.a;
            let b = &dynamics.b;
            let s: ControlMat = cost.r + b.transpose() * p * b;
            let s_inv = s.try_inverse().unwrap();
            let k_mat: GainMat = s_inv * (b.transpose() * p * a);
            p = cost.q + a.transpose() * p * a - a.transpose() * p * b * k_mat;
            p = 0.5 * (p + p.transpose());
            gains[k] = k_mat;
            values[k] = p;
        }
        (gains, values)
    }

    fn lq_engine_setup(
        seed: u64,
        n: usize,
    ) -> (LinearDynamics, LqCost, StateVec, Trajectory) {
        let (dynamics, cost, x0) = random_lq(seed);
        let inputs = vec![ControlVec::zeros(); n];
        let states = rollout(&dynamics, &x0, &inputs, 1.0).unwrap();
        let c = trajectory_cost(&cost, &states, &inputs);
        (
            dynamics,
            cost,
            x0,
            Trajectory {
                states,
                inputs,
                dt: 1.0,
                cost: c,
                max_violation: 0.0,
            },
        )
    }

    #[test]
    fn backward_pass_matches_riccati() {
        let n = 25;
        let (dynamics, cost, _, traj) = lq_engine_setup(3, n);
        let engine = IlqrEngine {
            dynamics: &dynamics,
            cost: &cost,
            options: SolverOptions::default(),
        };
        let bp = engine.backward_pass(&traj, 0.0).unwrap();
        let (riccati, _) = riccati_gains(&dynamics, &cost, n);
        for k in 0..n {
            // Our K is the feedback of u = K dx; Riccati convention is u = -K x.
            let diff = (bp.gains.feedback[k] + riccati[k]).abs().max();
            assert!(diff < 1e-10, "stage {k}: gain mismatch {diff}");
        }
    }

    #[test]
    fn forward_pass_alpha_one_reaches_riccati_cost() {
        let n = 25;
        let (dynamics, cost, x0, traj) = lq_engine_setup(5, n);
        let engine = IlqrEngine {
            dynamics: &dynamics,
            cost: &cost,
            options: SolverOptions::default(),
        };
        let bp = engine.backward_pass(&traj, 0.0).unwrap();
        let improved = engine.forward_pass(&traj, &bp.gains, 1.0).unwrap();

        // Optimal LQ cost is x0' P0 x0 from the Riccati recursion.
        let (_, values) = riccati_gains(&dynamics, &cost, n);
        let optimal = (x0.transpose() * values[0] * x0)[(0, 0)];
        assert_relative_eq!(improved.cost, optimal, max_relative = 1e-10);
        assert!(improved.cost < traj.cost);
    }

    #[test]
    fn zero_cost_gives_zero_gains() {
        let n = 10;
        let (dynamics, _, _, traj) = lq_engine_setup(7, n);
        let cost = LqCost {
            q: StateMat::zeros(),
            r: ControlMat::zeros(),
            qf: StateMat::zeros(),
        };
        let engine = IlqrEngine {
            dynamics: &dynamics,
            cost: &cost,
            options: SolverOptions::default(),
        };
        // Zero Q_uu needs regularization to factor; gains still vanish.
        let bp = engine.backward_pass(&traj, 1e-8).unwrap();
        for k in 0..n {
            assert_eq!(bp.gains.feedback[k], GainMat::zeros());
            assert_eq!(bp.gains.feedforward[k], ControlVec::zeros());
        }
    }

    #[test]
    fn regularization_shifts_eigenvalues() {
        let mut rng = StdRng::seed_from_u64(9);
        let m = ControlMat::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let sym = 0.5 * (m + m.transpose());
        let rho = 0.37;
        let shifted = sym + rho * ControlMat::identity();
        let ev_a = sym.symmetric_eigen().eigenvalues;
        let ev_b = shifted.symmetric_eigen().eigenvalues;
        let mut a: Vec<f64> = ev_a.iter().copied().collect();
        let mut b: Vec<f64> = ev_b.iter().copied().collect();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(y - x, rho, epsilon = 1e-10);
        }
    }

    #[test]
    fn identity_rollout_at_zero_alpha() {
        let n = 15;
        let (dynamics, cost, _, traj) = lq_engine_setup(11, n);
        let engine = IlqrEngine {
            dynamics: &dynamics,
            cost: &cost,
            options: SolverOptions::default(),
        };
        let gains = GainSchedule {
            feedback: vec![GainMat::from_fn(|_, _| 0.3); n],
            feedforward: vec![ControlVec::zeros(); n],
        };
        let same = engine.forward_pass(&traj, &gains, 0.0).unwrap();
        for k in 0..=n {
            assert_eq!(same.states[k], traj.states[k]);
        }
        for k in 0..n {
            assert_eq!(same.inputs[k], traj.inputs[k]);
        }
    }

    #[test]
    fn inner_loop_cost_monotone() {
        let n = 30;
        let (dynamics, cost, _, traj) = lq_engine_setup(13, n);
        let start_cost = traj.cost;
        let engine = IlqrEngine {
            dynamics: &dynamics,
            cost: &cost,
            options: SolverOptions::default(),
        };
        let (solved, _, iters, _) = engine.run(traj).unwrap();
        assert!(solved.cost < start_cost);
        assert!(iters <= 100);

        // Matches Riccati optimum.
        let (_, values) = riccati_gains(&dynamics, &cost, n);
        let optimal = (solved.states[0].transpose() * values[0] * solved.states[0])[(0, 0)];
        assert_relative_eq!(solved.cost, optimal, max_relative = 1e-8);
    }
}
