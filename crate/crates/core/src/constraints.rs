//! Constraint evaluation, augmented-Lagrangian cost assembly, and
//! multiplier/penalty scheduling.
//!
//! Inequalities are stacked as `g <= 0` rows, equalities as `h = 0` rows, in
//! a fixed documented order (see [`ConstraintLayout`]).

use crate::cost::{StageExpansion, TerminalExpansion};
use crate::kinematics::{forward_kinematics, geometric_jacobian, DhTable};
use crate::plant::State;
use crate::{ControlVec, JointVec, Vec3};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstraintError {
    #[error("multiplier dimension {lambda} does not match constraint dimension {g}")]
    DimensionMismatch { lambda: usize, g: usize },
}

/// Spherical keep-out region for the IPM center. The radius should already
/// include the capsule's physical radius.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Vec3,
    pub radius: f64,
    pub margin: f64,
}

/// All constraints of the planning problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub q_min: JointVec,
    pub q_max: JointVec,
    pub u_min: ControlVec,
    pub u_max: ControlVec,
    pub v_min: Vec3,
    pub v_max: Vec3,
    /// Per-axis lower bounds on the EPM position, m. `None` disables an axis.
    pub epm_min_position: [Option<f64>; 3],
    pub obstacles: Vec<Obstacle>,
    /// Target field direction at the IPM (unit vector). When set, the field
    /// direction is constrained to it.
    pub orientation_target: Option<Vec3>,
    /// Apply the orientation equality at every timestep (default) or only at
    /// the terminal step.
    pub orientation_every_step: bool,
}

impl ConstraintSet {
    pub fn validate(&self) -> Result<(), String> {
        for i in 0..7 {
            if self.q_min[i] >= self.q_max[i] {
                return Err(format!(
                    "joint {i}: q_min ({}) must be below q_max ({})",
                    self.q_min[i], self.q_max[i]
                ));
            }
            if self.u_min[i] >= self.u_max[i] {
                return Err(format!("joint {i}: u_min must be below u_max"));
            }
        }
        for (i, obs) in self.obstacles.iter().enumerate() {
            if obs.radius <= 0.0 {
                return Err(format!("obstacle {i}: radius must be positive"));
            }
            if obs.margin < 0.0 {
                return Err(format!("obstacle {i}: margin must be non-negative"));
            }
        }
        if let Some(r) = &self.orientation_target {
            if r.norm() < 1e-12 {
                return Err("orientation_target must be a nonzero vector".into());
            }
        }
        Ok(())
    }
}

/// Row layout of the stacked constraint vector.
///
/// Stage rows (`include_inputs = true`):
/// `[q lower (7) | q upper (7) | u lower (7) | u upper (7) | v lower (3) |
///   v upper (3) | EPM floor (n_epm) | obstacles (n_obs) | orientation (3)]`
///
/// Terminal rows omit the two input blocks. The orientation rows are the only
/// equality rows; everything else is `g <= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConstraintLayout {
    pub include_inputs: bool,
    pub n_epm: usize,
    pub n_obs: usize,
    pub orientation: bool,
}

impl ConstraintLayout {
    pub fn stage(cs: &ConstraintSet) -> Self {
        Self {
            include_inputs: true,
            n_epm: cs.epm_min_position.iter().flatten().count(),
            n_obs: cs.obstacles.len(),
            orientation: cs.orientation_target.is_some() && cs.orientation_every_step,
        }
    }

    pub fn terminal(cs: &ConstraintSet) -> Self {
        Self {
            include_inputs: false,
            orientation: cs.orientation_target.is_some(),
            ..Self::stage(cs)
        }
    }

    pub fn box_rows(&self) -> usize {
        if self.include_inputs {
            34
        } else {
            20
        }
    }

    pub fn dim(&self) -> usize {
        self.box_rows() + self.n_epm + self.n_obs + if self.orientation { 3 } else { 0 }
    }

    pub fn obstacle_start(&self) -> usize {
        self.box_rows() + self.n_epm
    }

    /// First equality row; rows before it are all inequalities.
    pub fn equality_start(&self) -> usize {
        self.box_rows() + self.n_epm + self.n_obs
    }

    pub fn is_equality(&self, row: usize) -> bool {
        row >= self.equality_start()
    }
}

/// Direction of the dipole field at displacement `p` for EPM axis `m_hat`.
/// Scale-free, so no separation floor applies.
fn field_direction(p: &Vec3, m_hat: &Vec3) -> Vec3 {
    let n = p.norm();
    if n < 1e-15 {
        return Vec3::zeros();
    }
    let ph = p / n;
    let v = 3.0 * ph.dot(m_hat) * ph - m_hat;
    let vn = v.norm();
    if vn < 1e-15 {
        Vec3::zeros()
    } else {
        v / vn
    }
}

/// Evaluates the stacked constraint vector and its Jacobians for a given
/// scenario geometry.
#[derive(Debug, Clone)]
pub struct ConstraintEvaluator {
    pub set: ConstraintSet,
    pub dh: DhTable,
    /// EPM dipole axis in the mount frame.
    pub epm_axis: Vec3,
}

impl ConstraintEvaluator {
    fn orientation_residual(&self, p_i: &Vec3, q: &JointVec) -> Vec3 {
        let target = self
            .set
            .orientation_target
            .expect("orientation rows require a target");
        let r_hat = target / target.norm();
        let pose = forward_kinematics(&self.dh, q.as_slice());
        let m_hat = pose.rotation * self.epm_axis;
        field_direction(&(p_i - pose.position), &m_hat) - r_hat
    }

    /// Stacked constraint values for one stage (or terminal when `u` is None).
    pub fn evaluate(&self, x: &State, u: Option<&ControlVec>) -> DVector<f64> {
        let cs = &self.set;
        let layout = if u.is_some() {
            ConstraintLayout::stage(cs)
        } else {
            ConstraintLayout::terminal(cs)
        };
        let mut g = DVector::zeros(layout.dim());
        let mut row = 0;
        for i in 0..7 {
            g[row + i] = cs.q_min[i] - x.q[i];
            g[row + 7 + i] = x.q[i] - cs.q_max[i];
        }
        row += 14;
        if let Some(u) = u {
            for i in 0..7 {
                g[row + i] = cs.u_min[i] - u[i];
                g[row + 7 + i] = u[i] - cs.u_max[i];
            }
            row += 14;
        }
        for i in 0..3 {
            g[row + i] = cs.v_min[i] - x.v[i];
            g[row + 3 + i] = x.v[i] - cs.v_max[i];
        }
        row += 6;
        if layout.n_epm > 0 || layout.orientation {
            let pose = forward_kinematics(&self.dh, x.q.as_slice());
            for (axis, bound) in cs.epm_min_position.iter().enumerate() {
                if let Some(b) = bound {
                    g[row] = b - pose.position[axis];
                    row += 1;
                }
            }
            for obs in &cs.obstacles {
                g[row] = obs.radius + obs.margin - (x.p - obs.center).norm();
                row += 1;
            }
            if layout.orientation {
                let h = self.orientation_residual(&x.p, &x.q);
                for i in 0..3 {
                    g[row + i] = h[i];
                }
                row += 3;
            }
        } else {
            for obs in &cs.obstacles {
                g[row] = obs.radius + obs.margin - (x.p - obs.center).norm();
                row += 1;
            }
        }
        debug_assert_eq!(row, layout.dim());
        g
    }

    /// Constraint values plus Jacobians with respect to the 13-state and, for
    /// stage rows, the 7 inputs.
    pub fn evaluate_with_jacobians(
        &self,
        x: &State,
        u: Option<&ControlVec>,
    ) -> (DVector<f64>, DMatrix<f64>, Option<DMatrix<f64>>) {
        let cs = &self.set;
        let layout = if u.is_some() {
            ConstraintLayout::stage(cs)
        } else {
            ConstraintLayout::terminal(cs)
        };
        let g = self.evaluate(x, u);
        let m = layout.dim();
        let mut gx = DMatrix::zeros(m, crate::STATE_DIM);
        let mut gu = u.map(|_| DMatrix::zeros(m, crate::CONTROL_DIM));

        let mut row = 0;
        for i in 0..7 {
            gx[(row + i, 6 + i)] = -1.0;
            gx[(row + 7 + i, 6 + i)] = 1.0;
        }
        row += 14;
        if let Some(gu) = gu.as_mut() {
            for i in 0..7 {
                gu[(row + i, i)] = -1.0;
                gu[(row + 7 + i, i)] = 1.0;
            }
            row += 14;
        }
        for i in 0..3 {
            gx[(row + i, 3 + i)] = -1.0;
            gx[(row + 3 + i, 3 + i)] = 1.0;
        }
        row += 6;
        if layout.n_epm > 0 {
            let jac = geometric_jacobian(&self.dh, &x.q);
            for (axis, bound) in cs.epm_min_position.iter().enumerate() {
                if bound.is_some() {
                    for j in 0..7 {
                        gx[(row, 6 + j)] = -jac[(axis, j)];
                    }
                    row += 1;
                }
            }
        }
        for obs in &cs.obstacles {
            let d = x.p - obs.center;
            let n = d.norm();
            if n > 1e-12 {
                for i in 0..3 {
                    gx[(row, i)] = -d[i] / n;
                }
            }
            row += 1;
        }
        if layout.orientation {
            // Finite differences over the IPM position and the joint angles.
            let h = 1e-6;
            for c in 0..3 {
                let mut dp = Vec3::zeros();
                dp[c] = h;
                let rp = self.orientation_residual(&(x.p + dp), &x.q);
                let rm = self.orientation_residual(&(x.p - dp), &x.q);
                let col = (rp - rm) / (2.0 * h);
                for i in 0..3 {
                    gx[(row + i, c)] = col[i];
                }
            }
            for c in 0..7 {
                let mut qp = x.q;
                let mut qm = x.q;
                qp[c] += h;
                qm[c] -= h;
                let rp = self.orientation_residual(&x.p, &qp);
                let rm = self.orientation_residual(&x.p, &qm);
                let col = (rp - rm) / (2.0 * h);
                for i in 0..3 {
                    gx[(row + i, 6 + c)] = col[i];
                }
            }
            row += 3;
        }
        debug_assert_eq!(row, m);
        (g, gx, gu)
    }
}

/// Augmented-Lagrangian multiplier and penalty state for one trajectory.
#[derive(Debug, Clone)]
pub struct AlState {
    /// One multiplier vector per timestep, index `N` holding the terminal one.
    pub lambda: Vec<DVector<f64>>,
    /// Quadratic penalty weight.
    pub mu: f64,
}

/// Outer-loop schedule parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AlParams {
    pub mu_initial: f64,
    pub mu_scale: f64,
    pub mu_max: f64,
}

impl Default for AlParams {
    fn default() -> Self {
        Self {
            mu_initial: 1.0,
            mu_scale: 10.0,
            mu_max: 1e8,
        }
    }
}

impl AlState {
    /// Zero multipliers for a horizon of `n` stages plus the terminal step.
    pub fn new(evaluator: &ConstraintEvaluator, horizon: usize, params: &AlParams) -> Self {
        let stage_dim = ConstraintLayout::stage(&evaluator.set).dim();
        let term_dim = ConstraintLayout::terminal(&evaluator.set).dim();
        let mut lambda: Vec<DVector<f64>> =
            (0..horizon).map(|_| DVector::zeros(stage_dim)).collect();
        lambda.push(DVector::zeros(term_dim));
        Self {
            lambda,
            mu: params.mu_initial,
        }
    }
}

/// Active-set penalty weight for each row: equality rows are always active;
/// inequality rows are active when violated or carrying a multiplier.
fn penalty_weights(
    g: &DVector<f64>,
    lambda: &DVector<f64>,
    mu: f64,
    layout: &ConstraintLayout,
) -> DVector<f64> {
    DVector::from_fn(g.len(), |i, _| {
        if layout.is_equality(i) || g[i] >= 0.0 || lambda[i] > 0.0 {
            mu
        } else {
            0.0
        }
    })
}

/// AL penalty value `(lambda + 1/2 I_mu g)' g` added to the base cost.
pub fn al_penalty_value(
    g: &DVector<f64>,
    lambda: &DVector<f64>,
    mu: f64,
    layout: &ConstraintLayout,
) -> Result<f64, ConstraintError> {
    if g.len() != lambda.len() {
        return Err(ConstraintError::DimensionMismatch {
            lambda: lambda.len(),
            g: g.len(),
        });
    }
    let w = penalty_weights(g, lambda, mu, layout);
    let mut v = 0.0;
    for i in 0..g.len() {
        v += (lambda[i] + 0.5 * w[i] * g[i]) * g[i];
    }
    Ok(v)
}

/// Adds the AL terms (value, gradients, and Gauss-Newton Hessian blocks) of
/// one stage to a base cost expansion.
pub fn al_stage_expansion(
    mut base: StageExpansion,
    g: &DVector<f64>,
    gx: &DMatrix<f64>,
    gu: &DMatrix<f64>,
    lambda: &DVector<f64>,
    mu: f64,
    layout: &ConstraintLayout,
) -> Result<StageExpansion, ConstraintError> {
    base.value += al_penalty_value(g, lambda, mu, layout)?;
    let w = penalty_weights(g, lambda, mu, layout);
    // lambda + I_mu g
    let lam_eff = DVector::from_fn(g.len(), |i, _| lambda[i] + w[i] * g[i]);
    for r in 0..g.len() {
        for c in 0..crate::STATE_DIM {
            base.lx[c] += gx[(r, c)] * lam_eff[r];
        }
        for c in 0..crate::CONTROL_DIM {
            base.lu[c] += gu[(r, c)] * lam_eff[r];
        }
    }
    for r in 0..g.len() {
        if w[r] == 0.0 {
            continue;
        }
        for a in 0..crate::STATE_DIM {
            let ga = gx[(r, a)];
            if ga == 0.0 {
                continue;
            }
            for b in 0..crate::STATE_DIM {
                base.lxx[(a, b)] += w[r] * ga * gx[(r, b)];
            }
        }
        for a in 0..crate::CONTROL_DIM {
            let ga = gu[(r, a)];
            if ga == 0.0 {
                continue;
            }
            for b in 0..crate::CONTROL_DIM {
                base.luu[(a, b)] += w[r] * ga * gu[(r, b)];
            }
            for b in 0..crate::STATE_DIM {
                base.lux[(a, b)] += w[r] * ga * gx[(r, b)];
            }
        }
    }
    Ok(base)
}

/// Terminal counterpart of [`al_stage_expansion`].
pub fn al_terminal_expansion(
    mut base: TerminalExpansion,
    g: &DVector<f64>,
    gx: &DMatrix<f64>,
    lambda: &DVector<f64>,
    mu: f64,
    layout: &ConstraintLayout,
) -> Result<TerminalExpansion, ConstraintError> {
    base.value += al_penalty_value(g, lambda, mu, layout)?;
    let w = penalty_weights(g, lambda, mu, layout);
    let lam_eff = DVector::from_fn(g.len(), |i, _| lambda[i] + w[i] * g[i]);
    for r in 0..g.len() {
        for c in 0..crate::STATE_DIM {
            base.lx[c] += gx[(r, c)] * lam_eff[r];
        }
    }
    for r in 0..g.len() {
        if w[r] == 0.0 {
            continue;
        }
        for a in 0..crate::STATE_DIM {
            let ga = gx[(r, a)];
            if ga == 0.0 {
                continue;
            }
            for b in 0..crate::STATE_DIM {
                base.lxx[(a, b)] += w[r] * ga * gx[(r, b)];
            }
        }
    }
    Ok(base)
}

/// Standard AL multiplier update from the converged inner solve:
/// inequalities `lambda <- max(0, lambda + mu g)`, equalities
/// `lambda <- lambda + mu h`, then `mu <- min(mu * phi, mu_max)`.
pub fn update_multipliers(
    al: &AlState,
    g_traj: &[DVector<f64>],
    stage_layout: &ConstraintLayout,
    terminal_layout: &ConstraintLayout,
    params: &AlParams,
) -> AlState {
    let n = g_traj.len();
    let lambda = al
        .lambda
        .iter()
        .zip(g_traj)
        .enumerate()
        .map(|(k, (lam, g))| {
            let layout = if k + 1 == n {
                terminal_layout
            } else {
                stage_layout
            };
            DVector::from_fn(lam.len(), |i, _| {
                let next = lam[i] + al.mu * g[i];
                if layout.is_equality(i) {
                    next
                } else {
                    next.max(0.0)
                }
            })
        })
        .collect();
    AlState {
        lambda,
        mu: (al.mu * params.mu_scale).min(params.mu_max),
    }
}

/// Maximum constraint violation over a trajectory of constraint values:
/// `max(g, 0)` for inequality rows, `|h|` for equality rows.
pub fn max_violation(
    g_traj: &[DVector<f64>],
    stage_layout: &ConstraintLayout,
    terminal_layout: &ConstraintLayout,
) -> f64 {
    let n = g_traj.len();
    let mut worst: f64 = 0.0;
    for (k, g) in g_traj.iter().enumerate() {
        let layout = if k + 1 == n {
            terminal_layout
        } else {
            stage_layout
        };
        for i in 0..g.len() {
            let v = if layout.is_equality(i) {
                g[i].abs()
            } else {
                g[i].max(0.0)
            };
            worst = worst.max(v);
        }
    }
    worst
}
