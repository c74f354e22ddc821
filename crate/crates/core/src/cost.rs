//! Base trajectory cost: quadratic goal tracking, input regularization, and
//! the manipulability (condition-number) penalty.

use crate::kinematics::{condition_number, geometric_jacobian, DhTable};
use crate::{ControlVec, GainMat, JointVec, StateMat, StateVec};
use nalgebra::SMatrix;
use serde::{Deserialize, Serialize};

pub type ControlMat = SMatrix<f64, 7, 7>;

/// Second-order expansion of a stage cost about a nominal `(x, u)`.
#[derive(Debug, Clone)]
pub struct StageExpansion {
    pub value: f64,
    pub lx: StateVec,
    pub lu: ControlVec,
    pub lxx: StateMat,
    pub luu: ControlMat,
    pub lux: GainMat,
}

impl StageExpansion {
    pub fn zero() -> Self {
        Self {
            value: 0.0,
            lx: StateVec::zeros(),
            lu: ControlVec::zeros(),
            lxx: StateMat::zeros(),
            luu: ControlMat::zeros(),
            lux: GainMat::zeros(),
        }
    }
}

/// Second-order expansion of the terminal cost.
#[derive(Debug, Clone)]
pub struct TerminalExpansion {
    pub value: f64,
    pub lx: StateVec,
    pub lxx: StateMat,
}

impl TerminalExpansion {
    pub fn zero() -> Self {
        Self {
            value: 0.0,
            lx: StateVec::zeros(),
            lxx: StateMat::zeros(),
        }
    }
}

/// Diagonal cost weights for the 13-state / 7-input problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostWeights {
    /// Running state weight diagonal.
    pub state: StateVec,
    /// Running input weight diagonal.
    pub input: ControlVec,
    /// Terminal state weight diagonal.
    pub terminal: StateVec,
    /// Weight on the condition-number penalty of the arm Jacobian.
    pub manipulability: f64,
}

/// `l_k = (x - x_g)' Q (x - x_g) + u' R u + w * ln(kappa(J(q)))`,
/// `l_N = (x_N - x_g)' Q_f (x_N - x_g)`.
#[derive(Debug, Clone)]
pub struct GoalCost {
    pub weights: CostWeights,
    pub goal: StateVec,
    pub dh: DhTable,
}

/// Monotone, saturating penalty applied to the condition number.
pub fn condition_penalty(kappa: f64) -> f64 {
    kappa.ln()
}

/// Condition-number penalty and its gradient over the joint angles, gradient
/// by central finite differences.
pub fn manipulability_penalty(q: &JointVec, dh: &DhTable, weight: f64) -> (f64, JointVec) {
    if weight == 0.0 {
        return (0.0, JointVec::zeros());
    }
    let value = weight * condition_penalty(condition_number(&geometric_jacobian(dh, q)));
    let mut grad = JointVec::zeros();
    let h = 1e-6;
    for i in 0..7 {
        let mut qp = *q;
        let mut qm = *q;
        qp[i] += h;
        qm[i] -= h;
        let fp = condition_penalty(condition_number(&geometric_jacobian(dh, &qp)));
        let fm = condition_penalty(condition_number(&geometric_jacobian(dh, &qm)));
        grad[i] = weight * (fp - fm) / (2.0 * h);
    }
    (value, grad)
}

impl GoalCost {
    pub fn stage_value(&self, x: &StateVec, u: &ControlVec) -> f64 {
        let dx = x - self.goal;
        let mut v = 0.0;
        for i in 0..crate::STATE_DIM {
            v += self.weights.state[i] * dx[i] * dx[i];
        }
        for i in 0..crate::CONTROL_DIM {
            v += self.weights.input[i] * u[i] * u[i];
        }
        if self.weights.manipulability != 0.0 {
            let q = x.fixed_rows::<7>(6).into_owned();
            v += self.weights.manipulability
                * condition_penalty(condition_number(&geometric_jacobian(&self.dh, &q)));
        }
        v
    }

    pub fn terminal_value(&self, x: &StateVec) -> f64 {
        let dx = x - self.goal;
        (0..crate::STATE_DIM)
            .map(|i| self.weights.terminal[i] * dx[i] * dx[i])
            .sum()
    }

    pub fn stage(&self, x: &StateVec, u: &ControlVec) -> StageExpansion {
        let dx = x - self.goal;
        let mut e = StageExpansion::zero();
        for i in 0..crate::STATE_DIM {
            let w = self.weights.state[i];
            e.value += w * dx[i] * dx[i];
            e.lx[i] = 2.0 * w * dx[i];
            e.lxx[(i, i)] = 2.0 * w;
        }
        for i in 0..crate::CONTROL_DIM {
            let w = self.weights.input[i];
            e.value += w * u[i] * u[i];
            e.lu[i] = 2.0 * w * u[i];
            e.luu[(i, i)] = 2.0 * w;
        }
        if self.weights.manipulability != 0.0 {
            let q = x.fixed_rows::<7>(6).into_owned();
            let (v, g) = manipulability_penalty(&q, &self.dh, self.weights.manipulability);
            e.value += v;
            // Gauss-Newton style: penalty curvature left to regularization.
            for i in 0..7 {
                e.lx[6 + i] += g[i];
            }
        }
        e
    }

    pub fn terminal(&self, x: &StateVec) -> TerminalExpansion {
        let dx = x - self.goal;
        let mut e = TerminalExpansion::zero();
        for i in 0..crate::STATE_DIM {
            let w = self.weights.terminal[i];
            e.value += w * dx[i] * dx[i];
            e.lx[i] = 2.0 * w * dx[i];
            e.lxx[(i, i)] = 2.0 * w;
        }
        e
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{DhConvention, DhRow};
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;

    fn test_dh() -> DhTable {
        DhTable {
            convention: DhConvention::Classic,
            rows: (0..7)
                .map(|i| DhRow {
                    a: 0.1 + 0.02 * i as f64,
                    d: 0.05,
                    alpha: if i % 2 == 0 { 0.5 } else { -0.5 },
                    theta_offset: 0.0,
                })
                .collect(),
            tool_transform: Matrix4::identity(),
        }
    }

    #[test]
    fn zero_weight_disables_manipulability() {
        let (v, g) = manipulability_penalty(&JointVec::from_element(0.3), &test_dh(), 0.0);
        assert_eq!(v, 0.0);
        assert_eq!(g, JointVec::zeros());
    }

    #[test]
    fn penalty_monotone_in_kappa() {
        let mut last = f64::NEG_INFINITY;
        for kappa in [1.0, 2.0, 10.0, 1e6, crate::kinematics::CONDITION_SENTINEL] {
            let p = condition_penalty(kappa);
            assert!(p.is_finite());
            assert!(p >= last);
            last = p;
        }
    }

    #[test]
    fn expansion_matches_value_gradient() {
        let cost = GoalCost {
            weights: CostWeights {
                state: StateVec::from_fn(|i, _| 1.0 + i as f64),
                input: ControlVec::from_element(0.5),
                terminal: StateVec::from_element(2.0),
                manipulability: 0.1,
            },
            goal: StateVec::from_element(0.2),
            dh: test_dh(),
        };
        let x = StateVec::from_fn(|i, _| 0.1 * (i as f64) - 0.3);
        let u = ControlVec::from_fn(|i, _| 0.05 * i as f64);
        let e = cost.stage(&x, &u);
        assert_relative_eq!(e.value, cost.stage_value(&x, &u), max_relative = 1e-12);

        // Gradient check by finite differences on the value.
        let h = 1e-6;
        for i in 0..crate::STATE_DIM {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (cost.stage_value(&xp, &u) - cost.stage_value(&xm, &u)) / (2.0 * h);
            assert_relative_eq!(e.lx[i], fd, max_relative = 1e-4, epsilon = 1e-8);
        }
        for i in 0..crate::CONTROL_DIM {
            let mut up = u;
            let mut um = u;
            up[i] += h;
            um[i] -= h;
            let fd = (cost.stage_value(&x, &up) - cost.stage_value(&x, &um)) / (2.0 * h);
            assert_relative_eq!(e.lu[i], fd, max_relative = 1e-6, epsilon = 1e-9);
        }
    }
}
