//! Combined EPM+IPM discrete-time state transition and its linearization.
//!
//! The joints are velocity-commanded and integrate exactly; the IPM
//! translational dynamics are integrated with RK4, evaluating the EPM pose
//! from interpolated joint angles at the stage times.

use crate::kinematics::{forward_kinematics, DhTable, EpmPose};
use crate::magnetics::{aligned_force, MagnetSpec, MagneticsError, Separation};
use crate::{ControlVec, JointVec, StateControlMat, StateMat, StateVec, Vec3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("separation violation at RK4 stage {stage}: {source}")]
    Separation {
        stage: usize,
        source: MagneticsError,
    },
}

/// IPM fluid-environment parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FluidParams {
    /// Quadratic drag coefficient, N·s²/m².
    pub drag_coefficient: f64,
    /// Signed vertical effective weight (gravity + buoyancy) along z, N.
    /// Negative means the capsule sinks without magnetic support.
    pub effective_weight_z: f64,
    /// IPM mass, kg.
    pub ipm_mass: f64,
}

impl FluidParams {
    pub fn effective_weight(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, self.effective_weight_z)
    }
}

/// Combined EPM+IPM state: IPM position (m), IPM velocity (m/s), joint
/// angles (rad).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub p: Vec3,
    pub v: Vec3,
    pub q: JointVec,
}

impl State {
    pub fn to_vector(&self) -> StateVec {
        let mut x = StateVec::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.p);
        x.fixed_rows_mut::<3>(3).copy_from(&self.v);
        x.fixed_rows_mut::<7>(6).copy_from(&self.q);
        x
    }

    pub fn from_vector(x: &StateVec) -> Self {
        Self {
            p: x.fixed_rows::<3>(0).into_owned(),
            v: x.fixed_rows::<3>(3).into_owned(),
            q: x.fixed_rows::<7>(6).into_owned(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|e| e.is_finite())
    }
}

/// Everything needed to evaluate the state transition.
#[derive(Debug, Clone)]
pub struct PlantModel {
    pub dh: DhTable,
    pub epm: MagnetSpec,
    pub ipm: MagnetSpec,
    pub fluid: FluidParams,
    pub min_separation: f64,
}

impl PlantModel {
    pub fn epm_pose(&self, q: &JointVec) -> EpmPose {
        forward_kinematics(&self.dh, q.as_slice())
    }

    /// Magnetic force on the IPM for the given IPM position and EPM pose.
    pub fn magnetic_force(&self, p_i: &Vec3, epm_pose: &EpmPose) -> Result<Vec3, MagneticsError> {
        let sep = Separation::new(p_i - epm_pose.position, self.min_separation)?;
        let m_e_hat = epm_pose.rotation * self.epm.axis_in_mount_frame;
        aligned_force(
            &sep,
            &m_e_hat,
            self.epm.dipole_magnitude,
            self.ipm.dipole_magnitude,
        )
    }

    /// IPM translational acceleration: `(f_m + f_w - f_d) / m` with quadratic
    /// drag `f_d = C_d ‖v‖ v` opposing the velocity.
    pub fn ipm_acceleration(
        &self,
        p_i: &Vec3,
        v_i: &Vec3,
        epm_pose: &EpmPose,
    ) -> Result<Vec3, MagneticsError> {
        let f_m = self.magnetic_force(p_i, epm_pose)?;
        let f_d = self.fluid.drag_coefficient * v_i.norm() * v_i;
        Ok((f_m + self.fluid.effective_weight() - f_d) / self.fluid.ipm_mass)
    }

    /// Drag-and-weight-only acceleration, used by the estimator as a fallback
    /// when the magnetic model is outside its validity range.
    pub fn ballistic_acceleration(&self, v_i: &Vec3) -> Vec3 {
        let f_d = self.fluid.drag_coefficient * v_i.norm() * v_i;
        (self.fluid.effective_weight() - f_d) / self.fluid.ipm_mass
    }

    /// One discrete step: exact joint integration `q' = q + u dt`, RK4 on the
    /// IPM translational state with the EPM pose evaluated at stage times.
    pub fn step(&self, x: &State, u: &ControlVec, dt: f64) -> Result<State, PlantError> {
        if dt <= 0.0 {
            return Err(PlantError::NonPositiveDt(dt));
        }
        let pose0 = self.epm_pose(&x.q);
        let pose_half = self.epm_pose(&(x.q + 0.5 * dt * u));
        let pose1 = self.epm_pose(&(x.q + dt * u));

        let accel = |p: &Vec3, v: &Vec3, pose: &EpmPose, stage: usize| {
            self.ipm_acceleration(p, v, pose)
                .map_err(|source| PlantError::Separation { stage, source })
        };

        let (p0, v0) = (x.p, x.v);
        let a1 = accel(&p0, &v0, &pose0, 0)?;
        let (k1p, k1v) = (v0, a1);
        let a2 = accel(&(p0 + 0.5 * dt * k1p), &(v0 + 0.5 * dt * k1v), &pose_half, 1)?;
        let (k2p, k2v) = (v0 + 0.5 * dt * k1v, a2);
        let a3 = accel(&(p0 + 0.5 * dt * k2p), &(v0 + 0.5 * dt * k2v), &pose_half, 2)?;
        let (k3p, k3v) = (v0 + 0.5 * dt * k2v, a3);
        let a4 = accel(&(p0 + dt * k3p), &(v0 + dt * k3v), &pose1, 3)?;
        let (k4p, k4v) = (v0 + dt * k3v, a4);

        Ok(State {
            p: p0 + dt / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p),
            v: v0 + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v),
            q: x.q + dt * u,
        })
    }

    /// Jacobians of [`PlantModel::step`] with respect to state and control,
    /// by central finite differences with per-coordinate scaled steps.
    pub fn linearize(
        &self,
        x: &State,
        u: &ControlVec,
        dt: f64,
    ) -> Result<(StateMat, StateControlMat), PlantError> {
        let x0 = x.to_vector();
        let mut f_x = StateMat::zeros();
        for i in 0..crate::STATE_DIM {
            let h = 1e-6 * x0[i].abs().max(1.0);
            let mut xp = x0;
            let mut xm = x0;
            xp[i] += h;
            xm[i] -= h;
            let sp = self.step(&State::from_vector(&xp), u, dt)?.to_vector();
            let sm = self.step(&State::from_vector(&xm), u, dt)?.to_vector();
            f_x.set_column(i, &((sp - sm) / (2.0 * h)));
        }
        let mut f_u = StateControlMat::zeros();
        for i in 0..crate::CONTROL_DIM {
            let h = 1e-6 * u[i].abs().max(1.0);
            let mut up = *u;
            let mut um = *u;
            up[i] += h;
            um[i] -= h;
            let sp = self.step(x, &up, dt)?.to_vector();
            let sm = self.step(x, &um, dt)?.to_vector();
            f_u.set_column(i, &((sp - sm) / (2.0 * h)));
        }
        Ok((f_x, f_u))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{DhConvention, DhRow};
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;

    /// Model with both magnets zeroed so only drag and weight act.
    fn ballistic_model(weight_z: f64) -> PlantModel {
        PlantModel {
            dh: DhTable {
                convention: DhConvention::Classic,
                rows: vec![
                    DhRow {
                        a: 0.1,
                        d: 0.1,
                        alpha: 0.0,
                        theta_offset: 0.0
                    };
                    7
                ],
                tool_transform: Matrix4::identity(),
            },
            epm: MagnetSpec {
                dipole_magnitude: 0.0,
                axis_in_mount_frame: Vec3::z(),
            },
            ipm: MagnetSpec {
                dipole_magnitude: 0.0,
                axis_in_mount_frame: Vec3::x(),
            },
            fluid: FluidParams {
                drag_coefficient: 0.77,
                effective_weight_z: weight_z,
                ipm_mass: 8.1e-3,
            },
            min_separation: 1e-6,
        }
    }

    fn magnetic_model() -> PlantModel {
        let mut m = ballistic_model(-0.69e-3);
        m.epm = MagnetSpec::new(51.25, Vec3::z()).unwrap();
        m.ipm = MagnetSpec::new(0.142, Vec3::x()).unwrap();
        m.min_separation = 0.05;
        m
    }

    /// A state whose IPM sits well below the (zero-q) EPM position.
    fn far_state() -> State {
        State {
            p: Vec3::new(0.05, 0.02, -0.4),
            v: Vec3::new(0.03, -0.02, 0.01),
            q: JointVec::from_fn(|i, _| 0.1 * (i as f64 + 1.0)),
        }
    }

    #[test]
    fn drag_only_acceleration_arithmetic() {
        let m = ballistic_model(0.0);
        let pose = m.epm_pose(&JointVec::zeros());
        let a = m
            .ipm_acceleration(&Vec3::new(1.0, 0.0, 0.0), &Vec3::new(0.1, 0.0, 0.0), &pose)
            .unwrap();
        // a = -C_d * ‖v‖ v / m = -(0.77 * 0.01 / 0.0081) x̂
        assert_relative_eq!(a.x, -0.77 * 0.01 / 8.1e-3, max_relative = 1e-12);
        assert!(a.x < -0.95 && a.x > -0.96);
        assert_relative_eq!(a.y, 0.0);
        assert_relative_eq!(a.z, 0.0);
    }

    #[test]
    fn drag_is_dissipative() {
        let m = ballistic_model(0.0);
        let pose = m.epm_pose(&JointVec::zeros());
        for v in [
            Vec3::new(0.1, -0.2, 0.05),
            Vec3::new(-1.0, 0.0, 0.0),
            Vec3::zeros(),
        ] {
            let f_d = -m.fluid.ipm_mass
                * m.ipm_acceleration(&Vec3::new(1.0, 0.0, 0.0), &v, &pose).unwrap();
            assert!(f_d.dot(&v) >= 0.0);
        }
    }

    #[test]
    fn free_drift() {
        let m = ballistic_model(0.0);
        let x = State {
            p: Vec3::new(0.1, 0.2, 0.3),
            v: Vec3::zeros(),
            q: JointVec::from_element(0.5),
        };
        let next = m.step(&x, &ControlVec::zeros(), 0.02).unwrap();
        assert_eq!(next.q, x.q);
        assert_relative_eq!((next.v - x.v).norm(), 0.0);
        assert_relative_eq!((next.p - x.p).norm(), 0.0);

        // Nonzero velocity, no forces: p advances by v dt, v only shrinks by drag.
        let x2 = State {
            v: Vec3::new(0.05, 0.0, 0.0),
            ..x
        };
        let m2 = {
            let mut m2 = ballistic_model(0.0);
            m2.fluid.drag_coefficient = 0.0;
            m2
        };
        let next2 = m2.step(&x2, &ControlVec::zeros(), 0.02).unwrap();
        assert_relative_eq!((next2.p - (x2.p + 0.02 * x2.v)).norm(), 0.0, epsilon = 1e-15);
        assert_relative_eq!((next2.v - x2.v).norm(), 0.0);
    }

    #[test]
    fn constant_force_integration() {
        let m = ballistic_model(-0.69e-3);
        let x = State {
            p: Vec3::zeros(),
            v: Vec3::zeros(),
            q: JointVec::zeros(),
        };
        let dt = 0.02;
        let expected_dv = m.fluid.effective_weight_z / m.fluid.ipm_mass * dt;

        // Without drag the constant force integrates exactly.
        let mut dragless = m.clone();
        dragless.fluid.drag_coefficient = 0.0;
        let next = dragless.step(&x, &ControlVec::zeros(), dt).unwrap();
        assert_relative_eq!(next.v.z, expected_dv, max_relative = 1e-12);
        assert_relative_eq!(next.p.z, 0.5 * expected_dv * dt, max_relative = 1e-12);

        // With drag the capsule sinks slightly slower, never faster.
        let next_drag = m.step(&x, &ControlVec::zeros(), dt).unwrap();
        assert!(next_drag.v.z < 0.0);
        assert!(next_drag.v.z > expected_dv);
        assert_relative_eq!(next_drag.v.z, expected_dv, max_relative = 2e-3);
    }

    #[test]
    fn rk4_order_check() {
        let m = magnetic_model();
        let x = far_state();
        let u = ControlVec::from_fn(|i, _| 0.2 * ((i + 1) as f64) * 0.1);

        let roll = |n: usize, dt: f64| -> State {
            let mut s = x;
            for _ in 0..n {
                s = m.step(&s, &u, dt).unwrap();
            }
            s
        };
        let reference = roll(400, 0.04 / 400.0);
        let coarse = roll(1, 0.04);
        let fine = roll(2, 0.02);
        let err = |s: &State| (s.p - reference.p).norm() + (s.v - reference.v).norm();
        let ratio = err(&coarse) / err(&fine);
        // Fourth-order method: halving dt should cut error by ~16x.
        assert!(ratio > 8.0 && ratio < 40.0, "observed ratio {ratio}");
    }

    #[test]
    fn linearize_matches_independent_finite_differences() {
        let m = magnetic_model();
        let x = far_state();
        let u = ControlVec::from_fn(|i, _| 0.05 * (i as f64 - 3.0));
        let dt = 0.02;
        let (f_x, f_u) = m.linearize(&x, &u, dt).unwrap();

        // Independent oracle with a different step size.
        let h = 3e-7;
        let x0 = x.to_vector();
        for i in 0..crate::STATE_DIM {
            let mut xp = x0;
            let mut xm = x0;
            xp[i] += h;
            xm[i] -= h;
            let sp = m.step(&State::from_vector(&xp), &u, dt).unwrap().to_vector();
            let sm = m.step(&State::from_vector(&xm), &u, dt).unwrap().to_vector();
            let fd = (sp - sm) / (2.0 * h);
            let col = f_x.column(i);
            let denom = fd.amax().max(1.0);
            assert!(
                (col - fd).amax() / denom < 1e-4,
                "state column {i} mismatch"
            );
        }

        // dq'/du = dt * I exactly.
        for i in 0..7 {
            for j in 0..7 {
                let expected = if i == j { dt } else { 0.0 };
                assert_relative_eq!(f_u[(6 + i, j)], expected, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn zeroed_forces_give_double_integrator_block() {
        let mut m = ballistic_model(0.0);
        m.fluid.drag_coefficient = 0.0;
        let x = State {
            p: Vec3::new(0.1, 0.0, 0.0),
            v: Vec3::new(0.01, 0.0, 0.0),
            q: JointVec::zeros(),
        };
        let dt = 0.02;
        let (f_x, _) = m.linearize(&x, &ControlVec::zeros(), dt).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { dt } else { 0.0 };
                assert_relative_eq!(f_x[(i, 3 + j)], expected, epsilon = 1e-9);
                let eye = if i == j { 1.0 } else { 0.0 };
                assert_relative_eq!(f_x[(i, j)], eye, epsilon = 1e-9);
                assert_relative_eq!(f_x[(3 + i, 3 + j)], eye, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn energy_dissipation_without_forces() {
        let m = ballistic_model(0.0);
        let mut x = State {
            p: Vec3::zeros(),
            v: Vec3::new(0.3, -0.2, 0.1),
            q: JointVec::zeros(),
        };
        let mut speed = x.v.norm();
        for _ in 0..100 {
            x = m.step(&x, &ControlVec::zeros(), 0.02).unwrap();
            let s = x.v.norm();
            assert!(s <= speed + 1e-15);
            speed = s;
        }
    }

    #[test]
    fn step_is_deterministic() {
        let m = magnetic_model();
        let x = far_state();
        let u = ControlVec::from_element(0.1);
        let a = m.step(&x, &u, 0.02).unwrap();
        let b = m.step(&x, &u, 0.02).unwrap();
        assert_eq!(a.to_vector(), b.to_vector());
    }

    #[test]
    fn separation_violation_reports_stage() {
        let m = magnetic_model();
        // IPM on top of the zero-q EPM position.
        let pose = m.epm_pose(&JointVec::zeros());
        let x = State {
            p: pose.position + Vec3::new(0.01, 0.0, 0.0),
            v: Vec3::zeros(),
            q: JointVec::zeros(),
        };
        match m.step(&x, &ControlVec::zeros(), 0.02) {
            Err(PlantError::Separation { stage: 0, .. }) => {}
            other => panic!("expected stage-0 separation error, got {other:?}"),
        }
    }

    #[test]
    fn nonpositive_dt_rejected() {
        let m = ballistic_model(0.0);
        let x = far_state();
        assert!(matches!(
            m.step(&x, &ControlVec::zeros(), 0.0),
            Err(PlantError::NonPositiveDt(_))
        ));
    }
}
