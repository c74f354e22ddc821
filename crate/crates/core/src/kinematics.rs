//! DH-parameterized forward kinematics, geometric Jacobian, and
//! manipulability metrics for the serial arm carrying the EPM.

use crate::{JointVec, Mat3, Vec3};
use nalgebra::{Matrix4, SMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Condition number reported for effectively rank-deficient Jacobians.
pub const CONDITION_SENTINEL: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("tool transform rotation block is not orthonormal (max deviation {0:.3e})")]
    NonOrthonormalTool(f64),
    #[error("expected {expected} DH rows, got {got}")]
    WrongRowCount { expected: usize, got: usize },
}

/// Which textbook DH convention the table rows follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DhConvention {
    /// Classic Denavit-Hartenberg: `RotZ(theta) TransZ(d) TransX(a) RotX(alpha)`.
    #[default]
    Classic,
    /// Craig's modified convention: `RotX(alpha) TransX(a) RotZ(theta) TransZ(d)`.
    Modified,
}

/// One DH row. `theta_offset` is added to the joint variable.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DhRow {
    pub a: f64,
    pub d: f64,
    pub alpha: f64,
    pub theta_offset: f64,
}

/// DH table plus the fixed transform from the last joint frame to the EPM
/// center/axis frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DhTable {
    pub convention: DhConvention,
    pub rows: Vec<DhRow>,
    /// Homogeneous transform from the last joint frame to the EPM mount frame.
    pub tool_transform: Matrix4<f64>,
}

/// EPM pose in the arm base frame.
#[derive(Debug, Clone, Copy)]
pub struct EpmPose {
    pub position: Vec3,
    pub rotation: Mat3,
}

impl DhTable {
    pub fn validate(&self) -> Result<(), KinematicsError> {
        let r = self.tool_transform.fixed_view::<3, 3>(0, 0);
        let dev = (r.transpose() * r - Mat3::identity()).abs().max();
        if dev > 1e-9 {
            return Err(KinematicsError::NonOrthonormalTool(dev));
        }
        Ok(())
    }

    pub fn num_joints(&self) -> usize {
        self.rows.len()
    }
}

fn rot_z(theta: f64) -> Matrix4<f64> {
    let (s, c) = theta.sin_cos();
    let mut m = Matrix4::identity();
    m[(0, 0)] = c;
    m[(0, 1)] = -s;
    m[(1, 0)] = s;
    m[(1, 1)] = c;
    m
}

fn rot_x(alpha: f64) -> Matrix4<f64> {
    let (s, c) = alpha.sin_cos();
    let mut m = Matrix4::identity();
    m[(1, 1)] = c;
    m[(1, 2)] = -s;
    m[(2, 1)] = s;
    m[(2, 2)] = c;
    m
}

fn trans(x: f64, y: f64, z: f64) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m[(0, 3)] = x;
    m[(1, 3)] = y;
    m[(2, 3)] = z;
    m
}

/// Per-joint transform for one DH row at joint angle `q`.
fn link_transform(convention: DhConvention, row: &DhRow, q: f64) -> Matrix4<f64> {
    let theta = q + row.theta_offset;
    match convention {
        DhConvention::Classic => {
            rot_z(theta) * trans(row.a, 0.0, row.d) * rot_x(row.alpha)
        }
        DhConvention::Modified => {
            rot_x(row.alpha) * trans(row.a, 0.0, row.d) * rot_z(theta)
        }
    }
}

fn pose_from_homogeneous(t: &Matrix4<f64>) -> EpmPose {
    EpmPose {
        position: Vec3::new(t[(0, 3)], t[(1, 3)], t[(2, 3)]),
        rotation: t.fixed_view::<3, 3>(0, 0).into_owned(),
    }
}

/// EPM pose from the ordered product of per-joint DH transforms and the tool
/// transform.
pub fn forward_kinematics(dh: &DhTable, q: &[f64]) -> EpmPose {
    let mut t = Matrix4::identity();
    for (row, &qi) in dh.rows.iter().zip(q) {
        t *= link_transform(dh.convention, row, qi);
    }
    t *= dh.tool_transform;
    pose_from_homogeneous(&t)
}

/// Joint axes (unit z vectors) and axis origins for each joint, used by the
/// geometric Jacobian.
fn joint_axes(dh: &DhTable, q: &[f64]) -> (Vec<(Vec3, Vec3)>, Vec3) {
    let mut t = Matrix4::identity();
    let mut axes = Vec::with_capacity(dh.rows.len());
    for (row, &qi) in dh.rows.iter().zip(q) {
        // The revolute joint rotates about the z-axis of the frame in which
        // RotZ(theta) is applied; under the modified convention that frame is
        // reached only after the row's RotX/TransX part.
        let t_axis = match dh.convention {
            DhConvention::Classic => t,
            DhConvention::Modified => t * rot_x(row.alpha) * trans(row.a, 0.0, row.d),
        };
        let z = Vec3::new(t_axis[(0, 2)], t_axis[(1, 2)], t_axis[(2, 2)]);
        let o = Vec3::new(t_axis[(0, 3)], t_axis[(1, 3)], t_axis[(2, 3)]);
        axes.push((z, o));
        t *= link_transform(dh.convention, row, qi);
    }
    t *= dh.tool_transform;
    let p_e = Vec3::new(t[(0, 3)], t[(1, 3)], t[(2, 3)]);
    (axes, p_e)
}

/// Geometric Jacobian of the EPM-center point: rows 0..3 linear (m/rad),
/// rows 3..6 angular (rad/rad), one column per joint.
pub fn geometric_jacobian(dh: &DhTable, q: &JointVec) -> SMatrix<f64, 6, 7> {
    debug_assert_eq!(dh.rows.len(), 7);
    let (axes, p_e) = joint_axes(dh, q.as_slice());
    let mut j = SMatrix::<f64, 6, 7>::zeros();
    for (i, (z, o)) in axes.iter().enumerate() {
        let lin = z.cross(&(p_e - o));
        for r in 0..3 {
            j[(r, i)] = lin[r];
            j[(r + 3, i)] = z[r];
        }
    }
    j
}

/// Condition number sigma_max / sigma_min of the Jacobian.
///
/// Returns [`CONDITION_SENTINEL`] when the smallest singular value is below
/// `1e-12 * sigma_max` (including the all-zero matrix).
pub fn condition_number(j: &SMatrix<f64, 6, 7>) -> f64 {
    let sv = j.svd(false, false).singular_values;
    let s_max = sv.max();
    let s_min = sv.min();
    if s_max <= 0.0 || s_min < 1e-12 * s_max {
        CONDITION_SENTINEL
    } else {
        s_max / s_min
    }
}
