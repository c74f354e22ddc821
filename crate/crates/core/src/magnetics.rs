//! Point-dipole model of the EPM-IPM interaction: field, field gradient,
//! force, and torque.
//!
//! All quantities are SI: meters, Tesla, A·m², Newtons. The model diverges as
//! the separation approaches zero, so every position-dependent operation goes
//! through [`Separation`], which enforces a configurable minimum distance.

use crate::{Mat3, Vec3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Vacuum permeability, T·m/A.
pub const MU_0: f64 = 4.0e-7 * std::f64::consts::PI;

/// Default validity floor for the point-dipole model, meters.
pub const DEFAULT_MIN_SEPARATION: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MagneticsError {
    #[error("separation norm {norm:.6} m below minimum {min:.6} m")]
    SeparationTooSmall { norm: f64, min: f64 },
    #[error("dipole magnitude must be positive, got {0}")]
    NonPositiveMoment(f64),
    #[error("dipole axis must have unit norm, got {0}")]
    NonUnitAxis(f64),
}

/// A permanent magnet modelled as a point dipole.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MagnetSpec {
    /// Dipole moment magnitude, A·m².
    pub dipole_magnitude: f64,
    /// Dipole axis expressed in the magnet's mount frame, unit norm.
    pub axis_in_mount_frame: Vec3,
}

impl MagnetSpec {
    pub fn new(dipole_magnitude: f64, axis_in_mount_frame: Vec3) -> Result<Self, MagneticsError> {
        if dipole_magnitude <= 0.0 {
            return Err(MagneticsError::NonPositiveMoment(dipole_magnitude));
        }
        let n = axis_in_mount_frame.norm();
        if (n - 1.0).abs() > 1e-9 {
            return Err(MagneticsError::NonUnitAxis(n));
        }
        Ok(Self {
            dipole_magnitude,
            axis_in_mount_frame,
        })
    }

    pub fn validate(&self) -> Result<(), MagneticsError> {
        Self::new(self.dipole_magnitude, self.axis_in_mount_frame).map(|_| ())
    }
}

/// Validated displacement from EPM center to IPM center, `p = p_I - p_E`.
#[derive(Debug, Clone, Copy)]
pub struct Separation {
    p: Vec3,
    norm: f64,
    unit: Vec3,
}

impl Separation {
    /// Checks `‖p‖ >= min_separation` and caches norm and direction.
    pub fn new(p: Vec3, min_separation: f64) -> Result<Self, MagneticsError> {
        let norm = p.norm();
        if norm < min_separation {
            return Err(MagneticsError::SeparationTooSmall {
                norm,
                min: min_separation,
            });
        }
        Ok(Self {
            p,
            norm,
            unit: p / norm,
        })
    }

    pub fn vector(&self) -> Vec3 {
        self.p
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn unit(&self) -> Vec3 {
        self.unit
    }
}

/// Magnetic field of the EPM dipole `m_e` at displacement `p`, Tesla.
///
/// `b = mu0 / (4 pi ‖p‖^3) (3 p̂ p̂ᵀ - I) m_e`
pub fn dipole_field(p: &Separation, m_e: &Vec3) -> Vec3 {
    let scale = MU_0 / (4.0 * std::f64::consts::PI * p.norm().powi(3));
    let ph = p.unit();
    scale * (3.0 * ph * ph.dot(m_e) - m_e)
}

/// Spatial gradient of the dipole field, Tesla/m. Symmetric and traceless.
pub fn field_gradient(p: &Separation, m_e: &Vec3) -> Mat3 {
    let scale = 3.0 * MU_0 / (4.0 * std::f64::consts::PI * p.norm().powi(4));
    let ph = p.unit();
    let c = ph.dot(m_e);
    let outer_mp = m_e * ph.transpose();
    scale * (outer_mp + outer_mp.transpose() + c * (Mat3::identity() - 5.0 * ph * ph.transpose()))
}

/// Torque on the IPM dipole `m_i` in field `b`: `m_i × b`, N·m.
///
/// Exported for diagnostics; the planner assumes instantaneous alignment of
/// the IPM with the local field, so torque never enters the dynamics.
pub fn magnetic_torque(m_i: &Vec3, b: &Vec3) -> Vec3 {
    m_i.cross(b)
}

/// Magnetic force on the IPM under the aligned-moment assumption
/// `m̂_i ≈ b̂`, Newtons.
///
/// Equals `‖m_i‖ (b̂ · ∇) b` with the field and gradient of the EPM dipole;
/// the closed form below is the rearrangement of that composition.
pub fn aligned_force(
    p: &Separation,
    m_e_hat: &Vec3,
    m_e_mag: f64,
    m_i_mag: f64,
) -> Result<Vec3, MagneticsError> {
    let n = m_e_hat.norm();
    if (n - 1.0).abs() > 1e-9 {
        return Err(MagneticsError::NonUnitAxis(n));
    }
    let ph = p.unit();
    let c = ph.dot(m_e_hat);
    // ‖(3 p̂ p̂ᵀ - I) m̂_e‖ = sqrt(3 c² + 1)
    let denom_norm = (3.0 * c * c + 1.0).sqrt();
    let scale = 3.0 * MU_0 * m_e_mag * m_i_mag
        / (4.0 * std::f64::consts::PI * p.norm().powi(4) * denom_norm);
    Ok(scale * (c * m_e_hat - (1.0 + 4.0 * c * c) * ph))
}

/// Force via the explicit composition `‖m_i‖ ∇b · b̂`.
///
/// Algebraically identical to [`aligned_force`]; kept as the second route for
/// cross-checking the rearranged closed form.
pub fn aligned_force_composed(
    p: &Separation,
    m_e_hat: &Vec3,
    m_e_mag: f64,
    m_i_mag: f64,
) -> Result<Vec3, MagneticsError> {
    let m_e = m_e_mag * m_e_hat;
    let b = dipole_field(p, &m_e);
    let grad = field_gradient(p, &m_e);
    let b_hat = b / b.norm();
    // ∇b is symmetric, so (b̂ · ∇) b = ∇b b̂.
    Ok(m_i_mag * grad * b_hat)
}
