//! Trajectory optimization and closed-loop control for magnetic capsule
//! manipulation with a single external permanent magnet (EPM) carried by a
//! serial robotic arm.
//!
//! The library plans constrained joint-space trajectories with an augmented
//! Lagrangian iLQR so that the internal permanent magnet (IPM) follows a
//! dynamically feasible, obstacle-avoiding path, then executes the plan in a
//! simulated closed loop with EKF state estimation and time-varying feedback
//! gains.

pub mod bundle;
pub mod constraints;
pub mod cost;
pub mod kinematics;
pub mod magnetics;
pub mod plant;
pub mod scenario;
pub mod sim;
pub mod solver;

pub use nalgebra;

/// Dimension of the combined state: IPM position (3), IPM velocity (3),
/// arm joint angles (7).
pub const STATE_DIM: usize = 13;
/// Dimension of the control vector: joint angular velocities.
pub const CONTROL_DIM: usize = 7;
/// Number of arm joints.
pub const NUM_JOINTS: usize = 7;

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
pub type StateVec = nalgebra::SVector<f64, STATE_DIM>;
pub type ControlVec = nalgebra::SVector<f64, CONTROL_DIM>;
pub type JointVec = nalgebra::SVector<f64, NUM_JOINTS>;
pub type StateMat = nalgebra::SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type StateControlMat = nalgebra::SMatrix<f64, STATE_DIM, CONTROL_DIM>;
pub type GainMat = nalgebra::SMatrix<f64, CONTROL_DIM, STATE_DIM>;

/// Tool version embedded in result bundles.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
