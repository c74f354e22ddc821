//! Scenario ingestion, validation, and unit resolution.
//!
//! Scenario files are TOML trees with an explicit `units` declaration
//! (`"si"` or `"cm"`). Lengths, velocities, and length-derived noise
//! magnitudes are converted to SI on load; angles (rad), masses (kg), forces
//! (N), and dipole moments (A·m²) are always SI. The resolved [`Scenario`]
//! is entirely SI and can be re-emitted as an SI TOML document.

use crate::constraints::{ConstraintEvaluator, ConstraintSet, Obstacle};
use crate::cost::{CostWeights, GoalCost};
use crate::kinematics::{DhConvention, DhRow, DhTable};
use crate::magnetics::{MagnetSpec, Separation, DEFAULT_MIN_SEPARATION};
use crate::plant::{FluidParams, PlantModel, State};
use crate::sim::NoiseModel;
use crate::solver::SolverOptions;
use crate::{ControlVec, JointVec, StateVec, Vec3};
use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario file: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("scenario field `{field}`: {message}")]
    Semantic { field: String, message: String },
    #[error("equilibrium seed failed: {0}")]
    Equilibrium(String),
}

fn semantic(field: &str, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Semantic {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Unit system declared by a scenario file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitSystem {
    #[default]
    Si,
    Cm,
}

impl UnitSystem {
    /// Meters per declared length unit.
    pub fn length_scale(self) -> f64 {
        match self {
            UnitSystem::Si => 1.0,
            UnitSystem::Cm => 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Horizon {
    pub steps: usize,
    pub dt: f64,
}

/// Fully resolved, SI-unit scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    /// Unit system the file was written in; statistics tables are reported
    /// back in these units.
    pub declared_units: UnitSystem,
    pub dh: DhTable,
    pub epm: MagnetSpec,
    pub ipm: MagnetSpec,
    pub min_separation: f64,
    pub fluid: FluidParams,
    pub workspace_min: Vec3,
    pub workspace_max: Vec3,
    pub constraints: ConstraintSet,
    pub cost_weights: CostWeights,
    pub horizon: Horizon,
    pub initial_ipm_position: Vec3,
    pub initial_ipm_velocity: Vec3,
    pub initial_joint_angles: JointVec,
    pub goal_ipm_position: Vec3,
    pub goal_ipm_velocity: Vec3,
    pub solver: SolverOptions,
    pub noise: NoiseModel,
    pub warm_start_inputs: Option<Vec<ControlVec>>,
}

impl Scenario {
    pub fn plant_model(&self) -> PlantModel {
        PlantModel {
            dh: self.dh.clone(),
            epm: self.epm.clone(),
            ipm: self.ipm.clone(),
            fluid: self.fluid,
            min_separation: self.min_separation,
        }
    }

    pub fn constraint_evaluator(&self) -> ConstraintEvaluator {
        ConstraintEvaluator {
            set: self.constraints.clone(),
            dh: self.dh.clone(),
            epm_axis: self.epm.axis_in_mount_frame,
        }
    }

    pub fn initial_state(&self) -> State {
        State {
            p: self.initial_ipm_position,
            v: self.initial_ipm_velocity,
            q: self.initial_joint_angles,
        }
    }

    pub fn goal_state(&self) -> StateVec {
        State {
            p: self.goal_ipm_position,
            v: self.goal_ipm_velocity,
            q: self.initial_joint_angles,
        }
        .to_vector()
    }

    pub fn goal_cost(&self) -> GoalCost {
        GoalCost {
            weights: self.cost_weights.clone(),
            goal: self.goal_state(),
            dh: self.dh.clone(),
        }
    }

    pub fn solver_options(&self) -> SolverOptions {
        self.solver
    }
}

/// Representative 7-DoF table in Craig's modified convention with the EPM
/// mounted on the last joint axis. Stands in for the lab arm; not a vendor
/// calibration.
pub fn representative_seven_dof_table() -> DhTable {
    let row = |a: f64, d: f64, alpha: f64| DhRow {
        a,
        d,
        alpha,
        theta_offset: 0.0,
    };
    let half_pi = std::f64::consts::FRAC_PI_2;
    let mut tool = Matrix4::identity();
    // Flange plus EPM mount, both along the joint-7 axis so that rotating
    // the last joint moves neither the EPM center nor its dipole axis.
    tool[(2, 3)] = 0.207;
    DhTable {
        convention: DhConvention::Modified,
        rows: vec![
            row(0.0, 0.333, 0.0),
            row(0.0, 0.0, -half_pi),
            row(0.0, 0.316, half_pi),
            row(0.0825, 0.0, half_pi),
            row(-0.0825, 0.384, -half_pi),
            row(0.0, 0.0, half_pi),
            row(0.088, 0.0, half_pi),
        ],
        tool_transform: tool,
    }
}

fn default_joint_lower() -> [f64; 7] {
    [-2.897, -1.763, -2.897, -3.072, -2.897, -0.018, -2.897]
}

fn default_joint_upper() -> [f64; 7] {
    [2.897, 1.763, 2.897, -0.070, 2.897, 3.752, 2.897]
}

// ---------------------------------------------------------------------------
// Raw file schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    #[serde(default = "default_schema_version")]
    schema_version: u32,
    name: String,
    #[serde(default)]
    units: UnitSystem,
    #[serde(default)]
    arm: Option<RawArm>,
    #[serde(default)]
    magnets: Option<RawMagnets>,
    #[serde(default)]
    fluid: Option<RawFluid>,
    #[serde(default)]
    workspace: Option<RawWorkspace>,
    initial: RawInitial,
    goal: RawGoal,
    #[serde(default)]
    horizon: Option<RawHorizon>,
    #[serde(default)]
    constraints: Option<RawConstraints>,
    #[serde(default)]
    cost: Option<RawCost>,
    #[serde(default)]
    solver: Option<RawSolver>,
    #[serde(default)]
    noise: Option<RawNoise>,
}

fn default_schema_version() -> u32 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawArm {
    #[serde(default)]
    convention: DhConvention,
    /// Rows `[a, d, alpha, theta_offset]` in declared length units / rad.
    dh: Vec<[f64; 4]>,
    /// Tool translation from the last joint frame, declared length units.
    #[serde(default)]
    tool_translation: [f64; 3],
    /// Tool rotation as roll-pitch-yaw (XYZ intrinsic), rad.
    #[serde(default)]
    tool_rotation_rpy: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMagnets {
    #[serde(default = "default_epm_moment")]
    epm_moment: f64,
    #[serde(default = "default_axis_z")]
    epm_axis: [f64; 3],
    #[serde(default = "default_ipm_moment")]
    ipm_moment: f64,
    #[serde(default = "default_axis_x")]
    ipm_axis: [f64; 3],
    /// Point-dipole validity floor, declared length units.
    #[serde(default)]
    min_separation: Option<f64>,
}

fn default_epm_moment() -> f64 {
    51.25
}
fn default_ipm_moment() -> f64 {
    0.142
}
fn default_axis_z() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}
fn default_axis_x() -> [f64; 3] {
    [1.0, 0.0, 0.0]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFluid {
    #[serde(default = "default_drag")]
    drag_coefficient: f64,
    /// Signed vertical effective weight, N (always SI).
    #[serde(default = "default_weight")]
    effective_weight: f64,
    /// IPM mass, kg (always SI).
    #[serde(default = "default_mass")]
    ipm_mass: f64,
}

fn default_drag() -> f64 {
    0.77
}
fn default_weight() -> f64 {
    -0.69e-3
}
fn default_mass() -> f64 {
    8.1e-3
}

impl Default for RawFluid {
    fn default() -> Self {
        Self {
            drag_coefficient: default_drag(),
            effective_weight: default_weight(),
            ipm_mass: default_mass(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWorkspace {
    min: [f64; 3],
    max: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInitial {
    ipm_position: [f64; 3],
    #[serde(default)]
    ipm_velocity: [f64; 3],
    /// Joint angles, rad. Omitted: solved by the equilibrium seeder.
    #[serde(default)]
    joint_angles: Option<[f64; 7]>,
    /// Seeder starting guess when `joint_angles` is omitted.
    #[serde(default)]
    joint_guess: Option<[f64; 7]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGoal {
    ipm_position: [f64; 3],
    #[serde(default)]
    ipm_velocity: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHorizon {
    #[serde(default = "default_steps")]
    steps: usize,
    #[serde(default = "default_dt")]
    dt: f64,
}

fn default_steps() -> usize {
    300
}
fn default_dt() -> f64 {
    0.02
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConstraints {
    #[serde(default = "default_joint_lower")]
    q_min: [f64; 7],
    #[serde(default = "default_joint_upper")]
    q_max: [f64; 7],
    #[serde(default = "default_u_min")]
    u_min: [f64; 7],
    #[serde(default = "default_u_max")]
    u_max: [f64; 7],
    /// IPM velocity bounds, declared length units per second.
    #[serde(default)]
    v_min: Option<[f64; 3]>,
    #[serde(default)]
    v_max: Option<[f64; 3]>,
    #[serde(default)]
    epm_min_x: Option<f64>,
    #[serde(default)]
    epm_min_y: Option<f64>,
    #[serde(default)]
    epm_min_z: Option<f64>,
    #[serde(default)]
    obstacles: Vec<RawObstacle>,
    #[serde(default)]
    orientation_target: Option<[f64; 3]>,
    #[serde(default = "default_true")]
    orientation_every_step: bool,
}

fn default_u_min() -> [f64; 7] {
    [-2.0; 7]
}
fn default_u_max() -> [f64; 7] {
    [2.0; 7]
}
fn default_true() -> bool {
    true
}

impl Default for RawConstraints {
    fn default() -> Self {
        Self {
            q_min: default_joint_lower(),
            q_max: default_joint_upper(),
            u_min: default_u_min(),
            u_max: default_u_max(),
            v_min: None,
            v_max: None,
            epm_min_x: None,
            epm_min_y: None,
            epm_min_z: None,
            obstacles: Vec::new(),
            orientation_target: None,
            orientation_every_step: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObstacle {
    center: [f64; 3],
    radius: f64,
    #[serde(default)]
    margin: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCost {
    #[serde(default = "default_pos_w")]
    position_weight: f64,
    #[serde(default = "default_vel_w")]
    velocity_weight: f64,
    #[serde(default)]
    joint_weight: f64,
    #[serde(default = "default_input_w")]
    input_weight: f64,
    #[serde(default = "default_term_pos_w")]
    terminal_position_weight: f64,
    #[serde(default = "default_term_vel_w")]
    terminal_velocity_weight: f64,
    #[serde(default)]
    terminal_joint_weight: f64,
    #[serde(default)]
    manipulability_weight: f64,
}

fn default_pos_w() -> f64 {
    10.0
}
fn default_vel_w() -> f64 {
    0.1
}
fn default_input_w() -> f64 {
    0.05
}
fn default_term_pos_w() -> f64 {
    5000.0
}
fn default_term_vel_w() -> f64 {
    500.0
}

impl Default for RawCost {
    fn default() -> Self {
        Self {
            position_weight: default_pos_w(),
            velocity_weight: default_vel_w(),
            joint_weight: 0.0,
            input_weight: default_input_w(),
            terminal_position_weight: default_term_pos_w(),
            terminal_velocity_weight: default_term_vel_w(),
            terminal_joint_weight: 0.0,
            manipulability_weight: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    #[serde(default = "default_tol_cost")]
    tol_cost: f64,
    #[serde(default = "default_tol_con")]
    tol_constraint: f64,
    #[serde(default = "default_max_inner")]
    max_inner_iterations: usize,
    #[serde(default = "default_max_outer")]
    max_outer_iterations: usize,
    #[serde(default = "default_reg_init")]
    regularization_initial: f64,
    #[serde(default = "default_reg_max")]
    regularization_max: f64,
    #[serde(default = "default_mu_initial")]
    mu_initial: f64,
    #[serde(default = "default_mu_scale")]
    mu_scale: f64,
    #[serde(default = "default_mu_max")]
    mu_max: f64,
}

fn default_tol_cost() -> f64 {
    1e-6
}
fn default_tol_con() -> f64 {
    1e-3
}
fn default_max_inner() -> usize {
    100
}
fn default_max_outer() -> usize {
    30
}
fn default_reg_init() -> f64 {
    1e-6
}
fn default_reg_max() -> f64 {
    1e6
}
fn default_mu_initial() -> f64 {
    1.0
}
fn default_mu_scale() -> f64 {
    10.0
}
fn default_mu_max() -> f64 {
    1e8
}

impl Default for RawSolver {
    fn default() -> Self {
        Self {
            tol_cost: default_tol_cost(),
            tol_constraint: default_tol_con(),
            max_inner_iterations: default_max_inner(),
            max_outer_iterations: default_max_outer(),
            regularization_initial: default_reg_init(),
            regularization_max: default_reg_max(),
            mu_initial: default_mu_initial(),
            mu_scale: default_mu_scale(),
            mu_max: default_mu_max(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNoise {
    /// Measurement variance on IPM position, declared length units squared.
    #[serde(default)]
    position_variance: f64,
    #[serde(default)]
    seed: u64,
    /// Optional per-step velocity disturbance std on the true plant,
    /// declared length units per second.
    #[serde(default)]
    process_disturbance_std: f64,
    /// Optional std of the initial IPM position perturbation, declared
    /// length units.
    #[serde(default)]
    initial_position_std: f64,
    #[serde(default = "default_decimation")]
    measurement_decimation: usize,
}

fn default_decimation() -> usize {
    1
}

impl Default for RawNoise {
    fn default() -> Self {
        Self {
            position_variance: 0.0,
            seed: 0,
            process_disturbance_std: 0.0,
            initial_position_std: 0.0,
            measurement_decimation: 1,
        }
    }
}

// ---------------------------------------------------------------------------
// Resolution
// ---------------------------------------------------------------------------

fn rpy_rotation(rpy: [f64; 3]) -> Matrix4<f64> {
    let (sr, cr) = rpy[0].sin_cos();
    let (sp, cp) = rpy[1].sin_cos();
    let (sy, cy) = rpy[2].sin_cos();
    let r = nalgebra::Matrix3::new(
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    );
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m
}

fn vec3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn unit_or_err(a: [f64; 3], field: &str) -> Result<Vec3, ScenarioError> {
    let v = vec3(a);
    let n = v.norm();
    if n < 1e-12 {
        return Err(semantic(field, "must be a nonzero direction"));
    }
    Ok(v / n)
}

impl RawScenario {
    fn resolve(self) -> Result<Scenario, ScenarioError> {
        let units = self.units;
        let s = units.length_scale();

        let dh = match &self.arm {
            None => representative_seven_dof_table(),
            Some(arm) => {
                if arm.dh.len() != 7 {
                    return Err(semantic(
                        "arm.dh",
                        format!("expected 7 rows, got {}", arm.dh.len()),
                    ));
                }
                let rows = arm
                    .dh
                    .iter()
                    .map(|r| DhRow {
                        a: r[0] * s,
                        d: r[1] * s,
                        alpha: r[2],
                        theta_offset: r[3],
                    })
                    .collect();
                let mut tool = rpy_rotation(arm.tool_rotation_rpy);
                for i in 0..3 {
                    tool[(i, 3)] = arm.tool_translation[i] * s;
                }
                DhTable {
                    convention: arm.convention,
                    rows,
                    tool_transform: tool,
                }
            }
        };
        dh.validate()
            .map_err(|e| semantic("arm.tool_transform", e.to_string()))?;

        let magnets = self.magnets.unwrap_or(RawMagnets {
            epm_moment: default_epm_moment(),
            epm_axis: default_axis_z(),
            ipm_moment: default_ipm_moment(),
            ipm_axis: default_axis_x(),
            min_separation: None,
        });
        let epm = MagnetSpec::new(
            magnets.epm_moment,
            unit_or_err(magnets.epm_axis, "magnets.epm_axis")?,
        )
        .map_err(|e| semantic("magnets.epm_moment", e.to_string()))?;
        let ipm = MagnetSpec::new(
            magnets.ipm_moment,
            unit_or_err(magnets.ipm_axis, "magnets.ipm_axis")?,
        )
        .map_err(|e| semantic("magnets.ipm_moment", e.to_string()))?;
        let min_separation = magnets
            .min_separation
            .map(|m| m * s)
            .unwrap_or(DEFAULT_MIN_SEPARATION);
        if min_separation <= 0.0 {
            return Err(semantic("magnets.min_separation", "must be positive"));
        }

        let fluid_raw = self.fluid.unwrap_or_default();
        if fluid_raw.ipm_mass <= 0.0 {
            return Err(semantic("fluid.ipm_mass", "must be positive"));
        }
        if fluid_raw.drag_coefficient < 0.0 {
            return Err(semantic("fluid.drag_coefficient", "must be non-negative"));
        }
        let fluid = FluidParams {
            drag_coefficient: fluid_raw.drag_coefficient,
            effective_weight_z: fluid_raw.effective_weight,
            ipm_mass: fluid_raw.ipm_mass,
        };

        let (workspace_min, workspace_max) = match &self.workspace {
            Some(w) => (vec3(w.min) * s, vec3(w.max) * s),
            None => (Vec3::from_element(-1.0), Vec3::from_element(1.0)),
        };
        for i in 0..3 {
            if workspace_min[i] >= workspace_max[i] {
                return Err(semantic("workspace", "min must be below max per axis"));
            }
        }

        let raw_cs = self.constraints.unwrap_or_default();
        let v_lim = 0.2 / s; // 0.2 m/s expressed in declared units
        let constraints = ConstraintSet {
            q_min: JointVec::from_row_slice(&raw_cs.q_min),
            q_max: JointVec::from_row_slice(&raw_cs.q_max),
            u_min: ControlVec::from_row_slice(&raw_cs.u_min),
            u_max: ControlVec::from_row_slice(&raw_cs.u_max),
            v_min: vec3(raw_cs.v_min.unwrap_or([-v_lim; 3])) * s,
            v_max: vec3(raw_cs.v_max.unwrap_or([v_lim; 3])) * s,
            epm_min_position: [
                raw_cs.epm_min_x.map(|v| v * s),
                raw_cs.epm_min_y.map(|v| v * s),
                raw_cs.epm_min_z.map(|v| v * s),
            ],
            obstacles: raw_cs
                .obstacles
                .iter()
                .map(|o| Obstacle {
                    center: vec3(o.center) * s,
                    radius: o.radius * s,
                    margin: o.margin * s,
                })
                .collect(),
            orientation_target: match raw_cs.orientation_target {
                Some(t) => Some(unit_or_err(t, "constraints.orientation_target")?),
                None => None,
            },
            orientation_every_step: raw_cs.orientation_every_step,
        };
        constraints
            .validate()
            .map_err(|e| semantic("constraints", e))?;

        let raw_cost = self.cost.unwrap_or_default();
        let mut state_w = StateVec::zeros();
        let mut term_w = StateVec::zeros();
        for i in 0..3 {
            state_w[i] = raw_cost.position_weight;
            state_w[3 + i] = raw_cost.velocity_weight;
            term_w[i] = raw_cost.terminal_position_weight;
            term_w[3 + i] = raw_cost.terminal_velocity_weight;
        }
        for i in 6..13 {
            state_w[i] = raw_cost.joint_weight;
            term_w[i] = raw_cost.terminal_joint_weight;
        }
        let cost_weights = CostWeights {
            state: state_w,
            input: ControlVec::from_element(raw_cost.input_weight),
            terminal: term_w,
            manipulability: raw_cost.manipulability_weight,
        };

        let raw_h = self.horizon.unwrap_or(RawHorizon {
            steps: default_steps(),
            dt: default_dt(),
        });
        if raw_h.steps == 0 {
            return Err(semantic("horizon.steps", "must be at least 1"));
        }
        if raw_h.dt <= 0.0 {
            return Err(semantic("horizon.dt", "must be positive"));
        }

        let raw_solver = self.solver.unwrap_or_default();
        let solver = SolverOptions {
            tol_cost: raw_solver.tol_cost,
            tol_constraint: raw_solver.tol_constraint,
            max_inner_iterations: raw_solver.max_inner_iterations,
            max_outer_iterations: raw_solver.max_outer_iterations,
            regularization_initial: raw_solver.regularization_initial,
            regularization_max: raw_solver.regularization_max,
            al: crate::constraints::AlParams {
                mu_initial: raw_solver.mu_initial,
                mu_scale: raw_solver.mu_scale,
                mu_max: raw_solver.mu_max,
            },
        };

        let raw_noise = self.noise.unwrap_or_default();
        if raw_noise.measurement_decimation == 0 {
            return Err(semantic("noise.measurement_decimation", "must be >= 1"));
        }
        let noise = NoiseModel {
            position_noise_variance: raw_noise.position_variance * s * s,
            seed: raw_noise.seed,
            process_disturbance_std: raw_noise.process_disturbance_std * s,
            initial_position_std: raw_noise.initial_position_std * s,
            measurement_decimation: raw_noise.measurement_decimation,
        };

        let initial_ipm_position = vec3(self.initial.ipm_position) * s;
        let initial_ipm_velocity = vec3(self.initial.ipm_velocity) * s;
        let goal_ipm_position = vec3(self.goal.ipm_position) * s;
        let goal_ipm_velocity = vec3(self.goal.ipm_velocity) * s;

        let plant_for_seed = PlantModel {
            dh: dh.clone(),
            epm: epm.clone(),
            ipm: ipm.clone(),
            fluid,
            min_separation,
        };
        let initial_joint_angles = match self.initial.joint_angles {
            Some(q) => JointVec::from_row_slice(&q),
            None => {
                let guess = self
                    .initial
                    .joint_guess
                    .map(|q| JointVec::from_row_slice(&q))
                    .unwrap_or_else(|| {
                        JointVec::from_row_slice(&[0.0, -0.6, 0.0, -2.0, 0.0, 1.6, 0.0])
                    });
                equilibrium_seed(
                    &plant_for_seed,
                    &initial_ipm_position,
                    constraints.orientation_target.as_ref(),
                    &guess,
                    Some((&constraints.q_min, &constraints.q_max)),
                )?
            }
        };

        let scenario = Scenario {
            name: self.name,
            declared_units: units,
            dh,
            epm,
            ipm,
            min_separation,
            fluid,
            workspace_min,
            workspace_max,
            constraints,
            cost_weights,
            horizon: Horizon {
                steps: raw_h.steps,
                dt: raw_h.dt,
            },
            initial_ipm_position,
            initial_ipm_velocity,
            initial_joint_angles,
            goal_ipm_position,
            goal_ipm_velocity,
            solver,
            noise,
            warm_start_inputs: None,
        };
        scenario.check_invariants()?;
        Ok(scenario)
    }
}

impl Scenario {
    fn check_invariants(&self) -> Result<(), ScenarioError> {
        let inside = |p: &Vec3| {
            (0..3).all(|i| p[i] >= self.workspace_min[i] && p[i] <= self.workspace_max[i])
        };
        if !inside(&self.initial_ipm_position) {
            return Err(semantic(
                "initial.ipm_position",
                "outside the workspace box",
            ));
        }
        if !inside(&self.goal_ipm_position) {
            return Err(semantic("goal.ipm_position", "outside the workspace box"));
        }
        for (i, obs) in self.constraints.obstacles.iter().enumerate() {
            if !inside(&obs.center) {
                return Err(semantic(
                    &format!("constraints.obstacles[{i}].center"),
                    "outside the workspace box",
                ));
            }
            let clearance = obs.radius + obs.margin;
            if (self.initial_ipm_position - obs.center).norm() <= clearance {
                return Err(semantic(
                    &format!("constraints.obstacles[{i}]"),
                    "initial IPM position is inside the inflated obstacle",
                ));
            }
            if (self.goal_ipm_position - obs.center).norm() <= clearance {
                return Err(semantic(
                    &format!("constraints.obstacles[{i}]"),
                    "goal IPM position is inside the inflated obstacle",
                ));
            }
        }
        let pose = crate::kinematics::forward_kinematics(
            &self.dh,
            self.initial_joint_angles.as_slice(),
        );
        let sep = (self.initial_ipm_position - pose.position).norm();
        if sep < self.min_separation {
            return Err(semantic(
                "initial",
                format!(
                    "initial EPM-IPM separation {sep:.4} m below min_separation {:.4} m",
                    self.min_separation
                ),
            ));
        }
        Ok(())
    }

    /// Re-emits the resolved scenario as an SI-unit TOML document.
    pub fn to_toml_si(&self) -> String {
        let raw = RawScenario {
            schema_version: 1,
            name: self.name.clone(),
            units: UnitSystem::Si,
            arm: Some(RawArm {
                convention: self.dh.convention,
                dh: self
                    .dh
                    .rows
                    .iter()
                    .map(|r| [r.a, r.d, r.alpha, r.theta_offset])
                    .collect(),
                tool_translation: [
                    self.dh.tool_transform[(0, 3)],
                    self.dh.tool_transform[(1, 3)],
                    self.dh.tool_transform[(2, 3)],
                ],
                tool_rotation_rpy: {
                    let r = self.dh.tool_transform.fixed_view::<3, 3>(0, 0);
                    // Recover XYZ intrinsic angles; the pitch stays away from
                    // +-pi/2 for any table we emit.
                    let pitch = (-r[(2, 0)]).asin();
                    let roll = r[(2, 1)].atan2(r[(2, 2)]);
                    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
                    [roll, pitch, yaw]
                },
            }),
            magnets: Some(RawMagnets {
                epm_moment: self.epm.dipole_magnitude,
                epm_axis: self.epm.axis_in_mount_frame.into(),
                ipm_moment: self.ipm.dipole_magnitude,
                ipm_axis: self.ipm.axis_in_mount_frame.into(),
                min_separation: Some(self.min_separation),
            }),
            fluid: Some(RawFluid {
                drag_coefficient: self.fluid.drag_coefficient,
                effective_weight: self.fluid.effective_weight_z,
                ipm_mass: self.fluid.ipm_mass,
            }),
            workspace: Some(RawWorkspace {
                min: self.workspace_min.into(),
                max: self.workspace_max.into(),
            }),
            initial: RawInitial {
                ipm_position: self.initial_ipm_position.into(),
                ipm_velocity: self.initial_ipm_velocity.into(),
                joint_angles: Some(
                    self.initial_joint_angles
                        .as_slice()
                        .try_into()
                        .expect("seven joints"),
                ),
                joint_guess: None,
            },
            goal: RawGoal {
                ipm_position: self.goal_ipm_position.into(),
                ipm_velocity: self.goal_ipm_velocity.into(),
            },
            horizon: Some(RawHorizon {
                steps: self.horizon.steps,
                dt: self.horizon.dt,
            }),
            constraints: Some(RawConstraints {
                q_min: self.constraints.q_min.as_slice().try_into().unwrap(),
                q_max: self.constraints.q_max.as_slice().try_into().unwrap(),
                u_min: self.constraints.u_min.as_slice().try_into().unwrap(),
                u_max: self.constraints.u_max.as_slice().try_into().unwrap(),
                v_min: Some(self.constraints.v_min.into()),
                v_max: Some(self.constraints.v_max.into()),
                epm_min_x: self.constraints.epm_min_position[0],
                epm_min_y: self.constraints.epm_min_position[1],
                epm_min_z: self.constraints.epm_min_position[2],
                obstacles: self
                    .constraints
                    .obstacles
                    .iter()
                    .map(|o| RawObstacle {
                        center: o.center.into(),
                        radius: o.radius,
                        margin: o.margin,
                    })
                    .collect(),
                orientation_target: self.constraints.orientation_target.map(Into::into),
                orientation_every_step: self.constraints.orientation_every_step,
            }),
            cost: Some(RawCost {
                position_weight: self.cost_weights.state[0],
                velocity_weight: self.cost_weights.state[3],
                joint_weight: self.cost_weights.state[6],
                input_weight: self.cost_weights.input[0],
                terminal_position_weight: self.cost_weights.terminal[0],
                terminal_velocity_weight: self.cost_weights.terminal[3],
                terminal_joint_weight: self.cost_weights.terminal[6],
                manipulability_weight: self.cost_weights.manipulability,
            }),
            solver: Some(RawSolver {
                tol_cost: self.solver.tol_cost,
                tol_constraint: self.solver.tol_constraint,
                max_inner_iterations: self.solver.max_inner_iterations,
                max_outer_iterations: self.solver.max_outer_iterations,
                regularization_initial: self.solver.regularization_initial,
                regularization_max: self.solver.regularization_max,
                mu_initial: self.solver.al.mu_initial,
                mu_scale: self.solver.al.mu_scale,
                mu_max: self.solver.al.mu_max,
            }),
            noise: Some(RawNoise {
                position_variance: self.noise.position_noise_variance,
                seed: self.noise.seed,
                process_disturbance_std: self.noise.process_disturbance_std,
                initial_position_std: self.noise.initial_position_std,
                measurement_decimation: self.noise.measurement_decimation,
            }),
        };
        toml::to_string_pretty(&raw).expect("resolved scenario serializes")
    }
}

/// Parses and resolves a scenario from TOML text.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let raw: RawScenario = toml::from_str(text)?;
    raw.resolve()
}

/// Loads, resolves, and validates a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario(&text)
}

/// Solves for joint angles placing the EPM so that the magnetic force cancels
/// the effective weight at `p_i`, optionally also matching a target field
/// direction there. Levenberg-Marquardt on a finite-difference Jacobian.
pub fn equilibrium_seed(
    plant: &PlantModel,
    p_i: &Vec3,
    target_dir: Option<&Vec3>,
    q_guess: &JointVec,
    joint_limits: Option<(&JointVec, &JointVec)>,
) -> Result<JointVec, ScenarioError> {
    // Force residual in mN so both blocks are O(1) near the solution.
    let force_scale = 1e3;
    let residual = |q: &JointVec| -> Option<nalgebra::DVector<f64>> {
        let pose = plant.epm_pose(q);
        let f = plant.magnetic_force(p_i, &pose).ok()?;
        let total = f + plant.fluid.effective_weight();
        let dim = if target_dir.is_some() { 6 } else { 3 };
        let mut r = nalgebra::DVector::zeros(dim);
        for i in 0..3 {
            r[i] = total[i] * force_scale;
        }
        if let Some(dir) = target_dir {
            let m_hat = pose.rotation * plant.epm.axis_in_mount_frame;
            let p = p_i - pose.position;
            let sep = Separation::new(p, 1e-9).ok()?;
            let b = crate::magnetics::dipole_field(&sep, &(plant.epm.dipole_magnitude * m_hat));
            let b_hat = b / b.norm();
            let r_hat = dir / dir.norm();
            for i in 0..3 {
                r[3 + i] = b_hat[i] - r_hat[i];
            }
        }
        Some(r)
    };

    let mut q = *q_guess;
    let mut r = residual(&q)
        .ok_or_else(|| ScenarioError::Equilibrium("initial guess outside model validity".into()))?;
    let mut damping = 1e-3;
    let converged = |r: &nalgebra::DVector<f64>| {
        let force_ok = (0..3).all(|i| r[i].abs() / force_scale < 1e-6);
        let dir_ok = r.len() == 3 || (3..r.len()).all(|i| r[i].abs() < 1e-4);
        force_ok && dir_ok
    };

    for _ in 0..300 {
        if converged(&r) {
            break;
        }
        let dim = r.len();
        let h = 1e-6;
        let mut jac = nalgebra::DMatrix::zeros(dim, 7);
        for c in 0..7 {
            let mut qp = q;
            let mut qm = q;
            qp[c] += h;
            qm[c] -= h;
            match (residual(&qp), residual(&qm)) {
                (Some(rp), Some(rm)) => jac.set_column(c, &((rp - rm) / (2.0 * h))),
                _ => {
                    return Err(ScenarioError::Equilibrium(
                        "residual undefined near iterate".into(),
                    ))
                }
            }
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &r;
        let mut lhs = jtj.clone();
        for i in 0..7 {
            lhs[(i, i)] += damping * (1.0 + jtj[(i, i)]);
        }
        let delta = match lhs.lu().solve(&(-&jtr)) {
            Some(d) => d,
            None => {
                damping *= 10.0;
                continue;
            }
        };
        let q_new = q + JointVec::from_iterator(delta.iter().copied());
        match residual(&q_new) {
            Some(r_new) if r_new.norm() < r.norm() => {
                q = q_new;
                r = r_new;
                damping = (damping * 0.5).max(1e-12);
            }
            _ => damping *= 10.0,
        }
        if damping > 1e12 {
            break;
        }
    }

    if !converged(&r) {
        return Err(ScenarioError::Equilibrium(format!(
            "no equilibrium found: residual force {:.3e} N",
            r.rows(0, 3).norm() / force_scale
        )));
    }
    if let Some((q_min, q_max)) = joint_limits {
        for i in 0..7 {
            if q[i] < q_min[i] || q[i] > q_max[i] {
                return Err(ScenarioError::Equilibrium(format!(
                    "equilibrium joint {i} = {:.3} rad violates its limits; \
                     adjust the workspace or provide joint_angles",
                    q[i]
                )));
            }
        }
    }
    Ok(q)
}
