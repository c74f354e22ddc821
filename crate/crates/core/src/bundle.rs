//! Result persistence: trajectory CSV, gain schedule (flat binary plus JSON
//! index), run statistics, the resolved scenario, and a solve report.
//!
//! Files are written through a temp-file-and-rename sequence so a crash mid
//! write never leaves a truncated file under the final name.

use crate::kinematics::{condition_number, forward_kinematics, geometric_jacobian};
use crate::plant::State;
use crate::scenario::Scenario;
use crate::sim::MonteCarloStats;
use crate::solver::{GainSchedule, SolverReport, Trajectory};
use crate::{ControlVec, GainMat, StateVec, CONTROL_DIM, STATE_DIM};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const TRAJECTORY_HEADER: &str = "# magnav trajectory v1";
pub const GAINS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("bundle io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bundle format error: {0}")]
    Format(String),
    #[error("bundle json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn format_err(msg: impl Into<String>) -> BundleError {
    BundleError::Format(msg.into())
}

/// Writes `bytes` to `path` atomically: temp file in the same directory,
/// then rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), BundleError> {
    let dir = path
        .parent()
        .ok_or_else(|| format_err("bundle path has no parent directory"))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path)
        .map_err(|e| BundleError::Io(e.error))?;
    Ok(())
}

/// Index describing the flat binary gain file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GainsIndex {
    pub schema_version: u32,
    pub horizon: usize,
    pub feedback_rows: usize,
    pub feedback_cols: usize,
    pub layout: String,
    pub file: String,
}

/// Top-level solve report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleReport {
    pub tool_version: String,
    pub scenario_name: String,
    pub master_seed: u64,
    pub final_cost: f64,
    pub max_violation: f64,
    pub solver: SolverReport,
}

/// Renders the trajectory CSV: one row per timestep plus the terminal row,
/// whose input cells are empty.
pub fn trajectory_csv(scenario: &Scenario, traj: &Trajectory) -> String {
    let mut out = String::new();
    out.push_str(TRAJECTORY_HEADER);
    out.push('\n');
    out.push_str("t,px,py,pz,vx,vy,vz");
    for i in 1..=7 {
        out.push_str(&format!(",q{i}"));
    }
    for i in 1..=7 {
        out.push_str(&format!(",u{i}"));
    }
    out.push_str(",epm_x,epm_y,epm_z,kappa\n");

    for (k, x) in traj.states.iter().enumerate() {
        let state = State::from_vector(x);
        let pose = forward_kinematics(&scenario.dh, state.q.as_slice());
        let kappa = condition_number(&geometric_jacobian(&scenario.dh, &state.q));
        out.push_str(&format!("{}", k as f64 * traj.dt));
        for v in x.iter() {
            out.push_str(&format!(",{v}"));
        }
        if k < traj.inputs.len() {
            for v in traj.inputs[k].iter() {
                out.push_str(&format!(",{v}"));
            }
        } else {
            out.push_str(&",".repeat(7));
        }
        out.push_str(&format!(
            ",{},{},{},{kappa}\n",
            pose.position.x, pose.position.y, pose.position.z
        ));
    }
    out
}

/// Parses a trajectory CSV back into states, inputs, and the timestep.
pub fn parse_trajectory_csv(text: &str) -> Result<(Vec<StateVec>, Vec<ControlVec>, f64), BundleError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == TRAJECTORY_HEADER => {}
        Some(h) => return Err(format_err(format!("unknown trajectory header `{h}`"))),
        None => return Err(format_err("empty trajectory file")),
    }
    let _column_names = lines
        .next()
        .ok_or_else(|| format_err("missing column header"))?;

    let mut states = Vec::new();
    let mut inputs = Vec::new();
    let mut times = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        // t + 13 state + 7 input + 3 EPM + kappa
        if cells.len() != 1 + STATE_DIM + CONTROL_DIM + 4 {
            return Err(format_err(format!("row {ln}: wrong cell count {}", cells.len())));
        }
        let num = |s: &str, what: &str| -> Result<f64, BundleError> {
            s.parse::<f64>()
                .map_err(|_| format_err(format!("row {ln}: bad {what} `{s}`")))
        };
        times.push(num(cells[0], "time")?);
        let mut x = StateVec::zeros();
        for i in 0..STATE_DIM {
            x[i] = num(cells[1 + i], "state cell")?;
        }
        states.push(x);
        let input_cells = &cells[1 + STATE_DIM..1 + STATE_DIM + CONTROL_DIM];
        if input_cells.iter().all(|c| c.is_empty()) {
            // terminal row
        } else {
            let mut u = ControlVec::zeros();
            for i in 0..CONTROL_DIM {
                u[i] = num(input_cells[i], "input cell")?;
            }
            inputs.push(u);
        }
    }
    if states.len() != inputs.len() + 1 {
        return Err(format_err(format!(
            "{} state rows but {} input rows; expected exactly one terminal row",
            states.len(),
            inputs.len()
        )));
    }
    let dt = if times.len() >= 2 {
        times[1] - times[0]
    } else {
        return Err(format_err("trajectory needs at least two rows"));
    };
    Ok((states, inputs, dt))
}

/// Serializes the gain schedule: per stage, feedback row-major then
/// feedforward, little-endian f64.
pub fn gains_to_bytes(gains: &GainSchedule) -> Vec<u8> {
    let n = gains.feedback.len();
    let mut out = Vec::with_capacity(n * (7 * 13 + 7) * 8);
    for k in 0..n {
        for r in 0..CONTROL_DIM {
            for c in 0..STATE_DIM {
                out.extend_from_slice(&gains.feedback[k][(r, c)].to_le_bytes());
            }
        }
        for r in 0..CONTROL_DIM {
            out.extend_from_slice(&gains.feedforward[k][r].to_le_bytes());
        }
    }
    out
}

pub fn gains_from_bytes(bytes: &[u8], index: &GainsIndex) -> Result<GainSchedule, BundleError> {
    if index.schema_version != GAINS_SCHEMA_VERSION {
        return Err(format_err(format!(
            "unsupported gains schema version {}",
            index.schema_version
        )));
    }
    if index.feedback_rows != CONTROL_DIM || index.feedback_cols != STATE_DIM {
        return Err(format_err("gain dimensions do not match this build"));
    }
    if index.layout != "row_major" {
        return Err(format_err(format!("unknown gain layout `{}`", index.layout)));
    }
    let per_stage = (CONTROL_DIM * STATE_DIM + CONTROL_DIM) * 8;
    if bytes.len() != index.horizon * per_stage {
        return Err(format_err(format!(
            "gain file is {} bytes, expected {}",
            bytes.len(),
            index.horizon * per_stage
        )));
    }
    let mut feedback = Vec::with_capacity(index.horizon);
    let mut feedforward = Vec::with_capacity(index.horizon);
    let mut off = 0;
    let mut next = || {
        let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        off += 8;
        v
    };
    for _ in 0..index.horizon {
        let mut k_mat = GainMat::zeros();
        for r in 0..CONTROL_DIM {
            for c in 0..STATE_DIM {
                k_mat[(r, c)] = next();
            }
        }
        let mut d = ControlVec::zeros();
        for r in 0..CONTROL_DIM {
            d[r] = next();
        }
        feedback.push(k_mat);
        feedforward.push(d);
    }
    Ok(GainSchedule {
        feedback,
        feedforward,
    })
}

/// Writes the full result bundle into `dir` (created if missing).
///
/// Layout: `trajectory.csv`, `gains.bin` + `gains.json`, `scenario.toml`
/// (resolved, SI), `report.json`, and `stats.json` when a repeated-run study
/// was performed.
pub fn write_bundle(
    dir: &Path,
    scenario: &Scenario,
    traj: &Trajectory,
    gains: &GainSchedule,
    report: &SolverReport,
    stats: Option<&MonteCarloStats>,
) -> Result<(), BundleError> {
    std::fs::create_dir_all(dir)?;

    write_atomic(
        &dir.join("trajectory.csv"),
        trajectory_csv(scenario, traj).as_bytes(),
    )?;

    write_atomic(&dir.join("gains.bin"), &gains_to_bytes(gains))?;
    let index = GainsIndex {
        schema_version: GAINS_SCHEMA_VERSION,
        horizon: gains.feedback.len(),
        feedback_rows: CONTROL_DIM,
        feedback_cols: STATE_DIM,
        layout: "row_major".into(),
        file: "gains.bin".into(),
    };
    write_atomic(
        &dir.join("gains.json"),
        serde_json::to_string_pretty(&index)?.as_bytes(),
    )?;

    write_atomic(&dir.join("scenario.toml"), scenario.to_toml_si().as_bytes())?;

    let bundle_report = BundleReport {
        tool_version: crate::TOOL_VERSION.to_string(),
        scenario_name: scenario.name.clone(),
        master_seed: scenario.noise.seed,
        final_cost: traj.cost,
        max_violation: traj.max_violation,
        solver: report.clone(),
    };
    write_atomic(
        &dir.join("report.json"),
        serde_json::to_string_pretty(&bundle_report)?.as_bytes(),
    )?;

    if let Some(stats) = stats {
        write_atomic(
            &dir.join("stats.json"),
            serde_json::to_string_pretty(stats)?.as_bytes(),
        )?;
    }
    Ok(())
}

/// Reloads trajectory and gains from a bundle directory.
pub fn read_bundle(dir: &Path) -> Result<(Vec<StateVec>, Vec<ControlVec>, f64, GainSchedule), BundleError> {
    let csv = std::fs::read_to_string(dir.join("trajectory.csv"))?;
    let (states, inputs, dt) = parse_trajectory_csv(&csv)?;
    let index: GainsIndex = serde_json::from_str(&std::fs::read_to_string(dir.join("gains.json"))?)?;
    let bytes = std::fs::read(dir.join(&index.file))?;
    let gains = gains_from_bytes(&bytes, &index)?;
    if gains.feedback.len() != inputs.len() {
        return Err(format_err(format!(
            "gain horizon {} does not match trajectory horizon {}",
            gains.feedback.len(),
            inputs.len()
        )));
    }
    Ok((states, inputs, dt, gains))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::parse_scenario;
    use crate::solver::{rollout, SolveStatus};

    const SCENARIO: &str = r#"
name = "bundle-test"
units = "si"

[initial]
ipm_position = [0.49, -0.06, 0.03]
joint_angles = [0.0, -0.6, 0.0, -2.0, 0.0, 1.6, 0.0]

[goal]
ipm_position = [0.49, 0.02, 0.03]

[horizon]
steps = 5
dt = 0.02
"#;

    fn make_traj(sc: &Scenario) -> Trajectory {
        let plant = sc.plant_model();
        let inputs: Vec<ControlVec> = (0..sc.horizon.steps)
            .map(|k| ControlVec::from_fn(|i, _| 0.013 * (k as f64 + 1.0) * ((i as f64) - 3.0)))
            .collect();
        let states = rollout(
            &plant,
            &sc.initial_state().to_vector(),
            &inputs,
            sc.horizon.dt,
        )
        .unwrap();
        Trajectory {
            states,
            inputs,
            dt: sc.horizon.dt,
            cost: 1.25,
            max_violation: 3e-4,
        }
    }

    fn make_gains(n: usize) -> GainSchedule {
        GainSchedule {
            feedback: (0..n)
                .map(|k| GainMat::from_fn(|r, c| (k * 100 + r * 13 + c) as f64 * 0.001 - 0.3))
                .collect(),
            feedforward: (0..n)
                .map(|k| ControlVec::from_fn(|r, _| (k * 7 + r) as f64 * 0.01))
                .collect(),
        }
    }

    #[test]
    fn trajectory_csv_round_trip_is_exact() {
        let sc = parse_scenario(SCENARIO).unwrap();
        let traj = make_traj(&sc);
        let csv = trajectory_csv(&sc, &traj);
        let (states, inputs, dt) = parse_trajectory_csv(&csv).unwrap();
        assert_eq!(states.len(), traj.states.len());
        assert_eq!(inputs.len(), traj.inputs.len());
        assert_eq!(dt, traj.dt);
        // Shortest round-trip float formatting: parse must be bit exact.
        for (a, b) in states.iter().zip(&traj.states) {
            assert_eq!(a, b);
        }
        for (a, b) in inputs.iter().zip(&traj.inputs) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn terminal_row_has_empty_input_cells() {
        let sc = parse_scenario(SCENARIO).unwrap();
        let traj = make_traj(&sc);
        let csv = trajectory_csv(&sc, &traj);
        let last = csv.lines().last().unwrap();
        let cells: Vec<&str> = last.split(',').collect();
        for cell in &cells[1 + STATE_DIM..1 + STATE_DIM + CONTROL_DIM] {
            assert!(cell.is_empty());
        }
        // But EPM position and kappa are present.
        assert!(!cells[1 + STATE_DIM + CONTROL_DIM].is_empty());
        assert!(cells.last().unwrap().parse::<f64>().unwrap() >= 1.0);
    }

    #[test]
    fn gains_binary_round_trip_is_bit_exact() {
        let gains = make_gains(9);
        let bytes = gains_to_bytes(&gains);
        let index = GainsIndex {
            schema_version: GAINS_SCHEMA_VERSION,
            horizon: 9,
            feedback_rows: CONTROL_DIM,
            feedback_cols: STATE_DIM,
            layout: "row_major".into(),
            file: "gains.bin".into(),
        };
        let back = gains_from_bytes(&bytes, &index).unwrap();
        for k in 0..9 {
            assert_eq!(back.feedback[k], gains.feedback[k]);
            assert_eq!(back.feedforward[k], gains.feedforward[k]);
        }
    }

    #[test]
    fn truncated_gain_file_is_rejected() {
        let gains = make_gains(4);
        let mut bytes = gains_to_bytes(&gains);
        bytes.truncate(bytes.len() - 8);
        let index = GainsIndex {
            schema_version: GAINS_SCHEMA_VERSION,
            horizon: 4,
            feedback_rows: CONTROL_DIM,
            feedback_cols: STATE_DIM,
            layout: "row_major".into(),
            file: "gains.bin".into(),
        };
        assert!(gains_from_bytes(&bytes, &index).is_err());
    }

    #[test]
    fn unknown_header_is_rejected() {
        assert!(parse_trajectory_csv("# something else\nt\n0").is_err());
    }

    #[test]
    fn full_bundle_round_trip() {
        let sc = parse_scenario(SCENARIO).unwrap();
        let traj = make_traj(&sc);
        let gains = make_gains(sc.horizon.steps);
        let report = SolverReport {
            iterations: Vec::new(),
            status: SolveStatus::Converged,
        };
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &sc, &traj, &gains, &report, None).unwrap();

        let (states, inputs, dt, gains_back) = read_bundle(dir.path()).unwrap();
        assert_eq!(states, traj.states);
        assert_eq!(inputs, traj.inputs);
        assert_eq!(dt, traj.dt);
        assert_eq!(gains_back.feedback, gains.feedback);

        // Scenario re-resolves from the emitted SI file.
        let sc2 = crate::scenario::load_scenario(dir.path().join("scenario.toml")).unwrap();
        assert!((sc2.initial_ipm_position - sc.initial_ipm_position).norm() < 1e-12);

        let report_text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        let parsed: BundleReport = serde_json::from_str(&report_text).unwrap();
        assert_eq!(parsed.tool_version, crate::TOOL_VERSION);
        assert_eq!(parsed.scenario_name, "bundle-test");

        // No stray temp files left behind.
        let names: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(names.iter().filter(|n| n.starts_with(".tmp")).count(), 0);
        assert!(names.contains(&"trajectory.csv".to_string()));
    }
}
