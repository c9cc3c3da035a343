//! File formats: trajectories and feature tables as CSV, preference counts
//! as CSV over alternative ids, models and policies and fit reports as JSON.
//!
//! Floats are written with Rust's shortest-round-trip formatting, so a
//! write/read cycle reproduces values exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::control::Policy;
use crate::dataset::PreferenceDataset;
use crate::error::{Error, Result};
use crate::infer::FitReport;
use crate::prefmodel::LexRewardModel;
use crate::rewards::{Alternative, Trajectory};

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(contents.as_bytes())
        .map_err(|e| io_err(path, e))
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    line_no: usize,
    field: &str,
    value: &str,
) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line_no, format!("bad {field}: {value:?}")))
}

/// Writes trajectories as one row per step: `traj_id,t,a,z,w[,y]`. The age
/// column appears only when every trajectory carries an age.
pub fn write_trajectories_csv(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let with_age = !trajectories.is_empty() && trajectories.iter().all(|t| t.age.is_some());
    let mut out = String::new();
    out.push_str(if with_age {
        "traj_id,t,a,z,w,y\n"
    } else {
        "traj_id,t,a,z,w\n"
    });
    for (id, traj) in trajectories.iter().enumerate() {
        for t in 0..traj.len() {
            if with_age {
                out.push_str(&format!(
                    "{id},{t},{},{},{},{}\n",
                    traj.actions[t],
                    traj.tumor[t],
                    traj.wbc[t],
                    traj.age.unwrap()
                ));
            } else {
                out.push_str(&format!(
                    "{id},{t},{},{},{}\n",
                    traj.actions[t], traj.tumor[t], traj.wbc[t]
                ));
            }
        }
    }
    write_atomic(path, &out)
}

pub fn read_trajectories_csv(path: &Path) -> Result<Vec<Trajectory>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing header"))?;
    let with_age = match header.trim() {
        "traj_id,t,a,z,w" => false,
        "traj_id,t,a,z,w,y" => true,
        other => return Err(parse_err(path, 1, format!("unexpected header {other:?}"))),
    };
    // Rows grouped by trajectory id, steps in order.
    type StepRow = (u64, u8, f64, f64, Option<f64>);
    let mut rows: BTreeMap<u64, Vec<StepRow>> = BTreeMap::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let expected = if with_age { 6 } else { 5 };
        if fields.len() != expected {
            return Err(parse_err(
                path,
                line_no,
                format!("expected {expected} fields, got {}", fields.len()),
            ));
        }
        let traj_id: u64 = parse_field(path, line_no, "traj_id", fields[0])?;
        let t: u64 = parse_field(path, line_no, "t", fields[1])?;
        let a: u8 = parse_field(path, line_no, "a", fields[2])?;
        if a > 1 {
            return Err(parse_err(path, line_no, format!("action must be 0/1: {a}")));
        }
        let z: f64 = parse_field(path, line_no, "z", fields[3])?;
        let w: f64 = parse_field(path, line_no, "w", fields[4])?;
        let y = if with_age {
            Some(parse_field(path, line_no, "y", fields[5])?)
        } else {
            None
        };
        rows.entry(traj_id).or_default().push((t, a, z, w, y));
    }
    let mut trajectories = Vec::with_capacity(rows.len());
    for (traj_id, mut steps) in rows {
        steps.sort_by_key(|s| s.0);
        for (expected_t, step) in steps.iter().enumerate() {
            if step.0 != expected_t as u64 {
                return Err(parse_err(
                    path,
                    0,
                    format!("trajectory {traj_id} has a gap at step {expected_t}"),
                ));
            }
        }
        let age = steps[0].4;
        let traj = Trajectory::new(
            steps.iter().map(|s| s.1).collect(),
            steps.iter().map(|s| s.2).collect(),
            steps.iter().map(|s| s.3).collect(),
            age,
        )?;
        trajectories.push(traj);
    }
    Ok(trajectories)
}

/// Writes feature vectors as `alt_id,x0,x1,...`.
pub fn write_features_csv(path: &Path, features: &[Vec<f64>]) -> Result<()> {
    let dim = features.first().map_or(0, Vec::len);
    let mut out = String::from("alt_id");
    for d in 0..dim {
        out.push_str(&format!(",x{d}"));
    }
    out.push('\n');
    for (id, row) in features.iter().enumerate() {
        out.push_str(&id.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    write_atomic(path, &out)
}

pub fn read_features_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing header"))?;
    let dim = header.split(',').count().saturating_sub(1);
    let mut out = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected {} fields, got {}", dim + 1, fields.len()),
            ));
        }
        let id: usize = parse_field(path, line_no, "alt_id", fields[0])?;
        if id != out.len() {
            return Err(parse_err(
                path,
                line_no,
                format!("alternative ids must be dense and ordered; got {id}"),
            ));
        }
        let mut row = Vec::with_capacity(dim);
        for (d, field) in fields[1..].iter().enumerate() {
            row.push(parse_field(path, line_no, &format!("x{d}"), field)?);
        }
        out.push(row);
    }
    Ok(out)
}

/// Writes preference counts as `star_id,circ_id,count` rows in id order.
pub fn write_preferences_csv(path: &Path, data: &PreferenceDataset) -> Result<()> {
    let mut out = String::from("star_id,circ_id,count\n");
    for (star, circ, n) in data.iter_counts() {
        out.push_str(&format!("{star},{circ},{n}\n"));
    }
    write_atomic(path, &out)
}

/// Reads preference counts and attaches them to the given alternatives.
/// A file with only the header yields an empty dataset.
pub fn read_preferences_csv(
    path: &Path,
    alternatives: Vec<Alternative>,
) -> Result<PreferenceDataset> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing header"))?;
    if header.trim() != "star_id,circ_id,count" {
        return Err(parse_err(path, 1, format!("unexpected header {header:?}")));
    }
    let mut counts = BTreeMap::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected 3 fields, got {}", fields.len()),
            ));
        }
        let star: u32 = parse_field(path, line_no, "star_id", fields[0])?;
        let circ: u32 = parse_field(path, line_no, "circ_id", fields[1])?;
        let count: u32 = parse_field(path, line_no, "count", fields[2])?;
        if count == 0 {
            return Err(parse_err(path, line_no, "count must be at least 1"));
        }
        if counts.insert((star, circ), count).is_some() {
            return Err(parse_err(
                path,
                line_no,
                format!("duplicate pair ({star}, {circ})"),
            ));
        }
    }
    PreferenceDataset::from_parts(alternatives, counts)
}

pub fn write_model_json(path: &Path, model: &LexRewardModel) -> Result<()> {
    let json = serde_json::to_string_pretty(model).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    write_atomic(path, &(json + "\n"))
}

pub fn read_model_json(path: &Path) -> Result<LexRewardModel> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let model: LexRewardModel = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    if model.levels.is_empty() {
        return Err(Error::invalid("model file holds no levels"));
    }
    Ok(model)
}

pub fn write_policy_json(path: &Path, policy: &Policy) -> Result<()> {
    let json = serde_json::to_string(policy).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    write_atomic(path, &(json + "\n"))
}

pub fn read_policy_json(path: &Path) -> Result<Policy> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn write_fit_report_json(path: &Path, report: &FitReport) -> Result<()> {
    let json = serde_json::to_string(report).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    write_atomic(path, &(json + "\n"))
}
