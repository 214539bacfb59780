//! Evaluation quantities: trajectory performance, travel times, schedule
//! deviations and decision latency.

use std::collections::HashMap;
use std::io::Write;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{Trajectory, VehicleId};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("trajectories have {0} and {1} samples; they do not share a schedule")]
    LengthMismatch(usize, usize),
    #[error("vehicle {0} has a schedule entry but no crossing time")]
    Unmatched(VehicleId),
    #[error("no samples")]
    Empty,
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Summed distance to the intersection over every sample, divided by the
/// control-region length. Lower means the vehicle stayed closer. Samples
/// past the intersection starting point count as zero distance.
pub fn trajectory_performance_x(trj: &Trajectory, control_length: f64) -> f64 {
    trj.samples.iter().map(|s| s.x.max(0.0)).sum::<f64>() / control_length
}

/// Trajectories aimed at the same schedule may end up to two steps apart
/// (each is allowed one step of slack either way).
pub const MAX_LENGTH_SLACK: usize = 2;

/// `|X(a) − X(b)|`
pub fn trajectory_diff(a: &Trajectory, b: &Trajectory, control_length: f64) -> Result<f64, MetricsError> {
    if a.len().abs_diff(b.len()) > MAX_LENGTH_SLACK {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    Ok((trajectory_performance_x(a, control_length) - trajectory_performance_x(b, control_length)).abs())
}

/// Mean of `exit − entry`; `None` when nothing completed.
pub fn total_average_travel_time(trips: &[(f64, f64)]) -> Option<f64> {
    if trips.is_empty() {
        return None;
    }
    Some(trips.iter().map(|(entry, exit)| exit - entry).sum::<f64>() / trips.len() as f64)
}

/// Vehicles crossing more than `tolerance` seconds from their scheduled time.
pub fn deviation_count(
    scheduled: &[(VehicleId, f64)],
    actual: &HashMap<VehicleId, f64>,
    tolerance: f64,
) -> Result<usize, MetricsError> {
    let mut count = 0;
    for (id, t_sched) in scheduled {
        let t = actual.get(id).ok_or(MetricsError::Unmatched(*id))?;
        if (t - t_sched).abs() > tolerance {
            count += 1;
        }
    }
    Ok(count)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub avg_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    pub samples: usize,
}

pub fn action_latency_stats(samples: &[Duration]) -> Result<LatencyStats, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    let secs: Vec<f64> = samples.iter().map(Duration::as_secs_f64).collect();
    Ok(LatencyStats {
        avg_s: secs.iter().sum::<f64>() / secs.len() as f64,
        min_s: secs.iter().copied().fold(f64::INFINITY, f64::min),
        max_s: secs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        samples: secs.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub vehicles_spawned: usize,
    /// `exit − entry` of every vehicle that left the control region.
    pub travel_times: Vec<f64>,
    pub mean_travel_time: Option<f64>,
    /// Vehicles still inside the region when the run stopped.
    pub censored: usize,
    pub x_values: Vec<f64>,
    pub diffs: Vec<f64>,
    pub deviations: usize,
    pub collisions: usize,
    pub latency: Option<LatencyStats>,
}

impl EvalReport {
    pub fn deviation_fraction(&self) -> f64 {
        if self.travel_times.is_empty() {
            0.0
        } else {
            self.deviations as f64 / self.travel_times.len() as f64
        }
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<(), MetricsError> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub traffic_level: usize,
    pub seed: u64,
    pub vehicles: usize,
    pub mean_travel_time_s: Option<f64>,
    pub deviations: usize,
    pub deviation_pct: f64,
    pub collisions: usize,
}

impl SummaryRow {
    pub fn from_report(r: &EvalReport, traffic_level: usize, seed: u64) -> Self {
        Self {
            label: r.label.clone(),
            traffic_level,
            seed,
            vehicles: r.travel_times.len(),
            mean_travel_time_s: r.mean_travel_time,
            deviations: r.deviations,
            deviation_pct: 100.0 * r.deviation_fraction(),
            collisions: r.collisions,
        }
    }
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
