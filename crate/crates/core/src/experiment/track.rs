use serde::{Deserialize, Serialize};

use crate::analysis::{fit, ModelKind};
use crate::apparatus::Session;

use super::ExperimentError;

/// Peak amplitude over background noise below which tracking gives up.
pub const TRACK_MIN_SNR: f64 = 5.0;

/// Half-widths and point counts of the line scans, µm.
const LATERAL_SPAN: f64 = 0.6;
const AXIAL_SPAN: f64 = 2.0;
const LINE_POINTS: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    /// Stage coordinates of the peak, µm.
    pub position: [f64; 3],
    pub iterations: usize,
    /// Fitted peak count rate after each iteration, Hz.
    pub peak_rates: Vec<f64>,
    /// Largest axis correction per iteration, µm.
    pub steps: Vec<f64>,
    /// Measured rate at the final position, Hz.
    pub final_rate: f64,
}

fn line_scan(s: &mut Session, at: [f64; 3], axis: usize, dwell: f64) -> Result<(f64, f64), ExperimentError> {
    let span = if axis == 2 { AXIAL_SPAN } else { LATERAL_SPAN };
    let mut xs = Vec::with_capacity(LINE_POINTS);
    let mut ys = Vec::with_capacity(LINE_POINTS);
    for k in 0..LINE_POINTS {
        let mut p = at;
        p[axis] += -span + 2.0 * span * k as f64 / (LINE_POINTS - 1) as f64;
        let (actual, _) = s.move_stage(p)?;
        xs.push(actual[axis]);
        ys.push(s.count(dwell)? as f64);
    }
    let sigma: Vec<f64> = ys.iter().map(|y| y.max(1.0).sqrt()).collect();
    let r = fit(ModelKind::GaussianPeak.model().as_ref(), &xs, &ys, Some(&sigma))
        .map_err(|_| ExperimentError::TrackLost { snr: 0.0 })?;
    let (a, c, b) = (r.param("amplitude").unwrap_or(0.0), r.param("center").unwrap_or(0.0), r.param("offset").unwrap_or(0.0));
    let snr = a / b.max(1.0).sqrt();
    let inside = c >= xs[0] && c <= xs[xs.len() - 1];
    if !(snr >= TRACK_MIN_SNR) || !inside {
        return Err(ExperimentError::TrackLost { snr });
    }
    Ok((c, (a + b) / dwell))
}

/// Refines the stage position onto the nearest bright spot with x, y and z
/// Gaussian line scans until the correction drops below `tolerance` (µm).
pub fn track_nv(
    s: &mut Session,
    guess: [f64; 3],
    tolerance: f64,
    max_iterations: usize,
    dwell: f64,
) -> Result<TrackResult, ExperimentError> {
    let mut pos = s.move_stage(guess)?.0;
    let mut peak_rates = Vec::new();
    let mut steps = Vec::new();
    for _ in 0..max_iterations {
        let mut step: f64 = 0.0;
        let mut peak = 0.0;
        for axis in 0..3 {
            let (c, rate) = line_scan(s, pos, axis, dwell)?;
            step = step.max((c - pos[axis]).abs());
            pos[axis] = c;
            peak = rate;
        }
        peak_rates.push(peak);
        steps.push(step);
        if step < tolerance {
            break;
        }
    }
    s.move_stage(pos)?;
    let final_rate = s.count(dwell)? as f64 / dwell;
    Ok(TrackResult { position: pos, iterations: steps.len(), peak_rates, steps, final_rate })
}
