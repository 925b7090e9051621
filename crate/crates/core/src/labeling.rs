//! The four security criteria and the overall security label.
//!
//! Every labeler is a pure function of its inputs. A bit of 1 means
//! secure/stable, 0 means insecure.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{mode_damping, Trajectory};

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("transient stability index needs at least two generators")]
    SingleGenerator,
    #[error("trajectory has no steps")]
    EmptyTrajectory,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid thresholds: {0}")]
    Thresholds(String),
}

pub const TASK_NAMES: [&str; 4] = ["static", "small_signal", "voltage", "transient"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelVector {
    pub static_ok: bool,
    pub small_signal_ok: bool,
    pub voltage_ok: bool,
    pub transient_ok: bool,
}

impl LabelVector {
    pub fn from_bits(bits: [bool; 4]) -> Self {
        LabelVector {
            static_ok: bits[0],
            small_signal_ok: bits[1],
            voltage_ok: bits[2],
            transient_ok: bits[3],
        }
    }

    /// Task order: static, small-signal, voltage, transient.
    pub fn bits(&self) -> [bool; 4] {
        [
            self.static_ok,
            self.small_signal_ok,
            self.voltage_ok,
            self.transient_ok,
        ]
    }

    pub fn overall_secure(&self) -> bool {
        self.bits().iter().all(|&b| b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelThresholds {
    pub tsi_min_pct: f64,
    pub zeta_min: f64,
    pub band_hz: (f64, f64),
    pub v_band_pu: (f64, f64),
    pub v_dwell_s: f64,
    /// Per-line weights; empty means uniform `1/N_l`.
    pub overload_w: Vec<f64>,
    pub overload_p: f64,
    pub overload_tau: f64,
}

impl Default for LabelThresholds {
    fn default() -> Self {
        LabelThresholds {
            tsi_min_pct: 10.0,
            zeta_min: 0.03,
            band_hz: (0.25, 1.0),
            v_band_pu: (0.8, 1.1),
            v_dwell_s: 0.5,
            overload_w: Vec::new(),
            overload_p: 2.0,
            overload_tau: 1.0,
        }
    }
}

impl LabelThresholds {
    pub fn validate(&self) -> Result<(), LabelError> {
        let positive = [
            ("tsi_min_pct", self.tsi_min_pct),
            ("zeta_min", self.zeta_min),
            ("v_dwell_s", self.v_dwell_s),
            ("overload_p", self.overload_p),
            ("overload_tau", self.overload_tau),
            ("band_hz.0", self.band_hz.0),
            ("v_band_pu.0", self.v_band_pu.0),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(LabelError::Thresholds(format!("{name} must be positive")));
        }
        if !(self.band_hz.0 < self.band_hz.1) {
            return Err(LabelError::Thresholds("band_hz lower must be below upper".into()));
        }
        if !(self.v_band_pu.0 < self.v_band_pu.1) {
            return Err(LabelError::Thresholds("v_band_pu lower must be below upper".into()));
        }
        if self.overload_w.iter().any(|&w| w < 0.0) {
            return Err(LabelError::Thresholds("overload_w must be non-negative".into()));
        }
        Ok(())
    }

    pub fn weights(&self, n_lines: usize) -> Vec<f64> {
        if self.overload_w.is_empty() {
            vec![1.0 / n_lines as f64; n_lines]
        } else {
            self.overload_w.clone()
        }
    }
}

/// Worst-case index reported for divergent runs.
pub const TSI_DIVERGENT: f64 = -100.0;

/// TSI from a maximum pairwise rotor-angle separation in degrees.
pub fn tsi_from_separation(max_sep_deg: f64) -> f64 {
    (360.0 - max_sep_deg) / (360.0 + max_sep_deg) * 100.0
}

/// Largest separation between any two rotor angles over the run, degrees.
pub fn max_angle_separation_deg(traj: &Trajectory) -> Result<f64, LabelError> {
    let ng = traj.delta.first().ok_or(LabelError::EmptyTrajectory)?.len();
    if ng < 2 {
        return Err(LabelError::SingleGenerator);
    }
    let sep = traj
        .delta
        .iter()
        .map(|row| {
            let (lo, hi) = row
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| (lo.min(d), hi.max(d)));
            hi - lo
        })
        .fold(0.0f64, f64::max);
    Ok(sep.to_degrees())
}

pub fn tsi(traj: &Trajectory) -> Result<f64, LabelError> {
    let sep = max_angle_separation_deg(traj)?;
    if traj.divergent {
        return Ok(TSI_DIVERGENT);
    }
    Ok(tsi_from_separation(sep).max(TSI_DIVERGENT))
}

pub fn label_transient_from_tsi(tsi: f64, th: &LabelThresholds) -> bool {
    !(tsi < th.tsi_min_pct)
}

pub fn label_transient(traj: &Trajectory, th: &LabelThresholds) -> Result<bool, LabelError> {
    Ok(label_transient_from_tsi(tsi(traj)?, th))
}

/// Insecure iff an in-band oscillatory mode is damped below `zeta_min`.
pub fn label_small_signal(modes: &[Complex64], th: &LabelThresholds) -> bool {
    !modes.iter().filter(|l| l.norm() >= 1e-9 && l.im != 0.0).any(|&l| {
        let (zeta, freq) = mode_damping(l);
        freq >= th.band_hz.0 && freq <= th.band_hz.1 && zeta < th.zeta_min
    })
}

/// Longest contiguous out-of-band run per bus, in seconds, counting only
/// samples at or after `from_s`. Each sample stands for one step of width `dt`.
pub fn longest_excursion_s(
    v_mag: &[Vec<f64>],
    time_s: &[f64],
    dt: f64,
    from_s: f64,
    band: (f64, f64),
) -> f64 {
    let nb = v_mag.first().map_or(0, |r| r.len());
    let mut run = vec![0usize; nb];
    let mut longest = 0usize;
    for (row, &t) in v_mag.iter().zip(time_s) {
        if t < from_s {
            continue;
        }
        for (b, &v) in row.iter().enumerate() {
            if v < band.0 || v > band.1 {
                run[b] += 1;
                longest = longest.max(run[b]);
            } else {
                run[b] = 0;
            }
        }
    }
    longest as f64 * dt
}

pub fn label_voltage(traj: &Trajectory, th: &LabelThresholds) -> bool {
    // fault-on samples sit before assess_from_s and never count
    let worst = longest_excursion_s(
        &traj.bus_v_mag,
        &traj.time_s,
        traj.dt_s,
        traj.assess_from_s,
        th.v_band_pu,
    );
    !(worst > th.v_dwell_s + 1e-9)
}

/// `Σ w_i (S_mean,i / S_max,i)^p`.
pub fn overload_index(s_mean: &[f64], s_max: &[f64], w: &[f64], p: f64) -> Result<f64, LabelError> {
    if s_mean.len() != s_max.len() || s_mean.len() != w.len() {
        return Err(LabelError::Dimension(format!(
            "s_mean {}, s_max {}, w {}",
            s_mean.len(),
            s_max.len(),
            w.len()
        )));
    }
    Ok(s_mean
        .iter()
        .zip(s_max)
        .zip(w)
        .map(|((&s, &m), &wi)| if s == 0.0 { 0.0 } else { wi * (s / m).powf(p) })
        .sum())
}

pub fn label_static(s_mean: &[f64], s_max: &[f64], th: &LabelThresholds) -> Result<bool, LabelError> {
    let w = th.weights(s_mean.len());
    let f = overload_index(s_mean, s_max, &w, th.overload_p)?;
    let hard = s_mean.iter().zip(s_max).any(|(s, m)| s > m);
    Ok(!(f > th.overload_tau || hard))
}

/// Mean line loading used for the static criterion, with its ratings.
#[derive(Debug, Clone, PartialEq)]
pub struct LineLoading {
    pub s_mean: Vec<f64>,
    pub s_max: Vec<f64>,
}

pub fn label_all(
    traj: &Trajectory,
    modes: &[Complex64],
    flows: &LineLoading,
    th: &LabelThresholds,
) -> Result<LabelVector, LabelError> {
    Ok(LabelVector {
        static_ok: label_static(&flows.s_mean, &flows.s_max, th)?,
        small_signal_ok: label_small_signal(modes, th),
        voltage_ok: label_voltage(traj, th),
        transient_ok: label_transient(traj, th)?,
    })
}
