//! Cumulative-mean-normalised difference pitch estimator (YIN family) with
//! parabolic refinement of the lag minimum.

use serde::{Deserialize, Serialize};

use super::{frame_count, Waveform};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitchConfig {
    pub hop_seconds: f64,
    pub fmin: f64,
    pub fmax: f64,
    /// Voicing threshold on the normalised difference minimum.
    pub threshold: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        PitchConfig {
            hop_seconds: 0.01,
            fmin: 60.0,
            fmax: 400.0,
            threshold: 0.15,
        }
    }
}

/// Per-frame F0 in Hz, `None` marks an unvoiced frame.
pub type PitchTrack = Vec<Option<f64>>;

pub fn estimate_pitch(w: &Waveform, hop_seconds: f64, fmin: f64, fmax: f64) -> Result<PitchTrack> {
    estimate_pitch_with(
        w,
        &PitchConfig {
            hop_seconds,
            fmin,
            fmax,
            ..PitchConfig::default()
        },
    )
}

pub fn estimate_pitch_with(w: &Waveform, cfg: &PitchConfig) -> Result<PitchTrack> {
    let sr = w.sample_rate as f64;
    if !(cfg.fmin > 0.0 && cfg.fmin < cfg.fmax) {
        return Err(Error::Config(format!("need 0 < fmin < fmax, got {} / {}", cfg.fmin, cfg.fmax)));
    }
    if cfg.fmax >= sr / 2.0 {
        return Err(Error::Config(format!("fmax {} must be below Nyquist {}", cfg.fmax, sr / 2.0)));
    }
    if !(0.005..=0.02).contains(&cfg.hop_seconds) {
        return Err(Error::Config(format!("hop {} s outside [0.005, 0.02]", cfg.hop_seconds)));
    }
    let tau_max = (sr / cfg.fmin).ceil() as usize;
    let tau_min = ((sr / cfg.fmax).floor() as usize).max(2);
    let width = tau_max;
    let window = width + tau_max + 1;
    let x = &w.samples;
    if x.len() < window {
        return Err(Error::EmptyTrack { samples: x.len(), window });
    }
    let hop = sr * cfg.hop_seconds;
    let frames = frame_count(x.len(), hop);
    let est = Estimator { tau_min, tau_max, width, sr, cfg };
    let track = crate::par::map_range(frames, |i| {
        let centre = (i as f64 + 0.5) * hop;
        let start = (centre - window as f64 / 2.0).round().max(0.0) as usize;
        let start = start.min(x.len() - window);
        est.frame(&x[start..start + window])
    });
    Ok(track)
}

struct Estimator<'a> {
    tau_min: usize,
    tau_max: usize,
    width: usize,
    sr: f64,
    cfg: &'a PitchConfig,
}

impl Estimator<'_> {
    fn frame(&self, x: &[f32]) -> Option<f64> {
        let power: f64 = x.iter().map(|v| (*v as f64).powi(2)).sum();
        if power < 1e-10 * x.len() as f64 {
            return None;
        }
        let mut d = vec![0.0f64; self.tau_max + 1];
        for (tau, dt) in d.iter_mut().enumerate().skip(1) {
            let mut s = 0.0;
            for j in 0..self.width {
                let diff = x[j] as f64 - x[j + tau] as f64;
                s += diff * diff;
            }
            *dt = s;
        }
        let mut cmnd = vec![1.0f64; self.tau_max + 1];
        let mut running = 0.0;
        for tau in 1..=self.tau_max {
            running += d[tau];
            cmnd[tau] = if running > 0.0 { d[tau] * tau as f64 / running } else { 1.0 };
        }
        let mut tau = (self.tau_min..=self.tau_max).find(|&t| cmnd[t] < self.cfg.threshold)?;
        while tau < self.tau_max && cmnd[tau + 1] < cmnd[tau] {
            tau += 1;
        }
        let mut lag = tau as f64;
        if tau > 1 && tau < self.tau_max {
            let (a, b, c) = (cmnd[tau - 1], cmnd[tau], cmnd[tau + 1]);
            let denom = a - 2.0 * b + c;
            if denom > 0.0 {
                lag += ((a - c) / (2.0 * denom)).clamp(-1.0, 1.0);
            }
        }
        let f0 = self.sr / lag;
        (f0 >= self.cfg.fmin && f0 <= self.cfg.fmax).then_some(f0)
    }
}
