use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{frame_count, Waveform};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyConfig {
    pub hop_seconds: f64,
    pub frame_seconds: f64,
    pub n_mels: usize,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            hop_seconds: 0.01,
            frame_seconds: 0.025,
            n_mels: 80,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `n_mels x (nfft/2 + 1)`, spanning `[0, sr/2]`.
pub fn mel_filterbank(n_mels: usize, nfft: usize, sample_rate: f64) -> Vec<Vec<f64>> {
    let bins = nfft / 2 + 1;
    let top = hz_to_mel(sample_rate / 2.0);
    let points: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64)).collect();
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate / nfft as f64;
                    let up = (f - lo) / (mid - lo);
                    let down = (hi - f) / (hi - mid);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Per-frame RMS over the mel bands of a Hann-windowed magnitude spectrum.
pub fn compute_energy(w: &Waveform, hop_seconds: f64, frame_length: f64) -> Result<Vec<f64>> {
    compute_energy_with(
        w,
        &EnergyConfig {
            hop_seconds,
            frame_seconds: frame_length,
            ..EnergyConfig::default()
        },
    )
}

pub fn compute_energy_with(w: &Waveform, cfg: &EnergyConfig) -> Result<Vec<f64>> {
    if cfg.frame_seconds < cfg.hop_seconds || cfg.hop_seconds <= 0.0 {
        return Err(Error::Config(format!(
            "frame length {} s must be >= hop {} s > 0",
            cfg.frame_seconds, cfg.hop_seconds
        )));
    }
    let sr = w.sample_rate as f64;
    let hop = sr * cfg.hop_seconds;
    let frame_len = (sr * cfg.frame_seconds).round() as usize;
    if w.samples.len() < frame_len {
        return Err(Error::EmptyTrack { samples: w.samples.len(), window: frame_len });
    }
    let nfft = frame_len.next_power_of_two() * 2;
    let window: Vec<f64> = (0..frame_len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (frame_len - 1) as f64).cos())
        .collect();
    let bank = mel_filterbank(cfg.n_mels, nfft, sr);
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(nfft);
    let frames = frame_count(w.samples.len(), hop);
    let x = &w.samples;
    let out = crate::par::map_range(frames, |i| {
        let centre = (i as f64 + 0.5) * hop;
        let start = (centre - frame_len as f64 / 2.0).round() as isize;
        let mut buf = vec![Complex::new(0.0, 0.0); nfft];
        for (j, wj) in window.iter().enumerate() {
            let idx = start + j as isize;
            if idx >= 0 && (idx as usize) < x.len() {
                buf[j].re = x[idx as usize] as f64 * wj;
            }
        }
        fft.process(&mut buf);
        let mag: Vec<f64> = buf[..nfft / 2 + 1].iter().map(|c| c.norm()).collect();
        let sumsq: f64 = bank
            .iter()
            .map(|filt| {
                let m: f64 = filt.iter().zip(&mag).map(|(a, b)| a * b).sum();
                m * m
            })
            .sum();
        (sumsq / cfg.n_mels as f64).sqrt()
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(amp: f64) -> Waveform {
        let s = (0..16000).map(|i| (amp * (2.0 * PI * 220.0 * i as f64 / 16000.0).sin()) as f32).collect();
        Waveform::new(s, 16000).unwrap()
    }

    #[test]
    fn silence_has_zero_energy() {
        let w = Waveform::new(vec![0.0; 8000], 16000).unwrap();
        assert!(compute_energy(&w, 0.01, 0.025).unwrap().iter().all(|e| *e == 0.0));
    }

    #[test]
    fn stationary_sine_has_flat_energy() {
        let e = compute_energy(&sine(0.3), 0.01, 0.025).unwrap();
        let interior = &e[3..e.len() - 3];
        let mean = interior.iter().sum::<f64>() / interior.len() as f64;
        assert!(interior.iter().all(|v| (v - mean).abs() <= 0.01 * mean));
    }

    #[test]
    fn energy_is_homogeneous() {
        let a = compute_energy(&sine(0.3), 0.01, 0.025).unwrap();
        let b = compute_energy(&sine(0.6), 0.01, 0.025).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((y - 2.0 * x).abs() <= 1e-9 * y.abs().max(1e-300));
        }
    }

    #[test]
    fn frame_shorter_than_hop_is_rejected() {
        assert!(compute_energy(&sine(0.3), 0.02, 0.01).is_err());
    }

    #[test]
    fn filterbank_rows_are_non_empty() {
        let fb = mel_filterbank(80, 1024, 16000.0);
        assert_eq!(fb.len(), 80);
        assert!(fb.iter().all(|row| row.iter().any(|w| *w > 0.0)));
    }
}
