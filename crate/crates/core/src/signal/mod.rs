//! Audio to aligned, per-utterance normalised prosody contours.

mod energy;
mod normalize;
mod pitch;
mod vad;
mod wav;

use serde::{Deserialize, Serialize};

pub use energy::{compute_energy, compute_energy_with, mel_filterbank, EnergyConfig};
pub use normalize::{interpolate_gaps, normalize_track};
pub use pitch::{estimate_pitch, estimate_pitch_with, PitchConfig, PitchTrack};
pub use vad::detect_voice_activity;
pub use wav::{load_waveform, write_waveform};

use crate::error::{Error, Result};

/// Mono audio with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidWaveform("no samples".into()));
        }
        if sample_rate < 8000 {
            return Err(Error::InvalidWaveform(format!("sample rate {sample_rate} below 8000 Hz")));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::InvalidWaveform(format!("sample {i} = {} outside [-1, 1]", samples[i])));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Keep at most `seconds` of audio.
    pub fn truncated(&self, seconds: f64) -> Waveform {
        let n = ((seconds * self.sample_rate as f64).floor() as usize).min(self.samples.len());
        Waveform {
            samples: self.samples[..n].to_vec(),
            sample_rate: self.sample_rate,
        }
    }
}

/// `floor(samples / hop)` with a small guard against representation error.
pub(crate) fn frame_count(samples: usize, hop_samples: f64) -> usize {
    (samples as f64 / hop_samples + 1e-9).floor() as usize
}

/// Aligned per-frame contours. `pitch` and `energy` are normalised,
/// `raw_pitch` keeps the pre-normalisation pitch (Hz for audio input, 0 when
/// unvoiced).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProsodyTrack {
    pub pitch: Vec<f32>,
    pub energy: Vec<f32>,
    pub vad: Vec<u8>,
    pub raw_pitch: Vec<f32>,
    pub hop_seconds: f64,
}

impl ProsodyTrack {
    pub fn new(pitch: Vec<f32>, energy: Vec<f32>, vad: Vec<u8>, raw_pitch: Vec<f32>, hop_seconds: f64) -> Result<Self> {
        let n = pitch.len();
        if energy.len() != n || vad.len() != n || raw_pitch.len() != n {
            return Err(Error::Alignment(format!(
                "contour lengths differ: pitch {n}, energy {}, vad {}, raw {}",
                energy.len(),
                vad.len(),
                raw_pitch.len()
            )));
        }
        if hop_seconds <= 0.0 {
            return Err(Error::Config("hop must be positive".into()));
        }
        if vad.iter().any(|v| *v > 1) {
            return Err(Error::Alignment("vad values must be 0 or 1".into()));
        }
        Ok(ProsodyTrack { pitch, energy, vad, raw_pitch, hop_seconds })
    }

    pub fn num_frames(&self) -> usize {
        self.pitch.len()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.num_frames() as f64 * self.hop_seconds
    }

    /// Per-frame `[pitch, energy, vad]` rows.
    pub fn stacked(&self) -> Vec<[f32; 3]> {
        (0..self.num_frames())
            .map(|i| [self.pitch[i], self.energy[i], self.vad[i] as f32])
            .collect()
    }

    /// First `n` frames (or all, when shorter).
    pub fn prefix(&self, n: usize) -> ProsodyTrack {
        let n = n.min(self.num_frames());
        ProsodyTrack {
            pitch: self.pitch[..n].to_vec(),
            energy: self.energy[..n].to_vec(),
            vad: self.vad[..n].to_vec(),
            raw_pitch: self.raw_pitch[..n].to_vec(),
            hop_seconds: self.hop_seconds,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub hop_seconds: f64,
    pub frame_seconds: f64,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub voicing_threshold: f64,
    pub energy_floor_ratio: f64,
    pub max_utterance_seconds: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            hop_seconds: 0.01,
            frame_seconds: 0.025,
            n_mels: 80,
            fmin: 60.0,
            fmax: 400.0,
            voicing_threshold: 0.15,
            energy_floor_ratio: 0.1,
            max_utterance_seconds: 6.0,
        }
    }
}

impl FeatureConfig {
    pub fn pitch(&self) -> PitchConfig {
        PitchConfig {
            hop_seconds: self.hop_seconds,
            fmin: self.fmin,
            fmax: self.fmax,
            threshold: self.voicing_threshold,
        }
    }

    pub fn energy(&self) -> EnergyConfig {
        EnergyConfig {
            hop_seconds: self.hop_seconds,
            frame_seconds: self.frame_seconds,
            n_mels: self.n_mels,
        }
    }
}

/// Truncate, then extract and normalise pitch, energy and voice activity.
pub fn extract_prosody(w: &Waveform, cfg: &FeatureConfig) -> Result<ProsodyTrack> {
    let w = w.truncated(cfg.max_utterance_seconds);
    let f0 = estimate_pitch_with(&w, &cfg.pitch())?;
    let energy = compute_energy_with(&w, &cfg.energy())?;
    if f0.len() != energy.len() {
        return Err(Error::Alignment(format!("pitch {} vs energy {} frames", f0.len(), energy.len())));
    }
    let vad = detect_voice_activity(&f0, &energy, cfg.energy_floor_ratio);
    let voiced: Vec<bool> = f0.iter().map(Option::is_some).collect();
    let raw: Vec<f64> = f0.iter().map(|f| f.unwrap_or(0.0)).collect();
    let pitch = if voiced.iter().any(|v| *v) {
        normalize_track(&raw, &voiced)?
    } else {
        vec![0.0; raw.len()]
    };
    let energy_norm = normalize_track(&energy, &vec![true; energy.len()])?;
    ProsodyTrack::new(
        pitch.iter().map(|v| *v as f32).collect(),
        energy_norm.iter().map(|v| *v as f32).collect(),
        vad,
        raw.iter().map(|v| *v as f32).collect(),
        cfg.hop_seconds,
    )
}
