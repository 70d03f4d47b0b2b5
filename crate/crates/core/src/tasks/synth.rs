//! Synthetic multi-timescale prosody corpus.
//!
//! Each utterance is first drawn as a small parameter record (class, pulse
//! period, word layout, prominent pulses, pauses) and then rendered into
//! contours and labels. Labels depend only on the record, so they can be
//! recomputed from it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabeledUtterance, Provenance, WordSpan};
use crate::error::{Error, Result};
use crate::signal::normalize_track;
use crate::signal::ProsodyTrack;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    /// Pitch offset in semitones.
    pub pitch_offset: f64,
    /// Scale applied to every pitch excursion.
    pub range: f64,
    /// Multiplier on the sampled pulse rate.
    pub rate: f64,
    /// Fall in semitones from the start to the end of the utterance.
    pub declination: f64,
    /// Pitch bump in semitones on every pulse.
    pub wiggle: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_utterances: usize,
    pub duration_range: (f64, f64),
    /// Pulse rate before the class multiplier, Hz.
    pub rate_range: (f64, f64),
    pub syllables_per_word: (usize, usize),
    pub prominence_prob: f64,
    /// Energy and pitch-bump gain on prominent pulses.
    pub prominence_gain: f64,
    pub pause_prob: f64,
    pub pause_range: (f64, f64),
    pub classes: Vec<ClassSpec>,
    pub base_hz: f64,
    /// Per-utterance speaker offset, semitones (standard deviation).
    pub speaker_sd: f64,
    pub pitch_noise: f64,
    pub energy_noise: f64,
    pub hop_seconds: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let class = |pitch_offset, range, rate| ClassSpec { pitch_offset, range, rate, declination: 2.0, wiggle: 1.0 };
        SynthConfig {
            num_utterances: 200,
            duration_range: (2.0, 4.0),
            rate_range: (4.0, 5.0),
            syllables_per_word: (1, 3),
            prominence_prob: 0.25,
            prominence_gain: 1.8,
            pause_prob: 0.3,
            pause_range: (0.15, 0.35),
            classes: vec![
                class(-1.0, 0.6, 0.8),
                class(1.0, 1.4, 0.8),
                class(-1.0, 1.4, 1.2),
                class(1.0, 0.6, 1.2),
            ],
            base_hz: 150.0,
            speaker_sd: 1.0,
            pitch_noise: 0.3,
            energy_noise: 0.03,
            hop_seconds: 0.01,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic corpus: {m}")));
        if self.num_utterances == 0 {
            return bad("num_utterances must be positive");
        }
        if self.classes.is_empty() {
            return bad("at least one class is required");
        }
        for (i, a) in self.classes.iter().enumerate() {
            if self.classes[..i].contains(a) {
                return bad("class rows must be distinct");
            }
        }
        let (lo, hi) = self.rate_range;
        for c in &self.classes {
            if !(lo * c.rate >= 2.0 && hi * c.rate <= 10.0 && lo <= hi) {
                return bad("pulse rates must stay within [2, 10] Hz");
            }
        }
        let (dlo, dhi) = self.duration_range;
        if !(dlo > 0.0 && dlo <= dhi) {
            return bad("invalid duration range");
        }
        let (slo, shi) = self.syllables_per_word;
        if slo == 0 || slo > shi {
            return bad("invalid syllables_per_word");
        }
        if !(0.0..=1.0).contains(&self.prominence_prob) || !(0.0..=1.0).contains(&self.pause_prob) {
            return bad("probabilities must lie in [0, 1]");
        }
        if !(self.pause_range.0 > 0.0 && self.pause_range.0 <= self.pause_range.1) {
            return bad("invalid pause range");
        }
        if !(self.hop_seconds > 0.0) {
            return bad("hop must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordParams {
    pub start: usize,
    /// One flag per pulse: amplified or not.
    pub prominent_pulses: Vec<bool>,
    /// Silent frames after the word.
    pub pause_after: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceParams {
    pub id: String,
    pub class: usize,
    pub num_frames: usize,
    /// Pulse spacing in frames.
    pub period: usize,
    pub speaker_offset: f64,
    pub words: Vec<WordParams>,
    pub noise_seed: u64,
}

impl UtteranceParams {
    pub fn pulse_centres(&self) -> Vec<(usize, bool)> {
        self.words
            .iter()
            .flat_map(|w| w.prominent_pulses.iter().enumerate().map(move |(j, p)| (w.start + j * self.period + self.period / 2, *p)))
            .collect()
    }

    pub fn word_end(&self, w: &WordParams) -> usize {
        w.start + w.prominent_pulses.len() * self.period
    }
}

/// Half-width of the vowel nucleus around each pulse.
pub fn nucleus_half_width(period: usize) -> usize {
    ((0.2 * period as f64).round() as usize).max(1)
}

/// Half-width of the voiced region around each pulse.
pub fn voiced_half_width(period: usize) -> usize {
    ((0.35 * period as f64).round() as usize).max(1)
}

pub struct SyntheticCorpus {
    pub params: Vec<UtteranceParams>,
    pub tracks: Vec<ProsodyTrack>,
    pub labels: Vec<LabeledUtterance>,
}

fn sample_params(cfg: &SynthConfig, index: usize, rng: &mut ChaCha8Rng) -> UtteranceParams {
    let class = rng.gen_range(0..cfg.classes.len());
    let spec = &cfg.classes[class];
    let secs = rng.gen_range(cfg.duration_range.0..=cfg.duration_range.1);
    let n = (secs / cfg.hop_seconds).round() as usize;
    let rate = rng.gen_range(cfg.rate_range.0..=cfg.rate_range.1) * spec.rate;
    let period = ((1.0 / (rate * cfg.hop_seconds)).round() as usize).max(2);
    let speaker_offset = Normal::new(0.0, cfg.speaker_sd.max(0.0)).expect("finite sd").sample(rng);
    let mut words = Vec::new();
    let mut t = rng.gen_range(0..=period / 4);
    while t + period <= n {
        let want = rng.gen_range(cfg.syllables_per_word.0..=cfg.syllables_per_word.1);
        let syl = want.min((n - t) / period);
        let prominent_pulses: Vec<bool> = (0..syl).map(|_| rng.gen_bool(cfg.prominence_prob)).collect();
        let end = t + syl * period;
        let pause = if rng.gen_bool(cfg.pause_prob) {
            (rng.gen_range(cfg.pause_range.0..=cfg.pause_range.1) / cfg.hop_seconds).round() as usize
        } else {
            0
        };
        // a pause only counts if another word can follow it
        let pause = if end + pause + period <= n { pause } else { 0 };
        words.push(WordParams { start: t, prominent_pulses, pause_after: pause });
        t = end + pause;
    }
    if let Some(last) = words.last_mut() {
        last.pause_after = 0;
    }
    UtteranceParams {
        id: format!("syn{index:05}"),
        class,
        num_frames: n,
        period,
        speaker_offset,
        words,
        noise_seed: rng.gen(),
    }
}

/// Labels implied by a parameter record.
pub fn labels_from_params(p: &UtteranceParams) -> LabeledUtterance {
    let h = nucleus_half_width(p.period) as isize;
    let mut frames = vec![0u8; p.num_frames];
    let centres = p.pulse_centres();
    for &(c, _) in &centres {
        for t in (c as isize - h).max(0)..=(c as isize + h).min(p.num_frames as isize - 1) {
            frames[t as usize] = 1;
        }
    }
    let words = p
        .words
        .iter()
        .enumerate()
        .map(|(i, w)| WordSpan {
            start: w.start,
            end: p.word_end(w),
            word: format!("w{i}"),
            prominent: w.prominent_pulses.iter().any(|b| *b) as u8,
            boundary: (w.pause_after > 0) as u8,
        })
        .collect();
    LabeledUtterance {
        id: p.id.clone(),
        num_frames: p.num_frames,
        frame_labels: frames,
        syllable_count: Some(centres.len()),
        words,
        class: Some(p.class),
        provenance: Provenance::Synthetic,
    }
}

/// Contours implied by a parameter record and the class table.
pub fn render_track(p: &UtteranceParams, cfg: &SynthConfig) -> Result<ProsodyTrack> {
    let spec = &cfg.classes[p.class];
    let n = p.num_frames;
    let per = p.period as f64;
    let centres = p.pulse_centres();
    let vh = voiced_half_width(p.period);
    let mut rng = ChaCha8Rng::seed_from_u64(p.noise_seed);
    let pitch_noise = Normal::new(0.0, cfg.pitch_noise.max(0.0)).expect("finite sd");
    let energy_noise = Normal::new(0.0, cfg.energy_noise.max(0.0)).expect("finite sd");
    let (e_sd, p_sd) = (per / 5.0, per / 3.0);

    let mut energy = vec![0.05f64; n];
    let mut bumps = vec![0.0f64; n];
    let mut vad = vec![0u8; n];
    for &(c, prom) in &centres {
        let gain = if prom { cfg.prominence_gain } else { 1.0 };
        let lo = c.saturating_sub(3 * p.period);
        let hi = (c + 3 * p.period).min(n);
        for t in lo..hi {
            let d = t as f64 - c as f64;
            energy[t] += gain * (-0.5 * (d / e_sd).powi(2)).exp();
            bumps[t] += gain * (-0.5 * (d / p_sd).powi(2)).exp();
        }
        for t in c.saturating_sub(vh)..(c + vh + 1).min(n) {
            vad[t] = 1;
        }
    }
    for e in energy.iter_mut() {
        *e = (*e + energy_noise.sample(&mut rng)).max(0.0);
    }
    let mut raw = vec![0.0f64; n];
    for t in 0..n {
        let pos = t as f64 / n as f64;
        let shape = spec.declination * (0.5 - pos) + spec.wiggle * bumps[t];
        let st = spec.pitch_offset + p.speaker_offset + spec.range * shape + pitch_noise.sample(&mut rng);
        if vad[t] == 1 {
            raw[t] = cfg.base_hz * (st / 12.0).exp2();
        }
    }
    let voiced: Vec<bool> = vad.iter().map(|v| *v == 1).collect();
    let pitch = if voiced.iter().any(|v| *v) { normalize_track(&raw, &voiced)? } else { vec![0.0; n] };
    let energy_norm = normalize_track(&energy, &vec![true; n])?;
    ProsodyTrack::new(
        pitch.iter().map(|v| *v as f32).collect(),
        energy_norm.iter().map(|v| *v as f32).collect(),
        vad,
        raw.iter().map(|v| *v as f32).collect(),
        cfg.hop_seconds,
    )
}

pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params: Vec<UtteranceParams> = (0..cfg.num_utterances).map(|i| sample_params(cfg, i, &mut rng)).collect();
    let tracks = crate::par::map_slice(&params, |p| render_track(p, cfg)).into_iter().collect::<Result<Vec<_>>>()?;
    let labels = params.iter().map(labels_from_params).collect();
    Ok(SyntheticCorpus { params, tracks, labels })
}
