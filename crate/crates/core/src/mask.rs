//! Span masking shared across the three token streams.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::TokenTrack;
use crate::error::{Error, Result};

/// Masking band on the fraction of masked frames.
pub const MASK_FRACTION_LOW: f64 = 0.45;
pub const MASK_FRACTION_HIGH: f64 = 0.55;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MaskConfig {
    /// Every span has `m` frames.
    Fixed { m: usize },
    /// `m` drawn uniformly from `[min, max]` once per batch.
    Random { min: usize, max: usize },
}

impl MaskConfig {
    pub fn random() -> Self {
        MaskConfig::Random { min: 1, max: 128 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            MaskConfig::Fixed { m } if m >= 1 => Ok(()),
            MaskConfig::Random { min, max } if min >= 1 && min <= max => Ok(()),
            other => Err(Error::Config(format!("invalid mask config {other:?}"))),
        }
    }

    /// Span length for the next batch.
    pub fn draw_m<R: Rng>(&self, rng: &mut R) -> usize {
        match *self {
            MaskConfig::Fixed { m } => m,
            MaskConfig::Random { min, max } => rng.gen_range(min..=max),
        }
    }

    /// Short label: `4`, `16`, `random`.
    pub fn label(&self) -> String {
        match *self {
            MaskConfig::Fixed { m } => m.to_string(),
            MaskConfig::Random { .. } => "random".to_string(),
        }
    }

    /// Parse `"16"` or `"random"`.
    pub fn parse(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("random") {
            return Ok(MaskConfig::random());
        }
        let m: usize = s
            .parse()
            .map_err(|_| Error::Config(format!("strategy `{s}` is neither an integer nor `random`")))?;
        let cfg = MaskConfig::Fixed { m };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    /// Sampled spans `(start, length)`, possibly overlapping.
    pub spans: Vec<(usize, usize)>,
    pub seq_len: usize,
    pub masked_fraction: f64,
}

impl MaskPlan {
    pub fn empty(seq_len: usize) -> Self {
        MaskPlan { spans: Vec::new(), seq_len, masked_fraction: 0.0 }
    }

    /// Union of all spans as a per-frame indicator.
    pub fn indicator(&self) -> Vec<bool> {
        let mut out = vec![false; self.seq_len];
        for &(s, l) in &self.spans {
            out[s..(s + l).min(self.seq_len)].iter_mut().for_each(|v| *v = true);
        }
        out
    }
}

/// Draw span starts until at least half the frames are covered, never
/// exceeding the upper band edge.
///
/// Span length is `min(m, ceil(seq_len / 2))`; starts are uniform over the
/// positions where a full span fits. If a span would push coverage past
/// `floor(0.55 * seq_len)` it is cut short at that count.
pub fn sample_mask_plan<R: Rng>(seq_len: usize, m: usize, rng: &mut R) -> Result<MaskPlan> {
    if seq_len < 8 {
        return Err(Error::Config(format!("sequence of {seq_len} frames is too short to mask")));
    }
    if m == 0 {
        return Err(Error::Config("span length must be >= 1".into()));
    }
    let span = m.min(seq_len.div_ceil(2));
    let target = (seq_len + 1) / 2;
    // nine frames admit no count inside the band, so they stop at five
    let high = ((seq_len as f64 * MASK_FRACTION_HIGH + 1e-9).floor() as usize).max(target);
    let mut covered = vec![false; seq_len];
    let mut count = 0usize;
    let mut spans = Vec::new();
    while count < target {
        let start = rng.gen_range(0..=seq_len - span);
        let mut end = start;
        while end < start + span && count < high {
            if !covered[end] {
                covered[end] = true;
                count += 1;
            }
            end += 1;
        }
        spans.push((start, end - start));
    }
    Ok(MaskPlan {
        spans,
        seq_len,
        masked_fraction: count as f64 / seq_len as f64,
    })
}

/// Masked copy of `track`, the clean targets and the mask indicator.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedExample {
    pub corrupted: TokenTrack,
    pub targets: TokenTrack,
    pub mask: Vec<bool>,
}

/// Apply one plan to all three streams. `mask_tokens` are the per-stream
/// reserved ids.
pub fn apply_mask(track: &TokenTrack, plan: &MaskPlan, mask_tokens: [usize; 3]) -> Result<MaskedExample> {
    if plan.seq_len != track.num_frames() {
        return Err(Error::Alignment(format!(
            "plan covers {} frames, track has {}",
            plan.seq_len,
            track.num_frames()
        )));
    }
    let mask = plan.indicator();
    let corrupt = |s: &[usize], tok: usize| -> Vec<usize> {
        s.iter().zip(&mask).map(|(v, m)| if *m { tok } else { *v }).collect()
    };
    Ok(MaskedExample {
        corrupted: TokenTrack {
            pitch: corrupt(&track.pitch, mask_tokens[0]),
            energy: corrupt(&track.energy, mask_tokens[1]),
            vad: corrupt(&track.vad, mask_tokens[2]),
        },
        targets: track.clone(),
        mask,
    })
}
