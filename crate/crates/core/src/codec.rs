//! Uniform codebooks and the aligned three-stream token track.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::ProsodyTrack;

/// `size` uniform bins on `[lower, upper]`; values outside are clipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    size: usize,
    edges: Vec<f64>,
}

impl Codebook {
    pub fn new(size: usize, lower: f64, upper: f64) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidCodebook(format!("size {size} < 2")));
        }
        if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
            return Err(Error::InvalidCodebook(format!("support [{lower}, {upper}] is empty")));
        }
        let width = (upper - lower) / size as f64;
        let mut edges: Vec<f64> = (0..=size).map(|i| lower + width * i as f64).collect();
        edges[size] = upper;
        Ok(Codebook { size, edges })
    }

    /// Rebuild from stored edges, validating monotonicity.
    pub fn from_edges(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 3 {
            return Err(Error::InvalidCodebook("need at least 3 edges".into()));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidCodebook("edges are not strictly increasing".into()));
        }
        Ok(Codebook { size: edges.len() - 1, edges })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Reserved mask token id.
    pub fn mask_token(&self) -> usize {
        self.size
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn lower(&self) -> f64 {
        self.edges[0]
    }

    pub fn upper(&self) -> f64 {
        self.edges[self.size]
    }

    pub fn bin_width(&self) -> f64 {
        (self.upper() - self.lower()) / self.size as f64
    }

    pub fn quantize_one(&self, v: f64) -> usize {
        if v < self.lower() {
            return 0;
        }
        if v >= self.upper() {
            return self.size - 1;
        }
        // index of the last edge <= v
        let i = self.edges.partition_point(|e| *e <= v);
        (i - 1).min(self.size - 1)
    }

    pub fn quantize(&self, values: &[f64]) -> Vec<usize> {
        values.iter().map(|v| self.quantize_one(*v)).collect()
    }

    pub fn center(&self, token: usize) -> Result<f64> {
        if token >= self.size {
            return Err(Error::InvalidToken { token, size: self.size });
        }
        Ok(0.5 * (self.edges[token] + self.edges[token + 1]))
    }

    pub fn dequantize(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        tokens.iter().map(|t| self.center(*t)).collect()
    }
}

pub fn build_codebook(c: usize, lower_clip: f64, upper_clip: f64) -> Result<Codebook> {
    Codebook::new(c, lower_clip, upper_clip)
}

/// The three codebooks used to tokenise a [`ProsodyTrack`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebooks {
    pub pitch: Codebook,
    pub energy: Codebook,
    pub vad: Codebook,
}

impl Codebooks {
    /// Pitch and energy on `[-3, 3]` normalised units; VAD on `[0, 1]` so
    /// that only the first and last bins are ever occupied.
    pub fn standard(c: usize) -> Result<Self> {
        Self::with_sizes([c; 3])
    }

    /// Same supports as [`Codebooks::standard`] with per-stream sizes.
    pub fn with_sizes(sizes: [usize; 3]) -> Result<Self> {
        Ok(Codebooks {
            pitch: Codebook::new(sizes[0], -3.0, 3.0)?,
            energy: Codebook::new(sizes[1], -3.0, 3.0)?,
            vad: Codebook::new(sizes[2], 0.0, 1.0)?,
        })
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.pitch.size(), self.energy.size(), self.vad.size()]
    }

    pub fn tokenize(&self, track: &ProsodyTrack) -> TokenTrack {
        let q = |cb: &Codebook, v: &mut dyn Iterator<Item = f64>| v.map(|x| cb.quantize_one(x)).collect::<Vec<_>>();
        TokenTrack {
            pitch: q(&self.pitch, &mut track.pitch.iter().map(|v| *v as f64)),
            energy: q(&self.energy, &mut track.energy.iter().map(|v| *v as f64)),
            vad: q(&self.vad, &mut track.vad.iter().map(|v| *v as f64)),
        }
    }
}

/// Aligned per-frame token ids for the three streams. Mask positions carry
/// the stream's reserved id (`codebook size`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTrack {
    pub pitch: Vec<usize>,
    pub energy: Vec<usize>,
    pub vad: Vec<usize>,
}

impl TokenTrack {
    pub fn new(pitch: Vec<usize>, energy: Vec<usize>, vad: Vec<usize>) -> Result<Self> {
        if pitch.len() != energy.len() || pitch.len() != vad.len() {
            return Err(Error::Alignment(format!(
                "token streams differ: {} / {} / {}",
                pitch.len(),
                energy.len(),
                vad.len()
            )));
        }
        Ok(TokenTrack { pitch, energy, vad })
    }

    pub fn num_frames(&self) -> usize {
        self.pitch.len()
    }

    pub fn streams(&self) -> [&[usize]; 3] {
        [&self.pitch, &self.energy, &self.vad]
    }

    pub fn window(&self, start: usize, len: usize) -> TokenTrack {
        TokenTrack {
            pitch: self.pitch[start..start + len].to_vec(),
            energy: self.energy[start..start + len].to_vec(),
            vad: self.vad[start..start + len].to_vec(),
        }
    }

    /// Every token lies in `[0, size]`.
    pub fn validate(&self, sizes: [usize; 3]) -> Result<()> {
        for (s, size) in self.streams().iter().zip(sizes) {
            if let Some(t) = s.iter().find(|t| **t > size) {
                return Err(Error::InvalidToken { token: *t, size });
            }
        }
        Ok(())
    }
}
