//! The masked prosody model: three token embeddings summed with a sinusoidal
//! position table, a Conformer stack, and one classification head per stream.

mod conformer;
mod loss;
mod checkpoint;
mod gradcheck;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use conformer::{sinusoidal_positions, BlockDims, ConformerBlock};
pub(crate) use conformer::{dense, norm, Dense, Norm};
pub use loss::{masked_accuracy, mpm_loss, mpm_loss_graph, LossValues};
pub use checkpoint::{MpmCheckpoint, TrainingMetadata, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, tiny_config, GradCheckReport, RELATIVE_FLOOR};
pub use train::{evaluate_masked, sample_batch, train_mpm, Batch, MaskedEval, TrainConfig, TrainLog};

use crate::codec::TokenTrack;
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamId, ParamStore, Scalar, Var};

pub const STREAMS: [&str; 3] = ["pitch", "energy", "vad"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpmConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub conv_kernel_size: usize,
    pub feedforward_dim: usize,
    /// Codebook sizes for pitch, energy and VAD.
    pub codebook_sizes: [usize; 3],
    pub max_seq_frames: usize,
    /// 1-based layer whose output is used as the representation.
    pub extraction_layer: usize,
}

impl Default for MpmConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl MpmConfig {
    /// `ceil(2 * num_layers / 3)`.
    pub fn default_extraction_layer(num_layers: usize) -> usize {
        (2 * num_layers).div_ceil(3)
    }

    /// Four layers, width 128, four heads, kernel 7.
    pub fn desk() -> Self {
        MpmConfig {
            num_layers: 4,
            model_dim: 128,
            num_heads: 4,
            conv_kernel_size: 7,
            feedforward_dim: 512,
            codebook_sizes: [128; 3],
            max_seq_frames: 600,
            extraction_layer: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::Config("model_dim must be even".into()));
        }
        if self.conv_kernel_size % 2 == 0 {
            return Err(Error::Config("conv_kernel_size must be odd".into()));
        }
        if self.codebook_sizes.iter().any(|c| *c < 2) {
            return Err(Error::Config("codebook sizes must be >= 2".into()));
        }
        // zero layers is only meaningful for gradient verification; the
        // representation is then the embedding sum
        let valid_layer = if self.num_layers == 0 {
            self.extraction_layer == 0
        } else {
            (1..=self.num_layers).contains(&self.extraction_layer)
        };
        if !valid_layer {
            return Err(Error::LayerOutOfRange {
                layer: self.extraction_layer,
                num_layers: self.num_layers,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Head {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
pub struct MpmModel<F: Scalar> {
    cfg: MpmConfig,
    store: ParamStore<F>,
    embeddings: [ParamId; 3],
    blocks: Vec<ConformerBlock>,
    heads: [Head; 3],
}

/// Graph handles produced by one forward pass.
pub struct ForwardVars {
    pub logits: [Var; 3],
    /// Output of every block, first to last.
    pub hidden: Vec<Var>,
    pub embedded: Var,
}

/// Plain-value forward output for a single utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<F> {
    /// Per stream, `frames x c` row-major.
    pub logits: [Vec<F>; 3],
    /// Per layer, `frames x model_dim` row-major.
    pub hidden: Vec<Vec<F>>,
}

impl<F: Scalar> MpmModel<F> {
    pub fn new(cfg: MpmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.model_dim;
        let embeddings = [0, 1, 2].map(|s| {
            store.uniform(
                format!("embed.{}", STREAMS[s]),
                vec![cfg.codebook_sizes[s] + 1, d],
                1.0,
                &mut rng,
            )
        });
        let dims = BlockDims {
            model_dim: d,
            num_heads: cfg.num_heads,
            ff_dim: cfg.feedforward_dim,
            kernel: cfg.conv_kernel_size,
        };
        let blocks = (0..cfg.num_layers)
            .map(|i| ConformerBlock::new(&mut store, &format!("layers.{i}"), dims, &mut rng))
            .collect();
        let bound = 1.0 / (d as f64).sqrt();
        let heads = [0, 1, 2].map(|s| Head {
            w: store.uniform(format!("head.{}.weight", STREAMS[s]), vec![d, cfg.codebook_sizes[s]], bound, &mut rng),
            b: store.zeros(format!("head.{}.bias", STREAMS[s]), vec![1, cfg.codebook_sizes[s]]),
        });
        Ok(MpmModel { cfg, store, embeddings, blocks, heads })
    }

    /// Every parameter set to zero.
    pub fn zeroed(cfg: MpmConfig) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        for id in m.store.ids().collect::<Vec<_>>() {
            m.store.get_mut(id).value.iter_mut().for_each(|v| *v = F::zero());
        }
        Ok(m)
    }

    /// Rebuild from stored tensors; every parameter must be present.
    pub fn from_params(cfg: MpmConfig, params: &ParamStore<F>) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        if params.len() != m.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                m.store.len(),
                params.len()
            )));
        }
        for e in params.entries() {
            m.store.set(&e.name, &e.shape, e.value.clone())?;
        }
        Ok(m)
    }

    pub fn config(&self) -> &MpmConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn mask_tokens(&self) -> [usize; 3] {
        self.cfg.codebook_sizes
    }

    /// Build the forward graph for equal-length tracks.
    pub fn forward_graph(&self, g: &mut Graph<F>, batch: &[&TokenTrack]) -> Result<ForwardVars> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        let seq = batch[0].num_frames();
        if seq == 0 {
            return Err(Error::Config("empty sequence".into()));
        }
        if seq > self.cfg.max_seq_frames {
            return Err(Error::SequenceTooLong { got: seq, max: self.cfg.max_seq_frames });
        }
        for t in batch {
            if t.num_frames() != seq {
                return Err(Error::Alignment("batch members differ in length".into()));
            }
            t.validate(self.cfg.codebook_sizes)?;
        }
        let d = self.cfg.model_dim;
        let s = &self.store;
        let mut x: Option<Var> = None;
        for (si, emb) in self.embeddings.iter().enumerate() {
            let ids: Vec<usize> = batch.iter().flat_map(|t| t.streams()[si].iter().copied()).collect();
            let table = g.param(s, *emb);
            let e = g.embedding(table, &ids);
            x = Some(match x {
                None => e,
                Some(prev) => g.add(prev, e),
            });
        }
        let pos = g.input(sinusoidal_positions(seq, d).into_iter().map(F::lit).collect(), seq, d);
        let embedded = g.add_repeat(x.expect("three streams"), pos);
        let mut h = embedded;
        let mut hidden = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            h = block.forward(g, s, h, b, seq);
            hidden.push(h);
        }
        let logits = self.heads.map(|head| {
            let w = g.param(s, head.w);
            let bias = g.param(s, head.b);
            g.linear(h, w, Some(bias))
        });
        Ok(ForwardVars { logits, hidden, embedded })
    }

    /// Forward one utterance and return plain values.
    pub fn forward(&self, track: &TokenTrack) -> Result<ForwardOutput<F>> {
        let mut g = Graph::new();
        let vars = self.forward_graph(&mut g, &[track])?;
        Ok(ForwardOutput {
            logits: vars.logits.map(|v| g.value(v).to_vec()),
            hidden: vars.hidden.iter().map(|v| g.value(*v).to_vec()).collect(),
        })
    }

    /// Hidden state of the 1-based `layer` (default: the configured
    /// extraction layer) for a clean track, `frames x model_dim`.
    pub fn extract_representations(&self, track: &TokenTrack, layer: Option<usize>) -> Result<Vec<F>> {
        let layer = layer.unwrap_or(self.cfg.extraction_layer);
        if layer > self.cfg.num_layers || (layer == 0 && self.cfg.num_layers > 0) {
            return Err(Error::LayerOutOfRange { layer, num_layers: self.cfg.num_layers });
        }
        let mut g = Graph::new();
        let vars = self.forward_graph(&mut g, &[track])?;
        let v = if layer == 0 { vars.embedded } else { vars.hidden[layer - 1] };
        Ok(g.value(v).to_vec())
    }
}

/// Per span `[start, end)`, concat(mean, elementwise max) of `dim`-wide frames.
pub fn aggregate_spans(frames: &[f32], dim: usize, spans: &[(usize, usize)]) -> Result<Vec<Vec<f32>>> {
    assert!(dim > 0 && frames.len() % dim == 0, "frame buffer is not a multiple of dim");
    let n = frames.len() / dim;
    spans
        .iter()
        .map(|&(start, end)| {
            if start >= end || end > n {
                return Err(Error::InvalidSpan { start, end, len: n });
            }
            let mut mean = vec![0.0f64; dim];
            let mut max = vec![f32::NEG_INFINITY; dim];
            for row in frames[start * dim..end * dim].chunks(dim) {
                for j in 0..dim {
                    mean[j] += row[j] as f64;
                    max[j] = max[j].max(row[j]);
                }
            }
            let len = (end - start) as f64;
            let mut out: Vec<f32> = mean.iter().map(|m| (m / len) as f32).collect();
            out.extend(max);
            Ok(out)
        })
        .collect()
}
