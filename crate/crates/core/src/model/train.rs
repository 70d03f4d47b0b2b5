use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{masked_accuracy, mpm_loss, mpm_loss_graph, LossValues, MpmModel};
use crate::codec::TokenTrack;
use crate::error::{Error, Result};
use crate::mask::{apply_mask, sample_mask_plan, MaskConfig, MaskedExample};
use crate::nn::{AdamW, AdamWConfig, Graph, LinearSchedule};

const MIN_CROP: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Frames per training window; shorter utterances shrink the batch window.
    pub crop_frames: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Abort when the loss exceeds `divergence_factor` times the first
    /// loss for `divergence_patience` consecutive steps.
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            crop_frames: 600,
            peak_lr: 1e-4,
            warmup_steps: 200,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
            seed: 0,
            divergence_factor: 10.0,
            divergence_patience: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.warmup_steps >= self.steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.crop_frames < MIN_CROP {
            return Err(Error::Config(format!("crop_frames must be >= {MIN_CROP}")));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LinearSchedule {
        LinearSchedule {
            peak: self.peak_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Total normalized loss per step.
    pub losses: Vec<f64>,
    /// Span length used for each step's batch.
    pub mask_sizes: Vec<usize>,
}

impl TrainLog {
    /// Mean loss over steps `[from, to)`.
    pub fn mean_loss(&self, from: usize, to: usize) -> f64 {
        let s = &self.losses[from.min(self.losses.len())..to.min(self.losses.len())];
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// A batch of equal-length masked windows, flattened row-wise.
pub struct Batch {
    pub examples: Vec<MaskedExample>,
    pub m: usize,
}

impl Batch {
    fn flat(&self, f: impl Fn(&TokenTrack) -> [&[usize]; 3]) -> [Vec<usize>; 3] {
        [0, 1, 2].map(|s| self.examples.iter().flat_map(|e| f(&e.targets)[s].iter().copied()).collect())
    }

    pub fn targets(&self) -> [Vec<usize>; 3] {
        self.flat(|t| t.streams())
    }

    pub fn mask(&self) -> Vec<bool> {
        self.examples.iter().flat_map(|e| e.mask.iter().copied()).collect()
    }
}

/// Draw one training batch: random utterances, random windows of a shared
/// length, one span length for the whole batch.
pub fn sample_batch<R: Rng>(
    corpus: &[TokenTrack],
    batch_size: usize,
    crop_frames: usize,
    mask: &MaskConfig,
    mask_tokens: [usize; 3],
    rng: &mut R,
) -> Result<Batch> {
    let picks: Vec<&TokenTrack> = (0..batch_size).map(|_| &corpus[rng.gen_range(0..corpus.len())]).collect();
    let len = picks.iter().map(|t| t.num_frames()).min().unwrap_or(0).min(crop_frames);
    if len < MIN_CROP {
        return Err(Error::Config(format!("utterances must have at least {MIN_CROP} frames")));
    }
    let m = mask.draw_m(rng);
    let examples = picks
        .into_iter()
        .map(|t| {
            let start = rng.gen_range(0..=t.num_frames() - len);
            let window = t.window(start, len);
            let plan = sample_mask_plan(len, m, rng)?;
            apply_mask(&window, &plan, mask_tokens)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch { examples, m })
}

/// One forward/backward pass; returns the loss and the gradients.
fn step_grads(model: &MpmModel<f32>, batch: &Batch) -> Result<(f64, crate::nn::Gradients<f32>)> {
    let mut g = Graph::new();
    let inputs: Vec<&TokenTrack> = batch.examples.iter().map(|e| &e.corrupted).collect();
    let vars = model.forward_graph(&mut g, &inputs)?;
    let targets = batch.targets();
    let mask = batch.mask();
    let (loss, _) = mpm_loss_graph(
        &mut g,
        vars.logits,
        [&targets[0], &targets[1], &targets[2]],
        &mask,
        model.config().codebook_sizes,
    )?;
    let value = g.scalar(loss) as f64;
    let grads = g.backward(loss);
    let grads = g.param_grads(&grads, model.params())?;
    Ok((value, grads))
}

/// Train in place with masked reconstruction.
pub fn train_mpm(model: &mut MpmModel<f32>, corpus: &[TokenTrack], mask: &MaskConfig, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    mask.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let corpus: Vec<TokenTrack> = corpus
        .iter()
        .filter(|t| t.num_frames() >= MIN_CROP)
        .map(|t| {
            let n = t.num_frames().min(model.config().max_seq_frames);
            t.window(0, n)
        })
        .collect();
    if corpus.is_empty() {
        return Err(Error::Config(format!("no utterance has at least {MIN_CROP} frames")));
    }
    let crop = cfg.crop_frames.min(model.config().max_seq_frames);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
            ..AdamWConfig::default()
        },
        model.params(),
    );
    let schedule = cfg.schedule();
    let mut log = TrainLog::default();
    let mut initial = None;
    let mut above = 0usize;
    for step in 0..cfg.steps {
        let batch = sample_batch(&corpus, cfg.batch_size, crop, mask, model.mask_tokens(), &mut rng)?;
        let (loss, mut grads) = step_grads(model, &batch)?;
        let first = *initial.get_or_insert(loss);
        if !loss.is_finite() || loss > cfg.divergence_factor * first {
            above += 1;
            if above >= cfg.divergence_patience || !loss.is_finite() {
                return Err(Error::Diverged { step, loss, initial: first });
            }
        } else {
            above = 0;
        }
        opt.update(model.params_mut(), &mut grads, schedule.lr(step));
        log.losses.push(loss);
        log.mask_sizes.push(batch.m);
        if step % 100 == 0 {
            log::debug!("step {step} m {} loss {loss:.4}", batch.m);
        }
    }
    Ok(log)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskedEval {
    pub loss: LossValues,
    pub accuracy: [f64; 3],
}

/// Masked loss and accuracy over `batches` deterministic batches drawn
/// from `corpus` with the given seed; gradients are not computed.
pub fn evaluate_masked(
    model: &MpmModel<f32>,
    corpus: &[TokenTrack],
    mask: &MaskConfig,
    batch_size: usize,
    crop_frames: usize,
    batches: usize,
    seed: u64,
) -> Result<MaskedEval> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = model.config().codebook_sizes;
    let mut logits: [Vec<f32>; 3] = Default::default();
    let mut targets: [Vec<usize>; 3] = Default::default();
    let mut mask_all = Vec::new();
    for _ in 0..batches {
        let batch = sample_batch(corpus, batch_size, crop_frames.min(model.config().max_seq_frames), mask, model.mask_tokens(), &mut rng)?;
        let mut g = Graph::<f32>::new();
        let inputs: Vec<&TokenTrack> = batch.examples.iter().map(|e| &e.corrupted).collect();
        let vars = model.forward_graph(&mut g, &inputs)?;
        let t = batch.targets();
        for s in 0..3 {
            logits[s].extend_from_slice(g.value(vars.logits[s]));
            targets[s].extend_from_slice(&t[s]);
        }
        mask_all.extend(batch.mask());
    }
    let l = [&logits[0][..], &logits[1][..], &logits[2][..]];
    let t = [&targets[0][..], &targets[1][..], &targets[2][..]];
    Ok(MaskedEval {
        loss: mpm_loss(l, t, &mask_all, sizes)?,
        accuracy: masked_accuracy(l, t, &mask_all, sizes)?,
    })
}
