//! Linear and Conformer probes over frozen per-frame representations.

mod grid;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use grid::{
    run_probe_grid, CellStatus, EvalReport, EvalRow, GridConfig, MetricSummary, Representation, REPORT_COLUMNS, REPORT_METRICS,
};

use crate::error::{Error, Result};
use crate::model::{aggregate_spans, dense, norm, sinusoidal_positions, BlockDims, ConformerBlock, Dense, Norm};
use crate::nn::{AdamW, AdamWConfig, Graph, LinearSchedule, ParamId, ParamStore, Var};
use crate::tasks::{Granularity, TaskLabels};

/// Row-major `frames x dim` features of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMatrix {
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FrameMatrix {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * dim || dim == 0 {
            return Err(Error::Alignment(format!("{} values for {frames} x {dim} features", data.len())));
        }
        Ok(FrameMatrix { frames, dim, data })
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn window(&self, start: usize, len: usize) -> &[f32] {
        &self.data[start * self.dim..(start + len) * self.dim]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Linear,
    Conformer,
}

impl ProbeKind {
    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Linear => "linear",
            ProbeKind::Conformer => "conformer",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ProbeKind::Linear),
            "conformer" => Ok(ProbeKind::Conformer),
            _ => Err(Error::Config(format!("unknown probe `{s}`"))),
        }
    }
}

/// Conformer probe shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConformerProbeSpec {
    pub model_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub feedforward_dim: usize,
    pub conv_kernel_size: usize,
}

impl Default for ConformerProbeSpec {
    fn default() -> Self {
        ConformerProbeSpec { model_dim: 96, num_blocks: 2, num_heads: 4, feedforward_dim: 384, conv_kernel_size: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Window length for Conformer probe batches.
    pub crop_frames: usize,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        ProbeTrainConfig { steps: 1000, batch_size: 32, peak_lr: 4e-5, warmup_steps: 100, weight_decay: 0.01, crop_frames: 200 }
    }
}

impl ProbeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.warmup_steps >= self.steps || self.batch_size == 0 || self.crop_frames == 0 {
            return Err(Error::Config("probe training needs steps > warmup_steps, and positive batch and crop".into()));
        }
        Ok(())
    }
}

/// One labelled utterance as seen by a probe.
#[derive(Clone, Copy, Debug)]
pub struct ProbeExample<'a> {
    pub features: &'a FrameMatrix,
    pub labels: &'a TaskLabels,
}

fn granularity_of(labels: &TaskLabels) -> Granularity {
    match labels {
        TaskLabels::Frames(_) => Granularity::Frame,
        TaskLabels::Spans { .. } => Granularity::Span,
        TaskLabels::Utterance(_) => Granularity::Utterance,
    }
}

/// Feature vectors a linear probe sees for one utterance: frames as-is,
/// spans and whole utterances as concat(mean, max).
pub fn unit_vectors(features: &FrameMatrix, labels: &TaskLabels) -> Result<Vec<Vec<f32>>> {
    match labels {
        TaskLabels::Frames(l) => {
            if l.len() != features.frames {
                return Err(Error::Alignment(format!("{} frame labels for {} frames", l.len(), features.frames)));
            }
            Ok((0..features.frames).map(|t| features.row(t).to_vec()).collect())
        }
        TaskLabels::Spans { spans, .. } => aggregate_spans(&features.data, features.dim, spans),
        TaskLabels::Utterance(_) => aggregate_spans(&features.data, features.dim, &[(0, features.frames)]),
    }
}

fn unit_labels(labels: &TaskLabels) -> Vec<usize> {
    match labels {
        TaskLabels::Frames(l) => l.clone(),
        TaskLabels::Spans { labels, .. } => labels.clone(),
        TaskLabels::Utterance(c) => vec![*c],
    }
}

fn check_classes(examples: &[ProbeExample], num_classes: usize) -> Result<Granularity> {
    let first = examples.first().ok_or(Error::DegenerateLabels)?;
    let gran = granularity_of(first.labels);
    let dim = first.features.dim;
    let mut seen = vec![false; num_classes];
    for ex in examples {
        if granularity_of(ex.labels) != gran || ex.features.dim != dim {
            return Err(Error::Config("probe examples mix granularities or feature widths".into()));
        }
        for l in unit_labels(ex.labels) {
            *seen.get_mut(l).ok_or_else(|| Error::Config(format!("label {l} outside {num_classes} classes")))? = true;
        }
    }
    if seen.iter().filter(|s| **s).count() < 2 {
        return Err(Error::DegenerateLabels);
    }
    Ok(gran)
}

fn optimiser(cfg: &ProbeTrainConfig, store: &ParamStore<f32>) -> (AdamW<f32>, LinearSchedule) {
    let opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() }, store);
    let sched = LinearSchedule { peak: cfg.peak_lr, warmup_steps: cfg.warmup_steps, total_steps: cfg.steps };
    (opt, sched)
}

fn softmax_rows(logits: &[f32], k: usize) -> Vec<Vec<f32>> {
    logits
        .chunks(k)
        .map(|row| {
            let m = row.iter().fold(f32::NEG_INFINITY, |a, b| a.max(*b));
            let e: Vec<f64> = row.iter().map(|v| ((*v - m) as f64).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| (v / s) as f32).collect()
        })
        .collect()
}

pub fn argmax(p: &[f32]) -> usize {
    p.iter().enumerate().fold((0, f32::NEG_INFINITY), |b, (i, v)| if *v > b.1 { (i, *v) } else { b }).0
}

// ---------------------------------------------------------------- linear

#[derive(Clone, Debug)]
pub struct LinearProbe {
    store: ParamStore<f32>,
    w: ParamId,
    b: ParamId,
    num_classes: usize,
}

impl LinearProbe {
    pub fn train(examples: &[ProbeExample], num_classes: usize, cfg: &ProbeTrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        check_classes(examples, num_classes)?;
        let mut xs: Vec<f32> = Vec::new();
        let mut ys: Vec<usize> = Vec::new();
        for ex in examples {
            for v in unit_vectors(ex.features, ex.labels)? {
                xs.extend(v);
            }
            ys.extend(unit_labels(ex.labels));
        }
        let din = xs.len() / ys.len();
        let mut store = ParamStore::new();
        let w = store.zeros("probe.weight", vec![din, num_classes]);
        let b = store.zeros("probe.bias", vec![1, num_classes]);
        let (mut opt, sched) = optimiser(cfg, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bs = cfg.batch_size;
        let inv = 1.0 / bs as f32;
        for step in 0..cfg.steps {
            let idx: Vec<usize> = (0..bs).map(|_| rng.gen_range(0..ys.len())).collect();
            let mut xb = Vec::with_capacity(bs * din);
            for &i in &idx {
                xb.extend_from_slice(&xs[i * din..(i + 1) * din]);
            }
            let yb: Vec<usize> = idx.iter().map(|i| ys[*i]).collect();
            let mut g = Graph::new();
            let x = g.input(xb, bs, din);
            let (wv, bv) = (g.param(&store, w), g.param(&store, b));
            let logits = g.linear(x, wv, Some(bv));
            let loss = g.cross_entropy(logits, &yb, &vec![inv; bs]);
            let mut grads = g.param_grads(&g.backward(loss), &store)?;
            opt.update(&mut store, &mut grads, sched.lr(step));
        }
        Ok(LinearProbe { store, w, b, num_classes })
    }

    /// Raw class scores for a batch of feature vectors.
    pub fn logits(&self, rows: &[Vec<f32>]) -> Vec<f32> {
        let din = self.store.get(self.w).shape[0];
        let mut g = Graph::<f32>::new();
        let x = g.input(rows.concat(), rows.len(), din);
        let (wv, bv) = (g.param(&self.store, self.w), g.param(&self.store, self.b));
        let out = g.linear(x, wv, Some(bv));
        g.value(out).to_vec()
    }

    pub fn predict(&self, features: &FrameMatrix, labels: &TaskLabels) -> Result<Vec<Vec<f32>>> {
        let rows = unit_vectors(features, labels)?;
        Ok(softmax_rows(&self.logits(&rows), self.num_classes))
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }
}

// ---------------------------------------------------------------- conformer

#[derive(Clone, Debug)]
pub struct ConformerProbe {
    store: ParamStore<f32>,
    input: Dense,
    blocks: Vec<ConformerBlock>,
    out_norm: Norm,
    head: Dense,
    dim: usize,
    num_classes: usize,
    granularity: Granularity,
}

struct CropBatch {
    rows: Vec<f32>,
    batch: usize,
    seq: usize,
    /// Units in the flattened batch: frame indices, spans or per-example groups.
    units: Vec<(usize, usize)>,
    labels: Vec<usize>,
}

impl ConformerProbe {
    fn build(din: usize, num_classes: usize, granularity: Granularity, spec: &ConformerProbeSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = spec.model_dim;
        let input = dense(&mut store, "probe.input", din, d, &mut rng);
        let dims = BlockDims { model_dim: d, num_heads: spec.num_heads, ff_dim: spec.feedforward_dim, kernel: spec.conv_kernel_size };
        let blocks = (0..spec.num_blocks)
            .map(|i| ConformerBlock::new(&mut store, &format!("probe.blocks.{i}"), dims, &mut rng))
            .collect();
        let out_norm = norm(&mut store, "probe.out_norm", d);
        let head_in = if granularity == Granularity::Span { 2 * d } else { d };
        let head = dense(&mut store, "probe.head", head_in, num_classes, &mut rng);
        ConformerProbe { store, input, blocks, out_norm, head, dim: d, num_classes, granularity }
    }

    fn forward(&self, g: &mut Graph<f32>, rows: Vec<f32>, batch: usize, seq: usize, units: &[(usize, usize)]) -> Var {
        let din = rows.len() / (batch * seq);
        let x = g.input(rows, batch * seq, din);
        let h = self.input.apply(g, &self.store, x);
        let pos = g.input(sinusoidal_positions(seq, self.dim).into_iter().map(|v| v as f32).collect(), seq, self.dim);
        let mut h = g.add_repeat(h, pos);
        for b in &self.blocks {
            h = b.forward(g, &self.store, h, batch, seq);
        }
        let h = self.out_norm.apply(g, &self.store, h);
        let pooled = match self.granularity {
            Granularity::Frame => h,
            Granularity::Span => g.span_mean_max(h, units),
            Granularity::Utterance => g.mean_pool(h, units),
        };
        self.head.apply(g, &self.store, pooled)
    }

    fn sample_batch(examples: &[ProbeExample], gran: Granularity, cfg: &ProbeTrainConfig, rng: &mut ChaCha8Rng) -> Option<CropBatch> {
        let picks: Vec<&ProbeExample> = (0..cfg.batch_size).map(|_| &examples[rng.gen_range(0..examples.len())]).collect();
        let seq = picks.iter().map(|e| e.features.frames).min()?.min(cfg.crop_frames);
        let mut out = CropBatch { rows: Vec::new(), batch: picks.len(), seq, units: Vec::new(), labels: Vec::new() };
        for (b, ex) in picks.iter().enumerate() {
            let start = rng.gen_range(0..=ex.features.frames - seq);
            out.rows.extend_from_slice(ex.features.window(start, seq));
            let base = b * seq;
            match (gran, ex.labels) {
                (Granularity::Frame, TaskLabels::Frames(l)) => out.labels.extend_from_slice(&l[start..start + seq]),
                (Granularity::Span, TaskLabels::Spans { spans, labels }) => {
                    for (&(s, e), &l) in spans.iter().zip(labels) {
                        if s >= start && e <= start + seq {
                            out.units.push((base + s - start, base + e - start));
                            out.labels.push(l);
                        }
                    }
                }
                (Granularity::Utterance, TaskLabels::Utterance(c)) => {
                    out.units.push((base, base + seq));
                    out.labels.push(*c);
                }
                _ => return None,
            }
        }
        (!out.labels.is_empty()).then_some(out)
    }

    pub fn train(examples: &[ProbeExample], num_classes: usize, spec: &ConformerProbeSpec, cfg: &ProbeTrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let gran = check_classes(examples, num_classes)?;
        let din = examples[0].features.dim;
        let mut probe = Self::build(din, num_classes, gran, spec, seed);
        let (mut opt, sched) = optimiser(cfg, &probe.store);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0_4F);
        for step in 0..cfg.steps {
            let batch = (0..100)
                .find_map(|_| Self::sample_batch(examples, gran, cfg, &mut rng))
                .ok_or_else(|| Error::Config("no probe batch with labelled units; spans may exceed crop_frames".into()))?;
            let mut g = Graph::new();
            let logits = probe.forward(&mut g, batch.rows, batch.batch, batch.seq, &batch.units);
            let inv = 1.0 / batch.labels.len() as f32;
            let loss = g.cross_entropy(logits, &batch.labels, &vec![inv; batch.labels.len()]);
            let mut grads = g.param_grads(&g.backward(loss), &probe.store)?;
            opt.update(&mut probe.store, &mut grads, sched.lr(step));
        }
        Ok(probe)
    }

    pub fn predict(&self, features: &FrameMatrix, labels: &TaskLabels) -> Result<Vec<Vec<f32>>> {
        let n = features.frames;
        let units = match labels {
            TaskLabels::Frames(_) => Vec::new(),
            TaskLabels::Spans { spans, .. } => {
                if let Some(&(s, e)) = spans.iter().find(|(s, e)| s >= e || *e > n) {
                    return Err(Error::InvalidSpan { start: s, end: e, len: n });
                }
                spans.clone()
            }
            TaskLabels::Utterance(_) => vec![(0, n)],
        };
        let mut g = Graph::new();
        let logits = self.forward(&mut g, features.data.clone(), 1, n, &units);
        Ok(softmax_rows(g.value(logits), self.num_classes))
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }
}

/// A trained probe of either kind.
#[derive(Clone, Debug)]
pub enum ProbeModel {
    Linear(LinearProbe),
    Conformer(Box<ConformerProbe>),
}

pub fn train_probe(
    kind: ProbeKind,
    examples: &[ProbeExample],
    num_classes: usize,
    spec: &ConformerProbeSpec,
    cfg: &ProbeTrainConfig,
    seed: u64,
) -> Result<ProbeModel> {
    Ok(match kind {
        ProbeKind::Linear => ProbeModel::Linear(LinearProbe::train(examples, num_classes, cfg, seed)?),
        ProbeKind::Conformer => ProbeModel::Conformer(Box::new(ConformerProbe::train(examples, num_classes, spec, cfg, seed)?)),
    })
}

impl ProbeModel {
    /// Class probabilities per unit (frame, span or utterance).
    pub fn predict(&self, features: &FrameMatrix, labels: &TaskLabels) -> Result<Vec<Vec<f32>>> {
        match self {
            ProbeModel::Linear(p) => p.predict(features, labels),
            ProbeModel::Conformer(p) => p.predict(features, labels),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable(n: usize, seed: u64) -> (Vec<FrameMatrix>, Vec<TaskLabels>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let c = i % 2;
                let centre = if c == 0 { -1.0 } else { 1.0 };
                let data = (0..20 * 2).map(|_| centre + rng.gen_range(-0.5f32..0.5)).collect();
                (FrameMatrix::new(20, 2, data).unwrap(), TaskLabels::Utterance(c))
            })
            .unzip()
    }

    fn examples<'a>(f: &'a [FrameMatrix], l: &'a [TaskLabels]) -> Vec<ProbeExample<'a>> {
        f.iter().zip(l).map(|(features, labels)| ProbeExample { features, labels }).collect()
    }

    fn accuracy(p: &ProbeModel, f: &[FrameMatrix], l: &[TaskLabels]) -> f64 {
        let mut hit = 0;
        for (x, y) in f.iter().zip(l) {
            let probs = p.predict(x, y).unwrap();
            if let TaskLabels::Utterance(c) = y {
                hit += (argmax(&probs[0]) == *c) as usize;
            }
        }
        hit as f64 / f.len() as f64
    }

    #[test]
    fn linear_probe_separates_classes() {
        let (f, l) = separable(60, 1);
        let cfg = ProbeTrainConfig::default();
        let p = train_probe(ProbeKind::Linear, &examples(&f, &l), 2, &ConformerProbeSpec::default(), &cfg, 3).unwrap();
        assert!(accuracy(&p, &f, &l) >= 0.99);
        let probs = p.predict(&f[0], &l[0]).unwrap();
        assert!((probs[0].iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn duplicated_columns_keep_decisions() {
        let (f, l) = separable(40, 2);
        let dup: Vec<FrameMatrix> = f
            .iter()
            .map(|m| FrameMatrix::new(m.frames, 4, (0..m.frames).flat_map(|t| [m.row(t), m.row(t)].concat()).collect()).unwrap())
            .collect();
        let cfg = ProbeTrainConfig { steps: 200, warmup_steps: 20, ..ProbeTrainConfig::default() };
        let spec = ConformerProbeSpec::default();
        let a = train_probe(ProbeKind::Linear, &examples(&f, &l), 2, &spec, &cfg, 5).unwrap();
        let b = train_probe(ProbeKind::Linear, &examples(&dup, &l), 2, &spec, &cfg, 5).unwrap();
        for ((x, xd), y) in f.iter().zip(&dup).zip(&l) {
            assert_eq!(argmax(&a.predict(x, y).unwrap()[0]), argmax(&b.predict(xd, y).unwrap()[0]));
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let (f, _) = separable(4, 0);
        let l = vec![TaskLabels::Utterance(1); 4];
        let r = train_probe(ProbeKind::Linear, &examples(&f, &l), 2, &ConformerProbeSpec::default(), &ProbeTrainConfig::default(), 0);
        assert!(matches!(r, Err(Error::DegenerateLabels)));
    }

    #[test]
    fn conformer_probe_learns_each_granularity() {
        let spec = ConformerProbeSpec { model_dim: 16, num_blocks: 1, num_heads: 2, feedforward_dim: 32, conv_kernel_size: 3 };
        let cfg = ProbeTrainConfig { steps: 150, batch_size: 8, peak_lr: 3e-3, warmup_steps: 10, crop_frames: 16, ..ProbeTrainConfig::default() };
        let (f, l) = separable(30, 4);
        let p = train_probe(ProbeKind::Conformer, &examples(&f, &l), 2, &spec, &cfg, 1).unwrap();
        assert!(accuracy(&p, &f, &l) >= 0.9);

        // frame labels follow the sign of the first column
        let frame_labels: Vec<TaskLabels> = f.iter().map(|m| TaskLabels::Frames((0..m.frames).map(|t| (m.row(t)[0] > 0.0) as usize).collect())).collect();
        let p = train_probe(ProbeKind::Conformer, &examples(&f, &frame_labels), 2, &spec, &cfg, 1).unwrap();
        let probs = p.predict(&f[1], &frame_labels[1]).unwrap();
        assert_eq!(probs.len(), 20);

        let spans: Vec<TaskLabels> = f
            .iter()
            .enumerate()
            .map(|(i, _)| TaskLabels::Spans { spans: vec![(0, 5), (6, 12)], labels: vec![i % 2, 1 - i % 2] })
            .collect();
        let p = train_probe(ProbeKind::Conformer, &examples(&f, &spans), 2, &spec, &cfg, 1).unwrap();
        assert_eq!(p.predict(&f[0], &spans[0]).unwrap().len(), 2);
    }

    #[test]
    fn constant_logit_shift_keeps_argmax() {
        let rows = [vec![0.3f32, -1.0, 2.0], vec![5.0, 5.5, -3.0]];
        for r in rows {
            let shifted: Vec<f32> = r.iter().map(|v| v + 17.0).collect();
            assert_eq!(argmax(&softmax_rows(&r, 3)[0]), argmax(&softmax_rows(&shifted, 3)[0]));
        }
    }
}
