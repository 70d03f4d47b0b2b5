use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{argmax, train_probe, ConformerProbeSpec, FrameMatrix, ProbeExample, ProbeKind, ProbeTrainConfig};
use crate::error::{Error, Result};
use crate::par;
use crate::tasks::metrics::{DEFAULT_MIN_GAP, DEFAULT_PEAK_THRESHOLD};
use crate::tasks::{count_syllables_from_frames, f1_binary, kfold_split, pearson_corr, ser, task_labels, weighted_unweighted_accuracy};
use crate::tasks::{LabeledUtterance, Task, TaskLabels};

/// Frozen features of one source, aligned with the labelled utterances.
#[derive(Clone, Debug)]
pub struct Representation {
    pub name: String,
    /// Masking strategy of the encoder, `-` for non-learned features.
    pub strategy: String,
    /// Checkpoint hash or `-`.
    pub source: String,
    pub features: Vec<Option<FrameMatrix>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub folds: usize,
    pub seeds: Vec<u64>,
    pub probes: Vec<ProbeKind>,
    pub conformer: ConformerProbeSpec,
    pub train: ProbeTrainConfig,
    pub peak_threshold: f64,
    pub min_gap: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            folds: 5,
            seeds: vec![0, 1, 2],
            probes: vec![ProbeKind::Linear],
            conformer: ConformerProbeSpec::default(),
            train: ProbeTrainConfig::default(),
            peak_threshold: DEFAULT_PEAK_THRESHOLD,
            min_gap: DEFAULT_MIN_GAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellStatus {
    Ok,
    /// The representation has no features for some utterance of the task.
    Absent,
    Failed(String),
}

pub const REPORT_METRICS: [&str; 5] = ["f1", "ser", "corr", "wa", "ua"];

pub const REPORT_COLUMNS: [&str; 15] = [
    "config_hash", "representation", "strategy", "source", "probe", "task", "seed", "fold", "status", "f1", "ser", "corr", "wa", "ua", "note",
];

/// One (representation, task, probe, seed, fold) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub config_hash: String,
    pub representation: String,
    pub strategy: String,
    pub source: String,
    pub probe: ProbeKind,
    pub task: Task,
    pub seed: u64,
    pub fold: usize,
    pub status: CellStatus,
    /// Values in `REPORT_METRICS` order; `None` when not applicable or undefined.
    pub metrics: [Option<f64>; 5],
}

impl EvalRow {
    pub fn metric(&self, name: &str) -> Option<f64> {
        REPORT_METRICS.iter().position(|m| *m == name).and_then(|i| self.metrics[i])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    pub representation: String,
    pub probe: ProbeKind,
    pub task: Task,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

fn mix(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    h
}

fn task_index(task: Task) -> u64 {
    Task::ALL.iter().position(|t| *t == task).unwrap_or(0) as u64
}

fn clean_note(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

/// Labels and fold assignment shared by every representation, which keeps
/// comparisons paired.
struct TaskSplit {
    labels: Vec<Option<TaskLabels>>,
    num_classes: usize,
    eligible: Vec<usize>,
    folds: Vec<usize>,
}

fn split_for(task: Task, utts: &[LabeledUtterance], folds: usize, seed: u64) -> Result<TaskSplit> {
    let (labels, num_classes) = task_labels(task, utts, seed)?;
    let eligible: Vec<usize> = (0..utts.len()).filter(|i| labels[*i].is_some()).collect();
    let folds = kfold_split(eligible.len(), folds, mix(&[task_index(task), seed]))?;
    Ok(TaskSplit { labels, num_classes, eligible, folds })
}

struct Cell {
    rep: usize,
    task: Task,
    probe: ProbeKind,
    seed: u64,
    fold: usize,
}

fn evaluate_cell(
    cell: &Cell,
    rep: &Representation,
    split: &TaskSplit,
    utts: &[LabeledUtterance],
    cfg: &GridConfig,
) -> Result<[Option<f64>; 5]> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (pos, &u) in split.eligible.iter().enumerate() {
        let features = rep.features[u].as_ref().ok_or_else(|| Error::Config("absent".into()))?;
        if features.frames != utts[u].num_frames {
            return Err(Error::Alignment(format!("`{}`: {} feature frames, {} labelled", utts[u].id, features.frames, utts[u].num_frames)));
        }
        let labels = split.labels[u].as_ref().expect("eligible utterances carry labels");
        let ex = ProbeExample { features, labels };
        if split.folds[pos] == cell.fold {
            test.push((u, ex));
        } else {
            train.push(ex);
        }
    }
    let probe_seed = mix(&[task_index(cell.task), cell.fold as u64, cell.seed]);
    let model = train_probe(cell.probe, &train, split.num_classes, &cfg.conformer, &cfg.train, probe_seed)?;
    let mut out = [None; 5];
    match cell.task {
        Task::Syllable => {
            let (mut pred, mut gold) = (Vec::new(), Vec::new());
            let (mut actual, mut counted) = (Vec::new(), Vec::new());
            for (u, ex) in &test {
                let probs = model.predict(ex.features, ex.labels)?;
                if let TaskLabels::Frames(l) = ex.labels {
                    gold.extend(l.iter().map(|v| *v as u8));
                }
                pred.extend(probs.iter().map(|p| argmax(p) as u8));
                if let Some(c) = utts[*u].syllable_count {
                    let p1: Vec<f64> = probs.iter().map(|p| p[1] as f64).collect();
                    actual.push(c);
                    counted.push(count_syllables_from_frames(&p1, cfg.peak_threshold, cfg.min_gap));
                }
            }
            out[0] = Some(f1_binary(&pred, &gold)?);
            out[1] = ser(&actual, &counted).map_err(|e| log::warn!("SER undefined: {e}")).ok();
            let a: Vec<f64> = actual.iter().map(|v| *v as f64).collect();
            let c: Vec<f64> = counted.iter().map(|v| *v as f64).collect();
            out[2] = pearson_corr(&a, &c).map_err(|e| log::warn!("correlation undefined: {e}")).ok();
        }
        Task::Prominence | Task::Boundary => {
            let (mut pred, mut gold) = (Vec::new(), Vec::new());
            for (_, ex) in &test {
                let probs = model.predict(ex.features, ex.labels)?;
                if let TaskLabels::Spans { labels, .. } = ex.labels {
                    gold.extend(labels.iter().map(|v| *v as u8));
                }
                pred.extend(probs.iter().map(|p| argmax(p) as u8));
            }
            out[0] = Some(f1_binary(&pred, &gold)?);
        }
        Task::Class | Task::PermutedClass => {
            let (mut pred, mut gold) = (Vec::new(), Vec::new());
            for (_, ex) in &test {
                let probs = model.predict(ex.features, ex.labels)?;
                if let TaskLabels::Utterance(c) = ex.labels {
                    gold.push(*c);
                }
                pred.push(argmax(&probs[0]));
            }
            let (wa, ua) = weighted_unweighted_accuracy(&pred, &gold, split.num_classes)?;
            out[3] = Some(wa);
            out[4] = Some(ua);
        }
    }
    Ok(out)
}

/// Trains and scores one probe per (representation, task, probe, seed, fold)
/// cell. Folds and probe seeds depend only on (task, fold, seed), so every
/// representation sees the same splits. Cells never abort the grid: they are
/// reported as failed or absent instead.
pub fn run_probe_grid(
    reps: &[Representation],
    tasks: &[Task],
    utts: &[LabeledUtterance],
    cfg: &GridConfig,
    config_hash: &str,
) -> Result<EvalReport> {
    cfg.train.validate()?;
    if cfg.seeds.is_empty() || cfg.probes.is_empty() {
        return Err(Error::Config("probe grid needs at least one seed and one probe kind".into()));
    }
    for r in reps {
        if r.features.len() != utts.len() {
            return Err(Error::Alignment(format!("representation `{}` covers {} of {} utterances", r.name, r.features.len(), utts.len())));
        }
    }
    let mut splits = BTreeMap::new();
    for &task in tasks {
        for &seed in &cfg.seeds {
            splits.insert((task_index(task), seed), split_for(task, utts, cfg.folds, seed).map_err(|e| e.to_string()));
        }
    }
    let mut cells = Vec::new();
    for rep in 0..reps.len() {
        for &task in tasks {
            for &probe in &cfg.probes {
                for &seed in &cfg.seeds {
                    for fold in 0..cfg.folds {
                        cells.push(Cell { rep, task, probe, seed, fold });
                    }
                }
            }
        }
    }
    let rows = par::map_slice(&cells, |cell| {
        let rep = &reps[cell.rep];
        let split = &splits[&(task_index(cell.task), cell.seed)];
        let (status, metrics) = match split {
            Err(msg) => (CellStatus::Failed(msg.clone()), [None; 5]),
            Ok(split) if split.eligible.iter().any(|u| rep.features[*u].is_none()) => (CellStatus::Absent, [None; 5]),
            Ok(split) => match evaluate_cell(cell, rep, split, utts, cfg) {
                Ok(m) => (CellStatus::Ok, m),
                Err(e) => {
                    log::warn!("probe cell {} / {} / seed {} / fold {} failed: {e}", rep.name, cell.task.name(), cell.seed, cell.fold);
                    (CellStatus::Failed(e.to_string()), [None; 5])
                }
            },
        };
        EvalRow {
            config_hash: config_hash.to_string(),
            representation: rep.name.clone(),
            strategy: rep.strategy.clone(),
            source: rep.source.clone(),
            probe: cell.probe,
            task: cell.task,
            seed: cell.seed,
            fold: cell.fold,
            status,
            metrics,
        }
    });
    Ok(EvalReport { rows })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
}

impl EvalReport {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# {}\n", REPORT_COLUMNS.join("\t"));
        for r in &self.rows {
            let (status, note) = match &r.status {
                CellStatus::Ok => ("ok", String::new()),
                CellStatus::Absent => ("absent", String::new()),
                CellStatus::Failed(m) => ("failed", clean_note(m)),
            };
            let metrics: Vec<String> = r.metrics.iter().map(|m| fmt_opt(*m)).collect();
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.config_hash,
                r.representation,
                r.strategy,
                r.source,
                r.probe.name(),
                r.task.name(),
                r.seed,
                r.fold,
                status,
                metrics.join("\t"),
                note
            );
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: line_no, msg };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != REPORT_COLUMNS.len() {
                return Err(err(format!("expected {} columns, found {}", REPORT_COLUMNS.len(), f.len())));
            }
            let mut metrics = [None; 5];
            for (k, m) in metrics.iter_mut().enumerate() {
                let v = f[9 + k];
                if v != "NA" {
                    *m = Some(v.parse::<f64>().map_err(|e| err(format!("metric `{v}`: {e}")))?);
                }
            }
            let status = match f[8] {
                "ok" => CellStatus::Ok,
                "absent" => CellStatus::Absent,
                "failed" => CellStatus::Failed(f[14].to_string()),
                s => return Err(err(format!("unknown status `{s}`"))),
            };
            rows.push(EvalRow {
                config_hash: f[0].to_string(),
                representation: f[1].to_string(),
                strategy: f[2].to_string(),
                source: f[3].to_string(),
                probe: ProbeKind::parse(f[4]).map_err(|e| err(e.to_string()))?,
                task: Task::parse(f[5]).map_err(|e| err(e.to_string()))?,
                seed: f[6].parse().map_err(|e| err(format!("seed: {e}")))?,
                fold: f[7].parse().map_err(|e| err(format!("fold: {e}")))?,
                status,
                metrics,
            });
        }
        Ok(EvalReport { rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_tsv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Mean and sample standard deviation of each metric over successful cells.
    pub fn summary(&self) -> Vec<MetricSummary> {
        let mut groups: BTreeMap<(String, ProbeKind, u64, usize), (Task, Vec<f64>)> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.status == CellStatus::Ok) {
            for (k, v) in r.metrics.iter().enumerate() {
                if let Some(v) = v {
                    groups
                        .entry((r.representation.clone(), r.probe, task_index(r.task), k))
                        .or_insert_with(|| (r.task, Vec::new()))
                        .1
                        .push(*v);
                }
            }
        }
        groups
            .into_iter()
            .map(|((representation, probe, _, k), (task, vals))| {
                let n = vals.len();
                let mean = vals.iter().sum::<f64>() / n as f64;
                let std = if n > 1 { (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
                MetricSummary { representation, probe, task, metric: REPORT_METRICS[k].to_string(), mean, std, n }
            })
            .collect()
    }

    pub fn mean(&self, representation: &str, probe: ProbeKind, task: Task, metric: &str) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|s| s.representation == representation && s.probe == probe && s.task == task && s.metric == metric)
            .map(|s| s.mean)
    }

    pub fn summary_tsv(&self) -> String {
        let mut s = String::from("# representation\tprobe\ttask\tmetric\tmean\tstd\tn\n");
        for m in self.summary() {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{}", m.representation, m.probe.name(), m.task.name(), m.metric, m.mean, m.std, m.n);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::Provenance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corpus(n: usize) -> (Vec<LabeledUtterance>, Representation) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut utts = Vec::new();
        let mut feats = Vec::new();
        for i in 0..n {
            let class = i % 2;
            let frames = 30;
            let frame_labels: Vec<u8> = (0..frames).map(|t| u8::from((t / 5) % 2 == 1)).collect();
            let data: Vec<f32> = (0..frames)
                .flat_map(|t| [class as f32 * 2.0 - 1.0 + rng.gen_range(-0.3..0.3), frame_labels[t] as f32])
                .collect();
            feats.push(Some(FrameMatrix::new(frames, 2, data).unwrap()));
            utts.push(LabeledUtterance {
                id: format!("u{i}"),
                num_frames: frames,
                frame_labels,
                syllable_count: Some(3),
                words: Vec::new(),
                class: Some(class),
                provenance: Provenance::Synthetic,
            });
        }
        (utts, Representation { name: "toy".into(), strategy: "-".into(), source: "-".into(), features: feats })
    }

    fn quick() -> GridConfig {
        GridConfig {
            seeds: vec![0, 1, 2, 3],
            train: ProbeTrainConfig { steps: 100, warmup_steps: 10, peak_lr: 1e-2, ..ProbeTrainConfig::default() },
            ..GridConfig::default()
        }
    }

    #[test]
    fn grid_has_one_row_per_cell() {
        let (utts, rep) = corpus(20);
        let report = run_probe_grid(&[rep], &[Task::Class], &utts, &quick(), "h").unwrap();
        assert_eq!(report.rows.len(), 20);
        assert!(report.rows.iter().all(|r| r.status == CellStatus::Ok));
        assert!(report.mean("toy", ProbeKind::Linear, Task::Class, "wa").unwrap() > 0.95);
    }

    #[test]
    fn missing_features_mark_cells_absent() {
        let (utts, mut rep) = corpus(10);
        rep.features[3] = None;
        let report = run_probe_grid(&[rep], &[Task::Class], &utts, &GridConfig { seeds: vec![0], ..quick() }, "h").unwrap();
        assert_eq!(report.rows.len(), 5);
        assert!(report.rows.iter().all(|r| r.status == CellStatus::Absent));
    }

    #[test]
    fn tasks_without_labels_fail_per_cell() {
        let (utts, rep) = corpus(10);
        let report = run_probe_grid(&[rep], &[Task::Prominence], &utts, &GridConfig { seeds: vec![0], ..quick() }, "h").unwrap();
        assert!(report.rows.iter().all(|r| matches!(r.status, CellStatus::Failed(_))));
    }

    #[test]
    fn report_round_trips() {
        let (utts, rep) = corpus(10);
        let cfg = GridConfig { seeds: vec![0], ..quick() };
        let report = run_probe_grid(&[rep], &[Task::Class, Task::Syllable, Task::Boundary], &utts, &cfg, "abc").unwrap();
        let back = EvalReport::from_tsv(&report.to_tsv()).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.summary(), report.summary());
        assert!(report.rows.iter().any(|r| r.task == Task::Syllable && r.metric("f1").is_some()));
    }

    #[test]
    fn paired_splits_ignore_representation() {
        let (utts, rep) = corpus(20);
        let mut other = rep.clone();
        other.name = "copy".into();
        let cfg = GridConfig { seeds: vec![5], ..quick() };
        let report = run_probe_grid(&[rep, other], &[Task::Class], &utts, &cfg, "h").unwrap();
        let (a, b) = report.rows.split_at(5);
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.metrics, y.metrics);
        }
    }
}
