//! Seeded end-to-end runs: features, MPM training per masking strategy,
//! probe grids and reports, each stage cached under one output directory.

mod config;
mod manifest;
pub mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

pub use config::{CorpusSource, ExperimentConfig, RepresentationKind};
pub use manifest::{RunManifest, StageRecord, StageStatus};

use crate::cache::{FeatureCache, FeatureRecord, ManifestEntry};
use crate::codec::{Codebooks, TokenTrack};
use crate::cwt::{cwt_encode, CwtConfig};
use crate::error::{Error, Result};
use crate::mask::MaskConfig;
use crate::model::{train_mpm, MpmCheckpoint, MpmModel, TrainLog, TrainingMetadata};
use crate::probe::{run_probe_grid, CellStatus, EvalReport, FrameMatrix, Representation};
use crate::signal::{extract_prosody, load_waveform, FeatureConfig, ProsodyTrack};
use crate::tasks::{generate_synthetic_corpus, read_labels, write_labels, LabeledUtterance, Provenance, SynthConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FEATURES_DIR: &str = "features";
pub const LABELS_FILE: &str = "labels.tsv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const REPORT_DIR: &str = "reports";
pub const PROBE_REPORT: &str = "probe.tsv";
pub const PROBE_SUMMARY: &str = "probe-summary.tsv";

/// Hex SHA-256, truncated to 16 characters.
pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Feature records and labels, aligned by position.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub records: Vec<FeatureRecord>,
    pub labels: Vec<LabeledUtterance>,
}

impl Corpus {
    pub fn tracks(&self) -> Vec<&ProsodyTrack> {
        self.records.iter().map(|r| &r.track).collect()
    }

    pub fn tokens(&self, codebooks: &Codebooks) -> Vec<TokenTrack> {
        self.records.iter().map(|r| codebooks.tokenize(&r.track)).collect()
    }
}

fn with_cwt(id: String, track: ProsodyTrack, cwt: &CwtConfig) -> Result<FeatureRecord> {
    let c = cwt_encode(&track, cwt)?;
    Ok(FeatureRecord { id, track, cwt: Some(c) })
}

pub fn synthesize_corpus(synth: &SynthConfig, cwt: &CwtConfig) -> Result<Corpus> {
    let generated = generate_synthetic_corpus(synth)?;
    let pairs: Vec<(String, ProsodyTrack)> = generated.labels.iter().map(|l| l.id.clone()).zip(generated.tracks).collect();
    let records = crate::par::map_slice(&pairs, |(id, t)| with_cwt(id.clone(), t.clone(), cwt)).into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Corpus { records, labels: generated.labels })
}

fn unlabeled(id: &str, num_frames: usize) -> LabeledUtterance {
    LabeledUtterance {
        id: id.to_string(),
        num_frames,
        frame_labels: Vec::new(),
        syllable_count: None,
        words: Vec::new(),
        class: None,
        provenance: Provenance::Real,
    }
}

fn safe_id(stem: &str) -> String {
    stem.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect()
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    Ok(files)
}

/// Features for every `.wav` in `dir`. Files that fail to load or analyse
/// are returned alongside the corpus instead of aborting it.
pub fn load_directory_corpus(
    dir: &Path,
    labels: Option<&Path>,
    features: &FeatureConfig,
    cwt: &CwtConfig,
) -> Result<(Corpus, Vec<String>)> {
    let files = wav_files(dir)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no .wav files in {}", dir.display())));
    }
    let results = crate::par::map_slice(&files, |path| -> Result<FeatureRecord> {
        let id = safe_id(&path.file_stem().unwrap_or_default().to_string_lossy());
        let track = extract_prosody(&load_waveform(path)?, features)?;
        with_cwt(id, track, cwt)
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (path, r) in files.iter().zip(results) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                failures.push(format!("{}: {e}", path.display()));
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Config(format!("no readable audio in {}", dir.display())));
    }
    let known: BTreeMap<String, LabeledUtterance> = match labels {
        Some(p) => read_labels(p)?.into_iter().map(|l| (l.id.clone(), l)).collect(),
        None => BTreeMap::new(),
    };
    let labels = records
        .iter()
        .map(|r| known.get(&r.id).cloned().unwrap_or_else(|| unlabeled(&r.id, r.track.num_frames())))
        .collect();
    Ok((Corpus { records, labels }, failures))
}

/// Trains one MPM on `tokens` with the given masking strategy.
pub fn train_strategy(cfg: &ExperimentConfig, tokens: &[TokenTrack], strategy: &str) -> Result<(MpmCheckpoint, TrainLog)> {
    let mask = MaskConfig::parse(strategy)?;
    let codebooks = Codebooks::with_sizes(cfg.model.codebook_sizes)?;
    let mut model = MpmModel::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let train = crate::model::TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    let log = train_mpm(&mut model, tokens, &mask, &train)?;
    let metadata = TrainingMetadata {
        steps_completed: log.losses.len(),
        final_loss: log.final_loss(),
        seed: cfg.seed,
        mask: Some(mask),
        notes: vec![format!("strategy {strategy}")],
    };
    Ok((MpmCheckpoint::new(model, metadata, codebooks)?, log))
}

/// Per-frame MPM representations. Utterances longer than the model's
/// context are encoded in consecutive windows.
pub fn mpm_features(ckpt: &MpmCheckpoint, track: &ProsodyTrack) -> Result<FrameMatrix> {
    let tokens = ckpt.codebooks.tokenize(track);
    let n = tokens.num_frames();
    let max = ckpt.model.config().max_seq_frames;
    let dim = ckpt.model.config().model_dim;
    let mut data = Vec::with_capacity(n * dim);
    let mut start = 0;
    while start < n {
        let len = max.min(n - start);
        data.extend(ckpt.model.extract_representations(&tokens.window(start, len), None)?);
        start += len;
    }
    FrameMatrix::new(n, dim, data)
}

/// Pitch, energy and voice activity as three columns.
pub fn raw_features(track: &ProsodyTrack) -> Result<FrameMatrix> {
    FrameMatrix::new(track.num_frames(), 3, track.stacked().concat())
}

pub fn cwt_features(record: &FeatureRecord, cwt: &CwtConfig) -> Result<FrameMatrix> {
    let c = match &record.cwt {
        Some(c) => c.clone(),
        None => cwt_encode(&record.track, cwt)?,
    };
    FrameMatrix::new(c.num_frames, c.dim(), c.data.clone())
}

/// Builds a named representation over `corpus`.
pub fn build_representation(
    kind: &RepresentationKind,
    corpus: &Corpus,
    cwt: &CwtConfig,
    checkpoint: Option<(&MpmCheckpoint, &str)>,
) -> Result<Representation> {
    let recs = &corpus.records;
    let (features, strategy, source) = match kind {
        RepresentationKind::Raw => (crate::par::map_slice(recs, |r| raw_features(&r.track)), "-".to_string(), "-".to_string()),
        RepresentationKind::Cwt => (crate::par::map_slice(recs, |r| cwt_features(r, cwt)), "-".to_string(), "-".to_string()),
        RepresentationKind::Mpm(s) => match checkpoint {
            Some((ckpt, hash)) => (crate::par::map_slice(recs, |r| mpm_features(ckpt, &r.track)), s.clone(), hash.to_string()),
            None => {
                return Ok(Representation { name: kind.name(), strategy: s.clone(), source: "-".into(), features: vec![None; recs.len()] });
            }
        },
    };
    let features = features.into_iter().map(|f| f.map(Some)).collect::<Result<Vec<_>>>()?;
    Ok(Representation { name: kind.name(), strategy, source, features })
}

/// Whether a stage finished cleanly.
#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Complete,
    /// Some inputs or grid cells failed; the messages say which.
    Partial(Vec<String>),
}

impl Outcome {
    pub fn merge(self, other: Outcome) -> Outcome {
        match (self, other) {
            (Outcome::Complete, Outcome::Complete) => Outcome::Complete,
            (Outcome::Partial(a), Outcome::Complete) | (Outcome::Complete, Outcome::Partial(a)) => Outcome::Partial(a),
            (Outcome::Partial(mut a), Outcome::Partial(b)) => {
                a.extend(b);
                Outcome::Partial(a)
            }
        }
    }
}

/// Disk-backed stages rooted at the configured output directory.
pub struct Pipeline {
    cfg: ExperimentConfig,
    root: PathBuf,
    hash: String,
}

impl Pipeline {
    /// Validates the config, creates the output directory and writes the
    /// fully resolved config next to the run manifest.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let root = cfg.out_dir.clone();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let hash = cfg.hash()?;
        let path = root.join(CONFIG_FILE);
        std::fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
        let p = Pipeline { cfg, root, hash };
        let mut m = p.manifest()?;
        m.config_hash = p.hash.clone();
        p.save_manifest(&m)?;
        Ok(p)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint_path(&self, strategy: &str) -> PathBuf {
        self.root.join(CHECKPOINT_DIR).join(format!("mpm-{strategy}.ckpt"))
    }

    pub fn train_log_path(&self, strategy: &str) -> PathBuf {
        self.root.join(CHECKPOINT_DIR).join(format!("train-{strategy}.json"))
    }

    pub fn report_path(&self) -> PathBuf {
        self.root.join(REPORT_DIR).join(PROBE_REPORT)
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        let path = self.root.join(MANIFEST_FILE);
        if path.exists() {
            RunManifest::load(&path)
        } else {
            Ok(RunManifest::new(&self.hash))
        }
    }

    fn save_manifest(&self, m: &RunManifest) -> Result<()> {
        m.save(&self.root.join(MANIFEST_FILE))
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    fn cached(&self, stage: &str, input_hash: &str) -> Result<bool> {
        let m = self.manifest()?;
        Ok(m.stages.get(stage).is_some_and(|s| {
            s.status != StageStatus::Failed && s.input_hash == input_hash && s.artifacts.iter().all(|a| self.root.join(a).exists())
        }))
    }

    fn record(&self, stage: &str, input_hash: &str, status: StageStatus, artifacts: Vec<PathBuf>, started: Instant, messages: Vec<String>) -> Result<()> {
        let mut m = self.manifest()?;
        m.config_hash = self.hash.clone();
        m.stages.insert(
            stage.to_string(),
            StageRecord {
                status,
                input_hash: input_hash.to_string(),
                artifacts: artifacts.iter().map(|a| self.rel(a)).collect(),
                seconds: started.elapsed().as_secs_f64(),
                messages,
            },
        );
        self.save_manifest(&m)
    }

    fn features_hash(&self, source: &CorpusSource) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&(source, &self.cfg.features, &self.cfg.cwt))?);
        if let CorpusSource::Directory { path, labels } = source {
            for f in wav_files(path)? {
                h.update(f.file_name().unwrap_or_default().to_string_lossy().as_bytes());
                h.update(std::fs::read(&f).map_err(|e| Error::io(&f, e))?);
            }
            if let Some(l) = labels {
                h.update(std::fs::read(l).map_err(|e| Error::io(l, e))?);
            }
        }
        Ok(short_hash(&h.finalize()))
    }

    fn write_features(&self, source: &CorpusSource) -> Result<Outcome> {
        let started = Instant::now();
        let input = self.features_hash(source)?;
        if self.cached("features", &input)? {
            log::info!("features up to date");
            return Ok(Outcome::Complete);
        }
        let (corpus, failures) = match source {
            CorpusSource::Synthetic(s) => (synthesize_corpus(s, &self.cfg.cwt)?, Vec::new()),
            CorpusSource::Directory { path, labels } => load_directory_corpus(path, labels.as_deref(), &self.cfg.features, &self.cfg.cwt)?,
        };
        let dir = self.root.join(FEATURES_DIR);
        let cache = FeatureCache::create(&dir)?;
        cache.write_all(&corpus.records)?;
        let entries: Vec<ManifestEntry> = corpus
            .records
            .iter()
            .map(|r| ManifestEntry { id: r.id.clone(), duration_seconds: r.track.duration_seconds(), num_frames: r.track.num_frames() })
            .collect();
        cache.write_manifest(&entries)?;
        let labels_path = dir.join(LABELS_FILE);
        write_labels(&labels_path, &corpus.labels)?;
        let mut artifacts: Vec<PathBuf> = corpus.records.iter().map(|r| cache.record_path(&r.id)).collect();
        artifacts.push(dir.join("manifest.tsv"));
        artifacts.push(labels_path);
        let mut messages = failures.clone();
        if let CorpusSource::Synthetic(s) = source {
            messages.push(format!("generator seed {}", s.seed));
        }
        let status = if failures.is_empty() { StageStatus::Ok } else { StageStatus::Partial };
        self.record("features", &input, status, artifacts, started, messages)?;
        Ok(if failures.is_empty() { Outcome::Complete } else { Outcome::Partial(failures) })
    }

    /// Extracts (or generates) features for the configured corpus.
    pub fn features(&self) -> Result<Outcome> {
        self.write_features(&self.cfg.corpus.clone())
    }

    /// Generates the synthetic corpus described by the config, whatever the
    /// configured source.
    pub fn synth(&self) -> Result<Outcome> {
        let synth = match &self.cfg.corpus {
            CorpusSource::Synthetic(s) => s.clone(),
            CorpusSource::Directory { .. } => SynthConfig { seed: self.cfg.seed, ..SynthConfig::default() },
        };
        self.write_features(&CorpusSource::Synthetic(synth))
    }

    fn features_record(&self) -> Result<StageRecord> {
        self.manifest()?
            .stages
            .get("features")
            .cloned()
            .filter(|s| s.status != StageStatus::Failed)
            .ok_or_else(|| Error::MissingArtifact { stage: "features".into(), path: self.root.join(FEATURES_DIR) })
    }

    /// Loads the cached corpus written by the features stage.
    pub fn load_corpus(&self) -> Result<Corpus> {
        self.features_record()?;
        let dir = self.root.join(FEATURES_DIR);
        let cache = FeatureCache::open(&dir)?;
        let records = cache.read_all()?;
        let labels_path = dir.join(LABELS_FILE);
        if !labels_path.exists() {
            return Err(Error::MissingArtifact { stage: "features".into(), path: labels_path });
        }
        let by_id: BTreeMap<String, LabeledUtterance> = read_labels(&labels_path)?.into_iter().map(|l| (l.id.clone(), l)).collect();
        let labels = records
            .iter()
            .map(|r| by_id.get(&r.id).cloned().unwrap_or_else(|| unlabeled(&r.id, r.track.num_frames())))
            .collect();
        Ok(Corpus { records, labels })
    }

    fn train_hash(&self, strategy: &str) -> Result<String> {
        let features = self.features_record()?.input_hash;
        let bytes = serde_json::to_vec(&(features, &self.cfg.model, &self.cfg.train, strategy, self.cfg.seed))?;
        Ok(short_hash(&bytes))
    }

    /// Trains the MPM for one strategy and writes its checkpoint and loss log.
    pub fn train(&self, strategy: &str) -> Result<Outcome> {
        let started = Instant::now();
        let stage = format!("train:{strategy}");
        let input = self.train_hash(strategy)?;
        if self.cached(&stage, &input)? {
            log::info!("checkpoint for strategy {strategy} up to date");
            return Ok(Outcome::Complete);
        }
        let corpus = self.load_corpus()?;
        let tokens = corpus.tokens(&Codebooks::with_sizes(self.cfg.model.codebook_sizes)?);
        let result = train_strategy(&self.cfg, &tokens, strategy);
        let (ckpt, log) = match result {
            Ok(v) => v,
            Err(e) => {
                self.record(&stage, &input, StageStatus::Failed, Vec::new(), started, vec![e.to_string()])?;
                return Err(e);
            }
        };
        let dir = self.root.join(CHECKPOINT_DIR);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let ckpt_path = self.checkpoint_path(strategy);
        ckpt.save(&ckpt_path)?;
        let log_path = self.train_log_path(strategy);
        std::fs::write(&log_path, serde_json::to_vec(&log)?).map_err(|e| Error::io(&log_path, e))?;
        let mut notes = vec![format!("final loss {:?}", log.final_loss())];
        if log.mask_sizes.iter().any(|m| *m != log.mask_sizes[0]) {
            let lo = log.mask_sizes.iter().min().copied().unwrap_or(0);
            let hi = log.mask_sizes.iter().max().copied().unwrap_or(0);
            notes.push(format!("mask sizes drawn in [{lo}, {hi}]"));
        }
        self.record(&stage, &input, StageStatus::Ok, vec![ckpt_path, log_path], started, notes)?;
        Ok(Outcome::Complete)
    }

    fn probe_with(&self, representations: &[RepresentationKind], lenient: bool) -> Result<(EvalReport, Outcome)> {
        let started = Instant::now();
        let corpus = self.load_corpus()?;
        let mut reps = Vec::new();
        let mut hashes = Vec::new();
        for kind in representations {
            let ckpt = match kind {
                RepresentationKind::Mpm(s) => {
                    let path = self.checkpoint_path(s);
                    if !path.exists() {
                        if lenient {
                            reps.push(build_representation(kind, &corpus, &self.cfg.cwt, None)?);
                            hashes.push("-".to_string());
                            continue;
                        }
                        return Err(Error::MissingArtifact { stage: format!("train:{s}"), path });
                    }
                    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                    Some((MpmCheckpoint::from_bytes(&bytes)?, short_hash(&bytes)))
                }
                _ => None,
            };
            let rep = build_representation(kind, &corpus, &self.cfg.cwt, ckpt.as_ref().map(|(c, h)| (c, h.as_str())))?;
            hashes.push(rep.source.clone());
            reps.push(rep);
        }
        let tasks = self.cfg.task_list()?;
        let report = run_probe_grid(&reps, &tasks, &corpus.labels, &self.cfg.probe, &self.hash)?;
        let dir = self.root.join(REPORT_DIR);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let report_path = self.report_path();
        report.write(&report_path)?;
        let summary_path = dir.join(PROBE_SUMMARY);
        std::fs::write(&summary_path, report.summary_tsv()).map_err(|e| Error::io(&summary_path, e))?;
        let failed: Vec<String> = report
            .rows
            .iter()
            .filter_map(|r| match &r.status {
                CellStatus::Failed(m) => Some(format!("{} / {} / {} / seed {} / fold {}: {m}", r.representation, r.probe.name(), r.task.name(), r.seed, r.fold)),
                _ => None,
            })
            .collect();
        let input = short_hash(&serde_json::to_vec(&(&hashes, representations.iter().map(|r| r.name()).collect::<Vec<_>>(), &self.cfg.tasks, &self.cfg.probe))?);
        let status = if failed.is_empty() { StageStatus::Ok } else { StageStatus::Partial };
        self.record("probe", &input, status, vec![report_path, summary_path], started, failed.clone())?;
        let outcome = if failed.is_empty() { Outcome::Complete } else { Outcome::Partial(failed) };
        Ok((report, outcome))
    }

    /// Runs the probe grid over the configured representations. Every
    /// referenced checkpoint must exist.
    pub fn probe(&self) -> Result<(EvalReport, Outcome)> {
        let reps = self.cfg.representation_list()?;
        self.probe_with(&reps, false)
    }

    /// Trains every strategy, then probes the configured representations
    /// plus one MPM representation per strategy in a single paired grid.
    /// A failing strategy is reported and its cells marked absent.
    pub fn sweep(&self) -> Result<(EvalReport, Outcome)> {
        let mut outcome = Outcome::Complete;
        if self.features_record().is_err() {
            outcome = outcome.merge(self.features()?);
        }
        for s in &self.cfg.strategies {
            if let Err(e) = self.train(s) {
                log::error!("strategy {s} failed: {e}");
                outcome = outcome.merge(Outcome::Partial(vec![format!("train:{s}: {e}")]));
            }
        }
        let mut reps = self.cfg.representation_list()?;
        for s in &self.cfg.strategies {
            let k = RepresentationKind::Mpm(s.clone());
            if !reps.contains(&k) {
                reps.push(k);
            }
        }
        let (report, probe_outcome) = self.probe_with(&reps, true)?;
        Ok((report, outcome.merge(probe_outcome)))
    }

    /// Loss logs written by the train stage, by strategy.
    pub fn train_logs(&self) -> Result<Vec<(String, TrainLog)>> {
        let mut out = Vec::new();
        for s in &self.cfg.strategies {
            let p = self.train_log_path(s);
            if p.exists() {
                let text = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
                out.push((s.clone(), serde_json::from_slice(&text)?));
            }
        }
        Ok(out)
    }
}
