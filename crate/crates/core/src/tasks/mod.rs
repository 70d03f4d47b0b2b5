//! Task labels, annotation adapters, the synthetic corpus and metrics.

pub mod corpora;
pub mod metrics;
pub mod synth;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use corpora::{
    format_phn, format_tobi_labels, parse_phn, parse_ravdess_id, parse_timit_alignment, parse_tobi_labels, AlignmentConfig,
    RavdessId, TobiWord, VowelLabels,
};
pub use metrics::{count_syllables_from_frames, f1_binary, kfold_split, pearson_corr, ser, weighted_unweighted_accuracy};
pub use synth::{generate_synthetic_corpus, labels_from_params, render_track, ClassSpec, SynthConfig, SyntheticCorpus, UtteranceParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSpan {
    /// First frame of the word.
    pub start: usize,
    /// One past the last frame.
    pub end: usize,
    pub word: String,
    pub prominent: u8,
    pub boundary: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledUtterance {
    pub id: String,
    pub num_frames: usize,
    /// Per-frame vowel or pulse flags; empty when not annotated.
    pub frame_labels: Vec<u8>,
    pub syllable_count: Option<usize>,
    pub words: Vec<WordSpan>,
    pub class: Option<usize>,
    pub provenance: Provenance,
}

impl LabeledUtterance {
    pub fn validate(&self) -> Result<()> {
        if !self.frame_labels.is_empty() && self.frame_labels.len() != self.num_frames {
            return Err(Error::Alignment(format!("`{}`: frame labels do not cover the utterance", self.id)));
        }
        let mut prev = 0;
        for w in &self.words {
            if w.start >= w.end || w.start < prev || w.end > self.num_frames {
                return Err(Error::InvalidSpan { start: w.start, end: w.end, len: self.num_frames });
            }
            prev = w.end;
        }
        Ok(())
    }

    pub fn spans(&self) -> Vec<(usize, usize)> {
        self.words.iter().map(|w| (w.start, w.end)).collect()
    }
}

// ---------------------------------------------------------------- manifest

pub const LABELS_HEADER: &str = "# id\tprovenance\tnum_frames\tclass\tsyllables\tframe_runs\twords";

fn runs(flags: &[u8]) -> String {
    let mut out = Vec::new();
    let mut start = None;
    for (t, f) in flags.iter().chain(std::iter::once(&0)).enumerate() {
        match (start, *f != 0) {
            (None, true) => start = Some(t),
            (Some(s), false) => {
                out.push(format!("{s}-{t}"));
                start = None;
            }
            _ => {}
        }
    }
    if out.is_empty() {
        "_".into()
    } else {
        out.join(",")
    }
}

/// Labels as tab-separated text, one utterance per line after [`LABELS_HEADER`].
///
/// `frame_runs` lists `start-end` frame intervals flagged 1 (or `_`, or `-`
/// when the utterance has no frame annotation); `words` lists
/// `start-end:word:prominent:boundary` entries separated by `|`.
pub fn format_labels(utts: &[LabeledUtterance]) -> Result<String> {
    let mut s = String::from(LABELS_HEADER);
    s.push('\n');
    for u in utts {
        if let Some(w) = u.words.iter().find(|w| w.word.is_empty() || w.word.contains(['\t', ':', '|', '\n'])) {
            return Err(Error::Schema(format!("word `{}` cannot be written to the labels manifest", w.word)));
        }
        let opt = |v: Option<usize>| v.map_or("-".to_string(), |v| v.to_string());
        let frames = if u.frame_labels.is_empty() { "-".to_string() } else { runs(&u.frame_labels) };
        let words = if u.words.is_empty() {
            "_".to_string()
        } else {
            u.words
                .iter()
                .map(|w| format!("{}-{}:{}:{}:{}", w.start, w.end, w.word, w.prominent, w.boundary))
                .collect::<Vec<_>>()
                .join("|")
        };
        let prov = match u.provenance {
            Provenance::Real => "real",
            Provenance::Synthetic => "synthetic",
        };
        writeln!(s, "{}\t{prov}\t{}\t{}\t{}\t{frames}\t{words}", u.id, u.num_frames, opt(u.class), opt(u.syllable_count))
            .expect("string write");
    }
    Ok(s)
}

pub fn parse_labels(text: &str) -> Result<Vec<LabeledUtterance>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Parse { line: i + 1, msg: msg.to_string() };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 7 {
            return Err(err("expected 7 tab-separated columns"));
        }
        let num: usize = cols[2].parse().map_err(|_| err("bad num_frames"))?;
        let opt = |s: &str, what: &str| -> Result<Option<usize>> {
            if s == "-" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| err(what))
            }
        };
        let range = |s: &str| -> Result<(usize, usize)> {
            let (a, b) = s.split_once('-').ok_or_else(|| err("bad interval"))?;
            Ok((a.parse().map_err(|_| err("bad interval"))?, b.parse().map_err(|_| err("bad interval"))?))
        };
        let frame_labels = match cols[5] {
            "-" => Vec::new(),
            "_" => vec![0; num],
            s => {
                let mut f = vec![0u8; num];
                for r in s.split(',') {
                    let (a, b) = range(r)?;
                    if a >= b || b > num {
                        return Err(err("frame run out of range"));
                    }
                    f[a..b].iter_mut().for_each(|v| *v = 1);
                }
                f
            }
        };
        let words = if cols[6] == "_" {
            Vec::new()
        } else {
            cols[6]
                .split('|')
                .map(|w| {
                    let parts: Vec<&str> = w.split(':').collect();
                    if parts.len() != 4 {
                        return Err(err("word entry needs 4 fields"));
                    }
                    let (start, end) = range(parts[0])?;
                    let flag = |s: &str| match s {
                        "0" => Ok(0),
                        "1" => Ok(1),
                        _ => Err(err("word flags must be 0 or 1")),
                    };
                    Ok(WordSpan { start, end, word: parts[1].to_string(), prominent: flag(parts[2])?, boundary: flag(parts[3])? })
                })
                .collect::<Result<Vec<_>>>()?
        };
        let provenance = match cols[1] {
            "real" => Provenance::Real,
            "synthetic" => Provenance::Synthetic,
            _ => return Err(err("unknown provenance")),
        };
        let u = LabeledUtterance {
            id: cols[0].to_string(),
            num_frames: num,
            frame_labels,
            syllable_count: opt(cols[4], "bad syllable count")?,
            words,
            class: opt(cols[3], "bad class")?,
            provenance,
        };
        u.validate()?;
        out.push(u);
    }
    Ok(out)
}

pub fn write_labels(path: &Path, utts: &[LabeledUtterance]) -> Result<()> {
    std::fs::write(path, format_labels(utts)?).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<LabeledUtterance>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text)
}

// ---------------------------------------------------------------- tasks

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    Frame,
    Span,
    Utterance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Per-frame vowel or pulse detection; also scored as syllable counts.
    Syllable,
    Prominence,
    Boundary,
    /// Utterance class.
    Class,
    /// Utterance class with labels shuffled across utterances; a chance-level control.
    PermutedClass,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Syllable, Task::Prominence, Task::Boundary, Task::Class, Task::PermutedClass];

    pub fn name(self) -> &'static str {
        match self {
            Task::Syllable => "syllable",
            Task::Prominence => "prominence",
            Task::Boundary => "boundary",
            Task::Class => "class",
            Task::PermutedClass => "permuted_class",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }

    pub fn granularity(self) -> Granularity {
        match self {
            Task::Syllable => Granularity::Frame,
            Task::Prominence | Task::Boundary => Granularity::Span,
            Task::Class | Task::PermutedClass => Granularity::Utterance,
        }
    }

    /// Names of the metrics reported for this task.
    pub fn metrics(self) -> &'static [&'static str] {
        match self {
            Task::Syllable => &["f1", "ser", "corr"],
            Task::Prominence | Task::Boundary => &["f1"],
            Task::Class | Task::PermutedClass => &["wa", "ua"],
        }
    }
}

/// Labels of one utterance for one task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TaskLabels {
    Frames(Vec<usize>),
    Spans { spans: Vec<(usize, usize)>, labels: Vec<usize> },
    Utterance(usize),
}

/// Per-utterance labels for `task` plus the class count. Utterances without
/// the needed annotation yield `None`.
pub fn task_labels(task: Task, utts: &[LabeledUtterance], seed: u64) -> Result<(Vec<Option<TaskLabels>>, usize)> {
    let out = match task {
        Task::Syllable => {
            let v = utts
                .iter()
                .map(|u| (!u.frame_labels.is_empty()).then(|| TaskLabels::Frames(u.frame_labels.iter().map(|f| *f as usize).collect())))
                .collect();
            (v, 2)
        }
        Task::Prominence | Task::Boundary => {
            let v = utts
                .iter()
                .map(|u| {
                    (!u.words.is_empty()).then(|| TaskLabels::Spans {
                        spans: u.spans(),
                        labels: u
                            .words
                            .iter()
                            .map(|w| if task == Task::Prominence { w.prominent } else { w.boundary } as usize)
                            .collect(),
                    })
                })
                .collect();
            (v, 2)
        }
        Task::Class | Task::PermutedClass => {
            let mut classes: Vec<Option<usize>> = utts.iter().map(|u| u.class).collect();
            if task == Task::PermutedClass {
                let mut present: Vec<usize> = classes.iter().flatten().copied().collect();
                present.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5045_524d));
                let mut it = present.into_iter();
                for c in classes.iter_mut().filter(|c| c.is_some()) {
                    *c = it.next();
                }
            }
            let distinct: std::collections::BTreeSet<usize> = classes.iter().flatten().copied().collect();
            if distinct.len() < 2 {
                return Err(Error::DegenerateLabels);
            }
            let k = distinct.last().map_or(0, |m| m + 1);
            (classes.into_iter().map(|c| c.map(TaskLabels::Utterance)).collect(), k)
        }
    };
    if out.1 < 2 {
        return Err(Error::DegenerateLabels);
    }
    Ok(out)
}
