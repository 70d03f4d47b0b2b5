//! Annotation adapters for phone alignments, ToBI-style word labels and
//! RAVDESS-style file names.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

// ---------------------------------------------------------------- phones

pub const DEFAULT_VOWELS: &[&str] = &[
    "iy", "ih", "eh", "ey", "ae", "aa", "aw", "ay", "ah", "ao", "oy", "ow", "uh", "uw", "ux", "er", "ax", "ix", "axr", "ax-h",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhoneSegment {
    pub start: u64,
    pub end: u64,
    pub phone: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    pub vowels: Vec<String>,
    pub sample_rate: u32,
    pub hop_seconds: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            vowels: DEFAULT_VOWELS.iter().map(|s| s.to_string()).collect(),
            sample_rate: 16000,
            hop_seconds: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VowelLabels {
    pub frame_flags: Vec<u8>,
    pub syllable_count: usize,
}

/// `start end phone` lines with sample offsets.
pub fn parse_phn(text: &str) -> Result<Vec<PhoneSegment>> {
    let mut out: Vec<PhoneSegment> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 3 {
            return Err(parse_err(i + 1, format!("expected `start end phone`, got `{line}`")));
        }
        let start: u64 = cols[0].parse().map_err(|_| parse_err(i + 1, "start is not an integer"))?;
        let end: u64 = cols[1].parse().map_err(|_| parse_err(i + 1, "end is not an integer"))?;
        if end <= start {
            return Err(parse_err(i + 1, format!("segment ends at {end}, before its start {start}")));
        }
        if let Some(prev) = out.last() {
            if start < prev.end {
                return Err(parse_err(i + 1, format!("segment starts at {start}, before previous end {}", prev.end)));
            }
        }
        out.push(PhoneSegment { start, end, phone: cols[2].to_string() });
    }
    Ok(out)
}

pub fn format_phn(segments: &[PhoneSegment]) -> String {
    let mut s = String::new();
    for p in segments {
        writeln!(s, "{} {} {}", p.start, p.end, p.phone).expect("string write");
    }
    s
}

/// Flag frames whose centre falls inside a vowel; one syllable per vowel segment.
pub fn vowel_labels(segments: &[PhoneSegment], cfg: &AlignmentConfig) -> VowelLabels {
    let vowels: BTreeSet<&str> = cfg.vowels.iter().map(|s| s.as_str()).collect();
    let hop = cfg.hop_seconds * cfg.sample_rate as f64;
    let last = segments.last().map_or(0, |s| s.end);
    let n = (last as f64 / hop + 1e-9).floor() as usize;
    let mut flags = vec![0u8; n];
    let mut count = 0;
    for seg in segments.iter().filter(|s| vowels.contains(s.phone.as_str())) {
        count += 1;
        for (t, f) in flags.iter_mut().enumerate() {
            let centre = (t as f64 + 0.5) * hop;
            if centre >= seg.start as f64 && centre < seg.end as f64 {
                *f = 1;
            }
        }
    }
    VowelLabels { frame_flags: flags, syllable_count: count }
}

pub fn parse_timit_alignment(text: &str, cfg: &AlignmentConfig) -> Result<VowelLabels> {
    Ok(vowel_labels(&parse_phn(text)?, cfg))
}

// ---------------------------------------------------------------- ToBI

/// Accents that make a word prominent.
pub const PROMINENT_ACCENTS: &[&str] = &["H*", "L*", "L*+H", "L+H*", "H+", "!H*"];
/// Break indexes that count as a boundary.
pub const BOUNDARY_BREAKS: &[u8] = &[3, 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TobiWord {
    pub start_frame: usize,
    pub end_frame: usize,
    pub word: String,
    /// One entry per accented syllable.
    pub accents: Vec<String>,
    pub break_index: u8,
}

impl TobiWord {
    pub fn prominent(&self) -> bool {
        self.accents.iter().any(|a| PROMINENT_ACCENTS.contains(&a.as_str()))
    }

    pub fn boundary(&self) -> bool {
        BOUNDARY_BREAKS.contains(&self.break_index)
    }
}

fn known_accent(a: &str) -> bool {
    PROMINENT_ACCENTS.contains(&a)
}

/// Tab-separated `start_frame end_frame word accents break`, where `accents`
/// is a comma-separated list or `_` for none. Lines starting with `#` are
/// comments. Unknown accent symbols are dropped with a warning.
pub fn parse_tobi_labels(text: &str) -> Result<Vec<TobiWord>> {
    let mut out: Vec<TobiWord> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(parse_err(i + 1, format!("expected 5 tab-separated columns, got {}", cols.len())));
        }
        let start: usize = cols[0].parse().map_err(|_| parse_err(i + 1, "start is not an integer"))?;
        let end: usize = cols[1].parse().map_err(|_| parse_err(i + 1, "end is not an integer"))?;
        if end <= start {
            return Err(parse_err(i + 1, "word span is empty"));
        }
        if out.last().is_some_and(|w| start < w.end_frame) {
            return Err(parse_err(i + 1, "word spans overlap or are out of order"));
        }
        let break_index: u8 = cols[4]
            .parse()
            .ok()
            .filter(|b| *b <= 4)
            .ok_or_else(|| parse_err(i + 1, format!("break index `{}` not in 0..=4", cols[4])))?;
        let accents = if cols[3] == "_" {
            Vec::new()
        } else {
            cols[3]
                .split(',')
                .filter(|a| {
                    let ok = known_accent(a);
                    if !ok {
                        log::warn!("line {}: skipping unknown accent `{a}`", i + 1);
                    }
                    ok
                })
                .map(str::to_string)
                .collect()
        };
        out.push(TobiWord { start_frame: start, end_frame: end, word: cols[2].to_string(), accents, break_index });
    }
    Ok(out)
}

pub fn format_tobi_labels(words: &[TobiWord]) -> String {
    let mut s = String::from("# start_frame\tend_frame\tword\taccents\tbreak\n");
    for w in words {
        let acc = if w.accents.is_empty() { "_".to_string() } else { w.accents.join(",") };
        writeln!(s, "{}\t{}\t{}\t{}\t{}", w.start_frame, w.end_frame, w.word, acc, w.break_index).expect("string write");
    }
    s
}

// ---------------------------------------------------------------- RAVDESS

pub const EMOTIONS: [&str; 8] = ["neutral", "calm", "happy", "sad", "angry", "fearful", "disgust", "surprised"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RavdessId {
    /// The seven two-digit fields in file-name order.
    pub fields: [u8; 7],
}

impl RavdessId {
    /// Class index, emotion code minus one.
    pub fn emotion(&self) -> usize {
        self.fields[2] as usize - 1
    }

    pub fn speaker(&self) -> u8 {
        self.fields[6]
    }

    pub fn file_name(&self) -> String {
        let parts: Vec<String> = self.fields.iter().map(|f| format!("{f:02}")).collect();
        format!("{}.wav", parts.join("-"))
    }
}

pub fn parse_ravdess_id(name: &str) -> Result<RavdessId> {
    let base = name.rsplit(['/', '\\']).next().unwrap_or(name);
    let stem = base.strip_suffix(".wav").unwrap_or(base);
    let parts: Vec<&str> = stem.split('-').collect();
    if parts.len() != 7 {
        return Err(parse_err(1, format!("`{base}` has {} fields, expected 7", parts.len())));
    }
    let mut fields = [0u8; 7];
    for (f, p) in fields.iter_mut().zip(&parts) {
        if p.len() != 2 {
            return Err(parse_err(1, format!("field `{p}` of `{base}` is not two digits")));
        }
        *f = p.parse().map_err(|_| parse_err(1, format!("field `{p}` of `{base}` is not numeric")))?;
    }
    if !(1..=8).contains(&fields[2]) {
        return Err(parse_err(1, format!("emotion code {} outside 01..08", fields[2])));
    }
    Ok(RavdessId { fields })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> AlignmentConfig {
        AlignmentConfig::default()
    }

    #[test]
    fn single_vowel() {
        let v = parse_timit_alignment("0 1600 h#\n1600 3200 iy\n3200 4800 t\n4800 6400 h#\n", &cfg()).unwrap();
        assert_eq!(v.syllable_count, 1);
        assert_eq!(v.frame_flags.len(), 40);
        assert_eq!(v.frame_flags.iter().filter(|f| **f == 1).count(), 10);
        assert_eq!(v.frame_flags[10..20], [1; 10]);
    }

    #[test]
    fn empty_alignment() {
        let v = parse_timit_alignment("", &cfg()).unwrap();
        assert_eq!(v.syllable_count, 0);
        assert!(v.frame_flags.is_empty());
    }

    #[test]
    fn bad_order_reports_line() {
        let e = parse_phn("0 100 h#\n50 200 iy\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        assert!(matches!(parse_phn("10 5 iy").unwrap_err(), Error::Parse { line: 1, .. }));
        assert!(matches!(parse_phn("0 x iy").unwrap_err(), Error::Parse { line: 1, .. }));
    }

    #[test]
    fn phn_round_trip() {
        let text = "0 2000 h#\n2000 3000 ih\n3000 3500 z\n";
        let segs = parse_phn(text).unwrap();
        assert_eq!(format_phn(&segs), text);
    }

    #[test]
    fn tobi_rules() {
        let text = "0\t10\tthe\t_\t1\n10\t30\tmarch\tL+H*\t2\n30\t55\thome\t_\t4\n55\t70\tnow\tH*,!H*\t3\n";
        let w = parse_tobi_labels(text).unwrap();
        let labels: Vec<(bool, bool)> = w.iter().map(|w| (w.prominent(), w.boundary())).collect();
        assert_eq!(labels, vec![(false, false), (true, false), (false, true), (true, true)]);
    }

    #[test]
    fn unknown_accent_is_skipped() {
        let w = parse_tobi_labels("0\t5\tso\tX*?\t1\n").unwrap();
        assert!(w[0].accents.is_empty());
        assert!(!w[0].prominent());
    }

    #[test]
    fn tobi_errors() {
        assert!(matches!(parse_tobi_labels("0\t5\tso\t_\t7\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_tobi_labels("0\t5\tso\t_\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_tobi_labels("0\t5\ta\t_\t1\n3\t8\tb\t_\t1\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn tobi_round_trip() {
        let w = parse_tobi_labels("0\t10\tthe\t_\t1\n10\t30\tmarch\tL*+H,H*\t4\n").unwrap();
        assert_eq!(parse_tobi_labels(&format_tobi_labels(&w)).unwrap(), w);
    }

    #[test]
    fn ravdess_names() {
        let id = parse_ravdess_id("03-01-05-01-02-01-12.wav").unwrap();
        assert_eq!(EMOTIONS[id.emotion()], "angry");
        assert_eq!(id.emotion(), 4);
        assert_eq!(id.speaker(), 12);
        assert_eq!(parse_ravdess_id("03-01-01-01-01-01-01.wav").unwrap().emotion(), 0);
        assert!(parse_ravdess_id("a-b.wav").is_err());
        assert!(parse_ravdess_id("03-01-09-01-02-01-12.wav").is_err());
        assert_eq!(parse_ravdess_id(&id.file_name()).unwrap(), id);
    }
}
