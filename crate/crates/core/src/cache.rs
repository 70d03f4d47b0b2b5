//! On-disk feature cache: a directory of per-utterance records plus a
//! manifest.
//!
//! Record layout (`<id>.feat`, all little-endian):
//!
//! ```text
//! 8 bytes   magic "MPMFEAT\0"
//! u32       format version (1)
//! u32       id length L, then L bytes of UTF-8 id
//! f64       hop_seconds
//! u64       num_frames N
//! f32 x N   normalised pitch
//! f32 x N   normalised energy
//! f32 x N   pitch before normalisation (0 where unvoiced)
//! u8  x N   voice activity
//! u32       number of CWT scales S (0 when absent)
//! f64 x S   scales
//! f32 x N*3S  CWT responses, frame-major
//! ```
//!
//! `manifest.tsv` lists `id<TAB>duration_seconds<TAB>num_frames`, one line
//! per record, after a `#` header line.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::cwt::CwtFeatures;
use crate::error::{Error, Result};
use crate::signal::ProsodyTrack;

const MAGIC: &[u8; 8] = b"MPMFEAT\0";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.tsv";
const RECORD_EXT: &str = "feat";

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub track: ProsodyTrack,
    pub cwt: Option<CwtFeatures>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub duration_seconds: f64,
    pub num_frames: usize,
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
    if ok {
        Ok(())
    } else {
        Err(Error::Cache(format!("utterance id `{id}` is not a safe file name")))
    }
}

pub fn encode_record(rec: &FeatureRecord) -> Result<Vec<u8>> {
    check_id(&rec.id)?;
    let t = &rec.track;
    let n = t.num_frames();
    let mut out = Vec::with_capacity(32 + rec.id.len() + n * 13);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(rec.id.len() as u32).to_le_bytes());
    out.extend_from_slice(rec.id.as_bytes());
    out.extend_from_slice(&t.hop_seconds.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for v in t.pitch.iter().chain(&t.energy).chain(&t.raw_pitch) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&t.vad);
    match &rec.cwt {
        None => out.extend_from_slice(&0u32.to_le_bytes()),
        Some(c) => {
            if c.num_frames != n || c.data.len() != n * c.dim() {
                return Err(Error::Cache(format!("CWT block of `{}` does not match the track", rec.id)));
            }
            out.extend_from_slice(&(c.scales.len() as u32).to_le_bytes());
            for s in &c.scales {
                out.extend_from_slice(&s.to_le_bytes());
            }
            for v in &c.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Cache("record is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::Cache("record is truncated".into()))?;
        Ok(self.take(len)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect())
    }
}

pub fn decode_record(bytes: &[u8]) -> Result<FeatureRecord> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Cache("not a feature record".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Cache(format!("unsupported record version {version}")));
    }
    let id_len = r.u32()? as usize;
    let id = String::from_utf8(r.take(id_len)?.to_vec()).map_err(|_| Error::Cache("id is not UTF-8".into()))?;
    let hop = r.f64()?;
    let n = r.u64()? as usize;
    let pitch = r.f32s(n)?;
    let energy = r.f32s(n)?;
    let raw_pitch = r.f32s(n)?;
    let vad = r.take(n)?.to_vec();
    let track = ProsodyTrack::new(pitch, energy, vad, raw_pitch, hop)?;
    let num_scales = r.u32()? as usize;
    let cwt = if num_scales == 0 {
        None
    } else {
        let scales = (0..num_scales).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let data = r.f32s(n * 3 * num_scales)?;
        Some(CwtFeatures { num_frames: n, scales, data })
    };
    if r.pos != bytes.len() {
        return Err(Error::Cache("trailing bytes after record".into()));
    }
    Ok(FeatureRecord { id, track, cwt })
}

/// A directory of feature records.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(FeatureCache { dir })
    }

    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let manifest = dir.join(MANIFEST_FILE);
        if !manifest.is_file() {
            return Err(Error::MissingArtifact { stage: "features".into(), path: manifest });
        }
        Ok(FeatureCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn record_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.{RECORD_EXT}"))
    }

    pub fn write(&self, rec: &FeatureRecord) -> Result<()> {
        let bytes = encode_record(rec)?;
        let path = self.record_path(&rec.id);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    pub fn read(&self, id: &str) -> Result<FeatureRecord> {
        check_id(id)?;
        let path = self.record_path(id);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let rec = decode_record(&bytes)?;
        if rec.id != id {
            return Err(Error::Cache(format!("record {} holds id `{}`", path.display(), rec.id)));
        }
        Ok(rec)
    }

    /// Write every record and a manifest listing them in the given order.
    pub fn write_all(&self, records: &[FeatureRecord]) -> Result<()> {
        for r in records {
            self.write(r)?;
        }
        let entries: Vec<ManifestEntry> = records
            .iter()
            .map(|r| ManifestEntry {
                id: r.id.clone(),
                duration_seconds: r.track.duration_seconds(),
                num_frames: r.track.num_frames(),
            })
            .collect();
        self.write_manifest(&entries)
    }

    pub fn write_manifest(&self, entries: &[ManifestEntry]) -> Result<()> {
        let path = self.dir.join(MANIFEST_FILE);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut text = String::from("# id\tduration_seconds\tnum_frames\n");
        for e in entries {
            text.push_str(&format!("{}\t{}\t{}\n", e.id, e.duration_seconds, e.num_frames));
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    pub fn manifest(&self) -> Result<Vec<ManifestEntry>> {
        let path = self.dir.join(MANIFEST_FILE);
        let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: &str| Error::Parse { line: i + 1, msg: msg.to_string() };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(parse_err("expected 3 tab-separated columns"));
            }
            out.push(ManifestEntry {
                id: cols[0].to_string(),
                duration_seconds: cols[1].parse().map_err(|_| parse_err("bad duration"))?,
                num_frames: cols[2].parse().map_err(|_| parse_err("bad frame count"))?,
            });
        }
        Ok(out)
    }

    /// Every record listed in the manifest, in manifest order.
    pub fn read_all(&self) -> Result<Vec<FeatureRecord>> {
        self.manifest()?.iter().map(|e| self.read(&e.id)).collect()
    }
}
