//! On-disk record format and the canonical in-memory representation.
//!
//! A record is stored as a small UTF-8 JSON header file plus a sibling
//! payload file holding exactly `sample_count` values. The payload is either
//! little-endian signed 16-bit binary (`"i16le"`) or one integer per line
//! (`"text"`). The payload file shares the header's stem with a `.dat`
//! extension. Class labels live in a separate two-column CSV with no header
//! row and LF line endings.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// The four record classes of the screening task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RecordClass {
    Normal,
    Afib,
    Other,
    Noisy,
}

impl RecordClass {
    pub const ALL: [RecordClass; 4] = [
        RecordClass::Normal,
        RecordClass::Afib,
        RecordClass::Other,
        RecordClass::Noisy,
    ];

    /// Canonical index in the fixed class order (N, A, O, ~).
    pub fn index(self) -> usize {
        match self {
            RecordClass::Normal => 0,
            RecordClass::Afib => 1,
            RecordClass::Other => 2,
            RecordClass::Noisy => 3,
        }
    }

    pub fn from_index(idx: usize) -> Option<RecordClass> {
        RecordClass::ALL.get(idx).copied()
    }

    pub fn token(self) -> &'static str {
        match self {
            RecordClass::Normal => "N",
            RecordClass::Afib => "A",
            RecordClass::Other => "O",
            RecordClass::Noisy => "~",
        }
    }

    pub fn parse(token: &str) -> Result<RecordClass> {
        match token {
            "N" => Ok(RecordClass::Normal),
            "A" => Ok(RecordClass::Afib),
            "O" => Ok(RecordClass::Other),
            "~" => Ok(RecordClass::Noisy),
            _ => Err(CoreError::UnknownClass {
                token: token.to_string(),
            }),
        }
    }
}

impl std::fmt::Display for RecordClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.token())
    }
}

impl Serialize for RecordClass {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.token())
    }
}

impl<'de> Deserialize<'de> for RecordClass {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let t = String::deserialize(d)?;
        RecordClass::parse(&t).map_err(serde::de::Error::custom)
    }
}

/// Payload encoding declared in the header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Encoding {
    #[serde(rename = "i16le")]
    I16Le,
    #[serde(rename = "text")]
    Text,
}

/// A sampled single-lead ECG record.
///
/// Immutable after construction; cheap to clone and safe to share across
/// threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    /// Sampling rate in Hz.
    pub fs: u32,
    /// Analog units per physical millivolt.
    pub gain: f64,
    pub samples: Vec<i16>,
    pub label: Option<RecordClass>,
}

impl Record {
    pub fn new(id: impl Into<String>, fs: u32, gain: f64, samples: Vec<i16>) -> Result<Record> {
        let r = Record {
            id: id.into(),
            fs,
            gain,
            samples,
            label: None,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fs == 0 {
            return Err(CoreError::InvalidRecord {
                id: self.id.clone(),
                reason: "sampling rate must be positive".into(),
            });
        }
        if !(self.gain > 0.0) {
            return Err(CoreError::InvalidRecord {
                id: self.id.clone(),
                reason: "gain must be positive".into(),
            });
        }
        if self.samples.is_empty() {
            return Err(CoreError::InvalidRecord {
                id: self.id.clone(),
                reason: "samples must be non-empty".into(),
            });
        }
        Ok(())
    }

    pub fn duration_ms(&self) -> f64 {
        1000.0 * self.samples.len() as f64 / self.fs as f64
    }

    pub fn ms_per_sample(&self) -> f64 {
        1000.0 / self.fs as f64
    }

    /// Converts a duration in milliseconds to a whole number of samples.
    pub fn samples_per_ms(&self, ms: f64) -> usize {
        (ms * self.fs as f64 / 1000.0).round() as usize
    }

    pub fn sample_to_ms(&self, idx: usize) -> f64 {
        idx as f64 * 1000.0 / self.fs as f64
    }

    /// The record with every sample negated (i16::MIN saturates).
    pub fn negated(&self) -> Record {
        Record {
            id: self.id.clone(),
            fs: self.fs,
            gain: self.gain,
            samples: self.samples.iter().map(|&s| s.saturating_neg()).collect(),
            label: self.label,
        }
    }

    /// Samples as f64, in raw analog units.
    pub fn samples_f64(&self) -> Vec<f64> {
        self.samples.iter().map(|&s| s as f64).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    id: String,
    fs: u32,
    gain: f64,
    sample_count: usize,
    encoding: Encoding,
}

fn payload_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("dat")
}

/// Reads a record from its JSON header file; the payload is the sibling
/// `.dat` file in the encoding the header declares.
pub fn read_record(path: impl AsRef<Path>) -> Result<Record> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let header: Header = serde_json::from_str(&text).map_err(|e| CoreError::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;

    let ppath = payload_path(path);
    let samples = match header.encoding {
        Encoding::I16Le => {
            let bytes = fs::read(&ppath)?;
            if bytes.len() % 2 != 0 {
                return Err(CoreError::Format {
                    path: ppath.display().to_string(),
                    reason: "odd byte count for i16le payload".into(),
                });
            }
            bytes
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]))
                .collect::<Vec<i16>>()
        }
        Encoding::Text => {
            let body = fs::read_to_string(&ppath)?;
            let mut out = Vec::new();
            for (lineno, line) in body.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                let v: i16 = line.parse().map_err(|_| CoreError::Format {
                    path: ppath.display().to_string(),
                    reason: format!("line {}: not a 16-bit integer: {line:?}", lineno + 1),
                })?;
                out.push(v);
            }
            out
        }
    };

    if samples.len() != header.sample_count {
        return Err(CoreError::LengthMismatch {
            path: ppath.display().to_string(),
            expected: header.sample_count,
            actual: samples.len(),
        });
    }

    let mut r = Record::new(header.id, header.fs, header.gain, samples)?;
    r.label = None;
    Ok(r)
}

/// Writes `r` as a header + payload pair; `read_record` inverts it
/// bit-exactly.
pub fn write_record(r: &Record, path: impl AsRef<Path>, encoding: Encoding) -> Result<()> {
    r.validate()?;
    let path = path.as_ref();
    let header = Header {
        id: r.id.clone(),
        fs: r.fs,
        gain: r.gain,
        sample_count: r.samples.len(),
        encoding,
    };
    let text = serde_json::to_string_pretty(&header).expect("header serialization");
    fs::write(path, text)?;

    let ppath = payload_path(path);
    match encoding {
        Encoding::I16Le => {
            let mut bytes = Vec::with_capacity(r.samples.len() * 2);
            for &s in &r.samples {
                bytes.extend_from_slice(&s.to_le_bytes());
            }
            fs::write(&ppath, bytes)?;
        }
        Encoding::Text => {
            let mut body = String::new();
            for &s in &r.samples {
                body.push_str(&s.to_string());
                body.push('\n');
            }
            fs::write(&ppath, body)?;
        }
    }
    Ok(())
}

/// Parsed contents of a label file: unique record ids with their classes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelFile {
    pub entries: Vec<(String, RecordClass)>,
}

impl LabelFile {
    pub fn get(&self, id: &str) -> Option<RecordClass> {
        self.entries
            .iter()
            .find(|(rid, _)| rid == id)
            .map(|&(_, c)| c)
    }
}

/// Reads a two-column `id,class` CSV (no header row).
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelFile> {
    let path = path.as_ref();
    let body = fs::read_to_string(path)?;
    let mut entries: Vec<(String, RecordClass)> = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (id, token) = line.split_once(',').ok_or_else(|| CoreError::Format {
            path: path.display().to_string(),
            reason: format!("line {}: expected `id,class`", lineno + 1),
        })?;
        let id = id.trim().to_string();
        let class = RecordClass::parse(token.trim())?;
        if entries.iter().any(|(e, _)| *e == id) {
            return Err(CoreError::DuplicateId { id });
        }
        entries.push((id, class));
    }
    Ok(LabelFile { entries })
}

/// Writes a label file in the same format `read_labels` accepts.
pub fn write_labels(labels: &LabelFile, path: impl AsRef<Path>) -> Result<()> {
    let mut body = String::new();
    for (id, class) in &labels.entries {
        body.push_str(id);
        body.push(',');
        body.push_str(class.token());
        body.push('\n');
    }
    fs::write(path, body)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn duration_matches_header_arithmetic() {
        let r = Record::new("A00001", 300, 1000.0, vec![0i16; 9000]).unwrap();
        assert_eq!(r.duration_ms(), 30_000.0);
    }

    #[test]
    fn truncated_payload_is_length_mismatch() {
        let dir = tmp();
        let r = Record::new("A00001", 300, 1000.0, vec![7i16; 9000]).unwrap();
        let hpath = dir.path().join("A00001.json");
        write_record(&r, &hpath, Encoding::I16Le).unwrap();
        let ppath = hpath.with_extension("dat");
        let bytes = fs::read(&ppath).unwrap();
        fs::write(&ppath, &bytes[..bytes.len() - 2]).unwrap();
        match read_record(&hpath) {
            Err(CoreError::LengthMismatch {
                expected, actual, ..
            }) => {
                assert_eq!(expected, 9000);
                assert_eq!(actual, 8999);
            }
            other => panic!("expected length mismatch, got {other:?}"),
        }
    }

    #[test]
    fn zero_fs_rejected() {
        assert!(Record::new("x", 0, 1.0, vec![1]).is_err());
    }

    #[test]
    fn single_sample_and_extremes_round_trip() {
        let dir = tmp();
        for (i, samples) in [vec![0i16], vec![i16::MAX], vec![i16::MIN, 0, i16::MAX]]
            .into_iter()
            .enumerate()
        {
            let r = Record::new(format!("R{i}"), 300, 1.0, samples).unwrap();
            let hpath = dir.path().join(format!("R{i}.json"));
            write_record(&r, &hpath, Encoding::I16Le).unwrap();
            assert_eq!(read_record(&hpath).unwrap(), r);
        }
    }

    #[test]
    fn labels_parse_and_reject() {
        let dir = tmp();
        let p = dir.path().join("labels.csv");
        fs::write(&p, "A00001,N\nA00002,A\n").unwrap();
        let lf = read_labels(&p).unwrap();
        assert_eq!(lf.entries.len(), 2);
        assert_eq!(lf.get("A00002"), Some(RecordClass::Afib));

        fs::write(&p, "A00001,N\nA00001,A\n").unwrap();
        assert!(matches!(read_labels(&p), Err(CoreError::DuplicateId { .. })));

        fs::write(&p, "A00001,X\n").unwrap();
        assert!(matches!(read_labels(&p), Err(CoreError::UnknownClass { .. })));
    }

    proptest! {
        // Round trip write∘read is the identity, for both encodings.
        #[test]
        fn round_trip_identity(
            samples in proptest::collection::vec(any::<i16>(), 1..4000),
            fs_hz in 1u32..2000,
            gain in 1.0f64..4000.0,
            text in any::<bool>(),
        ) {
            let dir = tmp();
            let r = Record::new("P0", fs_hz, gain, samples).unwrap();
            let hpath = dir.path().join("P0.json");
            let enc = if text { Encoding::Text } else { Encoding::I16Le };
            write_record(&r, &hpath, enc).unwrap();
            let back = read_record(&hpath).unwrap();
            prop_assert_eq!(back, r);
        }
    }
}
