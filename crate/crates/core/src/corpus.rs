//! Labeled sample records, the unit of KB construction and evaluation.
//!
//! A corpus file is JSONL with one [`SampleRecord`] per line.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::ingest::{raw_from_record, AddrRange, FunctionRecord, IngestError, RawFunction};
use crate::kb::Label;
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OptLevel {
    O0,
    O1,
    O2,
    O3,
    Os,
}

impl OptLevel {
    pub const ALL: [OptLevel; 5] = [OptLevel::O0, OptLevel::O1, OptLevel::O2, OptLevel::O3, OptLevel::Os];
}

impl fmt::Display for OptLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for OptLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "O0" | "o0" => Ok(OptLevel::O0),
            "O1" | "o1" => Ok(OptLevel::O1),
            "O2" | "o2" => Ok(OptLevel::O2),
            "O3" | "o3" => Ok(OptLevel::O3),
            "Os" | "os" => Ok(OptLevel::Os),
            other => Err(format!("unknown optimization level `{other}`")),
        }
    }
}

/// A function inside a sample record (sample id is implied).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFunction {
    pub name: String,
    pub address: String,
    pub lines: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_seen: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opt_level: Option<OptLevel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compiler: Option<String>,
    pub addr_range: AddrRange,
    pub functions: Vec<SampleFunction>,
}

impl SampleRecord {
    pub fn is_malicious(&self) -> bool {
        self.label == Label::Malicious
    }

    pub fn raw_functions(&self) -> Result<Vec<RawFunction>, IngestError> {
        let mut out = self
            .functions
            .iter()
            .enumerate()
            .map(|(i, f)| {
                raw_from_record(
                    FunctionRecord {
                        sample_id: self.sample_id.clone(),
                        name: f.name.clone(),
                        address: f.address.clone(),
                        lines: f.lines.clone(),
                    },
                    i + 1,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.sort_by_key(|f| f.start_address);
        if let Some(w) = out.windows(2).find(|w| w[0].start_address == w[1].start_address) {
            return Err(IngestError::DuplicateAddress {
                sample_id: self.sample_id.clone(),
                address: w[0].start_address,
            });
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), Error> {
        match (self.label, self.family.as_deref()) {
            (Label::Malicious, None | Some("")) => Err(Error::InvalidRecord(format!(
                "malicious sample `{}` has no family",
                self.sample_id
            ))),
            (Label::Benign, Some(_)) => Err(Error::InvalidRecord(format!(
                "benign sample `{}` carries a family",
                self.sample_id
            ))),
            _ => Ok(()),
        }
    }
}

pub fn read_samples(path: &Path) -> Result<Vec<SampleRecord>, Error> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidRecord(format!("{}:{}: {e}", path.display(), i + 1)))?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_samples(path: &Path, samples: &[SampleRecord]) -> Result<(), Error> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_label_consistency() {
        let mut s = SampleRecord {
            sample_id: "a".into(),
            label: Label::Malicious,
            family: None,
            first_seen: None,
            opt_level: None,
            compiler: None,
            addr_range: AddrRange::new(0x400000, 0x500000).unwrap(),
            functions: vec![],
        };
        assert!(s.validate().is_err());
        s.family = Some("zeus".into());
        assert!(s.validate().is_ok());
        s.label = Label::Benign;
        assert!(s.validate().is_err());
    }

    #[test]
    fn opt_level_parse() {
        assert_eq!("Os".parse::<OptLevel>().unwrap(), OptLevel::Os);
        assert!("O4".parse::<OptLevel>().is_err());
    }
}
