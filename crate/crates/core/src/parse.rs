//! Parsing of model rankings and pairwise verdicts.
//!
//! A listwise response is scanned left to right for bracketed integers
//! `[k]`; any other text (separators, prose) is ignored. The response is then
//! classified, with the first matching rule winning:
//!
//! 1. `WrongFormat`: no identifier in `1..=m`, or any identifier outside it.
//! 2. `Repetition`: some identifier occurs more than once.
//! 3. `Missing`: fewer than `m` distinct identifiers.
//! 4. `Ok`.
//!
//! Repair always yields a permutation of `1..=m`: `WrongFormat` falls back to
//! the identity, otherwise identifiers are deduplicated (first occurrence
//! kept) and the missing ones appended in ascending order.

use std::io::Write;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Ok,
    WrongFormat,
    Repetition,
    Missing,
}

impl Classification {
    pub fn is_ok(self) -> bool {
        self == Classification::Ok
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedRanking {
    /// In-range identifiers in appearance order.
    pub extracted: Vec<usize>,
    pub classification: Classification,
    /// Total permutation of `1..=m`.
    pub repaired: Vec<usize>,
    pub raw: String,
}

/// Yields every `[digits]` in `raw`. Values too large for `u64` come back as `None`.
fn bracketed_integers(raw: &str) -> impl Iterator<Item = Option<u64>> + '_ {
    let bytes = raw.as_bytes();
    let mut i = 0;
    std::iter::from_fn(move || {
        while i < bytes.len() {
            if bytes[i] == b'[' {
                let start = i + 1;
                let mut j = start;
                while j < bytes.len() && bytes[j].is_ascii_digit() {
                    j += 1;
                }
                if j > start && j < bytes.len() && bytes[j] == b']' {
                    i = j + 1;
                    return Some(raw[start..j].parse::<u64>().ok());
                }
            }
            i += 1;
        }
        None
    })
}

pub fn parse_ranking(raw: &str, m: usize) -> ParsedRanking {
    let mut extracted = Vec::new();
    let mut out_of_range = false;
    for id in bracketed_integers(raw) {
        match id {
            Some(k) if k >= 1 && k <= m as u64 => extracted.push(k as usize),
            _ => out_of_range = true,
        }
    }

    let mut seen = vec![false; m + 1];
    let mut deduped = Vec::with_capacity(m);
    let mut repeated = false;
    for &k in &extracted {
        if seen[k] {
            repeated = true;
        } else {
            seen[k] = true;
            deduped.push(k);
        }
    }

    let classification = if out_of_range || extracted.is_empty() {
        Classification::WrongFormat
    } else if repeated {
        Classification::Repetition
    } else if deduped.len() < m {
        Classification::Missing
    } else {
        Classification::Ok
    };

    let repaired = if classification == Classification::WrongFormat {
        (1..=m).collect()
    } else {
        deduped.extend((1..=m).filter(|&k| !seen[k]));
        deduped
    };

    ParsedRanking {
        extracted,
        classification,
        repaired,
        raw: raw.to_string(),
    }
}

/// Renders a 1-based permutation as `[a] > [b] > ...`.
pub fn render_ranking(order: &[usize]) -> String {
    order.iter().map(|k| format!("[{k}]")).collect::<Vec<_>>().join(" > ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preference {
    A,
    B,
    Unparseable,
}

/// The first standalone `A` or `B` token, case-insensitive, decides.
pub fn parse_pairwise(raw: &str) -> Preference {
    raw.split(|c: char| !c.is_alphanumeric())
        .find_map(|tok| match tok {
            "A" | "a" => Some(Preference::A),
            "B" | "b" => Some(Preference::B),
            _ => None,
        })
        .unwrap_or(Preference::Unparseable)
}

/// Per-category response counts, one row of the malformedness report.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MalformedCounts {
    pub ok: u64,
    pub wrong_format: u64,
    pub repetition: u64,
    pub missing: u64,
}

impl MalformedCounts {
    pub fn record(&mut self, c: Classification) {
        match c {
            Classification::Ok => self.ok += 1,
            Classification::WrongFormat => self.wrong_format += 1,
            Classification::Repetition => self.repetition += 1,
            Classification::Missing => self.missing += 1,
        }
    }

    pub fn merge(&mut self, other: &MalformedCounts) {
        self.ok += other.ok;
        self.wrong_format += other.wrong_format;
        self.repetition += other.repetition;
        self.missing += other.missing;
    }

    pub fn total(&self) -> u64 {
        self.ok + self.wrong_format + self.repetition + self.missing
    }

    pub fn malformed(&self) -> u64 {
        self.total() - self.ok
    }
}

impl FromIterator<Classification> for MalformedCounts {
    fn from_iter<I: IntoIterator<Item = Classification>>(iter: I) -> Self {
        let mut counts = Self::default();
        for c in iter {
            counts.record(c);
        }
        counts
    }
}

/// Writes `run_tag,ok,wrong_format,repetition,missing,total` rows with a header.
pub fn write_malformed_csv<W: Write>(writer: W, rows: &[(String, MalformedCounts)]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["run_tag", "ok", "wrong_format", "repetition", "missing", "total"])?;
    for (tag, c) in rows {
        w.write_record([
            tag.clone(),
            c.ok.to_string(),
            c.wrong_format.to_string(),
            c.repetition.to_string(),
            c.missing.to_string(),
            c.total().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
