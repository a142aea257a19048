use std::collections::HashMap;
use std::io::{BufRead, Write};

use super::{EvalError, Qrels};
use crate::ranking::{RankedEntry, RankedList};

fn format_err(line: usize, reason: impl Into<String>) -> EvalError {
    EvalError::Format {
        line,
        reason: reason.into(),
    }
}

/// Reads a six-column run file (`qid Q0 docid rank score tag`).
///
/// Queries keep their first-appearance order; entries within a query are
/// ordered by the rank column. The tag becomes the list's provenance.
pub fn read_run<R: BufRead>(reader: R) -> Result<Vec<RankedList>, EvalError> {
    let mut lists: Vec<(RankedList, Vec<usize>)> = Vec::new();
    let mut by_qid: HashMap<String, usize> = HashMap::new();
    let mut seen: HashMap<(usize, String), usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 6 {
            return Err(format_err(line_no, format!("expected 6 columns, found {}", cols.len())));
        }
        let rank: usize = cols[3]
            .parse()
            .map_err(|_| format_err(line_no, format!("non-numeric rank `{}`", cols[3])))?;
        let score: f64 = cols[4]
            .parse()
            .map_err(|_| format_err(line_no, format!("non-numeric score `{}`", cols[4])))?;
        let idx = *by_qid.entry(cols[0].to_string()).or_insert_with(|| {
            lists.push((RankedList::new(cols[0], cols[5]), Vec::new()));
            lists.len() - 1
        });
        if let Some(prev) = seen.insert((idx, cols[2].to_string()), line_no) {
            return Err(format_err(
                line_no,
                format!(
                    "document `{}` already listed for query `{}` on line {prev}",
                    cols[2], cols[0]
                ),
            ));
        }
        let (list, ranks) = &mut lists[idx];
        list.entries.push(RankedEntry {
            docid: cols[2].to_string(),
            score,
        });
        ranks.push(rank);
    }
    Ok(lists
        .into_iter()
        .map(|(mut list, ranks)| {
            let mut paired: Vec<(usize, RankedEntry)> = ranks.into_iter().zip(list.entries).collect();
            paired.sort_by_key(|(r, _)| *r);
            list.entries = paired.into_iter().map(|(_, e)| e).collect();
            list
        })
        .collect())
}

fn run_tag(provenance: &str) -> String {
    let tag: String = provenance
        .chars()
        .map(|c| if c.is_whitespace() { '_' } else { c })
        .collect();
    if tag.is_empty() {
        "run".to_string()
    } else {
        tag
    }
}

/// Writes lists in order with 1-based ranks, scores to six decimals, and the
/// list's provenance as the run tag.
pub fn write_run<W: Write>(mut writer: W, lists: &[RankedList]) -> std::io::Result<()> {
    for list in lists {
        let tag = run_tag(&list.provenance);
        for (i, e) in list.entries.iter().enumerate() {
            writeln!(writer, "{} Q0 {} {} {:.6} {}", list.qid, e.docid, i + 1, e.score, tag)?;
        }
    }
    writer.flush()
}

/// Reads `qid iter docid grade` lines. Grades must be non-negative integers and
/// each (qid, docid) pair may be judged once.
pub fn read_qrels<R: BufRead>(reader: R) -> Result<Qrels, EvalError> {
    let mut qrels = Qrels::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 4 {
            return Err(format_err(line_no, format!("expected 4 columns, found {}", cols.len())));
        }
        let grade: u32 = cols[3]
            .parse()
            .map_err(|_| format_err(line_no, format!("invalid grade `{}`", cols[3])))?;
        if qrels.insert(cols[0], cols[2], grade).is_some() {
            return Err(format_err(
                line_no,
                format!("duplicate judgment for ({}, {})", cols[0], cols[2]),
            ));
        }
    }
    Ok(qrels)
}

/// Writes qrels sorted by query then document id.
pub fn write_qrels<W: Write>(mut writer: W, qrels: &Qrels) -> std::io::Result<()> {
    let mut rows: Vec<_> = qrels.iter().collect();
    rows.sort();
    for (q, d, g) in rows {
        writeln!(writer, "{q} 0 {d} {g}")?;
    }
    writer.flush()
}
