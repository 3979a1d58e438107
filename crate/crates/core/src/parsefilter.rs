//! Turning raw generations into candidate interactions.
//!
//! IDs are pulled out of free text as decimal digit runs, kept only when they
//! name a known item, stripped of items the user already has, and accepted
//! only when enough distinct IDs remain.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetError, IdMap, InteractionDataset, ItemIdx, UserIdx};

/// Longest digit run that always fits in a `u64`.
const MAX_DIGITS: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionReason {
    None,
    NoValidIds,
    BelowMultiplicity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedCandidates {
    pub user: UserIdx,
    pub raw_text: String,
    pub extracted_ids: Vec<u64>,
    pub valid_ids: Vec<u64>,
    /// Distinct known items dropped because the user already has them.
    pub duplicates_removed: usize,
    pub accepted: bool,
    pub rejection_reason: RejectionReason,
}

impl ParsedCandidates {
    /// Internal indices of `valid_ids`.
    pub fn valid_items(&self, items: &IdMap) -> Vec<ItemIdx> {
        self.valid_ids
            .iter()
            .map(|&id| items.get(id).expect("valid ids are known items"))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub total: usize,
    pub accepted: usize,
    pub rejected_invalid: usize,
    pub rejected_multiplicity: usize,
    pub duplicate_removed: usize,
}

impl FilterReport {
    pub fn record(&mut self, c: &ParsedCandidates) {
        self.total += 1;
        self.duplicate_removed += c.duplicates_removed;
        match c.rejection_reason {
            RejectionReason::None => self.accepted += 1,
            RejectionReason::NoValidIds => self.rejected_invalid += 1,
            RejectionReason::BelowMultiplicity => self.rejected_multiplicity += 1,
        }
    }
}

/// Every maximal ASCII digit run, in order, duplicates kept. Runs longer
/// than 18 digits are skipped.
pub fn extract_item_ids(raw_text: &str) -> Vec<u64> {
    let mut out = Vec::new();
    let bytes = raw_text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i - start <= MAX_DIGITS {
                out.push(raw_text[start..i].parse().expect("short digit run parses"));
            }
        } else {
            i += 1;
        }
    }
    out
}

/// Keeps IDs in the item set, drops the user's known items, dedups by first
/// occurrence and accepts when at least `min_valid` distinct IDs remain.
pub fn apply_filters(
    user: UserIdx,
    raw_text: &str,
    extracted_ids: Vec<u64>,
    items: &IdMap,
    history: &HashSet<ItemIdx>,
    min_valid: usize,
) -> ParsedCandidates {
    let mut seen = HashSet::new();
    let mut dup_seen = HashSet::new();
    let mut valid_ids = Vec::new();
    for &id in &extracted_ids {
        let Some(idx) = items.get(id) else { continue };
        if history.contains(&idx) {
            dup_seen.insert(idx);
        } else if seen.insert(idx) {
            valid_ids.push(id);
        }
    }
    let rejection_reason = if valid_ids.is_empty() {
        RejectionReason::NoValidIds
    } else if valid_ids.len() < min_valid {
        RejectionReason::BelowMultiplicity
    } else {
        RejectionReason::None
    };
    ParsedCandidates {
        user,
        raw_text: raw_text.to_string(),
        extracted_ids,
        valid_ids,
        duplicates_removed: dup_seen.len(),
        accepted: rejection_reason == RejectionReason::None,
        rejection_reason,
    }
}

/// Extraction followed by [`apply_filters`] against the user's train items.
pub fn parse_and_filter(
    user: UserIdx,
    raw_text: &str,
    train: &InteractionDataset,
    min_valid: usize,
) -> ParsedCandidates {
    apply_filters(
        user,
        raw_text,
        extract_item_ids(raw_text),
        &train.ids().items,
        &train.user_item_set(user),
        min_valid,
    )
}

/// One line of the generation log. The filter fields are absent until the
/// filter stage fills them in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub user_id: u64,
    pub prompt: String,
    pub raw_output: String,
    pub backend: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extracted_ids: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_ids: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection_reason: Option<RejectionReason>,
}

impl GenerationRecord {
    pub fn new(user_id: u64, prompt: String, raw_output: String, backend: String) -> Self {
        Self {
            user_id,
            prompt,
            raw_output,
            backend,
            error: None,
            extracted_ids: None,
            valid_ids: None,
            accepted: None,
            rejection_reason: None,
        }
    }

    pub fn fill(&mut self, c: &ParsedCandidates) {
        self.extracted_ids = Some(c.extracted_ids.clone());
        self.valid_ids = Some(c.valid_ids.clone());
        self.accepted = Some(c.accepted);
        self.rejection_reason = Some(c.rejection_reason);
    }
}

/// Filters every record against `train`, filling the record fields in place.
/// Records carrying a backend error, or naming an unknown user, count as
/// rejected with no valid IDs.
pub fn filter_records(
    records: &mut [GenerationRecord],
    train: &InteractionDataset,
    min_valid: usize,
) -> (Vec<ParsedCandidates>, FilterReport) {
    let mut report = FilterReport::default();
    let mut accepted = Vec::new();
    for rec in records.iter_mut() {
        let user = train.ids().users.get(rec.user_id);
        let c = match (user, &rec.error) {
            (Some(u), None) => parse_and_filter(u, &rec.raw_output, train, min_valid),
            _ => ParsedCandidates {
                user: user.unwrap_or(usize::MAX),
                raw_text: rec.raw_output.clone(),
                extracted_ids: extract_item_ids(&rec.raw_output),
                valid_ids: Vec::new(),
                duplicates_removed: 0,
                accepted: false,
                rejection_reason: RejectionReason::NoValidIds,
            },
        };
        rec.fill(&c);
        report.record(&c);
        if c.accepted {
            accepted.push(c);
        }
    }
    (accepted, report)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_records(records: &[GenerationRecord], path: &Path) -> Result<(), DatasetError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).expect("record serializes");
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_records(path: &Path) -> Result<Vec<GenerationRecord>, DatasetError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
                source_name: path.display().to_string(),
                line: n + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}
