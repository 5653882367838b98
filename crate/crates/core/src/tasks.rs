//! Synthetic datasets: sequence reversal and a small needle-in-a-haystack
//! context builder with span annotations.

use std::io::{BufRead, Write};
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;

/// Closed toy vocabulary shared by every task.
pub mod vocab {
    use super::TokenId;

    /// Stand-ins for the four words of "Reverse the following words:".
    pub const INSTRUCTION: [TokenId; 4] = [0, 1, 2, 3];
    /// Ends the source sequence inside a reversal prompt.
    pub const SEP: TokenId = 4;
    /// Marks the question at the end of a retrieval context.
    pub const QUERY: TokenId = 5;
    pub const FIRST_SYMBOL: TokenId = 6;
    pub const NUM_SYMBOLS: usize = 26;
    pub const SIZE: usize = FIRST_SYMBOL as usize + NUM_SYMBOLS;

    /// The 26 content symbols `A`..`Z`.
    pub fn symbols() -> Vec<TokenId> {
        (FIRST_SYMBOL..FIRST_SYMBOL + NUM_SYMBOLS as TokenId).collect()
    }

    pub fn token_name(id: TokenId) -> String {
        match id {
            0 => "Reverse".into(),
            1 => "the".into(),
            2 => "following".into(),
            3 => "words:".into(),
            SEP => "<sep>".into(),
            QUERY => "<query>".into(),
            id if (id as usize) < SIZE => ((b'A' + (id - FIRST_SYMBOL) as u8) as char).to_string(),
            id => format!("<{id}>"),
        }
    }
}

/// Prompt tokens surrounding a source sequence of length `len`.
pub const fn reversal_prompt_len(len: usize) -> usize {
    vocab::INSTRUCTION.len() + len + 1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReversalExample {
    /// Instruction, source sequence, separator.
    pub prompt: Vec<TokenId>,
    /// Source sequence reversed.
    pub target: Vec<TokenId>,
    pub length: usize,
}

impl ReversalExample {
    pub fn new(source: &[TokenId]) -> Self {
        let mut prompt = vocab::INSTRUCTION.to_vec();
        prompt.extend_from_slice(source);
        prompt.push(vocab::SEP);
        Self {
            prompt,
            target: source.iter().rev().copied().collect(),
            length: source.len(),
        }
    }

    pub fn source(&self) -> &[TokenId] {
        let start = vocab::INSTRUCTION.len();
        &self.prompt[start..start + self.length]
    }

    /// Total tokens once the target is appended.
    pub fn total_len(&self) -> usize {
        self.prompt.len() + self.target.len()
    }
}

fn check_reversal_params(len_range: (usize, usize), symbols: &[TokenId], max_seq_len: usize) -> Result<()> {
    let (lo, hi) = len_range;
    if lo < 2 || lo > hi {
        return Err(Error::config("len_range", format!("need 2 ≤ lo ≤ hi, got [{lo}, {hi}]")));
    }
    if symbols.is_empty() {
        return Err(Error::config("vocab", "symbol set is empty"));
    }
    let need = reversal_prompt_len(hi) + hi;
    if need > max_seq_len {
        return Err(Error::config(
            "len_range",
            format!("length {hi} needs {need} tokens, above the max_seq_len budget of {max_seq_len}"),
        ));
    }
    Ok(())
}

fn random_source(rng: &mut ChaCha8Rng, len: usize, symbols: &[TokenId]) -> Vec<TokenId> {
    (0..len).map(|_| *symbols.choose(rng).expect("non-empty")).collect()
}

/// `count` examples with lengths drawn uniformly from `len_range` (inclusive).
pub fn gen_reversal_split(
    seed: u64,
    count: usize,
    len_range: (usize, usize),
    symbols: &[TokenId],
    max_seq_len: usize,
) -> Result<Vec<ReversalExample>> {
    check_reversal_params(len_range, symbols, max_seq_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let len = rng.gen_range(len_range.0..=len_range.1);
            ReversalExample::new(&random_source(&mut rng, len, symbols))
        })
        .collect())
}

/// `per_length` examples for every length in `len_range`, ordered by length.
pub fn gen_reversal_per_length(
    seed: u64,
    per_length: usize,
    len_range: (usize, usize),
    symbols: &[TokenId],
    max_seq_len: usize,
) -> Result<Vec<ReversalExample>> {
    check_reversal_params(len_range, symbols, max_seq_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_length * (len_range.1 - len_range.0 + 1));
    for len in len_range.0..=len_range.1 {
        for _ in 0..per_length {
            out.push(ReversalExample::new(&random_source(&mut rng, len, symbols)));
        }
    }
    Ok(out)
}

/// Index ranges partitioning a retrieval context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanAnnotation {
    pub needle: Range<usize>,
    pub query: Range<usize>,
    pub rest: Vec<Range<usize>>,
}

impl SpanAnnotation {
    /// Spans are non-empty, pairwise disjoint and cover exactly `0..len`.
    pub fn validate(&self, len: usize) -> Result<()> {
        let mut all: Vec<&Range<usize>> = std::iter::once(&self.needle)
            .chain(std::iter::once(&self.query))
            .chain(&self.rest)
            .collect();
        if all.iter().any(|r| r.start >= r.end) {
            return Err(Error::Invalid("span annotation contains an empty span".into()));
        }
        all.sort_by_key(|r| r.start);
        let mut cursor = 0;
        for r in all {
            if r.start < cursor {
                return Err(Error::Invalid(format!("span {r:?} overlaps an earlier span")));
            }
            if r.start > cursor {
                return Err(Error::Invalid(format!("indices {cursor}..{} are not covered", r.start)));
            }
            cursor = r.end;
        }
        if cursor != len {
            return Err(Error::Invalid(format!("spans cover 0..{cursor}, context has {len} tokens")));
        }
        Ok(())
    }

    pub fn rest_len(&self) -> usize {
        self.rest.iter().map(|r| r.len()).sum()
    }

    pub fn context_len(&self) -> usize {
        self.needle.len() + self.query.len() + self.rest_len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NiahExample {
    pub context: Vec<TokenId>,
    pub spans: SpanAnnotation,
    pub answer: Vec<TokenId>,
}

/// Build `Rest … Needle … Rest … Query` with the needle at a seed-chosen
/// offset and at least one filler token on each side of it.
pub fn gen_niah(seed: u64, context_len: usize, needle_payload: &[TokenId], filler: &[TokenId]) -> Result<NiahExample> {
    if needle_payload.is_empty() {
        return Err(Error::config("needle_payload", "must contain at least one token"));
    }
    if filler.is_empty() {
        return Err(Error::config("filler", "filler vocabulary is empty"));
    }
    let query_len = 1;
    let min_len = needle_payload.len() + query_len + 2;
    if context_len < min_len {
        return Err(Error::config(
            "needle_payload",
            format!(
                "payload of {} tokens does not fit a context of {context_len} (needs at least {min_len})",
                needle_payload.len()
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let filler_total = context_len - needle_payload.len() - query_len;
    let before = rng.gen_range(1..filler_total);
    let after = filler_total - before;

    let mut context = Vec::with_capacity(context_len);
    context.extend((0..before).map(|_| *filler.choose(&mut rng).unwrap()));
    let needle = context.len()..context.len() + needle_payload.len();
    context.extend_from_slice(needle_payload);
    let rest_after = context.len()..context.len() + after;
    context.extend((0..after).map(|_| *filler.choose(&mut rng).unwrap()));
    let query = context.len()..context.len() + query_len;
    context.push(vocab::QUERY);

    Ok(NiahExample {
        context,
        spans: SpanAnnotation {
            needle,
            query,
            rest: vec![0..before, rest_after],
        },
        answer: needle_payload.to_vec(),
    })
}

/// Many retrieval contexts with random payloads drawn from `symbols`.
pub fn gen_niah_split(
    seed: u64,
    count: usize,
    context_len: usize,
    payload_len: usize,
    symbols: &[TokenId],
) -> Result<Vec<NiahExample>> {
    if payload_len == 0 {
        return Err(Error::config("payload_len", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let payload = random_source(&mut rng, payload_len, symbols);
            gen_niah(rng.gen(), context_len, &payload, symbols)
        })
        .collect()
}

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Reversal,
    Niah,
}

/// One JSON line of a dataset dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub schema_version: u32,
    pub task: TaskKind,
    pub prompt_ids: Vec<TokenId>,
    pub target_ids: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spans: Option<SpanAnnotation>,
}

impl From<&ReversalExample> for DatasetRecord {
    fn from(e: &ReversalExample) -> Self {
        Self {
            schema_version: DATASET_SCHEMA_VERSION,
            task: TaskKind::Reversal,
            prompt_ids: e.prompt.clone(),
            target_ids: e.target.clone(),
            length: Some(e.length),
            spans: None,
        }
    }
}

impl From<&NiahExample> for DatasetRecord {
    fn from(e: &NiahExample) -> Self {
        Self {
            schema_version: DATASET_SCHEMA_VERSION,
            task: TaskKind::Niah,
            prompt_ids: e.context.clone(),
            target_ids: e.answer.clone(),
            length: None,
            spans: Some(e.spans.clone()),
        }
    }
}

impl DatasetRecord {
    /// Length label used for bucketed evaluation.
    pub fn length_label(&self) -> usize {
        self.length.unwrap_or(self.target_ids.len())
    }

    /// The retrieval example this record encodes, if it carries spans.
    pub fn to_niah(&self) -> Option<NiahExample> {
        Some(NiahExample {
            context: self.prompt_ids.clone(),
            spans: self.spans.clone()?,
            answer: self.target_ids.clone(),
        })
    }
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[DatasetRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<DatasetRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Invalid(format!("dataset line {}: {e}", i + 1)))?;
        if rec.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::Invalid(format!(
                "dataset line {}: schema version {} (expected {DATASET_SCHEMA_VERSION})",
                i + 1,
                rec.schema_version
            )));
        }
        if let Some(spans) = &rec.spans {
            spans
                .validate(rec.prompt_ids.len())
                .map_err(|e| Error::Invalid(format!("dataset line {}: {e}", i + 1)))?;
        }
        out.push(rec);
    }
    Ok(out)
}
