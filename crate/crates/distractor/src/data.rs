//! Cloze instances, token normalization, JSONL ingestion, and the closed
//! distractor vocabulary.
//!
//! Datasets arrive as JSONL, one object per line:
//! `{"id": ..., "context": ..., "answer": ..., "distractors": [...]}`.
//! Parsing normalizes tokens (trim + case fold by default) and rewrites
//! whatever blank spelling the source uses (underscore runs, the word
//! "blank", or an explicit `[BLANK]`) to the canonical marker. A valid
//! instance has exactly one blank, a non-empty answer, and pairwise-distinct
//! gold distractors none of which equals the answer.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Canonical blank marker every normalized context contains exactly once.
pub const BLANK_MARKER: &str = "[BLANK]";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("instance {id}: context contains no blank marker")]
    NoBlank { id: String },
    #[error("instance {id}: context contains {count} blank markers, expected exactly 1")]
    MultipleBlanks { id: String, count: usize },
    #[error("instance {id}: answer {answer:?} also appears among the gold distractors")]
    AnswerInGold { id: String, answer: String },
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: Box<DataError>,
    },
}

/// Source spellings of the blank slot that get rewritten to [`BLANK_MARKER`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlankStyle {
    /// One or more underscores, e.g. `____`.
    UnderscoreRun,
    /// The standalone word `blank` (any case).
    BlankWord,
    /// A literal `[BLANK]` (any case).
    Canonical,
}

/// How raw tokens and contexts are normalized during parsing.
///
/// Token identity everywhere downstream (filtering, deduplication, metric
/// matching) is the normalized form produced here, so comparisons are
/// case-insensitive under the default policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationPolicy {
    /// Lowercase tokens and contexts. Default: true.
    pub case_fold: bool,
    /// Strip surrounding whitespace. Default: true.
    pub trim: bool,
    /// Blank spellings accepted in source contexts. Default: all styles.
    pub blank_markers: Vec<BlankStyle>,
}

impl Default for NormalizationPolicy {
    fn default() -> Self {
        Self {
            case_fold: true,
            trim: true,
            blank_markers: vec![
                BlankStyle::UnderscoreRun,
                BlankStyle::BlankWord,
                BlankStyle::Canonical,
            ],
        }
    }
}

impl NormalizationPolicy {
    fn style_mask(&self) -> usize {
        self.blank_markers.iter().fold(0, |mask, style| {
            mask | match style {
                BlankStyle::UnderscoreRun => 1,
                BlankStyle::BlankWord => 2,
                BlankStyle::Canonical => 4,
            }
        })
    }
}

/// Normalizes a single token under the policy. Idempotent.
pub fn normalize_token(raw: &str, policy: &NormalizationPolicy) -> String {
    let trimmed = if policy.trim { raw.trim() } else { raw };
    if policy.case_fold {
        trimmed.to_lowercase()
    } else {
        trimmed.to_string()
    }
}

/// One marker regex per accepted-style combination; compiled on first use.
fn marker_regex(mask: usize) -> Option<&'static Regex> {
    static CACHE: [OnceLock<Option<Regex>>; 8] = [const { OnceLock::new() }; 8];
    CACHE[mask & 7]
        .get_or_init(|| {
            let mut alts = Vec::new();
            // The canonical spelling goes first so `[blank]` is consumed whole
            // rather than having its inner word matched by the word rule.
            if mask & 4 != 0 {
                alts.push(r"\[(?i:blank)\]");
            }
            if mask & 1 != 0 {
                alts.push(r"_+");
            }
            if mask & 2 != 0 {
                alts.push(r"\b(?i:blank)\b");
            }
            if alts.is_empty() {
                None
            } else {
                Some(Regex::new(&alts.join("|")).expect("marker pattern is valid"))
            }
        })
        .as_ref()
}

/// Normalizes a context and rewrites accepted blank spellings to the
/// canonical marker. Fails unless exactly one marker remains.
pub fn normalize_context(
    raw: &str,
    policy: &NormalizationPolicy,
    id: &str,
) -> Result<String, DataError> {
    let trimmed = if policy.trim { raw.trim() } else { raw };
    let folded = if policy.case_fold {
        trimmed.to_lowercase()
    } else {
        trimmed.to_string()
    };
    let rewritten = match marker_regex(policy.style_mask()) {
        Some(re) => re.replace_all(&folded, BLANK_MARKER).into_owned(),
        None => folded,
    };
    match rewritten.matches(BLANK_MARKER).count() {
        0 => Err(DataError::NoBlank { id: id.to_string() }),
        1 => Ok(rewritten),
        count => Err(DataError::MultipleBlanks {
            id: id.to_string(),
            count,
        }),
    }
}

/// One cloze item: a single-blank context, its correct answer, and the gold
/// distractors annotators paired with it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClozeInstance {
    pub id: String,
    pub context: String,
    pub answer: String,
    #[serde(rename = "distractors")]
    pub gold_distractors: Vec<String>,
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    context: String,
    answer: String,
    distractors: Vec<String>,
}

/// Parses and normalizes one JSONL record.
pub fn parse_instance(line: &str, policy: &NormalizationPolicy) -> Result<ClozeInstance, DataError> {
    let raw: RawRecord =
        serde_json::from_str(line).map_err(|e| DataError::MalformedRecord(e.to_string()))?;
    if raw.id.trim().is_empty() {
        return Err(DataError::MalformedRecord("empty id".to_string()));
    }
    let id = raw.id;
    let context = normalize_context(&raw.context, policy, &id)?;
    let answer = normalize_token(&raw.answer, policy);
    if answer.is_empty() {
        return Err(DataError::MalformedRecord(format!(
            "instance {id}: empty answer"
        )));
    }
    if raw.distractors.is_empty() {
        return Err(DataError::MalformedRecord(format!(
            "instance {id}: no gold distractors"
        )));
    }
    let mut gold_distractors = Vec::with_capacity(raw.distractors.len());
    for raw_tok in &raw.distractors {
        let tok = normalize_token(raw_tok, policy);
        if tok.is_empty() {
            return Err(DataError::MalformedRecord(format!(
                "instance {id}: empty distractor"
            )));
        }
        if gold_distractors.contains(&tok) {
            return Err(DataError::MalformedRecord(format!(
                "instance {id}: duplicate distractor {tok:?}"
            )));
        }
        gold_distractors.push(tok);
    }
    if gold_distractors.contains(&answer) {
        return Err(DataError::AnswerInGold { id, answer });
    }
    Ok(ClozeInstance {
        id,
        context,
        answer,
        gold_distractors,
    })
}

/// Whether a bad line aborts the load or is collected and skipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    #[default]
    Strict,
    Lenient,
}

/// A line rejected in lenient mode, with its 1-based line number.
#[derive(Debug)]
pub struct RejectedLine {
    pub line: usize,
    pub error: DataError,
}

#[derive(Debug, Default)]
pub struct LoadedDataset {
    pub instances: Vec<ClozeInstance>,
    pub rejected: Vec<RejectedLine>,
}

/// Parses a whole JSONL buffer. Blank lines are skipped; an empty buffer is
/// an empty dataset, not an error.
pub fn parse_dataset(
    text: &str,
    policy: &NormalizationPolicy,
    mode: ParseMode,
) -> Result<LoadedDataset, DataError> {
    let mut out = LoadedDataset::default();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_instance(line, policy) {
            Ok(instance) => out.instances.push(instance),
            Err(error) => match mode {
                ParseMode::Strict => {
                    return Err(DataError::Line {
                        line: idx + 1,
                        source: Box::new(error),
                    })
                }
                ParseMode::Lenient => out.rejected.push(RejectedLine {
                    line: idx + 1,
                    error,
                }),
            },
        }
    }
    Ok(out)
}

pub fn load_dataset(
    path: impl AsRef<Path>,
    policy: &NormalizationPolicy,
    mode: ParseMode,
) -> Result<LoadedDataset, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text, policy, mode)
}

/// Serializes instances back to canonical JSONL (one object per line).
pub fn save_dataset(path: impl AsRef<Path>, instances: &[ClozeInstance]) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut buf = String::new();
    for instance in instances {
        buf.push_str(&serde_json::to_string(instance).expect("instances serialize"));
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// A generated candidate token with the generator's confidence in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub token: String,
    pub confidence: f64,
}

/// Frozen training pool for one instance: the gold distractors plus the
/// generated candidates that survived filtering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub id: String,
    pub gold: Vec<String>,
    pub generated: Vec<Candidate>,
}

/// Reads a pool file (JSONL, one pool per line).
pub fn load_pools(path: impl AsRef<Path>) -> Result<Vec<CandidatePool>, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut pools = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pool: CandidatePool = serde_json::from_str(line).map_err(|e| DataError::Line {
            line: idx + 1,
            source: Box::new(DataError::MalformedRecord(e.to_string())),
        })?;
        pools.push(pool);
    }
    Ok(pools)
}

pub fn save_pools(path: impl AsRef<Path>, pools: &[CandidatePool]) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut buf = String::new();
    for pool in pools {
        buf.push_str(&serde_json::to_string(pool).expect("pools serialize"));
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// One ranked prediction list, keyed by instance id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub predictions: Vec<String>,
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: PredictionRecord = serde_json::from_str(line).map_err(|e| DataError::Line {
            line: idx + 1,
            source: Box::new(DataError::MalformedRecord(e.to_string())),
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn save_predictions(
    path: impl AsRef<Path>,
    records: &[PredictionRecord],
) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut buf = String::new();
    for record in records {
        buf.push_str(&serde_json::to_string(record).expect("predictions serialize"));
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Closed token set the policy scores over. Insertion order is preserved and
/// indices are stable; serialized as a plain token list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Appends the token unless present; returns its index either way.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&idx) = self.index.get(token) {
            return idx;
        }
        let idx = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), idx);
        idx
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, idx: usize) -> Option<&str> {
        self.tokens.get(idx).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = String;

    fn try_from(tokens: Vec<String>) -> Result<Self, Self::Error> {
        let mut vocab = Vocabulary::new();
        for token in &tokens {
            if vocab.get(token).is_some() {
                return Err(format!("duplicate vocabulary token {token:?}"));
            }
            vocab.insert(token);
        }
        Ok(vocab)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(vocab: Vocabulary) -> Self {
        vocab.tokens
    }
}

impl fmt::Display for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vocabulary of {} tokens", self.tokens.len())
    }
}

/// Collects the closed action space in first-occurrence order: each
/// instance's answer, then its gold distractors, then any extra tokens
/// (typically generated pool candidates).
pub fn build_vocabulary<S: AsRef<str>>(instances: &[ClozeInstance], extra: &[S]) -> Vocabulary {
    let mut vocab = Vocabulary::new();
    for instance in instances {
        vocab.insert(&instance.answer);
        for tok in &instance.gold_distractors {
            vocab.insert(tok);
        }
    }
    for tok in extra {
        vocab.insert(tok.as_ref());
    }
    vocab
}
