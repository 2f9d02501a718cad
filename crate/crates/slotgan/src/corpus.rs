//! Annotated utterances, their symbol-sequence encoding, vocabularies, and
//! the frequency-based golden / rare corpus split.
//!
//! An utterance is stored with explicit token-index slot spans; the
//! GAN-facing view is a line of symbols: a `domain/intent` header followed
//! by one `word:label` symbol per token, with `none` for unlabeled tokens.
//! Separators inside words or labels are backslash-escaped so the string
//! view round-trips.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label carried by every token outside a slot span.
pub const NO_LABEL: &str = "none";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("unknown format tag {0:?} (expected \"jsonl\" or \"tsv-fb\")")]
    UnknownFormat(String),
    #[error("{0}")]
    Invalid(String),
    #[error("symbol {0:?} not in vocabulary and unknown-substitution is disabled")]
    OutOfVocabulary(String),
    #[error("utterance has {len} tokens, over the limit of {max}")]
    TooLong { len: usize, max: usize },
    #[error("cannot decode id {id}: {msg}")]
    Undecodable { id: u32, msg: String },
}

// ---------------------------------------------------------------------------
// Annotated utterances
// ---------------------------------------------------------------------------

/// A labeled entity span over token indices; `end` is inclusive.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Slot {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

/// One annotated utterance: lowercased tokens plus domain, intent, and
/// non-overlapping slot spans sorted by start. Adjacent spans with the same
/// label are merged on construction, which makes the utterance equal to its
/// own symbol-sequence round trip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedUtterance {
    pub tokens: Vec<String>,
    pub domain: String,
    pub intent: String,
    pub slots: Vec<Slot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

impl AnnotatedUtterance {
    pub fn new(
        tokens: Vec<String>,
        domain: &str,
        intent: &str,
        mut slots: Vec<Slot>,
    ) -> Result<Self, DataError> {
        if tokens.is_empty() {
            return Err(DataError::Invalid("utterance has no tokens".into()));
        }
        let tokens: Vec<String> = tokens.into_iter().map(|t| t.to_lowercase()).collect();
        slots.sort();
        for s in &slots {
            if s.end < s.start {
                return Err(DataError::Invalid(format!(
                    "slot span {}..{} ends before it starts",
                    s.start, s.end
                )));
            }
            if s.end >= tokens.len() {
                return Err(DataError::Invalid(format!(
                    "slot span {}..{} out of bounds for {} tokens",
                    s.start,
                    s.end,
                    tokens.len()
                )));
            }
            if s.label == NO_LABEL || s.label.is_empty() {
                return Err(DataError::Invalid(format!(
                    "slot label {:?} is reserved",
                    s.label
                )));
            }
        }
        for w in slots.windows(2) {
            if w[1].start <= w[0].end {
                return Err(DataError::Invalid(format!(
                    "slot spans {}..{} and {}..{} overlap",
                    w[0].start, w[0].end, w[1].start, w[1].end
                )));
            }
        }
        // Merge touching spans that carry the same label.
        let mut merged: Vec<Slot> = Vec::with_capacity(slots.len());
        for s in slots {
            match merged.last_mut() {
                Some(prev) if prev.label == s.label && prev.end + 1 == s.start => {
                    prev.end = s.end;
                }
                _ => merged.push(s),
            }
        }
        Ok(AnnotatedUtterance {
            tokens,
            domain: domain.to_lowercase(),
            intent: intent.to_lowercase(),
            slots: merged,
            provenance: None,
        })
    }

    pub fn with_provenance(mut self, tag: &str) -> Self {
        self.provenance = Some(tag.to_string());
        self
    }

    /// Per-token labels, `none` outside every span.
    pub fn token_labels(&self) -> Vec<&str> {
        let mut labels = vec![NO_LABEL; self.tokens.len()];
        for s in &self.slots {
            for l in labels.iter_mut().take(s.end + 1).skip(s.start) {
                *l = &s.label;
            }
        }
        labels
    }

    /// The symbol-line view, e.g.
    /// `music/play_song play:none bohemian:song_name ...`.
    ///
    /// This string fully determines the utterance (minus provenance) and is
    /// the key used for frequency counting and deduplication.
    pub fn annotated_string(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{}/{}", escape(&self.domain), escape(&self.intent));
        for (tok, label) in self.tokens.iter().zip(self.token_labels()) {
            let _ = write!(out, " {}:{}", escape(tok), escape(label));
        }
        out
    }

    /// Slot triples `(start, end, label)` for metric bookkeeping.
    pub fn slot_triples(&self) -> Vec<(usize, usize, &str)> {
        self.slots
            .iter()
            .map(|s| (s.start, s.end, s.label.as_str()))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Symbols and escaping
// ---------------------------------------------------------------------------

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if c == '\\' || c == ':' || c == '/' {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

/// Split `s` at its single unescaped `:` or `/`, unescaping both halves.
fn split_symbol(s: &str) -> Result<(char, String, String), DataError> {
    let mut first = String::new();
    let mut second = String::new();
    let mut sep: Option<char> = None;
    let mut escaped = false;
    for c in s.chars() {
        let target = if sep.is_some() { &mut second } else { &mut first };
        if escaped {
            target.push(c);
            escaped = false;
        } else if c == '\\' {
            escaped = true;
        } else if c == ':' || c == '/' {
            if sep.is_some() {
                return Err(DataError::Invalid(format!(
                    "symbol {:?} has more than one separator",
                    s
                )));
            }
            sep = Some(c);
        } else {
            target.push(c);
        }
    }
    if escaped {
        return Err(DataError::Invalid(format!("dangling escape in {:?}", s)));
    }
    match sep {
        Some(c) => Ok((c, first, second)),
        None => Err(DataError::Invalid(format!(
            "symbol {:?} has no `/` or `:` separator",
            s
        ))),
    }
}

/// A vocabulary entry: either an utterance header or a token-label pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Symbol {
    Header { domain: String, intent: String },
    Body { word: String, label: String },
}

impl Symbol {
    pub fn text(&self) -> String {
        match self {
            Symbol::Header { domain, intent } => {
                format!("{}/{}", escape(domain), escape(intent))
            }
            Symbol::Body { word, label } => format!("{}:{}", escape(word), escape(label)),
        }
    }

    pub fn parse(s: &str) -> Result<Self, DataError> {
        let (sep, first, second) = split_symbol(s)?;
        if first.is_empty() || second.is_empty() {
            return Err(DataError::Invalid(format!("empty half in symbol {:?}", s)));
        }
        Ok(if sep == '/' {
            Symbol::Header {
                domain: first,
                intent: second,
            }
        } else {
            Symbol::Body {
                word: first,
                label: second,
            }
        })
    }

    pub fn is_header(&self) -> bool {
        matches!(self, Symbol::Header { .. })
    }
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_SPECIALS: u32 = 4;

pub const SPECIAL_TEXT: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Bijective map between symbols and ids. Ids 0..=3 are reserved for the
/// pad / begin / end / unknown specials; regular symbols start at 4, ordered
/// by descending corpus frequency with lexicographic tie-breaks, which makes
/// vocabulary construction order-independent.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<Symbol>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build from a corpus; every header and body symbol that occurs is
    /// included.
    pub fn build(corpus: &[AnnotatedUtterance]) -> Result<Self, DataError> {
        if corpus.is_empty() {
            return Err(DataError::Invalid(
                "cannot build vocabulary from an empty corpus".into(),
            ));
        }
        let mut counts: HashMap<String, (usize, Symbol)> = HashMap::new();
        for u in corpus {
            let mut bump = |sym: Symbol| {
                let e = counts.entry(sym.text()).or_insert((0, sym));
                e.0 += 1;
            };
            bump(Symbol::Header {
                domain: u.domain.clone(),
                intent: u.intent.clone(),
            });
            for (tok, label) in u.tokens.iter().zip(u.token_labels()) {
                bump(Symbol::Body {
                    word: tok.clone(),
                    label: label.to_string(),
                });
            }
        }
        let mut ordered: Vec<(String, usize, Symbol)> = counts
            .into_iter()
            .map(|(text, (n, sym))| (text, n, sym))
            .collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let symbols = ordered.into_iter().map(|(_, _, s)| s).collect();
        Ok(Self::from_symbols(symbols))
    }

    pub fn from_symbols(symbols: Vec<Symbol>) -> Self {
        let mut v = Vocabulary {
            symbols,
            index: HashMap::new(),
        };
        v.rebuild_index();
        v
    }

    /// Restore the lookup index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.text(), i as u32 + NUM_SPECIALS))
            .collect();
    }

    /// Total id count including the four specials.
    pub fn size(&self) -> usize {
        self.symbols.len() + NUM_SPECIALS as usize
    }

    pub fn id_of(&self, text: &str) -> Option<u32> {
        match text {
            "<pad>" => Some(PAD),
            "<bos>" => Some(BOS),
            "<eos>" => Some(EOS),
            "<unk>" => Some(UNK),
            _ => self.index.get(text).copied(),
        }
    }

    pub fn id_of_symbol(&self, sym: &Symbol) -> Option<u32> {
        self.index.get(&sym.text()).copied()
    }

    pub fn symbol(&self, id: u32) -> Option<&Symbol> {
        if id < NUM_SPECIALS {
            return None;
        }
        self.symbols.get((id - NUM_SPECIALS) as usize)
    }

    pub fn text_of(&self, id: u32) -> String {
        if id < NUM_SPECIALS {
            SPECIAL_TEXT[id as usize].to_string()
        } else {
            self.symbols[(id - NUM_SPECIALS) as usize].text()
        }
    }

    pub fn is_header(&self, id: u32) -> bool {
        self.symbol(id).map(|s| s.is_header()).unwrap_or(false)
    }

    pub fn is_body(&self, id: u32) -> bool {
        self.symbol(id).map(|s| !s.is_header()).unwrap_or(false)
    }

    pub fn header_ids(&self) -> Vec<u32> {
        (NUM_SPECIALS..self.size() as u32)
            .filter(|&id| self.is_header(id))
            .collect()
    }

    /// All domains that appear in header symbols, sorted.
    pub fn domains(&self) -> Vec<String> {
        let mut set: Vec<String> = self
            .symbols
            .iter()
            .filter_map(|s| match s {
                Symbol::Header { domain, .. } => Some(domain.clone()),
                _ => None,
            })
            .collect();
        set.sort();
        set.dedup();
        set
    }
}

// ---------------------------------------------------------------------------
// Token sequences
// ---------------------------------------------------------------------------

/// The GAN-facing encoding of one utterance: a header id followed by one
/// body id per token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub header: u32,
    pub body: Vec<u32>,
}

impl TokenSequence {
    /// Symbol ids in order, optionally with a trailing end marker.
    pub fn ids(&self, with_eos: bool) -> Vec<u32> {
        let mut v = Vec::with_capacity(self.body.len() + 2);
        v.push(self.header);
        v.extend_from_slice(&self.body);
        if with_eos {
            v.push(EOS);
        }
        v
    }

    pub fn to_line(&self, vocab: &Vocabulary) -> String {
        let mut parts = vec![vocab.text_of(self.header)];
        parts.extend(self.body.iter().map(|&id| vocab.text_of(id)));
        parts.join(" ")
    }
}

/// Encode an utterance against `vocab`. Unknown symbols either map to the
/// unknown id (`allow_unk`) or fail; bodies longer than `max_len` fail.
pub fn encode(
    u: &AnnotatedUtterance,
    vocab: &Vocabulary,
    max_len: usize,
    allow_unk: bool,
) -> Result<TokenSequence, DataError> {
    if u.tokens.len() > max_len {
        return Err(DataError::TooLong {
            len: u.tokens.len(),
            max: max_len,
        });
    }
    let resolve = |sym: Symbol| -> Result<u32, DataError> {
        match vocab.id_of_symbol(&sym) {
            Some(id) => Ok(id),
            None if allow_unk => Ok(UNK),
            None => Err(DataError::OutOfVocabulary(sym.text())),
        }
    };
    let header = resolve(Symbol::Header {
        domain: u.domain.clone(),
        intent: u.intent.clone(),
    })?;
    let body = u
        .tokens
        .iter()
        .zip(u.token_labels())
        .map(|(tok, label)| {
            resolve(Symbol::Body {
                word: tok.clone(),
                label: label.to_string(),
            })
        })
        .collect::<Result<Vec<u32>, DataError>>()?;
    Ok(TokenSequence { header, body })
}

/// Decode a token sequence back to an annotated utterance. Runs of adjacent
/// tokens with the same non-`none` label become one slot.
pub fn decode(ts: &TokenSequence, vocab: &Vocabulary) -> Result<AnnotatedUtterance, DataError> {
    let (domain, intent) = match vocab.symbol(ts.header) {
        Some(Symbol::Header { domain, intent }) => (domain.clone(), intent.clone()),
        other => {
            return Err(DataError::Undecodable {
                id: ts.header,
                msg: format!("position 0 must be a header symbol, got {:?}", other),
            })
        }
    };
    if ts.body.is_empty() {
        return Err(DataError::Invalid("decoded body is empty".into()));
    }
    let mut tokens = Vec::with_capacity(ts.body.len());
    let mut labels: Vec<String> = Vec::with_capacity(ts.body.len());
    for &id in &ts.body {
        match vocab.symbol(id) {
            Some(Symbol::Body { word, label }) => {
                tokens.push(word.clone());
                labels.push(label.clone());
            }
            other => {
                return Err(DataError::Undecodable {
                    id,
                    msg: format!("body positions need token-label symbols, got {:?}", other),
                })
            }
        }
    }
    let mut slots = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        if labels[i] != NO_LABEL {
            let start = i;
            let label = labels[i].clone();
            while i + 1 < labels.len() && labels[i + 1] == label {
                i += 1;
            }
            slots.push(Slot {
                start,
                end: i,
                label,
            });
        }
        i += 1;
    }
    AnnotatedUtterance::new(tokens, &domain, &intent, slots)
}

/// Decode a raw generated id sequence (`[header, body..., eos?]`).
pub fn decode_ids(ids: &[u32], vocab: &Vocabulary) -> Result<AnnotatedUtterance, DataError> {
    let mut ids = ids;
    if let Some((&last, rest)) = ids.split_last() {
        if last == EOS {
            ids = rest;
        }
    }
    if ids.is_empty() {
        return Err(DataError::Invalid("empty id sequence".into()));
    }
    let ts = TokenSequence {
        header: ids[0],
        body: ids[1..].to_vec(),
    };
    decode(&ts, vocab)
}

/// `pct`-percentile body length of a corpus; the default sequence cap uses
/// the 99th.
pub fn percentile_len(corpus: &[AnnotatedUtterance], pct: f64) -> usize {
    let mut lens: Vec<usize> = corpus.iter().map(|u| u.tokens.len()).collect();
    lens.sort_unstable();
    if lens.is_empty() {
        return 1;
    }
    let idx = ((pct * lens.len() as f64).ceil() as usize).clamp(1, lens.len()) - 1;
    lens[idx]
}

// ---------------------------------------------------------------------------
// Golden / rare split
// ---------------------------------------------------------------------------

/// Outcome of the pseudo-golden extraction. `test` is carried through
/// untouched by the preparation pipeline and may be empty here.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub pseudo_goldens: Vec<AnnotatedUtterance>,
    pub rare: Vec<AnnotatedUtterance>,
    pub test: Vec<AnnotatedUtterance>,
    pub warnings: Vec<String>,
}

/// How utterance frequency is counted when ranking within a domain-intent
/// group: over full annotated strings (default) or raw text only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrequencyKey {
    AnnotatedString,
    RawText,
}

/// Extract pseudo-golden utterances: within every domain-intent group, sort
/// occurrences by the frequency of their utterance (ties lexicographic),
/// keep the top `ceil(fraction * group size)` occurrences, and deduplicate.
/// The remaining unique utterances become the rare set.
pub fn select_pseudo_goldens(
    train: &[AnnotatedUtterance],
    fraction: f64,
    key: FrequencyKey,
) -> Result<CorpusSplit, DataError> {
    if train.is_empty() {
        return Err(DataError::Invalid("cannot split an empty corpus".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::Invalid(format!(
            "golden fraction {} outside (0, 1]",
            fraction
        )));
    }
    let key_of = |u: &AnnotatedUtterance| -> String {
        match key {
            FrequencyKey::AnnotatedString => u.annotated_string(),
            FrequencyKey::RawText => u.tokens.join(" "),
        }
    };
    let mut groups: BTreeMap<(String, String), Vec<&AnnotatedUtterance>> = BTreeMap::new();
    for u in train {
        groups
            .entry((u.domain.clone(), u.intent.clone()))
            .or_default()
            .push(u);
    }
    let mut split = CorpusSplit::default();
    for ((domain, intent), members) in groups {
        if members.is_empty() {
            split
                .warnings
                .push(format!("empty group {}/{} skipped", domain, intent));
            continue;
        }
        // Unique utterances with occurrence counts, keyed for frequency.
        // Under raw-text counting several annotations can share one key;
        // each distinct annotated string is tracked once.
        let mut uniq: BTreeMap<String, (usize, BTreeMap<String, &AnnotatedUtterance>)> =
            BTreeMap::new();
        for u in &members {
            let e = uniq
                .entry(key_of(u))
                .or_insert_with(|| (0, BTreeMap::new()));
            e.0 += 1;
            e.1.entry(u.annotated_string()).or_insert(u);
        }
        let mut ordered: Vec<(&String, &(usize, BTreeMap<String, &AnnotatedUtterance>))> =
            uniq.iter().collect();
        ordered.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then_with(|| a.0.cmp(b.0)));
        let mut budget = ((fraction * members.len() as f64).ceil() as usize).max(1);
        for (_, (count, variants)) in &ordered {
            if budget == 0 {
                for u in variants.values() {
                    split.rare.push((**u).clone().with_provenance("rare"));
                }
            } else {
                for u in variants.values() {
                    split
                        .pseudo_goldens
                        .push((**u).clone().with_provenance("golden"));
                }
                budget = budget.saturating_sub(*count);
            }
        }
    }
    Ok(split)
}

/// Per-domain unique-utterance, intent, and label counts for a split group;
/// the layout of the preparation summary table.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GroupCounts {
    pub domain: String,
    pub group: String,
    pub unique_utterances: usize,
    pub unique_intents: usize,
    pub unique_labels: usize,
}

pub fn group_counts(split: &CorpusSplit) -> Vec<GroupCounts> {
    let mut rows = Vec::new();
    for (name, set) in [
        ("pseudo_goldens", &split.pseudo_goldens),
        ("rare", &split.rare),
    ] {
        let mut by_domain: BTreeMap<&str, Vec<&AnnotatedUtterance>> = BTreeMap::new();
        for u in set {
            by_domain.entry(&u.domain).or_default().push(u);
        }
        for (domain, members) in by_domain {
            let mut intents: Vec<&str> = members.iter().map(|u| u.intent.as_str()).collect();
            intents.sort_unstable();
            intents.dedup();
            let mut labels: Vec<&str> = members
                .iter()
                .flat_map(|u| u.slots.iter().map(|s| s.label.as_str()))
                .collect();
            labels.sort_unstable();
            labels.dedup();
            rows.push(GroupCounts {
                domain: domain.to_string(),
                group: name.to_string(),
                unique_utterances: members.len(),
                unique_intents: intents.len(),
                unique_labels: labels.len(),
            });
        }
    }
    rows.sort_by(|a, b| a.domain.cmp(&b.domain).then_with(|| a.group.cmp(&b.group)));
    rows
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    text: String,
    domain: String,
    intent: String,
    #[serde(default)]
    slots: Vec<Slot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<String>,
}

/// Column layout for tab-separated source files. Slot spans are character
/// offsets `start:end:label` into the raw text, separated by commas; the
/// domain and intent share one column as `domain/intent`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TsvConfig {
    pub intent_col: usize,
    pub slots_col: usize,
    pub text_col: usize,
}

impl Default for TsvConfig {
    fn default() -> Self {
        TsvConfig {
            intent_col: 0,
            slots_col: 1,
            text_col: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceFormat {
    Jsonl,
    TsvFb,
}

impl SourceFormat {
    pub fn parse(tag: &str) -> Result<Self, DataError> {
        match tag {
            "jsonl" => Ok(SourceFormat::Jsonl),
            "tsv-fb" => Ok(SourceFormat::TsvFb),
            other => Err(DataError::UnknownFormat(other.to_string())),
        }
    }
}

/// Read an annotated corpus from disk, reporting malformed records with
/// their line numbers.
pub fn parse_source_dataset(
    path: &Path,
    format: SourceFormat,
) -> Result<Vec<AnnotatedUtterance>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    match format {
        SourceFormat::Jsonl => parse_jsonl(&text),
        SourceFormat::TsvFb => parse_tsv(&text, &TsvConfig::default()),
    }
}

pub fn parse_jsonl(text: &str) -> Result<Vec<AnnotatedUtterance>, DataError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let rec: UtteranceRecord = serde_json::from_str(line).map_err(|e| DataError::Malformed {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let tokens: Vec<String> = rec.text.split_whitespace().map(str::to_string).collect();
        let u = AnnotatedUtterance::new(tokens, &rec.domain, &rec.intent, rec.slots).map_err(
            |e| DataError::Malformed {
                line: i + 1,
                msg: e.to_string(),
            },
        )?;
        out.push(match rec.provenance {
            Some(p) => u.with_provenance(&p),
            None => u,
        });
    }
    Ok(out)
}

pub fn parse_tsv(text: &str, cfg: &TsvConfig) -> Result<Vec<AnnotatedUtterance>, DataError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let cols: Vec<&str> = line.split('\t').collect();
        let need = cfg.intent_col.max(cfg.slots_col).max(cfg.text_col);
        if cols.len() <= need {
            return Err(DataError::Malformed {
                line: lineno,
                msg: format!("expected at least {} columns, got {}", need + 1, cols.len()),
            });
        }
        let raw_text = cols[cfg.text_col].trim();
        let (domain, intent) =
            cols[cfg.intent_col]
                .split_once('/')
                .ok_or_else(|| DataError::Malformed {
                    line: lineno,
                    msg: format!(
                        "intent column {:?} lacks a domain/ prefix",
                        cols[cfg.intent_col]
                    ),
                })?;
        let token_spans = char_spans_of_tokens(raw_text);
        let mut slots = Vec::new();
        let slot_field = cols[cfg.slots_col].trim();
        if !slot_field.is_empty() {
            for piece in slot_field.split(',') {
                let parts: Vec<&str> = piece.splitn(3, ':').collect();
                if parts.len() != 3 {
                    return Err(DataError::Malformed {
                        line: lineno,
                        msg: format!("bad slot span {:?}", piece),
                    });
                }
                let start: usize = parts[0].trim().parse().map_err(|_| DataError::Malformed {
                    line: lineno,
                    msg: format!("bad span start {:?}", parts[0]),
                })?;
                let end: usize = parts[1].trim().parse().map_err(|_| DataError::Malformed {
                    line: lineno,
                    msg: format!("bad span end {:?}", parts[1]),
                })?;
                if end <= start || end > raw_text.chars().count() {
                    return Err(DataError::Malformed {
                        line: lineno,
                        msg: format!("span {}:{} out of bounds", start, end),
                    });
                }
                let mut first_tok = None;
                let mut last_tok = None;
                for (t, &(ts, te)) in token_spans.iter().enumerate() {
                    if ts < end && start < te {
                        if first_tok.is_none() {
                            first_tok = Some(t);
                        }
                        last_tok = Some(t);
                    }
                }
                match (first_tok, last_tok) {
                    (Some(a), Some(b)) => slots.push(Slot {
                        start: a,
                        end: b,
                        label: parts[2].trim().to_string(),
                    }),
                    _ => {
                        return Err(DataError::Malformed {
                            line: lineno,
                            msg: format!("span {}:{} covers no tokens", start, end),
                        })
                    }
                }
            }
        }
        let tokens: Vec<String> = raw_text.split_whitespace().map(str::to_string).collect();
        let u = AnnotatedUtterance::new(tokens, domain, intent, slots).map_err(|e| {
            DataError::Malformed {
                line: lineno,
                msg: e.to_string(),
            }
        })?;
        out.push(u);
    }
    Ok(out)
}

/// Character span `(start, end)` of each whitespace token.
fn char_spans_of_tokens(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    let mut pos = 0;
    for c in text.chars() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                spans.push((s, pos));
            }
        } else if start.is_none() {
            start = Some(pos);
        }
        pos += 1;
    }
    if let Some(s) = start {
        spans.push((s, pos));
    }
    spans
}

pub fn write_jsonl(utterances: &[AnnotatedUtterance], path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    for u in utterances {
        let rec = UtteranceRecord {
            text: u.tokens.join(" "),
            domain: u.domain.clone(),
            intent: u.intent.clone(),
            slots: u.slots.clone(),
            provenance: u.provenance.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("serialize utterance"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Write the symbol-line view, one utterance per line.
pub fn write_sequence_lines(
    utterances: &[AnnotatedUtterance],
    path: &Path,
) -> Result<(), DataError> {
    let mut out = String::new();
    for u in utterances {
        out.push_str(&u.annotated_string());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn utt(
        text: &str,
        domain: &str,
        intent: &str,
        slots: &[(usize, usize, &str)],
    ) -> AnnotatedUtterance {
        AnnotatedUtterance::new(
            text.split_whitespace().map(str::to_string).collect(),
            domain,
            intent,
            slots
                .iter()
                .map(|&(s, e, l)| Slot {
                    start: s,
                    end: e,
                    label: l.to_string(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn jsonl_line_maps_directly() {
        let us =
            parse_jsonl(r#"{"text":"set an alarm","domain":"alarm","intent":"set","slots":[]}"#)
                .unwrap();
        assert_eq!(us.len(), 1);
        assert_eq!(us[0].tokens, vec!["set", "an", "alarm"]);
        assert!(us[0].slots.is_empty());
    }

    #[test]
    fn reversed_span_reports_line_number() {
        let text = "{\"text\":\"ok utterance\",\"domain\":\"d\",\"intent\":\"i\",\"slots\":[]}\n{\"text\":\"set an alarm\",\"domain\":\"alarm\",\"intent\":\"set\",\"slots\":[{\"start\":2,\"end\":1,\"label\":\"datetime\"}]}";
        let err = parse_jsonl(text).unwrap_err();
        assert!(err.to_string().contains("line 2"), "got {}", err);
    }

    #[test]
    fn three_domain_fixture_preserves_domains() {
        let text = concat!(
            "{\"text\":\"set an alarm\",\"domain\":\"alarm\",\"intent\":\"set\",\"slots\":[]}\n",
            "{\"text\":\"remind me later\",\"domain\":\"reminder\",\"intent\":\"set\",\"slots\":[]}\n",
            "{\"text\":\"weather today\",\"domain\":\"weather\",\"intent\":\"find\",\"slots\":[]}\n",
        );
        let us = parse_jsonl(text).unwrap();
        assert_eq!(us.len(), 3);
        let domains: Vec<&str> = us.iter().map(|u| u.domain.as_str()).collect();
        assert_eq!(domains, vec!["alarm", "reminder", "weather"]);
    }

    #[test]
    fn encoding_matches_symbol_line_format() {
        let u = utt(
            "play bohemian rhapsody by queen",
            "music",
            "play_song",
            &[(1, 2, "song_name"), (4, 4, "artist_name")],
        );
        assert_eq!(
            u.annotated_string(),
            "music/play_song play:none bohemian:song_name rhapsody:song_name by:none queen:artist_name"
        );
        let vocab = Vocabulary::build(std::slice::from_ref(&u)).unwrap();
        let ts = encode(&u, &vocab, 32, false).unwrap();
        assert_eq!(ts.to_line(&vocab), u.annotated_string());
        assert_eq!(decode(&ts, &vocab).unwrap(), u);
    }

    #[test]
    fn zero_slot_utterance_labels_everything_none() {
        let u = utt("wake me up", "alarm", "set", &[]);
        assert!(u.annotated_string().ends_with("wake:none me:none up:none"));
    }

    #[test]
    fn separator_characters_escape_and_round_trip() {
        let u = utt("a:b x/y back\\slash", "do/main", "in:tent", &[(0, 0, "la:bel")]);
        let vocab = Vocabulary::build(std::slice::from_ref(&u)).unwrap();
        let ts = encode(&u, &vocab, 16, false).unwrap();
        assert_eq!(decode(&ts, &vocab).unwrap(), u);
        let line = u.annotated_string();
        for part in line.split(' ') {
            Symbol::parse(part).unwrap();
        }
    }

    #[test]
    fn oov_fails_without_unk_and_maps_with() {
        let known = utt("set alarm", "alarm", "set", &[]);
        let vocab = Vocabulary::build(std::slice::from_ref(&known)).unwrap();
        let newer = utt("cancel alarm", "alarm", "set", &[]);
        assert!(matches!(
            encode(&newer, &vocab, 16, false),
            Err(DataError::OutOfVocabulary(_))
        ));
        let ts = encode(&newer, &vocab, 16, true).unwrap();
        assert_eq!(ts.body[0], UNK);
    }

    #[test]
    fn over_length_utterance_is_rejected() {
        let u = utt("a b c d e", "d", "i", &[]);
        let vocab = Vocabulary::build(std::slice::from_ref(&u)).unwrap();
        assert!(matches!(
            encode(&u, &vocab, 4, false),
            Err(DataError::TooLong { len: 5, max: 4 })
        ));
    }

    #[test]
    fn vocabulary_counts_and_dedup() {
        let u = utt("set an alarm", "alarm", "set", &[]);
        // 1 header + 3 body symbols + 4 specials.
        let v1 = Vocabulary::build(&[u.clone()]).unwrap();
        assert_eq!(v1.size(), 8);
        let v2 = Vocabulary::build(&[u.clone(), u.clone()]).unwrap();
        assert_eq!(v2.size(), 8);
        // 7 distinct symbols -> size 11.
        let u2 = utt("cancel it", "alarm", "cancel", &[]);
        let v3 = Vocabulary::build(&[u, u2]).unwrap();
        assert_eq!(v3.size(), 11);
    }

    #[test]
    fn vocabulary_is_order_independent() {
        let a = utt("set an alarm", "alarm", "set", &[]);
        let b = utt("will it rain", "weather", "find", &[(2, 2, "condition")]);
        let c = utt("remind me", "reminder", "set", &[]);
        let v1 = Vocabulary::build(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let v2 = Vocabulary::build(&[c, b, a]).unwrap();
        for id in 0..v1.size() as u32 {
            assert_eq!(v1.text_of(id), v2.text_of(id));
        }
    }

    #[test]
    fn vocabulary_bijection() {
        let a = utt("set an alarm for nine", "alarm", "set", &[(3, 4, "datetime")]);
        let v = Vocabulary::build(std::slice::from_ref(&a)).unwrap();
        for id in NUM_SPECIALS..v.size() as u32 {
            assert_eq!(v.id_of(&v.text_of(id)), Some(id));
        }
    }

    #[test]
    fn repeated_corpus_collapses_to_one_golden() {
        let u = utt("set an alarm", "alarm", "set", &[]);
        let train: Vec<_> = (0..10).map(|_| u.clone()).collect();
        let split = select_pseudo_goldens(&train, 0.2, FrequencyKey::AnnotatedString).unwrap();
        assert_eq!(split.pseudo_goldens.len(), 1);
        assert!(split.rare.is_empty());
    }

    #[test]
    fn top_fraction_counts_occurrences_not_uniques() {
        // Frequencies {5, 2, 1, 1, 1} over 5 uniques, 10 occurrences total;
        // the top ceil(0.2 * 10) = 2 occurrences are both copies of the
        // frequency-5 utterance.
        let mut train = Vec::new();
        for (n, text) in [
            (5, "alpha one"),
            (2, "beta two"),
            (1, "gamma"),
            (1, "delta"),
            (1, "epsilon"),
        ] {
            for _ in 0..n {
                train.push(utt(text, "d", "i", &[]));
            }
        }
        let split = select_pseudo_goldens(&train, 0.2, FrequencyKey::AnnotatedString).unwrap();
        assert_eq!(split.pseudo_goldens.len(), 1);
        assert!(split.pseudo_goldens[0]
            .tokens
            .starts_with(&["alpha".to_string()]));
        assert_eq!(split.rare.len(), 4);
    }

    #[test]
    fn golden_rare_partition_unique_strings() {
        let texts = ["a b", "a b", "a c", "b d", "e f", "e f", "e f", "g h"];
        let train: Vec<_> = texts.iter().map(|t| utt(t, "d", "i", &[])).collect();
        let split = select_pseudo_goldens(&train, 0.25, FrequencyKey::AnnotatedString).unwrap();
        let mut all: Vec<String> = split
            .pseudo_goldens
            .iter()
            .chain(&split.rare)
            .map(|u| u.annotated_string())
            .collect();
        all.sort();
        let mut expect: Vec<String> = texts
            .iter()
            .map(|t| utt(t, "d", "i", &[]).annotated_string())
            .collect();
        expect.sort();
        expect.dedup();
        assert_eq!(all, expect);
        for g in &split.pseudo_goldens {
            assert!(!split
                .rare
                .iter()
                .any(|r| r.annotated_string() == g.annotated_string()));
        }
    }

    #[test]
    fn golden_selection_invariant_under_shuffle() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut train = Vec::new();
        for (n, text) in [(4, "a b"), (4, "c d"), (2, "e f"), (1, "g"), (1, "h i j")] {
            for _ in 0..n {
                train.push(utt(text, "d", "i", &[]));
            }
        }
        let base = select_pseudo_goldens(&train, 0.3, FrequencyKey::AnnotatedString).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            train.shuffle(&mut rng);
            let s = select_pseudo_goldens(&train, 0.3, FrequencyKey::AnnotatedString).unwrap();
            let k = |v: &[AnnotatedUtterance]| -> Vec<String> {
                v.iter().map(|u| u.annotated_string()).collect()
            };
            assert_eq!(k(&s.pseudo_goldens), k(&base.pseudo_goldens));
            assert_eq!(k(&s.rare), k(&base.rare));
        }
    }

    #[test]
    fn round_trip_on_random_fixtures() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let words = ["set", "an", "alarm", "for", "nine", "am", "please", "today"];
        let labels = ["datetime", "duration", "title"];
        let mut fixtures = Vec::new();
        for _ in 0..50 {
            let len = rng.gen_range(1..=8);
            let tokens: Vec<String> = (0..len)
                .map(|_| words[rng.gen_range(0..words.len())].to_string())
                .collect();
            let mut slots: Vec<Slot> = Vec::new();
            let mut pos = 0;
            while pos < len {
                if rng.gen_bool(0.4) {
                    let end = (pos + rng.gen_range(0..2)).min(len - 1);
                    // Touching same-label spans merge canonically, so give a
                    // span adjacent to the previous one a different label.
                    let mut li = rng.gen_range(0..labels.len());
                    if let Some(prev) = slots.last() {
                        if prev.end + 1 == pos && labels[li] == prev.label {
                            li = (li + 1) % labels.len();
                        }
                    }
                    slots.push(Slot {
                        start: pos,
                        end,
                        label: labels[li].to_string(),
                    });
                    pos = end + 1;
                } else {
                    pos += 1;
                }
            }
            fixtures.push(AnnotatedUtterance::new(tokens, "domain", "intent", slots).unwrap());
        }
        let vocab = Vocabulary::build(&fixtures).unwrap();
        for u in &fixtures {
            let ts = encode(u, &vocab, 16, false).unwrap();
            assert_eq!(&decode(&ts, &vocab).unwrap(), u);
        }
    }

    #[test]
    fn tsv_char_spans_map_to_token_spans() {
        let text =
            "alarm/set_alarm\t13:17:datetime\tset alarm at 9 pm ok\nweather/find\t\twill it rain";
        let us = parse_tsv(text, &TsvConfig::default()).unwrap();
        assert_eq!(
            us[0].slots,
            vec![Slot {
                start: 3,
                end: 4,
                label: "datetime".into()
            }]
        );
        assert_eq!(us[1].tokens, vec!["will", "it", "rain"]);
        assert!(us[1].slots.is_empty());
    }

    #[test]
    fn percentile_default_length() {
        let us: Vec<AnnotatedUtterance> = (1..=100)
            .map(|n| utt(&vec!["w"; n].join(" "), "d", "i", &[]))
            .collect();
        assert_eq!(percentile_len(&us, 0.99), 99);
    }
}
