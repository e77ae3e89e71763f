//! Candidate value extraction.
//!
//! A pluggable annotator produces coarse POS tags and optional entity
//! labels for the turn text; a fixed rule set then carves out candidate
//! value spans. Two annotators ship with the crate: a deterministic
//! wordlist/regex tagger, and an adapter that drives an external tagger
//! process through a line-based JSON protocol.

use std::collections::HashMap;
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Turn};
use crate::error::{Error, Result};
use crate::text::{normalize, tokenize, turn_text};

/// Version tag for the bundled rules tagger; recorded in run manifests so
/// extraction output is reproducible per version.
pub const RULES_TAGGER_VERSION: &str = "rules-v1";

/// Stopword list shipped with the crate (`data/stopwords.txt`).
pub const STOPWORDS_RAW: &str = include_str!("../data/stopwords.txt");

/// Coarse POS tagset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pos {
    Noun,
    Propn,
    Adj,
    Num,
    Verb,
    Other,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Pos::Noun => "NOUN",
            Pos::Propn => "PROPN",
            Pos::Adj => "ADJ",
            Pos::Num => "NUM",
            Pos::Verb => "VERB",
            Pos::Other => "OTHER",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenAnnotation {
    pub token: String,
    pub pos: Pos,
    pub entity: Option<String>,
    pub char_span: (usize, usize),
}

/// An extracted candidate value span.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateValue {
    pub surface: String,
    pub char_span: (usize, usize),
    pub turn_ref: (String, u32),
    pub vocab_index: Option<usize>,
    pub embedding: Option<Vec<f64>>,
}

pub trait Annotator {
    fn name(&self) -> &str;
    fn annotate(&self, turn_text: &str) -> Result<Vec<TokenAnnotation>>;
}

/// Annotate one turn's text with the given annotator.
pub fn annotate(text: &str, annotator: &dyn Annotator) -> Result<Vec<TokenAnnotation>> {
    let anns = annotator.annotate(text)?;
    // Spans must be ordered, non-overlapping and valid for the text.
    let mut prev_end = 0;
    for a in &anns {
        let (s, e) = a.char_span;
        if s < prev_end || e > text.len() || s >= e {
            return Err(Error::Data(format!(
                "annotator '{}' produced invalid span {s}..{e}",
                annotator.name()
            )));
        }
        prev_end = e;
    }
    Ok(anns)
}

// ---------------------------------------------------------------------------
// Deterministic rules tagger
// ---------------------------------------------------------------------------

const VERB_WORDS: &[&str] = &[
    "am", "are", "arrive", "arrives", "ask", "be", "book", "booked", "bring", "call", "called",
    "can", "come", "could", "depart", "departs", "do", "does", "eat", "find", "get", "give", "go",
    "going", "has", "have", "is", "know", "leave", "leaves", "look", "make", "need", "pick",
    "prefer", "recommend", "reserve", "see", "serve", "serves", "should", "show", "stay", "take",
    "tell", "think", "travel", "try", "visit", "want", "was", "were", "will", "would",
];

const ADJ_WORDS: &[&str] = &[
    "available", "best", "big", "cheap", "cheaper", "cheapest", "early", "earliest", "expensive",
    "fancy", "fine", "free", "late", "latest", "little", "local", "long", "moderate", "near",
    "nearby", "new", "nice", "old", "open", "quick", "several", "short", "slow", "small",
];

const NOUN_WORDS: &[&str] = &[
    "address", "afternoon", "airport", "area", "attraction", "bar", "bus", "cab", "cafe", "car",
    "centre", "center", "church", "cinema", "city", "college", "cuisine", "day", "destination",
    "east", "evening", "flight", "food", "friday", "gallery", "guesthouse", "hotel", "house",
    "location", "monday", "morning", "museum", "night", "nights", "north", "number", "options",
    "park", "parking", "people", "phone", "place", "police", "pool", "postcode", "price",
    "range", "reference", "restaurant", "room", "rooms", "saturday", "south", "star", "stars",
    "station", "stop", "sunday", "table", "taxi", "theatre", "thursday", "ticket", "tickets",
    "time", "town", "train", "tuesday", "type", "wednesday", "west", "wifi",
];

const ADJ_SUFFIXES: &[&str] = &["ish", "ive", "ous", "ful", "able", "ible", "ese", "ian", "ern"];

const CITY_GAZETTEER: &[&str] = &[
    "birmingham", "boston", "cambridge", "chicago", "dallas", "ely", "london", "norwich",
    "paris", "peterborough", "stansted", "stevenage",
];

const PRONOUNS: &[&str] = &[
    "i", "me", "you", "he", "him", "she", "her", "it", "we", "us", "they", "them", "this", "that",
    "these", "those", "one", "ones",
];

const NUMBER_WORDS: &[&str] = &[
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
    "twelve",
];

fn is_numeric_token(t: &str) -> bool {
    if t.is_empty() {
        return false;
    }
    let lower = t.to_lowercase();
    if NUMBER_WORDS.contains(&lower.as_str()) {
        return true;
    }
    if !t.chars().next().unwrap().is_ascii_digit() {
        return false;
    }
    // digits with optional :, ., -, am/pm, ordinal suffix
    let stripped = lower
        .trim_end_matches("am")
        .trim_end_matches("pm")
        .trim_end_matches("st")
        .trim_end_matches("nd")
        .trim_end_matches("rd")
        .trim_end_matches("th");
    !stripped.is_empty()
        && stripped
            .chars()
            .all(|c| c.is_ascii_digit() || c == ':' || c == '.' || c == '-')
}

/// Deterministic wordlist/regex tagger used for tests and offline runs.
#[derive(Debug, Default)]
pub struct RulesTagger;

impl RulesTagger {
    fn tag(&self, token: &str, sentence_start: bool) -> Pos {
        let lower = token.to_lowercase();
        if is_numeric_token(token) {
            return Pos::Num;
        }
        if !token.chars().any(|c| c.is_alphanumeric()) {
            return Pos::Other;
        }
        if VERB_WORDS.contains(&lower.as_str()) {
            return Pos::Verb;
        }
        if ADJ_WORDS.contains(&lower.as_str()) {
            return Pos::Adj;
        }
        if NOUN_WORDS.contains(&lower.as_str()) {
            return Pos::Noun;
        }
        if CITY_GAZETTEER.contains(&lower.as_str()) {
            return Pos::Propn;
        }
        let capitalized = token.chars().next().map(|c| c.is_uppercase()).unwrap_or(false);
        if lower.len() >= 5 && ADJ_SUFFIXES.iter().any(|s| lower.ends_with(s)) {
            return Pos::Adj;
        }
        if capitalized && !sentence_start {
            return Pos::Propn;
        }
        if STOPWORD_SET.with(|s| s.contains(lower.as_str())) {
            return Pos::Other;
        }
        // Alphanumeric mixtures and unknown content words default to NOUN.
        Pos::Noun
    }

    fn entity(&self, token: &str) -> Option<String> {
        let lower = token.to_lowercase();
        if CITY_GAZETTEER.contains(&lower.as_str()) {
            return Some("LOC".to_string());
        }
        if lower.contains(':') && is_numeric_token(&lower) {
            return Some("TIME".to_string());
        }
        None
    }
}

thread_local! {
    static STOPWORD_SET: std::collections::HashSet<&'static str> = stopwords().into_iter().collect();
}

/// The shipped stopword list, comment lines removed.
pub fn stopwords() -> Vec<&'static str> {
    STOPWORDS_RAW
        .lines()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
}

pub fn is_stopword(surface: &str) -> bool {
    STOPWORD_SET.with(|s| s.contains(surface))
}

impl Annotator for RulesTagger {
    fn name(&self) -> &str {
        RULES_TAGGER_VERSION
    }

    fn annotate(&self, text: &str) -> Result<Vec<TokenAnnotation>> {
        let tokens = tokenize(text);
        let mut out = Vec::with_capacity(tokens.len());
        let mut sentence_start = true;
        for tok in &tokens {
            let pos = self.tag(&tok.text, sentence_start);
            let entity = self.entity(&tok.text);
            sentence_start = matches!(tok.text.as_str(), "." | "?" | "!");
            out.push(TokenAnnotation {
                token: tok.text.clone(),
                pos,
                entity,
                char_span: (tok.start, tok.end),
            });
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// External annotator adapter
// ---------------------------------------------------------------------------

/// Adapter that pipes turn text to an external tagger process.
///
/// Protocol: one JSON object `{"text": ...}` per line on stdin; one JSON
/// reply per line on stdout:
/// `{"tokens":[{"token":t,"pos":"NOUN",...,"entity":null,"start":0,"end":3}]}`.
pub struct ExternalTagger {
    pub command: String,
    pub args: Vec<String>,
}

#[derive(Serialize)]
struct ExternalRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct ExternalReply {
    tokens: Vec<ExternalToken>,
}

#[derive(Deserialize)]
struct ExternalToken {
    token: String,
    pos: String,
    #[serde(default)]
    entity: Option<String>,
    start: usize,
    end: usize,
}

impl Annotator for ExternalTagger {
    fn name(&self) -> &str {
        &self.command
    }

    fn annotate(&self, text: &str) -> Result<Vec<TokenAnnotation>> {
        let mut child = Command::new(&self.command)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::Provider(format!("spawn '{}': {e}", self.command)))?;
        {
            let stdin = child.stdin.as_mut().expect("piped stdin");
            let req = serde_json::to_string(&ExternalRequest { text }).unwrap();
            stdin
                .write_all(req.as_bytes())
                .and_then(|_| stdin.write_all(b"\n"))
                .map_err(|e| Error::Provider(format!("write to '{}': {e}", self.command)))?;
        }
        let output = child
            .wait_with_output()
            .map_err(|e| Error::Provider(format!("wait for '{}': {e}", self.command)))?;
        if !output.status.success() {
            return Err(Error::Provider(format!(
                "'{}' exited with {}",
                self.command, output.status
            )));
        }
        let line = String::from_utf8_lossy(&output.stdout);
        let reply: ExternalReply = serde_json::from_str(line.trim())
            .map_err(|e| Error::Provider(format!("bad reply from '{}': {e}", self.command)))?;
        reply
            .tokens
            .into_iter()
            .map(|t| {
                let pos = match t.pos.as_str() {
                    "NOUN" => Pos::Noun,
                    "PROPN" => Pos::Propn,
                    "ADJ" => Pos::Adj,
                    "NUM" => Pos::Num,
                    "VERB" => Pos::Verb,
                    _ => Pos::Other,
                };
                Ok(TokenAnnotation {
                    token: t.token,
                    pos,
                    entity: t.entity,
                    char_span: (t.start, t.end),
                })
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Candidate rules
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ExtractConfig {
    /// Emit each ADJ/NUM modifier of a noun chunk as its own candidate.
    pub split_adj_noun: bool,
    /// Optional coreference pass: replace pronominal candidates with their
    /// most recent non-pronominal antecedent surface. Off by default.
    pub coref: bool,
    pub max_span_tokens: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            split_adj_noun: true,
            coref: false,
            max_span_tokens: 5,
        }
    }
}

fn is_head(pos: Pos) -> bool {
    matches!(pos, Pos::Noun | Pos::Propn)
}

fn is_modifier(pos: Pos) -> bool {
    matches!(pos, Pos::Adj | Pos::Num)
}

/// Extract candidate values from an annotated turn.
///
/// Candidates are (a) noun chunks matching `(ADJ|NUM)* (NOUN|PROPN)+`,
/// (b) named-entity spans, (c) standalone NUM tokens. Filters: stopword
/// surfaces, duplicate surfaces within the turn (first kept), spans longer
/// than `max_span_tokens`, and pronoun-only entity mentions.
pub fn extract_candidates(
    turn: &Turn,
    dialogue_id: &str,
    text: &str,
    annotations: &[TokenAnnotation],
    config: &ExtractConfig,
) -> Vec<CandidateValue> {
    let mut spans: Vec<(usize, usize)> = Vec::new(); // token index ranges

    // (a) noun chunks
    let mut i = 0;
    let mut in_chunk = vec![false; annotations.len()];
    while i < annotations.len() {
        let mod_start = i;
        while i < annotations.len() && is_modifier(annotations[i].pos) {
            i += 1;
        }
        let head_start = i;
        while i < annotations.len() && is_head(annotations[i].pos) {
            i += 1;
        }
        if i > head_start {
            in_chunk[mod_start..i].iter_mut().for_each(|b| *b = true);
            if config.split_adj_noun {
                for m in mod_start..head_start {
                    spans.push((m, m + 1));
                }
                spans.push((head_start, i));
            } else {
                spans.push((mod_start, i));
            }
        } else {
            // Modifiers without a head are not a chunk; rewind past the
            // first token so standalone NUMs are still visible below.
            i = mod_start + 1.max(i - mod_start);
        }
    }

    // (b) entity spans
    let mut j = 0;
    while j < annotations.len() {
        if let Some(label) = &annotations[j].entity {
            let start = j;
            while j < annotations.len() && annotations[j].entity.as_deref() == Some(label) {
                j += 1;
            }
            spans.push((start, j));
        } else {
            j += 1;
        }
    }

    // (c) standalone NUM tokens not absorbed into a chunk
    for (k, a) in annotations.iter().enumerate() {
        if a.pos == Pos::Num && !in_chunk[k] {
            spans.push((k, k + 1));
        }
    }

    spans.sort();
    spans.dedup();

    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (ts, te) in spans {
        if te - ts > config.max_span_tokens {
            continue;
        }
        let char_start = annotations[ts].char_span.0;
        let char_end = annotations[te - 1].char_span.1;
        let surface = normalize(&text[char_start..char_end]);
        if surface.is_empty() || is_stopword(&surface) {
            continue;
        }
        // Entity mentions that are nothing but pronouns are not
        // representative of a value.
        let all_pronouns = (ts..te).all(|k| {
            PRONOUNS.contains(&annotations[k].token.to_lowercase().as_str())
        });
        if all_pronouns {
            continue;
        }
        if !seen.insert(surface.clone()) {
            continue;
        }
        out.push(CandidateValue {
            surface,
            char_span: (char_start, char_end),
            turn_ref: (dialogue_id.to_string(), turn.turn_index),
            vocab_index: None,
            embedding: None,
        });
    }
    if config.coref {
        resolve_pronominal(&mut out);
    }
    out
}

/// Candidate-rewriting coreference pass: pronominal surfaces take the
/// surface of the nearest preceding non-pronominal candidate.
fn resolve_pronominal(candidates: &mut Vec<CandidateValue>) {
    let mut antecedent: Option<String> = None;
    for c in candidates.iter_mut() {
        if PRONOUNS.contains(&c.surface.as_str()) {
            if let Some(a) = &antecedent {
                c.surface = a.clone();
            }
        } else {
            antecedent = Some(c.surface.clone());
        }
    }
    // Rewriting can create duplicates; keep first occurrences.
    let mut seen = std::collections::HashSet::new();
    candidates.retain(|c| seen.insert(c.surface.clone()));
}

/// Run annotation + candidate extraction over every turn of a split.
/// Annotator failures are recorded per turn and the turn is skipped.
pub fn extract_split(
    corpus: &Corpus,
    split: &str,
    annotator: &dyn Annotator,
    config: &ExtractConfig,
) -> Result<(Vec<TurnCandidates>, Vec<String>)> {
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for dialogue in corpus.split(split)? {
        for turn in &dialogue.turns {
            let text = turn_text(&turn.system_utterance, &turn.user_utterance);
            match annotate(&text, annotator) {
                Ok(anns) => {
                    let candidates =
                        extract_candidates(turn, &dialogue.dialogue_id, &text, &anns, config);
                    out.push(TurnCandidates {
                        dialogue_id: dialogue.dialogue_id.clone(),
                        turn_index: turn.turn_index,
                        candidates: candidates
                            .into_iter()
                            .map(|c| CandidateRecord {
                                surface: c.surface,
                                start: c.char_span.0,
                                end: c.char_span.1,
                            })
                            .collect(),
                    });
                }
                Err(e) => {
                    warnings.push(format!(
                        "skipping {} turn {}: {e}",
                        dialogue.dialogue_id, turn.turn_index
                    ));
                }
            }
        }
    }
    Ok((out, warnings))
}

// ---------------------------------------------------------------------------
// Candidate file format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub surface: String,
    pub start: usize,
    pub end: usize,
}

/// One line of the candidate JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnCandidates {
    pub dialogue_id: String,
    pub turn_index: u32,
    pub candidates: Vec<CandidateRecord>,
}

pub fn write_candidates(turns: &[TurnCandidates], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for t in turns {
        writeln!(file, "{}", serde_json::to_string(t).unwrap()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_candidates(path: &Path) -> Result<Vec<TurnCandidates>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                file: path.to_path_buf(),
                offset: i as u64,
                message: e.to_string(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

pub const UNK_INDEX: usize = 0;

/// Candidate value vocabulary. Index 0 is reserved for UNK.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    entries: HashMap<String, usize>,
    surfaces: Vec<String>, // surfaces[i-1] = surface with index i
    pub min_count: usize,
}

impl Vocab {
    /// Build from the candidate surfaces of the train split. Surfaces with
    /// frequency >= `min_count` get indices in first-occurrence order.
    pub fn build(turns: &[TurnCandidates], min_count: usize) -> Result<Vocab> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut order: Vec<&str> = Vec::new();
        for t in turns {
            for c in &t.candidates {
                let e = counts.entry(c.surface.as_str()).or_insert(0);
                if *e == 0 {
                    order.push(c.surface.as_str());
                }
                *e += 1;
            }
        }
        if order.is_empty() {
            return Err(Error::Data(
                "no candidates extracted; cannot build a vocabulary".into(),
            ));
        }
        let mut entries = HashMap::new();
        let mut surfaces = Vec::new();
        for surface in order {
            if counts[surface] >= min_count {
                surfaces.push(surface.to_string());
                entries.insert(surface.to_string(), surfaces.len());
            }
        }
        if surfaces.is_empty() {
            return Err(Error::Data(format!(
                "no candidate surface reaches min_count={min_count}"
            )));
        }
        Ok(Vocab {
            entries,
            surfaces,
            min_count,
        })
    }

    /// Total lookup: unknown surfaces map to UNK (0).
    pub fn lookup(&self, surface: &str) -> usize {
        self.entries.get(surface).copied().unwrap_or(UNK_INDEX)
    }

    /// Inverse lookup for indices >= 1. UNK never maps back to a surface.
    pub fn surface(&self, index: usize) -> Option<&str> {
        if index == UNK_INDEX {
            None
        } else {
            self.surfaces.get(index - 1).map(|s| s.as_str())
        }
    }

    /// Vocabulary size including the UNK slot.
    pub fn size(&self) -> usize {
        self.surfaces.len() + 1
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct VocabFile<'a> {
            version: u32,
            min_count: usize,
            entries: std::collections::BTreeMap<&'a str, usize>,
        }
        let file = VocabFile {
            version: 1,
            min_count: self.min_count,
            entries: self.entries.iter().map(|(k, v)| (k.as_str(), *v)).collect(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file).unwrap())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Vocab> {
        #[derive(Deserialize)]
        struct VocabFile {
            version: u32,
            min_count: usize,
            entries: HashMap<String, usize>,
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            file: path.to_path_buf(),
            offset: 0,
            message: e.to_string(),
        })?;
        if file.version != 1 {
            return Err(Error::Incompatible {
                path: path.to_path_buf(),
                message: format!("vocab version {} != 1", file.version),
            });
        }
        let mut surfaces = vec![String::new(); file.entries.len()];
        for (surface, index) in &file.entries {
            if *index == 0 || *index > file.entries.len() {
                return Err(Error::Data(format!("vocab index {index} out of range")));
            }
            surfaces[*index - 1] = surface.clone();
        }
        Ok(Vocab {
            entries: file.entries,
            surfaces,
            min_count: file.min_count,
        })
    }
}
