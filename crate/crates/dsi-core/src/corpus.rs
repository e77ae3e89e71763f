//! Corpus ingestion and the internal dialogue format.
//!
//! MultiWOZ-2.1-style and SGD-style corpora are normalized into one
//! representation: per user turn, the preceding system utterance, the
//! user utterance, and an optional per-turn gold state. Source datasets
//! annotate the *accumulated* state at each turn; ingestion diffs
//! consecutive states so `gold_state` holds the pairs newly added or
//! changed at that turn. Accumulating those per-turn sets with
//! latest-value-wins semantics recovers the joint state.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::normalize;

pub const INTERNAL_FORMAT: &str = "dsi-corpus";
pub const INTERNAL_VERSION: u32 = 1;

/// Values that denote an empty assignment in the source annotation.
const EMPTY_VALUES: &[&str] = &["", "none", "not mentioned"];

/// One gold slot-value pair. Requestable slots are encoded with
/// `slot = "request"` and the requested attribute as the value.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GoldTriple {
    pub domain: String,
    pub slot: String,
    pub value: String,
}

impl GoldTriple {
    pub fn new(domain: &str, slot: &str, value: &str) -> Self {
        GoldTriple {
            domain: normalize(domain),
            slot: normalize(slot),
            value: normalize(value),
        }
    }
}

/// One user turn paired with the system utterance that precedes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub turn_index: u32,
    #[serde(rename = "system")]
    pub system_utterance: String,
    #[serde(rename = "user")]
    pub user_utterance: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_state: Option<Vec<GoldTriple>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_domains: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub turns: Vec<Turn>,
}

/// All splits of one dataset in the internal representation.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub splits: BTreeMap<String, Vec<Dialogue>>,
}

pub const SPLIT_NAMES: &[&str] = &["train", "dev", "test"];

impl Corpus {
    pub fn new(name: &str) -> Self {
        Corpus {
            name: name.to_string(),
            splits: BTreeMap::new(),
        }
    }

    pub fn split(&self, name: &str) -> Result<&[Dialogue]> {
        self.splits
            .get(name)
            .map(|d| d.as_slice())
            .ok_or_else(|| Error::Config(format!("corpus has no split named '{name}'")))
    }

    /// Flattened user turns of a split, in corpus order.
    pub fn turns(&self, split: &str) -> Result<Vec<(&Dialogue, &Turn)>> {
        Ok(self
            .split(split)?
            .iter()
            .flat_map(|d| d.turns.iter().map(move |t| (d, t)))
            .collect())
    }

    fn validate(&self) -> Result<()> {
        for (split, dialogues) in &self.splits {
            if !SPLIT_NAMES.contains(&split.as_str()) {
                return Err(Error::Data(format!("unknown split name '{split}'")));
            }
            let mut seen = std::collections::HashSet::new();
            for d in dialogues {
                if !seen.insert(&d.dialogue_id) {
                    return Err(Error::Data(format!(
                        "duplicate dialogue_id '{}' in split '{split}'",
                        d.dialogue_id
                    )));
                }
                let mut prev = None;
                for t in &d.turns {
                    if t.user_utterance.is_empty() {
                        return Err(Error::Data(format!(
                            "empty user utterance in '{}' turn {}",
                            d.dialogue_id, t.turn_index
                        )));
                    }
                    if let Some(p) = prev {
                        if t.turn_index <= p {
                            return Err(Error::Data(format!(
                                "non-increasing turn_index in '{}'",
                                d.dialogue_id
                            )));
                        }
                    }
                    prev = Some(t.turn_index);
                }
            }
            let with_gold = dialogues
                .iter()
                .flat_map(|d| &d.turns)
                .filter(|t| t.gold_state.is_some())
                .count();
            let total = dialogues.iter().map(|d| d.turns.len()).sum::<usize>();
            if with_gold != 0 && with_gold != total {
                return Err(Error::Data(format!(
                    "split '{split}' mixes turns with and without gold_state"
                )));
            }
        }
        Ok(())
    }
}

/// Which dialogues belong to which split.
#[derive(Debug, Clone)]
pub enum SplitSpec {
    /// MultiWOZ convention: `valListFile` / `testListFile` next to the data
    /// name the dev and test dialogues; everything else is train.
    FromListFiles,
    /// Explicit dialogue-id lists per split.
    Explicit {
        dev: Vec<String>,
        test: Vec<String>,
    },
}

fn is_empty_value(v: &str) -> bool {
    EMPTY_VALUES.contains(&v)
}

/// Set difference on triples: pairs present now but not before.
fn diff_state(current: &[GoldTriple], previous: &[GoldTriple]) -> Vec<GoldTriple> {
    current
        .iter()
        .filter(|t| !previous.contains(t))
        .cloned()
        .collect()
}

// ---------------------------------------------------------------------------
// MultiWOZ 2.1
// ---------------------------------------------------------------------------

/// Flatten one MultiWOZ `metadata` object into triples. Book sub-slots are
/// named `book <slot>`; empty assignments are dropped.
fn flatten_multiwoz_metadata(metadata: &serde_json::Value) -> Result<Vec<GoldTriple>> {
    let mut out = Vec::new();
    let Some(domains) = metadata.as_object() else {
        return Ok(out);
    };
    for (domain, body) in domains {
        let Some(body) = body.as_object() else {
            continue;
        };
        if let Some(semi) = body.get("semi").and_then(|v| v.as_object()) {
            for (slot, value) in semi {
                push_value(&mut out, domain, slot, value);
            }
        }
        if let Some(book) = body.get("book").and_then(|v| v.as_object()) {
            for (slot, value) in book {
                if slot == "booked" {
                    continue;
                }
                push_value(&mut out, domain, &format!("book {slot}"), value);
            }
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

fn push_value(out: &mut Vec<GoldTriple>, domain: &str, slot: &str, value: &serde_json::Value) {
    let raw = match value {
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Array(items) => match items.first().and_then(|v| v.as_str()) {
            Some(s) => s.to_string(),
            None => return,
        },
        _ => return,
    };
    let norm = normalize(&raw);
    if is_empty_value(&norm) {
        return;
    }
    out.push(GoldTriple::new(domain, slot, &norm));
}

fn read_json_file(path: &Path) -> Result<serde_json::Value> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        file: path.to_path_buf(),
        offset: byte_offset_of(&bytes, e.line(), e.column()),
        message: e.to_string(),
    })
}

/// serde_json reports line/column; convert to a byte offset for the error.
fn byte_offset_of(bytes: &[u8], line: usize, column: usize) -> u64 {
    let mut cur_line = 1usize;
    let mut offset = 0u64;
    for &b in bytes {
        if cur_line == line {
            break;
        }
        if b == b'\n' {
            cur_line += 1;
        }
        offset += 1;
    }
    offset + column.saturating_sub(1) as u64
}

fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect())
}

/// Load a MultiWOZ 2.1 directory: `data.json` plus split list files.
pub fn load_multiwoz(path: &Path, split_spec: &SplitSpec) -> Result<Corpus> {
    let data_path = path.join("data.json");
    let data = read_json_file(&data_path)?;
    let (dev_ids, test_ids) = resolve_split_lists(path, split_spec)?;

    let dialogues = data.as_object().ok_or_else(|| Error::Parse {
        file: data_path.clone(),
        offset: 0,
        message: "top-level value is not an object of dialogues".into(),
    })?;

    let mut corpus = Corpus::new("multiwoz");
    for split in SPLIT_NAMES {
        corpus.splits.insert(split.to_string(), Vec::new());
    }

    // BTreeMap iteration gives a stable dialogue order.
    let ordered: BTreeMap<&String, &serde_json::Value> = dialogues.iter().collect();
    for (dialogue_id, body) in ordered {
        let log = body
            .get("log")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::Parse {
                file: data_path.clone(),
                offset: 0,
                message: format!("dialogue '{dialogue_id}' has no log array"),
            })?;
        let mut turns = Vec::new();
        let mut prev_state: Vec<GoldTriple> = Vec::new();
        let mut turn_index = 0u32;
        let mut i = 0;
        while i < log.len() {
            let user_utterance = log[i]
                .get("text")
                .and_then(|v| v.as_str())
                .unwrap_or_default()
                .to_string();
            if user_utterance.is_empty() {
                i += 2;
                continue;
            }
            let system_utterance = if i == 0 {
                String::new()
            } else {
                log[i - 1]
                    .get("text")
                    .and_then(|v| v.as_str())
                    .unwrap_or_default()
                    .to_string()
            };
            let cumulative = match log.get(i + 1).and_then(|t| t.get("metadata")) {
                Some(meta) => flatten_multiwoz_metadata(meta)?,
                None => prev_state.clone(),
            };
            let turn_gold = diff_state(&cumulative, &prev_state);
            let gold_domains: Vec<String> = {
                let mut d: Vec<String> = turn_gold.iter().map(|t| t.domain.clone()).collect();
                d.sort();
                d.dedup();
                d
            };
            turns.push(Turn {
                turn_index,
                system_utterance,
                user_utterance,
                gold_state: Some(turn_gold),
                gold_domains: Some(gold_domains),
            });
            prev_state = cumulative;
            turn_index += 1;
            i += 2;
        }
        let split = if test_ids.contains(dialogue_id) {
            "test"
        } else if dev_ids.contains(dialogue_id) {
            "dev"
        } else {
            "train"
        };
        corpus.splits.get_mut(split).unwrap().push(Dialogue {
            dialogue_id: dialogue_id.clone(),
            turns,
        });
    }
    corpus.validate()?;
    Ok(corpus)
}

fn resolve_split_lists(path: &Path, spec: &SplitSpec) -> Result<(Vec<String>, Vec<String>)> {
    match spec {
        SplitSpec::Explicit { dev, test } => Ok((dev.clone(), test.clone())),
        SplitSpec::FromListFiles => {
            let dev_path = ["valListFile.txt", "valListFile.json"]
                .iter()
                .map(|f| path.join(f))
                .find(|p| p.exists());
            let test_path = ["testListFile.txt", "testListFile.json"]
                .iter()
                .map(|f| path.join(f))
                .find(|p| p.exists());
            match (dev_path, test_path) {
                (Some(d), Some(t)) => Ok((read_id_list(&d)?, read_id_list(&t)?)),
                _ => Err(Error::Config(format!(
                    "missing split list files (valListFile/testListFile) in {}",
                    path.display()
                ))),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// SGD
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct SgdDialogue {
    dialogue_id: String,
    turns: Vec<SgdTurn>,
}

#[derive(Deserialize)]
struct SgdTurn {
    speaker: String,
    utterance: String,
    #[serde(default)]
    frames: Vec<SgdFrame>,
}

#[derive(Deserialize)]
struct SgdFrame {
    service: String,
    #[serde(default)]
    state: Option<SgdState>,
}

#[derive(Deserialize)]
struct SgdState {
    #[serde(default)]
    requested_slots: Vec<String>,
    #[serde(default)]
    slot_values: BTreeMap<String, Vec<String>>,
}

/// Load an SGD-style directory: `train/`, `dev/`, `test/` subdirectories of
/// `dialogues_*.json` files (any missing subdirectory must be covered by the
/// explicit split spec being `FromListFiles`, which for SGD means
/// "use the directory layout").
pub fn load_sgd(path: &Path, split_spec: &SplitSpec) -> Result<Corpus> {
    let mut corpus = Corpus::new("sgd");
    match split_spec {
        SplitSpec::FromListFiles => {
            let mut found = false;
            for split in SPLIT_NAMES {
                let dir = path.join(split);
                if dir.is_dir() {
                    found = true;
                    corpus
                        .splits
                        .insert(split.to_string(), load_sgd_split(&dir)?);
                }
            }
            if !found {
                return Err(Error::Config(format!(
                    "no train/dev/test subdirectories under {}",
                    path.display()
                )));
            }
        }
        SplitSpec::Explicit { dev, test } => {
            let mut all = Vec::new();
            for split in SPLIT_NAMES {
                let dir = path.join(split);
                if dir.is_dir() {
                    all.extend(load_sgd_split(&dir)?);
                }
            }
            if all.is_empty() {
                all = load_sgd_split(path)?;
            }
            let mut by_split: BTreeMap<String, Vec<Dialogue>> = BTreeMap::new();
            for d in all {
                let split = if test.contains(&d.dialogue_id) {
                    "test"
                } else if dev.contains(&d.dialogue_id) {
                    "dev"
                } else {
                    "train"
                };
                by_split.entry(split.to_string()).or_default().push(d);
            }
            corpus.splits = by_split;
        }
    }
    corpus.validate()?;
    Ok(corpus)
}

fn load_sgd_split(dir: &Path) -> Result<Vec<Dialogue>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("dialogues_") && n.ends_with(".json"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!(
            "no dialogues_*.json files in {}",
            dir.display()
        )));
    }
    let mut out = Vec::new();
    for file in files {
        let value = read_json_file(&file)?;
        let raw: Vec<SgdDialogue> =
            serde_json::from_value(value).map_err(|e| Error::Parse {
                file: file.clone(),
                offset: 0,
                message: e.to_string(),
            })?;
        for d in raw {
            out.push(convert_sgd_dialogue(d));
        }
    }
    Ok(out)
}

fn convert_sgd_dialogue(d: SgdDialogue) -> Dialogue {
    let mut turns = Vec::new();
    let mut prev_system = String::new();
    let mut prev_inform: Vec<GoldTriple> = Vec::new();
    let mut turn_index = 0u32;
    for t in d.turns {
        if t.speaker.eq_ignore_ascii_case("system") {
            prev_system = t.utterance;
            continue;
        }
        let mut cumulative_inform = Vec::new();
        let mut requests = Vec::new();
        let mut gold_domains = Vec::new();
        for frame in &t.frames {
            gold_domains.push(normalize(&frame.service));
            if let Some(state) = &frame.state {
                for (slot, values) in &state.slot_values {
                    // The list holds alternative surface forms; the first
                    // entry is the canonical one.
                    if let Some(v) = values.first() {
                        let norm = normalize(v);
                        if !is_empty_value(&norm) {
                            cumulative_inform.push(GoldTriple::new(&frame.service, slot, &norm));
                        }
                    }
                }
                for slot in &state.requested_slots {
                    requests.push(GoldTriple::new(&frame.service, "request", slot));
                }
            }
        }
        cumulative_inform.sort();
        cumulative_inform.dedup();
        let mut turn_gold = diff_state(&cumulative_inform, &prev_inform);
        turn_gold.extend(requests);
        turn_gold.sort();
        turn_gold.dedup();
        gold_domains.sort();
        gold_domains.dedup();
        turns.push(Turn {
            turn_index,
            system_utterance: std::mem::take(&mut prev_system),
            user_utterance: t.utterance,
            gold_state: Some(turn_gold),
            gold_domains: Some(gold_domains),
        });
        prev_inform = cumulative_inform;
        turn_index += 1;
    }
    Dialogue {
        dialogue_id: d.dialogue_id,
        turns,
    }
}

// ---------------------------------------------------------------------------
// Internal JSONL format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<String>,
}

/// Write each split as `<split>.jsonl` under `path`, one dialogue per line,
/// preceded by a header line.
pub fn write_internal(corpus: &Corpus, path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    for (split, dialogues) in &corpus.splits {
        let file_path = path.join(format!("{split}.jsonl"));
        let mut file = fs::File::create(&file_path).map_err(|e| Error::io(&file_path, e))?;
        let header = Header {
            format: INTERNAL_FORMAT.to_string(),
            version: INTERNAL_VERSION,
            name: Some(corpus.name.clone()),
            split: Some(split.clone()),
        };
        writeln!(file, "{}", serde_json::to_string(&header).unwrap())
            .map_err(|e| Error::io(&file_path, e))?;
        for d in dialogues {
            writeln!(file, "{}", serde_json::to_string(d).unwrap())
                .map_err(|e| Error::io(&file_path, e))?;
        }
    }
    Ok(())
}

/// Read every `<split>.jsonl` under `path` back into a corpus.
pub fn read_internal(path: &Path) -> Result<Corpus> {
    let mut corpus = Corpus::new("corpus");
    let mut any = false;
    for split in SPLIT_NAMES {
        let file_path = path.join(format!("{split}.jsonl"));
        if !file_path.exists() {
            continue;
        }
        any = true;
        let file = fs::File::open(&file_path).map_err(|e| Error::io(&file_path, e))?;
        let reader = BufReader::new(file);
        let mut dialogues = Vec::new();
        let mut lines = reader.lines().enumerate();
        let (_, header_line) = lines.next().ok_or_else(|| Error::Incompatible {
            path: file_path.clone(),
            message: "empty file, missing header".into(),
        })?;
        let header_line = header_line.map_err(|e| Error::io(&file_path, e))?;
        let header: Header =
            serde_json::from_str(&header_line).map_err(|_| Error::Incompatible {
                path: file_path.clone(),
                message: "first line is not a corpus header".into(),
            })?;
        if header.format != INTERNAL_FORMAT || header.version != INTERNAL_VERSION {
            return Err(Error::Incompatible {
                path: file_path.clone(),
                message: format!(
                    "header {}@{} does not match {}@{}",
                    header.format, header.version, INTERNAL_FORMAT, INTERNAL_VERSION
                ),
            });
        }
        if let Some(name) = header.name {
            corpus.name = name;
        }
        for (line_no, line) in lines {
            let line = line.map_err(|e| Error::io(&file_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let dialogue: Dialogue = serde_json::from_str(&line).map_err(|e| Error::Parse {
                file: file_path.clone(),
                offset: line_no as u64,
                message: e.to_string(),
            })?;
            dialogues.push(dialogue);
        }
        corpus.splits.insert(split.to_string(), dialogues);
    }
    if !any {
        return Err(Error::Config(format!(
            "no <split>.jsonl files under {}",
            path.display()
        )));
    }
    corpus.validate()?;
    Ok(corpus)
}
