//! Dialogue state assembly and induced-slot naming.
//!
//! Per-candidate slot assignments become turn-level states; joint states
//! accumulate turn states with union semantics where the latest value of
//! a slot wins. For evaluation, induced slot indices are named after the
//! gold slots with the maximum fuzzy value match.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::GoldTriple;
use crate::error::{Error, Result};
use crate::eval::fuzzy_match;

/// A slot identifier: a raw induced index, or a gold (domain, slot) name.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SlotId {
    Induced(usize),
    Named { domain: String, slot: String },
}

impl SlotId {
    pub fn named(domain: &str, slot: &str) -> Self {
        SlotId::Named {
            domain: domain.to_string(),
            slot: slot.to_string(),
        }
    }
}

/// One slot-value entry of a turn state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateEntry {
    pub slot: SlotId,
    pub value: String,
    pub score: f64,
}

/// Turn-level state: at most one value per slot id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TurnState {
    pub entries: Vec<StateEntry>,
}

impl TurnState {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A candidate's assignment as seen by state assembly.
#[derive(Debug, Clone)]
pub struct CandidateAssignment {
    pub surface: String,
    pub slot: usize,
    pub score: f64,
}

/// Build a turn state from per-candidate assignments. Candidates whose
/// posterior maximum is below `min_score` are dropped; when two candidates
/// land on the same slot the higher score wins, ties keep the earlier one.
pub fn turn_state(assignments: &[CandidateAssignment], min_score: f64) -> TurnState {
    let mut by_slot: BTreeMap<usize, StateEntry> = BTreeMap::new();
    for a in assignments {
        if a.score < min_score {
            continue;
        }
        match by_slot.get(&a.slot) {
            Some(existing) if existing.score >= a.score => {}
            _ => {
                by_slot.insert(
                    a.slot,
                    StateEntry {
                        slot: SlotId::Induced(a.slot),
                        value: a.surface.clone(),
                        score: a.score,
                    },
                );
            }
        }
    }
    TurnState {
        entries: by_slot.into_values().collect(),
    }
}

/// Joint state: slot id -> (value, score, turn that set it).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct JointState {
    pub entries: BTreeMap<SlotId, JointEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointEntry {
    pub value: String,
    pub score: f64,
    pub source_turn_index: u32,
}

/// Union of slot keys; on collision the current turn's value replaces the
/// previous one (latest value wins).
pub fn accumulate(previous: &JointState, current: &TurnState, turn_index: u32) -> JointState {
    let mut out = previous.clone();
    for e in &current.entries {
        out.entries.insert(
            e.slot.clone(),
            JointEntry {
                value: e.value.clone(),
                score: e.score,
                source_turn_index: turn_index,
            },
        );
    }
    out
}

/// Gold turn state as a [`TurnState`] with named slots. Within one turn,
/// several gold values for the same (domain, slot) key collapse to the
/// last in sorted order, deterministically.
pub fn gold_turn_state(gold: &[GoldTriple]) -> TurnState {
    let mut sorted: Vec<&GoldTriple> = gold.iter().collect();
    sorted.sort();
    let mut map: BTreeMap<SlotId, StateEntry> = BTreeMap::new();
    for t in sorted {
        let id = SlotId::named(&t.domain, &t.slot);
        map.insert(
            id.clone(),
            StateEntry {
                slot: id,
                value: t.value.clone(),
                score: 1.0,
            },
        );
    }
    TurnState {
        entries: map.into_values().collect(),
    }
}

// ---------------------------------------------------------------------------
// Slot naming
// ---------------------------------------------------------------------------

/// Mapping from induced slot index to a gold (domain, slot) name, built by
/// maximum fuzzy value match. Induced slots that never match anything stay
/// unmapped; their entries are excluded from metric comparison but kept in
/// the raw output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotNameMap {
    /// induced index -> (domain, slot)
    pub slots: BTreeMap<usize, (String, String)>,
    /// induced domain index -> gold domain
    pub domains: BTreeMap<usize, String>,
    /// match-count matrix used to build the map:
    /// induced -> gold key -> count
    pub counts: BTreeMap<usize, BTreeMap<String, usize>>,
    pub naming_split: String,
}

fn gold_key(domain: &str, slot: &str) -> String {
    format!("{domain}\u{1f}{slot}")
}

fn split_gold_key(key: &str) -> (String, String) {
    match key.split_once('\u{1f}') {
        Some((d, s)) => (d.to_string(), s.to_string()),
        None => (key.to_string(), String::new()),
    }
}

/// Align per-turn predictions with gold states on the naming split and
/// count fuzzy value matches between induced slots and gold slots.
///
/// Each element pairs one turn's induced state with its gold triples;
/// `domain_pairs` pairs each turn's induced domain with its gold domains.
pub fn build_slot_name_map(
    turn_pairs: &[(&TurnState, &[GoldTriple])],
    domain_pairs: &[(usize, &[String])],
    naming_split: &str,
) -> SlotNameMap {
    let mut counts: BTreeMap<usize, BTreeMap<String, usize>> = BTreeMap::new();
    let mut gold_freq: BTreeMap<String, usize> = BTreeMap::new();
    for (pred, gold) in turn_pairs {
        for t in gold.iter() {
            *gold_freq.entry(gold_key(&t.domain, &t.slot)).or_insert(0) += 1;
        }
        for entry in &pred.entries {
            let SlotId::Induced(index) = entry.slot else {
                continue;
            };
            for t in gold.iter() {
                if fuzzy_match(&entry.value, &t.value) {
                    *counts
                        .entry(index)
                        .or_default()
                        .entry(gold_key(&t.domain, &t.slot))
                        .or_insert(0) += 1;
                }
            }
        }
    }

    let mut slots = BTreeMap::new();
    for (&induced, gold_counts) in &counts {
        // Argmax count; ties by higher global gold frequency, then
        // lexicographic key order.
        let best = gold_counts
            .iter()
            .max_by(|(ka, va), (kb, vb)| {
                va.cmp(vb)
                    .then_with(|| gold_freq.get(*ka).cmp(&gold_freq.get(*kb)))
                    .then_with(|| kb.cmp(ka))
            })
            .map(|(k, _)| k.clone());
        if let Some(key) = best {
            slots.insert(induced, split_gold_key(&key));
        }
    }

    // Domain naming: maximum co-occurrence with gold domains.
    let mut domain_counts: BTreeMap<usize, BTreeMap<String, usize>> = BTreeMap::new();
    let mut domain_freq: BTreeMap<String, usize> = BTreeMap::new();
    for (induced, golds) in domain_pairs {
        for g in golds.iter() {
            *domain_freq.entry(g.clone()).or_insert(0) += 1;
            *domain_counts
                .entry(*induced)
                .or_default()
                .entry(g.clone())
                .or_insert(0) += 1;
        }
    }
    let mut domains = BTreeMap::new();
    for (&induced, gold_counts) in &domain_counts {
        let best = gold_counts
            .iter()
            .max_by(|(ka, va), (kb, vb)| {
                va.cmp(vb)
                    .then_with(|| domain_freq.get(*ka).cmp(&domain_freq.get(*kb)))
                    .then_with(|| kb.cmp(ka))
            })
            .map(|(k, _)| k.clone());
        if let Some(name) = best {
            domains.insert(induced, name);
        }
    }

    SlotNameMap {
        slots,
        domains,
        counts,
        naming_split: naming_split.to_string(),
    }
}

/// Result of applying a naming map to a turn state.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedState {
    /// Entries whose induced slot has a gold name (values untouched).
    pub named: TurnState,
    /// Entries whose induced slot is unmapped; excluded from comparison.
    pub unmapped: Vec<StateEntry>,
}

pub fn apply_naming(state: &TurnState, map: &SlotNameMap) -> NamedState {
    let mut named = Vec::new();
    let mut unmapped = Vec::new();
    for e in &state.entries {
        match &e.slot {
            SlotId::Named { .. } => named.push(e.clone()),
            SlotId::Induced(i) => match map.slots.get(i) {
                Some((domain, slot)) => named.push(StateEntry {
                    slot: SlotId::named(domain, slot),
                    value: e.value.clone(),
                    score: e.score,
                }),
                None => unmapped.push(e.clone()),
            },
        }
    }
    // A state is a set of slot-value pairs: collapse exact duplicates that
    // naming can create when two induced slots share a gold name.
    let mut seen = std::collections::HashSet::new();
    named.retain(|e| seen.insert((e.slot.clone(), e.value.clone())));
    NamedState {
        named: TurnState { entries: named },
        unmapped,
    }
}

// ---------------------------------------------------------------------------
// Induced-state file
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainRecord {
    pub induced_id: usize,
    pub name: Option<String>,
    pub prob: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateEntryRecord {
    pub induced_slot: Option<usize>,
    pub name: Option<String>,
    pub value: String,
    pub score: f64,
}

/// One line of the induced-state JSONL file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnStateRecord {
    pub dialogue_id: String,
    pub turn_index: u32,
    pub domain: DomainRecord,
    pub turn_state: Vec<StateEntryRecord>,
    pub joint_state: Vec<StateEntryRecord>,
}

fn entry_to_record(e: &StateEntry) -> StateEntryRecord {
    match &e.slot {
        SlotId::Induced(i) => StateEntryRecord {
            induced_slot: Some(*i),
            name: None,
            value: e.value.clone(),
            score: e.score,
        },
        SlotId::Named { domain, slot } => StateEntryRecord {
            induced_slot: None,
            name: Some(format!("{domain}-{slot}")),
            value: e.value.clone(),
            score: e.score,
        },
    }
}

pub fn record_from_states(
    dialogue_id: &str,
    turn_index: u32,
    domain: DomainRecord,
    turn: &TurnState,
    joint: &JointState,
) -> TurnStateRecord {
    TurnStateRecord {
        dialogue_id: dialogue_id.to_string(),
        turn_index,
        domain,
        turn_state: turn.entries.iter().map(entry_to_record).collect(),
        joint_state: joint
            .entries
            .iter()
            .map(|(slot, je)| {
                entry_to_record(&StateEntry {
                    slot: slot.clone(),
                    value: je.value.clone(),
                    score: je.score,
                })
            })
            .collect(),
    }
}

pub fn record_to_turn_state(record: &TurnStateRecord) -> TurnState {
    TurnState {
        entries: record.turn_state.iter().map(record_entry_to_state).collect(),
    }
}

pub fn record_entry_to_state(r: &StateEntryRecord) -> StateEntry {
    let slot = match (&r.induced_slot, &r.name) {
        (Some(i), None) => SlotId::Induced(*i),
        (_, Some(name)) => {
            let (domain, slot) = name.split_once('-').unwrap_or((name.as_str(), ""));
            SlotId::named(domain, slot)
        }
        (None, None) => SlotId::named("", ""),
    };
    StateEntry {
        slot,
        value: r.value.clone(),
        score: r.score,
    }
}

pub fn write_states(records: &[TurnStateRecord], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(file, "{}", serde_json::to_string(r).unwrap()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_states(path: &Path) -> Result<Vec<TurnStateRecord>> {
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
