//! Evaluation of induced states against gold annotations: state matching,
//! goal accuracy, domain accuracy, the per-domain breakdown, the random
//! baseline and report emission.

pub mod cluster;
pub mod plot;
pub mod tsne;

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::GoldTriple;
use crate::error::{Error, Result};
use crate::state::{accumulate, gold_turn_state, JointState, SlotId, StateEntry, TurnState};
use crate::text::normalize;

pub const FUZZY_JACCARD_THRESHOLD: f64 = 0.5;

/// Fuzzy value comparison: after normalization, strings match when equal,
/// when one is a whitespace-delimited substring of the other, or when
/// their token sets overlap with Jaccard >= 0.5. Symmetric by
/// construction. Note the documented limitation: compounds with different
/// spacing ("guest house" vs "guesthouse") do not match.
pub fn fuzzy_match(a: &str, b: &str) -> bool {
    let a = normalize(a);
    let b = normalize(b);
    if a.is_empty() || b.is_empty() {
        return false;
    }
    if a == b {
        return true;
    }
    let ta: Vec<&str> = a.split_whitespace().collect();
    let tb: Vec<&str> = b.split_whitespace().collect();
    if contiguous_subsequence(&ta, &tb) || contiguous_subsequence(&tb, &ta) {
        return true;
    }
    let sa: std::collections::HashSet<&str> = ta.iter().copied().collect();
    let sb: std::collections::HashSet<&str> = tb.iter().copied().collect();
    let inter = sa.intersection(&sb).count();
    let union = sa.union(&sb).count();
    union > 0 && inter as f64 / union as f64 >= FUZZY_JACCARD_THRESHOLD
}

fn contiguous_subsequence(needle: &[&str], hay: &[&str]) -> bool {
    if needle.is_empty() || needle.len() > hay.len() {
        return false;
    }
    hay.windows(needle.len()).any(|w| w == needle)
}

// ---------------------------------------------------------------------------
// Evaluation input
// ---------------------------------------------------------------------------

/// One evaluated turn: the named prediction aligned with its gold triples.
#[derive(Debug, Clone)]
pub struct EvalTurn {
    pub dialogue_id: String,
    pub turn_index: u32,
    pub pred: TurnState,
    pub gold: Vec<GoldTriple>,
    pub gold_domains: Vec<String>,
    /// Named induced domain for the turn, when the model assigns one.
    pub pred_domain: Option<String>,
    pub candidate_count: usize,
    pub unmapped_entries: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Turn,
    Joint,
}

fn entry_matches_gold(entry: &StateEntry, gold: &GoldTriple) -> bool {
    match &entry.slot {
        SlotId::Named { domain, slot } => {
            domain == &gold.domain && slot == &gold.slot && fuzzy_match(&entry.value, &gold.value)
        }
        SlotId::Induced(_) => false,
    }
}

/// Pairs of (predicted state, gold triples) per turn at the requested
/// level. Joint level accumulates both sides per dialogue, in turn order.
fn leveled_states(turns: &[EvalTurn], level: Level) -> Vec<(Vec<StateEntry>, Vec<GoldTriple>)> {
    match level {
        Level::Turn => turns
            .iter()
            .map(|t| (t.pred.entries.clone(), t.gold.clone()))
            .collect(),
        Level::Joint => {
            let mut out = Vec::with_capacity(turns.len());
            let mut pred_acc: BTreeMap<&str, JointState> = BTreeMap::new();
            let mut gold_acc: BTreeMap<&str, JointState> = BTreeMap::new();
            for t in turns {
                let p = pred_acc.entry(&t.dialogue_id).or_default();
                *p = accumulate(p, &t.pred, t.turn_index);
                let g = gold_acc.entry(&t.dialogue_id).or_default();
                *g = accumulate(g, &gold_turn_state(&t.gold), t.turn_index);
                let pred_entries: Vec<StateEntry> = p
                    .entries
                    .iter()
                    .map(|(slot, je)| StateEntry {
                        slot: slot.clone(),
                        value: je.value.clone(),
                        score: je.score,
                    })
                    .collect();
                let gold_triples: Vec<GoldTriple> = g
                    .entries
                    .iter()
                    .filter_map(|(slot, je)| match slot {
                        SlotId::Named { domain, slot } => Some(GoldTriple {
                            domain: domain.clone(),
                            slot: slot.clone(),
                            value: je.value.clone(),
                        }),
                        SlotId::Induced(_) => None,
                    })
                    .collect();
                out.push((pred_entries, gold_triples));
            }
            out
        }
    }
}

/// Micro-averaged precision / recall / F1 of predicted slot-value pairs.
/// Precision counts predicted pairs that match some gold pair; recall
/// counts gold pairs matched by some prediction.
pub fn state_matching(turns: &[EvalTurn], level: Level) -> (f64, f64, f64) {
    let mut pred_total = 0usize;
    let mut pred_matched = 0usize;
    let mut gold_total = 0usize;
    let mut gold_matched = 0usize;
    for (pred, gold) in leveled_states(turns, level) {
        pred_total += pred.len();
        gold_total += gold.len();
        for entry in &pred {
            if gold.iter().any(|g| entry_matches_gold(entry, g)) {
                pred_matched += 1;
            }
        }
        for g in &gold {
            if pred.iter().any(|entry| entry_matches_gold(entry, g)) {
                gold_matched += 1;
            }
        }
    }
    let precision = ratio(pred_matched, pred_total);
    let recall = ratio(gold_matched, gold_total);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Fraction of turns whose predicted state equals the gold state exactly
/// as a set, under fuzzy value equality. Empty-vs-empty counts correct.
pub fn goal_accuracy(turns: &[EvalTurn], level: Level) -> f64 {
    let states = leveled_states(turns, level);
    if states.is_empty() {
        return 0.0;
    }
    let correct = states
        .iter()
        .filter(|(pred, gold)| {
            pred.iter().all(|e| gold.iter().any(|g| entry_matches_gold(e, g)))
                && gold
                    .iter()
                    .all(|g| pred.iter().any(|e| entry_matches_gold(e, g)))
        })
        .count();
    correct as f64 / states.len() as f64
}

/// Fraction of candidate-bearing turns whose induced domain is one of the
/// turn's gold domains. Turns without candidates or without gold domains
/// are excluded.
pub fn domain_accuracy(turns: &[EvalTurn]) -> Option<f64> {
    let mut total = 0usize;
    let mut correct = 0usize;
    for t in turns {
        if t.candidate_count == 0 || t.gold_domains.is_empty() {
            continue;
        }
        total += 1;
        if let Some(pred) = &t.pred_domain {
            if t.gold_domains.iter().any(|g| g == pred) {
                correct += 1;
            }
        }
    }
    if total == 0 {
        None
    } else {
        Some(correct as f64 / total as f64)
    }
}

/// Turn goal accuracy restricted to single-domain turns, per gold domain.
/// A turn contributes to domain D iff all of its gold triples have
/// domain D; domains with no such turns are omitted.
pub fn per_domain_goal_accuracy(turns: &[EvalTurn]) -> BTreeMap<String, f64> {
    let mut per_domain: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for t in turns {
        let Some(first) = t.gold.first() else {
            continue;
        };
        let domain = &first.domain;
        if !t.gold.iter().all(|g| &g.domain == domain) {
            continue;
        }
        let single = std::slice::from_ref(t);
        let acc = goal_accuracy(single, Level::Turn);
        let e = per_domain.entry(domain.clone()).or_insert((0, 0));
        e.1 += 1;
        if acc == 1.0 {
            e.0 += 1;
        }
    }
    per_domain
        .into_iter()
        .map(|(d, (c, n))| (d, c as f64 / n as f64))
        .collect()
}

// ---------------------------------------------------------------------------
// Random baseline
// ---------------------------------------------------------------------------

/// A slot inventory entry for the random baseline.
pub type SlotInventory = Vec<(String, String)>;

/// Collect the sorted unique (domain, slot) inventory from gold states.
pub fn slot_inventory(gold: &[Vec<GoldTriple>]) -> SlotInventory {
    let mut set: std::collections::BTreeSet<(String, String)> = Default::default();
    for triples in gold {
        for t in triples {
            set.insert((t.domain.clone(), t.slot.clone()));
        }
    }
    set.into_iter().collect()
}

/// Assign each extracted candidate a uniformly random gold slot. Seeded
/// and deterministic; candidates keep their surfaces as values.
pub fn random_baseline(
    turns: &[(String, u32, Vec<String>)], // dialogue_id, turn_index, surfaces
    inventory: &SlotInventory,
    seed: u64,
) -> Result<Vec<(String, u32, TurnState)>> {
    if inventory.is_empty() {
        return Err(Error::Data("empty slot inventory for baseline".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(turns.len());
    for (dialogue_id, turn_index, surfaces) in turns {
        let mut entries: Vec<StateEntry> = Vec::new();
        for surface in surfaces {
            let (domain, slot) = &inventory[rng.random_range(0..inventory.len())];
            let id = SlotId::named(domain, slot);
            if entries.iter().any(|e| e.slot == id) {
                continue; // earlier candidate keeps the slot
            }
            entries.push(StateEntry {
                slot: id,
                value: surface.clone(),
                score: 1.0,
            });
        }
        out.push((dialogue_id.clone(), *turn_index, TurnState { entries }));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub goal_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub turns: usize,
    pub dialogues: usize,
    pub unmapped_entries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub fuzzy_jaccard_threshold: f64,
    pub naming_split: Option<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format: String,
    pub version: u32,
    pub turn: LevelMetrics,
    pub joint: LevelMetrics,
    pub domain_accuracy: Option<f64>,
    pub per_domain_turn_goal_accuracy: BTreeMap<String, f64>,
    pub counts: ReportCounts,
    pub config: ReportConfig,
}

/// Compute the full report over evaluated turns.
pub fn evaluate(
    turns: &[EvalTurn],
    naming_split: Option<String>,
    seed: Option<u64>,
) -> Result<MetricsReport> {
    if turns.is_empty() {
        return Err(Error::Data("cannot evaluate an empty turn set".into()));
    }
    let level = |l: Level| -> LevelMetrics {
        let (precision, recall, f1) = state_matching(turns, l);
        LevelMetrics {
            precision,
            recall,
            f1,
            goal_accuracy: goal_accuracy(turns, l),
        }
    };
    let dialogues: std::collections::BTreeSet<&str> =
        turns.iter().map(|t| t.dialogue_id.as_str()).collect();
    Ok(MetricsReport {
        format: "dsi-report".into(),
        version: 1,
        turn: level(Level::Turn),
        joint: level(Level::Joint),
        domain_accuracy: domain_accuracy(turns),
        per_domain_turn_goal_accuracy: per_domain_goal_accuracy(turns),
        counts: ReportCounts {
            turns: turns.len(),
            dialogues: dialogues.len(),
            unmapped_entries: turns.iter().map(|t| t.unmapped_entries).sum(),
        },
        config: ReportConfig {
            fuzzy_jaccard_threshold: FUZZY_JACCARD_THRESHOLD,
            naming_split,
            seed,
        },
    })
}

/// Write the report as JSON plus a human-readable markdown table
/// (`<path>.md`) with the turn-level / joint-level layout.
pub fn emit_report(report: &MetricsReport, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report).unwrap())
        .map_err(|e| Error::io(path, e))?;
    let md_path = path.with_extension("md");
    let pct = |x: f64| format!("{:.2}", 100.0 * x);
    let mut md = String::new();
    md.push_str("| Level | Precision | Recall | F1 | Accuracy |\n");
    md.push_str("|---|---|---|---|---|\n");
    md.push_str(&format!(
        "| Turn | {} | {} | {} | {} |\n",
        pct(report.turn.precision),
        pct(report.turn.recall),
        pct(report.turn.f1),
        pct(report.turn.goal_accuracy)
    ));
    md.push_str(&format!(
        "| Joint | {} | {} | {} | {} |\n",
        pct(report.joint.precision),
        pct(report.joint.recall),
        pct(report.joint.f1),
        pct(report.joint.goal_accuracy)
    ));
    if let Some(da) = report.domain_accuracy {
        md.push_str(&format!("\nDomain accuracy: {}\n", pct(da)));
    }
    if !report.per_domain_turn_goal_accuracy.is_empty() {
        md.push_str("\n| Domain | Turn goal accuracy |\n|---|---|\n");
        for (d, a) in &report.per_domain_turn_goal_accuracy {
            md.push_str(&format!("| {d} | {} |\n", pct(*a)));
        }
    }
    std::fs::write(&md_path, md).map_err(|e| Error::io(&md_path, e))
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report: MetricsReport = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.to_path_buf(),
        offset: 0,
        message: e.to_string(),
    })?;
    if report.format != "dsi-report" || report.version != 1 {
        return Err(Error::Incompatible {
            path: path.to_path_buf(),
            message: format!("report {}@{}", report.format, report.version),
        });
    }
    Ok(report)
}
