//! Synthetic corpus generation from a known domain/slot/value process.
//!
//! A forward run of the generative story with known parameters: sample a
//! domain per turn, sample slots per candidate, emit a value string from
//! the slot's vocabulary and an embedding near the slot's centroid. The
//! true per-candidate labels are recorded so trained models can be scored
//! against ground truth.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Dialogue, GoldTriple, Turn};
use crate::embed::{EmbeddingCache, HashProvider};
use crate::error::{Error, Result};

pub const TURNS_PER_DIALOGUE: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub domains: usize,
    pub slots_per_domain: usize,
    pub values_per_slot: usize,
    /// When true, slot vocabularies are shared across domains: slot j of
    /// every domain emits the same value strings. When false, every slot
    /// has its own disjoint vocabulary.
    pub overlapping_vocab: bool,
    pub train_turns: usize,
    pub dev_turns: usize,
    pub test_turns: usize,
    pub candidates_per_turn: (usize, usize),
    pub embed_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            domains: 3,
            slots_per_domain: 3,
            values_per_slot: 4,
            overlapping_vocab: false,
            train_turns: 2000,
            dev_turns: 200,
            test_turns: 200,
            candidates_per_turn: (1, 3),
            embed_dim: 256,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("domains", self.domains),
            ("slots_per_domain", self.slots_per_domain),
            ("values_per_slot", self.values_per_slot),
            ("train_turns", self.train_turns),
            ("embed_dim", self.embed_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("synth spec: {name} must be positive")));
            }
        }
        let (lo, hi) = self.candidates_per_turn;
        if lo == 0 || hi < lo || hi > self.slots_per_domain {
            return Err(Error::Config(format!(
                "synth spec: candidates_per_turn ({lo}, {hi}) must satisfy \
                 1 <= lo <= hi <= slots_per_domain"
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("synth spec: noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<SynthSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            file: path.to_path_buf(),
            offset: 0,
            message: e.to_string(),
        })
    }
}

/// True label of one generated candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrueLabel {
    pub dialogue_id: String,
    pub turn_index: u32,
    pub ordinal: u32,
    pub domain: usize,
    /// Global slot index: domain * slots_per_domain + slot-in-domain.
    pub slot: usize,
}

#[derive(Debug)]
pub struct SynthOutput {
    pub corpus: Corpus,
    pub cache: EmbeddingCache,
    pub labels: Vec<TrueLabel>,
    /// Slot centroids actually used for the embeddings (global slot index
    /// to unit vector), for recovery checks.
    pub centroids: Vec<Vec<f64>>,
}

pub fn domain_name(d: usize) -> String {
    format!("d{d}")
}

pub fn slot_name(j: usize) -> String {
    format!("s{j}")
}

pub fn value_surface(spec: &SynthSpec, domain: usize, slot: usize, value: usize) -> String {
    if spec.overlapping_vocab {
        // Shared across domains: the surface does not mention the domain.
        format!("s{slot}_v{value}")
    } else {
        format!("d{domain}_s{slot}_v{value}")
    }
}

/// Generate a corpus, embedding cache and true labels from the spec.
/// Embedding centroids come from the deterministic hash provider applied
/// to the slot's full name, so surfaces and vectors are consistent.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let provider = HashProvider::new(spec.embed_dim, spec.seed);
    let total_slots = spec.domains * spec.slots_per_domain;
    let centroids: Vec<Vec<f64>> = (0..total_slots)
        .map(|g| {
            let d = g / spec.slots_per_domain;
            let j = g % spec.slots_per_domain;
            provider.unit_vector(&format!("{}_{}", domain_name(d), slot_name(j)))
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cache = EmbeddingCache::new(spec.embed_dim);
    let mut labels = Vec::new();
    let mut corpus = Corpus::new("synth");

    for (split, turns) in [
        ("train", spec.train_turns),
        ("dev", spec.dev_turns),
        ("test", spec.test_turns),
    ] {
        let mut dialogues: Vec<Dialogue> = Vec::new();
        let mut current: Option<Dialogue> = None;
        let mut current_domain = 0usize;
        for t in 0..turns {
            if t % TURNS_PER_DIALOGUE == 0 {
                if let Some(d) = current.take() {
                    dialogues.push(d);
                }
                current_domain = rng.random_range(0..spec.domains);
                current = Some(Dialogue {
                    dialogue_id: format!("syn-{split}-{}", t / TURNS_PER_DIALOGUE),
                    turns: Vec::new(),
                });
            }
            let dialogue = current.as_mut().expect("dialogue opened above");
            let turn_index = (t % TURNS_PER_DIALOGUE) as u32;

            // The latent state vector of the generative story only shows
            // up through which slots co-occur; sampling slots directly is
            // an equivalent forward run for a fixed domain.
            let (lo, hi) = spec.candidates_per_turn;
            let count = rng.random_range(lo..=hi);
            let mut slot_pool: Vec<usize> = (0..spec.slots_per_domain).collect();
            let mut chosen = Vec::new();
            for _ in 0..count {
                let pick = rng.random_range(0..slot_pool.len());
                chosen.push(slot_pool.swap_remove(pick));
            }
            chosen.sort_unstable();

            let mut surfaces: Vec<String> = Vec::new();
            let mut gold = Vec::new();
            let mut ordinal = 0u32;
            for &j in &chosen {
                let value = rng.random_range(0..spec.values_per_slot);
                let surface = value_surface(spec, current_domain, j, value);
                if surfaces.contains(&surface) {
                    continue;
                }
                let global_slot = current_domain * spec.slots_per_domain + j;
                let mut vector = centroids[global_slot].clone();
                for x in vector.iter_mut() {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    *x += spec.noise_sigma * noise;
                }
                cache.insert(
                    (dialogue.dialogue_id.clone(), turn_index, ordinal),
                    &vector,
                )?;
                labels.push(TrueLabel {
                    dialogue_id: dialogue.dialogue_id.clone(),
                    turn_index,
                    ordinal,
                    domain: current_domain,
                    slot: global_slot,
                });
                gold.push(GoldTriple::new(
                    &domain_name(current_domain),
                    &slot_name(j),
                    &surface,
                ));
                surfaces.push(surface);
                ordinal += 1;
            }

            let user_utterance = format!("i want {} thanks", surfaces.join(" and "));
            dialogue.turns.push(Turn {
                turn_index,
                system_utterance: if turn_index == 0 {
                    String::new()
                } else {
                    "anything else ?".to_string()
                },
                user_utterance,
                gold_state: Some(gold),
                gold_domains: Some(vec![domain_name(current_domain)]),
            });
        }
        if let Some(d) = current.take() {
            dialogues.push(d);
        }
        corpus.splits.insert(split.to_string(), dialogues);
    }

    Ok(SynthOutput {
        corpus,
        cache,
        labels,
        centroids,
    })
}

/// Label lookup keyed by (dialogue_id, turn_index, ordinal).
pub fn label_index(labels: &[TrueLabel]) -> BTreeMap<(String, u32, u32), &TrueLabel> {
    labels
        .iter()
        .map(|l| ((l.dialogue_id.clone(), l.turn_index, l.ordinal), l))
        .collect()
}

pub fn write_labels(labels: &[TrueLabel], path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(labels).unwrap())
        .map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<TrueLabel>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.to_path_buf(),
        offset: 0,
        message: e.to_string(),
    })
}
