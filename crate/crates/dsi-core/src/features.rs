//! Per-turn model inputs assembled from candidates, vocabulary and the
//! embedding cache. This is the only representation the training and
//! inference code sees; it deliberately carries no gold annotation.

use ndarray::Array1;

use crate::embed::EmbeddingCache;
use crate::error::{Error, Result};
use crate::extract::{TurnCandidates, Vocab};

/// Observed data for one candidate: its vocabulary index (one-hot role)
/// and its contextualized embedding.
#[derive(Debug, Clone)]
pub struct CandidateObs {
    pub vocab_index: usize,
    pub embedding: Array1<f64>,
}

/// Model input for one turn with at least one candidate.
#[derive(Debug, Clone)]
pub struct TurnFeatures {
    pub dialogue_id: String,
    pub turn_index: u32,
    /// Sparse V-dim candidate bag: (vocab index, count).
    pub counts: Vec<(usize, f64)>,
    /// Mean of the candidate embeddings.
    pub mean_ce: Array1<f64>,
    pub candidates: Vec<CandidateObs>,
}

/// Assemble features for every turn that has candidates. Turns with zero
/// candidates are skipped (the generative story has nothing to explain);
/// their ids are returned separately so callers can report them.
pub fn assemble(
    turns: &[TurnCandidates],
    vocab: &Vocab,
    cache: &EmbeddingCache,
) -> Result<(Vec<TurnFeatures>, Vec<(String, u32)>)> {
    let missing = cache.missing_for(turns);
    if !missing.is_empty() {
        let shown: Vec<String> = missing
            .iter()
            .take(8)
            .map(|(d, t, o)| format!("{d}|{t}|{o}"))
            .collect();
        return Err(Error::Data(format!(
            "embedding cache is missing {} candidate entries, e.g. [{}]",
            missing.len(),
            shown.join(", ")
        )));
    }
    let dim = cache.dim;
    let mut features = Vec::new();
    let mut empty_turns = Vec::new();
    for t in turns {
        if t.candidates.is_empty() {
            empty_turns.push((t.dialogue_id.clone(), t.turn_index));
            continue;
        }
        let mut counts_map = std::collections::BTreeMap::new();
        let mut mean_ce = Array1::<f64>::zeros(dim);
        let mut candidates = Vec::with_capacity(t.candidates.len());
        for (ordinal, c) in t.candidates.iter().enumerate() {
            let vocab_index = vocab.lookup(&c.surface);
            let key = (t.dialogue_id.clone(), t.turn_index, ordinal as u32);
            let vec = cache.get(&key).expect("completeness checked above");
            let embedding = Array1::from_vec(vec);
            mean_ce += &embedding;
            *counts_map.entry(vocab_index).or_insert(0.0) += 1.0;
            candidates.push(CandidateObs {
                vocab_index,
                embedding,
            });
        }
        mean_ce /= t.candidates.len() as f64;
        features.push(TurnFeatures {
            dialogue_id: t.dialogue_id.clone(),
            turn_index: t.turn_index,
            counts: counts_map.into_iter().collect(),
            mean_ce,
            candidates,
        });
    }
    Ok((features, empty_turns))
}
