//! ELBO optimization and checkpoint selection.
//!
//! This module never sees gold annotations: it consumes [`TurnFeatures`]
//! only, which carry no gold fields, so the unsupervised contract is
//! enforced by the type system.

use std::io::Write as _;
use std::path::Path;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::TurnFeatures;
use crate::model::{
    backward_batch, decoder_tables, elbo_forward, init_gm_prior, DropoutMasks,
    LatentConfig, Mode, ModelKind, ModelParams, TurnForward,
};

/// Seed stream tags so the epoch shuffle, reparameterization noise,
/// dropout and dev evaluation draw from disjoint deterministic streams.
const STREAM_SHUFFLE: u64 = 0x5348;
const STREAM_NOISE: u64 = 0x4e4f;
const STREAM_DROPOUT: u64 = 0x4452;
const STREAM_DEV: u64 = 0x4445;

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9e3779b97f4a7c15) ^ b.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 27;
    x
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub latent: LatentConfig,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub bn_momentum: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn defaults(model: ModelKind, latent: LatentConfig) -> Self {
        TrainConfig {
            model,
            latent,
            batch_size: 200,
            learning_rate: 0.02,
            epochs: 30,
            warmup_epochs: 5,
            bn_momentum: 0.99,
            grad_clip: 5.0,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        self.latent.validate(self.model)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.model == ModelKind::Gm && self.warmup_epochs == 0 {
            return Err(Error::Config(
                "mixture training requires warmup_epochs >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_elbo: f64,
    pub dev_elbo: Option<f64>,
    pub wallclock_s: f64,
}

/// One retained checkpoint of the series.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: usize,
    pub dev_elbo: Option<f64>,
    pub params: ModelParams,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub history: Vec<EpochStats>,
    pub checkpoints: Vec<Checkpoint>,
}

/// Adam with bias correction.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            theta[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Numerical abort diagnostic: which batch went non-finite and the state
/// of the parameters at that point. The last finite checkpoint series is
/// preserved alongside.
#[derive(Debug)]
pub struct TrainAbort {
    pub epoch: usize,
    pub batch_index: usize,
    pub dialogue_ids: Vec<String>,
    pub param_norm: f64,
    pub partial: TrainOutput,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {} batch {} (param norm {:.3e}; batch dialogues [{}])",
        .0.epoch, .0.batch_index, .0.param_norm, .0.dialogue_ids.join(", "))]
    NumericalAbort(Box<TrainAbort>),
    #[error(transparent)]
    Core(#[from] Error),
}

/// Deterministic per-turn reparameterization noise for dev evaluation.
fn dev_eps(seed: u64, turn: &TurnFeatures, z_dim: usize) -> Array1<f64> {
    let key = mix(
        seed,
        STREAM_DEV ^ fnv(turn.dialogue_id.as_bytes()),
        turn.turn_index as u64,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    Array1::from_shape_fn(z_dim, |_| StandardNormal.sample(&mut rng))
}

fn fnv(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Mean ELBO of a turn set under eval-mode batch norm, no dropout and a
/// fixed noise seed. Bit-identical across repeated calls.
pub fn evaluate_elbo(params: &ModelParams, turns: &[TurnFeatures], seed: u64) -> Result<f64> {
    if turns.is_empty() {
        return Err(Error::Data("cannot evaluate ELBO on zero turns".into()));
    }
    let (tables, _) = decoder_tables(&params.decoder, Mode::Eval)?;
    let mut total = 0.0;
    for turn in turns {
        let eps = dev_eps(seed, turn, params.config.z_dim);
        let fwd = elbo_forward(
            params,
            &tables,
            turn,
            &eps,
            DropoutMasks::none(params.config.hidden),
        )?;
        total += fwd.elbo;
    }
    Ok(total / turns.len() as f64)
}

/// Optimize the ELBO over the train turns, evaluating the dev turns after
/// every epoch. The mixture path pretrains with the standard prior for
/// `warmup_epochs`, initializes the mixture by EM over the warm latents,
/// then optimizes the full mixture objective for `epochs` more epochs.
pub fn train(
    train_turns: &[TurnFeatures],
    dev_turns: &[TurnFeatures],
    config: &TrainConfig,
) -> std::result::Result<TrainOutput, TrainError> {
    config.validate()?;
    if train_turns.is_empty() {
        return Err(TrainError::Core(Error::Data(
            "no train turns with candidates".into(),
        )));
    }

    let mut output = TrainOutput {
        history: Vec::new(),
        checkpoints: Vec::new(),
    };

    match config.model {
        ModelKind::Base => {
            let params = ModelParams::init(
                ModelKind::Base,
                config.latent,
                config.bn_momentum,
                config.seed,
            )?;
            run_phase(params, train_turns, dev_turns, config, config.epochs, 0, &mut output)?;
        }
        ModelKind::Gm => {
            // Warm-up with the standard prior and K temporarily 1.
            let mut warm_latent = config.latent;
            warm_latent.domains = 1;
            let params = ModelParams::init(
                ModelKind::Base,
                warm_latent,
                config.bn_momentum,
                config.seed,
            )?;
            let mut warm_out = TrainOutput {
                history: Vec::new(),
                checkpoints: Vec::new(),
            };
            let warmed = run_phase(
                params,
                train_turns,
                dev_turns,
                config,
                config.warmup_epochs,
                0,
                &mut warm_out,
            )?;
            output.history.extend(warm_out.history);
            let prior = init_gm_prior(&warmed, train_turns, config.latent.domains, config.seed)?;
            let mut params = warmed;
            params.kind = ModelKind::Gm;
            params.config.domains = config.latent.domains;
            params.prior = prior;
            run_phase(
                params,
                train_turns,
                dev_turns,
                config,
                config.epochs,
                config.warmup_epochs,
                &mut output,
            )?;
        }
    }
    Ok(output)
}

/// Run `epochs` epochs starting from `params`; returns the final params.
fn run_phase(
    mut params: ModelParams,
    train_turns: &[TurnFeatures],
    dev_turns: &[TurnFeatures],
    config: &TrainConfig,
    epochs: usize,
    epoch_offset: usize,
    output: &mut TrainOutput,
) -> std::result::Result<ModelParams, TrainError> {
    if epochs == 0 {
        output.checkpoints.push(Checkpoint {
            epoch: epoch_offset,
            dev_elbo: None,
            params: params.clone(),
        });
        return Ok(params);
    }

    let mut adam = Adam::new(params.n_params(), config.learning_rate);
    let started = std::time::Instant::now();

    for e in 0..epochs {
        let epoch = epoch_offset + e + 1;
        let mut order: Vec<usize> = (0..train_turns.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(mix(config.seed, STREAM_SHUFFLE, epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_elbo = 0.0;
        let mut noise_rng =
            ChaCha8Rng::seed_from_u64(mix(config.seed, STREAM_NOISE, epoch as u64));
        let mut dropout_rng =
            ChaCha8Rng::seed_from_u64(mix(config.seed, STREAM_DROPOUT, epoch as u64));

        for (batch_index, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&TurnFeatures> = chunk.iter().map(|&i| &train_turns[i]).collect();
            let (tables, cache) = decoder_tables(&params.decoder, Mode::Train)?;
            let mut forwards: Vec<TurnForward> = Vec::with_capacity(batch.len());
            let mut failed: Option<Error> = None;
            for turn in &batch {
                let eps = Array1::from_shape_fn(params.config.z_dim, |_| {
                    StandardNormal.sample(&mut noise_rng)
                });
                let masks = DropoutMasks::sample(
                    params.config.hidden,
                    params.config.dropout,
                    &mut dropout_rng,
                );
                match elbo_forward(&params, &tables, turn, &eps, masks) {
                    Ok(fwd) => forwards.push(fwd),
                    Err(e) => {
                        failed = Some(e);
                        break;
                    }
                }
            }
            let batch_loss: f64 =
                forwards.iter().map(|f| -f.elbo).sum::<f64>() / batch.len().max(1) as f64;
            if failed.is_some() || !batch_loss.is_finite() {
                let norm = params.to_flat().iter().map(|x| x * x).sum::<f64>().sqrt();
                return Err(TrainError::NumericalAbort(Box::new(TrainAbort {
                    epoch,
                    batch_index,
                    dialogue_ids: batch.iter().map(|t| t.dialogue_id.clone()).collect(),
                    param_norm: norm,
                    partial: output.clone(),
                })));
            }
            epoch_elbo += forwards.iter().map(|f| f.elbo).sum::<f64>();

            let mut grads = backward_batch(&params, &tables, &cache, &batch, &forwards);
            let norm = grads.global_norm();
            if norm > config.grad_clip {
                grads.scale(config.grad_clip / norm);
            }
            let mut theta = params.to_flat();
            adam.step(&mut theta, &grads.to_flat());
            params.set_from_flat(&theta);
            params.decoder.bn_mean.update_running(&cache.bn_mean);
            params.decoder.bn_logvar.update_running(&cache.bn_logvar);
        }

        let train_elbo = epoch_elbo / train_turns.len() as f64;
        let dev_elbo = if dev_turns.is_empty() {
            None
        } else {
            Some(evaluate_elbo(&params, dev_turns, config.seed)?)
        };
        output.history.push(EpochStats {
            epoch,
            train_elbo,
            dev_elbo,
            wallclock_s: started.elapsed().as_secs_f64(),
        });
        output.checkpoints.push(Checkpoint {
            epoch,
            dev_elbo,
            params: params.clone(),
        });
    }
    Ok(params)
}

/// Checkpoint with the maximum dev ELBO; ties break to the earliest epoch.
/// Checkpoints without a dev score only win when nothing has one.
pub fn select_checkpoint(series: &[Checkpoint]) -> Result<&Checkpoint> {
    if series.is_empty() {
        return Err(Error::Data("empty checkpoint series".into()));
    }
    let mut best: Option<&Checkpoint> = None;
    for c in series {
        match (best, c.dev_elbo) {
            (None, _) => best = Some(c),
            (Some(b), Some(elbo)) => {
                let improves = match b.dev_elbo {
                    None => true,
                    Some(prev) => elbo > prev,
                };
                if improves {
                    best = Some(c);
                }
            }
            (Some(_), None) => {}
        }
    }
    Ok(best.expect("series is non-empty"))
}

pub fn write_metrics_log(history: &[EpochStats], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for h in history {
        writeln!(file, "{}", serde_json::to_string(h).unwrap()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoint files
// ---------------------------------------------------------------------------

const TENSOR_MAGIC: &[u8; 8] = b"DSITNSR1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CkptManifest {
    pub format: String,
    pub version: u32,
    pub model: ModelKind,
    pub config: LatentConfig,
    pub bn_momentum: f64,
    pub vocab_sha256: Option<String>,
    pub seed: u64,
    pub epochs: usize,
    pub dev_elbo: Option<f64>,
}

/// Write a checkpoint directory: `manifest.json` plus `params.bin`.
pub fn write_checkpoint(
    checkpoint: &Checkpoint,
    vocab_sha256: Option<String>,
    seed: u64,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params = &checkpoint.params;
    let manifest = CkptManifest {
        format: "dsi-ckpt".into(),
        version: 1,
        model: params.kind,
        config: params.config,
        bn_momentum: params.decoder.bn_mean.momentum,
        vocab_sha256,
        seed,
        epochs: checkpoint.epoch,
        dev_elbo: checkpoint.dev_elbo,
    };
    let manifest_path = dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(|e| Error::io(&manifest_path, e))?;

    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    push_named_tensors(params, &mut tensors);
    let bin_path = dir.join("params.bin");
    let mut buf = Vec::new();
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, dims, data) in &tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(dims.len() as u8);
        for &d in dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(&bin_path, buf).map_err(|e| Error::io(&bin_path, e))
}

fn push_named_tensors(params: &ModelParams, out: &mut Vec<(String, Vec<usize>, Vec<f64>)>) {
    use crate::model::TensorRef;
    for (name, t) in params.tensors() {
        match t {
            TensorRef::V(a) => out.push((name.to_string(), vec![a.len()], a.to_vec())),
            TensorRef::M(a) => out.push((
                name.to_string(),
                vec![a.nrows(), a.ncols()],
                a.iter().cloned().collect(),
            )),
        }
    }
    let bn = &params.decoder.bn_mean;
    out.push(("state.bn_mean.running_mean".into(), vec![bn.running_mean.len()], bn.running_mean.to_vec()));
    out.push(("state.bn_mean.running_var".into(), vec![bn.running_var.len()], bn.running_var.to_vec()));
    out.push(("state.bn_mean.initialized".into(), vec![1], vec![bn.initialized as u8 as f64]));
    let bn = &params.decoder.bn_logvar;
    out.push(("state.bn_logvar.running_mean".into(), vec![bn.running_mean.len()], bn.running_mean.to_vec()));
    out.push(("state.bn_logvar.running_var".into(), vec![bn.running_var.len()], bn.running_var.to_vec()));
    out.push(("state.bn_logvar.initialized".into(), vec![1], vec![bn.initialized as u8 as f64]));
}

pub fn read_checkpoint(dir: &Path) -> Result<(ModelParams, CkptManifest)> {
    let manifest_path = dir.join("manifest.json");
    let manifest: CkptManifest = serde_json::from_str(
        &std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?,
    )
    .map_err(|e| Error::Parse {
        file: manifest_path.clone(),
        offset: 0,
        message: e.to_string(),
    })?;
    if manifest.format != "dsi-ckpt" || manifest.version != 1 {
        return Err(Error::Incompatible {
            path: manifest_path,
            message: format!("checkpoint {}@{}", manifest.format, manifest.version),
        });
    }

    let bin_path = dir.join("params.bin");
    let bytes = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if bytes.len() < 12 || &bytes[..8] != TENSOR_MAGIC {
        return Err(Error::Incompatible {
            path: bin_path,
            message: "bad tensor container magic".into(),
        });
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut tensors: std::collections::HashMap<String, Vec<f64>> = std::collections::HashMap::new();
    let mut pos = 12usize;
    for _ in 0..count {
        let name_len = u16::from_le_bytes(bytes[pos..pos + 2].try_into().unwrap()) as usize;
        pos += 2;
        let name = String::from_utf8_lossy(&bytes[pos..pos + name_len]).to_string();
        pos += name_len;
        let ndim = bytes[pos] as usize;
        pos += 1;
        let mut size = 1usize;
        for _ in 0..ndim {
            size *= u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
            pos += 4;
        }
        let mut data = Vec::with_capacity(size);
        for i in 0..size {
            let off = pos + i * 8;
            data.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
        }
        pos += size * 8;
        tensors.insert(name, data);
    }

    let mut params = ModelParams::init(
        manifest.model,
        manifest.config,
        manifest.bn_momentum,
        0,
    )?;
    {
        use crate::model::TensorMut;
        for (name, t) in params.tensors_mut() {
            let data = tensors
                .get(name)
                .ok_or_else(|| Error::Incompatible {
                    path: dir.join("params.bin"),
                    message: format!("missing tensor '{name}'"),
                })?;
            match t {
                TensorMut::V(a) => {
                    for (x, &v) in a.iter_mut().zip(data) {
                        *x = v;
                    }
                }
                TensorMut::M(a) => {
                    for (x, &v) in a.iter_mut().zip(data) {
                        *x = v;
                    }
                }
            }
        }
    }
    let load_state = |tensors: &std::collections::HashMap<String, Vec<f64>>,
                      name: &str|
     -> Result<Vec<f64>> {
        tensors.get(name).cloned().ok_or_else(|| Error::Incompatible {
            path: dir.join("params.bin"),
            message: format!("missing tensor '{name}'"),
        })
    };
    params.decoder.bn_mean.running_mean =
        Array1::from_vec(load_state(&tensors, "state.bn_mean.running_mean")?);
    params.decoder.bn_mean.running_var =
        Array1::from_vec(load_state(&tensors, "state.bn_mean.running_var")?);
    params.decoder.bn_mean.initialized =
        load_state(&tensors, "state.bn_mean.initialized")?[0] != 0.0;
    params.decoder.bn_logvar.running_mean =
        Array1::from_vec(load_state(&tensors, "state.bn_logvar.running_mean")?);
    params.decoder.bn_logvar.running_var =
        Array1::from_vec(load_state(&tensors, "state.bn_logvar.running_var")?);
    params.decoder.bn_logvar.initialized =
        load_state(&tensors, "state.bn_logvar.initialized")?[0] != 0.0;
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::CandidateObs;
    use crate::model::Activation;
    use rand::Rng;

    fn tiny_latent(vocab: usize) -> LatentConfig {
        LatentConfig {
            slots: 4,
            domains: 1,
            z_dim: 3,
            embed_dim: 2,
            vocab_size: vocab,
            hidden: 4,
            dropout: 0.0,
            activation: Activation::Softplus,
        }
    }

    fn synthetic_turns(n: usize, vocab: usize, seed: u64) -> Vec<TurnFeatures> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let count = rng.random_range(1..4);
                let candidates: Vec<CandidateObs> = (0..count)
                    .map(|_| {
                        let vi = rng.random_range(0..vocab);
                        CandidateObs {
                            vocab_index: vi,
                            embedding: Array1::from_shape_fn(2, |j| {
                                vi as f64 * 0.3 + j as f64 * 0.1 + rng.random::<f64>() * 0.05
                            }),
                        }
                    })
                    .collect();
                let mut counts = std::collections::BTreeMap::new();
                let mut mean_ce = Array1::zeros(2);
                for c in &candidates {
                    *counts.entry(c.vocab_index).or_insert(0.0) += 1.0;
                    mean_ce += &c.embedding;
                }
                mean_ce /= count as f64;
                TurnFeatures {
                    dialogue_id: format!("d{}", i / 3),
                    turn_index: (i % 3) as u32,
                    counts: counts.into_iter().collect(),
                    mean_ce,
                    candidates,
                }
            })
            .collect()
    }

    #[test]
    fn zero_epochs_yields_initial_checkpoint_only() {
        let turns = synthetic_turns(10, 5, 1);
        let mut config = TrainConfig::defaults(ModelKind::Base, tiny_latent(5));
        config.epochs = 0;
        let out = train(&turns, &[], &config).unwrap();
        assert_eq!(out.checkpoints.len(), 1);
        assert_eq!(out.checkpoints[0].epoch, 0);
        assert!(out.history.is_empty());
    }

    #[test]
    fn training_improves_elbo_on_synthetic_corpus() {
        let turns = synthetic_turns(60, 5, 2);
        let dev = synthetic_turns(20, 5, 3);
        let mut config = TrainConfig::defaults(ModelKind::Base, tiny_latent(5));
        config.epochs = 50;
        config.batch_size = 20;
        config.learning_rate = 0.01;
        let out = train(&turns, &dev, &config).unwrap();
        let first = out.history.first().unwrap().train_elbo;
        let last = out.history.last().unwrap().train_elbo;
        assert!(last > first, "elbo did not improve: {first} -> {last}");
    }

    #[test]
    fn same_seed_gives_identical_dev_curves() {
        let turns = synthetic_turns(30, 5, 4);
        let dev = synthetic_turns(10, 5, 5);
        let mut config = TrainConfig::defaults(ModelKind::Base, tiny_latent(5));
        config.epochs = 5;
        config.batch_size = 10;
        let a = train(&turns, &dev, &config).unwrap();
        let b = train(&turns, &dev, &config).unwrap();
        let curve = |o: &TrainOutput| -> Vec<f64> {
            o.history.iter().map(|h| h.dev_elbo.unwrap()).collect()
        };
        assert_eq!(curve(&a), curve(&b));
    }

    #[test]
    fn dev_evaluation_is_bit_identical_on_repeat() {
        let turns = synthetic_turns(30, 5, 6);
        let dev = synthetic_turns(10, 5, 7);
        let mut config = TrainConfig::defaults(ModelKind::Base, tiny_latent(5));
        config.epochs = 2;
        config.batch_size = 10;
        let out = train(&turns, &dev, &config).unwrap();
        let params = &out.checkpoints.last().unwrap().params;
        let a = evaluate_elbo(params, &dev, config.seed).unwrap();
        let b = evaluate_elbo(params, &dev, config.seed).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn gm_training_runs_warmup_then_mixture() {
        let turns = synthetic_turns(40, 5, 8);
        let dev = synthetic_turns(12, 5, 9);
        let mut latent = tiny_latent(5);
        latent.domains = 2;
        let mut config = TrainConfig::defaults(ModelKind::Gm, latent);
        config.epochs = 3;
        config.warmup_epochs = 2;
        config.batch_size = 10;
        let out = train(&turns, &dev, &config).unwrap();
        // Warmup epochs 1..=2 are logged; only mixture-phase checkpoints
        // (epochs 3..=5) are selectable.
        assert_eq!(out.history.len(), 5);
        assert_eq!(out.checkpoints.first().unwrap().epoch, 3);
        assert_eq!(out.checkpoints.len(), 3);
        let params = &out.checkpoints.last().unwrap().params;
        assert_eq!(params.kind, ModelKind::Gm);
        assert_eq!(params.prior.domains(), 2);
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let turns = synthetic_turns(20, 5, 10);
        let mut config = TrainConfig::defaults(ModelKind::Base, tiny_latent(5));
        config.epochs = 30;
        config.batch_size = 5;
        config.learning_rate = 1e18;
        config.grad_clip = f64::INFINITY;
        let err = train(&turns, &[], &config);
        match err {
            Err(TrainError::NumericalAbort(abort)) => {
                assert!(!abort.dialogue_ids.is_empty());
                assert!(abort.epoch >= 1);
            }
            other => panic!("expected numerical abort, got {other:?}"),
        }
    }

    #[test]
    fn select_checkpoint_single_and_monotone_and_interior() {
        let params = ModelParams::init(ModelKind::Base, tiny_latent(5), 0.99, 0).unwrap();
        let mk = |epoch: usize, dev: Option<f64>| Checkpoint {
            epoch,
            dev_elbo: dev,
            params: params.clone(),
        };
        let single = vec![mk(1, Some(-5.0))];
        assert_eq!(select_checkpoint(&single).unwrap().epoch, 1);
        let monotone = vec![mk(1, Some(-5.0)), mk(2, Some(-4.0)), mk(3, Some(-3.0))];
        assert_eq!(select_checkpoint(&monotone).unwrap().epoch, 3);
        let interior = vec![mk(1, Some(-5.0)), mk(2, Some(-2.0)), mk(3, Some(-3.0))];
        assert_eq!(select_checkpoint(&interior).unwrap().epoch, 2);
        let tie = vec![mk(1, Some(-2.0)), mk(2, Some(-2.0))];
        assert_eq!(select_checkpoint(&tie).unwrap().epoch, 1);
    }

    #[test]
    fn checkpoint_roundtrips_through_files() {
        let turns = synthetic_turns(20, 5, 11);
        let mut config = TrainConfig::defaults(ModelKind::Base, tiny_latent(5));
        config.epochs = 2;
        config.batch_size = 10;
        let out = train(&turns, &[], &config).unwrap();
        let ckpt = out.checkpoints.last().unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_checkpoint(ckpt, Some("abc".into()), config.seed, dir.path()).unwrap();
        let (params, manifest) = read_checkpoint(dir.path()).unwrap();
        assert_eq!(params.to_flat(), ckpt.params.to_flat());
        assert_eq!(
            params.decoder.bn_mean.running_mean,
            ckpt.params.decoder.bn_mean.running_mean
        );
        assert_eq!(manifest.vocab_sha256.as_deref(), Some("abc"));
        assert_eq!(manifest.model, ModelKind::Base);
    }

    #[test]
    fn metrics_log_is_jsonl() {
        let history = vec![EpochStats {
            epoch: 1,
            train_elbo: -10.0,
            dev_elbo: Some(-11.0),
            wallclock_s: 0.5,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        write_metrics_log(&history, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let parsed: EpochStats = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(parsed.epoch, 1);
    }
}
