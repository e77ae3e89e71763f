//! Model unit tests. Expected values come from independent brute-force
//! oracles implemented here, not from the code under test.

use super::*;
use crate::features::{CandidateObs, TurnFeatures};
use ndarray::{Array1, Array2};
use rand::Rng;

const BN_MOMENTUM: f64 = 0.99;

fn tiny_config(slots: usize, domains: usize, vocab: usize, n: usize) -> LatentConfig {
    LatentConfig {
        slots,
        domains,
        z_dim: 3,
        embed_dim: n,
        vocab_size: vocab,
        hidden: 4,
        dropout: 0.0,
        activation: Activation::Softplus,
    }
}

/// Random tiny model with identity-configured batch norm so eval mode is
/// usable immediately.
fn tiny_params(kind: ModelKind, slots: usize, domains: usize, vocab: usize, n: usize, seed: u64) -> ModelParams {
    let mut params = ModelParams::init(kind, tiny_config(slots, domains, vocab, n), BN_MOMENTUM, seed).unwrap();
    let dim = params.config.embed_dim;
    params
        .decoder
        .bn_mean
        .force_stats(Array1::zeros(dim), Array1::ones(dim));
    params
        .decoder
        .bn_logvar
        .force_stats(Array1::zeros(dim), Array1::ones(dim));
    params
}

fn random_turn(config: &LatentConfig, count: usize, seed: u64) -> TurnFeatures {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let candidates: Vec<CandidateObs> = (0..count)
        .map(|_| CandidateObs {
            vocab_index: rng.random_range(0..config.vocab_size),
            embedding: Array1::from_shape_fn(config.embed_dim, |_| rng.random::<f64>() * 2.0 - 1.0),
        })
        .collect();
    let mut counts_map = std::collections::BTreeMap::new();
    let mut mean_ce = Array1::zeros(config.embed_dim);
    for c in &candidates {
        *counts_map.entry(c.vocab_index).or_insert(0.0) += 1.0;
        mean_ce += &c.embedding;
    }
    mean_ce /= count as f64;
    TurnFeatures {
        dialogue_id: "t".into(),
        turn_index: 0,
        counts: counts_map.into_iter().collect(),
        mean_ce,
        candidates,
    }
}

// --- independent oracles -------------------------------------------------

fn oracle_softmax(logits: &[f64]) -> Vec<f64> {
    let exps: Vec<f64> = logits.iter().map(|x| x.exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn oracle_gauss_pdf_log(x: &Array1<f64>, mu: &Array1<f64>, var: &Array1<f64>) -> f64 {
    let mut acc = 0.0;
    for j in 0..x.len() {
        let diff = x[j] - mu[j];
        acc += (2.0 * std::f64::consts::PI * var[j]).ln() + diff * diff / var[j];
    }
    -0.5 * acc
}

/// Explicit enumeration of log p(t|z) over the slot variable.
fn oracle_recon(
    params: &ModelParams,
    tables: &DecoderTables,
    turn: &TurnFeatures,
    z: &Array1<f64>,
) -> f64 {
    let gamma = {
        let logits: Vec<f64> = (0..params.config.slots)
            .map(|s| {
                let mut acc = params.decoder.b_slot[s];
                for j in 0..z.len() {
                    acc += params.decoder.w_slot[[s, j]] * z[j];
                }
                acc
            })
            .collect();
        oracle_softmax(&logits)
    };
    let mut total = 0.0;
    for cand in &turn.candidates {
        let mut p_oh = 0.0;
        let mut p_ce = 0.0;
        for s in 0..params.config.slots {
            p_oh += gamma[s] * tables.log_lambda[[s, cand.vocab_index]].exp();
            let mu = tables.mu_s.row(s).to_owned();
            let var = tables.log_var_s.row(s).mapv(f64::exp);
            p_ce += gamma[s] * oracle_gauss_pdf_log(&cand.embedding, &mu, &var).exp();
        }
        total += p_oh.ln() + p_ce.ln();
    }
    total
}

// --- slot / value / embedding distributions ------------------------------

#[test]
fn slot_distribution_zero_logits_is_uniform() {
    let mut params = tiny_params(ModelKind::Base, 5, 1, 4, 2, 0);
    params.decoder.w_slot.fill(0.0);
    params.decoder.b_slot.fill(0.0);
    let gamma = slot_distribution(&params.decoder, &Array1::zeros(3));
    for &g in gamma.iter() {
        assert!((g - 0.2).abs() < 1e-12);
    }
}

#[test]
fn slot_distribution_dominant_logit_wins() {
    let mut params = tiny_params(ModelKind::Base, 4, 1, 4, 2, 0);
    params.decoder.w_slot.fill(0.0);
    params.decoder.b_slot.fill(0.0);
    params.decoder.b_slot[0] = 10.0;
    let gamma = slot_distribution(&params.decoder, &Array1::zeros(3));
    assert!(gamma[0] > 0.999);
}

#[test]
fn slot_distribution_matches_oracle() {
    for seed in 0..20 {
        let params = tiny_params(ModelKind::Base, 5, 1, 4, 2, seed);
        let z = Array1::from_shape_fn(3, |j| (seed as f64 * 0.37 + j as f64).sin());
        let gamma = slot_distribution(&params.decoder, &z);
        let logits: Vec<f64> = (0..5)
            .map(|s| {
                let mut acc = params.decoder.b_slot[s];
                for j in 0..3 {
                    acc += params.decoder.w_slot[[s, j]] * z[j];
                }
                acc
            })
            .collect();
        let expect = oracle_softmax(&logits);
        let sum: f64 = gamma.sum();
        assert!((sum - 1.0).abs() < 1e-6);
        for s in 0..5 {
            assert!((gamma[s] - expect[s]).abs() < 1e-10, "seed {seed} slot {s}");
        }
    }
}

#[test]
fn value_distribution_zero_weights_uniform_and_index_error() {
    let mut params = tiny_params(ModelKind::Base, 3, 1, 6, 2, 1);
    params.decoder.w_value.fill(0.0);
    params.decoder.b_value.fill(0.0);
    let lambda = value_distribution(&params.decoder, 1).unwrap();
    for &p in lambda.iter() {
        assert!((p - 1.0 / 6.0).abs() < 1e-12);
    }
    assert!(value_distribution(&params.decoder, 3).is_err());
}

#[test]
fn value_distribution_matches_oracle() {
    let params = tiny_params(ModelKind::Base, 4, 1, 7, 2, 9);
    for s in 0..4 {
        let lambda = value_distribution(&params.decoder, s).unwrap();
        let logits: Vec<f64> = (0..7)
            .map(|v| params.decoder.w_value[[s, v]] + params.decoder.b_value[v])
            .collect();
        let expect = oracle_softmax(&logits);
        for v in 0..7 {
            assert!((lambda[v] - expect[v]).abs() < 1e-10);
        }
    }
}

#[test]
fn embedding_distribution_identity_bn_passes_bias_through() {
    let mut params = tiny_params(ModelKind::Base, 3, 1, 4, 2, 2);
    params.decoder.w_ce_mean.fill(0.0);
    params.decoder.b_ce_mean = Array1::from_vec(vec![0.7, -1.3]);
    let (mu, _) = embedding_distribution(&params.decoder, 1, Mode::Eval).unwrap();
    // Identity stats leave only the eps term in 1/sqrt(var + eps).
    assert!((mu[0] - 0.7).abs() < 1e-4);
    assert!((mu[1] + 1.3).abs() < 1e-4);
}

#[test]
fn embedding_distribution_variance_is_positive() {
    let params = tiny_params(ModelKind::Base, 6, 1, 4, 3, 3);
    for s in 0..6 {
        let (_, lv) = embedding_distribution(&params.decoder, s, Mode::Eval).unwrap();
        for &x in lv.iter() {
            assert!(x.exp() > 0.0);
        }
    }
}

#[test]
fn train_mode_bn_normalizes_over_slot_batch() {
    let params = tiny_params(ModelKind::Base, 8, 1, 4, 3, 4);
    let (tables, cache) = decoder_tables(&params.decoder, Mode::Train).unwrap();
    // Undo scale/shift, then recompute batch statistics by brute force:
    // per component, mean 0 and (biased) variance ~1.
    let s_count = 8;
    for j in 0..3 {
        let mut vals = Vec::new();
        for s in 0..s_count {
            let y = tables.mu_s[[s, j]];
            let xhat =
                (y - params.decoder.bn_mean.shift[j]) / params.decoder.bn_mean.scale[j];
            vals.push(xhat);
        }
        let mean: f64 = vals.iter().sum::<f64>() / s_count as f64;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / s_count as f64;
        assert!(mean.abs() < 1e-10, "component {j} mean {mean}");
        // Variance is 1 up to the eps in the normalizer.
        assert!((var - 1.0).abs() < 1e-3, "component {j} var {var}");
    }
    drop(cache);
}

#[test]
fn eval_mode_before_training_is_an_error() {
    let params = ModelParams::init(ModelKind::Base, tiny_config(3, 1, 4, 2), BN_MOMENTUM, 5).unwrap();
    let err = embedding_distribution(&params.decoder, 0, Mode::Eval).unwrap_err();
    assert!(err.to_string().contains("uninitialized"), "{err}");
}

// --- encoder --------------------------------------------------------------

#[test]
fn encode_zero_weights_returns_head_bias() {
    let mut params = tiny_params(ModelKind::Base, 3, 1, 4, 2, 6);
    params.encoder.w1.fill(0.0);
    params.encoder.w2.fill(0.0);
    params.encoder.w_mean.fill(0.0);
    params.encoder.w_logvar.fill(0.0);
    params.encoder.b_mean = Array1::from_vec(vec![0.5, -0.25, 1.0]);
    let turn = random_turn(&params.config, 2, 0);
    let (mu_q, _, _) = encode(&params, &turn, DropoutMasks::none(4));
    assert_eq!(mu_q, Array1::from_vec(vec![0.5, -0.25, 1.0]));
}

#[test]
fn encode_is_deterministic_without_dropout() {
    let params = tiny_params(ModelKind::Base, 3, 1, 4, 2, 7);
    let turn = random_turn(&params.config, 3, 1);
    let (a, alv, _) = encode(&params, &turn, DropoutMasks::none(4));
    let (b, blv, _) = encode(&params, &turn, DropoutMasks::none(4));
    assert_eq!(a, b);
    assert_eq!(alv, blv);
}

#[test]
fn encode_matches_dense_path_oracle() {
    // Recompute the encoder with a dense feature vector and plain loops.
    let params = tiny_params(ModelKind::Base, 3, 1, 5, 2, 8);
    let turn = random_turn(&params.config, 3, 2);
    let v = params.config.vocab_size;
    let mut x = vec![0.0; v + params.config.embed_dim];
    for &(idx, c) in &turn.counts {
        x[idx] = c;
    }
    for j in 0..params.config.embed_dim {
        x[v + j] = turn.mean_ce[j];
    }
    let dense_linear = |w: &Array2<f64>, b: &Array1<f64>, input: &[f64]| -> Vec<f64> {
        (0..w.nrows())
            .map(|i| {
                let mut acc = b[i];
                for j in 0..input.len() {
                    acc += w[[i, j]] * input[j];
                }
                acc
            })
            .collect()
    };
    let h1: Vec<f64> = dense_linear(&params.encoder.w1, &params.encoder.b1, &x)
        .into_iter()
        .map(|v| (1.0 + v.exp()).ln())
        .collect();
    let h2: Vec<f64> = dense_linear(&params.encoder.w2, &params.encoder.b2, &h1)
        .into_iter()
        .map(|v| (1.0 + v.exp()).ln())
        .collect();
    let mu_expect = dense_linear(&params.encoder.w_mean, &params.encoder.b_mean, &h2);
    let (mu_q, _, _) = encode(&params, &turn, DropoutMasks::none(4));
    for j in 0..mu_q.len() {
        assert!((mu_q[j] - mu_expect[j]).abs() < 1e-10);
    }
}

// --- reparameterization ---------------------------------------------------

#[test]
fn reparameterize_zero_noise_returns_mean() {
    let mu = Array1::from_vec(vec![1.0, -2.0]);
    let lv = Array1::from_vec(vec![0.3, -0.7]);
    assert_eq!(reparameterize(&mu, &lv, &Array1::zeros(2)), mu);
}

#[test]
fn reparameterize_unit_logvar_shifts_by_basis() {
    let mu = Array1::from_vec(vec![1.0, -2.0]);
    let lv = Array1::zeros(2);
    let eps = Array1::from_vec(vec![1.0, 0.0]);
    let z = reparameterize(&mu, &lv, &eps);
    assert_eq!(z, Array1::from_vec(vec![2.0, -2.0]));
}

#[test]
fn reparameterize_monte_carlo_mean() {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mu = Array1::from_vec(vec![0.5, -1.5]);
    let lv = Array1::from_vec(vec![0.2, -0.4]);
    let n = 100_000;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let mut sum = Array1::<f64>::zeros(2);
    for _ in 0..n {
        let eps = Array1::from_shape_fn(2, |_| StandardNormal.sample(&mut rng));
        sum += &reparameterize(&mu, &lv, &eps);
    }
    sum /= n as f64;
    for j in 0..2 {
        let sigma = (0.5 * lv[j]).exp();
        let bound = 3.0 * sigma / (n as f64).sqrt();
        assert!((sum[j] - mu[j]).abs() < bound, "component {j}");
    }
}

// --- reconstruction -------------------------------------------------------

#[test]
fn recon_single_slot_reduces_to_single_component() {
    let params = tiny_params(ModelKind::Base, 1, 1, 4, 2, 12);
    let (tables, _) = decoder_tables(&params.decoder, Mode::Eval).unwrap();
    let turn = random_turn(&params.config, 1, 3);
    let log_gamma = Array1::zeros(1);
    let (recon, _, _) = reconstruction_loglik(&log_gamma, &tables, &turn).unwrap();
    let cand = &turn.candidates[0];
    let expect = tables.log_lambda[[0, cand.vocab_index]]
        + oracle_gauss_pdf_log(
            &cand.embedding,
            &tables.mu_s.row(0).to_owned(),
            &tables.log_var_s.row(0).mapv(f64::exp),
        );
    assert!((recon - expect).abs() < 1e-10);
}

#[test]
fn recon_matches_enumeration_oracle() {
    for seed in 0..10 {
        let params = tiny_params(ModelKind::Base, 5, 1, 8, 3, 100 + seed);
        let (tables, _) = decoder_tables(&params.decoder, Mode::Eval).unwrap();
        let turn = random_turn(&params.config, 3, seed);
        let z = Array1::from_shape_fn(3, |j| ((seed + 1) as f64 * 0.31 + j as f64).cos());
        let log_gamma = log_softmax(&(params.decoder.w_slot.dot(&z) + &params.decoder.b_slot));
        let (recon, _, _) = reconstruction_loglik(&log_gamma, &tables, &turn).unwrap();
        let expect = oracle_recon(&params, &tables, &turn, &z);
        assert!((recon - expect).abs() < 1e-8, "seed {seed}: {recon} vs {expect}");
    }
}

#[test]
fn recon_duplicate_candidate_doubles_contribution() {
    let params = tiny_params(ModelKind::Base, 3, 1, 4, 2, 13);
    let (tables, _) = decoder_tables(&params.decoder, Mode::Eval).unwrap();
    let mut turn = random_turn(&params.config, 1, 5);
    let log_gamma = log_softmax(&Array1::from_vec(vec![0.1, -0.4, 0.3]));
    let (single, _, _) = reconstruction_loglik(&log_gamma, &tables, &turn).unwrap();
    turn.candidates.push(turn.candidates[0].clone());
    let (double, _, _) = reconstruction_loglik(&log_gamma, &tables, &turn).unwrap();
    assert!((double - 2.0 * single).abs() < 1e-10);
}

#[test]
fn recon_with_no_candidates_is_an_error() {
    let params = tiny_params(ModelKind::Base, 3, 1, 4, 2, 14);
    let (tables, _) = decoder_tables(&params.decoder, Mode::Eval).unwrap();
    let mut turn = random_turn(&params.config, 1, 6);
    turn.candidates.clear();
    assert!(reconstruction_loglik(&Array1::zeros(3), &tables, &turn).is_err());
}

#[test]
fn recon_non_finite_reports_turn_id() {
    let mut params = tiny_params(ModelKind::Base, 3, 1, 4, 2, 15);
    params.decoder.b_ce_mean.fill(f64::NAN);
    params.decoder.bn_mean.force_stats(
        Array1::from_vec(vec![f64::NAN, f64::NAN]),
        Array1::ones(2),
    );
    let (tables, _) = decoder_tables(&params.decoder, Mode::Eval).unwrap();
    let turn = random_turn(&params.config, 1, 7);
    let err = reconstruction_loglik(&Array1::zeros(3), &tables, &turn).unwrap_err();
    assert!(err.to_string().contains("t:0"), "{err}");
}

// --- domain posterior and KL ----------------------------------------------

#[test]
fn domain_posterior_single_domain_is_one() {
    let prior = PriorParams::Standard { z_dim: 3 };
    let q = domain_posterior(&prior, &Array1::zeros(3));
    assert_eq!(q, Array1::<f64>::ones(1));
}

#[test]
fn domain_posterior_symmetric_components_is_uniform() {
    let prior = PriorParams::Mixture {
        logit_pi: Array1::zeros(3),
        mu: Array2::zeros((3, 2)),
        log_var: Array2::zeros((3, 2)),
    };
    let q = domain_posterior(&prior, &Array1::from_vec(vec![0.4, -0.2]));
    for &p in q.iter() {
        assert!((p - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn domain_posterior_matches_density_ratio_oracle() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let k = 3;
        let z_dim = 2;
        let logit_pi = Array1::from_shape_fn(k, |_| rng.random::<f64>() * 2.0 - 1.0);
        let mu = Array2::from_shape_fn((k, z_dim), |_| rng.random::<f64>() * 2.0 - 1.0);
        let log_var = Array2::from_shape_fn((k, z_dim), |_| rng.random::<f64>() - 0.5);
        let prior = PriorParams::Mixture {
            logit_pi: logit_pi.clone(),
            mu: mu.clone(),
            log_var: log_var.clone(),
        };
        let z = Array1::from_shape_fn(z_dim, |_| rng.random::<f64>() * 2.0 - 1.0);
        let q = domain_posterior(&prior, &z);
        // Oracle: unnormalized pi_d * N(z; mu_d, var_d) in linear space.
        let pi = oracle_softmax(logit_pi.as_slice().unwrap());
        let mut dens = vec![0.0; k];
        for d in 0..k {
            dens[d] = pi[d]
                * oracle_gauss_pdf_log(&z, &mu.row(d).to_owned(), &log_var.row(d).mapv(f64::exp))
                    .exp();
        }
        let total: f64 = dens.iter().sum();
        for d in 0..k {
            assert!((q[d] - dens[d] / total).abs() < 1e-10);
        }
        let sum: f64 = q.sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}

#[test]
fn kl_identical_distributions_is_zero_base() {
    let prior = PriorParams::Standard { z_dim: 3 };
    let (kl, _) = kl_term(&Array1::zeros(3), &Array1::zeros(3), &prior, None);
    assert!(kl.abs() < 1e-12);
}

#[test]
fn kl_identical_distributions_is_zero_mixture() {
    // All components equal to q and q_d = pi.
    let mu_q = Array1::from_vec(vec![0.4, -0.6]);
    let lv_q = Array1::from_vec(vec![0.2, -0.1]);
    let k = 3;
    let mut mu = Array2::zeros((k, 2));
    let mut lv = Array2::zeros((k, 2));
    for d in 0..k {
        mu.row_mut(d).assign(&mu_q);
        lv.row_mut(d).assign(&lv_q);
    }
    let prior = PriorParams::Mixture {
        logit_pi: Array1::from_vec(vec![0.3, -0.2, 0.9]),
        mu,
        log_var: lv,
    };
    let pi = prior.pi();
    let (kl, _) = kl_term(&mu_q, &lv_q, &prior, Some(&pi));
    assert!(kl.abs() < 1e-12, "kl = {kl}");
}

#[test]
fn kl_is_nonnegative_on_random_inputs() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
    for _ in 0..500 {
        let z_dim = 3;
        let mu_q = Array1::from_shape_fn(z_dim, |_| rng.random::<f64>() * 4.0 - 2.0);
        let lv_q = Array1::from_shape_fn(z_dim, |_| rng.random::<f64>() * 2.0 - 1.0);
        let k = rng.random_range(1..4);
        let prior = PriorParams::Mixture {
            logit_pi: Array1::from_shape_fn(k, |_| rng.random::<f64>() * 2.0 - 1.0),
            mu: Array2::from_shape_fn((k, z_dim), |_| rng.random::<f64>() * 4.0 - 2.0),
            log_var: Array2::from_shape_fn((k, z_dim), |_| rng.random::<f64>() * 2.0 - 1.0),
        };
        // Arbitrary domain posterior.
        let raw = Array1::from_shape_fn(k, |_| rng.random::<f64>() + 1e-3);
        let q_d = &raw / raw.sum();
        let (kl, _) = kl_term(&mu_q, &lv_q, &prior, Some(&q_d));
        assert!(kl >= -1e-12, "negative KL {kl}");
    }
}

#[test]
fn kl_matches_monte_carlo_estimate() {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mu_q = Array1::from_vec(vec![0.5, -0.3]);
    let lv_q = Array1::from_vec(vec![-0.2, 0.4]);
    let prior = PriorParams::Mixture {
        logit_pi: Array1::from_vec(vec![0.2, -0.5]),
        mu: Array2::from_shape_vec((2, 2), vec![1.0, 0.0, -1.0, 0.5]).unwrap(),
        log_var: Array2::from_shape_vec((2, 2), vec![0.1, -0.3, 0.2, 0.0]).unwrap(),
    };
    let q_d = Array1::from_vec(vec![0.7, 0.3]);
    let (kl, _) = kl_term(&mu_q, &lv_q, &prior, Some(&q_d));

    // MC oracle: E_{z~q,d~q_d}[log q(z) + log q_d - log p(z|d) - log pi_d].
    let n = 100_000;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
    let log_pi = prior.log_pi();
    let (mu_p, lv_p) = match &prior {
        PriorParams::Mixture { mu, log_var, .. } => (mu.clone(), log_var.clone()),
        _ => unreachable!(),
    };
    let mut acc = 0.0;
    for _ in 0..n {
        let eps = Array1::from_shape_fn(2, |_| StandardNormal.sample(&mut rng));
        let z = reparameterize(&mu_q, &lv_q, &eps);
        let log_q_z = oracle_gauss_pdf_log(&z, &mu_q, &lv_q.mapv(f64::exp));
        let u: f64 = rng.random();
        let d = if u < q_d[0] { 0 } else { 1 };
        let log_p_z_d =
            oracle_gauss_pdf_log(&z, &mu_p.row(d).to_owned(), &lv_p.row(d).mapv(f64::exp));
        acc += log_q_z + q_d[d].ln() - log_p_z_d - log_pi[d];
    }
    let mc = acc / n as f64;
    let rel = (kl - mc).abs() / kl.abs().max(1e-9);
    assert!(rel < 0.01, "closed {kl} vs MC {mc} (rel {rel})");
}

// --- full ELBO ------------------------------------------------------------

#[test]
fn elbo_forward_runs_for_both_models() {
    for kind in [ModelKind::Base, ModelKind::Gm] {
        let domains = if kind == ModelKind::Base { 1 } else { 3 };
        let params = tiny_params(kind, 4, domains, 6, 2, 51);
        let (tables, _) = decoder_tables(&params.decoder, Mode::Eval).unwrap();
        let turn = random_turn(&params.config, 2, 8);
        let eps = Array1::from_vec(vec![0.1, -0.2, 0.3]);
        let fwd = elbo_forward(&params, &tables, &turn, &eps, DropoutMasks::none(4)).unwrap();
        assert!(fwd.elbo.is_finite());
        assert!((fwd.elbo - (fwd.recon - fwd.kl)).abs() < 1e-12);
        if kind == ModelKind::Gm {
            let q = fwd.q_d.unwrap();
            assert!((q.sum() - 1.0).abs() < 1e-6);
        }
    }
}

// --- assignment -----------------------------------------------------------

#[test]
fn assign_slots_single_slot_yields_slot_zero() {
    let params = tiny_params(ModelKind::Base, 1, 1, 4, 2, 61);
    let (tables, _) = decoder_tables(&params.decoder, Mode::Eval).unwrap();
    let turn = random_turn(&params.config, 2, 9);
    let slots = assign_slots(&params, &tables, &turn).unwrap();
    for a in slots {
        assert_eq!(a.slot, 0);
        assert_eq!(a.posterior, Array1::<f64>::ones(1));
    }
}

#[test]
fn assign_slots_matches_bruteforce_product() {
    for seed in 0..10 {
        let params = tiny_params(ModelKind::Base, 5, 1, 8, 3, 200 + seed);
        let (tables, _) = decoder_tables(&params.decoder, Mode::Eval).unwrap();
        let turn = random_turn(&params.config, 3, 10 + seed);
        let assignments = assign_slots(&params, &tables, &turn).unwrap();
        let (mu_q, _, _) = encode(&params, &turn, DropoutMasks::none(4));
        let gamma = slot_distribution(&params.decoder, &mu_q);
        for (ci, cand) in turn.candidates.iter().enumerate() {
            let mut unnorm = vec![0.0; 5];
            for s in 0..5 {
                let lambda_sv = tables.log_lambda[[s, cand.vocab_index]].exp();
                let dens = oracle_gauss_pdf_log(
                    &cand.embedding,
                    &tables.mu_s.row(s).to_owned(),
                    &tables.log_var_s.row(s).mapv(f64::exp),
                )
                .exp();
                unnorm[s] = gamma[s] * lambda_sv * dens;
            }
            let total: f64 = unnorm.iter().sum();
            for s in 0..5 {
                let expect = unnorm[s] / total;
                assert!(
                    (assignments[ci].posterior[s] - expect).abs() < 1e-8,
                    "seed {seed} cand {ci} slot {s}"
                );
            }
        }
    }
}

#[test]
fn assign_slots_argmax_invariant_to_uniform_rescaling() {
    // Multiplying every slot's factors by the same positive constant only
    // shifts all log scores, which the normalization removes.
    let params = tiny_params(ModelKind::Base, 4, 1, 6, 2, 71);
    let (tables, _) = decoder_tables(&params.decoder, Mode::Eval).unwrap();
    let turn = random_turn(&params.config, 2, 11);
    let before = assign_slots(&params, &tables, &turn).unwrap();
    let shift = 2.5_f64.ln();
    for (ci, cand) in turn.candidates.iter().enumerate() {
        let (mu_q, _, _) = encode(&params, &turn, DropoutMasks::none(4));
        let log_gamma =
            log_softmax(&(params.decoder.w_slot.dot(&mu_q) + &params.decoder.b_slot));
        let mut scores = Array1::zeros(4);
        for s in 0..4 {
            let mut quad = 0.0;
            for j in 0..2 {
                let diff = cand.embedding[j] - tables.mu_s[[s, j]];
                quad += diff * diff * tables.exp_neg_lv[[s, j]];
            }
            scores[s] = log_gamma[s]
                + tables.log_lambda[[s, cand.vocab_index]]
                + tables.gauss_const[s]
                - 0.5 * quad
                + 3.0 * shift;
        }
        let rescaled = softmax(&scores);
        assert_eq!(argmax(&rescaled), before[ci].slot);
        for s in 0..4 {
            assert!((rescaled[s] - before[ci].posterior[s]).abs() < 1e-10);
        }
    }
}

#[test]
fn assign_domain_base_is_domain_zero() {
    let params = tiny_params(ModelKind::Base, 3, 1, 4, 2, 81);
    let turn = random_turn(&params.config, 2, 12);
    let (d, q) = assign_domain(&params, &turn);
    assert_eq!(d, 0);
    assert_eq!(q, Array1::<f64>::ones(1));
}

#[test]
fn assign_domain_symmetric_prior_ties_to_lowest_index() {
    let mut params = tiny_params(ModelKind::Gm, 3, 3, 4, 2, 82);
    params.prior = PriorParams::Mixture {
        logit_pi: Array1::zeros(3),
        mu: Array2::zeros((3, 3)),
        log_var: Array2::zeros((3, 3)),
    };
    let turn = random_turn(&params.config, 2, 13);
    let (d, q) = assign_domain(&params, &turn);
    assert_eq!(d, 0);
    for &p in q.iter() {
        assert!((p - 1.0 / 3.0).abs() < 1e-12);
    }
}

// --- gradient check (fast smoke version) -----------------------------------

fn batch_loss(params: &ModelParams, turns: &[&TurnFeatures], eps: &[Array1<f64>], mode: Mode) -> f64 {
    let (tables, _) = decoder_tables(&params.decoder, mode).unwrap();
    let mut total = 0.0;
    for (turn, e) in turns.iter().zip(eps) {
        let fwd = elbo_forward(params, &tables, turn, e, DropoutMasks::none(params.config.hidden))
            .unwrap();
        total += -fwd.elbo;
    }
    total / turns.len() as f64
}

fn finite_difference_check(kind: ModelKind, domains: usize, mode: Mode, seed: u64) {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let params = tiny_params(kind, 4, domains, 5, 2, seed);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed * 7 + 1);
    let turns: Vec<TurnFeatures> = (0..3)
        .map(|i| random_turn(&params.config, 2, seed * 13 + i))
        .collect();
    let turn_refs: Vec<&TurnFeatures> = turns.iter().collect();
    let eps: Vec<Array1<f64>> = (0..3)
        .map(|_| Array1::from_shape_fn(3, |_| StandardNormal.sample(&mut rng)))
        .collect();

    let (tables, cache) = decoder_tables(&params.decoder, mode).unwrap();
    let forwards: Vec<TurnForward> = turn_refs
        .iter()
        .zip(&eps)
        .map(|(t, e)| {
            elbo_forward(&params, &tables, t, e, DropoutMasks::none(4)).unwrap()
        })
        .collect();
    let grads = backward_batch(&params, &tables, &cache, &turn_refs, &forwards);
    let analytic = grads.to_flat();

    let theta = params.to_flat();
    let h = 1e-4;
    let mut worst = 0.0_f64;
    for i in 0..theta.len() {
        let mut plus = params.clone();
        let mut th = theta.clone();
        th[i] += h;
        plus.set_from_flat(&th);
        let mut minus = params.clone();
        th[i] = theta[i] - h;
        minus.set_from_flat(&th);
        let fd = (batch_loss(&plus, &turn_refs, &eps, mode)
            - batch_loss(&minus, &turn_refs, &eps, mode))
            / (2.0 * h);
        let denom = analytic[i].abs().max(fd.abs()).max(1e-3);
        let rel = (analytic[i] - fd).abs() / denom;
        worst = worst.max(rel);
        assert!(
            rel <= 1e-4,
            "param {i}: analytic {} vs fd {} (rel {rel})",
            analytic[i],
            fd
        );
    }
    assert!(worst <= 1e-4);
}

#[test]
fn gradients_match_finite_differences_base_eval_bn() {
    finite_difference_check(ModelKind::Base, 1, Mode::Eval, 3);
}

#[test]
fn gradients_match_finite_differences_gm_eval_bn() {
    finite_difference_check(ModelKind::Gm, 3, Mode::Eval, 4);
}

#[test]
fn gradients_match_finite_differences_train_bn() {
    finite_difference_check(ModelKind::Base, 1, Mode::Train, 5);
    finite_difference_check(ModelKind::Gm, 2, Mode::Train, 6);
}

// --- EM -------------------------------------------------------------------

#[test]
fn em_single_component_recovers_mean_and_variance() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(91);
    let n = 200;
    let data = Array2::from_shape_fn((n, 2), |(_, j)| {
        rng.random::<f64>() + if j == 0 { 1.0 } else { -2.0 }
    });
    let fit = fit_diag_gmm(&data, 1, 50, 1e-8, 0).unwrap();
    let mean = data.sum_axis(ndarray::Axis(0)) / n as f64;
    let mut var = Array1::<f64>::zeros(2);
    for row in data.rows() {
        for j in 0..2 {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    var /= n as f64;
    for j in 0..2 {
        assert!((fit.means[[0, j]] - mean[j]).abs() < 1e-9);
        assert!((fit.variances[[0, j]] - var[j]).abs() < 1e-9);
    }
    assert!((fit.weights[0] - 1.0).abs() < 1e-12);
}

#[test]
fn em_loglik_is_nondecreasing() {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(92);
    let data = Array2::from_shape_fn((120, 2), |(i, _)| {
        let center = (i % 3) as f64 * 4.0;
        let noise: f64 = StandardNormal.sample(&mut rng);
        center + 0.3 * noise
    });
    let fit = fit_diag_gmm(&data, 3, 40, 0.0, 1).unwrap();
    for w in fit.loglik_trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-9, "loglik dropped: {} -> {}", w[0], w[1]);
    }
}

#[test]
fn em_recovers_separated_cluster_means() {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(93);
    let centers = [[0.0, 0.0], [5.0, 5.0], [-5.0, 5.0]];
    let n = 600;
    let data = Array2::from_shape_fn((n, 2), |(i, j)| {
        let c = centers[i % 3][j];
        let noise: f64 = StandardNormal.sample(&mut rng);
        c + 0.2 * noise
    });
    let fit = fit_diag_gmm(&data, 3, 60, 1e-9, 2).unwrap();
    // Each true center must be within 0.1 of some fitted mean.
    for c in centers {
        let best = (0..3)
            .map(|k| {
                let dx = fit.means[[k, 0]] - c[0];
                let dy = fit.means[[k, 1]] - c[1];
                (dx * dx + dy * dy).sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        assert!(best < 0.1, "center {c:?} best distance {best}");
    }
}

#[test]
fn em_more_components_than_points_is_config_error() {
    let data = Array2::zeros((3, 2));
    assert!(fit_diag_gmm(&data, 5, 10, 1e-5, 0).is_err());
}

#[test]
fn init_gm_prior_rejects_k_larger_than_turns() {
    let params = tiny_params(ModelKind::Base, 3, 1, 4, 2, 99);
    let turns: Vec<TurnFeatures> = (0..2).map(|i| random_turn(&params.config, 2, i)).collect();
    assert!(init_gm_prior(&params, &turns, 5, 0).is_err());
}

#[test]
fn init_gm_prior_single_component_is_latent_moments() {
    let params = tiny_params(ModelKind::Base, 3, 1, 4, 2, 98);
    let turns: Vec<TurnFeatures> = (0..30).map(|i| random_turn(&params.config, 2, i)).collect();
    let prior = init_gm_prior(&params, &turns, 1, 0).unwrap();
    let mut latents = Array2::zeros((turns.len(), 3));
    for (i, t) in turns.iter().enumerate() {
        let (mu_q, _, _) = encode(&params, t, DropoutMasks::none(4));
        latents.row_mut(i).assign(&mu_q);
    }
    let mean = latents.sum_axis(ndarray::Axis(0)) / turns.len() as f64;
    match prior {
        PriorParams::Mixture { mu, log_var, .. } => {
            for j in 0..3 {
                assert!((mu[[0, j]] - mean[j]).abs() < 1e-9);
                let mut var = 0.0;
                for i in 0..turns.len() {
                    let d = latents[[i, j]] - mean[j];
                    var += d * d;
                }
                var /= turns.len() as f64;
                assert!((log_var[[0, j]].exp() - var).abs() < 1e-9);
            }
        }
        _ => panic!("expected mixture prior"),
    }
}

// --- flattening -----------------------------------------------------------

#[test]
fn params_flat_roundtrip() {
    let params = tiny_params(ModelKind::Gm, 4, 3, 5, 2, 101);
    let flat = params.to_flat();
    let mut other = tiny_params(ModelKind::Gm, 4, 3, 5, 2, 202);
    other.set_from_flat(&flat);
    assert_eq!(other.to_flat(), flat);
    assert_eq!(params.n_params(), flat.len());
}

#[test]
fn init_is_deterministic_per_seed() {
    let a = ModelParams::init(ModelKind::Gm, tiny_config(4, 2, 5, 2), BN_MOMENTUM, 7).unwrap();
    let b = ModelParams::init(ModelKind::Gm, tiny_config(4, 2, 5, 2), BN_MOMENTUM, 7).unwrap();
    assert_eq!(a.to_flat(), b.to_flat());
}
