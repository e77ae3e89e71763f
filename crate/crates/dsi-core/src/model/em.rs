//! Diagonal Gaussian mixture fitting by expectation-maximization, used to
//! initialize the mixture prior from warm-up encoder latents.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    decoder_tables, encode, logsumexp, DropoutMasks, Mode, ModelParams, PriorParams, LN_2PI,
};
use crate::error::{Error, Result};
use crate::features::TurnFeatures;

const VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub weights: Array1<f64>,   // K
    pub means: Array2<f64>,     // K × d
    pub variances: Array2<f64>, // K × d
    /// Per-iteration mean log-likelihood, for convergence inspection.
    pub loglik_trace: Vec<f64>,
}

/// Fit a K-component diagonal GMM to row vectors `data` (N × d). Runs at
/// most `max_iters` EM iterations, stopping early when the relative
/// log-likelihood change drops below `rel_tol`.
pub fn fit_diag_gmm(
    data: &Array2<f64>,
    k: usize,
    max_iters: usize,
    rel_tol: f64,
    seed: u64,
) -> Result<GmmFit> {
    let n = data.nrows();
    let d = data.ncols();
    if k == 0 {
        return Err(Error::Config("component count must be positive".into()));
    }
    if k > n {
        return Err(Error::Config(format!(
            "cannot fit {k} mixture components to {n} points"
        )));
    }

    // Seed means with distinct data points; shared variance from the data.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);
    let mut means = Array2::zeros((k, d));
    for (c, &i) in indices.iter().take(k).enumerate() {
        means.row_mut(c).assign(&data.row(i));
    }
    let global_mean = data.sum_axis(ndarray::Axis(0)) / n as f64;
    let mut global_var = Array1::<f64>::zeros(d);
    for row in data.rows() {
        for j in 0..d {
            let diff = row[j] - global_mean[j];
            global_var[j] += diff * diff;
        }
    }
    global_var /= n as f64;
    global_var.mapv_inplace(|v| v.max(VAR_FLOOR));
    let mut variances = Array2::zeros((k, d));
    for c in 0..k {
        variances.row_mut(c).assign(&global_var);
    }
    let mut weights = Array1::from_elem(k, 1.0 / k as f64);

    let mut loglik_trace = Vec::new();
    let mut resp = Array2::<f64>::zeros((n, k));
    for _ in 0..max_iters {
        // E-step in log space.
        let mut loglik = 0.0;
        for (i, row) in data.rows().into_iter().enumerate() {
            let mut scores = Array1::zeros(k);
            for c in 0..k {
                let mut acc = 0.0;
                for j in 0..d {
                    let var = variances[[c, j]];
                    let diff = row[j] - means[[c, j]];
                    acc += LN_2PI + var.ln() + diff * diff / var;
                }
                scores[c] = weights[c].ln() - 0.5 * acc;
            }
            let lse = logsumexp(&scores);
            loglik += lse;
            for c in 0..k {
                resp[[i, c]] = (scores[c] - lse).exp();
            }
        }
        loglik /= n as f64;
        let converged = loglik_trace
            .last()
            .map(|prev: &f64| {
                let denom = prev.abs().max(1e-12);
                (loglik - prev).abs() / denom < rel_tol
            })
            .unwrap_or(false);
        loglik_trace.push(loglik);
        if converged {
            break;
        }

        // M-step.
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[[i, c]]).sum();
            if nk < 1e-12 {
                continue;
            }
            weights[c] = nk / n as f64;
            let mut mean = Array1::<f64>::zeros(d);
            for (i, row) in data.rows().into_iter().enumerate() {
                for j in 0..d {
                    mean[j] += resp[[i, c]] * row[j];
                }
            }
            mean /= nk;
            let mut var = Array1::<f64>::zeros(d);
            for (i, row) in data.rows().into_iter().enumerate() {
                for j in 0..d {
                    let diff = row[j] - mean[j];
                    var[j] += resp[[i, c]] * diff * diff;
                }
            }
            var /= nk;
            var.mapv_inplace(|v| v.max(VAR_FLOOR));
            means.row_mut(c).assign(&mean);
            variances.row_mut(c).assign(&var);
        }
    }

    Ok(GmmFit {
        weights,
        means,
        variances,
        loglik_trace,
    })
}

/// Initialize the mixture prior from a warm-up-trained model: encode every
/// train turn to its posterior mean and fit a K-component diagonal GMM.
pub fn init_gm_prior(
    params: &ModelParams,
    turns: &[TurnFeatures],
    k: usize,
    seed: u64,
) -> Result<PriorParams> {
    if k > turns.len() {
        return Err(Error::Config(format!(
            "domain count {k} exceeds the number of turns {}",
            turns.len()
        )));
    }
    // Tables are not needed to encode, but building them validates that the
    // model has been trained at least one step when eval-mode BN is used
    // downstream. Encoding itself has no batch-norm.
    let _ = decoder_tables(&params.decoder, Mode::Eval)?;
    let mut latents = Array2::zeros((turns.len(), params.config.z_dim));
    for (i, turn) in turns.iter().enumerate() {
        let (mu_q, _, _) = encode(params, turn, DropoutMasks::none(params.config.hidden));
        latents.row_mut(i).assign(&mu_q);
    }
    let fit = fit_diag_gmm(&latents, k, 50, 1e-5, seed)?;
    Ok(PriorParams::Mixture {
        logit_pi: fit.weights.mapv(|w| w.max(1e-12).ln()),
        mu: fit.means,
        log_var: fit.variances.mapv(f64::ln),
    })
}
