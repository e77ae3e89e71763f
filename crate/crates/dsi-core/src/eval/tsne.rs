//! Exact t-SNE (quadratic in the point count) with a seeded initialization
//! so projection runs are reproducible. Adequate for the desk-scale test
//! sets this crate targets.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 500,
            learning_rate: 100.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 100,
            seed: 0,
        }
    }
}

/// Project row vectors to 2-D.
pub fn tsne_2d(data: &Array2<f64>, config: &TsneConfig) -> Vec<(f64, f64)> {
    let n = data.nrows();
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![(0.0, 0.0)];
    }
    let perplexity = config.perplexity.min((n as f64 - 1.0) / 3.0).max(2.0);

    // Pairwise squared distances.
    let mut d2 = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for k in 0..data.ncols() {
                let diff = data[[i, k]] - data[[j, k]];
                acc += diff * diff;
            }
            d2[i][j] = acc;
            d2[j][i] = acc;
        }
    }

    // Per-point bandwidths by binary search on the conditional perplexity.
    let target_entropy = perplexity.ln();
    let mut p = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        let mut beta = 1.0;
        let mut beta_min = f64::NEG_INFINITY;
        let mut beta_max = f64::INFINITY;
        for _ in 0..64 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = (-beta * d2[i][j]).exp();
                sum += w;
                weighted += w * d2[i][j];
            }
            if sum <= 0.0 {
                beta /= 2.0;
                continue;
            }
            let entropy = beta * weighted / sum + sum.ln();
            let diff = entropy - target_entropy;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                beta_min = beta;
                beta = if beta_max.is_finite() {
                    (beta + beta_max) / 2.0
                } else {
                    beta * 2.0
                };
            } else {
                beta_max = beta;
                beta = if beta_min.is_finite() {
                    (beta + beta_min) / 2.0
                } else {
                    beta / 2.0
                };
            }
        }
        let mut sum = 0.0;
        for j in 0..n {
            if i != j {
                p[i][j] = (-beta * d2[i][j]).exp();
                sum += p[i][j];
            }
        }
        if sum > 0.0 {
            for j in 0..n {
                p[i][j] /= sum;
            }
        }
    }

    // Symmetrize.
    let mut pij = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            pij[i][j] = ((p[i][j] + p[j][i]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut y: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            (1e-4 * a, 1e-4 * b)
        })
        .collect();
    let mut velocity = vec![(0.0f64, 0.0f64); n];
    let mut gains = vec![(1.0f64, 1.0f64); n];

    for iter in 0..config.iterations {
        let exaggeration = if iter < config.exaggeration_iters {
            config.early_exaggeration
        } else {
            1.0
        };
        // Student-t affinities in the embedding.
        let mut q_unnorm = vec![vec![0.0f64; n]; n];
        let mut q_sum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[i].0 - y[j].0;
                let dy = y[i].1 - y[j].1;
                let w = 1.0 / (1.0 + dx * dx + dy * dy);
                q_unnorm[i][j] = w;
                q_unnorm[j][i] = w;
                q_sum += 2.0 * w;
            }
        }
        let momentum = if iter < 250 { 0.5 } else { 0.8 };
        for i in 0..n {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (q_unnorm[i][j] / q_sum).max(1e-12);
                let coef = 4.0 * (exaggeration * pij[i][j] - q) * q_unnorm[i][j];
                gx += coef * (y[i].0 - y[j].0);
                gy += coef * (y[i].1 - y[j].1);
            }
            let update = |g: f64, v: &mut f64, gain: &mut f64| {
                *gain = if g.signum() != v.signum() {
                    (*gain + 0.2).max(0.01)
                } else {
                    (*gain * 0.8).max(0.01)
                };
                *v = momentum * *v - config.learning_rate * *gain * g;
            };
            update(gx, &mut velocity[i].0, &mut gains[i].0);
            update(gy, &mut velocity[i].1, &mut gains[i].1);
        }
        for i in 0..n {
            y[i].0 += velocity[i].0;
            y[i].1 += velocity[i].1;
        }
        // Re-center.
        let mx = y.iter().map(|p| p.0).sum::<f64>() / n as f64;
        let my = y.iter().map(|p| p.1).sum::<f64>() / n as f64;
        for point in y.iter_mut() {
            point.0 -= mx;
            point.1 -= my;
        }
    }
    y
}
