//! The two latent-variable models.
//!
//! Both models explain each candidate value of a turn through a latent
//! state vector `z`: a slot distribution is decoded from `z`, and every
//! candidate's one-hot index and contextual embedding are generated from
//! its slot. The base model places a standard Gaussian prior on `z`; the
//! mixture model draws `z` from one of `K` domain Gaussians. The discrete
//! slot variable is collapsed analytically inside the reconstruction
//! term, so training only samples `z`.

mod backward;
mod em;

pub use backward::{backward_batch, Gradients};
pub use em::{fit_diag_gmm, init_gm_prior, GmmFit};

use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::TurnFeatures;

pub const LN_2PI: f64 = 1.8378770664093453;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Base,
    Gm,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Base => "base",
            ModelKind::Gm => "gm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Softplus,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Softplus => softplus(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    fn derivative(&self, x: f64) -> f64 {
        match self {
            Activation::Softplus => sigmoid(x),
            Activation::Tanh => 1.0 - x.tanh() * x.tanh(),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Model dimensions. `domains` is 1 for the base model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentConfig {
    #[serde(rename = "S")]
    pub slots: usize,
    #[serde(rename = "K")]
    pub domains: usize,
    pub z_dim: usize,
    #[serde(rename = "n")]
    pub embed_dim: usize,
    #[serde(rename = "V")]
    pub vocab_size: usize,
    pub hidden: usize,
    pub dropout: f64,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Softplus
}

impl LatentConfig {
    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        for (name, v) in [
            ("slots", self.slots),
            ("domains", self.domains),
            ("z_dim", self.z_dim),
            ("embed_dim", self.embed_dim),
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if kind == ModelKind::Base && self.domains != 1 {
            return Err(Error::Config("base model requires domains = 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch normalization over the batch of slot components, per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub initialized: bool,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    pub mode: Mode,
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
    pub batch_mean: Array1<f64>,
    pub batch_var: Array1<f64>,
}

impl BatchNorm {
    pub fn new(dim: usize, momentum: f64) -> Self {
        BatchNorm {
            scale: Array1::ones(dim),
            shift: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            momentum,
            eps: 1e-5,
            initialized: false,
        }
    }

    /// Pin the running statistics; marks the layer usable in eval mode.
    /// With mean 0 and variance 1 the normalization step is the identity
    /// up to `eps`.
    pub fn force_stats(&mut self, mean: Array1<f64>, var: Array1<f64>) {
        self.running_mean = mean;
        self.running_var = var;
        self.initialized = true;
    }

    /// Normalize rows of `x` (batch along axis 0).
    pub fn forward(&self, x: &Array2<f64>, mode: Mode) -> Result<(Array2<f64>, BnCache)> {
        let (mean, var) = match mode {
            Mode::Train => {
                let rows = x.nrows() as f64;
                let mean = x.sum_axis(ndarray::Axis(0)) / rows;
                let mut var = Array1::zeros(x.ncols());
                for row in x.rows() {
                    for (j, v) in row.iter().enumerate() {
                        let d = v - mean[j];
                        var[j] += d * d;
                    }
                }
                var /= rows;
                (mean, var)
            }
            Mode::Eval => {
                if !self.initialized {
                    return Err(Error::Data(
                        "batch-norm running statistics uninitialized; run a training batch first"
                            .into(),
                    ));
                }
                (self.running_mean.clone(), self.running_var.clone())
            }
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut xhat = x.clone();
        for mut row in xhat.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[j]) * inv_std[j];
            }
        }
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.scale[j] + self.shift[j];
            }
        }
        Ok((
            y,
            BnCache {
                mode,
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            },
        ))
    }

    /// Exponential moving average update from a train-mode cache.
    pub fn update_running(&mut self, cache: &BnCache) {
        debug_assert_eq!(cache.mode, Mode::Train);
        if !self.initialized {
            self.running_mean = cache.batch_mean.clone();
            self.running_var = cache.batch_var.clone();
            self.initialized = true;
        } else {
            let m = self.momentum;
            self.running_mean = &self.running_mean * m + &(&cache.batch_mean * (1.0 - m));
            self.running_var = &self.running_var * m + &(&cache.batch_var * (1.0 - m));
        }
    }
}

/// Encoder: two hidden layers with nonlinearity and dropout, then linear
/// heads for the posterior mean and log-variance.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub w1: Array2<f64>, // hidden × (V + n)
    pub b1: Array1<f64>,
    pub w2: Array2<f64>, // hidden × hidden
    pub b2: Array1<f64>,
    pub w_mean: Array2<f64>, // z × hidden
    pub b_mean: Array1<f64>,
    pub w_logvar: Array2<f64>, // z × hidden
    pub b_logvar: Array1<f64>,
}

/// Decoder heads. `w_value` row `s` holds the value logits of slot `s`
/// (the one-hot head applied to the slot's one-hot vector); `w_ce_*`
/// rows hold the embedding head outputs before batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub w_slot: Array2<f64>, // S × z
    pub b_slot: Array1<f64>, // S
    pub w_value: Array2<f64>, // S × V
    pub b_value: Array1<f64>, // V
    pub w_ce_mean: Array2<f64>, // S × n
    pub b_ce_mean: Array1<f64>, // n
    pub w_ce_logvar: Array2<f64>, // S × n
    pub b_ce_logvar: Array1<f64>, // n
    pub bn_mean: BatchNorm,
    pub bn_logvar: BatchNorm,
}

/// Prior over the latent state.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorParams {
    /// Fixed standard normal (base model).
    Standard { z_dim: usize },
    /// Mixture of diagonal Gaussians; `logit_pi` defines the mixture
    /// weights through normalized exponentials.
    Mixture {
        logit_pi: Array1<f64>,  // K
        mu: Array2<f64>,        // K × z
        log_var: Array2<f64>,   // K × z
    },
}

impl PriorParams {
    pub fn domains(&self) -> usize {
        match self {
            PriorParams::Standard { .. } => 1,
            PriorParams::Mixture { logit_pi, .. } => logit_pi.len(),
        }
    }

    pub fn log_pi(&self) -> Array1<f64> {
        match self {
            PriorParams::Standard { .. } => Array1::zeros(1),
            PriorParams::Mixture { logit_pi, .. } => log_softmax(logit_pi),
        }
    }

    pub fn pi(&self) -> Array1<f64> {
        self.log_pi().mapv(f64::exp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub kind: ModelKind,
    pub config: LatentConfig,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub prior: PriorParams,
}

fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let std = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        let x: f64 = StandardNormal.sample(rng);
        x * std
    })
}

impl ModelParams {
    pub fn init(kind: ModelKind, config: LatentConfig, bn_momentum: f64, seed: u64) -> Result<Self> {
        config.validate(kind)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = config.vocab_size;
        let n = config.embed_dim;
        let h = config.hidden;
        let z = config.z_dim;
        let s_count = config.slots;
        let encoder = EncoderParams {
            w1: init_matrix(&mut rng, h, v + n),
            b1: Array1::zeros(h),
            w2: init_matrix(&mut rng, h, h),
            b2: Array1::zeros(h),
            w_mean: init_matrix(&mut rng, z, h),
            b_mean: Array1::zeros(z),
            w_logvar: init_matrix(&mut rng, z, h),
            b_logvar: Array1::zeros(z),
        };
        let decoder = DecoderParams {
            w_slot: init_matrix(&mut rng, s_count, z),
            b_slot: Array1::zeros(s_count),
            w_value: init_matrix(&mut rng, s_count, v),
            b_value: Array1::zeros(v),
            w_ce_mean: init_matrix(&mut rng, s_count, n),
            b_ce_mean: Array1::zeros(n),
            w_ce_logvar: init_matrix(&mut rng, s_count, n),
            b_ce_logvar: Array1::zeros(n),
            bn_mean: BatchNorm::new(n, bn_momentum),
            bn_logvar: BatchNorm::new(n, bn_momentum),
        };
        let prior = match kind {
            ModelKind::Base => PriorParams::Standard { z_dim: z },
            ModelKind::Gm => PriorParams::Mixture {
                logit_pi: Array1::zeros(config.domains),
                mu: init_matrix(&mut rng, config.domains, z) * 0.5,
                log_var: Array2::zeros((config.domains, z)),
            },
        };
        Ok(ModelParams {
            kind,
            config,
            encoder,
            decoder,
            prior,
        })
    }
}

// ---------------------------------------------------------------------------
// Numeric helpers
// ---------------------------------------------------------------------------

pub fn logsumexp(xs: &Array1<f64>) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(xs: &Array1<f64>) -> Array1<f64> {
    let lse = logsumexp(xs);
    xs.mapv(|x| x - lse)
}

pub fn softmax(xs: &Array1<f64>) -> Array1<f64> {
    log_softmax(xs).mapv(f64::exp)
}

/// Log-density of a diagonal Gaussian with log-variance parameterization.
pub fn diag_gaussian_loglik(x: &Array1<f64>, mu: &Array1<f64>, log_var: &Array1<f64>) -> f64 {
    let mut acc = 0.0;
    for j in 0..x.len() {
        let diff = x[j] - mu[j];
        acc += LN_2PI + log_var[j] + diff * diff * (-log_var[j]).exp();
    }
    -0.5 * acc
}

// ---------------------------------------------------------------------------
// Decoder tables
// ---------------------------------------------------------------------------

/// Slot-conditional distributions, shared by every turn of a batch. The
/// value head and embedding heads depend only on the slot one-hot, so the
/// whole table is computed once per step; batch normalization runs over
/// the batch of S slot rows.
#[derive(Debug, Clone)]
pub struct DecoderTables {
    pub log_lambda: Array2<f64>, // S × V log-probabilities
    pub mu_s: Array2<f64>,       // S × n (post-BN)
    pub log_var_s: Array2<f64>,  // S × n (post-BN)
    pub exp_neg_lv: Array2<f64>, // S × n, exp(-log_var_s)
    pub gauss_const: Array1<f64>, // S, -(1/2)Σ_j (LN_2PI + log_var_s[s,j])
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    pub lambda: Array2<f64>, // S × V probabilities
    pub bn_mean: BnCache,
    pub bn_logvar: BnCache,
}

pub fn decoder_tables(decoder: &DecoderParams, mode: Mode) -> Result<(DecoderTables, DecoderCache)> {
    let s_count = decoder.w_value.nrows();
    let v = decoder.w_value.ncols();
    let n = decoder.w_ce_mean.ncols();

    let mut log_lambda = Array2::zeros((s_count, v));
    let mut lambda = Array2::zeros((s_count, v));
    for s in 0..s_count {
        let logits = &decoder.w_value.row(s) + &decoder.b_value;
        let lsm = log_softmax(&logits.to_owned());
        lambda.row_mut(s).assign(&lsm.mapv(f64::exp));
        log_lambda.row_mut(s).assign(&lsm);
    }

    let raw_mean = {
        let mut m = decoder.w_ce_mean.clone();
        for mut row in m.rows_mut() {
            row += &decoder.b_ce_mean;
        }
        m
    };
    let raw_logvar = {
        let mut m = decoder.w_ce_logvar.clone();
        for mut row in m.rows_mut() {
            row += &decoder.b_ce_logvar;
        }
        m
    };
    let (mu_s, bn_mean) = decoder.bn_mean.forward(&raw_mean, mode)?;
    let (log_var_s, bn_logvar) = decoder.bn_logvar.forward(&raw_logvar, mode)?;

    let exp_neg_lv = log_var_s.mapv(|x| (-x).exp());
    let mut gauss_const = Array1::zeros(s_count);
    for s in 0..s_count {
        let mut acc = 0.0;
        for j in 0..n {
            acc += LN_2PI + log_var_s[[s, j]];
        }
        gauss_const[s] = -0.5 * acc;
    }

    Ok((
        DecoderTables {
            log_lambda,
            mu_s,
            log_var_s,
            exp_neg_lv,
            gauss_const,
        },
        DecoderCache {
            lambda,
            bn_mean,
            bn_logvar,
        },
    ))
}

// ---------------------------------------------------------------------------
// Per-operation forward pieces
// ---------------------------------------------------------------------------

/// Slot distribution decoded from a latent state vector.
pub fn slot_distribution(decoder: &DecoderParams, z: &Array1<f64>) -> Array1<f64> {
    softmax(&(decoder.w_slot.dot(z) + &decoder.b_slot))
}

/// Value distribution of slot `s`.
pub fn value_distribution(decoder: &DecoderParams, slot: usize) -> Result<Array1<f64>> {
    if slot >= decoder.w_value.nrows() {
        return Err(Error::Data(format!(
            "slot index {slot} out of range (S = {})",
            decoder.w_value.nrows()
        )));
    }
    let logits = &decoder.w_value.row(slot) + &decoder.b_value;
    Ok(softmax(&logits.to_owned()))
}

/// Embedding distribution (mean, log-variance) of slot `s`.
pub fn embedding_distribution(
    decoder: &DecoderParams,
    slot: usize,
    mode: Mode,
) -> Result<(Array1<f64>, Array1<f64>)> {
    if slot >= decoder.w_ce_mean.nrows() {
        return Err(Error::Data(format!(
            "slot index {slot} out of range (S = {})",
            decoder.w_ce_mean.nrows()
        )));
    }
    let (tables, _) = decoder_tables(decoder, mode)?;
    Ok((
        tables.mu_s.row(slot).to_owned(),
        tables.log_var_s.row(slot).to_owned(),
    ))
}

/// Multiplicative dropout masks for the encoder's two hidden layers.
/// Inverted dropout: kept units scale by 1/(1-p).
#[derive(Debug, Clone)]
pub struct DropoutMasks {
    pub m1: Array1<f64>,
    pub m2: Array1<f64>,
}

impl DropoutMasks {
    pub fn none(hidden: usize) -> Self {
        DropoutMasks {
            m1: Array1::ones(hidden),
            m2: Array1::ones(hidden),
        }
    }

    pub fn sample(hidden: usize, p: f64, rng: &mut ChaCha8Rng) -> Self {
        use rand::Rng;
        if p <= 0.0 {
            return Self::none(hidden);
        }
        let keep = 1.0 - p;
        let draw = |rng: &mut ChaCha8Rng| {
            Array1::from_shape_fn(hidden, |_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
        };
        DropoutMasks {
            m1: draw(rng),
            m2: draw(rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncodeCache {
    pub h1_pre: Array1<f64>,
    pub h1_dropped: Array1<f64>,
    pub h2_pre: Array1<f64>,
    pub h2_dropped: Array1<f64>,
    pub masks: DropoutMasks,
}

/// Encode a turn's features into the posterior mean and log-variance.
pub fn encode(
    params: &ModelParams,
    turn: &TurnFeatures,
    masks: DropoutMasks,
) -> (Array1<f64>, Array1<f64>, EncodeCache) {
    let enc = &params.encoder;
    let v = params.config.vocab_size;
    let act = params.config.activation;

    let mut h1_pre = enc.b1.clone();
    for &(idx, count) in &turn.counts {
        h1_pre.scaled_add(count, &enc.w1.column(idx));
    }
    h1_pre += &enc.w1.slice(s![.., v..]).dot(&turn.mean_ce);
    let h1 = h1_pre.mapv(|x| act.apply(x));
    let h1_dropped = &h1 * &masks.m1;

    let h2_pre = enc.w2.dot(&h1_dropped) + &enc.b2;
    let h2 = h2_pre.mapv(|x| act.apply(x));
    let h2_dropped = &h2 * &masks.m2;

    let mu_q = enc.w_mean.dot(&h2_dropped) + &enc.b_mean;
    let lv_q = enc.w_logvar.dot(&h2_dropped) + &enc.b_logvar;
    (
        mu_q,
        lv_q,
        EncodeCache {
            h1_pre,
            h1_dropped,
            h2_pre,
            h2_dropped,
            masks,
        },
    )
}

/// z = mu + exp(log_var / 2) ⊙ eps.
pub fn reparameterize(mu_q: &Array1<f64>, lv_q: &Array1<f64>, eps: &Array1<f64>) -> Array1<f64> {
    mu_q + &(lv_q.mapv(|x| (0.5 * x).exp()) * eps)
}

/// Collapsed reconstruction log-likelihood of a turn's candidates given z.
/// Returns the per-candidate softmax weights needed by the backward pass.
pub fn reconstruction_loglik(
    log_gamma: &Array1<f64>,
    tables: &DecoderTables,
    turn: &TurnFeatures,
) -> Result<(f64, Vec<Array1<f64>>, Vec<Array1<f64>>)> {
    if turn.candidates.is_empty() {
        return Err(Error::Data(format!(
            "turn {}:{} has no candidates",
            turn.dialogue_id, turn.turn_index
        )));
    }
    let s_count = log_gamma.len();
    let mut total = 0.0;
    let mut oh_posts = Vec::with_capacity(turn.candidates.len());
    let mut ce_posts = Vec::with_capacity(turn.candidates.len());
    for cand in &turn.candidates {
        let mut oh_scores = Array1::zeros(s_count);
        for s in 0..s_count {
            oh_scores[s] = log_gamma[s] + tables.log_lambda[[s, cand.vocab_index]];
        }
        let oh_lse = logsumexp(&oh_scores);
        oh_posts.push(oh_scores.mapv(|x| (x - oh_lse).exp()));

        let mut ce_scores = Array1::zeros(s_count);
        for s in 0..s_count {
            let mut quad = 0.0;
            for j in 0..cand.embedding.len() {
                let diff = cand.embedding[j] - tables.mu_s[[s, j]];
                quad += diff * diff * tables.exp_neg_lv[[s, j]];
            }
            ce_scores[s] = log_gamma[s] + tables.gauss_const[s] - 0.5 * quad;
        }
        let ce_lse = logsumexp(&ce_scores);
        ce_posts.push(ce_scores.mapv(|x| (x - ce_lse).exp()));

        total += oh_lse + ce_lse;
    }
    if !total.is_finite() {
        return Err(Error::Numerical {
            context: format!("turn {}:{}", turn.dialogue_id, turn.turn_index),
            message: "non-finite reconstruction log-likelihood".into(),
        });
    }
    Ok((total, oh_posts, ce_posts))
}

/// Posterior over domains given z (computed in log space).
pub fn domain_posterior(prior: &PriorParams, z: &Array1<f64>) -> Array1<f64> {
    match prior {
        PriorParams::Standard { .. } => Array1::ones(1),
        PriorParams::Mixture { mu, log_var, .. } => {
            let log_pi = prior.log_pi();
            let k = log_pi.len();
            let mut scores = Array1::zeros(k);
            for d in 0..k {
                scores[d] = log_pi[d]
                    + diag_gaussian_loglik(z, &mu.row(d).to_owned(), &log_var.row(d).to_owned());
            }
            softmax(&scores)
        }
    }
}

/// KL(q(z|t) || N(mu_p, sigma_p^2)) for diagonal Gaussians, closed form.
pub fn gaussian_kl(
    mu_q: &Array1<f64>,
    lv_q: &Array1<f64>,
    mu_p: &Array1<f64>,
    lv_p: &Array1<f64>,
) -> f64 {
    let mut acc = 0.0;
    for j in 0..mu_q.len() {
        let diff = mu_q[j] - mu_p[j];
        acc += lv_p[j] - lv_q[j] + (lv_q[j].exp() + diff * diff) * (-lv_p[j]).exp() - 1.0;
    }
    0.5 * acc
}

/// KL(q(z,d|t) || p(z,d)) under the mean-field factorization. For the
/// standard prior this is the usual closed-form Gaussian KL; for the
/// mixture prior it is sum_d q(d) KL(q(z)||p(z|d)) + KL(q(d)||pi).
/// Returns the total and the per-domain Gaussian KL terms.
pub fn kl_term(
    mu_q: &Array1<f64>,
    lv_q: &Array1<f64>,
    prior: &PriorParams,
    q_d: Option<&Array1<f64>>,
) -> (f64, Array1<f64>) {
    match prior {
        PriorParams::Standard { z_dim } => {
            let zeros = Array1::zeros(*z_dim);
            let kl = gaussian_kl(mu_q, lv_q, &zeros, &zeros);
            (kl, Array1::from_vec(vec![kl]))
        }
        PriorParams::Mixture { mu, log_var, .. } => {
            let q_d = q_d.expect("mixture prior requires a domain posterior");
            let log_pi = prior.log_pi();
            let k = q_d.len();
            let mut per_domain = Array1::zeros(k);
            let mut total = 0.0;
            for d in 0..k {
                let kl_d = gaussian_kl(
                    mu_q,
                    lv_q,
                    &mu.row(d).to_owned(),
                    &log_var.row(d).to_owned(),
                );
                per_domain[d] = kl_d;
                total += q_d[d] * kl_d;
                if q_d[d] > 0.0 {
                    total += q_d[d] * (q_d[d].ln() - log_pi[d]);
                }
            }
            (total, per_domain)
        }
    }
}

// ---------------------------------------------------------------------------
// Full per-turn forward pass
// ---------------------------------------------------------------------------

/// Everything the backward pass needs about one turn's forward evaluation.
#[derive(Debug, Clone)]
pub struct TurnForward {
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    pub mu_q: Array1<f64>,
    pub lv_q: Array1<f64>,
    pub eps: Array1<f64>,
    pub z: Array1<f64>,
    pub log_gamma: Array1<f64>,
    pub gamma: Array1<f64>,
    pub oh_posts: Vec<Array1<f64>>,
    pub ce_posts: Vec<Array1<f64>>,
    pub q_d: Option<Array1<f64>>,
    pub kl_per_domain: Array1<f64>,
    pub encode_cache: EncodeCache,
}

/// One-sample ELBO estimate for a turn. `eps` is the reparameterization
/// noise; passing zeros evaluates at the posterior mean.
pub fn elbo_forward(
    params: &ModelParams,
    tables: &DecoderTables,
    turn: &TurnFeatures,
    eps: &Array1<f64>,
    masks: DropoutMasks,
) -> Result<TurnForward> {
    let (mu_q, lv_q, encode_cache) = encode(params, turn, masks);
    let z = reparameterize(&mu_q, &lv_q, eps);
    let slot_logits = params.decoder.w_slot.dot(&z) + &params.decoder.b_slot;
    let log_gamma = log_softmax(&slot_logits);
    let gamma = log_gamma.mapv(f64::exp);
    let (recon, oh_posts, ce_posts) = reconstruction_loglik(&log_gamma, tables, turn)?;
    let q_d = match &params.prior {
        PriorParams::Standard { .. } => None,
        PriorParams::Mixture { .. } => Some(domain_posterior(&params.prior, &z)),
    };
    let (kl, kl_per_domain) = kl_term(&mu_q, &lv_q, &params.prior, q_d.as_ref());
    let elbo = recon - kl;
    if !elbo.is_finite() {
        return Err(Error::Numerical {
            context: format!("turn {}:{}", turn.dialogue_id, turn.turn_index),
            message: format!("non-finite ELBO (recon={recon}, kl={kl})"),
        });
    }
    Ok(TurnForward {
        elbo,
        recon,
        kl,
        mu_q,
        lv_q,
        eps: eps.clone(),
        z,
        log_gamma,
        gamma,
        oh_posts,
        ce_posts,
        q_d,
        kl_per_domain,
        encode_cache,
    })
}

// ---------------------------------------------------------------------------
// Inference-time assignment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SlotAssignment {
    pub slot: usize,
    pub posterior: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct TurnAssignment {
    pub dialogue_id: String,
    pub turn_index: u32,
    pub domain: usize,
    pub domain_posterior: Array1<f64>,
    pub slots: Vec<SlotAssignment>,
}

/// Argmax with lowest-index tie breaking.
pub fn argmax(xs: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Per-candidate slot posterior p(s | c, t) at z = mu_q, proportional to
/// gamma_s * lambda_s[v_c] * N(ce_c; mu_s, sigma_s^2), in log space.
pub fn assign_slots(
    params: &ModelParams,
    tables: &DecoderTables,
    turn: &TurnFeatures,
) -> Result<Vec<SlotAssignment>> {
    let (mu_q, _, _) = encode(params, turn, DropoutMasks::none(params.config.hidden));
    let slot_logits = params.decoder.w_slot.dot(&mu_q) + &params.decoder.b_slot;
    let log_gamma = log_softmax(&slot_logits);
    let s_count = params.config.slots;
    let mut out = Vec::with_capacity(turn.candidates.len());
    for cand in &turn.candidates {
        let mut scores = Array1::zeros(s_count);
        for s in 0..s_count {
            let mut quad = 0.0;
            for j in 0..cand.embedding.len() {
                let diff = cand.embedding[j] - tables.mu_s[[s, j]];
                quad += diff * diff * tables.exp_neg_lv[[s, j]];
            }
            scores[s] = log_gamma[s]
                + tables.log_lambda[[s, cand.vocab_index]]
                + tables.gauss_const[s]
                - 0.5 * quad;
        }
        let posterior = softmax(&scores);
        if posterior.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical {
                context: format!("turn {}:{}", turn.dialogue_id, turn.turn_index),
                message: "non-finite slot posterior".into(),
            });
        }
        out.push(SlotAssignment {
            slot: argmax(&posterior),
            posterior,
        });
    }
    Ok(out)
}

/// Turn-level domain assignment at z = mu_q.
pub fn assign_domain(params: &ModelParams, turn: &TurnFeatures) -> (usize, Array1<f64>) {
    let (mu_q, _, _) = encode(params, turn, DropoutMasks::none(params.config.hidden));
    let posterior = domain_posterior(&params.prior, &mu_q);
    (argmax(&posterior), posterior)
}

/// Full inference for one turn (eval-mode tables).
pub fn assign_turn(
    params: &ModelParams,
    tables: &DecoderTables,
    turn: &TurnFeatures,
) -> Result<TurnAssignment> {
    let slots = assign_slots(params, tables, turn)?;
    let (domain, domain_posterior) = assign_domain(params, turn);
    Ok(TurnAssignment {
        dialogue_id: turn.dialogue_id.clone(),
        turn_index: turn.turn_index,
        domain,
        domain_posterior,
        slots,
    })
}

// ---------------------------------------------------------------------------
// Parameter flattening (optimizer + checkpoints + gradient checks)
// ---------------------------------------------------------------------------

pub(crate) enum TensorRef<'a> {
    V(&'a Array1<f64>),
    M(&'a Array2<f64>),
}

pub(crate) enum TensorMut<'a> {
    V(&'a mut Array1<f64>),
    M(&'a mut Array2<f64>),
}

impl ModelParams {
    /// Learnable tensors in a fixed order.
    pub(crate) fn tensors(&self) -> Vec<(&'static str, TensorRef<'_>)> {
        let mut v: Vec<(&'static str, TensorRef<'_>)> = vec![
            ("enc.w1", TensorRef::M(&self.encoder.w1)),
            ("enc.b1", TensorRef::V(&self.encoder.b1)),
            ("enc.w2", TensorRef::M(&self.encoder.w2)),
            ("enc.b2", TensorRef::V(&self.encoder.b2)),
            ("enc.w_mean", TensorRef::M(&self.encoder.w_mean)),
            ("enc.b_mean", TensorRef::V(&self.encoder.b_mean)),
            ("enc.w_logvar", TensorRef::M(&self.encoder.w_logvar)),
            ("enc.b_logvar", TensorRef::V(&self.encoder.b_logvar)),
            ("dec.w_slot", TensorRef::M(&self.decoder.w_slot)),
            ("dec.b_slot", TensorRef::V(&self.decoder.b_slot)),
            ("dec.w_value", TensorRef::M(&self.decoder.w_value)),
            ("dec.b_value", TensorRef::V(&self.decoder.b_value)),
            ("dec.w_ce_mean", TensorRef::M(&self.decoder.w_ce_mean)),
            ("dec.b_ce_mean", TensorRef::V(&self.decoder.b_ce_mean)),
            ("dec.w_ce_logvar", TensorRef::M(&self.decoder.w_ce_logvar)),
            ("dec.b_ce_logvar", TensorRef::V(&self.decoder.b_ce_logvar)),
            ("dec.bn_mean.scale", TensorRef::V(&self.decoder.bn_mean.scale)),
            ("dec.bn_mean.shift", TensorRef::V(&self.decoder.bn_mean.shift)),
            ("dec.bn_logvar.scale", TensorRef::V(&self.decoder.bn_logvar.scale)),
            ("dec.bn_logvar.shift", TensorRef::V(&self.decoder.bn_logvar.shift)),
        ];
        if let PriorParams::Mixture { logit_pi, mu, log_var } = &self.prior {
            v.push(("prior.logit_pi", TensorRef::V(logit_pi)));
            v.push(("prior.mu", TensorRef::M(mu)));
            v.push(("prior.log_var", TensorRef::M(log_var)));
        }
        v
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<(&'static str, TensorMut<'_>)> {
        let mut v: Vec<(&'static str, TensorMut<'_>)> = vec![
            ("enc.w1", TensorMut::M(&mut self.encoder.w1)),
            ("enc.b1", TensorMut::V(&mut self.encoder.b1)),
            ("enc.w2", TensorMut::M(&mut self.encoder.w2)),
            ("enc.b2", TensorMut::V(&mut self.encoder.b2)),
            ("enc.w_mean", TensorMut::M(&mut self.encoder.w_mean)),
            ("enc.b_mean", TensorMut::V(&mut self.encoder.b_mean)),
            ("enc.w_logvar", TensorMut::M(&mut self.encoder.w_logvar)),
            ("enc.b_logvar", TensorMut::V(&mut self.encoder.b_logvar)),
            ("dec.w_slot", TensorMut::M(&mut self.decoder.w_slot)),
            ("dec.b_slot", TensorMut::V(&mut self.decoder.b_slot)),
            ("dec.w_value", TensorMut::M(&mut self.decoder.w_value)),
            ("dec.b_value", TensorMut::V(&mut self.decoder.b_value)),
            ("dec.w_ce_mean", TensorMut::M(&mut self.decoder.w_ce_mean)),
            ("dec.b_ce_mean", TensorMut::V(&mut self.decoder.b_ce_mean)),
            ("dec.w_ce_logvar", TensorMut::M(&mut self.decoder.w_ce_logvar)),
            ("dec.b_ce_logvar", TensorMut::V(&mut self.decoder.b_ce_logvar)),
            ("dec.bn_mean.scale", TensorMut::V(&mut self.decoder.bn_mean.scale)),
            ("dec.bn_mean.shift", TensorMut::V(&mut self.decoder.bn_mean.shift)),
            ("dec.bn_logvar.scale", TensorMut::V(&mut self.decoder.bn_logvar.scale)),
            ("dec.bn_logvar.shift", TensorMut::V(&mut self.decoder.bn_logvar.shift)),
        ];
        if let PriorParams::Mixture { logit_pi, mu, log_var } = &mut self.prior {
            v.push(("prior.logit_pi", TensorMut::V(logit_pi)));
            v.push(("prior.mu", TensorMut::M(mu)));
            v.push(("prior.log_var", TensorMut::M(log_var)));
        }
        v
    }

    pub fn n_params(&self) -> usize {
        self.tensors()
            .iter()
            .map(|(_, t)| match t {
                TensorRef::V(a) => a.len(),
                TensorRef::M(a) => a.len(),
            })
            .sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (_, t) in self.tensors() {
            match t {
                TensorRef::V(a) => out.extend(a.iter()),
                TensorRef::M(a) => out.extend(a.iter()),
            }
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for (_, t) in self.tensors_mut() {
            match t {
                TensorMut::V(a) => {
                    for x in a.iter_mut() {
                        *x = flat[pos];
                        pos += 1;
                    }
                }
                TensorMut::M(a) => {
                    for x in a.iter_mut() {
                        *x = flat[pos];
                        pos += 1;
                    }
                }
            }
        }
        assert_eq!(pos, flat.len(), "flat parameter length mismatch");
    }
}

#[cfg(test)]
mod tests;
