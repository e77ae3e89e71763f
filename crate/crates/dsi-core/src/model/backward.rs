//! Analytic gradients of the negative ELBO.
//!
//! The loss over a batch is the mean of per-turn `kl - recon`. Decoder
//! tables (value-head softmax, batch-normalized embedding heads) are
//! shared by the whole batch, so per-turn passes accumulate gradients
//! into table-level buffers which are pushed through the softmax and
//! batch-norm transformations once at the end.

use ndarray::{s, Array1, Array2};

use super::{
    BnCache, DecoderCache, DecoderTables, Mode, ModelParams, PriorParams, TensorMut, TensorRef,
    TurnForward,
};
use crate::features::TurnFeatures;

/// Gradient buffers mirroring the learnable parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub enc_w1: Array2<f64>,
    pub enc_b1: Array1<f64>,
    pub enc_w2: Array2<f64>,
    pub enc_b2: Array1<f64>,
    pub enc_w_mean: Array2<f64>,
    pub enc_b_mean: Array1<f64>,
    pub enc_w_logvar: Array2<f64>,
    pub enc_b_logvar: Array1<f64>,
    pub dec_w_slot: Array2<f64>,
    pub dec_b_slot: Array1<f64>,
    pub dec_w_value: Array2<f64>,
    pub dec_b_value: Array1<f64>,
    pub dec_w_ce_mean: Array2<f64>,
    pub dec_b_ce_mean: Array1<f64>,
    pub dec_w_ce_logvar: Array2<f64>,
    pub dec_b_ce_logvar: Array1<f64>,
    pub bn_mean_scale: Array1<f64>,
    pub bn_mean_shift: Array1<f64>,
    pub bn_logvar_scale: Array1<f64>,
    pub bn_logvar_shift: Array1<f64>,
    pub prior_logit_pi: Option<Array1<f64>>,
    pub prior_mu: Option<Array2<f64>>,
    pub prior_log_var: Option<Array2<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let c = &params.config;
        let (pi, mu, lv) = match &params.prior {
            PriorParams::Standard { .. } => (None, None, None),
            PriorParams::Mixture { .. } => (
                Some(Array1::zeros(c.domains)),
                Some(Array2::zeros((c.domains, c.z_dim))),
                Some(Array2::zeros((c.domains, c.z_dim))),
            ),
        };
        Gradients {
            enc_w1: Array2::zeros((c.hidden, c.vocab_size + c.embed_dim)),
            enc_b1: Array1::zeros(c.hidden),
            enc_w2: Array2::zeros((c.hidden, c.hidden)),
            enc_b2: Array1::zeros(c.hidden),
            enc_w_mean: Array2::zeros((c.z_dim, c.hidden)),
            enc_b_mean: Array1::zeros(c.z_dim),
            enc_w_logvar: Array2::zeros((c.z_dim, c.hidden)),
            enc_b_logvar: Array1::zeros(c.z_dim),
            dec_w_slot: Array2::zeros((c.slots, c.z_dim)),
            dec_b_slot: Array1::zeros(c.slots),
            dec_w_value: Array2::zeros((c.slots, c.vocab_size)),
            dec_b_value: Array1::zeros(c.vocab_size),
            dec_w_ce_mean: Array2::zeros((c.slots, c.embed_dim)),
            dec_b_ce_mean: Array1::zeros(c.embed_dim),
            dec_w_ce_logvar: Array2::zeros((c.slots, c.embed_dim)),
            dec_b_ce_logvar: Array1::zeros(c.embed_dim),
            bn_mean_scale: Array1::zeros(c.embed_dim),
            bn_mean_shift: Array1::zeros(c.embed_dim),
            bn_logvar_scale: Array1::zeros(c.embed_dim),
            bn_logvar_shift: Array1::zeros(c.embed_dim),
            prior_logit_pi: pi,
            prior_mu: mu,
            prior_log_var: lv,
        }
    }

    fn tensors(&self) -> Vec<(&'static str, TensorRef<'_>)> {
        let mut v: Vec<(&'static str, TensorRef<'_>)> = vec![
            ("enc.w1", TensorRef::M(&self.enc_w1)),
            ("enc.b1", TensorRef::V(&self.enc_b1)),
            ("enc.w2", TensorRef::M(&self.enc_w2)),
            ("enc.b2", TensorRef::V(&self.enc_b2)),
            ("enc.w_mean", TensorRef::M(&self.enc_w_mean)),
            ("enc.b_mean", TensorRef::V(&self.enc_b_mean)),
            ("enc.w_logvar", TensorRef::M(&self.enc_w_logvar)),
            ("enc.b_logvar", TensorRef::V(&self.enc_b_logvar)),
            ("dec.w_slot", TensorRef::M(&self.dec_w_slot)),
            ("dec.b_slot", TensorRef::V(&self.dec_b_slot)),
            ("dec.w_value", TensorRef::M(&self.dec_w_value)),
            ("dec.b_value", TensorRef::V(&self.dec_b_value)),
            ("dec.w_ce_mean", TensorRef::M(&self.dec_w_ce_mean)),
            ("dec.b_ce_mean", TensorRef::V(&self.dec_b_ce_mean)),
            ("dec.w_ce_logvar", TensorRef::M(&self.dec_w_ce_logvar)),
            ("dec.b_ce_logvar", TensorRef::V(&self.dec_b_ce_logvar)),
            ("dec.bn_mean.scale", TensorRef::V(&self.bn_mean_scale)),
            ("dec.bn_mean.shift", TensorRef::V(&self.bn_mean_shift)),
            ("dec.bn_logvar.scale", TensorRef::V(&self.bn_logvar_scale)),
            ("dec.bn_logvar.shift", TensorRef::V(&self.bn_logvar_shift)),
        ];
        if let (Some(pi), Some(mu), Some(lv)) =
            (&self.prior_logit_pi, &self.prior_mu, &self.prior_log_var)
        {
            v.push(("prior.logit_pi", TensorRef::V(pi)));
            v.push(("prior.mu", TensorRef::M(mu)));
            v.push(("prior.log_var", TensorRef::M(lv)));
        }
        v
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, t) in self.tensors() {
            match t {
                TensorRef::V(a) => out.extend(a.iter()),
                TensorRef::M(a) => out.extend(a.iter()),
            }
        }
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.to_flat().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut_internal() {
            match t {
                TensorMut::V(a) => a.mapv_inplace(|x| x * factor),
                TensorMut::M(a) => a.mapv_inplace(|x| x * factor),
            }
        }
    }

    fn tensors_mut_internal(&mut self) -> Vec<(&'static str, TensorMut<'_>)> {
        let mut v: Vec<(&'static str, TensorMut<'_>)> = vec![
            ("enc.w1", TensorMut::M(&mut self.enc_w1)),
            ("enc.b1", TensorMut::V(&mut self.enc_b1)),
            ("enc.w2", TensorMut::M(&mut self.enc_w2)),
            ("enc.b2", TensorMut::V(&mut self.enc_b2)),
            ("enc.w_mean", TensorMut::M(&mut self.enc_w_mean)),
            ("enc.b_mean", TensorMut::V(&mut self.enc_b_mean)),
            ("enc.w_logvar", TensorMut::M(&mut self.enc_w_logvar)),
            ("enc.b_logvar", TensorMut::V(&mut self.enc_b_logvar)),
            ("dec.w_slot", TensorMut::M(&mut self.dec_w_slot)),
            ("dec.b_slot", TensorMut::V(&mut self.dec_b_slot)),
            ("dec.w_value", TensorMut::M(&mut self.dec_w_value)),
            ("dec.b_value", TensorMut::V(&mut self.dec_b_value)),
            ("dec.w_ce_mean", TensorMut::M(&mut self.dec_w_ce_mean)),
            ("dec.b_ce_mean", TensorMut::V(&mut self.dec_b_ce_mean)),
            ("dec.w_ce_logvar", TensorMut::M(&mut self.dec_w_ce_logvar)),
            ("dec.b_ce_logvar", TensorMut::V(&mut self.dec_b_ce_logvar)),
            ("dec.bn_mean.scale", TensorMut::V(&mut self.bn_mean_scale)),
            ("dec.bn_mean.shift", TensorMut::V(&mut self.bn_mean_shift)),
            ("dec.bn_logvar.scale", TensorMut::V(&mut self.bn_logvar_scale)),
            ("dec.bn_logvar.shift", TensorMut::V(&mut self.bn_logvar_shift)),
        ];
        if let (Some(pi), Some(mu), Some(lv)) = (
            self.prior_logit_pi.as_mut(),
            self.prior_mu.as_mut(),
            self.prior_log_var.as_mut(),
        ) {
            v.push(("prior.logit_pi", TensorMut::V(pi)));
            v.push(("prior.mu", TensorMut::M(mu)));
            v.push(("prior.log_var", TensorMut::M(lv)));
        }
        v
    }
}

/// Gradient of `mean_t (kl_t - recon_t)` over a batch of turns, given
/// their forward caches. `turns` and `forwards` correspond pairwise.
pub fn backward_batch(
    params: &ModelParams,
    tables: &DecoderTables,
    dec_cache: &DecoderCache,
    turns: &[&TurnFeatures],
    forwards: &[TurnForward],
) -> Gradients {
    assert_eq!(turns.len(), forwards.len());
    let mut grads = Gradients::zeros_like(params);
    let batch = turns.len() as f64;
    let c = &params.config;

    // Table-level accumulation buffers.
    let mut d_log_lambda = Array2::<f64>::zeros((c.slots, c.vocab_size));
    let mut d_mu_s = Array2::<f64>::zeros((c.slots, c.embed_dim));
    let mut d_lv_s = Array2::<f64>::zeros((c.slots, c.embed_dim));

    for (turn, fwd) in turns.iter().zip(forwards) {
        let w = 1.0 / batch;
        let d_recon = -w;
        let d_kl = w;

        let mut d_log_gamma = Array1::<f64>::zeros(c.slots);
        let mut d_z = Array1::<f64>::zeros(c.z_dim);
        let mut d_mu_q = Array1::<f64>::zeros(c.z_dim);
        let mut d_lv_q = Array1::<f64>::zeros(c.z_dim);

        // --- reconstruction term ---
        for (ci, cand) in turn.candidates.iter().enumerate() {
            let oh = &fwd.oh_posts[ci];
            let ce = &fwd.ce_posts[ci];
            for s in 0..c.slots {
                d_log_gamma[s] += d_recon * (oh[s] + ce[s]);
                d_log_lambda[[s, cand.vocab_index]] += d_recon * oh[s];
                let coef = d_recon * ce[s];
                for j in 0..c.embed_dim {
                    let diff = cand.embedding[j] - tables.mu_s[[s, j]];
                    let e = tables.exp_neg_lv[[s, j]];
                    d_mu_s[[s, j]] += coef * diff * e;
                    d_lv_s[[s, j]] += coef * (-0.5) * (1.0 - diff * diff * e);
                }
            }
        }

        // --- KL term ---
        match &params.prior {
            PriorParams::Standard { .. } => {
                for j in 0..c.z_dim {
                    d_mu_q[j] += d_kl * fwd.mu_q[j];
                    d_lv_q[j] += d_kl * 0.5 * (fwd.lv_q[j].exp() - 1.0);
                }
            }
            PriorParams::Mixture { mu, log_var, .. } => {
                let q_d = fwd.q_d.as_ref().expect("mixture forward stores q_d");
                let log_pi = params.prior.log_pi();
                let pi = log_pi.mapv(f64::exp);
                let k = q_d.len();

                // Direct dependence of sum_d q_d KL_d on q's parameters
                // and on the prior component parameters.
                let mut d_log_pi = Array1::<f64>::zeros(k);
                let mut g_q = Array1::<f64>::zeros(k);
                for d in 0..k {
                    let cd = d_kl * q_d[d];
                    for j in 0..c.z_dim {
                        let e = (-log_var[[d, j]]).exp();
                        let diff = fwd.mu_q[j] - mu[[d, j]];
                        d_mu_q[j] += cd * diff * e;
                        d_lv_q[j] += cd * 0.5 * (fwd.lv_q[j].exp() * e - 1.0);
                        let gmu = grads.prior_mu.as_mut().unwrap();
                        gmu[[d, j]] += cd * (-diff) * e;
                        let glv = grads.prior_log_var.as_mut().unwrap();
                        glv[[d, j]] +=
                            cd * 0.5 * (1.0 - (fwd.lv_q[j].exp() + diff * diff) * e);
                    }
                    // -sum_d q_d log pi_d
                    d_log_pi[d] += -d_kl * q_d[d];
                    let lnq = if q_d[d] > 0.0 { q_d[d].ln() } else { f64::MIN };
                    g_q[d] = d_kl * (fwd.kl_per_domain[d] + lnq + 1.0 - log_pi[d]);
                }

                // q_d = softmax(u), u_d = log pi_d + log N(z; mu_d, var_d).
                let inner: f64 = (0..k).map(|d| q_d[d] * g_q[d]).sum();
                for d in 0..k {
                    let du = q_d[d] * (g_q[d] - inner);
                    d_log_pi[d] += du;
                    for j in 0..c.z_dim {
                        let e = (-log_var[[d, j]]).exp();
                        let diff = fwd.z[j] - mu[[d, j]];
                        d_z[j] += du * (-diff) * e;
                        let gmu = grads.prior_mu.as_mut().unwrap();
                        gmu[[d, j]] += du * diff * e;
                        let glv = grads.prior_log_var.as_mut().unwrap();
                        glv[[d, j]] += du * (-0.5) * (1.0 - diff * diff * e);
                    }
                }

                // log pi = logit - lse(logit)
                let total: f64 = d_log_pi.sum();
                let gpi = grads.prior_logit_pi.as_mut().unwrap();
                for d in 0..k {
                    gpi[d] += d_log_pi[d] - pi[d] * total;
                }
            }
        }

        // --- slot head: log_gamma = log_softmax(w_slot z + b_slot) ---
        let sum_glg: f64 = d_log_gamma.sum();
        let d_slot_logits = &d_log_gamma - &(&fwd.gamma * sum_glg);
        for s in 0..c.slots {
            let g = d_slot_logits[s];
            if g != 0.0 {
                grads.dec_b_slot[s] += g;
                for j in 0..c.z_dim {
                    grads.dec_w_slot[[s, j]] += g * fwd.z[j];
                    d_z[j] += g * params.decoder.w_slot[[s, j]];
                }
            }
        }

        // --- reparameterization ---
        for j in 0..c.z_dim {
            d_mu_q[j] += d_z[j];
            d_lv_q[j] += d_z[j] * fwd.eps[j] * 0.5 * (0.5 * fwd.lv_q[j]).exp();
        }

        // --- encoder ---
        backward_encoder(params, turn, fwd, &d_mu_q, &d_lv_q, &mut grads);
    }

    // --- value head softmax rows ---
    for s in 0..c.slots {
        let g_row = d_log_lambda.row(s);
        let row_sum: f64 = g_row.sum();
        if row_sum == 0.0 && g_row.iter().all(|&x| x == 0.0) {
            continue;
        }
        let lambda_row = dec_cache.lambda.row(s);
        for v in 0..c.vocab_size {
            let g = g_row[v] - lambda_row[v] * row_sum;
            grads.dec_w_value[[s, v]] += g;
            grads.dec_b_value[v] += g;
        }
    }

    // --- batch-normalized embedding heads ---
    let (d_raw_mean, d_scale_m, d_shift_m) =
        backward_batchnorm(&d_mu_s, &dec_cache.bn_mean, &params.decoder.bn_mean.scale);
    let (d_raw_lv, d_scale_v, d_shift_v) =
        backward_batchnorm(&d_lv_s, &dec_cache.bn_logvar, &params.decoder.bn_logvar.scale);
    grads.bn_mean_scale += &d_scale_m;
    grads.bn_mean_shift += &d_shift_m;
    grads.bn_logvar_scale += &d_scale_v;
    grads.bn_logvar_shift += &d_shift_v;
    for s in 0..c.slots {
        for j in 0..c.embed_dim {
            grads.dec_w_ce_mean[[s, j]] += d_raw_mean[[s, j]];
            grads.dec_b_ce_mean[j] += d_raw_mean[[s, j]];
            grads.dec_w_ce_logvar[[s, j]] += d_raw_lv[[s, j]];
            grads.dec_b_ce_logvar[j] += d_raw_lv[[s, j]];
        }
    }

    grads
}

fn backward_encoder(
    params: &ModelParams,
    turn: &TurnFeatures,
    fwd: &TurnForward,
    d_mu_q: &Array1<f64>,
    d_lv_q: &Array1<f64>,
    grads: &mut Gradients,
) {
    let enc = &params.encoder;
    let cache = &fwd.encode_cache;
    let act = params.config.activation;
    let v = params.config.vocab_size;

    // heads
    let mut d_h2d = enc.w_mean.t().dot(d_mu_q);
    d_h2d += &enc.w_logvar.t().dot(d_lv_q);
    for i in 0..d_mu_q.len() {
        grads.enc_b_mean[i] += d_mu_q[i];
        grads.enc_b_logvar[i] += d_lv_q[i];
        for h in 0..cache.h2_dropped.len() {
            grads.enc_w_mean[[i, h]] += d_mu_q[i] * cache.h2_dropped[h];
            grads.enc_w_logvar[[i, h]] += d_lv_q[i] * cache.h2_dropped[h];
        }
    }

    // layer 2
    let d_h2 = &d_h2d * &cache.masks.m2;
    let d_h2_pre = Array1::from_shape_fn(d_h2.len(), |i| d_h2[i] * act.derivative(cache.h2_pre[i]));
    let d_h1d = enc.w2.t().dot(&d_h2_pre);
    for i in 0..d_h2_pre.len() {
        grads.enc_b2[i] += d_h2_pre[i];
        for h in 0..cache.h1_dropped.len() {
            grads.enc_w2[[i, h]] += d_h2_pre[i] * cache.h1_dropped[h];
        }
    }

    // layer 1
    let d_h1 = &d_h1d * &cache.masks.m1;
    let d_h1_pre = Array1::from_shape_fn(d_h1.len(), |i| d_h1[i] * act.derivative(cache.h1_pre[i]));
    for i in 0..d_h1_pre.len() {
        grads.enc_b1[i] += d_h1_pre[i];
    }
    for &(idx, count) in &turn.counts {
        for i in 0..d_h1_pre.len() {
            grads.enc_w1[[i, idx]] += d_h1_pre[i] * count;
        }
    }
    let mut w1_ce = grads.enc_w1.slice_mut(s![.., v..]);
    for i in 0..d_h1_pre.len() {
        for j in 0..turn.mean_ce.len() {
            w1_ce[[i, j]] += d_h1_pre[i] * turn.mean_ce[j];
        }
    }
}

/// Backward through batch normalization. Returns the gradient with respect
/// to the raw inputs plus the scale/shift gradients.
fn backward_batchnorm(
    d_y: &Array2<f64>,
    cache: &BnCache,
    scale: &Array1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let rows = d_y.nrows();
    let cols = d_y.ncols();
    let mut d_scale = Array1::zeros(cols);
    let mut d_shift = Array1::zeros(cols);
    for r in 0..rows {
        for j in 0..cols {
            d_scale[j] += d_y[[r, j]] * cache.xhat[[r, j]];
            d_shift[j] += d_y[[r, j]];
        }
    }
    let mut d_x = Array2::zeros((rows, cols));
    match cache.mode {
        Mode::Eval => {
            for r in 0..rows {
                for j in 0..cols {
                    d_x[[r, j]] = d_y[[r, j]] * scale[j] * cache.inv_std[j];
                }
            }
        }
        Mode::Train => {
            let n = rows as f64;
            for j in 0..cols {
                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                for r in 0..rows {
                    let dxhat = d_y[[r, j]] * scale[j];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * cache.xhat[[r, j]];
                }
                mean_dxhat /= n;
                mean_dxhat_xhat /= n;
                for r in 0..rows {
                    let dxhat = d_y[[r, j]] * scale[j];
                    d_x[[r, j]] = cache.inv_std[j]
                        * (dxhat - mean_dxhat - cache.xhat[[r, j]] * mean_dxhat_xhat);
                }
            }
        }
    }
    (d_x, d_scale, d_shift)
}
