//! Matrix-factorization relevance model.
//!
//! Trains by SGD on a pointwise log loss where clicked exposures are
//! inverse-propensity weighted by their logged rank position: a click at
//! position k contributes the positive-label term with weight 1/p_k and the
//! negative-label term with weight 1 - 1/p_k, where p_k = 1/log2(1+k).
//! Unclicked exposures contribute plain negative-label terms, and never
//! exposed pairs are sampled as extra negatives at a configured ratio.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::click_model::examination_prob;
use crate::error::{Error, Result};
use crate::interactions::InteractionLog;
use crate::par;
use crate::rng::{stream_rng, StreamKind};

/// Trainer hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub learning_rate: f64,
    pub l2_reg: f64,
    pub epochs: usize,
    /// Negatives sampled per clicked exposure, per epoch.
    pub negative_ratio: usize,
    /// Exponent on per-item click counts when drawing negatives; 0 is
    /// uniform. Heavier items then absorb proportionally more negatives,
    /// which keeps their bias terms from swallowing the score scale.
    pub neg_sample_exponent: f64,
    /// Lower clip on propensities, so IPS weights stay bounded.
    pub propensity_floor: f64,
    /// Learn user/item/global bias terms. Off, the score is the bare inner
    /// product, and item popularity can only be encoded in the factors.
    pub use_biases: bool,
    /// Cap on each factor row's norm and each bias magnitude, projected
    /// after every update; 0 disables the cap. The weighted loss has no
    /// finite optimum for clicks below the top position, so an uncapped
    /// long run drives logits past the squash function's useful range.
    pub max_param_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            latent_dim: 16,
            learning_rate: 0.05,
            l2_reg: 1e-4,
            epochs: 4,
            negative_ratio: 4,
            neg_sample_exponent: 0.75,
            propensity_floor: 0.1,
            use_biases: true,
            max_param_norm: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 1 {
            return Err(Error::invalid("latent_dim must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.l2_reg >= 0.0 && self.l2_reg.is_finite()) {
            return Err(Error::invalid("l2_reg must be non-negative"));
        }
        if !(self.propensity_floor > 0.0 && self.propensity_floor <= 1.0) {
            return Err(Error::invalid("propensity_floor must be in (0, 1]"));
        }
        if !(self.neg_sample_exponent >= 0.0 && self.neg_sample_exponent.is_finite()) {
            return Err(Error::invalid("neg_sample_exponent must be non-negative"));
        }
        if !(self.max_param_norm >= 0.0 && self.max_param_norm.is_finite()) {
            return Err(Error::invalid("max_param_norm must be non-negative"));
        }
        Ok(())
    }
}

/// Latent factors and biases, versioned by retrain index.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    n_users: usize,
    n_items: usize,
    dim: usize,
    user_factors: Vec<f64>,
    item_factors: Vec<f64>,
    user_bias: Vec<f64>,
    item_bias: Vec<f64>,
    global_bias: f64,
    pub retrain_index: u32,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl ModelParams {
    pub fn zeros(n_users: usize, n_items: usize, dim: usize) -> Self {
        ModelParams {
            n_users,
            n_items,
            dim,
            user_factors: vec![0.0; n_users * dim],
            item_factors: vec![0.0; n_items * dim],
            user_bias: vec![0.0; n_users],
            item_bias: vec![0.0; n_items],
            global_bias: 0.0,
            retrain_index: 0,
        }
    }

    /// Random small-factor initialization, deterministic in the seed.
    pub fn init(n_users: usize, n_items: usize, dim: usize, seed: u64) -> Self {
        let mut params = Self::zeros(n_users, n_items, dim);
        let normal = Normal::new(0.0, 0.1).expect("valid stddev");
        let mut rng = stream_rng(seed, StreamKind::TrainInit, 0);
        for v in params
            .user_factors
            .iter_mut()
            .chain(params.item_factors.iter_mut())
        {
            *v = normal.sample(&mut rng);
        }
        params
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn raw_score_unchecked(&self, user: usize, item: usize) -> f64 {
        let uo = user * self.dim;
        let io = item * self.dim;
        let mut dot = 0.0;
        for f in 0..self.dim {
            dot += self.user_factors[uo + f] * self.item_factors[io + f];
        }
        dot + self.user_bias[user] + self.item_bias[item] + self.global_bias
    }

    #[inline]
    pub(crate) fn predict_unchecked(&self, user: u32, item: u32) -> f64 {
        sigmoid(self.raw_score_unchecked(user as usize, item as usize))
    }

    /// All parameters as one flat vector (used by gradient checks and
    /// checkpoint files). Order: user factors, item factors, user biases,
    /// item biases, global bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        out.extend_from_slice(&self.user_factors);
        out.extend_from_slice(&self.item_factors);
        out.extend_from_slice(&self.user_bias);
        out.extend_from_slice(&self.item_bias);
        out.push(self.global_bias);
        out
    }

    pub fn flat_len(&self) -> usize {
        (self.n_users + self.n_items) * (self.dim + 1) + 1
    }

    pub fn from_flat(
        n_users: usize,
        n_items: usize,
        dim: usize,
        retrain_index: u32,
        flat: &[f64],
    ) -> Result<Self> {
        let mut params = Self::zeros(n_users, n_items, dim);
        if flat.len() != params.flat_len() {
            return Err(Error::invalid("flat parameter vector has wrong length"));
        }
        let mut pos = 0;
        for dst in [
            &mut params.user_factors,
            &mut params.item_factors,
            &mut params.user_bias,
            &mut params.item_bias,
        ] {
            let len = dst.len();
            dst.copy_from_slice(&flat[pos..pos + len]);
            pos += len;
        }
        params.global_bias = flat[pos];
        params.retrain_index = retrain_index;
        Ok(params)
    }

    pub fn all_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    const MAGIC: &'static [u8; 8] = b"PDMF0001";

    /// Write a versioned binary checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(40 + self.flat_len() * 8);
        buf.extend_from_slice(Self::MAGIC);
        for v in [
            self.dim as u64,
            self.n_users as u64,
            self.n_items as u64,
            self.retrain_index as u64,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.to_flat() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 40 || &bytes[..8] != Self::MAGIC {
            return Err(Error::Format(format!(
                "{} is not a model checkpoint",
                path.display()
            )));
        }
        let u64_at = |off: usize| {
            let mut b = [0u8; 8];
            b.copy_from_slice(&bytes[off..off + 8]);
            u64::from_le_bytes(b)
        };
        let dim = u64_at(8) as usize;
        let n_users = u64_at(16) as usize;
        let n_items = u64_at(24) as usize;
        let retrain_index = u64_at(32) as u32;
        let flat_len = (n_users + n_items) * (dim + 1) + 1;
        if bytes.len() != 40 + flat_len * 8 {
            return Err(Error::Format(format!(
                "{}: truncated checkpoint",
                path.display()
            )));
        }
        let flat: Vec<f64> = bytes[40..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_flat(n_users, n_items, dim, retrain_index, &flat)
    }
}

/// Predicted like-probability for one pair.
pub fn predict(params: &ModelParams, user: u32, item: u32) -> Result<f64> {
    if user as usize >= params.n_users || item as usize >= params.n_items {
        return Err(Error::invalid(format!(
            "pair ({user}, {item}) out of range for {}x{} model",
            params.n_users, params.n_items
        )));
    }
    Ok(params.predict_unchecked(user, item))
}

/// Top-k items by score; ties broken by ascending item index.
pub(crate) fn top_k_by_score(items: &[u32], scores: &[f64], k: usize) -> Vec<u32> {
    debug_assert_eq!(items.len(), scores.len());
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores must not be NaN")
            .then(items[a].cmp(&items[b]))
    });
    order.into_iter().take(k).map(|i| items[i]).collect()
}

/// The k candidates with highest predicted score for `user`.
pub fn rank_topk(params: &ModelParams, user: u32, candidates: &[u32], k: usize) -> Result<Vec<u32>> {
    if candidates.len() < k {
        return Err(Error::invalid(format!(
            "need at least {k} candidates, got {}",
            candidates.len()
        )));
    }
    if user as usize >= params.n_users {
        return Err(Error::invalid("user index out of range"));
    }
    let scores = par::map_indexed(candidates.len(), 256, |j| {
        params.predict_unchecked(user, candidates[j])
    });
    Ok(top_k_by_score(candidates, &scores, k))
}

/// One weighted training point: loss = pos_weight * -ln(sigma)
/// + neg_weight * -ln(1 - sigma).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainExample {
    pub user: u32,
    pub item: u32,
    pub pos_weight: f64,
    pub neg_weight: f64,
}

/// IPS label weights for a logged exposure.
pub fn weights_for_exposure(clicked: bool, position: u32, propensity_floor: f64) -> Result<(f64, f64)> {
    if clicked {
        let propensity = examination_prob(position)?.max(propensity_floor);
        let w = 1.0 / propensity;
        Ok((w, 1.0 - w))
    } else {
        examination_prob(position)?;
        Ok((0.0, 1.0))
    }
}

/// Gradients with the same shape as [`ModelParams`].
#[derive(Clone, Debug)]
pub struct Gradients {
    pub user_factors: Vec<f64>,
    pub item_factors: Vec<f64>,
    pub user_bias: Vec<f64>,
    pub item_bias: Vec<f64>,
    pub global_bias: f64,
}

impl Gradients {
    fn zeros(params: &ModelParams) -> Self {
        Gradients {
            user_factors: vec![0.0; params.user_factors.len()],
            item_factors: vec![0.0; params.item_factors.len()],
            user_bias: vec![0.0; params.user_bias.len()],
            item_bias: vec![0.0; params.item_bias.len()],
            global_bias: 0.0,
        }
    }

    /// Same coordinate order as [`ModelParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.user_factors);
        out.extend_from_slice(&self.item_factors);
        out.extend_from_slice(&self.user_bias);
        out.extend_from_slice(&self.item_bias);
        out.push(self.global_bias);
        out
    }
}

/// Unregularized IPS loss of a batch and its analytic gradients.
pub fn loss_and_gradient(params: &ModelParams, batch: &[TrainExample]) -> (f64, Gradients) {
    let mut grads = Gradients::zeros(params);
    let mut loss = 0.0;
    let d = params.dim;
    for ex in batch {
        let (u, i) = (ex.user as usize, ex.item as usize);
        let sig = sigmoid(params.raw_score_unchecked(u, i));
        loss += ex.pos_weight * -sig.ln() + ex.neg_weight * -(1.0 - sig).ln();
        // dL/ds for s the raw score
        let ds = ex.neg_weight * sig - ex.pos_weight * (1.0 - sig);
        let (uo, io) = (u * d, i * d);
        for f in 0..d {
            grads.user_factors[uo + f] += ds * params.item_factors[io + f];
            grads.item_factors[io + f] += ds * params.user_factors[uo + f];
        }
        grads.user_bias[u] += ds;
        grads.item_bias[i] += ds;
        grads.global_bias += ds;
    }
    (loss, grads)
}

const LOSS_CLAMP: f64 = 1e-12;

fn pair_key(user: u32, item: u32, n_items: usize) -> u64 {
    user as u64 * n_items as u64 + item as u64
}

/// Train, returning the fitted params and the mean training loss per epoch.
pub fn train_traced(
    log: &InteractionLog,
    cfg: &TrainConfig,
    warm_start: Option<&ModelParams>,
) -> Result<(ModelParams, Vec<f64>)> {
    cfg.validate()?;
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    let (n_users, n_items) = (log.n_users(), log.n_items());
    let mut params = match warm_start {
        Some(w) => {
            if w.n_users != n_users || w.n_items != n_items || w.dim != cfg.latent_dim {
                return Err(Error::invalid("warm-start params have mismatched shape"));
            }
            w.clone()
        }
        None => ModelParams::init(n_users, n_items, cfg.latent_dim, cfg.seed),
    };

    // logged exposures become weighted examples once; negatives are drawn
    // fresh each epoch
    let mut base = Vec::with_capacity(log.len());
    let mut positives = Vec::new();
    let mut exposed = HashSet::with_capacity(log.len());
    for rec in log.records() {
        let (pos_weight, neg_weight) =
            weights_for_exposure(rec.clicked, rec.position, cfg.propensity_floor)?;
        base.push(TrainExample {
            user: rec.user,
            item: rec.item,
            pos_weight,
            neg_weight,
        });
        exposed.insert(pair_key(rec.user, rec.item, n_items));
        if rec.clicked {
            positives.push(rec.user);
        }
    }

    let neg_weights: Vec<f64> = log
        .click_counts()
        .as_slice()
        .iter()
        .map(|&c| (c as f64 + 1.0).powf(cfg.neg_sample_exponent))
        .collect();
    let neg_dist = WeightedIndex::new(&neg_weights)
        .expect("smoothed counts are strictly positive");

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let negatives = sample_negatives(&positives, &exposed, &neg_dist, n_items, cfg, epoch);

        let n_total = base.len() + negatives.len();
        let mut order: Vec<u32> = (0..n_total as u32).collect();
        let mut shuffle_rng = stream_rng(cfg.seed, StreamKind::TrainShuffle, epoch as u64);
        // Fisher-Yates
        for i in (1..n_total).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut loss_sum = 0.0;
        for &idx in &order {
            let ex = if (idx as usize) < base.len() {
                base[idx as usize]
            } else {
                negatives[idx as usize - base.len()]
            };
            loss_sum += sgd_step(
                &mut params,
                &ex,
                cfg.learning_rate,
                cfg.l2_reg,
                cfg.use_biases,
                cfg.max_param_norm,
            );
        }
        let mean_loss = loss_sum / n_total as f64;
        if !mean_loss.is_finite() {
            return Err(Error::TrainDiverged { epoch });
        }
        epoch_losses.push(mean_loss);
    }
    Ok((params, epoch_losses))
}

/// Fresh per-epoch negatives: for each clicked exposure, up to
/// `negative_ratio` items the same user has never been shown, drawn from
/// the popularity-weighted distribution.
pub(crate) fn sample_negatives(
    positives: &[u32],
    exposed: &HashSet<u64>,
    neg_dist: &WeightedIndex<f64>,
    n_items: usize,
    cfg: &TrainConfig,
    epoch: usize,
) -> Vec<TrainExample> {
    if cfg.negative_ratio == 0 {
        return Vec::new();
    }
    par::map_indexed(positives.len(), 64, |p| {
        let user = positives[p];
        let mut rng = stream_rng(
            cfg.seed,
            StreamKind::NegSample,
            (epoch as u64) << 32 | p as u64,
        );
        let mut out = Vec::with_capacity(cfg.negative_ratio);
        for _ in 0..cfg.negative_ratio {
            for _try in 0..100 {
                let item = neg_dist.sample(&mut rng) as u32;
                if !exposed.contains(&pair_key(user, item, n_items)) {
                    out.push(TrainExample {
                        user,
                        item,
                        pos_weight: 0.0,
                        neg_weight: 1.0,
                    });
                    break;
                }
            }
        }
        out
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Train on the logged exposures. See [`train_traced`] for the loss history.
pub fn train(
    log: &InteractionLog,
    cfg: &TrainConfig,
    warm_start: Option<&ModelParams>,
) -> Result<ModelParams> {
    train_traced(log, cfg, warm_start).map(|(params, _)| params)
}

/// Scale the row back onto the radius-`cap` ball if it left it.
#[inline]
fn project_row(row: &mut [f64], cap: f64) {
    let norm_sq: f64 = row.iter().map(|x| x * x).sum();
    if norm_sq > cap * cap {
        let shrink = cap / norm_sq.sqrt();
        for x in row {
            *x *= shrink;
        }
    }
}

#[inline]
fn sgd_step(
    params: &mut ModelParams,
    ex: &TrainExample,
    lr: f64,
    reg: f64,
    use_biases: bool,
    max_norm: f64,
) -> f64 {
    let (u, i) = (ex.user as usize, ex.item as usize);
    let d = params.dim;
    let sig = sigmoid(params.raw_score_unchecked(u, i));
    let loss = ex.pos_weight * -sig.max(LOSS_CLAMP).ln()
        + ex.neg_weight * -(1.0 - sig).max(LOSS_CLAMP).ln();
    let ds = ex.neg_weight * sig - ex.pos_weight * (1.0 - sig);
    let (uo, io) = (u * d, i * d);
    for f in 0..d {
        let pu = params.user_factors[uo + f];
        let qi = params.item_factors[io + f];
        params.user_factors[uo + f] -= lr * (ds * qi + reg * pu);
        params.item_factors[io + f] -= lr * (ds * pu + reg * qi);
    }
    if use_biases {
        params.user_bias[u] -= lr * (ds + reg * params.user_bias[u]);
        params.item_bias[i] -= lr * (ds + reg * params.item_bias[i]);
        params.global_bias -= lr * ds;
    }
    if max_norm > 0.0 {
        project_row(&mut params.user_factors[uo..uo + d], max_norm);
        project_row(&mut params.item_factors[io..io + d], max_norm);
        if use_biases {
            params.user_bias[u] = params.user_bias[u].clamp(-max_norm, max_norm);
            params.item_bias[i] = params.item_bias[i].clamp(-max_norm, max_norm);
            params.global_bias = params.global_bias.clamp(-max_norm, max_norm);
        }
    }
    loss
}
