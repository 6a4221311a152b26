//! The hidden relevance matrix behind the simulator.
//!
//! Ground truth can be synthesized from scratch (power-law audience sizes
//! tuned to a target Gini and density) or derived from a ratings file by
//! completing the partial matrix with a small squared-loss MF and
//! thresholding the predicted scores at a target density.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::bits::BitGrid;
use crate::error::{Error, Result};
use crate::metrics::gini_of;
use crate::mf::TrainConfig;
use crate::par;
use crate::rng::{stream_rng, StreamKind};

/// Explicit-feedback triples with dense 0-based ids.
#[derive(Clone, Debug, PartialEq)]
pub struct RatingsDataset {
    pub triples: Vec<(u32, u32, f64)>,
    pub n_users: usize,
    pub n_items: usize,
}

/// Parse a delimited `user, item, rating` file, re-indexing ids densely in
/// order of first appearance. The first non-blank line may be a header.
pub fn load_ratings(path: &Path, delimiter: char) -> Result<RatingsDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut triples: Vec<(u32, u32, f64)> = Vec::new();
    let mut user_ids: HashMap<u64, u32> = HashMap::new();
    let mut item_ids: HashMap<u64, u32> = HashMap::new();
    let mut seen: HashSet<(u64, u64)> = HashSet::new();
    let mut first_data_line = true;
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(delimiter).map(str::trim).collect();
        let parsed = (|| -> Option<(u64, u64, f64)> {
            if fields.len() != 3 {
                return None;
            }
            Some((
                fields[0].parse().ok()?,
                fields[1].parse().ok()?,
                fields[2].parse::<f64>().ok().filter(|r| r.is_finite())?,
            ))
        })();
        let (raw_user, raw_item, rating) = match parsed {
            Some(t) => t,
            None if first_data_line => {
                // tolerate one header line
                first_data_line = false;
                continue;
            }
            None => {
                return Err(Error::RatingsParse {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: format!("expected `user{delimiter}item{delimiter}rating`, got {line:?}"),
                });
            }
        };
        first_data_line = false;
        if !seen.insert((raw_user, raw_item)) {
            return Err(Error::DuplicateRating {
                path: path.to_path_buf(),
                line: line_no,
                user: raw_user,
                item: raw_item,
            });
        }
        let next_user = user_ids.len() as u32;
        let user = *user_ids.entry(raw_user).or_insert(next_user);
        let next_item = item_ids.len() as u32;
        let item = *item_ids.entry(raw_item).or_insert(next_item);
        triples.push((user, item, rating));
    }
    if triples.is_empty() {
        return Err(Error::EmptyRatings {
            path: path.to_path_buf(),
        });
    }
    Ok(RatingsDataset {
        n_users: user_ids.len(),
        n_items: item_ids.len(),
        triples,
    })
}

/// Binary relevance matrix plus the per-item audience sizes derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    bits: BitGrid,
    audience_sizes: Vec<u32>,
    density: f64,
    audience_gini: f64,
    seed: u64,
}

impl GroundTruth {
    /// Wrap a relevance bitmap, deriving audience sizes and checking that
    /// every item has at least one liker and every user at least one like.
    pub fn from_bits(bits: BitGrid, seed: u64) -> Result<Self> {
        let (n_users, n_items) = (bits.rows(), bits.cols());
        if n_users == 0 || n_items == 0 {
            return Err(Error::invalid("relevance matrix must be non-empty"));
        }
        let mut audience_sizes = vec![0u32; n_items];
        for u in 0..n_users {
            if bits.row_count(u) == 0 {
                return Err(Error::invalid(format!("user {u} likes no items")));
            }
            for i in 0..n_items {
                if bits.get(u, i) {
                    audience_sizes[i] += 1;
                }
            }
        }
        if let Some(i) = audience_sizes.iter().position(|&a| a == 0) {
            return Err(Error::invalid(format!("item {i} has an empty audience")));
        }
        let likes: u64 = audience_sizes.iter().map(|&a| a as u64).sum();
        let density = likes as f64 / (n_users as f64 * n_items as f64);
        let keys: Vec<f64> = audience_sizes.iter().map(|&a| a as f64).collect();
        let audience_gini = gini_of(&keys, &keys)?;
        Ok(GroundTruth {
            bits,
            audience_sizes,
            density,
            audience_gini,
            seed,
        })
    }

    /// Build from per-user liked-item lists (mostly a test convenience).
    pub fn from_rows(n_users: usize, n_items: usize, rows: &[Vec<u32>]) -> Result<Self> {
        if rows.len() != n_users {
            return Err(Error::invalid("row count does not match n_users"));
        }
        let mut bits = BitGrid::new(n_users, n_items);
        for (u, row) in rows.iter().enumerate() {
            for &i in row {
                if i as usize >= n_items {
                    return Err(Error::invalid(format!("item {i} out of range")));
                }
                bits.set(u, i as usize, true);
            }
        }
        Self::from_bits(bits, 0)
    }

    pub fn n_users(&self) -> usize {
        self.bits.rows()
    }

    pub fn n_items(&self) -> usize {
        self.bits.cols()
    }

    /// Whether `user` truly likes `item`.
    #[inline]
    pub fn likes(&self, user: u32, item: u32) -> bool {
        self.bits.get(user as usize, item as usize)
    }

    pub fn audience_sizes(&self) -> &[u32] {
        &self.audience_sizes
    }

    pub fn density(&self) -> f64 {
        self.density
    }

    /// Gini of the audience-size vector (same kernel as the TPR Gini).
    pub fn audience_gini(&self) -> f64 {
        self.audience_gini
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// All liked pairs in row-major order.
    pub fn positives(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for u in 0..self.n_users() {
            for i in 0..self.n_items() {
                if self.bits.get(u, i) {
                    out.push((u as u32, i as u32));
                }
            }
        }
        out
    }

    const MAGIC: &'static [u8; 8] = b"PDGT0001";

    /// Serialize as a headered dense bitmap.
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.bits.to_bytes();
        let mut buf = Vec::with_capacity(48 + body.len());
        buf.extend_from_slice(Self::MAGIC);
        buf.extend_from_slice(&(self.n_users() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.n_items() as u64).to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.density.to_le_bytes());
        buf.extend_from_slice(&self.audience_gini.to_le_bytes());
        buf.extend_from_slice(&body);
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 48 || &bytes[..8] != Self::MAGIC {
            return Err(Error::Format(format!(
                "{} is not a ground-truth bitmap",
                path.display()
            )));
        }
        let u64_at = |off: usize| {
            u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"))
        };
        let n_users = u64_at(8) as usize;
        let n_items = u64_at(16) as usize;
        let seed = u64_at(24);
        let density = f64::from_le_bytes(bytes[32..40].try_into().expect("8 bytes"));
        let audience_gini = f64::from_le_bytes(bytes[40..48].try_into().expect("8 bytes"));
        let bits = BitGrid::from_bytes(n_users, n_items, &bytes[48..]).ok_or_else(|| {
            Error::Format(format!("{}: bitmap body is corrupt", path.display()))
        })?;
        let gt = Self::from_bits(bits, seed)?;
        if (gt.density - density).abs() > 1e-9 || (gt.audience_gini - audience_gini).abs() > 1e-9 {
            return Err(Error::Format(format!(
                "{}: header stats do not match bitmap",
                path.display()
            )));
        }
        Ok(gt)
    }
}

/// Integer audience sizes for a power-law shape `(rank+1)^-gamma`, scaled to
/// sum to `total` with every entry in [1, n_users].
///
/// Plain proportional scaling breaks down once head items hit the user cap:
/// the clamped surplus would smear uniformly over the tail and flatten the
/// distribution. Water-filling instead solves for the scale c with
/// sum(clamp(c * shape_i, 1, n_users)) = total, which pins the head at the
/// cap and keeps the tail on the power law.
fn audience_sizes_for(gamma: f64, n_users: usize, n_items: usize, total: u64) -> Vec<u32> {
    let cap = n_users as f64;
    let shape: Vec<f64> = (0..n_items)
        .map(|i| ((i + 1) as f64).powf(-gamma))
        .collect();
    let filled = |c: f64| -> f64 { shape.iter().map(|&s| (c * s).clamp(1.0, cap)).sum() };
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    while filled(hi) < total as f64 && hi < 1e30 {
        hi *= 2.0;
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if filled(mid) < total as f64 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = 0.5 * (lo + hi);
    let raw: Vec<f64> = shape.iter().map(|&s| (c * s).clamp(1.0, cap)).collect();
    let mut sizes: Vec<i64> = raw
        .iter()
        .map(|&r| (r.floor() as i64).clamp(1, n_users as i64))
        .collect();
    let mut diff = total as i64 - sizes.iter().sum::<i64>();
    // largest-remainder fix-up, adding where the rounding lost the most and
    // removing where it lost the least
    let mut order: Vec<usize> = (0..n_items).collect();
    if diff > 0 {
        order.sort_by(|&a, &b| {
            let (fa, fb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
            fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
        });
        while diff > 0 {
            let before = diff;
            for &i in &order {
                if diff == 0 {
                    break;
                }
                if sizes[i] < n_users as i64 {
                    sizes[i] += 1;
                    diff -= 1;
                }
            }
            if diff == before {
                break;
            }
        }
    } else if diff < 0 {
        order.sort_by(|&a, &b| {
            let (fa, fb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
            fa.partial_cmp(&fb).expect("finite").then(a.cmp(&b))
        });
        while diff < 0 {
            let before = diff;
            for &i in &order {
                if diff == 0 {
                    break;
                }
                if sizes[i] > 1 {
                    sizes[i] -= 1;
                    diff += 1;
                }
            }
            if diff == before {
                break;
            }
        }
    }
    sizes.into_iter().map(|s| s as u32).collect()
}

fn sizes_gini(sizes: &[u32]) -> f64 {
    let keys: Vec<f64> = sizes.iter().map(|&a| a as f64).collect();
    gini_of(&keys, &keys).expect("audience sizes are finite and non-negative")
}

const GINI_TOL: f64 = 0.01;
const DENSITY_REL_TOL: f64 = 0.05;

/// Generate a relevance matrix with power-law audience sizes whose Gini is
/// bisection-tuned to `target_gini`, at `target_density` total likes.
pub fn synthesize_ground_truth(
    n_users: usize,
    n_items: usize,
    target_gini: f64,
    target_density: f64,
    seed: u64,
) -> Result<GroundTruth> {
    if n_users == 0 || n_items == 0 {
        return Err(Error::invalid("n_users and n_items must be positive"));
    }
    if !(0.0..1.0).contains(&target_gini) {
        return Err(Error::invalid("target_gini must be in [0, 1)"));
    }
    if !(target_density > 0.0 && target_density < 1.0) {
        return Err(Error::invalid("target_density must be in (0, 1)"));
    }
    let cells = n_users as u64 * n_items as u64;
    let total = ((target_density * cells as f64).round() as u64).clamp(n_items as u64, cells);

    // realized Gini rises with the exponent but integer rounding makes the
    // curve slightly jagged, so a plain bisection bracket is unsafe; scan a
    // grid and refine around the best point instead
    let eval = |gamma: f64| sizes_gini(&audience_sizes_for(gamma, n_users, n_items, total));
    let mut best = (f64::INFINITY, 0.0f64);
    let consider = |gamma: f64, best: &mut (f64, f64)| {
        let diff = (eval(gamma) - target_gini).abs();
        if diff < best.0 {
            *best = (diff, gamma);
        }
    };
    const COARSE_STEPS: usize = 200;
    const GAMMA_MAX: f64 = 8.0;
    for s in 0..=COARSE_STEPS {
        consider(GAMMA_MAX * s as f64 / COARSE_STEPS as f64, &mut best);
        if best.0 <= GINI_TOL * 0.2 {
            break;
        }
    }
    let center = best.1;
    for s in -40..=40i32 {
        let gamma = center + f64::from(s) * 0.001;
        if gamma >= 0.0 && best.0 > GINI_TOL * 0.1 {
            consider(gamma, &mut best);
        }
    }
    if best.0 > GINI_TOL {
        return Err(Error::Infeasible(format!(
            "no power-law exponent reaches audience Gini {target_gini} at density \
             {target_density} (best miss {:.4})",
            best.0
        )));
    }
    let sizes = audience_sizes_for(best.1, n_users, n_items, total);

    // assign each item's likers uniformly without replacement
    let rows_per_item: Vec<Vec<u32>> = par::map_indexed(n_items, 16, |i| {
        let mut rng = stream_rng(seed, StreamKind::AudienceAssign, i as u64);
        let mut users: Vec<u32> = rand::seq::index::sample(&mut rng, n_users, sizes[i] as usize)
            .iter()
            .map(|u| u as u32)
            .collect();
        users.sort_unstable();
        users
    });
    let mut bits = BitGrid::new(n_users, n_items);
    for (i, users) in rows_per_item.iter().enumerate() {
        for &u in users {
            bits.set(u as usize, i, true);
        }
    }
    // every user must like something; give empty users one random item
    for u in 0..n_users {
        if bits.row_count(u) == 0 {
            let mut rng = stream_rng(seed, StreamKind::UserRepair, u as u64);
            let item = rng.random_range(0..n_items);
            bits.set(u, item, true);
        }
    }

    let gt = GroundTruth::from_bits(bits, seed)?;
    if (gt.audience_gini() - target_gini).abs() > GINI_TOL {
        return Err(Error::Infeasible(format!(
            "realized audience Gini {:.4} misses target {target_gini}",
            gt.audience_gini()
        )));
    }
    if (gt.density() - target_density).abs() / target_density > DENSITY_REL_TOL {
        return Err(Error::Infeasible(format!(
            "realized density {:.5} misses target {target_density}",
            gt.density()
        )));
    }
    Ok(gt)
}

/// Subsample the positive pairs of `gt` down to each target density,
/// producing training sets of observed clicks over the same ground truth.
pub fn make_density_variants(
    gt: &GroundTruth,
    densities: &[f64],
    seed: u64,
) -> Result<Vec<Vec<(u32, u32)>>> {
    let positives = gt.positives();
    let cells = gt.n_users() as f64 * gt.n_items() as f64;
    let mut out = Vec::with_capacity(densities.len());
    for (v, &density) in densities.iter().enumerate() {
        if density <= 0.0 {
            return Err(Error::invalid(format!(
                "training density must be positive, got {density}"
            )));
        }
        if density > gt.density() + 1e-12 {
            return Err(Error::invalid(format!(
                "training density {density} exceeds ground-truth density {}",
                gt.density()
            )));
        }
        let count = ((density * cells).round() as usize).clamp(1, positives.len());
        let mut rng = stream_rng(seed, StreamKind::DensityVariant, v as u64);
        let mut pairs: Vec<(u32, u32)> =
            rand::seq::index::sample(&mut rng, positives.len(), count)
                .iter()
                .map(|idx| positives[idx])
                .collect();
        pairs.sort_unstable();
        out.push(pairs);
    }
    Ok(out)
}

struct CompletionModel {
    dim: usize,
    user_factors: Vec<f64>,
    item_factors: Vec<f64>,
    user_bias: Vec<f64>,
    item_bias: Vec<f64>,
    mean: f64,
}

impl CompletionModel {
    #[inline]
    fn score(&self, u: usize, i: usize) -> f64 {
        let (uo, io) = (u * self.dim, i * self.dim);
        let mut dot = 0.0;
        for f in 0..self.dim {
            dot += self.user_factors[uo + f] * self.item_factors[io + f];
        }
        self.mean + self.user_bias[u] + self.item_bias[i] + dot
    }
}

/// Squared-loss MF over observed ratings, used only for matrix completion.
fn fit_completion(
    triples: &[(u32, u32, f64)],
    n_users: usize,
    n_items: usize,
    cfg: &TrainConfig,
) -> Result<CompletionModel> {
    cfg.validate()?;
    let mean = triples.iter().map(|t| t.2).sum::<f64>() / triples.len() as f64;
    let mut model = CompletionModel {
        dim: cfg.latent_dim,
        user_factors: vec![0.0; n_users * cfg.latent_dim],
        item_factors: vec![0.0; n_items * cfg.latent_dim],
        user_bias: vec![0.0; n_users],
        item_bias: vec![0.0; n_items],
        mean,
    };
    let normal = Normal::new(0.0, 0.1).expect("valid stddev");
    let mut init_rng = stream_rng(cfg.seed, StreamKind::CompletionInit, 0);
    for v in model
        .user_factors
        .iter_mut()
        .chain(model.item_factors.iter_mut())
    {
        *v = normal.sample(&mut init_rng);
    }
    let d = cfg.latent_dim;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<u32> = (0..triples.len() as u32).collect();
        let mut rng = stream_rng(cfg.seed, StreamKind::CompletionShuffle, epoch as u64);
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut loss = 0.0;
        for &idx in &order {
            let (user, item, rating) = triples[idx as usize];
            let (u, i) = (user as usize, item as usize);
            let err = model.score(u, i) - rating;
            loss += err * err;
            let (uo, io) = (u * d, i * d);
            for f in 0..d {
                let pu = model.user_factors[uo + f];
                let qi = model.item_factors[io + f];
                model.user_factors[uo + f] -= cfg.learning_rate * (err * qi + cfg.l2_reg * pu);
                model.item_factors[io + f] -= cfg.learning_rate * (err * pu + cfg.l2_reg * qi);
            }
            model.user_bias[u] -= cfg.learning_rate * (err + cfg.l2_reg * model.user_bias[u]);
            model.item_bias[i] -= cfg.learning_rate * (err + cfg.l2_reg * model.item_bias[i]);
        }
        if !(loss / triples.len() as f64).is_finite() {
            return Err(Error::TrainDiverged { epoch });
        }
    }
    Ok(model)
}

/// Relevance bits for `scores` at the global threshold whose positive count
/// lands closest to `target_density`, honoring ties.
pub(crate) fn binarize_by_density(
    scores: &[f64],
    n_users: usize,
    n_items: usize,
    target_density: f64,
) -> Result<BitGrid> {
    let cells = scores.len();
    debug_assert_eq!(cells, n_users * n_items);
    let want = ((target_density * cells as f64).round() as usize).clamp(1, cells);
    let mut sorted = scores.to_vec();
    sorted.sort_unstable_by(|a, b| b.partial_cmp(a).expect("scores must be finite"));
    let tau = sorted[want - 1];
    // a tie run straddling the cut forces a choice: exclude the run or take
    // all of it, whichever count lands closer to the target
    let strictly_above = sorted.partition_point(|&s| s > tau);
    let with_run = sorted.partition_point(|&s| s >= tau);
    let take_run = (with_run as i64 - want as i64).abs() <= (strictly_above as i64 - want as i64).abs();
    let chosen = if take_run { with_run } else { strictly_above };
    if chosen == 0 {
        return Err(Error::Infeasible(
            "no threshold separates the predicted scores at the target density".into(),
        ));
    }
    let mut bits = BitGrid::new(n_users, n_items);
    for u in 0..n_users {
        for i in 0..n_items {
            let s = scores[u * n_items + i];
            if s > tau || (take_run && s == tau) {
                bits.set(u, i, true);
            }
        }
    }
    Ok(bits)
}

const BINARIZE_REL_TOL: f64 = 0.10;

/// Complete a ratings matrix with MF, then threshold predicted scores into a
/// binary ground truth at `target_density`, keeping at most `user_cap` users.
pub fn complete_and_binarize(
    ratings: &RatingsDataset,
    mf_cfg: &TrainConfig,
    target_density: f64,
    user_cap: usize,
) -> Result<GroundTruth> {
    if !(target_density > 0.0 && target_density < 1.0) {
        return Err(Error::invalid("target_density must be in (0, 1)"));
    }
    if user_cap == 0 || user_cap > ratings.n_users {
        return Err(Error::invalid(format!(
            "user_cap must be in 1..={}, got {user_cap}",
            ratings.n_users
        )));
    }

    // subsample users, then re-index the kept ones densely
    let mut rng = stream_rng(mf_cfg.seed, StreamKind::UserSubsample, 0);
    let mut kept: Vec<usize> =
        rand::seq::index::sample(&mut rng, ratings.n_users, user_cap).into_vec();
    kept.sort_unstable();
    let mut user_map = vec![u32::MAX; ratings.n_users];
    for (new, &old) in kept.iter().enumerate() {
        user_map[old] = new as u32;
    }
    let triples: Vec<(u32, u32, f64)> = ratings
        .triples
        .iter()
        .filter_map(|&(u, i, r)| {
            let new = user_map[u as usize];
            (new != u32::MAX).then_some((new, i, r))
        })
        .collect();
    if triples.is_empty() {
        return Err(Error::invalid("no ratings remain after user subsampling"));
    }
    let n_users = user_cap;
    let n_items = ratings.n_items;

    let model = fit_completion(&triples, n_users, n_items, mf_cfg)?;
    let scores: Vec<f64> = par::map_indexed(n_users, 4, |u| {
        (0..n_items).map(|i| model.score(u, i)).collect::<Vec<f64>>()
    })
    .into_iter()
    .flatten()
    .collect();
    let bits = binarize_by_density(&scores, n_users, n_items, target_density)?;
    let thresholded = bits.count_ones() as f64 / (n_users * n_items) as f64;
    if (thresholded - target_density).abs() / target_density > BINARIZE_REL_TOL {
        return Err(Error::Infeasible(format!(
            "thresholding realizes density {thresholded:.5}, more than 10% from \
             target {target_density}"
        )));
    }

    // drop empty rows and columns until both invariants hold
    let mut keep_user = vec![true; n_users];
    let mut keep_item = vec![true; n_items];
    loop {
        let mut changed = false;
        for u in 0..n_users {
            if keep_user[u] {
                let any = (0..n_items).any(|i| keep_item[i] && bits.get(u, i));
                if !any {
                    keep_user[u] = false;
                    changed = true;
                }
            }
        }
        for i in 0..n_items {
            if keep_item[i] {
                let any = (0..n_users).any(|u| keep_user[u] && bits.get(u, i));
                if !any {
                    keep_item[i] = false;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let users: Vec<usize> = (0..n_users).filter(|&u| keep_user[u]).collect();
    let items: Vec<usize> = (0..n_items).filter(|&i| keep_item[i]).collect();
    if users.is_empty() || items.is_empty() {
        return Err(Error::Infeasible(
            "thresholding left no valid users or items".into(),
        ));
    }
    let mut final_bits = BitGrid::new(users.len(), items.len());
    for (nu, &u) in users.iter().enumerate() {
        for (ni, &i) in items.iter().enumerate() {
            if bits.get(u, i) {
                final_bits.set(nu, ni, true);
            }
        }
    }
    GroundTruth::from_bits(final_bits, mf_cfg.seed)
}
