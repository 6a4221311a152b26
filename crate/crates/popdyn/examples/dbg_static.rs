//! Inspect static-round list composition at full density.

use popdyn::click_model::{ExposureRecord, Phase};
use popdyn::ground_truth::synthesize_ground_truth;
use popdyn::interactions::InteractionLog;
use popdyn::mf::{predict, train, TrainConfig};
use popdyn::rng::derive_seed;

fn main() {
    let gt = synthesize_ground_truth(200, 500, 0.64, 0.065, 7).unwrap();
    let n = gt.n_users();
    let m = gt.n_items();
    let sizes = gt.audience_sizes();

    let mut log = InteractionLog::new(n, m);
    for (user, item) in gt.positives() {
        log.append(ExposureRecord { user, item, position: 1, clicked: true, iteration: 0, phase: Phase::Bootstrap });
    }
    let l2: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    let beta: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.75);
    let trainer = TrainConfig {
        seed: derive_seed(7, 0x7374_61746963),
        l2_reg: l2,
        epochs,
        neg_sample_exponent: beta,
        ..TrainConfig::default()
    };
    println!("l2_reg = {l2} epochs = {epochs} beta = {beta}");
    let params = train(&log, &trainer, None).unwrap();
    let dim = params.dim();
    let flat = params.to_flat();
    let item_bias = &flat[n * dim + m * dim + n..n * dim + m * dim + n + m];

    // audience percentile of each item
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by_key(|&i| sizes[i]);
    let mut pct = vec![0.0f64; m];
    for (r, &i) in order.iter().enumerate() {
        pct[i] = r as f64 / (m - 1) as f64;
    }

    let mean_a: f64 = sizes.iter().map(|&a| a as f64).sum::<f64>() / m as f64;
    let mean_b: f64 = item_bias.iter().sum::<f64>() / m as f64;
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for i in 0..m {
        let xa = sizes[i] as f64 - mean_a;
        let xb = item_bias[i] - mean_b;
        num += xa * xb;
        da += xa * xa;
        db += xb * xb;
    }
    println!("corr(item_bias, audience) = {:.3}", num / (da * db).sqrt());
    let bspread: f64 = item_bias.iter().fold(f64::MIN, |a, &b| a.max(b))
        - item_bias.iter().fold(f64::MAX, |a, &b| a.min(b));
    println!("item_bias spread = {:.3}", bspread);

    let mut like_frac = 0.0;
    let mut listed_pct = 0.0;
    let mut all_pct = 0.0;
    let mut listed_n = 0usize;
    let mut all_n = 0usize;
    for u in 0..n as u32 {
        let scores: Vec<f64> = (0..m).map(|i| predict(&params, u, i as u32).unwrap()).collect();
        let mut idx: Vec<usize> = (0..m).collect();
        idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let liked_in_top: Vec<usize> =
            idx[..10].iter().copied().filter(|&i| gt.likes(u, i as u32)).collect();
        like_frac += liked_in_top.len() as f64 / 10.0;
        for &i in &liked_in_top {
            listed_pct += pct[i];
            listed_n += 1;
        }
        for i in 0..m {
            if gt.likes(u, i as u32) {
                all_pct += pct[i];
                all_n += 1;
            }
        }
    }
    println!("mean fraction of list that is a true like: {:.3}", like_frac / n as f64);
    println!(
        "audience pctile of LISTED likes: {:.3}  (all likes: {:.3})",
        listed_pct / listed_n as f64,
        all_pct / all_n as f64
    );
}
