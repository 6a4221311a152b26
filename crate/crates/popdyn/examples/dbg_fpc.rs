//! Throwaway probe: how saturated are rank-time predictions, and does the
//! false-positive correction still move them?

use popdyn::click_model::Phase;
use popdyn::debias::{fpc_correct, DebiasPolicy};
use popdyn::ground_truth::synthesize_ground_truth;
use popdyn::mf::predict;
use popdyn::sim::{run, Ranker, SimConfig};

fn main() {
    let l2: f64 = std::env::args()
        .nth(1)
        .map(|s| s.parse().unwrap())
        .unwrap_or(1e-4);
    let epochs: usize = std::env::args()
        .nth(2)
        .map(|s| s.parse().unwrap())
        .unwrap_or(4);
    let max_norm: f64 = std::env::args()
        .nth(3)
        .map(|s| s.parse().unwrap())
        .unwrap_or(0.0);
    let gt = synthesize_ground_truth(200, 500, 0.64, 0.065, 7).unwrap();
    let mut cfg = SimConfig {
        k: 10,
        iterations: 5000,
        retrain_every: 50,
        checkpoint_every: 1000,
        seed: 7,
        ranker: Ranker::Mf,
        policy: DebiasPolicy::none(),
        ..Default::default()
    };
    cfg.trainer.l2_reg = l2;
    cfg.trainer.epochs = epochs;
    cfg.trainer.max_param_norm = max_norm;
    let out = run(&gt, &cfg).unwrap();
    let params = out.params.as_ref().unwrap();
    let log = &out.log;
    let fp = log.false_positives();

    let mut exact_one = 0usize;
    let mut exact_zero = 0usize;
    let mut total = 0usize;
    let mut moved = 0usize;
    let mut with_skips = 0usize;
    let mut thetas = Vec::new();
    let mut sample = Vec::new();
    for user in 0..gt.n_users() as u32 {
        for item in 0..gt.n_items() as u32 {
            if log.clicked(user, item) {
                continue;
            }
            let theta = predict(params, user, item).unwrap();
            total += 1;
            thetas.push(theta);
            if theta == 1.0 {
                exact_one += 1;
            }
            if theta == 0.0 {
                exact_zero += 1;
            }
            let pos = fp.positions(user, item);
            if !pos.is_empty() {
                with_skips += 1;
                let corrected = fpc_correct(theta, pos).unwrap();
                if corrected != theta {
                    moved += 1;
                }
                if sample.len() < 8 && user % 40 == 0 && theta > 1e-6 {
                    sample.push((user, item, theta, corrected, pos.len()));
                }
            }
        }
    }
    thetas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| thetas[((thetas.len() - 1) as f64 * p) as usize];
    println!(
        "final gini {:.4}  clicks {}",
        out.series.checkpoints.last().unwrap().gini_tpr,
        out.series.checkpoints.last().unwrap().cumulative_clicks
    );
    println!(
        "candidates={total} theta==1.0: {exact_one} ({:.1}%)  theta==0.0: {exact_zero} ({:.1}%)",
        100.0 * exact_one as f64 / total as f64,
        100.0 * exact_zero as f64 / total as f64
    );
    println!(
        "theta quantiles 1/25/50/75/99%: {:.3e} {:.3e} {:.3e} {:.3e} {:.3e}",
        q(0.01),
        q(0.25),
        q(0.50),
        q(0.75),
        q(0.99)
    );
    println!(
        "with skip history: {with_skips}, corrected value moved: {moved} ({:.1}%)",
        100.0 * moved as f64 / with_skips.max(1) as f64
    );
    for (u, i, t, c, n) in sample {
        println!("  user {u} item {i}: theta {t:.9} -> {c:.9} ({n} skips)");
    }
}
