//! Experiment execution: method X repeat scheduling, CSV and summary
//! artifacts, chart emission, and matched-bias comparison across summaries.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chart::{line_chart, Series};
use crate::config::{
    DatasetSpec, DynamicImbalanceSpec, ExperimentSpec, Layout, MethodSpec,
    StaticDensitySpec, StaticImbalanceSpec,
};
use crate::error::{Error, Result};
use crate::ground_truth::{make_density_variants, GroundTruth};
use crate::metrics::{smooth3, spearman_rho, unimodal_up_down};
use crate::rng::derive_seed;
use crate::sim::{run, run_static, RunResult, Ranker, SimConfig};

pub const METRICS_HEADER: &str = "run_id,method,iteration,cumulative_clicks,gini_tpr,alpha";
pub const SWEEP_HEADER: &str = "run_id,method,level,audience_gini,density,gini_tpr";

const DENSITY_VARIANT_TAG: u64 = 0x76617269;

/// One parsed metrics.csv row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub method: String,
    pub iteration: u32,
    pub cumulative_clicks: u64,
    pub gini_tpr: f64,
    pub alpha: f64,
}

/// Aggregate of one checkpoint across a method's repeats.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointAgg {
    pub iteration: u32,
    pub clicks_mean: f64,
    pub clicks_sd: f64,
    pub gini_mean: f64,
    pub gini_sd: f64,
    pub alpha_mean: f64,
}

/// Aggregates for one compared method.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub label: String,
    pub seeds: Vec<u64>,
    pub final_gini_mean: f64,
    pub final_gini_sd: f64,
    pub total_clicks_mean: f64,
    pub total_clicks_sd: f64,
    pub checkpoints: Vec<CheckpointAgg>,
    pub failures: Vec<String>,
}

/// Aggregates for one sweep level.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: f64,
    pub label: String,
    pub seeds: Vec<u64>,
    pub gini_mean: f64,
    pub gini_sd: f64,
    pub clicks_mean: Option<f64>,
    pub clicks_sd: Option<f64>,
    pub failures: Vec<String>,
}

/// One sweep with its headline statistics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepSummary {
    pub kind: String,
    pub levels: Vec<LevelSummary>,
    /// Rank correlation of mean Gini with the level values.
    pub gini_spearman: Option<f64>,
    /// Rank correlation of mean clicks with the level values.
    pub clicks_spearman: Option<f64>,
    /// Whether the 3-point smoothed mean Gini rises then falls.
    pub gini_unimodal_smoothed: Option<bool>,
}

/// Everything run_experiment aggregates, echoing the spec it came from.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub experiment: String,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub methods: Vec<MethodSummary>,
    #[serde(default)]
    pub sweeps: Vec<SweepSummary>,
    pub spec: ExperimentSpec,
}

impl RunSummary {
    pub fn failure_count(&self) -> usize {
        self.methods.iter().map(|m| m.failures.len()).sum::<usize>()
            + self
                .sweeps
                .iter()
                .flat_map(|s| &s.levels)
                .map(|l| l.failures.len())
                .sum::<usize>()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!(
            "{}: {e}",
            path.display()
        )))
    }
}

/// Where and how verbosely to write artifacts.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Also write the full exposure log of every run.
    pub save_logs: bool,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn repeat_seeds(cfg: &SimConfig) -> Vec<u64> {
    (0..cfg.repeats).map(|r| cfg.seed + r as u64).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn metrics_lines(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.run_id, r.method, r.iteration, r.cumulative_clicks, r.gini_tpr, r.alpha
        ));
    }
    out
}

/// Parse a metrics.csv document, validating its header and field shapes.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == METRICS_HEADER => {}
        _ => return Err(Error::Format(format!("expected header {METRICS_HEADER:?}"))),
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Format(format!(
                "line {}: expected 6 fields, got {}",
                idx + 2,
                fields.len()
            )));
        }
        let parse_err = |what: &str| {
            Error::Format(format!("line {}: bad {what} {:?}", idx + 2, line))
        };
        rows.push(MetricsRow {
            run_id: fields[0].to_string(),
            method: fields[1].to_string(),
            iteration: fields[2].parse().map_err(|_| parse_err("iteration"))?,
            cumulative_clicks: fields[3].parse().map_err(|_| parse_err("clicks"))?,
            gini_tpr: fields[4].parse().map_err(|_| parse_err("gini"))?,
            alpha: fields[5].parse().map_err(|_| parse_err("alpha"))?,
        });
    }
    if rows.is_empty() {
        return Err(Error::Format("metrics file has no data rows".into()));
    }
    Ok(rows)
}

/// Per-method checkpoint aggregates in first-appearance order.
pub fn aggregate_rows(rows: &[MetricsRow]) -> Vec<(String, Vec<CheckpointAgg>)> {
    let mut order: Vec<String> = Vec::new();
    let mut grouped: BTreeMap<String, BTreeMap<u32, Vec<(f64, f64, f64)>>> = BTreeMap::new();
    for r in rows {
        if !order.contains(&r.method) {
            order.push(r.method.clone());
        }
        grouped
            .entry(r.method.clone())
            .or_default()
            .entry(r.iteration)
            .or_default()
            .push((r.cumulative_clicks as f64, r.gini_tpr, r.alpha));
    }
    order
        .into_iter()
        .map(|method| {
            let per_iter = &grouped[&method];
            let aggs = per_iter
                .iter()
                .map(|(&iteration, triples)| {
                    let clicks: Vec<f64> = triples.iter().map(|t| t.0).collect();
                    let ginis: Vec<f64> = triples.iter().map(|t| t.1).collect();
                    let alphas: Vec<f64> = triples.iter().map(|t| t.2).collect();
                    let (clicks_mean, clicks_sd) = mean_sd(&clicks);
                    let (gini_mean, gini_sd) = mean_sd(&ginis);
                    let (alpha_mean, _) = mean_sd(&alphas);
                    CheckpointAgg {
                        iteration,
                        clicks_mean,
                        clicks_sd,
                        gini_mean,
                        gini_sd,
                        alpha_mean,
                    }
                })
                .collect();
            (method, aggs)
        })
        .collect()
}

/// The standard two-panel view: clicks and Gini against iteration.
pub fn charts_from_rows(rows: &[MetricsRow]) -> Result<(String, String)> {
    let aggregated = aggregate_rows(rows);
    let make = |pick_mean: fn(&CheckpointAgg) -> f64,
                pick_sd: fn(&CheckpointAgg) -> f64,
                title: &str,
                y_label: &str|
     -> Result<String> {
        let series: Vec<Series> = aggregated
            .iter()
            .map(|(label, aggs)| Series {
                label: label.clone(),
                points: aggs
                    .iter()
                    .map(|a| (a.iteration as f64, pick_mean(a)))
                    .collect(),
                band: Some(
                    aggs.iter()
                        .map(|a| {
                            let (m, sd) = (pick_mean(a), pick_sd(a));
                            (a.iteration as f64, m - sd, m + sd)
                        })
                        .collect(),
                ),
            })
            .collect();
        line_chart(title, "iteration", y_label, &series)
    };
    let clicks = make(
        |a| a.clicks_mean,
        |a| a.clicks_sd,
        "Cumulative clicks",
        "clicks",
    )?;
    let gini = make(
        |a| a.gini_mean,
        |a| a.gini_sd,
        "Popularity bias (Gini of TPR)",
        "gini",
    )?;
    Ok((clicks, gini))
}

struct DynamicOutcome {
    rows: Vec<MetricsRow>,
    seeds_ok: Vec<u64>,
    finals: Vec<(f64, f64)>,
    failures: Vec<String>,
}

/// Run one method for all repeats, collecting rows and per-run artifacts.
fn run_method_repeats(
    gt: &GroundTruth,
    base: &SimConfig,
    label: &str,
    opts: &RunOptions,
) -> Result<DynamicOutcome> {
    let mut out = DynamicOutcome {
        rows: Vec::new(),
        seeds_ok: Vec::new(),
        finals: Vec::new(),
        failures: Vec::new(),
    };
    for seed in repeat_seeds(base) {
        let cfg = base.with_seed(seed);
        let run_id = format!("{label}-s{seed}");
        match run(gt, &cfg) {
            Ok(RunResult { aborted: Some(msg), .. }) => {
                out.failures.push(format!("{run_id}: {msg}"));
            }
            Ok(res) => {
                let run_rows: Vec<MetricsRow> = res
                    .series
                    .checkpoints
                    .iter()
                    .map(|c| MetricsRow {
                        run_id: run_id.clone(),
                        method: label.to_string(),
                        iteration: c.iteration,
                        cumulative_clicks: c.cumulative_clicks,
                        gini_tpr: c.gini_tpr,
                        alpha: c.alpha,
                    })
                    .collect();
                let run_dir = opts.out_dir.join("runs").join(&run_id);
                write_text(&run_dir.join("series.csv"), &metrics_lines(&run_rows))?;
                if opts.save_logs {
                    let mut log = String::from("user,item,position,clicked,iteration,phase\n");
                    for r in res.log.records() {
                        log.push_str(&format!(
                            "{},{},{},{},{},{}\n",
                            r.user,
                            r.item,
                            r.position,
                            u8::from(r.clicked),
                            r.iteration,
                            r.phase.as_str()
                        ));
                    }
                    write_text(&run_dir.join("log.csv"), &log)?;
                }
                let last = res.series.last().expect("run produces checkpoints");
                out.finals.push((last.gini_tpr, last.cumulative_clicks as f64));
                out.seeds_ok.push(seed);
                out.rows.extend(run_rows);
            }
            Err(e) => out.failures.push(format!("{run_id}: {e}")),
        }
    }
    Ok(out)
}

fn summarize_method(
    method: &MethodSpec,
    outcome: &DynamicOutcome,
    rows_for_label: &[MetricsRow],
) -> MethodSummary {
    let ginis: Vec<f64> = outcome.finals.iter().map(|f| f.0).collect();
    let clicks: Vec<f64> = outcome.finals.iter().map(|f| f.1).collect();
    let (final_gini_mean, final_gini_sd) = mean_sd(&ginis);
    let (total_clicks_mean, total_clicks_sd) = mean_sd(&clicks);
    let checkpoints = aggregate_rows(rows_for_label)
        .into_iter()
        .next()
        .map(|(_, aggs)| aggs)
        .unwrap_or_default();
    MethodSummary {
        method: method.name.as_str().to_string(),
        label: method.label(),
        seeds: outcome.seeds_ok.clone(),
        final_gini_mean,
        final_gini_sd,
        total_clicks_mean,
        total_clicks_sd,
        checkpoints,
        failures: outcome.failures.clone(),
    }
}

fn synthetic_at_gini(spec: &ExperimentSpec, audience_gini: f64) -> Result<DatasetSpec> {
    match &spec.dataset {
        DatasetSpec::Synthetic { n_users, n_items, density, .. } => {
            Ok(DatasetSpec::Synthetic {
                n_users: *n_users,
                n_items: *n_items,
                audience_gini,
                density: *density,
            })
        }
        DatasetSpec::Ratings { .. } => Err(Error::Config(
            "imbalance sweeps need a synthetic dataset".into(),
        )),
    }
}

fn static_cfg(spec: &ExperimentSpec) -> SimConfig {
    SimConfig {
        ranker: Ranker::Mf,
        policy: crate::debias::DebiasPolicy::none(),
        ..spec.sim.clone()
    }
}

fn sweep_level(
    gt: &GroundTruth,
    training: &[(u32, u32)],
    cfg: &SimConfig,
    label: &str,
) -> (Vec<u64>, Vec<f64>, Vec<String>) {
    let mut seeds_ok = Vec::new();
    let mut ginis = Vec::new();
    let mut failures = Vec::new();
    for seed in repeat_seeds(cfg) {
        match run_static(gt, training, &cfg.with_seed(seed)) {
            Ok(g) => {
                seeds_ok.push(seed);
                ginis.push(g);
            }
            Err(e) => failures.push(format!("{label}-s{seed}: {e}")),
        }
    }
    (seeds_ok, ginis, failures)
}

fn sweep_rows(
    label: &str,
    level: f64,
    audience_gini: f64,
    density: f64,
    seeds: &[u64],
    ginis: &[f64],
) -> Vec<String> {
    seeds
        .iter()
        .zip(ginis)
        .map(|(seed, g)| {
            format!("{label}-s{seed},{label},{level},{audience_gini},{density},{g}")
        })
        .collect()
}

fn run_static_imbalance(
    spec: &ExperimentSpec,
    sweep: &StaticImbalanceSpec,
    csv: &mut Vec<String>,
) -> Result<SweepSummary> {
    let cfg = static_cfg(spec);
    let mut levels = Vec::new();
    for &target in &sweep.audience_ginis {
        let label = format!("static_g{target}");
        let gt = synthetic_at_gini(spec, target)?.materialize(spec.sim.seed, &spec.sim.trainer)?;
        let training = make_density_variants(
            &gt,
            &[sweep.training_density],
            derive_seed(spec.sim.seed, DENSITY_VARIANT_TAG),
        )?
        .pop()
        .expect("one density level yields one training set");
        let (seeds_ok, ginis, failures) = sweep_level(&gt, &training, &cfg, &label);
        csv.extend(sweep_rows(
            &label,
            target,
            gt.audience_gini(),
            gt.density(),
            &seeds_ok,
            &ginis,
        ));
        let (gini_mean, gini_sd) = mean_sd(&ginis);
        levels.push(LevelSummary {
            level: target,
            label,
            seeds: seeds_ok,
            gini_mean,
            gini_sd,
            clicks_mean: None,
            clicks_sd: None,
            failures,
        });
    }
    let xs: Vec<f64> = levels.iter().map(|l| l.level).collect();
    let ys: Vec<f64> = levels.iter().map(|l| l.gini_mean).collect();
    Ok(SweepSummary {
        kind: "static_imbalance".into(),
        gini_spearman: spearman_rho(&xs, &ys).ok(),
        clicks_spearman: None,
        gini_unimodal_smoothed: None,
        levels,
    })
}

fn run_static_density(
    spec: &ExperimentSpec,
    sweep: &StaticDensitySpec,
    csv: &mut Vec<String>,
) -> Result<SweepSummary> {
    let cfg = static_cfg(spec);
    let gt = spec.dataset.materialize(spec.sim.seed, &spec.sim.trainer)?;
    let variants = make_density_variants(
        &gt,
        &sweep.densities,
        derive_seed(spec.sim.seed, DENSITY_VARIANT_TAG),
    )?;
    let mut levels = Vec::new();
    for (&density, training) in sweep.densities.iter().zip(&variants) {
        let label = format!("static_d{density}");
        let (seeds_ok, ginis, failures) = sweep_level(&gt, training, &cfg, &label);
        csv.extend(sweep_rows(
            &label,
            density,
            gt.audience_gini(),
            density,
            &seeds_ok,
            &ginis,
        ));
        let (gini_mean, gini_sd) = mean_sd(&ginis);
        levels.push(LevelSummary {
            level: density,
            label,
            seeds: seeds_ok,
            gini_mean,
            gini_sd,
            clicks_mean: None,
            clicks_sd: None,
            failures,
        });
    }
    let means: Vec<f64> = levels.iter().map(|l| l.gini_mean).collect();
    Ok(SweepSummary {
        kind: "static_density".into(),
        gini_spearman: None,
        clicks_spearman: None,
        gini_unimodal_smoothed: Some(unimodal_up_down(&smooth3(&means))),
        levels,
    })
}

fn run_dynamic_imbalance(
    spec: &ExperimentSpec,
    sweep: &DynamicImbalanceSpec,
    opts: &RunOptions,
    rows: &mut Vec<MetricsRow>,
) -> Result<SweepSummary> {
    let base = sweep.method.sim_config(&spec.sim)?;
    let mut levels = Vec::new();
    for &target in &sweep.audience_ginis {
        let label = format!("{}@g{target}", sweep.method.label());
        let gt = synthetic_at_gini(spec, target)?.materialize(spec.sim.seed, &spec.sim.trainer)?;
        let outcome = run_method_repeats(&gt, &base, &label, opts)?;
        let ginis: Vec<f64> = outcome.finals.iter().map(|f| f.0).collect();
        let clicks: Vec<f64> = outcome.finals.iter().map(|f| f.1).collect();
        let (gini_mean, gini_sd) = mean_sd(&ginis);
        let (clicks_mean, clicks_sd) = mean_sd(&clicks);
        rows.extend(outcome.rows);
        levels.push(LevelSummary {
            level: target,
            label,
            seeds: outcome.seeds_ok,
            gini_mean,
            gini_sd,
            clicks_mean: Some(clicks_mean),
            clicks_sd: Some(clicks_sd),
            failures: outcome.failures,
        });
    }
    let xs: Vec<f64> = levels.iter().map(|l| l.level).collect();
    let gini_means: Vec<f64> = levels.iter().map(|l| l.gini_mean).collect();
    let click_means: Vec<f64> = levels
        .iter()
        .map(|l| l.clicks_mean.unwrap_or(f64::NAN))
        .collect();
    Ok(SweepSummary {
        kind: "dynamic_imbalance".into(),
        gini_spearman: spearman_rho(&xs, &gini_means).ok(),
        clicks_spearman: spearman_rho(&xs, &click_means).ok(),
        gini_unimodal_smoothed: None,
        levels,
    })
}

fn sweep_chart(sweeps: &[SweepSummary], kind: &str, x_label: &str) -> Result<Option<String>> {
    let Some(sweep) = sweeps.iter().find(|s| s.kind == kind) else {
        return Ok(None);
    };
    let series = Series {
        label: "mean gini".into(),
        points: sweep.levels.iter().map(|l| (l.level, l.gini_mean)).collect(),
        band: Some(
            sweep
                .levels
                .iter()
                .map(|l| (l.level, l.gini_mean - l.gini_sd, l.gini_mean + l.gini_sd))
                .collect(),
        ),
    };
    line_chart(
        "Popularity bias (Gini of TPR)",
        x_label,
        "gini",
        &[series],
    )
    .map(Some)
}

/// Execute a validated experiment and write its artifact set.
pub fn run_experiment(spec: &ExperimentSpec, opts: &RunOptions) -> Result<RunSummary> {
    spec.validate()?;
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let echo = toml::to_string_pretty(spec).map_err(|e| Error::Format(e.to_string()))?;
    write_text(&opts.out_dir.join("config.toml"), &echo)?;

    let mut summary = RunSummary {
        experiment: spec.name.clone(),
        seeds: repeat_seeds(&spec.sim),
        methods: Vec::new(),
        sweeps: Vec::new(),
        spec: spec.clone(),
    };
    let mut metric_rows: Vec<MetricsRow> = Vec::new();
    let mut sweep_csv: Vec<String> = Vec::new();

    match spec.layout()? {
        Layout::Methods(methods) => {
            let gt = spec.dataset.materialize(spec.sim.seed, &spec.sim.trainer)?;
            for method in &methods {
                let base = method.sim_config(&spec.sim)?;
                let label = method.label();
                let outcome = run_method_repeats(&gt, &base, &label, opts)?;
                summary
                    .methods
                    .push(summarize_method(method, &outcome, &outcome.rows));
                metric_rows.extend(outcome.rows);
            }
        }
        Layout::StaticFactors { imbalance, density } => {
            if let Some(sweep) = &imbalance {
                summary
                    .sweeps
                    .push(run_static_imbalance(spec, sweep, &mut sweep_csv)?);
            }
            if let Some(sweep) = &density {
                summary
                    .sweeps
                    .push(run_static_density(spec, sweep, &mut sweep_csv)?);
            }
        }
        Layout::DynamicImbalance(sweep) => {
            summary
                .sweeps
                .push(run_dynamic_imbalance(spec, &sweep, opts, &mut metric_rows)?);
        }
    }

    if !metric_rows.is_empty() {
        write_text(&opts.out_dir.join("metrics.csv"), &metrics_lines(&metric_rows))?;
        let (clicks_svg, gini_svg) = charts_from_rows(&metric_rows)?;
        write_text(&opts.out_dir.join("clicks.svg"), &clicks_svg)?;
        write_text(&opts.out_dir.join("gini.svg"), &gini_svg)?;
    }
    if !sweep_csv.is_empty() {
        let mut text = String::from(SWEEP_HEADER);
        text.push('\n');
        for line in &sweep_csv {
            text.push_str(line);
            text.push('\n');
        }
        write_text(&opts.out_dir.join("sweep.csv"), &text)?;
        if let Some(svg) = sweep_chart(&summary.sweeps, "static_imbalance", "audience gini")? {
            write_text(&opts.out_dir.join("static_imbalance.svg"), &svg)?;
        }
        if let Some(svg) = sweep_chart(&summary.sweeps, "static_density", "training density")? {
            write_text(&opts.out_dir.join("static_density.svg"), &svg)?;
        }
    }
    summary.save(&opts.out_dir.join("summary.json"))?;
    Ok(summary)
}

/// One line of a matched-bias comparison.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub label: String,
    pub final_gini_mean: f64,
    pub total_clicks_mean: f64,
    pub total_clicks_sd: f64,
    pub in_band: bool,
    pub note: String,
}

/// Matched-bias comparison across experiment summaries.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Comparison {
    pub band: (f64, f64),
    pub rows: Vec<CompareRow>,
}

impl Comparison {
    pub fn any_in_band(&self) -> bool {
        self.rows.iter().any(|r| r.in_band)
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "matched-bias comparison, final-gini band [{:.4}, {:.4}]\n",
            self.band.0, self.band.1
        );
        out.push_str(&format!(
            "{:<12} {:<24} {:>12} {:>14} {:>10}  note\n",
            "method", "setting", "final gini", "clicks mean", "clicks sd"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<12} {:<24} {:>12.4} {:>14.1} {:>10.1}  {}\n",
                r.method, r.label, r.final_gini_mean, r.total_clicks_mean, r.total_clicks_sd,
                r.note
            ));
        }
        out
    }
}

/// Pick, per method, the setting whose final Gini lands in the band, then
/// tabulate clicks. Methods with no setting in band get an explicit
/// infeasibility row.
pub fn compare_at_matched_bias(
    summaries: &[RunSummary],
    band: (f64, f64),
) -> Result<Comparison> {
    if band.0 > band.1 || !band.0.is_finite() || !band.1.is_finite() {
        return Err(Error::invalid("gini band must be a finite lo <= hi pair"));
    }
    let entries: Vec<&MethodSummary> =
        summaries.iter().flat_map(|s| &s.methods).collect();
    if entries.is_empty() {
        return Err(Error::invalid(
            "no method aggregates found in the given summaries",
        ));
    }
    let mut method_order: Vec<&str> = Vec::new();
    for e in &entries {
        if !method_order.contains(&e.method.as_str()) {
            method_order.push(&e.method);
        }
    }
    let mid = (band.0 + band.1) / 2.0;
    let rows = method_order
        .into_iter()
        .map(|method| {
            let settings: Vec<&&MethodSummary> =
                entries.iter().filter(|e| e.method == method).collect();
            let eligible = settings
                .iter()
                .filter(|e| (band.0..=band.1).contains(&e.final_gini_mean))
                .min_by(|a, b| {
                    (a.final_gini_mean - mid)
                        .abs()
                        .total_cmp(&(b.final_gini_mean - mid).abs())
                });
            match eligible {
                Some(e) => CompareRow {
                    method: method.to_string(),
                    label: e.label.clone(),
                    final_gini_mean: e.final_gini_mean,
                    total_clicks_mean: e.total_clicks_mean,
                    total_clicks_sd: e.total_clicks_sd,
                    in_band: true,
                    note: String::new(),
                },
                None => {
                    let closest = settings
                        .iter()
                        .min_by(|a, b| {
                            (a.final_gini_mean - mid)
                                .abs()
                                .total_cmp(&(b.final_gini_mean - mid).abs())
                        })
                        .expect("method has settings");
                    CompareRow {
                        method: method.to_string(),
                        label: closest.label.clone(),
                        final_gini_mean: closest.final_gini_mean,
                        total_clicks_mean: closest.total_clicks_mean,
                        total_clicks_sd: closest.total_clicks_sd,
                        in_band: false,
                        note: format!(
                            "infeasible: no setting lands in band, closest {:.4}",
                            closest.final_gini_mean
                        ),
                    }
                }
            }
        })
        .collect();
    Ok(Comparison { band, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;

    fn tiny_dynamic_spec(name: &str, body: &str) -> ExperimentSpec {
        parse_config_str(&format!(
            r#"
                name = "{name}"
                [dataset]
                kind = "synthetic"
                n_users = 20
                n_items = 30
                audience_gini = 0.3
                density = 0.2
                [sim]
                k = 3
                iterations = 30
                retrain_every = 10
                checkpoint_every = 10
                seed = 11
                repeats = 2
                [sim.trainer]
                latent_dim = 4
                epochs = 1
                {body}
            "#
        ))
        .unwrap()
    }

    #[test]
    fn methods_experiment_writes_all_artifacts() {
        let spec = tiny_dynamic_spec(
            "art",
            "[[methods]]\nname = \"popular\"\n[[methods]]\nname = \"random\"",
        );
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions { out_dir: dir.path().into(), save_logs: true };
        let summary = run_experiment(&spec, &opts).unwrap();
        assert_eq!(summary.failure_count(), 0);
        assert_eq!(summary.methods.len(), 2);
        assert_eq!(summary.methods[0].seeds, vec![11, 12]);
        for file in ["config.toml", "metrics.csv", "summary.json", "clicks.svg", "gini.svg"] {
            assert!(dir.path().join(file).exists(), "{file} missing");
        }
        assert!(dir.path().join("runs/popular-s11/series.csv").exists());
        assert!(dir.path().join("runs/popular-s11/log.csv").exists());

        let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(text.starts_with(METRICS_HEADER));
        let rows = parse_metrics_csv(&text).unwrap();
        // 2 methods x 2 repeats x 4 checkpoints (t = 0, 10, 20, 30)
        assert_eq!(rows.len(), 16);
        let reloaded = RunSummary::load(&dir.path().join("summary.json")).unwrap();
        assert_eq!(reloaded.experiment, "art");
    }

    #[test]
    fn reruns_are_byte_identical() {
        let spec = tiny_dynamic_spec("det", "[[methods]]\nname = \"popular\"");
        let read = |dir: &Path| {
            std::fs::read(dir.join("metrics.csv")).unwrap()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        run_experiment(&spec, &RunOptions { out_dir: d1.path().into(), save_logs: false })
            .unwrap();
        run_experiment(&spec, &RunOptions { out_dir: d2.path().into(), save_logs: false })
            .unwrap();
        assert_eq!(read(d1.path()), read(d2.path()));
    }

    #[test]
    fn single_repeat_has_zero_sd() {
        let mut spec = tiny_dynamic_spec("one", "[[methods]]\nname = \"random\"");
        spec.sim.repeats = 1;
        let dir = tempfile::tempdir().unwrap();
        let summary = run_experiment(
            &spec,
            &RunOptions { out_dir: dir.path().into(), save_logs: false },
        )
        .unwrap();
        assert_eq!(summary.methods[0].final_gini_sd, 0.0);
        assert_eq!(summary.methods[0].total_clicks_sd, 0.0);
        assert!(summary.methods[0].checkpoints.iter().all(|c| c.gini_sd == 0.0));
    }

    #[test]
    fn static_sweeps_summarize_levels() {
        let spec = tiny_dynamic_spec(
            "stat",
            "[static_imbalance]\naudience_ginis = [0.2, 0.4]\n\
             training_density = 0.1\n\
             [static_density]\ndensities = [0.05, 0.1, 0.2]",
        );
        let dir = tempfile::tempdir().unwrap();
        let summary = run_experiment(
            &spec,
            &RunOptions { out_dir: dir.path().into(), save_logs: false },
        )
        .unwrap();
        assert_eq!(summary.sweeps.len(), 2);
        assert_eq!(summary.sweeps[0].kind, "static_imbalance");
        assert_eq!(summary.sweeps[0].levels.len(), 2);
        assert!(summary.sweeps[0].gini_spearman.is_some());
        assert_eq!(summary.sweeps[1].kind, "static_density");
        assert!(summary.sweeps[1].gini_unimodal_smoothed.is_some());
        let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert!(text.starts_with(SWEEP_HEADER));
        // 2 levels x 2 seeds + 3 levels x 2 seeds data lines
        assert_eq!(text.lines().count(), 1 + 4 + 6);
        assert!(dir.path().join("static_imbalance.svg").exists());
        assert!(dir.path().join("static_density.svg").exists());
        assert!(!dir.path().join("metrics.csv").exists());
    }

    #[test]
    fn dynamic_imbalance_reports_rank_correlations() {
        let spec = tiny_dynamic_spec(
            "dyn",
            "[dynamic_imbalance]\naudience_ginis = [0.2, 0.4]\n\
             [dynamic_imbalance.method]\nname = \"popular\"",
        );
        let dir = tempfile::tempdir().unwrap();
        let summary = run_experiment(
            &spec,
            &RunOptions { out_dir: dir.path().into(), save_logs: false },
        )
        .unwrap();
        assert_eq!(summary.sweeps.len(), 1);
        let sweep = &summary.sweeps[0];
        assert_eq!(sweep.levels.len(), 2);
        assert!(sweep.gini_spearman.is_some());
        assert!(sweep.clicks_spearman.is_some());
        assert!(sweep.levels.iter().all(|l| l.clicks_mean.is_some()));
        assert!(dir.path().join("metrics.csv").exists());
    }

    #[test]
    fn comparison_picks_in_band_settings() {
        let ms = |method: &str, label: &str, gini: f64, clicks: f64| MethodSummary {
            method: method.into(),
            label: label.into(),
            seeds: vec![1],
            final_gini_mean: gini,
            final_gini_sd: 0.0,
            total_clicks_mean: clicks,
            total_clicks_sd: 1.0,
            checkpoints: Vec::new(),
            failures: Vec::new(),
        };
        let spec = tiny_dynamic_spec("cmp", "[[methods]]\nname = \"mf\"");
        let summary = RunSummary {
            experiment: "cmp".into(),
            seeds: vec![1],
            methods: vec![
                ms("scale", "scale_a1", 0.30, 100.0),
                ms("scale", "scale_a2", 0.41, 140.0),
                ms("dscale", "dscale_d1", 0.42, 150.0),
                ms("popular", "popular", 0.80, 90.0),
            ],
            sweeps: Vec::new(),
            spec,
        };
        let cmp = compare_at_matched_bias(&[summary], (0.38, 0.44)).unwrap();
        assert_eq!(cmp.rows.len(), 3);
        assert!(cmp.rows[0].in_band && cmp.rows[0].label == "scale_a2");
        assert!(cmp.rows[1].in_band && cmp.rows[1].label == "dscale_d1");
        assert!(!cmp.rows[2].in_band);
        assert!(cmp.rows[2].note.contains("infeasible"));
        let table = cmp.render();
        assert!(table.contains("scale_a2"));
        assert!(compare_at_matched_bias(&[], (0.0, 0.1)).is_err());
    }

    #[test]
    fn metrics_csv_parser_rejects_malformed_documents() {
        assert!(parse_metrics_csv("wrong,header\n").is_err());
        assert!(parse_metrics_csv(METRICS_HEADER).is_err());
        let bad_fields = format!("{METRICS_HEADER}\na,b,c\n");
        assert!(parse_metrics_csv(&bad_fields).is_err());
        let bad_number = format!("{METRICS_HEADER}\nr1,mf,notanint,3,0.1,0\n");
        assert!(parse_metrics_csv(&bad_number).is_err());
        let good = format!("{METRICS_HEADER}\nr1,mf,0,3,0.1,0\n");
        assert_eq!(parse_metrics_csv(&good).unwrap().len(), 1);
    }
}
