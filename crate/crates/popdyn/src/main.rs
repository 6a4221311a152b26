use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use popdyn::config::{apply_paper_scale, parse_config, parse_config_str, recipe, RECIPES};
use popdyn::runner::{
    charts_from_rows, compare_at_matched_bias, parse_metrics_csv, run_experiment,
    RunOptions, RunSummary,
};
use popdyn::{Error, Result};

/// Simulate recommendation feedback loops and measure popularity bias.
#[derive(Parser)]
#[command(name = "popdyn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML config file or a built-in recipe name.
    Run {
        /// Config path, or one of the names from `popdyn recipes`.
        config: String,
        /// Output directory; defaults to out/<experiment-name>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Use the full-scale constants (K=20, T=40000).
        #[arg(long)]
        paper_scale: bool,
        /// Override the number of repeats per method.
        #[arg(long)]
        repeats: Option<u32>,
        /// Also write the full exposure log of every run.
        #[arg(long)]
        logs: bool,
    },
    /// Tabulate clicks across summaries at a matched final-Gini band.
    Compare {
        /// summary.json files produced by `run`.
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
        /// Final-Gini band as LO:HI, e.g. 0.40:0.44.
        #[arg(long, value_name = "LO:HI")]
        gini_band: String,
    },
    /// Regenerate the chart pair from a metrics.csv file.
    Plot {
        metrics: PathBuf,
        /// Directory for the SVGs; defaults to the CSV's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List built-in experiment recipes, or print one.
    Recipes {
        /// Print this recipe's config instead of listing names.
        #[arg(long)]
        show: Option<String>,
    },
}

fn fail(code: u8, err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(code)
}

fn load_spec(
    config: &str,
    seed: Option<u64>,
    repeats: Option<u32>,
    paper_scale: bool,
) -> Result<popdyn::config::ExperimentSpec> {
    let mut spec = if Path::new(config).exists() {
        parse_config(Path::new(config))?
    } else if let Some(text) = recipe(config) {
        parse_config_str(text)?
    } else {
        return Err(Error::Config(format!(
            "{config} is neither a config file nor a known recipe \
             (see `popdyn recipes`)"
        )));
    };
    if let Some(s) = seed {
        spec.sim.seed = s;
    }
    if let Some(r) = repeats {
        spec.sim.repeats = r;
    }
    if paper_scale {
        apply_paper_scale(&mut spec);
    }
    spec.validate()?;
    Ok(spec)
}

fn print_summary(summary: &RunSummary) {
    for m in &summary.methods {
        println!(
            "{:<14} final gini {:.4} +- {:.4}   clicks {:.1} +- {:.1}   ({} runs)",
            m.label,
            m.final_gini_mean,
            m.final_gini_sd,
            m.total_clicks_mean,
            m.total_clicks_sd,
            m.seeds.len()
        );
        for f in &m.failures {
            println!("    failed: {f}");
        }
    }
    for sweep in &summary.sweeps {
        println!("{}:", sweep.kind);
        for l in &sweep.levels {
            let clicks = match l.clicks_mean {
                Some(c) => format!("   clicks {c:.1}"),
                None => String::new(),
            };
            println!(
                "  level {:<8} gini {:.4} +- {:.4}{clicks}",
                l.level, l.gini_mean, l.gini_sd
            );
            for f in &l.failures {
                println!("    failed: {f}");
            }
        }
        if let Some(rho) = sweep.gini_spearman {
            println!("  spearman(level, gini) = {rho:.3}");
        }
        if let Some(rho) = sweep.clicks_spearman {
            println!("  spearman(level, clicks) = {rho:.3}");
        }
        if let Some(u) = sweep.gini_unimodal_smoothed {
            println!("  smoothed gini unimodal up-then-down: {u}");
        }
    }
}

fn cmd_run(
    config: &str,
    out: Option<PathBuf>,
    seed: Option<u64>,
    paper_scale: bool,
    repeats: Option<u32>,
    logs: bool,
) -> ExitCode {
    let spec = match load_spec(config, seed, repeats, paper_scale) {
        Ok(s) => s,
        Err(e) => return fail(2, &e),
    };
    let out_dir = out.unwrap_or_else(|| PathBuf::from("out").join(&spec.name));
    let opts = RunOptions { out_dir: out_dir.clone(), save_logs: logs };
    match run_experiment(&spec, &opts) {
        Ok(summary) => {
            print_summary(&summary);
            println!("artifacts written to {}", out_dir.display());
            let failures = summary.failure_count();
            if failures > 0 {
                eprintln!("{failures} run(s) failed");
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => fail(1, &e),
    }
}

fn parse_band(text: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = text.split(':').collect();
    let err = || Error::Config(format!("gini band {text:?} is not LO:HI"));
    if parts.len() != 2 {
        return Err(err());
    }
    let lo: f64 = parts[0].parse().map_err(|_| err())?;
    let hi: f64 = parts[1].parse().map_err(|_| err())?;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(err());
    }
    Ok((lo, hi))
}

fn cmd_compare(summaries: &[PathBuf], gini_band: &str) -> ExitCode {
    let band = match parse_band(gini_band) {
        Ok(b) => b,
        Err(e) => return fail(2, &e),
    };
    let mut loaded = Vec::new();
    for path in summaries {
        match RunSummary::load(path) {
            Ok(s) => loaded.push(s),
            Err(e) => return fail(2, &e),
        }
    }
    match compare_at_matched_bias(&loaded, band) {
        Ok(cmp) => {
            print!("{}", cmp.render());
            ExitCode::SUCCESS
        }
        Err(e) => fail(2, &e),
    }
}

fn cmd_plot(metrics: &Path, out: Option<PathBuf>) -> ExitCode {
    let text = match std::fs::read_to_string(metrics) {
        Ok(t) => t,
        Err(e) => return fail(2, &Error::io(metrics, e)),
    };
    let rows = match parse_metrics_csv(&text) {
        Ok(r) => r,
        Err(e) => return fail(2, &e),
    };
    let (clicks_svg, gini_svg) = match charts_from_rows(&rows) {
        Ok(pair) => pair,
        Err(e) => return fail(1, &e),
    };
    let dir = out.unwrap_or_else(|| {
        metrics.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
    });
    if let Err(e) = std::fs::create_dir_all(&dir) {
        return fail(1, &Error::io(&dir, e));
    }
    for (name, body) in [("clicks.svg", &clicks_svg), ("gini.svg", &gini_svg)] {
        let path = dir.join(name);
        if let Err(e) = std::fs::write(&path, body) {
            return fail(1, &Error::io(&path, e));
        }
        println!("wrote {}", path.display());
    }
    ExitCode::SUCCESS
}

fn cmd_recipes(show: Option<&str>) -> ExitCode {
    match show {
        None => {
            for (name, _) in RECIPES {
                println!("{name}");
            }
            ExitCode::SUCCESS
        }
        Some(name) => match recipe(name) {
            Some(text) => {
                print!("{text}");
                ExitCode::SUCCESS
            }
            None => fail(2, &Error::Config(format!("no recipe named {name}"))),
        },
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { config, out, seed, paper_scale, repeats, logs } => {
            cmd_run(&config, out, seed, paper_scale, repeats, logs)
        }
        Command::Compare { summaries, gini_band } => cmd_compare(&summaries, &gini_band),
        Command::Plot { metrics, out } => cmd_plot(&metrics, out),
        Command::Recipes { show } => cmd_recipes(show.as_deref()),
    }
}
