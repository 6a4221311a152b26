//! Experiment configuration: a TOML document naming a dataset, a simulation
//! setup, and one experiment layout (a method list or a sweep). Built-in
//! recipes cover the standard figure set at desk scale.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::debias::{DebiasPolicy, FpcForm};
use crate::error::{Error, Result};
use crate::ground_truth::{complete_and_binarize, load_ratings, synthesize_ground_truth, GroundTruth};
use crate::mf::TrainConfig;
use crate::rng::derive_seed;
use crate::sim::{CflMode, Ranker, SimConfig};

/// Where the ground-truth relevance matrix comes from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Synthesize a power-law audience profile at a target skew and density.
    Synthetic {
        n_users: usize,
        n_items: usize,
        audience_gini: f64,
        density: f64,
    },
    /// Complete an explicit-ratings file with a small factor model, then
    /// keep the top scores as true positives.
    Ratings {
        path: PathBuf,
        #[serde(default = "default_delimiter")]
        delimiter: char,
        target_density: f64,
        /// Users kept after subsampling.
        user_cap: usize,
    },
}

fn default_delimiter() -> char {
    ','
}

const DATASET_SEED_TAG: u64 = 0x64617461;

impl DatasetSpec {
    /// Materialize the ground truth. `seed` is the experiment seed; the
    /// dataset derives its own stream so run seeds stay independent.
    pub fn materialize(&self, seed: u64, trainer: &TrainConfig) -> Result<GroundTruth> {
        let ds_seed = derive_seed(seed, DATASET_SEED_TAG);
        match self {
            DatasetSpec::Synthetic { n_users, n_items, audience_gini, density } => {
                synthesize_ground_truth(*n_users, *n_items, *audience_gini, *density, ds_seed)
            }
            DatasetSpec::Ratings { path, delimiter, target_density, user_cap } => {
                let ratings = load_ratings(path, *delimiter)?;
                let cfg = TrainConfig { seed: ds_seed, ..trainer.clone() };
                complete_and_binarize(&ratings, &cfg, *target_density, *user_cap)
            }
        }
    }
}

/// The seven rankers an experiment can compare.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Mf,
    Popular,
    Random,
    Scale,
    Dscale,
    Fpc,
    FpcDscale,
}

impl MethodName {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodName::Mf => "mf",
            MethodName::Popular => "popular",
            MethodName::Random => "random",
            MethodName::Scale => "scale",
            MethodName::Dscale => "dscale",
            MethodName::Fpc => "fpc",
            MethodName::FpcDscale => "fpc_dscale",
        }
    }
}

/// One compared method: a named ranker plus its knobs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: MethodName,
    /// Column label in outputs; defaults to the method name.
    #[serde(default)]
    pub label: Option<String>,
    /// Scale exponent; required by scale.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Per-retrain exponent increment; required by dscale and fpc_dscale.
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub fpc_form: Option<FpcForm>,
    /// Train only on bootstrap and random-probe clicks.
    #[serde(default)]
    pub without_cfl: bool,
}

impl MethodSpec {
    pub fn plain(name: MethodName) -> Self {
        MethodSpec {
            name,
            label: None,
            alpha: None,
            delta: None,
            fpc_form: None,
            without_cfl: false,
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.name.as_str().to_string())
    }

    fn require(opt: Option<f64>, what: &str, method: &str) -> Result<f64> {
        opt.ok_or_else(|| Error::Config(format!("method {method} requires `{what}`")))
    }

    /// Translate into ranker + policy, validating knob applicability.
    pub fn resolve(&self) -> Result<(Ranker, DebiasPolicy)> {
        let name = self.name.as_str();
        if self.alpha.is_some()
            && !matches!(self.name, MethodName::Scale)
        {
            return Err(Error::Config(format!("method {name} does not take `alpha`")));
        }
        if self.delta.is_some()
            && !matches!(self.name, MethodName::Dscale | MethodName::FpcDscale)
        {
            return Err(Error::Config(format!("method {name} does not take `delta`")));
        }
        if self.fpc_form.is_some()
            && !matches!(self.name, MethodName::Fpc | MethodName::FpcDscale)
        {
            return Err(Error::Config(format!(
                "method {name} does not take `fpc_form`"
            )));
        }
        let pair = match self.name {
            MethodName::Mf => (Ranker::Mf, DebiasPolicy::none()),
            MethodName::Popular => (Ranker::Popular, DebiasPolicy::none()),
            MethodName::Random => (Ranker::Random, DebiasPolicy::none()),
            MethodName::Scale => (
                Ranker::Mf,
                DebiasPolicy::scale(Self::require(self.alpha, "alpha", name)?),
            ),
            MethodName::Dscale => (
                Ranker::Mf,
                DebiasPolicy::dscale(Self::require(self.delta, "delta", name)?),
            ),
            MethodName::Fpc => {
                let mut policy = DebiasPolicy::fpc();
                policy.fpc_form = self.fpc_form.unwrap_or_default();
                (Ranker::Mf, policy)
            }
            MethodName::FpcDscale => {
                let mut policy =
                    DebiasPolicy::fpc_dscale(Self::require(self.delta, "delta", name)?);
                policy.fpc_form = self.fpc_form.unwrap_or_default();
                (Ranker::Mf, policy)
            }
        };
        pair.1.validate()?;
        Ok(pair)
    }

    /// The per-run simulation config for this method.
    pub fn sim_config(&self, base: &SimConfig) -> Result<SimConfig> {
        let (ranker, policy) = self.resolve()?;
        let cfg = SimConfig {
            ranker,
            policy,
            cfl_mode: if self.without_cfl { CflMode::WithoutCfl } else { CflMode::WithCfl },
            ..base.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Static sweep over audience imbalance: one synthetic dataset per level,
/// trained on positives subsampled to `training_density`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticImbalanceSpec {
    pub audience_ginis: Vec<f64>,
    pub training_density: f64,
}

/// Static sweep over training density: one base dataset, training sets
/// subsampled from its positives.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticDensitySpec {
    pub densities: Vec<f64>,
}

/// Dynamic runs of one method across several imbalance levels.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicImbalanceSpec {
    pub audience_ginis: Vec<f64>,
    pub method: MethodSpec,
}

/// A parsed, validated experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub sim: SimConfig,
    /// Exactly one layout below must be present.
    #[serde(default)]
    pub methods: Vec<MethodSpec>,
    #[serde(default)]
    pub static_imbalance: Option<StaticImbalanceSpec>,
    #[serde(default)]
    pub static_density: Option<StaticDensitySpec>,
    #[serde(default)]
    pub dynamic_imbalance: Option<DynamicImbalanceSpec>,
}

/// What shape of experiment a spec describes. The two static sweeps may
/// appear together (they share the training-then-one-round protocol).
#[derive(Clone, Debug)]
pub enum Layout {
    Methods(Vec<MethodSpec>),
    StaticFactors {
        imbalance: Option<StaticImbalanceSpec>,
        density: Option<StaticDensitySpec>,
    },
    DynamicImbalance(DynamicImbalanceSpec),
}

impl ExperimentSpec {
    pub fn layout(&self) -> Result<Layout> {
        let mut layouts = Vec::new();
        if !self.methods.is_empty() {
            layouts.push(Layout::Methods(self.methods.clone()));
        }
        if self.static_imbalance.is_some() || self.static_density.is_some() {
            layouts.push(Layout::StaticFactors {
                imbalance: self.static_imbalance.clone(),
                density: self.static_density.clone(),
            });
        }
        if let Some(s) = &self.dynamic_imbalance {
            layouts.push(Layout::DynamicImbalance(s.clone()));
        }
        match layouts.len() {
            0 => Err(Error::Config(
                "experiment needs methods, static_imbalance, static_density, \
                 or dynamic_imbalance"
                    .into(),
            )),
            1 => Ok(layouts.remove(0)),
            _ => Err(Error::Config(
                "experiment layouts are mutually exclusive; keep exactly one".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("experiment name is empty".into()));
        }
        if self
            .name
            .chars()
            .any(|c| !(c.is_ascii_alphanumeric() || c == '_' || c == '-'))
        {
            return Err(Error::Config(format!(
                "experiment name {:?} may use [A-Za-z0-9_-] only",
                self.name
            )));
        }
        self.sim.validate_base()?;
        match self.layout()? {
            Layout::Methods(methods) => {
                let mut labels = std::collections::HashSet::new();
                for m in &methods {
                    m.sim_config(&self.sim)?;
                    if !labels.insert(m.label()) {
                        return Err(Error::Config(format!(
                            "duplicate method label {:?}",
                            m.label()
                        )));
                    }
                }
            }
            Layout::StaticFactors { imbalance, density } => {
                if let Some(s) = imbalance {
                    validate_levels(&s.audience_ginis, "audience_ginis", 0.0, 1.0)?;
                    if !(s.training_density > 0.0 && s.training_density < 1.0) {
                        return Err(Error::Config(
                            "training_density must be in (0, 1)".into(),
                        ));
                    }
                    if let DatasetSpec::Synthetic { density: base, .. } = &self.dataset {
                        if s.training_density > *base + 1e-12 {
                            return Err(Error::Config(
                                "training_density cannot exceed the dataset density".into(),
                            ));
                        }
                    }
                }
                if let Some(s) = density {
                    validate_levels(&s.densities, "densities", 0.0, 1.0)?;
                    if let DatasetSpec::Synthetic { density: base, .. } = &self.dataset {
                        if s.densities.iter().any(|d| *d > *base + 1e-12) {
                            return Err(Error::Config(
                                "density levels cannot exceed the dataset density".into(),
                            ));
                        }
                    }
                }
            }
            Layout::DynamicImbalance(s) => {
                validate_levels(&s.audience_ginis, "audience_ginis", 0.0, 1.0)?;
                s.method.sim_config(&self.sim)?;
            }
        }
        match &self.dataset {
            DatasetSpec::Synthetic { n_users, n_items, audience_gini, density } => {
                if *n_users == 0 || *n_items == 0 {
                    return Err(Error::Config("dataset dimensions must be positive".into()));
                }
                if !(0.0..1.0).contains(audience_gini) || !(0.0..1.0).contains(density) {
                    return Err(Error::Config(
                        "audience_gini and density must lie in [0, 1)".into(),
                    ));
                }
            }
            DatasetSpec::Ratings { target_density, user_cap, .. } => {
                if !(0.0..1.0).contains(target_density) || *target_density == 0.0 {
                    return Err(Error::Config("target_density must lie in (0, 1)".into()));
                }
                if *user_cap == 0 {
                    return Err(Error::Config("user_cap must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

fn validate_levels(levels: &[f64], what: &str, lo: f64, hi: f64) -> Result<()> {
    if levels.len() < 2 {
        return Err(Error::Config(format!("{what} needs at least two levels")));
    }
    if levels.iter().any(|v| !v.is_finite() || *v < lo || *v >= hi) {
        return Err(Error::Config(format!(
            "{what} values must lie in [{lo}, {hi})"
        )));
    }
    if levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!("{what} must strictly increase")));
    }
    Ok(())
}

impl SimConfig {
    /// Validation that skips ranker/policy coupling; layouts fill those in.
    fn validate_base(&self) -> Result<()> {
        let neutral = SimConfig {
            ranker: Ranker::Mf,
            policy: DebiasPolicy::none(),
            ..self.clone()
        };
        neutral.validate()
    }
}

/// Parse and validate a TOML experiment document.
pub fn parse_config(path: &Path) -> Result<ExperimentSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentSpec> {
    let spec: ExperimentSpec =
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

/// Built-in experiment documents, keyed by recipe name.
pub const RECIPES: &[(&str, &str)] = &[
    ("fig2_baselines", include_str!("recipes/fig2_baselines.toml")),
    ("fig3_cfl", include_str!("recipes/fig3_cfl.toml")),
    ("fig4_static_factors", include_str!("recipes/fig4_static_factors.toml")),
    ("fig5_imbalance_dynamic", include_str!("recipes/fig5_imbalance_dynamic.toml")),
    ("fig6_static_vs_dynamic_debias", include_str!("recipes/fig6_static_vs_dynamic_debias.toml")),
    ("fig7_fpc_family", include_str!("recipes/fig7_fpc_family.toml")),
];

pub fn recipe(name: &str) -> Option<&'static str> {
    RECIPES.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

/// Raise list length and horizon to the paper-scale constants.
pub fn apply_paper_scale(spec: &mut ExperimentSpec) {
    spec.sim.k = 20;
    spec.sim.iterations = 40_000;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let spec = parse_config_str(
            r#"
                name = "tiny"
                [dataset]
                kind = "synthetic"
                n_users = 50
                n_items = 80
                audience_gini = 0.4
                density = 0.1
                [[methods]]
                name = "mf"
            "#,
        )
        .unwrap();
        assert_eq!(spec.sim.k, 20);
        assert_eq!(spec.sim.retrain_every, 50);
        assert!(matches!(spec.layout().unwrap(), Layout::Methods(m) if m.len() == 1));
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = parse_config_str(
            r#"
                name = "x"
                foo = 3
                [dataset]
                kind = "synthetic"
                n_users = 10
                n_items = 10
                audience_gini = 0.3
                density = 0.2
            "#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");
    }

    #[test]
    fn negative_delta_is_rejected() {
        let err = parse_config_str(
            r#"
                name = "x"
                [dataset]
                kind = "synthetic"
                n_users = 10
                n_items = 30
                audience_gini = 0.3
                density = 0.2
                [[methods]]
                name = "dscale"
                delta = -0.5
            "#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("delta"), "{err}");
    }

    #[test]
    fn knobs_must_match_the_method() {
        for (body, needle) in [
            ("name = \"scale\"", "alpha"),
            ("name = \"dscale\"", "delta"),
            ("name = \"fpc_dscale\"", "delta"),
            ("name = \"mf\"\nalpha = 0.5", "alpha"),
            ("name = \"random\"\ndelta = 0.5", "delta"),
            ("name = \"scale\"\nalpha = 0.5\nfpc_form = \"independent\"", "fpc_form"),
        ] {
            let doc = format!(
                r#"
                    name = "x"
                    [dataset]
                    kind = "synthetic"
                    n_users = 10
                    n_items = 30
                    audience_gini = 0.3
                    density = 0.2
                    [[methods]]
                    {body}
                "#
            );
            let err = parse_config_str(&doc).unwrap_err();
            assert!(err.to_string().contains(needle), "{body}: {err}");
        }
    }

    #[test]
    fn layouts_are_mutually_exclusive() {
        let err = parse_config_str(
            r#"
                name = "x"
                [dataset]
                kind = "synthetic"
                n_users = 10
                n_items = 30
                audience_gini = 0.3
                density = 0.2
                [[methods]]
                name = "mf"
                [static_imbalance]
                audience_ginis = [0.3, 0.4]
                training_density = 0.1
            "#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("exclusive"), "{err}");
    }

    #[test]
    fn duplicate_labels_are_rejected() {
        let err = parse_config_str(
            r#"
                name = "x"
                [dataset]
                kind = "synthetic"
                n_users = 10
                n_items = 30
                audience_gini = 0.3
                density = 0.2
                [[methods]]
                name = "mf"
                [[methods]]
                name = "mf"
            "#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn all_recipes_parse_and_validate() {
        for (name, text) in RECIPES {
            let spec = parse_config_str(text)
                .unwrap_or_else(|e| panic!("recipe {name}: {e}"));
            assert_eq!(&spec.name, name);
            let mut paper = spec.clone();
            apply_paper_scale(&mut paper);
            assert_eq!(paper.sim.iterations, 40_000);
            paper.validate().unwrap();
        }
        assert!(recipe("fig2_baselines").is_some());
        assert!(recipe("nope").is_none());
    }

    #[test]
    fn without_cfl_flag_switches_mode() {
        let spec = parse_config_str(
            r#"
                name = "x"
                [dataset]
                kind = "synthetic"
                n_users = 10
                n_items = 30
                audience_gini = 0.3
                density = 0.2
                [[methods]]
                name = "mf"
                label = "mf_no_cfl"
                without_cfl = true
            "#,
        )
        .unwrap();
        let Layout::Methods(methods) = spec.layout().unwrap() else {
            panic!("expected methods layout")
        };
        let cfg = methods[0].sim_config(&spec.sim).unwrap();
        assert_eq!(cfg.cfl_mode, CflMode::WithoutCfl);
    }
}
