//! The TOML configuration file and its translation into library types.
//!
//! One file drives every subcommand. `[spec]` is always required; `simulate`
//! additionally needs `[simulate]` (and `[persuasion]` if markets are to be
//! exposed), while `estimate` reads `[estimate]` knobs and the `[persuasion]`
//! wiring when the data contains exposed markets. Unknown keys are rejected
//! so typos surface as errors instead of silently falling back to defaults.

use serde::Deserialize;

use ridc::inversion::InversionOptions;
use ridc::model::{Belief, ChoiceSpec};
use ridc::moments::{Stage1Options, ThetaOptions, WeightScheme};
use ridc::persuasion::{PersuasionStrategy, SignalFamily};
use ridc::ri::SolverOptions;
use ridc::simulate::{DemoSampler, DgpSpec};

use crate::CliError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub spec: SpecConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub inversion: InversionConfig,
    pub simulate: Option<SimulateConfig>,
    pub persuasion: Option<PersuasionConfig>,
    #[serde(default)]
    pub estimate: EstimateConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecConfig {
    pub options: Option<usize>,
    pub groups: Option<usize>,
    pub levels: Option<usize>,
    pub option_labels: Option<Vec<String>>,
    pub group_labels: Option<Vec<String>>,
    pub level_labels: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub foc_tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub zero_clamp: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { foc_tol: None, max_iter: None, zero_clamp: None }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionConfig {
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig { tol: None, max_iter: None }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    /// Unexposed (chi=0) markets.
    pub markets: usize,
    /// Exposed (chi=1) markets, drawn under `[persuasion]`.
    #[serde(default)]
    pub exposed_markets: usize,
    pub seed: u64,
    pub voters: Option<u64>,
    pub level_probs: Option<Vec<f64>>,
    pub prior: PriorConfig,
    pub alpha: Vec<AlphaTable>,
    pub demo: Vec<DemoConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaTable {
    pub values: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DemoConfig {
    Fixed { point: Vec<f64> },
    Dirichlet { concentration: Vec<f64> },
    Finite { points: Vec<Vec<f64>>, weights: Vec<f64> },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersuasionConfig {
    pub family: String,
    pub theta: f64,
    /// One-based option indices, matching the `share_*` column numbering.
    pub rep: usize,
    pub dem: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateConfig {
    pub multistarts: usize,
    pub seed: u64,
    pub start_spread: f64,
    pub max_iter: usize,
    pub weight: String,
    pub theta_bounds: [f64; 2],
    pub theta_grid: usize,
    pub theta_refine: usize,
    pub theta_efficient: bool,
    pub bootstrap: usize,
    pub bootstrap_seed: u64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        let s1 = Stage1Options::default();
        let th = ThetaOptions::default();
        EstimateConfig {
            multistarts: s1.multistarts,
            seed: s1.seed,
            start_spread: s1.start_spread,
            max_iter: s1.max_iter,
            weight: "identity".to_string(),
            theta_bounds: [th.bounds.0, th.bounds.1],
            theta_grid: th.grid_points,
            theta_refine: th.refine_iterations,
            theta_efficient: th.efficient,
            bootstrap: 0,
            bootstrap_seed: 1,
        }
    }
}

fn bad(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

const EXPOSED_SEED_SALT: u64 = 0xA076_1D64_78BD_642F;

pub struct DgpPair {
    pub plain: Option<DgpSpec>,
    pub exposed: Option<DgpSpec>,
    /// The root seed both designs were derived from (after any override).
    pub seed: u64,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn spec(&self) -> Result<ChoiceSpec, CliError> {
        self.spec.resolve()
    }

    pub fn solver_options(&self) -> SolverOptions {
        let mut o = SolverOptions::default();
        if let Some(t) = self.solver.foc_tol {
            o.foc_tol = t;
        }
        if let Some(n) = self.solver.max_iter {
            o.max_iter = n;
        }
        if let Some(z) = self.solver.zero_clamp {
            o.zero_clamp = z;
        }
        o
    }

    pub fn inversion_options(&self) -> InversionOptions {
        let mut o = InversionOptions::default();
        if let Some(t) = self.inversion.tol {
            o.tol = t;
        }
        if let Some(n) = self.inversion.max_iter {
            o.max_iter = n;
        }
        o
    }

    pub fn stage1_options(&self, weight: Option<WeightScheme>, seed: Option<u64>) -> Stage1Options {
        let e = &self.estimate;
        Stage1Options {
            weight: weight.unwrap_or(match e.weight.as_str() {
                "efficient" => WeightScheme::Efficient,
                _ => WeightScheme::Identity,
            }),
            multistarts: e.multistarts,
            seed: seed.unwrap_or(e.seed),
            start_spread: e.start_spread,
            max_iter: e.max_iter,
            inversion: self.inversion_options(),
        }
    }

    pub fn theta_options(&self) -> ThetaOptions {
        let e = &self.estimate;
        ThetaOptions {
            bounds: (e.theta_bounds[0], e.theta_bounds[1]),
            grid_points: e.theta_grid,
            refine_iterations: e.theta_refine,
            efficient: e.theta_efficient,
            solver: self.solver_options(),
            ..ThetaOptions::default()
        }
    }

    pub fn validate_estimate(&self) -> Result<(), CliError> {
        match self.estimate.weight.as_str() {
            "identity" | "efficient" => {}
            other => return Err(bad("estimate.weight", format!("unknown scheme {other:?}"))),
        }
        let [lo, hi] = self.estimate.theta_bounds;
        if !(lo > 0.0 && hi <= 1.0 && lo < hi) {
            return Err(bad("estimate.theta_bounds", "need 0 < lo < hi <= 1"));
        }
        Ok(())
    }

    /// Strategy template for the spec's group count, with `theta` overriding
    /// the configured value when given (stage two estimates it; simulation
    /// takes it as the truth).
    pub fn strategy(&self, spec: &ChoiceSpec, theta: Option<f64>) -> Result<PersuasionStrategy, CliError> {
        let p = self
            .persuasion
            .as_ref()
            .ok_or_else(|| bad("persuasion", "section required here but missing"))?;
        let family = match p.family.as_str() {
            "college" => SignalFamily::College,
            "highschool" => SignalFamily::HighSchool,
            other => return Err(bad("persuasion.family", format!("unknown family {other:?}"))),
        };
        let j = spec.j_count();
        for (name, idx) in [("persuasion.rep", p.rep), ("persuasion.dem", p.dem)] {
            if idx == 0 || idx > j {
                return Err(bad(name, format!("option index must be in 1..={j}")));
            }
        }
        if p.rep == p.dem {
            return Err(bad("persuasion.dem", "rep and dem must differ"));
        }
        PersuasionStrategy::shared(spec.k_count(), family, theta.unwrap_or(p.theta), p.rep - 1, p.dem - 1)
            .map_err(|e| bad("persuasion", e))
    }

    /// The two regimes' designs: unexposed markets first, exposed second.
    /// Either can be absent when its count is zero, never both. The exposed
    /// design's seed is salted so the regimes' market streams are unrelated
    /// even though one config key seeds them both.
    pub fn dgp_pair(&self, seed_override: Option<u64>) -> Result<DgpPair, CliError> {
        let sim = self
            .simulate
            .as_ref()
            .ok_or_else(|| bad("simulate", "section required for this command but missing"))?;
        if sim.markets + sim.exposed_markets == 0 {
            return Err(bad("simulate.markets", "total market count must be positive"));
        }
        let seed = seed_override.unwrap_or(sim.seed);
        let plain = if sim.markets > 0 {
            Some(self.dgp_one(sim.markets, false, seed)?)
        } else {
            None
        };
        let exposed = if sim.exposed_markets > 0 {
            if self.persuasion.is_none() {
                return Err(bad("simulate.exposed_markets", "needs a [persuasion] section"));
            }
            Some(self.dgp_one(sim.exposed_markets, true, seed ^ EXPOSED_SEED_SALT)?)
        } else {
            None
        };
        Ok(DgpPair { plain, exposed, seed })
    }

    fn dgp_one(&self, markets: usize, exposed: bool, seed: u64) -> Result<DgpSpec, CliError> {
        let spec = self.spec()?;
        let sim = self.simulate.as_ref().expect("checked by dgp_pair");
        let (j, k, l) = (spec.j_count(), spec.k_count(), spec.l_count());

        if sim.alpha.len() != k * l {
            return Err(bad(
                "simulate.alpha",
                format!("need one table per (level, group) cell, level-major: {} not {}", k * l, sim.alpha.len()),
            ));
        }
        for (i, t) in sim.alpha.iter().enumerate() {
            if t.values.len() != j {
                return Err(bad(
                    "simulate.alpha",
                    format!("table {i}: need {j} entries (outside last, pinned to 0)"),
                ));
            }
        }

        let prior = Belief::new(sim.prior.points.clone(), sim.prior.weights.clone())
            .map_err(|e| bad("simulate.prior", e))?;

        if sim.demo.len() != l {
            return Err(bad("simulate.demo", format!("need one sampler per level: {} not {}", l, sim.demo.len())));
        }
        let demo = sim
            .demo
            .iter()
            .map(|d| match d {
                DemoConfig::Fixed { point } => DemoSampler::Fixed(point.clone()),
                DemoConfig::Dirichlet { concentration } => DemoSampler::Dirichlet(concentration.clone()),
                DemoConfig::Finite { points, weights } => {
                    DemoSampler::Finite { points: points.clone(), weights: weights.clone() }
                }
            })
            .collect();

        let level_probs = match &sim.level_probs {
            Some(p) => p.clone(),
            None => vec![1.0 / l as f64; l],
        };

        let persuasion = if exposed { Some(self.strategy(&spec, None)?) } else { None };

        let dgp = DgpSpec {
            spec,
            alpha: sim.alpha.iter().map(|t| t.values.clone()).collect(),
            prior,
            demo,
            level_probs,
            persuasion,
            markets,
            voters: sim.voters,
            seed,
        };
        dgp.validate().map_err(|e| bad("simulate", e))?;
        Ok(dgp)
    }
}

impl SpecConfig {
    fn resolve(&self) -> Result<ChoiceSpec, CliError> {
        let check = |count: Option<usize>, labels: &Option<Vec<String>>, field: &str| {
            if let (Some(c), Some(ls)) = (count, labels) {
                if c != ls.len() {
                    return Err(bad(field, format!("count {} disagrees with {} labels", c, ls.len())));
                }
            }
            if count.is_none() && labels.is_none() {
                return Err(bad(field, "give a count or a label list"));
            }
            Ok(())
        };
        check(self.options, &self.option_labels, "spec.options")?;
        check(self.groups, &self.group_labels, "spec.groups")?;
        check(self.levels, &self.level_labels, "spec.levels")?;

        // Label lists win; bare counts fall back to the library's naming.
        let counted = ChoiceSpec::new(
            self.options.or_else(|| self.option_labels.as_ref().map(Vec::len)).unwrap(),
            self.groups.or_else(|| self.group_labels.as_ref().map(Vec::len)).unwrap(),
            self.levels.or_else(|| self.level_labels.as_ref().map(Vec::len)).unwrap(),
        )
        .map_err(|e| bad("spec", e))?;
        let pick = |given: &Option<Vec<String>>, fallback: &[String]| {
            given.clone().unwrap_or_else(|| fallback.to_vec())
        };
        ChoiceSpec::with_labels(
            pick(&self.option_labels, counted.option_labels()),
            pick(&self.group_labels, counted.group_labels()),
            pick(&self.level_labels, counted.level_labels()),
        )
        .map_err(|e| bad("spec", e))
    }
}
