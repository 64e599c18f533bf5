//! Synthetic market generation and exact moment oracles.
//!
//! Markets are drawn from the model's own data-generating process: a level,
//! a demographic mix, a common shock, and (when a persuader is present)
//! one signal per group. Shares are exact population probabilities; the
//! observable in this setting is the share vector, so no individual-level
//! sampling is involved unless a finite voter count is requested explicitly.
//!
//! Every market gets its own counter-derived seed, which makes generation
//! deterministic regardless of worker count, and signals consume a separate
//! stream so that a run with an uninformative persuader is bit-identical to
//! a run with none.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inversion::{invert_batch, InversionOptions};
use crate::model::{group_utility, Belief, ChoiceSpec, Market, PreferenceParams};
use crate::moments::{stage1_contribution, stage1_tags, stage2_tags, MomentVector};
use crate::persuasion::{persuaded_choice, signal_prob, PersuadedChoice, PersuasionStrategy};
use crate::ri::{conditional_choice_prob, solve_unconditional, SolverOptions};

/// How one level's demographic weights are drawn.
#[derive(Debug, Clone)]
pub enum DemoSampler {
    /// Every market gets this exact mix.
    Fixed(Vec<f64>),
    /// Dirichlet with the given concentration parameters.
    Dirichlet(Vec<f64>),
    /// Finite support with explicit probabilities; the only samplers the
    /// exact moment oracles accept, since they enumerate the support.
    Finite { points: Vec<Vec<f64>>, weights: Vec<f64> },
}

impl DemoSampler {
    fn validate(&self, k: usize) -> Result<()> {
        match self {
            DemoSampler::Fixed(d) => crate::model::check_simplex("fixed demographics", d, 1e-9)
                .and_then(|()| expect_len("fixed demographics", d.len(), k)),
            DemoSampler::Dirichlet(a) => {
                expect_len("dirichlet parameters", a.len(), k)?;
                if a.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                    return Err(Error::invalid("dirichlet parameters must be positive"));
                }
                Ok(())
            }
            DemoSampler::Finite { points, weights } => {
                if points.is_empty() || points.len() != weights.len() {
                    return Err(Error::invalid("finite demographic design is empty or ragged"));
                }
                crate::model::check_simplex("finite design weights", weights, 1e-9)?;
                for p in points {
                    expect_len("finite design point", p.len(), k)?;
                    crate::model::check_simplex("finite design point", p, 1e-9)?;
                }
                Ok(())
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            DemoSampler::Fixed(d) => d.clone(),
            DemoSampler::Dirichlet(a) => {
                let draws: Vec<f64> = a
                    .iter()
                    .map(|&shape| {
                        Gamma::new(shape, 1.0).expect("validated shape").sample(rng)
                    })
                    .collect();
                let total: f64 = draws.iter().sum();
                if total > 0.0 {
                    draws.iter().map(|x| x / total).collect()
                } else {
                    vec![1.0 / a.len() as f64; a.len()]
                }
            }
            DemoSampler::Finite { points, weights } => points[categorical(rng, weights)].clone(),
        }
    }

    fn support(&self) -> Option<Vec<(Vec<f64>, f64)>> {
        match self {
            DemoSampler::Fixed(d) => Some(vec![(d.clone(), 1.0)]),
            DemoSampler::Dirichlet(_) => None,
            DemoSampler::Finite { points, weights } => {
                Some(points.iter().cloned().zip(weights.iter().copied()).collect())
            }
        }
    }
}

fn expect_len(context: &'static str, got: usize, expected: usize) -> Result<()> {
    if got == expected {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { context, expected, got })
    }
}

/// A complete data-generating design.
#[derive(Debug, Clone)]
pub struct DgpSpec {
    pub spec: ChoiceSpec,
    /// True mean utilities, one table per (level, group) in level-major order.
    pub alpha: Vec<Vec<f64>>,
    /// True shock distribution; also the belief the true `p0` solves against.
    pub prior: Belief,
    /// One demographic sampler per level.
    pub demo: Vec<DemoSampler>,
    pub level_probs: Vec<f64>,
    pub persuasion: Option<PersuasionStrategy>,
    pub markets: usize,
    /// When set, shares are multinomial frequencies from this many voters
    /// instead of exact probabilities.
    pub voters: Option<u64>,
    pub seed: u64,
}

impl DgpSpec {
    pub fn validate(&self) -> Result<()> {
        let (j, k, l) = (self.spec.j_count(), self.spec.k_count(), self.spec.l_count());
        expect_len("alpha tables", self.alpha.len(), k * l)?;
        for a in &self.alpha {
            expect_len("alpha table", a.len(), j)?;
        }
        expect_len("prior dimension", self.prior.dim(), j)?;
        expect_len("demographic samplers", self.demo.len(), l)?;
        for sampler in &self.demo {
            sampler.validate(k)?;
        }
        crate::model::check_simplex("level probabilities", &self.level_probs, 1e-9)?;
        expect_len("level probabilities", self.level_probs.len(), l)?;
        if let Some(strategy) = &self.persuasion {
            expect_len("persuasion groups", strategy.k_count(), k)?;
        }
        if self.markets == 0 {
            return Err(Error::invalid("market count must be positive"));
        }
        if self.voters == Some(0) {
            return Err(Error::invalid("voter count must be positive when set"));
        }
        Ok(())
    }
}

/// The parameters the design implies: the given `alpha` plus the `p0` table
/// solved against the prior, cell by cell.
pub fn true_params(dgp: &DgpSpec, solver: &SolverOptions) -> Result<PreferenceParams> {
    dgp.validate()?;
    let (k, l) = (dgp.spec.k_count(), dgp.spec.l_count());
    let mut p0 = Vec::with_capacity(k * l);
    for li in 0..l {
        for ki in 0..k {
            p0.push(solve_unconditional(&dgp.prior, &dgp.alpha[li * k + ki], solver)?.p0);
        }
    }
    PreferenceParams::from_tables(&dgp.spec, &dgp.alpha, &p0)
}

/// What the econometrician never sees: the realized shock and, under
/// persuasion, the realized signal per group.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketTruth {
    pub eps: Vec<f64>,
    pub signals: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub markets: Vec<Market>,
    /// Aligned 1:1 with `markets`.
    pub truth: Vec<MarketTruth>,
    pub params: PreferenceParams,
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn market_seed(root: u64, index: usize) -> u64 {
    splitmix64(root ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

const SIGNAL_SALT: u64 = 0x5DEE_CE66_D0FF_55AA;

fn signal_name(strategy: &PersuasionStrategy, k: usize, s: usize) -> String {
    strategy
        .signal_labels(k)
        .ok()
        .and_then(|labels| labels.get(s).cloned())
        .unwrap_or_else(|| s.to_string())
}

fn categorical(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

fn multinomial_shares(rng: &mut ChaCha8Rng, probs: &[f64], voters: u64) -> Vec<f64> {
    let mut counts = vec![0u64; probs.len()];
    for _ in 0..voters {
        counts[categorical(rng, probs)] += 1;
    }
    counts.iter().map(|&c| c as f64 / voters as f64).collect()
}

/// Generates `dgp.markets` markets plus the hidden truth record.
///
/// Per market, in order: level, demographics, shock, signals, voters. The
/// signal draws use a salted side stream so that the main stream position,
/// and hence everything downstream of it, is unchanged by the presence of a
/// persuader whose signals carry no information.
pub fn simulate_markets(dgp: &DgpSpec, solver: &SolverOptions) -> Result<SimulatedData> {
    dgp.validate()?;
    let params = true_params(dgp, solver)?;
    let spec = &dgp.spec;
    let (j, k) = (spec.j_count(), spec.k_count());

    let cells: Option<Vec<Vec<PersuadedChoice>>> = match &dgp.persuasion {
        Some(strategy) => Some(
            (0..k)
                .map(|ki| {
                    (0..spec.l_count())
                        .map(|li| persuaded_choice(&dgp.prior, strategy, ki, li, &params, solver))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };

    let rows: Result<Vec<(Market, MarketTruth)>> = (0..dgp.markets)
        .into_par_iter()
        .map(|m| {
            let seed = market_seed(dgp.seed, m);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let level = categorical(&mut rng, &dgp.level_probs);
            let demo = dgp.demo[level].sample(&mut rng);
            let eps_index = categorical(&mut rng, dgp.prior.weights());
            let eps = dgp.prior.point(eps_index).to_vec();

            let mut shares = vec![0.0; j];
            let signals = match (&dgp.persuasion, &cells) {
                (Some(strategy), Some(cells)) => {
                    let mut signal_rng =
                        ChaCha8Rng::seed_from_u64(splitmix64(seed ^ SIGNAL_SALT));
                    let mut drawn = Vec::with_capacity(k);
                    for (ki, dk) in demo.iter().enumerate() {
                        let probs = signal_prob(strategy, ki, &eps)?;
                        let s = categorical(&mut signal_rng, &probs);
                        drawn.push(s);
                        let p0 = &cells[ki][level].per_signal[s]
                            .as_ref()
                            .ok_or_else(|| Error::ZeroProbabilitySignal {
                                signal: signal_name(strategy, ki, s),
                            })?
                            .p0;
                        let v = group_utility(&params, &eps, ki, level)?;
                        let ccp = conditional_choice_prob(p0, &v)?;
                        for (share, c) in shares.iter_mut().zip(&ccp) {
                            *share += dk * c;
                        }
                    }
                    Some(drawn)
                }
                _ => {
                    for (ki, dk) in demo.iter().enumerate() {
                        let v = group_utility(&params, &eps, ki, level)?;
                        let ccp = conditional_choice_prob(params.p0_slice(ki, level), &v)?;
                        for (share, c) in shares.iter_mut().zip(&ccp) {
                            *share += dk * c;
                        }
                    }
                    None
                }
            };
            if let Some(voters) = dgp.voters {
                shares = multinomial_shares(&mut rng, &shares, voters);
            }
            let market = Market::new(
                format!("m{m:06}"),
                dgp.persuasion.is_some(),
                shares,
                demo,
                level,
                spec,
            )?;
            Ok((market, MarketTruth { eps, signals }))
        })
        .collect();

    let rows = rows?;
    let (markets, truth) = rows.into_iter().unzip();
    Ok(SimulatedData { markets, truth, params })
}

fn finite_design(dgp: &DgpSpec) -> Result<Vec<(usize, Vec<f64>, f64)>> {
    let mut nodes = Vec::new();
    for (level, &pl) in dgp.level_probs.iter().enumerate() {
        if pl == 0.0 {
            continue;
        }
        let support = dgp.demo[level].support().ok_or_else(|| {
            Error::invalid("exact moments need a finite demographic design at every level")
        })?;
        for (demo, wd) in support {
            if wd > 0.0 {
                nodes.push((level, demo, pl * wd));
            }
        }
    }
    Ok(nodes)
}

/// Population stage-one moments at `params`: the expectation over the finite
/// design (levels, demographic support, shock support), with no sampling.
/// Data are generated at the design's truth; `params` is the candidate being
/// evaluated, so the result is zero (up to solver tolerance) exactly when the
/// candidate is the truth.
pub fn exact_stage1_moments(
    dgp: &DgpSpec,
    params: &PreferenceParams,
    options: &InversionOptions,
    solver: &SolverOptions,
) -> Result<MomentVector> {
    dgp.validate()?;
    if dgp.persuasion.is_some() {
        return Err(Error::invalid(
            "stage-one moments describe the unexposed regime; drop the persuader",
        ));
    }
    let truth = true_params(dgp, solver)?;
    let spec = &dgp.spec;
    let nodes = finite_design(dgp)?;

    let mut markets = Vec::with_capacity(nodes.len() * dgp.prior.len());
    let mut weights = Vec::with_capacity(markets.capacity());
    for (level, demo, w_node) in &nodes {
        for i in 0..dgp.prior.len() {
            let wi = dgp.prior.weights()[i];
            if wi == 0.0 {
                continue;
            }
            let eps = dgp.prior.point(i);
            let mut shares = vec![0.0; spec.j_count()];
            for (ki, dk) in demo.iter().enumerate() {
                let v = group_utility(&truth, eps, ki, *level)?;
                let ccp = conditional_choice_prob(truth.p0_slice(ki, *level), &v)?;
                for (share, c) in shares.iter_mut().zip(&ccp) {
                    *share += dk * c;
                }
            }
            markets.push(Market::new(
                format!("node{:04}", markets.len()),
                false,
                shares,
                demo.clone(),
                *level,
                spec,
            )?);
            weights.push(w_node * wi);
        }
    }

    let tags = stage1_tags(spec);
    let batch = invert_batch(&markets, params, options)?;
    let mut mean = vec![0.0; tags.len()];
    for ((market, result), w) in markets.iter().zip(&batch.results).zip(&weights) {
        let g = stage1_contribution(market, &result.delta, params, tags.len())?;
        for (m, x) in mean.iter_mut().zip(&g) {
            *m += w * x;
        }
    }
    MomentVector::new(mean, tags)
}

/// Population stage-two moments at the candidate `theta`, integrating the
/// signal alphabet exactly. The design's own persuader (with its true
/// parameter) generates the data side; `params` plays the stage-one estimate
/// and the design prior plays the recovered shock distribution.
pub fn exact_stage2_moments(
    dgp: &DgpSpec,
    theta: &[f64],
    params: &PreferenceParams,
    solver: &SolverOptions,
) -> Result<MomentVector> {
    dgp.validate()?;
    let strategy = dgp
        .persuasion
        .as_ref()
        .ok_or_else(|| Error::invalid("stage-two moments need a persuader in the design"))?;
    let truth = true_params(dgp, solver)?;
    let spec = &dgp.spec;
    let (j, k, l_count) = (spec.j_count(), spec.k_count(), spec.l_count());
    let nodes = finite_design(dgp)?;
    let candidate = strategy.with_theta(theta)?;

    let mut truth_cells = Vec::with_capacity(k);
    let mut h = Vec::with_capacity(k);
    for ki in 0..k {
        let mut per_level_truth = Vec::with_capacity(l_count);
        let mut per_level_h = Vec::with_capacity(l_count);
        for li in 0..l_count {
            per_level_truth.push(persuaded_choice(&dgp.prior, strategy, ki, li, &truth, solver)?);
            per_level_h
                .push(persuaded_choice(&dgp.prior, &candidate, ki, li, params, solver)?.h);
        }
        truth_cells.push(per_level_truth);
        h.push(per_level_h);
    }

    let tags = stage2_tags(spec);
    let mut mean = vec![0.0; tags.len()];
    for (level, demo, w_node) in &nodes {
        for i in 0..dgp.prior.len() {
            let wi = dgp.prior.weights()[i];
            if wi == 0.0 {
                continue;
            }
            let eps = dgp.prior.point(i);
            let mut shares = vec![0.0; j];
            for (ki, dk) in demo.iter().enumerate() {
                let probs = signal_prob(strategy, ki, eps)?;
                let cell = &truth_cells[ki][*level];
                let v = group_utility(&truth, eps, ki, *level)?;
                for (s, &pr) in probs.iter().enumerate() {
                    if pr == 0.0 {
                        continue;
                    }
                    let p0 = &cell.per_signal[s]
                        .as_ref()
                        .ok_or_else(|| Error::ZeroProbabilitySignal {
                            signal: signal_name(strategy, ki, s),
                        })?
                        .p0;
                    let ccp = conditional_choice_prob(p0, &v)?;
                    for (share, c) in shares.iter_mut().zip(&ccp) {
                        *share += dk * pr * c;
                    }
                }
            }
            let mut predicted = vec![0.0; j - 1];
            for (ki, dk) in demo.iter().enumerate() {
                for ji in 0..j - 1 {
                    predicted[ji] += h[ki][*level][ji] * dk;
                }
            }
            let w = w_node * wi;
            let mut idx = 0;
            for li in 0..l_count {
                for ki in 0..k {
                    for ji in 0..j - 1 {
                        if li == *level {
                            mean[idx] += w * (shares[ji] - predicted[ji]) * demo[ki];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
    MomentVector::new(mean, tags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::{moments_stage1, MomentCondition};
    use crate::persuasion::SignalFamily;

    fn asymmetric_dgp(markets: usize, seed: u64) -> DgpSpec {
        // J=2 instance with a two-point prior whose solved p0 is known to be
        // (0.713, 0.287) to three decimals.
        let spec = ChoiceSpec::new(2, 1, 1).unwrap();
        let prior = Belief::new(vec![vec![2.0, 0.0], vec![-1.0, 0.0]], vec![0.5, 0.5]).unwrap();
        DgpSpec {
            spec,
            alpha: vec![vec![0.0, 0.0]],
            prior,
            demo: vec![DemoSampler::Fixed(vec![1.0])],
            level_probs: vec![1.0],
            persuasion: None,
            markets,
            voters: None,
            seed,
        }
    }

    #[test]
    fn a_degenerate_prior_with_zero_alpha_yields_uniform_shares() {
        let spec = ChoiceSpec::new(3, 2, 1).unwrap();
        let dgp = DgpSpec {
            spec,
            alpha: vec![vec![0.0; 3]; 2],
            prior: Belief::new(vec![vec![0.0; 3]], vec![1.0]).unwrap(),
            demo: vec![DemoSampler::Dirichlet(vec![2.0, 3.0])],
            level_probs: vec![1.0],
            persuasion: None,
            markets: 6,
            voters: None,
            seed: 11,
        };
        let data = simulate_markets(&dgp, &SolverOptions::default()).unwrap();
        for (market, truth) in data.markets.iter().zip(&data.truth) {
            for &s in &market.shares {
                assert!((s - 1.0 / 3.0).abs() < 1e-8, "share {s}");
            }
            assert!(!market.chi);
            assert_eq!(truth.eps, vec![0.0; 3]);
            assert_eq!(truth.signals, None);
        }
    }

    #[test]
    fn mean_simulated_share_matches_the_known_p0() {
        let dgp = asymmetric_dgp(20_000, 7);
        let solver = SolverOptions::default();
        let p0 = true_params(&dgp, &solver).unwrap().p0_slice(0, 0).to_vec();
        assert!((p0[0] - 0.713).abs() < 1e-3);

        let data = simulate_markets(&dgp, &solver).unwrap();
        let mean: f64 =
            data.markets.iter().map(|m| m.shares[0]).sum::<f64>() / data.markets.len() as f64;
        assert!((mean - p0[0]).abs() < 0.01, "mean {mean} vs p0 {}", p0[0]);
    }

    #[test]
    fn an_uninformative_persuader_is_bitwise_invisible() {
        let spec = ChoiceSpec::new(2, 2, 1).unwrap();
        let prior = Belief::new(
            vec![vec![-0.8, 0.0], vec![0.2, 0.0], vec![0.9, 0.0]],
            vec![0.3, 0.4, 0.3],
        )
        .unwrap();
        let base = DgpSpec {
            spec,
            alpha: vec![vec![0.3, 0.0], vec![-0.2, 0.0]],
            prior,
            demo: vec![DemoSampler::Dirichlet(vec![2.0, 3.0])],
            level_probs: vec![1.0],
            persuasion: None,
            markets: 50,
            voters: Some(500),
            seed: 42,
        };
        let mut persuaded = base.clone();
        persuaded.persuasion =
            Some(PersuasionStrategy::shared(2, SignalFamily::College, 1.0, 0, 1).unwrap());

        let solver = SolverOptions::default();
        let plain = simulate_markets(&base, &solver).unwrap();
        let with = simulate_markets(&persuaded, &solver).unwrap();
        for (a, b) in plain.markets.iter().zip(&with.markets) {
            assert_eq!(a.shares, b.shares);
            assert_eq!(a.demo, b.demo);
            assert_eq!(a.x_level, b.x_level);
            assert!(!a.chi);
            assert!(b.chi);
        }
        for (a, b) in plain.truth.iter().zip(&with.truth) {
            assert_eq!(a.eps, b.eps);
            assert!(a.signals.is_none());
            assert_eq!(b.signals.as_ref().map(Vec::len), Some(2));
        }
    }

    #[test]
    fn seeds_reproduce_and_worker_count_does_not_matter() {
        let dgp = asymmetric_dgp(200, 3);
        let solver = SolverOptions::default();
        let a = simulate_markets(&dgp, &solver).unwrap();
        let b = simulate_markets(&dgp, &solver).unwrap();
        for (x, y) in a.markets.iter().zip(&b.markets) {
            assert_eq!(x.shares, y.shares);
        }

        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| simulate_markets(&dgp, &solver))
            .unwrap();
        let four = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| simulate_markets(&dgp, &solver))
            .unwrap();
        for (x, y) in one.markets.iter().zip(&four.markets) {
            assert_eq!(x.shares, y.shares);
            assert_eq!(x.demo, y.demo);
        }

        let mut other = dgp;
        other.seed = 4;
        let c = simulate_markets(&other, &solver).unwrap();
        assert!(a.markets.iter().zip(&c.markets).any(|(x, y)| x.shares != y.shares));
    }

    #[test]
    fn finite_voter_counts_add_noise_but_not_bias() {
        let mut dgp = asymmetric_dgp(4000, 19);
        dgp.voters = Some(200);
        let solver = SolverOptions::default();
        let p0 = true_params(&dgp, &solver).unwrap().p0_slice(0, 0).to_vec();
        let data = simulate_markets(&dgp, &solver).unwrap();
        let mean: f64 =
            data.markets.iter().map(|m| m.shares[0]).sum::<f64>() / data.markets.len() as f64;
        assert!((mean - p0[0]).abs() < 0.01);
        // Frequencies from 200 voters land on a lattice; exact probabilities don't.
        assert!(data.markets.iter().all(|m| {
            let scaled = m.shares[0] * 200.0;
            (scaled - scaled.round()).abs() < 1e-9
        }));
    }

    #[test]
    fn exact_moments_vanish_at_the_truth_and_react_to_perturbation() {
        let spec = ChoiceSpec::new(2, 2, 1).unwrap();
        let prior = Belief::new(
            vec![vec![-1.2, 0.0], vec![0.2, 0.0], vec![1.0, 0.0]],
            vec![1.0 / 3.0; 3],
        )
        .unwrap();
        let dgp = DgpSpec {
            spec: spec.clone(),
            alpha: vec![vec![0.3, 0.0], vec![-0.2, 0.0]],
            prior,
            demo: vec![DemoSampler::Finite {
                points: vec![vec![0.3, 0.7], vec![0.6, 0.4]],
                weights: vec![0.5, 0.5],
            }],
            level_probs: vec![1.0],
            persuasion: None,
            markets: 1,
            voters: None,
            seed: 0,
        };
        let solver = SolverOptions { foc_tol: 1e-12, ..SolverOptions::default() };
        let inversion = InversionOptions::default();
        let truth = true_params(&dgp, &solver).unwrap();

        let at_truth = exact_stage1_moments(&dgp, &truth, &inversion, &solver).unwrap();
        for (value, tag) in at_truth.values.iter().zip(&at_truth.tags) {
            assert!(value.abs() < 1e-10, "{tag:?} = {value}");
        }

        let mut alpha = dgp.alpha.clone();
        alpha[0][0] += 0.1;
        let perturbed = PreferenceParams::from_tables(
            &spec,
            &alpha,
            &(0..2).map(|k| truth.p0_slice(k, 0).to_vec()).collect::<Vec<_>>(),
        )
        .unwrap();
        let off = exact_stage1_moments(&dgp, &perturbed, &inversion, &solver).unwrap();
        let share_moved = off
            .values
            .iter()
            .zip(&off.tags)
            .any(|(v, t)| t.condition == MomentCondition::ShockMean && v.abs() > 1e-3);
        assert!(share_moved, "shock moments did not react: {:?}", off.values);

        let dirichlet = DgpSpec {
            demo: vec![DemoSampler::Dirichlet(vec![1.0, 1.0])],
            ..dgp.clone()
        };
        assert!(exact_stage1_moments(&dirichlet, &truth, &inversion, &solver).is_err());
    }

    #[test]
    fn exact_oracle_matches_sample_moments_within_monte_carlo_error() {
        let mut dgp = asymmetric_dgp(100_000, 31);
        dgp.alpha = vec![vec![0.2, 0.0]];
        let solver = SolverOptions::default();
        let inversion = InversionOptions::default();
        let truth = true_params(&dgp, &solver).unwrap();

        // Evaluate away from the truth so every block is active.
        let mut alpha = dgp.alpha.clone();
        alpha[0][0] -= 0.05;
        let candidate = PreferenceParams::from_tables(
            &dgp.spec,
            &alpha,
            &[truth.p0_slice(0, 0).to_vec()],
        )
        .unwrap();

        let exact = exact_stage1_moments(&dgp, &candidate, &inversion, &solver).unwrap();
        let data = simulate_markets(&dgp, &solver).unwrap();
        let sample = moments_stage1(&data.markets, &candidate, &inversion).unwrap();

        let m = data.markets.len() as f64;
        for (i, (s, e)) in sample.mean.values.iter().zip(&exact.values).enumerate() {
            let var: f64 = sample
                .per_market
                .iter()
                .map(|row| (row[i] - s) * (row[i] - s))
                .sum::<f64>()
                / m;
            let se = (var / m).sqrt();
            assert!(
                (s - e).abs() <= 3.0 * se + 1e-12,
                "coordinate {i}: sample {s}, exact {e}, se {se}"
            );
        }
    }

    #[test]
    fn exact_stage2_moments_are_zero_at_the_true_theta_only() {
        let spec = ChoiceSpec::new(2, 1, 1).unwrap();
        let prior = Belief::new(
            vec![vec![-1.5, 0.0], vec![-0.5, 0.0], vec![0.5, 0.0], vec![1.5, 0.0]],
            vec![0.25; 4],
        )
        .unwrap();
        let dgp = DgpSpec {
            spec,
            alpha: vec![vec![0.2, 0.0]],
            prior,
            demo: vec![DemoSampler::Fixed(vec![1.0])],
            level_probs: vec![1.0],
            persuasion: Some(
                PersuasionStrategy::shared(1, SignalFamily::College, 0.85, 0, 1).unwrap(),
            ),
            markets: 1,
            voters: None,
            seed: 0,
        };
        let solver = SolverOptions { foc_tol: 1e-13, ..SolverOptions::default() };
        let truth = true_params(&dgp, &solver).unwrap();

        let at_truth = exact_stage2_moments(&dgp, &[0.85], &truth, &solver).unwrap();
        for value in &at_truth.values {
            assert!(value.abs() < 1e-10, "stage-two moment {value} at truth");
        }
        let off = exact_stage2_moments(&dgp, &[0.5], &truth, &solver).unwrap();
        assert!(off.values.iter().any(|v| v.abs() > 1e-4));
    }

    #[test]
    fn bad_designs_are_rejected() {
        let good = asymmetric_dgp(10, 0);

        let mut bad = good.clone();
        bad.level_probs = vec![0.7];
        assert!(simulate_markets(&bad, &SolverOptions::default()).is_err());

        let mut bad = good.clone();
        bad.demo = vec![DemoSampler::Fixed(vec![0.5, 0.5])];
        assert!(bad.validate().is_err());

        let mut bad = good.clone();
        bad.demo = vec![DemoSampler::Dirichlet(vec![0.0])];
        assert!(bad.validate().is_err());

        let mut bad = good.clone();
        bad.markets = 0;
        assert!(bad.validate().is_err());

        let mut bad = good.clone();
        bad.voters = Some(0);
        assert!(bad.validate().is_err());

        let mut bad = good;
        bad.persuasion =
            Some(PersuasionStrategy::shared(2, SignalFamily::HighSchool, 0.5, 0, 1).unwrap());
        assert!(bad.validate().is_err());
    }
}
