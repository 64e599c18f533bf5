//! Signal strategies and their effect on choice.
//!
//! A persuader commits to a distribution of a signal conditional on the shock
//! vector, separately for each demographic group. Receivers see their group's
//! signal, update the common prior by Bayes' rule, and then solve the
//! attention problem against the posterior. Choice behavior under persuasion
//! is therefore a signal-probability mixture of per-signal solutions.
//!
//! Two built-in one-parameter families cover the empirical designs this crate
//! ships with; both emit a binary signal and compare the shocks of two
//! designated options (`rep` vs `dem`), with `theta` in `(0, 1]` controlling
//! how fast informativeness decays in the shock gap:
//!
//! * [`SignalFamily::HighSchool`]: `Pr(- | eps) = 1` when `eps_rep < eps_dem`,
//!   otherwise `theta^{(eps_rep - eps_dem)^2}`. At `theta = 1` the signal is
//!   constantly `-`.
//! * [`SignalFamily::College`]: `Pr(- | eps) = 0` when `eps_rep > eps_dem`,
//!   otherwise `1 - theta^{(eps_rep - eps_dem)^2}`. At `theta = 1` the signal
//!   is constantly `+`.
//!
//! Custom families with any finite alphabet plug in through
//! [`SignalFamily::Custom`].

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{Belief, PreferenceParams};
use crate::ri::{self, RISolution, SolverOptions};

/// Signal labels used by the built-in binary families; index 0 is `+`.
pub const BINARY_SIGNALS: [&str; 2] = ["+", "-"];

/// A theta-parameterized likelihood with an arbitrary finite signal alphabet.
pub struct CustomFamily {
    pub name: String,
    pub signals: Vec<String>,
    /// Maps (theta vector, shock vector) to per-signal probabilities, which
    /// must form a simplex of the alphabet's size.
    pub likelihood: Box<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>,
}

#[derive(Clone)]
pub enum SignalFamily {
    HighSchool,
    College,
    Custom(Arc<CustomFamily>),
}

impl fmt::Debug for SignalFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SignalFamily::HighSchool => f.write_str("HighSchool"),
            SignalFamily::College => f.write_str("College"),
            SignalFamily::Custom(c) => {
                f.debug_struct("Custom").field("name", &c.name).finish_non_exhaustive()
            }
        }
    }
}

impl SignalFamily {
    pub fn signal_count(&self) -> usize {
        match self {
            SignalFamily::HighSchool | SignalFamily::College => 2,
            SignalFamily::Custom(c) => c.signals.len(),
        }
    }

    pub fn signal_labels(&self) -> Vec<String> {
        match self {
            SignalFamily::HighSchool | SignalFamily::College => {
                BINARY_SIGNALS.iter().map(|s| s.to_string()).collect()
            }
            SignalFamily::Custom(c) => c.signals.clone(),
        }
    }

    fn check_theta(&self, theta: f64) -> Result<()> {
        match self {
            SignalFamily::HighSchool | SignalFamily::College => {
                if !(theta > 0.0 && theta <= 1.0) {
                    return Err(Error::invalid(format!(
                        "signal family parameter {theta} outside (0, 1]"
                    )));
                }
                Ok(())
            }
            SignalFamily::Custom(_) => {
                if !theta.is_finite() {
                    return Err(Error::invalid("signal family parameter is not finite"));
                }
                Ok(())
            }
        }
    }
}

/// One demographic group's slice of the persuasion strategy.
#[derive(Debug, Clone)]
pub struct GroupStrategy {
    pub family: SignalFamily,
    /// Which entry of the strategy's theta vector this group reads. Groups
    /// sharing an entry share the parameter.
    pub theta_index: usize,
    /// Option indices whose shocks the built-in families compare.
    pub rep: usize,
    pub dem: usize,
}

/// The persuader's committed signal distributions, one per demographic group,
/// over a shared parameter vector.
#[derive(Debug, Clone)]
pub struct PersuasionStrategy {
    groups: Vec<GroupStrategy>,
    theta: Vec<f64>,
}

impl PersuasionStrategy {
    pub fn new(groups: Vec<GroupStrategy>, theta: Vec<f64>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::invalid("persuasion strategy needs at least one group"));
        }
        for (k, g) in groups.iter().enumerate() {
            if g.theta_index >= theta.len() {
                return Err(Error::invalid(format!(
                    "group {k} reads theta entry {} but only {} are provided",
                    g.theta_index,
                    theta.len()
                )));
            }
            g.family.check_theta(theta[g.theta_index])?;
        }
        Ok(PersuasionStrategy { groups, theta })
    }

    /// Every group gets the same family instance and one shared parameter.
    pub fn shared(
        k_count: usize,
        family: SignalFamily,
        theta: f64,
        rep: usize,
        dem: usize,
    ) -> Result<Self> {
        let groups = (0..k_count)
            .map(|_| GroupStrategy { family: family.clone(), theta_index: 0, rep, dem })
            .collect();
        Self::new(groups, vec![theta])
    }

    /// Same group structure, new parameter vector.
    pub fn with_theta(&self, theta: &[f64]) -> Result<Self> {
        if theta.len() != self.theta.len() {
            return Err(Error::DimensionMismatch {
                context: "strategy theta",
                expected: self.theta.len(),
                got: theta.len(),
            });
        }
        Self::new(self.groups.clone(), theta.to_vec())
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn k_count(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, k: usize) -> Result<&GroupStrategy> {
        self.groups.get(k).ok_or_else(|| {
            Error::invalid(format!("group index {k} out of range ({} groups)", self.groups.len()))
        })
    }

    pub fn signal_count(&self, k: usize) -> Result<usize> {
        Ok(self.group(k)?.family.signal_count())
    }

    pub fn signal_labels(&self, k: usize) -> Result<Vec<String>> {
        Ok(self.group(k)?.family.signal_labels())
    }
}

/// Per-signal probabilities for group `k` at a realized shock vector.
///
/// Branch boundaries are exact: when the compared shocks tie, both built-in
/// families take their second branch, where the exponent is zero.
pub fn signal_prob(strategy: &PersuasionStrategy, k: usize, eps: &[f64]) -> Result<Vec<f64>> {
    let g = strategy.group(k)?;
    let theta = strategy.theta[g.theta_index];
    match &g.family {
        SignalFamily::HighSchool | SignalFamily::College => {
            if g.rep >= eps.len() || g.dem >= eps.len() {
                return Err(Error::invalid(format!(
                    "strategy compares options {} and {} but shocks have length {}",
                    g.rep,
                    g.dem,
                    eps.len()
                )));
            }
            let gap = eps[g.rep] - eps[g.dem];
            let minus = match g.family {
                SignalFamily::HighSchool => {
                    if gap < 0.0 {
                        1.0
                    } else {
                        theta.powf(gap * gap)
                    }
                }
                SignalFamily::College => {
                    if gap > 0.0 {
                        0.0
                    } else {
                        1.0 - theta.powf(gap * gap)
                    }
                }
                SignalFamily::Custom(_) => unreachable!(),
            };
            Ok(vec![1.0 - minus, minus])
        }
        SignalFamily::Custom(c) => {
            let probs = (c.likelihood)(&strategy.theta, eps);
            if probs.len() != c.signals.len() {
                return Err(Error::invalid(format!(
                    "custom family {} returned {} probabilities for {} signals",
                    c.name,
                    probs.len(),
                    c.signals.len()
                )));
            }
            crate::model::check_simplex(&format!("custom family {} likelihood", c.name), &probs, 1e-9)?;
            Ok(probs)
        }
    }
}

/// Marginal signal distribution for group `k`: the prior-weighted mean of the
/// per-shock signal probabilities.
pub fn signal_marginal(
    prior: &Belief,
    strategy: &PersuasionStrategy,
    k: usize,
) -> Result<Vec<f64>> {
    let n = strategy.signal_count(k)?;
    let mut marginal = vec![0.0; n];
    for (i, &w) in prior.weights().iter().enumerate() {
        let probs = signal_prob(strategy, k, prior.point(i))?;
        for (m, p) in marginal.iter_mut().zip(&probs) {
            *m += w * p;
        }
    }
    Ok(marginal)
}

/// True when observing signal `s` would not move group `k`'s belief: the
/// likelihood of `s` is constant and positive across the prior's support.
/// Downstream code can then reuse baseline quantities verbatim instead of
/// re-deriving them from an update that is the identity.
pub fn signal_is_uninformative(
    prior: &Belief,
    strategy: &PersuasionStrategy,
    k: usize,
    s: usize,
) -> Result<bool> {
    let n = strategy.signal_count(k)?;
    if s >= n {
        return Err(Error::invalid(format!("signal index {s} out of range ({n} signals)")));
    }
    let first = signal_prob(strategy, k, prior.point(0))?[s];
    if first <= 0.0 {
        return Ok(false);
    }
    for i in 1..prior.len() {
        if signal_prob(strategy, k, prior.point(i))?[s] != first {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Bayesian update of the prior after group `k` observes signal `s`.
///
/// A likelihood that is constant across the support leaves the belief
/// untouched, weight for weight; the update is skipped entirely rather than
/// multiplied through, so downstream solves see bitwise-identical inputs.
pub fn posterior_belief(
    prior: &Belief,
    strategy: &PersuasionStrategy,
    k: usize,
    s: usize,
) -> Result<Belief> {
    let n = strategy.signal_count(k)?;
    if s >= n {
        return Err(Error::invalid(format!("signal index {s} out of range ({n} signals)")));
    }
    let mut likelihood = Vec::with_capacity(prior.len());
    for i in 0..prior.len() {
        let probs = signal_prob(strategy, k, prior.point(i))?;
        likelihood.push(probs[s]);
    }

    let flat = likelihood.windows(2).all(|w| w[0] == w[1]);
    if flat && likelihood[0] > 0.0 {
        return Ok(prior.clone());
    }

    let mut marginal = 0.0;
    for (w, li) in prior.weights().iter().zip(&likelihood) {
        marginal += w * li;
    }
    if marginal <= 0.0 {
        return Err(Error::ZeroProbabilitySignal {
            signal: strategy.signal_labels(k)?[s].clone(),
        });
    }
    let weights: Vec<f64> = prior
        .weights()
        .iter()
        .zip(&likelihood)
        .map(|(w, li)| w * li / marginal)
        .collect();
    prior.reweighted(weights)
}

/// Unconditional choice probabilities of group `k` at level `l` after
/// observing signal `s`: the attention problem solved against the posterior.
pub fn conditional_p0_given_signal(
    prior: &Belief,
    strategy: &PersuasionStrategy,
    k: usize,
    l: usize,
    s: usize,
    params: &PreferenceParams,
    options: &SolverOptions,
) -> Result<Vec<f64>> {
    let posterior = posterior_belief(prior, strategy, k, s)?;
    let sol = ri::solve_unconditional(&posterior, params.alpha_slice(k, l), options)?;
    Ok(sol.p0)
}

/// Everything choice-relevant about one (group, level) cell under persuasion:
/// the signal marginal, the per-signal solutions, and their mixture `h`.
/// Solving this once and reusing it across markets is what keeps estimation
/// and welfare loops cheap.
#[derive(Debug, Clone)]
pub struct PersuadedChoice {
    pub marginal: Vec<f64>,
    /// `None` for signals the prior rules out (marginal probability zero).
    pub per_signal: Vec<Option<RISolution>>,
    /// `h_j = sum_s marginal(s) * p0_s[j]`.
    pub h: Vec<f64>,
}

/// Solves the per-signal problems for group `k` at level `l`.
///
/// Signals with zero marginal probability are dropped from the mixture with a
/// warning; they contribute nothing to the integral that defines `h`.
pub fn persuaded_choice(
    prior: &Belief,
    strategy: &PersuasionStrategy,
    k: usize,
    l: usize,
    params: &PreferenceParams,
    options: &SolverOptions,
) -> Result<PersuadedChoice> {
    let marginal = signal_marginal(prior, strategy, k)?;
    let j = params.spec().j_count();
    let mut per_signal = Vec::with_capacity(marginal.len());
    let mut h = vec![0.0; j];
    for (s, &ms) in marginal.iter().enumerate() {
        if ms <= 0.0 {
            log::warn!(
                "signal {} has zero marginal probability for group {k}, dropped from the mixture",
                strategy.signal_labels(k)?[s]
            );
            per_signal.push(None);
            continue;
        }
        let posterior = posterior_belief(prior, strategy, k, s)?;
        let sol = ri::solve_unconditional(&posterior, params.alpha_slice(k, l), options)?;
        for (hj, pj) in h.iter_mut().zip(&sol.p0) {
            *hj += ms * pj;
        }
        per_signal.push(Some(sol));
    }
    Ok(PersuadedChoice { marginal, per_signal, h })
}

/// Integrated choice probability for group `k` at level `l`: the signal
/// marginal mixed over the per-signal solutions.
pub fn integrated_choice_prob_h(
    prior: &Belief,
    strategy: &PersuasionStrategy,
    k: usize,
    l: usize,
    params: &PreferenceParams,
    options: &SolverOptions,
) -> Result<Vec<f64>> {
    Ok(persuaded_choice(prior, strategy, k, l, params, options)?.h)
}

/// Conditional choice probabilities at a realized shock, one entry per
/// signal: the logit reweighting of the per-signal `p0` at the realized
/// utilities. `None` marks signals the prior rules out.
pub fn conditional_choice_prob_with_persuasion(
    prior: &Belief,
    strategy: &PersuasionStrategy,
    k: usize,
    l: usize,
    eps: &[f64],
    params: &PreferenceParams,
    options: &SolverOptions,
) -> Result<Vec<Option<Vec<f64>>>> {
    let cell = persuaded_choice(prior, strategy, k, l, params, options)?;
    let v = crate::model::group_utility(params, eps, k, l)?;
    cell.per_signal
        .iter()
        .map(|entry| {
            entry
                .as_ref()
                .map(|sol| ri::conditional_choice_prob(&sol.p0, &v))
                .transpose()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ChoiceSpec;
    use proptest::prelude::*;

    fn two_option_params(alpha1: f64) -> PreferenceParams {
        let spec = ChoiceSpec::new(2, 1, 1).unwrap();
        PreferenceParams::from_tables(&spec, &[vec![alpha1, 0.0]], &[vec![0.5, 0.5]]).unwrap()
    }

    fn gap_prior(gaps: &[f64], weights: &[f64]) -> Belief {
        // J = 2 prior where the first component carries the rep-dem gap.
        let points = gaps.iter().map(|&g| vec![g, 0.0]).collect();
        Belief::new(points, weights.to_vec()).unwrap()
    }

    fn hs(theta: f64) -> PersuasionStrategy {
        PersuasionStrategy::shared(1, SignalFamily::HighSchool, theta, 0, 1).unwrap()
    }

    fn college(theta: f64) -> PersuasionStrategy {
        PersuasionStrategy::shared(1, SignalFamily::College, theta, 0, 1).unwrap()
    }

    const PLUS: usize = 0;
    const MINUS: usize = 1;

    #[test]
    fn built_in_families_at_reference_points() {
        let s = hs(0.5);
        // Gap of one: exponent one, so Pr(-) = theta.
        let p = signal_prob(&s, 0, &[1.0, 0.0]).unwrap();
        assert_eq!(p[MINUS], 0.5);
        assert_eq!(p[PLUS], 0.5);
        // Tied shocks sit on the second branch with exponent zero.
        let tied = signal_prob(&s, 0, &[0.0, 0.0]).unwrap();
        assert_eq!(tied[MINUS], 1.0);
        // Negative gap takes the sure branch.
        let neg = signal_prob(&s, 0, &[-0.3, 0.0]).unwrap();
        assert_eq!(neg[MINUS], 1.0);

        // College at theta = 1 is constantly '+'.
        let c = college(1.0);
        for gap in [-2.0, -0.5, 0.0, 0.5, 2.0] {
            let p = signal_prob(&c, 0, &[gap, 0.0]).unwrap();
            assert_eq!(p, vec![1.0, 0.0]);
        }
        // High school at theta = 1 is constantly '-'.
        let h1 = hs(1.0);
        for gap in [-2.0, 0.0, 2.0] {
            let p = signal_prob(&h1, 0, &[gap, 0.0]).unwrap();
            assert_eq!(p, vec![0.0, 1.0]);
        }
    }

    #[test]
    fn theta_domain_is_enforced() {
        for bad in [0.0, -0.1, 1.2, f64::NAN] {
            assert!(PersuasionStrategy::shared(1, SignalFamily::College, bad, 0, 1).is_err());
        }
        let ok = college(0.5);
        assert!(ok.with_theta(&[0.0]).is_err());
        assert!(ok.with_theta(&[0.7]).is_ok());
        assert!(ok.with_theta(&[0.7, 0.5]).is_err());
    }

    #[test]
    fn two_point_bayes_update() {
        // Pr(-|gap=-1) = 1, Pr(-|gap=1) = 0.5 under hs(0.5): the posterior
        // after '-' puts 2/3 on the negative-gap point.
        let prior = gap_prior(&[-1.0, 1.0], &[0.5, 0.5]);
        let s = hs(0.5);
        let post = posterior_belief(&prior, &s, 0, MINUS).unwrap();
        assert!((post.weights()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((post.weights()[1] - 1.0 / 3.0).abs() < 1e-15);

        let marg = signal_marginal(&prior, &s, 0).unwrap();
        assert!((marg[MINUS] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn constant_signal_keeps_the_prior_bitwise_and_the_dead_signal_errors() {
        let prior = gap_prior(&[-1.0, 1.0], &[0.5, 0.5]);
        let c = college(1.0);
        let post = posterior_belief(&prior, &c, 0, PLUS).unwrap();
        assert_eq!(post.weights(), prior.weights());
        assert_eq!(post.point(0), prior.point(0));

        let dead = posterior_belief(&prior, &c, 0, MINUS);
        assert!(matches!(dead, Err(Error::ZeroProbabilitySignal { .. })));

        assert!(signal_is_uninformative(&prior, &c, 0, PLUS).unwrap());
        // Flat at zero is dead, not uninformative.
        assert!(!signal_is_uninformative(&prior, &c, 0, MINUS).unwrap());
        // An informative family is flat for neither signal.
        let s = hs(0.5);
        assert!(!signal_is_uninformative(&prior, &s, 0, PLUS).unwrap());
        assert!(!signal_is_uninformative(&prior, &s, 0, MINUS).unwrap());
    }

    #[test]
    fn law_of_total_probability_recovers_the_prior() {
        let prior = gap_prior(&[-1.5, -0.2, 0.4, 1.1], &[0.3, 0.2, 0.1, 0.4]);
        let s = college(0.6);
        let marg = signal_marginal(&prior, &s, 0).unwrap();
        let mut mixed = vec![0.0; prior.len()];
        for sig in 0..2 {
            if marg[sig] <= 0.0 {
                continue;
            }
            let post = posterior_belief(&prior, &s, 0, sig).unwrap();
            for (m, w) in mixed.iter_mut().zip(post.weights()) {
                *m += marg[sig] * w;
            }
        }
        for (m, w) in mixed.iter().zip(prior.weights()) {
            assert!((m - w).abs() < 1e-12);
        }
    }

    #[test]
    fn uninformative_strategy_reproduces_the_baseline_p0() {
        let prior = gap_prior(&[-1.0, 0.5, 1.5], &[0.25, 0.4, 0.35]);
        let params = two_option_params(0.3);
        let opts = SolverOptions::default();
        let baseline = ri::solve_unconditional(&prior, params.alpha_slice(0, 0), &opts)
            .unwrap()
            .p0;

        let c = college(1.0);
        let p0_plus =
            conditional_p0_given_signal(&prior, &c, 0, 0, PLUS, &params, &opts).unwrap();
        assert_eq!(p0_plus, baseline);

        let h = integrated_choice_prob_h(&prior, &c, 0, 0, &params, &opts).unwrap();
        assert_eq!(h, baseline);
    }

    #[test]
    fn fully_revealing_signals_give_degenerate_per_signal_solutions() {
        // Custom family that announces the sign of the gap outright.
        let family = SignalFamily::Custom(Arc::new(CustomFamily {
            name: "reveal".into(),
            signals: vec!["neg".into(), "pos".into()],
            likelihood: Box::new(|_, eps| {
                if eps[0] < 0.0 {
                    vec![1.0, 0.0]
                } else {
                    vec![0.0, 1.0]
                }
            }),
        }));
        let s = PersuasionStrategy::shared(1, family, 0.5, 0, 1).unwrap();
        let prior = gap_prior(&[-2.0, 1.0], &[0.5, 0.5]);
        let params = two_option_params(0.0);
        let opts = SolverOptions::default();

        // Signal "neg" reveals gap -2: the outside option wins outright.
        let p_neg = conditional_p0_given_signal(&prior, &s, 0, 0, 0, &params, &opts).unwrap();
        assert_eq!(p_neg, vec![0.0, 1.0]);
        // Signal "pos" reveals gap +1: the first option wins.
        let p_pos = conditional_p0_given_signal(&prior, &s, 0, 0, 1, &params, &opts).unwrap();
        assert_eq!(p_pos, vec![1.0, 0.0]);
    }

    #[test]
    fn partially_revealing_signal_matches_a_grid_search_oracle() {
        // Likelihoods (1, 0.5) for the '-' signal on a prior over utility
        // gaps {2, -1}: the posterior is (2/3, 1/3). The solve is checked
        // against a 1-D grid search on the reweighted objective.
        let family = SignalFamily::Custom(Arc::new(CustomFamily {
            name: "partial".into(),
            signals: vec!["+".into(), "-".into()],
            likelihood: Box::new(|_, eps| {
                if eps[0] > 0.0 {
                    vec![0.0, 1.0]
                } else {
                    vec![0.5, 0.5]
                }
            }),
        }));
        let s = PersuasionStrategy::shared(1, family, 0.5, 0, 1).unwrap();
        let prior = gap_prior(&[2.0, -1.0], &[0.5, 0.5]);
        let params = two_option_params(0.0);
        let p0 = conditional_p0_given_signal(
            &prior,
            &s,
            0,
            0,
            MINUS,
            &params,
            &SolverOptions::default(),
        )
        .unwrap();

        let e2 = 2.0f64.exp();
        let em1 = (-1.0f64).exp();
        let obj = |p: f64| {
            (2.0 / 3.0) * (p * e2 + (1.0 - p)).ln() + (1.0 / 3.0) * (p * em1 + (1.0 - p)).ln()
        };
        let mut best = (0.0, f64::NEG_INFINITY);
        for i in 0..=1_000_000 {
            let p = i as f64 * 1e-6;
            let f = obj(p);
            if f > best.1 {
                best = (p, f);
            }
        }
        assert!((p0[0] - best.0).abs() < 1e-4, "solver {} vs grid {}", p0[0], best.0);
    }

    #[test]
    fn h_is_the_hand_computed_mixture_on_a_two_point_prior() {
        let prior = gap_prior(&[-1.0, 1.0], &[0.5, 0.5]);
        let s = hs(0.5);
        let params = two_option_params(0.0);
        let opts = SolverOptions::default();

        let marg = signal_marginal(&prior, &s, 0).unwrap();
        let p_plus = conditional_p0_given_signal(&prior, &s, 0, 0, PLUS, &params, &opts).unwrap();
        let p_minus =
            conditional_p0_given_signal(&prior, &s, 0, 0, MINUS, &params, &opts).unwrap();
        let h = integrated_choice_prob_h(&prior, &s, 0, 0, &params, &opts).unwrap();
        for j in 0..2 {
            let by_hand = marg[PLUS] * p_plus[j] + marg[MINUS] * p_minus[j];
            assert!((h[j] - by_hand).abs() < 1e-15);
        }
        let total: f64 = h.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relabeling_the_signals_leaves_h_unchanged() {
        let theta = 0.7;
        let college_strategy = college(theta);
        // Same joint distribution with the two signals swapped.
        let swapped = SignalFamily::Custom(Arc::new(CustomFamily {
            name: "college-swapped".into(),
            signals: vec!["-".into(), "+".into()],
            likelihood: Box::new(|th, eps| {
                let gap = eps[0] - eps[1];
                let minus = if gap > 0.0 { 0.0 } else { 1.0 - th[0].powf(gap * gap) };
                vec![minus, 1.0 - minus]
            }),
        }));
        let swapped_strategy = PersuasionStrategy::shared(1, swapped, theta, 0, 1).unwrap();

        let prior = gap_prior(&[-1.2, -0.1, 0.8], &[0.3, 0.45, 0.25]);
        let params = two_option_params(0.2);
        let opts = SolverOptions::default();
        let h_a = integrated_choice_prob_h(&prior, &college_strategy, 0, 0, &params, &opts)
            .unwrap();
        let h_b = integrated_choice_prob_h(&prior, &swapped_strategy, 0, 0, &params, &opts)
            .unwrap();
        for (a, b) in h_a.iter().zip(&h_b) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn free_information_cannot_hurt_the_attained_value() {
        let prior = gap_prior(&[-1.5, -0.4, 0.3, 1.2], &[0.2, 0.3, 0.3, 0.2]);
        let params = two_option_params(0.1);
        let opts = SolverOptions::default();
        let baseline = ri::solve_unconditional(&prior, params.alpha_slice(0, 0), &opts)
            .unwrap()
            .objective;

        for theta in [0.2, 0.5, 0.8, 0.95] {
            let s = college(theta);
            let cell = persuaded_choice(&prior, &s, 0, 0, &params, &opts).unwrap();
            let attained: f64 = cell
                .marginal
                .iter()
                .zip(&cell.per_signal)
                .filter_map(|(m, sol)| sol.as_ref().map(|sol| m * sol.objective))
                .sum();
            assert!(
                attained >= baseline - 1e-9,
                "theta {theta}: attained {attained} below baseline {baseline}"
            );
        }
    }

    #[test]
    fn h_moves_smoothly_in_theta() {
        let prior = gap_prior(&[-1.0, -0.3, 0.6, 1.4], &[0.25, 0.25, 0.25, 0.25]);
        let params = two_option_params(0.0);
        let opts = SolverOptions::default();
        let h_at = |theta: f64| {
            integrated_choice_prob_h(&prior, &college(theta), 0, 0, &params, &opts).unwrap()[0]
        };
        for theta in [0.3, 0.5, 0.7, 0.9] {
            let d1 = 1e-3;
            let d2 = 5e-4;
            let q1 = (h_at(theta + d1) - h_at(theta)) / d1;
            let q2 = (h_at(theta + d2) - h_at(theta)) / d2;
            assert!(q1.abs() < 10.0, "difference quotient blew up at {theta}: {q1}");
            // Halving the step should not move the quotient much if h is C1.
            assert!((q1 - q2).abs() < 0.05 * (1.0 + q1.abs()), "unstable at {theta}: {q1} vs {q2}");
        }
    }

    #[test]
    fn per_signal_conditional_probabilities_follow_the_logit_form() {
        let prior = gap_prior(&[-1.0, 1.0], &[0.5, 0.5]);
        let s = hs(0.5);
        let params = two_option_params(0.0);
        let opts = SolverOptions::default();
        let eps = [1.0, 0.0];
        let per_signal =
            conditional_choice_prob_with_persuasion(&prior, &s, 0, 0, &eps, &params, &opts)
                .unwrap();
        let cell = persuaded_choice(&prior, &s, 0, 0, &params, &opts).unwrap();
        for (sig, entry) in per_signal.iter().enumerate() {
            let ccp = entry.as_ref().expect("both signals occur under hs(0.5)");
            let p0 = &cell.per_signal[sig].as_ref().unwrap().p0;
            let direct = ri::conditional_choice_prob(p0, &[1.0, 0.0]).unwrap();
            assert_eq!(ccp, &direct);
            let sum: f64 = ccp.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Signal probabilities form a simplex and Bayes mixing returns the
        /// prior for any built-in family and interior theta.
        #[test]
        fn bayes_mixing_is_consistent(
            theta in 0.05f64..1.0,
            g1 in -2.0f64..2.0,
            g2 in -2.0f64..2.0,
            w in 0.05f64..0.95,
            hs_family in proptest::bool::ANY,
        ) {
            let strategy = if hs_family { hs(theta) } else { college(theta) };
            let prior = gap_prior(&[g1, g2], &[w, 1.0 - w]);
            let probs = signal_prob(&strategy, 0, prior.point(0)).unwrap();
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(probs.iter().all(|&p| (0.0..=1.0).contains(&p)));

            let marg = signal_marginal(&prior, &strategy, 0).unwrap();
            let mut mixed = vec![0.0; 2];
            for s in 0..2 {
                if marg[s] > 0.0 {
                    let post = posterior_belief(&prior, &strategy, 0, s).unwrap();
                    for (m, pw) in mixed.iter_mut().zip(post.weights()) {
                        *m += marg[s] * pw;
                    }
                }
            }
            for (m, pw) in mixed.iter().zip(prior.weights()) {
                prop_assert!((m - pw).abs() < 1e-12);
            }
        }

        /// h stays in the simplex across theta.
        #[test]
        fn h_stays_in_the_simplex(theta in 0.05f64..=1.0) {
            let prior = gap_prior(&[-0.8, 0.2, 1.0], &[0.4, 0.3, 0.3]);
            let params = two_option_params(0.15);
            let h = integrated_choice_prob_h(
                &prior, &college(theta), 0, 0, &params, &SolverOptions::default(),
            ).unwrap();
            prop_assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            prop_assert!(h.iter().all(|&x| (0.0..=1.0 + 1e-12).contains(&x)));
        }
    }
}
