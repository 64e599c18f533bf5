//! First-best achievement: how often decision makers pick the option they
//! would choose under full information.
//!
//! For a realized shock vector the first-best option maximizes `alpha_j +
//! eps_j`. A decision maker with limited attention picks it only with the
//! probability the conditional choice rule assigns to it, and a persuader's
//! signal shifts that probability by moving the belief the attention problem
//! is solved against. Mapping the achievement probability over a sample of
//! shock vectors gives the distributions these tools summarize.

use crate::error::{Error, Result};
use crate::model::{group_utility, Belief, PreferenceParams};
use crate::persuasion::{
    posterior_belief, signal_is_uninformative, signal_marginal, signal_prob, PersuasionStrategy,
};
use crate::ri::{self, SolverOptions};

/// Bin count for achievement histograms; bins split `[0, 1]` evenly.
pub const ACHIEVEMENT_BINS: usize = 30;

/// Index of the option that maximizes `alpha_j + eps_j`. Ties go to the
/// lowest index.
pub fn first_best_choice(alpha: &[f64], eps: &[f64]) -> Result<usize> {
    if alpha.len() != eps.len() {
        return Err(Error::DimensionMismatch {
            context: "first-best utilities",
            expected: alpha.len(),
            got: eps.len(),
        });
    }
    if alpha.is_empty() {
        return Err(Error::invalid("first-best choice over zero options"));
    }
    let mut best = 0;
    let mut best_u = f64::NEG_INFINITY;
    for (j, (a, e)) in alpha.iter().zip(eps).enumerate() {
        let u = a + e;
        if !u.is_finite() {
            return Err(Error::numeric(format!("utility of option {j} is {u}")));
        }
        if u > best_u {
            best = j;
            best_u = u;
        }
    }
    Ok(best)
}

/// Probability that group `k` at level `l` picks its first-best option at the
/// realized shocks, with no persuasion: the conditional choice probability of
/// the first-best entry.
pub fn achievement_prob(
    eps: &[f64],
    k: usize,
    l: usize,
    params: &PreferenceParams,
) -> Result<f64> {
    let jfb = first_best_choice(params.alpha_slice(k, l), eps)?;
    let v = group_utility(params, eps, k, l)?;
    let ccp = ri::conditional_choice_prob(params.p0_slice(k, l), &v)?;
    Ok(ccp[jfb])
}

/// Per-signal unconditional choice probabilities for one `(k, l)` cell.
/// `None` marks signals the prior rules out. Uninformative signals carry the
/// baseline `p0` verbatim, so a constant signal reproduces the no-persuasion
/// numbers bit for bit whatever the supplied `p0` is.
fn per_signal_p0(
    prior: &Belief,
    strategy: &PersuasionStrategy,
    k: usize,
    l: usize,
    params: &PreferenceParams,
    options: &SolverOptions,
) -> Result<Vec<Option<Vec<f64>>>> {
    let marginal = signal_marginal(prior, strategy, k)?;
    let mut cell = Vec::with_capacity(marginal.len());
    for (s, &m) in marginal.iter().enumerate() {
        if m <= 0.0 {
            cell.push(None);
            continue;
        }
        let p0 = if signal_is_uninformative(prior, strategy, k, s)? {
            params.p0_slice(k, l).to_vec()
        } else {
            let posterior = posterior_belief(prior, strategy, k, s)?;
            ri::solve_unconditional(&posterior, params.alpha_slice(k, l), options)?.p0
        };
        cell.push(Some(p0));
    }
    Ok(cell)
}

fn mixed_achievement(
    eps: &[f64],
    k: usize,
    l: usize,
    params: &PreferenceParams,
    strategy: &PersuasionStrategy,
    cell: &[Option<Vec<f64>>],
) -> Result<f64> {
    let jfb = first_best_choice(params.alpha_slice(k, l), eps)?;
    let v = group_utility(params, eps, k, l)?;
    let probs = signal_prob(strategy, k, eps)?;
    let mut total = 0.0;
    for (s, &pr) in probs.iter().enumerate() {
        if pr <= 0.0 {
            continue;
        }
        match &cell[s] {
            Some(p0) => total += pr * ri::conditional_choice_prob(p0, &v)?[jfb],
            None => {
                return Err(Error::ZeroProbabilitySignal {
                    signal: strategy.signal_labels(k)?[s].clone(),
                })
            }
        }
    }
    Ok(total)
}

/// Achievement probability when group `k` first observes a signal drawn from
/// `strategy` at the realized shocks: the signal-probability mixture of the
/// per-signal conditional choice probabilities.
///
/// Fails with [`Error::ZeroProbabilitySignal`] if the realized shocks can
/// emit a signal the prior assigns probability zero; choice behavior after
/// such a signal is undefined.
pub fn achievement_prob_persuaded(
    eps: &[f64],
    k: usize,
    l: usize,
    params: &PreferenceParams,
    strategy: &PersuasionStrategy,
    prior: &Belief,
    options: &SolverOptions,
) -> Result<f64> {
    let cell = per_signal_p0(prior, strategy, k, l, params, options)?;
    mixed_achievement(eps, k, l, params, strategy, &cell)
}

/// Achievement distribution of one demographic group over a shock sample.
#[derive(Debug, Clone)]
pub struct GroupWelfare {
    pub group: usize,
    /// Achievement probability per sample entry, in input order.
    pub values: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `values`.
    pub std_dev: f64,
    /// [`ACHIEVEMENT_BINS`] equal-width bins on `[0, 1]`; masses sum to 1.
    pub histogram: Vec<f64>,
}

/// Equal-width histogram of achievement probabilities on `[0, 1]`. A value
/// of exactly 1 lands in the last bin.
pub fn achievement_histogram(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::invalid("histogram of an empty sample"));
    }
    let mut counts = vec![0usize; ACHIEVEMENT_BINS];
    for &x in values {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::numeric(format!("achievement probability {x} outside [0, 1]")));
        }
        let idx = ((x * ACHIEVEMENT_BINS as f64) as usize).min(ACHIEVEMENT_BINS - 1);
        counts[idx] += 1;
    }
    let n = values.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Maps achievement over a sample of shock vectors, one per market, and
/// summarizes per group. `levels[m]` is market `m`'s characteristics level.
/// With `persuasion` set, every group observes its signal before choosing;
/// the per-signal attention problems are solved once per `(group, level)`
/// cell and reused across markets.
pub fn welfare_distribution(
    shocks: &[Vec<f64>],
    levels: &[usize],
    params: &PreferenceParams,
    persuasion: Option<(&PersuasionStrategy, &Belief)>,
    options: &SolverOptions,
) -> Result<Vec<GroupWelfare>> {
    if shocks.is_empty() {
        return Err(Error::invalid("welfare distribution over an empty sample"));
    }
    if shocks.len() != levels.len() {
        return Err(Error::DimensionMismatch {
            context: "welfare sample levels",
            expected: shocks.len(),
            got: levels.len(),
        });
    }
    let spec = params.spec();
    if let Some(&bad) = levels.iter().find(|&&l| l >= spec.l_count()) {
        return Err(Error::invalid(format!(
            "level index {bad} out of range ({} levels)",
            spec.l_count()
        )));
    }
    if let Some((strategy, _)) = persuasion {
        if strategy.k_count() != spec.k_count() {
            return Err(Error::DimensionMismatch {
                context: "strategy groups",
                expected: spec.k_count(),
                got: strategy.k_count(),
            });
        }
    }

    let mut out = Vec::with_capacity(spec.k_count());
    for k in 0..spec.k_count() {
        // One cell per level actually used; built lazily, reused across markets.
        let mut cells: Vec<Option<Vec<Option<Vec<f64>>>>> = vec![None; spec.l_count()];
        let mut values = Vec::with_capacity(shocks.len());
        for (eps, &l) in shocks.iter().zip(levels) {
            let value = match persuasion {
                None => achievement_prob(eps, k, l, params)?,
                Some((strategy, prior)) => {
                    if cells[l].is_none() {
                        cells[l] = Some(per_signal_p0(prior, strategy, k, l, params, options)?);
                    }
                    mixed_achievement(eps, k, l, params, strategy, cells[l].as_ref().unwrap())?
                }
            };
            values.push(value);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let histogram = achievement_histogram(&values)?;
        out.push(GroupWelfare { group: k, values, mean, std_dev: var.max(0.0).sqrt(), histogram });
    }
    Ok(out)
}
