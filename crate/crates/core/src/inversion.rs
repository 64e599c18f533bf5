//! Share inversion: recover the market-level utility-shock vector from
//! observed shares.
//!
//! At a realized shock vector `delta` (inside options; the outside is pinned
//! to zero), the model predicts shares
//!
//! ```text
//! ms*_j = sum_k d_k * p0_{j,k,l} e^{delta_j + alpha_j^k(l)} / den_k,
//! den_k = p0_{J,k,l} + sum_{j'} p0_{j',k,l} e^{delta_j' + alpha_j'^k(l)},
//! ```
//!
//! a demographic mixture of reweighted logits. The update
//!
//! ```text
//! T_j(delta) = delta_j + log ms_j - log ms*_j(delta)
//! ```
//!
//! is a contraction whenever the outside option keeps positive unconditional
//! probability, so iterating from zero finds the unique `delta*` with
//! `ms*(delta*) = ms`. With a single demographic group the fixed point has a
//! closed form and no iteration is needed.
//!
//! [`invert_batch`] runs many markets in lock step: each market stops
//! receiving updates the moment its own residual passes the tolerance, so the
//! batch returns exactly what per-market [`invert`] returns while spending
//! iterations only on the markets that still need them. The active set is
//! compacted whenever the converged fraction crosses a threshold.

use crate::error::{Error, Result};
use crate::model::{check_lengths, Market, PreferenceParams};

#[derive(Debug, Clone)]
pub struct InversionOptions {
    /// Sup-norm tolerance on `T(delta) - delta`. The default is tight because
    /// recovered shocks feed exponentials downstream.
    pub tol: f64,
    pub max_iter: usize,
    /// Converged-market fractions at which a batch compacts its active set.
    pub compaction_thresholds: Vec<f64>,
}

impl Default for InversionOptions {
    fn default() -> Self {
        InversionOptions {
            tol: 1e-12,
            max_iter: 10_000,
            compaction_thresholds: vec![0.25, 0.50, 0.75],
        }
    }
}

/// A recovered shock vector for one market. `delta` covers inside options
/// only; the outside component is identically zero.
#[derive(Debug, Clone)]
pub struct InversionResult {
    pub delta: Vec<f64>,
    /// `max_j |T(delta)_j - delta_j|` at the returned point.
    pub residual: f64,
    /// Number of `T` applications spent on this market.
    pub iterations: usize,
    pub converged: bool,
}

/// Batch inversion output plus the work accounting used to compare schedules.
#[derive(Debug, Clone)]
pub struct BatchInversion {
    pub results: Vec<InversionResult>,
    /// Total `T` applications across all markets.
    pub t_applications: usize,
    pub sweeps: usize,
}

/// Model-implied shares at a candidate shock vector, length `J`.
///
/// Exponents are shifted per group so extreme `delta` values saturate
/// gracefully instead of overflowing.
pub fn model_share(
    delta: &[f64],
    market: &Market,
    params: &PreferenceParams,
) -> Result<Vec<f64>> {
    let spec = params.spec();
    let j = spec.j_count();
    check_lengths("delta", delta, j - 1)?;
    if delta.iter().any(|d| !d.is_finite()) {
        return Err(Error::invalid("delta is not finite"));
    }
    let l = market.x_level;
    let mut ms = vec![0.0; j];
    for (k, &dk) in market.demo.iter().enumerate() {
        if dk == 0.0 {
            continue;
        }
        let alpha = params.alpha_slice(k, l);
        let p0 = params.p0_slice(k, l);
        let mut shift = 0.0f64;
        for jj in 0..j - 1 {
            shift = shift.max(delta[jj] + alpha[jj]);
        }
        let outside = p0[j - 1] * (-shift).exp();
        let mut den = outside;
        let mut num = vec![0.0; j - 1];
        for jj in 0..j - 1 {
            num[jj] = p0[jj] * (delta[jj] + alpha[jj] - shift).exp();
            den += num[jj];
        }
        if den <= 0.0 || !den.is_finite() {
            return Err(Error::numeric(format!(
                "market {}: degenerate share denominator for group {k}",
                market.id
            )));
        }
        for jj in 0..j - 1 {
            ms[jj] += dk * num[jj] / den;
        }
        ms[j - 1] += dk * outside / den;
    }
    Ok(ms)
}

/// One application of the share-matching update `T`.
pub fn contraction_step(
    delta: &[f64],
    market: &Market,
    params: &PreferenceParams,
) -> Result<Vec<f64>> {
    let j = params.spec().j_count();
    for jj in 0..j - 1 {
        if market.shares[jj] <= 0.0 {
            return Err(Error::invalid(format!(
                "market {}: inside option {jj} has zero share, inversion undefined",
                market.id
            )));
        }
    }
    let ms = model_share(delta, market, params)?;
    let mut next = Vec::with_capacity(j - 1);
    for jj in 0..j - 1 {
        if ms[jj] <= 0.0 {
            return Err(Error::numeric(format!(
                "market {}: model share for option {jj} vanished during inversion",
                market.id
            )));
        }
        next.push(delta[jj] + market.shares[jj].ln() - ms[jj].ln());
    }
    Ok(next)
}

/// Iterates `T` from `delta = 0` to its unique fixed point.
pub fn invert(
    market: &Market,
    params: &PreferenceParams,
    options: &InversionOptions,
) -> Result<InversionResult> {
    let j = params.spec().j_count();
    invert_from(&vec![0.0; j - 1], market, params, options)
}

/// Same as [`invert`] but starting from a caller-supplied point, for warm
/// starts inside estimation loops. Convergence does not depend on the start.
///
/// Returns the first iterate whose update is within tolerance, so the
/// reported residual is certified at the returned `delta`.
pub fn invert_from(
    delta0: &[f64],
    market: &Market,
    params: &PreferenceParams,
    options: &InversionOptions,
) -> Result<InversionResult> {
    check_reachable(market, params)?;
    let mut delta = delta0.to_vec();
    for it in 1..=options.max_iter {
        let next = contraction_step(&delta, market, params)?;
        let residual = sup_gap(&next, &delta);
        if residual <= options.tol {
            return Ok(InversionResult { delta, residual, iterations: it, converged: true });
        }
        delta = next;
    }
    let next = contraction_step(&delta, market, params)?;
    Err(Error::NoConvergence {
        iterations: options.max_iter,
        residual: sup_gap(&next, &delta),
    })
}

/// Exact inversion for a single demographic group:
/// `delta_j = log(ms_j / ms_J) - log(p0_j / p0_J) - alpha_j`.
pub fn closed_form_delta(market: &Market, params: &PreferenceParams) -> Result<Vec<f64>> {
    let spec = params.spec();
    if spec.k_count() != 1 {
        return Err(Error::invalid(format!(
            "closed-form inversion needs a single demographic group, have {}",
            spec.k_count()
        )));
    }
    let j = spec.j_count();
    let p0 = params.p0_slice(0, market.x_level);
    let alpha = params.alpha_slice(0, market.x_level);
    let ms_out = market.shares[j - 1];
    if p0[j - 1] <= 0.0 {
        return Err(Error::invalid("closed-form inversion needs a positive outside p0"));
    }
    let mut delta = Vec::with_capacity(j - 1);
    for jj in 0..j - 1 {
        if market.shares[jj] <= 0.0 || p0[jj] <= 0.0 {
            return Err(Error::invalid(format!(
                "market {}: option {jj} needs positive share and p0 for the closed form",
                market.id
            )));
        }
        delta.push(
            (market.shares[jj] / ms_out).ln() - (p0[jj] / p0[j - 1]).ln() - alpha[jj],
        );
    }
    Ok(delta)
}

/// Inverts every market, freezing each one at its own first passage below
/// tolerance. Results match per-market [`invert`] exactly; the accounting
/// fields let callers compare against a uniform lock-step schedule.
pub fn invert_batch(
    markets: &[Market],
    params: &PreferenceParams,
    options: &InversionOptions,
) -> Result<BatchInversion> {
    let n = params.spec().j_count() - 1;
    let starts = vec![vec![0.0; n]; markets.len()];
    invert_batch_from(&starts, markets, params, options)
}

/// [`invert_batch`] with per-market starting points (warm starts).
pub fn invert_batch_from(
    starts: &[Vec<f64>],
    markets: &[Market],
    params: &PreferenceParams,
    options: &InversionOptions,
) -> Result<BatchInversion> {
    check_lengths("batch starting points", starts, markets.len())?;
    let thresholds = &options.compaction_thresholds;
    let increasing = thresholds.windows(2).all(|w| w[0] < w[1]);
    if !increasing || thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(Error::invalid(
            "compaction thresholds must be strictly increasing fractions in (0, 1)",
        ));
    }

    for market in markets {
        check_reachable(market, params)
            .map_err(|e| Error::Inversion { market_id: market.id.clone(), source: Box::new(e) })?;
    }

    let total = markets.len();
    let mut results: Vec<Option<InversionResult>> = vec![None; total];
    let mut deltas: Vec<Vec<f64>> = starts.to_vec();
    let mut active: Vec<usize> = (0..total).collect();
    let mut frozen = 0usize;
    let mut next_threshold = 0usize;
    let mut t_applications = 0usize;
    let mut sweeps = 0usize;

    while !active.is_empty() {
        sweeps += 1;
        if sweeps > options.max_iter {
            let worst = active
                .iter()
                .copied()
                .find(|&m| results[m].is_none())
                .expect("an unconverged market remains when the sweep limit is hit");
            return Err(Error::Inversion {
                market_id: markets[worst].id.clone(),
                source: Box::new(Error::NoConvergence {
                    iterations: options.max_iter,
                    residual: f64::NAN,
                }),
            });
        }
        for &m in &active {
            if results[m].is_some() {
                continue;
            }
            let market = &markets[m];
            let next = contraction_step(&deltas[m], market, params)
                .map_err(|e| Error::Inversion { market_id: market.id.clone(), source: Box::new(e) })?;
            t_applications += 1;
            let residual = sup_gap(&next, &deltas[m]);
            if residual <= options.tol {
                results[m] = Some(InversionResult {
                    delta: std::mem::take(&mut deltas[m]),
                    residual,
                    iterations: sweeps,
                    converged: true,
                });
                frozen += 1;
            } else {
                deltas[m] = next;
            }
        }

        // Drop frozen markets from the active list once enough of the batch
        // has converged; scanning order stays by market index either way.
        while next_threshold < options.compaction_thresholds.len()
            && frozen as f64 >= options.compaction_thresholds[next_threshold] * total as f64
        {
            active.retain(|&m| results[m].is_none());
            next_threshold += 1;
        }
        if frozen == total {
            break;
        }
    }

    // Frozen markets record the sweep they converged in; since every market
    // starts in sweep 1 and is updated once per sweep until frozen, that count
    // equals per-market iterations.
    let results = results.into_iter().map(Option::unwrap).collect();
    Ok(BatchInversion { results, t_applications, sweeps })
}

/// Recovered shocks for a no-persuasion sample: inverts every market, pads
/// the outside zero back on, and wraps the collection as the equally weighted
/// empirical shock distribution.
pub fn pseudo_shocks(
    markets: &[Market],
    params: &PreferenceParams,
    options: &InversionOptions,
) -> Result<(crate::model::Belief, Vec<Vec<f64>>)> {
    if markets.is_empty() {
        return Err(Error::invalid("pseudo shocks need at least one market"));
    }
    if let Some(bad) = markets.iter().find(|m| m.chi) {
        return Err(Error::invalid(format!(
            "market {}: shock recovery applies only to markets without persuasion",
            bad.id
        )));
    }
    let j = params.spec().j_count();
    let batch = invert_batch(markets, params, options)?;
    let mut support = Vec::with_capacity(markets.len());
    for r in &batch.results {
        let mut eps = r.delta.clone();
        eps.push(0.0);
        debug_assert_eq!(eps.len(), j);
        support.push(eps);
    }
    let raw = 1.0 / markets.len() as f64;
    let weights = vec![raw; markets.len()];
    let total: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let belief = crate::model::Belief::new(support.clone(), weights)?;
    Ok((belief, support))
}

fn sup_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Inversion can only match strictly positive inside shares if the parameters
/// give the option positive probability in at least one group the market
/// actually contains.
fn check_reachable(market: &Market, params: &PreferenceParams) -> Result<()> {
    let spec = params.spec();
    let j = spec.j_count();
    for jj in 0..j - 1 {
        if market.shares[jj] <= 0.0 {
            return Err(Error::invalid(format!(
                "market {}: inside option {jj} has zero share, inversion undefined",
                market.id
            )));
        }
        let reachable = market.demo.iter().enumerate().any(|(k, &dk)| {
            dk > 0.0 && params.p0_slice(k, market.x_level)[jj] > 0.0
        });
        if !reachable {
            return Err(Error::invalid(format!(
                "market {}: option {jj} has zero unconditional probability in every \
                 group present, its share cannot be matched",
                market.id
            )));
        }
    }
    for (k, &dk) in market.demo.iter().enumerate() {
        if dk > 0.0 && params.p0_slice(k, market.x_level)[j - 1] <= 0.0 {
            return Err(Error::invalid(format!(
                "market {}: group {k} gives the outside option zero probability, \
                 the share update is not a contraction",
                market.id
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Belief, ChoiceSpec};
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_group_params(p0: Vec<f64>, alpha: Vec<f64>) -> PreferenceParams {
        let spec = ChoiceSpec::new(p0.len(), 1, 1).unwrap();
        PreferenceParams::from_tables(&spec, &[alpha], &[p0]).unwrap()
    }

    fn market(shares: Vec<f64>, demo: Vec<f64>, spec: &ChoiceSpec) -> Market {
        Market::new("m", false, shares, demo, 0, spec).unwrap()
    }

    #[test]
    fn model_share_reduces_to_p0_at_zero_delta_zero_alpha() {
        let params = single_group_params(vec![0.6, 0.4], vec![0.0, 0.0]);
        let m = market(vec![0.5, 0.5], vec![1.0], params.spec());
        let ms = model_share(&[0.0], &m, &params).unwrap();
        assert!((ms[0] - 0.6).abs() < 1e-15);
        assert!((ms[1] - 0.4).abs() < 1e-15);

        let uniform = single_group_params(vec![1.0 / 3.0; 3], vec![0.0; 3]);
        let m3 = market(vec![0.3, 0.2, 0.5], vec![1.0], uniform.spec());
        let ms3 = model_share(&[0.0, 0.0], &m3, &uniform).unwrap();
        for x in ms3 {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn model_share_hand_instance() {
        // p0 = (1/4, 1/4, 1/2), delta = (log 1.2, log 0.8): numerators are
        // (0.3, 0.2), denominator 1, so shares come out (0.3, 0.2, 0.5).
        let params = single_group_params(vec![0.25, 0.25, 0.5], vec![0.0; 3]);
        let m = market(vec![0.3, 0.2, 0.5], vec![1.0], params.spec());
        let ms = model_share(&[1.2f64.ln(), 0.8f64.ln()], &m, &params).unwrap();
        assert!((ms[0] - 0.3).abs() < 1e-14);
        assert!((ms[1] - 0.2).abs() < 1e-14);
        assert!((ms[2] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn contraction_fixes_its_fixed_point() {
        let params = single_group_params(vec![0.25, 0.25, 0.5], vec![0.0; 3]);
        let m = market(vec![0.3, 0.2, 0.5], vec![1.0], params.spec());
        let delta = vec![1.2f64.ln(), 0.8f64.ln()];
        let stepped = contraction_step(&delta, &m, &params).unwrap();
        for (a, b) in stepped.iter().zip(&delta) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn single_group_one_step_lands_on_the_closed_form() {
        // Holds when the zero-delta denominator times the outside share equals
        // the outside p0, which this instance satisfies (denominator is 1).
        let params = single_group_params(vec![0.25, 0.25, 0.5], vec![0.0; 3]);
        let m = market(vec![0.3, 0.2, 0.5], vec![1.0], params.spec());
        let one_step = contraction_step(&[0.0, 0.0], &m, &params).unwrap();
        let closed = closed_form_delta(&m, &params).unwrap();
        for (a, b) in one_step.iter().zip(&closed) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn invert_matches_closed_form_on_the_hand_instance() {
        let params = single_group_params(vec![0.25, 0.25, 0.5], vec![0.0; 3]);
        let m = market(vec![0.3, 0.2, 0.5], vec![1.0], params.spec());
        let opts = InversionOptions::default();
        let r = invert(&m, &params, &opts).unwrap();
        assert!(r.converged);
        assert!(r.residual <= opts.tol);
        assert!((r.delta[0] - 1.2f64.ln()).abs() < 1e-12);
        assert!((r.delta[1] - 0.8f64.ln()).abs() < 1e-12);
        assert!((r.delta[0] - 0.182_321_556_793_955_1).abs() < 1e-12);
        assert!((r.delta[1] + 0.223_143_551_314_209_76).abs() < 1e-12);

        let closed = closed_form_delta(&m, &params).unwrap();
        for (a, b) in r.delta.iter().zip(&closed) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_requires_one_group_and_positive_inputs() {
        let spec = ChoiceSpec::new(2, 2, 1).unwrap();
        let params = PreferenceParams::from_tables(
            &spec,
            &[vec![0.0, 0.0], vec![0.0, 0.0]],
            &[vec![0.5, 0.5], vec![0.5, 0.5]],
        )
        .unwrap();
        let m = Market::new("m", false, vec![0.5, 0.5], vec![0.5, 0.5], 0, &spec).unwrap();
        assert!(closed_form_delta(&m, &params).is_err());

        let single = single_group_params(vec![0.0, 1.0], vec![0.0, 0.0]);
        let m2 = market(vec![0.5, 0.5], vec![1.0], single.spec());
        assert!(closed_form_delta(&m2, &single).is_err());
    }

    #[test]
    fn alpha_enters_the_closed_form_with_a_minus_sign() {
        let alpha = vec![0.7, -0.3, 0.0];
        let params = single_group_params(vec![0.25, 0.25, 0.5], alpha.clone());
        let m = market(vec![0.3, 0.2, 0.5], vec![1.0], params.spec());
        let closed = closed_form_delta(&m, &params).unwrap();
        // Step tolerance understates distance to the fixed point by the
        // contraction factor, so tighten it for a 1e-12 comparison.
        let tight = InversionOptions { tol: 1e-14, ..InversionOptions::default() };
        let invert_result = invert(&m, &params, &tight).unwrap();
        for jj in 0..2 {
            assert!((closed[jj] - invert_result.delta[jj]).abs() < 1e-12);
            let zero_alpha = (m.shares[jj] / 0.5).ln() - (0.25f64 / 0.5).ln();
            assert!((closed[jj] - (zero_alpha - alpha[jj])).abs() < 1e-15);
        }
    }

    /// Damped Newton on the inside-share equations, finite-difference
    /// Jacobian. Independent of the contraction path.
    fn newton_invert(m: &Market, params: &PreferenceParams) -> Vec<f64> {
        let n = params.spec().j_count() - 1;
        let mut delta = vec![0.0; n];
        for _ in 0..200 {
            let ms = model_share(&delta, m, params).unwrap();
            let gap: Vec<f64> = (0..n).map(|jj| m.shares[jj] - ms[jj]).collect();
            let gap_norm: f64 = gap.iter().map(|x| x * x).sum::<f64>().sqrt();
            if gap_norm < 1e-13 {
                break;
            }
            let h = 1e-7;
            let mut jac = DMatrix::zeros(n, n);
            for col in 0..n {
                let mut up = delta.clone();
                let mut dn = delta.clone();
                up[col] += h;
                dn[col] -= h;
                let ms_up = model_share(&up, m, params).unwrap();
                let ms_dn = model_share(&dn, m, params).unwrap();
                for row in 0..n {
                    jac[(row, col)] = (ms_up[row] - ms_dn[row]) / (2.0 * h);
                }
            }
            let rhs = DVector::from_iterator(n, gap.iter().cloned());
            let step = jac.lu().solve(&rhs).expect("Jacobian is invertible on test instances");
            let mut t = 1.0;
            loop {
                let cand: Vec<f64> =
                    delta.iter().zip(step.iter()).map(|(d, s)| d + t * s).collect();
                let ms_c = model_share(&cand, m, params).unwrap();
                let cand_norm: f64 = (0..n)
                    .map(|jj| (m.shares[jj] - ms_c[jj]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if cand_norm < gap_norm || t < 1e-6 {
                    delta = cand;
                    break;
                }
                t *= 0.5;
            }
        }
        delta
    }

    #[test]
    fn two_group_inversion_matches_a_newton_oracle() {
        let spec = ChoiceSpec::new(3, 2, 1).unwrap();
        let params = PreferenceParams::from_tables(
            &spec,
            &[vec![0.4, -0.2, 0.0], vec![-0.1, 0.3, 0.0]],
            &[vec![0.3, 0.3, 0.4], vec![0.2, 0.5, 0.3]],
        )
        .unwrap();
        let truth = vec![0.35, -0.6];
        let probe = Market::new("probe", false, vec![0.2, 0.2, 0.6], vec![0.55, 0.45], 0, &spec)
            .unwrap();
        let shares = model_share(&truth, &probe, &params).unwrap();
        let m = Market::new("m", false, shares, vec![0.55, 0.45], 0, &spec).unwrap();

        let fixed_point = invert(&m, &params, &InversionOptions::default()).unwrap();
        let newton = newton_invert(&m, &params);
        for (a, b) in fixed_point.delta.iter().zip(&newton) {
            assert!((a - b).abs() < 1e-8, "contraction {a} vs newton {b}");
        }
        for (a, b) in fixed_point.delta.iter().zip(&truth) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn residuals_shrink_monotonically_after_the_first_step() {
        let spec = ChoiceSpec::new(3, 2, 1).unwrap();
        let params = PreferenceParams::from_tables(
            &spec,
            &[vec![0.2, 0.1, 0.0], vec![0.0, -0.4, 0.0]],
            &[vec![0.25, 0.35, 0.4], vec![0.45, 0.25, 0.3]],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let truth = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let d1: f64 = rng.random_range(0.2..0.8);
            let demo = vec![d1, 1.0 - d1];
            let probe =
                Market::new("p", false, vec![0.2, 0.2, 0.6], demo.clone(), 0, &spec).unwrap();
            let shares = model_share(&truth, &probe, &params).unwrap();
            let m = Market::new("m", false, shares, demo, 0, &spec).unwrap();

            let mut delta = vec![0.0, 0.0];
            let mut prev = f64::INFINITY;
            for _ in 0..60 {
                let next = contraction_step(&delta, &m, &params).unwrap();
                let res = sup_gap(&next, &delta);
                assert!(res <= prev + 1e-15, "residual grew: {prev} -> {res}");
                prev = res;
                delta = next;
            }
        }
    }

    #[test]
    fn batch_matches_per_market_exactly() {
        let spec = ChoiceSpec::new(3, 1, 2).unwrap();
        let params = PreferenceParams::from_tables(
            &spec,
            &[vec![0.3, -0.1, 0.0], vec![-0.2, 0.4, 0.0]],
            &[vec![0.3, 0.25, 0.45], vec![0.2, 0.35, 0.45]],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut markets = Vec::new();
        for i in 0..100 {
            let truth = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let level = rng.random_range(0..2usize);
            let probe = Market::new(format!("m{i}"), false, vec![0.2, 0.2, 0.6], vec![1.0], level, &spec)
                .unwrap();
            let shares = model_share(&truth, &probe, &params).unwrap();
            markets
                .push(Market::new(format!("m{i}"), false, shares, vec![1.0], level, &spec).unwrap());
        }

        let opts = InversionOptions::default();
        let batch = invert_batch(&markets, &params, &opts).unwrap();
        let mut per_market_total = 0usize;
        for (m, r) in markets.iter().zip(&batch.results) {
            let single = invert(m, &params, &opts).unwrap();
            assert_eq!(single.delta, r.delta);
            assert_eq!(single.iterations, r.iterations);
            per_market_total += single.iterations;
        }
        assert_eq!(batch.t_applications, per_market_total);
    }

    #[test]
    fn batch_returns_in_one_sweep_when_everything_is_converged() {
        let params = single_group_params(vec![0.25, 0.25, 0.5], vec![0.0; 3]);
        let spec = params.spec().clone();
        let markets: Vec<Market> = (0..8)
            .map(|i| Market::new(format!("m{i}"), false, vec![0.25, 0.25, 0.5], vec![1.0], 0, &spec).unwrap())
            .collect();
        // Shares equal p0, so delta = 0 is already the fixed point.
        let batch = invert_batch(&markets, &params, &InversionOptions::default()).unwrap();
        assert_eq!(batch.sweeps, 1);
        assert_eq!(batch.t_applications, markets.len());
        for r in &batch.results {
            assert_eq!(r.iterations, 1);
            assert_eq!(r.delta, vec![0.0, 0.0]);
        }
    }

    #[test]
    fn dropout_beats_uniform_lockstep_on_mixed_difficulty() {
        // Outside p0 of 0.9 contracts fast; 0.05 contracts slowly. Uniform
        // lock-step pays the slow markets' iteration count for every market.
        let spec = ChoiceSpec::new(2, 1, 2).unwrap();
        let params = PreferenceParams::from_tables(
            &spec,
            &[vec![0.0, 0.0], vec![0.0, 0.0]],
            &[vec![0.1, 0.9], vec![0.95, 0.05]],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut markets = Vec::new();
        for i in 0..40 {
            let level = if i % 2 == 0 { 0 } else { 1 };
            let truth = vec![rng.random_range(-0.8..0.8)];
            let probe =
                Market::new(format!("m{i}"), false, vec![0.3, 0.7], vec![1.0], level, &spec).unwrap();
            let shares = model_share(&truth, &probe, &params).unwrap();
            markets
                .push(Market::new(format!("m{i}"), false, shares, vec![1.0], level, &spec).unwrap());
        }

        let opts = InversionOptions::default();
        let batch = invert_batch(&markets, &params, &opts).unwrap();
        let worst = batch.results.iter().map(|r| r.iterations).max().unwrap();
        let uniform_cost = worst * markets.len();
        assert!(
            batch.t_applications < uniform_cost,
            "dropout used {} applications, uniform lock-step would use {uniform_cost}",
            batch.t_applications
        );
        // Sanity: difficulty really is mixed.
        let best = batch.results.iter().map(|r| r.iterations).min().unwrap();
        assert!(worst > 4 * best, "spread too small: {best}..{worst}");
    }

    #[test]
    fn pseudo_shocks_round_trip_and_edge_cases() {
        let spec = ChoiceSpec::new(3, 1, 1).unwrap();
        let params = PreferenceParams::from_tables(
            &spec,
            &[vec![0.3, -0.2, 0.0]],
            &[vec![0.3, 0.25, 0.45]],
        )
        .unwrap();
        let g = Belief::new(
            vec![vec![0.6, -0.3, 0.0], vec![-0.5, 0.4, 0.0], vec![-0.1, -0.1, 0.0]],
            vec![0.3, 0.3, 0.4],
        )
        .unwrap();

        let mut markets = Vec::new();
        let mut truths = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for i in 0..60 {
            let point = g.point(rng.random_range(0..g.len())).to_vec();
            let truth = vec![point[0], point[1]];
            let probe = Market::new(format!("m{i}"), false, vec![0.2, 0.2, 0.6], vec![1.0], 0, &spec)
                .unwrap();
            let shares = model_share(&truth, &probe, &params).unwrap();
            markets.push(Market::new(format!("m{i}"), false, shares, vec![1.0], 0, &spec).unwrap());
            truths.push(truth);
        }

        let (belief, shocks) = pseudo_shocks(&markets, &params, &InversionOptions::default()).unwrap();
        assert_eq!(belief.len(), markets.len());
        assert_eq!(shocks.len(), markets.len());
        for (i, truth) in truths.iter().enumerate() {
            assert!((belief.point(i)[0] - truth[0]).abs() < 1e-9);
            assert!((belief.point(i)[1] - truth[1]).abs() < 1e-9);
            assert_eq!(belief.point(i)[2], 0.0);
        }
        let w = belief.weights();
        assert!((w[0] - 1.0 / 60.0).abs() < 1e-15);

        // Single market: one support point, full weight.
        let (single, _) = pseudo_shocks(&markets[..1], &params, &InversionOptions::default()).unwrap();
        assert_eq!(single.len(), 1);
        assert!((single.weights()[0] - 1.0).abs() < 1e-15);

        // Markets exposed to persuasion are refused.
        let mut exposed = markets[0].clone();
        exposed.chi = true;
        assert!(pseudo_shocks(&[exposed], &params, &InversionOptions::default()).is_err());
    }

    #[test]
    fn unreachable_shares_are_rejected_up_front() {
        // Inside option with zero p0 in the only group present.
        let params = single_group_params(vec![0.0, 0.5, 0.5], vec![0.0; 3]);
        let m = market(vec![0.2, 0.3, 0.5], vec![1.0], params.spec());
        assert!(invert(&m, &params, &InversionOptions::default()).is_err());

        // Outside option with zero p0 breaks the contraction.
        let params2 = single_group_params(vec![0.5, 0.5, 0.0], vec![0.0; 3]);
        let m2 = market(vec![0.2, 0.3, 0.5], vec![1.0], params2.spec());
        assert!(invert(&m2, &params2, &InversionOptions::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Forward shares then inversion recovers the shock vector.
        #[test]
        fn round_trip_recovers_delta(
            d1 in -1.5f64..1.5,
            d2 in -1.5f64..1.5,
            a1 in -1.0f64..1.0,
            a2 in -1.0f64..1.0,
            p_raw in 0.1f64..0.9,
            q_raw in 0.1f64..0.9,
            demo1 in 0.05f64..0.95,
        ) {
            let spec = ChoiceSpec::new(3, 2, 1).unwrap();
            // Two distinct p0 slices with outside mass at least 0.2.
            let scale_p = 0.8 / (p_raw + q_raw + 1.0);
            let slice_a = vec![p_raw * scale_p, q_raw * scale_p, 1.0 - (p_raw + q_raw) * scale_p];
            let slice_b = vec![q_raw * scale_p, p_raw * scale_p, 1.0 - (p_raw + q_raw) * scale_p];
            let params = PreferenceParams::from_tables(
                &spec,
                &[vec![a1, a2, 0.0], vec![a2, a1, 0.0]],
                &[slice_a, slice_b],
            ).unwrap();
            let demo = vec![demo1, 1.0 - demo1];
            let truth = vec![d1, d2];
            let probe = Market::new("p", false, vec![0.2, 0.2, 0.6], demo.clone(), 0, &spec).unwrap();
            let shares = model_share(&truth, &probe, &params).unwrap();
            prop_assume!(shares.iter().all(|&s| s > 1e-12));
            let m = Market::new("m", false, shares, demo, 0, &spec).unwrap();
            let r = invert(&m, &params, &InversionOptions::default()).unwrap();
            prop_assert!((r.delta[0] - d1).abs() < 1e-9);
            prop_assert!((r.delta[1] - d2).abs() < 1e-9);
        }

        /// Model shares always sum to one and keep the outside positive.
        #[test]
        fn model_share_stays_in_the_simplex(
            d1 in -30.0f64..30.0,
            d2 in -30.0f64..30.0,
        ) {
            let params = single_group_params(vec![0.3, 0.3, 0.4], vec![0.1, -0.2, 0.0]);
            let m = market(vec![0.25, 0.25, 0.5], vec![1.0], params.spec());
            let ms = model_share(&[d1, d2], &m, &params).unwrap();
            let sum: f64 = ms.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(ms[2] > 0.0);
        }
    }
}
