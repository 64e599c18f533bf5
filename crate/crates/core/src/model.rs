//! Domain types: choice sets, markets, finitely supported beliefs, preference
//! parameters, and the group utility they induce.
//!
//! Conventions used everywhere downstream:
//! * option `J-1` (the last one) is the outside option; its mean utility and
//!   its shock are normalized to zero,
//! * probability vectors are validated against the tolerances below and then
//!   stored exactly as given, never silently renormalized.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Share and demographic vectors must sum to one within this tolerance.
pub const SIMPLEX_SUM_TOL: f64 = 1e-9;
/// Belief weights must sum to one within this tolerance.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Dimensions and labels of a choice environment: `J` options (last one
/// outside), `K` demographic groups, `L` characteristic levels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChoiceSpec {
    options: Vec<String>,
    groups: Vec<String>,
    levels: Vec<String>,
}

impl ChoiceSpec {
    /// Builds a spec with default labels (`opt_1 .. opt_J` with the last named
    /// `outside`, `grp_1 ..`, `lvl_1 ..`).
    pub fn new(j_count: usize, k_count: usize, l_count: usize) -> Result<Self> {
        let mut options: Vec<String> = (1..j_count).map(|j| format!("opt_{j}")).collect();
        options.push("outside".to_owned());
        Self::with_labels(
            options,
            (1..=k_count).map(|k| format!("grp_{k}")).collect(),
            (1..=l_count).map(|l| format!("lvl_{l}")).collect(),
        )
    }

    pub fn with_labels(
        options: Vec<String>,
        groups: Vec<String>,
        levels: Vec<String>,
    ) -> Result<Self> {
        if options.len() < 2 {
            return Err(Error::invalid("need at least two options (one inside plus the outside)"));
        }
        if groups.is_empty() {
            return Err(Error::invalid("need at least one demographic group"));
        }
        if levels.is_empty() {
            return Err(Error::invalid("need at least one characteristics level"));
        }
        Ok(ChoiceSpec { options, groups, levels })
    }

    pub fn j_count(&self) -> usize {
        self.options.len()
    }

    pub fn k_count(&self) -> usize {
        self.groups.len()
    }

    pub fn l_count(&self) -> usize {
        self.levels.len()
    }

    /// Index of the outside option (always the last).
    pub fn outside(&self) -> usize {
        self.options.len() - 1
    }

    pub fn option_labels(&self) -> &[String] {
        &self.options
    }

    pub fn group_labels(&self) -> &[String] {
        &self.groups
    }

    pub fn level_labels(&self) -> &[String] {
        &self.levels
    }
}

/// One market: observed shares, demographic weights, characteristics level,
/// and whether its consumers were exposed to persuasion (`chi`).
#[derive(Debug, Clone, PartialEq)]
pub struct Market {
    pub id: String,
    pub chi: bool,
    /// Length `J`, nonnegative, sums to one; the outside share is strictly positive.
    pub shares: Vec<f64>,
    /// Length `K`, nonnegative, sums to one.
    pub demo: Vec<f64>,
    /// Zero-based characteristics level, `< L`. External text formats print it one-based.
    pub x_level: usize,
}

impl Market {
    pub fn new(
        id: impl Into<String>,
        chi: bool,
        shares: Vec<f64>,
        demo: Vec<f64>,
        x_level: usize,
        spec: &ChoiceSpec,
    ) -> Result<Self> {
        let id = id.into();
        check_lengths("market shares", &shares, spec.j_count())?;
        check_lengths("market demographics", &demo, spec.k_count())?;
        check_simplex(&format!("market {id} shares"), &shares, SIMPLEX_SUM_TOL)?;
        check_simplex(&format!("market {id} demographics"), &demo, SIMPLEX_SUM_TOL)?;
        if shares[spec.outside()] <= 0.0 {
            return Err(Error::invalid(format!(
                "market {id}: outside share must be strictly positive"
            )));
        }
        if x_level >= spec.l_count() {
            return Err(Error::invalid(format!(
                "market {id}: level index {x_level} out of range (L = {})",
                spec.l_count()
            )));
        }
        Ok(Market { id, chi, shares, demo, x_level })
    }
}

/// Finitely supported belief over shock vectors. Support points have length
/// `J` with the last component exactly zero; weights are nonnegative and sum
/// to one within [`WEIGHT_SUM_TOL`].
///
/// Support storage is shared, so reweighted copies (posteriors) are cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    points: Arc<Vec<f64>>,
    weights: Vec<f64>,
    dim: usize,
}

impl Belief {
    pub fn new(support: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::invalid("belief support is empty"));
        }
        if support.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                context: "belief weights",
                expected: support.len(),
                got: weights.len(),
            });
        }
        let dim = support[0].len();
        if dim < 2 {
            return Err(Error::invalid("belief support points need at least two components"));
        }
        let mut points = Vec::with_capacity(support.len() * dim);
        for (i, point) in support.iter().enumerate() {
            if point.len() != dim {
                return Err(Error::invalid(format!(
                    "belief support point {i} has length {}, expected {dim}",
                    point.len()
                )));
            }
            if point.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("belief support point {i} is not finite")));
            }
            if point[dim - 1] != 0.0 {
                return Err(Error::invalid(format!(
                    "belief support point {i}: outside-option shock must be zero, got {}",
                    point[dim - 1]
                )));
            }
            points.extend_from_slice(point);
        }
        check_simplex("belief weights", &weights, WEIGHT_SUM_TOL)?;
        Ok(Belief { points: Arc::new(points), weights, dim })
    }

    /// Number of support points.
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Dimension of each support point (`J`).
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Same support, new weights. Used for Bayesian reweighting, so the weight
    /// simplex check applies to the new weights as well.
    pub fn reweighted(&self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.len() {
            return Err(Error::DimensionMismatch {
                context: "reweighted belief",
                expected: self.len(),
                got: weights.len(),
            });
        }
        check_simplex("belief weights", &weights, WEIGHT_SUM_TOL)?;
        Ok(Belief { points: Arc::clone(&self.points), weights, dim: self.dim })
    }

    /// Weighted mean of each shock component.
    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for (i, w) in self.weights.iter().enumerate() {
            for (m, x) in mean.iter_mut().zip(self.point(i)) {
                *m += w * x;
            }
        }
        mean
    }
}

/// Mean utilities `alpha(j, k, l)` and unconditional choice probabilities
/// `p0(j, k, l)`, with the information-cost scale `lambda` pinned at one.
///
/// `lambda` is a normalization, not a free parameter: scaling it is equivalent
/// to scaling utilities, so it is fixed rather than configurable.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceParams {
    spec: ChoiceSpec,
    /// Laid out `(l * K + k) * J + j`; the outside entry of every slice is zero.
    alpha: Vec<f64>,
    /// Same layout; each `(k, l)` slice is a simplex over options.
    p0: Vec<f64>,
    pub lambda: f64,
}

impl PreferenceParams {
    /// Builds parameters from per-`(k, l)` tables, outer index `l * K + k`,
    /// inner length `J`.
    pub fn from_tables(
        spec: &ChoiceSpec,
        alpha: &[Vec<f64>],
        p0: &[Vec<f64>],
    ) -> Result<Self> {
        let (j, k, l) = (spec.j_count(), spec.k_count(), spec.l_count());
        check_lengths("alpha tables", alpha, k * l)?;
        check_lengths("p0 tables", p0, k * l)?;
        let mut alpha_flat = Vec::with_capacity(j * k * l);
        let mut p0_flat = Vec::with_capacity(j * k * l);
        for li in 0..l {
            for ki in 0..k {
                let table = li * k + ki;
                let a = &alpha[table];
                let p = &p0[table];
                check_lengths("alpha slice", a, j)?;
                check_lengths("p0 slice", p, j)?;
                if a.iter().any(|x| !x.is_finite()) {
                    return Err(Error::invalid(format!(
                        "alpha slice (k={ki}, l={li}) is not finite"
                    )));
                }
                if a[j - 1] != 0.0 {
                    return Err(Error::invalid(format!(
                        "alpha slice (k={ki}, l={li}): outside option must be zero, got {}",
                        a[j - 1]
                    )));
                }
                check_simplex(&format!("p0 slice (k={ki}, l={li})"), p, SIMPLEX_SUM_TOL)?;
                alpha_flat.extend_from_slice(a);
                p0_flat.extend_from_slice(p);
            }
        }
        Ok(PreferenceParams { spec: spec.clone(), alpha: alpha_flat, p0: p0_flat, lambda: 1.0 })
    }

    /// Builds parameters by evaluating `alpha(j, k, l)` and `p0(j, k, l)`.
    pub fn from_fn(
        spec: &ChoiceSpec,
        mut alpha: impl FnMut(usize, usize, usize) -> f64,
        mut p0: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let j = spec.j_count();
        let mut alpha_tables = Vec::with_capacity(spec.k_count() * spec.l_count());
        let mut p0_tables = Vec::with_capacity(spec.k_count() * spec.l_count());
        for l in 0..spec.l_count() {
            for k in 0..spec.k_count() {
                alpha_tables.push((0..j).map(|ji| alpha(ji, k, l)).collect());
                p0_tables.push((0..j).map(|ji| p0(ji, k, l)).collect());
            }
        }
        Self::from_tables(spec, &alpha_tables, &p0_tables)
    }

    pub fn spec(&self) -> &ChoiceSpec {
        &self.spec
    }

    /// Mean utilities for group `k` at level `l`, length `J`, outside entry zero.
    pub fn alpha_slice(&self, k: usize, l: usize) -> &[f64] {
        let j = self.spec.j_count();
        let base = (l * self.spec.k_count() + k) * j;
        &self.alpha[base..base + j]
    }

    /// Unconditional choice probabilities for group `k` at level `l`, length `J`.
    pub fn p0_slice(&self, k: usize, l: usize) -> &[f64] {
        let j = self.spec.j_count();
        let base = (l * self.spec.k_count() + k) * j;
        &self.p0[base..base + j]
    }

    /// Replaces one `p0` slice, re-checking the simplex constraint.
    pub fn set_p0_slice(&mut self, k: usize, l: usize, values: &[f64]) -> Result<()> {
        let j = self.spec.j_count();
        check_lengths("p0 slice", values, j)?;
        check_simplex(&format!("p0 slice (k={k}, l={l})"), values, SIMPLEX_SUM_TOL)?;
        let base = (l * self.spec.k_count() + k) * j;
        self.p0[base..base + j].copy_from_slice(values);
        Ok(())
    }
}

/// Realized utility vector for one group and level: `v_j = alpha_j + eps_j`,
/// with `v_{J-1} = 0` by the outside normalization.
pub fn group_utility(params: &PreferenceParams, eps: &[f64], k: usize, l: usize) -> Result<Vec<f64>> {
    let j = params.spec.j_count();
    check_lengths("shock vector", eps, j)?;
    let alpha = params.alpha_slice(k, l);
    let mut v: Vec<f64> = alpha.iter().zip(eps).map(|(a, e)| a + e).collect();
    v[j - 1] = 0.0;
    Ok(v)
}

pub(crate) fn check_lengths<T>(context: &'static str, xs: &[T], expected: usize) -> Result<()> {
    if xs.len() != expected {
        return Err(Error::DimensionMismatch { context, expected, got: xs.len() });
    }
    Ok(())
}

pub(crate) fn check_simplex(what: &str, xs: &[f64], tol: f64) -> Result<()> {
    let mut sum = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::invalid(format!("{what}: entry {i} is not finite")));
        }
        if x < 0.0 {
            return Err(Error::invalid(format!("{what}: entry {i} is negative ({x})")));
        }
        sum += x;
    }
    if (sum - 1.0).abs() > tol {
        return Err(Error::invalid(format!(
            "{what}: entries sum to {sum}, expected 1 within {tol:e}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_322() -> ChoiceSpec {
        ChoiceSpec::new(3, 2, 2).unwrap()
    }

    #[test]
    fn spec_rejects_degenerate_dimensions() {
        assert!(ChoiceSpec::new(1, 1, 1).is_err());
        assert!(ChoiceSpec::new(2, 0, 1).is_err());
        assert!(ChoiceSpec::new(2, 1, 0).is_err());
    }

    #[test]
    fn market_validation() {
        let spec = spec_322();
        let ok = Market::new("m1", false, vec![0.3, 0.2, 0.5], vec![0.4, 0.6], 1, &spec);
        assert!(ok.is_ok());

        // Shares that miss the simplex by more than the tolerance.
        let bad_sum = Market::new("m2", false, vec![0.3, 0.2, 0.6], vec![0.4, 0.6], 0, &spec);
        assert!(bad_sum.is_err());

        // Zero outside share.
        let no_outside = Market::new("m3", false, vec![0.6, 0.4, 0.0], vec![0.4, 0.6], 0, &spec);
        assert!(no_outside.is_err());

        // Level out of range.
        let bad_level = Market::new("m4", false, vec![0.3, 0.2, 0.5], vec![0.4, 0.6], 2, &spec);
        assert!(bad_level.is_err());

        // A 1e-10 slack in the share sum is inside the tolerance.
        let slack = Market::new(
            "m5",
            true,
            vec![0.3, 0.2, 0.5 + 1e-10],
            vec![0.4, 0.6],
            0,
            &spec,
        );
        assert!(slack.is_ok());
    }

    #[test]
    fn belief_requires_normalized_outside_component() {
        let ok = Belief::new(vec![vec![0.5, 0.0], vec![-0.5, 0.0]], vec![0.5, 0.5]);
        assert!(ok.is_ok());

        let bad_last = Belief::new(vec![vec![0.5, 0.1]], vec![1.0]);
        assert!(bad_last.is_err());

        let bad_weights = Belief::new(vec![vec![0.5, 0.0]], vec![0.9]);
        assert!(bad_weights.is_err());

        let negative = Belief::new(
            vec![vec![0.5, 0.0], vec![0.1, 0.0]],
            vec![1.2, -0.2],
        );
        assert!(negative.is_err());
    }

    #[test]
    fn belief_reweighting_shares_support() {
        let b = Belief::new(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![0.5, 0.5]).unwrap();
        let r = b.reweighted(vec![0.25, 0.75]).unwrap();
        assert_eq!(r.point(0), b.point(0));
        assert_eq!(r.weights(), &[0.25, 0.75]);
        assert!(b.reweighted(vec![1.0]).is_err());
    }

    #[test]
    fn params_layout_round_trips() {
        let spec = spec_322();
        let params = PreferenceParams::from_fn(
            &spec,
            |j, k, l| {
                if j == 2 {
                    0.0
                } else {
                    (j as f64) + 10.0 * (k as f64) + 100.0 * (l as f64)
                }
            },
            |j, _, _| match j {
                0 => 0.25,
                1 => 0.25,
                _ => 0.5,
            },
        )
        .unwrap();
        assert_eq!(params.alpha_slice(1, 0), &[10.0, 11.0, 0.0]);
        assert_eq!(params.alpha_slice(0, 1), &[100.0, 101.0, 0.0]);
        assert_eq!(params.p0_slice(1, 1), &[0.25, 0.25, 0.5]);
        assert_eq!(params.lambda, 1.0);
    }

    #[test]
    fn params_reject_bad_tables() {
        let spec = spec_322();
        // Nonzero outside alpha.
        let res = PreferenceParams::from_fn(&spec, |_, _, _| 0.1, |_, _, _| 1.0 / 3.0);
        assert!(res.is_err());
        // p0 slice off the simplex.
        let res = PreferenceParams::from_fn(&spec, |_, _, _| 0.0, |_, _, _| 0.4);
        assert!(res.is_err());
    }

    #[test]
    fn group_utility_adds_shock_to_alpha() {
        let spec = spec_322();
        let params = PreferenceParams::from_fn(
            &spec,
            |j, k, _| if j == 2 { 0.0 } else { 0.5 * (j as f64 + 1.0) + k as f64 },
            |j, _, _| if j == 2 { 0.5 } else { 0.25 },
        )
        .unwrap();
        let v = group_utility(&params, &[0.1, -0.2, 0.0], 1, 0).unwrap();
        assert_eq!(v, vec![1.6, 1.8, 0.0]);

        // Zero shocks return alpha itself.
        let v0 = group_utility(&params, &[0.0, 0.0, 0.0], 0, 0).unwrap();
        assert_eq!(v0, params.alpha_slice(0, 0));

        // Additivity in the shock argument.
        let a = [0.3, -0.1, 0.0];
        let b = [-0.2, 0.4, 0.0];
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let va = group_utility(&params, &a, 0, 1).unwrap();
        let vb = group_utility(&params, &b, 0, 1).unwrap();
        let vsum = group_utility(&params, &sum, 0, 1).unwrap();
        let alpha = params.alpha_slice(0, 1);
        for j in 0..2 {
            let direct = va[j] + vb[j] - alpha[j];
            assert!((vsum[j] - direct).abs() < 1e-12);
        }
        assert_eq!(vsum[2], 0.0);
    }
}
