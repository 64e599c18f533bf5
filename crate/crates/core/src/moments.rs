//! Moment conditions and GMM estimation, in two stages.
//!
//! Stage one works on markets without persuasion and estimates mean utilities
//! and unconditional choice probabilities from three stacked blocks:
//!
//! * share moments: the gap between observed shares and the demographic
//!   mixture of `p0`, instrumented by each demographic weight within a level;
//! * shock moments: recovered market shocks interacted with `{1, d_k, d_k^2}`,
//!   zero in expectation when shocks are independent of demographics;
//! * optimality moments: the attention problem's stationarity ratio minus
//!   one, per group within a level, which ties `p0` to the recovered shock
//!   distribution.
//!
//! Stage two holds the stage-one estimates fixed and profiles the signal
//! parameter against markets with persuasion, matching observed shares to
//! the signal-mixture choice probabilities `h`.
//!
//! Every moment entry carries a tag describing its block, option, group,
//! level, and instrument; dimensions are derived from the tag registry and
//! asserted, never hard-coded.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::inversion::{invert_batch_from, pseudo_shocks, InversionOptions};
use crate::model::{Belief, ChoiceSpec, Market, PreferenceParams};
use crate::optim::{golden_section, minimize_bfgs, nelder_mead, BfgsOptions};
use crate::persuasion::{persuaded_choice, PersuasionStrategy};
use crate::ri::SolverOptions;

/// Objective value reported when a candidate parameter makes the data
/// unreachable (inversion failure); large enough that any feasible point wins.
pub const INVERSION_PENALTY: f64 = 1e10;

/// Condition-number threshold above which demographic variation is flagged
/// as too thin to identify group-level parameters.
pub const CONDITION_FLAG: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MomentCondition {
    Share,
    ShockMean,
    Foc,
    Persuasion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Instrument {
    Constant,
    Demo(usize),
    DemoSquared(usize),
}

/// Metadata for one moment entry. `group` is the group whose stationarity
/// condition the entry checks (optimality block only); the instrumenting
/// group, if any, lives in `instrument`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MomentTag {
    pub condition: MomentCondition,
    pub option: usize,
    pub group: Option<usize>,
    pub level: Option<usize>,
    pub instrument: Instrument,
}

/// A stacked moment vector with one tag per entry.
#[derive(Debug, Clone)]
pub struct MomentVector {
    pub values: Vec<f64>,
    pub tags: Vec<MomentTag>,
}

impl MomentVector {
    pub fn new(values: Vec<f64>, tags: Vec<MomentTag>) -> Result<Self> {
        if values.len() != tags.len() {
            return Err(Error::DimensionMismatch {
                context: "moment tags",
                expected: values.len(),
                got: tags.len(),
            });
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("moment entry {bad} is not finite")));
        }
        Ok(MomentVector { values, tags })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `g' W g`; identity weighting when `weight` is `None`.
    pub fn quadratic(&self, weight: Option<&[Vec<f64>]>) -> f64 {
        quadratic_form(&self.values, weight)
    }
}

fn quadratic_form(g: &[f64], weight: Option<&[Vec<f64>]>) -> f64 {
    match weight {
        None => g.iter().map(|x| x * x).sum(),
        Some(w) => {
            let mut total = 0.0;
            for (row, &gi) in w.iter().zip(g) {
                let mut wg = 0.0;
                for (wij, &gj) in row.iter().zip(g) {
                    wg += wij * gj;
                }
                total += gi * wg;
            }
            total
        }
    }
}

/// Tag registry for the stage-one stack: share block, then shock block, then
/// optimality block. Blocks iterate level-major, then group, then option.
pub fn stage1_tags(spec: &ChoiceSpec) -> Vec<MomentTag> {
    let (j, k, l) = (spec.j_count(), spec.k_count(), spec.l_count());
    let mut tags = Vec::new();
    for li in 0..l {
        for ki in 0..k {
            for ji in 0..j - 1 {
                tags.push(MomentTag {
                    condition: MomentCondition::Share,
                    option: ji,
                    group: None,
                    level: Some(li),
                    instrument: Instrument::Demo(ki),
                });
            }
        }
    }
    for ji in 0..j - 1 {
        tags.push(MomentTag {
            condition: MomentCondition::ShockMean,
            option: ji,
            group: None,
            level: None,
            instrument: Instrument::Constant,
        });
    }
    for ki in 0..k {
        for ji in 0..j - 1 {
            tags.push(MomentTag {
                condition: MomentCondition::ShockMean,
                option: ji,
                group: None,
                level: None,
                instrument: Instrument::Demo(ki),
            });
        }
    }
    for ki in 0..k {
        for ji in 0..j - 1 {
            tags.push(MomentTag {
                condition: MomentCondition::ShockMean,
                option: ji,
                group: None,
                level: None,
                instrument: Instrument::DemoSquared(ki),
            });
        }
    }
    for li in 0..l {
        for ki in 0..k {
            for ji in 0..j - 1 {
                tags.push(MomentTag {
                    condition: MomentCondition::Foc,
                    option: ji,
                    group: Some(ki),
                    level: Some(li),
                    instrument: Instrument::Constant,
                });
            }
        }
    }
    tags
}

/// Tag registry for the stage-two stack, level-major then group then option.
pub fn stage2_tags(spec: &ChoiceSpec) -> Vec<MomentTag> {
    let (j, k, l) = (spec.j_count(), spec.k_count(), spec.l_count());
    let mut tags = Vec::new();
    for li in 0..l {
        for ki in 0..k {
            for ji in 0..j - 1 {
                tags.push(MomentTag {
                    condition: MomentCondition::Persuasion,
                    option: ji,
                    group: None,
                    level: Some(li),
                    instrument: Instrument::Demo(ki),
                });
            }
        }
    }
    tags
}

/// Stage-one sample moments plus everything a caller reuses: per-market
/// contributions (for covariance and efficient weighting) and the recovered
/// shocks (for warm starts and the shock distribution).
#[derive(Debug, Clone)]
pub struct Stage1Moments {
    pub mean: MomentVector,
    pub per_market: Vec<Vec<f64>>,
    pub shocks: Vec<Vec<f64>>,
}

/// Stage-one moments at `params`, inverting every market from zero.
pub fn moments_stage1(
    markets: &[Market],
    params: &PreferenceParams,
    options: &InversionOptions,
) -> Result<Stage1Moments> {
    let n = params.spec().j_count() - 1;
    let starts = vec![vec![0.0; n]; markets.len()];
    moments_stage1_from(&starts, markets, params, options)
}

/// Stage-one moments with caller-provided inversion starting points, one per
/// market. Shocks recovered at one parameter vector are good starts at a
/// nearby one, which is what makes derivative-based estimation affordable.
pub fn moments_stage1_from(
    starts: &[Vec<f64>],
    markets: &[Market],
    params: &PreferenceParams,
    options: &InversionOptions,
) -> Result<Stage1Moments> {
    if markets.is_empty() {
        return Err(Error::invalid("stage-one moments need at least one market"));
    }
    if let Some(m) = markets.iter().find(|m| m.chi) {
        return Err(Error::invalid(format!(
            "market {} has persuasion; stage-one moments use unexposed markets only",
            m.id
        )));
    }
    let spec = params.spec().clone();
    let batch = invert_batch_from(starts, markets, params, options)?;
    let shocks: Vec<Vec<f64>> = batch.results.into_iter().map(|r| r.delta).collect();

    let tags = stage1_tags(&spec);
    let mut per_market = Vec::with_capacity(markets.len());
    for (market, delta) in markets.iter().zip(&shocks) {
        per_market.push(stage1_contribution(market, delta, params, tags.len())?);
    }
    let mean = MomentVector::new(mean_rows(&per_market), tags)?;
    Ok(Stage1Moments { mean, per_market, shocks })
}

pub(crate) fn stage1_contribution(
    market: &Market,
    delta: &[f64],
    params: &PreferenceParams,
    dim: usize,
) -> Result<Vec<f64>> {
    let spec = params.spec();
    let (j, k, l_count) = (spec.j_count(), spec.k_count(), spec.l_count());
    let l = market.x_level;
    let d = &market.demo;

    let mut predicted = vec![0.0; j - 1];
    for ki in 0..k {
        let p0 = params.p0_slice(ki, l);
        for ji in 0..j - 1 {
            predicted[ji] += p0[ji] * d[ki];
        }
    }

    // Stationarity ratios e^{v_j} / sum_j' p0_j' e^{v_j'} per group, computed
    // with a max shift; at the attention optimum their mean over markets is 1.
    let mut ratios = vec![vec![0.0; j - 1]; k];
    for ki in 0..k {
        let alpha = params.alpha_slice(ki, l);
        let p0 = params.p0_slice(ki, l);
        let mut v = vec![0.0; j];
        for ji in 0..j - 1 {
            v[ji] = delta[ji] + alpha[ji];
        }
        let shift = v.iter().fold(0.0f64, |a, &b| a.max(b));
        let mut den = 0.0;
        for ji in 0..j {
            den += p0[ji] * (v[ji] - shift).exp();
        }
        if den <= 0.0 || !den.is_finite() {
            return Err(Error::numeric(format!(
                "market {}: degenerate stationarity denominator {den}",
                market.id
            )));
        }
        for ji in 0..j - 1 {
            ratios[ki][ji] = (v[ji] - shift).exp() / den;
        }
    }

    let mut g = Vec::with_capacity(dim);
    for li in 0..l_count {
        for ki in 0..k {
            for ji in 0..j - 1 {
                if li == l {
                    g.push((market.shares[ji] - predicted[ji]) * d[ki]);
                } else {
                    g.push(0.0);
                }
            }
        }
    }
    for ji in 0..j - 1 {
        g.push(delta[ji]);
    }
    for ki in 0..k {
        for ji in 0..j - 1 {
            g.push(delta[ji] * d[ki]);
        }
    }
    for ki in 0..k {
        for ji in 0..j - 1 {
            g.push(delta[ji] * d[ki] * d[ki]);
        }
    }
    for li in 0..l_count {
        for ki in 0..k {
            for ji in 0..j - 1 {
                if li == l {
                    g.push(ratios[ki][ji] - 1.0);
                } else {
                    g.push(0.0);
                }
            }
        }
    }
    debug_assert_eq!(g.len(), dim);
    Ok(g)
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let dim = rows.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; dim];
    for row in rows {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    let n = rows.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    mean
}

/// Flattens `params` into the unconstrained stage-one vector: all inside-option
/// mean utilities, then inside-option log odds against the outside option.
pub fn pack_stage1(params: &PreferenceParams) -> Result<Vec<f64>> {
    let spec = params.spec();
    let (j, k, l) = (spec.j_count(), spec.k_count(), spec.l_count());
    let mut x = Vec::with_capacity(2 * (j - 1) * k * l);
    for li in 0..l {
        for ki in 0..k {
            let alpha = params.alpha_slice(ki, li);
            x.extend_from_slice(&alpha[..j - 1]);
        }
    }
    for li in 0..l {
        for ki in 0..k {
            let p0 = params.p0_slice(ki, li);
            let outside = p0[j - 1];
            if outside <= 0.0 {
                return Err(Error::invalid(format!(
                    "p0 slice (k={ki}, l={li}) puts no mass on the outside option"
                )));
            }
            for ji in 0..j - 1 {
                if p0[ji] <= 0.0 {
                    return Err(Error::invalid(format!(
                        "p0 slice (k={ki}, l={li}) option {ji} is on the boundary; log odds undefined"
                    )));
                }
                x.push((p0[ji] / outside).ln());
            }
        }
    }
    Ok(x)
}

/// Inverse of [`pack_stage1`]. The log-odds map keeps every implied `p0`
/// strictly inside the simplex for any real input.
pub fn unpack_stage1(spec: &ChoiceSpec, x: &[f64]) -> Result<PreferenceParams> {
    let (j, k, l) = (spec.j_count(), spec.k_count(), spec.l_count());
    let block = (j - 1) * k * l;
    if x.len() != 2 * block {
        return Err(Error::DimensionMismatch {
            context: "stage-one parameter vector",
            expected: 2 * block,
            got: x.len(),
        });
    }
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("stage-one parameter {bad} is not finite")));
    }
    let cell = |base: usize, ki: usize, li: usize| base + (li * k + ki) * (j - 1);
    let mut alpha_tables = Vec::with_capacity(k * l);
    let mut p0_tables = Vec::with_capacity(k * l);
    for li in 0..l {
        for ki in 0..k {
            let a = &x[cell(0, ki, li)..cell(0, ki, li) + (j - 1)];
            let mut alpha = a.to_vec();
            alpha.push(0.0);
            alpha_tables.push(alpha);

            let y = &x[cell(block, ki, li)..cell(block, ki, li) + (j - 1)];
            let shift = y.iter().fold(0.0f64, |m, &v| m.max(v));
            let mut table: Vec<f64> = y.iter().map(|&v| (v - shift).exp()).collect();
            table.push((-shift).exp());
            let total: f64 = table.iter().sum();
            for t in &mut table {
                *t /= total;
            }
            p0_tables.push(table);
        }
    }
    PreferenceParams::from_tables(spec, &alpha_tables, &p0_tables)
}

/// Human-readable names for the stage-one coordinates, indexable by the
/// positions rank-deficiency errors report.
pub fn stage1_param_names(spec: &ChoiceSpec) -> Vec<String> {
    let (j, k, l) = (spec.j_count(), spec.k_count(), spec.l_count());
    let mut names = Vec::with_capacity(2 * (j - 1) * k * l);
    for li in 0..l {
        for ki in 0..k {
            for ji in 0..j - 1 {
                names.push(format!("alpha(j={ji},k={ki},l={li})"));
            }
        }
    }
    for li in 0..l {
        for ki in 0..k {
            for ji in 0..j - 1 {
                names.push(format!("p0_logodds(j={ji},k={ki},l={li})"));
            }
        }
    }
    names
}

/// Central finite-difference jacobian of the stage-one mean moments at
/// `point`, moments by rows, parameters by columns.
pub fn stage1_jacobian(
    markets: &[Market],
    spec: &ChoiceSpec,
    point: &[f64],
    options: &InversionOptions,
) -> Result<Vec<Vec<f64>>> {
    const REL_STEP: f64 = 1e-5;
    let dim = stage1_tags(spec).len();
    let mut jac = vec![vec![0.0; point.len()]; dim];
    let mut xp = point.to_vec();
    for p in 0..point.len() {
        let h = REL_STEP * (1.0 + point[p].abs());
        xp[p] = point[p] + h;
        let plus = moments_stage1(markets, &unpack_stage1(spec, &xp)?, options)?;
        xp[p] = point[p] - h;
        let minus = moments_stage1(markets, &unpack_stage1(spec, &xp)?, options)?;
        xp[p] = point[p];
        for (row, (gp, gm)) in
            jac.iter_mut().zip(plus.mean.values.iter().zip(&minus.mean.values))
        {
            row[p] = (gp - gm) / (2.0 * h);
        }
    }
    Ok(jac)
}

fn to_dmatrix(rows: &[Vec<f64>], context: &'static str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::invalid(format!("{context}: empty matrix")));
    }
    let cols = rows[0].len();
    if cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::invalid(format!("{context}: ragged or empty rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn from_dmatrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

/// Sample second moment of the per-market contributions, the plug-in long-run
/// variance of the mean moment vector.
pub fn lambda_hat(contributions: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let g = to_dmatrix(contributions, "moment contributions")?;
    let lam = g.transpose() * &g / g.nrows() as f64;
    Ok(from_dmatrix(&lam))
}

/// Pseudo-inverse of a symmetric matrix, truncating eigenvalues below
/// `rel_cut` times the largest magnitude.
fn pinv_sym(a: &DMatrix<f64>, rel_cut: f64) -> DMatrix<f64> {
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        let lam = eig.eigenvalues[i];
        if lam.abs() > rel_cut * max {
            let v = eig.eigenvectors.column(i);
            out += v * v.transpose() / lam;
        }
    }
    out
}

/// Plug-in sandwich covariance of the estimated parameters:
/// `(B'WB)^{-1} B'W Lambda W B (B'WB)^{-1} / M`, with `Lambda` the sample
/// second moment of the contributions. Errors when the jacobian does not
/// have full column rank, naming the offending coordinates.
pub fn sandwich_covariance(
    contributions: &[Vec<f64>],
    jacobian: &[Vec<f64>],
    weight: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let g = to_dmatrix(contributions, "moment contributions")?;
    let b = to_dmatrix(jacobian, "moment jacobian")?;
    let w = to_dmatrix(weight, "weight matrix")?;
    let (d, p) = (b.nrows(), b.ncols());
    if g.ncols() != d || w.nrows() != d || w.ncols() != d {
        return Err(Error::DimensionMismatch {
            context: "sandwich dimensions",
            expected: d,
            got: g.ncols().max(w.nrows()),
        });
    }
    if d < p {
        return Err(Error::RankDeficient(format!(
            "{d} moments cannot identify {p} parameters"
        )));
    }

    let svd = b.clone().svd(false, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |m, &s| m.max(s));
    let vt = svd.v_t.as_ref().expect("requested right singular vectors");
    let mut dead = Vec::new();
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s <= smax * 1e-10 {
            let row = vt.row(i);
            let rowmax = row.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
            for c in 0..p {
                if row[c].abs() >= 0.5 * rowmax {
                    dead.push(c);
                }
            }
        }
    }
    if !dead.is_empty() {
        dead.sort_unstable();
        dead.dedup();
        return Err(Error::RankDeficient(format!(
            "moment jacobian is rank deficient; null space involves parameters {dead:?}"
        )));
    }

    let lam = g.transpose() * &g / g.nrows() as f64;
    let bw = b.transpose() * &w;
    let bread = (&bw * &b).try_inverse().ok_or_else(|| {
        Error::RankDeficient("B'WB is singular under the supplied weight".into())
    })?;
    let meat = &bw * lam * w * b;
    let sigma = &bread * meat * &bread / g.nrows() as f64;
    Ok(from_dmatrix(&sigma))
}

/// Sandwich covariance of the stage-one estimate at `params`, building the
/// jacobian and contributions in place. Rank-deficiency errors are rewritten
/// with parameter names.
pub fn stage1_covariance(
    markets: &[Market],
    params: &PreferenceParams,
    options: &InversionOptions,
    weight: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let spec = params.spec().clone();
    let point = pack_stage1(params)?;
    let s1 = moments_stage1(markets, params, options)?;
    let jac = stage1_jacobian(markets, &spec, &point, options)?;
    sandwich_covariance(&s1.per_market, &jac, weight).map_err(|e| match e {
        Error::RankDeficient(msg) => {
            let names = stage1_param_names(&spec);
            let mut msg = msg;
            for (i, name) in names.iter().enumerate() {
                msg = msg.replace(&format!("parameters [{i}"), &format!("parameters [{name}"));
            }
            Error::RankDeficient(format!("{msg} (coordinates: {})", names.join(", ")))
        }
        other => other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightScheme {
    Identity,
    /// Two-step: identity first, then the inverse of the sample second moment
    /// of the contributions at the first-step optimum.
    Efficient,
}

#[derive(Debug, Clone)]
pub struct Stage1Options {
    pub weight: WeightScheme,
    pub multistarts: usize,
    pub seed: u64,
    /// Half-width of the uniform jitter applied to extra starting points.
    pub start_spread: f64,
    pub max_iter: usize,
    pub inversion: InversionOptions,
}

impl Default for Stage1Options {
    fn default() -> Self {
        Stage1Options {
            weight: WeightScheme::Identity,
            multistarts: 5,
            seed: 0,
            start_spread: 0.5,
            max_iter: 200,
            inversion: InversionOptions::default(),
        }
    }
}

/// One optimizer start's outcome, kept for diagnosis.
#[derive(Debug, Clone)]
pub struct StartReport {
    pub index: usize,
    pub objective: f64,
    pub iterations: usize,
    /// Objective evaluations spent, finite differences included.
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct GmmEstimate {
    pub params: PreferenceParams,
    /// The packed parameter vector at the optimum.
    pub point: Vec<f64>,
    pub objective: f64,
    pub weight: WeightScheme,
    pub covariance: Vec<Vec<f64>>,
    pub std_errors: Vec<f64>,
    pub converged: bool,
    /// Objective evaluations that hit an infeasible candidate.
    pub inversion_failures: usize,
    pub starts: Vec<StartReport>,
}

fn bfgs_options(max_iter: usize) -> BfgsOptions {
    BfgsOptions { max_iter, ..BfgsOptions::default() }
}

/// Least-squares start: regress shares on demographics per level for `p0`,
/// zeros for the mean utilities.
fn stage1_start(markets: &[Market], spec: &ChoiceSpec) -> Vec<f64> {
    let (j, k, l) = (spec.j_count(), spec.k_count(), spec.l_count());
    let mut logodds = vec![0.0; (j - 1) * k * l];
    for li in 0..l {
        let at_level: Vec<&Market> = markets.iter().filter(|m| m.x_level == li).collect();
        let mut q = vec![vec![1.0 / j as f64; k]; j - 1];
        if !at_level.is_empty() {
            let mut a = DMatrix::<f64>::zeros(k, k);
            let mut b = DMatrix::<f64>::zeros(k, j - 1);
            for m in &at_level {
                for r in 0..k {
                    for c in 0..k {
                        a[(r, c)] += m.demo[r] * m.demo[c];
                    }
                    for ji in 0..j - 1 {
                        b[(r, ji)] += m.demo[r] * m.shares[ji];
                    }
                }
            }
            if let Some(sol) = a.lu().solve(&b) {
                for ji in 0..j - 1 {
                    for ki in 0..k {
                        q[ji][ki] = sol[(ki, ji)];
                    }
                }
            }
        }
        for ki in 0..k {
            let mut inside: Vec<f64> =
                (0..j - 1).map(|ji| q[ji][ki].clamp(1e-3, 1.0 - 1e-3)).collect();
            let total: f64 = inside.iter().sum();
            if total > 0.9 {
                for x in &mut inside {
                    *x *= 0.9 / total;
                }
            }
            let outside = 1.0 - inside.iter().sum::<f64>();
            for (ji, x) in inside.iter().enumerate() {
                logodds[(li * k + ki) * (j - 1) + ji] = (x / outside).ln();
            }
        }
    }
    let mut x = vec![0.0; (j - 1) * k * l];
    x.extend_from_slice(&logodds);
    x
}

/// First-stage GMM: minimizes the weighted quadratic form of the stacked
/// moments over mean utilities and choice probabilities.
///
/// Runs `multistarts` seeded starts of a quasi-Newton search with central
/// finite differences. The best start wins; non-convergence is reported in
/// `converged` and per start rather than as a hard error, with the best point
/// still returned.
pub fn estimate_stage1(
    markets: &[Market],
    spec: &ChoiceSpec,
    options: &Stage1Options,
) -> Result<GmmEstimate> {
    if markets.is_empty() {
        return Err(Error::invalid("estimation needs at least one market"));
    }
    if options.multistarts == 0 {
        return Err(Error::invalid("multistarts must be at least 1"));
    }
    let diagnostics = identification_diagnostics(markets, spec);
    if diagnostics.any_flagged() {
        log::warn!(
            "demographic variation is thin at {} level(s); group-level parameters may be weakly identified",
            diagnostics.levels.iter().filter(|d| d.flagged).count()
        );
    }

    let n_shocks = spec.j_count() - 1;
    let mut warm = vec![vec![0.0; n_shocks]; markets.len()];
    let mut failures = 0usize;

    let run = |weight: Option<&Vec<Vec<f64>>>,
               starts: &[Vec<f64>],
               warm: &mut Vec<Vec<f64>>,
               failures: &mut usize|
     -> (Vec<f64>, f64, Vec<StartReport>) {
        let mut reports = Vec::with_capacity(starts.len());
        let mut best: Option<(Vec<f64>, f64)> = None;
        for (idx, start) in starts.iter().enumerate() {
            let mut objective = |x: &[f64]| -> f64 {
                let params = match unpack_stage1(spec, x) {
                    Ok(p) => p,
                    Err(_) => return INVERSION_PENALTY,
                };
                match moments_stage1_from(warm, markets, &params, &options.inversion) {
                    Ok(s1) => {
                        for (w, d) in warm.iter_mut().zip(&s1.shocks) {
                            w.copy_from_slice(d);
                        }
                        quadratic_form(&s1.mean.values, weight.map(Vec::as_slice))
                    }
                    Err(_) => {
                        *failures += 1;
                        INVERSION_PENALTY
                    }
                }
            };
            let result = minimize_bfgs(&mut objective, start, &bfgs_options(options.max_iter));
            reports.push(StartReport {
                index: idx,
                objective: result.f,
                iterations: result.iterations,
                evaluations: result.evals,
                converged: result.converged,
            });
            if best.as_ref().is_none_or(|(_, f)| result.f < *f) {
                best = Some((result.x, result.f));
            }
        }
        let (x, f) = best.expect("at least one start");
        (x, f, reports)
    };

    let base = stage1_start(markets, spec);
    let mut starts = vec![base.clone()];
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    for _ in 1..options.multistarts {
        let jitter: Vec<f64> = base
            .iter()
            .map(|&v| v + rng.random_range(-options.start_spread..options.start_spread))
            .collect();
        starts.push(jitter);
    }

    let (mut point, mut objective, mut reports) = run(None, &starts, &mut warm, &mut failures);

    let weight_matrix: Option<Vec<Vec<f64>>> = match options.weight {
        WeightScheme::Identity => None,
        WeightScheme::Efficient => {
            let params = unpack_stage1(spec, &point)?;
            let s1 = moments_stage1(markets, &params, &options.inversion)?;
            let lam = to_dmatrix(&lambda_hat(&s1.per_market)?, "lambda")?;
            Some(from_dmatrix(&pinv_sym(&lam, 1e-12)))
        }
    };
    if let Some(w) = &weight_matrix {
        let restart = vec![point.clone()];
        let (p2, f2, mut r2) = run(Some(w), &restart, &mut warm, &mut failures);
        point = p2;
        objective = f2;
        for r in &mut r2 {
            r.index += reports.len();
        }
        reports.extend(r2);
    }

    let params = unpack_stage1(spec, &point)?;
    let dim = stage1_tags(spec).len();
    let identity: Vec<Vec<f64>> =
        (0..dim).map(|i| (0..dim).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let covariance = stage1_covariance(
        markets,
        &params,
        &options.inversion,
        weight_matrix.as_deref().unwrap_or(&identity),
    )?;
    let std_errors = covariance
        .iter()
        .enumerate()
        .map(|(i, row)| row[i].max(0.0).sqrt())
        .collect();

    let converged = reports.iter().any(|r| r.converged);
    if !converged {
        log::warn!(
            "no optimizer start converged; best objective {objective:.3e} after {} starts",
            reports.len()
        );
    }
    Ok(GmmEstimate {
        params,
        point,
        objective,
        weight: options.weight,
        covariance,
        std_errors,
        converged,
        inversion_failures: failures,
        starts: reports,
    })
}

/// Stage-two sample moments at `theta`.
#[derive(Debug, Clone)]
pub struct Stage2Moments {
    pub mean: MomentVector,
    pub per_market: Vec<Vec<f64>>,
}

/// Moments matching observed persuaded shares against the signal-mixture
/// choice probabilities `h(theta)`, instrumented by demographics within a
/// level. Stage-one estimates enter through `params` and the recovered shock
/// distribution through `prior`.
pub fn moments_stage2_theta(
    markets: &[Market],
    theta: &[f64],
    prior: &Belief,
    strategy: &PersuasionStrategy,
    params: &PreferenceParams,
    solver: &SolverOptions,
) -> Result<Stage2Moments> {
    if markets.is_empty() {
        return Err(Error::invalid("stage-two moments need at least one market"));
    }
    if let Some(m) = markets.iter().find(|m| !m.chi) {
        return Err(Error::invalid(format!(
            "market {} is unexposed; stage-two moments use persuaded markets only",
            m.id
        )));
    }
    let spec = params.spec();
    let (j, k, l_count) = (spec.j_count(), spec.k_count(), spec.l_count());
    if strategy.k_count() != k {
        return Err(Error::DimensionMismatch {
            context: "strategy groups",
            expected: k,
            got: strategy.k_count(),
        });
    }
    let strat = strategy.with_theta(theta)?;

    // h per (group, level), built only for levels present in the data.
    let mut h: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; l_count]; k];
    for m in markets {
        for (ki, row) in h.iter_mut().enumerate() {
            if row[m.x_level].is_none() {
                row[m.x_level] =
                    Some(persuaded_choice(prior, &strat, ki, m.x_level, params, solver)?.h);
            }
        }
    }

    let tags = stage2_tags(spec);
    let mut per_market = Vec::with_capacity(markets.len());
    for m in markets {
        let mut predicted = vec![0.0; j - 1];
        for (ki, row) in h.iter().enumerate() {
            let hk = row[m.x_level].as_ref().expect("cell built above");
            for ji in 0..j - 1 {
                predicted[ji] += hk[ji] * m.demo[ki];
            }
        }
        let mut g = Vec::with_capacity(tags.len());
        for li in 0..l_count {
            for ki in 0..k {
                for ji in 0..j - 1 {
                    if li == m.x_level {
                        g.push((m.shares[ji] - predicted[ji]) * m.demo[ki]);
                    } else {
                        g.push(0.0);
                    }
                }
            }
        }
        per_market.push(g);
    }
    let mean = MomentVector::new(mean_rows(&per_market), tags)?;
    Ok(Stage2Moments { mean, per_market })
}

#[derive(Debug, Clone)]
pub struct ThetaOptions {
    /// Search interval, a subset of (0, 1] for the built-in families.
    pub bounds: (f64, f64),
    pub grid_points: usize,
    /// Golden-section refinements after the grid pass.
    pub refine_iterations: usize,
    /// Re-weight by the inverse contribution second moment and search again.
    pub efficient: bool,
    /// Relative spread below which the profile counts as flat.
    pub flat_tol: f64,
    pub solver: SolverOptions,
}

impl Default for ThetaOptions {
    fn default() -> Self {
        ThetaOptions {
            bounds: (0.01, 1.0),
            grid_points: 50,
            refine_iterations: 64,
            efficient: false,
            flat_tol: 1e-9,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ThetaEstimate {
    pub theta: Vec<f64>,
    pub objective: f64,
    /// `(theta, objective)` over the search grid; empty for vector searches.
    pub profile: Vec<(f64, f64)>,
    pub weak_identification: bool,
}

/// Second-stage estimator for the signal parameter.
///
/// Scalar parameters get a deterministic grid pass over `bounds` followed by
/// golden-section refinement around the best grid point, and the grid profile
/// is returned for inspection. A profile that is flat within numerical noise
/// triggers a weak-identification warning and returns the midpoint of the
/// minimizing plateau. Vector parameters fall back to a simplex search seeded
/// at the template's values.
pub fn estimate_theta(
    markets: &[Market],
    prior: &Belief,
    strategy: &PersuasionStrategy,
    params: &PreferenceParams,
    options: &ThetaOptions,
) -> Result<ThetaEstimate> {
    let theta_dim = strategy.theta().len();
    if theta_dim != 1 {
        let mut objective = |x: &[f64]| -> f64 {
            match moments_stage2_theta(markets, x, prior, strategy, params, &options.solver) {
                Ok(s2) => s2.mean.quadratic(None),
                Err(_) => INVERSION_PENALTY,
            }
        };
        let (theta, objective) =
            nelder_mead(&mut objective, strategy.theta(), 0.1, 200 * theta_dim);
        return Ok(ThetaEstimate { theta, objective, profile: Vec::new(), weak_identification: false });
    }

    let (lo, hi) = options.bounds;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::invalid(format!("bad theta bounds ({lo}, {hi})")));
    }
    if options.grid_points < 2 {
        return Err(Error::invalid("theta grid needs at least two points"));
    }

    let profile_with = |weight: Option<&[Vec<f64>]>| -> Result<Vec<(f64, f64)>> {
        let mut profile = Vec::with_capacity(options.grid_points);
        for i in 0..options.grid_points {
            let t = lo + (hi - lo) * i as f64 / (options.grid_points - 1) as f64;
            let s2 = moments_stage2_theta(markets, &[t], prior, strategy, params, &options.solver)?;
            profile.push((t, quadratic_form(&s2.mean.values, weight)));
        }
        Ok(profile)
    };

    let search = |weight: Option<&[Vec<f64>]>| -> Result<(f64, f64, Vec<(f64, f64)>, bool)> {
        let profile = profile_with(weight)?;
        let q_min = profile.iter().map(|&(_, q)| q).fold(f64::INFINITY, f64::min);
        let q_max = profile.iter().map(|&(_, q)| q).fold(f64::NEG_INFINITY, f64::max);
        let noise = options.flat_tol * (1.0 + q_min.abs());
        if q_max - q_min <= noise {
            let plateau: Vec<f64> = profile
                .iter()
                .filter(|&&(_, q)| q <= q_min + noise)
                .map(|&(t, _)| t)
                .collect();
            let mid = 0.5 * (plateau[0] + plateau[plateau.len() - 1]);
            log::warn!(
                "signal parameter profile is flat over [{:.4}, {:.4}]; weak identification",
                plateau[0],
                plateau[plateau.len() - 1]
            );
            let q = moments_stage2_theta(markets, &[mid], prior, strategy, params, &options.solver)?
                .mean
                .quadratic(weight);
            return Ok((mid, q, profile, true));
        }
        let best = profile
            .iter()
            .enumerate()
            .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
            .map(|(i, _)| i)
            .expect("nonempty profile");
        let a = profile[best.saturating_sub(1)].0;
        let b = profile[(best + 1).min(profile.len() - 1)].0;
        let mut f = |t: f64| -> f64 {
            moments_stage2_theta(markets, &[t], prior, strategy, params, &options.solver)
                .map(|s2| quadratic_form(&s2.mean.values, weight))
                .unwrap_or(INVERSION_PENALTY)
        };
        let (mut t_hat, mut q_hat) = golden_section(&mut f, a, b, options.refine_iterations);
        if profile[best].1 < q_hat {
            t_hat = profile[best].0;
            q_hat = profile[best].1;
        }
        Ok((t_hat, q_hat, profile, false))
    };

    let (mut theta, mut objective, mut profile, mut weak) = search(None)?;
    if options.efficient && !weak {
        let s2 = moments_stage2_theta(markets, &[theta], prior, strategy, params, &options.solver)?;
        let lam = to_dmatrix(&lambda_hat(&s2.per_market)?, "stage-two lambda")?;
        let w = from_dmatrix(&pinv_sym(&lam, 1e-12));
        let (t2, q2, p2, weak2) = search(Some(&w))?;
        theta = t2;
        objective = q2;
        profile = p2;
        weak = weak2;
    }
    Ok(ThetaEstimate { theta: vec![theta], objective, profile, weak_identification: weak })
}

/// Market-resampling bootstrap of the signal parameter, rerunning both stages
/// on each draw. These are resampling intervals, not derived asymptotics;
/// report them as such.
pub fn bootstrap_theta(
    plain_markets: &[Market],
    persuaded_markets: &[Market],
    spec: &ChoiceSpec,
    stage1: &Stage1Options,
    strategy: &PersuasionStrategy,
    theta: &ThetaOptions,
    replications: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if plain_markets.is_empty() || persuaded_markets.is_empty() {
        return Err(Error::invalid("bootstrap needs markets from both regimes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(replications);
    for _ in 0..replications {
        let plain: Vec<Market> = (0..plain_markets.len())
            .map(|_| plain_markets[rng.random_range(0..plain_markets.len())].clone())
            .collect();
        let persuaded: Vec<Market> = (0..persuaded_markets.len())
            .map(|_| persuaded_markets[rng.random_range(0..persuaded_markets.len())].clone())
            .collect();
        let s1 = estimate_stage1(&plain, spec, stage1)?;
        let (prior, _) = pseudo_shocks(&plain, &s1.params, &stage1.inversion)?;
        let est = estimate_theta(&persuaded, &prior, strategy, &s1.params, theta)?;
        draws.push(est.theta);
    }
    Ok(draws)
}

#[derive(Debug, Clone)]
pub struct LevelDiagnostic {
    pub level: usize,
    pub markets: usize,
    /// Condition number of the mean demographic outer product at this level.
    pub condition: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct IdentificationReport {
    pub levels: Vec<LevelDiagnostic>,
}

impl IdentificationReport {
    pub fn any_flagged(&self) -> bool {
        self.levels.iter().any(|d| d.flagged)
    }
}

/// Per-level condition numbers of the mean `D D'` matrix. Demographic weights
/// that barely vary across markets make this matrix nearly singular and the
/// group-level moments uninformative.
pub fn identification_diagnostics(markets: &[Market], spec: &ChoiceSpec) -> IdentificationReport {
    let k = spec.k_count();
    let mut levels = Vec::with_capacity(spec.l_count());
    for l in 0..spec.l_count() {
        let at_level: Vec<&Market> = markets.iter().filter(|m| m.x_level == l).collect();
        if at_level.is_empty() {
            levels.push(LevelDiagnostic {
                level: l,
                markets: 0,
                condition: f64::INFINITY,
                flagged: true,
            });
            continue;
        }
        let mut a = DMatrix::<f64>::zeros(k, k);
        for m in &at_level {
            for r in 0..k {
                for c in 0..k {
                    a[(r, c)] += m.demo[r] * m.demo[c];
                }
            }
        }
        a /= at_level.len() as f64;
        let sv = a.svd(false, false).singular_values;
        let smax = sv.iter().fold(0.0f64, |m, &s| m.max(s));
        let smin = sv.iter().fold(f64::INFINITY, |m, &s| m.min(s));
        let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        levels.push(LevelDiagnostic {
            level: l,
            markets: at_level.len(),
            condition,
            flagged: !(condition < CONDITION_FLAG),
        });
    }
    IdentificationReport { levels }
}
