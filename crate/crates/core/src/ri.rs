//! Attention-allocation solver for the discrete-choice problem with an
//! entropy cost of information.
//!
//! The decision maker's optimal behavior has a two-layer structure. Given
//! unconditional choice probabilities `p0`, behavior at a realized utility
//! vector `v` is a reweighted logit,
//!
//! ```text
//! P_j(v) = p0_j exp(v_j) / sum_l p0_l exp(v_l),
//! ```
//!
//! and `p0` itself maximizes the concave program
//!
//! ```text
//! max_{p in simplex} E_G[ log( sum_j p_j exp(v_j) ) ],
//! ```
//!
//! where the expectation runs over the (finitely supported) belief about
//! utilities. The cost scale is normalized to one, so utilities are already
//! measured in units of information cost.
//!
//! [`solve_unconditional`] computes `p0` by a multiplicative fixed-point
//! iteration on the first-order condition: each step multiplies `p_j` by the
//! expected conditional-to-unconditional ratio and renormalizes. The update is
//! monotone in the objective, stays inside the simplex, and sends mass of
//! never-chosen options to zero geometrically. A projected-gradient pass
//! covers the rare case where the multiplicative update stalls near a face of
//! the simplex.

use crate::error::{Error, Result};
use crate::model::{check_lengths, check_simplex, Belief, SIMPLEX_SUM_TOL};
use crate::optim::project_simplex;

/// Stopping and clamping controls for [`solve_unconditional`].
#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// First-order-condition tolerance: the solver stops once the
    /// complementary-slackness products and the per-option residuals are
    /// below this bound.
    pub foc_tol: f64,
    pub max_iter: usize,
    /// Probabilities below this are snapped to exactly zero during iteration.
    pub zero_clamp: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { foc_tol: 1e-10, max_iter: 10_000, zero_clamp: 1e-14 }
    }
}

/// Solver output. The residual is reported at the returned `p0`, so the
/// optimality conditions can be re-checked by the caller:
/// `foc_residual[j]` is zero (within tolerance) wherever `p0[j] > 0` and
/// nonpositive wherever `p0[j] == 0`.
#[derive(Debug, Clone)]
pub struct RISolution {
    pub p0: Vec<f64>,
    /// Value of the concave program at `p0`.
    pub objective: f64,
    pub foc_residual: Vec<f64>,
    pub iterations: usize,
}

/// A finite distribution over utility vectors: the belief's support shifted
/// by mean utilities, with weights normalized to sum exactly to their
/// floating-point total.
#[derive(Debug, Clone)]
pub struct WeightedUtilities {
    /// Point-major storage, stride `j_count`.
    v: Vec<f64>,
    w: Vec<f64>,
    j_count: usize,
}

impl WeightedUtilities {
    pub fn new(points: &[Vec<f64>], weights: &[f64]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("utility distribution has no support"));
        }
        check_lengths("utility weights", weights, points.len())?;
        let j_count = points[0].len();
        if j_count < 2 {
            return Err(Error::invalid("utility vectors need at least two options"));
        }
        let mut v = Vec::with_capacity(points.len() * j_count);
        for (i, p) in points.iter().enumerate() {
            if p.len() != j_count {
                return Err(Error::invalid(format!(
                    "utility vector {i} has length {}, expected {j_count}"
                , p.len())));
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("utility vector {i} is not finite")));
            }
            v.extend_from_slice(p);
        }
        let mut total = 0.0;
        for (i, &wi) in weights.iter().enumerate() {
            if !wi.is_finite() || wi < 0.0 {
                return Err(Error::invalid(format!("utility weight {i} is invalid ({wi})")));
            }
            total += wi;
        }
        if total <= 0.0 {
            return Err(Error::invalid("utility weights sum to zero"));
        }
        let w = weights.iter().map(|wi| wi / total).collect();
        Ok(WeightedUtilities { v, w, j_count })
    }

    /// Utilities implied by a belief and a mean-utility slice:
    /// `v_j = alpha_j + eps_j` at every support point.
    pub fn from_belief(belief: &Belief, alpha: &[f64]) -> Result<Self> {
        check_lengths("alpha slice", alpha, belief.dim())?;
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("alpha slice is not finite"));
        }
        let j_count = belief.dim();
        let mut v = Vec::with_capacity(belief.len() * j_count);
        for i in 0..belief.len() {
            for (a, e) in alpha.iter().zip(belief.point(i)) {
                v.push(a + e);
            }
        }
        Ok(WeightedUtilities { v, w: belief.weights().to_vec(), j_count })
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn j_count(&self) -> usize {
        self.j_count
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.v[i * self.j_count..(i + 1) * self.j_count]
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }
}

/// Exponentiated utilities with per-point shifts, rebuilt whenever the active
/// option set changes so the row maximum is always attained on an active
/// option and denominators cannot underflow to zero.
struct ExpWorkspace {
    ev: Vec<f64>,
    shift: Vec<f64>,
}

impl ExpWorkspace {
    fn build(u: &WeightedUtilities, active: &[bool]) -> Result<Self> {
        let j = u.j_count;
        let mut ev = vec![0.0; u.v.len()];
        let mut shift = vec![0.0; u.len()];
        for i in 0..u.len() {
            let row = u.point(i);
            let mut c = f64::NEG_INFINITY;
            for (jj, &vj) in row.iter().enumerate() {
                if active[jj] && vj > c {
                    c = vj;
                }
            }
            if !c.is_finite() {
                return Err(Error::numeric("no active option with finite utility"));
            }
            shift[i] = c;
            for (jj, &vj) in row.iter().enumerate() {
                ev[i * j + jj] = (vj - c).exp();
            }
        }
        Ok(ExpWorkspace { ev, shift })
    }

    fn row(&self, i: usize, j: usize) -> &[f64] {
        &self.ev[i * j..(i + 1) * j]
    }
}

/// Expected conditional-to-unconditional ratios `r_j = E[ exp(v_j)/den(v) ]`,
/// where `den(v) = sum_l p_l exp(v_l)`. The first-order residual is `r - 1`.
fn expected_ratios(u: &WeightedUtilities, ws: &ExpWorkspace, p: &[f64]) -> Result<Vec<f64>> {
    let j = u.j_count;
    let mut r = vec![0.0; j];
    for i in 0..u.len() {
        let row = ws.row(i, j);
        let mut den = 0.0;
        for (pj, evj) in p.iter().zip(row) {
            den += pj * evj;
        }
        if den <= 0.0 || !den.is_finite() {
            return Err(Error::numeric(format!(
                "choice denominator degenerate at support point {i}"
            )));
        }
        let scale = u.w[i] / den;
        for (rj, evj) in r.iter_mut().zip(row) {
            *rj += scale * evj;
        }
    }
    Ok(r)
}

fn objective_value(u: &WeightedUtilities, ws: &ExpWorkspace, p: &[f64]) -> f64 {
    let j = u.j_count;
    let mut f = 0.0;
    for i in 0..u.len() {
        let row = ws.row(i, j);
        let mut den = 0.0;
        for (pj, evj) in p.iter().zip(row) {
            den += pj * evj;
        }
        f += u.w[i] * (ws.shift[i] + den.ln());
    }
    f
}

/// Probabilities this small at a convergence check are treated as boundary
/// mass and snapped to zero; small enough that the renormalization moves the
/// interior residuals by far less than the default `foc_tol`.
const BOUNDARY_CUT: f64 = 1e-11;

/// Mass used to revive an option that was clamped to zero but shows a
/// positive residual at the convergence check.
const REVIVE_MASS: f64 = 1e-8;

fn renormalize(p: &mut [f64]) {
    let s: f64 = p.iter().sum();
    for x in p.iter_mut() {
        *x /= s;
    }
}

/// Solves the unconditional-probability program for a belief and a
/// mean-utility slice. See [`solve_weighted`] for the raw-utilities variant.
pub fn solve_unconditional(
    belief: &Belief,
    alpha: &[f64],
    options: &SolverOptions,
) -> Result<RISolution> {
    solve_weighted(&WeightedUtilities::from_belief(belief, alpha)?, options)
}

/// Solves the unconditional-probability program for an arbitrary finite
/// distribution of utility vectors.
///
/// Ties: when the maximizer is not unique (the distribution is symmetric
/// under an option permutation), the uniform initialization preserves the
/// symmetry and the iteration converges to the symmetric solution.
pub fn solve_weighted(u: &WeightedUtilities, options: &SolverOptions) -> Result<RISolution> {
    solve_weighted_impl(u, options, None)
}

pub(crate) fn solve_weighted_impl(
    u: &WeightedUtilities,
    options: &SolverOptions,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<RISolution> {
    let j = u.j_count;

    // Degenerate belief: the program is linear, the optimum is the face
    // spanned by the utility argmax, and no information is processed. Return
    // the uniform point of that face exactly.
    if u.len() == 1 {
        let row = u.point(0);
        let vmax = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ties = row.iter().filter(|&&x| x == vmax).count();
        let p0: Vec<f64> =
            row.iter().map(|&x| if x == vmax { 1.0 / ties as f64 } else { 0.0 }).collect();
        let foc_residual: Vec<f64> = row.iter().map(|&x| (x - vmax).exp() - 1.0).collect();
        return Ok(RISolution { p0, objective: vmax, foc_residual, iterations: 0 });
    }

    let mut active = vec![true; j];
    let mut ws = ExpWorkspace::build(u, &active)?;
    let mut p = vec![1.0 / j as f64; j];
    let mut revivals = 0usize;
    let mut stat_window: Option<f64> = None;

    for it in 0..options.max_iter {
        let r = expected_ratios(u, &ws, &p)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(objective_value(u, &ws, &p));
        }

        // Convergence: every option is either solidly interior with a
        // near-zero residual, or carrying boundary-level mass with a
        // residual pointing out of the simplex.
        let mut interior_ok = true;
        let mut slack_ok = true;
        for jj in 0..j {
            let res = r[jj] - 1.0;
            if p[jj] > BOUNDARY_CUT {
                if res.abs() > options.foc_tol {
                    interior_ok = false;
                    break;
                }
            } else if res > options.foc_tol {
                slack_ok = false;
            }
        }

        if interior_ok && slack_ok {
            // Snap boundary mass to exact zero and report at the final point.
            let mut changed = false;
            for (jj, x) in p.iter_mut().enumerate() {
                if *x > 0.0 && *x <= BOUNDARY_CUT {
                    *x = 0.0;
                    active[jj] = false;
                    changed = true;
                }
            }
            if changed {
                renormalize(&mut p);
                ws = ExpWorkspace::build(u, &active)?;
            }
            let r_final = expected_ratios(u, &ws, &p)?;
            let foc_residual: Vec<f64> = r_final.iter().map(|x| x - 1.0).collect();
            let objective = objective_value(u, &ws, &p);
            return Ok(RISolution { p0: p, objective, foc_residual, iterations: it });
        }

        if interior_ok && !slack_ok {
            // A clamped option wants mass back: revive it and keep iterating.
            if revivals >= 50 {
                let stat = worst_stat(&p, &r, options.foc_tol);
                return Err(Error::NoConvergence { iterations: it, residual: stat });
            }
            revivals += 1;
            for (jj, ok) in active.iter_mut().enumerate() {
                if p[jj] == 0.0 && r[jj] - 1.0 > options.foc_tol {
                    p[jj] = REVIVE_MASS;
                    *ok = true;
                }
            }
            renormalize(&mut p);
            ws = ExpWorkspace::build(u, &active)?;
            continue;
        }

        // Multiplicative ascent step.
        let mut support_changed = false;
        for (jj, x) in p.iter_mut().enumerate() {
            *x *= r[jj];
            if *x < options.zero_clamp && *x > 0.0 {
                *x = 0.0;
            }
            if *x == 0.0 && active[jj] {
                active[jj] = false;
                support_changed = true;
            }
        }
        renormalize(&mut p);
        if support_changed {
            ws = ExpWorkspace::build(u, &active)?;
        }

        // Stall detection: the multiplicative update contracts slowly when an
        // option exits through a nearly-flat face. A projected-gradient pass
        // with widening steps can cross that face in one move.
        if it % 64 == 63 {
            let stat = worst_stat(&p, &r, options.foc_tol);
            if let Some(prev) = stat_window {
                if stat > 0.5 * prev {
                    gradient_rescue(u, &mut ws, &mut active, &mut p)?;
                }
            }
            stat_window = Some(stat);
        }
    }

    let r = expected_ratios(u, &ws, &p)?;
    let stat = worst_stat(&p, &r, options.foc_tol);
    Err(Error::NoConvergence { iterations: options.max_iter, residual: stat })
}

/// Worst violation of the optimality conditions at `p`: complementary
/// slackness on the boundary, residual magnitude in the interior.
fn worst_stat(p: &[f64], r: &[f64], _tol: f64) -> f64 {
    let mut worst = 0.0f64;
    for (pj, rj) in p.iter().zip(r) {
        let res = rj - 1.0;
        let v = if *pj > BOUNDARY_CUT { res.abs() } else { (pj * res).abs().max(res.max(0.0)) };
        if v > worst {
            worst = v;
        }
    }
    worst
}

/// One projected-gradient improvement over a ladder of step sizes; accepts
/// the best objective gain, may re-activate clamped options.
fn gradient_rescue(
    u: &WeightedUtilities,
    ws: &mut ExpWorkspace,
    active: &mut [bool],
    p: &mut Vec<f64>,
) -> Result<()> {
    // The gradient needs all options, so evaluate on a fully active workspace.
    let all_active = vec![true; active.len()];
    let full = ExpWorkspace::build(u, &all_active)?;
    let g = expected_ratios(u, &full, p)?;
    let f0 = objective_value(u, &full, p);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for eta in [1.0, 8.0, 64.0, 512.0, 4096.0] {
        let trial: Vec<f64> = p.iter().zip(&g).map(|(pj, gj)| pj + eta * gj).collect();
        let proj = project_simplex(&trial);
        let f = objective_value(u, &full, &proj);
        if f > f0 && best.as_ref().map_or(true, |(fb, _)| f > *fb) {
            best = Some((f, proj));
        }
    }
    if let Some((_, proj)) = best {
        *p = proj;
        for (jj, ok) in active.iter_mut().enumerate() {
            *ok = p[jj] > 0.0;
        }
        *ws = ExpWorkspace::build(u, active)?;
    }
    Ok(())
}

/// Conditional choice probabilities at a realized utility vector:
/// `P_j(v) = p0_j exp(v_j) / sum_l p0_l exp(v_l)`.
///
/// The shift is taken over the options `p0` actually covers, which makes a
/// degenerate `p0` absorbing for every finite `v` and keeps the denominator
/// away from zero.
pub fn conditional_choice_prob(p0: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_lengths("utility vector", v, p0.len())?;
    check_simplex("conditional choice p0", p0, SIMPLEX_SUM_TOL)?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("utility vector is not finite"));
    }
    let mut c = f64::NEG_INFINITY;
    for (pj, vj) in p0.iter().zip(v) {
        if *pj > 0.0 && *vj > c {
            c = *vj;
        }
    }
    if !c.is_finite() {
        return Err(Error::invalid("p0 carries no probability mass"));
    }
    let mut num = vec![0.0; p0.len()];
    let mut den = 0.0;
    for (jj, (pj, vj)) in p0.iter().zip(v).enumerate() {
        if *pj > 0.0 {
            num[jj] = pj * (vj - c).exp();
            den += num[jj];
        }
    }
    if den <= 0.0 || !den.is_finite() {
        return Err(Error::numeric("conditional choice denominator degenerate"));
    }
    for x in &mut num {
        *x /= den;
    }
    Ok(num)
}

/// First-order residual of the unconditional program at `p0`:
/// `E_G[ exp(v_j) / sum_l p0_l exp(v_l) ] - 1` per option.
pub fn foc_residual(p0: &[f64], belief: &Belief, alpha: &[f64]) -> Result<Vec<f64>> {
    let u = WeightedUtilities::from_belief(belief, alpha)?;
    foc_residual_weighted(p0, &u)
}

/// [`foc_residual`] for a raw utility distribution.
pub fn foc_residual_weighted(p0: &[f64], u: &WeightedUtilities) -> Result<Vec<f64>> {
    check_lengths("p0", p0, u.j_count)?;
    check_simplex("foc p0", p0, SIMPLEX_SUM_TOL)?;
    let j = u.j_count;
    let mut acc = vec![0.0; j];
    for i in 0..u.len() {
        let row = u.point(i);
        let mut c = f64::NEG_INFINITY;
        for (pj, vj) in p0.iter().zip(row) {
            if *pj > 0.0 && *vj > c {
                c = *vj;
            }
        }
        if !c.is_finite() {
            return Err(Error::invalid("p0 carries no probability mass"));
        }
        let mut den = 0.0;
        for (pj, vj) in p0.iter().zip(row) {
            if *pj > 0.0 {
                den += pj * (vj - c).exp();
            }
        }
        if den <= 0.0 || !den.is_finite() {
            return Err(Error::numeric(format!(
                "choice denominator degenerate at support point {i}"
            )));
        }
        let scale = u.w[i] / den;
        for (a, vj) in acc.iter_mut().zip(row) {
            *a += scale * (vj - c).exp();
        }
    }
    for a in &mut acc {
        *a -= 1.0;
    }
    Ok(acc)
}

/// Consistency gap between stated unconditional probabilities and the ones
/// implied by integrating the conditional rule over the belief:
/// `E_G[ P_j(v) ] - p0_j` per option. Zero (within solver tolerance) exactly
/// when `p0` solves the program for this belief.
pub fn consistency_check(p0: &[f64], belief: &Belief, alpha: &[f64]) -> Result<Vec<f64>> {
    let u = WeightedUtilities::from_belief(belief, alpha)?;
    let j = u.j_count();
    let mut acc = vec![0.0; j];
    for i in 0..u.len() {
        let ccp = conditional_choice_prob(p0, u.point(i))?;
        for (a, (w, c)) in acc.iter_mut().zip(std::iter::repeat(u.w[i]).zip(ccp)) {
            *a += w * c;
        }
    }
    for (a, pj) in acc.iter_mut().zip(p0) {
        *a -= pj;
    }
    Ok(acc)
}
