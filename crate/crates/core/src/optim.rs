//! Small deterministic optimizers used by the solver and the estimators.
//!
//! Nothing here is randomized; every routine is a pure function of its
//! arguments, which is what makes the estimation pipeline reproducible
//! bit-for-bit regardless of thread count.

use nalgebra::{DMatrix, DVector};

/// Euclidean projection of `v` onto the probability simplex.
///
/// Sort-based algorithm: with `u` the entries of `v` sorted in decreasing
/// order, find the largest `rho` with `u_rho - (sum_{r<=rho} u_r - 1)/rho > 0`
/// and clip at that threshold.
pub(crate) fn project_simplex(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).expect("non-finite entry in simplex projection"));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (r, &ur) in u.iter().enumerate() {
        cumsum += ur;
        let candidate = (cumsum - 1.0) / (r as f64 + 1.0);
        if ur - candidate > 0.0 {
            tau = candidate;
        }
    }
    let mut out: Vec<f64> = v.iter().map(|&x| (x - tau).max(0.0)).collect();
    // Guard against accumulated rounding: renormalize the positive part.
    let s: f64 = out.iter().sum();
    if s > 0.0 {
        for x in &mut out {
            *x /= s;
        }
    } else {
        let uniform = 1.0 / n as f64;
        out.iter_mut().for_each(|x| *x = uniform);
    }
    out
}

#[derive(Debug, Clone)]
pub(crate) struct BfgsOptions {
    pub max_iter: usize,
    /// Relative step for central-difference gradients:
    /// `h_i = fd_rel_step * (1 + |x_i|)`.
    pub fd_rel_step: f64,
    pub ftol_rel: f64,
    pub xtol: f64,
    pub max_backtracks: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iter: 200,
            fd_rel_step: 1e-6,
            ftol_rel: 1e-13,
            xtol: 1e-11,
            max_backtracks: 45,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evals: usize,
    pub converged: bool,
}

fn fd_gradient(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    rel_step: f64,
    evals: &mut usize,
) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = rel_step * (1.0 + x[i].abs());
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        *evals += 2;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Quasi-Newton minimizer with central-difference gradients and Armijo
/// backtracking. Intended for smooth low-dimensional objectives; falls back to
/// steepest descent whenever the inverse-Hessian approximation loses descent.
pub(crate) fn minimize_bfgs(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    o: &BfgsOptions,
) -> BfgsResult {
    let n = x0.len();
    let mut evals = 0usize;
    let mut x = DVector::from_column_slice(x0);
    let mut fx = f(x.as_slice());
    evals += 1;
    let mut g = DVector::from_vec(fd_gradient(f, x.as_slice(), o.fd_rel_step, &mut evals));
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut flat_streak = 0usize;
    let mut converged = false;
    let mut it = 0usize;

    while it < o.max_iter {
        it += 1;
        let mut d = -(&h_inv * &g);
        let mut slope = d.dot(&g);
        if !slope.is_finite() || slope >= 0.0 {
            h_inv = DMatrix::identity(n, n);
            d = -g.clone();
            slope = d.dot(&g);
        }
        if slope == 0.0 {
            converged = true;
            break;
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=o.max_backtracks {
            let cand = &x + &d * t;
            let fc = f(cand.as_slice());
            evals += 1;
            if fc.is_finite() && fc <= fx + 1e-4 * t * slope {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            // No admissible step: the current point is as good as the line
            // search can certify.
            converged = true;
            break;
        };

        let s = &x_new - &x;
        let step_inf = s.amax();
        let g_new = DVector::from_vec(fd_gradient(f, x_new.as_slice(), o.fd_rel_step, &mut evals));
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            // Standard BFGS inverse update.
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            let ss = &s * s.transpose();
            let hys = &hy * s.transpose();
            h_inv = &h_inv - (&hys + hys.transpose()) * rho + &ss * (rho * rho * yhy + rho);
        }

        let improvement = fx - f_new;
        x = x_new;
        fx = f_new;
        g = g_new;

        if improvement < o.ftol_rel * (1.0 + fx.abs()) {
            flat_streak += 1;
        } else {
            flat_streak = 0;
        }
        if flat_streak >= 2 || step_inf < o.xtol {
            converged = true;
            break;
        }
    }

    BfgsResult { x: x.as_slice().to_vec(), f: fx, iterations: it, evals, converged }
}

/// Golden-section minimization of a unimodal scalar function on `[a, b]`.
pub(crate) fn golden_section(
    f: &mut dyn FnMut(f64) -> f64,
    mut a: f64,
    mut b: f64,
    iters: usize,
) -> (f64, f64) {
    const INVPHI: f64 = 0.618_033_988_749_894_9;
    let mut c = b - INVPHI * (b - a);
    let mut d = a + INVPHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INVPHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INVPHI * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Nelder-Mead with standard coefficients. Used for vector-valued signal
/// parameters where no profile grid applies.
pub(crate) fn nelder_mead(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    scale: f64,
    max_iter: usize,
) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..n {
        let mut xi = x0.to_vec();
        xi[i] += scale * (1.0 + x0[i].abs());
        let fi = f(&xi);
        simplex.push((xi, fi));
    }
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("non-finite simplex value"));
        let worst = simplex[n].clone();
        let mut centroid = vec![0.0; n];
        for (xi, _) in simplex.iter().take(n) {
            for (c, x) in centroid.iter_mut().zip(xi) {
                *c += x / n as f64;
            }
        }
        let shifted = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&worst.0)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let xr = shifted(1.0);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = shifted(2.0);
            let fe = f(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let xc = shifted(-0.5);
            let fc = f(&xc);
            if fc < worst.1 {
                simplex[n] = (xc, fc);
            } else {
                // Shrink toward the best vertex.
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let xs: Vec<f64> = entry
                        .0
                        .iter()
                        .zip(&best)
                        .map(|(x, b)| b + 0.5 * (x - b))
                        .collect();
                    let fs = f(&xs);
                    *entry = (xs, fs);
                }
            }
        }
        let spread = simplex.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max)
            - simplex.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
        if spread < 1e-14 * (1.0 + simplex[0].1.abs()) {
            break;
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("non-finite simplex value"));
    simplex.swap_remove(0)
}
