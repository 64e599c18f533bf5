//! Entropy and mutual-information helpers for finite distributions.
//!
//! Everything here works on plain probability vectors and joint matrices.
//! Zero probabilities contribute zero (the `0 log 0 = 0` convention), so
//! distributions with structural zeros are fine.

use crate::error::{Error, Result};
use crate::model::check_simplex;

/// Logarithm base for entropy quantities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntropyBase {
    /// Base-2 logarithms; results in bits.
    Bits,
    /// Natural logarithms; results in nats.
    Nats,
}

impl EntropyBase {
    fn log(self, x: f64) -> f64 {
        match self {
            EntropyBase::Bits => x.log2(),
            EntropyBase::Nats => x.ln(),
        }
    }
}

/// Shannon entropy of a finite distribution.
pub fn entropy(dist: &[f64], base: EntropyBase) -> Result<f64> {
    check_simplex("entropy argument", dist, 1e-9)?;
    let mut h = 0.0;
    for &p in dist {
        if p > 0.0 {
            h -= p * base.log(p);
        }
    }
    Ok(h)
}

/// Entropy of a Bernoulli(`p`) outcome.
pub fn binary_entropy(p: f64, base: EntropyBase) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("Bernoulli parameter {p} outside [0, 1]")));
    }
    entropy(&[p, 1.0 - p], base)
}

/// Kullback-Leibler divergence `KL(p || q)`. Infinite when `p` puts mass
/// where `q` does not.
pub fn kl_divergence(p: &[f64], q: &[f64], base: EntropyBase) -> Result<f64> {
    check_simplex("divergence first argument", p, 1e-9)?;
    check_simplex("divergence second argument", q, 1e-9)?;
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            context: "divergence arguments".into(),
            expected: p.len(),
            got: q.len(),
        });
    }
    let mut d = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Ok(f64::INFINITY);
            }
            d += pi * base.log(pi / qi);
        }
    }
    // Clamp the tiny negative values that float cancellation produces when
    // p == q entrywise up to rounding.
    Ok(d.max(0.0))
}

/// Mutual information of a joint distribution given as a row-major matrix
/// (rows index the first variable). The matrix must be a joint probability
/// table: nonnegative entries summing to one.
pub fn mutual_information(joint: &[Vec<f64>], base: EntropyBase) -> Result<f64> {
    if joint.is_empty() || joint[0].is_empty() {
        return Err(Error::invalid("joint table is empty"));
    }
    let cols = joint[0].len();
    let mut total = 0.0;
    for (i, row) in joint.iter().enumerate() {
        if row.len() != cols {
            return Err(Error::invalid(format!("joint table row {i} has ragged length")));
        }
        for &x in row {
            if !x.is_finite() || x < 0.0 {
                return Err(Error::invalid(format!("joint table entry {x} in row {i}")));
            }
            total += x;
        }
    }
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("joint table sums to {total}, expected 1")));
    }

    let mut row_marg = vec![0.0; joint.len()];
    let mut col_marg = vec![0.0; cols];
    for (i, row) in joint.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            row_marg[i] += x;
            col_marg[j] += x;
        }
    }

    let mut mi = 0.0;
    for (i, row) in joint.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            if x > 0.0 {
                mi += x * base.log(x / (row_marg[i] * col_marg[j]));
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Expected information processed by a conditional rule: the prior-weighted
/// KL divergence of each conditional distribution from the implied marginal.
/// This equals the mutual information between the conditioning variable and
/// the outcome.
pub fn information_rate(
    prior: &[f64],
    conditionals: &[Vec<f64>],
    base: EntropyBase,
) -> Result<f64> {
    check_simplex("information rate prior", prior, 1e-9)?;
    if conditionals.len() != prior.len() {
        return Err(Error::DimensionMismatch {
            context: "conditional rows".into(),
            expected: prior.len(),
            got: conditionals.len(),
        });
    }
    let cols = conditionals.first().map_or(0, Vec::len);
    if cols == 0 {
        return Err(Error::invalid("conditional table is empty"));
    }
    let mut marginal = vec![0.0; cols];
    for (&w, row) in prior.iter().zip(conditionals) {
        check_simplex("conditional row", row, 1e-9)?;
        if row.len() != cols {
            return Err(Error::invalid("conditional table has ragged rows"));
        }
        for (m, &x) in marginal.iter_mut().zip(row) {
            *m += w * x;
        }
    }
    let mut mi = 0.0;
    for (&w, row) in prior.iter().zip(conditionals) {
        if w > 0.0 {
            mi += w * kl_divergence(row, &marginal, base)?;
        }
    }
    Ok(mi)
}

/// Entropy, in bits, of the signal group `k` receives under `strategy`,
/// marginalized over the prior. This is the informativeness number reported
/// alongside estimates: a nearly constant signal scores near zero even when
/// it still moves choices.
pub fn signal_marginal_entropy(
    prior: &crate::model::Belief,
    strategy: &crate::persuasion::PersuasionStrategy,
    k: usize,
) -> Result<f64> {
    let marginal = crate::persuasion::signal_marginal(prior, strategy, k)?;
    entropy(&marginal, EntropyBase::Bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn entropy_of_mixed_thirds_and_sixths() {
        // H(1/3, 1/6, 1/6, 1/3) = log2(3) + 1/3 bits.
        let h = entropy(&[1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 3.0], EntropyBase::Bits)
            .unwrap();
        assert!((h - (3.0f64.log2() + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn entropy_limits() {
        assert_eq!(entropy(&[1.0, 0.0, 0.0], EntropyBase::Bits).unwrap(), 0.0);
        let h = entropy(&[0.25; 4], EntropyBase::Bits).unwrap();
        assert!((h - 2.0).abs() < 1e-15);
        let hn = entropy(&[0.5, 0.5], EntropyBase::Nats).unwrap();
        assert!((hn - 2.0f64.ln()).abs() < 1e-15);
        assert!((binary_entropy(0.5, EntropyBase::Bits).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(binary_entropy(0.0, EntropyBase::Bits).unwrap(), 0.0);
    }

    #[test]
    fn kl_basics() {
        let p = [0.7, 0.3];
        let q = [0.5, 0.5];
        let d = kl_divergence(&p, &q, EntropyBase::Nats).unwrap();
        let expect = 0.7 * (0.7f64 / 0.5).ln() + 0.3 * (0.3f64 / 0.5).ln();
        assert!((d - expect).abs() < 1e-15);
        assert_eq!(kl_divergence(&p, &p, EntropyBase::Nats).unwrap(), 0.0);
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0], EntropyBase::Nats)
            .unwrap()
            .is_infinite());
    }

    /// A uniform draw on [-1, 1] quantized into 2^10 even cells, paired with
    /// its sign. Every cell lies entirely on one side of zero, so the sign is
    /// a deterministic function of the cell and the mutual information is
    /// exactly the sign's entropy: one bit.
    #[test]
    fn quantized_uniform_against_its_sign_carries_one_bit() {
        let sign_mi = |bins: usize| {
            let cell = 1.0 / bins as f64;
            let joint: Vec<Vec<f64>> = (0..bins)
                .map(|i| {
                    let midpoint = -1.0 + (2.0 * i as f64 + 1.0) / bins as f64;
                    if midpoint < 0.0 {
                        vec![cell, 0.0]
                    } else {
                        vec![0.0, cell]
                    }
                })
                .collect();
            mutual_information(&joint, EntropyBase::Bits).unwrap()
        };
        let mi = sign_mi(1 << 10);
        assert!((mi - 1.0).abs() < 1e-9, "mi = {mi}");
        // Refining the quantization only sharpens the answer.
        let mut prev = f64::NEG_INFINITY;
        for k in [4, 6, 8, 10] {
            let mi = sign_mi(1usize << k);
            assert!((mi - 1.0).abs() < 1e-9);
            assert!(mi >= prev - 1e-12);
            prev = mi;
        }
    }

    #[test]
    fn fully_revealing_signal_carries_the_whole_entropy() {
        let p = [1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 3.0];
        let joint: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|s| if s == i { p[i] } else { 0.0 }).collect())
            .collect();
        let mi = mutual_information(&joint, EntropyBase::Bits).unwrap();
        let h = entropy(&p, EntropyBase::Bits).unwrap();
        assert!((mi - h).abs() < 1e-12);
        assert!((mi - (3.0f64.log2() + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn independence_gives_zero_information() {
        let joint = vec![vec![0.06, 0.14], vec![0.24, 0.56]];
        let mi = mutual_information(&joint, EntropyBase::Bits).unwrap();
        assert!(mi.abs() < 1e-12);
    }

    #[test]
    fn finer_uniform_quantization_raises_entropy_by_one_bit_per_doubling() {
        let mut prev = f64::NEG_INFINITY;
        for k in 1..=10 {
            let bins = 1usize << k;
            let dist = vec![1.0 / bins as f64; bins];
            let h = entropy(&dist, EntropyBase::Bits).unwrap();
            assert!((h - k as f64).abs() < 1e-12);
            assert!(h > prev);
            prev = h;
        }
    }

    #[test]
    fn information_rate_matches_joint_mutual_information() {
        let prior = [0.4, 0.6];
        let cond = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        let rate = information_rate(&prior, &cond, EntropyBase::Bits).unwrap();
        let joint: Vec<Vec<f64>> = prior
            .iter()
            .zip(&cond)
            .map(|(&w, row)| row.iter().map(|&x| w * x).collect())
            .collect();
        let mi = mutual_information(&joint, EntropyBase::Bits).unwrap();
        assert!((rate - mi).abs() < 1e-12);
    }

    #[test]
    fn signal_entropy_reference_points() {
        use crate::model::Belief;
        use crate::persuasion::{PersuasionStrategy, SignalFamily};

        let prior = Belief::new(
            vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            vec![0.5, 0.5],
        )
        .unwrap();

        // theta = 1 makes the college signal constant: zero bits.
        let constant = PersuasionStrategy::shared(1, SignalFamily::College, 1.0, 0, 1).unwrap();
        assert_eq!(signal_marginal_entropy(&prior, &constant, 0).unwrap(), 0.0);

        // At theta -> 0 the high-school family reports the gap's sign, and a
        // symmetric prior makes the marginal (1/2, 1/2): one bit.
        let informative =
            PersuasionStrategy::shared(1, SignalFamily::HighSchool, 1e-300, 0, 1).unwrap();
        let h = signal_marginal_entropy(&prior, &informative, 0).unwrap();
        assert!((h - 1.0).abs() < 1e-9, "h = {h}");
    }

    #[test]
    fn malformed_tables_are_rejected() {
        assert!(mutual_information(&[], EntropyBase::Bits).is_err());
        assert!(mutual_information(&[vec![0.5, 0.5], vec![0.5]], EntropyBase::Bits).is_err());
        assert!(mutual_information(&[vec![0.9, 0.3]], EntropyBase::Bits).is_err());
        assert!(entropy(&[0.5, 0.4], EntropyBase::Bits).is_err());
        assert!(binary_entropy(1.5, EntropyBase::Bits).is_err());
    }

    proptest! {
        /// Entropy is concave: mixing two distributions cannot lose entropy.
        #[test]
        fn entropy_is_concave(
            a in 0.01f64..0.99,
            b in 0.01f64..0.99,
            lam in 0.0f64..1.0,
        ) {
            let p = [a, 1.0 - a];
            let q = [b, 1.0 - b];
            let mix = [lam * a + (1.0 - lam) * b, lam * (1.0 - a) + (1.0 - lam) * (1.0 - b)];
            let hp = entropy(&p, EntropyBase::Nats).unwrap();
            let hq = entropy(&q, EntropyBase::Nats).unwrap();
            let hm = entropy(&mix, EntropyBase::Nats).unwrap();
            prop_assert!(hm >= lam * hp + (1.0 - lam) * hq - 1e-12);
        }

        /// Mutual information is nonnegative and bounded by each marginal
        /// entropy.
        #[test]
        fn mi_bounds(
            x in 0.01f64..0.99,
            y in 0.01f64..0.99,
            z in 0.01f64..0.99,
        ) {
            // Random 2x2 joint via three free parameters.
            let p11 = x * y;
            let p12 = x * (1.0 - y);
            let p21 = (1.0 - x) * z;
            let p22 = (1.0 - x) * (1.0 - z);
            let joint = vec![vec![p11, p12], vec![p21, p22]];
            let mi = mutual_information(&joint, EntropyBase::Bits).unwrap();
            let hrow = binary_entropy(x, EntropyBase::Bits).unwrap();
            let hcol = binary_entropy(p11 + p21, EntropyBase::Bits).unwrap();
            prop_assert!(mi >= 0.0);
            prop_assert!(mi <= hrow + 1e-12);
            prop_assert!(mi <= hcol + 1e-12);
        }
    }
}
