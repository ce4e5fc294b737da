//! Sample-allocation criteria for tree partitions and their optimizers.
//!
//! For a partition with `B` leaves holding `n_b` of `n` points, the design
//! criterion is `phi = prod_b n_b / n`. Under a multinomial assignment with
//! cell masses `p_b`, the exact moment is
//! `E prod_b n_b = n (n-1) ... (n-B+1) * prod_b p_b`
//! (the falling factorial, since repeated indices contribute nothing), so
//! `E phi = (n)_B / n^B * prod_b p_b`. The `n`-dependent factor does not
//! depend on the masses, hence maximizing the expected criterion over
//! measures is the same as maximizing `prod_b p_b`, which the product
//! criterion [`b_expected_criterion`] scores directly. The Monte Carlo
//! estimator [`expected_phi_mc`] targets the exact expectation above.
//!
//! Comparisons between allocations are available in exact rational
//! arithmetic so argmax-set equality tests carry no rounding slack.

use num_bigint::BigInt;
use num_rational::BigRational;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

use crate::error::{Error, Result};
use crate::tree::{Rectangle, RegressionTree};

/// Integer sample counts for the leaves of a partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Allocation {
    counts: Vec<u64>,
}

impl Allocation {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Input("allocation needs at least one leaf".into()));
        }
        Ok(Allocation { counts })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn n(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn b(&self) -> usize {
        self.counts.len()
    }

    /// Floor of the fair share n/B.
    pub fn q(&self) -> u64 {
        self.n() / self.b() as u64
    }

    /// Remainder n - qB.
    pub fn r(&self) -> u64 {
        self.n() % self.b() as u64
    }
}

/// Leaf masses of a probability measure over a partition.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafMeasure {
    masses: Vec<f64>,
}

impl LeafMeasure {
    pub fn new(masses: Vec<f64>) -> Result<Self> {
        if masses.is_empty() {
            return Err(Error::Input("measure needs at least one leaf".into()));
        }
        if masses.iter().any(|&m| !(0.0..=1.0).contains(&m)) {
            return Err(Error::Input("leaf masses must lie in [0,1]".into()));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!("leaf masses sum to {total}, expected 1")));
        }
        Ok(LeafMeasure { masses })
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn b(&self) -> usize {
        self.masses.len()
    }
}

/// Uniform-measure masses of a tree partition: the leaf box volumes.
pub fn leaf_volumes(tree: &RegressionTree) -> Result<LeafMeasure> {
    LeafMeasure::new(
        tree.partition_rectangles()
            .iter()
            .map(|(_, r)| r.volume())
            .collect(),
    )
}

/// Per-leaf box constraints for [`constrained_allocation`].
#[derive(Clone, Debug)]
pub struct BoxConstraint {
    pub lower: Vec<u64>,
    pub upper: Vec<u64>,
}

impl BoxConstraint {
    pub fn new(lower: Vec<u64>, upper: Vec<u64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::Input("box bounds must be nonempty and equal length".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| l > u) {
            return Err(Error::Input("box lower bound exceeds upper bound".into()));
        }
        Ok(BoxConstraint { lower, upper })
    }

    pub fn b(&self) -> usize {
        self.lower.len()
    }
}

/// `prod_b n_b / n` for fixed counts. Any empty leaf gives 0.
pub fn phi_fixed(alloc: &Allocation) -> Result<f64> {
    let n = alloc.n();
    if n == 0 {
        return Err(Error::Input("allocation has no samples".into()));
    }
    Ok(alloc.counts.iter().map(|&c| c as f64 / n as f64).product())
}

/// Exact rational value of [`phi_fixed`].
pub fn phi_fixed_exact(alloc: &Allocation) -> Result<BigRational> {
    let n = alloc.n();
    if n == 0 {
        return Err(Error::Input("allocation has no samples".into()));
    }
    let num = alloc
        .counts
        .iter()
        .fold(BigInt::from(1u8), |acc, &c| acc * BigInt::from(c));
    let den = BigInt::from(n).pow(alloc.b() as u32);
    Ok(BigRational::new(num, den))
}

/// Canonical maximizer of [`phi_fixed`] over positive compositions of `n`
/// into `b` parts: `b - r` leaves receive `q = floor(n/b)` and `r = n - qb`
/// leaves receive `q + 1`. Counts are returned sorted ascending; the
/// maximizer is unique up to permutation.
pub fn optimal_allocation(n: u64, b: usize) -> Result<Allocation> {
    if b == 0 {
        return Err(Error::Input("need at least one leaf".into()));
    }
    if (b as u64) > n {
        return Err(Error::Input(format!("cannot place {n} samples on {b} leaves, need n >= B")));
    }
    let q = n / b as u64;
    let r = (n % b as u64) as usize;
    let mut counts = vec![q; b - r];
    counts.extend(std::iter::repeat(q + 1).take(r));
    Allocation::new(counts)
}

/// Exact optimal criterion value `(q/n)^(B-r) ((q+1)/n)^r`.
pub fn optimal_phi_exact(n: u64, b: usize) -> Result<BigRational> {
    phi_fixed_exact(&optimal_allocation(n, b)?)
}

/// Product of the nonzero leaf masses; the expected-criterion score of a
/// partition before samples are assigned. An empty product is 1.
pub fn b_expected_criterion(measure: &LeafMeasure) -> f64 {
    measure.masses.iter().filter(|&&m| m > 0.0).product()
}

/// One multinomial(n, masses) draw via conditional binomials.
pub fn multinomial_draw<R: Rng + ?Sized>(rng: &mut R, n: u64, masses: &[f64]) -> Vec<u64> {
    let b = masses.len();
    let mut counts = Vec::with_capacity(b);
    let mut rest_n = n;
    let mut rest_p = 1.0f64;
    for &m in &masses[..b - 1] {
        if rest_n == 0 || rest_p <= 0.0 {
            counts.push(0);
            continue;
        }
        let p = (m / rest_p).clamp(0.0, 1.0);
        let k = Binomial::new(rest_n, p)
            .expect("clamped probability is valid")
            .sample(rng);
        counts.push(k);
        rest_n -= k;
        rest_p -= m;
    }
    counts.push(rest_n);
    counts
}

/// Monte Carlo estimate of `E phi` under multinomial assignment of `n`
/// points to the measure's leaves.
pub fn expected_phi_mc(measure: &LeafMeasure, n: u64, trials: usize, seed: u64) -> Result<f64> {
    if n == 0 || trials == 0 {
        return Err(Error::Input("need n >= 1 and trials >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..trials {
        let counts = multinomial_draw(&mut rng, n, measure.masses());
        let phi: f64 = counts.iter().map(|&c| c as f64 / n as f64).product();
        acc += phi;
    }
    Ok(acc / trials as f64)
}

/// Fraction of equal-mass multinomial draws whose criterion value attains
/// the optimum. A draw attains it exactly when its sorted counts equal the
/// canonical optimal allocation, so the check is exact integer comparison.
pub fn random_assignment_optimality_rate(
    n: u64,
    b: usize,
    batches: usize,
    seed: u64,
) -> Result<f64> {
    if batches == 0 {
        return Err(Error::Input("need at least one batch".into()));
    }
    let best = optimal_allocation(n, b)?;
    let masses = vec![1.0 / b as f64; b];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..batches {
        let mut counts = multinomial_draw(&mut rng, n, &masses);
        counts.sort_unstable();
        if counts == best.counts {
            hits += 1;
        }
    }
    Ok(hits as f64 / batches as f64)
}

/// Scaled integer distance to the fair share: `sum_b (B n_b - n)^2`, which
/// orders plane points exactly like `sum_b (n_b - n/B)^2`.
#[cfg(test)]
fn balance_cost(counts: &[u64], n: u64) -> u128 {
    let b = counts.len() as i128;
    counts
        .iter()
        .map(|&c| {
            let d = b * c as i128 - n as i128;
            (d * d) as u128
        })
        .sum()
}

/// Best integer allocation inside a per-leaf box.
///
/// Maximizes `prod_b n_b` subject to `sum n_b = n` and the box, equivalently
/// minimizing the quadratic imbalance around the fair share n/B; ties are
/// broken by the lexicographically smallest count vector. The solver starts
/// from the rounded fair share clipped into the box, repairs the total with
/// greedy unit steps, applies improving one-unit transfers to local
/// optimality (exact for this separable convex objective), and finishes with
/// cost-neutral transfers that push surplus toward later coordinates.
pub fn constrained_allocation(n: u64, bounds: &BoxConstraint) -> Result<Allocation> {
    let b = bounds.b();
    let lo_sum: u64 = bounds.lower.iter().sum();
    let hi_sum: u64 = bounds.upper.iter().sum();
    if n < lo_sum || n > hi_sum {
        return Err(Error::NoFeasibleAllocation);
    }

    let fair = (n as f64 / b as f64).round() as u64;
    let mut c: Vec<u64> = (0..b)
        .map(|i| fair.clamp(bounds.lower[i], bounds.upper[i]))
        .collect();

    // Marginal change in the scaled cost for one unit up or down at count x.
    let bb = b as i128;
    let up_cost = |x: u64| -> i128 {
        let x = x as i128;
        bb * bb * (2 * x + 1) - 2 * bb * n as i128
    };
    let down_cost = |x: u64| -> i128 {
        let x = x as i128;
        -(bb * bb) * (2 * x - 1) + 2 * bb * n as i128
    };

    let mut total: u64 = c.iter().sum();
    while total < n {
        let i = (0..b)
            .filter(|&i| c[i] < bounds.upper[i])
            .min_by_key(|&i| (up_cost(c[i]), std::cmp::Reverse(i)))
            .expect("feasibility was checked");
        c[i] += 1;
        total += 1;
    }
    while total > n {
        let i = (0..b)
            .filter(|&i| c[i] > bounds.lower[i])
            .min_by_key(|&i| down_cost(c[i]))
            .expect("feasibility was checked");
        c[i] -= 1;
        total -= 1;
    }

    // Improving one-unit transfers until local (hence global) optimality.
    loop {
        let mut best: Option<(i128, usize, usize)> = None;
        for j in 0..b {
            if c[j] == bounds.lower[j] {
                continue;
            }
            for i in 0..b {
                if i == j || c[i] == bounds.upper[i] {
                    continue;
                }
                let delta = up_cost(c[i]) + down_cost(c[j]);
                if delta < 0 && best.map_or(true, |(d, _, _)| delta < d) {
                    best = Some((delta, i, j));
                }
            }
        }
        match best {
            Some((_, i, j)) => {
                c[i] += 1;
                c[j] -= 1;
            }
            None => break,
        }
    }

    // Cost-neutral transfers (receiver exactly one below donor) toward the
    // lexicographically smallest optimal vector.
    for j in 0..b {
        'shrink: while c[j] > bounds.lower[j] {
            for i in j + 1..b {
                if c[i] + 1 == c[j] && c[i] < bounds.upper[i] {
                    c[i] += 1;
                    c[j] -= 1;
                    continue 'shrink;
                }
            }
            break;
        }
    }

    debug_assert_eq!(c.iter().sum::<u64>(), n);
    Allocation::new(c)
}

/// Worst-leaf criterion `max_b 1/n_b`; +inf when a leaf is empty.
pub fn minmax_criterion(alloc: &Allocation) -> f64 {
    alloc
        .counts
        .iter()
        .map(|&c| if c == 0 { f64::INFINITY } else { 1.0 / c as f64 })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Average-inverse criterion `sum_b 1/n_b`; +inf when a leaf is empty.
pub fn a_criterion(alloc: &Allocation) -> f64 {
    alloc
        .counts
        .iter()
        .map(|&c| if c == 0 { f64::INFINITY } else { 1.0 / c as f64 })
        .sum()
}

/// Exact rational value of [`a_criterion`]; `None` when a leaf is empty.
pub fn a_criterion_exact(alloc: &Allocation) -> Option<BigRational> {
    let mut acc = BigRational::new(BigInt::from(0u8), BigInt::from(1u8));
    for &c in &alloc.counts {
        if c == 0 {
            return None;
        }
        acc += BigRational::new(BigInt::from(1u8), BigInt::from(c));
    }
    Some(acc)
}

/// Product of measure masses over the depth-`kappa0` frontier of a tree:
/// nodes at depth exactly `kappa0`, plus terminals that end shallower and
/// so stand for their own region.
pub fn depth_constrained_criterion<F>(
    tree: &RegressionTree,
    kappa0: usize,
    measure: F,
) -> Result<f64>
where
    F: Fn(&Rectangle) -> f64,
{
    if kappa0 == 0 {
        return Ok(measure(&Rectangle::unit(tree.d())));
    }
    let order = tree.preorder();
    if !order.iter().any(|&i| tree.depth_of(i) == kappa0) {
        return Err(Error::Input(format!("tree has no nodes at depth {kappa0}")));
    }
    let mut product = 1.0;
    for &i in &order {
        let depth = tree.depth_of(i);
        let frontier = depth == kappa0 || (depth < kappa0 && tree.is_terminal(i));
        if frontier {
            product *= measure(&tree.rectangle_of(i)?);
        }
    }
    Ok(product)
}

/// One marginal distribution function for [`inverse_cdf_partition`].
pub struct MarginalCdf<'a> {
    /// Monotone nondecreasing distribution function.
    pub cdf: &'a dyn Fn(f64) -> f64,
    /// Interval on which to search; either end may be infinite.
    pub support: (f64, f64),
}

/// Per-dimension cut points splitting each marginal into `b0` cells of mass
/// `1/b0`, solved by bisection to an interval of width 1e-10. Jump or flat
/// regions at a target level are reported as numerical errors because the
/// quantile there is not unique.
pub fn inverse_cdf_partition(cdfs: &[MarginalCdf], b0: usize) -> Result<Vec<Vec<f64>>> {
    if b0 == 0 {
        return Err(Error::Input("need at least one cell per dimension".into()));
    }
    if cdfs.is_empty() {
        return Err(Error::Input("need at least one marginal".into()));
    }
    let mut out = Vec::with_capacity(cdfs.len());
    for (dim, marg) in cdfs.iter().enumerate() {
        let mut cuts = Vec::with_capacity(b0 - 1);
        for j in 1..b0 {
            let target = j as f64 / b0 as f64;
            cuts.push(invert_cdf(marg, target, dim)?);
        }
        out.push(cuts);
    }
    Ok(out)
}

fn invert_cdf(marg: &MarginalCdf, target: f64, dim: usize) -> Result<f64> {
    let (mut lo, mut hi) = marg.support;
    if !lo.is_finite() {
        lo = hi.is_finite().then_some(hi - 1.0).unwrap_or(-1.0);
        let mut span = 1.0;
        while (marg.cdf)(lo) > target {
            span *= 2.0;
            lo -= span;
            if span > 1e12 {
                return Err(Error::Numerical(format!(
                    "could not bracket quantile {target} below in dimension {dim}"
                )));
            }
        }
    }
    if !hi.is_finite() {
        hi = lo + 1.0;
        let mut span = 1.0;
        while (marg.cdf)(hi) < target {
            span *= 2.0;
            hi += span;
            if span > 1e12 {
                return Err(Error::Numerical(format!(
                    "could not bracket quantile {target} above in dimension {dim}"
                )));
            }
        }
    }
    if (marg.cdf)(lo) > target || (marg.cdf)(hi) < target {
        return Err(Error::Numerical(format!(
            "distribution function does not bracket quantile {target} in dimension {dim}"
        )));
    }
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if (marg.cdf)(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let x = 0.5 * (lo + hi);
    let f = (marg.cdf)(x);
    if (f - target).abs() > 1e-6 {
        return Err(Error::Numerical(format!(
            "distribution function jumps over level {target} in dimension {dim}"
        )));
    }
    let eps = 1e-6 * (1.0 + x.abs());
    if ((marg.cdf)(x + eps) - (marg.cdf)(x - eps)).abs() < 1e-14 {
        return Err(Error::Numerical(format!(
            "distribution function is flat at level {target} in dimension {dim}"
        )));
    }
    Ok(x)
}

/// Smoothness-calibrated aggregation weights for shards of sizes `n_b`:
/// `eps_b = n_b^(-alpha/(2 alpha + d)) * sqrt(log n_b)`, normalized to sum
/// to one. Equal shard sizes give exactly uniform weights.
pub fn optimal_weights(shard_sizes: &[u64], alpha: f64, d: usize) -> Result<Vec<f64>> {
    if shard_sizes.is_empty() {
        return Err(Error::Input("need at least one shard".into()));
    }
    if shard_sizes.iter().any(|&n| n < 2) {
        return Err(Error::Input("shard sizes must be at least 2".into()));
    }
    if !(alpha > 0.0) || d == 0 {
        return Err(Error::Input("need smoothness alpha > 0 and dimension d >= 1".into()));
    }
    if shard_sizes.windows(2).all(|w| w[0] == w[1]) {
        return Ok(vec![1.0 / shard_sizes.len() as f64; shard_sizes.len()]);
    }
    let rate = -alpha / (2.0 * alpha + d as f64);
    let eps: Vec<f64> = shard_sizes
        .iter()
        .map(|&n| (n as f64).powf(rate) * (n as f64).ln().sqrt())
        .collect();
    let total: f64 = eps.iter().sum();
    Ok(eps.iter().map(|e| e / total).collect())
}
