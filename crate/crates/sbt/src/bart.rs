//! Sum-of-trees regression sampler used as the per-shard sub-model.
//!
//! The model is y_i = sum_j g(x_i; T_j, M_j) + eps, eps ~ N(0, sigma2),
//! with independent N(0, tau^2) priors on every terminal value and a
//! branching-process prior on tree shapes. Terminal values integrate out
//! in closed form, so structure moves are scored by exact marginal
//! likelihoods on backfitting residuals; values and the noise variance are
//! then drawn from their conjugate posteriors.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use crate::data::Matrix;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, StreamDomain, ROOT_PATH};
use crate::tree::{Domain, Move, RegressionTree};

/// Prior probability that a node at a given depth splits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitPrior {
    /// Branching-process prior with p_split(depth) = alpha^(depth+1), so a
    /// root-only tree keeps mass 1 - alpha.
    GaltonWatson { alpha: f64 },
    /// Polynomial depth decay p_split(depth) = a / (1 + depth)^b.
    DepthDecay { a: f64, b: f64 },
}

impl SplitPrior {
    pub fn p_split(&self, depth: usize) -> f64 {
        match *self {
            SplitPrior::GaltonWatson { alpha } => alpha.powi(depth as i32 + 1),
            SplitPrior::DepthDecay { a, b } => a / (1.0 + depth as f64).powf(b),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            SplitPrior::GaltonWatson { alpha } => {
                if !(alpha > 0.0 && alpha < 0.5) {
                    return Err(Error::Input(format!(
                        "split probability base must lie in (0, 0.5), got {alpha}"
                    )));
                }
            }
            SplitPrior::DepthDecay { a, b } => {
                if !(a > 0.0 && a < 1.0) || !(b >= 0.0) {
                    return Err(Error::Input(format!(
                        "depth-decay prior needs a in (0,1), b >= 0, got ({a}, {b})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Log prior mass of a tree shape (split/stop terms only; rule terms
    /// are uniform and cancel in every ratio we form).
    pub fn log_tree_prior(&self, tree: &RegressionTree) -> f64 {
        let mut out = 0.0;
        for i in tree.preorder() {
            let p = self.p_split(tree.depth_of(i));
            if tree.is_terminal(i) {
                out += (1.0 - p).ln();
            } else {
                out += p.ln();
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct BartConfig {
    /// Number of trees in the sum.
    pub m: usize,
    /// Cutpoints per input dimension.
    pub numcut: usize,
    pub split_prior: SplitPrior,
    /// Terminal-value prior sd; `None` calibrates (max y - min y)/(2k sqrt(m))
    /// with k = 2 at fit time.
    pub tau: Option<f64>,
    /// Known noise sd; `None` samples sigma2 each sweep.
    pub sigma_fixed: Option<f64>,
    /// Noise-variance prior degrees of freedom.
    pub nu: f64,
    /// Noise-variance prior scale; `None` calibrates so the prior puts 90%
    /// mass below the sample variance.
    pub lambda: Option<f64>,
    /// Relative (birth, death) proposal weights.
    pub pbd: (f64, f64),
    /// Probability of a change-rule proposal.
    pub probchv: f64,
    /// Minimum observations per terminal node.
    pub min_leaf: usize,
}

impl Default for BartConfig {
    fn default() -> Self {
        BartConfig {
            m: 20,
            numcut: 100,
            split_prior: SplitPrior::GaltonWatson { alpha: 0.45 },
            tau: None,
            sigma_fixed: None,
            nu: 3.0,
            lambda: None,
            pbd: (0.5, 0.5),
            probchv: 0.1,
            min_leaf: 5,
        }
    }
}

impl BartConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::Input("need at least one tree".into()));
        }
        if self.numcut < 1 {
            return Err(Error::Input("need at least one cutpoint".into()));
        }
        self.split_prior.validate()?;
        let (b, d) = self.pbd;
        if !(0.0..=1.0).contains(&b) || !(0.0..=1.0).contains(&d) || b + d <= 0.0 {
            return Err(Error::Input(format!("birth/death weights ({b}, {d}) out of range")));
        }
        if !(0.0..=1.0).contains(&self.probchv) {
            return Err(Error::Input(format!("change probability {} out of range", self.probchv)));
        }
        if self.min_leaf < 1 {
            return Err(Error::Input("min_leaf must be at least 1".into()));
        }
        if let Some(t) = self.tau {
            if !(t > 0.0) {
                return Err(Error::Input(format!("tau must be positive, got {t}")));
            }
        }
        if let Some(s) = self.sigma_fixed {
            if !(s > 0.0) {
                return Err(Error::Input(format!("fixed sigma must be positive, got {s}")));
            }
        }
        if !(self.nu > 0.0) {
            return Err(Error::Input(format!("nu must be positive, got {}", self.nu)));
        }
        Ok(())
    }

    /// Probabilities of (grow, prune, change) proposals. Change takes
    /// `probchv`; birth/death split the rest by their relative weights.
    pub fn move_probs(&self) -> (f64, f64, f64) {
        let rest = 1.0 - self.probchv;
        let (b, d) = self.pbd;
        (rest * b / (b + d), rest * d / (b + d), self.probchv)
    }
}

/// Mutable sampler state: the forest, the noise variance, and fit caches.
#[derive(Clone, Debug)]
pub struct BartState {
    pub trees: Vec<RegressionTree>,
    pub sigma2: f64,
    /// Per-tree fitted value for every observation.
    fits: Vec<Vec<f64>>,
    /// Elementwise sum of `fits` in tree order.
    total_fit: Vec<f64>,
}

impl BartState {
    pub fn new(m: usize, domain: Arc<Domain>, n: usize, sigma2: f64) -> Result<Self> {
        if m < 1 || n < 1 {
            return Err(Error::Input("need m >= 1 trees and n >= 1 observations".into()));
        }
        if !(sigma2 > 0.0) {
            return Err(Error::Input(format!("sigma2 must be positive, got {sigma2}")));
        }
        let trees = vec![RegressionTree::root_only(domain, Some(0.0)); m];
        Ok(BartState {
            trees,
            sigma2,
            fits: vec![vec![0.0; n]; m],
            total_fit: vec![0.0; n],
        })
    }

    pub fn n(&self) -> usize {
        self.total_fit.len()
    }

    pub fn m(&self) -> usize {
        self.trees.len()
    }

    /// Current fitted values sum_j g(x_i; T_j).
    pub fn fitted(&self) -> &[f64] {
        &self.total_fit
    }

    /// Backfitting residual for one tree: y minus every other tree's fit.
    pub(crate) fn partial_residual(&self, j: usize, y: &[f64]) -> Vec<f64> {
        y.iter()
            .enumerate()
            .map(|(i, &yi)| yi - self.total_fit[i] + self.fits[j][i])
            .collect()
    }

    /// Re-evaluate every tree's fits, for a state put on new data. The
    /// caches are resized to the new row count, so a cloned state can move
    /// between data slices of different lengths.
    pub(crate) fn rebuild_caches(&mut self, x: &Matrix) -> Result<()> {
        let n = x.n_rows();
        for fit in &mut self.fits {
            fit.resize(n, 0.0);
        }
        self.total_fit.resize(n, 0.0);
        for j in 0..self.m() {
            self.refresh_tree(j, x)?;
        }
        Ok(())
    }

    /// Re-evaluate one tree's fits and rebuild the total in tree order.
    fn refresh_tree(&mut self, j: usize, x: &Matrix) -> Result<()> {
        for i in 0..x.n_rows() {
            self.fits[j][i] = self.trees[j].evaluate(x.row(i))?;
        }
        for i in 0..self.total_fit.len() {
            self.total_fit[i] = self.fits.iter().map(|f| f[i]).sum();
        }
        Ok(())
    }

    /// Recompute every cache from the trees and require exact agreement.
    pub fn check_consistency(&self, x: &Matrix) -> Result<()> {
        for (j, tree) in self.trees.iter().enumerate() {
            for i in 0..x.n_rows() {
                if tree.evaluate(x.row(i))? != self.fits[j][i] {
                    return Err(Error::State(format!(
                        "cached fit for tree {j}, row {i} is stale"
                    )));
                }
            }
        }
        for i in 0..self.total_fit.len() {
            let total: f64 = self.fits.iter().map(|f| f[i]).sum();
            if total != self.total_fit[i] {
                return Err(Error::State(format!("cached fit total for row {i} is stale")));
            }
        }
        Ok(())
    }
}

/// log of the integral of prod_i N(r_i; mu, sigma2) against N(mu; 0, tau^2).
pub fn log_marginal_likelihood(r: &[f64], sigma2: f64, tau: f64) -> Result<f64> {
    if r.is_empty() {
        return Err(Error::Input("marginal likelihood of an empty node".into()));
    }
    if !(sigma2 > 0.0) || !(tau > 0.0) {
        return Err(Error::Input(format!(
            "need sigma2 > 0 and tau > 0, got ({sigma2}, {tau})"
        )));
    }
    let n = r.len() as f64;
    let s1: f64 = r.iter().sum();
    let s2: f64 = r.iter().map(|v| v * v).sum();
    Ok(lml_from_stats(n, s1, s2, sigma2, tau))
}

/// Same integral from sufficient statistics (count, sum, sum of squares).
pub(crate) fn lml_from_stats(n: f64, s1: f64, s2: f64, sigma2: f64, tau: f64) -> f64 {
    let t2 = tau * tau;
    let denom = sigma2 + n * t2;
    -0.5 * n * (2.0 * PI * sigma2).ln() + 0.5 * (sigma2 / denom).ln() - s2 / (2.0 * sigma2)
        + t2 * s1 * s1 / (2.0 * sigma2 * denom)
}

#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct LeafStat {
    pub(crate) n: f64,
    pub(crate) s1: f64,
    pub(crate) s2: f64,
}

impl LeafStat {
    fn push(&mut self, r: f64) {
        self.n += 1.0;
        self.s1 += r;
        self.s2 += r * r;
    }

    pub(crate) fn lml(&self, sigma2: f64, tau: f64) -> f64 {
        lml_from_stats(self.n, self.s1, self.s2, sigma2, tau)
    }
}

/// Residual sufficient statistics per terminal node.
pub(crate) fn leaf_stats(
    tree: &RegressionTree,
    x: &Matrix,
    r: &[f64],
) -> Result<HashMap<usize, LeafStat>> {
    let mut stats: HashMap<usize, LeafStat> = HashMap::new();
    for i in 0..x.n_rows() {
        let leaf = tree.leaf_of(x.row(i))?;
        stats.entry(leaf).or_default().push(r[i]);
    }
    Ok(stats)
}

/// Indices of the observations routed through a given node.
fn node_members(tree: &RegressionTree, x: &Matrix, node: usize) -> Result<Vec<usize>> {
    let rect = tree.rectangle_of(node)?;
    let mut out = Vec::new();
    for i in 0..x.n_rows() {
        if rect.contains(x.row(i)) {
            out.push(i);
        }
    }
    Ok(out)
}

/// One structure proposal for one tree, scored on backfitting residuals.
/// Invalid draws (impossible kind, bad geometry, a side below `min_leaf`)
/// are automatic rejections. Returns whether the proposal was accepted.
pub fn mh_tree_update<R: Rng + ?Sized>(
    state: &mut BartState,
    j: usize,
    x: &Matrix,
    y: &[f64],
    config: &BartConfig,
    tau: f64,
    rng: &mut R,
) -> Result<bool> {
    let r = state.partial_residual(j, y);
    let sigma2 = state.sigma2;
    let tree = &state.trees[j];
    let domain = tree.domain().clone();
    let d = domain.d();

    let (pg, pp, pc) = config.move_probs();
    let coin: f64 = rng.random();

    let (proposal, log_ratio) = if coin < pg {
        // grow: split a uniformly chosen leaf with a uniform rule
        let leaves = tree.leaves();
        let leaf = leaves[rng.random_range(0..leaves.len())];
        let rule = domain.rule(rng.random_range(0..d), rng.random_range(0..config.numcut))?;
        let members = node_members(tree, x, leaf)?;
        let n_left = members
            .iter()
            .filter(|&&i| x.row(i)[rule.var] < rule.cut_value)
            .count();
        let n_right = members.len() - n_left;
        if n_left < config.min_leaf || n_right < config.min_leaf {
            return Ok(false);
        }
        let grown = match tree.mutate(&Move::Grow { leaf, rule }) {
            Ok(t) => t,
            Err(Error::Move(_)) | Err(Error::Input(_)) => return Ok(false),
            Err(e) => return Err(e),
        };

        let mut parent = LeafStat::default();
        let mut left = LeafStat::default();
        for &i in &members {
            parent.push(r[i]);
            if x.row(i)[rule.var] < rule.cut_value {
                left.push(r[i]);
            }
        }
        let right = LeafStat {
            n: parent.n - left.n,
            s1: parent.s1 - left.s1,
            s2: parent.s2 - left.s2,
        };

        let depth = tree.depth_of(leaf);
        let ps = config.split_prior.p_split(depth);
        let ps_child = config.split_prior.p_split(depth + 1);
        let log_prior = ps.ln() + 2.0 * (1.0 - ps_child).ln() - (1.0 - ps).ln();
        let log_lik = left.lml(sigma2, tau) + right.lml(sigma2, tau) - parent.lml(sigma2, tau);
        let log_prop = (pp / pg).ln() + (leaves.len() as f64).ln()
            - (grown.prunable_nodes().len() as f64).ln();
        (grown, log_prior + log_lik + log_prop)
    } else if coin < pg + pp {
        // prune: collapse a uniformly chosen node with two terminal children
        let prunable = tree.prunable_nodes();
        if prunable.is_empty() {
            return Ok(false);
        }
        let node = prunable[rng.random_range(0..prunable.len())];
        let (l, rgt) = tree.children(node).expect("prunable node is internal");
        let pruned = tree.mutate(&Move::Prune { internal: node })?;

        let members = node_members(tree, x, node)?;
        let left_rect = tree.rectangle_of(l)?;
        let mut parent = LeafStat::default();
        let mut left = LeafStat::default();
        for &i in &members {
            parent.push(r[i]);
            if left_rect.contains(x.row(i)) {
                left.push(r[i]);
            }
        }
        let right = LeafStat {
            n: parent.n - left.n,
            s1: parent.s1 - left.s1,
            s2: parent.s2 - left.s2,
        };
        let _ = rgt;

        let depth = tree.depth_of(node);
        let ps = config.split_prior.p_split(depth);
        let ps_child = config.split_prior.p_split(depth + 1);
        let log_prior = (1.0 - ps).ln() - ps.ln() - 2.0 * (1.0 - ps_child).ln();
        let log_lik = parent.lml(sigma2, tau) - left.lml(sigma2, tau) - right.lml(sigma2, tau);
        let log_prop = (pg / pp).ln() + (prunable.len() as f64).ln()
            - (pruned.n_leaves() as f64).ln();
        (pruned, log_prior + log_lik + log_prop)
    } else if coin < pg + pp + pc {
        // change: re-draw the rule of a node whose children are terminal
        let candidates = tree.prunable_nodes();
        if candidates.is_empty() {
            return Ok(false);
        }
        let node = candidates[rng.random_range(0..candidates.len())];
        let rule = domain.rule(rng.random_range(0..d), rng.random_range(0..config.numcut))?;
        let changed = match tree.mutate(&Move::Change { internal: node, rule }) {
            Ok(t) => t,
            Err(Error::Move(_)) | Err(Error::Input(_)) => return Ok(false),
            Err(e) => return Err(e),
        };

        let members = node_members(tree, x, node)?;
        let old_rule = tree.rule(node).expect("candidate is internal");
        let mut old_left = LeafStat::default();
        let mut new_left = LeafStat::default();
        let mut all = LeafStat::default();
        for &i in &members {
            let xi = x.row(i);
            all.push(r[i]);
            if xi[old_rule.var] < old_rule.cut_value {
                old_left.push(r[i]);
            }
            if xi[rule.var] < rule.cut_value {
                new_left.push(r[i]);
            }
        }
        let rest = |left: &LeafStat| LeafStat {
            n: all.n - left.n,
            s1: all.s1 - left.s1,
            s2: all.s2 - left.s2,
        };
        let (old_right, new_right) = (rest(&old_left), rest(&new_left));
        if (new_left.n as usize) < config.min_leaf || (new_right.n as usize) < config.min_leaf {
            return Ok(false);
        }
        let log_lik = new_left.lml(sigma2, tau) + new_right.lml(sigma2, tau)
            - old_left.lml(sigma2, tau)
            - old_right.lml(sigma2, tau);
        (changed, log_lik)
    } else {
        return Ok(false);
    };

    let u: f64 = rng.random();
    if u.ln() < log_ratio {
        state.trees[j] = proposal;
        state.refresh_tree(j, x)?;
        Ok(true)
    } else {
        Ok(false)
    }
}

/// Redraw every terminal value of one tree from its conjugate posterior
/// N(tau^2 S1 / (sigma2 + n tau^2), sigma2 tau^2 / (sigma2 + n tau^2)).
pub fn draw_terminal_mus<R: Rng + ?Sized>(
    state: &mut BartState,
    j: usize,
    x: &Matrix,
    y: &[f64],
    tau: f64,
    rng: &mut R,
) -> Result<()> {
    let r = state.partial_residual(j, y);
    let stats = leaf_stats(&state.trees[j], x, &r)?;
    let sigma2 = state.sigma2;
    let t2 = tau * tau;
    for leaf in state.trees[j].leaves() {
        let stat = stats.get(&leaf).copied().unwrap_or_default();
        let denom = sigma2 + stat.n * t2;
        let (mean, var) = if stat.n == 0.0 {
            (0.0, t2)
        } else {
            (t2 * stat.s1 / denom, sigma2 * t2 / denom)
        };
        let z: f64 = StandardNormal.sample(rng);
        state.trees[j].set_mu(leaf, mean + var.sqrt() * z)?;
    }
    state.refresh_tree(j, x)
}

/// Draw sigma2 from its scaled inverse chi-square posterior with
/// `nu + n` degrees of freedom and scale `(nu lambda + sum e_i^2)/(nu + n)`
/// on full-model residuals. A fixed-noise config leaves the state (and the
/// RNG) untouched.
pub fn draw_sigma2<R: Rng + ?Sized>(
    state: &mut BartState,
    y: &[f64],
    config: &BartConfig,
    lambda: f64,
    rng: &mut R,
) -> Result<()> {
    if config.sigma_fixed.is_some() {
        return Ok(());
    }
    let sse: f64 = y
        .iter()
        .zip(state.fitted())
        .map(|(&yi, &fi)| (yi - fi) * (yi - fi))
        .sum();
    let df = config.nu + y.len() as f64;
    let chi2 = Gamma::new(df / 2.0, 2.0)
        .map_err(|e| Error::Numerical(format!("chi-square draw failed: {e}")))?
        .sample(rng);
    if !(chi2 > 0.0) {
        return Err(Error::Numerical("degenerate chi-square draw".into()));
    }
    state.sigma2 = (config.nu * lambda + sse) / chi2;
    Ok(())
}

/// One full sweep: a structure proposal and value redraw per tree, then a
/// noise-variance draw. Returns how many of the `m` structure proposals
/// were accepted.
pub fn bart_sweep<R: Rng + ?Sized>(
    state: &mut BartState,
    x: &Matrix,
    y: &[f64],
    config: &BartConfig,
    tau: f64,
    lambda: f64,
    rng: &mut R,
) -> Result<u32> {
    let mut accepted = 0;
    for j in 0..state.m() {
        if mh_tree_update(state, j, x, y, config, tau, rng)? {
            accepted += 1;
        }
        draw_terminal_mus(state, j, x, y, tau, rng)?;
    }
    draw_sigma2(state, y, config, lambda, rng)?;
    Ok(accepted)
}

/// One retained posterior draw.
#[derive(Clone, Debug)]
pub struct BartSample {
    pub trees: Vec<RegressionTree>,
    pub sigma2: f64,
}

/// Posterior sample sequence plus the fit-time calibrations needed to
/// reproduce predictions on the original response scale.
#[derive(Clone, Debug)]
pub struct BartFit {
    pub samples: Vec<BartSample>,
    /// Response mean subtracted before fitting.
    pub offset: f64,
    pub tau: f64,
    pub lambda: f64,
}

pub(crate) fn resolve_tau(config: &BartConfig, y_centered: &[f64]) -> f64 {
    if let Some(t) = config.tau {
        return t;
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in y_centered {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    if range > 0.0 {
        range / (4.0 * (config.m as f64).sqrt())
    } else {
        1.0
    }
}

pub(crate) fn resolve_lambda(config: &BartConfig, y_centered: &[f64]) -> Result<f64> {
    if let Some(l) = config.lambda {
        if !(l > 0.0) {
            return Err(Error::Input(format!("lambda must be positive, got {l}")));
        }
        return Ok(l);
    }
    let n = y_centered.len() as f64;
    let var = y_centered.iter().map(|v| v * v).sum::<f64>() / n.max(2.0 - 1.0);
    let chi = ChiSquared::new(config.nu)
        .map_err(|e| Error::Input(format!("invalid nu for noise prior: {e}")))?;
    Ok((var * chi.inverse_cdf(0.1) / config.nu).max(1e-12))
}

pub(crate) fn centered_response(y: &[f64]) -> Result<(Vec<f64>, f64)> {
    if y.is_empty() {
        return Err(Error::Input("empty response".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("response contains non-finite values".into()));
    }
    let offset = y.iter().sum::<f64>() / y.len() as f64;
    Ok((y.iter().map(|v| v - offset).collect(), offset))
}

/// Run the sampler and keep the states after burn-in. Each iteration draws
/// from its own seed-derived stream, so output is reproducible bit for bit.
pub fn bart_fit(
    x: &Matrix,
    y: &[f64],
    config: &BartConfig,
    n_mcmc: usize,
    burn: usize,
    seed: u64,
) -> Result<BartFit> {
    config.validate()?;
    if x.n_rows() != y.len() {
        return Err(Error::Input(format!(
            "{} rows of predictors but {} responses",
            x.n_rows(),
            y.len()
        )));
    }
    if x.n_rows() < config.min_leaf {
        return Err(Error::Input(format!(
            "need at least min_leaf = {} observations, got {}",
            config.min_leaf,
            x.n_rows()
        )));
    }
    if burn >= n_mcmc {
        return Err(Error::Input(format!(
            "burn-in {burn} must be shorter than the run length {n_mcmc}"
        )));
    }
    let (yc, offset) = centered_response(y)?;
    let tau = resolve_tau(config, &yc);
    let lambda = resolve_lambda(config, &yc)?;
    let sigma2 = match config.sigma_fixed {
        Some(s) => s * s,
        None => (yc.iter().map(|v| v * v).sum::<f64>() / yc.len() as f64).max(1e-12),
    };
    let domain = Domain::equispaced(x.n_cols(), config.numcut)?;
    let mut state = BartState::new(config.m, domain, x.n_rows(), sigma2)?;

    let mut samples = Vec::with_capacity(n_mcmc - burn);
    for it in 0..n_mcmc {
        let mut rng = stream_rng(seed, StreamDomain::Shard, ROOT_PATH, it as u64);
        bart_sweep(&mut state, x, &yc, config, tau, lambda, &mut rng)?;
        if (it + 1) % 100 == 0 {
            state.check_consistency(x)?;
        }
        if it >= burn {
            samples.push(BartSample { trees: state.trees.clone(), sigma2: state.sigma2 });
        }
    }
    Ok(BartFit { samples, offset, tau, lambda })
}

/// Sum of tree fits for one sample at one point (centered scale).
pub fn sample_value(sample: &BartSample, x_row: &[f64]) -> Result<f64> {
    let mut out = 0.0;
    for tree in &sample.trees {
        out += tree.evaluate(x_row)?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct PredictionSummary {
    pub mean: f64,
    /// 2.5% empirical quantile over posterior draws.
    pub lo: f64,
    /// 97.5% empirical quantile over posterior draws.
    pub hi: f64,
}

/// Nearest-rank empirical quantile; reorders the slice in place.
pub(crate) fn quantile_nearest(values: &mut [f64], q: f64) -> f64 {
    debug_assert!(!values.is_empty() && (0.0..=1.0).contains(&q));
    let n = values.len();
    let rank = (q * n as f64).ceil() as usize;
    let idx = rank.max(1).min(n) - 1;
    let (_, v, _) = values.select_nth_unstable_by(idx, |a, b| a.total_cmp(b));
    *v
}

/// Posterior mean and central 95% interval at each grid point.
pub fn bart_predict(fit: &BartFit, grid: &Matrix) -> Result<Vec<PredictionSummary>> {
    if fit.samples.is_empty() {
        return Err(Error::Input("no posterior samples to predict from".into()));
    }
    let mut out = Vec::with_capacity(grid.n_rows());
    let mut draws = vec![0.0; fit.samples.len()];
    for i in 0..grid.n_rows() {
        for (s, sample) in fit.samples.iter().enumerate() {
            draws[s] = fit.offset + sample_value(sample, grid.row(i))?;
        }
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let lo = quantile_nearest(&mut draws, 0.025);
        let hi = quantile_nearest(&mut draws, 0.975);
        out.push(PredictionSummary { mean, lo, hi });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::ROOT;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn column_matrix(xs: &[f64]) -> Matrix {
        Matrix::new(xs.to_vec(), xs.len(), 1).unwrap()
    }

    fn log_normal_pdf(v: f64, mean: f64, var: f64) -> f64 {
        -0.5 * (2.0 * PI * var).ln() - (v - mean) * (v - mean) / (2.0 * var)
    }

    /// Simpson-rule quadrature of the value-integral on a wide bracket.
    fn lml_quadrature(r: &[f64], sigma2: f64, tau: f64) -> f64 {
        let n = r.len() as f64;
        let mean: f64 = r.iter().sum::<f64>() / n;
        let width = 12.0 * (tau + sigma2.sqrt());
        let (lo, hi) = (mean - width, mean + width);
        let steps = 40_000usize;
        let h = (hi - lo) / steps as f64;
        let integrand = |mu: f64| -> f64 {
            let log_f = r
                .iter()
                .map(|&ri| log_normal_pdf(ri, mu, sigma2))
                .sum::<f64>()
                + log_normal_pdf(mu, 0.0, tau * tau);
            log_f.exp()
        };
        let mut acc = integrand(lo) + integrand(hi);
        for k in 1..steps {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * integrand(lo + k as f64 * h);
        }
        (acc * h / 3.0).ln()
    }

    #[test]
    fn marginal_likelihood_single_observation() {
        // one observation integrates to N(r; 0, sigma2 + tau^2)
        let got = log_marginal_likelihood(&[1.0], 1.0, 1.0).unwrap();
        let want = -0.5 * (4.0 * PI).ln() - 0.25;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn marginal_likelihood_small_tau_collapses_to_zero_mean() {
        let r = [0.3, -0.7, 1.1];
        let got = log_marginal_likelihood(&r, 0.8, 1e-8).unwrap();
        let want: f64 = r.iter().map(|&v| log_normal_pdf(v, 0.0, 0.8)).sum();
        assert!((got - want).abs() < 1e-6);
    }

    #[test]
    fn marginal_likelihood_matches_quadrature() {
        let cases: [(&[f64], f64, f64); 4] = [
            (&[0.5, -1.2, 0.9, 0.1], 1.0, 0.3),
            (&[2.0, 1.8, 2.2], 0.5, 1.0),
            (&[-0.4], 2.0, 0.7),
            (&[1.0, 1.0, -1.0, -1.0, 0.25, 0.5], 0.9, 0.45),
        ];
        for (r, sigma2, tau) in cases {
            let got = log_marginal_likelihood(r, sigma2, tau).unwrap();
            let want = lml_quadrature(r, sigma2, tau);
            assert!((got - want).abs() < 1e-8, "got {got}, quadrature {want}");
        }
        assert!(log_marginal_likelihood(&[], 1.0, 1.0).is_err());
    }

    #[test]
    fn change_to_identical_rule_always_accepts() {
        // d=1, numcut=1 forces every drawn rule to be the single cutpoint,
        // so a change proposal is always the identity and must accept.
        let x = column_matrix(&[0.1, 0.2, 0.3, 0.7, 0.8, 0.9]);
        let y = vec![0.0, 0.1, -0.1, 1.0, 1.1, 0.9];
        let config = BartConfig {
            m: 1,
            numcut: 1,
            probchv: 1.0,
            pbd: (0.0, 0.0),
            min_leaf: 1,
            sigma_fixed: Some(1.0),
            tau: Some(1.0),
            ..BartConfig::default()
        };
        assert!(config.validate().is_err(), "pbd must not sum to zero");
        let config = BartConfig { pbd: (0.5, 0.5), ..config };
        config.validate().unwrap();

        let domain = Domain::equispaced(1, 1).unwrap();
        let mut state = BartState::new(1, domain.clone(), x.n_rows(), 1.0).unwrap();
        state.trees[0]
            .apply_move(&Move::Grow { leaf: ROOT, rule: domain.rule(0, 0).unwrap() })
            .unwrap();
        state.refresh_tree(0, &x).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let accepted = mh_tree_update(&mut state, 0, &x, &y, &config, 1.0, &mut rng).unwrap();
            assert!(accepted);
            assert_eq!(state.trees[0].n_leaves(), 2);
        }
    }

    #[test]
    fn single_observation_grow_always_rejects() {
        let x = column_matrix(&[0.4]);
        let y = vec![1.0];
        let config = BartConfig {
            m: 1,
            numcut: 100,
            probchv: 0.0,
            min_leaf: 1,
            sigma_fixed: Some(1.0),
            tau: Some(1.0),
            ..BartConfig::default()
        };
        let domain = Domain::equispaced(1, 100).unwrap();
        let mut state = BartState::new(1, domain, 1, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let accepted = mh_tree_update(&mut state, 0, &x, &y, &config, 1.0, &mut rng).unwrap();
            assert!(!accepted);
            assert_eq!(state.trees[0].n_leaves(), 1);
        }
    }

    #[test]
    fn two_state_chain_matches_enumerated_posterior() {
        // d=1, numcut=1: the only trees reachable are the root-only tree and
        // the single split at 0.5. The chain's visit ratio must match the
        // posterior odds computed by direct enumeration.
        let n = 16;
        let xs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let x = column_matrix(&xs);
        let y: Vec<f64> = xs.iter().map(|&v| if v < 0.5 { -0.22 } else { 0.22 }).collect();
        let (sigma2, tau) = (0.25f64, 0.5);
        let alpha = 0.45f64;
        let config = BartConfig {
            m: 1,
            numcut: 1,
            split_prior: SplitPrior::GaltonWatson { alpha },
            probchv: 0.0,
            pbd: (0.5, 0.5),
            min_leaf: 1,
            sigma_fixed: Some(sigma2.sqrt()),
            tau: Some(tau),
            ..BartConfig::default()
        };

        // enumeration: p(T) L(T) for both states (rule mass cancels)
        let left: Vec<f64> = y[..n / 2].to_vec();
        let right: Vec<f64> = y[n / 2..].to_vec();
        let p0 = 1.0 - alpha;
        let p1 = alpha * (1.0 - alpha * alpha) * (1.0 - alpha * alpha);
        let l0 = log_marginal_likelihood(&y, sigma2, tau).unwrap();
        let l1 = log_marginal_likelihood(&left, sigma2, tau).unwrap()
            + log_marginal_likelihood(&right, sigma2, tau).unwrap();
        let odds = (p1.ln() + l1 - p0.ln() - l0).exp();
        assert!(odds > 0.3 && odds < 3.0, "toy problem should be balanced, odds {odds}");

        let domain = Domain::equispaced(1, 1).unwrap();
        let mut state = BartState::new(1, domain, n, sigma2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let iters = 100_000;
        let mut split_visits = 0usize;
        for _ in 0..iters {
            mh_tree_update(&mut state, 0, &x, &y, &config, tau, &mut rng).unwrap();
            if state.trees[0].n_leaves() == 2 {
                split_visits += 1;
            }
        }
        let pi1 = split_visits as f64 / iters as f64;
        let empirical_odds = pi1 / (1.0 - pi1);
        let rel = (empirical_odds - odds).abs() / odds;
        assert!(rel < 0.02, "empirical odds {empirical_odds}, enumerated {odds}");
    }

    #[test]
    fn terminal_value_posterior_moments() {
        let x = column_matrix(&[0.1, 0.3, 0.6, 0.9]);
        let y = vec![2.0, 2.0, 2.0, 2.0];
        let domain = Domain::equispaced(1, 10).unwrap();

        // flat-prior limit recovers the sample mean (tiny noise variance
        // keeps the draw itself within the tolerance)
        let mut state = BartState::new(1, domain.clone(), 4, 1e-8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        draw_terminal_mus(&mut state, 0, &x, &y, 1e3, &mut rng).unwrap();
        let mu = state.trees[0].evaluate(&[0.5]).unwrap();
        assert!((mu - 2.0).abs() < 1e-3, "near-flat prior mean, got {mu}");

        // as the noise variance blows up the prior dominates and draws
        // average to zero (each one is still spread like the prior)
        let mut state = BartState::new(1, domain.clone(), 4, 1e6).unwrap();
        let reps = 50_000;
        let mut avg = 0.0;
        for _ in 0..reps {
            draw_terminal_mus(&mut state, 0, &x, &y, 1.0, &mut rng).unwrap();
            avg += state.trees[0].evaluate(&[0.5]).unwrap();
        }
        avg /= reps as f64;
        let se = 1.0 / (reps as f64).sqrt();
        assert!(avg.abs() < 3.0 * se, "prior-dominated draws should center at zero, got {avg}");

        // moment check against the closed form
        let (sigma2, tau) = (1.0, 1.0);
        let nn = 4.0;
        let want_mean = tau * tau * 8.0 / (sigma2 + nn * tau * tau);
        let want_var = sigma2 * tau * tau / (sigma2 + nn * tau * tau);
        let draws = 100_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        let mut state = BartState::new(1, domain, 4, sigma2).unwrap();
        for _ in 0..draws {
            draw_terminal_mus(&mut state, 0, &x, &y, tau, &mut rng).unwrap();
            let v = state.trees[0].evaluate(&[0.5]).unwrap();
            acc += v;
            acc2 += v * v;
        }
        let mean = acc / draws as f64;
        let var = acc2 / draws as f64 - mean * mean;
        let se_mean = want_var.sqrt() / (draws as f64).sqrt();
        let se_var = want_var * (2.0 / (draws as f64 - 1.0)).sqrt();
        assert!((mean - want_mean).abs() < 3.0 * se_mean, "mean {mean} vs {want_mean}");
        assert!((var - want_var).abs() < 3.0 * se_var, "var {var} vs {want_var}");
    }

    #[test]
    fn fixed_noise_skips_the_draw_and_the_rng() {
        let y = vec![0.5, -0.5, 0.25, -0.25];
        let domain = Domain::equispaced(1, 10).unwrap();
        let mut state = BartState::new(1, domain, 4, 0.04).unwrap();
        let config = BartConfig { sigma_fixed: Some(0.2), ..BartConfig::default() };

        let mut rng = ChaCha8Rng::seed_from_u64(33);
        draw_sigma2(&mut state, &y, &config, 1.0, &mut rng).unwrap();
        assert_eq!(state.sigma2, 0.04);
        let after: f64 = rng.random();
        let fresh: f64 = ChaCha8Rng::seed_from_u64(33).random();
        assert_eq!(after, fresh, "a fixed-noise draw must not consume randomness");
    }

    #[test]
    fn sampled_noise_concentrates_on_truth() {
        // residuals are pure N(0, 0.01) noise around a zero fit
        let n = 2000;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.1 * z
            })
            .collect();
        let domain = Domain::equispaced(1, 10).unwrap();
        let mut state = BartState::new(1, domain, n, 1.0).unwrap();
        let config = BartConfig { nu: 3.0, ..BartConfig::default() };
        for _ in 0..50 {
            draw_sigma2(&mut state, &y, &config, 0.01, &mut rng).unwrap();
            let sigma = state.sigma2.sqrt();
            assert!((sigma - 0.1).abs() < 0.02, "draw {sigma} strayed from 0.1");
        }
    }

    #[test]
    fn constant_response_is_recovered() {
        let n = 50;
        let xs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let x = column_matrix(&xs);
        let y = vec![3.0; n];
        let config = BartConfig {
            m: 5,
            numcut: 20,
            sigma_fixed: Some(0.05),
            min_leaf: 5,
            ..BartConfig::default()
        };
        let fit = bart_fit(&x, &y, &config, 300, 100, 4).unwrap();
        assert_eq!(fit.samples.len(), 200);
        let grid = column_matrix(&[0.05, 0.5, 0.95]);
        for p in bart_predict(&fit, &grid).unwrap() {
            assert!((p.mean - 3.0).abs() < 0.03 * 3.0 + 0.05, "mean {}", p.mean);
        }
    }

    #[test]
    fn step_function_held_out_rmse() {
        let n = 500;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = xs
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                f64::from(v > 0.5) + 0.01 * z
            })
            .collect();
        let x = column_matrix(&xs);
        let config = BartConfig {
            m: 10,
            numcut: 100,
            sigma_fixed: Some(0.01),
            ..BartConfig::default()
        };
        let fit = bart_fit(&x, &y, &config, 400, 200, 7).unwrap();

        let n_test = 200;
        let grid_xs: Vec<f64> = (0..n_test).map(|i| (i as f64 + 0.5) / n_test as f64).collect();
        let grid = column_matrix(&grid_xs);
        let preds = bart_predict(&fit, &grid).unwrap();
        let mse: f64 = preds
            .iter()
            .zip(&grid_xs)
            .map(|(p, &v)| {
                let truth = f64::from(v > 0.5);
                (p.mean - truth) * (p.mean - truth)
            })
            .sum::<f64>()
            / n_test as f64;
        assert!(mse.sqrt() < 0.1, "held-out rmse {}", mse.sqrt());
    }

    #[test]
    fn same_seed_reproduces_the_sample_sequence() {
        let n = 60;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = xs.iter().map(|&v| (6.0 * v).sin()).collect();
        let x = column_matrix(&xs);
        let config = BartConfig { m: 4, numcut: 30, ..BartConfig::default() };
        let a = bart_fit(&x, &y, &config, 80, 40, 99).unwrap();
        let b = bart_fit(&x, &y, &config, 80, 40, 99).unwrap();
        assert_eq!(a.samples.len(), b.samples.len());
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.sigma2.to_bits(), sb.sigma2.to_bits());
            assert_eq!(sa.trees, sb.trees);
        }
        assert_eq!(a.offset, b.offset);
    }

    #[test]
    fn fit_input_validation() {
        let x = column_matrix(&[0.1, 0.2, 0.3]);
        let y = vec![1.0, 2.0, 3.0];
        let config = BartConfig { min_leaf: 5, ..BartConfig::default() };
        assert!(bart_fit(&x, &y, &config, 10, 5, 0).is_err(), "n below min_leaf");
        let config = BartConfig { min_leaf: 1, ..BartConfig::default() };
        assert!(bart_fit(&x, &y[..2].to_vec(), &config, 10, 5, 0).is_err(), "length mismatch");
        assert!(bart_fit(&x, &y, &config, 10, 10, 0).is_err(), "burn too long");
    }

    #[test]
    fn predict_degenerate_and_symmetric_cases() {
        let domain = Domain::equispaced(1, 3).unwrap();
        let mut up = RegressionTree::root_only(domain.clone(), Some(1.25));
        let mut down = RegressionTree::root_only(domain.clone(), Some(-1.25));
        up.set_mu(ROOT, 1.25).unwrap();
        down.set_mu(ROOT, -1.25).unwrap();

        let one = BartFit {
            samples: vec![BartSample { trees: vec![up.clone()], sigma2: 1.0 }],
            offset: 0.5,
            tau: 1.0,
            lambda: 1.0,
        };
        let grid = column_matrix(&[0.3]);
        let p = bart_predict(&one, &grid).unwrap()[0];
        assert_eq!(p.mean, 1.75);
        assert_eq!(p.lo, 1.75);
        assert_eq!(p.hi, 1.75);

        let two = BartFit {
            samples: vec![
                BartSample { trees: vec![up], sigma2: 1.0 },
                BartSample { trees: vec![down], sigma2: 1.0 },
            ],
            offset: 0.0,
            tau: 1.0,
            lambda: 1.0,
        };
        let p = bart_predict(&two, &grid).unwrap()[0];
        assert_eq!(p.mean, 0.0);
        assert_eq!(p.lo, -1.25);
        assert_eq!(p.hi, 1.25);

        let empty = BartFit { samples: vec![], offset: 0.0, tau: 1.0, lambda: 1.0 };
        assert!(bart_predict(&empty, &grid).is_err());
    }

    #[test]
    fn quantile_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for trial in 0..200 {
            let n = rng.random_range(1..=60);
            let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
            for q in [0.025, 0.25, 0.5, 0.975] {
                let mut sorted = values.clone();
                sorted.sort_by(|a, b| a.total_cmp(b));
                let rank = (q * n as f64).ceil() as usize;
                let want = sorted[rank.max(1).min(n) - 1];
                let got = quantile_nearest(&mut values.clone(), q);
                assert_eq!(got, want, "trial {trial}, n {n}, q {q}");
            }
        }
    }

    #[test]
    fn caches_stay_consistent_through_a_run() {
        let n = 120;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = xs
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (4.0 * v).cos() + 0.1 * z
            })
            .collect();
        let x = column_matrix(&xs);
        let config = BartConfig { m: 6, numcut: 25, min_leaf: 2, ..BartConfig::default() };
        let (yc, _) = centered_response(&y).unwrap();
        let tau = resolve_tau(&config, &yc);
        let lambda = resolve_lambda(&config, &yc).unwrap();
        let domain = Domain::equispaced(1, config.numcut).unwrap();
        let mut state = BartState::new(config.m, domain, n, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..60 {
            bart_sweep(&mut state, &x, &yc, &config, tau, lambda, &mut rng).unwrap();
            state.check_consistency(&x).unwrap();
            for tree in &state.trees {
                tree.validate().unwrap();
            }
        }
    }
}
