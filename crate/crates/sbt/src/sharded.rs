//! The sharded model: an auxiliary coordinate u per observation, a
//! sharding tree splitting only on u, and an independent sum-of-trees
//! model on each sharding leaf.
//!
//! The auxiliary values are drawn once up front and never resampled.
//! Fitting interleaves an optional sharding-tree move with one sweep per
//! shard; the sweeps touch disjoint state and run in parallel, each on an
//! RNG stream addressed by (shard leaf path, iteration) so results do not
//! depend on the worker count. Prediction routes a fresh u* draw through
//! each retained sharding tree and evaluates the selected shard's forest.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::bart::{
    bart_sweep, centered_response, leaf_stats, resolve_lambda, resolve_tau, sample_value,
    BartConfig, BartSample, BartState, PredictionSummary,
};
use crate::bart::quantile_nearest;
use crate::data::Matrix;
use crate::design;
use crate::error::{Error, Result};
use crate::rng::{child_path, stream_rng, StreamDomain, ROOT_PATH};
use crate::tree::{Domain, Move, RegressionTree, ROOT};

/// How the auxiliary coordinate is assigned to observations.
pub enum AuxMode<'a> {
    /// iid Unif(0,1) draws.
    Uniform,
    /// Contiguous equal blocks: observation i joins block floor(i B / n)
    /// and takes the block midpoint as u. With `permuted`, block
    /// membership follows a seeded random permutation instead of dataset
    /// order.
    Blocks { n_blocks: usize, permuted: bool },
    /// A fixed map from the predictors, u_i = rule(x_i).
    Rule(&'a (dyn Fn(&[f64]) -> f64 + Sync)),
}

/// Frozen auxiliary coordinates, one per observation.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxAssignment {
    u: Vec<f64>,
}

impl AuxAssignment {
    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

/// Assign auxiliary coordinates. Drawn once per run and held fixed.
pub fn init_aux(x: &Matrix, mode: &AuxMode, seed: u64) -> Result<AuxAssignment> {
    let n = x.n_rows();
    let u = match mode {
        AuxMode::Uniform => {
            let mut rng = stream_rng(seed, StreamDomain::Aux, 0, 0);
            (0..n).map(|_| rng.random()).collect()
        }
        AuxMode::Blocks { n_blocks, permuted } => {
            if *n_blocks < 1 {
                return Err(Error::Input("need at least one block".into()));
            }
            let mut order: Vec<usize> = (0..n).collect();
            if *permuted {
                let mut rng = stream_rng(seed, StreamDomain::Aux, 0, 0);
                order.shuffle(&mut rng);
            }
            let mut u = vec![0.0; n];
            for (pos, &i) in order.iter().enumerate() {
                let block = pos * n_blocks / n.max(1);
                u[i] = (block as f64 + 0.5) / *n_blocks as f64;
            }
            u
        }
        AuxMode::Rule(f) => {
            let mut u = Vec::with_capacity(n);
            for i in 0..n {
                let v = f(x.row(i));
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Input(format!(
                        "auxiliary rule produced {v} outside [0,1] at row {i}"
                    )));
                }
                u.push(v);
            }
            u
        }
    };
    Ok(AuxAssignment { u })
}

/// Tree over the auxiliary axis only. Its leaves are the shards.
#[derive(Clone, Debug, PartialEq)]
pub struct ShardingTree {
    tree: RegressionTree,
    shardepth: usize,
}

impl ShardingTree {
    /// Single-shard tree.
    pub fn root_only(numcut: usize, shardepth: usize) -> Result<Self> {
        let domain = Domain::equispaced(1, numcut)?;
        Ok(ShardingTree {
            tree: RegressionTree::root_only(domain, Some(0.0)),
            shardepth,
        })
    }

    /// Fully balanced tree of depth `shardepth`: every node splits at the
    /// grid cut nearest its interval midpoint.
    pub fn balanced(numcut: usize, shardepth: usize) -> Result<Self> {
        let mut out = Self::root_only(numcut, shardepth)?;
        let domain = out.tree.domain().clone();
        let mut frontier = vec![ROOT];
        for _ in 0..shardepth {
            let mut next = Vec::new();
            for leaf in frontier {
                let rect = out.tree.rectangle_of(leaf)?;
                let (lo, hi) = (rect.lower[0], rect.upper[0]);
                let mid = 0.5 * (lo + hi);
                let mut best: Option<(f64, usize)> = None;
                for k in 0..numcut {
                    let cut = domain.rule(0, k)?.cut_value;
                    if cut <= lo || cut >= hi {
                        continue;
                    }
                    let gap = (cut - mid).abs();
                    if best.map_or(true, |(g, _)| gap < g) {
                        best = Some((gap, k));
                    }
                }
                let (_, k) = best.ok_or_else(|| {
                    Error::Input(format!(
                        "no cutpoint available to split the sharding interval [{lo}, {hi}); \
                         increase numcut or lower shardepth"
                    ))
                })?;
                out.tree.apply_move(&Move::Grow { leaf, rule: domain.rule(0, k)? })?;
                let (l, r) = out.tree.children(leaf).expect("just grew");
                next.push(l);
                next.push(r);
            }
            frontier = next;
        }
        Ok(out)
    }

    pub fn tree(&self) -> &RegressionTree {
        &self.tree
    }

    pub fn shardepth(&self) -> usize {
        self.shardepth
    }

    pub fn n_shards(&self) -> usize {
        self.tree.n_leaves()
    }

    /// Leaves in preorder with their root-anchored paths (left = 0 bit).
    pub fn leaf_paths(&self) -> Vec<(usize, u64)> {
        let mut out = Vec::new();
        let mut stack = vec![(ROOT, ROOT_PATH)];
        while let Some((i, path)) = stack.pop() {
            match self.tree.children(i) {
                Some((l, r)) => {
                    stack.push((r, child_path(path, true)));
                    stack.push((l, child_path(path, false)));
                }
                None => out.push((i, path)),
            }
        }
        out
    }

    /// Leaf holding a given auxiliary value.
    pub fn shard_of(&self, u: f64) -> Result<usize> {
        self.tree.leaf_of(&[u])
    }
}

/// Per-observation shard membership: `index[i]` is a position in the
/// preorder leaf list.
pub fn shard_partition(sharding: &ShardingTree, aux: &AuxAssignment) -> Result<Vec<Vec<usize>>> {
    let leaves = sharding.leaf_paths();
    let mut sets: Vec<Vec<usize>> = vec![Vec::new(); leaves.len()];
    for (i, &u) in aux.u().iter().enumerate() {
        let leaf = sharding.shard_of(u)?;
        let pos = leaves
            .iter()
            .position(|&(id, _)| id == leaf)
            .ok_or_else(|| Error::State(format!("leaf {leaf} missing from leaf list")))?;
        sets[pos].push(i);
    }
    Ok(sets)
}

/// Configuration for the sharded fit: the per-shard sampler settings plus
/// the sharding-tree controls.
#[derive(Clone, Debug)]
pub struct SbtConfig {
    pub bart: BartConfig,
    /// Maximum sharding-tree depth (0 disables sharding).
    pub shardepth: usize,
    /// Minimum observations per shard.
    pub n_min: usize,
    /// Split-probability base of the sharding-tree prior. At the default
    /// 1.0 the sharding tree is frozen fully balanced at `shardepth`; below
    /// 1.0 it is sampled by birth/death moves under this prior.
    pub shardpsplit: f64,
}

impl Default for SbtConfig {
    fn default() -> Self {
        SbtConfig {
            bart: BartConfig::default(),
            shardepth: 2,
            n_min: 10,
            shardpsplit: 1.0,
        }
    }
}

impl SbtConfig {
    pub fn validate(&self) -> Result<()> {
        self.bart.validate()?;
        if self.shardepth > 16 {
            return Err(Error::Input(format!(
                "shardepth {} would address {} shards; the cap is 16",
                self.shardepth,
                1u64 << self.shardepth
            )));
        }
        if self.n_min < 1 {
            return Err(Error::Input("n_min must be at least 1".into()));
        }
        if !(self.shardpsplit > 0.0 && self.shardpsplit <= 1.0) {
            return Err(Error::Input(format!(
                "shardpsplit must lie in (0, 1], got {}",
                self.shardpsplit
            )));
        }
        Ok(())
    }

    /// Split probability of a sharding-tree node at a given depth.
    fn tu_p_split(&self, depth: usize) -> f64 {
        if depth >= self.shardepth {
            0.0
        } else {
            self.shardpsplit.powi(depth as i32 + 1)
        }
    }
}

/// One shard: its leaf in the sharding tree, its RNG path, its slice of
/// the data, and its sampler state.
#[derive(Clone, Debug)]
pub struct ShardModel {
    pub leaf: usize,
    pub path: u64,
    /// Member observation indices in dataset order.
    pub idx: Vec<usize>,
    pub x: Matrix,
    pub y: Vec<f64>,
    pub state: BartState,
}

/// Mutable fitting state: the sharding tree and one model per shard.
#[derive(Clone, Debug)]
pub struct SbtState {
    pub sharding: ShardingTree,
    pub shards: Vec<ShardModel>,
    /// Per-observation position in `shards`.
    pub shard_index: Vec<usize>,
}

impl SbtState {
    /// Shard sizes in leaf preorder.
    pub fn shard_sizes(&self) -> Vec<usize> {
        self.shards.iter().map(|s| s.idx.len()).collect()
    }

    /// Observation-weighted average of the per-shard noise variances;
    /// in fixed-noise mode every shard holds the same value.
    pub fn sigma2(&self) -> f64 {
        let n: usize = self.shards.iter().map(|s| s.idx.len()).sum();
        self.shards
            .iter()
            .map(|s| s.state.sigma2 * s.idx.len() as f64)
            .sum::<f64>()
            / n as f64
    }

    fn check_partition(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (pos, shard) in self.shards.iter().enumerate() {
            for &i in &shard.idx {
                if seen[i] {
                    return Err(Error::State(format!("observation {i} assigned twice")));
                }
                seen[i] = true;
                if self.shard_index[i] != pos {
                    return Err(Error::State(format!("stale shard index for observation {i}")));
                }
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::State("some observation is in no shard".into()));
        }
        Ok(())
    }
}

fn gather_rows(x: &Matrix, y: &[f64], idx: &[usize]) -> Result<(Matrix, Vec<f64>)> {
    let mut values = Vec::with_capacity(idx.len() * x.n_cols());
    let mut yy = Vec::with_capacity(idx.len());
    for &i in idx {
        values.extend_from_slice(x.row(i));
        yy.push(y[i]);
    }
    Ok((Matrix::new(values, idx.len(), x.n_cols())?, yy))
}

fn build_shard(
    leaf: usize,
    path: u64,
    idx: Vec<usize>,
    x: &Matrix,
    yc: &[f64],
    state: BartState,
) -> Result<ShardModel> {
    let (sx, sy) = gather_rows(x, yc, &idx)?;
    let mut shard = ShardModel { leaf, path, idx, x: sx, y: sy, state };
    shard.state.rebuild_caches(&shard.x)?;
    Ok(shard)
}

/// Sum over a shard forest of every terminal node's integrated likelihood
/// on backfitting residuals. `None` flags a terminal node holding fewer
/// than `min_leaf` observations, which callers treat as a veto.
fn forest_log_ml(
    state: &BartState,
    x: &Matrix,
    y: &[f64],
    tau: f64,
    min_leaf: usize,
) -> Result<Option<f64>> {
    let mut out = 0.0;
    for j in 0..state.m() {
        let r = state.partial_residual(j, y);
        let stats = leaf_stats(&state.trees[j], x, &r)?;
        for leaf in state.trees[j].leaves() {
            match stats.get(&leaf) {
                Some(s) if (s.n as usize) >= min_leaf => out += s.lml(state.sigma2, tau),
                _ => return Ok(None),
            }
        }
    }
    Ok(Some(out))
}

/// A sampler state cloned onto a new data slice, with the integrated
/// likelihood it would carry there.
fn moved_shard_score(
    template: &BartState,
    x: &Matrix,
    yc: &[f64],
    idx: &[usize],
    tau: f64,
    min_leaf: usize,
) -> Result<Option<(Matrix, Vec<f64>, BartState, f64)>> {
    let (sx, sy) = gather_rows(x, yc, idx)?;
    let mut state = template.clone();
    state.rebuild_caches(&sx)?;
    match forest_log_ml(&state, &sx, &sy, tau, min_leaf)? {
        Some(score) => Ok(Some((sx, sy, state, score))),
        None => Ok(None),
    }
}

/// One birth/death proposal on the sharding tree, scored by the change in
/// the affected shards' integrated likelihoods plus the tree prior and
/// proposal ratios. Member reassignment happens only on acceptance.
pub fn sharding_tree_update<R: Rng + ?Sized>(
    state: &mut SbtState,
    x: &Matrix,
    yc: &[f64],
    aux: &AuxAssignment,
    config: &SbtConfig,
    tau: f64,
    rng: &mut R,
) -> Result<bool> {
    if config.shardepth == 0 {
        return Ok(false);
    }
    let tree = &state.sharding.tree;
    let domain = tree.domain().clone();
    let numcut = domain.grid(0).len();
    let min_leaf = config.bart.min_leaf;

    let grow = rng.random::<f64>() < 0.5;
    if grow {
        let growable: Vec<usize> = tree
            .leaves()
            .into_iter()
            .filter(|&l| tree.depth_of(l) < config.shardepth)
            .collect();
        if growable.is_empty() {
            return Ok(false);
        }
        let leaf = growable[rng.random_range(0..growable.len())];
        let rule = domain.rule(0, rng.random_range(0..numcut))?;
        let grown = match tree.mutate(&Move::Grow { leaf, rule }) {
            Ok(t) => t,
            Err(Error::Move(_)) | Err(Error::Input(_)) => return Ok(false),
            Err(e) => return Err(e),
        };

        let pos = state.shards.iter().position(|s| s.leaf == leaf).ok_or_else(|| {
            Error::State(format!("sharding leaf {leaf} has no shard model"))
        })?;
        let parent = &state.shards[pos];
        let mut left_idx = Vec::new();
        let mut right_idx = Vec::new();
        for &i in &parent.idx {
            if aux.u()[i] < rule.cut_value {
                left_idx.push(i);
            } else {
                right_idx.push(i);
            }
        }
        if left_idx.len() < config.n_min || right_idx.len() < config.n_min {
            return Ok(false);
        }

        let old_score =
            forest_log_ml(&parent.state, &parent.x, &parent.y, tau, min_leaf)?
                .ok_or_else(|| Error::State("current shard violates min_leaf".into()))?;
        let Some((lx, ly, lstate, lscore)) =
            moved_shard_score(&parent.state, x, yc, &left_idx, tau, min_leaf)?
        else {
            return Ok(false);
        };
        let Some((rx, ry, rstate, rscore)) =
            moved_shard_score(&parent.state, x, yc, &right_idx, tau, min_leaf)?
        else {
            return Ok(false);
        };

        let depth = tree.depth_of(leaf);
        let ps = config.tu_p_split(depth);
        let ps_child = config.tu_p_split(depth + 1);
        let log_prior = ps.ln() + 2.0 * (1.0 - ps_child).ln() - (1.0 - ps).ln();
        let prunable_after = grown.prunable_nodes().len();
        let log_prop = (growable.len() as f64).ln() - (prunable_after as f64).ln();
        let log_ratio = lscore + rscore - old_score + log_prior + log_prop;

        let u: f64 = rng.random();
        if u.ln() >= log_ratio {
            return Ok(false);
        }

        state.sharding.tree = grown;
        let (l, r) = state.sharding.tree.children(leaf).expect("accepted grow");
        let parent = state.shards.remove(pos);
        let lpath = child_path(parent.path, false);
        let rpath = child_path(parent.path, true);
        state.shards.insert(
            pos,
            ShardModel { leaf: l, path: lpath, idx: left_idx, x: lx, y: ly, state: lstate },
        );
        state.shards.insert(
            pos + 1,
            ShardModel { leaf: r, path: rpath, idx: right_idx, x: rx, y: ry, state: rstate },
        );
        reindex(state);
        Ok(true)
    } else {
        let prunable = tree.prunable_nodes();
        if prunable.is_empty() {
            return Ok(false);
        }
        let node = prunable[rng.random_range(0..prunable.len())];
        let (l, r) = tree.children(node).expect("prunable node is internal");
        let pruned = tree.mutate(&Move::Prune { internal: node })?;

        let lpos = state.shards.iter().position(|s| s.leaf == l);
        let rpos = state.shards.iter().position(|s| s.leaf == r);
        let (Some(lpos), Some(rpos)) = (lpos, rpos) else {
            return Err(Error::State("pruned children have no shard models".into()));
        };
        let (left, right) = (&state.shards[lpos], &state.shards[rpos]);
        let mut merged_idx: Vec<usize> = left.idx.iter().chain(&right.idx).copied().collect();
        merged_idx.sort_unstable();

        let old_left = forest_log_ml(&left.state, &left.x, &left.y, tau, min_leaf)?
            .ok_or_else(|| Error::State("current shard violates min_leaf".into()))?;
        let old_right = forest_log_ml(&right.state, &right.x, &right.y, tau, min_leaf)?
            .ok_or_else(|| Error::State("current shard violates min_leaf".into()))?;
        // the merged shard keeps the left child's model
        let Some((mx, my, mstate, mscore)) =
            moved_shard_score(&left.state, x, yc, &merged_idx, tau, min_leaf)?
        else {
            return Ok(false);
        };

        let depth = tree.depth_of(node);
        let ps = config.tu_p_split(depth);
        let ps_child = config.tu_p_split(depth + 1);
        let log_prior = (1.0 - ps).ln() - ps.ln() - 2.0 * (1.0 - ps_child).ln();
        let growable_after = pruned
            .leaves()
            .into_iter()
            .filter(|&lf| pruned.depth_of(lf) < config.shardepth)
            .count();
        let log_prop = (prunable.len() as f64).ln() - (growable_after as f64).ln();
        let log_ratio = mscore - old_left - old_right + log_prior + log_prop;

        let u: f64 = rng.random();
        if u.ln() >= log_ratio {
            return Ok(false);
        }

        state.sharding.tree = pruned;
        let parent_path = state.shards[lpos].path >> 1;
        let keep = lpos.min(rpos);
        let drop = lpos.max(rpos);
        state.shards.remove(drop);
        state.shards[keep] = ShardModel {
            leaf: node,
            path: parent_path,
            idx: merged_idx,
            x: mx,
            y: my,
            state: mstate,
        };
        reindex(state);
        Ok(true)
    }
}

fn reindex(state: &mut SbtState) {
    for (pos, shard) in state.shards.iter().enumerate() {
        for &i in &shard.idx {
            state.shard_index[i] = pos;
        }
    }
}

/// One shard's retained draw.
#[derive(Clone, Debug)]
pub struct SbtShardSample {
    /// Sharding-tree leaf this shard hangs from.
    pub leaf: usize,
    /// Observations the shard held when the draw was taken.
    pub n_b: usize,
    pub model: BartSample,
}

/// One retained posterior draw of the whole sharded model.
#[derive(Clone, Debug)]
pub struct SbtSample {
    pub sharding: RegressionTree,
    /// Shards in sharding-leaf preorder.
    pub shards: Vec<SbtShardSample>,
}

impl SbtSample {
    fn shard_at(&self, leaf: usize) -> Result<&SbtShardSample> {
        self.shards
            .iter()
            .find(|s| s.leaf == leaf)
            .ok_or_else(|| Error::State(format!("no shard recorded for leaf {leaf}")))
    }
}

/// One iteration's bookkeeping: what the samplers proposed and accepted
/// and how the data was sharded at that point.
#[derive(Clone, Debug)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    /// Outcome of the sharding-tree move; `None` when no move ran.
    pub tu_accepted: Option<bool>,
    /// Shard sizes in leaf preorder.
    pub shard_sizes: Vec<usize>,
    /// Accepted structure proposals per shard (out of `m` each), in the
    /// same order as `shard_sizes`.
    pub tree_accepts: Vec<u32>,
}

/// Posterior sample sequence of the sharded model.
#[derive(Clone, Debug)]
pub struct SbtFit {
    pub samples: Vec<SbtSample>,
    pub offset: f64,
    pub tau: f64,
    pub lambda: f64,
    /// One entry per iteration, burn-in included.
    pub diagnostics: Vec<IterationDiagnostics>,
}

/// Fit the sharded model. The auxiliary coordinates are assigned once from
/// `aux_mode`; each iteration runs an optional sharding move and one sweep
/// per shard (in parallel; reproducible regardless of worker count).
pub fn sbt_fit(
    x: &Matrix,
    y: &[f64],
    aux_mode: &AuxMode,
    config: &SbtConfig,
    n_mcmc: usize,
    burn: usize,
    seed: u64,
) -> Result<SbtFit> {
    config.validate()?;
    if x.n_rows() != y.len() {
        return Err(Error::Input(format!(
            "{} rows of predictors but {} responses",
            x.n_rows(),
            y.len()
        )));
    }
    if burn >= n_mcmc {
        return Err(Error::Input(format!(
            "burn-in {burn} must be shorter than the run length {n_mcmc}"
        )));
    }
    let n = x.n_rows();
    let (yc, offset) = centered_response(y)?;
    let tau = resolve_tau(&config.bart, &yc);
    let lambda = resolve_lambda(&config.bart, &yc)?;
    let sigma2 = match config.bart.sigma_fixed {
        Some(s) => s * s,
        None => (yc.iter().map(|v| v * v).sum::<f64>() / n as f64).max(1e-12),
    };

    let aux = init_aux(x, aux_mode, seed)?;
    let frozen = config.shardpsplit >= 1.0;
    let sharding = if config.shardepth == 0 {
        ShardingTree::root_only(config.bart.numcut, 0)?
    } else if frozen {
        ShardingTree::balanced(config.bart.numcut, config.shardepth)?
    } else {
        ShardingTree::root_only(config.bart.numcut, config.shardepth)?
    };

    let domain = Domain::equispaced(x.n_cols(), config.bart.numcut)?;
    let sets = shard_partition(&sharding, &aux)?;
    let leaves = sharding.leaf_paths();
    let mut shards = Vec::with_capacity(sets.len());
    for ((leaf, path), idx) in leaves.into_iter().zip(sets) {
        if idx.len() < config.n_min.max(config.bart.min_leaf) {
            return Err(Error::Input(format!(
                "shard at leaf {leaf} would hold {} observations, need at least {}; \
                 lower shardepth or n_min",
                idx.len(),
                config.n_min.max(config.bart.min_leaf)
            )));
        }
        let state = BartState::new(config.bart.m, domain.clone(), idx.len(), sigma2)?;
        shards.push(build_shard(leaf, path, idx, x, &yc, state)?);
    }
    let mut state = SbtState { sharding, shards, shard_index: vec![0; n] };
    reindex(&mut state);

    let mut samples = Vec::with_capacity(n_mcmc - burn);
    let mut diagnostics = Vec::with_capacity(n_mcmc);
    for it in 0..n_mcmc {
        let tu_accepted = if config.shardepth >= 1 && !frozen {
            let mut rng = stream_rng(seed, StreamDomain::Sharding, 0, it as u64);
            Some(sharding_tree_update(&mut state, x, &yc, &aux, config, tau, &mut rng)?)
        } else {
            None
        };
        let bart_config = &config.bart;
        let tree_accepts: Vec<u32> = state
            .shards
            .par_iter_mut()
            .map(|shard| {
                let mut rng = stream_rng(seed, StreamDomain::Shard, shard.path, it as u64);
                bart_sweep(&mut shard.state, &shard.x, &shard.y, bart_config, tau, lambda, &mut rng)
            })
            .collect::<Result<_>>()?;
        diagnostics.push(IterationDiagnostics {
            iteration: it,
            tu_accepted,
            shard_sizes: state.shard_sizes(),
            tree_accepts,
        });
        if (it + 1) % 100 == 0 {
            state.check_partition(n)?;
            for shard in &state.shards {
                shard.state.check_consistency(&shard.x)?;
            }
        }
        if it >= burn {
            samples.push(SbtSample {
                sharding: state.sharding.tree.clone(),
                shards: state
                    .shards
                    .iter()
                    .map(|s| SbtShardSample {
                        leaf: s.leaf,
                        n_b: s.idx.len(),
                        model: BartSample {
                            trees: s.state.trees.clone(),
                            sigma2: s.state.sigma2,
                        },
                    })
                    .collect(),
            });
        }
    }
    Ok(SbtFit { samples, offset, tau, lambda, diagnostics })
}

/// Predict by marginalizing the auxiliary coordinate: for every posterior
/// sample and draw, a fresh u* routes through that sample's sharding tree
/// and the selected shard's forest is evaluated at the point.
pub fn sbt_predict(
    fit: &SbtFit,
    grid: &Matrix,
    seed: u64,
    n_draws: usize,
) -> Result<Vec<PredictionSummary>> {
    if fit.samples.is_empty() {
        return Err(Error::Input("no posterior samples to predict from".into()));
    }
    if n_draws < 1 {
        return Err(Error::Input("need at least one draw per sample".into()));
    }
    let mut out = Vec::with_capacity(grid.n_rows());
    let mut draws = Vec::with_capacity(fit.samples.len() * n_draws);
    for i in 0..grid.n_rows() {
        let mut rng = stream_rng(seed, StreamDomain::Predict, i as u64, 0);
        draws.clear();
        for sample in &fit.samples {
            for _ in 0..n_draws {
                let u: f64 = rng.random();
                let leaf = sample.sharding.leaf_of(&[u])?;
                let shard = sample.shard_at(leaf)?;
                draws.push(fit.offset + sample_value(&shard.model, grid.row(i))?);
            }
        }
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let lo = quantile_nearest(&mut draws, 0.025);
        let hi = quantile_nearest(&mut draws, 0.975);
        out.push(PredictionSummary { mean, lo, hi });
    }
    Ok(out)
}

/// Aggregation weights plus the per-shard rates behind them.
#[derive(Clone, Debug)]
pub struct WeightSpec {
    pub weights: Vec<f64>,
    pub eps: Vec<f64>,
    pub alpha_smooth: f64,
    pub d: usize,
}

/// Smoothness-calibrated shard weights; see [`design::optimal_weights`].
pub fn weight_spec(shard_sizes: &[u64], alpha_smooth: f64, d: usize) -> Result<WeightSpec> {
    let weights = design::optimal_weights(shard_sizes, alpha_smooth, d)?;
    let rate = -alpha_smooth / (2.0 * alpha_smooth + d as f64);
    let eps = shard_sizes
        .iter()
        .map(|&n| (n as f64).powf(rate) * (n as f64).ln().sqrt())
        .collect();
    Ok(WeightSpec { weights, eps, alpha_smooth, d })
}

/// Predict with an explicit weighted sum over shards instead of u*
/// routing. Every posterior sample must carry exactly `weights.len()`
/// shards (so the sharding tree must be frozen).
pub fn sbt_predict_weighted(
    fit: &SbtFit,
    grid: &Matrix,
    weights: &[f64],
) -> Result<Vec<PredictionSummary>> {
    if fit.samples.is_empty() {
        return Err(Error::Input("no posterior samples to predict from".into()));
    }
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || (total - 1.0).abs() > 1e-12 || weights.iter().any(|&w| w <= 0.0) {
        return Err(Error::Input("weights must be positive and sum to 1".into()));
    }
    for sample in &fit.samples {
        if sample.shards.len() != weights.len() {
            return Err(Error::Input(format!(
                "a sample holds {} shards but {} weights were given",
                sample.shards.len(),
                weights.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(grid.n_rows());
    let mut draws = vec![0.0; fit.samples.len()];
    for i in 0..grid.n_rows() {
        for (s, sample) in fit.samples.iter().enumerate() {
            let mut v = 0.0;
            for (shard, &w) in sample.shards.iter().zip(weights) {
                v += w * sample_value(&shard.model, grid.row(i))?;
            }
            draws[s] = fit.offset + v;
        }
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let lo = quantile_nearest(&mut draws, 0.025);
        let hi = quantile_nearest(&mut draws, 0.975);
        out.push(PredictionSummary { mean, lo, hi });
    }
    Ok(out)
}
