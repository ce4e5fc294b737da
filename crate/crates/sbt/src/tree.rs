//! Binary regression trees with axis-aligned splits on a finite cut grid.
//!
//! Trees partition the unit cube `[0,1]^d` into half-open boxes (closed on
//! the final grid cell, so the partition covers the cube exactly). Routing
//! sends `x[var] < cut` left and `x[var] >= cut` right. Structural edits go
//! through [`Move`]; invalid edits fail with `Error::Move` so samplers can
//! treat them as automatic rejections.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Per-dimension cut grids. The default grid is equispaced on the open unit
/// interval: `numcut` values `(j+1)/(numcut+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    grids: Vec<Vec<f64>>,
}

impl Domain {
    pub fn equispaced(d: usize, numcut: usize) -> Result<Arc<Self>> {
        if d == 0 || numcut == 0 {
            return Err(Error::Input("domain needs d >= 1 and numcut >= 1".into()));
        }
        let grid: Vec<f64> = (0..numcut)
            .map(|j| (j + 1) as f64 / (numcut + 1) as f64)
            .collect();
        Ok(Arc::new(Domain { grids: vec![grid; d] }))
    }

    /// Explicit grids, one per dimension, all the same length, strictly
    /// increasing inside (0,1).
    pub fn custom(grids: Vec<Vec<f64>>) -> Result<Arc<Self>> {
        if grids.is_empty() {
            return Err(Error::Input("domain needs at least one dimension".into()));
        }
        let len = grids[0].len();
        for grid in &grids {
            if grid.is_empty() || grid.len() != len {
                return Err(Error::Input("all cut grids must share one nonzero length".into()));
            }
            for w in grid.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::Input("cut grid must be strictly increasing".into()));
                }
            }
            if grid[0] <= 0.0 || *grid.last().unwrap() >= 1.0 {
                return Err(Error::Input("cuts must lie strictly inside (0,1)".into()));
            }
        }
        Ok(Arc::new(Domain { grids }))
    }

    pub fn d(&self) -> usize {
        self.grids.len()
    }

    pub fn numcut(&self) -> usize {
        self.grids[0].len()
    }

    pub fn grid(&self, var: usize) -> &[f64] {
        &self.grids[var]
    }

    pub fn rule(&self, var: usize, cut_index: usize) -> Result<SplitRule> {
        let grid = self
            .grids
            .get(var)
            .ok_or_else(|| Error::Input(format!("split variable {var} out of range")))?;
        let cut_value = *grid
            .get(cut_index)
            .ok_or_else(|| Error::Input(format!("cut index {cut_index} out of range")))?;
        Ok(SplitRule { var, cut_index, cut_value })
    }
}

/// `x[var] < cut_value` goes left. `cut_value` is always a grid value.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct SplitRule {
    pub var: usize,
    pub cut_index: usize,
    pub cut_value: f64,
}

/// Axis-aligned box, half-open except on faces touching the upper domain
/// boundary, which are closed so the leaf boxes cover the cube.
#[derive(Clone, Debug, PartialEq)]
pub struct Rectangle {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Rectangle {
    pub fn unit(d: usize) -> Self {
        Rectangle { lower: vec![0.0; d], upper: vec![1.0; d] }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        debug_assert_eq!(x.len(), self.lower.len());
        x.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .all(|(&v, (&lo, &hi))| v >= lo && (v < hi || (hi == 1.0 && v == 1.0)))
    }

    pub fn volume(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| hi - lo)
            .product()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.iter().zip(&self.upper).any(|(lo, hi)| lo >= hi)
    }
}

/// Structural proposal applied by [`RegressionTree::mutate`].
#[derive(Clone, Debug)]
pub enum Move {
    /// Split a terminal node with the given rule.
    Grow { leaf: usize, rule: SplitRule },
    /// Collapse an internal node whose children are both terminal. The
    /// merged node keeps the left child's value so the tree stays
    /// evaluable until values are redrawn.
    Prune { internal: usize },
    /// Replace the split rule of an internal node.
    Change { internal: usize, rule: SplitRule },
    /// Exchange rules between an internal node and one of its internal
    /// children.
    Swap { parent: usize, child: usize },
}

#[derive(Clone, Debug, PartialEq)]
struct Node {
    parent: Option<usize>,
    children: Option<(usize, usize)>,
    rule: Option<SplitRule>,
    mu: Option<f64>,
}

impl Node {
    fn leaf(parent: Option<usize>, mu: Option<f64>) -> Self {
        Node { parent, children: None, rule: None, mu }
    }
}

/// Index-linked binary tree. Pruned slots go on a free list and are reused
/// by later grows, so node indices held by callers stay stable.
#[derive(Clone, Debug)]
pub struct RegressionTree {
    nodes: Vec<Node>,
    free: Vec<usize>,
    domain: Arc<Domain>,
}

pub const ROOT: usize = 0;

impl RegressionTree {
    /// Single-leaf tree covering the whole cube.
    pub fn root_only(domain: Arc<Domain>, mu: Option<f64>) -> Self {
        RegressionTree { nodes: vec![Node::leaf(None, mu)], free: Vec::new(), domain }
    }

    pub fn domain(&self) -> &Arc<Domain> {
        &self.domain
    }

    pub fn d(&self) -> usize {
        self.domain.d()
    }

    fn node(&self, i: usize) -> Result<&Node> {
        self.nodes
            .get(i)
            .filter(|_| !self.free.contains(&i))
            .ok_or_else(|| Error::Input(format!("node {i} does not exist")))
    }

    pub fn is_terminal(&self, i: usize) -> bool {
        self.nodes.get(i).is_some_and(|n| n.children.is_none()) && !self.free.contains(&i)
    }

    pub fn children(&self, i: usize) -> Option<(usize, usize)> {
        self.nodes[i].children
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.nodes[i].parent
    }

    pub fn rule(&self, i: usize) -> Option<&SplitRule> {
        self.nodes[i].rule.as_ref()
    }

    pub fn mu(&self, i: usize) -> Option<f64> {
        self.nodes[i].mu
    }

    pub fn set_mu(&mut self, i: usize, mu: f64) -> Result<()> {
        if !self.is_terminal(i) {
            return Err(Error::State(format!("node {i} is not a terminal node")));
        }
        self.nodes[i].mu = Some(mu);
        Ok(())
    }

    pub fn depth_of(&self, mut i: usize) -> usize {
        let mut depth = 0;
        while let Some(p) = self.nodes[i].parent {
            depth += 1;
            i = p;
        }
        depth
    }

    /// Nodes reachable from the root, parents before children, left before
    /// right. This is the canonical ordering for serialization and leaf
    /// enumeration.
    pub fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len() - self.free.len());
        let mut stack = vec![ROOT];
        while let Some(i) = stack.pop() {
            out.push(i);
            if let Some((l, r)) = self.nodes[i].children {
                stack.push(r);
                stack.push(l);
            }
        }
        out
    }

    pub fn leaves(&self) -> Vec<usize> {
        self.preorder()
            .into_iter()
            .filter(|&i| self.nodes[i].children.is_none())
            .collect()
    }

    pub fn internal_nodes(&self) -> Vec<usize> {
        self.preorder()
            .into_iter()
            .filter(|&i| self.nodes[i].children.is_some())
            .collect()
    }

    /// Internal nodes whose children are both terminal (prune candidates).
    pub fn prunable_nodes(&self) -> Vec<usize> {
        self.internal_nodes()
            .into_iter()
            .filter(|&i| {
                let (l, r) = self.nodes[i].children.unwrap();
                self.nodes[l].children.is_none() && self.nodes[r].children.is_none()
            })
            .collect()
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len() - self.free.len()
    }

    pub fn n_leaves(&self) -> usize {
        (self.n_nodes() + 1) / 2
    }

    pub fn max_depth(&self) -> usize {
        self.leaves().iter().map(|&i| self.depth_of(i)).max().unwrap_or(0)
    }

    /// Terminal node index that `x` routes to.
    pub fn leaf_of(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.d() {
            return Err(Error::Input(format!(
                "point has dimension {}, tree expects {}",
                x.len(),
                self.d()
            )));
        }
        let mut i = ROOT;
        while let Some((l, r)) = self.nodes[i].children {
            let rule = self.nodes[i].rule.as_ref().expect("internal node without rule");
            i = if x[rule.var] < rule.cut_value { l } else { r };
        }
        Ok(i)
    }

    /// Fitted value at `x`.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        let leaf = self.leaf_of(x)?;
        self.nodes[leaf]
            .mu
            .ok_or_else(|| Error::State(format!("terminal node {leaf} has no value")))
    }

    /// Indicator basis function of one terminal node, computed edge by edge
    /// along the path to the root.
    pub fn basis_indicator(&self, leaf: usize, x: &[f64]) -> Result<bool> {
        if x.len() != self.d() {
            return Err(Error::Input("dimension mismatch".into()));
        }
        let node = self.node(leaf)?;
        if node.children.is_some() {
            return Err(Error::Input(format!("node {leaf} is not terminal")));
        }
        let mut child = leaf;
        let mut up = node.parent;
        while let Some(p) = up {
            let rule = self.nodes[p].rule.as_ref().expect("internal node without rule");
            let (l, _) = self.nodes[p].children.expect("internal node without children");
            let ok = if child == l { x[rule.var] < rule.cut_value } else { x[rule.var] >= rule.cut_value };
            if !ok {
                return Ok(false);
            }
            child = p;
            up = self.nodes[p].parent;
        }
        Ok(true)
    }

    /// Rectangle carved out for a node by the splits above it.
    pub fn rectangle_of(&self, i: usize) -> Result<Rectangle> {
        self.node(i)?;
        let mut path = Vec::new();
        let mut cur = i;
        while let Some(p) = self.nodes[cur].parent {
            path.push((p, cur));
            cur = p;
        }
        let mut rect = Rectangle::unit(self.d());
        for &(p, c) in path.iter().rev() {
            let rule = self.nodes[p].rule.as_ref().expect("internal node without rule");
            let (l, _) = self.nodes[p].children.unwrap();
            if c == l {
                rect.upper[rule.var] = rule.cut_value;
            } else {
                rect.lower[rule.var] = rule.cut_value;
            }
        }
        Ok(rect)
    }

    /// All terminal nodes with their rectangles, in preorder. The boxes are
    /// pairwise disjoint and cover the cube by construction.
    pub fn partition_rectangles(&self) -> Vec<(usize, Rectangle)> {
        let mut out = Vec::with_capacity(self.n_leaves());
        let mut stack = vec![(ROOT, Rectangle::unit(self.d()))];
        while let Some((i, rect)) = stack.pop() {
            match self.nodes[i].children {
                None => out.push((i, rect)),
                Some((l, r)) => {
                    let rule = self.nodes[i].rule.as_ref().unwrap();
                    let mut left = rect.clone();
                    left.upper[rule.var] = rule.cut_value;
                    let mut right = rect;
                    right.lower[rule.var] = rule.cut_value;
                    stack.push((r, right));
                    stack.push((l, left));
                }
            }
        }
        out
    }

    fn check_rule_in(&self, rect: &Rectangle, rule: &SplitRule) -> Result<()> {
        if rule.var >= self.d() {
            return Err(Error::Move(format!("split variable {} out of range", rule.var)));
        }
        let grid_value = self
            .domain
            .grid(rule.var)
            .get(rule.cut_index)
            .copied()
            .ok_or_else(|| Error::Move(format!("cut index {} off the grid", rule.cut_index)))?;
        if grid_value != rule.cut_value {
            return Err(Error::Move("cut value disagrees with the grid".into()));
        }
        if rule.cut_value <= rect.lower[rule.var] || rule.cut_value >= rect.upper[rule.var] {
            return Err(Error::Move("cut would create an empty region".into()));
        }
        Ok(())
    }

    /// Check that every split in the subtree under `i` stays strictly inside
    /// the rectangle it inherits.
    fn check_subtree(&self, i: usize, rect: Rectangle) -> Result<()> {
        if let Some((l, r)) = self.nodes[i].children {
            let rule = self.nodes[i].rule.as_ref().unwrap();
            self.check_rule_in(&rect, rule)?;
            let mut left = rect.clone();
            left.upper[rule.var] = rule.cut_value;
            let mut right = rect;
            right.lower[rule.var] = rule.cut_value;
            self.check_subtree(l, left)?;
            self.check_subtree(r, right)?;
        }
        Ok(())
    }

    fn alloc(&mut self, node: Node) -> usize {
        match self.free.pop() {
            Some(i) => {
                self.nodes[i] = node;
                i
            }
            None => {
                self.nodes.push(node);
                self.nodes.len() - 1
            }
        }
    }

    /// Apply a structural move in place. On error the tree is unchanged.
    pub(crate) fn apply_move(&mut self, mv: &Move) -> Result<()> {
        match *mv {
            Move::Grow { leaf, rule } => {
                let node = self.node(leaf)?;
                if node.children.is_some() {
                    return Err(Error::Move(format!("node {leaf} is not terminal")));
                }
                let rect = self.rectangle_of(leaf)?;
                self.check_rule_in(&rect, &rule)?;
                let mu = self.nodes[leaf].mu;
                let l = self.alloc(Node::leaf(Some(leaf), mu));
                let r = self.alloc(Node::leaf(Some(leaf), mu));
                let node = &mut self.nodes[leaf];
                node.children = Some((l, r));
                node.rule = Some(rule);
                node.mu = None;
                Ok(())
            }
            Move::Prune { internal } => {
                let node = self.node(internal)?;
                let (l, r) = node
                    .children
                    .ok_or_else(|| Error::Move(format!("node {internal} is not internal")))?;
                if self.nodes[l].children.is_some() || self.nodes[r].children.is_some() {
                    return Err(Error::Move("children of a pruned node must be terminal".into()));
                }
                let keep = self.nodes[l].mu;
                let node = &mut self.nodes[internal];
                node.children = None;
                node.rule = None;
                node.mu = keep;
                self.free.push(l.max(r));
                self.free.push(l.min(r));
                Ok(())
            }
            Move::Change { internal, rule } => {
                let node = self.node(internal)?;
                if node.children.is_none() {
                    return Err(Error::Move(format!("node {internal} is not internal")));
                }
                let old = self.nodes[internal].rule;
                self.nodes[internal].rule = Some(rule);
                let rect = self.rectangle_of(internal)?;
                if let Err(e) = self.check_subtree(internal, rect) {
                    self.nodes[internal].rule = old;
                    return Err(e);
                }
                Ok(())
            }
            Move::Swap { parent, child } => {
                let p = self.node(parent)?;
                let (l, r) = p
                    .children
                    .ok_or_else(|| Error::Move("swap parent must be internal".into()))?;
                if child != l && child != r {
                    return Err(Error::Move("swap child must be a direct child".into()));
                }
                if self.nodes[child].children.is_none() {
                    return Err(Error::Move("swap child must be internal".into()));
                }
                let pr = self.nodes[parent].rule;
                let cr = self.nodes[child].rule;
                self.nodes[parent].rule = cr;
                self.nodes[child].rule = pr;
                let rect = self.rectangle_of(parent)?;
                if let Err(e) = self.check_subtree(parent, rect) {
                    self.nodes[parent].rule = pr;
                    self.nodes[child].rule = cr;
                    return Err(e);
                }
                Ok(())
            }
        }
    }

    /// Pure version of [`apply_move`]: returns the mutated copy.
    pub fn mutate(&self, mv: &Move) -> Result<RegressionTree> {
        let mut next = self.clone();
        next.apply_move(mv)?;
        Ok(next)
    }

    /// Structural invariants: reachable nodes form a binary tree, internal
    /// nodes carry rules, terminals do not, and every rule cuts strictly
    /// inside its rectangle.
    pub fn validate(&self) -> Result<()> {
        let order = self.preorder();
        if order.len() != self.n_nodes() {
            return Err(Error::State("unreachable live nodes".into()));
        }
        for &i in &order {
            let node = &self.nodes[i];
            match node.children {
                Some((l, r)) => {
                    if node.rule.is_none() {
                        return Err(Error::State(format!("internal node {i} has no rule")));
                    }
                    if node.mu.is_some() {
                        return Err(Error::State(format!("internal node {i} carries a value")));
                    }
                    for c in [l, r] {
                        if self.nodes[c].parent != Some(i) {
                            return Err(Error::State("parent link mismatch".into()));
                        }
                    }
                }
                None => {
                    if node.rule.is_some() {
                        return Err(Error::State(format!("terminal node {i} has a rule")));
                    }
                }
            }
        }
        self.check_subtree(ROOT, Rectangle::unit(self.d()))
    }

    /// Text form: a header with the dimension and grid size, then one line
    /// per node in preorder. Internal nodes print
    /// `id parent var cut_index cut_value`, terminals `id parent leaf mu`.
    /// Floats use the shortest representation that parses back bit-exactly.
    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        writeln_fmt(&mut out, format_args!("d={} numcut={}", self.d(), self.domain.numcut()));
        let order = self.preorder();
        let mut id_of = vec![usize::MAX; self.nodes.len()];
        for (seq, &i) in order.iter().enumerate() {
            id_of[i] = seq;
        }
        for &i in &order {
            let node = &self.nodes[i];
            let parent = match node.parent {
                Some(p) => id_of[p] as i64,
                None => -1,
            };
            match (&node.rule, node.children) {
                (Some(rule), Some(_)) => writeln_fmt(
                    &mut out,
                    format_args!("{} {} {} {} {}", id_of[i], parent, rule.var, rule.cut_index, rule.cut_value),
                ),
                (None, None) => {
                    let mu = node.mu.ok_or_else(|| {
                        Error::State(format!("terminal node {i} has no value to serialize"))
                    })?;
                    writeln_fmt(&mut out, format_args!("{} {} leaf {}", id_of[i], parent, mu));
                }
                _ => return Err(Error::State("rule/children mismatch".into())),
            }
        }
        Ok(out)
    }

    /// Parse one tree, consuming exactly its lines from the iterator. The
    /// preorder node list is self-delimiting, so no terminator is needed.
    pub fn parse_from_lines<'a, I>(lines: &mut I) -> Result<RegressionTree>
    where
        I: Iterator<Item = &'a str>,
    {
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("missing tree header".into()))?
            .trim();
        let (d, numcut) = parse_header(header)?;
        let domain = Domain::equispaced(d, numcut)?;

        let mut tree = RegressionTree {
            nodes: Vec::new(),
            free: Vec::new(),
            domain,
        };
        let mut pending = 1usize;
        let mut open: Vec<usize> = Vec::new();
        let mut line_no = 0usize;
        while pending > 0 {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse("tree text ended before all nodes were read".into()))?
                .trim();
            line_no += 1;
            if line.is_empty() {
                return Err(Error::Parse("blank line inside tree text".into()));
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 && fields.len() != 5 {
                return Err(Error::Parse(format!("tree node line {line_no} malformed")));
            }
            let id: usize = parse_field(fields[0], "node id")?;
            if id != tree.nodes.len() {
                return Err(Error::Parse(format!(
                    "node ids must be sequential preorder positions, got {id}"
                )));
            }
            let parent: i64 = parse_field(fields[1], "parent id")?;
            let parent = if parent < 0 {
                if id != 0 {
                    return Err(Error::Parse("only the root may have parent -1".into()));
                }
                None
            } else {
                let p = parent as usize;
                if p >= tree.nodes.len() {
                    return Err(Error::Parse("parent must precede its children".into()));
                }
                Some(p)
            };
            // Preorder emits the left subtree first, so the first child line
            // naming a parent is that parent's left child.
            if let Some(p) = parent {
                let expected = open.last().copied();
                if expected != Some(p) {
                    return Err(Error::Parse("node lines are not in preorder".into()));
                }
            } else if !open.is_empty() {
                return Err(Error::Parse("unexpected extra root".into()));
            }

            let node = if fields[2] == "leaf" {
                if fields.len() != 4 {
                    return Err(Error::Parse(format!("terminal line {line_no} malformed")));
                }
                let mu: f64 = parse_field(fields[3], "terminal value")?;
                if !mu.is_finite() {
                    return Err(Error::Parse("terminal value must be finite".into()));
                }
                pending -= 1;
                Node { parent, children: None, rule: None, mu: Some(mu) }
            } else {
                if fields.len() != 5 {
                    return Err(Error::Parse(format!("internal line {line_no} malformed")));
                }
                let var: usize = parse_field(fields[2], "split variable")?;
                let cut_index: usize = parse_field(fields[3], "cut index")?;
                let cut_value: f64 = parse_field(fields[4], "cut value")?;
                let rule = tree
                    .domain
                    .rule(var, cut_index)
                    .map_err(|e| Error::Parse(e.to_string()))?;
                if rule.cut_value != cut_value {
                    return Err(Error::Parse(format!(
                        "cut value {cut_value} is not grid point {cut_index} of variable {var}"
                    )));
                }
                pending += 1;
                Node { parent, children: None, rule: Some(rule), mu: None }
            };

            let idx = tree.nodes.len();
            tree.nodes.push(node);
            if let Some(p) = parent {
                match tree.nodes[p].children {
                    None => {
                        tree.nodes[p].children = Some((idx, usize::MAX));
                    }
                    Some((l, r)) if r == usize::MAX => {
                        tree.nodes[p].children = Some((l, idx));
                        open.pop();
                    }
                    Some(_) => return Err(Error::Parse("parent already has two children".into())),
                }
            }
            if tree.nodes[idx].rule.is_some() {
                open.push(idx);
            }
        }
        if !open.is_empty() {
            return Err(Error::Parse("internal node missing children".into()));
        }
        tree.validate()?;
        Ok(tree)
    }

    pub fn from_text(text: &str) -> Result<RegressionTree> {
        let mut lines = text.lines();
        let tree = Self::parse_from_lines(&mut lines)?;
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(Error::Parse("trailing content after tree".into()));
        }
        Ok(tree)
    }
}

impl PartialEq for RegressionTree {
    /// Structural equality over reachable nodes, comparing values bit-wise.
    fn eq(&self, other: &Self) -> bool {
        if *self.domain != *other.domain {
            return false;
        }
        let a = self.preorder();
        let b = other.preorder();
        if a.len() != b.len() {
            return false;
        }
        a.iter().zip(&b).all(|(&i, &j)| {
            let (x, y) = (&self.nodes[i], &other.nodes[j]);
            x.rule == y.rule
                && x.children.is_some() == y.children.is_some()
                && x.mu.map(f64::to_bits) == y.mu.map(f64::to_bits)
        })
    }
}

fn writeln_fmt(out: &mut String, args: std::fmt::Arguments) {
    out.write_fmt(args).expect("string write cannot fail");
    out.push('\n');
}

fn parse_header(header: &str) -> Result<(usize, usize)> {
    let mut d = None;
    let mut numcut = None;
    for part in header.split_whitespace() {
        if let Some(v) = part.strip_prefix("d=") {
            d = Some(parse_field::<usize>(v, "dimension")?);
        } else if let Some(v) = part.strip_prefix("numcut=") {
            numcut = Some(parse_field::<usize>(v, "numcut")?);
        } else {
            return Err(Error::Parse(format!("unexpected header field '{part}'")));
        }
    }
    match (d, numcut) {
        (Some(d), Some(n)) => Ok((d, n)),
        _ => Err(Error::Parse("tree header must contain d= and numcut=".into())),
    }
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Parse(format!("could not parse {what} from '{s}'")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quarter_tree() -> RegressionTree {
        // Partition of [0,1] into [0,.25) [.25,.5) [.5,.75) [.75,1].
        let domain = Domain::equispaced(1, 3).unwrap();
        let mut t = RegressionTree::root_only(domain.clone(), Some(0.0));
        t.apply_move(&Move::Grow { leaf: ROOT, rule: domain.rule(0, 1).unwrap() }).unwrap();
        let (l, r) = t.children(ROOT).unwrap();
        t.apply_move(&Move::Grow { leaf: l, rule: domain.rule(0, 0).unwrap() }).unwrap();
        t.apply_move(&Move::Grow { leaf: r, rule: domain.rule(0, 2).unwrap() }).unwrap();
        t
    }

    #[test]
    fn equispaced_grid_values() {
        let domain = Domain::equispaced(2, 3).unwrap();
        assert_eq!(domain.grid(0), &[0.25, 0.5, 0.75]);
        assert_eq!(domain.grid(1), &[0.25, 0.5, 0.75]);
    }

    #[test]
    fn quarter_partition_rectangles() {
        let t = quarter_tree();
        let parts = t.partition_rectangles();
        let bounds: Vec<(f64, f64)> =
            parts.iter().map(|(_, r)| (r.lower[0], r.upper[0])).collect();
        assert_eq!(bounds, vec![(0.0, 0.25), (0.25, 0.5), (0.5, 0.75), (0.75, 1.0)]);
        let total: f64 = parts.iter().map(|(_, r)| r.volume()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn routing_agrees_with_rectangles() {
        let t = quarter_tree();
        let parts = t.partition_rectangles();
        for k in 0..=1000 {
            let x = [k as f64 / 1000.0];
            let leaf = t.leaf_of(&x).unwrap();
            let holders: Vec<usize> = parts
                .iter()
                .filter(|(_, r)| r.contains(&x))
                .map(|(i, _)| *i)
                .collect();
            assert_eq!(holders, vec![leaf], "point {x:?}");
        }
    }

    #[test]
    fn basis_indicator_matches_membership() {
        let domain = Domain::equispaced(2, 5).unwrap();
        let mut t = RegressionTree::root_only(domain.clone(), Some(0.0));
        t.apply_move(&Move::Grow { leaf: ROOT, rule: domain.rule(0, 2).unwrap() }).unwrap();
        let (l, _) = t.children(ROOT).unwrap();
        t.apply_move(&Move::Grow { leaf: l, rule: domain.rule(1, 3).unwrap() }).unwrap();
        let parts = t.partition_rectangles();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let x = [rng.random::<f64>(), rng.random::<f64>()];
            for (leaf, rect) in &parts {
                assert_eq!(t.basis_indicator(*leaf, &x).unwrap(), rect.contains(&x));
            }
        }
    }

    #[test]
    fn grow_then_prune_restores_topology() {
        let domain = Domain::equispaced(1, 3).unwrap();
        let mut t = RegressionTree::root_only(domain.clone(), Some(1.5));
        let before = t.clone();
        t.apply_move(&Move::Grow { leaf: ROOT, rule: domain.rule(0, 1).unwrap() }).unwrap();
        assert_eq!(t.n_leaves(), 2);
        // children inherit the parent value, so the grown tree still evaluates
        assert_eq!(t.evaluate(&[0.9]).unwrap(), 1.5);
        t.apply_move(&Move::Prune { internal: ROOT }).unwrap();
        assert_eq!(t.n_nodes(), before.n_nodes());
        assert!(t.is_terminal(ROOT));
        assert_eq!(t.max_depth(), 0);
        // the merged node keeps the left child's value
        assert_eq!(t.evaluate(&[0.1]).unwrap(), 1.5);
    }

    #[test]
    fn grow_outside_rectangle_rejected() {
        let t = quarter_tree();
        let leftmost = t.leaves()[0];
        // leftmost covers [0, 0.25); a cut at 0.5 lies outside it
        let bad = t.domain().rule(0, 1).unwrap();
        let err = t.mutate(&Move::Grow { leaf: leftmost, rule: bad }).unwrap_err();
        assert!(matches!(err, Error::Move(_)));
    }

    #[test]
    fn change_to_same_rule_is_identity() {
        let t = quarter_tree();
        let rule = *t.rule(ROOT).unwrap();
        let u = t.mutate(&Move::Change { internal: ROOT, rule }).unwrap();
        assert_eq!(t, u);
    }

    #[test]
    fn swap_exchanges_rules_between_parent_and_child() {
        let domain = Domain::equispaced(2, 3).unwrap();
        let mut t = RegressionTree::root_only(domain.clone(), Some(0.0));
        t.apply_move(&Move::Grow { leaf: ROOT, rule: domain.rule(0, 1).unwrap() }).unwrap();
        let (l, _) = t.children(ROOT).unwrap();
        t.apply_move(&Move::Grow { leaf: l, rule: domain.rule(1, 1).unwrap() }).unwrap();
        t.apply_move(&Move::Swap { parent: ROOT, child: l }).unwrap();
        assert_eq!(t.rule(ROOT).unwrap().var, 1);
        assert_eq!(t.rule(l).unwrap().var, 0);
        t.validate().unwrap();
    }

    #[test]
    fn swap_creating_empty_region_rejected() {
        let domain = Domain::equispaced(1, 3).unwrap();
        let mut t = RegressionTree::root_only(domain.clone(), Some(0.0));
        // root cuts at 0.5, left child cuts at 0.25; swapping would ask the
        // left child (now covering [0, 0.25)) to cut at 0.5
        t.apply_move(&Move::Grow { leaf: ROOT, rule: domain.rule(0, 1).unwrap() }).unwrap();
        let (l, _) = t.children(ROOT).unwrap();
        t.apply_move(&Move::Grow { leaf: l, rule: domain.rule(0, 0).unwrap() }).unwrap();
        let before = t.clone();
        let err = t.apply_move(&Move::Swap { parent: ROOT, child: l }).unwrap_err();
        assert!(matches!(err, Error::Move(_)));
        assert_eq!(t, before);
    }

    #[test]
    fn swap_requires_parent_child_pair() {
        let domain = Domain::equispaced(2, 3).unwrap();
        let mut t = RegressionTree::root_only(domain.clone(), Some(0.0));
        t.apply_move(&Move::Grow { leaf: ROOT, rule: domain.rule(0, 1).unwrap() }).unwrap();
        let (l, r) = t.children(ROOT).unwrap();
        t.apply_move(&Move::Grow { leaf: l, rule: domain.rule(1, 1).unwrap() }).unwrap();
        t.apply_move(&Move::Grow { leaf: r, rule: domain.rule(1, 1).unwrap() }).unwrap();
        let err = t.mutate(&Move::Swap { parent: l, child: r }).unwrap_err();
        assert!(matches!(err, Error::Move(_)));
    }

    #[test]
    fn evaluate_without_value_is_state_error() {
        let domain = Domain::equispaced(1, 3).unwrap();
        let t = RegressionTree::root_only(domain, None);
        assert!(matches!(t.evaluate(&[0.5]), Err(Error::State(_))));
    }

    #[test]
    fn dimension_mismatch_is_input_error() {
        let t = quarter_tree();
        assert!(matches!(t.leaf_of(&[0.1, 0.2]), Err(Error::Input(_))));
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let domain = Domain::equispaced(2, 7).unwrap();
        let mut t = RegressionTree::root_only(domain.clone(), Some(0.1 + 0.2));
        t.apply_move(&Move::Grow { leaf: ROOT, rule: domain.rule(1, 4).unwrap() }).unwrap();
        let (l, r) = t.children(ROOT).unwrap();
        t.apply_move(&Move::Grow { leaf: r, rule: domain.rule(0, 6).unwrap() }).unwrap();
        t.set_mu(l, -1.234567890123456e-3).unwrap();
        let (rl, rr) = t.children(r).unwrap();
        t.set_mu(rl, f64::from_bits(0x3FD5555555555555)).unwrap();
        t.set_mu(rr, 42.0).unwrap();

        let text = t.to_text().unwrap();
        let parsed = RegressionTree::from_text(&text).unwrap();
        assert_eq!(parsed, t);
        assert_eq!(parsed.to_text().unwrap(), text);
    }

    #[test]
    fn parse_rejects_malformed_text() {
        assert!(RegressionTree::from_text("").is_err());
        assert!(RegressionTree::from_text("d=1 numcut=3\n0 -1 leaf\n").is_err());
        assert!(RegressionTree::from_text("d=1 numcut=3\n0 -1 0 1 0.25\n1 0 leaf 0\n").is_err());
        // cut value inconsistent with the grid
        assert!(RegressionTree::from_text(
            "d=1 numcut=3\n0 -1 0 1 0.3\n1 0 leaf 0\n2 0 leaf 1\n"
        )
        .is_err());
        // truncated: internal promises children that never arrive
        assert!(RegressionTree::from_text("d=1 numcut=3\n0 -1 0 1 0.5\n1 0 leaf 0\n").is_err());
    }

    #[test]
    fn random_move_sequences_keep_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..150 {
            let d = rng.random_range(1..=3);
            let numcut = rng.random_range(2..=8);
            let domain = Domain::equispaced(d, numcut).unwrap();
            let mut t = RegressionTree::root_only(domain.clone(), Some(0.0));
            for _ in 0..40 {
                let mv = match rng.random_range(0..4) {
                    0 => {
                        let leaves = t.leaves();
                        let leaf = leaves[rng.random_range(0..leaves.len())];
                        let rule = domain
                            .rule(rng.random_range(0..d), rng.random_range(0..numcut))
                            .unwrap();
                        Move::Grow { leaf, rule }
                    }
                    1 => {
                        let cands = t.prunable_nodes();
                        if cands.is_empty() {
                            continue;
                        }
                        Move::Prune { internal: cands[rng.random_range(0..cands.len())] }
                    }
                    2 => {
                        let ints = t.internal_nodes();
                        if ints.is_empty() {
                            continue;
                        }
                        let internal = ints[rng.random_range(0..ints.len())];
                        let rule = domain
                            .rule(rng.random_range(0..d), rng.random_range(0..numcut))
                            .unwrap();
                        Move::Change { internal, rule }
                    }
                    _ => {
                        let ints = t.internal_nodes();
                        let pairs: Vec<(usize, usize)> = ints
                            .iter()
                            .flat_map(|&p| {
                                let (l, r) = t.children(p).unwrap();
                                [(p, l), (p, r)]
                            })
                            .filter(|&(_, c)| !t.is_terminal(c))
                            .collect();
                        if pairs.is_empty() {
                            continue;
                        }
                        let (parent, child) = pairs[rng.random_range(0..pairs.len())];
                        Move::Swap { parent, child }
                    }
                };
                let before = t.clone();
                match t.apply_move(&mv) {
                    Ok(()) => t.validate().unwrap(),
                    Err(Error::Move(_)) => assert_eq!(t, before),
                    Err(e) => panic!("unexpected error {e}"),
                }
            }
            // volume conservation and exclusive membership
            let parts = t.partition_rectangles();
            let total: f64 = parts.iter().map(|(_, r)| r.volume()).sum();
            assert!((total - 1.0).abs() < 1e-12);
            for _ in 0..50 {
                let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
                let holders = parts.iter().filter(|(_, r)| r.contains(&x)).count();
                assert_eq!(holders, 1);
            }
        }
    }

    #[test]
    fn node_count_bound_with_nonempty_leaves() {
        // If every terminal holds at least one of n points, a binary tree has
        // at most 2n - 1 nodes.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let domain = Domain::equispaced(1, 31).unwrap();
        for _ in 0..50 {
            let n = rng.random_range(1..=12);
            let data: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let mut t = RegressionTree::root_only(domain.clone(), Some(0.0));
            for _ in 0..200 {
                let leaves = t.leaves();
                let leaf = leaves[rng.random_range(0..leaves.len())];
                let rule = match domain.rule(0, rng.random_range(0..31)) {
                    Ok(r) => r,
                    Err(_) => continue,
                };
                let candidate = match t.mutate(&Move::Grow { leaf, rule }) {
                    Ok(c) => c,
                    Err(_) => continue,
                };
                let occupied = candidate
                    .leaves()
                    .iter()
                    .all(|&lf| data.iter().any(|&x| candidate.leaf_of(&[x]).unwrap() == lf));
                if occupied {
                    t = candidate;
                }
            }
            assert!(t.n_nodes() >= 1 && t.n_nodes() <= 2 * n);
        }
    }
}
