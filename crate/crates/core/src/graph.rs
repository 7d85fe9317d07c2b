//! Directed graphs with per-edge activation probabilities, exposure
//! source sets, seed sets, and the simple-path machinery behind the
//! moment-bound constants.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Default cap on the number of simple paths any enumeration may visit.
pub const DEFAULT_PATH_CAP: usize = 1_000_000;

/// Default cap on the number of seed sets enumerated by exhaustive routines.
pub const DEFAULT_SET_LIMIT: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
    pub p: f64,
}

/// Directed graph on dense node ids `0..n`.
///
/// Edges keep their insertion order; live-edge samples are aligned with it.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectedGraph {
    n: usize,
    edges: Vec<Edge>,
    out_edges: Vec<Vec<usize>>,
    in_edges: Vec<Vec<usize>>,
}

impl DirectedGraph {
    pub fn new(n: usize, edges: Vec<Edge>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(edges.len());
        let mut out_edges = vec![Vec::new(); n];
        let mut in_edges = vec![Vec::new(); n];
        for (idx, e) in edges.iter().enumerate() {
            for node in [e.src, e.dst] {
                if node >= n {
                    return Err(Error::NodeOutOfRange { node, n });
                }
            }
            if e.src == e.dst {
                return Err(Error::InvalidGraph(format!("self-loop at node {}", e.src)));
            }
            if !(0.0..=1.0).contains(&e.p) {
                return Err(Error::InvalidGraph(format!(
                    "probability {} on edge {} -> {} out of range",
                    e.p, e.src, e.dst
                )));
            }
            if !seen.insert((e.src, e.dst)) {
                return Err(Error::InvalidGraph(format!(
                    "duplicate edge {} -> {}",
                    e.src, e.dst
                )));
            }
            out_edges[e.src].push(idx);
            in_edges[e.dst].push(idx);
        }
        Ok(Self {
            n,
            edges,
            out_edges,
            in_edges,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Indices of the edges leaving `v`.
    pub fn out_edges(&self, v: NodeId) -> &[usize] {
        &self.out_edges[v]
    }

    /// Indices of the edges entering `v`.
    pub fn in_edges(&self, v: NodeId) -> &[usize] {
        &self.in_edges[v]
    }

    pub fn out_degree(&self, v: NodeId) -> usize {
        self.out_edges[v].len()
    }

    pub fn in_neighbors(&self, v: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.in_edges[v].iter().map(|&e| self.edges[e].src)
    }

    pub fn out_neighbors(&self, v: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.out_edges[v].iter().map(|&e| self.edges[e].dst)
    }

    /// Maximum edge activation probability (0 for an edgeless graph).
    pub fn epsilon(&self) -> f64 {
        self.edges.iter().map(|e| e.p).fold(0.0, f64::max)
    }

    /// Same topology with every probability multiplied by `factor`,
    /// saturating at 1.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor.is_finite() && factor >= 0.0) {
            return Err(Error::Precondition(format!(
                "probability scale must be finite and nonnegative, got {factor}"
            )));
        }
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                p: (e.p * factor).min(1.0),
                ..*e
            })
            .collect();
        Self::new(self.n, edges)
    }

    /// Serialize as an edge list that [`parse_graph`] reads back exactly.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!(
            "# format_version: {}\n# nodes: {}\n",
            crate::FORMAT_VERSION,
            self.n
        );
        for e in &self.edges {
            // `{}` on f64 prints the shortest representation that round-trips.
            out.push_str(&format!("{} {} {}\n", e.src, e.dst, e.p));
        }
        out
    }
}

fn parse_header(line: &str) -> Option<(&str, &str)> {
    let body = line.strip_prefix('#')?.trim();
    let (key, value) = body.split_once(':')?;
    Some((key.trim(), value.trim()))
}

fn parse_edge_list<F>(text: &str, mut resolve: F) -> Result<DirectedGraph>
where
    F: FnMut(&str, usize) -> Result<NodeId>,
{
    let mut declared_nodes: Option<usize> = None;
    let mut edges = Vec::new();
    let mut seen = HashSet::new();
    let mut max_id: Option<usize> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            match parse_header(line) {
                Some(("nodes", v)) => {
                    declared_nodes = Some(v.parse().map_err(|_| Error::MalformedLine {
                        line: line_no,
                        text: raw.to_string(),
                    })?);
                }
                Some(("format_version", v)) => {
                    let found: u32 = v.parse().map_err(|_| Error::MalformedLine {
                        line: line_no,
                        text: raw.to_string(),
                    })?;
                    if found > crate::FORMAT_VERSION {
                        return Err(Error::FormatVersion {
                            found,
                            supported: crate::FORMAT_VERSION,
                        });
                    }
                }
                _ => {}
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::MalformedLine {
                line: line_no,
                text: raw.to_string(),
            });
        }
        let src = resolve(fields[0], line_no)?;
        let dst = resolve(fields[1], line_no)?;
        let p: f64 = fields[2].parse().map_err(|_| Error::MalformedLine {
            line: line_no,
            text: raw.to_string(),
        })?;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::ProbabilityOutOfRange { line: line_no, p });
        }
        if src == dst {
            return Err(Error::SelfLoop {
                line: line_no,
                node: src,
            });
        }
        if !seen.insert((src, dst)) {
            return Err(Error::DuplicateEdge {
                line: line_no,
                src,
                dst,
            });
        }
        max_id = Some(max_id.map_or(src.max(dst), |m| m.max(src).max(dst)));
        edges.push(Edge { src, dst, p });
    }

    let implied = max_id.map_or(0, |m| m + 1);
    let n = match declared_nodes {
        Some(d) if d < implied => {
            return Err(Error::InvalidGraph(format!(
                "header declares {d} nodes but edges use id {}",
                implied - 1
            )))
        }
        Some(d) => d,
        None => implied,
    };
    DirectedGraph::new(n, edges)
}

/// Parse an edge list: one `src dst p` triple per line, `#` comments.
///
/// A `# nodes: N` header fixes the node count (for isolated trailing
/// nodes); otherwise it is one more than the largest id used.
pub fn parse_graph(text: &str) -> Result<DirectedGraph> {
    parse_edge_list(text, |tok, line| {
        tok.parse().map_err(|_| Error::MalformedLine {
            line,
            text: tok.to_string(),
        })
    })
}

/// Sidecar dictionary mapping external node names to dense ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NodeNames {
    by_name: HashMap<String, NodeId>,
    names: Vec<String>,
}

impl NodeNames {
    /// Parse `name id` lines; ids must be exactly `0..count` in some order.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let malformed = || Error::MalformedLine {
                line: idx + 1,
                text: raw.to_string(),
            };
            let mut it = line.split_whitespace();
            let (Some(name), Some(id), None) = (it.next(), it.next(), it.next()) else {
                return Err(malformed());
            };
            let id: usize = id.parse().map_err(|_| malformed())?;
            if pairs.insert(id, name.to_string()).is_some() {
                return Err(Error::InvalidGraph(format!("node id {id} named twice")));
            }
        }
        let mut names = Vec::with_capacity(pairs.len());
        for (expected, (id, name)) in pairs.into_iter().enumerate() {
            if id != expected {
                return Err(Error::InvalidGraph(format!(
                    "node ids must be dense; id {expected} is missing"
                )));
            }
            names.push(name);
        }
        let mut by_name = HashMap::with_capacity(names.len());
        for (id, name) in names.iter().enumerate() {
            if by_name.insert(name.clone(), id).is_some() {
                return Err(Error::InvalidGraph(format!("duplicate node name {name:?}")));
            }
        }
        Ok(Self { by_name, names })
    }

    pub fn id(&self, name: &str) -> Option<NodeId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: NodeId) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Parse an edge list whose endpoints are names from `names`.
pub fn parse_named_graph(text: &str, names: &NodeNames) -> Result<DirectedGraph> {
    let mut g = parse_edge_list(text, |tok, line| {
        names.id(tok).ok_or_else(|| Error::MalformedLine {
            line,
            text: format!("unknown node name {tok:?}"),
        })
    })?;
    if g.n < names.len() {
        g = DirectedGraph::new(names.len(), g.edges)?;
    }
    Ok(g)
}

/// Which exposure channel a source set feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Pos,
    Neg,
}

impl Sign {
    pub const BOTH: [Sign; 2] = [Sign::Pos, Sign::Neg];
}

/// Per-node positive and negative exposure source sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExposureSpec {
    pos: Vec<Vec<NodeId>>,
    neg: Vec<Vec<NodeId>>,
}

impl ExposureSpec {
    /// Members are sorted and deduplicated. A node listed in both sets of
    /// the same target is accepted and logged as a warning.
    pub fn new(n: usize, pos: Vec<Vec<NodeId>>, neg: Vec<Vec<NodeId>>) -> Result<Self> {
        if pos.len() != n || neg.len() != n {
            return Err(Error::InvalidExposureSpec(format!(
                "expected {n} source lists per sign, got {} positive and {} negative",
                pos.len(),
                neg.len()
            )));
        }
        let clean = |lists: Vec<Vec<NodeId>>, label: &str| -> Result<Vec<Vec<NodeId>>> {
            lists
                .into_iter()
                .enumerate()
                .map(|(i, mut members)| {
                    members.sort_unstable();
                    members.dedup();
                    for &j in &members {
                        if j >= n {
                            return Err(Error::InvalidExposureSpec(format!(
                                "{label} source {j} of node {i} out of range"
                            )));
                        }
                        if j == i {
                            return Err(Error::InvalidExposureSpec(format!(
                                "node {i} lists itself as a {label} source"
                            )));
                        }
                    }
                    Ok(members)
                })
                .collect()
        };
        let spec = Self {
            pos: clean(pos, "positive")?,
            neg: clean(neg, "negative")?,
        };
        for (i, j) in spec.overlaps() {
            log::warn!("node {j} is both a positive and a negative source of node {i}");
        }
        Ok(spec)
    }

    pub fn empty(n: usize) -> Self {
        Self {
            pos: vec![Vec::new(); n],
            neg: vec![Vec::new(); n],
        }
    }

    /// Positive sources are the in-neighbours; no negative sources.
    pub fn in_neighbors(g: &DirectedGraph) -> Self {
        let pos = (0..g.n())
            .map(|i| g.in_neighbors(i).collect::<Vec<_>>())
            .collect();
        Self::new(g.n(), pos, vec![Vec::new(); g.n()]).expect("in-neighbourhoods are valid")
    }

    pub fn n(&self) -> usize {
        self.pos.len()
    }

    pub fn sources(&self, sign: Sign, i: NodeId) -> &[NodeId] {
        match sign {
            Sign::Pos => &self.pos[i],
            Sign::Neg => &self.neg[i],
        }
    }

    pub fn pos(&self, i: NodeId) -> &[NodeId] {
        &self.pos[i]
    }

    pub fn neg(&self, i: NodeId) -> &[NodeId] {
        &self.neg[i]
    }

    /// `(target, source)` pairs where the source is in both sets.
    pub fn overlaps(&self) -> Vec<(NodeId, NodeId)> {
        let mut out = Vec::new();
        for i in 0..self.n() {
            for j in &self.pos[i] {
                if self.neg[i].binary_search(j).is_ok() {
                    out.push((i, *j));
                }
            }
        }
        out
    }

    /// Largest source-set size across nodes for one sign.
    pub fn max_size(&self, sign: Sign) -> usize {
        (0..self.n())
            .map(|i| self.sources(sign, i).len())
            .max()
            .unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        let to_map = |lists: &[Vec<NodeId>]| -> BTreeMap<String, Vec<NodeId>> {
            lists
                .iter()
                .enumerate()
                .filter(|(_, l)| !l.is_empty())
                .map(|(i, l)| (i.to_string(), l.clone()))
                .collect()
        };
        let doc = ExposureSpecFile {
            format_version: Some(crate::FORMAT_VERSION),
            pos: to_map(&self.pos),
            neg: to_map(&self.neg),
        };
        serde_json::to_string_pretty(&doc).expect("plain maps serialize")
    }

    /// Read `{"pos": {"<i>": [ids]}, "neg": {...}}`; absent nodes get empty sets.
    pub fn from_json(text: &str, n: usize) -> Result<Self> {
        let doc: ExposureSpecFile = serde_json::from_str(text)?;
        if let Some(found) = doc.format_version {
            if found > crate::FORMAT_VERSION {
                return Err(Error::FormatVersion {
                    found,
                    supported: crate::FORMAT_VERSION,
                });
            }
        }
        let expand = |map: BTreeMap<String, Vec<NodeId>>| -> Result<Vec<Vec<NodeId>>> {
            let mut lists = vec![Vec::new(); n];
            for (key, members) in map {
                let i: usize = key.parse().map_err(|_| {
                    Error::InvalidExposureSpec(format!("node key {key:?} is not an integer"))
                })?;
                if i >= n {
                    return Err(Error::NodeOutOfRange { node: i, n });
                }
                lists[i] = members;
            }
            Ok(lists)
        };
        Self::new(n, expand(doc.pos)?, expand(doc.neg)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ExposureSpecFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    format_version: Option<u32>,
    #[serde(default)]
    pos: BTreeMap<String, Vec<NodeId>>,
    #[serde(default)]
    neg: BTreeMap<String, Vec<NodeId>>,
}

/// A seed set under a cardinality budget. Members are kept sorted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSet {
    members: Vec<NodeId>,
    budget: usize,
}

impl SeedSet {
    pub fn new(mut members: Vec<NodeId>, budget: usize, n: usize) -> Result<Self> {
        members.sort_unstable();
        let before = members.len();
        members.dedup();
        if members.len() != before {
            return Err(Error::InvalidSeedSet("repeated member".into()));
        }
        if let Some(&bad) = members.iter().find(|&&v| v >= n) {
            return Err(Error::NodeOutOfRange { node: bad, n });
        }
        if members.len() > budget {
            return Err(Error::InvalidSeedSet(format!(
                "{} members exceed budget {budget}",
                members.len()
            )));
        }
        Ok(Self { members, budget })
    }

    /// Seed set whose budget equals its size.
    pub fn exact(members: Vec<NodeId>, n: usize) -> Result<Self> {
        let k = members.len();
        Self::new(members, k, n)
    }

    pub fn empty(budget: usize) -> Self {
        Self {
            members: Vec::new(),
            budget,
        }
    }

    pub fn members(&self) -> &[NodeId] {
        &self.members
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, v: NodeId) -> bool {
        self.members.binary_search(&v).is_ok()
    }

    /// A copy with `v` added; fails if the budget is already used up.
    pub fn with(&self, v: NodeId) -> Result<Self> {
        if self.contains(v) {
            return Err(Error::InvalidSeedSet(format!("{v} already seeded")));
        }
        if self.members.len() >= self.budget {
            return Err(Error::InvalidSeedSet(format!(
                "budget {} exhausted",
                self.budget
            )));
        }
        let mut members = self.members.clone();
        let pos = members.partition_point(|&m| m < v);
        members.insert(pos, v);
        Ok(Self {
            members,
            budget: self.budget,
        })
    }

    pub fn mask(&self, n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        for &v in &self.members {
            m[v] = true;
        }
        m
    }
}

/// Exposure counts `(K_i^+, K_i^-)` of every node under activation `z`.
pub fn exposure_counts(z: &[bool], spec: &ExposureSpec) -> Result<Vec<(usize, usize)>> {
    if z.len() != spec.n() {
        return Err(Error::LengthMismatch {
            expected: spec.n(),
            got: z.len(),
        });
    }
    Ok((0..spec.n())
        .map(|i| {
            let count = |s: &[NodeId]| s.iter().filter(|&&j| z[j]).count();
            (count(spec.pos(i)), count(spec.neg(i)))
        })
        .collect())
}

/// Limits for simple-path enumeration.
#[derive(Debug, Clone, Copy)]
pub struct PathLimits {
    /// Longest admissible path in edges; `None` means `n - 1`.
    pub max_len: Option<usize>,
    /// Maximum number of paths visited before giving up.
    pub cap: usize,
}

impl Default for PathLimits {
    fn default() -> Self {
        Self {
            max_len: None,
            cap: DEFAULT_PATH_CAP,
        }
    }
}

/// A simple directed path, stored as its node sequence and edge indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimplePath {
    pub nodes: Vec<NodeId>,
    pub edges: Vec<usize>,
}

impl SimplePath {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Depth-first walk over every simple path starting at `src`, calling
/// `visit(node, depth)` for each path end. Returns the number of paths
/// walked (excluding the trivial one) or a guard error.
fn walk_simple_paths<F>(g: &DirectedGraph, src: NodeId, cap: usize, mut visit: F) -> Result<usize>
where
    F: FnMut(&[NodeId], &[usize]) -> Result<()>,
{
    let mut on_path = vec![false; g.n()];
    let mut nodes = vec![src];
    let mut edges: Vec<usize> = Vec::new();
    // Stack of next out-edge offsets per depth.
    let mut cursor = vec![0usize];
    on_path[src] = true;
    let mut walked = 0usize;
    while let Some(top) = cursor.last_mut() {
        let u = *nodes.last().expect("path is never empty while cursor is");
        let out = g.out_edges(u);
        if *top < out.len() {
            let e = out[*top];
            *top += 1;
            let w = g.edges()[e].dst;
            if on_path[w] {
                continue;
            }
            walked += 1;
            if walked > cap {
                return Err(Error::guard("simple paths", walked as u128, cap as u128));
            }
            nodes.push(w);
            edges.push(e);
            on_path[w] = true;
            visit(&nodes, &edges)?;
            cursor.push(0);
        } else {
            cursor.pop();
            if let Some(w) = nodes.pop() {
                on_path[w] = false;
            }
            edges.pop();
        }
    }
    Ok(walked)
}

/// Every simple path from some seed to `v`, exhaustively.
///
/// Paths may pass through other seeds. Exceeding `limits.cap` visited
/// paths, or finding a path longer than `limits.max_len`, is an error.
pub fn enumerate_simple_paths(
    g: &DirectedGraph,
    seeds: &SeedSet,
    v: NodeId,
    limits: PathLimits,
) -> Result<Vec<SimplePath>> {
    if v >= g.n() {
        return Err(Error::NodeOutOfRange { node: v, n: g.n() });
    }
    if seeds.contains(v) {
        return Err(Error::Precondition(format!("target {v} is a seed")));
    }
    let max_len = limits.max_len.unwrap_or(g.n().saturating_sub(1));
    let mut paths = Vec::new();
    let mut budget = limits.cap;
    for &s in seeds.members() {
        let walked = walk_simple_paths(g, s, budget, |nodes, edges| {
            if *nodes.last().unwrap() == v {
                if edges.len() > max_len {
                    return Err(Error::guard(
                        "simple path length",
                        edges.len() as u128,
                        max_len as u128,
                    ));
                }
                paths.push(SimplePath {
                    nodes: nodes.to_vec(),
                    edges: edges.to_vec(),
                });
            }
            Ok(())
        })?;
        budget -= walked;
    }
    Ok(paths)
}

/// `counts[s][j]` = number of simple paths from `s` to `j` (0 on the diagonal).
pub fn simple_path_counts(g: &DirectedGraph, cap: usize) -> Result<Vec<Vec<u64>>> {
    let mut counts = vec![vec![0u64; g.n()]; g.n()];
    let mut budget = cap;
    for (s, row) in counts.iter_mut().enumerate() {
        let walked = walk_simple_paths(g, s, budget, |nodes, _| {
            row[*nodes.last().unwrap()] += 1;
            Ok(())
        })?;
        budget -= walked;
    }
    Ok(counts)
}

/// Moment-bound constants of one node: `D^±` bounds the first moment and
/// `C^±` the second factorial moment of the non-seed exposure increment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathConstants {
    pub d_pos: u64,
    pub d_neg: u64,
    pub c_pos: u64,
    pub c_neg: u64,
}

impl PathConstants {
    pub fn d(&self, sign: Sign) -> u64 {
        match sign {
            Sign::Pos => self.d_pos,
            Sign::Neg => self.d_neg,
        }
    }

    pub fn c(&self, sign: Sign) -> u64 {
        match sign {
            Sign::Pos => self.c_pos,
            Sign::Neg => self.c_neg,
        }
    }
}

/// Number of subsets of an `n`-set with at most `k` elements.
pub fn count_subsets_upto(n: usize, k: usize) -> u128 {
    (0..=k.min(n)).map(|j| binomial(n, j)).sum()
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Lexicographic iterator over the `k`-subsets of `0..n`.
#[derive(Debug, Clone)]
pub struct KSubsets {
    n: usize,
    current: Option<Vec<usize>>,
}

impl KSubsets {
    pub fn new(n: usize, k: usize) -> Self {
        Self {
            n,
            current: (k <= n).then(|| (0..k).collect()),
        }
    }
}

impl Iterator for KSubsets {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.current.clone()?;
        let k = out.len();
        let mut next = out.clone();
        let mut i = k;
        let advanced = loop {
            if i == 0 {
                break false;
            }
            i -= 1;
            if next[i] < self.n - k + i {
                next[i] += 1;
                for j in i + 1..k {
                    next[j] = next[j - 1] + 1;
                }
                break true;
            }
        };
        self.current = advanced.then_some(next);
        Some(out)
    }
}

/// Every subset of `0..n` with at most `k` members, smallest sizes first.
pub fn subsets_upto(n: usize, k: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..=k.min(n)).flat_map(move |j| KSubsets::new(n, j))
}

/// Per-node `D_i^±(G,K)` and `C_i^±(G,K)`, maximized over all `|S| <= k`.
///
/// `A_j(S)` is the number of simple paths from any seed to `j`;
/// `D = max_S sum_{j in N\S} A_j(S)` and
/// `C = max_S sum_{j != l in N\S} A_j(S) A_l(S)` (ordered pairs).
pub fn path_constants(
    g: &DirectedGraph,
    spec: &ExposureSpec,
    k: usize,
    limits: PathLimits,
    set_limit: u128,
) -> Result<Vec<PathConstants>> {
    if spec.n() != g.n() {
        return Err(Error::LengthMismatch {
            expected: g.n(),
            got: spec.n(),
        });
    }
    let sets = count_subsets_upto(g.n(), k);
    if sets > set_limit {
        return Err(Error::guard("seed sets", sets, set_limit));
    }
    let counts = simple_path_counts(g, limits.cap)?;
    if let Some(max_len) = limits.max_len {
        // Path lengths are bounded by n - 1; only a tighter limit needs checking.
        if max_len < g.n().saturating_sub(1) {
            let longest = longest_simple_path(g, limits.cap)?;
            if longest > max_len {
                return Err(Error::guard(
                    "simple path length",
                    longest as u128,
                    max_len as u128,
                ));
            }
        }
    }

    let n = g.n();
    let mut out = vec![PathConstants::default(); n];
    let mut reach = vec![0u64; n];
    let mut in_set = vec![false; n];
    for set in subsets_upto(n, k) {
        for &s in &set {
            in_set[s] = true;
        }
        for (j, r) in reach.iter_mut().enumerate() {
            *r = if in_set[j] {
                0
            } else {
                set.iter().map(|&s| counts[s][j]).sum()
            };
        }
        for (i, pc) in out.iter_mut().enumerate() {
            for sign in Sign::BOTH {
                let (sum, sum_sq) = spec
                    .sources(sign, i)
                    .iter()
                    .filter(|&&j| !in_set[j])
                    .fold((0u64, 0u64), |(a, b), &j| {
                        (a + reach[j], b + reach[j] * reach[j])
                    });
                let c = sum * sum - sum_sq;
                match sign {
                    Sign::Pos => {
                        pc.d_pos = pc.d_pos.max(sum);
                        pc.c_pos = pc.c_pos.max(c);
                    }
                    Sign::Neg => {
                        pc.d_neg = pc.d_neg.max(sum);
                        pc.c_neg = pc.c_neg.max(c);
                    }
                }
            }
        }
        for &s in &set {
            in_set[s] = false;
        }
    }
    Ok(out)
}

fn longest_simple_path(g: &DirectedGraph, cap: usize) -> Result<usize> {
    let mut longest = 0;
    let mut budget = cap;
    for s in 0..g.n() {
        let walked = walk_simple_paths(g, s, budget, |_, edges| {
            longest = longest.max(edges.len());
            Ok(())
        })?;
        budget -= walked;
    }
    Ok(longest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: usize, edges: &[(usize, usize, f64)]) -> DirectedGraph {
        DirectedGraph::new(
            n,
            edges
                .iter()
                .map(|&(src, dst, p)| Edge { src, dst, p })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn parses_basic_edge_list() {
        let g = parse_graph("0 1 0.1\n1 2 0.2").unwrap();
        assert_eq!(g.n(), 3);
        assert_eq!(g.edge_count(), 2);
        assert_eq!(g.epsilon(), 0.2);
    }

    #[test]
    fn parse_errors_name_the_line() {
        match parse_graph("0 0 0.1") {
            Err(Error::SelfLoop { line: 1, node: 0 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse_graph("# c\n0 1 1.5") {
            Err(Error::ProbabilityOutOfRange { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse_graph("0 1 0.5\n\n0 1 0.2") {
            Err(Error::DuplicateEdge { line: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse_graph("0 1") {
            Err(Error::MalformedLine { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_graph("a 1 0.3").is_err());
    }

    #[test]
    fn edge_list_round_trip_keeps_isolated_nodes() {
        let g = graph(5, &[(0, 1, 0.125), (3, 1, 0.1)]);
        let back = parse_graph(&g.to_edge_list()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn newer_format_is_rejected() {
        assert!(matches!(
            parse_graph("# format_version: 99\n0 1 0.1"),
            Err(Error::FormatVersion { found: 99, .. })
        ));
    }

    #[test]
    fn named_graph_uses_sidecar_ids() {
        let names = NodeNames::parse("alice 1\nbob 0\ncarol 2\n").unwrap();
        let g = parse_named_graph("alice bob 0.5\nbob carol 0.25", &names).unwrap();
        assert_eq!(g.n(), 3);
        assert_eq!(g.edges()[0].src, 1);
        assert_eq!(g.edges()[0].dst, 0);
        assert_eq!(names.name(2), Some("carol"));
        assert!(parse_named_graph("alice dave 0.5", &names).is_err());
        assert!(NodeNames::parse("a 0\nb 2").is_err());
    }

    #[test]
    fn exposure_counts_examples() {
        let spec = ExposureSpec::new(
            4,
            vec![vec![1, 2], vec![], vec![], vec![]],
            vec![vec![3], vec![], vec![], vec![]],
        )
        .unwrap();
        let zeros = exposure_counts(&[false; 4], &spec).unwrap();
        assert!(zeros.iter().all(|&c| c == (0, 0)));
        let ones = exposure_counts(&[true; 4], &spec).unwrap();
        assert_eq!(ones[0], (2, 1));

        let spec5 = ExposureSpec::new(
            5,
            vec![vec![], vec![], vec![], vec![0, 1, 2], vec![]],
            vec![vec![]; 5],
        )
        .unwrap();
        let z = [true, false, true, false, false];
        assert_eq!(exposure_counts(&z, &spec5).unwrap()[3].0, 2);
        assert!(exposure_counts(&z[..4], &spec5).is_err());
    }

    #[test]
    fn exposure_spec_validation() {
        assert!(ExposureSpec::new(2, vec![vec![0], vec![]], vec![vec![], vec![]]).is_err());
        assert!(ExposureSpec::new(2, vec![vec![5], vec![]], vec![vec![], vec![]]).is_err());
        let overlap = ExposureSpec::new(2, vec![vec![1], vec![]], vec![vec![1], vec![]]).unwrap();
        assert_eq!(overlap.overlaps(), vec![(0, 1)]);
    }

    #[test]
    fn exposure_spec_json_defaults_missing_nodes() {
        let spec = ExposureSpec::from_json(r#"{"pos": {"2": [0, 1]}, "neg": {}}"#, 3).unwrap();
        assert_eq!(spec.pos(2), &[0, 1]);
        assert!(spec.pos(0).is_empty());
        assert!(spec.neg(2).is_empty());
        let back = ExposureSpec::from_json(&spec.to_json(), 3).unwrap();
        assert_eq!(back, spec);
        assert!(ExposureSpec::from_json(r#"{"pos": {"7": [0]}}"#, 3).is_err());
    }

    #[test]
    fn seed_set_invariants() {
        assert!(SeedSet::new(vec![0, 1, 2], 2, 5).is_err());
        assert!(SeedSet::new(vec![7], 2, 5).is_err());
        assert!(SeedSet::new(vec![1, 1], 2, 5).is_err());
        let s = SeedSet::new(vec![3, 1], 3, 5).unwrap();
        assert_eq!(s.members(), &[1, 3]);
        let t = s.with(2).unwrap();
        assert_eq!(t.members(), &[1, 2, 3]);
        assert!(t.with(4).is_err());
    }

    #[test]
    fn single_edge_single_path() {
        let g = graph(2, &[(0, 1, 0.5)]);
        let s = SeedSet::exact(vec![0], 2).unwrap();
        let paths = enumerate_simple_paths(&g, &s, 1, PathLimits::default()).unwrap();
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].nodes, vec![0, 1]);
    }

    #[test]
    fn diamond_has_two_paths() {
        let g = graph(3, &[(0, 1, 0.1), (0, 2, 0.1), (2, 1, 0.1)]);
        let s = SeedSet::exact(vec![0], 3).unwrap();
        let mut paths: Vec<Vec<usize>> = enumerate_simple_paths(&g, &s, 1, PathLimits::default())
            .unwrap()
            .into_iter()
            .map(|p| p.nodes)
            .collect();
        paths.sort();
        assert_eq!(paths, vec![vec![0, 1], vec![0, 2, 1]]);
    }

    #[test]
    fn seed_target_is_rejected() {
        let g = graph(2, &[(0, 1, 0.5)]);
        let s = SeedSet::exact(vec![0], 2).unwrap();
        assert!(matches!(
            enumerate_simple_paths(&g, &s, 0, PathLimits::default()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn path_caps_are_errors() {
        let g = graph(3, &[(0, 1, 0.1), (1, 2, 0.1)]);
        let s = SeedSet::exact(vec![0], 3).unwrap();
        let tight = PathLimits {
            max_len: Some(1),
            cap: 100,
        };
        assert!(enumerate_simple_paths(&g, &s, 2, tight)
            .unwrap_err()
            .is_resource_guard());
        let capped = PathLimits {
            max_len: None,
            cap: 1,
        };
        assert!(enumerate_simple_paths(&g, &s, 2, capped)
            .unwrap_err()
            .is_resource_guard());
    }

    #[test]
    fn path_constants_on_chain() {
        let g = graph(3, &[(0, 1, 0.1), (1, 2, 0.1)]);
        let spec = ExposureSpec::new(3, vec![vec![], vec![], vec![1]], vec![vec![]; 3]).unwrap();
        let pc = path_constants(&g, &spec, 1, PathLimits::default(), DEFAULT_SET_LIMIT).unwrap();
        assert_eq!(pc[2].d_pos, 1);
        assert_eq!(pc[2].c_pos, 0);
        assert_eq!(pc[0], PathConstants::default());
    }

    #[test]
    fn path_constants_count_ordered_pairs() {
        // 0 -> 1 and 0 -> 2, node 3 listens to both 1 and 2.
        let g = graph(4, &[(0, 1, 0.1), (0, 2, 0.1)]);
        let spec = ExposureSpec::new(4, vec![vec![], vec![], vec![], vec![1, 2]], vec![vec![]; 4])
            .unwrap();
        let pc = path_constants(&g, &spec, 1, PathLimits::default(), DEFAULT_SET_LIMIT).unwrap();
        assert_eq!(pc[3].c_pos, 2);
        assert_eq!(pc[3].d_pos, 2);
    }

    #[test]
    fn empty_spec_gives_zero_constants() {
        let g = graph(3, &[(0, 1, 0.3), (1, 2, 0.3), (0, 2, 0.3)]);
        let pc = path_constants(
            &g,
            &ExposureSpec::empty(3),
            2,
            PathLimits::default(),
            DEFAULT_SET_LIMIT,
        )
        .unwrap();
        assert!(pc.iter().all(|c| *c == PathConstants::default()));
    }

    #[test]
    fn subset_enumeration_counts() {
        assert_eq!(KSubsets::new(5, 2).count(), 10);
        assert_eq!(
            KSubsets::new(3, 0).collect::<Vec<_>>(),
            vec![Vec::<usize>::new()]
        );
        assert_eq!(KSubsets::new(2, 3).count(), 0);
        assert_eq!(subsets_upto(6, 2).count() as u128, count_subsets_upto(6, 2));
        let first: Vec<_> = KSubsets::new(4, 2).take(3).collect();
        assert_eq!(first, vec![vec![0, 1], vec![0, 2], vec![0, 3]]);
        assert_eq!(binomial(12, 3), 220);
    }
}
