//! Typed representation and validation of a radial planning instance.
//!
//! A case is a tree of nodes rooted at the substation (node 0), a set of
//! candidate line expansions, flexible bids and offers per node and period,
//! fixed (non-flexible) loads, and the substation trade prices. Everything
//! downstream of this module assumes a case that passed [`validate_case`],
//! so the checks here are the only place topology errors are caught.
//!
//! Conventions: voltages are per-unit, powers are kW/kVAr, prices are
//! p/kWh, costs are pence. Line admittances are per-unit on the case's
//! declared voltage and power base; the bundled cases use a 1 kVA power
//! base so per-unit power and kW coincide numerically.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap, HashSet};
use thiserror::Error;

/// Bus in the network. Node 0 is the substation/slack; its squared voltage
/// magnitude is pinned to 1 p.u. in every formulation built from the case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    /// Minimum voltage magnitude, p.u.
    pub v_min: f64,
    /// Maximum voltage magnitude, p.u.
    pub v_max: f64,
}

/// A discrete reinforcement choice for one line. `m` scales the admittance
/// and capacity added; costs are quoted at the m = 1 basis and scale with m.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpansionOption {
    /// Expansion fraction in [0, 1]. Every line carries m = 0 (do nothing).
    pub m: f64,
    /// Fixed cost at the m = 1 basis, pence.
    #[serde(default)]
    pub k_fix: f64,
    /// Variable cost at the m = 1 basis, pence per kW of existing rating.
    #[serde(default)]
    pub k_var: f64,
}

/// Directed line stored once, `from` nearer the root.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    /// Conductance, p.u.
    pub a0: f64,
    /// Negative susceptance, p.u. (positive for inductive lines).
    pub e0: f64,
    /// Maximum power flow leaving `from`, kW.
    pub f_max: f64,
    /// Maximum power flow leaving `to` (reverse direction), kW.
    pub f_min: f64,
    /// Candidate expansions; must include m = 0.
    pub expansions: Vec<ExpansionOption>,
}

/// Flexible demand bid: willingness to pay `price` for up to `p_max` kW.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemandBid {
    pub id: String,
    pub node: usize,
    pub t: usize,
    /// Bid price, p/kWh.
    pub price: f64,
    pub p_min: f64,
    pub p_max: f64,
    #[serde(default)]
    pub q_min: f64,
    #[serde(default)]
    pub q_max: f64,
}

/// Flexible generation offer: willing to produce up to `p_max` kW at `price`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenOffer {
    pub id: String,
    pub node: usize,
    pub t: usize,
    /// Offer price, p/kWh.
    pub price: f64,
    pub p_min: f64,
    pub p_max: f64,
    #[serde(default)]
    pub q_min: f64,
    #[serde(default)]
    pub q_max: f64,
}

/// Non-flexible demand that must be served.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixedLoad {
    pub node: usize,
    pub t: usize,
    /// kW.
    pub d: f64,
}

/// Substation trade and reserve prices for one period.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TradePrices {
    pub t: usize,
    /// Active power trade price at node 0, p/kWh.
    pub c_p0: f64,
    /// Reactive power trade price at node 0, p/kVArh.
    #[serde(default)]
    pub c_q0: f64,
    /// Upward reserve price, p/kWh.
    #[serde(default)]
    pub c_up: f64,
    /// Downward reserve price, p/kWh.
    #[serde(default)]
    pub c_down: f64,
}

/// A complete planning instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkCase {
    #[serde(default)]
    pub name: String,
    /// Voltage base, kV (metadata; admittances are already p.u.).
    #[serde(default = "one")]
    pub base_kv: f64,
    /// Power base, kVA. The bundled cases use 1 so kW equals p.u.
    #[serde(default = "one")]
    pub base_kva: f64,
    pub nodes: Vec<Node>,
    pub lines: Vec<Line>,
    #[serde(default)]
    pub demand_bids: Vec<DemandBid>,
    #[serde(default)]
    pub gen_offers: Vec<GenOffer>,
    #[serde(default)]
    pub fixed_loads: Vec<FixedLoad>,
    pub trade_prices: Vec<TradePrices>,
    /// Residual operating costs to recover through the tariff, pence.
    #[serde(default)]
    pub k_op: f64,
    /// Total investment budget, pence.
    #[serde(default = "f64_inf")]
    pub k_tot: f64,
    /// Require every line upstream of an expanded line to be expanded too.
    #[serde(default)]
    pub chain_constraint: bool,
    /// Partition of the non-slack nodes into fixed-price areas. Empty means
    /// one area containing all of them.
    #[serde(default)]
    pub areas: Vec<Vec<usize>>,
}

fn one() -> f64 {
    1.0
}

fn f64_inf() -> f64 {
    f64::INFINITY
}

impl NetworkCase {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Sorted distinct periods, taken from the trade-price table.
    pub fn times(&self) -> Vec<usize> {
        let mut ts: Vec<usize> = self.trade_prices.iter().map(|tp| tp.t).collect();
        ts.sort_unstable();
        ts.dedup();
        ts
    }

    pub fn trade_price(&self, t: usize) -> Option<&TradePrices> {
        self.trade_prices.iter().find(|tp| tp.t == t)
    }

    /// Fixed-price areas with the default applied: when none are declared,
    /// all non-slack nodes form a single area.
    pub fn effective_areas(&self) -> Vec<Vec<usize>> {
        if self.areas.is_empty() {
            vec![(1..self.num_nodes()).collect()]
        } else {
            self.areas.clone()
        }
    }

    pub fn line_index(&self, from: usize, to: usize) -> Option<usize> {
        self.lines.iter().position(|l| l.from == from && l.to == to)
    }
}

/// Everything [`validate_case`] can object to, with enough location detail
/// to fix the case file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// Adding this line closes a loop.
    CyclicTopology { line: (usize, usize) },
    /// These nodes are unreachable from the substation.
    Disconnected { nodes: Vec<usize> },
    /// Any numeric invariant failure, with the offending location.
    BoundViolation { location: String, detail: String },
    DuplicateLine { line: (usize, usize) },
    MissingSlack,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::CyclicTopology { line } => {
                write!(f, "line ({},{}) closes a cycle", line.0, line.1)
            }
            Violation::Disconnected { nodes } => {
                write!(f, "nodes {nodes:?} unreachable from the substation")
            }
            Violation::BoundViolation { location, detail } => {
                write!(f, "{location}: {detail}")
            }
            Violation::DuplicateLine { line } => {
                write!(f, "line ({},{}) listed more than once", line.0, line.1)
            }
            Violation::MissingSlack => write!(f, "no node with id 0"),
        }
    }
}

/// Outcome of [`validate_case`]: empty means the case is usable.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_ok() {
            writeln!(f, "case valid")?;
        } else {
            for v in &self.violations {
                writeln!(f, "violation: {v}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("line ({0},{1}) has no expansion option m={2}")]
    UnknownExpansion(usize, usize, String),
}

/// Check every structural and numeric invariant of the case, reporting all
/// violations rather than stopping at the first.
pub fn validate_case(case: &NetworkCase) -> ValidationReport {
    let mut out = ValidationReport::default();
    let n = case.nodes.len();

    let mut ids = HashSet::new();
    for node in &case.nodes {
        if !ids.insert(node.id) {
            out.violations.push(Violation::BoundViolation {
                location: format!("node {}", node.id),
                detail: "duplicate node id".into(),
            });
        }
        if !(node.v_min > 0.0 && node.v_min <= node.v_max) {
            out.violations.push(Violation::BoundViolation {
                location: format!("node {}", node.id),
                detail: format!("need 0 < v_min <= v_max, got [{}, {}]", node.v_min, node.v_max),
            });
        }
    }
    if !ids.contains(&0) {
        out.violations.push(Violation::MissingSlack);
    }
    for node in &case.nodes {
        if node.id >= n {
            out.violations.push(Violation::BoundViolation {
                location: format!("node {}", node.id),
                detail: format!("ids must be contiguous 0..{n}"),
            });
        }
    }

    let node_exists = |id: usize| ids.contains(&id);
    let mut seen_lines = HashSet::new();
    for line in &case.lines {
        let tag = (line.from, line.to);
        if !seen_lines.insert((tag.0.min(tag.1), tag.0.max(tag.1))) {
            out.violations.push(Violation::DuplicateLine { line: tag });
        }
        for end in [line.from, line.to] {
            if !node_exists(end) {
                out.violations.push(Violation::BoundViolation {
                    location: format!("line ({},{})", line.from, line.to),
                    detail: format!("references unknown node {end}"),
                });
            }
        }
        if !(line.a0 > 0.0 && line.e0 > 0.0) {
            out.violations.push(Violation::BoundViolation {
                location: format!("line ({},{})", line.from, line.to),
                detail: "conductance a0 and susceptance e0 must be positive".into(),
            });
        }
        if line.f_max < 0.0 || line.f_min < 0.0 {
            out.violations.push(Violation::BoundViolation {
                location: format!("line ({},{})", line.from, line.to),
                detail: "flow limits must be nonnegative".into(),
            });
        }
        let mut ms = BTreeSet::new();
        for opt in &line.expansions {
            if !(0.0..=1.0).contains(&opt.m) {
                out.violations.push(Violation::BoundViolation {
                    location: format!("line ({},{}) m={}", line.from, line.to, opt.m),
                    detail: "expansion fraction must lie in [0, 1]".into(),
                });
            }
            if !ms.insert(ordered(opt.m)) {
                out.violations.push(Violation::BoundViolation {
                    location: format!("line ({},{})", line.from, line.to),
                    detail: format!("expansion fraction m={} listed twice", opt.m),
                });
            }
        }
        if !line.expansions.iter().any(|o| o.m == 0.0) {
            out.violations.push(Violation::BoundViolation {
                location: format!("line ({},{})", line.from, line.to),
                detail: "the m=0 (no expansion) option is required".into(),
            });
        }
    }

    // Tree check: BFS from the slack over an undirected adjacency, flagging
    // cycle-closing lines and unreachable nodes, then line orientation.
    if ids.contains(&0) {
        let mut adj: HashMap<usize, Vec<(usize, usize)>> = HashMap::new();
        for (li, line) in case.lines.iter().enumerate() {
            if node_exists(line.from) && node_exists(line.to) {
                adj.entry(line.from).or_default().push((line.to, li));
                adj.entry(line.to).or_default().push((line.from, li));
            }
        }
        let mut parent: HashMap<usize, usize> = HashMap::new();
        let mut visited = HashSet::from([0usize]);
        let mut used_lines = HashSet::new();
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(v) = queue.pop_front() {
            if let Some(nbrs) = adj.get(&v) {
                for &(w, li) in nbrs {
                    if used_lines.contains(&li) {
                        continue;
                    }
                    if visited.insert(w) {
                        used_lines.insert(li);
                        parent.insert(w, v);
                        queue.push_back(w);
                    } else {
                        used_lines.insert(li);
                        let l = &case.lines[li];
                        out.violations
                            .push(Violation::CyclicTopology { line: (l.from, l.to) });
                    }
                }
            }
        }
        let unreachable: Vec<usize> = case
            .nodes
            .iter()
            .map(|nd| nd.id)
            .filter(|id| !visited.contains(id))
            .collect();
        if !unreachable.is_empty() {
            out.violations.push(Violation::Disconnected { nodes: unreachable });
        }
        for line in &case.lines {
            if parent.get(&line.to) != Some(&line.from) && visited.contains(&line.to) {
                // Only meaningful on an otherwise intact tree.
                if out
                    .violations
                    .iter()
                    .all(|v| !matches!(v, Violation::CyclicTopology { .. }))
                {
                    out.violations.push(Violation::BoundViolation {
                        location: format!("line ({},{})", line.from, line.to),
                        detail: "line direction must point away from the root".into(),
                    });
                }
            }
        }
    }

    let times: HashSet<usize> = case.times().into_iter().collect();
    let mut seen_tp = HashSet::new();
    for tp in &case.trade_prices {
        if !seen_tp.insert(tp.t) {
            out.violations.push(Violation::BoundViolation {
                location: format!("trade_prices t={}", tp.t),
                detail: "duplicate period".into(),
            });
        }
        for (label, v) in [
            ("c_p0", tp.c_p0),
            ("c_q0", tp.c_q0),
            ("c_up", tp.c_up),
            ("c_down", tp.c_down),
        ] {
            if !v.is_finite() {
                out.violations.push(Violation::BoundViolation {
                    location: format!("trade_prices t={}", tp.t),
                    detail: format!("{label} must be finite"),
                });
            }
        }
    }

    let mut check_participant =
        |kind: &str, id: &str, node: usize, t: usize, pmin: f64, pmax: f64, qmin: f64, qmax: f64| {
            let loc = format!("{kind} {id} (node {node}, t={t})");
            if !node_exists(node) {
                out.violations.push(Violation::BoundViolation {
                    location: loc.clone(),
                    detail: format!("references unknown node {node}"),
                });
            }
            if node == 0 {
                out.violations.push(Violation::BoundViolation {
                    location: loc.clone(),
                    detail: "participants cannot sit at the substation".into(),
                });
            }
            if !times.contains(&t) {
                out.violations.push(Violation::BoundViolation {
                    location: loc.clone(),
                    detail: format!("period {t} has no trade prices"),
                });
            }
            if pmin > pmax || qmin > qmax {
                out.violations.push(Violation::BoundViolation {
                    location: loc,
                    detail: format!(
                        "inverted bounds: p [{pmin}, {pmax}], q [{qmin}, {qmax}]"
                    ),
                });
            }
        };
    for b in &case.demand_bids {
        check_participant("demand bid", &b.id, b.node, b.t, b.p_min, b.p_max, b.q_min, b.q_max);
    }
    for g in &case.gen_offers {
        check_participant("gen offer", &g.id, g.node, g.t, g.p_min, g.p_max, g.q_min, g.q_max);
    }
    for fl in &case.fixed_loads {
        if !node_exists(fl.node) || fl.node == 0 {
            out.violations.push(Violation::BoundViolation {
                location: format!("fixed load at node {} t={}", fl.node, fl.t),
                detail: "must sit at an existing non-slack node".into(),
            });
        }
        if fl.d < 0.0 {
            out.violations.push(Violation::BoundViolation {
                location: format!("fixed load at node {} t={}", fl.node, fl.t),
                detail: format!("negative demand {}", fl.d),
            });
        }
        if !times.contains(&fl.t) {
            out.violations.push(Violation::BoundViolation {
                location: format!("fixed load at node {} t={}", fl.node, fl.t),
                detail: format!("period {} has no trade prices", fl.t),
            });
        }
    }

    // Areas must partition the non-slack nodes when declared.
    if !case.areas.is_empty() {
        let mut covered = HashSet::new();
        for (ai, area) in case.areas.iter().enumerate() {
            for &nd in area {
                if nd == 0 || !node_exists(nd) {
                    out.violations.push(Violation::BoundViolation {
                        location: format!("area {ai}"),
                        detail: format!("node {nd} is not a non-slack node"),
                    });
                }
                if !covered.insert(nd) {
                    out.violations.push(Violation::BoundViolation {
                        location: format!("area {ai}"),
                        detail: format!("node {nd} appears in two areas"),
                    });
                }
            }
        }
        for node in &case.nodes {
            if node.id != 0 && !covered.contains(&node.id) {
                out.violations.push(Violation::BoundViolation {
                    location: format!("node {}", node.id),
                    detail: "not assigned to any fixed-price area".into(),
                });
            }
        }
    }

    if case.k_op < 0.0 {
        out.violations.push(Violation::BoundViolation {
            location: "k_op".into(),
            detail: "residual costs must be nonnegative".into(),
        });
    }
    if case.k_tot < 0.0 {
        out.violations.push(Violation::BoundViolation {
            location: "k_tot".into(),
            detail: "investment budget must be nonnegative".into(),
        });
    }
    out
}

fn ordered(v: f64) -> u64 {
    v.to_bits()
}

/// Parent pointers and per-node root paths, computed once per case.
#[derive(Debug, Clone)]
pub struct Topology {
    /// parent[n] = (parent node, line index), None for the root.
    pub parent: Vec<Option<(usize, usize)>>,
}

impl Topology {
    pub fn of(case: &NetworkCase) -> Result<Topology, TopologyError> {
        let n = case.num_nodes();
        let mut parent = vec![None; n];
        for (li, line) in case.lines.iter().enumerate() {
            if line.to >= n {
                return Err(TopologyError::UnknownNode(line.to));
            }
            parent[line.to] = Some((line.from, li));
        }
        Ok(Topology { parent })
    }
}

/// Line indices on the unique path from `n` up to the root, nearest first.
pub fn path_to_root(case: &NetworkCase, n: usize) -> Result<Vec<usize>, TopologyError> {
    if n >= case.num_nodes() {
        return Err(TopologyError::UnknownNode(n));
    }
    let topo = Topology::of(case)?;
    let mut path = Vec::new();
    let mut cur = n;
    while let Some((up, li)) = topo.parent[cur] {
        path.push(li);
        cur = up;
        if path.len() > case.num_nodes() {
            break; // cyclic input; validation reports it separately
        }
    }
    Ok(path)
}

/// All nodes whose root path passes through `i`, including `i` itself.
pub fn subtree_nodes(case: &NetworkCase, i: usize) -> Result<BTreeSet<usize>, TopologyError> {
    if i >= case.num_nodes() {
        return Err(TopologyError::UnknownNode(i));
    }
    let topo = Topology::of(case)?;
    let mut out = BTreeSet::new();
    for node in &case.nodes {
        let mut cur = node.id;
        let mut hops = 0;
        loop {
            if cur == i {
                out.insert(node.id);
                break;
            }
            match topo.parent[cur] {
                Some((up, _)) => cur = up,
                None => break,
            }
            hops += 1;
            if hops > case.num_nodes() {
                break;
            }
        }
    }
    Ok(out)
}

/// Expansion arithmetic for one line at fraction `m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpandedParams {
    /// Conductance after expansion, p.u.
    pub a: f64,
    /// Negative susceptance after expansion, p.u.
    pub e: f64,
    /// Extra flow capacity, kW, added to both direction limits.
    pub f_add: f64,
    /// Fixed cost incurred, pence.
    pub k_fix_cost: f64,
    /// Variable cost incurred, pence.
    pub k_var_cost: f64,
}

impl ExpandedParams {
    pub fn total_cost(&self) -> f64 {
        self.k_fix_cost + self.k_var_cost
    }
}

/// Parameters of `line` reinforced at fraction `m`, which must be one of the
/// line's listed options.
pub fn expanded_params(line: &Line, m: f64) -> Result<ExpandedParams, TopologyError> {
    let opt = line
        .expansions
        .iter()
        .find(|o| o.m == m)
        .ok_or_else(|| TopologyError::UnknownExpansion(line.from, line.to, format!("{m}")))?;
    Ok(ExpandedParams {
        a: line.a0 * (1.0 + opt.m),
        e: line.e0 * (1.0 + opt.m),
        f_add: opt.m * line.f_max,
        k_fix_cost: opt.m * opt.k_fix,
        k_var_cost: opt.m * opt.k_var * line.f_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;

    fn chain5() -> NetworkCase {
        cases::surrogate_5bus(cases::Surrogate5Config::default())
    }

    #[test]
    fn five_bus_chain_is_valid() {
        let report = validate_case(&chain5());
        assert!(report.is_ok(), "{report}");
    }

    #[test]
    fn cycle_flagged() {
        let mut case = chain5();
        case.lines.push(Line {
            from: 4,
            to: 0,
            a0: 1.0,
            e0: 1.0,
            f_max: 10.0,
            f_min: 10.0,
            expansions: vec![ExpansionOption { m: 0.0, k_fix: 0.0, k_var: 0.0 }],
        });
        let report = validate_case(&case);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::CyclicTopology { .. })));
    }

    #[test]
    fn disconnected_flagged() {
        let mut case = chain5();
        case.lines.remove(1); // cut between 1 and 2
        let report = validate_case(&case);
        match report
            .violations
            .iter()
            .find(|v| matches!(v, Violation::Disconnected { .. }))
        {
            Some(Violation::Disconnected { nodes }) => assert_eq!(nodes, &vec![2, 3, 4]),
            other => panic!("expected Disconnected, got {other:?}"),
        }
    }

    #[test]
    fn inverted_bid_bounds_flagged() {
        let mut case = chain5();
        case.demand_bids[0].p_min = 10.0;
        case.demand_bids[0].p_max = 5.0;
        let report = validate_case(&case);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::BoundViolation { .. })));
    }

    #[test]
    fn missing_slack_flagged() {
        let mut case = chain5();
        case.nodes.retain(|n| n.id != 0);
        let report = validate_case(&case);
        assert!(report.violations.contains(&Violation::MissingSlack));
    }

    #[test]
    fn duplicate_line_flagged() {
        let mut case = chain5();
        let dup = case.lines[0].clone();
        case.lines.push(dup);
        let report = validate_case(&case);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::DuplicateLine { .. })));
    }

    #[test]
    fn paths_and_subtrees_on_the_chain() {
        let case = chain5();
        assert_eq!(path_to_root(&case, 0).unwrap(), Vec::<usize>::new());
        assert_eq!(path_to_root(&case, 1).unwrap(), vec![0]);
        // Node 4 walks lines (3,4), (2,3), (1,2), (0,1) = indices 3,2,1,0.
        assert_eq!(path_to_root(&case, 4).unwrap(), vec![3, 2, 1, 0]);
        let sub3: Vec<usize> = subtree_nodes(&case, 3).unwrap().into_iter().collect();
        assert_eq!(sub3, vec![3, 4]);
        let sub1: Vec<usize> = subtree_nodes(&case, 1).unwrap().into_iter().collect();
        assert_eq!(sub1, vec![1, 2, 3, 4]);
        assert_eq!(
            path_to_root(&case, 10),
            Err(TopologyError::UnknownNode(10))
        );
    }

    #[test]
    fn subtree_membership_matches_paths() {
        // j in subtree(i) iff i sits on j's root path (or i = j).
        let case = chain5();
        for i in 1..case.num_nodes() {
            let sub = subtree_nodes(&case, i).unwrap();
            for j in 0..case.num_nodes() {
                let on_path = i == j
                    || path_to_root(&case, j)
                        .unwrap()
                        .iter()
                        .any(|&li| case.lines[li].to == i);
                assert_eq!(sub.contains(&j), on_path, "i={i} j={j}");
            }
        }
    }

    #[test]
    fn expansion_arithmetic() {
        let line = Line {
            from: 0,
            to: 1,
            a0: 2.0,
            e0: 1.0,
            f_max: 100.0,
            f_min: 100.0,
            expansions: vec![
                ExpansionOption { m: 0.0, k_fix: 0.0, k_var: 0.0 },
                ExpansionOption { m: 0.25, k_fix: 100.0, k_var: 0.1 },
                ExpansionOption { m: 0.5, k_fix: 100.0, k_var: 0.1 },
            ],
        };
        let p0 = expanded_params(&line, 0.0).unwrap();
        assert_eq!((p0.a, p0.e, p0.f_add), (2.0, 1.0, 0.0));
        assert_eq!(p0.total_cost(), 0.0);
        let p = expanded_params(&line, 0.5).unwrap();
        assert_eq!(p.a, 3.0);
        assert_eq!(p.e, 1.5);
        assert_eq!(p.f_add, 50.0);
        // Fixed cost scales with m: basis 100 p at m=0.25 costs 25 p.
        let q = expanded_params(&line, 0.25).unwrap();
        assert_eq!(q.k_fix_cost, 25.0);
        assert_eq!(q.k_var_cost, 0.25 * 0.1 * 100.0);
        assert!(expanded_params(&line, 0.75).is_err());
        // Monotone in m across the listed options.
        assert!(p.a > q.a && p.e > q.e && p.f_add > q.f_add);
        assert!(p.total_cost() > q.total_cost());
    }
}
