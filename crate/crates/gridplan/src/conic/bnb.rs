//! Branch and bound over the binary columns of a conic program.
//!
//! Relaxations keep binaries in [0, 1]; nodes tighten them to singletons via
//! bound overrides, so the backend never re-lowers the model structure. The
//! search is best-first on the relaxation bound with deterministic
//! tie-breaking (node id), and an early fix-and-round heuristic seeds the
//! incumbent. With `threads > 1` the frontier is evaluated in waves whose
//! results are folded in node-id order, so the explored tree and the answer
//! do not depend on thread scheduling.

use super::{ConicProgram, ConicSolution, ConicSolver, SolveOptions, SolveStatus, SolverError};
use rayon::prelude::*;
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

/// One row of the search log, written to CSV by callers that want a trace.
#[derive(Debug, Clone)]
pub struct NodeRecord {
    pub node: usize,
    pub depth: usize,
    pub outcome: NodeOutcome,
    pub bound: f64,
    pub incumbent: Option<f64>,
    pub gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeOutcome {
    Branched,
    Integral,
    Pruned,
    Infeasible,
    Numerical,
}

impl std::fmt::Display for NodeOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            NodeOutcome::Branched => "branched",
            NodeOutcome::Integral => "integral",
            NodeOutcome::Pruned => "pruned",
            NodeOutcome::Infeasible => "infeasible",
            NodeOutcome::Numerical => "numerical",
        };
        f.write_str(s)
    }
}

#[derive(Debug)]
pub struct MipSolution {
    pub status: SolveStatus,
    /// Continuous re-solve with every binary fixed at the incumbent, so the
    /// duals correspond to the integral solution.
    pub fixed: Option<ConicSolution>,
    pub obj: f64,
    pub best_bound: f64,
    pub gap: f64,
    pub nodes: usize,
    pub log: Vec<NodeRecord>,
}

impl MipSolution {
    pub fn x(&self) -> &[f64] {
        &self.fixed.as_ref().expect("no incumbent").x
    }
}

struct Node {
    id: usize,
    depth: usize,
    fixes: Vec<(usize, f64)>,
    bound: f64,
}

/// Min-heap ordering on (bound, id): smallest bound first, then oldest node.
struct HeapItem(Node);

impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapItem {}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .bound
            .total_cmp(&self.0.bound)
            .then_with(|| other.0.id.cmp(&self.0.id))
    }
}

/// Exact objective for a candidate incumbent, given the solution vector with
/// binaries already rounded. Returning `None` rejects the candidate. Used
/// when the relaxation objective is not trustworthy enough to rank
/// incumbents, e.g. big-M models where interior-point tolerance leaks into
/// the objective; bounds still come from the relaxation.
pub type IncumbentEval<'a> = &'a (dyn Fn(&[f64]) -> Result<Option<f64>, SolverError> + Sync);

pub fn solve_mip(
    prog: &ConicProgram,
    solver: &dyn ConicSolver,
    opts: &SolveOptions,
) -> Result<MipSolution, SolverError> {
    solve_mip_with_eval(prog, solver, opts, None)
}

pub fn solve_mip_with_eval(
    prog: &ConicProgram,
    solver: &dyn ConicSolver,
    opts: &SolveOptions,
    eval: Option<IncumbentEval>,
) -> Result<MipSolution, SolverError> {
    if prog.binaries.is_empty() {
        let sol = solver.solve(prog, opts)?;
        let obj = sol.obj;
        let status = sol.status;
        return Ok(MipSolution {
            status,
            obj,
            best_bound: obj,
            gap: 0.0,
            nodes: 1,
            log: Vec::new(),
            fixed: Some(sol),
        });
    }

    let started = Instant::now();
    let mut log = Vec::new();
    let mut incumbent: Option<(f64, Vec<f64>)> = None;
    let mut heap = BinaryHeap::new();
    let mut next_id = 0usize;
    let mut nodes_done = 0usize;
    let mut status = SolveStatus::Optimal;

    heap.push(HeapItem(Node {
        id: alloc_id(&mut next_id),
        depth: 0,
        fixes: Vec::new(),
        bound: f64::NEG_INFINITY,
    }));

    let wave = opts.threads.max(1);
    while !heap.is_empty() {
        if opts.time_limit > 0.0 && started.elapsed().as_secs_f64() > opts.time_limit {
            status = SolveStatus::LimitReached;
            break;
        }
        // Global bound = best over current frontier; prune against incumbent.
        if let Some((inc, _)) = &incumbent {
            let bb = heap.iter().map(|h| h.0.bound).fold(f64::INFINITY, f64::min);
            if rel_gap(*inc, bb) <= opts.mip_gap {
                break;
            }
        }

        let mut batch = Vec::with_capacity(wave);
        for _ in 0..wave {
            match heap.pop() {
                Some(item) => batch.push(item.0),
                None => break,
            }
        }
        // Evaluate the wave; fold results in node-id order for determinism.
        let solved: Vec<(Node, Result<ConicSolution, SolverError>)> = if wave == 1 {
            batch
                .into_iter()
                .map(|nd| {
                    let r = solve_node(prog, solver, opts, &nd);
                    (nd, r)
                })
                .collect()
        } else {
            let mut v: Vec<_> = batch
                .into_par_iter()
                .map(|nd| {
                    let r = solve_node(prog, solver, opts, &nd);
                    (nd, r)
                })
                .collect();
            v.sort_by_key(|(nd, _)| nd.id);
            v
        };

        for (nd, res) in solved {
            nodes_done += 1;
            let sol = match res {
                Ok(s) => s,
                Err(e) => return Err(e),
            };
            let inc_obj = incumbent.as_ref().map(|(v, _)| *v);
            match sol.status {
                SolveStatus::Infeasible => {
                    push_log(&mut log, &nd, NodeOutcome::Infeasible, f64::INFINITY, inc_obj);
                    continue;
                }
                SolveStatus::Unbounded => {
                    // A relaxation ray makes the whole problem unbounded.
                    return Ok(MipSolution {
                        status: SolveStatus::Unbounded,
                        fixed: None,
                        obj: f64::NEG_INFINITY,
                        best_bound: f64::NEG_INFINITY,
                        gap: f64::INFINITY,
                        nodes: nodes_done,
                        log,
                    });
                }
                SolveStatus::Optimal => {}
                _ => {
                    // Cannot trust the bound: branch without pruning, or give
                    // up on this node if it is already fully fixed.
                    push_log(&mut log, &nd, NodeOutcome::Numerical, f64::NEG_INFINITY, inc_obj);
                    if nd.fixes.len() < prog.binaries.len() {
                        branch(prog, &nd, &sol, f64::NEG_INFINITY, &mut heap, &mut next_id);
                    }
                    continue;
                }
            }
            let bound = sol.obj;
            if let Some((inc, _)) = &incumbent {
                if bound >= *inc - 1e-12 || rel_gap(*inc, bound) <= opts.mip_gap {
                    push_log(&mut log, &nd, NodeOutcome::Pruned, bound, inc_obj);
                    continue;
                }
            }
            let frac = most_fractional(prog, &sol.x, opts.int_tol);
            match frac {
                None => {
                    // Integral within tolerance: evaluate the candidate with
                    // every binary pinned exactly. A binary left interior by
                    // int_tol can leak through big-M rows and flatter the
                    // node objective, and an incumbent value that is too
                    // good would prune nodes it should not.
                    let xi = round_binaries(prog, &sol.x);
                    if let Some(val) = candidate_value(prog, solver, opts, eval, &xi)? {
                        let accept = incumbent
                            .as_ref()
                            .map_or(true, |(inc, _)| val < *inc - 1e-12);
                        if accept {
                            incumbent = Some((val, xi));
                        }
                    }
                    push_log(
                        &mut log,
                        &nd,
                        NodeOutcome::Integral,
                        bound,
                        incumbent.as_ref().map(|(v, _)| *v),
                    );
                }
                Some(_col) => {
                    // Root node: try the rounding heuristic to seed pruning.
                    if nd.depth == 0 && incumbent.is_none() {
                        if let Some((hobj, hx)) = heuristic(prog, solver, opts, eval, &sol.x)? {
                            incumbent = Some((hobj, hx));
                        }
                    }
                    push_log(
                        &mut log,
                        &nd,
                        NodeOutcome::Branched,
                        bound,
                        incumbent.as_ref().map(|(v, _)| *v),
                    );
                    branch(prog, &nd, &sol, bound, &mut heap, &mut next_id);
                }
            }
        }
    }

    let best_bound = heap
        .iter()
        .map(|h| h.0.bound)
        .fold(incumbent.as_ref().map_or(f64::INFINITY, |(v, _)| *v), f64::min);

    match incumbent {
        Some((obj, xbin)) => {
            // Re-solve with all binaries fixed to report matching duals.
            let fixes: Vec<(usize, f64, f64)> = prog
                .binaries
                .iter()
                .map(|&col| (col, xbin[col], xbin[col]))
                .collect();
            let fixed = solver.solve_with_bounds(prog, &fixes, opts)?;
            let gap = rel_gap(obj, best_bound);
            Ok(MipSolution {
                status: if status == SolveStatus::Optimal || gap <= opts.mip_gap {
                    SolveStatus::Optimal
                } else {
                    status
                },
                obj,
                fixed: Some(fixed),
                best_bound,
                gap,
                nodes: nodes_done,
                log,
            })
        }
        None => Ok(MipSolution {
            status: if status == SolveStatus::Optimal {
                SolveStatus::Infeasible
            } else {
                status
            },
            fixed: None,
            obj: f64::INFINITY,
            best_bound,
            gap: f64::INFINITY,
            nodes: nodes_done,
            log,
        }),
    }
}

fn alloc_id(next: &mut usize) -> usize {
    let id = *next;
    *next += 1;
    id
}

fn rel_gap(incumbent: f64, bound: f64) -> f64 {
    if !bound.is_finite() {
        return f64::INFINITY;
    }
    (incumbent - bound).max(0.0) / f64::max(1.0, incumbent.abs())
}

fn push_log(
    log: &mut Vec<NodeRecord>,
    nd: &Node,
    outcome: NodeOutcome,
    bound: f64,
    incumbent: Option<f64>,
) {
    let gap = incumbent.map_or(f64::INFINITY, |inc| rel_gap(inc, bound));
    log.push(NodeRecord {
        node: nd.id,
        depth: nd.depth,
        outcome,
        bound,
        incumbent,
        gap,
    });
}

fn solve_node(
    prog: &ConicProgram,
    solver: &dyn ConicSolver,
    opts: &SolveOptions,
    nd: &Node,
) -> Result<ConicSolution, SolverError> {
    let bounds: Vec<(usize, f64, f64)> =
        nd.fixes.iter().map(|&(col, v)| (col, v, v)).collect();
    solver.solve_with_bounds(prog, &bounds, opts)
}

/// Index of the binary column farthest from integrality, ties to the lowest
/// column index. `None` when every binary is within `tol` of 0 or 1.
fn most_fractional(prog: &ConicProgram, x: &[f64], tol: f64) -> Option<usize> {
    let mut top: Option<(f64, usize)> = None;
    for &col in &prog.binaries {
        let v = x[col];
        if (v - v.round()).abs() > tol {
            let score = 0.5 - (v - 0.5).abs();
            if top.map_or(true, |(ts, _)| score > ts) {
                top = Some((score, col));
            }
        }
    }
    top.map(|(_, c)| c)
}

fn round_binaries(prog: &ConicProgram, x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    for &col in &prog.binaries {
        out[col] = out[col].round();
    }
    // One-hot groups: exactly one member set, the largest wins.
    for group in &prog.onehot_groups {
        let arg = group
            .iter()
            .cloned()
            .max_by(|&a, &b| x[a].total_cmp(&x[b]).then(b.cmp(&a)))
            .expect("empty one-hot group");
        for &col in group {
            out[col] = if col == arg { 1.0 } else { 0.0 };
        }
    }
    out
}

/// Objective to book for a rounded candidate: feasibility comes from a
/// continuous solve with every binary pinned, the value from the evaluator
/// when one is supplied (the pinned objective otherwise).
fn candidate_value(
    prog: &ConicProgram,
    solver: &dyn ConicSolver,
    opts: &SolveOptions,
    eval: Option<IncumbentEval>,
    xi: &[f64],
) -> Result<Option<f64>, SolverError> {
    let bounds: Vec<(usize, f64, f64)> = prog
        .binaries
        .iter()
        .map(|&col| (col, xi[col], xi[col]))
        .collect();
    let pinned = solver.solve_with_bounds(prog, &bounds, opts)?;
    if pinned.status != SolveStatus::Optimal {
        return Ok(None);
    }
    match eval {
        Some(f) => f(xi),
        None => Ok(Some(pinned.obj)),
    }
}

/// Fix-and-solve rounding heuristic: snap binaries to the nearest one-hot
/// point and evaluate. Returns (objective, solution) when the snap is
/// feasible.
fn heuristic(
    prog: &ConicProgram,
    solver: &dyn ConicSolver,
    opts: &SolveOptions,
    eval: Option<IncumbentEval>,
    xrelax: &[f64],
) -> Result<Option<(f64, Vec<f64>)>, SolverError> {
    let snapped = round_binaries(prog, xrelax);
    Ok(candidate_value(prog, solver, opts, eval, &snapped)?.map(|v| (v, snapped)))
}

fn branch(
    prog: &ConicProgram,
    nd: &Node,
    sol: &ConicSolution,
    bound: f64,
    heap: &mut BinaryHeap<HeapItem>,
    next_id: &mut usize,
) {
    let col = match most_fractional(prog, &sol.x, 1e-9) {
        Some(c) => c,
        None => return,
    };
    // Fixing a one-hot member to 1 implies 0 for its siblings.
    let group = prog
        .onehot_groups
        .iter()
        .find(|g| g.contains(&col))
        .cloned();
    for &val in &[1.0, 0.0] {
        let mut fixes = nd.fixes.clone();
        fixes.push((col, val));
        if val == 1.0 {
            if let Some(g) = &group {
                for &other in g {
                    if other != col {
                        fixes.push((other, 0.0));
                    }
                }
            }
        }
        heap.push(HeapItem(Node {
            id: alloc_id(next_id),
            depth: nd.depth + 1,
            fixes,
            bound,
        }));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::{solver_for, Backend, ConicProgram, SolveOptions};

    /// Small knapsack: max 8a + 11b + 6c + 4d with weights 5,7,4,3 <= 14.
    /// Optimum picks {a, b} wait: a+b = 12 weight, value 19; b+c+d = 14, 21.
    fn knapsack() -> ConicProgram {
        let mut p = ConicProgram::new();
        let vals = [8.0, 11.0, 6.0, 4.0];
        let wts = [5.0, 7.0, 4.0, 3.0];
        let cols: Vec<usize> = (0..4)
            .map(|i| {
                let c = p.add_var(&format!("pick{i}"), 0.0, 1.0, -vals[i]);
                p.mark_binary(c);
                c
            })
            .collect();
        p.add_le(
            "weight",
            cols.iter().zip(wts.iter()).map(|(&c, &w)| (c, w)).collect(),
            14.0,
        );
        p
    }

    #[test]
    fn knapsack_optimum() {
        let p = knapsack();
        let solver = solver_for(Backend::Clarabel);
        let sol = solve_mip(&p, solver.as_ref(), &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.obj + 21.0).abs() < 1e-6, "obj {}", sol.obj);
        let x = sol.x();
        assert!(x[0] < 0.5 && x[1] > 0.5 && x[2] > 0.5 && x[3] > 0.5);
    }

    #[test]
    fn knapsack_on_native_backend() {
        let p = knapsack();
        let solver = solver_for(Backend::Native);
        let sol = solve_mip(&p, solver.as_ref(), &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.obj + 21.0).abs() < 1e-6, "obj {}", sol.obj);
    }

    #[test]
    fn one_hot_group_branching() {
        // Pick exactly one of three modes; mode costs 3, 1, 2, but mode 1
        // forces y >= 5 with cost 1 each: totals 3, 6, 2. Optimum: mode 2.
        let mut p = ConicProgram::new();
        let m: Vec<usize> = (0..3)
            .map(|i| {
                let c = p.add_var(&format!("mode{i}"), 0.0, 1.0, [3.0, 1.0, 2.0][i]);
                p.mark_binary(c);
                c
            })
            .collect();
        p.add_eq("pick_one", m.iter().map(|&c| (c, 1.0)).collect(), 1.0);
        p.onehot_groups.push(m.clone());
        let y = p.add_var("y", 0.0, 10.0, 1.0);
        p.add_ge("load", vec![(y, 1.0), (m[1], -5.0)], 0.0);
        let solver = solver_for(Backend::Clarabel);
        let sol = solve_mip(&p, solver.as_ref(), &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.obj - 2.0).abs() < 1e-6);
        let x = sol.x();
        assert!(x[m[2]] > 0.5);
    }

    #[test]
    fn infeasible_integer_program() {
        // Binary x with 0.3 <= x <= 0.7 has no integral point.
        let mut p = ConicProgram::new();
        let x = p.add_var("x", 0.0, 1.0, 1.0);
        p.mark_binary(x);
        p.add_ge("lo", vec![(x, 1.0)], 0.3);
        p.add_le("hi", vec![(x, 1.0)], 0.7);
        let solver = solver_for(Backend::Clarabel);
        let sol = solve_mip(&p, solver.as_ref(), &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let p = knapsack();
        let solver = solver_for(Backend::Clarabel);
        let mut o1 = SolveOptions::default();
        o1.threads = 1;
        let mut o4 = SolveOptions::default();
        o4.threads = 4;
        let s1 = solve_mip(&p, solver.as_ref(), &o1).unwrap();
        let s4 = solve_mip(&p, solver.as_ref(), &o4).unwrap();
        assert!((s1.obj - s4.obj).abs() < 1e-9);
        assert_eq!(s1.x().iter().map(|v| v.round() as i32).collect::<Vec<_>>(),
                   s4.x().iter().map(|v| v.round() as i32).collect::<Vec<_>>());
    }
}
