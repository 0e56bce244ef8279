//! Spot-market clearing for a fixed expansion choice.
//!
//! For a chosen expansion per line, the market maximizes bid/offer surplus
//! plus substation trade and reserve income, subject to power balance at
//! every node, branch power flows in the lifted voltage-product variables,
//! thermal limits in both line directions, voltage bounds, a linearized
//! voltage-rise cap along every root path, and one second-order cone per
//! line and period that ties the lifted variables together. The cone is the
//! only relaxation; on radial feeders with positive import prices it binds
//! at the optimum, so physical voltages are recoverable (checked, never
//! assumed).
//!
//! Dual extraction relies on every row being entered in its natural
//! orientation, so the solver multiplier is the model multiplier with no
//! sign fix-ups: balance duals are the nodal prices, thermal-limit duals the
//! congestion rents, bound duals the bid/offer scarcity rents.

use crate::conic::{ConicProgram, ConicSolution, ConicSolver, SolveOptions, SolveStatus, SolverError};
use crate::network::{expanded_params, path_to_root, subtree_nodes, ExpandedParams, NetworkCase};
use std::collections::BTreeMap;
use thiserror::Error;

/// Internal power base, kW per program unit.
///
/// The program is assembled with powers in units of this base and money in
/// pence per base (prices keep their p/kWh values as coefficients). Squared
/// voltages are per-unit already, so this one constant brings admittance
/// coefficients (kW per unit W) down from ~5e4 to ~50 and balances the
/// matrix, right-hand side, and cost norms. Interior-point termination
/// measures are relative to those norms; without the rescale, "feasible"
/// leaves absolute cone violations near 5e-8, too coarse to recompose
/// voltages from. Solutions and duals are reported back in kW and p/kWh;
/// only W-row duals (which price per-unit voltage, not power) pick up the
/// base factor on extraction.
pub const POWER_SCALE: f64 = 1000.0;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("expansion assignment must pick one option for each of {expected} lines, got {got}")]
    InvalidAssignment { expected: usize, got: usize },
    #[error("line ({from},{to}) has no expansion option index {index}")]
    UnknownOption { from: usize, to: usize, index: usize },
    #[error("market solve ended {status}")]
    Solve { status: SolveStatus },
    #[error("cone residual {max:.3e} exceeds {tol:.3e}; voltages are not recoverable")]
    ExactnessViolated { max: f64, tol: f64 },
    #[error("recomputed {symbol} at (t={t}, index {at}) differs from the solver value by {diff:.3e}")]
    ConsistencyViolation { symbol: &'static str, t: usize, at: usize, diff: f64 },
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Column and row addresses for every model symbol, so solutions and duals
/// can be read back without knowing how the program was assembled.
///
/// Per-participant vectors are parallel to `case.demand_bids` and
/// `case.gen_offers` (each entry lives at its own period). Per-node vectors
/// are indexed `[time][node]`, where node vectors over the non-slack set use
/// `node - 1`. Per-line vectors are `[time][line]` in case order.
#[derive(Debug, Clone, Default)]
pub struct MarketIndex {
    pub times: Vec<usize>,
    pub d_p: Vec<usize>,
    pub d_q: Vec<usize>,
    pub g_p: Vec<usize>,
    pub g_q: Vec<usize>,
    /// Net injection, all nodes including the substation.
    pub p: Vec<Vec<usize>>,
    pub q: Vec<Vec<usize>>,
    /// Reserves, non-slack nodes.
    pub r_up: Vec<Vec<usize>>,
    pub r_down: Vec<Vec<usize>>,
    /// Squared voltage magnitude, non-slack nodes (slack is the constant 1).
    pub w: Vec<Vec<usize>>,
    /// Lifted voltage products, forward (`from` side) and reverse.
    pub wp_f: Vec<Vec<usize>>,
    pub wp_r: Vec<Vec<usize>>,
    pub wq_f: Vec<Vec<usize>>,
    pub wq_r: Vec<Vec<usize>>,
    /// Cone halves (W_i ± W_j)/2, defined by link rows.
    pub soc_t: Vec<Vec<usize>>,
    pub soc_z: Vec<Vec<usize>>,
    // Row families.
    pub row_bal_p: Vec<Vec<usize>>,
    pub row_bal_q: Vec<Vec<usize>>,
    /// Flow balance, all nodes including the substation.
    pub row_flow_p: Vec<Vec<usize>>,
    pub row_flow_q: Vec<Vec<usize>>,
    pub row_fmax: Vec<Vec<usize>>,
    pub row_fmin: Vec<Vec<usize>>,
    /// Voltage-rise cap along the root path, non-slack nodes.
    pub row_vcap: Vec<Vec<usize>>,
    pub row_herm_p: Vec<Vec<usize>>,
    pub row_herm_q: Vec<Vec<usize>>,
    pub row_res_up: Vec<Vec<usize>>,
    pub row_res_down: Vec<Vec<usize>>,
    pub row_link_t: Vec<Vec<usize>>,
    pub row_link_z: Vec<Vec<usize>>,
    pub soc_block: Vec<Vec<usize>>,
}

/// A built clearing problem: the conic program plus everything needed to
/// interpret it. Immutable; safe to share across solver threads.
#[derive(Debug, Clone)]
pub struct MarketProblem {
    pub case: NetworkCase,
    /// Chosen expansion option index per line.
    pub assignment: Vec<usize>,
    /// Expanded admittances/capacities per line under the assignment.
    pub params: Vec<ExpandedParams>,
    pub prog: ConicProgram,
    pub index: MarketIndex,
}

/// Primal allocation and full dual vector of one clearing.
///
/// Shapes follow [`MarketIndex`]. All power values are kW/kVAr, prices and
/// rents p/kWh, the objective pence (one-hour periods).
#[derive(Debug, Clone, Default)]
pub struct MarketSolution {
    pub status: SolveStatus,
    /// Cleared-surplus objective, pence (maximization sense).
    pub objective: f64,
    pub rel_gap: f64,
    pub iterations: usize,
    pub d_p: Vec<f64>,
    pub d_q: Vec<f64>,
    pub g_p: Vec<f64>,
    pub g_q: Vec<f64>,
    pub p: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r_up: Vec<Vec<f64>>,
    pub r_down: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub wp_f: Vec<Vec<f64>>,
    pub wp_r: Vec<Vec<f64>>,
    pub wq_f: Vec<Vec<f64>>,
    pub wq_r: Vec<Vec<f64>>,
    /// Nodal prices (active/reactive balance duals), non-slack nodes.
    pub pi_p: Vec<Vec<f64>>,
    pub pi_q: Vec<Vec<f64>>,
    /// Flow-balance duals, all nodes.
    pub lam_p: Vec<Vec<f64>>,
    pub lam_q: Vec<Vec<f64>>,
    /// Thermal congestion rents, nonnegative.
    pub mu_max: Vec<Vec<f64>>,
    pub mu_min: Vec<Vec<f64>>,
    /// Voltage-rise cap duals, nonnegative.
    pub beta: Vec<Vec<f64>>,
    /// Voltage bound duals, nonnegative.
    pub chi_min: Vec<Vec<f64>>,
    pub chi_max: Vec<Vec<f64>>,
    /// Participant bound rents, parallel to bids/offers.
    pub phi_d_p_max: Vec<f64>,
    pub phi_d_p_min: Vec<f64>,
    pub phi_d_q_max: Vec<f64>,
    pub phi_d_q_min: Vec<f64>,
    pub phi_g_p_max: Vec<f64>,
    pub phi_g_p_min: Vec<f64>,
    pub phi_g_q_max: Vec<f64>,
    pub phi_g_q_min: Vec<f64>,
    /// Symmetry-row duals per line.
    pub eps_p: Vec<Vec<f64>>,
    pub eps_q: Vec<Vec<f64>>,
    /// Reserve definition duals (equal the reserve prices at the optimum).
    pub rho_up: Vec<Vec<f64>>,
    pub rho_down: Vec<Vec<f64>>,
    /// Cone duals per line: gamma bounds the (eta_a, eta_b, eta_c) vector.
    pub eta_a: Vec<Vec<f64>>,
    pub eta_b: Vec<Vec<f64>>,
    pub eta_c: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
}

impl MarketSolution {
    /// Squared voltage magnitude at `n`, with the slack constant folded in.
    pub fn w_at(&self, ti: usize, n: usize) -> f64 {
        if n == 0 {
            1.0
        } else {
            self.w[ti][n - 1]
        }
    }
}

/// Per-line, per-period slack of the cone inequality at the solution.
#[derive(Debug, Clone)]
pub struct ExactnessReport {
    /// `residual[t][line] = (W_i+W_j)/2 − ‖(wp_f, wq_f, (W_i−W_j)/2)‖`.
    pub residuals: Vec<Vec<f64>>,
    pub max_residual: f64,
    pub tol: f64,
}

impl ExactnessReport {
    pub fn pass(&self) -> bool {
        self.max_residual <= self.tol
    }
}

/// Recovered physical voltages and the worst defect of rebuilding the
/// lifted products from them.
#[derive(Debug, Clone)]
pub struct VoltageProfile {
    /// Magnitude per `[time][node]`, p.u. (slack included).
    pub vm: Vec<Vec<f64>>,
    /// Angle per `[time][node]`, radians, slack pinned at zero.
    pub va: Vec<Vec<f64>>,
    /// `max |W_prod − V_i conj(V_j)|` over lines and periods.
    pub max_recompose_err: f64,
}

/// Injections and reserves recomputed from the cleared allocations.
#[derive(Debug, Clone)]
pub struct Settlement {
    pub p: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r_up: Vec<Vec<f64>>,
    pub r_down: Vec<Vec<f64>>,
}

pub(crate) fn push_term(acc: &mut BTreeMap<usize, f64>, col: usize, coeff: f64) {
    *acc.entry(col).or_insert(0.0) += coeff;
}

pub(crate) fn terms(acc: BTreeMap<usize, f64>) -> Vec<(usize, f64)> {
    acc.into_iter().collect()
}

/// Build the clearing problem for one expansion assignment (an expansion
/// option index per line, in case line order).
pub fn build_lower_level(case: &NetworkCase, u: &[usize]) -> Result<MarketProblem, MarketError> {
    if u.len() != case.lines.len() {
        return Err(MarketError::InvalidAssignment {
            expected: case.lines.len(),
            got: u.len(),
        });
    }
    let mut params = Vec::with_capacity(u.len());
    for (line, &mi) in case.lines.iter().zip(u) {
        let opt = line.expansions.get(mi).ok_or(MarketError::UnknownOption {
            from: line.from,
            to: line.to,
            index: mi,
        })?;
        params.push(expanded_params(line, opt.m).expect("listed option"));
    }

    let times = case.times();
    let nn = case.num_nodes();
    let mut prog = ConicProgram::new();
    let mut ix = MarketIndex { times: times.clone(), ..Default::default() };

    // Participant columns; bounds carry the bid/offer limits so their duals
    // are the scarcity rents.
    let s = POWER_SCALE;
    for bid in &case.demand_bids {
        let tag = format!("[{},{},{}]", bid.t, bid.node, bid.id);
        ix.d_p.push(prog.add_var(format!("d_p{tag}"), bid.p_min / s, bid.p_max / s, -bid.price));
        ix.d_q.push(prog.add_var(format!("d_q{tag}"), bid.q_min / s, bid.q_max / s, 0.0));
    }
    for offer in &case.gen_offers {
        let tag = format!("[{},{},{}]", offer.t, offer.node, offer.id);
        ix.g_p.push(prog.add_var(format!("g_p{tag}"), offer.p_min / s, offer.p_max / s, offer.price));
        ix.g_q.push(prog.add_var(format!("g_q{tag}"), offer.q_min / s, offer.q_max / s, 0.0));
    }

    for &t in &times {
        let tp = case.trade_price(t).expect("validated period");
        let (mut pc, mut qc, mut ruc, mut rdc, mut wc) = (vec![], vec![], vec![], vec![], vec![]);
        for n in 0..nn {
            let cost_p = if n == 0 { tp.c_p0 } else { 0.0 };
            let cost_q = if n == 0 { tp.c_q0 } else { 0.0 };
            pc.push(prog.add_var(format!("p[{t},{n}]"), f64::NEG_INFINITY, f64::INFINITY, cost_p));
            qc.push(prog.add_var(format!("q[{t},{n}]"), f64::NEG_INFINITY, f64::INFINITY, cost_q));
        }
        for n in 1..nn {
            ruc.push(prog.add_var(
                format!("r_up[{t},{n}]"),
                f64::NEG_INFINITY,
                f64::INFINITY,
                -tp.c_up,
            ));
            rdc.push(prog.add_var(
                format!("r_down[{t},{n}]"),
                f64::NEG_INFINITY,
                f64::INFINITY,
                -tp.c_down,
            ));
            let node = &case.nodes[n];
            wc.push(prog.add_var(
                format!("w[{t},{n}]"),
                node.v_min * node.v_min,
                node.v_max * node.v_max,
                0.0,
            ));
        }
        ix.p.push(pc);
        ix.q.push(qc);
        ix.r_up.push(ruc);
        ix.r_down.push(rdc);
        ix.w.push(wc);

        let (mut wpf, mut wpr, mut wqf, mut wqr, mut sct, mut scz) =
            (vec![], vec![], vec![], vec![], vec![], vec![]);
        for line in &case.lines {
            let tag = format!("[{},{},{}]", t, line.from, line.to);
            wpf.push(prog.free_var(format!("wp_f{tag}")));
            wpr.push(prog.free_var(format!("wp_r{tag}")));
            wqf.push(prog.free_var(format!("wq_f{tag}")));
            wqr.push(prog.free_var(format!("wq_r{tag}")));
            sct.push(prog.free_var(format!("soc_t{tag}")));
            scz.push(prog.free_var(format!("soc_z{tag}")));
        }
        ix.wp_f.push(wpf);
        ix.wp_r.push(wpr);
        ix.wq_f.push(wqf);
        ix.wq_r.push(wqr);
        ix.soc_t.push(sct);
        ix.soc_z.push(scz);
    }

    // Rows, one period at a time. Orientation matters: every row is entered
    // exactly as the model states it, so the solver dual is the model dual.
    for (ti, &t) in times.iter().enumerate() {
        // Injection definitions: p_n − Σ g + Σ d = −D_n.
        let (mut bal_p, mut bal_q) = (vec![], vec![]);
        for n in 1..nn {
            let d_total: f64 = case
                .fixed_loads
                .iter()
                .filter(|f| f.node == n && f.t == t)
                .map(|f| f.d)
                .sum();
            let mut tp_acc = BTreeMap::new();
            let mut tq_acc = BTreeMap::new();
            push_term(&mut tp_acc, ix.p[ti][n], 1.0);
            push_term(&mut tq_acc, ix.q[ti][n], 1.0);
            for (k, bid) in case.demand_bids.iter().enumerate() {
                if bid.node == n && bid.t == t {
                    push_term(&mut tp_acc, ix.d_p[k], 1.0);
                    push_term(&mut tq_acc, ix.d_q[k], 1.0);
                }
            }
            for (k, offer) in case.gen_offers.iter().enumerate() {
                if offer.node == n && offer.t == t {
                    push_term(&mut tp_acc, ix.g_p[k], -1.0);
                    push_term(&mut tq_acc, ix.g_q[k], -1.0);
                }
            }
            bal_p.push(prog.add_eq(format!("bal_p[{t},{n}]"), terms(tp_acc), -d_total / s));
            bal_q.push(prog.add_eq(format!("bal_q[{t},{n}]"), terms(tq_acc), 0.0));
        }
        ix.row_bal_p.push(bal_p);
        ix.row_bal_q.push(bal_q);

        // Flow balance at every node: p_n equals the sum of sending-end
        // flows of incident lines. The slack's W is the constant 1, so its
        // contribution moves to the right-hand side.
        let (mut flow_p, mut flow_q) = (vec![], vec![]);
        for n in 0..nn {
            let mut fp = BTreeMap::new();
            let mut fq = BTreeMap::new();
            let mut rhs_p = 0.0;
            let mut rhs_q = 0.0;
            push_term(&mut fp, ix.p[ti][n], 1.0);
            push_term(&mut fq, ix.q[ti][n], 1.0);
            for (l, line) in case.lines.iter().enumerate() {
                let (a, e) = (params[l].a / s, params[l].e / s);
                if line.from == n {
                    if n == 0 {
                        rhs_p += a;
                        rhs_q += e;
                    } else {
                        push_term(&mut fp, ix.w[ti][n - 1], -a);
                        push_term(&mut fq, ix.w[ti][n - 1], -e);
                    }
                    push_term(&mut fp, ix.wp_f[ti][l], a);
                    push_term(&mut fp, ix.wq_f[ti][l], -e);
                    push_term(&mut fq, ix.wp_f[ti][l], e);
                    push_term(&mut fq, ix.wq_f[ti][l], a);
                }
                if line.to == n {
                    push_term(&mut fp, ix.w[ti][n - 1], -a);
                    push_term(&mut fq, ix.w[ti][n - 1], -e);
                    push_term(&mut fp, ix.wp_r[ti][l], a);
                    push_term(&mut fp, ix.wq_r[ti][l], -e);
                    push_term(&mut fq, ix.wp_r[ti][l], e);
                    push_term(&mut fq, ix.wq_r[ti][l], a);
                }
            }
            flow_p.push(prog.add_eq(format!("flow_p[{t},{n}]"), terms(fp), rhs_p));
            flow_q.push(prog.add_eq(format!("flow_q[{t},{n}]"), terms(fq), rhs_q));
        }
        ix.row_flow_p.push(flow_p);
        ix.row_flow_q.push(flow_q);

        // Thermal limits on the sending-end flow in each direction.
        let (mut fmax, mut fmin) = (vec![], vec![]);
        for (l, line) in case.lines.iter().enumerate() {
            let (a, e) = (params[l].a / s, params[l].e / s);
            let cap_fwd = (line.f_max + params[l].f_add) / s;
            let cap_rev = (line.f_min + params[l].f_add) / s;
            let mut fwd = BTreeMap::new();
            let mut rhs_fwd = cap_fwd;
            if line.from == 0 {
                rhs_fwd -= a;
            } else {
                push_term(&mut fwd, ix.w[ti][line.from - 1], a);
            }
            push_term(&mut fwd, ix.wp_f[ti][l], -a);
            push_term(&mut fwd, ix.wq_f[ti][l], e);
            fmax.push(prog.add_le(format!("fmax[{t},{},{}]", line.from, line.to), terms(fwd), rhs_fwd));

            let mut rev = BTreeMap::new();
            push_term(&mut rev, ix.w[ti][line.to - 1], a);
            push_term(&mut rev, ix.wp_r[ti][l], -a);
            push_term(&mut rev, ix.wq_r[ti][l], e);
            fmin.push(prog.add_le(format!("fmin[{t},{},{}]", line.from, line.to), terms(rev), cap_rev));
        }
        ix.row_fmax.push(fmax);
        ix.row_fmin.push(fmin);

        // Voltage-rise cap: the squared slack voltage plus twice the
        // r·P + x·Q drop along the root path, where each line's flow is the
        // net injection of the nodes it feeds, stays under (v_max)².
        let mut vcap = vec![];
        for n in 1..nn {
            let mut acc = BTreeMap::new();
            for l in path_to_root(case, n).expect("validated node") {
                let (a, e) = (params[l].a / s, params[l].e / s);
                let denom = a * a + e * e;
                let (r, x) = (a / denom, e / denom);
                for k in subtree_nodes(case, case.lines[l].to).expect("validated node") {
                    push_term(&mut acc, ix.p[ti][k], 2.0 * r);
                    push_term(&mut acc, ix.q[ti][k], 2.0 * x);
                }
            }
            let vmax = case.nodes[n].v_max;
            vcap.push(prog.add_le(format!("vcap[{t},{n}]"), terms(acc), vmax * vmax - 1.0));
        }
        ix.row_vcap.push(vcap);

        // Lifted-product symmetry: the two orientations describe one complex
        // number, W^ij = conj(W^ji).
        let (mut herm_p, mut herm_q) = (vec![], vec![]);
        for (l, line) in case.lines.iter().enumerate() {
            let tag = format!("[{},{},{}]", t, line.from, line.to);
            herm_p.push(prog.add_eq(
                format!("herm_p{tag}"),
                vec![(ix.wp_f[ti][l], 1.0), (ix.wp_r[ti][l], -1.0)],
                0.0,
            ));
            herm_q.push(prog.add_eq(
                format!("herm_q{tag}"),
                vec![(ix.wq_f[ti][l], 1.0), (ix.wq_r[ti][l], 1.0)],
                0.0,
            ));
        }
        ix.row_herm_p.push(herm_p);
        ix.row_herm_q.push(herm_q);

        // Reserve definitions: spare generation headroom plus curtailable
        // consumption (upward), and the mirror image (downward).
        let (mut res_up, mut res_down) = (vec![], vec![]);
        for n in 1..nn {
            let mut up = BTreeMap::new();
            let mut down = BTreeMap::new();
            push_term(&mut up, ix.r_up[ti][n - 1], 1.0);
            push_term(&mut down, ix.r_down[ti][n - 1], 1.0);
            let mut g_max_sum = 0.0;
            let mut d_max_sum = 0.0;
            for (k, offer) in case.gen_offers.iter().enumerate() {
                if offer.node == n && offer.t == t {
                    push_term(&mut up, ix.g_p[k], 1.0);
                    push_term(&mut down, ix.g_p[k], -1.0);
                    g_max_sum += offer.p_max;
                }
            }
            for (k, bid) in case.demand_bids.iter().enumerate() {
                if bid.node == n && bid.t == t {
                    push_term(&mut up, ix.d_p[k], -1.0);
                    push_term(&mut down, ix.d_p[k], 1.0);
                    d_max_sum += bid.p_max;
                }
            }
            res_up.push(prog.add_eq(format!("res_up[{t},{n}]"), terms(up), g_max_sum / s));
            res_down.push(prog.add_eq(format!("res_down[{t},{n}]"), terms(down), d_max_sum / s));
        }
        ix.row_res_up.push(res_up);
        ix.row_res_down.push(res_down);

        // Cone halves and the cone itself.
        let (mut link_t, mut link_z, mut blocks) = (vec![], vec![], vec![]);
        for (l, line) in case.lines.iter().enumerate() {
            let tag = format!("[{},{},{}]", t, line.from, line.to);
            let mut lt = BTreeMap::new();
            let mut lz = BTreeMap::new();
            push_term(&mut lt, ix.soc_t[ti][l], 1.0);
            push_term(&mut lz, ix.soc_z[ti][l], 1.0);
            let mut rhs = 0.0;
            if line.from == 0 {
                rhs = 0.5;
            } else {
                push_term(&mut lt, ix.w[ti][line.from - 1], -0.5);
                push_term(&mut lz, ix.w[ti][line.from - 1], -0.5);
            }
            push_term(&mut lt, ix.w[ti][line.to - 1], -0.5);
            push_term(&mut lz, ix.w[ti][line.to - 1], 0.5);
            link_t.push(prog.add_eq(format!("link_t{tag}"), terms(lt), rhs));
            link_z.push(prog.add_eq(format!("link_z{tag}"), terms(lz), rhs));
            blocks.push(prog.add_soc(vec![
                ix.soc_t[ti][l],
                ix.wp_f[ti][l],
                ix.wq_f[ti][l],
                ix.soc_z[ti][l],
            ]));
        }
        ix.row_link_t.push(link_t);
        ix.row_link_z.push(link_z);
        ix.soc_block.push(blocks);
    }

    Ok(MarketProblem {
        case: case.clone(),
        assignment: u.to_vec(),
        params,
        prog,
        index: ix,
    })
}

fn gather2(sol_x: &[f64], cols: &[Vec<usize>], scale: f64) -> Vec<Vec<f64>> {
    cols.iter()
        .map(|row| row.iter().map(|&c| sol_x[c] * scale).collect())
        .collect()
}

fn gather_rows(duals: &[f64], rows: &[Vec<usize>], scale: f64) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|row| row.iter().map(|&r| duals[r] * scale).collect())
        .collect()
}

/// Solve a built problem and scatter the primal/dual values back to model
/// symbols. Non-optimal terminations surface as errors so duals are never
/// fabricated.
pub fn solve_market(
    prob: &MarketProblem,
    solver: &dyn ConicSolver,
    opts: &SolveOptions,
) -> Result<MarketSolution, MarketError> {
    let raw = solver.solve(&prob.prog, opts)?;
    if !matches!(raw.status, SolveStatus::Optimal) {
        return Err(MarketError::Solve { status: raw.status });
    }
    Ok(scatter(prob, &raw))
}

fn scatter(prob: &MarketProblem, raw: &ConicSolution) -> MarketSolution {
    let ix = &prob.index;
    let x = &raw.x;
    // Powers scale back to kW and the objective to pence. Power-row duals
    // are already p/kWh (the base divides out of price = money/power), while
    // W-row duals price per-unit voltage, so the money rescale alone sticks.
    let s = POWER_SCALE;
    let mut sol = MarketSolution {
        status: raw.status,
        objective: -raw.obj * s,
        rel_gap: raw.rel_gap,
        iterations: raw.iterations,
        d_p: ix.d_p.iter().map(|&c| x[c] * s).collect(),
        d_q: ix.d_q.iter().map(|&c| x[c] * s).collect(),
        g_p: ix.g_p.iter().map(|&c| x[c] * s).collect(),
        g_q: ix.g_q.iter().map(|&c| x[c] * s).collect(),
        p: gather2(x, &ix.p, s),
        q: gather2(x, &ix.q, s),
        r_up: gather2(x, &ix.r_up, s),
        r_down: gather2(x, &ix.r_down, s),
        w: gather2(x, &ix.w, 1.0),
        wp_f: gather2(x, &ix.wp_f, 1.0),
        wp_r: gather2(x, &ix.wp_r, 1.0),
        wq_f: gather2(x, &ix.wq_f, 1.0),
        wq_r: gather2(x, &ix.wq_r, 1.0),
        pi_p: gather_rows(&raw.row_dual, &ix.row_bal_p, 1.0),
        pi_q: gather_rows(&raw.row_dual, &ix.row_bal_q, 1.0),
        lam_p: gather_rows(&raw.row_dual, &ix.row_flow_p, 1.0),
        lam_q: gather_rows(&raw.row_dual, &ix.row_flow_q, 1.0),
        mu_max: gather_rows(&raw.row_dual, &ix.row_fmax, 1.0),
        mu_min: gather_rows(&raw.row_dual, &ix.row_fmin, 1.0),
        beta: gather_rows(&raw.row_dual, &ix.row_vcap, s),
        chi_min: gather2(&raw.bound_dual_lo, &ix.w, s),
        chi_max: gather2(&raw.bound_dual_hi, &ix.w, s),
        phi_d_p_max: ix.d_p.iter().map(|&c| raw.bound_dual_hi[c]).collect(),
        phi_d_p_min: ix.d_p.iter().map(|&c| raw.bound_dual_lo[c]).collect(),
        phi_d_q_max: ix.d_q.iter().map(|&c| raw.bound_dual_hi[c]).collect(),
        phi_d_q_min: ix.d_q.iter().map(|&c| raw.bound_dual_lo[c]).collect(),
        phi_g_p_max: ix.g_p.iter().map(|&c| raw.bound_dual_hi[c]).collect(),
        phi_g_p_min: ix.g_p.iter().map(|&c| raw.bound_dual_lo[c]).collect(),
        phi_g_q_max: ix.g_q.iter().map(|&c| raw.bound_dual_hi[c]).collect(),
        phi_g_q_min: ix.g_q.iter().map(|&c| raw.bound_dual_lo[c]).collect(),
        eps_p: gather_rows(&raw.row_dual, &ix.row_herm_p, s),
        eps_q: gather_rows(&raw.row_dual, &ix.row_herm_q, s),
        rho_up: gather_rows(&raw.row_dual, &ix.row_res_up, 1.0),
        rho_down: gather_rows(&raw.row_dual, &ix.row_res_down, 1.0),
        ..Default::default()
    };
    for blocks in &ix.soc_block {
        let mut ea = vec![];
        let mut eb = vec![];
        let mut ec = vec![];
        let mut gm = vec![];
        for &b in blocks {
            let z = &raw.soc_dual[b];
            // The solver's cone dual enters its Lagrangian with a minus on
            // the member components, so the model's eta vector is negated.
            gm.push(z[0] * s);
            ea.push(-z[1] * s);
            eb.push(-z[2] * s);
            ec.push(-z[3] * s);
        }
        sol.eta_a.push(ea);
        sol.eta_b.push(eb);
        sol.eta_c.push(ec);
        sol.gamma.push(gm);
    }
    sol
}

/// Measure how tightly each cone binds. Exact solutions have residuals at
/// solver accuracy; a materially positive residual means the relaxation is
/// loose and the W values are not voltage products.
pub fn check_exactness(prob: &MarketProblem, sol: &MarketSolution, tol: f64) -> ExactnessReport {
    let mut residuals = Vec::new();
    let mut max_residual = f64::NEG_INFINITY;
    for ti in 0..prob.index.times.len() {
        let mut per_line = Vec::new();
        for (l, line) in prob.case.lines.iter().enumerate() {
            let wi = sol.w_at(ti, line.from);
            let wj = sol.w_at(ti, line.to);
            let half_sum = 0.5 * (wi + wj);
            let half_diff = 0.5 * (wi - wj);
            let norm = (sol.wp_f[ti][l].powi(2) + sol.wq_f[ti][l].powi(2) + half_diff.powi(2)).sqrt();
            let r = half_sum - norm;
            per_line.push(r);
            if r > max_residual {
                max_residual = r;
            }
        }
        residuals.push(per_line);
    }
    ExactnessReport { residuals, max_residual: max_residual.abs(), tol }
}

/// Rebuild voltage magnitudes and angles from a tight solution.
///
/// Magnitudes come straight from the squared-voltage variables; angles
/// propagate from the slack along the tree using the lifted products.
pub fn recover_voltages(
    prob: &MarketProblem,
    sol: &MarketSolution,
    tol: f64,
) -> Result<VoltageProfile, MarketError> {
    let report = check_exactness(prob, sol, tol);
    if !report.pass() {
        return Err(MarketError::ExactnessViolated { max: report.max_residual, tol });
    }
    let case = &prob.case;
    let nn = case.num_nodes();
    // Children-first traversal order: lines sorted by path depth of `to`.
    let mut order: Vec<usize> = (0..case.lines.len()).collect();
    let depth: Vec<usize> = (0..nn)
        .map(|n| path_to_root(case, n).expect("validated").len())
        .collect();
    order.sort_by_key(|&l| depth[case.lines[l].to]);

    let mut vm = Vec::new();
    let mut va = Vec::new();
    let mut max_err: f64 = 0.0;
    for ti in 0..prob.index.times.len() {
        let mut mag = vec![0.0; nn];
        let mut ang = vec![0.0; nn];
        for n in 0..nn {
            mag[n] = sol.w_at(ti, n).sqrt();
        }
        for &l in &order {
            let line = &case.lines[l];
            // W^ij = V_i conj(V_j) so the angle difference i minus j is the
            // argument of the product.
            let dtheta = sol.wq_f[ti][l].atan2(sol.wp_f[ti][l]);
            ang[line.to] = ang[line.from] - dtheta;
        }
        for (l, line) in case.lines.iter().enumerate() {
            let expected_p = mag[line.from] * mag[line.to] * (ang[line.from] - ang[line.to]).cos();
            let expected_q = mag[line.from] * mag[line.to] * (ang[line.from] - ang[line.to]).sin();
            let err = ((sol.wp_f[ti][l] - expected_p).powi(2)
                + (sol.wq_f[ti][l] - expected_q).powi(2))
            .sqrt();
            max_err = max_err.max(err);
        }
        vm.push(mag);
        va.push(ang);
    }
    Ok(VoltageProfile { vm, va, max_recompose_err: max_err })
}

/// Recompute injections and reserves from the cleared allocations and check
/// them against the solver's own values. `tol` is absolute in kW.
pub fn settlement_quantities(
    prob: &MarketProblem,
    sol: &MarketSolution,
    tol: f64,
) -> Result<Settlement, MarketError> {
    let case = &prob.case;
    let nn = case.num_nodes();
    let mut out = Settlement { p: vec![], q: vec![], r_up: vec![], r_down: vec![] };
    for (ti, &t) in prob.index.times.iter().enumerate() {
        let mut p = vec![0.0; nn];
        let mut q = vec![0.0; nn];
        let mut r_up = vec![0.0; nn - 1];
        let mut r_down = vec![0.0; nn - 1];
        for n in 1..nn {
            let d_fixed: f64 = case
                .fixed_loads
                .iter()
                .filter(|f| f.node == n && f.t == t)
                .map(|f| f.d)
                .sum();
            p[n] = -d_fixed;
        }
        for (k, bid) in case.demand_bids.iter().enumerate() {
            if bid.t == t {
                p[bid.node] -= sol.d_p[k];
                q[bid.node] -= sol.d_q[k];
                r_up[bid.node - 1] += sol.d_p[k];
                r_down[bid.node - 1] += bid.p_max - sol.d_p[k];
            }
        }
        for (k, offer) in case.gen_offers.iter().enumerate() {
            if offer.t == t {
                p[offer.node] += sol.g_p[k];
                q[offer.node] += sol.g_q[k];
                r_up[offer.node - 1] += offer.p_max - sol.g_p[k];
                r_down[offer.node - 1] += sol.g_p[k];
            }
        }
        // The substation injection is definitional only through the flow
        // balance; copy the solver value for it.
        p[0] = sol.p[ti][0];
        q[0] = sol.q[ti][0];
        for n in 1..nn {
            let dp = (p[n] - sol.p[ti][n]).abs();
            if dp > tol {
                return Err(MarketError::ConsistencyViolation { symbol: "p", t, at: n, diff: dp });
            }
            let dq = (q[n] - sol.q[ti][n]).abs();
            if dq > tol {
                return Err(MarketError::ConsistencyViolation { symbol: "q", t, at: n, diff: dq });
            }
            let du = (r_up[n - 1] - sol.r_up[ti][n - 1]).abs();
            if du > tol {
                return Err(MarketError::ConsistencyViolation { symbol: "r_up", t, at: n, diff: du });
            }
            let dd = (r_down[n - 1] - sol.r_down[ti][n - 1]).abs();
            if dd > tol {
                return Err(MarketError::ConsistencyViolation {
                    symbol: "r_down",
                    t,
                    at: n,
                    diff: dd,
                });
            }
        }
        out.p.push(p);
        out.q.push(q);
        out.r_up.push(r_up);
        out.r_down.push(r_down);
    }
    Ok(out)
}

/// Sending-end active flow on each line (forward direction), kW.
pub fn forward_flows(prob: &MarketProblem, sol: &MarketSolution) -> Vec<Vec<f64>> {
    let mut flows = Vec::new();
    for ti in 0..prob.index.times.len() {
        let mut per_line = Vec::new();
        for (l, line) in prob.case.lines.iter().enumerate() {
            let (a, e) = (prob.params[l].a, prob.params[l].e);
            per_line
                .push(a * sol.w_at(ti, line.from) - a * sol.wp_f[ti][l] + e * sol.wq_f[ti][l]);
        }
        flows.push(per_line);
    }
    flows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases::{surrogate_5bus, Surrogate5Config};
    use crate::conic::{solver_for, Backend};

    fn clear(cfg: Surrogate5Config, u: &[usize]) -> (MarketProblem, MarketSolution) {
        let case = surrogate_5bus(cfg);
        let prob = build_lower_level(&case, u).unwrap();
        let solver = solver_for(Backend::Clarabel);
        let sol = solve_market(&prob, solver.as_ref(), &SolveOptions::default()).unwrap();
        (prob, sol)
    }

    #[test]
    fn reserve_study_base_allocation() {
        let (prob, sol) = clear(Surrogate5Config::reserve_study(0.0), &[0, 0, 0, 0]);
        // Nodes 1 and 2 trade fully; node 3's demand is priced out while its
        // generator clears; node 4 is fully out of the money.
        for k in [0, 1] {
            assert!((sol.d_p[k] - 100.0).abs() < 1e-4, "d{k}={}", sol.d_p[k]);
            assert!((sol.g_p[k] - 100.0).abs() < 1e-4);
        }
        assert!(sol.d_p[2].abs() < 1e-4, "node-3 demand should be rejected");
        assert!((sol.g_p[2] - 100.0).abs() < 1e-4, "node-3 offer should clear");
        assert!(sol.d_p[3].abs() < 1e-4);
        assert!(sol.g_p[3].abs() < 1e-4);
        // Import price plus marginal losses: prices rise along the feeder
        // and node 3 sits inside (30, 31).
        let pi = &sol.pi_p[0];
        assert!(pi[0] > 30.0 && pi[0] < pi[1] && pi[1] < pi[2] && pi[2] < pi[3], "{pi:?}");
        assert!(pi[2] > 30.0 && pi[2] < 31.0, "node-3 price {}", pi[2]);
        // Reserve definition duals match the (zero) reserve price.
        assert!(sol.rho_up[0].iter().all(|&r| r.abs() < 1e-7));
        // Node 3 clears its full offer with no flexible demand, so it has
        // nothing to spare upward but everything downward.
        let settle = settlement_quantities(&prob, &sol, 1e-5).unwrap();
        assert!(settle.r_up[0][2].abs() < 1e-4, "node-3 spare {}", settle.r_up[0][2]);
        assert!((settle.r_down[0][2] - 200.0).abs() < 1e-4);
        let total_up: f64 = settle.r_up[0].iter().sum();
        assert!((total_up - 300.0).abs() < 1e-3, "{total_up}");
    }

    #[test]
    fn reserve_price_flips_node_three() {
        let (_, base) = clear(Surrogate5Config::reserve_study(0.0), &[0, 0, 0, 0]);
        let (prob, paid) = clear(Surrogate5Config::reserve_study(5.0), &[0, 0, 0, 0]);
        assert!((paid.d_p[2] - 100.0).abs() < 1e-4, "node-3 demand clears under reserve pay");
        assert!(paid.g_p[2].abs() < 1e-4, "node-3 offer withdraws to sell reserve");
        for n in 0..4 {
            assert!(
                paid.pi_p[0][n] >= base.pi_p[0][n] - 1e-6,
                "price at node {} fell: {} -> {}",
                n + 1,
                base.pi_p[0][n],
                paid.pi_p[0][n]
            );
        }
        // Reserve quantities behind the flip: consumers offer their whole
        // cleared demand, generators their whole idle capacity.
        let settle = settlement_quantities(&prob, &paid, 1e-5).unwrap();
        let consumer_reserve: f64 = (0..4).map(|n| paid.d_p[n]).sum();
        let gen_reserve: f64 = (0..4).map(|n| 100.0 - paid.g_p[n]).sum();
        assert!((consumer_reserve - 300.0).abs() < 1e-3, "{consumer_reserve}");
        assert!((gen_reserve - 200.0).abs() < 1e-3, "{gen_reserve}");
        let total: f64 = settle.r_up[0].iter().sum();
        assert!((total - 500.0).abs() < 1e-3);
        // Node 3 flipped to consuming, so it now offers its demand plus its
        // whole idle generator.
        assert!((settle.r_up[0][2] - 200.0).abs() < 1e-3, "{}", settle.r_up[0][2]);
        // The reserve definition dual equals the reserve price.
        assert!(sol_close(&paid.rho_up[0], 5.0, 1e-6), "{:?}", paid.rho_up[0]);
    }

    fn sol_close(v: &[f64], target: f64, tol: f64) -> bool {
        v.iter().all(|x| (x - target).abs() < tol)
    }

    #[test]
    fn exactness_voltages_and_losses() {
        for cfg in [Surrogate5Config::reserve_study(5.0), Surrogate5Config::tariff_study(&[])] {
            let (prob, sol) = clear(cfg, &[0, 0, 0, 0]);
            let report = check_exactness(&prob, &sol, 1e-6);
            assert!(report.pass(), "max residual {}", report.max_residual);
            let profile = recover_voltages(&prob, &sol, 1e-6).unwrap();
            assert!(profile.max_recompose_err < 1e-8, "{}", profile.max_recompose_err);
            // Total injection equals resistive losses and is positive.
            for ti in 0..1 {
                let total: f64 = sol.p[ti].iter().sum();
                let mut loss = 0.0;
                for (l, line) in prob.case.lines.iter().enumerate() {
                    let a = prob.params[l].a;
                    loss += a
                        * (sol.w_at(ti, line.from) + sol.w_at(ti, line.to)
                            - 2.0 * sol.wp_f[ti][l]);
                }
                assert!(total > 0.0);
                assert!((total - loss).abs() < 1e-5, "injections {total} losses {loss}");
            }
            // Voltage declines along the purely consuming feeder.
            let vm = &profile.vm[0];
            assert!(vm.windows(2).all(|w| w[1] < w[0]), "{vm:?}");
        }
    }

    #[test]
    fn duality_and_complementarity() {
        let (prob, sol) = clear(Surrogate5Config::reserve_study(5.0), &[0, 0, 0, 0]);
        assert!(sol.rel_gap <= 1e-6, "gap {}", sol.rel_gap);
        // Complementary slackness on thermal limits and demand bounds.
        let flows = forward_flows(&prob, &sol);
        for (l, line) in prob.case.lines.iter().enumerate() {
            let slack = line.f_max - flows[0][l];
            let prod = sol.mu_max[0][l] * slack;
            assert!(prod.abs() <= 1e-5 * (1.0 + flows[0][l].abs()), "line {l}: {prod}");
            assert!(sol.mu_max[0][l] >= -1e-9);
        }
        for (k, bid) in prob.case.demand_bids.iter().enumerate() {
            let prod = sol.phi_d_p_max[k] * (bid.p_max - sol.d_p[k]);
            assert!(prod.abs() <= 1e-4, "bid {k}: {prod}");
        }
        // Stationarity of the demand column reproduces the bid price.
        for (k, bid) in prob.case.demand_bids.iter().enumerate() {
            let n = bid.node - 1;
            let lhs = sol.pi_p[0][n] + sol.phi_d_p_max[k] - sol.phi_d_p_min[k]
                - sol.rho_up[0][n]
                + sol.rho_down[0][n];
            assert!((lhs - bid.price).abs() < 1e-5, "bid {k}: {lhs} vs {}", bid.price);
        }
    }

    #[test]
    fn congestion_binds_at_capacity() {
        // Tariff study without expansion: 800 kW of demand behind an 800 kW
        // line leaves no room for losses, so the line pins at its limit and
        // carries a positive congestion rent.
        let (prob, sol) = clear(Surrogate5Config::tariff_study(&[]), &[0, 0, 0, 0]);
        let flows = forward_flows(&prob, &sol);
        assert!((flows[0][0] - 800.0).abs() < 1e-4, "{}", flows[0][0]);
        assert!(sol.mu_max[0][0] > 1e-3, "rent {}", sol.mu_max[0][0]);
        // Some flexible demand is shed to make room for losses.
        let served: f64 = sol.d_p.iter().sum();
        assert!(served < 400.0 - 1.0, "{served}");
    }

    #[test]
    fn expansion_relieves_congestion() {
        // Reinforcing (0,1) by half raises its cap to 1200 kW; everything
        // clears and the rent vanishes.
        let case = surrogate_5bus(Surrogate5Config::tariff_study(&[0.5, 1.0]));
        let prob = build_lower_level(&case, &[1, 0, 0, 0]).unwrap();
        let solver = solver_for(Backend::Clarabel);
        let sol = solve_market(&prob, solver.as_ref(), &SolveOptions::default()).unwrap();
        let flows = forward_flows(&prob, &sol);
        assert!(flows[0][0] > 800.0 && flows[0][0] < 1200.0 - 1.0, "{}", flows[0][0]);
        assert!(sol.mu_max[0][0].abs() < 1e-6);
        let served: f64 = sol.d_p.iter().sum();
        assert!((served - 400.0).abs() < 1e-4);
    }

    #[test]
    fn islanded_load_is_infeasible() {
        let mut case = surrogate_5bus(Surrogate5Config::tariff_study(&[]));
        case.lines[0].f_max = 0.0;
        case.lines[0].f_min = 0.0;
        let prob = build_lower_level(&case, &[0, 0, 0, 0]).unwrap();
        let solver = solver_for(Backend::Clarabel);
        let err = solve_market(&prob, solver.as_ref(), &SolveOptions::default()).unwrap_err();
        assert!(
            matches!(err, MarketError::Solve { status: SolveStatus::Infeasible }),
            "{err}"
        );
    }

    #[test]
    fn degenerate_cases() {
        // No flexible participants at all: feasible because the fixed load
        // can be imported.
        let mut case = surrogate_5bus(Surrogate5Config::default());
        case.demand_bids.clear();
        case.gen_offers.clear();
        let prob = build_lower_level(&case, &[0, 0, 0, 0]).unwrap();
        let solver = solver_for(Backend::Clarabel);
        let sol = solve_market(&prob, solver.as_ref(), &SolveOptions::default()).unwrap();
        assert!(sol.p[0][0] > 400.0, "imports cover load plus losses");

        // Zero bids and no fixed load: the cleared state is empty.
        let mut dead = surrogate_5bus(Surrogate5Config::default());
        dead.fixed_loads.clear();
        for b in &mut dead.demand_bids {
            b.price = 0.0;
        }
        dead.gen_offers.clear();
        let prob = build_lower_level(&dead, &[0, 0, 0, 0]).unwrap();
        let sol = solve_market(&prob, solver.as_ref(), &SolveOptions::default()).unwrap();
        assert!(sol.objective.abs() < 1e-6, "{}", sol.objective);
        assert!(sol.d_p.iter().all(|&d| d.abs() < 1e-6));
    }

    #[test]
    fn assignment_validation() {
        let case = surrogate_5bus(Surrogate5Config::default());
        assert!(matches!(
            build_lower_level(&case, &[0, 0]),
            Err(MarketError::InvalidAssignment { .. })
        ));
        assert!(matches!(
            build_lower_level(&case, &[3, 0, 0, 0]),
            Err(MarketError::UnknownOption { .. })
        ));
    }

    #[test]
    fn hermitian_rows_hold() {
        let (_, sol) = clear(Surrogate5Config::reserve_study(0.0), &[0, 0, 0, 0]);
        for l in 0..4 {
            assert!((sol.wp_f[0][l] - sol.wp_r[0][l]).abs() < 1e-7);
            assert!((sol.wq_f[0][l] + sol.wq_r[0][l]).abs() < 1e-7);
        }
        // Cone duals live in the dual cone.
        for l in 0..4 {
            let norm = (sol.eta_a[0][l].powi(2) + sol.eta_b[0][l].powi(2)
                + sol.eta_c[0][l].powi(2))
            .sqrt();
            assert!(norm <= sol.gamma[0][l] + 1e-7, "line {l}");
        }
    }
}
