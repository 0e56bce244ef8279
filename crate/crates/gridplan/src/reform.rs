//! Exact single-level recast of the planning problem.
//!
//! The planner chooses one reinforcement option per line and a uniform
//! volumetric network charge, anticipating how the spot market will clear
//! under those choices. Because the clearing problem is convex with zero
//! duality gap, the anticipation can be encoded exactly: keep the clearing
//! constraints, add the constraints of their dual, and force the two
//! objectives to meet. Any point satisfying all three is an optimal market
//! outcome for the chosen reinforcements, so the planner's objective and
//! revenue-adequacy constraint can be written over the same variables.
//!
//! Two sources of bilinearity appear on the way and both are removed:
//!
//! * Products between a binary option indicator `u` and a bounded market
//!   quantity (an admittance-weighted voltage product, a flow dual, a net
//!   injection). Each product gets an auxiliary column pinned by four
//!   inequalities that collapse to `y = u x` once `u` is binary.
//! * The tariff revenue `tau` times cleared volume, and the merchandising
//!   revenue `pi * p`. The first is linear because the charge applies to
//!   fixed loads and offered capacities, not cleared quantities. The second
//!   is replaced through the settlement identity proved by
//!   [`verify_lemma1`], which rewrites nodal revenue in bid prices and
//!   scarcity rents, all linear.
//!
//! The result is a mixed-integer second-order-cone program whose continuous
//! relaxation is convex, solvable by the branch-and-bound driver.

use crate::conic::ConicProgram;
use crate::market::{push_term, terms, MarketIndex, MarketProblem, MarketSolution, POWER_SCALE};
use crate::network::{
    expanded_params, path_to_root, subtree_nodes, ExpandedParams, NetworkCase, TopologyError,
};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReformError {
    #[error("product {name} needs finite bounds, got [{lo}, {hi}]")]
    UnboundedProduct { name: String, lo: f64, hi: f64 },
    #[error("expansion assignment must pick one option for each of {expected} lines, got {got}")]
    BadAssignment { expected: usize, got: usize },
    #[error("line ({from},{to}) has no expansion option index {index}")]
    UnknownOption { from: usize, to: usize, index: usize },
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// Bounds used to linearize products with the binary option indicators.
///
/// `m1` caps dual prices, `m2..m5` bracket net injections, and `m6` caps the
/// voltage-rise dual. Injection brackets are exact ranges implied by the
/// balance equations; the price caps are assumptions that
/// [`SingleLevelProblem::big_m_audit`] re-checks after every solve.
#[derive(Debug, Clone)]
pub struct BigMTable {
    /// Cap on |lambda| and mu, p/kWh.
    pub m1: f64,
    /// Net-injection range per `[time][node-1]`, program units: active low.
    pub m2: Vec<Vec<f64>>,
    /// Active high.
    pub m3: Vec<Vec<f64>>,
    /// Reactive low.
    pub m4: Vec<Vec<f64>>,
    /// Reactive high.
    pub m5: Vec<Vec<f64>>,
    /// Cap on the voltage-rise dual per `[line][option]`, program units.
    pub m6: Vec<Vec<f64>>,
}

/// Price cap behind `m1`, p/kWh. Two orders of magnitude above the dearest
/// bid in the bundled cases; the audit catches a case that outgrows it.
pub const PRICE_CAP: f64 = 3000.0;

/// Derive the linearization bounds for `case`.
pub fn big_m_table(case: &NetworkCase) -> Result<BigMTable, ReformError> {
    let s = POWER_SCALE;
    let nn = case.num_nodes();
    let (mut m2, mut m3, mut m4, mut m5) = (vec![], vec![], vec![], vec![]);
    for &t in &case.times() {
        let (mut lo_p, mut hi_p, mut lo_q, mut hi_q) = (vec![], vec![], vec![], vec![]);
        for n in 1..nn {
            let d: f64 = case
                .fixed_loads
                .iter()
                .filter(|f| f.node == n && f.t == t)
                .map(|f| f.d)
                .sum();
            let (mut g_lo, mut g_hi, mut gq_lo, mut gq_hi) = (0.0, 0.0, 0.0, 0.0);
            for o in case.gen_offers.iter().filter(|o| o.node == n && o.t == t) {
                g_lo += o.p_min;
                g_hi += o.p_max;
                gq_lo += o.q_min;
                gq_hi += o.q_max;
            }
            let (mut d_lo, mut d_hi, mut dq_lo, mut dq_hi) = (0.0, 0.0, 0.0, 0.0);
            for b in case.demand_bids.iter().filter(|b| b.node == n && b.t == t) {
                d_lo += b.p_min;
                d_hi += b.p_max;
                dq_lo += b.q_min;
                dq_hi += b.q_max;
            }
            lo_p.push((g_lo - d_hi - d) / s);
            hi_p.push((g_hi - d_lo - d) / s);
            lo_q.push((gq_lo - dq_hi) / s);
            hi_q.push((gq_hi - dq_lo) / s);
        }
        m2.push(lo_p);
        m3.push(hi_p);
        m4.push(lo_q);
        m5.push(hi_q);
    }
    // The voltage-rise dual prices squared volts in money per power; scaling
    // by the admittance magnitude over its smaller component converts the
    // price cap into that unit. Scaled admittances keep it in program units.
    let mut m6 = Vec::with_capacity(case.lines.len());
    for line in &case.lines {
        let mut per = Vec::with_capacity(line.expansions.len());
        for opt in &line.expansions {
            let ep = expanded_params(line, opt.m)?;
            let (a, e) = (ep.a / s, ep.e / s);
            per.push(PRICE_CAP * (a * a + e * e) / a.min(e));
        }
        m6.push(per);
    }
    Ok(BigMTable { m1: PRICE_CAP, m2, m3, m4, m5, m6 })
}

/// Which market quantity a product column multiplies with `u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AuxFamily {
    WpF,
    WpR,
    WqF,
    WqR,
    WFrom,
    WTo,
    MuMax,
    MuMin,
    LamPFrom,
    LamPTo,
    LamQFrom,
    LamQTo,
    P,
    Q,
    Beta,
}

impl AuxFamily {
    fn tag(self) -> &'static str {
        match self {
            AuxFamily::WpF => "wpf",
            AuxFamily::WpR => "wpr",
            AuxFamily::WqF => "wqf",
            AuxFamily::WqR => "wqr",
            AuxFamily::WFrom => "wfrom",
            AuxFamily::WTo => "wto",
            AuxFamily::MuMax => "mumax",
            AuxFamily::MuMin => "mumin",
            AuxFamily::LamPFrom => "lpf",
            AuxFamily::LamPTo => "lpt",
            AuxFamily::LamQFrom => "lqf",
            AuxFamily::LamQTo => "lqt",
            AuxFamily::P => "p",
            AuxFamily::Q => "q",
            AuxFamily::Beta => "beta",
        }
    }

    /// Families whose bound is an assumed price cap rather than an implied
    /// range; these are the ones the big-M audit re-checks.
    pub fn is_price_capped(self) -> bool {
        matches!(
            self,
            AuxFamily::MuMax
                | AuxFamily::MuMin
                | AuxFamily::LamPFrom
                | AuxFamily::LamPTo
                | AuxFamily::LamQFrom
                | AuxFamily::LamQTo
                | AuxFamily::Beta
        )
    }
}

/// Address of one product: family, period index, line, option, and for
/// injection-type families the node whose quantity is multiplied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct AuxKey {
    pub family: AuxFamily,
    pub ti: usize,
    pub line: usize,
    pub opt: usize,
    pub node: Option<usize>,
}

impl AuxKey {
    fn label(&self) -> String {
        let AuxKey { family, ti, line, opt, node } = *self;
        match node {
            Some(k) => format!("y_{}[{ti},l{line},o{opt},n{k}]", family.tag()),
            None => format!("y_{}[{ti},l{line},o{opt}]", family.tag()),
        }
    }
}

/// One linearized product: the auxiliary column `y`, the factors it ties
/// together, the assumed range of `x`, and the four enforcing rows.
#[derive(Debug, Clone, Copy)]
pub struct AuxEntry {
    pub y: usize,
    pub x: usize,
    pub u: usize,
    pub lo: f64,
    pub hi: f64,
    pub rows: [usize; 4],
}

/// Registry of every product column, keyed so each bilinear term is
/// linearized exactly once no matter how many rows reference it.
#[derive(Debug, Clone, Default)]
pub struct AuxVarMap {
    entries: BTreeMap<AuxKey, AuxEntry>,
}

impl AuxVarMap {
    /// Column holding `u * x`, creating it and its four rows on first use.
    pub fn product(
        &mut self,
        prog: &mut ConicProgram,
        key: AuxKey,
        x: usize,
        u: usize,
        lo: f64,
        hi: f64,
    ) -> Result<usize, ReformError> {
        if let Some(e) = self.entries.get(&key) {
            debug_assert_eq!((e.x, e.u), (x, u), "one key, one product");
            return Ok(e.y);
        }
        let entry = linearize_product(prog, &key.label(), x, u, lo, hi)?;
        self.entries.insert(key, entry);
        Ok(entry.y)
    }

    pub fn get(&self, key: &AuxKey) -> Option<&AuxEntry> {
        self.entries.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&AuxKey, &AuxEntry)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Add a column `y` constrained to equal `u * x` for binary `u` and
/// `x` in `[lo, hi]`.
///
/// The four rows read: `y >= lo u`, `y <= hi u`, `x - y >= lo (1-u)`,
/// `x - y <= hi (1-u)`. At `u = 1` the last two pin `y = x`; at `u = 0` the
/// first two pin `y = 0` while the last two only restate the range of `x`.
/// The range must genuinely contain `x` at any optimum, otherwise the
/// recast cuts solutions off; hence the error on non-finite bounds.
pub fn linearize_product(
    prog: &mut ConicProgram,
    name: &str,
    x: usize,
    u: usize,
    lo: f64,
    hi: f64,
) -> Result<AuxEntry, ReformError> {
    if !lo.is_finite() || !hi.is_finite() || lo > hi {
        return Err(ReformError::UnboundedProduct { name: name.to_string(), lo, hi });
    }
    let y = prog.add_var(name.to_string(), lo.min(0.0), hi.max(0.0), 0.0);
    let rows = [
        prog.add_ge(format!("{name}.on_lo"), vec![(y, 1.0), (u, -lo)], 0.0),
        prog.add_le(format!("{name}.on_hi"), vec![(y, 1.0), (u, -hi)], 0.0),
        prog.add_ge(format!("{name}.off_lo"), vec![(x, 1.0), (y, -1.0), (u, lo)], lo),
        prog.add_le(format!("{name}.off_hi"), vec![(x, 1.0), (y, -1.0), (u, hi)], hi),
    ];
    Ok(AuxEntry { y, x, u, lo, hi, rows })
}

/// Column and row addresses for the single-level program. The embedded
/// clearing problem reuses the market layout under `primal`; everything
/// else is planner-side or dual-side.
#[derive(Debug, Clone, Default)]
pub struct SingleLevelIndex {
    pub primal: MarketIndex,
    /// Option indicator per `[line][option]`.
    pub u: Vec<Vec<usize>>,
    /// Uniform volumetric charge, p/kWh.
    pub tau: usize,
    // Dual columns, named after the lower-level constraints they price.
    pub pi_p: Vec<Vec<usize>>,
    pub pi_q: Vec<Vec<usize>>,
    pub lam_p: Vec<Vec<usize>>,
    pub lam_q: Vec<Vec<usize>>,
    pub mu_max: Vec<Vec<usize>>,
    pub mu_min: Vec<Vec<usize>>,
    pub beta: Vec<Vec<usize>>,
    pub chi_min: Vec<Vec<usize>>,
    pub chi_max: Vec<Vec<usize>>,
    pub phi_d_p_max: Vec<usize>,
    pub phi_d_p_min: Vec<usize>,
    pub phi_d_q_max: Vec<usize>,
    pub phi_d_q_min: Vec<usize>,
    pub phi_g_p_max: Vec<usize>,
    pub phi_g_p_min: Vec<usize>,
    pub phi_g_q_max: Vec<usize>,
    pub phi_g_q_min: Vec<usize>,
    pub eps_p: Vec<Vec<usize>>,
    pub eps_q: Vec<Vec<usize>>,
    pub rho_up: Vec<Vec<usize>>,
    pub rho_down: Vec<Vec<usize>>,
    pub eta_a: Vec<Vec<usize>>,
    pub eta_b: Vec<Vec<usize>>,
    pub eta_c: Vec<Vec<usize>>,
    pub gamma: Vec<Vec<usize>>,
    /// Dual cone blocks per `[time][line]`.
    pub dual_soc_block: Vec<Vec<usize>>,
    // Dual feasibility rows: one per primal column, named by that column.
    pub row_dual_d_p: Vec<usize>,
    pub row_dual_d_q: Vec<usize>,
    pub row_dual_g_p: Vec<usize>,
    pub row_dual_g_q: Vec<usize>,
    /// Per `[time][node]`; the node-0 entry pins the import price.
    pub row_dual_p: Vec<Vec<usize>>,
    pub row_dual_q: Vec<Vec<usize>>,
    pub row_dual_r_up: Vec<Vec<usize>>,
    pub row_dual_r_down: Vec<Vec<usize>>,
    pub row_dual_wpf: Vec<Vec<usize>>,
    pub row_dual_wpr: Vec<Vec<usize>>,
    pub row_dual_wqf: Vec<Vec<usize>>,
    pub row_dual_wqr: Vec<Vec<usize>>,
    pub row_dual_w: Vec<Vec<usize>>,
    // Planner-side rows.
    pub row_strong: usize,
    pub row_revenue: usize,
    pub row_onehot: Vec<usize>,
    pub row_budget: Option<usize>,
    pub row_chain: Vec<usize>,
}

/// The assembled single-level program plus everything needed to read a
/// solution back in model terms.
#[derive(Debug, Clone)]
pub struct SingleLevelProblem {
    pub case: NetworkCase,
    pub prog: ConicProgram,
    pub index: SingleLevelIndex,
    pub aux: AuxVarMap,
    pub big_m: BigMTable,
    /// Expansion arithmetic per `[line][option]`.
    pub params: Vec<Vec<ExpandedParams>>,
    /// Total volume the charge applies to, kWh: fixed loads plus offered
    /// capacity of both sides, summed over the horizon.
    pub charging_base: f64,
}

/// Staged assembly of the single-level program. [`assemble_single_level`]
/// runs all stages in order; they are exposed separately so tests can
/// inspect intermediate shapes.
pub struct SingleLevelBuilder {
    case: NetworkCase,
    prog: ConicProgram,
    ix: SingleLevelIndex,
    aux: AuxVarMap,
    big_m: BigMTable,
    params: Vec<Vec<ExpandedParams>>,
    /// Root path (line indices) per node.
    paths: Vec<Vec<usize>>,
    /// Nodes fed through each line, sorted.
    subs: Vec<Vec<usize>>,
    base: f64,
}

impl SingleLevelBuilder {
    /// Lay out every column: option indicators and the charge first, then
    /// the market's columns exactly as the clearing problem lays them out,
    /// then the dual prices. Rows come from the build stages.
    pub fn new(case: &NetworkCase) -> Result<Self, ReformError> {
        let s = POWER_SCALE;
        let big_m = big_m_table(case)?;
        let mut params = Vec::with_capacity(case.lines.len());
        for line in &case.lines {
            let mut per = Vec::with_capacity(line.expansions.len());
            for opt in &line.expansions {
                per.push(expanded_params(line, opt.m)?);
            }
            params.push(per);
        }
        let nn = case.num_nodes();
        let paths = (0..nn).map(|n| path_to_root(case, n)).collect::<Result<Vec<_>, _>>()?;
        let subs = case
            .lines
            .iter()
            .map(|l| subtree_nodes(case, l.to).map(|set| set.into_iter().collect::<Vec<_>>()))
            .collect::<Result<Vec<_>, _>>()?;
        let times = case.times();

        let mut prog = ConicProgram::new();
        let mut ix = SingleLevelIndex {
            primal: MarketIndex { times: times.clone(), ..Default::default() },
            ..Default::default()
        };

        for (l, line) in case.lines.iter().enumerate() {
            let mut cols = Vec::with_capacity(line.expansions.len());
            for mi in 0..line.expansions.len() {
                let cost = params[l][mi].total_cost() / s;
                let c =
                    prog.add_var(format!("u[{},{},o{mi}]", line.from, line.to), 0.0, 1.0, cost);
                prog.mark_binary(c);
                cols.push(c);
            }
            prog.onehot_groups.push(cols.clone());
            ix.u.push(cols);
        }
        let base = charging_base(case);
        ix.tau = prog.add_var("tau".to_string(), 0.0, f64::INFINITY, base / s);

        for bid in &case.demand_bids {
            let tag = format!("[{},{},{}]", bid.t, bid.node, bid.id);
            ix.primal.d_p.push(prog.add_var(
                format!("d_p{tag}"),
                bid.p_min / s,
                bid.p_max / s,
                -bid.price,
            ));
            ix.primal.d_q.push(prog.add_var(
                format!("d_q{tag}"),
                bid.q_min / s,
                bid.q_max / s,
                0.0,
            ));
        }
        for offer in &case.gen_offers {
            let tag = format!("[{},{},{}]", offer.t, offer.node, offer.id);
            ix.primal.g_p.push(prog.add_var(
                format!("g_p{tag}"),
                offer.p_min / s,
                offer.p_max / s,
                offer.price,
            ));
            ix.primal.g_q.push(prog.add_var(
                format!("g_q{tag}"),
                offer.q_min / s,
                offer.q_max / s,
                0.0,
            ));
        }
        for &t in &times {
            let tp = case.trade_price(t).expect("validated period");
            let (mut pc, mut qc, mut ruc, mut rdc, mut wc) =
                (vec![], vec![], vec![], vec![], vec![]);
            for n in 0..nn {
                let cost_p = if n == 0 { tp.c_p0 } else { 0.0 };
                let cost_q = if n == 0 { tp.c_q0 } else { 0.0 };
                pc.push(prog.add_var(
                    format!("p[{t},{n}]"),
                    f64::NEG_INFINITY,
                    f64::INFINITY,
                    cost_p,
                ));
                qc.push(prog.add_var(
                    format!("q[{t},{n}]"),
                    f64::NEG_INFINITY,
                    f64::INFINITY,
                    cost_q,
                ));
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
            ix.primal.p.push(pc);
            ix.primal.q.push(qc);
            ix.primal.r_up.push(ruc);
            ix.primal.r_down.push(rdc);
            ix.primal.w.push(wc);

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
            ix.primal.wp_f.push(wpf);
            ix.primal.wp_r.push(wpr);
            ix.primal.wq_f.push(wqf);
            ix.primal.wq_r.push(wqr);
            ix.primal.soc_t.push(sct);
            ix.primal.soc_z.push(scz);
        }

        // Dual prices. Sign-constrained ones get a zero floor; the cone
        // multipliers are left free because their own cone membership row
        // already forces the head above the tail norm.
        for &t in &times {
            let (mut pip, mut piq, mut lp, mut lq) = (vec![], vec![], vec![], vec![]);
            for n in 1..nn {
                pip.push(prog.free_var(format!("pi_p[{t},{n}]")));
                piq.push(prog.free_var(format!("pi_q[{t},{n}]")));
            }
            for n in 0..nn {
                lp.push(prog.free_var(format!("lam_p[{t},{n}]")));
                lq.push(prog.free_var(format!("lam_q[{t},{n}]")));
            }
            ix.pi_p.push(pip);
            ix.pi_q.push(piq);
            ix.lam_p.push(lp);
            ix.lam_q.push(lq);

            let (mut mx, mut mn) = (vec![], vec![]);
            for line in &case.lines {
                let tag = format!("[{},{},{}]", t, line.from, line.to);
                mx.push(prog.nonneg_var(format!("mu_max{tag}")));
                mn.push(prog.nonneg_var(format!("mu_min{tag}")));
            }
            ix.mu_max.push(mx);
            ix.mu_min.push(mn);

            let (mut bt, mut cmin, mut cmax) = (vec![], vec![], vec![]);
            for n in 1..nn {
                bt.push(prog.nonneg_var(format!("beta[{t},{n}]")));
                cmin.push(prog.nonneg_var(format!("chi_min[{t},{n}]")));
                cmax.push(prog.nonneg_var(format!("chi_max[{t},{n}]")));
            }
            ix.beta.push(bt);
            ix.chi_min.push(cmin);
            ix.chi_max.push(cmax);

            let (mut ep, mut eq) = (vec![], vec![]);
            for line in &case.lines {
                let tag = format!("[{},{},{}]", t, line.from, line.to);
                ep.push(prog.free_var(format!("eps_p{tag}")));
                eq.push(prog.free_var(format!("eps_q{tag}")));
            }
            ix.eps_p.push(ep);
            ix.eps_q.push(eq);

            let (mut ru, mut rd) = (vec![], vec![]);
            for n in 1..nn {
                ru.push(prog.free_var(format!("rho_up[{t},{n}]")));
                rd.push(prog.free_var(format!("rho_down[{t},{n}]")));
            }
            ix.rho_up.push(ru);
            ix.rho_down.push(rd);

            let (mut ga, mut ea, mut eb, mut ec) = (vec![], vec![], vec![], vec![]);
            for line in &case.lines {
                let tag = format!("[{},{},{}]", t, line.from, line.to);
                ga.push(prog.free_var(format!("gamma{tag}")));
                ea.push(prog.free_var(format!("eta_a{tag}")));
                eb.push(prog.free_var(format!("eta_b{tag}")));
                ec.push(prog.free_var(format!("eta_c{tag}")));
            }
            ix.gamma.push(ga);
            ix.eta_a.push(ea);
            ix.eta_b.push(eb);
            ix.eta_c.push(ec);
        }
        for bid in &case.demand_bids {
            let tag = format!("[{},{},{}]", bid.t, bid.node, bid.id);
            ix.phi_d_p_max.push(prog.nonneg_var(format!("phi_dpmax{tag}")));
            ix.phi_d_p_min.push(prog.nonneg_var(format!("phi_dpmin{tag}")));
            ix.phi_d_q_max.push(prog.nonneg_var(format!("phi_dqmax{tag}")));
            ix.phi_d_q_min.push(prog.nonneg_var(format!("phi_dqmin{tag}")));
        }
        for offer in &case.gen_offers {
            let tag = format!("[{},{},{}]", offer.t, offer.node, offer.id);
            ix.phi_g_p_max.push(prog.nonneg_var(format!("phi_gpmax{tag}")));
            ix.phi_g_p_min.push(prog.nonneg_var(format!("phi_gpmin{tag}")));
            ix.phi_g_q_max.push(prog.nonneg_var(format!("phi_gqmax{tag}")));
            ix.phi_g_q_min.push(prog.nonneg_var(format!("phi_gqmin{tag}")));
        }

        Ok(SingleLevelBuilder {
            case: case.clone(),
            prog,
            ix,
            aux: AuxVarMap::default(),
            big_m,
            params,
            paths,
            subs,
            base,
        })
    }

    /// Scaled admittance of option `mi` on line `l`.
    fn admittance(&self, l: usize, mi: usize) -> (f64, f64) {
        let s = POWER_SCALE;
        (self.params[l][mi].a / s, self.params[l][mi].e / s)
    }

    /// Product of `u[l][mi]` with a per-line market quantity.
    fn y_line(
        &mut self,
        family: AuxFamily,
        ti: usize,
        l: usize,
        mi: usize,
    ) -> Result<usize, ReformError> {
        let line = &self.case.lines[l];
        let w_hi = |n: usize| {
            if n == 0 {
                1.0
            } else {
                self.case.nodes[n].v_max * self.case.nodes[n].v_max
            }
        };
        let w_lo = |n: usize| {
            if n == 0 {
                1.0
            } else {
                self.case.nodes[n].v_min * self.case.nodes[n].v_min
            }
        };
        // Off-diagonal products are bounded by the cone: their magnitude
        // stays under the endpoint average of W, hence under the larger cap.
        let wb = w_hi(line.from).max(w_hi(line.to));
        let m1 = self.big_m.m1;
        let (x, lo, hi) = match family {
            AuxFamily::WpF => (self.ix.primal.wp_f[ti][l], -wb, wb),
            AuxFamily::WpR => (self.ix.primal.wp_r[ti][l], -wb, wb),
            AuxFamily::WqF => (self.ix.primal.wq_f[ti][l], -wb, wb),
            AuxFamily::WqR => (self.ix.primal.wq_r[ti][l], -wb, wb),
            AuxFamily::WFrom => {
                debug_assert!(line.from != 0, "slack W is constant, no product needed");
                (self.ix.primal.w[ti][line.from - 1], w_lo(line.from), w_hi(line.from))
            }
            AuxFamily::WTo => (self.ix.primal.w[ti][line.to - 1], w_lo(line.to), w_hi(line.to)),
            AuxFamily::MuMax => (self.ix.mu_max[ti][l], 0.0, m1),
            AuxFamily::MuMin => (self.ix.mu_min[ti][l], 0.0, m1),
            AuxFamily::LamPFrom => (self.ix.lam_p[ti][line.from], -m1, m1),
            AuxFamily::LamPTo => (self.ix.lam_p[ti][line.to], -m1, m1),
            AuxFamily::LamQFrom => (self.ix.lam_q[ti][line.from], -m1, m1),
            AuxFamily::LamQTo => (self.ix.lam_q[ti][line.to], -m1, m1),
            _ => unreachable!("node-indexed family"),
        };
        let u = self.ix.u[l][mi];
        let key = AuxKey { family, ti, line: l, opt: mi, node: None };
        self.aux.product(&mut self.prog, key, x, u, lo, hi)
    }

    /// Product of `u[l][mi]` with a per-node quantity of node `k`, which
    /// must be fed through line `l`.
    fn y_node(
        &mut self,
        family: AuxFamily,
        ti: usize,
        l: usize,
        mi: usize,
        k: usize,
    ) -> Result<usize, ReformError> {
        let (x, lo, hi) = match family {
            AuxFamily::P => {
                (self.ix.primal.p[ti][k], self.big_m.m2[ti][k - 1], self.big_m.m3[ti][k - 1])
            }
            AuxFamily::Q => {
                (self.ix.primal.q[ti][k], self.big_m.m4[ti][k - 1], self.big_m.m5[ti][k - 1])
            }
            AuxFamily::Beta => (self.ix.beta[ti][k - 1], 0.0, self.big_m.m6[l][mi]),
            _ => unreachable!("line-indexed family"),
        };
        let u = self.ix.u[l][mi];
        let key = AuxKey { family, ti, line: l, opt: mi, node: Some(k) };
        self.aux.product(&mut self.prog, key, x, u, lo, hi)
    }

    /// The clearing constraints with the admittance of each candidate
    /// option weighted by its indicator. Once one option is picked these
    /// collapse to the clearing problem for that option.
    pub fn build_primal_block(&mut self) -> Result<(), ReformError> {
        let s = POWER_SCALE;
        let nn = self.case.num_nodes();
        let times = self.case.times();
        for (ti, &t) in times.iter().enumerate() {
            let (mut bal_p, mut bal_q) = (vec![], vec![]);
            for n in 1..nn {
                let d_total: f64 = self
                    .case
                    .fixed_loads
                    .iter()
                    .filter(|f| f.node == n && f.t == t)
                    .map(|f| f.d)
                    .sum();
                let mut tp_acc = BTreeMap::new();
                let mut tq_acc = BTreeMap::new();
                push_term(&mut tp_acc, self.ix.primal.p[ti][n], 1.0);
                push_term(&mut tq_acc, self.ix.primal.q[ti][n], 1.0);
                for (k, bid) in self.case.demand_bids.iter().enumerate() {
                    if bid.node == n && bid.t == t {
                        push_term(&mut tp_acc, self.ix.primal.d_p[k], 1.0);
                        push_term(&mut tq_acc, self.ix.primal.d_q[k], 1.0);
                    }
                }
                for (k, offer) in self.case.gen_offers.iter().enumerate() {
                    if offer.node == n && offer.t == t {
                        push_term(&mut tp_acc, self.ix.primal.g_p[k], -1.0);
                        push_term(&mut tq_acc, self.ix.primal.g_q[k], -1.0);
                    }
                }
                bal_p.push(self.prog.add_eq(
                    format!("bal_p[{t},{n}]"),
                    terms(tp_acc),
                    -d_total / s,
                ));
                bal_q.push(self.prog.add_eq(format!("bal_q[{t},{n}]"), terms(tq_acc), 0.0));
            }
            self.ix.primal.row_bal_p.push(bal_p);
            self.ix.primal.row_bal_q.push(bal_q);

            // Flow balance. The slack's W is the constant 1, so its product
            // with an indicator is the indicator itself.
            let (mut flow_p, mut flow_q) = (vec![], vec![]);
            for n in 0..nn {
                let mut fp = BTreeMap::new();
                let mut fq = BTreeMap::new();
                push_term(&mut fp, self.ix.primal.p[ti][n], 1.0);
                push_term(&mut fq, self.ix.primal.q[ti][n], 1.0);
                for l in 0..self.case.lines.len() {
                    let line_from = self.case.lines[l].from;
                    let line_to = self.case.lines[l].to;
                    if line_from == n {
                        for mi in 0..self.params[l].len() {
                            let (a, e) = self.admittance(l, mi);
                            if n == 0 {
                                push_term(&mut fp, self.ix.u[l][mi], -a);
                                push_term(&mut fq, self.ix.u[l][mi], -e);
                            } else {
                                let yw = self.y_line(AuxFamily::WFrom, ti, l, mi)?;
                                push_term(&mut fp, yw, -a);
                                push_term(&mut fq, yw, -e);
                            }
                            let ypf = self.y_line(AuxFamily::WpF, ti, l, mi)?;
                            let yqf = self.y_line(AuxFamily::WqF, ti, l, mi)?;
                            push_term(&mut fp, ypf, a);
                            push_term(&mut fp, yqf, -e);
                            push_term(&mut fq, ypf, e);
                            push_term(&mut fq, yqf, a);
                        }
                    }
                    if line_to == n {
                        for mi in 0..self.params[l].len() {
                            let (a, e) = self.admittance(l, mi);
                            let yw = self.y_line(AuxFamily::WTo, ti, l, mi)?;
                            let ypr = self.y_line(AuxFamily::WpR, ti, l, mi)?;
                            let yqr = self.y_line(AuxFamily::WqR, ti, l, mi)?;
                            push_term(&mut fp, yw, -a);
                            push_term(&mut fp, ypr, a);
                            push_term(&mut fp, yqr, -e);
                            push_term(&mut fq, yw, -e);
                            push_term(&mut fq, ypr, e);
                            push_term(&mut fq, yqr, a);
                        }
                    }
                }
                flow_p.push(self.prog.add_eq(format!("flow_p[{t},{n}]"), terms(fp), 0.0));
                flow_q.push(self.prog.add_eq(format!("flow_q[{t},{n}]"), terms(fq), 0.0));
            }
            self.ix.primal.row_flow_p.push(flow_p);
            self.ix.primal.row_flow_q.push(flow_q);

            // Thermal limits; the capacity added by an option rides on its
            // indicator.
            let (mut fmax, mut fmin) = (vec![], vec![]);
            for l in 0..self.case.lines.len() {
                let (line_from, line_to) = (self.case.lines[l].from, self.case.lines[l].to);
                let (cap_fwd, cap_rev) =
                    (self.case.lines[l].f_max / s, self.case.lines[l].f_min / s);
                let mut fwd = BTreeMap::new();
                let mut rev = BTreeMap::new();
                for mi in 0..self.params[l].len() {
                    let (a, e) = self.admittance(l, mi);
                    let f_add = self.params[l][mi].f_add / s;
                    if line_from == 0 {
                        push_term(&mut fwd, self.ix.u[l][mi], a - f_add);
                    } else {
                        let yw = self.y_line(AuxFamily::WFrom, ti, l, mi)?;
                        push_term(&mut fwd, yw, a);
                        push_term(&mut fwd, self.ix.u[l][mi], -f_add);
                    }
                    let ypf = self.y_line(AuxFamily::WpF, ti, l, mi)?;
                    let yqf = self.y_line(AuxFamily::WqF, ti, l, mi)?;
                    push_term(&mut fwd, ypf, -a);
                    push_term(&mut fwd, yqf, e);

                    let yw = self.y_line(AuxFamily::WTo, ti, l, mi)?;
                    let ypr = self.y_line(AuxFamily::WpR, ti, l, mi)?;
                    let yqr = self.y_line(AuxFamily::WqR, ti, l, mi)?;
                    push_term(&mut rev, yw, a);
                    push_term(&mut rev, ypr, -a);
                    push_term(&mut rev, yqr, e);
                    push_term(&mut rev, self.ix.u[l][mi], -f_add);
                }
                fmax.push(self.prog.add_le(
                    format!("fmax[{t},{line_from},{line_to}]"),
                    terms(fwd),
                    cap_fwd,
                ));
                fmin.push(self.prog.add_le(
                    format!("fmin[{t},{line_from},{line_to}]"),
                    terms(rev),
                    cap_rev,
                ));
            }
            self.ix.primal.row_fmax.push(fmax);
            self.ix.primal.row_fmin.push(fmin);

            // Voltage-rise caps; each candidate impedance weights the
            // subtree injections through its indicator.
            let mut vcap = vec![];
            for n in 1..nn {
                let mut acc = BTreeMap::new();
                for li in 0..self.paths[n].len() {
                    let l = self.paths[n][li];
                    for mi in 0..self.params[l].len() {
                        let (a, e) = self.admittance(l, mi);
                        let denom = a * a + e * e;
                        let (r, x) = (a / denom, e / denom);
                        for ki in 0..self.subs[l].len() {
                            let k = self.subs[l][ki];
                            let yp = self.y_node(AuxFamily::P, ti, l, mi, k)?;
                            let yq = self.y_node(AuxFamily::Q, ti, l, mi, k)?;
                            push_term(&mut acc, yp, 2.0 * r);
                            push_term(&mut acc, yq, 2.0 * x);
                        }
                    }
                }
                let vmax = self.case.nodes[n].v_max;
                vcap.push(self.prog.add_le(
                    format!("vcap[{t},{n}]"),
                    terms(acc),
                    vmax * vmax - 1.0,
                ));
            }
            self.ix.primal.row_vcap.push(vcap);

            let (mut herm_p, mut herm_q) = (vec![], vec![]);
            for (l, line) in self.case.lines.iter().enumerate() {
                let tag = format!("[{},{},{}]", t, line.from, line.to);
                herm_p.push(self.prog.add_eq(
                    format!("herm_p{tag}"),
                    vec![(self.ix.primal.wp_f[ti][l], 1.0), (self.ix.primal.wp_r[ti][l], -1.0)],
                    0.0,
                ));
                herm_q.push(self.prog.add_eq(
                    format!("herm_q{tag}"),
                    vec![(self.ix.primal.wq_f[ti][l], 1.0), (self.ix.primal.wq_r[ti][l], 1.0)],
                    0.0,
                ));
            }
            self.ix.primal.row_herm_p.push(herm_p);
            self.ix.primal.row_herm_q.push(herm_q);

            let (mut res_up, mut res_down) = (vec![], vec![]);
            for n in 1..nn {
                let mut up = BTreeMap::new();
                let mut down = BTreeMap::new();
                push_term(&mut up, self.ix.primal.r_up[ti][n - 1], 1.0);
                push_term(&mut down, self.ix.primal.r_down[ti][n - 1], 1.0);
                let mut g_max_sum = 0.0;
                let mut d_max_sum = 0.0;
                for (k, offer) in self.case.gen_offers.iter().enumerate() {
                    if offer.node == n && offer.t == t {
                        push_term(&mut up, self.ix.primal.g_p[k], 1.0);
                        push_term(&mut down, self.ix.primal.g_p[k], -1.0);
                        g_max_sum += offer.p_max;
                    }
                }
                for (k, bid) in self.case.demand_bids.iter().enumerate() {
                    if bid.node == n && bid.t == t {
                        push_term(&mut up, self.ix.primal.d_p[k], -1.0);
                        push_term(&mut down, self.ix.primal.d_p[k], 1.0);
                        d_max_sum += bid.p_max;
                    }
                }
                res_up.push(self.prog.add_eq(
                    format!("res_up[{t},{n}]"),
                    terms(up),
                    g_max_sum / s,
                ));
                res_down.push(self.prog.add_eq(
                    format!("res_down[{t},{n}]"),
                    terms(down),
                    d_max_sum / s,
                ));
            }
            self.ix.primal.row_res_up.push(res_up);
            self.ix.primal.row_res_down.push(res_down);

            // Cone halves and the cone itself; these involve no admittance,
            // so no indicators appear.
            let (mut link_t, mut link_z, mut blocks) = (vec![], vec![], vec![]);
            for (l, line) in self.case.lines.iter().enumerate() {
                let tag = format!("[{},{},{}]", t, line.from, line.to);
                let mut lt = BTreeMap::new();
                let mut lz = BTreeMap::new();
                push_term(&mut lt, self.ix.primal.soc_t[ti][l], 1.0);
                push_term(&mut lz, self.ix.primal.soc_z[ti][l], 1.0);
                let mut rhs = 0.0;
                if line.from == 0 {
                    rhs = 0.5;
                } else {
                    push_term(&mut lt, self.ix.primal.w[ti][line.from - 1], -0.5);
                    push_term(&mut lz, self.ix.primal.w[ti][line.from - 1], -0.5);
                }
                push_term(&mut lt, self.ix.primal.w[ti][line.to - 1], -0.5);
                push_term(&mut lz, self.ix.primal.w[ti][line.to - 1], 0.5);
                link_t.push(self.prog.add_eq(format!("link_t{tag}"), terms(lt), rhs));
                link_z.push(self.prog.add_eq(format!("link_z{tag}"), terms(lz), rhs));
                blocks.push(self.prog.add_soc(vec![
                    self.ix.primal.soc_t[ti][l],
                    self.ix.primal.wp_f[ti][l],
                    self.ix.primal.wq_f[ti][l],
                    self.ix.primal.soc_z[ti][l],
                ]));
            }
            self.ix.primal.row_link_t.push(link_t);
            self.ix.primal.row_link_z.push(link_z);
            self.ix.primal.soc_block.push(blocks);
        }
        Ok(())
    }

    /// Dual feasibility: one stationarity row per clearing variable, plus
    /// the dual cone per line. Admittance-weighted dual prices come in as
    /// products with the option indicators, sharing the registry with the
    /// primal block.
    pub fn build_dual_block(&mut self) -> Result<(), ReformError> {
        let nn = self.case.num_nodes();
        let times = self.case.times();
        let t2i: BTreeMap<usize, usize> =
            times.iter().enumerate().map(|(i, &t)| (t, i)).collect();

        // Participants: the nodal price, reserve prices and scarcity rents
        // tile the bid price exactly.
        for (k, bid) in self.case.demand_bids.iter().enumerate() {
            let ti = t2i[&bid.t];
            let n = bid.node;
            let row = self.prog.add_eq(
                format!("dual_d[{},{},{}]", bid.t, n, bid.id),
                vec![
                    (self.ix.pi_p[ti][n - 1], 1.0),
                    (self.ix.phi_d_p_max[k], 1.0),
                    (self.ix.phi_d_p_min[k], -1.0),
                    (self.ix.rho_up[ti][n - 1], -1.0),
                    (self.ix.rho_down[ti][n - 1], 1.0),
                ],
                bid.price,
            );
            self.ix.row_dual_d_p.push(row);
            let row = self.prog.add_eq(
                format!("dual_dq[{},{},{}]", bid.t, n, bid.id),
                vec![
                    (self.ix.pi_q[ti][n - 1], 1.0),
                    (self.ix.phi_d_q_max[k], 1.0),
                    (self.ix.phi_d_q_min[k], -1.0),
                ],
                0.0,
            );
            self.ix.row_dual_d_q.push(row);
        }
        for (k, offer) in self.case.gen_offers.iter().enumerate() {
            let ti = t2i[&offer.t];
            let n = offer.node;
            let row = self.prog.add_eq(
                format!("dual_g[{},{},{}]", offer.t, n, offer.id),
                vec![
                    (self.ix.pi_p[ti][n - 1], -1.0),
                    (self.ix.phi_g_p_max[k], 1.0),
                    (self.ix.phi_g_p_min[k], -1.0),
                    (self.ix.rho_up[ti][n - 1], 1.0),
                    (self.ix.rho_down[ti][n - 1], -1.0),
                ],
                -offer.price,
            );
            self.ix.row_dual_g_p.push(row);
            let row = self.prog.add_eq(
                format!("dual_gq[{},{},{}]", offer.t, n, offer.id),
                vec![
                    (self.ix.pi_q[ti][n - 1], -1.0),
                    (self.ix.phi_g_q_max[k], 1.0),
                    (self.ix.phi_g_q_min[k], -1.0),
                ],
                0.0,
            );
            self.ix.row_dual_g_q.push(row);
        }

        for (ti, &t) in times.iter().enumerate() {
            let tp = *self.case.trade_price(t).expect("validated period");

            // Net injections. The import column only appears in the slack
            // flow balance, so its stationarity pins that dual to the
            // import price.
            let (mut dp, mut dq) = (vec![], vec![]);
            dp.push(self.prog.add_eq(
                format!("dual_p[{t},0]"),
                vec![(self.ix.lam_p[ti][0], 1.0)],
                -tp.c_p0,
            ));
            dq.push(self.prog.add_eq(
                format!("dual_q[{t},0]"),
                vec![(self.ix.lam_q[ti][0], 1.0)],
                -tp.c_q0,
            ));
            for n in 1..nn {
                let mut accp = BTreeMap::new();
                let mut accq = BTreeMap::new();
                push_term(&mut accp, self.ix.pi_p[ti][n - 1], 1.0);
                push_term(&mut accp, self.ix.lam_p[ti][n], 1.0);
                push_term(&mut accq, self.ix.pi_q[ti][n - 1], 1.0);
                push_term(&mut accq, self.ix.lam_q[ti][n], 1.0);
                // Every voltage cap whose path covers this node prices its
                // injection; the pairing mirrors the primal cap rows.
                for li in 0..self.paths[n].len() {
                    let l = self.paths[n][li];
                    for mi in 0..self.params[l].len() {
                        let (a, e) = self.admittance(l, mi);
                        let denom = a * a + e * e;
                        let (r, x) = (a / denom, e / denom);
                        for ki in 0..self.subs[l].len() {
                            let k = self.subs[l][ki];
                            let yb = self.y_node(AuxFamily::Beta, ti, l, mi, k)?;
                            push_term(&mut accp, yb, 2.0 * r);
                            push_term(&mut accq, yb, 2.0 * x);
                        }
                    }
                }
                dp.push(self.prog.add_eq(format!("dual_p[{t},{n}]"), terms(accp), 0.0));
                dq.push(self.prog.add_eq(format!("dual_q[{t},{n}]"), terms(accq), 0.0));
            }
            self.ix.row_dual_p.push(dp);
            self.ix.row_dual_q.push(dq);

            // Reserves trade at their posted prices.
            let (mut dru, mut drd) = (vec![], vec![]);
            for n in 1..nn {
                dru.push(self.prog.add_eq(
                    format!("dual_rup[{t},{n}]"),
                    vec![(self.ix.rho_up[ti][n - 1], 1.0)],
                    tp.c_up,
                ));
                drd.push(self.prog.add_eq(
                    format!("dual_rdown[{t},{n}]"),
                    vec![(self.ix.rho_down[ti][n - 1], 1.0)],
                    tp.c_down,
                ));
            }
            self.ix.row_dual_r_up.push(dru);
            self.ix.row_dual_r_down.push(drd);

            // Voltage products: each candidate admittance couples the flow
            // duals at its endpoints; the forward components also meet the
            // symmetry price and the cone multipliers.
            let (mut dwpf, mut dwpr, mut dwqf, mut dwqr, mut blocks) =
                (vec![], vec![], vec![], vec![], vec![]);
            for l in 0..self.case.lines.len() {
                let (line_from, line_to) = (self.case.lines[l].from, self.case.lines[l].to);
                let tag = format!("[{t},{line_from},{line_to}]");

                let mut acc = BTreeMap::new();
                for mi in 0..self.params[l].len() {
                    let (a, e) = self.admittance(l, mi);
                    let ylp = self.y_line(AuxFamily::LamPFrom, ti, l, mi)?;
                    let ylq = self.y_line(AuxFamily::LamQFrom, ti, l, mi)?;
                    let ymu = self.y_line(AuxFamily::MuMax, ti, l, mi)?;
                    push_term(&mut acc, ylp, a);
                    push_term(&mut acc, ylq, e);
                    push_term(&mut acc, ymu, -a);
                }
                push_term(&mut acc, self.ix.eps_p[ti][l], 1.0);
                push_term(&mut acc, self.ix.eta_a[ti][l], 1.0);
                dwpf.push(self.prog.add_eq(format!("dual_wpf{tag}"), terms(acc), 0.0));

                let mut acc = BTreeMap::new();
                for mi in 0..self.params[l].len() {
                    let (a, e) = self.admittance(l, mi);
                    let ylp = self.y_line(AuxFamily::LamPTo, ti, l, mi)?;
                    let ylq = self.y_line(AuxFamily::LamQTo, ti, l, mi)?;
                    let ymu = self.y_line(AuxFamily::MuMin, ti, l, mi)?;
                    push_term(&mut acc, ylp, a);
                    push_term(&mut acc, ylq, e);
                    push_term(&mut acc, ymu, -a);
                }
                push_term(&mut acc, self.ix.eps_p[ti][l], -1.0);
                dwpr.push(self.prog.add_eq(format!("dual_wpr{tag}"), terms(acc), 0.0));

                let mut acc = BTreeMap::new();
                for mi in 0..self.params[l].len() {
                    let (a, e) = self.admittance(l, mi);
                    let ylp = self.y_line(AuxFamily::LamPFrom, ti, l, mi)?;
                    let ylq = self.y_line(AuxFamily::LamQFrom, ti, l, mi)?;
                    let ymu = self.y_line(AuxFamily::MuMax, ti, l, mi)?;
                    push_term(&mut acc, ylp, -e);
                    push_term(&mut acc, ylq, a);
                    push_term(&mut acc, ymu, e);
                }
                push_term(&mut acc, self.ix.eps_q[ti][l], 1.0);
                push_term(&mut acc, self.ix.eta_b[ti][l], 1.0);
                dwqf.push(self.prog.add_eq(format!("dual_wqf{tag}"), terms(acc), 0.0));

                let mut acc = BTreeMap::new();
                for mi in 0..self.params[l].len() {
                    let (a, e) = self.admittance(l, mi);
                    let ylp = self.y_line(AuxFamily::LamPTo, ti, l, mi)?;
                    let ylq = self.y_line(AuxFamily::LamQTo, ti, l, mi)?;
                    let ymu = self.y_line(AuxFamily::MuMin, ti, l, mi)?;
                    push_term(&mut acc, ylp, -e);
                    push_term(&mut acc, ylq, a);
                    push_term(&mut acc, ymu, e);
                }
                push_term(&mut acc, self.ix.eps_q[ti][l], 1.0);
                dwqr.push(self.prog.add_eq(format!("dual_wqr{tag}"), terms(acc), 0.0));

                blocks.push(self.prog.add_soc(vec![
                    self.ix.gamma[ti][l],
                    self.ix.eta_a[ti][l],
                    self.ix.eta_b[ti][l],
                    self.ix.eta_c[ti][l],
                ]));
            }
            self.ix.row_dual_wpf.push(dwpf);
            self.ix.row_dual_wpr.push(dwpr);
            self.ix.row_dual_wqf.push(dwqf);
            self.ix.row_dual_wqr.push(dwqr);
            self.ix.dual_soc_block.push(blocks);

            // Squared voltages: flow duals of incident lines, cone halves,
            // and the range rents must cancel.
            let mut dw = vec![];
            for n in 1..nn {
                let mut acc = BTreeMap::new();
                for l in 0..self.case.lines.len() {
                    let (line_from, line_to) =
                        (self.case.lines[l].from, self.case.lines[l].to);
                    if line_from == n {
                        for mi in 0..self.params[l].len() {
                            let (a, e) = self.admittance(l, mi);
                            let ylp = self.y_line(AuxFamily::LamPFrom, ti, l, mi)?;
                            let ylq = self.y_line(AuxFamily::LamQFrom, ti, l, mi)?;
                            let ymu = self.y_line(AuxFamily::MuMax, ti, l, mi)?;
                            push_term(&mut acc, ylp, -a);
                            push_term(&mut acc, ylq, -e);
                            push_term(&mut acc, ymu, a);
                        }
                        push_term(&mut acc, self.ix.eta_c[ti][l], 0.5);
                        push_term(&mut acc, self.ix.gamma[ti][l], -0.5);
                    }
                    if line_to == n {
                        for mi in 0..self.params[l].len() {
                            let (a, e) = self.admittance(l, mi);
                            let ylp = self.y_line(AuxFamily::LamPTo, ti, l, mi)?;
                            let ylq = self.y_line(AuxFamily::LamQTo, ti, l, mi)?;
                            let ymu = self.y_line(AuxFamily::MuMin, ti, l, mi)?;
                            push_term(&mut acc, ylp, -a);
                            push_term(&mut acc, ylq, -e);
                            push_term(&mut acc, ymu, a);
                        }
                        push_term(&mut acc, self.ix.eta_c[ti][l], -0.5);
                        push_term(&mut acc, self.ix.gamma[ti][l], -0.5);
                    }
                }
                push_term(&mut acc, self.ix.chi_max[ti][n - 1], 1.0);
                push_term(&mut acc, self.ix.chi_min[ti][n - 1], -1.0);
                dw.push(self.prog.add_eq(format!("dual_w[{t},{n}]"), terms(acc), 0.0));
            }
            self.ix.row_dual_w.push(dw);
        }
        Ok(())
    }

    /// One equation forcing the cleared surplus to equal the dual bound.
    /// Together with both feasibility blocks this certifies the embedded
    /// clearing outcome as optimal for whichever options are picked.
    pub fn build_strong_duality(&mut self) -> Result<(), ReformError> {
        let s = POWER_SCALE;
        let nn = self.case.num_nodes();
        let times = self.case.times();
        let mut acc = BTreeMap::new();

        // Cleared surplus, the maximized objective.
        for (k, bid) in self.case.demand_bids.iter().enumerate() {
            push_term(&mut acc, self.ix.primal.d_p[k], bid.price);
        }
        for (k, offer) in self.case.gen_offers.iter().enumerate() {
            push_term(&mut acc, self.ix.primal.g_p[k], -offer.price);
        }
        for (ti, &t) in times.iter().enumerate() {
            let tp = *self.case.trade_price(t).expect("validated period");
            push_term(&mut acc, self.ix.primal.p[ti][0], -tp.c_p0);
            push_term(&mut acc, self.ix.primal.q[ti][0], -tp.c_q0);
            for n in 1..nn {
                push_term(&mut acc, self.ix.primal.r_up[ti][n - 1], tp.c_up);
                push_term(&mut acc, self.ix.primal.r_down[ti][n - 1], tp.c_down);
            }
        }

        // Minus the dual objective: every constant term of a clearing
        // constraint weighted by its price, with option-dependent constants
        // going through the product registry.
        for (ti, &t) in times.iter().enumerate() {
            for n in 1..nn {
                let d_total: f64 = self
                    .case
                    .fixed_loads
                    .iter()
                    .filter(|f| f.node == n && f.t == t)
                    .map(|f| f.d)
                    .sum();
                push_term(&mut acc, self.ix.pi_p[ti][n - 1], d_total / s);

                let vmax = self.case.nodes[n].v_max;
                let vmin = self.case.nodes[n].v_min;
                push_term(&mut acc, self.ix.beta[ti][n - 1], -(vmax * vmax - 1.0));
                push_term(&mut acc, self.ix.chi_max[ti][n - 1], -vmax * vmax);
                push_term(&mut acc, self.ix.chi_min[ti][n - 1], vmin * vmin);

                let mut g_max_sum = 0.0;
                let mut d_max_sum = 0.0;
                for offer in self.case.gen_offers.iter().filter(|o| o.node == n && o.t == t) {
                    g_max_sum += offer.p_max;
                }
                for bid in self.case.demand_bids.iter().filter(|b| b.node == n && b.t == t) {
                    d_max_sum += bid.p_max;
                }
                push_term(&mut acc, self.ix.rho_up[ti][n - 1], -g_max_sum / s);
                push_term(&mut acc, self.ix.rho_down[ti][n - 1], -d_max_sum / s);
            }
            for l in 0..self.case.lines.len() {
                let line_from = self.case.lines[l].from;
                push_term(&mut acc, self.ix.mu_max[ti][l], -self.case.lines[l].f_max / s);
                push_term(&mut acc, self.ix.mu_min[ti][l], -self.case.lines[l].f_min / s);
                for mi in 0..self.params[l].len() {
                    let (a, e) = self.admittance(l, mi);
                    let f_add = self.params[l][mi].f_add / s;
                    let ymx = self.y_line(AuxFamily::MuMax, ti, l, mi)?;
                    let ymn = self.y_line(AuxFamily::MuMin, ti, l, mi)?;
                    push_term(&mut acc, ymx, -f_add);
                    push_term(&mut acc, ymn, -f_add);
                    if line_from == 0 {
                        // The slack constant shifts both flow balances and
                        // the forward thermal limit.
                        let ylp = self.y_line(AuxFamily::LamPFrom, ti, l, mi)?;
                        let ylq = self.y_line(AuxFamily::LamQFrom, ti, l, mi)?;
                        push_term(&mut acc, ylp, -a);
                        push_term(&mut acc, ylq, -e);
                        push_term(&mut acc, ymx, a);
                    }
                }
                if line_from == 0 {
                    // The cone halves of a slack-incident line carry the
                    // constant W as well.
                    push_term(&mut acc, self.ix.gamma[ti][l], -0.5);
                    push_term(&mut acc, self.ix.eta_c[ti][l], 0.5);
                }
            }
        }
        for (k, bid) in self.case.demand_bids.iter().enumerate() {
            push_term(&mut acc, self.ix.phi_d_p_max[k], -bid.p_max / s);
            push_term(&mut acc, self.ix.phi_d_p_min[k], bid.p_min / s);
            push_term(&mut acc, self.ix.phi_d_q_max[k], -bid.q_max / s);
            push_term(&mut acc, self.ix.phi_d_q_min[k], bid.q_min / s);
        }
        for (k, offer) in self.case.gen_offers.iter().enumerate() {
            push_term(&mut acc, self.ix.phi_g_p_max[k], -offer.p_max / s);
            push_term(&mut acc, self.ix.phi_g_p_min[k], offer.p_min / s);
            push_term(&mut acc, self.ix.phi_g_q_max[k], -offer.q_max / s);
            push_term(&mut acc, self.ix.phi_g_q_min[k], offer.q_min / s);
        }

        self.ix.row_strong = self.prog.add_eq("strong_duality".to_string(), terms(acc), 0.0);
        Ok(())
    }

    /// Linear expression of the operator's merchandising revenue: what the
    /// market pays the grid, `-sum(pi p) - c_p0 p0 - c_q0 q0`, in program
    /// money units.
    ///
    /// The nodal term is bilinear as written, so it is replaced through the
    /// settlement identity: each node's revenue equals scarcity rents plus
    /// price-weighted allocations plus the fixed-load payment (see
    /// [`verify_lemma1`]). Every replacement term is linear.
    pub fn substitute_merchandising(&self) -> Vec<(usize, f64)> {
        let s = POWER_SCALE;
        let nn = self.case.num_nodes();
        let times = self.case.times();
        let t2i: BTreeMap<usize, usize> =
            times.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let mut acc = BTreeMap::new();
        for (ti, &t) in times.iter().enumerate() {
            let tp = *self.case.trade_price(t).expect("validated period");
            for n in 1..nn {
                let d_total: f64 = self
                    .case
                    .fixed_loads
                    .iter()
                    .filter(|f| f.node == n && f.t == t)
                    .map(|f| f.d)
                    .sum();
                push_term(&mut acc, self.ix.pi_p[ti][n - 1], d_total / s);
            }
            push_term(&mut acc, self.ix.primal.p[ti][0], -tp.c_p0);
            push_term(&mut acc, self.ix.primal.q[ti][0], -tp.c_q0);
        }
        for (k, bid) in self.case.demand_bids.iter().enumerate() {
            let tp = *self.case.trade_price(bid.t).expect("validated period");
            let _ = t2i;
            push_term(&mut acc, self.ix.phi_d_p_max[k], -bid.p_max / s);
            push_term(&mut acc, self.ix.phi_d_p_min[k], bid.p_min / s);
            push_term(&mut acc, self.ix.primal.d_p[k], bid.price + tp.c_up - tp.c_down);
        }
        for (k, offer) in self.case.gen_offers.iter().enumerate() {
            let tp = *self.case.trade_price(offer.t).expect("validated period");
            push_term(&mut acc, self.ix.phi_g_p_max[k], -offer.p_max / s);
            push_term(&mut acc, self.ix.phi_g_p_min[k], offer.p_min / s);
            push_term(&mut acc, self.ix.primal.g_p[k], -(offer.price + tp.c_up - tp.c_down));
        }
        terms(acc)
    }

    /// Planner-side constraints: pick one option per line, recover costs
    /// from merchandising plus the charge, respect the budget, and only
    /// reinforce below a reinforced parent when the case demands it.
    pub fn build_upper_level(&mut self) -> Result<(), ReformError> {
        let s = POWER_SCALE;

        let mut acc: BTreeMap<usize, f64> = self.substitute_merchandising().into_iter().collect();
        push_term(&mut acc, self.ix.tau, self.base / s);
        for l in 0..self.case.lines.len() {
            for mi in 0..self.params[l].len() {
                let cost = self.params[l][mi].total_cost() / s;
                if cost != 0.0 {
                    push_term(&mut acc, self.ix.u[l][mi], -cost);
                }
            }
        }
        self.ix.row_revenue = self.prog.add_ge(
            "revenue_adequacy".to_string(),
            terms(acc),
            self.case.k_op / s,
        );

        for (l, line) in self.case.lines.iter().enumerate() {
            let row = self.prog.add_eq(
                format!("pick_one[{},{}]", line.from, line.to),
                self.ix.u[l].iter().map(|&c| (c, 1.0)).collect(),
                1.0,
            );
            self.ix.row_onehot.push(row);
        }

        if self.case.k_tot.is_finite() {
            let mut acc = BTreeMap::new();
            for l in 0..self.case.lines.len() {
                for mi in 0..self.params[l].len() {
                    let cost = self.params[l][mi].total_cost() / s;
                    if cost != 0.0 {
                        push_term(&mut acc, self.ix.u[l][mi], cost);
                    }
                }
            }
            self.ix.row_budget =
                Some(self.prog.add_le("budget".to_string(), terms(acc), self.case.k_tot / s));
        }

        if self.case.chain_constraint {
            // Skipping the null option downstream forces skipping it on
            // every line toward the root.
            for l in 0..self.case.lines.len() {
                let (lf, lt) = (self.case.lines[l].from, self.case.lines[l].to);
                for hi in 0..self.paths[lf].len() {
                    let h = self.paths[lf][hi];
                    let (hf, ht) = (self.case.lines[h].from, self.case.lines[h].to);
                    let row = self.prog.add_le(
                        format!("chain[{lf},{lt}->{hf},{ht}]"),
                        vec![(self.ix.u[h][0], 1.0), (self.ix.u[l][0], -1.0)],
                        0.0,
                    );
                    self.ix.row_chain.push(row);
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> SingleLevelProblem {
        SingleLevelProblem {
            case: self.case,
            prog: self.prog,
            index: self.ix,
            aux: self.aux,
            big_m: self.big_m,
            params: self.params,
            charging_base: self.base,
        }
    }
}

/// Build the complete single-level program for `case`.
pub fn assemble_single_level(case: &NetworkCase) -> Result<SingleLevelProblem, ReformError> {
    let mut b = SingleLevelBuilder::new(case)?;
    b.build_primal_block()?;
    b.build_dual_block()?;
    b.build_strong_duality()?;
    b.build_upper_level()?;
    Ok(b.finish())
}

/// Volume the uniform charge applies to: fixed loads plus the offered
/// capacity of flexible demand and generation, summed over the horizon, kWh.
pub fn charging_base(case: &NetworkCase) -> f64 {
    let loads: f64 = case.fixed_loads.iter().map(|f| f.d).sum();
    let bids: f64 = case.demand_bids.iter().map(|b| b.p_max).sum();
    let gens: f64 = case.gen_offers.iter().map(|g| g.p_max).sum();
    loads + bids + gens
}

impl SingleLevelProblem {
    /// Bounds overrides pinning the option indicators to `assignment`, for
    /// solving the program at a fixed plan.
    pub fn fix_assignment(&self, assignment: &[usize]) -> Result<Vec<(usize, f64, f64)>, ReformError> {
        if assignment.len() != self.case.lines.len() {
            return Err(ReformError::BadAssignment {
                expected: self.case.lines.len(),
                got: assignment.len(),
            });
        }
        let mut out = Vec::new();
        for (l, &mi) in assignment.iter().enumerate() {
            if mi >= self.index.u[l].len() {
                let line = &self.case.lines[l];
                return Err(ReformError::UnknownOption {
                    from: line.from,
                    to: line.to,
                    index: mi,
                });
            }
            for (j, &col) in self.index.u[l].iter().enumerate() {
                let v = if j == mi { 1.0 } else { 0.0 };
                out.push((col, v, v));
            }
        }
        Ok(out)
    }

    /// Chosen option per line, read as the largest indicator.
    pub fn read_assignment(&self, x: &[f64]) -> Vec<usize> {
        self.index
            .u
            .iter()
            .map(|cols| {
                cols.iter()
                    .enumerate()
                    .max_by(|a, b| x[*a.1].total_cmp(&x[*b.1]))
                    .map(|(mi, _)| mi)
                    .unwrap_or(0)
            })
            .collect()
    }

    /// The uniform charge at a solution, p/kWh.
    pub fn tau_of(&self, x: &[f64]) -> f64 {
        x[self.index.tau]
    }

    /// Planner objective in pence: cleared surplus net of tariff burden and
    /// investment. The sign and scale undo the minimization form.
    pub fn upper_objective_pence(min_obj: f64) -> f64 {
        -min_obj * POWER_SCALE
    }

    /// Total cost of an assignment, pence.
    pub fn investment_cost(&self, assignment: &[usize]) -> f64 {
        assignment
            .iter()
            .enumerate()
            .map(|(l, &mi)| self.params[l][mi].total_cost())
            .sum()
    }

    /// Re-check the assumed price caps at a solution. Returns one message
    /// per product whose multiplied quantity reached or escaped its assumed
    /// range; an empty result certifies the caps were inactive.
    pub fn big_m_audit(&self, x: &[f64], tol: f64) -> Vec<String> {
        let mut out = Vec::new();
        for (key, e) in self.aux.iter() {
            if !key.family.is_price_capped() {
                continue;
            }
            let v = x[e.x];
            let slack = tol * (1.0 + e.hi.abs().max(e.lo.abs()));
            if v > e.hi - slack || v < e.lo + slack && e.lo != 0.0 {
                out.push(format!(
                    "{} holds {:.6e}, near its assumed range [{:.3e}, {:.3e}]",
                    key.label(),
                    v,
                    e.lo,
                    e.hi
                ));
            }
        }
        out
    }
}

/// Per-node residuals of the settlement identity: nodal revenue equals
/// scarcity rents plus price-weighted allocations plus fixed-load payments.
#[derive(Debug, Clone)]
pub struct Lemma1Report {
    /// Relative residual per `[time][node-1]`.
    pub residuals: Vec<Vec<f64>>,
    pub max_residual: f64,
}

impl Lemma1Report {
    pub fn pass(&self, tol: f64) -> bool {
        self.max_residual <= tol
    }
}

/// Check the identity that justifies the linear revenue-adequacy row: at a
/// cleared optimum, `pi_n p_n` decomposes into bound rents and
/// price-weighted quantities, all in natural units.
///
/// This is the anti-regression oracle for [`SingleLevelBuilder::substitute_merchandising`]:
/// if the market formulation drifts, the residuals blow up here before the
/// planner silently miscounts revenue.
pub fn verify_lemma1(prob: &MarketProblem, sol: &MarketSolution) -> Lemma1Report {
    let case = &prob.case;
    let mut residuals = Vec::new();
    let mut worst: f64 = 0.0;
    for (ti, &t) in prob.index.times.iter().enumerate() {
        let tp = case.trade_price(t).expect("validated period");
        let mut per = Vec::new();
        for n in 1..case.num_nodes() {
            let d_total: f64 = case
                .fixed_loads
                .iter()
                .filter(|f| f.node == n && f.t == t)
                .map(|f| f.d)
                .sum();
            let lhs = sol.pi_p[ti][n - 1] * sol.p[ti][n];
            let mut rhs = -sol.pi_p[ti][n - 1] * d_total;
            for (k, offer) in case.gen_offers.iter().enumerate() {
                if offer.node == n && offer.t == t {
                    rhs += sol.phi_g_p_max[k] * offer.p_max - sol.phi_g_p_min[k] * offer.p_min
                        + (offer.price + tp.c_up - tp.c_down) * sol.g_p[k];
                }
            }
            for (k, bid) in case.demand_bids.iter().enumerate() {
                if bid.node == n && bid.t == t {
                    rhs -= -sol.phi_d_p_max[k] * bid.p_max
                        + sol.phi_d_p_min[k] * bid.p_min
                        + (bid.price + tp.c_up - tp.c_down) * sol.d_p[k];
                }
            }
            let r = (lhs - rhs).abs() / 1.0_f64.max(lhs.abs());
            per.push(r);
            worst = worst.max(r);
        }
        residuals.push(per);
    }
    Lemma1Report { residuals, max_residual: worst }
}

/// Scatter a cleared market solution into the single-level variable space:
/// indicators from the market's assignment, the given charge, primal and
/// dual values rescaled to program units, and products of what they tie.
///
/// Useful as a white-box diagnostic: at an optimal market solution and a
/// revenue-adequate charge the embedded point satisfies every single-level
/// constraint, so a material violation names the row that is miswired.
pub fn embed_solution(
    slp: &SingleLevelProblem,
    market: &MarketProblem,
    sol: &MarketSolution,
    tau: f64,
) -> Vec<f64> {
    let s = POWER_SCALE;
    let ix = &slp.index;
    let mut x = vec![0.0; slp.prog.var_names.len()];
    for (l, &mi) in market.assignment.iter().enumerate() {
        x[ix.u[l][mi]] = 1.0;
    }
    x[ix.tau] = tau;
    for k in 0..sol.d_p.len() {
        x[ix.primal.d_p[k]] = sol.d_p[k] / s;
        x[ix.primal.d_q[k]] = sol.d_q[k] / s;
        x[ix.phi_d_p_max[k]] = sol.phi_d_p_max[k];
        x[ix.phi_d_p_min[k]] = sol.phi_d_p_min[k];
        x[ix.phi_d_q_max[k]] = sol.phi_d_q_max[k];
        x[ix.phi_d_q_min[k]] = sol.phi_d_q_min[k];
    }
    for k in 0..sol.g_p.len() {
        x[ix.primal.g_p[k]] = sol.g_p[k] / s;
        x[ix.primal.g_q[k]] = sol.g_q[k] / s;
        x[ix.phi_g_p_max[k]] = sol.phi_g_p_max[k];
        x[ix.phi_g_p_min[k]] = sol.phi_g_p_min[k];
        x[ix.phi_g_q_max[k]] = sol.phi_g_q_max[k];
        x[ix.phi_g_q_min[k]] = sol.phi_g_q_min[k];
    }
    let nn = slp.case.num_nodes();
    for ti in 0..ix.primal.times.len() {
        for n in 0..nn {
            x[ix.primal.p[ti][n]] = sol.p[ti][n] / s;
            x[ix.primal.q[ti][n]] = sol.q[ti][n] / s;
            x[ix.lam_p[ti][n]] = sol.lam_p[ti][n];
            x[ix.lam_q[ti][n]] = sol.lam_q[ti][n];
        }
        for n in 1..nn {
            x[ix.primal.r_up[ti][n - 1]] = sol.r_up[ti][n - 1] / s;
            x[ix.primal.r_down[ti][n - 1]] = sol.r_down[ti][n - 1] / s;
            x[ix.primal.w[ti][n - 1]] = sol.w[ti][n - 1];
            x[ix.pi_p[ti][n - 1]] = sol.pi_p[ti][n - 1];
            x[ix.pi_q[ti][n - 1]] = sol.pi_q[ti][n - 1];
            x[ix.beta[ti][n - 1]] = sol.beta[ti][n - 1] / s;
            x[ix.chi_min[ti][n - 1]] = sol.chi_min[ti][n - 1] / s;
            x[ix.chi_max[ti][n - 1]] = sol.chi_max[ti][n - 1] / s;
            x[ix.rho_up[ti][n - 1]] = sol.rho_up[ti][n - 1];
            x[ix.rho_down[ti][n - 1]] = sol.rho_down[ti][n - 1];
        }
        for (l, line) in slp.case.lines.iter().enumerate() {
            x[ix.primal.wp_f[ti][l]] = sol.wp_f[ti][l];
            x[ix.primal.wp_r[ti][l]] = sol.wp_r[ti][l];
            x[ix.primal.wq_f[ti][l]] = sol.wq_f[ti][l];
            x[ix.primal.wq_r[ti][l]] = sol.wq_r[ti][l];
            let wi = sol.w_at(ti, line.from);
            let wj = sol.w_at(ti, line.to);
            x[ix.primal.soc_t[ti][l]] = 0.5 * (wi + wj);
            x[ix.primal.soc_z[ti][l]] = 0.5 * (wi - wj);
            x[ix.mu_max[ti][l]] = sol.mu_max[ti][l];
            x[ix.mu_min[ti][l]] = sol.mu_min[ti][l];
            x[ix.eps_p[ti][l]] = sol.eps_p[ti][l] / s;
            x[ix.eps_q[ti][l]] = sol.eps_q[ti][l] / s;
            x[ix.gamma[ti][l]] = sol.gamma[ti][l] / s;
            x[ix.eta_a[ti][l]] = sol.eta_a[ti][l] / s;
            x[ix.eta_b[ti][l]] = sol.eta_b[ti][l] / s;
            x[ix.eta_c[ti][l]] = sol.eta_c[ti][l] / s;
        }
    }
    for (_, e) in slp.aux.iter() {
        x[e.y] = x[e.u] * x[e.x];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases::{surrogate_5bus, Surrogate5Config};
    use crate::conic::bnb::solve_mip_with_eval;
    use crate::conic::{solver_for, Backend, SolveOptions, SolveStatus};
    use crate::market::{build_lower_level, solve_market};
    use crate::network::{ExpansionOption, Line, Node, TradePrices};

    fn tariff_case(steps: &[f64]) -> NetworkCase {
        surrogate_5bus(Surrogate5Config::tariff_study(steps))
    }

    fn clear(case: &NetworkCase, u: &[usize]) -> (MarketProblem, MarketSolution) {
        let prob = build_lower_level(case, u).unwrap();
        let solver = solver_for(Backend::Clarabel);
        let sol = solve_market(&prob, solver.as_ref(), &SolveOptions::default()).unwrap();
        (prob, sol)
    }

    /// Merchandising revenue of a cleared market, pence.
    fn merchandising(prob: &MarketProblem, sol: &MarketSolution) -> f64 {
        let case = &prob.case;
        let mut ms = 0.0;
        for (ti, &t) in prob.index.times.iter().enumerate() {
            let tp = case.trade_price(t).unwrap();
            for n in 1..case.num_nodes() {
                ms -= sol.pi_p[ti][n - 1] * sol.p[ti][n];
            }
            ms -= tp.c_p0 * sol.p[ti][0] + tp.c_q0 * sol.q[ti][0];
        }
        ms
    }

    /// Smallest charge that closes the revenue gap for a cleared market.
    fn tau_star(prob: &MarketProblem, sol: &MarketSolution) -> f64 {
        let case = &prob.case;
        let inv: f64 = prob.params.iter().map(|p| p.total_cost()).sum();
        let gap = case.k_op + inv - merchandising(prob, sol);
        (gap / charging_base(case)).max(0.0)
    }

    #[test]
    fn big_m_table_brackets_are_ordered() {
        let case = tariff_case(&[0.5, 1.0]);
        let bm = big_m_table(&case).unwrap();
        assert_eq!(bm.m1, PRICE_CAP);
        for ti in 0..bm.m2.len() {
            for j in 0..bm.m2[ti].len() {
                assert!(bm.m2[ti][j] <= bm.m3[ti][j]);
                assert!(bm.m4[ti][j] <= bm.m5[ti][j]);
            }
        }
        // No generators: injections can only be withdrawals. Node 1 carries
        // a 100 kW fixed load and a 100 kW bid.
        assert!((bm.m2[0][0] - (-0.2)).abs() < 1e-12);
        assert!((bm.m3[0][0] - (-0.1)).abs() < 1e-12);
        for (l, line) in case.lines.iter().enumerate() {
            for (mi, opt) in line.expansions.iter().enumerate() {
                assert!(bm.m6[l][mi] > 0.0);
                let ep = expanded_params(line, opt.m).unwrap();
                let (a, e) = (ep.a / POWER_SCALE, ep.e / POWER_SCALE);
                let want = PRICE_CAP * (a * a + e * e) / a.min(e);
                assert!((bm.m6[l][mi] - want).abs() < 1e-9 * want);
            }
        }
    }

    #[test]
    fn program_shape_and_product_registry() {
        let case = tariff_case(&[0.5]);
        let slp = assemble_single_level(&case).unwrap();
        assert_eq!(slp.prog.binaries.len(), 8, "two options on each of four lines");
        assert_eq!(slp.prog.onehot_groups.len(), 4);
        assert_eq!(slp.index.row_onehot.len(), 4);
        assert!(slp.index.row_budget.is_none(), "no budget cap in this case");
        assert!(slp.index.row_chain.is_empty());
        // Eleven line products on the root line (its W is constant), twelve
        // elsewhere, plus injection and cap products for every fed node.
        let line_products = 11 + 12 * 3;
        let node_products = 3 * (4 + 3 + 2 + 1);
        assert_eq!(slp.aux.len(), 2 * (line_products + node_products));
        for (_, e) in slp.aux.iter() {
            assert!(e.lo <= e.hi);
            assert_eq!(e.rows.len(), 4);
        }
    }

    #[test]
    fn market_optimum_satisfies_every_row() {
        let case = tariff_case(&[0.5, 1.0]);
        let slp = assemble_single_level(&case).unwrap();
        for u in [vec![0, 0, 0, 0], vec![1, 0, 0, 0], vec![2, 1, 0, 0]] {
            let (prob, sol) = clear(&case, &u);
            let tau = tau_star(&prob, &sol);
            let x = embed_solution(&slp, &prob, &sol, tau);
            let viol = slp.prog.max_violation(&x);
            assert!(viol < 2e-5, "assignment {u:?}: worst violation {viol:.3e}");
        }
    }

    #[test]
    fn fixed_assignment_round_trip_matches_clearing() {
        let case = tariff_case(&[0.5, 1.0]);
        let slp = assemble_single_level(&case).unwrap();
        let solver = solver_for(Backend::Clarabel);
        let opts = SolveOptions::default();
        for u in [vec![0usize, 0, 0, 0], vec![1, 0, 0, 0], vec![2, 1, 0, 0]] {
            let (prob, sol) = clear(&case, &u);
            let tau = tau_star(&prob, &sol);
            let inv = slp.investment_cost(&u);
            let want = sol.objective - tau * slp.charging_base - inv;

            let bounds = slp.fix_assignment(&u).unwrap();
            let raw = solver.solve_with_bounds(&slp.prog, &bounds, &opts).unwrap();
            assert_eq!(raw.status, SolveStatus::Optimal, "assignment {u:?}");
            assert_eq!(slp.read_assignment(&raw.x), u);
            let got = SingleLevelProblem::upper_objective_pence(raw.obj);
            // The clearing-plus-recalibration point is feasible here, so the
            // single level can never land materially below it. It can land
            // above: the strong-duality knife edge means interior-point
            // feasibility slack leaks straight into the recovered revenue,
            // so the charge undershoots by up to the solver tolerance times
            // the big-M scale. Incumbent evaluation goes through the
            // clearing oracle for exactly this reason.
            assert!(
                got >= want - 1e-5 * want.abs().max(1.0),
                "assignment {u:?}: {got} below oracle {want}"
            );
            assert!(
                got <= want + 3e-3 * want.abs().max(1.0),
                "assignment {u:?}: {got} leaks past oracle {want}"
            );
            assert!(slp.tau_of(&raw.x) <= tau + 1e-4, "assignment {u:?}");
            for k in 0..sol.d_p.len() {
                let got_d = raw.x[slp.index.primal.d_p[k]] * POWER_SCALE;
                assert!(
                    (got_d - sol.d_p[k]).abs() < 1e-3,
                    "assignment {u:?}, bid {k}: {got_d} vs {}",
                    sol.d_p[k]
                );
            }
        }
    }

    #[test]
    fn settlement_identity_holds_at_optimum() {
        for c_up in [0.0, 5.0] {
            let case = surrogate_5bus(Surrogate5Config::reserve_study(c_up));
            let (prob, sol) = clear(&case, &[0, 0, 0, 0]);
            let report = verify_lemma1(&prob, &sol);
            assert!(
                report.pass(1e-6),
                "c_up {c_up}: worst residual {:.3e}",
                report.max_residual
            );
        }
    }

    #[test]
    fn strong_duality_row_is_affine_in_rents() {
        let case = tariff_case(&[0.5]);
        let slp = assemble_single_level(&case).unwrap();
        let row = &slp.prog.rows[slp.index.row_strong];
        let eval = |x: &[f64]| -> f64 {
            row.terms.iter().map(|&(c, w)| w * x[c]).sum::<f64>() - row.rhs
        };
        let mut x = vec![0.0; slp.prog.var_names.len()];
        let before = eval(&x);
        let k = 2;
        x[slp.index.phi_d_p_max[k]] += 1.0;
        let after = eval(&x);
        // One unit of demand scarcity rent moves the dual bound by the bid
        // size, nothing else.
        let want = -case.demand_bids[k].p_max / POWER_SCALE;
        assert!(((after - before) - want).abs() < 1e-12);
    }

    #[test]
    fn empty_market_reduces_to_identity() {
        let case = NetworkCase {
            name: "empty".into(),
            base_kv: 12.6,
            base_kva: 1000.0,
            nodes: vec![
                Node { id: 0, v_min: 1.0, v_max: 1.0 },
                Node { id: 1, v_min: 0.8, v_max: 1.2 },
            ],
            lines: vec![Line {
                from: 0,
                to: 1,
                a0: 40000.0,
                e0: 30000.0,
                f_max: 1000.0,
                f_min: 1000.0,
                expansions: vec![ExpansionOption { m: 0.0, k_fix: 0.0, k_var: 0.0 }],
            }],
            demand_bids: vec![],
            gen_offers: vec![],
            fixed_loads: vec![],
            trade_prices: vec![TradePrices { t: 0, c_p0: 10.0, c_q0: 0.0, c_up: 0.0, c_down: 0.0 }],
            k_op: 0.0,
            k_tot: f64::INFINITY,
            chain_constraint: false,
            areas: vec![],
        };
        let slp = assemble_single_level(&case).unwrap();
        let solver = solver_for(Backend::Clarabel);
        let bounds = slp.fix_assignment(&[0]).unwrap();
        let raw = solver.solve_with_bounds(&slp.prog, &bounds, &SolveOptions::default()).unwrap();
        assert_eq!(raw.status, SolveStatus::Optimal);
        let pence = SingleLevelProblem::upper_objective_pence(raw.obj);
        assert!(pence.abs() < 1e-3, "idle planner objective {pence:.3e}p");
        let import_kw = raw.x[slp.index.primal.p[0][0]].abs() * POWER_SCALE;
        assert!(import_kw < 1e-4, "no import, got {import_kw:.3e} kW");
    }

    #[test]
    fn chain_rows_force_upstream_expansion() {
        let mut case = tariff_case(&[0.5]);
        case.chain_constraint = true;
        let slp = assemble_single_level(&case).unwrap();
        // Path lengths of the from-nodes: 0, 1, 2, 3.
        assert_eq!(slp.index.row_chain.len(), 6);
        let solver = solver_for(Backend::Clarabel);
        let opts = SolveOptions::default();

        let bounds = slp.fix_assignment(&[0, 1, 0, 0]).unwrap();
        let raw = solver.solve_with_bounds(&slp.prog, &bounds, &opts).unwrap();
        assert!(
            raw.status != SolveStatus::Optimal,
            "skipping the parent while reinforcing the child must be cut off, got {:?}",
            raw.status
        );

        let bounds = slp.fix_assignment(&[1, 1, 0, 0]).unwrap();
        let raw = solver.solve_with_bounds(&slp.prog, &bounds, &opts).unwrap();
        assert_eq!(raw.status, SolveStatus::Optimal);
    }

    #[test]
    fn planner_matches_exhaustive_enumeration() {
        let case = tariff_case(&[0.5]);
        let slp = assemble_single_level(&case).unwrap();
        let solver = solver_for(Backend::Clarabel);
        let opts = SolveOptions::default();
        let oracle = |u: &[usize]| {
            let (prob, sol) = clear(&case, u);
            let tau = tau_star(&prob, &sol);
            (sol.objective - tau * slp.charging_base - slp.investment_cost(u), tau)
        };
        let eval = |xi: &[f64]| {
            let (pence, _) = oracle(&slp.read_assignment(xi));
            Ok(Some(-pence / POWER_SCALE))
        };
        let mip =
            solve_mip_with_eval(&slp.prog, solver.as_ref(), &opts, Some(&eval)).unwrap();
        let fixed = mip.fixed.as_ref().expect("incumbent");
        let assign = slp.read_assignment(&fixed.x);
        let got = SingleLevelProblem::upper_objective_pence(mip.obj);

        let mut best = f64::NEG_INFINITY;
        let mut best_u = vec![0; 4];
        for bits in 0..16u32 {
            let u: Vec<usize> = (0..4).map(|l| ((bits >> l) & 1) as usize).collect();
            let (obj, _) = oracle(&u);
            if obj > best {
                best = obj;
                best_u = u;
            }
        }
        assert_eq!(assign, best_u, "planner picked {assign:?}");
        let rel = (got - best).abs() / best.abs().max(1.0);
        assert!(rel < 1e-6, "objective {got} vs enumerated {best}, rel {rel:.3e}");
        // Reinforcing the first line beats the congestion it relieves but
        // leaves a revenue gap, so a small positive charge appears.
        assert_eq!(assign, vec![1, 0, 0, 0]);
        let (_, tau) = oracle(&assign);
        assert!(tau > 0.012 && tau < 0.016, "tau {tau}");
        assert!(slp.big_m_audit(&fixed.x, 1e-6).is_empty());
        for (key, e) in slp.aux.iter() {
            let err = (fixed.x[e.y] - fixed.x[e.u] * fixed.x[e.x]).abs();
            assert!(err < 1e-5, "{}: product defect {err:.3e}", key.label());
        }
    }
}
