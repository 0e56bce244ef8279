//! Solver-agnostic conic programs and the solver contract.
//!
//! Everything downstream of the model builders speaks one dialect: a linear
//! objective over named columns, `=` / `<=` rows, optional finite variable
//! bounds, second-order cone blocks over column tuples, and integrality marks
//! on designated columns. Builders that need a cone over an affine expression
//! introduce linked auxiliary columns, so backends never see affine cones.
//!
//! The solver itself is a contract, not an implementation: [`ConicSolver`] is
//! implemented both by the bundled dense interior-point method
//! ([`native::NativeSolver`], adequate for desk-scale problems) and by an
//! adapter over the Clarabel sparse conic solver ([`clarabel_backend::ClarabelSolver`],
//! the default). Branch and bound ([`bnb`]) drives either through the trait.
//!
//! Dual conventions (used verbatim by the market and reformulation layers):
//! with the Lagrangian `L = c.x + sum_r z_r (a_r.x - rhs_r)`, a `<=` row has
//! `z_r >= 0` and an `=` row has `z_r` free. For a cone block `(t, u1..uk)`
//! the reported block dual `w` lies in the cone itself and enters stationarity
//! as `-w` on the block columns.

pub mod bnb;
pub mod clarabel_backend;
pub mod native;

use std::fmt;
use thiserror::Error;

/// Row sense. `Ge` rows are normalized to `Le` at build time by the helpers,
/// so backends only ever see these two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Eq,
    Le,
}

/// One linear row `sum coeff * x[col] (=|<=) rhs`.
#[derive(Debug, Clone)]
pub struct Row {
    pub name: String,
    pub kind: RowKind,
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

/// Standard-form conic program: minimize `c.x + c0`.
#[derive(Debug, Clone, Default)]
pub struct ConicProgram {
    pub var_names: Vec<String>,
    /// Objective coefficients, one per column.
    pub c: Vec<f64>,
    /// Objective constant (from parameter substitution, e.g. fixed slack voltage).
    pub c0: f64,
    pub rows: Vec<Row>,
    /// Per-column bounds. Model constraints are rows so their duals are
    /// addressable; bounds exist for binaries and branch-and-bound fixings.
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Second-order cone blocks, each a column tuple `[t, u1, .., uk]`
    /// meaning `||(u1..uk)|| <= t`.
    pub socs: Vec<Vec<usize>>,
    /// Columns restricted to {0, 1}.
    pub binaries: Vec<usize>,
    /// One-hot row groups (columns summing to one) for constraint branching.
    pub onehot_groups: Vec<Vec<usize>>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.c.len()
    }

    pub fn add_var(&mut self, name: impl Into<String>, lo: f64, hi: f64, cost: f64) -> usize {
        let id = self.c.len();
        self.var_names.push(name.into());
        self.c.push(cost);
        self.lo.push(lo);
        self.hi.push(hi);
        id
    }

    /// Free continuous column with zero objective.
    pub fn free_var(&mut self, name: impl Into<String>) -> usize {
        self.add_var(name, f64::NEG_INFINITY, f64::INFINITY, 0.0)
    }

    /// Nonnegative continuous column with zero objective.
    pub fn nonneg_var(&mut self, name: impl Into<String>) -> usize {
        self.add_var(name, 0.0, f64::INFINITY, 0.0)
    }

    pub fn add_row(
        &mut self,
        name: impl Into<String>,
        kind: RowKind,
        terms: Vec<(usize, f64)>,
        rhs: f64,
    ) -> usize {
        let id = self.rows.len();
        self.rows.push(Row {
            name: name.into(),
            kind,
            terms,
            rhs,
        });
        id
    }

    pub fn add_eq(&mut self, name: impl Into<String>, terms: Vec<(usize, f64)>, rhs: f64) -> usize {
        self.add_row(name, RowKind::Eq, terms, rhs)
    }

    pub fn add_le(&mut self, name: impl Into<String>, terms: Vec<(usize, f64)>, rhs: f64) -> usize {
        self.add_row(name, RowKind::Le, terms, rhs)
    }

    /// `sum terms >= rhs`, stored negated as a `<=` row. The reported dual of
    /// the stored row is the multiplier of the `>=` form, which is what the
    /// dual-extraction conventions in the market layer assume.
    pub fn add_ge(&mut self, name: impl Into<String>, terms: Vec<(usize, f64)>, rhs: f64) -> usize {
        let negated = terms.into_iter().map(|(c, v)| (c, -v)).collect();
        self.add_row(name, RowKind::Le, negated, -rhs)
    }

    pub fn add_soc(&mut self, cols: Vec<usize>) -> usize {
        assert!(cols.len() >= 2, "cone block needs a bound column and at least one member");
        self.socs.push(cols);
        self.socs.len() - 1
    }

    pub fn mark_binary(&mut self, col: usize) {
        self.lo[col] = 0.0;
        self.hi[col] = 1.0;
        self.binaries.push(col);
    }

    /// Objective value of a candidate point, including the constant.
    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.c0 + self.c.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }

    /// Worst violation over rows, bounds and cone blocks. Used by tests and
    /// by the big-M audit; not on the solve hot path.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for row in &self.rows {
            let lhs: f64 = row.terms.iter().map(|&(c, v)| v * x[c]).sum();
            let viol = match row.kind {
                RowKind::Eq => (lhs - row.rhs).abs(),
                RowKind::Le => (lhs - row.rhs).max(0.0),
            };
            worst = worst.max(viol);
        }
        for (i, &v) in x.iter().enumerate() {
            if self.lo[i].is_finite() {
                worst = worst.max(self.lo[i] - v);
            }
            if self.hi[i].is_finite() {
                worst = worst.max(v - self.hi[i]);
            }
        }
        for soc in &self.socs {
            let t = x[soc[0]];
            let norm = soc[1..].iter().map(|&c| x[c] * x[c]).sum::<f64>().sqrt();
            worst = worst.max(norm - t);
        }
        worst
    }

    /// Emit the continuous relaxation (plus integrality markers) in CPLEX LP
    /// text format, with cone blocks as quadratic rows, for cross-checking
    /// against external solvers. Column names survive verbatim.
    pub fn to_lp_text(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let nm = |i: usize| sanitize_lp_name(&self.var_names[i], i);
        out.push_str("\\ generated by gridplan; cones appear as quadratic rows\n");
        out.push_str("Minimize\n obj:");
        for (i, &ci) in self.c.iter().enumerate() {
            if ci != 0.0 {
                let _ = write!(out, " {} {}", fmt_signed(ci), nm(i));
            }
        }
        if self.c0 != 0.0 {
            let _ = write!(out, " {} objconst", fmt_signed(self.c0));
        }
        out.push_str("\nSubject To\n");
        for (r, row) in self.rows.iter().enumerate() {
            let _ = write!(out, " {}:", sanitize_lp_name(&row.name, r));
            for &(c, v) in &row.terms {
                let _ = write!(out, " {} {}", fmt_signed(v), nm(c));
            }
            let op = match row.kind {
                RowKind::Eq => "=",
                RowKind::Le => "<=",
            };
            let _ = writeln!(out, " {} {}", op, row.rhs);
        }
        for (k, soc) in self.socs.iter().enumerate() {
            let _ = write!(out, " cone{}: [", k);
            for (j, &c) in soc[1..].iter().enumerate() {
                let _ = write!(out, "{}{} ^2", if j == 0 { " " } else { " + " }, nm(c));
            }
            let _ = writeln!(out, " - {} ^2 ] <= 0", nm(soc[0]));
        }
        out.push_str("Bounds\n");
        for i in 0..self.num_vars() {
            let (lo, hi) = (self.lo[i], self.hi[i]);
            if lo.is_infinite() && hi.is_infinite() {
                let _ = writeln!(out, " {} free", nm(i));
            } else if lo.is_infinite() {
                let _ = writeln!(out, " -inf <= {} <= {}", nm(i), hi);
            } else if hi.is_infinite() {
                if lo != 0.0 {
                    let _ = writeln!(out, " {} >= {}", nm(i), lo);
                }
            } else {
                let _ = writeln!(out, " {} <= {} <= {}", lo, nm(i), hi);
            }
        }
        if self.c0 != 0.0 {
            out.push_str(" objconst = 1\n");
        }
        if !self.binaries.is_empty() {
            out.push_str("Binaries\n");
            for &b in &self.binaries {
                let _ = writeln!(out, " {}", nm(b));
            }
        }
        out.push_str("End\n");
        out
    }
}

fn fmt_signed(v: f64) -> String {
    if v >= 0.0 {
        format!("+ {}", v)
    } else {
        format!("- {}", -v)
    }
}

/// LP format forbids several leading characters and embedded operators;
/// paper-symbol tags like `pi_p[t0,n3]` become `pi_p.t0.n3`.
fn sanitize_lp_name(name: &str, fallback: usize) -> String {
    let cleaned: String = name
        .chars()
        .map(|ch| match ch {
            'a'..='z' | 'A'..='Z' | '0'..='9' | '_' | '.' => ch,
            _ => '.',
        })
        .collect();
    if cleaned.is_empty() || cleaned.starts_with(|c: char| c.is_ascii_digit() || c == '.') {
        format!("v{}_{}", fallback, cleaned.trim_matches('.'))
    } else {
        cleaned
    }
}

/// Outcome of a continuous solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolveStatus {
    Optimal,
    /// Primal infeasible with a certificate.
    Infeasible,
    /// Dual infeasible; the primal objective is unbounded below.
    Unbounded,
    /// Iteration or time limit hit before the tolerances were met.
    LimitReached,
    /// The iteration stalled; values are best-effort and must not be trusted
    /// for settlement.
    #[default]
    NumericalTrouble,
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::LimitReached => "limit-reached",
            SolveStatus::NumericalTrouble => "numerical-trouble",
        };
        f.write_str(s)
    }
}

/// Continuous solution with duals indexed by the program's own rows/columns.
#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    /// `c.x + c0` (meaningless unless status is Optimal or LimitReached).
    pub obj: f64,
    /// One multiplier per program row (see module docs for the sign rules).
    pub row_dual: Vec<f64>,
    /// Multipliers for finite lower/upper variable bounds, both nonnegative.
    pub bound_dual_lo: Vec<f64>,
    pub bound_dual_hi: Vec<f64>,
    /// Per cone block, same length as the block, lying in the cone.
    pub soc_dual: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Reported primal-dual relative gap at termination.
    pub rel_gap: f64,
}

/// Options shared by both backends and by branch and bound.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Relative MIP gap at which branch and bound stops.
    pub mip_gap: f64,
    /// Feasibility tolerance for continuous solves.
    pub feas_tol: f64,
    /// Relative duality-gap tolerance for continuous solves.
    pub gap_tol: f64,
    /// Wall-clock limit in seconds for a whole solve (0 = none).
    pub time_limit: f64,
    /// Worker threads for branch and bound node evaluation.
    pub threads: usize,
    /// Integrality rounding tolerance.
    pub int_tol: f64,
    pub max_iter: usize,
    pub verbose: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            mip_gap: 1e-8,
            feas_tol: 1e-9,
            gap_tol: 1e-9,
            time_limit: 0.0,
            threads: 1,
            int_tol: 1e-6,
            max_iter: 200,
            verbose: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("program is structurally empty (no variables)")]
    Empty,
    #[error("column {0} out of range")]
    BadColumn(usize),
    #[error("solver failed: {0}")]
    Backend(String),
}

/// The continuous-solver contract. `bounds_override` replaces `(lo, hi)` for
/// the listed columns, which is how branch and bound fixes binaries without
/// rebuilding the program.
pub trait ConicSolver: Sync {
    fn name(&self) -> &'static str;

    fn solve_with_bounds(
        &self,
        prog: &ConicProgram,
        bounds_override: &[(usize, f64, f64)],
        opts: &SolveOptions,
    ) -> Result<ConicSolution, SolverError>;

    fn solve(&self, prog: &ConicProgram, opts: &SolveOptions) -> Result<ConicSolution, SolverError> {
        self.solve_with_bounds(prog, &[], opts)
    }
}

/// Backend selection for CLI and tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Clarabel,
    Native,
}

impl std::str::FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "clarabel" => Ok(Backend::Clarabel),
            "native" => Ok(Backend::Native),
            other => Err(format!("unknown solver backend '{other}' (expected clarabel|native)")),
        }
    }
}

pub fn solver_for(backend: Backend) -> Box<dyn ConicSolver> {
    match backend {
        Backend::Clarabel => Box::new(clarabel_backend::ClarabelSolver),
        Backend::Native => Box::new(native::NativeSolver),
    }
}

/// Standard lowered form `min c.x  s.t.  A x + s = b`, `s` in
/// `Zero^eq x Nonneg^ineq x SOC...`, shared by both backends so they agree on
/// row ordering and dual mapping.
pub(crate) struct Lowered {
    pub n: usize,
    /// CSC matrix pieces for `A`.
    pub colptr: Vec<usize>,
    pub rowval: Vec<usize>,
    pub nzval: Vec<f64>,
    pub b: Vec<f64>,
    pub num_eq: usize,
    pub num_ineq: usize,
    /// SOC block dimensions, in order after the eq and ineq rows.
    pub soc_dims: Vec<usize>,
    /// Lowered row index of each program row.
    pub row_map: Vec<usize>,
    /// Lowered row index of each finite lower/upper bound (usize::MAX = none).
    pub lo_map: Vec<usize>,
    pub hi_map: Vec<usize>,
    /// First lowered row of each cone block.
    pub soc_start: Vec<usize>,
    /// Columns folded into the right-hand sides as constants.
    pub pinned: Vec<Option<f64>>,
}

pub(crate) fn lower(
    prog: &ConicProgram,
    bounds_override: &[(usize, f64, f64)],
) -> Result<Lowered, SolverError> {
    let n = prog.num_vars();
    if n == 0 {
        return Err(SolverError::Empty);
    }
    let mut lo = prog.lo.clone();
    let mut hi = prog.hi.clone();
    for &(col, l, h) in bounds_override {
        if col >= n {
            return Err(SolverError::BadColumn(col));
        }
        lo[col] = l;
        hi[col] = h;
    }

    // Columns pinned to a point (and not inside a cone block) are folded
    // into the right-hand sides instead of being left to the solver. A
    // pinned binary kept in the matrix retains interior-point bound slack,
    // and on a big-M row a 1e-9 deviation scales into a visible shift of
    // the product it gates, which objective pressure then exploits. As a
    // constant it cannot move. The column keeps its bound rows so the
    // reported solution still carries the pinned value.
    let mut in_cone = vec![false; n];
    for soc in &prog.socs {
        for &c in soc {
            in_cone[c] = true;
        }
    }
    let pinned: Vec<Option<f64>> = (0..n)
        .map(|c| (!in_cone[c] && lo[c].is_finite() && lo[c] == hi[c]).then(|| lo[c]))
        .collect();

    // Order: equality rows, inequality rows, bound rows, cone rows.
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut b = Vec::new();
    let mut row_map = vec![usize::MAX; prog.rows.len()];
    let mut next = 0usize;
    for (r, row) in prog.rows.iter().enumerate() {
        if row.kind == RowKind::Eq {
            let mut rhs = row.rhs;
            for &(c, v) in &row.terms {
                if c >= n {
                    return Err(SolverError::BadColumn(c));
                }
                match pinned[c] {
                    Some(val) => rhs -= v * val,
                    None => triplets.push((next, c, v)),
                }
            }
            b.push(rhs);
            row_map[r] = next;
            next += 1;
        }
    }
    let num_eq = next;
    for (r, row) in prog.rows.iter().enumerate() {
        if row.kind == RowKind::Le {
            let mut rhs = row.rhs;
            for &(c, v) in &row.terms {
                if c >= n {
                    return Err(SolverError::BadColumn(c));
                }
                match pinned[c] {
                    Some(val) => rhs -= v * val,
                    None => triplets.push((next, c, v)),
                }
            }
            b.push(rhs);
            row_map[r] = next;
            next += 1;
        }
    }
    let mut lo_map = vec![usize::MAX; n];
    let mut hi_map = vec![usize::MAX; n];
    for c in 0..n {
        if lo[c].is_finite() {
            // -x <= -lo
            triplets.push((next, c, -1.0));
            b.push(-lo[c]);
            lo_map[c] = next;
            next += 1;
        }
        if hi[c].is_finite() {
            triplets.push((next, c, 1.0));
            b.push(hi[c]);
            hi_map[c] = next;
            next += 1;
        }
    }
    let num_ineq = next - num_eq;
    let mut soc_start = Vec::with_capacity(prog.socs.len());
    let mut soc_dims = Vec::with_capacity(prog.socs.len());
    for soc in &prog.socs {
        soc_start.push(next);
        soc_dims.push(soc.len());
        for &c in soc {
            if c >= n {
                return Err(SolverError::BadColumn(c));
            }
            // s_row = 0 - (-x_c) = x_c, so the slack vector equals the block.
            triplets.push((next, c, -1.0));
            b.push(0.0);
            next += 1;
        }
    }

    // Triplets to CSC.
    let m = next;
    let mut count = vec![0usize; n];
    for &(_, c, _) in &triplets {
        count[c] += 1;
    }
    let mut colptr = vec![0usize; n + 1];
    for c in 0..n {
        colptr[c + 1] = colptr[c] + count[c];
    }
    let mut rowval = vec![0usize; triplets.len()];
    let mut nzval = vec![0f64; triplets.len()];
    let mut cursor = colptr.clone();
    // Triplets were produced row by row, so per-column row indices arrive
    // sorted, which CSC consumers require.
    for &(r, c, v) in &triplets {
        let k = cursor[c];
        rowval[k] = r;
        nzval[k] = v;
        cursor[c] += 1;
    }
    debug_assert_eq!(b.len(), m);

    Ok(Lowered {
        n,
        colptr,
        rowval,
        nzval,
        b,
        num_eq,
        num_ineq,
        soc_dims,
        row_map,
        lo_map,
        hi_map,
        soc_start,
        pinned,
    })
}

/// Split a lowered dual vector back into program-row / bound / cone duals.
pub(crate) fn scatter_duals(
    prog: &ConicProgram,
    low: &Lowered,
    z: &[f64],
    sol: &mut ConicSolution,
) {
    sol.row_dual = vec![0.0; prog.rows.len()];
    for (r, &lr) in low.row_map.iter().enumerate() {
        if lr != usize::MAX {
            sol.row_dual[r] = z[lr];
        }
    }
    sol.bound_dual_lo = vec![0.0; low.n];
    sol.bound_dual_hi = vec![0.0; low.n];
    for c in 0..low.n {
        if low.lo_map[c] != usize::MAX {
            sol.bound_dual_lo[c] = z[low.lo_map[c]];
        }
        if low.hi_map[c] != usize::MAX {
            sol.bound_dual_hi[c] = z[low.hi_map[c]];
        }
    }
    // Pinned columns were absent from the matrix, so the solver's bound
    // duals carry only the raw cost. Rebuild them from the stationarity
    // residual against the original rows so reduced costs survive the
    // folding: c_j + sum A_rj z_r + z_hi - z_lo = 0.
    if low.pinned.iter().any(Option::is_some) {
        let mut rho: Vec<f64> = (0..low.n)
            .map(|c| if low.pinned[c].is_some() { prog.c[c] } else { 0.0 })
            .collect();
        for (r, row) in prog.rows.iter().enumerate() {
            if low.row_map[r] == usize::MAX {
                continue;
            }
            let zr = z[low.row_map[r]];
            if zr == 0.0 {
                continue;
            }
            for &(c, v) in &row.terms {
                if low.pinned[c].is_some() {
                    rho[c] += v * zr;
                }
            }
        }
        for c in 0..low.n {
            if low.pinned[c].is_some() {
                sol.bound_dual_hi[c] = (-rho[c]).max(0.0);
                sol.bound_dual_lo[c] = rho[c].max(0.0);
            }
        }
    }
    sol.soc_dual = low
        .soc_start
        .iter()
        .zip(&low.soc_dims)
        .map(|(&start, &dim)| z[start..start + dim].to_vec())
        .collect();
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lower_orders_rows_eq_le_bounds_socs() {
        let mut p = ConicProgram::new();
        let x = p.add_var("x", 0.0, 2.0, 1.0);
        let y = p.free_var("y");
        p.add_le("cap", vec![(x, 1.0), (y, 1.0)], 4.0);
        p.add_eq("bal", vec![(x, 1.0), (y, -1.0)], 0.0);
        p.add_soc(vec![x, y]);
        let low = lower(&p, &[]).unwrap();
        assert_eq!(low.num_eq, 1);
        assert_eq!(low.row_map, vec![1, 0]); // eq row first
        assert_eq!(low.num_ineq, 3); // cap + two bounds on x
        assert_eq!(low.soc_start, vec![4]);
        assert_eq!(low.b.len(), 6);
    }

    #[test]
    fn ge_rows_store_negated() {
        let mut p = ConicProgram::new();
        let x = p.free_var("x");
        p.add_ge("floor", vec![(x, 2.0)], 6.0);
        assert_eq!(p.rows[0].kind, RowKind::Le);
        assert_eq!(p.rows[0].terms, vec![(x, -2.0)]);
        assert_eq!(p.rows[0].rhs, -6.0);
    }

    #[test]
    fn lp_text_contains_cone_and_binary_sections() {
        let mut p = ConicProgram::new();
        let t = p.nonneg_var("t");
        let x = p.free_var("w_ij_p[t0,l0]");
        let u = p.add_var("u[l0,m1]", 0.0, 1.0, 3.0);
        p.mark_binary(u);
        p.add_soc(vec![t, x]);
        p.add_eq("link", vec![(t, 1.0), (x, -0.5)], 0.5);
        let lp = p.to_lp_text();
        assert!(lp.contains("Binaries"));
        assert!(lp.contains("^2 ] <= 0"));
        assert!(lp.contains("w_ij_p.t0.l0"));
    }
}
