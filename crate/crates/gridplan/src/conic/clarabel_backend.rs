//! Default conic backend: thin adapter over the Clarabel interior-point
//! solver. The shared lowering produces the `A x + s = b` standard form, so
//! this module only translates matrix storage, cone tags, settings, and
//! status codes, then scatters duals back onto the program's rows.

use super::{
    lower, scatter_duals, ConicProgram, ConicSolution, ConicSolver, SolveOptions, SolveStatus,
    SolverError,
};
use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SecondOrderConeT,
    SolverStatus, SupportedConeT, ZeroConeT,
};

pub struct ClarabelSolver;

impl ConicSolver for ClarabelSolver {
    fn name(&self) -> &'static str {
        "clarabel"
    }

    fn solve_with_bounds(
        &self,
        prog: &ConicProgram,
        bounds_override: &[(usize, f64, f64)],
        opts: &SolveOptions,
    ) -> Result<ConicSolution, SolverError> {
        let low = lower(prog, bounds_override)?;
        let m = low.b.len();
        let n = low.n;

        let a = CscMatrix::new(m, n, low.colptr.clone(), low.rowval.clone(), low.nzval.clone());
        let p = CscMatrix::<f64>::zeros((n, n));

        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
        if low.num_eq > 0 {
            cones.push(ZeroConeT(low.num_eq));
        }
        if low.num_ineq > 0 {
            cones.push(NonnegativeConeT(low.num_ineq));
        }
        for &d in &low.soc_dims {
            cones.push(SecondOrderConeT(d));
        }

        let mut builder = DefaultSettingsBuilder::default();
        builder
            .verbose(opts.verbose)
            .max_iter(opts.max_iter as u32)
            .tol_feas(opts.feas_tol)
            .tol_gap_abs(opts.gap_tol)
            .tol_gap_rel(opts.gap_tol);
        if opts.time_limit > 0.0 {
            builder.time_limit(opts.time_limit);
        }
        let settings = builder
            .build()
            .map_err(|e| SolverError::Backend(format!("settings: {e}")))?;

        let mut solver = DefaultSolver::new(&p, &prog.c, &a, &low.b, &cones, settings)
            .map_err(|e| SolverError::Backend(format!("setup: {e:?}")))?;
        solver.solve();

        let status = map_status(solver.solution.status);
        let mut sol = ConicSolution {
            status,
            obj: solver.solution.obj_val + prog.c0,
            x: solver.solution.x.clone(),
            row_dual: Vec::new(),
            bound_dual_lo: Vec::new(),
            bound_dual_hi: Vec::new(),
            soc_dual: Vec::new(),
            iterations: solver.solution.iterations as usize,
            rel_gap: (solver.solution.obj_val - solver.solution.obj_val_dual).abs()
                / f64::max(1.0, solver.solution.obj_val.abs()),
        };
        scatter_duals(prog, &low, &solver.solution.z, &mut sol);
        Ok(sol)
    }
}

fn map_status(s: SolverStatus) -> SolveStatus {
    match s {
        SolverStatus::Solved | SolverStatus::AlmostSolved => SolveStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            SolveStatus::Infeasible
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
            SolveStatus::Unbounded
        }
        SolverStatus::MaxIterations | SolverStatus::MaxTime => SolveStatus::LimitReached,
        _ => SolveStatus::NumericalTrouble,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::SolveOptions;

    #[test]
    fn lp_duals_match_row_convention() {
        // min -x - y s.t. x + y <= 1, x, y in [0, 10].
        let mut p = ConicProgram::new();
        let x = p.add_var("x", 0.0, 10.0, -1.0);
        let y = p.add_var("y", 0.0, 10.0, -1.0);
        let cap = p.add_le("cap", vec![(x, 1.0), (y, 1.0)], 1.0);
        let sol = ClarabelSolver.solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.obj + 1.0).abs() < 1e-7);
        assert!((sol.row_dual[cap] - 1.0).abs() < 1e-6);
        assert!(sol.x[x] + sol.x[y] <= 1.0 + 1e-7);
    }

    #[test]
    fn soc_block_dual_lives_in_cone() {
        let mut p = ConicProgram::new();
        let t = p.add_var("t", 0.0, f64::INFINITY, 1.0);
        let ax = p.free_var("ax");
        let ay = p.free_var("ay");
        p.add_soc(vec![t, ax, ay]);
        p.add_eq("fx", vec![(ax, 1.0)], 3.0);
        p.add_eq("fy", vec![(ay, 1.0)], 4.0);
        let sol = ClarabelSolver.solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.obj - 5.0).abs() < 1e-7);
        let w = &sol.soc_dual[0];
        assert!(w[0] + 1e-9 >= (w[1] * w[1] + w[2] * w[2]).sqrt());
    }

    #[test]
    fn infeasible_box() {
        let mut p = ConicProgram::new();
        let x = p.free_var("x");
        p.add_le("hi", vec![(x, 1.0)], 0.0);
        p.add_ge("lo", vec![(x, 1.0)], 1.0);
        let sol = ClarabelSolver.solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }
}
