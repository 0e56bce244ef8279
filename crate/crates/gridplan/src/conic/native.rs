//! Bundled dense interior-point solver for the standard conic form.
//!
//! Homogeneous self-dual embedding with Nesterov-Todd scaling and a Mehrotra
//! predictor-corrector, the textbook construction: it either converges to an
//! optimal primal-dual pair or produces an infeasibility/unboundedness
//! certificate. Linear algebra is dense; each iteration eliminates the scaled
//! inequality and cone rows into a quasi-definite system of size
//! `n + #equalities` factored by unpivoted LDL^T with static regularization
//! and iterative refinement.
//!
//! This backend exists so the solver contract has a dependency-free
//! implementation that can be audited end to end and cross-checked against
//! the default sparse backend. It is adequate for desk-scale problems (a few
//! thousand columns); the planning pipeline defaults to Clarabel.

use super::{
    lower, scatter_duals, ConicProgram, ConicSolution, ConicSolver, Lowered, SolveOptions,
    SolveStatus, SolverError,
};
use std::time::Instant;

pub struct NativeSolver;

impl ConicSolver for NativeSolver {
    fn name(&self) -> &'static str {
        "native"
    }

    fn solve_with_bounds(
        &self,
        prog: &ConicProgram,
        bounds_override: &[(usize, f64, f64)],
        opts: &SolveOptions,
    ) -> Result<ConicSolution, SolverError> {
        let low = lower(prog, bounds_override)?;
        let mut work = Workspace::new(&low, &prog.c, opts);
        let raw = work.run();
        let mut sol = ConicSolution {
            status: raw.status,
            obj: 0.0,
            x: raw.x.clone(),
            row_dual: Vec::new(),
            bound_dual_lo: Vec::new(),
            bound_dual_hi: Vec::new(),
            soc_dual: Vec::new(),
            iterations: raw.iterations,
            rel_gap: raw.rel_gap,
        };
        scatter_duals(prog, &low, &raw.z, &mut sol);
        sol.obj = prog.objective_value(&raw.x) ;
        Ok(sol)
    }
}

struct RawSolution {
    status: SolveStatus,
    x: Vec<f64>,
    z: Vec<f64>,
    iterations: usize,
    rel_gap: f64,
}

/// Cone layout over the lowered rows: `num_eq` zero-cone rows, then
/// `num_ineq` nonnegative rows, then the SOC blocks.
#[derive(Clone)]
struct Cones {
    num_eq: usize,
    num_ineq: usize,
    socs: Vec<(usize, usize)>, // (start row, dim)
}

impl Cones {
    fn total(&self) -> usize {
        self.num_eq + self.num_ineq + self.socs.iter().map(|&(_, d)| d).sum::<usize>()
    }

    /// Barrier degree: 1 per nonnegative row, 2 per SOC block.
    fn degree(&self) -> f64 {
        self.num_ineq as f64 + 2.0 * self.socs.len() as f64
    }

    fn ineq_range(&self) -> std::ops::Range<usize> {
        self.num_eq..self.num_eq + self.num_ineq
    }

    /// Identity element of the cone product (zero rows get 0).
    fn identity(&self, v: &mut [f64]) {
        v.iter_mut().for_each(|e| *e = 0.0);
        for i in self.ineq_range() {
            v[i] = 1.0;
        }
        for &(start, _) in &self.socs {
            v[start] = 1.0;
        }
    }

    /// Largest alpha in [0, cap] with `v + alpha dv` inside the cone
    /// (nonnegative and SOC parts only).
    fn max_step(&self, v: &[f64], dv: &[f64], cap: f64) -> f64 {
        let mut alpha = cap;
        for i in self.ineq_range() {
            if dv[i] < 0.0 {
                alpha = alpha.min(-v[i] / dv[i]);
            }
        }
        for &(s, d) in &self.socs {
            // Need (v0+a d0)^2 - ||vr + a dr||^2 >= 0 and v0 + a d0 >= 0.
            let (v0, d0) = (v[s], dv[s]);
            let vr = &v[s + 1..s + d];
            let dr = &dv[s + 1..s + d];
            let a2 = d0 * d0 - dot(dr, dr);
            let a1 = v0 * d0 - dot(vr, dr);
            let a0 = v0 * v0 - dot(vr, vr);
            // Quadratic a2 t^2 + 2 a1 t + a0 >= 0, a0 >= 0 at t = 0.
            let mut step = cap;
            if a2 >= 0.0 {
                if a1 < 0.0 {
                    // Roots exist iff a1^2 > a2 a0.
                    let disc = a1 * a1 - a2 * a0;
                    if disc > 0.0 {
                        let q = a0 / (-a1 + disc.sqrt());
                        step = step.min(q);
                    }
                }
            } else {
                let disc = a1 * a1 - a2 * a0;
                if disc > 0.0 {
                    let root = (-a1 - disc.sqrt()) / a2;
                    if root > 0.0 {
                        step = step.min(root);
                    }
                }
            }
            if d0 < 0.0 {
                step = step.min(-v0 / d0);
            }
            alpha = alpha.min(step);
        }
        alpha.max(0.0)
    }

    fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in self.ineq_range() {
            acc += a[i] * b[i];
        }
        for &(s, d) in &self.socs {
            acc += dot(&a[s..s + d], &b[s..s + d]);
        }
        acc
    }
}

/// Nesterov-Todd scaling state for the nonnegative rows and SOC blocks.
struct Scaling {
    /// w_i^2 = s_i / z_i per nonnegative row (H diagonal).
    d: Vec<f64>,
    /// Per SOC block: eta^2 and the normalized scaling point w-bar
    /// (w-bar' J w-bar = 1).
    socs: Vec<(f64, Vec<f64>)>,
    /// lambda = W z = W^{-T} s, the scaled point.
    lambda: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn soc_res(v: &[f64]) -> f64 {
    // v0^2 - ||vr||^2 (the SOC determinant).
    v[0] * v[0] - dot(&v[1..], &v[1..])
}

impl Scaling {
    fn compute(cones: &Cones, s: &[f64], z: &[f64]) -> Scaling {
        let mut d = Vec::with_capacity(cones.num_ineq);
        for i in cones.ineq_range() {
            d.push(s[i] / z[i]);
        }
        let mut socs = Vec::with_capacity(cones.socs.len());
        let mut lambda = vec![0.0; s.len()];
        for i in cones.ineq_range() {
            lambda[i] = (s[i] * z[i]).sqrt();
        }
        for &(st, dim) in &cones.socs {
            let sv = &s[st..st + dim];
            let zv = &z[st..st + dim];
            let gs = soc_res(sv).max(1e-300).sqrt();
            let gz = soc_res(zv).max(1e-300).sqrt();
            // Normalized points and the geometric-mean scaling.
            let sbar: Vec<f64> = sv.iter().map(|v| v / gs).collect();
            let zbar: Vec<f64> = zv.iter().map(|v| v / gz).collect();
            let gamma = ((1.0 + dot(&sbar, &zbar)) / 2.0).max(1e-300).sqrt();
            // w-bar = (sbar + J zbar) / (2 gamma)
            let mut wbar = vec![0.0; dim];
            wbar[0] = (sbar[0] + zbar[0]) / (2.0 * gamma);
            for k in 1..dim {
                wbar[k] = (sbar[k] - zbar[k]) / (2.0 * gamma);
            }
            let eta2 = gs / gz;
            // lambda = W z with W = eta * W-bar; use the closed form
            // lambda = eta * gamma * (something) -- equivalently apply W.
            let lam = apply_wbar(&wbar, zv, 1.0);
            let eta = eta2.sqrt();
            for k in 0..dim {
                lambda[st + k] = eta * lam[k];
            }
            socs.push((eta2, wbar));
        }
        Scaling { d, socs, lambda }
    }

    /// W v (zero rows untouched -> returned as 0).
    fn apply_w(&self, cones: &Cones, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|e| *e = 0.0);
        for (k, i) in cones.ineq_range().enumerate() {
            out[i] = self.d[k].sqrt() * v[i];
        }
        for (b, &(st, dim)) in cones.socs.iter().enumerate() {
            let (eta2, ref wbar) = self.socs[b];
            let r = apply_wbar(wbar, &v[st..st + dim], 1.0);
            let eta = eta2.sqrt();
            for k in 0..dim {
                out[st + k] = eta * r[k];
            }
        }
    }

    /// W^{-1} v == W^{-T} v (W symmetric).
    fn apply_winv(&self, cones: &Cones, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|e| *e = 0.0);
        for (k, i) in cones.ineq_range().enumerate() {
            out[i] = v[i] / self.d[k].sqrt();
        }
        for (b, &(st, dim)) in cones.socs.iter().enumerate() {
            let (eta2, ref wbar) = self.socs[b];
            // W-bar^{-1} = J W-bar J.
            let r = apply_wbar(wbar, &v[st..st + dim], -1.0);
            let eta = eta2.sqrt();
            for k in 0..dim {
                out[st + k] = r[k] / eta;
            }
        }
    }
}

/// Apply the normalized SOC scaling matrix. `sign = 1` gives `W-bar v`;
/// `sign = -1` gives `J W-bar J v = W-bar^{-1} v`.
fn apply_wbar(wbar: &[f64], v: &[f64], sign: f64) -> Vec<f64> {
    let dim = v.len();
    let w0 = wbar[0];
    let wr = &wbar[1..];
    let vr = &v[1..];
    let wv = dot(wr, vr);
    let mut out = vec![0.0; dim];
    out[0] = w0 * v[0] + sign * wv;
    let coef = sign * v[0] + wv / (1.0 + w0);
    for k in 0..dim - 1 {
        out[k + 1] = vr[k] + coef * wr[k];
    }
    out
}

/// Jordan product u o v per cone (zero rows give 0).
fn jordan_prod(cones: &Cones, u: &[f64], v: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|e| *e = 0.0);
    for i in cones.ineq_range() {
        out[i] = u[i] * v[i];
    }
    for &(s, d) in &cones.socs {
        out[s] = dot(&u[s..s + d], &v[s..s + d]);
        for k in 1..d {
            out[s + k] = u[s] * v[s + k] + v[s] * u[s + k];
        }
    }
}

/// Solve lambda o u = d for u.
fn jordan_div(cones: &Cones, lambda: &[f64], d: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|e| *e = 0.0);
    for i in cones.ineq_range() {
        out[i] = d[i] / lambda[i];
    }
    for &(s, dim) in &cones.socs {
        let a = lambda[s];
        let vr = &lambda[s + 1..s + dim];
        let det = a * a - dot(vr, vr);
        let d0 = d[s];
        let dr = &d[s + 1..s + dim];
        let u0 = (a * d0 - dot(vr, dr)) / det;
        out[s] = u0;
        for k in 0..dim - 1 {
            out[s + 1 + k] = (dr[k] - u0 * vr[k]) / a;
        }
    }
}

struct Workspace<'a> {
    n: usize,
    m: usize,
    cones: Cones,
    // CSC of the (equilibrated) A, plus a CSR mirror for row access.
    colptr: Vec<usize>,
    rowval: Vec<usize>,
    nzval: Vec<f64>,
    rowptr: Vec<usize>,
    colval: Vec<usize>,
    rnzval: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    /// Row/column equilibration scalings (A_eq = Dr A Dc).
    dr: Vec<f64>,
    dc: Vec<f64>,
    /// Norm normalizers applied after equilibration (b *= sigma_b,
    /// c *= sigma_c) so the homogenizing variable stays near one.
    sigma_b: f64,
    sigma_c: f64,
    opts: &'a SolveOptions,
    // Iterate.
    x: Vec<f64>,
    z: Vec<f64>,
    s: Vec<f64>,
    tau: f64,
    kappa: f64,
    // Reduced KKT storage.
    kdim: usize,
    kmat: Vec<f64>,
    ldl_d: Vec<f64>,
    delta: f64,
}

impl<'a> Workspace<'a> {
    fn new(low: &Lowered, c: &[f64], opts: &'a SolveOptions) -> Workspace<'a> {
        let n = low.n;
        let m = low.b.len();
        let cones = Cones {
            num_eq: low.num_eq,
            num_ineq: low.num_ineq,
            socs: low
                .soc_start
                .iter()
                .zip(&low.soc_dims)
                .map(|(&s, &d)| (s, d))
                .collect(),
        };
        debug_assert_eq!(cones.total(), m);

        let (colptr, rowval, mut nzval) =
            (low.colptr.clone(), low.rowval.clone(), low.nzval.clone());
        let mut b = low.b.clone();
        let mut cc = c.to_vec();

        // Ruiz equilibration; SOC blocks share one row scalar to stay cones.
        let mut dr = vec![1.0; m];
        let mut dc = vec![1.0; n];
        for _ in 0..8 {
            let mut rmax = vec![0.0f64; m];
            let mut cmax = vec![0.0f64; n];
            for col in 0..n {
                for k in colptr[col]..colptr[col + 1] {
                    let v = nzval[k].abs();
                    rmax[rowval[k]] = rmax[rowval[k]].max(v);
                    cmax[col] = cmax[col].max(v);
                }
            }
            for &(s, d) in &cones.socs {
                let blk = rmax[s..s + d].iter().cloned().fold(0.0f64, f64::max);
                rmax[s..s + d].iter_mut().for_each(|v| *v = blk);
            }
            let rs: Vec<f64> = rmax
                .iter()
                .map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 })
                .collect();
            let cs: Vec<f64> = cmax
                .iter()
                .map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 })
                .collect();
            for col in 0..n {
                for k in colptr[col]..colptr[col + 1] {
                    nzval[k] *= rs[rowval[k]] * cs[col];
                }
            }
            for r in 0..m {
                dr[r] *= rs[r];
            }
            for cidx in 0..n {
                dc[cidx] *= cs[cidx];
            }
        }
        for r in 0..m {
            b[r] *= dr[r];
        }
        for col in 0..n {
            cc[col] *= dc[col];
        }
        let sigma_b = 1.0 / b.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
        let sigma_c = 1.0 / cc.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
        b.iter_mut().for_each(|v| *v *= sigma_b);
        cc.iter_mut().for_each(|v| *v *= sigma_c);

        // CSR mirror.
        let nnz = nzval.len();
        let mut rowptr = vec![0usize; m + 1];
        for &r in &rowval {
            rowptr[r + 1] += 1;
        }
        for r in 0..m {
            rowptr[r + 1] += rowptr[r];
        }
        let mut colval = vec![0usize; nnz];
        let mut rnzval = vec![0f64; nnz];
        let mut cursor = rowptr.clone();
        for col in 0..n {
            for k in colptr[col]..colptr[col + 1] {
                let r = rowval[k];
                colval[cursor[r]] = col;
                rnzval[cursor[r]] = nzval[k];
                cursor[r] += 1;
            }
        }

        let kdim = n + cones.num_eq;
        Workspace {
            n,
            m,
            cones,
            colptr,
            rowval,
            nzval,
            rowptr,
            colval,
            rnzval,
            b,
            c: cc,
            dr,
            dc,
            sigma_b,
            sigma_c,
            opts,
            x: vec![0.0; n],
            z: vec![0.0; m],
            s: vec![0.0; m],
            tau: 1.0,
            kappa: 1.0,
            kdim,
            kmat: vec![0.0; kdim * kdim],
            ldl_d: vec![0.0; kdim],
            delta: 1e-9,
        }
    }

    fn a_mul(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|e| *e = 0.0);
        for col in 0..self.n {
            let xv = x[col];
            if xv != 0.0 {
                for k in self.colptr[col]..self.colptr[col + 1] {
                    out[self.rowval[k]] += self.nzval[k] * xv;
                }
            }
        }
    }

    fn at_mul(&self, y: &[f64], out: &mut [f64]) {
        for col in 0..self.n {
            let mut acc = 0.0;
            for k in self.colptr[col]..self.colptr[col + 1] {
                acc += self.nzval[k] * y[self.rowval[k]];
            }
            out[col] = acc;
        }
    }

    /// `A^T y` with Neumaier-compensated sums. Near convergence the scaled
    /// weights spread over ~10 orders of magnitude, so the plain sum loses
    /// the digits iterative refinement needs; compensation keeps the
    /// residual trustworthy down to machine precision.
    fn at_mul_comp(&self, y: &[f64], out: &mut [f64]) {
        for col in 0..self.n {
            let mut sum = 0.0f64;
            let mut comp = 0.0f64;
            for k in self.colptr[col]..self.colptr[col + 1] {
                let term = self.nzval[k] * y[self.rowval[k]];
                let t = sum + term;
                if sum.abs() >= term.abs() {
                    comp += (sum - t) + term;
                } else {
                    comp += (term - t) + sum;
                }
                sum = t;
            }
            out[col] = sum + comp;
        }
    }

    /// `A x` with Neumaier-compensated row sums (CSR mirror).
    fn a_mul_comp(&self, x: &[f64], out: &mut [f64]) {
        for r in 0..self.m {
            let mut sum = 0.0f64;
            let mut comp = 0.0f64;
            for k in self.rowptr[r]..self.rowptr[r + 1] {
                let term = self.rnzval[k] * x[self.colval[k]];
                let t = sum + term;
                if sum.abs() >= term.abs() {
                    comp += (sum - t) + term;
                } else {
                    comp += (term - t) + sum;
                }
                sum = t;
            }
            out[r] = sum + comp;
        }
    }

    /// Assemble and factor the reduced KKT
    /// `[[M + delta I, A_eq^T], [A_eq, -delta I]]` where
    /// `M = A_c^T H^{-1} A_c` over nonnegative and SOC rows.
    fn factor(&mut self, sc: &Scaling) -> bool {
        let n = self.n;
        let kd = self.kdim;
        self.kmat.iter_mut().for_each(|v| *v = 0.0);

        // Nonnegative rows: weight z/s = 1/d.
        for (k, r) in self.cones.ineq_range().enumerate() {
            let w = 1.0 / self.d_at(sc, k);
            let (lo, hi) = (self.rowptr[r], self.rowptr[r + 1]);
            for a in lo..hi {
                let (ca, va) = (self.colval[a], self.rnzval[a]);
                let wa = w * va;
                for b in lo..=a {
                    let (cb, vb) = (self.colval[b], self.rnzval[b]);
                    let (i, j) = if ca >= cb { (ca, cb) } else { (cb, ca) };
                    self.kmat[i * kd + j] += wa * vb;
                }
            }
        }
        // SOC blocks: H^{-1} = eta^{-2} (2 v v^T - J), v = J w-bar.
        for (bi, &(st, dim)) in self.cones.socs.iter().enumerate() {
            let (eta2, ref wbar) = sc.socs[bi];
            let inv_eta2 = 1.0 / eta2;
            // g = A_b^T (J w-bar): dense accumulation over block rows.
            let mut g = vec![0.0; n];
            for k in 0..dim {
                let r = st + k;
                let wv = if k == 0 { wbar[0] } else { -wbar[k] };
                if wv != 0.0 {
                    for a in self.rowptr[r]..self.rowptr[r + 1] {
                        g[self.colval[a]] += wv * self.rnzval[a];
                    }
                }
            }
            // M += inv_eta2 * (2 g g^T - a0 a0^T + sum_{k>=1} ak ak^T)
            let cols: Vec<usize> = g
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, _)| i)
                .collect();
            for (ii, &i) in cols.iter().enumerate() {
                let gi = 2.0 * inv_eta2 * g[i];
                for &j in cols.iter().take(ii + 1) {
                    let (a, bcol) = if i >= j { (i, j) } else { (j, i) };
                    self.kmat[a * kd + bcol] += gi * g[j];
                }
            }
            for k in 0..dim {
                let r = st + k;
                let sgn = if k == 0 { -inv_eta2 } else { inv_eta2 };
                let (lo, hi) = (self.rowptr[r], self.rowptr[r + 1]);
                for a in lo..hi {
                    let (ca, va) = (self.colval[a], self.rnzval[a]);
                    let wa = sgn * va;
                    for bidx in lo..=a {
                        let (cb, vb) = (self.colval[bidx], self.rnzval[bidx]);
                        let (i, j) = if ca >= cb { (ca, cb) } else { (cb, ca) };
                        self.kmat[i * kd + j] += wa * vb;
                    }
                }
            }
        }
        // A_eq block and regularization.
        for r in 0..self.cones.num_eq {
            let krow = n + r;
            for a in self.rowptr[r]..self.rowptr[r + 1] {
                self.kmat[krow * kd + self.colval[a]] += self.rnzval[a];
            }
        }
        for i in 0..n {
            self.kmat[i * kd + i] += self.delta;
        }
        for i in n..kd {
            self.kmat[i * kd + i] -= self.delta;
        }

        // Unpivoted LDL^T on the lower triangle.
        for j in 0..kd {
            let mut dj = self.kmat[j * kd + j];
            for k in 0..j {
                let l = self.kmat[j * kd + k];
                dj -= l * l * self.ldl_d[k];
            }
            if dj.abs() < 1e-14 {
                dj = if j < n { 1e-14 } else { -1e-14 };
            }
            self.ldl_d[j] = dj;
            for i in j + 1..kd {
                let mut v = self.kmat[i * kd + j];
                let row_i = i * kd;
                let row_j = j * kd;
                for k in 0..j {
                    v -= self.kmat[row_i + k] * self.kmat[row_j + k] * self.ldl_d[k];
                }
                self.kmat[row_i + j] = v / dj;
            }
        }
        self.ldl_d.iter().all(|v| v.is_finite())
    }

    fn d_at(&self, sc: &Scaling, k: usize) -> f64 {
        sc.d[k]
    }

    fn ldl_solve(&self, rhs: &mut [f64]) {
        let kd = self.kdim;
        for i in 0..kd {
            let mut v = rhs[i];
            let row = i * kd;
            for k in 0..i {
                v -= self.kmat[row + k] * rhs[k];
            }
            rhs[i] = v;
        }
        for i in 0..kd {
            rhs[i] /= self.ldl_d[i];
        }
        for i in (0..kd).rev() {
            let mut v = rhs[i];
            for k in i + 1..kd {
                v -= self.kmat[k * kd + i] * rhs[k];
            }
            rhs[i] = v;
        }
    }

    /// Solve `[[0, A^T],[A, -H]] [dx, dz] = [f, g]` where the zero-cone block
    /// of H is 0. Returns (dx, dz) with dz over all lowered rows.
    ///
    /// The reduced route recovers cone-row `dz` as `H^{-1}(A dx - g)`, a
    /// division of a heavily cancelled difference by a weight that heads to
    /// zero on the active set, so its absolute accuracy degrades near
    /// convergence. One or two correction passes through the full saddle
    /// residual restore it: the residual is computable to machine precision
    /// and each pass shrinks the error by the solve's own accuracy factor.
    fn kkt_solve(&mut self, sc: &Scaling, f: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (mut dx, mut dz) = self.kkt_solve_raw(sc, f, g);
        for _ in 0..2 {
            let (r1, r2) = self.saddle_residual(sc, &dx, &dz, f, g);
            let worst = r1
                .iter()
                .chain(r2.iter())
                .fold(0.0f64, |a, &v| a.max(v.abs()));
            let scale = f
                .iter()
                .chain(g.iter())
                .fold(1.0f64, |a, &v| a.max(v.abs()));
            if worst <= 1e-14 * scale {
                break;
            }
            let (cx, cz) = self.kkt_solve_raw(sc, &r1, &r2);
            for i in 0..self.n {
                dx[i] += cx[i];
            }
            for r in 0..self.m {
                dz[r] += cz[r];
            }
        }
        (dx, dz)
    }

    /// Residual `[f - A^T dz, g - A dx + H dz]` of the saddle system, with
    /// compensated sums so cancellation does not mask the true defect.
    fn saddle_residual(
        &self,
        sc: &Scaling,
        dx: &[f64],
        dz: &[f64],
        f: &[f64],
        g: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let mut atdz = vec![0.0; self.n];
        self.at_mul_comp(dz, &mut atdz);
        let r1: Vec<f64> = (0..self.n).map(|i| f[i] - atdz[i]).collect();
        let mut adx = vec![0.0; self.m];
        self.a_mul_comp(dx, &mut adx);
        let mut wdz = vec![0.0; self.m];
        sc.apply_w(&self.cones, dz, &mut wdz);
        let mut hdz = vec![0.0; self.m];
        sc.apply_w(&self.cones, &wdz, &mut hdz);
        let r2: Vec<f64> = (0..self.m)
            .map(|r| {
                if r < self.cones.num_eq {
                    g[r] - adx[r]
                } else {
                    g[r] - adx[r] + hdz[r]
                }
            })
            .collect();
        (r1, r2)
    }

    fn kkt_solve_raw(&mut self, sc: &Scaling, f: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.n;
        // Reduced RHS: [f + A_c^T H^{-1} g_c ; g_eq].
        let mut hg = vec![0.0; self.m];
        self.apply_hinv(sc, g, &mut hg); // zero rows -> 0
        let mut rhs = vec![0.0; self.kdim];
        let mut atv = vec![0.0; n];
        self.at_mul_comp(&hg, &mut atv);
        for i in 0..n {
            rhs[i] = f[i] + atv[i];
        }
        for r in 0..self.cones.num_eq {
            rhs[n + r] = g[r];
        }
        let rhs0 = rhs.clone();
        self.ldl_solve(&mut rhs);
        // Iterative refinement on the reduced system; with compensated
        // residuals this converges at rate cond(M)*eps per round even when
        // the factorization itself is marginal.
        for _ in 0..4 {
            let res = self.reduced_residual(sc, &rhs, &rhs0);
            let rn = res.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            let sn = rhs.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            if rn <= 1e-16 * (1.0 + sn) {
                break;
            }
            let mut corr = res;
            self.ldl_solve(&mut corr);
            for i in 0..self.kdim {
                rhs[i] += corr[i];
            }
        }
        let dx = rhs[..n].to_vec();
        let dz_eq = &rhs[n..];
        // dz_c = H^{-1} (A_c dx - g_c).
        let mut adx = vec![0.0; self.m];
        self.a_mul(&dx, &mut adx);
        for r in 0..self.m {
            adx[r] -= g[r];
        }
        let mut dz = vec![0.0; self.m];
        self.apply_hinv(sc, &adx, &mut dz);
        for r in 0..self.cones.num_eq {
            dz[r] = dz_eq[r];
        }
        (dx, dz)
    }

    /// Residual of the unregularized reduced system for refinement.
    fn reduced_residual(&self, sc: &Scaling, sol: &[f64], rhs0: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut res = rhs0.to_vec();
        // res -= [[M, Aeq^T],[Aeq, 0]] * sol
        let dx = &sol[..n];
        let mut adx = vec![0.0; self.m];
        self.a_mul(dx, &mut adx);
        let mut hadx = vec![0.0; self.m];
        self.apply_hinv(sc, &adx, &mut hadx);
        let mut mdx = vec![0.0; n];
        self.at_mul_comp(&hadx, &mut mdx);
        for i in 0..n {
            res[i] -= mdx[i];
        }
        // Aeq^T part.
        for r in 0..self.cones.num_eq {
            let zr = sol[n + r];
            if zr != 0.0 {
                for a in self.rowptr[r]..self.rowptr[r + 1] {
                    res[self.colval[a]] -= self.rnzval[a] * zr;
                }
            }
            res[n + r] -= adx[r];
        }
        res
    }

    /// H^{-1} v over nonnegative and SOC rows (zero rows give 0).
    fn apply_hinv(&self, sc: &Scaling, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|e| *e = 0.0);
        for (k, r) in self.cones.ineq_range().enumerate() {
            out[r] = v[r] / sc.d[k];
        }
        for (bi, &(st, dim)) in self.cones.socs.iter().enumerate() {
            let (eta2, ref wbar) = sc.socs[bi];
            // H^{-1} = eta^{-2}(2 (Jw)(Jw)^T - J)
            let jv: Vec<f64> = (0..dim)
                .map(|k| if k == 0 { wbar[0] } else { -wbar[k] })
                .collect();
            let coef = 2.0 * dot(&jv, &v[st..st + dim]);
            out[st] = (coef * jv[0] - v[st]) / eta2;
            for k in 1..dim {
                out[st + k] = (coef * jv[k] + v[st + k]) / eta2;
            }
        }
    }

    fn run(&mut self) -> RawSolution {
        let started = Instant::now();
        let n = self.n;
        let m = self.m;
        // Initial point: x = 0, s = z = cone identity, tau = kappa = 1.
        self.cones.identity(&mut self.s);
        let mut e = vec![0.0; m];
        self.cones.identity(&mut e);
        self.z.copy_from_slice(&e);
        let nu = self.cones.degree() + 1.0;

        let norm_b = 1.0 + self.b.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        let norm_c = 1.0 + self.c.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        // Norms of the problem as the caller posed it. The equilibrated
        // residuals can flatter an iterate when the Ruiz factors spread over
        // several decades, so convergence is also checked against these.
        let norm_b_raw = 1.0
            + (0..m).fold(0.0f64, |a, r| {
                a.max((self.b[r] / (self.dr[r] * self.sigma_b)).abs())
            });
        let norm_c_raw = 1.0
            + (0..n).fold(0.0f64, |a, i| {
                a.max((self.c[i] / (self.dc[i] * self.sigma_c)).abs())
            });

        let mut best_status = SolveStatus::NumericalTrouble;
        let mut rel_gap = f64::INFINITY;
        let mut iter = 0usize;
        // Best iterate so far by worst-case metric; the dense factorization
        // with static regularization can lose feasibility digits near the
        // solution, so we keep the cleanest point seen.
        let mut best: Option<(f64, f64, Vec<f64>, Vec<f64>, f64)> = None;

        while iter < self.opts.max_iter {
            if self.opts.time_limit > 0.0
                && started.elapsed().as_secs_f64() > self.opts.time_limit
            {
                best_status = SolveStatus::LimitReached;
                break;
            }
            // Residuals.
            let mut rx = vec![0.0; n]; // A^T z + c tau
            self.at_mul(&self.z.clone(), &mut rx);
            for i in 0..n {
                rx[i] += self.c[i] * self.tau;
            }
            let mut rz = vec![0.0; m]; // A x + s - b tau
            self.a_mul(&self.x.clone(), &mut rz);
            for r in 0..m {
                rz[r] += self.s[r] - self.b[r] * self.tau;
            }
            let rtau = dot(&self.c, &self.x) + dot(&self.b, &self.z) + self.kappa;

            let gap = self.cones.inner(&self.s, &self.z);
            let mu = (gap + self.tau * self.kappa) / nu;

            // Convergence bookkeeping on the de-homogenized iterate.
            let inv_tau = 1.0 / self.tau;
            let pcost = dot(&self.c, &self.x) * inv_tau;
            let dcost = -dot(&self.b, &self.z) * inv_tau;
            let mut pres = 0.0f64;
            let mut pres_raw = 0.0f64;
            for r in 0..m {
                let v = (rz[r] * inv_tau).abs();
                pres = pres.max(v);
                pres_raw = pres_raw.max(v / (self.dr[r] * self.sigma_b));
            }
            pres /= norm_b;
            pres_raw /= norm_b_raw;
            let mut dres = 0.0f64;
            let mut dres_raw = 0.0f64;
            for i in 0..n {
                let v = (rx[i] * inv_tau).abs();
                dres = dres.max(v);
                dres_raw = dres_raw.max(v / (self.dc[i] * self.sigma_c));
            }
            dres /= norm_c;
            dres_raw /= norm_c_raw;
            rel_gap = (pcost - dcost).abs() / f64::max(1.0, pcost.abs().max(dcost.abs()));
            let worst = pres.max(dres).max(pres_raw).max(dres_raw).max(rel_gap);
            if best.as_ref().map_or(true, |(w, ..)| worst < *w) {
                best = Some((worst, rel_gap, self.x.clone(), self.z.clone(), self.tau));
            }
            if self.opts.verbose {
                eprintln!(
                    "iter {iter:3}  pcost {pcost:+.6e}  dcost {dcost:+.6e}  pres {pres:.2e}/{pres_raw:.2e}  dres {dres:.2e}/{dres_raw:.2e}  gap {rel_gap:.2e}  mu {mu:.2e}  tau {:.2e} kappa {:.2e}",
                    self.tau, self.kappa
                );
            }
            if pres.max(pres_raw) <= self.opts.feas_tol.max(1e-12)
                && dres.max(dres_raw) <= self.opts.feas_tol.max(1e-12)
                && rel_gap <= self.opts.gap_tol.max(1e-12)
            {
                best_status = SolveStatus::Optimal;
                break;
            }
            // Infeasibility certificates once the homogenizing variable dies,
            // or bail out before complementarity collapses past what the
            // regularized factorization can track.
            if self.tau < 1e-10 * self.kappa.max(1.0) || mu < 1e-12 {
                let bz = dot(&self.b, &self.z);
                let cx = dot(&self.c, &self.x);
                if bz < -1e-12 {
                    let mut atz = vec![0.0; n];
                    self.at_mul(&self.z.clone(), &mut atz);
                    let na = atz.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
                    if na <= 1e-7 * (-bz) * norm_c {
                        best_status = SolveStatus::Infeasible;
                        break;
                    }
                }
                if cx < -1e-12 {
                    let mut axs = vec![0.0; m];
                    self.a_mul(&self.x.clone(), &mut axs);
                    for r in 0..m {
                        axs[r] += self.s[r];
                    }
                    let na = axs.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
                    if na <= 1e-7 * (-cx) * norm_b {
                        best_status = SolveStatus::Unbounded;
                        break;
                    }
                }
                best_status = SolveStatus::NumericalTrouble;
                break;
            }

            let sc = Scaling::compute(&self.cones, &self.s, &self.z);
            if !self.factor(&sc) {
                best_status = SolveStatus::NumericalTrouble;
                break;
            }

            // Constant-column solve, shared by affine and combined steps.
            let c_obj = self.c.clone();
            let neg_b: Vec<f64> = self.b.iter().map(|v| -v).collect();
            let (cx1, cz1) = self.kkt_solve(&sc, &c_obj, &neg_b);

            // Affine step.
            let mut ds_target = vec![0.0; m];
            jordan_prod(&self.cones, &sc.lambda, &sc.lambda, &mut ds_target);
            ds_target.iter_mut().for_each(|v| *v = -*v);
            let bkappa = -self.tau * self.kappa;
            let (_adx, adz, ads, adtau, adkappa) = self.direction(
                &sc,
                &rx.iter().map(|v| -v).collect::<Vec<_>>(),
                &rz.iter().map(|v| -v).collect::<Vec<_>>(),
                -rtau,
                &ds_target,
                bkappa,
                &cx1,
                &cz1,
            );
            let alpha_a = {
                let az = self.cones.max_step(&self.z, &adz, 1.0);
                let as_ = self.cones.max_step(&self.s, &ads, 1.0);
                let at = if adtau < 0.0 { -self.tau / adtau } else { 1.0 };
                let ak = if adkappa < 0.0 { -self.kappa / adkappa } else { 1.0 };
                az.min(as_).min(at).min(ak).min(1.0)
            };
            let sigma = (1.0 - alpha_a).powi(3).clamp(0.0, 1.0);

            // Combined step with Mehrotra correction.
            let mut wdz = vec![0.0; m];
            sc.apply_w(&self.cones, &adz, &mut wdz);
            let mut wds = vec![0.0; m];
            sc.apply_winv(&self.cones, &ads, &mut wds);
            let mut corr = vec![0.0; m];
            jordan_prod(&self.cones, &wds, &wdz, &mut corr);
            for r in 0..m {
                ds_target[r] -= corr[r];
            }
            let smu = sigma * mu;
            for i in self.cones.ineq_range() {
                ds_target[i] += smu;
            }
            for &(st, _) in &self.cones.socs.clone() {
                ds_target[st] += smu;
            }
            let damp = 1.0 - sigma;
            let bkappa2 = -self.tau * self.kappa - adtau * adkappa + smu;
            let (dx, dz, ds, dtau, dkappa) = self.direction(
                &sc,
                &rx.iter().map(|v| -damp * v).collect::<Vec<_>>(),
                &rz.iter().map(|v| -damp * v).collect::<Vec<_>>(),
                -damp * rtau,
                &ds_target,
                bkappa2,
                &cx1,
                &cz1,
            );
            let alpha = {
                let az = self.cones.max_step(&self.z, &dz, 1.0);
                let as_ = self.cones.max_step(&self.s, &ds, 1.0);
                let at = if dtau < 0.0 { -self.tau / dtau } else { f64::INFINITY };
                let ak = if dkappa < 0.0 { -self.kappa / dkappa } else { f64::INFINITY };
                0.99 * az.min(as_).min(at).min(ak).min(1.0 / 0.99)
            };
            if alpha <= 1e-12 || !alpha.is_finite() {
                best_status = SolveStatus::NumericalTrouble;
                break;
            }
            for i in 0..n {
                self.x[i] += alpha * dx[i];
            }
            for r in 0..m {
                self.z[r] += alpha * dz[r];
                self.s[r] += alpha * ds[r];
            }
            // Keep zero-cone slacks exactly zero.
            for r in 0..self.cones.num_eq {
                self.s[r] = 0.0;
            }
            self.tau += alpha * dtau;
            self.kappa += alpha * dkappa;
            iter += 1;
        }
        if iter >= self.opts.max_iter && best_status == SolveStatus::NumericalTrouble {
            best_status = SolveStatus::LimitReached;
        }

        // On stall or iteration limit, fall back to the cleanest iterate and
        // accept it at a relaxed tolerance: the regularized dense solves
        // cannot always push feasibility all the way to the target.
        if !matches!(
            best_status,
            SolveStatus::Optimal | SolveStatus::Infeasible | SolveStatus::Unbounded
        ) {
            if let Some((worst, bgap, bx, bz, btau)) = &best {
                let relaxed = self.opts.feas_tol.max(self.opts.gap_tol).max(1e-12) * 100.0;
                if *worst <= relaxed.max(1e-6) {
                    self.x.copy_from_slice(bx);
                    self.z.copy_from_slice(bz);
                    self.tau = *btau;
                    rel_gap = *bgap;
                    best_status = SolveStatus::Optimal;
                }
            }
        }

        // De-homogenize and undo the equilibration and norm scalings.
        let inv_tau = 1.0 / self.tau.max(1e-300);
        let mut x = vec![0.0; n];
        for i in 0..n {
            x[i] = self.x[i] * inv_tau * self.dc[i] / self.sigma_b;
        }
        let mut z = vec![0.0; m];
        for r in 0..m {
            z[r] = self.z[r] * inv_tau * self.dr[r] / self.sigma_c;
        }
        RawSolution {
            status: best_status,
            x,
            z,
            iterations: iter,
            rel_gap,
        }
    }

    /// One Newton direction given targets; uses the cached factorization and
    /// the precomputed constant-column solve (cx1, cz1).
    #[allow(clippy::too_many_arguments)]
    fn direction(
        &mut self,
        sc: &Scaling,
        bx: &[f64],
        bz: &[f64],
        btau: f64,
        ds_target: &[f64],
        bkappa: f64,
        cx1: &[f64],
        cz1: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>, f64, f64) {
        let m = self.m;
        // bs = lambda \ ds_target, then g = bz - W^T bs over cone rows.
        let mut bs = vec![0.0; m];
        jordan_div(&self.cones, &sc.lambda, ds_target, &mut bs);
        let mut wbs = vec![0.0; m];
        sc.apply_w(&self.cones, &bs, &mut wbs);
        let mut g = bz.to_vec();
        for r in self.cones.num_eq..m {
            g[r] -= wbs[r];
        }
        let (rx_sol, rz_sol) = self.kkt_solve(&sc, bx, &g);
        // dtau from the homogenizing row.
        let denom =
            dot(&self.c, cx1) + dot(&self.b, cz1) + self.kappa / self.tau;
        let num = dot(&self.c, &rx_sol) + dot(&self.b, &rz_sol) + bkappa / self.tau - btau;
        let dtau = num / denom;
        let mut dx = rx_sol;
        let mut dz = rz_sol;
        for i in 0..self.n {
            dx[i] -= dtau * cx1[i];
        }
        for r in 0..m {
            dz[r] -= dtau * cz1[r];
        }
        // ds = W^T (bs - W dz) over cone rows; zero rows stay 0.
        let mut wdz = vec![0.0; m];
        sc.apply_w(&self.cones, &dz, &mut wdz);
        let mut inner = vec![0.0; m];
        for r in 0..m {
            inner[r] = bs[r] - wdz[r];
        }
        let mut ds = vec![0.0; m];
        sc.apply_w(&self.cones, &inner, &mut ds);
        let dkappa = (bkappa - self.kappa * dtau) / self.tau;
        (dx, dz, ds, dtau, dkappa)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::{ConicProgram, SolveOptions, SolveStatus};

    fn solve(p: &ConicProgram) -> ConicSolution {
        let mut opts = SolveOptions::default();
        opts.verbose = std::env::var("NATIVE_TRACE").is_ok();
        NativeSolver.solve(p, &opts).expect("solve")
    }

    #[test]
    fn bounded_lp_with_duals() {
        // min -x - y  s.t. x + y <= 1, 0 <= x, y <= 10
        let mut p = ConicProgram::new();
        let x = p.add_var("x", 0.0, 10.0, -1.0);
        let y = p.add_var("y", 0.0, 10.0, -1.0);
        let cap = p.add_le("cap", vec![(x, 1.0), (y, 1.0)], 1.0);
        let sol = solve(&p);
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.obj + 1.0).abs() < 1e-7, "obj {}", sol.obj);
        // L = -x - y + z(x + y - 1): z = 1.
        assert!((sol.row_dual[cap] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn equality_lp_dual_sign() {
        // min x s.t. x = 3: dual of the row solves 1 + z = 0.
        let mut p = ConicProgram::new();
        let x = p.free_var("x");
        p.c[x] = 1.0;
        let row = p.add_eq("fix", vec![(x, 1.0)], 3.0);
        let sol = solve(&p);
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.obj - 3.0).abs() < 1e-7);
        assert!((sol.row_dual[row] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn soc_norm_minimization() {
        // min t s.t. ||(ax, ay)|| <= t, ax = 3, ay = 4.
        let mut p = ConicProgram::new();
        let t = p.add_var("t", 0.0, f64::INFINITY, 1.0);
        let ax = p.free_var("ax");
        let ay = p.free_var("ay");
        p.add_soc(vec![t, ax, ay]);
        p.add_eq("fx", vec![(ax, 1.0)], 3.0);
        p.add_eq("fy", vec![(ay, 1.0)], 4.0);
        let sol = solve(&p);
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.obj - 5.0).abs() < 1e-6, "obj {}", sol.obj);
        // Cone dual is in the cone and scales with the objective gradient.
        let w = &sol.soc_dual[0];
        assert!(w[0] >= 0.0);
        assert!((w[0] - (w[1] * w[1] + w[2] * w[2]).sqrt()).abs() < 1e-5);
    }

    #[test]
    fn soc_rotated_geometry() {
        // Maximize x + y inside a disc of radius r centered at origin:
        // min -(x+y) s.t. ||(x,y)|| <= 2. Optimum at x = y = sqrt(2).
        let mut p = ConicProgram::new();
        let t = p.add_var("t", 0.0, 2.0, 0.0);
        let x = p.add_var("x", f64::NEG_INFINITY, f64::INFINITY, -1.0);
        let y = p.add_var("y", f64::NEG_INFINITY, f64::INFINITY, -1.0);
        p.add_soc(vec![t, x, y]);
        // force t to its cap so the disc has radius 2
        p.add_eq("tfix", vec![(t, 1.0)], 2.0);
        let sol = solve(&p);
        assert_eq!(sol.status, SolveStatus::Optimal);
        let s2 = std::f64::consts::SQRT_2;
        assert!((sol.x[x] - s2).abs() < 1e-6);
        assert!((sol.x[y] - s2).abs() < 1e-6);
        assert!((sol.obj + 2.0 * s2).abs() < 1e-7);
    }

    #[test]
    fn detects_primal_infeasible() {
        let mut p = ConicProgram::new();
        let x = p.free_var("x");
        p.add_le("hi", vec![(x, 1.0)], 0.0);
        p.add_ge("lo", vec![(x, 1.0)], 1.0);
        let sol = solve(&p);
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn detects_unbounded() {
        let mut p = ConicProgram::new();
        let x = p.free_var("x");
        p.c[x] = -1.0;
        p.add_ge("floor", vec![(x, 1.0)], 0.0);
        let sol = solve(&p);
        assert_eq!(sol.status, SolveStatus::Unbounded);
    }

    #[test]
    fn degenerate_equality_only() {
        // min 0 s.t. x = 1 (no inequalities or cones at all).
        let mut p = ConicProgram::new();
        let x = p.free_var("x");
        p.add_eq("fix", vec![(x, 1.0)], 1.0);
        let sol = solve(&p);
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.x[x] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn bound_duals_report() {
        // min x on [2, 5]: lower bound active, multiplier 1.
        let mut p = ConicProgram::new();
        let x = p.add_var("x", 2.0, 5.0, 1.0);
        let sol = solve(&p);
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.obj - 2.0).abs() < 1e-7);
        assert!((sol.bound_dual_lo[x] - 1.0).abs() < 1e-6);
        assert!(sol.bound_dual_hi[x].abs() < 1e-8);
    }
}
