//! Sparse-by-structure quadratic programming over time-indexed state blocks.
//!
//! Problems are assembled from weighted residual terms
//! `|sum_i C_i x_{t_i} - g|^2_W` (crate convention: the weight enters
//! inverted) plus polyhedral rows `sum_i C_i x_{t_i} <= rhs`. The assembled
//! Hessian is block-tridiagonal whenever every term and every constraint row
//! couples at most adjacent blocks of the [`Layout`], which holds for all
//! window estimators in this crate; a banded Cholesky then solves each
//! Newton system in time linear in the number of blocks. Anything else falls
//! back to dense factorizations.
//!
//! Inequalities are handled by a Mehrotra predictor-corrector interior-point
//! iteration followed by an active-set polish: the rows that the interior
//! solution pins to their bound are re-solved as equalities, and the polished
//! point replaces the iterate when it passes feasibility and multiplier-sign
//! checks. Both activity detectors (small slack, large multiplier) are
//! reported on the returned solution; the slack detector is the one used by
//! the window estimators, so weakly active rows (zero slack, zero
//! multiplier) count as active.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::linalg;
use crate::{Error, Result};

/// Interior-point tolerance on scaled residuals and duality gap.
pub const IPM_TOL: f64 = 1e-9;
/// Interior-point iteration cap.
pub const IPM_MAX_ITER: usize = 100;
/// Relative slack threshold of the active-set detector.
pub const EPS_ACTIVE: f64 = 1e-6;
/// Absolute multiplier threshold of the dual activity detector.
pub const EPS_DUAL: f64 = 1e-6;
/// Fraction of the full step to the boundary taken per iteration.
const STEP_FRACTION: f64 = 0.99;

/// Variable layout: one state block of dimension `n` per retained time
/// index, ordered by time. Times need not be contiguous.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    times: Vec<usize>,
    index: BTreeMap<usize, usize>,
    n: usize,
}

impl Layout {
    pub fn new(times: impl IntoIterator<Item = usize>, n: usize) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for t in times {
            seen.insert(t, 0usize);
        }
        if seen.is_empty() {
            return Err(Error::InvalidInput("layout has no variables".into()));
        }
        if n == 0 {
            return Err(Error::InvalidInput("state blocks must be non-empty".into()));
        }
        let times: Vec<usize> = seen.keys().copied().collect();
        let index = times
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, i))
            .collect::<BTreeMap<_, _>>();
        Ok(Self { times, index, n })
    }

    pub fn times(&self) -> &[usize] {
        &self.times
    }

    pub fn block_dim(&self) -> usize {
        self.n
    }

    pub fn blocks(&self) -> usize {
        self.times.len()
    }

    pub fn dim(&self) -> usize {
        self.n * self.times.len()
    }

    /// Block position of a time index.
    pub fn position(&self, time: usize) -> Result<usize> {
        self.index.get(&time).copied().ok_or_else(|| {
            Error::InvalidInput(format!("time {time} is not a variable of this layout"))
        })
    }

    pub fn offset(&self, time: usize) -> Result<usize> {
        Ok(self.position(time)? * self.n)
    }

    /// Extract the block for `time` from a flat vector.
    pub fn block(&self, zeta: &DVector<f64>, time: usize) -> Result<DVector<f64>> {
        let off = self.offset(time)?;
        let _ = &zeta[off]; // bounds check with a clear panic site
        Ok(zeta.rows(off, self.n).into_owned())
    }
}

/// Weighted residual term `|sum_i C_i x_{t_i} - g|^2_W`.
#[derive(Debug, Clone)]
pub struct QuadTerm {
    pub coeffs: Vec<(usize, DMatrix<f64>)>,
    pub g: DVector<f64>,
    pub w: DMatrix<f64>,
}

impl QuadTerm {
    pub fn new(coeffs: Vec<(usize, DMatrix<f64>)>, g: DVector<f64>, w: DMatrix<f64>) -> Self {
        Self { coeffs, g, w }
    }

    /// Residual at a point described by a lookup from time to state.
    fn residual(&self, mut value_of: impl FnMut(usize) -> DVector<f64>) -> DVector<f64> {
        let mut r = -self.g.clone();
        for (t, c) in &self.coeffs {
            r += c * value_of(*t);
        }
        r
    }
}

/// Where a constraint row came from; carried through to the solution so the
/// estimators can audit exactly which stages were imposed.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub enum RowTag {
    /// Stage constraint inside the sliding window.
    Sliding { stage: usize },
    /// Stage constraint retained by a window.
    Window { window: usize, stage: usize },
    /// Anything else.
    Other,
}

/// Inequality rows `sum_i C_i x_{t_i} <= rhs` sharing one support and tag.
#[derive(Debug, Clone)]
pub struct IneqBlock {
    pub coeffs: Vec<(usize, DMatrix<f64>)>,
    pub rhs: DVector<f64>,
    pub tag: RowTag,
}

/// Equality rows `sum_i C_i x_{t_i} = rhs`.
#[derive(Debug, Clone)]
pub struct EqBlock {
    pub coeffs: Vec<(usize, DMatrix<f64>)>,
    pub rhs: DVector<f64>,
}

/// Symmetric positive definite matrix in block-tridiagonal or dense form.
#[derive(Debug, Clone)]
enum HessStore {
    /// `diag[i]` is block (i, i); `sub[i]` is block (i+1, i).
    BlockTri {
        diag: Vec<DMatrix<f64>>,
        sub: Vec<DMatrix<f64>>,
    },
    Dense(DMatrix<f64>),
}

impl HessStore {
    fn zeros_banded(blocks: usize, n: usize) -> Self {
        Self::BlockTri {
            diag: vec![DMatrix::zeros(n, n); blocks],
            sub: vec![DMatrix::zeros(n, n); blocks.saturating_sub(1)],
        }
    }

    fn zeros_dense(dim: usize) -> Self {
        Self::Dense(DMatrix::zeros(dim, dim))
    }

    /// Add `block` at block position (bi, bj); callers pass each unordered
    /// pair once with bi >= bj.
    fn add_block(&mut self, n: usize, bi: usize, bj: usize, block: &DMatrix<f64>) {
        match self {
            Self::BlockTri { diag, sub } => {
                if bi == bj {
                    diag[bi] += block;
                } else {
                    debug_assert_eq!(bi, bj + 1);
                    sub[bj] += block;
                }
            }
            Self::Dense(m) => {
                let mut view = m.view_mut((bi * n, bj * n), (n, n));
                view += block;
                if bi != bj {
                    let mut upper = m.view_mut((bj * n, bi * n), (n, n));
                    upper += block.transpose();
                }
            }
        }
    }

    fn matvec(&self, n: usize, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::BlockTri { diag, sub } => {
                let blocks = diag.len();
                let mut out = DVector::zeros(blocks * n);
                for (i, d) in diag.iter().enumerate() {
                    let vi = v.rows(i * n, n);
                    let mut oi = out.rows_mut(i * n, n);
                    oi += d * vi;
                }
                for (i, s) in sub.iter().enumerate() {
                    let v_lo = v.rows(i * n, n);
                    let v_hi = v.rows((i + 1) * n, n);
                    {
                        let mut o_hi = out.rows_mut((i + 1) * n, n);
                        o_hi += s * v_lo;
                    }
                    let mut o_lo = out.rows_mut(i * n, n);
                    o_lo += s.transpose() * v_hi;
                }
                out
            }
            Self::Dense(m) => m * v,
        }
    }

    fn to_dense(&self, n: usize) -> DMatrix<f64> {
        match self {
            Self::Dense(m) => m.clone(),
            Self::BlockTri { diag, sub } => {
                let blocks = diag.len();
                let mut m = DMatrix::zeros(blocks * n, blocks * n);
                for (i, d) in diag.iter().enumerate() {
                    m.view_mut((i * n, i * n), (n, n)).copy_from(d);
                }
                for (i, s) in sub.iter().enumerate() {
                    m.view_mut(((i + 1) * n, i * n), (n, n)).copy_from(s);
                    m.view_mut((i * n, (i + 1) * n), (n, n))
                        .copy_from(&s.transpose());
                }
                m
            }
        }
    }

    fn scaled(&self, factor: f64) -> Self {
        match self {
            Self::BlockTri { diag, sub } => Self::BlockTri {
                diag: diag.iter().map(|d| d * factor).collect(),
                sub: sub.iter().map(|s| s * factor).collect(),
            },
            Self::Dense(m) => Self::Dense(m * factor),
        }
    }
}

/// Cholesky factor of a block-tridiagonal SPD matrix: lower block-bidiagonal
/// `L` with `l_diag[i]` lower triangular and `l_sub[i] = L_{i+1,i}`.
struct BlockTriChol {
    l_diag: Vec<DMatrix<f64>>,
    l_sub: Vec<DMatrix<f64>>,
    n: usize,
}

impl BlockTriChol {
    fn factor(diag: &[DMatrix<f64>], sub: &[DMatrix<f64>], n: usize) -> Result<Self> {
        let blocks = diag.len();
        let mut l_diag = Vec::with_capacity(blocks);
        let mut l_sub = Vec::with_capacity(blocks.saturating_sub(1));
        let mut schur = diag[0].clone();
        for i in 0..blocks {
            linalg::symmetrize(&mut schur);
            let l = linalg::spd_cholesky(&schur, "banded Newton block")?.l();
            if i + 1 < blocks {
                // L_{i+1,i} = B_i L_i^-T with B_i = sub[i], via L_i Y' = B_i'.
                let mut y_t = sub[i].transpose();
                l.solve_lower_triangular_unchecked_mut(&mut y_t);
                let y = y_t.transpose();
                schur = &diag[i + 1] - &y * y.transpose();
                l_sub.push(y);
            }
            l_diag.push(l);
        }
        Ok(Self { l_diag, l_sub, n })
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let blocks = self.l_diag.len();
        let mut z = rhs.clone();
        for i in 0..blocks {
            if i > 0 {
                let prev = z.rows((i - 1) * n, n).into_owned();
                let mut zi = z.rows_mut(i * n, n);
                zi -= &self.l_sub[i - 1] * prev;
            }
            let mut zi = z.rows(i * n, n).into_owned();
            self.l_diag[i].solve_lower_triangular_unchecked_mut(&mut zi);
            z.rows_mut(i * n, n).copy_from(&zi);
        }
        for i in (0..blocks).rev() {
            if i + 1 < blocks {
                let next = z.rows((i + 1) * n, n).into_owned();
                let mut zi = z.rows_mut(i * n, n);
                zi -= self.l_sub[i].transpose() * next;
            }
            let mut zi = z.rows(i * n, n).into_owned();
            self.l_diag[i].tr_solve_lower_triangular_unchecked_mut(&mut zi);
            z.rows_mut(i * n, n).copy_from(&zi);
        }
        z
    }
}

/// Factorization wrapper so the solver code is storage-agnostic.
enum Factor {
    Banded(BlockTriChol),
    Dense(Cholesky<f64, Dyn>),
}

impl Factor {
    fn of(store: &HessStore, n: usize) -> Result<Self> {
        match store {
            HessStore::BlockTri { diag, sub } => {
                Ok(Self::Banded(BlockTriChol::factor(diag, sub, n)?))
            }
            HessStore::Dense(m) => {
                let mut sym = m.clone();
                linalg::symmetrize(&mut sym);
                Ok(Self::Dense(linalg::spd_cholesky(&sym, "Newton matrix")?))
            }
        }
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Banded(f) => f.solve(rhs),
            Self::Dense(c) => c.solve(rhs),
        }
    }
}

/// Assembled problem: minimize `zeta' H0 zeta - 2 q0' zeta + c0` subject to
/// `G zeta <= h` and `A zeta = b`.
#[derive(Debug, Clone)]
pub struct QPProblem {
    pub layout: Layout,
    h0: HessStore,
    q0: DVector<f64>,
    c0: f64,
    g_mat: DMatrix<f64>,
    h_rhs: DVector<f64>,
    row_tags: Vec<RowTag>,
    a_eq: DMatrix<f64>,
    b_eq: DVector<f64>,
    banded: bool,
    terms: Vec<QuadTerm>,
}

/// Solver knobs; [`Default`] matches the documented tolerances.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub eps_active: f64,
    pub polish: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: IPM_TOL,
            max_iter: IPM_MAX_ITER,
            eps_active: EPS_ACTIVE,
            polish: true,
        }
    }
}

/// Scaled KKT residuals of the returned point.
#[derive(Debug, Clone, serde::Serialize)]
pub struct KktInfo {
    /// `|P zeta + q + G' lambda + A' nu|_inf / (1 + |q|_inf)`.
    pub stationarity: f64,
    /// Worst scaled inequality violation (0 when feasible) and equality gap.
    pub primal: f64,
    /// `max_i |lambda_i s_i| / (1 + |objective|)`.
    pub complementarity: f64,
    /// Most negative multiplier (>= 0 up to roundoff).
    pub dual_min: f64,
}

impl KktInfo {
    pub fn worst(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.complementarity)
            .max(-self.dual_min)
    }
}

/// Solution of a [`QPProblem`].
#[derive(Debug, Clone)]
pub struct QPSolution {
    pub zeta: DVector<f64>,
    pub objective: f64,
    pub lambda: DVector<f64>,
    pub slack: DVector<f64>,
    pub eq_duals: DVector<f64>,
    /// Rows at their bound by the slack rule (weakly active rows included).
    pub active_slack: Vec<usize>,
    /// Rows with a significantly positive multiplier.
    pub active_dual: Vec<usize>,
    pub kkt: KktInfo,
    pub iterations: usize,
    pub polished: bool,
    pub wall_seconds: f64,
}

impl QPProblem {
    /// Build the quadratic and constraint data over `layout`. Detects the
    /// banded case: every coupling (terms and constraint rows) within one
    /// block position and no equality rows.
    pub fn assemble(
        layout: Layout,
        terms: Vec<QuadTerm>,
        ineqs: &[IneqBlock],
        eqs: &[EqBlock],
    ) -> Result<Self> {
        let n = layout.block_dim();
        let dim = layout.dim();

        // Resolve supports once and decide on storage.
        let mut banded = eqs.is_empty();
        let mut term_supports: Vec<Vec<(usize, &DMatrix<f64>)>> = Vec::with_capacity(terms.len());
        for term in &terms {
            if term.coeffs.is_empty() {
                return Err(Error::InvalidInput("term with no coefficients".into()));
            }
            let mut support = Vec::with_capacity(term.coeffs.len());
            for (t, c) in &term.coeffs {
                if c.nrows() != term.g.len() || c.ncols() != n {
                    return Err(Error::Dimension(format!(
                        "term coefficient at time {t} is {}x{}, expected {}x{n}",
                        c.nrows(),
                        c.ncols(),
                        term.g.len()
                    )));
                }
                support.push((layout.position(*t)?, c));
            }
            for (i, _) in &support {
                for (j, _) in &support {
                    if i.abs_diff(*j) > 1 {
                        banded = false;
                    }
                }
            }
            term_supports.push(support);
        }
        let mut ineq_supports: Vec<Vec<(usize, &DMatrix<f64>)>> = Vec::with_capacity(ineqs.len());
        for blk in ineqs {
            let mut support = Vec::with_capacity(blk.coeffs.len());
            for (t, c) in &blk.coeffs {
                if c.nrows() != blk.rhs.len() || c.ncols() != n {
                    return Err(Error::Dimension(format!(
                        "constraint coefficient at time {t} is {}x{}, expected {}x{n}",
                        c.nrows(),
                        c.ncols(),
                        blk.rhs.len()
                    )));
                }
                support.push((layout.position(*t)?, c));
            }
            for (i, _) in &support {
                for (j, _) in &support {
                    if i.abs_diff(*j) > 1 {
                        banded = false;
                    }
                }
            }
            ineq_supports.push(support);
        }

        let mut h0 = if banded {
            HessStore::zeros_banded(layout.blocks(), n)
        } else {
            HessStore::zeros_dense(dim)
        };
        let mut q0 = DVector::zeros(dim);
        let mut c0 = 0.0;
        for (term, support) in terms.iter().zip(&term_supports) {
            let l = linalg::spd_cholesky(&term.w, "term weight")?.l();
            // Whitened pieces: D_i = L^-1 C_i, dg = L^-1 g.
            let whiten = |m: &DMatrix<f64>| -> DMatrix<f64> {
                let mut out = m.clone();
                l.solve_lower_triangular_unchecked_mut(&mut out);
                out
            };
            let whitened: Vec<(usize, DMatrix<f64>)> =
                support.iter().map(|(p, c)| (*p, whiten(c))).collect();
            let mut dg = term.g.clone();
            l.solve_lower_triangular_unchecked_mut(&mut dg);
            // Entries with equal positions contribute both orderings to the
            // diagonal block, so iterating entry pairs (skipping the strict
            // upper half by position) covers repeated times correctly.
            for (pi, di) in &whitened {
                for (pj, dj) in &whitened {
                    if pi < pj {
                        continue;
                    }
                    h0.add_block(n, *pi, *pj, &(di.transpose() * dj));
                }
                let mut seg = q0.rows_mut(pi * n, n);
                seg += di.transpose() * &dg;
            }
            c0 += dg.norm_squared();
        }

        let m_rows: usize = ineqs.iter().map(|b| b.rhs.len()).sum();
        let mut g_mat = DMatrix::zeros(m_rows, dim);
        let mut h_rhs = DVector::zeros(m_rows);
        let mut row_tags = Vec::with_capacity(m_rows);
        let mut row = 0;
        for (blk, support) in ineqs.iter().zip(&ineq_supports) {
            let k = blk.rhs.len();
            for (p, c) in support {
                g_mat.view_mut((row, p * n), (k, n)).copy_from(*c);
            }
            h_rhs.rows_mut(row, k).copy_from(&blk.rhs);
            for _ in 0..k {
                row_tags.push(blk.tag.clone());
            }
            row += k;
        }

        let eq_rows: usize = eqs.iter().map(|b| b.rhs.len()).sum();
        let mut a_eq = DMatrix::zeros(eq_rows, dim);
        let mut b_eq = DVector::zeros(eq_rows);
        let mut row = 0;
        for blk in eqs {
            let k = blk.rhs.len();
            for (t, c) in &blk.coeffs {
                if c.nrows() != k || c.ncols() != n {
                    return Err(Error::Dimension(format!(
                        "equality coefficient at time {t} is {}x{}, expected {k}x{n}",
                        c.nrows(),
                        c.ncols()
                    )));
                }
                let p = layout.position(*t)?;
                a_eq.view_mut((row, p * n), (k, n)).copy_from(c);
            }
            b_eq.rows_mut(row, k).copy_from(&blk.rhs);
            row += k;
        }

        Ok(Self {
            layout,
            h0,
            q0,
            c0,
            g_mat,
            h_rhs,
            row_tags,
            a_eq,
            b_eq,
            banded,
            terms,
        })
    }

    pub fn n_ineq(&self) -> usize {
        self.h_rhs.len()
    }

    pub fn n_eq(&self) -> usize {
        self.b_eq.len()
    }

    pub fn is_banded(&self) -> bool {
        self.banded
    }

    pub fn row_tags(&self) -> &[RowTag] {
        &self.row_tags
    }

    /// Dense `(P, q, G, h, c0)` of the equivalent standard form
    /// `min 1/2 zeta' P zeta + q' zeta + c0` s.t. `G zeta <= h`; for the
    /// reference solver and for debugging dumps.
    pub fn dense_data(&self) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>, DVector<f64>, f64) {
        (
            self.h0.to_dense(self.layout.block_dim()) * 2.0,
            -2.0 * &self.q0,
            self.g_mat.clone(),
            self.h_rhs.clone(),
            self.c0,
        )
    }

    /// Objective `zeta' H0 zeta - 2 q0' zeta + c0` via the assembled data.
    pub fn objective_at(&self, zeta: &DVector<f64>) -> f64 {
        let hz = self.h0.matvec(self.layout.block_dim(), zeta);
        zeta.dot(&hz) - 2.0 * self.q0.dot(zeta) + self.c0
    }

    /// Objective recomputed directly from the residual terms; an
    /// independent path from [`QPProblem::objective_at`].
    pub fn eval_objective(&self, zeta: &DVector<f64>) -> Result<f64> {
        eval_objective(&self.layout, &self.terms, zeta)
    }

    /// JSON snapshot of the standard-form data, for external debugging.
    pub fn dump_json(&self) -> String {
        let (p, q, g, h, c0) = self.dense_data();
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows())
                .map(|i| m.row(i).iter().copied().collect())
                .collect()
        };
        serde_json::json!({
            "times": self.layout.times(),
            "block_dim": self.layout.block_dim(),
            "P": rows(&p),
            "q": q.as_slice(),
            "G": rows(&g),
            "h": h.as_slice(),
            "A": rows(&self.a_eq),
            "b": self.b_eq.as_slice(),
            "c0": c0,
            "banded": self.banded,
        })
        .to_string()
    }

    fn kkt_info(&self, zeta: &DVector<f64>, lambda: &DVector<f64>, nu: &DVector<f64>) -> KktInfo {
        let n = self.layout.block_dim();
        let q = -2.0 * &self.q0;
        let mut grad = self.h0.matvec(n, zeta) * 2.0 + &q;
        if self.n_ineq() > 0 {
            grad += self.g_mat.transpose() * lambda;
        }
        if self.n_eq() > 0 {
            grad += self.a_eq.transpose() * nu;
        }
        let stationarity = grad.amax() / (1.0 + q.amax());
        let mut primal = 0.0f64;
        let mut complementarity = 0.0f64;
        let mut dual_min = 0.0f64;
        if self.n_ineq() > 0 {
            let slack = &self.h_rhs - &self.g_mat * zeta;
            let h_scale = 1.0 + self.h_rhs.amax();
            let obj_scale = 1.0 + self.objective_at(zeta).abs();
            for i in 0..slack.len() {
                primal = primal.max(-slack[i] / h_scale);
                complementarity = complementarity.max((lambda[i] * slack[i]).abs() / obj_scale);
                dual_min = dual_min.min(lambda[i]);
            }
        }
        if self.n_eq() > 0 {
            let gap = (&self.a_eq * zeta - &self.b_eq).amax() / (1.0 + self.b_eq.amax());
            primal = primal.max(gap);
        }
        KktInfo {
            stationarity,
            primal,
            complementarity,
            dual_min,
        }
    }

    /// Solve with default options.
    pub fn solve(&self) -> Result<QPSolution> {
        self.solve_with(&SolveOptions::default())
    }

    pub fn solve_with(&self, opts: &SolveOptions) -> Result<QPSolution> {
        let start = Instant::now();
        let n = self.layout.block_dim();
        let dim = self.layout.dim();
        let m = self.n_ineq();

        // No inequalities: a single linear solve (with equality rows via a
        // dense KKT system when present).
        if m == 0 {
            let (zeta, nu) = if self.n_eq() == 0 {
                let factor = Factor::of(&self.h0, n)?;
                (factor.solve(&self.q0), DVector::zeros(0))
            } else {
                self.solve_equality_kkt(&DMatrix::zeros(0, dim), &DVector::zeros(0))?
            };
            let kkt = self.kkt_info(&zeta, &DVector::zeros(0), &nu);
            let objective = self.objective_at(&zeta);
            return Ok(QPSolution {
                zeta,
                objective,
                lambda: DVector::zeros(0),
                slack: DVector::zeros(0),
                eq_duals: nu,
                active_slack: vec![],
                active_dual: vec![],
                kkt,
                iterations: 0,
                polished: false,
                wall_seconds: start.elapsed().as_secs_f64(),
            });
        }

        let q = -2.0 * &self.q0;
        let g = &self.g_mat;
        let h = &self.h_rhs;
        let h_scale = 1.0 + h.amax();
        let q_scale = 1.0 + q.amax();

        // Start at the unconstrained minimizer with comfortably interior
        // slacks and unit multipliers.
        let mut zeta = if self.n_eq() == 0 {
            Factor::of(&self.h0, n)?.solve(&self.q0)
        } else {
            self.solve_equality_kkt(&DMatrix::zeros(0, dim), &DVector::zeros(0))?.0
        };
        let gz = g * &zeta;
        let mut s = DVector::from_fn(m, |i, _| (h[i] - gz[i]).max(1.0));
        let mut lambda = DVector::from_element(m, 1.0);
        let mut nu = DVector::zeros(self.n_eq());

        let mut iterations = 0;
        let mut prev_primal = f64::INFINITY;
        let mut stalled = 0usize;
        loop {
            let r_d = {
                let mut r = self.h0.matvec(n, &zeta) * 2.0 + &q + g.transpose() * &lambda;
                if self.n_eq() > 0 {
                    r += self.a_eq.transpose() * &nu;
                }
                r
            };
            let r_p = g * &zeta + &s - h;
            let r_eq = if self.n_eq() > 0 {
                &self.a_eq * &zeta - &self.b_eq
            } else {
                DVector::zeros(0)
            };
            let mu = s.dot(&lambda) / m as f64;
            let primal_inf = {
                let slack_now = h - g * &zeta;
                let mut worst = slack_now.iter().fold(0.0f64, |acc, &v| acc.max(-v)) / h_scale;
                if self.n_eq() > 0 {
                    worst = worst.max(r_eq.amax() / (1.0 + self.b_eq.amax()));
                }
                worst
            };
            if r_d.amax() / q_scale <= opts.tol && primal_inf <= opts.tol && mu <= opts.tol {
                break;
            }
            if iterations >= opts.max_iter {
                return Err(Error::NoConvergence(format!(
                    "interior point did not converge in {} iterations \
                     (dual {:.2e}, primal {:.2e}, gap {:.2e})",
                    opts.max_iter,
                    r_d.amax() / q_scale,
                    primal_inf,
                    mu
                )));
            }
            // Stall-based infeasibility heuristic: multipliers blowing up
            // while the primal violation refuses to shrink.
            if iterations > 20 {
                if primal_inf > 0.9 * prev_primal && primal_inf > opts.tol {
                    stalled += 1;
                } else {
                    stalled = 0;
                }
                if stalled > 5 && lambda.amax() > 1e8 {
                    return Err(Error::Infeasible(format!(
                        "constraints appear inconsistent: violation {primal_inf:.3e} \
                         stalled while multipliers reached {:.3e}",
                        lambda.amax()
                    )));
                }
            }
            prev_primal = primal_inf;

            // Newton matrix 2 H0 + G' S^-1 Lambda G, factored once per
            // iteration and shared by predictor and corrector.
            let weights: Vec<f64> = (0..m).map(|i| lambda[i] / s[i]).collect();
            let newton = self.newton_matrix(&weights)?;
            let factor_data = NewtonFactor::build(self, &newton, n)?;

            // Predictor (affine scaling) direction.
            let rhs_aff = {
                let mut r = -&r_d + g.transpose() * &lambda;
                // - G' S^-1 Lambda r_p
                let mut scaled = r_p.clone();
                for i in 0..m {
                    scaled[i] *= weights[i];
                }
                r -= g.transpose() * scaled;
                r
            };
            let (dz_aff, _) = factor_data.solve(self, &rhs_aff, &r_eq)?;
            let ds_aff = -&r_p - g * &dz_aff;
            let dl_aff = DVector::from_fn(m, |i, _| {
                -lambda[i] - weights[i] * ds_aff[i]
            });
            let alpha_aff = step_length(&s, &ds_aff).min(step_length(&lambda, &dl_aff));
            let mu_aff = {
                let s_new = &s + &ds_aff * alpha_aff;
                let l_new = &lambda + &dl_aff * alpha_aff;
                s_new.dot(&l_new) / m as f64
            };
            let sigma = if mu > 0.0 {
                ((mu_aff / mu).powi(3)).clamp(0.05, 0.95)
            } else {
                0.05
            };

            // Corrector direction with the centering term.
            let r_c = DVector::from_fn(m, |i, _| {
                lambda[i] * s[i] + ds_aff[i] * dl_aff[i] - sigma * mu
            });
            let rhs = {
                let mut r = -&r_d;
                let mut scaled = r_p.clone();
                for i in 0..m {
                    scaled[i] = weights[i] * scaled[i] - r_c[i] / s[i];
                }
                r -= g.transpose() * scaled;
                r
            };
            let (dz, dnu) = factor_data.solve(self, &rhs, &r_eq)?;
            let ds = -&r_p - g * &dz;
            let dl = DVector::from_fn(m, |i, _| {
                -(r_c[i] + lambda[i] * ds[i]) / s[i]
            });
            let alpha = (1.0f64)
                .min(STEP_FRACTION * step_length(&s, &ds))
                .min(STEP_FRACTION * step_length(&lambda, &dl));
            zeta += &dz * alpha;
            s += &ds * alpha;
            lambda += &dl * alpha;
            if self.n_eq() > 0 {
                nu += &dnu * alpha;
            }
            for i in 0..m {
                s[i] = s[i].max(1e-300);
                lambda[i] = lambda[i].max(1e-300);
            }
            if !zeta.iter().all(|v| v.is_finite()) {
                return Err(Error::NoConvergence(
                    "interior point produced non-finite iterates".into(),
                ));
            }
            iterations += 1;
        }

        // Active-set polish: re-solve with the bound rows as equalities.
        let mut polished = false;
        let slack_now = h - g * &zeta;
        let active: Vec<usize> = (0..m)
            .filter(|&i| slack_now[i] <= opts.eps_active * (1.0 + h[i].abs()))
            .collect();
        if opts.polish {
            if let Some((z_pol, l_pol, nu_pol)) = self.try_polish(&active)? {
                let slack_pol = h - g * &z_pol;
                let feas = slack_pol.iter().all(|&v| v >= -1e-9 * h_scale);
                let duals_ok = l_pol.iter().all(|&v| v >= -1e-9);
                let clean = self.kkt_info(&z_pol, &l_pol, &nu_pol).worst()
                    <= self.kkt_info(&zeta, &lambda, &nu).worst().max(1e-9);
                if feas && duals_ok && clean {
                    zeta = z_pol;
                    lambda = l_pol;
                    nu = nu_pol;
                    polished = true;
                }
            }
        }

        let slack = h - g * &zeta;
        let active_slack: Vec<usize> = (0..m)
            .filter(|&i| slack[i] <= opts.eps_active * (1.0 + h[i].abs()))
            .collect();
        let active_dual: Vec<usize> = (0..m).filter(|&i| lambda[i] >= EPS_DUAL).collect();
        let kkt = self.kkt_info(&zeta, &lambda, &nu);
        let objective = self.objective_at(&zeta);
        Ok(QPSolution {
            zeta,
            objective,
            lambda,
            slack,
            eq_duals: nu,
            active_slack,
            active_dual,
            kkt,
            iterations,
            polished,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Newton matrix `2 H0 + G' diag(w) G` in the problem's storage.
    fn newton_matrix(&self, weights: &[f64]) -> Result<HessStore> {
        let n = self.layout.block_dim();
        let mut newton = self.h0.scaled(2.0);
        let dim = self.layout.dim();
        match &mut newton {
            HessStore::BlockTri { diag, sub } => {
                for (row, &w) in weights.iter().enumerate() {
                    // Find the (at most two, adjacent) blocks this row touches.
                    let mut touched: Vec<usize> = Vec::with_capacity(2);
                    for b in 0..diag.len() {
                        let seg = self.g_mat.view((row, b * n), (1, n));
                        if seg.iter().any(|&v| v != 0.0) {
                            touched.push(b);
                        }
                    }
                    for &bi in &touched {
                        let ci = self.g_mat.view((row, bi * n), (1, n)).into_owned();
                        for &bj in &touched {
                            if bi < bj {
                                continue;
                            }
                            let cj = self.g_mat.view((row, bj * n), (1, n)).into_owned();
                            let block = ci.transpose() * &cj * w;
                            if bi == bj {
                                diag[bi] += &block;
                            } else {
                                debug_assert_eq!(bi, bj + 1, "banded problem with wide row");
                                sub[bj] += &block;
                            }
                        }
                    }
                }
            }
            HessStore::Dense(mat) => {
                for (row, &w) in weights.iter().enumerate() {
                    let r = self.g_mat.view((row, 0), (1, dim)).into_owned();
                    *mat += r.transpose() * &r * w;
                }
            }
        }
        Ok(newton)
    }

    /// Equality-constrained solve
    /// `[2 H0, A'; A, 0] [zeta; nu] = [2 q0; b]` with `A` stacking the
    /// problem equalities and `extra` rows pinned to `extra_rhs`.
    fn solve_equality_kkt(
        &self,
        extra: &DMatrix<f64>,
        extra_rhs: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let n = self.layout.block_dim();
        let dim = self.layout.dim();
        let n_eq = self.n_eq() + extra.nrows();
        let p = self.h0.to_dense(n) * 2.0;
        let mut kkt = DMatrix::zeros(dim + n_eq, dim + n_eq);
        kkt.view_mut((0, 0), (dim, dim)).copy_from(&p);
        let mut rhs = DVector::zeros(dim + n_eq);
        rhs.rows_mut(0, dim).copy_from(&(2.0 * &self.q0));
        let mut row = dim;
        if self.n_eq() > 0 {
            kkt.view_mut((row, 0), (self.n_eq(), dim)).copy_from(&self.a_eq);
            kkt.view_mut((0, row), (dim, self.n_eq()))
                .copy_from(&self.a_eq.transpose());
            rhs.rows_mut(row, self.n_eq()).copy_from(&self.b_eq);
            row += self.n_eq();
        }
        if extra.nrows() > 0 {
            kkt.view_mut((row, 0), (extra.nrows(), dim)).copy_from(extra);
            kkt.view_mut((0, row), (dim, extra.nrows()))
                .copy_from(&extra.transpose());
            rhs.rows_mut(row, extra.nrows()).copy_from(extra_rhs);
        }
        let sol = kkt
            .full_piv_lu()
            .solve(&rhs)
            .ok_or_else(|| Error::NoConvergence("singular equality KKT system".into()))?;
        Ok((
            sol.rows(0, dim).into_owned(),
            sol.rows(dim, n_eq).into_owned(),
        ))
    }

    /// Polish candidate: exact solve with `active` rows as equalities.
    /// Returns the candidate and full-length multipliers, or None when the
    /// KKT system is singular.
    #[allow(clippy::type_complexity)]
    fn try_polish(
        &self,
        active: &[usize],
    ) -> Result<Option<(DVector<f64>, DVector<f64>, DVector<f64>)>> {
        let dim = self.layout.dim();
        let mut g_act = DMatrix::zeros(active.len(), dim);
        let mut h_act = DVector::zeros(active.len());
        for (i, &row) in active.iter().enumerate() {
            g_act.row_mut(i).copy_from(&self.g_mat.row(row));
            h_act[i] = self.h_rhs[row];
        }
        match self.solve_equality_kkt(&g_act, &h_act) {
            Ok((zeta, duals)) => {
                let mut lambda = DVector::zeros(self.n_ineq());
                let nu = duals.rows(0, self.n_eq()).into_owned();
                for (i, &row) in active.iter().enumerate() {
                    lambda[row] = duals[self.n_eq() + i].max(0.0);
                }
                Ok(Some((zeta, lambda, nu)))
            }
            Err(Error::NoConvergence(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

/// Shared Newton factorization: banded/dense Cholesky without equalities,
/// dense KKT LU with them.
enum NewtonFactor {
    Plain(Factor),
    WithEq(nalgebra::FullPivLU<f64, Dyn, Dyn>, usize),
}

impl NewtonFactor {
    fn build(problem: &QPProblem, newton: &HessStore, n: usize) -> Result<Self> {
        if problem.n_eq() == 0 {
            Ok(Self::Plain(Factor::of(newton, n)?))
        } else {
            let dim = problem.layout.dim();
            let n_eq = problem.n_eq();
            let mut kkt = DMatrix::zeros(dim + n_eq, dim + n_eq);
            kkt.view_mut((0, 0), (dim, dim)).copy_from(&newton.to_dense(n));
            kkt.view_mut((dim, 0), (n_eq, dim)).copy_from(&problem.a_eq);
            kkt.view_mut((0, dim), (dim, n_eq))
                .copy_from(&problem.a_eq.transpose());
            Ok(Self::WithEq(kkt.full_piv_lu(), dim))
        }
    }

    /// Solve for (d_zeta, d_nu) given the reduced rhs and equality residual.
    /// The rhs already accounts for the current equality duals through r_d,
    /// so the KKT system yields the dual step directly.
    fn solve(
        &self,
        problem: &QPProblem,
        rhs: &DVector<f64>,
        r_eq: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        match self {
            Self::Plain(f) => Ok((f.solve(rhs), DVector::zeros(0))),
            Self::WithEq(lu, dim) => {
                let n_eq = problem.n_eq();
                let mut full = DVector::zeros(dim + n_eq);
                full.rows_mut(0, *dim).copy_from(rhs);
                full.rows_mut(*dim, n_eq).copy_from(&(-r_eq));
                let sol = lu
                    .solve(&full)
                    .ok_or_else(|| Error::NoConvergence("singular Newton KKT system".into()))?;
                Ok((
                    sol.rows(0, *dim).into_owned(),
                    sol.rows(*dim, n_eq).into_owned(),
                ))
            }
        }
    }
}

/// Largest alpha in (0, 1] with `v + alpha dv >= 0`.
fn step_length(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut alpha = 1.0f64;
    for i in 0..v.len() {
        if dv[i] < -1e-300 {
            alpha = alpha.min(-v[i] / dv[i]);
        }
    }
    alpha.max(0.0)
}

/// Objective `sum |residual|^2_W` evaluated directly from the terms.
pub fn eval_objective(layout: &Layout, terms: &[QuadTerm], zeta: &DVector<f64>) -> Result<f64> {
    let mut total = 0.0;
    for term in terms {
        let r = term.residual(|t| layout.block(zeta, t).expect("term time in layout"));
        total += linalg::weighted_sq_norm(&r, &term.w, "term weight")?;
    }
    Ok(total)
}

/// Rows at their bound by the relative slack rule.
pub fn active_set(g: &DMatrix<f64>, h: &DVector<f64>, zeta: &DVector<f64>, eps: f64) -> Vec<usize> {
    let slack = h - g * zeta;
    (0..h.len())
        .filter(|&i| slack[i] <= eps * (1.0 + h[i].abs()))
        .collect()
}

/// Brute-force reference solver for tiny problems.
pub mod reference {
    use super::*;

    /// Minimize `1/2 zeta' P zeta + q' zeta` subject to `G zeta <= h` by
    /// enumerating active subsets and solving each equality KKT system.
    /// Exponential in the row count; refuses more than 20 rows.
    pub fn solve_by_enumeration(
        p: &DMatrix<f64>,
        q: &DVector<f64>,
        g: &DMatrix<f64>,
        h: &DVector<f64>,
    ) -> Result<(DVector<f64>, f64, Vec<usize>)> {
        let m = h.len();
        if m > 20 {
            return Err(Error::InvalidInput(format!(
                "enumeration over {m} rows is not tractable"
            )));
        }
        let dim = p.nrows();
        let h_scale = 1.0 + h.amax();
        let mut best: Option<(DVector<f64>, f64, Vec<usize>)> = None;
        for mask in 0u32..(1u32 << m) {
            let rows: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            let k = rows.len();
            let mut kkt = DMatrix::zeros(dim + k, dim + k);
            kkt.view_mut((0, 0), (dim, dim)).copy_from(p);
            for (i, &r) in rows.iter().enumerate() {
                kkt.view_mut((dim + i, 0), (1, dim)).copy_from(&g.row(r));
                kkt.view_mut((0, dim + i), (dim, 1))
                    .copy_from(&g.row(r).transpose());
            }
            let mut rhs = DVector::zeros(dim + k);
            rhs.rows_mut(0, dim).copy_from(&(-q));
            for (i, &r) in rows.iter().enumerate() {
                rhs[dim + i] = h[r];
            }
            let Some(sol) = kkt.full_piv_lu().solve(&rhs) else {
                continue;
            };
            let zeta = sol.rows(0, dim).into_owned();
            let duals = sol.rows(dim, k).into_owned();
            if duals.iter().any(|&v| v < -1e-8) {
                continue;
            }
            let slack = h - g * &zeta;
            if slack.iter().any(|&v| v < -1e-8 * h_scale) {
                continue;
            }
            let value = 0.5 * zeta.dot(&(p * &zeta)) + q.dot(&zeta);
            if best.as_ref().is_none_or(|(_, v, _)| value < *v) {
                best = Some((zeta, value, rows));
            }
        }
        best.ok_or_else(|| Error::Infeasible("no feasible active subset found".into()))
    }
}
