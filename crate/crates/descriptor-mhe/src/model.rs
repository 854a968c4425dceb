//! System description, structural validation, and trajectory simulation.
//!
//! A [`DescriptorSystem`] holds the matrices of
//!
//! ```text
//!     E x_{k+1} = A x_k + B u_k + w_k,      w_k ~ N(0, Q)
//!       y_{k+1} = H x_{k+1} + v_k,          v_k ~ N(0, R)
//! ```
//!
//! together with the noise weights. `E` may be rectangular (n1 x n with
//! n1 <= n); states unspecified by the dynamics are pinned down by
//! measurements, which is what the `[E; H]` full-column-rank assumption
//! guarantees.
//!
//! Simulation of underdetermined dynamics uses the minimum-norm solution of
//! `E x = rhs` plus caller-supplied coefficients along an orthonormal basis
//! of the null space of `E` (see [`Stepper`]). Constraint violations along a
//! simulated trajectory are reported, never enforced: the constraints are
//! prior knowledge for the estimator, not physics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::{Error, Result};

/// Consistency tolerance for simulated dynamics, relative to the step rhs.
pub const SIM_TOL: f64 = 1e-10;

/// Matrices of the descriptor model. Construct via [`DescriptorSystem::new`],
/// which cross-checks every dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSystem {
    pub e: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl DescriptorSystem {
    pub fn new(
        e: DMatrix<f64>,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        h: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self> {
        let (n1, n) = e.shape();
        let m = h.nrows();
        let pair = |name: &str, got: (usize, usize), want: (usize, usize)| {
            Error::Dimension(format!(
                "{name} is {}x{}, expected {}x{} to match E ({n1}x{n}) and H ({m}x{n})",
                got.0, got.1, want.0, want.1
            ))
        };
        if a.shape() != (n1, n) {
            return Err(pair("A", a.shape(), (n1, n)));
        }
        if b.nrows() != n1 {
            return Err(pair("B", b.shape(), (n1, b.ncols())));
        }
        if h.ncols() != n {
            return Err(pair("H", h.shape(), (m, n)));
        }
        if q.shape() != (n1, n1) {
            return Err(pair("Q", q.shape(), (n1, n1)));
        }
        if r.shape() != (m, m) {
            return Err(pair("R", r.shape(), (m, m)));
        }
        Ok(Self { e, a, b, h, q, r })
    }

    /// State dimension n.
    pub fn n(&self) -> usize {
        self.e.ncols()
    }

    /// Dynamics row count n1.
    pub fn n1(&self) -> usize {
        self.e.nrows()
    }

    /// Measurement dimension m.
    pub fn m(&self) -> usize {
        self.h.nrows()
    }

    /// Input dimension q.
    pub fn q_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Check the structural assumptions; see [`ValidationReport`].
    pub fn validate(&self) -> ValidationReport {
        validate_system(self)
    }
}

/// One assumption check with its numerical evidence.
#[derive(Debug, Clone, Serialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Result of [`validate_system`]: one entry per structural assumption.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn spd_check(name: &str, m: &DMatrix<f64>) -> AssumptionCheck {
    let dim = m.nrows();
    let asym = (m - m.transpose()).norm();
    let scale = m.norm().max(1.0);
    let symmetric = asym <= 1e-12 * scale;
    let mut sym = m.clone();
    linalg::symmetrize(&mut sym);
    let eigs = sym.symmetric_eigenvalues();
    let min_eig = eigs.min();
    let max_abs = eigs.iter().fold(0.0f64, |acc, &e| acc.max(e.abs()));
    let tol = dim as f64 * max_abs * linalg::RANK_REL_TOL;
    let positive = min_eig > tol;
    AssumptionCheck {
        name: format!("{name} symmetric positive definite"),
        passed: symmetric && positive,
        detail: format!("min eigenvalue {min_eig:.3e}, asymmetry {asym:.3e}"),
    }
}

/// Check the three structural assumptions (full row rank of `[E A]`, full
/// column rank of `[E; H]`, positive definite noise weights) and report the
/// computed numerical ranks.
pub fn validate_system(sys: &DescriptorSystem) -> ValidationReport {
    let n = sys.n();
    let n1 = sys.n1();

    let mut ea = DMatrix::zeros(n1, 2 * n);
    ea.view_mut((0, 0), (n1, n)).copy_from(&sys.e);
    ea.view_mut((0, n), (n1, n)).copy_from(&sys.a);
    let rank_ea = linalg::numerical_rank(&ea);

    let mut eh = DMatrix::zeros(n1 + sys.m(), n);
    eh.view_mut((0, 0), (n1, n)).copy_from(&sys.e);
    eh.view_mut((n1, 0), (sys.m(), n)).copy_from(&sys.h);
    let rank_eh = linalg::numerical_rank(&eh);

    let checks = vec![
        AssumptionCheck {
            name: "[E A] full row rank".into(),
            passed: rank_ea == n1,
            detail: format!("rank([E A]) = {rank_ea}, rows = {n1}"),
        },
        AssumptionCheck {
            name: "[E; H] full column rank".into(),
            passed: rank_eh == n,
            detail: format!("rank([E; H]) = {rank_eh}, columns = {n}"),
        },
        spd_check("Q", &sys.q),
        spd_check("R", &sys.r),
    ];
    ValidationReport { checks }
}

/// Orthonormal basis of `{v : E v = 0}` as columns; empty when `E` has full
/// column rank.
pub fn null_basis(e: &DMatrix<f64>) -> DMatrix<f64> {
    linalg::null_basis(e)
}

/// Polyhedral stage constraints `E_c x_{k+1} <= A_c x_k + d_c`. An empty set
/// (zero rows) means unconstrained estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub e_c: DMatrix<f64>,
    pub a_c: DMatrix<f64>,
    pub d_c: DVector<f64>,
}

impl ConstraintSet {
    pub fn new(e_c: DMatrix<f64>, a_c: DMatrix<f64>, d_c: DVector<f64>) -> Result<Self> {
        if e_c.nrows() != a_c.nrows() || e_c.nrows() != d_c.len() {
            return Err(Error::Dimension(format!(
                "constraint row counts disagree: E_c has {}, A_c has {}, d_c has {}",
                e_c.nrows(),
                a_c.nrows(),
                d_c.len()
            )));
        }
        if e_c.ncols() != a_c.ncols() {
            return Err(Error::Dimension(format!(
                "constraint column counts disagree: E_c has {}, A_c has {}",
                e_c.ncols(),
                a_c.ncols()
            )));
        }
        Ok(Self { e_c, a_c, d_c })
    }

    /// The unconstrained set over states of dimension `n`.
    pub fn empty(n: usize) -> Self {
        Self {
            e_c: DMatrix::zeros(0, n),
            a_c: DMatrix::zeros(0, n),
            d_c: DVector::zeros(0),
        }
    }

    pub fn n_ineq(&self) -> usize {
        self.d_c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.n_ineq() == 0
    }

    /// Row-wise violation amounts `E_c x_next - A_c x - d_c` (positive means
    /// violated).
    pub fn violation(&self, x: &DVector<f64>, x_next: &DVector<f64>) -> DVector<f64> {
        &self.e_c * x_next - &self.a_c * x - &self.d_c
    }
}

/// Initial-state information: mean and uncertainty weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    pub x0: DVector<f64>,
    pub p0: DMatrix<f64>,
}

impl Prior {
    pub fn new(x0: DVector<f64>, p0: DMatrix<f64>) -> Result<Self> {
        if p0.nrows() != x0.len() || p0.ncols() != x0.len() {
            return Err(Error::Dimension(format!(
                "P0 is {}x{}, expected {n}x{n} to match x0",
                p0.nrows(),
                p0.ncols(),
                n = x0.len()
            )));
        }
        Ok(Self { x0, p0 })
    }

    /// Predicted weight `A P0 A' + Q` used to anchor the first estimate.
    pub fn predicted_weight(&self, sys: &DescriptorSystem) -> DMatrix<f64> {
        let mut p = &sys.a * &self.p0 * sys.a.transpose() + &sys.q;
        linalg::symmetrize(&mut p);
        p
    }
}

/// A simulated state trajectory `x_0 .. x_T` with the inputs and process
/// noise that produced it, per-step consistency residuals, and the indices
/// of steps whose transition violated the constraint set.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub process_noise: Vec<DVector<f64>>,
    pub residuals: Vec<f64>,
    pub violated_steps: Vec<usize>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }

    pub fn has_violations(&self) -> bool {
        !self.violated_steps.is_empty()
    }
}

/// Measurements `y_1 .. y_T` and the measurement noise that produced them;
/// `y(k)` indexes by time (k >= 1), `ys[i]` holds `y_{i+1}`.
#[derive(Debug, Clone)]
pub struct MeasurementRecord {
    pub ys: Vec<DVector<f64>>,
    pub vs: Vec<DVector<f64>>,
}

impl MeasurementRecord {
    /// Generate `y_{k+1} = H x_{k+1} + v_k` for every step of `states`.
    pub fn generate(sys: &DescriptorSystem, states: &[DVector<f64>], vs: Vec<DVector<f64>>) -> Self {
        let ys = states
            .iter()
            .skip(1)
            .zip(vs.iter())
            .map(|(x, v)| &sys.h * x + v)
            .collect();
        Self { ys, vs }
    }

    /// Measurement at time `k` (1-based).
    pub fn y(&self, k: usize) -> &DVector<f64> {
        &self.ys[k - 1]
    }

    pub fn horizon(&self) -> usize {
        self.ys.len()
    }
}

/// Precomputed machinery for advancing the dynamics one step: the
/// pseudoinverse of `E` (minimum-norm particular solution) and an
/// orthonormal null-space basis for the free directions.
#[derive(Debug, Clone)]
pub struct Stepper {
    e_pinv: DMatrix<f64>,
    basis: DMatrix<f64>,
}

impl Stepper {
    pub fn new(sys: &DescriptorSystem) -> Self {
        Self {
            e_pinv: linalg::pinv(&sys.e),
            basis: linalg::null_basis(&sys.e),
        }
    }

    /// Number of free directions (columns of the null basis).
    pub fn free_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Minimum-norm solution of `E x = A x_k + B u_k + w_k`, verified
    /// consistent; `step` is only used in the error message.
    pub fn min_norm_next(
        &self,
        sys: &DescriptorSystem,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
        step: usize,
    ) -> Result<DVector<f64>> {
        let rhs = &sys.a * x + &sys.b * u + w;
        let x_next = &self.e_pinv * &rhs;
        let resid = (&sys.e * &x_next - &rhs).amax();
        if resid > SIM_TOL * (1.0 + rhs.amax()) {
            return Err(Error::Infeasible(format!(
                "dynamics inconsistent at step {step}: residual {resid:.3e} \
                 (rank-deficient rows of E cannot realize the right-hand side)"
            )));
        }
        Ok(x_next)
    }

    /// Full step: minimum-norm solution plus `basis * free` coefficients.
    pub fn next(
        &self,
        sys: &DescriptorSystem,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
        free: &DVector<f64>,
        step: usize,
    ) -> Result<DVector<f64>> {
        if free.len() != self.free_dim() {
            return Err(Error::Dimension(format!(
                "free coefficients have length {}, null basis has {} columns",
                free.len(),
                self.free_dim()
            )));
        }
        let mut x_next = self.min_norm_next(sys, x, u, w, step)?;
        if self.free_dim() > 0 {
            x_next += &self.basis * free;
        }
        Ok(x_next)
    }
}

/// Simulate `t` steps from `x0`. `free_series[k]` supplies the null-space
/// coefficients of step `k` (each of length [`Stepper::free_dim`]);
/// `process_noise[k]` is `w_k`, `meas_noise[k]` is `v_k` (producing
/// `y_{k+1}`). Constraint violations are recorded on the trajectory, not
/// enforced.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    sys: &DescriptorSystem,
    constraints: &ConstraintSet,
    x0: &DVector<f64>,
    inputs: &[DVector<f64>],
    process_noise: &[DVector<f64>],
    meas_noise: &[DVector<f64>],
    free_series: &[DVector<f64>],
    t: usize,
) -> Result<(Trajectory, MeasurementRecord)> {
    if x0.len() != sys.n() {
        return Err(Error::Dimension(format!(
            "x0 has length {}, state dimension is {}",
            x0.len(),
            sys.n()
        )));
    }
    for (name, len) in [
        ("inputs", inputs.len()),
        ("process_noise", process_noise.len()),
        ("meas_noise", meas_noise.len()),
        ("free_series", free_series.len()),
    ] {
        if len < t {
            return Err(Error::Dimension(format!(
                "{name} supplies {len} steps, horizon is {t}"
            )));
        }
    }
    let stepper = Stepper::new(sys);
    let mut states = Vec::with_capacity(t + 1);
    let mut residuals = Vec::with_capacity(t);
    let mut violated = Vec::new();
    states.push(x0.clone());
    for k in 0..t {
        let x_next = stepper.next(
            sys,
            &states[k],
            &inputs[k],
            &process_noise[k],
            &free_series[k],
            k,
        )?;
        let rhs = &sys.a * &states[k] + &sys.b * &inputs[k] + &process_noise[k];
        residuals.push((&sys.e * &x_next - &rhs).amax());
        if !constraints.is_empty() {
            let viol = constraints.violation(&states[k], &x_next);
            if viol.iter().any(|&v| v > 1e-9 * (1.0 + constraints.d_c.amax())) {
                violated.push(k);
            }
        }
        states.push(x_next);
    }
    let record = MeasurementRecord::generate(sys, &states, meas_noise[..t].to_vec());
    let traj = Trajectory {
        states,
        inputs: inputs[..t].to_vec(),
        process_noise: process_noise[..t].to_vec(),
        residuals,
        violated_steps: violated,
    };
    Ok((traj, record))
}

// ---------------------------------------------------------------------------
// JSON interchange
// ---------------------------------------------------------------------------

/// On-disk system description: row-major nested arrays for every matrix,
/// optional constraint block and prior. Unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemFile {
    #[serde(rename = "E")]
    pub e: Vec<Vec<f64>>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
    #[serde(rename = "H")]
    pub h: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraints: Option<ConstraintsFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<PriorFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintsFile {
    #[serde(rename = "Ec")]
    pub e_c: Vec<Vec<f64>>,
    #[serde(rename = "Ac")]
    pub a_c: Vec<Vec<f64>>,
    #[serde(rename = "dc")]
    pub d_c: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorFile {
    pub x0: Vec<f64>,
    #[serde(rename = "P0")]
    pub p0: Vec<Vec<f64>>,
}

/// Convert row-major nested arrays into a matrix; rejects ragged rows.
pub fn matrix_from_rows(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Ok(DMatrix::zeros(0, 0));
    }
    let ncols = rows[0].len();
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(Error::InvalidInput(format!(
                "{name}: row {i} has {} entries, row 0 has {ncols}",
                r.len()
            )));
        }
    }
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        ncols,
        rows.iter().flatten().copied(),
    ))
}

/// Row-major nested arrays from a matrix (inverse of [`matrix_from_rows`]).
pub fn rows_from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

impl SystemFile {
    pub fn parse_str(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::InvalidInput(format!("system file: {e}")))
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    /// Materialize and cross-check every dimension. Missing constraint block
    /// means unconstrained; missing prior defaults to zero mean, identity
    /// weight.
    pub fn into_parts(self) -> Result<(DescriptorSystem, ConstraintSet, Prior)> {
        let e = matrix_from_rows("E", &self.e)?;
        let n1 = e.nrows();
        let n = e.ncols();
        let a = matrix_from_rows("A", &self.a)?;
        let b = match &self.b {
            Some(rows) => matrix_from_rows("B", rows)?,
            None => DMatrix::zeros(n1, 0),
        };
        let h = matrix_from_rows("H", &self.h)?;
        let q = matrix_from_rows("Q", &self.q)?;
        let r = matrix_from_rows("R", &self.r)?;
        let sys = DescriptorSystem::new(e, a, b, h, q, r)?;
        let constraints = match &self.constraints {
            Some(c) => {
                let e_c = matrix_from_rows("Ec", &c.e_c)?;
                let a_c = matrix_from_rows("Ac", &c.a_c)?;
                if e_c.ncols() != n && e_c.nrows() > 0 {
                    return Err(Error::Dimension(format!(
                        "Ec has {} columns, state dimension is {n}",
                        e_c.ncols()
                    )));
                }
                ConstraintSet::new(e_c, a_c, DVector::from_vec(c.d_c.clone()))?
            }
            None => ConstraintSet::empty(n),
        };
        let prior = match &self.prior {
            Some(p) => Prior::new(
                DVector::from_vec(p.x0.clone()),
                matrix_from_rows("P0", &p.p0)?,
            )?,
            None => Prior::new(DVector::zeros(n), DMatrix::identity(n, n))?,
        };
        if prior.x0.len() != n {
            return Err(Error::Dimension(format!(
                "prior x0 has length {}, state dimension is {n}",
                prior.x0.len()
            )));
        }
        Ok((sys, constraints, prior))
    }

    pub fn from_parts(sys: &DescriptorSystem, constraints: &ConstraintSet, prior: &Prior) -> Self {
        Self {
            e: rows_from_matrix(&sys.e),
            a: rows_from_matrix(&sys.a),
            b: Some(rows_from_matrix(&sys.b)),
            h: rows_from_matrix(&sys.h),
            q: rows_from_matrix(&sys.q),
            r: rows_from_matrix(&sys.r),
            constraints: if constraints.is_empty() {
                None
            } else {
                Some(ConstraintsFile {
                    e_c: rows_from_matrix(&constraints.e_c),
                    a_c: rows_from_matrix(&constraints.a_c),
                    d_c: constraints.d_c.iter().copied().collect(),
                })
            },
            prior: Some(PriorFile {
                x0: prior.x0.iter().copied().collect(),
                p0: rows_from_matrix(&prior.p0),
            }),
        }
    }
}
