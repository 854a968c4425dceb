//! Recursive filtering, smoothing, and steady-state analysis for the
//! descriptor model.
//!
//! The two quadratic-completion primitives [`condition_update`] and
//! [`fusion_update`] are the whole algebraic substance of this module;
//! everything else wires them to the system matrices:
//!
//! * [`condition_update`]: for weights `P`, `S` and map `M`,
//!   `|x - z|^2_P + |y - M x|^2_S = |x - x1|^2_G1 + |y - M z|^2_{M P M' + S}`
//!   with `G1 = (P^-1 + M' S^-1 M)^-1` and `x1 = z + G1 M' S^-1 (y - M z)`.
//! * [`fusion_update`]: `|E x - z|^2_P + |y - M x|^2_S =
//!   |x - x2|^2_G2 + |E x2 - z|^2_P + |y - M x2|^2_S`
//!   with `G2 = (E' P^-1 E + M' S^-1 M)^-1` and
//!   `x2 = G2 (E' P^-1 z + M' S^-1 y)`.
//!
//! All weighted norms follow the crate convention `|z|^2_W = z' W^-1 z`.
//!
//! Filtering alternates fusion (measurement) and prediction steps; the
//! smoother statistics produced by [`smoother_params`] express the optimal
//! stage-k state as an affine function of the next state, which is what the
//! moving-window estimators consume. [`Propagator`] composes consecutive
//! smoother maps together with the exact weight of the eliminated stages, so
//! a long unconstrained chain collapses to a single coupling term between
//! its endpoints.

use nalgebra::{DMatrix, DVector};

use crate::linalg;
use crate::model::{DescriptorSystem, MeasurementRecord, Prior};
use crate::{Error, Result};

/// Filter state at time k: estimate and weight after absorbing `y_k`, plus
/// the one-step predicted weight `P_k^- = A P_k^+ A' + Q`.
#[derive(Debug, Clone)]
pub struct FilterState {
    pub x_plus: DVector<f64>,
    pub p_plus: DMatrix<f64>,
    pub p_minus: DMatrix<f64>,
}

impl FilterState {
    /// Time 0 state from the prior.
    pub fn seed(sys: &DescriptorSystem, prior: &Prior) -> Self {
        Self {
            x_plus: prior.x0.clone(),
            p_plus: prior.p0.clone(),
            p_minus: prior.predicted_weight(sys),
        }
    }

    /// Predicted right-hand side `A x^+ + B u` for the next transition.
    pub fn predicted_rhs(&self, sys: &DescriptorSystem, u: &DVector<f64>) -> DVector<f64> {
        &sys.a * &self.x_plus + &sys.b * u
    }
}

/// Affine map `x_k = gain * x_{k+1} + base` describing the optimal stage-k
/// state given its successor.
#[derive(Debug, Clone)]
pub struct SmootherMap {
    pub gain: DMatrix<f64>,
    pub base: DVector<f64>,
}

impl SmootherMap {
    pub fn eval(&self, x_next: &DVector<f64>) -> DVector<f64> {
        &self.gain * x_next + &self.base
    }
}

/// Smoother statistics at stage k: the affine map and the weight of the
/// residual term `|x_k - map(x_{k+1})|^2_gamma`.
#[derive(Debug, Clone)]
pub struct SmootherParams {
    pub gamma: DMatrix<f64>,
    pub map: SmootherMap,
}

/// Everything the window estimators need about time k: the filter state
/// (after `y_k`), the smoother statistics (which also depend on `u_k`), and
/// the scalar cost `constant` absorbed by the measurement update at k.
#[derive(Debug, Clone)]
pub struct StageRecord {
    pub filter: FilterState,
    pub smoother: SmootherParams,
    pub constant: f64,
}

/// Exact completion of `|x - z|^2_P + |y - M x|^2_S` in `x`.
/// Returns `(G1, x1)`.
pub fn condition_update(
    p: &DMatrix<f64>,
    s: &DMatrix<f64>,
    m: &DMatrix<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let p_inv = linalg::spd_inverse(p, "condition weight P")?;
    let s_inv = linalg::spd_inverse(s, "condition weight S")?;
    let mt_s_inv = m.transpose() * &s_inv;
    let mut info = p_inv + &mt_s_inv * m;
    linalg::symmetrize(&mut info);
    let gamma = linalg::spd_inverse(&info, "conditioned information")?;
    let x1 = z + &gamma * (&mt_s_inv * (y - m * z));
    Ok((gamma, x1))
}

/// Exact completion of `|E x - z|^2_P + |y - M x|^2_S` in `x`.
/// Returns `(G2, x2)`; the residual terms evaluated at `x2` are the
/// constant left over by the completion.
pub fn fusion_update(
    p: &DMatrix<f64>,
    s: &DMatrix<f64>,
    e: &DMatrix<f64>,
    m: &DMatrix<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let p_inv = linalg::spd_inverse(p, "fusion weight P")?;
    let s_inv = linalg::spd_inverse(s, "fusion weight S")?;
    let et_p_inv = e.transpose() * &p_inv;
    let mt_s_inv = m.transpose() * &s_inv;
    let mut info = &et_p_inv * e + &mt_s_inv * m;
    linalg::symmetrize(&mut info);
    let gamma = linalg::spd_inverse(&info, "fused information")?;
    let x2 = &gamma * (&et_p_inv * z + &mt_s_inv * y);
    Ok((gamma, x2))
}

/// Prediction step: `(A x^+ + B u, A P^+ A' + Q)`.
pub fn time_update(
    sys: &DescriptorSystem,
    x_plus: &DVector<f64>,
    p_plus: &DMatrix<f64>,
    u: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let z = &sys.a * x_plus + &sys.b * u;
    let mut p_minus = &sys.a * p_plus * sys.a.transpose() + &sys.q;
    linalg::symmetrize(&mut p_minus);
    (z, p_minus)
}

/// Measurement step: fuse the prediction `(z, p_minus)` with `y` through the
/// dynamics row `E` and measurement row `H`. Returns the updated estimate
/// and weight plus the scalar cost absorbed at the optimum,
/// `|E x^+ - z|^2_{P^-} + |y - H x^+|^2_R`.
pub fn measurement_update(
    sys: &DescriptorSystem,
    p_minus: &DMatrix<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    let (p_plus, x_plus) = fusion_update(p_minus, &sys.r, &sys.e, &sys.h, z, y)?;
    let dyn_resid = &sys.e * &x_plus - z;
    let meas_resid = y - &sys.h * &x_plus;
    let constant = linalg::weighted_sq_norm(&dyn_resid, p_minus, "prediction weight")?
        + linalg::weighted_sq_norm(&meas_resid, &sys.r, "measurement weight")?;
    Ok((x_plus, p_plus, constant))
}

/// One full filter step from time k to k+1: predict with `u_k`, fuse with
/// `y_{k+1}`. Returns the new state and the absorbed scalar cost.
pub fn advance(
    sys: &DescriptorSystem,
    state: &FilterState,
    u: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<(FilterState, f64)> {
    let z = state.predicted_rhs(sys, u);
    let (x_plus, p_plus, constant) = measurement_update(sys, &state.p_minus, &z, y)?;
    let mut p_minus = &sys.a * &p_plus * sys.a.transpose() + &sys.q;
    linalg::symmetrize(&mut p_minus);
    Ok((
        FilterState {
            x_plus,
            p_plus,
            p_minus,
        },
        constant,
    ))
}

/// Smoother statistics at stage k from the filter state at k and the input
/// `u_k`: weight `G = ((P^+)^-1 + A' Q^-1 A)^-1`, gain `G A' Q^-1 E`, and
/// base `x^+ - G A' Q^-1 (A x^+ + B u)`.
pub fn smoother_params(
    sys: &DescriptorSystem,
    state: &FilterState,
    u: &DVector<f64>,
) -> Result<SmootherParams> {
    let p_inv = linalg::spd_inverse(&state.p_plus, "filter weight")?;
    let q_inv = linalg::spd_inverse(&sys.q, "process weight Q")?;
    let at_q_inv = sys.a.transpose() * &q_inv;
    let mut info = p_inv + &at_q_inv * &sys.a;
    linalg::symmetrize(&mut info);
    let gamma = linalg::spd_inverse(&info, "smoother information")?;
    let gain = &gamma * &at_q_inv * &sys.e;
    let base = &state.x_plus - &gamma * (&at_q_inv * state.predicted_rhs(sys, u));
    Ok(SmootherParams {
        gamma,
        map: SmootherMap { gain, base },
    })
}

/// Build the full stage record at time k (filter state, smoother statistics
/// for input `u_k`, absorbed measurement cost).
pub fn stage_record(
    sys: &DescriptorSystem,
    filter: FilterState,
    u: &DVector<f64>,
    constant: f64,
) -> Result<StageRecord> {
    let smoother = smoother_params(sys, &filter, u)?;
    Ok(StageRecord {
        filter,
        smoother,
        constant,
    })
}

/// Run the filter over `y_1 .. y_t`, returning states at times `0 ..= t`.
pub fn run_filter(
    sys: &DescriptorSystem,
    prior: &Prior,
    inputs: &[DVector<f64>],
    record: &MeasurementRecord,
    t: usize,
) -> Result<Vec<FilterState>> {
    let mut states = Vec::with_capacity(t + 1);
    states.push(FilterState::seed(sys, prior));
    for k in 1..=t {
        let (next, _) = advance(sys, &states[k - 1], &inputs[k - 1], record.y(k))?;
        states.push(next);
    }
    Ok(states)
}

// ---------------------------------------------------------------------------
// Steady state
// ---------------------------------------------------------------------------

/// Converged filter and smoother weights.
#[derive(Debug, Clone)]
pub struct SteadyState {
    pub p_plus: DMatrix<f64>,
    pub p_minus: DMatrix<f64>,
    /// Steady-state smoother weight.
    pub gamma: DMatrix<f64>,
    /// Steady-state smoother gain (one link of the coupling chain).
    pub m_mat: DMatrix<f64>,
    pub iterations: usize,
}

/// Iterate the filter weight recursion to its fixed point, starting from
/// `p0`. Converges when the update shrinks below `tol` relative to the
/// iterate's size; the fixed-point residual is re-verified before returning.
pub fn riccati_steady_state(
    sys: &DescriptorSystem,
    p0: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<SteadyState> {
    let n = sys.n();
    if p0.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "P0 is {}x{}, state dimension is {n}",
            p0.nrows(),
            p0.ncols()
        )));
    }
    let step = |p_plus: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let mut p_minus = &sys.a * p_plus * sys.a.transpose() + &sys.q;
        linalg::symmetrize(&mut p_minus);
        let p_minus_inv = linalg::spd_inverse(&p_minus, "predicted weight")?;
        let r_inv = linalg::spd_inverse(&sys.r, "measurement weight R")?;
        let mut info =
            sys.e.transpose() * &p_minus_inv * &sys.e + sys.h.transpose() * &r_inv * &sys.h;
        linalg::symmetrize(&mut info);
        linalg::spd_inverse(&info, "updated information")
    };
    let mut p = p0.clone();
    linalg::symmetrize(&mut p);
    let mut iterations = 0;
    loop {
        let next = step(&p)?;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NoConvergence(
                "weight recursion produced non-finite values".into(),
            ));
        }
        let delta = (&next - &p).norm();
        let scale = 1.0 + next.norm();
        p = next;
        iterations += 1;
        if delta <= tol * scale {
            break;
        }
        if iterations >= max_iter {
            return Err(Error::NoConvergence(format!(
                "weight recursion did not settle in {max_iter} iterations \
                 (last update {delta:.3e} vs tolerance {:.3e})",
                tol * scale
            )));
        }
    }
    let fixed = step(&p)?;
    let resid = (&fixed - &p).norm();
    if resid > 10.0 * tol * (1.0 + p.norm()) {
        return Err(Error::NoConvergence(format!(
            "fixed-point residual {resid:.3e} exceeds tolerance after convergence"
        )));
    }
    let mut p_minus = &sys.a * &p * sys.a.transpose() + &sys.q;
    linalg::symmetrize(&mut p_minus);
    let p_inv = linalg::spd_inverse(&p, "steady filter weight")?;
    let q_inv = linalg::spd_inverse(&sys.q, "process weight Q")?;
    let at_q_inv = sys.a.transpose() * &q_inv;
    let mut info = p_inv + &at_q_inv * &sys.a;
    linalg::symmetrize(&mut info);
    let gamma = linalg::spd_inverse(&info, "steady smoother information")?;
    let m_mat = &gamma * &at_q_inv * &sys.e;
    Ok(SteadyState {
        p_plus: p,
        p_minus,
        gamma,
        m_mat,
        iterations,
    })
}

// ---------------------------------------------------------------------------
// Chain composition
// ---------------------------------------------------------------------------

/// Composition of consecutive smoother maps with the exact residual weight
/// of the eliminated interior stages.
///
/// After absorbing stages `j0 .. j0+q-1`, the minimum over the interior
/// states of the chain `sum_k |x_k - map_k(x_{k+1})|^2_{gamma_k}` given both
/// endpoints is `|x_{j0} - m_hat x_{j0+q} - r_hat|^2_{w_hat}`:
///
/// * `m_hat` is the product of the absorbed gains,
/// * `r_hat` accumulates the absorbed bases through the partial products,
/// * `w_hat` accumulates the absorbed weights congruence-transformed by the
///   partial products (the exact elimination weight; using the first stage's
///   weight alone would only bound it).
#[derive(Debug, Clone)]
pub struct Propagator {
    pub m_hat: DMatrix<f64>,
    pub r_hat: DVector<f64>,
    pub w_hat: DMatrix<f64>,
    pub absorbed: usize,
}

impl Propagator {
    /// Fresh propagator over states of dimension `n`; absorbing nothing maps
    /// the endpoint to itself with zero residual.
    pub fn identity(n: usize) -> Self {
        Self {
            m_hat: DMatrix::identity(n, n),
            r_hat: DVector::zeros(n),
            w_hat: DMatrix::zeros(n, n),
            absorbed: 0,
        }
    }

    /// Absorb the next interior stage. Stages must be fed left to right.
    pub fn absorb(&mut self, stage: &SmootherParams) {
        self.r_hat += &self.m_hat * &stage.map.base;
        self.w_hat += &self.m_hat * &stage.gamma * self.m_hat.transpose();
        self.m_hat = &self.m_hat * &stage.map.gain;
        linalg::symmetrize(&mut self.w_hat);
        self.absorbed += 1;
    }

    /// Evaluate the composed map at the right endpoint.
    pub fn eval(&self, x_right: &DVector<f64>) -> DVector<f64> {
        &self.m_hat * x_right + &self.r_hat
    }
}

/// Absorb one stage into the propagator (functional form of
/// [`Propagator::absorb`]).
pub fn propagator_advance(prop: &mut Propagator, stage: &SmootherParams) {
    prop.absorb(stage);
}

/// Size of the coupling `|gamma^-1 m|` in the induced 2-norm: how strongly
/// the right endpoint of an eliminated chain still steers its left end,
/// relative to the local weight.
pub fn coupling_norm(gamma: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<f64> {
    let scaled = linalg::spd_solve(gamma, m, "coupling weight")?;
    Ok(linalg::induced_2_norm(&scaled))
}

/// Smallest lag `q >= 1` whose steady-state coupling norm
/// `|gamma^-1 m^q|` falls below `bound`. Returns the lag and the achieved
/// norm. Fails with the last achieved norm if `q_max` lags are not enough.
pub fn select_horizon(steady: &SteadyState, bound: f64, q_max: usize) -> Result<(usize, f64)> {
    if bound <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "coupling bound must be positive, got {bound}"
        )));
    }
    if q_max == 0 {
        return Err(Error::InvalidInput("maximum lag must be at least 1".into()));
    }
    let mut power = steady.m_mat.clone();
    let mut norm = coupling_norm(&steady.gamma, &power)?;
    let mut q = 1;
    while norm > bound {
        if q >= q_max {
            return Err(Error::NoConvergence(format!(
                "coupling norm {norm:.6e} still above bound {bound:.6e} at lag {q_max}"
            )));
        }
        power = &power * &steady.m_mat;
        norm = coupling_norm(&steady.gamma, &power)?;
        q += 1;
    }
    Ok((q, norm))
}
