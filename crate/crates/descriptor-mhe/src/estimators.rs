//! Window estimators over descriptor systems: full-information, moving
//! horizon, and multiple-window moving horizon.
//!
//! All three minimize the same kind of weighted least-squares objective
//! subject to the stage inequalities, differing in how much history stays
//! explicit:
//!
//! * [`fie_solve`] keeps every state since the start (the accuracy
//!   benchmark, cost growing with time),
//! * [`mhe_run`] keeps the last `N` transitions and summarizes everything
//!   older through the filter's arrival cost,
//! * [`mwmhe_run`] additionally remembers past intervals where constraints
//!   were active ("windows"), keeping their stage terms and inequality rows
//!   alive while eliminating the unconstrained stretches between windows
//!   exactly through composed smoother maps.
//!
//! The window ledger's behavior rests on an exact identity: the
//! full-information objective equals the sum of per-stage smoother residual
//! terms plus the sliding-window cost, up to an additive constant that the
//! filter accumulates. Stages whose constraints never activate contribute
//! chain terms that minimize to zero (left of the first window) or can be
//! eliminated in closed form (between windows), so dropping or condensing
//! them loses nothing as long as their constraints indeed stay inactive.

use std::collections::VecDeque;
use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::dkf::{self, FilterState, Propagator, StageRecord};
use crate::model::MeasurementRecord;
use crate::qp::{EqBlock, IneqBlock, Layout, QPProblem, QuadTerm, RowTag, SolveOptions};
use crate::{ConstraintSet, DescriptorSystem, Error, Prior, Result};

/// Default relative tolerance of the constraint-activity detector.
pub const EPS_ACTIVITY: f64 = 1e-6;
/// Default estimate-norm bound of the divergence guard.
pub const DIVERGENCE_BOUND: f64 = 1e9;

/// When a remembered window is dropped from the problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvictionRule {
    /// Keep a window until `T > b + N + N_FC + 1`: the lag `N_FC` is counted
    /// from the step at which the window's last stage left the sliding
    /// horizon. The default.
    ExitLag,
    /// Keep a window until `T > b + N_FC + 1`: the lag is counted from the
    /// stage index itself, so windows retire `N` steps sooner and a
    /// still-growing window can be dropped when `N_FC < N`.
    StageLag,
}

/// Knobs shared by the estimation engines.
#[derive(Debug, Clone)]
pub struct EstimatorOptions {
    pub qp: SolveOptions,
    /// Relative slack tolerance of the activity detector.
    pub eps_activity: f64,
    pub eviction: EvictionRule,
    /// Run the end-of-run inactivity audit over dropped stages.
    pub posthoc: bool,
    /// Estimate-norm bound; exceeding it aborts the run.
    pub divergence_bound: f64,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            qp: SolveOptions::default(),
            eps_activity: EPS_ACTIVITY,
            eviction: EvictionRule::ExitLag,
            posthoc: false,
            divergence_bound: DIVERGENCE_BOUND,
        }
    }
}

/// A solved window problem with its variable layout.
#[derive(Debug, Clone)]
pub struct WindowSolution {
    pub layout: Layout,
    pub qp: crate::qp::QPSolution,
}

impl WindowSolution {
    /// State block at time `k`.
    pub fn state(&self, k: usize) -> Result<DVector<f64>> {
        self.layout.block(&self.qp.zeta, k)
    }
}

/// Per-step ledger snapshot, exported as JSON lines.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct StepTrace {
    pub t: usize,
    pub window_count: usize,
    /// Retained windows, as stage intervals `[a, b]` after this step's
    /// bookkeeping.
    pub windows: Vec<(usize, usize)>,
    /// Scalar decision-variable count of this step's problem.
    pub qp_variables: usize,
    /// Constraint rows found active at the exiting stage this step.
    pub active_rows: Vec<usize>,
    pub objective: f64,
    pub wall_seconds: f64,
}

/// Outcome of the optional end-of-run inactivity audit: constraint rows
/// evaluated on the recomputed smoothed trajectory over dropped stages.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct InactivityAudit {
    pub stages_checked: usize,
    /// `(stage, row, amount)` for each violated row; informational only.
    pub violations: Vec<(usize, usize, f64)>,
}

/// Estimates and diagnostics of one run.
#[derive(Debug, Clone, Default)]
pub struct EstimateSeries {
    /// `filtered[T-1]` is the estimate of `x_T` given data through `T`.
    pub filtered: Vec<DVector<f64>>,
    /// `exit[T-1]` is the estimate of `x_{T-N}` given data through `T`
    /// (`None` during warm-up).
    pub exit: Vec<Option<DVector<f64>>>,
    /// Reported per-step objective values (the solved problem's own value;
    /// constants absorbed by the filter are not added back).
    pub objectives: Vec<f64>,
    /// Ledger snapshots (multiple-window runs only).
    pub traces: Vec<StepTrace>,
    /// Worst scaled KKT residual over every solve of the run.
    pub max_kkt: f64,
    pub audit: Option<InactivityAudit>,
}

impl EstimateSeries {
    fn push(&mut self, sol: &WindowSolution, t: usize, n: usize, bound: f64) -> Result<()> {
        let x_t = sol.state(t)?;
        if x_t.amax() > bound {
            return Err(Error::NoConvergence(format!(
                "estimate norm {:.3e} exceeded the divergence bound {bound:.1e} at step {t}",
                x_t.amax()
            )));
        }
        self.filtered.push(x_t);
        self.exit.push(if t > n { Some(sol.state(t - n)?) } else { None });
        self.objectives.push(sol.qp.objective);
        self.max_kkt = self.max_kkt.max(sol.qp.kkt.worst());
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Shared stage-term builders
// ---------------------------------------------------------------------------

fn check_data(
    sys: &DescriptorSystem,
    inputs: &[DVector<f64>],
    meas: &MeasurementRecord,
    t_final: usize,
) -> Result<()> {
    if t_final < 1 {
        return Err(Error::InvalidInput("horizon must be at least 1".into()));
    }
    if inputs.len() < t_final {
        return Err(Error::InvalidInput(format!(
            "{} inputs provided, {t_final} needed",
            inputs.len()
        )));
    }
    if meas.horizon() < t_final {
        return Err(Error::InvalidInput(format!(
            "{} measurements provided, {t_final} needed",
            meas.horizon()
        )));
    }
    for (k, u) in inputs.iter().enumerate() {
        if u.len() != sys.q_dim() {
            return Err(Error::Dimension(format!(
                "input at step {k} has length {}, expected {}",
                u.len(),
                sys.q_dim()
            )));
        }
    }
    Ok(())
}

/// `|E x_{k+1} - A x_k - B u_k|^2_Q`.
fn transition_term(sys: &DescriptorSystem, k: usize, u: &DVector<f64>) -> QuadTerm {
    QuadTerm::new(
        vec![(k + 1, sys.e.clone()), (k, -&sys.a)],
        &sys.b * u,
        sys.q.clone(),
    )
}

/// `|y_k - H x_k|^2_R`.
fn measurement_term(sys: &DescriptorSystem, k: usize, y: &DVector<f64>) -> QuadTerm {
    QuadTerm::new(vec![(k, sys.h.clone())], y.clone(), sys.r.clone())
}

/// Stage-`k` inequality rows `E_c x_{k+1} - A_c x_k <= d_c`.
fn stage_rows(constraints: &ConstraintSet, k: usize, tag: RowTag) -> IneqBlock {
    IneqBlock {
        coeffs: vec![(k + 1, constraints.e_c.clone()), (k, -&constraints.a_c)],
        rhs: constraints.d_c.clone(),
        tag,
    }
}

/// Smoother residual term `|x_k - gain_k x_{k+1} - base_k|^2_{gamma_k}`.
fn smoother_term(record: &StageRecord, k: usize) -> QuadTerm {
    let n = record.smoother.gamma.nrows();
    QuadTerm::new(
        vec![
            (k, DMatrix::identity(n, n)),
            (k + 1, -&record.smoother.map.gain),
        ],
        record.smoother.map.base.clone(),
        record.smoother.gamma.clone(),
    )
}

/// Quadratic arrival term `|E x_at - (A x^+ + B u)|^2_{P^-}` built from the
/// filter state one step before `at`.
pub fn arrival_term(
    sys: &DescriptorSystem,
    state: &FilterState,
    u: &DVector<f64>,
    at: usize,
) -> QuadTerm {
    QuadTerm::new(
        vec![(at, sys.e.clone())],
        state.predicted_rhs(sys, u),
        state.p_minus.clone(),
    )
}

// ---------------------------------------------------------------------------
// Filter history
// ---------------------------------------------------------------------------

/// Lazily advanced filter/smoother records over times `base ..`, pruned from
/// the left as the estimators stop needing old stages.
pub struct History {
    records: VecDeque<StageRecord>,
    base: usize,
    /// Sum of the scalar costs absorbed by measurement updates `1 ..= through`.
    constant: f64,
}

impl fmt::Debug for History {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("History")
            .field("base", &self.base)
            .field("through", &self.through())
            .finish()
    }
}

impl History {
    /// Seed with the prior at time 0; `u0` parameterizes stage 0's smoother.
    pub fn new(sys: &DescriptorSystem, prior: &Prior, u0: &DVector<f64>) -> Result<Self> {
        let filter = FilterState::seed(sys, prior);
        let record = dkf::stage_record(sys, filter, u0, 0.0)?;
        Ok(Self {
            records: VecDeque::from([record]),
            base: 0,
            constant: 0.0,
        })
    }

    /// Last time with a record.
    pub fn through(&self) -> usize {
        self.base + self.records.len() - 1
    }

    /// Advance the filter so records exist through time `upto`.
    pub fn ensure(
        &mut self,
        sys: &DescriptorSystem,
        inputs: &[DVector<f64>],
        meas: &MeasurementRecord,
        upto: usize,
    ) -> Result<()> {
        while self.through() < upto {
            let k = self.through() + 1;
            let last = &self
                .records
                .back()
                .expect("history never empties")
                .filter;
            let (next, absorbed) = dkf::advance(sys, last, &inputs[k - 1], meas.y(k))?;
            self.constant += absorbed;
            let record = dkf::stage_record(sys, next, &inputs[k], absorbed)?;
            self.records.push_back(record);
        }
        Ok(())
    }

    /// Record at time `k`; a miss means the ledger asked for a pruned or
    /// not-yet-computed stage.
    pub fn get(&self, k: usize) -> Result<&StageRecord> {
        if k < self.base {
            return Err(Error::InvalidInput(format!(
                "stage record {k} was pruned (history starts at {})",
                self.base
            )));
        }
        self.records.get(k - self.base).ok_or_else(|| {
            Error::InvalidInput(format!(
                "stage record {k} not computed yet (history ends at {})",
                self.through()
            ))
        })
    }

    /// Drop records before time `keep_from`.
    pub fn prune_before(&mut self, keep_from: usize) {
        while self.base < keep_from && self.records.len() > 1 {
            self.records.pop_front();
            self.base += 1;
        }
    }

    /// Sum of absorbed measurement costs over times `1 ..= upto`; the
    /// additive constant separating a condensed objective from the
    /// full-information value. Requires an unpruned history.
    pub fn constant_through(&self, upto: usize) -> Result<f64> {
        if self.base != 0 {
            return Err(Error::InvalidInput(
                "absorbed constants need an unpruned history".into(),
            ));
        }
        let mut total = 0.0;
        for k in 1..=upto {
            total += self.get(k)?.constant;
        }
        Ok(total)
    }
}

// ---------------------------------------------------------------------------
// Full information
// ---------------------------------------------------------------------------

/// Solve the full-horizon problem at time `t`: prior-anchored arrival term
/// on `x_1`, transition and measurement terms through `t`, inequality rows
/// on stages `1 .. t-1`.
#[allow(clippy::needless_range_loop)]
pub fn fie_solve(
    sys: &DescriptorSystem,
    constraints: &ConstraintSet,
    prior: &Prior,
    meas: &MeasurementRecord,
    inputs: &[DVector<f64>],
    t: usize,
    opts: &EstimatorOptions,
) -> Result<WindowSolution> {
    check_data(sys, inputs, meas, t)?;
    let layout = Layout::new(1..=t, sys.n())?;
    let seed = FilterState::seed(sys, prior);
    let mut terms = vec![arrival_term(sys, &seed, &inputs[0], 1)];
    for k in 1..t {
        terms.push(transition_term(sys, k, &inputs[k]));
    }
    for k in 1..=t {
        terms.push(measurement_term(sys, k, meas.y(k)));
    }
    let mut ineqs = Vec::new();
    if !constraints.is_empty() {
        for k in 1..t {
            ineqs.push(stage_rows(constraints, k, RowTag::Sliding { stage: k }));
        }
    }
    let problem = QPProblem::assemble(layout.clone(), terms, &ineqs, &[])?;
    let qp = problem.solve_with(&opts.qp)?;
    Ok(WindowSolution { layout, qp })
}

/// Full-information estimates for `T = 1 ..= t_final`; the benchmark engine.
pub fn fie_run(
    sys: &DescriptorSystem,
    constraints: &ConstraintSet,
    prior: &Prior,
    meas: &MeasurementRecord,
    inputs: &[DVector<f64>],
    t_final: usize,
    opts: &EstimatorOptions,
) -> Result<EstimateSeries> {
    check_data(sys, inputs, meas, t_final)?;
    let mut series = EstimateSeries::default();
    for t in 1..=t_final {
        let sol = fie_solve(sys, constraints, prior, meas, inputs, t, opts)?;
        series.push(&sol, t, t, opts.divergence_bound)?;
    }
    Ok(series)
}

/// One full-information solve whose smoothed trajectory is wanted, for
/// benchmark MSE evaluation: returns states `x_1 ..= x_t` of the final
/// solve.
pub fn fie_smoothed(
    sys: &DescriptorSystem,
    constraints: &ConstraintSet,
    prior: &Prior,
    meas: &MeasurementRecord,
    inputs: &[DVector<f64>],
    t: usize,
    opts: &EstimatorOptions,
) -> Result<(Vec<DVector<f64>>, f64, f64)> {
    let sol = fie_solve(sys, constraints, prior, meas, inputs, t, opts)?;
    let states = (1..=t).map(|k| sol.state(k)).collect::<Result<Vec<_>>>()?;
    Ok((states, sol.qp.objective, sol.qp.kkt.worst()))
}

// ---------------------------------------------------------------------------
// Moving horizon
// ---------------------------------------------------------------------------

/// Sliding-window contents at step `t` with horizon `n`: arrival term on
/// `x_{t-n}` anchored by the filter record at `t-n-1`, transitions
/// `t-n .. t-1`, measurements `t-n ..= t`, rows `t-n .. t-1`.
#[allow(clippy::needless_range_loop)]
fn sliding_parts(
    sys: &DescriptorSystem,
    constraints: &ConstraintSet,
    history: &History,
    meas: &MeasurementRecord,
    inputs: &[DVector<f64>],
    t: usize,
    n: usize,
) -> Result<(Vec<QuadTerm>, Vec<IneqBlock>)> {
    let anchor = history.get(t - n - 1)?;
    let mut terms = vec![arrival_term(
        sys,
        &anchor.filter,
        &inputs[t - n - 1],
        t - n,
    )];
    for k in (t - n)..t {
        terms.push(transition_term(sys, k, &inputs[k]));
    }
    for k in (t - n)..=t {
        terms.push(measurement_term(sys, k, meas.y(k)));
    }
    let mut ineqs = Vec::new();
    if !constraints.is_empty() {
        for k in (t - n)..t {
            ineqs.push(stage_rows(constraints, k, RowTag::Sliding { stage: k }));
        }
    }
    Ok((terms, ineqs))
}

/// Moving-horizon estimation over `T = 1 ..= t_final` with horizon `n`.
/// Warm-up steps `T <= n` solve the full problem.
#[allow(clippy::too_many_arguments)]
pub fn mhe_run(
    sys: &DescriptorSystem,
    constraints: &ConstraintSet,
    prior: &Prior,
    meas: &MeasurementRecord,
    inputs: &[DVector<f64>],
    n: usize,
    t_final: usize,
    opts: &EstimatorOptions,
) -> Result<EstimateSeries> {
    if n < 1 {
        return Err(Error::InvalidInput("horizon must be at least 1".into()));
    }
    check_data(sys, inputs, meas, t_final)?;
    let mut series = EstimateSeries::default();
    let mut history = History::new(sys, prior, &inputs[0])?;
    for t in 1..=t_final {
        let sol = if t <= n {
            fie_solve(sys, constraints, prior, meas, inputs, t, opts)?
        } else {
            history.ensure(sys, inputs, meas, t - n - 1)?;
            history.prune_before(t - n - 1);
            let layout = Layout::new((t - n)..=t, sys.n())?;
            let (terms, ineqs) =
                sliding_parts(sys, constraints, &history, meas, inputs, t, n)?;
            let problem = QPProblem::assemble(layout.clone(), terms, &ineqs, &[])?;
            let qp = problem.solve_with(&opts.qp)?;
            WindowSolution { layout, qp }
        };
        series.push(&sol, t, n, opts.divergence_bound)?;
    }
    Ok(series)
}

// ---------------------------------------------------------------------------
// Condensed full-information form
// ---------------------------------------------------------------------------

/// The condensed equivalent of the full problem at time `t`: smoother chain
/// terms over stages `1 .. t-n-1` plus the sliding-window cost, all over
/// variables `x_1 ..= x_t`. Returns the problem and the additive constant
/// relating its values to the full objective pointwise.
pub fn condensed_problem(
    sys: &DescriptorSystem,
    prior: &Prior,
    meas: &MeasurementRecord,
    inputs: &[DVector<f64>],
    n: usize,
    t: usize,
) -> Result<(QPProblem, f64)> {
    if t <= n {
        return Err(Error::InvalidInput(
            "condensing needs the horizon to be shorter than the data".into(),
        ));
    }
    check_data(sys, inputs, meas, t)?;
    let mut history = History::new(sys, prior, &inputs[0])?;
    history.ensure(sys, inputs, meas, t - n - 1)?;
    let layout = Layout::new(1..=t, sys.n())?;
    let mut terms = Vec::new();
    for k in 1..(t - n) {
        terms.push(smoother_term(history.get(k)?, k));
    }
    let empty = ConstraintSet::empty(sys.n());
    let (sliding, _) = sliding_parts(sys, &empty, &history, meas, inputs, t, n)?;
    terms.extend(sliding);
    let constant = history.constant_through(t - n - 1)?;
    let problem = QPProblem::assemble(layout, terms, &[], &[])?;
    Ok((problem, constant))
}

// ---------------------------------------------------------------------------
// Multiple-window ledger
// ---------------------------------------------------------------------------

/// One remembered interval of constraint activity. `a ..= b` are stage
/// (transition) indices; the stage terms and inequality rows on them stay in
/// every later problem until eviction. `gap` condenses the unconstrained
/// stages following `b`: present once the window stops growing, it absorbs
/// one stage per quiet step and is frozen when a newer window forms.
#[derive(Debug, Clone)]
struct WindowEntry {
    a: usize,
    b: usize,
    gap: Option<Propagator>,
}

/// Ledger of active-constraint windows, oldest first.
#[derive(Debug, Clone, Default)]
struct Ledger {
    windows: VecDeque<WindowEntry>,
    /// True when the next detected activity opens a new window (no window is
    /// currently growing).
    fresh: bool,
}

impl Ledger {
    fn new() -> Self {
        Self {
            windows: VecDeque::new(),
            fresh: true,
        }
    }
}

/// Eviction threshold for a window ending at stage `b`.
fn eviction_deadline(rule: EvictionRule, b: usize, n: usize, n_fc: usize) -> usize {
    match rule {
        EvictionRule::ExitLag => b + n + n_fc + 1,
        EvictionRule::StageLag => b + n_fc + 1,
    }
}

/// Multiple-window run: full-problem warm-up for `T <= n`, then per step the
/// condensed problem (window terms and rows, condensed gaps, sliding window)
/// is solved, the exiting stage's constraint activity is tested on the
/// smoothed estimates, and the ledger is updated.
#[allow(clippy::too_many_arguments)]
pub fn mwmhe_run(
    sys: &DescriptorSystem,
    constraints: &ConstraintSet,
    prior: &Prior,
    meas: &MeasurementRecord,
    inputs: &[DVector<f64>],
    n: usize,
    n_fc: usize,
    t_final: usize,
    opts: &EstimatorOptions,
) -> Result<EstimateSeries> {
    if n < 1 {
        return Err(Error::InvalidInput("horizon must be at least 1".into()));
    }
    check_data(sys, inputs, meas, t_final)?;
    let n_dim = sys.n();
    let mut series = EstimateSeries::default();
    let mut history = History::new(sys, prior, &inputs[0])?;
    let mut ledger = Ledger::new();

    for t in 1..=t_final {
        if t <= n {
            let sol = fie_solve(sys, constraints, prior, meas, inputs, t, opts)?;
            series.push(&sol, t, n, opts.divergence_bound)?;
            continue;
        }
        history.ensure(sys, inputs, meas, t - n - 1)?;
        let exiting = t - n - 1; // stage whose constraints are tested this step

        // Assemble: per-window stage terms and rows, condensed gap terms,
        // then the sliding window. The live gap's condenser is one stage
        // short on purpose: the final stage is absorbed into a clone so that
        // if a window forms at `exiting` this step, the stored condenser is
        // exactly what the frozen gap needs.
        let mut times: Vec<usize> = Vec::new();
        let mut terms: Vec<QuadTerm> = Vec::new();
        let mut ineqs: Vec<IneqBlock> = Vec::new();
        for (w_idx, w) in ledger.windows.iter().enumerate() {
            for k in w.a..=w.b {
                times.push(k);
                times.push(k + 1);
                terms.push(smoother_term(history.get(k)?, k));
                if !constraints.is_empty() {
                    ineqs.push(stage_rows(
                        constraints,
                        k,
                        RowTag::Window {
                            window: w_idx,
                            stage: k,
                        },
                    ));
                }
            }
            // Gap after this window: stages b+1 ..= r with r the stage
            // before the next window (frozen) or the currently exiting
            // stage (live).
            let r = match ledger.windows.get(w_idx + 1) {
                Some(next) => next.a - 1,
                None => exiting,
            };
            if r == w.b {
                continue; // adjacent windows share x_{b+1}
            }
            debug_assert!(r > w.b, "ledger intervals out of order");
            if r > w.b + 1 {
                // Bridge over the interior stages b+1 .. r-1.
                let stored = w.gap.as_ref().ok_or_else(|| {
                    Error::InvalidInput("window left growing behind a newer window".into())
                })?;
                let mut bridge = stored.clone();
                let next_stage = w.b + 1 + bridge.absorbed;
                debug_assert!(next_stage + 1 >= r, "condenser fell behind its gap");
                if next_stage < r {
                    bridge.absorb(&history.get(next_stage)?.smoother);
                }
                times.push(r);
                terms.push(QuadTerm::new(
                    vec![
                        (w.b + 1, DMatrix::identity(n_dim, n_dim)),
                        (r, -&bridge.m_hat),
                    ],
                    bridge.r_hat.clone(),
                    bridge.w_hat.clone(),
                ));
            }
            // Terminal stage term `r` couples the gap into what follows.
            terms.push(smoother_term(history.get(r)?, r));
            times.push(r + 1);
        }
        times.extend((t - n)..=t);
        let layout = Layout::new(times, n_dim)?;
        let (sliding_terms, sliding_rows) =
            sliding_parts(sys, constraints, &history, meas, inputs, t, n)?;
        terms.extend(sliding_terms);
        ineqs.extend(sliding_rows);
        let problem = QPProblem::assemble(layout.clone(), terms, &ineqs, &[])?;
        let qp = problem.solve_with(&opts.qp)?;
        let sol = WindowSolution { layout, qp };
        series.push(&sol, t, n, opts.divergence_bound)?;

        // Activity test at the exiting stage: compare each row on the
        // window-exit estimate and the smoothed predecessor it implies.
        let mut active_rows: Vec<usize> = Vec::new();
        if exiting >= 1 && !constraints.is_empty() {
            let x_exit = sol.state(t - n)?;
            let x_prev = history.get(exiting)?.smoother.map.eval(&x_exit);
            let gap = constraints.violation(&x_prev, &x_exit);
            for l in 0..constraints.n_ineq() {
                // `gap[l]` is lhs - rhs; at the bound it is zero.
                if gap[l] >= -opts.eps_activity * (1.0 + constraints.d_c[l].abs()) {
                    active_rows.push(l);
                }
            }
        }

        // Ledger lifecycle.
        if exiting >= 1 {
            apply_lifecycle(&mut ledger, &mut history, exiting, !active_rows.is_empty())?;
        }

        // Eviction, oldest windows first.
        while let Some(front) = ledger.windows.front() {
            if t > eviction_deadline(opts.eviction, front.b, n, n_fc) {
                ledger.windows.pop_front();
            } else {
                break;
            }
        }
        if ledger.windows.is_empty() {
            ledger.fresh = true;
        }

        // Prune history to what later steps can still reference. The audit
        // walks the whole past, so it keeps everything.
        if !opts.posthoc {
            let keep_from = ledger
                .windows
                .front()
                .map(|w| w.a)
                .unwrap_or(t - n - 1)
                .min(t - n - 1);
            history.prune_before(keep_from);
        }

        series.traces.push(StepTrace {
            t,
            window_count: ledger.windows.len(),
            windows: ledger.windows.iter().map(|w| (w.a, w.b)).collect(),
            qp_variables: sol.layout.dim(),
            active_rows,
            objective: sol.qp.objective,
            wall_seconds: sol.qp.wall_seconds,
        });

        if opts.posthoc && t == t_final {
            series.audit = Some(audit_inactivity(constraints, &history, &ledger, &sol, t, n)?);
        }
    }
    Ok(series)
}

/// Apply one step of the window lifecycle at the exiting stage. Commits the
/// live gap's pending stage when nothing changed; forming a window freezes
/// the previous gap exactly one stage short of the new window.
fn apply_lifecycle(
    ledger: &mut Ledger,
    history: &mut History,
    exiting: usize,
    any_active: bool,
) -> Result<()> {
    if any_active {
        if ledger.fresh {
            ledger.windows.push_back(WindowEntry {
                a: exiting,
                b: exiting,
                gap: None,
            });
            ledger.fresh = false;
        } else {
            let last = ledger.windows.back_mut().expect("growing window exists");
            if last.b + 1 != exiting {
                return Err(Error::InvalidInput(format!(
                    "window grew from stage {} to {exiting} non-contiguously",
                    last.b
                )));
            }
            last.b = exiting;
        }
    } else if !ledger.fresh {
        // First quiet step after activity: the window stops growing and its
        // gap starts empty.
        let last = ledger.windows.back_mut().expect("growing window exists");
        last.gap = Some(Propagator::identity(history.get(exiting)?.smoother.gamma.nrows()));
        ledger.fresh = true;
    } else if let Some(last) = ledger.windows.back_mut() {
        // Quiet step: absorb the stage the assembly borrowed tentatively.
        if let Some(gap) = last.gap.as_mut() {
            let next_stage = last.b + 1 + gap.absorbed;
            if next_stage < exiting {
                gap.absorb(&history.get(next_stage)?.smoother);
                debug_assert_eq!(last.b + 1 + gap.absorbed, exiting);
            }
        }
    }
    Ok(())
}

/// Recompute the smoothed trajectory over dropped stages of the final
/// problem and evaluate every dropped constraint row on it.
#[allow(clippy::needless_range_loop)]
fn audit_inactivity(
    constraints: &ConstraintSet,
    history: &History,
    ledger: &Ledger,
    sol: &WindowSolution,
    t: usize,
    n: usize,
) -> Result<InactivityAudit> {
    let mut audit = InactivityAudit::default();
    if constraints.is_empty() {
        return Ok(audit);
    }
    // Reconstruct states at every time 1 ..= t: retained blocks from the
    // solution, gap interiors by conditional minimization, prefix by
    // descending the smoother maps.
    let mut states: Vec<Option<DVector<f64>>> = vec![None; t + 1];
    for &time in sol.layout.times() {
        states[time] = Some(sol.state(time)?);
    }
    // Gap interiors between consecutive retained times.
    let retained: Vec<usize> = sol.layout.times().to_vec();
    for pair in retained.windows(2) {
        let (left, right) = (pair[0], pair[1]);
        if right > left + 1 {
            let x_left = states[left].clone().expect("retained state");
            let x_right = states[right].clone().expect("retained state");
            let interior =
                recover_chain_interior(history, left, right - 1, &x_left, &x_right)?;
            for (offset, x) in interior.into_iter().enumerate() {
                states[left + 1 + offset] = Some(x);
            }
        }
    }
    // Prefix before the earliest retained time.
    let first = *retained.first().expect("layout never empty");
    for k in (1..first).rev() {
        let next = states[k + 1].clone().expect("later state known");
        states[k] = Some(history.get(k)?.smoother.map.eval(&next));
    }
    // Evaluate rows on stages that carried no rows in the final problem.
    let mut imposed: Vec<bool> = vec![false; t];
    for w in &ledger.windows {
        for k in w.a..=w.b {
            imposed[k] = true;
        }
    }
    for k in (t - n)..t {
        imposed[k] = true;
    }
    let tol = 1e-9 * (1.0 + constraints.d_c.amax());
    for k in 1..t {
        if imposed[k] {
            continue;
        }
        let (Some(x_k), Some(x_next)) = (&states[k], &states[k + 1]) else {
            continue;
        };
        audit.stages_checked += 1;
        let gap = constraints.violation(x_k, x_next);
        for l in 0..constraints.n_ineq() {
            if gap[l] > tol {
                audit.violations.push((k, l, gap[l]));
            }
        }
    }
    Ok(audit)
}

/// Conditional minimizer of the stage chain `first ..= last` given both
/// endpoint states: returns the interior states `x_{first+1} ..= x_last`.
/// Exact; used to recover eliminated gap interiors.
pub fn recover_chain_interior(
    history: &History,
    first: usize,
    last: usize,
    x_left: &DVector<f64>,
    x_right: &DVector<f64>,
) -> Result<Vec<DVector<f64>>> {
    if last <= first {
        return Ok(Vec::new());
    }
    let n = x_left.len();
    let layout = Layout::new((first + 1)..=last, n)?;
    let mut terms = Vec::new();
    for k in first..=last {
        let record = history.get(k)?;
        let gain = &record.smoother.map.gain;
        let base = &record.smoother.map.base;
        let gamma = record.smoother.gamma.clone();
        let term = if k == first {
            // x_left fixed: residual -gain x_{first+1} - (base - x_left).
            QuadTerm::new(vec![(k + 1, -gain)], base - x_left, gamma)
        } else if k == last {
            // x_right fixed: residual x_last - (gain x_right + base).
            QuadTerm::new(
                vec![(k, DMatrix::identity(n, n))],
                gain * x_right + base,
                gamma,
            )
        } else {
            QuadTerm::new(
                vec![(k, DMatrix::identity(n, n)), (k + 1, -gain)],
                base.clone(),
                gamma,
            )
        };
        terms.push(term);
    }
    let problem = QPProblem::assemble(layout.clone(), terms, &[], &[])?;
    let qp = problem.solve()?;
    (first + 1..=last)
        .map(|k| layout.block(&qp.zeta, k))
        .collect()
}

/// Equality-pinned variant of [`recover_chain_interior`] used by tests that
/// want the whole chain as one problem; exposed for reuse.
pub fn chain_terms(history: &History, first: usize, last: usize) -> Result<Vec<QuadTerm>> {
    (first..=last)
        .map(|k| Ok(smoother_term(history.get(k)?, k)))
        .collect()
}

/// Pin a state block to a fixed value (helper for oracle problems).
pub fn pin_state(k: usize, value: &DVector<f64>) -> EqBlock {
    let n = value.len();
    EqBlock {
        coeffs: vec![(k, DMatrix::identity(n, n))],
        rhs: value.clone(),
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::model::simulate;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn standard_system(rng: &mut ChaCha8Rng, n: usize) -> DescriptorSystem {
        // E = I, stable A, full-rank H measuring everything: comfortably
        // inside the assumptions.
        let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal)) * (0.6 / n as f64);
        let h = DMatrix::identity(n, n) + DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal)) * 0.1;
        let ql = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal)) * 0.2;
        let q = &ql * ql.transpose() + DMatrix::identity(n, n);
        let rl = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal)) * 0.1;
        let r = &rl * rl.transpose() + DMatrix::identity(n, n) * 0.3;
        DescriptorSystem::new(DMatrix::identity(n, n), a, DMatrix::zeros(n, 0), h, q, r)
            .unwrap()
    }

    fn random_data(
        rng: &mut ChaCha8Rng,
        sys: &DescriptorSystem,
        t: usize,
    ) -> (Vec<DVector<f64>>, MeasurementRecord, Vec<DVector<f64>>) {
        let n = sys.n();
        let mut states = vec![DVector::from_fn(n, |_, _| rng.sample(StandardNormal))];
        let mut vs = Vec::new();
        for k in 0..t {
            let w = DVector::from_fn(sys.n1(), |_, _| rng.sample::<f64, _>(StandardNormal) * 0.5);
            let next = &sys.a * &states[k] + w;
            states.push(next);
            vs.push(DVector::from_fn(sys.m(), |_, _| rng.sample::<f64, _>(StandardNormal) * 0.2));
        }
        let meas = MeasurementRecord::generate(sys, &states, vs);
        let inputs = vec![DVector::zeros(0); t + 1];
        (inputs, meas, states)
    }

    #[test]
    fn fie_terminal_matches_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..3 {
            let sys = standard_system(&mut rng, 3);
            let (inputs, meas, _) = random_data(&mut rng, &sys, 15);
            let prior = Prior::new(DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
            let none = ConstraintSet::empty(3);
            let opts = EstimatorOptions::default();
            let filter = dkf::run_filter(&sys, &prior, &inputs, &meas, 15).unwrap();
            for t in [1usize, 7, 15] {
                let sol = fie_solve(&sys, &none, &prior, &meas, &inputs, t, &opts).unwrap();
                let x_t = sol.state(t).unwrap();
                let dev = (&x_t - &filter[t].x_plus).amax();
                assert!(dev < 1e-9, "deviation {dev} at t={t}");
            }
        }
    }

    #[test]
    fn fie_clamps_to_binding_bound() {
        // Scalar chain pushed above an upper bound by the data.
        let sys = DescriptorSystem::new(
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1) * 0.9,
            DMatrix::zeros(1, 0),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1) * 0.1,
        )
        .unwrap();
        let bound = 0.5;
        let cons = ConstraintSet::new(
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
            DVector::from_element(1, bound),
        )
        .unwrap();
        let t = 6;
        let states: Vec<DVector<f64>> = (0..=t).map(|_| DVector::from_element(1, 2.0)).collect();
        let meas = MeasurementRecord::generate(&sys, &states, vec![DVector::zeros(1); t]);
        let inputs = vec![DVector::zeros(0); t];
        let prior = Prior::new(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let opts = EstimatorOptions::default();
        let sol = fie_solve(&sys, &cons, &prior, &meas, &inputs, t, &opts).unwrap();
        let x_t = sol.state(t).unwrap();
        assert!((x_t[0] - bound).abs() < 1e-7, "terminal {} vs bound", x_t[0]);
        // The unconstrained solution sits well above.
        let free = fie_solve(&sys, &ConstraintSet::empty(1), &prior, &meas, &inputs, t, &opts)
            .unwrap();
        assert!(free.state(t).unwrap()[0] > bound + 0.5);
        // Reference enumeration agrees.
        let layout = Layout::new(1..=t, 1).unwrap();
        let seed = FilterState::seed(&sys, &prior);
        let mut terms = vec![arrival_term(&sys, &seed, &inputs[0], 1)];
        for k in 1..t {
            terms.push(transition_term(&sys, k, &inputs[k]));
        }
        for k in 1..=t {
            terms.push(measurement_term(&sys, k, meas.y(k)));
        }
        let rows: Vec<IneqBlock> = (1..t)
            .map(|k| stage_rows(&cons, k, RowTag::Sliding { stage: k }))
            .collect();
        let prob = QPProblem::assemble(layout, terms, &rows, &[]).unwrap();
        let (p, q, g, h, _) = prob.dense_data();
        let (z_ref, _, _) = crate::qp::reference::solve_by_enumeration(&p, &q, &g, &h).unwrap();
        assert!((z_ref[t - 1] - x_t[0]).abs() < 1e-7);
    }

    #[test]
    fn mhe_matches_filter_without_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let sys = standard_system(&mut rng, 3);
        let (inputs, meas, _) = random_data(&mut rng, &sys, 25);
        let prior = Prior::new(DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
        let none = ConstraintSet::empty(3);
        let opts = EstimatorOptions::default();
        let series = mhe_run(&sys, &none, &prior, &meas, &inputs, 4, 25, &opts).unwrap();
        let filter = dkf::run_filter(&sys, &prior, &inputs, &meas, 25).unwrap();
        for t in 1..=25 {
            let dev = (&series.filtered[t - 1] - &filter[t].x_plus).amax();
            assert!(dev < 1e-8, "deviation {dev} at t={t}");
        }
        assert!(series.max_kkt < 1e-8);
    }

    #[test]
    fn condensed_problem_is_the_same_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..3 {
            let sys = standard_system(&mut rng, 2);
            let t = 10;
            let n = 3;
            let (inputs, meas, _) = random_data(&mut rng, &sys, t);
            let prior = Prior::new(
                DVector::from_fn(2, |_, _| rng.sample(StandardNormal)),
                DMatrix::identity(2, 2),
            )
            .unwrap();
            let opts = EstimatorOptions::default();
            let none = ConstraintSet::empty(2);
            let (condensed, constant) =
                condensed_problem(&sys, &prior, &meas, &inputs, n, t).unwrap();
            let full = fie_solve(&sys, &none, &prior, &meas, &inputs, t, &opts).unwrap();

            // Pointwise identity on random points.
            let full_terms = {
                let layout = Layout::new(1..=t, 2).unwrap();
                let seed = FilterState::seed(&sys, &prior);
                let mut terms = vec![arrival_term(&sys, &seed, &inputs[0], 1)];
                for k in 1..t {
                    terms.push(transition_term(&sys, k, &inputs[k]));
                }
                for k in 1..=t {
                    terms.push(measurement_term(&sys, k, meas.y(k)));
                }
                QPProblem::assemble(layout, terms, &[], &[]).unwrap()
            };
            for _ in 0..5 {
                let z = DVector::from_fn(2 * t, |_, _| rng.sample::<f64, _>(StandardNormal) * 2.0);
                let direct = full_terms.eval_objective(&z).unwrap();
                let condensed_val = condensed.eval_objective(&z).unwrap() + constant;
                assert!(
                    (direct - condensed_val).abs() <= 1e-9 * (1.0 + direct.abs()),
                    "pointwise mismatch: {direct} vs {condensed_val}"
                );
            }

            // Optimal values agree after adding the absorbed constant.
            let sol = condensed.solve().unwrap();
            let lifted = sol.objective + constant;
            assert!(
                (lifted - full.qp.objective).abs() <= 1e-8 * (1.0 + full.qp.objective.abs()),
                "minima differ: {lifted} vs {}",
                full.qp.objective
            );
        }
    }

    #[test]
    fn mw_equals_mhe_when_constraints_stay_silent() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let sys = standard_system(&mut rng, 2);
        let (inputs, meas, _) = random_data(&mut rng, &sys, 40);
        let prior = Prior::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        // Bounds far beyond anything the data reaches.
        let cons = ConstraintSet::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DVector::from_element(2, 1e6),
        )
        .unwrap();
        let opts = EstimatorOptions::default();
        let mhe = mhe_run(&sys, &cons, &prior, &meas, &inputs, 4, 40, &opts).unwrap();
        let mw = mwmhe_run(&sys, &cons, &prior, &meas, &inputs, 4, 3, 40, &opts).unwrap();
        for t in 1..=40 {
            let dev = (&mw.filtered[t - 1] - &mhe.filtered[t - 1]).amax();
            assert!(dev < 1e-10, "deviation {dev} at t={t}");
        }
        for trace in &mw.traces {
            assert!(trace.windows.is_empty());
            assert!(trace.active_rows.is_empty());
        }
    }

    /// Scripted scenario: a scalar chain whose measurements spike above the
    /// bound for exactly three consecutive times, forcing one window.
    fn spike_setup() -> (
        DescriptorSystem,
        ConstraintSet,
        Prior,
        MeasurementRecord,
        Vec<DVector<f64>>,
    ) {
        let sys = DescriptorSystem::new(
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1) * 0.2,
            DMatrix::zeros(1, 0),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1) * 0.01,
        )
        .unwrap();
        let cons = ConstraintSet::new(
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
            DVector::from_element(1, 0.3),
        )
        .unwrap();
        let t = 30;
        // Truth is irrelevant; measurements drive the estimates. With H = I
        // and zero noise, y(k) equals the scripted value at index k.
        let mut scripted = vec![DVector::from_element(1, -0.5); t + 1];
        for k in 10..=12 {
            scripted[k] = DVector::from_element(1, 5.0);
        }
        let meas = MeasurementRecord::generate(&sys, &scripted, vec![DVector::zeros(1); t]);
        let prior = Prior::new(DVector::from_element(1, -0.5), DMatrix::identity(1, 1)).unwrap();
        let inputs = vec![DVector::zeros(0); t];
        (sys, cons, prior, meas, inputs)
    }

    #[test]
    fn window_lifecycle_on_scripted_episode() {
        let (sys, cons, prior, meas, inputs) = spike_setup();
        let n = 3;
        let n_fc = 2;
        let opts = EstimatorOptions::default();
        let mw = mwmhe_run(&sys, &cons, &prior, &meas, &inputs, n, n_fc, 30, &opts).unwrap();
        // States 10..=12 sit at the bound, so rows 9..=11 activate; one
        // window [9, 11] forms and grows.
        let windows_at = |t: usize| -> Vec<(usize, usize)> {
            mw.traces
                .iter()
                .find(|tr| tr.t == t)
                .expect("trace present")
                .windows
                .clone()
        };
        // Row 9 is tested at step 9 + n + 1 = 13.
        assert_eq!(windows_at(13), vec![(9, 9)]);
        assert_eq!(windows_at(14), vec![(9, 10)]);
        assert_eq!(windows_at(15), vec![(9, 11)]);
        assert_eq!(windows_at(16), vec![(9, 11)], "episode over, window detached");
        // Eviction: kept while T <= b + N + N_FC + 1 = 17.
        assert_eq!(windows_at(17), vec![(9, 11)]);
        assert_eq!(windows_at(18), Vec::<(usize, usize)>::new());
        // And never again.
        for t in 19..=30 {
            assert!(windows_at(t).is_empty(), "stray window at {t}");
        }
        // The sharper rule with the same lag never keeps a window: a stage
        // can only be tested N + 1 steps after it happens, which is already
        // past the deadline when N_FC < N. Every window dies the step it
        // forms, so the estimates reduce to plain moving-horizon ones.
        let sharp = EstimatorOptions {
            eviction: EvictionRule::StageLag,
            ..EstimatorOptions::default()
        };
        let mw2 = mwmhe_run(&sys, &cons, &prior, &meas, &inputs, n, n_fc, 30, &sharp).unwrap();
        for tr in &mw2.traces {
            assert!(tr.windows.is_empty(), "window survived at t={}", tr.t);
        }
        let mhe = mhe_run(&sys, &cons, &prior, &meas, &inputs, n, 30, &sharp).unwrap();
        for t in 1..=30 {
            let dev = (&mw2.filtered[t - 1] - &mhe.filtered[t - 1]).amax();
            assert!(dev < 1e-10, "deviation {dev} at t={t}");
        }
        // A lag large enough to clear the testing delay keeps the window:
        // deadline b + N_FC + 1 = 18, so it leaves at the end of step 19.
        let roomy = EstimatorOptions {
            eviction: EvictionRule::StageLag,
            ..EstimatorOptions::default()
        };
        let mw3 = mwmhe_run(&sys, &cons, &prior, &meas, &inputs, n, 6, 30, &roomy).unwrap();
        let w3 = |t: usize| -> Vec<(usize, usize)> {
            mw3.traces
                .iter()
                .find(|tr| tr.t == t)
                .unwrap()
                .windows
                .clone()
        };
        assert_eq!(w3(15), vec![(9, 11)]);
        assert_eq!(w3(18), vec![(9, 11)]);
        assert_eq!(w3(19), Vec::<(usize, usize)>::new());
    }

    #[test]
    fn zero_lag_with_stage_rule_reduces_to_mhe() {
        let (sys, cons, prior, meas, inputs) = spike_setup();
        let opts = EstimatorOptions {
            eviction: EvictionRule::StageLag,
            ..EstimatorOptions::default()
        };
        let mw = mwmhe_run(&sys, &cons, &prior, &meas, &inputs, 3, 0, 30, &opts).unwrap();
        let mhe = mhe_run(&sys, &cons, &prior, &meas, &inputs, 3, 30, &opts).unwrap();
        // Every window dies in the same step it forms, before influencing
        // any solve.
        for tr in &mw.traces {
            assert!(tr.windows.is_empty(), "window survived at t={}", tr.t);
        }
        for t in 1..=30 {
            let dev = (&mw.filtered[t - 1] - &mhe.filtered[t - 1]).amax();
            assert!(dev < 1e-12, "deviation {dev} at t={t}");
        }
    }

    #[test]
    fn gap_condensing_matches_unreduced_problem() {
        // Run the scripted scenario far enough that the window's gap grows,
        // then rebuild the same step's problem without condensing and check
        // both optima and recovered interiors.
        let (sys, cons, prior, meas, inputs) = spike_setup();
        let n = 3;
        let opts = EstimatorOptions {
            eviction: EvictionRule::ExitLag,
            ..EstimatorOptions::default()
        };
        // Large lag so the window survives while its gap lengthens.
        let n_fc = 8;
        let t_run = 22;
        let mw = mwmhe_run(&sys, &cons, &prior, &meas, &inputs, n, n_fc, t_run, &opts).unwrap();
        let last = mw.traces.last().unwrap();
        assert_eq!(last.windows, vec![(9, 11)]);

        // Independent unreduced problem at T = t_run: window terms and rows,
        // every gap stage term explicit, sliding window.
        let mut history = History::new(&sys, &prior, &inputs[0]).unwrap();
        history.ensure(&sys, &inputs, &meas, t_run - n - 1).unwrap();
        let layout = Layout::new(9..=t_run, 1).unwrap();
        let mut terms = Vec::new();
        for k in 9..=(t_run - n - 1) {
            terms.push(smoother_term(history.get(k).unwrap(), k));
        }
        let (sliding, mut rows) =
            sliding_parts(&sys, &cons, &history, &meas, &inputs, t_run, n).unwrap();
        terms.extend(sliding);
        for k in 9..=11 {
            rows.push(stage_rows(&cons, k, RowTag::Window { window: 0, stage: k }));
        }
        let full = QPProblem::assemble(layout.clone(), terms, &rows, &[]).unwrap();
        let full_sol = full.solve().unwrap();
        let last_obj = mw.objectives[t_run - 1];
        assert!(
            (full_sol.objective - last_obj).abs() <= 1e-7 * (1.0 + last_obj.abs()),
            "unreduced {} vs condensed {last_obj}",
            full_sol.objective
        );
        // Filtered estimates agree.
        let full_xt = layout.block(&full_sol.zeta, t_run).unwrap();
        let dev = (&full_xt - &mw.filtered[t_run - 1]).amax();
        assert!(dev < 1e-7, "terminal deviation {dev}");
        // Recovered interior matches the unreduced interior states.
        // The condensed problem kept x_12 and x_{t_run - n - 1}; interiors
        // in between were eliminated.
        let left = 12;
        let right = t_run - n - 1;
        let x_left = layout.block(&full_sol.zeta, left).unwrap();
        let x_right = layout.block(&full_sol.zeta, right).unwrap();
        let rec =
            recover_chain_interior(&history, left, right - 1, &x_left, &x_right).unwrap();
        for (i, x) in rec.iter().enumerate() {
            let k = left + 1 + i;
            let truth = layout.block(&full_sol.zeta, k).unwrap();
            let dev = (x - truth).amax();
            assert!(dev < 1e-7, "interior {k} deviates by {dev}");
        }
    }

    #[test]
    fn chain_interior_recovery_matches_joint_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let sys = standard_system(&mut rng, 2);
        let (inputs, meas, _) = random_data(&mut rng, &sys, 12);
        let prior = Prior::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let mut history = History::new(&sys, &prior, &inputs[0]).unwrap();
        history.ensure(&sys, &inputs, &meas, 9).unwrap();
        let x_left = DVector::from_fn(2, |_, _| rng.sample(StandardNormal));
        let x_right = DVector::from_fn(2, |_, _| rng.sample(StandardNormal));
        let (first, last) = (2usize, 7usize);
        let rec = recover_chain_interior(&history, first, last, &x_left, &x_right).unwrap();
        // Joint oracle: all chain states as variables with the endpoints
        // pinned by equality rows.
        let layout = Layout::new(first..=(last + 1), 2).unwrap();
        let terms = chain_terms(&history, first, last).unwrap();
        let eqs = vec![pin_state(first, &x_left), pin_state(last + 1, &x_right)];
        let prob = QPProblem::assemble(layout.clone(), terms, &[], &eqs).unwrap();
        let sol = prob.solve().unwrap();
        for (i, x) in rec.iter().enumerate() {
            let k = first + 1 + i;
            let truth = layout.block(&sol.zeta, k).unwrap();
            assert!((x - truth).amax() < 1e-8);
        }
    }

    #[test]
    fn audit_is_clean_on_quiet_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let sys = standard_system(&mut rng, 2);
        let (inputs, meas, _) = random_data(&mut rng, &sys, 30);
        let prior = Prior::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let cons = ConstraintSet::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DVector::from_element(2, 1e6),
        )
        .unwrap();
        let opts = EstimatorOptions {
            posthoc: true,
            ..EstimatorOptions::default()
        };
        let mw = mwmhe_run(&sys, &cons, &prior, &meas, &inputs, 4, 3, 30, &opts).unwrap();
        let audit = mw.audit.expect("audit requested");
        assert!(audit.stages_checked > 0);
        assert!(audit.violations.is_empty(), "violations: {:?}", audit.violations);
    }

    #[test]
    fn simulated_constrained_run_stays_feasible() {
        // End-to-end: simulate a system with a genuinely binding bound and
        // check the estimators run and respect it at every reported step.
        let sys = DescriptorSystem::new(
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(2, 2, &[0.8, 0.1, -0.1, 0.7]),
            DMatrix::zeros(2, 0),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2) * 0.5,
            DMatrix::identity(2, 2) * 0.05,
        )
        .unwrap();
        let cons = ConstraintSet::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::zeros(1, 2),
            DVector::from_element(1, 0.8),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let t = 40;
        let process: Vec<DVector<f64>> = (0..t)
            .map(|k| {
                // Push toward the bound periodically.
                let drive = if (10..15).contains(&k) || (25..30).contains(&k) {
                    0.9
                } else {
                    0.0
                };
                DVector::from_fn(2, |i, _| {
                    let noise: f64 = rng.sample::<f64, _>(StandardNormal);
                    noise * 0.1 + if i == 0 { drive } else { 0.0 }
                })
            })
            .collect();
        let meas_noise: Vec<DVector<f64>> = (0..t)
            .map(|_| DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.05))
            .collect();
        let x0 = DVector::zeros(2);
        let inputs = vec![DVector::zeros(0); t];
        let free = vec![DVector::zeros(0); t];
        let (_, meas) = simulate(
            &sys,
            &ConstraintSet::empty(2),
            &x0,
            &inputs,
            &process,
            &meas_noise,
            &free,
            t,
        )
        .unwrap();
        let prior = Prior::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let opts = EstimatorOptions::default();
        let mw = mwmhe_run(&sys, &cons, &prior, &meas, &inputs, 4, 3, t, &opts).unwrap();
        for (idx, x) in mw.filtered.iter().enumerate() {
            assert!(
                x[0] <= 0.8 + 1e-6,
                "estimate at t={} violates the bound: {}",
                idx + 1,
                x[0]
            );
        }
        assert!(mw.max_kkt < 1e-8, "kkt {:?}", mw.max_kkt);
    }
}
