//! Built-in benchmark system: a two-inertia actuator (motor, compliant
//! shaft, load) driven by a bounded unknown load torque.
//!
//! The physical model has three states `z = [w_m, w_c, th]` (motor speed,
//! load speed, shaft twist) and an unknown input `d` (load torque):
//!
//! ```text
//! z_{k+1} = A_z z_k + G d_k + w_k,    y_{k+1} = H_z z_{k+1} + v_k
//! ```
//!
//! Augmenting the state with the one-step-delayed input, `x_k = [z_k;
//! d_{k-1}]`, puts this in descriptor form with `E = [I | -G]` and
//! `A = [A_z | 0]`: the dynamics rows determine `z_{k+1}` given `d_k`,
//! while `d_k` itself is a free direction pinned only by the next
//! measurement. Both speeds are measured; the load speed channel carries
//! `G`, which keeps `[E; H]` full column rank. The torque is known to
//! saturate at `+/-TORQUE_BOUND`, giving the two stage inequality rows.

use descriptor_mhe::{ConstraintSet, DescriptorSystem, Prior};
use nalgebra::{DMatrix, DVector};

/// Saturation level of the unknown load torque.
pub const TORQUE_BOUND: f64 = 35.0;

/// Sample period of the discretization.
pub const DT: f64 = 0.1;

/// Build the benchmark system. `process_var` and `meas_var` become the
/// (isotropic) noise weights `Q = process_var * I` and `R = meas_var * I`;
/// they must be positive since the weights are inverted.
pub fn synthetic_actuator(
    process_var: f64,
    meas_var: f64,
) -> descriptor_mhe::Result<(DescriptorSystem, ConstraintSet, Prior)> {
    if process_var <= 0.0 || meas_var <= 0.0 {
        return Err(descriptor_mhe::Error::InvalidInput(format!(
            "noise weights must be positive (process {process_var}, measurement {meas_var})"
        )));
    }
    // Two-inertia chain, both inertias 1, light viscous damping, soft
    // shaft: the twist mode is slow and only weakly visible in the speeds,
    // which is what makes long estimation horizons pay off.
    let (b_m, b_c, k_s, c_s) = (0.05, 0.05, 0.2, 0.05);
    let a_z = DMatrix::from_row_slice(
        3,
        3,
        &[
            1.0 - DT * (b_m + c_s),
            DT * c_s,
            -DT * k_s,
            DT * c_s,
            1.0 - DT * (b_c + c_s),
            DT * k_s,
            DT,
            -DT,
            1.0,
        ],
    );
    let g = DVector::from_column_slice(&[0.0, DT, 0.0]);

    let mut e = DMatrix::zeros(3, 4);
    e.view_mut((0, 0), (3, 3)).copy_from(&DMatrix::identity(3, 3));
    e.view_mut((0, 3), (3, 1)).copy_from(&(-&g));
    let mut a = DMatrix::zeros(3, 4);
    a.view_mut((0, 0), (3, 3)).copy_from(&a_z);
    let mut h = DMatrix::zeros(2, 4);
    h[(0, 0)] = 1.0;
    h[(1, 1)] = 1.0;

    let sys = DescriptorSystem::new(
        e,
        a,
        DMatrix::zeros(3, 0),
        h,
        DMatrix::identity(3, 3) * process_var,
        DMatrix::identity(2, 2) * meas_var,
    )?;

    // |d_k| <= bound, i.e. |x_{k+1}[3]| <= bound: two rows with no
    // dependence on the earlier state.
    let mut e_c = DMatrix::zeros(2, 4);
    e_c[(0, 3)] = 1.0;
    e_c[(1, 3)] = -1.0;
    let constraints = ConstraintSet::new(
        e_c,
        DMatrix::zeros(2, 4),
        DVector::from_element(2, TORQUE_BOUND),
    )?;

    let prior = Prior::new(DVector::zeros(4), DMatrix::identity(4, 4))?;
    Ok((sys, constraints, prior))
}

/// Default load-torque profile for a 400-step run: piecewise constant with
/// four saturation episodes totaling 68 steps (17% of the horizon).
pub fn default_schedule() -> Vec<(usize, f64)> {
    vec![
        (0, 0.0),
        (30, 12.0),
        (60, TORQUE_BOUND),
        (88, 8.0),
        (130, -25.0),
        (160, -TORQUE_BOUND),
        (180, -5.0),
        (220, 20.0),
        (250, TORQUE_BOUND),
        (262, 0.0),
        (310, -TORQUE_BOUND),
        (318, 10.0),
        (365, -15.0),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn actuator_satisfies_structural_assumptions() {
        let (sys, cons, prior) = synthetic_actuator(1.0, 0.1).unwrap();
        let report = sys.validate();
        assert!(report.all_passed(), "{:?}", report.checks);
        assert_eq!(cons.n_ineq(), 2);
        assert_eq!(prior.x0.len(), 4);
        // The lumped dynamics are stable.
        let a_z = sys.a.view((0, 0), (3, 3)).into_owned();
        let rho = descriptor_mhe::linalg::spectral_radius(&a_z);
        assert!(rho < 1.0, "spectral radius {rho}");
    }

    #[test]
    fn steady_state_coupling_contracts() {
        let (sys, _, prior) = synthetic_actuator(1.0, 0.1).unwrap();
        let steady =
            descriptor_mhe::dkf::riccati_steady_state(&sys, &prior.p0, 1e-11, 50_000).unwrap();
        let rho = descriptor_mhe::linalg::spectral_radius(&steady.m_mat);
        assert!(rho < 1.0, "smoother chain spectral radius {rho}");
        // Coupling norms at increasing lags strictly decrease.
        let mut power = steady.m_mat.clone();
        let mut last = f64::INFINITY;
        for _ in 0..5 {
            let norm = descriptor_mhe::dkf::coupling_norm(&steady.gamma, &power).unwrap();
            assert!(norm < last, "coupling norm not decreasing: {norm} vs {last}");
            last = norm;
            power = &power * &steady.m_mat;
        }
    }
}
