//! Seeded data generation. All randomness comes from one ChaCha8 stream in
//! a fixed draw order (initial state, then per step the process noise
//! followed by the measurement noise), so a seed pins the data bytes on
//! every platform.

use descriptor_mhe::model::{MeasurementRecord, Stepper, Trajectory};
use descriptor_mhe::{linalg, ConstraintSet, DescriptorSystem, Error, Prior, Result};
use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::ExperimentConfig;

fn standard_vector(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

/// Simulate the configured horizon: initial state drawn from the prior,
/// isotropic Gaussian noise with the configured variances (zero variance
/// means noise-free), and the disturbance profile realized exactly on its
/// state component through the free directions of `E`.
pub fn generate_data(
    config: &ExperimentConfig,
    sys: &DescriptorSystem,
    constraints: &ConstraintSet,
    prior: &Prior,
) -> Result<(Trajectory, MeasurementRecord)> {
    let t = config.t_final;
    let n = sys.n();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let p0_chol = linalg::spd_cholesky(&prior.p0, "prior weight P0")?;
    let x0 = &prior.x0 + p0_chol.l() * standard_vector(&mut rng, n);

    let w_scale = config.process_noise_var.sqrt();
    let v_scale = config.measurement_noise_var.sqrt();
    let mut process = Vec::with_capacity(t);
    let mut meas = Vec::with_capacity(t);
    for _ in 0..t {
        process.push(standard_vector(&mut rng, sys.n1()) * w_scale);
        meas.push(standard_vector(&mut rng, sys.m()) * v_scale);
    }

    let profile = config.disturbance_profile();
    let stepper = Stepper::new(sys);
    if let Some(p) = &profile {
        if p.component >= n {
            return Err(Error::InvalidInput(format!(
                "disturbance component {} out of range for state dimension {n}",
                p.component
            )));
        }
        if stepper.free_dim() == 0 {
            return Err(Error::InvalidInput(
                "disturbance profile given but E has no free directions".into(),
            ));
        }
    }

    let u = DVector::zeros(sys.q_dim());
    let mut states = Vec::with_capacity(t + 1);
    let mut residuals = Vec::with_capacity(t);
    let mut violated = Vec::new();
    states.push(x0);
    for k in 0..t {
        let base = stepper.min_norm_next(sys, &states[k], &u, &process[k], k)?;
        let x_next = match &profile {
            Some(p) => {
                // Choose the minimum-norm free coefficients that put the
                // scheduled value on the profile component.
                let row = stepper.basis().row(p.component).transpose();
                let row_sq = row.norm_squared();
                if row_sq < 1e-24 {
                    return Err(Error::InvalidInput(format!(
                        "state component {} is not a free direction of E",
                        p.component
                    )));
                }
                let gap = p.value_at(k) - base[p.component];
                &base + stepper.basis() * (row * (gap / row_sq))
            }
            None => base,
        };
        let rhs = &sys.a * &states[k] + &sys.b * &u + &process[k];
        residuals.push((&sys.e * &x_next - &rhs).amax());
        if !constraints.is_empty() {
            let viol = constraints.violation(&states[k], &x_next);
            if viol
                .iter()
                .any(|&v| v > 1e-9 * (1.0 + constraints.d_c.amax()))
            {
                violated.push(k);
            }
        }
        states.push(x_next);
    }

    let record = MeasurementRecord::generate(sys, &states, meas);
    let traj = Trajectory {
        states,
        inputs: vec![u; t],
        process_noise: process,
        residuals,
        violated_steps: violated,
    };
    Ok((traj, record))
}
