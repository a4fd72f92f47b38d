//! Small dense Levenberg-Marquardt loop shared by the pose solver and the
//! joint intrinsics refinement. States live on a manifold, so problems apply
//! parameter steps themselves instead of exposing a flat vector.

use nalgebra::{DMatrix, DVector};

use super::GeometryError;

pub(crate) trait LmProblem {
    type State: Clone;

    /// Residual vector and Jacobian at `state`. Row scaling (whitening) is
    /// the problem's responsibility.
    fn eval(&self, state: &Self::State) -> Result<(DVector<f64>, DMatrix<f64>), GeometryError>;

    /// Residuals only; used for cheap step acceptance tests.
    fn residuals(&self, state: &Self::State) -> Result<DVector<f64>, GeometryError>;

    fn apply_step(&self, state: &Self::State, step: &DVector<f64>) -> Self::State;
}

pub(crate) struct LmSettings {
    pub max_iterations: usize,
    pub tol: f64,
    pub damping_init: f64,
    /// When set, the normal matrix condition number is checked at the first
    /// iteration and exceeding it aborts with `DegenerateConfiguration`.
    pub max_condition: Option<f64>,
}

pub(crate) struct LmOutcome<S> {
    pub state: S,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub last_step_norm: f64,
}

const DAMPING_MAX: f64 = 1e15;
const DAMPING_MIN: f64 = 1e-15;

/// Minimizes `|r(state)|^2`. Steps solve `(J^T J + lambda diag(J^T J)) d = -J^T r`;
/// rejected steps raise `lambda` tenfold, accepted ones lower it tenfold.
/// Convergence is a step norm or gradient norm below `tol`.
pub(crate) fn minimize<P: LmProblem>(
    problem: &P,
    init: P::State,
    settings: &LmSettings,
) -> Result<LmOutcome<P::State>, GeometryError> {
    let mut state = init;
    let (mut residuals, mut jacobian) = problem.eval(&state)?;
    let mut objective = residuals.norm_squared();
    let mut damping = settings.damping_init;
    let mut last_step_norm = f64::INFINITY;

    for iteration in 1..=settings.max_iterations {
        let jt = jacobian.transpose();
        let normal = &jt * &jacobian;
        let gradient = &jt * &residuals;

        if iteration == 1 {
            check_conditioning(&normal, settings.max_condition)?;
        }
        if gradient.norm() < settings.tol {
            return Ok(LmOutcome { state, objective, iterations: iteration - 1, converged: true, last_step_norm });
        }

        // Inner damping loop: retry with stronger damping until a step
        // lowers the objective or damping saturates.
        let mut accepted = false;
        while damping <= DAMPING_MAX {
            let mut system = normal.clone();
            let n = system.nrows();
            for i in 0..n {
                let d = normal[(i, i)].max(1e-12);
                system[(i, i)] += damping * d;
            }
            let step = match system.cholesky() {
                Some(chol) => chol.solve(&(-&gradient)),
                None => {
                    damping *= 10.0;
                    continue;
                }
            };
            // A proposed update this small cannot move the state in any
            // meaningful way, accepted or not: the iterate is stationary for
            // practical purposes. Without this check a flat neighborhood
            // (noisy optimum) rejects every trial and saturates the damping.
            let step_norm = step.norm();
            if step_norm < settings.tol {
                return Ok(LmOutcome {
                    state,
                    objective,
                    iterations: iteration,
                    converged: true,
                    last_step_norm: step_norm,
                });
            }
            let candidate = problem.apply_step(&state, &step);
            // A trial step may throw points behind the camera; treat that as
            // a rejected step, not a hard failure.
            let candidate_obj = match problem.residuals(&candidate) {
                Ok(r) => r.norm_squared(),
                Err(GeometryError::NonPositiveDepth { .. }) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            if candidate_obj.is_finite() && candidate_obj < objective {
                state = candidate;
                objective = candidate_obj;
                last_step_norm = step.norm();
                damping = (damping / 10.0).max(DAMPING_MIN);
                accepted = true;
                break;
            }
            damping *= 10.0;
        }

        if !accepted {
            // Damping saturated without progress: the current state is as
            // good as this loop will get.
            return Ok(LmOutcome { state, objective, iterations: iteration, converged: false, last_step_norm });
        }
        if last_step_norm < settings.tol {
            return Ok(LmOutcome { state, objective, iterations: iteration, converged: true, last_step_norm });
        }

        let (r, j) = problem.eval(&state)?;
        residuals = r;
        jacobian = j;
    }

    Ok(LmOutcome {
        state,
        objective,
        iterations: settings.max_iterations,
        converged: false,
        last_step_norm,
    })
}

fn check_conditioning(normal: &DMatrix<f64>, max_condition: Option<f64>) -> Result<(), GeometryError> {
    let Some(limit) = max_condition else { return Ok(()) };
    let eigen = normal.clone().symmetric_eigen();
    let max = eigen.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min = eigen.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    if max <= 0.0 || max.is_nan() || min <= 0.0 || max / min > limit {
        let cond = if min > 0.0 { max / min } else { f64::INFINITY };
        return Err(GeometryError::DegenerateConfiguration(format!(
            "normal matrix condition number {cond:.3e} exceeds {limit:.1e}"
        )));
    }
    Ok(())
}
