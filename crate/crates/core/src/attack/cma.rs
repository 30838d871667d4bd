//! Covariance matrix adaptation: weighted recombination, cumulative step
//! size, rank-one plus rank-mu covariance updates with per-coordinate
//! diagonal decoding, and optional determinant normalization.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{
    AttackObjective, AttackOutcome, BestCandidate, CandidateScore, EsState, TraceFn,
    MAX_CONSECUTIVE_INFEASIBLE,
};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::space::{ConstraintSpace, NormalizedPoint};
use crate::warp::Image;

/// Eigenvalues below this are clamped up when the covariance is repaired.
pub const EIGENVALUE_FLOOR: f64 = 1e-12;

/// How candidates that leave the normalized box are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feasibility {
    /// Evaluate the box projection of the candidate; the strategy itself
    /// keeps moving in the unconstrained space.
    Project,
    /// Evaluate `tanh` of the candidate, mapping all of space into the box.
    Tanh,
    /// Redraw until the candidate lands inside, erroring after
    /// [`MAX_CONSECUTIVE_INFEASIBLE`] straight misses.
    Resample,
}

/// Volume control applied to the covariance after each update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetNormalization {
    /// Divide by `det(C)^(1/d)`, pinning the determinant at one so the
    /// step size alone carries the scale.
    DthRoot,
    /// Divide by `det(C)` itself. Only a unit-volume rescale for d = 2;
    /// kept for comparing against runs that used it.
    Raw,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CmaOptions {
    pub feasibility: Feasibility,
    pub det_normalization: DetNormalization,
}

impl Default for CmaOptions {
    fn default() -> Self {
        Self { feasibility: Feasibility::Project, det_normalization: DetNormalization::DthRoot }
    }
}

/// Offspring per update call: `max(3, 4 + floor(3 log10 d))`.
pub fn population_size(dims: usize) -> usize {
    let by_dim = 4 + (3.0 * (dims as f64).log10()).floor() as i64;
    by_dim.max(3) as usize
}

/// Strategy constants, fixed by the dimension.
struct Constants {
    lambda: usize,
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c_1: f64,
    c_mu: f64,
    c_1_diag: f64,
    c_mu_diag: f64,
    chi_n: f64,
}

fn constants(dims: usize) -> Constants {
    let d = dims as f64;
    let lambda = population_size(dims);
    let mu = (lambda / 2).max(1);
    let raw: Vec<f64> = (0..mu)
        .map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - ((i + 1) as f64).ln())
        .collect();
    let sum: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / sum).collect();
    let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    let c_sigma = (mu_eff + 2.0) / (d + mu_eff + 5.0);
    let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (d + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
    let c_c = (4.0 + mu_eff / d) / (d + 4.0 + 2.0 * mu_eff / d);
    let c_1 = 2.0 / ((d + 1.3).powi(2) + mu_eff);
    let c_mu =
        (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((d + 2.0).powi(2) + mu_eff));
    // The decoded per-coordinate scales may adapt faster than the full
    // matrix, like separable variants do, as long as the decay stays
    // convex.
    let boost = (d + 2.0) / 3.0;
    let c_1_diag = (c_1 * boost).min(1.0);
    let c_mu_diag = (c_mu * boost).min(1.0 - c_1_diag);
    let chi_n = d.sqrt() * (1.0 - 1.0 / (4.0 * d) + 1.0 / (21.0 * d * d));
    Constants {
        lambda,
        weights,
        mu_eff,
        c_sigma,
        d_sigma,
        c_c,
        c_1,
        c_mu,
        c_1_diag,
        c_mu_diag,
        chi_n,
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

struct Decomposition {
    vectors: DMatrix<f64>,
    values: DVector<f64>,
}

impl Decomposition {
    fn of(cov: &DMatrix<f64>) -> Self {
        let eig = cov.clone().symmetric_eigen();
        Self { vectors: eig.eigenvectors, values: eig.eigenvalues }
    }

    fn floored_values(&self) -> DVector<f64> {
        self.values.map(|v| v.max(EIGENVALUE_FLOOR))
    }

    fn det(&self) -> f64 {
        self.floored_values().iter().product()
    }

    /// `B diag(f(values)) B^T`.
    fn recompose(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let diag = DMatrix::from_diagonal(&self.floored_values().map(f));
        &self.vectors * diag * self.vectors.transpose()
    }
}

/// One strategy run against an arbitrary objective; returns the best
/// evaluated candidate and the number of objective evaluations. The
/// objective also receives the current step size and covariance
/// determinant, which matter only for tracing.
pub fn cma_core<F, R>(
    mut objective: F,
    space: &ConstraintSpace,
    state: &mut EsState,
    update_calls: u64,
    options: CmaOptions,
    rng: &mut R,
) -> Result<(BestCandidate, u64)>
where
    F: FnMut(&NormalizedPoint, f64, f64) -> Result<CandidateScore>,
    R: Rng + ?Sized,
{
    let consts = constants(state.dims());
    let mut best = BestCandidate::empty();
    let mut evals = 0u64;
    for _ in 0..update_calls {
        update_once(&mut objective, space, state, &consts, options, rng, &mut best)?;
        evals += consts.lambda as u64;
    }
    Ok((best, evals))
}

#[allow(clippy::too_many_arguments)]
fn update_once<F, R>(
    objective: &mut F,
    space: &ConstraintSpace,
    state: &mut EsState,
    consts: &Constants,
    options: CmaOptions,
    rng: &mut R,
    best: &mut BestCandidate,
) -> Result<()>
where
    F: FnMut(&NormalizedPoint, f64, f64) -> Result<CandidateScore>,
    R: Rng + ?Sized,
{
    let dims = state.dims();
    let d = dims as f64;
    let sigma = state.sigma;
    let mean = DVector::from_column_slice(state.mean.values());

    let decomp = Decomposition::of(&state.cov);
    let sqrt_vals = decomp.floored_values().map(f64::sqrt);
    let inv_sqrt_c = decomp.recompose(|v| 1.0 / v.sqrt());
    let cov_det = decomp.det();

    // Sample and evaluate the population.
    let mut raw: Vec<DVector<f64>> = Vec::with_capacity(consts.lambda);
    let mut scores: Vec<CandidateScore> = Vec::with_capacity(consts.lambda);
    for _ in 0..consts.lambda {
        let mut draw = || {
            let z = DVector::from_iterator(
                dims,
                (0..dims).map(|_| rng.sample::<f64, _>(StandardNormal)),
            );
            &mean + (&decomp.vectors * z.component_mul(&sqrt_vals)) * sigma
        };
        let x = match options.feasibility {
            Feasibility::Resample => {
                let mut accepted = None;
                for _ in 0..MAX_CONSECUTIVE_INFEASIBLE {
                    let x = draw();
                    if space.contains(&NormalizedPoint::new(x.iter().copied().collect())) {
                        accepted = Some(x);
                        break;
                    }
                }
                accepted.ok_or(Error::InfeasibleSampling {
                    attempts: MAX_CONSECUTIVE_INFEASIBLE,
                })?
            }
            _ => draw(),
        };
        let candidate = NormalizedPoint::new(x.iter().copied().collect());
        let eval_point = match options.feasibility {
            Feasibility::Project => candidate.project(),
            Feasibility::Tanh => candidate.tanh_squash(),
            Feasibility::Resample => candidate,
        };
        let score = objective(&eval_point, sigma, cov_det)?;
        best.offer(&eval_point, score);
        raw.push(x);
        scores.push(score);
    }

    // Rank by adversarialness, stable so ties keep sampling order.
    let mut order: Vec<usize> = (0..consts.lambda).collect();
    order.sort_by(|a, b| scores[*b].cmp_adversarial(&scores[*a]));

    // Weighted recombination in the raw (pre-projection) coordinates.
    let mut new_mean = DVector::zeros(dims);
    for (w, idx) in consts.weights.iter().zip(&order) {
        new_mean += &raw[*idx] * *w;
    }
    let y_w = (&new_mean - &mean) / sigma;

    // Cumulative step-size path, whitened by C^(-1/2).
    let cs = consts.c_sigma;
    state.path_sigma =
        &state.path_sigma * (1.0 - cs) + (&inv_sqrt_c * &y_w) * (cs * (2.0 - cs) * consts.mu_eff).sqrt();
    let ps_norm = state.path_sigma.norm();
    let h_sigma = ps_norm < (1.4 + 2.0 / (d + 1.0)) * consts.chi_n;

    // Covariance path, stalled while the step-size path is too long.
    let cc = consts.c_c;
    state.path_cov = &state.path_cov * (1.0 - cc)
        + &y_w * if h_sigma { (cc * (2.0 - cc) * consts.mu_eff).sqrt() } else { 0.0 };

    // Split the covariance into per-coordinate scales and a correlation
    // part, update each at its own rate, and recompose.
    let d_scale = state.cov.diagonal().map(|v| v.max(EIGENVALUE_FLOOR).sqrt());
    let inv_d = d_scale.map(|v| 1.0 / v);
    let mut corr = state.cov.clone();
    for i in 0..dims {
        for j in 0..dims {
            corr[(i, j)] *= inv_d[i] * inv_d[j];
        }
    }

    let delta_h = if h_sigma { 0.0 } else { cc * (2.0 - cc) };
    let pc_corr = state.path_cov.component_mul(&inv_d);
    let mut new_corr = corr * (1.0 - consts.c_1 - consts.c_mu + consts.c_1 * delta_h);
    new_corr += (&pc_corr * pc_corr.transpose()) * consts.c_1;
    let mut new_d2 = DVector::zeros(dims);
    for j in 0..dims {
        new_d2[j] = (1.0 - consts.c_1_diag - consts.c_mu_diag)
            * d_scale[j]
            * d_scale[j]
            + consts.c_1_diag * state.path_cov[j] * state.path_cov[j];
    }
    for (w, idx) in consts.weights.iter().zip(&order) {
        let y = (&raw[*idx] - &mean).component_mul(&inv_d) / sigma;
        new_corr += (&y * y.transpose()) * (consts.c_mu * *w);
        for j in 0..dims {
            let step = (raw[*idx][j] - mean[j]) / sigma;
            new_d2[j] += consts.c_mu_diag * *w * step * step;
        }
    }
    let new_d = new_d2.map(|v| v.max(EIGENVALUE_FLOOR).sqrt());
    let mut new_cov = new_corr;
    for i in 0..dims {
        for j in 0..dims {
            new_cov[(i, j)] *= new_d[i] * new_d[j];
        }
    }
    symmetrize(&mut new_cov);

    // Repair: floor escaped eigenvalues, which also guards the next
    // sampling decomposition.
    let check = Decomposition::of(&new_cov);
    let min_eig = check.values.min();
    let repaired = if min_eig < EIGENVALUE_FLOOR {
        log::warn!(
            "covariance eigenvalue {min_eig:e} below floor {EIGENVALUE_FLOOR:e}; clamping"
        );
        check.recompose(|v| v)
    } else {
        new_cov
    };

    let det = check.det();
    state.cov = match options.det_normalization {
        DetNormalization::DthRoot => repaired / det.powf(1.0 / d),
        DetNormalization::Raw => repaired / det,
        DetNormalization::Off => repaired,
    };

    state.sigma = sigma * ((cs / consts.d_sigma) * (ps_norm / consts.chi_n - 1.0)).exp();
    if !state.sigma.is_finite() || state.sigma <= 0.0 {
        return Err(Error::Divergence(format!("step size became {}", state.sigma)));
    }
    state.mean = NormalizedPoint::new(new_mean.iter().copied().collect());
    if let Some(score) = best.score() {
        if score.cmp_adversarial(&state.best_score) == std::cmp::Ordering::Greater {
            state.best_score = score;
        }
    }
    Ok(())
}

/// Attacks one example with the full covariance-adapting strategy,
/// resuming from `state`. Spends `population_size(d)` forward passes per
/// update call; with zero calls the outcome is the untouched image.
#[allow(clippy::too_many_arguments)]
pub fn cma_es<R: Rng + ?Sized>(
    classifier: &dyn Classifier,
    image: &Image,
    label: usize,
    space: &ConstraintSpace,
    state: &mut EsState,
    update_calls: u64,
    options: CmaOptions,
    rng: &mut R,
    trace: Option<TraceFn>,
) -> Result<AttackOutcome> {
    if state.dims() != space.dims() {
        return Err(Error::Shape(format!(
            "state has {} dims, space has {}",
            state.dims(),
            space.dims()
        )));
    }
    if !(state.sigma.is_finite() && state.sigma > 0.0) {
        return Err(Error::Config(format!("step size {} invalid", state.sigma)));
    }
    let mut objective = AttackObjective::new(classifier, image, label, space, trace);
    let (best, evals) = cma_core(
        |p, s, det| objective.eval(p, Some(s), Some(det)),
        space,
        state,
        update_calls,
        options,
        rng,
    )?;
    debug_assert_eq!(objective.evals(), evals);
    match best.into_inner() {
        Some((point, score)) => objective.finish(&point, score),
        None => objective.finish(&NormalizedPoint::zeros(space.dims()), CandidateScore::none()),
    }
}
