//! (1+1) evolution strategy with multiplicative step-size adaptation and
//! periodic restarts of the step size.

use rand::Rng;

use super::{
    sample_isotropic_feasible, AttackObjective, AttackOutcome, BestCandidate, CandidateScore,
    EsState, TraceFn,
};
use crate::error::Result;
use crate::model::Classifier;
use crate::space::{ConstraintSpace, NormalizedPoint};
use crate::warp::Image;

/// Step-size factor after a successful iteration.
pub const SIGMA_GROW: f64 = 1.5;

/// Step-size factor after a failed iteration: `1.5^(-1/4)`, so four
/// failures cancel one success.
pub fn sigma_shrink() -> f64 {
    SIGMA_GROW.powf(-0.25)
}

/// Restart threshold relative to the initial step size: after five
/// consecutive failures from `sigma0` the step size is back at
/// `sigma0 * 1.5^(-5/4)` and gets reset.
fn restart_threshold(sigma0: f64) -> f64 {
    // The running sigma reaches this value through a product of individual
    // factors, which can differ from the analytic threshold by a few ulps;
    // 1e-12 relative slack is far above that and far below the 9.6% gap to
    // the next reachable sigma value.
    sigma0 * SIGMA_GROW.powf(-1.25) * (1.0 + 1e-12)
}

/// One run of the strategy against an arbitrary objective. `state` is
/// advanced in place; `incumbent` carries the best candidate seen before
/// this run (for resumed searches) and the winner is returned.
///
/// Each iteration costs exactly one objective evaluation, plus resampling
/// draws that never touch the objective. The objective also receives the
/// step size the candidate was drawn with, which matters only for tracing.
pub fn one_plus_one_core<F, R>(
    mut objective: F,
    space: &ConstraintSpace,
    state: &mut EsState,
    iterations: u64,
    sigma0: f64,
    rng: &mut R,
    mut incumbent: BestCandidate,
) -> Result<BestCandidate>
where
    F: FnMut(&NormalizedPoint, f64) -> Result<CandidateScore>,
    R: Rng + ?Sized,
{
    let threshold = restart_threshold(sigma0);
    for _ in 0..iterations {
        let candidate = sample_isotropic_feasible(space, &state.mean, state.sigma, rng)?;
        let score = objective(&candidate, state.sigma)?;
        incumbent.offer(&candidate, score);
        // Success means at least as adversarial as the current mean, so the
        // walk can drift across plateaus.
        if score.cmp_adversarial(&state.best_score) != std::cmp::Ordering::Less {
            state.mean = candidate;
            state.best_score = score;
            state.sigma *= SIGMA_GROW;
        } else {
            state.sigma *= sigma_shrink();
        }
        if state.sigma <= threshold {
            state.sigma = sigma0;
        }
    }
    Ok(incumbent)
}

/// Attacks one example with the (1+1) strategy, resuming from `state`.
///
/// The run opens by re-scoring the stored mean, because a score recorded
/// during an earlier run may describe a classifier that has since been
/// trained further; comparing fresh candidates against it would skew the
/// success rule in whichever direction the model drifted. Total cost is
/// therefore `iterations + 1` forward passes. With zero iterations nothing
/// is classified and the outcome is the untouched image.
#[allow(clippy::too_many_arguments)]
pub fn one_plus_one_es<R: Rng + ?Sized>(
    classifier: &dyn Classifier,
    image: &Image,
    label: usize,
    space: &ConstraintSpace,
    state: &mut EsState,
    iterations: u64,
    sigma0: f64,
    rng: &mut R,
    trace: Option<TraceFn>,
) -> Result<AttackOutcome> {
    let mut objective = AttackObjective::new(classifier, image, label, space, trace);
    if iterations == 0 {
        return objective.finish(&NormalizedPoint::zeros(space.dims()), CandidateScore::none());
    }
    let baseline = objective.eval(&state.mean, Some(state.sigma), Some(1.0))?;
    state.best_score = baseline;
    let seed = BestCandidate::seeded(state.mean.clone(), baseline);
    let best = one_plus_one_core(
        |point, sigma| objective.eval(point, Some(sigma), Some(1.0)),
        space,
        state,
        iterations,
        sigma0,
        rng,
        seed,
    )?;
    let (point, score) = best.into_inner().expect("seeded incumbent");
    debug_assert_eq!(objective.evals(), iterations + 1);
    objective.finish(&point, score)
}
