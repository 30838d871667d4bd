//! Search for the transform in a constraint space that a classifier
//! handles worst: exhaustive grids, random sampling, and two evolution
//! strategies that share per-example state across epochs.

mod cma;
mod es;
mod sigma;

pub use cma::{cma_core, cma_es, population_size, CmaOptions, DetNormalization, Feasibility};
pub use es::{one_plus_one_core, one_plus_one_es};
pub use sigma::{infeasible_mass, sigma0_solve};

use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{cross_entropy, predict, Classifier};
use crate::space::{ConstraintSpace, NormalizedPoint};
use crate::warp::{warp_image, Image, TransformParams};

/// Resample cap: this many consecutive infeasible draws abort the attack.
pub const MAX_CONSECUTIVE_INFEASIBLE: u32 = 10_000;

/// How adversarial one transform candidate is. Ordered lexicographically:
/// a misclassifying candidate beats any correctly classified one, loss
/// breaks ties within each group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateScore {
    pub misclassified: bool,
    pub loss: f64,
}

impl CandidateScore {
    /// Neutral incumbent: correctly classified at zero loss, so any real
    /// candidate compares at least equal.
    pub fn none() -> Self {
        Self { misclassified: false, loss: 0.0 }
    }

    /// `Greater` means `self` is the more adversarial candidate.
    pub fn cmp_adversarial(&self, other: &Self) -> Ordering {
        self.misclassified
            .cmp(&other.misclassified)
            .then_with(|| self.loss.total_cmp(&other.loss))
    }
}

/// Classifies a single (already warped) image and scores it against the
/// true label. Loss is computed in `f64` from the `f32` logits.
pub fn score_candidate(
    classifier: &dyn Classifier,
    image: &Image,
    label: usize,
) -> CandidateScore {
    let logits = classifier.logits(image);
    let wide: Vec<f64> = logits.iter().map(|l| f64::from(*l)).collect();
    CandidateScore {
        misclassified: predict(&logits) != label,
        loss: cross_entropy(&wide, label),
    }
}

/// One classifier evaluation inside an attack, for trace files. The
/// step-size and covariance-determinant fields are only filled by the
/// evolution strategies.
#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub evaluation: u64,
    pub transform: TransformParams,
    pub loss: f64,
    pub misclassified: bool,
    pub sigma: Option<f64>,
    pub cov_det: Option<f64>,
}

pub type TraceFn<'a> = &'a mut dyn FnMut(&TraceRecord);

/// The transform an attack settled on, with its score, the resulting
/// image, and exactly how many classifier evaluations were spent.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub transform: TransformParams,
    pub score: CandidateScore,
    pub adversarial_image: Image,
    pub forward_passes: u64,
}

/// Warps, classifies, scores, and traces candidates; owns the evaluation
/// counter every attack reports as `forward_passes`.
pub(crate) struct AttackObjective<'a, 't> {
    classifier: &'a dyn Classifier,
    image: &'a Image,
    label: usize,
    space: &'a ConstraintSpace,
    evals: u64,
    trace: Option<TraceFn<'t>>,
}

impl<'a, 't> AttackObjective<'a, 't> {
    pub(crate) fn new(
        classifier: &'a dyn Classifier,
        image: &'a Image,
        label: usize,
        space: &'a ConstraintSpace,
        trace: Option<TraceFn<'t>>,
    ) -> Self {
        Self { classifier, image, label, space, evals: 0, trace }
    }

    pub(crate) fn eval(
        &mut self,
        point: &NormalizedPoint,
        sigma: Option<f64>,
        cov_det: Option<f64>,
    ) -> Result<CandidateScore> {
        let transform = self.space.denormalize(point);
        let warped = warp_image(self.image, &transform)?;
        let score = score_candidate(self.classifier, &warped, self.label);
        if let Some(trace) = self.trace.as_mut() {
            trace(&TraceRecord {
                evaluation: self.evals,
                transform,
                loss: score.loss,
                misclassified: score.misclassified,
                sigma,
                cov_det,
            });
        }
        self.evals += 1;
        Ok(score)
    }

    pub(crate) fn evals(&self) -> u64 {
        self.evals
    }

    /// Builds the final outcome by re-warping the winning point; costs no
    /// classifier evaluation.
    pub(crate) fn finish(
        &self,
        point: &NormalizedPoint,
        score: CandidateScore,
    ) -> Result<AttackOutcome> {
        let transform = self.space.denormalize(point);
        Ok(AttackOutcome {
            adversarial_image: warp_image(self.image, &transform)?,
            transform,
            score,
            forward_passes: self.evals,
        })
    }
}

/// Running winner under the adversarial order; first-seen candidate keeps
/// exact ties.
#[derive(Debug)]
pub struct BestCandidate {
    inner: Option<(NormalizedPoint, CandidateScore)>,
}

impl BestCandidate {
    pub fn empty() -> Self {
        Self { inner: None }
    }

    pub fn seeded(point: NormalizedPoint, score: CandidateScore) -> Self {
        Self { inner: Some((point, score)) }
    }

    pub fn offer(&mut self, point: &NormalizedPoint, score: CandidateScore) {
        let replace = match &self.inner {
            None => true,
            Some((_, incumbent)) => score.cmp_adversarial(incumbent) == Ordering::Greater,
        };
        if replace {
            self.inner = Some((point.clone(), score));
        }
    }

    pub fn score(&self) -> Option<CandidateScore> {
        self.inner.as_ref().map(|(_, s)| *s)
    }

    pub fn into_inner(self) -> Option<(NormalizedPoint, CandidateScore)> {
        self.inner
    }
}

/// Evaluates an explicit candidate list in order and returns the winner.
/// Both [`grid_search`] and [`worst_of_k`] are thin wrappers over this.
pub fn search_enumerated(
    classifier: &dyn Classifier,
    image: &Image,
    label: usize,
    space: &ConstraintSpace,
    points: &[NormalizedPoint],
    trace: Option<TraceFn>,
) -> Result<AttackOutcome> {
    if points.is_empty() {
        return Err(Error::Config("empty candidate list".into()));
    }
    for p in points {
        if p.dims() != space.dims() {
            return Err(Error::Shape(format!(
                "candidate has {} dims, space has {}",
                p.dims(),
                space.dims()
            )));
        }
    }
    let mut objective = AttackObjective::new(classifier, image, label, space, trace);
    let mut best = BestCandidate::empty();
    for point in points {
        let score = objective.eval(point, None, None)?;
        best.offer(point, score);
    }
    let (point, score) = best.into_inner().expect("at least one candidate");
    objective.finish(&point, score)
}

pub(crate) fn linspace(count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![0.0];
    }
    (0..count)
        .map(|i| 2.0 * (i as f64) / ((count - 1) as f64) - 1.0)
        .collect()
}

/// All grid candidates in row-major order (first parameter varies
/// slowest). Per axis: `count == 1` contributes the midpoint, larger
/// counts spread evenly over `[-1, 1]` with both endpoints included.
pub fn grid_points(space: &ConstraintSpace, counts: &[usize]) -> Result<Vec<NormalizedPoint>> {
    if counts.len() != space.dims() {
        return Err(Error::Config(format!(
            "{} grid counts for a {}-dimensional space",
            counts.len(),
            space.dims()
        )));
    }
    if counts.contains(&0) {
        return Err(Error::Config("grid count of zero".into()));
    }
    let axes: Vec<Vec<f64>> = counts.iter().map(|c| linspace(*c)).collect();
    let total: usize = counts.iter().product();
    let mut points = Vec::with_capacity(total);
    let mut idx = vec![0usize; counts.len()];
    loop {
        points.push(NormalizedPoint::new(
            idx.iter().zip(&axes).map(|(i, axis)| axis[*i]).collect(),
        ));
        // Row-major odometer: bump the last axis first.
        let mut dim = counts.len();
        loop {
            if dim == 0 {
                return Ok(points);
            }
            dim -= 1;
            idx[dim] += 1;
            if idx[dim] < counts[dim] {
                break;
            }
            idx[dim] = 0;
        }
    }
}

/// Exhaustive search over an axis-aligned grid; the number of classifier
/// evaluations is exactly the product of the counts.
pub fn grid_search(
    classifier: &dyn Classifier,
    image: &Image,
    label: usize,
    space: &ConstraintSpace,
    counts: &[usize],
    trace: Option<TraceFn>,
) -> Result<AttackOutcome> {
    let points = grid_points(space, counts)?;
    search_enumerated(classifier, image, label, space, &points, trace)
}

/// Takes the worst of `k` uniform samples from the space.
pub fn worst_of_k<R: Rng + ?Sized>(
    classifier: &dyn Classifier,
    image: &Image,
    label: usize,
    space: &ConstraintSpace,
    k: u64,
    rng: &mut R,
    trace: Option<TraceFn>,
) -> Result<AttackOutcome> {
    if k == 0 {
        return Err(Error::Config("worst-of-k needs k >= 1".into()));
    }
    let points: Vec<NormalizedPoint> =
        (0..k).map(|_| space.sample_uniform(rng)).collect();
    search_enumerated(classifier, image, label, space, &points, trace)
}

/// Per-example search state carried across epochs by the evolution
/// strategies. The covariance stays pinned at identity for the (1+1)
/// strategy; only the full CMA updates it and the two evolution paths.
///
/// `best_score` describes the mean under whichever classifier last scored
/// it. The (1+1) strategy re-scores the mean at the start of every run
/// rather than trusting this field, since the classifier may have been
/// trained in between.
#[derive(Debug, Clone)]
pub struct EsState {
    pub mean: NormalizedPoint,
    pub sigma: f64,
    pub cov: DMatrix<f64>,
    pub path_sigma: DVector<f64>,
    pub path_cov: DVector<f64>,
    pub best_score: CandidateScore,
}

impl EsState {
    /// State for an example never attacked before: mean at the identity
    /// transform, step size at `sigma0`, isotropic covariance, empty paths.
    pub fn fresh(dims: usize, sigma0: f64) -> Self {
        Self {
            mean: NormalizedPoint::zeros(dims),
            sigma: sigma0,
            cov: DMatrix::identity(dims, dims),
            path_sigma: DVector::zeros(dims),
            path_cov: DVector::zeros(dims),
            best_score: CandidateScore::none(),
        }
    }

    pub fn dims(&self) -> usize {
        self.mean.dims()
    }
}

/// Keyed collection of per-example search states. Attacks check a state
/// out by example index, advance it, and check it back in; evaluation
/// never uses a store, so every evaluation attack starts fresh.
#[derive(Debug, Default)]
pub struct EsStateStore {
    states: Mutex<HashMap<u64, EsState>>,
}

impl EsStateStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.states.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, example_index: u64) -> bool {
        self.states.lock().unwrap().contains_key(&example_index)
    }

    /// Returns the stored state for the example, or a fresh one if it was
    /// never checked in.
    pub fn get_or_init(&self, example_index: u64, dims: usize, sigma0: f64) -> EsState {
        self.states
            .lock()
            .unwrap()
            .get(&example_index)
            .cloned()
            .unwrap_or_else(|| EsState::fresh(dims, sigma0))
    }

    pub fn check_in(&self, example_index: u64, state: EsState) {
        self.states.lock().unwrap().insert(example_index, state);
    }
}

/// Draws from an isotropic Gaussian around `mean` until the point lands in
/// the space, giving up after [`MAX_CONSECUTIVE_INFEASIBLE`] draws.
pub(crate) fn sample_isotropic_feasible<R: Rng + ?Sized>(
    space: &ConstraintSpace,
    mean: &NormalizedPoint,
    sigma: f64,
    rng: &mut R,
) -> Result<NormalizedPoint> {
    for _ in 0..MAX_CONSECUTIVE_INFEASIBLE {
        let candidate = NormalizedPoint::new(
            mean.values()
                .iter()
                .map(|m| m + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect(),
        );
        if space.contains(&candidate) {
            return Ok(candidate);
        }
    }
    Err(Error::InfeasibleSampling { attempts: MAX_CONSECUTIVE_INFEASIBLE })
}
