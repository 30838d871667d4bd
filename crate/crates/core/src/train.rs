//! Training regimes (plain, flip-augmented, worst-case transformed) and
//! the multi-mode accuracy evaluation harness.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::Write;

use crate::attack::{
    cma_es, grid_points, linspace, one_plus_one_es, population_size, score_candidate, worst_of_k,
    CmaOptions, EsState, EsStateStore,
};
use crate::data::{Dataset, LabeledExample};
use crate::error::{Error, Result};
use crate::model::{
    predict, Classifier, Cnn, CnnConfig, CountingClassifier, Optimizer, OptimizerKind,
};
use crate::space::{ConstraintSpace, NormalizedPoint};
use crate::warp::{warp_image, Image};

/// Inner-maximization attack run on every batch example during robust
/// training.
#[derive(Debug, Clone, PartialEq)]
pub enum AttackSpec {
    WorstOfK { k: u64 },
    OnePlusOne { iterations: u64, sigma0: f64 },
    Cma { update_calls: u64, options: CmaOptions, sigma0: f64 },
}

impl AttackSpec {
    /// Classifier evaluations one example costs under this attack. The
    /// (1+1) strategy spends one pass re-scoring its stored mean on top of
    /// the per-iteration samples.
    pub fn forward_passes_per_example(&self, dims: usize) -> u64 {
        match self {
            AttackSpec::WorstOfK { k } => *k,
            AttackSpec::OnePlusOne { iterations: 0, .. } => 0,
            AttackSpec::OnePlusOne { iterations, .. } => *iterations + 1,
            AttackSpec::Cma { update_calls, .. } => {
                update_calls * population_size(dims) as u64
            }
        }
    }

    fn validate(&self, dims: usize) -> Result<()> {
        if self.forward_passes_per_example(dims) == 0 {
            return Err(Error::Config("attack budget must be at least 1".into()));
        }
        let sigma0 = match self {
            AttackSpec::WorstOfK { .. } => return Ok(()),
            AttackSpec::OnePlusOne { sigma0, .. } => *sigma0,
            AttackSpec::Cma { sigma0, .. } => *sigma0,
        };
        if !(sigma0.is_finite() && sigma0 > 0.0) {
            return Err(Error::Config(format!("initial step size {sigma0} invalid")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: CnnConfig,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub model_seed: u64,
    pub shuffle_seed: u64,
    pub attack_seed: u64,
    pub log_every: u64,
}

impl TrainConfig {
    pub fn desk_scale() -> Self {
        Self {
            model: CnnConfig::small(),
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            batch_size: 32,
            iterations: 500,
            model_seed: 0,
            shuffle_seed: 1,
            attack_seed: 2,
            log_every: 50,
        }
    }

    fn validate(&self, dataset: &Dataset) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log interval must be at least 1".into()));
        }
        if (dataset.height(), dataset.width()) != (self.model.input_h, self.model.input_w) {
            return Err(Error::Shape(format!(
                "dataset images are {}x{} but the model expects {}x{}",
                dataset.height(),
                dataset.width(),
                self.model.input_h,
                self.model.input_w
            )));
        }
        Ok(())
    }
}

/// One sampled row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainProgress {
    pub iteration: u64,
    pub loss: f64,
    pub batch_accuracy: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// Rows at iteration 1, every `log_every`-th iteration, and the last.
    pub progress: Vec<TrainProgress>,
    /// Classifier evaluations spent inside attacks (zero for plain runs).
    pub attack_forward_passes: u64,
    pub steps: u64,
}

/// Deterministic epoch order: a fresh permutation per pass over the data.
fn epoch_order(len: usize, shuffle_seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(shuffle_seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// Yields index batches across epochs; a tail too small for a full batch
/// rolls over into the next epoch unless the whole dataset is smaller
/// than one batch.
struct BatchSchedule {
    len: usize,
    batch: usize,
    shuffle_seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSchedule {
    fn new(len: usize, batch: usize, shuffle_seed: u64) -> Self {
        let batch = batch.min(len);
        Self {
            len,
            batch,
            shuffle_seed,
            epoch: 0,
            order: epoch_order(len, shuffle_seed, 0),
            cursor: 0,
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.len {
            self.epoch += 1;
            self.order = epoch_order(self.len, self.shuffle_seed, self.epoch);
            self.cursor = 0;
        }
        let slice = &self.order[self.cursor..self.cursor + self.batch];
        self.cursor += self.batch;
        slice.to_vec()
    }
}

/// An independent random stream for one example within one iteration,
/// stable under any parallel schedule.
fn example_rng(attack_seed: u64, iteration: u64, example_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(
        attack_seed ^ iteration.wrapping_mul(0x517C_C1B7_2722_0A95),
    );
    rng.set_stream(example_index);
    rng
}

fn batch_accuracy(model: &Cnn<f32>, batch: &[(&Image, usize)]) -> f64 {
    let correct = batch
        .iter()
        .filter(|(image, label)| predict(&model.logits(image)) == *label)
        .count();
    correct as f64 / batch.len() as f64
}

fn push_progress(report: &mut TrainReport, config: &TrainConfig, row: TrainProgress) {
    let last = row.iteration == config.iterations;
    if row.iteration == 1 || row.iteration % config.log_every == 0 || last {
        log::info!(
            "iteration {} loss {:.4} batch accuracy {:.3}",
            row.iteration,
            row.loss,
            row.batch_accuracy
        );
        if report.progress.last() != Some(&row) {
            report.progress.push(row);
        }
    }
}

/// Plain minibatch training on the dataset as given.
pub fn train_standard(dataset: &Dataset, config: &TrainConfig) -> Result<(Cnn<f32>, TrainReport)> {
    config.validate(dataset)?;
    let mut model = Cnn::<f32>::new(config.model, config.model_seed)?;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, &model);
    let mut schedule = BatchSchedule::new(dataset.len(), config.batch_size, config.shuffle_seed);
    let mut report = TrainReport::default();
    for iteration in 1..=config.iterations {
        let indices = schedule.next_batch();
        let batch: Vec<(&Image, usize)> = indices
            .iter()
            .map(|&i| {
                let ex = dataset.get(i);
                (&ex.image, ex.label as usize)
            })
            .collect();
        let loss = crate::model::train_step(&mut model, &mut optimizer, &batch)?;
        report.steps += 1;
        push_progress(
            &mut report,
            config,
            TrainProgress { iteration, loss, batch_accuracy: batch_accuracy(&model, &batch) },
        );
    }
    Ok((model, report))
}

/// Doubles the dataset: every input gains one copy that is horizontally
/// flipped with probability one half, fixed before training starts.
pub fn augment_flip<R: Rng + ?Sized>(dataset: &Dataset, rng: &mut R) -> Result<Dataset> {
    let mut examples: Vec<LabeledExample> = dataset.examples().to_vec();
    let next_index = examples.iter().map(|ex| ex.index).max().unwrap_or(0) + 1;
    for (offset, original) in dataset.examples().iter().enumerate() {
        let image = if rng.gen_bool(0.5) {
            original.image.flip_horizontal()
        } else {
            original.image.clone()
        };
        examples.push(LabeledExample {
            image,
            label: original.label,
            index: next_index + offset as u64,
        });
    }
    Dataset::new(format!("{}+flip", dataset.name()), examples)
}

/// Runs `attack` against one example, resuming strategy state from the
/// store for the evolution strategies.
fn attack_example(
    classifier: &dyn Classifier,
    example: &LabeledExample,
    space: &ConstraintSpace,
    attack: &AttackSpec,
    store: &EsStateStore,
    rng: &mut ChaCha8Rng,
) -> Result<(Image, u64)> {
    let label = example.label as usize;
    let outcome = match attack {
        AttackSpec::WorstOfK { k } => {
            worst_of_k(classifier, &example.image, label, space, *k, rng, None)?
        }
        AttackSpec::OnePlusOne { iterations, sigma0 } => {
            let mut state = store.get_or_init(example.index, space.dims(), *sigma0);
            let outcome = one_plus_one_es(
                classifier,
                &example.image,
                label,
                space,
                &mut state,
                *iterations,
                *sigma0,
                rng,
                None,
            )?;
            store.check_in(example.index, state);
            outcome
        }
        AttackSpec::Cma { update_calls, options, sigma0 } => {
            let mut state = store.get_or_init(example.index, space.dims(), *sigma0);
            let outcome = cma_es(
                classifier,
                &example.image,
                label,
                space,
                &mut state,
                *update_calls,
                *options,
                rng,
                None,
            )?;
            store.check_in(example.index, state);
            outcome
        }
    };
    Ok((outcome.adversarial_image, outcome.forward_passes))
}

/// Worst-case training: each batch example is replaced by the most
/// adversarial transform its attack finds before the gradient step.
pub fn train_robust(
    dataset: &Dataset,
    config: &TrainConfig,
    attack: &AttackSpec,
    space: &ConstraintSpace,
    store: &EsStateStore,
) -> Result<(Cnn<f32>, TrainReport)> {
    config.validate(dataset)?;
    attack.validate(space.dims())?;
    let mut model = Cnn::<f32>::new(config.model, config.model_seed)?;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, &model);
    let mut schedule = BatchSchedule::new(dataset.len(), config.batch_size, config.shuffle_seed);
    let mut report = TrainReport::default();
    for iteration in 1..=config.iterations {
        let indices = schedule.next_batch();
        let originals: Vec<&LabeledExample> = indices.iter().map(|&i| dataset.get(i)).collect();
        let attacked: Vec<(Image, u64)> = originals
            .par_iter()
            .map(|example| {
                let mut rng = example_rng(config.attack_seed, iteration, example.index);
                attack_example(&model, example, space, attack, store, &mut rng).map_err(|e| {
                    Error::Divergence(format!(
                        "attack on example {} at iteration {iteration} failed: {e}",
                        example.index
                    ))
                })
            })
            .collect::<Result<_>>()?;
        report.attack_forward_passes += attacked.iter().map(|(_, passes)| passes).sum::<u64>();
        let batch: Vec<(&Image, usize)> = attacked
            .iter()
            .zip(&originals)
            .map(|((image, _), example)| (image, example.label as usize))
            .collect();
        let loss = crate::model::train_step(&mut model, &mut optimizer, &batch)?;
        report.steps += 1;
        let natural_batch: Vec<(&Image, usize)> =
            originals.iter().map(|ex| (&ex.image, ex.label as usize)).collect();
        push_progress(
            &mut report,
            config,
            TrainProgress {
                iteration,
                loss,
                batch_accuracy: batch_accuracy(&model, &natural_batch),
            },
        );
    }
    Ok((model, report))
}

/// One column of an accuracy table.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalMode {
    Natural,
    WorstOfK { k: u64 },
    Grid { counts: Vec<usize> },
    Es { iterations: u64, sigma0: f64 },
}

/// Step size used when an evaluation config does not name one.
pub const EVAL_ES_SIGMA0: f64 = 0.75;

impl EvalMode {
    pub fn label(&self) -> String {
        match self {
            EvalMode::Natural => "natural".into(),
            EvalMode::WorstOfK { k } => format!("worst-of-{k}"),
            EvalMode::Grid { counts } => {
                let dims: Vec<String> = counts.iter().map(|c| c.to_string()).collect();
                format!("grid-{}", dims.join("x"))
            }
            EvalMode::Es { iterations, .. } => format!("es-{iterations}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeReport {
    pub label: String,
    /// Accuracy in [0, 1] for each evaluation seed, in seed order.
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Classifier evaluations across all seeds of this mode.
    pub forward_passes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub modes: Vec<ModeReport>,
    pub seeds: Vec<u64>,
    pub examples: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Whether any candidate transform, tried in order, flips the prediction.
/// Stops at the first hit: a misclassifying candidate outranks every
/// correctly classified one, so the worst candidate misclassifies exactly
/// when some candidate does, and the skipped evaluations cannot change the
/// verdict.
fn any_candidate_misclassifies(
    classifier: &dyn Classifier,
    example: &LabeledExample,
    space: &ConstraintSpace,
    points: &[NormalizedPoint],
) -> Result<bool> {
    let label = example.label as usize;
    for point in points {
        let warped = warp_image(&example.image, &space.denormalize(point))?;
        if score_candidate(classifier, &warped, label).misclassified {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Whether this example stays correctly classified under the mode's
/// worst-case transform. Every mode checks the untouched image first, so
/// the identity is always in the candidate set.
fn example_survives(
    classifier: &dyn Classifier,
    example: &LabeledExample,
    space: &ConstraintSpace,
    mode: &EvalMode,
    seed: u64,
) -> Result<bool> {
    let label = example.label as usize;
    if predict(&classifier.logits(&example.image)) != label {
        return Ok(false);
    }
    let misclassified = match mode {
        EvalMode::Natural => false,
        EvalMode::WorstOfK { k } => {
            let mut rng = example_rng(seed, 0, example.index);
            let points: Vec<NormalizedPoint> =
                (0..*k).map(|_| space.sample_uniform(&mut rng)).collect();
            any_candidate_misclassifies(classifier, example, space, &points)?
        }
        EvalMode::Grid { counts } => {
            let points = grid_points(space, counts)?;
            any_candidate_misclassifies(classifier, example, space, &points)?
        }
        EvalMode::Es { iterations, sigma0 } => {
            let mut state = EsState::fresh(space.dims(), *sigma0);
            let mut rng = example_rng(seed, 0, example.index);
            one_plus_one_es(
                classifier,
                &example.image,
                label,
                space,
                &mut state,
                *iterations,
                *sigma0,
                &mut rng,
                None,
            )?
            .score
            .misclassified
        }
    };
    Ok(!misclassified)
}

/// Measures accuracy under each mode, once per seed, counting every
/// classifier evaluation. The model and any strategy state stores are
/// left untouched.
pub fn evaluate(
    classifier: &dyn Classifier,
    dataset: &Dataset,
    space: &ConstraintSpace,
    modes: &[EvalMode],
    seeds: &[u64],
) -> Result<EvalReport> {
    if modes.is_empty() {
        return Err(Error::Config("need at least one evaluation mode".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("need at least one evaluation seed".into()));
    }
    let mut reports = Vec::with_capacity(modes.len());
    for mode in modes {
        let counting = CountingClassifier::new(classifier);
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let survivors = dataset
                .examples()
                .par_iter()
                .map(|ex| example_survives(&counting, ex, space, mode, seed))
                .collect::<Result<Vec<bool>>>()?;
            let correct = survivors.iter().filter(|s| **s).count();
            per_seed.push(correct as f64 / dataset.len() as f64);
        }
        let (mean, std) = mean_std(&per_seed);
        reports.push(ModeReport {
            label: mode.label(),
            per_seed,
            mean,
            std,
            forward_passes: counting.count(),
        });
    }
    Ok(EvalReport { modes: reports, seeds: seeds.to_vec(), examples: dataset.len() })
}

/// One table row per report: cells are "mean±std" percentages in mode
/// order.
pub fn write_eval_csv<W: Write>(
    out: &mut W,
    rows: &[(&str, &EvalReport)],
) -> std::io::Result<()> {
    let first = rows.first().expect("at least one report row");
    write!(out, "regime")?;
    for mode in &first.1.modes {
        write!(out, ",{}", mode.label)?;
    }
    writeln!(out)?;
    for (label, report) in rows {
        write!(out, "{label}")?;
        for mode in &report.modes {
            write!(out, ",{:.2}±{:.2}", mode.mean * 100.0, mode.std * 100.0)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Per-seed accuracies and pass counts, one block per mode.
pub fn write_eval_detail<W: Write>(out: &mut W, report: &EvalReport) -> std::io::Result<()> {
    writeln!(out, "examples: {}", report.examples)?;
    let seeds: Vec<String> = report.seeds.iter().map(|s| s.to_string()).collect();
    writeln!(out, "seeds: {}", seeds.join(","))?;
    for mode in &report.modes {
        writeln!(out, "[{}]", mode.label)?;
        for (seed, acc) in report.seeds.iter().zip(&mode.per_seed) {
            writeln!(out, "  seed {seed}: accuracy {acc:.6}")?;
        }
        writeln!(out, "  mean {:.6} std {:.6}", mode.mean, mode.std)?;
        writeln!(out, "  forward passes {}", mode.forward_passes)?;
    }
    Ok(())
}

/// Cross-entropy loss over a grid spanning two free parameters, all other
/// parameters held at the identity. `grid[i][j]` is the loss at the i-th
/// value of `axes.0` and j-th value of `axes.1`.
pub fn loss_landscape(
    classifier: &dyn Classifier,
    image: &Image,
    label: usize,
    space: &ConstraintSpace,
    axes: (usize, usize),
    counts: (usize, usize),
) -> Result<Vec<Vec<f64>>> {
    let dims = space.dims();
    if axes.0 == axes.1 {
        return Err(Error::Config("landscape axes must be distinct".into()));
    }
    for axis in [axes.0, axes.1] {
        if axis >= dims {
            return Err(Error::Config(format!("axis {axis} out of range for {dims} dims")));
        }
    }
    if counts.0 == 0 || counts.1 == 0 {
        return Err(Error::Config("landscape counts must be at least 1".into()));
    }
    let rows = linspace(counts.0);
    let cols = linspace(counts.1);
    let mut grid = vec![vec![0.0; counts.1]; counts.0];
    for (i, &r) in rows.iter().enumerate() {
        for (j, &c) in cols.iter().enumerate() {
            let mut point = NormalizedPoint::zeros(dims);
            point.set(axes.0, r);
            point.set(axes.1, c);
            let params = space.denormalize(&point);
            let warped = warp_image(image, &params)?;
            grid[i][j] = score_candidate(classifier, &warped, label).loss;
        }
    }
    Ok(grid)
}
