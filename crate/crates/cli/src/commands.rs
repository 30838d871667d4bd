//! The five subcommands. Each file-producing command writes the resolved
//! config into its output directory first, then its artifacts; nothing
//! here prints wall-clock data, so reruns are byte-identical.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use robustwarp::attack::{
    cma_es, grid_search, infeasible_mass, one_plus_one_es, score_candidate, sigma0_solve,
    worst_of_k, AttackOutcome, TraceRecord,
};
use robustwarp::data::Dataset;
use robustwarp::model::{load_checkpoint, save_checkpoint};
use robustwarp::train::{
    augment_flip, evaluate, loss_landscape, train_robust, train_standard, write_eval_csv,
    write_eval_detail, EvalMode, TrainReport,
};
use robustwarp::warp::{translation_landscape, write_grid_csv, write_pgm, NormKind, PARAM_NAMES};
use robustwarp::{Cnn, ConstraintSpace, Error, EsStateStore, Image, NormalizedPoint, Result};

use crate::config::{train_config, parse_eval_mode, RegimeKind, RunConfig};

/// Creates the output directory and records the resolved config in it.
fn open_output(config: &RunConfig) -> Result<std::path::PathBuf> {
    let dir = config.output.dir.clone();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.resolved"), config.to_toml()?)?;
    Ok(dir)
}

fn checked_model(config: &RunConfig, checkpoint: &Path) -> Result<Cnn<f32>> {
    let (model, meta) = load_checkpoint(checkpoint)?;
    let expected = config.model.cnn_config();
    if meta.config != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint architecture {:?} does not match the configured {:?}",
            meta.config, expected
        )));
    }
    Ok(model)
}

fn example_at(ds: &Dataset, index: usize) -> Result<&robustwarp::data::LabeledExample> {
    if index >= ds.len() {
        return Err(Error::Bounds(format!(
            "example index {index} outside dataset `{}` of {} examples",
            ds.name(),
            ds.len()
        )));
    }
    Ok(ds.get(index))
}

pub fn cmd_train(config: &RunConfig) -> Result<()> {
    let dir = open_output(config)?;
    let data = config.data.load_train()?;
    let tc = train_config(config);
    let mut log = String::new();
    log.push_str(&format!("regime: {}\n", config.regime.kind.label()));
    log.push_str(&format!(
        "train examples: {} ({}x{})\n",
        data.len(),
        data.height(),
        data.width()
    ));
    log.push_str(&format!(
        "seeds: model={} shuffle={} attack={}\n",
        tc.model_seed, tc.shuffle_seed, tc.attack_seed
    ));

    let (model, report) = match config.regime.kind {
        RegimeKind::Standard => train_standard(&data, &tc)?,
        RegimeKind::Augmented => {
            // The flip coins draw from the attack seed: it is the stream
            // that perturbs examples, and it stays independent of model
            // init and shuffling.
            let mut rng = ChaCha8Rng::seed_from_u64(tc.attack_seed);
            let augmented = augment_flip(&data, &mut rng)?;
            log.push_str(&format!("augmented examples: {}\n", augmented.len()));
            train_standard(&augmented, &tc)?
        }
        RegimeKind::Robust => {
            let space = config.space.resolve()?;
            let attack = config.regime.attack_spec()?;
            log.push_str(&format!(
                "attack: {} ({} passes per example)\n",
                config.regime.attack.as_deref().unwrap_or(""),
                attack.forward_passes_per_example(space.dims())
            ));
            let store = EsStateStore::new();
            train_robust(&data, &tc, &attack, &space, &store)?
        }
    };

    append_progress(&mut log, &report);
    save_checkpoint(&model, tc.model_seed, &dir.join("checkpoint.bin"))?;
    fs::write(dir.join("train.log"), log)?;
    Ok(())
}

fn append_progress(log: &mut String, report: &TrainReport) {
    for row in &report.progress {
        log.push_str(&format!(
            "iter {} loss {:.6} acc {:.4}\n",
            row.iteration, row.loss, row.batch_accuracy
        ));
    }
    log.push_str(&format!("steps: {}\n", report.steps));
    log.push_str(&format!("attack forward passes: {}\n", report.attack_forward_passes));
}

pub fn cmd_eval(config: &RunConfig, checkpoint: &Path) -> Result<()> {
    let dir = open_output(config)?;
    let model = checked_model(config, checkpoint)?;
    let data = config.data.load_test()?;
    let space = config.space.resolve()?;
    let modes = config.eval.parse_modes(space.dims())?;
    let report = evaluate(&model, &data, &space, &modes, &config.eval.seeds)?;

    let mut csv = BufWriter::new(File::create(dir.join("eval.csv"))?);
    write_eval_csv(&mut csv, &[(config.regime.kind.label(), &report)])?;
    csv.flush()?;
    let mut detail = BufWriter::new(File::create(dir.join("eval_detail.txt"))?);
    write_eval_detail(&mut detail, &report)?;
    detail.flush()?;
    Ok(())
}

/// Attack modes accept the evaluation-mode grammar plus `cma-N`.
enum AttackChoice {
    Eval(EvalMode),
    Cma { update_calls: u64 },
}

fn parse_attack_mode(text: &str, config: &RunConfig, dims: usize) -> Result<AttackChoice> {
    if let Some(n) = text.strip_prefix("cma-") {
        let update_calls: u64 = n
            .parse()
            .map_err(|_| Error::Config(format!("cma-N: `{n}` is not a positive integer")))?;
        return Ok(AttackChoice::Cma { update_calls });
    }
    Ok(AttackChoice::Eval(parse_eval_mode(text, dims, config.eval.es_sigma0)?))
}

pub fn cmd_attack(
    config: &RunConfig,
    checkpoint: &Path,
    index: usize,
    mode: &str,
    seed: u64,
) -> Result<()> {
    let dir = open_output(config)?;
    let model = checked_model(config, checkpoint)?;
    let data = config.data.load_test()?;
    let example = example_at(&data, index)?;
    let space = config.space.resolve()?;
    let label = example.label as usize;
    let choice = parse_attack_mode(mode, config, space.dims())?;

    let natural = score_candidate(&model, &example.image, label);
    let mut trace_rows = Vec::new();
    let outcome = {
        let mut sink = |r: &TraceRecord| trace_rows.push(trace_csv_row(r));
        run_attack(&model, &example.image, label, &space, &choice, config, seed, &mut sink)?
    };

    fs::create_dir_all(dir.join("traces"))?;
    let mut trace = BufWriter::new(File::create(dir.join("traces").join("trace.csv"))?);
    writeln!(
        trace,
        "evaluation,du,dv,theta_deg,phi_deg,su,sv,loss,misclassified,sigma,cov_det"
    )?;
    for row in &trace_rows {
        writeln!(trace, "{row}")?;
    }
    trace.flush()?;

    let mut original = BufWriter::new(File::create(dir.join("original.pgm"))?);
    write_pgm(&mut original, &example.image)?;
    original.flush()?;
    let mut adversarial = BufWriter::new(File::create(dir.join("adversarial.pgm"))?);
    write_pgm(&mut adversarial, &outcome.adversarial_image)?;
    adversarial.flush()?;

    let summary = format!(
        "example index: {index}\n\
         true label: {label}\n\
         natural: loss {:.6} misclassified {}\n\
         mode: {mode}\n\
         transform: {}\n\
         adversarial: loss {:.6} misclassified {}\n\
         forward passes: {}\n",
        natural.loss,
        natural.misclassified,
        transform_fields(&outcome.transform, " "),
        outcome.score.loss,
        outcome.score.misclassified,
        outcome.forward_passes,
    );
    fs::write(dir.join("attack.txt"), summary)?;
    Ok(())
}

/// The six parameters in canonical order, angles as degrees, six decimals.
fn transform_fields(t: &robustwarp::TransformParams, pair_sep: &str) -> String {
    let values = [t.delta_u, t.delta_v, t.theta.to_degrees(), t.phi.to_degrees(), t.s_u, t.s_v];
    let names = ["du", "dv", "theta_deg", "phi_deg", "su", "sv"];
    names
        .iter()
        .zip(values)
        .map(|(n, v)| format!("{n}{pair_sep}{v:.6}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn trace_csv_row(r: &TraceRecord) -> String {
    let t = r.transform;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    format!(
        "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}",
        r.evaluation,
        t.delta_u,
        t.delta_v,
        t.theta.to_degrees(),
        t.phi.to_degrees(),
        t.s_u,
        t.s_v,
        r.loss,
        r.misclassified,
        opt(r.sigma),
        opt(r.cov_det),
    )
}

#[allow(clippy::too_many_arguments)]
fn run_attack(
    model: &Cnn<f32>,
    image: &Image,
    label: usize,
    space: &ConstraintSpace,
    choice: &AttackChoice,
    config: &RunConfig,
    seed: u64,
    sink: &mut dyn FnMut(&TraceRecord),
) -> Result<AttackOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match choice {
        AttackChoice::Eval(EvalMode::Natural) => {
            grid_search(model, image, label, space, &vec![1; space.dims()], Some(sink))
        }
        AttackChoice::Eval(EvalMode::Grid { counts }) => {
            grid_search(model, image, label, space, counts, Some(sink))
        }
        AttackChoice::Eval(EvalMode::WorstOfK { k }) => {
            worst_of_k(model, image, label, space, *k, &mut rng, Some(sink))
        }
        AttackChoice::Eval(EvalMode::Es { iterations, sigma0 }) => {
            let mut state = robustwarp::EsState::fresh(space.dims(), *sigma0);
            one_plus_one_es(
                model, image, label, space, &mut state, *iterations, *sigma0, &mut rng,
                Some(sink),
            )
        }
        AttackChoice::Cma { update_calls } => {
            let mut state = robustwarp::EsState::fresh(space.dims(), config.regime.sigma0);
            cma_es(
                model,
                image,
                label,
                space,
                &mut state,
                *update_calls,
                config.regime.cma_options(),
                &mut rng,
                Some(sink),
            )
        }
    }
}

pub fn cmd_landscape(
    config: &RunConfig,
    checkpoint: &Path,
    index: usize,
    axes: &str,
    counts: &str,
    norm: Option<&str>,
) -> Result<()> {
    let dir = open_output(config)?;
    let model = checked_model(config, checkpoint)?;
    let data = config.data.load_test()?;
    let example = example_at(&data, index)?;
    let space = config.space.resolve()?;

    if let Some(p) = norm {
        return norm_landscape(&dir, &example.image, &space, p);
    }

    let (axis_params, axis_dims) = parse_axes(axes, &space)?;
    let (c0, c1) = parse_counts(counts)?;
    let grid = loss_landscape(
        &model,
        &example.image,
        example.label as usize,
        &space,
        (axis_dims[0], axis_dims[1]),
        (c0, c1),
    )?;

    let rows = axis_values(&space, axis_params[0], c0);
    let cols = axis_values(&space, axis_params[1], c1);
    let mut out = BufWriter::new(File::create(dir.join("landscape.csv"))?);
    writeln!(out, "{},{},loss", axis_header(axis_params[0]), axis_header(axis_params[1]))?;
    for (i, r) in rows.iter().enumerate() {
        for (j, c) in cols.iter().enumerate() {
            writeln!(out, "{r:.6},{c:.6},{:.6}", grid[i][j])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Pixel-norm landscape over all integer translations inside the bounds.
fn norm_landscape(dir: &Path, image: &Image, space: &ConstraintSpace, p: &str) -> Result<()> {
    let kind = match p {
        "l2" => NormKind::L2,
        "linf" => NormKind::LInf,
        other => {
            return Err(Error::Config(format!("norm `{other}` not recognized; expected l2 or linf")))
        }
    };
    let range = |axis: usize| -> Vec<i32> {
        let [lo, hi] = space.bounds()[axis];
        (lo.ceil() as i32..=hi.floor() as i32).collect()
    };
    let (du, dv) = (range(0), range(1));
    let grid = translation_landscape(image, kind, &du, &dv)?;
    let mut out = BufWriter::new(File::create(dir.join("norms.csv"))?);
    let col_axis: Vec<f64> = du.iter().map(|&v| f64::from(v)).collect();
    let row_axis: Vec<f64> = dv.iter().map(|&v| f64::from(v)).collect();
    write_grid_csv(&mut out, &col_axis, &row_axis, |i, j| grid[i][j])?;
    out.flush()?;
    Ok(())
}

/// Maps two comma-separated parameter names to (parameter index, position
/// among the space's free parameters).
fn parse_axes(axes: &str, space: &ConstraintSpace) -> Result<([usize; 2], [usize; 2])> {
    let names: Vec<&str> = axes.split(',').collect();
    if names.len() != 2 {
        return Err(Error::Config(format!(
            "--axes needs exactly two comma-separated names, got `{axes}`"
        )));
    }
    let free = space.free_indices();
    let mut params = [0usize; 2];
    let mut dims = [0usize; 2];
    for (slot, name) in names.iter().enumerate() {
        let param = PARAM_NAMES
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| {
                Error::Config(format!(
                    "axis `{name}` not recognized; expected one of {}",
                    PARAM_NAMES.join(", ")
                ))
            })?;
        let dim = free.iter().position(|&f| f == param).ok_or_else(|| {
            Error::Config(format!("axis `{name}` is not free in the configured space"))
        })?;
        params[slot] = param;
        dims[slot] = dim;
    }
    Ok((params, dims))
}

fn parse_counts(counts: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = counts.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::Config(format!(
            "--counts needs exactly two comma-separated integers, got `{counts}`"
        )));
    }
    let parse = |t: &str| -> Result<usize> {
        let n = t
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("--counts: `{t}` is not a positive integer")))?;
        if n == 0 {
            return Err(Error::Config("--counts: counts must be at least 1".into()));
        }
        Ok(n)
    };
    Ok((parse(parts[0])?, parse(parts[1])?))
}

/// Denormalized grid values along one parameter axis, degrees for angles.
fn axis_values(space: &ConstraintSpace, param: usize, count: usize) -> Vec<f64> {
    let free = space.free_indices();
    let dim = free.iter().position(|&f| f == param).expect("checked free");
    let normalized: Vec<f64> = if count == 1 {
        vec![0.0]
    } else {
        (0..count)
            .map(|i| -1.0 + 2.0 * i as f64 / (count - 1) as f64)
            .collect()
    };
    normalized
        .into_iter()
        .map(|x| {
            let mut point = NormalizedPoint::zeros(space.dims());
            point.set(dim, x);
            let value = space.denormalize(&point).to_array()[param];
            if param == 2 || param == 3 {
                value.to_degrees()
            } else {
                value
            }
        })
        .collect()
}

fn axis_header(param: usize) -> String {
    match param {
        2 => "theta_deg".into(),
        3 => "phi_deg".into(),
        _ => PARAM_NAMES[param].into(),
    }
}

pub fn cmd_sigma0(epsilon: f64, dims: usize) -> Result<()> {
    let sigma0 = sigma0_solve(epsilon, dims)?;
    let residual = (infeasible_mass(sigma0, dims) - epsilon).abs();
    println!("sigma0 = {sigma0:.6}");
    println!("residual = {residual:.3e}");
    Ok(())
}
