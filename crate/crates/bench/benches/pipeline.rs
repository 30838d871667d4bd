//! Cost of the hot paths: a single warp, a single forward pass, and whole
//! attacks at the budgets the training loop and evaluator actually use.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use robustwarp::attack::{cma_es, one_plus_one_es, score_candidate, CmaOptions};
use robustwarp::data::synthetic_digits;
use robustwarp::{
    grid_search, warp_image, worst_of_k, Cnn, CnnConfig, ConstraintSpace, EsState, Image,
    TransformParams,
};

fn sample_image() -> Image {
    synthetic_digits(1, 7).get(0).image.clone()
}

fn bench_warp(c: &mut Criterion) {
    let image = sample_image();
    let params = TransformParams {
        delta_u: 1.3,
        delta_v: -0.8,
        theta: 0.3,
        phi: -0.1,
        s_u: 1.1,
        s_v: 0.95,
    };
    c.bench_function("warp/affine_28x28", |b| {
        b.iter(|| warp_image(black_box(&image), black_box(&params)).unwrap())
    });
}

fn bench_forward(c: &mut Criterion) {
    let image = sample_image();
    for (name, cfg) in [("small", CnnConfig::small()), ("full", CnnConfig::full())] {
        let model = Cnn::<f32>::new(cfg, 1).unwrap();
        c.bench_function(&format!("forward/{name}"), |b| {
            b.iter(|| score_candidate(black_box(&model), black_box(&image), 3))
        });
    }
}

fn bench_attacks(c: &mut Criterion) {
    let image = sample_image();
    let label = synthetic_digits(1, 7).get(0).label as usize;
    let model = Cnn::<f32>::new(CnnConfig::small(), 1).unwrap();
    let space = ConstraintSpace::translations_rotation();

    c.bench_function("attack/worst_of_10", |b| {
        b.iter(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            worst_of_k(&model, black_box(&image), label, &space, 10, &mut rng, None).unwrap()
        })
    });

    c.bench_function("attack/es_16", |b| {
        b.iter(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut state = EsState::fresh(space.dims(), 0.4);
            one_plus_one_es(
                &model,
                black_box(&image),
                label,
                &space,
                &mut state,
                16,
                0.4,
                &mut rng,
                None,
            )
            .unwrap()
        })
    });

    c.bench_function("attack/cma_2", |b| {
        b.iter(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut state = EsState::fresh(space.dims(), 0.4);
            cma_es(
                &model,
                black_box(&image),
                label,
                &space,
                &mut state,
                2,
                CmaOptions::default(),
                &mut rng,
                None,
            )
            .unwrap()
        })
    });

    c.bench_function("attack/grid_3x3x5", |b| {
        b.iter(|| {
            grid_search(&model, black_box(&image), label, &space, &[3, 3, 5], None).unwrap()
        })
    });
}

criterion_group!(benches, bench_warp, bench_forward, bench_attacks);
criterion_main!(benches);
