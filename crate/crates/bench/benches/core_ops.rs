use criterion::{black_box, criterion_group, criterion_main, Criterion};

use adr_bench::{random_matrix, toy_bundle, toy_data};
use adr_core::adr::{
    step1_update, step2_update, step3_update, AdrConfig, Step1Masks, Step2Masks, TwinMasks,
};
use adr_core::losses::sensitivity;
use adr_core::{Rng, Tape};

fn bench_matmul(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let a = random_matrix(&mut rng, 64, 64);
    let b = random_matrix(&mut rng, 64, 64);
    c.bench_function("matmul_64x64_forward_backward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let an = tape.leaf(black_box(a.clone()));
            let bn = tape.leaf(black_box(b.clone()));
            let prod = tape.matmul(an, bn).unwrap();
            let root = tape.sum(prod);
            tape.backward(root).unwrap()
        })
    });
}

fn bench_sensitivity(c: &mut Criterion) {
    let mut rng = Rng::new(2);
    let la = random_matrix(&mut rng, 64, 2);
    let lb = random_matrix(&mut rng, 64, 2);
    c.bench_function("sensitivity_64x2_forward_backward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let a = tape.leaf(black_box(la.clone()));
            let b = tape.leaf(black_box(lb.clone()));
            let pa = tape.softmax(a).unwrap();
            let pb = tape.softmax(b).unwrap();
            let s = sensitivity(&mut tape, pa, pb).unwrap();
            tape.backward(s).unwrap()
        })
    });
}

fn bench_outer_iteration(c: &mut Criterion) {
    let cfg = AdrConfig::default();
    let (source, target) = toy_data(3);
    let (xs, ys) = source.gather(&(0..64).collect::<Vec<_>>());
    let (xt, _) = target.gather(&(0..64).collect::<Vec<_>>());
    c.bench_function("adr_outer_iteration", |bench| {
        bench.iter_batched(
            || (toy_bundle(3), Rng::new(9)),
            |(mut bundle, mut rng)| {
                let m1 = Step1Masks::sample(&mut rng, &bundle, &cfg, 64);
                step1_update(&mut bundle, &xs, &ys, &m1, &cfg).unwrap();
                let m2 = Step2Masks::sample(&mut rng, &bundle, &cfg, 64, 64);
                step2_update(&mut bundle, &xs, &ys, &xt, &m2, &cfg).unwrap();
                let repeats: Vec<TwinMasks> = (0..cfg.n_step3_repeats)
                    .map(|_| TwinMasks::sample(&mut rng, &bundle.c.spec, cfg.dropout_rate, 64))
                    .collect();
                step3_update(&mut bundle, &xt, &repeats, &cfg).unwrap();
                bundle
            },
            criterion::BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bench_matmul, bench_sensitivity, bench_outer_iteration);
criterion_main!(benches);
