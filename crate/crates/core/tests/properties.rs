//! Property tests for the numeric invariants.

use adr_core::datasets::{make_two_moons, rotate};
use adr_core::losses::sensitivity;
use adr_core::{Rng, Tape, Tensor};
use proptest::prelude::*;

fn logits_strategy(max_rows: usize, max_cols: usize) -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1..=max_rows, 2..=max_cols).prop_flat_map(|(n, k)| {
        proptest::collection::vec(-15.0..15.0f64, n * k).prop_map(move |v| (k, v))
    })
}

fn stochastic_rows(max_rows: usize, max_cols: usize) -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1..=max_rows, 2..=max_cols).prop_flat_map(|(n, k)| {
        proptest::collection::vec(0.01..1.0f64, n * k).prop_map(move |mut v| {
            for row in v.chunks_mut(k) {
                let s: f64 = row.iter().sum();
                for x in row {
                    *x /= s;
                }
            }
            (k, v)
        })
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions((k, logits) in logits_strategy(6, 5)) {
        let n = logits.len() / k;
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![n, k], logits).unwrap());
        let s = tape.softmax(x).unwrap();
        let v = tape.value(s);
        for row in v.data().chunks(k) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12, "row sum {sum}");
            for &p in row {
                prop_assert!(p > 0.0 && p < 1.0, "entry {p} outside (0,1)");
            }
        }
    }

    #[test]
    fn sensitivity_nonnegative_and_symmetric(
        (k, a) in stochastic_rows(5, 4),
        seed in 0u64..1000,
    ) {
        let n = a.len() / k;
        // Second argument: an independent reshuffle of the same row space.
        let mut rng = Rng::new(seed);
        let mut b = a.clone();
        rng.shuffle(&mut b);
        for row in b.chunks_mut(k) {
            let s: f64 = row.iter().sum();
            for x in row.iter_mut() {
                *x /= s;
            }
        }

        let mut tape = Tape::new();
        let pa = tape.leaf(Tensor::from_vec(vec![n, k], a.clone()).unwrap());
        let pb = tape.leaf(Tensor::from_vec(vec![n, k], b.clone()).unwrap());
        let ab = sensitivity(&mut tape, pa, pb).unwrap();
        let ba = sensitivity(&mut tape, pb, pa).unwrap();
        let ab_v = tape.value(ab).scalar_value().unwrap();
        let ba_v = tape.value(ba).scalar_value().unwrap();

        prop_assert!(ab_v >= 0.0, "sensitivity {ab_v} negative");
        prop_assert_eq!(ab_v.to_bits(), ba_v.to_bits(), "not bit-exactly symmetric");
        if a == b {
            prop_assert_eq!(ab_v, 0.0);
        }
    }

    #[test]
    fn sensitivity_zero_iff_equal((k, a) in stochastic_rows(4, 4)) {
        let n = a.len() / k;
        let mut tape = Tape::new();
        let pa = tape.leaf(Tensor::from_vec(vec![n, k], a.clone()).unwrap());
        let pa2 = tape.leaf(Tensor::from_vec(vec![n, k], a.clone()).unwrap());
        let same = sensitivity(&mut tape, pa, pa2).unwrap();
        prop_assert_eq!(tape.value(same).scalar_value().unwrap(), 0.0);

        // Perturb one entry pair noticeably: strictly positive divergence.
        let mut b = a.clone();
        if k >= 2 {
            let delta = (b[0].min(1.0 - b[1]) * 0.5).min(0.2);
            if delta > 1e-6 {
                b[0] -= delta;
                b[1] += delta;
                let pb = tape.leaf(Tensor::from_vec(vec![n, k], b).unwrap());
                let diff = sensitivity(&mut tape, pa, pb).unwrap();
                prop_assert!(tape.value(diff).scalar_value().unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn rotation_preserves_pairwise_distances(
        degrees in -720.0..720.0f64,
        seed in 0u64..500,
        n in 4usize..24,
    ) {
        let set = make_two_moons(n, 0.2, &mut Rng::new(seed)).unwrap();
        let rot = rotate(&set, degrees);
        for i in 0..n {
            for j in (i + 1)..n {
                let d0 = ((set.points.get2(i, 0) - set.points.get2(j, 0)).powi(2)
                    + (set.points.get2(i, 1) - set.points.get2(j, 1)).powi(2))
                .sqrt();
                let d1 = ((rot.points.get2(i, 0) - rot.points.get2(j, 0)).powi(2)
                    + (rot.points.get2(i, 1) - rot.points.get2(j, 1)).powi(2))
                .sqrt();
                prop_assert!((d0 - d1).abs() < 1e-9, "distance {d0} became {d1}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        seed in 0u64..10_000,
        widths in proptest::sample::select(vec![vec![2usize, 3], vec![2, 5, 2], vec![4, 4, 4, 2]]),
    ) {
        use adr_core::checkpoint::{read_checkpoint, write_checkpoint};
        use adr_core::nn::{init_params, MlpSpec};

        let spec = MlpSpec::classifier_stack(&widths, true).unwrap();
        let (params, bn) = init_params(&spec, &mut Rng::new(seed));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("m", &params, &bn)]).unwrap();
        let sections = read_checkpoint(std::io::Cursor::new(&buf)).unwrap();
        prop_assert_eq!(sections.len(), 1);
        for (name, tensor) in params.iter() {
            let restored = sections[0].params.get(name).unwrap();
            prop_assert_eq!(restored.shape(), tensor.shape());
            for (a, b) in restored.data().iter().zip(tensor.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn tape_replay_is_bit_identical(seed in 0u64..10_000) {
        use adr_core::nn::{Binding, Model, MlpSpec};

        let build = |seed: u64| {
            let model = Model::init(
                MlpSpec::classifier_stack(&[3, 4, 2], false).unwrap(),
                &mut Rng::new(seed),
            );
            let x = Tensor::from_vec(
                vec![2, 3],
                (0..6).map(|i| ((seed + i) as f64).sin()).collect(),
            )
            .unwrap();
            let mut tape = Tape::new();
            let binding = Binding::bind(&mut tape, &model.params);
            let input = tape.leaf(x);
            let out = adr_core::nn::mlp_forward_eval(
                &mut tape, &model.spec, &binding, &model.bn, input, None, 0.0,
            )
            .unwrap();
            let probs = tape.softmax(out).unwrap();
            let loss = adr_core::losses::cross_entropy(&mut tape, probs, &[0, 1]).unwrap();
            let gm = tape.backward(loss).unwrap();
            let grads: Vec<Vec<u64>> = binding
                .grads(&gm)
                .values()
                .map(|g| g.data().iter().map(|v| v.to_bits()).collect())
                .collect();
            (tape.value(loss).scalar_value().unwrap().to_bits(), grads)
        };
        prop_assert_eq!(build(seed), build(seed));
    }
}
