use medgate::mlp::{MlpModel, OutputMode, Sample};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn xor_set() -> Vec<Sample> {
    [(0.0, 0.0, 0), (0.0, 1.0, 1), (1.0, 0.0, 1), (1.0, 1.0, 0)]
        .iter()
        .map(|&(a, b, c)| {
            let mut t = vec![0.0, 0.0];
            t[c] = 1.0;
            (vec![a, b], t)
        })
        .collect()
}

fn accuracy(m: &MlpModel, data: &[Sample]) -> f64 {
    let correct = data
        .iter()
        .filter(|(x, t)| {
            let p = m.predict(x).unwrap();
            let argmax = |v: &[f64]| (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
            argmax(&p) == argmax(t)
        })
        .count();
    correct as f64 / data.len() as f64
}

#[test]
fn xor_is_learned() {
    let data = xor_set();
    let mut m = MlpModel::new(&[2, 8, 2], OutputMode::Classifier, 7).unwrap();
    for _ in 0..40 {
        m = m.train_incremental(&data, 100, 0.5).unwrap();
        if accuracy(&m, &data) == 1.0 {
            break;
        }
    }
    assert_eq!(accuracy(&m, &data), 1.0);
}

#[test]
fn zero_rate_training_changes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..10 {
        let m = MlpModel::new(&[5, 7, 3], OutputMode::Classifier, seed).unwrap();
        let batch: Vec<Sample> = (0..20)
            .map(|i| {
                ((0..5).map(|_| rng.random::<f64>()).collect(), {
                    let mut t = vec![0.0; 3];
                    t[i % 3] = 1.0;
                    t
                })
            })
            .collect();
        let after = m.train_incremental(&batch, 3, 0.0).unwrap();
        assert_eq!(after.to_json(), m.to_json());
    }
}

fn arb_case() -> impl Strategy<Value = (Vec<usize>, OutputMode, u64, u64)> {
    (
        1usize..6,
        prop::collection::vec(1usize..6, 0..3),
        prop_oneof![Just(OutputMode::Classifier), Just(OutputMode::Scorer)],
        2usize..5,
        any::<u64>(),
        any::<u64>(),
    )
        .prop_map(|(inputs, hidden, mode, classes, seed, data_seed)| {
            let out = if mode == OutputMode::Scorer {
                1
            } else {
                classes
            };
            let mut sizes = vec![inputs];
            sizes.extend(hidden);
            sizes.push(out);
            (sizes, mode, seed, data_seed)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn analytic_gradient_matches_finite_differences((sizes, mode, seed, data_seed) in arb_case()) {
        let m = MlpModel::new(&sizes, mode, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = *sizes.last().unwrap();
        let t = match mode {
            OutputMode::Scorer => vec![if rng.random_bool(0.5) { 1.0 } else { 0.0 }],
            OutputMode::Classifier => {
                let mut t = vec![0.0; out];
                t[rng.random_range(0..out)] = 1.0;
                t
            }
        };
        let err = m.gradient_check(&(x, t)).unwrap();
        prop_assert!(err < 1e-4, "relative error {err} for {sizes:?}");
    }

    #[test]
    fn checkpoints_round_trip((sizes, mode, seed, _d) in arb_case()) {
        let m = MlpModel::new(&sizes, mode, seed).unwrap();
        let back = MlpModel::from_json(&m.to_json()).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn outputs_are_probabilities((sizes, mode, seed, data_seed) in arb_case()) {
        let m = MlpModel::new(&sizes, mode, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-5.0..5.0)).collect();
        let p = m.predict(&x).unwrap();
        prop_assert!(p.iter().all(|v| *v > 0.0 && *v < 1.0));
        if mode == OutputMode::Classifier {
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
