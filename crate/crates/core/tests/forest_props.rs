use proptest::prelude::*;

use mmtrust::explain::{Explainer, ShapMethod};
use mmtrust::forest::{fit_matrix, Forest, ForestConfig, TrainingSet};

fn dataset() -> impl Strategy<Value = (Vec<Vec<u32>>, Vec<usize>, usize)> {
    (2usize..=6, 8usize..=40, 2usize..=3).prop_flat_map(|(d, n, k)| {
        (
            proptest::collection::vec(proptest::collection::vec(0u32..4, d), n),
            proptest::collection::vec(0..k, n),
            Just(k),
        )
            .prop_map(|(rows, mut y, k)| {
                y[0] = 0;
                y[1] = 1;
                (rows, y, k)
            })
    })
}

fn train(rows: &[Vec<u32>], y: &[usize], k: usize, cfg: &ForestConfig) -> Forest {
    let data = TrainingSet {
        x: rows.iter().map(Vec::as_slice).collect(),
        y: y.to_vec(),
        n_classes: k,
    };
    let labels = (0..k).map(|i| format!("c{i}")).collect();
    fit_matrix(&data, labels, cfg).unwrap()
}

fn config(seed: u64, trees: usize) -> ForestConfig {
    ForestConfig {
        n_trees: trees,
        seed,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn training_is_deterministic((rows, y, k) in dataset(), seed in any::<u64>()) {
        let cfg = config(seed, 7);
        let a = train(&rows, &y, k, &cfg);
        let b = train(&rows, &y, k, &cfg);
        prop_assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn zero_column_never_changes_predictions((rows, y, k) in dataset(), seed in any::<u64>(), at in 0usize..8) {
        let d = rows[0].len();
        let at = at.min(d);
        let widened: Vec<Vec<u32>> = rows
            .iter()
            .map(|r| {
                let mut w = r.clone();
                w.insert(at, 0);
                w
            })
            .collect();
        let cfg = ForestConfig { max_features: Some(d.div_ceil(2)), ..config(seed, 9) };
        let wide_cfg = ForestConfig { max_features: Some(d.div_ceil(2)), ..config(seed, 9) };
        let narrow = train(&rows, &y, k, &cfg);
        let wide = train(&widened, &y, k, &wide_cfg);
        for (r, w) in rows.iter().zip(&widened) {
            prop_assert_eq!(narrow.vote_fractions(r), wide.vote_fractions(w));
        }
    }

    #[test]
    fn votes_are_distributions((rows, y, k) in dataset(), seed in any::<u64>()) {
        let forest = train(&rows, &y, k, &config(seed, 5));
        for r in &rows {
            let p = forest.predict(r);
            prop_assert!(p.label < k);
            prop_assert!((p.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.fractions[p.label] >= p.fractions.iter().cloned().fold(0.0, f64::max));
        }
    }

    #[test]
    fn shap_is_locally_accurate((rows, y, k) in dataset(), seed in any::<u64>(), interventional in any::<bool>()) {
        let forest = train(&rows, &y, k, &config(seed, 4));
        let background: Vec<&[u32]> = rows.iter().map(Vec::as_slice).collect();
        let method = if interventional { ShapMethod::Interventional } else { ShapMethod::PathDependent };
        let explainer = Explainer::new(&forest, &background, method).unwrap();
        for r in rows.iter().take(5) {
            let a = explainer.explain("x", r).unwrap();
            for (got, want) in a.reconstruct().iter().zip(forest.vote_fractions(r)) {
                prop_assert!((got - want).abs() <= 1e-9);
            }
            for c in 0..k {
                for (j, phi) in a.phi[c].iter().enumerate() {
                    if forest.trees.iter().all(|t| t.features().all(|f| f != j)) {
                        prop_assert_eq!(*phi, 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn model_file_round_trips() {
    let rows = vec![vec![0, 1], vec![1, 0], vec![2, 2], vec![0, 3], vec![3, 1], vec![1, 1]];
    let y = vec![0, 1, 1, 0, 1, 0];
    let forest = train(&rows, &y, 2, &config(3, 6));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    forest.save(&path).unwrap();
    let back = Forest::load(&path).unwrap();
    assert_eq!(back, forest);
    assert_eq!(back.to_json(), forest.to_json());
}

#[test]
fn single_class_is_rejected() {
    let rows = [vec![0, 1], vec![1, 0]];
    let data = TrainingSet {
        x: rows.iter().map(Vec::as_slice).collect(),
        y: vec![1, 1],
        n_classes: 2,
    };
    let labels = vec!["a".to_string(), "b".to_string()];
    assert!(matches!(
        fit_matrix(&data, labels, &config(0, 3)),
        Err(mmtrust::error::ForestError::SingleClass(l)) if l == "b"
    ));
}

#[test]
fn rejects_foreign_model_files() {
    assert!(Forest::from_json("{\"format\":\"other\",\"version\":1}").is_err());
    assert!(Forest::from_json("not json").is_err());
}
