use std::collections::HashMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapewarp::dataset::synthetic::{generate_synthetic_corpus, SyntheticConfig};
use shapewarp::dataset::{GarmentType, PairRecord};
use shapewarp::retrieval::{
    build_matched_pairs, build_random_pairs, model_codes, product_codes, same_type_neighbours, EmbeddingIndex,
    PairMode, TestPair, TestPairSet,
};
use shapewarp::shape_matching::{ShapeCode, ShapeMatchingNet, SmnConfig};
use shapewarp::Error;

fn random_index(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (EmbeddingIndex<f64>, Vec<Vec<f64>>) {
    let codes: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let items = codes
        .iter()
        .enumerate()
        .map(|(i, c)| (format!("m{i:04}"), ShapeCode(c.clone())))
        .collect();
    (EmbeddingIndex::build(items).unwrap(), codes)
}

fn record(id: &str, t: GarmentType) -> PairRecord {
    PairRecord {
        id: id.into(),
        product_path: PathBuf::from(format!("{id}.p.png")),
        model_path: PathBuf::from(format!("{id}.m.png")),
        mask_path: PathBuf::from(format!("{id}.k.png")),
        garment_type: t,
        theta_gt: None,
    }
}

#[test]
fn knn_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (index, codes) = random_index(&mut rng, 500, 16);
    for _ in 0..20 {
        let q: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut brute: Vec<(String, f64)> = codes
            .iter()
            .enumerate()
            .map(|(i, c)| (format!("m{i:04}"), c.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum()))
            .collect();
        brute.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        let got = index.query_knn(&ShapeCode(q), 25).unwrap();
        assert_eq!(got, brute[..25].to_vec());
    }
}

#[test]
fn stored_code_is_its_own_nearest_neighbour() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (index, codes) = random_index(&mut rng, 50, 8);
    let got = index.query_knn(&ShapeCode(codes[17].clone()), 3).unwrap();
    assert_eq!(got[0], ("m0017".to_string(), 0.0));
    assert_eq!(index.get("m0017").unwrap().0, codes[17]);
    assert!(index.get("missing").is_none());
}

#[test]
fn oversized_k_returns_everything_sorted() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (index, _) = random_index(&mut rng, 7, 3);
    let got = index.query_knn(&ShapeCode(vec![0.0; 3]), 100).unwrap();
    assert_eq!(got.len(), 7);
    assert!(got.windows(2).all(|w| w[0].1 <= w[1].1));
}

#[test]
fn ties_break_by_id() {
    let items = ["b", "c", "a"]
        .iter()
        .map(|id| (id.to_string(), ShapeCode(vec![1.0, 0.0])))
        .collect();
    let index = EmbeddingIndex::<f64>::build(items).unwrap();
    let ids: Vec<String> = index
        .query_knn(&ShapeCode(vec![0.0, 0.0]), 3)
        .unwrap()
        .into_iter()
        .map(|x| x.0)
        .collect();
    assert_eq!(ids, ["a", "b", "c"]);
}

#[test]
fn index_errors() {
    assert!(matches!(EmbeddingIndex::<f64>::build(vec![]), Err(Error::Invalid(_))));
    let dup = vec![
        ("x".to_string(), ShapeCode(vec![0.0])),
        ("x".to_string(), ShapeCode(vec![1.0])),
    ];
    assert!(matches!(EmbeddingIndex::<f64>::build(dup), Err(Error::DuplicateId(_))));
    let ragged = vec![
        ("x".to_string(), ShapeCode(vec![0.0])),
        ("y".to_string(), ShapeCode(vec![1.0, 2.0])),
    ];
    assert!(matches!(EmbeddingIndex::<f64>::build(ragged), Err(Error::Shape(_))));
    let index = EmbeddingIndex::<f64>::build(vec![("x".to_string(), ShapeCode(vec![0.0]))]).unwrap();
    assert!(matches!(index.query_knn(&ShapeCode(vec![0.0, 1.0]), 1), Err(Error::Shape(_))));
    assert!(index.query_knn(&ShapeCode(vec![0.0]), 0).is_err());
}

#[test]
fn index_save_load_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (index, _) = random_index(&mut rng, 40, 5);
    let path = tmp.path().join("models.idx");
    index.save(&path).unwrap();
    let back = EmbeddingIndex::<f64>::load(&path).unwrap();
    assert_eq!(back.ids(), index.ids());
    for i in 0..index.len() {
        assert_eq!(back.code(i), index.code(i));
    }
}

#[test]
fn random_pairs_basic_properties() {
    let t = GarmentType::ALL;
    let recs: Vec<PairRecord> = (0..8).map(|i| record(&format!("r{i}"), t[i % 2])).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    assert!(build_random_pairs(&recs, &recs, 0, false, &mut rng).unwrap().is_empty());
    let a = build_random_pairs(&recs, &recs, 40, false, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = build_random_pairs(&recs, &recs, 40, false, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 40);
    let ty: HashMap<&str, GarmentType> = recs.iter().map(|r| (r.id.as_str(), r.garment_type)).collect();
    for p in &a.pairs {
        assert_eq!(p.mode, PairMode::Random);
        assert_ne!(p.product_id, p.model_id);
        assert_eq!(ty[p.product_id.as_str()], ty[p.model_id.as_str()]);
    }
    let lonely = [record("solo", t[3])];
    assert!(build_random_pairs(&lonely, &recs, 5, false, &mut rng).is_err());
}

#[test]
fn random_models_are_uniform() {
    let t = GarmentType::ALL[1];
    let models: Vec<PairRecord> = (0..10).map(|i| record(&format!("m{i}"), t)).collect();
    let products = [record("p", t)];
    let draws = 10_000;
    let set = build_random_pairs(&products, &models, draws, false, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for p in &set.pairs {
        *counts.entry(p.model_id.clone()).or_default() += 1;
    }
    assert_eq!(counts.len(), 10);
    let (mean, sd) = (draws as f64 / 10.0, (draws as f64 * 0.1 * 0.9).sqrt());
    for (id, c) in counts {
        assert!((c as f64 - mean).abs() <= 3.0 * sd, "{id}: {c}");
    }
}

#[test]
fn matched_pairs_are_same_type_top_k() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig {
        n: 16,
        image_size: 32,
        two_component: false,
        seed: 2,
    };
    let m = generate_synthetic_corpus(&cfg, tmp.path()).unwrap();
    let data = m.load_images().unwrap();
    let smn_cfg = SmnConfig {
        d_s: 8,
        d_v: 8,
        att_grid: 2,
        channels: [4, 4, 4],
        mapper_hidden: 8,
        ..Default::default()
    };
    let smn = ShapeMatchingNet::<f64>::new(&smn_cfg, 32, 1).unwrap();
    let k = 2;
    let set = build_matched_pairs(&data, &data, &smn, k, false, 32, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(set.len(), 32);
    let index = EmbeddingIndex::build(model_codes(&smn, &data).unwrap()).unwrap();
    let types: HashMap<String, GarmentType> = data
        .iter()
        .map(|d| (d.record.id.clone(), d.record.garment_type))
        .collect();
    let codes: HashMap<String, ShapeCode<f64>> = product_codes(&smn, &data, false).unwrap().into_iter().collect();
    for p in &set.pairs {
        assert_eq!(p.mode, PairMode::MatchedColor);
        let t = types[&p.product_id];
        assert_eq!(types[&p.model_id], t);
        assert_ne!(p.product_id, p.model_id);
        let nn = same_type_neighbours(&index, &types, &p.product_id, t, &codes[&p.product_id], k, false).unwrap();
        assert!(nn.len() <= k);
        assert!(nn.contains(&p.model_id), "{} not in {nn:?}", p.model_id);
    }
    let gray = build_matched_pairs(&data, &data, &smn, k, true, 4, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(gray.pairs.iter().all(|p| p.mode == PairMode::MatchedGrayscale));
}

#[test]
fn pair_csv_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let set = TestPairSet {
        pairs: PairMode::ALL
            .iter()
            .enumerate()
            .map(|(i, &mode)| TestPair {
                product_id: format!("p{i}"),
                model_id: format!("m{i}"),
                mode,
            })
            .collect(),
    };
    let path = tmp.path().join("pairs.csv");
    set.save(&path).unwrap();
    let back = TestPairSet::load(&path).unwrap();
    assert_eq!(back, set);
    assert_eq!(back.modes(), PairMode::ALL.to_vec());
    assert_eq!(back.of_mode(PairMode::Random).count(), 1);
}
