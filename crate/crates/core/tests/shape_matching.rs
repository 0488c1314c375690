use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapewarp::contour::{extract_contour, ContourImage, ContourParams};
use shapewarp::dataset::synthetic::{generate_synthetic_corpus, SyntheticConfig};
use shapewarp::dataset::GarmentType;
use shapewarp::raster::RgbImage;
use shapewarp::shape_matching::{
    attention_loss_from, autoencoder_loss_from, load_smn, map_loss_from, sample_smn_batch, squared_distance,
    triplet_loss, ShapeMatchingNet, SmnBatch, SmnConfig, SmnItem, SmnTrainConfig, SmnTrainer,
};
use shapewarp::Error;
use shapewarp_tensor::{Graph, Tensor};

fn stub_config() -> SmnConfig {
    SmnConfig {
        d_s: 4,
        d_v: 6,
        att_grid: 2,
        channels: [2, 3, 3],
        mapper_hidden: 5,
        margin: 0.3,
        lambda_reg: 0.01,
    }
}

fn rand_img(rng: &mut ChaCha8Rng, n: usize) -> RgbImage<f64> {
    RgbImage::from_fn(n, n, |_, _, _| rng.gen())
}

fn rand_contour(rng: &mut ChaCha8Rng, n: usize) -> ContourImage<f64> {
    ContourImage::from_tensor(Tensor::from_fn(&[1, n, n], |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })).unwrap()
}

fn stack(ts: &[Tensor<f64>]) -> Tensor<f64> {
    shapewarp::raster::batch(&ts.iter().collect::<Vec<_>>()).unwrap()
}

fn stub_batch(rng: &mut ChaCha8Rng, n: usize, types: &[(GarmentType, GarmentType)]) -> SmnBatch<f64> {
    let k = types.len();
    let imgs = |rng: &mut ChaCha8Rng| stack(&(0..k).map(|_| rand_img(rng, n).into_tensor()).collect::<Vec<_>>());
    let cons = |rng: &mut ChaCha8Rng| stack(&(0..k).map(|_| rand_contour(rng, n).into_tensor()).collect::<Vec<_>>());
    SmnBatch {
        p_i: imgs(rng),
        x_i: imgs(rng),
        p_j: imgs(rng),
        c_i: cons(rng),
        c_j: cons(rng),
        t_a: types.iter().map(|t| t.0).collect(),
        t_b: types.iter().map(|t| t.1).collect(),
    }
}

fn slice(t: &Tensor<f64>, i: usize) -> Tensor<f64> {
    let s = &t.shape()[1..];
    let d: usize = s.iter().product();
    Tensor::from_vec(s, t.data()[i * d..(i + 1) * d].to_vec()).unwrap()
}

#[test]
fn triplet_oracles() {
    assert_eq!(triplet_loss(&[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0], 0.3).unwrap(), 0.0);
    assert!((triplet_loss::<f64>(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0], 0.3).unwrap() - 0.3).abs() < 1e-15);
    assert_eq!(triplet_loss(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 2.0], 0.3).unwrap(), 0.0);
    assert!((triplet_loss::<f64>(&[0.0, 0.0], &[2.0, 0.0], &[1.0, 0.0], 0.3).unwrap() - 3.3).abs() < 1e-12);
    assert!(matches!(triplet_loss(&[0.0], &[0.0, 1.0], &[0.0], 0.3), Err(Error::Shape(_))));
    assert_eq!(squared_distance(&[1.0, 2.0, 3.0], &[0.0, 0.0, 1.0]).unwrap(), 9.0);
}

proptest! {
    #[test]
    fn triplet_is_nonnegative(v in prop::collection::vec(-5.0f64..5.0, 9), m in 0.0f64..2.0) {
        let l = triplet_loss(&v[0..3], &v[3..6], &v[6..9], m).unwrap();
        prop_assert!(l >= 0.0);
        let d = squared_distance(&v[0..3], &v[3..6]).unwrap() - squared_distance(&v[0..3], &v[6..9]).unwrap() + m;
        prop_assert!((l - d.max(0.0)).abs() < 1e-12);
    }
}

#[test]
fn autoencoder_oracles() {
    let c = Tensor::from_fn(&[1, 4, 4], |i| (i % 2) as f64);
    assert_eq!(autoencoder_loss_from(&c, &c, &[0.0; 3], 0.5).unwrap(), 0.0);
    let off = c.map(|v| v + 0.2);
    assert!((autoencoder_loss_from(&off, &c, &[0.0; 3], 0.5).unwrap() - 0.04).abs() < 1e-12);
    assert!((autoencoder_loss_from(&c, &c, &[1.0, 2.0], 0.5).unwrap() - 2.5).abs() < 1e-12);
    let bad = Tensor::from_fn(&[1, 2, 8], |_| 0.0);
    assert!(autoencoder_loss_from(&bad, &c, &[], 0.0).is_err());
}

#[test]
fn attention_loss_hand_computed() {
    let (vp_i, vx_a, vp_j, vx_b): ([f64; 2], [f64; 2], [f64; 2], [f64; 2]) = ([0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [2.0, 0.0]);
    // d_pos 1, first hinge 0.3, second 0, plus d_pos.
    let l = attention_loss_from(&vp_i, &vx_a, &vp_j, &vx_b, 0.3, 0.0).unwrap();
    assert!((l - 1.3).abs() < 1e-12, "{l}");
    let l = attention_loss_from(&vp_i, &vx_a, &vp_j, &vx_b, 0.3, 0.1).unwrap();
    assert!((l - 1.9).abs() < 1e-12, "{l}");
    let same = attention_loss_from(&vp_i, &vp_i, &vp_i, &vp_i, 0.3, 0.0).unwrap();
    assert!((same - 0.6).abs() < 1e-12);
}

#[test]
fn map_loss_hand_computed() {
    let c = Tensor::from_fn(&[1, 2, 2], |i| (i % 2) as f64);
    assert_eq!(map_loss_from(&c, &c, &[0.0, 0.0], &[1.0, 1.0], &[3.0, 0.0], 0.3).unwrap(), 0.0);
    let off = c.map(|v| v + 0.5);
    assert!((map_loss_from(&off, &c, &[0.0, 0.0], &[1.0, 1.0], &[3.0, 0.0], 0.3).unwrap() - 0.25).abs() < 1e-12);
    assert!((map_loss_from(&c, &c, &[0.0, 0.0], &[2.0, 0.0], &[1.0, 0.0], 0.3).unwrap() - 3.3).abs() < 1e-12);
}

#[test]
fn network_contracts() {
    let cfg = stub_config();
    let net = ShapeMatchingNet::<f64>::new(&cfg, 16, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = rand_contour(&mut rng, 16);
    let z = net.encode_shape(&c).unwrap();
    assert_eq!(z.0.len(), cfg.d_s);
    assert_eq!(net.encode_shape(&c).unwrap(), z);
    let recon = net.decode_shape(&z).unwrap();
    assert_eq!(recon.shape(), &[1, 16, 16]);
    assert!(recon.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

    let x = rand_img(&mut rng, 16);
    let parse = net.encode_model(&x).unwrap();
    assert_eq!(parse.codes.len(), 4);
    for (t, a) in parse.attention.iter().enumerate() {
        assert_eq!(a.shape(), &[2, 2]);
        assert!(a.data().iter().all(|&v| v >= 0.0));
        assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-5, "type {t}");
        assert_eq!(parse.codes[t].0.len(), cfg.d_v);
    }
    let v = net.encode_product(&x).unwrap();
    assert_eq!(net.map_to_shape(&v).unwrap().0.len(), cfg.d_s);

    let wrong = rand_img(&mut rng, 8);
    assert!(matches!(net.encode_product(&wrong), Err(Error::Shape(_))));
    let t = GarmentType::ALL[0];
    assert!(matches!(
        net.attention_loss(&x, &x, &x, t, t, 0.3, 0.0),
        Err(Error::Invalid(_))
    ));
    assert!(ShapeMatchingNet::<f64>::new(&cfg, 12, 0).is_err());
    assert!(ShapeMatchingNet::<f64>::new(&SmnConfig { att_grid: 3, ..cfg.clone() }, 24, 0).is_err());
}

#[test]
fn batched_losses_match_per_tuple_losses() {
    let cfg = stub_config();
    let net = ShapeMatchingNet::<f64>::new(&cfg, 8, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let types = [
        (GarmentType::ALL[0], GarmentType::ALL[2]),
        (GarmentType::ALL[3], GarmentType::ALL[1]),
    ];
    let b = stub_batch(&mut rng, 8, &types);
    let g = Graph::new();
    let p = net.store.bind(&g, false);
    let l = net.loss_vars(&g, &p, &b);
    let (ae, att, map, total) = (g.item(l.autoencoder), g.item(l.attention), g.item(l.map), g.item(l.total));
    assert!((total - (ae + att + map)).abs() < 1e-12);

    let (mut e_ae, mut e_att, mut e_map) = (0.0, 0.0, 0.0);
    for (i, &(ta, tb)) in types.iter().enumerate() {
        let img = |t: &Tensor<f64>| RgbImage::new(slice(t, i)).unwrap();
        let con = |t: &Tensor<f64>| ContourImage::from_tensor(slice(t, i)).unwrap();
        let (p_i, x_i, p_j) = (img(&b.p_i), img(&b.x_i), img(&b.p_j));
        let (c_i, c_j) = (con(&b.c_i), con(&b.c_j));
        e_ae += net.autoencoder_loss(&c_i, cfg.lambda_reg).unwrap();
        e_att += net.attention_loss(&p_i, &x_i, &p_j, ta, tb, cfg.margin, cfg.lambda_reg).unwrap();
        e_map += net.map_loss(&p_i, &c_i, &c_j, cfg.margin).unwrap();
    }
    let n = types.len() as f64;
    assert!((ae - e_ae / n).abs() < 1e-12, "{ae} vs {}", e_ae / n);
    assert!((att - e_att / n).abs() < 1e-12, "{att} vs {}", e_att / n);
    assert!((map - e_map / n).abs() < 1e-12, "{map} vs {}", e_map / n);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let cfg = stub_config();
    let mut net = ShapeMatchingNet::<f64>::new(&cfg, 8, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let types = [
        (GarmentType::ALL[1], GarmentType::ALL[0]),
        (GarmentType::ALL[2], GarmentType::ALL[3]),
    ];
    let b = stub_batch(&mut rng, 8, &types);
    let eval = |net: &ShapeMatchingNet<f64>| -> [f64; 4] {
        let g = Graph::new();
        let p = net.store.bind(&g, false);
        let l = net.loss_vars(&g, &p, &b);
        [l.autoencoder, l.attention, l.map, l.total].map(|v| g.item(v))
    };
    let analytic: Vec<Vec<Tensor<f64>>> = (0..4)
        .map(|which| {
            let g = Graph::new();
            let p = net.store.bind(&g, true);
            let l = net.loss_vars(&g, &p, &b);
            let root = [l.autoencoder, l.attention, l.map, l.total][which];
            p.grads(&g.backward(root), &net.store)
        })
        .collect();
    let n_params = net.store.tensors().len();
    let h = 1e-6;
    let mut checked = 0;
    for _ in 0..40 {
        let ti = rng.gen_range(0..n_params);
        let ei = rng.gen_range(0..net.store.tensors()[ti].len());
        let orig = net.store.tensors()[ti].data()[ei];
        net.store.tensors_mut()[ti].data_mut()[ei] = orig + h;
        let up = eval(&net);
        net.store.tensors_mut()[ti].data_mut()[ei] = orig - h;
        let down = eval(&net);
        net.store.tensors_mut()[ti].data_mut()[ei] = orig;
        for which in 0..4 {
            let fd = (up[which] - down[which]) / (2.0 * h);
            let an = analytic[which][ti].data()[ei];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "loss {which}, param {ti}[{ei}]: analytic {an} fd {fd}");
            checked += 1;
        }
    }
    assert_eq!(checked, 160);
}

#[test]
fn shape_codes_ignore_colour_at_equal_luma() {
    let net = ShapeMatchingNet::<f64>::new(&stub_config(), 32, 0).unwrap();
    let paint = |col: [f64; 3]| {
        RgbImage::from_fn(32, 32, |c, y, x| {
            if (6..26).contains(&y) && (10..22).contains(&x) {
                col[c]
            } else {
                1.0
            }
        })
    };
    let (a, b) = (paint([0.8, 0.2, 0.1]), paint([0.2, 0.2, 0.9]));
    let p = ContourParams::default();
    let (ca, cb) = (extract_contour(&a, &p).unwrap(), extract_contour(&b, &p).unwrap());
    assert_eq!(ca, cb);
    assert_eq!(net.encode_shape(&ca).unwrap(), net.encode_shape(&cb).unwrap());
}

fn items(dir: &std::path::Path, n: usize, size: usize) -> Vec<SmnItem<f64>> {
    let cfg = SyntheticConfig {
        n,
        image_size: size,
        two_component: false,
        seed: 6,
    };
    let m = generate_synthetic_corpus(&cfg, dir).unwrap();
    SmnItem::from_pairs(&m.load_images().unwrap(), &ContourParams::default()).unwrap()
}

#[test]
fn batch_sampling_properties() {
    let tmp = tempfile::tempdir().unwrap();
    let its = items(tmp.path(), 12, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let b = sample_smn_batch(&its, 5, &mut rng).unwrap();
    assert_eq!(b.t_a.len(), 5);
    assert_eq!(b.p_i.shape(), &[5, 3, 32, 32]);
    assert_eq!(b.c_i.shape(), &[5, 1, 32, 32]);
    for r in 0..5 {
        assert_ne!(b.t_a[r], b.t_b[r]);
        let pi = slice(&b.p_i, r);
        let pj = slice(&b.p_j, r);
        let owner = |t: &Tensor<f64>| its.iter().position(|it| it.product.tensor() == t).unwrap();
        let (i, j) = (owner(&pi), owner(&pj));
        assert_ne!(i, j);
        assert_eq!(its[i].garment_type, its[j].garment_type);
        assert_eq!(its[i].garment_type, b.t_a[r]);
        assert_eq!(&slice(&b.x_i, r), its[i].model.tensor());
    }
    let b2 = sample_smn_batch(&its, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(b.p_i, b2.p_i);
    assert_eq!(b.t_b, b2.t_b);
    let big = sample_smn_batch(&its, 100, &mut rng).unwrap();
    assert_eq!(big.t_a.len(), 12);

    let lonely: Vec<_> = its
        .iter()
        .filter(|it| it.garment_type != GarmentType::ALL[0])
        .chain(its.iter().find(|it| it.garment_type == GarmentType::ALL[0]))
        .cloned()
        .collect();
    assert!(matches!(sample_smn_batch(&lonely, 4, &mut rng), Err(Error::Invalid(_))));
    assert!(sample_smn_batch(&its[..1], 4, &mut rng).is_err());
}

fn train_config() -> SmnTrainConfig {
    SmnTrainConfig {
        smn: stub_config(),
        steps: 6,
        batch_size: 4,
        lr: 1e-2,
        seed: 13,
    }
}

#[test]
fn training_resumes_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let its = items(&tmp.path().join("data"), 8, 32);
    let mut full = SmnTrainer::<f64>::new(train_config(), 32).unwrap();
    full.train(&its, 6).unwrap();

    let ckpt = tmp.path().join("smn.ckpt");
    let mut a = SmnTrainer::<f64>::new(train_config(), 32).unwrap();
    a.train(&its, 3).unwrap();
    a.save(&ckpt).unwrap();
    let mut b = SmnTrainer::<f64>::load(&ckpt).unwrap();
    assert_eq!(b.step, 3);
    b.train(&its, 6).unwrap();
    assert_eq!(b.history.rows, full.history.rows);
    assert_eq!(b.net.store.tensors(), full.net.store.tensors());
    assert!(full.history.rows.iter().all(|r| r.iter().all(|v| v.is_finite())));
}

#[test]
fn zero_step_checkpoint_is_the_initialisation() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("init.ckpt");
    let t = SmnTrainer::<f64>::new(train_config(), 16).unwrap();
    t.save(&ckpt).unwrap();
    let (net, meta) = load_smn::<f64>(&ckpt).unwrap();
    assert!(meta.is_untrained());
    assert_eq!(net.store.tensors(), t.net.store.tensors());
    let fresh = ShapeMatchingNet::<f64>::new(&stub_config(), 16, 13).unwrap();
    assert_eq!(net.store.tensors(), fresh.store.tensors());
}
