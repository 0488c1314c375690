use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapewarp::dataset::synthetic::{generate_synthetic_corpus, SyntheticConfig};
use shapewarp::multiwarp::{
    apply_affine, cascade_loss, cascade_loss_var, cascade_warp_loss, evaluate_warp_loss, pixel_loss, pixel_loss_var,
    AffineParams, PairBatch, WarpTrainConfig, WarpTrainer, Warper, WarperConfig,
};
use shapewarp::raster::{GarmentMask, RgbImage};
use shapewarp_tensor::{Graph, Tensor};

fn rand_img(rng: &mut ChaCha8Rng, n: usize) -> RgbImage<f64> {
    RgbImage::from_fn(n, n, |_, _, _| rng.gen())
}

fn rand_mask(rng: &mut ChaCha8Rng, n: usize) -> GarmentMask<f64> {
    GarmentMask::from_fn(n, n, |_, _| rng.gen_bool(0.5))
}

fn map(vals: &[f64], n: usize) -> Tensor<f64> {
    Tensor::from_vec(&[1, n, n], vals.to_vec()).unwrap()
}

#[test]
fn pixel_loss_matches_scalar_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for beta in [0.0, 3.0, 10.0, 50.0] {
        let (w, x, m) = (rand_img(&mut rng, 4), rand_img(&mut rng, 4), rand_mask(&mut rng, 4));
        let got = pixel_loss(&w, &x, &m, beta).unwrap();
        for y in 0..4 {
            for xx in 0..4 {
                let mv = if m.keep(y, xx) { 1.0 } else { 0.0 };
                let mut s = 0.0;
                for c in 0..3 {
                    s += (w.get(c, y, xx) - (1.0 - mv) * x.get(c, y, xx)).abs();
                }
                let want = s * (1.0 + beta * (1.0 - mv));
                assert!((got.data()[y * 4 + xx] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn pixel_loss_special_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (x, m) = (rand_img(&mut rng, 4), rand_mask(&mut rng, 4));
    let target = RgbImage::from_fn(4, 4, |c, y, xx| if m.keep(y, xx) { 0.0 } else { x.get(c, y, xx) });
    assert!(pixel_loss(&target, &x, &m, 3.0).unwrap().data().iter().all(|&v| v == 0.0));

    let w = RgbImage::from_fn(1, 1, |c, _, _| if c == 0 { 0.5 } else { 0.0 });
    let x1 = RgbImage::<f64>::filled(1, 1, [0.0; 3]);
    let hole = GarmentMask::from_fn(1, 1, |_, _| false);
    assert!((pixel_loss(&w, &x1, &hole, 3.0).unwrap().data()[0] - 2.0).abs() < 1e-12);

    let wrong = RgbImage::<f64>::filled(4, 5, [0.0; 3]);
    assert!(pixel_loss(&wrong, &x, &m, 3.0).is_err());
}

#[test]
fn cascade_warp_loss_oracles() {
    let a: Vec<f64> = (0..16).map(|i| 1.0 + i as f64 * 0.1).collect();
    let b: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { 0.2 } else { 5.0 }).collect();
    let (ma, mb) = (map(&a, 4), map(&b, 4));
    let mean_a = a.iter().sum::<f64>() / 16.0;
    assert!((cascade_warp_loss(std::slice::from_ref(&ma)).unwrap() - mean_a).abs() < 1e-12);
    assert!((cascade_warp_loss(&[ma.clone(), ma.clone()]).unwrap() - mean_a).abs() < 1e-12);
    let hand: f64 = a.iter().zip(&b).map(|(p, q)| p.min(*q)).sum::<f64>() / 16.0;
    assert!((cascade_warp_loss(&[ma, mb]).unwrap() - hand).abs() < 1e-12);
    assert!(cascade_warp_loss::<f64>(&[]).is_err());
}

#[test]
fn cascade_loss_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let maps: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::from_fn(&[1, 4, 4], |_| rng.gen())).collect();
    let id = AffineParams::<f64>::identity();
    let one = cascade_loss(&[id], &maps[..1], 0.1).unwrap();
    assert_eq!(one, cascade_warp_loss(&maps[..1]).unwrap());

    let no_reg = cascade_loss(&[id; 3], &maps, 0.1).unwrap();
    let plain: f64 = (1..=3).map(|i| cascade_warp_loss(&maps[..i]).unwrap()).sum::<f64>() / 3.0;
    assert!((no_reg - plain).abs() < 1e-12);

    let mut t2 = id;
    t2.m[2] += 0.3;
    t2.m[5] += 0.4;
    let with = cascade_loss(&[id, t2], &maps[..2], 0.1).unwrap();
    let base = cascade_loss(&[id, id], &maps[..2], 0.1).unwrap();
    assert!((with - base - 0.025).abs() < 1e-12);
    assert!(cascade_loss(&[id], &maps[..2], 0.1).is_err());
}

#[test]
fn earlier_maps_weigh_more() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let maps: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::from_fn(&[1, 4, 4], |_| rng.gen())).collect();
        let ths = [AffineParams::identity(); 3];
        let base = cascade_loss(&ths, &maps, 0.1).unwrap();
        let bump = |i: usize| {
            let mut m = maps.clone();
            m[i] = m[i].map(|v| v + 1.0);
            cascade_loss(&ths, &m, 0.1).unwrap() - base
        };
        assert!(bump(0) >= bump(2) - 1e-12);
        assert!(bump(0) >= bump(1) - 1e-12);
    }
}

proptest! {
    #[test]
    fn cascade_warp_loss_never_increases(vals in prop::collection::vec(0.0f64..10.0, 4 * 9)) {
        let maps: Vec<Tensor<f64>> = vals.chunks(9).map(|c| map(c, 3)).collect();
        let mut prev = f64::INFINITY;
        for j in 1..=4 {
            let v = cascade_warp_loss(&maps[..j]).unwrap();
            prop_assert!(v <= prev);
            prev = v;
        }
    }
}

#[test]
fn graph_losses_agree_with_scalar_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (x, m) = (rand_img(&mut rng, 4), rand_mask(&mut rng, 4));
    let ws: Vec<RgbImage<f64>> = (0..2).map(|_| rand_img(&mut rng, 4)).collect();
    let mut t2 = AffineParams::<f64>::identity();
    t2.m[1] = 0.2;
    let ths = [AffineParams::identity(), t2];
    let maps: Vec<Tensor<f64>> = ws.iter().map(|w| pixel_loss(w, &x, &m, 3.0).unwrap()).collect();
    let want = cascade_loss(&ths, &maps, 0.1).unwrap();

    let g = Graph::<f64>::new();
    let target = Tensor::from_fn(&[1, 3, 4, 4], |i| {
        let p = i % 16;
        (1.0 - m.tensor().data()[p]) * x.tensor().data()[i]
    });
    let weight = m.tensor().map(|v| 1.0 + 3.0 * (1.0 - v)).reshape(&[1, 1, 4, 4]).unwrap();
    let (tv, wv) = (g.constant(target), g.constant(weight));
    let maps_v: Vec<_> = ws
        .iter()
        .map(|w| pixel_loss_var(&g, g.constant(w.tensor().clone().reshape(&[1, 3, 4, 4]).unwrap()), tv, wv))
        .collect();
    let th_v: Vec<_> = ths
        .iter()
        .map(|t| g.constant(Tensor::from_vec(&[1, 6], t.m.to_vec()).unwrap()))
        .collect();
    let (total, _) = cascade_loss_var(&g, &th_v, &maps_v, 0.1);
    assert!((g.item(total) - want).abs() < 1e-12);
}

#[test]
fn identity_and_integer_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = rand_img(&mut rng, 8);
    let out = apply_affine(&img, &AffineParams::identity());
    for (a, b) in out.tensor().data().iter().zip(img.tensor().data()) {
        assert!((a - b).abs() < 1e-6);
    }
    let shifted = apply_affine(&img, &AffineParams::pixel_shift(2.0, 1.0, 8, 8));
    for c in 0..3 {
        for y in 0..8 {
            for x in 0..8 {
                let want = if y >= 2 && x >= 1 { img.get(c, y - 2, x - 1) } else { 1.0 };
                assert!((shifted.get(c, y, x) - want).abs() < 1e-12, "({c},{y},{x})");
            }
        }
    }
}

fn mean_warp(img: &RgbImage<f64>, th: &[f64; 6]) -> f64 {
    apply_affine(img, &AffineParams::new(*th)).tensor().mean()
}

#[test]
fn warp_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = rand_img(&mut rng, 8);
    for _ in 0..5 {
        let th: [f64; 6] = [
            1.0 + rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.2..0.2),
            1.0 + rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.3..0.3),
        ];
        let g = Graph::<f64>::new();
        let iv = g.constant(img.tensor().clone().reshape(&[1, 3, 8, 8]).unwrap());
        let tv = g.leaf(Tensor::from_vec(&[1, 6], th.to_vec()).unwrap(), true);
        let out = g.mean(g.grid_sample(iv, tv, 1.0));
        let grads = g.backward(out);
        let an = grads.get(tv).unwrap().clone();
        for j in 0..6 {
            // Bilinear sampling is piecewise smooth; a wide stencil straddles kinks.
            let h = 1e-6;
            let (mut p, mut q) = (th, th);
            p[j] += h;
            q[j] -= h;
            let fd = (mean_warp(&img, &p) - mean_warp(&img, &q)) / (2.0 * h);
            let a = an.data()[j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
            assert!(rel < 1e-3, "θ[{j}]: analytic {a} fd {fd}");
        }
    }
}

#[test]
fn warp_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (p, x, m) = (rand_img(&mut rng, 8), rand_img(&mut rng, 8), rand_mask(&mut rng, 8));
    let th = [0.95, 0.05, 0.1, -0.08, 1.05, -0.12, 1.1, -0.04, -0.1, 0.06, 0.9, 0.15];
    let scalar = |t: &[f64; 12]| {
        let thetas = [
            AffineParams::new(t[..6].try_into().unwrap()),
            AffineParams::new(t[6..].try_into().unwrap()),
        ];
        let maps: Vec<_> = thetas
            .iter()
            .map(|a| pixel_loss(&apply_affine(&p, a), &x, &m, 3.0).unwrap())
            .collect();
        cascade_loss(&thetas, &maps, 0.1).unwrap()
    };
    let g = Graph::<f64>::new();
    let pv = g.constant(p.tensor().clone().reshape(&[1, 3, 8, 8]).unwrap());
    let b = PairBatch::<f64> {
        products: p.tensor().clone().reshape(&[1, 3, 8, 8]).unwrap(),
        models: x.tensor().clone().reshape(&[1, 3, 8, 8]).unwrap(),
        masks: m.tensor().clone().reshape(&[1, 1, 8, 8]).unwrap(),
    };
    let (target, weight) = b.warp_targets(3.0);
    let (tgt, wt) = (g.constant(target), g.constant(weight));
    let t1 = g.leaf(Tensor::from_vec(&[1, 6], th[..6].to_vec()).unwrap(), true);
    let t2 = g.leaf(Tensor::from_vec(&[1, 6], th[6..].to_vec()).unwrap(), true);
    let maps: Vec<_> = [t1, t2]
        .iter()
        .map(|&t| pixel_loss_var(&g, g.grid_sample(pv, t, 1.0), tgt, wt))
        .collect();
    let (total, _) = cascade_loss_var(&g, &[t1, t2], &maps, 0.1);
    assert!((g.item(total) - scalar(&th)).abs() < 1e-10);
    let grads = g.backward(total);
    let an: Vec<f64> = [t1, t2].iter().flat_map(|&t| grads.get(t).unwrap().data().to_vec()).collect();
    for j in 0..12 {
        let h = 1e-6;
        let (mut a, mut b) = (th, th);
        a[j] += h;
        b[j] -= h;
        let fd = (scalar(&a) - scalar(&b)) / (2.0 * h);
        let rel = (an[j] - fd).abs() / an[j].abs().max(fd.abs()).max(1e-4);
        assert!(rel < 1e-3, "θ[{j}]: analytic {} fd {fd}", an[j]);
    }
}

#[test]
fn untrained_predictor_outputs_identity() {
    let cfg = WarperConfig {
        work_res: 8,
        ..Default::default()
    };
    let w = Warper::<f64>::new(&cfg, 16, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (p, m) = (rand_img(&mut rng, 16), rand_mask(&mut rng, 16));
    let th = w.predict_params(&p, &m).unwrap();
    assert_eq!(th.len(), 2);
    assert!(th.iter().all(|t| *t == AffineParams::identity()));
    assert_eq!(th, w.predict_params(&p, &m).unwrap());
    let bundle = w.warp(&p, &m).unwrap();
    assert_eq!(bundle.k(), 2);
    assert_eq!(bundle.warps[0].size(), (16, 16));
    let small = rand_img(&mut rng, 8);
    assert!(w.predict_params(&small, &rand_mask(&mut rng, 8)).is_err());
}

#[test]
fn warper_config_is_validated() {
    for cfg in [
        WarperConfig { k: 0, ..Default::default() },
        WarperConfig { work_res: 12, ..Default::default() },
        WarperConfig { beta: -1.0, ..Default::default() },
    ] {
        assert!(Warper::<f32>::new(&cfg, 64, 0).is_err());
    }
}

#[test]
fn warp_training_resumes_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let m = generate_synthetic_corpus(
        &SyntheticConfig {
            n: 16,
            image_size: 32,
            two_component: true,
            seed: 1,
        },
        &tmp.path().join("c"),
    )
    .unwrap();
    let data = m.load_images().unwrap();
    let mut cfg = WarpTrainConfig::default();
    cfg.warper.work_res = 16;
    cfg.batch_size = 4;
    let mut full = WarpTrainer::<f32>::new(cfg.clone(), 32).unwrap();
    full.train(&data, 8).unwrap();

    let mut a = WarpTrainer::<f32>::new(cfg, 32).unwrap();
    a.train(&data, 4).unwrap();
    let ck = tmp.path().join("w.ckpt");
    a.save(&ck).unwrap();
    let mut b = WarpTrainer::<f32>::load(&ck).unwrap();
    b.train(&data, 8).unwrap();
    assert_eq!(b.history.rows, full.history.rows);
    assert_eq!(b.warper.store.tensors(), full.warper.store.tensors());
    assert!(evaluate_warp_loss(&b.warper, &data, 3.0).unwrap().is_finite());
}
