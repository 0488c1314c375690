//! Inpainting combiner: U-Net over the stacked warps and masked model,
//! hole/valid/perceptual/style/TV loss, joint warper+U-Net training, and
//! keep-region-exact synthesis.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use shapewarp_tensor::{lit, to_f64, Adam, AdamConfig, Bound, Conv2d, Graph, ParamStore, Scalar, Tensor, Var};

use crate::dataset::PairData;
use crate::error::{Error, Result};
use crate::evaluation::{ExtractorConfig, RandomConvExtractor};
use crate::multiwarp::{
    apply_affine, cascade_loss_var, jitter_thetas, pixel_loss_var, AffineParams, PairBatch, WarpBundle, WarpPredictor,
    Warper, WarperConfig,
};
use crate::raster::{GarmentMask, RgbImage};
use crate::training::{load_checkpoint, save_checkpoint, step_rng, CheckpointMeta, History, CODE_VERSION};

/// Channel stack `[w₁ … w_k, m⊗x, m]`, shape `[3k+4, H, W]`.
pub fn compose_input<T: Scalar>(warps: &WarpBundle<T>, x: &RgbImage<T>, m: &GarmentMask<T>) -> Result<Tensor<T>> {
    let size = x.size();
    if m.size() != size || warps.warps.iter().any(|w| w.size() != size) {
        return Err(Error::Shape("warps, model image and mask must share a resolution".into()));
    }
    if warps.warps.is_empty() {
        return Err(Error::Invalid("need at least one warp".into()));
    }
    let masked = masked_model(x.tensor(), m.tensor());
    let mut parts: Vec<&Tensor<T>> = warps.warps.iter().map(|w| w.tensor()).collect();
    parts.push(&masked);
    parts.push(m.tensor());
    let (h, w) = size;
    let lift: Vec<Tensor<T>> = parts
        .iter()
        .map(|t| (*t).clone().reshape(&[1, t.dim(0), h, w]))
        .collect::<std::result::Result<_, _>>()?;
    let stacked = Tensor::concat1(&lift.iter().collect::<Vec<_>>())?;
    let c = stacked.dim(1);
    Ok(stacked.reshape(&[c, h, w])?)
}

/// `m ⊗ x` for `[C,H,W]` or `[N,C,H,W]` images and matching single-channel masks.
fn masked_model<T: Scalar>(x: &Tensor<T>, m: &Tensor<T>) -> Tensor<T> {
    let plane = m.dim(m.rank() - 1) * m.dim(m.rank() - 2);
    let c = x.dim(x.rank() - 3);
    Tensor::from_fn(x.shape(), |i| {
        let (b, r) = (i / (c * plane), i % plane);
        x.data()[i] * m.data()[b * plane + r]
    })
}

/// Pixel mean of the k warps.
pub fn blend_warps<T: Scalar>(warps: &WarpBundle<T>) -> Result<RgbImage<T>> {
    let first = warps
        .warps
        .first()
        .ok_or_else(|| Error::Invalid("need at least one warp".into()))?;
    let mut acc = first.tensor().clone();
    for w in &warps.warps[1..] {
        acc.add_assign(w.tensor());
    }
    let k = lit::<T>(1.0 / warps.warps.len() as f64);
    RgbImage::new(acc.map(|v| v * k))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InpaintWeights {
    pub valid: f64,
    pub hole: f64,
    pub perceptual: f64,
    pub style: f64,
    pub tv: f64,
}

impl Default for InpaintWeights {
    fn default() -> Self {
        Self {
            valid: 1.0,
            hole: 6.0,
            perceptual: 0.05,
            style: 120.0,
            tv: 0.1,
        }
    }
}

impl InpaintWeights {
    pub const ZERO: Self = Self {
        valid: 0.0,
        hole: 0.0,
        perceptual: 0.0,
        style: 0.0,
        tv: 0.0,
    };
}

/// Per-sample mean of `|a−b|` over the pixels selected by `region`
/// (`[N,1,H,W]`, 0/1), averaged over the batch. Empty regions contribute 0.
fn region_l1<T: Scalar>(g: &Graph<T>, a: Var, b: Var, region: &Tensor<T>) -> Var {
    let s = g.shape(a);
    let (n, c) = (s[0], s[1]);
    let plane = s[2] * s[3];
    let counts = Tensor::from_fn(&[n, 1, 1, 1], |i| {
        let k: f64 = region.data()[i * plane..(i + 1) * plane].iter().map(|&v| to_f64(v)).sum();
        lit(if k > 0.0 { 1.0 / (k * c as f64) } else { 0.0 })
    });
    let d = g.mul(g.abs(g.sub(a, b)), g.constant(region.clone()));
    let per = g.sum_to(d, &[n, 1, 1, 1]);
    g.scale(g.sum(g.mul(per, g.constant(counts))), lit(1.0 / n as f64))
}

/// Total variation of `img` over neighbour pairs touching the hole,
/// normalized by the element count of `img`.
fn hole_tv<T: Scalar>(g: &Graph<T>, img: Var, hole: &Tensor<T>) -> Var {
    let s = g.shape(img);
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hd = hole.data();
    let at = |b: usize, y: usize, x: usize| hd[(b * h + y) * w + x] > lit(0.5);
    let horiz = Tensor::from_fn(&[n * c * h, w - 1], |i| {
        let (row, x) = (i / (w - 1), i % (w - 1));
        let (b, y) = (row / (c * h), row % h);
        if at(b, y, x) || at(b, y, x + 1) { T::one() } else { T::zero() }
    });
    let vert = Tensor::from_fn(&[n * c, h - 1, w], |i| {
        let (plane, r) = (i / ((h - 1) * w), i % ((h - 1) * w));
        let (b, y, x) = (plane / c, r / w, r % w);
        if at(b, y, x) || at(b, y + 1, x) { T::one() } else { T::zero() }
    });
    let rows = g.reshape(img, &[n * c * h, w]);
    let dh = g.abs(g.sub(g.narrow(rows, 1, w - 1), g.narrow(rows, 0, w - 1)));
    let planes = g.reshape(img, &[n * c, h, w]);
    let dv = g.abs(g.sub(g.narrow(planes, 1, h - 1), g.narrow(planes, 0, h - 1)));
    let total = g.add(g.sum(g.mul(dh, g.constant(horiz))), g.sum(g.mul(dv, g.constant(vert))));
    g.scale(total, lit(1.0 / (n * c * h * w) as f64))
}

/// Graph inpainting loss for `[N,3,H,W]` prediction/truth and `[N,1,H,W]` mask.
pub fn inpaint_loss_var<T: Scalar>(
    g: &Graph<T>,
    xhat: Var,
    x: &Tensor<T>,
    m: &Tensor<T>,
    w: &InpaintWeights,
    extractor: &RandomConvExtractor<T>,
) -> Var {
    let xv = g.constant(x.clone());
    let hole = m.map(|v| T::one() - v);
    let mut total = g.scale(region_l1(g, xhat, xv, m), lit(w.valid));
    total = g.add(total, g.scale(region_l1(g, xhat, xv, &hole), lit(w.hole)));
    let mv = g.constant(m.clone());
    let hv = g.constant(hole.clone());
    let comp = g.add(g.mul(mv, xv), g.mul(hv, xhat));
    if w.perceptual != 0.0 || w.style != 0.0 {
        let ft = extractor.maps_var(g, xv);
        let fo = extractor.maps_var(g, xhat);
        let fc = extractor.maps_var(g, comp);
        let mut perc = None::<Var>;
        let mut style = None::<Var>;
        let acc = |slot: &mut Option<Var>, v: Var| *slot = Some(slot.map_or(v, |s| g.add(s, v)));
        for ((&t, &o), &c) in ft.iter().zip(&fo).zip(&fc) {
            acc(&mut perc, g.mean(g.abs(g.sub(o, t))));
            acc(&mut perc, g.mean(g.abs(g.sub(c, t))));
            let gt = g.gram(t);
            acc(&mut style, g.mean(g.abs(g.sub(g.gram(o), gt))));
            acc(&mut style, g.mean(g.abs(g.sub(g.gram(c), gt))));
        }
        total = g.add(total, g.scale(perc.expect("layers"), lit(w.perceptual)));
        total = g.add(total, g.scale(style.expect("layers"), lit(w.style)));
    }
    if w.tv != 0.0 {
        total = g.add(total, g.scale(hole_tv(g, comp, &hole), lit(w.tv)));
    }
    total
}

/// Inpainting loss of one generated image against ground truth.
pub fn inpaint_loss<T: Scalar>(
    xhat: &RgbImage<T>,
    x: &RgbImage<T>,
    m: &GarmentMask<T>,
    weights: &InpaintWeights,
    extractor: &RandomConvExtractor<T>,
) -> Result<T> {
    if xhat.size() != x.size() || m.size() != x.size() {
        return Err(Error::Shape("inpaint loss inputs differ in size".into()));
    }
    let (h, w) = x.size();
    let g = Graph::new();
    let xv = g.constant(xhat.tensor().clone().reshape(&[1, 3, h, w])?);
    let l = inpaint_loss_var(
        &g,
        xv,
        &x.tensor().clone().reshape(&[1, 3, h, w])?,
        &m.tensor().clone().reshape(&[1, 1, h, w])?,
        weights,
        extractor,
    );
    Ok(g.item(l))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_width: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_width: 32,
        }
    }
}

impl UNetConfig {
    fn width(&self, level: usize) -> usize {
        self.base_width << level.min(2)
    }
}

/// Encoder of stride-2 convs, decoder of upsample+concat+conv, sigmoid output.
#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    pub in_channels: usize,
    enc: Vec<Conv2d>,
    dec: Vec<Conv2d>,
    out: Conv2d,
}

impl UNet {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: &UNetConfig,
        in_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let l = config.levels;
        let mut enc = vec![Conv2d::new(store, &format!("{prefix}enc0"), in_channels, config.width(0), 3, 1, rng)];
        for i in 1..=l {
            enc.push(Conv2d::new(store, &format!("{prefix}enc{i}"), config.width(i - 1), config.width(i), 3, 2, rng));
        }
        let dec = (0..l)
            .rev()
            .map(|i| {
                let cin = config.width(i + 1) + config.width(i);
                Conv2d::new(store, &format!("{prefix}dec{i}"), cin, config.width(i), 3, 1, rng)
            })
            .collect();
        let out = Conv2d::new(store, &format!("{prefix}out"), config.width(0), 3, 3, 1, rng);
        Self {
            config: config.clone(),
            in_channels,
            enc,
            dec,
            out,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Var {
        let slope = lit::<T>(0.1);
        let mut skips = Vec::with_capacity(self.enc.len());
        let mut h = x;
        for c in &self.enc {
            h = g.leaky_relu(c.forward(g, p, h), slope);
            skips.push(h);
        }
        skips.pop();
        for c in &self.dec {
            let skip = skips.pop().expect("one skip per level");
            h = g.leaky_relu(c.forward(g, p, g.concat(&[g.upsample(h, 2), skip])), slope);
        }
        g.sigmoid(self.out.forward(g, p, h))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct MtnConfig {
    pub warper: WarperConfig,
    pub unet: UNetConfig,
    pub weights: InpaintWeights,
    pub extractor: ExtractorConfig,
}


impl MtnConfig {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        self.warper.validate((image_size, image_size))?;
        let l = self.unet.levels;
        if l == 0 || self.unet.base_width == 0 || !image_size.is_multiple_of(1 << l) {
            return Err(Error::Config(format!(
                "U-Net with {l} levels needs an image size divisible by {}",
                1usize << l
            )));
        }
        Ok(())
    }
}

/// Raw network output and its composite into the model image.
#[derive(Clone, Debug)]
pub struct SynthesisOutput<T = f32> {
    pub image: RgbImage<T>,
    pub warps: WarpBundle<T>,
    pub raw: RgbImage<T>,
}

/// Warper and U-Net sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Mtn<T = f32> {
    pub config: MtnConfig,
    pub image_size: usize,
    pub store: ParamStore<T>,
    pub predictor: WarpPredictor,
    pub unet: UNet,
    extractor: RandomConvExtractor<T>,
}

impl<T: Scalar> Mtn<T> {
    /// The warper is initialized exactly as [`Warper::new`] with the same seed.
    pub fn new(config: &MtnConfig, image_size: usize, seed: u64) -> Result<Self> {
        config.validate(image_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let predictor = WarpPredictor::new(&mut store, "warper.", &config.warper, image_size, &mut rng)?;
        let unet = UNet::new(&mut store, "unet.", &config.unet, 3 * config.warper.k + 4, &mut rng);
        Ok(Self {
            config: config.clone(),
            image_size,
            store,
            predictor,
            unet,
            extractor: RandomConvExtractor::new(&config.extractor),
        })
    }

    pub fn k(&self) -> usize {
        self.config.warper.k
    }

    pub fn extractor(&self) -> &RandomConvExtractor<T> {
        &self.extractor
    }

    /// Standalone copy of the warper half.
    pub fn warper(&self) -> Result<Warper<T>> {
        let mut w = Warper::new(&self.config.warper, self.image_size, 0)?;
        let named: Vec<(String, Tensor<T>)> = self.store.named().map(|(n, t)| (n.to_string(), t.clone())).collect();
        w.store.load_named(&named)?;
        Ok(w)
    }

    fn check_size(&self, size: (usize, usize)) -> Result<()> {
        let s = self.image_size;
        if size != (s, s) {
            return Err(Error::Shape(format!("MTN expects {s}×{s} inputs, got {size:?}")));
        }
        Ok(())
    }

    /// Raw U-Net output for a `[3k+4, H, W]` stack.
    pub fn generate(&self, stacked: &Tensor<T>) -> Result<RgbImage<T>> {
        let want = self.unet.in_channels;
        if stacked.rank() != 3 || stacked.dim(0) != want {
            return Err(Error::Shape(format!("U-Net expects {want} input channels, got {:?}", stacked.shape())));
        }
        self.check_size((stacked.dim(1), stacked.dim(2)))?;
        let (h, w) = (stacked.dim(1), stacked.dim(2));
        let g = Graph::new();
        let p = self.store.bind(&g, false);
        let out = self.unet.forward(&g, &p, g.constant(stacked.clone().reshape(&[1, want, h, w])?));
        let v = g.value(out).clone();
        RgbImage::new(v.reshape(&[3, h, w])?)
    }

    pub fn warp(&self, p: &RgbImage<T>, m: &GarmentMask<T>) -> Result<WarpBundle<T>> {
        self.check_size(p.size())?;
        self.check_size(m.size())?;
        let (h, w) = p.size();
        let g = Graph::new();
        let bound = self.store.bind(&g, false);
        let pv = g.constant(p.tensor().clone().reshape(&[1, 3, h, w])?);
        let mv = g.constant(m.tensor().clone().reshape(&[1, 1, h, w])?);
        let out = self.predictor.forward(&g, &bound, pv, mv);
        let thetas: Vec<AffineParams<T>> = g
            .value(out)
            .data()
            .chunks(6)
            .map(|c| AffineParams::new(c.try_into().expect("six values")))
            .collect();
        let warps = thetas.iter().map(|t| apply_affine(p, t)).collect();
        Ok(WarpBundle { thetas, warps })
    }

    /// Puts product `p` on model `x`; pixels where `m = 1` are copied from `x`.
    pub fn synthesize(&self, p: &RgbImage<T>, x: &RgbImage<T>, m: &GarmentMask<T>) -> Result<SynthesisOutput<T>> {
        self.check_size(x.size())?;
        let warps = self.warp(p, m)?;
        let raw = self.generate(&compose_input(&warps, x, m)?)?;
        let (h, w) = x.size();
        let image = RgbImage::from_fn(h, w, |c, y, xx| if m.keep(y, xx) { x.get(c, y, xx) } else { raw.get(c, y, xx) });
        Ok(SynthesisOutput { image, warps, raw })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MtnTrainConfig {
    pub mtn: MtnConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MtnTrainConfig {
    fn default() -> Self {
        Self {
            mtn: MtnConfig::default(),
            steps: 1000,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

pub const MTN_KIND: &str = "mtn";
pub const MTN_HISTORY: [&str; 4] = ["step", "L_cascade", "L_inpaint", "total"];

/// Loss values and parameter gradients of one training batch.
pub struct MtnStep<T> {
    pub cascade: f64,
    pub warp: f64,
    pub inpaint: f64,
    pub total: f64,
    pub grads: Vec<Tensor<T>>,
}

pub struct MtnTrainer<T = f32> {
    pub config: MtnTrainConfig,
    pub mtn: Mtn<T>,
    pub adam: Adam<T>,
    pub step: u64,
    pub history: History,
}

impl<T: Scalar> MtnTrainer<T> {
    pub fn new(config: MtnTrainConfig, image_size: usize) -> Result<Self> {
        let mtn = Mtn::new(&config.mtn, image_size, config.seed)?;
        let adam = Adam::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            &mtn.store,
        );
        Ok(Self {
            config,
            mtn,
            adam,
            step: 0,
            history: History::new(&MTN_HISTORY),
        })
    }

    /// Losses and gradients for the batch of the current step; batch and
    /// jitter draws match warp-only training with the same seed.
    pub fn compute_step(&self, data: &[PairData]) -> Result<MtnStep<T>> {
        if data.is_empty() {
            return Err(Error::Invalid("no training pairs".into()));
        }
        let mut rng = step_rng(self.config.seed, self.step);
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(self.config.batch_size.min(data.len()));
        let pairs: Vec<&PairData> = idx.iter().map(|&i| &data[i]).collect();
        let b = PairBatch::<T>::from_pairs(&pairs)?;
        let cfg = &self.config.mtn;
        let (target, weight) = b.warp_targets(cfg.warper.beta);
        let g = Graph::new();
        let bound = self.mtn.store.bind(&g, true);
        let pv = g.constant(b.products.clone());
        let mv = g.constant(b.masks.clone());
        let pred = self.mtn.predictor.forward(&g, &bound, pv, mv);
        let thetas = self.mtn.predictor.split(&g, pred);
        let thetas = jitter_thetas(&g, thetas, cfg.warper.theta_jitter, &mut rng);
        let warps: Vec<Var> = thetas.iter().map(|&t| g.grid_sample(pv, t, T::one())).collect();
        let (tv, wv) = (g.constant(target), g.constant(weight));
        let maps: Vec<Var> = warps.iter().map(|&w| pixel_loss_var(&g, w, tv, wv)).collect();
        let (cascade, partial) = cascade_loss_var(&g, &thetas, &maps, lit(cfg.warper.alpha));
        let masked = g.constant(masked_model(&b.models, &b.masks));
        let mut stack = warps.clone();
        stack.push(masked);
        stack.push(mv);
        let xhat = self.mtn.unet.forward(&g, &bound, g.concat(&stack));
        let inpaint = inpaint_loss_var(&g, xhat, &b.models, &b.masks, &cfg.weights, &self.mtn.extractor);
        let total = g.add(cascade, inpaint);
        let grads = g.backward(total);
        Ok(MtnStep {
            cascade: to_f64(g.item(cascade)),
            warp: to_f64(g.item(*partial.last().expect("k ≥ 1"))),
            inpaint: to_f64(g.item(inpaint)),
            total: to_f64(g.item(total)),
            grads: bound.grads(&grads, &self.mtn.store),
        })
    }

    /// One optimizer step; returns `[L_cascade, L_inpaint, total]`.
    pub fn train_step(&mut self, data: &[PairData]) -> Result<[f64; 3]> {
        let s = self.compute_step(data)?;
        self.adam.update(&mut self.mtn.store, &s.grads);
        self.step += 1;
        self.history.push(vec![self.step as f64, s.cascade, s.inpaint, s.total]);
        Ok([s.cascade, s.inpaint, s.total])
    }

    pub fn train(&mut self, data: &[PairData], until: u64) -> Result<()> {
        while self.step < until {
            let l = self.train_step(data)?;
            if self.step.is_multiple_of(50) {
                log::info!("mtn step {} total {:.4}", self.step, l[2]);
            }
        }
        Ok(())
    }

    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            kind: MTN_KIND.into(),
            code_version: CODE_VERSION.into(),
            step: self.step,
            config: serde_json::json!({"train": self.config, "image_size": self.mtn.image_size}),
            adam: None,
            history: self.history.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.meta(), &self.mtn.store, Some(&self.adam))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint::<T>(path, MTN_KIND)?;
        let config: MtnTrainConfig = serde_json::from_value(ck.meta.config["train"].clone())?;
        let size = ck.meta.config["image_size"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing image_size".into()))? as usize;
        let mut t = Self::new(config, size)?;
        let expected = 3 * t.mtn.k() + 4;
        if let Some((_, w)) = ck.params.iter().find(|(n, _)| n == "unet.enc0.w") {
            if w.dim(1) != expected {
                return Err(Error::Checkpoint(format!(
                    "U-Net takes {} input channels but k = {} needs {expected}",
                    w.dim(1),
                    t.mtn.k()
                )));
            }
        }
        t.mtn.store.load_named(&ck.params)?;
        if let Some(a) = ck.adam {
            t.adam = a;
        }
        t.step = ck.meta.step;
        t.history = ck.meta.history;
        Ok(t)
    }
}

/// Loads an MTN for inference; warns when the checkpoint is untrained.
pub fn load_mtn<T: Scalar>(path: &Path) -> Result<(Mtn<T>, CheckpointMeta)> {
    let t = MtnTrainer::<T>::load(path)?;
    let meta = t.meta();
    if meta.is_untrained() {
        log::warn!("MTN checkpoint {} is untrained", path.display());
    }
    Ok((t.mtn, meta))
}
