//! Shape Matching Net: contour autoencoder, attention visual encoder and
//! visual→shape mapper, with their triplet-based losses.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use shapewarp_tensor::{lit, to_f64, Adam, AdamConfig, Bound, Conv2d, Graph, Linear, ParamStore, Scalar, Tensor, Var};

use crate::contour::{extract_contour, ContourImage, ContourParams};
use crate::dataset::{GarmentType, PairData};
use crate::error::{Error, Result};
use crate::raster::{batch, RgbImage};
use crate::training::{load_checkpoint, save_checkpoint, step_rng, CheckpointMeta, History, CODE_VERSION};

/// Shape-space embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeCode<T = f32>(pub Vec<T>);

/// Appearance-space embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualCode<T = f32>(pub Vec<T>);

/// Per-type codes and attention maps of a model image, indexed by
/// [`GarmentType::index`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParse<T = f32> {
    pub codes: Vec<VisualCode<T>>,
    /// `[g, g]` maps, each summing to one.
    pub attention: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParse<T> {
    pub fn code(&self, t: GarmentType) -> &VisualCode<T> {
        &self.codes[t.index()]
    }
}

pub fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vector lengths {} and {} differ", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum())
}

/// `max(0, d(a,p) − d(a,n) + margin)` with squared Euclidean `d`.
pub fn triplet_loss<T: Scalar>(a: &[T], p: &[T], n: &[T], margin: T) -> Result<T> {
    let v = squared_distance(a, p)? - squared_distance(a, n)? + margin;
    Ok(v.max(T::zero()))
}

fn norm2<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum()
}

fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / lit(a.len() as f64))
}

/// `mean((recon − c)²) + λ‖code‖²`.
pub fn autoencoder_loss_from<T: Scalar>(recon: &Tensor<T>, c: &Tensor<T>, code: &[T], lambda_reg: T) -> Result<T> {
    Ok(mse(recon, c)? + lambda_reg * norm2(code))
}

/// Attention loss from the four visual codes of one tuple.
pub fn attention_loss_from<T: Scalar>(
    vp_i: &[T],
    vx_a: &[T],
    vp_j: &[T],
    vx_b: &[T],
    margin: T,
    lambda_reg: T,
) -> Result<T> {
    let reg = norm2(vp_i) + norm2(vx_a) + norm2(vp_j) + norm2(vx_b);
    Ok(triplet_loss(vp_i, vx_a, vp_j, margin)?
        + triplet_loss(vp_i, vx_a, vx_b, margin)?
        + squared_distance(vp_i, vx_a)?
        + lambda_reg * reg)
}

/// Map loss from the reconstruction of `T(E_v(p_i))` and the shape codes.
pub fn map_loss_from<T: Scalar>(
    recon: &Tensor<T>,
    c_i: &Tensor<T>,
    es_ci: &[T],
    mapped: &[T],
    es_cj: &[T],
    margin: T,
) -> Result<T> {
    Ok(mse(recon, c_i)? + triplet_loss(es_ci, mapped, es_cj, margin)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmnConfig {
    pub d_s: usize,
    pub d_v: usize,
    /// Attention grid side; images are pooled to `4 · att_grid` first.
    pub att_grid: usize,
    pub channels: [usize; 3],
    pub mapper_hidden: usize,
    pub margin: f64,
    pub lambda_reg: f64,
}

impl Default for SmnConfig {
    fn default() -> Self {
        Self {
            d_s: 64,
            d_v: 128,
            att_grid: 8,
            channels: [16, 32, 32],
            mapper_hidden: 128,
            margin: 0.3,
            lambda_reg: 1e-4,
        }
    }
}

impl SmnConfig {
    pub fn work_res(&self) -> usize {
        4 * self.att_grid
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        let r = self.work_res();
        if self.att_grid < 2 || !self.att_grid.is_multiple_of(2) {
            return Err(Error::Config(format!("att_grid {} must be even and ≥ 2", self.att_grid)));
        }
        if !image_size.is_multiple_of(r) {
            return Err(Error::Config(format!(
                "image size {image_size} is not a multiple of the SMN working resolution {r}"
            )));
        }
        if self.d_s == 0 || self.d_v == 0 || self.mapper_hidden == 0 {
            return Err(Error::Config("SMN dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layers {
    es_convs: Vec<Conv2d>,
    es_fc: Linear,
    ds_fc: Linear,
    ds_convs: Vec<Conv2d>,
    ev_convs: Vec<Conv2d>,
    att_product: Conv2d,
    att_model: Conv2d,
    ev_proj: Linear,
    t1: Linear,
    t2: Linear,
}

/// The full SMN with its parameters.
#[derive(Clone, Debug)]
pub struct ShapeMatchingNet<T = f32> {
    pub config: SmnConfig,
    pub image_size: usize,
    pub store: ParamStore<T>,
    layers: Layers,
}

const SLOPE: f64 = 0.1;

/// Graph outputs for one batch of training tuples.
pub struct SmnLossVars {
    pub autoencoder: Var,
    pub attention: Var,
    pub map: Var,
    pub total: Var,
}

/// Batched training tuple: `p_i`, `x_i`, `p_j`, `c_i`, `c_j`, `t_a`, `t_b`.
pub struct SmnBatch<T> {
    pub p_i: Tensor<T>,
    pub x_i: Tensor<T>,
    pub p_j: Tensor<T>,
    pub c_i: Tensor<T>,
    pub c_j: Tensor<T>,
    pub t_a: Vec<GarmentType>,
    pub t_b: Vec<GarmentType>,
}

impl<T: Scalar> ShapeMatchingNet<T> {
    pub fn new(config: &SmnConfig, image_size: usize, seed: u64) -> Result<Self> {
        config.validate(image_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let [c1, c2, c3] = config.channels;
        let side = config.work_res() / 8;
        let flat = c3 * side * side;
        let s = &mut store;
        let r = &mut rng;
        let es_convs = vec![
            Conv2d::new(s, "es.conv0", 1, c1, 3, 2, r),
            Conv2d::new(s, "es.conv1", c1, c2, 3, 2, r),
            Conv2d::new(s, "es.conv2", c2, c3, 3, 2, r),
        ];
        let es_fc = Linear::new(s, "es.fc", flat, config.d_s, r);
        let ds_fc = Linear::new(s, "ds.fc", config.d_s, flat, r);
        let ds_convs = vec![
            Conv2d::new(s, "ds.conv0", c3, c2, 3, 1, r),
            Conv2d::new(s, "ds.conv1", c2, c1, 3, 1, r),
            Conv2d::new(s, "ds.conv2", c1, 1, 3, 1, r),
        ];
        let ev_convs = vec![
            Conv2d::new(s, "ev.conv0", 3, c1, 3, 2, r),
            Conv2d::new(s, "ev.conv1", c1, c2, 3, 2, r),
            Conv2d::new(s, "ev.conv2", c2, c3, 3, 1, r),
        ];
        let att_product = Conv2d::new(s, "ev.att_product", c3, 1, 1, 1, r);
        let att_model = Conv2d::new(s, "ev.att_model", c3, GarmentType::ALL.len(), 1, 1, r);
        let ev_proj = Linear::new(s, "ev.proj", c3, config.d_v, r);
        let t1 = Linear::new(s, "t.fc0", config.d_v, config.mapper_hidden, r);
        let t2 = Linear::new(s, "t.fc1", config.mapper_hidden, config.d_s, r);
        Ok(Self {
            config: config.clone(),
            image_size,
            store,
            layers: Layers {
                es_convs,
                es_fc,
                ds_fc,
                ds_convs,
                ev_convs,
                att_product,
                att_model,
                ev_proj,
                t1,
                t2,
            },
        })
    }

    fn pool_factor(&self) -> usize {
        self.image_size / self.config.work_res()
    }

    /// `[N,1,H,W]` contours → `[N, d_s]`.
    pub fn es_var(&self, g: &Graph<T>, p: &Bound, c: Var) -> Var {
        let mut h = g.avg_pool(c, self.pool_factor());
        for conv in &self.layers.es_convs {
            h = g.leaky_relu(conv.forward(g, p, h), lit(SLOPE));
        }
        let n = g.shape(h)[0];
        let d = g.value(h).len() / n;
        let h = g.reshape(h, &[n, d]);
        self.layers.es_fc.forward(g, p, h)
    }

    /// `[N, d_s]` → `[N,1,H,W]` in `[0,1]`.
    pub fn ds_var(&self, g: &Graph<T>, p: &Bound, z: Var) -> Var {
        let n = g.shape(z)[0];
        let side = self.config.work_res() / 8;
        let c3 = self.config.channels[2];
        let h = g.leaky_relu(self.layers.ds_fc.forward(g, p, z), lit(SLOPE));
        let mut h = g.reshape(h, &[n, c3, side, side]);
        let last = self.layers.ds_convs.len() - 1;
        for (i, conv) in self.layers.ds_convs.iter().enumerate() {
            h = conv.forward(g, p, g.upsample(h, 2));
            if i != last {
                h = g.leaky_relu(h, lit(SLOPE));
            }
        }
        g.sigmoid(g.upsample(h, self.pool_factor()))
    }

    fn ev_trunk(&self, g: &Graph<T>, p: &Bound, img: Var) -> Var {
        let mut h = g.avg_pool(img, self.pool_factor());
        for conv in &self.layers.ev_convs {
            h = g.leaky_relu(conv.forward(g, p, h), lit(SLOPE));
        }
        h
    }

    /// Products `[N,3,H,W]` → `([N, d_v], attention [N,1,g,g])`.
    pub fn ev_product_var(&self, g: &Graph<T>, p: &Bound, img: Var) -> (Var, Var) {
        let f = self.ev_trunk(g, p, img);
        let att = g.spatial_softmax(self.layers.att_product.forward(g, p, f));
        let pooled = g.attn_pool(f, att);
        let n = g.shape(pooled)[0];
        let pooled = g.reshape(pooled, &[n, self.config.channels[2]]);
        (self.layers.ev_proj.forward(g, p, pooled), att)
    }

    /// Models `[N,3,H,W]` → `([N, 4, d_v], attention [N,4,g,g])`.
    pub fn ev_model_var(&self, g: &Graph<T>, p: &Bound, img: Var) -> (Var, Var) {
        let f = self.ev_trunk(g, p, img);
        let att = g.spatial_softmax(self.layers.att_model.forward(g, p, f));
        let pooled = g.attn_pool(f, att);
        let n = g.shape(pooled)[0];
        let nt = GarmentType::ALL.len();
        let flat = g.reshape(pooled, &[n * nt, self.config.channels[2]]);
        let codes = self.layers.ev_proj.forward(g, p, flat);
        (g.reshape(codes, &[n, nt, self.config.d_v]), att)
    }

    /// `[N, d_v]` → `[N, d_s]`.
    pub fn t_var(&self, g: &Graph<T>, p: &Bound, v: Var) -> Var {
        let h = g.leaky_relu(self.layers.t1.forward(g, p, v), lit(SLOPE));
        self.layers.t2.forward(g, p, h)
    }

    /// Picks one type's code per row of `[N,4,d_v]`.
    pub fn select_type(&self, g: &Graph<T>, codes: Var, types: &[GarmentType]) -> Var {
        let nt = GarmentType::ALL.len();
        let n = types.len();
        let onehot = Tensor::from_fn(&[n, nt, 1], |i| {
            if types[i / nt].index() == i % nt {
                T::one()
            } else {
                T::zero()
            }
        });
        let picked = g.sum_to(g.mul(codes, g.constant(onehot)), &[n, 1, self.config.d_v]);
        g.reshape(picked, &[n, self.config.d_v])
    }

    /// All three losses, each averaged over the batch.
    pub fn loss_vars(&self, g: &Graph<T>, p: &Bound, b: &SmnBatch<T>) -> SmnLossVars {
        let n = b.t_a.len();
        let inv_n = lit::<T>(1.0 / n as f64);
        let margin = lit::<T>(self.config.margin);
        let lreg = lit::<T>(self.config.lambda_reg);
        let c_i = g.constant(b.c_i.clone());
        let c_j = g.constant(b.c_j.clone());
        let es_ci = self.es_var(g, p, c_i);
        let es_cj = self.es_var(g, p, c_j);
        let recon = self.ds_var(g, p, es_ci);
        let ae_mse = g.mean(g.square(g.sub(recon, c_i)));
        let ae_reg = g.scale(g.sum(g.square(es_ci)), lreg * inv_n);
        let autoencoder = g.add(ae_mse, ae_reg);

        let (vp_i, _) = self.ev_product_var(g, p, g.constant(b.p_i.clone()));
        let (vp_j, _) = self.ev_product_var(g, p, g.constant(b.p_j.clone()));
        let (vx, _) = self.ev_model_var(g, p, g.constant(b.x_i.clone()));
        let vx_a = self.select_type(g, vx, &b.t_a);
        let vx_b = self.select_type(g, vx, &b.t_b);
        let d_pos = sqdist_rows(g, vp_i, vx_a);
        let trip1 = triplet_rows(g, d_pos, sqdist_rows(g, vp_i, vp_j), margin);
        let trip2 = triplet_rows(g, d_pos, sqdist_rows(g, vp_i, vx_b), margin);
        let mut att = g.add(g.add(g.sum(trip1), g.sum(trip2)), g.sum(d_pos));
        let mut reg = g.sum(g.square(vp_i));
        for v in [vx_a, vp_j, vx_b] {
            reg = g.add(reg, g.sum(g.square(v)));
        }
        att = g.add(att, g.scale(reg, lreg));
        let attention = g.scale(att, inv_n);

        let mapped = self.t_var(g, p, vp_i);
        let map_recon = self.ds_var(g, p, mapped);
        let map_mse = g.mean(g.square(g.sub(map_recon, c_i)));
        let trip = triplet_rows(g, sqdist_rows(g, es_ci, mapped), sqdist_rows(g, es_ci, es_cj), margin);
        let map = g.add(map_mse, g.scale(g.sum(trip), inv_n));

        let total = g.add(g.add(autoencoder, attention), map);
        SmnLossVars {
            autoencoder,
            attention,
            map,
            total,
        }
    }

    fn eval<R>(&self, f: impl FnOnce(&Graph<T>, &Bound) -> R) -> R {
        let g = Graph::new();
        let p = self.store.bind(&g, false);
        f(&g, &p)
    }

    fn check_size(&self, size: (usize, usize)) -> Result<()> {
        let s = self.image_size;
        if size != (s, s) {
            return Err(Error::Shape(format!("SMN expects {s}×{s} inputs, got {size:?}")));
        }
        Ok(())
    }

    fn rows(t: &Tensor<T>) -> Vec<Vec<T>> {
        let n = t.dim(0);
        let d = t.len() / n;
        t.data().chunks(d).map(<[T]>::to_vec).collect()
    }

    pub fn encode_shapes(&self, cs: &[&ContourImage<T>]) -> Result<Vec<ShapeCode<T>>> {
        for c in cs {
            self.check_size(c.size())?;
        }
        let x = batch(&cs.iter().map(|c| c.tensor()).collect::<Vec<_>>())?;
        Ok(self.eval(|g, p| {
            let z = self.es_var(g, p, g.constant(x));
            let v = g.value(z);
            Self::rows(&v).into_iter().map(ShapeCode).collect()
        }))
    }

    pub fn encode_shape(&self, c: &ContourImage<T>) -> Result<ShapeCode<T>> {
        Ok(self.encode_shapes(&[c])?.remove(0))
    }

    /// `[1, H, W]` reconstruction in `[0,1]`.
    pub fn decode_shape(&self, z: &ShapeCode<T>) -> Result<Tensor<T>> {
        if z.0.len() != self.config.d_s {
            return Err(Error::Shape(format!("shape code has {} dims, expected {}", z.0.len(), self.config.d_s)));
        }
        let zt = Tensor::from_vec(&[1, self.config.d_s], z.0.clone())?;
        let s = self.image_size;
        self.eval(|g, p| {
            let out = self.ds_var(g, p, g.constant(zt));
            let v = g.value(out).clone();
            Ok(v.reshape(&[1, s, s])?)
        })
    }

    pub fn encode_products(&self, ps: &[&RgbImage<T>]) -> Result<Vec<VisualCode<T>>> {
        for p in ps {
            self.check_size(p.size())?;
        }
        let x = batch(&ps.iter().map(|p| p.tensor()).collect::<Vec<_>>())?;
        Ok(self.eval(|g, p| {
            let (v, _) = self.ev_product_var(g, p, g.constant(x));
            let v = g.value(v);
            Self::rows(&v).into_iter().map(VisualCode).collect()
        }))
    }

    pub fn encode_product(&self, p: &RgbImage<T>) -> Result<VisualCode<T>> {
        Ok(self.encode_products(&[p])?.remove(0))
    }

    pub fn encode_models(&self, xs: &[&RgbImage<T>]) -> Result<Vec<ModelParse<T>>> {
        for x in xs {
            self.check_size(x.size())?;
        }
        let x = batch(&xs.iter().map(|p| p.tensor()).collect::<Vec<_>>())?;
        let nt = GarmentType::ALL.len();
        let gsz = self.config.att_grid;
        Ok(self.eval(|g, p| {
            let (codes, att) = self.ev_model_var(g, p, g.constant(x));
            let (codes, att) = (g.value(codes), g.value(att));
            let per = Self::rows(&codes);
            let amaps = att.data();
            per.iter()
                .enumerate()
                .map(|(i, row)| ModelParse {
                    codes: row.chunks(self.config.d_v).map(|c| VisualCode(c.to_vec())).collect(),
                    attention: (0..nt)
                        .map(|t| {
                            let o = (i * nt + t) * gsz * gsz;
                            Tensor::from_vec(&[gsz, gsz], amaps[o..o + gsz * gsz].to_vec()).expect("grid")
                        })
                        .collect(),
                })
                .collect()
        }))
    }

    pub fn encode_model(&self, x: &RgbImage<T>) -> Result<ModelParse<T>> {
        Ok(self.encode_models(&[x])?.remove(0))
    }

    pub fn map_to_shapes(&self, vs: &[&VisualCode<T>]) -> Result<Vec<ShapeCode<T>>> {
        let d = self.config.d_v;
        if let Some(v) = vs.iter().find(|v| v.0.len() != d) {
            return Err(Error::Shape(format!("visual code has {} dims, expected {d}", v.0.len())));
        }
        let x = Tensor::from_vec(&[vs.len(), d], vs.iter().flat_map(|v| v.0.iter().copied()).collect())?;
        Ok(self.eval(|g, p| {
            let z = self.t_var(g, p, g.constant(x));
            let z = g.value(z);
            Self::rows(&z).into_iter().map(ShapeCode).collect()
        }))
    }

    pub fn map_to_shape(&self, v: &VisualCode<T>) -> Result<ShapeCode<T>> {
        Ok(self.map_to_shapes(&[v])?.remove(0))
    }

    pub fn autoencoder_loss(&self, c: &ContourImage<T>, lambda_reg: T) -> Result<T> {
        let z = self.encode_shape(c)?;
        let recon = self.decode_shape(&z)?;
        autoencoder_loss_from(&recon, c.tensor(), &z.0, lambda_reg)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn attention_loss(
        &self,
        p_i: &RgbImage<T>,
        x_i: &RgbImage<T>,
        p_j: &RgbImage<T>,
        t_a: GarmentType,
        t_b: GarmentType,
        margin: T,
        lambda_reg: T,
    ) -> Result<T> {
        if t_a == t_b {
            return Err(Error::Invalid(format!("attention loss needs distinct types, got {t_a} twice")));
        }
        let v = self.encode_products(&[p_i, p_j])?;
        let parse = self.encode_model(x_i)?;
        attention_loss_from(&v[0].0, &parse.code(t_a).0, &v[1].0, &parse.code(t_b).0, margin, lambda_reg)
    }

    pub fn map_loss(&self, p_i: &RgbImage<T>, c_i: &ContourImage<T>, c_j: &ContourImage<T>, margin: T) -> Result<T> {
        let mapped = self.map_to_shape(&self.encode_product(p_i)?)?;
        let recon = self.decode_shape(&mapped)?;
        let es = self.encode_shapes(&[c_i, c_j])?;
        map_loss_from(&recon, c_i.tensor(), &es[0].0, &mapped.0, &es[1].0, margin)
    }

    /// Shape code of a product via `T(E_v(p))`, optionally on its grayscale version.
    pub fn product_shape_codes(&self, ps: &[&RgbImage<T>], grayscale: bool) -> Result<Vec<ShapeCode<T>>> {
        let owned: Vec<RgbImage<T>>;
        let ps: Vec<&RgbImage<T>> = if grayscale {
            owned = ps.iter().map(|p| p.to_grayscale()).collect();
            owned.iter().collect()
        } else {
            ps.to_vec()
        };
        let v = self.encode_products(&ps)?;
        self.map_to_shapes(&v.iter().collect::<Vec<_>>())
    }

    /// Shape code of each model's garment of the given type via `T(E_v(x)_t)`.
    pub fn model_shape_codes(&self, xs: &[&RgbImage<T>], types: &[GarmentType]) -> Result<Vec<ShapeCode<T>>> {
        let parses = self.encode_models(xs)?;
        let v: Vec<&VisualCode<T>> = parses.iter().zip(types).map(|(p, &t)| p.code(t)).collect();
        self.map_to_shapes(&v)
    }
}

/// `[N,D] × [N,D]` → `[N,1]` squared row distances.
pub fn sqdist_rows<T: Scalar>(g: &Graph<T>, a: Var, b: Var) -> Var {
    let n = g.shape(a)[0];
    g.sum_to(g.square(g.sub(a, b)), &[n, 1])
}

/// Hinge over `[N,1]` distances.
pub fn triplet_rows<T: Scalar>(g: &Graph<T>, d_pos: Var, d_neg: Var, margin: T) -> Var {
    g.relu(g.add_scalar(g.sub(d_pos, d_neg), margin))
}

/// One training item: product, model, contour, type.
#[derive(Clone, Debug)]
pub struct SmnItem<T = f32> {
    pub product: RgbImage<T>,
    pub model: RgbImage<T>,
    pub contour: ContourImage<T>,
    pub garment_type: GarmentType,
}

impl<T: Scalar> SmnItem<T> {
    pub fn from_pairs(pairs: &[PairData], params: &ContourParams) -> Result<Vec<Self>> {
        pairs
            .iter()
            .map(|d| {
                let product: RgbImage<T> = d.product.cast();
                let contour = extract_contour(&product, params)?;
                Ok(Self {
                    model: d.model.cast(),
                    product,
                    contour,
                    garment_type: d.record.garment_type,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmnTrainConfig {
    pub smn: SmnConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SmnTrainConfig {
    fn default() -> Self {
        Self {
            smn: SmnConfig::default(),
            steps: 500,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

pub const SMN_KIND: &str = "smn";
pub const SMN_HISTORY: [&str; 5] = ["step", "L_autoencoder", "L_attention", "L_map", "total"];

/// Draws a batch of training tuples for `step`.
pub fn sample_smn_batch<T: Scalar>(items: &[SmnItem<T>], batch_size: usize, rng: &mut ChaCha8Rng) -> Result<SmnBatch<T>> {
    let mut by_type: Vec<Vec<usize>> = vec![Vec::new(); GarmentType::ALL.len()];
    for (i, it) in items.iter().enumerate() {
        by_type[it.garment_type.index()].push(i);
    }
    if let Some(t) = GarmentType::ALL
        .iter()
        .find(|t| by_type[t.index()].len() == 1)
    {
        return Err(Error::Invalid(format!("garment type {t} has a single item; distractor sampling needs two")));
    }
    if items.len() < 2 {
        return Err(Error::Invalid("SMN training needs at least two items".into()));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    order.truncate(batch_size.min(items.len()));
    let (mut p_i, mut x_i, mut p_j, mut c_i, mut c_j) = (vec![], vec![], vec![], vec![], vec![]);
    let (mut t_a, mut t_b) = (vec![], vec![]);
    for &i in &order {
        let it = &items[i];
        let same = &by_type[it.garment_type.index()];
        let j = loop {
            let j = same[rng.gen_range(0..same.len())];
            if j != i {
                break j;
            }
        };
        let others: Vec<GarmentType> = GarmentType::ALL
            .into_iter()
            .filter(|&t| t != it.garment_type)
            .collect();
        p_i.push(it.product.tensor());
        x_i.push(it.model.tensor());
        c_i.push(it.contour.tensor());
        p_j.push(items[j].product.tensor());
        c_j.push(items[j].contour.tensor());
        t_a.push(it.garment_type);
        t_b.push(others[rng.gen_range(0..others.len())]);
    }
    Ok(SmnBatch {
        p_i: batch(&p_i)?,
        x_i: batch(&x_i)?,
        p_j: batch(&p_j)?,
        c_i: batch(&c_i)?,
        c_j: batch(&c_j)?,
        t_a,
        t_b,
    })
}

pub struct SmnTrainer<T = f32> {
    pub config: SmnTrainConfig,
    pub net: ShapeMatchingNet<T>,
    pub adam: Adam<T>,
    pub step: u64,
    pub history: History,
}

impl<T: Scalar> SmnTrainer<T> {
    pub fn new(config: SmnTrainConfig, image_size: usize) -> Result<Self> {
        let net = ShapeMatchingNet::new(&config.smn, image_size, config.seed)?;
        let adam = Adam::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            &net.store,
        );
        Ok(Self {
            config,
            net,
            adam,
            step: 0,
            history: History::new(&SMN_HISTORY),
        })
    }

    /// One optimizer step; returns `[L_autoencoder, L_attention, L_map, total]`.
    pub fn train_step(&mut self, items: &[SmnItem<T>]) -> Result<[f64; 4]> {
        let mut rng = step_rng(self.config.seed, self.step);
        let b = sample_smn_batch(items, self.config.batch_size, &mut rng)?;
        let g = Graph::new();
        let p = self.net.store.bind(&g, true);
        let l = self.net.loss_vars(&g, &p, &b);
        let grads = g.backward(l.total);
        let gs = p.grads(&grads, &self.net.store);
        self.adam.update(&mut self.net.store, &gs);
        self.step += 1;
        let out = [l.autoencoder, l.attention, l.map, l.total].map(|v| to_f64(g.item(v)));
        self.history
            .push(vec![self.step as f64, out[0], out[1], out[2], out[3]]);
        Ok(out)
    }

    pub fn train(&mut self, items: &[SmnItem<T>], until: u64) -> Result<()> {
        while self.step < until {
            let l = self.train_step(items)?;
            if self.step.is_multiple_of(50) {
                log::info!("smn step {} total {:.4}", self.step, l[3]);
            }
        }
        Ok(())
    }

    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            kind: SMN_KIND.into(),
            code_version: CODE_VERSION.into(),
            step: self.step,
            config: serde_json::json!({"train": self.config, "image_size": self.net.image_size}),
            adam: None,
            history: self.history.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.meta(), &self.net.store, Some(&self.adam))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint::<T>(path, SMN_KIND)?;
        let config: SmnTrainConfig = serde_json::from_value(ck.meta.config["train"].clone())?;
        let size = ck.meta.config["image_size"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing image_size".into()))? as usize;
        let mut t = Self::new(config, size)?;
        t.net.store.load_named(&ck.params)?;
        if let Some(a) = ck.adam {
            t.adam = a;
        }
        t.step = ck.meta.step;
        t.history = ck.meta.history;
        Ok(t)
    }
}

/// Loads an SMN for inference; warns when the checkpoint is untrained.
pub fn load_smn<T: Scalar>(path: &Path) -> Result<(ShapeMatchingNet<T>, CheckpointMeta)> {
    let t = SmnTrainer::<T>::load(path)?;
    let meta = t.meta();
    if meta.is_untrained() {
        log::warn!("SMN checkpoint {} is untrained", path.display());
    }
    Ok((t.net, meta))
}
