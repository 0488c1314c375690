//! Parameter storage and the handful of layers the networks are built from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Gradients, Graph, Var};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Replaces values from `(name, tensor)` pairs; every parameter must be
    /// present with its current shape.
    pub fn load_named(&mut self, entries: &[(String, Tensor<T>)]) -> Result<(), crate::TensorError> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let (_, t) = entries
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| crate::TensorError::Missing(name.clone()))?;
            if t.shape() != slot.shape() {
                return Err(crate::TensorError::Shape {
                    expected: slot.shape().to_vec(),
                    got: t.shape().to_vec(),
                });
            }
            *slot = t.clone();
        }
        Ok(())
    }

    /// Puts every parameter on `g` as a leaf.
    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect(),
        }
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients of every bound parameter, zeros where none flowed.
    pub fn grads<T: Scalar>(&self, grads: &Gradients<T>, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .zip(store.tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
            .collect()
    }
}

fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| lit(rng.gen_range(-bound..bound)))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// `k×k` convolution with "same" padding, He-uniform init.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let w = store.add(format!("{name}.w"), uniform(&[cout, cin, k, k], (6.0 / fan_in).sqrt(), rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, cout, 1, 1]));
        Self {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Var {
        let y = g.conv2d(x, p.var(self.w), self.stride, self.pad);
        g.add(y, p.var(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / din as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(&[din, dout], bound, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, dout]));
        Self { w, b }
    }

    /// Zero weights and a fixed bias: the layer starts out emitting `bias`.
    pub fn with_constant_output<T: Scalar>(store: &mut ParamStore<T>, name: &str, din: usize, bias: &[T]) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[din, bias.len()]));
        let b = store.add(
            format!("{name}.b"),
            Tensor::from_vec(&[1, bias.len()], bias.to_vec()).expect("bias shape"),
        );
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p.var(self.w));
        g.add(y, p.var(self.b))
    }
}
