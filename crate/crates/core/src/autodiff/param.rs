use rand::Rng;
use sha2::{Digest, Sha256};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    name: String,
    tensor: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            tensor: tensor.with_grad(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<T> {
        &mut self.tensor
    }
}

/// Anything that owns an ordered set of named parameters.
pub trait Module<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.tensor.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.tensor.numel());
        n
    }

    fn set_trainable(&mut self, on: bool) {
        self.visit_mut(&mut |p| p.tensor.set_requires_grad(on));
    }

    /// Add the gradients recorded on `tape` into each bound parameter.
    fn pull_grads(&mut self, tape: &Tape<T>) {
        self.visit_mut(&mut |p| {
            if let Some(g) = tape.param_grad(&p.name) {
                p.tensor.accumulate_grad(g);
            }
        });
    }

    /// SHA-256 over names, shapes and value bits; used to prove a module stayed frozen.
    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        self.visit(&mut |p| {
            h.update(p.name.as_bytes());
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.tensor.values() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        });
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn flat_values(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |p| out.extend_from_slice(p.tensor.values()));
        out
    }
}

/// Apply `f` to the scalar at a flat index across all parameters.
pub(crate) fn with_flat_entry<T: Scalar, M: Module<T> + ?Sized>(
    m: &mut M,
    index: usize,
    f: impl FnOnce(&mut T),
) {
    let mut offset = 0;
    let mut f = Some(f);
    m.visit_mut(&mut |p| {
        let n = p.tensor.numel();
        if index >= offset && index < offset + n {
            if let Some(f) = f.take() {
                f(&mut p.tensor.values_mut()[index - offset]);
            }
        }
        offset += n;
    });
}

/// A flat list of parameters; handy for tests and ad-hoc objectives.
#[derive(Clone, Debug, Default)]
pub struct ParamList<T>(pub Vec<Param<T>>);

impl<T: Scalar> Module<T> for ParamList<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.0.iter().for_each(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.0.iter_mut().for_each(f);
    }
}

pub(crate) fn uniform<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    bound: f64,
) -> Tensor<T> {
    Tensor::from_fn(rows, cols, |_, _| T::of(rng.random_range(-bound..=bound)))
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Linear<T> {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) initialisation for weights and bias.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        Self::with_bound(name, input, output, bias, bound, rng)
    }

    pub fn with_bound<R: Rng + ?Sized>(
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        bound: f64,
        rng: &mut R,
    ) -> Self {
        let weight = Param::new(format!("{name}.w"), uniform(rng, input, output, bound));
        let bias = bias.then(|| Param::new(format!("{name}.b"), uniform(rng, 1, output, bound)));
        Self { weight, bias }
    }

    /// Exact identity map (used for pass-through projections).
    pub fn identity(name: &str, width: usize) -> Self {
        Self {
            weight: Param::new(format!("{name}.w"), Tensor::identity(width)),
            bias: Some(Param::new(format!("{name}.b"), Tensor::zeros(1, width))),
        }
    }

    pub fn input_width(&self) -> usize {
        self.weight.tensor.rows()
    }

    pub fn output_width(&self) -> usize {
        self.weight.tensor.cols()
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let y = tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}
