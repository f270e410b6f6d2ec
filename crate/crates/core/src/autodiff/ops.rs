//! Thin, typed wrappers over [`Tape::apply`].

use super::tape::{Primitive, Tape, Var};
use crate::error::Result;

impl Tape<'_> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        self.apply(
            Primitive::Matmul {
                transpose_lhs: ta,
                transpose_rhs: tb,
            },
            &[a, b],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::ElementwiseMul, &[a, b])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::ConcatLastAxis, parts)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Softplus, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn softmax_masked(&mut self, x: Var, valid: Option<Vec<bool>>) -> Result<Var> {
        self.apply(Primitive::SoftmaxLastAxisMasked { valid }, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.apply(Primitive::LayerNormLastAxis, &[x, gamma, beta])
    }

    pub fn embedding(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::EmbeddingLookup { ids }, &[table])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::MeanOverAxis { axis }, &[x])
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.apply(Primitive::ScalarAffine { scale, shift }, &[x])
    }

    pub fn bce(&mut self, p: Var, targets: Vec<f64>, mask: Vec<bool>) -> Result<Var> {
        self.apply(Primitive::BceLossMasked { targets, mask }, &[p])
    }

    /// Sum of all elements, as a composition of means.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mut v = x;
        for axis in 0..shape.len() {
            v = self.mean_axis(v, axis)?;
        }
        self.affine(v, n as f64, 0.0)
    }
}
