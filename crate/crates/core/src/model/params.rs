use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use shefu_tensor::{Real, Tape, Tensor, Var};

use crate::error::{Result, ShefuError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        tensor.set_requires_grad(true);
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| {
                    let mut c = t.cast::<U>();
                    c.set_requires_grad(true);
                    c
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// SHA-256 over names, shapes and values rounded to f32.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &e in t.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for &x in t.data() {
                h.update(x.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Replaces every tensor with the matching one from `other`, which must
    /// have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        if other.names != self.names {
            return Err(ShefuError::ArtifactMismatch("parameter names differ".into()));
        }
        for (name, (dst, src)) in self.names.iter().zip(self.tensors.iter_mut().zip(&other.tensors)) {
            if dst.shape() != src.shape() {
                return Err(ShefuError::ArtifactMismatch(format!(
                    "parameter {name}: shape {:?} != {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Registers parameters with deterministic initial values.
pub struct ParamBuilder<'r> {
    pub params: ParamSet<f32>,
    rng: &'r mut ChaCha8Rng,
}

impl<'r> ParamBuilder<'r> {
    pub fn new(rng: &'r mut ChaCha8Rng) -> Self {
        Self {
            params: ParamSet::new(),
            rng,
        }
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: Vec<usize>, std: f32) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0f32, std).expect("positive std");
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        self.params.add(name, Tensor::new(shape, data).expect("positive extents"))
    }

    pub fn uniform(&mut self, name: impl Into<String>, shape: Vec<usize>, bound: f32) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.params.add(name, Tensor::new(shape, data).expect("positive extents"))
    }

    pub fn filled(&mut self, name: impl Into<String>, shape: Vec<usize>, value: f32) -> ParamId {
        let n: usize = shape.iter().product();
        self.params.add(name, Tensor::new(shape, vec![value; n]).expect("positive extents"))
    }
}

/// Weight and bias of a fully-connected layer `x·W + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Weights and biases uniform in `±1/sqrt(fan_in)`. A nonzero bias
    /// matters here: a zero-filled input slot projects to the bias alone,
    /// and layer norm of a constant vector is badly conditioned.
    pub fn register(pb: &mut ParamBuilder<'_>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f32).sqrt();
        Self {
            w: pb.uniform(format!("{name}.w"), vec![fan_in, fan_out], bound),
            b: pb.uniform(format!("{name}.b"), vec![fan_out], bound),
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, '_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        Ok(g.tape.linear(x, w, b)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl Norm {
    pub fn register(pb: &mut ParamBuilder<'_>, name: &str, width: usize) -> Self {
        Self {
            gain: pb.filled(format!("{name}.g"), vec![width], 1.0),
            bias: pb.filled(format!("{name}.b"), vec![width], 0.0),
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, '_, T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        Ok(g.tape.layer_norm(x, gain, bias, T::lit(LN_EPS))?)
    }
}

/// A tape plus lazily bound parameters and the dropout stream of one
/// forward pass. Parameters only enter the tape when first used, so the
/// set of bound parameters is exactly the set the computation touched.
pub struct Graph<'t, 'p, T: Real> {
    pub tape: &'t mut Tape<'p, T>,
    params: Option<&'p ParamSet<T>>,
    bound: Vec<Option<Var>>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'t, 'p, T: Real> Graph<'t, 'p, T> {
    pub fn new(tape: &'t mut Tape<'p, T>, params: &'p ParamSet<T>) -> Self {
        Self {
            tape,
            params: Some(params),
            bound: vec![None; params.len()],
            dropout: None,
        }
    }

    /// Uses already-recorded leaves, one per parameter in registration
    /// order (gradient checks build their own leaves).
    pub fn prebound(tape: &'t mut Tape<'p, T>, vars: &[Var]) -> Self {
        Self {
            tape,
            params: None,
            bound: vars.iter().copied().map(Some).collect(),
            dropout: None,
        }
    }

    /// Enables inverted dropout with rate `p`.
    pub fn with_dropout(mut self, p: f64, rng: ChaCha8Rng) -> Self {
        if p > 0.0 {
            self.dropout = Some((p, rng));
        }
        self
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let params = self.params.expect("prebound graph is missing a parameter");
        let v = self.tape.leaf_ref(params.get(id));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound.get(id.0).copied().flatten()
    }

    /// Parameters that entered the tape.
    pub fn touched(&self) -> Vec<ParamId> {
        (0..self.bound.len())
            .filter(|&i| self.bound[i].is_some())
            .map(ParamId)
            .collect()
    }

    /// Constant input converted from f32.
    pub fn input(&mut self, shape: Vec<usize>, data: &[f32]) -> Result<Var> {
        let data = data.iter().map(|&x| T::from_f32(x).expect("f32 converts")).collect();
        Ok(self.tape.constant(Tensor::new(shape, data)?))
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((p, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = T::lit(1.0 / (1.0 - *p));
        let n = self.tape.value(x).numel();
        let p = *p;
        let factor = (0..n)
            .map(|_| if rng.gen_bool(p) { T::zero() } else { keep })
            .collect();
        Ok(self.tape.mul_const(x, factor)?)
    }

    /// Reverse sweep returning one gradient slot per parameter; untouched
    /// or unreachable parameters get `None`.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<Option<Tensor<T>>>> {
        let mut grads = self.tape.backward(loss)?;
        Ok(self.bound.iter().map(|v| v.and_then(|v| grads.take(v))).collect())
    }
}
