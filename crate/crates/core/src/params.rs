//! Named, ordered parameter sets.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{ApnError, Result};
use crate::tape::{LeafKind, Tape, Var};
use crate::tensor::{DType, Tensor};

/// Ordered collection of named tensors. Slot order is insertion order and is
/// what checkpoints and gradient maps refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Parameter slots bound as leaves on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Use existing tape leaves as the parameters, in slot order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    #[inline]
    pub fn var(&self, slot: usize) -> Var {
        self.vars[slot]
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(ApnError::Usage(format!("duplicate parameter name {name}")));
        }
        let slot = self.tensors.len();
        self.index.insert(name.clone(), slot);
        self.names.push(name);
        self.tensors.push(t);
        Ok(slot)
    }

    /// Xavier-style Gaussian weight matrix `[fan_in, fan_out]`.
    pub fn weight<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        dtype: DType,
        rng: &mut R,
    ) -> Result<usize> {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        self.insert(name, Tensor::randn(&[fan_in, fan_out], std, dtype, rng)?)
    }

    pub fn filled(&mut self, name: &str, dims: &[usize], value: f64, dtype: DType) -> Result<usize> {
        self.insert(name, Tensor::full(dims, value, dtype)?)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.slot(name).map(|s| &self.tensors[s])
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Record every parameter on `tape`. With `trainable == false` the
    /// parameters enter as constants and receive no gradient.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Result<Bound> {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(slot, t)| {
                let kind = if trainable { LeafKind::Param(slot) } else { LeafKind::Const };
                if t.dtype() == tape.dtype() {
                    Ok(tape.leaf_trusted(t.clone(), kind))
                } else {
                    tape.leaf(t.to_dtype(tape.dtype()), kind)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    pub fn to_dtype(&self, dtype: DType) -> ParamSet {
        let mut out = self.clone();
        for t in &mut out.tensors {
            *t = t.to_dtype(dtype);
        }
        out
    }

    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bitwise_eq(b))
    }

    /// Replace values from `other`, which must hold the same names and dims.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        for (slot, name) in self.names.iter().enumerate() {
            let src = other
                .by_name(name)
                .ok_or_else(|| ApnError::Compat(format!("checkpoint is missing tensor `{name}`")))?;
            let dst = &mut self.tensors[slot];
            if src.dims() != dst.dims() {
                return Err(ApnError::Compat(format!(
                    "tensor `{name}` has dims {:?} in checkpoint but {:?} in model",
                    src.dims(),
                    dst.dims()
                )));
            }
            *dst = src.to_dtype(dst.dtype());
        }
        if let Some((extra, _)) = other.iter().find(|(n, _)| self.slot(n).is_none()) {
            return Err(ApnError::Compat(format!("checkpoint has unknown tensor `{extra}`")));
        }
        Ok(())
    }
}
