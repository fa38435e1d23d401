//! Named learnable parameters and their per-pass tensor bindings.

use std::collections::HashMap;

use super::{DType, GradStore, Result, Tensor};
use crate::error::TensorError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Owns parameter values between passes. Values are rounded to the store's
/// dtype whenever they are written, so an f32 store round-trips through f32
/// files without loss.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::Argument(format!("duplicate parameter name {name}")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Shape {
                op: "param",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        let data = data.into_iter().map(|v| self.dtype.round(v)).collect();
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            data,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn set_data(&mut self, id: ParamId, data: Vec<f64>) -> Result<()> {
        let p = &mut self.params[id.0];
        if data.len() != p.data.len() {
            return Err(TensorError::Shape {
                op: "set_data",
                lhs: p.shape.clone(),
                rhs: vec![data.len()],
            });
        }
        let dtype = self.dtype;
        p.data = data.into_iter().map(|v| dtype.round(v)).collect();
        Ok(())
    }

    /// Applies `f` to every value of one parameter, then rounds.
    pub fn update(&mut self, id: ParamId, mut f: impl FnMut(usize, f64) -> f64) {
        let dtype = self.dtype;
        for (i, v) in self.params[id.0].data.iter_mut().enumerate() {
            *v = dtype.round(f(i, *v));
        }
    }

    /// Materialises every parameter as a tensor for one forward pass.
    pub fn bind(&self, track_grad: bool) -> Bound {
        let tensors = self
            .params
            .iter()
            .map(|p| {
                let t = Tensor::new(&p.shape, p.data.clone(), self.dtype)
                    .expect("parameters are finite");
                if track_grad {
                    t.requires_grad_()
                } else {
                    t
                }
            })
            .collect();
        Bound { tensors }
    }
}

/// Parameter tensors of one pass, indexed by [`ParamId`].
pub struct Bound {
    tensors: Vec<Tensor>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    /// Gradients for every parameter in store order (zeros where unreached).
    pub fn grads(&self, store: &GradStore) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| store.get_or_zeros(t)).collect()
    }
}
