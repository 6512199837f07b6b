use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`]; binding a store to a fresh
/// graph makes `Var(i) == ParamId(i)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Whether AdamW applies decoupled weight decay to this tensor.
    pub decay: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, decay: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            tensor: tensor.with_grad(),
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Fresh graph whose first `len()` nodes are this store's tensors.
    pub fn bind(&self) -> Graph<'_, T> {
        let mut g = Graph::new();
        for p in &self.params {
            g.input(&p.tensor);
        }
        g
    }

    /// Moves leaf gradients into each tensor's grad slot (zeros when the
    /// loss did not reach a parameter).
    pub fn absorb(&mut self, mut grads: Gradients<T>) {
        for (i, p) in self.params.iter_mut().enumerate() {
            let g = grads
                .take(Var(i))
                .unwrap_or_else(|| vec![T::ZERO; p.tensor.len()]);
            p.tensor.grad = Some(g);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
    }

    /// Overwrites values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::Format(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    src.name,
                    src.tensor.shape(),
                    dst.name,
                    dst.tensor.shape()
                )));
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    decay: p.decay,
                })
                .collect(),
        }
    }
}

impl ParamId {
    pub fn var(self) -> Var {
        Var(self.0)
    }
}
