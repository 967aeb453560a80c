use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Named trainable tensors, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real = f32> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name `{name}`"
        );
        self.params.push(Param {
            name,
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
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

    /// Places every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Binding<'t, T> {
        Binding {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), true))
                .collect(),
        }
    }

    /// Places every parameter on `tape` as a constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Binding<'t, T> {
        Binding {
            vars: self
                .params
                .iter()
                .map(|p| tape.constant(p.value.clone()))
                .collect(),
        }
    }

    /// Adds the tape gradients of a binding into the parameter gradients.
    pub fn accumulate(&mut self, binding: &Binding<'_, T>) {
        for (p, v) in self.params.iter_mut().zip(&binding.vars) {
            if let Some(g) = v.grad() {
                add_grad(p, g.data());
            }
        }
    }

    /// Adds externally computed per-parameter gradients, in store order.
    pub fn accumulate_raw(&mut self, grads: &[Option<Vec<T>>]) {
        assert_eq!(grads.len(), self.params.len());
        for (p, g) in self.params.iter_mut().zip(grads) {
            if let Some(g) = g {
                add_grad(p, g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Gives every parameter the loss never reached an explicit zero gradient.
    pub fn fill_missing_grads(&mut self) {
        for p in &mut self.params {
            if p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
    }

    /// Replaces values from `(name, tensor)` pairs; every stored parameter
    /// must be present with an identical shape.
    pub fn load_values(&mut self, entries: &[(String, Tensor<f32>)]) -> Result<()> {
        if entries.len() != self.params.len() {
            return Err(TensorError::Config {
                op: "load",
                reason: format!(
                    "expected {} parameters, found {}",
                    self.params.len(),
                    entries.len()
                ),
            });
        }
        for (p, (name, t)) in self.params.iter().zip(entries) {
            if &p.name != name {
                return Err(TensorError::Config {
                    op: "load",
                    reason: format!("expected parameter `{}`, found `{name}`", p.name),
                });
            }
            if p.value.shape() != t.shape() {
                return Err(TensorError::Config {
                    op: "load",
                    reason: format!(
                        "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                        p.value.shape(),
                        t.shape()
                    ),
                });
            }
        }
        for (p, (_, t)) in self.params.iter_mut().zip(entries) {
            p.value = t.cast();
        }
        Ok(())
    }

    /// Values converted to `f32`, for checkpointing.
    pub fn export(&self) -> Vec<(String, Tensor<f32>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.cast()))
            .collect()
    }
}

fn add_grad<T: Real>(p: &mut Param<T>, g: &[T]) {
    match &mut p.grad {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g)
            .for_each(|(a, &v)| *a += v),
        None => {
            p.grad = Some(
                Tensor::new(p.value.shape(), g.to_vec()).expect("gradient matches parameter shape"),
            )
        }
    }
}

/// Parameters placed on one tape.
pub struct Binding<'t, T: Real> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Binding<'t, T> {
    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }

    /// Per-parameter tape gradients, in store order.
    pub fn grads(&self) -> Vec<Option<Vec<T>>> {
        self.vars
            .iter()
            .map(|v| v.grad().map(Tensor::into_data))
            .collect()
    }
}
