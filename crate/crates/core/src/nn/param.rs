use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    /// Trained by the optimizer.
    Param,
    /// State updated by the forward pass (batch-norm running statistics).
    Buffer,
}

/// A named storage location for a model tensor.
///
/// Tensors are immutable, so updating a parameter swaps in a fresh leaf.
pub struct Slot<E: Element> {
    value: RefCell<Tensor<E>>,
    kind: SlotKind,
}

impl<E: Element> Slot<E> {
    pub fn param(shape: &[usize], data: Vec<E>) -> Self {
        Slot {
            value: RefCell::new(Tensor::leaf(shape.to_vec(), data, true)),
            kind: SlotKind::Param,
        }
    }

    pub fn buffer(shape: &[usize], data: Vec<E>) -> Self {
        Slot {
            value: RefCell::new(Tensor::leaf(shape.to_vec(), data, false)),
            kind: SlotKind::Buffer,
        }
    }

    pub fn kind(&self) -> SlotKind {
        self.kind
    }

    pub fn get(&self) -> Tensor<E> {
        self.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.borrow().shape().to_vec()
    }

    /// Replaces the stored values; the shape must not change.
    pub fn set_data(&self, data: Vec<E>) -> Result<()> {
        let shape = self.shape();
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::dim(format!(
                "slot of shape {shape:?} cannot take {} values",
                data.len()
            )));
        }
        let fresh = Tensor::leaf(shape, data, self.kind == SlotKind::Param);
        *self.value.borrow_mut() = fresh;
        Ok(())
    }
}

/// Anything that owns slots, listed in a fixed order under dotted names.
pub trait Parameterized<E: Element> {
    fn collect_slots<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Slot<E>)>);

    fn slots(&self) -> Vec<(String, &Slot<E>)> {
        let mut out = Vec::new();
        self.collect_slots("", &mut out);
        out
    }

    fn params(&self) -> Vec<(String, &Slot<E>)> {
        self.slots()
            .into_iter()
            .filter(|(_, s)| s.kind() == SlotKind::Param)
            .collect()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
