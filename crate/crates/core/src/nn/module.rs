use super::tensor::{Real, Tensor};

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// One named slot of a module's state.
pub enum Entry<'a, T> {
    Param(&'a Param<T>),
    /// Non-trainable state that still belongs in checkpoints (batch-norm
    /// running statistics).
    Buffer(&'a Tensor<T>),
}

pub enum EntryMut<'a, T> {
    Param(&'a mut Param<T>),
    Buffer(&'a mut Tensor<T>),
}

/// Anything that owns named parameters. Paths are dot-separated and stable,
/// so they double as checkpoint keys and optimizer-state keys.
pub trait Module<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, e| {
            if let Entry::Param(p) = e {
                n += p.numel();
            }
        });
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, e| {
            if let EntryMut::Param(p) = e {
                p.zero_grad();
            }
        });
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |name, e| {
            if let Entry::Param(_) = e {
                names.push(name.to_string());
            }
        });
        names
    }
}

/// Joins a parent path and a child name.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Forward behaviour switch for layers with train/inference differences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
