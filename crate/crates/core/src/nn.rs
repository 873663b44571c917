//! Parameter storage and the handful of layer types the networks are
//! assembled from.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of the normal initializer for conv/linear weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in insertion order.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor with the same-named tensor from `other`.
    /// Names and shapes must match exactly.
    pub fn load_from(&mut self, other: &BTreeMap<String, Tensor>) -> Result<()> {
        if other.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.tensors.len(),
                other.len()
            )));
        }
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = other
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?} does not match {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }
}

/// How a network forward pass binds its parameters and normalizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are reported for update.
    Train,
    /// Running statistics.
    Eval,
}

/// Per-forward binding of a [`ParamStore`] onto a tape.
pub struct Binding<'s> {
    store: &'s ParamStore,
    buffers: &'s ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
    pub mode: Mode,
    bn_updates: Vec<(BatchNorm, BatchStats)>,
}

impl<'s> Binding<'s> {
    pub fn new(store: &'s ParamStore, buffers: &'s ParamStore, trainable: bool, mode: Mode) -> Self {
        Binding {
            store,
            buffers,
            vars: vec![None; store.len()],
            trainable,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable {
            tape.param(t)
        } else {
            tape.constant(t)
        };
        self.vars[id.0] = Some(v);
        v
    }

    /// Tape variables of every parameter touched by the forward pass.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    pub fn into_bn_updates(self) -> Vec<(BatchNorm, BatchStats)> {
        self.bn_updates
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[cout, cin, kernel, kernel], INIT_STD, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Conv {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &mut Binding, x: Var) -> Var {
        let w = b.var(tape, self.weight);
        let bias = self.bias.map(|id| b.var(tape, id));
        tape.conv2d(x, w, bias, self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[cin, cout, kernel, kernel], INIT_STD, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        ConvTranspose {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &mut Binding, x: Var) -> Var {
        let w = b.var(tape, self.weight);
        let bias = self.bias.map(|id| b.var(tape, id));
        tape.conv_transpose2d(x, w, bias, self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, buffers: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: buffers.add(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: buffers.add(format!("{name}.running_var"), Tensor::ones(&[channels])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &mut Binding, x: Var) -> Var {
        let gamma = b.var(tape, self.gamma);
        let beta = b.var(tape, self.beta);
        match b.mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, gamma, beta);
                b.bn_updates.push((*self, stats));
                y
            }
            Mode::Eval => {
                let mean = b.buffers.get(self.running_mean).data();
                let var = b.buffers.get(self.running_var).data();
                tape.batch_norm_eval(x, gamma, beta, mean, var)
            }
        }
    }
}

/// Folds batch statistics into running averages:
/// `running = momentum * running + (1 - momentum) * batch`, using the
/// unbiased batch variance.
pub fn apply_bn_updates(buffers: &mut ParamStore, updates: &[(BatchNorm, BatchStats)], momentum: f64) {
    for (bn, stats) in updates {
        let unbias = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for (r, &m) in buffers.get_mut(bn.running_mean).data_mut().iter_mut().zip(&stats.mean) {
            *r = momentum * *r + (1.0 - momentum) * m;
        }
        for (r, &v) in buffers.get_mut(bn.running_var).data_mut().iter_mut().zip(&stats.var) {
            *r = momentum * *r + (1.0 - momentum) * v * unbias;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut R) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), Tensor::randn(&[out, inp], INIT_STD, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out])),
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, inp: usize, out: usize) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), Tensor::zeros(&[out, inp])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &mut Binding, x: Var) -> Var {
        let w = b.var(tape, self.weight);
        let bias = b.var(tape, self.bias);
        tape.linear(x, w, bias)
    }
}

/// Flattens `N x ...` to `N x rest`.
pub fn flatten(tape: &mut Tape, x: Var) -> Var {
    let s = tape.shape(x).to_vec();
    let rest = s[1..].iter().product();
    tape.reshape(x, &[s[0], rest])
}
