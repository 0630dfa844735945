//! Parameter storage and the small set of layers the network is built from.

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::ops::{batch_norm_eval, batch_norm_train, conv2d, Conv2dOpts};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// Forward-pass mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    pub training: bool,
    /// Use running statistics in batch norm even while training.
    pub freeze_bn: bool,
}

impl Mode {
    pub const EVAL: Mode = Mode { training: false, freeze_bn: false };
    pub const TRAIN: Mode = Mode { training: true, freeze_bn: false };
}

/// Named trainable parameters (as gradient-accumulating leaves) and
/// non-trainable buffers such as batch-norm running statistics.
pub struct ParamStore<T: Scalar> {
    params: Vec<(String, Var<T>)>,
    buffers: Vec<(String, RefCell<Tensor<T>>)>,
    param_index: BTreeMap<String, usize>,
    buffer_index: BTreeMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), buffers: Vec::new(), param_index: BTreeMap::new(), buffer_index: BTreeMap::new() }
    }

    /// Root scope for registering parameters, with a seeded initializer.
    pub fn root(&mut self, seed: u64) -> Scope<'_, T> {
        Scope { store: self, prefix: String::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn add_param(&mut self, name: String, value: Tensor<T>) -> ParamId {
        assert!(!self.param_index.contains_key(&name), "duplicate parameter {name}");
        self.param_index.insert(name.clone(), self.params.len());
        self.params.push((name, Var::leaf(value)));
        ParamId(self.params.len() - 1)
    }

    fn add_buffer(&mut self, name: String, value: Tensor<T>) -> BufferId {
        assert!(!self.buffer_index.contains_key(&name), "duplicate buffer {name}");
        self.buffer_index.insert(name.clone(), self.buffers.len());
        self.buffers.push((name, RefCell::new(value)));
        BufferId(self.buffers.len() - 1)
    }

    pub fn var(&self, id: ParamId) -> Var<T> {
        self.params[id.0].1.clone()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        self.params[id.0].1.value()
    }

    pub fn buffer(&self, id: BufferId) -> Ref<'_, Tensor<T>> {
        self.buffers[id.0].1.borrow()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, v)| v.value().numel()).sum()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn buffer_names(&self) -> impl Iterator<Item = &str> {
        self.buffers.iter().map(|(n, _)| n.as_str())
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Var<T>)> {
        self.params.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Var<T>)> {
        self.params.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, Ref<'_, Tensor<T>>)> {
        self.buffers.iter().map(|(n, b)| (n.as_str(), b.borrow()))
    }

    /// Parameter value by canonical name.
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.param_index.get(name).map(|&i| self.params[i].1.value())
    }

    pub fn get_buffer(&self, name: &str) -> Option<Ref<'_, Tensor<T>>> {
        self.buffer_index.get(name).map(|&i| self.buffers[i].1.borrow())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.param_index.get(name).map(|&i| ParamId(i))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.param_index.contains_key(name) || self.buffer_index.contains_key(name)
    }

    /// Shape of a parameter or buffer.
    pub fn shape_of(&self, name: &str) -> Option<Vec<usize>> {
        if let Some(&i) = self.param_index.get(name) {
            return Some(self.params[i].1.shape().to_vec());
        }
        self.buffer_index.get(name).map(|&i| self.buffers[i].1.borrow().shape().to_vec())
    }

    /// Overwrites a parameter or buffer; the shape must match exactly.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let expected = self.shape_of(name).ok_or_else(|| Error::Parameter {
            name: name.to_string(),
            reason: "unknown parameter".into(),
        })?;
        if expected != value.shape() {
            return Err(Error::Parameter {
                name: name.to_string(),
                reason: format!("shape {:?} does not match expected {:?}", value.shape(), expected),
            });
        }
        if let Some(&i) = self.param_index.get(name) {
            *self.params[i].1.leaf_value_mut() = value;
        } else {
            *self.buffers[self.buffer_index[name]].1.borrow_mut() = value;
        }
        Ok(())
    }

    pub fn set_param(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(self.params[id.0].1.shape(), value.shape());
        *self.params[id.0].1.leaf_value_mut() = value;
    }

    pub fn zero_grads(&self) {
        for (_, v) in &self.params {
            v.zero_grad();
        }
    }

    fn update_running(&self, mean: BufferId, var: BufferId, batch_mean: &[T], batch_var: &[T]) {
        let m: T = cast(BN_MOMENTUM);
        for (buf, batch) in [(mean, batch_mean), (var, batch_var)] {
            let mut b = self.buffers[buf.0].1.borrow_mut();
            for (r, &v) in b.data_mut().iter_mut().zip(batch) {
                *r = (T::one() - m) * *r + m * v;
            }
        }
    }
}

/// Parameter initialization rule.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// He-normal with `std = sqrt(2 / fan_in)`.
    KaimingFanIn,
    Normal(f64),
    Zeros,
}

/// Registration cursor: a dotted name prefix plus the initializer RNG.
pub struct Scope<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    prefix: String,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> Scope<'a, T> {
    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Child scope `prefix.name`, seeded from this scope's stream.
    pub fn sub(&mut self, name: &str) -> Scope<'_, T> {
        let prefix = self.full_name(name);
        let seed = {
            use rand::Rng;
            self.rng.random::<u64>()
        };
        Scope { store: self.store, prefix, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init, fan_in: usize) -> ParamId {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Normal(std) => Tensor::randn(shape, std, &mut self.rng),
            Init::KaimingFanIn => Tensor::randn(shape, (2.0 / fan_in.max(1) as f64).sqrt(), &mut self.rng),
        };
        let full = self.full_name(name);
        self.store.add_param(full, value)
    }

    pub fn constant_param(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let full = self.full_name(name);
        self.store.add_param(full, value)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> BufferId {
        let full = self.full_name(name);
        self.store.add_buffer(full, value)
    }
}

/// Forward context: parameter store plus mode.
#[derive(Clone, Copy)]
pub struct Ctx<'a, T: Scalar> {
    pub store: &'a ParamStore<T>,
    pub mode: Mode,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode) -> Self {
        Self { store, mode }
    }

    pub fn p(&self, id: ParamId) -> Var<T> {
        self.store.var(id)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub opts: Conv2dOpts,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        s: &mut Scope<'_, T>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        opts: Conv2dOpts,
        bias: bool,
        init: Init,
    ) -> Self {
        let fan_in = in_channels / opts.groups * kernel * kernel;
        let weight = s.param("weight", &[out_channels, in_channels / opts.groups, kernel, kernel], init, fan_in);
        let bias = bias.then(|| s.param("bias", &[out_channels], Init::Zeros, 0));
        Self { weight, bias, opts, in_channels, out_channels, kernel }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Var<T> {
        let b = self.bias.map(|b| ctx.p(b));
        conv2d(x, &ctx.p(self.weight), b.as_ref(), self.opts)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(s: &mut Scope<'_, T>, channels: usize) -> Self {
        Self {
            gamma: s.constant_param("weight", Tensor::ones(&[channels])),
            beta: s.constant_param("bias", Tensor::zeros(&[channels])),
            running_mean: s.buffer("running_mean", Tensor::zeros(&[channels])),
            running_var: s.buffer("running_var", Tensor::ones(&[channels])),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Var<T> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        let eps: T = cast(BN_EPS);
        if ctx.mode.training && !ctx.mode.freeze_bn {
            let (y, moments) = batch_norm_train(x, &g, &b, eps);
            ctx.store.update_running(self.running_mean, self.running_var, &moments.mean, &moments.var_unbiased);
            y
        } else {
            let mean = ctx.store.buffer(self.running_mean);
            let var = ctx.store.buffer(self.running_var);
            batch_norm_eval(x, &g, &b, &mean, &var, eps)
        }
    }
}

/// Conv-BN-ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new<T: Scalar>(s: &mut Scope<'_, T>, in_channels: usize, out_channels: usize, kernel: usize, opts: Conv2dOpts) -> Self {
        let conv = Conv2d::new(&mut s.sub("conv"), in_channels, out_channels, kernel, opts, false, Init::KaimingFanIn);
        let bn = BatchNorm2d::new(&mut s.sub("bn"), out_channels);
        Self { conv, bn }
    }

    /// Same-padding stride-1 variant.
    pub fn same<T: Scalar>(s: &mut Scope<'_, T>, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self::new(s, in_channels, out_channels, kernel, Conv2dOpts::same(kernel))
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Var<T> {
        self.bn.forward(ctx, &self.conv.forward(ctx, x)).relu()
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }
}
