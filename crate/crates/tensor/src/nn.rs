//! Parameters and the layer building blocks shared by every network module.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::kernels::conv::{conv2d_macs, conv2d_out_shape, Conv2dOpts};
use crate::{Scalar, Tensor};

static NEXT_PARAM: AtomicUsize = AtomicUsize::new(1);

struct ParamInner<T> {
    id: usize,
    name: String,
    trainable: bool,
    value: RwLock<Arc<Tensor<T>>>,
}

/// Named, shared tensor. Non-trainable params hold buffers such as
/// batch-norm running statistics.
#[derive(Clone)]
pub struct Param<T>(Arc<ParamInner<T>>);

impl<T> std::fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({})", self.0.name)
    }
}

impl<T: Scalar> Param<T> {
    fn new(name: String, value: Tensor<T>, trainable: bool) -> Self {
        Param(Arc::new(ParamInner {
            id: NEXT_PARAM.fetch_add(1, Ordering::Relaxed),
            name,
            trainable,
            value: RwLock::new(Arc::new(value)),
        }))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn trainable(&self) -> bool {
        self.0.trainable
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.0.value.read().expect("param lock poisoned").clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    /// Replaces the value; the shape must not change.
    pub fn set(&self, t: Tensor<T>) {
        let mut guard = self.0.value.write().expect("param lock poisoned");
        assert_eq!(guard.shape(), t.shape(), "param {} shape change", self.0.name);
        *guard = Arc::new(t);
    }

    /// In-place update through `f`.
    pub fn update(&self, f: impl FnOnce(&mut Tensor<T>)) {
        let mut guard = self.0.value.write().expect("param lock poisoned");
        f(Arc::make_mut(&mut guard));
    }

    /// Graph leaf for this parameter.
    pub fn var(&self) -> Var<T> {
        Var::param_leaf(self.value(), self.0.id, self.0.trainable)
    }
}

/// Registration-ordered collection of every parameter in a model.
#[derive(Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter().filter(|p| p.trainable())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name() == name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Appends every parameter of `other`, keeping its order.
    pub fn absorb(&mut self, other: ParamStore<T>) {
        self.params.extend(other.params);
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|p| p.numel()).sum()
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform {
        fan_in: usize,
    },
    /// Truncated-free normal with the given standard deviation.
    Normal {
        std: f64,
    },
    Const(f64),
}

/// Creates parameters under a dotted name prefix.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    /// Child builder under `prefix.name`.
    pub fn pp(&mut self, name: impl std::fmt::Display) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        ParamBuilder { store: self.store, rng: self.rng, prefix }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    fn sample(&mut self, shape: &[usize], init: Init) -> Tensor<T> {
        match init {
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                Tensor::rand_uniform(shape, -bound, bound, self.rng)
            }
            Init::Normal { std } => {
                let rng = &mut *self.rng;
                Tensor::from_fn(shape, |_| {
                    // Box-Muller
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    T::cast_f64(std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos())
                })
            }
            Init::Const(v) => Tensor::full(shape, T::cast_f64(v)),
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Param<T> {
        let value = self.sample(shape, init);
        let p = Param::new(self.full_name(name), value, true);
        self.store.params.push(p.clone());
        p
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> Param<T> {
        let p = Param::new(self.full_name(name), value, false);
        self.store.params.push(p.clone());
        p
    }
}

/// Forward-pass mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ctx {
    /// Batch statistics in batch norm (and running-stat updates) when true.
    pub train: bool,
}

impl Ctx {
    pub fn train() -> Self {
        Self { train: true }
    }

    pub fn eval() -> Self {
        Self { train: false }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub opts: Conv2dOpts,
}

/// Convolution geometry: `(in, out, kernel)` plus options.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub opts: Conv2dOpts,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride-1 convolution with "same" padding and a bias.
    pub fn same(cin: usize, cout: usize, kernel: usize) -> Self {
        Self { cin, cout, kernel, opts: Conv2dOpts::padded(kernel / 2), bias: true }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.opts.stride = s;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.opts.dilation = d;
        self.opts.padding = d * (self.kernel / 2);
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.opts.groups = g;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.opts.padding = p;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.cout, self.cin / self.opts.groups, self.kernel, self.kernel]
    }
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(b: &mut ParamBuilder<'_, T>, spec: ConvSpec) -> Self {
        let ws = spec.weight_shape();
        let fan_in = ws[1] * ws[2] * ws[3];
        let weight = b.param("weight", &ws, Init::Uniform { fan_in });
        let bias = spec.bias.then(|| b.param("bias", &[spec.cout], Init::Uniform { fan_in }));
        Self { weight, bias, opts: spec.opts }
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        let w = self.weight.var();
        let b = self.bias.as_ref().map(|b| b.var());
        x.conv2d(&w, b.as_ref(), self.opts)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `(out_h, out_w, macs)` for a single image of `cin x h x w`.
    pub fn complexity(&self, h: usize, w: usize) -> (usize, usize, u64) {
        let ws = self.weight.shape();
        let xs = [1, ws[1] * self.opts.groups, h, w];
        let out = conv2d_out_shape(&xs, &ws, self.opts);
        (out[2], out[3], conv2d_macs(&xs, &ws, self.opts))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(b: &mut ParamBuilder<'_, T>, c: usize) -> Self {
        Self {
            weight: b.param("weight", &[c], Init::Const(1.0)),
            bias: b.param("bias", &[c], Init::Const(0.0)),
            running_mean: b.buffer("running_mean", Tensor::zeros(&[c])),
            running_var: b.buffer("running_var", Tensor::ones(&[c])),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, x: &Var<T>, ctx: Ctx) -> Var<T> {
        let eps = T::cast_f64(self.eps);
        let (g, b) = (self.weight.var(), self.bias.var());
        if ctx.train {
            let (n, _, h, w) = x.dims4();
            let (y, mean, var) = x.batch_norm_train(&g, &b, eps);
            let cnt = (n * h * w) as f64;
            let unbias = if cnt > 1.0 { cnt / (cnt - 1.0) } else { 1.0 };
            let m = T::cast_f64(self.momentum);
            let keep = T::one() - m;
            self.running_mean.update(|rm| {
                for (r, &bm) in rm.data_mut().iter_mut().zip(&mean) {
                    *r = keep * *r + m * bm;
                }
            });
            let unbias = T::cast_f64(unbias);
            self.running_var.update(|rv| {
                for (r, &bv) in rv.data_mut().iter_mut().zip(&var) {
                    *r = keep * *r + m * bv * unbias;
                }
            });
            y
        } else {
            let rm = self.running_mean.value();
            let rv = self.running_var.value();
            x.batch_norm_eval(&g, &b, rm.data(), rv.data(), eps)
        }
    }
}

/// Convolution, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct Cbr<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Scalar> Cbr<T> {
    /// The conv bias is dropped since batch norm absorbs it.
    pub fn new(b: &mut ParamBuilder<'_, T>, spec: ConvSpec) -> Self {
        Self { conv: Conv2d::new(&mut b.pp("conv"), spec.no_bias()), bn: BatchNorm2d::new(&mut b.pp("bn"), spec.cout) }
    }

    pub fn forward(&self, x: &Var<T>, ctx: Ctx) -> Var<T> {
        self.bn.forward(&self.conv.forward(x), ctx).relu()
    }

    pub fn complexity(&self, h: usize, w: usize) -> (usize, usize, u64) {
        self.conv.complexity(h, w)
    }
}

/// Depthwise `k x k` convolution followed by a pointwise `1 x 1` mixer.
#[derive(Clone, Debug)]
pub struct DwSeparable<T> {
    pub depthwise: Conv2d<T>,
    pub pointwise: Conv2d<T>,
}

impl<T: Scalar> DwSeparable<T> {
    pub fn new(b: &mut ParamBuilder<'_, T>, cin: usize, cout: usize, kernel: usize) -> Self {
        Self {
            depthwise: Conv2d::new(&mut b.pp("dw"), ConvSpec::same(cin, cin, kernel).groups(cin)),
            pointwise: Conv2d::new(&mut b.pp("pw"), ConvSpec::same(cin, cout, 1)),
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        self.pointwise.forward(&self.depthwise.forward(x))
    }

    pub fn complexity(&self, h: usize, w: usize) -> (usize, usize, u64) {
        let (h1, w1, a) = self.depthwise.complexity(h, w);
        let (h2, w2, b) = self.pointwise.complexity(h1, w1);
        (h2, w2, a + b)
    }
}

/// Squeeze-and-excitation channel gate with reduction 4 and a hidden width
/// of at least 4.
#[derive(Clone, Debug)]
pub struct SqueezeExcite<T> {
    pub fc1: Conv2d<T>,
    pub fc2: Conv2d<T>,
}

pub fn se_hidden(c: usize) -> usize {
    (c / 4).max(4)
}

impl<T: Scalar> SqueezeExcite<T> {
    pub fn new(b: &mut ParamBuilder<'_, T>, c: usize) -> Self {
        let hidden = se_hidden(c);
        Self {
            fc1: Conv2d::new(&mut b.pp("fc1"), ConvSpec::same(c, hidden, 1)),
            fc2: Conv2d::new(&mut b.pp("fc2"), ConvSpec::same(hidden, c, 1)),
        }
    }

    /// Per-channel gate in `(0, 1)`, shape `[N, C, 1, 1]`.
    pub fn gate(&self, x: &Var<T>) -> Var<T> {
        self.fc2.forward(&self.fc1.forward(&x.global_avg_pool()).relu()).sigmoid()
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        x.mul(&self.gate(x))
    }

    pub fn complexity(&self) -> u64 {
        self.fc1.complexity(1, 1).2 + self.fc2.complexity(1, 1).2
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(b: &mut ParamBuilder<'_, T>, fin: usize, fout: usize, bias: bool) -> Self {
        Self {
            weight: b.param("weight", &[fout, fin], Init::Uniform { fan_in: fin }),
            bias: bias.then(|| b.param("bias", &[fout], Init::Uniform { fan_in: fin })),
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        let b = self.bias.as_ref().map(|b| b.var());
        x.linear(&self.weight.var(), b.as_ref())
    }

    pub fn macs(&self, rows: usize) -> u64 {
        let s = self.weight.shape();
        (rows * s[0] * s[1]) as u64
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(b: &mut ParamBuilder<'_, T>, c: usize, eps: f64) -> Self {
        Self { weight: b.param("weight", &[c], Init::Const(1.0)), bias: b.param("bias", &[c], Init::Const(0.0)), eps }
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        x.layer_norm(&self.weight.var(), &self.bias.var(), T::cast_f64(self.eps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn builder_prefixes_names() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let _ = Cbr::new(&mut b.pp("enc").pp(3), ConvSpec::same(4, 8, 3));
        let names: Vec<_> = store.iter().map(|p| p.name().to_string()).collect();
        assert_eq!(
            names,
            ["enc.3.conv.weight", "enc.3.bn.weight", "enc.3.bn.bias", "enc.3.bn.running_mean", "enc.3.bn.running_var"]
        );
        assert_eq!(store.num_trainable(), 8 * 4 * 9 + 16);
    }

    #[test]
    fn dw_separable_param_count_closed_form() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let _ = DwSeparable::new(&mut ParamBuilder::new(&mut store, &mut rng), 32, 32, 7);
        assert_eq!(store.num_trainable(), 7 * 7 * 32 + 32 * 32 + 32 + 32);
    }

    #[test]
    fn batch_norm_updates_running_stats_in_train_mode() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bn = BatchNorm2d::new(&mut ParamBuilder::new(&mut store, &mut rng), 1);
        let x = Var::constant(Tensor::from_vec(&[2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let y = bn.forward(&x, Ctx::train());
        assert!(y.value().mean().abs() < 1e-12);
        // mean 4, unbiased var 20/3
        assert!((bn.running_mean.value().data()[0] - 0.4).abs() < 1e-12);
        assert!((bn.running_var.value().data()[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
    }
}
