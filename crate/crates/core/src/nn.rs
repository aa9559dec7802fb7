//! Parameterised building blocks recorded onto a [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Scaled { gain: f64 },
    Normal { std: f64 },
}

pub fn init_tensor<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, init: Init, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let std = match init {
        Init::Zeros => return Tensor::zeros(shape),
        Init::Ones => return Tensor::full(shape, T::one()),
        Init::Scaled { gain } => gain / (fan_in.max(1) as f64).sqrt(),
        Init::Normal { std } => std,
    };
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..n).map(|_| T::from_f64c(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("shape")
}

/// Row-wise affine map `x W + b`, weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), init_tensor(&[d_in, d_out], d_in, init, rng));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => y,
        }
    }
}

/// Square-kernel convolution on a channel-last map.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        ksize: usize,
        stride: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = ksize * ksize * c_in;
        let w = store.add(format!("{name}.weight"), init_tensor(&[fan_in, c_out], fan_in, init, rng));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Self { w, b, ksize, stride, pad: ksize / 2 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.conv2d(x, w, self.ksize, self.stride, self.pad);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[width], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[width]));
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, ga, be)
    }
}

/// Two linear layers with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        out_init: Init,
        rng: &mut R,
    ) -> Self {
        let fc1 = Linear::new(store, &format!("{name}.fc1"), d_in, d_hidden, true, Init::Scaled { gain: 2f64.sqrt() }, rng);
        let fc2 = Linear::new(store, &format!("{name}.fc2"), d_hidden, d_out, true, out_init, rng);
        Self { fc1, fc2 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.relu(h);
        self.fc2.forward(g, h)
    }
}
