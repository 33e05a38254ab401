//! Projection MLP trained on top of frozen backbone embeddings.
//!
//! ```text
//! Linear(D, 256)   + BatchNorm + ReLU
//! Linear(256, 128) + BatchNorm + ReLU
//! Linear(128, 128) + BatchNorm + ReLU
//! Linear(128, 64)
//! ```
//!
//! Backpropagation is written out by hand for this fixed architecture,
//! including the batch-statistics path of the normalization layers.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::seed;

pub const HIDDEN: [usize; 3] = [256, 128, 128];
pub const OUTPUT_DIM: usize = 64;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Fully connected layer, `y = x Wᵀ + b` with `W` shaped `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    /// Weights uniform in `±1/sqrt(fan_in)`, zero bias.
    pub fn init(input: usize, output: usize, rng: &mut seed::Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((output, input), || T::of(rng.random_range(-bound..bound)));
        Self { weight, bias: Array1::zeros(output) }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Returns `(dW, db, dx)` given the layer input and upstream gradient.
    pub fn backward(&self, x: ArrayView2<T>, dy: ArrayView2<T>) -> (Array2<T>, Array1<T>, Array2<T>) {
        let dw = dy.t().dot(&x);
        let db = dy.sum_axis(Axis(0));
        let dx = dy.dot(&self.weight);
        (dw, db, dx)
    }

    pub fn cast<U: Real>(&self) -> Linear<U> {
        Linear { weight: self.weight.mapv(cast), bias: self.bias.mapv(cast) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
}

impl<T: Real> BatchNorm<T> {
    fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }

    fn eval(&self, z: ArrayView2<T>) -> Array2<T> {
        let eps = T::of(BN_EPS);
        let scale = Zip::from(&self.gamma)
            .and(&self.running_var)
            .map_collect(|&g, &v| g / (v + eps).sqrt());
        let shift = Zip::from(&self.beta)
            .and(&self.running_mean)
            .and(&scale)
            .map_collect(|&b, &m, &s| b - m * s);
        let mut y = z.to_owned();
        y *= &scale;
        y += &shift;
        y
    }

    fn cast<U: Real>(&self) -> BatchNorm<U> {
        BatchNorm {
            gamma: self.gamma.mapv(cast),
            beta: self.beta.mapv(cast),
            running_mean: self.running_mean.mapv(cast),
            running_var: self.running_var.mapv(cast),
        }
    }
}

fn cast<T: Real, U: Real>(x: T) -> U {
    U::of(x.to_f64().expect("finite"))
}

#[derive(Debug, Clone)]
struct HiddenCache<T> {
    input: Array2<T>,
    xhat: Array2<T>,
    inv_std: Array1<T>,
    pre_relu: Array2<T>,
}

#[derive(Debug, Clone)]
struct Cache<T> {
    hidden: Vec<HiddenCache<T>>,
    last_input: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct ProjectionHead<T> {
    pub linears: Vec<Linear<T>>,
    pub norms: Vec<BatchNorm<T>>,
    mode: Mode,
    cache: Option<Cache<T>>,
}

impl<T: Real> PartialEq for ProjectionHead<T> {
    fn eq(&self, other: &Self) -> bool {
        self.linears == other.linears && self.norms == other.norms && self.mode == other.mode
    }
}

/// Number of trainable scalars in a head with input width `input_dim`.
pub fn parameter_count(input_dim: usize) -> usize {
    let widths = [input_dim, HIDDEN[0], HIDDEN[1], HIDDEN[2], OUTPUT_DIM];
    let affine: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    let norm: usize = HIDDEN.iter().map(|h| 2 * h).sum();
    affine + norm
}

impl<T: Real> ProjectionHead<T> {
    pub fn init(input_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Config("head input dimension must be >= 1".into()));
        }
        let mut rng = seed::rng(seed);
        let widths = [input_dim, HIDDEN[0], HIDDEN[1], HIDDEN[2], OUTPUT_DIM];
        let linears = widths.windows(2).map(|w| Linear::init(w[0], w[1], &mut rng)).collect();
        let norms = HIDDEN.iter().map(|&h| BatchNorm::new(h)).collect();
        Ok(Self { linears, norms, mode: Mode::Train, cache: None })
    }

    pub fn input_dim(&self) -> usize {
        self.linears[0].weight.ncols()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        self.cache = None;
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Trainable tensors in canonical order: per hidden layer
    /// `W, b, gamma, beta`, then the output layer `W, b`.
    pub fn params(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(14);
        for (lin, bn) in self.linears.iter().zip(&self.norms) {
            out.push(lin.weight.as_slice().unwrap());
            out.push(lin.bias.as_slice().unwrap());
            out.push(bn.gamma.as_slice().unwrap());
            out.push(bn.beta.as_slice().unwrap());
        }
        let last = &self.linears[3];
        out.push(last.weight.as_slice().unwrap());
        out.push(last.bias.as_slice().unwrap());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let (hidden, last) = self.linears.split_at_mut(3);
        let mut out = Vec::with_capacity(14);
        for (lin, bn) in hidden.iter_mut().zip(self.norms.iter_mut()) {
            out.push(lin.weight.as_slice_mut().unwrap());
            out.push(lin.bias.as_slice_mut().unwrap());
            out.push(bn.gamma.as_slice_mut().unwrap());
            out.push(bn.beta.as_slice_mut().unwrap());
        }
        out.push(last[0].weight.as_slice_mut().unwrap());
        out.push(last[0].bias.as_slice_mut().unwrap());
        out
    }

    /// Running statistics, `mean, var` per normalization layer.
    pub fn buffers(&self) -> Vec<&[T]> {
        self.norms
            .iter()
            .flat_map(|bn| [bn.running_mean.as_slice().unwrap(), bn.running_var.as_slice().unwrap()])
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        self.norms
            .iter_mut()
            .flat_map(|bn| [bn.running_mean.as_slice_mut().unwrap(), bn.running_var.as_slice_mut().unwrap()])
            .collect()
    }

    fn check_input(&self, x: &ArrayView2<T>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "head expects {} input columns, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Forward pass in the current mode. TRAIN mode uses batch statistics,
    /// updates running statistics and caches activations for [`backward`].
    ///
    /// [`backward`]: ProjectionHead::backward
    pub fn forward(&mut self, x: ArrayView2<T>) -> Result<Array2<T>> {
        match self.mode {
            Mode::Eval => self.infer(x),
            Mode::Train => self.forward_train(x),
        }
    }

    /// EVAL-mode forward; never mutates the head.
    pub fn infer(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(&x)?;
        let mut a = x.to_owned();
        for (lin, bn) in self.linears.iter().zip(&self.norms) {
            let z = lin.forward(a.view());
            a = bn.eval(z.view()).mapv_into(relu);
        }
        Ok(self.linears[3].forward(a.view()))
    }

    fn forward_train(&mut self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(&x)?;
        let b = x.nrows();
        if b < 2 {
            return Err(Error::BatchSize(format!("TRAIN mode needs at least 2 rows, got {b}")));
        }
        let bt = T::of(b as f64);
        let eps = T::of(BN_EPS);
        let momentum = T::of(BN_MOMENTUM);
        let unbias = T::of(b as f64 / (b as f64 - 1.0));

        let mut hidden = Vec::with_capacity(3);
        let mut a = x.to_owned();
        for (lin, bn) in self.linears.iter().zip(self.norms.iter_mut()) {
            let z = lin.forward(a.view());
            let mean = z.sum_axis(Axis(0)) / bt;
            let centered = &z - &mean;
            let var = centered.mapv(|c| c * c).sum_axis(Axis(0)) / bt;
            let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
            let xhat = &centered * &inv_std;
            let pre_relu = &xhat * &bn.gamma + &bn.beta;

            Zip::from(&mut bn.running_mean)
                .and(&mean)
                .for_each(|r, &m| *r = (T::one() - momentum) * *r + momentum * m);
            Zip::from(&mut bn.running_var)
                .and(&var)
                .for_each(|r, &v| *r = (T::one() - momentum) * *r + momentum * v * unbias);

            let next = pre_relu.mapv(relu);
            hidden.push(HiddenCache { input: a, xhat, inv_std, pre_relu });
            a = next;
        }
        let out = self.linears[3].forward(a.view());
        self.cache = Some(Cache { hidden, last_input: a });
        Ok(out)
    }

    /// Exact gradients of a scalar loss with per-output gradient `upstream`,
    /// using activations cached by the last TRAIN forward.
    pub fn backward(&self, upstream: ArrayView2<T>) -> Result<GradientSet<T>> {
        Ok(self.backward_with_input(upstream)?.0)
    }

    /// Like [`backward`](Self::backward), also returning `dLoss/dInput`.
    pub fn backward_with_input(&self, upstream: ArrayView2<T>) -> Result<(GradientSet<T>, Array2<T>)> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Usage("backward called without a cached TRAIN forward".into()))?;
        let b = cache.last_input.nrows();
        if upstream.dim() != (b, OUTPUT_DIM) {
            return Err(Error::Dimension(format!(
                "upstream gradient shape {:?}, expected ({b}, {OUTPUT_DIM})",
                upstream.dim()
            )));
        }
        let bt = T::of(b as f64);
        let (dw, db, mut da) = self.linears[3].backward(cache.last_input.view(), upstream);
        let mut linear = vec![(Array2::zeros((0, 0)), Array1::zeros(0)); 4];
        let mut norm = vec![(Array1::zeros(0), Array1::zeros(0)); 3];
        linear[3] = (dw, db);

        for l in (0..3).rev() {
            let c = &cache.hidden[l];
            let bn = &self.norms[l];
            let dy = Zip::from(&da).and(&c.pre_relu).map_collect(|&g, &y| if y > T::zero() { g } else { T::zero() });
            let dgamma = (&dy * &c.xhat).sum_axis(Axis(0));
            let dbeta = dy.sum_axis(Axis(0));
            let dxhat = &dy * &bn.gamma;
            let sum_dxhat = dxhat.sum_axis(Axis(0));
            let sum_dxhat_xhat = (&dxhat * &c.xhat).sum_axis(Axis(0));
            // dz = inv_std / B * (B * dxhat - Σ dxhat - xhat * Σ(dxhat * xhat))
            let mut dz = dxhat * bt;
            dz -= &sum_dxhat;
            dz -= &(&c.xhat * &sum_dxhat_xhat);
            dz *= &(&c.inv_std / bt);
            let (dw, db, dx) = self.linears[l].backward(c.input.view(), dz.view());
            linear[l] = (dw, db);
            norm[l] = (dgamma, dbeta);
            da = dx;
        }
        Ok((GradientSet { linear, norm }, da))
    }

    pub fn cast<U: Real>(&self) -> ProjectionHead<U> {
        ProjectionHead {
            linears: self.linears.iter().map(Linear::cast).collect(),
            norms: self.norms.iter().map(BatchNorm::cast).collect(),
            mode: self.mode,
            cache: None,
        }
    }
}

fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Gradients for every trainable tensor of a [`ProjectionHead`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<T> {
    /// `(dW, db)` per affine layer.
    pub linear: Vec<(Array2<T>, Array1<T>)>,
    /// `(dgamma, dbeta)` per normalization layer.
    pub norm: Vec<(Array1<T>, Array1<T>)>,
}

impl<T: Real> GradientSet<T> {
    /// Tensors in the same order as [`ProjectionHead::params`].
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(14);
        for ((w, b), (g, be)) in self.linear.iter().zip(&self.norm) {
            out.push(w.as_slice().unwrap());
            out.push(b.as_slice().unwrap());
            out.push(g.as_slice().unwrap());
            out.push(be.as_slice().unwrap());
        }
        out.push(self.linear[3].0.as_slice().unwrap());
        out.push(self.linear[3].1.as_slice().unwrap());
        out
    }
}
