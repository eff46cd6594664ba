//! Parameterized layers built from graph primitives.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Uniform in `±1/√fan_in`.
pub fn uniform_fan_in<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("extent matches")
}

/// Uniform with the given variance.
pub fn uniform_var<T: Real, R: Rng + ?Sized>(shape: &[usize], var: f64, rng: &mut R) -> Tensor<T> {
    let bound = (3.0 * var).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("extent matches")
}

/// `rows × rows` orthogonal matrix by Gram-Schmidt on Gaussian rows.
fn orthogonal(rows: usize, rng: &mut (impl Rng + ?Sized)) -> Vec<f64> {
    let mut m: Vec<f64> = (0..rows * rows).map(|_| rng.sample(StandardNormal)).collect();
    for i in 0..rows {
        for j in 0..i {
            let dot: f64 = (0..rows).map(|c| m[i * rows + c] * m[j * rows + c]).sum();
            for c in 0..rows {
                m[i * rows + c] -= dot * m[j * rows + c];
            }
        }
        let norm = (0..rows).map(|c| m[i * rows + c].powi(2)).sum::<f64>().sqrt();
        for c in 0..rows {
            m[i * rows + c] /= norm;
        }
    }
    m
}

/// Fully-connected layer `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            &format!("{name}.weight"),
            uniform_fan_in(&[in_dim, out_dim], in_dim, rng),
        );
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// 2-D convolution layer.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(
            &format!("{name}.weight"),
            uniform_fan_in(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
        );
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Batch statistics observed during a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub rows: usize,
}

/// Batch normalization over features of `[B, F]` inputs with running
/// statistics kept as store buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub const DEFAULT_EPS: f64 = 1e-7;

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, features: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[features], T::one())),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[features])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[features])),
            running_var: store.add_buffer(
                &format!("{name}.running_var"),
                Tensor::full(&[features], T::one()),
            ),
            eps: Self::DEFAULT_EPS,
            momentum: 0.1,
        }
    }

    /// Training mode normalizes by batch statistics and returns them for
    /// [`BatchNorm::update_running`]; inference mode uses the running ones.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        training: bool,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        if training {
            let rows = g.shape(x)[0];
            let (y, mean, var) = g.batch_norm_train(x, gamma, beta, T::lit(self.eps))?;
            return Ok((y, Some(BatchStats { mean, var, rows })));
        }
        let mean = store.value(self.running_mean).clone();
        let inv_std = store
            .value(self.running_var)
            .map(|v| T::one() / (v + T::lit(self.eps)).sqrt());
        let mean = g.constant(mean);
        let inv_std = g.constant(inv_std);
        let centered = g.sub(x, mean)?;
        let scale = g.mul(gamma, inv_std)?;
        let y = g.mul(centered, scale)?;
        Ok((g.add(y, beta)?, None))
    }

    /// Exponential moving update of the running statistics; variance uses
    /// the unbiased batch estimate.
    pub fn update_running<T: Real>(&self, store: &mut ParamStore<T>, stats: &BatchStats<T>) {
        let m = T::lit(self.momentum);
        let unbias = T::lit(stats.rows as f64 / (stats.rows as f64 - 1.0));
        let rm = store.value_mut(self.running_mean).data_mut();
        for (r, &b) in rm.iter_mut().zip(&stats.mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        let rv = store.value_mut(self.running_var).data_mut();
        for (r, &b) in rv.iter_mut().zip(&stats.var) {
            *r = (T::one() - m) * *r + m * b * unbias;
        }
    }
}

/// One step of a standard LSTM with gate order (input, forget, cell, output):
/// `gates = x·W_ih + h·W_hh + b`, `c' = σ(f)⊙c + σ(i)⊙tanh(g)`,
/// `h' = σ(o)⊙tanh(c')`.
pub fn lstm_cell<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    h: Var,
    c: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
) -> Result<(Var, Var)> {
    let hidden = g.shape(h)[1];
    if g.shape(c) != g.shape(h) || g.shape(w_hh) != [hidden, 4 * hidden] || g.shape(bias) != [4 * hidden] {
        return Err(Error::dim(format!(
            "lstm hidden {:?}, cell {:?}, W_hh {:?}, bias {:?}",
            g.shape(h),
            g.shape(c),
            g.shape(w_hh),
            g.shape(bias)
        )));
    }
    let xi = g.matmul(x, w_ih)?;
    let hh = g.matmul(h, w_hh)?;
    let pre = g.add(xi, hh)?;
    let gates = g.add(pre, bias)?;
    let i = g.narrow(gates, 1, 0, hidden)?;
    let f = g.narrow(gates, 1, hidden, hidden)?;
    let cand = g.narrow(gates, 1, 2 * hidden, hidden)?;
    let o = g.narrow(gates, 1, 3 * hidden, hidden)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let cand = g.tanh(cand);
    let o = g.sigmoid(o);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// LSTM layer parameters for [`lstm_cell`].
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let w_ih = store.add(
            &format!("{name}.w_ih"),
            uniform_fan_in(&[input, 4 * hidden], input, rng),
        );
        // One orthogonal block per gate, laid out side by side.
        let mut hh = vec![T::zero(); hidden * 4 * hidden];
        for gate in 0..4 {
            let q = orthogonal(hidden, rng);
            for r in 0..hidden {
                for col in 0..hidden {
                    hh[r * 4 * hidden + gate * hidden + col] = T::lit(q[r * hidden + col]);
                }
            }
        }
        let w_hh = store.add(
            &format!("{name}.w_hh"),
            Tensor::new(&[hidden, 4 * hidden], hh).expect("extent matches"),
        );
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[4 * hidden]));
        Self {
            w_ih,
            w_hh,
            bias,
            hidden,
        }
    }

    pub fn step<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let w_ih = g.param(store, self.w_ih);
        let w_hh = g.param(store, self.w_hh);
        let b = g.param(store, self.bias);
        lstm_cell(g, x, h, c, w_ih, w_hh, b)
    }
}
