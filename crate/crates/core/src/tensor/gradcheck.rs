//! Central finite-difference checks of analytic gradients (64-bit).

use rand::Rng;
use rand_distr::Uniform;

use super::nn::lstm_cell;
use super::{gaussian_sample, CustomOp, Graph, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::rng;

/// Finite-difference step.
pub const STEP: f64 = 1e-6;
/// Denominator floor for relative errors, so entries whose true gradient is
/// zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;
/// Pass threshold for single operations.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Pass threshold for the composed model.
pub const MODEL_TOLERANCE: f64 = 1e-3;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct Report {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl Report {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares the analytic gradient of the scalar built by `f` with respect to
/// each input tensor against central differences.
pub fn check_inputs<F>(name: &str, inputs: &[Tensor<f64>], f: F) -> Result<Report>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data().iter().sum())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let loss = g.sum(out);
    let grads = g.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut work = inputs.to_vec();
    for (ti, &v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[ti].len()];
        let analytic = grads.get(v).unwrap_or(&zeros).to_vec();
        for i in 0..inputs[ti].len() {
            let orig = work[ti].data()[i];
            work[ti].data_mut()[i] = orig + STEP;
            let up = eval(&work)?;
            work[ti].data_mut()[i] = orig - STEP;
            let down = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_error(analytic[i], numeric));
            checked += 1;
        }
    }
    Ok(Report {
        name: name.to_string(),
        max_rel_error: worst,
        checked,
    })
}

/// Same check over every trainable scalar of `store`. `f` must be a pure
/// function of the store (fix any randomness inside it).
pub fn check_params<F>(name: &str, store: &ParamStore<f64>, f: F) -> Result<Report>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        Ok(g.value(out).data().iter().sum())
    };
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let loss = g.sum(out);
    let grads = g.backward(loss)?;
    let analytic = g.param_grads(&grads, store);

    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (pi, id) in store.ids().enumerate() {
        if !store.is_trainable(id) {
            continue;
        }
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + STEP;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig - STEP;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_error(analytic[pi][i], numeric));
            checked += 1;
        }
    }
    Ok(Report {
        name: name.to_string(),
        max_rel_error: worst,
        checked,
    })
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let d = Uniform::new(lo, hi).expect("valid range");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(d)).collect()).expect("extent matches")
}

/// Random values bounded away from zero, for ops with a kink at the origin.
fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let t = uniform(shape, 0.1, 2.0, rng);
    let signs = uniform(shape, -1.0, 1.0, rng);
    let data = t
        .data()
        .iter()
        .zip(signs.data())
        .map(|(v, s)| if *s < 0.0 { -v } else { *v })
        .collect();
    Tensor::new(shape, data).expect("extent matches")
}

/// Weighs an op output by fixed random coefficients so the upstream
/// gradient is not uniform.
fn weighted(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = gaussian_sample(g.shape(y), &mut rng::stream(seed, 999));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type OpCase = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>);

/// Every differentiable primitive, with random inputs drawn from `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<Report>> {
    let mut r = rng::stream(seed, 1000);
    let s = seed;
    let mut cases: Vec<OpCase> = vec![
        (
            "matmul",
            vec![uniform(&[4, 5], -1.0, 1.0, &mut r), uniform(&[5, 2], -1.0, 1.0, &mut r)],
            Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted(g, y, s)
            }),
        ),
        (
            "add_broadcast",
            vec![uniform(&[3, 4], -1.0, 1.0, &mut r), uniform(&[4], -1.0, 1.0, &mut r)],
            Box::new(move |g, v| {
                let y = g.add(v[0], v[1])?;
                weighted(g, y, s)
            }),
        ),
        (
            "sub_broadcast",
            vec![uniform(&[2, 1, 3], -1.0, 1.0, &mut r), uniform(&[4, 1], -1.0, 1.0, &mut r)],
            Box::new(move |g, v| {
                let y = g.sub(v[0], v[1])?;
                weighted(g, y, s)
            }),
        ),
        (
            "mul_broadcast",
            vec![uniform(&[2, 3, 4], -1.0, 1.0, &mut r), uniform(&[2, 1, 4], -1.0, 1.0, &mut r)],
            Box::new(move |g, v| {
                let y = g.mul(v[0], v[1])?;
                weighted(g, y, s)
            }),
        ),
        (
            "mul_self",
            vec![uniform(&[5], -1.0, 1.0, &mut r)],
            Box::new(move |g, v| {
                let y = g.mul(v[0], v[0])?;
                weighted(g, y, s)
            }),
        ),
        (
            "scale_shift",
            vec![uniform(&[6], -1.0, 1.0, &mut r)],
            Box::new(move |g, v| {
                let y = g.scale(v[0], -1.7);
                let y = g.add_scalar(y, 0.3);
                weighted(g, y, s)
            }),
        ),
        (
            "exp",
            vec![uniform(&[6], -2.0, 2.0, &mut r)],
            Box::new(move |g, v| {
                let y = g.exp(v[0]);
                weighted(g, y, s)
            }),
        ),
        (
            "square",
            vec![uniform(&[6], -2.0, 2.0, &mut r)],
            Box::new(move |g, v| {
                let y = g.square(v[0]);
                weighted(g, y, s)
            }),
        ),
        (
            "abs",
            vec![away_from_zero(&[6], &mut r)],
            Box::new(move |g, v| {
                let y = g.abs(v[0]);
                weighted(g, y, s)
            }),
        ),
        (
            "sigmoid",
            vec![uniform(&[6], -4.0, 4.0, &mut r)],
            Box::new(move |g, v| {
                let y = g.sigmoid(v[0]);
                weighted(g, y, s)
            }),
        ),
        (
            "tanh",
            vec![uniform(&[6], -3.0, 3.0, &mut r)],
            Box::new(move |g, v| {
                let y = g.tanh(v[0]);
                weighted(g, y, s)
            }),
        ),
        (
            "leaky_relu",
            vec![away_from_zero(&[8], &mut r)],
            Box::new(move |g, v| {
                let y = g.leaky_relu(v[0], 0.01);
                weighted(g, y, s)
            }),
        ),
        (
            "clamp",
            vec![uniform(&[8], -0.9, 0.9, &mut r)],
            Box::new(move |g, v| {
                let y = g.clamp(v[0], -10.0, 10.0);
                weighted(g, y, s)
            }),
        ),
        (
            "sum_axis",
            vec![uniform(&[2, 3, 4], -1.0, 1.0, &mut r)],
            Box::new(move |g, v| {
                let y = g.sum_axis(v[0], 1)?;
                weighted(g, y, s)
            }),
        ),
        (
            "min_axis",
            vec![uniform(&[3, 5], -1.0, 1.0, &mut r)],
            Box::new(move |g, v| {
                let y = g.min_axis(v[0], 1)?;
                weighted(g, y, s)
            }),
        ),
        (
            "squash",
            vec![uniform(&[3, 4], -1.5, 1.5, &mut r)],
            Box::new(move |g, v| {
                let y = g.squash(v[0], 1)?;
                weighted(g, y, s)
            }),
        ),
        (
            "squash_inner_axis",
            vec![uniform(&[2, 3, 2], -1.5, 1.5, &mut r)],
            Box::new(move |g, v| {
                let y = g.squash(v[0], 1)?;
                weighted(g, y, s)
            }),
        ),
        (
            "softmax",
            vec![uniform(&[2, 4, 3], -2.0, 2.0, &mut r)],
            Box::new(move |g, v| {
                let y = g.softmax(v[0], 1)?;
                weighted(g, y, s)
            }),
        ),
        (
            "reshape_concat_narrow",
            vec![uniform(&[2, 3], -1.0, 1.0, &mut r), uniform(&[2, 2], -1.0, 1.0, &mut r)],
            Box::new(move |g, v| {
                let c = g.concat(&[v[0], v[1]], 1)?;
                let n = g.narrow(c, 1, 1, 3)?;
                let y = g.reshape(n, &[3, 2])?;
                weighted(g, y, s)
            }),
        ),
        (
            "gather",
            vec![uniform(&[4, 3], -1.0, 1.0, &mut r)],
            Box::new(move |g, v| {
                let y = g.gather(v[0], &[2, 0, 2, 3])?;
                weighted(g, y, s)
            }),
        ),
        (
            "conv2d",
            vec![
                uniform(&[2, 2, 5, 6], -1.0, 1.0, &mut r),
                uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r),
                uniform(&[3], -1.0, 1.0, &mut r),
            ],
            Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
                weighted(g, y, s)
            }),
        ),
        (
            "batch_norm",
            vec![
                uniform(&[5, 3], -1.0, 1.0, &mut r),
                uniform(&[3], 0.5, 1.5, &mut r),
                uniform(&[3], -1.0, 1.0, &mut r),
            ],
            Box::new(move |g, v| {
                let (y, _, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                weighted(g, y, s)
            }),
        ),
        (
            "lstm_cell",
            vec![
                uniform(&[2, 3], -1.0, 1.0, &mut r),
                uniform(&[2, 4], -1.0, 1.0, &mut r),
                uniform(&[2, 4], -1.0, 1.0, &mut r),
                uniform(&[3, 16], -0.5, 0.5, &mut r),
                uniform(&[4, 16], -0.5, 0.5, &mut r),
                uniform(&[16], -0.5, 0.5, &mut r),
            ],
            Box::new(move |g, v| {
                let (h, c) = lstm_cell(g, v[0], v[1], v[2], v[3], v[4], v[5])?;
                let both = g.concat(&[h, c], 1)?;
                weighted(g, both, s)
            }),
        ),
    ];
    cases
        .drain(..)
        .map(|(name, inputs, f)| check_inputs(name, &inputs, f))
        .collect()
}

/// Doubles its input but reports half the true gradient. Used as a negative
/// control: a correct checker must flag it.
pub struct BrokenDouble;

impl CustomOp<f64> for BrokenDouble {
    fn name(&self) -> &str {
        "broken_double"
    }

    fn backward(&self, _inputs: &[&Tensor<f64>], _output: &Tensor<f64>, grad_out: &[f64]) -> Vec<Vec<f64>> {
        vec![grad_out.to_vec()]
    }
}

pub fn broken_fixture(seed: u64) -> Result<Report> {
    let x = uniform(&[5], -1.0, 1.0, &mut rng::stream(seed, 1001));
    check_inputs("broken_double (negative control)", &[x], |g, v| {
        let doubled = g.value(v[0]).map(|e| 2.0 * e);
        Ok(g.custom(&[v[0]], doubled, Box::new(BrokenDouble)))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for seed in 0..3 {
            for rep in op_suite(seed).unwrap() {
                assert!(rep.passes(OP_TOLERANCE), "{} seed {seed}: {}", rep.name, rep.max_rel_error);
            }
        }
    }

    #[test]
    fn negative_control_is_flagged() {
        let rep = broken_fixture(0).unwrap();
        assert!(!rep.passes(OP_TOLERANCE));
        assert!(rep.max_rel_error > 0.4);
    }
}
