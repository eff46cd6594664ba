//! Recognition network, reparameterized latent draws and the motion
//! generator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::capsnet::LEAKY_SLOPE;
use crate::error::{Error, Result};
use crate::tensor::{gaussian_sample, BatchNorm, BatchStats, Graph, Linear, ParamStore, Real, Tensor, Var};

/// Bounds applied to the log-variance head before exponentiation.
pub const LOGVAR_RANGE: (f64, f64) = (-10.0, 10.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvaeConfig {
    pub past_embed: usize,
    pub future_embed: usize,
    pub recog_hidden: usize,
    pub latent: usize,
    pub gen_hidden: [usize; 3],
    /// Meters per network unit for trajectory inputs and outputs.
    pub coord_scale: f64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            past_embed: 64,
            future_embed: 64,
            recog_hidden: 128,
            latent: 32,
            gen_hidden: [256, 256, 128],
            coord_scale: 10.0,
        }
    }
}

/// Latent distribution parameters. `sigma` is the standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// `k` trajectories of `steps` agent-frame points.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub steps: usize,
    pub points: Vec<[f64; 2]>,
}

impl PredictionSet {
    pub fn k(&self) -> usize {
        self.points.len() / self.steps
    }

    pub fn trajectory(&self, i: usize) -> &[[f64; 2]] {
        &self.points[i * self.steps..(i + 1) * self.steps]
    }

    /// The first `k` trajectories.
    pub fn prefix(&self, k: usize) -> PredictionSet {
        PredictionSet {
            steps: self.steps,
            points: self.points[..k * self.steps].to_vec(),
        }
    }
}

/// Flattened trajectory through one fully-connected layer and leaky ReLU.
#[derive(Clone, Debug)]
pub struct TrajectoryEncoder {
    pub linear: Linear,
    pub points: usize,
    coord_scale: f64,
}

impl TrajectoryEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        points: usize,
        embed: usize,
        coord_scale: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            linear: Linear::new(store, name, 2 * points, embed, rng),
            points,
            coord_scale,
        }
    }

    /// `[B, 2·points]` meters to `[B, embed]`.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, flat: Var) -> Result<Var> {
        let s = g.shape(flat);
        if s.len() != 2 || s[1] != 2 * self.points {
            return Err(Error::contract(format!(
                "trajectory encoder expects {} points, got shape {s:?}",
                self.points
            )));
        }
        let x = g.scale(flat, T::lit(1.0 / self.coord_scale));
        let y = self.linear.forward(g, store, x)?;
        Ok(g.leaky_relu(y, T::lit(LEAKY_SLOPE)))
    }
}

#[derive(Clone, Debug)]
struct Head {
    fc1: Linear,
    bn: BatchNorm,
    fc2: Linear,
}

impl Head {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), input, hidden, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), hidden),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out, rng),
        }
    }

    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        training: bool,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let h = self.fc1.forward(g, store, x)?;
        let (h, stats) = self.bn.forward(g, store, h, training)?;
        let h = g.leaky_relu(h, T::lit(LEAKY_SLOPE));
        Ok((self.fc2.forward(g, store, h)?, stats))
    }
}

/// Graph handles for one recognition pass.
pub struct Posterior<T> {
    pub mu: Var,
    pub logvar: Var,
    /// Batch statistics of each head's normalization, for running updates.
    pub stats: Vec<(BatchNorm, BatchStats<T>)>,
}

/// Two-headed network emitting the posterior mean and clamped log-variance.
#[derive(Clone, Debug)]
pub struct Recognition {
    mu: Head,
    logvar: Head,
}

impl Recognition {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        input: usize,
        hidden: usize,
        latent: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            mu: Head::new(store, "recog.mu", input, hidden, latent, rng),
            logvar: Head::new(store, "recog.logvar", input, hidden, latent, rng),
        }
    }

    pub fn recognize<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        future: Var,
        cond: Var,
        training: bool,
    ) -> Result<Posterior<T>> {
        let x = g.concat(&[future, cond], 1)?;
        let (mu, s_mu) = self.mu.forward(g, store, x, training)?;
        let (lv, s_lv) = self.logvar.forward(g, store, x, training)?;
        let logvar = g.clamp(lv, T::lit(LOGVAR_RANGE.0), T::lit(LOGVAR_RANGE.1));
        let stats = [(self.mu.bn.clone(), s_mu), (self.logvar.bn.clone(), s_lv)]
            .into_iter()
            .filter_map(|(bn, s)| s.map(|s| (bn, s)))
            .collect();
        Ok(Posterior { mu, logvar, stats })
    }
}

/// `z = μ + exp(½·logσ²) ⊙ ε`.
pub fn reparameterize<T: Real>(g: &mut Graph<T>, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = g.scale(logvar, T::lit(0.5));
    let sigma = g.exp(half);
    let noise = g.mul(sigma, eps)?;
    g.add(mu, noise)
}

/// Four fully-connected layers; the fused state joins the input of the
/// second.
#[derive(Clone, Debug)]
pub struct Generator {
    layers: [Linear; 4],
    pub latent: usize,
    pub cond: usize,
    pub state: usize,
    pub steps: usize,
    coord_scale: f64,
}

impl Generator {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &CvaeConfig,
        cond: usize,
        state: usize,
        steps: usize,
        rng: &mut R,
    ) -> Self {
        let [h1, h2, h3] = cfg.gen_hidden;
        let layers = [
            Linear::new(store, "gen.fc1", cfg.latent + cond, h1, rng),
            Linear::new(store, "gen.fc2", h1 + state, h2, rng),
            Linear::new(store, "gen.fc3", h2, h3, rng),
            Linear::new(store, "gen.fc4", h3, 2 * steps, rng),
        ];
        Self {
            layers,
            latent: cfg.latent,
            cond,
            state,
            steps,
            coord_scale: cfg.coord_scale,
        }
    }

    /// Rows of `z: [N, latent]`, `cond: [N, c]`, `state: [N, s]` to
    /// trajectories `[N, 2·steps]` in meters, laid out `(x₀, y₀, x₁, …)`.
    pub fn generate<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: Var,
        cond: Var,
        state: Var,
    ) -> Result<Var> {
        let n = g.shape(z)[0];
        let ok = g.shape(z) == [n, self.latent]
            && g.shape(cond) == [n, self.cond]
            && g.shape(state) == [n, self.state];
        if !ok {
            return Err(Error::contract(format!(
                "generator inputs z {:?}, c {:?}, s {:?} vs dims {}/{}/{}",
                g.shape(z),
                g.shape(cond),
                g.shape(state),
                self.latent,
                self.cond,
                self.state
            )));
        }
        let slope = T::lit(LEAKY_SLOPE);
        let x = g.concat(&[z, cond], 1)?;
        let h = self.layers[0].forward(g, store, x)?;
        let h = g.leaky_relu(h, slope);
        let h = g.concat(&[h, state], 1)?;
        let h = self.layers[1].forward(g, store, h)?;
        let h = g.leaky_relu(h, slope);
        let h = self.layers[2].forward(g, store, h)?;
        let h = g.leaky_relu(h, slope);
        let y = self.layers[3].forward(g, store, h)?;
        Ok(g.scale(y, T::lit(self.coord_scale)))
    }

    /// Decodes `k` prior draws per example. Example `b` draws its latents
    /// from `rngs[b]` in order, so a larger `k` on the same streams extends
    /// a smaller one.
    pub fn sample_k<T: Real, R: Rng>(
        &self,
        store: &ParamStore<T>,
        k: usize,
        cond: &Tensor<T>,
        state: &Tensor<T>,
        rngs: &mut [R],
    ) -> Result<Vec<PredictionSet>> {
        if k < 1 {
            return Err(Error::contract("sample_k needs k >= 1"));
        }
        let b = cond.shape()[0];
        if rngs.len() != b {
            return Err(Error::contract(format!("{} rng streams for {b} examples", rngs.len())));
        }
        let mut z = Vec::with_capacity(b * k * self.latent);
        for r in rngs.iter_mut() {
            z.extend(gaussian_sample::<T, _>(&[k, self.latent], r).into_data());
        }
        let idx: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let mut g = Graph::new();
        let zv = g.constant(Tensor::new(&[b * k, self.latent], z)?);
        let c = g.constant(cond.clone());
        let s = g.constant(state.clone());
        let c = g.gather(c, &idx)?;
        let s = g.gather(s, &idx)?;
        let y = self.generate(&mut g, store, zv, c, s)?;
        let flat = g.value(y).to_f64_vec();
        let per = k * 2 * self.steps;
        Ok((0..b)
            .map(|i| PredictionSet {
                steps: self.steps,
                points: flat[i * per..(i + 1) * per].chunks_exact(2).map(|p| [p[0], p[1]]).collect(),
            })
            .collect())
    }
}

/// Reads `(μ, σ)` back from a posterior pass.
pub fn gaussian_params<T: Real>(g: &Graph<T>, post: &Posterior<T>) -> GaussianParams {
    GaussianParams {
        mu: g.value(post.mu).to_f64_vec(),
        sigma: g.value(post.logvar).to_f64_vec().iter().map(|lv| (0.5 * lv).exp()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn cfg() -> CvaeConfig {
        CvaeConfig {
            past_embed: 5,
            future_embed: 6,
            recog_hidden: 7,
            latent: 3,
            gen_hidden: [8, 8, 6],
            coord_scale: 10.0,
        }
    }

    #[test]
    fn trajectory_encoder_shapes_and_zero() {
        let mut store = ParamStore::<f64>::new();
        let enc = TrajectoryEncoder::new(&mut store, "past", 5, 6, 10.0, &mut rng::stream(0, 1));
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 10]));
        let y = enc.encode(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[2, 6]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let bad = g.constant(Tensor::zeros(&[2, 8]));
        assert!(matches!(enc.encode(&mut g, &store, bad), Err(Error::Contract(_))));
    }

    #[test]
    fn recognition_outputs() {
        let mut store = ParamStore::<f64>::new();
        let rec = Recognition::new(&mut store, 6 + 4, 7, 3, &mut rng::stream(0, 2));
        let mut g = Graph::new();
        let fut = g.constant(gaussian_sample(&[4, 6], &mut rng::stream(1, 1)));
        let cond = g.constant(gaussian_sample(&[4, 4], &mut rng::stream(1, 2)));
        let post = rec.recognize(&mut g, &store, fut, cond, true).unwrap();
        assert_eq!(post.stats.len(), 2);
        let p = gaussian_params(&g, &post);
        assert_eq!(p.mu.len(), 12);
        assert!(p.sigma.iter().all(|&s| s > 0.0));
        let rows: Vec<&[f64]> = p.mu.chunks(3).collect();
        assert!(rows.windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn reparameterize_cases() {
        let mut g = Graph::<f64>::new();
        let mu = g.constant(Tensor::from_f64(&[1, 3], &[1.0, -2.0, 0.5]).unwrap());
        let lv = g.constant(Tensor::from_f64(&[1, 3], &[0.3, 0.1, -1.0]).unwrap());
        let zero = g.constant(Tensor::zeros(&[1, 3]));
        let z = reparameterize(&mut g, mu, lv, zero).unwrap();
        assert_eq!(g.value(z), g.value(mu));
        let eps = g.constant(Tensor::from_f64(&[1, 3], &[0.7, -0.1, 2.0]).unwrap());
        let m0 = g.constant(Tensor::zeros(&[1, 3]));
        let z = reparameterize(&mut g, m0, zero, eps).unwrap();
        assert_eq!(g.value(z), g.value(eps));
    }

    #[test]
    fn reparameterized_moments() {
        let (mu, lv) = (0.7, (1.6f64).ln() * 2.0);
        let n = 10_000;
        let mut g = Graph::<f64>::new();
        let m = g.constant(Tensor::full(&[n, 1], mu));
        let l = g.constant(Tensor::full(&[n, 1], lv));
        let eps = g.constant(gaussian_sample(&[n, 1], &mut rng::stream(4, 4)));
        let z = reparameterize(&mut g, m, l, eps).unwrap();
        let d = g.value(z).data();
        let mean = d.iter().sum::<f64>() / n as f64;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let se_mean = 1.6 / (n as f64).sqrt();
        let se_sd = 1.6 / (2.0 * (n as f64 - 1.0)).sqrt();
        assert!((mean - mu).abs() < 3.0 * se_mean);
        assert!((sd - 1.6).abs() < 3.0 * se_sd);
    }

    fn generator() -> (ParamStore<f64>, Generator) {
        let mut store = ParamStore::new();
        let gen = Generator::new(&mut store, &cfg(), 4, 2, 12, &mut rng::stream(2, 2));
        (store, gen)
    }

    #[test]
    fn generator_shape_and_liveness() {
        let (store, gen) = generator();
        let mut g = Graph::new();
        let c = g.constant(gaussian_sample(&[1, 4], &mut rng::stream(3, 1)));
        let s = g.constant(gaussian_sample(&[1, 2], &mut rng::stream(3, 2)));
        let z1 = g.constant(gaussian_sample(&[1, 3], &mut rng::stream(3, 3)));
        let z2 = g.constant(gaussian_sample(&[1, 3], &mut rng::stream(3, 4)));
        let a = gen.generate(&mut g, &store, z1, c, s).unwrap();
        let a2 = gen.generate(&mut g, &store, z1, c, s).unwrap();
        let b = gen.generate(&mut g, &store, z2, c, s).unwrap();
        assert_eq!(g.shape(a), &[1, 24]);
        assert_eq!(g.value(a), g.value(a2));
        assert_ne!(g.value(a), g.value(b));
        assert!(matches!(gen.generate(&mut g, &store, c, c, s), Err(Error::Contract(_))));
    }

    #[test]
    fn sample_k_prefix_and_singleton() {
        let (store, gen) = generator();
        let c: Tensor<f64> = gaussian_sample(&[2, 4], &mut rng::stream(5, 1));
        let s: Tensor<f64> = gaussian_sample(&[2, 2], &mut rng::stream(5, 2));
        let streams = || vec![rng::substream(9, 3, 0), rng::substream(9, 3, 1)];
        let small = gen.sample_k(&store, 3, &c, &s, &mut streams()).unwrap();
        let big = gen.sample_k(&store, 7, &c, &s, &mut streams()).unwrap();
        for (a, b) in small.iter().zip(&big) {
            assert_eq!(a.k(), 3);
            assert_eq!(b.k(), 7);
            for i in 0..3 {
                for (p, q) in a.trajectory(i).iter().zip(b.trajectory(i)) {
                    assert!((p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12);
                }
            }
        }
        assert_eq!(big, gen.sample_k(&store, 7, &c, &s, &mut streams()).unwrap());
        assert!(gen.sample_k(&store, 0, &c, &s, &mut streams()).is_err());

        // k = 1 equals a direct decode of the first draw.
        let mut r = rng::substream(9, 3, 0);
        let z: Tensor<f64> = gaussian_sample(&[1, 3], &mut r);
        let mut g = Graph::new();
        let zv = g.constant(z);
        let cv = g.constant(Tensor::new(&[1, 4], c.data()[..4].to_vec()).unwrap());
        let sv = g.constant(Tensor::new(&[1, 2], s.data()[..2].to_vec()).unwrap());
        let y = gen.generate(&mut g, &store, zv, cv, sv).unwrap();
        let one = gen.sample_k(&store, 1, &c, &s, &mut streams()).unwrap();
        for (p, q) in one[0].points.iter().zip(g.value(y).data().chunks(2)) {
            assert!((p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12);
        }
    }
}
