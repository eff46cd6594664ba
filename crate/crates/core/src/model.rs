//! The full predictor: capsule encoders, condition vector, recognition
//! network and generator over one shared parameter store.

use serde::{Deserialize, Serialize};

use crate::capsnet::{CapsNetConfig, GlobalEncoder, LocalEncoder};
use crate::cvae::{CvaeConfig, Generator, Posterior, PredictionSet, Recognition, TrajectoryEncoder};
use crate::error::{Error, Result};
use crate::geometry::FeatureStats;
use crate::raster::{LayerType, RasterConfig};
use crate::rng::{self, Rng};
use crate::tensor::{ParamId, ParamStore, Real, Tensor, Var, Graph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub rate_hz: f64,
    /// Observed horizon in seconds; the past holds `history·rate + 1` poses.
    pub history_s: f64,
    /// Predicted horizon in seconds; the future holds `future·rate` points.
    pub future_s: f64,
    pub raster: RasterConfig,
    pub capsnet: CapsNetConfig,
    pub cvae: CvaeConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            rate_hz: 2.0,
            history_s: 2.0,
            future_s: 6.0,
            raster: RasterConfig::default(),
            capsnet: CapsNetConfig::default(),
            cvae: CvaeConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn history_steps(&self) -> usize {
        (self.history_s * self.rate_hz).round() as usize + 1
    }

    pub fn future_steps(&self) -> usize {
        (self.future_s * self.rate_hz).round() as usize
    }

    pub fn period(&self) -> f64 {
        1.0 / self.rate_hz
    }

    pub fn validate(&self) -> Result<()> {
        let steps_ok = |s: f64| (s * self.rate_hz - (s * self.rate_hz).round()).abs() < 1e-9;
        if !(self.rate_hz > 0.0) {
            return Err(Error::parse("model.rate_hz", "rate must be positive"));
        }
        if !(self.history_s > 0.0 && steps_ok(self.history_s)) {
            return Err(Error::parse("model.history_s", "history must be a positive whole number of steps"));
        }
        if !(self.future_s > 0.0 && steps_ok(self.future_s)) {
            return Err(Error::parse("model.future_s", "future must be a positive whole number of steps"));
        }
        self.raster
            .validate()
            .map_err(|e| Error::parse("model.raster", e.to_string()))?;
        if self.capsnet.conv_channels.is_empty() {
            return Err(Error::parse("model.capsnet.conv_channels", "need at least one conv layer"));
        }
        if self.cvae.latent == 0 || !(self.cvae.coord_scale > 0.0) {
            return Err(Error::parse("model.cvae", "latent size and coord_scale must be positive"));
        }
        Ok(())
    }

    /// Reduced dimensions used for gradient checks and quick tests.
    pub fn tiny() -> Self {
        Self {
            raster: RasterConfig {
                global_px: 12,
                local_px: 8,
                ..RasterConfig::default()
            },
            capsnet: CapsNetConfig {
                conv_channels: vec![3, 4],
                lower: crate::capsnet::CapsuleShape::new(3, 4),
                local_higher: crate::capsnet::CapsuleShape::new(2, 3),
                local_final: crate::capsnet::CapsuleShape::new(1, 4),
                global_higher: crate::capsnet::CapsuleShape::new(2, 3),
                state_embed: 3,
                lstm_hidden: 5,
                routing_iters: 0,
            },
            cvae: CvaeConfig {
                past_embed: 4,
                future_embed: 4,
                recog_hidden: 5,
                latent: 3,
                gen_hidden: [6, 6, 5],
                coord_scale: 10.0,
            },
            ..Self::default()
        }
    }
}

/// Network inputs for `B` examples over `T` observed steps. Rows of
/// `local` and `states` are time-major (`t·B + b`).
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub size: usize,
    pub steps: usize,
    /// `[T·B, 4, h, w]` binary layers.
    pub local: Tensor<T>,
    /// `[B, 1, H, W]` merged global chunks.
    pub global: Tensor<T>,
    /// `[T·B, 3]` standardized motion states.
    pub states: Tensor<T>,
    /// `[B, 2·T]` past positions (meters).
    pub past: Tensor<T>,
    /// `[B, 2·F]` future positions (meters).
    pub future: Tensor<T>,
}

impl<T: Real> Batch<T> {
    pub fn cast<U: Real>(&self) -> Batch<U> {
        Batch {
            size: self.size,
            steps: self.steps,
            local: self.local.cast(),
            global: self.global.cast(),
            states: self.states.cast(),
            past: self.past.cast(),
            future: self.future.cast(),
        }
    }
}

/// Encoder outputs that condition the generator.
#[derive(Clone, Copy, Debug)]
pub struct Context {
    /// `c = [p̂, m̂]`, `[B, past_embed + global]`.
    pub cond: Var,
    /// Fused state `ŝ`, `[B, lstm_hidden]`.
    pub state: Var,
}

#[derive(Clone, Debug)]
pub struct Mmst<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub local: LocalEncoder,
    pub global: GlobalEncoder,
    pub past: TrajectoryEncoder,
    pub future: TrajectoryEncoder,
    pub recognition: Recognition,
    pub generator: Generator,
    stats_mean: ParamId,
    stats_std: ParamId,
}

impl<T: Real> Mmst<T> {
    /// Parameters are drawn from the initialization stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, rng::streams::INIT);
        let mut store = ParamStore::new();
        let cfg = &config;
        let local = LocalEncoder::new(&mut store, &cfg.capsnet, cfg.raster.local_px, &mut r);
        let global = GlobalEncoder::new(&mut store, &cfg.capsnet, cfg.raster.global_px, &mut r);
        let past = TrajectoryEncoder::new(
            &mut store,
            "past",
            cfg.history_steps(),
            cfg.cvae.past_embed,
            cfg.cvae.coord_scale,
            &mut r,
        );
        let future = TrajectoryEncoder::new(
            &mut store,
            "future",
            cfg.future_steps(),
            cfg.cvae.future_embed,
            cfg.cvae.coord_scale,
            &mut r,
        );
        let cond = cfg.cvae.past_embed + global.out_features();
        let recognition = Recognition::new(
            &mut store,
            cfg.cvae.future_embed + cond,
            cfg.cvae.recog_hidden,
            cfg.cvae.latent,
            &mut r,
        );
        let generator = Generator::new(&mut store, &cfg.cvae, cond, local.hidden(), cfg.future_steps(), &mut r);
        let stats_mean = store.add_buffer("state_stats.mean", Tensor::zeros(&[3]));
        let stats_std = store.add_buffer("state_stats.std", Tensor::full(&[3], T::one()));
        Ok(Self {
            config,
            store,
            local,
            global,
            past,
            future,
            recognition,
            generator,
            stats_mean,
            stats_std,
        })
    }

    /// Trainable scalar count.
    pub fn count_parameters(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn feature_stats(&self) -> FeatureStats {
        let get = |id| {
            let v = self.store.value(id).to_f64_vec();
            [v[0], v[1], v[2]]
        };
        FeatureStats {
            mean: get(self.stats_mean),
            std: get(self.stats_std),
            degenerate: [false; 3],
        }
    }

    pub fn set_feature_stats(&mut self, stats: &FeatureStats) {
        *self.store.value_mut(self.stats_mean) = Tensor::from_f64(&[3], &stats.mean).expect("3 values");
        *self.store.value_mut(self.stats_std) = Tensor::from_f64(&[3], &stats.std).expect("3 values");
    }

    /// Same architecture with parameter values taken from `store`.
    pub fn with_store(&self, store: ParamStore<T>) -> Self {
        Self {
            store,
            ..self.clone()
        }
    }

    /// Same architecture and values at another precision.
    pub fn cast<U: Real>(&self) -> Mmst<U> {
        Mmst {
            config: self.config.clone(),
            store: self.store.cast(),
            local: self.local.clone(),
            global: self.global.clone(),
            past: self.past.clone(),
            future: self.future.clone(),
            recognition: self.recognition.clone(),
            generator: self.generator.clone(),
            stats_mean: self.stats_mean,
            stats_std: self.stats_std,
        }
    }

    fn check_batch(&self, batch: &Batch<T>) -> Result<()> {
        let cfg = &self.config;
        let (b, t) = (batch.size, batch.steps);
        let (lp, gp) = (cfg.raster.local_px, cfg.raster.global_px);
        let expect: [(&str, &[usize], Vec<usize>); 5] = [
            ("local", batch.local.shape(), vec![t * b, LayerType::COUNT, lp, lp]),
            ("global", batch.global.shape(), vec![b, 1, gp, gp]),
            ("states", batch.states.shape(), vec![t * b, 3]),
            ("past", batch.past.shape(), vec![b, 2 * cfg.history_steps()]),
            ("future", batch.future.shape(), vec![b, 2 * cfg.future_steps()]),
        ];
        if t != cfg.history_steps() {
            return Err(Error::dim(format!("batch has {t} steps, model expects {}", cfg.history_steps())));
        }
        for (name, got, want) in expect {
            if got != want.as_slice() {
                return Err(Error::dim(format!("batch {name} shape {got:?}, expected {want:?}")));
            }
        }
        Ok(())
    }

    pub fn encode(&self, g: &mut Graph<T>, batch: &Batch<T>) -> Result<Context> {
        self.check_batch(batch)?;
        let local = g.constant(batch.local.clone());
        let states = g.constant(batch.states.clone());
        let state = self.local.encode_state(g, &self.store, local, states, batch.steps)?;
        let global = g.constant(batch.global.clone());
        let m_hat = self.global.encode_global(g, &self.store, global)?;
        let past = g.constant(batch.past.clone());
        let p_hat = self.past.encode(g, &self.store, past)?;
        let cond = g.concat(&[p_hat, m_hat], 1)?;
        Ok(Context { cond, state })
    }

    /// Posterior from the batch's ground-truth future.
    pub fn recognize(&self, g: &mut Graph<T>, batch: &Batch<T>, ctx: &Context, training: bool) -> Result<Posterior<T>> {
        let fut = g.constant(batch.future.clone());
        let g_hat = self.future.encode(g, &self.store, fut)?;
        self.recognition.recognize(g, &self.store, g_hat, ctx.cond, training)
    }

    /// `k` prior samples per example; `rngs[b]` drives example `b`.
    pub fn sample(&self, batch: &Batch<T>, k: usize, rngs: &mut [Rng]) -> Result<Vec<PredictionSet>> {
        let mut g = Graph::new();
        let ctx = self.encode(&mut g, batch)?;
        let cond = g.value(ctx.cond).clone();
        let state = g.value(ctx.state).clone();
        drop(g);
        self.generator.sample_k(&self.store, k, &cond, &state, rngs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizons_at_two_hertz() {
        let c = ModelConfig::default();
        assert_eq!(c.history_steps(), 5);
        assert_eq!(c.future_steps(), 12);
    }

    #[test]
    fn latent_size_grows_count() {
        let a = Mmst::<f32>::new(ModelConfig::tiny(), 0).unwrap();
        let mut cfg = ModelConfig::tiny();
        cfg.cvae.latent *= 2;
        let b = Mmst::<f32>::new(cfg, 0).unwrap();
        assert!(b.count_parameters() > a.count_parameters());
    }

    #[test]
    fn stats_round_trip_through_store() {
        let mut m = Mmst::<f32>::new(ModelConfig::tiny(), 0).unwrap();
        let s = FeatureStats {
            mean: [5.0, 0.25, -0.5],
            std: [2.0, 1.5, 0.125],
            degenerate: [false; 3],
        };
        m.set_feature_stats(&s);
        assert_eq!(m.feature_stats(), s);
    }

    #[test]
    fn capsule_norms_do_not_vanish_on_rasters() {
        use crate::data::example::{build_examples, fit_stats, make_batch, Example};
        use crate::data::synth::{generate_scene, SceneSpec};
        let cfg = ModelConfig::default();
        let scene = generate_scene(0, 0, &SceneSpec::default()).unwrap();
        let (ex, _) = build_examples(&[(0, &scene)], &cfg).unwrap();
        let m = Mmst::<f32>::new(cfg.clone(), 0).unwrap();
        let part: Vec<&Example> = ex.iter().take(8).collect();
        let batch = make_batch::<f32>(&part, &fit_stats(&ex).unwrap(), &cfg).unwrap();
        let mean_norm = |t: &Tensor<f32>, dim: usize| {
            let rows: Vec<f64> = t
                .data()
                .chunks(dim)
                .map(|c| c.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt())
                .collect();
            rows.iter().sum::<f64>() / rows.len() as f64
        };
        let mut g = Graph::new();
        let global = g.constant(batch.global.clone());
        let m_hat = m.global.encode_global(&mut g, &m.store, global).unwrap();
        let local = g.constant(batch.local.clone());
        let l_hat = m.local.encode_local_map(&mut g, &m.store, local).unwrap();
        for (v, dim) in [(m_hat, cfg.capsnet.global_higher.dim), (l_hat, cfg.capsnet.local_final.dim)] {
            let n = mean_norm(g.value(v), dim);
            assert!(n > 0.2 && n < 1.0, "{n}");
        }
    }
}
