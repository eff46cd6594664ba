//! Optimization: the bounded stochastic Polyak step, the training step with
//! minimum-over-N sampling, evaluation and the epoch loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cvae::{reparameterize, PredictionSet};
use crate::data::example::{fit_stats, make_batch, Example};
use crate::error::{Error, Result};
use crate::geometry::FeatureStats;
use crate::model::{Batch, Mmst, ModelConfig};
use crate::objectives::{metric_table, total_loss, LossConfig, LossTerms, MetricMode, MetricRow};
use crate::rng::{self, Rng};
use crate::tensor::gradcheck::{self, Report};
use crate::tensor::{gaussian_sample, Graph, ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpsConfig {
    pub c: f64,
    pub gamma_bound: f64,
}

impl Default for SpsConfig {
    fn default() -> Self {
        Self { c: 0.5, gamma_bound: 1.0 }
    }
}

/// `min(loss / (c·‖g‖²), γ_b)`, or 0 when the gradient vanishes.
pub fn sps_rate(loss: f64, grad_sq: f64, sps: &SpsConfig) -> f64 {
    if grad_sq == 0.0 {
        return 0.0;
    }
    (loss / (sps.c * grad_sq)).min(sps.gamma_bound)
}

/// Applies one Polyak step to the trainable entries of `store`; `grads`
/// follows store order. Returns the step size.
pub fn sps_step<T: Real>(store: &mut ParamStore<T>, loss: f64, grads: &[Vec<T>], sps: &SpsConfig) -> Result<f64> {
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    if loss < 0.0 {
        return Err(Error::contract(format!("Polyak step needs a nonnegative loss, got {loss}")));
    }
    let ids: Vec<_> = store.ids().collect();
    if grads.len() != ids.len() {
        return Err(Error::contract(format!("{} gradients for {} parameters", grads.len(), ids.len())));
    }
    let mut grad_sq = 0.0;
    for (&id, g) in ids.iter().zip(grads) {
        if store.is_trainable(id) {
            grad_sq += g.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>();
        }
    }
    if !grad_sq.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    let gamma = sps_rate(loss, grad_sq, sps);
    if gamma == 0.0 {
        return Ok(0.0);
    }
    let step = T::lit(gamma);
    for (&id, g) in ids.iter().zip(grads) {
        if store.is_trainable(id) {
            for (p, d) in store.value_mut(id).data_mut().iter_mut().zip(g) {
                *p -= step * *d;
            }
        }
    }
    Ok(gamma)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Number of prior samples for the per-epoch validation minADE.
    pub eval_k: usize,
    pub loss: LossConfig,
    pub sps: SpsConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            seed: 0,
            eval_k: 10,
            loss: LossConfig::default(),
            sps: SpsConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full-length protocol: 360 epochs at batch 64.
    pub fn full_scale() -> Self {
        Self {
            epochs: 360,
            ..Self::default()
        }
    }

    /// Parses a JSON config with every field defaulted, then validates it.
    /// Errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::parse(e.path().to_string(), e.inner().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::parse("batch_size", "batch normalization needs batch_size >= 2"));
        }
        if self.eval_k == 0 {
            return Err(Error::parse("eval_k", "eval_k must be at least 1"));
        }
        if !(self.sps.c > 0.0) {
            return Err(Error::parse("sps.c", "c must be positive"));
        }
        if !(self.sps.gamma_bound > 0.0) {
            return Err(Error::parse("sps.gamma_bound", "gamma_bound must be positive"));
        }
        self.loss.validate()?;
        self.model.validate()
    }
}

/// Mean per-example loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub mon: f64,
    pub kl: f64,
    pub gamma: f64,
}

/// Builds the training objective for `batch` with latent noise `eps`
/// (`[B·n, latent]`, example-major). Returns the loss handles and the
/// recognition pass.
pub fn loss_graph<T: Real>(
    model: &Mmst<T>,
    g: &mut Graph<T>,
    batch: &Batch<T>,
    eps: Tensor<T>,
    loss: &LossConfig,
    training: bool,
) -> Result<(LossTerms, crate::cvae::Posterior<T>)> {
    let n = loss.n_train;
    let b = batch.size;
    if eps.shape() != [b * n, model.config.cvae.latent] {
        return Err(Error::dim(format!(
            "noise shape {:?}, expected [{}, {}]",
            eps.shape(),
            b * n,
            model.config.cvae.latent
        )));
    }
    let ctx = model.encode(g, batch)?;
    let post = model.recognize(g, batch, &ctx, training)?;
    let idx: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, n)).collect();
    let mu = g.gather(post.mu, &idx)?;
    let lv = g.gather(post.logvar, &idx)?;
    let eps = g.constant(eps);
    let z = reparameterize(g, mu, lv, eps)?;
    let cond = g.gather(ctx.cond, &idx)?;
    let state = g.gather(ctx.state, &idx)?;
    let pred = model.generator.generate(g, &model.store, z, cond, state)?;
    let target = g.constant(batch.future.clone());
    let terms = total_loss(g, pred, target, post.mu, post.logvar, loss)?;
    Ok((terms, post))
}

/// One optimization step. `ids` names the batch's examples for diagnostics.
pub fn train_step<T: Real>(
    model: &mut Mmst<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
    rng: &mut Rng,
    ids: &[&str],
) -> Result<StepStats> {
    if batch.size < 2 {
        return Err(Error::DegenerateBatch(batch.size));
    }
    let eps = gaussian_sample(&[batch.size * cfg.loss.n_train, model.config.cvae.latent], rng);
    let mut g = Graph::new();
    let (terms, post) = loss_graph(model, &mut g, batch, eps, &cfg.loss, true)?;
    let total = g.value(terms.total).item().to_f64_lossy();
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("training loss {total} on batch [{}]", ids.join(", "))));
    }
    let grads = g.backward(terms.total)?;
    let grads = g.param_grads(&grads, &model.store);
    let gamma = sps_step(&mut model.store, total, &grads, &cfg.sps)
        .map_err(|e| Error::NonFinite(format!("{e} on batch [{}]", ids.join(", "))))?;
    for (bn, stats) in &post.stats {
        bn.update_running(&mut model.store, stats);
    }
    let per = batch.size as f64;
    Ok(StepStats {
        loss: total / per,
        mon: g.value(terms.mon).item().to_f64_lossy() / per,
        kl: g.value(terms.kl).item().to_f64_lossy() / per,
        gamma,
    })
}

/// Per-example noise stream for evaluation sampling.
pub fn eval_rngs(seed: u64, first: usize, count: usize) -> Vec<Rng> {
    (first..first + count)
        .map(|i| rng::substream(seed, rng::streams::EVAL, i as u64))
        .collect()
}

/// `k` prior samples for each example, in chunks that bound memory.
/// Example `i` always draws from evaluation substream `i`.
pub fn predict<T: Real>(
    model: &Mmst<T>,
    examples: &[&Example],
    k: usize,
    seed: u64,
) -> Result<Vec<PredictionSet>> {
    let chunk = (16_384 / k.max(1)).clamp(1, 64);
    let stats = model.feature_stats();
    let mut out = Vec::with_capacity(examples.len());
    for (ci, part) in examples.chunks(chunk).enumerate() {
        let batch = make_batch::<T>(part, &stats, &model.config)?;
        let mut rngs = eval_rngs(seed, ci * chunk, part.len());
        out.extend(model.sample(&batch, k, &mut rngs)?);
    }
    Ok(out)
}

/// minADE/minFDE rows for each `k`, from one set of `max(ks)` samples.
pub fn evaluate<T: Real>(
    model: &Mmst<T>,
    examples: &[&Example],
    ks: &[usize],
    mode: MetricMode,
    seed: u64,
) -> Result<Vec<MetricRow>> {
    if examples.is_empty() {
        return Err(Error::contract("evaluation needs at least one example"));
    }
    let kmax = ks.iter().copied().max().ok_or_else(|| Error::contract("empty k list"))?;
    let preds = predict(model, examples, kmax, seed)?;
    let truth: Vec<Vec<[f64; 2]>> = examples.iter().map(|e| e.future.clone()).collect();
    metric_table(&truth, &preds, ks, mode)
}

/// Mean loss terms in inference mode with noise from the evaluation stream.
pub fn validation_loss<T: Real>(model: &Mmst<T>, examples: &[&Example], cfg: &TrainConfig) -> Result<StepStats> {
    let stats = model.feature_stats();
    let mut acc = StepStats::default();
    let mut r = rng::stream(cfg.seed, rng::streams::EVAL);
    for part in examples.chunks(cfg.batch_size) {
        let batch = make_batch::<T>(part, &stats, &model.config)?;
        let eps = gaussian_sample(&[batch.size * cfg.loss.n_train, model.config.cvae.latent], &mut r);
        let mut g = Graph::new();
        let (terms, _) = loss_graph(model, &mut g, &batch, eps, &cfg.loss, false)?;
        acc.loss += g.value(terms.total).item().to_f64_lossy();
        acc.mon += g.value(terms.mon).item().to_f64_lossy();
        acc.kl += g.value(terms.kl).item().to_f64_lossy();
    }
    let n = examples.len().max(1) as f64;
    Ok(StepStats {
        loss: acc.loss / n,
        mon: acc.mon / n,
        kl: acc.kl / n,
        gamma: 0.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_mon: f64,
    pub train_kl: f64,
    pub mean_gamma: f64,
    pub val_loss: f64,
    pub val_mon: f64,
    pub val_kl: f64,
    pub val_min_ade: f64,
    pub val_min_fde: f64,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Validation minADE of the freshly initialized model.
    pub initial_val_min_ade: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let map = |e: csv::Error| Error::Corrupt {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(map)?;
        for r in &self.epochs {
            w.serialize(r).map_err(map)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub struct FitOutput {
    /// Parameters from the epoch with the lowest validation minADE.
    pub best: Mmst<f32>,
    pub history: TrainHistory,
    pub stats: FeatureStats,
}

/// Trains from scratch on `train`, selecting by validation minADE.
/// `on_epoch` observes each record as it completes.
pub fn fit(
    cfg: &TrainConfig,
    train: &[Example],
    val: &[Example],
    mut on_epoch: impl FnMut(&EpochRecord, &Mmst<f32>),
) -> Result<FitOutput> {
    cfg.validate()?;
    if train.len() < 2 || val.is_empty() {
        return Err(Error::contract(format!(
            "fit needs at least 2 training and 1 validation example, got {}/{}",
            train.len(),
            val.len()
        )));
    }
    let start = Instant::now();
    let stats = fit_stats(train)?;
    let mut model = Mmst::<f32>::new(cfg.model.clone(), cfg.seed)?;
    model.set_feature_stats(&stats);
    let val_refs: Vec<&Example> = val.iter().collect();
    let val_metric = |m: &Mmst<f32>| -> Result<(f64, f64)> {
        let rows = evaluate(m, &val_refs, &[cfg.eval_k], MetricMode::Standard, cfg.seed)?;
        Ok((rows[0].min_ade, rows[0].min_fde))
    };
    let mut history = TrainHistory {
        initial_val_min_ade: val_metric(&model)?.0,
        ..TrainHistory::default()
    };
    let mut best = model.clone();
    let mut best_ade = f64::INFINITY;
    let bs = cfg.batch_size.min(train.len());
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::substream(cfg.seed, rng::streams::SHUFFLE, epoch as u64));
        let mut latent = rng::substream(cfg.seed, rng::streams::LATENT, epoch as u64);
        let mut acc = StepStats::default();
        let mut steps = 0;
        for idx in order.chunks_exact(bs) {
            let part: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
            let ids: Vec<&str> = part.iter().map(|e| e.id.as_str()).collect();
            let batch = make_batch::<f32>(&part, &stats, &cfg.model)?;
            let s = train_step(&mut model, &batch, cfg, &mut latent, &ids)?;
            acc.loss += s.loss;
            acc.mon += s.mon;
            acc.kl += s.kl;
            acc.gamma += s.gamma;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        let v = validation_loss(&model, &val_refs, cfg)?;
        let (ade, fde) = val_metric(&model)?;
        let record = EpochRecord {
            epoch,
            train_loss: acc.loss / n,
            train_mon: acc.mon / n,
            train_kl: acc.kl / n,
            mean_gamma: acc.gamma / n,
            val_loss: v.loss,
            val_mon: v.mon,
            val_kl: v.kl,
            val_min_ade: ade,
            val_min_fde: fde,
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train loss {:.3} (mon {:.3}, kl {:.3}), val minADE{} {ade:.3}",
            record.train_loss,
            record.train_mon,
            record.train_kl,
            cfg.eval_k
        );
        if ade < best_ade {
            best_ade = ade;
            best = model.clone();
            history.best_epoch = epoch;
        }
        on_epoch(&record, &model);
        history.epochs.push(record);
    }
    if cfg.epochs == 0 {
        best = model;
    }
    Ok(FitOutput { best, history, stats })
}

/// Random inputs with the shapes `cfg` expects. Raster cells are drawn
/// from `[0, 1)` rather than `{0, 1}` so that no convolution sits exactly on
/// the activation kink, which central differences cannot resolve.
pub fn random_batch<T: Real>(cfg: &ModelConfig, size: usize, rng: &mut Rng) -> Batch<T> {
    use rand::Rng as _;
    let (t, f) = (cfg.history_steps(), cfg.future_steps());
    let (lp, gp) = (cfg.raster.local_px, cfg.raster.global_px);
    let cells = |shape: &[usize], r: &mut Rng| {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| T::lit(r.random::<f64>())).collect()).expect("extent matches")
    };
    let local = cells(&[t * size, 4, lp, lp], rng);
    let global = cells(&[size, 1, gp, gp], rng);
    let states = gaussian_sample(&[t * size, 3], rng);
    let past = gaussian_sample::<T, _>(&[size, 2 * t], rng).map(|v| v * T::lit(5.0));
    let future = gaussian_sample::<T, _>(&[size, 2 * f], rng).map(|v| v * T::lit(10.0));
    Batch {
        size,
        steps: t,
        local,
        global,
        states,
        past,
        future,
    }
}

/// Finite-difference check of every parameter of the composed model
/// (encoders, recognition, generator and loss) at 64-bit precision.
pub fn model_gradcheck(cfg: &ModelConfig, loss: &LossConfig, seed: u64) -> Result<Report> {
    let model = Mmst::<f64>::new(cfg.clone(), seed)?;
    let mut r = rng::stream(seed, 1002);
    let mut batch = random_batch::<f64>(cfg, 3, &mut r);
    let eps: Tensor<f64> = gaussian_sample(&[3 * loss.n_train, cfg.cvae.latent], &mut r);
    // Targets near the model's own first sample keep the objective O(1), so
    // rounding in the central differences stays far below the gradients.
    {
        let mut g = Graph::new();
        let ctx = model.encode(&mut g, &batch)?;
        let z = g.constant(eps.clone());
        let idx: Vec<usize> = (0..3).map(|i| i * loss.n_train).collect();
        let z = g.gather(z, &idx)?;
        let y = model.generator.generate(&mut g, &model.store, z, ctx.cond, ctx.state)?;
        let jitter: Tensor<f64> = gaussian_sample(g.shape(y), &mut r);
        let data = g.value(y).data().iter().zip(jitter.data()).map(|(a, b)| a + 0.03 * b).collect();
        batch.future = Tensor::new(g.shape(y), data)?;
    }
    gradcheck::check_params(&format!("composed model (seed {seed})"), &model.store, |g, store| {
        let m = model.with_store(store.clone());
        let (terms, _) = loss_graph(&m, g, &batch, eps.clone(), loss, true)?;
        Ok(terms.total)
    })
}
