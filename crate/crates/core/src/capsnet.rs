//! Capsule encoders: per-layer local map encodings fused with motion state
//! through an LSTM, and a separate capsule network over the global chunk.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::LayerType;
use crate::tensor::{uniform_var, Conv2d, Graph, Linear, LstmCell, ParamId, ParamStore, Real, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapsuleShape {
    pub caps: usize,
    pub dim: usize,
}

impl CapsuleShape {
    pub const fn new(caps: usize, dim: usize) -> Self {
        Self { caps, dim }
    }

    pub fn size(&self) -> usize {
        self.caps * self.dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapsNetConfig {
    pub conv_channels: Vec<usize>,
    pub lower: CapsuleShape,
    pub local_higher: CapsuleShape,
    pub local_final: CapsuleShape,
    pub global_higher: CapsuleShape,
    pub state_embed: usize,
    pub lstm_hidden: usize,
    /// Routing-by-agreement iterations between capsule layers; 0 uses a
    /// direct projection.
    pub routing_iters: usize,
}

impl Default for CapsNetConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![16, 32, 64],
            lower: CapsuleShape::new(8, 8),
            local_higher: CapsuleShape::new(4, 16),
            local_final: CapsuleShape::new(1, 32),
            global_higher: CapsuleShape::new(8, 16),
            state_embed: 16,
            lstm_hidden: 64,
            routing_iters: 0,
        }
    }
}

/// Stack of 3×3, stride-2, padding-1 convolutions with leaky ReLU, flattened.
#[derive(Clone, Debug)]
pub struct ConvBase {
    layers: Vec<Conv2d>,
    in_px: usize,
    out_features: usize,
}

impl ConvBase {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        px: usize,
        channels: &[usize],
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::new();
        let (mut c, mut hw) = (1, px);
        for (i, &out) in channels.iter().enumerate() {
            let conv = Conv2d::new(store, &format!("{name}.conv{i}"), c, out, 3, 2, 1, rng);
            // He initialization keeps activation scale through the stack.
            *store.value_mut(conv.weight) = uniform_var(&[out, c, 3, 3], 2.0 / (9 * c) as f64, rng);
            layers.push(conv);
            c = out;
            hw = (hw - 1) / 2 + 1;
        }
        Self {
            layers,
            in_px: px,
            out_features: c * hw * hw,
        }
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    /// `x: [N, 1, px, px]` to `[N, features]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 1 || s[2] != self.in_px || s[3] != self.in_px {
            return Err(Error::dim(format!(
                "conv base expects [N, 1, {0}, {0}], got {s:?}",
                self.in_px
            )));
        }
        let n = s[0];
        let mut h = x;
        for layer in &self.layers {
            let y = layer.forward(g, store, h)?;
            h = g.leaky_relu(y, T::lit(LEAKY_SLOPE));
        }
        g.reshape(h, &[n, self.out_features])
    }
}

/// Expected squared pre-squash norm of a capsule fed by unit-scale
/// features, for the first capsule layer after a convolutional base.
const FEATURE_GAIN: f64 = 4.0;

#[derive(Clone, Debug)]
enum Coupling {
    Dense(Linear),
    /// Per-input-capsule prediction matrices `[in_dim, caps·dim]`.
    Routed {
        weights: Vec<ParamId>,
        bias: ParamId,
        input: CapsuleShape,
        iters: usize,
    },
}

/// Capsule layer: projection to `caps × dim` followed by the squash
/// non-linearity per capsule.
#[derive(Clone, Debug)]
pub struct CapsuleLayer {
    coupling: Coupling,
    pub shape: CapsuleShape,
}

impl CapsuleLayer {
    pub fn dense<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        shape: CapsuleShape,
        rng: &mut R,
    ) -> Self {
        let lin = Linear::new(store, name, in_features, shape.size(), rng);
        let var = FEATURE_GAIN / (shape.dim * in_features) as f64;
        *store.value_mut(lin.weight) = uniform_var(&[in_features, shape.size()], var, rng);
        Self {
            coupling: Coupling::Dense(lin),
            shape,
        }
    }

    /// Dense when `iters == 0`, routing-by-agreement otherwise.
    pub fn from_capsules<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: CapsuleShape,
        shape: CapsuleShape,
        iters: usize,
        rng: &mut R,
    ) -> Self {
        // With pre-squash norm 3× the mean input capsule norm, squash has a
        // stable fixed point near 0.87; smaller gains let the norm decay
        // through stacked layers because squash squares small norms.
        if iters == 0 {
            let lin = Linear::new(store, name, input.size(), shape.size(), rng);
            let var = 9.0 / (shape.dim * input.caps) as f64;
            *store.value_mut(lin.weight) = uniform_var(&[input.size(), shape.size()], var, rng);
            return Self {
                coupling: Coupling::Dense(lin),
                shape,
            };
        }
        let var = 9.0 * (shape.caps * shape.caps) as f64 / (input.caps * shape.dim) as f64;
        let weights = (0..input.caps)
            .map(|i| {
                store.add(
                    &format!("{name}.route{i}.weight"),
                    uniform_var(&[input.dim, shape.size()], var, rng),
                )
            })
            .collect();
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[shape.caps, shape.dim]));
        Self {
            coupling: Coupling::Routed {
                weights,
                bias,
                input,
                iters,
            },
            shape,
        }
    }

    pub fn out_features(&self) -> usize {
        self.shape.size()
    }

    /// `[N, in]` to squashed `[N, caps·dim]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = g.shape(x)[0];
        let CapsuleShape { caps, dim } = self.shape;
        let s = match &self.coupling {
            Coupling::Dense(lin) => {
                let y = lin.forward(g, store, x)?;
                g.reshape(y, &[n, caps, dim])?
            }
            Coupling::Routed {
                weights,
                bias,
                input,
                iters,
            } => return self.route(g, store, x, weights, *bias, *input, *iters),
        };
        let v = g.squash(s, 2)?;
        g.reshape(v, &[n, caps * dim])
    }

    #[allow(clippy::too_many_arguments)]
    fn route<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        weights: &[ParamId],
        bias: ParamId,
        input: CapsuleShape,
        iters: usize,
    ) -> Result<Var> {
        let n = g.shape(x)[0];
        let CapsuleShape { caps, dim } = self.shape;
        if g.shape(x)[1] != input.size() {
            return Err(Error::dim(format!(
                "routed capsule layer expects {} inputs, got {}",
                input.size(),
                g.shape(x)[1]
            )));
        }
        let mut preds = Vec::with_capacity(input.caps);
        for (i, &w) in weights.iter().enumerate() {
            let u = g.narrow(x, 1, i * input.dim, input.dim)?;
            let w = g.param(store, w);
            let p = g.matmul(u, w)?;
            preds.push(g.reshape(p, &[n, 1, caps, dim])?);
        }
        let u_hat = g.concat(&preds, 1)?;
        let b_s = g.param(store, bias);
        let mut logits = g.constant(Tensor::zeros(&[n, input.caps, caps, 1]));
        let mut v = None;
        for it in 0..iters {
            let c = g.softmax(logits, 2)?;
            let weighted = g.mul(c, u_hat)?;
            let s = g.sum_axis(weighted, 1)?;
            let s = g.add(s, b_s)?;
            let out = g.squash(s, 2)?;
            v = Some(out);
            if it + 1 < iters {
                let vb = g.reshape(out, &[n, 1, caps, dim])?;
                let agree = g.mul(u_hat, vb)?;
                let agree = g.sum_axis(agree, 3)?;
                let agree = g.reshape(agree, &[n, input.caps, caps, 1])?;
                logits = g.add(logits, agree)?;
            }
        }
        g.reshape(v.expect("iters > 0"), &[n, caps * dim])
    }
}

/// Local map and motion-state encoder. The convolutional base and lower
/// capsules are shared by every layer type; each type has its own higher
/// capsule head.
#[derive(Clone, Debug)]
pub struct LocalEncoder {
    pub base: ConvBase,
    pub lower: CapsuleLayer,
    pub higher: Vec<CapsuleLayer>,
    pub fuse: CapsuleLayer,
    pub state_embed: Linear,
    pub lstm: LstmCell,
    px: usize,
}

impl LocalEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &CapsNetConfig,
        px: usize,
        rng: &mut R,
    ) -> Self {
        let base = ConvBase::new(store, "local.base", px, &cfg.conv_channels, rng);
        let lower = CapsuleLayer::dense(store, "local.lower", base.out_features(), cfg.lower, rng);
        let higher = LayerType::ALL
            .iter()
            .map(|t| {
                CapsuleLayer::from_capsules(
                    store,
                    &format!("local.higher.{}", t.name()),
                    cfg.lower,
                    cfg.local_higher,
                    cfg.routing_iters,
                    rng,
                )
            })
            .collect();
        let stacked = CapsuleShape::new(cfg.local_higher.caps * LayerType::COUNT, cfg.local_higher.dim);
        let fuse = CapsuleLayer::from_capsules(store, "local.final", stacked, cfg.local_final, cfg.routing_iters, rng);
        let state_embed = Linear::new(store, "state.embed", 3, cfg.state_embed, rng);
        let lstm = LstmCell::new(
            store,
            "state.lstm",
            cfg.local_final.size() + cfg.state_embed,
            cfg.lstm_hidden,
            rng,
        );
        Self {
            base,
            lower,
            higher,
            fuse,
            state_embed,
            lstm,
            px,
        }
    }

    pub fn hidden(&self) -> usize {
        self.lstm.hidden
    }

    /// Shared trunk: `[N, 1, h, w]` rasters to lower capsules.
    pub fn lower_capsules<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, rasters: Var) -> Result<Var> {
        let f = self.base.forward(g, store, rasters)?;
        self.lower.forward(g, store, f)
    }

    /// Higher capsule vector of layer type `layer` for `[N, 1, h, w]` rasters.
    pub fn encode_semantic_layer<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        rasters: Var,
        layer: usize,
    ) -> Result<Var> {
        let head = self
            .higher
            .get(layer)
            .ok_or_else(|| Error::contract(format!("unknown layer type index {layer}")))?;
        let low = self.lower_capsules(g, store, rasters)?;
        head.forward(g, store, low)
    }

    /// `[N, 4, h, w]` stacks to final capsule vectors `[N, final]`.
    pub fn encode_local_map<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, stack: Var) -> Result<Var> {
        let s = g.shape(stack).to_vec();
        if s.len() != 4 || s[1] != LayerType::COUNT {
            return Err(Error::contract(format!(
                "local stack needs {} layer channels, got shape {s:?}",
                LayerType::COUNT
            )));
        }
        let n = s[0];
        // Row r·4 + i holds layer type i of stack r.
        let flat = g.reshape(stack, &[n * LayerType::COUNT, 1, s[2], s[3]])?;
        let low = self.lower_capsules(g, store, flat)?;
        let mut per_type = Vec::with_capacity(LayerType::COUNT);
        for (i, head) in self.higher.iter().enumerate() {
            let idx: Vec<usize> = (0..n).map(|r| r * LayerType::COUNT + i).collect();
            let rows = g.gather(low, &idx)?;
            per_type.push(head.forward(g, store, rows)?);
        }
        let cat = g.concat(&per_type, 1)?;
        self.fuse.forward(g, store, cat)
    }

    /// Final LSTM hidden state `[B, hidden]` from local stacks
    /// `[T·B, 4, h, w]` and standardized states `[T·B, 3]`, both ordered
    /// time-major (row `t·B + b`).
    pub fn encode_state<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        stack: Var,
        states: Var,
        steps: usize,
    ) -> Result<Var> {
        let rows = g.shape(stack)[0];
        if steps == 0 || g.shape(states)[0] != rows || !rows.is_multiple_of(steps) {
            return Err(Error::contract(format!(
                "{rows} map rows and {} state rows do not cover {steps} timesteps",
                g.shape(states)[0]
            )));
        }
        if g.shape(stack)[2] != self.px {
            return Err(Error::dim(format!("local raster size {} vs {}", g.shape(stack)[2], self.px)));
        }
        let b = rows / steps;
        let maps = self.encode_local_map(g, store, stack)?;
        let emb = self.state_embed.forward(g, store, states)?;
        let emb = g.leaky_relu(emb, T::lit(LEAKY_SLOPE));
        let x = g.concat(&[maps, emb], 1)?;
        let hidden = self.hidden();
        let mut h = g.constant(Tensor::zeros(&[b, hidden]));
        let mut c = g.constant(Tensor::zeros(&[b, hidden]));
        for t in 0..steps {
            let xt = g.narrow(x, 0, t * b, b)?;
            (h, c) = self.lstm.step(g, store, xt, h, c)?;
        }
        Ok(h)
    }
}

/// Capsule network over the merged global chunk.
#[derive(Clone, Debug)]
pub struct GlobalEncoder {
    pub base: ConvBase,
    pub lower: CapsuleLayer,
    pub higher: CapsuleLayer,
}

impl GlobalEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &CapsNetConfig,
        px: usize,
        rng: &mut R,
    ) -> Self {
        let base = ConvBase::new(store, "global.base", px, &cfg.conv_channels, rng);
        let lower = CapsuleLayer::dense(store, "global.lower", base.out_features(), cfg.lower, rng);
        let higher =
            CapsuleLayer::from_capsules(store, "global.higher", cfg.lower, cfg.global_higher, cfg.routing_iters, rng);
        Self { base, lower, higher }
    }

    pub fn out_features(&self) -> usize {
        self.higher.out_features()
    }

    /// `[B, 1, H, W]` to the flattened higher capsules `[B, caps·dim]`.
    pub fn encode_global<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, chunk: Var) -> Result<Var> {
        let f = self.base.forward(g, store, chunk)?;
        let low = self.lower.forward(g, store, f)?;
        self.higher.forward(g, store, low)
    }
}

/// Largest capsule magnitude in a `[N, caps·dim]` output.
pub fn max_capsule_norm<T: Real>(out: &Tensor<T>, shape: CapsuleShape) -> f64 {
    out.data()
        .chunks_exact(shape.dim)
        .map(|c| c.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}
