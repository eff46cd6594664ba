//! Training examples anchored at one pose of one track, and batching.

use std::collections::BTreeMap;

use super::scene::Scene;
use crate::error::{Error, Result};
use crate::geometry::{motion_features, standardize, FeatureStats, MotionState, Pose};
use crate::model::{Batch, ModelConfig};
use crate::raster::{global_chunk, local_chunk_stack, LayerType};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub scene: usize,
    pub track: u32,
    /// Index of the anchor pose within the track.
    pub anchor: usize,
    /// Global pose at the anchor; the origin of the agent frame.
    pub anchor_pose: Pose,
    /// Raw motion states over the past window; standardized at batching.
    pub states: Vec<MotionState>,
    /// Past positions in the agent frame, ending at the origin.
    pub past: Vec<[f64; 2]>,
    /// Future positions in the agent frame.
    pub future: Vec<[f64; 2]>,
    /// `[1, H, W]` merged global chunk.
    pub global: Tensor<f32>,
    /// `[T, 4, h, w]` local chunks along the past.
    pub local: Tensor<f32>,
}

pub fn example_id(scene: usize, track: u32, anchor: usize) -> String {
    format!("s{scene:04}-a{track}-t{anchor:03}")
}

impl Example {
    /// Checks lengths, anchoring and finiteness.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let (t, f) = (cfg.history_steps(), cfg.future_steps());
        let (lp, gp) = (cfg.raster.local_px, cfg.raster.global_px);
        if self.past.len() != t || self.states.len() != t || self.future.len() != f {
            return Err(Error::contract(format!("{}: wrong horizon lengths", self.id)));
        }
        if self.local.shape() != [t, LayerType::COUNT, lp, lp] || self.global.shape() != [1, gp, gp] {
            return Err(Error::contract(format!("{}: wrong raster shapes", self.id)));
        }
        let last = self.past[t - 1];
        if last[0].abs() > 1e-9 || last[1].abs() > 1e-9 {
            return Err(Error::contract(format!("{}: past does not end at the origin", self.id)));
        }
        let finite = self.past.iter().chain(&self.future).flatten().all(|v| v.is_finite())
            && self.states.iter().all(|s| s.to_array().iter().all(|v| v.is_finite()))
            && self.local.all_finite()
            && self.global.all_finite();
        if !finite {
            return Err(Error::NonFinite(format!("example {}", self.id)));
        }
        Ok(())
    }
}

/// Builds the example for `track` anchored at pose index `anchor`.
pub fn build_example(scene: &Scene, scene_index: usize, track: u32, anchor: usize, cfg: &ModelConfig) -> Result<Example> {
    let tr = scene
        .track(track)
        .ok_or_else(|| Error::contract(format!("scene {scene_index} has no track {track}")))?;
    let (t, f) = (cfg.history_steps(), cfg.future_steps());
    if anchor + 1 < t {
        return Err(Error::InsufficientHistory {
            needed: t,
            got: anchor + 1,
        });
    }
    let avail = tr.poses.len().saturating_sub(anchor + 1);
    if avail < f {
        return Err(Error::InsufficientFuture { needed: f, got: avail });
    }
    let origin = tr.poses[anchor];
    let past_poses = &tr.poses[anchor + 1 - t..=anchor];
    let states = motion_features(past_poses, 1.0 / scene.rate_hz)?;
    let past = past_poses.iter().map(|p| origin.to_local(p.position())).collect();
    let future = tr.poses[anchor + 1..=anchor + f]
        .iter()
        .map(|p| origin.to_local(p.position()))
        .collect();
    let g = global_chunk(&scene.map, origin, &cfg.raster)?;
    let global = Tensor::new(&[1, g.rows, g.cols], g.data)?;
    let local = local_chunk_stack(&scene.map, past_poses, t, &cfg.raster)?;
    Ok(Example {
        id: example_id(scene_index, track, anchor),
        scene: scene_index,
        track,
        anchor,
        anchor_pose: origin,
        states,
        past,
        future,
        global,
        local,
    })
}

/// Anchor indices for a track of `len` poses: every `stride` steps from the
/// first index with full history, while the full future is available.
pub fn anchors(len: usize, history: usize, future: usize, stride: usize) -> Vec<usize> {
    (history.saturating_sub(1)..len)
        .step_by(stride.max(1))
        .take_while(|&i| i + future < len)
        .collect()
}

/// Examples from every track of every scene, anchored once per second.
/// Tracks too short for any anchor are counted by reason.
pub fn build_examples(
    scenes: &[(usize, &Scene)],
    cfg: &ModelConfig,
) -> Result<(Vec<Example>, BTreeMap<&'static str, usize>)> {
    let (t, f) = (cfg.history_steps(), cfg.future_steps());
    let mut out = Vec::new();
    let mut skipped = BTreeMap::new();
    for &(index, scene) in scenes {
        let stride = scene.rate_hz.round().max(1.0) as usize;
        for tr in &scene.tracks {
            let list = anchors(tr.poses.len(), t, f, stride);
            if list.is_empty() {
                let reason = if tr.poses.len() < t {
                    "insufficient_history"
                } else {
                    "insufficient_future"
                };
                *skipped.entry(reason).or_insert(0) += 1;
                continue;
            }
            for a in list {
                out.push(build_example(scene, index, tr.id, a, cfg)?);
            }
        }
    }
    Ok((out, skipped))
}

/// Motion-state statistics over a set of examples.
pub fn fit_stats<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Result<FeatureStats> {
    FeatureStats::fit(examples.into_iter().flat_map(|e| e.states.iter()))
}

fn flatten(points: &[[f64; 2]]) -> impl Iterator<Item = f64> + '_ {
    points.iter().flat_map(|p| [p[0], p[1]])
}

/// Stacks examples into model inputs with time-major local and state rows.
pub fn make_batch<T: Real>(examples: &[&Example], stats: &FeatureStats, cfg: &ModelConfig) -> Result<Batch<T>> {
    let b = examples.len();
    if b == 0 {
        return Err(Error::DegenerateBatch(0));
    }
    let (t, f) = (cfg.history_steps(), cfg.future_steps());
    let (lp, gp) = (cfg.raster.local_px, cfg.raster.global_px);
    let frame = LayerType::COUNT * lp * lp;
    for e in examples {
        e.validate(cfg)?;
    }
    let mut local = vec![T::zero(); t * b * frame];
    let mut states = vec![T::zero(); t * b * 3];
    for (j, e) in examples.iter().enumerate() {
        let z = standardize(&e.states, stats)?;
        for s in 0..t {
            let row = s * b + j;
            for (dst, &v) in local[row * frame..(row + 1) * frame]
                .iter_mut()
                .zip(&e.local.data()[s * frame..(s + 1) * frame])
            {
                *dst = T::lit(v as f64);
            }
            for c in 0..3 {
                states[row * 3 + c] = T::lit(z.data()[s * 3 + c]);
            }
        }
    }
    let global: Vec<T> = examples
        .iter()
        .flat_map(|e| e.global.data().iter().map(|&v| T::lit(v as f64)))
        .collect();
    let past: Vec<T> = examples.iter().flat_map(|e| flatten(&e.past)).map(T::lit).collect();
    let future: Vec<T> = examples.iter().flat_map(|e| flatten(&e.future)).map(T::lit).collect();
    Ok(Batch {
        size: b,
        steps: t,
        local: Tensor::new(&[t * b, LayerType::COUNT, lp, lp], local)?,
        global: Tensor::new(&[b, 1, gp, gp], global)?,
        states: Tensor::new(&[t * b, 3], states)?,
        past: Tensor::new(&[b, 2 * t], past)?,
        future: Tensor::new(&[b, 2 * f], future)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_scene, SceneSpec};

    fn small_cfg() -> ModelConfig {
        ModelConfig::tiny()
    }

    #[test]
    fn anchor_rule() {
        assert_eq!(anchors(35, 5, 12, 2), vec![4, 6, 8, 10, 12, 14, 16, 18, 20, 22]);
        assert!(anchors(16, 5, 12, 2).is_empty());
        assert_eq!(anchors(17, 5, 12, 2), vec![4]);
    }

    #[test]
    fn frame_anchoring_and_lengths() {
        let cfg = ModelConfig {
            raster: ModelConfig::default().raster,
            ..small_cfg()
        };
        let scene = generate_scene(4, 0, &SceneSpec::default()).unwrap();
        let tr = &scene.tracks[0];
        let e = build_example(&scene, 0, tr.id, 10, &cfg).unwrap();
        assert_eq!(e.past.len(), 5);
        assert_eq!(e.future.len(), 12);
        assert_eq!(e.past[4], [0.0, 0.0]);
        e.validate(&cfg).unwrap();
        for (i, y) in e.future.iter().enumerate() {
            let g = e.anchor_pose.to_global(*y);
            let truth = tr.poses[11 + i].position();
            assert!((g[0] - truth[0]).abs() < 1e-9 && (g[1] - truth[1]).abs() < 1e-9);
        }
        assert_eq!(e.id, "s0000-a0-t010");
    }

    #[test]
    fn insufficient_windows() {
        let cfg = small_cfg();
        let scene = generate_scene(4, 0, &SceneSpec::default()).unwrap();
        assert!(matches!(
            build_example(&scene, 0, 0, 2, &cfg),
            Err(Error::InsufficientHistory { needed: 5, got: 3 })
        ));
        assert!(matches!(
            build_example(&scene, 0, 0, 30, &cfg),
            Err(Error::InsufficientFuture { needed: 12, got: 4 })
        ));
    }

    #[test]
    fn batch_layout_is_time_major() {
        let cfg = small_cfg();
        let scene = generate_scene(4, 1, &SceneSpec::default()).unwrap();
        let (ex, skipped) = build_examples(&[(1, &scene)], &cfg).unwrap();
        assert_eq!(ex.len(), 20);
        assert!(skipped.is_empty());
        let stats = fit_stats(&ex).unwrap();
        let refs: Vec<&Example> = ex.iter().take(3).collect();
        let batch = make_batch::<f64>(&refs, &stats, &cfg).unwrap();
        let frame = 4 * 8 * 8;
        for s in 0..5 {
            for j in 0..3 {
                let row = s * 3 + j;
                let got = &batch.local.data()[row * frame..(row + 1) * frame];
                let want = &refs[j].local.data()[s * frame..(s + 1) * frame];
                assert!(got.iter().zip(want).all(|(a, b)| *a == *b as f64));
                let z = standardize(&refs[j].states, &stats).unwrap();
                assert_eq!(&batch.states.data()[row * 3..row * 3 + 3], &z.data()[s * 3..s * 3 + 3]);
            }
        }
        assert_eq!(batch.future.data()[2 * 12], refs[1].future[0][0]);
        assert!(matches!(make_batch::<f32>(&[], &stats, &cfg), Err(Error::DegenerateBatch(0))));
    }
}
