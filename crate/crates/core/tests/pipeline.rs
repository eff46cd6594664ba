use proptest::prelude::*;

use mmst::cvae::PredictionSet;
use mmst::data::example::{build_examples, fit_stats, make_batch, Example};
use mmst::data::scene::{scene_from_json, scene_to_json};
use mmst::data::synth::{generate_scene, SceneSpec};
use mmst::model::{ModelConfig, Mmst};
use mmst::objectives::{min_ade, min_fde, MetricMode};
use mmst::tensor::{checkpoint, Tensor};
use mmst::training::{predict, train_step, TrainConfig};

fn tiny_examples(scenes: u64) -> Vec<Example> {
    let cfg = ModelConfig::tiny();
    let all: Vec<_> = (0..scenes).map(|i| generate_scene(1, i, &SceneSpec::default()).unwrap()).collect();
    let refs: Vec<_> = all.iter().enumerate().collect();
    build_examples(&refs, &cfg).unwrap().0
}

#[test]
fn scene_to_prediction() {
    let cfg = ModelConfig::tiny();
    let examples = tiny_examples(2);
    assert!(examples.len() >= 4);
    let stats = fit_stats(&examples).unwrap();
    let mut model = Mmst::<f32>::new(cfg.clone(), 0).unwrap();
    model.set_feature_stats(&stats);
    let refs: Vec<&Example> = examples.iter().take(3).collect();
    let a = predict(&model, &refs, 6, 9).unwrap();
    let b = predict(&model, &refs, 6, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 3);
    for set in &a {
        assert_eq!(set.k(), 6);
        assert_eq!(set.steps, cfg.future_steps());
        assert!(set.points.iter().flatten().all(|v| v.is_finite()));
    }
    assert_ne!(a, predict(&model, &refs, 6, 10).unwrap());
}

#[test]
fn training_steps_are_reproducible() {
    let cfg = TrainConfig {
        model: ModelConfig::tiny(),
        ..TrainConfig::default()
    };
    let examples = tiny_examples(2);
    let stats = fit_stats(&examples).unwrap();
    let part: Vec<&Example> = examples.iter().take(4).collect();
    let batch = make_batch::<f32>(&part, &stats, &cfg.model).unwrap();
    let run = || {
        let mut model = Mmst::<f32>::new(cfg.model.clone(), 5).unwrap();
        model.set_feature_stats(&stats);
        let mut r = mmst::rng::stream(5, mmst::rng::streams::LATENT);
        let losses: Vec<f64> = (0..3)
            .map(|_| train_step(&mut model, &batch, &cfg, &mut r, &[]).unwrap().loss)
            .collect();
        (losses, checkpoint::to_bytes(model.store.iter()))
    };
    let (la, ba) = run();
    let (lb, bb) = run();
    assert_eq!(la, lb);
    assert_eq!(ba, bb);
    assert!(la.iter().all(|l| l.is_finite() && *l >= 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_never_grow_with_k(
        truth in prop::collection::vec(prop::array::uniform2(-30.0f64..30.0), 12),
        samples in prop::collection::vec(prop::array::uniform2(-30.0f64..30.0), 12 * 16),
    ) {
        let truths = vec![truth];
        let sets = vec![PredictionSet { steps: 12, points: samples }];
        let mut prev = (f64::INFINITY, f64::INFINITY);
        for k in 1..=16 {
            let ade = min_ade(&truths, &sets, k, MetricMode::Standard).unwrap();
            let fde = min_fde(&truths, &sets, k, MetricMode::Standard).unwrap();
            prop_assert!(ade <= prev.0 && fde <= prev.1);
            prop_assert!(ade >= 0.0 && fde >= 0.0);
            prev = (ade, fde);
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        shape in prop::collection::vec(1usize..5, 1..4),
        seed in any::<u64>(),
    ) {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|i| f32::from_bits((seed as u32).wrapping_add(i as u32 * 2_654_435_761) & 0x7f7f_ffff)).collect();
        let t = Tensor::new(&shape, data).unwrap();
        let bytes = checkpoint::to_bytes([("w", &t)]);
        let back = checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.len(), 1);
        prop_assert_eq!(&back[0].0, "w");
        prop_assert_eq!(back[0].1.shape(), t.shape());
        prop_assert!(back[0].1.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generated_scenes_survive_json(seed in any::<u64>(), index in 0u64..1000) {
        let scene = generate_scene(seed, index, &SceneSpec::default()).unwrap();
        let text = scene_to_json(&scene);
        let back = scene_from_json(&text).unwrap();
        prop_assert_eq!(scene_to_json(&back), text);
        prop_assert_eq!(back, scene);
    }
}
