//! Ablation drivers (training-sample count, distance function, number of
//! prior samples) and the published full-scale reference numbers they are
//! reported against.

use serde::{Deserialize, Serialize};

use crate::data::example::Example;
use crate::error::{Error, Result};
use crate::model::Mmst;
use crate::objectives::{DistanceKind, MetricMode, MetricRow};
use crate::tensor::Real;
use crate::training::{evaluate, fit, FitOutput, TrainConfig};

/// Training-sample counts compared in the minimum-over-N ablation.
pub const MON_N_GRID: [usize; 5] = [16, 32, 64, 128, 256];
/// Blend weight of the combined distance in the distance ablation.
pub const DISTANCE_LAMBDA: f64 = 0.5;
/// Sample counts reported by both ablation tables.
pub const ABLATION_K: [usize; 4] = [10, 25, 50, 100];
/// Sample counts of the method comparison table.
pub const EVAL_K_GRID: [usize; 7] = [1, 5, 10, 20, 50, 100, 200];
/// Exponent range of the large-k sweep, `2^4 ..= 2^13`.
pub const K_SWEEP_EXPONENTS: (u32, u32) = (4, 13);

/// Powers of two `2^lo ..= 2^hi`.
pub fn k_sweep_grid(lo: u32, hi: u32) -> Vec<usize> {
    (lo..=hi).map(|e| 1usize << e).collect()
}

/// One published full-scale result (nuScenes, 360 epochs).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reference {
    pub setting: &'static str,
    pub k: usize,
    pub min_ade: f64,
    pub min_fde: f64,
}

const fn r(setting: &'static str, k: usize, min_ade: f64, min_fde: f64) -> Reference {
    Reference {
        setting,
        k,
        min_ade,
        min_fde,
    }
}

pub const MON_N_REFERENCE: [Reference; 20] = [
    r("n=16", 10, 1.77, 3.81),
    r("n=16", 25, 1.32, 2.51),
    r("n=16", 50, 1.09, 1.87),
    r("n=16", 100, 0.92, 1.38),
    r("n=32", 10, 1.82, 3.92),
    r("n=32", 25, 1.25, 2.42),
    r("n=32", 50, 1.05, 1.82),
    r("n=32", 100, 0.89, 1.32),
    r("n=64", 10, 1.99, 4.37),
    r("n=64", 25, 1.43, 2.79),
    r("n=64", 50, 1.14, 2.00),
    r("n=64", 100, 0.95, 1.46),
    r("n=128", 10, 2.07, 4.53),
    r("n=128", 25, 1.45, 2.84),
    r("n=128", 50, 1.17, 2.02),
    r("n=128", 100, 0.94, 1.44),
    r("n=256", 10, 2.19, 4.80),
    r("n=256", 25, 1.52, 3.00),
    r("n=256", 50, 1.19, 2.11),
    r("n=256", 100, 0.97, 1.50),
];

pub const DISTANCE_REFERENCE: [Reference; 12] = [
    r("L1", 10, 1.94, 4.00),
    r("L1", 25, 1.45, 2.72),
    r("L1", 50, 1.20, 2.05),
    r("L1", 100, 1.00, 1.51),
    r("L2", 10, 1.82, 3.92),
    r("L2", 25, 1.25, 2.42),
    r("L2", 50, 1.05, 1.82),
    r("L2", 100, 0.89, 1.32),
    r("lambda(L1+L2)", 10, 1.79, 3.83),
    r("lambda(L1+L2)", 25, 1.30, 2.49),
    r("lambda(L1+L2)", 50, 1.07, 1.81),
    r("lambda(L1+L2)", 100, 0.90, 1.36),
];

/// The final model row of the method comparison, trained with n = 32.
pub const EVAL_REFERENCE: [Reference; 7] = [
    r("n=32", 1, 6.34, 15.22),
    r("n=32", 5, 2.44, 5.51),
    r("n=32", 10, 1.82, 3.92),
    r("n=32", 20, 1.39, 2.76),
    r("n=32", 50, 1.05, 1.82),
    r("n=32", 100, 0.89, 1.32),
    r("n=32", 200, 0.78, 0.98),
];

/// Published trainable parameter count of the full model.
pub const REFERENCE_PARAMETERS: f64 = 7.4e6;

/// Label attached to every reference number in reports.
pub const REFERENCE_NOTE: &str = "Reference columns hold published full-scale nuScenes results \
     and are not comparable with desk-scale synthetic runs";

pub fn reference_for(table: &[Reference], setting: &str, k: usize) -> Option<Reference> {
    table.iter().copied().find(|r| r.setting == setting && r.k == k)
}

/// Train/validation/test examples of one dataset.
#[derive(Clone, Copy)]
pub struct Splits<'a> {
    pub train: &'a [Example],
    pub val: &'a [Example],
    pub test: &'a [Example],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub k: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub n_examples: usize,
    pub best_epoch: usize,
    pub parameters: usize,
}

fn run_setting(
    cfg: &TrainConfig,
    data: Splits,
    ks: &[usize],
    setting: String,
    on_fit: &mut dyn FnMut(&str, &TrainConfig, &FitOutput),
) -> Result<Vec<AblationRow>> {
    let out = fit(cfg, data.train, data.val, |_, _| {})?;
    on_fit(&setting, cfg, &out);
    let test: Vec<&Example> = data.test.iter().collect();
    let rows = evaluate(&out.best, &test, ks, MetricMode::Standard, cfg.seed)?;
    Ok(rows
        .into_iter()
        .map(|m| AblationRow {
            setting: setting.clone(),
            k: m.k,
            min_ade: m.min_ade,
            min_fde: m.min_fde,
            n_examples: m.n_examples,
            best_epoch: out.history.best_epoch,
            parameters: out.best.count_parameters(),
        })
        .collect())
}

fn check_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::parse("k", "k values must be a nonempty list of positive integers"));
    }
    Ok(())
}

/// Trains one model per training-sample count `n` and evaluates each on
/// the test split. `on_fit` sees every finished fit and its config, e.g.
/// to save it.
pub fn ablate_mon_n(
    cfg: &TrainConfig,
    data: Splits,
    n_values: &[usize],
    ks: &[usize],
    mut on_fit: impl FnMut(&str, &TrainConfig, &FitOutput),
) -> Result<Vec<AblationRow>> {
    check_ks(ks)?;
    let mut rows = Vec::new();
    for &n in n_values {
        let mut c = cfg.clone();
        c.loss.n_train = n;
        rows.extend(run_setting(&c, data, ks, format!("n={n}"), &mut on_fit)?);
    }
    Ok(rows)
}

/// Trains one model per distance function, with λ fixed at
/// [`DISTANCE_LAMBDA`] for the blend.
pub fn ablate_distance(
    cfg: &TrainConfig,
    data: Splits,
    kinds: &[DistanceKind],
    ks: &[usize],
    mut on_fit: impl FnMut(&str, &TrainConfig, &FitOutput),
) -> Result<Vec<AblationRow>> {
    check_ks(ks)?;
    let mut rows = Vec::new();
    for &kind in kinds {
        let mut c = cfg.clone();
        c.loss.distance = kind;
        c.loss.lambda = DISTANCE_LAMBDA;
        rows.extend(run_setting(&c, data, ks, kind.label().to_string(), &mut on_fit)?);
    }
    Ok(rows)
}

/// minADE/minFDE of one trained model at every `k` in `ks`, all computed
/// from a single draw of `max(ks)` samples per example.
pub fn sweep_k<T: Real>(model: &Mmst<T>, examples: &[Example], ks: &[usize], seed: u64) -> Result<Vec<MetricRow>> {
    check_ks(ks)?;
    let refs: Vec<&Example> = examples.iter().collect();
    evaluate(model, &refs, ks, MetricMode::Standard, seed)
}

/// True when both curves never increase with `k`.
pub fn nonincreasing(rows: &[MetricRow]) -> bool {
    rows.windows(2)
        .all(|w| w[1].min_ade <= w[0].min_ade && w[1].min_fde <= w[0].min_fde)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        assert_eq!(k_sweep_grid(4, 13).len(), 10);
        assert_eq!(k_sweep_grid(4, 13)[0], 16);
        assert_eq!(*k_sweep_grid(4, 13).last().unwrap(), 8192);
        let settings: std::collections::BTreeSet<_> = MON_N_REFERENCE.iter().map(|r| r.setting).collect();
        assert_eq!(settings.len(), MON_N_GRID.len());
        for n in MON_N_GRID {
            for k in ABLATION_K {
                assert!(reference_for(&MON_N_REFERENCE, &format!("n={n}"), k).is_some());
            }
        }
        for d in DistanceKind::ALL {
            for k in ABLATION_K {
                assert!(reference_for(&DISTANCE_REFERENCE, d.label(), k).is_some());
            }
        }
        assert_eq!(EVAL_REFERENCE.map(|r| r.k), EVAL_K_GRID);
    }

    #[test]
    fn shared_rows_agree_across_tables() {
        for k in ABLATION_K {
            let a = reference_for(&MON_N_REFERENCE, "n=32", k).unwrap();
            let b = reference_for(&DISTANCE_REFERENCE, "L2", k).unwrap();
            assert_eq!((a.min_ade, a.min_fde), (b.min_ade, b.min_fde));
        }
        let t3 = reference_for(&EVAL_REFERENCE, "n=32", 10).unwrap();
        assert_eq!((t3.min_ade, t3.min_fde), (1.82, 3.92));
    }

    #[test]
    fn monotone_check() {
        let row = |k, a, f| MetricRow {
            k,
            min_ade: a,
            min_fde: f,
            n_examples: 1,
        };
        assert!(nonincreasing(&[row(1, 3.0, 5.0), row(2, 3.0, 4.0)]));
        assert!(!nonincreasing(&[row(1, 3.0, 5.0), row(2, 3.1, 4.0)]));
    }
}
