//! Experiment protocols over trained models: robustness to structural edge
//! noise, generalization-gap comparison, and the scaling, bottleneck, and
//! training-size sweeps.

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterKind, AdapterStack, ScaleMode, SCALE_INIT};
use crate::backbone::Backbone;
use crate::checkpoint::ModelBundle;
use crate::error::{Error, Result};
use crate::graph::perturb::{perturb_edges_add, perturb_edges_delete};
use crate::graph::{DatasetSplit, Graph};
use crate::numerics::params::ParamSet;
use crate::rng::RngTree;
use crate::training::finetune::{evaluate_graphs, finetune, FineTuneConfig, RunRecord};
use crate::training::metrics::macro_roc_auc;

pub const ROBUSTNESS_LEVELS: [f64; 5] = [0.0, 0.2, 0.4, 0.6, 0.8];
pub const SCALING_GRID: [f64; 5] = [0.01, 0.1, 0.5, 1.0, 5.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    Delete,
    Add,
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PerturbKind::Delete => "delete",
            PerturbKind::Add => "add",
        })
    }
}

/// One grid point of a sweep, aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis: String,
    pub value: f64,
    pub mean_auc: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std_auc: f64,
    pub n_seeds: usize,
    pub per_seed: Vec<f64>,
}

pub fn aggregate(axis: impl Into<String>, value: f64, per_seed: Vec<f64>) -> SweepPoint {
    let n = per_seed.len();
    let mean = per_seed.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (per_seed.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    SweepPoint {
        axis: axis.into(),
        value,
        mean_auc: mean,
        std_auc: std,
        n_seeds: n,
        per_seed,
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,value,mean_auc,std_auc,n_seeds\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.axis, p.value, p.mean_auc, p.std_auc, p.n_seeds
            ));
        }
        out
    }
}

/// Evaluate one trained model on structurally perturbed copies of the test
/// graphs. Seeds vary only the perturbation draws; the level-0 rows coincide
/// with clean evaluation bit for bit because zero-level perturbation is the
/// identity.
pub fn robustness_sweep(
    bundle: &mut ModelBundle,
    test_graphs: &[Graph],
    levels: &[f64],
    kinds: &[PerturbKind],
    seeds: &[u64],
) -> Result<SweepResult> {
    let head = bundle
        .head
        .clone()
        .ok_or_else(|| Error::Contract("robustness sweep needs a classifier head".to_string()))?;
    let adapters = bundle.adapters.clone();
    if test_graphs.is_empty() {
        return Err(Error::invalid("robustness_sweep", "no test graphs"));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("robustness_sweep", "no seeds"));
    }
    let mut points = Vec::new();
    for &kind in kinds {
        for (li, &level) in levels.iter().enumerate() {
            let mut per_seed = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let mut rng =
                    RngTree::new(seed).stream_indexed(&format!("robustness-{kind}"), li as u64);
                let perturbed: Vec<Graph> = test_graphs
                    .iter()
                    .map(|g| match kind {
                        PerturbKind::Delete => perturb_edges_delete(g, level, rng.gen()),
                        PerturbKind::Add => perturb_edges_add(g, level, rng.gen()),
                    })
                    .collect::<Result<_>>()?;
                let refs: Vec<&Graph> = perturbed.iter().collect();
                let out = evaluate_graphs(
                    &mut bundle.params,
                    &bundle.backbone,
                    adapters.as_ref(),
                    &head,
                    &refs,
                )?;
                per_seed.push(macro_roc_auc(&out.scores, &out.labels, &out.mask, out.n_tasks)?);
            }
            points.push(aggregate(kind.to_string(), level, per_seed));
        }
    }
    Ok(SweepResult { points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub epoch: usize,
    pub gap_gaussian: f64,
    pub gap_deterministic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapComparison {
    pub rows: Vec<GapRow>,
    /// Trailing epochs covered by the late means (20, or fewer on short runs).
    pub window: usize,
    pub late_gap_gaussian: f64,
    pub late_gap_deterministic: f64,
}

impl GapComparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,gap_gaussian,gap_deterministic\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{}\n",
                r.epoch, r.gap_gaussian, r.gap_deterministic
            ));
        }
        out
    }
}

/// Pair up the per-epoch generalization gaps of a Gaussian-adapter run and a
/// deterministic-adapter run trained under the same seed and data.
pub fn generalization_track(
    gaussian: &RunRecord,
    deterministic: &RunRecord,
) -> Result<GapComparison> {
    let n = gaussian.epochs.len();
    if n != deterministic.epochs.len() {
        return Err(Error::invalid(
            "generalization_track",
            format!(
                "epoch counts differ: {n} gaussian vs {} deterministic",
                deterministic.epochs.len()
            ),
        ));
    }
    if n == 0 {
        return Err(Error::invalid("generalization_track", "empty run records"));
    }
    let rows: Vec<GapRow> = gaussian
        .epochs
        .iter()
        .zip(&deterministic.epochs)
        .map(|(g, d)| GapRow {
            epoch: g.epoch,
            gap_gaussian: g.gap,
            gap_deterministic: d.gap,
        })
        .collect();
    let window = n.min(20);
    let late = &rows[n - window..];
    let late_gap_gaussian = late.iter().map(|r| r.gap_gaussian).sum::<f64>() / window as f64;
    let late_gap_deterministic =
        late.iter().map(|r| r.gap_deterministic).sum::<f64>() / window as f64;
    Ok(GapComparison {
        rows,
        window,
        late_gap_gaussian,
        late_gap_deterministic,
    })
}

/// Sweeps re-initialize adapters and head per run, so they need a parameter
/// set holding the backbone alone.
fn backbone_only(params: &ParamSet, backbone: &Backbone) -> Result<()> {
    if params.len() != backbone.param_ids().len() {
        return Err(Error::Contract(
            "sweep expects a backbone-only parameter set".to_string(),
        ));
    }
    Ok(())
}

/// One fine-tune on a fresh clone of the backbone parameters; gives the
/// best-validation test AUC, the trained adapters, and the final parameters.
fn run_once(
    backbone_params: &ParamSet,
    backbone: &Backbone,
    cfg: &FineTuneConfig,
    dataset: &[Graph],
    split: &DatasetSplit,
) -> Result<(f64, Option<AdapterStack>, ParamSet)> {
    let mut params = backbone_params.clone();
    let (adapters, _head, record) = finetune(&mut params, backbone, cfg, dataset, split)?;
    let auc = record
        .final_test_auc
        .ok_or_else(|| Error::invalid("sweep", "config has zero epochs"))?;
    Ok((auc, adapters, params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRun {
    pub axis: String,
    /// The fixed constant, or the 0.01 initialization for the learnable row.
    pub value: f64,
    pub seed: u64,
    pub final_test_auc: f64,
    /// Per-layer scale values after training.
    pub scales: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingAblation {
    pub runs: Vec<ScalingRun>,
    pub sweep: SweepResult,
}

/// One Gaussian fine-tune per fixed scale value plus one with the learnable
/// scale, each over every seed; everything else comes from the template.
pub fn scaling_ablation(
    backbone_params: &ParamSet,
    backbone: &Backbone,
    template: &FineTuneConfig,
    dataset: &[Graph],
    split: &DatasetSplit,
    fixed: &[f64],
    seeds: &[u64],
) -> Result<ScalingAblation> {
    backbone_only(backbone_params, backbone)?;
    if seeds.is_empty() {
        return Err(Error::invalid("scaling_ablation", "no seeds"));
    }
    let mut grid: Vec<(&'static str, f64, ScaleMode)> = fixed
        .iter()
        .map(|&c| ("scale_fixed", c, ScaleMode::Fixed(c)))
        .collect();
    grid.push(("scale_learnable", SCALE_INIT, ScaleMode::Learnable));
    let mut runs = Vec::new();
    let mut points = Vec::new();
    for (axis, value, mode) in grid {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = FineTuneConfig {
                adapter_kind: AdapterKind::Gaussian,
                scale_mode: mode,
                seed,
                ..template.clone()
            };
            let (auc, adapters, params) = run_once(backbone_params, backbone, &cfg, dataset, split)?;
            let scales = match adapters.expect("gaussian run returns adapters") {
                AdapterStack::Gaussian(layers) => layers
                    .iter()
                    .map(|a| params.data(a.scale)[0])
                    .collect(),
                _ => unreachable!("gaussian kind requested"),
            };
            per_seed.push(auc);
            runs.push(ScalingRun {
                axis: axis.to_string(),
                value,
                seed,
                final_test_auc: auc,
                scales,
            });
        }
        points.push(aggregate(axis, value, per_seed));
    }
    Ok(ScalingAblation {
        runs,
        sweep: SweepResult { points },
    })
}

/// Fine-tune on nested seed-deterministic subsets of the training split.
/// Subsets keep the original training order, so fraction 1.0 reproduces the
/// base run exactly and smaller fractions are strict subsets of larger ones
/// under the same seed.
pub fn size_sweep(
    backbone_params: &ParamSet,
    backbone: &Backbone,
    template: &FineTuneConfig,
    dataset: &[Graph],
    split: &DatasetSplit,
    fractions: &[f64],
    seeds: &[u64],
) -> Result<SweepResult> {
    backbone_only(backbone_params, backbone)?;
    if seeds.is_empty() {
        return Err(Error::invalid("size_sweep", "no seeds"));
    }
    let mut points = Vec::new();
    for &fraction in fractions {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(
                "size_sweep",
                format!("fraction {fraction} outside (0, 1]"),
            ));
        }
        let n_keep = (fraction * split.train.len() as f64).floor() as usize;
        if n_keep == 0 {
            return Err(Error::invalid(
                "size_sweep",
                format!("fraction {fraction} yields zero training graphs"),
            ));
        }
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let sub = subsample_train(split, fraction, seed);
            let cfg = FineTuneConfig {
                seed,
                ..template.clone()
            };
            let (auc, _, _) = run_once(backbone_params, backbone, &cfg, dataset, &sub)?;
            per_seed.push(auc);
        }
        points.push(aggregate("train_fraction", fraction, per_seed));
    }
    Ok(SweepResult { points })
}

/// Shuffled-prefix membership defines the subset; filtering the original
/// list by membership preserves its order.
pub fn subsample_train(split: &DatasetSplit, fraction: f64, seed: u64) -> DatasetSplit {
    let n_keep = (fraction * split.train.len() as f64).floor() as usize;
    let mut shuffled = split.train.clone();
    shuffled.shuffle(&mut RngTree::new(seed).stream("size-subsample"));
    let keep: HashSet<usize> = shuffled[..n_keep].iter().copied().collect();
    DatasetSplit {
        train: split
            .train
            .iter()
            .copied()
            .filter(|i| keep.contains(i))
            .collect(),
        validation: split.validation.clone(),
        test: split.test.clone(),
    }
}

/// Fine-tune across a grid of bottleneck widths.
pub fn bottleneck_sweep(
    backbone_params: &ParamSet,
    backbone: &Backbone,
    template: &FineTuneConfig,
    dataset: &[Graph],
    split: &DatasetSplit,
    grid: &[usize],
    seeds: &[u64],
) -> Result<SweepResult> {
    backbone_only(backbone_params, backbone)?;
    if seeds.is_empty() {
        return Err(Error::invalid("bottleneck_sweep", "no seeds"));
    }
    let mut points = Vec::new();
    for &d_mid in grid {
        if d_mid == 0 {
            return Err(Error::invalid("bottleneck_sweep", "d_mid must be positive"));
        }
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = FineTuneConfig {
                d_mid,
                seed,
                ..template.clone()
            };
            let (auc, _, _) = run_once(backbone_params, backbone, &cfg, dataset, split)?;
            per_seed.push(auc);
        }
        points.push(aggregate("d_mid", d_mid as f64, per_seed));
    }
    Ok(SweepResult { points })
}
