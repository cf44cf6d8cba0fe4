//! Adapter fine-tuning against a frozen backbone (or full fine-tuning when
//! no adapters are requested), with per-epoch loss/AUC tracking.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterKind, AdapterStack, NoiseMode, NoiseSource, ScaleMode};
use crate::backbone::{forward_pass, Backbone, ClassifierHead};
use crate::error::{Error, Result};
use crate::graph::{batch, DatasetSplit, Graph};
use crate::numerics::batchnorm::BnMode;
use crate::numerics::params::ParamSet;
use crate::numerics::tape::{Tape, Tensor};
use crate::numerics::Adam;
use crate::rng::RngTree;
use crate::training::metrics::{macro_roc_auc, per_task_roc_auc};

/// Fine-tuning hyperparameters. The reference grids are lr in
/// {0.001, 0.005}, d_mid in {15, 20, 30}, and k in {1, 3, 5, 7}; smaller
/// values are accepted for fast desk runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub d_mid: usize,
    /// Noise draws per batch for the Gaussian adapter; the k losses are
    /// averaged before the backward pass. Ignored by other adapter kinds.
    pub k: usize,
    pub scale_mode: ScaleMode,
    pub adapter_kind: AdapterKind,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            lr: 0.001,
            epochs: 100,
            batch_size: 32,
            d_mid: 15,
            k: 1,
            scale_mode: ScaleMode::Learnable,
            adapter_kind: AdapterKind::Gaussian,
            seed: 0,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("FineTuneConfig", "lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("FineTuneConfig", "batch_size must be positive"));
        }
        if self.d_mid == 0 {
            return Err(Error::invalid("FineTuneConfig", "d_mid must be positive"));
        }
        if self.k == 0 {
            return Err(Error::invalid("FineTuneConfig", "k must be positive"));
        }
        if let ScaleMode::Fixed(c) = self.scale_mode {
            if !c.is_finite() {
                return Err(Error::invalid("FineTuneConfig", "fixed scale must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Train-split loss at epoch end, eval mode (stored statistics, zero
    /// noise), same criterion as val_loss so the gap isolates
    /// generalization.
    pub train_loss: f64,
    pub val_loss: f64,
    /// val_loss - train_loss.
    pub gap: f64,
    pub val_auc: f64,
    /// Macro-averaged over tasks with both classes observed.
    pub test_auc: f64,
    /// Per-task test AUC; None where a task was single-class or unobserved.
    pub test_auc_per_task: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) with the highest validation AUC; earliest on ties.
    pub best_epoch: Option<usize>,
    /// Test AUC at the best-validation epoch.
    pub final_test_auc: Option<f64>,
}

impl RunRecord {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,gap,test_auc\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.val_loss, e.gap, e.test_auc
            ));
        }
        out
    }
}

/// Closed-form trainable-value count for an adapter fine-tune: per layer
/// both projection matrices per branch plus BN affines (and the scale when
/// learnable), plus the head. None for full fine-tuning, where the count is
/// whatever the backbone holds.
pub fn trainable_count(
    kind: AdapterKind,
    scale_mode: ScaleMode,
    n_layers: usize,
    d: usize,
    d_mid: usize,
    n_tasks: usize,
) -> Option<usize> {
    let head = d * n_tasks + n_tasks;
    match kind {
        AdapterKind::None => None,
        // w_down + w_up and two BN affine pairs (bn_out, bn_y).
        AdapterKind::Deterministic => Some(n_layers * (2 * d_mid * d + 4 * d) + head),
        // Two branches of w_down + w_up, three BN affine pairs (mean, std,
        // bn_y), and the scale scalar when learnable.
        AdapterKind::Gaussian => {
            let scale = match scale_mode {
                ScaleMode::Learnable => 1,
                ScaleMode::Fixed(_) => 0,
            };
            Some(n_layers * (4 * d_mid * d + 6 * d + scale) + head)
        }
    }
}

fn check_split(split: &DatasetSplit, n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for (name, part) in [
        ("train", &split.train),
        ("validation", &split.validation),
        ("test", &split.test),
    ] {
        if part.is_empty() {
            return Err(Error::invalid("finetune", format!("empty {name} split")));
        }
        for &i in part {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    what: "split index",
                    index: i,
                    limit: n,
                });
            }
            if seen[i] {
                return Err(Error::invalid(
                    "finetune",
                    format!("graph {i} appears in more than one split"),
                ));
            }
            seen[i] = true;
        }
    }
    Ok(())
}

/// Raw model outputs on a graph set: logits row-major (graph x task) plus the
/// matching labels and observation mask.
pub struct EvalOutput {
    pub loss: f64,
    pub scores: Vec<f64>,
    pub labels: Vec<f64>,
    pub mask: Vec<f64>,
    pub n_tasks: usize,
}

/// Eval-mode (stored statistics, zero noise) loss and logits on a graph set.
pub fn evaluate_graphs(
    params: &mut ParamSet,
    backbone: &Backbone,
    adapters: Option<&AdapterStack>,
    head: &ClassifierHead,
    graphs: &[&Graph],
) -> Result<EvalOutput> {
    let batched = batch(graphs)?;
    let mut tape = Tape::new();
    let mut noise = NoiseSource::zero();
    let logits = forward_pass(
        &mut tape,
        params,
        backbone,
        head,
        adapters,
        &batched,
        BnMode::Eval,
        &mut noise,
    )?;
    let scores = tape.value(logits).to_vec();
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("evaluate", "non-finite logits"));
    }
    let labels_t = tape.constant(batched.labels.clone(), batched.num_graphs, batched.n_tasks);
    let mask_t = tape.constant(batched.label_mask.clone(), batched.num_graphs, batched.n_tasks);
    let loss_t = tape.bce_with_logits_masked(logits, labels_t, mask_t)?;
    Ok(EvalOutput {
        loss: tape.value(loss_t)[0],
        scores,
        labels: batched.labels,
        mask: batched.label_mask,
        n_tasks: batched.n_tasks,
    })
}

fn evaluate_subset(
    params: &mut ParamSet,
    backbone: &Backbone,
    adapters: Option<&AdapterStack>,
    head: &ClassifierHead,
    dataset: &[Graph],
    indices: &[usize],
) -> Result<EvalOutput> {
    let graphs: Vec<&Graph> = indices.iter().map(|&i| &dataset[i]).collect();
    evaluate_graphs(params, backbone, adapters, head, &graphs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub macro_auc: f64,
    pub per_task_auc: Vec<Option<f64>>,
    pub n_graphs: usize,
}

/// Eval-mode loss and ROC-AUC of a trained model on a graph set.
pub fn evaluate_model(
    params: &mut ParamSet,
    backbone: &Backbone,
    adapters: Option<&AdapterStack>,
    head: &ClassifierHead,
    graphs: &[&Graph],
) -> Result<Evaluation> {
    let out = evaluate_graphs(params, backbone, adapters, head, graphs)?;
    Ok(Evaluation {
        loss: out.loss,
        macro_auc: macro_roc_auc(&out.scores, &out.labels, &out.mask, out.n_tasks)?,
        per_task_auc: per_task_roc_auc(&out.scores, &out.labels, &out.mask, out.n_tasks)?,
        n_graphs: graphs.len(),
    })
}

/// The training loop proper, over already-built adapters and head.
fn finetune_prepared(
    params: &mut ParamSet,
    backbone: &Backbone,
    adapters: Option<&AdapterStack>,
    head: &ClassifierHead,
    cfg: &FineTuneConfig,
    dataset: &[Graph],
    split: &DatasetSplit,
    noise_mode: NoiseMode,
) -> Result<RunRecord> {
    check_split(split, dataset.len())?;
    let gaussian = matches!(adapters, Some(AdapterStack::Gaussian(_)));
    let k = if gaussian { cfg.k } else { 1 };
    let tree = RngTree::new(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut records: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order = split.train.clone();
        order.shuffle(&mut tree.stream_indexed("finetune-shuffle", epoch as u64));
        let mut noise = if gaussian && noise_mode == NoiseMode::Sample {
            NoiseSource::sample(tree.stream_indexed("finetune-noise", epoch as u64))
        } else {
            NoiseSource::zero()
        };
        for chunk in order.chunks(cfg.batch_size) {
            let graphs: Vec<&Graph> = chunk.iter().map(|&i| &dataset[i]).collect();
            let batched = batch(&graphs)?;
            let mut tape = Tape::new();
            let labels_t =
                tape.constant(batched.labels.clone(), batched.num_graphs, batched.n_tasks);
            let mask_t =
                tape.constant(batched.label_mask.clone(), batched.num_graphs, batched.n_tasks);
            let mut total: Option<Tensor> = None;
            for _ in 0..k {
                let logits = forward_pass(
                    &mut tape,
                    params,
                    backbone,
                    head,
                    adapters,
                    &batched,
                    BnMode::Train,
                    &mut noise,
                )?;
                let loss_k = tape.bce_with_logits_masked(logits, labels_t, mask_t)?;
                total = Some(match total {
                    None => loss_k,
                    Some(t) => tape.add(t, loss_k)?,
                });
            }
            let summed = total.expect("k >= 1");
            let loss = if k > 1 {
                tape.scale_const(summed, 1.0 / k as f64)
            } else {
                summed
            };
            let grads = tape.backward(loss)?;
            adam.step(params, &grads);
        }

        let train = evaluate_subset(params, backbone, adapters, head, dataset, &split.train)?;
        let val = evaluate_subset(params, backbone, adapters, head, dataset, &split.validation)?;
        let test = evaluate_subset(params, backbone, adapters, head, dataset, &split.test)?;
        let val_auc = macro_roc_auc(&val.scores, &val.labels, &val.mask, val.n_tasks)?;
        let test_auc = macro_roc_auc(&test.scores, &test.labels, &test.mask, test.n_tasks)?;
        let per_task = per_task_roc_auc(&test.scores, &test.labels, &test.mask, test.n_tasks)?;
        records.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: train.loss,
            val_loss: val.loss,
            gap: val.loss - train.loss,
            val_auc,
            test_auc,
            test_auc_per_task: per_task,
        });
    }
    let best = records
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.val_auc
                .partial_cmp(&b.val_auc)
                .expect("finite AUC")
                // Earliest epoch wins ties.
                .then(ib.cmp(ia))
        })
        .map(|(i, _)| i);
    Ok(RunRecord {
        best_epoch: best.map(|i| records[i].epoch),
        final_test_auc: best.map(|i| records[i].test_auc),
        epochs: records,
    })
}

/// Fine-tune against `backbone`: initializes adapters (per `adapter_kind`)
/// and a fresh head from the config seed, then trains them with Adam on
/// masked BCE. Adapter kinds require a frozen backbone; `adapter_kind:
/// none` is the full fine-tune baseline and requires an unfrozen one.
pub fn finetune(
    params: &mut ParamSet,
    backbone: &Backbone,
    cfg: &FineTuneConfig,
    dataset: &[Graph],
    split: &DatasetSplit,
) -> Result<(Option<AdapterStack>, ClassifierHead, RunRecord)> {
    cfg.validate()?;
    match cfg.adapter_kind {
        AdapterKind::None => {
            if backbone.frozen {
                return Err(Error::Contract(
                    "full fine-tuning requires an unfrozen backbone".to_string(),
                ));
            }
        }
        AdapterKind::Deterministic | AdapterKind::Gaussian => {
            if !backbone.frozen {
                return Err(Error::Contract(
                    "adapter fine-tuning requires a frozen backbone".to_string(),
                ));
            }
        }
    }
    check_split(split, dataset.len())?;
    let n_tasks = dataset[split.train[0]].n_tasks();
    let d = backbone.d_hidden;
    let tree = RngTree::new(cfg.seed);
    let mut init_rng = tree.stream("finetune-init");
    let adapters = match cfg.adapter_kind {
        AdapterKind::None => None,
        AdapterKind::Deterministic => Some(AdapterStack::init_deterministic(
            params,
            &mut init_rng,
            backbone.n_layers(),
            d,
            cfg.d_mid,
        )),
        AdapterKind::Gaussian => Some(AdapterStack::init_gaussian(
            params,
            &mut init_rng,
            backbone.n_layers(),
            d,
            cfg.d_mid,
            cfg.scale_mode,
        )),
    };
    let head = ClassifierHead::init(params, &mut init_rng, d, n_tasks);
    let actual = params.trainable_value_count();
    println!("trainable parameters: {actual}");
    if let Some(expected) = trainable_count(
        cfg.adapter_kind,
        cfg.scale_mode,
        backbone.n_layers(),
        d,
        cfg.d_mid,
        n_tasks,
    ) {
        assert_eq!(
            actual, expected,
            "trainable parameter count diverged from the closed form"
        );
    }
    let record = finetune_prepared(
        params,
        backbone,
        adapters.as_ref(),
        &head,
        cfg,
        dataset,
        split,
        NoiseMode::Sample,
    )?;
    Ok((adapters, head, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{freeze, pretrain_edgepred, PretrainConfig};
    use crate::graph::split_dataset;
    use crate::graph::synthetic::{generate, SyntheticConfig};
    use crate::numerics::params::checksum;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset(seed: u64, n: usize) -> Vec<Graph> {
        let cfg = SyntheticConfig {
            n_graphs: n,
            n_nodes_min: 5,
            n_nodes_max: 9,
            d_in: 3,
            n_tasks: 2,
            ..SyntheticConfig::default()
        };
        generate(&RngTree::new(seed), &cfg).unwrap()
    }

    // Wide val/test cuts keep both classes present in every split even on
    // small test datasets.
    fn split_for(n: usize, seed: u64) -> DatasetSplit {
        split_dataset(n, 0.6, 0.2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn frozen_backbone(params: &mut ParamSet, seed: u64) -> Backbone {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut backbone = Backbone::init(params, &mut r, 2, 3, 8, 0);
        freeze(params, &mut backbone);
        backbone
    }

    fn small_cfg(kind: AdapterKind) -> FineTuneConfig {
        FineTuneConfig {
            epochs: 2,
            d_mid: 3,
            adapter_kind: kind,
            ..FineTuneConfig::default()
        }
    }

    #[test]
    fn adapter_finetune_refuses_unfrozen_backbones() {
        let data = dataset(0, 30);
        let split = split_for(30, 1);
        let mut params = ParamSet::new();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let backbone = Backbone::init(&mut params, &mut r, 2, 3, 8, 0);
        let err = finetune(
            &mut params,
            &backbone,
            &small_cfg(AdapterKind::Gaussian),
            &data,
            &split,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn full_finetune_refuses_frozen_backbones() {
        let data = dataset(3, 30);
        let split = split_for(30, 4);
        let mut params = ParamSet::new();
        let backbone = frozen_backbone(&mut params, 5);
        let err = finetune(
            &mut params,
            &backbone,
            &small_cfg(AdapterKind::None),
            &data,
            &split,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn zero_epochs_yields_an_empty_record_with_adapters_at_init() {
        let data = dataset(6, 30);
        let split = split_for(30, 7);
        let mut params = ParamSet::new();
        let backbone = frozen_backbone(&mut params, 8);
        let cfg = FineTuneConfig {
            epochs: 0,
            ..small_cfg(AdapterKind::Gaussian)
        };
        let (adapters, _head, record) = finetune(&mut params, &backbone, &cfg, &data, &split).unwrap();
        assert!(record.epochs.is_empty());
        assert!(record.best_epoch.is_none());
        assert!(record.final_test_auc.is_none());
        // Adapters exist and still carry their untouched initialization:
        // rebuilding from the same seed reproduces them bit for bit.
        let stack = adapters.unwrap();
        let mut reference = ParamSet::new();
        let mut init_rng = RngTree::new(cfg.seed).stream("finetune-init");
        let ref_stack = AdapterStack::init_gaussian(
            &mut reference,
            &mut init_rng,
            2,
            8,
            cfg.d_mid,
            cfg.scale_mode,
        );
        assert_eq!(
            checksum(&params, stack.param_ids()),
            checksum(&reference, ref_stack.param_ids())
        );
    }

    #[test]
    fn same_seed_gives_bit_identical_run_records() {
        let data = dataset(9, 40);
        let split = split_for(40, 10);
        let run = || {
            let mut params = ParamSet::new();
            let backbone = frozen_backbone(&mut params, 11);
            let (_, _, record) = finetune(
                &mut params,
                &backbone,
                &small_cfg(AdapterKind::Gaussian),
                &data,
                &split,
            )
            .unwrap();
            record
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gap_is_exactly_val_minus_train() {
        let data = dataset(12, 50);
        let split = split_for(50, 13);
        let mut params = ParamSet::new();
        let backbone = frozen_backbone(&mut params, 14);
        let (_, _, record) = finetune(
            &mut params,
            &backbone,
            &small_cfg(AdapterKind::Deterministic),
            &data,
            &split,
        )
        .unwrap();
        assert!(!record.epochs.is_empty());
        for e in &record.epochs {
            assert_eq!(e.gap, e.val_loss - e.train_loss);
        }
    }

    #[test]
    fn full_finetune_moves_backbone_parameters() {
        let data = dataset(15, 30);
        let split = split_for(30, 16);
        let mut params = ParamSet::new();
        let mut r = ChaCha8Rng::seed_from_u64(17);
        let backbone = Backbone::init(&mut params, &mut r, 2, 3, 8, 0);
        let before = checksum(&params, backbone.param_ids());
        let cfg = FineTuneConfig {
            epochs: 1,
            ..small_cfg(AdapterKind::None)
        };
        let (adapters, _, record) = finetune(&mut params, &backbone, &cfg, &data, &split).unwrap();
        assert!(adapters.is_none());
        assert_eq!(record.epochs.len(), 1);
        assert_ne!(before, checksum(&params, backbone.param_ids()));
    }

    #[test]
    fn frozen_backbone_bytes_survive_finetuning() {
        let data = dataset(18, 40);
        let split = split_for(40, 19);
        let mut params = ParamSet::new();
        let backbone = frozen_backbone(&mut params, 20);
        let before = checksum(&params, backbone.param_ids());
        for kind in [AdapterKind::Deterministic, AdapterKind::Gaussian] {
            let mut run_params = params.clone();
            finetune(&mut run_params, &backbone, &small_cfg(kind), &data, &split).unwrap();
            assert_eq!(before, checksum(&run_params, backbone.param_ids()));
        }
    }

    #[test]
    fn trainable_count_matches_the_closed_form() {
        // finetune() itself asserts the formula; drive both adapter kinds
        // and both scale modes through it.
        let data = dataset(21, 30);
        let split = split_for(30, 22);
        for (kind, scale_mode) in [
            (AdapterKind::Deterministic, ScaleMode::Learnable),
            (AdapterKind::Gaussian, ScaleMode::Learnable),
            (AdapterKind::Gaussian, ScaleMode::Fixed(0.5)),
        ] {
            let mut params = ParamSet::new();
            let backbone = frozen_backbone(&mut params, 23);
            let cfg = FineTuneConfig {
                epochs: 0,
                scale_mode,
                ..small_cfg(kind)
            };
            finetune(&mut params, &backbone, &cfg, &data, &split).unwrap();
        }
    }

    #[test]
    fn zero_noise_gaussian_with_shared_mean_matches_deterministic_trajectory() {
        // s fixed at 1, noise pinned to zero, mean branch initialized from
        // the deterministic adapter's weights: the two runs optimize the
        // same function and their records agree bit for bit.
        let data = dataset(24, 50);
        let split = split_for(50, 25);
        let cfg = FineTuneConfig {
            epochs: 3,
            d_mid: 3,
            ..FineTuneConfig::default()
        };

        let mut det_params = ParamSet::new();
        let det_backbone = frozen_backbone(&mut det_params, 26);
        let mut init_rng = RngTree::new(cfg.seed).stream("finetune-init");
        let det_stack =
            AdapterStack::init_deterministic(&mut det_params, &mut init_rng, 2, 8, cfg.d_mid);
        let det_head = ClassifierHead::init(&mut det_params, &mut init_rng, 8, 2);

        let mut g_params = ParamSet::new();
        let g_backbone = frozen_backbone(&mut g_params, 26);
        let mut g_init = ChaCha8Rng::seed_from_u64(999);
        let g_stack = AdapterStack::init_gaussian(
            &mut g_params,
            &mut g_init,
            2,
            8,
            cfg.d_mid,
            ScaleMode::Fixed(1.0),
        );
        let g_head = ClassifierHead::init(&mut g_params, &mut g_init, 8, 2);
        // Align what the gaussian mean path shares with the deterministic
        // run: projection weights, all BN states, and the head.
        match (&det_stack, &g_stack) {
            (AdapterStack::Deterministic(dv), AdapterStack::Gaussian(gv)) => {
                for (da, ga) in dv.iter().zip(gv) {
                    for (src, dst) in [
                        (da.w_down, ga.mean_w_down),
                        (da.w_up, ga.mean_w_up),
                        (da.bn_out.gamma, ga.mean_bn.gamma),
                        (da.bn_out.beta, ga.mean_bn.beta),
                        (da.bn_out.running_mean, ga.mean_bn.running_mean),
                        (da.bn_out.running_var, ga.mean_bn.running_var),
                        (da.bn_y.gamma, ga.bn_y.gamma),
                        (da.bn_y.beta, ga.bn_y.beta),
                        (da.bn_y.running_mean, ga.bn_y.running_mean),
                        (da.bn_y.running_var, ga.bn_y.running_var),
                    ] {
                        let data = det_params.data(src).to_vec();
                        g_params.data_mut(dst).copy_from_slice(&data);
                    }
                }
            }
            _ => unreachable!(),
        }
        let head_w = det_params.data(det_head.w).to_vec();
        let head_b = det_params.data(det_head.b).to_vec();
        g_params.data_mut(g_head.w).copy_from_slice(&head_w);
        g_params.data_mut(g_head.b).copy_from_slice(&head_b);

        let det_record = finetune_prepared(
            &mut det_params,
            &det_backbone,
            Some(&det_stack),
            &det_head,
            &cfg,
            &data,
            &split,
            NoiseMode::Zero,
        )
        .unwrap();
        let g_record = finetune_prepared(
            &mut g_params,
            &g_backbone,
            Some(&g_stack),
            &g_head,
            &cfg,
            &data,
            &split,
            NoiseMode::Zero,
        )
        .unwrap();
        assert_eq!(det_record, g_record);
    }

    #[test]
    fn csv_has_the_agreed_header_and_one_line_per_epoch() {
        let data = dataset(27, 30);
        let split = split_for(30, 28);
        let mut params = ParamSet::new();
        let backbone = frozen_backbone(&mut params, 29);
        let (_, _, record) = finetune(
            &mut params,
            &backbone,
            &small_cfg(AdapterKind::Gaussian),
            &data,
            &split,
        )
        .unwrap();
        let csv = record.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,train_loss,val_loss,gap,test_auc");
        assert_eq!(lines.len(), 1 + record.epochs.len());
        assert!(lines[1].starts_with("1,"));
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let data = dataset(30, 20);
        let mut split = split_for(20, 31);
        split.validation[0] = split.train[0];
        let mut params = ParamSet::new();
        let backbone = frozen_backbone(&mut params, 32);
        let err = finetune(
            &mut params,
            &backbone,
            &small_cfg(AdapterKind::Gaussian),
            &data,
            &split,
        )
        .unwrap_err();
        assert!(err.to_string().contains("more than one split"));
    }

    #[test]
    fn gaussian_adapters_learn_the_planted_rule() {
        // End-to-end oracle: pretrain, freeze, fine-tune on the default
        // planted synthetic task (600 graphs, 80/10/10, d_hidden 16, two
        // layers). Thresholds fixed from calibration runs.
        let gen_cfg = SyntheticConfig {
            n_graphs: 600,
            d_in: 4,
            n_tasks: 2,
            ..SyntheticConfig::default()
        };
        let data = generate(&RngTree::new(77), &gen_cfg).unwrap();
        let split = split_dataset(600, 0.8, 0.1, &mut ChaCha8Rng::seed_from_u64(78)).unwrap();
        let mut params = ParamSet::new();
        let mut r = ChaCha8Rng::seed_from_u64(79);
        let mut backbone = Backbone::init(&mut params, &mut r, 2, 4, 16, 0);
        let pre_cfg = PretrainConfig {
            lr: 0.01,
            epochs: 10,
            ..PretrainConfig::default()
        };
        pretrain_edgepred(&mut params, &backbone, &data, &pre_cfg).unwrap();
        freeze(&mut params, &mut backbone);
        let cfg = FineTuneConfig {
            epochs: 40,
            d_mid: 8,
            seed: 80,
            ..FineTuneConfig::default()
        };
        let (_, _, record) = finetune(&mut params, &backbone, &cfg, &data, &split).unwrap();
        let auc = record.final_test_auc.unwrap();
        assert!(auc > 0.8, "final test AUC {auc}");
    }
}
