//! GIN backbone: node encoder, message-passing layers with per-layer BN,
//! mean pooling, classifier head, edge-prediction pretraining, and the
//! freezing contract that pins every backbone byte during fine-tuning.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterStack, NoiseSource};
use crate::error::{Error, Result};
use crate::graph::perturb::sample_distinct;
use crate::graph::{batch, BatchedGraph, Graph};
use crate::numerics::batchnorm::{BatchNorm, BnMode};
use crate::numerics::params::{uniform_init, ParamId, ParamSet};
use crate::numerics::tape::{Tape, Tensor};
use crate::numerics::Adam;
use crate::rng::RngTree;
use crate::training::metrics::roc_auc;

/// One GIN layer: a two-layer MLP over the aggregated neighborhood, a
/// learnable self-weight, an optional edge-feature projection, and the
/// layer's own BN (used when no adapter replaces it).
#[derive(Debug, Clone, Copy)]
pub struct GinLayer {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub eps_gin: ParamId,
    pub edge_proj: Option<ParamId>,
    pub bn: BatchNorm,
}

impl GinLayer {
    fn init(params: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, d: usize, d_edge: usize) -> Self {
        let w1 = params.insert(
            format!("{prefix}.mlp.w1"),
            vec![d, d],
            uniform_init(rng, d, d, 1.0),
            true,
        );
        let b1 = params.insert(format!("{prefix}.mlp.b1"), vec![d], vec![0.0; d], true);
        let w2 = params.insert(
            format!("{prefix}.mlp.w2"),
            vec![d, d],
            uniform_init(rng, d, d, 1.0),
            true,
        );
        let b2 = params.insert(format!("{prefix}.mlp.b2"), vec![d], vec![0.0; d], true);
        let eps_gin = params.insert(format!("{prefix}.eps_gin"), vec![1], vec![0.0], true);
        let edge_proj = (d_edge > 0).then(|| {
            params.insert(
                format!("{prefix}.edge_proj"),
                vec![d_edge, d],
                uniform_init(rng, d_edge, d, 1.0),
                true,
            )
        });
        let bn = BatchNorm::init(params, &format!("{prefix}.bn"), d);
        GinLayer {
            w1,
            b1,
            w2,
            b2,
            eps_gin,
            edge_proj,
            bn,
        }
    }

    fn lookup(params: &ParamSet, prefix: &str, d: usize, d_edge: usize) -> Result<Self> {
        let get = |suffix: &str| {
            params
                .lookup(&format!("{prefix}.{suffix}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {prefix}.{suffix}")))
        };
        Ok(GinLayer {
            w1: get("mlp.w1")?,
            b1: get("mlp.b1")?,
            w2: get("mlp.w2")?,
            b2: get("mlp.b2")?,
            eps_gin: get("eps_gin")?,
            edge_proj: if d_edge > 0 { Some(get("edge_proj")?) } else { None },
            bn: BatchNorm::lookup(params, &format!("{prefix}.bn"), d)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w1, self.b1, self.w2, self.b2, self.eps_gin];
        if let Some(ep) = self.edge_proj {
            ids.push(ep);
        }
        ids.extend(self.bn.param_ids());
        ids
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub encoder_w: ParamId,
    pub encoder_b: ParamId,
    pub layers: Vec<GinLayer>,
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_edge: usize,
    pub frozen: bool,
}

impl Backbone {
    pub fn init(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        n_layers: usize,
        d_in: usize,
        d_hidden: usize,
        d_edge: usize,
    ) -> Self {
        assert!(n_layers >= 1, "a backbone needs at least one layer");
        let encoder_w = params.insert(
            "backbone.encoder.w".to_string(),
            vec![d_in, d_hidden],
            uniform_init(rng, d_in, d_hidden, 1.0),
            true,
        );
        let encoder_b = params.insert(
            "backbone.encoder.b".to_string(),
            vec![d_hidden],
            vec![0.0; d_hidden],
            true,
        );
        let layers = (0..n_layers)
            .map(|l| GinLayer::init(params, rng, &format!("backbone.layer{l}"), d_hidden, d_edge))
            .collect();
        Backbone {
            encoder_w,
            encoder_b,
            layers,
            d_in,
            d_hidden,
            d_edge,
            frozen: false,
        }
    }

    pub fn lookup(
        params: &ParamSet,
        n_layers: usize,
        d_in: usize,
        d_hidden: usize,
        d_edge: usize,
        frozen: bool,
    ) -> Result<Self> {
        let get = |name: &str| {
            params
                .lookup(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let layers = (0..n_layers)
            .map(|l| GinLayer::lookup(params, &format!("backbone.layer{l}"), d_hidden, d_edge))
            .collect::<Result<Vec<_>>>()?;
        Ok(Backbone {
            encoder_w: get("backbone.encoder.w")?,
            encoder_b: get("backbone.encoder.b")?,
            layers,
            d_in,
            d_hidden,
            d_edge,
            frozen,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Every backbone parameter, including BN affines and running stats, in
    /// registration order. This is the checksummed frozen set.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.encoder_w, self.encoder_b];
        for layer in &self.layers {
            ids.extend(layer.param_ids());
        }
        ids
    }

    /// BN statistics mode for the backbone's own layers. Frozen backbones
    /// always use stored statistics so their behavior is deterministic.
    fn bn_mode(&self, requested: BnMode) -> BnMode {
        if self.frozen {
            BnMode::Eval
        } else {
            requested
        }
    }
}

/// Marks every backbone parameter non-trainable. Backward passes then skip
/// them, Adam never touches them, and backbone BN runs on stored statistics
/// from here on.
pub fn freeze(params: &mut ParamSet, backbone: &mut Backbone) {
    for id in backbone.param_ids() {
        params.set_trainable(id, false);
    }
    backbone.frozen = true;
}

/// Reverses `freeze` for full fine-tuning. BN running statistics stay
/// non-trainable; they update through the forward pass, not the optimizer.
pub fn unfreeze(params: &mut ParamSet, backbone: &mut Backbone) {
    let stats: Vec<ParamId> = backbone
        .layers
        .iter()
        .flat_map(|l| [l.bn.running_mean, l.bn.running_var])
        .collect();
    for id in backbone.param_ids() {
        params.set_trainable(id, !stats.contains(&id));
    }
    backbone.frozen = false;
}

/// y_i = MLP((1 + eps_gin) h_i + sum_{j in N(i)} (h_j + edge_proj(e_ji))).
/// Returns the pre-BN output; the caller applies the layer BN or an adapter.
pub fn gin_forward(
    tape: &mut Tape,
    params: &mut ParamSet,
    layer: &GinLayer,
    h: Tensor,
    batched: &BatchedGraph,
) -> Result<Tensor> {
    let n = batched.total_nodes;
    if tape.rows(h) != n {
        return Err(Error::dimension(
            "gin_forward",
            format!("{n} node rows"),
            format!("{}", tape.rows(h)),
        ));
    }
    let d = tape.cols(h);
    let e = batched.num_directed_edges();

    let neighbor_sum = {
        let src_h = tape.gather_rows(h, &batched.edge_src)?;
        let messages = match layer.edge_proj {
            Some(ep) if batched.d_edge > 0 => {
                let feats = tape.constant(batched.edge_features.clone(), e, batched.d_edge);
                let proj = tape.bind(params, ep);
                let projected = tape.matmul(feats, proj)?;
                tape.add(src_h, projected)?
            }
            Some(_) => {
                return Err(Error::dimension(
                    "gin_forward",
                    "edge features for edge_proj",
                    "d_edge == 0 batch",
                ))
            }
            None => src_h,
        };
        tape.segment_sum(messages, &batched.edge_dst, n)?
    };

    let eps = tape.bind(params, layer.eps_gin);
    let one = tape.constant(vec![1.0], 1, 1);
    let coeff = tape.add(one, eps)?;
    let self_term = tape.mul(coeff, h)?;
    let combined = tape.add(self_term, neighbor_sum)?;

    let w1 = tape.bind(params, layer.w1);
    let b1 = tape.bind(params, layer.b1);
    let w2 = tape.bind(params, layer.w2);
    let b2 = tape.bind(params, layer.b2);
    let a1 = tape.matmul(combined, w1)?;
    let a1b = tape.add_bias(a1, b1)?;
    let hidden = tape.relu(a1b);
    let a2 = tape.matmul(hidden, w2)?;
    let _ = d;
    tape.add_bias(a2, b2)
}

/// Final node states after the encoder and all layers. With adapters, each
/// layer output is BN_y(y) plus the (scaled) adapter read of the layer
/// input; without, the layer's own BN.
pub fn node_embeddings(
    tape: &mut Tape,
    params: &mut ParamSet,
    backbone: &Backbone,
    adapters: Option<&AdapterStack>,
    batched: &BatchedGraph,
    mode: BnMode,
    noise: &mut NoiseSource,
) -> Result<Tensor> {
    if batched.d_in != backbone.d_in {
        return Err(Error::dimension(
            "node_embeddings",
            format!("d_in {}", backbone.d_in),
            format!("{}", batched.d_in),
        ));
    }
    if let Some(stack) = adapters {
        if stack.len() != backbone.n_layers() {
            return Err(Error::invalid(
                "node_embeddings",
                format!(
                    "adapter stack of length {} does not cover {} layers",
                    stack.len(),
                    backbone.n_layers()
                ),
            ));
        }
    }
    let x = tape.constant(batched.node_features.clone(), batched.total_nodes, batched.d_in);
    let enc_w = tape.bind(params, backbone.encoder_w);
    let enc_b = tape.bind(params, backbone.encoder_b);
    let xw = tape.matmul(x, enc_w)?;
    let mut h = tape.add_bias(xw, enc_b)?;
    let backbone_mode = backbone.bn_mode(mode);
    for (l, layer) in backbone.layers.iter().enumerate() {
        let y = gin_forward(tape, params, layer, h, batched)?;
        h = match adapters {
            Some(stack) => stack.apply(tape, params, l, h, y, mode, noise)?,
            None => layer.bn.forward(tape, params, y, backbone_mode)?,
        };
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierHead {
    pub w: ParamId,
    pub b: ParamId,
    pub n_tasks: usize,
}

impl ClassifierHead {
    pub fn init(params: &mut ParamSet, rng: &mut ChaCha8Rng, d_hidden: usize, n_tasks: usize) -> Self {
        let w = params.insert(
            "head.w".to_string(),
            vec![d_hidden, n_tasks],
            uniform_init(rng, d_hidden, n_tasks, 1.0),
            true,
        );
        let b = params.insert("head.b".to_string(), vec![n_tasks], vec![0.0; n_tasks], true);
        ClassifierHead { w, b, n_tasks }
    }

    pub fn lookup(params: &ParamSet, n_tasks: usize) -> Result<Self> {
        let get = |name: &str| {
            params
                .lookup(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        Ok(ClassifierHead {
            w: get("head.w")?,
            b: get("head.b")?,
            n_tasks,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// Graph logits: mean-pool the final node states per graph, then the head.
pub fn forward_pass(
    tape: &mut Tape,
    params: &mut ParamSet,
    backbone: &Backbone,
    head: &ClassifierHead,
    adapters: Option<&AdapterStack>,
    batched: &BatchedGraph,
    mode: BnMode,
    noise: &mut NoiseSource,
) -> Result<Tensor> {
    let h = node_embeddings(tape, params, backbone, adapters, batched, mode, noise)?;
    let pooled_sum = tape.segment_sum(h, &batched.segments, batched.num_graphs)?;
    let inv_counts: Vec<f64> = batched
        .nodes_per_graph()
        .iter()
        .map(|&c| 1.0 / c as f64)
        .collect();
    let pooled = tape.scale_rows(pooled_sum, &inv_counts)?;
    let w = tape.bind(params, head.w);
    let b = tape.bind(params, head.b);
    let logits = tape.matmul(pooled, w)?;
    tape.add_bias(logits, b)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 0.001,
            epochs: 30,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Node-pair candidates for edge prediction on one batch: every stored edge
/// as a positive and an equal number (capacity permitting) of uniformly
/// sampled absent pairs as negatives, in batch-node coordinates.
fn edge_pairs(
    graphs: &[&Graph],
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let mut u = Vec::new();
    let mut v = Vec::new();
    let mut labels = Vec::new();
    let mut offset = 0;
    for g in graphs {
        let present: std::collections::HashSet<(usize, usize)> =
            g.edges.iter().map(|&(i, j)| Graph::edge_key(i, j)).collect();
        for &(i, j) in &g.edges {
            u.push(offset + i);
            v.push(offset + j);
            labels.push(1.0);
        }
        let mut absent = Vec::new();
        for i in 0..g.num_nodes {
            for j in (i + 1)..g.num_nodes {
                if !present.contains(&(i, j)) {
                    absent.push((i, j));
                }
            }
        }
        let k = g.num_edges().min(absent.len());
        for idx in sample_distinct(absent.len(), k, rng) {
            let (i, j) = absent[idx];
            u.push(offset + i);
            v.push(offset + j);
            labels.push(0.0);
        }
        offset += g.num_nodes;
    }
    (u, v, labels)
}

fn edgepred_loss(
    tape: &mut Tape,
    params: &mut ParamSet,
    backbone: &Backbone,
    batched: &BatchedGraph,
    u: &[usize],
    v: &[usize],
    labels: &[f64],
    mode: BnMode,
) -> Result<Tensor> {
    let mut noise = NoiseSource::zero();
    let h = node_embeddings(tape, params, backbone, None, batched, mode, &mut noise)?;
    let hu = tape.gather_rows(h, u)?;
    let hv = tape.gather_rows(h, v)?;
    let prod = tape.mul(hu, hv)?;
    let scores = tape.row_sum(prod);
    let label_t = tape.constant(labels.to_vec(), labels.len(), 1);
    let mask = tape.constant(vec![1.0; labels.len()], labels.len(), 1);
    tape.bce_with_logits_masked(scores, label_t, mask)
}

/// Link-prediction pretraining: dot-product scores between final node
/// embeddings, real edges against uniformly sampled absent pairs (1:1), BCE
/// loss. Graphs with fewer than two nodes are skipped.
pub fn pretrain_edgepred(
    params: &mut ParamSet,
    backbone: &Backbone,
    dataset: &[Graph],
    cfg: &PretrainConfig,
) -> Result<()> {
    if backbone.frozen {
        return Err(Error::Contract(
            "pretraining requires an unfrozen backbone".to_string(),
        ));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("pretrain_edgepred", "dataset is empty"));
    }
    let usable: Vec<&Graph> = dataset.iter().filter(|g| g.num_nodes >= 2).collect();
    if usable.is_empty() {
        return Err(Error::invalid(
            "pretrain_edgepred",
            "every graph has fewer than 2 nodes",
        ));
    }
    let tree = RngTree::new(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let batch_size = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..usable.len()).collect();
        let mut shuffle_rng = tree.stream_indexed("pretrain-shuffle", epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut neg_rng = tree.stream_indexed("pretrain-negatives", epoch as u64);
        for chunk in order.chunks(batch_size) {
            let graphs: Vec<&Graph> = chunk.iter().map(|&i| usable[i]).collect();
            let (u, v, labels) = edge_pairs(&graphs, &mut neg_rng);
            if labels.is_empty() {
                continue;
            }
            let batched = batch(&graphs)?;
            let mut tape = Tape::new();
            let loss = edgepred_loss(
                &mut tape,
                params,
                backbone,
                &batched,
                &u,
                &v,
                &labels,
                BnMode::Train,
            )?;
            let grads = tape.backward(loss)?;
            adam.step(params, &grads);
        }
    }
    Ok(())
}

/// Held-out edge-prediction AUC in eval mode: positives are the stored
/// edges, negatives an equally sized sample of absent pairs.
pub fn edgepred_auc(
    params: &mut ParamSet,
    backbone: &Backbone,
    dataset: &[Graph],
    seed: u64,
) -> Result<f64> {
    let usable: Vec<&Graph> = dataset.iter().filter(|g| g.num_nodes >= 2).collect();
    if usable.is_empty() {
        return Err(Error::invalid("edgepred_auc", "every graph has fewer than 2 nodes"));
    }
    let mut rng = RngTree::new(seed).stream("edgepred-eval-negatives");
    let (u, v, labels) = edge_pairs(&usable, &mut rng);
    if labels.is_empty() {
        return Err(Error::invalid("edgepred_auc", "no candidate node pairs"));
    }
    let batched = batch(&usable)?;
    let mut tape = Tape::new();
    let mut noise = NoiseSource::zero();
    let h = node_embeddings(
        &mut tape,
        params,
        backbone,
        None,
        &batched,
        BnMode::Eval,
        &mut noise,
    )?;
    let hu = tape.gather_rows(h, &u)?;
    let hv = tape.gather_rows(h, &v)?;
    let prod = tape.mul(hu, hv)?;
    let scores = tape.row_sum(prod);
    roc_auc(tape.value(scores), &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::ScaleMode;
    use crate::graph::synthetic::{generate, SyntheticConfig};
    use crate::numerics::gradcheck::{central_diff, max_rel_err};
    use crate::numerics::params::checksum;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn toy_graph(seed: u64, n: usize, d_in: usize, edges: Vec<(usize, usize)>, n_tasks: usize) -> Graph {
        let mut r = rng(seed);
        let g = Graph {
            node_features: (0..n * d_in).map(|_| r.gen_range(-1.0..1.0)).collect(),
            num_nodes: n,
            d_in,
            edges,
            edge_features: Vec::new(),
            d_edge: 0,
            labels: vec![0.0; n_tasks],
            label_mask: vec![1.0; n_tasks],
        };
        g.validate("toy_graph").unwrap();
        g
    }

    fn mlp_reference(params: &ParamSet, layer: &GinLayer, input: &[f64], d: usize) -> Vec<f64> {
        let w1 = params.data(layer.w1);
        let b1 = params.data(layer.b1);
        let w2 = params.data(layer.w2);
        let b2 = params.data(layer.b2);
        let mut hidden = vec![0.0; d];
        for c in 0..d {
            let mut acc = b1[c];
            for k in 0..d {
                acc += input[k] * w1[k * d + c];
            }
            hidden[c] = acc.max(0.0);
        }
        let mut out = vec![0.0; d];
        for c in 0..d {
            let mut acc = b2[c];
            for k in 0..d {
                acc += hidden[k] * w2[k * d + c];
            }
            out[c] = acc;
        }
        out
    }

    #[test]
    fn isolated_node_is_mlp_of_scaled_self() {
        let d = 5;
        let mut params = ParamSet::new();
        let backbone = Backbone::init(&mut params, &mut rng(0), 1, 3, d, 0);
        params.data_mut(backbone.layers[0].eps_gin)[0] = 0.3;
        let g = toy_graph(1, 1, 3, vec![], 1);
        let batched = batch(&[&g]).unwrap();
        let mut tape = Tape::new();
        let h_data: Vec<f64> = (0..d).map(|i| 0.2 * i as f64 - 0.4).collect();
        let h = tape.constant(h_data.clone(), 1, d);
        let y = gin_forward(&mut tape, &mut params, &backbone.layers[0], h, &batched).unwrap();
        let scaled: Vec<f64> = h_data.iter().map(|v| 1.3 * v).collect();
        let expected = mlp_reference(&params, &backbone.layers[0], &scaled, d);
        for (a, b) in tape.value(y).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn symmetric_nodes_on_one_edge_get_identical_outputs() {
        let d = 4;
        let mut params = ParamSet::new();
        let backbone = Backbone::init(&mut params, &mut rng(2), 1, 2, d, 0);
        let mut g = toy_graph(3, 2, 2, vec![(0, 1)], 1);
        let row: Vec<f64> = g.node_features[..2].to_vec();
        g.node_features[2..].copy_from_slice(&row);
        let batched = batch(&[&g]).unwrap();
        let mut tape = Tape::new();
        let h_data = vec![0.5, -0.25, 0.125, 1.0, 0.5, -0.25, 0.125, 1.0];
        let h = tape.constant(h_data, 2, d);
        let y = gin_forward(&mut tape, &mut params, &backbone.layers[0], h, &batched).unwrap();
        let v = tape.value(y);
        assert_eq!(&v[..d], &v[d..]);
    }

    #[test]
    fn relabeling_nodes_relabels_gin_output() {
        let d_in = 3;
        let d = 6;
        let n = 6;
        let mut params = ParamSet::new();
        let backbone = Backbone::init(&mut params, &mut rng(4), 1, d_in, d, 0);
        let g = toy_graph(5, n, d_in, vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)], 1);
        // perm[old] = new.
        let perm = [3usize, 0, 4, 1, 5, 2];
        let mut permuted = g.clone();
        for (old, &new) in perm.iter().enumerate() {
            permuted.node_features[new * d_in..(new + 1) * d_in]
                .copy_from_slice(&g.node_features[old * d_in..(old + 1) * d_in]);
        }
        permuted.edges = g.edges.iter().map(|&(i, j)| (perm[i], perm[j])).collect();
        permuted.validate("permuted").unwrap();

        let h_of = |graph: &Graph, params: &mut ParamSet| {
            let batched = batch(&[graph]).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(batched.node_features.clone(), n, d_in);
            let enc_w = tape.bind(params, backbone.encoder_w);
            let enc_b = tape.bind(params, backbone.encoder_b);
            let xw = tape.matmul(x, enc_w).unwrap();
            let h = tape.add_bias(xw, enc_b).unwrap();
            let y = gin_forward(&mut tape, params, &backbone.layers[0], h, &batched).unwrap();
            tape.value(y).to_vec()
        };
        let base = h_of(&g, &mut params);
        let relabeled = h_of(&permuted, &mut params);
        for (old, &new) in perm.iter().enumerate() {
            for c in 0..d {
                let a = base[old * d + c];
                let b = relabeled[new * d + c];
                assert!((a - b).abs() < 1e-10, "node {old}->{new} col {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_features_and_zero_eps_reduce_to_rowwise_mlp() {
        // Two zeroed nodes joined by an edge plus two isolated nonzero nodes:
        // every neighbor contribution is zero, so each row is MLP(h_i).
        let d = 4;
        let mut params = ParamSet::new();
        let backbone = Backbone::init(&mut params, &mut rng(6), 1, 2, d, 0);
        let g = toy_graph(7, 4, 2, vec![(0, 1)], 1);
        let batched = batch(&[&g]).unwrap();
        let mut tape = Tape::new();
        let mut h_data = vec![0.0; 4 * d];
        h_data[2 * d..].copy_from_slice(&[0.3, -0.7, 0.2, 0.9, -1.1, 0.4, 0.0, 2.0]);
        let h = tape.constant(h_data.clone(), 4, d);
        let y = gin_forward(&mut tape, &mut params, &backbone.layers[0], h, &batched).unwrap();
        let v = tape.value(y);
        for r in 0..4 {
            let expected = mlp_reference(&params, &backbone.layers[0], &h_data[r * d..(r + 1) * d], d);
            for c in 0..d {
                assert!((v[r * d + c] - expected[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn edge_features_enter_through_the_projection() {
        let d = 3;
        let d_edge = 2;
        let mut params = ParamSet::new();
        let backbone = Backbone::init(&mut params, &mut rng(8), 1, 2, d, d_edge);
        let mut g = toy_graph(9, 2, 2, vec![(0, 1)], 1);
        g.d_edge = d_edge;
        g.edge_features = vec![0.5, -1.0];
        g.validate("with-edges").unwrap();
        let batched = batch(&[&g]).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(vec![0.0; 2 * d], 2, d);
        let y = gin_forward(&mut tape, &mut params, &backbone.layers[0], h, &batched).unwrap();
        // With h = 0 the only signal is edge_proj(e); both nodes see the same
        // single incoming edge feature vector.
        let ep = params.data(backbone.layers[0].edge_proj.unwrap());
        let mut msg = vec![0.0; d];
        for c in 0..d {
            msg[c] = 0.5 * ep[c] - 1.0 * ep[d + c];
        }
        let expected = mlp_reference(&params, &backbone.layers[0], &msg, d);
        let v = tape.value(y);
        for r in 0..2 {
            for c in 0..d {
                assert!((v[r * d + c] - expected[c]).abs() < 1e-12);
            }
        }
    }

    fn tiny_dataset(seed: u64, n_graphs: usize) -> Vec<Graph> {
        let cfg = SyntheticConfig {
            n_graphs,
            n_nodes_min: 5,
            n_nodes_max: 9,
            d_in: 3,
            n_tasks: 2,
            ..SyntheticConfig::default()
        };
        generate(&RngTree::new(seed), &cfg).unwrap()
    }

    #[test]
    fn logits_are_invariant_under_node_relabeling() {
        let d_in = 3;
        let mut params = ParamSet::new();
        let mut r = rng(10);
        let backbone = Backbone::init(&mut params, &mut r, 2, d_in, 8, 0);
        let stack = AdapterStack::init_gaussian(&mut params, &mut r, 2, 8, 3, ScaleMode::Learnable);
        let head = ClassifierHead::init(&mut params, &mut r, 8, 2);
        let g = toy_graph(11, 6, d_in, vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (1, 4)], 2);
        let perm = [5usize, 2, 0, 4, 1, 3];
        let mut permuted = g.clone();
        for (old, &new) in perm.iter().enumerate() {
            permuted.node_features[new * d_in..(new + 1) * d_in]
                .copy_from_slice(&g.node_features[old * d_in..(old + 1) * d_in]);
        }
        permuted.edges = g.edges.iter().map(|&(i, j)| (perm[i], perm[j])).collect();
        let logits_of = |graph: &Graph, params: &mut ParamSet| {
            let batched = batch(&[graph]).unwrap();
            let mut tape = Tape::new();
            let mut noise = NoiseSource::zero();
            let out = forward_pass(
                &mut tape,
                params,
                &backbone,
                &head,
                Some(&stack),
                &batched,
                BnMode::Eval,
                &mut noise,
            )
            .unwrap();
            tape.value(out).to_vec()
        };
        let base = logits_of(&g, &mut params);
        let relabeled = logits_of(&permuted, &mut params);
        for (a, b) in base.iter().zip(&relabeled) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn batched_pass_matches_single_graph_passes() {
        let graphs = tiny_dataset(12, 3);
        let refs: Vec<&Graph> = graphs.iter().collect();
        let mut params = ParamSet::new();
        let mut r = rng(13);
        let backbone = Backbone::init(&mut params, &mut r, 2, 3, 8, 0);
        let head = ClassifierHead::init(&mut params, &mut r, 8, 2);
        let run = |graphs: &[&Graph], params: &mut ParamSet| {
            let batched = batch(graphs).unwrap();
            let mut tape = Tape::new();
            let mut noise = NoiseSource::zero();
            let out = forward_pass(
                &mut tape,
                params,
                &backbone,
                &head,
                None,
                &batched,
                BnMode::Eval,
                &mut noise,
            )
            .unwrap();
            tape.value(out).to_vec()
        };
        let together = run(&refs, &mut params);
        let mut separate = Vec::new();
        for g in &refs {
            separate.extend(run(&[g], &mut params));
        }
        for (a, b) in together.iter().zip(&separate) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn absent_adapters_match_zero_scale_zero_noise_adapters_at_init() {
        // Freshly initialized BN states are identical (gamma 1, beta 0, zero
        // mean, unit variance), so BN(y) along either path agrees in eval
        // mode, and s = 0 removes the adapter term.
        let graphs = tiny_dataset(14, 2);
        let refs: Vec<&Graph> = graphs.iter().collect();
        let mut params = ParamSet::new();
        let mut r = rng(15);
        let backbone = Backbone::init(&mut params, &mut r, 2, 3, 8, 0);
        let head = ClassifierHead::init(&mut params, &mut r, 8, 2);
        let stack = AdapterStack::init_gaussian(&mut params, &mut r, 2, 8, 3, ScaleMode::Fixed(0.0));
        let batched = batch(&refs).unwrap();
        let run = |adapters: Option<&AdapterStack>, params: &mut ParamSet| {
            let mut tape = Tape::new();
            let mut noise = NoiseSource::zero();
            let out = forward_pass(
                &mut tape,
                params,
                &backbone,
                &head,
                adapters,
                &batched,
                BnMode::Eval,
                &mut noise,
            )
            .unwrap();
            tape.value(out).to_vec()
        };
        let without = run(None, &mut params);
        let with = run(Some(&stack), &mut params);
        assert_eq!(without, with);
    }

    #[test]
    fn single_graph_batch_has_one_logit_row() {
        let graphs = tiny_dataset(16, 1);
        let mut params = ParamSet::new();
        let mut r = rng(17);
        let backbone = Backbone::init(&mut params, &mut r, 1, 3, 6, 0);
        let head = ClassifierHead::init(&mut params, &mut r, 6, 2);
        let batched = batch(&[&graphs[0]]).unwrap();
        let mut tape = Tape::new();
        let mut noise = NoiseSource::zero();
        let out = forward_pass(
            &mut tape,
            &mut params,
            &backbone,
            &head,
            None,
            &batched,
            BnMode::Eval,
            &mut noise,
        )
        .unwrap();
        assert_eq!(tape.shape(out), [1, 2]);
    }

    #[test]
    fn mismatched_adapter_stack_length_is_refused() {
        let graphs = tiny_dataset(18, 1);
        let mut params = ParamSet::new();
        let mut r = rng(19);
        let backbone = Backbone::init(&mut params, &mut r, 2, 3, 6, 0);
        let stack = AdapterStack::init_gaussian(&mut params, &mut r, 1, 6, 2, ScaleMode::Learnable);
        let batched = batch(&[&graphs[0]]).unwrap();
        let mut tape = Tape::new();
        let mut noise = NoiseSource::zero();
        let err = node_embeddings(
            &mut tape,
            &mut params,
            &backbone,
            Some(&stack),
            &batched,
            BnMode::Eval,
            &mut noise,
        )
        .unwrap_err();
        assert!(err.to_string().contains("adapter stack"));
    }

    #[test]
    fn pretraining_zero_epochs_changes_nothing() {
        let graphs = tiny_dataset(20, 10);
        let mut params = ParamSet::new();
        let backbone = Backbone::init(&mut params, &mut rng(21), 2, 3, 8, 0);
        let before = checksum(&params, backbone.param_ids());
        let cfg = PretrainConfig {
            epochs: 0,
            ..PretrainConfig::default()
        };
        pretrain_edgepred(&mut params, &backbone, &graphs, &cfg).unwrap();
        assert_eq!(before, checksum(&params, backbone.param_ids()));
    }

    #[test]
    fn pretraining_is_deterministic_under_a_fixed_seed() {
        let graphs = tiny_dataset(22, 12);
        let run = || {
            let mut params = ParamSet::new();
            let backbone = Backbone::init(&mut params, &mut rng(23), 2, 3, 8, 0);
            let cfg = PretrainConfig {
                epochs: 2,
                seed: 7,
                ..PretrainConfig::default()
            };
            pretrain_edgepred(&mut params, &backbone, &graphs, &cfg).unwrap();
            checksum(&params, backbone.param_ids())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn pretraining_rejects_datasets_with_no_usable_graphs() {
        let singleton = toy_graph(24, 1, 3, vec![], 2);
        let mut params = ParamSet::new();
        let backbone = Backbone::init(&mut params, &mut rng(25), 1, 3, 6, 0);
        let err = pretrain_edgepred(
            &mut params,
            &backbone,
            &[singleton],
            &PretrainConfig::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("fewer than 2 nodes"));
    }

    #[test]
    fn pretraining_skips_tiny_graphs_but_uses_the_rest() {
        let mut graphs = tiny_dataset(26, 6);
        graphs.push(toy_graph(27, 1, 3, vec![], 2));
        let mut params = ParamSet::new();
        let backbone = Backbone::init(&mut params, &mut rng(28), 1, 3, 6, 0);
        let before = checksum(&params, backbone.param_ids());
        let cfg = PretrainConfig {
            epochs: 1,
            ..PretrainConfig::default()
        };
        pretrain_edgepred(&mut params, &backbone, &graphs, &cfg).unwrap();
        assert_ne!(before, checksum(&params, backbone.param_ids()));
    }

    #[test]
    fn pretraining_beats_chance_on_held_out_graphs() {
        let train = tiny_dataset(29, 200);
        let held_out = tiny_dataset(30, 40);
        let mut params = ParamSet::new();
        let backbone = Backbone::init(&mut params, &mut rng(31), 2, 3, 8, 0);
        let cfg = PretrainConfig {
            lr: 0.01,
            epochs: 15,
            seed: 3,
            ..PretrainConfig::default()
        };
        pretrain_edgepred(&mut params, &backbone, &train, &cfg).unwrap();
        let auc = edgepred_auc(&mut params, &backbone, &held_out, 99).unwrap();
        assert!(auc > 0.7, "held-out edge prediction AUC {auc}");
    }

    #[test]
    fn freezing_removes_backbone_gradients_and_pins_bytes() {
        let graphs = tiny_dataset(32, 4);
        let refs: Vec<&Graph> = graphs.iter().collect();
        let mut params = ParamSet::new();
        let mut r = rng(33);
        let mut backbone = Backbone::init(&mut params, &mut r, 2, 3, 8, 0);
        let stack = AdapterStack::init_gaussian(&mut params, &mut r, 2, 8, 3, ScaleMode::Learnable);
        let head = ClassifierHead::init(&mut params, &mut r, 8, 2);
        freeze(&mut params, &mut backbone);
        let before = checksum(&params, backbone.param_ids());
        let batched = batch(&refs).unwrap();
        let mut adam = Adam::new(0.01);
        for step in 0..3 {
            let mut tape = Tape::new();
            let mut noise = NoiseSource::sample(rng(100 + step));
            let logits = forward_pass(
                &mut tape,
                &mut params,
                &backbone,
                &head,
                Some(&stack),
                &batched,
                BnMode::Train,
                &mut noise,
            )
            .unwrap();
            let labels = tape.constant(batched.labels.clone(), batched.num_graphs, 2);
            let mask = tape.constant(batched.label_mask.clone(), batched.num_graphs, 2);
            let loss = tape.bce_with_logits_masked(logits, labels, mask).unwrap();
            let grads = tape.backward(loss).unwrap();
            for id in backbone.param_ids() {
                assert!(
                    grads.param(id).is_none(),
                    "frozen parameter {} received a gradient",
                    params.name(id)
                );
            }
            assert!(grads.param(head.w).is_some());
            adam.step(&mut params, &grads);
        }
        assert_eq!(before, checksum(&params, backbone.param_ids()));
    }

    #[test]
    fn unfreezing_restores_the_initial_trainability_pattern() {
        let mut params = ParamSet::new();
        let mut r = rng(60);
        let mut backbone = Backbone::init(&mut params, &mut r, 2, 3, 8, 2);
        let initial: Vec<bool> = backbone
            .param_ids()
            .iter()
            .map(|&id| params.is_trainable(id))
            .collect();
        assert!(initial.iter().any(|&t| t), "weights start trainable");
        assert!(initial.iter().any(|&t| !t), "BN statistics start pinned");
        freeze(&mut params, &mut backbone);
        assert!(backbone.param_ids().iter().all(|&id| !params.is_trainable(id)));
        unfreeze(&mut params, &mut backbone);
        assert!(!backbone.frozen);
        let restored: Vec<bool> = backbone
            .param_ids()
            .iter()
            .map(|&id| params.is_trainable(id))
            .collect();
        assert_eq!(initial, restored);
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        // 2-layer d_hidden=8 model with Gaussian adapters over 3 tiny graphs:
        // every trainable coordinate checked against central differences.
        let graphs = tiny_dataset(34, 3);
        let refs: Vec<&Graph> = graphs.iter().collect();
        let batched = batch(&refs).unwrap();
        let mut params = ParamSet::new();
        let mut r = rng(35);
        let mut backbone = Backbone::init(&mut params, &mut r, 2, 3, 8, 0);
        let stack = AdapterStack::init_gaussian(&mut params, &mut r, 2, 8, 3, ScaleMode::Learnable);
        let head = ClassifierHead::init(&mut params, &mut r, 8, 2);
        freeze(&mut params, &mut backbone);
        let snapshot = params.clone();
        let loss_of = |params: &mut ParamSet| {
            let mut tape = Tape::new();
            let mut noise = NoiseSource::sample(rng(36));
            let logits = forward_pass(
                &mut tape,
                params,
                &backbone,
                &head,
                Some(&stack),
                &batched,
                BnMode::Train,
                &mut noise,
            )
            .unwrap();
            let labels = tape.constant(batched.labels.clone(), batched.num_graphs, 2);
            let mask = tape.constant(batched.label_mask.clone(), batched.num_graphs, 2);
            let loss = tape.bce_with_logits_masked(logits, labels, mask).unwrap();
            (tape.value(loss)[0], tape.backward(loss).unwrap())
        };
        let (_, grads) = loss_of(&mut params);
        let trainable: Vec<ParamId> = snapshot
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(id, _)| id)
            .collect();
        assert!(!trainable.is_empty());
        for pid in trainable {
            let analytic = grads
                .param(pid)
                .unwrap_or_else(|| vec![0.0; snapshot.data(pid).len()]);
            let at = snapshot.data(pid).to_vec();
            let numeric = central_diff(
                |p| {
                    let mut ps = snapshot.clone();
                    ps.data_mut(pid).copy_from_slice(p);
                    loss_of(&mut ps).0
                },
                &at,
                1e-5,
            );
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < 1e-4, "{}: rel err {err}", snapshot.name(pid));
        }
    }

    #[test]
    fn lookup_rebuilds_identical_handles() {
        let mut params = ParamSet::new();
        let mut r = rng(37);
        let backbone = Backbone::init(&mut params, &mut r, 2, 3, 8, 2);
        let head = ClassifierHead::init(&mut params, &mut r, 8, 4);
        let rebuilt = Backbone::lookup(&params, 2, 3, 8, 2, false).unwrap();
        assert_eq!(backbone.param_ids(), rebuilt.param_ids());
        let rebuilt_head = ClassifierHead::lookup(&params, 4).unwrap();
        assert_eq!(head.param_ids(), rebuilt_head.param_ids());
        assert!(Backbone::lookup(&params, 3, 3, 8, 2, false).is_err());
    }
}
