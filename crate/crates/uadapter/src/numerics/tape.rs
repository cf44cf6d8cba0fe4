//! Define-by-run reverse-mode gradient tape over dense `f64` tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Operations append nodes in
//! execution order; [`Tape::backward`] replays them in strict reverse append
//! order exactly once, accumulating adjoints. Tensors are handles into the
//! tape's arena: the tape owns values and shapes, models own their parameters
//! in a [`ParamSet`](super::ParamSet) and bind them as leaves per pass.
//!
//! Everything here is 2-D (rows x cols); scalars are 1x1.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::params::{ParamId, ParamSet};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    pub(crate) id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Tensor, b: Tensor },
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    /// Row-broadcast add: x is n x d, bias is 1 x d.
    AddBias { x: Tensor, bias: Tensor },
    Relu { x: Tensor },
    Softplus { x: Tensor },
    /// max(x, floor) elementwise; subgradient 0 at and below the floor.
    ClampMin { x: Tensor, floor: f64 },
    /// Multiply by a compile-time constant (not differentiable w.r.t. c).
    ScaleConst { x: Tensor, c: f64 },
    BnTrain {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        mean: Vec<f64>,
        invstd: Vec<f64>,
    },
    BnEval {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        mean: Vec<f64>,
        invstd: Vec<f64>,
    },
    SegmentSum { x: Tensor, segments: Vec<usize> },
    GatherRows { x: Tensor, indices: Vec<usize> },
    /// Multiply row r by the constant factors[r].
    ScaleRows { x: Tensor, factors: Vec<f64> },
    /// Sum across columns: n x d -> n x 1.
    RowSum { x: Tensor },
    /// Sum of all entries -> 1 x 1.
    SumAll { x: Tensor },
    /// Mean of masked, numerically stable BCE-with-logits entries -> 1 x 1.
    /// Labels and mask are treated as constants.
    BceMasked {
        logits: Tensor,
        labels: Tensor,
        mask: Tensor,
        count: f64,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    param: Option<ParamId>,
    trainable: bool,
}

/// Append-only record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`]. Trainable bound parameters are
/// addressable by [`ParamId`]; any recorded tensor by its handle.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
    param_nodes: HashMap<ParamId, Vec<usize>>,
}

impl Gradients {
    /// Adjoint of an arbitrary recorded tensor, if any gradient flowed to it.
    pub fn of(&self, t: Tensor) -> Option<&[f64]> {
        self.adjoints[t.id].as_deref()
    }

    /// Gradient for a trainable bound parameter. `None` when the loss did not
    /// depend on it (frozen leaves are never present).
    pub fn param(&self, id: ParamId) -> Option<Vec<f64>> {
        let nodes = self.param_nodes.get(&id)?;
        let mut acc: Option<Vec<f64>> = None;
        for &n in nodes {
            if let Some(adj) = &self.adjoints[n] {
                match &mut acc {
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(adj) {
                            *x += y;
                        }
                    }
                    None => acc = Some(adj.clone()),
                }
            }
        }
        acc
    }

    /// Ids of trainable parameters that received a gradient, ascending.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .param_nodes
            .iter()
            .filter(|(_, nodes)| nodes.iter().any(|&n| self.adjoints[n].is_some()))
            .map(|(id, _)| *id)
            .collect();
        ids.sort();
        ids
    }

    pub fn contains_param(&self, id: ParamId) -> bool {
        self.param_nodes
            .get(&id)
            .is_some_and(|nodes| nodes.iter().any(|&n| self.adjoints[n].is_some()))
    }
}

fn shape_str(rows: usize, cols: usize) -> String {
    format!("{rows}x{cols}")
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node) -> Tensor {
        debug_assert_eq!(node.rows * node.cols, node.value.len());
        debug_assert!(
            node.value.iter().all(|v| v.is_finite()),
            "non-finite value out of {:?}",
            node.op
        );
        let id = self.nodes.len();
        self.nodes.push(node);
        Tensor { id }
    }

    fn leaf(&mut self, value: Vec<f64>, rows: usize, cols: usize, param: Option<ParamId>, trainable: bool) -> Tensor {
        self.push(Node {
            op: Op::Leaf,
            rows,
            cols,
            value,
            param,
            trainable,
        })
    }

    /// Record a constant (no gradient reported, but adjoints still flow
    /// through it to earlier nodes — constants are terminal leaves).
    pub fn constant(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Tensor {
        assert_eq!(rows * cols, value.len(), "constant: shape/value mismatch");
        self.leaf(value, rows, cols, None, false)
    }

    /// Record an input that tests may take gradients of without it being a
    /// registered parameter.
    pub fn var(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Tensor {
        assert_eq!(rows * cols, value.len(), "var: shape/value mismatch");
        self.leaf(value, rows, cols, None, true)
    }

    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.constant(vec![v], 1, 1)
    }

    /// Bind a stored parameter onto this tape as a leaf. Shapes `[]`, `[n]`
    /// and `[n, m]` map to 1x1, 1xn and nxm tensors.
    pub fn bind(&mut self, params: &ParamSet, id: ParamId) -> Tensor {
        let entry = params.entry(id);
        let (rows, cols) = match entry.shape.len() {
            0 => (1, 1),
            1 => (1, entry.shape[0]),
            2 => (entry.shape[0], entry.shape[1]),
            n => panic!("parameter {} has unsupported rank {n}", entry.name),
        };
        self.leaf(entry.data.clone(), rows, cols, Some(id), entry.trainable)
    }

    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.id].value
    }

    pub fn rows(&self, t: Tensor) -> usize {
        self.nodes[t.id].rows
    }

    pub fn cols(&self, t: Tensor) -> usize {
        self.nodes[t.id].cols
    }

    pub fn shape(&self, t: Tensor) -> [usize; 2] {
        [self.nodes[t.id].rows, self.nodes[t.id].cols]
    }

    fn numel(&self, t: Tensor) -> usize {
        self.nodes[t.id].value.len()
    }

    // ---- operations ----------------------------------------------------

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(a), self.cols(a));
        let (k2, n) = (self.rows(b), self.cols(b));
        if k != k2 {
            return Err(Error::dimension(
                "matmul",
                shape_str(m, k),
                shape_str(k2, n),
            ));
        }
        let value = matmul_raw(self.value(a), self.value(b), m, k, n);
        Ok(self.push(Node {
            op: Op::Matmul { a, b },
            rows: m,
            cols: n,
            value,
            param: None,
            trainable: false,
        }))
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Tensor, b: Tensor) -> Result<Tensor> {
        match op {
            ElementwiseOp::Add => self.add(a, b),
            ElementwiseOp::Sub => self.sub(a, b),
            ElementwiseOp::Mul => self.mul(a, b),
        }
    }

    /// Shapes must match, or one operand must be a 1x1 scalar.
    fn binary_shape(&self, op: &'static str, a: Tensor, b: Tensor) -> Result<(usize, usize)> {
        let (ar, ac) = (self.rows(a), self.cols(a));
        let (br, bc) = (self.rows(b), self.cols(b));
        if (ar, ac) == (br, bc) {
            Ok((ar, ac))
        } else if ar * ac == 1 {
            Ok((br, bc))
        } else if br * bc == 1 {
            Ok((ar, ac))
        } else {
            Err(Error::dimension(
                op,
                format!("{} (or scalar)", shape_str(ar, ac)),
                shape_str(br, bc),
            ))
        }
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (rows, cols) = self.binary_shape("add", a, b)?;
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(Node {
            op: Op::Add { a, b },
            rows,
            cols,
            value,
            param: None,
            trainable: false,
        }))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (rows, cols) = self.binary_shape("sub", a, b)?;
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(Node {
            op: Op::Sub { a, b },
            rows,
            cols,
            value,
            param: None,
            trainable: false,
        }))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (rows, cols) = self.binary_shape("mul", a, b)?;
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(Node {
            op: Op::Mul { a, b },
            rows,
            cols,
            value,
            param: None,
            trainable: false,
        }))
    }

    pub fn add_bias(&mut self, x: Tensor, bias: Tensor) -> Result<Tensor> {
        let (n, d) = (self.rows(x), self.cols(x));
        let (br, bc) = (self.rows(bias), self.cols(bias));
        if br != 1 || bc != d {
            return Err(Error::dimension("add_bias", shape_str(1, d), shape_str(br, bc)));
        }
        let mut value = self.value(x).to_vec();
        let b = self.value(bias);
        for r in 0..n {
            for c in 0..d {
                value[r * d + c] += b[c];
            }
        }
        Ok(self.push(Node {
            op: Op::AddBias { x, bias },
            rows: n,
            cols: d,
            value,
            param: None,
            trainable: false,
        }))
    }

    pub fn relu(&mut self, x: Tensor) -> Tensor {
        let value = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let (rows, cols) = (self.rows(x), self.cols(x));
        self.push(Node {
            op: Op::Relu { x },
            rows,
            cols,
            value,
            param: None,
            trainable: false,
        })
    }

    pub fn softplus(&mut self, x: Tensor) -> Tensor {
        let value = self.value(x).iter().map(|&v| softplus_stable(v)).collect();
        let (rows, cols) = (self.rows(x), self.cols(x));
        self.push(Node {
            op: Op::Softplus { x },
            rows,
            cols,
            value,
            param: None,
            trainable: false,
        })
    }

    pub fn clamp_min(&mut self, x: Tensor, floor: f64) -> Tensor {
        let value = self.value(x).iter().map(|&v| v.max(floor)).collect();
        let (rows, cols) = (self.rows(x), self.cols(x));
        self.push(Node {
            op: Op::ClampMin { x, floor },
            rows,
            cols,
            value,
            param: None,
            trainable: false,
        })
    }

    pub fn scale_const(&mut self, x: Tensor, c: f64) -> Tensor {
        let value = self.value(x).iter().map(|&v| v * c).collect();
        let (rows, cols) = (self.rows(x), self.cols(x));
        self.push(Node {
            op: Op::ScaleConst { x, c },
            rows,
            cols,
            value,
            param: None,
            trainable: false,
        })
    }

    /// Row i of the output is the sum of input rows whose segment index is i.
    /// Empty segments yield zero rows.
    pub fn segment_sum(&mut self, x: Tensor, segments: &[usize], num_segments: usize) -> Result<Tensor> {
        let (n, d) = (self.rows(x), self.cols(x));
        if segments.len() != n {
            return Err(Error::dimension(
                "segment_sum",
                format!("{n} segment indices"),
                format!("{}", segments.len()),
            ));
        }
        for (r, &s) in segments.iter().enumerate() {
            if s >= num_segments {
                return Err(Error::IndexOutOfRange {
                    what: "segment index",
                    index: s,
                    limit: num_segments,
                });
            }
            let _ = r;
        }
        let xv = self.value(x);
        let mut value = vec![0.0; num_segments * d];
        for (r, &s) in segments.iter().enumerate() {
            for c in 0..d {
                value[s * d + c] += xv[r * d + c];
            }
        }
        Ok(self.push(Node {
            op: Op::SegmentSum {
                x,
                segments: segments.to_vec(),
            },
            rows: num_segments,
            cols: d,
            value,
            param: None,
            trainable: false,
        }))
    }

    /// Output row r is input row indices[r].
    pub fn gather_rows(&mut self, x: Tensor, indices: &[usize]) -> Result<Tensor> {
        let (n, d) = (self.rows(x), self.cols(x));
        for &i in indices {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    what: "row index",
                    index: i,
                    limit: n,
                });
            }
        }
        let xv = self.value(x);
        let mut value = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            value.extend_from_slice(&xv[i * d..(i + 1) * d]);
        }
        Ok(self.push(Node {
            op: Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            rows: indices.len(),
            cols: d,
            value,
            param: None,
            trainable: false,
        }))
    }

    /// Multiply row r by the constant factors[r] (used for mean pooling).
    pub fn scale_rows(&mut self, x: Tensor, factors: &[f64]) -> Result<Tensor> {
        let (n, d) = (self.rows(x), self.cols(x));
        if factors.len() != n {
            return Err(Error::dimension(
                "scale_rows",
                format!("{n} factors"),
                format!("{}", factors.len()),
            ));
        }
        let xv = self.value(x);
        let mut value = Vec::with_capacity(n * d);
        for (r, &f) in factors.iter().enumerate() {
            for c in 0..d {
                value.push(xv[r * d + c] * f);
            }
        }
        Ok(self.push(Node {
            op: Op::ScaleRows {
                x,
                factors: factors.to_vec(),
            },
            rows: n,
            cols: d,
            value,
            param: None,
            trainable: false,
        }))
    }

    pub fn row_sum(&mut self, x: Tensor) -> Tensor {
        let (n, d) = (self.rows(x), self.cols(x));
        let xv = self.value(x);
        let value = (0..n)
            .map(|r| xv[r * d..(r + 1) * d].iter().sum())
            .collect();
        self.push(Node {
            op: Op::RowSum { x },
            rows: n,
            cols: 1,
            value,
            param: None,
            trainable: false,
        })
    }

    pub fn sum_all(&mut self, x: Tensor) -> Tensor {
        let total = self.value(x).iter().sum();
        self.push(Node {
            op: Op::SumAll { x },
            rows: 1,
            cols: 1,
            value: vec![total],
            param: None,
            trainable: false,
        })
    }

    /// Mean over masked entries of the numerically stable BCE on logits.
    /// Labels and mask participate as constants; gradients flow to logits only.
    pub fn bce_with_logits_masked(&mut self, logits: Tensor, labels: Tensor, mask: Tensor) -> Result<Tensor> {
        let shape = self.shape(logits);
        if self.shape(labels) != shape || self.shape(mask) != shape {
            return Err(Error::dimension(
                "bce_with_logits_masked",
                shape_str(shape[0], shape[1]),
                format!(
                    "labels {}, mask {}",
                    shape_str(self.rows(labels), self.cols(labels)),
                    shape_str(self.rows(mask), self.cols(mask))
                ),
            ));
        }
        let mv = self.value(mask);
        let count: f64 = mv.iter().sum();
        if count <= 0.0 {
            return Err(Error::invalid(
                "bce_with_logits_masked",
                "mask has no observed entries",
            ));
        }
        let xv = self.value(logits);
        let yv = self.value(labels);
        let mut total = 0.0;
        for i in 0..xv.len() {
            if mv[i] != 0.0 {
                total += mv[i] * bce_logit_stable(xv[i], yv[i]);
            }
        }
        let value = vec![total / count];
        Ok(self.push(Node {
            op: Op::BceMasked {
                logits,
                labels,
                mask,
                count,
            },
            rows: 1,
            cols: 1,
            value,
            param: None,
            trainable: false,
        }))
    }

    /// Batch-statistics normalization. Returns the output plus the biased
    /// per-feature batch mean and variance (for running-stat updates).
    /// Requires at least 2 rows.
    pub(crate) fn bn_train(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        eps: f64,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let (n, d) = (self.rows(x), self.cols(x));
        self.bn_check_affine(gamma, beta, d)?;
        if n < 2 {
            return Err(Error::invalid(
                "batchnorm",
                format!("train mode needs a batch of at least 2 rows, got {n}"),
            ));
        }
        let xv = self.value(x);
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for c in 0..d {
                mean[c] += xv[r * d + c];
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for r in 0..n {
            for c in 0..d {
                let diff = xv[r * d + c] - mean[c];
                var[c] += diff * diff;
            }
        }
        for v in var.iter_mut() {
            *v /= n as f64;
        }
        let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut value = Vec::with_capacity(n * d);
        for r in 0..n {
            for c in 0..d {
                let xhat = (xv[r * d + c] - mean[c]) * invstd[c];
                value.push(gv[c] * xhat + bv[c]);
            }
        }
        let out = self.push(Node {
            op: Op::BnTrain {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                invstd,
            },
            rows: n,
            cols: d,
            value,
            param: None,
            trainable: false,
        });
        Ok((out, mean, var))
    }

    /// Normalization by the given fixed statistics (eval mode).
    pub(crate) fn bn_eval(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Tensor> {
        let (n, d) = (self.rows(x), self.cols(x));
        self.bn_check_affine(gamma, beta, d)?;
        if running_mean.len() != d || running_var.len() != d {
            return Err(Error::dimension(
                "batchnorm",
                format!("{d} running stats"),
                format!("{}/{}", running_mean.len(), running_var.len()),
            ));
        }
        let invstd: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut value = Vec::with_capacity(n * d);
        for r in 0..n {
            for c in 0..d {
                let xhat = (xv[r * d + c] - running_mean[c]) * invstd[c];
                value.push(gv[c] * xhat + bv[c]);
            }
        }
        Ok(self.push(Node {
            op: Op::BnEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                invstd,
            },
            rows: n,
            cols: d,
            value,
            param: None,
            trainable: false,
        }))
    }

    fn bn_check_affine(&self, gamma: Tensor, beta: Tensor, d: usize) -> Result<()> {
        for (name, t) in [("gamma", gamma), ("beta", beta)] {
            if self.numel(t) != d {
                return Err(Error::dimension(
                    "batchnorm",
                    format!("{name} with {d} entries"),
                    format!("{}", self.numel(t)),
                ));
            }
        }
        Ok(())
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns adjoints for every node the
    /// loss depends on; trainable bound parameters are exposed by id, frozen
    /// ones get no entry.
    pub fn backward(&self, loss: Tensor) -> Result<Gradients> {
        if self.numel(loss) != 1 {
            return Err(Error::dimension(
                "backward",
                "scalar loss (1x1)".to_string(),
                shape_str(self.rows(loss), self.cols(loss)),
            ));
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoints[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(d_out) = adjoints[id].take() else {
                continue;
            };
            self.backward_node(id, &d_out, &mut adjoints);
            adjoints[id] = Some(d_out);
        }

        let mut param_nodes: HashMap<ParamId, Vec<usize>> = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), true) = (node.param, node.trainable) {
                param_nodes.entry(pid).or_default().push(i);
            }
        }
        Ok(Gradients {
            adjoints,
            param_nodes,
        })
    }

    fn accumulate(adjoints: &mut [Option<Vec<f64>>], t: Tensor, contrib: &[f64]) {
        match &mut adjoints[t.id] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            None => adjoints[t.id] = Some(contrib.to_vec()),
        }
    }

    /// Adjoint contribution of `b` in a broadcast binary op, reduced to
    /// its shape when it was a scalar operand.
    fn reduce_to(&self, operand: Tensor, full: Vec<f64>) -> Vec<f64> {
        if self.numel(operand) == 1 && full.len() != 1 {
            vec![full.iter().sum()]
        } else {
            full
        }
    }

    fn backward_node(&self, id: usize, d_out: &[f64], adjoints: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.rows(*a), self.cols(*a));
                let n = self.cols(*b);
                // d_a = d_out . b^T ; d_b = a^T . d_out
                let bv = self.value(*b);
                let av = self.value(*a);
                let mut d_a = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let g = d_out[i * n + j];
                        if g != 0.0 {
                            for p in 0..k {
                                d_a[i * k + p] += g * bv[p * n + j];
                            }
                        }
                    }
                }
                let mut d_b = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let x = av[i * k + p];
                        if x != 0.0 {
                            for j in 0..n {
                                d_b[p * n + j] += x * d_out[i * n + j];
                            }
                        }
                    }
                }
                Self::accumulate(adjoints, *a, &d_a);
                Self::accumulate(adjoints, *b, &d_b);
            }
            Op::Add { a, b } => {
                let d_a = self.reduce_to(*a, d_out.to_vec());
                let d_b = self.reduce_to(*b, d_out.to_vec());
                Self::accumulate(adjoints, *a, &d_a);
                Self::accumulate(adjoints, *b, &d_b);
            }
            Op::Sub { a, b } => {
                let d_a = self.reduce_to(*a, d_out.to_vec());
                let d_b = self.reduce_to(*b, d_out.iter().map(|g| -g).collect());
                Self::accumulate(adjoints, *a, &d_a);
                Self::accumulate(adjoints, *b, &d_b);
            }
            Op::Mul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let full_a = broadcast_zip(d_out, bv, |g, y| g * y);
                let full_b = broadcast_zip(d_out, av, |g, x| g * x);
                let d_a = self.reduce_to(*a, full_a);
                let d_b = self.reduce_to(*b, full_b);
                Self::accumulate(adjoints, *a, &d_a);
                Self::accumulate(adjoints, *b, &d_b);
            }
            Op::AddBias { x, bias } => {
                let d = self.cols(*x);
                let n = self.rows(*x);
                let mut d_bias = vec![0.0; d];
                for r in 0..n {
                    for c in 0..d {
                        d_bias[c] += d_out[r * d + c];
                    }
                }
                Self::accumulate(adjoints, *x, d_out);
                Self::accumulate(adjoints, *bias, &d_bias);
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let d_x: Vec<f64> = d_out
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                Self::accumulate(adjoints, *x, &d_x);
            }
            Op::Softplus { x } => {
                let xv = self.value(*x);
                let d_x: Vec<f64> = d_out
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| g * sigmoid(v))
                    .collect();
                Self::accumulate(adjoints, *x, &d_x);
            }
            Op::ClampMin { x, floor } => {
                let xv = self.value(*x);
                let d_x: Vec<f64> = d_out
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| if v > *floor { *g } else { 0.0 })
                    .collect();
                Self::accumulate(adjoints, *x, &d_x);
            }
            Op::ScaleConst { x, c } => {
                let d_x: Vec<f64> = d_out.iter().map(|g| g * c).collect();
                Self::accumulate(adjoints, *x, &d_x);
            }
            Op::BnTrain {
                x,
                gamma,
                beta,
                mean,
                invstd,
            } => {
                let (n, d) = (self.rows(*x), self.cols(*x));
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let nf = n as f64;
                let mut d_gamma = vec![0.0; d];
                let mut d_beta = vec![0.0; d];
                let mut sum_dxhat = vec![0.0; d];
                let mut sum_dxhat_xhat = vec![0.0; d];
                for r in 0..n {
                    for c in 0..d {
                        let idx = r * d + c;
                        let xhat = (xv[idx] - mean[c]) * invstd[c];
                        let dxhat = d_out[idx] * gv[c];
                        d_gamma[c] += d_out[idx] * xhat;
                        d_beta[c] += d_out[idx];
                        sum_dxhat[c] += dxhat;
                        sum_dxhat_xhat[c] += dxhat * xhat;
                    }
                }
                let mut d_x = vec![0.0; n * d];
                for r in 0..n {
                    for c in 0..d {
                        let idx = r * d + c;
                        let xhat = (xv[idx] - mean[c]) * invstd[c];
                        let dxhat = d_out[idx] * gv[c];
                        d_x[idx] = invstd[c] / nf
                            * (nf * dxhat - sum_dxhat[c] - xhat * sum_dxhat_xhat[c]);
                    }
                }
                Self::accumulate(adjoints, *x, &d_x);
                Self::accumulate(adjoints, *gamma, &d_gamma);
                Self::accumulate(adjoints, *beta, &d_beta);
            }
            Op::BnEval {
                x,
                gamma,
                beta,
                mean,
                invstd,
            } => {
                let (n, d) = (self.rows(*x), self.cols(*x));
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let mut d_x = vec![0.0; n * d];
                let mut d_gamma = vec![0.0; d];
                let mut d_beta = vec![0.0; d];
                for r in 0..n {
                    for c in 0..d {
                        let idx = r * d + c;
                        let xhat = (xv[idx] - mean[c]) * invstd[c];
                        d_x[idx] = d_out[idx] * gv[c] * invstd[c];
                        d_gamma[c] += d_out[idx] * xhat;
                        d_beta[c] += d_out[idx];
                    }
                }
                Self::accumulate(adjoints, *x, &d_x);
                Self::accumulate(adjoints, *gamma, &d_gamma);
                Self::accumulate(adjoints, *beta, &d_beta);
            }
            Op::SegmentSum { x, segments } => {
                let d = self.cols(*x);
                let mut d_x = vec![0.0; self.numel(*x)];
                for (r, &s) in segments.iter().enumerate() {
                    d_x[r * d..(r + 1) * d].copy_from_slice(&d_out[s * d..(s + 1) * d]);
                }
                Self::accumulate(adjoints, *x, &d_x);
            }
            Op::GatherRows { x, indices } => {
                let d = self.cols(*x);
                let mut d_x = vec![0.0; self.numel(*x)];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..d {
                        d_x[i * d + c] += d_out[r * d + c];
                    }
                }
                Self::accumulate(adjoints, *x, &d_x);
            }
            Op::ScaleRows { x, factors } => {
                let d = self.cols(*x);
                let mut d_x = vec![0.0; self.numel(*x)];
                for (r, &f) in factors.iter().enumerate() {
                    for c in 0..d {
                        d_x[r * d + c] = d_out[r * d + c] * f;
                    }
                }
                Self::accumulate(adjoints, *x, &d_x);
            }
            Op::RowSum { x } => {
                let (n, d) = (self.rows(*x), self.cols(*x));
                let mut d_x = vec![0.0; n * d];
                for r in 0..n {
                    for c in 0..d {
                        d_x[r * d + c] = d_out[r];
                    }
                }
                Self::accumulate(adjoints, *x, &d_x);
            }
            Op::SumAll { x } => {
                let d_x = vec![d_out[0]; self.numel(*x)];
                Self::accumulate(adjoints, *x, &d_x);
            }
            Op::BceMasked {
                logits,
                labels,
                mask,
                count,
            } => {
                let xv = self.value(*logits);
                let yv = self.value(*labels);
                let mv = self.value(*mask);
                let g = d_out[0] / count;
                let d_logits: Vec<f64> = (0..xv.len())
                    .map(|i| {
                        if mv[i] != 0.0 {
                            g * mv[i] * (sigmoid(xv[i]) - yv[i])
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Self::accumulate(adjoints, *logits, &d_logits);
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let x = a[i * k + p];
            if x != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += x * brow[j];
                }
            }
        }
    }
    out
}

fn broadcast_zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if a.len() == b.len() {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    } else if a.len() == 1 {
        b.iter().map(|&y| f(a[0], y)).collect()
    } else {
        debug_assert_eq!(b.len(), 1);
        a.iter().map(|&x| f(x, b[0])).collect()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(x)) without overflow.
fn softplus_stable(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Stable BCE-with-logits for one entry: max(x,0) - x*y + log(1+exp(-|x|)).
fn bce_logit_stable(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}
