//! Model persistence: a versioned JSON document holding a config header and
//! every parameter (name, shape, trainable flag, row-major values) in
//! registration order.
//!
//! Serialization is deterministic: the same model state produces the same
//! bytes, and values survive a save/load cycle bit for bit. All inputs are
//! validated before anything is instantiated, so a corrupted or hostile file
//! fails with an error instead of a panic.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterKind, AdapterStack, ScaleMode};
use crate::backbone::{Backbone, ClassifierHead};
use crate::error::{Error, Result};
use crate::numerics::params::{ParamId, ParamSet};

pub const FORMAT_VERSION: u32 = 1;

/// Adapter configuration stored alongside the weights. `kind` is never
/// `None` here; a model without adapters simply omits the spec.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    pub d_mid: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scale_mode: Option<ScaleMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: u32,
    pub n_layers: usize,
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_edge: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_tasks: Option<usize>,
    pub frozen: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub adapter: Option<AdapterSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<ParamRecord>,
}

/// A fully wired model: the parameter store plus the handle structs that
/// index into it.
#[derive(Debug)]
pub struct ModelBundle {
    pub params: ParamSet,
    pub backbone: Backbone,
    pub adapters: Option<AdapterStack>,
    pub head: Option<ClassifierHead>,
}

/// Capture the complete model state. Parameters are recorded in
/// registration order, which fixes the byte layout of the JSON output.
pub fn snapshot(
    params: &ParamSet,
    backbone: &Backbone,
    adapters: Option<&AdapterStack>,
    head: Option<&ClassifierHead>,
) -> Checkpoint {
    let adapter = adapters.map(|stack| AdapterSpec {
        kind: stack.kind(),
        d_mid: stack.d_mid(),
        scale_mode: stack.scale_mode(),
    });
    let header = CheckpointHeader {
        format: FORMAT_VERSION,
        n_layers: backbone.n_layers(),
        d_in: backbone.d_in,
        d_hidden: backbone.d_hidden,
        d_edge: backbone.d_edge,
        n_tasks: head.map(|h| h.n_tasks),
        frozen: backbone.frozen,
        adapter,
    };
    let records = params
        .iter()
        .map(|(_, e)| ParamRecord {
            name: e.name.clone(),
            shape: e.shape.clone(),
            trainable: e.trainable,
            data: e.data.clone(),
        })
        .collect();
    Checkpoint {
        header,
        params: records,
    }
}

impl Checkpoint {
    pub fn to_json_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint serialization cannot fail")
    }

    /// Structural validation: dimensions positive, no duplicate or empty
    /// names, shapes consistent with value counts (without overflow), all
    /// values finite, adapter spec coherent.
    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Checkpoint(msg));
        let h = &self.header;
        if h.format != FORMAT_VERSION {
            return bad(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                h.format
            ));
        }
        if h.n_layers == 0 || h.d_in == 0 || h.d_hidden == 0 {
            return bad("n_layers, d_in, and d_hidden must all be positive".to_string());
        }
        if h.n_tasks == Some(0) {
            return bad("n_tasks must be positive when present".to_string());
        }
        if let Some(spec) = &h.adapter {
            if spec.d_mid == 0 {
                return bad("adapter d_mid must be positive".to_string());
            }
            match (spec.kind, spec.scale_mode) {
                (AdapterKind::None, _) => {
                    return bad("adapter spec with kind none; omit the spec instead".to_string())
                }
                (AdapterKind::Gaussian, None) => {
                    return bad("gaussian adapter spec requires a scale_mode".to_string())
                }
                (AdapterKind::Deterministic, Some(_)) => {
                    return bad("deterministic adapter spec does not take a scale_mode".to_string())
                }
                _ => {}
            }
            if let Some(ScaleMode::Fixed(c)) = spec.scale_mode {
                if !c.is_finite() {
                    return bad("fixed scale value must be finite".to_string());
                }
            }
        }
        let mut seen = HashSet::new();
        for rec in &self.params {
            if rec.name.is_empty() {
                return bad("parameter with empty name".to_string());
            }
            if !seen.insert(rec.name.as_str()) {
                return bad(format!("duplicate parameter name {}", rec.name));
            }
            let count = rec
                .shape
                .iter()
                .try_fold(1usize, |acc, &s| acc.checked_mul(s))
                .ok_or_else(|| {
                    Error::Checkpoint(format!("parameter {}: shape overflows", rec.name))
                })?;
            if count == 0 {
                return bad(format!("parameter {}: zero-sized shape", rec.name));
            }
            if count != rec.data.len() {
                return bad(format!(
                    "parameter {}: shape {:?} does not match {} values",
                    rec.name,
                    rec.shape,
                    rec.data.len()
                ));
            }
            if rec.data.iter().any(|v| !v.is_finite()) {
                return bad(format!("parameter {}: non-finite value", rec.name));
            }
        }
        Ok(())
    }

    /// Rebuild the parameter set and handle structs. Shapes are checked
    /// against the roles the header assigns, so a file that parses but
    /// mislabels a matrix is still rejected.
    pub fn instantiate(&self) -> Result<ModelBundle> {
        self.validate()?;
        let h = &self.header;
        let mut params = ParamSet::new();
        for rec in &self.params {
            params.insert(rec.name.clone(), rec.shape.clone(), rec.data.clone(), rec.trainable);
        }
        let backbone = Backbone::lookup(&params, h.n_layers, h.d_in, h.d_hidden, h.d_edge, h.frozen)?;
        let adapters = match &h.adapter {
            None => None,
            Some(spec) => Some(match spec.kind {
                AdapterKind::Deterministic => {
                    AdapterStack::lookup_deterministic(&params, h.n_layers, h.d_hidden, spec.d_mid)?
                }
                AdapterKind::Gaussian => AdapterStack::lookup_gaussian(
                    &params,
                    h.n_layers,
                    h.d_hidden,
                    spec.d_mid,
                    spec.scale_mode.expect("validated above"),
                )?,
                AdapterKind::None => unreachable!("validated above"),
            }),
        };
        let head = match h.n_tasks {
            Some(t) => Some(ClassifierHead::lookup(&params, t)?),
            None => None,
        };
        let bundle = ModelBundle {
            params,
            backbone,
            adapters,
            head,
        };
        check_roles(&bundle, h)?;
        Ok(bundle)
    }
}

fn expect_shape(params: &ParamSet, id: ParamId, want: &[usize]) -> Result<()> {
    if params.shape(id) != want {
        return Err(Error::Checkpoint(format!(
            "parameter {}: shape {:?} where {:?} expected",
            params.name(id),
            params.shape(id),
            want
        )));
    }
    Ok(())
}

fn check_bn(params: &ParamSet, bn: &crate::numerics::batchnorm::BatchNorm, d: usize) -> Result<()> {
    for id in bn.param_ids() {
        expect_shape(params, id, &[d])?;
    }
    Ok(())
}

fn check_roles(bundle: &ModelBundle, h: &CheckpointHeader) -> Result<()> {
    let p = &bundle.params;
    let b = &bundle.backbone;
    let d = h.d_hidden;
    expect_shape(p, b.encoder_w, &[h.d_in, d])?;
    expect_shape(p, b.encoder_b, &[d])?;
    for layer in &b.layers {
        expect_shape(p, layer.w1, &[d, d])?;
        expect_shape(p, layer.b1, &[d])?;
        expect_shape(p, layer.w2, &[d, d])?;
        expect_shape(p, layer.b2, &[d])?;
        expect_shape(p, layer.eps_gin, &[1])?;
        if let Some(ep) = layer.edge_proj {
            expect_shape(p, ep, &[h.d_edge, d])?;
        }
        check_bn(p, &layer.bn, d)?;
        if h.frozen {
            for id in layer.param_ids() {
                if p.is_trainable(id) {
                    return Err(Error::Checkpoint(format!(
                        "frozen checkpoint marks {} trainable",
                        p.name(id)
                    )));
                }
            }
        }
    }
    if h.frozen && (p.is_trainable(b.encoder_w) || p.is_trainable(b.encoder_b)) {
        return Err(Error::Checkpoint(
            "frozen checkpoint marks the encoder trainable".to_string(),
        ));
    }
    match &bundle.adapters {
        Some(AdapterStack::Deterministic(v)) => {
            for a in v {
                expect_shape(p, a.w_down, &[d, a.d_mid])?;
                expect_shape(p, a.w_up, &[a.d_mid, d])?;
                check_bn(p, &a.bn_out, d)?;
                check_bn(p, &a.bn_y, d)?;
            }
        }
        Some(AdapterStack::Gaussian(v)) => {
            for a in v {
                expect_shape(p, a.mean_w_down, &[d, a.d_mid])?;
                expect_shape(p, a.mean_w_up, &[a.d_mid, d])?;
                check_bn(p, &a.mean_bn, d)?;
                expect_shape(p, a.std_w_down, &[d, a.d_mid])?;
                expect_shape(p, a.std_w_up, &[a.d_mid, d])?;
                check_bn(p, &a.std_bn, d)?;
                expect_shape(p, a.scale, &[1])?;
                check_bn(p, &a.bn_y, d)?;
                match a.scale_mode {
                    ScaleMode::Fixed(c) => {
                        if p.data(a.scale)[0] != c {
                            return Err(Error::Checkpoint(format!(
                                "{}: fixed scale stores {} but header says {c}",
                                p.name(a.scale),
                                p.data(a.scale)[0]
                            )));
                        }
                        if p.is_trainable(a.scale) {
                            return Err(Error::Checkpoint(format!(
                                "{}: fixed scale marked trainable",
                                p.name(a.scale)
                            )));
                        }
                    }
                    ScaleMode::Learnable => {
                        if !p.is_trainable(a.scale) {
                            return Err(Error::Checkpoint(format!(
                                "{}: learnable scale marked non-trainable",
                                p.name(a.scale)
                            )));
                        }
                    }
                }
            }
        }
        None => {}
    }
    if let Some(head) = &bundle.head {
        expect_shape(p, head.w, &[d, head.n_tasks])?;
        expect_shape(p, head.b, &[head.n_tasks])?;
    }
    Ok(())
}

/// Parse and validate checkpoint bytes. Never panics on malformed input.
pub fn from_json_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let ckpt: Checkpoint = serde_json::from_slice(bytes)?;
    ckpt.validate()?;
    Ok(ckpt)
}

/// Write bytes to `path` through a temporary file in the same directory, so
/// a crash never leaves a half-written file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty());
    let tmp = match dir {
        Some(d) => d.join(format!(
            ".{}.tmp",
            path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
        )),
        None => Path::new(&format!(
            ".{}.tmp",
            path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
        ))
        .to_path_buf(),
    };
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path.as_ref(), &ckpt.to_json_bytes())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_json_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
