//! Bottleneck adapters inserted beside frozen GIN layers: the deterministic
//! baseline (point estimate) and the Gaussian variant that models each
//! insertion point as a distribution, sampled via reparameterization.
//!
//! Both kinds read the layer input x, squeeze it through d_mid, and add
//! their output to the batch-normalized layer output y. Only adapters, their
//! BN affines, the learnable scale, and the head train while the backbone
//! stays frozen.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::batchnorm::{BatchNorm, BnMode};
use crate::numerics::params::{uniform_init, ParamId, ParamSet};
use crate::numerics::tape::{Tape, Tensor};

/// Floor applied to the standard deviation after softplus.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Learnable scale initialization.
pub const SCALE_INIT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// s starts at 0.01 and trains with everything else.
    Learnable,
    /// s stays at the given constant; no gradient ever reaches it.
    Fixed(f64),
}

/// Which adapter variant a fine-tuning run inserts, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    None,
    Deterministic,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    Sample,
    Zero,
}

/// Source of the reparameterization noise. Zero mode emits exact
/// zeros (the deterministic mean path used for evaluation); sample mode draws
/// standard normals from a dedicated stream.
#[derive(Debug)]
pub struct NoiseSource {
    mode: NoiseMode,
    rng: Option<ChaCha8Rng>,
}

impl NoiseSource {
    pub fn zero() -> Self {
        NoiseSource {
            mode: NoiseMode::Zero,
            rng: None,
        }
    }

    pub fn sample(rng: ChaCha8Rng) -> Self {
        NoiseSource {
            mode: NoiseMode::Sample,
            rng: Some(rng),
        }
    }

    pub fn mode(&self) -> NoiseMode {
        self.mode
    }

    pub fn draw(&mut self, len: usize) -> Vec<f64> {
        match self.mode {
            NoiseMode::Zero => vec![0.0; len],
            NoiseMode::Sample => {
                let rng = self.rng.as_mut().expect("sample mode carries a stream");
                (0..len).map(|_| StandardNormal.sample(rng)).collect()
            }
        }
    }
}

/// Baseline bottleneck adapter: z = BN(W_up . ReLU(W_down . x)), integrated
/// as x_hat = BN_y(y) + z.
#[derive(Debug, Clone, Copy)]
pub struct DeterministicAdapter {
    pub w_down: ParamId,
    pub w_up: ParamId,
    pub bn_out: BatchNorm,
    pub bn_y: BatchNorm,
    pub d: usize,
    pub d_mid: usize,
}

impl DeterministicAdapter {
    pub fn init(params: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, d: usize, d_mid: usize) -> Self {
        assert!(d_mid >= 1, "d_mid must be at least 1");
        let w_down = params.insert(
            format!("{prefix}.w_down"),
            vec![d, d_mid],
            uniform_init(rng, d, d_mid, 1.0),
            true,
        );
        let w_up = params.insert(
            format!("{prefix}.w_up"),
            vec![d_mid, d],
            uniform_init(rng, d_mid, d, 1.0),
            true,
        );
        let bn_out = BatchNorm::init(params, &format!("{prefix}.bn"), d);
        let bn_y = BatchNorm::init(params, &format!("{prefix}.bn_y"), d);
        DeterministicAdapter {
            w_down,
            w_up,
            bn_out,
            bn_y,
            d,
            d_mid,
        }
    }

    pub fn lookup(params: &ParamSet, prefix: &str, d: usize, d_mid: usize) -> Result<Self> {
        let get = |suffix: &str| {
            params
                .lookup(&format!("{prefix}.{suffix}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {prefix}.{suffix}")))
        };
        Ok(DeterministicAdapter {
            w_down: get("w_down")?,
            w_up: get("w_up")?,
            bn_out: BatchNorm::lookup(params, &format!("{prefix}.bn"), d)?,
            bn_y: BatchNorm::lookup(params, &format!("{prefix}.bn_y"), d)?,
            d,
            d_mid,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w_down, self.w_up];
        ids.extend(self.bn_out.param_ids());
        ids.extend(self.bn_y.param_ids());
        ids
    }
}

/// z = BN(W_up . ReLU(W_down . x)).
pub fn det_adapter_forward(
    tape: &mut Tape,
    params: &mut ParamSet,
    a: &DeterministicAdapter,
    x: Tensor,
    mode: BnMode,
) -> Result<Tensor> {
    if tape.cols(x) != a.d {
        return Err(Error::dimension(
            "det_adapter_forward",
            format!("input width {}", a.d),
            format!("{}", tape.cols(x)),
        ));
    }
    let w_down = tape.bind(params, a.w_down);
    let w_up = tape.bind(params, a.w_up);
    let mid = tape.matmul(x, w_down)?;
    let hidden = tape.relu(mid);
    let raw = tape.matmul(hidden, w_up)?;
    a.bn_out.forward(tape, params, raw, mode)
}

/// Uncertainty adapter: a mean branch, a variance branch, a learnable (or
/// fixed) scale, and the BN applied to the backbone output at integration.
#[derive(Debug, Clone, Copy)]
pub struct GaussianAdapter {
    pub mean_w_down: ParamId,
    pub mean_w_up: ParamId,
    pub mean_bn: BatchNorm,
    pub std_w_down: ParamId,
    pub std_w_up: ParamId,
    pub std_bn: BatchNorm,
    pub scale: ParamId,
    pub scale_mode: ScaleMode,
    pub bn_y: BatchNorm,
    pub d: usize,
    pub d_mid: usize,
}

impl GaussianAdapter {
    pub fn init(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        d_mid: usize,
        scale_mode: ScaleMode,
    ) -> Self {
        assert!(d_mid >= 1, "d_mid must be at least 1");
        let mean_w_down = params.insert(
            format!("{prefix}.mean.w_down"),
            vec![d, d_mid],
            uniform_init(rng, d, d_mid, 1.0),
            true,
        );
        let mean_w_up = params.insert(
            format!("{prefix}.mean.w_up"),
            vec![d_mid, d],
            uniform_init(rng, d_mid, d, 1.0),
            true,
        );
        let mean_bn = BatchNorm::init(params, &format!("{prefix}.mean.bn"), d);
        let std_w_down = params.insert(
            format!("{prefix}.std.w_down"),
            vec![d, d_mid],
            uniform_init(rng, d, d_mid, 1.0),
            true,
        );
        // Near-zero up-projection keeps the initial raw std pre-activation
        // small, so sigma starts near softplus(0).
        let std_w_up = params.insert(
            format!("{prefix}.std.w_up"),
            vec![d_mid, d],
            uniform_init(rng, d_mid, d, 1e-3),
            true,
        );
        let std_bn = BatchNorm::init(params, &format!("{prefix}.std.bn"), d);
        let (scale_value, trainable) = match scale_mode {
            ScaleMode::Learnable => (SCALE_INIT, true),
            ScaleMode::Fixed(c) => (c, false),
        };
        let scale = params.insert(format!("{prefix}.scale"), vec![1], vec![scale_value], trainable);
        let bn_y = BatchNorm::init(params, &format!("{prefix}.bn_y"), d);
        GaussianAdapter {
            mean_w_down,
            mean_w_up,
            mean_bn,
            std_w_down,
            std_w_up,
            std_bn,
            scale,
            scale_mode,
            bn_y,
            d,
            d_mid,
        }
    }

    pub fn lookup(
        params: &ParamSet,
        prefix: &str,
        d: usize,
        d_mid: usize,
        scale_mode: ScaleMode,
    ) -> Result<Self> {
        let get = |suffix: &str| {
            params
                .lookup(&format!("{prefix}.{suffix}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {prefix}.{suffix}")))
        };
        Ok(GaussianAdapter {
            mean_w_down: get("mean.w_down")?,
            mean_w_up: get("mean.w_up")?,
            mean_bn: BatchNorm::lookup(params, &format!("{prefix}.mean.bn"), d)?,
            std_w_down: get("std.w_down")?,
            std_w_up: get("std.w_up")?,
            std_bn: BatchNorm::lookup(params, &format!("{prefix}.std.bn"), d)?,
            scale: get("scale")?,
            scale_mode,
            bn_y: BatchNorm::lookup(params, &format!("{prefix}.bn_y"), d)?,
            d,
            d_mid,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.mean_w_down, self.mean_w_up];
        ids.extend(self.mean_bn.param_ids());
        ids.push(self.std_w_down);
        ids.push(self.std_w_up);
        ids.extend(self.std_bn.param_ids());
        ids.push(self.scale);
        ids.extend(self.bn_y.param_ids());
        ids
    }
}

fn bottleneck(
    tape: &mut Tape,
    params: &mut ParamSet,
    w_down: ParamId,
    w_up: ParamId,
    bn: &BatchNorm,
    x: Tensor,
    mode: BnMode,
) -> Result<Tensor> {
    let wd = tape.bind(params, w_down);
    let wu = tape.bind(params, w_up);
    let mid = tape.matmul(x, wd)?;
    let hidden = tape.relu(mid);
    let raw = tape.matmul(hidden, wu)?;
    bn.forward(tape, params, raw, mode)
}

/// mu = BN(W_up . ReLU(W_down . x)).
pub fn gauss_mean(
    tape: &mut Tape,
    params: &mut ParamSet,
    a: &GaussianAdapter,
    x: Tensor,
    mode: BnMode,
) -> Result<Tensor> {
    if tape.cols(x) != a.d {
        return Err(Error::dimension(
            "gauss_mean",
            format!("input width {}", a.d),
            format!("{}", tape.cols(x)),
        ));
    }
    bottleneck(tape, params, a.mean_w_down, a.mean_w_up, &a.mean_bn, x, mode)
}

/// sigma = max(softplus(BN(W~_up . ReLU(W~_down . x))), 1e-6): strictly
/// positive for every input.
pub fn gauss_std(
    tape: &mut Tape,
    params: &mut ParamSet,
    a: &GaussianAdapter,
    x: Tensor,
    mode: BnMode,
) -> Result<Tensor> {
    if tape.cols(x) != a.d {
        return Err(Error::dimension(
            "gauss_std",
            format!("input width {}", a.d),
            format!("{}", tape.cols(x)),
        ));
    }
    let raw = bottleneck(tape, params, a.std_w_down, a.std_w_up, &a.std_bn, x, mode)?;
    let soft = tape.softplus(raw);
    Ok(tape.clamp_min(soft, SIGMA_FLOOR))
}

/// z = mu + eps (.) sigma with eps from the noise source; zero mode gives
/// z = mu exactly. Differentiable in mu and sigma, not in eps.
pub fn sample_z(
    tape: &mut Tape,
    mu: Tensor,
    sigma: Tensor,
    noise: &mut NoiseSource,
) -> Result<Tensor> {
    if tape.shape(mu) != tape.shape(sigma) {
        return Err(Error::dimension(
            "sample_z",
            format!("{:?}", tape.shape(mu)),
            format!("{:?}", tape.shape(sigma)),
        ));
    }
    let [rows, cols] = tape.shape(mu);
    let eps = noise.draw(rows * cols);
    let eps_t = tape.constant(eps, rows, cols);
    let scaled = tape.mul(eps_t, sigma)?;
    tape.add(mu, scaled)
}

/// x_hat = BN_y(y) + s . z.
pub fn integrate(
    tape: &mut Tape,
    params: &mut ParamSet,
    a: &GaussianAdapter,
    y: Tensor,
    z: Tensor,
    mode: BnMode,
) -> Result<Tensor> {
    if tape.shape(y) != tape.shape(z) {
        return Err(Error::dimension(
            "integrate",
            format!("{:?}", tape.shape(y)),
            format!("{:?}", tape.shape(z)),
        ));
    }
    let normed = a.bn_y.forward(tape, params, y, mode)?;
    let s = tape.bind(params, a.scale);
    let scaled = tape.mul(s, z)?;
    tape.add(normed, scaled)
}

/// One adapter per GIN layer, all the same kind.
#[derive(Debug, Clone)]
pub enum AdapterStack {
    Deterministic(Vec<DeterministicAdapter>),
    Gaussian(Vec<GaussianAdapter>),
}

impl AdapterStack {
    pub fn init_deterministic(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        n_layers: usize,
        d: usize,
        d_mid: usize,
    ) -> Self {
        AdapterStack::Deterministic(
            (0..n_layers)
                .map(|l| DeterministicAdapter::init(params, rng, &format!("adapter{l}"), d, d_mid))
                .collect(),
        )
    }

    pub fn init_gaussian(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        n_layers: usize,
        d: usize,
        d_mid: usize,
        scale_mode: ScaleMode,
    ) -> Self {
        AdapterStack::Gaussian(
            (0..n_layers)
                .map(|l| {
                    GaussianAdapter::init(params, rng, &format!("adapter{l}"), d, d_mid, scale_mode)
                })
                .collect(),
        )
    }

    pub fn lookup_deterministic(
        params: &ParamSet,
        n_layers: usize,
        d: usize,
        d_mid: usize,
    ) -> Result<Self> {
        Ok(AdapterStack::Deterministic(
            (0..n_layers)
                .map(|l| DeterministicAdapter::lookup(params, &format!("adapter{l}"), d, d_mid))
                .collect::<Result<Vec<_>>>()?,
        ))
    }

    pub fn lookup_gaussian(
        params: &ParamSet,
        n_layers: usize,
        d: usize,
        d_mid: usize,
        scale_mode: ScaleMode,
    ) -> Result<Self> {
        Ok(AdapterStack::Gaussian(
            (0..n_layers)
                .map(|l| {
                    GaussianAdapter::lookup(params, &format!("adapter{l}"), d, d_mid, scale_mode)
                })
                .collect::<Result<Vec<_>>>()?,
        ))
    }

    pub fn kind(&self) -> AdapterKind {
        match self {
            AdapterStack::Deterministic(_) => AdapterKind::Deterministic,
            AdapterStack::Gaussian(_) => AdapterKind::Gaussian,
        }
    }

    pub fn d_mid(&self) -> usize {
        match self {
            AdapterStack::Deterministic(v) => v.first().map_or(0, |a| a.d_mid),
            AdapterStack::Gaussian(v) => v.first().map_or(0, |a| a.d_mid),
        }
    }

    pub fn scale_mode(&self) -> Option<ScaleMode> {
        match self {
            AdapterStack::Deterministic(_) => None,
            AdapterStack::Gaussian(v) => v.first().map(|a| a.scale_mode),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AdapterStack::Deterministic(v) => v.len(),
            AdapterStack::Gaussian(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            AdapterStack::Deterministic(v) => v.iter().flat_map(|a| a.param_ids()).collect(),
            AdapterStack::Gaussian(v) => v.iter().flat_map(|a| a.param_ids()).collect(),
        }
    }

    /// Layer l insertion: take the layer input x and the GIN output y,
    /// return x_hat. Deterministic: BN_y(y) + z. Gaussian: BN_y(y) + s * z
    /// with z = mu + eps (.) sigma.
    pub fn apply(
        &self,
        tape: &mut Tape,
        params: &mut ParamSet,
        layer: usize,
        x: Tensor,
        y: Tensor,
        mode: BnMode,
        noise: &mut NoiseSource,
    ) -> Result<Tensor> {
        match self {
            AdapterStack::Deterministic(v) => {
                let a = &v[layer];
                let z = det_adapter_forward(tape, params, a, x, mode)?;
                let normed = a.bn_y.forward(tape, params, y, mode)?;
                tape.add(normed, z)
            }
            AdapterStack::Gaussian(v) => {
                let a = &v[layer];
                let mu = gauss_mean(tape, params, a, x, mode)?;
                let sigma = gauss_std(tape, params, a, x, mode)?;
                let z = sample_z(tape, mu, sigma, noise)?;
                integrate(tape, params, a, y, z, mode)
            }
        }
    }
}
