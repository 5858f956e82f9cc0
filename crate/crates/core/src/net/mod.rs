//! Residual MLP regressor predicting `(μ, s = log b)` from normalized
//! keypoints, with hand-written reverse-mode gradients.
//!
//! Layout (every hidden layer has `hidden` features):
//!
//! ```text
//! input ─ Linear ─ BN ─ ReLU ─┬─ [Linear ─ BN ─ ReLU ─ Dropout] ×2 ─(+)─ ... ─ Linear → (μ, s)
//!                             └──────────────── identity ──────────────┘
//! ```
//!
//! With the default three residual blocks there are eight linear layers and
//! about 408k parameters.

pub mod adam;
pub mod loss;
pub mod train;

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Centering, INPUT_DIM};

pub use adam::{adam_step, Adam, AdamConfig};
pub use loss::{gaussian_loss, l1_loss, laplace_loss, LossKind};
pub use train::{evaluate, train, train_with_progress, EpochRecord, TrainConfig, TrainOutcome, TrainingSet};

pub const MODEL_VERSION: u32 = 1;
pub const OUTPUT_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_dim: INPUT_DIM,
            hidden: 256,
            blocks: 3,
        }
    }
}

impl ArchConfig {
    pub fn num_linear(&self) -> usize {
        2 * self.blocks + 2
    }

    pub fn num_norms(&self) -> usize {
        2 * self.blocks + 1
    }

    pub fn num_dropout(&self) -> usize {
        2 * self.blocks
    }
}

/// Dense layer `y = x·W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

/// All trainable tensors. Gradients and optimizer moments use the same type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub linears: Vec<Linear>,
    pub norms: Vec<NormParams>,
}

impl Params {
    fn init<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Self {
        let mut dims = vec![(arch.input_dim, arch.hidden)];
        dims.extend(std::iter::repeat_n((arch.hidden, arch.hidden), 2 * arch.blocks));
        dims.push((arch.hidden, OUTPUT_DIM));
        let linears = dims
            .into_iter()
            .map(|(fan_in, fan_out)| {
                // He-uniform on fan-in
                let bound = (6.0 / fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                Linear {
                    weight: Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng)),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        let norms = (0..arch.num_norms())
            .map(|_| NormParams {
                gamma: Array1::ones(arch.hidden),
                beta: Array1::zeros(arch.hidden),
            })
            .collect();
        Params { linears, norms }
    }

    pub fn zeros_like(&self) -> Self {
        Params {
            linears: self
                .linears
                .iter()
                .map(|l| Linear {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
            norms: self
                .norms
                .iter()
                .map(|n| NormParams {
                    gamma: Array1::zeros(n.gamma.raw_dim()),
                    beta: Array1::zeros(n.beta.raw_dim()),
                })
                .collect(),
        }
    }

    /// Flat views of every tensor: weights and biases of each linear layer,
    /// then gamma and beta of each norm.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * (self.linears.len() + self.norms.len()));
        for l in &self.linears {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        for n in &self.norms {
            out.push(n.gamma.as_slice().expect("standard layout"));
            out.push(n.beta.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * (self.linears.len() + self.norms.len()));
        for l in &mut self.linears {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        for n in &mut self.norms {
            out.push(n.gamma.as_slice_mut().expect("standard layout"));
            out.push(n.beta.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// `‖θ‖²` over the linear weight matrices (biases and norm parameters
    /// excluded).
    pub fn weight_sq_norm(&self) -> f64 {
        self.linears
            .iter()
            .map(|l| l.weight.iter().map(|w| w * w).sum::<f64>())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// How a forward pass treats batch norm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batch statistics, active dropout.
    Train,
    /// Running statistics, no dropout.
    Eval,
    /// Running statistics, active dropout (MC dropout).
    Mc,
}

/// Network output for one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionHead {
    /// Predicted distance, meters.
    pub mu: f64,
    /// Log of the relative Laplace spread.
    pub s: f64,
}

impl PredictionHead {
    /// Relative spread `exp(s)`.
    pub fn relative_spread(&self) -> f64 {
        self.s.exp()
    }

    /// Spread in meters, `|μ|·exp(s)`.
    pub fn spread(&self) -> f64 {
        self.mu.abs() * self.s.exp()
    }
}

/// Inverted-dropout multipliers (`0` or `1/(1 − p)`), one `(rows, hidden)`
/// matrix per dropout site.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks(pub Vec<Array2<f64>>);

impl DropoutMasks {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, arch: &ArchConfig, rows: usize, p: f64) -> Self {
        let keep = 1.0 / (1.0 - p);
        DropoutMasks(
            (0..arch.num_dropout())
                .map(|_| {
                    Array2::from_shape_simple_fn((rows, arch.hidden), || {
                        if rng.random::<f64>() < p {
                            0.0
                        } else {
                            keep
                        }
                    })
                })
                .collect(),
        )
    }

    /// Masks where row `r` is drawn from its own generator `rng_for(r)`.
    pub fn per_row<R: Rng>(
        arch: &ArchConfig,
        rows: usize,
        p: f64,
        mut rng_for: impl FnMut(usize) -> R,
    ) -> Self {
        let keep = 1.0 / (1.0 - p);
        let mut masks: Vec<Array2<f64>> = (0..arch.num_dropout())
            .map(|_| Array2::zeros((rows, arch.hidden)))
            .collect();
        for r in 0..rows {
            let mut rng = rng_for(r);
            for m in masks.iter_mut() {
                for v in m.row_mut(r).iter_mut() {
                    *v = if rng.random::<f64>() < p { 0.0 } else { keep };
                }
            }
        }
        DropoutMasks(masks)
    }
}

struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

/// Intermediate values of a train-mode forward pass.
pub struct ForwardCache {
    /// Input of each linear layer.
    layer_inputs: Vec<Array2<f64>>,
    /// Batch-norm outputs (pre-ReLU) of each norm.
    normalized: Vec<Array2<f64>>,
    norms: Vec<NormCache>,
    /// Per-norm batch mean and biased variance.
    pub batch_stats: Vec<(Array1<f64>, Array1<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocModel {
    pub version: u32,
    pub arch: ArchConfig,
    pub params: Params,
    pub running: Vec<RunningStats>,
    pub p_drop: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub centering: Centering,
    /// Set once training has produced batch-norm statistics.
    pub trained: bool,
}

impl LocModel {
    pub fn new<R: Rng + ?Sized>(arch: ArchConfig, p_drop: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&p_drop) {
            return Err(Error::InvalidConfig(format!("p_drop {p_drop} outside [0, 1)")));
        }
        if arch.input_dim == 0 || arch.hidden == 0 {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        let params = Params::init(&arch, rng);
        let running = (0..arch.num_norms())
            .map(|_| RunningStats {
                mean: Array1::zeros(arch.hidden),
                var: Array1::ones(arch.hidden),
            })
            .collect();
        Ok(LocModel {
            version: MODEL_VERSION,
            arch,
            params,
            running,
            p_drop,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            centering: Centering::Centroid,
            trained: false,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.count()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Shape(m));
        if self.version != MODEL_VERSION {
            return Err(Error::VersionMismatch {
                found: self.version,
                expected: MODEL_VERSION,
            });
        }
        let a = &self.arch;
        if self.params.linears.len() != a.num_linear()
            || self.params.norms.len() != a.num_norms()
            || self.running.len() != a.num_norms()
        {
            return bad("layer count does not match the architecture".into());
        }
        for (i, l) in self.params.linears.iter().enumerate() {
            let fan_in = if i == 0 { a.input_dim } else { a.hidden };
            let fan_out = if i + 1 == a.num_linear() { OUTPUT_DIM } else { a.hidden };
            if l.weight.dim() != (fan_in, fan_out) || l.bias.len() != fan_out {
                return bad(format!("linear layer {i} has shape {:?}", l.weight.dim()));
            }
        }
        for (n, r) in self.params.norms.iter().zip(&self.running) {
            if n.gamma.len() != a.hidden
                || n.beta.len() != a.hidden
                || r.mean.len() != a.hidden
                || r.var.len() != a.hidden
            {
                return bad("batch-norm width does not match".into());
            }
            if r.var.iter().any(|v| !(*v > 0.0)) {
                return bad("batch-norm running variance must be positive".into());
            }
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(Error::InvalidConfig(format!("p_drop {} outside [0, 1)", self.p_drop)));
        }
        Ok(())
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.arch.input_dim {
            return Err(Error::Shape(format!(
                "expected {} input features, got {}",
                self.arch.input_dim,
                x.ncols()
            )));
        }
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput {
                index: index % self.arch.input_dim,
            });
        }
        Ok(())
    }

    fn check_masks(&self, masks: &DropoutMasks, rows: usize) -> Result<()> {
        if masks.0.len() != self.arch.num_dropout()
            || masks.0.iter().any(|m| m.dim() != (rows, self.arch.hidden))
        {
            return Err(Error::Shape("dropout masks do not match the batch".into()));
        }
        Ok(())
    }

    /// Core forward pass. `batch_norm` selects batch statistics (and fills
    /// the cache) versus running statistics.
    fn run(
        &self,
        x: &Array2<f64>,
        batch_norm: bool,
        masks: Option<&DropoutMasks>,
    ) -> (Array2<f64>, Option<ForwardCache>) {
        let nl = self.arch.num_linear();
        let mut cache = batch_norm.then(|| ForwardCache {
            layer_inputs: Vec::with_capacity(nl),
            normalized: Vec::with_capacity(nl - 1),
            norms: Vec::with_capacity(nl - 1),
            batch_stats: Vec::with_capacity(nl - 1),
        });

        // linear -> BN -> ReLU, recording what backward needs
        let hidden_layer = |idx: usize, input: Array2<f64>, cache: &mut Option<ForwardCache>| {
            let lin = &self.params.linears[idx];
            let mut a = input.dot(&lin.weight);
            a += &lin.bias;
            let norm = &self.params.norms[idx];
            let n = if let Some(c) = cache.as_mut() {
                let (n, nc, stats) = batch_norm_train(&a, norm, self.bn_eps);
                c.layer_inputs.push(input);
                c.normalized.push(n.clone());
                c.norms.push(nc);
                c.batch_stats.push(stats);
                n
            } else {
                batch_norm_eval(a, norm, &self.running[idx], self.bn_eps)
            };
            n.mapv_into(|v| v.max(0.0))
        };

        let mut h = hidden_layer(0, x.to_owned(), &mut cache);
        for k in 0..self.arch.blocks {
            let skip = h.clone();
            let mut d = hidden_layer(1 + 2 * k, h, &mut cache);
            if let Some(m) = masks {
                d *= &m.0[2 * k];
            }
            let mut d2 = hidden_layer(2 + 2 * k, d, &mut cache);
            if let Some(m) = masks {
                d2 *= &m.0[2 * k + 1];
            }
            h = skip + d2;
        }
        let head = &self.params.linears[nl - 1];
        let mut out = h.dot(&head.weight);
        out += &head.bias;
        if let Some(c) = cache.as_mut() {
            c.layer_inputs.push(h);
        }
        (out, cache)
    }

    /// Train-mode forward pass on a batch (batch statistics, the given
    /// dropout masks). Returns the `(B, 2)` output and the cache needed by
    /// [`LocModel::backward`].
    pub fn forward_train(
        &self,
        x: &Array2<f64>,
        masks: Option<&DropoutMasks>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(x)?;
        if x.nrows() < 2 {
            return Err(Error::BatchTooSmall(x.nrows()));
        }
        if let Some(m) = masks {
            self.check_masks(m, x.nrows())?;
        }
        let (out, cache) = self.run(x, true, masks);
        Ok((out, cache.expect("train mode fills the cache")))
    }

    /// Eval-mode forward pass on a batch.
    pub fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        Ok(self.run(x, false, None).0)
    }

    /// MC-mode forward pass: running statistics with the given dropout masks.
    pub fn predict_mc(&self, x: &Array2<f64>, masks: &DropoutMasks) -> Result<Array2<f64>> {
        self.check_input(x)?;
        self.check_masks(masks, x.nrows())?;
        Ok(self.run(x, false, Some(masks)).0)
    }

    /// Forward pass on a batch in any mode, sampling dropout masks from `rng`.
    pub fn forward_batch<R: Rng + ?Sized>(
        &self,
        x: &Array2<f64>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Array2<f64>> {
        let masks = (mode != Mode::Eval && self.p_drop > 0.0)
            .then(|| DropoutMasks::sample(rng, &self.arch, x.nrows(), self.p_drop));
        match mode {
            Mode::Train => Ok(self.forward_train(x, masks.as_ref())?.0),
            Mode::Eval => self.predict(x),
            Mode::Mc => match masks {
                Some(m) => self.predict_mc(x, &m),
                None => self.predict(x),
            },
        }
    }

    /// Forward pass for a single input vector. Train mode needs a batch and
    /// is rejected here.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        input: &[f64],
        mode: Mode,
        rng: &mut R,
    ) -> Result<PredictionHead> {
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        let out = self.forward_batch(&x, mode, rng)?;
        Ok(PredictionHead {
            mu: out[[0, 0]],
            s: out[[0, 1]],
        })
    }

    /// Gradients of `mean(loss) + weight_decay·‖θ‖²/2` given the output
    /// gradient `d_out = ∂mean(loss)/∂out` of a train-mode pass.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_out: &Array2<f64>,
        masks: Option<&DropoutMasks>,
        weight_decay: f64,
    ) -> Params {
        let nl = self.arch.num_linear();
        let mut grads = self.params.zeros_like();

        let head = &self.params.linears[nl - 1];
        grads.linears[nl - 1].weight = cache.layer_inputs[nl - 1].t().dot(d_out);
        grads.linears[nl - 1].bias = d_out.sum_axis(Axis(0));
        let mut dh = d_out.dot(&head.weight.t());

        // back through ReLU, BN and the linear layer `idx`; returns d(input)
        let hidden_back = |idx: usize, d_act: Array2<f64>, grads: &mut Params| {
            let mut dn = d_act;
            Zip::from(&mut dn)
                .and(&cache.normalized[idx])
                .for_each(|g, &n| {
                    if n <= 0.0 {
                        *g = 0.0;
                    }
                });
            let (da, dgamma, dbeta) =
                batch_norm_backward(&dn, &cache.norms[idx], &self.params.norms[idx]);
            grads.norms[idx].gamma = dgamma;
            grads.norms[idx].beta = dbeta;
            grads.linears[idx].weight = cache.layer_inputs[idx].t().dot(&da);
            grads.linears[idx].bias = da.sum_axis(Axis(0));
            da.dot(&self.params.linears[idx].weight.t())
        };

        for k in (0..self.arch.blocks).rev() {
            let mut d2 = dh.clone();
            if let Some(m) = masks {
                d2 *= &m.0[2 * k + 1];
            }
            let mut d1 = hidden_back(2 + 2 * k, d2, &mut grads);
            if let Some(m) = masks {
                d1 *= &m.0[2 * k];
            }
            let d_in = hidden_back(1 + 2 * k, d1, &mut grads);
            dh += &d_in;
        }
        hidden_back(0, dh, &mut grads);

        if weight_decay != 0.0 {
            for (g, p) in grads.linears.iter_mut().zip(&self.params.linears) {
                g.weight.scaled_add(weight_decay, &p.weight);
            }
        }
        grads
    }

    /// Exponential moving update of the running statistics from a
    /// train-mode pass (unbiased variance).
    pub fn update_running_stats(&mut self, cache: &ForwardCache, batch_size: usize) {
        let m = self.bn_momentum;
        let correction = batch_size as f64 / (batch_size as f64 - 1.0).max(1.0);
        for (r, (mean, var)) in self.running.iter_mut().zip(&cache.batch_stats) {
            Zip::from(&mut r.mean)
                .and(mean)
                .for_each(|rm, &bm| *rm = (1.0 - m) * *rm + m * bm);
            Zip::from(&mut r.var)
                .and(var)
                .for_each(|rv, &bv| *rv = (1.0 - m) * *rv + m * bv * correction);
        }
    }
}

/// `(1 − p)/(2N)·‖θ‖²` over the linear weights.
pub fn weight_decay_term(model: &LocModel, p_drop: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidConfig("weight decay needs N >= 1".into()));
    }
    Ok((1.0 - p_drop) / (2.0 * n as f64) * model.params.weight_sq_norm())
}

fn batch_norm_train(
    a: &Array2<f64>,
    norm: &NormParams,
    eps: f64,
) -> (Array2<f64>, NormCache, (Array1<f64>, Array1<f64>)) {
    let b = a.nrows() as f64;
    let mean = a.sum_axis(Axis(0)) / b;
    let mut centered = a - &mean;
    let var = centered.map(|v| v * v).sum_axis(Axis(0)) / b;
    let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
    centered *= &inv_std;
    let xhat = centered;
    let mut out = &xhat * &norm.gamma;
    out += &norm.beta;
    (out, NormCache { xhat, inv_std }, (mean, var))
}

fn batch_norm_eval(
    mut a: Array2<f64>,
    norm: &NormParams,
    running: &RunningStats,
    eps: f64,
) -> Array2<f64> {
    let scale: Array1<f64> = Zip::from(&norm.gamma)
        .and(&running.var)
        .map_collect(|g, v| g / (v + eps).sqrt());
    let shift: Array1<f64> = Zip::from(&norm.beta)
        .and(&running.mean)
        .and(&scale)
        .map_collect(|b, m, s| b - m * s);
    a *= &scale;
    a += &shift;
    a
}

fn batch_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    norm: &NormParams,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let b = dy.nrows() as f64;
    let dbeta = dy.sum_axis(Axis(0));
    let dgamma = (dy * &cache.xhat).sum_axis(Axis(0));
    let dxhat = dy * &norm.gamma;
    let sum_dxhat = dxhat.sum_axis(Axis(0));
    let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
    let mut dx = dxhat;
    Zip::from(dx.rows_mut())
        .and(cache.xhat.rows())
        .for_each(|mut row, xrow| {
            Zip::from(&mut row)
                .and(&xrow)
                .and(&sum_dxhat)
                .and(&sum_dxhat_xhat)
                .and(&cache.inv_std)
                .for_each(|d, &xh, &s1, &s2, &is| {
                    *d = is / b * (b * *d - s1 - xh * s2);
                });
        });
    (dx, dgamma, dbeta)
}

/// Mean loss over a batch and `∂mean/∂out`.
pub fn batch_loss(
    kind: LossKind,
    out: &Array2<f64>,
    targets: ArrayView1<f64>,
) -> (f64, Array2<f64>) {
    let n = out.nrows() as f64;
    let mut d_out = Array2::zeros(out.raw_dim());
    let mut total = 0.0;
    for (i, &x) in targets.iter().enumerate() {
        let (l, dmu, ds) = kind.eval(x, out[[i, 0]], out[[i, 1]]);
        total += l;
        d_out[[i, 0]] = dmu / n;
        d_out[[i, 1]] = ds / n;
    }
    (total / n, d_out)
}
