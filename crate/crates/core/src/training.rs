//! Joint training of the surrogate `f_θ`, the latent force `Q_π` and the
//! coefficients `Ξ`, and resolution-free sampling of the result.
//!
//! Each step takes Adam updates on
//!
//! ```text
//! L = L_data + α·L_phy + σ₁‖θ‖² + σ₂‖π‖²
//! ```
//!
//! where `L_data` is the mean squared error against the data and `L_phy`
//! the mean squared PDE residual at collocation points, both in normalized
//! units. `Ξ` is held fixed between closed-form refits every `K` epochs;
//! the first `warmup_epochs` run with `α = 0` so the first refit sees a
//! surrogate that already follows the data.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data_io::{chronological_split, GridField, GridMeta, SplitRanges};
use crate::error::{Error, Result};
use crate::field_model::{
    coords_tensor, derivative_bundle, init_fieldnet, layer_widths, Coord, FieldNet, JetRequest, NetRole, NetVars,
    NormalizationSpec, Partial, VarAffine, DEFAULT_HIDDEN,
};
use crate::pde_library::{default_library, EquationOverride, EquationSystem, FitOptions, DEFAULT_LAMBDA};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Collocation grid size; `None` means twice the data resolution in space
/// and the data resolution in time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollocationDims {
    pub nx: Option<usize>,
    pub ny: Option<usize>,
    pub nt: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Physics-loss weight α.
    pub alpha: f64,
    /// L2 weight on the surrogate parameters.
    pub sigma1: f64,
    /// L2 weight on the latent-force parameters.
    pub sigma2: f64,
    pub learning_rate: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    /// Data points per step.
    pub batch_size: usize,
    /// Collocation points per step.
    pub collocation_batch: usize,
    pub epochs: usize,
    pub collocation: CollocationDims,
    /// Ξ refit period K, in epochs.
    pub refit_every: usize,
    /// Data-only epochs before the first refit; defaults to
    /// `min(K, epochs / 2)`.
    pub warmup_epochs: Option<usize>,
    /// The physics weight rises linearly to α over this many epochs after
    /// warmup.
    pub alpha_ramp_epochs: usize,
    /// Collocation points used by each refit.
    pub fit_points: usize,
    pub lambda: f64,
    pub threshold: Option<f64>,
    pub latent_force: bool,
    pub hidden: Vec<usize>,
    pub q_hidden: Vec<usize>,
    /// Rows per tape when fanning a batch out to worker threads.
    pub shard_rows: usize,
    /// Fraction of the data grid points used for fitting.
    pub data_fraction: f64,
    pub seed: u64,
    pub equations: Vec<EquationOverride>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 10.0,
            sigma1: 0.0,
            sigma2: 0.0,
            learning_rate: 1e-4,
            lr_decay: 1.0,
            batch_size: 10_000,
            collocation_batch: 2_000,
            epochs: 50,
            collocation: CollocationDims::default(),
            refit_every: 10,
            warmup_epochs: None,
            alpha_ramp_epochs: 0,
            fit_points: 20_000,
            lambda: DEFAULT_LAMBDA,
            threshold: None,
            latent_force: true,
            hidden: DEFAULT_HIDDEN.to_vec(),
            q_hidden: DEFAULT_HIDDEN.to_vec(),
            shard_rows: 500,
            data_fraction: 1.0,
            seed: 0,
            equations: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad("alpha must be ≥ 0");
        }
        if !(self.sigma1 >= 0.0) || !(self.sigma2 >= 0.0) {
            return bad("regularization weights must be ≥ 0");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1 (nothing to train)");
        }
        if self.batch_size == 0 || self.collocation_batch == 0 || self.shard_rows == 0 {
            return bad("batch sizes must be positive");
        }
        if self.refit_every == 0 {
            return bad("refit period must be at least 1 epoch");
        }
        if self.fit_points == 0 {
            return bad("fit_points must be positive");
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return bad("data_fraction must lie in (0, 1]");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be ≥ 0");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.q_hidden.is_empty() || self.q_hidden.contains(&0) {
            return bad("hidden layer widths must be non-empty and positive");
        }
        Ok(())
    }

    pub fn warmup(&self) -> usize {
        self.warmup_epochs.unwrap_or(self.refit_every.min(self.epochs / 2))
    }

    /// Human-readable dump of every setting.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "lr_decay = {}", self.lr_decay);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "collocation_batch = {}", self.collocation_batch);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "alpha_ramp_epochs = {}", self.alpha_ramp_epochs);
        let _ = writeln!(s, "refit_every = {}", self.refit_every);
        let _ = writeln!(s, "warmup_epochs = {}", self.warmup());
        let _ = writeln!(s, "sigma1 = {}, sigma2 = {}", self.sigma1, self.sigma2);
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "latent_force = {}", self.latent_force);
        let _ = writeln!(s, "hidden = {:?}, q_hidden = {:?}", self.hidden, self.q_hidden);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}

/// Adam with β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn update<T: Scalar>(&mut self, params: &mut [T], grad: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grad[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            *p -= T::lit(self.lr * mhat / (vhat.sqrt() + Self::EPS));
        }
    }
}

/// Grid points with physical targets (`rows × h`).
#[derive(Debug, Clone, PartialEq)]
pub struct DataBatch<T> {
    pub coords: Vec<Coord>,
    pub targets: Vec<T>,
    pub width: usize,
}

impl<T: Scalar> DataBatch<T> {
    /// Every point of `field`, coordinates normalized with `norm`.
    pub fn from_field(field: &GridField<T>, norm: &NormalizationSpec) -> Self {
        DataBatch {
            coords: norm.grid_coords(field.meta()),
            targets: field.data().to_vec(),
            width: field.nvars(),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let h = self.width;
        DataBatch {
            coords: idx.iter().map(|&i| self.coords[i]).collect(),
            targets: idx.iter().flat_map(|&i| self.targets[i * h..(i + 1) * h].iter().copied()).collect(),
            width: h,
        }
    }
}

/// Collocation points, normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationSet {
    pub coords: Vec<Coord>,
}

impl CollocationSet {
    /// One uniformly jittered point per cell of an `nx × ny × nt` partition
    /// of `[−1, 1]³`.
    pub fn jittered(nx: usize, ny: usize, nt: usize, rng: &mut impl Rng) -> Self {
        let mut coords = Vec::with_capacity(nx * ny * nt);
        let cell = |i: usize, n: usize, u: f64| -1.0 + 2.0 * (i as f64 + u) / n as f64;
        for it in 0..nt {
            for iy in 0..ny {
                for ix in 0..nx {
                    coords.push(Coord::new(
                        cell(ix, nx, rng.gen::<f64>()),
                        cell(iy, ny, rng.gen::<f64>()),
                        cell(it, nt, rng.gen::<f64>()),
                    ));
                }
            }
        }
        CollocationSet { coords }
    }
}

/// Fitting field, validation field and the frames used for output
/// statistics.
#[derive(Debug, Clone)]
pub struct TrainData<T> {
    pub fit: GridField<T>,
    pub validation: GridField<T>,
    pub stats_frames: Range<usize>,
}

impl<T: Scalar> TrainData<T> {
    /// Fits the training frames and validates on the validation frames.
    pub fn chronological(field: &GridField<T>) -> Result<Self> {
        let split = chronological_split(field)?;
        Ok(TrainData {
            fit: split.train,
            validation: split.val,
            stats_frames: split.ranges.train,
        })
    }

    /// Downscaling: the coarse field is fitted at every frame; validation
    /// uses `validation` (e.g. fine truth) restricted to the validation
    /// frames, or the coarse validation frames when absent.
    pub fn downscaling(coarse: &GridField<T>, validation: Option<&GridField<T>>) -> Result<Self> {
        let ranges = SplitRanges::for_frames(coarse.nt())?;
        let validation = match validation {
            Some(v) => {
                if v.nt() != coarse.nt() {
                    return Err(Error::config("validation field must cover the same frames as the data"));
                }
                v.frames(ranges.val.clone())?
            }
            None => coarse.frames(ranges.val.clone())?,
        };
        Ok(TrainData {
            fit: coarse.clone(),
            validation,
            stats_frames: ranges.train,
        })
    }
}

/// Per-epoch loss decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub data_loss: f64,
    pub phys_loss: f64,
    pub reg_theta: f64,
    pub reg_pi: f64,
    pub alpha_eff: f64,
    pub total: f64,
    pub val_loss: f64,
    /// Increments each time Ξ is refitted.
    pub xi_snapshot: usize,
    pub seconds: f64,
}

/// CSV header of [`history_csv`]; wall-clock time is left out so the file
/// is reproducible.
pub const HISTORY_HEADER: &str = "epoch,data_loss,phys_loss,reg_theta,reg_pi,alpha_eff,total,val_loss,xi_snapshot";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        let _ = writeln!(
            s,
            "{},{:e},{:e},{:e},{:e},{},{:e},{:e},{}",
            r.epoch, r.data_loss, r.phys_loss, r.reg_theta, r.reg_pi, r.alpha_eff, r.total, r.val_loss, r.xi_snapshot
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Best-validation surrogate among the epochs with the highest
    /// effective physics weight.
    pub surrogate: FieldNet<T>,
    pub q_net: Option<FieldNet<T>>,
    /// Equations refitted on the best-validation state.
    pub system: EquationSystem,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Set when training stopped on a non-finite loss; the networks are
    /// then the last finite best-validation state.
    pub aborted: Option<String>,
}

/// Per-equation constants for the residual.
struct PhysicsPlan {
    /// `(variable, partial)` → column of the jet, converted to physical
    /// units with `(scale, shift)`.
    needed: Vec<(usize, Partial)>,
    req: JetRequest,
}

impl PhysicsPlan {
    fn new(system: &EquationSystem) -> Self {
        let needed = system.required_partials();
        let kinds: Vec<Partial> = needed.iter().map(|&(_, p)| p).collect();
        PhysicsPlan {
            needed,
            req: JetRequest::for_partials(&kinds),
        }
    }
}

fn column<T: Scalar>(tape: &mut Tape<T>, m: Var, c: usize) -> Result<Var> {
    let cols = tape.value(m).cols();
    if cols == 1 {
        return Ok(m);
    }
    let mut sel = Tensor::zeros(&[cols, 1]);
    sel.data_mut()[c] = T::one();
    let sel = tape.constant(sel);
    tape.matmul(m, sel)
}

/// Sum of squared normalized residuals over `coords`, optionally with the
/// gradients of `scale · sum` with respect to θ and π.
#[allow(clippy::too_many_arguments)]
fn physics_shard<T: Scalar>(
    net: &FieldNet<T>,
    q_net: Option<&FieldNet<T>>,
    system: &EquationSystem,
    plan: &PhysicsPlan,
    coords: &[Coord],
    scale: f64,
    want_grad: bool,
) -> Result<(f64, Option<(Vec<T>, Option<Vec<T>>)>)> {
    let mut tape = Tape::new();
    let theta = net.register(&mut tape, want_grad)?;
    let input = tape.constant(coords_tensor(coords));
    let jet = net.jet_on_tape(&mut tape, &theta, input, &plan.req)?;

    let mut cols: HashMap<(usize, Partial), Var> = HashMap::new();
    for &(c, p) in &plan.needed {
        let raw = jet.partial(p).ok_or_else(|| Error::config("jet is missing a requested partial"))?;
        let col = column(&mut tape, raw, c)?;
        let factor = net.derivative_factor(c, p.axes());
        let v = if p == Partial::Value {
            tape.scale_shift(col, factor, T::lit(net.normalization().outputs[c].mean))?
        } else {
            tape.scale(col, factor)?
        };
        cols.insert((c, p), v);
    }

    let (pi, q_out) = match q_net {
        Some(q) if system.latent_force_enabled() => {
            let pi = q.register(&mut tape, want_grad)?;
            let out = q.forward_on_tape(&mut tape, &pi, input)?;
            (Some(pi), Some(out))
        }
        _ => (None, None),
    };

    let mut total: Option<Var> = None;
    for (k, eq) in system.equations.iter().enumerate() {
        let var = eq.spec.var;
        let mut r = cols[&(var, eq.spec.target_partial())];
        for (term, &xi) in eq.spec.terms.iter().zip(&eq.coefficients) {
            if xi == 0.0 {
                continue;
            }
            r = match term.factors() {
                [] => tape.scale_shift(r, T::one(), T::lit(-xi))?,
                [f] => {
                    let phi = tape.scale(cols[&(f.var, f.partial)], T::lit(xi))?;
                    tape.sub(r, phi)?
                }
                [f, g] => {
                    let phi = tape.mul(cols[&(f.var, f.partial)], cols[&(g.var, g.partial)])?;
                    let phi = tape.scale(phi, T::lit(xi))?;
                    tape.sub(r, phi)?
                }
                _ => unreachable!("terms have at most two factors"),
            };
        }
        if eq.latent_force {
            if let (Some(q), Some(out)) = (q_net, q_out) {
                let col = column(&mut tape, out, k)?;
                let o = &q.normalization().outputs[k];
                let qv = tape.scale_shift(col, T::lit(o.std), T::lit(o.mean))?;
                r = tape.sub(r, qv)?;
            }
        }
        let r = tape.scale(r, T::lit(1.0 / net.normalization().outputs[var].std))?;
        let sq = tape.square(r)?;
        let s = tape.sum(sq)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| Error::config("equation system is empty"))?;
    let value = tape.value(total).item()?.f64();
    if !want_grad {
        return Ok((value, None));
    }
    let scaled = tape.scale(total, T::lit(scale))?;
    let mut wrt = theta.all();
    if let Some(pi) = &pi {
        wrt.extend(pi.all());
    }
    let grads = tape.grad(scaled, &wrt)?;
    let n_theta = theta.layers.len() * 2;
    let g_theta = NetVars::flatten(&grads[..n_theta]);
    let g_pi = pi.map(|_| NetVars::flatten(&grads[n_theta..]));
    Ok((value, Some((g_theta, g_pi))))
}

fn data_shard<T: Scalar>(net: &FieldNet<T>, batch: &DataBatch<T>, range: Range<usize>, scale: f64, want_grad: bool) -> Result<(f64, Option<Vec<T>>)> {
    let h = batch.width;
    let norm = net.normalization();
    let mut tape = Tape::new();
    let theta = net.register(&mut tape, want_grad)?;
    let input = tape.constant(coords_tensor(&batch.coords[range.clone()]));
    let out = net.forward_on_tape(&mut tape, &theta, input)?;
    let targets: Vec<T> = batch.targets[range.start * h..range.end * h]
        .chunks(h)
        .flat_map(|row| {
            row.iter()
                .zip(&norm.outputs)
                .map(|(&v, o)| T::lit((v.f64() - o.mean) / o.std))
        })
        .collect();
    let target = tape.constant(Tensor::matrix(range.len(), h, targets)?);
    let diff = tape.sub(out, target)?;
    let sq = tape.square(diff)?;
    let s = tape.sum(sq)?;
    let value = tape.value(s).item()?.f64();
    if !want_grad {
        return Ok((value, None));
    }
    let scaled = tape.scale(s, T::lit(scale))?;
    let grads = tape.grad(scaled, &theta.all())?;
    Ok((value, Some(NetVars::flatten(&grads))))
}

fn shards(len: usize, rows: usize) -> Vec<Range<usize>> {
    (0..len).step_by(rows.max(1)).map(|s| s..(s + rows).min(len)).collect()
}

/// Mean squared error in normalized units over all points and variables.
pub fn data_loss<T: Scalar>(net: &FieldNet<T>, batch: &DataBatch<T>) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::config("data loss over an empty batch"));
    }
    if batch.width != net.output_width() {
        return Err(Error::ShapeMismatch {
            op: "data_loss",
            left: vec![net.output_width()],
            right: vec![batch.width],
        });
    }
    let parts: Vec<Result<(f64, Option<Vec<T>>)>> = shards(batch.len(), 4096)
        .into_par_iter()
        .map(|r| data_shard(net, batch, r, 1.0, false))
        .collect();
    let mut sum = 0.0;
    for p in parts {
        sum += p?.0;
    }
    Ok(sum / (batch.len() * batch.width) as f64)
}

/// Mean squared normalized PDE residual over `coords` and equations.
pub fn physics_loss<T: Scalar>(net: &FieldNet<T>, q_net: Option<&FieldNet<T>>, system: &EquationSystem, coords: &[Coord]) -> Result<f64> {
    if coords.is_empty() {
        return Err(Error::config("physics loss over an empty batch"));
    }
    if system.latent_force_enabled() && q_net.is_none() {
        return Err(Error::config("system has a latent force but no Q network was given"));
    }
    let plan = PhysicsPlan::new(system);
    let parts: Vec<Result<(f64, _)>> = shards(coords.len(), 1024)
        .into_par_iter()
        .map(|r| physics_shard(net, q_net, system, &plan, &coords[r], 1.0, false))
        .collect();
    let mut sum = 0.0;
    for p in parts {
        sum += p?.0;
    }
    Ok(sum / (coords.len() * system.equations.len()) as f64)
}

fn sq_norm<T: Scalar>(p: &[T]) -> f64 {
    p.iter().map(|v| v.f64() * v.f64()).sum()
}

/// Normalization for the latent force of each equation: zero mean and the
/// scale of the equation's target derivative.
fn q_normalization(surrogate: &NormalizationSpec, system: &EquationSystem) -> NormalizationSpec {
    let mut q = surrogate.clone();
    q.outputs = system
        .equations
        .iter()
        .map(|eq| {
            let v = &surrogate.outputs[eq.spec.var];
            VarAffine {
                name: format!("Q_{}", v.name),
                mean: 0.0,
                std: v.std / surrogate.t.scale.powi(eq.spec.target_order as i32),
            }
        })
        .collect();
    q
}

/// Values of the latent force at `coords`, one column per equation.
pub fn q_columns<T: Scalar>(q_net: &FieldNet<T>, coords: &[Coord]) -> Result<Vec<Vec<T>>> {
    let mut cols = vec![Vec::with_capacity(coords.len()); q_net.output_width()];
    for chunk in coords.chunks(4096) {
        let out = q_net.predict(chunk)?;
        for r in 0..chunk.len() {
            for (c, col) in cols.iter_mut().enumerate() {
                col.push(out.get2(r, c));
            }
        }
    }
    Ok(cols)
}

/// Closed-form refit of every equation at `coords`.
pub fn refit_system<T: Scalar>(
    system: &mut EquationSystem,
    net: &FieldNet<T>,
    q_net: Option<&FieldNet<T>>,
    coords: &[Coord],
    opts: FitOptions,
) -> Result<()> {
    let kinds = system.required_partial_kinds();
    let bundle = derivative_bundle(net, coords, &kinds)?;
    let q = match q_net {
        Some(q) if system.latent_force_enabled() => Some(q_columns(q, coords)?),
        _ => None,
    };
    system.refit(&bundle, q.as_deref(), opts)
}

struct Snapshot<T> {
    theta: Vec<T>,
    pi: Option<Vec<T>>,
    system: EquationSystem,
    epoch: usize,
    val: f64,
    alpha_eff: f64,
}

/// Trains the surrogate (and latent force) on `data`.
pub fn train<T: Scalar>(data: &TrainData<T>, config: &TrainConfig) -> Result<TrainOutcome<T>> {
    train_with(data, config, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<T: Scalar>(data: &TrainData<T>, config: &TrainConfig, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let fit = &data.fit;
    if data.validation.names() != fit.names() {
        return Err(Error::config("validation variables differ from the data"));
    }
    let names = fit.names().to_vec();
    let stats = fit.frames(data.stats_frames.clone())?;
    let norm = NormalizationSpec::fit(fit.meta(), &stats)?;

    let specs = default_library(&names, &config.equations)?;
    let mut system = EquationSystem::unfitted(names.clone(), specs, config.latent_force);
    let fit_opts = FitOptions {
        lambda: config.lambda,
        threshold: config.threshold,
    };

    let widths = layer_widths(&config.hidden, names.len());
    let mut net = init_fieldnet::<T>(&widths, config.seed)?.with_normalization(norm.clone())?;
    let mut q_net = if config.latent_force {
        let qw = layer_widths(&config.q_hidden, system.equations.len());
        let mut q = init_fieldnet::<T>(&qw, config.seed.wrapping_add(1))?
            .with_role(NetRole::LatentForce)
            .with_normalization(q_normalization(&norm, &system))?;
        q.zero_output_layer();
        Some(q)
    } else {
        None
    };

    let all_points = DataBatch::from_field(fit, &norm);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let points = if config.data_fraction < 1.0 {
        let keep = ((all_points.len() as f64 * config.data_fraction).round() as usize).max(1);
        let mut idx: Vec<usize> = (0..all_points.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(keep);
        idx.sort_unstable();
        all_points.select(&idx)
    } else {
        all_points
    };
    let val_points = DataBatch::from_field(&data.validation, &norm);
    let col_dims = (
        config.collocation.nx.unwrap_or(2 * fit.nx()),
        config.collocation.ny.unwrap_or(2 * fit.ny()),
        config.collocation.nt.unwrap_or(fit.nt()),
    );
    let mut col_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(3));

    let mut opt_theta = Adam::new(net.param_count(), config.learning_rate);
    let mut opt_pi = q_net.as_ref().map(|q| Adam::new(q.param_count(), config.learning_rate));
    let warmup = config.warmup();
    let mut xi_snapshot = 0usize;
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<Snapshot<T>> = None;
    let mut aborted = None;
    let h = names.len();
    let n_eq = system.equations.len();

    'epochs: for epoch in 0..config.epochs {
        let started = Instant::now();
        let physics_on = config.alpha > 0.0 && epoch >= warmup;
        let colloc = CollocationSet::jittered(col_dims.0, col_dims.1, col_dims.2, &mut col_rng);
        let mut col_order: Vec<usize> = (0..colloc.coords.len()).collect();
        col_order.shuffle(&mut col_rng);

        if physics_on && (epoch - warmup) % config.refit_every == 0 {
            let pts: Vec<Coord> = col_order.iter().take(config.fit_points).map(|&i| colloc.coords[i]).collect();
            refit_system(&mut system, &net, q_net.as_ref(), &pts, fit_opts)?;
            xi_snapshot += 1;
        }
        let alpha_eff = if !physics_on {
            0.0
        } else if epoch - warmup < config.alpha_ramp_epochs {
            config.alpha * (epoch - warmup + 1) as f64 / config.alpha_ramp_epochs as f64
        } else {
            config.alpha
        };
        let lr = config.learning_rate * config.lr_decay.powi(epoch as i32);
        opt_theta.lr = lr;
        if let Some(o) = opt_pi.as_mut() {
            o.lr = lr;
        }

        let mut order: Vec<usize> = (0..points.len()).collect();
        order.shuffle(&mut rng);
        let steps = order.len().div_ceil(config.batch_size);
        let (mut sum_data, mut sum_phys, mut sum_rt, mut sum_rp, mut sum_total) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut col_cursor = 0usize;
        for step in 0..steps {
            let idx = &order[step * config.batch_size..((step + 1) * config.batch_size).min(order.len())];
            let batch = points.select(idx);
            let scale = 1.0 / (batch.len() * h) as f64;
            let parts: Vec<Result<(f64, Option<Vec<T>>)>> = shards(batch.len(), config.shard_rows)
                .into_par_iter()
                .map(|r| data_shard(&net, &batch, r, scale, true))
                .collect();
            let mut g_theta = vec![0.0; net.param_count()];
            let mut d_loss = 0.0;
            for p in parts {
                let (v, g) = p?;
                d_loss += v;
                for (a, b) in g_theta.iter_mut().zip(g.expect("gradient requested")) {
                    *a += b.f64();
                }
            }
            d_loss *= scale;

            let mut g_pi = q_net.as_ref().map(|q| vec![0.0; q.param_count()]);
            let mut p_loss = 0.0;
            if physics_on {
                let mut pts = Vec::with_capacity(config.collocation_batch);
                for _ in 0..config.collocation_batch {
                    if col_cursor == col_order.len() {
                        col_cursor = 0;
                    }
                    pts.push(colloc.coords[col_order[col_cursor]]);
                    col_cursor += 1;
                }
                let pscale = alpha_eff / (pts.len() * n_eq) as f64;
                let plan = PhysicsPlan::new(&system);
                let parts: Vec<Result<(f64, _)>> = shards(pts.len(), config.shard_rows)
                    .into_par_iter()
                    .map(|r| physics_shard(&net, q_net.as_ref(), &system, &plan, &pts[r], pscale, true))
                    .collect();
                for p in parts {
                    let (v, g) = p?;
                    p_loss += v;
                    let (gt, gp) = g.expect("gradient requested");
                    for (a, b) in g_theta.iter_mut().zip(gt) {
                        *a += b.f64();
                    }
                    if let (Some(acc), Some(gp)) = (g_pi.as_mut(), gp) {
                        for (a, b) in acc.iter_mut().zip(gp) {
                            *a += b.f64();
                        }
                    }
                }
                p_loss /= (pts.len() * n_eq) as f64;
            }

            let rt = config.sigma1 * sq_norm(net.params());
            if config.sigma1 > 0.0 {
                for (g, p) in g_theta.iter_mut().zip(net.params()) {
                    *g += 2.0 * config.sigma1 * p.f64();
                }
            }
            let mut rp = 0.0;
            if let (Some(q), Some(g)) = (q_net.as_ref(), g_pi.as_mut()) {
                rp = config.sigma2 * sq_norm(q.params());
                if config.sigma2 > 0.0 {
                    for (gi, p) in g.iter_mut().zip(q.params()) {
                        *gi += 2.0 * config.sigma2 * p.f64();
                    }
                }
            }
            let total = d_loss + alpha_eff * p_loss + rt + rp;
            if !total.is_finite() || g_theta.iter().any(|g| !g.is_finite()) {
                aborted = Some(format!(
                    "non-finite loss at epoch {} step {} (data {d_loss:e}, physics {p_loss:e})",
                    epoch + 1,
                    step + 1
                ));
                break 'epochs;
            }
            sum_data += d_loss;
            sum_phys += p_loss;
            sum_rt += rt;
            sum_rp += rp;
            sum_total += total;

            opt_theta.update(net.params_mut(), &g_theta);
            if let (Some(q), Some(opt), Some(g)) = (q_net.as_mut(), opt_pi.as_mut(), g_pi.as_ref()) {
                if physics_on || config.sigma2 > 0.0 {
                    opt.update(q.params_mut(), g);
                }
            }
        }

        let n = steps as f64;
        let val_loss = data_loss(&net, &val_points)?;
        if !val_loss.is_finite() {
            aborted = Some(format!("non-finite validation loss at epoch {}", epoch + 1));
            break;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            data_loss: sum_data / n,
            phys_loss: sum_phys / n,
            reg_theta: sum_rt / n,
            reg_pi: sum_rp / n,
            alpha_eff,
            total: sum_total / n,
            val_loss,
            xi_snapshot,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.push(record);
        // Epochs trained with the full physics weight outrank warmup epochs.
        let better = match &best {
            None => true,
            Some(b) => alpha_eff > b.alpha_eff || (alpha_eff == b.alpha_eff && val_loss < b.val),
        };
        if better {
            best = Some(Snapshot {
                theta: net.params().to_vec(),
                pi: q_net.as_ref().map(|q| q.params().to_vec()),
                system: system.clone(),
                epoch: epoch + 1,
                val: val_loss,
                alpha_eff,
            });
        }
    }

    let Some(best) = best else {
        return Err(Error::Diverged {
            epoch: 1,
            detail: aborted.unwrap_or_else(|| "no epoch completed".into()),
        });
    };
    net.params_mut().copy_from_slice(&best.theta);
    if let (Some(q), Some(p)) = (q_net.as_mut(), best.pi.as_ref()) {
        q.params_mut().copy_from_slice(p);
    }
    let mut system = best.system;
    let mut fit_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(4));
    let colloc = CollocationSet::jittered(col_dims.0, col_dims.1, col_dims.2, &mut fit_rng);
    let mut pts = colloc.coords;
    pts.shuffle(&mut fit_rng);
    pts.truncate(config.fit_points);
    refit_system(&mut system, &net, q_net.as_ref(), &pts, fit_opts)?;

    Ok(TrainOutcome {
        surrogate: net,
        q_net,
        system,
        history,
        best_epoch: best.epoch,
        aborted,
    })
}

/// Target resolution for [`downscale`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Resolution {
    /// Spatial refinement by an integer factor, frames unchanged.
    Factor(usize),
    /// Explicit `(n′, m′, T′)` spanning the same box.
    Dims { nx: usize, ny: usize, nt: usize },
}

fn span_axis(origin: f64, last: f64, n: usize) -> crate::data_io::Axis {
    let step = if n > 1 { (last - origin) / (n - 1) as f64 } else { 1.0 };
    crate::data_io::Axis::new(origin, step, n)
}

/// Grid for `res` given the source grid of the data.
pub fn target_meta(source: &GridMeta, res: Resolution) -> Result<GridMeta> {
    match res {
        Resolution::Factor(0) => Err(Error::config("downscaling factor must be positive")),
        Resolution::Factor(k) => {
            let mut m = source.clone();
            m.x = source.x.refined(k);
            m.y = source.y.refined(k);
            Ok(m)
        }
        Resolution::Dims { nx, ny, nt } => {
            if nx == 0 || ny == 0 || nt == 0 {
                return Err(Error::config("target dimensions must be positive"));
            }
            let mut m = source.clone();
            m.x = span_axis(source.x.origin, source.x.last(), nx);
            m.y = span_axis(source.y.origin, source.y.last(), ny);
            m.t = span_axis(source.t.origin, source.t.last(), nt);
            Ok(m)
        }
    }
}

impl NormalizationSpec {
    /// Grid the spec was fitted on, reconstructed from its box and
    /// source dimensions.
    pub fn source_meta(&self) -> Result<GridMeta> {
        let [nx, ny, nt] = self.source_dims;
        if nx == 0 || ny == 0 || nt == 0 {
            return Err(Error::malformed("normalization carries no source grid"));
        }
        let axis = |a: crate::field_model::AxisAffine, n| span_axis(a.offset - a.scale, a.offset + a.scale, n);
        let axis_or_point = |a: crate::field_model::AxisAffine, n: usize| {
            if n == 1 {
                crate::data_io::Axis::new(a.offset, 1.0, 1)
            } else {
                axis(a, n)
            }
        };
        Ok(GridMeta::new(axis_or_point(self.x, nx), axis_or_point(self.y, ny), axis_or_point(self.t, nt)))
    }
}

/// Dense sampling of the surrogate; the flag reports whether any point lies
/// outside the training box.
pub fn downscale<T: Scalar>(net: &FieldNet<T>, source: &GridMeta, res: Resolution) -> Result<(GridField<T>, bool)> {
    let meta = target_meta(source, res)?;
    let norm = net.normalization();
    let extrapolated = [
        (meta.x.origin, 0),
        (meta.x.last(), 0),
        (meta.y.origin, 1),
        (meta.y.last(), 1),
        (meta.t.origin, 2),
        (meta.t.last(), 2),
    ]
    .iter()
    .any(|&(v, a)| norm.axis(a).normalize(v).abs() > 1.0 + 1e-9);
    Ok((net.sample_grid(&meta)?, extrapolated))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{Axis, GridMeta};

    fn tiny_field() -> GridField<f64> {
        let meta = GridMeta::new(Axis::new(0.0, 0.5, 5), Axis::new(0.0, 0.5, 4), Axis::new(0.0, 0.1, 10));
        GridField::from_fn(meta, vec!["u".into()], |x, y, t| vec![(x - 0.3 * t).sin() + 0.5 * y]).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            hidden: vec![8, 8],
            q_hidden: vec![6],
            epochs: 4,
            batch_size: 64,
            collocation_batch: 32,
            refit_every: 2,
            fit_points: 200,
            learning_rate: 1e-2,
            shard_rows: 50,
            ..Default::default()
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = vec![1.0f64, -2.0];
        let mut opt = Adam::new(2, 0.1);
        opt.update(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-7 && (p[1] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn data_loss_definitions() {
        let mut net = init_fieldnet::<f64>(&[3, 4, 1], 0).unwrap();
        for p in net.params_mut() {
            *p = 0.0;
        }
        let batch = DataBatch {
            coords: vec![Coord::new(0.0, 0.0, 0.0), Coord::new(0.5, 0.5, 0.5)],
            targets: vec![1.0, 2.0],
            width: 1,
        };
        assert!((data_loss(&net, &batch).unwrap() - 2.5).abs() < 1e-15);
        let zero = DataBatch { targets: vec![0.0, 0.0], ..batch.clone() };
        assert_eq!(data_loss(&net, &zero).unwrap(), 0.0);
        let empty = DataBatch::<f64> { coords: vec![], targets: vec![], width: 1 };
        assert!(data_loss(&net, &empty).is_err());
    }

    #[test]
    fn static_field_has_no_residual() {
        let mut net = init_fieldnet::<f64>(&[3, 4, 1], 0).unwrap();
        for p in net.params_mut() {
            *p = 0.0;
        }
        let names = vec!["u".to_string()];
        let sys = EquationSystem::unfitted(names.clone(), default_library(&names, &[]).unwrap(), false);
        let pts = [Coord::new(0.1, 0.2, 0.3), Coord::new(-0.5, 0.9, -1.0)];
        assert_eq!(physics_loss(&net, None, &sys, &pts).unwrap(), 0.0);
    }

    #[test]
    fn physics_gradient_matches_finite_differences() {
        let field = tiny_field();
        let norm = NormalizationSpec::fit(field.meta(), &field).unwrap();
        let net = init_fieldnet::<f64>(&[3, 5, 1], 3).unwrap().with_normalization(norm.clone()).unwrap();
        let names = vec!["u".to_string()];
        let mut sys = EquationSystem::unfitted(names.clone(), default_library(&names, &[]).unwrap(), true);
        sys.equations[0].coefficients = vec![0.1, -0.2, -0.5, 0.3, 0.05, 0.02, 0.4, -0.1];
        let mut q = init_fieldnet::<f64>(&[3, 4, 1], 4)
            .unwrap()
            .with_role(NetRole::LatentForce)
            .with_normalization(q_normalization(&norm, &sys))
            .unwrap();
        q.params_mut()[0] += 0.3;
        let pts: Vec<Coord> = (0..7).map(|i| Coord::new(-0.9 + 0.25 * i as f64, 0.3, -0.2 + 0.1 * i as f64)).collect();
        let plan = PhysicsPlan::new(&sys);
        let (_, g) = physics_shard(&net, Some(&q), &sys, &plan, &pts, 1.0, true).unwrap();
        let (gt, gp) = g.unwrap();
        let gp = gp.unwrap();
        let eps = 1e-6;
        let loss = |n: &FieldNet<f64>, qn: &FieldNet<f64>| physics_shard(n, Some(qn), &sys, &plan, &pts, 1.0, false).unwrap().0;
        for i in [0, 7, 15, net.param_count() - 1] {
            let (mut a, mut b) = (net.clone(), net.clone());
            a.params_mut()[i] += eps;
            b.params_mut()[i] -= eps;
            let fd = (loss(&a, &q) - loss(&b, &q)) / (2.0 * eps);
            assert!((fd - gt[i]).abs() <= 1e-5 * fd.abs().max(1.0), "θ[{i}]: {fd} vs {}", gt[i]);
        }
        for i in [0, 5, q.param_count() - 1] {
            let (mut a, mut b) = (q.clone(), q.clone());
            a.params_mut()[i] += eps;
            b.params_mut()[i] -= eps;
            let fd = (loss(&net, &a) - loss(&net, &b)) / (2.0 * eps);
            assert!((fd - gp[i]).abs() <= 1e-5 * fd.abs().max(1.0), "π[{i}]: {fd} vs {}", gp[i]);
        }
    }

    #[test]
    fn training_is_deterministic_and_bookkept() {
        let field = tiny_field();
        let data = TrainData::chronological(&field).unwrap();
        let cfg = small_config();
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a.history.len(), 4);
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
            assert_eq!(x.val_loss.to_bits(), y.val_loss.to_bits());
        }
        assert_eq!(a.surrogate.params(), b.surrogate.params());
        for r in &a.history {
            let sum = r.data_loss + r.alpha_eff * r.phys_loss + r.reg_theta + r.reg_pi;
            assert!((r.total - sum).abs() <= 1e-12 * r.total.abs().max(1.0));
        }
        let best = a.history.iter().filter(|r| r.alpha_eff == 10.0).map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(a.history[a.best_epoch - 1].val_loss, best);
        assert_eq!(a.history[0].alpha_eff, 0.0);
        assert_eq!(a.history[3].alpha_eff, 10.0);
    }

    #[test]
    fn zero_epochs_is_rejected() {
        let data = TrainData::chronological(&tiny_field()).unwrap();
        let cfg = TrainConfig { epochs: 0, ..small_config() };
        assert!(matches!(train(&data, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn downscale_grid_arithmetic() {
        let field = tiny_field();
        let norm = NormalizationSpec::fit(field.meta(), &field).unwrap();
        let net = init_fieldnet::<f64>(&[3, 4, 1], 1).unwrap().with_normalization(norm).unwrap();
        let (same, ext) = downscale(&net, field.meta(), Resolution::Factor(1)).unwrap();
        assert!(!ext);
        let direct = net.sample_grid(field.meta()).unwrap();
        assert_eq!(same, direct);
        let (up, _) = downscale(&net, field.meta(), Resolution::Factor(2)).unwrap();
        assert_eq!((up.nx(), up.ny(), up.nt()), (9, 7, 10));
        assert!(downscale(&net, field.meta(), Resolution::Factor(0)).is_err());
        let src = net.normalization().source_meta().unwrap();
        assert!((src.x.step - 0.5).abs() < 1e-15 && src.t.len == 10);
    }
}
