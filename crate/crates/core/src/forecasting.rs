//! The reference forecaster `g_ω` and its physics-guided fine-tuning.
//!
//! `g_ω` is a small per-cell network shared across the grid: for every cell
//! it reads the last `s + 1` frames at the cell and its four neighbours and
//! emits the next `r` frames. Fine-tuning adds
//!
//! ```text
//! L_F = L_data + β·L_phy,   L_phy = mean ‖∂g/∂t − (Φ(g)·Ξ + Q_π)‖²
//! ```
//!
//! with the time derivative and the library terms taken by finite
//! differences on the predicted frames. Ξ and `Q_π` stay frozen.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data_io::{Axis, GridField, GridMeta};
use crate::error::{Error, Result};
use crate::field_model::{
    encode_checkpoint, mlp_forward, xavier_params, AxisAffine, FieldNet, NetRecord, NetRole, NormalizationSpec,
    Partial, VarAffine,
};
use crate::finite_difference::{FrameStencils, Scheme, SpatialPartial};
use crate::pde_library::EquationSystem;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::Adam;

/// Neighbourhood read per cell: centre, west, east, south, north.
pub const NEIGHBOURS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastConfig {
    /// History length minus one.
    pub s: usize,
    /// Horizon in frames.
    pub r: usize,
    /// Physics weight β.
    pub beta: f64,
    /// Widths of the two hidden layers.
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// Windows per optimizer step.
    pub batch_windows: usize,
    /// Predict increments over the last history frame.
    pub skip: bool,
    /// Spatial first-derivative stencil: "central", "forward" or "backward".
    pub stencil: String,
    /// Drop cells whose stencils fall back to one-sided from the residual.
    pub mask_boundary: bool,
    pub seed: u64,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        ForecastConfig {
            s: 9,
            r: 1,
            beta: 1e-2,
            hidden: vec![32, 32],
            learning_rate: 1e-3,
            pretrain_epochs: 100,
            finetune_epochs: 50,
            batch_windows: 4,
            skip: true,
            stencil: "central".into(),
            mask_boundary: true,
            seed: 0,
        }
    }
}

impl ForecastConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s == 0 {
            return Err(Error::config("s must be at least 1"));
        }
        if self.r == 0 {
            return Err(Error::config("forecast horizon r must be at least 1"));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::config("beta must be ≥ 0"));
        }
        if self.hidden.len() != 2 || self.hidden.contains(&0) {
            return Err(Error::config("the forecaster has exactly two positive hidden widths"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.batch_windows == 0 {
            return Err(Error::config("batch_windows must be positive"));
        }
        self.scheme()?;
        Ok(())
    }

    pub fn scheme(&self) -> Result<Scheme> {
        self.stencil.parse()
    }
}

/// Number of training windows `q = T − r − s − 1`.
pub fn window_count(nt: usize, s: usize, r: usize) -> Result<usize> {
    if s + r + 2 > nt {
        return Err(Error::config(format!(
            "{nt} frames hold no window with s = {s}, r = {r} (need s + r + 2 ≤ T)"
        )));
    }
    Ok(nt - r - s - 1)
}

/// Window end frames `i` over frames `0..nt`: history `i−s ..= i`,
/// targets `i+1 ..= i+r`.
pub fn training_windows(nt: usize, s: usize, r: usize) -> Result<Range<usize>> {
    let q = window_count(nt, s, r)?;
    Ok(s + 1..s + 1 + q)
}

/// Windows whose targets lie in `frames`; the history may reach back
/// before it.
pub fn windows_targeting(frames: Range<usize>, s: usize, r: usize) -> Range<usize> {
    let lo = frames.start.saturating_sub(1).max(s);
    let hi = frames.end.saturating_sub(r);
    lo..hi.max(lo)
}

/// The per-cell forecaster.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastModel<T> {
    s: usize,
    r: usize,
    skip: bool,
    net: FieldNet<T>,
}

impl<T: Scalar> ForecastModel<T> {
    /// Fresh model with input statistics from `train`.
    pub fn new(config: &ForecastConfig, train: &GridField<T>) -> Result<Self> {
        config.validate()?;
        let h = train.nvars();
        let mut inputs = Vec::with_capacity(h);
        let mut outputs = Vec::with_capacity(h);
        let n = (train.nt() * train.frame_len()) as f64;
        for (v, name) in train.names().iter().enumerate() {
            let vals = train.variable(v);
            let mean = vals.iter().map(|x| x.f64()).sum::<f64>() / n;
            let var = vals.iter().map(|x| (x.f64() - mean).powi(2)).sum::<f64>() / n;
            let std = if var.sqrt() < 1e-12 { 1.0 } else { var.sqrt() };
            inputs.push(VarAffine {
                name: name.clone(),
                mean,
                std,
            });
            let out = if config.skip {
                let mut ss = 0.0;
                let mut count = 0usize;
                for t in 1..train.nt() {
                    let (a, b) = (train.frame(t - 1), train.frame(t));
                    for i in (v..a.len()).step_by(h) {
                        ss += (b[i].f64() - a[i].f64()).powi(2);
                        count += 1;
                    }
                }
                let d = if count > 0 { (ss / count as f64).sqrt() } else { 0.0 };
                VarAffine {
                    name: format!("d:{name}"),
                    mean: 0.0,
                    std: if d < 1e-12 { std } else { d },
                }
            } else {
                VarAffine {
                    name: format!("d:{name}"),
                    mean,
                    std,
                }
            };
            outputs.push(out);
        }
        let widths = vec![(config.s + 1) * NEIGHBOURS * h, config.hidden[0], config.hidden[1], config.r * h];
        let params = xavier_params(&widths, config.seed);
        Self::assemble(config.s, config.r, config.skip, widths, params, inputs, outputs)
    }

    fn assemble(
        s: usize,
        r: usize,
        skip: bool,
        widths: Vec<usize>,
        params: Vec<T>,
        inputs: Vec<VarAffine>,
        outputs: Vec<VarAffine>,
    ) -> Result<Self> {
        let mut all = inputs;
        all.extend(outputs);
        let norm = NormalizationSpec {
            x: AxisAffine::IDENTITY,
            y: AxisAffine::IDENTITY,
            t: AxisAffine::IDENTITY,
            outputs: all,
            source_dims: [s + 1, r, skip as usize],
        };
        let net = FieldNet::from_parts(widths, params, NetRole::Forecast, norm)?;
        Ok(ForecastModel { s, r, skip, net })
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn nvars(&self) -> usize {
        self.net.normalization().outputs.len() / 2
    }

    pub fn names(&self) -> Vec<String> {
        self.inputs().iter().map(|o| o.name.clone()).collect()
    }

    fn inputs(&self) -> &[VarAffine] {
        &self.net.normalization().outputs[..self.nvars()]
    }

    fn outputs(&self) -> &[VarAffine] {
        &self.net.normalization().outputs[self.nvars()..]
    }

    pub fn params(&self) -> &[T] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        self.net.params_mut()
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn to_record(&self) -> NetRecord {
        NetRecord {
            role: NetRole::Forecast,
            widths: self.net.widths().to_vec(),
            norm: self.net.normalization().clone(),
            params: self.net.params().iter().map(|p| p.f64()).collect(),
        }
    }

    pub fn from_record(rec: NetRecord) -> Result<Self> {
        if rec.role != NetRole::Forecast {
            return Err(Error::malformed("checkpoint is not a forecaster"));
        }
        let [window, r, skip] = rec.norm.source_dims;
        let outs = rec.norm.outputs.len();
        if window < 2 || r == 0 || skip > 1 || outs == 0 || outs % 2 != 0 {
            return Err(Error::malformed("forecaster header is inconsistent"));
        }
        let h = outs / 2;
        if rec.widths.len() != 4 || rec.widths[0] != window * NEIGHBOURS * h || rec.widths[3] != r * h {
            return Err(Error::malformed("forecaster widths do not match its window"));
        }
        let (inputs, outputs) = rec.norm.outputs.split_at(h);
        Self::assemble(
            window - 1,
            r,
            skip == 1,
            rec.widths,
            rec.params.into_iter().map(T::lit).collect(),
            inputs.to_vec(),
            outputs.to_vec(),
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        crate::field_model::encode_record(&self.to_record())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::from_record(crate::field_model::decode_record(bytes)?)
    }

    /// Per-cell input rows for the window ending at frame `i` of `field`.
    fn features(&self, field: &GridField<T>, i: usize) -> Tensor<T> {
        let (ny, nx, h) = (field.ny(), field.nx(), field.nvars());
        let width = (self.s + 1) * NEIGHBOURS * h;
        let inputs = self.inputs();
        let mut data = Vec::with_capacity(ny * nx * width);
        for y in 0..ny {
            for x in 0..nx {
                let cells = [
                    (y, x),
                    (y, x.saturating_sub(1)),
                    (y, (x + 1).min(nx - 1)),
                    (y.saturating_sub(1), x),
                    ((y + 1).min(ny - 1), x),
                ];
                for t in i - self.s..=i {
                    let frame = field.frame(t);
                    for &(cy, cx) in &cells {
                        for (v, a) in inputs.iter().enumerate() {
                            let val = frame[(cy * nx + cx) * h + v].f64();
                            data.push(T::lit((val - a.mean) / a.std));
                        }
                    }
                }
            }
        }
        Tensor::matrix(ny * nx, width, data).expect("feature layout")
    }

    /// Physical frames (`[k][cell][var]`) from raw outputs (`[cell][k·h+v]`).
    fn to_frames(&self, raw: &Tensor<T>, last: &[T]) -> Vec<T> {
        let h = self.nvars();
        let cells = raw.rows();
        let outs = self.outputs();
        let mut frames = vec![T::zero(); self.r * cells * h];
        for c in 0..cells {
            for k in 0..self.r {
                for v in 0..h {
                    let base = if self.skip { last[c * h + v].f64() } else { 0.0 };
                    let o = &outs[v];
                    let val = base + o.mean + o.std * raw.get2(c, k * h + v).f64();
                    frames[(k * cells + c) * h + v] = T::lit(val);
                }
            }
        }
        frames
    }

    fn check_field(&self, field: &GridField<T>) -> Result<()> {
        if field.nvars() != self.nvars() {
            return Err(Error::ShapeMismatch {
                op: "forecast",
                left: vec![self.nvars()],
                right: vec![field.nvars()],
            });
        }
        Ok(())
    }

    /// Predicted frames for the window ending at frame `i`.
    pub fn predict_window(&self, field: &GridField<T>, i: usize) -> Result<Vec<T>> {
        self.check_field(field)?;
        if i < self.s || i >= field.nt() {
            return Err(Error::config(format!("window ending at frame {i} is out of range")));
        }
        let raw = mlp_forward(self.net.widths(), self.net.params(), &self.features(field, i))?;
        Ok(self.to_frames(&raw, field.frame(i)))
    }

    /// The next `r` frames after a history of exactly `s + 1` frames.
    pub fn forecast(&self, history: &GridField<T>) -> Result<GridField<T>> {
        if history.nt() != self.s + 1 {
            return Err(Error::config(format!(
                "forecast needs {} history frames, got {}",
                self.s + 1,
                history.nt()
            )));
        }
        let frames = self.predict_window(history, self.s)?;
        let mut meta = history.meta().clone();
        meta.t = Axis::new(history.meta().t.coord(history.nt()), history.meta().t.step, self.r);
        GridField::new(meta, history.names().to_vec(), frames)
    }
}

/// Order-1 or order-2 time stencil at predicted frame `k` of `r`, as
/// `(frame, weight)`; frame `−1` is the last history frame, `−2` the one
/// before.
fn time_stencil(k: usize, r: usize, order: u8, dt: f64) -> Vec<(isize, f64)> {
    let k = k as isize;
    let last = k + 1 == r as isize;
    match (order, last) {
        (1, false) => vec![(k + 1, 0.5 / dt), (k - 1, -0.5 / dt)],
        (1, true) => vec![(k, 1.0 / dt), (k - 1, -1.0 / dt)],
        (_, false) => {
            let c = 1.0 / (dt * dt);
            vec![(k + 1, c), (k, -2.0 * c), (k - 1, c)]
        }
        (_, true) => {
            let c = 1.0 / (dt * dt);
            vec![(k, c), (k - 1, -2.0 * c), (k - 2, c)]
        }
    }
}

/// Frozen physics for the forecasting loss, tied to one data grid.
pub struct PhysicsTarget<'a, T> {
    system: &'a EquationSystem,
    stencils: FrameStencils,
    single: FrameStencils,
    mask: Vec<bool>,
    /// Latent force per frame of the data, `[t][cell][equation]`.
    q: Vec<f64>,
    dt: f64,
    std: Vec<f64>,
    _marker: std::marker::PhantomData<T>,
}

impl<'a, T: Scalar> PhysicsTarget<'a, T> {
    pub fn new(
        system: &'a EquationSystem,
        q_net: Option<&FieldNet<T>>,
        meta: &GridMeta,
        std: Vec<f64>,
        scheme: Scheme,
        mask_boundary: bool,
    ) -> Result<Self> {
        system.validate()?;
        let (ny, nx) = (meta.y.len, meta.x.len);
        let h = system.names.len();
        if std.len() != h {
            return Err(Error::config("one scale per variable is required"));
        }
        let stencils = FrameStencils::new(scheme, ny, nx, h, meta.y.step, meta.x.step)?;
        let single = FrameStencils::new(scheme, ny, nx, 1, meta.y.step, meta.x.step)?;
        let mask = (0..ny)
            .flat_map(|y| (0..nx).map(move |x| (y, x)))
            .map(|(y, x)| !(mask_boundary && stencils.is_boundary(y, x)))
            .collect();
        let n_eq = system.equations.len();
        let mut q = vec![0.0; meta.t.len * ny * nx * n_eq];
        if let Some(net) = q_net.filter(|_| system.latent_force_enabled()) {
            if net.output_width() != n_eq {
                return Err(Error::config("latent force width does not match the equation count"));
            }
            let norm = net.normalization();
            for t in 0..meta.t.len {
                let coords: Vec<_> = (0..ny)
                    .flat_map(|y| (0..nx).map(move |x| (y, x)))
                    .map(|(y, x)| norm.coord(meta.x.coord(x), meta.y.coord(y), meta.t.coord(t)))
                    .collect();
                let out = net.predict(&coords)?;
                for c in 0..ny * nx {
                    for (e, eq) in system.equations.iter().enumerate() {
                        if eq.latent_force {
                            q[(t * ny * nx + c) * n_eq + e] = out.get2(c, e).f64();
                        }
                    }
                }
            }
        } else if system.latent_force_enabled() {
            return Err(Error::config("system has a latent force but no Q network was given"));
        }
        Ok(PhysicsTarget {
            system,
            stencils,
            single,
            mask,
            q,
            dt: meta.t.step,
            std,
            _marker: std::marker::PhantomData,
        })
    }

    fn cells(&self) -> usize {
        self.stencils.ny * self.stencils.nx
    }

    /// Residual entries per window.
    pub fn entries_per_window(&self, r: usize) -> usize {
        self.mask.iter().filter(|&&m| m).count() * r * self.system.equations.len()
    }

    fn spatial(&self, frame: &[T], var: usize, p: Partial) -> Vec<T> {
        let h = self.stencils.nvars;
        match p {
            Partial::Value => frame.iter().skip(var).step_by(h).copied().collect(),
            Partial::X => self.stencils.apply(frame, var, SpatialPartial::X),
            Partial::Y => self.stencils.apply(frame, var, SpatialPartial::Y),
            Partial::XX => self.stencils.apply(frame, var, SpatialPartial::XX),
            Partial::YY => self.stencils.apply(frame, var, SpatialPartial::YY),
            Partial::XY => {
                let dx = self.stencils.apply(frame, var, SpatialPartial::X);
                self.single.apply(&dx, 0, SpatialPartial::Y)
            }
            Partial::T | Partial::TT => unreachable!("library terms carry no time derivative"),
        }
    }

    fn spatial_transpose(&self, adjoint: &[T], var: usize, p: Partial, grad: &mut [T]) {
        let h = self.stencils.nvars;
        match p {
            Partial::Value => {
                for (c, &a) in adjoint.iter().enumerate() {
                    grad[c * h + var] += a;
                }
            }
            Partial::X => self.stencils.apply_transpose_into(adjoint, var, SpatialPartial::X, grad),
            Partial::Y => self.stencils.apply_transpose_into(adjoint, var, SpatialPartial::Y, grad),
            Partial::XX => self.stencils.apply_transpose_into(adjoint, var, SpatialPartial::XX, grad),
            Partial::YY => self.stencils.apply_transpose_into(adjoint, var, SpatialPartial::YY, grad),
            Partial::XY => {
                let mut mid = vec![T::zero(); adjoint.len()];
                self.single.apply_transpose_into(adjoint, 0, SpatialPartial::Y, &mut mid);
                self.stencils.apply_transpose_into(&mid, var, SpatialPartial::X, grad);
            }
            Partial::T | Partial::TT => unreachable!("library terms carry no time derivative"),
        }
    }

    /// Sum of squared scaled residuals for predicted frames `pred`
    /// (`r` frames after frame `i` of `field`), optionally with
    /// `∂(scale·sum)/∂pred`.
    pub fn window_residual(
        &self,
        field: &GridField<T>,
        i: usize,
        pred: &[T],
        scale: f64,
        want_grad: bool,
    ) -> Result<(f64, Option<Vec<T>>)> {
        let cells = self.cells();
        let h = self.stencils.nvars;
        let flen = cells * h;
        if pred.is_empty() || pred.len() % flen != 0 {
            return Err(Error::config("predicted frames do not match the grid"));
        }
        let r = pred.len() / flen;
        let n_eq = self.system.equations.len();
        let frame = |f: isize| -> &[T] {
            if f >= 0 {
                &pred[f as usize * flen..(f as usize + 1) * flen]
            } else {
                field.frame((i as isize + 1 + f) as usize)
            }
        };
        let mut grad = want_grad.then(|| vec![T::zero(); pred.len()]);
        let mut sum = 0.0;
        for k in 0..r {
            let fk = frame(k as isize);
            let t_index = i + 1 + k;
            for (e, eq) in self.system.equations.iter().enumerate() {
                let var = eq.spec.var;
                let inv = 1.0 / self.std[var];
                let stencil = time_stencil(k, r, eq.spec.target_order, self.dt);
                // Residual per cell.
                let mut res: Vec<f64> = vec![0.0; cells];
                for &(f, w) in &stencil {
                    let src = frame(f);
                    for (c, rv) in res.iter_mut().enumerate() {
                        *rv += w * src[c * h + var].f64();
                    }
                }
                let mut term_values = Vec::with_capacity(eq.spec.terms.len());
                for (term, &xi) in eq.spec.terms.iter().zip(&eq.coefficients) {
                    let factors: Vec<Vec<T>> = term.factors().iter().map(|f| self.spatial(fk, f.var, f.partial)).collect();
                    if xi != 0.0 {
                        for (c, rv) in res.iter_mut().enumerate() {
                            let phi = factors.iter().fold(1.0, |acc, f| acc * f[c].f64());
                            *rv -= xi * phi;
                        }
                    }
                    term_values.push(factors);
                }
                if eq.latent_force {
                    for (c, rv) in res.iter_mut().enumerate() {
                        *rv -= self.q[(t_index * cells + c) * n_eq + e];
                    }
                }
                for (c, rv) in res.iter_mut().enumerate() {
                    if self.mask[c] {
                        *rv *= inv;
                        sum += *rv * *rv;
                    } else {
                        *rv = 0.0;
                    }
                }
                if let Some(g) = grad.as_mut() {
                    // d(scale·Σ res²)/d(raw residual) = 2·scale·res/std.
                    let adj: Vec<f64> = res.iter().map(|&rv| 2.0 * scale * rv * inv).collect();
                    for &(f, w) in &stencil {
                        if f >= 0 {
                            let off = f as usize * flen;
                            for (c, &a) in adj.iter().enumerate() {
                                g[off + c * h + var] += T::lit(w * a);
                            }
                        }
                    }
                    let gk = &mut g[k * flen..(k + 1) * flen];
                    for ((term, &xi), factors) in eq.spec.terms.iter().zip(&eq.coefficients).zip(&term_values) {
                        if xi == 0.0 {
                            continue;
                        }
                        for (j, f) in term.factors().iter().enumerate() {
                            let other = factors.get(1 - j).filter(|_| factors.len() == 2);
                            let a: Vec<T> = adj
                                .iter()
                                .enumerate()
                                .map(|(c, &a)| T::lit(-xi * a * other.map_or(1.0, |o| o[c].f64())))
                                .collect();
                            self.spatial_transpose(&a, f.var, f.partial, gk);
                        }
                    }
                }
            }
        }
        Ok((sum, grad))
    }
}

/// Data for forecaster training: the (downscaled) series, the frame ranges
/// and an optional reference to score against.
#[derive(Debug, Clone)]
pub struct ForecastData<T> {
    pub series: GridField<T>,
    pub train: Range<usize>,
    pub val: Range<usize>,
    /// Scored instead of `series` when present; same layout.
    pub truth: Option<GridField<T>>,
}

impl<T: Scalar> ForecastData<T> {
    /// Chronological 8:1:1 ranges over `series`.
    pub fn chronological(series: GridField<T>, truth: Option<GridField<T>>) -> Result<Self> {
        if let Some(t) = &truth {
            if !t.same_layout(&series) {
                return Err(Error::config("reference field must share the series layout"));
            }
        }
        let ranges = crate::data_io::SplitRanges::for_frames(series.nt())?;
        Ok(ForecastData {
            series,
            train: ranges.train,
            val: ranges.val,
            truth,
        })
    }

    pub fn train_windows(&self, s: usize, r: usize) -> Result<Vec<usize>> {
        let w = training_windows(self.train.len(), s, r)?;
        Ok(w.map(|i| i + self.train.start).collect())
    }

    pub fn val_windows(&self, s: usize, r: usize) -> Result<Vec<usize>> {
        let w: Vec<usize> = windows_targeting(self.val.clone(), s, r).collect();
        if w.is_empty() {
            return Err(Error::config("validation range holds no forecast window"));
        }
        Ok(w)
    }

    fn reference(&self) -> &GridField<T> {
        self.truth.as_ref().unwrap_or(&self.series)
    }
}

fn target_frames<T: Scalar>(field: &GridField<T>, i: usize, r: usize) -> &[T] {
    let flen = field.frame_len();
    &field.data()[(i + 1) * flen..(i + 1 + r) * flen]
}

fn data_sum<T: Scalar>(model: &ForecastModel<T>, pred: &[T], target: &[T]) -> f64 {
    let h = model.nvars();
    let inputs = model.inputs();
    pred.iter()
        .zip(target)
        .enumerate()
        .map(|(j, (&p, &y))| ((p.f64() - y.f64()) / inputs[j % h].std).powi(2))
        .sum()
}

/// Mean squared scaled error over `windows` of `field`.
pub fn forecast_data_loss_on<T: Scalar>(model: &ForecastModel<T>, field: &GridField<T>, windows: &[usize]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::config("no forecast windows (q ≤ 0)"));
    }
    let mut sum = 0.0;
    for &i in windows {
        if i + model.r >= field.nt() {
            return Err(Error::config(format!("window ending at frame {i} has no targets")));
        }
        let pred = model.predict_window(field, i)?;
        sum += data_sum(model, &pred, target_frames(field, i, model.r));
    }
    Ok(sum / (windows.len() * model.r * field.frame_len()) as f64)
}

/// Data loss over all `q = T − r − s − 1` windows of `field`.
pub fn forecast_data_loss<T: Scalar>(model: &ForecastModel<T>, field: &GridField<T>) -> Result<f64> {
    let w: Vec<usize> = training_windows(field.nt(), model.s, model.r)?.collect();
    forecast_data_loss_on(model, field, &w)
}

/// Physics loss over `windows` of `field`.
pub fn forecast_physics_loss_on<T: Scalar>(
    model: &ForecastModel<T>,
    field: &GridField<T>,
    windows: &[usize],
    target: &PhysicsTarget<'_, T>,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::config("no forecast windows (q ≤ 0)"));
    }
    let mut sum = 0.0;
    for &i in windows {
        let pred = model.predict_window(field, i)?;
        sum += target.window_residual(field, i, &pred, 1.0, false)?.0;
    }
    let n = windows.len() * target.entries_per_window(model.r);
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Physics loss over all `q` windows of `field`.
pub fn forecast_physics_loss<T: Scalar>(
    model: &ForecastModel<T>,
    field: &GridField<T>,
    system: &EquationSystem,
    q_net: Option<&FieldNet<T>>,
    config: &ForecastConfig,
) -> Result<f64> {
    let target = PhysicsTarget::new(
        system,
        q_net,
        field.meta(),
        model.inputs().iter().map(|o| o.std).collect(),
        config.scheme()?,
        config.mask_boundary,
    )?;
    let w: Vec<usize> = training_windows(field.nt(), model.s, model.r)?.collect();
    forecast_physics_loss_on(model, field, &w, &target)
}

/// RMSE per forecast step (averaged over variables) of `windows` against
/// `reference`.
pub fn step_rmse<T: Scalar>(
    model: &ForecastModel<T>,
    series: &GridField<T>,
    reference: &GridField<T>,
    windows: &[usize],
) -> Result<Vec<f64>> {
    let (h, flen, r) = (model.nvars(), series.frame_len(), model.r);
    let mut ss = vec![vec![0.0; h]; r];
    for &i in windows {
        let pred = model.predict_window(series, i)?;
        let truth = target_frames(reference, i, r);
        for (j, (&p, &y)) in pred.iter().zip(truth).enumerate() {
            ss[j / flen][j % h] += (p.f64() - y.f64()).powi(2);
        }
    }
    let n = (windows.len() * flen / h) as f64;
    Ok(ss.iter().map(|per| per.iter().map(|s| (s / n).sqrt()).sum::<f64>() / h as f64).collect())
}

/// Mean of [`step_rmse`] over the horizon.
pub fn window_rmse<T: Scalar>(model: &ForecastModel<T>, series: &GridField<T>, reference: &GridField<T>, windows: &[usize]) -> Result<f64> {
    let steps = step_rmse(model, series, reference, windows)?;
    Ok(steps.iter().sum::<f64>() / steps.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastEpoch {
    pub epoch: usize,
    pub data_loss: f64,
    pub phys_loss: f64,
    pub beta: f64,
    pub total: f64,
    pub val_rmse: f64,
    pub seconds: f64,
}

pub const FORECAST_HISTORY_HEADER: &str = "epoch,data_loss,phys_loss,beta,total,val_rmse";

pub fn forecast_history_csv(history: &[ForecastEpoch]) -> String {
    let mut s = String::from(FORECAST_HISTORY_HEADER);
    s.push('\n');
    for e in history {
        s.push_str(&format!(
            "{},{:e},{:e},{},{:e},{:e}\n",
            e.epoch, e.data_loss, e.phys_loss, e.beta, e.total, e.val_rmse
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct ForecastOutcome<T> {
    /// Best-validation model.
    pub model: ForecastModel<T>,
    pub history: Vec<ForecastEpoch>,
    pub best_epoch: usize,
    pub aborted: Option<String>,
}

/// Fingerprint of the frozen physics, used to prove fine-tuning leaves it
/// untouched.
pub fn frozen_checksum<T: Scalar>(system: &EquationSystem, q_net: Option<&FieldNet<T>>) -> Result<u64> {
    let mut hasher = DefaultHasher::new();
    system.to_json()?.hash(&mut hasher);
    if let Some(q) = q_net {
        encode_checkpoint(q).hash(&mut hasher);
    }
    Ok(hasher.finish())
}

struct StepParts<T> {
    data: f64,
    phys: f64,
    grad: Vec<T>,
}

fn window_step<T: Scalar>(
    model: &ForecastModel<T>,
    field: &GridField<T>,
    i: usize,
    physics: Option<(&PhysicsTarget<'_, T>, f64)>,
    data_scale: f64,
) -> Result<StepParts<T>> {
    let mut tape = Tape::new();
    let vars = model.net.register(&mut tape, true)?;
    let input = tape.constant(model.features(field, i));
    let out = model.net.forward_on_tape(&mut tape, &vars, input)?;
    let raw = tape.value(out).clone();
    let last = field.frame(i);
    let pred = model.to_frames(&raw, last);
    let target = target_frames(field, i, model.r);
    let h = model.nvars();
    let inputs = model.inputs();

    let data = data_sum(model, &pred, target);
    // dL/dpred, frames layout.
    let mut adj: Vec<f64> = pred
        .iter()
        .zip(target)
        .enumerate()
        .map(|(j, (&p, &y))| 2.0 * data_scale * (p.f64() - y.f64()) / inputs[j % h].std.powi(2))
        .collect();
    let mut phys = 0.0;
    if let Some((target, scale)) = physics {
        let (sum, g) = target.window_residual(field, i, &pred, scale, scale > 0.0)?;
        phys = sum;
        if let Some(g) = g {
            for (a, b) in adj.iter_mut().zip(g) {
                *a += b.f64();
            }
        }
    }
    let cells = raw.rows();
    let outs = model.outputs();
    let mut seed = Vec::with_capacity(raw.len());
    for c in 0..cells {
        for k in 0..model.r {
            for v in 0..h {
                seed.push(T::lit(adj[(k * cells + c) * h + v] * outs[v].std));
            }
        }
    }
    let seed = tape.constant(Tensor::matrix(cells, model.r * h, seed)?);
    let weighted = tape.mul(out, seed)?;
    let total = tape.sum(weighted)?;
    let grads = tape.grad(total, &vars.all())?;
    Ok(StepParts {
        data,
        phys,
        grad: crate::field_model::NetVars::flatten(&grads),
    })
}

/// Adam on `L_data + β·L_phy` from `model`, keeping the best-validation
/// state. `physics` is ignored when `beta == 0`.
pub fn fit_forecaster<T: Scalar>(
    model: ForecastModel<T>,
    data: &ForecastData<T>,
    physics: Option<&PhysicsTarget<'_, T>>,
    beta: f64,
    epochs: usize,
    config: &ForecastConfig,
    mut on_epoch: impl FnMut(&ForecastEpoch),
) -> Result<ForecastOutcome<T>> {
    config.validate()?;
    if epochs == 0 {
        return Err(Error::config("epochs must be at least 1 (nothing to train)"));
    }
    if beta > 0.0 && physics.is_none() {
        return Err(Error::config("β > 0 needs a learned equation system"));
    }
    let mut model = model;
    model.check_field(&data.series)?;
    let (s, r) = (model.s, model.r);
    let train = data.train_windows(s, r)?;
    let val = data.val_windows(s, r)?;
    let flen = data.series.frame_len();
    let per_window_phys = physics.map_or(0, |p| p.entries_per_window(r));
    let mut opt = Adam::new(model.param_count(), config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(11));
    let mut history = Vec::with_capacity(epochs);
    let mut best: Option<(Vec<T>, f64, usize)> = None;
    let mut aborted = None;

    'epochs: for epoch in 0..epochs {
        let started = Instant::now();
        let mut order = train.clone();
        order.shuffle(&mut rng);
        let (mut sd, mut sp, mut st) = (0.0, 0.0, 0.0);
        let batches: Vec<&[usize]> = order.chunks(config.batch_windows).collect();
        for batch in &batches {
            let data_scale = 1.0 / (batch.len() * r * flen) as f64;
            let phys_n = (batch.len() * per_window_phys).max(1) as f64;
            let phys = physics.filter(|_| beta > 0.0).map(|p| (p, beta / phys_n));
            let parts: Vec<Result<StepParts<T>>> = batch
                .par_iter()
                .map(|&i| window_step(&model, &data.series, i, phys, data_scale))
                .collect();
            let mut grad = vec![0.0; model.param_count()];
            let (mut d, mut p) = (0.0, 0.0);
            for part in parts {
                let part = part?;
                d += part.data;
                p += part.phys;
                for (a, b) in grad.iter_mut().zip(&part.grad) {
                    *a += b.f64();
                }
            }
            d *= data_scale;
            p /= phys_n;
            let total = d + beta * p;
            if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                aborted = Some(format!("non-finite forecast loss at epoch {} (data {d:e}, physics {p:e})", epoch + 1));
                break 'epochs;
            }
            sd += d;
            sp += p;
            st += total;
            opt.update(model.params_mut(), &grad);
        }
        let n = batches.len() as f64;
        let val_rmse = window_rmse(&model, &data.series, data.reference(), &val)?;
        if !val_rmse.is_finite() {
            aborted = Some(format!("non-finite validation RMSE at epoch {}", epoch + 1));
            break;
        }
        let rec = ForecastEpoch {
            epoch: epoch + 1,
            data_loss: sd / n,
            phys_loss: sp / n,
            beta,
            total: st / n,
            val_rmse,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        history.push(rec);
        if best.as_ref().map_or(true, |b| val_rmse < b.1) {
            best = Some((model.params().to_vec(), val_rmse, epoch + 1));
        }
    }
    let Some((params, _, best_epoch)) = best else {
        return Err(Error::Diverged {
            epoch: 1,
            detail: aborted.unwrap_or_else(|| "no epoch completed".into()),
        });
    };
    model.params_mut().copy_from_slice(&params);
    Ok(ForecastOutcome {
        model,
        history,
        best_epoch,
        aborted,
    })
}

/// Data-only pre-training of a fresh forecaster.
pub fn pretrain<T: Scalar>(data: &ForecastData<T>, config: &ForecastConfig) -> Result<ForecastOutcome<T>> {
    let train = data.series.frames(data.train.clone())?;
    let model = ForecastModel::new(config, &train)?;
    fit_forecaster(model, data, None, 0.0, config.pretrain_epochs, config, |_| {})
}

/// Continues training of a pre-trained forecaster on `L_data + β·L_phy`
/// with the frozen `system` and `q_net`.
pub fn finetune<T: Scalar>(
    model: ForecastModel<T>,
    data: &ForecastData<T>,
    system: &EquationSystem,
    q_net: Option<&FieldNet<T>>,
    config: &ForecastConfig,
) -> Result<ForecastOutcome<T>> {
    finetune_with(model, data, system, q_net, config, |_| {})
}

pub fn finetune_with<T: Scalar>(
    model: ForecastModel<T>,
    data: &ForecastData<T>,
    system: &EquationSystem,
    q_net: Option<&FieldNet<T>>,
    config: &ForecastConfig,
    on_epoch: impl FnMut(&ForecastEpoch),
) -> Result<ForecastOutcome<T>> {
    if system.names.as_slice() != data.series.names() {
        return Err(Error::config("equation variables differ from the forecast data"));
    }
    let before = frozen_checksum(system, q_net)?;
    let target = PhysicsTarget::new(
        system,
        q_net,
        data.series.meta(),
        model.inputs().iter().map(|o| o.std).collect(),
        config.scheme()?,
        config.mask_boundary,
    )?;
    let out = fit_forecaster(model, data, Some(&target), config.beta, config.finetune_epochs, config, on_epoch)?;
    if frozen_checksum(system, q_net)? != before {
        return Err(Error::config("frozen physics changed during fine-tuning"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde_library::default_library;

    fn series(nt: usize, f: impl Fn(f64, f64, f64) -> f64) -> GridField<f64> {
        let meta = GridMeta::new(Axis::new(0.0, 0.4, 7), Axis::new(0.0, 0.5, 6), Axis::new(0.0, 0.1, nt));
        GridField::from_fn(meta, vec!["u".into()], |x, y, t| vec![f(x, y, t)]).unwrap()
    }

    fn cfg(s: usize, r: usize) -> ForecastConfig {
        ForecastConfig {
            s,
            r,
            hidden: vec![6, 5],
            pretrain_epochs: 3,
            finetune_epochs: 3,
            ..Default::default()
        }
    }

    #[test]
    fn window_accounting() {
        assert_eq!(window_count(5, 1, 2).unwrap(), 1);
        assert_eq!(training_windows(5, 1, 2).unwrap(), 2..3);
        assert!(window_count(4, 1, 2).is_err());
        assert_eq!(window_count(100, 9, 8).unwrap(), 82);
        let w = windows_targeting(80..90, 9, 8);
        assert_eq!(w, 79..82);
        for i in w {
            assert!(i + 1 >= 80 && i + 8 < 90);
        }
    }

    #[test]
    fn zero_weights_without_skip_give_the_mean() {
        let f = series(12, |x, y, t| x + y * t);
        let mut m = ForecastModel::new(&ForecastConfig { skip: false, ..cfg(2, 3) }, &f).unwrap();
        for p in m.params_mut() {
            *p = 0.0;
        }
        let mean = f.data().iter().sum::<f64>() / f.data().len() as f64;
        let out = m.forecast(&f.frames(0..3).unwrap()).unwrap();
        assert_eq!(out.nt(), 3);
        assert!(out.data().iter().all(|v| (v - mean).abs() < 1e-12));
        assert!((out.meta().t.origin - 0.3).abs() < 1e-12);
        assert!(m.forecast(&f.frames(0..4).unwrap()).is_err());
    }

    #[test]
    fn zero_weights_with_skip_are_persistence() {
        let f = series(12, |x, _, t| x * t);
        let mut m = ForecastModel::new(&cfg(2, 2), &f).unwrap();
        for p in m.params_mut() {
            *p = 0.0;
        }
        let hist = f.frames(3..6).unwrap();
        let out = m.forecast(&hist).unwrap();
        let pers = crate::data_io::persistence(&hist, 2).unwrap();
        assert_eq!(out.data(), pers.data());
        // Persistence on u = t with unit steps scores exactly 1 at r = 1.
        let unit = {
            let meta = GridMeta::new(Axis::new(0.0, 1.0, 3), Axis::new(0.0, 1.0, 3), Axis::new(0.0, 1.0, 8));
            GridField::from_fn(meta, vec!["u".into()], |_, _, t| vec![t]).unwrap()
        };
        let mut p = ForecastModel::new(&cfg(1, 1), &unit).unwrap();
        for w in p.params_mut() {
            *w = 0.0;
        }
        let std = p.inputs()[0].std;
        let loss = forecast_data_loss(&p, &unit).unwrap();
        assert!((loss * std * std - 1.0).abs() < 1e-12);
    }

    #[test]
    fn time_stencils_match_the_shared_helper() {
        let dt = 0.1;
        let hist: Vec<f64> = vec![0.3, -1.0];
        let pred: Vec<f64> = vec![1.0, 2.0, 4.0, 3.0, 8.0, 5.0];
        let reference = crate::finite_difference::fd_time_of_prediction(&hist, &pred, 2, dt).unwrap();
        for k in 0..3 {
            for c in 0..2 {
                let v: f64 = time_stencil(k, 3, 1, dt)
                    .iter()
                    .map(|&(f, w)| w * if f < 0 { hist[c] } else { pred[f as usize * 2 + c] })
                    .sum();
                assert!((v - reference[k * 2 + c]).abs() < 1e-12);
            }
        }
    }

    fn system_for(names: &[String], coeffs: Vec<f64>) -> EquationSystem {
        let mut sys = EquationSystem::unfitted(names.to_vec(), default_library(names, &[]).unwrap(), false);
        sys.equations[0].coefficients = coeffs;
        sys
    }

    #[test]
    fn physics_residual_cases() {
        let names = vec!["u".to_string()];
        let constant = series(12, |_, _, _| 2.0);
        let zero = system_for(&names, vec![0.0; 8]);
        let t = PhysicsTarget::<f64>::new(&zero, None, constant.meta(), vec![1.0], Scheme::Central, true).unwrap();
        let pred = constant.frames(5..8).unwrap().into_data();
        assert_eq!(t.window_residual(&constant, 4, &pred, 1.0, false).unwrap().0, 0.0);

        // u = x − 0.5·t satisfies u_t = −0.5·u_x exactly under every stencil.
        let moving = series(12, |x, _, t| x - 0.5 * t);
        let adv = system_for(&names, vec![0.0, 0.0, -0.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let t = PhysicsTarget::<f64>::new(&adv, None, moving.meta(), vec![1.0], Scheme::Central, false).unwrap();
        let pred = moving.frames(5..8).unwrap().into_data();
        let (res, _) = t.window_residual(&moving, 4, &pred, 1.0, false).unwrap();
        assert!(res < 1e-20, "{res}");
    }

    #[test]
    fn physics_adjoint_matches_finite_differences() {
        let names = vec!["u".to_string()];
        let f = series(12, |x, y, t| (x + 0.3 * y - t).sin());
        let sys = system_for(&names, vec![0.1, -0.2, -0.5, 0.3, 0.05, 0.02, 0.4, -0.1]);
        for order in [1u8, 2] {
            let mut sys = sys.clone();
            sys.equations[0].spec.target_order = order;
            let t = PhysicsTarget::<f64>::new(&sys, None, f.meta(), vec![0.7], Scheme::Central, true).unwrap();
            let mut pred = f.frames(5..8).unwrap().into_data();
            for (j, p) in pred.iter_mut().enumerate() {
                *p += 0.01 * (j as f64).cos();
            }
            let (_, g) = t.window_residual(&f, 4, &pred, 1.0, true).unwrap();
            let g = g.unwrap();
            let eps = 1e-6;
            for j in [0, 9, 20, 47, 90, pred.len() - 1] {
                let mut a = pred.clone();
                let mut b = pred.clone();
                a[j] += eps;
                b[j] -= eps;
                let fd = (t.window_residual(&f, 4, &a, 1.0, false).unwrap().0 - t.window_residual(&f, 4, &b, 1.0, false).unwrap().0) / (2.0 * eps);
                assert!((fd - g[j]).abs() <= 1e-5 * fd.abs().max(1.0), "order {order} [{j}] {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let names = vec!["u".to_string()];
        let f = series(14, |x, y, t| (x - 0.5 * t).sin() + 0.2 * y);
        let model = ForecastModel::new(&cfg(2, 2), &f).unwrap();
        let sys = system_for(&names, vec![0.0, 0.0, -0.5, 0.0, 0.01, 0.01, 0.0, 0.0]);
        let t = PhysicsTarget::<f64>::new(&sys, None, f.meta(), model.inputs().iter().map(|o| o.std).collect(), Scheme::Central, true).unwrap();
        let loss = |m: &ForecastModel<f64>| {
            let pred = m.predict_window(&f, 5).unwrap();
            0.3 * data_sum(m, &pred, target_frames(&f, 5, 2)) + 0.7 * t.window_residual(&f, 5, &pred, 0.7, false).unwrap().0
        };
        let parts = window_step(&model, &f, 5, Some((&t, 0.7)), 0.3).unwrap();
        let eps = 1e-6;
        for j in [0, 13, 40, model.param_count() - 1] {
            let (mut a, mut b) = (model.clone(), model.clone());
            a.params_mut()[j] += eps;
            b.params_mut()[j] -= eps;
            let fd = (loss(&a) - loss(&b)) / (2.0 * eps);
            assert!((fd - parts.grad[j]).abs() <= 1e-5 * fd.abs().max(1.0), "[{j}] {fd} vs {}", parts.grad[j]);
        }
    }

    #[test]
    fn data_gradient_matches_finite_differences() {
        let f = series(14, |x, y, t| (x - 0.5 * t).sin() + 0.2 * y);
        let model = ForecastModel::new(&cfg(2, 2), &f).unwrap();
        let loss = |m: &ForecastModel<f64>| {
            let pred = m.predict_window(&f, 5).unwrap();
            0.3 * data_sum(m, &pred, target_frames(&f, 5, 2))
        };
        let parts = window_step(&model, &f, 5, None, 0.3).unwrap();
        let eps = 1e-6;
        for j in [0, 13, 40, model.param_count() - 1] {
            let (mut a, mut b) = (model.clone(), model.clone());
            a.params_mut()[j] += eps;
            b.params_mut()[j] -= eps;
            let fd = (loss(&a) - loss(&b)) / (2.0 * eps);
            assert!((fd - parts.grad[j]).abs() <= 1e-5 * fd.abs().max(1.0), "[{j}] {fd} vs {}", parts.grad[j]);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let f = series(12, |x, _, _| x);
        let m = ForecastModel::new(&cfg(2, 3), &f).unwrap();
        let bytes = m.encode();
        let back = ForecastModel::<f64>::decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.encode(), bytes);
        let surrogate = crate::field_model::init_fieldnet::<f64>(&[3, 2, 1], 0).unwrap();
        assert!(ForecastModel::<f64>::decode(&encode_checkpoint(&surrogate)).is_err());
    }

    #[test]
    fn finetune_keeps_physics_frozen_and_books_losses() {
        let names = vec!["u".to_string()];
        let f = series(30, |x, y, t| (x - 0.5 * t).sin() * (y + 0.1).cos());
        let data = ForecastData::chronological(f, None).unwrap();
        let c = cfg(2, 2);
        let pre = pretrain(&data, &c).unwrap();
        let sys = system_for(&names, vec![0.0, 0.0, -0.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let before = frozen_checksum::<f64>(&sys, None).unwrap();
        let out = finetune(pre.model.clone(), &data, &sys, None, &c).unwrap();
        assert_eq!(frozen_checksum::<f64>(&sys, None).unwrap(), before);
        for e in &out.history {
            assert!((e.total - (e.data_loss + e.beta * e.phys_loss)).abs() <= 1e-12 * e.total.max(1.0));
        }
        let best = out.history.iter().map(|e| e.val_rmse).fold(f64::INFINITY, f64::min);
        assert_eq!(out.history[out.best_epoch - 1].val_rmse, best);
        assert!(fit_forecaster(pre.model, &data, None, 0.0, 0, &c, |_| {}).is_err());
    }
}
