//! Coordinate networks `(x, y, t) → values`: the surrogate field and the
//! latent forcing.
//!
//! A [`FieldNet`] is a tanh MLP over normalized coordinates. Its
//! [`NormalizationSpec`] maps physical coordinates onto `[−1, 1]³` and
//! z-scored outputs back to physical units; derivatives reported by
//! [`derivative_bundle`] are chain-ruled through both maps.

mod checkpoint;
mod jet;

pub use checkpoint::{decode_checkpoint, decode_record, encode_checkpoint, encode_record, load_checkpoint, save_checkpoint, NetRecord, NET_MAGIC, NET_VERSION};
pub use jet::{derivative_bundle, input_gradient, second_partial, DerivativeBundle, Jet, JetRequest, NetVars, Partial};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{GridField, GridMeta};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default hidden architecture: 8 layers of 100 units.
pub const DEFAULT_HIDDEN: [usize; 8] = [100; 8];
/// Smaller variant for quick runs.
pub const COMPACT_HIDDEN: [usize; 4] = [64; 4];

/// Normalized coordinate; the training box maps to `[−1, 1]³`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coord {
    pub x: f64,
    pub y: f64,
    pub t: f64,
}

impl Coord {
    pub fn new(x: f64, y: f64, t: f64) -> Self {
        Coord { x, y, t }
    }

    pub fn axis(&self, i: usize) -> f64 {
        match i {
            0 => self.x,
            1 => self.y,
            _ => self.t,
        }
    }

    /// Outside the normalized training box (with a little rounding slack).
    pub fn is_extrapolated(&self) -> bool {
        const SLACK: f64 = 1e-9;
        [self.x, self.y, self.t].iter().any(|v| v.abs() > 1.0 + SLACK)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetRole {
    Surrogate,
    LatentForce,
    Forecast,
}

impl NetRole {
    pub fn byte(self) -> u8 {
        match self {
            NetRole::Surrogate => 0,
            NetRole::LatentForce => 1,
            NetRole::Forecast => 2,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(NetRole::Surrogate),
            1 => Ok(NetRole::LatentForce),
            2 => Ok(NetRole::Forecast),
            other => Err(Error::malformed(format!("unknown network role byte {other}"))),
        }
    }
}

/// `normalized = (physical − offset) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisAffine {
    pub offset: f64,
    pub scale: f64,
}

impl AxisAffine {
    pub const IDENTITY: AxisAffine = AxisAffine {
        offset: 0.0,
        scale: 1.0,
    };

    /// Maps `[lo, hi]` onto `[−1, 1]`; a degenerate range gets unit scale.
    pub fn spanning(lo: f64, hi: f64) -> Self {
        let half = 0.5 * (hi - lo);
        AxisAffine {
            offset: 0.5 * (lo + hi),
            scale: if half > 0.0 { half } else { 1.0 },
        }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.offset) / self.scale
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.scale + self.offset
    }
}

/// Per-output z-score: `physical = mean + std · normalized`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarAffine {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub x: AxisAffine,
    pub y: AxisAffine,
    pub t: AxisAffine,
    pub outputs: Vec<VarAffine>,
    /// `(n, m, T)` of the grid the spec was fitted on; used to resolve
    /// refinement factors.
    pub source_dims: [usize; 3],
}

impl NormalizationSpec {
    pub fn identity(names: &[String]) -> Self {
        NormalizationSpec {
            x: AxisAffine::IDENTITY,
            y: AxisAffine::IDENTITY,
            t: AxisAffine::IDENTITY,
            outputs: names
                .iter()
                .map(|n| VarAffine {
                    name: n.clone(),
                    mean: 0.0,
                    std: 1.0,
                })
                .collect(),
            source_dims: [0, 0, 0],
        }
    }

    /// Coordinate box from `meta`, output statistics from `stats_source`
    /// (normally the training split only).
    pub fn fit<T: Scalar>(meta: &GridMeta, stats_source: &GridField<T>) -> Result<Self> {
        let h = stats_source.nvars();
        let mut outputs = Vec::with_capacity(h);
        for v in 0..h {
            let vals = stats_source.variable(v);
            let n = vals.len() as f64;
            let mean = vals.iter().map(|v| v.f64()).sum::<f64>() / n;
            let var = vals.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            outputs.push(VarAffine {
                name: stats_source.names()[v].clone(),
                mean,
                std: if std > 1e-12 { std } else { 1.0 },
            });
        }
        let spec = NormalizationSpec {
            x: AxisAffine::spanning(meta.x.origin, meta.x.last()),
            y: AxisAffine::spanning(meta.y.origin, meta.y.last()),
            t: AxisAffine::spanning(meta.t.origin, meta.t.last()),
            outputs,
            source_dims: [meta.x.len, meta.y.len, meta.t.len],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for a in [self.x, self.y, self.t] {
            if a.scale == 0.0 || !a.scale.is_finite() || !a.offset.is_finite() {
                return Err(Error::malformed("coordinate scale must be finite and non-zero"));
            }
        }
        for o in &self.outputs {
            if o.std == 0.0 || !o.std.is_finite() || !o.mean.is_finite() {
                return Err(Error::malformed(format!(
                    "output `{}` needs a finite non-zero std",
                    o.name
                )));
            }
        }
        Ok(())
    }

    pub fn axis(&self, i: usize) -> AxisAffine {
        match i {
            0 => self.x,
            1 => self.y,
            _ => self.t,
        }
    }

    pub fn coord(&self, x: f64, y: f64, t: f64) -> Coord {
        Coord::new(self.x.normalize(x), self.y.normalize(y), self.t.normalize(t))
    }

    pub fn physical(&self, c: Coord) -> (f64, f64, f64) {
        (self.x.denormalize(c.x), self.y.denormalize(c.y), self.t.denormalize(c.t))
    }

    pub fn names(&self) -> Vec<String> {
        self.outputs.iter().map(|o| o.name.clone()).collect()
    }

    /// Normalized coordinates of every grid point, `[t][y][x]` order.
    pub fn grid_coords(&self, meta: &GridMeta) -> Vec<Coord> {
        let mut out = Vec::with_capacity(meta.t.len * meta.y.len * meta.x.len);
        for it in 0..meta.t.len {
            for iy in 0..meta.y.len {
                for ix in 0..meta.x.len {
                    out.push(self.coord(meta.x.coord(ix), meta.y.coord(iy), meta.t.coord(it)));
                }
            }
        }
        out
    }
}

/// Fully connected tanh network with an explicit flat parameter vector.
///
/// Parameters are stored layer by layer: the `in × out` weight matrix
/// (row-major) followed by the `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldNet<T> {
    widths: Vec<usize>,
    params: Vec<T>,
    role: NetRole,
    norm: NormalizationSpec,
}

/// Number of parameters of an MLP with the given layer widths.
pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// `[3, hidden..., outputs]`.
pub fn layer_widths(hidden: &[usize], outputs: usize) -> Vec<usize> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(3);
    w.extend_from_slice(hidden);
    w.push(outputs);
    w
}

/// Xavier-uniform weights and zero biases, deterministic in `seed`.
pub fn init_fieldnet<T: Scalar>(widths: &[usize], seed: u64) -> Result<FieldNet<T>> {
    if widths.len() < 2 {
        return Err(Error::config("a network needs an input and an output layer"));
    }
    if widths.contains(&0) {
        return Err(Error::config("layer widths must be positive"));
    }
    if widths[0] != 3 {
        return Err(Error::config(format!(
            "coordinate networks take 3 inputs, got {}",
            widths[0]
        )));
    }
    let names: Vec<String> = (0..widths[widths.len() - 1]).map(|i| format!("out{i}")).collect();
    Ok(FieldNet {
        widths: widths.to_vec(),
        params: xavier_params(widths, seed),
        role: NetRole::Surrogate,
        norm: NormalizationSpec::identity(&names),
    })
}

pub(crate) fn xavier_params<T: Scalar>(widths: &[usize], seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(param_count(widths));
    for w in widths.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            params.push(T::lit(rng.gen_range(-bound..bound)));
        }
        params.extend(std::iter::repeat(T::zero()).take(fan_out));
    }
    params
}

/// Plain tanh-MLP evaluation on a batch (`rows × widths[0]`).
pub(crate) fn mlp_forward<T: Scalar>(widths: &[usize], params: &[T], input: &Tensor<T>) -> Result<Tensor<T>> {
    let mut a = input.clone();
    let mut offset = 0;
    let last = widths.len() - 2;
    for (l, w) in widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let weights = Tensor::matrix(fan_in, fan_out, params[offset..offset + fan_in * fan_out].to_vec())?;
        offset += fan_in * fan_out;
        let bias = Tensor::vector(params[offset..offset + fan_out].to_vec());
        offset += fan_out;
        let z = a.matmul(&weights)?.add_row(&bias)?;
        a = if l == last { z } else { z.map(|v| v.tanh_fast()) };
    }
    Ok(a)
}

impl<T: Scalar> FieldNet<T> {
    /// Assembles a network from parts, validating the parameter count.
    pub fn from_parts(widths: Vec<usize>, params: Vec<T>, role: NetRole, norm: NormalizationSpec) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::config("invalid layer widths"));
        }
        if params.len() != param_count(&widths) {
            return Err(Error::malformed(format!(
                "expected {} parameters for widths {:?}, found {}",
                param_count(&widths),
                widths,
                params.len()
            )));
        }
        if norm.outputs.len() != widths[widths.len() - 1] && role != NetRole::Forecast {
            return Err(Error::malformed("normalization does not match output width"));
        }
        norm.validate()?;
        Ok(FieldNet {
            widths,
            params,
            role,
            norm,
        })
    }

    pub fn with_role(mut self, role: NetRole) -> Self {
        self.role = role;
        self
    }

    pub fn with_normalization(mut self, norm: NormalizationSpec) -> Result<Self> {
        if norm.outputs.len() != self.output_width() {
            return Err(Error::config(format!(
                "normalization has {} outputs, network has {}",
                norm.outputs.len(),
                self.output_width()
            )));
        }
        norm.validate()?;
        self.norm = norm;
        Ok(self)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn role(&self) -> NetRole {
        self.role
    }

    pub fn normalization(&self) -> &NormalizationSpec {
        &self.norm
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn output_width(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }

    /// Range of layer `l`'s weights and biases inside the flat vector.
    pub fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let mut offset = 0;
        for w in self.widths.windows(2).take(l) {
            offset += w[0] * w[1] + w[1];
        }
        let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
        let w = offset..offset + fan_in * fan_out;
        let b = w.end..w.end + fan_out;
        (w, b)
    }

    /// Zeroes the output layer so the network starts as the constant
    /// denormalization mean.
    pub fn zero_output_layer(&mut self) {
        let (w, b) = self.layer_ranges(self.layer_count() - 1);
        for p in &mut self.params[w.start..b.end] {
            *p = T::zero();
        }
    }

    /// Raw network outputs (normalized units) for normalized coordinates.
    pub fn forward_normalized(&self, coords: &[Coord]) -> Result<Tensor<T>> {
        let input = coords_tensor(coords);
        mlp_forward(&self.widths, &self.params, &input)
    }

    /// Physical-unit outputs, one row per coordinate.
    pub fn predict(&self, coords: &[Coord]) -> Result<Tensor<T>> {
        let mut out = self.forward_normalized(coords)?;
        let h = self.output_width();
        let affine: Vec<(T, T)> = self
            .norm
            .outputs
            .iter()
            .map(|o| (T::lit(o.mean), T::lit(o.std)))
            .collect();
        for row in out.data_mut().chunks_mut(h) {
            for (v, &(mean, std)) in row.iter_mut().zip(&affine) {
                *v = mean + std * *v;
            }
        }
        out.checked("predict")
    }

    /// [`FieldNet::predict`] plus a per-row extrapolation flag.
    pub fn predict_flagged(&self, coords: &[Coord]) -> Result<(Tensor<T>, Vec<bool>)> {
        let flags = coords.iter().map(Coord::is_extrapolated).collect();
        Ok((self.predict(coords)?, flags))
    }

    /// Evaluates the network on every point of a grid.
    pub fn sample_grid(&self, meta: &GridMeta) -> Result<GridField<T>> {
        let coords = self.norm.grid_coords(meta);
        let mut data = Vec::with_capacity(coords.len() * self.output_width());
        for chunk in coords.chunks(4096) {
            data.extend_from_slice(self.predict(chunk)?.data());
        }
        GridField::new(meta.clone(), self.norm.names(), data)
    }
}

pub(crate) fn coords_tensor<T: Scalar>(coords: &[Coord]) -> Tensor<T> {
    let data = coords
        .iter()
        .flat_map(|c| [T::lit(c.x), T::lit(c.y), T::lit(c.t)])
        .collect();
    Tensor::matrix(coords.len(), 3, data).expect("3 values per coordinate")
}
