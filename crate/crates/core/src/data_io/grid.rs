use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Uniform sampling of one coordinate axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub origin: f64,
    pub step: f64,
    pub len: usize,
}

impl Axis {
    pub fn new(origin: f64, step: f64, len: usize) -> Self {
        Axis { origin, step, len }
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.origin + self.step * i as f64
    }

    pub fn last(&self) -> f64 {
        self.coord(self.len.saturating_sub(1))
    }

    pub fn coords(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.coord(i)).collect()
    }

    /// Endpoint-preserving refinement: `len` → `factor·(len−1)+1`.
    pub fn refined(&self, factor: usize) -> Axis {
        if self.len <= 1 {
            return *self;
        }
        Axis {
            origin: self.origin,
            step: self.step / factor as f64,
            len: factor * (self.len - 1) + 1,
        }
    }
}

/// Coordinate metadata for a [`GridField`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub x: Axis,
    pub y: Axis,
    pub t: Axis,
    pub space_unit: String,
    pub time_unit: String,
}

impl GridMeta {
    pub fn new(x: Axis, y: Axis, t: Axis) -> Self {
        GridMeta {
            x,
            y,
            t,
            space_unit: "rad".into(),
            time_unit: "1".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, axis) in [("x", &self.x), ("y", &self.y), ("t", &self.t)] {
            if !(axis.step > 0.0) || !axis.step.is_finite() || !axis.origin.is_finite() {
                return Err(Error::malformed(format!(
                    "axis {name} needs a positive finite spacing, got {}",
                    axis.step
                )));
            }
            if axis.len == 0 {
                return Err(Error::malformed(format!("axis {name} is empty")));
            }
        }
        Ok(())
    }
}

/// Dense spatiotemporal field, laid out `[t][y][x][var]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField<T> {
    meta: GridMeta,
    names: Vec<String>,
    data: Vec<T>,
}

impl<T: Scalar> GridField<T> {
    pub fn new(meta: GridMeta, names: Vec<String>, data: Vec<T>) -> Result<Self> {
        meta.validate()?;
        if names.is_empty() {
            return Err(Error::malformed("a field needs at least one variable"));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::malformed(format!("duplicate variable name `{n}`")));
            }
        }
        let expected = meta.t.len * meta.y.len * meta.x.len * names.len();
        if data.len() != expected {
            return Err(Error::malformed(format!(
                "payload has {} values, dims require {expected}",
                data.len()
            )));
        }
        Ok(GridField { meta, names, data })
    }

    pub fn zeros(meta: GridMeta, names: Vec<String>) -> Result<Self> {
        let len = meta.t.len * meta.y.len * meta.x.len * names.len();
        Self::new(meta, names, vec![T::zero(); len])
    }

    /// Samples `f(x, y, t) -> [value per variable]` on the grid.
    pub fn from_fn(
        meta: GridMeta,
        names: Vec<String>,
        mut f: impl FnMut(f64, f64, f64) -> Vec<T>,
    ) -> Result<Self> {
        let h = names.len();
        let mut data = Vec::with_capacity(meta.t.len * meta.y.len * meta.x.len * h);
        for it in 0..meta.t.len {
            let t = meta.t.coord(it);
            for iy in 0..meta.y.len {
                let y = meta.y.coord(iy);
                for ix in 0..meta.x.len {
                    let vals = f(meta.x.coord(ix), y, t);
                    if vals.len() != h {
                        return Err(Error::malformed("sampler returned wrong variable count"));
                    }
                    data.extend(vals);
                }
            }
        }
        Self::new(meta, names, data)
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn nt(&self) -> usize {
        self.meta.t.len
    }

    pub fn ny(&self) -> usize {
        self.meta.y.len
    }

    pub fn nx(&self) -> usize {
        self.meta.x.len
    }

    pub fn nvars(&self) -> usize {
        self.names.len()
    }

    /// `(T, m, n, h)` = (frames, rows along y, columns along x, variables).
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.nt(), self.ny(), self.nx(), self.nvars())
    }

    pub fn frame_len(&self) -> usize {
        self.ny() * self.nx() * self.nvars()
    }

    pub fn var_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::MissingVariable(vec![name.to_string()]))
    }

    #[inline]
    pub fn index(&self, t: usize, y: usize, x: usize, v: usize) -> usize {
        ((t * self.ny() + y) * self.nx() + x) * self.nvars() + v
    }

    #[inline]
    pub fn get(&self, t: usize, y: usize, x: usize, v: usize) -> T {
        self.data[self.index(t, y, x, v)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, y: usize, x: usize, v: usize, value: T) {
        let i = self.index(t, y, x, v);
        self.data[i] = value;
    }

    pub fn frame(&self, t: usize) -> &[T] {
        let len = self.frame_len();
        &self.data[t * len..(t + 1) * len]
    }

    /// Copy of the frames in `range`, with the time origin shifted to match.
    pub fn frames(&self, range: Range<usize>) -> Result<Self> {
        if range.start > range.end || range.end > self.nt() || range.is_empty() {
            return Err(Error::config(format!(
                "frame range {range:?} invalid for {} frames",
                self.nt()
            )));
        }
        let mut meta = self.meta.clone();
        meta.t.origin = self.meta.t.coord(range.start);
        meta.t.len = range.len();
        let len = self.frame_len();
        let data = self.data[range.start * len..range.end * len].to_vec();
        Self::new(meta, self.names.clone(), data)
    }

    /// Joins fields that continue one another in time.
    pub fn concat_frames(parts: &[GridField<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config("nothing to concatenate"))?;
        let mut meta = first.meta.clone();
        let mut data = Vec::new();
        let mut frames = 0;
        for p in parts {
            if p.names != first.names || p.nx() != first.nx() || p.ny() != first.ny() {
                return Err(Error::malformed("concatenated fields differ in layout"));
            }
            frames += p.nt();
            data.extend_from_slice(&p.data);
        }
        meta.t.len = frames;
        Self::new(meta, first.names.clone(), data)
    }

    /// All samples of one variable, in `[t][y][x]` order.
    pub fn variable(&self, v: usize) -> Vec<T> {
        self.data.iter().skip(v).step_by(self.nvars()).copied().collect()
    }

    pub fn with_data(&self, data: Vec<T>) -> Result<Self> {
        Self::new(self.meta.clone(), self.names.clone(), data)
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.dims() == other.dims() && self.names == other.names
    }

    /// Converts the scalar type.
    pub fn cast<U: Scalar>(&self) -> GridField<U> {
        GridField {
            meta: self.meta.clone(),
            names: self.names.clone(),
            data: self.data.iter().map(|v| U::lit(v.f64())).collect(),
        }
    }

    /// Spatial subsampling by an integer stride (the inverse of an
    /// endpoint-preserving refinement).
    pub fn restrict(&self, stride: usize) -> Result<Self> {
        if stride == 0 || (self.nx() - 1) % stride != 0 || (self.ny() - 1) % stride != 0 {
            return Err(Error::config(format!(
                "stride {stride} does not divide a {}x{} grid",
                self.nx(),
                self.ny()
            )));
        }
        let mut meta = self.meta.clone();
        meta.x = Axis::new(meta.x.origin, meta.x.step * stride as f64, (self.nx() - 1) / stride + 1);
        meta.y = Axis::new(meta.y.origin, meta.y.step * stride as f64, (self.ny() - 1) / stride + 1);
        let mut data = Vec::with_capacity(meta.t.len * meta.y.len * meta.x.len * self.nvars());
        for t in 0..self.nt() {
            for y in (0..self.ny()).step_by(stride) {
                for x in (0..self.nx()).step_by(stride) {
                    for v in 0..self.nvars() {
                        data.push(self.get(t, y, x, v));
                    }
                }
            }
        }
        Self::new(meta, self.names.clone(), data)
    }
}
