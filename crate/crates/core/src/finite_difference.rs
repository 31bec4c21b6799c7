//! Finite-difference derivatives on uniform grids.
//!
//! Each derivative is a 1-D linear operator along one axis: interior
//! samples use the requested stencil and samples where it does not fit
//! fall back to a one-sided stencil and are flagged in a boundary mask.
//! The operator is stored as explicit weights so the same object applies
//! its transpose, which the forecasting loss needs for its adjoint.

use std::fmt;
use std::str::FromStr;

use crate::data_io::GridField;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Forward,
    Backward,
    Central,
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "forward" => Ok(Scheme::Forward),
            "backward" => Ok(Scheme::Backward),
            "central" => Ok(Scheme::Central),
            other => Err(Error::config(format!("unknown stencil scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridAxis {
    T,
    X,
    Y,
}

impl fmt::Display for GridAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GridAxis::T => "t",
            GridAxis::X => "x",
            GridAxis::Y => "y",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StencilKind {
    pub scheme: Scheme,
    pub axis: GridAxis,
    pub order: u8,
}

impl StencilKind {
    pub fn new(scheme: Scheme, axis: GridAxis, order: u8) -> Self {
        StencilKind {
            scheme,
            axis,
            order,
        }
    }

    pub fn central(axis: GridAxis, order: u8) -> Self {
        Self::new(Scheme::Central, axis, order)
    }

    /// Fewest samples along the axis for which the stencil is defined.
    pub fn min_samples(&self) -> usize {
        match (self.scheme, self.order) {
            (Scheme::Central, _) | (_, 2) => 3,
            _ => 2,
        }
    }
}

/// A 1-D derivative operator with explicit weights.
#[derive(Debug, Clone)]
pub struct Stencil1d {
    rows: Vec<Vec<(usize, f64)>>,
    boundary: Vec<bool>,
}

impl Stencil1d {
    pub fn new(scheme: Scheme, order: u8, n: usize, spacing: f64) -> Result<Self> {
        let kind = StencilKind::new(scheme, GridAxis::X, order);
        if order != 1 && order != 2 {
            return Err(Error::config(format!("derivative order {order} not supported")));
        }
        if n < kind.min_samples() {
            return Err(Error::StencilTooShort {
                axis: "axis",
                needed: kind.min_samples(),
                found: n,
            });
        }
        let h = spacing;
        let fwd1 = |i: usize| vec![(i, -1.0 / h), (i + 1, 1.0 / h)];
        let bwd1 = |i: usize| vec![(i - 1, -1.0 / h), (i, 1.0 / h)];
        let h2 = h * h;
        // three-point second difference starting at `s`
        let second = |s: usize| vec![(s, 1.0 / h2), (s + 1, -2.0 / h2), (s + 2, 1.0 / h2)];

        let mut rows = Vec::with_capacity(n);
        let mut boundary = Vec::with_capacity(n);
        for i in 0..n {
            let (row, edge) = match (scheme, order) {
                (Scheme::Central, 1) => {
                    if i == 0 {
                        (fwd1(i), true)
                    } else if i == n - 1 {
                        (bwd1(i), true)
                    } else {
                        (vec![(i - 1, -0.5 / h), (i + 1, 0.5 / h)], false)
                    }
                }
                (Scheme::Forward, 1) => {
                    if i + 1 < n {
                        (fwd1(i), false)
                    } else {
                        (bwd1(i), true)
                    }
                }
                (Scheme::Backward, 1) => {
                    if i >= 1 {
                        (bwd1(i), false)
                    } else {
                        (fwd1(i), true)
                    }
                }
                (Scheme::Central, _) => {
                    if i == 0 {
                        (second(0), true)
                    } else if i == n - 1 {
                        (second(n - 3), true)
                    } else {
                        (second(i - 1), false)
                    }
                }
                (Scheme::Forward, _) => {
                    if i + 2 < n {
                        (second(i), false)
                    } else {
                        (second(n - 3), true)
                    }
                }
                (Scheme::Backward, _) => {
                    if i >= 2 {
                        (second(i - 2), false)
                    } else {
                        (second(0), true)
                    }
                }
            };
            rows.push(row);
            boundary.push(edge);
        }
        Ok(Stencil1d { rows, boundary })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn is_boundary(&self, i: usize) -> bool {
        self.boundary[i]
    }

    /// Derivative at index `i` of samples `at(j)`.
    #[inline]
    pub fn apply_at<T: Scalar>(&self, i: usize, at: impl Fn(usize) -> T) -> T {
        let mut acc = T::zero();
        for &(j, w) in &self.rows[i] {
            acc += T::lit(w) * at(j);
        }
        acc
    }

    /// Scatters `adjoint · ∂(row i)/∂u_j` into `out(j)`.
    #[inline]
    pub fn scatter_at<T: Scalar>(&self, i: usize, adjoint: T, mut out: impl FnMut(usize, T)) {
        for &(j, w) in &self.rows[i] {
            out(j, T::lit(w) * adjoint);
        }
    }
}

/// Output of [`fd_derivative`]: a one-variable field and the boundary mask
/// (`true` where the one-sided fallback was used), in `[t][y][x]` order.
#[derive(Debug, Clone)]
pub struct FdResult<T> {
    pub field: GridField<T>,
    pub boundary: Vec<bool>,
}

/// Derivative of variable `var` along `kind.axis`.
pub fn fd_derivative<T: Scalar>(
    field: &GridField<T>,
    kind: StencilKind,
    var: usize,
) -> Result<FdResult<T>> {
    if var >= field.nvars() {
        return Err(Error::config(format!("variable index {var} out of range")));
    }
    let meta = field.meta();
    let axis = match kind.axis {
        GridAxis::T => &meta.t,
        GridAxis::X => &meta.x,
        GridAxis::Y => &meta.y,
    };
    if axis.len < kind.min_samples() {
        return Err(Error::StencilTooShort {
            axis: match kind.axis {
                GridAxis::T => "t",
                GridAxis::X => "x",
                GridAxis::Y => "y",
            },
            needed: kind.min_samples(),
            found: axis.len,
        });
    }
    let stencil = Stencil1d::new(kind.scheme, kind.order, axis.len, axis.step)?;
    let (nt, ny, nx, _) = field.dims();
    let mut out = Vec::with_capacity(nt * ny * nx);
    let mut mask = Vec::with_capacity(nt * ny * nx);
    for t in 0..nt {
        for y in 0..ny {
            for x in 0..nx {
                let (d, edge) = match kind.axis {
                    GridAxis::T => (stencil.apply_at(t, |j| field.get(j, y, x, var)), stencil.is_boundary(t)),
                    GridAxis::X => (stencil.apply_at(x, |j| field.get(t, y, j, var)), stencil.is_boundary(x)),
                    GridAxis::Y => (stencil.apply_at(y, |j| field.get(t, j, x, var)), stencil.is_boundary(y)),
                };
                out.push(d);
                mask.push(edge);
            }
        }
    }
    let name = derivative_name(&field.names()[var], kind);
    Ok(FdResult {
        field: GridField::new(meta.clone(), vec![name], out)?,
        boundary: mask,
    })
}

fn derivative_name(var: &str, kind: StencilKind) -> String {
    if kind.order == 1 {
        format!("d{var}/d{}", kind.axis)
    } else {
        format!("d2{var}/d{}2", kind.axis)
    }
}

/// Spatial derivatives of one frame (`[y][x][var]` layout).
#[derive(Debug, Clone)]
pub struct FrameStencils {
    pub ny: usize,
    pub nx: usize,
    pub nvars: usize,
    dx1: Stencil1d,
    dy1: Stencil1d,
    dx2: Stencil1d,
    dy2: Stencil1d,
}

/// Which spatial derivative of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialPartial {
    X,
    Y,
    XX,
    YY,
}

impl FrameStencils {
    pub fn new(scheme: Scheme, ny: usize, nx: usize, nvars: usize, dy: f64, dx: f64) -> Result<Self> {
        if nx < 3 || ny < 3 {
            return Err(Error::StencilTooShort {
                axis: if nx < 3 { "x" } else { "y" },
                needed: 3,
                found: nx.min(ny),
            });
        }
        Ok(FrameStencils {
            ny,
            nx,
            nvars,
            dx1: Stencil1d::new(scheme, 1, nx, dx)?,
            dy1: Stencil1d::new(scheme, 1, ny, dy)?,
            dx2: Stencil1d::new(Scheme::Central, 2, nx, dx)?,
            dy2: Stencil1d::new(Scheme::Central, 2, ny, dy)?,
        })
    }

    fn pick(&self, p: SpatialPartial) -> (&Stencil1d, bool) {
        match p {
            SpatialPartial::X => (&self.dx1, true),
            SpatialPartial::Y => (&self.dy1, false),
            SpatialPartial::XX => (&self.dx2, true),
            SpatialPartial::YY => (&self.dy2, false),
        }
    }

    /// True when any spatial stencil at `(y, x)` falls back to one-sided.
    pub fn is_boundary(&self, y: usize, x: usize) -> bool {
        self.dx1.is_boundary(x)
            || self.dx2.is_boundary(x)
            || self.dy1.is_boundary(y)
            || self.dy2.is_boundary(y)
    }

    /// Derivative of variable `v` over the whole frame, `[y][x]` order.
    pub fn apply<T: Scalar>(&self, frame: &[T], v: usize, p: SpatialPartial) -> Vec<T> {
        let (s, along_x) = self.pick(p);
        let (nx, h) = (self.nx, self.nvars);
        let mut out = Vec::with_capacity(self.ny * nx);
        for y in 0..self.ny {
            for x in 0..nx {
                out.push(if along_x {
                    s.apply_at(x, |j| frame[(y * nx + j) * h + v])
                } else {
                    s.apply_at(y, |j| frame[(j * nx + x) * h + v])
                });
            }
        }
        out
    }

    /// Adds `Dᵀ · adjoint` into `grad` (same layout as the frame).
    pub fn apply_transpose_into<T: Scalar>(
        &self,
        adjoint: &[T],
        v: usize,
        p: SpatialPartial,
        grad: &mut [T],
    ) {
        let (s, along_x) = self.pick(p);
        let (nx, h) = (self.nx, self.nvars);
        for y in 0..self.ny {
            for x in 0..nx {
                let a = adjoint[y * nx + x];
                if a == T::zero() {
                    continue;
                }
                if along_x {
                    s.scatter_at(x, a, |j, w| grad[(y * nx + j) * h + v] += w);
                } else {
                    s.scatter_at(y, a, |j, w| grad[(j * nx + x) * h + v] += w);
                }
            }
        }
    }
}

/// Time derivative at each predicted frame.
///
/// Frame `k` uses central differences when both neighbours exist; the last
/// history frame is the left neighbour of the first prediction and the final
/// prediction uses a backward difference. `predicted` holds `r` frames of
/// `frame_len` values back to back.
pub fn fd_time_of_prediction<T: Scalar>(
    last_history: &[T],
    predicted: &[T],
    frame_len: usize,
    dt: f64,
) -> Result<Vec<T>> {
    if frame_len == 0 || predicted.is_empty() || predicted.len() % frame_len != 0 {
        return Err(Error::config("time derivative needs at least one predicted frame"));
    }
    if last_history.len() != frame_len {
        return Err(Error::ShapeMismatch {
            op: "fd_time_of_prediction",
            left: vec![last_history.len()],
            right: vec![frame_len],
        });
    }
    let r = predicted.len() / frame_len;
    let frame = |k: isize| -> &[T] {
        if k < 0 {
            last_history
        } else {
            &predicted[k as usize * frame_len..(k as usize + 1) * frame_len]
        }
    };
    let mut out = Vec::with_capacity(predicted.len());
    for k in 0..r as isize {
        let left = frame(k - 1);
        if (k as usize) + 1 < r {
            let right = frame(k + 1);
            let c = T::lit(0.5 / dt);
            out.extend(right.iter().zip(left).map(|(&a, &b)| (a - b) * c));
        } else {
            let me = frame(k);
            let c = T::lit(1.0 / dt);
            out.extend(me.iter().zip(left).map(|(&a, &b)| (a - b) * c));
        }
    }
    Ok(out)
}

/// Adjoint of [`fd_time_of_prediction`] with respect to the predicted
/// frames: accumulates `∂(Σ adjoint·D)/∂predicted` into `grad`.
pub fn fd_time_of_prediction_adjoint<T: Scalar>(
    adjoint: &[T],
    frame_len: usize,
    dt: f64,
    grad: &mut [T],
) {
    let r = adjoint.len() / frame_len;
    let half = T::lit(0.5 / dt);
    let full = T::lit(1.0 / dt);
    for k in 0..r {
        let a = &adjoint[k * frame_len..(k + 1) * frame_len];
        if k + 1 < r {
            for (i, &g) in a.iter().enumerate() {
                grad[(k + 1) * frame_len + i] += g * half;
                if k > 0 {
                    grad[(k - 1) * frame_len + i] -= g * half;
                }
            }
        } else {
            for (i, &g) in a.iter().enumerate() {
                grad[k * frame_len + i] += g * full;
                if k > 0 {
                    grad[(k - 1) * frame_len + i] -= g * full;
                }
            }
        }
    }
}
