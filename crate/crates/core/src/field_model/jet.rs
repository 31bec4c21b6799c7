//! Input derivatives of a [`FieldNet`].
//!
//! Training needs `u`, `∂u/∂t`, `∂u/∂x`, ... as differentiable functions of
//! the parameters. They are propagated forward through the network as a
//! jet (value, first and second input derivatives) recorded on the tape:
//! for a hidden layer `a = tanh(z)`,
//!
//! ```text
//! a_i  = s ⊙ z_i
//! a_ij = s ⊙ (z_ij − 2 a ⊙ z_i ⊙ z_j),   s = 1 − a²
//! ```
//!
//! [`second_partial`] and [`input_gradient`] take the generic route of
//! differentiating the backward pass and serve as the reference.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{coords_tensor, Coord, FieldNet};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which derivative of a field variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Partial {
    Value,
    T,
    X,
    Y,
    TT,
    XX,
    YY,
    XY,
}

impl Partial {
    pub const ALL: [Partial; 8] = [
        Partial::Value,
        Partial::T,
        Partial::X,
        Partial::Y,
        Partial::TT,
        Partial::XX,
        Partial::YY,
        Partial::XY,
    ];

    /// Input axes differentiated, with `0 = x`, `1 = y`, `2 = t`.
    pub fn axes(self) -> &'static [usize] {
        match self {
            Partial::Value => &[],
            Partial::T => &[2],
            Partial::X => &[0],
            Partial::Y => &[1],
            Partial::TT => &[2, 2],
            Partial::XX => &[0, 0],
            Partial::YY => &[1, 1],
            Partial::XY => &[0, 1],
        }
    }

    pub fn order(self) -> usize {
        self.axes().len()
    }

    pub fn from_axes(axes: &[usize]) -> Option<Partial> {
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        Some(match sorted.as_slice() {
            [] => Partial::Value,
            [0] => Partial::X,
            [1] => Partial::Y,
            [2] => Partial::T,
            [0, 0] => Partial::XX,
            [1, 1] => Partial::YY,
            [2, 2] => Partial::TT,
            [0, 1] => Partial::XY,
            _ => return None,
        })
    }

    /// Text form for variable `var`: `u`, `du/dx`, `d2u/dx2`, `d2u/dxdy`.
    pub fn label(self, var: &str) -> String {
        match self {
            Partial::Value => var.to_string(),
            Partial::T => format!("d{var}/dt"),
            Partial::X => format!("d{var}/dx"),
            Partial::Y => format!("d{var}/dy"),
            Partial::TT => format!("d2{var}/dt2"),
            Partial::XX => format!("d2{var}/dx2"),
            Partial::YY => format!("d2{var}/dy2"),
            Partial::XY => format!("d2{var}/dxdy"),
        }
    }
}

/// Per-point values of selected derivatives of each variable, in physical
/// units.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeBundle<T> {
    names: Vec<String>,
    points: usize,
    entries: BTreeMap<(usize, Partial), Vec<T>>,
}

impl<T: Scalar> DerivativeBundle<T> {
    pub fn new(names: Vec<String>, points: usize) -> Self {
        DerivativeBundle {
            names,
            points,
            entries: BTreeMap::new(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn insert(&mut self, var: usize, partial: Partial, values: Vec<T>) -> Result<()> {
        if var >= self.names.len() {
            return Err(Error::config(format!("bundle has no variable #{var}")));
        }
        if values.len() != self.points {
            return Err(Error::ShapeMismatch {
                op: "bundle insert",
                left: vec![self.points],
                right: vec![values.len()],
            });
        }
        self.entries.insert((var, partial), values);
        Ok(())
    }

    pub fn get(&self, var: usize, partial: Partial) -> Option<&[T]> {
        self.entries.get(&(var, partial)).map(Vec::as_slice)
    }

    /// Like [`DerivativeBundle::get`] but failing with the missing entry's
    /// name.
    pub fn require(&self, var: usize, partial: Partial, term: &str) -> Result<&[T]> {
        self.get(var, partial).ok_or_else(|| Error::MissingDerivative {
            term: term.to_string(),
            derivative: partial.label(self.names.get(var).map(String::as_str).unwrap_or("?")),
        })
    }

    pub fn contains(&self, var: usize, partial: Partial) -> bool {
        self.entries.contains_key(&(var, partial))
    }

    pub fn keys(&self) -> impl Iterator<Item = (usize, Partial)> + '_ {
        self.entries.keys().copied()
    }

    /// Appends the points of `other`, which must carry the same entries.
    pub fn extend(&mut self, other: DerivativeBundle<T>) -> Result<()> {
        if other.names != self.names || other.entries.len() != self.entries.len() && self.points > 0 {
            return Err(Error::config("cannot concatenate bundles with different contents"));
        }
        if self.points == 0 {
            self.points = other.points;
            self.entries = other.entries;
            return Ok(());
        }
        for (key, values) in other.entries {
            let Some(mine) = self.entries.get_mut(&key) else {
                return Err(Error::config("cannot concatenate bundles with different contents"));
            };
            mine.extend(values);
        }
        self.points += other.points;
        Ok(())
    }
}

/// Set of input derivatives to propagate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JetRequest {
    pub first: [bool; 3],
    pub second: Vec<(usize, usize)>,
}

impl JetRequest {
    pub fn for_partials(partials: &[Partial]) -> Self {
        let mut req = JetRequest::default();
        for p in partials {
            match p.axes() {
                [] => {}
                [i] => req.first[*i] = true,
                [i, j] => {
                    req.first[*i] = true;
                    req.first[*j] = true;
                    if !req.second.contains(&(*i, *j)) {
                        req.second.push((*i, *j));
                    }
                }
                _ => unreachable!(),
            }
        }
        req
    }
}

/// Network parameters registered on one tape, one `(W, b)` pair per layer.
#[derive(Debug, Clone)]
pub struct NetVars {
    pub layers: Vec<(Var, Var)>,
}

impl NetVars {
    /// All parameter variables in flat-vector order.
    pub fn all(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Concatenates per-variable gradients back into flat-vector order.
    pub fn flatten<T: Scalar>(grads: &[Tensor<T>]) -> Vec<T> {
        grads.iter().flat_map(|g| g.data().iter().copied()).collect()
    }
}

/// Outputs of a network and their input derivatives, normalized units.
#[derive(Debug, Clone)]
pub struct Jet {
    pub value: Var,
    pub first: [Option<Var>; 3],
    pub second: Vec<((usize, usize), Var)>,
}

impl Jet {
    pub fn second(&self, i: usize, j: usize) -> Option<Var> {
        let key = (i.min(j), i.max(j));
        self.second
            .iter()
            .find(|((a, b), _)| (*a.min(b), *a.max(b)) == key)
            .map(|&(_, v)| v)
    }

    pub fn partial(&self, p: Partial) -> Option<Var> {
        match p.axes() {
            [] => Some(self.value),
            [i] => self.first[*i],
            [i, j] => self.second(*i, *j),
            _ => None,
        }
    }
}

impl<T: Scalar> FieldNet<T> {
    /// Places the parameters on `tape`, as differentiable leaves when
    /// `trainable`, else as constants.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> Result<NetVars> {
        let mut layers = Vec::with_capacity(self.layer_count());
        for l in 0..self.layer_count() {
            let (wr, br) = self.layer_ranges(l);
            let w = Tensor::matrix(self.widths[l], self.widths[l + 1], self.params[wr].to_vec())?;
            let b = Tensor::vector(self.params[br].to_vec());
            let (w, b) = if trainable {
                (tape.leaf(w), tape.leaf(b))
            } else {
                (tape.constant(w), tape.constant(b))
            };
            layers.push((w, b));
        }
        Ok(NetVars { layers })
    }

    /// Records the plain forward pass; `input` is `batch × 3`.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, vars: &NetVars, input: Var) -> Result<Var> {
        let mut a = input;
        let last = vars.layers.len() - 1;
        for (l, &(w, b)) in vars.layers.iter().enumerate() {
            let z = tape.matmul(a, w)?;
            let z = tape.add_row(z, b)?;
            a = if l == last { z } else { tape.tanh(z)? };
        }
        Ok(a)
    }

    /// Records the forward jet for `req` on `tape`.
    pub fn jet_on_tape(&self, tape: &mut Tape<T>, vars: &NetVars, input: Var, req: &JetRequest) -> Result<Jet> {
        let rows = tape.value(input).rows();
        let last = vars.layers.len() - 1;
        let mut a = input;
        let mut a_first: [Option<Var>; 3] = [None; 3];
        let mut a_second: Vec<((usize, usize), Option<Var>)> = req.second.iter().map(|&k| (k, None)).collect();

        for (l, &(w, b)) in vars.layers.iter().enumerate() {
            let z = tape.matmul(a, w)?;
            let z = tape.add_row(z, b)?;
            let mut z_first: [Option<Var>; 3] = [None; 3];
            for i in 0..3 {
                if !req.first[i] {
                    continue;
                }
                z_first[i] = Some(if l == 0 {
                    let mut e = Tensor::zeros(&[rows, 3]);
                    for r in 0..rows {
                        e.data_mut()[r * 3 + i] = T::one();
                    }
                    let e = tape.constant(e);
                    tape.matmul(e, w)?
                } else {
                    let ai = a_first[i].expect("requested first derivative");
                    tape.matmul(ai, w)?
                });
            }
            let mut z_second = Vec::with_capacity(a_second.len());
            for &(key, aij) in &a_second {
                let zij = match aij {
                    Some(v) => Some(tape.matmul(v, w)?),
                    None => None,
                };
                z_second.push((key, zij));
            }

            if l == last {
                let width = tape.value(z).cols();
                let mut second = Vec::with_capacity(z_second.len());
                for (key, zij) in z_second {
                    let v = match zij {
                        Some(v) => v,
                        None => tape.constant(Tensor::zeros(&[rows, width])),
                    };
                    second.push((key, v));
                }
                return Ok(Jet {
                    value: z,
                    first: z_first,
                    second,
                });
            }

            let act = tape.tanh(z)?;
            let sq = tape.square(act)?;
            let s = tape.scale_shift(sq, -T::one(), T::one())?;
            for i in 0..3 {
                a_first[i] = match z_first[i] {
                    Some(zi) => Some(tape.mul(s, zi)?),
                    None => None,
                };
            }
            for (slot, ((i, j), zij)) in a_second.iter_mut().zip(z_second) {
                let zi = z_first[i].expect("first derivative requested with second");
                let zj = z_first[j].expect("first derivative requested with second");
                let prod = if i == j { tape.square(zi)? } else { tape.mul(zi, zj)? };
                let with_a = tape.mul(act, prod)?;
                let inner = match zij {
                    Some(zij) => {
                        let twice = tape.scale(with_a, T::lit(2.0))?;
                        tape.sub(zij, twice)?
                    }
                    None => tape.scale(with_a, T::lit(-2.0))?,
                };
                slot.1 = Some(tape.mul(s, inner)?);
            }
            a = act;
        }
        unreachable!("the loop returns at the output layer")
    }

    /// Factor converting a normalized derivative along `axes` of output `c`
    /// into physical units.
    pub fn derivative_factor(&self, c: usize, axes: &[usize]) -> T {
        let mut f = self.norm.outputs[c].std;
        for &a in axes {
            f /= self.norm.axis(a).scale;
        }
        T::lit(f)
    }
}

const BUNDLE_CHUNK: usize = 512;

/// Values and input derivatives of every output at `coords`, physical units.
pub fn derivative_bundle<T: Scalar>(net: &FieldNet<T>, coords: &[Coord], partials: &[Partial]) -> Result<DerivativeBundle<T>> {
    let req = JetRequest::for_partials(partials);
    let h = net.output_width();
    let chunks: Vec<Result<Vec<Vec<T>>>> = coords
        .par_chunks(BUNDLE_CHUNK)
        .map(|chunk| {
            let mut tape = Tape::new();
            let vars = net.register(&mut tape, false)?;
            let input = tape.constant(coords_tensor(chunk));
            let jet = net.jet_on_tape(&mut tape, &vars, input, &req)?;
            let mut out = Vec::with_capacity(partials.len() * h);
            for &p in partials {
                let var = jet.partial(p).expect("requested partial is in the jet");
                let values = tape.value(var);
                for c in 0..h {
                    let factor = net.derivative_factor(c, p.axes());
                    let shift = if p == Partial::Value {
                        T::lit(net.norm.outputs[c].mean)
                    } else {
                        T::zero()
                    };
                    out.push((0..chunk.len()).map(|r| shift + factor * values.get2(r, c)).collect());
                }
            }
            Ok(out)
        })
        .collect();

    let mut columns: Vec<Vec<T>> = vec![Vec::with_capacity(coords.len()); partials.len() * h];
    for chunk in chunks {
        for (col, part) in columns.iter_mut().zip(chunk?) {
            col.extend(part);
        }
    }
    let mut bundle = DerivativeBundle::new(net.norm.names(), coords.len());
    let mut cols = columns.into_iter();
    for &p in partials {
        for c in 0..h {
            bundle.insert(c, p, cols.next().expect("one column per entry"))?;
        }
    }
    for v in bundle.entries.values() {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "derivative_bundle" });
        }
    }
    Ok(bundle)
}

fn one_hot<T: Scalar>(len: usize, at: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[1, len]);
    t.data_mut()[at] = T::one();
    t
}

/// Physical-unit gradient `[∂/∂x, ∂/∂y, ∂/∂t]` of every output channel,
/// by reverse mode.
pub fn input_gradient<T: Scalar>(net: &FieldNet<T>, coord: Coord) -> Result<Vec<[T; 3]>> {
    let mut out = Vec::with_capacity(net.output_width());
    for c in 0..net.output_width() {
        let mut tape = Tape::new();
        let vars = net.register(&mut tape, false)?;
        let x = tape.leaf(coords_tensor(&[coord]));
        let y = net.forward_on_tape(&mut tape, &vars, x)?;
        let sel = tape.constant(one_hot(net.output_width(), c));
        let picked = tape.mul(y, sel)?;
        let s = tape.sum(picked)?;
        let g = tape.grad(s, &[x])?.remove(0);
        let mut row = [T::zero(); 3];
        for (a, slot) in row.iter_mut().enumerate() {
            *slot = net.derivative_factor(c, &[a]) * g.data()[a];
        }
        out.push(row);
    }
    Ok(out)
}

/// `∂²(output)/∂input_i∂input_j` for each output channel, physical units,
/// by differentiating the recorded backward pass. Axes: `0 = x`, `1 = y`,
/// `2 = t`.
pub fn second_partial<T: Scalar>(net: &FieldNet<T>, coord: Coord, axis_i: usize, axis_j: usize) -> Result<Vec<T>> {
    for axis in [axis_i, axis_j] {
        if axis > 2 {
            return Err(Error::AxisOutOfRange(axis));
        }
    }
    let mut out = Vec::with_capacity(net.output_width());
    for c in 0..net.output_width() {
        let mut tape = Tape::new();
        let vars = net.register(&mut tape, false)?;
        let x = tape.leaf(coords_tensor(&[coord]));
        let y = net.forward_on_tape(&mut tape, &vars, x)?;
        let sel = tape.constant(one_hot(net.output_width(), c));
        let picked = tape.mul(y, sel)?;
        let s = tape.sum(picked)?;
        let g = tape.grad_taped(s, &[x])?.remove(0);
        let sel_i = tape.constant(one_hot(3, axis_i));
        let gi = tape.mul(g, sel_i)?;
        let gi = tape.sum(gi)?;
        let h = tape.grad(gi, &[x])?.remove(0);
        out.push(net.derivative_factor(c, &[axis_i, axis_j]) * h.data()[axis_j]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_model::{init_fieldnet, NormalizationSpec};

    fn net() -> FieldNet<f64> {
        init_fieldnet(&[3, 7, 6, 2], 11).unwrap()
    }

    fn value(net: &FieldNet<f64>, c: Coord, ch: usize) -> f64 {
        net.predict(&[c]).unwrap().get2(0, ch)
    }

    #[test]
    fn bundle_matches_reverse_mode_references() {
        let net = net();
        let coords = [Coord::new(0.3, -0.2, 0.5), Coord::new(-0.7, 0.1, -0.4)];
        let b = derivative_bundle(&net, &coords, &Partial::ALL).unwrap();
        for (k, &c) in coords.iter().enumerate() {
            let g = input_gradient(&net, c).unwrap();
            for ch in 0..2 {
                assert!((b.get(ch, Partial::Value).unwrap()[k] - value(&net, c, ch)).abs() < 1e-12);
                assert!((b.get(ch, Partial::X).unwrap()[k] - g[ch][0]).abs() < 1e-12);
                assert!((b.get(ch, Partial::Y).unwrap()[k] - g[ch][1]).abs() < 1e-12);
                assert!((b.get(ch, Partial::T).unwrap()[k] - g[ch][2]).abs() < 1e-12);
            }
            for p in [Partial::XX, Partial::YY, Partial::TT, Partial::XY] {
                let axes = p.axes();
                let sp = second_partial(&net, c, axes[0], axes[1]).unwrap();
                for ch in 0..2 {
                    assert!((b.get(ch, p).unwrap()[k] - sp[ch]).abs() < 1e-12, "{p:?}");
                }
            }
        }
    }

    #[test]
    fn second_partial_matches_finite_differences() {
        let net = net();
        let c = Coord::new(0.2, 0.4, -0.1);
        let h = 1e-3;
        let shift = |c: Coord, a: usize, d: f64| {
            let mut v = [c.x, c.y, c.t];
            v[a] += d;
            Coord::new(v[0], v[1], v[2])
        };
        for i in 0..3 {
            for j in 0..3 {
                let sp = second_partial(&net, c, i, j).unwrap();
                for ch in 0..2 {
                    let f = |di: f64, dj: f64| value(&net, shift(shift(c, i, di), j, dj), ch);
                    let fd = (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4.0 * h * h);
                    let scale = sp[ch].abs().max(1e-2);
                    assert!((sp[ch] - fd).abs() / scale < 1e-3, "({i},{j}) {} vs {fd}", sp[ch]);
                }
                let sym = second_partial(&net, c, j, i).unwrap();
                assert!((sp[0] - sym[0]).abs() < 1e-8);
            }
        }
        assert!(matches!(second_partial(&net, c, 0, 3), Err(Error::AxisOutOfRange(3))));
    }

    #[test]
    fn affine_net_has_no_curvature() {
        let net = init_fieldnet::<f64>(&[3, 2], 5).unwrap();
        let c = Coord::new(0.1, 0.2, 0.3);
        let b = derivative_bundle(&net, &[c], &[Partial::XX, Partial::YY, Partial::XY]).unwrap();
        for p in [Partial::XX, Partial::YY, Partial::XY] {
            assert!(b.get(0, p).unwrap()[0].abs() < 1e-8);
        }
        assert!(second_partial(&net, c, 0, 0).unwrap()[0].abs() < 1e-8);
    }

    #[test]
    fn doubling_axis_scale_halves_the_derivative() {
        let base = init_fieldnet::<f64>(&[3, 5, 1], 2).unwrap();
        let mut spec = NormalizationSpec::identity(&["u".into()]);
        let c = Coord::new(0.3, 0.3, 0.3);
        let a = derivative_bundle(&base, &[c], &[Partial::X, Partial::XX]).unwrap();
        spec.x.scale = 2.0;
        let scaled = base.clone().with_normalization(spec).unwrap();
        let b = derivative_bundle(&scaled, &[c], &[Partial::X, Partial::XX]).unwrap();
        assert!((b.get(0, Partial::X).unwrap()[0] * 2.0 - a.get(0, Partial::X).unwrap()[0]).abs() < 1e-14);
        assert!((b.get(0, Partial::XX).unwrap()[0] * 4.0 - a.get(0, Partial::XX).unwrap()[0]).abs() < 1e-14);
    }

    #[test]
    fn chunked_bundle_matches_single_points() {
        let net = net();
        let coords: Vec<Coord> = (0..BUNDLE_CHUNK + 7)
            .map(|i| Coord::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos(), 0.001 * i as f64))
            .collect();
        let all = derivative_bundle(&net, &coords, &[Partial::T, Partial::XX]).unwrap();
        for k in [0, BUNDLE_CHUNK - 1, BUNDLE_CHUNK, BUNDLE_CHUNK + 6] {
            let one = derivative_bundle(&net, &coords[k..k + 1], &[Partial::T, Partial::XX]).unwrap();
            assert!((one.get(1, Partial::XX).unwrap()[0] - all.get(1, Partial::XX).unwrap()[k]).abs() < 1e-12);
        }
    }
}
