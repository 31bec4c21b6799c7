//! Linear PDE models over a library of derivative terms.
//!
//! Each governed variable `u` gets an equation
//!
//! ```text
//! ∂ᵏu/∂tᵏ = Σᵢ ξᵢ φᵢ(u) + Q(x, y, t),   k ∈ {1, 2}
//! ```
//!
//! where every `φᵢ` is a product of at most two factors, each a variable or
//! one of its spatial derivatives up to second order.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_model::{DerivativeBundle, Partial};
use crate::scalar::Scalar;

/// One factor of a term: a variable or one of its spatial derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Factor {
    pub var: usize,
    pub partial: Partial,
}

impl Factor {
    pub fn new(var: usize, partial: Partial) -> Result<Self> {
        if matches!(partial, Partial::T | Partial::TT) {
            return Err(Error::config("library factors cannot involve time derivatives"));
        }
        Ok(Factor { var, partial })
    }

    fn sort_key(&self) -> (usize, Partial, usize) {
        (self.partial.order(), self.partial, self.var)
    }
}

/// Product of up to two factors; the empty product is the constant term.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TermSpec {
    factors: Vec<Factor>,
}

impl TermSpec {
    pub fn constant() -> Self {
        TermSpec { factors: Vec::new() }
    }

    pub fn single(var: usize, partial: Partial) -> Result<Self> {
        Ok(TermSpec {
            factors: vec![Factor::new(var, partial)?],
        })
    }

    pub fn product(a: Factor, b: Factor) -> Self {
        let mut factors = vec![a, b];
        factors.sort_by_key(Factor::sort_key);
        TermSpec { factors }
    }

    pub fn from_factors(mut factors: Vec<Factor>) -> Result<Self> {
        if factors.len() > 2 {
            return Err(Error::config("terms have at most two factors"));
        }
        for f in &factors {
            Factor::new(f.var, f.partial)?;
        }
        factors.sort_by_key(Factor::sort_key);
        Ok(TermSpec { factors })
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn is_constant(&self) -> bool {
        self.factors.is_empty()
    }

    /// Canonical text such as `1`, `u`, `d2u/dx2` or `U10*dT/dx`.
    pub fn label(&self, names: &[String]) -> String {
        if self.factors.is_empty() {
            return "1".into();
        }
        self.factors
            .iter()
            .map(|f| f.partial.label(names.get(f.var).map(String::as_str).unwrap_or("?")))
            .collect::<Vec<_>>()
            .join("*")
    }

    /// Parses the canonical text form against a variable list.
    pub fn parse(text: &str, names: &[String]) -> Result<Self> {
        let text = text.trim();
        if text == "1" {
            return Ok(TermSpec::constant());
        }
        let mut factors = Vec::new();
        let mut missing = Vec::new();
        for part in text.split('*') {
            let (name, partial) = parse_factor(part.trim())?;
            match names.iter().position(|n| n == name) {
                Some(var) => factors.push(Factor::new(var, partial)?),
                None => missing.push(name.to_string()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingVariable(missing));
        }
        TermSpec::from_factors(factors)
    }

    /// Evaluates the term at every point of `bundle`.
    pub fn evaluate<T: Scalar>(&self, bundle: &DerivativeBundle<T>, names: &[String]) -> Result<Vec<T>> {
        let label = self.label(names);
        let mut out = vec![T::one(); bundle.points()];
        for f in &self.factors {
            let values = bundle.require(f.var, f.partial, &label)?;
            for (o, &v) in out.iter_mut().zip(values) {
                *o *= v;
            }
        }
        Ok(out)
    }
}

fn parse_factor(s: &str) -> Result<(&str, Partial)> {
    let bad = || Error::config(format!("cannot parse term factor `{s}`"));
    if s.is_empty() {
        return Err(bad());
    }
    let second = [("/dx2", Partial::XX), ("/dy2", Partial::YY), ("/dxdy", Partial::XY)];
    for (suffix, p) in second {
        if let Some(body) = s.strip_suffix(suffix) {
            return body.strip_prefix("d2").filter(|n| !n.is_empty()).map(|n| (n, p)).ok_or_else(bad);
        }
    }
    for (suffix, p) in [("/dx", Partial::X), ("/dy", Partial::Y)] {
        if let Some(body) = s.strip_suffix(suffix) {
            return body.strip_prefix('d').filter(|n| !n.is_empty()).map(|n| (n, p)).ok_or_else(bad);
        }
    }
    if s.contains('/') {
        return Err(bad());
    }
    Ok((s, Partial::Value))
}

/// Structure of one equation: governed variable, time order and terms.
#[derive(Debug, Clone, PartialEq)]
pub struct EquationSpec {
    pub var: usize,
    pub target_order: u8,
    pub terms: Vec<TermSpec>,
}

impl EquationSpec {
    pub fn target_partial(&self) -> Partial {
        if self.target_order == 2 {
            Partial::TT
        } else {
            Partial::T
        }
    }

    /// Every bundle entry the equation reads, target included.
    pub fn required_partials(&self) -> Vec<(usize, Partial)> {
        let mut out = vec![(self.var, Partial::Value), (self.var, self.target_partial())];
        for t in &self.terms {
            for f in t.factors() {
                if !out.contains(&(f.var, f.partial)) {
                    out.push((f.var, f.partial));
                }
            }
        }
        out
    }
}

/// Per-equation adjustments to [`default_library`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquationOverride {
    pub variable: String,
    /// Velocity pair `(along x, along y)` used for advection products.
    #[serde(default)]
    pub advectors: Option<(String, String)>,
    #[serde(default)]
    pub target_order: Option<u8>,
    /// Full replacement term list in text form.
    #[serde(default)]
    pub terms: Option<Vec<String>>,
}

fn lower(s: &str) -> String {
    s.to_ascii_lowercase()
}

fn is_pressure_like(name: &str) -> bool {
    matches!(lower(name).as_str(), "p" | "pressure" | "msl" | "sp" | "mslp" | "z" | "geopotential")
}

fn is_temperature_like(name: &str) -> bool {
    matches!(lower(name).as_str(), "t" | "t2m" | "temperature" | "temp")
}

fn find(names: &[String], wanted: &str) -> Option<usize> {
    names.iter().position(|n| lower(n) == wanted)
}

/// Velocity pair for a variable, by naming convention: temperature prefers
/// near-surface winds (`u10`, `v10`); humidity and the rest prefer `u`, `v`.
fn inferred_advectors(names: &[String], var: &str) -> Option<(usize, usize)> {
    let pairs: &[(&str, &str)] = if is_temperature_like(var) {
        &[("u10", "v10"), ("u", "v")]
    } else {
        &[("u", "v"), ("u10", "v10")]
    };
    pairs
        .iter()
        .find_map(|(a, b)| Some((find(names, a)?, find(names, b)?)))
}

/// Library for every variable in `names`.
///
/// Each equation gets `1, u, ∂u/∂x, ∂u/∂y, ∂²u/∂x², ∂²u/∂y²` plus two
/// advection products: with a velocity pair `(U, V)` available these are
/// `U·∂u/∂x` and `V·∂u/∂y`, otherwise `u·∂u/∂x` and `u·∂u/∂y`.
/// Pressure-like variables target `∂²u/∂t²`, the rest `∂u/∂t`.
pub fn default_library(names: &[String], overrides: &[EquationOverride]) -> Result<Vec<EquationSpec>> {
    let mut by_var: HashMap<&str, &EquationOverride> = HashMap::new();
    for o in overrides {
        if !names.contains(&o.variable) {
            return Err(Error::MissingVariable(vec![o.variable.clone()]));
        }
        by_var.insert(o.variable.as_str(), o);
    }
    let mut out = Vec::with_capacity(names.len());
    for (var, name) in names.iter().enumerate() {
        let ov = by_var.get(name.as_str());
        let target_order = match ov.and_then(|o| o.target_order) {
            Some(k @ (1 | 2)) => k,
            Some(k) => return Err(Error::config(format!("target order must be 1 or 2, got {k}"))),
            None if is_pressure_like(name) => 2,
            None => 1,
        };
        let terms = if let Some(texts) = ov.and_then(|o| o.terms.as_ref()) {
            texts.iter().map(|t| TermSpec::parse(t, names)).collect::<Result<Vec<_>>>()?
        } else {
            let advectors = match ov.and_then(|o| o.advectors.as_ref()) {
                Some((a, b)) => {
                    let missing: Vec<String> = [a, b].into_iter().filter(|n| !names.contains(n)).cloned().collect();
                    if !missing.is_empty() {
                        return Err(Error::MissingVariable(missing));
                    }
                    let ia = names.iter().position(|n| n == a).expect("checked");
                    let ib = names.iter().position(|n| n == b).expect("checked");
                    Some((ia, ib))
                }
                None => inferred_advectors(names, name),
            };
            let (ax, ay) = advectors.unwrap_or((var, var));
            let f = |p| Factor { var, partial: p };
            vec![
                TermSpec::constant(),
                TermSpec::single(var, Partial::Value)?,
                TermSpec::single(var, Partial::X)?,
                TermSpec::single(var, Partial::Y)?,
                TermSpec::single(var, Partial::XX)?,
                TermSpec::single(var, Partial::YY)?,
                TermSpec::product(Factor { var: ax, partial: Partial::Value }, f(Partial::X)),
                TermSpec::product(Factor { var: ay, partial: Partial::Value }, f(Partial::Y)),
            ]
        };
        out.push(EquationSpec {
            var,
            target_order,
            terms,
        });
    }
    Ok(out)
}

/// Evaluated library columns and target for one equation, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TermMatrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
    pub target: Vec<T>,
}

impl<T: Scalar> TermMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>, target: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols || target.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "term matrix",
                left: vec![rows, cols],
                right: vec![data.len(), target.len()],
            });
        }
        Ok(TermMatrix { rows, cols, data, target })
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// `M·ξ`.
    pub fn apply(&self, xi: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| (0..self.cols).map(|c| self.get(r, c).f64() * xi[c]).sum())
            .collect()
    }
}

/// Evaluates `eq`'s library at every bundle point, plus its target column.
pub fn build_term_matrix<T: Scalar>(bundle: &DerivativeBundle<T>, eq: &EquationSpec) -> Result<TermMatrix<T>> {
    let names = bundle.names();
    let target_label = eq.target_partial().label(names.get(eq.var).map(String::as_str).unwrap_or("?"));
    let target = bundle.require(eq.var, eq.target_partial(), &target_label)?.to_vec();
    let rows = bundle.points();
    let cols = eq.terms.len();
    let columns = eq
        .terms
        .iter()
        .map(|t| t.evaluate(bundle, names))
        .collect::<Result<Vec<_>>>()?;
    let mut data = vec![T::zero(); rows * cols];
    for (c, col) in columns.iter().enumerate() {
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "build_term_matrix" });
        }
        for (r, &v) in col.iter().enumerate() {
            data[r * cols + c] = v;
        }
    }
    TermMatrix::new(rows, cols, data, target)
}

/// Options for [`fit_coefficients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub lambda: f64,
    /// Sequentially thresholded refits: coefficients smaller in magnitude
    /// are zeroed and the rest refitted. Off by default.
    pub threshold: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            lambda: DEFAULT_LAMBDA,
            threshold: None,
        }
    }
}

pub const DEFAULT_LAMBDA: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub coefficients: Vec<f64>,
    pub residual_rms: f64,
}

/// Ridge least squares `argmin ‖b − Mξ‖² + λ‖ξ‖²` via Householder QR of
/// the stacked system `[M; √λ I]`.
pub fn fit_coefficients<T: Scalar>(m: &TermMatrix<T>, opts: FitOptions) -> Result<Fit> {
    if !(opts.lambda >= 0.0) || !opts.lambda.is_finite() {
        return Err(Error::config("ridge penalty must be a finite value ≥ 0"));
    }
    if m.rows < m.cols {
        return Err(Error::config(format!(
            "need at least as many points as terms ({} < {})",
            m.rows, m.cols
        )));
    }
    let active: Vec<usize> = (0..m.cols).collect();
    let mut xi = solve_subset(m, &active, opts.lambda)?;
    if let Some(thr) = opts.threshold {
        for _ in 0..10 {
            let keep: Vec<usize> = (0..m.cols).filter(|&c| xi[c].abs() >= thr).collect();
            if keep.len() == (0..m.cols).filter(|&c| xi[c] != 0.0).count() {
                break;
            }
            xi = if keep.is_empty() {
                vec![0.0; m.cols]
            } else {
                solve_subset(m, &keep, opts.lambda)?
            };
        }
    }
    let fitted = m.apply(&xi);
    let ss: f64 = fitted.iter().zip(&m.target).map(|(f, t)| (t.f64() - f).powi(2)).sum();
    Ok(Fit {
        coefficients: xi,
        residual_rms: (ss / m.rows.max(1) as f64).sqrt(),
    })
}

fn solve_subset<T: Scalar>(m: &TermMatrix<T>, cols: &[usize], lambda: f64) -> Result<Vec<f64>> {
    let p = cols.len();
    let rows = m.rows + if lambda > 0.0 { p } else { 0 };
    // Column-major augmented matrix and right-hand side.
    let mut a = vec![0.0; rows * p];
    for (j, &c) in cols.iter().enumerate() {
        for r in 0..m.rows {
            a[j * rows + r] = m.get(r, c).f64();
        }
        if lambda > 0.0 {
            a[j * rows + m.rows + j] = lambda.sqrt();
        }
    }
    let mut b: Vec<f64> = m.target.iter().map(|v| v.f64()).collect();
    b.resize(rows, 0.0);

    let max_norm = (0..p)
        .map(|j| a[j * rows..(j + 1) * rows].iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let tol = max_norm * rows as f64 * f64::EPSILON;
    let mut diag = vec![0.0; p];
    for k in 0..p {
        let col = &mut a[k * rows..(k + 1) * rows];
        let norm = col[k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= tol {
            return Err(Error::RankDeficient { column: cols[k] });
        }
        let alpha = if col[k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = col[k..].to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        diag[k] = alpha;
        if vnorm2 == 0.0 {
            continue;
        }
        for j in k + 1..p {
            let cj = &mut a[j * rows + k..(j + 1) * rows];
            let dot: f64 = v.iter().zip(cj.iter()).map(|(x, y)| x * y).sum();
            let f = 2.0 * dot / vnorm2;
            for (y, x) in cj.iter_mut().zip(&v) {
                *y -= f * x;
            }
        }
        let dot: f64 = v.iter().zip(&b[k..]).map(|(x, y)| x * y).sum();
        let f = 2.0 * dot / vnorm2;
        for (y, x) in b[k..].iter_mut().zip(&v) {
            *y -= f * x;
        }
    }
    let mut sol = vec![0.0; p];
    for k in (0..p).rev() {
        let mut s = b[k];
        for j in k + 1..p {
            s -= a[j * rows + k] * sol[j];
        }
        sol[k] = s / diag[k];
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "fit_coefficients" });
    }
    let mut full = vec![0.0; m.cols];
    for (j, &c) in cols.iter().enumerate() {
        full[c] = sol[j];
    }
    Ok(full)
}

/// One fitted equation.
#[derive(Debug, Clone, PartialEq)]
pub struct Equation {
    pub spec: EquationSpec,
    pub coefficients: Vec<f64>,
    pub latent_force: bool,
    pub residual_rms: f64,
}

/// Equations for every governed variable, with the ridge penalty used.
#[derive(Debug, Clone, PartialEq)]
pub struct EquationSystem {
    pub names: Vec<String>,
    pub equations: Vec<Equation>,
    pub lambda: f64,
}

impl EquationSystem {
    /// All coefficients zero.
    pub fn unfitted(names: Vec<String>, specs: Vec<EquationSpec>, latent_force: bool) -> Self {
        let equations = specs
            .into_iter()
            .map(|spec| Equation {
                coefficients: vec![0.0; spec.terms.len()],
                spec,
                latent_force,
                residual_rms: 0.0,
            })
            .collect();
        EquationSystem {
            names,
            equations,
            lambda: DEFAULT_LAMBDA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for eq in &self.equations {
            if eq.coefficients.len() != eq.spec.terms.len() {
                return Err(Error::malformed(format!(
                    "equation for `{}` has {} terms but {} coefficients",
                    self.names.get(eq.spec.var).map(String::as_str).unwrap_or("?"),
                    eq.spec.terms.len(),
                    eq.coefficients.len()
                )));
            }
            if eq.coefficients.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite { op: "equation coefficients" });
            }
            if eq.spec.var >= self.names.len() {
                return Err(Error::malformed("equation refers to an unknown variable"));
            }
        }
        Ok(())
    }

    pub fn latent_force_enabled(&self) -> bool {
        self.equations.iter().any(|e| e.latent_force)
    }

    /// Every bundle entry needed to evaluate the residuals.
    pub fn required_partials(&self) -> Vec<(usize, Partial)> {
        let mut out = Vec::new();
        for eq in &self.equations {
            for k in eq.spec.required_partials() {
                if !out.contains(&k) {
                    out.push(k);
                }
            }
        }
        out
    }

    /// Distinct partials needed, regardless of variable.
    pub fn required_partial_kinds(&self) -> Vec<Partial> {
        let mut out: Vec<Partial> = Vec::new();
        for (_, p) in self.required_partials() {
            if !out.contains(&p) {
                out.push(p);
            }
        }
        out.sort();
        out
    }

    /// Refits every equation's coefficients from `bundle`. With a latent
    /// force, `q_values` (one column per equation) is subtracted from the
    /// target first.
    pub fn refit<T: Scalar>(&mut self, bundle: &DerivativeBundle<T>, q_values: Option<&[Vec<T>]>, opts: FitOptions) -> Result<()> {
        for (k, eq) in self.equations.iter_mut().enumerate() {
            let mut m = build_term_matrix(bundle, &eq.spec)?;
            if eq.latent_force {
                if let Some(q) = q_values {
                    let q = q.get(k).ok_or_else(|| Error::config("missing latent force column"))?;
                    for (t, &qv) in m.target.iter_mut().zip(q) {
                        *t -= qv;
                    }
                }
            }
            let fit = fit_coefficients(&m, opts)?;
            eq.coefficients = fit.coefficients;
            eq.residual_rms = fit.residual_rms;
        }
        self.lambda = opts.lambda;
        Ok(())
    }

    /// Coefficient of the term with the given text, if present.
    pub fn coefficient(&self, var: &str, term: &str) -> Option<f64> {
        let v = self.names.iter().position(|n| n == var)?;
        let eq = self.equations.iter().find(|e| e.spec.var == v)?;
        eq.spec
            .terms
            .iter()
            .position(|t| t.label(&self.names) == term)
            .map(|i| eq.coefficients[i])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.wire())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let wire: SystemWire = serde_json::from_str(text)?;
        let mut equations = Vec::with_capacity(wire.equations.len());
        for e in wire.equations {
            let var = wire
                .variables
                .iter()
                .position(|n| *n == e.variable)
                .ok_or_else(|| Error::MissingVariable(vec![e.variable.clone()]))?;
            let terms = e
                .terms
                .iter()
                .map(|t| TermSpec::parse(t, &wire.variables))
                .collect::<Result<Vec<_>>>()?;
            if e.target_order != 1 && e.target_order != 2 {
                return Err(Error::malformed(format!("target order {} not supported", e.target_order)));
            }
            equations.push(Equation {
                spec: EquationSpec {
                    var,
                    target_order: e.target_order,
                    terms,
                },
                coefficients: e.coefficients,
                latent_force: e.latent_force,
                residual_rms: e.residual_rms,
            });
        }
        let sys = EquationSystem {
            names: wire.variables,
            equations,
            lambda: wire.lambda,
        };
        sys.validate()?;
        Ok(sys)
    }

    fn wire(&self) -> SystemWire {
        SystemWire {
            variables: self.names.clone(),
            lambda: self.lambda,
            equations: self
                .equations
                .iter()
                .map(|e| EquationWire {
                    variable: self.names[e.spec.var].clone(),
                    target: e.spec.target_partial().label(&self.names[e.spec.var]),
                    target_order: e.spec.target_order,
                    terms: e.spec.terms.iter().map(|t| t.label(&self.names)).collect(),
                    coefficients: e.coefficients.clone(),
                    latent_force: e.latent_force,
                    residual_rms: e.residual_rms,
                })
                .collect(),
        }
    }
}

impl fmt::Display for EquationSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for eq in &self.equations {
            let name = &self.names[eq.spec.var];
            write!(f, "{} =", eq.spec.target_partial().label(name))?;
            let mut first = true;
            for (t, c) in eq.spec.terms.iter().zip(&eq.coefficients) {
                if *c == 0.0 {
                    continue;
                }
                let sign = if *c < 0.0 { "-" } else if first { "" } else { "+" };
                write!(f, " {sign}{:.4}·{}", c.abs(), t.label(&self.names))?;
                first = false;
            }
            if eq.latent_force {
                write!(f, " + Q_{name}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemWire {
    variables: Vec<String>,
    lambda: f64,
    equations: Vec<EquationWire>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EquationWire {
    variable: String,
    target: String,
    target_order: u8,
    terms: Vec<String>,
    coefficients: Vec<f64>,
    latent_force: bool,
    residual_rms: f64,
}

/// `target − Σ φᵢξᵢ − Q` per equation and point.
pub fn pde_residual<T: Scalar>(bundle: &DerivativeBundle<T>, system: &EquationSystem, q_values: Option<&[Vec<T>]>) -> Result<Vec<Vec<T>>> {
    if bundle.names() != system.names.as_slice() {
        return Err(Error::config(format!(
            "bundle variables {:?} do not match the system's {:?}",
            bundle.names(),
            system.names
        )));
    }
    let wants_q = system.latent_force_enabled();
    match (wants_q, q_values) {
        (true, None) => return Err(Error::config("system has a latent force but no Q values were given")),
        (false, Some(_)) => return Err(Error::config("Q values given for a system without a latent force")),
        _ => {}
    }
    let mut out = Vec::with_capacity(system.equations.len());
    for (k, eq) in system.equations.iter().enumerate() {
        let m = build_term_matrix(bundle, &eq.spec)?;
        let mut r = m.target.clone();
        for (row, res) in r.iter_mut().enumerate() {
            for (c, &xi) in eq.coefficients.iter().enumerate() {
                *res -= m.get(row, c) * T::lit(xi);
            }
        }
        if eq.latent_force {
            let q = q_values
                .and_then(|q| q.get(k))
                .ok_or_else(|| Error::config("missing latent force column"))?;
            if q.len() != r.len() {
                return Err(Error::ShapeMismatch {
                    op: "pde_residual",
                    left: vec![r.len()],
                    right: vec![q.len()],
                });
            }
            for (res, &qv) in r.iter_mut().zip(q) {
                *res -= qv;
            }
        }
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn labels(eq: &EquationSpec, n: &[String]) -> Vec<String> {
        eq.terms.iter().map(|t| t.label(n)).collect()
    }

    #[test]
    fn single_variable_library_uses_self_advection() {
        let n = names(&["u"]);
        let lib = default_library(&n, &[]).unwrap();
        assert_eq!(
            labels(&lib[0], &n),
            ["1", "u", "du/dx", "du/dy", "d2u/dx2", "d2u/dy2", "u*du/dx", "u*du/dy"]
        );
        assert_eq!(lib[0].target_order, 1);
    }

    #[test]
    fn named_variables_pick_their_advectors() {
        let n = names(&["T", "U10", "V10", "u", "v", "q", "msl"]);
        let lib = default_library(&n, &[]).unwrap();
        let t = labels(&lib[0], &n);
        assert!(t.contains(&"U10*dT/dx".to_string()) && t.contains(&"V10*dT/dy".to_string()));
        let q = labels(&lib[5], &n);
        assert!(q.contains(&"u*dq/dx".to_string()) && q.contains(&"v*dq/dy".to_string()));
        assert_eq!(lib[6].target_order, 2);
        let p = labels(&lib[6], &n);
        assert!(p.contains(&"d2msl/dx2".to_string()) && p.contains(&"d2msl/dy2".to_string()));
    }

    #[test]
    fn overrides_and_missing_variables() {
        let n = names(&["T", "U", "V"]);
        let ov = EquationOverride {
            variable: "T".into(),
            advectors: Some(("U10".into(), "V".into())),
            ..Default::default()
        };
        assert!(matches!(default_library(&n, &[ov]), Err(Error::MissingVariable(v)) if v == ["U10"]));
        let ov = EquationOverride {
            variable: "T".into(),
            terms: Some(vec!["U*dT/dx".into(), "d2T/dxdy".into()]),
            target_order: Some(2),
            ..Default::default()
        };
        let lib = default_library(&n, &[ov]).unwrap();
        assert_eq!(labels(&lib[0], &n), ["U*dT/dx", "d2T/dxdy"]);
        assert_eq!(lib[0].target_order, 2);
        assert!(matches!(TermSpec::parse("W*dT/dx", &n), Err(Error::MissingVariable(_))));
    }

    #[test]
    fn term_text_round_trips_canonically() {
        let n = names(&["T", "U10"]);
        for text in ["1", "T", "dT/dx", "d2U10/dy2", "U10*dT/dx", "d2T/dxdy", "T*T"] {
            assert_eq!(TermSpec::parse(text, &n).unwrap().label(&n), text);
        }
        assert_eq!(
            TermSpec::parse("dT/dx*U10", &n).unwrap(),
            TermSpec::parse("U10*dT/dx", &n).unwrap()
        );
        assert!(TermSpec::parse("a*b*c", &names(&["a", "b", "c"])).is_err());
        assert!(TermSpec::parse("dT/dz", &n).is_err());
    }

    #[test]
    fn matrix_entries_are_factor_products() {
        let n = names(&["u"]);
        let mut b = DerivativeBundle::<f64>::new(n.clone(), 2);
        b.insert(0, Partial::Value, vec![2.0, -1.0]).unwrap();
        b.insert(0, Partial::X, vec![3.0, 0.5]).unwrap();
        b.insert(0, Partial::T, vec![0.0, 0.0]).unwrap();
        let eq = EquationSpec {
            var: 0,
            target_order: 1,
            terms: vec![TermSpec::constant(), TermSpec::parse("u*du/dx", &n).unwrap()],
        };
        let m = build_term_matrix(&b, &eq).unwrap();
        assert_eq!(m.column(0), [1.0, 1.0]);
        assert_eq!(m.column(1), [6.0, -0.5]);
        let eq = EquationSpec {
            var: 0,
            target_order: 1,
            terms: vec![TermSpec::parse("d2u/dx2", &n).unwrap()],
        };
        assert!(matches!(
            build_term_matrix(&b, &eq),
            Err(Error::MissingDerivative { term, .. }) if term == "d2u/dx2"
        ));
    }

    #[test]
    fn rank_deficiency_needs_ridge() {
        let m = TermMatrix::new(3, 2, vec![1.0, 2.0, 2.0, 4.0, 3.0, 6.0], vec![1.0, 2.0, 3.0]).unwrap();
        let opts = FitOptions { lambda: 0.0, threshold: None };
        assert!(matches!(fit_coefficients(&m, opts), Err(Error::RankDeficient { .. })));
        assert!(fit_coefficients(&m, FitOptions::default()).is_ok());
        let zero = TermMatrix::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], vec![0.0; 3]).unwrap();
        let fit = fit_coefficients(&zero, FitOptions::default()).unwrap();
        assert!(fit.coefficients.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn thresholding_drops_small_terms() {
        let rows = 50;
        let mut data = Vec::new();
        let mut target = Vec::new();
        for i in 0..rows {
            let a = (i as f64 * 0.3).sin();
            let b = (i as f64 * 0.7).cos();
            data.extend([a, b]);
            target.push(2.0 * a + 1e-4 * b);
        }
        let m = TermMatrix::new(rows, 2, data, target).unwrap();
        let fit = fit_coefficients(&m, FitOptions { lambda: 0.0, threshold: Some(1e-2) }).unwrap();
        assert_eq!(fit.coefficients[1], 0.0);
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn residual_definitions() {
        let n = names(&["u"]);
        let mut b = DerivativeBundle::<f64>::new(n.clone(), 3);
        b.insert(0, Partial::Value, vec![1.0, 2.0, 3.0]).unwrap();
        b.insert(0, Partial::X, vec![0.2, -0.4, 1.0]).unwrap();
        b.insert(0, Partial::T, vec![-0.1, 0.2, -0.5]).unwrap();
        let spec = EquationSpec {
            var: 0,
            target_order: 1,
            terms: vec![TermSpec::parse("du/dx", &n).unwrap()],
        };
        let mut sys = EquationSystem::unfitted(n.clone(), vec![spec], false);
        let r = pde_residual(&b, &sys, None).unwrap();
        assert_eq!(r[0], [-0.1, 0.2, -0.5]);
        sys.equations[0].coefficients = vec![-0.5];
        let r = pde_residual(&b, &sys, None).unwrap();
        assert!(r[0].iter().all(|v| v.abs() < 1e-15));

        sys.equations[0].latent_force = true;
        sys.equations[0].coefficients = vec![0.0];
        let q = vec![vec![-0.1, 0.2, -0.5]];
        assert!(pde_residual(&b, &sys, Some(&q)).unwrap()[0].iter().all(|v| *v == 0.0));
        assert!(pde_residual(&b, &sys, None).is_err());
    }

    #[test]
    fn json_round_trip() {
        let n = names(&["T", "U10", "V10"]);
        let lib = default_library(&n, &[]).unwrap();
        let mut sys = EquationSystem::unfitted(n, lib, true);
        sys.equations[0].coefficients[6] = -0.98;
        sys.equations[0].residual_rms = 0.25;
        let text = sys.to_json().unwrap();
        assert!(text.contains("\"U10*dT/dx\""));
        let back = EquationSystem::from_json(&text).unwrap();
        assert_eq!(back, sys);
        assert_eq!(back.coefficient("T", "U10*dT/dx"), Some(-0.98));
    }
}
