//! Synthetic fields with known governing equations.
//!
//! All cases live on the periodic square `[0, 2π)²` and are linear with
//! constant coefficients, so they are solved exactly in Fourier space:
//!
//! * `Advection2D`: `u_t = −a u_x − b u_y` (translation of the initial
//!   condition along characteristics),
//! * `AdvectionDiffusion2D`: `u_t = −a u_x − b u_y + νx u_xx + νy u_yy`,
//! * `Wave2D`: `u_tt = c² (u_xx + u_yy)` with zero initial velocity.
//!
//! An optional forcing `H` made of up to three drifting periodic bumps is
//! added to the right-hand side and integrated exactly per mode. The
//! solution is evaluated on the 4× grid; the 2× and coarse grids are
//! restrictions of it, so every grid samples one and the same solution.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data_io::{Axis, GridField, GridMeta};
use crate::error::{Error, Result};
use crate::field_model::Partial;
use crate::pde_library::{default_library, EquationOverride, EquationSystem};

const FINE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaseId {
    Advection2D,
    AdvectionDiffusion2D,
    Wave2D,
}

impl CaseId {
    pub fn as_str(self) -> &'static str {
        match self {
            CaseId::Advection2D => "advection2d",
            CaseId::AdvectionDiffusion2D => "advection-diffusion2d",
            CaseId::Wave2D => "wave2d",
        }
    }
}

impl fmt::Display for CaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CaseId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "advection2d" | "advection" => Ok(CaseId::Advection2D),
            "advection-diffusion2d" | "advectiondiffusion2d" | "advdiff2d" | "advection-diffusion" => {
                Ok(CaseId::AdvectionDiffusion2D)
            }
            "wave2d" | "wave" => Ok(CaseId::Wave2D),
            other => Err(Error::config(format!(
                "unknown case `{other}` (expected advection2d, advection-diffusion2d or wave2d)"
            ))),
        }
    }
}

/// Physical coefficients; unused ones are ignored by the case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    /// Advection velocity along x.
    pub a: f64,
    /// Advection velocity along y.
    pub b: f64,
    pub nu_x: f64,
    pub nu_y: f64,
    /// Wave speed.
    pub c: f64,
}

/// One Fourier mode `Re(amp · e^{i(kx·x + ky·y)})` of the initial state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub kx: i32,
    pub ky: i32,
    pub re: f64,
    pub im: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitialCondition {
    /// Random trigonometric polynomial with wavenumbers
    /// `1 ≤ max(|kx|, |ky|) ≤ max_mode`, amplitudes decaying like
    /// `1/(1+|k|²)`, scaled to unit RMS.
    Random { max_mode: i32 },
    Modes(Vec<Mode>),
}

/// `A·exp(κ(cos(x − cx − vx·t) − 1) + κ(cos(y − cy − vy·t) − 1))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub amplitude: f64,
    pub cx: f64,
    pub cy: f64,
    pub vx: f64,
    pub vy: f64,
    pub kappa: f64,
}

impl Bump {
    pub fn eval(&self, x: f64, y: f64, t: f64) -> f64 {
        let k = self.kappa;
        self.amplitude * (k * ((x - self.cx - self.vx * t).cos() - 1.0) + k * ((y - self.cy - self.vy * t).cos() - 1.0)).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcingSpec {
    pub bumps: Vec<Bump>,
}

impl ForcingSpec {
    /// `count` bumps with random centres, drift and sign.
    pub fn random(count: usize, amplitude: f64, kappa: f64, seed: u64) -> Result<Self> {
        if count == 0 || count > 3 {
            return Err(Error::config("forcing has between 1 and 3 bumps"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f0c3);
        let bumps = (0..count)
            .map(|_| Bump {
                amplitude: amplitude * if rng.gen_bool(0.5) { 1.0 } else { -1.0 } * rng.gen_range(0.7..1.0),
                cx: rng.gen_range(0.0..2.0 * PI),
                cy: rng.gen_range(0.0..2.0 * PI),
                vx: rng.gen_range(-0.4..0.4),
                vy: rng.gen_range(-0.4..0.4),
                kappa,
            })
            .collect();
        Ok(ForcingSpec { bumps })
    }

    pub fn eval(&self, x: f64, y: f64, t: f64) -> f64 {
        self.bumps.iter().map(|b| b.eval(x, y, t)).sum()
    }
}

/// Full description of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCase {
    pub case: CaseId,
    pub coefficients: Coefficients,
    pub nx: usize,
    pub ny: usize,
    pub nt: usize,
    pub dt: f64,
    pub initial: InitialCondition,
    pub forcing: Option<ForcingSpec>,
    /// Standard deviation of Gaussian noise added to the coarse field,
    /// relative to its RMS.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticCase {
    /// Defaults for `case` on an `nx × ny × nt` grid.
    pub fn new(case: CaseId, nx: usize, ny: usize, nt: usize, seed: u64) -> Self {
        let (coefficients, dt, max_mode) = match case {
            CaseId::Advection2D => (
                Coefficients { a: 0.5, b: 0.0, nu_x: 0.0, nu_y: 0.0, c: 0.0 },
                0.05,
                4,
            ),
            CaseId::AdvectionDiffusion2D => (
                Coefficients { a: 0.5, b: 0.3, nu_x: 0.05, nu_y: 0.05, c: 0.0 },
                0.02,
                4,
            ),
            CaseId::Wave2D => (
                Coefficients { a: 0.0, b: 0.0, nu_x: 0.0, nu_y: 0.0, c: 1.0 },
                0.05,
                3,
            ),
        };
        SyntheticCase {
            case,
            coefficients,
            nx,
            ny,
            nt,
            dt,
            initial: InitialCondition::Random { max_mode },
            forcing: None,
            noise: 0.0,
            seed,
        }
    }

    pub fn with_forcing(mut self, forcing: ForcingSpec) -> Self {
        self.forcing = Some(forcing);
        self
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.coefficients;
        if self.nx < 4 || self.ny < 4 {
            return Err(Error::config("synthetic grids need at least 4 points per axis"));
        }
        if self.nt < 3 {
            return Err(Error::config("synthetic runs need at least 3 frames"));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::config("time step must be positive"));
        }
        if [c.a, c.b, c.nu_x, c.nu_y, c.c].iter().any(|v| !v.is_finite()) {
            return Err(Error::config("coefficients must be finite"));
        }
        if c.nu_x < 0.0 || c.nu_y < 0.0 {
            return Err(Error::config("negative diffusivity makes the problem ill-posed"));
        }
        if self.case == CaseId::Wave2D && !(c.c > 0.0) {
            return Err(Error::config("wave speed must be positive"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("noise level must be ≥ 0"));
        }
        let limit = (self.nx.min(self.ny) / 2) as i32 - 1;
        match &self.initial {
            InitialCondition::Random { max_mode } => {
                if *max_mode < 1 || *max_mode > limit {
                    return Err(Error::config(format!(
                        "max_mode must lie in 1..={limit} to be resolved on the coarse grid"
                    )));
                }
            }
            InitialCondition::Modes(modes) => {
                if modes.iter().any(|m| m.kx.abs() > limit || m.ky.abs() > limit) {
                    return Err(Error::config(format!("mode wavenumbers must not exceed {limit}")));
                }
            }
        }
        if let Some(f) = &self.forcing {
            if f.bumps.is_empty() || f.bumps.len() > 3 {
                return Err(Error::config("forcing has between 1 and 3 bumps"));
            }
            if f.bumps.iter().any(|b| !(b.kappa > 0.0) || !b.amplitude.is_finite()) {
                return Err(Error::config("bump width parameter must be positive"));
            }
        }
        Ok(())
    }

    fn coarse_meta(&self) -> GridMeta {
        GridMeta::new(
            Axis::new(0.0, 2.0 * PI / self.nx as f64, self.nx),
            Axis::new(0.0, 2.0 * PI / self.ny as f64, self.ny),
            Axis::new(0.0, self.dt, self.nt),
        )
    }

    fn modes(&self) -> Vec<Mode> {
        match &self.initial {
            InitialCondition::Modes(m) => m.clone(),
            InitialCondition::Random { max_mode } => {
                let k = *max_mode;
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let mut modes = Vec::new();
                for kx in 0..=k {
                    for ky in -k..=k {
                        if kx == 0 && ky <= 0 {
                            continue;
                        }
                        let decay = 1.0 / (1.0 + (kx * kx + ky * ky) as f64);
                        let re: f64 = rng.sample(StandardNormal);
                        let im: f64 = rng.sample(StandardNormal);
                        modes.push(Mode { kx, ky, re: re * decay, im: im * decay });
                    }
                }
                let power: f64 = modes.iter().map(|m| m.re * m.re + m.im * m.im).sum();
                let scale = 1.0 / (power / 2.0).sqrt();
                for m in &mut modes {
                    m.re *= scale;
                    m.im *= scale;
                }
                modes
            }
        }
    }

    /// True equation in terms of the default single-variable library.
    pub fn truth_system(&self) -> Result<EquationSystem> {
        let names = vec!["u".to_string()];
        let overrides = if self.case == CaseId::Wave2D {
            vec![EquationOverride {
                variable: "u".into(),
                target_order: Some(2),
                ..Default::default()
            }]
        } else {
            Vec::new()
        };
        let lib = default_library(&names, &overrides)?;
        let mut sys = EquationSystem::unfitted(names.clone(), lib, self.forcing.is_some());
        let c = self.coefficients;
        let values: Vec<(&str, f64)> = match self.case {
            CaseId::Advection2D => vec![("du/dx", -c.a), ("du/dy", -c.b)],
            CaseId::AdvectionDiffusion2D => vec![
                ("du/dx", -c.a),
                ("du/dy", -c.b),
                ("d2u/dx2", c.nu_x),
                ("d2u/dy2", c.nu_y),
            ],
            CaseId::Wave2D => vec![("d2u/dx2", c.c * c.c), ("d2u/dy2", c.c * c.c)],
        };
        let eq = &mut sys.equations[0];
        for (label, v) in values {
            let i = eq
                .spec
                .terms
                .iter()
                .position(|t| t.label(&names) == label)
                .expect("default library contains the true terms");
            eq.coefficients[i] = v;
        }
        sys.lambda = 0.0;
        Ok(sys)
    }
}

/// Result of the generation-time residual check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfCheck {
    /// RMS of the finite-difference residual of the noiseless coarse field
    /// at interior points.
    pub residual_rms: f64,
    /// 1.25 × RMS of the leading truncation terms of the stencils.
    pub bound: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub case: SyntheticCase,
    pub coarse: GridField<f64>,
    pub fine2x: GridField<f64>,
    pub fine4x: GridField<f64>,
    pub truth: EquationSystem,
    /// Forcing sampled on the coarse grid, if the case has one.
    pub forcing: Option<GridField<f64>>,
    pub self_check: SelfCheck,
}

impl Generated {
    /// Sidecar manifest describing how the data was produced.
    pub fn manifest_json(&self) -> Result<String> {
        let v = serde_json::json!({
            "case": self.case,
            "dims": {
                "coarse": [self.coarse.nt(), self.coarse.ny(), self.coarse.nx()],
                "fine2x": [self.fine2x.nt(), self.fine2x.ny(), self.fine2x.nx()],
                "fine4x": [self.fine4x.nt(), self.fine4x.ny(), self.fine4x.nx()],
            },
            "self_check": self.self_check,
            "truth": serde_json::from_str::<serde_json::Value>(&self.truth.to_json()?)?,
        });
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

/// Spectral state on the `N×N` fine grid.
struct Spectral {
    n_x: usize,
    n_y: usize,
    /// Signed wavenumbers of each FFT index.
    kx: Vec<f64>,
    ky: Vec<f64>,
    u0: Vec<Complex64>,
    /// Fourier transform of each bump at t = 0 and its drift rate `−i k·v`.
    bumps: Vec<(Vec<Complex64>, Vec<Complex64>)>,
    planner: FftPlanner<f64>,
}

fn wavenumbers(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| if i <= n / 2 { i as f64 } else { i as f64 - n as f64 })
        .collect()
}

/// `∫₀ᵗ e^{λ(t−s)} e^{μs} ds`, bounded for strongly damped `λ`.
fn duhamel(lambda: Complex64, mu: Complex64, t: f64) -> Complex64 {
    let z = (mu - lambda) * t;
    if z.norm() < 1e-4 {
        (lambda * t).exp() * t * (Complex64::new(1.0, 0.0) + z / 2.0 + z * z / 6.0 + z * z * z / 24.0)
    } else {
        ((mu * t).exp() - (lambda * t).exp()) / (mu - lambda)
    }
}

impl Spectral {
    fn new(case: &SyntheticCase) -> Result<Self> {
        let (n_x, n_y) = (FINE * case.nx, FINE * case.ny);
        let kx = wavenumbers(n_x);
        let ky = wavenumbers(n_y);
        let total = (n_x * n_y) as f64;
        let mut u0 = vec![Complex64::new(0.0, 0.0); n_x * n_y];
        let idx = |k: i32, n: usize| -> usize { k.rem_euclid(n as i32) as usize };
        for m in case.modes() {
            let a = Complex64::new(m.re, m.im) * (total / 2.0);
            u0[idx(m.ky, n_y) * n_x + idx(m.kx, n_x)] += a;
            u0[idx(-m.ky, n_y) * n_x + idx(-m.kx, n_x)] += a.conj();
        }
        let mut s = Spectral {
            n_x,
            n_y,
            kx,
            ky,
            u0,
            bumps: Vec::new(),
            planner: FftPlanner::new(),
        };
        if let Some(f) = &case.forcing {
            for b in &f.bumps {
                let mut grid: Vec<Complex64> = (0..n_y)
                    .flat_map(|iy| {
                        (0..n_x).map(move |ix| {
                            let x = 2.0 * PI * ix as f64 / n_x as f64;
                            let y = 2.0 * PI * iy as f64 / n_y as f64;
                            Complex64::new(b.eval(x, y, 0.0), 0.0)
                        })
                    })
                    .collect();
                s.fft2(&mut grid, false);
                let mut mu = vec![Complex64::new(0.0, 0.0); n_x * n_y];
                for iy in 0..n_y {
                    for ix in 0..n_x {
                        let i = iy * n_x + ix;
                        if ix == n_x / 2 || iy == n_y / 2 {
                            grid[i] = Complex64::new(0.0, 0.0);
                        }
                        mu[i] = Complex64::new(0.0, -(s.kx[ix] * b.vx + s.ky[iy] * b.vy));
                    }
                }
                s.bumps.push((grid, mu));
            }
        }
        Ok(s)
    }

    fn fft2(&mut self, data: &mut [Complex64], inverse: bool) {
        let (nx, ny) = (self.n_x, self.n_y);
        let fx = if inverse { self.planner.plan_fft_inverse(nx) } else { self.planner.plan_fft_forward(nx) };
        for row in data.chunks_mut(nx) {
            fx.process(row);
        }
        let fy = if inverse { self.planner.plan_fft_inverse(ny) } else { self.planner.plan_fft_forward(ny) };
        let mut col = vec![Complex64::new(0.0, 0.0); ny];
        for ix in 0..nx {
            for iy in 0..ny {
                col[iy] = data[iy * nx + ix];
            }
            fy.process(&mut col);
            for iy in 0..ny {
                data[iy * nx + ix] = col[iy];
            }
        }
    }

    fn real_field(&mut self, mut spec: Vec<Complex64>) -> Vec<f64> {
        self.fft2(&mut spec, true);
        let scale = 1.0 / (self.n_x * self.n_y) as f64;
        spec.into_iter().map(|c| c.re * scale).collect()
    }

    /// Spectrum of the solution at time `t` and its time derivatives up to
    /// `orders` (index 0 is the solution itself).
    fn spectra(&self, case: &SyntheticCase, t: f64, orders: usize) -> Vec<Vec<Complex64>> {
        let c = case.coefficients;
        let n = self.n_x * self.n_y;
        let zero = Complex64::new(0.0, 0.0);
        let mut out = vec![vec![zero; n]; orders + 1];
        for iy in 0..self.n_y {
            for ix in 0..self.n_x {
                let i = iy * self.n_x + ix;
                let (kx, ky) = (self.kx[ix], self.ky[iy]);
                // Forcing per bump at time t, with its drift rate.
                let forcing: Vec<(Complex64, Complex64)> = self
                    .bumps
                    .iter()
                    .map(|(h, mu)| (h[i] * (mu[i] * t).exp(), mu[i]))
                    .collect();
                match case.case {
                    CaseId::Advection2D | CaseId::AdvectionDiffusion2D => {
                        let nu = if case.case == CaseId::Advection2D { (0.0, 0.0) } else { (c.nu_x, c.nu_y) };
                        let lambda = Complex64::new(-(nu.0 * kx * kx + nu.1 * ky * ky), -(c.a * kx + c.b * ky));
                        let mut u = self.u0[i] * (lambda * t).exp();
                        for (h, mu) in self.bumps.iter().map(|(h, mu)| (h[i], mu[i])) {
                            u += h * duhamel(lambda, mu, t);
                        }
                        out[0][i] = u;
                        for p in 1..=orders {
                            let mut d = lambda * out[p - 1][i];
                            for &(h, mu) in &forcing {
                                d += mu.powu(p as u32 - 1) * h;
                            }
                            out[p][i] = d;
                        }
                    }
                    CaseId::Wave2D => {
                        let omega = c.c * (kx * kx + ky * ky).sqrt();
                        let mut u = self.u0[i] * (omega * t).cos();
                        for (h, mu) in self.bumps.iter().map(|(h, mu)| (h[i], mu[i])) {
                            u += if omega == 0.0 {
                                // Only the mean mode, which does not drift.
                                h * (t * t / 2.0)
                            } else {
                                let iw = Complex64::new(0.0, omega);
                                let plus = duhamel(iw, mu, t);
                                let minus = duhamel(-iw, mu, t);
                                h * (plus - minus) / (2.0 * iw)
                            };
                        }
                        out[0][i] = u;
                        // u' has no closed recursion from u alone; use the
                        // derivative of the same formulas.
                        if orders >= 1 {
                            let mut v = -self.u0[i] * omega * (omega * t).sin();
                            for (h, mu) in self.bumps.iter().map(|(h, mu)| (h[i], mu[i])) {
                                v += if omega == 0.0 {
                                    h * t
                                } else {
                                    // d/dt ∫₀ᵗ sin(ω(t−s))/ω e^{μs} ds = ∫₀ᵗ cos(ω(t−s)) e^{μs} ds
                                    let iw = Complex64::new(0.0, omega);
                                    let plus = duhamel(iw, mu, t);
                                    let minus = duhamel(-iw, mu, t);
                                    h * (plus + minus) / 2.0
                                };
                            }
                            out[1][i] = v;
                        }
                        for p in 2..=orders {
                            let mut d = -omega * omega * out[p - 2][i];
                            for &(h, mu) in &forcing {
                                d += mu.powu(p as u32 - 2) * h;
                            }
                            out[p][i] = d;
                        }
                    }
                }
            }
        }
        out
    }

    /// Multiplies a spectrum by `(i kx)^px (i ky)^py`.
    fn spatial(&self, spec: &[Complex64], px: u32, py: u32) -> Vec<Complex64> {
        let mut out = spec.to_vec();
        for iy in 0..self.n_y {
            for ix in 0..self.n_x {
                let f = Complex64::new(0.0, self.kx[ix]).powu(px) * Complex64::new(0.0, self.ky[iy]).powu(py);
                out[iy * self.n_x + ix] *= f;
            }
        }
        out
    }
}

/// Samples `full` (an `n_x × n_y` periodic grid) on the first
/// `FINE·(n−1)+1` points of each axis with the given stride.
fn restrict_periodic(full: &[f64], n_x: usize, nx: usize, ny: usize, stride: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            out.push(full[iy * stride * n_x + ix * stride]);
        }
    }
    out
}

/// Generates the case: exact solution on the 4× grid, its restrictions and
/// the self-check.
pub fn generate(case: &SyntheticCase) -> Result<Generated> {
    case.validate()?;
    let mut spectral = Spectral::new(case)?;
    let coarse_meta = case.coarse_meta();
    let mut fine_meta = coarse_meta.clone();
    fine_meta.x = coarse_meta.x.refined(FINE);
    fine_meta.y = coarse_meta.y.refined(FINE);
    let (fx, fy) = (fine_meta.x.len, fine_meta.y.len);
    let names = vec!["u".to_string()];

    let time_orders = match case.case {
        CaseId::Wave2D => 4,
        _ => 3,
    };
    let mut fine = Vec::with_capacity(case.nt * fx * fy);
    let mut trunc = Vec::with_capacity(case.nt * case.nx * case.ny);
    let c = case.coefficients;
    let (dx, dy, dt) = (coarse_meta.x.step, coarse_meta.y.step, case.dt);
    for k in 0..case.nt {
        let t = coarse_meta.t.coord(k);
        let spectra = spectral.spectra(case, t, time_orders);
        let u = spectral.real_field(spectra[0].clone());
        fine.extend(restrict_periodic(&u, spectral.n_x, fx, fy, 1));

        // Leading truncation terms of the central stencils on the coarse grid.
        let coarse = |s: &mut Spectral, spec: Vec<Complex64>| {
            let n_x = s.n_x;
            restrict_periodic(&s.real_field(spec), n_x, case.nx, case.ny, FINE)
        };
        let ut = coarse(&mut spectral, spectra[time_orders].clone());
        let sx = |p| spectral.spatial(&spectra[0], p, 0);
        let sy = |p| spectral.spatial(&spectra[0], 0, p);
        let (uxxx, uyyy, uxxxx, uyyyy) = (sx(3), sy(3), sx(4), sy(4));
        let uxxx = coarse(&mut spectral, uxxx);
        let uyyy = coarse(&mut spectral, uyyy);
        let uxxxx = coarse(&mut spectral, uxxxx);
        let uyyyy = coarse(&mut spectral, uyyyy);
        for i in 0..case.nx * case.ny {
            let e = match case.case {
                CaseId::Wave2D => {
                    dt * dt / 12.0 * ut[i].abs()
                        + c.c * c.c * (dx * dx / 12.0 * uxxxx[i].abs() + dy * dy / 12.0 * uyyyy[i].abs())
                }
                _ => {
                    dt * dt / 6.0 * ut[i].abs()
                        + c.a.abs() * dx * dx / 6.0 * uxxx[i].abs()
                        + c.b.abs() * dy * dy / 6.0 * uyyy[i].abs()
                        + c.nu_x * dx * dx / 12.0 * uxxxx[i].abs()
                        + c.nu_y * dy * dy / 12.0 * uyyyy[i].abs()
                }
            };
            trunc.push(e);
        }
    }
    if fine.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "generate" });
    }
    let fine4x = GridField::new(fine_meta, names.clone(), fine)?;
    let fine2x = fine4x.restrict(2)?;
    let clean = fine4x.restrict(FINE)?;

    let forcing = match &case.forcing {
        Some(f) => Some(GridField::from_fn(coarse_meta.clone(), vec!["H_u".into()], |x, y, t| {
            vec![f.eval(x, y, t)]
        })?),
        None => None,
    };
    let self_check = self_check(case, &clean, forcing.as_ref(), &trunc);

    let mut coarse = clean;
    if case.noise > 0.0 {
        let rms = (coarse.data().iter().map(|v| v * v).sum::<f64>() / coarse.data().len() as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(case.seed ^ 0x0015_e000);
        for v in coarse.data_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += case.noise * rms * n;
        }
    }
    Ok(Generated {
        case: case.clone(),
        coarse,
        fine2x,
        fine4x,
        truth: case.truth_system()?,
        forcing,
        self_check,
    })
}

/// Central-difference residual of the PDE at interior points of `u`.
fn self_check(case: &SyntheticCase, u: &GridField<f64>, forcing: Option<&GridField<f64>>, trunc: &[f64]) -> SelfCheck {
    let (nt, ny, nx, _) = u.dims();
    let m = u.meta();
    let (dx, dy, dt) = (m.x.step, m.y.step, m.t.step);
    let c = case.coefficients;
    let at = |t: usize, y: usize, x: usize| u.get(t, y, x, 0);
    let (mut ss, mut sb, mut count) = (0.0, 0.0, 0usize);
    for t in 1..nt - 1 {
        for y in 1..ny - 1 {
            for x in 1..nx - 1 {
                let ux = (at(t, y, x + 1) - at(t, y, x - 1)) / (2.0 * dx);
                let uy = (at(t, y + 1, x) - at(t, y - 1, x)) / (2.0 * dy);
                let uxx = (at(t, y, x + 1) - 2.0 * at(t, y, x) + at(t, y, x - 1)) / (dx * dx);
                let uyy = (at(t, y + 1, x) - 2.0 * at(t, y, x) + at(t, y - 1, x)) / (dy * dy);
                let h = forcing.map_or(0.0, |f| f.get(t, y, x, 0));
                let r = match case.case {
                    CaseId::Wave2D => {
                        let utt = (at(t + 1, y, x) - 2.0 * at(t, y, x) + at(t - 1, y, x)) / (dt * dt);
                        utt - c.c * c.c * (uxx + uyy) - h
                    }
                    CaseId::Advection2D => {
                        let ut = (at(t + 1, y, x) - at(t - 1, y, x)) / (2.0 * dt);
                        ut + c.a * ux + c.b * uy - h
                    }
                    CaseId::AdvectionDiffusion2D => {
                        let ut = (at(t + 1, y, x) - at(t - 1, y, x)) / (2.0 * dt);
                        ut + c.a * ux + c.b * uy - c.nu_x * uxx - c.nu_y * uyy - h
                    }
                };
                let e = trunc[t * nx * ny + y * nx + x];
                ss += r * r;
                sb += e * e;
                count += 1;
            }
        }
    }
    let residual_rms = (ss / count as f64).sqrt();
    let bound = 1.25 * (sb / count as f64).sqrt();
    SelfCheck {
        residual_rms,
        bound,
        passed: residual_rms <= bound,
    }
}

/// Forcing samples at arbitrary physical coordinates.
pub fn forcing_at(case: &SyntheticCase, points: &[(f64, f64, f64)]) -> Vec<f64> {
    match &case.forcing {
        Some(f) => points.iter().map(|&(x, y, t)| f.eval(x, y, t)).collect(),
        None => vec![0.0; points.len()],
    }
}

/// Which derivatives the case's true equation reads.
pub fn truth_partials(case: CaseId) -> Vec<Partial> {
    match case {
        CaseId::Wave2D => vec![Partial::Value, Partial::TT, Partial::XX, Partial::YY],
        _ => vec![Partial::Value, Partial::T, Partial::X, Partial::Y, Partial::XX, Partial::YY],
    }
}
