//! Loops `S¹ → ℝ^m` sampled on a uniform periodic grid, Sobolev norms and
//! their duals, the loop form `Ω_γ(X, Y) = ∫ ω_{γ(t)}(X(t), Y(t)) dt`, and
//! loops pushed through families of diffeomorphisms.
//!
//! The circle has unit length, so integrals are plain node averages.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::form::FormField;
use crate::moser::{form_partials, Chart};
use crate::symplin::{bilinear, flat_raw, AntisymMatrix};

/// `N × m` samples stored row by row: row `k` is the value at `t = k/N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopField {
    pub n: usize,
    pub m: usize,
    pub data: Vec<f64>,
}

impl LoopField {
    pub fn zeros(n: usize, m: usize) -> Self {
        LoopField {
            n,
            m,
            data: vec![0.0; n * m],
        }
    }

    /// Samples `f(t)` at `t = k/N`.
    pub fn from_fn(n: usize, m: usize, mut f: impl FnMut(f64) -> Vec<f64>) -> Result<Self> {
        let mut data = Vec::with_capacity(n * m);
        for k in 0..n {
            let v = f(k as f64 / n as f64);
            Error::check_dim(m, v.len())?;
            data.extend(v);
        }
        Ok(LoopField { n, m, data })
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.m..(k + 1) * self.m]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|k| self.data[k * self.m + j]).collect()
    }

    fn set_column(&mut self, j: usize, col: &[f64]) {
        for (k, v) in col.iter().enumerate() {
            self.data[k * self.m + j] = *v;
        }
    }

    fn check_shape(&self, other: &LoopField) -> Result<()> {
        if self.n != other.n || self.m != other.m {
            return Err(Error::DimensionMismatch {
                expected: self.n * self.m,
                got: other.n * other.m,
            });
        }
        Ok(())
    }

    pub fn add_scaled(&self, other: &LoopField, c: f64) -> Result<LoopField> {
        self.check_shape(other)?;
        Ok(LoopField {
            n: self.n,
            m: self.m,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + c * b).collect(),
        })
    }
}

/// A sampled loop `γ` with named tangent fields along it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopGrid {
    pub gamma: LoopField,
    #[serde(default)]
    pub fields: BTreeMap<String, LoopField>,
}

impl LoopGrid {
    pub fn new(gamma: LoopField) -> Result<Self> {
        let g = LoopGrid {
            gamma,
            fields: BTreeMap::new(),
        };
        g.validate()?;
        Ok(g)
    }

    /// `γ(t) = center + radius (cos 2πt e₁ + sin 2πt e₂)`.
    pub fn circle(center: &[f64], radius: f64, n: usize) -> Result<Self> {
        if center.len() < 2 {
            return Err(Error::input("circle needs a target of dimension ≥ 2"));
        }
        let gamma = LoopField::from_fn(n, center.len(), |t| {
            let mut p = center.to_vec();
            p[0] += radius * (2.0 * PI * t).cos();
            p[1] += radius * (2.0 * PI * t).sin();
            p
        })?;
        LoopGrid::new(gamma)
    }

    pub fn m(&self) -> usize {
        self.gamma.m
    }

    pub fn n(&self) -> usize {
        self.gamma.n
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.gamma.n;
        if n < 4 || !n.is_power_of_two() {
            return Err(Error::input(format!("grid size must be a power of two ≥ 4, got {n}")));
        }
        if self.gamma.m == 0 {
            return Err(Error::input("target dimension must be positive"));
        }
        for f in std::iter::once(&self.gamma).chain(self.fields.values()) {
            if f.data.len() != f.n * f.m || f.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::input("loop samples must be finite and N × m"));
            }
            self.gamma.check_shape(f)?;
        }
        Ok(())
    }

    pub fn with_field(mut self, name: &str, field: LoopField) -> Result<Self> {
        self.gamma.check_shape(&field)?;
        self.fields.insert(name.to_string(), field);
        Ok(self)
    }

    pub fn field(&self, name: &str) -> Result<&LoopField> {
        self.fields
            .get(name)
            .ok_or_else(|| Error::input(format!("no field named {name:?}")))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let g: LoopGrid = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeScheme {
    #[default]
    Spectral,
    Central,
}

/// `L^p_k` with derivatives computed by `scheme`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SobolevSpec {
    pub k: u32,
    pub p: f64,
    #[serde(default)]
    pub scheme: DerivativeScheme,
}

impl SobolevSpec {
    pub fn new(k: u32, p: f64) -> Result<Self> {
        let s = SobolevSpec {
            k,
            p,
            scheme: DerivativeScheme::Spectral,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 1.0) || !self.p.is_finite() {
            return Err(Error::input(format!("Sobolev exponent must lie in (1, ∞), got {}", self.p)));
        }
        Ok(())
    }
}

/// Signed wavenumber of DFT bin `j`.
fn wavenumber(j: usize, n: usize) -> f64 {
    if j <= n / 2 {
        j as f64
    } else {
        j as f64 - n as f64
    }
}

/// Fourier multiplier of `D^order` at bin `j`. The Nyquist bin is dropped
/// for odd orders of the spectral derivative.
fn symbol(scheme: DerivativeScheme, order: u32, j: usize, n: usize) -> Complex<f64> {
    if order == 0 {
        return Complex::new(1.0, 0.0);
    }
    let base = match scheme {
        DerivativeScheme::Spectral => {
            if n % 2 == 0 && j == n / 2 && order % 2 == 1 {
                return Complex::new(0.0, 0.0);
            }
            Complex::new(0.0, 2.0 * PI * wavenumber(j, n))
        }
        DerivativeScheme::Central => Complex::new(0.0, n as f64 * (2.0 * PI * j as f64 / n as f64).sin()),
    };
    base.powu(order)
}

fn dft(x: &[f64]) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(x.len()).process(&mut buf);
    buf
}

fn idft_real(mut buf: Vec<Complex<f64>>) -> Vec<f64> {
    let n = buf.len();
    FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// `D^order` of one periodic sample column.
pub fn derivative(x: &[f64], order: u32, scheme: DerivativeScheme) -> Vec<f64> {
    if order == 0 {
        return x.to_vec();
    }
    let n = x.len();
    match scheme {
        DerivativeScheme::Spectral => {
            let mut f = dft(x);
            for (j, c) in f.iter_mut().enumerate() {
                *c *= symbol(scheme, order, j, n);
            }
            idft_real(f)
        }
        DerivativeScheme::Central => {
            let mut y = x.to_vec();
            for _ in 0..order {
                y = (0..n)
                    .map(|k| (y[(k + 1) % n] - y[(k + n - 1) % n]) * n as f64 / 2.0)
                    .collect();
            }
            y
        }
    }
}

/// `D^order` of every column.
pub fn field_derivative(f: &LoopField, order: u32, scheme: DerivativeScheme) -> LoopField {
    let mut out = LoopField::zeros(f.n, f.m);
    for j in 0..f.m {
        out.set_column(j, &derivative(&f.column(j), order, scheme));
    }
    out
}

fn euclid(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖f‖_{k,p} = (Σ_{i≤k} ∫ ‖D^i f‖^p)^{1/p}`, pointwise Euclidean norms,
/// trapezoid rule.
pub fn sobolev_norm(f: &LoopField, spec: &SobolevSpec) -> Result<f64> {
    spec.validate()?;
    let mut total = 0.0;
    for i in 0..=spec.k {
        let d = field_derivative(f, i, spec.scheme);
        total += (0..d.n).map(|k| euclid(d.row(k)).powf(spec.p)).sum::<f64>() / d.n as f64;
    }
    Ok(total.powf(1.0 / spec.p))
}

/// `<f, g> = Σ_j ∫ f_j g_j`.
pub fn dual_pairing(f: &LoopField, g: &LoopField) -> Result<f64> {
    f.check_shape(g)?;
    Ok(f.data.iter().zip(&g.data).map(|(a, b)| a * b).sum::<f64>() / f.n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DualNormEstimate {
    pub value: f64,
    /// Exact for `p = 2`; otherwise a lower bound from a dictionary search.
    pub exact: bool,
    pub dictionary_size: usize,
}

/// `‖g‖_{−k,q} = sup{|<f, g>| : ‖f‖_{k,p} ≤ 1}`.
///
/// For `p = 2` the Riesz map is diagonal in Fourier space and the value is
/// `(Σ_ℓ |ĝ_ℓ|² / w_ℓ)^{1/2}` with `w_ℓ = Σ_{i≤k} |σ_i(ℓ)|²`. Otherwise the
/// sup is bounded below over cosine/sine modes in each coordinate followed by
/// a few sweeps of greedy ascent.
pub fn dual_norm_estimate(g: &LoopField, spec: &SobolevSpec) -> Result<DualNormEstimate> {
    spec.validate()?;
    let n = g.n;
    if spec.p == 2.0 {
        let mut total = 0.0;
        for j in 0..g.m {
            let gh = dft(&g.column(j));
            for (l, c) in gh.iter().enumerate() {
                let w: f64 = (0..=spec.k).map(|i| symbol(spec.scheme, i, l, n).norm_sqr()).sum();
                total += c.norm_sqr() / w;
            }
        }
        return Ok(DualNormEstimate {
            value: (total / (n * n) as f64).sqrt(),
            exact: true,
            dictionary_size: 0,
        });
    }
    let mut dict = Vec::new();
    for j in 0..g.m {
        for l in 0..=n / 2 {
            for phase in [0.0, 0.25] {
                if l == 0 && phase != 0.0 {
                    continue;
                }
                dict.push(LoopField::from_fn(n, g.m, |t| {
                    let mut v = vec![0.0; g.m];
                    v[j] = (2.0 * PI * (l as f64 * t - phase)).cos();
                    v
                })?);
            }
        }
    }
    let ratio = |f: &LoopField| -> Result<f64> {
        let nf = sobolev_norm(f, spec)?;
        Ok(if nf > 0.0 { dual_pairing(f, g)?.abs() / nf } else { 0.0 })
    };
    let mut best = LoopField::zeros(n, g.m);
    let mut best_val = 0.0;
    for d in &dict {
        let v = ratio(d)?;
        if v > best_val {
            best_val = v;
            best = d.clone();
        }
    }
    if best_val > 0.0 {
        for _ in 0..2 {
            for d in &dict {
                for c in [0.5, -0.5, 0.2, -0.2, 0.05, -0.05] {
                    let cand = best.add_scaled(d, c)?;
                    let v = ratio(&cand)?;
                    if v > best_val {
                        best_val = v;
                        best = cand;
                    }
                }
            }
        }
    }
    Ok(DualNormEstimate {
        value: best_val,
        exact: false,
        dictionary_size: dict.len(),
    })
}

fn check_on_loop(omega: &dyn FormField, grid: &LoopGrid) -> Result<()> {
    Error::check_dim(omega.dim(), grid.m())?;
    let region = omega.region();
    for k in 0..grid.n() {
        let p = grid.gamma.row(k);
        if !region.contains(p) {
            return Err(Error::Domain {
                detail: "loop leaves the region of the form".into(),
                t: Some(k as f64 / grid.n() as f64),
                point: p.to_vec(),
            });
        }
    }
    Ok(())
}

/// `Ω_γ(X, Y) = ∫ ω_{γ(t)}(X(t), Y(t)) dt`.
pub fn loop_form(omega: &dyn FormField, grid: &LoopGrid, x: &LoopField, y: &LoopField) -> Result<f64> {
    check_on_loop(omega, grid)?;
    grid.gamma.check_shape(x)?;
    grid.gamma.check_shape(y)?;
    let mut w = DMatrix::zeros(grid.m(), grid.m());
    let mut total = 0.0;
    for k in 0..grid.n() {
        omega.eval_into(grid.gamma.row(k), &mut w);
        total += bilinear(&w, x.row(k), y.row(k));
    }
    Ok(total / grid.n() as f64)
}

/// `t ↦ ω_{γ(t)}^♭(X(t))`.
pub fn loop_flat(omega: &dyn FormField, grid: &LoopGrid, x: &LoopField) -> Result<LoopField> {
    check_on_loop(omega, grid)?;
    grid.gamma.check_shape(x)?;
    let mut w = DMatrix::zeros(grid.m(), grid.m());
    let mut out = LoopField::zeros(grid.n(), grid.m());
    for k in 0..grid.n() {
        omega.eval_into(grid.gamma.row(k), &mut w);
        let c = flat_raw(&w, x.row(k));
        out.data[k * grid.m()..(k + 1) * grid.m()].copy_from_slice(c.as_slice());
    }
    Ok(out)
}

/// `∫ dω_{γ(t)}(U0, U1, U2) dt` with `dω` from central differences of `ω`.
pub fn loop_closedness(
    omega: &dyn FormField,
    grid: &LoopGrid,
    u: [&LoopField; 3],
    h_fd: f64,
) -> Result<f64> {
    if !(h_fd > 0.0) {
        return Err(Error::input("h_fd must be positive"));
    }
    check_on_loop(omega, grid)?;
    for f in u {
        grid.gamma.check_shape(f)?;
    }
    let mut total = 0.0;
    for k in 0..grid.n() {
        let partials = form_partials(omega, grid.gamma.row(k), h_fd);
        let (a, b, c) = (u[0].row(k), u[1].row(k), u[2].row(k));
        for (i, d) in partials.iter().enumerate() {
            total += a[i] * bilinear(d, b, c) + b[i] * bilinear(d, c, a) + c[i] * bilinear(d, a, b);
        }
    }
    Ok(total / grid.n() as f64)
}

/// Grid size used for mode `ℓ`: at least 64 and at least `4ℓ`, so the mode
/// sits well below Nyquist.
pub fn diagnostic_grid_size(max_mode: usize) -> usize {
    (4 * max_mode).max(64).next_power_of_two()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeRatio {
    pub mode: usize,
    pub ratio: f64,
    pub exact: bool,
}

/// `‖Ω^♭ X_ℓ‖_{−k,q} / ‖X_ℓ‖_{k,p}` for `X_ℓ = cos(2πℓt) e₁` under a
/// constant form.
pub fn weak_strong_diagnostic(spec: &SobolevSpec, omega: &AntisymMatrix, modes: &[usize]) -> Result<Vec<ModeRatio>> {
    spec.validate()?;
    let m = omega.dim();
    if m == 0 {
        return Err(Error::input("form has dimension 0"));
    }
    let n = diagnostic_grid_size(modes.iter().copied().max().unwrap_or(1));
    let mut out = Vec::with_capacity(modes.len());
    for &l in modes {
        let x = LoopField::from_fn(n, m, |t| {
            let mut v = vec![0.0; m];
            v[0] = (2.0 * PI * l as f64 * t).cos();
            v
        })?;
        let mut fx = LoopField::zeros(n, m);
        for k in 0..n {
            let c = flat_raw(omega.matrix(), x.row(k));
            fx.data[k * m..(k + 1) * m].copy_from_slice(c.as_slice());
        }
        let dual = dual_norm_estimate(&fx, spec)?;
        out.push(ModeRatio {
            mode: l,
            ratio: dual.value / sobolev_norm(&x, spec)?,
            exact: dual.exact,
        });
    }
    Ok(out)
}

/// A family `s ↦ F_s` of diffeomorphisms of `ℝ^m` with Jacobians.
pub trait Diffeo: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    /// `(F_s(x), DF_s(x))`.
    fn apply(&self, s: f64, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)>;
}

#[derive(Clone, Copy, Debug)]
pub struct Identity(pub usize);

impl Diffeo for Identity {
    fn dim(&self) -> usize {
        self.0
    }

    fn apply(&self, _s: f64, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        Error::check_dim(self.0, x.len())?;
        Ok((x.to_vec(), DMatrix::identity(x.len(), x.len())))
    }
}

/// Rotation by angle `s` in every plane `(x_i, y_i)` of `ℝ^{2n}`.
#[derive(Clone, Copy, Debug)]
pub struct Rotation(pub usize);

fn check_even(dim: usize, x: &[f64]) -> Result<()> {
    Error::check_dim(dim, x.len())?;
    if dim % 2 != 0 {
        return Err(Error::input("planar maps need an even dimension"));
    }
    Ok(())
}

impl Diffeo for Rotation {
    fn dim(&self) -> usize {
        self.0
    }

    fn apply(&self, s: f64, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        check_even(self.0, x)?;
        let (sn, cs) = s.sin_cos();
        let mut y = vec![0.0; x.len()];
        let mut j = DMatrix::zeros(x.len(), x.len());
        for b in (0..x.len()).step_by(2) {
            y[b] = cs * x[b] - sn * x[b + 1];
            y[b + 1] = sn * x[b] + cs * x[b + 1];
            j[(b, b)] = cs;
            j[(b, b + 1)] = -sn;
            j[(b + 1, b)] = sn;
            j[(b + 1, b + 1)] = cs;
        }
        Ok((y, j))
    }
}

/// `(x_i, y_i) ↦ (x_i, y_i + s·c·x_i)` in every plane.
#[derive(Clone, Copy, Debug)]
pub struct LinearShear {
    pub dim: usize,
    pub c: f64,
}

impl Diffeo for LinearShear {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, s: f64, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        check_even(self.dim, x)?;
        let mut y = x.to_vec();
        let mut j = DMatrix::identity(x.len(), x.len());
        for b in (0..x.len()).step_by(2) {
            y[b + 1] += s * self.c * x[b];
            j[(b + 1, b)] = s * self.c;
        }
        Ok((y, j))
    }
}

/// `(x_i, y_i) ↦ (x_i, y_i + s·x_i²)` in every plane.
#[derive(Clone, Copy, Debug)]
pub struct QuadraticShear(pub usize);

impl Diffeo for QuadraticShear {
    fn dim(&self) -> usize {
        self.0
    }

    fn apply(&self, s: f64, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        check_even(self.0, x)?;
        let mut y = x.to_vec();
        let mut j = DMatrix::identity(x.len(), x.len());
        for b in (0..x.len()).step_by(2) {
            y[b + 1] += s * x[b] * x[b];
            j[(b + 1, b)] = 2.0 * s * x[b];
        }
        Ok((y, j))
    }
}

/// `(x, y) ↦ (x, y + s ∇V(x))` on `ℝ^{2n}` with
/// `V(x) = Σ x_i³/3 + ½ Σ_{i<n} x_i x_{i+1}²`.
///
/// Shears by a gradient preserve `Σ dx_i ∧ dy_i`, and `∂_n V` vanishes
/// when `x_n = 0`, so level `n` restricts to level `n − 1`.
#[derive(Clone, Copy, Debug)]
pub struct NonlinearShear(pub usize);

impl NonlinearShear {
    fn grad_hess(x: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let n = x.len();
        let mut g = vec![0.0; n];
        let mut h = DMatrix::zeros(n, n);
        for i in 0..n {
            g[i] += x[i] * x[i];
            h[(i, i)] += 2.0 * x[i];
            if i + 1 < n {
                g[i] += 0.5 * x[i + 1] * x[i + 1];
                g[i + 1] += x[i] * x[i + 1];
                h[(i, i + 1)] += x[i + 1];
                h[(i + 1, i)] += x[i + 1];
                h[(i + 1, i + 1)] += x[i];
            }
        }
        (g, h)
    }
}

impl Diffeo for NonlinearShear {
    fn dim(&self) -> usize {
        self.0
    }

    fn apply(&self, s: f64, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        check_even(self.0, x)?;
        let xs: Vec<f64> = x.iter().step_by(2).copied().collect();
        let (g, h) = Self::grad_hess(&xs);
        let mut y = x.to_vec();
        let mut j = DMatrix::identity(x.len(), x.len());
        for i in 0..xs.len() {
            y[2 * i + 1] += s * g[i];
            for k in 0..xs.len() {
                j[(2 * i + 1, 2 * k)] = s * h[(i, k)];
            }
        }
        Ok((y, j))
    }
}

/// `F_s ∘ G_s`.
#[derive(Debug)]
pub struct Compose<'a> {
    pub outer: &'a dyn Diffeo,
    pub inner: &'a dyn Diffeo,
}

impl Diffeo for Compose<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn apply(&self, s: f64, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let (y, jy) = self.inner.apply(s, x)?;
        let (z, jz) = self.outer.apply(s, &y)?;
        Ok((z, jz * jy))
    }
}

/// A chart used as a one-member family; `s` is ignored.
#[derive(Debug)]
pub struct ChartMap<'a>(pub &'a Chart);

impl Diffeo for ChartMap<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn apply(&self, _s: f64, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        self.0.apply(x)
    }
}

/// `γ ↦ F_s ∘ γ`, with every named field pushed forward by `DF_s`.
pub fn isotopy_lift(f: &dyn Diffeo, s: f64, grid: &LoopGrid) -> Result<LoopGrid> {
    Error::check_dim(f.dim(), grid.m())?;
    let (n, m) = (grid.n(), grid.m());
    let mut out = grid.clone();
    for k in 0..n {
        let (y, j) = f.apply(s, grid.gamma.row(k)).map_err(|e| match e {
            Error::Domain { detail, point, .. } => Error::Domain {
                detail,
                t: Some(k as f64 / n as f64),
                point,
            },
            other => other,
        })?;
        out.gamma.data[k * m..(k + 1) * m].copy_from_slice(&y);
        for (name, field) in &grid.fields {
            let v = &j * nalgebra::DVector::from_column_slice(field.row(k));
            out.fields.get_mut(name).expect("same keys").data[k * m..(k + 1) * m].copy_from_slice(v.as_slice());
        }
    }
    Ok(out)
}

/// A random trigonometric field with modes `≤ 3` and coefficients in
/// `[−1, 1]`.
pub fn random_field<R: Rng>(rng: &mut R, n: usize, m: usize) -> LoopField {
    let coeffs: Vec<[f64; 7]> = (0..m).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
    LoopField::from_fn(n, m, |t| {
        coeffs
            .iter()
            .map(|c| {
                c[0] + (1..=3)
                    .map(|l| {
                        let a = 2.0 * PI * l as f64 * t;
                        c[2 * l - 1] * a.cos() + c[2 * l] * a.sin()
                    })
                    .sum::<f64>()
            })
            .collect()
    })
    .expect("rows have length m")
}

/// Max over `samples` random field pairs of
/// `|Ω^s_{F_s∘γ}(DF_s X, DF_s Y) − Ω^0_γ(X, Y)|`.
pub fn lift_pullback_check(
    f: &dyn Diffeo,
    s: f64,
    omega0: &dyn FormField,
    omega_s: &dyn FormField,
    grid: &LoopGrid,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m) = (grid.n(), grid.m());
    let mut probe = LoopGrid::new(grid.gamma.clone())?;
    for i in 0..samples {
        probe = probe
            .with_field(&format!("x{i}"), random_field(&mut rng, n, m))?
            .with_field(&format!("y{i}"), random_field(&mut rng, n, m))?;
    }
    let lifted = isotopy_lift(f, s, &probe)?;
    let mut worst = 0.0_f64;
    for i in 0..samples {
        let (x, y) = (format!("x{i}"), format!("y{i}"));
        let before = loop_form(omega0, &probe, probe.field(&x)?, probe.field(&y)?)?;
        let after = loop_form(omega_s, &lifted, lifted.field(&x)?, lifted.field(&y)?)?;
        worst = worst.max((after - before).abs());
    }
    Ok(worst)
}

/// Per-level diffeomorphisms `φ_n` of `ℝ^{2n}` and their inverses.
pub trait DiffeoTower: Send + Sync + fmt::Debug {
    fn forward(&self, n: usize, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)>;
    fn inverse(&self, n: usize, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)>;
}

/// Towers of the built-in shears: level `n` acts on `ℝ^{2n}` with
/// parameter `1`, and the inverse uses parameter `−1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShearTower {
    Identity,
    Linear,
    Quadratic,
    Nonlinear,
}

impl ShearTower {
    fn level(&self, n: usize) -> Box<dyn Diffeo> {
        let d = 2 * n;
        match self {
            ShearTower::Identity => Box::new(Identity(d)),
            ShearTower::Linear => Box::new(LinearShear { dim: d, c: 1.0 }),
            ShearTower::Quadratic => Box::new(QuadraticShear(d)),
            ShearTower::Nonlinear => Box::new(NonlinearShear(d)),
        }
    }
}

impl DiffeoTower for ShearTower {
    fn forward(&self, n: usize, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        self.level(n).apply(1.0, x)
    }

    fn inverse(&self, n: usize, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        self.level(n).apply(-1.0, x)
    }
}

/// `ω_n = φ_n^* η_n`, with `η_n` the canonical form on `ℝ^{2n}`.
#[derive(Debug)]
struct PulledBack<'a> {
    tower: &'a dyn DiffeoTower,
    n: usize,
}

impl FormField for PulledBack<'_> {
    fn dim(&self) -> usize {
        2 * self.n
    }

    fn eval(&self, x: &[f64]) -> AntisymMatrix {
        let j = AntisymMatrix::canonical(2 * self.n);
        let (_, d) = self.tower.forward(self.n, x).expect("dimension checked by caller");
        AntisymMatrix::from_raw(d.transpose() * j.matrix() * d)
    }

    fn region(&self) -> &crate::form::Region {
        &crate::form::Region::Everywhere
    }
}

/// Checks that `ψ_n = φ_n^{-1}` lifted to loops pulls the loop form of
/// `ω_n = φ_n^* η_n` back to that of `η_n`, returning the max residual over
/// `samples` random field pairs.
///
/// Levels `n` and `n − 1` must agree on `ℝ^{2n−2}`; a violation on sampled
/// points is an input error.
pub fn global_loop_darboux(tower: &dyn DiffeoTower, n: usize, grid: &LoopGrid, samples: usize, seed: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::input("level must be at least 1"));
    }
    Error::check_dim(2 * n, grid.m())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if n > 1 {
        for _ in 0..16 {
            let x: Vec<f64> = (0..2 * n - 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (lo, _) = tower.forward(n - 1, &x)?;
            let mut xp = x.clone();
            xp.extend([0.0, 0.0]);
            let (hi, _) = tower.forward(n, &xp)?;
            let gap = lo
                .iter()
                .chain(&[0.0, 0.0])
                .zip(&hi)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if gap > 1e-12 {
                return Err(Error::input(format!(
                    "tower is not coherent between levels {} and {n} (gap {gap:e})",
                    n - 1
                )));
            }
        }
    }
    #[derive(Debug)]
    struct Inverse<'a>(&'a dyn DiffeoTower, usize);
    impl Diffeo for Inverse<'_> {
        fn dim(&self) -> usize {
            2 * self.1
        }
        fn apply(&self, _s: f64, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
            self.0.inverse(self.1, x)
        }
    }
    let eta = crate::form::ConstantForm::everywhere(AntisymMatrix::canonical(2 * n));
    let omega = PulledBack { tower, n };
    lift_pullback_check(&Inverse(tower, n), 0.0, &eta, &omega, grid, samples, seed)
}
