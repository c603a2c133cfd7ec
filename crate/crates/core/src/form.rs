//! Smooth fields of 2-forms on regions of coordinate space.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::symplin::{AntisymMatrix, NormSpec};

/// Domain of a form field or chart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Region {
    Ball {
        center: Vec<f64>,
        radius: f64,
        #[serde(default)]
        norm: NormSpec,
    },
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    Everywhere,
}

impl Region {
    pub fn ball(center: Vec<f64>, radius: f64) -> Self {
        Region::Ball {
            center,
            radius,
            norm: NormSpec::Euclidean,
        }
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            Region::Ball { center, .. } => Some(center.len()),
            Region::Box { lo, .. } => Some(lo.len()),
            Region::Everywhere => None,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if let Some(d) = self.dim() {
            Error::check_dim(dim, d)?;
        }
        match self {
            Region::Ball { radius, norm, .. } => {
                norm.validate()?;
                if !(*radius > 0.0) {
                    return Err(Error::input(format!("region radius must be positive, got {radius}")));
                }
            }
            Region::Box { lo, hi } => {
                Error::check_dim(lo.len(), hi.len())?;
                if lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
                    return Err(Error::input("box region needs lo < hi in every coordinate"));
                }
            }
            Region::Everywhere => {}
        }
        Ok(())
    }

    /// Signed distance to the boundary, positive inside. Infinite for
    /// [`Region::Everywhere`].
    pub fn depth(&self, x: &[f64]) -> f64 {
        match self {
            Region::Ball { center, radius, norm } => {
                let diff: Vec<f64> = x.iter().zip(center).map(|(a, c)| a - c).collect();
                radius - norm.norm(&diff)
            }
            Region::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(&v, (&a, &b))| (v - a).min(b - v))
                .fold(f64::INFINITY, f64::min),
            Region::Everywhere => f64::INFINITY,
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        if let Some(d) = self.dim() {
            if d != x.len() {
                return false;
            }
        }
        self.depth(x) >= 0.0
    }
}

/// A smooth assignment of an antisymmetric matrix to each point of a region.
pub trait FormField: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    /// The form at `x`. Callers are responsible for `x` lying in
    /// [`FormField::region`]; fields are free to evaluate outside it.
    fn eval(&self, x: &[f64]) -> AntisymMatrix;

    /// Writes the raw matrix of `eval(x)` into `out`, which has shape
    /// `dim × dim`. Override to avoid the allocation in hot loops.
    fn eval_into(&self, x: &[f64], out: &mut DMatrix<f64>) {
        out.copy_from(self.eval(x).matrix());
    }

    fn region(&self) -> &Region;
}

/// Evaluates after checking that `x` lies in the region.
pub fn eval_checked(field: &dyn FormField, x: &[f64]) -> Result<AntisymMatrix> {
    Error::check_dim(field.dim(), x.len())?;
    if !field.region().contains(x) {
        return Err(Error::Domain {
            detail: "point outside the form's region".into(),
            t: None,
            point: x.to_vec(),
        });
    }
    Ok(field.eval(x))
}

/// A form with the same value everywhere.
#[derive(Clone, Debug)]
pub struct ConstantForm {
    value: AntisymMatrix,
    region: Region,
}

impl ConstantForm {
    pub fn new(value: AntisymMatrix, region: Region) -> Result<Self> {
        region.validate(value.dim())?;
        Ok(ConstantForm { value, region })
    }

    pub fn everywhere(value: AntisymMatrix) -> Self {
        ConstantForm {
            value,
            region: Region::Everywhere,
        }
    }
}

impl FormField for ConstantForm {
    fn dim(&self) -> usize {
        self.value.dim()
    }

    fn eval(&self, _x: &[f64]) -> AntisymMatrix {
        self.value.clone()
    }

    fn region(&self) -> &Region {
        &self.region
    }
}

/// `c · ω`, used for the scaled targets `e^{s}ω`.
#[derive(Clone, Debug)]
pub struct ScaledForm {
    pub inner: Arc<dyn FormField>,
    pub factor: f64,
}

impl FormField for ScaledForm {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn eval(&self, x: &[f64]) -> AntisymMatrix {
        self.inner.eval(x).scaled(self.factor)
    }

    fn region(&self) -> &Region {
        self.inner.region()
    }
}

type FormFn = dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync;

/// A form given by a closure returning an antisymmetric matrix.
#[derive(Clone)]
pub struct FnForm {
    dim: usize,
    region: Region,
    f: Arc<FormFn>,
}

impl FnForm {
    pub fn new(dim: usize, region: Region, f: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        FnForm {
            dim,
            region,
            f: Arc::new(f),
        }
    }
}

impl fmt::Debug for FnForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnForm").field("dim", &self.dim).field("region", &self.region).finish()
    }
}

impl FormField for FnForm {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64]) -> AntisymMatrix {
        let m = (self.f)(x);
        AntisymMatrix::new(m).expect("closure returned a malformed form matrix")
    }

    fn region(&self) -> &Region {
        &self.region
    }
}

/// Sparse multivariate polynomial with real coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct Polynomial {
    dim: usize,
    terms: Vec<(Vec<u32>, f64)>,
}

impl Polynomial {
    pub fn zero(dim: usize) -> Self {
        Polynomial { dim, terms: Vec::new() }
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        let mut p = Polynomial::zero(dim);
        p.add_term(vec![0; dim], c);
        p
    }

    /// `c · x^exponents`.
    pub fn monomial(exponents: Vec<u32>, c: f64) -> Self {
        let mut p = Polynomial::zero(exponents.len());
        p.add_term(exponents, c);
        p
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn terms(&self) -> &[(Vec<u32>, f64)] {
        &self.terms
    }

    pub fn add_term(&mut self, exponents: Vec<u32>, c: f64) {
        assert_eq!(exponents.len(), self.dim, "monomial arity");
        if c == 0.0 {
            return;
        }
        if let Some(t) = self.terms.iter_mut().find(|(e, _)| *e == exponents) {
            t.1 += c;
        } else {
            self.terms.push((exponents, c));
        }
        self.terms.retain(|(_, c)| *c != 0.0);
    }

    pub fn add(&self, other: &Polynomial) -> Polynomial {
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.add_term(e.clone(), *c);
        }
        out
    }

    pub fn scale(&self, k: f64) -> Polynomial {
        let mut out = Polynomial::zero(self.dim);
        for (e, c) in &self.terms {
            out.add_term(e.clone(), c * k);
        }
        out
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(e, c)| {
                e.iter()
                    .zip(x)
                    .filter(|(&k, _)| k > 0)
                    .fold(*c, |acc, (&k, &xi)| acc * xi.powi(k as i32))
            })
            .sum()
    }

    pub fn partial(&self, i: usize) -> Polynomial {
        let mut out = Polynomial::zero(self.dim);
        for (e, c) in &self.terms {
            if e[i] > 0 {
                let mut e2 = e.clone();
                e2[i] -= 1;
                out.add_term(e2, c * e[i] as f64);
            }
        }
        out
    }

    pub fn degree(&self) -> u32 {
        self.terms.iter().map(|(e, _)| e.iter().sum()).max().unwrap_or(0)
    }
}

/// Form whose upper-triangular entries `ω_ij`, `i < j`, are polynomials.
#[derive(Clone, Debug)]
pub struct PolynomialForm {
    dim: usize,
    entries: Vec<(usize, usize, Polynomial)>,
    region: Region,
    compiled: Compiled,
}

/// Flat term list for evaluation: `(output slot, coefficient, factor range)`
/// with factors stored as offsets into a table of powers `x_v^k` at
/// `v·stride + k`.
#[derive(Clone, Debug, Default)]
struct Compiled {
    terms: Vec<(usize, f64, u32, u32)>,
    factors: Vec<u32>,
    stride: usize,
}

impl Compiled {
    fn build(dim: usize, entries: &[(usize, usize, Polynomial)]) -> Self {
        let max_power = entries
            .iter()
            .flat_map(|(_, _, p)| p.terms().iter().flat_map(|(e, _)| e.iter().copied()))
            .max()
            .unwrap_or(0) as usize;
        let stride = max_power + 1;
        let mut c = Compiled {
            stride,
            ..Default::default()
        };
        for (i, j, p) in entries {
            for (e, coeff) in p.terms() {
                let start = c.factors.len() as u32;
                for (v, &k) in e.iter().enumerate().filter(|(_, &k)| k > 0) {
                    c.factors.push((v * stride + k as usize) as u32);
                }
                c.terms.push((i + j * dim, *coeff, start, c.factors.len() as u32));
            }
        }
        c
    }
}

impl PolynomialForm {
    pub fn new(dim: usize, region: Region) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("form dimension must be positive"));
        }
        region.validate(dim)?;
        Ok(PolynomialForm {
            dim,
            entries: Vec::new(),
            region,
            compiled: Compiled::default(),
        })
    }

    /// Adds `value · x^exponents` to `ω_ij` (and its negative to `ω_ji`).
    pub fn add_coefficient(&mut self, exponents: Vec<u32>, i: usize, j: usize, value: f64) -> Result<()> {
        Error::check_dim(self.dim, exponents.len())?;
        if i >= self.dim || j >= self.dim {
            return Err(Error::input(format!("index ({i}, {j}) out of range for dim {}", self.dim)));
        }
        if i == j {
            return Err(Error::input(format!("diagonal coefficient ({i}, {i}) in an antisymmetric form")));
        }
        let (a, b, v) = if i < j { (i, j, value) } else { (j, i, -value) };
        let poly = Polynomial::monomial(exponents, v);
        self.add_entry(a, b, &poly);
        Ok(())
    }

    fn add_entry(&mut self, i: usize, j: usize, p: &Polynomial) {
        debug_assert!(i < j);
        if let Some(entry) = self.entries.iter_mut().find(|(a, b, _)| *a == i && *b == j) {
            entry.2 = entry.2.add(p);
        } else {
            self.entries.push((i, j, p.clone()));
        }
        self.compiled = Compiled::build(self.dim, &self.entries);
    }

    /// The constant form with value `m`.
    pub fn constant(m: &AntisymMatrix, region: Region) -> Result<Self> {
        let d = m.dim();
        let mut f = PolynomialForm::new(d, region)?;
        for i in 0..d {
            for j in i + 1..d {
                let v = m.matrix()[(i, j)];
                if v != 0.0 {
                    f.add_entry(i, j, &Polynomial::constant(d, v));
                }
            }
        }
        Ok(f)
    }

    /// The exact form `dλ` of a polynomial 1-form, `ω_ij = ∂_i λ_j − ∂_j λ_i`.
    pub fn exterior_derivative(lambda: &[Polynomial], region: Region) -> Result<Self> {
        let d = lambda.len();
        let mut f = PolynomialForm::new(d, region)?;
        for i in 0..d {
            for j in i + 1..d {
                let p = lambda[j].partial(i).add(&lambda[i].partial(j).scale(-1.0));
                if !p.terms().is_empty() {
                    f.add_entry(i, j, &p);
                }
            }
        }
        Ok(f)
    }

    /// `self + k · other`.
    pub fn add_scaled(&self, other: &PolynomialForm, k: f64) -> Result<Self> {
        Error::check_dim(self.dim, other.dim)?;
        let mut out = self.clone();
        for (i, j, p) in &other.entries {
            out.add_entry(*i, *j, &p.scale(k));
        }
        Ok(out)
    }

    pub fn entry(&self, i: usize, j: usize) -> Polynomial {
        let (a, b, sign) = if i < j { (i, j, 1.0) } else { (j, i, -1.0) };
        self.entries
            .iter()
            .find(|(x, y, _)| *x == a && *y == b)
            .map(|(_, _, p)| p.scale(sign))
            .unwrap_or_else(|| Polynomial::zero(self.dim))
    }

    /// Exact `max |∂_i ω_jk + ∂_j ω_ki + ∂_k ω_ij|` at `x`, from symbolic
    /// partial derivatives.
    pub fn symbolic_closedness_residual(&self, x: &[f64]) -> f64 {
        let d = self.dim;
        let mut worst = 0.0_f64;
        for i in 0..d {
            for j in i + 1..d {
                for k in j + 1..d {
                    let v = self.entry(j, k).partial(i).eval(x)
                        + self.entry(k, i).partial(j).eval(x)
                        + self.entry(i, j).partial(k).eval(x);
                    worst = worst.max(v.abs());
                }
            }
        }
        worst
    }

    /// Every term as `(exponents, i, j, value)` with `i < j`.
    pub fn coefficients(&self) -> Vec<(Vec<u32>, usize, usize, f64)> {
        self.entries
            .iter()
            .flat_map(|(i, j, p)| p.terms().iter().map(move |(e, c)| (e.clone(), *i, *j, *c)))
            .collect()
    }

    pub fn with_region(mut self, region: Region) -> Result<Self> {
        region.validate(self.dim)?;
        self.region = region;
        Ok(self)
    }
}

impl FormField for PolynomialForm {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_into(&self, x: &[f64], out: &mut DMatrix<f64>) {
        let d = self.dim;
        let stride = self.compiled.stride;
        let mut stack = [1.0; 64];
        let mut heap = Vec::new();
        let powers: &mut [f64] = if d * stride <= stack.len() {
            &mut stack[..d * stride]
        } else {
            heap.resize(d * stride, 1.0);
            &mut heap
        };
        for (v, &xv) in x.iter().enumerate() {
            let row = &mut powers[v * stride..(v + 1) * stride];
            for k in 1..stride {
                row[k] = row[k - 1] * xv;
            }
        }
        let m = out.as_mut_slice();
        m.fill(0.0);
        let factors = &self.compiled.factors;
        for &(slot, c, a, b) in &self.compiled.terms {
            let mut v = c;
            for &f in &factors[a as usize..b as usize] {
                v *= powers[f as usize];
            }
            m[slot] += v;
        }
        for j in 0..d {
            for i in j + 1..d {
                m[i + j * d] = -m[j + i * d];
            }
        }
    }

    fn eval(&self, x: &[f64]) -> AntisymMatrix {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        self.eval_into(x, &mut m);
        AntisymMatrix::from_raw(m)
    }

    fn region(&self) -> &Region {
        &self.region
    }
}

fn mono(exps: [u32; 4], c: f64) -> Polynomial {
    Polynomial::monomial(exps.to_vec(), c)
}

/// Primitive 1-form of the built-in perturbation on `ℝ⁴`.
///
/// `J_std + 0.1 dλ` stays non-degenerate on the unit ball (`sigma_min > 0.16`).
pub fn perturbation_primitive() -> Vec<Polynomial> {
    vec![
        mono([0, 1, 2, 0], 3.0).add(&mono([0, 1, 0, 1], 1.5)).add(&mono([0, 0, 2, 2], 6.0)),
        mono([2, 0, 0, 1], 3.0).add(&mono([3, 0, 1, 0], 6.0)),
        mono([1, 1, 0, 1], 3.0).add(&mono([0, 2, 0, 2], -6.0)),
        mono([0, 2, 1, 0], 3.0)
            .add(&mono([3, 0, 0, 0], 1.5))
            .add(&mono([1, 0, 1, 0], -1.5))
            .add(&mono([1, 3, 0, 0], 6.0)),
    ]
}

/// `J_std + ε dλ` on `ℝ⁴`, closed by construction, on the unit ball.
pub fn perturbed_canonical(epsilon: f64) -> PolynomialForm {
    let region = Region::ball(vec![0.0; 4], 1.0);
    let j = PolynomialForm::constant(&AntisymMatrix::canonical(4), region.clone()).expect("valid region");
    let dl = PolynomialForm::exterior_derivative(&perturbation_primitive(), region).expect("valid region");
    j.add_scaled(&dl, epsilon).expect("same dimension")
}

/// `(1 + x² + y²) dx∧dy` on the unit disc; every 2-form on `ℝ²` is closed.
pub fn radial_area() -> PolynomialForm {
    let mut f = PolynomialForm::new(2, Region::ball(vec![0.0; 2], 1.0)).expect("valid region");
    f.add_coefficient(vec![0, 0], 0, 1, 1.0).unwrap();
    f.add_coefficient(vec![2, 0], 0, 1, 1.0).unwrap();
    f.add_coefficient(vec![0, 2], 0, 1, 1.0).unwrap();
    f
}

/// `(x² + y²) dx∧dy`, degenerate at the origin.
pub fn vanishing_area() -> PolynomialForm {
    let mut f = PolynomialForm::new(2, Region::ball(vec![0.0; 2], 1.0)).expect("valid region");
    f.add_coefficient(vec![2, 0], 0, 1, 1.0).unwrap();
    f.add_coefficient(vec![0, 2], 0, 1, 1.0).unwrap();
    f
}

/// `J_std + x₃ dx₁∧dx₂` on `ℝ⁴`: not closed, `∂₃ω₁₂ = 1` with nothing to cancel it.
pub fn nonclosed_example() -> PolynomialForm {
    let region = Region::ball(vec![0.0; 4], 1.0);
    let mut f = PolynomialForm::constant(&AntisymMatrix::canonical(4), region).expect("valid region");
    f.add_coefficient(vec![0, 0, 1, 0], 0, 1, 1.0).unwrap();
    f
}

/// Random points in the euclidean ball of radius `radius` about `center`.
pub fn sample_ball<R: Rng>(rng: &mut R, center: &[f64], radius: f64, count: usize) -> Vec<Vec<f64>> {
    let d = center.len();
    (0..count)
        .map(|_| {
            let dir: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            let r = radius * rng.gen::<f64>().powf(1.0 / d as f64);
            center.iter().zip(&dir).map(|(c, v)| c + r * v / n).collect()
        })
        .collect()
}

pub(crate) fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box–Muller; one value per call keeps sampling reproducible per draw.
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
