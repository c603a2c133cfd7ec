//! ODEs `x' = f(t, x)` on a direct limit `ℝ^∞ = ∪ ℝ^{d_n}`.
//!
//! A family gives one field `f_n` per level together with the data of the
//! existence theorem: a ball `B̄_n(a_n, r_n)` per level, a time interval
//! `[t0 − T, t0 + T]` and a coherent norm. Sampled bounds `K_n` feed the
//! checks of conditions (A_n), (B) and (C).

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dirlim::{DLVector, LevelDims};
use crate::error::{Error, Result};
use crate::rk4::rk4_integrate;
use crate::symplin::NormSpec;

/// Per-level vector fields `f_n(t, x)` on `ℝ^{d_n}`.
pub trait LevelField: Send + Sync + fmt::Debug {
    fn eval(&self, n: usize, t: f64, x: &[f64]) -> Vec<f64>;

    /// Analytic `D₂f_n(t, x)`, when known.
    fn jacobian(&self, _n: usize, _t: f64, _x: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    /// Component functions when `f_n = (φ_1(t, y_1), …, φ_{d_n}(t, y_{d_n}))`.
    fn coordinatewise(&self) -> Option<&Coordinatewise> {
        None
    }
}

type ScalarFn = dyn Fn(usize, f64, f64) -> f64 + Send + Sync;

/// `f_n = (φ_1(t, y_1), …, φ_n(t, y_n))`, with `i` counted from 1.
#[derive(Clone)]
pub struct Coordinatewise {
    phi: Arc<ScalarFn>,
    dphi: Arc<ScalarFn>,
}

impl Coordinatewise {
    pub fn new(
        phi: impl Fn(usize, f64, f64) -> f64 + Send + Sync + 'static,
        dphi: impl Fn(usize, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Coordinatewise {
            phi: Arc::new(phi),
            dphi: Arc::new(dphi),
        }
    }

    pub fn phi(&self, i: usize, t: f64, y: f64) -> f64 {
        (self.phi)(i, t, y)
    }

    pub fn dphi(&self, i: usize, t: f64, y: f64) -> f64 {
        (self.dphi)(i, t, y)
    }
}

impl fmt::Debug for Coordinatewise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Coordinatewise")
    }
}

impl LevelField for Coordinatewise {
    fn eval(&self, _n: usize, t: f64, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(i, &y)| self.phi(i + 1, t, y)).collect()
    }

    fn jacobian(&self, _n: usize, t: f64, x: &[f64]) -> Option<DMatrix<f64>> {
        let d = nalgebra::DVector::from_iterator(x.len(), x.iter().enumerate().map(|(i, &y)| self.dphi(i + 1, t, y)));
        Some(DMatrix::from_diagonal(&d))
    }

    fn coordinatewise(&self) -> Option<&Coordinatewise> {
        Some(self)
    }
}

/// `f(t, x) = M x` with `M` upper triangular, so level `n` uses the leading
/// `n × n` block and restricts exactly.
#[derive(Clone, Debug)]
pub struct LinearUpper {
    m: DMatrix<f64>,
}

impl LinearUpper {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::input("linear field needs a non-empty square matrix"));
        }
        for i in 0..m.nrows() {
            for j in 0..i {
                if m[(i, j)] != 0.0 {
                    return Err(Error::input(format!(
                        "entry ({i}, {j}) below the diagonal breaks the restriction property"
                    )));
                }
            }
        }
        Ok(LinearUpper { m })
    }

    pub fn max_dim(&self) -> usize {
        self.m.nrows()
    }

    fn block(&self, d: usize) -> DMatrix<f64> {
        self.m.view((0, 0), (d, d)).into_owned()
    }
}

impl LevelField for LinearUpper {
    fn eval(&self, _n: usize, _t: f64, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        (0..d).map(|i| (i..d).map(|j| self.m[(i, j)] * x[j]).sum()).collect()
    }

    fn jacobian(&self, _n: usize, _t: f64, x: &[f64]) -> Option<DMatrix<f64>> {
        Some(self.block(x.len()))
    }
}

/// `f_i = t (y_i² + y_i y_{i+1}) / i²`, coupled to the next coordinate and
/// still restricting exactly, since the coupling vanishes when `y_{i+1} = 0`.
#[derive(Clone, Copy, Debug, Default)]
pub struct CoupledQuadratic;

impl LevelField for CoupledQuadratic {
    fn eval(&self, _n: usize, t: f64, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        (0..d)
            .map(|i| {
                let next = if i + 1 < d { x[i + 1] } else { 0.0 };
                t * (x[i] * x[i] + x[i] * next) / ((i + 1) * (i + 1)) as f64
            })
            .collect()
    }

    fn jacobian(&self, _n: usize, t: f64, x: &[f64]) -> Option<DMatrix<f64>> {
        let d = x.len();
        let mut j = DMatrix::zeros(d, d);
        for i in 0..d {
            let w = t / ((i + 1) * (i + 1)) as f64;
            let next = if i + 1 < d { x[i + 1] } else { 0.0 };
            j[(i, i)] = w * (2.0 * x[i] + next);
            if i + 1 < d {
                j[(i, i + 1)] = w * x[i];
            }
        }
        Some(j)
    }
}

/// Ball radii `r_n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusSeq {
    Constant(f64),
    Explicit(Vec<f64>),
}

impl RadiusSeq {
    pub fn at(&self, n: usize) -> Option<f64> {
        match self {
            RadiusSeq::Constant(r) => Some(*r),
            RadiusSeq::Explicit(v) => n.checked_sub(1).and_then(|i| v.get(i)).copied(),
        }
    }
}

type BoundFn = dyn Fn(usize) -> f64 + Send + Sync;

/// A coherent family of per-level fields with the data of the existence
/// theorem.
#[derive(Clone)]
pub struct OdeFamily {
    pub name: String,
    pub field: Arc<dyn LevelField>,
    pub levels: LevelDims,
    pub max_level: Option<usize>,
    pub norm: NormSpec,
    pub t0: f64,
    /// `T` in `I = [t0 − T, t0 + T]`.
    pub half_width: f64,
    /// Ball centres `a_n` as one element of the limit.
    pub center: Vec<f64>,
    pub radius: RadiusSeq,
    /// A closed-form upper bound for `K_n`, reported next to the sampled one.
    pub closed_form_bound: Option<Arc<BoundFn>>,
    pub suggested_tau: Option<f64>,
}

impl fmt::Debug for OdeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OdeFamily")
            .field("name", &self.name)
            .field("levels", &self.levels)
            .field("norm", &self.norm)
            .field("radius", &self.radius)
            .finish()
    }
}

/// `(π²/4 + 1)`, the sup of `y² + 1` over `|y| < π/2`.
pub const THETA_SUP: f64 = std::f64::consts::PI * std::f64::consts::PI / 4.0 + 1.0;

impl OdeFamily {
    fn base(name: &str, field: Arc<dyn LevelField>) -> Self {
        OdeFamily {
            name: name.into(),
            field,
            levels: LevelDims::Uniform(1),
            max_level: None,
            norm: NormSpec::Ell1,
            t0: 0.0,
            half_width: 1.0,
            center: Vec::new(),
            radius: RadiusSeq::Constant(1.5),
            closed_form_bound: None,
            suggested_tau: None,
        }
    }

    pub fn dim(&self, n: usize) -> Result<usize> {
        if let Some(m) = self.max_level {
            if n > m {
                return Err(Error::input(format!("family {} has only {m} levels", self.name)));
            }
        }
        self.levels
            .dim(n)
            .ok_or_else(|| Error::input(format!("level {n} is not defined")))
    }

    pub fn center_at(&self, n: usize) -> Result<Vec<f64>> {
        let d = self.dim(n)?;
        if self.center.len() > d {
            return Err(Error::input(format!("centre does not lie in level {n}")));
        }
        let mut c = self.center.clone();
        c.resize(d, 0.0);
        Ok(c)
    }

    pub fn radius_at(&self, n: usize) -> Result<f64> {
        self.radius
            .at(n)
            .ok_or_else(|| Error::input(format!("no radius for level {n}")))
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.t0 - self.half_width, self.t0 + self.half_width)
    }

    /// `f_n(t, x)`, checking the dimension.
    pub fn eval(&self, n: usize, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(self.dim(n)?, x.len())?;
        Ok(self.field.eval(n, t, x))
    }
}

/// `φ_i(t, y) = t/i² · (y² + 1)` on `ℓ¹` balls of radius `3/2`.
pub fn example3_family() -> OdeFamily {
    let k = THETA_SUP * std::f64::consts::PI.powi(2) / 6.0;
    OdeFamily {
        closed_form_bound: Some(Arc::new(|n| THETA_SUP * (1..=n).map(|i| 1.0 / (i * i) as f64).sum::<f64>())),
        suggested_tau: Some(1.0 / k),
        ..OdeFamily::base(
            "example3",
            Arc::new(Coordinatewise::new(
                |i, t, y| t / (i * i) as f64 * (y * y + 1.0),
                |i, t, y| 2.0 * t * y / (i * i) as f64,
            )),
        )
    }
}

/// `φ_i(t, y) = t/i · (y² + 1)` on the same balls.
pub fn example4_family() -> OdeFamily {
    OdeFamily {
        closed_form_bound: Some(Arc::new(|n| THETA_SUP * (1..=n).map(|i| 1.0 / i as f64).sum::<f64>())),
        ..OdeFamily::base(
            "example4",
            Arc::new(Coordinatewise::new(
                |i, t, y| t / i as f64 * (y * y + 1.0),
                |i, t, y| 2.0 * t * y / i as f64,
            )),
        )
    }
}

/// Example 3 with `φ_i ≡ 0` for `i > cutoff`, so `f_n = f_cutoff` beyond it.
pub fn example2_family(cutoff: usize) -> OdeFamily {
    OdeFamily {
        name: "example2".into(),
        field: Arc::new(Coordinatewise::new(
            move |i, t, y| if i <= cutoff { t / (i * i) as f64 * (y * y + 1.0) } else { 0.0 },
            move |i, t, y| if i <= cutoff { 2.0 * t * y / (i * i) as f64 } else { 0.0 },
        )),
        ..example3_family()
    }
}

pub fn zero_family() -> OdeFamily {
    OdeFamily::base("zero", Arc::new(Coordinatewise::new(|_, _, _| 0.0, |_, _, _| 0.0)))
}

pub fn linear_family(m: DMatrix<f64>) -> Result<OdeFamily> {
    let field = LinearUpper::new(m)?;
    let max = field.max_dim();
    Ok(OdeFamily {
        max_level: Some(max),
        ..OdeFamily::base("linear", Arc::new(field))
    })
}

pub fn coupled_quadratic_family() -> OdeFamily {
    OdeFamily {
        radius: RadiusSeq::Constant(1.0),
        ..OdeFamily::base("coupled_quadratic", Arc::new(CoupledQuadratic))
    }
}

/// On-disk description of a family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilyFile {
    /// `φ_i(t, y) = t^time_power / i^decay · Σ_k poly[k] y^k`.
    Coordinatewise {
        #[serde(default = "one_u32")]
        time_power: u32,
        decay: f64,
        poly: Vec<f64>,
        #[serde(flatten)]
        common: FamilyCommon,
    },
    /// `f(t, x) = M x`, `M` upper triangular given row by row.
    Linear {
        matrix: Vec<Vec<f64>>,
        #[serde(flatten)]
        common: FamilyCommon,
    },
}

fn one_u32() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyCommon {
    #[serde(default = "default_radius")]
    pub radius: RadiusSeq,
    #[serde(default = "default_half_width")]
    pub half_width: f64,
    #[serde(default)]
    pub t0: f64,
    #[serde(default = "default_norm")]
    pub norm: NormSpec,
    #[serde(default)]
    pub center: Vec<f64>,
    #[serde(default)]
    pub tau: Option<f64>,
}

fn default_radius() -> RadiusSeq {
    RadiusSeq::Constant(1.5)
}

fn default_half_width() -> f64 {
    1.0
}

fn default_norm() -> NormSpec {
    NormSpec::Ell1
}

impl FamilyFile {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn build(&self) -> Result<OdeFamily> {
        let (mut fam, common) = match self {
            FamilyFile::Coordinatewise {
                time_power,
                decay,
                poly,
                common,
            } => {
                if poly.is_empty() || poly.iter().any(|c| !c.is_finite()) || !decay.is_finite() {
                    return Err(Error::input("coordinatewise family needs finite decay and coefficients"));
                }
                let (p, k, dec) = (poly.clone(), *time_power as i32, *decay);
                let dp: Vec<f64> = poly.iter().enumerate().skip(1).map(|(j, c)| j as f64 * c).collect();
                let horner = |c: &[f64], y: f64| c.iter().rev().fold(0.0, |acc, &a| acc * y + a);
                let field = Coordinatewise::new(
                    move |i, t, y| t.powi(k) / (i as f64).powf(dec) * horner(&p, y),
                    move |i, t, y| t.powi(k) / (i as f64).powf(dec) * horner(&dp, y),
                );
                (OdeFamily::base("file", Arc::new(field)), common)
            }
            FamilyFile::Linear { matrix, common } => {
                let d = matrix.len();
                if d == 0 || matrix.iter().any(|r| r.len() != d) {
                    return Err(Error::input("linear family needs a square matrix"));
                }
                let m = DMatrix::from_fn(d, d, |i, j| matrix[i][j]);
                let mut fam = linear_family(m)?;
                fam.name = "file".into();
                (fam, common)
            }
        };
        common.norm.validate()?;
        if !(common.half_width > 0.0) {
            return Err(Error::input("half_width must be positive"));
        }
        match &common.radius {
            RadiusSeq::Constant(r) if !(*r > 0.0) => return Err(Error::input("radius must be positive")),
            RadiusSeq::Explicit(v) if v.is_empty() || v.iter().any(|r| !(*r > 0.0)) => {
                return Err(Error::input("radii must be positive"))
            }
            _ => {}
        }
        fam.radius = common.radius.clone();
        fam.half_width = common.half_width;
        fam.t0 = common.t0;
        fam.norm = common.norm;
        fam.center = common.center.clone();
        fam.suggested_tau = common.tau;
        if let RadiusSeq::Explicit(v) = &fam.radius {
            fam.max_level = Some(fam.max_level.map_or(v.len(), |m| m.min(v.len())));
        }
        Ok(fam)
    }
}

/// Look up a built-in family by name.
pub fn builtin_family(name: &str) -> Result<OdeFamily> {
    match name {
        "example2" => Ok(example2_family(3)),
        "example3" => Ok(example3_family()),
        "example4" => Ok(example4_family()),
        "zero" => Ok(zero_family()),
        "coupled_quadratic" => Ok(coupled_quadratic_family()),
        other => Err(Error::input(format!("unknown family {other:?}"))),
    }
}

/// How far `f_{n+1}(t, (x, 0))` is from `(f_n(t, x), 0)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct RestrictionReport {
    /// Max over samples of `|f_{n+1}(t, (x,0))_i − f_n(t, x)_i|`, `i < d_n`.
    pub component_violation: f64,
    /// Max over samples of `|f_{n+1}(t, (x,0))_i|`, `i ≥ d_n`.
    pub leak: f64,
}

impl RestrictionReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.component_violation <= tol && self.leak <= tol
    }
}

fn sample_in_ball<R: Rng>(rng: &mut R, fam: &OdeFamily, n: usize) -> Result<Vec<f64>> {
    let c = fam.center_at(n)?;
    let r = fam.radius_at(n)?;
    // Uniform direction in the unit ℓ¹-ish sense, scaled to stay inside the ball.
    let v: Vec<f64> = c.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
    let nv = fam.norm.norm(&v).max(1e-300);
    let s = rng.gen::<f64>() * r / nv;
    Ok(c.iter().zip(&v).map(|(a, b)| a + s * b).collect())
}

/// Samples `(t, x)` in `I × B̄_n` for `n < n_max` and compares levels.
pub fn restriction_check(fam: &OdeFamily, n_max: usize, samples: usize, seed: u64) -> Result<RestrictionReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = fam.interval();
    let mut rep = RestrictionReport::default();
    for n in 1..n_max {
        let d = fam.dim(n)?;
        let d1 = fam.dim(n + 1)?;
        for _ in 0..samples {
            let t = rng.gen_range(lo..=hi);
            let x = sample_in_ball(&mut rng, fam, n)?;
            let mut y = x.clone();
            y.resize(d1, 0.0);
            let a = fam.eval(n, t, &x)?;
            let b = fam.eval(n + 1, t, &y)?;
            for i in 0..d {
                rep.component_violation = rep.component_violation.max((b[i] - a[i]).abs());
            }
            for v in &b[d..] {
                rep.leak = rep.leak.max(v.abs());
            }
        }
    }
    Ok(rep)
}

/// Sampling grid for [`bound_estimate`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundGrid {
    pub t_nodes: usize,
    /// Nodes on each segment `a_n ± s·r_n·e_i`, `s ∈ [−1, 1]`.
    pub axis_nodes: usize,
}

impl Default for BoundGrid {
    fn default() -> Self {
        BoundGrid {
            t_nodes: 64,
            axis_nodes: 64,
        }
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (a + b)];
    }
    (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()
}

/// Sampled `(K0_n, K1_n)`: sups of `‖f_n‖_n` and `‖D₂f_n‖_n^op` over
/// `I × B̄_n(a_n, r_n)`.
///
/// Points lie on the coordinate segments through `a_n`, which contain the
/// vertices of `ℓ¹` balls. Jacobians are analytic when the family supplies
/// them and central differences otherwise.
pub fn bound_estimate(fam: &OdeFamily, n: usize, grid: &BoundGrid) -> Result<(f64, f64)> {
    if grid.t_nodes == 0 || grid.axis_nodes == 0 {
        return Err(Error::input("bound grid needs at least one node per axis"));
    }
    let c = fam.center_at(n)?;
    let r = fam.radius_at(n)?;
    let (lo, hi) = fam.interval();
    let ts = linspace(lo, hi, grid.t_nodes);
    let ss = linspace(-1.0, 1.0, grid.axis_nodes);
    if let (Some(cw), NormSpec::Ell1) = (fam.field.coordinatewise(), fam.norm) {
        return Ok(coordinatewise_bound(cw, &c, r, &ts, &ss));
    }
    let d = c.len();
    let mut k0 = 0.0_f64;
    let mut k1 = 0.0_f64;
    let mut x = c.clone();
    for &t in &ts {
        for i in 0..d {
            for &s in &ss {
                x[i] = c[i] + s * r;
                let f = fam.field.eval(n, t, &x);
                k0 = k0.max(fam.norm.norm(&f));
                let j = fam.field.jacobian(n, t, &x).unwrap_or_else(|| fd_jacobian(fam, n, t, &x));
                k1 = k1.max(fam.norm.operator_norm(&j));
            }
            x[i] = c[i];
        }
    }
    Ok((k0, k1))
}

fn fd_jacobian(fam: &OdeFamily, n: usize, t: f64, x: &[f64]) -> DMatrix<f64> {
    let d = x.len();
    let mut j = DMatrix::zeros(d, d);
    let mut y = x.to_vec();
    for k in 0..d {
        let h = 1e-6 * x[k].abs().max(1.0);
        y[k] = x[k] + h;
        let p = fam.field.eval(n, t, &y);
        y[k] = x[k] - h;
        let m = fam.field.eval(n, t, &y);
        y[k] = x[k];
        for i in 0..d {
            j[(i, k)] = (p[i] - m[i]) / (2.0 * h);
        }
    }
    j
}

/// `ℓ¹` bounds for coordinatewise fields in `O(d)` per sample: moving along
/// axis `k` only changes component `k`, and the Jacobian is diagonal.
fn coordinatewise_bound(cw: &Coordinatewise, c: &[f64], r: f64, ts: &[f64], ss: &[f64]) -> (f64, f64) {
    let d = c.len();
    let mut k0 = 0.0_f64;
    let mut k1 = 0.0_f64;
    for &t in ts {
        let base: Vec<f64> = (0..d).map(|i| cw.phi(i + 1, t, c[i]).abs()).collect();
        let dbase: Vec<f64> = (0..d).map(|i| cw.dphi(i + 1, t, c[i]).abs()).collect();
        let total: f64 = base.iter().sum();
        // Largest and second-largest |∂φ_i| at the centre, for max over i ≠ k.
        let (mut top, mut second, mut top_i) = (0.0_f64, 0.0_f64, usize::MAX);
        for (i, &v) in dbase.iter().enumerate() {
            if v > top {
                second = top;
                top = v;
                top_i = i;
            } else if v > second {
                second = v;
            }
        }
        for k in 0..d {
            let others = if k == top_i { second } else { top };
            for &s in ss {
                let y = c[k] + s * r;
                k0 = k0.max(total - base[k] + cw.phi(k + 1, t, y).abs());
                k1 = k1.max(others.max(cw.dphi(k + 1, t, y).abs()));
            }
        }
    }
    (k0, k1)
}

/// Whether a sequence looks bounded judging from increments over doubling
/// levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    Bounded,
    Unbounded,
    /// Fewer than 8 levels; no extrapolation attempted.
    Inconclusive,
}

/// Compares the last two increments `q(2^j) − q(2^{j−1})`. Convergent growth
/// shrinks them geometrically; a ratio `≥ 0.9` (logarithmic or faster
/// growth) is read as unbounded.
fn growth_trend(q: &[f64]) -> Trend {
    let mut idx = Vec::new();
    let mut n = 1;
    while n <= q.len() {
        idx.push(n - 1);
        n *= 2;
    }
    if idx.len() < 4 {
        return Trend::Inconclusive;
    }
    let inc: Vec<f64> = idx.windows(2).map(|w| q[w[1]] - q[w[0]]).collect();
    let last = inc[inc.len() - 1];
    let prev = inc[inc.len() - 2];
    if last <= 0.0 {
        return Trend::Bounded;
    }
    if prev <= 0.0 || last / prev >= 0.9 {
        Trend::Unbounded
    } else {
        Trend::Bounded
    }
}

/// One level of a [`BoundReport`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundRow {
    pub n: usize,
    pub k0: f64,
    pub k1: f64,
    pub k: f64,
    pub r: f64,
    pub r_over_k: f64,
    pub r_minus_tau_k: f64,
    pub closed_form_k: Option<f64>,
    /// Sampled bounds finite, so (A_n) holds on the ball.
    pub a_n: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub family: String,
    pub rows: Vec<BoundRow>,
    pub tau: f64,
    pub tau_source: String,
    pub inf_r_over_k: f64,
    pub inf_r_minus_tau_k: f64,
    pub b_trend: Trend,
    pub c_trend: Trend,
    pub a_all: bool,
    pub b: bool,
    pub c: bool,
    /// `r_n/K_n` strictly decreasing over the computed levels.
    pub r_over_k_strictly_decreasing: bool,
    /// Radius of the ball about the centre contained in every `V_n`.
    pub common_radius: f64,
    /// Sampled boundary points of `V_n` that fall outside `V_{n+1}`.
    pub ascending_violations: usize,
    pub warnings: Vec<String>,
}

/// Bounds per level and the (A_n)/(B)/(C) verdicts over `1..=n_max`.
///
/// `τ` is taken from `tau`, else the family's suggestion, else
/// `0.9 · min(T, inf r_n/K_n)`.
pub fn condition_check(fam: &OdeFamily, n_max: usize, tau: Option<f64>, grid: &BoundGrid) -> Result<BoundReport> {
    if n_max == 0 {
        return Err(Error::input("n_max must be at least 1"));
    }
    let mut rows = Vec::with_capacity(n_max);
    for n in 1..=n_max {
        let (k0, k1) = bound_estimate(fam, n, grid)?;
        let k = k0.max(k1);
        let r = fam.radius_at(n)?;
        rows.push(BoundRow {
            n,
            k0,
            k1,
            k,
            r,
            r_over_k: if k > 0.0 { r / k } else { f64::INFINITY },
            r_minus_tau_k: 0.0,
            closed_form_k: fam.closed_form_bound.as_ref().map(|f| f(n)),
            a_n: k0.is_finite() && k1.is_finite(),
        });
    }
    let inf_r_over_k = rows.iter().map(|r| r.r_over_k).fold(f64::INFINITY, f64::min);
    let (tau, tau_source) = match (tau, fam.suggested_tau) {
        (Some(t), _) => (t, "explicit".to_string()),
        (None, Some(t)) => (t, "family".to_string()),
        (None, None) => (0.9 * fam.half_width.min(inf_r_over_k), "default".to_string()),
    };
    if !(tau > 0.0) {
        return Err(Error::input(format!("tau must be positive, got {tau}")));
    }
    for row in &mut rows {
        row.r_minus_tau_k = row.r - tau * row.k;
    }
    let inf_r_minus_tau_k = rows.iter().map(|r| r.r_minus_tau_k).fold(f64::INFINITY, f64::min);
    let a_all = rows.iter().all(|r| r.a_n);

    let k_over_r: Vec<f64> = rows.iter().map(|r| r.k / r.r).collect();
    let tau_k_minus_r: Vec<f64> = rows.iter().map(|r| -r.r_minus_tau_k).collect();
    let b_trend = growth_trend(&k_over_r);
    let c_trend = growth_trend(&tau_k_minus_r);
    let b = inf_r_over_k > 0.0 && b_trend != Trend::Unbounded;
    let c = inf_r_minus_tau_k > 0.0 && c_trend != Trend::Unbounded;

    let mut warnings = Vec::new();
    let r_over_k_strictly_decreasing = rows.len() > 1 && rows.windows(2).all(|w| w[1].r_over_k < w[0].r_over_k);
    if b_trend == Trend::Unbounded {
        let shape = if r_over_k_strictly_decreasing { "decreases monotonically" } else { "decays" };
        warnings.push(format!("r_n/K_n {shape} toward 0: (B) fails in the limit"));
    }
    if c_trend == Trend::Unbounded {
        warnings.push("tau*K_n - r_n grows without a visible bound: (C) fails in the limit".into());
    }
    if tau > fam.half_width {
        warnings.push(format!("tau = {tau} exceeds the half-width T = {}", fam.half_width));
    }
    if b_trend == Trend::Inconclusive {
        warnings.push("fewer than 8 levels: trends not assessed".into());
    }

    // V_n = B(a_n, r_n − τK_n) ∩ B(a_{n0}, r_{n0} − τK_{n0}), n0 = 1.
    let rho: Vec<f64> = rows.iter().map(|r| r.r_minus_tau_k).collect();
    let mut ascending_violations = 0;
    for n in 1..n_max {
        let c_n = fam.center_at(n)?;
        let c_next = fam.center_at(n + 1)?;
        let c_0 = fam.center_at(1)?;
        for i in 0..c_n.len() {
            for sign in [-1.0, 1.0] {
                // Boundary point of V_n along axis i: the nearer of the two spheres.
                let mut p = c_n.clone();
                p[i] += sign * rho[n - 1].min(rho[0]).max(0.0);
                let mut q = p.clone();
                q.resize(c_next.len(), 0.0);
                let in_next = dist(fam, &q, &c_next) <= rho[n] + 1e-12
                    && dist(fam, &q, &pad(&c_0, c_next.len())) <= rho[0] + 1e-12;
                if !in_next {
                    ascending_violations += 1;
                }
            }
        }
    }
    if ascending_violations > 0 {
        warnings.push(format!(
            "{ascending_violations} sampled boundary points of V_n lie outside V_(n+1)"
        ));
    }
    let common_radius = rho.iter().copied().fold(f64::INFINITY, f64::min).max(0.0);

    Ok(BoundReport {
        family: fam.name.clone(),
        rows,
        tau,
        tau_source,
        inf_r_over_k,
        inf_r_minus_tau_k,
        b_trend,
        c_trend,
        a_all,
        b,
        c,
        r_over_k_strictly_decreasing,
        common_radius,
        ascending_violations,
        warnings,
    })
}

fn pad(v: &[f64], d: usize) -> Vec<f64> {
    let mut w = v.to_vec();
    w.resize(d, 0.0);
    w
}

fn dist(fam: &OdeFamily, a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    fam.norm.norm(&diff)
}

impl BoundReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,k0,k1,k,r,r_over_k,r_minus_tau_k,closed_form_k,a_n\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{}\n",
                r.n,
                r.k0,
                r.k1,
                r.k,
                r.r,
                r.r_over_k,
                r.r_minus_tau_k,
                r.closed_form_k.map_or(String::new(), |v| format!("{v:.16e}")),
                r.a_n
            ));
        }
        out
    }
}

/// A solution sampled at the RK4 nodes of `[t0 − τ, t0 + τ]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LimitTrajectory {
    pub level: usize,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl LimitTrajectory {
    pub fn as_dl(&self, levels: &LevelDims) -> Result<Vec<(f64, DLVector)>> {
        self.times
            .iter()
            .zip(&self.states)
            .map(|(&t, s)| Ok((t, crate::dirlim::dl_inject(s, levels)?)))
            .collect()
    }
}

/// Solves at the minimal level of `a`; see [`solve_at_level`].
pub fn solve_limit_ode(fam: &OdeFamily, a: &DLVector, t0: f64, tau: f64, h: f64) -> Result<LimitTrajectory> {
    solve_at_level(fam, a.min_level(), a, t0, tau, h)
}

/// Fixed-step RK4 of `x' = f_n(t, x)` from `x(t0) = a` forwards and
/// backwards over `τ`, with steps of at most `h`.
///
/// Leaving `B̄(a_n, r_n)` (the centre and radius of level `n`) is a domain
/// error carrying the exit time.
pub fn solve_at_level(fam: &OdeFamily, n: usize, a: &DLVector, t0: f64, tau: f64, h: f64) -> Result<LimitTrajectory> {
    if !(h > 0.0) || !(tau >= 0.0) {
        return Err(Error::input("need h > 0 and tau ≥ 0"));
    }
    let x0 = a.at_level(n, &fam.levels)?;
    let c = fam.center_at(n)?;
    let r = fam.radius_at(n)?;
    let inside = |x: &[f64]| dist(fam, x, &c) <= r;
    if !inside(&x0) {
        return Err(Error::Domain {
            detail: format!("initial point outside the closed ball of radius {r}"),
            t: Some(t0),
            point: x0,
        });
    }
    let steps = ((tau / h).ceil() as usize).max(1);
    let run = |t1: f64| -> Result<Vec<(f64, Vec<f64>)>> {
        let mut out = Vec::with_capacity(steps + 1);
        rk4_integrate(
            |t, y| Ok(fam.field.eval(n, t, y)),
            t0,
            t1,
            &x0,
            steps,
            |_, t, y| {
                if !inside(y) {
                    return Err(Error::Domain {
                        detail: format!("solution left the closed ball of radius {r}"),
                        t: Some(t),
                        point: y.to_vec(),
                    });
                }
                out.push((t, y.to_vec()));
                Ok(())
            },
        )?;
        Ok(out)
    };
    let fwd = run(t0 + tau)?;
    let bwd = run(t0 - tau)?;
    let mut times = Vec::with_capacity(2 * steps + 1);
    let mut states = Vec::with_capacity(2 * steps + 1);
    for (t, y) in bwd.into_iter().skip(1).rev().chain(fwd) {
        times.push(t);
        states.push(y);
    }
    Ok(LimitTrajectory { level: n, times, states })
}

/// `y_i(t) = tan(t²/(2i²) + arctan y_i(0))`, the exact solution of
/// Example 3 from `t0 = 0`.
pub fn example3_exact(y0: &[f64], t: f64) -> Vec<f64> {
    y0.iter()
        .enumerate()
        .map(|(k, &y)| {
            let i = (k + 1) as f64;
            (t * t / (2.0 * i * i) + y.atan()).tan()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dirlim::dl_inject;

    #[test]
    fn example_component_values() {
        let f = example3_family();
        assert_eq!(f.eval(2, 0.0, &[0.7, -0.3]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(f.eval(2, 1.0, &[0.0, 0.0]).unwrap()[1], 0.25);
        assert!(f.eval(2, 1.0, &[0.0]).is_err());
    }

    #[test]
    fn zero_family_bounds_vanish() {
        let f = zero_family();
        assert_eq!(bound_estimate(&f, 3, &BoundGrid::default()).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn linear_field_k1_is_operator_norm() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, -2.0, 0.5, 0.0, 3.0, 1.0, 0.0, 0.0, -0.5]);
        let f = linear_family(m.clone()).unwrap();
        let (_, k1) = bound_estimate(&f, 3, &BoundGrid::default()).unwrap();
        // ℓ¹ operator norm: max column sum.
        assert_eq!(k1, 5.0);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        assert!(linear_family(bad).is_err());
    }

    #[test]
    fn fast_bounds_match_generic_sampling() {
        let mut f = example3_family();
        let grid = BoundGrid {
            t_nodes: 9,
            axis_nodes: 9,
        };
        let fast = bound_estimate(&f, 5, &grid).unwrap();
        let cw = f.field.clone();
        // Same field through the generic path with the ℓ¹ norm.
        f.norm = NormSpec::Ell1;
        f.field = Arc::new(Wrapped(cw));
        let slow = bound_estimate(&f, 5, &grid).unwrap();
        assert!((fast.0 - slow.0).abs() < 1e-12 && (fast.1 - slow.1).abs() < 1e-12);
    }

    #[derive(Debug)]
    struct Wrapped(Arc<dyn LevelField>);
    impl LevelField for Wrapped {
        fn eval(&self, n: usize, t: f64, x: &[f64]) -> Vec<f64> {
            self.0.eval(n, t, x)
        }
        fn jacobian(&self, n: usize, t: f64, x: &[f64]) -> Option<DMatrix<f64>> {
            self.0.jacobian(n, t, x)
        }
    }

    #[test]
    fn example3_restriction_leaks_only_new_components() {
        let rep = restriction_check(&example3_family(), 5, 20, 0).unwrap();
        assert_eq!(rep.component_violation, 0.0);
        assert!(rep.leak > 0.0);
        let rep = restriction_check(&coupled_quadratic_family(), 5, 20, 0).unwrap();
        assert!(rep.holds(0.0));
    }

    #[test]
    fn zero_family_is_constant() {
        let f = zero_family();
        let a = dl_inject(&[0.2, 0.1], &f.levels).unwrap();
        let tr = solve_limit_ode(&f, &a, 0.0, 0.5, 0.1).unwrap();
        assert!(tr.states.iter().all(|s| s == &vec![0.2, 0.1]));
        assert_eq!(tr.times.first(), Some(&-0.5));
        assert_eq!(tr.times.last(), Some(&0.5));
    }

    #[test]
    fn example3_matches_tan_solution() {
        let f = example3_family();
        let tau = f.suggested_tau.unwrap();
        let y0 = [0.1, 0.2];
        let a = dl_inject(&y0, &f.levels).unwrap();
        let tr = solve_limit_ode(&f, &a, 0.0, tau, 1e-3).unwrap();
        for (t, s) in tr.times.iter().zip(&tr.states) {
            let exact = example3_exact(&y0, *t);
            for (u, v) in s.iter().zip(&exact) {
                assert!((u - v).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn leaving_the_ball_is_a_domain_error() {
        let f = example4_family();
        let a = dl_inject(&[1.4], &f.levels).unwrap();
        let err = solve_limit_ode(&f, &a, 0.0, 1.0, 1e-2).unwrap_err();
        assert!(matches!(err, Error::Domain { t: Some(_), .. }));
    }

    #[test]
    fn family_file_round_trip() {
        let text = r#"{"kind":"coordinatewise","decay":2,"poly":[1,0,1],"radius":{"constant":1.5}}"#;
        let fam = FamilyFile::parse(text).unwrap().build().unwrap();
        let ex3 = example3_family();
        let x = [0.3, -0.4, 0.1];
        assert_eq!(fam.eval(3, 0.7, &x).unwrap(), ex3.eval(3, 0.7, &x).unwrap());
        assert!(FamilyFile::parse("{\"kind\":\"coordinatewise\"").is_err());
        assert!(FamilyFile::parse(r#"{"kind":"linear","matrix":[[1,0],[2,1]]}"#)
            .unwrap()
            .build()
            .is_err());
    }

    #[test]
    fn trend_classification() {
        let harmonic: Vec<f64> = (1..=64).map(|n| (1..=n).map(|i| 1.0 / i as f64).sum()).collect();
        assert_eq!(growth_trend(&harmonic), Trend::Unbounded);
        let basel: Vec<f64> = (1..=64).map(|n| (1..=n).map(|i| 1.0 / (i * i) as f64).sum()).collect();
        assert_eq!(growth_trend(&basel), Trend::Bounded);
        assert_eq!(growth_trend(&basel[..5]), Trend::Inconclusive);
    }

    #[test]
    fn eventually_constant_family_passes() {
        let rep = condition_check(&example2_family(3), 16, None, &BoundGrid::default()).unwrap();
        assert!(rep.a_all && rep.b && rep.c);
    }

    #[test]
    fn coupled_solution_is_level_independent() {
        let f = coupled_quadratic_family();
        let a = dl_inject(&[0.3, -0.2], &f.levels).unwrap();
        let lo = solve_at_level(&f, 2, &a, 0.0, 0.5, 1e-2).unwrap();
        let hi = solve_at_level(&f, 5, &a, 0.0, 0.5, 1e-2).unwrap();
        for (u, v) in lo.states.iter().zip(&hi.states) {
            assert_eq!(&v[..2], &u[..]);
            assert!(v[2..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn example3_projection_is_level_independent() {
        let f = example3_family();
        let a = dl_inject(&[0.1, 0.2], &f.levels).unwrap();
        let lo = solve_at_level(&f, 2, &a, 0.0, 0.1, 1e-2).unwrap();
        let hi = solve_at_level(&f, 5, &a, 0.0, 0.1, 1e-2).unwrap();
        for (u, v) in lo.states.iter().zip(&hi.states) {
            assert_eq!(&v[..2], &u[..]);
        }
    }

    #[test]
    fn rk4_error_drops_fourth_order() {
        let f = example3_family();
        let y0 = [0.3, -0.2];
        let a = dl_inject(&y0, &f.levels).unwrap();
        let err = |h: f64| {
            let tr = solve_limit_ode(&f, &a, 0.0, 0.8, h).unwrap();
            let exact = example3_exact(&y0, 0.8);
            let last = tr.states.last().unwrap();
            last.iter().zip(&exact).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
        };
        assert!(err(0.2) / err(0.1) >= 8.0);
    }

    #[test]
    fn example3_constants() {
        let f = example3_family();
        let rep = condition_check(&f, 50, None, &BoundGrid::default()).unwrap();
        let k = THETA_SUP * std::f64::consts::PI.powi(2) / 6.0;
        assert!(rep.rows.iter().all(|r| r.k <= k && r.k <= r.closed_form_k.unwrap()));
        assert!(rep.tau > 0.17 && rep.tau < 0.18);
        assert!(rep.a_all && rep.b && rep.c);
        // Every V_n contains the ball of radius 1/2 about the origin.
        assert!(rep.common_radius >= 0.5);
    }

    #[test]
    fn example4_fails_b() {
        let rep = condition_check(&example4_family(), 64, None, &BoundGrid::default()).unwrap();
        assert!(!rep.b);
        assert!(rep.r_over_k_strictly_decreasing);
        assert_eq!(rep.b_trend, Trend::Unbounded);
    }
}
