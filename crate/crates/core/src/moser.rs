//! Moser's path method.
//!
//! For a family `ω^t` with `ω̇^t = dα^t`, the field `X^t` defined by
//! `ω^t(X^t, ·) = −α^t` has a flow with `F_t^* ω^t = ω^0`. Primitives are the
//! radial (Poincaré lemma) primitives about the anchor point `x0`, which must
//! lie in a convex region. Darboux charts run the flow backwards from `t = 1`,
//! giving `G = F_1^{-1}` with `G^* ω(x0) = ω`, and finish with a linear
//! Darboux basis of `ω(x0)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::form::{sample_ball, FormField, Region};
use crate::quadrature::GaussLegendre;
use crate::rk4::rk4_integrate;
use crate::symplin::{linear_darboux, AntisymMatrix, Covector, DEFAULT_MARGIN};

/// Numerical settings shared by the flow-based operations.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MoserOptions {
    pub steps: usize,
    pub quad_nodes: usize,
    pub margin: f64,
    /// Step of the directional central differences used for the Jacobian.
    pub fd_step: f64,
    /// Radius of the chart domain about `x0`; `None` takes half the depth
    /// of `x0` in the field's region.
    pub chart_radius: Option<f64>,
    /// Reject fields whose sampled closedness residual exceeds this.
    pub closedness_tol: f64,
}

impl Default for MoserOptions {
    fn default() -> Self {
        MoserOptions {
            steps: 100,
            quad_nodes: 64,
            margin: DEFAULT_MARGIN,
            fd_step: 1e-5,
            chart_radius: None,
            closedness_tol: 1e-5,
        }
    }
}

impl MoserOptions {
    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::input("steps must be at least 1"));
        }
        if self.quad_nodes == 0 {
            return Err(Error::input("quadrature needs at least one node"));
        }
        if !(self.fd_step > 0.0) || !(self.margin >= 0.0) {
            return Err(Error::input("fd_step must be positive and margin non-negative"));
        }
        Ok(())
    }
}

fn check_points(region: &Region, points: &[Vec<f64>]) -> Result<()> {
    for p in points {
        if !region.contains(p) {
            return Err(Error::input(format!("sample point {p:?} lies outside the region")));
        }
    }
    Ok(())
}

/// Partial derivatives `∂_i ω` at `x` by central differences.
pub(crate) fn form_partials(field: &dyn FormField, x: &[f64], h: f64) -> Vec<DMatrix<f64>> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            y[i] = x[i] + h;
            let plus = field.eval(&y).into_matrix();
            y[i] = x[i] - h;
            let minus = field.eval(&y).into_matrix();
            y[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Max over `i < j < k` of `|∂_i ω_jk + ∂_j ω_ki + ∂_k ω_ij|` from the
/// partials at one point.
pub(crate) fn cyclic_residual(partials: &[DMatrix<f64>]) -> f64 {
    let d = partials.len();
    let mut worst = 0.0_f64;
    for i in 0..d {
        for j in i + 1..d {
            for k in j + 1..d {
                let v = partials[i][(j, k)] + partials[j][(k, i)] + partials[k][(i, j)];
                worst = worst.max(v.abs());
            }
        }
    }
    worst
}

/// Finite-difference residual of `dω = 0` over `points`.
pub fn closedness_check(field: &dyn FormField, points: &[Vec<f64>], h_fd: f64) -> Result<f64> {
    if !(h_fd > 0.0) {
        return Err(Error::input("h_fd must be positive"));
    }
    for p in points {
        Error::check_dim(field.dim(), p.len())?;
    }
    check_points(field.region(), points)?;
    Ok(points
        .iter()
        .map(|p| cyclic_residual(&form_partials(field, p, h_fd)))
        .fold(0.0, f64::max))
}

/// `∫₀¹ s · (f(c + s(x−c)) − a)ᵀ (x−c) ds`, the coefficients of the radial
/// primitive of `f − a` about `c`, with `a` a constant matrix or zero.
fn radial_integral(
    field: &dyn FormField,
    minus: Option<&DMatrix<f64>>,
    center: &[f64],
    x: &[f64],
    gl: &GaussLegendre,
) -> DVector<f64> {
    let d = x.len();
    let dx: Vec<f64> = x.iter().zip(center).map(|(a, c)| a - c).collect();
    let mut acc = DVector::zeros(d);
    if dx.iter().all(|&v| v == 0.0) {
        return acc;
    }
    let mut y = vec![0.0; d];
    let mut m = DMatrix::zeros(d, d);
    for (&s, &w) in gl.nodes.iter().zip(&gl.weights) {
        for i in 0..d {
            y[i] = center[i] + s * dx[i];
        }
        field.eval_into(&y, &mut m);
        if let Some(a) = minus {
            m -= a;
        }
        let ws = w * s;
        let ms = m.as_slice();
        for (j, a) in acc.iter_mut().enumerate() {
            let col = &ms[j * d..(j + 1) * d];
            let mut sum = 0.0;
            for (c, &di) in col.iter().zip(&dx) {
                sum += c * di;
            }
            *a += ws * sum;
        }
    }
    acc
}

/// Radial primitive `α_x = ∫₀¹ s · ω_{c+s(x−c)}(x − c, ·) ds` about `center`,
/// with `dα = ω` when `ω` is closed.
///
/// Regions are convex, so the segment stays inside whenever both endpoints do.
pub fn radial_primitive(field: &dyn FormField, center: &[f64], x: &[f64], quad_nodes: usize) -> Result<Covector> {
    Error::check_dim(field.dim(), center.len())?;
    Error::check_dim(field.dim(), x.len())?;
    for p in [center, x] {
        if !field.region().contains(p) {
            return Err(Error::Domain {
                detail: "radial segment leaves the region".into(),
                t: None,
                point: p.to_vec(),
            });
        }
    }
    let gl = GaussLegendre::new(quad_nodes);
    Ok(Covector(radial_integral(field, None, center, x, &gl)))
}

/// Which one-parameter family of forms a path follows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PathMode {
    /// `ω^t = ω(x0) + t (ω − ω(x0))`.
    Linear,
    /// `ω^t = e^{s t} ω`.
    ExpScaling(f64),
}

/// A family `t ↦ ω^t` together with its radial primitives about `x0`.
#[derive(Clone, Debug)]
pub struct FormPath {
    base: Arc<dyn FormField>,
    anchor: AntisymMatrix,
    x0: Vec<f64>,
    mode: PathMode,
    gl: GaussLegendre,
}

impl FormPath {
    pub fn new(base: Arc<dyn FormField>, x0: &[f64], mode: PathMode, quad_nodes: usize) -> Result<Self> {
        Error::check_dim(base.dim(), x0.len())?;
        if !base.region().contains(x0) {
            return Err(Error::Domain {
                detail: "anchor point outside the form's region".into(),
                t: None,
                point: x0.to_vec(),
            });
        }
        if quad_nodes == 0 {
            return Err(Error::input("quadrature needs at least one node"));
        }
        let anchor = base.eval(x0);
        Ok(FormPath {
            base,
            anchor,
            x0: x0.to_vec(),
            mode,
            gl: GaussLegendre::new(quad_nodes),
        })
    }

    pub fn linear(base: Arc<dyn FormField>, x0: &[f64], quad_nodes: usize) -> Result<Self> {
        FormPath::new(base, x0, PathMode::Linear, quad_nodes)
    }

    pub fn exp_scaling(base: Arc<dyn FormField>, x0: &[f64], s: f64, quad_nodes: usize) -> Result<Self> {
        FormPath::new(base, x0, PathMode::ExpScaling(s), quad_nodes)
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn anchor(&self) -> &AntisymMatrix {
        &self.anchor
    }

    pub fn base(&self) -> &Arc<dyn FormField> {
        &self.base
    }

    pub fn mode(&self) -> PathMode {
        self.mode
    }

    pub fn region(&self) -> &Region {
        self.base.region()
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> AntisymMatrix {
        match self.mode {
            PathMode::Linear => {
                let w = self.base.eval(x).into_matrix();
                let a = self.anchor.matrix();
                AntisymMatrix::from_raw(a + (w - a) * t)
            }
            PathMode::ExpScaling(s) => self.base.eval(x).scaled((s * t).exp()),
        }
    }

    /// The primitive `α^t_x` of `ω̇^t` about `x0`.
    pub fn primitive(&self, t: f64, x: &[f64]) -> Covector {
        Covector(self.primitive_raw(t, x))
    }

    fn primitive_raw(&self, t: f64, x: &[f64]) -> DVector<f64> {
        match self.mode {
            PathMode::Linear => {
                // Integrating ω − ω(x0) directly keeps α exactly zero where the
                // two agree, instead of cancelling two O(1) terms.
                radial_integral(self.base.as_ref(), Some(self.anchor.matrix()), &self.x0, x, &self.gl)
            }
            PathMode::ExpScaling(s) => {
                let k = s * (s * t).exp();
                if k == 0.0 {
                    return DVector::zeros(x.len());
                }
                radial_integral(self.base.as_ref(), None, &self.x0, x, &self.gl) * k
            }
        }
    }

    /// `X^t(x)` with the path's own primitive.
    fn field(&self, t: f64, x: &[f64], margin: f64) -> Result<DVector<f64>> {
        let alpha = self.primitive_raw(t, x);
        solve_moser(&self.eval(t, x), &alpha, t, x, margin)
    }

    /// `X^t(x)` by LU, for finite-difference neighbours of a point whose
    /// degeneracy was already checked.
    fn field_nearby(&self, t: f64, x: &[f64]) -> Result<DVector<f64>> {
        let alpha = self.primitive_raw(t, x);
        if alpha.iter().all(|&v| v == 0.0) {
            return Ok(alpha);
        }
        self.eval(t, x).into_matrix().lu().solve(&alpha).ok_or_else(|| Error::Degenerate {
            sigma_min: 0.0,
            margin: 0.0,
            t: Some(t),
            s: None,
            point: Some(x.to_vec()),
        })
    }
}

fn solve_moser(omega_t: &AntisymMatrix, alpha: &DVector<f64>, t: f64, x: &[f64], margin: f64) -> Result<DVector<f64>> {
    let svd = omega_t.matrix().clone().svd(true, true);
    let sigma_min = svd.singular_values.min();
    if sigma_min < margin {
        return Err(Error::Degenerate {
            sigma_min,
            margin,
            t: Some(t),
            s: None,
            point: Some(x.to_vec()),
        });
    }
    if alpha.iter().all(|&v| v == 0.0) {
        return Ok(DVector::zeros(x.len()));
    }
    // ω^t(X, ·) = −α reads Wᵀ X = −α, i.e. W X = α for antisymmetric W.
    svd.solve(alpha, 0.0).map_err(|e| Error::input(e.to_string()))
}

/// The Moser vector field at `(t, x)` for a caller-supplied primitive.
pub fn moser_vector_field(
    path: &FormPath,
    alpha: impl Fn(&[f64]) -> Result<Covector>,
    t: f64,
    x: &[f64],
    margin: f64,
) -> Result<Vec<f64>> {
    Error::check_dim(path.dim(), x.len())?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::input(format!("t = {t} outside [0, 1]")));
    }
    if !path.region().contains(x) {
        return Err(Error::Domain {
            detail: "point outside the form's region".into(),
            t: Some(t),
            point: x.to_vec(),
        });
    }
    let a = alpha(x)?;
    Error::check_dim(path.dim(), a.dim())?;
    Ok(solve_moser(&path.eval(t, x), &a.0, t, x, margin)?.as_slice().to_vec())
}

/// Positions and Jacobians of one trajectory at every step.
#[derive(Clone, Debug)]
pub struct FlowTrajectory {
    pub times: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    pub jacobians: Vec<DMatrix<f64>>,
}

impl FlowTrajectory {
    pub fn last(&self) -> (&[f64], &DMatrix<f64>) {
        (self.points.last().unwrap(), self.jacobians.last().unwrap())
    }
}

/// Integrates the flow of `X^t` and its Jacobian from `t_start` to `t_end`.
///
/// The state is `(y, D)` with `Ḋ = DX·D`; each column of `DX·D` is a directional
/// central difference of `X` along the matching column of `D`.
fn integrate_flow(
    path: &FormPath,
    x: &[f64],
    t_start: f64,
    t_end: f64,
    opts: &MoserOptions,
    mut observe: impl FnMut(f64, &[f64], &DMatrix<f64>) -> Result<()>,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let d = path.dim();
    let h = opts.fd_step;
    let mut y0 = x.to_vec();
    let eye = DMatrix::<f64>::identity(d, d);
    y0.extend_from_slice(eye.as_slice());
    let rhs = |t: f64, y: &[f64]| -> Result<Vec<f64>> {
        let p = &y[..d];
        let mut out = path.field(t, p, opts.margin)?.as_slice().to_vec();
        let mut q = vec![0.0; d];
        for j in 0..d {
            let col = &y[d + j * d..d + (j + 1) * d];
            for i in 0..d {
                q[i] = p[i] + h * col[i];
            }
            let plus = path.field_nearby(t, &q)?;
            for i in 0..d {
                q[i] = p[i] - h * col[i];
            }
            let minus = path.field_nearby(t, &q)?;
            out.extend((plus - minus).iter().map(|v| v / (2.0 * h)));
        }
        Ok(out)
    };
    let region = path.region().clone();
    let y = rk4_integrate(rhs, t_start, t_end, &y0, opts.steps, |_, t, y| {
        let p = &y[..d];
        if !region.contains(p) {
            return Err(Error::Domain {
                detail: "Moser trajectory left the region".into(),
                t: Some(t),
                point: p.to_vec(),
            });
        }
        observe(t, p, &DMatrix::from_column_slice(d, d, &y[d..]))
    })?;
    Ok((y[..d].to_vec(), DMatrix::from_column_slice(d, d, &y[d..])))
}

/// The forward flow `F_t` of one point, `t ∈ [0, 1]`, with `F_t^* ω^t = ω^0`.
pub fn moser_flow(path: &FormPath, x_start: &[f64], opts: &MoserOptions) -> Result<FlowTrajectory> {
    opts.validate()?;
    Error::check_dim(path.dim(), x_start.len())?;
    if !path.region().contains(x_start) {
        return Err(Error::Domain {
            detail: "start point outside the form's region".into(),
            t: Some(0.0),
            point: x_start.to_vec(),
        });
    }
    let mut traj = FlowTrajectory {
        times: Vec::with_capacity(opts.steps + 1),
        points: Vec::with_capacity(opts.steps + 1),
        jacobians: Vec::with_capacity(opts.steps + 1),
    };
    integrate_flow(path, x_start, 0.0, 1.0, opts, |t, p, dm| {
        traj.times.push(t);
        traj.points.push(p.to_vec());
        traj.jacobians.push(dm.clone());
        Ok(())
    })?;
    Ok(traj)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowDirection {
    /// `x ↦ F_1(x)`.
    Forward,
    /// `x ↦ F_1^{-1}(x)`, integrating from `t = 1` back to `t = 0`.
    Inverse,
}

#[derive(Clone, Debug)]
enum ChartMap {
    /// `x ↦ x0 + M (x − x0)`.
    Affine { m: DMatrix<f64> },
    /// A Moser flow map followed by `y ↦ x0 + M (y − x0)`.
    Flow {
        path: FormPath,
        direction: FlowDirection,
        opts: MoserOptions,
        post: DMatrix<f64>,
    },
}

/// Pullback residuals recorded for a chart.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ResidualReport {
    pub samples: usize,
    pub max_residual: f64,
    /// `(t, residual)` of the intermediate pullback identities.
    pub profile: Vec<(f64, f64)>,
}

/// A chart `x ↦ F(x)` with Jacobian, defined on `domain`.
#[derive(Clone, Debug)]
pub struct Chart {
    map: ChartMap,
    x0: Vec<f64>,
    domain: Region,
    pub residual_report: Option<ResidualReport>,
}

impl Chart {
    pub fn identity(x0: &[f64], domain: Region) -> Self {
        Chart::affine(x0, DMatrix::identity(x0.len(), x0.len()), domain)
    }

    /// `x ↦ x0 + M (x − x0)`.
    pub fn affine(x0: &[f64], m: DMatrix<f64>, domain: Region) -> Self {
        Chart {
            map: ChartMap::Affine { m },
            x0: x0.to_vec(),
            domain,
            residual_report: None,
        }
    }

    /// The time-one map of the path's Moser flow, or its inverse.
    pub fn flow(path: FormPath, direction: FlowDirection, opts: MoserOptions, domain: Region) -> Result<Self> {
        opts.validate()?;
        let d = path.dim();
        Ok(Chart {
            x0: path.x0().to_vec(),
            map: ChartMap::Flow {
                path,
                direction,
                opts,
                post: DMatrix::identity(d, d),
            },
            domain,
            residual_report: None,
        })
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn domain(&self) -> &Region {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    /// `F(x)` and `DF(x)`.
    pub fn apply(&self, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        Error::check_dim(self.dim(), x.len())?;
        match &self.map {
            ChartMap::Affine { m } => Ok((self.affine_apply(m, x), m.clone())),
            ChartMap::Flow {
                path,
                direction,
                opts,
                post,
            } => {
                let (t0, t1) = match direction {
                    FlowDirection::Forward => (0.0, 1.0),
                    FlowDirection::Inverse => (1.0, 0.0),
                };
                let (y, dy) = integrate_flow(path, x, t0, t1, opts, |_, _, _| Ok(()))?;
                Ok((self.affine_apply(post, &y), post * dy))
            }
        }
    }

    fn affine_apply(&self, m: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
        let dx = DVector::from_iterator(x.len(), x.iter().zip(&self.x0).map(|(a, c)| a - c));
        let y = m * dx;
        self.x0.iter().zip(y.iter()).map(|(c, v)| c + v).collect()
    }

    /// The same chart followed by `y ↦ x0 + M (y − x0)`.
    fn then_linear(mut self, m: &DMatrix<f64>) -> Self {
        self.map = match self.map {
            ChartMap::Affine { m: inner } => ChartMap::Affine { m: m * inner },
            ChartMap::Flow {
                path,
                direction,
                opts,
                post,
            } => ChartMap::Flow {
                path,
                direction,
                opts,
                post: m * post,
            },
        };
        self
    }
}

/// The constant or varying form a chart should pull back.
#[derive(Clone, Debug)]
pub enum Target {
    Constant(AntisymMatrix),
    Field(Arc<dyn FormField>),
}

impl Target {
    fn eval(&self, y: &[f64]) -> DMatrix<f64> {
        match self {
            Target::Constant(m) => m.matrix().clone(),
            Target::Field(f) => f.eval(y).into_matrix(),
        }
    }
}

/// `max |DF(x)ᵀ · target(F(x)) · DF(x) − source(x)|` over `points`.
pub fn verify_pullback(chart: &Chart, source: &dyn FormField, target: &Target, points: &[Vec<f64>]) -> Result<f64> {
    check_points(chart.domain(), points)?;
    let mut worst = 0.0_f64;
    for x in points {
        Error::check_dim(source.dim(), x.len())?;
        let (y, dm) = chart.apply(x)?;
        let pulled = dm.transpose() * target.eval(&y) * &dm;
        worst = worst.max((pulled - source.eval(x).into_matrix()).amax());
    }
    Ok(worst)
}

fn chart_domain(field: &dyn FormField, x0: &[f64], opts: &MoserOptions) -> Result<Region> {
    let depth = field.region().depth(x0);
    let radius = match opts.chart_radius {
        Some(r) if r > 0.0 => r,
        Some(r) => return Err(Error::input(format!("chart radius must be positive, got {r}"))),
        None if depth.is_finite() => 0.5 * depth,
        None => 1.0,
    };
    if radius > depth {
        return Err(Error::input(format!(
            "chart radius {radius} exceeds the distance {depth} from x0 to the region boundary"
        )));
    }
    Ok(Region::ball(x0.to_vec(), radius))
}

fn closedness_samples(field: &dyn FormField, x0: &[f64], radius: f64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut pts = sample_ball(&mut rng, x0, radius, 16);
    pts.push(x0.to_vec());
    pts.retain(|p| field.region().contains(p));
    pts
}

/// A chart `C` on a ball about `x0` with `C^* J_std = ω` and `C(x0) = x0`.
///
/// `C(x) = x0 + A^{-1}(F_1^{-1}(x) − x0)`, where `F` is the Moser flow of the
/// linear path anchored at `ω(x0)` and `Aᵀ ω(x0) A = J_std`.
pub fn darboux_chart(field: Arc<dyn FormField>, x0: &[f64], opts: &MoserOptions) -> Result<Chart> {
    opts.validate()?;
    Error::check_dim(field.dim(), x0.len())?;
    if !field.region().contains(x0) {
        return Err(Error::Domain {
            detail: "base point outside the form's region".into(),
            t: None,
            point: x0.to_vec(),
        });
    }
    let anchor = field.eval(x0);
    let a = linear_darboux(&anchor, opts.margin).map_err(|e| match e {
        Error::Degenerate {
            sigma_min, margin, ..
        } => Error::Degenerate {
            sigma_min,
            margin,
            t: None,
            s: None,
            point: Some(x0.to_vec()),
        },
        other => other,
    })?;
    let domain = chart_domain(field.as_ref(), x0, opts)?;
    let Region::Ball { radius, .. } = &domain else { unreachable!() };
    let residual = closedness_check(field.as_ref(), &closedness_samples(field.as_ref(), x0, *radius), 1e-4)?;
    if residual > opts.closedness_tol {
        return Err(Error::input(format!(
            "form is not closed: finite-difference residual {residual:e} exceeds {:e}",
            opts.closedness_tol
        )));
    }
    let a_inv = a.try_inverse().ok_or_else(|| Error::input("linear Darboux basis is singular"))?;
    let path = FormPath::linear(field, x0, opts.quad_nodes)?;
    Ok(Chart::flow(path, FlowDirection::Inverse, opts.clone(), domain)?.then_linear(&a_inv))
}

/// The time-one Moser map for `ω^{s,t} = e^{st} ω`, satisfying
/// `F^*(e^{s} ω) = ω`.
pub fn exp_scaling_chart(field: Arc<dyn FormField>, x0: &[f64], s: f64, opts: &MoserOptions) -> Result<Chart> {
    opts.validate()?;
    let domain = chart_domain(field.as_ref(), x0, opts)?;
    let path = FormPath::exp_scaling(field, x0, s, opts.quad_nodes)?;
    let chart = Chart::flow(path, FlowDirection::Forward, opts.clone(), domain)?;
    Ok(chart)
}

/// Tags an exp-path degeneracy with its `s`.
pub fn with_scaling(err: Error, s: f64) -> Error {
    match err {
        Error::Degenerate {
            sigma_min,
            margin,
            t,
            point,
            ..
        } => Error::Degenerate {
            sigma_min,
            margin,
            t,
            s: Some(s),
            point,
        },
        other => other,
    }
}

/// Residuals of the intermediate identities along a flow chart at
/// `t ∈ {0, ¼, ½, ¾, 1}`.
///
/// For an inverse chart `G_t = F_t ∘ F_1^{-1}` the identity is
/// `G_t^* ω^t = ω^1`; for a forward chart it is `F_t^* ω^t = ω^0`.
/// `steps` must be divisible by 4 for every quarter to land on a step.
pub fn pullback_profile(chart: &Chart, points: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    profile_pass(chart, points, |_, _| Ok(()))
}

/// Integrates each point once, recording the quarter-time residuals and
/// handing the chart value `(C(x), DC(x))` to `end`.
fn profile_pass(
    chart: &Chart,
    points: &[Vec<f64>],
    mut end: impl FnMut(&[f64], (Vec<f64>, DMatrix<f64>)) -> Result<()>,
) -> Result<Vec<(f64, f64)>> {
    let ChartMap::Flow {
        path,
        direction,
        opts,
        post,
    } = &chart.map
    else {
        for x in points {
            end(x, chart.apply(x)?)?;
        }
        return Ok([0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|&t| (t, 0.0)).collect());
    };
    if opts.steps % 4 != 0 {
        return Err(Error::input("pullback profile needs steps divisible by 4"));
    }
    check_points(chart.domain(), points)?;
    let quarter = |t: f64| -> Option<usize> {
        let q = t * 4.0;
        let r = q.round();
        ((q - r).abs() < 1e-9).then_some(r as usize)
    };
    let mut worst = [0.0_f64; 5];
    for x in points {
        let reference = match direction {
            FlowDirection::Forward => path.eval(0.0, x).into_matrix(),
            FlowDirection::Inverse => path.eval(1.0, x).into_matrix(),
        };
        let (t0, t1) = match direction {
            FlowDirection::Forward => (0.0, 1.0),
            FlowDirection::Inverse => (1.0, 0.0),
        };
        let (y, dy) = integrate_flow(path, x, t0, t1, opts, |t, p, dm| {
            if let Some(k) = quarter(t) {
                let pulled = dm.transpose() * path.eval(t, p).into_matrix() * dm;
                worst[k] = worst[k].max((pulled - &reference).amax());
            }
            Ok(())
        })?;
        end(x, (chart.affine_apply(post, &y), post * dy))?;
    }
    Ok(worst.iter().enumerate().map(|(k, &r)| (k as f64 / 4.0, r)).collect())
}

/// Runs [`verify_pullback`] against `J_std` and the intermediate profile, and
/// stores both on the chart. Each point is integrated once for both.
pub fn certify_darboux_chart(chart: &mut Chart, field: &dyn FormField, points: &[Vec<f64>]) -> Result<f64> {
    check_points(chart.domain(), points)?;
    let target = AntisymMatrix::canonical(field.dim());
    let mut max_residual = 0.0_f64;
    let profile = profile_pass(chart, points, |x, (_, dm)| {
        Error::check_dim(field.dim(), x.len())?;
        let pulled = dm.transpose() * target.matrix() * &dm;
        max_residual = max_residual.max((pulled - field.eval(x).into_matrix()).amax());
        Ok(())
    })?;
    chart.residual_report = Some(ResidualReport {
        samples: points.len(),
        max_residual,
        profile,
    });
    Ok(max_residual)
}

/// Pullback residuals of the Darboux chart under step halving.
///
/// `ratio` compares `steps` against `2·steps`. Once the integrator error
/// drops below the bias of the finite-difference Jacobian that ratio is
/// roundoff noise, so the order is also measured at the largest step count
/// `n = steps / 2^k` whose residual exceeds `64×` the residual at `steps`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrderEstimate {
    pub steps: usize,
    pub residual: f64,
    pub residual_halved: f64,
    /// `None` when the halved residual is exactly zero.
    pub ratio: Option<f64>,
    pub pre_roundoff: Option<PreRoundoffOrder>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PreRoundoffOrder {
    pub steps: usize,
    pub residual: f64,
    pub residual_halved: f64,
    pub ratio: f64,
}

/// Pullback residual against `J_std` of the Darboux chart built with `steps`.
pub fn darboux_residual_at(
    field: Arc<dyn FormField>,
    x0: &[f64],
    opts: &MoserOptions,
    steps: usize,
    points: &[Vec<f64>],
) -> Result<f64> {
    let target = Target::Constant(AntisymMatrix::canonical(field.dim()));
    let o = MoserOptions { steps, ..opts.clone() };
    let chart = darboux_chart(field.clone(), x0, &o)?;
    verify_pullback(&chart, field.as_ref(), &target, points)
}

pub fn darboux_step_halving(
    field: Arc<dyn FormField>,
    x0: &[f64],
    opts: &MoserOptions,
    points: &[Vec<f64>],
) -> Result<OrderEstimate> {
    let residual = darboux_residual_at(field.clone(), x0, opts, opts.steps, points)?;
    let residual_halved = darboux_residual_at(field.clone(), x0, opts, 2 * opts.steps, points)?;
    let floor = residual.max(f64::MIN_POSITIVE);
    let mut pre_roundoff = None;
    let mut finer = (opts.steps, residual);
    let mut n = opts.steps / 2;
    while n >= 1 {
        let r = darboux_residual_at(field.clone(), x0, opts, n, points)?;
        if r >= 64.0 * floor {
            let (fine_steps, fine_r) = if finer.0 == 2 * n {
                finer
            } else {
                (2 * n, darboux_residual_at(field.clone(), x0, opts, 2 * n, points)?)
            };
            debug_assert_eq!(fine_steps, 2 * n);
            pre_roundoff = Some(PreRoundoffOrder {
                steps: n,
                residual: r,
                residual_halved: fine_r,
                ratio: r / fine_r,
            });
            break;
        }
        finer = (n, r);
        n /= 2;
    }
    Ok(OrderEstimate {
        steps: opts.steps,
        residual,
        residual_halved,
        ratio: (residual_halved > 0.0).then(|| residual / residual_halved),
        pre_roundoff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::form::{nonclosed_example, perturbed_canonical, radial_area, ConstantForm, FnForm, PolynomialForm};
    use crate::symplin::darboux_residual;

    fn j(d: usize) -> AntisymMatrix {
        AntisymMatrix::canonical(d)
    }

    #[test]
    fn closedness_examples() {
        let c = ConstantForm::everywhere(j(4));
        assert_eq!(closedness_check(&c, &[vec![0.3, 0.1, 0.0, 2.0]], 1e-4).unwrap(), 0.0);
        let f = perturbed_canonical(0.1);
        let pts = vec![vec![0.1, -0.2, 0.3, 0.05], vec![-0.4, 0.1, 0.2, -0.3]];
        assert!(closedness_check(&f, &pts, 1e-4).unwrap() <= 1e-6);
        let bad = nonclosed_example();
        let r = closedness_check(&bad, &pts, 1e-4).unwrap();
        assert!((r - 1.0).abs() < 1e-8, "{r}");
        assert!(closedness_check(&f, &[vec![2.0, 0.0, 0.0, 0.0]], 1e-4).is_err());
    }

    #[test]
    fn primitive_of_constant_is_half_flat() {
        let c = AntisymMatrix::from_rows(&[vec![0.0, 2.0], vec![-2.0, 0.0]]).unwrap();
        let f = ConstantForm::everywhere(c.clone());
        let x = [0.3, -0.7];
        let a = radial_primitive(&f, &[0.0, 0.0], &x, 64).unwrap();
        let expected = crate::symplin::flat(&c, &x).unwrap();
        for (u, v) in a.as_slice().iter().zip(expected.as_slice()) {
            assert!((u - 0.5 * v).abs() < 1e-15);
        }
        let z = ConstantForm::everywhere(AntisymMatrix::zeros(2));
        assert!(radial_primitive(&z, &[0.0, 0.0], &x, 64).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn primitive_of_linear_form_has_one_third_coefficient() {
        // ω = x dx∧dy: α_x(v) = ∫ s·(s x₁)(x₁ v₂ − x₂ v₁) ds = x₁(x₁ v₂ − x₂ v₁)/3.
        let mut f = PolynomialForm::new(2, Region::Everywhere).unwrap();
        f.add_coefficient(vec![1, 0], 0, 1, 1.0).unwrap();
        let x = [0.6, -0.9];
        let a = radial_primitive(&f, &[0.0, 0.0], &x, 64).unwrap();
        assert!((a.as_slice()[0] - (-x[0] * x[1] / 3.0)).abs() < 1e-15);
        assert!((a.as_slice()[1] - (x[0] * x[0] / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn vector_field_examples() {
        let base: Arc<dyn FormField> = Arc::new(ConstantForm::everywhere(j(2)));
        let path = FormPath::linear(base, &[0.0, 0.0], 8).unwrap();
        let x = moser_vector_field(&path, |_| Ok(Covector(DVector::from_vec(vec![0.0, 1.0]))), 0.5, &[0.1, 0.1], 1e-8)
            .unwrap();
        assert!((x[0] + 1.0).abs() < 1e-15 && x[1].abs() < 1e-15);
        let zero = moser_vector_field(&path, |_| Ok(Covector::zeros(2)), 0.2, &[0.5, 0.5], 1e-8).unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);

        let tiny: Arc<dyn FormField> = Arc::new(ConstantForm::everywhere(j(2).scaled(1e-12)));
        let path = FormPath::linear(tiny, &[0.0, 0.0], 8).unwrap();
        let err = moser_vector_field(&path, |_| Ok(Covector::zeros(2)), 0.3, &[0.1, 0.0], 1e-8).unwrap_err();
        assert!(matches!(err, Error::Degenerate { t: Some(t), .. } if t == 0.3));
    }

    #[test]
    fn constant_field_gives_identity_flow() {
        let base: Arc<dyn FormField> = Arc::new(ConstantForm::everywhere(j(4)));
        let path = FormPath::linear(base, &[0.0; 4], 16).unwrap();
        let opts = MoserOptions {
            steps: 10,
            ..Default::default()
        };
        let traj = moser_flow(&path, &[0.2, 0.1, -0.3, 0.4], &opts).unwrap();
        let (p, dm) = traj.last();
        assert_eq!(p, &[0.2, 0.1, -0.3, 0.4]);
        assert_eq!(dm, &DMatrix::identity(4, 4));
    }

    #[test]
    fn anchor_point_is_fixed() {
        let base: Arc<dyn FormField> = Arc::new(perturbed_canonical(0.1));
        let x0 = [0.1, 0.0, -0.1, 0.2];
        let path = FormPath::linear(base, &x0, 64).unwrap();
        let opts = MoserOptions {
            steps: 20,
            ..Default::default()
        };
        let traj = moser_flow(&path, &x0, &opts).unwrap();
        assert!(traj.points.iter().all(|p| p == &x0));
    }

    #[test]
    fn forward_flow_pulls_back_to_anchor() {
        let base: Arc<dyn FormField> = Arc::new(radial_area());
        let path = FormPath::linear(base, &[0.0, 0.0], 64).unwrap();
        let opts = MoserOptions {
            steps: 40,
            ..Default::default()
        };
        let traj = moser_flow(&path, &[0.3, 0.2], &opts).unwrap();
        for (k, (p, dm)) in traj.points.iter().zip(&traj.jacobians).enumerate() {
            let t = traj.times[k];
            let pulled = dm.transpose() * path.eval(t, p).into_matrix() * dm;
            assert!((pulled - path.anchor().matrix()).amax() < 1e-8, "t = {t}");
        }
    }

    #[test]
    fn constant_generic_form_reduces_to_linear_darboux() {
        let omega = AntisymMatrix::from_rows(&[
            vec![0.0, 2.0, 0.5, -1.0],
            vec![-2.0, 0.0, 0.3, 0.7],
            vec![-0.5, -0.3, 0.0, 1.5],
            vec![1.0, -0.7, -1.5, 0.0],
        ])
        .unwrap();
        let field: Arc<dyn FormField> = Arc::new(ConstantForm::everywhere(omega.clone()));
        let opts = MoserOptions {
            steps: 4,
            ..Default::default()
        };
        let chart = darboux_chart(field.clone(), &[0.0; 4], &opts).unwrap();
        let pts = vec![vec![0.1, 0.2, 0.3, -0.4], vec![0.0; 4]];
        let r = verify_pullback(&chart, field.as_ref(), &Target::Constant(j(4)), &pts).unwrap();
        assert!(r <= 1e-9, "{r}");
        let (_, dm) = chart.apply(&pts[0]).unwrap();
        let a = dm.try_inverse().unwrap();
        assert!(darboux_residual(&omega, &a) < 1e-9);
    }

    #[test]
    fn identity_chart_pullback_is_exact() {
        let f = perturbed_canonical(0.1);
        let chart = Chart::identity(&[0.0; 4], Region::ball(vec![0.0; 4], 0.5));
        let target = Target::Field(Arc::new(f.clone()));
        let r = verify_pullback(&chart, &f, &target, &[vec![0.1, 0.2, 0.0, -0.1]]).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn radial_area_darboux_chart() {
        let field: Arc<dyn FormField> = Arc::new(radial_area());
        let opts = MoserOptions {
            steps: 40,
            ..Default::default()
        };
        let mut chart = darboux_chart(field.clone(), &[0.0, 0.0], &opts).unwrap();
        let pts = vec![vec![0.3, 0.1], vec![-0.2, 0.4], vec![0.0, -0.45]];
        let r = certify_darboux_chart(&mut chart, field.as_ref(), &pts).unwrap();
        assert!(r < 1e-7, "{r}");
        let report = chart.residual_report.clone().unwrap();
        assert_eq!(report.profile.len(), 5);
        assert!(report.profile.iter().all(|&(_, v)| v < 1e-7));
        let (y, _) = chart.apply(&[0.0, 0.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn nonclosed_field_is_rejected() {
        let field: Arc<dyn FormField> = Arc::new(nonclosed_example());
        let err = darboux_chart(field, &[0.0; 4], &MoserOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn degenerate_base_point() {
        let field: Arc<dyn FormField> = Arc::new(crate::form::vanishing_area());
        let err = darboux_chart(field, &[0.0, 0.0], &MoserOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Degenerate { .. }));
    }

    #[test]
    fn exp_scaling_zero_is_identity() {
        let field: Arc<dyn FormField> = Arc::new(radial_area());
        let chart = exp_scaling_chart(field, &[0.0, 0.0], 0.0, &MoserOptions::default()).unwrap();
        let (y, dm) = chart.apply(&[0.2, -0.1]).unwrap();
        assert_eq!(y, vec![0.2, -0.1]);
        assert_eq!(dm, DMatrix::identity(2, 2));
    }

    #[test]
    fn exp_scaling_on_canonical_plane() {
        let field: Arc<dyn FormField> = Arc::new(ConstantForm::new(j(2), Region::ball(vec![0.0; 2], 1.0)).unwrap());
        let s = 0.1;
        let chart = exp_scaling_chart(field.clone(), &[0.0, 0.0], s, &MoserOptions::default()).unwrap();
        let target = Target::Constant(j(2).scaled(s.exp()));
        let r = verify_pullback(&chart, field.as_ref(), &target, &[vec![0.3, 0.2], vec![-0.1, 0.4]]).unwrap();
        assert!(r <= 1e-6, "{r}");
        // X = −(s/2) x, so F_1(x) = e^{−s/2} x.
        let (y, _) = chart.apply(&[0.3, 0.2]).unwrap();
        assert!((y[0] - 0.3 * (-s / 2.0).exp()).abs() < 1e-10);
    }

    #[test]
    fn exp_scaling_hits_zero_crossing() {
        // f = 1 − |x|²/0.36 vanishes on the circle of radius 0.6; s < 0 pushes
        // points outwards onto it.
        let field: Arc<dyn FormField> = Arc::new(FnForm::new(2, Region::ball(vec![0.0; 2], 1.0), |x| {
            let f = 1.0 - (x[0] * x[0] + x[1] * x[1]) / 0.36;
            DMatrix::from_row_slice(2, 2, &[0.0, f, -f, 0.0])
        }));
        let s = -6.0;
        let opts = MoserOptions {
            chart_radius: Some(0.5),
            margin: 1e-3,
            ..Default::default()
        };
        let chart = exp_scaling_chart(field, &[0.0, 0.0], s, &opts).unwrap();
        let err = chart.apply(&[0.45, 0.0]).map_err(|e| with_scaling(e, s)).unwrap_err();
        assert!(matches!(err, Error::Degenerate { s: Some(_), t: Some(_), .. }), "{err}");
    }
}
