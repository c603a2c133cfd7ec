//! Direct limits of nested coordinate spaces `E_1 ⊂ E_2 ⊂ …`.
//!
//! `E_n` is `ℝ^{d_n}` embedded in `E_{n+1}` as the first `d_n` coordinates,
//! so an element of the limit is a tail-zero sequence. Towers of norms and
//! forms are coherent when each level restricts exactly to the previous one.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::form::{sample_ball, standard_normal, ConstantForm, FormField, Region};
use crate::symplin::{bilinear, AntisymMatrix, NormSpec};

/// Dimensions `d_1 < d_2 < …` of the nested spaces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelDims {
    /// `d_n = k·n`, unbounded.
    Uniform(usize),
    /// A finite strictly increasing list.
    Explicit(Vec<usize>),
}

impl Default for LevelDims {
    fn default() -> Self {
        LevelDims::Uniform(2)
    }
}

impl LevelDims {
    pub fn explicit(dims: Vec<usize>) -> Result<Self> {
        let l = LevelDims::Explicit(dims);
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LevelDims::Uniform(0) => Err(Error::input("level step must be positive")),
            LevelDims::Uniform(_) => Ok(()),
            LevelDims::Explicit(d) => {
                if d.is_empty() || d[0] == 0 || d.windows(2).any(|w| w[0] >= w[1]) {
                    Err(Error::input("level dimensions must be positive and strictly increasing"))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// `d_n` for `n ≥ 1`, or `None` past the last level.
    pub fn dim(&self, n: usize) -> Option<usize> {
        if n == 0 {
            return None;
        }
        match self {
            LevelDims::Uniform(k) => Some(k * n),
            LevelDims::Explicit(d) => d.get(n - 1).copied(),
        }
    }

    pub fn max_level(&self) -> Option<usize> {
        match self {
            LevelDims::Uniform(_) => None,
            LevelDims::Explicit(d) => Some(d.len()),
        }
    }

    /// The smallest level whose dimension is at least `len`.
    pub fn level_containing(&self, len: usize) -> Option<usize> {
        match self {
            LevelDims::Uniform(k) => Some(len.div_ceil(*k).max(1)),
            LevelDims::Explicit(d) => d.iter().position(|&x| x >= len).map(|i| i + 1),
        }
    }

    /// The level whose dimension is exactly `len`.
    pub fn level_of_dim(&self, len: usize) -> Option<usize> {
        self.level_containing(len).filter(|&n| self.dim(n) == Some(len))
    }
}

/// An element of `∪ E_n`, stored without trailing zeros.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DLVector {
    coords: Vec<f64>,
    min_level: usize,
}

impl DLVector {
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn min_level(&self) -> usize {
        self.min_level
    }

    /// Coordinates in `E_n`, zero-padded.
    pub fn at_level(&self, n: usize, levels: &LevelDims) -> Result<Vec<f64>> {
        let d = levels
            .dim(n)
            .ok_or_else(|| Error::input(format!("level {n} is not defined")))?;
        if n < self.min_level {
            return Err(Error::input(format!(
                "vector of minimal level {} does not lie in E_{n}",
                self.min_level
            )));
        }
        let mut v = self.coords.clone();
        v.resize(d, 0.0);
        Ok(v)
    }
}

/// `ι_n(u)` for `u ∈ E_n`, with trailing zeros normalized away.
pub fn dl_inject(u: &[f64], levels: &LevelDims) -> Result<DLVector> {
    levels.validate()?;
    if levels.level_of_dim(u.len()).is_none() {
        return Err(Error::input(format!("length {} is not a level dimension", u.len())));
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("non-finite coordinate"));
    }
    let keep = u.iter().rposition(|&v| v != 0.0).map_or(0, |i| i + 1);
    let coords: Vec<f64> = u[..keep].iter().map(|&v| if v == 0.0 { 0.0 } else { v }).collect();
    let min_level = levels.level_containing(keep).expect("shorter than an existing level");
    Ok(DLVector { coords, min_level })
}

/// Norms built inductively: `‖(u, w)‖_{n+1} = ‖u‖_n + ‖w‖'_n`, with `‖·‖'_n`
/// the block norm on the complement `E'_n` of `E_n` in `E_{n+1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherentNormSeq {
    pub levels: LevelDims,
    /// Block norms for `E_1, E'_1, E'_2, …`; the last one repeats.
    pub blocks: Vec<NormSpec>,
}

impl CoherentNormSeq {
    pub fn new(levels: LevelDims, blocks: Vec<NormSpec>) -> Result<Self> {
        levels.validate()?;
        if blocks.is_empty() {
            return Err(Error::input("at least one block norm is required"));
        }
        for b in &blocks {
            b.validate()?;
        }
        Ok(CoherentNormSeq { levels, blocks })
    }

    /// The `ℓ¹` tower `‖(x_1, …, x_n)‖_n = Σ|x_i|` on `d_n = n`.
    pub fn ell1() -> Self {
        CoherentNormSeq {
            levels: LevelDims::Uniform(1),
            blocks: vec![NormSpec::Ell1],
        }
    }

    fn block(&self, k: usize) -> NormSpec {
        self.blocks[k.min(self.blocks.len() - 1)]
    }

    /// `‖u‖_n` for `u ∈ E_n` given as `d_n` coordinates.
    pub fn norm_at_level(&self, n: usize, u: &[f64]) -> Result<f64> {
        let d = self
            .levels
            .dim(n)
            .ok_or_else(|| Error::input(format!("level {n} is not defined")))?;
        Error::check_dim(d, u.len())?;
        let mut total = 0.0;
        let mut start = 0;
        for k in 0..n {
            let end = self.levels.dim(k + 1).unwrap();
            total += self.block(k).norm(&u[start..end]);
            start = end;
        }
        Ok(total)
    }

    /// The single `NormSpec` on `E_n` this tower equals, when there is one.
    pub fn as_uniform(&self) -> Option<NormSpec> {
        let first = self.blocks[0];
        (first == NormSpec::Ell1 && self.blocks.iter().all(|&b| b == first)).then_some(first)
    }
}

/// `‖u‖ = ‖u‖_{n₀}` at the minimal level of `u`.
pub fn coherent_norm_eval(seq: &CoherentNormSeq, u: &DLVector) -> Result<f64> {
    seq.norm_at_level(u.min_level(), &u.at_level(u.min_level(), &seq.levels)?)
}

/// A per-level family of forms `ω_n` on `E_n`.
#[derive(Clone, Debug)]
pub struct CoherentFormSequence {
    levels: LevelDims,
    forms: Vec<Arc<dyn FormField>>,
}

impl CoherentFormSequence {
    pub fn new(levels: LevelDims, forms: Vec<Arc<dyn FormField>>) -> Result<Self> {
        levels.validate()?;
        if forms.is_empty() {
            return Err(Error::input("a tower needs at least one level"));
        }
        for (k, f) in forms.iter().enumerate() {
            let d = levels
                .dim(k + 1)
                .ok_or_else(|| Error::input(format!("no dimension for level {}", k + 1)))?;
            Error::check_dim(d, f.dim())?;
        }
        Ok(CoherentFormSequence { levels, forms })
    }

    /// `η_n = Σ_{i ≤ n} dx_i ∧ dy_i` on `ℝ^{2n}`, levels `1..=n_max`.
    pub fn canonical(n_max: usize) -> Self {
        let forms = (1..=n_max)
            .map(|n| Arc::new(ConstantForm::everywhere(AntisymMatrix::canonical(2 * n))) as Arc<dyn FormField>)
            .collect();
        CoherentFormSequence {
            levels: LevelDims::Uniform(2),
            forms,
        }
    }

    /// The counterexample tower with a singular point that does not depend on
    /// the level; see [`marsden_form`].
    pub fn marsden_fixed(spec: &MarsdenSpec, n_max: usize) -> Result<Self> {
        let spec = MarsdenSpec {
            e_mode: EMode::Fixed,
            ..spec.clone()
        };
        let forms = (1..=n_max)
            .map(|n| marsden_form(&spec, n).map(|f| Arc::new(f) as Arc<dyn FormField>))
            .collect::<Result<Vec<_>>>()?;
        CoherentFormSequence::new(spec.level_dims(n_max), forms)
    }

    pub fn levels(&self) -> &LevelDims {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.forms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forms.is_empty()
    }

    pub fn level(&self, n: usize) -> Option<&Arc<dyn FormField>> {
        n.checked_sub(1).and_then(|i| self.forms.get(i))
    }
}

/// Max over levels `n`, sampled `x ∈ E_n` and basis pairs of `E_n` of
/// `|ω_{n+1}(x, 0)(e_i, e_j) − ω_n(x)(e_i, e_j)|`.
///
/// Points are drawn in the euclidean ball of radius `radius` about the origin
/// and skipped where either level's region excludes them.
pub fn coherence_check(seq: &CoherentFormSequence, samples: usize, radius: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for n in 1..seq.len() {
        let lo = seq.level(n).unwrap();
        let hi = seq.level(n + 1).unwrap();
        let d = lo.dim();
        let mut pts = sample_ball(&mut rng, &vec![0.0; d], radius, samples);
        pts.push(vec![0.0; d]);
        for x in pts {
            let mut y = x.clone();
            y.resize(hi.dim(), 0.0);
            if !lo.region().contains(&x) || !hi.region().contains(&y) {
                continue;
            }
            let a = lo.eval(&x);
            let b = hi.eval(&y);
            let diff = (b.matrix().view((0, 0), (d, d)) - a.matrix()).amax();
            worst = worst.max(diff);
        }
    }
    worst
}

/// `ω(u, v)` at base point `x`, evaluated at the smallest level containing
/// all three.
pub fn limit_form_eval(seq: &CoherentFormSequence, x: &DLVector, u: &DLVector, v: &DLVector) -> Result<f64> {
    let n0 = x.min_level().max(u.min_level()).max(v.min_level());
    limit_form_eval_at(seq, n0, x, u, v)
}

/// `ω_n(x_n)(u_n, v_n)` at an explicit level `n ≥ n₀`.
pub fn limit_form_eval_at(
    seq: &CoherentFormSequence,
    n: usize,
    x: &DLVector,
    u: &DLVector,
    v: &DLVector,
) -> Result<f64> {
    let form = seq
        .level(n)
        .ok_or_else(|| Error::input(format!("level {n} exceeds the tower's {} levels", seq.len())))?;
    let xs = x.at_level(n, &seq.levels)?;
    let us = u.at_level(n, &seq.levels)?;
    let vs = v.at_level(n, &seq.levels)?;
    if !form.region().contains(&xs) {
        return Err(Error::Domain {
            detail: "base point outside the level's region".into(),
            t: None,
            point: xs,
        });
    }
    Ok(bilinear(form.eval(&xs).matrix(), &us, &vs))
}

/// Whether the singular points `e_n` move with the level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EMode {
    /// `e_n = (scale / n) · u_dir`, converging to 0.
    #[default]
    Converging,
    /// `e_n = scale · u_dir` at every level.
    Fixed,
}

/// Data of the counterexample: `H` truncated to the eigendirections of `S`
/// listed in `sigmas`, level `n` working on `H ⊕ ℝⁿ` with `S_n = S ⊕ Id`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarsdenSpec {
    /// Eigenvalues of `S` on the retained directions, strictly decreasing.
    pub sigmas: Vec<f64>,
    pub e_scale: f64,
    /// Base coordinate carrying `e_n`.
    pub e_direction: usize,
    pub e_mode: EMode,
}

impl Default for MarsdenSpec {
    /// `σ_j = 1/j²` retained at `j = 1, 2, 4, …, 256`, `e_n = (1/n)·u₀`.
    fn default() -> Self {
        MarsdenSpec {
            sigmas: (0..9).map(|k| 1.0 / ((1u64 << k) as f64).powi(2)).collect(),
            e_scale: 1.0,
            e_direction: 0,
            e_mode: EMode::Converging,
        }
    }
}

impl MarsdenSpec {
    /// `σ_j = 1/j²` for `j = 1..=h`.
    pub fn inverse_squares(h: usize) -> Self {
        MarsdenSpec {
            sigmas: (1..=h).map(|j| 1.0 / (j * j) as f64).collect(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigmas.is_empty() {
            return Err(Error::input("at least one eigenvalue of S is required"));
        }
        if self.sigmas.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::input("eigenvalues of S must be positive"));
        }
        if self.sigmas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::input("eigenvalues of S must be strictly decreasing"));
        }
        if !(self.e_scale > 0.0) || !self.e_scale.is_finite() {
            return Err(Error::input("e_scale must be positive"));
        }
        if self.e_direction > self.sigmas.len() {
            return Err(Error::input("e_direction must index a level-1 base coordinate"));
        }
        Ok(())
    }

    /// Base dimension `h + n` of level `n`.
    pub fn base_dim(&self, n: usize) -> usize {
        self.sigmas.len() + n
    }

    pub fn level_dims(&self, n_max: usize) -> LevelDims {
        LevelDims::Explicit((1..=n_max).map(|n| 2 * self.base_dim(n)).collect())
    }

    /// The singular point `e_n` in base coordinates.
    pub fn e(&self, n: usize) -> Vec<f64> {
        let mut e = vec![0.0; self.base_dim(n)];
        e[self.e_direction] = match self.e_mode {
            EMode::Converging => self.e_scale / n as f64,
            EMode::Fixed => self.e_scale,
        };
        e
    }
}

/// `ω = −dθ` with `θ_{(u,f)} = g_u(f, du)`, `g_u(a, b) = ⟨A_u a, b⟩` and
/// `A_u = ‖u − e‖² Id + S`, on `T(H ⊕ ℝⁿ)`.
///
/// Coordinates interleave base and fiber, `(u_1, f_1, u_2, f_2, …)`, so level
/// `n` is a prefix of level `n + 1`.
#[derive(Clone, Debug)]
pub struct MarsdenForm {
    diag: Vec<f64>,
    e: Vec<f64>,
    region: Region,
}

/// The level-`n` counterexample form on `ℝ^{2(h+n)}`.
pub fn marsden_form(spec: &MarsdenSpec, n: usize) -> Result<MarsdenForm> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::input("levels start at 1"));
    }
    let mut diag = spec.sigmas.clone();
    diag.resize(spec.base_dim(n), 1.0);
    Ok(MarsdenForm {
        diag,
        e: spec.e(n),
        region: Region::Everywhere,
    })
}

impl MarsdenForm {
    pub fn base_dim(&self) -> usize {
        self.diag.len()
    }

    pub fn singular_point(&self) -> &[f64] {
        &self.e
    }

    /// The point `(u, 0)` of the doubled space.
    pub fn lift_base(&self, u: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; 2 * u.len()];
        for (i, &v) in u.iter().enumerate() {
            x[2 * i] = v;
        }
        x
    }

    fn dist2(&self, u: impl Iterator<Item = f64>) -> f64 {
        u.zip(&self.e).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// `g_u(a, b) = ‖u − e‖²⟨a, b⟩ + ⟨S a, b⟩`.
    pub fn metric(&self, u: &[f64], a: &[f64], b: &[f64]) -> f64 {
        let r2 = self.dist2(u.iter().copied());
        (0..self.base_dim()).map(|i| (r2 + self.diag[i]) * a[i] * b[i]).sum()
    }

    /// `D_u g_u(a, b)·v = 2⟨u − e, v⟩⟨a, b⟩`.
    pub fn metric_derivative(&self, u: &[f64], a: &[f64], b: &[f64], v: &[f64]) -> f64 {
        let uv: f64 = (0..self.base_dim()).map(|i| (u[i] - self.e[i]) * v[i]).sum();
        let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        2.0 * uv * ab
    }

    /// The matrix of `A_u`, the base–fiber block of the form.
    pub fn fiber_block(&self, x: &[f64]) -> DMatrix<f64> {
        let r2 = self.dist2((0..self.base_dim()).map(|i| x[2 * i]));
        DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            self.base_dim(),
            self.diag.iter().map(|s| r2 + s),
        ))
    }
}

impl FormField for MarsdenForm {
    fn dim(&self) -> usize {
        2 * self.base_dim()
    }

    fn eval(&self, x: &[f64]) -> AntisymMatrix {
        let mut m = DMatrix::zeros(self.dim(), self.dim());
        self.eval_into(x, &mut m);
        AntisymMatrix::from_raw(m)
    }

    fn eval_into(&self, x: &[f64], m: &mut DMatrix<f64>) {
        let b = self.base_dim();
        m.fill(0.0);
        let du: Vec<f64> = (0..b).map(|i| x[2 * i] - self.e[i]).collect();
        let r2: f64 = du.iter().map(|v| v * v).sum();
        for i in 0..b {
            let fi = x[2 * i + 1];
            for j in 0..b {
                if i != j {
                    m[(2 * i, 2 * j)] = 2.0 * du[j] * fi - 2.0 * du[i] * x[2 * j + 1];
                }
            }
            let a = r2 + self.diag[i];
            m[(2 * i, 2 * i + 1)] = a;
            m[(2 * i + 1, 2 * i)] = -a;
        }
    }

    fn region(&self) -> &Region {
        &self.region
    }
}

/// Settings for [`darboux_radius`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RadiusOptions {
    /// Rays from `x0`: `±` the first `min(dim, 8)` axes, then seeded random
    /// directions.
    pub directions: usize,
    /// Radii scanned per ray before refinement.
    pub radial_samples: usize,
    pub t_samples: Vec<f64>,
    /// Bisection tolerance on the radius.
    pub tol: f64,
    /// Search limit when the region is unbounded.
    pub max_radius: f64,
    pub seed: u64,
}

impl Default for RadiusOptions {
    fn default() -> Self {
        RadiusOptions {
            directions: 32,
            radial_samples: 256,
            t_samples: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            tol: 1e-3,
            max_radius: 1.0,
            seed: 0,
        }
    }
}

/// Result of [`darboux_radius`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RadiusReport {
    pub radius: f64,
    pub sigma_min_at_x0: f64,
    /// A sampled point where the path degenerates, if one was found.
    pub witness: Option<Vec<f64>>,
    /// `true` when the search ended at the region boundary or `max_radius`.
    pub reached_limit: bool,
}

struct RayProbe<'a> {
    field: &'a dyn FormField,
    anchor: DMatrix<f64>,
    x0: &'a [f64],
    dir: Vec<f64>,
    t_samples: &'a [f64],
    margin: f64,
    buf: DMatrix<f64>,
}

impl RayProbe<'_> {
    fn point(&self, r: f64) -> Vec<f64> {
        self.x0.iter().zip(&self.dir).map(|(a, d)| a + r * d).collect()
    }

    /// `min_t sigma_min(ω^t(x0 + r·dir)) − margin`.
    fn slack(&mut self, r: f64) -> f64 {
        let x = self.point(r);
        self.field.eval_into(&x, &mut self.buf);
        let mut worst = f64::INFINITY;
        for &t in self.t_samples {
            let m = &self.anchor + (&self.buf - &self.anchor) * t;
            worst = worst.min(m.singular_values_unordered().min());
        }
        worst - self.margin
    }
}

/// Largest `r` such that the linear Moser path `ω(x0) + t(ω(x) − ω(x0))`
/// keeps `sigma_min ≥ margin` for sampled `t` and `x` within `r` of `x0`.
///
/// Each ray is scanned at `radial_samples` radii; sampled local minima of the
/// slack are refined by golden-section search so narrow degenerate bands are
/// not stepped over, and the first failure is bisected to `tol`.
pub fn darboux_radius(field: &dyn FormField, x0: &[f64], margin: f64, opts: &RadiusOptions) -> Result<RadiusReport> {
    let d = field.dim();
    Error::check_dim(d, x0.len())?;
    if opts.directions == 0 || opts.radial_samples < 2 || !(opts.tol > 0.0) || opts.t_samples.is_empty() {
        return Err(Error::input("radius search needs directions, ≥ 2 radial samples, t samples and tol > 0"));
    }
    if !field.region().contains(x0) {
        return Err(Error::Domain {
            detail: "base point outside the form's region".into(),
            t: None,
            point: x0.to_vec(),
        });
    }
    let anchor = field.eval(x0).into_matrix();
    let sigma_min_at_x0 = anchor.clone().singular_values_unordered().min();
    if sigma_min_at_x0 < margin {
        log::warn!("form degenerate at the base point: sigma_min = {sigma_min_at_x0:e}");
        return Ok(RadiusReport {
            radius: 0.0,
            sigma_min_at_x0,
            witness: Some(x0.to_vec()),
            reached_limit: false,
        });
    }
    let depth = field.region().depth(x0);
    let limit = if depth.is_finite() { depth } else { opts.max_radius };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut dirs = Vec::with_capacity(opts.directions);
    'axes: for i in 0..d.min(8) {
        for sign in [1.0, -1.0] {
            if dirs.len() == opts.directions {
                break 'axes;
            }
            let mut v = vec![0.0; d];
            v[i] = sign;
            dirs.push(v);
        }
    }
    while dirs.len() < opts.directions {
        let v: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-12 {
            dirs.push(v.iter().map(|a| a / n).collect());
        }
    }

    let mut best = limit;
    let mut witness = None;
    for dir in dirs {
        let mut probe = RayProbe {
            field,
            anchor: anchor.clone(),
            x0,
            dir,
            t_samples: &opts.t_samples,
            margin,
            buf: DMatrix::zeros(d, d),
        };
        if let Some((r, w)) = first_failure(&mut probe, limit.min(best), opts) {
            if r < best {
                best = r;
                witness = Some(w);
            }
        }
    }
    Ok(RadiusReport {
        radius: best,
        sigma_min_at_x0,
        reached_limit: witness.is_none(),
        witness,
    })
}

/// First radius on the ray (up to `limit`) where the slack turns negative.
fn first_failure(probe: &mut RayProbe<'_>, limit: f64, opts: &RadiusOptions) -> Option<(f64, Vec<f64>)> {
    let n = opts.radial_samples;
    let radii: Vec<f64> = (0..=n).map(|k| limit * k as f64 / n as f64).collect();
    let mut vals = Vec::with_capacity(n + 1);
    for (k, &r) in radii.iter().enumerate() {
        let v = probe.slack(r);
        vals.push(v);
        if v < 0.0 {
            let r_fail = bisect(probe, radii[k - 1], r, opts.tol);
            return Some((r_fail, probe.point(r)));
        }
        // A sampled local minimum may hide a dip below the margin between
        // neighbouring samples.
        if k >= 2 && vals[k - 1] < vals[k - 2] && vals[k - 1] <= v {
            let (rm, vm) = golden_min(probe, radii[k - 2], r);
            if vm < 0.0 {
                let r_fail = bisect(probe, radii[k - 2], rm, opts.tol);
                return Some((r_fail, probe.point(rm)));
            }
        }
    }
    None
}

/// Boundary between a passing `lo` and failing `hi`, to within `tol`.
fn bisect(probe: &mut RayProbe<'_>, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if probe.slack(mid) < 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

/// Golden-section minimum of the slack on `[a, b]`.
fn golden_min(probe: &mut RayProbe<'_>, mut a: f64, mut b: f64) -> (f64, f64) {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = probe.slack(c);
    let mut fd = probe.slack(d);
    for _ in 0..60 {
        if fc.min(fd) < 0.0 || (b - a) < 1e-12 {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = probe.slack(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = probe.slack(d);
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// One row of the shrinkage table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShrinkageRow {
    pub n: usize,
    pub dim: usize,
    pub r_n: f64,
    /// `sigma_min` of the level form at `(e_n, 0)`.
    pub sigma_min_at_e_n: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShrinkageTable {
    pub rows: Vec<ShrinkageRow>,
    pub strictly_decreasing: bool,
}

impl ShrinkageTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,dim,r_n,sigma_min_at_e_n\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.16e},{:.16e}\n",
                r.n, r.dim, r.r_n, r.sigma_min_at_e_n
            ));
        }
        out
    }
}

/// Darboux radius about `0` of each requested level of the counterexample.
pub fn shrinkage_experiment(
    spec: &MarsdenSpec,
    levels: &[usize],
    margin: f64,
    opts: &RadiusOptions,
) -> Result<ShrinkageTable> {
    if levels.is_empty() {
        return Err(Error::input("at least one level is required"));
    }
    let mut rows = Vec::with_capacity(levels.len());
    for &n in levels {
        let form = marsden_form(spec, n)?;
        let x0 = vec![0.0; form.dim()];
        let report = darboux_radius(&form, &x0, margin, opts)?;
        let at_e = form.eval(&form.lift_base(form.singular_point()));
        let sigma_min_at_e_n = at_e.matrix().clone().singular_values_unordered().min();
        rows.push(ShrinkageRow {
            n,
            dim: form.dim(),
            r_n: report.radius,
            sigma_min_at_e_n,
        });
    }
    let strictly_decreasing = rows.windows(2).all(|w| w[1].r_n < w[0].r_n);
    Ok(ShrinkageTable {
        rows,
        strictly_decreasing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::form::FnForm;
    use crate::moser::closedness_check;
    use rand::Rng;

    #[test]
    fn injection_levels() {
        let l = LevelDims::Uniform(2);
        assert_eq!(dl_inject(&[1.0, 0.0], &l).unwrap().min_level(), 1);
        let v = dl_inject(&[1.0, 0.0, 0.0, 0.0], &l).unwrap();
        assert_eq!(v.min_level(), 1);
        assert_eq!(v.coords(), &[1.0]);
        assert_eq!(dl_inject(&[0.0, 0.0, 1.0, 0.0], &l).unwrap().min_level(), 2);
        assert!(dl_inject(&[1.0, 2.0, 3.0], &l).is_err());
        assert_eq!(dl_inject(&[0.0, -0.0], &l).unwrap(), dl_inject(&[0.0; 4], &l).unwrap());
        assert!(LevelDims::explicit(vec![2, 2]).is_err());
    }

    #[test]
    fn ell1_tower_norm() {
        let seq = CoherentNormSeq::ell1();
        let u = dl_inject(&[1.0, -2.0, 3.0], &seq.levels).unwrap();
        assert_eq!(coherent_norm_eval(&seq, &u).unwrap(), 6.0);
        let z = dl_inject(&[0.0], &seq.levels).unwrap();
        assert_eq!(coherent_norm_eval(&seq, &z).unwrap(), 0.0);
        for n in 3..8 {
            assert_eq!(seq.norm_at_level(n, &u.at_level(n, &seq.levels).unwrap()).unwrap(), 6.0);
        }
    }

    #[test]
    fn canonical_tower_values() {
        let seq = CoherentFormSequence::canonical(5);
        let l = seq.levels().clone();
        let e = |i: usize, len: usize| {
            let mut v = vec![0.0; len];
            v[i] = 1.0;
            dl_inject(&v, &l).unwrap()
        };
        let x = dl_inject(&[0.0, 0.0], &l).unwrap();
        assert_eq!(limit_form_eval(&seq, &x, &e(0, 2), &e(1, 2)).unwrap(), 1.0);
        assert_eq!(limit_form_eval(&seq, &x, &e(0, 4), &e(2, 4)).unwrap(), 0.0);
        for n in 2..=4 {
            assert_eq!(limit_form_eval_at(&seq, n, &x, &e(2, 4), &e(3, 4)).unwrap(), 1.0);
        }
        assert!(limit_form_eval_at(&seq, 1, &x, &e(2, 4), &e(3, 4)).is_err());
        assert_eq!(coherence_check(&seq, 10, 1.0, 0), 0.0);
    }

    #[test]
    fn broken_tower_is_flagged() {
        let mut forms: Vec<Arc<dyn FormField>> = (1..=3)
            .map(|n| Arc::new(ConstantForm::everywhere(AntisymMatrix::canonical(2 * n))) as Arc<dyn FormField>)
            .collect();
        let mut m = AntisymMatrix::canonical(4).into_matrix();
        m[(0, 1)] += 1e-3;
        m[(1, 0)] -= 1e-3;
        forms[1] = Arc::new(ConstantForm::everywhere(AntisymMatrix::new(m).unwrap()));
        let seq = CoherentFormSequence::new(LevelDims::Uniform(2), forms).unwrap();
        assert!(coherence_check(&seq, 5, 1.0, 0) >= 1e-3 * (1.0 - 1e-9));
    }

    #[test]
    fn marsden_metric_derivative_matches_fd() {
        let spec = MarsdenSpec::inverse_squares(4);
        let f = marsden_form(&spec, 2).unwrap();
        let b = f.base_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut r = || (0..b).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (u, a, c, v) = (r(), r(), r(), r());
        let h = 1e-5;
        let up: Vec<f64> = u.iter().zip(&v).map(|(x, y)| x + h * y).collect();
        let um: Vec<f64> = u.iter().zip(&v).map(|(x, y)| x - h * y).collect();
        let fd = (f.metric(&up, &a, &c) - f.metric(&um, &a, &c)) / (2.0 * h);
        assert!((fd - f.metric_derivative(&u, &a, &c, &v)).abs() <= 1e-7);
    }

    #[test]
    fn marsden_form_is_closed_and_coherent() {
        let spec = MarsdenSpec::inverse_squares(3);
        let f = marsden_form(&spec, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts = sample_ball(&mut rng, &vec![0.0; f.dim()], 1.0, 10);
        assert!(closedness_check(&f, &pts, 1e-4).unwrap() < 1e-8);
        let tower = CoherentFormSequence::marsden_fixed(&spec, 4).unwrap();
        assert_eq!(coherence_check(&tower, 10, 1.0, 1), 0.0);
    }

    #[test]
    fn marsden_fiber_block_at_singular_point() {
        let spec = MarsdenSpec::inverse_squares(4);
        let f = marsden_form(&spec, 1).unwrap();
        let x = f.lift_base(f.singular_point());
        let s = f.fiber_block(&x).singular_values_unordered().min();
        assert!((s - 1.0 / 16.0).abs() < 1e-15);
        // Away from e: sigma_min(A_u) ≥ ‖u − e‖².
        let u = vec![0.3, -0.2, 0.5, 0.1, 0.0];
        let r2: f64 = u.iter().zip(f.singular_point()).map(|(a, b)| (a - b) * (a - b)).sum();
        let s = f.fiber_block(&f.lift_base(&u)).singular_values_unordered().min();
        assert!(s >= r2);
    }

    #[test]
    fn radius_of_constant_field_is_region_radius() {
        let f = ConstantForm::new(AntisymMatrix::canonical(4), Region::ball(vec![0.0; 4], 0.7)).unwrap();
        let r = darboux_radius(&f, &[0.0; 4], 1e-8, &RadiusOptions::default()).unwrap();
        assert_eq!(r.radius, 0.7);
        assert!(r.reached_limit);
    }

    #[test]
    fn radius_finds_isolated_degeneracy() {
        let p = [0.3, 0.0];
        let f = FnForm::new(2, Region::ball(vec![0.0; 2], 1.0), move |x| {
            let s = (x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2);
            DMatrix::from_row_slice(2, 2, &[0.0, s, -s, 0.0])
        });
        let r = darboux_radius(&f, &[0.0, 0.0], 1e-12, &RadiusOptions::default()).unwrap();
        assert!((r.radius - 0.3).abs() < 2e-3, "{}", r.radius);
    }

    #[test]
    fn degenerate_base_point_gives_zero_radius() {
        let f = crate::form::vanishing_area();
        let r = darboux_radius(&f, &[0.0, 0.0], 1e-8, &RadiusOptions::default()).unwrap();
        assert_eq!(r.radius, 0.0);
    }

    #[test]
    fn repeated_level_gives_constant_radius() {
        let t = shrinkage_experiment(&MarsdenSpec::default(), &[2, 2], 1e-4, &RadiusOptions::default()).unwrap();
        assert_eq!(t.rows[0].r_n, t.rows[1].r_n);
        assert!(!t.strictly_decreasing);
        assert!(t.to_csv().starts_with("n,dim,r_n,sigma_min_at_e_n\n2,22,"));
    }
}
