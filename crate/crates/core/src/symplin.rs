//! Linear symplectic algebra on a finite-dimensional space.
//!
//! A 2-form on `ℝ^d` is stored as the antisymmetric matrix `W` with
//! `ω(u, v) = uᵀ W v`. The flat map sends `u` to the covector `ω(u, ·)`, whose
//! coefficients are `Wᵀ u`. Weak versus strong non-degeneracy collapses to
//! invertibility in finite dimensions, so degeneracy is measured by the
//! smallest singular value against a configurable margin.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default threshold on `sigma_min` below which a form counts as degenerate.
pub const DEFAULT_MARGIN: f64 = 1e-8;

/// Largest antisymmetry correction accepted silently at construction.
const ANTISYM_WARN: f64 = 1e-12;

/// A real antisymmetric `d × d` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AntisymMatrix(DMatrix<f64>);

impl AntisymMatrix {
    /// Antisymmetrizes `m` as `(m - mᵀ)/2`, logging a warning when the
    /// correction exceeds `1e-12`.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::input(format!(
                "form matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(Error::input("form matrix must have positive dimension"));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("form matrix has non-finite entries"));
        }
        let sym = (&m - m.transpose()) * 0.5;
        let correction = (&m - &sym).amax();
        if correction > ANTISYM_WARN {
            log::warn!("antisymmetrized input matrix, correction {correction:e}");
        }
        Ok(AntisymMatrix(sym))
    }

    /// Wraps a matrix the caller has built antisymmetric by construction.
    pub(crate) fn from_raw(m: DMatrix<f64>) -> Self {
        debug_assert!(m.is_square());
        debug_assert!((&m + m.transpose()).amax() <= 1e-12 * (1.0 + m.amax()));
        AntisymMatrix(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::input("form matrix rows must all have length dim"));
        }
        AntisymMatrix::new(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
    }

    pub fn zeros(dim: usize) -> Self {
        AntisymMatrix(DMatrix::zeros(dim, dim))
    }

    /// The canonical form `J_std`: `[[0, 1], [-1, 0]]` blocks on the
    /// diagonal, i.e. `Σ dx_i ∧ dy_i` in coordinates `(x_1, y_1, x_2, y_2, …)`.
    ///
    /// # Panics
    ///
    /// Panics if `dim` is odd.
    pub fn canonical(dim: usize) -> Self {
        assert!(dim % 2 == 0, "canonical form needs an even dimension");
        let mut m = DMatrix::zeros(dim, dim);
        for k in 0..dim / 2 {
            m[(2 * k, 2 * k + 1)] = 1.0;
            m[(2 * k + 1, 2 * k)] = -1.0;
        }
        AntisymMatrix(m)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn scaled(&self, c: f64) -> Self {
        AntisymMatrix(&self.0 * c)
    }

    /// `ω(u, v) = uᵀ W v`, summed in index order.
    pub fn eval(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        Error::check_dim(self.dim(), u.len())?;
        Error::check_dim(self.dim(), v.len())?;
        Ok(bilinear(&self.0, u, v))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim())
            .map(|i| self.0.row(i).iter().copied().collect())
            .collect()
    }
}

/// `uᵀ M v` with a fixed summation order, so that padding `u`, `v` and `M`
/// with trailing zeros does not change the result.
pub(crate) fn bilinear(m: &DMatrix<f64>, u: &[f64], v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        let mut row = 0.0;
        for (j, &vj) in v.iter().enumerate() {
            row += m[(i, j)] * vj;
        }
        acc += ui * row;
    }
    acc
}

/// Element of the dual space, stored by its coefficients in the dual basis.
#[derive(Clone, Debug, PartialEq)]
pub struct Covector(pub DVector<f64>);

impl Covector {
    pub fn zeros(dim: usize) -> Self {
        Covector(DVector::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// The pairing `⟨c, v⟩`.
    pub fn apply(&self, v: &[f64]) -> Result<f64> {
        Error::check_dim(self.dim(), v.len())?;
        Ok(self.0.iter().zip(v).map(|(c, x)| c * x).sum())
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

/// Norm on `ℝ^d`; its dual norm is used on covectors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormSpec {
    #[default]
    Euclidean,
    Ell1,
    EllInf,
    EllP(f64),
}

impl NormSpec {
    pub fn ell_p(p: f64) -> Result<Self> {
        let spec = NormSpec::EllP(p);
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            NormSpec::EllP(p) if !(p > 1.0 && p.is_finite()) => {
                Err(Error::input(format!("ell_p norm needs finite p > 1, got {p}")))
            }
            _ => Ok(()),
        }
    }

    pub fn norm(&self, v: &[f64]) -> f64 {
        match *self {
            NormSpec::Euclidean => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            NormSpec::Ell1 => v.iter().map(|x| x.abs()).sum(),
            NormSpec::EllInf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            NormSpec::EllP(p) => v.iter().map(|x| x.abs().powf(p)).sum::<f64>().powf(1.0 / p),
        }
    }

    /// The dual norm, with `ℓᵖ` paired to its Hölder conjugate.
    pub fn dual(&self) -> NormSpec {
        match *self {
            NormSpec::Euclidean => NormSpec::Euclidean,
            NormSpec::Ell1 => NormSpec::EllInf,
            NormSpec::EllInf => NormSpec::Ell1,
            NormSpec::EllP(p) => NormSpec::EllP(p / (p - 1.0)),
        }
    }

    pub fn dual_norm(&self, c: &[f64]) -> f64 {
        self.dual().norm(c)
    }

    /// Operator norm of `m` acting on `(ℝ^d, self)`.
    ///
    /// Exact for `ℓ¹` (max column sum), `ℓ∞` (max row sum) and `ℓ²` (largest
    /// singular value). For general `ℓᵖ` this is the Riesz–Thorin bound
    /// `‖m‖₁^{1/p} ‖m‖∞^{1-1/p}`, which is an upper bound.
    pub fn operator_norm(&self, m: &DMatrix<f64>) -> f64 {
        let col_sum = || {
            (0..m.ncols())
                .map(|j| m.column(j).iter().map(|x| x.abs()).sum::<f64>())
                .fold(0.0, f64::max)
        };
        let row_sum = || {
            (0..m.nrows())
                .map(|i| m.row(i).iter().map(|x| x.abs()).sum::<f64>())
                .fold(0.0, f64::max)
        };
        match *self {
            NormSpec::Ell1 => col_sum(),
            NormSpec::EllInf => row_sum(),
            NormSpec::Euclidean => largest_singular_value(m),
            NormSpec::EllP(p) => col_sum().powf(1.0 / p) * row_sum().powf(1.0 - 1.0 / p),
        }
    }
}

fn largest_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values_unordered().max()
}

/// The flat map `u ↦ ω(u, ·)`.
pub fn flat(omega: &AntisymMatrix, u: &[f64]) -> Result<Covector> {
    Error::check_dim(omega.dim(), u.len())?;
    Ok(Covector(flat_raw(omega.matrix(), u)))
}

pub(crate) fn flat_raw(m: &DMatrix<f64>, u: &[f64]) -> DVector<f64> {
    let d = m.ncols();
    let mut c = DVector::zeros(d);
    for (i, &ui) in u.iter().enumerate() {
        if ui == 0.0 {
            continue;
        }
        for j in 0..d {
            c[j] += ui * m[(i, j)];
        }
    }
    c
}

/// `‖u‖_ω`, the dual norm of `ω^♭(u)`.
pub fn omega_norm(omega: &AntisymMatrix, u: &[f64], norm: NormSpec) -> Result<f64> {
    norm.validate()?;
    let c = flat(omega, u)?;
    Ok(norm.dual_norm(c.as_slice()))
}

/// Upper bound on the operator norm of `ω^♭ : (ℝ^d, ‖·‖) → (ℝ^d*, ‖·‖*)`.
///
/// Exact for the euclidean and `ℓ¹` norms.
pub fn flat_operator_bound(omega: &AntisymMatrix, norm: NormSpec) -> f64 {
    let m = omega.matrix();
    let d = omega.dim() as f64;
    match norm {
        NormSpec::Euclidean => largest_singular_value(m),
        // sup over ‖u‖₁ ≤ 1 of max_j |Σ_i u_i m_ij| is attained at a vertex.
        NormSpec::Ell1 => m.amax(),
        NormSpec::EllInf => m.iter().map(|x| x.abs()).sum(),
        NormSpec::EllP(p) => {
            let q = p / (p - 1.0);
            let to_l2 = d.powf((0.5 - 1.0 / p).max(0.0));
            let from_l2 = d.powf((1.0 / q - 0.5).max(0.0));
            largest_singular_value(m) * to_l2 * from_l2
        }
    }
}

/// Singular-value summary used to decide weak non-degeneracy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DegeneracyReport {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rank: usize,
    pub invertible: bool,
}

/// Smallest singular value, numerical rank and the invertibility verdict
/// `sigma_min > margin`.
pub fn degeneracy_report(omega: &AntisymMatrix, margin: f64) -> DegeneracyReport {
    let sv = omega.matrix().clone().singular_values_unordered();
    let sigma_min = sv.min();
    let sigma_max = sv.max();
    let rank_tol = omega.dim() as f64 * f64::EPSILON * sigma_max;
    let rank = sv.iter().filter(|&&s| s > rank_tol && s > 0.0).count();
    DegeneracyReport {
        sigma_min,
        sigma_max,
        rank,
        invertible: sigma_min > margin,
    }
}

/// Finds `A` with `Aᵀ Ω A = J_std` from the spectral decomposition of the
/// Hermitian matrix `iΩ`.
///
/// An eigenvector `z = x + iy` of `iΩ` with eigenvalue `λ > 0` satisfies
/// `Ωx = λy` and `Ωy = −λx`, and the planes `span{x, y}` are orthogonal and
/// `Ω`-orthogonal to each other. Each plane contributes the Darboux pair
/// `(y, x)` scaled so that `Ω(e, f) = 1`; the columns of `A` are
/// `e_1, f_1, e_2, …`. Since the basis is orthogonal up to scaling, the
/// residual is of order `ε · ‖Ω‖ / sigma_min`.
pub fn linear_darboux(omega: &AntisymMatrix, margin: f64) -> Result<DMatrix<f64>> {
    let d = omega.dim();
    let report = degeneracy_report(omega, margin);
    if d % 2 == 1 || !report.invertible {
        return Err(Error::Degenerate {
            sigma_min: if d % 2 == 1 { 0.0 } else { report.sigma_min },
            margin,
            t: None,
            s: None,
            point: None,
        });
    }
    let w = omega.matrix();
    let h: DMatrix<Complex<f64>> = w.map(|v| Complex::new(0.0, v));
    let eig = h.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

    let mut columns: Vec<DVector<f64>> = Vec::with_capacity(d);
    for &k in &order[..d / 2] {
        let z = eig.eigenvectors.column(k);
        let x = DVector::from_iterator(d, z.iter().map(|c| c.re));
        let y = DVector::from_iterator(d, z.iter().map(|c| c.im));
        // Ω(y, x) = λ‖y‖², rescaled to 1.
        let mu = y.dot(&(w * &x));
        if !(mu.abs() > margin * margin) {
            return Err(Error::Degenerate {
                sigma_min: report.sigma_min,
                margin,
                t: None,
                s: None,
                point: None,
            });
        }
        let scale = mu.abs().sqrt();
        columns.push(&y / scale);
        columns.push(&x * (mu.signum() / scale));
    }
    Ok(DMatrix::from_columns(&columns))
}

/// Max-entry residual `|Aᵀ Ω A − J_std|`.
pub fn darboux_residual(omega: &AntisymMatrix, a: &DMatrix<f64>) -> f64 {
    let j = AntisymMatrix::canonical(omega.dim());
    (a.transpose() * omega.matrix() * a - j.matrix()).amax()
}

/// The canonical pairing on `E × E*`:
/// `ω((u, η), (v, ξ)) = ⟨η, v⟩ − ⟨ξ, u⟩`.
pub fn darboux_pairing(u: &[f64], eta: &Covector, v: &[f64], xi: &Covector) -> Result<f64> {
    Ok(eta.apply(v)? - xi.apply(u)?)
}
