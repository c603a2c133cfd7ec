//! JSON descriptions of form fields.
//!
//! ```json
//! {"dim": 2, "kind": "polynomial",
//!  "coefficients": [{"exponents": [0, 0], "i": 0, "j": 1, "value": 1.0}],
//!  "region": {"shape": "ball", "center": [0, 0], "radius": 1}}
//! ```

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dirlim::{marsden_form, MarsdenSpec};
use crate::error::{Error, Result};
use crate::form::{
    nonclosed_example, perturbed_canonical, radial_area, vanishing_area, ConstantForm, FormField, PolynomialForm,
    Region,
};
use crate::symplin::AntisymMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormKind {
    Constant,
    Polynomial,
    Named,
}

/// One term `value · x^exponents` of `ω_ij`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficient {
    pub exponents: Vec<u32>,
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormFieldSpec {
    pub dim: usize,
    pub kind: FormKind,
    /// Rows of the matrix for `constant`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub coefficients: Vec<Coefficient>,
    /// Built-in name for `named`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Numeric parameters of a named form (`epsilon`, `level`).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marsden: Option<MarsdenSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
}

/// Names accepted by `kind: "named"`.
pub const NAMED_FORMS: &[&str] = &[
    "canonical",
    "perturbed_canonical",
    "radial_area",
    "vanishing_area",
    "nonclosed",
    "marsden",
];

impl FormFieldSpec {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    pub fn named(name: &str, dim: usize) -> Self {
        FormFieldSpec {
            dim,
            kind: FormKind::Named,
            matrix: None,
            coefficients: Vec::new(),
            name: Some(name.to_string()),
            params: BTreeMap::new(),
            marsden: None,
            region: None,
        }
    }

    /// Describes a polynomial form term by term.
    pub fn from_polynomial(f: &PolynomialForm) -> Self {
        FormFieldSpec {
            dim: f.dim(),
            kind: FormKind::Polynomial,
            matrix: None,
            coefficients: f
                .coefficients()
                .into_iter()
                .map(|(exponents, i, j, value)| Coefficient { exponents, i, j, value })
                .collect(),
            name: None,
            params: BTreeMap::new(),
            marsden: None,
            region: Some(f.region().clone()),
        }
    }

    fn param(&self, key: &str, default: f64) -> f64 {
        self.params.get(key).copied().unwrap_or(default)
    }

    pub fn build(&self) -> Result<Arc<dyn FormField>> {
        if self.dim == 0 {
            return Err(Error::input("dim must be positive"));
        }
        let region = self.region.clone().unwrap_or(Region::Everywhere);
        let field: Arc<dyn FormField> = match self.kind {
            FormKind::Constant => {
                let rows = self
                    .matrix
                    .as_ref()
                    .ok_or_else(|| Error::input("constant form needs `matrix`"))?;
                if rows.len() != self.dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.dim,
                        got: rows.len(),
                    });
                }
                Arc::new(ConstantForm::new(AntisymMatrix::from_rows(rows)?, region)?)
            }
            FormKind::Polynomial => {
                let mut f = PolynomialForm::new(self.dim, region)?;
                for c in &self.coefficients {
                    if !c.value.is_finite() {
                        return Err(Error::input("coefficient values must be finite"));
                    }
                    f.add_coefficient(c.exponents.clone(), c.i, c.j, c.value)?;
                }
                Arc::new(f)
            }
            FormKind::Named => self.build_named()?,
        };
        Error::check_dim(self.dim, field.dim())?;
        Ok(field)
    }

    fn build_named(&self) -> Result<Arc<dyn FormField>> {
        let name = self.name.as_deref().ok_or_else(|| Error::input("named form needs `name`"))?;
        let poly = |f: PolynomialForm| -> Result<Arc<dyn FormField>> {
            Ok(match &self.region {
                Some(r) => Arc::new(f.with_region(r.clone())?),
                None => Arc::new(f),
            })
        };
        match name {
            "canonical" => {
                if self.dim % 2 != 0 {
                    return Err(Error::input("canonical form needs an even dimension"));
                }
                let region = self.region.clone().unwrap_or(Region::Everywhere);
                Ok(Arc::new(ConstantForm::new(AntisymMatrix::canonical(self.dim), region)?))
            }
            "perturbed_canonical" => poly(perturbed_canonical(self.param("epsilon", 0.1))),
            "radial_area" => poly(radial_area()),
            "vanishing_area" => poly(vanishing_area()),
            "nonclosed" => poly(nonclosed_example()),
            "marsden" => {
                let spec = self.marsden.clone().unwrap_or_default();
                let level = self.param("level", 1.0);
                if level < 1.0 || level.fract() != 0.0 {
                    return Err(Error::input("marsden level must be a positive integer"));
                }
                Ok(Arc::new(marsden_form(&spec, level as usize)?))
            }
            other => Err(Error::input(format!(
                "unknown named form {other:?}; expected one of {NAMED_FORMS:?}"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_round_trip() {
        let f = perturbed_canonical(0.1);
        let text = FormFieldSpec::from_polynomial(&f).to_json();
        let g = FormFieldSpec::parse(&text).unwrap().build().unwrap();
        let x = [0.1, -0.2, 0.3, 0.05];
        assert_eq!(f.eval(&x), g.eval(&x));
        assert_eq!(g.region(), f.region());
    }

    #[test]
    fn constant_and_named() {
        let c = FormFieldSpec::parse(r#"{"dim":2,"kind":"constant","matrix":[[0,2],[-2,0]]}"#)
            .unwrap()
            .build()
            .unwrap();
        assert_eq!(c.eval(&[5.0, 5.0]).matrix()[(0, 1)], 2.0);
        let m = FormFieldSpec::parse(r#"{"dim":20,"kind":"named","name":"marsden","params":{"level":1}}"#)
            .unwrap()
            .build()
            .unwrap();
        assert_eq!(m.dim(), 20);
        for name in NAMED_FORMS {
            let dim = match *name {
                "canonical" | "perturbed_canonical" | "nonclosed" => 4,
                "marsden" => 20,
                _ => 2,
            };
            FormFieldSpec::named(name, dim).build().unwrap();
        }
    }

    #[test]
    fn malformed_input() {
        assert!(FormFieldSpec::parse(r#"{"dim":2}"#).is_err());
        assert!(FormFieldSpec::parse(r#"{"dim":2,"kind":"constant","matrix":[[0,1],[-1,0]],"extra":1}"#).is_err());
        let ragged = FormFieldSpec::parse(r#"{"dim":2,"kind":"constant","matrix":[[0,1],[1]]}"#).unwrap();
        assert!(ragged.build().is_err());
        let diag = FormFieldSpec::parse(
            r#"{"dim":2,"kind":"polynomial","coefficients":[{"exponents":[0,0],"i":1,"j":1,"value":1}]}"#,
        )
        .unwrap();
        assert!(diag.build().is_err());
        assert!(FormFieldSpec::named("canonical", 3).build().is_err());
        assert!(FormFieldSpec::named("nope", 2).build().is_err());
        assert!(FormFieldSpec::named("radial_area", 4).build().is_err());
    }
}
