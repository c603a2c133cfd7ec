use thiserror::Error;

/// Errors raised by the toolkit.
///
/// The variants map onto the CLI exit codes: input and parse problems are
/// exit 1, degeneracy is exit 2 and leaving a declared region is exit 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("degenerate form: sigma_min = {sigma_min:e} below margin {margin:e}{}", fmt_site(.t, .s, .point))]
    Degenerate {
        sigma_min: f64,
        margin: f64,
        t: Option<f64>,
        s: Option<f64>,
        point: Option<Vec<f64>>,
    },

    #[error("left the domain: {detail}{}", fmt_site(.t, &None, &Some(.point.clone())))]
    Domain {
        detail: String,
        t: Option<f64>,
        point: Vec<f64>,
    },

    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn fmt_site(t: &Option<f64>, s: &Option<f64>, point: &Option<Vec<f64>>) -> String {
    let mut out = String::new();
    if let Some(s) = s {
        out.push_str(&format!(" at s = {s}"));
    }
    if let Some(t) = t {
        out.push_str(&format!(" at t = {t}"));
    }
    if let Some(p) = point {
        out.push_str(&format!(" x = {p:?}"));
    }
    out
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
        if expected == got {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { expected, got })
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
