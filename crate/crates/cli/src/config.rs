use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "darboux", version, about = "Darboux chart experiments for weak symplectic forms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Build and verify a Moser-path Darboux chart for a form field.
    Moser,
    /// Darboux radii of the level-n truncations of the Marsden-type counterexample.
    Counterexample,
    /// Bound conditions and solutions for an ODE family on a direct limit.
    Odelimit,
    /// Loop-space checks: closedness, pairing, mode ratios, lifts, global charts.
    Loop,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Moser => "moser",
            Command::Counterexample => "counterexample",
            Command::Odelimit => "odelimit",
            Command::Loop => "loop",
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Report,
}

/// `A..B`, both ends inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LevelRange {
    pub first: usize,
    pub last: usize,
}

impl LevelRange {
    pub fn levels(&self) -> Vec<usize> {
        (self.first..=self.last).collect()
    }
}

impl FromStr for LevelRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s
            .split_once("..")
            .ok_or_else(|| format!("expected A..B, got {s:?}"))?;
        let first: usize = a.trim().parse().map_err(|e| format!("bad level {a:?}: {e}"))?;
        let last: usize = b.trim().parse().map_err(|e| format!("bad level {b:?}: {e}"))?;
        if first == 0 || last < first {
            return Err(format!("need 1 ≤ A ≤ B, got {first}..{last}"));
        }
        Ok(LevelRange { first, last })
    }
}

impl fmt::Display for LevelRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.first, self.last)
    }
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Input file (form field, Marsden spec, family or loop grid, depending on the command).
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "DARBOUX_OUT", default_value = ".")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Report)]
    pub format: Format,
    /// RK4 steps (moser) or ODE steps over [t0, t0 + tau] (odelimit).
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Loop grid size (loop) or bound-sampling nodes per axis (odelimit).
    #[arg(long, global = true)]
    pub grid: Option<usize>,
    #[arg(long, global = true)]
    pub margin: Option<f64>,
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[arg(long, global = true)]
    pub levels: Option<LevelRange>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Keep the singular point fixed instead of letting it approach the base point.
    #[arg(long, global = true)]
    pub fixed_e: bool,
    #[arg(long, global = true)]
    pub family: Option<String>,
}

/// Every setting a run used, defaults included.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub command: &'static str,
    pub input: Option<String>,
    pub format: Format,
    pub steps: Option<usize>,
    pub grid: Option<usize>,
    pub margin: Option<f64>,
    pub tol: f64,
    pub levels: Option<String>,
    pub seed: u64,
    pub fixed_e: bool,
    pub family: Option<String>,
    /// Command-specific settings.
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl ExperimentConfig {
    pub fn new(command: Command, args: &CommonArgs, tol: f64) -> Self {
        ExperimentConfig {
            command: command.name(),
            input: args.input.as_ref().map(|p| p.display().to_string()),
            format: args.format,
            steps: args.steps,
            grid: args.grid,
            margin: args.margin,
            tol,
            levels: args.levels.map(|l| l.to_string()),
            seed: args.seed,
            fixed_e: args.fixed_e,
            family: args.family.clone(),
            extra: serde_json::Map::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) {
        self.extra
            .insert(key.to_string(), serde_json::to_value(value).expect("plain data"));
    }
}
