//! Run configuration: one TOML file with nested tables, dotted-key command
//! line overrides, and validation that names every violated field in a
//! single error instead of stopping at the first.

use crate::error::{Error, Result};
use crate::kernel::Kernel;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    MarginalClt,
    CouplingRate,
    TruncationRate,
    C1Tails,
    LcSweep,
    ThresholdCurve,
    Sprinkle,
    Kesten,
    DualityAudit,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 9] = [
        ExperimentKind::MarginalClt,
        ExperimentKind::CouplingRate,
        ExperimentKind::TruncationRate,
        ExperimentKind::C1Tails,
        ExperimentKind::LcSweep,
        ExperimentKind::ThresholdCurve,
        ExperimentKind::Sprinkle,
        ExperimentKind::Kesten,
        ExperimentKind::DualityAudit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::MarginalClt => "marginal_clt",
            ExperimentKind::CouplingRate => "coupling_rate",
            ExperimentKind::TruncationRate => "truncation_rate",
            ExperimentKind::C1Tails => "c1_tails",
            ExperimentKind::LcSweep => "lc_sweep",
            ExperimentKind::ThresholdCurve => "threshold_curve",
            ExperimentKind::Sprinkle => "sprinkle",
            ExperimentKind::Kesten => "kesten",
            ExperimentKind::DualityAudit => "duality_audit",
        }
    }

    /// Does this experiment run crossing machinery (and therefore require a
    /// two-dimensional kernel)?
    pub fn needs_crossings(self) -> bool {
        matches!(
            self,
            ExperimentKind::LcSweep
                | ExperimentKind::ThresholdCurve
                | ExperimentKind::Sprinkle
                | ExperimentKind::Kesten
                | ExperimentKind::DualityAudit
        )
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<ExperimentKind> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
                Error::config(format!(
                    "unknown experiment '{s}'; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    /// "rational" or "stretched_exp".
    #[serde(default = "default_profile")]
    pub profile: String,
    /// Decay exponent: |x|^(-beta) tails for rational, exp(-|x|^beta) for
    /// stretched_exp.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
}

impl Default for KernelConfig {
    fn default() -> KernelConfig {
        KernelConfig {
            profile: default_profile(),
            beta: default_beta(),
            dimension: default_dimension(),
        }
    }
}

impl KernelConfig {
    pub fn build(&self) -> Result<Kernel> {
        match self.profile.as_str() {
            "rational" => Kernel::rational(self.beta, self.dimension),
            "stretched_exp" => Kernel::stretched_exp(self.beta, self.dimension),
            other => Err(Error::invalid(format!(
                "kernel.profile must be 'rational' or 'stretched_exp', got '{other}'"
            ))),
        }
    }
}

fn default_profile() -> String {
    "rational".to_string()
}

fn default_beta() -> f64 {
    3.0
}

fn default_dimension() -> usize {
    2
}

fn default_lambda() -> Vec<f64> {
    vec![16.0, 64.0, 256.0, 1024.0]
}

fn default_scales() -> Vec<f64> {
    vec![4.0, 8.0, 16.0]
}

fn default_radii() -> Vec<f64> {
    vec![2.0, 4.0, 8.0, 16.0]
}

fn default_epsilon() -> f64 {
    0.125
}

fn default_replicas() -> u64 {
    200
}

fn default_output() -> PathBuf {
    PathBuf::from("report.csv")
}

/// Everything a run needs. Unknown keys are rejected so a typo in a config
/// file or a `--set` override fails loudly instead of silently defaulting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub kernel: KernelConfig,
    /// Intensity grid.
    #[serde(default = "default_lambda")]
    pub lambda: Vec<f64>,
    /// Box / separation scales.
    #[serde(default = "default_scales", rename = "R")]
    pub scales: Vec<f64>,
    /// Truncation radii (and other per-experiment abscissas; see
    /// docs/schemas.md).
    #[serde(default = "default_radii")]
    pub r: Vec<f64>,
    /// Lattice spacing.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Dyadic coupling depth; 0 selects the intensity-dependent default.
    #[serde(default)]
    pub m: u32,
    #[serde(default = "default_replicas")]
    pub replicas: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind) -> ExperimentConfig {
        ExperimentConfig {
            experiment,
            kernel: KernelConfig::default(),
            lambda: default_lambda(),
            scales: default_scales(),
            r: default_radii(),
            epsilon: default_epsilon(),
            m: 0,
            replicas: default_replicas(),
            seed: 0,
            output: default_output(),
        }
    }

    /// Check every invariant and report all violations together.
    pub fn validate(&self) -> Result<()> {
        let mut faults: Vec<String> = Vec::new();
        let positive_list = |name: &str, xs: &[f64], faults: &mut Vec<String>| {
            if xs.is_empty() {
                faults.push(format!("{name}: list must be nonempty"));
            } else if xs.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                faults.push(format!("{name}: entries must be finite and positive"));
            }
        };
        positive_list("lambda", &self.lambda, &mut faults);
        positive_list("R", &self.scales, &mut faults);
        positive_list("r", &self.r, &mut faults);
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            faults.push(format!("epsilon: must be finite and positive, got {}", self.epsilon));
        }
        if self.m > crate::coupling::DEPTH_CAP {
            faults.push(format!(
                "m: dyadic depth must be at most {}, got {}",
                crate::coupling::DEPTH_CAP,
                self.m
            ));
        }
        if self.replicas < 30 {
            faults.push(format!("replicas: must be at least 30, got {}", self.replicas));
        }
        if let Err(e) = self.kernel.build() {
            faults.push(format!("kernel: {e}"));
        }
        if self.experiment.needs_crossings() && self.kernel.dimension != 2 {
            faults.push(format!(
                "kernel.dimension: {} requires dimension 2, got {}",
                self.experiment, self.kernel.dimension
            ));
        }
        if self.experiment == ExperimentKind::CouplingRate {
            let per_unit = 1.0 / self.epsilon;
            let rounded = per_unit.round();
            if (per_unit - rounded).abs() > 1e-9
                || rounded < 2.0
                || !(rounded as u64).is_power_of_two()
            {
                faults.push(format!(
                    "epsilon: coupling_rate needs 1/epsilon to be an integer power of two \
                     at least 2, got {}",
                    self.epsilon
                ));
            }
        }
        if self.output.as_os_str().is_empty() {
            faults.push("output: path must be nonempty".to_string());
        }
        if faults.is_empty() {
            Ok(())
        } else {
            Err(Error::config(faults.join("; ")))
        }
    }

    /// Deterministic TOML echo for report headers. The seed line is spliced
    /// in afterwards: the seed spans the full unsigned 64-bit range while
    /// TOML integers stop at i64::MAX.
    pub fn echo_toml(&self) -> String {
        let mut flat = self.clone();
        flat.seed = 0;
        let body = toml::to_string(&flat).expect("config serializes");
        let seed_line = format!("seed = {}", self.seed);
        let lines: Vec<String> = body
            .lines()
            .map(|l| if l == "seed = 0" { seed_line.clone() } else { l.to_string() })
            .collect();
        lines.join("\n") + "\n"
    }
}

/// Parse a config file body into a mutable TOML table.
pub fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| Error::config(format!("config file does not parse as TOML: {e}")))
}

/// Apply one `key=value` override, with dots in the key descending into
/// nested tables (`kernel.beta=2.5`). The value is parsed as a TOML value;
/// anything that does not parse is taken as a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| {
        Error::config(format!("override '{spec}' must have the form key=value"))
    })?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::config(format!("override '{spec}' has an empty key")));
    }
    let value = parse_value(raw.trim());

    let mut node = table;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            node.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| {
            Error::config(format!("override '{key}': '{part}' is not a table"))
        })?;
    }
    unreachable!("split always yields at least one part");
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Deserialize and validate a finished table.
pub fn from_table(table: toml::Table) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::config(format!("config does not match the schema: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}
