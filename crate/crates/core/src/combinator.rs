//! Parameter-spec parsing and combination enumeration.
//!
//! Two counts coexist on purpose. `enumerate` follows the rule every sweep
//! actually runs: per clause/RTL family either one alternative is chosen or
//! the family is absent, the all-absent assignment included, plus the global
//! serial baseline. `count_paper_formula` reproduces the published closed
//! form Σ_i (2^{n_i}−1)(2^{rtl+d}−1) verbatim, treating rtl and d as family
//! counts; it cannot express multi-valued families and yields 0 when
//! rtl+d = 0, so it is reported alongside, never used to drive the sweep.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_ENUMERATION_CAP: u64 = 100_000;

/// The parameter file shipped with the tool (three external backends with
/// four flags each, one schedule family, one thread-count family).
pub const DEFAULT_PARAMS_JSON: &str = include_str!("../../../share/params.default.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub id: String,
    pub flags: Vec<String>,
    /// Adapter command template for external backends; the built-in backend
    /// takes none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    /// Wall-clock budget for one adapter invocation. Default 600 seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_seconds: Option<u64>,
}

pub const DEFAULT_ADAPTER_TIMEOUT_SECONDS: u64 = 600;

impl BackendSpec {
    pub fn adapter_timeout(&self) -> std::time::Duration {
        std::time::Duration::from_secs(self.timeout_seconds.unwrap_or(DEFAULT_ADAPTER_TIMEOUT_SECONDS))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClauseFamily {
    #[serde(rename = "clause")]
    pub name: String,
    #[serde(rename = "values")]
    pub alternatives: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RtlFamily {
    #[serde(rename = "routine")]
    pub name: String,
    #[serde(rename = "args")]
    pub alternatives: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    #[serde(default)]
    pub backends: Vec<BackendSpec>,
    #[serde(rename = "omp_directive_params", default)]
    pub clause_families: Vec<ClauseFamily>,
    #[serde(rename = "omp_rtl_params", default)]
    pub rtl_families: Vec<RtlFamily>,
}

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("parameter spec is not valid JSON: {0}")]
    Json(String),
    #[error("parameter spec violates the schema at {path}: {detail}")]
    SchemaViolation { path: String, detail: String },
    #[error("parameter spec declares no backends")]
    EmptySpec,
    #[error("enumeration would produce {count} combinations, above the cap of {cap}")]
    TooLarge { count: u128, cap: u64 },
}

fn schema_err(path: impl Into<String>, detail: impl Into<String>) -> SpecError {
    SpecError::SchemaViolation {
        path: path.into(),
        detail: detail.into(),
    }
}

/// One point of the sweep. Serial 0 is the baseline: no backend, no flags,
/// no clauses, no RTL calls.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Combination {
    pub serial: u64,
    pub backend_id: Option<String>,
    pub flags: Vec<String>,
    /// (family, chosen alternative) pairs in spec order; absent families are
    /// omitted.
    pub clauses: Vec<(String, String)>,
    pub rtl: Vec<(String, String)>,
}

impl Combination {
    pub fn serial_baseline() -> Self {
        Combination {
            serial: 0,
            backend_id: None,
            flags: Vec::new(),
            clauses: Vec::new(),
            rtl: Vec::new(),
        }
    }

    pub fn is_serial(&self) -> bool {
        self.backend_id.is_none()
    }

    /// Short human-readable tag used in progress lines and reports.
    pub fn label(&self) -> String {
        match &self.backend_id {
            None => "serial".to_string(),
            Some(backend) => {
                let mut out = format!("{backend}[{}]", self.flags.join("+"));
                for (name, value) in &self.clauses {
                    out.push_str(&format!(" {name}({value})"));
                }
                for (name, value) in &self.rtl {
                    out.push_str(&format!(" {name}({value})"));
                }
                out
            }
        }
    }
}

pub fn parse_spec(json_text: &str) -> Result<ParamSpec, SpecError> {
    parse_spec_docs(&[json_text])
}

/// Parse one merged document or several files carrying disjoint top-level
/// keys (the schema's three keys may be split across files).
pub fn parse_spec_docs(json_texts: &[&str]) -> Result<ParamSpec, SpecError> {
    let mut merged = serde_json::Map::new();
    for text in json_texts {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| SpecError::Json(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| schema_err("$", "top level must be a JSON object"))?;
        for (key, val) in obj {
            if merged.insert(key.clone(), val.clone()).is_some() {
                return Err(schema_err(
                    format!("$.{key}"),
                    "key appears in more than one spec file",
                ));
            }
        }
    }
    let spec: ParamSpec = serde_json::from_value(serde_json::Value::Object(merged))
        .map_err(|e| schema_err("$", e.to_string()))?;
    validate(&spec)?;
    Ok(spec)
}

fn check_unique(path: &str, what: &str, items: &[&str]) -> Result<(), SpecError> {
    let mut seen = std::collections::HashSet::new();
    for item in items {
        if item.is_empty() {
            return Err(schema_err(path, format!("empty {what}")));
        }
        if !seen.insert(*item) {
            return Err(schema_err(path, format!("duplicate {what} `{item}`")));
        }
    }
    Ok(())
}

pub fn validate(spec: &ParamSpec) -> Result<(), SpecError> {
    if spec.backends.is_empty() {
        return Err(SpecError::EmptySpec);
    }
    let ids: Vec<&str> = spec.backends.iter().map(|b| b.id.as_str()).collect();
    check_unique("$.backends", "backend id", &ids)?;
    for (i, backend) in spec.backends.iter().enumerate() {
        let path = format!("$.backends[{i}].flags");
        let flags: Vec<&str> = backend.flags.iter().map(String::as_str).collect();
        check_unique(&path, "flag", &flags)?;
        if backend.id == "naive" && backend.command.is_some() {
            return Err(schema_err(
                format!("$.backends[{i}].command"),
                "backend `naive` is built in and takes no command",
            ));
        }
    }
    let clause_names: Vec<&str> = spec.clause_families.iter().map(|f| f.name.as_str()).collect();
    check_unique("$.omp_directive_params", "clause", &clause_names)?;
    for (i, family) in spec.clause_families.iter().enumerate() {
        let path = format!("$.omp_directive_params[{i}].values");
        if family.alternatives.is_empty() {
            return Err(schema_err(&path, "family must list at least one value"));
        }
        let values: Vec<&str> = family.alternatives.iter().map(String::as_str).collect();
        check_unique(&path, "value", &values)?;
    }
    let rtl_names: Vec<&str> = spec.rtl_families.iter().map(|f| f.name.as_str()).collect();
    check_unique("$.omp_rtl_params", "routine", &rtl_names)?;
    for (i, family) in spec.rtl_families.iter().enumerate() {
        let path = format!("$.omp_rtl_params[{i}].args");
        if family.alternatives.is_empty() {
            return Err(schema_err(&path, "family must list at least one argument"));
        }
        let values: Vec<&str> = family.alternatives.iter().map(String::as_str).collect();
        check_unique(&path, "argument", &values)?;
    }
    Ok(())
}

fn family_radix(spec: &ParamSpec) -> u128 {
    let mut product: u128 = 1;
    for family in &spec.clause_families {
        product = product.saturating_mul(family.alternatives.len() as u128 + 1);
    }
    for family in &spec.rtl_families {
        product = product.saturating_mul(family.alternatives.len() as u128 + 1);
    }
    product
}

fn subsets_of(n: usize) -> u128 {
    if n >= 127 {
        return u128::MAX;
    }
    (1u128 << n) - 1
}

/// Number of combinations `enumerate` would yield (including the serial
/// baseline). Saturating.
pub fn count_enumerated(spec: &ParamSpec) -> u128 {
    let per_assignment = family_radix(spec);
    let mut total: u128 = 1;
    for backend in &spec.backends {
        total = total.saturating_add(subsets_of(backend.flags.len()).saturating_mul(per_assignment));
    }
    total
}

/// The published closed form Σ_{i∈C} (2^{n_i}−1)(2^{rtl+d}−1) with rtl and d
/// the counts of RTL and directive families. Saturating; yields 0 when
/// rtl + d = 0.
pub fn count_paper_formula(spec: &ParamSpec) -> u128 {
    let rtl_plus_d = spec.rtl_families.len() + spec.clause_families.len();
    let family_factor = subsets_of(rtl_plus_d);
    let mut total: u128 = 0;
    for backend in &spec.backends {
        total = total.saturating_add(subsets_of(backend.flags.len()).saturating_mul(family_factor));
    }
    total
}

pub fn enumerate(spec: &ParamSpec) -> Result<Vec<Combination>, SpecError> {
    enumerate_capped(spec, DEFAULT_ENUMERATION_CAP)
}

/// Deterministic order: serial baseline first; backends in spec order; flag
/// subsets in binary counting order (bit j of the mask selects flags[j]);
/// family assignments as a mixed-radix odometer over directive then RTL
/// families in spec order, last family cycling fastest, digit 0 = absent.
pub fn enumerate_capped(spec: &ParamSpec, cap: u64) -> Result<Vec<Combination>, SpecError> {
    validate(spec)?;
    let count = count_enumerated(spec);
    if count > cap as u128 {
        return Err(SpecError::TooLarge { count, cap });
    }

    let mut out = Vec::with_capacity(count as usize);
    out.push(Combination::serial_baseline());
    let mut serial: u64 = 1;

    let family_sizes: Vec<usize> = spec
        .clause_families
        .iter()
        .map(|f| f.alternatives.len())
        .chain(spec.rtl_families.iter().map(|f| f.alternatives.len()))
        .collect();
    let assignments = assignment_odometer(&family_sizes);

    for backend in &spec.backends {
        let n = backend.flags.len();
        for mask in 1u64..(1u64 << n) {
            let flags: Vec<String> = (0..n)
                .filter(|j| mask & (1 << j) != 0)
                .map(|j| backend.flags[j].clone())
                .collect();
            for digits in &assignments {
                let mut clauses = Vec::new();
                let mut rtl = Vec::new();
                for (f, &digit) in digits.iter().enumerate() {
                    if digit == 0 {
                        continue;
                    }
                    if f < spec.clause_families.len() {
                        let family = &spec.clause_families[f];
                        clauses.push((family.name.clone(), family.alternatives[digit - 1].clone()));
                    } else {
                        let family = &spec.rtl_families[f - spec.clause_families.len()];
                        rtl.push((family.name.clone(), family.alternatives[digit - 1].clone()));
                    }
                }
                out.push(Combination {
                    serial,
                    backend_id: Some(backend.id.clone()),
                    flags: flags.clone(),
                    clauses,
                    rtl,
                });
                serial += 1;
            }
        }
    }
    Ok(out)
}

/// All digit vectors over the given radices (+1 for "absent"), last digit
/// fastest, starting from all-absent.
fn assignment_odometer(sizes: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = sizes.iter().map(|&s| s + 1).product();
    let mut out = Vec::with_capacity(total);
    let mut digits = vec![0usize; sizes.len()];
    loop {
        out.push(digits.clone());
        let mut place = sizes.len();
        loop {
            if place == 0 {
                return out;
            }
            place -= 1;
            if digits[place] < sizes[place] {
                digits[place] += 1;
                for d in &mut digits[place + 1..] {
                    *d = 0;
                }
                break;
            }
        }
    }
}
