//! Experiment configuration: a single TOML document with defaults for every
//! field, dotted `key=value` overrides and up-front validation.
//!
//! Relative file paths are resolved against the directory of the config file
//! when it is loaded, so the effective config written next to the results
//! can be re-run from anywhere.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::{Ablations, NodeSpec, Policy, PolicyKind};
use crate::error::ConfigError;
use crate::perfmodel::{CostParams, SizeClass};
use crate::types::{Bytes, HardwareClass, GIB, KIB};
use crate::workload::{SloSpec, SyntheticLengths, SyntheticTrace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub cluster: ClusterConfig,
    pub families: Vec<FamilyConfig>,
    pub perf: PerfConfig,
    pub workload: WorkloadConfig,
    pub slo: SloSpec,
    pub policy: PolicyConfig,
    pub memory: MemoryConfig,
    pub cost: CostParams,
    pub compute: ComputeConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub nodes: Vec<NodeGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeGroup {
    pub class: HardwareClass,
    #[serde(default = "one")]
    pub count: u32,
    pub capacity_gib: f64,
}

fn one() -> u32 {
    1
}

/// A model family: every sampled function is served by a replica of one
/// family, sharing its size, memory shape and perf tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    pub name: String,
    pub size: SizeClass,
    pub param_gib: f64,
    pub kv_kib_per_token: f64,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: u32,
    /// L_min in tokens; defaults to `max_seq_len`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_total_len: Option<u32>,
    /// Relative share of sampled functions mapped to this family.
    #[serde(default = "unit_weight")]
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu_table: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu_table: Option<PathBuf>,
}

fn default_max_seq_len() -> u32 {
    4096
}

fn unit_weight() -> f64 {
    1.0
}

impl FamilyConfig {
    pub fn param_bytes(&self) -> Bytes {
        (self.param_gib * GIB as f64).round() as Bytes
    }

    pub fn kv_bytes_per_token(&self) -> Bytes {
        (self.kv_kib_per_token * KIB as f64).round() as Bytes
    }

    pub fn table_path(&self, class: HardwareClass) -> Option<&Path> {
        match class {
            HardwareClass::Cpu => self.cpu_table.as_deref(),
            HardwareClass::Gpu => self.gpu_table.as_deref(),
        }
    }

    /// Built-in families roughly shaped like 3B, 7B and 13B decoder models
    /// in half precision.
    pub fn builtin(size: SizeClass) -> Self {
        let (param_gib, kv_kib_per_token) = match size {
            SizeClass::B3 => (6.4, 112.0),
            SizeClass::B7 => (14.0, 512.0),
            SizeClass::B13 => (26.0, 800.0),
        };
        FamilyConfig {
            name: size.as_str().to_string(),
            size,
            param_gib,
            kv_kib_per_token,
            max_seq_len: default_max_seq_len(),
            min_total_len: None,
            weight: 1.0,
            cpu_table: None,
            gpu_table: None,
        }
    }
}

/// Grid used for the synthetic perf tables of families without table files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerfConfig {
    pub l_max: u32,
    pub b_max: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    /// Invocation trace CSV (`timestamp_s,function_id`). When absent a
    /// synthetic trace is generated from `synthetic`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    pub window_s: f64,
    pub sample_count: usize,
    /// Extra simulated time after the window so in-flight requests can finish.
    pub drain_s: f64,
    /// Length dataset CSV (`input_tokens,output_tokens`). When absent rows
    /// are drawn from `synthetic_lengths`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lengths: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_cap: Option<u32>,
    pub synthetic: SyntheticTrace,
    pub synthetic_lengths: SyntheticLengths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub disable_sharing: bool,
    pub disable_cpu: bool,
    pub disable_defrag: bool,
    pub disable_validation: bool,
    /// Baseline scale-out thresholds keyed `<size>_<class>`, e.g. `7b_gpu`.
    /// Missing keys keep their defaults.
    pub thresholds: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    pub watermark_pct: f64,
    pub keep_alive_s: f64,
    /// Completed requests remembered by the output-length estimator; 0
    /// freezes it at the dataset mean.
    pub estimator_window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComputeConfig {
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub record_events: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            cluster: ClusterConfig::default(),
            families: vec![FamilyConfig::builtin(SizeClass::B7)],
            perf: PerfConfig::default(),
            workload: WorkloadConfig::default(),
            slo: SloSpec::default(),
            policy: PolicyConfig::default(),
            memory: MemoryConfig::default(),
            cost: CostParams::default(),
            compute: ComputeConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            nodes: vec![
                NodeGroup {
                    class: HardwareClass::Cpu,
                    count: 4,
                    capacity_gib: 256.0,
                },
                NodeGroup {
                    class: HardwareClass::Gpu,
                    count: 4,
                    capacity_gib: 80.0,
                },
            ],
        }
    }
}

impl Default for PerfConfig {
    fn default() -> Self {
        PerfConfig {
            l_max: 4096,
            b_max: 256,
        }
    }
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            trace: None,
            window_s: 1800.0,
            sample_count: 32,
            drain_s: 120.0,
            lengths: None,
            output_cap: None,
            synthetic: SyntheticTrace::default(),
            synthetic_lengths: SyntheticLengths::default(),
        }
    }
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            kind: PolicyKind::Mesh,
            disable_sharing: false,
            disable_cpu: false,
            disable_defrag: false,
            disable_validation: false,
            thresholds: BTreeMap::new(),
        }
    }
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            watermark_pct: 20.0,
            keep_alive_s: 1.0,
            estimator_window: 1000,
        }
    }
}

impl Default for ComputeConfig {
    fn default() -> Self {
        ComputeConfig { jitter: 0.0 }
    }
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
            record_events: false,
        }
    }
}

fn invalid(field: impl Into<String>, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        msg: msg.into(),
    }
}

/// Parse `key=value` and write it into `doc` at the dotted key path.
/// The value is read as a TOML literal when possible and as a bare string
/// otherwise, so `policy.kind=exclusive` and `seed=7` both work.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::BadOverride(spec.to_string()));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("non-empty key");
    let mut table = doc;
    for (depth, part) in parents.iter().enumerate() {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            invalid(
                parts[..=depth].join("."),
                "cannot override inside a non-table value",
            )
        })?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parse TOML text, apply overrides, resolve relative paths against
    /// `base_dir` and validate.
    pub fn from_toml_str(
        text: &str,
        overrides: &[String],
        base_dir: &Path,
    ) -> Result<Self, ConfigError> {
        let mut doc: toml::Table =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: ExperimentConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|_| ConfigError::MissingFile {
            field: "config".into(),
            path: path.to_path_buf(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, overrides, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                let joined = base.join(&*p);
                *p = std::path::absolute(&joined).unwrap_or(joined);
            }
        };
        for f in &mut self.families {
            f.cpu_table.iter_mut().for_each(fix);
            f.gpu_table.iter_mut().for_each(fix);
        }
        self.workload.trace.iter_mut().for_each(fix);
        self.workload.lengths.iter_mut().for_each(fix);
    }

    /// The defaults-resolved document, suitable for re-running.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn node_specs(&self) -> Vec<NodeSpec> {
        self.cluster
            .nodes
            .iter()
            .flat_map(|g| {
                let spec = NodeSpec {
                    class: g.class,
                    capacity: (g.capacity_gib * GIB as f64).round() as Bytes,
                };
                std::iter::repeat_n(spec, g.count as usize)
            })
            .collect()
    }

    pub fn policy(&self) -> Policy {
        let mut p = Policy::new(self.policy.kind);
        p.ablations = Ablations {
            disable_sharing: self.policy.disable_sharing,
            disable_cpu: self.policy.disable_cpu,
            disable_defrag: self.policy.disable_defrag,
            disable_validation: self.policy.disable_validation,
        };
        for (key, &v) in &self.policy.thresholds {
            let (size, class) = parse_threshold_key(key).expect("validated");
            p.thresholds.set(size, class, v);
        }
        p
    }

    pub fn end_time(&self) -> f64 {
        self.workload.window_s + self.workload.drain_s
    }

    /// Check every field before anything runs. Referenced files must exist.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.cluster.nodes.is_empty() || self.cluster.nodes.iter().all(|g| g.count == 0) {
            return Err(invalid("cluster.nodes", "at least one node is required"));
        }
        for (i, g) in self.cluster.nodes.iter().enumerate() {
            if !(g.capacity_gib > 0.0 && g.capacity_gib.is_finite()) {
                return Err(invalid(
                    format!("cluster.nodes[{i}].capacity_gib"),
                    "must be positive",
                ));
            }
        }

        if self.families.is_empty() {
            return Err(invalid("families", "at least one model family is required"));
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, f) in self.families.iter().enumerate() {
            let field = |k: &str| format!("families[{i}].{k}");
            if f.name.is_empty() || f.name.contains(char::is_whitespace) {
                return Err(invalid(field("name"), "must be a non-empty word"));
            }
            if !names.insert(f.name.as_str()) {
                return Err(invalid(
                    field("name"),
                    format!("duplicate family `{}`", f.name),
                ));
            }
            if !(f.param_gib > 0.0 && f.param_gib.is_finite()) {
                return Err(invalid(field("param_gib"), "must be positive"));
            }
            if !(f.kv_kib_per_token > 0.0 && f.kv_kib_per_token.is_finite()) {
                return Err(invalid(field("kv_kib_per_token"), "must be positive"));
            }
            if f.max_seq_len < 2 {
                return Err(invalid(field("max_seq_len"), "must be at least 2"));
            }
            if let Some(l) = f.min_total_len {
                if l == 0 || l > f.max_seq_len {
                    return Err(invalid(
                        field("min_total_len"),
                        "must be in 1..=max_seq_len",
                    ));
                }
            }
            if !(f.weight >= 0.0 && f.weight.is_finite()) {
                return Err(invalid(field("weight"), "must be non-negative"));
            }
            for (class, key) in [
                (HardwareClass::Cpu, "cpu_table"),
                (HardwareClass::Gpu, "gpu_table"),
            ] {
                if let Some(p) = f.table_path(class) {
                    if !p.is_file() {
                        return Err(ConfigError::MissingFile {
                            field: field(key),
                            path: p.to_path_buf(),
                        });
                    }
                }
            }
        }
        if self.families.iter().all(|f| f.weight == 0.0) {
            return Err(invalid(
                "families",
                "at least one family needs a positive weight",
            ));
        }

        if self.perf.b_max == 0 || self.perf.l_max < 2 {
            return Err(invalid("perf", "b_max must be >= 1 and l_max >= 2"));
        }

        let w = &self.workload;
        if !(w.window_s > 0.0 && w.window_s.is_finite()) {
            return Err(invalid("workload.window_s", "must be positive"));
        }
        if !(w.drain_s >= 0.0 && w.drain_s.is_finite()) {
            return Err(invalid("workload.drain_s", "must be non-negative"));
        }
        if w.sample_count == 0 {
            return Err(invalid("workload.sample_count", "must be at least 1"));
        }
        if let Some(p) = &w.trace {
            if !p.is_file() {
                return Err(ConfigError::MissingFile {
                    field: "workload.trace".into(),
                    path: p.clone(),
                });
            }
        } else {
            let s = &w.synthetic;
            if s.functions < w.sample_count {
                return Err(invalid(
                    "workload.synthetic.functions",
                    format!(
                        "must be at least workload.sample_count ({})",
                        w.sample_count
                    ),
                ));
            }
            if !(s.total_rate > 0.0 && s.total_rate.is_finite()) {
                return Err(invalid("workload.synthetic.total_rate", "must be positive"));
            }
            if !(s.zipf_exponent >= 0.0 && s.burstiness >= 0.0 && s.bucket_s > 0.0) {
                return Err(invalid(
                    "workload.synthetic",
                    "zipf_exponent and burstiness must be >= 0, bucket_s > 0",
                ));
            }
        }
        if let Some(p) = &w.lengths {
            if !p.is_file() {
                return Err(ConfigError::MissingFile {
                    field: "workload.lengths".into(),
                    path: p.clone(),
                });
            }
        } else {
            let l = &w.synthetic_lengths;
            if l.rows == 0
                || !(l.input_median >= 1.0 && l.output_median >= 1.0)
                || !(l.input_sigma > 0.0 && l.output_sigma > 0.0)
                || l.input_max == 0
                || l.output_max == 0
            {
                return Err(invalid(
                    "workload.synthetic_lengths",
                    "rows, medians, sigmas and maxima must be positive",
                ));
            }
        }
        if w.output_cap == Some(0) {
            return Err(invalid("workload.output_cap", "must be at least 1"));
        }

        self.slo.validate().map_err(|m| invalid("slo", m))?;
        for key in self.policy.thresholds.keys() {
            if parse_threshold_key(key).is_none() {
                return Err(invalid(
                    format!("policy.thresholds.{key}"),
                    "expected `<3b|7b|13b>_<cpu|gpu>`",
                ));
            }
        }
        if self.policy.thresholds.values().any(|&v| v == 0) {
            return Err(invalid(
                "policy.thresholds",
                "thresholds must be at least 1",
            ));
        }
        let m = &self.memory;
        if !(m.watermark_pct >= 0.0 && m.watermark_pct <= 1000.0) {
            return Err(invalid("memory.watermark_pct", "must be in [0, 1000]"));
        }
        if !(m.keep_alive_s >= 0.0 && m.keep_alive_s.is_finite()) {
            return Err(invalid("memory.keep_alive_s", "must be non-negative"));
        }
        self.cost.validate().map_err(|m| invalid("cost", m))?;
        if !(self.compute.jitter >= 0.0 && self.compute.jitter < 1.0) {
            return Err(invalid("compute.jitter", "must be in [0, 1)"));
        }
        if self.output.dir.as_os_str().is_empty() {
            return Err(invalid("output.dir", "must not be empty"));
        }
        Ok(())
    }
}

fn parse_threshold_key(key: &str) -> Option<(SizeClass, HardwareClass)> {
    let (size, class) = key.split_once('_')?;
    let size = match size {
        "3b" => SizeClass::B3,
        "7b" => SizeClass::B7,
        "13b" => SizeClass::B13,
        _ => return None,
    };
    let class = match class {
        "cpu" => HardwareClass::Cpu,
        "gpu" => HardwareClass::Gpu,
        _ => return None,
    };
    Some((size, class))
}
