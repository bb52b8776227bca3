//! End-to-end runs: turn a validated [`ExperimentConfig`] into a populated
//! [`World`], simulate it and write the result files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cluster::{SimParams, SimResult, Simulation, World};
use crate::config::{ExperimentConfig, FamilyConfig};
use crate::error::{ConfigError, Error};
use crate::memory::{ModelRegistry, ModelSpec, OutputEstimator, Watermark};
use crate::metrics;
use crate::perfmodel::{default_cost, PerfCatalog, PerfTable};
use crate::types::{HardwareClass, ModelId};
use crate::workload::{self, LengthDataset, TraceSpec};

const LENGTH_SEED: u64 = 0x9e37_79b9_7f4a_7c15;
const TRACE_SEED: u64 = 0xbf58_476d_1ce4_e5b9;
const REQUEST_SEED: u64 = 0x94d0_49bb_1331_11eb;

pub const SUMMARY_FILE: &str = "summary.json";
pub const REQUESTS_FILE: &str = "requests.csv";
pub const CDF_FILE: &str = "ttft_cdf.csv";
pub const CONFIG_FILE: &str = "effective_config.toml";
pub const EVENTS_FILE: &str = "events.jsonl";

fn load_lengths(cfg: &ExperimentConfig) -> Result<LengthDataset, Error> {
    let w = &cfg.workload;
    let data = match &w.lengths {
        Some(p) => LengthDataset::load(p)?,
        None => LengthDataset::synthetic(
            w.synthetic_lengths.rows,
            &w.synthetic_lengths,
            cfg.seed ^ LENGTH_SEED,
        ),
    };
    Ok(match w.output_cap {
        Some(cap) => data.with_output_cap(cap),
        None => data,
    })
}

fn load_trace(cfg: &ExperimentConfig) -> Result<TraceSpec, Error> {
    let w = &cfg.workload;
    let mut trace = match &w.trace {
        Some(p) => workload::load_trace(p, w.window_s, w.sample_count, cfg.seed)?,
        None => {
            let all = w.synthetic.generate(w.window_s, cfg.seed ^ TRACE_SEED);
            workload::sample_functions(all, w.window_s, w.sample_count, cfg.seed)?
        }
    };
    let weights: Vec<(String, f64)> = cfg
        .families
        .iter()
        .map(|f| (f.name.clone(), f.weight))
        .collect();
    trace.assign_replicas(&weights, cfg.seed);
    Ok(trace)
}

fn family_table(
    cfg: &ExperimentConfig,
    fam: &FamilyConfig,
    class: HardwareClass,
) -> Result<PerfTable, Error> {
    let table = match fam.table_path(class) {
        Some(p) => PerfTable::load(class, &fam.name, p)?,
        None => {
            default_cost(fam.size, class).table(class, &fam.name, cfg.perf.l_max, cfg.perf.b_max)
        }
    };
    if table.prefill_l_max() < fam.max_seq_len - 1 || table.decode_l_max() < fam.max_seq_len {
        return Err(ConfigError::Invalid {
            field: format!("families.{}.{}_table", fam.name, class),
            msg: format!(
                "table covers prefill up to {} and decode up to {} tokens, but max_seq_len is {}",
                table.prefill_l_max(),
                table.decode_l_max(),
                fam.max_seq_len
            ),
        }
        .into());
    }
    Ok(table)
}

/// Build the simulated world for `cfg`: models, perf tables, nodes and the
/// full request stream. Everything is a pure function of the config.
pub fn build_world(cfg: &ExperimentConfig) -> Result<World, Error> {
    let lengths = load_lengths(cfg)?;
    let trace = load_trace(cfg)?;

    let mut perf = PerfCatalog::default();
    let classes: std::collections::BTreeSet<HardwareClass> =
        cfg.cluster.nodes.iter().map(|g| g.class).collect();
    for fam in &cfg.families {
        for &class in &classes {
            perf.insert(fam.name.clone(), family_table(cfg, fam, class)?);
        }
    }

    let mut datasets: BTreeMap<&str, LengthDataset> = BTreeMap::new();
    for fam in &cfg.families {
        let (clamped, changed) = lengths.clamped(fam.max_seq_len);
        if changed > 0 {
            log::info!(
                "family {}: clamped {changed} length rows to {} tokens",
                fam.name,
                fam.max_seq_len
            );
        }
        datasets.insert(fam.name.as_str(), clamped);
    }

    let mut models = ModelRegistry::default();
    let mut names: Vec<&String> = trace.model_map.values().collect();
    names.sort();
    names.dedup();
    let mut family_of: BTreeMap<ModelId, &str> = BTreeMap::new();
    for name in names {
        let fam_name = name.rsplit_once('-').map(|(f, _)| f).unwrap_or(name);
        let fam = cfg
            .families
            .iter()
            .find(|f| f.name == fam_name)
            .expect("replicas are named after families");
        let data = &datasets[fam.name.as_str()];
        let id = models.insert(ModelSpec {
            id: ModelId(0),
            name: name.clone(),
            family: fam.name.clone(),
            size: fam.size,
            param_bytes: fam.param_bytes(),
            kv_bytes_per_token: fam.kv_bytes_per_token(),
            max_seq_len: fam.max_seq_len,
            min_total_len: fam.min_total_len.unwrap_or(fam.max_seq_len),
            avg_output: OutputEstimator::new(data.mean_output(), cfg.memory.estimator_window),
        });
        family_of.insert(id, fam.name.as_str());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ REQUEST_SEED);
    let requests = workload::generate_requests(
        &trace,
        |name| {
            let id = models
                .lookup(name)
                .expect("every mapped model is registered");
            (id, &datasets[family_of[&id]])
        },
        &cfg.slo,
        &mut rng,
    );
    log::info!(
        "built world: {} nodes, {} models, {} requests",
        cfg.node_specs().len(),
        models.len(),
        requests.len()
    );

    let params = SimParams {
        slo: cfg.slo,
        cost: cfg.cost,
        watermark: Watermark::from_percent(cfg.memory.watermark_pct),
        keep_alive: cfg.memory.keep_alive_s,
        jitter: cfg.compute.jitter,
        seed: cfg.seed,
    };
    Ok(World::new(
        &cfg.node_specs(),
        models,
        perf,
        params,
        cfg.policy(),
        requests,
    ))
}

/// Build and simulate to completion.
pub fn run(cfg: &ExperimentConfig) -> Result<SimResult, Error> {
    let world = build_world(cfg)?;
    let sim = Simulation::new(world, cfg.end_time(), cfg.output.record_events);
    let (result, _) = sim.finish();
    Ok(result)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: PathBuf, bytes: &[u8]) -> Result<(), Error> {
    std::fs::write(&path, bytes).map_err(io_err(&path))
}

/// Write summary, per-request CSV, TTFT CDF, the effective config and
/// (when recorded) the event log into `dir`.
pub fn write_outputs(cfg: &ExperimentConfig, result: &SimResult, dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut summary = serde_json::to_string_pretty(&result.summary).expect("summary serializes");
    summary.push('\n');
    write_file(dir.join(SUMMARY_FILE), summary.as_bytes())?;

    let mut buf = Vec::new();
    metrics::write_requests_csv(&result.records, &mut buf).map_err(|e| Error::Io {
        path: dir.join(REQUESTS_FILE),
        source: e.into(),
    })?;
    write_file(dir.join(REQUESTS_FILE), &buf)?;

    let mut buf = Vec::new();
    metrics::write_cdf_csv(&result.cdf, &mut buf).map_err(|e| Error::Io {
        path: dir.join(CDF_FILE),
        source: e.into(),
    })?;
    write_file(dir.join(CDF_FILE), &buf)?;

    write_file(dir.join(CONFIG_FILE), cfg.to_toml_string().as_bytes())?;
    if let Some(events) = &result.events_jsonl {
        write_file(dir.join(EVENTS_FILE), events.as_bytes())?;
    }
    Ok(())
}
