//! Request streams: invocation traces, length datasets and SLO targets.
//!
//! Traces are flat `timestamp_s,function_id` CSV files. Azure-style per-minute
//! invocation histograms can be flattened with [`spread_minute_counts`], which
//! places the `n` invocations of a minute at evenly spaced offsets
//! `60·m + 60·(k + 0.5)/n`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::WorkloadError;
use crate::simcore::SimTime;
use crate::types::{ModelId, RequestId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestState {
    Pending,
    Prefilling,
    Decoding,
    Complete,
    Dropped,
    Evicted,
}

#[derive(Debug, Clone)]
pub struct Request {
    pub id: RequestId,
    pub model: ModelId,
    pub arrival: SimTime,
    pub input_len: u32,
    /// Ground truth; only the simulated engine reads this.
    pub true_output_len: u32,
    pub emission_times: Vec<SimTime>,
    pub state: RequestState,
    /// TTFT budget resolved from the SLO at creation.
    pub ttft_slo: f64,
    /// Set until the (re-)prefill that rebuilds the KV-cache has run.
    pub needs_prefill: bool,
    pub evictions: u32,
}

impl Request {
    pub fn new(
        id: RequestId,
        model: ModelId,
        arrival: SimTime,
        input_len: u32,
        true_output_len: u32,
        slo: &SloSpec,
    ) -> Self {
        assert!(
            input_len >= 1 && true_output_len >= 1,
            "lengths must be positive"
        );
        Request {
            id,
            model,
            arrival,
            input_len,
            true_output_len,
            emission_times: Vec::new(),
            state: RequestState::Pending,
            ttft_slo: slo.ttft_slo(input_len),
            needs_prefill: true,
            evictions: 0,
        }
    }

    /// Tokens generated so far (O).
    pub fn generated(&self) -> u32 {
        self.emission_times.len() as u32
    }

    /// Tokens whose KV-cache entries exist or are about to: input plus output so far.
    pub fn context_len(&self) -> u32 {
        self.input_len + self.generated()
    }

    /// Deadline of the next token under the cumulative SLO.
    pub fn next_deadline(&self, tpot: f64) -> f64 {
        self.arrival.secs() + self.ttft_slo + tpot * self.generated() as f64
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.state, RequestState::Complete | RequestState::Dropped)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SloSpec {
    pub ttft_base: f64,
    pub ttft_per_token_divisor: f64,
    pub tpot: f64,
}

impl Default for SloSpec {
    fn default() -> Self {
        SloSpec {
            ttft_base: 2.0,
            ttft_per_token_divisor: 512.0,
            tpot: 0.25,
        }
    }
}

impl SloSpec {
    /// `max(ttft_base, input_len / divisor)` seconds.
    pub fn ttft_slo(&self, input_len: u32) -> f64 {
        self.ttft_base
            .max(input_len as f64 / self.ttft_per_token_divisor)
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("ttft_base", self.ttft_base),
            ("ttft_per_token_divisor", self.ttft_per_token_divisor),
            ("tpot", self.tpot),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be strictly positive, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub timestamp: SimTime,
    pub function_id: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceSpec {
    pub invocations: Vec<Invocation>,
    /// function_id -> model name.
    pub model_map: BTreeMap<String, String>,
}

#[derive(Debug, Deserialize)]
struct TraceRow {
    timestamp_s: f64,
    function_id: String,
}

#[derive(Debug, Deserialize)]
struct LengthRow {
    input_tokens: i64,
    output_tokens: i64,
}

fn parse_err(path: &Path, err: &csv::Error) -> WorkloadError {
    let line = err.position().map(|p| p.line()).unwrap_or(0);
    WorkloadError::Parse {
        path: path.to_path_buf(),
        line,
        msg: err.to_string(),
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>, WorkloadError> {
    let file = std::fs::File::open(path).map_err(|source| WorkloadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn check_header(
    rdr: &mut csv::Reader<std::fs::File>,
    path: &Path,
    expected: &[&str],
) -> Result<(), WorkloadError> {
    let headers = rdr.headers().map_err(|e| parse_err(path, &e))?;
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(WorkloadError::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!(
                "expected header `{}`, found `{}`",
                expected.join(","),
                got.join(",")
            ),
        });
    }
    Ok(())
}

/// Load a flat invocation trace, keep `[0, window)` and sample
/// `sample_count` distinct functions uniformly with `seed`.
///
/// The returned model map is the identity; see [`TraceSpec::assign_replicas`].
pub fn load_trace(
    path: &Path,
    window: f64,
    sample_count: usize,
    seed: u64,
) -> Result<TraceSpec, WorkloadError> {
    let mut rdr = open_csv(path)?;
    check_header(&mut rdr, path, &["timestamp_s", "function_id"])?;
    let mut all = Vec::new();
    for rec in rdr.deserialize::<TraceRow>() {
        let row = rec.map_err(|e| parse_err(path, &e))?;
        if !(row.timestamp_s >= 0.0 && row.timestamp_s.is_finite()) {
            return Err(WorkloadError::Parse {
                path: path.to_path_buf(),
                line: all.len() as u64 + 2,
                msg: format!("timestamp must be non-negative, got {}", row.timestamp_s),
            });
        }
        all.push(Invocation {
            timestamp: SimTime::from_secs(row.timestamp_s),
            function_id: row.function_id,
        });
    }
    sample_functions(all, window, sample_count, seed)
}

/// Windowing and uniform function sampling shared by file and synthetic traces.
pub fn sample_functions(
    all: Vec<Invocation>,
    window: f64,
    sample_count: usize,
    seed: u64,
) -> Result<TraceSpec, WorkloadError> {
    let functions: Vec<&str> = all
        .iter()
        .map(|i| i.function_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if sample_count > functions.len() {
        return Err(WorkloadError::NotEnoughFunctions {
            requested: sample_count,
            available: functions.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, functions.len(), sample_count).into_vec();
    picked.sort_unstable();
    let chosen: BTreeSet<String> = picked.iter().map(|&i| functions[i].to_string()).collect();

    let mut invocations: Vec<Invocation> = all
        .into_iter()
        .filter(|inv| inv.timestamp.secs() < window && chosen.contains(&inv.function_id))
        .collect();
    invocations.sort_by_key(|a| a.timestamp);
    let model_map = chosen.iter().map(|f| (f.clone(), f.clone())).collect();
    Ok(TraceSpec {
        invocations,
        model_map,
    })
}

impl TraceSpec {
    /// Map every function to a replica of one of the model families,
    /// apportioning functions to families by `weights` (largest remainder)
    /// and shuffling the assignment with `seed`. Replica names are
    /// `<family>-<index>`.
    pub fn assign_replicas(&mut self, families: &[(String, f64)], seed: u64) {
        let functions: Vec<String> = self.model_map.keys().cloned().collect();
        let counts = apportion(
            functions.len(),
            &families.iter().map(|f| f.1).collect::<Vec<_>>(),
        );
        let mut labels = Vec::with_capacity(functions.len());
        for ((family, _), n) in families.iter().zip(counts) {
            for _ in 0..n {
                labels.push(family.clone());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
        for i in (1..labels.len()).rev() {
            let j = rng.random_range(0..=i);
            labels.swap(i, j);
        }
        for (i, (f, family)) in functions.iter().zip(labels).enumerate() {
            self.model_map.insert(f.clone(), format!("{family}-{i:03}"));
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for inv in &self.invocations {
            if !self.model_map.contains_key(&inv.function_id) {
                return Err(format!(
                    "function `{}` has no model mapping",
                    inv.function_id
                ));
            }
        }
        Ok(())
    }
}

/// Largest-remainder split of `total` items by `weights`.
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut rest = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let frac = |i: usize| ((exact[i] - exact[i].floor()) * 1e9).round() as i64;
        frac(b).cmp(&frac(a)).then(a.cmp(&b))
    });
    for i in order {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

/// Flatten one function's per-minute invocation counts into timestamps.
pub fn spread_minute_counts(function_id: &str, counts: &[u32]) -> Vec<Invocation> {
    let mut out = Vec::new();
    for (minute, &n) in counts.iter().enumerate() {
        for k in 0..n {
            let t = 60.0 * minute as f64 + 60.0 * (k as f64 + 0.5) / n as f64;
            out.push(Invocation {
                timestamp: SimTime::from_secs(t),
                function_id: function_id.to_string(),
            });
        }
    }
    out
}

/// Parameters for a synthetic serverless-style trace: Zipf-like popularity
/// across functions and per-minute lognormal burst factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTrace {
    pub functions: usize,
    /// Aggregate mean request rate over all functions, per second.
    pub total_rate: f64,
    pub zipf_exponent: f64,
    /// Sigma of the per-minute lognormal rate multiplier.
    pub burstiness: f64,
    pub bucket_s: f64,
}

impl Default for SyntheticTrace {
    fn default() -> Self {
        SyntheticTrace {
            functions: 500,
            total_rate: 2.0,
            zipf_exponent: 1.0,
            burstiness: 1.0,
            bucket_s: 60.0,
        }
    }
}

impl SyntheticTrace {
    pub fn generate(&self, horizon: f64, seed: u64) -> Vec<Invocation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights: Vec<f64> = (0..self.functions)
            .map(|i| 1.0 / ((i + 1) as f64).powf(self.zipf_exponent))
            .collect();
        let wsum: f64 = weights.iter().sum();
        let burst = LogNormal::new(
            -0.5 * self.burstiness * self.burstiness,
            self.burstiness.max(1e-9),
        )
        .expect("valid lognormal");
        let buckets = (horizon / self.bucket_s).ceil().max(0.0) as usize;
        let mut out = Vec::new();
        for (i, w) in weights.iter().enumerate() {
            let rate = self.total_rate * w / wsum;
            let fid = format!("fn-{i:04}");
            for b in 0..buckets {
                let start = b as f64 * self.bucket_s;
                let len = self.bucket_s.min(horizon - start);
                let lambda = rate * len * burst.sample(&mut rng);
                let n = if lambda > 0.0 {
                    Poisson::new(lambda)
                        .map(|p| p.sample(&mut rng) as u64)
                        .unwrap_or(0)
                } else {
                    0
                };
                for _ in 0..n {
                    let t = start + rng.random::<f64>() * len;
                    out.push(Invocation {
                        timestamp: SimTime::from_secs(t),
                        function_id: fid.clone(),
                    });
                }
            }
        }
        out.sort_by(|a, b| {
            a.timestamp
                .cmp(&b.timestamp)
                .then_with(|| a.function_id.cmp(&b.function_id))
        });
        out
    }
}

/// (input, output) token-length pairs to draw request shapes from.
#[derive(Debug, Clone, PartialEq)]
pub struct LengthDataset {
    rows: Vec<(u32, u32)>,
}

impl LengthDataset {
    pub fn new(rows: Vec<(u32, u32)>) -> Result<Self, WorkloadError> {
        if rows.is_empty() {
            return Err(WorkloadError::EmptyDataset);
        }
        assert!(
            rows.iter().all(|&(i, o)| i >= 1 && o >= 1),
            "lengths must be positive"
        );
        Ok(LengthDataset { rows })
    }

    pub fn load(path: &Path) -> Result<Self, WorkloadError> {
        let mut rdr = open_csv(path)?;
        check_header(&mut rdr, path, &["input_tokens", "output_tokens"])?;
        let mut rows = Vec::new();
        for rec in rdr.deserialize::<LengthRow>() {
            let row = rec.map_err(|e| parse_err(path, &e))?;
            if row.input_tokens < 1
                || row.output_tokens < 1
                || row.input_tokens > u32::MAX as i64
                || row.output_tokens > u32::MAX as i64
            {
                return Err(WorkloadError::Parse {
                    path: path.to_path_buf(),
                    line: rows.len() as u64 + 2,
                    msg: format!(
                        "token counts must be positive integers, got ({}, {})",
                        row.input_tokens, row.output_tokens
                    ),
                });
            }
            rows.push((row.input_tokens as u32, row.output_tokens as u32));
        }
        Self::new(rows)
    }

    /// Lognormal conversation-like lengths.
    pub fn synthetic(n: usize, params: &SyntheticLengths, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input =
            LogNormal::new(params.input_median.ln(), params.input_sigma).expect("valid lognormal");
        let output = LogNormal::new(params.output_median.ln(), params.output_sigma)
            .expect("valid lognormal");
        let rows = (0..n.max(1))
            .map(|_| {
                let i = (input.sample(&mut rng).round() as u32).clamp(1, params.input_max);
                let o = (output.sample(&mut rng).round() as u32).clamp(1, params.output_max);
                (i, o)
            })
            .collect();
        LengthDataset { rows }
    }

    pub fn rows(&self) -> &[(u32, u32)] {
        &self.rows
    }

    pub fn mean_output(&self) -> f64 {
        self.rows.iter().map(|r| r.1 as f64).sum::<f64>() / self.rows.len() as f64
    }

    /// Clamp rows so `input + output <= max_seq_len`. Returns the clamped
    /// dataset and how many rows were changed.
    pub fn clamped(&self, max_seq_len: u32) -> (LengthDataset, usize) {
        assert!(max_seq_len >= 2);
        let mut changed = 0;
        let rows = self
            .rows
            .iter()
            .map(|&(i, o)| {
                if i + o <= max_seq_len {
                    return (i, o);
                }
                changed += 1;
                let i = i.min(max_seq_len - 1);
                (i, o.min(max_seq_len - i))
            })
            .collect();
        (LengthDataset { rows }, changed)
    }

    /// Cap output lengths at `cap` tokens.
    pub fn with_output_cap(&self, cap: u32) -> LengthDataset {
        let cap = cap.max(1);
        LengthDataset {
            rows: self.rows.iter().map(|&(i, o)| (i, o.min(cap))).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticLengths {
    pub rows: usize,
    pub input_median: f64,
    pub input_sigma: f64,
    pub input_max: u32,
    pub output_median: f64,
    pub output_sigma: f64,
    pub output_max: u32,
}

impl Default for SyntheticLengths {
    fn default() -> Self {
        SyntheticLengths {
            rows: 10_000,
            input_median: 800.0,
            input_sigma: 0.8,
            input_max: 3072,
            output_median: 150.0,
            output_sigma: 0.8,
            output_max: 1024,
        }
    }
}

/// Draw one row uniformly.
pub fn sample_lengths<R: Rng + ?Sized>(dataset: &LengthDataset, rng: &mut R) -> (u32, u32) {
    dataset.rows[rng.random_range(0..dataset.rows.len())]
}

/// Turn invocations into requests, sorted by arrival. `resolve` maps a
/// model name to its id and clamped length dataset.
pub fn generate_requests<'a, F, R>(
    trace: &TraceSpec,
    mut resolve: F,
    slo: &SloSpec,
    rng: &mut R,
) -> Vec<Request>
where
    F: FnMut(&str) -> (ModelId, &'a LengthDataset),
    R: Rng + ?Sized,
{
    let mut invs: Vec<&Invocation> = trace.invocations.iter().collect();
    invs.sort_by_key(|a| a.timestamp);
    invs.into_iter()
        .enumerate()
        .map(|(i, inv)| {
            let model_name = &trace.model_map[&inv.function_id];
            let (model, data) = resolve(model_name);
            let (input, output) = sample_lengths(data, rng);
            Request::new(
                RequestId(i as u64),
                model,
                inv.timestamp,
                input,
                output,
                slo,
            )
        })
        .collect()
}
