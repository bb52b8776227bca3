//! SLO compliance, node usage, throughput and TTFT distribution.

use std::io::Write;

use serde::Serialize;

use crate::compute::DEADLINE_EPS;
use crate::types::{HardwareClass, ModelId, NodeId, RequestId};
use crate::workload::{Request, RequestState, SloSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Compliant,
    Violated,
    Dropped,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Compliant => "compliant",
            Outcome::Violated => "violated",
            Outcome::Dropped => "dropped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestRecord {
    pub id: RequestId,
    pub model_id: ModelId,
    pub arrival: f64,
    pub ttft: Option<f64>,
    pub outcome: Outcome,
}

/// A request complies when it completed and token `k` was emitted no later
/// than `arrival + TTFT + TPOT·k`.
pub fn classify(req: &Request, slo: &SloSpec) -> Outcome {
    match req.state {
        RequestState::Dropped => Outcome::Dropped,
        RequestState::Complete => {
            let base = req.arrival.secs() + req.ttft_slo;
            let on_time = req
                .emission_times
                .iter()
                .enumerate()
                .all(|(k, t)| t.secs() <= base + slo.tpot * k as f64 + DEADLINE_EPS);
            if on_time {
                Outcome::Compliant
            } else {
                Outcome::Violated
            }
        }
        _ => Outcome::Violated,
    }
}

pub fn record(req: &Request, slo: &SloSpec) -> RequestRecord {
    RequestRecord {
        id: req.id,
        model_id: req.model,
        arrival: req.arrival.secs(),
        ttft: req
            .emission_times
            .first()
            .map(|t| t.secs() - req.arrival.secs()),
        outcome: classify(req, slo),
    }
}

/// Number of nodes of each class hosting at least one instance, from `time` on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UsageSample {
    pub time: f64,
    pub cpu: u32,
    pub gpu: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Counters {
    pub cold_starts: u64,
    pub unloads: u64,
    pub kv_scale_ups: u64,
    pub kv_scale_downs: u64,
    pub reserved_ops: u64,
    pub evictions: u64,
    pub preemptions: u64,
    pub rejected_validations: u64,
}

impl Counters {
    pub fn scale_ops(&self) -> u64 {
        self.kv_scale_ups + self.kv_scale_downs
    }
}

/// Append-only accumulator fed by the event loop.
#[derive(Debug, Clone)]
pub struct MetricsSink {
    classes: Vec<HardwareClass>,
    in_use_since: Vec<Option<f64>>,
    in_use_secs: Vec<f64>,
    decode_tokens: Vec<u64>,
    samples: Vec<UsageSample>,
    pub counters: Counters,
}

impl MetricsSink {
    pub fn new(classes: Vec<HardwareClass>) -> Self {
        let n = classes.len();
        MetricsSink {
            classes,
            in_use_since: vec![None; n],
            in_use_secs: vec![0.0; n],
            decode_tokens: vec![0; n],
            samples: vec![UsageSample {
                time: 0.0,
                cpu: 0,
                gpu: 0,
            }],
            counters: Counters::default(),
        }
    }

    pub fn set_in_use(&mut self, node: NodeId, in_use: bool, now: f64) {
        let i = node.0 as usize;
        match (self.in_use_since[i], in_use) {
            (None, true) => self.in_use_since[i] = Some(now),
            (Some(since), false) => {
                self.in_use_secs[i] += now - since;
                self.in_use_since[i] = None;
            }
            _ => return,
        }
        let mut sample = UsageSample {
            time: now,
            cpu: 0,
            gpu: 0,
        };
        for (c, s) in self.classes.iter().zip(&self.in_use_since) {
            if s.is_some() {
                match c {
                    HardwareClass::Cpu => sample.cpu += 1,
                    HardwareClass::Gpu => sample.gpu += 1,
                }
            }
        }
        match self.samples.last_mut() {
            Some(last) if last.time == now => *last = sample,
            _ => self.samples.push(sample),
        }
    }

    pub fn record_decode(&mut self, node: NodeId, tokens: u64) {
        self.decode_tokens[node.0 as usize] += tokens;
    }

    pub fn samples(&self) -> &[UsageSample] {
        &self.samples
    }

    /// Seconds each node spent in use up to `end`.
    pub fn in_use_secs(&self, end: f64) -> Vec<f64> {
        self.in_use_secs
            .iter()
            .zip(&self.in_use_since)
            .map(|(acc, since)| acc + since.map_or(0.0, |s| (end - s).max(0.0)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryReport {
    pub policy: String,
    pub total_requests: u64,
    pub compliant: u64,
    pub violated: u64,
    pub dropped: u64,
    pub slo_compliance_rate: f64,
    pub cpu_nodes_in_use_avg: f64,
    pub gpu_nodes_in_use_avg: f64,
    /// Decode tokens per second while in use, averaged over nodes of the class.
    pub cpu_decode_throughput: f64,
    pub gpu_decode_throughput: f64,
    pub ttft_p50_s: Option<f64>,
    pub ttft_p90_s: Option<f64>,
    pub ttft_p99_s: Option<f64>,
    pub run_duration_s: f64,
    pub events_processed: u64,
    pub counters: Counters,
}

/// Value at `floor(p/100 · (n-1))` of an ascending slice.
pub fn percentile_lower(sorted: &[f64], p: u32) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let idx = (p as usize * (sorted.len() - 1)) / 100;
    Some(sorted[idx])
}

/// TTFTs sorted ascending, dropped or unserved requests as `inf`.
pub fn ttft_sorted(records: &[RequestRecord]) -> Vec<f64> {
    let mut v: Vec<f64> = records
        .iter()
        .map(|r| r.ttft.unwrap_or(f64::INFINITY))
        .collect();
    v.sort_by(f64::total_cmp);
    v
}

pub fn ttft_cdf(records: &[RequestRecord]) -> Vec<(u32, f64)> {
    let sorted = ttft_sorted(records);
    (1..=99)
        .filter_map(|p| percentile_lower(&sorted, p).map(|v| (p, v)))
        .collect()
}

fn integrate(samples: &[UsageSample], end: f64, pick: impl Fn(&UsageSample) -> u32) -> f64 {
    let mut area = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let next = samples.get(i + 1).map_or(end, |n| n.time).min(end);
        if next > s.time {
            area += pick(s) as f64 * (next - s.time);
        }
    }
    area
}

pub fn finalize(
    policy: &str,
    records: &[RequestRecord],
    sink: &MetricsSink,
    end: f64,
    events_processed: u64,
) -> SummaryReport {
    let count = |o: Outcome| records.iter().filter(|r| r.outcome == o).count() as u64;
    let total = records.len() as u64;
    let compliant = count(Outcome::Compliant);
    let secs = sink.in_use_secs(end);
    let throughput = |class: HardwareClass| {
        let rates: Vec<f64> = (0..secs.len())
            .filter(|&i| sink.classes[i] == class && secs[i] > 0.0)
            .map(|i| sink.decode_tokens[i] as f64 / secs[i])
            .collect();
        if rates.is_empty() {
            0.0
        } else {
            rates.iter().sum::<f64>() / rates.len() as f64
        }
    };
    let sorted = ttft_sorted(records);
    let finite = |p| percentile_lower(&sorted, p).filter(|v| v.is_finite());
    SummaryReport {
        policy: policy.to_string(),
        total_requests: total,
        compliant,
        violated: count(Outcome::Violated),
        dropped: count(Outcome::Dropped),
        slo_compliance_rate: if total == 0 {
            0.0
        } else {
            compliant as f64 / total as f64
        },
        cpu_nodes_in_use_avg: if end > 0.0 {
            integrate(sink.samples(), end, |s| s.cpu) / end
        } else {
            0.0
        },
        gpu_nodes_in_use_avg: if end > 0.0 {
            integrate(sink.samples(), end, |s| s.gpu) / end
        } else {
            0.0
        },
        cpu_decode_throughput: throughput(HardwareClass::Cpu),
        gpu_decode_throughput: throughput(HardwareClass::Gpu),
        ttft_p50_s: finite(50),
        ttft_p90_s: finite(90),
        ttft_p99_s: finite(99),
        run_duration_s: end,
        events_processed,
        counters: sink.counters.clone(),
    }
}

pub fn write_requests_csv<W: Write>(records: &[RequestRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "model_id", "arrival_s", "ttft_s", "outcome"])?;
    for r in records {
        w.write_record([
            r.id.0.to_string(),
            r.model_id.0.to_string(),
            r.arrival.to_string(),
            r.ttft.map_or(String::new(), |t| t.to_string()),
            r.outcome.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_cdf_csv<W: Write>(cdf: &[(u32, f64)], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["percentile", "ttft_s"])?;
    for (p, v) in cdf {
        let v = if v.is_finite() {
            v.to_string()
        } else {
            "inf".to_string()
        };
        w.write_record([p.to_string(), v])?;
    }
    w.flush()?;
    Ok(())
}
