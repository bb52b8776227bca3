//! Iteration latency tables and memory-operation latency models.
//!
//! Prefill latency is interpolated linearly over sampled input lengths;
//! decode latency bilinearly over a (batch size, average length) grid whose
//! coordinates are powers of two plus the endpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::PerfError;
use crate::types::{Bytes, HardwareClass, GIB};

#[derive(Debug, Clone, PartialEq)]
pub struct PerfTable {
    pub class: HardwareClass,
    pub model: String,
    prefill: Vec<(u32, f64)>,
    batch_axis: Vec<u32>,
    len_axis: Vec<u32>,
    /// Row-major over `batch_axis × len_axis`.
    decode: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IterKind {
    Prefill { len: u32 },
    Decode { batch: u32, avg_len: u32 },
}

/// Position of `x` between two axis samples. Below the first sample clamps.
fn bracket(axis: &[u32], x: u32) -> (usize, usize, f64) {
    if x <= axis[0] {
        return (0, 0, 0.0);
    }
    let hi = axis.partition_point(|&v| v < x);
    if axis[hi] == x {
        return (hi, hi, 0.0);
    }
    let lo = hi - 1;
    let frac = (x - axis[lo]) as f64 / (axis[hi] - axis[lo]) as f64;
    (lo, hi, frac)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// `1, 2, 4, ..., max` with `max` appended when it is not a power of two.
pub fn pow2_axis(max: u32) -> Vec<u32> {
    let mut axis = Vec::new();
    let mut v = 1u32;
    while v < max {
        axis.push(v);
        v = v.saturating_mul(2);
    }
    axis.push(max);
    axis
}

impl PerfTable {
    pub fn new(
        class: HardwareClass,
        model: impl Into<String>,
        prefill: BTreeMap<u32, f64>,
        decode: BTreeMap<(u32, u32), f64>,
    ) -> Result<Self, PerfError> {
        if prefill.is_empty() || decode.is_empty() {
            return Err(PerfError::Malformed(
                "empty prefill or decode samples".into(),
            ));
        }
        let prefill: Vec<(u32, f64)> = prefill.into_iter().collect();
        if prefill[0].0 == 0 {
            return Err(PerfError::Malformed("prefill length 0".into()));
        }
        if prefill.windows(2).any(|w| w[1].1 < w[0].1) {
            return Err(PerfError::Malformed(
                "prefill samples must be non-decreasing".into(),
            ));
        }
        let batch_axis: Vec<u32> = decode
            .keys()
            .map(|k| k.0)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let len_axis: Vec<u32> = decode
            .keys()
            .map(|k| k.1)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        if batch_axis[0] == 0 || len_axis[0] == 0 {
            return Err(PerfError::Malformed(
                "decode coordinates must be >= 1".into(),
            ));
        }
        let mut values = Vec::with_capacity(batch_axis.len() * len_axis.len());
        for &b in &batch_axis {
            for &l in &len_axis {
                let v = decode.get(&(b, l)).ok_or_else(|| {
                    PerfError::Malformed(format!("decode grid missing point ({b}, {l})"))
                })?;
                if !(v.is_finite() && *v >= 0.0) {
                    return Err(PerfError::Malformed(format!(
                        "bad latency {v} at ({b}, {l})"
                    )));
                }
                values.push(*v);
            }
        }
        let table = PerfTable {
            class,
            model: model.into(),
            prefill,
            batch_axis,
            len_axis,
            decode: values,
        };
        table.check_decode_monotone()?;
        Ok(table)
    }

    fn at(&self, bi: usize, li: usize) -> f64 {
        self.decode[bi * self.len_axis.len() + li]
    }

    fn check_decode_monotone(&self) -> Result<(), PerfError> {
        for bi in 0..self.batch_axis.len() {
            for li in 0..self.len_axis.len() {
                let v = self.at(bi, li);
                if (bi > 0 && self.at(bi - 1, li) > v) || (li > 0 && self.at(bi, li - 1) > v) {
                    return Err(PerfError::Malformed(format!(
                        "decode samples must be non-decreasing (batch {}, len {})",
                        self.batch_axis[bi], self.len_axis[li]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn l_max(&self) -> u32 {
        (*self.len_axis.last().unwrap()).max(self.prefill.last().unwrap().0)
    }

    pub fn prefill_l_max(&self) -> u32 {
        self.prefill.last().unwrap().0
    }

    pub fn decode_l_max(&self) -> u32 {
        *self.len_axis.last().unwrap()
    }

    pub fn b_max(&self) -> u32 {
        *self.batch_axis.last().unwrap()
    }

    pub fn batch_axis(&self) -> &[u32] {
        &self.batch_axis
    }

    pub fn len_axis(&self) -> &[u32] {
        &self.len_axis
    }

    pub fn decode_sample_count(&self) -> usize {
        self.decode.len()
    }

    pub fn prefill_samples(&self) -> &[(u32, f64)] {
        &self.prefill
    }

    /// Decode samples as `((batch, len), seconds)` in grid order.
    pub fn decode_samples(&self) -> Vec<((u32, u32), f64)> {
        let mut out = Vec::with_capacity(self.decode.len());
        for (bi, &b) in self.batch_axis.iter().enumerate() {
            for (li, &l) in self.len_axis.iter().enumerate() {
                out.push(((b, l), self.at(bi, li)));
            }
        }
        out
    }

    pub fn prefill_time(&self, input_len: u32) -> Result<f64, PerfError> {
        let max = self.prefill_l_max();
        if input_len == 0 || input_len > max {
            return Err(PerfError::PrefillOutOfGrid {
                len: input_len,
                max,
            });
        }
        let axis: Vec<u32> = self.prefill.iter().map(|p| p.0).collect();
        let (lo, hi, t) = bracket(&axis, input_len);
        Ok(lerp(self.prefill[lo].1, self.prefill[hi].1, t))
    }

    pub fn decode_time(&self, batch: u32, avg_len: u32) -> Result<f64, PerfError> {
        if batch == 0 || avg_len == 0 || batch > self.b_max() || avg_len > self.decode_l_max() {
            return Err(PerfError::DecodeOutOfGrid {
                batch,
                len: avg_len,
                max_batch: self.b_max(),
                max_len: self.decode_l_max(),
            });
        }
        let (b0, b1, tb) = bracket(&self.batch_axis, batch);
        let (l0, l1, tl) = bracket(&self.len_axis, avg_len);
        let low = lerp(self.at(b0, l0), self.at(b0, l1), tl);
        let high = lerp(self.at(b1, l0), self.at(b1, l1), tl);
        Ok(lerp(low, high, tb))
    }

    pub fn iter_time(&self, kind: IterKind) -> Result<f64, PerfError> {
        match kind {
            IterKind::Prefill { len } => self.prefill_time(len),
            IterKind::Decode { batch, avg_len } => self.decode_time(batch, avg_len),
        }
    }

    /// Serialize as `kind,batch,len,seconds` CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,batch,len,seconds\n");
        for &(l, v) in &self.prefill {
            writeln!(s, "prefill,1,{l},{v}").unwrap();
        }
        for (bi, &b) in self.batch_axis.iter().enumerate() {
            for (li, &l) in self.len_axis.iter().enumerate() {
                writeln!(s, "decode,{b},{l},{}", self.at(bi, li)).unwrap();
            }
        }
        s
    }

    pub fn from_csv(class: HardwareClass, model: &str, text: &str) -> Result<Self, PerfError> {
        #[derive(Deserialize)]
        struct Row {
            kind: String,
            batch: u32,
            len: u32,
            seconds: f64,
        }
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = rdr
            .headers()
            .map_err(|e| PerfError::Malformed(e.to_string()))?
            .iter()
            .collect::<Vec<_>>()
            .join(",");
        if headers != "kind,batch,len,seconds" {
            return Err(PerfError::Malformed(format!(
                "unexpected header `{headers}`"
            )));
        }
        let mut prefill = BTreeMap::new();
        let mut decode = BTreeMap::new();
        for rec in rdr.deserialize::<Row>() {
            let row = rec.map_err(|e| {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                PerfError::Malformed(format!("line {line}: {e}"))
            })?;
            match row.kind.as_str() {
                "prefill" => {
                    prefill.insert(row.len, row.seconds);
                }
                "decode" => {
                    decode.insert((row.batch, row.len), row.seconds);
                }
                other => return Err(PerfError::Malformed(format!("unknown kind `{other}`"))),
            }
        }
        Self::new(class, model, prefill, decode)
    }

    pub fn load(class: HardwareClass, model: &str, path: &Path) -> Result<Self, PerfError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PerfError::Malformed(format!("{}: {e}", path.display())))?;
        Self::from_csv(class, model, &text)
    }
}

/// Affine latency model used to synthesize tables:
/// decode = `a·batch·avg_len + b·batch + c`, prefill = `p·len + q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineCost {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub prefill_per_token: f64,
    pub prefill_base: f64,
}

impl AffineCost {
    pub fn decode(&self, batch: u32, avg_len: u32) -> f64 {
        self.a * batch as f64 * avg_len as f64 + self.b * batch as f64 + self.c
    }

    pub fn prefill(&self, len: u32) -> f64 {
        self.prefill_per_token * len as f64 + self.prefill_base
    }

    /// Choose `a` so that `decode(b2, len) / decode(b1, len) == ratio`.
    pub fn solve_a_for_batch_ratio(b: f64, c: f64, len: u32, b1: u32, b2: u32, ratio: f64) -> f64 {
        let (b1, b2, len) = (b1 as f64, b2 as f64, len as f64);
        (ratio * (b1 * b + c) - b2 * b - c) / (len * (b2 - ratio * b1))
    }

    /// Choose `a` so that `decode(batch, l2) / decode(batch, l1) == ratio`.
    pub fn solve_a_for_len_ratio(b: f64, c: f64, batch: u32, l1: u32, l2: u32, ratio: f64) -> f64 {
        let (bs, l1, l2) = (batch as f64, l1 as f64, l2 as f64);
        (ratio - 1.0) * (bs * b + c) / (bs * (l2 - ratio * l1))
    }

    pub fn table(&self, class: HardwareClass, model: &str, l_max: u32, b_max: u32) -> PerfTable {
        let lens = pow2_axis(l_max);
        let batches = pow2_axis(b_max);
        let prefill = lens.iter().map(|&l| (l, self.prefill(l))).collect();
        let mut decode = BTreeMap::new();
        for &b in &batches {
            for &l in &lens {
                decode.insert((b, l), self.decode(b, l));
            }
        }
        PerfTable::new(class, model, prefill, decode).expect("affine tables are monotone")
    }
}

/// Model size buckets the shipped calibrations cover.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SizeClass {
    #[serde(rename = "3b")]
    B3,
    #[serde(rename = "7b")]
    B7,
    #[serde(rename = "13b")]
    B13,
}

impl SizeClass {
    pub fn as_str(self) -> &'static str {
        match self {
            SizeClass::B3 => "3b",
            SizeClass::B7 => "7b",
            SizeClass::B13 => "13b",
        }
    }
}

/// Shipped synthetic calibration.
///
/// CPU 7B: `decode(16, 1024) / decode(1, 1024) = 1.69`.
/// CPU 13B: `decode(32, 2048) / decode(32, 512) = 2.0`, with the 512 point
/// under a 0.25 s TPOT and the 2048 point over it.
pub fn default_cost(size: SizeClass, class: HardwareClass) -> AffineCost {
    match (class, size) {
        (HardwareClass::Cpu, SizeClass::B3) => AffineCost {
            a: 0.5e-6,
            b: 0.0007,
            c: 0.025,
            prefill_per_token: 0.0004,
            prefill_base: 0.03,
        },
        (HardwareClass::Cpu, SizeClass::B7) => {
            let (b, c) = (0.0015, 0.055);
            AffineCost {
                a: AffineCost::solve_a_for_batch_ratio(b, c, 1024, 1, 16, 1.69),
                b,
                c,
                prefill_per_token: 0.0009,
                prefill_base: 0.05,
            }
        }
        (HardwareClass::Cpu, SizeClass::B13) => {
            let (b, c) = (0.0015, 0.07);
            AffineCost {
                a: AffineCost::solve_a_for_len_ratio(b, c, 32, 512, 2048, 2.0),
                b,
                c,
                prefill_per_token: 0.0018,
                prefill_base: 0.08,
            }
        }
        (HardwareClass::Gpu, SizeClass::B3) => AffineCost {
            a: 1.0e-8,
            b: 0.00005,
            c: 0.006,
            prefill_per_token: 0.00005,
            prefill_base: 0.01,
        },
        (HardwareClass::Gpu, SizeClass::B7) => AffineCost {
            a: 2.0e-8,
            b: 0.0001,
            c: 0.012,
            prefill_per_token: 0.0001,
            prefill_base: 0.015,
        },
        (HardwareClass::Gpu, SizeClass::B13) => AffineCost {
            a: 3.5e-8,
            b: 0.00018,
            c: 0.022,
            prefill_per_token: 0.0002,
            prefill_base: 0.02,
        },
    }
}

/// Latency parameters for memory operations and iteration padding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostParams {
    /// Bytes per second copied while growing a KV-cache.
    pub scale_up_rate: f64,
    /// Bytes per second copied while shrinking a KV-cache.
    pub scale_down_rate: f64,
    /// Model weight load bandwidth, bytes per second.
    pub load_bandwidth: f64,
    pub overestimate_factor: f64,
    /// Latency of a scale op that copies nothing.
    pub latency_floor: f64,
    pub unload_latency: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            scale_up_rate: 32.0 * GIB as f64 / 1.9,
            scale_down_rate: 16.0 * GIB as f64 / 0.3,
            load_bandwidth: 10.0 * GIB as f64,
            overestimate_factor: 1.10,
            latency_floor: 0.01,
            unload_latency: 0.01,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("scale_up_rate", self.scale_up_rate),
            ("scale_down_rate", self.scale_down_rate),
            ("load_bandwidth", self.load_bandwidth),
        ] {
            if v.is_nan() || v <= 0.0 {
                return Err(format!("{name} must be strictly positive"));
            }
        }
        if !(self.overestimate_factor >= 1.0 && self.overestimate_factor.is_finite()) {
            return Err("overestimate_factor must be >= 1".into());
        }
        if !(self.latency_floor >= 0.0 && self.unload_latency >= 0.0) {
            return Err("latency_floor and unload_latency must be >= 0".into());
        }
        Ok(())
    }

    pub fn pessimistic_iter_time(
        &self,
        table: &PerfTable,
        kind: IterKind,
    ) -> Result<f64, PerfError> {
        Ok(table.iter_time(kind)? * self.overestimate_factor)
    }

    /// Time to resize a KV-cache region: the retained bytes are copied into
    /// freshly created blocks.
    pub fn scale_latency(&self, from: Bytes, to: Bytes) -> Result<f64, PerfError> {
        if from == to {
            return Err(PerfError::NoOpScale(from));
        }
        let copied = from.min(to);
        if copied == 0 {
            return Ok(self.latency_floor);
        }
        let rate = if to > from {
            self.scale_up_rate
        } else {
            self.scale_down_rate
        };
        Ok(copied as f64 / rate)
    }

    pub fn cold_start_time(&self, param_bytes: Bytes) -> f64 {
        param_bytes as f64 / self.load_bandwidth
    }
}

/// Perf tables keyed by model family and hardware class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PerfCatalog {
    tables: BTreeMap<(String, HardwareClass), PerfTable>,
}

impl PerfCatalog {
    pub fn insert(&mut self, family: impl Into<String>, table: PerfTable) {
        self.tables.insert((family.into(), table.class), table);
    }

    pub fn get(&self, family: &str, class: HardwareClass) -> Option<&PerfTable> {
        self.tables.get(&(family.to_string(), class))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &PerfTable)> {
        self.tables.iter().map(|((f, _), t)| (f.as_str(), t))
    }
}
