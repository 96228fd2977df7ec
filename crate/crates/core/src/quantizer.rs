//! Adaptive feature-wise quantization.
//!
//! Columns are ranked by range. The `M` widest go through a two-stage
//! quantizer: a shared endpoint grid locates each column's min and max, then
//! a per-column uniform entry quantizer spans the located interval. The rest
//! are replaced by their mean, quantized with one shared uniform quantizer.
//! Levels come from [`crate::allocator`]; `M` from
//! [`crate::allocator::select_m`].
//!
//! Everything the decoder needs to rebuild the codebooks travels in the
//! payload: the four metadata floats, the endpoint indices, `M` and the
//! (normalized) multiplier. Both sides run [`derive_codebooks`] on the same
//! inputs, so the integer levels agree bit for bit.

use crate::allocator::{self, default_candidates, select_m, AllocationProblem};
use crate::dropout::{restore_columns, DropoutMask};
use crate::error::{Error, Result};
use crate::matrix::{column_stats, ColumnStats, IntermediateMatrix};
use crate::wire;
use crate::Direction;

pub const DEFAULT_Q_EP: u32 = 200;

/// Which values of `M` to try.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum CandidateSet {
    /// Ten evenly spaced values up to the largest affordable `M`.
    #[default]
    Default,
    Explicit(Vec<usize>),
    /// Force one value (sensitivity runs).
    Fixed(usize),
}

/// Parameters shared by encoder and decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    pub batch: usize,
    /// Column count before dropout.
    pub d_bar: usize,
    /// Budget in bits per entry of the uncompressed `B x D_bar` matrix.
    pub bits_per_entry: f64,
    pub direction: Direction,
    pub q_ep: u32,
    pub candidates: CandidateSet,
}

impl CodecConfig {
    pub fn new(batch: usize, d_bar: usize, bits_per_entry: f64, direction: Direction) -> Self {
        Self {
            batch,
            d_bar,
            bits_per_entry,
            direction,
            q_ep: DEFAULT_Q_EP,
            candidates: CandidateSet::Default,
        }
    }

    /// Available bits for the quantized payload.
    pub fn budget(&self) -> Result<f64> {
        wire::available_budget(self.batch, self.d_bar, self.bits_per_entry, self.direction)
    }
}

/// `q`-level uniform quantizer on `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformQuantizer {
    pub lo: f64,
    pub hi: f64,
    pub level: u64,
}

/// Second stage of the two-stage quantizer.
pub type EntryQuantizer = UniformQuantizer;
/// Shared quantizer of the column means.
pub type MeanQuantizer = UniformQuantizer;

impl UniformQuantizer {
    pub fn step(&self) -> f64 {
        if self.hi > self.lo {
            (self.hi - self.lo) / (self.level - 1) as f64
        } else {
            0.0
        }
    }

    /// Index of the nearest codepoint.
    pub fn encode(&self, v: f64) -> u64 {
        let step = self.step();
        if step == 0.0 {
            return 0;
        }
        let idx = ((v - self.lo) / step).round();
        idx.clamp(0.0, (self.level - 1) as f64) as u64
    }

    pub fn decode(&self, symbol: u64) -> f64 {
        if symbol + 1 >= self.level {
            if self.level == 1 {
                return self.lo;
            }
            return self.hi;
        }
        self.lo + symbol as f64 * self.step()
    }
}

/// Shared grid that locates the endpoints of every two-stage column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndpointQuantizer {
    pub a_min: f64,
    pub a_max: f64,
    pub q_ep: u32,
}

impl EndpointQuantizer {
    pub fn delta(&self) -> f64 {
        (self.a_max - self.a_min) / (self.q_ep - 1) as f64
    }

    /// Codepoint `u` (one-based).
    pub fn codepoint(&self, u: u32) -> f64 {
        if u >= self.q_ep {
            self.a_max
        } else if u <= 1 {
            self.a_min
        } else {
            self.a_min + (u - 1) as f64 * self.delta()
        }
    }

    /// Grid indices `(u_min, u_max)` whose codepoints bracket `[lo, hi]`:
    /// floor for the lower end, ceiling for the upper.
    pub fn quantize(&self, lo: f64, hi: f64) -> (u32, u32) {
        let delta = self.delta();
        if !(delta > 0.0) {
            return (1, 1);
        }
        let q = self.q_ep as f64;
        let mut u_min = (((lo - self.a_min) / delta).floor() + 1.0).clamp(1.0, q) as u32;
        let mut u_max = (((hi - self.a_min) / delta).ceil() + 1.0).clamp(1.0, q) as u32;
        // Rounding in the grid arithmetic can leave a bound one ulp inside.
        while u_min > 1 && self.codepoint(u_min) > lo {
            u_min -= 1;
        }
        while u_max < self.q_ep && self.codepoint(u_max) < hi {
            u_max += 1;
        }
        (u_min, u_max.max(u_min))
    }
}

/// Decodable compressed representation of one intermediate matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedPayload {
    pub d_hat: usize,
    /// Number of two-stage columns.
    pub m: usize,
    /// Dropout mask, carried in the uplink direction only.
    pub mask: Option<Vec<bool>>,
    /// One flag per column in natural order; true = two-stage.
    pub two_stage: Vec<bool>,
    /// `(u_min, u_max)` per two-stage column, natural order, one-based.
    pub endpoints: Vec<(u32, u32)>,
    /// `B` symbols per two-stage column.
    pub entry_symbols: Vec<Vec<u64>>,
    /// One code per mean column, natural order.
    pub mean_codes: Vec<u64>,
    pub a_min: f32,
    pub a_max: f32,
    pub mean_min: f32,
    pub mean_max: f32,
    /// Lagrange multiplier divided by the squared largest spread.
    pub nu: f32,
    /// Regenerated levels `[Q_0, Q_1..Q_M]`; not transmitted.
    pub levels: Vec<u64>,
}

impl QuantizedPayload {
    pub fn two_stage_columns(&self) -> Vec<usize> {
        (0..self.d_hat).filter(|&j| self.two_stage[j]).collect()
    }

    pub fn mean_columns(&self) -> Vec<usize> {
        (0..self.d_hat).filter(|&j| !self.two_stage[j]).collect()
    }
}

/// Codebooks regenerated from payload metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebooks {
    pub endpoint: EndpointQuantizer,
    pub entries: Vec<EntryQuantizer>,
    pub mean: MeanQuantizer,
    pub problem: AllocationProblem,
    pub multiplier: f64,
    pub levels: Vec<u64>,
}

/// Largest `f32` not above `x`.
pub(crate) fn f32_floor(x: f64) -> Result<f32> {
    let mut f = x as f32;
    if !f.is_finite() {
        return Err(Error::InvalidArgument(format!("{x} does not fit 32-bit metadata")));
    }
    if f as f64 > x {
        f = f.next_down();
    }
    Ok(f)
}

/// Smallest `f32` not below `x`.
pub(crate) fn f32_ceil(x: f64) -> Result<f32> {
    let mut f = x as f32;
    if !f.is_finite() {
        return Err(Error::InvalidArgument(format!("{x} does not fit 32-bit metadata")));
    }
    if (f as f64) < x {
        f = f.next_up();
    }
    Ok(f)
}

fn spread_scale(a_tilde: &[f64]) -> f64 {
    a_tilde.iter().copied().fold(0.0, f64::max)
}

/// Builds endpoint grid, entry ranges and the allocation problem from the
/// transmitted metadata, then regenerates the integer levels from the
/// multiplier. Shared by encoder and decoder.
pub fn derive_codebooks(p: &QuantizedPayload, cfg: &CodecConfig) -> Result<Codebooks> {
    if p.two_stage.len() != p.d_hat {
        return Err(Error::Malformed(format!("{} flags for {} columns", p.two_stage.len(), p.d_hat)));
    }
    let m = p.two_stage.iter().filter(|&&f| f).count();
    if m != p.m || p.endpoints.len() != m {
        return Err(Error::Malformed(format!(
            "M = {} but {m} flags set and {} endpoint pairs",
            p.m,
            p.endpoints.len()
        )));
    }
    let endpoint = EndpointQuantizer {
        a_min: p.a_min as f64,
        a_max: p.a_max as f64,
        q_ep: cfg.q_ep,
    };
    if m > 0 && !(endpoint.a_max >= endpoint.a_min) {
        return Err(Error::Malformed("endpoint grid max below min".into()));
    }
    let mut a_tilde = Vec::with_capacity(m + 1);
    let mean_cols = p.d_hat - m;
    let mean_spread = if mean_cols > 0 { p.mean_max as f64 - p.mean_min as f64 } else { 0.0 };
    if !(mean_spread >= 0.0) {
        return Err(Error::Malformed("mean range max below min".into()));
    }
    a_tilde.push(mean_spread);
    let mut bounds = Vec::with_capacity(m);
    for &(u_min, u_max) in &p.endpoints {
        if u_min < 1 || u_max > cfg.q_ep || u_min > u_max {
            return Err(Error::Malformed(format!("endpoint indices ({u_min}, {u_max})")));
        }
        let lo = endpoint.codepoint(u_min);
        let hi = endpoint.codepoint(u_max);
        a_tilde.push(hi - lo);
        bounds.push((lo, hi));
    }
    let problem = AllocationProblem {
        a_tilde,
        batch: cfg.batch,
        d_hat: p.d_hat,
        m,
        budget: cfg.budget()?,
        q_ep: cfg.q_ep,
        mean_ranges: Vec::new(),
    };
    let scale = spread_scale(&problem.a_tilde);
    let multiplier = p.nu as f64 * scale * scale;
    let levels = allocator::levels_from_multiplier(&problem, multiplier);
    let entries = bounds
        .iter()
        .zip(&levels[1..])
        .map(|(&(lo, hi), &level)| UniformQuantizer { lo, hi, level })
        .collect();
    let mean = UniformQuantizer {
        lo: p.mean_min as f64,
        hi: p.mean_max as f64,
        level: levels[0],
    };
    Ok(Codebooks {
        endpoint,
        entries,
        mean,
        problem,
        multiplier,
        levels,
    })
}

/// Header and problem for one candidate `M`, built from 32-bit metadata
/// exactly as the decoder will see it.
struct Draft {
    two_stage: Vec<bool>,
    endpoints: Vec<(u32, u32)>,
    a_min: f32,
    a_max: f32,
    mean_min: f32,
    mean_max: f32,
    problem: AllocationProblem,
}

fn draft(stats: &ColumnStats, order: &[usize], m: usize, cfg: &CodecConfig, budget: f64) -> Result<Draft> {
    let d_hat = order.len();
    let mut two_stage = vec![false; d_hat];
    for &j in &order[..m] {
        two_stage[j] = true;
    }
    let (mut a_min, mut a_max) = (0.0f32, 0.0f32);
    if m > 0 {
        let lo = order[..m].iter().map(|&j| stats.min[j]).fold(f64::INFINITY, f64::min);
        let hi = order[..m].iter().map(|&j| stats.max[j]).fold(f64::NEG_INFINITY, f64::max);
        a_min = f32_floor(lo)?;
        a_max = f32_ceil(hi)?;
    }
    let endpoint = EndpointQuantizer {
        a_min: a_min as f64,
        a_max: a_max as f64,
        q_ep: cfg.q_ep,
    };
    let (mut mean_min, mut mean_max) = (0.0f32, 0.0f32);
    let mean_cols = &order[m..];
    if !mean_cols.is_empty() {
        let lo = mean_cols.iter().map(|&j| stats.mean[j]).fold(f64::INFINITY, f64::min);
        let hi = mean_cols.iter().map(|&j| stats.mean[j]).fold(f64::NEG_INFINITY, f64::max);
        mean_min = f32_floor(lo)?;
        mean_max = f32_ceil(hi)?;
    }

    let mut endpoints = Vec::with_capacity(m);
    let mut a_tilde = vec![if mean_cols.is_empty() { 0.0 } else { mean_max as f64 - mean_min as f64 }];
    let mut mean_ranges = Vec::with_capacity(d_hat - m);
    for j in 0..d_hat {
        if two_stage[j] {
            let (u_min, u_max) = endpoint.quantize(stats.min[j], stats.max[j]);
            a_tilde.push(endpoint.codepoint(u_max) - endpoint.codepoint(u_min));
            endpoints.push((u_min, u_max));
        } else {
            mean_ranges.push(stats.range(j));
        }
    }
    Ok(Draft {
        two_stage,
        endpoints,
        a_min,
        a_max,
        mean_min,
        mean_max,
        problem: AllocationProblem {
            a_tilde,
            batch: cfg.batch,
            d_hat,
            m,
            budget,
            q_ep: cfg.q_ep,
            mean_ranges,
        },
    })
}

/// Column indices by descending range; ties keep the lower index first.
pub fn range_order(stats: &ColumnStats) -> Vec<usize> {
    let mut order: Vec<usize> = (0..stats.min.len()).collect();
    order.sort_by(|&a, &b| stats.range(b).total_cmp(&stats.range(a)).then(a.cmp(&b)));
    order
}

/// Compresses a `B x D_hat` matrix.
///
/// In the uplink direction the dropout `mask` is required and travels in the
/// payload; downlink payloads rely on the mask the receiver already holds.
pub fn fwq_encode(a: &IntermediateMatrix, cfg: &CodecConfig, mask: Option<&DropoutMask>) -> Result<QuantizedPayload> {
    if a.rows() != cfg.batch {
        return Err(Error::Shape(format!("matrix has {} rows, codec expects {}", a.rows(), cfg.batch)));
    }
    if a.cols() > cfg.d_bar {
        return Err(Error::Shape(format!("{} columns exceed D_bar = {}", a.cols(), cfg.d_bar)));
    }
    if cfg.q_ep < 2 {
        return Err(Error::InvalidArgument("endpoint level must be at least 2".into()));
    }
    let mask_bits = match (cfg.direction, mask) {
        (Direction::Uplink, Some(mask)) => {
            if mask.total() != cfg.d_bar || mask.d_hat() != a.cols() {
                return Err(Error::Shape(format!(
                    "mask covers {} columns with {} survivors; matrix {}x{}, D_bar {}",
                    mask.total(),
                    mask.d_hat(),
                    a.rows(),
                    a.cols(),
                    cfg.d_bar
                )));
            }
            Some(mask.delta().to_vec())
        }
        (Direction::Uplink, None) => {
            if a.cols() != cfg.d_bar {
                return Err(Error::InvalidArgument("uplink payload needs the dropout mask".into()));
            }
            Some(vec![true; cfg.d_bar])
        }
        (Direction::Downlink, _) => None,
    };
    let budget = cfg.budget()?;
    let d_hat = a.cols();
    let stats = column_stats(a);
    let order = range_order(&stats);

    let candidates = match &cfg.candidates {
        CandidateSet::Default => default_candidates(budget, d_hat, cfg.d_bar, cfg.batch, cfg.q_ep),
        CandidateSet::Explicit(v) => v.clone(),
        CandidateSet::Fixed(m) => vec![*m],
    };
    let selection = select_m(&candidates, d_hat, |m| Ok(draft(&stats, &order, m, cfg, budget)?.problem))?;
    let chosen = draft(&stats, &order, selection.m, cfg, budget)?;

    let scale = spread_scale(&chosen.problem.a_tilde);
    let nu = if scale > 0.0 {
        let normalized = selection.allocation.nu_star / (scale * scale);
        (normalized as f32).min(f32::MAX)
    } else {
        0.0
    };

    let mut payload = QuantizedPayload {
        d_hat,
        m: selection.m,
        mask: mask_bits,
        two_stage: chosen.two_stage,
        endpoints: chosen.endpoints,
        entry_symbols: Vec::new(),
        mean_codes: Vec::new(),
        a_min: chosen.a_min,
        a_max: chosen.a_max,
        mean_min: chosen.mean_min,
        mean_max: chosen.mean_max,
        nu,
        levels: Vec::new(),
    };
    let books = derive_codebooks(&payload, cfg)?;
    let mut entry_iter = books.entries.iter();
    for j in 0..d_hat {
        if payload.two_stage[j] {
            let q = entry_iter.next().expect("one entry quantizer per two-stage column");
            payload.entry_symbols.push(a.column(j).iter().map(|&v| q.encode(v)).collect());
        } else {
            payload.mean_codes.push(books.mean.encode(stats.mean[j]));
        }
    }
    payload.levels = books.levels;
    Ok(payload)
}

/// Reconstructs the `B x D_hat` matrix of transmitted columns.
pub fn fwq_decode_compact(p: &QuantizedPayload, cfg: &CodecConfig) -> Result<IntermediateMatrix> {
    let books = derive_codebooks(p, cfg)?;
    let m = books.entries.len();
    if p.entry_symbols.len() != m || p.mean_codes.len() != p.d_hat - m {
        return Err(Error::Malformed("symbol block count does not match flags".into()));
    }
    let b = cfg.batch;
    let mut out = IntermediateMatrix::zeros(b, p.d_hat);
    let (mut e, mut k) = (0, 0);
    for j in 0..p.d_hat {
        let col = out.column_mut(j);
        if p.two_stage[j] {
            let q = &books.entries[e];
            let symbols = &p.entry_symbols[e];
            if symbols.len() != b {
                return Err(Error::Malformed(format!("column {j} has {} symbols, expected {b}", symbols.len())));
            }
            for (slot, &s) in col.iter_mut().zip(symbols) {
                if s >= q.level {
                    return Err(Error::Malformed(format!("symbol {s} out of range for level {}", q.level)));
                }
                *slot = q.decode(s);
            }
            e += 1;
        } else {
            let s = p.mean_codes[k];
            if s >= books.mean.level {
                return Err(Error::Malformed(format!("mean code {s} out of range for level {}", books.mean.level)));
            }
            col.fill(books.mean.decode(s));
            k += 1;
        }
    }
    Ok(out)
}

/// Reconstructs the zero-filled `B x D_bar` matrix.
///
/// Uses the mask carried in the payload, else `mask`, else requires that
/// nothing was dropped.
pub fn fwq_decode(p: &QuantizedPayload, cfg: &CodecConfig, mask: Option<&DropoutMask>) -> Result<IntermediateMatrix> {
    let compact = fwq_decode_compact(p, cfg)?;
    let owned;
    let mask = match (&p.mask, mask) {
        (Some(bits), _) => {
            owned = DropoutMask::from_delta(bits.clone());
            &owned
        }
        (None, Some(m)) => m,
        (None, None) => {
            if p.d_hat != cfg.d_bar {
                return Err(Error::InvalidArgument("decoding a dropped matrix needs the mask".into()));
            }
            owned = DropoutMask::keep_all(cfg.d_bar);
            &owned
        }
    };
    if mask.total() != cfg.d_bar {
        return Err(Error::Shape(format!("mask covers {} columns, D_bar is {}", mask.total(), cfg.d_bar)));
    }
    restore_columns(&compact, mask)
}

/// Analytic upper bound on the squared reconstruction error of `a`.
pub fn error_bound(a: &IntermediateMatrix, p: &QuantizedPayload, cfg: &CodecConfig) -> Result<f64> {
    if a.cols() != p.d_hat || a.rows() != cfg.batch {
        return Err(Error::Shape("matrix does not match payload".into()));
    }
    let books = derive_codebooks(p, cfg)?;
    let stats = column_stats(a);
    let b = cfg.batch as f64;
    let mut bound = 0.0;
    let mut e = 0;
    for j in 0..p.d_hat {
        if p.two_stage[j] {
            let spread = books.problem.a_tilde[e + 1];
            let q = books.levels[e + 1] as f64;
            bound += spread * spread * b / (4.0 * (q - 1.0) * (q - 1.0));
            e += 1;
        } else {
            let r = stats.range(j);
            let a0 = books.problem.a_tilde[0];
            let q0 = books.levels[0] as f64;
            bound += r * r * b / 2.0 + a0 * a0 * b / (2.0 * (q0 - 1.0) * (q0 - 1.0));
        }
    }
    Ok(bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SimRng;

    fn random_matrix(rng: &mut SimRng, rows: usize, cols: usize) -> IntermediateMatrix {
        let data = (0..rows * cols).map(|_| rng.normal()).collect();
        IntermediateMatrix::from_col_major(rows, cols, data).unwrap()
    }

    #[test]
    fn endpoint_rounding_example() {
        let q = EndpointQuantizer {
            a_min: 0.0,
            a_max: 1.0,
            q_ep: 5,
        };
        assert_eq!(q.delta(), 0.25);
        let (u_min, u_max) = q.quantize(0.3, 0.6);
        assert_eq!((u_min, u_max), (2, 4));
        assert_eq!((q.codepoint(u_min), q.codepoint(u_max)), (0.25, 0.75));
    }

    #[test]
    fn endpoint_grid_contains_extremes() {
        let q = EndpointQuantizer {
            a_min: -1.3,
            a_max: 2.9,
            q_ep: 200,
        };
        let (u_min, u_max) = q.quantize(-1.3, 2.9);
        assert_eq!((u_min, u_max), (1, 200));
        let mut rng = SimRng::new(1);
        for _ in 0..1000 {
            let x = -1.3 + rng.uniform() * 4.2;
            let y = x + rng.uniform() * (2.9 - x);
            let (lo, hi) = q.quantize(x, y);
            assert!(q.codepoint(lo) <= x && q.codepoint(hi) >= y);
        }
    }

    #[test]
    fn uniform_quantizer_half_step() {
        let q = UniformQuantizer {
            lo: -1.0,
            hi: 1.0,
            level: 5,
        };
        for i in 0..=100 {
            let v = -1.0 + 0.02 * i as f64;
            let err = (q.decode(q.encode(v)) - v).abs();
            assert!(err <= q.step() / 2.0 + 1e-15);
        }
    }

    #[test]
    fn constant_matrix_exact() {
        let a = IntermediateMatrix::from_col_major(8, 4, vec![0.375; 32]).unwrap();
        let cfg = CodecConfig::new(8, 4, 8.0, Direction::Downlink);
        let p = fwq_encode(&a, &cfg, None).unwrap();
        let d = fwq_decode_compact(&p, &cfg).unwrap();
        assert_eq!(d, a);
    }

    #[test]
    fn budget_example() {
        let cfg = CodecConfig::new(256, 1152, 0.4, Direction::Uplink);
        assert!((cfg.budget().unwrap() - 116_812.8).abs() < 1e-6);
    }

    #[test]
    fn two_stage_error_within_half_step() {
        let mut rng = SimRng::new(4);
        let a = random_matrix(&mut rng, 32, 24);
        let cfg = CodecConfig::new(32, 24, 1.0, Direction::Downlink);
        let p = fwq_encode(&a, &cfg, None).unwrap();
        let books = derive_codebooks(&p, &cfg).unwrap();
        let d = fwq_decode_compact(&p, &cfg).unwrap();
        for (e, j) in p.two_stage_columns().into_iter().enumerate() {
            let q = books.entries[e];
            for b in 0..32 {
                assert!(q.lo <= a.get(b, j) && a.get(b, j) <= q.hi);
                assert!((d.get(b, j) - a.get(b, j)).abs() <= (q.hi - q.lo) / (2.0 * (q.level - 1) as f64) + 1e-12);
            }
        }
    }

    #[test]
    fn measured_error_within_bound_and_budget() {
        let mut rng = SimRng::new(8);
        for &ce in &[0.1, 0.2, 0.4, 1.0] {
            let a = random_matrix(&mut rng, 64, 40);
            let cfg = CodecConfig::new(64, 40, ce, Direction::Downlink);
            let p = fwq_encode(&a, &cfg, None).unwrap();
            let d = fwq_decode_compact(&p, &cfg).unwrap();
            assert!(a.squared_distance(&d).unwrap() <= error_bound(&a, &p, &cfg).unwrap());
            let books = derive_codebooks(&p, &cfg).unwrap();
            assert!(books.problem.bits_int(&books.levels) <= cfg.budget().unwrap());
        }
    }

    #[test]
    fn two_stage_ranges_dominate_mean_ranges() {
        let mut rng = SimRng::new(12);
        let mut cols = Vec::new();
        for j in 0..30 {
            let scale = if j % 3 == 0 { 5.0 } else { 0.01 };
            cols.push((0..16).map(|_| rng.normal() * scale).collect::<Vec<_>>());
        }
        let a = IntermediateMatrix::from_columns(16, &cols).unwrap();
        let cfg = CodecConfig::new(16, 30, 0.8, Direction::Downlink);
        let p = fwq_encode(&a, &cfg, None).unwrap();
        let stats = column_stats(&a);
        let min_two = p.two_stage_columns().iter().map(|&j| stats.range(j)).fold(f64::INFINITY, f64::min);
        let max_mean = p.mean_columns().iter().map(|&j| stats.range(j)).fold(0.0, f64::max);
        assert!(p.m > 0);
        assert!(min_two >= max_mean);
    }

    #[test]
    fn infeasible_budget() {
        let a = IntermediateMatrix::zeros(4, 100);
        let cfg = CodecConfig::new(4, 100, 0.5, Direction::Downlink);
        assert!(matches!(fwq_encode(&a, &cfg, None), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn empty_matrix_payload() {
        let a = IntermediateMatrix::zeros(64, 0);
        let mask = DropoutMask::from_delta(vec![false; 10]);
        let cfg = CodecConfig::new(64, 10, 0.5, Direction::Uplink);
        let p = fwq_encode(&a, &cfg, Some(&mask)).unwrap();
        assert_eq!((p.d_hat, p.m), (0, 0));
        let d = fwq_decode(&p, &cfg, None).unwrap();
        assert_eq!(d, IntermediateMatrix::zeros(64, 10));
    }

    #[test]
    fn fixed_m_is_honored() {
        let mut rng = SimRng::new(2);
        let a = random_matrix(&mut rng, 16, 20);
        let mut cfg = CodecConfig::new(16, 20, 2.0, Direction::Downlink);
        cfg.candidates = CandidateSet::Fixed(3);
        let p = fwq_encode(&a, &cfg, None).unwrap();
        assert_eq!(p.m, 3);
    }

    #[test]
    fn malformed_endpoints_rejected() {
        let mut rng = SimRng::new(2);
        let a = random_matrix(&mut rng, 16, 20);
        let mut cfg = CodecConfig::new(16, 20, 2.0, Direction::Downlink);
        cfg.candidates = CandidateSet::Fixed(2);
        let mut p = fwq_encode(&a, &cfg, None).unwrap();
        p.endpoints[0] = (5, 4);
        assert!(matches!(fwq_decode_compact(&p, &cfg), Err(Error::Malformed(_))));
    }

    #[test]
    fn directed_f32_rounding() {
        let x = 0.1f64;
        assert!(f32_floor(x).unwrap() as f64 <= x);
        assert!(f32_ceil(x).unwrap() as f64 >= x);
        assert_eq!(f32_floor(0.5).unwrap(), 0.5);
        assert!(f32_floor(1e300).is_err());
    }
}
