//! Quantization level allocation.
//!
//! Minimizes the quantization error upper bound
//!
//! ```text
//! f(Q_0..Q_M) = sum_j a_j^2 B / (4 (Q_j - 1)^2)          (entry quantizers)
//!             + sum_k r_k^2 B / 2                          (mean-column spread)
//!             + a_0^2 B (D - M) / (2 (Q_0 - 1)^2)          (mean quantizer)
//! ```
//!
//! subject to `2 <= Q_l <= 2^32` and the bit budget
//! `B sum_j log2 Q_j + (D - M) log2 Q_0 + C_const <= C_ava`.
//!
//! The stationarity condition of the Lagrangian gives, for every level, the
//! cubic `(Q - 1)^3 = u Q` with `u` inversely proportional to the multiplier
//! `nu`. The bit cost is monotone in `nu`, so the multiplier is found by
//! bisection (water-filling) and the levels follow in closed form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_LEVEL: f64 = 2.0;
pub const MAX_LEVEL: f64 = 4_294_967_296.0;
/// Bits for the four 32-bit metadata floats.
pub const METADATA_BITS: f64 = 128.0;
/// Largest tuple count the brute-force oracle will enumerate.
pub const ORACLE_CAP: u128 = 20_000_000;

const LN2: f64 = std::f64::consts::LN_2;
/// `(2^32 - 1)^3`
const MAX_LEVEL_CUBE: f64 = (MAX_LEVEL - 1.0) * (MAX_LEVEL - 1.0) * (MAX_LEVEL - 1.0);
const ROUNDING_STEP_CAP: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizerKind {
    /// Shared quantizer for the column means.
    Mean,
    /// Per-column entry quantizer of the two-stage scheme.
    Entry,
}

/// Inputs of one allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationProblem {
    /// `a_tilde[0]` is the spread of the column means; `a_tilde[1..=m]` the
    /// quantized ranges of the two-stage columns.
    pub a_tilde: Vec<f64>,
    pub batch: usize,
    pub d_hat: usize,
    pub m: usize,
    /// Available bits `C_ava`.
    pub budget: f64,
    pub q_ep: u32,
    /// Ranges of the mean-quantized columns; only enters the objective as a
    /// constant. Empty means all zero.
    #[serde(default)]
    pub mean_ranges: Vec<f64>,
}

impl AllocationProblem {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be positive".into()));
        }
        if self.m > self.d_hat {
            return Err(Error::InvalidArgument(format!("M = {} exceeds D_hat = {}", self.m, self.d_hat)));
        }
        if self.a_tilde.len() != self.m + 1 {
            return Err(Error::InvalidArgument(format!(
                "a_tilde has {} entries, expected M + 1 = {}",
                self.a_tilde.len(),
                self.m + 1
            )));
        }
        if self.a_tilde.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::InvalidArgument("a_tilde entries must be finite and >= 0".into()));
        }
        if self.q_ep < 2 {
            return Err(Error::InvalidArgument("endpoint level must be at least 2".into()));
        }
        if !self.mean_ranges.is_empty() && self.mean_ranges.len() != self.mean_columns() {
            return Err(Error::InvalidArgument(format!(
                "{} mean ranges for {} mean columns",
                self.mean_ranges.len(),
                self.mean_columns()
            )));
        }
        if !self.budget.is_finite() {
            return Err(Error::InvalidArgument("budget must be finite".into()));
        }
        Ok(())
    }

    pub fn mean_columns(&self) -> usize {
        self.d_hat - self.m
    }

    pub fn kind(&self, l: usize) -> QuantizerKind {
        if l == 0 {
            QuantizerKind::Mean
        } else {
            QuantizerKind::Entry
        }
    }

    /// Bits paid per unit of `log2 Q_l`.
    pub fn weight(&self, l: usize) -> f64 {
        if l == 0 {
            self.mean_columns() as f64
        } else {
            self.batch as f64
        }
    }

    /// Endpoint indices, assignment flags and metadata floats.
    pub fn fixed_bits(&self) -> f64 {
        2.0 * self.m as f64 * (self.q_ep as f64).log2() + self.d_hat as f64 + METADATA_BITS
    }

    /// Nominal (real-valued) bit cost of a level vector.
    pub fn bits(&self, levels: &[f64]) -> f64 {
        let entries: f64 = levels[1..].iter().map(|q| q.log2()).sum();
        self.batch as f64 * entries + self.mean_columns() as f64 * levels[0].log2() + self.fixed_bits()
    }

    pub fn bits_int(&self, levels: &[u64]) -> f64 {
        let as_real: Vec<f64> = levels.iter().map(|&q| q as f64).collect();
        self.bits(&as_real)
    }

    /// Cheapest possible cost: every level at 2.
    pub fn min_bits(&self) -> f64 {
        self.bits(&vec![MIN_LEVEL; self.m + 1])
    }

    /// Error-bound contribution of level `l` at value `q`.
    pub fn level_term(&self, l: usize, q: f64) -> f64 {
        let a = self.a_tilde[l];
        let b = self.batch as f64;
        match self.kind(l) {
            QuantizerKind::Entry => a * a * b / (4.0 * (q - 1.0) * (q - 1.0)),
            QuantizerKind::Mean => a * a * b * self.mean_columns() as f64 / (2.0 * (q - 1.0) * (q - 1.0)),
        }
    }

    fn is_free(&self, l: usize) -> bool {
        self.weight(l) > 0.0 && self.a_tilde[l] > 0.0
    }

    fn levels_for_nu_inner(&self, nu: f64) -> Vec<f64> {
        (0..=self.m)
            .map(|l| {
                if self.weight(l) == 0.0 {
                    MIN_LEVEL
                } else {
                    level_from_nu(nu, self.a_tilde[l], self.kind(l), self.batch)
                }
            })
            .collect()
    }

    /// Continuous levels for a given multiplier.
    pub fn levels_for_nu(&self, nu: f64) -> Vec<f64> {
        self.levels_for_nu_inner(nu)
    }
}

/// Value of the error upper bound for a level vector (index 0 = mean).
pub fn objective(levels: &[f64], p: &AllocationProblem) -> f64 {
    let spread: f64 = p.mean_ranges.iter().map(|r| r * r * p.batch as f64 / 2.0).sum();
    let entry: f64 = (1..=p.m).map(|l| p.level_term(l, levels[l])).sum();
    let mean = if p.mean_columns() > 0 { p.level_term(0, levels[0]) } else { 0.0 };
    entry + spread + mean
}

pub fn objective_int(levels: &[u64], p: &AllocationProblem) -> f64 {
    let as_real: Vec<f64> = levels.iter().map(|&q| q as f64).collect();
    objective(&as_real, p)
}

/// Multiplier at or above which the level collapses to 2.
pub fn upper_threshold(a: f64, kind: QuantizerKind, batch: usize) -> f64 {
    match kind {
        QuantizerKind::Entry => a * a * LN2,
        QuantizerKind::Mean => a * a * batch as f64 * 2.0 * LN2,
    }
}

/// Multiplier at or below which the level saturates at `2^32`.
pub fn lower_threshold(a: f64, kind: QuantizerKind, batch: usize) -> f64 {
    match kind {
        QuantizerKind::Entry => MAX_LEVEL / 2.0 * a * a * LN2 / MAX_LEVEL_CUBE,
        QuantizerKind::Mean => MAX_LEVEL * a * a * batch as f64 * LN2 / MAX_LEVEL_CUBE,
    }
}

/// Coefficient `u` of the stationarity cubic `(Q - 1)^3 = u Q`.
pub fn cubic_coefficient(nu: f64, a: f64, kind: QuantizerKind, batch: usize) -> f64 {
    match kind {
        QuantizerKind::Entry => a * a * LN2 / (2.0 * nu),
        QuantizerKind::Mean => a * a * batch as f64 * LN2 / nu,
    }
}

/// Optimal level of one quantizer for multiplier `nu`, clamped to `[2, 2^32]`.
///
/// Returns exactly 2 when `nu` is at or above [`upper_threshold`] and
/// exactly `2^32` at or below [`lower_threshold`]; interior multipliers give
/// the unique root of the cubic, strictly inside the interval.
pub fn level_from_nu(nu: f64, a_tilde: f64, kind: QuantizerKind, batch: usize) -> f64 {
    if a_tilde == 0.0 {
        return MIN_LEVEL;
    }
    if nu >= upper_threshold(a_tilde, kind, batch) {
        return MIN_LEVEL;
    }
    if nu <= lower_threshold(a_tilde, kind, batch) {
        return MAX_LEVEL;
    }
    let u = cubic_coefficient(nu, a_tilde, kind, batch);
    cubic_root_level(u).clamp(MIN_LEVEL.next_up(), MAX_LEVEL.next_down())
}

/// Root `Q > 2` of `(Q - 1)^3 = u Q` for `u > 1/2`.
///
/// With `x = Q - 1` this is `x^3 - u x - u = 0`, which has exactly one
/// positive root. Newton's method started above the root (at `sqrt(u) + 1`)
/// descends monotonically on the convex branch.
pub fn cubic_root_level(u: f64) -> f64 {
    assert!(u > 0.5, "no root above 2 for u = {u}");
    let h = |x: f64| x * (x * x - u) - u;
    let mut hi = u.sqrt() + 1.0;
    let mut lo = 1.0;
    let mut x = hi;
    for _ in 0..200 {
        let fx = h(x);
        if fx == 0.0 {
            return x + 1.0;
        }
        if fx > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let step = fx / (3.0 * x * x - u);
        let mut next = x - step;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 4.0 * f64::EPSILON * x {
            x = next;
            break;
        }
        x = next;
    }
    x + 1.0
}

/// Cardano's closed form of the same root; real-valued only for `u <= 27/4`.
pub fn closed_form_level(u: f64) -> Option<f64> {
    let disc = 81.0 - 12.0 * u;
    if disc < 0.0 {
        return None;
    }
    let v = (u * disc.sqrt() + 9.0 * u).cbrt();
    let c1 = (2.0f64 / 3.0).cbrt();
    let c2 = 2f64.cbrt() * 9f64.cbrt();
    Some(c1 * u / v + v / c2 + 1.0)
}

/// Continuous and integer levels for one problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelAllocation {
    pub q_real: Vec<f64>,
    pub q_int: Vec<u64>,
    pub nu_star: f64,
    pub objective_real: f64,
    pub objective_int: f64,
    pub bits_real: f64,
    pub bits_int: f64,
}

/// Continuous optimum and its multiplier. `q_int` is left empty.
pub fn solve_continuous(p: &AllocationProblem) -> Result<(Vec<f64>, f64)> {
    p.validate()?;
    let min_bits = p.min_bits();
    if min_bits > p.budget {
        return Err(Error::infeasible(min_bits, p.budget));
    }
    let free: Vec<usize> = (0..=p.m).filter(|&l| p.is_free(l)).collect();
    let at_max = p.levels_for_nu_inner(0.0);
    if free.is_empty() || p.bits(&at_max) <= p.budget {
        return Ok((at_max, 0.0));
    }

    let mut hi = free
        .iter()
        .map(|&l| upper_threshold(p.a_tilde[l], p.kind(l), p.batch))
        .fold(0.0, f64::max);
    let mut lo = free
        .iter()
        .map(|&l| lower_threshold(p.a_tilde[l], p.kind(l), p.batch))
        .fold(f64::INFINITY, f64::min)
        * 1e-3;
    let tol = 1e-12 * p.budget.abs().max(1.0);
    // Geometric bisection: the bracket spans many decades.
    for _ in 0..400 {
        let mid = (0.5 * (lo.ln() + hi.ln())).exp();
        if !(mid > lo && mid < hi) {
            break;
        }
        if p.bits(&p.levels_for_nu_inner(mid)) > p.budget {
            lo = mid;
        } else {
            hi = mid;
        }
        if p.budget - p.bits(&p.levels_for_nu_inner(hi)) <= tol {
            break;
        }
    }
    Ok((p.levels_for_nu_inner(hi), hi))
}

/// Integer levels near `q_real` that respect the budget.
///
/// Rounds to nearest, then repairs: while over budget, decrement the level
/// losing the least error bound per bit saved; while bits remain, increment
/// the level gaining the most per bit spent among those that still fit.
/// Ties go to the lower index.
pub fn round_levels(q_real: &[f64], p: &AllocationProblem) -> Vec<u64> {
    let max_int = MAX_LEVEL as u64;
    let mut q: Vec<u64> = q_real
        .iter()
        .enumerate()
        .map(|(l, &x)| {
            if p.weight(l) == 0.0 {
                2
            } else {
                (x.round() as u64).clamp(2, max_int)
            }
        })
        .collect();

    let mut steps = 0usize;
    while p.bits_int(&q) > p.budget {
        let mut best: Option<(usize, f64)> = None;
        for l in 0..q.len() {
            if q[l] <= 2 || p.weight(l) == 0.0 {
                continue;
            }
            let cur = q[l] as f64;
            let loss = p.level_term(l, cur - 1.0) - p.level_term(l, cur);
            let saved = p.weight(l) * (cur.log2() - (cur - 1.0).log2());
            let ratio = loss / saved;
            if best.is_none_or(|(_, r)| ratio < r) {
                best = Some((l, ratio));
            }
        }
        let Some((l, _)) = best else { break };
        steps += 1;
        if steps > ROUNDING_STEP_CAP {
            q[l] = (q[l] / 2).max(2);
        } else {
            q[l] -= 1;
        }
    }

    steps = 0;
    while steps < ROUNDING_STEP_CAP {
        let current = p.bits_int(&q);
        let mut best: Option<(usize, f64)> = None;
        for l in 0..q.len() {
            if q[l] >= max_int || p.weight(l) == 0.0 {
                continue;
            }
            let cur = q[l] as f64;
            let gain = p.level_term(l, cur) - p.level_term(l, cur + 1.0);
            if !(gain > 0.0) {
                continue;
            }
            let cost = p.weight(l) * ((cur + 1.0).log2() - cur.log2());
            if current + cost > p.budget {
                continue;
            }
            let ratio = gain / cost;
            if best.is_none_or(|(_, r)| ratio > r) {
                best = Some((l, ratio));
            }
        }
        let Some((l, _)) = best else { break };
        q[l] += 1;
        if p.bits_int(&q) > p.budget {
            q[l] -= 1;
            break;
        }
        steps += 1;
    }
    q
}

/// Integer levels for a given multiplier: the procedure both ends of the
/// link run to regenerate identical codebooks.
pub fn levels_from_multiplier(p: &AllocationProblem, nu: f64) -> Vec<u64> {
    round_levels(&p.levels_for_nu_inner(nu), p)
}

/// Solve, round and score.
pub fn allocate(p: &AllocationProblem) -> Result<LevelAllocation> {
    let (q_real, nu_star) = solve_continuous(p)?;
    let q_int = round_levels(&q_real, p);
    Ok(LevelAllocation {
        objective_real: objective(&q_real, p),
        objective_int: objective_int(&q_int, p),
        bits_real: p.bits(&q_real),
        bits_int: p.bits_int(&q_int),
        q_real,
        q_int,
        nu_star,
    })
}

/// Outcome of choosing the number of two-stage columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub m: usize,
    pub problem: AllocationProblem,
    pub allocation: LevelAllocation,
    /// `(M, integer objective)` for every candidate that was evaluated.
    pub evaluated: Vec<(usize, f64)>,
}

/// Candidate set `{ D_max * n / 10 : n = 1..10 }`, where `D_max` is the
/// largest `M` the budget can pay for with every level at 2. Clamped to
/// `0..=d_hat` and deduplicated.
pub fn default_candidates(budget: f64, d_hat: usize, d_bar: usize, batch: usize, q_ep: u32) -> Vec<usize> {
    let per_column = batch as f64 + 2.0 * (q_ep as f64).log2() - 1.0;
    let by_budget = (budget - 2.0 * d_hat as f64 - METADATA_BITS) / per_column;
    let d_max = by_budget.min(d_bar as f64).min(d_hat as f64).max(0.0);
    let mut out: Vec<usize> = (1..=10).map(|n| (d_max * n as f64 / 10.0).floor() as usize).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Picks `M` by scanning candidates from the largest down, stopping as soon
/// as the integer objective gets worse than at the previous candidate.
///
/// `build` produces the problem for a given `M`. Candidates above `d_hat`
/// are clamped; infeasible candidates are skipped.
pub fn select_m<F>(candidates: &[usize], d_hat: usize, mut build: F) -> Result<Selection>
where
    F: FnMut(usize) -> Result<AllocationProblem>,
{
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("empty candidate set for M".into()));
    }
    let mut ms: Vec<usize> = candidates.iter().map(|&m| m.min(d_hat)).collect();
    ms.sort_unstable_by(|a, b| b.cmp(a));
    ms.dedup();

    let mut best: Option<Selection> = None;
    let mut evaluated = Vec::new();
    let mut last_err = None;
    for m in ms {
        let problem = build(m)?;
        let allocation = match allocate(&problem) {
            Ok(a) => a,
            Err(e @ Error::Infeasible { .. }) => {
                last_err = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        let score = allocation.objective_int;
        evaluated.push((m, score));
        if let Some(prev) = &best {
            if score > prev.allocation.objective_int {
                break;
            }
        }
        best = Some(Selection {
            m,
            problem,
            allocation,
            evaluated: Vec::new(),
        });
    }
    match best {
        Some(mut s) => {
            s.evaluated = evaluated;
            Ok(s)
        }
        None => Err(last_err.unwrap_or_else(|| Error::InvalidArgument("no candidate evaluated".into()))),
    }
}

/// Exhaustive search over integer levels in `2..=l_max`. Test oracle for
/// tiny problems.
pub fn brute_force_oracle(p: &AllocationProblem, l_max: u64) -> Result<(Vec<u64>, f64)> {
    p.validate()?;
    if l_max < 2 {
        return Err(Error::InvalidArgument("l_max must be at least 2".into()));
    }
    let free: Vec<usize> = (0..=p.m).filter(|&l| p.weight(l) > 0.0).collect();
    let span = (l_max - 1) as u128;
    let total = span.checked_pow(free.len() as u32).unwrap_or(u128::MAX);
    if total > ORACLE_CAP {
        return Err(Error::SearchSpace(total));
    }

    let mut levels = vec![2u64; p.m + 1];
    let mut best: Option<(Vec<u64>, f64)> = None;
    loop {
        if p.bits_int(&levels) <= p.budget {
            let f = objective_int(&levels, p);
            if best.as_ref().is_none_or(|(_, b)| f < *b) {
                best = Some((levels.clone(), f));
            }
        }
        // Odometer over the free positions.
        let mut carry = true;
        for &l in &free {
            if levels[l] < l_max {
                levels[l] += 1;
                carry = false;
                break;
            }
            levels[l] = 2;
        }
        if carry {
            break;
        }
    }
    best.ok_or_else(|| Error::infeasible(p.min_bits(), p.budget))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem(a: Vec<f64>, batch: usize, d_hat: usize, budget: f64) -> AllocationProblem {
        AllocationProblem {
            m: a.len() - 1,
            a_tilde: a,
            batch,
            d_hat,
            budget,
            q_ep: 200,
            mean_ranges: Vec::new(),
        }
    }

    #[test]
    fn plastic_root() {
        let q = cubic_root_level(1.0);
        assert!((q - 2.324_717_957_244_746).abs() < 1e-12, "{q}");
        let cf = closed_form_level(1.0).unwrap();
        assert!((q - cf).abs() < 1e-12);
    }

    #[test]
    fn closed_form_undefined_past_discriminant() {
        assert!(closed_form_level(6.75).is_some());
        assert!(closed_form_level(6.8).is_none());
    }

    #[test]
    fn cubic_root_satisfies_equation() {
        for &u in &[0.51, 0.6, 1.0, 3.0, 6.75, 10.0, 1e3, 1e9, 1e15, 1.8e19] {
            let q = cubic_root_level(u);
            let lhs = (q - 1.0).powi(3);
            let rhs = u * q;
            assert!((lhs - rhs).abs() <= 1e-9 * rhs, "u={u}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn thresholds_clamp() {
        let a = 0.7;
        let up = upper_threshold(a, QuantizerKind::Entry, 8);
        assert_eq!(up, a * a * LN2);
        assert_eq!(level_from_nu(up, a, QuantizerKind::Entry, 8), 2.0);
        assert_eq!(level_from_nu(up * 10.0, a, QuantizerKind::Entry, 8), 2.0);
        assert!(level_from_nu(up * 0.999, a, QuantizerKind::Entry, 8) > 2.0);

        let mean_up = upper_threshold(a, QuantizerKind::Mean, 8);
        assert!((mean_up - a * a * 8.0 * 4f64.ln()).abs() < 1e-15);

        let low = lower_threshold(a, QuantizerKind::Entry, 8);
        assert_eq!(level_from_nu(low, a, QuantizerKind::Entry, 8), MAX_LEVEL);
        assert_eq!(level_from_nu(1e-300, a, QuantizerKind::Entry, 8), MAX_LEVEL);
        assert!(level_from_nu(low * 1.01, a, QuantizerKind::Entry, 8) < MAX_LEVEL);
        assert_eq!(level_from_nu(1.0, 0.0, QuantizerKind::Entry, 8), 2.0);
    }

    #[test]
    fn mean_only_power_of_two() {
        // M = 0, D_hat = 10: budget pays 5 bits per mean code.
        let mut p = problem(vec![1.0], 16, 10, 0.0);
        p.budget = p.fixed_bits() + 10.0 * 5.0;
        let alloc = allocate(&p).unwrap();
        assert!((alloc.q_real[0] - 32.0).abs() < 1e-6, "{:?}", alloc.q_real);
        assert_eq!(alloc.q_int, vec![32]);
    }

    #[test]
    fn single_entry_power_of_two() {
        // M = D_hat = 1: no mean quantizer, budget pays k = 3 bits per entry.
        let mut p = problem(vec![0.0, 2.0], 8, 1, 0.0);
        p.budget = p.fixed_bits() + 8.0 * 3.0;
        let alloc = allocate(&p).unwrap();
        assert!((alloc.q_real[1] - 8.0).abs() < 1e-6);
        assert_eq!(alloc.q_int[1], 8);
    }

    #[test]
    fn infeasible_reports_shortfall() {
        let p = problem(vec![1.0, 1.0], 8, 4, 100.0);
        match solve_continuous(&p) {
            Err(Error::Infeasible { shortfall, .. }) => assert!(shortfall > 0.0),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn generous_budget_saturates() {
        let p = problem(vec![1.0, 1.0], 4, 2, 1e6);
        let (q, nu) = solve_continuous(&p).unwrap();
        assert_eq!(nu, 0.0);
        assert_eq!(q, vec![MAX_LEVEL, MAX_LEVEL]);
    }

    #[test]
    fn objective_examples() {
        let mut p = problem(vec![0.0, 2.0], 4, 1, 1e6);
        assert!((objective(&[2.0, 3.0], &p) - 1.0).abs() < 1e-15);

        // All spreads zero: only the range term remains.
        p = problem(vec![0.0, 0.0], 4, 3, 1e6);
        p.mean_ranges = vec![1.0, 2.0];
        assert!((objective(&[5.0, 7.0], &p) - (1.0 + 4.0) * 4.0 / 2.0).abs() < 1e-12);

        // M = D_hat: mean and range terms vanish.
        let p = problem(vec![3.0, 1.0, 1.0], 2, 2, 1e6);
        let expect = 2.0 * (1.0 * 2.0 / (4.0 * 9.0));
        assert!((objective(&[9.0, 4.0, 4.0], &p) - expect).abs() < 1e-15);
    }

    #[test]
    fn rounding_fixed_point() {
        let mut p = problem(vec![0.0, 1.0], 4, 1, 0.0);
        p.budget = p.bits(&[2.0, 4.0]);
        assert_eq!(round_levels(&[2.0, 4.0], &p), vec![2, 4]);
    }

    #[test]
    fn rounding_nearest_within_budget() {
        let mut p = problem(vec![0.0, 1.0], 4, 1, 0.0);
        p.budget = p.bits(&[2.0, 3.0]) + 1e-9;
        assert_eq!(round_levels(&[2.0, 2.6], &p), vec![2, 3]);
    }

    #[test]
    fn rounding_never_exceeds_budget() {
        let mut rng = crate::SimRng::new(9);
        for _ in 0..1000 {
            let m = 1 + rng.below(5);
            let d_hat = m + rng.below(4);
            let batch = 1 + rng.below(32);
            let a: Vec<f64> = (0..=m).map(|_| rng.uniform() * 3.0).collect();
            let mut p = problem(a, batch, d_hat, 0.0);
            p.budget = p.min_bits() + rng.uniform() * 200.0;
            let alloc = allocate(&p).unwrap();
            assert!(alloc.bits_int <= p.budget, "{} > {}", alloc.bits_int, p.budget);
            assert!(alloc.q_int.iter().all(|&q| (2..=MAX_LEVEL as u64).contains(&q)));
        }
    }

    #[test]
    fn selection_single_candidate() {
        let sel = select_m(&[1], 2, |m| {
            let mut a = vec![0.5];
            a.extend(std::iter::repeat_n(1.0, m));
            let mut p = problem(a, 4, 2, 0.0);
            p.mean_ranges = vec![0.1; 2 - m];
            p.budget = 400.0;
            Ok(p)
        })
        .unwrap();
        assert_eq!(sel.m, 1);
    }

    #[test]
    fn selection_rejects_empty_set() {
        assert!(select_m(&[], 3, |_| unreachable!()).is_err());
    }

    #[test]
    fn default_candidate_set() {
        // D_max = (10000 - 2*100 - 128) / (8 + 2 log2 200 - 1) = 9672 / 22.287 = 433.97 -> clamped to 100.
        let c = default_candidates(10_000.0, 100, 200, 8, 200);
        assert_eq!(c, vec![10, 20, 30, 40, 50, 60, 70, 80, 90, 100]);
        // D_max = 72 / 22.287 = 3.23.
        let c = default_candidates(400.0, 100, 200, 8, 200);
        assert_eq!(c, vec![0, 1, 2, 3]);
    }

    #[test]
    fn oracle_mean_only_picks_largest_feasible() {
        let mut p = problem(vec![1.0], 4, 3, 0.0);
        p.budget = p.fixed_bits() + 3.0 * 3.5;
        let (levels, _) = brute_force_oracle(&p, 64).unwrap();
        // 3 log2 Q <= 10.5 -> Q <= 11.31
        assert_eq!(levels, vec![11]);
    }

    #[test]
    fn oracle_symmetric_levels() {
        let mut p = problem(vec![0.0, 1.3, 1.3], 4, 2, 0.0);
        p.budget = p.fixed_bits() + 4.0 * 2.0 * 3.0;
        let (levels, _) = brute_force_oracle(&p, 16).unwrap();
        assert_eq!(levels[1], levels[2]);
        assert_eq!(levels[1], 8);
    }

    #[test]
    fn oracle_caps_search() {
        let p = problem(vec![1.0; 6], 4, 8, 1e9);
        assert!(matches!(brute_force_oracle(&p, 64), Err(Error::SearchSpace(_))));
    }
}
