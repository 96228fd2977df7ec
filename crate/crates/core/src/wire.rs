//! Bit-exact serialization and communication accounting.
//!
//! Stream layout, MSB first within each byte:
//!
//! | field            | bits                                   |
//! |------------------|----------------------------------------|
//! | version          | 8                                      |
//! | `D_hat`, `M`     | 32 each, big-endian                    |
//! | metadata floats  | 4 x 32, little-endian `f32` bytes      |
//! | multiplier       | 32, little-endian `f32` bytes          |
//! | dropout mask     | `D_bar` (uplink only)                  |
//! | assignment flags | `D_hat`                                |
//! | endpoint block   | one base-`Q_ep` integer of `2M` digits |
//! | entry blocks     | one base-`Q_j` integer of `B` digits per two-stage column |
//! | mean block       | one base-`Q_0` integer of `D_hat - M` digits |
//! | padding          | to the next byte                       |
//!
//! Each base-`Q` block of `n` digits takes exactly the bit length of
//! `Q^n - 1`, so the physical size tracks the real-valued count.

use num_bigint::BigUint;
use num_integer::Integer;
use serde::{Deserialize, Serialize};

use crate::allocator::METADATA_BITS;
use crate::error::{Error, Result};
use crate::quantizer::{derive_codebooks, CodecConfig, QuantizedPayload};
use crate::Direction;

pub const FORMAT_VERSION: u8 = 1;
/// Version byte, `D_hat`, `M` and the multiplier: sent but not part of the
/// nominal count.
pub const PROTOCOL_EXTRA_BITS: u64 = 8 + 32 + 32 + 32;

/// Growable bit buffer, MSB first.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BitWriter {
    bytes: Vec<u8>,
    len: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bit_len(&self) -> u64 {
        self.len
    }

    pub fn write_bit(&mut self, bit: bool) {
        if self.len % 8 == 0 {
            self.bytes.push(0);
        }
        if bit {
            let last = self.bytes.len() - 1;
            self.bytes[last] |= 0x80 >> (self.len % 8);
        }
        self.len += 1;
    }

    /// Low `n` bits of `value`, most significant first.
    pub fn write_bits(&mut self, value: u64, n: u32) {
        debug_assert!(n <= 64);
        for i in (0..n).rev() {
            self.write_bit((value >> i) & 1 == 1);
        }
    }

    pub fn write_biguint(&mut self, value: &BigUint, width: u64) {
        let used = value.bits();
        debug_assert!(used <= width);
        for _ in used..width {
            self.write_bit(false);
        }
        for i in (0..used).rev() {
            self.write_bit(value.bit(i));
        }
    }

    pub fn write_f32(&mut self, v: f32) {
        for byte in v.to_le_bytes() {
            self.write_bits(byte as u64, 8);
        }
    }

    /// Pads to a byte boundary and returns the buffer.
    pub fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

/// Cursor over a bit buffer.
#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn position(&self) -> u64 {
        self.pos
    }

    pub fn remaining(&self) -> u64 {
        self.bytes.len() as u64 * 8 - self.pos
    }

    fn need(&self, n: u64) -> Result<()> {
        if self.remaining() < n {
            Err(Error::Truncated { needed: (n - self.remaining()) as usize })
        } else {
            Ok(())
        }
    }

    fn bit_unchecked(&mut self) -> bool {
        let byte = self.bytes[(self.pos / 8) as usize];
        let bit = byte & (0x80 >> (self.pos % 8)) != 0;
        self.pos += 1;
        bit
    }

    pub fn read_bit(&mut self) -> Result<bool> {
        self.need(1)?;
        Ok(self.bit_unchecked())
    }

    pub fn read_bits(&mut self, n: u32) -> Result<u64> {
        debug_assert!(n <= 64);
        self.need(n as u64)?;
        let mut v = 0u64;
        for _ in 0..n {
            v = (v << 1) | self.bit_unchecked() as u64;
        }
        Ok(v)
    }

    pub fn read_biguint(&mut self, width: u64) -> Result<BigUint> {
        self.need(width)?;
        let mut bytes = vec![0u8; width.div_ceil(8) as usize];
        let offset = bytes.len() as u64 * 8 - width;
        for i in 0..width {
            if self.bit_unchecked() {
                let k = offset + i;
                bytes[(k / 8) as usize] |= 0x80 >> (k % 8);
            }
        }
        Ok(BigUint::from_bytes_be(&bytes))
    }

    pub fn read_f32(&mut self) -> Result<f32> {
        let mut b = [0u8; 4];
        for slot in &mut b {
            *slot = self.read_bits(8)? as u8;
        }
        Ok(f32::from_le_bytes(b))
    }
}

/// Bits taken by `n` base-`q` digits: the bit length of `q^n - 1`.
pub fn block_width(q: u64, n: usize) -> u64 {
    if n == 0 || q <= 1 {
        return 0;
    }
    if q.is_power_of_two() {
        return q.trailing_zeros() as u64 * n as u64;
    }
    (BigUint::from(q).pow(n as u32) - 1u32).bits()
}

/// Writes `symbols` as one big-endian base-`q` integer.
pub fn pack_symbols(w: &mut BitWriter, symbols: &[u64], q: u64) -> Result<()> {
    if q < 2 {
        return Err(Error::InvalidArgument(format!("base {q} below 2")));
    }
    if let Some(&s) = symbols.iter().find(|&&s| s >= q) {
        return Err(Error::InvalidArgument(format!("symbol {s} not below base {q}")));
    }
    if q.is_power_of_two() {
        let k = q.trailing_zeros();
        for &s in symbols {
            w.write_bits(s, k);
        }
        return Ok(());
    }
    let base = BigUint::from(q);
    let mut acc = BigUint::ZERO;
    for &s in symbols {
        acc = acc * &base + s;
    }
    w.write_biguint(&acc, block_width(q, symbols.len()));
    Ok(())
}

/// Reads `n` base-`q` digits written by [`pack_symbols`].
pub fn unpack_symbols(r: &mut BitReader<'_>, q: u64, n: usize) -> Result<Vec<u64>> {
    if q < 2 {
        return Err(Error::Malformed(format!("base {q} below 2")));
    }
    if q.is_power_of_two() {
        let k = q.trailing_zeros();
        return (0..n).map(|_| r.read_bits(k)).collect();
    }
    let mut acc = r.read_biguint(block_width(q, n))?;
    let base = BigUint::from(q);
    let mut digits = vec![0u64; n];
    for slot in digits.iter_mut().rev() {
        let (quot, rem) = acc.div_rem(&base);
        *slot = rem.iter_u64_digits().next().unwrap_or(0);
        acc = quot;
    }
    if acc != BigUint::ZERO {
        return Err(Error::Malformed("symbol block exceeds its digit count".into()));
    }
    Ok(digits)
}

/// Nominal bit count split by term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BitBreakdown {
    /// `2 M log2 Q_ep`.
    pub endpoints: f64,
    /// `B sum_j log2 Q_j`.
    pub entries: f64,
    /// `(D_hat - M) log2 Q_0`.
    pub means: f64,
    /// One assignment flag per transmitted column.
    pub flags: f64,
    /// Four 32-bit floats.
    pub metadata: f64,
    /// Dropout mask (uplink only).
    pub mask: f64,
}

impl BitBreakdown {
    pub fn total(&self) -> f64 {
        self.endpoints + self.entries + self.means + self.flags + self.metadata + self.mask
    }
}

/// Real-valued bit count of a payload under `cfg`.
pub fn nominal_breakdown(p: &QuantizedPayload, cfg: &CodecConfig) -> BitBreakdown {
    let m = p.m as f64;
    let entries: f64 = p.levels.iter().skip(1).map(|&q| (q as f64).log2()).sum();
    let q0 = p.levels.first().copied().unwrap_or(2) as f64;
    BitBreakdown {
        endpoints: 2.0 * m * (cfg.q_ep as f64).log2(),
        entries: cfg.batch as f64 * entries,
        means: (p.d_hat - p.m) as f64 * q0.log2(),
        flags: p.d_hat as f64,
        metadata: METADATA_BITS,
        mask: match cfg.direction {
            Direction::Uplink => cfg.d_bar as f64,
            Direction::Downlink => 0.0,
        },
    }
}

pub fn nominal_bits(p: &QuantizedPayload, cfg: &CodecConfig) -> f64 {
    nominal_breakdown(p, cfg).total()
}

/// Upper bound on `packed - protocol extra` given the nominal count.
pub fn packing_slack(m: usize) -> u64 {
    m as u64 + 3 + 7
}

/// Serializes a payload. `p.levels` must hold the regenerated levels.
pub fn pack(p: &QuantizedPayload, cfg: &CodecConfig) -> Result<Vec<u8>> {
    let levels = derive_codebooks(p, cfg)?.levels;
    if levels != p.levels {
        return Err(Error::Malformed("payload levels differ from regenerated codebooks".into()));
    }
    let mut w = BitWriter::new();
    w.write_bits(FORMAT_VERSION as u64, 8);
    w.write_bits(p.d_hat as u64, 32);
    w.write_bits(p.m as u64, 32);
    for v in [p.a_min, p.a_max, p.mean_min, p.mean_max, p.nu] {
        w.write_f32(v);
    }
    match (cfg.direction, &p.mask) {
        (Direction::Uplink, Some(mask)) => {
            if mask.len() != cfg.d_bar || mask.iter().filter(|&&b| b).count() != p.d_hat {
                return Err(Error::Malformed("mask does not match D_bar and D_hat".into()));
            }
            for &b in mask {
                w.write_bit(b);
            }
        }
        (Direction::Uplink, None) => return Err(Error::Malformed("uplink payload without mask".into())),
        (Direction::Downlink, Some(_)) => return Err(Error::Malformed("downlink payload carries a mask".into())),
        (Direction::Downlink, None) => {}
    }
    for &f in &p.two_stage {
        w.write_bit(f);
    }
    let ep: Vec<u64> = p
        .endpoints
        .iter()
        .flat_map(|&(lo, hi)| [lo as u64 - 1, hi as u64 - 1])
        .collect();
    pack_symbols(&mut w, &ep, cfg.q_ep as u64)?;
    if p.entry_symbols.len() != p.m {
        return Err(Error::Malformed("entry block count differs from M".into()));
    }
    for (symbols, &q) in p.entry_symbols.iter().zip(&levels[1..]) {
        if symbols.len() != cfg.batch {
            return Err(Error::Malformed("entry block length differs from batch".into()));
        }
        pack_symbols(&mut w, symbols, q)?;
    }
    if p.mean_codes.len() != p.d_hat - p.m {
        return Err(Error::Malformed("mean code count differs from D_hat - M".into()));
    }
    pack_symbols(&mut w, &p.mean_codes, levels[0])?;
    let bytes = w.finish();

    let payload_bits = bytes.len() as u64 * 8 - PROTOCOL_EXTRA_BITS;
    let nominal = nominal_bits(p, cfg).ceil() as u64;
    debug_assert!(
        payload_bits >= nominal && payload_bits <= nominal + packing_slack(p.m),
        "packed {payload_bits} bits against nominal {nominal}"
    );
    Ok(bytes)
}

/// Parses a stream written by [`pack`] and regenerates the levels.
pub fn unpack(bytes: &[u8], cfg: &CodecConfig) -> Result<QuantizedPayload> {
    let mut r = BitReader::new(bytes);
    let version = r.read_bits(8)? as u8;
    if version != FORMAT_VERSION {
        return Err(Error::Version(version));
    }
    let d_hat = r.read_bits(32)? as usize;
    let m = r.read_bits(32)? as usize;
    if d_hat > cfg.d_bar || m > d_hat {
        return Err(Error::Malformed(format!("D_hat = {d_hat}, M = {m}, D_bar = {}", cfg.d_bar)));
    }
    let a_min = r.read_f32()?;
    let a_max = r.read_f32()?;
    let mean_min = r.read_f32()?;
    let mean_max = r.read_f32()?;
    let nu = r.read_f32()?;
    if ![a_min, a_max, mean_min, mean_max, nu].iter().all(|v| v.is_finite()) || nu < 0.0 {
        return Err(Error::Malformed("non-finite or negative metadata".into()));
    }
    let mask = match cfg.direction {
        Direction::Uplink => {
            let bits = (0..cfg.d_bar).map(|_| r.read_bit()).collect::<Result<Vec<_>>>()?;
            if bits.iter().filter(|&&b| b).count() != d_hat {
                return Err(Error::Malformed("mask survivors differ from D_hat".into()));
            }
            Some(bits)
        }
        Direction::Downlink => None,
    };
    let two_stage = (0..d_hat).map(|_| r.read_bit()).collect::<Result<Vec<_>>>()?;
    let ep = unpack_symbols(&mut r, cfg.q_ep as u64, 2 * m)?;
    let endpoints = ep.chunks(2).map(|c| (c[0] as u32 + 1, c[1] as u32 + 1)).collect();
    let mut p = QuantizedPayload {
        d_hat,
        m,
        mask,
        two_stage,
        endpoints,
        entry_symbols: Vec::with_capacity(m),
        mean_codes: Vec::new(),
        a_min,
        a_max,
        mean_min,
        mean_max,
        nu,
        levels: Vec::new(),
    };
    let levels = derive_codebooks(&p, cfg)?.levels;
    for &q in &levels[1..] {
        p.entry_symbols.push(unpack_symbols(&mut r, q, cfg.batch)?);
    }
    p.mean_codes = unpack_symbols(&mut r, levels[0], d_hat - m)?;
    p.levels = levels;
    if r.remaining() >= 8 {
        return Err(Error::Malformed(format!("{} trailing bits", r.remaining())));
    }
    Ok(p)
}

/// Per-transmission accounting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommReport {
    pub nominal_bits: f64,
    /// Bytes on the wire times eight, protocol extras included.
    pub packed_bits: u64,
    pub protocol_extra_bits: u64,
    pub direction: Direction,
    pub iteration: usize,
    pub device: usize,
}

impl CommReport {
    pub fn new(p: &QuantizedPayload, cfg: &CodecConfig, bytes: &[u8], iteration: usize, device: usize) -> Self {
        Self {
            nominal_bits: nominal_bits(p, cfg),
            packed_bits: bytes.len() as u64 * 8,
            protocol_extra_bits: PROTOCOL_EXTRA_BITS,
            direction: cfg.direction,
            iteration,
            device,
        }
    }

    /// Packed size without the protocol extras.
    pub fn payload_bits(&self) -> u64 {
        self.packed_bits - self.protocol_extra_bits
    }
}

/// Average bits per iteration when plain dropout with ratio `r` sends
/// surviving columns as 32-bit floats.
pub fn dropout_comm_overhead(batch: usize, d_bar: usize, r: f64, direction: Direction) -> f64 {
    let floats = 32.0 * batch as f64 * d_bar as f64 / r;
    match direction {
        Direction::Uplink => floats + d_bar as f64,
        Direction::Downlink => floats,
    }
}

/// Bits left for the quantized payload at `bits_per_entry` per entry of
/// the full matrix, after the uplink mask.
pub fn available_budget(batch: usize, d_bar: usize, bits_per_entry: f64, direction: Direction) -> Result<f64> {
    if !(bits_per_entry > 0.0) || !bits_per_entry.is_finite() {
        return Err(Error::InvalidArgument(format!("bits per entry {bits_per_entry}")));
    }
    let total = batch as f64 * d_bar as f64 * bits_per_entry;
    let avail = match direction {
        Direction::Uplink => total - d_bar as f64,
        Direction::Downlink => total,
    };
    if avail <= 0.0 {
        return Err(Error::infeasible(d_bar as f64, total));
    }
    Ok(avail)
}
