use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde_json::json;
use splitfc::quantizer::{error_bound, fwq_decode_compact, fwq_encode, CandidateSet, CodecConfig, DEFAULT_Q_EP};
use splitfc::wire::{nominal_breakdown, pack, unpack, PROTOCOL_EXTRA_BITS};
use splitfc::{Direction, IntermediateMatrix};

use crate::{emit_json, write_file, CliError};

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Dir {
    Uplink,
    Downlink,
}

#[derive(Args, Debug)]
pub struct CodecArgs {
    /// Text matrix: one row per line, entries separated by commas or spaces.
    pub input: PathBuf,
    /// Bits per entry.
    #[arg(long)]
    pub ce: f64,
    #[arg(long, value_enum, default_value = "uplink")]
    pub direction: Dir,
    #[arg(long, default_value_t = DEFAULT_Q_EP)]
    pub qep: u32,
    /// Force the number of two-stage columns instead of searching.
    #[arg(long = "ablate-M")]
    pub ablate_m: Option<usize>,
    /// Decode the packed bytes again and check both runs agree bit for bit.
    #[arg(long)]
    pub verify: bool,
    /// Output directory for `payload.sfc` and `stats.json`.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

/// Parses a dense text matrix; `#` starts a comment.
pub fn parse_matrix(text: &str) -> Result<IntermediateMatrix, CliError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| CliError::Config(format!("line {}: '{t}' is not a number", n + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(CliError::Config(format!(
                    "line {}: {} entries, expected {}",
                    n + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() || rows[0].is_empty() {
        return Err(CliError::Config("matrix file has no entries".into()));
    }
    let (r, c) = (rows.len(), rows[0].len());
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(IntermediateMatrix::from_row_major(r, c, &flat)?)
}

fn read_matrix(path: &Path) -> Result<IntermediateMatrix, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse_matrix(&text)
}

pub fn run(args: CodecArgs) -> Result<(), CliError> {
    if !(args.ce.is_finite() && args.ce > 0.0) {
        return Err(CliError::Config(format!("--ce must be positive, got {}", args.ce)));
    }
    let a = read_matrix(&args.input)?;
    let direction = match args.direction {
        Dir::Uplink => Direction::Uplink,
        Dir::Downlink => Direction::Downlink,
    };
    let mut cfg = CodecConfig::new(a.rows(), a.cols(), args.ce, direction);
    cfg.q_ep = args.qep;
    if let Some(m) = args.ablate_m {
        if m > a.cols() {
            return Err(CliError::Config(format!("--ablate-M {m} exceeds {} columns", a.cols())));
        }
        cfg.candidates = CandidateSet::Fixed(m);
    }

    let payload = fwq_encode(&a, &cfg, None)?;
    let bytes = pack(&payload, &cfg)?;
    let decoded = fwq_decode_compact(&payload, &cfg)?;
    let measured = a.squared_distance(&decoded)?;
    let bound = error_bound(&a, &payload, &cfg)?;
    let breakdown = nominal_breakdown(&payload, &cfg);

    let verified = if args.verify {
        verify(&a, &cfg, &bytes, &decoded)?;
        Some(true)
    } else {
        None
    };

    let sfc = args.out.join("payload.sfc");
    write_file(&sfc, &bytes)?;
    let stats = json!({
        "rows": a.rows(),
        "cols": a.cols(),
        "direction": direction,
        "bits_per_entry": args.ce,
        "budget_bits": cfg.budget()?,
        "m": payload.m,
        "d_hat": payload.d_hat,
        "q_ep": cfg.q_ep,
        "nominal_bits": breakdown.total(),
        "nominal_breakdown": {
            "endpoints": breakdown.endpoints,
            "entries": breakdown.entries,
            "means": breakdown.means,
            "flags": breakdown.flags,
            "metadata": breakdown.metadata,
            "mask": breakdown.mask,
        },
        "packed_bits": bytes.len() as u64 * 8,
        "protocol_extra_bits": PROTOCOL_EXTRA_BITS,
        "measured_error": measured,
        "error_bound": bound,
        "within_bound": measured <= bound,
        "levels": payload.levels,
        "payload": sfc.display().to_string(),
        "verified": verified,
    });
    emit_json(&stats, Some(&args.out.join("stats.json")))?;
    emit_json(&stats, None)
}

fn verify(a: &IntermediateMatrix, cfg: &CodecConfig, bytes: &[u8], decoded: &IntermediateMatrix) -> Result<(), CliError> {
    let again = pack(&fwq_encode(a, cfg, None)?, cfg)?;
    if again != bytes {
        return Err(CliError::Verify("re-encoding produced different bytes".into()));
    }
    let received = unpack(bytes, cfg)?;
    let redecoded = fwq_decode_compact(&received, cfg)?;
    let same = redecoded
        .as_col_major()
        .iter()
        .zip(decoded.as_col_major())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    if !same {
        return Err(CliError::Verify("decoding the packed bytes differs from the encoder's view".into()));
    }
    Ok(())
}
