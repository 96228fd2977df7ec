use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::Args;
use serde_json::{json, Value};
use splitfc::sim::{train, Compressor, Dataset, DatasetSpec, PartitionMode, TrainingConfig};

use crate::{emit_json, write_file, CliError};

const DEFAULT_DATASET: &str = "blobs";

/// Flags mirror the config keys one to one; a flag wins over the file.
#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// lossless | splitfc | rand | deterministic | tops
    #[arg(long)]
    pub compressor: Option<Compressor>,
    /// Dimensionality-reduction ratio (config key `ratio`).
    #[arg(long = "R")]
    pub ratio: Option<f64>,
    /// Uplink bits per entry.
    #[arg(long)]
    pub ce_d: Option<f64>,
    /// Downlink bits per entry.
    #[arg(long)]
    pub ce_s: Option<f64>,
    /// Endpoint quantizer levels (config key `q_ep`).
    #[arg(long)]
    pub qep: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub devices: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Cut-layer width.
    #[arg(long)]
    pub d_bar: Option<usize>,
    /// Server hidden width, 0 for none.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// iid | label-shard | dirichlet:<beta>
    #[arg(long)]
    pub partition: Option<PartitionMode>,
    /// Evaluate every n global iterations (0: only at the end).
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub dropout: Option<bool>,
    #[arg(long)]
    pub quantize: Option<bool>,
    /// idx:<dir>[@limit] or blobs:classes=..,dims=..,n=..,sep=..
    #[arg(long)]
    pub dataset: Option<String>,
    /// Comma-separated uplink bit rates; one run per value.
    #[arg(long, value_delimiter = ',')]
    pub sweep_ce_d: Option<Vec<f64>>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Keys the config file may set beyond the training fields.
const EXTRA_KEYS: [&str; 3] = ["dataset", "sweep_ce_d", "out"];

/// A resolved run description: file values, then flags on top.
#[derive(Debug)]
pub struct Plan {
    pub config: TrainingConfig,
    pub dataset: String,
    pub sweep: Option<Vec<f64>>,
    pub out: PathBuf,
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

pub fn load_file(path: &Path) -> Result<(TrainingConfig, toml::Table), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

/// Splits a config document into training fields and the extra keys.
pub fn parse_config(text: &str) -> Result<(TrainingConfig, toml::Table), CliError> {
    let mut table: toml::Table = text.parse().map_err(|e| config_error(format!("config: {e}")))?;
    let known = toml::Table::try_from(TrainingConfig::default()).expect("config serializes to a table");
    let mut extra = toml::Table::new();
    for key in EXTRA_KEYS {
        if let Some(v) = table.remove(key) {
            extra.insert(key.into(), v);
        }
    }
    if let Some(key) = table.keys().find(|k| !known.contains_key(*k)) {
        return Err(config_error(format!("config: unknown key '{key}'")));
    }
    // Accept the same spellings as the flags for enum-valued keys.
    for key in ["partition", "compressor"] {
        if let Some(toml::Value::String(s)) = table.get(key) {
            let normalized = match key {
                "partition" => toml::Value::try_from(s.parse::<PartitionMode>()?),
                _ => toml::Value::try_from(s.parse::<Compressor>()?),
            }
            .expect("enum serializes");
            table.insert(key.into(), normalized);
        }
    }
    let cfg: TrainingConfig = table.try_into().map_err(|e| config_error(format!("config: {e}")))?;
    Ok((cfg, extra))
}

pub fn resolve(args: &TrainArgs) -> Result<Plan, CliError> {
    let (mut c, extra) = match &args.config {
        Some(p) => load_file(p)?,
        None => (TrainingConfig::default(), toml::Table::new()),
    };
    macro_rules! apply {
        ($($field:ident <- $flag:ident),* $(,)?) => {
            $(if let Some(v) = args.$flag.clone() { c.$field = v; })*
        };
    }
    apply!(
        compressor <- compressor, ratio <- ratio, ce_d <- ce_d, ce_s <- ce_s, q_ep <- qep,
        seed <- seed, devices <- devices, iters <- iters, batch <- batch, lr <- lr,
        d_bar <- d_bar, hidden <- hidden, partition <- partition, eval_every <- eval_every,
        dropout <- dropout, quantize <- quantize,
    );
    let file_str = |key: &str| -> Result<Option<String>, CliError> {
        match extra.get(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(config_error(format!("config: '{key}' must be a string"))),
        }
    };
    let dataset = match &args.dataset {
        Some(d) => d.clone(),
        None => file_str("dataset")?.unwrap_or_else(|| DEFAULT_DATASET.into()),
    };
    let out = match &args.out {
        Some(o) => o.clone(),
        None => file_str("out")?.map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out")),
    };
    let sweep = match &args.sweep_ce_d {
        Some(v) => Some(v.clone()),
        None => match extra.get("sweep_ce_d") {
            None => None,
            Some(v) => Some(
                v.clone()
                    .try_into::<Vec<f64>>()
                    .map_err(|e| config_error(format!("config: sweep_ce_d: {e}")))?,
            ),
        },
    };
    if let Some(s) = &sweep {
        if s.is_empty() {
            return Err(config_error("sweep needs at least one value"));
        }
    }
    c.validate()?;
    Ok(Plan {
        config: c,
        dataset,
        sweep,
        out,
    })
}

/// Worker count for sweeps: `SPLITFC_THREADS` if set, else the core count.
pub fn thread_cap() -> Result<usize, CliError> {
    match std::env::var("SPLITFC_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| config_error(format!("SPLITFC_THREADS must be a positive integer, got '{v}'"))),
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

fn csv_name(point: Option<f64>) -> String {
    match point {
        Some(ce) => format!("trace_ce-d_{ce}.csv"),
        None => "trace.csv".into(),
    }
}

fn run_one(cfg: &TrainingConfig, train_set: &Dataset, test_set: &Dataset, out: &Path, point: Option<f64>) -> Result<Value, CliError> {
    let trace = train(cfg, train_set, test_set)?;
    let name = csv_name(point);
    write_file(&out.join(&name), trace.to_csv().as_bytes())?;
    let evals: Vec<Value> = trace
        .records
        .iter()
        .filter_map(|r| r.test_acc.map(|a| json!({ "t": r.t, "test_acc": a })))
        .collect();
    Ok(json!({
        "csv": name,
        "compressor": trace.compressor,
        "seed": trace.seed,
        "ce_d": cfg.ce_d,
        "ce_s": cfg.ce_s,
        "rows": trace.records.len(),
        "final_accuracy": trace.final_accuracy,
        "final_loss": trace.records.last().map(|r| r.loss),
        "uplink_bits": trace.total_uplink_bits(),
        "downlink_bits": trace.total_downlink_bits(),
        "uplink_packed_bits": trace.uplink_reports.iter().map(|r| r.packed_bits).sum::<u64>(),
        "downlink_packed_bits": trace.downlink_reports.iter().map(|r| r.packed_bits).sum::<u64>(),
        "parameter_bits": trace.parameter_bits,
        "device_params": trace.device_params,
        "server_params": trace.server_params,
        "evaluations": evals,
    }))
}

pub fn run(args: TrainArgs) -> Result<(), CliError> {
    let plan = resolve(&args)?;
    let source: DatasetSpec = plan.dataset.parse()?;
    let (train_set, test_set) = source.load(plan.config.seed)?;
    let points: Vec<Option<f64>> = match &plan.sweep {
        Some(v) => v.iter().map(|&x| Some(x)).collect(),
        None => vec![None],
    };
    let configs: Vec<TrainingConfig> = points
        .iter()
        .map(|p| {
            let mut c = plan.config.clone();
            if let Some(ce) = p {
                c.ce_d = *ce;
            }
            c.validate().map(|_| c)
        })
        .collect::<Result<_, _>>()?;

    let workers = thread_cap()?.min(points.len());
    let results: Vec<Mutex<Option<Result<Value, CliError>>>> = points.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= points.len() {
                    break;
                }
                let r = run_one(&configs[i], &train_set, &test_set, &plan.out, points[i]);
                *results[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    let runs: Vec<Value> = results
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every point ran"))
        .collect::<Result<_, _>>()?;

    let summary = json!({
        "dataset": plan.dataset,
        "train_samples": train_set.len(),
        "test_samples": test_set.len(),
        "config": plan.config,
        "sweep_ce_d": plan.sweep,
        "runs": runs,
    });
    emit_json(&summary, Some(&plan.out.join("summary.json")))?;
    emit_json(&summary, None)
}
