//! Round-robin split training with compression at the cut.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{deterministic_count, deterministic_drop, rand_dropout_plan, top_s_sparsify};
use crate::dropout::{apply_dropout, backprop_scale, drop_gradients, importance, plan_for, restore_columns, sample_mask, DropoutMask, DropoutPlan};
use crate::error::{Error, Result};
use crate::matrix::IntermediateMatrix;
use crate::quantizer::{fwq_decode_compact, fwq_encode, CodecConfig, DEFAULT_Q_EP};
use crate::rng::SimRng;
use crate::sim::data::{partition, Dataset, PartitionMode};
use crate::sim::model::{ModelShape, SplitModel};
use crate::wire::{self, CommReport};
use crate::Direction;

/// What happens at the cut layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Compressor {
    Lossless,
    SplitFc,
    Rand,
    Deterministic,
    TopS,
}

impl Compressor {
    pub const ALL: [Compressor; 5] = [Self::Lossless, Self::SplitFc, Self::Rand, Self::Deterministic, Self::TopS];

    fn drops_columns(self) -> bool {
        matches!(self, Self::SplitFc | Self::Rand | Self::Deterministic)
    }
}

impl fmt::Display for Compressor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lossless => "lossless",
            Self::SplitFc => "splitfc",
            Self::Rand => "rand",
            Self::Deterministic => "deterministic",
            Self::TopS => "tops",
        })
    }
}

impl FromStr for Compressor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lossless" => Ok(Self::Lossless),
            "splitfc" => Ok(Self::SplitFc),
            "rand" => Ok(Self::Rand),
            "deterministic" => Ok(Self::Deterministic),
            "tops" | "top-s" => Ok(Self::TopS),
            _ => Err(Error::InvalidArgument(format!("unknown compressor '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub devices: usize,
    /// Rounds; each round visits every device once.
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    /// Dimensionality reduction ratio `D_bar / D`.
    pub ratio: f64,
    /// Uplink bits per entry.
    pub ce_d: f64,
    /// Downlink bits per entry.
    pub ce_s: f64,
    pub q_ep: u32,
    pub seed: u64,
    pub compressor: Compressor,
    /// Column dropout for the dropout-based compressors.
    pub dropout: bool,
    /// Quantization for the dropout-based compressors; off sends 32-bit floats.
    pub quantize: bool,
    pub d_bar: usize,
    pub hidden: usize,
    pub partition: PartitionMode,
    /// Test accuracy every this many rounds; zero evaluates only at the end.
    pub eval_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            devices: 5,
            iters: 50,
            batch: 64,
            lr: 0.05,
            ratio: 16.0,
            ce_d: 0.4,
            ce_s: 0.4,
            q_ep: DEFAULT_Q_EP,
            seed: 0,
            compressor: Compressor::SplitFc,
            dropout: true,
            quantize: true,
            d_bar: 128,
            hidden: 64,
            partition: PartitionMode::LabelShard,
            eval_every: 10,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.devices == 0 || self.iters == 0 || self.batch == 0 || self.d_bar == 0 {
            return bad("devices, iters, batch and d_bar must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {}", self.lr));
        }
        for (name, ce) in [("ce-d", self.ce_d), ("ce-s", self.ce_s)] {
            if !(ce > 0.0 && ce <= 32.0) {
                return bad(format!("{name} = {ce} must lie in (0, 32]"));
            }
        }
        if self.compressor.drops_columns() && self.dropout && !(self.ratio > 1.0) {
            return bad(format!("reduction ratio {} must exceed 1", self.ratio));
        }
        if self.q_ep < 2 {
            return bad("endpoint level must be at least 2".into());
        }
        Ok(())
    }

    fn codec(&self, direction: Direction) -> CodecConfig {
        let mut c = CodecConfig::new(
            self.batch,
            self.d_bar,
            match direction {
                Direction::Uplink => self.ce_d,
                Direction::Downlink => self.ce_s,
            },
            direction,
        );
        c.q_ep = self.q_ep;
        c
    }
}

/// One device step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Round, one-based.
    pub t: usize,
    /// Device, one-based.
    pub k: usize,
    pub loss: f64,
    pub uplink_bits: f64,
    pub downlink_bits: f64,
    pub uplink_packed: u64,
    pub downlink_packed: u64,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub compressor: Compressor,
    pub seed: u64,
    pub records: Vec<IterationRecord>,
    pub uplink_reports: Vec<CommReport>,
    pub downlink_reports: Vec<CommReport>,
    pub final_accuracy: f64,
    pub device_params: usize,
    pub server_params: usize,
    /// Device-model handoffs between consecutive devices, 32 bits per parameter.
    pub parameter_bits: f64,
}

impl TrainingTrace {
    pub fn total_uplink_bits(&self) -> f64 {
        self.records.iter().map(|r| r.uplink_bits).sum()
    }

    pub fn total_downlink_bits(&self) -> f64 {
        self.records.iter().map(|r| r.downlink_bits).sum()
    }

    /// CSV with one row per device step.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,k,loss,uplink_bits,downlink_bits,test_acc\n");
        for r in &self.records {
            let acc = r.test_acc.map(|a| format!("{a:.6}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{:.9},{:.3},{:.3},{}\n",
                r.t, r.k, r.loss, r.uplink_bits, r.downlink_bits, acc
            ));
        }
        s
    }
}

/// Fraction of samples whose argmax logit matches the label.
pub fn evaluate(model: &SplitModel, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Dataset("empty test set".into()));
    }
    let classes = model.shape().classes;
    let mut correct = 0usize;
    let chunk = 512;
    for start in (0..test.len()).step_by(chunk) {
        let end = (start + chunk).min(test.len());
        let logits = model.predict(&test.features[start * test.dim..end * test.dim], end - start)?;
        for (r, y) in (start..end).map(|i| test.labels[i]).enumerate() {
            let row = &logits[r * classes..(r + 1) * classes];
            let best = (0..classes).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            correct += (best == y) as usize;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Uplink outcome the downlink depends on.
struct Uplink {
    f_hat: IntermediateMatrix,
    mask: Option<DropoutMask>,
    plan: Option<DropoutPlan>,
    support: Option<Vec<u64>>,
    report: CommReport,
}

fn raw_report(nominal: f64, packed: u64, direction: Direction, t: usize, k: usize) -> CommReport {
    CommReport {
        nominal_bits: nominal,
        packed_bits: packed,
        protocol_extra_bits: 0,
        direction,
        iteration: t,
        device: k,
    }
}

/// Quantizes `compact` (the surviving columns) through the wire format.
fn transmit(compact: &IntermediateMatrix, cfg: &CodecConfig, mask: &DropoutMask, t: usize, k: usize) -> Result<(IntermediateMatrix, CommReport)> {
    let payload = fwq_encode(compact, cfg, Some(mask))?;
    let bytes = wire::pack(&payload, cfg)?;
    let received = wire::unpack(&bytes, cfg)?;
    let report = CommReport::new(&payload, cfg, &bytes, t, k);
    Ok((fwq_decode_compact(&received, cfg)?, report))
}

struct Step<'a> {
    cfg: &'a TrainingConfig,
    t: usize,
    k: usize,
}

impl Step<'_> {
    fn float_bits(&self, cols: usize) -> f64 {
        32.0 * self.cfg.batch as f64 * cols as f64
    }

    fn uplink(&self, f: &IntermediateMatrix, rng: &mut SimRng) -> Result<Uplink> {
        let (cfg, t, k) = (self.cfg, self.t, self.k);
        let d_bar = f.cols();
        match cfg.compressor {
            Compressor::Lossless => Ok(Uplink {
                f_hat: f.clone(),
                mask: None,
                plan: None,
                support: None,
                report: raw_report(self.float_bits(d_bar), self.float_bits(d_bar) as u64, Direction::Uplink, t, k),
            }),
            Compressor::TopS => {
                let sparse = top_s_sparsify(f, cfg.ce_d, None)?;
                let report = raw_report(sparse.nominal_bits(), sparse.packed_bits(), Direction::Uplink, t, k);
                Ok(Uplink {
                    f_hat: sparse.densify(),
                    mask: None,
                    plan: None,
                    support: Some(sparse.indices),
                    report,
                })
            }
            Compressor::SplitFc | Compressor::Rand | Compressor::Deterministic => {
                let (mask, plan) = if !cfg.dropout {
                    let mask = DropoutMask::keep_all(d_bar);
                    let plan = DropoutPlan::deterministic(&mask);
                    (mask, plan)
                } else {
                    match cfg.compressor {
                        Compressor::SplitFc => {
                            let plan = plan_for(f, cfg.ratio)?;
                            (sample_mask(&plan, rng), plan)
                        }
                        Compressor::Rand => {
                            let plan = rand_dropout_plan(d_bar, cfg.ratio)?;
                            (sample_mask(&plan, rng), plan)
                        }
                        _ => {
                            let mask = deterministic_drop(&importance(f)?, deterministic_count(d_bar, cfg.ratio))?;
                            let plan = DropoutPlan::deterministic(&mask);
                            (mask, plan)
                        }
                    }
                };
                let compact = apply_dropout(f, &mask, &plan)?;
                let (received, report) = if cfg.quantize {
                    transmit(&compact, &cfg.codec(Direction::Uplink), &mask, t, k)?
                } else {
                    let bits = self.float_bits(mask.d_hat()) + d_bar as f64;
                    (compact, raw_report(bits, bits as u64, Direction::Uplink, t, k))
                };
                Ok(Uplink {
                    f_hat: restore_columns(&received, &mask)?,
                    mask: Some(mask),
                    plan: Some(plan),
                    support: None,
                    report,
                })
            }
        }
    }

    fn downlink(&self, g: &IntermediateMatrix, up: &Uplink) -> Result<(IntermediateMatrix, CommReport)> {
        let (cfg, t, k) = (self.cfg, self.t, self.k);
        match (&up.mask, &up.plan, &up.support) {
            (Some(mask), Some(plan), _) => {
                let compact = drop_gradients(g, mask)?;
                let (received, report) = if cfg.quantize {
                    transmit(&compact, &cfg.codec(Direction::Downlink), mask, t, k)?
                } else {
                    let bits = self.float_bits(mask.d_hat());
                    (compact, raw_report(bits, bits as u64, Direction::Downlink, t, k))
                };
                Ok((backprop_scale(&received, mask, plan)?, report))
            }
            (_, _, Some(support)) => {
                let sparse = top_s_sparsify(g, cfg.ce_s, Some(support))?;
                let report = raw_report(sparse.nominal_bits(), sparse.packed_bits(), Direction::Downlink, t, k);
                Ok((sparse.densify(), report))
            }
            _ => {
                let bits = self.float_bits(g.cols());
                Ok((g.clone(), raw_report(bits, bits as u64, Direction::Downlink, t, k)))
            }
        }
    }
}

fn draw_batch(local: &[usize], batch: usize, rng: &mut SimRng) -> Vec<usize> {
    if local.len() < batch {
        return (0..batch).map(|_| local[rng.below(local.len())]).collect();
    }
    let mut pool = local.to_vec();
    for i in 0..batch {
        let j = i + rng.below(pool.len() - i);
        pool.swap(i, j);
    }
    pool.truncate(batch);
    pool
}

/// Independent random streams; identical across compressors for one seed.
struct Streams {
    init: SimRng,
    partition: SimRng,
    batches: SimRng,
    masks: SimRng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let mut master = SimRng::new(seed);
        Self {
            init: master.fork(),
            partition: master.fork(),
            batches: master.fork(),
            masks: master.fork(),
        }
    }
}

/// Runs `iters` rounds over `devices` devices and returns the trace.
pub fn train(cfg: &TrainingConfig, train_set: &Dataset, test_set: &Dataset) -> Result<TrainingTrace> {
    cfg.validate()?;
    if train_set.dim != test_set.dim {
        return Err(Error::Dataset("train and test widths differ".into()));
    }
    let mut streams = Streams::new(cfg.seed);
    let shape = ModelShape {
        input: train_set.dim,
        d_bar: cfg.d_bar,
        hidden: cfg.hidden,
        classes: train_set.classes.max(test_set.classes),
    };
    let mut model = SplitModel::new(shape, &mut streams.init)?;
    let parts = partition(train_set, cfg.devices, cfg.partition, &mut streams.partition)?;

    let mut trace = TrainingTrace {
        compressor: cfg.compressor,
        seed: cfg.seed,
        records: Vec::with_capacity(cfg.iters * cfg.devices),
        uplink_reports: Vec::with_capacity(cfg.iters * cfg.devices),
        downlink_reports: Vec::with_capacity(cfg.iters * cfg.devices),
        final_accuracy: 0.0,
        device_params: model.device_params(),
        server_params: model.server_params(),
        parameter_bits: 0.0,
    };
    let mut u = Vec::with_capacity(cfg.batch * train_set.dim);
    for t in 1..=cfg.iters {
        for (k, local) in parts.iter().enumerate().map(|(i, p)| (i + 1, p)) {
            let wrap = |e: Error| Error::Training { t, k, source: Box::new(e) };
            let idx = draw_batch(local, cfg.batch, &mut streams.batches);
            u.clear();
            for &i in &idx {
                u.extend_from_slice(train_set.sample(i));
            }
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let step = Step { cfg, t, k };

            let (f, cache) = model.forward_device(&u, cfg.batch).map_err(wrap)?;
            let up = step.uplink(&f, &mut streams.masks).map_err(wrap)?;
            let pass = model.forward_server(&up.f_hat, &labels).map_err(wrap)?;
            let (server_grads, g) = model.backward_server(&pass).map_err(wrap)?;
            model.update_server(&server_grads, cfg.lr);
            let (g_hat, down_report) = step.downlink(&g, &up).map_err(wrap)?;
            let device_grad = model.backward_device(&u, &cache, &g_hat).map_err(wrap)?;
            model.update_device(&device_grad, cfg.lr);

            if cfg.devices > 1 {
                trace.parameter_bits += 32.0 * model.device_params() as f64;
            }
            trace.records.push(IterationRecord {
                t,
                k,
                loss: pass.loss,
                uplink_bits: up.report.nominal_bits,
                downlink_bits: down_report.nominal_bits,
                uplink_packed: up.report.packed_bits,
                downlink_packed: down_report.packed_bits,
                test_acc: None,
            });
            trace.uplink_reports.push(up.report);
            trace.downlink_reports.push(down_report);
        }
        let due = t == cfg.iters || (cfg.eval_every > 0 && t % cfg.eval_every == 0);
        if due {
            let acc = evaluate(&model, test_set)?;
            if let Some(last) = trace.records.last_mut() {
                last.test_acc = Some(acc);
            }
            trace.final_accuracy = acc;
        }
    }
    Ok(trace)
}
