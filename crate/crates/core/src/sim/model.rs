//! Split model with hand-written gradients.
//!
//! Device: `F = relu(U W_1 + b_1)`, width `D_bar`.
//! Server: optional hidden `relu(F W_2 + b_2)`, then an affine layer and
//! softmax cross-entropy averaged over the batch.
//!
//! Batches are row-major `rows x width` slices; the cut-layer output is an
//! [`IntermediateMatrix`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{ChannelLayout, IntermediateMatrix};
use crate::rng::SimRng;

/// Affine layer with row-major `inputs x outputs` weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            w: vec![0.0; inputs * outputs],
            b: vec![0.0; outputs],
        }
    }

    /// He-normal weights, zero bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut SimRng) -> Self {
        let scale = (2.0 / inputs as f64).sqrt();
        let mut d = Self::zeros(inputs, outputs);
        for w in &mut d.w {
            *w = rng.normal() * scale;
        }
        d
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let (n_in, n_out) = (self.inputs, self.outputs);
        let mut y = Vec::with_capacity(rows * n_out);
        for r in 0..rows {
            y.extend_from_slice(&self.b);
            let out = &mut y[r * n_out..];
            for (i, &xi) in x[r * n_in..(r + 1) * n_in].iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (o, &w) in out.iter_mut().zip(&self.w[i * n_out..(i + 1) * n_out]) {
                    *o += xi * w;
                }
            }
        }
        y
    }

    /// Weight and bias gradients, plus the input gradient when asked.
    pub fn backward(&self, x: &[f64], dy: &[f64], rows: usize, want_dx: bool) -> (Dense, Option<Vec<f64>>) {
        let (n_in, n_out) = (self.inputs, self.outputs);
        let mut grad = Dense::zeros(n_in, n_out);
        for r in 0..rows {
            let dyr = &dy[r * n_out..(r + 1) * n_out];
            for (gb, &d) in grad.b.iter_mut().zip(dyr) {
                *gb += d;
            }
            for (i, &xi) in x[r * n_in..(r + 1) * n_in].iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (g, &d) in grad.w[i * n_out..(i + 1) * n_out].iter_mut().zip(dyr) {
                    *g += xi * d;
                }
            }
        }
        let dx = want_dx.then(|| {
            let mut dx = vec![0.0; rows * n_in];
            for r in 0..rows {
                let dyr = &dy[r * n_out..(r + 1) * n_out];
                for (i, slot) in dx[r * n_in..(r + 1) * n_in].iter_mut().enumerate() {
                    *slot = self.w[i * n_out..(i + 1) * n_out].iter().zip(dyr).map(|(w, d)| w * d).sum();
                }
            }
            dx
        });
        (grad, dx)
    }

    pub fn sgd(&mut self, grad: &Dense, lr: f64) {
        for (w, g) in self.w.iter_mut().zip(&grad.w) {
            *w -= lr * g;
        }
        for (b, g) in self.b.iter_mut().zip(&grad.b) {
            *b -= lr * g;
        }
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.w);
        out.extend_from_slice(&self.b);
    }

    fn load_from(&mut self, src: &[f64]) -> usize {
        let (nw, nb) = (self.w.len(), self.b.len());
        self.w.copy_from_slice(&src[..nw]);
        self.b.copy_from_slice(&src[nw..nw + nb]);
        nw + nb
    }
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Layer widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub input: usize,
    pub d_bar: usize,
    /// Server hidden width; zero for a single affine server layer.
    pub hidden: usize,
    pub classes: usize,
}

/// Device sub-model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceModel {
    pub layer: Dense,
}

/// Server sub-model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerModel {
    pub hidden: Option<Dense>,
    pub output: Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitModel {
    pub device: DeviceModel,
    pub server: ServerModel,
}

/// Device forward state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct DeviceCache {
    pub rows: usize,
    pre: Vec<f64>,
}

/// Server forward state.
#[derive(Debug, Clone)]
pub struct ServerPass {
    pub loss: f64,
    /// Row-major `rows x classes`.
    pub logits: Vec<f64>,
    rows: usize,
    input: Vec<f64>,
    hidden: Option<Vec<f64>>,
    probs: Vec<f64>,
    labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerGrads {
    pub hidden: Option<Dense>,
    pub output: Dense,
}

impl SplitModel {
    pub fn new(shape: ModelShape, rng: &mut SimRng) -> Result<Self> {
        if shape.input == 0 || shape.d_bar == 0 || shape.classes < 2 {
            return Err(Error::InvalidArgument(format!("bad model shape {shape:?}")));
        }
        let device = DeviceModel {
            layer: Dense::init(shape.input, shape.d_bar, rng),
        };
        let (hidden, out_in) = if shape.hidden > 0 {
            (Some(Dense::init(shape.d_bar, shape.hidden, rng)), shape.hidden)
        } else {
            (None, shape.d_bar)
        };
        let output = Dense::init(out_in, shape.classes, rng);
        Ok(Self {
            device,
            server: ServerModel { hidden, output },
        })
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            input: self.device.layer.inputs,
            d_bar: self.device.layer.outputs,
            hidden: self.server.hidden.as_ref().map_or(0, |h| h.outputs),
            classes: self.server.output.outputs,
        }
    }

    pub fn device_params(&self) -> usize {
        self.device.layer.param_count()
    }

    pub fn server_params(&self) -> usize {
        self.server.hidden.as_ref().map_or(0, Dense::param_count) + self.server.output.param_count()
    }

    /// Cut-layer features of a row-major input batch.
    pub fn forward_device(&self, u: &[f64], rows: usize) -> Result<(IntermediateMatrix, DeviceCache)> {
        if u.len() != rows * self.device.layer.inputs {
            return Err(Error::Shape(format!(
                "input of {} values for {rows} rows of width {}",
                u.len(),
                self.device.layer.inputs
            )));
        }
        let pre = self.device.layer.forward(u, rows);
        let mut act = pre.clone();
        relu_in_place(&mut act);
        let d_bar = self.device.layer.outputs;
        // An affine cut layer normalizes each node on its own.
        let f = IntermediateMatrix::from_row_major(rows, d_bar, &act)?.with_layout(ChannelLayout::per_column(d_bar))?;
        Ok((f, DeviceCache { rows, pre }))
    }

    pub fn forward_server(&self, f: &IntermediateMatrix, labels: &[usize]) -> Result<ServerPass> {
        let rows = f.rows();
        if f.cols() != self.device.layer.outputs || labels.len() != rows {
            return Err(Error::Shape(format!(
                "server got {}x{} features and {} labels",
                rows,
                f.cols(),
                labels.len()
            )));
        }
        let classes = self.server.output.outputs;
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside {classes} classes")));
        }
        let input = f.to_row_major();
        let hidden = self.server.hidden.as_ref().map(|h| {
            let mut z = h.forward(&input, rows);
            relu_in_place(&mut z);
            z
        });
        let logits = self.server.output.forward(hidden.as_deref().unwrap_or(&input), rows);
        let mut probs = vec![0.0; logits.len()];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &logits[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
            for (p, z) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (z - max).exp() / sum;
            }
            loss += sum.ln() + max - row[labels[r]];
        }
        Ok(ServerPass {
            loss: loss / rows as f64,
            logits,
            rows,
            input,
            hidden,
            probs,
            labels: labels.to_vec(),
        })
    }

    /// Server parameter gradients and the gradient with respect to the
    /// server input.
    pub fn backward_server(&self, pass: &ServerPass) -> Result<(ServerGrads, IntermediateMatrix)> {
        let rows = pass.rows;
        let classes = self.server.output.outputs;
        let mut dlogits = pass.probs.clone();
        for (r, &y) in pass.labels.iter().enumerate() {
            dlogits[r * classes + y] -= 1.0;
        }
        for d in &mut dlogits {
            *d /= rows as f64;
        }
        let out_input = pass.hidden.as_deref().unwrap_or(&pass.input);
        let (g_out, d_out_in) = self.server.output.backward(out_input, &dlogits, rows, true);
        let mut d_in = d_out_in.expect("input gradient requested");
        let g_hidden = match (&self.server.hidden, &pass.hidden) {
            (Some(h), Some(z)) => {
                for (d, &zv) in d_in.iter_mut().zip(z) {
                    if zv <= 0.0 {
                        *d = 0.0;
                    }
                }
                let (g, dx) = h.backward(&pass.input, &d_in, rows, true);
                d_in = dx.expect("input gradient requested");
                Some(g)
            }
            _ => None,
        };
        let g = IntermediateMatrix::from_row_major(rows, self.device.layer.outputs, &d_in)?;
        Ok((
            ServerGrads {
                hidden: g_hidden,
                output: g_out,
            },
            g,
        ))
    }

    /// Device parameter gradient from the (reconstructed) cut-layer gradient.
    pub fn backward_device(&self, u: &[f64], cache: &DeviceCache, g: &IntermediateMatrix) -> Result<Dense> {
        let d_bar = self.device.layer.outputs;
        if g.rows() != cache.rows || g.cols() != d_bar {
            return Err(Error::Shape(format!("gradient {}x{} for {}x{d_bar} features", g.rows(), g.cols(), cache.rows)));
        }
        let mut d = g.to_row_major();
        for (dv, &p) in d.iter_mut().zip(&cache.pre) {
            if p <= 0.0 {
                *dv = 0.0;
            }
        }
        Ok(self.device.layer.backward(u, &d, cache.rows, false).0)
    }

    pub fn update_server(&mut self, grads: &ServerGrads, lr: f64) {
        if let (Some(h), Some(g)) = (&mut self.server.hidden, &grads.hidden) {
            h.sgd(g, lr);
        }
        self.server.output.sgd(&grads.output, lr);
    }

    pub fn update_device(&mut self, grad: &Dense, lr: f64) {
        self.device.layer.sgd(grad, lr);
    }

    /// Uncompressed logits of a row-major batch.
    pub fn predict(&self, u: &[f64], rows: usize) -> Result<Vec<f64>> {
        let (f, _) = self.forward_device(u, rows)?;
        let input = f.to_row_major();
        let hidden = self.server.hidden.as_ref().map(|h| {
            let mut z = h.forward(&input, rows);
            relu_in_place(&mut z);
            z
        });
        Ok(self.server.output.forward(hidden.as_deref().unwrap_or(&input), rows))
    }

    /// Loss of the composed model without compression.
    pub fn loss(&self, u: &[f64], labels: &[usize]) -> Result<f64> {
        let (f, _) = self.forward_device(u, labels.len())?;
        Ok(self.forward_server(&f, labels)?.loss)
    }

    /// All parameters: device weights, device bias, then server layers.
    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.device_params() + self.server_params());
        self.device.layer.flatten_into(&mut v);
        if let Some(h) = &self.server.hidden {
            h.flatten_into(&mut v);
        }
        self.server.output.flatten_into(&mut v);
        v
    }

    pub fn set_params(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.device_params() + self.server_params() {
            return Err(Error::Shape(format!("{} parameters supplied", v.len())));
        }
        let mut at = self.device.layer.load_from(v);
        if let Some(h) = &mut self.server.hidden {
            at += h.load_from(&v[at..]);
        }
        self.server.output.load_from(&v[at..]);
        Ok(())
    }

    /// Flattened gradient in [`SplitModel::params`] order.
    pub fn flatten_grads(device: &Dense, server: &ServerGrads) -> Vec<f64> {
        let mut v = Vec::new();
        device.flatten_into(&mut v);
        if let Some(h) = &server.hidden {
            h.flatten_into(&mut v);
        }
        server.output.flatten_into(&mut v);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(rng: &mut SimRng, hidden: usize) -> SplitModel {
        SplitModel::new(
            ModelShape {
                input: 3,
                d_bar: 4,
                hidden,
                classes: 3,
            },
            rng,
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_uniform_loss() {
        let mut rng = SimRng::new(1);
        let mut m = tiny(&mut rng, 2);
        let n = m.params().len();
        m.set_params(&vec![0.0; n]).unwrap();
        let loss = m.loss(&[0.1, 0.2, 0.3, 0.5, 0.1, 0.9], &[0, 2]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn param_roundtrip() {
        let mut rng = SimRng::new(2);
        let mut m = tiny(&mut rng, 5);
        let p = m.params();
        assert_eq!(p.len(), 3 * 4 + 4 + 4 * 5 + 5 + 5 * 3 + 3);
        let shifted: Vec<f64> = p.iter().map(|v| v + 1.0).collect();
        m.set_params(&shifted).unwrap();
        assert_eq!(m.params(), shifted);
    }

    #[test]
    fn identity_device_gives_softmax_input_gradient() {
        let mut rng = SimRng::new(3);
        let mut m = SplitModel::new(
            ModelShape {
                input: 3,
                d_bar: 3,
                hidden: 0,
                classes: 2,
            },
            &mut rng,
        )
        .unwrap();
        m.device.layer.w = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        m.device.layer.b = vec![0.0; 3];
        let u = [0.2, 0.7, 0.1, 0.9, 0.3, 0.4];
        let labels = [1, 0];
        let (f, _) = m.forward_device(&u, 2).unwrap();
        assert_eq!(f.to_row_major(), u.to_vec());
        let pass = m.forward_server(&f, &labels).unwrap();
        let (_, g) = m.backward_server(&pass).unwrap();
        let w = &m.server.output;
        for r in 0..2 {
            let z: Vec<f64> = (0..2).map(|c| w.b[c] + (0..3).map(|i| u[r * 3 + i] * w.w[i * 2 + c]).sum::<f64>()).collect();
            let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            for i in 0..3 {
                let expect: f64 = (0..2)
                    .map(|c| (e[c] / s - if c == labels[r] { 1.0 } else { 0.0 }) * w.w[i * 2 + c] / 2.0)
                    .sum();
                assert!((g.get(r, i) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let mut rng = SimRng::new(4);
        let m = tiny(&mut rng, 0);
        assert!(m.forward_device(&[0.0; 5], 2).is_err());
        let f = IntermediateMatrix::zeros(2, 4);
        assert!(m.forward_server(&f, &[0]).is_err());
        assert!(m.forward_server(&f, &[0, 7]).is_err());
    }
}
