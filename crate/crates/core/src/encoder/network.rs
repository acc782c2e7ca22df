//! Strided 3×3 convolution blocks with leaky-ReLU (the last block is linear),
//! global average pooling to an `M`-vector embedding, and a two-layer
//! classification head.
//!
//! Parameters live in one flat vector described by a layout table. Feature
//! maps are channel-major (`C × H × W`).

use nalgebra::DMatrix;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colorspace::RgbImage;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
const KERNEL: usize = 3;
const STRIDE: usize = 2;
const IN_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub image_side: usize,
    /// Output channels of each conv block; the last one is the embedding size.
    pub filters: Vec<usize>,
    pub n_classes: usize,
    pub leaky_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.image_side == 0 {
            return Err(Error::InvalidArgument("image_side must be positive".into()));
        }
        if self.filters.is_empty() || self.filters.contains(&0) {
            return Err(Error::InvalidArgument(format!("filters must be non-empty and positive, got {:?}", self.filters)));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidArgument(format!("n_classes must be at least 2, got {}", self.n_classes)));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::InvalidArgument("leaky_slope must be finite".into()));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        *self.filters.last().expect("validated architecture has filters")
    }

    /// Spatial side of each conv input, followed by the final map side.
    pub fn sides(&self) -> Vec<usize> {
        let mut sides = vec![self.image_side];
        for _ in &self.filters {
            sides.push(sides.last().unwrap().div_ceil(STRIDE));
        }
        sides
    }

    pub fn layout(&self) -> Vec<LayoutEntry> {
        let m = self.embed_dim();
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        let mut cin = IN_CHANNELS;
        for (l, &cout) in self.filters.iter().enumerate() {
            shapes.push((format!("conv{l}.weight"), vec![cout, cin, KERNEL, KERNEL]));
            shapes.push((format!("conv{l}.bias"), vec![cout]));
            cin = cout;
        }
        shapes.push(("fc1.weight".into(), vec![m, m]));
        shapes.push(("fc1.bias".into(), vec![m]));
        shapes.push(("fc2.weight".into(), vec![self.n_classes, m]));
        shapes.push(("fc2.bias".into(), vec![self.n_classes]));

        let mut offset = 0;
        shapes
            .into_iter()
            .map(|(name, shape)| {
                let e = LayoutEntry { name, shape, offset };
                offset += e.len();
                e
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().iter().map(LayoutEntry::len).sum()
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    conv_inputs: Vec<Vec<f64>>,
    conv_pre: Vec<Vec<f64>>,
    pub embedding: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Architecture,
    layout: Vec<LayoutEntry>,
    params: Vec<f64>,
}

impl Network {
    /// Uniform He-style initialization (bound `gain·sqrt(3/fan_in)`), zero biases.
    pub fn init(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let mut params = vec![0.0; layout.iter().map(LayoutEntry::len).sum()];
        let gain = (2.0 / (1.0 + arch.leaky_slope * arch.leaky_slope)).sqrt();
        for e in layout.iter().filter(|e| e.shape.len() > 1) {
            let fan_in: usize = e.shape[1..].iter().product();
            let bound = gain * (3.0 / fan_in as f64).sqrt();
            for p in &mut params[e.range()] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(Self { arch, layout, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let expected: usize = layout.iter().map(LayoutEntry::len).sum();
        if params.len() != expected {
            return Err(Error::ShapeMismatch(format!("expected {expected} parameters, got {}", params.len())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("parameters contain non-finite values".into()));
        }
        Ok(Self { arch, layout, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &[LayoutEntry] {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    fn slice(&self, idx: usize) -> &[f64] {
        &self.params[self.layout[idx].range()]
    }

    fn leaky(&self, z: f64) -> f64 {
        if z > 0.0 {
            z
        } else {
            self.arch.leaky_slope * z
        }
    }

    fn leaky_grad(&self, z: f64) -> f64 {
        if z > 0.0 {
            1.0
        } else {
            self.arch.leaky_slope
        }
    }

    pub fn forward(&self, img: &RgbImage) -> Result<Trace> {
        let side = self.arch.image_side;
        if img.height() != side || img.width() != side {
            return Err(Error::ShapeMismatch(format!(
                "network expects {side}×{side} images, got {}×{}",
                img.height(),
                img.width()
            )));
        }
        let n = side * side;
        let mut x = vec![0.0; IN_CHANNELS * n];
        for (p, px) in img.pixels().enumerate() {
            for c in 0..IN_CHANNELS {
                x[c * n + p] = px[c];
            }
        }

        let sides = self.arch.sides();
        let mut cin = IN_CHANNELS;
        let mut conv_inputs = Vec::with_capacity(self.arch.filters.len());
        let mut conv_pre = Vec::with_capacity(self.arch.filters.len());
        for (l, &cout) in self.arch.filters.iter().enumerate() {
            let z = conv_forward(&x, cin, sides[l], self.slice(2 * l), self.slice(2 * l + 1), cout);
            // The final block stays linear so the pooled embedding is signed.
            let last = l + 1 == self.arch.filters.len();
            let a: Vec<f64> = z.iter().map(|&v| if last { v } else { self.leaky(v) }).collect();
            conv_inputs.push(std::mem::replace(&mut x, a));
            conv_pre.push(z);
            cin = cout;
        }

        let area = sides.last().unwrap().pow(2);
        let embedding: Vec<f64> = x.chunks(area).map(|ch| ch.iter().sum::<f64>() / area as f64).collect();

        let nf = self.arch.filters.len();
        let hidden_pre = dense(self.slice(2 * nf), self.slice(2 * nf + 1), &embedding);
        let hidden: Vec<f64> = hidden_pre.iter().map(|&v| self.leaky(v)).collect();
        let logits = dense(self.slice(2 * nf + 2), self.slice(2 * nf + 3), &hidden);
        Ok(Trace { conv_inputs, conv_pre, embedding, hidden_pre, hidden, logits })
    }

    /// Accumulates parameter gradients given upstream gradients on the
    /// embedding and the logits.
    pub fn backward(&self, trace: &Trace, d_embedding: &[f64], d_logits: &[f64], grad: &mut [f64]) {
        let nf = self.arch.filters.len();
        let m = self.arch.embed_dim();
        let k = self.arch.n_classes;

        let (w2, b2) = (self.layout[2 * nf + 2].range(), self.layout[2 * nf + 3].range());
        let mut d_hidden = vec![0.0; m];
        for o in 0..k {
            grad[b2.start + o] += d_logits[o];
            for j in 0..m {
                grad[w2.start + o * m + j] += d_logits[o] * trace.hidden[j];
                d_hidden[j] += self.params[w2.start + o * m + j] * d_logits[o];
            }
        }

        let (w1, b1) = (self.layout[2 * nf].range(), self.layout[2 * nf + 1].range());
        let mut d_emb = d_embedding.to_vec();
        for j in 0..m {
            let dz = d_hidden[j] * self.leaky_grad(trace.hidden_pre[j]);
            grad[b1.start + j] += dz;
            for i in 0..m {
                grad[w1.start + j * m + i] += dz * trace.embedding[i];
                d_emb[i] += self.params[w1.start + j * m + i] * dz;
            }
        }

        let sides = self.arch.sides();
        let area = sides[nf].pow(2);
        let mut d_act: Vec<f64> = d_emb.iter().flat_map(|&g| std::iter::repeat_n(g / area as f64, area)).collect();
        for l in (0..nf).rev() {
            let cin = if l == 0 { IN_CHANNELS } else { self.arch.filters[l - 1] };
            let cout = self.arch.filters[l];
            let last = l + 1 == nf;
            let dz: Vec<f64> = if last {
                d_act
            } else {
                d_act.iter().zip(&trace.conv_pre[l]).map(|(g, &z)| g * self.leaky_grad(z)).collect()
            };
            let (w, b) = (self.layout[2 * l].range(), self.layout[2 * l + 1].range());
            let (gw, rest) = grad[w.start..].split_at_mut(w.len());
            let gb = &mut rest[b.start - w.end..b.end - w.end];
            d_act = conv_backward(
                &trace.conv_inputs[l],
                cin,
                sides[l],
                &self.params[w],
                cout,
                &dz,
                gw,
                gb,
                l > 0,
            );
        }
    }

    pub fn forward_batch(&self, imgs: &[RgbImage]) -> Result<Vec<Trace>> {
        imgs.par_iter().map(|img| self.forward(img)).collect()
    }

    /// Sum of per-image parameter gradients; rows of the upstream matrices
    /// correspond to traces. The sum is taken in index order.
    pub fn backward_batch(&self, traces: &[Trace], d_embedding: &DMatrix<f64>, d_logits: &DMatrix<f64>) -> Vec<f64> {
        let per_image: Vec<Vec<f64>> = traces
            .par_iter()
            .enumerate()
            .map(|(i, t)| {
                let mut g = vec![0.0; self.params.len()];
                let de: Vec<f64> = d_embedding.row(i).iter().copied().collect();
                let dl: Vec<f64> = d_logits.row(i).iter().copied().collect();
                self.backward(t, &de, &dl, &mut g);
                g
            })
            .collect();
        let mut total = vec![0.0; self.params.len()];
        for g in per_image {
            for (t, v) in total.iter_mut().zip(g) {
                *t += v;
            }
        }
        total
    }

    /// Embedding and logits as `B × M` and `B × K` matrices.
    pub fn stack(traces: &[Trace]) -> (DMatrix<f64>, DMatrix<f64>) {
        let b = traces.len();
        let m = traces.first().map_or(0, |t| t.embedding.len());
        let k = traces.first().map_or(0, |t| t.logits.len());
        (
            DMatrix::from_fn(b, m, |r, c| traces[r].embedding[c]),
            DMatrix::from_fn(b, k, |r, c| traces[r].logits[c]),
        )
    }
}

pub fn argmax(values: &[f64]) -> usize {
    values.iter().enumerate().fold(0, |best, (i, &v)| if v > values[best] { i } else { best })
}

fn dense(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    b.iter().enumerate().map(|(o, &bo)| bo + w[o * x.len()..(o + 1) * x.len()].iter().zip(x).map(|(a, c)| a * c).sum::<f64>()).collect()
}

/// Input-pixel index for output position `o` and kernel tap `k`, if inside.
#[inline]
fn tap(o: usize, k: usize, side: usize) -> Option<usize> {
    (STRIDE * o + k).checked_sub(1).filter(|&i| i < side)
}

fn conv_forward(x: &[f64], cin: usize, side: usize, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let so = side.div_ceil(STRIDE);
    let mut out = vec![0.0; cout * so * so];
    for o in 0..cout {
        let plane = &mut out[o * so * so..(o + 1) * so * so];
        plane.fill(b[o]);
        for c in 0..cin {
            let input = &x[c * side * side..(c + 1) * side * side];
            let kernel = &w[(o * cin + c) * KERNEL * KERNEL..(o * cin + c + 1) * KERNEL * KERNEL];
            for oy in 0..so {
                for ky in 0..KERNEL {
                    let Some(iy) = tap(oy, ky, side) else { continue };
                    for ox in 0..so {
                        let mut acc = 0.0;
                        for kx in 0..KERNEL {
                            if let Some(ix) = tap(ox, kx, side) {
                                acc += kernel[ky * KERNEL + kx] * input[iy * side + ix];
                            }
                        }
                        plane[oy * so + ox] += acc;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    cin: usize,
    side: usize,
    w: &[f64],
    cout: usize,
    dz: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    want_input_grad: bool,
) -> Vec<f64> {
    let so = side.div_ceil(STRIDE);
    let mut dx = if want_input_grad { vec![0.0; cin * side * side] } else { Vec::new() };
    for o in 0..cout {
        let dplane = &dz[o * so * so..(o + 1) * so * so];
        gb[o] += dplane.iter().sum::<f64>();
        for c in 0..cin {
            let input = &x[c * side * side..(c + 1) * side * side];
            let base = (o * cin + c) * KERNEL * KERNEL;
            for oy in 0..so {
                for ky in 0..KERNEL {
                    let Some(iy) = tap(oy, ky, side) else { continue };
                    for ox in 0..so {
                        let g = dplane[oy * so + ox];
                        for kx in 0..KERNEL {
                            if let Some(ix) = tap(ox, kx, side) {
                                gw[base + ky * KERNEL + kx] += g * input[iy * side + ix];
                                if want_input_grad {
                                    dx[c * side * side + iy * side + ix] += g * w[base + ky * KERNEL + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}
