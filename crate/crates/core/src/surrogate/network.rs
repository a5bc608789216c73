use rand::Rng;
use rand_distr::Uniform;

use super::arch::{dense_name, stage_name, Architecture};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::scalar::Real;

/// One convolution + batch-norm + ReLU + max-pool stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStage<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_side: usize,
    /// Kernels laid out as `[out][in][3][3]`.
    pub weight: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T> ConvStage<T> {
    pub fn conv_side(&self) -> usize {
        self.in_side - 2
    }

    pub fn out_side(&self) -> usize {
        self.conv_side() / 2
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.in_side * self.in_side
    }

    fn out_len(&self) -> usize {
        self.out_channels * self.out_side() * self.out_side()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T> {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `[out][in]`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub relu: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub arch: Architecture,
    pub stages: Vec<ConvStage<T>>,
    pub dense: Vec<DenseLayer<T>>,
}

/// Parameter gradients in the order of [`Network::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct StageCache<T> {
    pub input: Vec<T>,
    /// Normalized convolution output before scale and shift.
    pub xhat: Vec<T>,
    pub argmax: Vec<u32>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DenseCache<T> {
    pub input: Vec<T>,
    pub output: Vec<T>,
}

/// Activations kept by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub batch: usize,
    pub stages: Vec<StageCache<T>>,
    pub dense: Vec<DenseCache<T>>,
    pub output: Vec<T>,
}

/// Shape of one layer output as produced by a forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerTrace {
    pub name: String,
    pub shape: Vec<usize>,
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (a, &b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

/// Valid 3×3 convolution of one sample, accumulating into `out`.
fn conv_forward<T: Real>(input: &[T], weight: &[T], ic: usize, oc: usize, side: usize, out: &mut [T]) {
    let cs = side - 2;
    let plane = side * side;
    for o in 0..oc {
        let op = &mut out[o * cs * cs..(o + 1) * cs * cs];
        for c in 0..ic {
            let ip = &input[c * plane..(c + 1) * plane];
            let w = &weight[(o * ic + c) * 9..(o * ic + c + 1) * 9];
            for y in 0..cs {
                let orow = &mut op[y * cs..(y + 1) * cs];
                for ky in 0..3 {
                    let base = (y + ky) * side;
                    for kx in 0..3 {
                        axpy(w[ky * 3 + kx], &ip[base + kx..base + kx + cs], orow);
                    }
                }
            }
        }
    }
}

/// Kernel gradient and optionally input gradient of one sample.
#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    input: &[T],
    weight: &[T],
    dconv: &[T],
    ic: usize,
    oc: usize,
    side: usize,
    dweight: &mut [f64],
    dinput: Option<&mut [T]>,
) {
    let cs = side - 2;
    let plane = side * side;
    for o in 0..oc {
        let dp = &dconv[o * cs * cs..(o + 1) * cs * cs];
        for c in 0..ic {
            let ip = &input[c * plane..(c + 1) * plane];
            for k in 0..9 {
                let (ky, kx) = (k / 3, k % 3);
                let mut s = 0.0f64;
                for y in 0..cs {
                    let base = (y + ky) * side + kx;
                    s += dot(&dp[y * cs..(y + 1) * cs], &ip[base..base + cs]).as_f64();
                }
                dweight[(o * ic + c) * 9 + k] += s;
            }
        }
    }
    if let Some(dinput) = dinput {
        for o in 0..oc {
            let dp = &dconv[o * cs * cs..(o + 1) * cs * cs];
            for c in 0..ic {
                let w = &weight[(o * ic + c) * 9..(o * ic + c + 1) * 9];
                let di = &mut dinput[c * plane..(c + 1) * plane];
                for y in 0..cs {
                    let drow = &dp[y * cs..(y + 1) * cs];
                    for ky in 0..3 {
                        let base = (y + ky) * side;
                        for kx in 0..3 {
                            axpy(w[ky * 3 + kx], drow, &mut di[base + kx..base + kx + cs]);
                        }
                    }
                }
            }
        }
    }
}

/// ReLU followed by 2×2/2 max-pooling of one channel plane.
fn relu_pool<T: Real>(y: &[T], cs: usize, out: &mut [T], argmax: Option<&mut [u32]>) {
    let ps = cs / 2;
    let mut arg = argmax;
    for py in 0..ps {
        for px in 0..ps {
            let mut best = 2 * py * cs + 2 * px;
            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                let q = (2 * py + dy) * cs + 2 * px + dx;
                if y[q] > y[best] {
                    best = q;
                }
            }
            out[py * ps + px] = y[best].max(T::zero());
            if let Some(a) = arg.as_deref_mut() {
                a[py * ps + px] = best as u32;
            }
        }
    }
}

fn he_uniform<T: Real>(rng: &mut impl Rng, fan_in: usize, n: usize) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    (0..n).map(|_| T::lit(rng.sample(dist))).collect()
}

impl<T: Real> Network<T> {
    /// He-uniform kernels and weights, zero biases, unit scale, zero shift.
    pub fn new(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut stages = Vec::with_capacity(arch.channels.len());
        for (i, &oc) in arch.channels.iter().enumerate() {
            let ic = arch.stage_input_channels(i);
            let mut rng = substream(seed, "surrogate.init.conv", i as u64);
            stages.push(ConvStage {
                in_channels: ic,
                out_channels: oc,
                in_side: arch.stage_input_side(i),
                weight: he_uniform(&mut rng, ic * 9, oc * ic * 9),
                gamma: vec![T::one(); oc],
                beta: vec![T::zero(); oc],
                running_mean: vec![T::zero(); oc],
                running_var: vec![T::one(); oc],
            });
        }
        let widths = arch.dense_widths();
        let mut dense = Vec::with_capacity(widths.len());
        let mut fan_in = arch.flatten_len();
        for (i, &w) in widths.iter().enumerate() {
            let mut rng = substream(seed, "surrogate.init.dense", i as u64);
            dense.push(DenseLayer {
                n_in: fan_in,
                n_out: w,
                weight: he_uniform(&mut rng, fan_in, w * fan_in),
                bias: vec![T::zero(); w],
                relu: i + 1 < widths.len(),
            });
            fan_in = w;
        }
        Ok(Self { arch: arch.clone(), stages, dense })
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.stages.len() {
            let s = stage_name(i);
            names.push(format!("{s}.weight"));
            names.push(format!("{s}.bn.gamma"));
            names.push(format!("{s}.bn.beta"));
        }
        for i in 0..self.dense.len() {
            let d = self.dense_layer_name(i);
            names.push(format!("{d}.weight"));
            names.push(format!("{d}.bias"));
        }
        names
    }

    pub fn params(&self) -> Vec<&[T]> {
        let mut p: Vec<&[T]> = Vec::new();
        for s in &self.stages {
            p.extend([&s.weight[..], &s.gamma[..], &s.beta[..]]);
        }
        for d in &self.dense {
            p.extend([&d.weight[..], &d.bias[..]]);
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut p: Vec<&mut [T]> = Vec::new();
        for s in &mut self.stages {
            p.push(&mut s.weight[..]);
            p.push(&mut s.gamma[..]);
            p.push(&mut s.beta[..]);
        }
        for d in &mut self.dense {
            p.push(&mut d.weight[..]);
            p.push(&mut d.bias[..]);
        }
        p
    }

    /// Shapes matching [`Network::param_names`].
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for s in &self.stages {
            shapes.push(vec![s.out_channels, s.in_channels, 3, 3]);
            shapes.push(vec![s.out_channels]);
            shapes.push(vec![s.out_channels]);
        }
        for d in &self.dense {
            shapes.push(vec![d.n_out, d.n_in]);
            shapes.push(vec![d.n_out]);
        }
        shapes
    }

    /// Batch-norm running moments, named.
    pub fn buffers(&self) -> Vec<(String, &[T])> {
        let mut b = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            b.push((format!("{}.bn.running_mean", stage_name(i)), &s.running_mean[..]));
            b.push((format!("{}.bn.running_var", stage_name(i)), &s.running_var[..]));
        }
        b
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        let mut b: Vec<&mut [T]> = Vec::new();
        for s in &mut self.stages {
            b.push(&mut s.running_mean[..]);
            b.push(&mut s.running_var[..]);
        }
        b
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn dense_layer_name(&self, i: usize) -> String {
        if i + 1 == self.dense.len() {
            "output".into()
        } else {
            dense_name(i)
        }
    }

    fn check_input(&self, x: &[T], batch: usize) -> Result<()> {
        let per = self.arch.input_len();
        if batch == 0 || x.len() != batch * per {
            return Err(Error::Shape {
                layer: "input".into(),
                message: format!(
                    "expected batch x {} x {} x {} = {} values per sample, got {} values for batch {batch}",
                    self.arch.input_channels,
                    self.arch.input_side,
                    self.arch.input_side,
                    per,
                    x.len()
                ),
            });
        }
        Ok(())
    }

    /// Inference-mode forward pass using the running batch-norm moments.
    pub fn forward(&self, x: &[T], batch: usize) -> Result<Vec<T>> {
        self.forward_inner(x, batch, None)
    }

    /// Inference-mode forward pass that also records every layer's output shape.
    pub fn forward_traced(&self, x: &[T], batch: usize) -> Result<(Vec<T>, Vec<LayerTrace>)> {
        let mut trace = Vec::new();
        let out = self.forward_inner(x, batch, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn forward_inner(&self, x: &[T], batch: usize, mut trace: Option<&mut Vec<LayerTrace>>) -> Result<Vec<T>> {
        self.check_input(x, batch)?;
        let mut cur = x.to_vec();
        for (i, s) in self.stages.iter().enumerate() {
            let cs = s.conv_side();
            let ps = s.out_side();
            let eps = self.arch.bn_eps;
            let scale: Vec<T> = (0..s.out_channels)
                .map(|c| T::lit(s.gamma[c].as_f64() / (s.running_var[c].as_f64() + eps).sqrt()))
                .collect();
            let shift: Vec<T> = (0..s.out_channels).map(|c| s.beta[c] - scale[c] * s.running_mean[c]).collect();
            let mut next = vec![T::zero(); batch * s.out_len()];
            let mut z = vec![T::zero(); s.out_channels * cs * cs];
            for b in 0..batch {
                z.iter_mut().for_each(|v| *v = T::zero());
                conv_forward(&cur[b * s.in_len()..(b + 1) * s.in_len()], &s.weight, s.in_channels, s.out_channels, s.in_side, &mut z);
                for c in 0..s.out_channels {
                    let zp = &mut z[c * cs * cs..(c + 1) * cs * cs];
                    zp.iter_mut().for_each(|v| *v = *v * scale[c] + shift[c]);
                    let o = b * s.out_len() + c * ps * ps;
                    relu_pool(zp, cs, &mut next[o..o + ps * ps], None);
                }
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(LayerTrace { name: stage_name(i), shape: vec![batch, s.out_channels, ps, ps] });
            }
            cur = next;
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(LayerTrace { name: "flatten".into(), shape: vec![batch, self.arch.flatten_len()] });
        }
        for (i, d) in self.dense.iter().enumerate() {
            cur = dense_forward(d, &cur, batch);
            if let Some(t) = trace.as_deref_mut() {
                t.push(LayerTrace { name: self.dense_layer_name(i), shape: vec![batch, d.n_out] });
            }
        }
        Ok(cur)
    }

    /// Training-mode forward pass with batch moments.  The network is not
    /// modified; apply [`Network::update_running`] to advance the moments.
    pub fn forward_train(&self, x: &[T], batch: usize) -> Result<ForwardCache<T>> {
        self.check_input(x, batch)?;
        let mut cur = x.to_vec();
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let cs = s.conv_side();
            let ps = s.out_side();
            let oc = s.out_channels;
            let plane = cs * cs;
            let mut z = vec![T::zero(); batch * oc * plane];
            for b in 0..batch {
                conv_forward(
                    &cur[b * s.in_len()..(b + 1) * s.in_len()],
                    &s.weight,
                    s.in_channels,
                    oc,
                    s.in_side,
                    &mut z[b * oc * plane..(b + 1) * oc * plane],
                );
            }
            let n = (batch * plane) as f64;
            let mut mean = vec![0.0; oc];
            let mut var = vec![0.0; oc];
            for c in 0..oc {
                let chan = (0..batch).flat_map(|b| z[(b * oc + c) * plane..(b * oc + c + 1) * plane].iter());
                let m = chan.clone().map(|v| v.as_f64()).sum::<f64>() / n;
                let v = chan.map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / n;
                mean[c] = m;
                var[c] = v;
            }
            let mut next = vec![T::zero(); batch * s.out_len()];
            let mut argmax = vec![0u32; batch * s.out_len()];
            let mut y = vec![T::zero(); plane];
            for b in 0..batch {
                for c in 0..oc {
                    let inv = 1.0 / (var[c] + self.arch.bn_eps).sqrt();
                    let (mu, inv) = (T::lit(mean[c]), T::lit(inv));
                    let zp = &mut z[(b * oc + c) * plane..(b * oc + c + 1) * plane];
                    for (q, v) in zp.iter_mut().enumerate() {
                        *v = (*v - mu) * inv;
                        y[q] = s.gamma[c] * *v + s.beta[c];
                    }
                    let o = b * s.out_len() + c * ps * ps;
                    relu_pool(&y, cs, &mut next[o..o + ps * ps], Some(&mut argmax[o..o + ps * ps]));
                }
            }
            stage_caches.push(StageCache { input: cur, xhat: z, argmax, mean, var });
            cur = next;
        }
        let mut dense_caches = Vec::with_capacity(self.dense.len());
        for d in &self.dense {
            let out = dense_forward(d, &cur, batch);
            dense_caches.push(DenseCache { input: cur, output: out.clone() });
            cur = out;
        }
        Ok(ForwardCache { batch, stages: stage_caches, dense: dense_caches, output: cur })
    }

    /// Exponential update of the running moments from a training pass; the
    /// running variance uses the unbiased batch variance.
    pub fn update_running(&mut self, cache: &ForwardCache<T>) {
        let m = self.arch.bn_momentum;
        for (s, c) in self.stages.iter_mut().zip(&cache.stages) {
            let n = (cache.batch * s.conv_side() * s.conv_side()) as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for k in 0..s.out_channels {
                s.running_mean[k] = T::lit((1.0 - m) * s.running_mean[k].as_f64() + m * c.mean[k]);
                s.running_var[k] = T::lit((1.0 - m) * s.running_var[k].as_f64() + m * c.var[k] * unbias);
            }
        }
    }

    /// Reverse pass from the loss gradient with respect to the outputs.
    pub fn backward(&self, cache: &ForwardCache<T>, dout: &[T]) -> Gradients {
        let batch = cache.batch;
        let mut grads: Vec<Vec<f64>> = self.params().iter().map(|p| vec![0.0; p.len()]).collect();
        let n_stage_params = 3 * self.stages.len();
        let mut delta = dout.to_vec();
        for (i, d) in self.dense.iter().enumerate().rev() {
            let dc = &cache.dense[i];
            if d.relu {
                for (g, &o) in delta.iter_mut().zip(&dc.output) {
                    if !(o > T::zero()) {
                        *g = T::zero();
                    }
                }
            }
            let mut dinput = vec![T::zero(); batch * d.n_in];
            let (gw, rest) = grads[n_stage_params + 2 * i..].split_at_mut(1);
            let (gw, gb) = (&mut gw[0], &mut rest[0]);
            for b in 0..batch {
                let x = &dc.input[b * d.n_in..(b + 1) * d.n_in];
                let dx = &mut dinput[b * d.n_in..(b + 1) * d.n_in];
                for j in 0..d.n_out {
                    let g = delta[b * d.n_out + j];
                    gb[j] += g.as_f64();
                    let g64 = g.as_f64();
                    for (w, &xv) in gw[j * d.n_in..(j + 1) * d.n_in].iter_mut().zip(x) {
                        *w += g64 * xv.as_f64();
                    }
                    axpy(g, &d.weight[j * d.n_in..(j + 1) * d.n_in], dx);
                }
            }
            delta = dinput;
        }
        for (i, s) in self.stages.iter().enumerate().rev() {
            let sc = &cache.stages[i];
            let cs = s.conv_side();
            let ps = s.out_side();
            let oc = s.out_channels;
            let plane = cs * cs;
            let n = (batch * plane) as f64;
            let mut dz = vec![T::zero(); batch * oc * plane];
            for b in 0..batch {
                for c in 0..oc {
                    let o = b * s.out_len() + c * ps * ps;
                    let base = (b * oc + c) * plane;
                    for q in 0..ps * ps {
                        let at = base + sc.argmax[o + q] as usize;
                        if s.gamma[c] * sc.xhat[at] + s.beta[c] > T::zero() {
                            dz[at] = delta[o + q];
                        }
                    }
                }
            }
            let mut dgamma = vec![0.0; oc];
            let mut dbeta = vec![0.0; oc];
            for b in 0..batch {
                for c in 0..oc {
                    let base = (b * oc + c) * plane;
                    for q in base..base + plane {
                        let g = dz[q].as_f64();
                        dbeta[c] += g;
                        dgamma[c] += g * sc.xhat[q].as_f64();
                    }
                }
            }
            for c in 0..oc {
                let inv = 1.0 / (sc.var[c] + self.arch.bn_eps).sqrt();
                let g = s.gamma[c].as_f64();
                let (sum_dx, sum_dx_xhat) = (g * dbeta[c], g * dgamma[c]);
                for b in 0..batch {
                    let base = (b * oc + c) * plane;
                    for q in base..base + plane {
                        let dxhat = g * dz[q].as_f64();
                        let v = inv / n * (n * dxhat - sum_dx - sc.xhat[q].as_f64() * sum_dx_xhat);
                        dz[q] = T::lit(v);
                    }
                }
            }
            grads[3 * i + 1] = dgamma;
            grads[3 * i + 2] = dbeta;
            let need_input = i > 0;
            let mut dinput = if need_input { vec![T::zero(); batch * s.in_len()] } else { Vec::new() };
            let gw = &mut grads[3 * i];
            for b in 0..batch {
                let di = if need_input { Some(&mut dinput[b * s.in_len()..(b + 1) * s.in_len()]) } else { None };
                conv_backward(
                    &sc.input[b * s.in_len()..(b + 1) * s.in_len()],
                    &s.weight,
                    &dz[b * oc * plane..(b + 1) * oc * plane],
                    s.in_channels,
                    oc,
                    s.in_side,
                    gw,
                    di,
                );
            }
            delta = dinput;
        }
        Gradients { tensors: grads }
    }

    /// Mean squared error `(1/B) Σ |f(x) - t|²` in training mode, with gradients.
    pub fn loss_and_gradients(&self, x: &[T], targets: &[f64], batch: usize) -> Result<(f64, Gradients, ForwardCache<T>)> {
        let cache = self.forward_train(x, batch)?;
        let out = self.arch.outputs;
        if targets.len() != batch * out {
            return Err(Error::Shape {
                layer: "output".into(),
                message: format!("expected {} target values, got {}", batch * out, targets.len()),
            });
        }
        let (loss, dout) = mse_loss(&cache.output, targets, batch);
        let grads = self.backward(&cache, &dout);
        Ok((loss, grads, cache))
    }
}

fn dense_forward<T: Real>(d: &DenseLayer<T>, x: &[T], batch: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * d.n_out];
    for b in 0..batch {
        let xb = &x[b * d.n_in..(b + 1) * d.n_in];
        for j in 0..d.n_out {
            let v = d.bias[j] + dot(&d.weight[j * d.n_in..(j + 1) * d.n_in], xb);
            out[b * d.n_out + j] = if d.relu { v.max(T::zero()) } else { v };
        }
    }
    out
}

/// Loss and its gradient with respect to the predictions.
pub fn mse_loss<T: Real>(pred: &[T], targets: &[f64], batch: usize) -> (f64, Vec<T>) {
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, &t) in pred.iter().zip(targets) {
        let r = p.as_f64() - t;
        loss += r * r;
        grad.push(T::lit(2.0 * r / batch as f64));
    }
    (loss / batch as f64, grad)
}

/// Outcome of comparing analytic and finite-difference gradients of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    /// `|g_a - g_fd| / max(|g_a|, |g_fd|)` over the whole tensor.
    pub rel_error: f64,
    /// The same measure with every probe at the fixed step `eps`.
    pub rel_error_fixed_step: f64,
    pub coordinates: usize,
    /// Coordinates whose `±eps` probe changed a ReLU or pooling decision and
    /// were re-probed with a halved step.
    pub reduced_steps: usize,
}

/// Central differences of the training-mode loss against [`Network::backward`].
///
/// The loss is piecewise smooth; a probe that flips a ReLU sign or a pooling
/// argmax measures a secant across the kink instead of the derivative, so
/// such probes are repeated with the step halved until the activation
/// pattern at `θ ± h` equals the one at `θ`.
pub fn gradient_check(net: &Network<f64>, x: &[f64], targets: &[f64], batch: usize, eps: f64) -> Result<Vec<TensorCheck>> {
    let (_, analytic, cache) = net.loss_and_gradients(x, targets, batch)?;
    let base = net.activation_pattern(&cache);
    let names = net.param_names();
    let mut probe = net.clone();
    let mut report = Vec::with_capacity(names.len());
    for (t, name) in names.into_iter().enumerate() {
        let len = analytic.tensors[t].len();
        let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
        let (mut diff_fixed, mut nf_fixed) = (0.0, 0.0);
        let mut reduced = 0;
        for k in 0..len {
            let orig = probe.params()[t][k];
            let mut h = eps;
            let mut fixed = None;
            let fd = loop {
                probe.params_mut()[t][k] = orig + h;
                let (lp, pp) = probe.probe_loss(x, targets, batch)?;
                probe.params_mut()[t][k] = orig - h;
                let (lm, pm) = probe.probe_loss(x, targets, batch)?;
                probe.params_mut()[t][k] = orig;
                fixed.get_or_insert((lp - lm) / (2.0 * h));
                if (pp == base && pm == base) || h < eps * 1e-9 {
                    break (lp - lm) / (2.0 * h);
                }
                h *= 0.5;
            };
            if h < eps {
                reduced += 1;
            }
            let a = analytic.tensors[t][k];
            let f = fixed.unwrap_or(fd);
            diff += (a - fd) * (a - fd);
            na += a * a;
            nf += fd * fd;
            diff_fixed += (a - f) * (a - f);
            nf_fixed += f * f;
        }
        let rel = |d: f64, n: f64| {
            let scale = na.sqrt().max(n.sqrt());
            if scale > 0.0 { d.sqrt() / scale } else { 0.0 }
        };
        report.push(TensorCheck {
            name,
            rel_error: rel(diff, nf),
            rel_error_fixed_step: rel(diff_fixed, nf_fixed),
            coordinates: len,
            reduced_steps: reduced,
        });
    }
    Ok(report)
}

impl Network<f64> {
    fn probe_loss(&self, x: &[f64], targets: &[f64], batch: usize) -> Result<(f64, Vec<u32>)> {
        let cache = self.forward_train(x, batch)?;
        Ok((mse_loss(&cache.output, targets, batch).0, self.activation_pattern(&cache)))
    }
}

impl<T: Real> Network<T> {
    /// Pooling argmax and ReLU state of every unit in a training pass.
    pub fn activation_pattern(&self, cache: &ForwardCache<T>) -> Vec<u32> {
        let mut pat = Vec::new();
        for (s, sc) in self.stages.iter().zip(&cache.stages) {
            let plane = s.conv_side() * s.conv_side();
            let ps2 = s.out_side() * s.out_side();
            for (q, &at) in sc.argmax.iter().enumerate() {
                let c = (q / ps2) % s.out_channels;
                let b = q / s.out_len();
                let y = s.gamma[c] * sc.xhat[(b * s.out_channels + c) * plane + at as usize] + s.beta[c];
                pat.push(2 * at + u32::from(y > T::zero()));
            }
        }
        for (d, dc) in self.dense.iter().zip(&cache.dense) {
            if d.relu {
                pat.extend(dc.output.iter().map(|&o| u32::from(o > T::zero())));
            }
        }
        pat
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Network<f64> {
        Network::new(&Architecture::new(10, &[2, 3], &[5]).unwrap(), 3).unwrap()
    }

    #[test]
    fn parameter_bookkeeping() {
        let net = tiny();
        assert_eq!(net.params().len(), net.param_names().len());
        assert_eq!(net.parameter_count(), net.arch.parameter_count());
        for (p, s) in net.params().iter().zip(net.param_shapes()) {
            assert_eq!(p.len(), s.iter().product::<usize>());
        }
    }

    #[test]
    fn pooling_picks_window_maximum() {
        let y = [1.0, -2.0, 5.0, 0.5, 3.0, 4.0, -1.0, 7.0, 0.0, -3.0, -2.0, -1.0, 9.0, 8.0, -4.0, -6.0];
        let mut out = [0.0; 4];
        let mut arg = [0u32; 4];
        relu_pool(&y, 4, &mut out, Some(&mut arg));
        assert_eq!(out, [4.0, 7.0, 9.0, 0.0]);
        assert_eq!(arg, [5, 7, 12, 11]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let side = 5;
        let x: Vec<f64> = (0..2 * side * side).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..3 * 2 * 9).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut out = vec![0.0; 3 * 9];
        conv_forward(&x, &w, 2, 3, side, &mut out);
        for o in 0..3 {
            for y in 0..3 {
                for xx in 0..3 {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                s += w[((o * 2 + c) * 3 + ky) * 3 + kx] * x[c * 25 + (y + ky) * side + xx + kx];
                            }
                        }
                    }
                    assert!((out[o * 9 + y * 3 + xx] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn running_moments_follow_momentum() {
        let mut net = tiny();
        let x: Vec<f64> = (0..2 * 400).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        let cache = net.forward_train(&x, 2).unwrap();
        net.update_running(&cache);
        let n = (2 * 8 * 8) as f64;
        let s = &net.stages[0];
        for c in 0..2 {
            assert!((s.running_mean[c] - 0.1 * cache.stages[0].mean[c]).abs() < 1e-15);
            assert!((s.running_var[c] - (0.9 + 0.1 * cache.stages[0].var[c] * n / (n - 1.0))).abs() < 1e-14);
        }
    }
}
