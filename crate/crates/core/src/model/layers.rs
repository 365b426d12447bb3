//! Volumetric layers over NCDHW tensors with hand-written backward passes.
//!
//! `forward` caches whatever `backward` needs; `infer` is the cache-free
//! evaluation path usable through a shared reference.

use rayon::prelude::*;

use crate::rng::{hash_str, SeededRng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in norm layers; running statistics are updated.
    Train,
    /// Running statistics; gradients still flow.
    Eval,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    fn new(shape: Vec<usize>, value: Vec<f64>) -> Self {
        let n = value.len();
        Self { shape, value, grad: vec![0.0; n] }
    }

    fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n])
    }
}

/// Receives every trainable parameter and persistent buffer by dotted name.
pub trait StateVisitor {
    fn param(&mut self, name: &str, p: &mut Param);
    fn buffer(&mut self, name: &str, shape: &[usize], data: &mut [f64]);
}

pub trait Layer: Send + Sync {
    fn forward(&mut self, x: Tensor, mode: Mode) -> Tensor;
    fn infer(&self, x: Tensor) -> Tensor;
    fn backward(&mut self, grad: Tensor) -> Tensor;
    fn visit(&mut self, _prefix: &str, _v: &mut dyn StateVisitor) {}
    fn clone_box(&self) -> Box<dyn Layer>;
    /// Folds the piecewise-linear state of the last `forward` (relu masks,
    /// pool winners) into `h`.
    fn fold_pattern(&self, _h: &mut u64) {}
}

pub(crate) fn fold(h: &mut u64, v: u64) {
    *h = (*h ^ v).wrapping_mul(0x0100_0000_01b3);
}

impl Clone for Box<dyn Layer> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn spatial(shape: &[usize]) -> [usize; 3] {
    [shape[2], shape[3], shape[4]]
}

fn rng_for(seed: u64, name: &str) -> SeededRng {
    SeededRng::derived(seed, &[hash_str(name)])
}

/// Named layers applied in order.
#[derive(Clone, Default)]
pub struct Sequential {
    pub layers: Vec<(String, Box<dyn Layer>)>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, layer: impl Layer + 'static) {
        self.layers.push((name.into(), Box::new(layer)));
    }
}

impl Layer for Sequential {
    fn forward(&mut self, mut x: Tensor, mode: Mode) -> Tensor {
        for (_, l) in &mut self.layers {
            x = l.forward(x, mode);
        }
        x
    }

    fn infer(&self, mut x: Tensor) -> Tensor {
        for (_, l) in &self.layers {
            x = l.infer(x);
        }
        x
    }

    fn backward(&mut self, mut g: Tensor) -> Tensor {
        for (_, l) in self.layers.iter_mut().rev() {
            g = l.backward(g);
        }
        g
    }

    fn visit(&mut self, prefix: &str, v: &mut dyn StateVisitor) {
        for (name, l) in &mut self.layers {
            l.visit(&join(prefix, name), v);
        }
    }

    fn fold_pattern(&self, h: &mut u64) {
        for (_, l) in &self.layers {
            l.fold_pattern(h);
        }
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

/// Per-axis kernel/stride/padding of a window operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Window {
    pub fn cube(k: usize, s: usize, p: usize) -> Self {
        Self {
            kernel: [k; 3],
            stride: [s; 3],
            padding: [p; 3],
        }
    }

    /// Output extent, or `None` if the window does not fit.
    pub fn out_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * self.padding[a];
            if span < self.kernel[a] {
                return None;
            }
            out[a] = (span - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }
}

const IM2COL_CHUNK: usize = 1 << 21;

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    input: [usize; 3],
    win: Window,
    out: [usize; 3],
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.win.kernel.iter().product::<usize>()
    }

    fn plane(&self) -> usize {
        self.out[1] * self.out[2]
    }

    fn positions(&self) -> usize {
        self.out.iter().product()
    }

    fn pointwise(&self) -> bool {
        self.win == Window::cube(1, 1, 0)
    }

    /// Output z-plane ranges so each im2col buffer stays bounded.
    fn chunks(&self) -> Vec<(usize, usize)> {
        let per = (IM2COL_CHUNK / (self.k() * self.plane()).max(1)).max(1);
        (0..self.out[0]).step_by(per).map(|z0| (z0, (z0 + per).min(self.out[0]))).collect()
    }

    fn im2col(&self, x: &[f64], z0: usize, z1: usize, cols: &mut [f64]) {
        let [d, h, w] = self.input;
        let [kd, kh, kw] = self.win.kernel;
        let [sd, sh, sw] = self.win.stride;
        let [pd, ph, pw] = self.win.padding;
        let [_, oh, ow] = self.out;
        let np = (z1 - z0) * oh * ow;
        let mut r = 0;
        for c in 0..self.cin {
            let xc = &x[c * d * h * w..(c + 1) * d * h * w];
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let row = &mut cols[r * np..(r + 1) * np];
                        let mut q = 0;
                        for oz in z0..z1 {
                            let iz = (oz * sd + kz) as isize - pd as isize;
                            if iz < 0 || iz >= d as isize {
                                row[q..q + oh * ow].fill(0.0);
                                q += oh * ow;
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * sh + ky) as isize - ph as isize;
                                if iy < 0 || iy >= h as isize {
                                    row[q..q + ow].fill(0.0);
                                    q += ow;
                                    continue;
                                }
                                let base = (iz as usize * h + iy as usize) * w;
                                for ox in 0..ow {
                                    let ix = (ox * sw + kx) as isize - pw as isize;
                                    row[q] = if ix < 0 || ix >= w as isize { 0.0 } else { xc[base + ix as usize] };
                                    q += 1;
                                }
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], z0: usize, z1: usize, dx: &mut [f64]) {
        let [d, h, w] = self.input;
        let [kd, kh, kw] = self.win.kernel;
        let [sd, sh, sw] = self.win.stride;
        let [pd, ph, pw] = self.win.padding;
        let [_, oh, ow] = self.out;
        let np = (z1 - z0) * oh * ow;
        let mut r = 0;
        for c in 0..self.cin {
            let xc = &mut dx[c * d * h * w..(c + 1) * d * h * w];
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let row = &cols[r * np..(r + 1) * np];
                        let mut q = 0;
                        for oz in z0..z1 {
                            let iz = (oz * sd + kz) as isize - pd as isize;
                            if iz < 0 || iz >= d as isize {
                                q += oh * ow;
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * sh + ky) as isize - ph as isize;
                                if iy < 0 || iy >= h as isize {
                                    q += ow;
                                    continue;
                                }
                                let base = (iz as usize * h + iy as usize) * w;
                                for ox in 0..ow {
                                    let ix = (ox * sw + kx) as isize - pw as isize;
                                    if ix >= 0 && ix < w as isize {
                                        xc[base + ix as usize] += row[q];
                                    }
                                    q += 1;
                                }
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
    }
}

/// `c[m×n] = alpha * a[m×k] · b[k×n] + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // Bounds of the strided views, checked before the raw call.
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + n - 1 < c.len());
    // SAFETY: the asserts above keep every accessed element in bounds and
    // `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

#[derive(Clone)]
pub struct Conv3d {
    pub weight: Param,
    pub bias: Option<Param>,
    cin: usize,
    cout: usize,
    win: Window,
    /// The stem has no upstream layer, so its input gradient is skipped.
    pub input_grad: bool,
    cache: Option<Tensor>,
}

impl Conv3d {
    /// He-normal weights, `std = sqrt(2 / fan_in)`; zero bias.
    pub fn new(cin: usize, cout: usize, win: Window, bias: bool, seed: u64, name: &str) -> Self {
        let fan_in = cin * win.kernel.iter().product::<usize>();
        let std = (2.0 / fan_in as f64).sqrt();
        let mut rng = rng_for(seed, name);
        let w = (0..cout * fan_in).map(|_| rng.normal() * std).collect();
        let mut shape = vec![cout, cin];
        shape.extend(win.kernel);
        Self {
            weight: Param::new(shape, w),
            bias: bias.then(|| Param::zeros(vec![cout])),
            cin,
            cout,
            win,
            input_grad: true,
            cache: None,
        }
    }

    fn geom(&self, x: &Tensor) -> ConvGeom {
        let s = x.shape();
        assert_eq!(s.len(), 5, "conv3d expects NCDHW input");
        assert_eq!(s[1], self.cin, "conv3d channel mismatch");
        let input = spatial(s);
        let out = self.win.out_dims(input).expect("conv window larger than padded input");
        ConvGeom {
            cin: self.cin,
            input,
            win: self.win,
            out,
        }
    }

    fn sample_forward(&self, g: &ConvGeom, x: &[f64]) -> Vec<f64> {
        let p = g.positions();
        let k = g.k();
        let mut out = vec![0.0; self.cout * p];
        let w = &self.weight.value;
        if g.pointwise() {
            gemm(self.cout, k, p, w, (k, 1), x, (p, 1), 0.0, &mut out, p);
        } else {
            let mut cols = Vec::new();
            for (z0, z1) in g.chunks() {
                let np = (z1 - z0) * g.plane();
                cols.resize(k * np, 0.0);
                g.im2col(x, z0, z1, &mut cols);
                gemm(self.cout, k, np, w, (k, 1), &cols, (np, 1), 0.0, &mut out[z0 * g.plane()..], p);
            }
        }
        if let Some(b) = &self.bias {
            for (o, &bv) in out.chunks_mut(p).zip(&b.value) {
                o.iter_mut().for_each(|v| *v += bv);
            }
        }
        out
    }

    /// Returns (dx, dW, db) for one sample.
    fn sample_backward(&self, g: &ConvGeom, x: &[f64], dy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let p = g.positions();
        let k = g.k();
        let w = &self.weight.value;
        let mut dw = vec![0.0; self.cout * k];
        let mut dx = if self.input_grad { vec![0.0; x.len()] } else { Vec::new() };
        if g.pointwise() {
            gemm(self.cout, p, k, dy, (p, 1), x, (1, p), 0.0, &mut dw, k);
            if self.input_grad {
                gemm(k, self.cout, p, w, (1, k), dy, (p, 1), 0.0, &mut dx, p);
            }
        } else {
            let mut cols = Vec::new();
            let mut dcols = Vec::new();
            for (z0, z1) in g.chunks() {
                let np = (z1 - z0) * g.plane();
                let off = z0 * g.plane();
                cols.resize(k * np, 0.0);
                g.im2col(x, z0, z1, &mut cols);
                gemm(self.cout, np, k, &dy[off..], (p, 1), &cols, (1, np), 1.0, &mut dw, k);
                if self.input_grad {
                    dcols.resize(k * np, 0.0);
                    gemm(k, self.cout, np, w, (1, k), &dy[off..], (p, 1), 0.0, &mut dcols, np);
                    g.col2im(&dcols, z0, z1, &mut dx);
                }
            }
        }
        let db = if self.bias.is_some() {
            dy.chunks(p).map(|c| c.iter().sum()).collect()
        } else {
            Vec::new()
        };
        (dx, dw, db)
    }

    fn run(&self, x: &Tensor) -> Tensor {
        let g = self.geom(x);
        let n = x.shape()[0];
        let per = x.len() / n.max(1);
        let outs: Vec<Vec<f64>> = x
            .data()
            .par_chunks(per.max(1))
            .map(|xs| self.sample_forward(&g, xs))
            .collect();
        let mut shape = vec![n, self.cout];
        shape.extend(g.out);
        Tensor::new(shape, outs.concat())
    }
}

impl Layer for Conv3d {
    fn forward(&mut self, x: Tensor, _mode: Mode) -> Tensor {
        let y = self.run(&x);
        self.cache = Some(x);
        y
    }

    fn infer(&self, x: Tensor) -> Tensor {
        self.run(&x)
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let x = self.cache.take().expect("conv3d backward without forward");
        let g = self.geom(&x);
        let n = x.shape()[0];
        let per_x = x.len() / n;
        let per_y = grad.len() / n;
        let parts: Vec<_> = x
            .data()
            .par_chunks(per_x)
            .zip(grad.data().par_chunks(per_y))
            .map(|(xs, dys)| self.sample_backward(&g, xs, dys))
            .collect();
        let mut dx = Vec::with_capacity(if self.input_grad { x.len() } else { 0 });
        for (dxs, dw, db) in parts {
            dx.extend(dxs);
            for (a, b) in self.weight.grad.iter_mut().zip(&dw) {
                *a += b;
            }
            if let Some(bias) = &mut self.bias {
                for (a, b) in bias.grad.iter_mut().zip(&db) {
                    *a += b;
                }
            }
        }
        if self.input_grad {
            Tensor::new(x.shape().to_vec(), dx)
        } else {
            Tensor::zeros(vec![0])
        }
    }

    fn visit(&mut self, prefix: &str, v: &mut dyn StateVisitor) {
        v.param(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            v.param(&join(prefix, "bias"), b);
        }
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(Self { cache: None, ..self.clone() })
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone)]
struct BnCache {
    xhat: Vec<f64>,
    invstd: Vec<f64>,
    batch_stats: bool,
}

#[derive(Clone)]
pub struct BatchNorm3d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    channels: usize,
    cache: Option<BnCache>,
}

impl BatchNorm3d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(vec![channels], 1.0),
            beta: Param::zeros(vec![channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            channels,
            cache: None,
        }
    }

    fn dims(&self, x: &Tensor) -> (usize, usize) {
        let s = x.shape();
        assert_eq!(s[1], self.channels, "batchnorm channel mismatch");
        (s[0], s[2..].iter().product())
    }

    /// Per-channel (mean, biased var) over batch and space.
    fn batch_stats(&self, x: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let (n, sp) = self.dims(x);
        let c = self.channels;
        let m = (n * sp) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (ch, (mu, va)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
            let vals = || (0..n).flat_map(move |i| x.data()[(i * c + ch) * sp..(i * c + ch + 1) * sp].iter());
            *mu = vals().sum::<f64>() / m;
            *va = vals().map(|v| (v - *mu) * (v - *mu)).sum::<f64>() / m;
        }
        (mean, var)
    }

    fn apply(&self, x: &mut Tensor, mean: &[f64], invstd: &[f64], keep_xhat: bool) -> Vec<f64> {
        let (n, sp) = self.dims(x);
        let c = self.channels;
        let mut xhat = if keep_xhat { vec![0.0; x.len()] } else { Vec::new() };
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * sp..(i * c + ch + 1) * sp;
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                for j in r {
                    let h = (x.data()[j] - mean[ch]) * invstd[ch];
                    if keep_xhat {
                        xhat[j] = h;
                    }
                    x.data_mut()[j] = g * h + b;
                }
            }
        }
        xhat
    }
}

impl Layer for BatchNorm3d {
    fn forward(&mut self, mut x: Tensor, mode: Mode) -> Tensor {
        let (mean, invstd, batch_stats) = match mode {
            Mode::Train => {
                let (n, sp) = self.dims(&x);
                let m = (n * sp) as f64;
                let (mean, var) = self.batch_stats(&x);
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                for ch in 0..self.channels {
                    self.running_mean[ch] = (1.0 - BN_MOMENTUM) * self.running_mean[ch] + BN_MOMENTUM * mean[ch];
                    self.running_var[ch] =
                        (1.0 - BN_MOMENTUM) * self.running_var[ch] + BN_MOMENTUM * var[ch] * unbias;
                }
                let invstd = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect::<Vec<_>>();
                (mean, invstd, true)
            }
            Mode::Eval => {
                let invstd = self.running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                (self.running_mean.clone(), invstd, false)
            }
        };
        let xhat = self.apply(&mut x, &mean, &invstd, true);
        self.cache = Some(BnCache { xhat, invstd, batch_stats });
        x
    }

    fn infer(&self, mut x: Tensor) -> Tensor {
        let invstd: Vec<f64> = self.running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        self.apply(&mut x, &self.running_mean, &invstd, false);
        x
    }

    fn backward(&mut self, mut grad: Tensor) -> Tensor {
        let cache = self.cache.take().expect("batchnorm backward without forward");
        let (n, sp) = self.dims(&grad);
        let c = self.channels;
        let m = (n * sp) as f64;
        for ch in 0..c {
            let idx = || (0..n).flat_map(move |i| (i * c + ch) * sp..(i * c + ch + 1) * sp);
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for j in idx() {
                sum_dy += grad.data()[j];
                sum_dy_xhat += grad.data()[j] * cache.xhat[j];
            }
            self.beta.grad[ch] += sum_dy;
            self.gamma.grad[ch] += sum_dy_xhat;
            let k = self.gamma.value[ch] * cache.invstd[ch];
            let d = grad.data_mut();
            if cache.batch_stats {
                for j in idx() {
                    d[j] = k * (d[j] - sum_dy / m - cache.xhat[j] * sum_dy_xhat / m);
                }
            } else {
                for j in idx() {
                    d[j] *= k;
                }
            }
        }
        grad
    }

    fn visit(&mut self, prefix: &str, v: &mut dyn StateVisitor) {
        v.param(&join(prefix, "weight"), &mut self.gamma);
        v.param(&join(prefix, "bias"), &mut self.beta);
        let c = [self.channels];
        v.buffer(&join(prefix, "running_mean"), &c, &mut self.running_mean);
        v.buffer(&join(prefix, "running_var"), &c, &mut self.running_var);
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(Self { cache: None, ..self.clone() })
    }
}

#[derive(Clone, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Layer for Relu {
    fn forward(&mut self, mut x: Tensor, _mode: Mode) -> Tensor {
        self.mask = x.data().iter().map(|&v| v > 0.0).collect();
        x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        x
    }

    fn infer(&self, mut x: Tensor) -> Tensor {
        x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        x
    }

    fn backward(&mut self, mut grad: Tensor) -> Tensor {
        for (g, &m) in grad.data_mut().iter_mut().zip(&self.mask) {
            if !m {
                *g = 0.0;
            }
        }
        grad
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(Relu::default())
    }

    fn fold_pattern(&self, h: &mut u64) {
        for &m in &self.mask {
            fold(h, m as u64);
        }
    }
}

/// Max pooling; padded positions never win.
#[derive(Clone)]
pub struct MaxPool3d {
    win: Window,
    argmax: Vec<usize>,
    in_shape: Vec<usize>,
}

impl MaxPool3d {
    pub fn new(win: Window) -> Self {
        Self {
            win,
            argmax: Vec::new(),
            in_shape: Vec::new(),
        }
    }

    fn run(&self, x: &Tensor, keep: bool) -> (Tensor, Vec<usize>) {
        let s = x.shape();
        let (n, c) = (s[0], s[1]);
        let [d, h, w] = spatial(s);
        let out = self.win.out_dims([d, h, w]).expect("pool window larger than input");
        let [od, oh, ow] = out;
        let vol = d * h * w;
        let ovol = od * oh * ow;
        let mut y = vec![0.0; n * c * ovol];
        let mut arg = if keep { vec![0; y.len()] } else { Vec::new() };
        let [kd, kh, kw] = self.win.kernel;
        let [sd, sh, sw] = self.win.stride;
        let [pd, ph, pw] = self.win.padding;
        for plane in 0..n * c {
            let xs = &x.data()[plane * vol..(plane + 1) * vol];
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut bi = 0;
                        for kz in 0..kd {
                            let iz = (oz * sd + kz) as isize - pd as isize;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for ky in 0..kh {
                                let iy = (oy * sh + ky) as isize - ph as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * sw + kx) as isize - pw as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let i = (iz as usize * h + iy as usize) * w + ix as usize;
                                    if xs[i] > best {
                                        best = xs[i];
                                        bi = i;
                                    }
                                }
                            }
                        }
                        let o = plane * ovol + (oz * oh + oy) * ow + ox;
                        y[o] = best;
                        if keep {
                            arg[o] = plane * vol + bi;
                        }
                    }
                }
            }
        }
        let mut shape = vec![n, c];
        shape.extend(out);
        (Tensor::new(shape, y), arg)
    }
}

impl Layer for MaxPool3d {
    fn forward(&mut self, x: Tensor, _mode: Mode) -> Tensor {
        let (y, arg) = self.run(&x, true);
        self.argmax = arg;
        self.in_shape = x.shape().to_vec();
        y
    }

    fn infer(&self, x: Tensor) -> Tensor {
        self.run(&x, false).0
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let mut dx = Tensor::zeros(self.in_shape.clone());
        for (g, &i) in grad.data().iter().zip(&self.argmax) {
            dx.data_mut()[i] += g;
        }
        dx
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(MaxPool3d::new(self.win))
    }

    fn fold_pattern(&self, h: &mut u64) {
        for &i in &self.argmax {
            fold(h, i as u64);
        }
    }
}

/// Non-overlapping average pooling (stride = kernel, no padding).
#[derive(Clone)]
pub struct AvgPool3d {
    kernel: [usize; 3],
    in_shape: Vec<usize>,
}

impl AvgPool3d {
    pub fn new(kernel: [usize; 3]) -> Self {
        Self {
            kernel,
            in_shape: Vec::new(),
        }
    }

    fn out_dims(&self, input: [usize; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| input[a] / self.kernel[a])
    }

    /// Calls `f(input_index, output_index)` for every covered pair.
    fn for_each_pair(&self, shape: &[usize], mut f: impl FnMut(usize, usize)) {
        let [d, h, w] = spatial(shape);
        let [od, oh, ow] = self.out_dims([d, h, w]);
        let [kd, kh, kw] = self.kernel;
        let planes = shape[0] * shape[1];
        for plane in 0..planes {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let o = plane * od * oh * ow + (oz * oh + oy) * ow + ox;
                        for kz in 0..kd {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let i = plane * d * h * w + ((oz * kd + kz) * h + oy * kh + ky) * w + ox * kw + kx;
                                    f(i, o);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn run(&self, x: &Tensor) -> Tensor {
        let s = x.shape();
        let out = self.out_dims(spatial(s));
        let mut shape = vec![s[0], s[1]];
        shape.extend(out);
        let mut y = Tensor::zeros(shape);
        let scale = 1.0 / self.kernel.iter().product::<usize>() as f64;
        let yd = y.data_mut();
        self.for_each_pair(s, |i, o| yd[o] += x.data()[i] * scale);
        y
    }
}

impl Layer for AvgPool3d {
    fn forward(&mut self, x: Tensor, _mode: Mode) -> Tensor {
        self.in_shape = x.shape().to_vec();
        self.run(&x)
    }

    fn infer(&self, x: Tensor) -> Tensor {
        self.run(&x)
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let mut dx = Tensor::zeros(self.in_shape.clone());
        let scale = 1.0 / self.kernel.iter().product::<usize>() as f64;
        let d = dx.data_mut();
        self.for_each_pair(&self.in_shape, |i, o| d[i] += grad.data()[o] * scale);
        dx
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(AvgPool3d::new(self.kernel))
    }
}

/// Mean over all spatial positions: (N, C, D, H, W) -> (N, C).
#[derive(Clone, Default)]
pub struct GlobalAvgPool {
    in_shape: Vec<usize>,
}

impl GlobalAvgPool {
    fn run(x: &Tensor) -> Tensor {
        let s = x.shape();
        let sp: usize = s[2..].iter().product();
        let data = x.data().chunks(sp).map(|c| c.iter().sum::<f64>() / sp as f64).collect();
        Tensor::new(vec![s[0], s[1]], data)
    }
}

impl Layer for GlobalAvgPool {
    fn forward(&mut self, x: Tensor, _mode: Mode) -> Tensor {
        self.in_shape = x.shape().to_vec();
        Self::run(&x)
    }

    fn infer(&self, x: Tensor) -> Tensor {
        Self::run(&x)
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let sp: usize = self.in_shape[2..].iter().product();
        let data = grad.data().iter().flat_map(|&g| std::iter::repeat_n(g / sp as f64, sp)).collect();
        Tensor::new(self.in_shape.clone(), data)
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(GlobalAvgPool::default())
    }
}

#[derive(Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    fin: usize,
    fout: usize,
    cache: Option<Tensor>,
}

impl Linear {
    /// Weights uniform in `±1/sqrt(fan_in)`; zero bias.
    pub fn new(fin: usize, fout: usize, seed: u64, name: &str) -> Self {
        let bound = 1.0 / (fin as f64).sqrt();
        let mut rng = rng_for(seed, name);
        let w = (0..fin * fout).map(|_| rng.range(-bound, bound)).collect();
        Self {
            weight: Param::new(vec![fout, fin], w),
            bias: Param::zeros(vec![fout]),
            fin,
            fout,
            cache: None,
        }
    }

    fn run(&self, x: &Tensor) -> Tensor {
        let n = x.shape()[0];
        assert_eq!(x.shape()[1], self.fin, "linear input width mismatch");
        let mut y = vec![0.0; n * self.fout];
        for yr in y.chunks_mut(self.fout) {
            yr.copy_from_slice(&self.bias.value);
        }
        gemm(n, self.fin, self.fout, x.data(), (self.fin, 1), &self.weight.value, (1, self.fin), 1.0, &mut y, self.fout);
        Tensor::new(vec![n, self.fout], y)
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: Tensor, _mode: Mode) -> Tensor {
        let y = self.run(&x);
        self.cache = Some(x);
        y
    }

    fn infer(&self, x: Tensor) -> Tensor {
        self.run(&x)
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let x = self.cache.take().expect("linear backward without forward");
        let n = x.shape()[0];
        gemm(self.fout, n, self.fin, grad.data(), (1, self.fout), x.data(), (self.fin, 1), 1.0, &mut self.weight.grad, self.fin);
        for row in grad.data().chunks(self.fout) {
            for (b, g) in self.bias.grad.iter_mut().zip(row) {
                *b += g;
            }
        }
        let mut dx = vec![0.0; n * self.fin];
        gemm(n, self.fout, self.fin, grad.data(), (self.fout, 1), &self.weight.value, (self.fin, 1), 0.0, &mut dx, self.fin);
        Tensor::new(vec![n, self.fin], dx)
    }

    fn visit(&mut self, prefix: &str, v: &mut dyn StateVisitor) {
        v.param(&join(prefix, "weight"), &mut self.weight);
        v.param(&join(prefix, "bias"), &mut self.bias);
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(Self { cache: None, ..self.clone() })
    }
}

/// Concatenates NCDHW tensors along channels.
pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
    let s0 = parts[0].shape();
    let n = s0[0];
    let sp: usize = s0[2..].iter().product();
    let ctot: usize = parts.iter().map(|t| t.shape()[1]).sum();
    let mut data = Vec::with_capacity(n * ctot * sp);
    for i in 0..n {
        for t in parts {
            let per = t.shape()[1] * sp;
            data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
        }
    }
    let mut shape = vec![n, ctot];
    shape.extend_from_slice(&s0[2..]);
    Tensor::new(shape, data)
}

/// Channel range `[c0, c1)` of an NCDHW tensor.
pub fn slice_channels(t: &Tensor, c0: usize, c1: usize) -> Tensor {
    let s = t.shape();
    let sp: usize = s[2..].iter().product();
    let mut data = Vec::with_capacity(s[0] * (c1 - c0) * sp);
    for i in 0..s[0] {
        data.extend_from_slice(&t.data()[(i * s[1] + c0) * sp..(i * s[1] + c1) * sp]);
    }
    let mut shape = vec![s[0], c1 - c0];
    shape.extend_from_slice(&s[2..]);
    Tensor::new(shape, data)
}

/// Adds `g` into channels `[c0, c0 + g.channels)` of `acc`.
pub fn add_into_channels(acc: &mut Tensor, g: &Tensor, c0: usize) {
    let (ca, cg) = (acc.shape()[1], g.shape()[1]);
    let sp: usize = acc.shape()[2..].iter().product();
    let n = acc.shape()[0];
    for i in 0..n {
        let dst = (i * ca + c0) * sp;
        let src = i * cg * sp;
        for (a, b) in acc.data_mut()[dst..dst + cg * sp].iter_mut().zip(&g.data()[src..src + cg * sp]) {
            *a += b;
        }
    }
}
