//! Reverse-mode differentiation over a linear tape of image operations.
//!
//! Every forward pass records its intermediate values on a [`Tape`]. Parameters
//! enter as leaves; a leaf created with `requires_grad = false` never receives a
//! gradient, which is how frozen networks are kept out of an update while still
//! passing gradients through to their inputs.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Index of a value on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec, cols: Option<Vec<T>> },
    InstanceNorm { x: Var, inv_std: Vec<T> },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: T },
    Tanh { x: Var },
    Add { a: Var, b: Var },
    Upsample2x { x: Var },
    Concat { a: Var, b: Var },
    /// Scalar whose partial derivatives were computed during the forward pass.
    Fused { inputs: Vec<(Var, Tensor<T>)> },
    /// Weighted sum of scalar nodes.
    LinComb { terms: Vec<(Var, T)> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`]. `None` means the value did not
/// influence the loss or did not require a gradient.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub(crate) fn conv_out(size: usize, k: usize, spec: ConvSpec) -> Option<usize> {
    let padded = size + 2 * spec.pad;
    if padded < k || spec.stride == 0 {
        return None;
    }
    Some((padded - k) / spec.stride + 1)
}

/// Output columns `[lo, hi)` whose input column `ox * stride + off` lies in `[0, w)`.
fn valid_range(off: isize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    let last = w as isize - 1 - off;
    let hi = if last < 0 { 0 } else { ((last / s) as usize + 1).min(wo) };
    (lo.min(wo), hi.max(lo.min(wo)))
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: ConvSpec,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let s = spec.stride;
    let p = spec.pad as isize;
    let plane = ho * wo;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let off = kj as isize - p;
                let (lo, hi) = valid_range(off, s, w, wo);
                for oy in 0..ho {
                    let iy = (oy * s) as isize + ki as isize - p;
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let line = &src[iy as usize * w..(iy as usize + 1) * w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    if hi > lo {
                        let start = (lo as isize * s as isize + off) as usize;
                        if s == 1 {
                            out[lo..hi].copy_from_slice(&line[start..start + hi - lo]);
                        } else {
                            for (v, &xv) in out[lo..hi].iter_mut().zip(line[start..].iter().step_by(s)) {
                                *v = xv;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: ConvSpec,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let s = spec.stride;
    let p = spec.pad as isize;
    let plane = ho * wo;
    for ci in 0..c {
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let off = kj as isize - p;
                let (lo, hi) = valid_range(off, s, w, wo);
                if hi == lo {
                    continue;
                }
                let start = (lo as isize * s as isize + off) as usize;
                for oy in 0..ho {
                    let iy = (oy * s) as isize + ki as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let g = &src[oy * wo + lo..oy * wo + hi];
                    if s == 1 {
                        for (d, &v) in line[start..start + hi - lo].iter_mut().zip(g) {
                            *d = *d + v;
                        }
                    } else {
                        for (d, &v) in line[start..].iter_mut().step_by(s).zip(g) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// 2D convolution with zero padding. `x: [N, Cin, H, W]`, `w: [Cout, Cin, K, K]`,
    /// optional `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let (cout, wcin, k, k2) = self.value(w).dims4();
        assert_eq!(cin, wcin, "conv2d: input has {cin} channels, kernel expects {wcin}");
        assert_eq!(k, k2, "conv2d: square kernels only");
        let ho = conv_out(h, k, spec).expect("conv2d: input smaller than kernel");
        let wo = conv_out(wd, k, spec).expect("conv2d: input smaller than kernel");
        let kk = cin * k * k;
        let plane = ho * wo;
        let keep_cols = self.requires_grad(w);
        let mut cols_all = if keep_cols { Vec::with_capacity(n * kk * plane) } else { Vec::new() };
        let mut cols = vec![T::zero(); kk * plane];
        let mut out = vec![T::zero(); n * cout * plane];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for ni in 0..n {
                im2col(&xv[ni * cin * h * wd..(ni + 1) * cin * h * wd], cin, h, wd, k, spec, ho, wo, &mut cols);
                let dst = &mut out[ni * cout * plane..(ni + 1) * cout * plane];
                if let Some(b) = b {
                    let bv = self.value(b).data();
                    for co in 0..cout {
                        dst[co * plane..(co + 1) * plane].iter_mut().for_each(|v| *v = bv[co]);
                    }
                }
                T::gemm(
                    cout,
                    kk,
                    plane,
                    T::one(),
                    wv,
                    (kk as isize, 1),
                    &cols,
                    (plane as isize, 1),
                    if b.is_some() { T::one() } else { T::zero() },
                    dst,
                    (plane as isize, 1),
                );
                if keep_cols {
                    cols_all.extend_from_slice(&cols);
                }
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(w) || b.is_some_and(|b| self.requires_grad(b));
        let value = Tensor::from_vec(&[n, cout, ho, wo], out);
        self.push(value, Op::Conv2d { x, w, b, spec, cols: keep_cols.then_some(cols_all) }, rg)
    }

    /// Per-sample, per-channel normalization without affine parameters.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let eps: f64 = 1e-5;
        let (n, c, h, w) = self.value(x).dims4();
        let plane = h * w;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(n * c);
        for (src, dst) in xv.chunks(plane).zip(out.chunks_mut(plane)) {
            let mean = src.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / plane as f64;
            let var = src.iter().map(|v| (v.to_f64_lossy() - mean).powi(2)).sum::<f64>() / plane as f64;
            let is = 1.0 / (var + eps).sqrt();
            let (mean_t, is_t): (T, T) = (cast(mean), cast(is));
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean_t) * is_t;
            }
            inv_std.push(is_t);
        }
        let rg = self.requires_grad(x);
        self.push(Tensor::from_vec(&[n, c, h, w], out), Op::InstanceNorm { x, inv_std }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.requires_grad(x);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope: T = cast(slope);
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        let rg = self.requires_grad(x);
        self.push(value, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        let rg = self.requires_grad(x);
        self.push(value, Op::Tanh { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, Op::Add { a, b }, rg)
    }

    /// Nearest-neighbour upsampling by a factor of two.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for (src, dst) in xv.chunks(h * w).zip(out.chunks_mut(4 * h * w)) {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push(Tensor::from_vec(&[n, c, 2 * h, 2 * w], out), Op::Upsample2x { x }, rg)
    }

    /// Channel concatenation of two `[N, C, H, W]` tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat_channels: spatial/batch mismatch");
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for ni in 0..n {
            out.extend_from_slice(&self.value(a).data()[ni * ca * plane..(ni + 1) * ca * plane]);
            out.extend_from_slice(&self.value(b).data()[ni * cb * plane..(ni + 1) * cb * plane]);
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(Tensor::from_vec(&[n, ca + cb, h, w], out), Op::Concat { a, b }, rg)
    }

    /// Records a scalar loss whose partial derivatives w.r.t. `inputs` are
    /// already known. Each gradient tensor must match its input's shape.
    pub fn fused_scalar(&mut self, value: T, inputs: Vec<(Var, Tensor<T>)>) -> Var {
        for (v, g) in &inputs {
            assert_eq!(self.value(*v).shape(), g.shape(), "fused_scalar: gradient shape mismatch");
        }
        let rg = inputs.iter().any(|(v, _)| self.requires_grad(*v));
        self.push(Tensor::scalar(value), Op::Fused { inputs }, rg)
    }

    /// `sum_i weight_i * term_i` over scalar nodes.
    pub fn lincomb(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut total = 0.0f64;
        for &(v, wgt) in terms {
            total += wgt * self.value(v).item().to_f64_lossy();
        }
        let rg = terms.iter().any(|&(v, _)| self.requires_grad(v));
        let terms = terms.iter().map(|&(v, w)| (v, cast(w))).collect();
        self.push(Tensor::scalar(cast(total)), Op::LinComb { terms }, rg)
    }

    /// Hash of every rectifier's active set. Two evaluations with equal
    /// signatures lie on the same smooth piece of the network function.
    pub fn kink_signature(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        for node in &self.nodes {
            if let Op::Relu { x } | Op::LeakyRelu { x, .. } = node.op {
                for v in self.value(x).data() {
                    (*v > T::zero()).hash(&mut hasher);
                }
            }
        }
        hasher.finish()
    }

    /// Back-propagates from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward: loss must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, spec, cols } => self.conv_backward(&g, *x, *w, *b, *spec, cols.as_deref(), &mut grads),
                Op::InstanceNorm { x, inv_std } => {
                    if self.requires_grad(*x) {
                        let y = node.value.data();
                        let (_, _, h, w) = node.value.dims4();
                        let plane = h * w;
                        let mut dx = vec![T::zero(); y.len()];
                        for (idx, ((ys, gs), dxs)) in
                            y.chunks(plane).zip(g.data().chunks(plane)).zip(dx.chunks_mut(plane)).enumerate()
                        {
                            let mean_g = gs.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / plane as f64;
                            let mean_gy = gs
                                .iter()
                                .zip(ys)
                                .map(|(a, b)| a.to_f64_lossy() * b.to_f64_lossy())
                                .sum::<f64>()
                                / plane as f64;
                            let (mg, mgy): (T, T) = (cast(mean_g), cast(mean_gy));
                            let is = inv_std[idx];
                            for ((d, &gv), &yv) in dxs.iter_mut().zip(gs).zip(ys) {
                                *d = is * (gv - mg - yv * mgy);
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::from_vec(node.value.shape(), dx));
                    }
                }
                Op::Relu { x } => {
                    if self.requires_grad(*x) {
                        let xv = self.value(*x).data();
                        let dx: Vec<T> =
                            g.data().iter().zip(xv).map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() }).collect();
                        accumulate(&mut grads, *x, Tensor::from_vec(g.shape(), dx));
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    if self.requires_grad(*x) {
                        let xv = self.value(*x).data();
                        let dx: Vec<T> =
                            g.data().iter().zip(xv).map(|(&gv, &v)| if v > T::zero() { gv } else { gv * *slope }).collect();
                        accumulate(&mut grads, *x, Tensor::from_vec(g.shape(), dx));
                    }
                }
                Op::Tanh { x } => {
                    if self.requires_grad(*x) {
                        let dx: Vec<T> = g
                            .data()
                            .iter()
                            .zip(node.value.data())
                            .map(|(&gv, &y)| gv * (T::one() - y * y))
                            .collect();
                        accumulate(&mut grads, *x, Tensor::from_vec(g.shape(), dx));
                    }
                }
                Op::Add { a, b } => {
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::Upsample2x { x } => {
                    if self.requires_grad(*x) {
                        let (n, c, h, w) = self.value(*x).dims4();
                        let mut dx = vec![T::zero(); n * c * h * w];
                        for (src, dst) in g.data().chunks(4 * h * w).zip(dx.chunks_mut(h * w)) {
                            for y in 0..2 * h {
                                for xx in 0..2 * w {
                                    let d = &mut dst[(y / 2) * w + xx / 2];
                                    *d = *d + src[y * 2 * w + xx];
                                }
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
                    }
                }
                Op::Concat { a, b } => {
                    let (n, ca, h, w) = self.value(*a).dims4();
                    let cb = self.value(*b).dims4().1;
                    let plane = h * w;
                    let gd = g.data();
                    let split = |off: usize, cn: usize| {
                        let mut out = Vec::with_capacity(n * cn * plane);
                        for ni in 0..n {
                            let base = ni * (ca + cb) * plane + off * plane;
                            out.extend_from_slice(&gd[base..base + cn * plane]);
                        }
                        Tensor::from_vec(&[n, cn, h, w], out)
                    };
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, split(0, ca));
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, split(ca, cb));
                    }
                }
                Op::Fused { inputs } => {
                    let s = g.item();
                    for (v, local) in inputs {
                        if self.requires_grad(*v) {
                            accumulate(&mut grads, *v, local.map(|d| d * s));
                        }
                    }
                }
                Op::LinComb { terms } => {
                    let s = g.item();
                    for &(v, wgt) in terms {
                        if self.requires_grad(v) {
                            accumulate(&mut grads, v, Tensor::scalar(s * wgt));
                        }
                    }
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        // Only leaves keep their gradient; intermediate buffers were consumed.
        Grads { grads }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        g: &Tensor<T>,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
        cols: Option<&[T]>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (n, cin, h, wd) = self.value(x).dims4();
        let (cout, _, k, _) = self.value(w).dims4();
        let (_, _, ho, wo) = g.dims4();
        let plane = ho * wo;
        let kk = cin * k * k;
        let gd = g.data();

        if let Some(b) = b {
            if self.requires_grad(b) {
                let mut db = vec![T::zero(); cout];
                for ni in 0..n {
                    for (co, d) in db.iter_mut().enumerate() {
                        let base = (ni * cout + co) * plane;
                        *d = *d + gd[base..base + plane].iter().copied().sum::<T>();
                    }
                }
                accumulate(grads, b, Tensor::from_vec(&[cout], db));
            }
        }
        if self.requires_grad(w) {
            let cols = cols.expect("conv2d columns retained for weight gradient");
            let mut dw = vec![T::zero(); cout * kk];
            for ni in 0..n {
                T::gemm(
                    cout,
                    plane,
                    kk,
                    T::one(),
                    &gd[ni * cout * plane..(ni + 1) * cout * plane],
                    (plane as isize, 1),
                    &cols[ni * kk * plane..(ni + 1) * kk * plane],
                    (1, plane as isize),
                    T::one(),
                    &mut dw,
                    (kk as isize, 1),
                );
            }
            accumulate(grads, w, Tensor::from_vec(self.value(w).shape(), dw));
        }
        if self.requires_grad(x) {
            let wv = self.value(w).data();
            let mut dcol = vec![T::zero(); kk * plane];
            let mut dx = vec![T::zero(); n * cin * h * wd];
            for ni in 0..n {
                T::gemm(
                    kk,
                    cout,
                    plane,
                    T::one(),
                    wv,
                    (1, kk as isize),
                    &gd[ni * cout * plane..(ni + 1) * cout * plane],
                    (plane as isize, 1),
                    T::zero(),
                    &mut dcol,
                    (plane as isize, 1),
                );
                col2im(&dcol, cin, h, wd, k, spec, ho, wo, &mut dx[ni * cin * h * wd..(ni + 1) * cin * h * wd]);
            }
            accumulate(grads, x, Tensor::from_vec(&[n, cin, h, wd], dx));
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Weighted sum of the output with fixed random weights, as a fused scalar.
    fn probe(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Var {
        let val: f64 = tape.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        tape.fused_scalar(val, vec![(out, weights.clone())])
    }

    fn check<F>(shapes: &[Vec<usize>], build: F)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        let eval = |inputs: &[Tensor<f64>], probe_w: &Tensor<f64>| -> (f64, Vec<Tensor<f64>>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let out = build(&mut tape, &vars);
            let loss = probe(&mut tape, out, probe_w);
            let mut g = tape.backward(loss);
            let gs = vars.iter().map(|&v| g.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))).collect();
            (tape.value(loss).item(), gs)
        };
        let out_shape = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let out = build(&mut tape, &vars);
            tape.value(out).shape().to_vec()
        };
        let probe_w = random(&out_shape, &mut rng);
        let (_, analytic) = eval(&inputs, &probe_w);
        let h = 1e-6;
        for (ii, input) in inputs.iter().enumerate() {
            for j in 0..input.len() {
                let mut plus = inputs.clone();
                plus[ii].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[ii].data_mut()[j] -= h;
                let numeric = (eval(&plus, &probe_w).0 - eval(&minus, &probe_w).0) / (2.0 * h);
                let a = analytic[ii].data()[j];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "input {ii} elem {j}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 3)] {
            check(&[vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]], |t, v| {
                t.conv2d(v[0], v[1], Some(v[2]), ConvSpec { stride, pad })
            });
        }
    }

    #[test]
    fn instance_norm_gradients() {
        check(&[vec![2, 3, 3, 4]], |t, v| t.instance_norm(v[0]));
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        check(&[vec![1, 2, 3, 3], vec![1, 1, 3, 3]], |t, v| {
            let a = t.tanh(v[0]);
            let b = t.upsample2x(v[1]);
            let b = t.leaky_relu(b, 0.2);
            let a2 = t.upsample2x(a);
            let c = t.concat_channels(a2, b);
            let d = t.add(c, c);
            t.relu(d)
        });
    }

    #[test]
    fn frozen_leaf_gets_no_gradient_but_passes_it_on() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 3, 3], 0.5), true);
        let w = tape.leaf(Tensor::full(&[1, 1, 3, 3], 0.1), false);
        let y = tape.conv2d(x, w, None, ConvSpec { stride: 1, pad: 1 });
        let ones = Tensor::full(tape.value(y).shape(), 1.0);
        let s: f64 = tape.value(y).data().iter().sum();
        let loss = tape.fused_scalar(s, vec![(y, ones)]);
        let g = tape.backward(loss);
        assert!(g.get(w).is_none());
        assert!(g.get(x).is_some());
    }

    #[test]
    fn conv_output_size() {
        let s2 = ConvSpec { stride: 2, pad: 1 };
        assert_eq!(conv_out(64, 4, s2), Some(32));
        assert_eq!(conv_out(8, 4, ConvSpec { stride: 1, pad: 1 }), Some(7));
        assert_eq!(conv_out(1, 4, ConvSpec { stride: 1, pad: 1 }), None);
    }
}
