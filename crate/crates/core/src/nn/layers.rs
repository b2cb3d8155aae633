//! Layers with explicit forward caches and hand-derived backward passes.
//!
//! Every layer reads its weights from a flat parameter slice and accumulates
//! weight gradients into a flat gradient slice of the same layout. Linear
//! layers take a `with_bias` switch so a tangent (directional-derivative)
//! stream can be pushed through the same code without the affine offset.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{ParamLayout, Real, Tensor};

/// Padding rule along the angular axis. The radial axis is always zero-padded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AngularPadding {
    #[default]
    Circular,
    Zero,
}

/// Square convolution with odd kernel (`1` or `3`) and same-size output.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub padding: AngularPadding,
    pub weight: Range<usize>,
    pub bias: Option<Range<usize>>,
}

/// im2col matrix for 3x3 kernels; the raw input for 1x1 kernels.
#[derive(Debug, Clone)]
pub struct ConvCache<F> {
    cols: Vec<F>,
    h: usize,
    w: usize,
}

impl Conv2d {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
        padding: AngularPadding,
    ) -> Self {
        assert!(k == 1 || k == 3, "only 1x1 and 3x3 kernels are supported");
        let weight = layout.push(format!("{name}.weight"), &[cout, cin, k, k]);
        let bias = bias.then(|| layout.push(format!("{name}.bias"), &[cout]));
        Self { cin, cout, k, padding, weight, bias }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    fn im2col<F: Real>(&self, x: &Tensor<F>) -> Vec<F> {
        let (h, w) = (x.h, x.w);
        let plane = h * w;
        let mut cols = vec![F::zero(); self.cin * 9 * plane];
        for ci in 0..self.cin {
            let src = x.channel(ci);
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (ci * 9 + ky * 3 + kx) * plane;
                    let dst = &mut cols[row..row + plane];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let s = &src[sy as usize * w..(sy as usize + 1) * w];
                        let d = &mut dst[y * w..(y + 1) * w];
                        match kx {
                            1 => d.copy_from_slice(s),
                            0 => {
                                d[1..].copy_from_slice(&s[..w - 1]);
                                if self.padding == AngularPadding::Circular {
                                    d[0] = s[w - 1];
                                }
                            }
                            _ => {
                                d[..w - 1].copy_from_slice(&s[1..]);
                                if self.padding == AngularPadding::Circular {
                                    d[w - 1] = s[0];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<F: Real>(&self, cols: &[F], h: usize, w: usize) -> Tensor<F> {
        let plane = h * w;
        let mut dx = Tensor::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            let dst = dx.channel_mut(ci);
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (ci * 9 + ky * 3 + kx) * plane;
                    let src = &cols[row..row + plane];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let s = &src[y * w..(y + 1) * w];
                        let d = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                        match kx {
                            1 => d.iter_mut().zip(s).for_each(|(a, &b)| *a += b),
                            0 => {
                                d[..w - 1].iter_mut().zip(&s[1..]).for_each(|(a, &b)| *a += b);
                                if self.padding == AngularPadding::Circular {
                                    d[w - 1] += s[0];
                                }
                            }
                            _ => {
                                d[1..].iter_mut().zip(&s[..w - 1]).for_each(|(a, &b)| *a += b);
                                if self.padding == AngularPadding::Circular {
                                    d[0] += s[w - 1];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward<F: Real>(&self, p: &[F], x: &Tensor<F>, with_bias: bool) -> (Tensor<F>, ConvCache<F>) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (h, w) = (x.h, x.w);
        let plane = h * w;
        let cols = if self.k == 3 { self.im2col(x) } else { x.data.clone() };
        let kk = self.cin * self.k * self.k;
        let mut out = Tensor::zeros(self.cout, h, w);
        F::gemm(self.cout, kk, plane, F::one(), &p[self.weight.clone()], false, &cols, false, F::zero(), &mut out.data);
        if with_bias {
            if let Some(b) = &self.bias {
                for (co, &bv) in p[b.clone()].iter().enumerate() {
                    out.channel_mut(co).iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        (out, ConvCache { cols, h, w })
    }

    /// Returns the input gradient; accumulates weight gradients when `grad` is given.
    pub fn backward<F: Real>(
        &self,
        p: &[F],
        cache: &ConvCache<F>,
        dout: &Tensor<F>,
        grad: Option<&mut [F]>,
        with_bias: bool,
    ) -> Tensor<F> {
        let plane = cache.h * cache.w;
        let kk = self.cin * self.k * self.k;
        if let Some(g) = grad {
            F::gemm(self.cout, plane, kk, F::one(), &dout.data, false, &cache.cols, true, F::one(), &mut g[self.weight.clone()]);
            if with_bias {
                if let Some(b) = &self.bias {
                    for (co, gb) in g[b.clone()].iter_mut().enumerate() {
                        *gb += dout.channel(co).iter().copied().sum::<F>();
                    }
                }
            }
        }
        let mut dcols = vec![F::zero(); kk * plane];
        F::gemm(kk, self.cout, plane, F::one(), &p[self.weight.clone()], true, &dout.data, false, F::zero(), &mut dcols);
        if self.k == 3 {
            self.col2im(&dcols, cache.h, cache.w)
        } else {
            Tensor::from_vec(self.cin, cache.h, cache.w, dcols)
        }
    }
}

/// Fully connected layer `y = W x + b` with `W` of shape `(out, in)`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

impl Dense {
    pub fn new(layout: &mut ParamLayout, name: &str, inputs: usize, outputs: usize) -> Self {
        let weight = layout.push(format!("{name}.weight"), &[outputs, inputs]);
        let bias = layout.push(format!("{name}.bias"), &[outputs]);
        Self { inputs, outputs, weight, bias }
    }

    pub fn forward<F: Real>(&self, p: &[F], x: &[F], with_bias: bool) -> Vec<F> {
        assert_eq!(x.len(), self.inputs, "dense input width");
        let mut y = if with_bias { p[self.bias.clone()].to_vec() } else { vec![F::zero(); self.outputs] };
        F::gemm(self.outputs, self.inputs, 1, F::one(), &p[self.weight.clone()], false, x, false, F::one(), &mut y);
        y
    }

    pub fn backward<F: Real>(&self, p: &[F], x: &[F], dy: &[F], grad: Option<&mut [F]>, with_bias: bool) -> Vec<F> {
        if let Some(g) = grad {
            F::gemm(self.outputs, 1, self.inputs, F::one(), dy, false, x, false, F::one(), &mut g[self.weight.clone()]);
            if with_bias {
                for (gb, &d) in g[self.bias.clone()].iter_mut().zip(dy) {
                    *gb += d;
                }
            }
        }
        let mut dx = vec![F::zero(); self.inputs];
        F::gemm(self.inputs, self.outputs, 1, F::one(), &p[self.weight.clone()], true, dy, false, F::zero(), &mut dx);
        dx
    }
}

/// 2x2 max pooling with ceil-mode output size; partial windows pool what exists.
#[derive(Debug, Clone)]
pub struct PoolCache {
    argmax: Vec<u32>,
    in_shape: (usize, usize, usize),
}

pub fn max_pool2<F: Real>(x: &Tensor<F>) -> (Tensor<F>, PoolCache) {
    let (oh, ow) = (x.h.div_ceil(2), x.w.div_ceil(2));
    let mut out = Tensor::zeros(x.c, oh, ow);
    let mut argmax = vec![0u32; x.c * oh * ow];
    for c in 0..x.c {
        let base = c * x.h * x.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * x.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let (y, xx) = (2 * oy + dy, 2 * ox + dx);
                    if y < x.h && xx < x.w {
                        let idx = base + y * x.w + xx;
                        if x.data[idx] > x.data[best] {
                            best = idx;
                        }
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                out.data[o] = x.data[best];
                argmax[o] = best as u32;
            }
        }
    }
    (out, PoolCache { argmax, in_shape: (x.c, x.h, x.w) })
}

impl PoolCache {
    /// Pools a tangent stream through the same switch positions as the primal.
    pub fn gather<F: Real>(&self, t: &Tensor<F>, out_h: usize, out_w: usize) -> Tensor<F> {
        let data = self.argmax.iter().map(|&i| t.data[i as usize]).collect();
        Tensor::from_vec(self.in_shape.0, out_h, out_w, data)
    }

    pub fn backward<F: Real>(&self, dout: &Tensor<F>) -> Tensor<F> {
        let (c, h, w) = self.in_shape;
        let mut dx = Tensor::zeros(c, h, w);
        for (&i, &d) in self.argmax.iter().zip(&dout.data) {
            dx.data[i as usize] += d;
        }
        dx
    }
}

/// Two-tap interpolation weights for half-pixel-centred 2x upsampling.
fn upsample_taps(n: usize, wrap: bool) -> Vec<[(usize, f64); 2]> {
    (0..2 * n)
        .map(|o| {
            let i = o / 2;
            let neighbour = if o % 2 == 0 { i as isize - 1 } else { i as isize + 1 };
            let j = if wrap {
                neighbour.rem_euclid(n as isize) as usize
            } else {
                neighbour.clamp(0, n as isize - 1) as usize
            };
            [(i, 0.75), (j, 0.25)]
        })
        .collect()
}

/// Fixed bilinear 2x upsampling; periodic along the angular axis when requested.
pub fn upsample2<F: Real>(x: &Tensor<F>, padding: AngularPadding) -> Tensor<F> {
    let ty = upsample_taps(x.h, false);
    let tx = upsample_taps(x.w, padding == AngularPadding::Circular);
    let (oh, ow) = (2 * x.h, 2 * x.w);
    let mut out = Tensor::zeros(x.c, oh, ow);
    for c in 0..x.c {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, rx) in tx.iter().enumerate() {
                let mut acc = 0.0;
                for &(sy, wy) in ry {
                    for &(sx, wx) in rx {
                        acc += wy * wx * src[sy * x.w + sx].to_f64_lossy();
                    }
                }
                dst[oy * ow + ox] = F::from_f64_lossy(acc);
            }
        }
    }
    out
}

pub fn upsample2_backward<F: Real>(dout: &Tensor<F>, padding: AngularPadding) -> Tensor<F> {
    let (h, w) = (dout.h / 2, dout.w / 2);
    let ty = upsample_taps(h, false);
    let tx = upsample_taps(w, padding == AngularPadding::Circular);
    let mut dx = Tensor::zeros(dout.c, h, w);
    for c in 0..dout.c {
        let src = dout.channel(c);
        let dst = dx.channel_mut(c);
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, rx) in tx.iter().enumerate() {
                let g = src[oy * dout.w + ox];
                for &(sy, wy) in ry {
                    for &(sx, wx) in rx {
                        dst[sy * w + sx] += F::from_f64_lossy(wy * wx) * g;
                    }
                }
            }
        }
    }
    dx
}

/// Leaky ReLU (`slope = 0` gives the plain rectifier). Returns output and the
/// positive-part mask needed by the backward and tangent passes.
pub fn leaky_relu<F: Real>(x: Tensor<F>, slope: F) -> (Tensor<F>, Vec<bool>) {
    let mut x = x;
    let mask: Vec<bool> = x.data.iter().map(|&v| v > F::zero()).collect();
    for (v, &m) in x.data.iter_mut().zip(&mask) {
        if !m {
            *v *= slope;
        }
    }
    (x, mask)
}

/// Multiplies a gradient (or tangent) by the local slope of [`leaky_relu`].
pub fn leaky_relu_apply<F: Real>(d: &mut [F], mask: &[bool], slope: F) {
    for (v, &m) in d.iter_mut().zip(mask) {
        if !m {
            *v *= slope;
        }
    }
}

/// Per-pixel softmax over channels.
pub fn softmax_channels<F: Real>(logits: &Tensor<F>) -> Tensor<F> {
    let plane = logits.plane();
    let mut out = logits.clone();
    for i in 0..plane {
        let mut m = F::neg_infinity();
        for c in 0..logits.c {
            m = m.max(logits.data[c * plane + i]);
        }
        let mut s = F::zero();
        for c in 0..logits.c {
            let e = (logits.data[c * plane + i] - m).exp();
            out.data[c * plane + i] = e;
            s += e;
        }
        for c in 0..logits.c {
            out.data[c * plane + i] /= s;
        }
    }
    out
}

pub fn softmax_backward<F: Real>(probs: &Tensor<F>, dprobs: &Tensor<F>) -> Tensor<F> {
    let plane = probs.plane();
    let mut dx = Tensor::zeros(probs.c, probs.h, probs.w);
    for i in 0..plane {
        let mut dot = F::zero();
        for c in 0..probs.c {
            dot += probs.data[c * plane + i] * dprobs.data[c * plane + i];
        }
        for c in 0..probs.c {
            let k = c * plane + i;
            dx.data[k] = probs.data[k] * (dprobs.data[k] - dot);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Direct 3x3 convolution used as an independent reference.
    fn conv_direct(conv: &Conv2d, p: &[f64], x: &Tensor<f64>) -> Tensor<f64> {
        let mut out = Tensor::zeros(conv.cout, x.h, x.w);
        let r = conv.k as isize / 2;
        for co in 0..conv.cout {
            for y in 0..x.h as isize {
                for xx in 0..x.w as isize {
                    let mut s = conv.bias.as_ref().map_or(0.0, |b| p[b.start + co]);
                    for ci in 0..conv.cin {
                        for ky in -r..=r {
                            for kx in -r..=r {
                                let sy = y + ky;
                                let mut sx = xx + kx;
                                if sy < 0 || sy >= x.h as isize {
                                    continue;
                                }
                                if sx < 0 || sx >= x.w as isize {
                                    if conv.padding == AngularPadding::Zero {
                                        continue;
                                    }
                                    sx = sx.rem_euclid(x.w as isize);
                                }
                                let widx = conv.weight.start
                                    + ((co * conv.cin + ci) * conv.k + (ky + r) as usize) * conv.k
                                    + (kx + r) as usize;
                                s += p[widx] * x.data[(ci * x.h + sy as usize) * x.w + sx as usize];
                            }
                        }
                    }
                    out.data[(co * x.h + y as usize) * x.w + xx as usize] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_convolution() {
        for padding in [AngularPadding::Circular, AngularPadding::Zero] {
            for k in [1, 3] {
                let mut layout = ParamLayout::default();
                let conv = Conv2d::new(&mut layout, "c", 2, 3, k, true, padding);
                let p = random_tensor(1, 1, layout.total, 7).data;
                let x = random_tensor(2, 5, 6, 3);
                let (got, _) = conv.forward(&p, &x, true);
                let want = conv_direct(&conv, &p, &x);
                for (a, b) in got.data.iter().zip(&want.data) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), d> == <x, conv^T(d)> for the bias-free linear map.
        let mut layout = ParamLayout::default();
        let conv = Conv2d::new(&mut layout, "c", 3, 2, 3, false, AngularPadding::Circular);
        let p = random_tensor(1, 1, layout.total, 11).data;
        let x = random_tensor(3, 4, 8, 12);
        let d = random_tensor(2, 4, 8, 13);
        let (y, cache) = conv.forward(&p, &x, false);
        let dx = conv.backward(&p, &cache, &d, None, false);
        let lhs: f64 = y.data.iter().zip(&d.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn conv_weight_gradient_matches_finite_differences() {
        let mut layout = ParamLayout::default();
        let conv = Conv2d::new(&mut layout, "c", 2, 2, 3, true, AngularPadding::Circular);
        let mut p = random_tensor(1, 1, layout.total, 21).data;
        let x = random_tensor(2, 3, 5, 22);
        let d = random_tensor(2, 3, 5, 23);
        let objective = |p: &[f64]| -> f64 {
            let (y, _) = conv.forward(p, &x, true);
            y.data.iter().zip(&d.data).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = conv.forward(&p, &x, true);
        let mut g = vec![0.0; layout.total];
        conv.backward(&p, &cache, &d, Some(&mut g), true);
        for i in 0..layout.total {
            let orig = p[i];
            p[i] = orig + 1e-6;
            let fp = objective(&p);
            p[i] = orig - 1e-6;
            let fm = objective(&p);
            p[i] = orig;
            assert!(((fp - fm) / 2e-6 - g[i]).abs() < 1e-7, "param {i}");
        }
    }

    #[test]
    fn pool_uses_ceil_mode_for_odd_sizes() {
        let x = Tensor::from_vec(1, 3, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0f64]);
        let (y, _) = max_pool2(&x);
        assert_eq!((y.h, y.w), (2, 2));
        assert_eq!(y.data, vec![5.0, 6.0, 8.0, 9.0]);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        for padding in [AngularPadding::Circular, AngularPadding::Zero] {
            let x = random_tensor(2, 3, 4, 31);
            let d = random_tensor(2, 6, 8, 32);
            let y = upsample2(&x, padding);
            let dx = upsample2_backward(&d, padding);
            let lhs: f64 = y.data.iter().zip(&d.data).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_preserves_constants() {
        let x = Tensor::from_vec(1, 2, 2, vec![3.0f64; 4]);
        assert!(upsample2(&x, AngularPadding::Circular).data.iter().all(|&v| (v - 3.0).abs() < 1e-15));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_backward_matches_fd() {
        let x = random_tensor(6, 2, 3, 41);
        let d = random_tensor(6, 2, 3, 42);
        let y = softmax_channels(&x);
        for i in 0..6 {
            let s: f64 = (0..6).map(|c| y.data[c * 6 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let dx = softmax_backward(&y, &d);
        let f = |x: &Tensor<f64>| -> f64 {
            softmax_channels(x).data.iter().zip(&d.data).map(|(a, b)| a * b).sum()
        };
        let mut xp = x.clone();
        for i in 0..x.data.len() {
            xp.data[i] = x.data[i] + 1e-6;
            let fp = f(&xp);
            xp.data[i] = x.data[i] - 1e-6;
            let fm = f(&xp);
            xp.data[i] = x.data[i];
            assert!(((fp - fm) / 2e-6 - dx.data[i]).abs() < 1e-8);
        }
    }
}
