use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Real;

/// Single-sample feature map, channel-major: `data[(c * h + y) * w + x]`.
///
/// `h` runs along the radial axis and `w` along the (periodic) angular axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![F::zero(); c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Self { c, h, w, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[F] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [F] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.c == other.c && self.h == other.h && self.w == other.w
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Stacks channels of `parts` (all with equal spatial size).
    pub fn concat(parts: &[&Self]) -> Self {
        let (h, w) = (parts[0].h, parts[0].w);
        let c = parts.iter().map(|t| t.c).sum();
        let mut data = Vec::with_capacity(c * h * w);
        for t in parts {
            assert!(t.h == h && t.w == w, "concat spatial mismatch");
            data.extend_from_slice(&t.data);
        }
        Self { c, h, w, data }
    }

    /// Inverse of [`Tensor::concat`]: splits off channel groups of the given sizes.
    pub fn split(&self, sizes: &[usize]) -> Vec<Self> {
        assert_eq!(sizes.iter().sum::<usize>(), self.c);
        let p = self.plane();
        let mut start = 0;
        sizes
            .iter()
            .map(|&n| {
                let t = Self::from_vec(n, self.h, self.w, self.data[start * p..(start + n) * p].to_vec());
                start += n;
                t
            })
            .collect()
    }

    /// Circular shift along the angular axis by `k` columns.
    pub fn roll_angular(&self, k: usize) -> Self {
        let mut out = Self::zeros(self.c, self.h, self.w);
        let w = self.w;
        for row in 0..self.c * self.h {
            for x in 0..w {
                out.data[row * w + (x + k) % w] = self.data[row * w + x];
            }
        }
        out
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| G::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }
}

/// Named parameter tensor inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Declaration-ordered registry of every parameter tensor of a network.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub specs: Vec<ParamSpec>,
    pub total: usize,
}

impl ParamLayout {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> Range<usize> {
        let spec = ParamSpec { name: name.into(), shape: shape.to_vec(), offset: self.total };
        let range = spec.range();
        self.total += spec.len();
        self.specs.push(spec);
        range
    }

    /// He-normal weights (fan-in taken from every dimension but the first),
    /// zero biases. Parameters whose name ends in `bias` are zeroed.
    pub fn init<F: Real, R: Rng>(&self, rng: &mut R) -> Vec<F> {
        let mut params = vec![F::zero(); self.total];
        for spec in &self.specs {
            if spec.name.ends_with("bias") {
                continue;
            }
            let fan_in: usize = spec.shape.iter().skip(1).product::<usize>().max(1);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            for v in &mut params[spec.range()] {
                *v = F::from_f64_lossy(normal.sample(rng));
            }
        }
        params
    }
}
