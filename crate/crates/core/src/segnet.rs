//! Three-scale residual U-Net with a two-complex latent stage.
//!
//! Every "complex" is three 3x3 convolutions with leaky-ReLU activations plus
//! an additive skip from its input (a bias-free 1x1 projection when the
//! channel count changes). Decoder stages upsample bilinearly, convolve, and
//! concatenate the encoder output of the same scale.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PolarImage, ProbMap, NUM_CHANNELS, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{
    leaky_relu, leaky_relu_apply, max_pool2, softmax_backward, softmax_channels, tensor_to_probs, upsample2,
    upsample2_backward, AngularPadding, Checkpoint, Conv2d, ConvCache, Normalization, ParamLayout, PoolCache, Real,
    Tensor,
};

pub const CHECKPOINT_KIND: &str = "segnet";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegNetConfig {
    pub features: [usize; 3],
    pub latent_features: usize,
    pub lrelu_slope: f64,
    pub classes: usize,
    pub input_channels: usize,
    pub padding: AngularPadding,
}

const BRANCH_GAIN: f64 = 0.5;
const HEAD_GAIN: f64 = 0.3;

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            features: [8, 8, 16],
            latent_features: 16,
            lrelu_slope: 0.3,
            classes: NUM_CLASSES,
            input_channels: NUM_CHANNELS,
            padding: AngularPadding::Circular,
        }
    }
}

/// Both spatial dimensions must be multiples of this.
pub const SIZE_MULTIPLE: usize = 4;

#[derive(Debug, Clone)]
pub struct ConvComplex {
    pub convs: [Conv2d; 3],
    pub skip: Option<Conv2d>,
}

pub struct ComplexCache<F> {
    convs: Vec<ConvCache<F>>,
    masks: Vec<Vec<bool>>,
    skip: Option<ConvCache<F>>,
}

impl ConvComplex {
    pub fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, padding: AngularPadding) -> Self {
        let convs = [
            Conv2d::new(layout, &format!("{name}.conv0"), cin, cout, 3, true, padding),
            Conv2d::new(layout, &format!("{name}.conv1"), cout, cout, 3, true, padding),
            Conv2d::new(layout, &format!("{name}.conv2"), cout, cout, 3, true, padding),
        ];
        let skip = (cin != cout).then(|| Conv2d::new(layout, &format!("{name}.skip"), cin, cout, 1, false, padding));
        Self { convs, skip }
    }

    pub fn forward<F: Real>(&self, p: &[F], x: &Tensor<F>, slope: F) -> (Tensor<F>, ComplexCache<F>) {
        let mut convs = Vec::with_capacity(3);
        let mut masks = Vec::with_capacity(3);
        let mut h = x.clone();
        for conv in &self.convs {
            let (z, cache) = conv.forward(p, &h, true);
            let (y, mask) = leaky_relu(z, slope);
            convs.push(cache);
            masks.push(mask);
            h = y;
        }
        let skip = match &self.skip {
            Some(proj) => {
                let (s, cache) = proj.forward(p, x, false);
                h.add_assign(&s);
                Some(cache)
            }
            None => {
                h.add_assign(x);
                None
            }
        };
        (h, ComplexCache { convs, masks, skip })
    }

    pub fn backward<F: Real>(&self, p: &[F], cache: &ComplexCache<F>, dout: &Tensor<F>, grad: &mut [F], slope: F) -> Tensor<F> {
        let mut d = dout.clone();
        for k in (0..3).rev() {
            leaky_relu_apply(&mut d.data, &cache.masks[k], slope);
            d = self.convs[k].backward(p, &cache.convs[k], &d, Some(&mut *grad), true);
        }
        match (&self.skip, &cache.skip) {
            (Some(proj), Some(sc)) => d.add_assign(&proj.backward(p, sc, dout, Some(grad), false)),
            _ => d.add_assign(dout),
        }
        d
    }
}

#[derive(Debug, Clone)]
pub struct SegNet {
    pub config: SegNetConfig,
    pub layout: ParamLayout,
    enc: [ConvComplex; 3],
    latent: [ConvComplex; 2],
    dec2: ConvComplex,
    up1: Conv2d,
    dec1: ConvComplex,
    up0: Conv2d,
    dec0: ConvComplex,
    head: Conv2d,
}

/// Everything the backward pass needs from one forward pass.
pub struct SegCache<F> {
    enc: Vec<ComplexCache<F>>,
    pools: Vec<PoolCache>,
    latent: Vec<ComplexCache<F>>,
    dec2: ComplexCache<F>,
    up1: (ConvCache<F>, Vec<bool>),
    dec1: ComplexCache<F>,
    up0: (ConvCache<F>, Vec<bool>),
    dec0: ComplexCache<F>,
    head: ConvCache<F>,
    probs: Tensor<F>,
    channels: [usize; 3],
}

impl SegNet {
    pub fn new(config: SegNetConfig) -> Self {
        let pad = config.padding;
        let [f0, f1, f2] = config.features;
        let fl = config.latent_features;
        let mut layout = ParamLayout::default();
        let enc = [
            ConvComplex::new(&mut layout, "enc0", config.input_channels, f0, pad),
            ConvComplex::new(&mut layout, "enc1", f0, f1, pad),
            ConvComplex::new(&mut layout, "enc2", f1, f2, pad),
        ];
        let latent = [
            ConvComplex::new(&mut layout, "latent0", f2, fl, pad),
            ConvComplex::new(&mut layout, "latent1", fl, fl, pad),
        ];
        let dec2 = ConvComplex::new(&mut layout, "dec2", fl + f2, f2, pad);
        let up1 = Conv2d::new(&mut layout, "up1", f2, f1, 3, true, pad);
        let dec1 = ConvComplex::new(&mut layout, "dec1", 2 * f1, f1, pad);
        let up0 = Conv2d::new(&mut layout, "up0", f1, f0, 3, true, pad);
        let dec0 = ConvComplex::new(&mut layout, "dec0", 2 * f0, f0, pad);
        let head = Conv2d::new(&mut layout, "head", f0, config.classes, 1, true, pad);
        Self { config, layout, enc, latent, dec2, up1, dec1, up0, dec0, head }
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    /// He-normal init, with the last convolution of every residual branch and
    /// the classifier scaled down so the residual sums and the initial softmax
    /// stay unsaturated.
    pub fn init_params<F: Real>(&self, seed: u64) -> Vec<F> {
        let mut p: Vec<F> = self.layout.init(&mut ChaCha8Rng::seed_from_u64(seed));
        let branch = F::from_f64_lossy(BRANCH_GAIN);
        let head = F::from_f64_lossy(HEAD_GAIN);
        for spec in &self.layout.specs {
            let gain = if spec.name == "head.weight" {
                head
            } else if spec.name.ends_with(".conv2.weight") {
                branch
            } else {
                continue;
            };
            p[spec.range()].iter_mut().for_each(|v| *v = *v * gain);
        }
        p
    }

    fn slope<F: Real>(&self) -> F {
        F::from_f64_lossy(self.config.lrelu_slope)
    }

    pub fn check_shape(&self, h: usize, w: usize) -> Result<()> {
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!("spatial size {h}x{w} is not a multiple of {SIZE_MULTIPLE}")));
        }
        Ok(())
    }

    /// Class probabilities `(classes, h, w)` and the cache for [`SegNet::backward`].
    pub fn forward<F: Real>(&self, p: &[F], x: &Tensor<F>) -> Result<(Tensor<F>, SegCache<F>)> {
        self.check_shape(x.h, x.w)?;
        if x.c != self.config.input_channels {
            return Err(Error::ShapeMismatch(format!("expected {} input channels, got {}", self.config.input_channels, x.c)));
        }
        let slope = self.slope::<F>();
        let pad = self.config.padding;
        let (e0, c0) = self.enc[0].forward(p, x, slope);
        let (p0, pc0) = max_pool2(&e0);
        let (e1, c1) = self.enc[1].forward(p, &p0, slope);
        let (p1, pc1) = max_pool2(&e1);
        let (e2, c2) = self.enc[2].forward(p, &p1, slope);
        let (l0, lc0) = self.latent[0].forward(p, &e2, slope);
        let (l1, lc1) = self.latent[1].forward(p, &l0, slope);
        let (d2, dc2) = self.dec2.forward(p, &Tensor::concat(&[&l1, &e2]), slope);
        let (z, uc1) = self.up1.forward(p, &upsample2(&d2, pad), true);
        let (u1, um1) = leaky_relu(z, slope);
        let (d1, dc1) = self.dec1.forward(p, &Tensor::concat(&[&u1, &e1]), slope);
        let (z, uc0) = self.up0.forward(p, &upsample2(&d1, pad), true);
        let (u0, um0) = leaky_relu(z, slope);
        let (d0, dc0) = self.dec0.forward(p, &Tensor::concat(&[&u0, &e0]), slope);
        let (logits, hc) = self.head.forward(p, &d0, true);
        let probs = softmax_channels(&logits);
        let cache = SegCache {
            enc: vec![c0, c1, c2],
            pools: vec![pc0, pc1],
            latent: vec![lc0, lc1],
            dec2: dc2,
            up1: (uc1, um1),
            dec1: dc1,
            up0: (uc0, um0),
            dec0: dc0,
            head: hc,
            probs: probs.clone(),
            channels: [u0.c, u1.c, l1.c],
        };
        Ok((probs, cache))
    }

    /// Accumulates parameter gradients for an upstream gradient on the probabilities.
    pub fn backward<F: Real>(&self, p: &[F], cache: &SegCache<F>, dprobs: &Tensor<F>, grad: &mut [F]) {
        let slope = self.slope::<F>();
        let pad = self.config.padding;
        let [c_u0, c_u1, c_l1] = cache.channels;
        let dlogits = softmax_backward(&cache.probs, dprobs);
        let dd0 = self.head.backward(p, &cache.head, &dlogits, Some(&mut *grad), true);
        let dcat0 = self.dec0.backward(p, &cache.dec0, &dd0, grad, slope);
        let mut parts = dcat0.split(&[c_u0, dcat0.c - c_u0]).into_iter();
        let (mut du0, mut de0) = (parts.next().unwrap(), parts.next().unwrap());
        leaky_relu_apply(&mut du0.data, &cache.up0.1, slope);
        let dup0 = self.up0.backward(p, &cache.up0.0, &du0, Some(&mut *grad), true);
        let dd1 = upsample2_backward(&dup0, pad);
        let dcat1 = self.dec1.backward(p, &cache.dec1, &dd1, grad, slope);
        let mut parts = dcat1.split(&[c_u1, dcat1.c - c_u1]).into_iter();
        let (mut du1, mut de1) = (parts.next().unwrap(), parts.next().unwrap());
        leaky_relu_apply(&mut du1.data, &cache.up1.1, slope);
        let dup1 = self.up1.backward(p, &cache.up1.0, &du1, Some(&mut *grad), true);
        let dd2 = upsample2_backward(&dup1, pad);
        let dcat2 = self.dec2.backward(p, &cache.dec2, &dd2, grad, slope);
        let mut parts = dcat2.split(&[c_l1, dcat2.c - c_l1]).into_iter();
        let (dl1, mut de2) = (parts.next().unwrap(), parts.next().unwrap());
        let dl0 = self.latent[1].backward(p, &cache.latent[1], &dl1, grad, slope);
        de2.add_assign(&self.latent[0].backward(p, &cache.latent[0], &dl0, grad, slope));
        let dp1 = self.enc[2].backward(p, &cache.enc[2], &de2, grad, slope);
        de1.add_assign(&cache.pools[1].backward(&dp1));
        let dp0 = self.enc[1].backward(p, &cache.enc[1], &de1, grad, slope);
        de0.add_assign(&cache.pools[0].backward(&dp0));
        self.enc[0].backward(p, &cache.enc[0], &de0, grad, slope);
    }

    pub fn predict_tensor<F: Real>(&self, p: &[F], x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.forward(p, x)?.0)
    }
}

/// Trained network with the input statistics it expects.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub net: SegNet,
    pub params: Vec<f32>,
    pub norm: Normalization,
}

impl SegModel {
    pub fn predict(&self, image: &PolarImage) -> Result<ProbMap> {
        let x = self.norm.image_tensor::<f32>(image);
        let probs = self.net.predict_tensor(&self.params, &x)?;
        Ok(ProbMap::new_unchecked(image.r, image.a, tensor_to_probs(&probs)))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new(
            CHECKPOINT_KIND,
            serde_json::to_value(self.net.config)?,
            self.net.layout.clone(),
            &self.params,
            self.norm.clone(),
        ))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!("expected a segnet checkpoint, found `{}`", ck.header.kind)));
        }
        let config: SegNetConfig = serde_json::from_value(ck.header.architecture.clone())?;
        let net = SegNet::new(config);
        if net.layout != ck.header.layout {
            return Err(Error::ShapeMismatch("segnet checkpoint layout differs from its architecture".into()));
        }
        Ok(Self { net, params: ck.params.clone(), norm: ck.norm.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn parameter_count_matches_layer_arithmetic() {
        let conv3 = |cin: usize, cout: usize| cin * cout * 9 + cout;
        let complex = |cin: usize, cout: usize| {
            conv3(cin, cout) + 2 * conv3(cout, cout) + if cin != cout { cin * cout } else { 0 }
        };
        let expected = complex(3, 8)
            + complex(8, 8)
            + complex(8, 16)
            + 2 * complex(16, 16)
            + complex(32, 16)
            + conv3(16, 8)
            + complex(16, 8)
            + conv3(8, 8)
            + complex(16, 8)
            + (8 * 6 + 6);
        assert_eq!(SegNet::new(SegNetConfig::default()).param_count(), expected);
        assert_eq!(expected, 39_510);
    }

    #[test]
    fn complex_zero_weights_give_zero_and_identity_skip_passes_input() {
        let mut layout = ParamLayout::default();
        let proj = ConvComplex::new(&mut layout, "c", 3, 3, AngularPadding::Circular);
        let p = vec![0.0f64; layout.total];
        let x = random(3, 4, 4, 1);
        let (y, _) = proj.forward(&p, &x, 0.3);
        assert_eq!(y.data, x.data, "zeroed branch with identity skip");

        let mut layout = ParamLayout::default();
        let cx = ConvComplex::new(&mut layout, "c", 2, 3, AngularPadding::Circular);
        let (y, _) = cx.forward(&vec![0.0f64; layout.total], &random(2, 4, 4, 2), 0.3);
        assert!(y.data.iter().all(|&v| v == 0.0));
        assert_eq!((y.c, y.h, y.w), (3, 4, 4));
    }

    #[test]
    fn output_is_a_distribution_and_rejects_bad_sizes() {
        let net = SegNet::new(SegNetConfig::default());
        let p: Vec<f64> = net.init_params(3);
        let (y, _) = net.forward(&p, &random(3, 8, 12, 4)).unwrap();
        for i in 0..y.plane() {
            let s: f64 = (0..6).map(|c| y.data[c * y.plane() + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(matches!(net.forward(&p, &random(3, 8, 10, 4)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let net = SegNet::new(SegNetConfig::default());
        let mut p: Vec<f64> = net.init_params(5);
        let x = random(3, 8, 8, 6);
        let d = random(6, 8, 8, 7);
        let objective = |p: &[f64]| -> f64 {
            let (y, _) = net.forward(p, &x).unwrap();
            y.data.iter().zip(&d.data).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = net.forward(&p, &x).unwrap();
        let mut g = vec![0.0; p.len()];
        net.backward(&p, &cache, &d, &mut g);
        for k in (0..p.len()).step_by(97) {
            let orig = p[k];
            p[k] = orig + 1e-6;
            let fp = objective(&p);
            p[k] = orig - 1e-6;
            let fm = objective(&p);
            p[k] = orig;
            let fd = (fp - fm) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "param {k}: fd {fd} analytic {}", g[k]);
        }
    }

    #[test]
    fn circular_padding_makes_the_net_shift_equivariant() {
        let net = SegNet::new(SegNetConfig::default());
        let p: Vec<f64> = net.init_params(8);
        let x = random(3, 8, 16, 9);
        let (y, _) = net.forward(&p, &x).unwrap();
        let (ys, _) = net.forward(&p, &x.roll_angular(4)).unwrap();
        let shifted = y.roll_angular(4);
        let dev = shifted.data.iter().zip(&ys.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-12, "deviation {dev}");
    }
}
