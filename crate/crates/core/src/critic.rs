//! Wasserstein critic that scores label quality conditioned on the image.
//!
//! Input is the normalised image stacked with six label channels. Once
//! trained it is frozen and its negated score becomes the attending-physician
//! loss term. The gradient-penalty parameter gradient is exact: the penalty
//! derivative equals the parameter gradient of a directional derivative of the
//! score, computed by pushing a tangent stream alongside the primal pass and
//! back-propagating through both.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, PolarImage, ProbMap, NUM_CHANNELS, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::losses::Term;
use crate::nn::{
    leaky_relu, leaky_relu_apply, max_pool2, probs_to_tensor, AngularPadding, Checkpoint, Conv2d, ConvCache, Dense,
    Normalization, ParamLayout, PoolCache, Real, RmsProp, RmsPropConfig, Tensor,
};
use crate::par::{map_indexed, Exec};
use crate::phantom::{mix_seed, perturb_labels};

pub const INPUT_CHANNELS: usize = NUM_CHANNELS + NUM_CLASSES;
pub const CHECKPOINT_KIND: &str = "critic";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub r: usize,
    pub a: usize,
    pub features: [usize; 3],
    pub hidden: [usize; 3],
    pub padding: AngularPadding,
}

impl CriticConfig {
    pub fn new(r: usize, a: usize) -> Self {
        Self { r, a, features: [32, 64, 128], hidden: [1024, 256, 128], padding: AngularPadding::Circular }
    }

    /// Spatial size after the three pooling stages.
    pub fn latent_shape(&self) -> (usize, usize) {
        let shrink = |n: usize| n.div_ceil(2).div_ceil(2).div_ceil(2);
        (shrink(self.r), shrink(self.a))
    }
}

#[derive(Debug, Clone)]
pub struct Critic {
    pub config: CriticConfig,
    pub layout: ParamLayout,
    convs: Vec<Conv2d>,
    dense: Vec<Dense>,
}

/// Switch state of one primal pass, shared by its tangent stream.
struct Masks {
    conv_relu: Vec<Vec<bool>>,
    pools: Vec<PoolCache>,
    pooled: Vec<(usize, usize)>,
    dense_relu: Vec<Vec<bool>>,
    flat: (usize, usize, usize),
}

/// Layer inputs of one stream (primal or tangent) and its pre-activation output.
struct Trace<F> {
    conv: Vec<ConvCache<F>>,
    dense_in: Vec<Vec<F>>,
    out: F,
}

impl Critic {
    pub fn new(config: CriticConfig) -> Self {
        let mut layout = ParamLayout::default();
        let mut convs = Vec::new();
        let mut cin = INPUT_CHANNELS;
        for (b, &f) in config.features.iter().enumerate() {
            for l in 0..2 {
                convs.push(Conv2d::new(&mut layout, &format!("block{b}.conv{l}"), cin, f, 3, true, config.padding));
                cin = f;
            }
        }
        let (lh, lw) = config.latent_shape();
        let mut width = cin * lh * lw;
        let mut dense = Vec::new();
        for (k, &h) in config.hidden.iter().enumerate() {
            dense.push(Dense::new(&mut layout, &format!("dense{k}"), width, h));
            width = h;
        }
        dense.push(Dense::new(&mut layout, "out", width, 1));
        Self { config, layout, convs, dense }
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn init_params<F: Real>(&self, seed: u64) -> Vec<F> {
        self.layout.init(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Zeroes the output layer so the score is identically zero.
    pub fn zero_output_layer<F: Real>(&self, params: &mut [F]) {
        let out = self.dense.last().expect("output layer");
        params[out.weight.clone()].iter_mut().for_each(|v| *v = F::zero());
        params[out.bias.clone()].iter_mut().for_each(|v| *v = F::zero());
    }

    fn check_input<F: Real>(&self, x: &Tensor<F>) -> Result<()> {
        if x.c != INPUT_CHANNELS || x.h != self.config.r || x.w != self.config.a {
            return Err(Error::ShapeMismatch(format!(
                "critic expects ({INPUT_CHANNELS}, {}, {}), got ({}, {}, {})",
                self.config.r, self.config.a, x.c, x.h, x.w
            )));
        }
        Ok(())
    }

    fn forward_primal<F: Real>(&self, p: &[F], x: &Tensor<F>) -> (Trace<F>, Masks, F) {
        let mut conv = Vec::with_capacity(self.convs.len());
        let mut conv_relu = Vec::with_capacity(self.convs.len());
        let mut pools = Vec::new();
        let mut pooled = Vec::new();
        let mut h = x.clone();
        for (i, layer) in self.convs.iter().enumerate() {
            let (z, cache) = layer.forward(p, &h, true);
            let (y, mask) = leaky_relu(z, F::zero());
            conv.push(cache);
            conv_relu.push(mask);
            h = y;
            if i % 2 == 1 {
                let (y, pc) = max_pool2(&h);
                pooled.push((y.h, y.w));
                pools.push(pc);
                h = y;
            }
        }
        let flat = (h.c, h.h, h.w);
        let mut v = h.data;
        let mut dense_in = Vec::with_capacity(self.dense.len());
        let mut dense_relu = Vec::new();
        let last = self.dense.len() - 1;
        for (k, layer) in self.dense.iter().enumerate() {
            let z = layer.forward(p, &v, true);
            dense_in.push(v);
            if k < last {
                let mask: Vec<bool> = z.iter().map(|&t| t > F::zero()).collect();
                v = z.iter().zip(&mask).map(|(&t, &m)| if m { t } else { F::zero() }).collect();
                dense_relu.push(mask);
            } else {
                v = z;
            }
        }
        let out = v[0];
        let trace = Trace { conv, dense_in, out };
        (trace, Masks { conv_relu, pools, pooled, dense_relu, flat }, out.tanh())
    }

    /// Pushes an input tangent through the linearisation at the primal point.
    fn forward_tangent<F: Real>(&self, p: &[F], masks: &Masks, t: &Tensor<F>) -> Trace<F> {
        let mut conv = Vec::with_capacity(self.convs.len());
        let mut h = t.clone();
        for (i, layer) in self.convs.iter().enumerate() {
            let (mut z, cache) = layer.forward(p, &h, false);
            leaky_relu_apply(&mut z.data, &masks.conv_relu[i], F::zero());
            conv.push(cache);
            h = z;
            if i % 2 == 1 {
                let (oh, ow) = masks.pooled[i / 2];
                h = masks.pools[i / 2].gather(&h, oh, ow);
            }
        }
        let mut v = h.data;
        let mut dense_in = Vec::with_capacity(self.dense.len());
        for (k, layer) in self.dense.iter().enumerate() {
            let mut z = layer.forward(p, &v, false);
            dense_in.push(v);
            if k < masks.dense_relu.len() {
                leaky_relu_apply(&mut z, &masks.dense_relu[k], F::zero());
            }
            v = z;
        }
        Trace { conv, dense_in, out: v[0] }
    }

    /// Back-propagates an adjoint on the pre-activation output through one stream.
    fn backward<F: Real>(
        &self,
        p: &[F],
        trace: &Trace<F>,
        masks: &Masks,
        dout: F,
        mut grad: Option<&mut [F]>,
        with_bias: bool,
    ) -> Tensor<F> {
        let mut d = vec![dout];
        for k in (0..self.dense.len()).rev() {
            if k < masks.dense_relu.len() {
                leaky_relu_apply(&mut d, &masks.dense_relu[k], F::zero());
            }
            d = self.dense[k].backward(p, &trace.dense_in[k], &d, grad.as_deref_mut(), with_bias);
        }
        let (c, h, w) = masks.flat;
        let mut t = Tensor::from_vec(c, h, w, d);
        for i in (0..self.convs.len()).rev() {
            if i % 2 == 1 {
                t = masks.pools[i / 2].backward(&t);
            }
            leaky_relu_apply(&mut t.data, &masks.conv_relu[i], F::zero());
            t = self.convs[i].backward(p, &trace.conv[i], &t, grad.as_deref_mut(), with_bias);
        }
        t
    }

    pub fn score<F: Real>(&self, p: &[F], x: &Tensor<F>) -> Result<F> {
        self.check_input(x)?;
        Ok(self.forward_primal(p, x).2)
    }

    /// Score and its gradient with respect to the input.
    pub fn input_gradient<F: Real>(&self, p: &[F], x: &Tensor<F>) -> Result<(F, Tensor<F>)> {
        self.check_input(x)?;
        let (trace, masks, s) = self.forward_primal(p, x);
        let dz = F::one() - s * s;
        Ok((s, self.backward(p, &trace, &masks, dz, None, true)))
    }

    /// Adds `scale * d score / d params` into `grad`; returns the score.
    pub fn accumulate_score_grad<F: Real>(&self, p: &[F], x: &Tensor<F>, scale: F, grad: &mut [F]) -> Result<F> {
        self.check_input(x)?;
        let (trace, masks, s) = self.forward_primal(p, x);
        self.backward(p, &trace, &masks, scale * (F::one() - s * s), Some(grad), true);
        Ok(s)
    }

    /// Penalty `(||grad_x f(x)|| - 1)^2` at `x`; when `grad` is given, adds
    /// `scale` times its parameter gradient.
    pub fn accumulate_penalty_grad<F: Real>(&self, p: &[F], x: &Tensor<F>, scale: F, grad: Option<&mut [F]>) -> Result<F> {
        self.check_input(x)?;
        let (trace, masks, s) = self.forward_primal(p, x);
        let ds = F::one() - s * s;
        let g = self.backward(p, &trace, &masks, ds, None, true);
        let norm = g.data.iter().map(|&v| v * v).sum::<F>().sqrt();
        let penalty = (norm - F::one()) * (norm - F::one());
        let Some(grad) = grad else { return Ok(penalty) };
        if norm <= F::zero() {
            return Ok(penalty);
        }
        // d penalty / d params = d/dparams <v, grad_x f> with v held fixed.
        let coef = F::from_f64_lossy(2.0) * (norm - F::one()) / norm;
        let mut v = g;
        v.data.iter_mut().for_each(|t| *t *= coef);
        let tangent = self.forward_tangent(p, &masks, &v);
        // <v, grad_x f> = (1 - s^2) * z_dot, with z the pre-tanh output.
        let dz_primal = scale * tangent.out * F::from_f64_lossy(-2.0) * s * ds;
        let dz_tangent = scale * ds;
        self.backward(p, &trace, &masks, dz_primal, Some(&mut *grad), true);
        self.backward(p, &tangent, &masks, dz_tangent, Some(grad), false);
        Ok(penalty)
    }
}

/// Stacks the normalised image and six label channels (probabilities laid out `(r, a, 6)`).
pub fn critique_input<F: Real>(image: &PolarImage, norm: &Normalization, probs: &[f64]) -> Tensor<F> {
    let img = norm.image_tensor::<F>(image);
    let lab = probs_to_tensor::<F>(probs, image.r, image.a);
    Tensor::concat(&[&img, &lab])
}

/// Mean `(||g|| - 1)^2` over interpolates between paired inputs, for any
/// input-gradient oracle. `t[k]` is the mixing weight of `real[k]`.
pub fn gradient_penalty<G>(input_grad: G, real: &[Vec<f64>], fake: &[Vec<f64>], t: &[f64]) -> f64
where
    G: Fn(&[f64]) -> Vec<f64>,
{
    assert!(real.len() == fake.len() && real.len() == t.len(), "unequal batch sizes");
    if real.is_empty() {
        return 0.0;
    }
    let total: f64 = real
        .iter()
        .zip(fake)
        .zip(t)
        .map(|((x, y), &tk)| {
            let mix: Vec<f64> = x.iter().zip(y).map(|(a, b)| tk * a + (1.0 - tk) * b).collect();
            let n = input_grad(&mix).iter().map(|g| g * g).sum::<f64>().sqrt();
            (n - 1.0) * (n - 1.0)
        })
        .sum();
    total / real.len() as f64
}

/// Frozen critic plus the image normalisation it was trained with.
#[derive(Debug, Clone)]
pub struct FrozenCritic {
    pub critic: Critic,
    pub params: Vec<f32>,
    pub norm: Normalization,
}

impl FrozenCritic {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!("expected a critic checkpoint, found `{}`", ck.header.kind)));
        }
        let config: CriticConfig = serde_json::from_value(ck.header.architecture.clone())?;
        let critic = Critic::new(config);
        if critic.layout != ck.header.layout {
            return Err(Error::ShapeMismatch("critic checkpoint layout differs from its architecture".into()));
        }
        Ok(Self { critic, params: ck.params.clone(), norm: ck.norm.clone() })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new(
            CHECKPOINT_KIND,
            serde_json::to_value(self.critic.config)?,
            self.critic.layout.clone(),
            &self.params,
            self.norm.clone(),
        ))
    }

    pub fn score_labels(&self, image: &PolarImage, labels: &LabelMap) -> Result<f64> {
        let x = critique_input::<f32>(image, &self.norm, &labels.one_hot());
        Ok(self.critic.score(&self.params, &x)? as f64)
    }

    /// Attending-physician term `-f(image, yhat)` and its gradient with respect to `yhat`.
    pub fn ap_loss(&self, image: &PolarImage, yhat: &ProbMap) -> Result<Term> {
        ap_loss(&self.critic, &self.params, &self.norm, image, yhat)
    }
}

/// `-f(image, yhat)` with the gradient routed into the label channels only.
pub fn ap_loss<F: Real>(critic: &Critic, p: &[F], norm: &Normalization, image: &PolarImage, yhat: &ProbMap) -> Result<Term> {
    let x = critique_input::<F>(image, norm, &yhat.probs);
    let (s, dx) = critic.input_gradient(p, &x)?;
    let plane = image.plane();
    let mut grad = vec![0.0; plane * NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        for (q, v) in dx.channel(NUM_CHANNELS + c).iter().enumerate() {
            grad[q * NUM_CLASSES + c] = -v.to_f64_lossy();
        }
    }
    Ok(Term { value: -s.to_f64_lossy(), grad })
}

/// One image with a higher- and a lower-quality label map.
#[derive(Debug, Clone)]
pub struct QualityPair {
    pub high: (PolarImage, LabelMap),
    pub low: (PolarImage, LabelMap),
}

/// Builds quality pairs from labelled records: the low side carries labels
/// degraded at `severity`. Paired mode shares the image; unpaired mode draws
/// the low side from the next record.
pub fn make_pairs(records: &[(PolarImage, LabelMap)], severity: f64, paired: bool, seed: u64) -> Vec<QualityPair> {
    let n = records.len();
    (0..n)
        .map(|i| {
            let src = if paired { i } else { (i + 1) % n };
            let (img, lab) = &records[src];
            QualityPair {
                high: records[i].clone(),
                low: (img.clone(), perturb_labels(lab, severity, mix_seed(seed, i as u64))),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub gp_weight: f64,
    pub optimizer: RmsPropConfig,
    pub log_every: usize,
    pub seed: u64,
    /// Samples whose parameter gradients are held in memory at once.
    pub chunk: usize,
}

impl Default for CriticTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            gp_weight: 10.0,
            optimizer: RmsPropConfig { lr: 3e-5, ..RmsPropConfig::default() },
            log_every: 5,
            seed: 0,
            chunk: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticStep {
    pub step: usize,
    pub wasserstein: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone)]
pub struct CriticTraining {
    pub frozen: FrozenCritic,
    pub curve: Vec<CriticStep>,
}

const DIVERGENCE_STEPS: usize = 100;

/// Maximises `E f(high) - E f(low) - gp_weight * penalty` with RMSprop.
pub fn train_critic(config: CriticConfig, pairs: &[QualityPair], cfg: &CriticTrainConfig, exec: Exec) -> Result<CriticTraining> {
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("no quality pairs to train on".into()));
    }
    let critic = Critic::new(config);
    let norm = Normalization::fit(pairs.iter().flat_map(|p| [&p.high.0, &p.low.0]));
    let mut params: Vec<f32> = critic.init_params(cfg.seed);
    let mut opt = RmsProp::new(cfg.optimizer, params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xC417));
    let inputs: Vec<(Tensor<f32>, Tensor<f32>)> = pairs
        .iter()
        .map(|p| {
            (critique_input(&p.high.0, &norm, &p.high.1.one_hot()), critique_input(&p.low.0, &norm, &p.low.1.one_hot()))
        })
        .collect();
    let bs = cfg.batch_size.max(1);
    let chunk = cfg.chunk.max(1);
    let mut curve = Vec::new();
    let mut bad = 0usize;
    for step in 0..cfg.steps {
        let batch: Vec<(usize, f32)> = (0..bs).map(|_| (rng.gen_range(0..inputs.len()), rng.gen::<f32>())).collect();
        let scale = 1.0 / bs as f32;
        let gp = cfg.gp_weight as f32 * scale;
        let mut grad = vec![0.0f32; params.len()];
        let (mut wsum, mut psum) = (0.0f64, 0.0f64);
        for group in batch.chunks(chunk) {
            let parts = map_indexed(exec, group.len(), |k| -> Result<(Vec<f32>, f64, f64)> {
                let (idx, t) = group[k];
                let (hi, lo) = &inputs[idx];
                let mut g = vec![0.0f32; params.len()];
                let sh = critic.accumulate_score_grad(&params, hi, -scale, &mut g)?;
                let sl = critic.accumulate_score_grad(&params, lo, scale, &mut g)?;
                let mut mix = hi.clone();
                mix.data.iter_mut().zip(&lo.data).for_each(|(a, &b)| *a = t * *a + (1.0 - t) * b);
                let pen = critic.accumulate_penalty_grad(&params, &mix, gp, Some(&mut g))?;
                Ok((g, (sh - sl) as f64, pen as f64))
            });
            for part in parts {
                let (g, w, pen) = part?;
                grad.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
                wsum += w;
                psum += pen;
            }
        }
        let wasserstein = wsum / bs as f64;
        let penalty = psum / bs as f64;
        let loss = -wasserstein + cfg.gp_weight * penalty;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            bad += 1;
            log::warn!("critic step {step}: non-finite loss {loss}");
            if bad >= DIVERGENCE_STEPS {
                return Err(Error::Divergence { steps: bad });
            }
            continue;
        }
        bad = 0;
        opt.step(&mut params, &grad);
        if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            log::info!("critic step {step}: W {wasserstein:.4} GP {penalty:.4}");
        }
        curve.push(CriticStep { step, wasserstein, penalty });
    }
    Ok(CriticTraining { frozen: FrozenCritic { critic, params, norm }, curve })
}

/// Area under the ROC curve of `pos` scored above `neg` (ties count half).
pub fn roc_auc(pos: &[f64], neg: &[f64]) -> f64 {
    if pos.is_empty() || neg.is_empty() {
        return 0.5;
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&v| (v, true)).chain(neg.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Mann-Whitney U with mid-ranks.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let np = pos.len() as f64;
    (rank_sum - np * (np + 1.0) / 2.0) / (np * neg.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Critic {
        Critic::new(CriticConfig { r: 4, a: 8, features: [2, 3, 2], hidden: [5, 4, 3], padding: AngularPadding::Circular })
    }

    fn random_input(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(INPUT_CHANNELS, 4, 8, (0..INPUT_CHANNELS * 32).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn parameter_count_matches_layer_arithmetic() {
        let c = Critic::new(CriticConfig::new(64, 128));
        let conv = |cin: usize, cout: usize| cout * cin * 9 + cout;
        let dense = |i: usize, o: usize| i * o + o;
        let expected = conv(9, 32)
            + conv(32, 32)
            + conv(32, 64)
            + conv(64, 64)
            + conv(64, 128)
            + conv(128, 128)
            + dense(128 * 8 * 16, 1024)
            + dense(1024, 256)
            + dense(256, 128)
            + dense(128, 1);
        assert_eq!(c.param_count(), expected);
    }

    #[test]
    fn zero_output_layer_scores_zero() {
        let c = small();
        let mut p: Vec<f64> = c.init_params(1);
        c.zero_output_layer(&mut p);
        assert_eq!(c.score(&p, &random_input(2)).unwrap(), 0.0);
        let (s, g) = c.input_gradient(&p, &Tensor::zeros(INPUT_CHANNELS, 4, 8)).unwrap();
        assert_eq!(s, 0.0);
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_spatial_size_is_rejected() {
        let c = small();
        let p: Vec<f64> = c.init_params(1);
        assert!(matches!(c.score(&p, &Tensor::zeros(INPUT_CHANNELS, 4, 4)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let c = small();
        let p: Vec<f64> = c.init_params(3);
        let x = random_input(4);
        let (_, g) = c.input_gradient(&p, &x).unwrap();
        let mut xp = x.clone();
        for k in (0..x.data.len()).step_by(7) {
            xp.data[k] = x.data[k] + 1e-6;
            let fp = c.score(&p, &xp).unwrap();
            xp.data[k] = x.data[k] - 1e-6;
            let fm = c.score(&p, &xp).unwrap();
            xp.data[k] = x.data[k];
            assert!(((fp - fm) / 2e-6 - g.data[k]).abs() < 1e-7, "input {k}");
        }
    }

    #[test]
    fn score_parameter_gradient_matches_finite_differences() {
        let c = small();
        let mut p: Vec<f64> = c.init_params(5);
        let x = random_input(6);
        let mut g = vec![0.0; p.len()];
        c.accumulate_score_grad(&p, &x, 1.0, &mut g).unwrap();
        for k in (0..p.len()).step_by(5) {
            let orig = p[k];
            p[k] = orig + 1e-6;
            let fp = c.score(&p, &x).unwrap();
            p[k] = orig - 1e-6;
            let fm = c.score(&p, &x).unwrap();
            p[k] = orig;
            assert!(((fp - fm) / 2e-6 - g[k]).abs() < 1e-7, "param {k}");
        }
    }

    #[test]
    fn penalty_parameter_gradient_matches_finite_differences() {
        let c = small();
        let mut p: Vec<f64> = c.init_params(7);
        let x = random_input(8);
        let mut g = vec![0.0; p.len()];
        c.accumulate_penalty_grad(&p, &x, 1.0, Some(&mut g)).unwrap();
        let pen = |p: &[f64]| c.accumulate_penalty_grad(p, &x, 1.0, None).unwrap();
        for k in (0..p.len()).step_by(3) {
            let orig = p[k];
            p[k] = orig + 1e-6;
            let fp = pen(&p);
            p[k] = orig - 1e-6;
            let fm = pen(&p);
            p[k] = orig;
            let fd = (fp - fm) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "param {k}: fd {fd} analytic {}", g[k]);
        }
    }

    #[test]
    fn linear_critic_penalties() {
        let w = [0.6, 0.8, 0.0];
        let real = vec![vec![1.0, 2.0, 3.0], vec![0.0, -1.0, 5.0]];
        let fake = vec![vec![0.5, 0.5, 0.5], vec![2.0, 2.0, 2.0]];
        let unit = gradient_penalty(|_| w.to_vec(), &real, &fake, &[0.3, 0.9]);
        assert!(unit.abs() < 1e-12);
        let three = gradient_penalty(|_| w.iter().map(|v| 3.0 * v).collect(), &real, &fake, &[0.3, 0.9]);
        assert!((three - 4.0).abs() < 1e-12);
    }

    #[test]
    fn auc_handles_ties_and_ordering() {
        assert_eq!(roc_auc(&[2.0, 3.0], &[0.0, 1.0]), 1.0);
        assert_eq!(roc_auc(&[0.0, 1.0], &[2.0, 3.0]), 0.0);
        assert_eq!(roc_auc(&[1.0, 1.0], &[1.0, 1.0]), 0.5);
    }

    #[test]
    fn checkpoint_round_trip_restores_scores() {
        let c = Critic::new(CriticConfig { r: 8, a: 8, features: [2, 2, 2], hidden: [4, 4, 4], padding: AngularPadding::Circular });
        let frozen = FrozenCritic { params: c.init_params(9), critic: c, norm: Normalization::identity(3) };
        let back = FrozenCritic::from_checkpoint(&Checkpoint::from_bytes(&frozen.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.params, frozen.params);
        assert_eq!(back.critic.config, frozen.critic.config);
    }
}
