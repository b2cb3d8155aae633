//! The five segmentation loss terms and their weighted sum.
//!
//! Every term returns its value together with the gradient with respect to
//! the predicted probability field `yhat` (layout `(r, a, 6)`). Batches are
//! evaluated by concatenating cross-sections along the angular axis, which
//! leaves every radial-only construction (boundary mask, boundary
//! cardinality) unchanged and pools the class statistics over the batch.

use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, ProbMap, NUM_CLASSES};
use crate::error::{Error, Result};

/// How two boundary-cardinality vectors are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SigmaKind {
    /// Mean absolute per-A-line difference.
    #[default]
    Norm1,
    /// Root-mean-square per-A-line difference.
    Norm2,
    /// Largest per-A-line difference.
    Max,
}

impl std::str::FromStr for SigmaKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "norm1" => Ok(Self::Norm1),
            "norm2" => Ok(Self::Norm2),
            "max" => Ok(Self::Max),
            other => Err(Error::InvalidConfig(format!("unknown sigma `{other}`"))),
        }
    }
}

pub const LAMBDA_MIN: f64 = 1e-3;
pub const LAMBDA_MAX: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_wce: f64,
    pub lambda_dice: f64,
    pub lambda_bp: f64,
    pub lambda_ap: f64,
    pub lambda_bc: f64,
    pub epsilon: f64,
    pub b: usize,
    #[serde(rename = "M")]
    pub m: f64,
    pub sigma_kind: SigmaKind,
    pub gp_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let epsilon = 1e-7;
        Self {
            lambda_wce: 1.0,
            lambda_dice: 1.0,
            lambda_bp: 1.0,
            lambda_ap: 1.0,
            lambda_bc: 1.0,
            epsilon,
            b: 10,
            m: 100.0 / epsilon,
            sigma_kind: SigmaKind::Norm1,
            gp_weight: 10.0,
        }
    }
}

impl LossConfig {
    /// Only the weighted cross-entropy term enabled.
    pub fn wce_only() -> Self {
        Self { lambda_dice: 0.0, lambda_bp: 0.0, lambda_ap: 0.0, lambda_bc: 0.0, ..Self::default() }
    }

    pub fn lambdas(&self) -> [f64; 5] {
        [self.lambda_wce, self.lambda_dice, self.lambda_bp, self.lambda_ap, self.lambda_bc]
    }

    pub fn with_lambdas(mut self, l: [f64; 5]) -> Self {
        [self.lambda_wce, self.lambda_dice, self.lambda_bp, self.lambda_ap, self.lambda_bc] = l;
        self
    }

    /// A weight of exactly zero disables its term; any other weight must lie
    /// in `[1e-3, 1e3]`.
    pub fn validate(&self) -> Result<()> {
        for (name, l) in TERM_NAMES.iter().zip(self.lambdas()) {
            if l != 0.0 && !(LAMBDA_MIN..=LAMBDA_MAX).contains(&l) {
                return Err(Error::InvalidConfig(format!("lambda_{name} = {l} outside [1e-3, 1e3]")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be > 0".into()));
        }
        if self.b < 1 {
            return Err(Error::InvalidConfig("b must be >= 1".into()));
        }
        if !(self.m > 0.0) {
            return Err(Error::InvalidConfig("M must be > 0".into()));
        }
        if !(self.gp_weight >= 0.0) {
            return Err(Error::InvalidConfig("gp_weight must be >= 0".into()));
        }
        Ok(())
    }
}

pub const TERM_NAMES: [&str; 5] = ["wce", "dice", "bp", "ap", "bc"];

/// A loss value and its gradient with respect to `yhat`.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl Term {
    fn zero(len: usize) -> Self {
        Self { value: 0.0, grad: vec![0.0; len] }
    }
}

fn check_shapes(y: &LabelMap, yhat: &ProbMap) {
    assert!(y.r == yhat.r && y.a == yhat.a, "label and probability grids differ");
}

/// Inverse-population class weights `|Y| / |Y_c|`; `None` for absent classes.
pub fn class_weights(y: &LabelMap) -> [Option<f64>; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    for &c in &y.classes {
        counts[c as usize - 1] += 1;
    }
    let n = y.classes.len() as f64;
    counts.map(|k| (k > 0).then(|| n / k as f64))
}

/// Weighted cross-entropy. Probabilities are clipped to `[eps, 1]` before the
/// logarithm; absent classes contribute nothing.
pub fn wce(y: &LabelMap, yhat: &ProbMap, eps: f64) -> Term {
    check_shapes(y, yhat);
    let weights = class_weights(y);
    let n = y.classes.len() as f64;
    let mut t = Term::zero(yhat.probs.len());
    for (p, &code) in y.classes.iter().enumerate() {
        let c = code as usize - 1;
        let Some(w) = weights[c] else { continue };
        let k = p * NUM_CLASSES + c;
        let q = yhat.probs[k];
        let clipped = q.clamp(eps, 1.0);
        t.value -= w * clipped.ln() / n;
        if q > eps && q < 1.0 {
            t.grad[k] = -w / (n * q);
        }
    }
    t
}

/// Generalised Dice loss `1 - (2/6) sum_c (I_c + eps) / (U_c + eps)` with
/// `I_c = sum y yhat` and `U_c = sum y^2 + yhat^2`.
pub fn dice_loss(y: &LabelMap, yhat: &ProbMap, eps: f64) -> Term {
    check_shapes(y, yhat);
    let onehot = y.one_hot();
    let mut inter = [0.0; NUM_CLASSES];
    let mut union = [0.0; NUM_CLASSES];
    for (k, (&t, &q)) in onehot.iter().zip(&yhat.probs).enumerate() {
        let c = k % NUM_CLASSES;
        inter[c] += t * q;
        union[c] += t * t + q * q;
    }
    let scale = 2.0 / NUM_CLASSES as f64;
    let mut value = 1.0;
    for c in 0..NUM_CLASSES {
        value -= scale * (inter[c] + eps) / (union[c] + eps);
    }
    let grad = onehot
        .iter()
        .zip(&yhat.probs)
        .enumerate()
        .map(|(k, (&t, &q))| {
            let c = k % NUM_CLASSES;
            let u = union[c] + eps;
            -scale * (t / u - (inter[c] + eps) * 2.0 * q / (u * u))
        })
        .collect();
    Term { value, grad }
}

/// Pixels within `b` radial pixels of an inter-class boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundaryMask {
    pub r: usize,
    pub a: usize,
    pub mask: Vec<bool>,
}

impl BoundaryMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// Radial dilation of a binary A-line by a `(2b + 1)`-long structuring element.
fn dilate_radial(col: &[bool], b: usize) -> Vec<bool> {
    let r = col.len();
    let mut prefix = vec![0usize; r + 1];
    for i in 0..r {
        prefix[i + 1] = prefix[i] + col[i] as usize;
    }
    (0..r)
        .map(|i| {
            let lo = i.saturating_sub(b);
            let hi = (i + b + 1).min(r);
            prefix[hi] > prefix[lo]
        })
        .collect()
}

/// Union over classes of `dilate(y_c) xor y_c` and `dilate(1 - y_c) xor (1 - y_c)`,
/// dilating along the radial axis only. Depends on `y` alone.
pub fn boundary_mask(y: &LabelMap, b: usize) -> BoundaryMask {
    assert!(b >= 1, "boundary radius must be >= 1");
    let (r, a) = (y.r, y.a);
    let mut mask = vec![false; r * a];
    for j in 0..a {
        for c in 1..=NUM_CLASSES as u8 {
            let plane: Vec<bool> = (0..r).map(|i| y.classes[i * a + j] == c).collect();
            if !plane.iter().any(|&v| v) {
                continue;
            }
            let complement: Vec<bool> = plane.iter().map(|&v| !v).collect();
            let dp = dilate_radial(&plane, b);
            let dc = dilate_radial(&complement, b);
            for i in 0..r {
                if (dp[i] ^ plane[i]) || (dc[i] ^ complement[i]) {
                    mask[i * a + j] = true;
                }
            }
        }
    }
    BoundaryMask { r, a, mask }
}

/// Cross-entropy restricted to the boundary mask and normalised by its size.
/// An empty mask yields zero.
pub fn bp_loss(y: &LabelMap, yhat: &ProbMap, beta: &BoundaryMask, eps: f64) -> Term {
    check_shapes(y, yhat);
    let mut t = Term::zero(yhat.probs.len());
    let count = beta.count();
    if count == 0 {
        log::warn!("boundary precision loss: empty boundary mask (single-class tile)");
        return t;
    }
    let norm = count as f64;
    for (p, &code) in y.classes.iter().enumerate() {
        if !beta.mask[p] {
            continue;
        }
        let k = p * NUM_CLASSES + code as usize - 1;
        let q = yhat.probs[k];
        t.value -= q.clamp(eps, 1.0).ln() / norm;
        if q > eps && q < 1.0 {
            t.grad[k] = -1.0 / (norm * q);
        }
    }
    t
}

/// Index of the first maximal entry.
fn first_argmax(px: &[f64]) -> usize {
    let mut best = 0;
    for c in 1..px.len() {
        if px[c] > px[best] {
            best = c;
        }
    }
    best
}

/// Saturated argmax proxy `1 + tanh(M (yhat - max_c yhat))`, same layout as the input.
pub fn soft_argmax(probs: &[f64], m: f64) -> Vec<f64> {
    let mut out = vec![0.0; probs.len()];
    for (px, o) in probs.chunks_exact(NUM_CLASSES).zip(out.chunks_exact_mut(NUM_CLASSES)) {
        let top = px[first_argmax(px)];
        for c in 0..NUM_CLASSES {
            o[c] = 1.0 + (m * (px[c] - top)).tanh();
        }
    }
    out
}

/// Pulls a gradient on the soft-argmax output back onto the probabilities.
/// The max reduction routes its share to the first maximal channel.
fn soft_argmax_backward(probs: &[f64], m: f64, dsoft: &[f64]) -> Vec<f64> {
    let mut grad = vec![0.0; probs.len()];
    for ((px, ds), g) in probs
        .chunks_exact(NUM_CLASSES)
        .zip(dsoft.chunks_exact(NUM_CLASSES))
        .zip(grad.chunks_exact_mut(NUM_CLASSES))
    {
        let k = first_argmax(px);
        for c in 0..NUM_CLASSES {
            if c == k {
                continue;
            }
            let th = (m * (px[c] - px[k])).tanh();
            let d = ds[c] * m * (1.0 - th * th);
            g[c] += d;
            g[k] -= d;
        }
    }
    grad
}

/// Soft boundary count per A-line: `0.5 * sum_i sum_c |S[i+1, j, c] - S[i, j, c]|`.
pub fn boundary_cardinality(soft: &[f64], r: usize, a: usize) -> Vec<f64> {
    let mut bc = vec![0.0; a];
    for i in 0..r.saturating_sub(1) {
        for (j, v) in bc.iter_mut().enumerate() {
            let p0 = (i * a + j) * NUM_CLASSES;
            let p1 = ((i + 1) * a + j) * NUM_CLASSES;
            for c in 0..NUM_CLASSES {
                *v += 0.5 * (soft[p1 + c] - soft[p0 + c]).abs();
            }
        }
    }
    bc
}

fn boundary_cardinality_backward(soft: &[f64], r: usize, a: usize, dbc: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; soft.len()];
    for i in 0..r.saturating_sub(1) {
        for j in 0..a {
            let p0 = (i * a + j) * NUM_CLASSES;
            let p1 = ((i + 1) * a + j) * NUM_CLASSES;
            for c in 0..NUM_CLASSES {
                let diff = soft[p1 + c] - soft[p0 + c];
                let s = 0.5 * dbc[j] * sign(diff);
                g[p1 + c] += s;
                g[p0 + c] -= s;
            }
        }
    }
    g
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Applies `sigma` to a per-A-line difference vector; returns value and `d sigma / d diff`.
pub fn sigma(kind: SigmaKind, diff: &[f64]) -> (f64, Vec<f64>) {
    let a = diff.len().max(1) as f64;
    match kind {
        SigmaKind::Norm1 => (diff.iter().map(|d| d.abs()).sum::<f64>() / a, diff.iter().map(|&d| sign(d) / a).collect()),
        SigmaKind::Norm2 => {
            let rms = (diff.iter().map(|d| d * d).sum::<f64>() / a).sqrt();
            let g = if rms > 0.0 { diff.iter().map(|&d| d / (a * rms)).collect() } else { vec![0.0; diff.len()] };
            (rms, g)
        }
        SigmaKind::Max => {
            let mut g = vec![0.0; diff.len()];
            let Some((j, v)) = diff.iter().map(|d| d.abs()).enumerate().fold(None, |best: Option<(usize, f64)>, (j, v)| {
                match best {
                    Some((_, bv)) if bv >= v => best,
                    _ => Some((j, v)),
                }
            }) else {
                return (0.0, g);
            };
            g[j] = sign(diff[j]);
            (v, g)
        }
    }
}

/// Boundary-cardinality loss: `sigma(BC(S(yhat)) - BC(S(y)))`.
pub fn bc_loss(y: &LabelMap, yhat: &ProbMap, cfg: &LossConfig) -> Term {
    check_shapes(y, yhat);
    let (r, a) = (y.r, y.a);
    let bc_true = boundary_cardinality(&soft_argmax(&y.one_hot(), cfg.m), r, a);
    let soft = soft_argmax(&yhat.probs, cfg.m);
    let bc_pred = boundary_cardinality(&soft, r, a);
    let diff: Vec<f64> = bc_pred.iter().zip(&bc_true).map(|(p, t)| p - t).collect();
    let (value, dsigma) = sigma(cfg.sigma_kind, &diff);
    let dsoft = boundary_cardinality_backward(&soft, r, a, &dsigma);
    Term { value, grad: soft_argmax_backward(&yhat.probs, cfg.m, &dsoft) }
}

/// Per-term values; `None` for terms that were not evaluated (zero weight).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub wce: Option<f64>,
    pub dice: Option<f64>,
    pub bp: Option<f64>,
    pub ap: Option<f64>,
    pub bc: Option<f64>,
}

impl TermValues {
    pub fn as_array(&self) -> [Option<f64>; 5] {
        [self.wce, self.dice, self.bp, self.ap, self.bc]
    }
}

/// Weighted sum `sum_k lambda_k L_k` over the evaluated terms.
pub fn combine(values: &TermValues, cfg: &LossConfig) -> Result<f64> {
    let mut total = 0.0;
    for ((name, v), l) in TERM_NAMES.iter().zip(values.as_array()).zip(cfg.lambdas()) {
        let Some(v) = v else { continue };
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { term: name, value: v });
        }
        if l != 0.0 {
            total += l * v;
        }
    }
    Ok(total)
}

/// Evaluates every enabled image-only term (all but the critic term) and the
/// λ-weighted gradient. `ap` carries an externally computed critic term.
pub fn combined_loss(y: &LabelMap, yhat: &ProbMap, ap: Option<Term>, cfg: &LossConfig) -> Result<(Term, TermValues)> {
    let len = yhat.probs.len();
    let mut grad = vec![0.0; len];
    let mut values = TermValues::default();
    let mut add = |slot: &mut Option<f64>, lambda: f64, term: Term| {
        *slot = Some(term.value);
        for (g, t) in grad.iter_mut().zip(&term.grad) {
            *g += lambda * t;
        }
    };
    if cfg.lambda_wce != 0.0 {
        add(&mut values.wce, cfg.lambda_wce, wce(y, yhat, cfg.epsilon));
    }
    if cfg.lambda_dice != 0.0 {
        add(&mut values.dice, cfg.lambda_dice, dice_loss(y, yhat, cfg.epsilon));
    }
    if cfg.lambda_bp != 0.0 {
        let beta = boundary_mask(y, cfg.b);
        add(&mut values.bp, cfg.lambda_bp, bp_loss(y, yhat, &beta, cfg.epsilon));
    }
    if cfg.lambda_ap != 0.0 {
        if let Some(t) = ap {
            add(&mut values.ap, cfg.lambda_ap, t);
        }
    }
    if cfg.lambda_bc != 0.0 {
        add(&mut values.bc, cfg.lambda_bc, bc_loss(y, yhat, cfg));
    }
    let value = combine(&values, cfg)?;
    Ok((Term { value, grad }, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Class;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn aline_labels(col: &[u8]) -> LabelMap {
        LabelMap::new(col.len(), 1, col.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_has_near_zero_wce() {
        let y = LabelMap::new(2, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let t = wce(&y, &ProbMap::from_labels(&y), 1e-7);
        assert!(t.value.abs() <= 6.0 * (1.0f64 - 1e-7).ln().abs() / 6.0 + 1e-15);
    }

    #[test]
    fn class_weights_follow_inverse_population() {
        let mut codes = vec![1u8; 75];
        codes.extend(vec![2u8; 25]);
        let w = class_weights(&LabelMap::new(10, 10, codes).unwrap());
        assert!((w[0].unwrap() - 4.0 / 3.0).abs() < 1e-12);
        assert!((w[1].unwrap() - 4.0).abs() < 1e-12);
        assert!(w[2].is_none());
    }

    #[test]
    fn dice_is_zero_for_perfect_prediction_with_all_classes() {
        let y = LabelMap::new(2, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert!(dice_loss(&y, &ProbMap::from_labels(&y), 1e-7).value.abs() < 1e-5);
    }

    #[test]
    fn dice_term_for_absent_class_is_one() {
        // Only classes 1 and 2 present, predicted perfectly: four absent classes
        // each contribute eps/eps = 1, present ones ~1/2.
        let y = LabelMap::new(2, 2, vec![1, 1, 2, 2]).unwrap();
        let v = dice_loss(&y, &ProbMap::from_labels(&y), 1e-7).value;
        let expected = 1.0 - (2.0 / 6.0) * (4.0 + 2.0 * (2.0 + 1e-7) / (4.0 + 1e-7));
        assert!((v - expected).abs() < 1e-12);
        assert!(v < 0.0, "documented negative range");
    }

    #[test]
    fn boundary_mask_on_single_aline() {
        let beta = boundary_mask(&aline_labels(&[2, 2, 2, 3, 3, 3]), 2);
        assert_eq!(beta.mask, vec![false, true, true, true, true, false]);
    }

    #[test]
    fn uniform_map_has_empty_mask_and_zero_bp() {
        let y = LabelMap::filled(8, 8, Class::Lumen);
        let beta = boundary_mask(&y, 3);
        assert!(beta.is_empty());
        let yhat = ProbMap::new_unchecked(8, 8, vec![1.0 / 6.0; 8 * 8 * 6]);
        assert_eq!(bp_loss(&y, &yhat, &beta, 1e-7).value, 0.0);
    }

    #[test]
    fn errors_outside_the_mask_are_invisible_to_bp() {
        let col = [2u8, 2, 2, 2, 2, 2, 3, 3, 3, 3, 3, 3];
        let y = aline_labels(&col);
        let beta = boundary_mask(&y, 2);
        let mut yhat = ProbMap::from_labels(&y);
        // Pixel 0 is far from the boundary: predict it wrong.
        yhat.probs[..6].copy_from_slice(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(!beta.mask[0]);
        assert!(bp_loss(&y, &yhat, &beta, 1e-7).value.abs() < 1e-6);
        assert!(wce(&y, &yhat, 1e-7).value > 1.0);
    }

    #[test]
    fn soft_argmax_limits() {
        let uniform = vec![1.0 / 6.0; 6];
        assert_eq!(soft_argmax(&uniform, 1e9), vec![1.0; 6]);
        let hard = vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let s = soft_argmax(&hard, 1e9);
        for (c, v) in s.iter().enumerate() {
            let want = if c == 2 { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-6);
        }
    }

    #[test]
    fn cardinality_counts_transitions_of_hard_alines() {
        // L L I I M O: three transitions.
        let y = aline_labels(&[2, 2, 3, 3, 4, 1]);
        let bc = boundary_cardinality(&soft_argmax(&y.one_hot(), 1e9), 6, 1);
        assert!((bc[0] - 3.0).abs() < 1e-3);
        let flat = aline_labels(&[2; 6]);
        assert_eq!(boundary_cardinality(&soft_argmax(&flat.one_hot(), 1e9), 6, 1), vec![0.0]);
    }

    #[test]
    fn spurious_layer_costs_two_transitions_per_aline() {
        let (r, a, k) = (12, 10, 3);
        let mut codes = Vec::new();
        for i in 0..r {
            for _ in 0..a {
                codes.push(match i {
                    0..=2 => 2,
                    3..=5 => 3,
                    6..=8 => 4,
                    _ => 1,
                });
            }
        }
        let y = LabelMap::new(r, a, codes.clone()).unwrap();
        let mut pred = codes;
        for j in 0..k {
            pred[10 * a + j] = 4; // an isolated media run inside outside
        }
        let yhat = ProbMap::from_labels(&LabelMap::new(r, a, pred).unwrap());
        let cfg = LossConfig::default();
        assert!((bc_loss(&y, &yhat, &cfg).value - 2.0 * k as f64 / a as f64).abs() < 1e-3);
        let max_cfg = LossConfig { sigma_kind: SigmaKind::Max, ..cfg };
        assert!((bc_loss(&y, &yhat, &max_cfg).value - 2.0).abs() < 1e-3);
        assert!(bc_loss(&y, &ProbMap::from_labels(&y), &cfg).value < 1e-3);
    }

    #[test]
    fn combine_is_linear_and_rejects_non_finite_terms() {
        let values = TermValues { wce: Some(0.7), dice: Some(0.2), bp: Some(1.1), ap: Some(-0.3), bc: Some(0.05) };
        let cfg = LossConfig::default().with_lambdas([1.0, 2.0, 0.5, 0.1, 3.0]);
        let v = combine(&values, &cfg).unwrap();
        let doubled = cfg.with_lambdas([2.0, 4.0, 1.0, 0.2, 6.0]);
        assert!((combine(&values, &doubled).unwrap() - 2.0 * v).abs() < 1e-12);
        let only_wce = cfg.with_lambdas([1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(combine(&values, &only_wce).unwrap(), 0.7);
        let bad = TermValues { bc: Some(f64::NAN), ..values };
        assert!(matches!(combine(&bad, &cfg), Err(Error::NonFiniteLoss { term: "bc", .. })));
    }

    #[test]
    fn lambda_range_is_validated() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig::wce_only().validate().is_ok());
        assert!(LossConfig { lambda_bp: 5e3, ..Default::default() }.validate().is_err());
        assert!(LossConfig { lambda_bp: 1e-4, ..Default::default() }.validate().is_err());
        assert!(LossConfig { b: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn terms_are_invariant_under_joint_angular_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (r, a) = (6, 8);
        let y = LabelMap::new(r, a, (0..r * a).map(|_| rng.gen_range(1..=6)).collect()).unwrap();
        let mut probs = Vec::new();
        for _ in 0..r * a {
            let raw: Vec<f64> = (0..6).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|v| v / s));
        }
        let yhat = ProbMap::new(r, a, probs).unwrap();
        let cfg = LossConfig { m: 50.0, b: 2, ..Default::default() };
        let (ys, ps) = (y.roll_angular(3), yhat.roll_angular(3));
        let pairs = [
            (wce(&y, &yhat, 1e-7).value, wce(&ys, &ps, 1e-7).value),
            (dice_loss(&y, &yhat, 1e-7).value, dice_loss(&ys, &ps, 1e-7).value),
            (
                bp_loss(&y, &yhat, &boundary_mask(&y, 2), 1e-7).value,
                bp_loss(&ys, &ps, &boundary_mask(&ys, 2), 1e-7).value,
            ),
            (bc_loss(&y, &yhat, &cfg).value, bc_loss(&ys, &ps, &cfg).value),
        ];
        for (x, s) in pairs {
            assert!((x - s).abs() < 1e-12);
        }
    }
}
