//! Polar-domain augmentation. Rotation and mirroring of the cross-section are
//! angular shifts and reversals; scaling about the catheter is a radial
//! resample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Class, LabelMap, PolarImage, DEPOLARIZATION, NUM_CHANNELS};
use crate::phantom::mix_seed;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Inclusion probability of each transform.
    pub probability: f64,
    pub gain_range: (f32, f32),
    /// Offset bound as a fraction of the channel's value range.
    pub offset_fraction: f32,
    pub zoom_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { probability: 0.5, gain_range: (0.8, 1.25), offset_fraction: 0.1, zoom_range: (0.9, 1.1) }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.probability)
            && self.gain_range.0 > 0.0
            && self.gain_range.0 <= self.gain_range.1
            && self.offset_fraction >= 0.0
            && self.zoom_range.0 > 0.0
            && self.zoom_range.0 <= self.zoom_range.1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("augment ranges: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelShift {
    pub gain: f32,
    /// Fraction of the channel range.
    pub offset: f32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    /// Angular shift as a fraction of a full turn, in [0, 1).
    pub rotation: Option<f64>,
    pub mirror: bool,
    pub intensity: Option<[ChannelShift; NUM_CHANNELS]>,
    pub zoom: Option<f64>,
}

impl AugmentPlan {
    pub fn is_empty(&self) -> bool {
        self.rotation.is_none() && !self.mirror && self.intensity.is_none() && self.zoom.is_none()
    }

    /// Whole A-line shift for an image `a` A-lines wide.
    pub fn shift(&self, a: usize) -> usize {
        self.rotation.map_or(0, |f| ((f * a as f64) as usize).min(a - 1))
    }
}

pub fn sample_plan(seed: u64, cfg: &AugmentConfig) -> AugmentPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = cfg.probability;
    // Inclusion draws come first so they are independent of parameter draws.
    let on: [bool; 4] = std::array::from_fn(|_| rng.gen_bool(p));
    let rotation = on[0].then(|| rng.gen_range(0.0..1.0));
    let mirror = on[1];
    let intensity = on[2].then(|| {
        std::array::from_fn(|_| ChannelShift {
            gain: rng.gen_range(cfg.gain_range.0..=cfg.gain_range.1),
            offset: rng.gen_range(-cfg.offset_fraction..=cfg.offset_fraction),
        })
    });
    let zoom = on[3].then(|| rng.gen_range(cfg.zoom_range.0..=cfg.zoom_range.1));
    AugmentPlan { rotation, mirror, intensity, zoom }
}

/// Source coordinate (in pixels) of output row `i` under radial zoom `z`.
fn zoom_source(i: usize, z: f64) -> f64 {
    (i as f64 + 0.5) / z - 0.5
}

/// Nearest source row of output row `i`, clamped to the grid.
pub fn zoom_nearest(i: usize, z: f64, r: usize) -> usize {
    let s = zoom_source(i, z);
    if s <= 0.0 {
        0
    } else {
        ((s + 0.5).floor() as usize).min(r - 1)
    }
}

fn zoom_labels(labels: &LabelMap, z: f64) -> Result<LabelMap> {
    let (r, a) = (labels.r, labels.a);
    // The deepest non-outside pixel must still land inside the grid.
    let deepest = (0..r).rev().find(|&i| (0..a).any(|j| labels.get(i, j) != Class::Outside));
    if let Some(d) = deepest {
        if (0..r).all(|i| zoom_nearest(i, z, r) < d) {
            return Err(Error::ScaleOutOfRange { factor: z });
        }
    }
    let mut out = labels.clone();
    for i in 0..r {
        let s = zoom_nearest(i, z, r);
        out.classes[i * a..(i + 1) * a].copy_from_slice(&labels.classes[s * a..(s + 1) * a]);
    }
    Ok(out)
}

fn zoom_image(image: &PolarImage, z: f64) -> PolarImage {
    let (r, a) = (image.r, image.a);
    let mut out = image.clone();
    for c in 0..NUM_CHANNELS {
        let src = image.channel(c);
        let dst = out.channel_mut(c);
        for i in 0..r {
            let s = zoom_source(i, z).clamp(0.0, (r - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(r - 1);
            let t = (s - lo as f64) as f32;
            for j in 0..a {
                dst[i * a + j] = src[lo * a + j] * (1.0 - t) + src[hi * a + j] * t;
            }
        }
    }
    out
}

fn mirror_image(image: &PolarImage) -> PolarImage {
    let mut out = image.clone();
    let a = image.a;
    for (dst, src) in out.data.chunks_mut(a).zip(image.data.chunks(a)) {
        for j in 0..a {
            dst[j] = src[a - 1 - j];
        }
    }
    out
}

fn mirror_labels(labels: &LabelMap) -> LabelMap {
    let mut out = labels.clone();
    for row in out.classes.chunks_mut(labels.a) {
        row.reverse();
    }
    out
}

fn roll_image(image: &PolarImage, k: usize) -> PolarImage {
    let mut out = image.clone();
    for row in out.data.chunks_mut(image.a) {
        row.rotate_right(k);
    }
    out
}

fn shift_intensity(image: &mut PolarImage, shifts: &[ChannelShift; NUM_CHANNELS]) {
    for (c, s) in shifts.iter().enumerate() {
        let ch = image.channel_mut(c);
        let (lo, hi) = ch.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let offset = s.offset * (hi - lo);
        for v in ch.iter_mut() {
            *v = s.gain * *v + offset;
            if c == DEPOLARIZATION {
                *v = v.clamp(0.0, 1.0);
            }
        }
    }
}

/// Applies zoom, mirror, rotation and intensity changes, in that order.
pub fn apply(plan: &AugmentPlan, image: &PolarImage, labels: &LabelMap) -> Result<(PolarImage, LabelMap)> {
    if (image.r, image.a) != (labels.r, labels.a) {
        return Err(Error::ShapeMismatch(format!("image {}x{} vs labels {}x{}", image.r, image.a, labels.r, labels.a)));
    }
    let (mut img, mut lab) = (image.clone(), labels.clone());
    if let Some(z) = plan.zoom {
        lab = zoom_labels(&lab, z)?;
        img = zoom_image(&img, z);
    }
    if plan.mirror {
        img = mirror_image(&img);
        lab = mirror_labels(&lab);
    }
    let k = plan.shift(image.a);
    if k > 0 {
        img = roll_image(&img, k);
        lab = lab.roll_angular(k);
    }
    if let Some(shifts) = &plan.intensity {
        shift_intensity(&mut img, shifts);
    }
    Ok((img, lab))
}

/// Maps a pixel `(i, j)` of the original grid to its augmented position (for
/// zoom, the first output row whose nearest source is at or below `i`).
pub fn map_point(plan: &AugmentPlan, (i, j): (usize, usize), r: usize, a: usize) -> (usize, usize) {
    let i = match plan.zoom {
        Some(z) => (0..r).find(|&o| zoom_nearest(o, z, r) >= i).unwrap_or(r),
        None => i,
    };
    let j = if plan.mirror { a - 1 - j } else { j };
    (i, (j + plan.shift(a)) % a)
}

/// Samples and applies a plan keyed by `seed`, resampling when the zoom would
/// push the wall out of the grid. Falls back to a plan without zoom.
pub fn augment(seed: u64, cfg: &AugmentConfig, image: &PolarImage, labels: &LabelMap) -> Result<(PolarImage, LabelMap, AugmentPlan)> {
    for attempt in 0..8 {
        let plan = sample_plan(mix_seed(seed, attempt), cfg);
        match apply(&plan, image, labels) {
            Ok((i, l)) => return Ok((i, l, plan)),
            Err(Error::ScaleOutOfRange { factor }) => log::debug!("zoom {factor} rejected, resampling"),
            Err(e) => return Err(e),
        }
    }
    let plan = AugmentPlan { zoom: None, ..sample_plan(mix_seed(seed, 8), cfg) };
    let (i, l) = apply(&plan, image, labels)?;
    Ok((i, l, plan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate, PhantomConfig};
    use crate::postprocess::{extract_boundary, Interface};

    fn phantom(seed: u64) -> (PolarImage, LabelMap) {
        let p = generate(&PhantomConfig { seed, ..PhantomConfig::for_grid(32, 64) }).unwrap();
        (p.image, p.labels)
    }

    #[test]
    fn plans_are_deterministic() {
        let cfg = AugmentConfig::default();
        assert_eq!(sample_plan(9, &cfg), sample_plan(9, &cfg));
    }

    #[test]
    fn inclusion_frequencies() {
        let cfg = AugmentConfig::default();
        let n = 10_000;
        let mut counts = [0usize; 4];
        let mut empty = 0;
        for s in 0..n {
            let p = sample_plan(s as u64, &cfg);
            counts[0] += p.rotation.is_some() as usize;
            counts[1] += p.mirror as usize;
            counts[2] += p.intensity.is_some() as usize;
            counts[3] += p.zoom.is_some() as usize;
            empty += p.is_empty() as usize;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((0.48..=0.52).contains(&f), "{f}");
        }
        assert!((empty as f64 / n as f64 - 1.0 / 16.0).abs() < 0.01);
    }

    #[test]
    fn parameters_stay_in_range() {
        let cfg = AugmentConfig::default();
        for s in 0..2000 {
            let p = sample_plan(s, &cfg);
            if let Some(sh) = p.intensity {
                assert!(sh.iter().all(|c| (0.8..=1.25).contains(&c.gain) && c.offset.abs() <= 0.1));
            }
            if let Some(z) = p.zoom {
                assert!((0.9..=1.1).contains(&z));
            }
            assert!(p.shift(64) < 64);
        }
    }

    #[test]
    fn empty_plan_is_identity() {
        let (img, lab) = phantom(1);
        let (i2, l2) = apply(&AugmentPlan::default(), &img, &lab).unwrap();
        assert_eq!(i2, img);
        assert_eq!(l2, lab);
    }

    #[test]
    fn rotations_compose_to_identity() {
        let (img, lab) = phantom(2);
        let k = 13;
        let fwd = AugmentPlan { rotation: Some((k as f64 + 0.5) / 64.0), ..Default::default() };
        let back = AugmentPlan { rotation: Some((64 - k) as f64 / 64.0 + 0.25 / 64.0), ..Default::default() };
        assert_eq!(fwd.shift(64) + back.shift(64), 64);
        let (i1, l1) = apply(&fwd, &img, &lab).unwrap();
        let (i2, l2) = apply(&back, &i1, &l1).unwrap();
        assert_eq!((i2, l2), (img, lab));
    }

    #[test]
    fn boundaries_commute_with_augmentation() {
        let cfg = AugmentConfig::default();
        for s in 0..200 {
            let (img, lab) = phantom(100 + s);
            let plan = sample_plan(s, &cfg);
            let Ok((_, aug)) = apply(&plan, &img, &lab) else { continue };
            for f in Interface::ALL {
                let mut expect: Vec<_> =
                    extract_boundary(&lab, f, 1.0).unwrap().points.iter().map(|&p| map_point(&plan, p, 32, 64)).collect();
                expect.sort_by_key(|&(i, j)| (j, i));
                assert_eq!(extract_boundary(&aug, f, 1.0).unwrap().points, expect, "seed {s} {f:?}");
            }
        }
    }

    #[test]
    fn labels_never_gain_classes_and_images_stay_valid() {
        let cfg = AugmentConfig::default();
        for s in 0..100 {
            let (img, lab) = phantom(300 + s);
            let (i2, l2, _) = augment(s, &cfg, &img, &lab).unwrap();
            i2.validate().unwrap();
            for c in Class::ALL {
                if lab.count(c) == 0 {
                    assert_eq!(l2.count(c), 0);
                }
            }
        }
    }

    #[test]
    fn oversized_zoom_is_rejected() {
        let (img, mut lab) = phantom(3);
        lab.set(31, 0, Class::Media);
        let plan = AugmentPlan { zoom: Some(1.1), ..Default::default() };
        assert!(matches!(apply(&plan, &img, &lab), Err(Error::ScaleOutOfRange { .. })));
    }
}
