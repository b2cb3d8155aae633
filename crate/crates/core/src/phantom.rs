//! Synthetic layered-vessel cross-sections in polar coordinates.
//!
//! Each phantom draws smooth periodic lumen, intima and media contours, a few
//! guidewire/plaque shadow wedges, paints per-class channel means and adds
//! speckle-like noise. Everything is a pure function of the seed.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    rasterize, save_record, AnnotationSet, Class, Dataset, LabelMap, ManifestEntry, PolarImage, Record, ShadowKind,
    ShadowWedge, DEPOLARIZATION, NUM_CHANNELS, NUM_CLASSES,
};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::postprocess::{clean_labels, CleanConfig};

/// Largest per-A-line contour offset (pixels) at severity 1.
pub const MAX_CONTOUR_JITTER_PX: f64 = 4.0;
/// Largest wedge-edge shift (A-lines) at severity 1.
pub const MAX_WEDGE_JITTER: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub r: usize,
    pub a: usize,
    pub lumen_radius_range: (f64, f64),
    pub intima_thickness_range: (f64, f64),
    pub media_thickness_range: (f64, f64),
    pub wedge_count_range: (usize, usize),
    /// Harmonic amplitude of the lumen contour relative to its mean radius.
    pub lumen_wobble: f64,
    /// Harmonic amplitude of layer thickness relative to its mean.
    pub thickness_wobble: f64,
    pub noise_level: f64,
    /// Mean (intensity, birefringence, depolarisation) per class, indexed by class code - 1.
    pub channel_contrast: [[f64; NUM_CHANNELS]; NUM_CLASSES],
    pub shadow_attenuation: f64,
    pub pixel_pitch_um: f32,
    pub seed: u64,
}

const WALL_INTENSITY: f64 = 0.75;

fn default_contrast(attenuation: f64) -> [[f64; NUM_CHANNELS]; NUM_CLASSES] {
    let shadow = attenuation * WALL_INTENSITY;
    [
        [0.55, 0.35, 0.40], // outside
        [0.05, 0.02, 0.85], // lumen
        [0.90, 0.12, 0.15], // intima
        [0.60, 0.65, 0.08], // media
        [shadow, 0.30, 0.50], // guidewire shadow
        [shadow, 0.55, 0.22], // plaque shadow
    ]
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            r: 64,
            a: 128,
            lumen_radius_range: (12.0, 22.0),
            intima_thickness_range: (3.0, 6.0),
            media_thickness_range: (3.0, 6.0),
            wedge_count_range: (0, 3),
            lumen_wobble: 0.025,
            thickness_wobble: 0.05,
            noise_level: 0.3,
            channel_contrast: default_contrast(0.15),
            shadow_attenuation: 0.15,
            pixel_pitch_um: 4.43,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    /// Default geometry rescaled to another grid size.
    pub fn for_grid(r: usize, a: usize) -> Self {
        let s = r as f64 / 64.0;
        let d = Self::default();
        let scale = |(lo, hi): (f64, f64)| (lo * s, hi * s);
        Self {
            r,
            a,
            lumen_radius_range: scale(d.lumen_radius_range),
            intima_thickness_range: scale(d.intima_thickness_range),
            media_thickness_range: scale(d.media_thickness_range),
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [self.lumen_radius_range, self.intima_thickness_range, self.media_thickness_range];
        if ranges.iter().any(|&(lo, hi)| !(lo > 0.0 && lo <= hi)) {
            return Err(Error::InvalidConfig("phantom ranges must be positive and non-empty".into()));
        }
        if self.wedge_count_range.0 > self.wedge_count_range.1 {
            return Err(Error::InvalidConfig("wedge_count_range is empty".into()));
        }
        if !(self.lumen_wobble >= 0.0 && self.thickness_wobble >= 0.0) {
            return Err(Error::InvalidConfig("contour wobble must be >= 0".into()));
        }
        if !(self.noise_level >= 0.0) {
            return Err(Error::InvalidConfig("noise_level must be >= 0".into()));
        }
        if self.r < crate::data::MIN_GRID || self.a < crate::data::MIN_GRID {
            return Err(Error::InvalidConfig("grid must be at least 8x8".into()));
        }
        Ok(())
    }
}

/// One generated cross-section.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: PolarImage,
    pub labels: LabelMap,
    pub annotations: AnnotationSet,
}

/// SplitMix64 finaliser, used to derive independent child seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Smooth periodic profile `base + sum_k amp_k cos(k theta + phase_k)`, `k = 1..=3`.
fn harmonic_profile<R: Rng>(rng: &mut R, a: usize, base: f64, rel_amp: f64) -> Vec<f64> {
    let terms: Vec<(f64, f64, f64)> = (1..=3)
        .map(|k| {
            let amp = rng.gen_range(0.0..=rel_amp * base / k as f64);
            (k as f64, amp, rng.gen_range(0.0..TAU))
        })
        .collect();
    (0..a)
        .map(|j| {
            let theta = TAU * j as f64 / a as f64;
            base + terms.iter().map(|&(k, amp, ph)| amp * (k * theta + ph).cos()).sum::<f64>()
        })
        .collect()
}

fn sample_wedges<R: Rng>(rng: &mut R, cfg: &PhantomConfig) -> Vec<ShadowWedge> {
    let a = cfg.a;
    let scale = a as f64 / 128.0;
    let count = rng.gen_range(cfg.wedge_count_range.0..=cfg.wedge_count_range.1);
    let min_gap = ((8.0 * scale).round() as usize).max(2);
    let mut taken = vec![false; a];
    let mut wedges = Vec::new();
    for n in 0..count {
        let kind = if n == 0 && rng.gen_bool(0.6) { ShadowKind::Guidewire } else { ShadowKind::Plaque };
        let (lo, hi) = match kind {
            ShadowKind::Guidewire => (6.0, 12.0),
            ShadowKind::Plaque => (8.0, 24.0),
        };
        let lo = ((lo * scale).round() as usize).max(2);
        let hi = ((hi * scale).round() as usize).max(lo);
        for _attempt in 0..50 {
            let width = rng.gen_range(lo..=hi);
            let start = rng.gen_range(0..a);
            let free = (0..width + 2 * min_gap).all(|k| !taken[(start + a - min_gap + k) % a]);
            if free && width + 2 * min_gap <= a {
                for k in 0..width {
                    taken[(start + k) % a] = true;
                }
                wedges.push(ShadowWedge { kind, a_start: start, a_end: (start + width - 1) % a });
                break;
            }
        }
    }
    wedges
}

/// Draws one labelled phantom. Deterministic in `config.seed`.
pub fn generate(config: &PhantomConfig) -> Result<Phantom> {
    config.validate()?;
    let (r, a) = (config.r, config.a);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let base_lumen = rng.gen_range(config.lumen_radius_range.0..=config.lumen_radius_range.1);
    let base_intima = rng.gen_range(config.intima_thickness_range.0..=config.intima_thickness_range.1);
    let base_media = rng.gen_range(config.media_thickness_range.0..=config.media_thickness_range.1);
    let lumen = harmonic_profile(&mut rng, a, base_lumen, config.lumen_wobble);
    let intima = harmonic_profile(&mut rng, a, base_intima, config.thickness_wobble);
    let media = harmonic_profile(&mut rng, a, base_media, config.thickness_wobble);
    let min_thickness = 2.0f64.min(config.intima_thickness_range.0).min(config.media_thickness_range.0);
    let lumen: Vec<f64> = lumen.iter().map(|&l| l.max(1.0)).collect();
    let iel: Vec<f64> = lumen.iter().zip(&intima).map(|(&l, &t)| l + t.max(min_thickness)).collect();
    let eel: Vec<f64> = iel.iter().zip(&media).map(|(&i, &t)| i + t.max(min_thickness)).collect();
    let deepest = eel.iter().cloned().fold(0.0, f64::max);
    if deepest + 1.5 > r as f64 {
        return Err(Error::InfeasibleGeometry(format!(
            "outer wall reaches {deepest:.1} px on a {r}-pixel A-line"
        )));
    }
    let shadow_wedges = sample_wedges(&mut rng, config);
    let (annotations, labels) = settle(AnnotationSet { lumen, iel, eel, shadow_wedges }, r, a)?;
    let image = render(&labels, config, &mut rng)?;
    Ok(Phantom { image, labels, annotations })
}

/// Snaps rasterised contours to a fixed point of topology cleaning, so the
/// ground truth carries no sub-window interface spikes. Contours are only
/// touched on A-lines whose rasterisation changed.
fn settle(mut ann: AnnotationSet, r: usize, a: usize) -> Result<(AnnotationSet, LabelMap)> {
    let raw = ann.to_labels(r, a)?;
    let labels = clean_labels(&raw, &CleanConfig::for_grid(r, a));
    if labels == raw {
        return Ok((ann, labels));
    }
    let settled = AnnotationSet::from_labels(&labels);
    for j in 0..a {
        let shadowed = settled.shadow_at(j, a).is_some();
        for (old, new) in [(&mut ann.lumen[j], settled.lumen[j]), (&mut ann.eel[j], settled.eel[j])] {
            if rasterize(*old) != new as usize {
                *old = new;
            }
        }
        if !shadowed && rasterize(ann.iel[j]) != settled.iel[j] as usize {
            ann.iel[j] = settled.iel[j];
        }
        ann.iel[j] = ann.iel[j].clamp(ann.lumen[j], ann.eel[j]);
    }
    ann.shadow_wedges = settled.shadow_wedges.clone();
    if ann.to_labels(r, a)? != labels {
        ann = settled;
    }
    Ok((ann, labels))
}

fn render<R: Rng>(labels: &LabelMap, cfg: &PhantomConfig, rng: &mut R) -> Result<PolarImage> {
    let plane = labels.r * labels.a;
    let mut data = vec![0.0f32; NUM_CHANNELS * plane];
    let n = cfg.noise_level;
    for (p, &code) in labels.classes.iter().enumerate() {
        let mean = cfg.channel_contrast[code as usize - 1];
        let e: f64 = Exp1.sample(rng);
        let g1: f64 = StandardNormal.sample(rng);
        let g2: f64 = StandardNormal.sample(rng);
        // Heavy-tailed multiplicative speckle on intensity, additive Gaussian on polarimetry.
        data[p] = (mean[0] * (1.0 - n + n * e)) as f32;
        data[plane + p] = (mean[1] + 0.25 * n * g1) as f32;
        data[DEPOLARIZATION * plane + p] = (mean[2] + 0.25 * n * g2).clamp(0.0, 1.0) as f32;
    }
    PolarImage::new(labels.r, labels.a, cfg.pixel_pitch_um, data)
}

/// Degrades a label map by jittering its contours per A-line and shifting
/// shadow-wedge edges, then re-rasterising. `severity = 0` is the identity.
pub fn perturb_labels(labels: &LabelMap, severity: f64, seed: u64) -> LabelMap {
    let severity = severity.clamp(0.0, 1.0);
    if severity == 0.0 {
        return labels.clone();
    }
    let (r, a) = (labels.r, labels.a);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ann = AnnotationSet::from_labels(labels);
    let amp = severity * MAX_CONTOUR_JITTER_PX;
    let rf = r as f64;
    for j in 0..a {
        let mut jit = || rng.gen_range(-amp..=amp);
        let l = (ann.lumen[j] + jit()).clamp(1.0, rf - 2.0);
        let e = (ann.eel[j] + jit()).clamp(l + 1.0, rf - 1.0);
        let i = (ann.iel[j] + jit()).clamp(l, e);
        ann.lumen[j] = l;
        ann.iel[j] = i;
        ann.eel[j] = e;
    }
    let shift = (severity * MAX_WEDGE_JITTER).round() as i64;
    if shift > 0 {
        for w in &mut ann.shadow_wedges {
            let width = w.width(a) as i64;
            let ds = rng.gen_range(-shift..=shift);
            let de = rng.gen_range(-shift..=shift);
            let new_width = (width - ds + de).clamp(1, a as i64);
            let start = (w.a_start as i64 + ds).rem_euclid(a as i64);
            w.a_start = start as usize;
            w.a_end = ((start + new_width - 1).rem_euclid(a as i64)) as usize;
        }
    }
    ann.to_labels(r, a).expect("clamped contours stay ordered and in range")
}

/// Writes `count` phantoms plus a manifest into `out`. Consecutive groups of
/// `frames_per_patient` records share a synthetic patient ID.
pub fn write_dataset(
    out: &Path,
    base: &PhantomConfig,
    count: usize,
    frames_per_patient: usize,
    exec: Exec,
) -> Result<Dataset> {
    std::fs::create_dir_all(out)?;
    let fpp = frames_per_patient.max(1);
    let results = par::map_indexed(exec, count, |i| -> Result<ManifestEntry> {
        let cfg = PhantomConfig { seed: mix_seed(base.seed, i as u64), ..base.clone() };
        let ph = generate(&cfg)?;
        let patient_id = format!("P{:04}", i / fpp);
        let rel = format!("frame_{i:05}.psoct");
        save_record(&out.join(&rel), &Record { patient_id: patient_id.clone(), image: ph.image, labels: Some(ph.labels) })?;
        Ok(ManifestEntry { path: rel.into(), patient_id })
    });
    let entries = results.into_iter().collect::<Result<Vec<_>>>()?;
    Dataset::write_manifest(out, &entries)?;
    Dataset::open(out)
}

/// In-memory counterpart of [`write_dataset`].
pub fn generate_records(base: &PhantomConfig, count: usize, frames_per_patient: usize, exec: Exec) -> Result<Vec<Record>> {
    let fpp = frames_per_patient.max(1);
    par::map_indexed(exec, count, |i| {
        let cfg = PhantomConfig { seed: mix_seed(base.seed, i as u64), ..base.clone() };
        generate(&cfg).map(|ph| Record {
            patient_id: format!("P{:04}", i / fpp),
            image: ph.image,
            labels: Some(ph.labels),
        })
    })
    .into_iter()
    .collect()
}

/// Nearest class mean per pixel (squared Euclidean over the three channels).
pub fn nearest_mean_labels(image: &PolarImage, contrast: &[[f64; NUM_CHANNELS]; NUM_CLASSES]) -> LabelMap {
    let plane = image.plane();
    let classes = (0..plane)
        .map(|p| {
            let px: Vec<f64> = (0..NUM_CHANNELS).map(|c| image.data[c * plane + p] as f64).collect();
            let best = (0..NUM_CLASSES)
                .min_by(|&x, &y| {
                    let dx: f64 = (0..NUM_CHANNELS).map(|c| (px[c] - contrast[x][c]).powi(2)).sum();
                    let dy: f64 = (0..NUM_CHANNELS).map(|c| (px[c] - contrast[y][c]).powi(2)).sum();
                    dx.total_cmp(&dy)
                })
                .unwrap();
            Class::from_index(best).code()
        })
        .collect();
    LabelMap { r: image.r, a: image.a, classes }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_bit_identical_phantoms() {
        let cfg = PhantomConfig { seed: 42, ..Default::default() };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = PhantomConfig { seed: 43, ..Default::default() };
        assert_ne!(generate(&cfg).unwrap().image, generate(&other).unwrap().image);
    }

    #[test]
    fn noiseless_phantom_is_separable_by_nearest_mean() {
        for seed in 0..10 {
            let cfg = PhantomConfig { seed, noise_level: 0.0, wedge_count_range: (2, 3), ..Default::default() };
            let ph = generate(&cfg).unwrap();
            assert_eq!(nearest_mean_labels(&ph.image, &cfg.channel_contrast), ph.labels, "seed {seed}");
        }
    }

    #[test]
    fn lumen_and_outside_dominate_class_populations() {
        let ph = generate(&PhantomConfig { seed: 5, ..Default::default() }).unwrap();
        let big = ph.labels.count(Class::Lumen) + ph.labels.count(Class::Outside);
        assert!(big * 2 > ph.labels.classes.len());
    }

    #[test]
    fn infeasible_geometry_is_reported() {
        let cfg = PhantomConfig {
            r: 16,
            a: 16,
            lumen_radius_range: (10.0, 12.0),
            ..Default::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::InfeasibleGeometry(_))));
    }

    #[test]
    fn zero_severity_is_identity_and_full_severity_moves_boundaries() {
        let ph = generate(&PhantomConfig { seed: 9, ..Default::default() }).unwrap();
        assert_eq!(perturb_labels(&ph.labels, 0.0, 1), ph.labels);
        let degraded = perturb_labels(&ph.labels, 1.0, 1);
        let before = AnnotationSet::from_labels(&ph.labels);
        let after = AnnotationSet::from_labels(&degraded);
        let moved: f64 = before.lumen.iter().zip(&after.lumen).map(|(x, y)| (x - y).abs()).sum::<f64>() / 128.0;
        assert!(moved > 0.5, "mean lumen displacement {moved}");
    }
}
