//! Image and label types, contour rasterisation and the on-disk record format.
//!
//! Record layout (all integers little-endian):
//!
//! ```text
//! "PSOCTSEG"            8-byte magic
//! 0x01                  format version
//! u32                   JSON header length
//! {R, A, pixel_pitch_um, patient_id, has_labels}
//! f32 x 3*R*A           channel-major, then radial-major
//! u8  x R*A             class codes 1..=6 (only when has_labels)
//! ```

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 6;
pub const NUM_CHANNELS: usize = 3;
pub const MIN_GRID: usize = 8;

pub const RECORD_MAGIC: &[u8; 8] = b"PSOCTSEG";
pub const RECORD_VERSION: u8 = 1;
pub const MANIFEST_NAME: &str = "manifest.txt";

/// Exclusive class labels with their fixed on-disk codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Class {
    Outside = 1,
    Lumen = 2,
    Intima = 3,
    Media = 4,
    GShadow = 5,
    PShadow = 6,
}

impl Class {
    pub const ALL: [Class; NUM_CLASSES] =
        [Class::Outside, Class::Lumen, Class::Intima, Class::Media, Class::GShadow, Class::PShadow];

    pub fn code(self) -> u8 {
        self as u8
    }

    /// Zero-based channel index in one-hot and probability fields.
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1..=6 => Some(Self::ALL[code as usize - 1]),
            _ => None,
        }
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn is_shadow(self) -> bool {
        matches!(self, Class::GShadow | Class::PShadow)
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Outside => "outside",
            Class::Lumen => "lumen",
            Class::Intima => "intima",
            Class::Media => "media",
            Class::GShadow => "g-shadow",
            Class::PShadow => "p-shadow",
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Three-channel polar image: intensity, birefringence, depolarisation.
///
/// Storage is channel-major then radial-major: `data[(c * r + i) * a + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarImage {
    pub r: usize,
    pub a: usize,
    pub pixel_pitch_um: f32,
    pub data: Vec<f32>,
}

pub const INTENSITY: usize = 0;
pub const BIREFRINGENCE: usize = 1;
pub const DEPOLARIZATION: usize = 2;

impl PolarImage {
    pub fn new(r: usize, a: usize, pixel_pitch_um: f32, data: Vec<f32>) -> Result<Self> {
        let img = Self { r, a, pixel_pitch_um, data };
        img.validate()?;
        Ok(img)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r < MIN_GRID || self.a < MIN_GRID {
            return Err(Error::InvalidImage(format!("grid {}x{} below {MIN_GRID}x{MIN_GRID}", self.r, self.a)));
        }
        if self.data.len() != NUM_CHANNELS * self.r * self.a {
            return Err(Error::ShapeMismatch(format!(
                "image payload {} values, expected {}",
                self.data.len(),
                NUM_CHANNELS * self.r * self.a
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidImage(format!("non-finite value at flat index {i}")));
        }
        if self.channel(DEPOLARIZATION).iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidImage("depolarization outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn plane(&self) -> usize {
        self.r * self.a
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f32 {
        self.data[(c * self.r + i) * self.a + j]
    }
}

/// Per-pixel exclusive class codes, radial-major: `classes[i * a + j]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    pub r: usize,
    pub a: usize,
    pub classes: Vec<u8>,
}

impl LabelMap {
    pub fn new(r: usize, a: usize, classes: Vec<u8>) -> Result<Self> {
        if classes.len() != r * a {
            return Err(Error::ShapeMismatch(format!("label payload {} values, expected {}", classes.len(), r * a)));
        }
        if let Some(bad) = classes.iter().find(|&&c| Class::from_code(c).is_none()) {
            return Err(Error::Format(format!("class code {bad} outside 1..=6")));
        }
        Ok(Self { r, a, classes })
    }

    pub fn filled(r: usize, a: usize, class: Class) -> Self {
        Self { r, a, classes: vec![class.code(); r * a] }
    }

    pub fn get(&self, i: usize, j: usize) -> Class {
        Class::from_code(self.classes[i * self.a + j]).expect("validated class code")
    }

    pub fn set(&mut self, i: usize, j: usize, c: Class) {
        self.classes[i * self.a + j] = c.code();
    }

    /// Classes along one A-line, proximal to distal.
    pub fn aline(&self, j: usize) -> Vec<Class> {
        (0..self.r).map(|i| self.get(i, j)).collect()
    }

    pub fn set_aline(&mut self, j: usize, col: &[Class]) {
        for (i, &c) in col.iter().enumerate() {
            self.set(i, j, c);
        }
    }

    /// One-hot field of shape `(r, a, 6)`.
    pub fn one_hot(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.classes.len() * NUM_CLASSES];
        for (p, &c) in self.classes.iter().enumerate() {
            out[p * NUM_CLASSES + c as usize - 1] = 1.0;
        }
        out
    }

    pub fn count(&self, class: Class) -> usize {
        self.classes.iter().filter(|&&c| c == class.code()).count()
    }

    pub fn roll_angular(&self, k: usize) -> Self {
        let mut out = self.clone();
        for i in 0..self.r {
            for j in 0..self.a {
                out.classes[i * self.a + (j + k) % self.a] = self.classes[i * self.a + j];
            }
        }
        out
    }

    /// Side-by-side concatenation along the angular axis (batching).
    pub fn concat_angular(maps: &[&LabelMap]) -> Self {
        let r = maps[0].r;
        let a: usize = maps.iter().map(|m| m.a).sum();
        let mut classes = Vec::with_capacity(r * a);
        for i in 0..r {
            for m in maps {
                assert_eq!(m.r, r, "concat radial mismatch");
                classes.extend_from_slice(&m.classes[i * m.a..(i + 1) * m.a]);
            }
        }
        Self { r, a, classes }
    }
}

/// Per-pixel categorical distribution over the six classes, `(r, a, 6)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub r: usize,
    pub a: usize,
    pub probs: Vec<f64>,
}

impl ProbMap {
    pub fn new(r: usize, a: usize, probs: Vec<f64>) -> Result<Self> {
        let pm = Self { r, a, probs };
        pm.validate()?;
        Ok(pm)
    }

    /// Wraps values without checking the simplex constraint (finite-difference probes).
    pub fn new_unchecked(r: usize, a: usize, probs: Vec<f64>) -> Self {
        assert_eq!(probs.len(), r * a * NUM_CLASSES);
        Self { r, a, probs }
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.len() != self.r * self.a * NUM_CLASSES {
            return Err(Error::ShapeMismatch(format!(
                "probability field {} values, expected {}",
                self.probs.len(),
                self.r * self.a * NUM_CLASSES
            )));
        }
        for (p, px) in self.probs.chunks_exact(NUM_CLASSES).enumerate() {
            let s: f64 = px.iter().sum();
            if px.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidImage(format!("pixel {p} is not a distribution (sum {s})")));
            }
        }
        Ok(())
    }

    pub fn from_labels(labels: &LabelMap) -> Self {
        Self { r: labels.r, a: labels.a, probs: labels.one_hot() }
    }

    pub fn pixel(&self, i: usize, j: usize) -> &[f64] {
        let p = (i * self.a + j) * NUM_CLASSES;
        &self.probs[p..p + NUM_CLASSES]
    }

    /// Hard labels; ties go to the lowest class index.
    pub fn argmax(&self) -> LabelMap {
        let classes = self
            .probs
            .chunks_exact(NUM_CLASSES)
            .map(|px| {
                let mut best = 0;
                for c in 1..NUM_CLASSES {
                    if px[c] > px[best] {
                        best = c;
                    }
                }
                best as u8 + 1
            })
            .collect();
        LabelMap { r: self.r, a: self.a, classes }
    }

    pub fn roll_angular(&self, k: usize) -> Self {
        let mut out = self.clone();
        for i in 0..self.r {
            for j in 0..self.a {
                let src = (i * self.a + j) * NUM_CLASSES;
                let dst = (i * self.a + (j + k) % self.a) * NUM_CLASSES;
                out.probs[dst..dst + NUM_CLASSES].copy_from_slice(&self.probs[src..src + NUM_CLASSES]);
            }
        }
        out
    }

    pub fn concat_angular(maps: &[&ProbMap]) -> Self {
        let r = maps[0].r;
        let a: usize = maps.iter().map(|m| m.a).sum();
        let mut probs = Vec::with_capacity(r * a * NUM_CLASSES);
        for i in 0..r {
            for m in maps {
                probs.extend_from_slice(&m.probs[i * m.a * NUM_CLASSES..(i + 1) * m.a * NUM_CLASSES]);
            }
        }
        Self { r, a, probs }
    }

    /// Splits a field produced by [`ProbMap::concat_angular`] back into pieces of the given widths.
    pub fn split_angular(field: &[f64], r: usize, widths: &[usize]) -> Vec<Vec<f64>> {
        let total: usize = widths.iter().sum();
        let mut out: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(r * w * NUM_CLASSES)).collect();
        for i in 0..r {
            let mut start = i * total * NUM_CLASSES;
            for (piece, &w) in out.iter_mut().zip(widths) {
                piece.extend_from_slice(&field[start..start + w * NUM_CLASSES]);
                start += w * NUM_CLASSES;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShadowKind {
    Guidewire,
    Plaque,
}

impl ShadowKind {
    pub fn class(self) -> Class {
        match self {
            ShadowKind::Guidewire => Class::GShadow,
            ShadowKind::Plaque => Class::PShadow,
        }
    }
}

/// Angular wedge covering A-lines `a_start..=a_end`, wrapping past `A - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShadowWedge {
    pub kind: ShadowKind,
    pub a_start: usize,
    pub a_end: usize,
}

impl ShadowWedge {
    pub fn width(&self, a: usize) -> usize {
        (self.a_end + a - self.a_start) % a + 1
    }

    pub fn contains(&self, j: usize, a: usize) -> bool {
        (j + a - self.a_start) % a < self.width(a)
    }

    pub fn alines(&self, a: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.width(a)).map(move |k| (self.a_start + k) % a)
    }
}

/// Boundary-contour annotation of one cross-section.
///
/// Contours are real-valued radial positions per A-line. A pixel `i` lies
/// inside a contour when `i < round_half_up(contour)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub lumen: Vec<f64>,
    pub iel: Vec<f64>,
    pub eel: Vec<f64>,
    pub shadow_wedges: Vec<ShadowWedge>,
}

/// Rounds half-up to an integer radial index.
pub fn rasterize(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

impl AnnotationSet {
    pub fn a(&self) -> usize {
        self.lumen.len()
    }

    pub fn validate(&self, r: usize, a: usize) -> Result<()> {
        if self.lumen.len() != a || self.iel.len() != a || self.eel.len() != a {
            return Err(Error::ShapeMismatch(format!("contours must have {a} A-lines")));
        }
        for j in 0..a {
            let (l, i, e) = (self.lumen[j], self.iel[j], self.eel[j]);
            for v in [l, i, e] {
                if !v.is_finite() || v < 0.0 || rasterize(v) > r {
                    return Err(Error::OutOfBounds { aline: j, value: v, r });
                }
            }
            if l > i || i > e {
                return Err(Error::ContourOrderViolation { aline: j, lumen: l, iel: i, eel: e });
            }
        }
        for w in &self.shadow_wedges {
            if w.a_start >= a || w.a_end >= a {
                return Err(Error::OutOfBounds { aline: w.a_start.max(w.a_end), value: w.a_end as f64, r: a });
            }
        }
        Ok(())
    }

    /// Shadow class covering A-line `j`, if any. Later wedges take precedence.
    pub fn shadow_at(&self, j: usize, a: usize) -> Option<Class> {
        self.shadow_wedges.iter().rev().find(|w| w.contains(j, a)).map(|w| w.kind.class())
    }

    /// Rasterises the annotation into six exclusive classes.
    pub fn to_labels(&self, r: usize, a: usize) -> Result<LabelMap> {
        self.validate(r, a)?;
        let mut out = LabelMap::filled(r, a, Class::Outside);
        for j in 0..a {
            let (l, m, e) = (rasterize(self.lumen[j]), rasterize(self.iel[j]), rasterize(self.eel[j]));
            let shadow = self.shadow_at(j, a);
            for i in 0..r {
                let c = if i < l {
                    Class::Lumen
                } else if i < e && shadow.is_some() {
                    shadow.unwrap()
                } else if i < m {
                    Class::Intima
                } else if i < e {
                    Class::Media
                } else {
                    Class::Outside
                };
                out.set(i, j, c);
            }
        }
        Ok(out)
    }

    /// Best-effort inverse of [`AnnotationSet::to_labels`].
    ///
    /// Reads the leading lumen run, then either a shadow run or the intima and
    /// media runs of every A-line. The hidden IEL inside shadow wedges is
    /// interpolated linearly between the nearest visible A-lines.
    pub fn from_labels(labels: &LabelMap) -> Self {
        let (r, a) = (labels.r, labels.a);
        let mut lumen = vec![0.0; a];
        let mut iel = vec![f64::NAN; a];
        let mut eel = vec![0.0; a];
        let mut shadow: Vec<Option<Class>> = vec![None; a];
        for j in 0..a {
            let col = labels.aline(j);
            let run_end = |start: usize, c: Class| (start..r).find(|&i| col[i] != c).unwrap_or(r);
            let l = run_end(0, Class::Lumen);
            lumen[j] = l as f64;
            if l < r && col[l].is_shadow() {
                let e = run_end(l, col[l]);
                shadow[j] = Some(col[l]);
                eel[j] = e as f64;
            } else {
                let m = run_end(l, Class::Intima);
                let e = run_end(m, Class::Media);
                iel[j] = m as f64;
                eel[j] = e as f64;
            }
        }
        let visible: Vec<usize> = (0..a).filter(|&j| shadow[j].is_none()).collect();
        for j in 0..a {
            if !iel[j].is_nan() {
                continue;
            }
            let value = if visible.is_empty() {
                (lumen[j] + eel[j]) / 2.0
            } else {
                let prev = *visible.iter().rev().find(|&&v| v < j).unwrap_or(visible.last().unwrap());
                let next = *visible.iter().find(|&&v| v > j).unwrap_or(&visible[0]);
                let span = ((next + a - prev) % a).max(1) as f64;
                let t = ((j + a - prev) % a) as f64 / span;
                (1.0 - t) * iel[prev] + t * iel[next]
            };
            iel[j] = value.clamp(lumen[j], eel[j]);
        }
        let mut shadow_wedges = Vec::new();
        // Start scanning at a non-shadow A-line (or a kind change) so wrapping wedges stay whole.
        let start = (0..a).find(|&j| shadow[j] != shadow[(j + a - 1) % a]).unwrap_or(0);
        let mut k = 0;
        while k < a {
            let j = (start + k) % a;
            if let Some(c) = shadow[j] {
                let mut len = 1;
                while len < a && shadow[(j + len) % a] == Some(c) {
                    len += 1;
                }
                let kind = if c == Class::GShadow { ShadowKind::Guidewire } else { ShadowKind::Plaque };
                shadow_wedges.push(ShadowWedge { kind, a_start: j, a_end: (j + len - 1) % a });
                k += len;
            } else {
                k += 1;
            }
        }
        Self { lumen, iel, eel, shadow_wedges }
    }
}

/// Rasterises an annotation set into an exclusive label map.
pub fn contours_to_labels(ann: &AnnotationSet, shape: (usize, usize)) -> Result<LabelMap> {
    ann.to_labels(shape.0, shape.1)
}

/// One cross-section as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub patient_id: String,
    pub image: PolarImage,
    pub labels: Option<LabelMap>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordHeader {
    #[serde(rename = "R")]
    r: usize,
    #[serde(rename = "A")]
    a: usize,
    pixel_pitch_um: f32,
    patient_id: String,
    has_labels: bool,
    #[serde(default = "default_channels")]
    channels: usize,
}

fn default_channels() -> usize {
    NUM_CHANNELS
}

pub fn encode_record(record: &Record) -> Result<Vec<u8>> {
    let img = &record.image;
    if let Some(l) = &record.labels {
        if l.r != img.r || l.a != img.a {
            return Err(Error::ShapeMismatch("labels and image grids differ".into()));
        }
    }
    let header = serde_json::to_vec(&RecordHeader {
        r: img.r,
        a: img.a,
        pixel_pitch_um: img.pixel_pitch_um,
        patient_id: record.patient_id.clone(),
        has_labels: record.labels.is_some(),
        channels: NUM_CHANNELS,
    })?;
    let mut out = Vec::with_capacity(13 + header.len() + 4 * img.data.len() + img.plane());
    out.extend_from_slice(RECORD_MAGIC);
    out.push(RECORD_VERSION);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(l) = &record.labels {
        out.extend_from_slice(&l.classes);
    }
    Ok(out)
}

pub fn decode_record(bytes: &[u8]) -> Result<Record> {
    if bytes.len() < 13 || &bytes[..8] != RECORD_MAGIC {
        return Err(Error::Format("bad record magic".into()));
    }
    if bytes[8] != RECORD_VERSION {
        return Err(Error::Format(format!("unsupported record version {}", bytes[8])));
    }
    let hlen = u32::from_le_bytes([bytes[9], bytes[10], bytes[11], bytes[12]]) as usize;
    let body = &bytes[13..];
    if body.len() < hlen {
        return Err(Error::ShapeMismatch("record header truncated".into()));
    }
    let header: RecordHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Format(format!("record header: {e}")))?;
    if header.channels != NUM_CHANNELS {
        return Err(Error::Format(format!("record declares {} channels, {NUM_CHANNELS} required", header.channels)));
    }
    let payload = &body[hlen..];
    let plane = header.r * header.a;
    let expected = 4 * NUM_CHANNELS * plane + if header.has_labels { plane } else { 0 };
    if payload.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "record payload {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let (img_bytes, label_bytes) = payload.split_at(4 * NUM_CHANNELS * plane);
    let data = img_bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let image = PolarImage::new(header.r, header.a, header.pixel_pitch_um, data)?;
    let labels = if header.has_labels {
        Some(LabelMap::new(header.r, header.a, label_bytes.to_vec())?)
    } else {
        None
    };
    Ok(Record { patient_id: header.patient_id, image, labels })
}

pub fn save_record(path: &Path, record: &Record) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_record(record)?)?;
    Ok(())
}

pub fn load_record(path: &Path) -> Result<Record> {
    decode_record(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub patient_id: String,
}

/// A directory of record files indexed by `manifest.txt`
/// (one `relative/path<TAB>patient_id` line per record).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let text = fs::read_to_string(root.join(MANIFEST_NAME))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (path, pid) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("manifest line {} lacks a tab separator", n + 1)))?;
            entries.push(ManifestEntry { path: PathBuf::from(path), patient_id: pid.to_string() });
        }
        Ok(Self { root: root.to_path_buf(), entries })
    }

    pub fn write_manifest(root: &Path, entries: &[ManifestEntry]) -> Result<()> {
        let mut text = String::new();
        for e in entries {
            text.push_str(&format!("{}\t{}\n", e.path.display(), e.patient_id));
        }
        fs::write(root.join(MANIFEST_NAME), text)?;
        Ok(())
    }

    pub fn load(&self, index: usize) -> Result<Record> {
        load_record(&self.root.join(&self.entries[index].path))
    }

    pub fn load_all(&self) -> Result<Vec<Record>> {
        (0..self.entries.len()).map(|i| self.load(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_ann(a: usize, l: f64, i: f64, e: f64) -> AnnotationSet {
        AnnotationSet { lumen: vec![l; a], iel: vec![i; a], eel: vec![e; a], shadow_wedges: vec![] }
    }

    fn codes(col: &[Class]) -> Vec<u8> {
        col.iter().map(|c| c.code()).collect()
    }

    #[test]
    fn layered_aline_follows_radial_order() {
        let labels = contours_to_labels(&flat_ann(8, 2.0, 4.0, 6.0), (8, 8)).unwrap();
        assert_eq!(codes(&labels.aline(3)), vec![2, 2, 3, 3, 4, 4, 1, 1]);
    }

    #[test]
    fn guidewire_wedge_replaces_intima_and_media() {
        let mut ann = flat_ann(8, 2.0, 4.0, 6.0);
        ann.shadow_wedges.push(ShadowWedge { kind: ShadowKind::Guidewire, a_start: 6, a_end: 1 });
        let labels = contours_to_labels(&ann, (8, 8)).unwrap();
        for j in [6, 7, 0, 1] {
            assert_eq!(codes(&labels.aline(j)), vec![2, 2, 5, 5, 5, 5, 1, 1], "aline {j}");
        }
        assert_eq!(codes(&labels.aline(3)), vec![2, 2, 3, 3, 4, 4, 1, 1]);
    }

    #[test]
    fn contours_round_half_up() {
        let labels = contours_to_labels(&flat_ann(8, 1.5, 2.49, 5.5), (8, 8)).unwrap();
        assert_eq!(codes(&labels.aline(0)), vec![2, 2, 4, 4, 4, 4, 1, 1]);
    }

    #[test]
    fn order_violation_and_out_of_bounds_are_reported() {
        let mut ann = flat_ann(8, 2.0, 4.0, 6.0);
        ann.iel[5] = 7.0;
        assert!(matches!(contours_to_labels(&ann, (8, 8)), Err(Error::ContourOrderViolation { aline: 5, .. })));
        let ann = flat_ann(8, 2.0, 4.0, 9.0);
        assert!(matches!(contours_to_labels(&ann, (8, 8)), Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn labels_to_contours_to_labels_is_identity() {
        let mut ann = flat_ann(16, 3.0, 5.0, 9.0);
        for j in 0..16 {
            ann.lumen[j] = 3.0 + (j % 3) as f64;
            ann.iel[j] = ann.lumen[j] + 2.0;
            ann.eel[j] = ann.iel[j] + 1.0 + (j % 2) as f64;
        }
        ann.shadow_wedges.push(ShadowWedge { kind: ShadowKind::Plaque, a_start: 14, a_end: 2 });
        ann.shadow_wedges.push(ShadowWedge { kind: ShadowKind::Guidewire, a_start: 7, a_end: 9 });
        let labels = ann.to_labels(16, 16).unwrap();
        let back = AnnotationSet::from_labels(&labels);
        assert_eq!(back.to_labels(16, 16).unwrap(), labels);
        assert_eq!(back.shadow_wedges.len(), 2);
        assert!(back.shadow_wedges.contains(&ShadowWedge { kind: ShadowKind::Plaque, a_start: 14, a_end: 2 }));
    }

    fn sample_record(labels: bool) -> Record {
        let (r, a) = (8, 9);
        let data = (0..3 * r * a).map(|i| ((i * 37) % 101) as f32 / 101.0).collect();
        Record {
            patient_id: "P007".into(),
            image: PolarImage::new(r, a, 4.43, data).unwrap(),
            labels: labels.then(|| LabelMap::new(r, a, (0..r * a).map(|i| (i % 6) as u8 + 1).collect()).unwrap()),
        }
    }

    #[test]
    fn record_round_trip_is_bit_exact() {
        for with_labels in [true, false] {
            let rec = sample_record(with_labels);
            let back = decode_record(&encode_record(&rec).unwrap()).unwrap();
            assert_eq!(back, rec);
        }
    }

    #[test]
    fn truncated_record_is_a_shape_mismatch() {
        let bytes = encode_record(&sample_record(true)).unwrap();
        assert!(matches!(decode_record(&bytes[..bytes.len() - 5]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn two_channel_header_is_a_format_error() {
        let rec = sample_record(false);
        let header = br#"{"R":8,"A":9,"pixel_pitch_um":4.43,"patient_id":"x","has_labels":false,"channels":2}"#;
        let mut bytes = RECORD_MAGIC.to_vec();
        bytes.push(RECORD_VERSION);
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(header);
        for v in &rec.image.data[..2 * 72] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(decode_record(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn bad_magic_and_version_are_format_errors() {
        let mut bytes = encode_record(&sample_record(false)).unwrap();
        bytes[8] = 2;
        assert!(matches!(decode_record(&bytes), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(decode_record(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn image_invariants_are_enforced() {
        let mut data = vec![0.5f32; 3 * 64];
        assert!(PolarImage::new(8, 8, 1.0, data.clone()).is_ok());
        data[2 * 64 + 3] = 1.5;
        assert!(PolarImage::new(8, 8, 1.0, data.clone()).is_err());
        data[2 * 64 + 3] = f32::NAN;
        assert!(PolarImage::new(8, 8, 1.0, data).is_err());
        assert!(PolarImage::new(4, 8, 1.0, vec![0.0; 96]).is_err());
    }

    #[test]
    fn concat_then_split_recovers_fields() {
        let a = ProbMap::from_labels(&LabelMap::filled(8, 8, Class::Lumen));
        let b = ProbMap::from_labels(&LabelMap::filled(8, 10, Class::Media));
        let cat = ProbMap::concat_angular(&[&a, &b]);
        let parts = ProbMap::split_angular(&cat.probs, 8, &[8, 10]);
        assert_eq!(parts[0], a.probs);
        assert_eq!(parts[1], b.probs);
    }
}
