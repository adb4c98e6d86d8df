//! BARS: noisy black images containing one red or green, horizontal or
//! vertical bar.
//!
//! Orientation and color are drawn so that every consecutive block of four
//! sample indices holds each (orientation, color) combination exactly once, in
//! a seeded random order. Labels are therefore balanced and independent. Each
//! sample is a pure function of `(seed, index)`, so sets can be rendered lazily
//! or in parallel shards.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::ArrayViewMut1;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::Samples;
use crate::scalar::Real;
use crate::streams;

pub const IMAGE_SIZE: usize = 100;
pub const CHANNELS: usize = 3;

/// Dense `H × W × C` image with values in `[0, 1]`, stored channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[self.index(row, col, ch)]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flattened copy promoted to the working scalar type.
    pub fn to_vec<T: Real>(&self) -> Vec<T> {
        self.data.iter().map(|&v| T::lit(f64::from(v))).collect()
    }

    pub fn clip(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Horizontal = 0,
    Vertical = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red = 0,
    Green = 1,
}

impl Orientation {
    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Orientation::Horizontal
        } else {
            Orientation::Vertical
        }
    }
}

impl Color {
    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Color::Red
        } else {
            Color::Green
        }
    }
}

/// The two BARS concepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Concept {
    Orientation,
    Color,
}

impl Concept {
    pub const ALL: [Concept; 2] = [Concept::Orientation, Concept::Color];

    pub fn name(self) -> &'static str {
        match self {
            Concept::Orientation => "orientation",
            Concept::Color => "color",
        }
    }

    /// Label of `sample` for this concept: 1 is the positive concept value
    /// (vertical, green), 0 the negative one.
    pub fn label_of(self, orientation: Orientation, color: Color) -> usize {
        match self {
            Concept::Orientation => orientation as usize,
            Concept::Color => color as usize,
        }
    }

    pub fn domain_size(self) -> usize {
        2
    }
}

impl std::str::FromStr for Concept {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orientation" => Ok(Concept::Orientation),
            "color" | "colour" => Ok(Concept::Color),
            other => Err(Error::InvalidArgument(format!("unknown concept {other:?}"))),
        }
    }
}

impl std::fmt::Display for Concept {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarsSample {
    pub image: ImageTensor,
    pub orientation: Orientation,
    pub color: Color,
    /// Per-sample seed the noise field was drawn from.
    pub seed: u64,
}

impl BarsSample {
    pub fn label(&self, concept: Concept) -> usize {
        concept.label_of(self.orientation, self.color)
    }
}

/// Geometry and noise of generated images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BarsParams {
    pub size: usize,
    pub bar_thickness: usize,
    pub bar_intensity: f32,
    pub noise_sigma: f32,
}

impl Default for BarsParams {
    fn default() -> Self {
        Self {
            size: IMAGE_SIZE,
            bar_thickness: 5,
            bar_intensity: 1.0,
            noise_sigma: 0.05,
        }
    }
}

impl BarsParams {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.bar_thickness == 0 || self.bar_thickness > self.size {
            return Err(Error::InvalidArgument("bar thickness must be in 1..=size".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument("noise sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.size * self.size * CHANNELS
    }
}

/// A lazily rendered BARS set of `len` samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarsSet {
    pub params: BarsParams,
    pub seed: u64,
    pub len: usize,
}

impl BarsSet {
    pub fn new(params: BarsParams, seed: u64, len: usize) -> Result<Self> {
        params.validate()?;
        Ok(Self { params, seed, len })
    }

    /// Labels of sample `index` without rendering it.
    pub fn labels(&self, index: usize) -> (Orientation, Color) {
        let block = (index / 4) as u64;
        let mut combos = [0usize, 1, 2, 3];
        combos.shuffle(&mut streams::stream(self.seed, "bars-combo", block));
        let c = combos[index % 4];
        (Orientation::from_index(c >> 1), Color::from_index(c & 1))
    }

    pub fn sample(&self, index: usize) -> BarsSample {
        let (orientation, color) = self.labels(index);
        let seed = streams::derive_seed(self.seed, "bars-sample", index as u64);
        let image = render(&self.params, orientation, color, seed);
        BarsSample {
            image,
            orientation,
            color,
            seed,
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = BarsSample> + '_ {
        (0..self.len).map(|i| self.sample(i))
    }

    /// Indices whose label for `concept` equals `value`.
    pub fn indices_with(&self, concept: Concept, value: usize) -> Vec<usize> {
        (0..self.len)
            .filter(|&i| {
                let (o, c) = self.labels(i);
                concept.label_of(o, c) == value
            })
            .collect()
    }

    /// View that labels every sample by `concept`, for training or evaluation.
    pub fn labelled_by(&self, concept: Concept) -> LabelledBars<'_> {
        LabelledBars { set: self, concept }
    }
}

/// Renders one image from its labels and per-sample seed.
pub fn render(params: &BarsParams, orientation: Orientation, color: Color, seed: u64) -> ImageTensor {
    let mut rng = streams::stream(seed, "render", 0);
    let offset = rng.random_range(0..=params.size - params.bar_thickness);
    let size = params.size;
    let mut img = ImageTensor::filled(size, size, CHANNELS, 0.0);
    if params.noise_sigma > 0.0 {
        let noise = Normal::new(0.0f32, params.noise_sigma).expect("valid sigma");
        for v in &mut img.data {
            *v = noise.sample(&mut rng);
        }
    }
    let ch = color as usize;
    let on_bar = offset..offset + params.bar_thickness;
    for r in 0..size {
        for c in 0..size {
            let hit = match orientation {
                Orientation::Vertical => on_bar.contains(&c),
                Orientation::Horizontal => on_bar.contains(&r),
            };
            if hit {
                let i = img.index(r, c, ch);
                img.data[i] += params.bar_intensity;
            }
        }
    }
    img.clip();
    img
}

/// `generate(n, seed)`: `n` materialised samples with default parameters.
pub fn generate(n: usize, seed: u64) -> Result<Vec<BarsSample>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    Ok(BarsSet::new(BarsParams::default(), seed, n)?.samples().collect())
}

pub struct LabelledBars<'a> {
    set: &'a BarsSet,
    concept: Concept,
}

impl<T: Real> Samples<T> for LabelledBars<'_> {
    fn len(&self) -> usize {
        self.set.len
    }
    fn input_dim(&self) -> usize {
        self.set.params.input_dim()
    }
    fn label(&self, index: usize) -> usize {
        let (o, c) = self.set.labels(index);
        self.concept.label_of(o, c)
    }
    fn fill_row(&self, index: usize, row: ArrayViewMut1<T>) {
        fill_from_image(&self.set.sample(index).image, row);
    }
}

/// Materialised samples labelled by one concept.
pub struct LabelledImages<'a> {
    pub samples: &'a [BarsSample],
    pub concept: Concept,
}

impl<T: Real> Samples<T> for LabelledImages<'_> {
    fn len(&self) -> usize {
        self.samples.len()
    }
    fn input_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.image.len())
    }
    fn label(&self, index: usize) -> usize {
        self.samples[index].label(self.concept)
    }
    fn fill_row(&self, index: usize, row: ArrayViewMut1<T>) {
        fill_from_image(&self.samples[index].image, row);
    }
}

fn fill_from_image<T: Real>(img: &ImageTensor, mut row: ArrayViewMut1<T>) {
    for (dst, &v) in row.iter_mut().zip(&img.data) {
        *dst = T::lit(f64::from(v));
    }
}

// ---------------------------------------------------------------------------
// counterfactuals

/// Sets one concept of a sample to a target value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConceptEdit {
    Orientation(Orientation),
    Color(Color),
}

impl ConceptEdit {
    /// Edit setting `concept` to label `value` (0 or 1).
    pub fn set(concept: Concept, value: usize) -> Self {
        match concept {
            Concept::Orientation => ConceptEdit::Orientation(Orientation::from_index(value)),
            Concept::Color => ConceptEdit::Color(Color::from_index(value)),
        }
    }
}

/// Counterfactual of `sample` with one concept changed.
///
/// A color change swaps the red and green channels; an orientation change
/// transposes the image. The bar offset and noise field move with the edit, so
/// both operations are involutions and every other attribute is untouched.
pub fn counterfactual(sample: &BarsSample, edit: ConceptEdit) -> BarsSample {
    let mut out = sample.clone();
    match edit {
        ConceptEdit::Color(target) => {
            if target != sample.color {
                let img = &mut out.image;
                for px in img.data.chunks_mut(img.channels) {
                    px.swap(Color::Red as usize, Color::Green as usize);
                }
                out.color = target;
            }
        }
        ConceptEdit::Orientation(target) => {
            if target != sample.orientation {
                let src = &sample.image;
                let img = &mut out.image;
                img.height = src.width;
                img.width = src.height;
                for r in 0..src.height {
                    for c in 0..src.width {
                        for ch in 0..src.channels {
                            let dst = img.index(c, r, ch);
                            img.data[dst] = src.get(r, c, ch);
                        }
                    }
                }
                out.orientation = target;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// augmentation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    FlipH,
    FlipV,
    Brightness,
    Contrast,
    Hue,
    Saturation,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 6] = [
        AugmentOp::FlipH,
        AugmentOp::FlipV,
        AugmentOp::Brightness,
        AugmentOp::Contrast,
        AugmentOp::Hue,
        AugmentOp::Saturation,
    ];
}

/// A fully specified image transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    /// Mirror left-right.
    FlipH,
    /// Mirror top-bottom.
    FlipV,
    /// Add a constant to every value.
    Brightness(f32),
    /// Scale deviations from the per-channel mean.
    Contrast(f32),
    /// Rotate hue by an angle in radians.
    Hue(f32),
    /// Scale HSV saturation.
    Saturation(f32),
}

/// Sampling ranges for random augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentRanges {
    pub brightness: (f32, f32),
    pub contrast: (f32, f32),
    pub saturation: (f32, f32),
    pub hue: (f32, f32),
}

impl Default for AugmentRanges {
    fn default() -> Self {
        let hue = 0.1 * std::f32::consts::PI;
        Self {
            brightness: (-0.2, 0.2),
            contrast: (0.8, 1.25),
            saturation: (0.8, 1.25),
            hue: (-hue, hue),
        }
    }
}

impl AugmentRanges {
    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f32, f32)| lo <= hi && lo.is_finite() && hi.is_finite();
        if !(ok(self.brightness) && ok(self.contrast) && ok(self.saturation) && ok(self.hue)) {
            return Err(Error::InvalidArgument("augmentation range bounds out of order".into()));
        }
        if self.contrast.0 < 0.0 || self.saturation.0 < 0.0 {
            return Err(Error::InvalidArgument("contrast/saturation factors must be >= 0".into()));
        }
        Ok(())
    }
}

/// Applies the selected operations in canonical order with parameters drawn
/// from `ranges` using `seed`. Flips are applied with probability 1/2 each.
pub fn augment(sample: &BarsSample, ops: &[AugmentOp], ranges: &AugmentRanges, seed: u64) -> Result<BarsSample> {
    ranges.validate()?;
    let mut ops = ops.to_vec();
    ops.sort_unstable();
    ops.dedup();
    let mut rng = streams::stream(seed, "augment", 0);
    let mut draw = |(lo, hi): (f32, f32)| if lo == hi { lo } else { rng.random_range(lo..hi) };
    let mut transforms = Vec::with_capacity(ops.len());
    for op in ops {
        let t = match op {
            AugmentOp::FlipH => (draw((0.0, 1.0)) < 0.5).then_some(Transform::FlipH),
            AugmentOp::FlipV => (draw((0.0, 1.0)) < 0.5).then_some(Transform::FlipV),
            AugmentOp::Brightness => Some(Transform::Brightness(draw(ranges.brightness))),
            AugmentOp::Contrast => Some(Transform::Contrast(draw(ranges.contrast))),
            AugmentOp::Hue => Some(Transform::Hue(draw(ranges.hue))),
            AugmentOp::Saturation => Some(Transform::Saturation(draw(ranges.saturation))),
        };
        transforms.extend(t);
    }
    Ok(apply_transforms(sample, &transforms))
}

/// Applies explicit transforms in order; output is clipped to `[0, 1]`.
pub fn apply_transforms(sample: &BarsSample, transforms: &[Transform]) -> BarsSample {
    let mut out = sample.clone();
    for t in transforms {
        apply(&mut out.image, *t);
        out.image.clip();
    }
    out
}

fn apply(img: &mut ImageTensor, t: Transform) {
    let (h, w, ch) = (img.height, img.width, img.channels);
    match t {
        Transform::FlipH => {
            for r in 0..h {
                for c in 0..w / 2 {
                    for k in 0..ch {
                        let a = img.index(r, c, k);
                        let b = img.index(r, w - 1 - c, k);
                        img.data.swap(a, b);
                    }
                }
            }
        }
        Transform::FlipV => {
            for r in 0..h / 2 {
                for c in 0..w {
                    for k in 0..ch {
                        let a = img.index(r, c, k);
                        let b = img.index(h - 1 - r, c, k);
                        img.data.swap(a, b);
                    }
                }
            }
        }
        Transform::Brightness(delta) => {
            if delta != 0.0 {
                img.data.iter_mut().for_each(|v| *v += delta);
            }
        }
        Transform::Contrast(factor) => {
            if factor != 1.0 {
                let n = (h * w) as f32;
                for k in 0..ch {
                    let mean = img.data.iter().skip(k).step_by(ch).sum::<f32>() / n;
                    for v in img.data.iter_mut().skip(k).step_by(ch) {
                        *v = (*v - mean) * factor + mean;
                    }
                }
            }
        }
        Transform::Hue(angle) | Transform::Saturation(angle) if ch != 3 => {
            let _ = angle;
        }
        Transform::Hue(angle) => {
            let shift = angle / std::f32::consts::TAU;
            if shift != 0.0 {
                for px in img.data.chunks_mut(3) {
                    let (hh, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
                    let (r, g, b) = hsv_to_rgb((hh + shift).rem_euclid(1.0), s, v);
                    px.copy_from_slice(&[r, g, b]);
                }
            }
        }
        Transform::Saturation(factor) => {
            if factor != 1.0 {
                for px in img.data.chunks_mut(3) {
                    let (hh, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
                    let (r, g, b) = hsv_to_rgb(hh, (s * factor).clamp(0.0, 1.0), v);
                    px.copy_from_slice(&[r, g, b]);
                }
            }
        }
    }
}

/// RGB in `[0,1]` to HSV with hue in `[0,1)`.
fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta <= 0.0 {
        return (0.0, s, v);
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    ((h / 6.0).rem_euclid(1.0), s, v)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

// ---------------------------------------------------------------------------
// export

/// Writes each sample as raw little-endian `f32` (HWC order) plus a
/// `manifest.csv` with columns `id,orientation,color,seed,path`.
pub fn export<'a>(samples: impl IntoIterator<Item = &'a BarsSample>, dir: &Path) -> Result<usize> {
    fs::create_dir_all(dir)?;
    let mut manifest = csv::Writer::from_path(dir.join("manifest.csv"))?;
    manifest.write_record(["id", "orientation", "color", "seed", "path"])?;
    let mut count = 0;
    for (id, s) in samples.into_iter().enumerate() {
        let name = format!("sample_{id:06}.f32");
        let mut file = std::io::BufWriter::new(fs::File::create(dir.join(&name))?);
        for v in &s.image.data {
            file.write_all(&v.to_le_bytes())?;
        }
        file.flush()?;
        manifest.write_record([
            id.to_string(),
            (s.orientation as u8).to_string(),
            (s.color as u8).to_string(),
            s.seed.to_string(),
            name,
        ])?;
        count += 1;
    }
    manifest.flush()?;
    Ok(count)
}

/// Reads one exported tensor back.
pub fn read_tensor(path: &Path, height: usize, width: usize, channels: usize) -> Result<ImageTensor> {
    let bytes = fs::read(path)?;
    let expected = height * width * channels * 4;
    if bytes.len() != expected {
        return Err(Error::dim("tensor file bytes", expected, bytes.len()));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(ImageTensor {
        height,
        width,
        channels,
        data,
    })
}

/// Reads a directory written by [`export`]; returns `(id, sample)` pairs in
/// manifest order.
pub fn import(dir: &Path, params: &BarsParams) -> Result<Vec<(u64, BarsSample)>> {
    #[derive(Deserialize)]
    struct Row {
        id: u64,
        orientation: usize,
        color: usize,
        seed: u64,
        path: String,
    }
    let mut reader = csv::Reader::from_path(dir.join("manifest.csv"))?;
    reader
        .deserialize::<Row>()
        .map(|row| {
            let row = row?;
            if row.orientation > 1 || row.color > 1 {
                return Err(Error::InvalidArgument(format!("sample {}: labels must be 0 or 1", row.id)));
            }
            let image = read_tensor(&dir.join(&row.path), params.size, params.size, CHANNELS)?;
            Ok((
                row.id,
                BarsSample {
                    image,
                    orientation: Orientation::from_index(row.orientation),
                    color: Color::from_index(row.color),
                    seed: row.seed,
                },
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strip_mean(img: &ImageTensor, col_range: std::ops::Range<usize>, ch: usize) -> f32 {
        let mut sum = 0.0;
        let mut n = 0;
        for r in 0..img.height {
            for c in col_range.clone() {
                sum += img.get(r, c, ch);
                n += 1;
            }
        }
        sum / n as f32
    }

    fn bar_columns(img: &ImageTensor) -> std::ops::Range<usize> {
        // column with the largest total intensity marks the bar
        let col_sum = |c: usize| -> f32 { (0..img.height).map(|r| img.get(r, c, 0) + img.get(r, c, 1)).sum() };
        let best = (0..img.width).max_by(|&a, &b| col_sum(a).total_cmp(&col_sum(b))).unwrap();
        best..best + 1
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(4, 17).unwrap();
        let b = generate(4, 17).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate(4, 18).unwrap());
        assert!(generate(0, 1).is_err());
    }

    #[test]
    fn labels_balanced_and_independent() {
        let set = BarsSet::new(BarsParams::default(), 3, 2000).unwrap();
        let mut counts = [0usize; 4];
        let (mut so, mut sc, mut soc) = (0.0, 0.0, 0.0);
        for i in 0..set.len {
            let (o, c) = set.labels(i);
            counts[(o as usize) * 2 + c as usize] += 1;
            so += o as usize as f64;
            sc += c as usize as f64;
            soc += (o as usize * c as usize) as f64;
        }
        for &k in &counts {
            assert!((k as f64 / 2000.0 - 0.25).abs() <= 0.02);
        }
        let n = 2000.0;
        let cov = soc / n - (so / n) * (sc / n);
        let corr = cov / ((so / n) * (1.0 - so / n) * (sc / n) * (1.0 - sc / n)).sqrt();
        assert!(corr.abs() < 0.05, "{corr}");
    }

    #[test]
    fn pixels_in_unit_range_and_bar_in_labelled_channel() {
        let set = BarsSet::new(BarsParams::default(), 9, 40).unwrap();
        for s in set.samples() {
            assert!(s.image.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
            if s.orientation == Orientation::Vertical {
                let cols = bar_columns(&s.image);
                let (r, g) = (strip_mean(&s.image, cols.clone(), 0), strip_mean(&s.image, cols, 1));
                match s.color {
                    Color::Green => assert!(g > r + 0.5),
                    Color::Red => assert!(r > g + 0.5),
                }
            }
        }
    }

    #[test]
    fn counterfactual_identities() {
        let s = generate(8, 5).unwrap();
        for x in &s {
            assert_eq!(counterfactual(x, ConceptEdit::Color(x.color)), *x);
            let other = Color::from_index(1 - x.color as usize);
            let flipped = counterfactual(x, ConceptEdit::Color(other));
            assert_eq!(flipped.color, other);
            assert_eq!(flipped.orientation, x.orientation);
            assert_ne!(flipped.image, x.image);
            assert_eq!(counterfactual(&flipped, ConceptEdit::Color(x.color)), *x);
            let o = Orientation::from_index(1 - x.orientation as usize);
            let t = counterfactual(x, ConceptEdit::Orientation(o));
            assert_eq!(t.orientation, o);
            assert_eq!(counterfactual(&t, ConceptEdit::Orientation(x.orientation)), *x);
        }
    }

    #[test]
    fn recolor_commutes_with_flips() {
        for x in generate(6, 12).unwrap() {
            let edit = ConceptEdit::Color(Color::from_index(1 - x.color as usize));
            for flip in [Transform::FlipH, Transform::FlipV] {
                let a = counterfactual(&apply_transforms(&x, &[flip]), edit);
                let b = apply_transforms(&counterfactual(&x, edit), &[flip]);
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn transform_identities() {
        let x = &generate(1, 2).unwrap()[0];
        assert_eq!(apply_transforms(x, &[Transform::FlipH, Transform::FlipH]), *x);
        assert_eq!(apply_transforms(x, &[Transform::FlipV, Transform::FlipV]), *x);
        assert_eq!(apply_transforms(x, &[Transform::Brightness(0.0)]), *x);
        assert_eq!(apply_transforms(x, &[Transform::Contrast(1.0)]), *x);
        let shifted = apply_transforms(x, &[Transform::Brightness(0.3)]);
        assert!(shifted.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn hue_half_turn_swaps_red_green_dominance() {
        let set = BarsSet::new(BarsParams::default(), 21, 64).unwrap();
        let mut checked = 0;
        for x in set
            .samples()
            .filter(|s| s.color == Color::Red && s.orientation == Orientation::Vertical)
        {
            let cols = bar_columns(&x.image);
            assert!(strip_mean(&x.image, cols.clone(), 0) > strip_mean(&x.image, cols.clone(), 1));
            for angle in [std::f32::consts::PI, -std::f32::consts::PI] {
                let y = apply_transforms(&x, &[Transform::Hue(angle)]);
                assert!(strip_mean(&y.image, cols.clone(), 1) > strip_mean(&y.image, cols.clone(), 0) + 0.5);
            }
            checked += 1;
        }
        assert!(checked > 5);
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2f32, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.0, 0.7, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-5 && (g - g2).abs() < 1e-5 && (b - b2).abs() < 1e-5);
        }
    }

    #[test]
    fn random_augmentation_keeps_labels_and_range() {
        let x = &generate(3, 8).unwrap()[2];
        let y = augment(x, &AugmentOp::ALL, &AugmentRanges::default(), 4).unwrap();
        assert_eq!((y.orientation, y.color), (x.orientation, x.color));
        assert!(y.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(y, augment(x, &AugmentOp::ALL, &AugmentRanges::default(), 4).unwrap());
        let bad = AugmentRanges {
            contrast: (2.0, 1.0),
            ..AugmentRanges::default()
        };
        assert!(augment(x, &[AugmentOp::Contrast], &bad, 0).is_err());
    }

    #[test]
    fn export_writes_manifest_and_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate(3, 1).unwrap();
        assert_eq!(export(&samples, dir.path()).unwrap(), 3);
        let manifest = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        assert!(manifest.starts_with("id,orientation,color,seed,path\n"));
        assert_eq!(manifest.lines().count(), 4);
        let t = read_tensor(&dir.path().join("sample_000001.f32"), 100, 100, 3).unwrap();
        assert_eq!(t, samples[1].image);
        let back = import(dir.path(), &BarsParams::default()).unwrap();
        assert_eq!(back.into_iter().map(|(_, s)| s).collect::<Vec<_>>(), samples);
    }
}
