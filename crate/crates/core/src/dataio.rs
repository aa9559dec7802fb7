//! On-disk datasets: 16-bit grayscale PNG images, 8-bit paletted PNG label
//! maps (value = target id + 1) and a JSON manifest, plus the synthetic
//! disk/ring/crescent generator.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clicks::connected_components;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_TARGET_NAMES: [&str; 3] = ["LV", "Myo", "RV"];

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    /// `[H, W]` intensities in [0, 1].
    pub image: Tensor<f64>,
    pub masks: BTreeMap<usize, BinaryMask>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    /// Target ids with a non-empty mask.
    pub fn instances(&self) -> Vec<usize> {
        self.masks.iter().filter(|(_, m)| !m.is_empty()).map(|(&t, _)| t).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        for (t, m) in &self.masks {
            if m.height() != h || m.width() != w {
                return Err(Error::Format(format!(
                    "{}: mask {t} is {}x{}, image is {h}x{w}",
                    self.sample_id,
                    m.height(),
                    m.width()
                )));
            }
        }
        if self.instances().is_empty() {
            return Err(Error::Format(format!("{}: no non-empty target mask", self.sample_id)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?} (train|val|test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub image_file: String,
    pub mask_file: String,
    pub target_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Directory holding the manifest; entries are relative to it.
    #[serde(skip)]
    pub root: PathBuf,
    pub split: Split,
    pub target_names: BTreeMap<usize, String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(&e.sample_id) {
                return Err(Error::Format(format!("duplicate sample id {:?}", e.sample_id)));
            }
            if let Some(t) = e.target_ids.iter().find(|t| !self.target_names.contains_key(t)) {
                return Err(Error::Format(format!("{}: target {t} has no name", e.sample_id)));
            }
            for f in [&e.image_file, &e.mask_file] {
                let p = self.root.join(f);
                if !p.is_file() {
                    return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "missing file")));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut m: Self = serde_json::from_str(&text)?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        let file = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&file, text + "\n").map_err(|e| Error::io(&file, e))
    }
}

/// Generation parameters of a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub n_samples: usize,
    pub image_size: usize,
    pub n_targets: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self { n_samples: 200, image_size: 256, n_targets: 3, noise_std: 0.03, seed: 0 }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 64 || self.image_size % 8 != 0 {
            return Err(Error::Contract(format!("image_size {} must be >= 64 and divisible by 8", self.image_size)));
        }
        if self.n_targets == 0 || self.n_targets > DEFAULT_TARGET_NAMES.len() {
            return Err(Error::Contract(format!("n_targets {} must be in 1..=3", self.n_targets)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Contract("noise_std must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Keeps only the largest 4-connected component (earliest on ties).
fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let comps = connected_components(mask);
    let mut out = BinaryMask::new(mask.height(), mask.width());
    if let Some(best) = comps.iter().reduce(|a, b| if b.len() > a.len() { b } else { a }) {
        for &i in best {
            out.set(i % mask.width(), i / mask.width(), true);
        }
    }
    out
}

fn touches_border(mask: &BinaryMask) -> bool {
    let (h, w) = (mask.height(), mask.width());
    (0..w).any(|x| mask.get(x, 0) || mask.get(x, h - 1)) || (0..h).any(|y| mask.get(0, y) || mask.get(w - 1, y))
}

/// Draws one synthetic sample; retries geometry until every target is a
/// single component of reasonable size away from the border.
pub fn synthesize(spec: &GenSpec, index: usize, rng: &mut ChaCha8Rng) -> Sample {
    let s = spec.image_size as f64;
    let n = spec.image_size;
    let min_area = (s * s * 0.004).max(12.0) as usize;
    loop {
        let cx = s * rng.random_range(0.38..0.62);
        let cy = s * rng.random_range(0.38..0.62);
        let r_lv = s * rng.random_range(0.08..0.13);
        let r_out = r_lv + s * rng.random_range(0.06..0.09);
        let theta = rng.random_range(0.0..2.0 * PI);
        let r_rv = s * rng.random_range(0.14..0.19);
        let d_rv = r_out * rng.random_range(0.75..1.0);
        let gap = s * rng.random_range(0.015..0.03);
        let (rx, ry) = (cx + d_rv * theta.cos(), cy + d_rv * theta.sin());

        let mut lv = BinaryMask::new(n, n);
        let mut myo = BinaryMask::new(n, n);
        let mut rv = BinaryMask::new(n, n);
        for y in 0..n {
            for x in 0..n {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
                let drv = ((px - rx).powi(2) + (py - ry).powi(2)).sqrt();
                if d <= r_lv {
                    lv.set(x, y, true);
                } else if d <= r_out {
                    myo.set(x, y, true);
                } else if drv <= r_rv && d > r_out + gap {
                    rv.set(x, y, true);
                }
            }
        }
        let rv = largest_component(&rv);
        let all = [lv, myo, rv];
        let shapes = &all[..spec.n_targets];
        if shapes.iter().any(|m| m.count() < min_area || touches_border(m)) {
            continue;
        }
        if shapes.iter().any(|m| connected_components(m).len() != 1) {
            continue;
        }

        let bg = rng.random_range(0.05..0.2);
        let levels = [rng.random_range(0.75..0.9), rng.random_range(0.35..0.45), rng.random_range(0.58..0.68)];
        let (fx, fy, phase) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.0..2.0 * PI));
        let noise = Normal::new(0.0, spec.noise_std.max(1e-12)).expect("finite std");
        let mut img = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let mut v = bg + 0.04 * ((x as f64 / s * fx * PI + phase).sin() * (y as f64 / s * fy * PI).cos());
                for (m, &level) in shapes.iter().zip(&levels) {
                    if m.get(x, y) {
                        v = level;
                    }
                }
                let eps = if spec.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                img[y * n + x] = v + eps;
            }
        }
        let image = quantize(&normalize(&img));
        let masks = shapes.iter().cloned().enumerate().collect();
        return Sample {
            sample_id: format!("synth_{index:05}"),
            image: Tensor::from_vec(&[n, n], image).expect("shape"),
            masks,
        };
    }
}

/// Per-image min-max scaling to [0, 1]; constant images map to 0.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| (v - lo) / (hi - lo)).collect()
}

fn quantize(values: &[f64]) -> Vec<f64> {
    values.iter().map(|&v| (v * 65535.0).round() / 65535.0).collect()
}

pub fn encode_gray16(height: usize, width: usize, values: &[f64]) -> Result<Vec<u8>> {
    let mut raw = Vec::with_capacity(values.len() * 2);
    for &v in values {
        raw.extend_from_slice(&((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes());
    }
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut w = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
    w.write_image_data(&raw).map_err(|e| Error::Format(e.to_string()))?;
    w.finish().map_err(|e| Error::Format(e.to_string()))?;
    Ok(out)
}

fn label_palette() -> Vec<u8> {
    let colours: [[u8; 3]; 8] = [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [0, 130, 200],
        [255, 225, 25],
        [145, 30, 180],
        [70, 240, 240],
        [245, 130, 48],
    ];
    (0..256).flat_map(|i| if i < 8 { colours[i] } else { [i as u8; 3] }).collect()
}

/// Paletted label map: 0 = background, `t + 1` = target `t`.
pub fn encode_labels(height: usize, width: usize, masks: &BTreeMap<usize, BinaryMask>) -> Result<Vec<u8>> {
    let mut labels = vec![0u8; height * width];
    for (&t, m) in masks {
        if t >= 255 {
            return Err(Error::Contract(format!("target id {t} does not fit an 8-bit label map")));
        }
        for (i, &b) in m.bits().iter().enumerate() {
            if b {
                if labels[i] != 0 {
                    return Err(Error::Contract(format!("targets {} and {t} overlap", labels[i] - 1)));
                }
                labels[i] = t as u8 + 1;
            }
        }
    }
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(label_palette());
    let mut w = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
    w.write_image_data(&labels).map_err(|e| Error::Format(e.to_string()))?;
    w.finish().map_err(|e| Error::Format(e.to_string()))?;
    Ok(out)
}

/// A decoded image before normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedImage {
    pub height: usize,
    pub width: usize,
    /// Row-major gray values scaled by the bit depth's maximum to [0, 1].
    pub gray: Vec<f64>,
    /// Colour conversion applied, if any (e.g. "rgb->gray").
    pub conversion: Option<String>,
}

fn fmt_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("png: {e}"))
}

/// Decodes any 8/16-bit PNG to gray. Colour inputs use Rec.601 luma; alpha
/// is ignored.
pub fn decode_image(bytes: &[u8]) -> Result<DecodedImage> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(fmt_err)?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| fmt_err("image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(fmt_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let wide = info.bit_depth == png::BitDepth::Sixteen;
    let max = if wide { 65535.0 } else { 255.0 };
    let sample = |i: usize| -> f64 {
        if wide {
            u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]]) as f64 / max
        } else {
            buf[i] as f64 / max
        }
    };
    let (channels, conversion) = match info.color_type {
        png::ColorType::Grayscale => (1, None),
        png::ColorType::GrayscaleAlpha => (2, Some("gray+alpha->gray")),
        png::ColorType::Rgb => (3, Some("rgb->gray")),
        png::ColorType::Rgba => (4, Some("rgba->gray")),
        png::ColorType::Indexed => return Err(fmt_err("unexpanded palette image")),
    };
    let gray = (0..w * h)
        .map(|p| {
            let base = p * channels;
            if channels >= 3 {
                0.299 * sample(base) + 0.587 * sample(base + 1) + 0.114 * sample(base + 2)
            } else {
                sample(base)
            }
        })
        .collect();
    Ok(DecodedImage { height: h, width: w, gray, conversion: conversion.map(String::from) })
}

/// Decodes an 8-bit label map (paletted or gray) to raw label values.
pub fn decode_labels(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(fmt_err)?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| fmt_err("image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(fmt_err)?;
    match (info.color_type, info.bit_depth) {
        (png::ColorType::Indexed | png::ColorType::Grayscale, png::BitDepth::Eight) => {}
        other => return Err(Error::Format(format!("label map must be 8-bit paletted or gray, got {other:?}"))),
    }
    let (w, h) = (info.width as usize, info.height as usize);
    buf.truncate(w * h);
    Ok((h, w, buf))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_sample(manifest: &DatasetManifest, index: usize) -> Result<Sample> {
    let e = manifest.entries.get(index).ok_or(Error::Range { index, len: manifest.len() })?;
    let img = decode_image(&read(&manifest.root.join(&e.image_file))?)?;
    let (h, w, labels) = decode_labels(&read(&manifest.root.join(&e.mask_file))?)?;
    if (h, w) != (img.height, img.width) {
        return Err(Error::Format(format!(
            "{}: label map {h}x{w} does not match image {}x{}",
            e.sample_id, img.height, img.width
        )));
    }
    let mut masks = BTreeMap::new();
    for &t in &e.target_ids {
        let bits = labels.iter().map(|&l| l as usize == t + 1).collect();
        masks.insert(t, BinaryMask::from_bits(h, w, bits)?);
    }
    let image = Tensor::from_vec(&[h, w], normalize(&img.gray))?;
    let sample = Sample { sample_id: e.sample_id.clone(), image, masks };
    sample.validate()?;
    Ok(sample)
}

pub fn load_all(manifest: &DatasetManifest) -> Result<Vec<Sample>> {
    (0..manifest.len()).map(|i| load_sample(manifest, i)).collect()
}

/// Writes `samples` under `root` and returns the saved manifest.
pub fn write_dataset(
    root: &Path,
    split: Split,
    target_names: BTreeMap<usize, String>,
    samples: &[Sample],
) -> Result<DatasetManifest> {
    for dir in [root.to_path_buf(), root.join("images"), root.join("masks")] {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut entries = Vec::new();
    for s in samples {
        s.validate()?;
        let image_file = format!("images/{}.png", s.sample_id);
        let mask_file = format!("masks/{}.png", s.sample_id);
        let img = encode_gray16(s.height(), s.width(), s.image.data())?;
        let lab = encode_labels(s.height(), s.width(), &s.masks)?;
        for (f, bytes) in [(&image_file, img), (&mask_file, lab)] {
            let p = root.join(f);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        }
        entries.push(ManifestEntry {
            sample_id: s.sample_id.clone(),
            image_file,
            mask_file,
            target_ids: s.masks.keys().copied().collect(),
        });
    }
    let m = DatasetManifest { root: root.to_path_buf(), split, target_names, entries };
    m.save()?;
    Ok(m)
}

/// In-memory synthetic corpus, deterministic in `spec.seed`.
pub fn synthesize_all(spec: &GenSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.n_samples).map(|i| synthesize(spec, i, &mut rng)).collect())
}

pub fn default_target_names(n: usize) -> BTreeMap<usize, String> {
    DEFAULT_TARGET_NAMES.iter().take(n).enumerate().map(|(i, s)| (i, s.to_string())).collect()
}

pub fn generate_synthetic_dataset(spec: &GenSpec, root: &Path, split: Split) -> Result<DatasetManifest> {
    let samples = synthesize_all(spec)?;
    write_dataset(root, split, default_target_names(spec.n_targets), &samples)
}
