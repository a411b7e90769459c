//! Image and mask datasets: a line-delimited JSON manifest, sample loading,
//! and a seeded synthetic lesion generator.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{ImageFormat, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HfnError, Result};
use crate::mask::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LesionLabel {
    #[serde(rename = "melanoma")]
    Melanoma,
    #[serde(rename = "non-melanoma")]
    NonMelanoma,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LesionSample {
    pub id: String,
    pub image: RgbImage,
    pub mask: Mask,
    pub label: LesionLabel,
    pub split: Split,
}

impl LesionSample {
    pub fn dims(&self) -> (usize, usize) {
        self.mask.dims()
    }
}

/// One manifest line. Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub label: LesionLabel,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ManifestSummary {
    pub train: usize,
    pub test: usize,
    pub melanoma: usize,
    pub non_melanoma: usize,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn summary(&self) -> ManifestSummary {
        let mut s = ManifestSummary::default();
        for e in &self.entries {
            match e.split {
                Split::Train => s.train += 1,
                Split::Test => s.test += 1,
            }
            match e.label {
                LesionLabel::Melanoma => s.melanoma += 1,
                LesionLabel::NonMelanoma => s.non_melanoma += 1,
            }
        }
        s
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
            out.push('\n');
        }
        out
    }

    /// Parse manifest text. Relative paths are joined onto `base`; when
    /// `check_paths` is set every referenced file must exist.
    pub fn parse(text: &str, base: &Path, check_paths: bool) -> Result<DatasetManifest> {
        let mut entries = Vec::new();
        let mut ids = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let mut e: ManifestEntry = serde_json::from_str(raw)
                .map_err(|err| HfnError::Manifest { line, message: err.to_string() })?;
            if !ids.insert(e.id.clone()) {
                return Err(HfnError::Manifest { line, message: format!("duplicate id {:?}", e.id) });
            }
            for p in [&mut e.image, &mut e.mask] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
                if check_paths && !p.exists() {
                    return Err(HfnError::Manifest { line, message: format!("file not found: {}", p.display()) });
                }
            }
            entries.push(e);
        }
        if entries.is_empty() {
            return Err(HfnError::EmptyManifest);
        }
        Ok(DatasetManifest { entries })
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| HfnError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    DatasetManifest::parse(&text, base, true)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| HfnError::Image { path: path.to_path_buf(), source })
}

pub fn load_sample(entry: &ManifestEntry) -> Result<LesionSample> {
    let image = open_image(&entry.image)?.to_rgb8();
    let mask = Mask::from_gray_image(&open_image(&entry.mask)?.to_luma8());
    if (image.height() as usize, image.width() as usize) != mask.dims() {
        return Err(HfnError::ShapeMismatch(format!(
            "{}: image is {}x{} but mask is {}x{}",
            entry.id,
            image.height(),
            image.width(),
            mask.height(),
            mask.width()
        )));
    }
    if mask.height() == 0 || mask.width() == 0 {
        return Err(HfnError::EmptyImage);
    }
    Ok(LesionSample { id: entry.id.clone(), image, mask, label: entry.label, split: entry.split })
}

pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<LesionSample>> {
    manifest.split(split).map(load_sample).collect()
}

/// Write `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(bytes).and_then(|_| f.sync_all()))
        .and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(HfnError::io(path, e));
    }
    Ok(())
}

pub fn png_bytes(image: &RgbImage) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    image.write_to(&mut buf, ImageFormat::Png).expect("in-memory PNG encoding");
    buf.into_inner()
}

/// Save a sample as `images/<id>.png` and `masks/<id>.png` under `dir`,
/// returning its manifest entry with paths relative to `dir`.
pub fn save_sample(sample: &LesionSample, dir: &Path) -> Result<ManifestEntry> {
    let image = PathBuf::from("images").join(format!("{}.png", sample.id));
    let mask = PathBuf::from("masks").join(format!("{}.png", sample.id));
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| HfnError::io(&d, e))?;
    }
    write_atomic(&dir.join(&image), &png_bytes(&sample.image))?;
    write_atomic(&dir.join(&mask), &sample.mask.to_png_bytes())?;
    Ok(ManifestEntry { id: sample.id.clone(), image, mask, label: sample.label, split: sample.split })
}

#[derive(Clone, Debug)]
struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    /// `(amplitude, frequency, phase)` radial perturbations.
    wobble: Vec<(f64, f64, f64)>,
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Blob {
        let r = rng.random_range(0.12..0.26) * size;
        Blob {
            cy: rng.random_range(0.3..0.7) * size,
            cx: rng.random_range(0.3..0.7) * size,
            ry: r * rng.random_range(0.7..1.0),
            rx: r * rng.random_range(0.7..1.0),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            wobble: (2..=4)
                .map(|k| (rng.random_range(0.0..0.07), k as f64, rng.random_range(0.0..std::f64::consts::TAU)))
                .collect(),
        }
    }

    /// Signed radial coordinate: below 1 inside the blob. Also returns the
    /// local radius in pixels for edge softening.
    fn level(&self, y: f64, x: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        let theta = v.atan2(u);
        let boundary = 1.0 + self.wobble.iter().map(|&(a, k, p)| a * (k * theta + p).sin()).sum::<f64>();
        ((u * u + v * v).sqrt() / boundary, self.rx.min(self.ry) * boundary)
    }
}

#[derive(Clone, Copy, Debug)]
struct Style {
    skin: [f64; 3],
    lesion: [f64; 3],
    /// Weight of the lesion colour over skin, 0..1.
    contrast: f64,
    /// Edge softness in pixels.
    softness: f64,
    noise: f64,
}

fn sample_style(rng: &mut ChaCha8Rng) -> Style {
    let skin = [rng.random_range(180.0..230.0), rng.random_range(130.0..180.0), rng.random_range(100.0..150.0)];
    let dark = rng.random_range(0.25..0.6);
    let lesion = [skin[0] * dark, skin[1] * dark * 0.8, skin[2] * dark * 0.7];
    // One in four lesions is low contrast with a fuzzy edge.
    let hard = rng.random_bool(0.25);
    Style {
        skin,
        lesion,
        contrast: if hard { rng.random_range(0.2..0.4) } else { rng.random_range(0.5..1.0) },
        softness: if hard { rng.random_range(2.0..5.0) } else { rng.random_range(0.5..2.0) },
        noise: rng.random_range(3.0..12.0),
    }
}

fn render(size: usize, blobs: &[Blob], style: &Style, rng: &mut ChaCha8Rng) -> (RgbImage, Mask) {
    let mut mask = Mask::zeros(size, size);
    let mut alpha = vec![0.0f64; size * size];
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut inside = false;
            let mut a = 0.0f64;
            for b in blobs {
                let (lvl, radius) = b.level(py, px);
                inside |= lvl <= 1.0;
                let signed_px = (1.0 - lvl) * radius;
                a = a.max(1.0 / (1.0 + (-signed_px / style.softness * 2.0).exp()));
            }
            mask.set(y, x, inside);
            alpha[y * size + x] = a;
        }
    }
    // Low-frequency illumination gradient.
    let (gy, gx) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    let normal = Normal::new(0.0, style.noise).expect("positive std");
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let shade = 1.0 + gy * (y as f64 / size as f64 - 0.5) + gx * (x as f64 / size as f64 - 0.5);
            let a = alpha[y * size + x] * style.contrast;
            let px = std::array::from_fn(|c| {
                let v = (style.skin[c] * (1.0 - a) + style.lesion[c] * a) * shade + normal.sample(rng);
                v.round().clamp(0.0, 255.0) as u8
            });
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    (img, mask)
}

fn draw_hairs(img: &mut RgbImage, rng: &mut ChaCha8Rng) {
    let size = img.width() as f64;
    for _ in 0..rng.random_range(1..=4) {
        let (y0, x0) = (rng.random_range(0.0..size), rng.random_range(0.0..size));
        let (y1, x1) = (rng.random_range(0.0..size), rng.random_range(0.0..size));
        let (ym, xm) = (rng.random_range(0.0..size), rng.random_range(0.0..size));
        let shade: u8 = rng.random_range(20..70);
        let steps = (size * 3.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            // Quadratic Bezier through a random control point.
            let y = (1.0 - t).powi(2) * y0 + 2.0 * (1.0 - t) * t * ym + t * t * y1;
            let x = (1.0 - t).powi(2) * x0 + 2.0 * (1.0 - t) * t * xm + t * t * x1;
            let (yi, xi) = (y as i64, x as i64);
            if yi >= 0 && xi >= 0 && (yi as u32) < img.height() && (xi as u32) < img.width() {
                img.put_pixel(xi as u32, yi as u32, Rgb([shade, shade / 2 + 10, shade / 2]));
            }
        }
    }
}

/// Both classes must have at least this many pixels at 128x128, scaled by area.
pub const SYNTHETIC_MIN_PIXELS: usize = 100;

fn synthetic_sample(index: usize, size: usize, seed: u64, split: Split) -> LesionSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let min_pixels = (SYNTHETIC_MIN_PIXELS * size * size).div_ceil(128 * 128).max(16);
    let sizef = size as f64;
    loop {
        let blobs: Vec<Blob> = (0..rng.random_range(1..=3)).map(|_| Blob::random(&mut rng, sizef)).collect();
        let style = sample_style(&mut rng);
        let (mut image, mask) = render(size, &blobs, &style, &mut rng);
        if mask.count_foreground() < min_pixels || mask.count_background() < min_pixels {
            continue;
        }
        if rng.random_bool(0.4) {
            draw_hairs(&mut image, &mut rng);
        }
        let label = if rng.random_bool(0.2) { LesionLabel::Melanoma } else { LesionLabel::NonMelanoma };
        return LesionSample { id: format!("synth_{index:05}"), image, mask, label, split };
    }
}

/// Number of training samples in an 80/20 split of `count`.
pub fn train_count(count: usize) -> usize {
    (count * 4 + 2) / 5
}

/// Generate `count` synthetic samples in memory. Deterministic in `seed`.
pub fn synthetic_samples(count: usize, size: usize, seed: u64) -> Vec<LesionSample> {
    let n_train = train_count(count);
    (0..count)
        .map(|i| synthetic_sample(i, size, seed, if i < n_train { Split::Train } else { Split::Test }))
        .collect()
}

/// Generate and write a synthetic dataset with `manifest.jsonl` under `out_dir`.
pub fn make_synthetic_dataset(count: usize, image_size: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(HfnError::EmptyManifest);
    }
    if image_size < 32 {
        return Err(HfnError::InvalidConfig(format!("synthetic image size {image_size} is below 32")));
    }
    fs::create_dir_all(out_dir).map_err(|e| HfnError::io(out_dir, e))?;
    let entries = synthetic_samples(count, image_size, seed)
        .iter()
        .map(|s| save_sample(s, out_dir))
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest { entries };
    write_atomic(&out_dir.join("manifest.jsonl"), manifest.to_jsonl().as_bytes())?;
    Ok(DatasetManifest {
        entries: manifest
            .entries
            .into_iter()
            .map(|mut e| {
                e.image = out_dir.join(e.image);
                e.mask = out_dir.join(e.mask);
                e
            })
            .collect(),
    })
}
