//! Synthetic confounded images and the on-disk manifest format.
//!
//! Each sample follows a small structural causal model: a class `y` draws a
//! lesion-like morphology in the image centre, an artifact id `s` draws an
//! environmental cue in the image border, and selection bias couples the two
//! through `s = y mod num_artifacts` with probability `rho`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fraction of the image side covered by the artifact border band.
pub const BORDER_BAND: f64 = 0.18;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MANIFEST_HEADER: [&str; 4] = ["sample_id", "path", "label", "artifact_id"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x5452_4149_4e00_0001,
            Split::Val => 0x5641_4c00_0000_0002,
            Split::Test => 0x5445_5354_0000_0003,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScmConfig {
    pub num_classes: usize,
    pub num_artifacts: usize,
    pub image_size: usize,
    pub rho_train: f64,
    pub rho_test: f64,
    pub samples_per_split: usize,
    /// Overrides `samples_per_split` for the validation split.
    pub val_samples: Option<usize>,
    /// Overrides `samples_per_split` for the test split.
    pub test_samples: Option<usize>,
    pub noise_std: f64,
    /// Lets artifacts intrude into the lesion region.
    pub overlap: bool,
    pub seed: u64,
}

impl Default for ScmConfig {
    fn default() -> Self {
        ScmConfig {
            num_classes: 3,
            num_artifacts: 3,
            image_size: 32,
            rho_train: 0.9,
            rho_test: 0.0,
            samples_per_split: 1000,
            val_samples: None,
            test_samples: None,
            noise_std: 0.03,
            overlap: false,
            seed: 0,
        }
    }
}

impl ScmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.num_artifacts < 2 {
            return Err(Error::Config(format!(
                "num_artifacts must be >= 2, got {}",
                self.num_artifacts
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!(
                "image_size must be >= 16, got {}",
                self.image_size
            )));
        }
        for (name, r) in [("rho_train", self.rho_train), ("rho_test", self.rho_test)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }

    pub fn rho(&self, split: Split) -> f64 {
        match split {
            Split::Train | Split::Val => self.rho_train,
            Split::Test => self.rho_test,
        }
    }

    pub fn split_len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.samples_per_split,
            Split::Val => self.val_samples.unwrap_or(self.samples_per_split),
            Split::Test => self.test_samples.unwrap_or(self.samples_per_split),
        }
    }
}

/// An RGB image (HWC, values in `[0, 1]`) with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub sample_id: String,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub label: usize,
    pub artifact_id: Option<usize>,
}

impl ImageSample {
    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }
}

/// Ground-truth pixel regions of a synthetic sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMasks {
    pub causal: Vec<bool>,
    pub artifact: Vec<bool>,
}

/// Packs samples into an NCHW batch tensor.
pub fn to_batch(samples: &[&ImageSample]) -> Tensor {
    let (h, w) = samples.first().map_or((0, 0), |s| (s.height, s.width));
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        assert_eq!((s.height, s.width), (h, w), "mixed image sizes in one batch");
        for c in 0..3 {
            for i in 0..h * w {
                data.push(f64::from(s.pixels[i * 3 + c]));
            }
        }
    }
    Tensor::new(vec![samples.len(), 3, h, w], data)
}

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based per-sample seed.
pub fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    splitmix(splitmix(seed ^ split.tag()) ^ (index as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn generate_dataset(cfg: &ScmConfig, split: Split) -> Result<Vec<ImageSample>> {
    Ok(generate_with_masks(cfg, split)?
        .into_iter()
        .map(|(s, _)| s)
        .collect())
}

pub fn generate_with_masks(cfg: &ScmConfig, split: Split) -> Result<Vec<(ImageSample, RegionMasks)>> {
    cfg.validate()?;
    Ok((0..cfg.split_len(split))
        .map(|i| render_sample(cfg, split, i))
        .collect())
}

/// Draws `(label, artifact)` for one sample from the confounded mechanism.
fn draw_factors(cfg: &ScmConfig, split: Split, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let y = rng.random_range(0..cfg.num_classes);
    let aligned = rng.random::<f64>() < cfg.rho(split);
    let s = if aligned {
        y % cfg.num_artifacts
    } else {
        rng.random_range(0..cfg.num_artifacts)
    };
    (y, s)
}

struct Canvas {
    size: usize,
    rgb: Vec<f64>,
    causal: Vec<bool>,
    artifact: Vec<bool>,
}

impl Canvas {
    fn blend(&mut self, y: usize, x: usize, color: [f64; 3], alpha: f64) {
        let i = (y * self.size + x) * 3;
        for c in 0..3 {
            self.rgb[i + c] = (1.0 - alpha) * self.rgb[i + c] + alpha * color[c];
        }
    }

    /// Normalized pixel-centre coordinates.
    fn uv(&self, y: usize, x: usize) -> (f64, f64) {
        let s = self.size as f64;
        ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s)
    }

    fn edge_dist(&self, y: usize, x: usize) -> f64 {
        let (u, v) = self.uv(y, x);
        u.min(v).min(1.0 - u).min(1.0 - v)
    }
}

/// Renders sample `index` of `split`; deterministic in `(cfg, split, index)`.
pub fn render_sample(cfg: &ScmConfig, split: Split, index: usize) -> (ImageSample, RegionMasks) {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, split, index));
    let (label, artifact) = draw_factors(cfg, split, &mut rng);
    let n = cfg.image_size;
    let tint: f64 = rng.random_range(-0.05..0.05);
    let base = [0.86 + tint, 0.70 + tint, 0.60 + 0.5 * tint];
    let mut cv = Canvas {
        size: n,
        rgb: Vec::with_capacity(n * n * 3),
        causal: vec![false; n * n],
        artifact: vec![false; n * n],
    };
    for _ in 0..n * n {
        cv.rgb.extend_from_slice(&base);
    }
    draw_lesion(&mut cv, label, &mut rng);
    draw_artifact(&mut cv, artifact, cfg.overlap, &mut rng);

    let noise = Normal::new(0.0, cfg.noise_std.max(1e-12)).expect("valid noise");
    let pixels = cv
        .rgb
        .iter()
        .map(|&v| {
            let e = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            quantize(v + e)
        })
        .collect();
    let sample = ImageSample {
        sample_id: format!("{}-{index:06}", split.name()),
        height: n,
        width: n,
        pixels,
        label,
        artifact_id: Some(artifact),
    };
    (
        sample,
        RegionMasks {
            causal: cv.causal,
            artifact: cv.artifact,
        },
    )
}

/// Clips to `[0, 1]` and snaps to the 8-bit grid so PNG storage is lossless.
fn quantize(v: f64) -> f32 {
    let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    f32::from(q) / 255.0
}

fn draw_lesion(cv: &mut Canvas, label: usize, rng: &mut ChaCha8Rng) {
    let style = label % 6;
    // Classes beyond the six base styles reuse a style at a different scale.
    let variant = (label / 6) as f64;
    let cx = 0.5 + rng.random_range(-0.04..0.04);
    let cy = 0.5 + rng.random_range(-0.04..0.04);
    let r0 = rng.random_range(0.15..0.20) * (1.0 - 0.08 * variant).max(0.6);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let shade = rng.random_range(0.85..1.15);
    let dark = [0.36 * shade, 0.22 * shade, 0.14 * shade];
    let light = [0.62 * shade, 0.44 * shade, 0.34 * shade];
    let stripe_angle = rng.random_range(0.0..std::f64::consts::PI);
    let dots: Vec<(f64, f64)> = (0..5)
        .map(|_| {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let d = rng.random_range(0.0..0.6) * r0;
            (cx + d * a.cos(), cy + d * a.sin())
        })
        .collect();

    for y in 0..cv.size {
        for x in 0..cv.size {
            let (u, v) = cv.uv(y, x);
            let (dx, dy) = (u - cx, v - cy);
            let rad = (dx * dx + dy * dy).sqrt();
            let theta = dy.atan2(dx);
            let edge = match style {
                1 => r0 * (1.0 + 0.25 * (5.0 * theta + phase).sin()),
                _ => r0,
            };
            if rad > edge {
                continue;
            }
            let color = match style {
                2 => {
                    let t = dx * stripe_angle.cos() + dy * stripe_angle.sin();
                    if (t / r0 * 3.0 * std::f64::consts::PI).sin() > 0.0 {
                        dark
                    } else {
                        light
                    }
                }
                3 => {
                    if rad > 0.55 * edge {
                        dark
                    } else {
                        light
                    }
                }
                4 => {
                    let near = dots
                        .iter()
                        .any(|(px, py)| ((u - px).powi(2) + (v - py).powi(2)).sqrt() < 0.25 * r0);
                    if near {
                        [0.15 * shade, 0.08 * shade, 0.06 * shade]
                    } else {
                        light
                    }
                }
                5 => {
                    if dx * phase.cos() + dy * phase.sin() > 0.0 {
                        dark
                    } else {
                        light
                    }
                }
                _ => dark,
            };
            cv.blend(y, x, color, 0.9);
            cv.causal[y * cv.size + x] = true;
        }
    }
}

fn draw_artifact(cv: &mut Canvas, artifact: usize, overlap: bool, rng: &mut ChaCha8Rng) {
    let style = artifact % 4;
    // Artifact ids beyond the four base styles change the cue colour.
    let hue = (artifact / 4) as f64;
    let band = if overlap { 0.5 } else { BORDER_BAND };
    let n = cv.size;
    match style {
        0 => {
            // coloured calibration patch in one corner
            let side = if overlap { 0.3 } else { BORDER_BAND };
            let corner = rng.random_range(0..4usize);
            let color = [0.15 + 0.3 * (hue % 2.0), 0.35, 0.85 - 0.2 * (hue % 3.0)];
            for y in 0..n {
                for x in 0..n {
                    let (mut u, mut v) = cv.uv(y, x);
                    if corner & 1 == 1 {
                        u = 1.0 - u;
                    }
                    if corner & 2 == 2 {
                        v = 1.0 - v;
                    }
                    if u < side && v < side {
                        cv.blend(y, x, color, 0.95);
                        cv.artifact[y * n + x] = true;
                    }
                }
            }
        }
        1 => {
            // ruler hash marks along one edge
            let edge = rng.random_range(0..4usize);
            let offset = rng.random_range(0..3usize);
            let ink = [0.1 + 0.1 * (hue % 2.0), 0.1, 0.12];
            for y in 0..n {
                for x in 0..n {
                    let (along, depth) = match edge {
                        0 => (x, y),
                        1 => (x, n - 1 - y),
                        2 => (y, x),
                        _ => (y, n - 1 - x),
                    };
                    let long = ((along + offset) / 3) % 3 == 0;
                    let reach = if long { band } else { band * 0.55 };
                    let d = (depth as f64 + 0.5) / n as f64;
                    if (along + offset) % 3 == 0 && d < reach {
                        cv.blend(y, x, ink, 0.9);
                        cv.artifact[y * n + x] = true;
                    }
                }
            }
        }
        2 => {
            // dark vignette frame
            let strength = rng.random_range(0.75..0.95);
            for y in 0..n {
                for x in 0..n {
                    let d = cv.edge_dist(y, x);
                    if d < band {
                        let a = strength * (1.0 - d / band).powf(0.7);
                        cv.blend(y, x, [0.05, 0.04, 0.05 + 0.1 * (hue % 2.0)], a);
                        if a > 0.15 {
                            cv.artifact[y * n + x] = true;
                        }
                    }
                }
            }
        }
        _ => {
            // hair strokes inside the band (or across the image when overlapping)
            let strokes = rng.random_range(2..4usize);
            for _ in 0..strokes {
                let vertical = rng.random::<bool>();
                let pos = if overlap {
                    rng.random_range(0.1..0.9)
                } else if rng.random::<bool>() {
                    rng.random_range(0.03..band - 0.03)
                } else {
                    1.0 - rng.random_range(0.03..band - 0.03)
                };
                let amp = rng.random_range(0.01..0.03);
                let freq = rng.random_range(4.0..9.0);
                let ph = rng.random_range(0.0..std::f64::consts::TAU);
                for y in 0..n {
                    for x in 0..n {
                        let (u, v) = cv.uv(y, x);
                        let (along, across) = if vertical { (v, u) } else { (u, v) };
                        let centre = pos + amp * (freq * along + ph).sin();
                        if (across - centre).abs() < 0.6 / n as f64 {
                            cv.blend(y, x, [0.12, 0.08, 0.06 + 0.1 * (hue % 2.0)], 0.9);
                            cv.artifact[y * n + x] = true;
                        }
                    }
                }
            }
        }
    }
}

// ----- manifest ------------------------------------------------------------

/// Writes PNG images under `dir/images/` plus `dir/manifest.csv`.
pub fn write_manifest(samples: &[ImageSample], dir: &Path) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let manifest = dir.join(MANIFEST_FILE);
    let file = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| Error::io(&manifest, std::io::Error::other(e.to_string()));
    w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for s in samples {
        let rel = format!("images/{}.png", s.sample_id);
        let path = dir.join(&rel);
        save_png(s, &path)?;
        let artifact = s.artifact_id.map(|a| a.to_string()).unwrap_or_default();
        w.write_record([s.sample_id.as_str(), rel.as_str(), &s.label.to_string(), &artifact])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

pub fn save_png(s: &ImageSample, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = s.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect();
    let img = image::RgbImage::from_raw(s.width as u32, s.height as u32, bytes)
        .ok_or_else(|| Error::Image {
            path: path.to_path_buf(),
            msg: "pixel buffer does not match image size".into(),
        })?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
}

/// Loads an image file as an `ImageSample` body, resized to `size` if given.
pub fn load_image(path: &Path, size: Option<usize>) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let img = match size {
        Some(n) if img.width() as usize != n || img.height() as usize != n => {
            image::imageops::resize(&img, n as u32, n as u32, image::imageops::FilterType::Triangle)
        }
        _ => img,
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = img.into_raw().into_iter().map(|b| f32::from(b) / 255.0).collect();
    Ok((h, w, pixels))
}

/// Reads `dir/manifest.csv` and its images, rescaling to `image_size` when set.
pub fn read_manifest(dir: &Path, image_size: Option<usize>) -> Result<Vec<ImageSample>> {
    let manifest = dir.join(MANIFEST_FILE);
    let file = fs::File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: manifest.clone(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(i as u64 + 1, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(i as u64 + 1, |p| p.line());
        if i == 0 {
            let header: Vec<&str> = rec.iter().map(str::trim).collect();
            if header != MANIFEST_HEADER {
                return Err(parse_err(
                    line,
                    format!("expected header {}, found {}", MANIFEST_HEADER.join(","), header.join(",")),
                ));
            }
            continue;
        }
        if rec.len() != 4 {
            return Err(parse_err(line, format!("expected 4 fields, found {}", rec.len())));
        }
        let label = rec[2]
            .trim()
            .parse::<usize>()
            .map_err(|_| parse_err(line, format!("label '{}' is not a class index", &rec[2])))?;
        let artifact_id = match rec[3].trim() {
            "" => None,
            a => Some(
                a.parse::<usize>()
                    .map_err(|_| parse_err(line, format!("artifact_id '{a}' is not an integer")))?,
            ),
        };
        let (height, width, pixels) = load_image(&dir.join(rec[1].trim()), image_size)?;
        out.push(ImageSample {
            sample_id: rec[0].trim().to_string(),
            height,
            width,
            pixels,
            label,
            artifact_id,
        });
    }
    Ok(out)
}

/// Writes a manifest for an existing image folder from a `image,label` CSV.
///
/// Labels that are all non-negative integers are used as-is; otherwise the
/// distinct label names are indexed in sorted order. Returns the manifest
/// path and the class names in index order.
pub fn manifest_from_label_csv(image_dir: &Path, labels_csv: &Path) -> Result<(PathBuf, Vec<String>)> {
    let file = fs::File::open(labels_csv).map_err(|e| Error::io(labels_csv, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            path: labels_csv.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        if rec.len() < 2 {
            return Err(Error::Parse {
                path: labels_csv.to_path_buf(),
                line: rec.position().map_or(0, |p| p.line()),
                msg: "expected columns image,label".into(),
            });
        }
        rows.push((rec[0].trim().to_string(), rec[1].trim().to_string()));
    }
    let numeric = rows.iter().all(|(_, l)| l.parse::<usize>().is_ok());
    let mut names: Vec<String> = rows.iter().map(|(_, l)| l.clone()).collect();
    names.sort();
    names.dedup();
    if numeric {
        names.sort_by_key(|n| n.parse::<usize>().unwrap_or(usize::MAX));
    }
    let manifest = image_dir.join(MANIFEST_FILE);
    let mut out = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut text = MANIFEST_HEADER.join(",");
    text.push('\n');
    for (image, label) in &rows {
        let idx = if numeric {
            label.parse::<usize>().unwrap_or_default()
        } else {
            names.iter().position(|n| n == label).unwrap_or_default()
        };
        let id = Path::new(image)
            .file_stem()
            .map_or_else(|| image.clone(), |s| s.to_string_lossy().into_owned());
        text.push_str(&format!("{id},{image},{idx},\n"));
    }
    out.write_all(text.as_bytes()).map_err(|e| Error::io(&manifest, e))?;
    Ok((manifest, names))
}
