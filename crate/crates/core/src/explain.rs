//! Case-based explanations: nearest projected prototypes, occlusion heatmaps
//! and a static HTML report.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::datagen::{to_batch, ImageSample};
use crate::error::{Error, Result};
use crate::model::{Branch, DualEncoder};
use crate::prototypes::{distance, CausalLibrary, DistanceKind};
use crate::trainer::TrainState;

const HEAT_CHUNK: usize = 64;

/// One retrieved prototype.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedPrototype {
    pub index: usize,
    pub class: usize,
    pub distance: f64,
    pub provenance: String,
}

/// Occluding patch geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Occlusion {
    pub patch: usize,
    pub stride: usize,
}

impl Default for Occlusion {
    fn default() -> Self {
        Occlusion { patch: 8, stride: 4 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExplanationBundle {
    pub sample_id: String,
    pub label: usize,
    pub predicted: usize,
    pub probs: Vec<f64>,
    pub top: Vec<RankedPrototype>,
    /// Row-major `height x width`, in `[0, 1]`.
    pub heatmap: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// Entropy (nats) of the class distribution under each spurious context;
    /// empty when the variant does not intervene.
    pub context_entropy: Vec<f64>,
    #[serde(skip)]
    pub image: ImageSample,
    #[serde(skip)]
    pub thumbnails: Vec<Option<ImageSample>>,
}

/// The `k` projected prototypes closest to `z_c`, nearest first, ties by
/// index.
pub fn nearest_prototypes(
    z_c: &[f64],
    lib: &CausalLibrary,
    k: usize,
    kind: DistanceKind,
) -> Result<Vec<RankedPrototype>> {
    if !lib.is_projected() {
        return Err(Error::Contract(
            "causal prototypes have no provenance; project them onto training latents before explaining".into(),
        ));
    }
    if k > lib.len() {
        return Err(Error::Contract(format!("asked for {k} prototypes but the library holds {}", lib.len())));
    }
    let mut ranked = Vec::with_capacity(lib.len());
    for i in 0..lib.len() {
        ranked.push((distance(z_c, lib.prototypes.row(i), kind)?, i));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(ranked
        .into_iter()
        .take(k)
        .map(|(d, i)| RankedPrototype {
            index: i,
            class: lib.class_of[i],
            distance: d,
            provenance: lib.provenance[i].clone().expect("projected"),
        })
        .collect())
}

fn positions(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=len - patch).step_by(stride).collect();
    if *out.last().expect("non-empty") != len - patch {
        out.push(len - patch);
    }
    out
}

/// Occlusion attribution of the distance between `image`'s causal latent and
/// `prototype`: every patch position is filled with the image's per-channel
/// mean, the heat of a position is the resulting increase in distance, and
/// the coarse grid is bilinearly upsampled to the image and min-max scaled.
pub fn similarity_heatmap(
    image: &ImageSample,
    encoder: &DualEncoder,
    prototype: &[f64],
    occ: Occlusion,
    kind: DistanceKind,
) -> Result<Vec<f64>> {
    let (h, w) = (image.height, image.width);
    if occ.patch == 0 || occ.stride == 0 {
        return Err(Error::Contract("occlusion patch and stride must be positive".into()));
    }
    if occ.patch > h || occ.patch > w {
        return Err(Error::Contract(format!("occlusion patch {} exceeds the {h}x{w} image", occ.patch)));
    }
    let mut sum = [0f64; 3];
    for px in image.pixels.chunks(3) {
        for c in 0..3 {
            sum[c] += f64::from(px[c]);
        }
    }
    let mean = sum.map(|s| (s / (h * w) as f64) as f32);

    let ys = positions(h, occ.patch, occ.stride);
    let xs = positions(w, occ.patch, occ.stride);
    let mut variants = Vec::with_capacity(ys.len() * xs.len());
    for &y0 in &ys {
        for &x0 in &xs {
            let mut s = image.clone();
            for y in y0..y0 + occ.patch {
                for x in x0..x0 + occ.patch {
                    let o = (y * w + x) * 3;
                    s.pixels[o..o + 3].copy_from_slice(&mean);
                }
            }
            variants.push(s);
        }
    }
    let base = encoder.encode_branch(&to_batch(&[image]), Branch::Causal)?;
    let d0 = distance(base.row(0), prototype, kind)?;
    let mut coarse = Vec::with_capacity(variants.len());
    for chunk in variants.chunks(HEAT_CHUNK) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let z = encoder.encode_branch(&to_batch(&refs), Branch::Causal)?;
        for i in 0..z.rows() {
            coarse.push(distance(z.row(i), prototype, kind)? - d0);
        }
    }
    let up = upsample(&coarse, ys.len(), xs.len(), h, w, occ);
    Ok(normalize(up))
}

/// Bilinear interpolation of the grid of patch centres onto every pixel.
fn upsample(coarse: &[f64], gy: usize, gx: usize, h: usize, w: usize, occ: Occlusion) -> Vec<f64> {
    let coord = |p: usize, len: usize, g: usize| -> (usize, usize, f64) {
        let pos = positions(len, occ.patch, occ.stride);
        let centre = p as f64 + 0.5;
        let half = occ.patch as f64 / 2.0;
        if g == 1 || centre <= pos[0] as f64 + half {
            return (0, 0, 0.0);
        }
        for i in 0..g - 1 {
            let (a, b) = (pos[i] as f64 + half, pos[i + 1] as f64 + half);
            if centre <= b {
                return (i, i + 1, (centre - a) / (b - a));
            }
        }
        (g - 1, g - 1, 0.0)
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (y0, y1, ty) = coord(y, h, gy);
        for x in 0..w {
            let (x0, x1, tx) = coord(x, w, gx);
            let v = |i: usize, j: usize| coarse[i * gx + j];
            let top = v(y0, x0) * (1.0 - tx) + v(y0, x1) * tx;
            let bottom = v(y1, x0) * (1.0 - tx) + v(y1, x1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

/// Min-max scaling to `[0, 1]`; a flat map becomes all zeros.
pub fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        v.iter_mut().for_each(|x| *x = 0.0);
    } else {
        v.iter_mut().for_each(|x| *x = (*x - lo) / range);
    }
    v
}

/// Mean heat over the pixels where `mask` is set; `None` for an empty mask.
pub fn region_mean(heatmap: &[f64], mask: &[bool]) -> Option<f64> {
    let (sum, n) = heatmap
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (h, _)| (s + h, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Explains one prediction of a trained state. `library` maps training
/// sample ids to images for the prototype thumbnails.
pub fn explain_sample(
    state: &TrainState,
    sample: &ImageSample,
    k: usize,
    occ: Occlusion,
    library: &HashMap<&str, &ImageSample>,
) -> Result<ExplanationBundle> {
    let zc = state.encoder.encode_branch(&to_batch(&[sample]), Branch::Causal)?;
    let probs = state.predict_from_latents(&zc)?.row(0).to_vec();
    let predicted = probs
        .iter()
        .enumerate()
        .fold(0, |best, (i, &p)| if p > probs[best] { i } else { best });
    let kind = state.config.logit_distance;
    let top = nearest_prototypes(zc.row(0), &state.causal, k, kind)?;
    let heatmap = match top.first() {
        Some(first) => similarity_heatmap(sample, &state.encoder, state.causal.prototypes.row(first.index), occ, kind)?,
        None => vec![0.0; sample.height * sample.width],
    };
    let context_entropy = match state.intervention(zc.row(0))? {
        Some(out) => out.per_context.iter().map(|p| entropy(p)).collect(),
        None => Vec::new(),
    };
    let thumbnails = top.iter().map(|r| library.get(r.provenance.as_str()).map(|s| (*s).clone())).collect();
    Ok(ExplanationBundle {
        sample_id: sample.sample_id.clone(),
        label: sample.label,
        predicted,
        probs,
        top,
        heatmap,
        height: sample.height,
        width: sample.width,
        context_entropy,
        image: sample.clone(),
        thumbnails,
    })
}

fn rgb_bytes(s: &ImageSample) -> Vec<u8> {
    s.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn write_png(path: &Path, w: usize, h: usize, bytes: Vec<u8>) -> Result<()> {
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes).ok_or_else(|| Error::Image {
        path: path.to_path_buf(),
        msg: "pixel buffer does not match image size".into(),
    })?;
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Input and heat overlay side by side.
fn overlay_bytes(b: &ExplanationBundle) -> Vec<u8> {
    let (h, w) = (b.height, b.width);
    let src = rgb_bytes(&b.image);
    let mut out = vec![0u8; h * 2 * w * 3];
    for y in 0..h {
        for x in 0..w {
            let s = (y * w + x) * 3;
            let left = (y * 2 * w + x) * 3;
            let right = (y * 2 * w + w + x) * 3;
            out[left..left + 3].copy_from_slice(&src[s..s + 3]);
            let a = 0.6 * b.heatmap[y * w + x];
            let tint = [255.0, 40.0, 0.0];
            for c in 0..3 {
                out[right + c] = (f64::from(src[s + c]) * (1.0 - a) + tint[c] * a).round() as u8;
            }
        }
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Writes `index.html` plus one overlay PNG and one thumbnail PNG per
/// retrieved prototype for each bundle. Returns the index path.
pub fn render_report(bundles: &[ExplanationBundle], out_dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut html = String::from(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>Prototype explanations</title>\n\
         <style>img{image-rendering:pixelated;margin:4px}figure{display:inline-block;margin:4px}</style>\n\
         </head>\n<body>\n<h1>Prototype explanations</h1>\n",
    );
    for (i, b) in bundles.iter().enumerate() {
        let overlay = format!("panel{i:04}_overlay.png");
        write_png(&out_dir.join(&overlay), b.width * 2, b.height, overlay_bytes(b))?;
        let _ = writeln!(
            html,
            "<section>\n<h2>{}</h2>\n<p>label {} / predicted {} (p = {:.4})</p>",
            escape(&b.sample_id),
            b.label,
            b.predicted,
            b.probs.get(b.predicted).copied().unwrap_or(f64::NAN)
        );
        let _ = writeln!(
            html,
            "<figure><img src=\"{overlay}\" width=\"{}\" height=\"{}\" alt=\"input and heatmap\"><figcaption>input | heatmap</figcaption></figure>",
            b.width * 8,
            b.height * 4
        );
        for (r, p) in b.top.iter().enumerate() {
            let name = format!("panel{i:04}_proto{r}.png");
            let path = out_dir.join(&name);
            match b.thumbnails.get(r).and_then(Option::as_ref) {
                Some(t) => write_png(&path, t.width, t.height, rgb_bytes(t))?,
                None => write_png(&path, 1, 1, vec![128, 128, 128])?,
            }
            let _ = writeln!(
                html,
                "<figure><img src=\"{name}\" width=\"128\" height=\"128\" alt=\"prototype {}\"><figcaption>#{} class {} d={:.4}<br>{}</figcaption></figure>",
                p.index,
                p.index,
                p.class,
                p.distance,
                escape(&p.provenance)
            );
        }
        html.push_str("</section>\n");
    }
    html.push_str("</body>\n</html>\n");
    let index = out_dir.join("index.html");
    fs::write(&index, html).map_err(|e| Error::io(&index, e))?;
    Ok(index)
}
