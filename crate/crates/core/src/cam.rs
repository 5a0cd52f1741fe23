//! Category activation maps: the spatial attention of a category, upsampled
//! to the model input and blended over it.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Overlay opacity of the heat colors.
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Rescales a `(W, H)` attention map by its maximum and upsamples it to
/// `width x height` pixels with half-pixel-centred bilinear interpolation.
/// Output is indexed `[y, x]` with values in `[0, 1]`.
pub fn upsample_attention<T: Scalar>(map: ArrayView2<'_, T>, width: usize, height: usize) -> Result<Array2<f64>> {
    let (mw, mh) = map.dim();
    if mw == 0 || mh == 0 || width == 0 || height == 0 {
        return Err(Error::invalid("attention map and output must be nonempty"));
    }
    let grid = map.mapv(|v| v.to_f64().unwrap_or(0.0));
    let peak = grid.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::invalid("attention map has no positive finite maximum"));
    }
    let grid = grid / peak;
    // source coordinate and neighbour weights along one axis
    let axis = |dst: usize, out: usize, src: usize| -> (usize, usize, f64) {
        let pos = ((dst as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        (lo, hi, pos - lo as f64)
    };
    let xs: Vec<_> = (0..width).map(|x| axis(x, width, mw)).collect();
    let ys: Vec<_> = (0..height).map(|y| axis(y, height, mh)).collect();
    Ok(Array2::from_shape_fn((height, width), |(y, x)| {
        let (x0, x1, fx) = xs[x];
        let (y0, y1, fy) = ys[y];
        let top = grid[[x0, y0]] * (1.0 - fx) + grid[[x1, y0]] * fx;
        let bottom = grid[[x0, y1]] * (1.0 - fx) + grid[[x1, y1]] * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

/// Blue-to-red "jet" color map on `[0, 1]`.
pub fn jet(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ramp = |center: f64| (1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

/// Heat map as 8-bit intensities, `round(255 * heat)`.
pub fn heat_intensity(heat: &Array2<f64>) -> Array2<u8> {
    heat.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// `(1 - alpha) * image + alpha * jet(heat)` per pixel.
pub fn overlay(image: &RgbImage, heat: &Array2<f64>, alpha: f64) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    if heat.dim() != (h as usize, w as usize) {
        return Err(Error::shape(format!("heat map {:?} for a {w}x{h} image", heat.dim())));
    }
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let src = image.get_pixel(x, y);
        let color = jet(heat[[y as usize, x as usize]]);
        let mix = |ch: usize| {
            let v = (1.0 - alpha) * f64::from(src[ch]) + alpha * 255.0 * color[ch];
            v.round().clamp(0.0, 255.0) as u8
        };
        Rgb([mix(0), mix(1), mix(2)])
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamEntry {
    pub rank: usize,
    pub category: String,
    pub score: f64,
    pub file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamReport {
    pub image: PathBuf,
    pub scores: Vec<CategoryScore>,
    pub maps: Vec<CamEntry>,
}

/// Writes one overlay PNG per top-`k` category plus `<stem>_scores.json`.
///
/// `input` is the image at model-input geometry; `attention` is `(C, W*H)`
/// with row index `w*H + h`.
#[allow(clippy::too_many_arguments)]
pub fn export_cams<T: Scalar>(
    image_path: &Path,
    input: &RgbImage,
    scores: &[T],
    attention: ArrayView2<'_, T>,
    map_dims: (usize, usize),
    category_names: &[String],
    top_k: usize,
    out_dir: &Path,
) -> Result<CamReport> {
    let c = category_names.len();
    if scores.len() != c || attention.nrows() != c || attention.ncols() != map_dims.0 * map_dims.1 {
        return Err(Error::shape(format!(
            "{} scores, attention {:?} for {c} categories on a {map_dims:?} map",
            scores.len(),
            attention.dim()
        )));
    }
    if top_k == 0 || top_k > c {
        return Err(Error::invalid(format!("topk must lie in 1..={c}")));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let values: Vec<f64> = scores.iter().map(|s| s.to_f64().unwrap_or(f64::NAN)).collect();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let (w, h) = input.dimensions();
    let mut maps = Vec::with_capacity(top_k);
    for (rank, &cat) in order.iter().take(top_k).enumerate() {
        let grid = attention
            .row(cat)
            .to_owned()
            .into_shape_with_order(map_dims)
            .map_err(|e| Error::shape(e.to_string()))?;
        let heat = upsample_attention(grid.view(), w as usize, h as usize)?;
        let safe: String = category_names[cat]
            .chars()
            .map(|ch| if ch.is_ascii_alphanumeric() || ch == '-' { ch } else { '_' })
            .collect();
        let file = out_dir.join(format!("{stem}_top{}_{safe}.png", rank + 1));
        overlay(input, &heat, DEFAULT_ALPHA)?.save(&file)?;
        maps.push(CamEntry {
            rank: rank + 1,
            category: category_names[cat].clone(),
            score: values[cat],
            file,
        });
    }
    let report = CamReport {
        image: image_path.to_path_buf(),
        scores: category_names
            .iter()
            .zip(&values)
            .map(|(n, &s)| CategoryScore { category: n.clone(), score: s })
            .collect(),
        maps,
    };
    let json_path = out_dir.join(format!("{stem}_scores.json"));
    std::fs::write(&json_path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&json_path, e))?;
    Ok(report)
}
