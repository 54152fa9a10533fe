//! Image-quality metrics, evaluation reports, and PNG figure output.

pub mod font;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradops::{extract_gradient, save_image, Image, DEFAULT_EPSILON};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
/// Gap between panels of a grid.
pub const GRID_GAP: usize = 4;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "images differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Removes `border` pixels from every side.
pub fn crop_border(img: &Image, border: usize) -> Result<Image> {
    let (h, w, _) = img.shape();
    if 2 * border >= h || 2 * border >= w {
        return Err(Error::InvalidArgument(format!(
            "border {border} leaves nothing of a {h}x{w} image"
        )));
    }
    img.crop(border, border, h - 2 * border, w - 2 * border)
}

/// Peak signal-to-noise ratio in dB for values on `[0, 1]`, after cropping
/// `border` pixels. Identical images give [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image, border: usize) -> Result<f64> {
    check_same_shape(a, b)?;
    let a = crop_border(a, border)?;
    let b = crop_border(b, border)?;
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let mse = se / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h × w` plane with `k`.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM on BT.601 luma with an 11×11 Gaussian window
/// (σ = 1.5), averaged over every window that fits inside the image.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let (h, w, _) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let x = a.to_luma().into_data();
    let y = b.to_luma().into_data();
    let k = gaussian_window();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let mx = filter_valid(&x, h, w, &k);
    let my = filter_valid(&y, h, w, &k);
    let sxx = filter_valid(&xx, h, w, &k);
    let syy = filter_valid(&yy, h, w, &k);
    let sxy = filter_valid(&xy, h, w, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cxy = sxy[i] - ux * uy;
        total +=
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// Mean absolute difference between the gradient maps of `a` and `b`.
pub fn gm_l1(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let ma = extract_gradient(a, DEFAULT_EPSILON)?;
    let mb = extract_gradient(b, DEFAULT_EPSILON)?;
    let s: f64 = ma
        .data()
        .iter()
        .zip(mb.data())
        .map(|(p, q)| (p - q).abs())
        .sum();
    Ok(s / ma.data().len() as f64)
}

/// Which channels PSNR is computed on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsnrChannels {
    #[default]
    Rgb,
    Y,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConvention {
    pub border: usize,
    pub psnr_channels: PsnrChannels,
}

impl Default for EvalConvention {
    fn default() -> Self {
        EvalConvention {
            border: 4,
            psnr_channels: PsnrChannels::Rgb,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub gm_l1: f64,
}

/// Scores one SR/HR pair. All three metrics see the border-cropped images.
pub fn score_pair(
    name: &str,
    sr: &Image,
    hr: &Image,
    conv: &EvalConvention,
) -> Result<ImageScores> {
    check_same_shape(sr, hr)?;
    let sr = crop_border(sr, conv.border)?;
    let hr = crop_border(hr, conv.border)?;
    let psnr_value = match conv.psnr_channels {
        PsnrChannels::Rgb => psnr(&sr, &hr, 0)?,
        PsnrChannels::Y => psnr(&sr.to_luma(), &hr.to_luma(), 0)?,
    };
    Ok(ImageScores {
        name: name.to_string(),
        psnr: psnr_value,
        ssim: ssim(&sr, &hr)?,
        gm_l1: gm_l1(&sr, &hr)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub convention: EvalConvention,
    pub images: Vec<ImageScores>,
    pub count: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_gm_l1: f64,
}

#[derive(Serialize)]
struct SummaryRecord {
    summary: bool,
    count: usize,
    border: usize,
    psnr_channels: PsnrChannels,
    mean_psnr: f64,
    mean_ssim: f64,
    mean_gm_l1: f64,
}

impl EvalReport {
    pub fn new(convention: EvalConvention, images: Vec<ImageScores>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("no images to report".into()));
        }
        let n = images.len() as f64;
        let mean = |f: fn(&ImageScores) -> f64| images.iter().map(f).sum::<f64>() / n;
        Ok(EvalReport {
            convention,
            count: images.len(),
            mean_psnr: mean(|s| s.psnr),
            mean_ssim: mean(|s| s.ssim),
            mean_gm_l1: mean(|s| s.gm_l1),
            images,
        })
    }

    /// Fixed-width text table with a trailing mean row.
    pub fn to_table(&self) -> String {
        let width = self
            .images
            .iter()
            .map(|s| s.name.len())
            .max()
            .unwrap_or(0)
            .max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# border={} psnr_channels={}",
            self.convention.border,
            match self.convention.psnr_channels {
                PsnrChannels::Rgb => "rgb",
                PsnrChannels::Y => "y",
            }
        );
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>7}  {:>9}",
            "image", "psnr_db", "ssim", "gm_l1"
        );
        for s in &self.images {
            let _ = writeln!(
                out,
                "{:<width$}  {:>9.4}  {:>7.4}  {:>9.6}",
                s.name, s.psnr, s.ssim, s.gm_l1
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>9.4}  {:>7.4}  {:>9.6}",
            "mean", self.mean_psnr, self.mean_ssim, self.mean_gm_l1
        );
        out
    }

    /// One JSON record per image followed by a summary record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.images {
            out.push_str(&serde_json::to_string(s).expect("scores serialize"));
            out.push('\n');
        }
        let summary = SummaryRecord {
            summary: true,
            count: self.count,
            border: self.convention.border,
            psnr_channels: self.convention.psnr_channels,
            mean_psnr: self.mean_psnr,
            mean_ssim: self.mean_ssim,
            mean_gm_l1: self.mean_gm_l1,
        };
        out.push_str(&serde_json::to_string(&summary).expect("summary serializes"));
        out.push('\n');
        out
    }
}

/// Draws `text` at `(x0, y0)` on an RGB buffer over a black backing box.
fn draw_label(
    buf: &mut [f64],
    width: usize,
    height: usize,
    x0: usize,
    y0: usize,
    text: &str,
    max_width: usize,
) {
    let max_chars = (max_width.saturating_sub(2) + 1) / font::ADVANCE;
    let text: String = text.chars().take(max_chars).collect();
    if text.is_empty() {
        return;
    }
    let box_w = font::text_width(&text) + 2;
    let box_h = font::GLYPH_HEIGHT + 2;
    for y in y0..(y0 + box_h).min(height) {
        for x in x0..(x0 + box_w).min(width) {
            buf[(y * width + x) * 3..(y * width + x) * 3 + 3].fill(0.0);
        }
    }
    font::rasterize(&text, |dx, dy| {
        let (x, y) = (x0 + 1 + dx, y0 + 1 + dy);
        if x < width && y < height {
            buf[(y * width + x) * 3..(y * width + x) * 3 + 3].fill(1.0);
        }
    });
}

/// Side-by-side panels separated by [`GRID_GAP`] white columns, each with
/// its label in the top-left corner. Grayscale panels are drawn as RGB and
/// values are clamped to `[0, 1]`.
pub fn render_grid(images: &[Image], labels: &[&str]) -> Result<Image> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("grid needs at least one image".into()))?;
    if labels.len() != images.len() {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} images",
            labels.len(),
            images.len()
        )));
    }
    let (h, w, _) = first.shape();
    if let Some(bad) = images.iter().find(|i| (i.height(), i.width()) != (h, w)) {
        return Err(Error::Shape(format!(
            "grid panels must all be {h}x{w}, got {}x{}",
            bad.height(),
            bad.width()
        )));
    }
    let n = images.len();
    let width = n * w + (n - 1) * GRID_GAP;
    let mut buf = vec![1.0; h * width * 3];
    for (i, img) in images.iter().enumerate() {
        let rgb = img.clamped().to_rgb();
        let x0 = i * (w + GRID_GAP);
        for y in 0..h {
            let src = &rgb.data()[y * w * 3..(y + 1) * w * 3];
            buf[(y * width + x0) * 3..(y * width + x0 + w) * 3].copy_from_slice(src);
        }
        draw_label(&mut buf, width, h, x0, 0, labels[i], w);
    }
    Image::new(h, width, 3, buf)
}

/// Renders [`render_grid`] to a PNG.
pub fn emit_grid(images: &[Image], labels: &[&str], path: &Path) -> Result<()> {
    save_image(&render_grid(images, labels)?, path)
}

/// Line plots of several series, one horizontal panel per series, each
/// scaled to its own min/max and labelled with its name and last value.
pub fn plot_series(series: &[(&str, &[f64])], width: usize, panel_height: usize) -> Result<Image> {
    if series.is_empty() {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    if width < 16 || panel_height < 16 {
        return Err(Error::InvalidArgument(
            "plot panels must be at least 16x16".into(),
        ));
    }
    let height = series.len() * panel_height + (series.len() - 1) * GRID_GAP;
    let mut buf = vec![1.0; height * width * 3];
    for (i, (name, values)) in series.iter().enumerate() {
        let y0 = i * (panel_height + GRID_GAP);
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let plot_top = y0 + font::GLYPH_HEIGHT + 3;
        let plot_h = panel_height - (font::GLYPH_HEIGHT + 4);
        // frame
        for x in 0..width {
            for y in [plot_top, plot_top + plot_h] {
                buf[(y * width + x) * 3..(y * width + x) * 3 + 3].fill(0.75);
            }
        }
        if !values.is_empty() && lo.is_finite() {
            let span = if hi > lo { hi - lo } else { 1.0 };
            let to_row =
                |v: f64| plot_top + plot_h - (((v - lo) / span) * plot_h as f64).round() as usize;
            let mut prev: Option<(usize, usize)> = None;
            for x in 0..width {
                let idx = if values.len() == 1 {
                    0
                } else {
                    x * (values.len() - 1) / (width - 1)
                };
                let v = values[idx];
                if !v.is_finite() {
                    prev = None;
                    continue;
                }
                let y = to_row(v);
                let (ya, yb) = match prev {
                    Some((_, py)) => (py.min(y), py.max(y)),
                    None => (y, y),
                };
                for yy in ya..=yb {
                    let p = (yy * width + x) * 3;
                    buf[p..p + 3].copy_from_slice(&[0.8, 0.1, 0.1]);
                }
                prev = Some((x, y));
            }
        }
        let last = values.last().copied().unwrap_or(f64::NAN);
        let label = format!("{name} {last:.4}");
        draw_label(&mut buf, width, height, 0, y0, &label, width);
    }
    Image::new(height, width, 3, buf)
}
