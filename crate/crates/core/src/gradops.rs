//! Image containers, the gradient-magnitude operator, bicubic resampling and
//! PNG I/O.
//!
//! The gradient map of an image is the per-channel length of its central
//! difference gradient:
//!
//! ```text
//! Ix(x, y) = I(x+1, y) - I(x-1, y)
//! Iy(x, y) = I(x, y+1) - I(x, y-1)
//! M(I)     = sqrt(Ix^2 + Iy^2 + eps)
//! ```
//!
//! `x` indexes columns and `y` rows. Out-of-range neighbours are replicated
//! from the border, so the map has the same shape as the image. The small
//! `eps` keeps the square root differentiable on flat regions.

use std::path::Path;

use crate::error::{Error, Result};

/// Smoothing constant inside the gradient-magnitude square root.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// An `height × width × channels` image stored row-major with interleaved
/// channels. Values are nominally in `[0, 1]`; network outputs may stray
/// outside that range and are only clamped when saved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "empty image {height}x{width}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image value at index {i}")));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Image::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Image::new(height, width, channels, data)
    }

    /// Builds an image from channel-major planes (`C × H × W`).
    pub fn from_planar(
        height: usize,
        width: usize,
        channels: usize,
        planes: &[f64],
    ) -> Result<Self> {
        if planes.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "planar buffer of {} values for {height}x{width}x{channels}",
                planes.len()
            )));
        }
        let hw = height * width;
        Image::from_fn(height, width, channels, |y, x, c| {
            planes[c * hw + y * width + x]
        })
    }

    /// Channel-major copy (`C × H × W`), the layout networks consume.
    pub fn to_planar(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; self.data.len()];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * hw + i] = v;
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Copies channel `c` into a contiguous `H × W` plane.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Image> {
        Image::new(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Result<Image> {
        self.map(|v| v + c)
    }

    /// Affinely maps the smallest value to 0 and the largest to 1. Flat
    /// images become all zeros.
    pub fn min_max_normalized(&self) -> Image {
        let lo = self.data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let data = if span > 0.0 {
            self.data.iter().map(|v| (v - lo) / span).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Image {
            data,
            ..self.clone()
        }
    }

    pub fn clamped(&self) -> Image {
        Image {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        Image::from_fn(height, width, self.channels, |y, x, c| {
            self.get(top + y, left + x, c)
        })
    }

    pub fn flip_horizontal(&self) -> Image {
        self.remap(self.height, self.width, |y, x| (y, self.width - 1 - x))
    }

    pub fn flip_vertical(&self) -> Image {
        self.remap(self.height, self.width, |y, x| (self.height - 1 - y, x))
    }

    pub fn transpose(&self) -> Image {
        self.remap(self.width, self.height, |y, x| (x, y))
    }

    /// Applies element `index` (0..8) of the dihedral group of the square:
    /// bit 0 flips horizontally, bit 1 flips vertically, bit 2 transposes.
    pub fn dihedral(&self, index: u8) -> Image {
        let mut out = self.clone();
        if index & 1 != 0 {
            out = out.flip_horizontal();
        }
        if index & 2 != 0 {
            out = out.flip_vertical();
        }
        if index & 4 != 0 {
            out = out.transpose();
        }
        out
    }

    fn remap(
        &self,
        height: usize,
        width: usize,
        src: impl Fn(usize, usize) -> (usize, usize),
    ) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..height {
            for x in 0..width {
                let (sy, sx) = src(y, x);
                let base = (sy * self.width + sx) * self.channels;
                data.extend_from_slice(&self.data[base..base + self.channels]);
            }
        }
        Image {
            height,
            width,
            channels: self.channels,
            data,
        }
    }

    /// ITU-R BT.601 luma for RGB images; grayscale images are returned as is.
    pub fn to_luma(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Repeats a grayscale image into three channels.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        Image {
            data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            channels: 3,
            ..self.clone()
        }
    }
}

/// Per-channel gradient magnitude of an image. Same shape as the source,
/// every element strictly positive (at least `sqrt(eps)`).
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap(Image);

impl GradientMap {
    pub fn as_image(&self) -> &Image {
        &self.0
    }

    pub fn into_image(self) -> Image {
        self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.0.shape()
    }

    /// Min-max normalizes the whole map into `[0, 1]` for viewing. A map with
    /// no spread becomes all zeros.
    pub fn normalized_for_display(&self) -> Image {
        self.0.min_max_normalized()
    }
}

fn check_gradient_args(height: usize, width: usize, epsilon: f64) -> Result<()> {
    if height < 3 || width < 3 {
        return Err(Error::InvalidArgument(format!(
            "gradient map needs at least 3x3 pixels, got {height}x{width}"
        )));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    Ok(())
}

/// Gradient magnitude of one contiguous `height × width` plane, written into
/// `out`.
pub fn gradient_magnitude_plane(
    src: &[f64],
    height: usize,
    width: usize,
    epsilon: f64,
    out: &mut [f64],
) {
    debug_assert_eq!(src.len(), height * width);
    debug_assert_eq!(out.len(), height * width);
    for y in 0..height {
        let up = y.saturating_sub(1) * width;
        let down = (y + 1).min(height - 1) * width;
        let row = y * width;
        for x in 0..width {
            let left = x.saturating_sub(1);
            let right = (x + 1).min(width - 1);
            let ix = src[row + right] - src[row + left];
            let iy = src[down + x] - src[up + x];
            out[row + x] = (ix * ix + iy * iy + epsilon).sqrt();
        }
    }
}

/// Accumulates `d(sum(upstream * M(src))) / d(src)` for one plane into
/// `grad`.
pub fn gradient_magnitude_plane_backward(
    src: &[f64],
    height: usize,
    width: usize,
    epsilon: f64,
    upstream: &[f64],
    grad: &mut [f64],
) {
    for y in 0..height {
        let up = y.saturating_sub(1) * width;
        let down = (y + 1).min(height - 1) * width;
        let row = y * width;
        for x in 0..width {
            let g = upstream[row + x];
            if g == 0.0 {
                continue;
            }
            let left = x.saturating_sub(1);
            let right = (x + 1).min(width - 1);
            let ix = src[row + right] - src[row + left];
            let iy = src[down + x] - src[up + x];
            let mag = (ix * ix + iy * iy + epsilon).sqrt();
            let gx = g * ix / mag;
            let gy = g * iy / mag;
            grad[row + right] += gx;
            grad[row + left] -= gx;
            grad[down + x] += gy;
            grad[up + x] -= gy;
        }
    }
}

/// Extracts the per-channel gradient map of `img`.
pub fn extract_gradient(img: &Image, epsilon: f64) -> Result<GradientMap> {
    let (h, w, c) = img.shape();
    check_gradient_args(h, w, epsilon)?;
    let mut planes = vec![0.0; h * w * c];
    for ch in 0..c {
        let src = img.plane(ch);
        gradient_magnitude_plane(
            &src,
            h,
            w,
            epsilon,
            &mut planes[ch * h * w..(ch + 1) * h * w],
        );
    }
    Ok(GradientMap(Image::from_planar(h, w, c, &planes)?))
}

/// Vector-Jacobian product of [`extract_gradient`]: the derivative of
/// `sum(upstream ⊙ M(img))` with respect to `img`.
pub fn extract_gradient_backward(img: &Image, upstream: &Image, epsilon: f64) -> Result<Image> {
    if img.shape() != upstream.shape() {
        return Err(Error::Shape(format!(
            "image {:?} vs upstream {:?}",
            img.shape(),
            upstream.shape()
        )));
    }
    let (h, w, c) = img.shape();
    check_gradient_args(h, w, epsilon)?;
    let mut planes = vec![0.0; h * w * c];
    for ch in 0..c {
        let src = img.plane(ch);
        let up = upstream.plane(ch);
        gradient_magnitude_plane_backward(
            &src,
            h,
            w,
            epsilon,
            &up,
            &mut planes[ch * h * w..(ch + 1) * h * w],
        );
    }
    Image::from_planar(h, w, c, &planes)
}

/// A positive rational resampling factor `num / den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Scale {
    pub num: u32,
    pub den: u32,
}

impl Scale {
    pub const UP4: Scale = Scale { num: 4, den: 1 };
    pub const DOWN4: Scale = Scale { num: 1, den: 4 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::InvalidArgument(format!("scale {num}/{den}")));
        }
        Ok(Scale { num, den })
    }

    fn apply(&self, len: usize) -> Result<usize> {
        let scaled = len * self.num as usize;
        if !scaled.is_multiple_of(self.den as usize) {
            return Err(Error::InvalidArgument(format!(
                "{len} pixels scaled by {}/{} is not integral",
                self.num, self.den
            )));
        }
        Ok(scaled / self.den as usize)
    }

    fn factor(&self) -> f64 {
        f64::from(self.num) / f64::from(self.den)
    }
}

const BICUBIC_A: f64 = -0.5;

fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    let a = BICUBIC_A;
    if ax <= 1.0 {
        ((a + 2.0) * ax - (a + 3.0)) * ax * ax + 1.0
    } else if ax < 2.0 {
        ((a * ax - 5.0 * a) * ax + 8.0 * a) * ax - 4.0 * a
    } else {
        0.0
    }
}

/// Source taps and normalized weights for every output position along one
/// axis. Downscaling widens the kernel by the inverse factor (antialiased).
fn resample_taps(in_len: usize, out_len: usize, factor: f64) -> Vec<Vec<(usize, f64)>> {
    let stretch = factor.min(1.0);
    let half_width = 2.0 / stretch;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) / factor - 0.5;
            let first = (center - half_width).ceil() as i64;
            let last = (center + half_width).floor() as i64;
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity((last - first + 1) as usize);
            let mut total = 0.0;
            for j in first..=last {
                let w = stretch * cubic(stretch * (center - j as f64));
                if w == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, in_len as i64 - 1) as usize;
                total += w;
                taps.push((idx, w));
            }
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Bicubic resize (`a = -0.5`, replicate edges, antialiased when
/// downscaling). The result is clamped to `[0, 1]`.
pub fn bicubic_resample(img: &Image, scale: Scale) -> Result<Image> {
    let (h, w, c) = img.shape();
    let out_h = scale.apply(h)?;
    let out_w = scale.apply(w)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(
            "resampled image would be empty".into(),
        ));
    }
    let factor = scale.factor();
    let col_taps = resample_taps(w, out_w, factor);
    let row_taps = resample_taps(h, out_h, factor);

    let mut horiz = vec![0.0; h * out_w * c];
    for y in 0..h {
        for (x, taps) in col_taps.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0;
                for &(sx, wt) in taps {
                    acc += wt * img.get(y, sx, ch);
                }
                horiz[(y * out_w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; out_h * out_w * c];
    for (y, taps) in row_taps.iter().enumerate() {
        for x in 0..out_w {
            for ch in 0..c {
                let mut acc = 0.0;
                for &(sy, wt) in taps {
                    acc += wt * horiz[(sy * out_w + x) * c + ch];
                }
                out[(y * out_w + x) * c + ch] = acc.clamp(0.0, 1.0);
            }
        }
    }
    Image::new(out_h, out_w, c, out)
}

/// Loads an 8-bit grayscale or RGB PNG, mapping byte `b` to `b / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    use image::{ColorType, ImageFormat, ImageReader};

    let path = path.as_ref();
    let codec = |reason: String| Error::ImageCodec {
        path: path.to_path_buf(),
        reason,
    };
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    if reader.format() != Some(ImageFormat::Png) {
        return Err(Error::UnsupportedImage {
            path: path.to_path_buf(),
            reason: "not a PNG file".into(),
        });
    }
    let decoded = reader.decode().map_err(|e| codec(e.to_string()))?;
    let unsupported = |reason: String| Error::UnsupportedImage {
        path: path.to_path_buf(),
        reason,
    };
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, bytes) = match decoded.color() {
        ColorType::L8 => (1, decoded.into_luma8().into_raw()),
        ColorType::Rgb8 => (3, decoded.into_rgb8().into_raw()),
        ColorType::L16 | ColorType::La16 | ColorType::Rgb16 | ColorType::Rgba16 => {
            return Err(unsupported("only 8-bit PNGs are supported".into()))
        }
        other => {
            return Err(unsupported(format!(
                "{} channels; only grayscale or RGB are supported",
                other.channel_count()
            )))
        }
    };
    Image::new(
        h,
        w,
        channels,
        bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )
}

/// Quantizes `v` to a byte as `round(clamp(v, 0, 1) * 255)`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Saves an image as an 8-bit PNG.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    use image::{ExtendedColorType, ImageFormat};

    let path = path.as_ref();
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let color = if img.channels() == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    };
    image::save_buffer_with_format(
        path,
        &bytes,
        img.width() as u32,
        img.height() as u32,
        color,
        ImageFormat::Png,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::ImageCodec {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Image {
        Image::from_fn(h, w, c, |_, _, _| rng.random::<f64>()).unwrap()
    }

    /// Straight transcription of the stencil, one pixel at a time.
    fn brute_force_gradient(img: &Image, eps: f64) -> Vec<f64> {
        let (h, w, c) = img.shape();
        let at = |y: i64, x: i64, ch: usize| {
            let y = y.clamp(0, h as i64 - 1) as usize;
            let x = x.clamp(0, w as i64 - 1) as usize;
            img.get(y, x, ch)
        };
        let mut out = Vec::new();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                for ch in 0..c {
                    let ix = at(y, x + 1, ch) - at(y, x - 1, ch);
                    let iy = at(y + 1, x, ch) - at(y - 1, x, ch);
                    out.push((ix * ix + iy * iy + eps).sqrt());
                }
            }
        }
        out
    }

    #[test]
    fn constant_image_gives_sqrt_epsilon() {
        let img = Image::filled(8, 8, 1, 0.5).unwrap();
        let gm = extract_gradient(&img, DEFAULT_EPSILON).unwrap();
        assert!(gm.data().iter().all(|&v| v == DEFAULT_EPSILON.sqrt()));
    }

    #[test]
    fn vertical_step_matches_hand_evaluation() {
        let row = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let img = Image::from_fn(6, 6, 1, |_, x, _| row[x]).unwrap();
        let gm = extract_gradient(&img, DEFAULT_EPSILON).unwrap();
        let eps = DEFAULT_EPSILON;
        for y in 0..6 {
            let g = |x| gm.as_image().get(y, x, 0);
            // x=0: I(1) - I(0) = 0 under replicate padding
            assert_eq!(g(0), eps.sqrt());
            assert_eq!(g(1), eps.sqrt());
            assert_eq!(g(2), (1.0 + eps).sqrt());
            assert_eq!(g(3), (1.0 + eps).sqrt());
            assert_eq!(g(4), eps.sqrt());
            assert_eq!(g(5), eps.sqrt());
        }
    }

    #[test]
    fn random_rgb_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 16, 16, 3);
        let gm = extract_gradient(&img, DEFAULT_EPSILON).unwrap();
        let oracle = brute_force_gradient(&img, DEFAULT_EPSILON);
        for (a, b) in gm.data().iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn rejects_tiny_images_and_bad_epsilon() {
        let img = Image::filled(2, 8, 1, 0.1).unwrap();
        assert!(extract_gradient(&img, DEFAULT_EPSILON).is_err());
        let img = Image::filled(8, 8, 1, 0.1).unwrap();
        assert!(extract_gradient(&img, 0.0).is_err());
    }

    fn finite_difference(img: &Image, upstream: &Image, eps: f64, step: f64) -> Vec<f64> {
        let objective = |im: &Image| -> f64 {
            let gm = extract_gradient(im, eps).unwrap();
            gm.data()
                .iter()
                .zip(upstream.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let (h, w, c) = img.shape();
        let mut out = Vec::new();
        for i in 0..img.data().len() {
            let mut plus = img.data().to_vec();
            let mut minus = img.data().to_vec();
            plus[i] += step;
            minus[i] -= step;
            let fp = objective(&Image::new(h, w, c, plus).unwrap());
            let fm = objective(&Image::new(h, w, c, minus).unwrap());
            out.push((fp - fm) / (2.0 * step));
        }
        out
    }

    #[test]
    fn backward_with_zero_upstream_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 8, 8, 1);
        let up = Image::filled(8, 8, 1, 0.0).unwrap();
        let g = extract_gradient_backward(&img, &up, DEFAULT_EPSILON).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_on_flat_image_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = Image::filled(8, 8, 1, 0.3).unwrap();
        let up = random_image(&mut rng, 8, 8, 1);
        let g = extract_gradient_backward(&img, &up, DEFAULT_EPSILON).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        let fd = finite_difference(&img, &up, DEFAULT_EPSILON, 1e-4);
        // the magnitude is even in each difference, so symmetric steps cancel
        assert!(fd.iter().all(|v| v.abs() < 1e-9), "{fd:?}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = random_image(&mut rng, 8, 8, 1);
        let up = random_image(&mut rng, 8, 8, 1);
        let g = extract_gradient_backward(&img, &up, DEFAULT_EPSILON).unwrap();
        let fd = finite_difference(&img, &up, DEFAULT_EPSILON, 1e-4);
        for (a, b) in g.data().iter().zip(&fd) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
            assert!(rel <= 1e-3, "analytic {a} vs fd {b}");
        }
    }

    #[test]
    fn backward_rejects_shape_mismatch() {
        let img = Image::filled(8, 8, 1, 0.3).unwrap();
        let up = Image::filled(8, 7, 1, 0.3).unwrap();
        assert!(extract_gradient_backward(&img, &up, DEFAULT_EPSILON).is_err());
    }

    #[test]
    fn bicubic_preserves_constants() {
        let img = Image::filled(8, 8, 3, 0.37).unwrap();
        let down = bicubic_resample(&img, Scale::DOWN4).unwrap();
        assert_eq!(down.shape(), (2, 2, 3));
        assert!(down.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
        let up = bicubic_resample(&img, Scale::UP4).unwrap();
        assert_eq!(up.shape(), (32, 32, 3));
        assert!(up.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn bicubic_rejects_non_integral_output() {
        let img = Image::filled(10, 8, 1, 0.5).unwrap();
        assert!(bicubic_resample(&img, Scale::DOWN4).is_err());
    }

    #[test]
    fn bicubic_round_trip_reproduces_ramp_interior() {
        let n = 32;
        let img = Image::from_fn(n, n, 1, |y, x, _| {
            0.1 + 0.8 * (x + y) as f64 / (2 * n - 2) as f64
        })
        .unwrap();
        let down = bicubic_resample(&img, Scale::DOWN4).unwrap();
        let up = bicubic_resample(&down, Scale::UP4).unwrap();
        let margin = 8;
        for y in margin..n - margin {
            for x in margin..n - margin {
                assert!((up.get(y, x, 0) - img.get(y, x, 0)).abs() < 1e-2);
            }
        }
    }

    #[test]
    fn png_round_trip_and_byte_mapping() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = Image::from_fn(5, 7, 3, |_, _, _| f64::from(rng.random::<u8>()) / 255.0).unwrap();
        let path = dir.path().join("rt.png");
        save_image(&img, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), img);

        let gray = Image::from_fn(1, 3, 1, |_, x, _| [0.0, 128.0 / 255.0, 1.0][x]).unwrap();
        let path = dir.path().join("gray.png");
        save_image(&gray, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.data(), &[0.0, 128.0 / 255.0, 1.0]);
        assert!((back.data()[1] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn load_rejects_rgba_and_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgba.png");
        image::RgbaImage::new(4, 4).save(&p).unwrap();
        assert!(matches!(
            load_image(&p),
            Err(Error::UnsupportedImage { .. })
        ));
        let p = dir.path().join("deep.png");
        image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(4, 4)
            .save(&p)
            .unwrap();
        assert!(matches!(
            load_image(&p),
            Err(Error::UnsupportedImage { .. })
        ));
        assert!(load_image(dir.path().join("missing.png")).is_err());
    }

    #[test]
    fn display_normalization_spans_unit_range() {
        let img = Image::from_fn(6, 6, 1, |_, x, _| if x < 3 { 0.0 } else { 1.0 }).unwrap();
        let shown = extract_gradient(&img, DEFAULT_EPSILON)
            .unwrap()
            .normalized_for_display();
        let max = shown.data().iter().copied().fold(0.0, f64::max);
        let min = shown.data().iter().copied().fold(1.0, f64::min);
        assert_eq!((min, max), (0.0, 1.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn image_strategy() -> impl Strategy<Value = Image> {
            (
                3usize..20,
                3usize..20,
                prop_oneof![Just(1usize), Just(3usize)],
            )
                .prop_flat_map(|(h, w, c)| {
                    proptest::collection::vec(0.0f64..1.0, h * w * c)
                        .prop_map(move |d| Image::new(h, w, c, d).unwrap())
                })
        }

        proptest! {
            #[test]
            fn matches_brute_force(img in image_strategy()) {
                let gm = extract_gradient(&img, DEFAULT_EPSILON).unwrap();
                let oracle = brute_force_gradient(&img, DEFAULT_EPSILON);
                for (a, b) in gm.data().iter().zip(&oracle) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }

            #[test]
            fn shift_invariant(img in image_strategy(), shift in -0.5f64..0.5) {
                let a = extract_gradient(&img, DEFAULT_EPSILON).unwrap();
                let b = extract_gradient(&img.add_scalar(shift).unwrap(), DEFAULT_EPSILON).unwrap();
                for (x, y) in a.data().iter().zip(b.data()) {
                    prop_assert!((x - y).abs() <= 1e-12);
                }
            }

            #[test]
            fn horizontal_flip_commutes(img in image_strategy()) {
                let flipped_map = extract_gradient(&img.flip_horizontal(), DEFAULT_EPSILON).unwrap();
                let map_flipped = extract_gradient(&img, DEFAULT_EPSILON).unwrap().as_image().flip_horizontal();
                prop_assert_eq!(flipped_map.as_image(), &map_flipped);
            }
        }
    }
}
