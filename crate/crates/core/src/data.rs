//! HR image folders, the random LR/HR patch-pair sampler, and synthetic
//! training images.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradops::{bicubic_resample, load_image, save_image, Image, Scale};
use crate::kv::KvMap;
use crate::nn::Tensor;
use crate::seed;

/// Sorted list of `.png` files directly inside `dir`.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSamplerConfig {
    pub hr_dir: PathBuf,
    /// LR patch side; HR crops are `scale` times larger.
    pub lr_patch: usize,
    pub batch: usize,
    pub scale: usize,
    pub seed: u64,
    /// Random flips and transposes (8 variants).
    pub augment: bool,
}

impl Default for PairSamplerConfig {
    fn default() -> Self {
        PairSamplerConfig {
            hr_dir: PathBuf::from("data/hr"),
            lr_patch: 32,
            batch: 4,
            scale: 4,
            seed: 0,
            augment: false,
        }
    }
}

const KV_KEYS: &[&str] = &["hr_dir", "lr_patch", "batch", "scale", "augment"];

impl PairSamplerConfig {
    pub fn hr_patch(&self) -> usize {
        self.lr_patch * self.scale
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale != 4 {
            return Err(Error::Config(format!(
                "only ×4 is supported, got ×{}",
                self.scale
            )));
        }
        if self.lr_patch < 8 {
            return Err(Error::Config(format!(
                "lr_patch must be at least 8, got {}",
                self.lr_patch
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        Ok(())
    }

    /// Writes every key except the seed, which belongs to the run.
    pub fn write_kv(&self, map: &mut KvMap, prefix: &str) {
        map.set(format!("{prefix}hr_dir"), self.hr_dir.display());
        map.set(format!("{prefix}lr_patch"), self.lr_patch);
        map.set(format!("{prefix}batch"), self.batch);
        map.set(format!("{prefix}scale"), self.scale);
        map.set(format!("{prefix}augment"), self.augment);
    }

    pub fn from_kv(map: &KvMap, prefix: &str, seed: u64) -> Result<Self> {
        map.check_known(prefix, KV_KEYS)?;
        let d = PairSamplerConfig::default();
        let k = |s: &str| format!("{prefix}{s}");
        let cfg = PairSamplerConfig {
            hr_dir: map.get(&k("hr_dir")).map_or(d.hr_dir, PathBuf::from),
            lr_patch: map.parse_or(&k("lr_patch"), d.lr_patch)?,
            batch: map.parse_or(&k("batch"), d.batch)?,
            scale: map.parse_or(&k("scale"), d.scale)?,
            seed,
            augment: map.parse_or(&k("augment"), d.augment)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Where one batch item came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CropInfo {
    pub image: usize,
    pub top: usize,
    pub left: usize,
    /// Index into the 8 flip/transpose variants (0 = unchanged).
    pub dihedral: u8,
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `N × 3 × p × p`.
    pub lr: Tensor,
    /// `N × 3 × 4p × 4p`.
    pub hr: Tensor,
    pub crops: Vec<CropInfo>,
}

/// Position of the sampler's random stream, enough to resume it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerState {
    pub word_pos: u128,
}

/// Draws random HR crops and derives their LR partners by bicubic ×1/4.
#[derive(Clone, Debug)]
pub struct PairSampler {
    cfg: PairSamplerConfig,
    names: Vec<PathBuf>,
    images: Vec<Image>,
    rng: ChaCha8Rng,
}

impl PairSampler {
    /// Loads every usable PNG under `cfg.hr_dir`. Grayscale images are
    /// expanded to RGB. Images smaller than one HR crop are skipped.
    pub fn new(cfg: &PairSamplerConfig) -> Result<Self> {
        cfg.validate()?;
        let paths = list_pngs(&cfg.hr_dir)?;
        if paths.is_empty() {
            return Err(Error::Dataset(format!(
                "no PNG files in {}",
                cfg.hr_dir.display()
            )));
        }
        let side = cfg.hr_patch();
        let mut names = Vec::new();
        let mut images = Vec::new();
        for path in paths {
            let img = load_image(&path)?;
            if img.height() < side || img.width() < side {
                log::warn!(
                    "skipping {}: {}x{} is smaller than the {side}x{side} HR crop",
                    path.display(),
                    img.height(),
                    img.width()
                );
                continue;
            }
            names.push(path);
            images.push(img.to_rgb());
        }
        PairSampler::from_images(cfg, names, images)
    }

    /// Sampler over images already in memory.
    pub fn from_images(
        cfg: &PairSamplerConfig,
        names: Vec<PathBuf>,
        images: Vec<Image>,
    ) -> Result<Self> {
        cfg.validate()?;
        if images.is_empty() {
            return Err(Error::Dataset(format!(
                "no image in {} is at least {0}x{0}",
                cfg.hr_patch()
            )));
        }
        let side = cfg.hr_patch();
        let variants = if cfg.augment { 8 } else { 1 };
        let mut distinct = 0usize;
        for img in &images {
            if img.height() < side || img.width() < side || img.channels() != 3 {
                return Err(Error::Dataset(
                    "sampler images must be RGB and at least one crop in size".into(),
                ));
            }
            distinct += (img.height() - side + 1) * (img.width() - side + 1) * variants;
        }
        if distinct < cfg.batch {
            return Err(Error::Dataset(format!(
                "only {distinct} distinct crops exist but batch is {}",
                cfg.batch
            )));
        }
        Ok(PairSampler {
            cfg: cfg.clone(),
            names,
            images,
            rng: seed::rng(seed::derive(cfg.seed, "sampler")),
        })
    }

    pub fn config(&self) -> &PairSamplerConfig {
        &self.cfg
    }

    pub fn image_names(&self) -> &[PathBuf] {
        &self.names
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn restore(&mut self, state: SamplerState) {
        self.rng.set_word_pos(state.word_pos);
    }

    /// HR crop for a crop descriptor, after the flip/transpose variant.
    pub fn hr_crop(&self, crop: &CropInfo) -> Result<Image> {
        let side = self.cfg.hr_patch();
        let img = self
            .images
            .get(crop.image)
            .ok_or_else(|| Error::InvalidArgument(format!("no image {}", crop.image)))?;
        Ok(img
            .crop(crop.top, crop.left, side, side)?
            .dihedral(crop.dihedral))
    }

    fn draw_crop(&mut self) -> CropInfo {
        let side = self.cfg.hr_patch();
        let image = self.rng.random_range(0..self.images.len());
        let img = &self.images[image];
        let top = self.rng.random_range(0..=img.height() - side);
        let left = self.rng.random_range(0..=img.width() - side);
        let dihedral = if self.cfg.augment {
            self.rng.random_range(0..8u8)
        } else {
            0
        };
        CropInfo {
            image,
            top,
            left,
            dihedral,
        }
    }

    /// Next batch of pairs, with no crop repeated inside the batch.
    pub fn next_batch(&mut self) -> Result<Batch> {
        let mut seen = HashSet::new();
        let mut crops = Vec::with_capacity(self.cfg.batch);
        while crops.len() < self.cfg.batch {
            let c = self.draw_crop();
            if seen.insert(c) {
                crops.push(c);
            }
        }
        let mut hrs = Vec::with_capacity(crops.len());
        let mut lrs = Vec::with_capacity(crops.len());
        for c in &crops {
            let hr = self.hr_crop(c)?;
            lrs.push(bicubic_resample(&hr, Scale::DOWN4)?);
            hrs.push(hr);
        }
        Ok(Batch {
            lr: Tensor::from_images(&lrs)?,
            hr: Tensor::from_images(&hrs)?,
            crops,
        })
    }
}

impl Iterator for PairSampler {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

/// Opens the sampler described by `cfg` as an endless batch iterator.
pub fn make_pairs(cfg: &PairSamplerConfig) -> Result<PairSampler> {
    PairSampler::new(cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    /// Filled random polygons on a flat background.
    Edges,
    /// Two-tone checkerboards with a random cell size.
    Checker,
    /// Linear ramps plus a slow sinusoid.
    Ramps,
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Edges => "edges",
            SynthKind::Checker => "checker",
            SynthKind::Ramps => "ramps",
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edges" => Ok(SynthKind::Edges),
            "checker" => Ok(SynthKind::Checker),
            "ramps" | "gradients-ramps" => Ok(SynthKind::Ramps),
            other => Err(Error::InvalidArgument(format!(
                "unknown synthetic kind {other:?} (expected edges, checker or ramps)"
            ))),
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Even-odd rule point-in-polygon test.
fn inside(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut hit = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            hit = !hit;
        }
        j = i;
    }
    hit
}

fn synth_edges(size: usize, rng: &mut ChaCha8Rng) -> Result<Image> {
    let s = size as f64;
    let background = random_color(rng);
    let mut shapes = Vec::new();
    for _ in 0..rng.random_range(3..=5) {
        let (cx, cy) = (
            rng.random_range(0.15..0.85) * s,
            rng.random_range(0.15..0.85) * s,
        );
        let radius = rng.random_range(0.12..0.35) * s;
        let vertices = rng.random_range(3..=6);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let poly: Vec<(f64, f64)> = (0..vertices)
            .map(|k| {
                let a = phase + std::f64::consts::TAU * k as f64 / vertices as f64;
                let r = radius * rng.random_range(0.7..1.0);
                (cx + r * a.cos(), cy + r * a.sin())
            })
            .collect();
        shapes.push((poly, random_color(rng)));
    }
    Image::from_fn(size, size, 3, |y, x, c| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        shapes
            .iter()
            .rev()
            .find(|(poly, _)| inside(poly, px, py))
            .map_or(background[c], |(_, color)| color[c])
    })
}

fn synth_checker(size: usize, rng: &mut ChaCha8Rng) -> Result<Image> {
    let cell = rng.random_range(4..=12usize);
    let (oy, ox) = (rng.random_range(0..cell), rng.random_range(0..cell));
    let dark: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..=0.2));
    let bright: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.8..=1.0));
    Image::from_fn(size, size, 3, |y, x, c| {
        if ((y + oy) / cell + (x + ox) / cell) % 2 == 0 {
            dark[c]
        } else {
            bright[c]
        }
    })
}

fn synth_ramps(size: usize, rng: &mut ChaCha8Rng) -> Result<Image> {
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let freq = rng.random_range(1.0..3.0) * std::f64::consts::TAU / size as f64;
    let lo = random_color(rng);
    let hi = random_color(rng);
    let s = size as f64;
    Image::from_fn(size, size, 3, |y, x, c| {
        let t = ((x as f64 - s / 2.0) * dx + (y as f64 - s / 2.0) * dy) / s + 0.5;
        let wave = 0.15 * ((x as f64 * dy - y as f64 * dx) * freq).sin();
        (lo[c] + (hi[c] - lo[c]) * t + wave).clamp(0.0, 1.0)
    })
}

/// Generates one synthetic image; equal arguments give equal images.
pub fn synth_image(kind: SynthKind, size: usize, seed_value: u64) -> Result<Image> {
    if size < 8 {
        return Err(Error::InvalidArgument(format!(
            "synthetic image size must be at least 8, got {size}"
        )));
    }
    let mut rng = seed::rng(seed_value);
    match kind {
        SynthKind::Edges => synth_edges(size, &mut rng),
        SynthKind::Checker => synth_checker(size, &mut rng),
        SynthKind::Ramps => synth_ramps(size, &mut rng),
    }
}

/// Writes `n` images named `{kind}_{i:04}.png` into `dir` (created if
/// missing) and returns their paths.
pub fn synth_dataset(
    kind: SynthKind,
    n: usize,
    size: usize,
    rng_seed: u64,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(n);
    for i in 0..n {
        let img = synth_image(kind, size, seed::derive(rng_seed, &format!("{kind}/{i}")))?;
        let path = dir.join(format!("{kind}_{i:04}.png"));
        save_image(&img, &path)?;
        paths.push(path);
    }
    Ok(paths)
}
