//! Objective terms and their weighted combination.
//!
//! Every term is built on a [`Graph`] so that it can be differentiated. GAN
//! terms take raw logits and use the stable softplus form of `-log σ(x)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::disc::Discriminator;
use crate::error::{Error, Result};
use crate::gradops::DEFAULT_EPSILON;
use crate::kv::KvMap;
use crate::nn::{Conv2d, Graph, ParamTree, Params, Tensor, Var, LEAKY_SLOPE};
use crate::seed;

/// Mean absolute difference.
pub fn pixel_loss(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    g.mean(d)
}

/// Maps images to the features compared by the perceptual loss.
pub trait FeatureExtractor {
    /// Number of input channels, or `None` if any count is accepted.
    fn in_channels(&self) -> Option<usize>;
    fn features(&self, g: &mut Graph, x: Var) -> Result<Var>;
}

/// Features are the input itself; the perceptual loss becomes pixel L1.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn in_channels(&self) -> Option<usize> {
        None
    }

    fn features(&self, _g: &mut Graph, x: Var) -> Result<Var> {
        Ok(x)
    }
}

/// Seed used for the default random feature extractor.
pub const PERCEPTUAL_SEED: u64 = 0x005e_ed0f_fea7;

/// Four frozen random convs (two of them stride 2) with leaky ReLUs between.
#[derive(Clone, Debug)]
pub struct RandomConvExtractor {
    in_channels: usize,
    convs: Vec<Conv2d>,
    params: ParamTree,
}

impl RandomConvExtractor {
    pub fn new(in_channels: usize, rng_seed: u64) -> Result<Self> {
        let convs = vec![
            Conv2d::same("perceptual.conv1", in_channels, 16, 3),
            Conv2d::strided("perceptual.conv2", 16, 16, 2),
            Conv2d::same("perceptual.conv3", 16, 32, 3),
            Conv2d::strided("perceptual.conv4", 32, 32, 2),
        ];
        let mut params = ParamTree::new();
        let mut rng = seed::rng(rng_seed);
        for conv in &convs {
            conv.init(&mut params, 1.0, &mut rng)?;
        }
        Ok(RandomConvExtractor {
            in_channels,
            convs,
            params,
        })
    }

    pub fn params(&self) -> &ParamTree {
        &self.params
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn in_channels(&self) -> Option<usize> {
        Some(self.in_channels)
    }

    fn features(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let p = Params::frozen(&self.params);
        let mut y = x;
        for (i, conv) in self.convs.iter().enumerate() {
            y = conv.forward(g, p, y)?;
            if i + 1 < self.convs.len() {
                y = g.leaky_relu(y, LEAKY_SLOPE);
            }
        }
        Ok(y)
    }
}

/// L1 distance between extracted features of `sr` and `hr`.
pub fn perceptual_loss(
    g: &mut Graph,
    sr: Var,
    hr: Var,
    extractor: &dyn FeatureExtractor,
) -> Result<Var> {
    if let Some(c) = extractor.in_channels() {
        for v in [sr, hr] {
            let got = g.value(v).dims4()?.1;
            if got != c {
                return Err(Error::Shape(format!(
                    "feature extractor expects {c} channels, got {got}"
                )));
            }
        }
    }
    let fs = extractor.features(g, sr)?;
    let fh = extractor.features(g, hr)?;
    pixel_loss(g, fs, fh)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GanMode {
    Standard,
    #[default]
    Ragan,
}

impl fmt::Display for GanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GanMode::Standard => "standard",
            GanMode::Ragan => "ragan",
        })
    }
}

impl FromStr for GanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(GanMode::Standard),
            "ragan" => Ok(GanMode::Ragan),
            other => Err(Error::Config(format!(
                "unknown gan mode {other:?} (expected standard or ragan)"
            ))),
        }
    }
}

/// `mean(softplus(sign · x))`.
fn mean_softplus(g: &mut Graph, x: Var, sign: f64) -> Result<Var> {
    let x = if sign < 0.0 { g.scale(x, -1.0) } else { x };
    let s = g.softplus(x);
    g.mean(s)
}

/// `x - mean(other)`, the relativistic logit.
fn relative(g: &mut Graph, x: Var, other: Var) -> Result<Var> {
    let m = g.mean(other)?;
    g.sub_scalar(x, m)
}

/// Discriminator loss from raw logits.
pub fn gan_d_loss(g: &mut Graph, real: Var, fake: Var, mode: GanMode) -> Result<Var> {
    match mode {
        GanMode::Standard => {
            let a = mean_softplus(g, fake, 1.0)?;
            let b = mean_softplus(g, real, -1.0)?;
            g.add(a, b)
        }
        GanMode::Ragan => {
            let rr = relative(g, real, fake)?;
            let fr = relative(g, fake, real)?;
            let a = mean_softplus(g, rr, -1.0)?;
            let b = mean_softplus(g, fr, 1.0)?;
            g.add(a, b)
        }
    }
}

/// Generator loss from raw logits. Standard mode ignores `real`.
pub fn gan_g_loss(g: &mut Graph, real: Var, fake: Var, mode: GanMode) -> Result<Var> {
    match mode {
        GanMode::Standard => {
            // still reject an empty real batch, for symmetry with the D loss
            g.mean(real)?;
            mean_softplus(g, fake, -1.0)
        }
        GanMode::Ragan => {
            let fr = relative(g, fake, real)?;
            let rr = relative(g, real, fake)?;
            let a = mean_softplus(g, fr, -1.0)?;
            let b = mean_softplus(g, rr, 1.0)?;
            g.add(a, b)
        }
    }
}

/// L1 between the gradient maps of `sr` and `hr`.
pub fn gradient_pixel_loss(g: &mut Graph, sr: Var, hr: Var) -> Result<Var> {
    let ms = g.gradient_magnitude(sr, DEFAULT_EPSILON)?;
    let mh = g.gradient_magnitude(hr, DEFAULT_EPSILON)?;
    pixel_loss(g, ms, mh)
}

/// Gradient-space losses on one graph.
#[derive(Clone, Copy, Debug)]
pub struct GradientLosses {
    pub pix_gm: Var,
    /// Generator-side adversarial term; the discriminator is frozen.
    pub adv_gm: Var,
    /// Discriminator loss on the detached SR gradient map.
    pub dis_gm: Var,
}

/// All gradient-space terms for `sr` against `hr`, using the
/// discriminator's current parameters. `dis_gm` is evaluated on a detached
/// copy of `M(sr)` in a separate graph and enters `g` as a constant.
pub fn gradient_losses(
    g: &mut Graph,
    sr: Var,
    hr: Var,
    d_gm: &Discriminator,
    mode: GanMode,
) -> Result<GradientLosses> {
    let ms = g.gradient_magnitude(sr, DEFAULT_EPSILON)?;
    let mh = g.gradient_magnitude(hr, DEFAULT_EPSILON)?;
    let pix_gm = pixel_loss(g, ms, mh)?;

    let mut dg = Graph::new();
    let ms_d = dg.input(g.value(ms).clone());
    let mh_d = dg.input(g.value(mh).clone());
    let fake_d = d_gm.forward(&mut dg, true, ms_d)?;
    let real_d = d_gm.forward(&mut dg, true, mh_d)?;
    let dis = gan_d_loss(&mut dg, real_d, fake_d, mode)?;
    let dis_gm = g.input(dg.value(dis).clone());

    let fake = d_gm.forward(g, false, ms)?;
    let real = d_gm.forward(g, false, mh)?;
    let adv_gm = gan_g_loss(g, real, fake, mode)?;
    Ok(GradientLosses {
        pix_gm,
        adv_gm,
        dis_gm,
    })
}

/// L1 between the predicted gradient map and `M(hr)`.
pub fn gradient_branch_loss(g: &mut Graph, sr_gradient: Var, hr: Var) -> Result<Var> {
    let mh = g.gradient_magnitude(hr, DEFAULT_EPSILON)?;
    pixel_loss(g, sr_gradient, mh)
}

/// Trade-off weights of the generator objective. The perceptual term always
/// has weight 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta_img: f64,
    pub gamma_img: f64,
    pub beta_gm: f64,
    pub gamma_gm: f64,
    pub beta_gb: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta_img: 0.01,
            gamma_img: 0.005,
            beta_gm: 0.01,
            gamma_gm: 0.005,
            beta_gb: 0.5,
        }
    }
}

const WEIGHT_KEYS: &[&str] = &["beta_img", "gamma_img", "beta_gm", "gamma_gm", "beta_gb"];

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in WEIGHT_KEYS.iter().zip(self.as_array()) {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 5] {
        [
            self.beta_img,
            self.gamma_img,
            self.beta_gm,
            self.gamma_gm,
            self.beta_gb,
        ]
    }

    /// Weights with the terms of disabled components zeroed.
    pub fn effective(&self, use_gradient_branch: bool, use_gradient_loss: bool) -> LossWeights {
        LossWeights {
            beta_gm: if use_gradient_loss { self.beta_gm } else { 0.0 },
            gamma_gm: if use_gradient_loss {
                self.gamma_gm
            } else {
                0.0
            },
            beta_gb: if use_gradient_branch {
                self.beta_gb
            } else {
                0.0
            },
            ..*self
        }
    }

    pub fn write_kv(&self, map: &mut KvMap, prefix: &str) {
        for (name, v) in WEIGHT_KEYS.iter().zip(self.as_array()) {
            map.set(format!("{prefix}{name}"), v);
        }
    }

    pub fn from_kv(map: &KvMap, prefix: &str) -> Result<Self> {
        let d = LossWeights::default();
        let k = |s: &str| format!("{prefix}{s}");
        let w = LossWeights {
            beta_img: map.parse_or(&k("beta_img"), d.beta_img)?,
            gamma_img: map.parse_or(&k("gamma_img"), d.gamma_img)?,
            beta_gm: map.parse_or(&k("beta_gm"), d.beta_gm)?,
            gamma_gm: map.parse_or(&k("gamma_gm"), d.gamma_gm)?,
            beta_gb: map.parse_or(&k("beta_gb"), d.beta_gb)?,
        };
        w.validate()?;
        Ok(w)
    }
}

/// Scalar values of the generator terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub pix_img: f64,
    pub perceptual: f64,
    pub adv_img: f64,
    pub pix_gm: f64,
    pub adv_gm: f64,
    pub pix_gb: f64,
}

/// The weighted generator objective. Terms are summed in a fixed order so
/// that the graph-side sum in [`weighted_total`] gives the same bits.
pub fn total_generator_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    let values = [
        ("pix_img", parts.pix_img),
        ("perceptual", parts.perceptual),
        ("adv_img", parts.adv_img),
        ("pix_gm", parts.pix_gm),
        ("adv_gm", parts.adv_gm),
        ("pix_gb", parts.pix_gb),
    ];
    if let Some((name, v)) = values.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss term {name} is {v}")));
    }
    let mut total = parts.perceptual;
    for (weight, v) in [
        (w.beta_img, parts.pix_img),
        (w.gamma_img, parts.adv_img),
        (w.beta_gm, parts.pix_gm),
        (w.gamma_gm, parts.adv_gm),
        (w.beta_gb, parts.pix_gb),
    ] {
        total += weight * v;
    }
    Ok(total)
}

/// Graph-side terms; `None` marks a term that was not computed.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossVars {
    pub pix_img: Option<Var>,
    pub perceptual: Option<Var>,
    pub adv_img: Option<Var>,
    pub pix_gm: Option<Var>,
    pub adv_gm: Option<Var>,
    pub pix_gb: Option<Var>,
}

impl LossVars {
    /// Scalar values, with missing terms reported as 0.
    pub fn values(&self, g: &Graph) -> Result<LossParts> {
        let v = |x: Option<Var>| x.map_or(Ok(0.0), |x| g.scalar(x));
        Ok(LossParts {
            pix_img: v(self.pix_img)?,
            perceptual: v(self.perceptual)?,
            adv_img: v(self.adv_img)?,
            pix_gm: v(self.pix_gm)?,
            adv_gm: v(self.adv_gm)?,
            pix_gb: v(self.pix_gb)?,
        })
    }
}

/// Differentiable version of [`total_generator_loss`]. Terms that are
/// missing or carry zero weight are left out of the graph.
pub fn weighted_total(g: &mut Graph, vars: &LossVars, w: &LossWeights) -> Result<Var> {
    let mut total = match vars.perceptual {
        Some(p) => p,
        None => g.input(Tensor::scalar(0.0)),
    };
    for (weight, v) in [
        (w.beta_img, vars.pix_img),
        (w.gamma_img, vars.adv_img),
        (w.beta_gm, vars.pix_gm),
        (w.gamma_gm, vars.adv_gm),
        (w.beta_gb, vars.pix_gb),
    ] {
        if let Some(v) = v.filter(|_| weight != 0.0) {
            let scaled = g.scale(v, weight);
            total = g.add(total, scaled)?;
        }
    }
    Ok(total)
}

/// One line of a training loss log.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub pix_img: f64,
    pub perceptual: f64,
    pub adv_img: f64,
    pub pix_gm: f64,
    pub adv_gm: f64,
    pub pix_gb: f64,
    pub total_g: f64,
    pub dis_img: f64,
    pub dis_gm: f64,
}

impl LossReport {
    pub fn new(
        step: u64,
        parts: &LossParts,
        w: &LossWeights,
        dis_img: f64,
        dis_gm: f64,
    ) -> Result<Self> {
        Ok(LossReport {
            step,
            pix_img: parts.pix_img,
            perceptual: parts.perceptual,
            adv_img: parts.adv_img,
            pix_gm: parts.pix_gm,
            adv_gm: parts.adv_gm,
            pix_gb: parts.pix_gb,
            total_g: total_generator_loss(parts, w)?,
            dis_img,
            dis_gm,
        })
    }

    pub fn parts(&self) -> LossParts {
        LossParts {
            pix_img: self.pix_img,
            perceptual: self.perceptual,
            adv_img: self.adv_img,
            pix_gm: self.pix_gm,
            adv_gm: self.adv_gm,
            pix_gb: self.pix_gb,
        }
    }

    pub fn to_json_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("loss report serializes");
        s.push('\n');
        s
    }

    /// Parses a line-delimited log, skipping blank lines.
    pub fn parse_log(text: &str) -> Result<Vec<LossReport>> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| Error::InvalidArgument(format!("loss log line {}: {e}", i + 1)))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disc::{DiscConfig, GRADIENT_PREFIX};
    use crate::gradops::extract_gradient;
    use crate::nn::gradcheck::GradCheck;
    use crate::Image;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn scalar_of(build: impl FnOnce(&mut Graph) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let v = build(&mut g).unwrap();
        g.scalar(v).unwrap()
    }

    #[test]
    fn pixel_loss_examples() {
        let a = rand_tensor(&[2, 3, 5, 4], 1);
        let b = rand_tensor(&[2, 3, 5, 4], 2);
        let same = scalar_of(|g| {
            let x = g.input(a.clone());
            pixel_loss(g, x, x)
        });
        assert_eq!(same, 0.0);
        let shifted = Tensor::new(
            a.shape().to_vec(),
            a.data().iter().map(|v| v + 0.5).collect(),
        )
        .unwrap();
        let half = scalar_of(|g| {
            let x = g.input(shifted.clone());
            let y = g.input(a.clone());
            pixel_loss(g, x, y)
        });
        assert!((half - 0.5).abs() < 1e-15);
        let got = scalar_of(|g| {
            let x = g.input(a.clone());
            let y = g.input(b.clone());
            pixel_loss(g, x, y)
        });
        let mut acc = 0.0;
        for i in 0..a.numel() {
            acc += (a.data()[i] - b.data()[i]).abs();
        }
        assert!((got - acc / a.numel() as f64).abs() < 1e-12);

        let mut g = Graph::new();
        let x = g.input(a.clone());
        let y = g.input(Tensor::zeros(&[2, 3, 5, 5]));
        assert!(pixel_loss(&mut g, x, y).is_err());
    }

    #[test]
    fn perceptual_examples() {
        let a = rand_tensor(&[1, 3, 16, 16], 3);
        let b = rand_tensor(&[1, 3, 16, 16], 4);
        let ext = RandomConvExtractor::new(3, PERCEPTUAL_SEED).unwrap();
        let same = scalar_of(|g| {
            let x = g.input(a.clone());
            let y = g.input(a.clone());
            perceptual_loss(g, x, y, &ext)
        });
        assert_eq!(same, 0.0);
        let ident = scalar_of(|g| {
            let x = g.input(a.clone());
            let y = g.input(b.clone());
            perceptual_loss(g, x, y, &IdentityExtractor)
        });
        let pix = scalar_of(|g| {
            let x = g.input(a.clone());
            let y = g.input(b.clone());
            pixel_loss(g, x, y)
        });
        assert_eq!(ident, pix);
        let ab = scalar_of(|g| {
            let x = g.input(a.clone());
            let y = g.input(b.clone());
            perceptual_loss(g, x, y, &ext)
        });
        let ba = scalar_of(|g| {
            let x = g.input(b.clone());
            let y = g.input(a.clone());
            perceptual_loss(g, x, y, &ext)
        });
        assert_eq!(ab, ba);
        assert!(ab > 0.0);

        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 1, 16, 16]));
        assert!(perceptual_loss(&mut g, x, x, &ext).is_err());
    }

    #[test]
    fn perceptual_gradient_reaches_sr_only() {
        let ext = RandomConvExtractor::new(3, PERCEPTUAL_SEED).unwrap();
        let mut g = Graph::new();
        let sr = g.leaf(rand_tensor(&[1, 3, 8, 8], 5), true);
        let hr = g.input(rand_tensor(&[1, 3, 8, 8], 6));
        let l = perceptual_loss(&mut g, sr, hr, &ext).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(sr).unwrap().data().iter().any(|&v| v != 0.0));
        assert!(g.param_grads().is_empty());
    }

    fn logits(g: &mut Graph, v: &[f64]) -> Var {
        g.input(Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap())
    }

    #[test]
    fn gan_losses_at_zero_logits() {
        let ln2 = std::f64::consts::LN_2;
        let mut g = Graph::new();
        let r = logits(&mut g, &[0.0; 4]);
        let f = logits(&mut g, &[0.0; 4]);
        let d = gan_d_loss(&mut g, r, f, GanMode::Standard).unwrap();
        let gl = gan_g_loss(&mut g, r, f, GanMode::Standard).unwrap();
        assert!((g.scalar(d).unwrap() - 2.0 * ln2).abs() < 1e-12);
        assert!((g.scalar(gl).unwrap() - ln2).abs() < 1e-12);

        let r = logits(&mut g, &[1.7; 3]);
        let f = logits(&mut g, &[1.7; 3]);
        let d = gan_d_loss(&mut g, r, f, GanMode::Ragan).unwrap();
        let gl = gan_g_loss(&mut g, r, f, GanMode::Ragan).unwrap();
        assert!((g.scalar(d).unwrap() - 2.0 * ln2).abs() < 1e-12);
        assert!((g.scalar(gl).unwrap() - 2.0 * ln2).abs() < 1e-12);
    }

    #[test]
    fn perfect_discriminator_limit() {
        let mut g = Graph::new();
        let r = logits(&mut g, &[800.0, 900.0]);
        let f = logits(&mut g, &[-800.0, -900.0]);
        let d = gan_d_loss(&mut g, r, f, GanMode::Standard).unwrap();
        assert!(g.scalar(d).unwrap() < 1e-300);
        let r = logits(&mut g, &[]);
        let f = logits(&mut g, &[]);
        assert!(gan_d_loss(&mut g, r, f, GanMode::Standard).is_err());
        assert!(gan_g_loss(&mut g, r, f, GanMode::Ragan).is_err());
    }

    /// Direct formula with probabilities, valid for moderate logits.
    fn naive_gan(real: &[f64], fake: &[f64], mode: GanMode) -> (f64, f64) {
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        match mode {
            GanMode::Standard => {
                let d = -mean(
                    &fake
                        .iter()
                        .map(|&f| (1.0 - sig(f)).ln())
                        .collect::<Vec<_>>(),
                ) - mean(&real.iter().map(|&r| sig(r).ln()).collect::<Vec<_>>());
                let gl = -mean(&fake.iter().map(|&f| sig(f).ln()).collect::<Vec<_>>());
                (d, gl)
            }
            GanMode::Ragan => {
                let (mr, mf) = (mean(real), mean(fake));
                let d = -mean(&real.iter().map(|&r| sig(r - mf).ln()).collect::<Vec<_>>())
                    - mean(
                        &fake
                            .iter()
                            .map(|&f| (1.0 - sig(f - mr)).ln())
                            .collect::<Vec<_>>(),
                    );
                let gl = -mean(&fake.iter().map(|&f| sig(f - mr).ln()).collect::<Vec<_>>())
                    - mean(
                        &real
                            .iter()
                            .map(|&r| (1.0 - sig(r - mf)).ln())
                            .collect::<Vec<_>>(),
                    );
                (d, gl)
            }
        }
    }

    #[test]
    fn gan_losses_match_probability_form() {
        let real = [0.3, -1.2, 2.0];
        let fake = [-0.7, 0.1, 1.4];
        for mode in [GanMode::Standard, GanMode::Ragan] {
            let mut g = Graph::new();
            let r = logits(&mut g, &real);
            let f = logits(&mut g, &fake);
            let d = gan_d_loss(&mut g, r, f, mode).unwrap();
            let gl = gan_g_loss(&mut g, r, f, mode).unwrap();
            let (nd, ng) = naive_gan(&real, &fake, mode);
            assert!((g.scalar(d).unwrap() - nd).abs() < 1e-12, "{mode}");
            assert!((g.scalar(gl).unwrap() - ng).abs() < 1e-12, "{mode}");
        }
    }

    #[test]
    fn gan_mode_parsing() {
        assert_eq!("ragan".parse::<GanMode>().unwrap(), GanMode::Ragan);
        assert_eq!(
            GanMode::Standard.to_string().parse::<GanMode>().unwrap(),
            GanMode::Standard
        );
        assert!("wgan".parse::<GanMode>().is_err());
    }

    /// Rows of a 1-D edge profile repeated down an image.
    fn profile_image(profile: &[f64], rows: usize) -> Tensor {
        let w = profile.len();
        let data = (0..rows)
            .flat_map(|_| profile.iter().copied())
            .collect::<Vec<_>>();
        Tensor::new(vec![1, 1, rows, w], data).unwrap()
    }

    #[test]
    fn blurry_edge_is_penalized_more_in_gradient_space() {
        let hr: Vec<f64> = (0..16).map(|x| if x < 8 { 0.2 } else { 0.8 }).collect();
        let sharp: Vec<f64> = (0..16).map(|x| if x < 8 { 0.225 } else { 0.775 }).collect();
        let blurry: Vec<f64> = (0..16)
            .map(|x| match x {
                0..=5 => 0.2,
                6 => 0.32,
                7 => 0.44,
                8 => 0.56,
                9 => 0.68,
                _ => 0.8,
            })
            .collect();
        let eval = |sr: &[f64], grad: bool| {
            scalar_of(|g| {
                let s = g.input(profile_image(sr, 6));
                let h = g.input(profile_image(&hr, 6));
                if grad {
                    gradient_pixel_loss(g, s, h)
                } else {
                    pixel_loss(g, s, h)
                }
            })
        };
        let (gb, gs) = (eval(&blurry, true), eval(&sharp, true));
        let (ib, is) = (eval(&blurry, false), eval(&sharp, false));
        assert!(gb > gs);
        assert!(
            gb / gs > ib / is,
            "gradient ratio {} vs image ratio {}",
            gb / gs,
            ib / is
        );
    }

    #[test]
    fn gradient_pixel_loss_is_shift_invariant() {
        let a = rand_tensor(&[1, 3, 9, 7], 7);
        let b = rand_tensor(&[1, 3, 9, 7], 8);
        let base = scalar_of(|g| {
            let x = g.input(a.clone());
            let y = g.input(b.clone());
            gradient_pixel_loss(g, x, y)
        });
        let shifted = scalar_of(|g| {
            let x = g.input(a.clone());
            let x = g.add_scalar(x, 0.3);
            let y = g.input(b.clone());
            let y = g.add_scalar(y, 0.3);
            gradient_pixel_loss(g, x, y)
        });
        assert!((base - shifted).abs() <= 1e-12);
        let only_sr = scalar_of(|g| {
            let x = g.input(a.clone());
            let y = g.add_scalar(x, 0.25);
            gradient_pixel_loss(g, y, x)
        });
        assert!(only_sr.abs() < 1e-12);
    }

    #[test]
    fn gradient_branch_loss_examples() {
        let hr = Tensor::full(&[1, 3, 6, 6], 0.4);
        let v = scalar_of(|g| {
            let p = g.input(Tensor::zeros(&[1, 3, 6, 6]));
            let h = g.input(hr.clone());
            gradient_branch_loss(g, p, h)
        });
        assert!((v - DEFAULT_EPSILON.sqrt()).abs() < 1e-15);

        let a = rand_tensor(&[1, 3, 6, 5], 9);
        let pred = rand_tensor(&[1, 3, 6, 5], 10);
        let got = scalar_of(|g| {
            let p = g.input(pred.clone());
            let h = g.input(a.clone());
            gradient_branch_loss(g, p, h)
        });
        let img = Image::from_planar(6, 5, 3, a.data()).unwrap();
        let m = extract_gradient(&img, DEFAULT_EPSILON)
            .unwrap()
            .into_image()
            .to_planar();
        let mut acc = 0.0;
        for (p, q) in pred.data().iter().zip(&m) {
            acc += (p - q).abs();
        }
        assert!((got - acc / m.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn gradient_losses_bundle() {
        let cfg = DiscConfig {
            base_channels: 4,
            num_downsamples: 2,
            input_size: 16,
            ..DiscConfig::default()
        };
        let d = Discriminator::new(&cfg, GRADIENT_PREFIX, 1).unwrap();
        let mut g = Graph::new();
        let sr = g.leaf(rand_tensor(&[2, 3, 16, 16], 11), true);
        let hr = g.input(rand_tensor(&[2, 3, 16, 16], 12));
        let parts = gradient_losses(&mut g, sr, hr, &d, GanMode::Ragan).unwrap();
        assert!(g.scalar(parts.pix_gm).unwrap() > 0.0);
        assert!(g.scalar(parts.dis_gm).unwrap().is_finite());
        g.backward(parts.adv_gm).unwrap();
        assert!(g.grad(sr).unwrap().data().iter().any(|&v| v != 0.0));
        assert!(
            g.param_grads().is_empty(),
            "discriminator must be frozen on the generator side"
        );

        let same = gradient_losses(&mut g, hr, hr, &d, GanMode::Ragan).unwrap();
        assert_eq!(g.scalar(same.pix_gm).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let zero = LossParts::default();
        assert_eq!(
            total_generator_loss(&zero, &LossWeights::default()).unwrap(),
            0.0
        );
        let ones = LossParts {
            pix_img: 1.0,
            perceptual: 1.0,
            adv_img: 1.0,
            pix_gm: 1.0,
            adv_gm: 1.0,
            pix_gb: 1.0,
        };
        let t = total_generator_loss(&ones, &LossWeights::default()).unwrap();
        assert!((t - 1.53).abs() < 1e-12, "{t}");
        let only = LossWeights {
            beta_img: 1.0,
            gamma_img: 0.0,
            beta_gm: 0.0,
            gamma_gm: 0.0,
            beta_gb: 0.0,
        };
        let parts = LossParts {
            pix_img: 0.37,
            ..LossParts::default()
        };
        assert_eq!(total_generator_loss(&parts, &only).unwrap(), 0.37);
        let bad = LossParts {
            adv_gm: f64::NAN,
            ..ones
        };
        assert!(total_generator_loss(&bad, &LossWeights::default()).is_err());
    }

    #[test]
    fn graph_total_matches_value_total_bitwise() {
        let mut g = Graph::new();
        let vals = [0.11, 0.7, 1.3, 0.05, 0.9, 0.021];
        let vars: Vec<Var> = vals.iter().map(|&v| g.input(Tensor::scalar(v))).collect();
        let lv = LossVars {
            pix_img: Some(vars[0]),
            perceptual: Some(vars[1]),
            adv_img: Some(vars[2]),
            pix_gm: Some(vars[3]),
            adv_gm: Some(vars[4]),
            pix_gb: Some(vars[5]),
        };
        for w in [
            LossWeights::default(),
            LossWeights::default().effective(false, true),
            LossWeights::default().effective(true, false),
        ] {
            let t = weighted_total(&mut g, &lv, &w).unwrap();
            let parts = lv.values(&g).unwrap();
            assert_eq!(
                g.scalar(t).unwrap().to_bits(),
                total_generator_loss(&parts, &w).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn effective_weights_follow_ablations() {
        let w = LossWeights::default();
        let no_gl = w.effective(true, false);
        assert_eq!(
            (no_gl.beta_gm, no_gl.gamma_gm, no_gl.beta_gb),
            (0.0, 0.0, 0.5)
        );
        let no_gb = w.effective(false, true);
        assert_eq!(
            (no_gb.beta_gm, no_gb.gamma_gm, no_gb.beta_gb),
            (0.01, 0.005, 0.0)
        );
        let base = w.effective(false, false);
        assert_eq!((base.beta_gm, base.gamma_gm, base.beta_gb), (0.0, 0.0, 0.0));
        assert_eq!((base.beta_img, base.gamma_img), (0.01, 0.005));
    }

    #[test]
    fn weights_kv_and_validation() {
        let mut m = KvMap::new();
        LossWeights::default().write_kv(&mut m, "loss.");
        assert_eq!(
            LossWeights::from_kv(&m, "loss.").unwrap(),
            LossWeights::default()
        );
        m.set("loss.beta_gm", -1.0);
        assert!(LossWeights::from_kv(&m, "loss.").is_err());
    }

    #[test]
    fn report_round_trips_through_json() {
        let parts = LossParts {
            pix_img: 0.1,
            perceptual: 0.2,
            adv_img: 0.3,
            pix_gm: 0.4,
            adv_gm: 0.5,
            pix_gb: 0.6,
        };
        let r = LossReport::new(7, &parts, &LossWeights::default(), 1.1, 1.2).unwrap();
        let text = r.to_json_line() + "\n" + &r.to_json_line();
        let back = LossReport::parse_log(&text).unwrap();
        assert_eq!(back, vec![r, r]);
        assert_eq!(
            back[0].total_g,
            total_generator_loss(&back[0].parts(), &LossWeights::default()).unwrap()
        );
        assert!(LossReport::parse_log("{nope").is_err());
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let w = LossWeights::default();
        let ext = RandomConvExtractor::new(3, PERCEPTUAL_SEED).unwrap();
        let cfg = DiscConfig {
            base_channels: 2,
            num_downsamples: 1,
            input_size: 8,
            ..DiscConfig::default()
        };
        let d_img = Discriminator::new(&cfg, crate::disc::IMAGE_PREFIX, 1).unwrap();
        let d_gm = Discriminator::new(&cfg, GRADIENT_PREFIX, 2).unwrap();
        let hr = rand_tensor(&[2, 3, 8, 8], 13);
        let sr = rand_tensor(&[2, 3, 8, 8], 14);
        // a small step keeps samples from straddling the L1 and leaky-ReLU kinks
        let report = GradCheck {
            step: 1e-6,
            samples: 30,
            ..GradCheck::default()
        }
        .inputs(&[sr], |g, v| {
            let hr = g.input(hr.clone());
            let sr = v[0];
            let fake = d_img.forward(g, false, sr)?;
            let real = d_img.forward(g, false, hr)?;
            let gm = gradient_losses(g, sr, hr, &d_gm, GanMode::Ragan)?;
            let vars = LossVars {
                pix_img: Some(pixel_loss(g, sr, hr)?),
                perceptual: Some(perceptual_loss(g, sr, hr, &ext)?),
                adv_img: Some(gan_g_loss(g, real, fake, GanMode::Ragan)?),
                pix_gm: Some(gm.pix_gm),
                adv_gm: Some(gm.adv_gm),
                pix_gb: Some(gradient_branch_loss(g, sr, hr)?),
            };
            weighted_total(g, &vars, &w)
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-2, "{:?}", report.worst());
    }
}
