//! The two-branch generator.
//!
//! The SR branch is an RRDB trunk (shallow conv, residual-in-residual dense
//! blocks, trunk conv with a long skip, two nearest-×2 + conv upsampling
//! stages). Features after selected trunk blocks are tapped and fed to the
//! gradient branch, which super-resolves the gradient map of the LR input.
//! The gradient branch's last HR feature map is fused back into the SR
//! branch (concatenation, one extra RRDB, a conv) and also mapped to the
//! predicted HR gradient map by a 1×1 conv.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gradops::{Image, DEFAULT_EPSILON};
use crate::kv::{join_list, KvMap};
use crate::nn::{Conv2d, Graph, ParamTree, Params, Tensor, Var, LEAKY_SLOPE};
use crate::seed;

/// Residual scaling inside dense blocks and around each RRDB.
pub const RESIDUAL_SCALE: f64 = 0.2;
/// Init scale for convolutions on residual paths.
pub const RESIDUAL_INIT_SCALE: f64 = 0.1;
/// Init scale for every other generator convolution. Relative to He-normal this
/// gives std `1/sqrt(3 fan_in)`, the usual default for conv layers outside the
/// dense blocks, and keeps the untrained output close to zero.
pub const PLAIN_INIT_SCALE: f64 = 0.408_248_290_463_863;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub num_rrdb: usize,
    pub growth_channels: usize,
    pub base_channels: usize,
    /// 1-based trunk block indices whose outputs feed the gradient branch.
    pub tap_indices: Vec<usize>,
    pub scale: usize,
    pub use_gradient_branch: bool,
    /// When false, the gradient features entering the fusion block are
    /// replaced by zeros.
    pub fuse_gradient_features: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            in_channels: 3,
            num_rrdb: 8,
            growth_channels: 16,
            base_channels: 32,
            tap_indices: vec![2, 4, 6, 8],
            scale: 4,
            use_gradient_branch: true,
            fuse_gradient_features: true,
        }
    }
}

const KV_KEYS: &[&str] = &[
    "in_channels",
    "num_rrdb",
    "growth_channels",
    "base_channels",
    "tap_indices",
    "scale",
    "use_gradient_branch",
    "fuse_gradient_features",
];

impl GeneratorConfig {
    /// Full-size model: 23 blocks, 64 channels, taps after 5/10/15/20.
    pub fn paper() -> Self {
        GeneratorConfig {
            num_rrdb: 23,
            growth_channels: 32,
            base_channels: 64,
            tap_indices: vec![5, 10, 15, 20],
            ..GeneratorConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.scale != 4 {
            return bad(format!("only ×4 is supported, got ×{}", self.scale));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return bad(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            ));
        }
        if self.num_rrdb == 0 || self.growth_channels == 0 || self.base_channels == 0 {
            return bad("block and channel counts must be positive".into());
        }
        if self.tap_indices.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "tap indices {:?} must be strictly increasing",
                self.tap_indices
            ));
        }
        if let Some(&t) = self
            .tap_indices
            .iter()
            .find(|&&t| t == 0 || t > self.num_rrdb)
        {
            return bad(format!("tap index {t} outside 1..={}", self.num_rrdb));
        }
        if self.use_gradient_branch && self.tap_indices.is_empty() {
            return bad("the gradient branch needs at least one tap".into());
        }
        Ok(())
    }

    pub fn write_kv(&self, map: &mut KvMap, prefix: &str) {
        map.set(format!("{prefix}in_channels"), self.in_channels);
        map.set(format!("{prefix}num_rrdb"), self.num_rrdb);
        map.set(format!("{prefix}growth_channels"), self.growth_channels);
        map.set(format!("{prefix}base_channels"), self.base_channels);
        map.set(format!("{prefix}tap_indices"), join_list(&self.tap_indices));
        map.set(format!("{prefix}scale"), self.scale);
        map.set(
            format!("{prefix}use_gradient_branch"),
            self.use_gradient_branch,
        );
        map.set(
            format!("{prefix}fuse_gradient_features"),
            self.fuse_gradient_features,
        );
    }

    pub fn from_kv(map: &KvMap, prefix: &str) -> Result<Self> {
        map.check_known(prefix, KV_KEYS)?;
        let d = GeneratorConfig::default();
        let k = |s: &str| format!("{prefix}{s}");
        let cfg = GeneratorConfig {
            in_channels: map.parse_or(&k("in_channels"), d.in_channels)?,
            num_rrdb: map.parse_or(&k("num_rrdb"), d.num_rrdb)?,
            growth_channels: map.parse_or(&k("growth_channels"), d.growth_channels)?,
            base_channels: map.parse_or(&k("base_channels"), d.base_channels)?,
            tap_indices: map.parse_list_or(&k("tap_indices"), d.tap_indices)?,
            scale: map.parse_or(&k("scale"), d.scale)?,
            use_gradient_branch: map.parse_or(&k("use_gradient_branch"), d.use_gradient_branch)?,
            fuse_gradient_features: map
                .parse_or(&k("fuse_gradient_features"), d.fuse_gradient_features)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Five densely connected 3×3 convs with a scaled residual.
#[derive(Clone, Debug)]
struct DenseBlock {
    convs: Vec<Conv2d>,
}

impl DenseBlock {
    fn new(name: &str, channels: usize, growth: usize) -> Self {
        let convs = (0..5)
            .map(|i| {
                let out = if i == 4 { channels } else { growth };
                Conv2d::same(
                    format!("{name}.conv{}", i + 1),
                    channels + i * growth,
                    out,
                    3,
                )
            })
            .collect();
        DenseBlock { convs }
    }

    fn forward(&self, g: &mut Graph, p: Params, x: Var) -> Result<Var> {
        let mut features = vec![x];
        for conv in &self.convs[..4] {
            let input = if features.len() == 1 {
                x
            } else {
                g.concat_channels(&features)?
            };
            let y = conv.forward(g, p, input)?;
            features.push(g.leaky_relu(y, LEAKY_SLOPE));
        }
        let input = g.concat_channels(&features)?;
        let y = self.convs[4].forward(g, p, input)?;
        let y = g.scale(y, RESIDUAL_SCALE);
        g.add(x, y)
    }
}

/// Residual-in-residual dense block: three dense blocks inside an outer
/// scaled residual. Output shape equals input shape.
#[derive(Clone, Debug)]
pub struct Rrdb {
    pub name: String,
    pub channels: usize,
    pub growth: usize,
    blocks: Vec<DenseBlock>,
}

impl Rrdb {
    pub fn new(name: impl Into<String>, channels: usize, growth: usize) -> Self {
        let name = name.into();
        let blocks = (1..=3)
            .map(|j| DenseBlock::new(&format!("{name}.rdb{j}"), channels, growth))
            .collect();
        Rrdb {
            name,
            channels,
            growth,
            blocks,
        }
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.blocks.iter().flat_map(|b| b.convs.iter())
    }

    pub fn num_params(&self) -> usize {
        self.convs().map(Conv2d::num_params).sum()
    }

    pub fn init(&self, tree: &mut ParamTree, rng: &mut impl Rng) -> Result<()> {
        for conv in self.convs() {
            conv.init(tree, RESIDUAL_INIT_SCALE, rng)?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, p: Params, x: Var) -> Result<Var> {
        let c = g.value(x).dims4()?.1;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "{} expects {} channels, got {c}",
                self.name, self.channels
            )));
        }
        let mut y = x;
        for block in &self.blocks {
            y = block.forward(g, p, y)?;
        }
        let y = g.scale(y, RESIDUAL_SCALE);
        g.add(x, y)
    }
}

#[derive(Clone, Debug)]
struct GradientBranch {
    conv_first: Conv2d,
    blocks: Vec<(Conv2d, Rrdb)>,
    lr_conv: Conv2d,
    upconv1: Conv2d,
    upconv2: Conv2d,
    hr_conv: Conv2d,
    out_conv: Conv2d,
}

#[derive(Clone, Debug)]
struct Layout {
    conv_first: Conv2d,
    blocks: Vec<Rrdb>,
    trunk_conv: Conv2d,
    upconv1: Conv2d,
    upconv2: Conv2d,
    hr_conv: Conv2d,
    fusion: Option<(Rrdb, Conv2d)>,
    conv_last: Conv2d,
    gradient: Option<GradientBranch>,
}

impl Layout {
    fn new(cfg: &GeneratorConfig) -> Self {
        let nf = cfg.base_channels;
        let gc = cfg.growth_channels;
        let c = cfg.in_channels;
        let sr = |n: &str| format!("sr_branch.{n}");
        let gb = |n: &str| format!("grad_branch.{n}");
        let gradient = cfg.use_gradient_branch.then(|| GradientBranch {
            conv_first: Conv2d::same(gb("conv_first"), c, nf, 3),
            blocks: (1..=cfg.tap_indices.len())
                .map(|t| {
                    (
                        Conv2d::same(gb(&format!("block{t}.merge")), 2 * nf, nf, 3),
                        Rrdb::new(gb(&format!("block{t}.rrdb")), nf, gc),
                    )
                })
                .collect(),
            lr_conv: Conv2d::same(gb("lr_conv"), nf, nf, 3),
            upconv1: Conv2d::same(gb("upconv1"), nf, nf, 3),
            upconv2: Conv2d::same(gb("upconv2"), nf, nf, 3),
            hr_conv: Conv2d::same(gb("hr_conv"), nf, nf, 3),
            out_conv: Conv2d::same(gb("out_conv"), nf, c, 1),
        });
        Layout {
            conv_first: Conv2d::same(sr("conv_first"), c, nf, 3),
            blocks: (1..=cfg.num_rrdb)
                .map(|i| Rrdb::new(sr(&format!("block{i}")), nf, gc))
                .collect(),
            trunk_conv: Conv2d::same(sr("trunk_conv"), nf, nf, 3),
            upconv1: Conv2d::same(sr("upconv1"), nf, nf, 3),
            upconv2: Conv2d::same(sr("upconv2"), nf, nf, 3),
            hr_conv: Conv2d::same(sr("hr_conv"), nf, nf, 3),
            fusion: cfg.use_gradient_branch.then(|| {
                (
                    Rrdb::new(sr("fusion"), 2 * nf, gc),
                    Conv2d::same(sr("fusion_conv"), 2 * nf, nf, 3),
                )
            }),
            conv_last: Conv2d::same(sr("conv_last"), nf, c, 3),
            gradient,
        }
    }

    fn init(&self, tree: &mut ParamTree, rng: &mut impl Rng) -> Result<()> {
        self.conv_first.init(tree, PLAIN_INIT_SCALE, rng)?;
        for b in &self.blocks {
            b.init(tree, rng)?;
        }
        for conv in [
            &self.trunk_conv,
            &self.upconv1,
            &self.upconv2,
            &self.hr_conv,
        ] {
            conv.init(tree, PLAIN_INIT_SCALE, rng)?;
        }
        if let Some((rrdb, conv)) = &self.fusion {
            rrdb.init(tree, rng)?;
            conv.init(tree, PLAIN_INIT_SCALE, rng)?;
        }
        self.conv_last.init(tree, PLAIN_INIT_SCALE, rng)?;
        if let Some(gb) = &self.gradient {
            gb.conv_first.init(tree, PLAIN_INIT_SCALE, rng)?;
            for (merge, rrdb) in &gb.blocks {
                merge.init(tree, PLAIN_INIT_SCALE, rng)?;
                rrdb.init(tree, rng)?;
            }
            for conv in [
                &gb.lr_conv,
                &gb.upconv1,
                &gb.upconv2,
                &gb.hr_conv,
                &gb.out_conv,
            ] {
                conv.init(tree, PLAIN_INIT_SCALE, rng)?;
            }
        }
        Ok(())
    }
}

/// Variables produced by one generator forward pass.
#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    /// Super-resolved image, `N × C × 4H × 4W`, unclamped.
    pub sr_image: Var,
    /// Predicted HR gradient map (`None` without the gradient branch).
    pub sr_gradient: Option<Var>,
    /// Trunk features handed to the gradient branch, in tap order.
    pub taps: Vec<Var>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Replace the gradient features entering fusion with zeros.
    pub zero_gradient_features: bool,
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamTree,
    layout: Layout,
}

/// Builds a generator with freshly initialized parameters. Equal seeds give
/// bit-identical parameters.
pub fn build_generator(config: &GeneratorConfig, rng_seed: u64) -> Result<Generator> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut params = ParamTree::new();
    let mut rng = seed::rng(rng_seed);
    layout.init(&mut params, &mut rng)?;
    Ok(Generator {
        config: config.clone(),
        params,
        layout,
    })
}

impl Generator {
    /// Reassembles a generator from stored parameters, checking that names
    /// and shapes match the architecture.
    pub fn from_params(config: &GeneratorConfig, params: ParamTree) -> Result<Generator> {
        let reference = build_generator(config, 0)?;
        reference.params.check_compatible(&params).map_err(|e| {
            Error::Checkpoint(format!("generator parameters do not match config: {e}"))
        })?;
        Ok(Generator {
            params,
            ..reference
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamTree {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamTree {
        &mut self.params
    }

    pub fn set_fuse_gradient_features(&mut self, fuse: bool) {
        self.config.fuse_gradient_features = fuse;
    }

    /// Forward pass with the configured fusion behaviour.
    pub fn forward(&self, g: &mut Graph, trainable: bool, lr: Var) -> Result<GeneratorOutput> {
        let opts = ForwardOptions {
            zero_gradient_features: !self.config.fuse_gradient_features,
        };
        self.forward_with(g, trainable, lr, opts)
    }

    pub fn forward_with(
        &self,
        g: &mut Graph,
        trainable: bool,
        lr: Var,
        opts: ForwardOptions,
    ) -> Result<GeneratorOutput> {
        let p = if trainable {
            Params::trainable(&self.params)
        } else {
            Params::frozen(&self.params)
        };
        let (_, c, h, w) = g.value(lr).dims4()?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "generator expects {} channels, got {c}",
                self.config.in_channels
            )));
        }
        if h < 8 || w < 8 {
            return Err(Error::Shape(format!(
                "LR input must be at least 8x8, got {h}x{w}"
            )));
        }
        let l = &self.layout;

        let fea = l.conv_first.forward(g, p, lr)?;
        let mut trunk = fea;
        let mut taps = Vec::with_capacity(self.config.tap_indices.len());
        for (i, block) in l.blocks.iter().enumerate() {
            trunk = block.forward(g, p, trunk)?;
            if self.config.tap_indices.contains(&(i + 1)) {
                taps.push(trunk);
            }
        }
        let trunk = l.trunk_conv.forward(g, p, trunk)?;
        let fea = g.add(fea, trunk)?;
        let up = upsample_conv(g, p, &l.upconv1, fea)?;
        let up = upsample_conv(g, p, &l.upconv2, up)?;
        let hr = l.hr_conv.forward(g, p, up)?;
        let hr = g.leaky_relu(hr, LEAKY_SLOPE);

        let (Some(gb), Some((fusion, fusion_conv))) = (&l.gradient, &l.fusion) else {
            let sr_image = l.conv_last.forward(g, p, hr)?;
            return Ok(GeneratorOutput {
                sr_image,
                sr_gradient: None,
                taps,
            });
        };

        let lr_grad = g.gradient_magnitude(lr, DEFAULT_EPSILON)?;
        let gfea = gb.conv_first.forward(g, p, lr_grad)?;
        let mut gx = gfea;
        for ((merge, rrdb), &tap) in gb.blocks.iter().zip(&taps) {
            let cat = g.concat_channels(&[gx, tap])?;
            let merged = merge.forward(g, p, cat)?;
            gx = rrdb.forward(g, p, merged)?;
        }
        let gx = gb.lr_conv.forward(g, p, gx)?;
        let gx = g.add(gx, gfea)?;
        let gup = upsample_conv(g, p, &gb.upconv1, gx)?;
        let gup = upsample_conv(g, p, &gb.upconv2, gup)?;
        let gfeat = gb.hr_conv.forward(g, p, gup)?;
        let gfeat = g.leaky_relu(gfeat, LEAKY_SLOPE);
        let sr_gradient = gb.out_conv.forward(g, p, gfeat)?;

        let fuse_in = if opts.zero_gradient_features {
            let zeros = Tensor::zeros(g.value(gfeat).shape());
            g.input(zeros)
        } else {
            gfeat
        };
        let cat = g.concat_channels(&[hr, fuse_in])?;
        let fused = fusion.forward(g, p, cat)?;
        let fused = fusion_conv.forward(g, p, fused)?;
        let fused = g.leaky_relu(fused, LEAKY_SLOPE);
        let sr_image = l.conv_last.forward(g, p, fused)?;
        Ok(GeneratorOutput {
            sr_image,
            sr_gradient: Some(sr_gradient),
            taps,
        })
    }

    /// Super-resolves one image without tracking gradients. Returns the SR
    /// image (unclamped) and the predicted gradient map, if any.
    pub fn infer(&self, lr: &Image, opts: ForwardOptions) -> Result<(Image, Option<Image>)> {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_images(std::slice::from_ref(lr))?);
        let out = self.forward_with(&mut g, false, x, opts)?;
        let sr = g.value(out.sr_image).to_images()?.remove(0);
        let grad = match out.sr_gradient {
            Some(v) => Some(g.value(v).to_images()?.remove(0)),
            None => None,
        };
        Ok((sr, grad))
    }
}

fn upsample_conv(g: &mut Graph, p: Params, conv: &Conv2d, x: Var) -> Result<Var> {
    let up = g.upsample_nearest(x, 2)?;
    let y = conv.forward(g, p, up)?;
    Ok(g.leaky_relu(y, LEAKY_SLOPE))
}
