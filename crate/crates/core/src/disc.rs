//! VGG-style discriminators: a stack of leaky-ReLU convs that halves the
//! resolution `num_downsamples` times, then a two-layer dense head that
//! emits one raw logit per batch item. The image and gradient-map
//! discriminators share this code under different parameter prefixes.

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::nn::{Conv2d, Dense, Graph, ParamTree, Params, Var, LEAKY_SLOPE};
use crate::seed;

/// Parameter prefix of the image discriminator.
pub const IMAGE_PREFIX: &str = "disc_img";
/// Parameter prefix of the gradient-map discriminator.
pub const GRADIENT_PREFIX: &str = "disc_grad";

const HEAD_FEATURES: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub num_downsamples: usize,
    pub input_size: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig {
            in_channels: 3,
            base_channels: 16,
            num_downsamples: 3,
            input_size: 64,
        }
    }
}

const KV_KEYS: &[&str] = &[
    "in_channels",
    "base_channels",
    "num_downsamples",
    "input_size",
];

impl DiscConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.input_size == 0 {
            return Err(Error::Config("discriminator sizes must be positive".into()));
        }
        let step = 1usize << self.num_downsamples;
        if !self.input_size.is_multiple_of(step) {
            return Err(Error::Config(format!(
                "discriminator input_size {} is not divisible by 2^{}",
                self.input_size, self.num_downsamples
            )));
        }
        Ok(())
    }

    pub fn write_kv(&self, map: &mut KvMap, prefix: &str) {
        map.set(format!("{prefix}in_channels"), self.in_channels);
        map.set(format!("{prefix}base_channels"), self.base_channels);
        map.set(format!("{prefix}num_downsamples"), self.num_downsamples);
        map.set(format!("{prefix}input_size"), self.input_size);
    }

    pub fn from_kv(map: &KvMap, prefix: &str) -> Result<Self> {
        map.check_known(prefix, KV_KEYS)?;
        let d = DiscConfig::default();
        let k = |s: &str| format!("{prefix}{s}");
        let cfg = DiscConfig {
            in_channels: map.parse_or(&k("in_channels"), d.in_channels)?,
            base_channels: map.parse_or(&k("base_channels"), d.base_channels)?,
            num_downsamples: map.parse_or(&k("num_downsamples"), d.num_downsamples)?,
            input_size: map.parse_or(&k("input_size"), d.input_size)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscConfig,
    prefix: String,
    params: ParamTree,
    convs: Vec<Conv2d>,
    fc1: Dense,
    fc2: Dense,
}

impl Discriminator {
    /// Builds a discriminator whose parameter names all start with
    /// `prefix.`. Equal seeds give identical parameters.
    pub fn new(config: &DiscConfig, prefix: &str, rng_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut convs = vec![Conv2d::same(
            format!("{prefix}.conv0"),
            config.in_channels,
            config.base_channels,
            3,
        )];
        let mut channels = config.base_channels;
        for i in 1..=config.num_downsamples {
            let out = config.base_channels << i;
            convs.push(Conv2d::strided(
                format!("{prefix}.down{i}.conv_s2"),
                channels,
                out,
                2,
            ));
            convs.push(Conv2d::same(format!("{prefix}.down{i}.conv"), out, out, 3));
            channels = out;
        }
        let side = config.input_size >> config.num_downsamples;
        let fc1 = Dense::new(
            format!("{prefix}.fc1"),
            channels * side * side,
            HEAD_FEATURES,
        );
        let fc2 = Dense::new(format!("{prefix}.fc2"), HEAD_FEATURES, 1);

        let mut params = ParamTree::new();
        let mut rng = seed::rng(rng_seed);
        for conv in &convs {
            conv.init(&mut params, 1.0, &mut rng)?;
        }
        fc1.init(&mut params, 1.0, &mut rng)?;
        fc2.init(&mut params, 1.0, &mut rng)?;
        Ok(Discriminator {
            config: config.clone(),
            prefix: prefix.to_string(),
            params,
            convs,
            fc1,
            fc2,
        })
    }

    /// Reassembles a discriminator from stored parameters.
    pub fn from_params(config: &DiscConfig, prefix: &str, params: ParamTree) -> Result<Self> {
        let reference = Discriminator::new(config, prefix, 0)?;
        reference.params.check_compatible(&params).map_err(|e| {
            Error::Checkpoint(format!("{prefix} parameters do not match config: {e}"))
        })?;
        Ok(Discriminator {
            params,
            ..reference
        })
    }

    pub fn config(&self) -> &DiscConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn params(&self) -> &ParamTree {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamTree {
        &mut self.params
    }

    /// Raw logits, shape `N × 1`.
    pub fn forward(&self, g: &mut Graph, trainable: bool, x: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dims4()?;
        let size = self.config.input_size;
        if c != self.config.in_channels || h != size || w != size {
            return Err(Error::Shape(format!(
                "{} expects {}x{size}x{size} inputs, got {c}x{h}x{w}",
                self.prefix, self.config.in_channels
            )));
        }
        let p = if trainable {
            Params::trainable(&self.params)
        } else {
            Params::frozen(&self.params)
        };
        let mut y = x;
        for conv in &self.convs {
            let z = conv.forward(g, p, y)?;
            y = g.leaky_relu(z, LEAKY_SLOPE);
        }
        let z = self.fc1.forward(g, p, y)?;
        let z = g.leaky_relu(z, LEAKY_SLOPE);
        self.fc2.forward(g, p, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::GradCheck;
    use crate::nn::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> DiscConfig {
        DiscConfig {
            base_channels: 4,
            num_downsamples: 2,
            input_size: 16,
            ..DiscConfig::default()
        }
    }

    #[test]
    fn one_logit_per_item() {
        let d = Discriminator::new(&DiscConfig::default(), IMAGE_PREFIX, 1).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::uniform(
            &[4, 3, 64, 64],
            0.0,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(1),
        ));
        let y = d.forward(&mut g, false, x).unwrap();
        assert_eq!(g.value(y).shape(), &[4, 1]);
    }

    #[test]
    fn duplicate_inputs_give_identical_logits() {
        let d = Discriminator::new(&small(), IMAGE_PREFIX, 2).unwrap();
        let one = Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let mut both = one.data().to_vec();
        both.extend_from_slice(one.data());
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 3, 16, 16], both).unwrap());
        let y = d.forward(&mut g, false, x).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0].to_bits(), v[1].to_bits());
    }

    #[test]
    fn rejects_wrong_size_and_bad_config() {
        let d = Discriminator::new(&small(), IMAGE_PREFIX, 0).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 3, 32, 32]));
        assert!(d.forward(&mut g, false, x).is_err());
        let bad = DiscConfig {
            input_size: 20,
            num_downsamples: 3,
            ..small()
        };
        assert!(Discriminator::new(&bad, IMAGE_PREFIX, 0).is_err());
    }

    #[test]
    fn prefixes_keep_parameters_apart() {
        let a = Discriminator::new(&small(), IMAGE_PREFIX, 3).unwrap();
        let b = Discriminator::new(&small(), GRADIENT_PREFIX, 3).unwrap();
        assert!(a.params().names().all(|n| n.starts_with("disc_img.")));
        assert!(b.params().names().all(|n| n.starts_with("disc_grad.")));
        assert!(a.params().names().all(|n| !b.params().contains(n)));
    }

    #[test]
    fn logits_finite_on_unclamped_range() {
        let d = Discriminator::new(&DiscConfig::default(), GRADIENT_PREFIX, 4).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::uniform(
            &[2, 3, 64, 64],
            0.0,
            2.0,
            &mut ChaCha8Rng::seed_from_u64(4),
        ));
        let y = d.forward(&mut g, false, x).unwrap();
        assert!(g.value(y).is_finite());
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let d = Discriminator::new(&small(), IMAGE_PREFIX, 5).unwrap();
        let x = Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let report = GradCheck::default()
            .inputs(&[x], |g, v| {
                let y = d.forward(g, false, v[0])?;
                Ok(g.sum(y))
            })
            .unwrap();
        assert!(report.max_rel_error() < 1e-3, "{:?}", report.worst());
    }

    #[test]
    fn kv_round_trip() {
        let mut m = KvMap::new();
        small().write_kv(&mut m, "disc.");
        assert_eq!(DiscConfig::from_kv(&m, "disc.").unwrap(), small());
    }
}
