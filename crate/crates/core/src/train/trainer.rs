use std::fmt;
use std::str::FromStr;

use super::adam::{clip_global_norm, Adam};
use super::PerceptualKind;
use super::TrainConfig;
use crate::arch::{build_generator, Generator, GeneratorConfig};
use crate::data::{Batch, SamplerState};
use crate::disc::{Discriminator, GRADIENT_PREFIX, IMAGE_PREFIX};
use crate::error::{Error, Result};
use crate::gradops::DEFAULT_EPSILON;
use crate::kv::KvMap;
use crate::losses::{
    gan_d_loss, gan_g_loss, gradient_branch_loss, perceptual_loss, pixel_loss, weighted_total,
    FeatureExtractor, IdentityExtractor, LossReport, LossVars, RandomConvExtractor,
    PERCEPTUAL_SEED,
};
use crate::nn::{Checkpoint, Graph, ParamTree, Tensor};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Adversarial,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Adversarial => "adversarial",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "adversarial" => Ok(Stage::Adversarial),
            other => Err(Error::Checkpoint(format!("unknown stage {other:?}"))),
        }
    }
}

const GENERATOR_PREFIX: &str = "generator.";

/// A discriminator together with its optimizer.
#[derive(Clone, Debug)]
struct DiscSlot {
    net: Discriminator,
    opt: Adam,
}

impl DiscSlot {
    fn fresh(cfg: &TrainConfig, prefix: &str) -> Result<Self> {
        let net = Discriminator::new(&cfg.disc, prefix, seed::derive(cfg.seed, prefix))?;
        let opt = Adam::new(net.params());
        Ok(DiscSlot { net, opt })
    }

    /// One discriminator update on constant inputs. Returns the updated
    /// copy and the loss measured before the update.
    fn updated(
        &self,
        real: &Tensor,
        fake: &Tensor,
        cfg: &TrainConfig,
        lr: f64,
    ) -> Result<(DiscSlot, f64)> {
        let mut g = Graph::new();
        let r = g.input(real.clone());
        let f = g.input(fake.clone());
        let real_logits = self.net.forward(&mut g, true, r)?;
        let fake_logits = self.net.forward(&mut g, true, f)?;
        let loss = gan_d_loss(&mut g, real_logits, fake_logits, cfg.gan_mode)?;
        let value = g.scalar(loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} loss is {value}",
                self.net.prefix()
            )));
        }
        g.backward(loss)?;
        let mut grads = g.param_grads();
        clip_and_check(&mut grads, cfg.clip_grad_norm, self.net.prefix())?;
        let mut next = self.clone();
        next.opt.update(next.net.params_mut(), &grads, lr)?;
        Ok((next, value))
    }
}

fn clip_and_check(grads: &mut ParamTree, clip: Option<f64>, what: &str) -> Result<()> {
    let norm = match clip {
        Some(c) => clip_global_norm(grads, c),
        None => grads.iter().map(|(_, t)| t.sq_norm()).sum::<f64>().sqrt(),
    };
    if norm.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} gradient norm is {norm}")))
    }
}

fn make_extractor(kind: PerceptualKind, channels: usize) -> Result<Box<dyn FeatureExtractor>> {
    Ok(match kind {
        PerceptualKind::Random => Box::new(RandomConvExtractor::new(channels, PERCEPTUAL_SEED)?),
        PerceptualKind::Identity => Box::new(IdentityExtractor),
    })
}

/// Holds the generator, both discriminators and every optimizer, and runs
/// single training steps. A step that hits a non-finite value returns
/// [`Error::NonFinite`] and leaves all state untouched.
pub struct Trainer {
    cfg: TrainConfig,
    generator: Generator,
    opt_g: Adam,
    /// Present during the adversarial stage only.
    discs: Option<(DiscSlot, DiscSlot)>,
    extractor: Box<dyn FeatureExtractor>,
    stage: Stage,
    step: u64,
}

impl fmt::Debug for Trainer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Trainer")
            .field("stage", &self.stage)
            .field("step", &self.step)
            .finish_non_exhaustive()
    }
}

impl Trainer {
    /// A trainer at pretraining step 0 with freshly initialized weights.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let generator = build_generator(&cfg.generator, seed::derive(cfg.seed, "generator"))?;
        Trainer::with_generator(cfg, generator)
    }

    /// A trainer at pretraining step 0 around an existing generator.
    pub fn with_generator(cfg: &TrainConfig, generator: Generator) -> Result<Self> {
        cfg.validate()?;
        if generator.config() != &cfg.generator {
            return Err(Error::Checkpoint(
                "generator architecture does not match the run configuration".into(),
            ));
        }
        let opt_g = Adam::new(generator.params());
        Ok(Trainer {
            extractor: make_extractor(cfg.perceptual, cfg.generator.in_channels)?,
            cfg: cfg.clone(),
            generator,
            opt_g,
            discs: None,
            stage: Stage::Pretrain,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// Steps completed in the current stage.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn image_discriminator(&self) -> Option<&Discriminator> {
        self.discs.as_ref().map(|(d, _)| &d.net)
    }

    pub fn gradient_discriminator(&self) -> Option<&Discriminator> {
        self.discs.as_ref().map(|(_, d)| &d.net)
    }

    /// Enters the adversarial stage: fresh discriminators, a fresh
    /// generator optimizer and the step counter back at 0.
    pub fn begin_adversarial(&mut self) -> Result<()> {
        self.discs = Some((
            DiscSlot::fresh(&self.cfg, IMAGE_PREFIX)?,
            DiscSlot::fresh(&self.cfg, GRADIENT_PREFIX)?,
        ));
        self.opt_g = Adam::new(self.generator.params());
        self.stage = Stage::Adversarial;
        self.step = 0;
        Ok(())
    }

    /// Runs one step of the current stage.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        match self.stage {
            Stage::Pretrain => self.pretrain_step(batch),
            Stage::Adversarial => self.adversarial_step(batch),
        }
    }

    fn pretrain_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let w = self.cfg.pretrain_weights();
        let mut g = Graph::new();
        let lr = g.input(batch.lr.clone());
        let hr = g.input(batch.hr.clone());
        let out = self.generator.forward(&mut g, true, lr)?;
        let mut vars = LossVars {
            pix_img: Some(pixel_loss(&mut g, out.sr_image, hr)?),
            ..LossVars::default()
        };
        if let Some(sg) = out.sr_gradient {
            vars.pix_gb = Some(gradient_branch_loss(&mut g, sg, hr)?);
        }
        let report = LossReport::new(self.step + 1, &vars.values(&g)?, &w, 0.0, 0.0)?;
        let total = weighted_total(&mut g, &vars, &w)?;
        g.backward(total)?;
        let mut grads = g.param_grads();
        clip_and_check(&mut grads, self.cfg.clip_grad_norm, "generator")?;
        self.opt_g.update(
            self.generator.params_mut(),
            &grads,
            self.cfg.pretrain_lr_at(self.step),
        )?;
        self.step += 1;
        Ok(report)
    }

    /// Generator forward, one update of each discriminator, then the
    /// generator update against the refreshed discriminators.
    fn adversarial_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let (d_img, d_gm) = self
            .discs
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("adversarial stage has not started".into()))?;
        let rate = self.cfg.schedule.lr_at(self.step);
        let use_gl = self.cfg.ablation.use_gradient_loss();
        let w = self.cfg.effective_weights();
        let mode = self.cfg.gan_mode;

        let mut g = Graph::new();
        let lr = g.input(batch.lr.clone());
        let hr = g.input(batch.hr.clone());
        let out = self.generator.forward(&mut g, true, lr)?;
        let sr = out.sr_image;

        let (d_img, dis_img) = d_img.updated(&batch.hr, g.value(sr), &self.cfg, rate)?;
        let maps = if use_gl {
            Some((
                g.gradient_magnitude(sr, DEFAULT_EPSILON)?,
                g.gradient_magnitude(hr, DEFAULT_EPSILON)?,
            ))
        } else {
            None
        };
        let (d_gm, dis_gm) = match maps {
            Some((ms, mh)) => {
                let mh_value = g.value(mh).clone();
                d_gm.updated(&mh_value, g.value(ms), &self.cfg, rate)?
            }
            None => (d_gm.clone(), 0.0),
        };

        let mut vars = LossVars {
            pix_img: Some(pixel_loss(&mut g, sr, hr)?),
            perceptual: Some(perceptual_loss(&mut g, sr, hr, self.extractor.as_ref())?),
            ..LossVars::default()
        };
        let fake = d_img.net.forward(&mut g, false, sr)?;
        let real = d_img.net.forward(&mut g, false, hr)?;
        vars.adv_img = Some(gan_g_loss(&mut g, real, fake, mode)?);
        if let Some((ms, mh)) = maps {
            vars.pix_gm = Some(pixel_loss(&mut g, ms, mh)?);
            let fake = d_gm.net.forward(&mut g, false, ms)?;
            let real = d_gm.net.forward(&mut g, false, mh)?;
            vars.adv_gm = Some(gan_g_loss(&mut g, real, fake, mode)?);
        }
        if let Some(sg) = out.sr_gradient {
            vars.pix_gb = Some(gradient_branch_loss(&mut g, sg, hr)?);
        }
        let report = LossReport::new(self.step + 1, &vars.values(&g)?, &w, dis_img, dis_gm)?;
        let total = weighted_total(&mut g, &vars, &w)?;
        g.backward(total)?;
        let mut grads = g.param_grads();
        clip_and_check(&mut grads, self.cfg.clip_grad_norm, "generator")?;

        self.opt_g
            .update(self.generator.params_mut(), &grads, rate)?;
        self.discs = Some((d_img, d_gm));
        self.step += 1;
        Ok(report)
    }

    /// Full training state. `extra` is merged into the metadata.
    pub fn to_checkpoint(&self, sampler: SamplerState, extra: &KvMap) -> Checkpoint {
        let mut metadata = KvMap::new();
        self.cfg.write_kv(&mut metadata);
        metadata.extend(extra);
        metadata.set("state.stage", self.stage);
        metadata.set("state.sampler_word_pos", sampler.word_pos);
        metadata.set("state.adam_g_step", self.opt_g.step_count());

        let mut tensors = ParamTree::new();
        tensors.merge_prefixed(GENERATOR_PREFIX, self.generator.params());
        tensors.merge_prefixed("adam.g.", &self.opt_g.moments());
        if let Some((d_img, d_gm)) = &self.discs {
            for (tag, slot) in [("img", d_img), ("gm", d_gm)] {
                tensors.merge_prefixed("", slot.net.params());
                tensors.merge_prefixed(&format!("adam.d_{tag}."), &slot.opt.moments());
                metadata.set(format!("state.adam_d_{tag}_step"), slot.opt.step_count());
            }
        }
        Checkpoint {
            step: self.step,
            metadata,
            tensors,
        }
    }

    /// Restores a trainer and the sampler position from a checkpoint
    /// written by [`Trainer::to_checkpoint`]. `cfg` must describe the same
    /// architecture; the other settings (step counts, intervals) may differ.
    pub fn from_checkpoint(cfg: &TrainConfig, ckpt: &Checkpoint) -> Result<(Self, SamplerState)> {
        let stored = TrainConfig::from_kv(&ckpt.metadata)?;
        check_same_architecture(cfg, &stored)?;
        let m = &ckpt.metadata;
        let required = |key: &str| {
            m.get(key)
                .ok_or_else(|| Error::Checkpoint(format!("metadata key {key} is missing")))
        };
        let stage: Stage = required("state.stage")?.parse()?;
        let word_pos: u128 = parse_meta(m, "state.sampler_word_pos")?;

        let gen_params = ckpt.tensors.strip_prefix(GENERATOR_PREFIX);
        let generator = Generator::from_params(&cfg.generator, gen_params)?;
        let mut trainer = Trainer::with_generator(cfg, generator)?;
        trainer.opt_g = Adam::from_moments(
            trainer.generator.params(),
            &ckpt.tensors.strip_prefix("adam.g."),
            parse_meta(m, "state.adam_g_step")?,
        )?;
        trainer.stage = stage;
        trainer.step = ckpt.step;
        if stage == Stage::Adversarial {
            let mut slots = Vec::with_capacity(2);
            for (tag, prefix) in [("img", IMAGE_PREFIX), ("gm", GRADIENT_PREFIX)] {
                let params = ckpt.tensors.with_prefix(&format!("{prefix}."));
                let net = Discriminator::from_params(&cfg.disc, prefix, params)?;
                let opt = Adam::from_moments(
                    net.params(),
                    &ckpt.tensors.strip_prefix(&format!("adam.d_{tag}.")),
                    parse_meta(m, &format!("state.adam_d_{tag}_step"))?,
                )?;
                slots.push(DiscSlot { net, opt });
            }
            let d_gm = slots.pop().expect("two slots");
            let d_img = slots.pop().expect("two slots");
            trainer.discs = Some((d_img, d_gm));
        }
        Ok((trainer, SamplerState { word_pos }))
    }
}

fn parse_meta<T: FromStr>(m: &KvMap, key: &str) -> Result<T> {
    let raw = m
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("metadata key {key} is missing")))?;
    raw.parse()
        .map_err(|_| Error::Checkpoint(format!("metadata key {key} has bad value {raw:?}")))
}

fn check_same_architecture(a: &TrainConfig, b: &TrainConfig) -> Result<()> {
    let mismatch = |what: &str| {
        Err(Error::Checkpoint(format!(
            "checkpoint {what} differs from the run configuration"
        )))
    };
    if a.generator != b.generator {
        return mismatch("generator architecture");
    }
    if a.disc != b.disc {
        return mismatch("discriminator architecture");
    }
    if a.ablation != b.ablation {
        return mismatch("ablation");
    }
    Ok(())
}

/// Reads the generator out of any checkpoint written by the trainer.
pub(crate) fn generator_from_checkpoint(ckpt: &Checkpoint) -> Result<Generator> {
    let cfg = GeneratorConfig::from_kv(&ckpt.metadata, "model.")?;
    Generator::from_params(&cfg, ckpt.tensors.strip_prefix(GENERATOR_PREFIX))
}
