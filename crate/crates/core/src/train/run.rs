//! The run driver: stages, logs, checkpoints, resume and sample grids on
//! disk, around a [`Trainer`].

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::trainer::{generator_from_checkpoint, Stage, Trainer};
use super::TrainConfig;
use crate::arch::{ForwardOptions, Generator};
use crate::data::{Batch, PairSampler, PairSamplerConfig};
use crate::error::{Error, Result};
use crate::gradops::{bicubic_resample, extract_gradient, save_image, Scale, DEFAULT_EPSILON};
use crate::kv::KvMap;
use crate::losses::LossReport;
use crate::metrics::emit_grid;
use crate::nn::Checkpoint;

pub const PRETRAIN_LOG: &str = "pretrain_log.jsonl";
pub const LOSS_LOG: &str = "loss_log.jsonl";
pub const LATEST_CHECKPOINT: &str = "latest.spsr";
pub const PRETRAIN_CHECKPOINT: &str = "pretrain.spsr";
pub const CONFIG_FILE: &str = "config.txt";

/// What to run and where.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub train: TrainConfig,
    /// Its seed is replaced by `train.seed`.
    pub data: PairSamplerConfig,
    /// Stop after pretraining.
    pub pretrain_only: bool,
    /// Start the adversarial stage from this checkpoint's generator instead
    /// of pretraining.
    pub init: Option<PathBuf>,
    /// Continue from `latest.spsr` in `out_dir`.
    pub resume: bool,
    /// Extra keys echoed into `config.txt`.
    pub echo: KvMap,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub stage: Stage,
    pub step: u64,
    pub last_report: Option<LossReport>,
    pub checkpoint: PathBuf,
}

/// The full resolved configuration of a run, as written to `config.txt`.
pub fn resolved_config(opts: &RunOptions) -> KvMap {
    let mut map = opts.echo.clone();
    opts.train.write_kv(&mut map);
    opts.data.write_kv(&mut map, "data.");
    map
}

/// Loads the generator stored in any training checkpoint.
pub fn load_generator(path: &Path) -> Result<Generator> {
    generator_from_checkpoint(&Checkpoint::load(path)?)
}

fn log_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Pretrain => PRETRAIN_LOG,
        Stage::Adversarial => LOSS_LOG,
    }
}

fn stage_steps(cfg: &TrainConfig, stage: Stage) -> u64 {
    match stage {
        Stage::Pretrain => cfg.pretrain_steps,
        Stage::Adversarial => cfg.total_steps,
    }
}

struct Run<'a> {
    opts: &'a RunOptions,
    trainer: Trainer,
    sampler: PairSampler,
    last: Option<LossReport>,
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.opts.out_dir.join(name)
    }

    fn checkpoint(&self) -> Checkpoint {
        let mut extra = KvMap::new();
        self.opts.data.write_kv(&mut extra, "data.");
        self.trainer.to_checkpoint(self.sampler.state(), &extra)
    }

    /// Writes the numbered checkpoint and refreshes `latest.spsr`.
    fn save(&self) -> Result<PathBuf> {
        let ckpt = self.checkpoint();
        let name = format!(
            "ckpt_{}_{:06}.spsr",
            self.trainer.stage(),
            self.trainer.step()
        );
        let path = self.path(&name);
        ckpt.save(&path)?;
        ckpt.save(self.path(LATEST_CHECKPOINT))?;
        Ok(path)
    }

    fn append_log(&self, report: &LossReport) -> Result<()> {
        let path = self.path(log_name(self.trainer.stage()));
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        f.write_all(report.to_json_line().as_bytes())
            .map_err(|e| Error::io(&path, e))
    }

    fn dump_batch(&self, batch: &Batch) -> Result<PathBuf> {
        let dir = self.path(&format!(
            "nonfinite_{}_{:06}",
            self.trainer.stage(),
            self.trainer.step() + 1
        ));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut listing = String::new();
        let lrs = batch.lr.to_images()?;
        let hrs = batch.hr.to_images()?;
        for (i, ((lr, hr), c)) in lrs.iter().zip(&hrs).zip(&batch.crops).enumerate() {
            save_image(&lr.clamped(), dir.join(format!("lr_{i}.png")))?;
            save_image(&hr.clamped(), dir.join(format!("hr_{i}.png")))?;
            let name = self
                .sampler
                .image_names()
                .get(c.image)
                .map_or_else(String::new, |p| p.display().to_string());
            listing.push_str(&format!(
                "{i}: {name} top={} left={} dihedral={}\n",
                c.top, c.left, c.dihedral
            ));
        }
        let list_path = dir.join("crops.txt");
        fs::write(&list_path, listing).map_err(|e| Error::io(&list_path, e))?;
        Ok(dir)
    }

    /// `[bicubic, SR, HR, gradient map]` for a centre crop of the first
    /// training image.
    fn write_sample(&self) -> Result<()> {
        let img = &self.sampler.images()[0];
        let side = self.opts.data.hr_patch();
        let hr = img.crop(
            (img.height() - side) / 2,
            (img.width() - side) / 2,
            side,
            side,
        )?;
        let lr = bicubic_resample(&hr, Scale::DOWN4)?;
        let bicubic = bicubic_resample(&lr, Scale::UP4)?;
        let (sr, grad) = self
            .trainer
            .generator()
            .infer(&lr, ForwardOptions::default())?;
        let grad = match grad {
            Some(g) => g.min_max_normalized(),
            None => extract_gradient(&sr, DEFAULT_EPSILON)?.normalized_for_display(),
        };
        let dir = self.path("samples");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!(
            "{}_{:06}.png",
            self.trainer.stage(),
            self.trainer.step()
        ));
        emit_grid(
            &[bicubic, sr, hr, grad],
            &["BICUBIC", "SR", "HR", "GRAD"],
            &path,
        )
    }

    fn run_stage(&mut self) -> Result<()> {
        let cfg = self.trainer.config().clone();
        let target = stage_steps(&cfg, self.trainer.stage());
        let stage = self.trainer.stage();
        if self.trainer.step() == 0 {
            self.save()?;
        }
        while self.trainer.step() < target {
            let batch = self.sampler.next_batch()?;
            let report = match self.trainer.train_step(&batch) {
                Ok(r) => r,
                Err(e @ Error::NonFinite(_)) => {
                    let dir = self.dump_batch(&batch)?;
                    log::error!("{e}; offending batch written to {}", dir.display());
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            self.append_log(&report)?;
            let step = self.trainer.step();
            if step.is_multiple_of(50) || step == target {
                log::info!(
                    "{stage} step {step}/{target}: total_g {:.5} pix_img {:.5}",
                    report.total_g,
                    report.pix_img
                );
            }
            if step.is_multiple_of(cfg.checkpoint_interval) && step != target {
                self.save()?;
            }
            if cfg.sample_interval > 0 && step.is_multiple_of(cfg.sample_interval) {
                self.write_sample()?;
            }
            self.last = Some(report);
        }
        Ok(())
    }
}

/// Keeps log lines whose step is at most `step`, byte for byte.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let report = LossReport::parse_log(line)?;
        if report.iter().all(|r| r.step <= step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn remove_if_present(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Runs pretraining and/or adversarial training as described by `opts`,
/// writing everything into `opts.out_dir`.
pub fn run_training(opts: &RunOptions) -> Result<RunSummary> {
    let mut data = opts.data.clone();
    data.seed = opts.train.seed;
    let opts = &RunOptions {
        data,
        ..opts.clone()
    };
    opts.train.validate()?;
    if opts.data.hr_patch() != opts.train.disc.input_size {
        return Err(Error::Config(format!(
            "disc.input_size {} must equal the HR crop size {} (4 x data.lr_patch)",
            opts.train.disc.input_size,
            opts.data.hr_patch()
        )));
    }
    if opts.resume && opts.init.is_some() {
        return Err(Error::Config(
            "--resume and --init cannot be combined".into(),
        ));
    }
    let out = &opts.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_path = out.join(CONFIG_FILE);
    fs::write(&config_path, resolved_config(opts).render())
        .map_err(|e| Error::io(&config_path, e))?;

    let mut sampler = PairSampler::new(&opts.data)?;
    let trainer = if opts.resume {
        let latest = out.join(LATEST_CHECKPOINT);
        let ckpt = Checkpoint::load(&latest)?;
        let (trainer, state) = Trainer::from_checkpoint(&opts.train, &ckpt)?;
        sampler.restore(state);
        truncate_log(&out.join(log_name(trainer.stage())), trainer.step())?;
        if trainer.stage() == Stage::Pretrain {
            remove_if_present(&out.join(LOSS_LOG))?;
        }
        log::info!("resuming {} at step {}", trainer.stage(), trainer.step());
        trainer
    } else {
        for name in [PRETRAIN_LOG, LOSS_LOG] {
            remove_if_present(&out.join(name))?;
        }
        match &opts.init {
            Some(path) => {
                let generator = load_generator(path)?;
                let mut t = Trainer::with_generator(&opts.train, generator)?;
                t.begin_adversarial()?;
                t
            }
            None => Trainer::new(&opts.train)?,
        }
    };

    let mut run = Run {
        opts,
        trainer,
        sampler,
        last: None,
    };
    if run.trainer.stage() == Stage::Pretrain {
        run.run_stage()?;
        let path = run.save()?;
        run.checkpoint().save(out.join(PRETRAIN_CHECKPOINT))?;
        if opts.pretrain_only {
            return Ok(RunSummary {
                stage: Stage::Pretrain,
                step: run.trainer.step(),
                last_report: run.last,
                checkpoint: path,
            });
        }
        run.trainer.begin_adversarial()?;
    }
    if opts.pretrain_only {
        return Err(Error::Config("the run is already past pretraining".into()));
    }
    run.run_stage()?;
    let path = run.save()?;
    Ok(RunSummary {
        stage: Stage::Adversarial,
        step: run.trainer.step(),
        last_report: run.last,
        checkpoint: path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::GeneratorConfig;
    use crate::data::{synth_dataset, SynthKind};
    use crate::disc::DiscConfig;

    fn options(dir: &Path, data_dir: &Path) -> RunOptions {
        RunOptions {
            out_dir: dir.to_path_buf(),
            train: TrainConfig {
                generator: GeneratorConfig {
                    num_rrdb: 1,
                    base_channels: 4,
                    growth_channels: 4,
                    tap_indices: vec![1],
                    ..GeneratorConfig::default()
                },
                disc: DiscConfig {
                    base_channels: 4,
                    input_size: 32,
                    ..DiscConfig::default()
                },
                pretrain_steps: 3,
                total_steps: 4,
                checkpoint_interval: 2,
                sample_interval: 2,
                seed: 9,
                ..TrainConfig::default()
            },
            data: PairSamplerConfig {
                hr_dir: data_dir.to_path_buf(),
                lr_patch: 8,
                batch: 2,
                ..PairSamplerConfig::default()
            },
            pretrain_only: false,
            init: None,
            resume: false,
            echo: KvMap::new(),
        }
    }

    fn read(path: PathBuf) -> String {
        fs::read_to_string(path).unwrap()
    }

    #[test]
    fn full_run_writes_logs_checkpoints_and_samples() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        synth_dataset(SynthKind::Edges, 1, 40, 1, &data).unwrap();
        let out = tmp.path().join("run");
        let summary = run_training(&options(&out, &data)).unwrap();
        assert_eq!((summary.stage, summary.step), (Stage::Adversarial, 4));
        assert_eq!(
            LossReport::parse_log(&read(out.join(PRETRAIN_LOG)))
                .unwrap()
                .len(),
            3
        );
        assert_eq!(
            LossReport::parse_log(&read(out.join(LOSS_LOG)))
                .unwrap()
                .len(),
            4
        );
        for name in [
            PRETRAIN_CHECKPOINT,
            LATEST_CHECKPOINT,
            CONFIG_FILE,
            "ckpt_pretrain_000000.spsr",
            "ckpt_pretrain_000003.spsr",
            "ckpt_adversarial_000002.spsr",
            "ckpt_adversarial_000004.spsr",
            "samples/pretrain_000002.png",
            "samples/adversarial_000004.png",
        ] {
            assert!(out.join(name).exists(), "{name} missing");
        }
        let cfg = KvMap::parse(&read(out.join(CONFIG_FILE))).unwrap();
        assert_eq!(
            TrainConfig::from_kv(&cfg).unwrap(),
            options(&out, &data).train
        );
        assert_eq!(
            load_generator(&out.join(LATEST_CHECKPOINT))
                .unwrap()
                .config()
                .num_rrdb,
            1
        );
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        synth_dataset(SynthKind::Checker, 2, 40, 2, &data).unwrap();

        let a = tmp.path().join("a");
        run_training(&options(&a, &data)).unwrap();

        // stop in the middle of adversarial training, then resume
        let b = tmp.path().join("b");
        let mut short = options(&b, &data);
        short.train.total_steps = 2;
        run_training(&short).unwrap();
        let mut resumed = options(&b, &data);
        resumed.resume = true;
        run_training(&resumed).unwrap();

        assert_eq!(read(a.join(PRETRAIN_LOG)), read(b.join(PRETRAIN_LOG)));
        assert_eq!(read(a.join(LOSS_LOG)), read(b.join(LOSS_LOG)));
    }

    #[test]
    fn resume_discards_records_past_the_checkpoint() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        synth_dataset(SynthKind::Edges, 1, 40, 3, &data).unwrap();
        let out = tmp.path().join("run");
        let opts = options(&out, &data);
        run_training(&opts).unwrap();
        let reference = read(out.join(LOSS_LOG));

        // pretend the run died after step 3 with checkpoint 2 as latest
        fs::copy(
            out.join("ckpt_adversarial_000002.spsr"),
            out.join(LATEST_CHECKPOINT),
        )
        .unwrap();
        let mut resumed = opts.clone();
        resumed.resume = true;
        run_training(&resumed).unwrap();
        assert_eq!(read(out.join(LOSS_LOG)), reference);
    }

    #[test]
    fn zero_steps_write_the_initialization() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        synth_dataset(SynthKind::Ramps, 1, 40, 4, &data).unwrap();
        let out = tmp.path().join("run");
        let mut opts = options(&out, &data);
        opts.train.pretrain_steps = 0;
        opts.train.total_steps = 0;
        run_training(&opts).unwrap();
        let g = load_generator(&out.join(PRETRAIN_CHECKPOINT)).unwrap();
        let fresh = Trainer::new(&opts.train).unwrap();
        assert_eq!(g.params(), fresh.generator().params());
    }

    #[test]
    fn disc_size_must_follow_the_crop() {
        let tmp = tempfile::tempdir().unwrap();
        let mut opts = options(tmp.path(), tmp.path());
        opts.data.lr_patch = 16;
        assert!(matches!(run_training(&opts), Err(Error::Config(_))));
    }
}
