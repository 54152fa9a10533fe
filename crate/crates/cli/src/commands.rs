use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use spsr_core::arch::ForwardOptions;
use spsr_core::data::{list_pngs, synth_dataset};
use spsr_core::gradops::{bicubic_resample, load_image, save_image, Scale};
use spsr_core::losses::LossReport;
use spsr_core::metrics::{plot_series, score_pair, EvalConvention, EvalReport, PsnrChannels};
use spsr_core::train::{load_generator, run_training, RunOptions, LOSS_LOG, PRETRAIN_LOG};
use spsr_core::{extract_gradient, Error, Result, DEFAULT_EPSILON};

use crate::config::{absolute, ConfigSources, RunConfig};
use crate::{Command, RunArgs};

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthData {
            kind,
            count,
            size,
            seed,
            out,
            lr_out,
        } => {
            let paths = synth_dataset(kind, count, size, seed, &out)?;
            if let Some(dir) = lr_out {
                create_dir(&dir)?;
                for p in &paths {
                    let lr = bicubic_resample(&load_image(p)?, Scale::DOWN4)?;
                    save_image(&lr.clamped(), dir.join(file_name(p)))?;
                }
            }
            log::info!("wrote {} {kind} images to {}", paths.len(), out.display());
            Ok(())
        }
        Command::Pretrain { run } => train(&run, None, None, true),
        Command::Train {
            run,
            init,
            ablation,
        } => train(&run, init, ablation, false),
        Command::Infer {
            checkpoint,
            input,
            output,
            zero_grad_features,
            bicubic,
        } => infer(
            checkpoint.as_deref(),
            &input,
            &output,
            zero_grad_features,
            bicubic,
        ),
        Command::ExtractGrad { input, output } => extract_grad(&input, &output),
        Command::Eval {
            sr,
            hr,
            border,
            y_channel,
            out,
        } => eval(&sr, &hr, border, y_channel, out.as_deref()),
        Command::Report { run } => report(&run),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::InvalidArgument(format!("cannot create {}: {e}", dir.display())))
}

fn file_name(p: &Path) -> PathBuf {
    PathBuf::from(p.file_name().expect("listed files have names"))
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn train(
    args: &RunArgs,
    init: Option<PathBuf>,
    ablation: Option<spsr_core::train::Ablation>,
    pretrain_only: bool,
) -> Result<()> {
    let data_dir = absolute(&args.data)?;
    let mut cfg = RunConfig::resolve(&ConfigSources {
        file: args.config.as_deref(),
        sets: &args.sets,
        data_dir: Some(&data_dir),
        seed: args.seed,
        ablation,
    })?;
    if let Some(steps) = args.steps {
        if pretrain_only {
            cfg.train.pretrain_steps = steps;
        } else {
            cfg.train.total_steps = steps;
            // zero steps means "write the initialization and stop"
            if steps == 0 {
                cfg.train.pretrain_steps = 0;
            }
        }
    }
    let opts = RunOptions {
        out_dir: args.out.clone(),
        train: cfg.train,
        data: cfg.data,
        pretrain_only,
        init,
        resume: args.resume,
        echo: cfg.raw,
    };
    let summary = run_training(&opts)?;
    log::info!(
        "{} finished at step {}; checkpoint {}",
        summary.stage,
        summary.step,
        summary.checkpoint.display()
    );
    Ok(())
}

/// Runs `f` on every PNG in `input`, reporting failures and carrying on.
fn for_each_png(input: &Path, mut f: impl FnMut(&Path) -> Result<()>) -> Result<()> {
    let paths = list_pngs(input)?;
    if paths.is_empty() {
        return Err(Error::Dataset(format!(
            "no PNG files in {}",
            input.display()
        )));
    }
    let mut failed = 0;
    for p in &paths {
        if let Err(e) = f(p) {
            eprintln!("{}: {e}", p.display());
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::Dataset(format!(
            "{failed} of {} files failed",
            paths.len()
        )));
    }
    Ok(())
}

fn infer(
    checkpoint: Option<&Path>,
    input: &Path,
    output: &Path,
    zero: bool,
    bicubic: bool,
) -> Result<()> {
    let generator = match checkpoint {
        Some(c) if !bicubic => Some(load_generator(c)?),
        _ => None,
    };
    let mut opts = ForwardOptions::default();
    if let Some(g) = &generator {
        if zero && !g.config().use_gradient_branch {
            log::warn!("checkpoint has no gradient branch; --zero-grad-features ignored");
        } else {
            opts.zero_gradient_features = zero || !g.config().fuse_gradient_features;
        }
    }
    create_dir(output)?;
    for_each_png(input, |p| {
        let lr = load_image(p)?;
        let name = stem(p);
        match &generator {
            None => save_image(
                &bicubic_resample(&lr, Scale::UP4)?.clamped(),
                output.join(format!("{name}.png")),
            ),
            Some(g) => {
                let lr = if g.config().in_channels == 3 {
                    lr.to_rgb()
                } else {
                    lr
                };
                let (sr, grad) = g.infer(&lr, opts)?;
                save_image(&sr.clamped(), output.join(format!("{name}.png")))?;
                if let Some(grad) = grad {
                    save_image(
                        &grad.min_max_normalized(),
                        output.join(format!("{name}_grad.png")),
                    )?;
                }
                Ok(())
            }
        }
    })
}

fn extract_grad(input: &Path, output: &Path) -> Result<()> {
    create_dir(output)?;
    for_each_png(input, |p| {
        let map = extract_gradient(&load_image(p)?, DEFAULT_EPSILON)?;
        save_image(&map.normalized_for_display(), output.join(file_name(p)))
    })
}

fn eval(sr_dir: &Path, hr_dir: &Path, border: usize, y: bool, out: Option<&Path>) -> Result<()> {
    let by_name = |dir: &Path| -> Result<BTreeMap<PathBuf, PathBuf>> {
        Ok(list_pngs(dir)?
            .into_iter()
            .map(|p| (file_name(&p), p))
            .collect())
    };
    let srs = by_name(sr_dir)?;
    let hrs = by_name(hr_dir)?;
    for name in srs.keys().filter(|n| !hrs.contains_key(*n)) {
        eprintln!("unpaired: {} (no HR counterpart)", name.display());
    }
    for name in hrs.keys().filter(|n| !srs.contains_key(*n)) {
        eprintln!("unpaired: {} (no SR counterpart)", name.display());
    }
    let conv = EvalConvention {
        border,
        psnr_channels: if y {
            PsnrChannels::Y
        } else {
            PsnrChannels::Rgb
        },
    };
    let mut scores = Vec::new();
    for (name, sr_path) in &srs {
        let Some(hr_path) = hrs.get(name) else {
            continue;
        };
        let scored = load_image(sr_path).and_then(|sr| {
            let hr = load_image(hr_path)?;
            score_pair(
                &name.display().to_string(),
                &sr.to_rgb(),
                &hr.to_rgb(),
                &conv,
            )
        });
        match scored {
            Ok(s) => scores.push(s),
            Err(e) => eprintln!("{}: {e}", name.display()),
        }
    }
    if scores.is_empty() {
        return Err(Error::Dataset("no image pairs could be evaluated".into()));
    }
    let report = EvalReport::new(conv, scores)?;
    print!("{}", report.to_table());
    if let Some(path) = out {
        fs::write(path, report.to_jsonl())
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn read_log(path: &Path) -> Result<Vec<LossReport>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    LossReport::parse_log(&text)
}

type Term = (&'static str, fn(&LossReport) -> f64);

const PRETRAIN_TERMS: &[Term] = &[
    ("pix_img", |r| r.pix_img),
    ("pix_gb", |r| r.pix_gb),
    ("total_g", |r| r.total_g),
];

const ADVERSARIAL_TERMS: &[Term] = &[
    ("pix_img", |r| r.pix_img),
    ("perceptual", |r| r.perceptual),
    ("adv_img", |r| r.adv_img),
    ("pix_gm", |r| r.pix_gm),
    ("adv_gm", |r| r.adv_gm),
    ("pix_gb", |r| r.pix_gb),
    ("total_g", |r| r.total_g),
    ("dis_img", |r| r.dis_img),
    ("dis_gm", |r| r.dis_gm),
];

fn report(run: &Path) -> Result<()> {
    let mut summary = String::new();
    let mut any = false;
    for (log_file, terms, png) in [
        (PRETRAIN_LOG, PRETRAIN_TERMS, "report_pretrain.png"),
        (LOSS_LOG, ADVERSARIAL_TERMS, "report_loss.png"),
    ] {
        let records = read_log(&run.join(log_file))?;
        if records.is_empty() {
            continue;
        }
        any = true;
        let columns: Vec<(&str, Vec<f64>)> = terms
            .iter()
            .map(|(name, f)| (*name, records.iter().map(f).collect()))
            .collect();
        let series: Vec<(&str, &[f64])> = columns.iter().map(|(n, v)| (*n, v.as_slice())).collect();
        save_image(&plot_series(&series, 480, 60)?, run.join(png))?;

        let _ = writeln!(summary, "{log_file}: {} steps", records.len());
        let _ = writeln!(
            summary,
            "  {:<11} {:>12} {:>12} {:>12}",
            "term", "first", "last", "min"
        );
        for (name, values) in &columns {
            let min = values.iter().copied().fold(f64::INFINITY, f64::min);
            let _ = writeln!(
                summary,
                "  {:<11} {:>12.6} {:>12.6} {:>12.6}",
                name,
                values[0],
                values[values.len() - 1],
                min
            );
        }
    }
    if !any {
        return Err(Error::Dataset(format!("no loss logs in {}", run.display())));
    }
    print!("{summary}");
    let path = run.join("report.txt");
    fs::write(&path, summary)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}
