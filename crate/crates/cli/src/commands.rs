use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use mixres_core::checkpoint;
use mixres_core::data::{self, DatasetSplit, SplitName, IMAGE_BYTES, IMAGE_SIDE, TEST_FILE, TRAIN_FILES};
use mixres_core::gradcheck::{self, GradcheckConfig};
use mixres_core::model::ResNetConfig;
use mixres_core::sweep::{self, SweepSpec, TrainObjective};
use mixres_core::trainer::{self, EpochMetrics, FitOptions, TrainConfig};
use mixres_core::Error;

use crate::args::{
    CompareCmd, DataArgs, EvalCmd, GradcheckCmd, Precision, PreviewCmd, Split, SweepCmd, TrainArgs, TrainCmd,
};

pub const EXIT_CHECK: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;

pub const CONFIG_FILE: &str = "config.toml";
pub const SWEEP_FILE: &str = "sweep.toml";

/// A message and the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Usage(_) | Error::Validation(_) | Error::Dimension(_) => EXIT_USAGE,
            Error::Io { .. } | Error::Format { .. } | Error::DegenerateData(_) => EXIT_DATA,
            Error::Checkpoint(_) => EXIT_CHECKPOINT,
            Error::NonFiniteLoss { .. } | Error::Serialization(_) => EXIT_CHECK,
        };
        Self::new(code, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn config_error(message: impl Into<String>) -> Failure {
    Failure::new(EXIT_USAGE, message)
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::from(Error::io(path, e)))
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::from(Error::io(dir, e)))
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(value).map_err(|e| Failure::new(EXIT_CHECK, e.to_string()))
}

pub fn train_config_toml(config: &TrainConfig) -> Result<String, Failure> {
    toml::to_string(config).map_err(|e| Failure::new(EXIT_CHECK, format!("cannot serialize config: {e}")))
}

/// Defaults, then the config file, then flags. The schedule length follows
/// the epoch count unless set explicitly.
pub fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig, Failure> {
    let (mut c, file_t_max) = match &args.config {
        Some(path) => {
            let text = read_text(path)?;
            let table: toml::Table = text
                .parse()
                .map_err(|e: toml::de::Error| config_error(format!("{}: {}", path.display(), e.message())))?;
            let has_t_max = table.contains_key("t_max");
            let c: TrainConfig = toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| config_error(format!("{}: {}", path.display(), e.message())))?;
            (c, has_t_max)
        }
        None => (TrainConfig::default(), false),
    };
    if let Some(arch) = args.arch {
        c.model = ResNetConfig::preset(arch.name())?;
    }
    if let Some(w) = args.width {
        c.model.base_width = w;
    }
    if let Some(v) = args.epochs {
        c.epochs = v;
    }
    if let Some(v) = args.lr {
        c.lr = v;
    }
    if let Some(v) = args.batch_size {
        c.batch_size = v;
    }
    match args.t_max {
        Some(v) => c.t_max = v,
        None if !file_t_max => c.t_max = c.epochs,
        None => {}
    }
    if let Some(v) = args.eta_min {
        c.eta_min = v;
    }
    if let Some(v) = args.momentum {
        c.momentum = v;
    }
    if let Some(v) = args.weight_decay {
        c.weight_decay = v;
    }
    if let Some(v) = args.alpha {
        c.mixup.alpha = v;
    }
    if args.no_mixup {
        c.mixup.enabled = false;
    }
    if let Some(v) = args.seed {
        c.seed = v;
    }
    if let Some(v) = &args.loss_reduction {
        c.loss_reduction = v.parse()?;
    }
    if let Some(v) = args.crop_pad {
        c.crop_pad = v;
    }
    if let Some(v) = args.flip_prob {
        c.flip_prob = v;
    }
    if let Some(v) = args.eval_every {
        c.eval_every = v;
    }
    c.validate()?;
    Ok(c)
}

fn data_dir(explicit: &Option<PathBuf>) -> Result<PathBuf, Failure> {
    explicit.clone().or_else(data::data_dir_from_env).ok_or_else(|| {
        Failure::new(
            EXIT_DATA,
            format!("no dataset directory: pass --data-dir or set {}", data::DATA_DIR_ENV),
        )
    })
}

/// Raw `[0, 1]` train and test splits, cut down to the requested subsets.
pub fn load_data(args: &DataArgs) -> Result<(DatasetSplit, DatasetSplit), Failure> {
    for (flag, v) in [("--subset", args.subset), ("--test-subset", args.test_subset)] {
        if v == Some(0) {
            return Err(config_error(format!("{flag} must be at least 1")));
        }
    }
    let dir = data_dir(&args.data_dir)?;
    let (mut train, mut test) = data::load_cifar10_binary(&dir)?;
    if let Some(n) = args.subset {
        train = train.take(n)?;
    }
    if let Some(n) = args.test_subset.or(args.subset) {
        test = test.take(n)?;
    }
    Ok((train, test))
}

fn progress(total: usize) -> impl FnMut(&EpochMetrics) {
    move |m: &EpochMetrics| {
        let test = match (m.test_loss, m.test_error_pct) {
            (Some(l), Some(e)) => format!("  test_loss {l:.4}  error {e:.2}%"),
            _ => String::new(),
        };
        eprintln!(
            "epoch {}/{}  loss {:.4}{}  lr {:.6}  ({:.1}s)",
            m.epoch, total, m.train_loss, test, m.lr, m.wall_seconds
        );
    }
}

fn echo(config: &TrainConfig, json: bool) {
    let line = format!(
        "lr {}, batch {}, epochs {}, cosine T={}, eta_min {}, momentum {}, weight decay {}, mixup {} (alpha {}), model {:?} width {}",
        config.lr,
        config.batch_size,
        config.epochs,
        config.t_max,
        config.eta_min,
        config.momentum,
        config.weight_decay,
        if config.mixup.enabled { "on" } else { "off" },
        config.mixup.alpha,
        config.model.stage_blocks,
        config.model.base_width,
    );
    if json {
        eprintln!("{line}");
    } else {
        println!("{line}");
    }
}

pub fn train(cmd: &TrainCmd) -> Outcome {
    let config = resolve_train_config(&cmd.train)?;
    echo(&config, cmd.json);
    if cmd.dry_run {
        print!("{}", train_config_toml(&config)?);
        return Ok(());
    }
    let (train, test) = load_data(&cmd.data)?;
    create_dir(&cmd.out)?;
    write_text(&cmd.out.join(CONFIG_FILE), &train_config_toml(&config)?)?;
    let options = FitOptions {
        out_dir: Some(cmd.out.clone()),
        resume: cmd.resume,
    };
    let log = trainer::fit(&config, &train, &test, &options, progress(config.epochs))?;
    let summary = log
        .summary
        .ok_or_else(|| Failure::new(EXIT_CHECK, "run finished without an evaluated epoch"))?;
    if cmd.json {
        println!("{}", to_json(&summary)?);
    } else {
        println!(
            "final train_loss {:.4}  test_loss {:.4}  error {:.2}%  (best {:.2}% at epoch {})",
            summary.final_train_loss,
            summary.final_test_loss,
            summary.final_test_error_pct,
            summary.best_test_error_pct,
            summary.best_epoch
        );
        println!("outputs in {}", cmd.out.display());
    }
    Ok(())
}

pub fn eval(cmd: &EvalCmd) -> Outcome {
    let ckpt = checkpoint::load(&cmd.checkpoint)?;
    let expected = match (&cmd.config, cmd.arch) {
        (Some(_), _) => {
            let args = TrainArgs {
                config: cmd.config.clone(),
                arch: cmd.arch,
                ..TrainArgs::default()
            };
            Some(resolve_train_config(&args)?.model)
        }
        (None, Some(arch)) => Some(ResNetConfig::preset(arch.name())?),
        (None, None) => None,
    };
    if let Some(expected) = expected {
        if ckpt.model.config() != &expected {
            return Err(Failure::new(
                EXIT_CHECKPOINT,
                format!(
                    "checkpoint architecture {:?} does not match requested {:?}",
                    ckpt.model.config(),
                    expected
                ),
            ));
        }
    }
    let norm = ckpt
        .norm
        .ok_or_else(|| Failure::new(EXIT_CHECKPOINT, "checkpoint has no input normalization"))?;
    let dir = data_dir(&cmd.data.data_dir)?;
    let (labels, pixels) = data::read_batch_file(&dir.join(TEST_FILE))?;
    let mut test = DatasetSplit::from_bytes(labels, &pixels, SplitName::Test)?;
    if let Some(n) = cmd.data.test_subset.or(cmd.data.subset) {
        test = test.take(n)?;
    }
    let test = data::normalize(&test, &norm)?;
    let r = trainer::evaluate(&ckpt.model, &test, cmd.batch_size)?;
    if cmd.json {
        let value = serde_json::json!({
            "checkpoint": cmd.checkpoint,
            "test_loss": r.test_loss,
            "error_pct": r.error_pct,
            "correct": r.correct,
            "total": r.total,
        });
        println!("{}", to_json(&value)?);
    } else {
        println!("test_loss {:.4}", r.test_loss);
        println!("error {:.2}%", r.error_pct);
    }
    Ok(())
}

pub fn sweep(cmd: &SweepCmd) -> Outcome {
    let mut spec = SweepSpec::from_toml(&read_text(&cmd.spec)?)?;
    if let Some(seed) = cmd.seed {
        spec.seed = seed;
    }
    if cmd.sweep_on_test {
        spec.sweep_on_test = true;
    }
    if let Some(v) = cmd.validation_size {
        spec.validation_size = v;
    }
    if cmd.jobs == 0 {
        return Err(config_error("--jobs must be at least 1"));
    }
    let brackets = sweep::hyperband_brackets(spec.max_resource, spec.eta)?;
    let table = sweep::rung_table(&brackets);
    let out = |s: &str| {
        if cmd.json {
            eprint!("{s}");
        } else {
            print!("{s}");
        }
    };
    out(&format!(
        "hyperband R={} eta={}, {} epochs at most\n{table}",
        spec.max_resource,
        spec.eta,
        sweep::bracket_budget(&brackets)
    ));
    if cmd.dry_run {
        print!("{}", spec.to_toml()?);
        return Ok(());
    }

    let (train, test) = load_data(&cmd.data)?;
    if !spec.sweep_on_test && spec.validation_size >= train.len() {
        return Err(config_error(format!(
            "validation_size: {} held-out samples leave nothing to train on ({} training samples)",
            spec.validation_size,
            train.len()
        )));
    }
    let objective = TrainObjective::new(
        &train,
        &test,
        spec.validation_size,
        spec.sweep_on_test,
        spec.max_resource,
    )?;
    create_dir(&cmd.out)?;
    write_text(&cmd.out.join(SWEEP_FILE), &spec.to_toml()?)?;
    let result = sweep::hyperband(
        &spec.space,
        &spec.base,
        spec.max_resource,
        spec.eta,
        spec.seed,
        &objective,
        cmd.jobs,
        |bracket, rung, trials| {
            let r = bracket.rungs[rung];
            let best = trials.iter().filter_map(|t| t.metric).fold(f64::NEG_INFINITY, f64::max);
            eprintln!(
                "bracket {} rung {}: {} configs x {} epochs, best accuracy {:.4}",
                bracket.s, rung, r.n_configs, r.resource, best
            );
        },
    )?;
    let correlations = sweep::sweep_report(&cmd.out, &spec.space, &result)?;
    let failed = result
        .trials
        .iter()
        .filter(|t| t.status == sweep::TrialStatus::Failed)
        .count();
    let best = result.best_trial();
    if cmd.json {
        let best = best.map(|t| {
            serde_json::json!({
                "trial": t.trial_id,
                "metric": t.metric,
                "resource": t.resource,
                "values": t.values.iter().map(|(k, v)| (k.clone(), serde_json::to_value(v).unwrap_or_default())).collect::<serde_json::Map<_, _>>(),
            })
        });
        let value = serde_json::json!({
            "trials": result.trials.len(),
            "failed": failed,
            "best": best,
            "correlations": correlations,
        });
        println!("{}", to_json(&value)?);
    } else {
        println!(
            "{} trials ({} failed), reports in {}",
            result.trials.len(),
            failed,
            cmd.out.display()
        );
        match best {
            Some(t) => {
                let values: Vec<String> = t.values.iter().map(|(k, v)| format!("{k}={v}")).collect();
                println!(
                    "best trial {}: accuracy {:.4} after {} epochs; {}",
                    t.trial_id,
                    t.metric.unwrap_or(f64::NAN),
                    t.resource,
                    values.join(", ")
                );
            }
            None => println!("no trial completed"),
        }
        if let Some(rows) = correlations {
            let mut rows = rows;
            rows.sort_by_key(|r| r.rank);
            for r in rows {
                println!(
                    "  {:>2}. {:<24} r = {:+.3}{}",
                    r.rank,
                    r.param,
                    r.pearson_r,
                    if r.degenerate { " (degenerate)" } else { "" }
                );
            }
        }
    }
    if best.is_none() {
        return Err(Failure::new(EXIT_CHECK, "every trial failed"));
    }
    Ok(())
}

pub fn compare(cmd: &CompareCmd) -> Outcome {
    let config = resolve_train_config(&cmd.train)?;
    echo(&config, cmd.json);
    if cmd.dry_run {
        print!("{}", train_config_toml(&config)?);
        return Ok(());
    }
    let (train, test) = load_data(&cmd.data)?;
    create_dir(&cmd.out)?;
    write_text(&cmd.out.join(CONFIG_FILE), &train_config_toml(&config)?)?;
    let cmp = trainer::compare_mixup(&config, &train, &test, Some(&cmd.out))?;
    let d = cmp.deltas;
    if cmd.json {
        println!("{}", to_json(&d)?);
    } else {
        println!("                mixup     no mixup");
        println!(
            "train loss   {:>9.4}    {:>9.4}",
            d.final_train_loss_mixup, d.final_train_loss_no_mixup
        );
        println!(
            "test loss    {:>9.4}    {:>9.4}",
            d.final_test_loss_mixup, d.final_test_loss_no_mixup
        );
        println!(
            "test error   {:>8.2}%    {:>8.2}%",
            d.final_test_error_pct_mixup, d.final_test_error_pct_no_mixup
        );
        println!("test loss ratio (no mixup / mixup) {:.3}", d.test_loss_ratio);
        println!("outputs in {}", cmd.out.display());
    }
    Ok(())
}

/// Binary PPM of one CHW image.
pub fn ppm(chw: &[u8]) -> Vec<u8> {
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    let mut out = format!("P6\n{IMAGE_SIDE} {IMAGE_SIDE}\n255\n").into_bytes();
    out.reserve(chw.len());
    for i in 0..plane {
        out.extend([chw[i], chw[plane + i], chw[2 * plane + i]]);
    }
    out
}

/// `round(lambda * a + (1 - lambda) * b)` per byte.
pub fn mix_bytes(a: &[u8], b: &[u8], lambda: f64) -> Vec<u8> {
    a.iter()
        .zip(b)
        .map(|(&a, &b)| (lambda * a as f64 + (1.0 - lambda) * b as f64).round() as u8)
        .collect()
}

pub fn preview(cmd: &PreviewCmd) -> Outcome {
    if !(0.0..=1.0).contains(&cmd.lambda) {
        return Err(config_error(format!("--lambda must be in [0, 1], got {}", cmd.lambda)));
    }
    let dir = data_dir(&cmd.data_dir)?;
    let files: Vec<&str> = match cmd.split {
        Split::Train => TRAIN_FILES.to_vec(),
        Split::Test => vec![TEST_FILE],
    };
    let mut pixels = Vec::new();
    let needed = cmd.a.max(cmd.b) + 1;
    for name in files {
        if pixels.len() / IMAGE_BYTES >= needed {
            break;
        }
        pixels.extend(data::read_batch_file(&dir.join(name))?.1);
    }
    let count = pixels.len() / IMAGE_BYTES;
    for i in [cmd.a, cmd.b] {
        if i >= count {
            return Err(Failure::new(
                EXIT_DATA,
                format!("image index {i} out of range ({count} images)"),
            ));
        }
    }
    let image = |i: usize| &pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES];
    let mixed = mix_bytes(image(cmd.a), image(cmd.b), cmd.lambda);
    create_dir(&cmd.out)?;
    for (name, bytes) in [
        ("A.ppm", image(cmd.a)),
        ("B.ppm", image(cmd.b)),
        ("mixed.ppm", &mixed[..]),
    ] {
        let path = cmd.out.join(name);
        fs::write(&path, ppm(bytes)).map_err(|e| Failure::from(Error::io(&path, e)))?;
    }
    let effective = format!(
        "a = {}\nb = {}\nlambda = {}\nsplit = \"{}\"\ndata_dir = {:?}\n",
        cmd.a,
        cmd.b,
        cmd.lambda,
        if cmd.split == Split::Train { "train" } else { "test" },
        dir.display().to_string(),
    );
    write_text(&cmd.out.join("preview.toml"), &effective)?;
    println!(
        "wrote A.ppm, B.ppm, mixed.ppm (lambda {}) to {}",
        cmd.lambda,
        cmd.out.display()
    );
    Ok(())
}

pub fn gradcheck(cmd: &GradcheckCmd) -> Outcome {
    let config = GradcheckConfig {
        trials: cmd.trials,
        seed: cmd.seed,
        ops: cmd.ops.clone(),
        f32: cmd.precision != Precision::F64,
        f64: cmd.precision != Precision::F32,
        corrupt: cmd.corrupt_backward.clone(),
    };
    let report = gradcheck::run(&config)?;
    if cmd.json {
        println!("{}", to_json(&report)?);
    } else {
        print!("{}", report.table());
        let _ = std::io::stdout().flush();
    }
    let failures = report.failures();
    if failures.is_empty() {
        return Ok(());
    }
    let names: Vec<String> = failures
        .iter()
        .map(|r| {
            format!(
                "{} ({}, worst {:.3e} >= {:.0e})",
                r.op, r.precision, r.worst_error, r.threshold
            )
        })
        .collect();
    Err(Failure::new(
        EXIT_CHECK,
        format!("gradient check failed: {}", names.join(", ")),
    ))
}
