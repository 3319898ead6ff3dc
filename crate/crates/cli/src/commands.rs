//! The batch commands. Each one resolves its arguments, validates inputs and
//! refuses to clobber outputs before it writes anything, records a manifest,
//! does the work and then marks the manifest completed or failed.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use fnri::dataset::{normalize, split_halves, Dataset};
use fnri::decoder::time_slice;
use fnri::eval::{evaluate, random_predictions, rollout_batch, static_mse, EvalOptions, EvalReport, Matcher};
use fnri::model::{Model, ModelConfig, TrainMode};
use fnri::scheme::{batch_pair_labels, FactorisationScheme, Variant};
use fnri::sim::{derive_seed, simulate_dataset, SimConfig, System};
use fnri::train::{train, TrainConfig};

use crate::args::{sibling, split_path, Baseline, Command, EvalArgs, ExportArgs, GenArgs, Profile, RerunArgs, TrainArgs};
use crate::error::{config, CliError, CliResult};
use crate::manifest::RunManifest;

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

/// Profile defaults.
pub struct Defaults {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Supervised-mode dropout.
    pub dropout: f64,
}

impl Profile {
    pub fn defaults(self) -> Defaults {
        match self {
            Profile::Desk => Defaults {
                train: 2000,
                valid: 500,
                test: 500,
                hidden: 64,
                epochs: 60,
                batch_size: 32,
                dropout: 0.0,
            },
            Profile::Paper => Defaults {
                train: 50_000,
                valid: 10_000,
                test: 10_000,
                hidden: 256,
                epochs: 500,
                batch_size: 128,
                dropout: 0.5,
            },
        }
    }
}

/// Runs a parsed command.
pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Rerun(args) => rerun(&args),
        other => execute(resolve(other)?, None),
    }
}

/// Fills every profile-dependent option so the command records (and replays)
/// concrete values.
pub fn resolve(command: Command) -> CliResult<Command> {
    Ok(match command {
        Command::Gen(mut a) => {
            let d = a.profile.defaults();
            a.train.get_or_insert(d.train);
            a.valid.get_or_insert(d.valid);
            a.test.get_or_insert(d.test);
            Command::Gen(a)
        }
        Command::Train(mut a) => {
            let d = a.profile.defaults();
            let t = TrainConfig::default();
            if a.l2.is_some() && a.model != Variant::Sfnri {
                return Err(config("--l2 applies only to sfnri"));
            }
            if a.dropout.is_some() && a.mode != TrainMode::Supervised {
                return Err(config("--dropout applies only to supervised training"));
            }
            a.log = Some(a.log_path());
            a.epochs.get_or_insert(d.epochs);
            a.batch_size.get_or_insert(d.batch_size);
            a.lr.get_or_insert(t.lr);
            a.lr_decay.get_or_insert(t.lr_decay);
            a.lr_decay_every.get_or_insert(t.lr_decay_every);
            a.hidden.get_or_insert(d.hidden);
            let m = ModelConfig::new(FactorisationScheme::default_for(a.model, System::SpringsCharges), a.mode);
            a.tau.get_or_insert(m.tau);
            a.teacher_forcing.get_or_insert(m.teacher_forcing);
            a.sigma2.get_or_insert(m.sigma2);
            a.dropout.get_or_insert(if a.mode == TrainMode::Supervised { d.dropout } else { 0.0 });
            a.l2.get_or_insert(match (a.model, a.mode) {
                (Variant::Sfnri, TrainMode::Supervised) => 2e-5,
                (Variant::Sfnri, _) => 5e-8,
                _ => 0.0,
            });
            Command::Train(a)
        }
        Command::Eval(a) => {
            match (&a.ckpt, a.baseline) {
                (Some(_), Some(_)) | (None, None) => {
                    return Err(config("give exactly one of --ckpt and --baseline"));
                }
                _ => {}
            }
            if a.baseline != Some(Baseline::Random) && (a.model.is_some() || a.edge_types.is_some()) {
                return Err(config("--model and --edge-types apply only to --baseline random"));
            }
            if a.steps.is_empty() || a.steps.contains(&0) {
                return Err(config("--steps must be positive"));
            }
            if a.draws == 0 || a.batch_size == 0 {
                return Err(config("--draws and --batch-size must be at least 1"));
            }
            Command::Eval(a)
        }
        Command::ExportPlot(a) => {
            if a.examples == 0 || a.steps == Some(0) {
                return Err(config("--examples and --steps must be at least 1"));
            }
            Command::ExportPlot(a)
        }
        Command::Rerun(_) => return Err(config("a manifest cannot record a rerun")),
    })
}

/// Outputs a command will write, excluding its manifest.
fn outputs(command: &Command) -> Vec<PathBuf> {
    match command {
        Command::Gen(a) => SPLITS.iter().map(|s| split_path(&a.out, s)).collect(),
        Command::Train(a) => vec![a.ckpt.clone(), a.log_path()],
        Command::Eval(a) => std::iter::once(a.out.clone()).chain(a.per_example.clone()).collect(),
        Command::ExportPlot(a) => vec![a.out.clone()],
        Command::Rerun(_) => Vec::new(),
    }
}

pub fn manifest_path(command: &Command) -> PathBuf {
    match command {
        Command::Gen(a) => a.out.join("manifest.json"),
        Command::Train(a) => sibling(&a.ckpt, "manifest.json"),
        Command::Eval(a) => sibling(&a.out, "manifest.json"),
        Command::ExportPlot(a) => sibling(&a.out, "manifest.json"),
        Command::Rerun(a) => a.manifest.clone(),
    }
}

fn force(command: &Command) -> bool {
    match command {
        Command::Gen(a) => a.force,
        Command::Train(a) => a.force,
        Command::Eval(a) => a.force,
        Command::ExportPlot(a) => a.force,
        Command::Rerun(a) => a.force,
    }
}

fn seeds(command: &Command) -> serde_json::Value {
    match command {
        Command::Gen(a) => json!({
            "base": a.seed,
            "train": derive_seed(a.seed, 0),
            "valid": derive_seed(a.seed, 1),
            "test": derive_seed(a.seed, 2),
        }),
        Command::Train(a) => json!({ "train": a.seed, "init": a.seed }),
        Command::Eval(a) => json!({ "random_baseline": a.seed }),
        Command::ExportPlot(_) | Command::Rerun(_) => json!({}),
    }
}

/// Inputs a command needs, loaded (and checked) before anything is written.
enum Prepared {
    Gen,
    Train { train: Dataset, valid: Dataset, model: Model },
    Eval { data: Dataset, model: Option<Model> },
    Export { data: Dataset, model: Model },
}

fn load_split(dir: &Path, split: &str) -> CliResult<Dataset> {
    let path = split_path(dir, split);
    Dataset::read(&path).map_err(|e| match e {
        fnri::Error::Io(io) => CliError::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other.into(),
    })
}

fn check_steps(data: &Dataset, steps: &[usize]) -> CliResult<()> {
    let limit = data.header.t_record - 1 - data.header.t_record / 2;
    match steps.iter().max() {
        Some(&m) if m <= limit => Ok(()),
        _ => Err(config(format!("prediction steps must lie in 1..={limit}"))),
    }
}

fn prepare(command: &Command) -> CliResult<Prepared> {
    Ok(match command {
        Command::Gen(a) => {
            SimConfig::with_system(a.system).validate()?;
            if a.train == Some(0) {
                return Err(config("--train must be at least 1"));
            }
            Prepared::Gen
        }
        Command::Train(a) => {
            let train = normalize(&load_split(&a.data, "train")?)?;
            let valid = normalize(&load_split(&a.data, "valid")?)?;
            let scheme = match &a.edge_types {
                Some(s) => FactorisationScheme::parse(a.model, s)?,
                None => FactorisationScheme::default_for(a.model, train.header.sim_config.system),
            };
            Matcher::new(&scheme, train.num_layers())?;
            let mut mc = ModelConfig::new(scheme, a.mode);
            mc.n_particles = train.header.n_particles;
            mc.dims = train.header.dims;
            mc.t_enc = train.header.t_record / 2;
            mc.hidden = a.hidden.unwrap_or(mc.hidden);
            mc.tau = a.tau.unwrap_or(mc.tau);
            mc.sigma2 = a.sigma2.unwrap_or(mc.sigma2);
            mc.teacher_forcing = a.teacher_forcing.unwrap_or(mc.teacher_forcing);
            mc.hard_sample = a.hard_sample;
            mc.init_seed = a.seed;
            mc.validate()?;
            train_config(a).validate()?;
            Prepared::Train {
                train,
                valid,
                model: Model::new(mc)?,
            }
        }
        Command::Eval(a) => {
            let data = normalize(&load_split(&a.data, &a.split)?)?;
            let model = match &a.ckpt {
                Some(path) => Some(Model::load(path)?.0),
                None => {
                    if a.baseline == Some(Baseline::Static) {
                        check_steps(&data, &a.steps)?;
                    } else {
                        Matcher::new(&random_scheme(a, &data)?, data.num_layers())?;
                    }
                    None
                }
            };
            if let Some(m) = &model {
                if m.config.has_decoder() {
                    check_steps(&data, &a.steps)?;
                }
                if m.config.has_encoder() {
                    Matcher::new(&m.config.scheme, data.num_layers())?;
                }
            }
            Prepared::Eval { data, model }
        }
        Command::ExportPlot(a) => {
            let data = normalize(&load_split(&a.data, &a.split)?)?;
            let (model, _) = Model::load(&a.ckpt)?;
            if !model.config.has_decoder() {
                return Err(config("export-plot needs a checkpoint with a decoder"));
            }
            if a.examples > data.len() {
                return Err(config(format!("--examples {} exceeds the {} available", a.examples, data.len())));
            }
            if let Some(k) = a.steps {
                check_steps(&data, &[k])?;
            }
            Prepared::Export { data, model }
        }
        Command::Rerun(_) => unreachable!("reruns are expanded before preparation"),
    })
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        epochs: a.epochs.unwrap_or(d.epochs),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        lr: a.lr.unwrap_or(d.lr),
        lr_decay: a.lr_decay.unwrap_or(d.lr_decay),
        lr_decay_every: a.lr_decay_every.unwrap_or(d.lr_decay_every),
        dropout: a.dropout.unwrap_or(0.0),
        l2: a.l2.unwrap_or(0.0),
        seed: a.seed,
        valid_batch_size: d.valid_batch_size,
    }
}

fn random_scheme(a: &EvalArgs, data: &Dataset) -> CliResult<FactorisationScheme> {
    let variant = a.model.unwrap_or(Variant::Fnri);
    Ok(match &a.edge_types {
        Some(s) => FactorisationScheme::parse(variant, s)?,
        None => FactorisationScheme::default_for(variant, data.header.sim_config.system),
    })
}

/// Validates, checks outputs, writes the manifest, runs, and finalizes the
/// manifest.
fn execute(command: Command, rerun_of: Option<PathBuf>) -> CliResult<()> {
    let prepared = prepare(&command)?;
    let manifest_path = manifest_path(&command);
    if !force(&command) {
        let mut targets = outputs(&command);
        targets.push(manifest_path.clone());
        if let Some(p) = targets.iter().find(|p| p.exists()) {
            return Err(config(format!("{} exists; pass --force to overwrite", p.display())));
        }
    }
    let mut artifacts = outputs(&command);
    artifacts.push(manifest_path.clone());
    let mut manifest = RunManifest::begin(command.clone(), seeds(&command), artifacts);
    manifest.rerun_of = rerun_of;
    manifest.write(&manifest_path)?;
    let result = work(&command, prepared);
    manifest.finish(result.as_ref().map(|_| ()).map_err(ToString::to_string));
    manifest.write(&manifest_path)?;
    result
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn work(command: &Command, prepared: Prepared) -> CliResult<()> {
    match (command, prepared) {
        (Command::Gen(a), Prepared::Gen) => gen(a),
        (Command::Train(a), Prepared::Train { train, valid, model }) => cmd_train(a, &train, &valid, model),
        (Command::Eval(a), Prepared::Eval { data, model }) => cmd_eval(a, &data, model.as_ref()),
        (Command::ExportPlot(a), Prepared::Export { data, model }) => export(a, &data, &model),
        _ => unreachable!("preparation matches the command"),
    }
}

fn gen(a: &GenArgs) -> CliResult<()> {
    fs::create_dir_all(&a.out)?;
    let cfg = SimConfig::with_system(a.system);
    let counts = [a.train.unwrap_or(0), a.valid.unwrap_or(0), a.test.unwrap_or(0)];
    let mut sets = Vec::with_capacity(3);
    for (k, &count) in counts.iter().enumerate() {
        let seed = derive_seed(a.seed, k as u64);
        sets.push(Dataset::from_records(&simulate_dataset(&cfg, count, seed)?, &cfg, seed)?);
    }
    let stats = sets[0].max_abs();
    for (set, split) in sets.iter_mut().zip(SPLITS) {
        set.header.normalization = Some(stats);
        set.write(&split_path(&a.out, split))?;
        eprintln!("wrote {} examples to {}", set.len(), split_path(&a.out, split).display());
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs, train_set: &Dataset, valid: &Dataset, mut model: Model) -> CliResult<()> {
    ensure_parent(&a.ckpt)?;
    let log = a.log_path();
    ensure_parent(&log)?;
    let summary = train(&mut model, &train_config(a), train_set, valid, Some(&a.ckpt), Some(&log))?;
    let c = &summary.criterion;
    eprintln!(
        "best {:?} = {} at epoch {}",
        c.metric,
        c.best.map_or("n/a".into(), |b| format!("{b:.6}")),
        c.best_epoch.map_or("n/a".into(), |e| e.to_string()),
    );
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs, data: &Dataset, model: Option<&Model>) -> CliResult<()> {
    let (report, per_example) = match (model, a.baseline) {
        (Some(m), _) => evaluate(
            m,
            data,
            &EvalOptions {
                steps: a.steps.clone(),
                mse_mode: a.mse_mode,
                batch_size: a.batch_size,
            },
        )?,
        (None, Some(Baseline::Static)) => {
            let mut r = EvalReport::empty("static".into(), data, &a.steps, a.mse_mode);
            r.set_mse(static_mse(data, &a.steps, a.mse_mode)?);
            (r, Vec::new())
        }
        (None, _) => random_baseline(a, data)?,
    };
    write_json(&a.out, &report)?;
    if let Some(path) = &a.per_example {
        ensure_parent(path)?;
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["example", "combined_accuracy"])?;
        for (k, acc) in per_example.iter().enumerate() {
            w.write_record([k.to_string(), acc.to_string()])?;
        }
        w.flush()?;
    }
    if let Some(acc) = report.combined_accuracy {
        eprintln!("combined accuracy {:.4}", acc);
    }
    for (k, m) in report.mse_steps.iter().zip(&report.mse_display) {
        eprintln!("mse@{k} {m:.3}e-5");
    }
    Ok(())
}

/// Pools `draws` independent uniformly random labelings of the split and
/// scores them under one global map.
fn random_baseline(a: &EvalArgs, data: &Dataset) -> CliResult<(EvalReport, Vec<f64>)> {
    let scheme = random_scheme(a, data)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let truth = batch_pair_labels(&data.batch(&all));
    let rows = truth.len() / data.num_layers();
    let mut pred = Vec::with_capacity(rows * scheme.num_layers() * a.draws);
    let mut pooled = Vec::with_capacity(truth.len() * a.draws);
    for d in 0..a.draws {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(a.seed, d as u64));
        pred.extend(random_predictions(rows, &scheme, &mut rng));
        pooled.extend_from_slice(&truth);
    }
    let matcher = Matcher::new(&scheme, data.num_layers())?;
    let c = matcher.confusion(&pred, &pooled)?;
    let mut report = EvalReport::empty("random".into(), data, &a.steps, a.mse_mode);
    report.scheme = Some(scheme.to_string());
    report.set_accuracy(&matcher.score(&c, matcher.best(&c)));
    Ok((report, Vec::new()))
}

fn export(a: &ExportArgs, data: &Dataset, model: &Model) -> CliResult<()> {
    let half = data.header.t_record / 2;
    let steps = a.steps.unwrap_or(data.header.t_record - 1 - half);
    let stats = data.header.normalization.unwrap_or([1.0; 4]);
    let idx: Vec<usize> = (0..a.examples).collect();
    let batch = data.batch(&idx);
    let (_, second) = split_halves(&batch.trajectories)?;
    let preds = rollout_batch(model, &batch, steps)?;
    let (n, d) = (data.header.n_particles, data.header.dims);
    ensure_parent(&a.out)?;
    let mut w = csv::Writer::from_path(&a.out)?;
    w.write_record(["example", "particle", "t", "x_true", "y_true", "x_pred", "y_pred"])?;
    for b in 0..a.examples {
        for p in 0..n {
            for (k, mu) in preds.iter().enumerate() {
                let truth = time_slice(&second, k + 1);
                let at = (b * n + p) * d;
                let (t, m) = (&truth.data()[at..at + 2], &mu.data()[at..at + 2]);
                w.write_record([
                    b.to_string(),
                    p.to_string(),
                    (half + k + 1).to_string(),
                    (t[0] * stats[0]).to_string(),
                    (t[1] * stats[1]).to_string(),
                    (m[0] * stats[0]).to_string(),
                    (m[1] * stats[1]).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Replays a manifest, optionally redirecting outputs into `out_dir`.
fn rerun(args: &RerunArgs) -> CliResult<()> {
    let recorded = RunManifest::read(&args.manifest)?;
    let mut command = recorded.run;
    if let Some(dir) = &args.out_dir {
        redirect(&mut command, dir);
    }
    set_force(&mut command, args.force);
    execute(command, Some(args.manifest.clone()))
}

fn into_dir(dir: &Path, path: &Path) -> PathBuf {
    dir.join(path.file_name().unwrap_or(path.as_os_str()))
}

fn redirect(command: &mut Command, dir: &Path) {
    match command {
        Command::Gen(a) => a.out = dir.to_path_buf(),
        Command::Train(a) => {
            a.log = Some(into_dir(dir, &a.log_path()));
            a.ckpt = into_dir(dir, &a.ckpt);
        }
        Command::Eval(a) => {
            a.out = into_dir(dir, &a.out);
            a.per_example = a.per_example.as_ref().map(|p| into_dir(dir, p));
        }
        Command::ExportPlot(a) => a.out = into_dir(dir, &a.out),
        Command::Rerun(_) => {}
    }
}

fn set_force(command: &mut Command, value: bool) {
    match command {
        Command::Gen(a) => a.force = value,
        Command::Train(a) => a.force = value,
        Command::Eval(a) => a.force = value,
        Command::ExportPlot(a) => a.force = value,
        Command::Rerun(a) => a.force = value,
    }
}
