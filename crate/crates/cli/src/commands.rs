//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tumorseg::augment::augment_planes;
use tumorseg::checkpoint::Checkpoint;
use tumorseg::data::{
    generate_phantom, kfold_split, normalize, CaseRecord, Cohort, LabelVolume, Manifest,
    PhantomOptions, SliceSample,
};
use tumorseg::metrics::{aggregate, evaluate_case, CaseMetrics, EvalReport};
use tumorseg::optimize::{train, LossLog};
use tumorseg::pipeline::{case_slices, segment_volume};
use tumorseg::{derive_seed, Error, RegionKind, UNetModel};

use crate::config::RunConfig;
use crate::pgm;
use crate::{CliError, Command, Common, TrainFlags};

type CliResult<T> = std::result::Result<T, CliError>;

/// Slices per forward pass at inference.
const PREDICT_BATCH: usize = 8;

pub fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Phantom {
            cases,
            size,
            depth,
            common,
        } => cmd_phantom(cases, size, depth, &common),
        Command::Train { flags, common } => cmd_train(&flags, &common),
        Command::Predict {
            checkpoint,
            manifest,
            common,
        } => cmd_predict(&checkpoint, &manifest, &common),
        Command::Evaluate {
            pred,
            manifest,
            common,
        } => cmd_evaluate(&pred, &manifest, &common),
        Command::Crossval {
            flags,
            folds,
            common,
        } => cmd_crossval(&flags, folds, &common),
        Command::Augment {
            manifest,
            case,
            slice,
            common,
        } => cmd_augment(&manifest, &case, slice, &common),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(Error::io(path, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn single_thread() {
    // Fails only if the global pool already exists, e.g. on a second call.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build_global();
}

/// Config file, then flags, then validation of the result.
fn resolve(common: &Common, flags: Option<&TrainFlags>) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    if !common.task.is_empty() {
        cfg.tasks = common.task.clone();
    }
    cfg.deterministic |= common.deterministic;
    if let Some(f) = flags {
        if let Some(m) = &f.manifest {
            cfg.manifest = Some(m.clone());
        }
        if let Some(e) = f.epochs {
            cfg.train.max_epochs = e;
        }
        if let Some(lr) = f.lr {
            cfg.train.learning_rate = lr;
        }
        if let Some(b) = f.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(b) = f.blocks {
            cfg.model.num_blocks = b;
        }
        if let Some(b) = f.base_filters {
            cfg.model.base_filters = b;
        }
        if f.no_augment {
            cfg.augment_training = false;
        }
    }
    if cfg.deterministic {
        single_thread();
    }
    Ok(cfg)
}

fn require_out(cfg: &RunConfig, problems: &mut Vec<String>) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| {
        problems.push("an output directory is required (--out)".into());
        PathBuf::new()
    })
}

fn check(problems: Vec<String>) -> CliResult<()> {
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::Invalid(problems))
    }
}

fn load_manifest(path: &Path) -> CliResult<Manifest> {
    Manifest::load(path).map_err(CliError::Runtime)
}

/// Every case must share one in-plane size; the model input is set to it.
fn fit_model_to_data(
    cfg: &mut RunConfig,
    manifest: &Manifest,
    problems: &mut Vec<String>,
) -> CliResult<()> {
    let mut dims: Option<(usize, usize, String)> = None;
    for rec in &manifest.cases {
        let v = rec.load_labels()?;
        let (x, y) = (v.dims[0], v.dims[1]);
        match &dims {
            None => dims = Some((x, y, rec.case.clone())),
            Some((dx, dy, first)) if (*dx, *dy) != (x, y) => problems.push(format!(
                "case {} has {x}x{y} planes but case {first} has {dx}x{dy}",
                rec.case
            )),
            _ => {}
        }
    }
    if let Some((x, y, _)) = dims {
        cfg.model.input_height = x;
        cfg.model.input_width = y;
    }
    Ok(())
}

fn phantom_files(case: &str) -> [String; 3] {
    [
        format!("{case}_flair.mvol"),
        format!("{case}_t1c.mvol"),
        format!("{case}_labels.mvol"),
    ]
}

/// Cases alternate HGG / LGG; case `i` uses seed `derive_seed(seed, [i])`.
pub fn cmd_phantom(cases: usize, size: usize, depth: usize, common: &Common) -> CliResult<()> {
    let cfg = resolve(common, None)?;
    let mut problems = Vec::new();
    let out = require_out(&cfg, &mut problems);
    if cases == 0 {
        problems.push("--cases must be at least 1".into());
    }
    if size < 8 || !size.is_multiple_of(2) {
        problems.push(format!("--size must be even and at least 8, got {size}"));
    }
    if depth < 3 {
        problems.push(format!("--depth must be at least 3, got {depth}"));
    }
    check(problems)?;
    create_dir(&out)?;
    let mut records = Vec::with_capacity(cases);
    for i in 0..cases {
        let case = format!("case{i:03}");
        let cohort = if i % 2 == 0 { Cohort::Hgg } else { Cohort::Lgg };
        let opts = PhantomOptions {
            cohort,
            ..PhantomOptions::new(size, depth)
        };
        let p = generate_phantom(&opts, derive_seed(cfg.seed, &[i as u64]))?;
        let [flair, t1c, labels] = phantom_files(&case);
        p.flair.save(out.join(&flair))?;
        p.t1c.save(out.join(&t1c))?;
        p.labels.save(out.join(&labels))?;
        records.push(CaseRecord {
            case,
            cohort,
            flair: flair.into(),
            t1c: t1c.into(),
            labels: labels.into(),
        });
    }
    let manifest = Manifest { cases: records };
    write_file(&out.join("manifest.jsonl"), manifest.to_jsonl()?)?;
    eprintln!("wrote {cases} phantom cases to {}", out.display());
    Ok(())
}

fn gather_slices<'a>(
    manifest: &Manifest,
    ids: impl IntoIterator<Item = &'a String>,
    task: RegionKind,
) -> CliResult<Vec<SliceSample>> {
    let mut out = Vec::new();
    for id in ids {
        let rec = manifest.get(id).ok_or_else(|| {
            CliError::Runtime(Error::InvalidArgument(format!("unknown case {id}")))
        })?;
        out.extend(case_slices(rec, task)?);
    }
    Ok(out)
}

/// Trains one model; `stream` identifies it within the run for seeding.
fn train_model(
    cfg: &RunConfig,
    data: &[SliceSample],
    stream: &[u64],
    label: &str,
) -> CliResult<(UNetModel, LossLog)> {
    let mut model = UNetModel::build(cfg.model.clone(), cfg.init_seed(stream))?;
    let tc = cfg.train_config(stream);
    let aug = cfg.augmentation_spec(stream);
    let every = tc.log_every;
    let log = train(&mut model, data, aug.as_ref(), &tc, |e| {
        if every > 0 && e.epoch % every == 0 {
            eprintln!(
                "{label} epoch {} loss {:.5} ({:.1}s)",
                e.epoch, e.mean_loss, e.wall_seconds
            );
        }
    })?;
    Ok((model, log))
}

fn save_model(
    cfg: &RunConfig,
    model: UNetModel,
    log: &LossLog,
    task: RegionKind,
    dir: &Path,
    stem: &str,
) -> CliResult<()> {
    let epochs = log.epochs.len();
    Checkpoint::new(model, Some(task), epochs).save(dir.join(format!("{stem}.unet")))?;
    write_file(
        &dir.join(format!("{stem}_loss.csv")),
        log.to_csv(cfg.deterministic),
    )
}

pub fn cmd_train(flags: &TrainFlags, common: &Common) -> CliResult<()> {
    let mut cfg = resolve(common, Some(flags))?;
    let mut problems = cfg.violations();
    let out = require_out(&cfg, &mut problems);
    if cfg.tasks.len() > 1 {
        problems.push(format!(
            "train takes exactly one task, got {}",
            cfg.tasks.len()
        ));
    }
    let Some(manifest_path) = cfg.manifest.clone() else {
        problems.push("a manifest is required (--manifest)".into());
        return check(problems);
    };
    check(problems)?;
    let manifest = load_manifest(&manifest_path)?;
    let mut problems = Vec::new();
    fit_model_to_data(&mut cfg, &manifest, &mut problems)?;
    problems.extend(cfg.model.violations());
    check(problems)?;

    let task = cfg.tasks[0];
    let data = gather_slices(&manifest, manifest.ids().iter(), task)?;
    let start = Instant::now();
    let (model, log) = train_model(&cfg, &data, &[0], &format!("train {task}"))?;
    create_dir(&out)?;
    save_model(&cfg, model, &log, task, &out, "model")?;
    let final_loss = log.epochs.last().map_or(f64::NAN, |e| e.mean_loss);
    eprintln!(
        "trained {task} on {} slices for {} epochs in {:.1}s, final loss {final_loss:.5}",
        data.len(),
        log.epochs.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn mask_path(dir: &Path, case: &str, task: RegionKind) -> PathBuf {
    dir.join(format!("{case}_{task}.mvol"))
}

fn predict_cases(
    model: &UNetModel,
    task: RegionKind,
    manifest: &Manifest,
    ids: &[String],
    dir: &Path,
) -> CliResult<()> {
    for id in ids {
        let rec = manifest.get(id).ok_or_else(|| {
            CliError::Runtime(Error::InvalidArgument(format!("unknown case {id}")))
        })?;
        let start = Instant::now();
        let mask = segment_volume(model, &rec.load_volume(task.modality())?, PREDICT_BATCH)?;
        mask.save(mask_path(dir, id, task))?;
        eprintln!(
            "predicted {id} {task} in {:.2}s",
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

pub fn cmd_predict(checkpoint: &Path, manifest_path: &Path, common: &Common) -> CliResult<()> {
    let cfg = resolve(common, None)?;
    let mut problems = Vec::new();
    let out = require_out(&cfg, &mut problems);
    check(problems)?;
    let ck = Checkpoint::load(checkpoint)?;
    let task = match (ck.header.task, common.task.as_slice()) {
        (Some(t), []) => t,
        (Some(t), [f]) if *f == t => t,
        (None, [f]) => *f,
        (t, f) => {
            return Err(CliError::invalid(format!(
                "checkpoint task {t:?} conflicts with --task {f:?}"
            )))
        }
    };
    let manifest = load_manifest(manifest_path)?;
    let (h, w) = (
        ck.model.config().input_height,
        ck.model.config().input_width,
    );
    let mut problems = Vec::new();
    for rec in &manifest.cases {
        let dims = rec.load_labels()?.dims;
        if (dims[0], dims[1]) != (h, w) {
            problems.push(format!(
                "case {} has {}x{} planes but the checkpoint expects {h}x{w}",
                rec.case, dims[0], dims[1]
            ));
        }
    }
    check(problems)?;
    create_dir(&out)?;
    predict_cases(&ck.model, task, &manifest, &manifest.ids(), &out)
}

fn score_case(rec: &CaseRecord, tasks: &[RegionKind], dir: &Path) -> CliResult<CaseMetrics> {
    let truth = rec.load_labels()?;
    let masks: Vec<(RegionKind, LabelVolume)> = tasks
        .iter()
        .map(|&t| Ok((t, LabelVolume::load(mask_path(dir, &rec.case, t))?)))
        .collect::<CliResult<_>>()?;
    for (t, m) in &masks {
        if m.dims != truth.dims {
            return Err(CliError::Runtime(Error::shape(
                "evaluate",
                format!(
                    "case {} {t} mask is {:?}, labels are {:?}",
                    rec.case, m.dims, truth.dims
                ),
            )));
        }
    }
    let refs: Vec<(RegionKind, &[u8])> =
        masks.iter().map(|(t, m)| (*t, m.data.as_slice())).collect();
    Ok(evaluate_case(&rec.case, rec.cohort, &refs, &truth.data)?)
}

fn write_report(report: &EvalReport, out: &Path) -> CliResult<()> {
    write_file(&out.join("report.json"), report.to_json()?)?;
    write_file(&out.join("report.csv"), report.to_csv())?;
    print!("{}", report.to_csv());
    Ok(())
}

pub fn cmd_evaluate(pred: &Path, manifest_path: &Path, common: &Common) -> CliResult<()> {
    let cfg = resolve(common, None)?;
    let mut problems = Vec::new();
    let out = require_out(&cfg, &mut problems);
    check(problems)?;
    let manifest = load_manifest(manifest_path)?;
    let tasks: Vec<RegionKind> = if common.task.is_empty() {
        RegionKind::ALL
            .into_iter()
            .filter(|&t| {
                manifest
                    .cases
                    .iter()
                    .any(|r| mask_path(pred, &r.case, t).exists())
            })
            .collect()
    } else {
        common.task.clone()
    };
    if tasks.is_empty() {
        return Err(CliError::invalid(format!(
            "no predictions found in {}",
            pred.display()
        )));
    }
    let missing: Vec<String> = manifest
        .cases
        .iter()
        .flat_map(|r| tasks.iter().map(move |&t| (r, t)))
        .filter(|(r, t)| !mask_path(pred, &r.case, *t).exists())
        .map(|(r, t)| format!("missing {t} prediction for case {}", r.case))
        .collect();
    check(missing)?;
    let reports = manifest
        .cases
        .iter()
        .map(|r| score_case(r, &tasks, pred))
        .collect::<CliResult<Vec<_>>>()?;
    let report = aggregate(&reports, &[manifest.ids()])?;
    create_dir(&out)?;
    write_report(&report, &out)
}

#[derive(Serialize)]
struct FoldPlan<'a> {
    fold: usize,
    cohort: &'a str,
    train: &'a [String],
    test: &'a [String],
}

pub fn cmd_crossval(flags: &TrainFlags, folds: Option<usize>, common: &Common) -> CliResult<()> {
    let mut cfg = resolve(common, Some(flags))?;
    if let Some(k) = folds {
        cfg.folds = k;
    }
    let mut problems = cfg.violations();
    let out = require_out(&cfg, &mut problems);
    let Some(manifest_path) = cfg.manifest.clone() else {
        problems.push("a manifest is required (--manifest)".into());
        return check(problems);
    };
    check(problems)?;
    let manifest = load_manifest(&manifest_path)?;
    let mut problems = Vec::new();
    fit_model_to_data(&mut cfg, &manifest, &mut problems)?;
    problems.extend(cfg.model.violations());
    let k = cfg.folds;
    let mut splits = Vec::new();
    for (ci, cohort) in manifest.cohorts().into_iter().enumerate() {
        let ids = manifest.ids_in(cohort);
        if ids.len() < k {
            problems.push(format!(
                "{} has {} cases, fewer than {k} folds",
                cohort.name(),
                ids.len()
            ));
            continue;
        }
        splits.push((
            ci as u64,
            cohort,
            kfold_split(&ids, k, derive_seed(cfg.seed, &[0xF01D, ci as u64]))?,
        ));
    }
    check(problems)?;

    create_dir(&out)?;
    write_file(
        &out.join("config.json"),
        serde_json::to_string_pretty(&cfg).map_err(Error::from)?,
    )?;
    let plan: Vec<FoldPlan> = (0..k)
        .flat_map(|i| {
            splits.iter().map(move |(_, c, f)| FoldPlan {
                fold: i,
                cohort: c.name(),
                train: &f[i].train,
                test: &f[i].test,
            })
        })
        .collect();
    write_file(
        &out.join("folds.json"),
        serde_json::to_string_pretty(&plan).map_err(Error::from)?,
    )?;

    let start = Instant::now();
    let mut all_reports = Vec::new();
    let mut test_folds = Vec::with_capacity(k);
    for i in 0..k {
        let dir = out.join(format!("fold{i}"));
        let pred_dir = dir.join("pred");
        create_dir(&pred_dir)?;
        let mut fold_reports = Vec::new();
        let mut fold_tests = Vec::new();
        for (ci, cohort, split) in &splits {
            let fold = &split[i];
            for (ti, &task) in cfg.tasks.iter().enumerate() {
                let data = gather_slices(&manifest, fold.train.iter(), task)?;
                let label = format!("fold {}/{k} {} {task}", i + 1, cohort.name());
                let (model, log) = train_model(&cfg, &data, &[i as u64, *ci, ti as u64], &label)?;
                predict_cases(&model, task, &manifest, &fold.test, &pred_dir)?;
                save_model(
                    &cfg,
                    model,
                    &log,
                    task,
                    &dir,
                    &format!("{}_{task}", cohort.name()),
                )?;
            }
            for id in &fold.test {
                let rec = manifest.get(id).expect("fold ids come from the manifest");
                fold_reports.push(score_case(rec, &cfg.tasks, &pred_dir)?);
            }
            fold_tests.extend(fold.test.iter().cloned());
        }
        let partial = aggregate(&fold_reports, std::slice::from_ref(&fold_tests))?;
        write_file(&dir.join("report.json"), partial.to_json()?)?;
        eprintln!(
            "fold {}/{k} done after {:.1}s: {}",
            i + 1,
            start.elapsed().as_secs_f64(),
            partial.to_csv().lines().last().unwrap_or_default()
        );
        all_reports.extend(fold_reports);
        test_folds.push(fold_tests);
    }
    let report = aggregate(&all_reports, &test_folds)?;
    write_report(&report, &out)
}

pub fn cmd_augment(
    manifest_path: &Path,
    case: &str,
    slice: usize,
    common: &Common,
) -> CliResult<()> {
    let cfg = resolve(common, None)?;
    let mut problems = cfg.augmentation.violations();
    let out = require_out(&cfg, &mut problems);
    if cfg.tasks.len() != 1 {
        problems.push(format!(
            "augment takes exactly one task, got {}",
            cfg.tasks.len()
        ));
    }
    check(problems)?;
    let manifest = load_manifest(manifest_path)?;
    let rec = manifest
        .get(case)
        .ok_or_else(|| CliError::invalid(format!("case {case} is not in the manifest")))?;
    let task = cfg.tasks[0];
    let raw = rec.load_volume(task.modality())?;
    let labels = rec.load_labels()?;
    if slice >= raw.dims[2] {
        return Err(CliError::invalid(format!(
            "slice {slice} does not exist; case {case} has {} slices",
            raw.dims[2]
        )));
    }
    let image = normalize(&raw).axial(slice);
    let label = labels.axial(slice);
    let spec = tumorseg::augment::AugmentationSpec {
        seed: cfg.seed,
        ..cfg.augmentation.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (aug_image, aug_label) = augment_planes(&image, &label, &spec, &mut rng)?;
    let (lo, hi) = pgm::range(&image);
    create_dir(&out)?;
    let files: BTreeMap<&str, Vec<u8>> = [
        ("original_image.pgm", pgm::image_pgm(&image, lo, hi)),
        ("original_labels.pgm", pgm::label_pgm(&label)),
        ("augmented_image.pgm", pgm::image_pgm(&aug_image, lo, hi)),
        ("augmented_labels.pgm", pgm::label_pgm(&aug_label)),
    ]
    .into_iter()
    .collect();
    for (name, bytes) in files {
        write_file(&out.join(name), bytes)?;
    }
    Ok(())
}
