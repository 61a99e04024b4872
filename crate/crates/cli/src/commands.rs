use std::path::{Path, PathBuf};

use omrd_core::autodiff::{Fault, OpKind};
use omrd_core::checkpoint;
use omrd_core::data::{synth_dataset, write_dataset, Dataset, Split, SynthConfig};
use omrd_core::eval::{evaluate, Feature};
use omrd_core::experiment::{ablation, ablation_csv};
use omrd_core::gradcheck::suite::{run_suite, SuiteConfig};
use omrd_core::gradcheck::GradCheckConfig;
use omrd_core::trainer::{embed, train_with_observer};

use crate::config::{read_json, write_json, RunConfig};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.omrd";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const ABLATION_FILE: &str = "ablation.csv";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}

fn prepare(config: &Path, output_dir: Option<PathBuf>) -> Result<(RunConfig, Dataset), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    let cfg = cfg.resolved();
    let ds = cfg.dataset()?;
    create_dir(&cfg.output_dir)?;
    write_json(&cfg, &cfg.output_dir.join(RESOLVED_CONFIG_FILE))?;
    Ok((cfg, ds))
}

pub fn train(config: &Path, output_dir: Option<PathBuf>) -> Result<(), CliError> {
    let (cfg, ds) = prepare(config, output_dir)?;
    let train_set = ds.train();
    let ids: std::collections::BTreeSet<u32> = train_set.iter().map(|s| s.identity).collect();
    log::info!(
        "training on {} images of {} identities for {} epochs",
        train_set.len(),
        ids.len(),
        cfg.train.epochs
    );
    let (model, mut log) = train_with_observer(&train_set, &cfg.model, &cfg.train, |b| {
        log::debug!("epoch {} batch {} loss {:.5}", b.epoch, b.batch, b.loss_total);
        if b.batch == 0 {
            log::info!("epoch {} lr {:.3e} first-batch loss {:.4}", b.epoch, b.lr, b.loss_total);
        }
    })
    .map_err(CliError::from_core)?;
    let out = &cfg.output_dir;
    checkpoint::save(&model, &out.join(CHECKPOINT_FILE)).map_err(CliError::from_core)?;
    log.checkpoint = Some(CHECKPOINT_FILE.to_string());
    write_text(&out.join(TRAIN_LOG_FILE), &log.to_csv())?;
    if let Some(last) = log.epochs.last() {
        println!("final epoch {} loss {:.4}", last.epoch, last.loss_total);
    }
    println!("wrote {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

pub fn eval(
    ckpt: &Path,
    dataset: &Path,
    feature: Option<Feature>,
    max_rank: usize,
    output_dir: Option<PathBuf>,
) -> Result<(), CliError> {
    if max_rank == 0 {
        return Err(CliError::usage("--max-rank must be positive"));
    }
    let model = checkpoint::load(ckpt).map_err(CliError::input)?;
    let (ds, _) = Dataset::load(dataset, model.model_cfg.backbone.input_hw).map_err(CliError::input)?;
    let which = feature.unwrap_or(model.train_cfg.descriptor);
    let query = ds.split(Split::Query);
    let gallery = ds.split(Split::Gallery);
    if query.is_empty() || gallery.is_empty() {
        return Err(CliError::usage(format!("{}: query and gallery splits must be non-empty", dataset.display())));
    }
    let q = embed(&model.model_cfg, &model.params, &query, which).map_err(CliError::input)?;
    let g = embed(&model.model_cfg, &model.params, &gallery, which).map_err(CliError::input)?;
    let report = evaluate(&q, &g, max_rank).map_err(CliError::input)?;
    let out = output_dir.unwrap_or_else(|| ckpt.parent().map(Path::to_path_buf).unwrap_or_default());
    create_dir(&out)?;
    report.write_files(&out, which.as_str()).map_err(CliError::input)?;
    println!("feature {}", which.as_str());
    println!("queries {} (dropped {})", report.num_valid_queries, report.num_dropped_queries);
    println!("mAP {:.4}", report.map);
    for r in [1, 5, 10] {
        if r <= max_rank {
            println!("rank-{r} {:.4}", report.rank(r));
        }
    }
    Ok(())
}

pub fn ablate(config: &Path, output_dir: Option<PathBuf>) -> Result<(), CliError> {
    let (cfg, ds) = prepare(config, output_dir)?;
    let rows = ablation(&ds, &cfg.model, &cfg.train, omrd_core::eval::DEFAULT_MAX_RANK).map_err(CliError::from_core)?;
    let csv = ablation_csv(&rows);
    write_text(&cfg.output_dir.join(ABLATION_FILE), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn gradcheck(seed: u64, instances: usize, tolerance: f64, step: f64, sabotage: Option<&str>) -> Result<(), CliError> {
    let fault = match sabotage {
        None => None,
        Some(name) => {
            let kind = OpKind::from_name(name).ok_or_else(|| {
                let names: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
                CliError::usage(format!("unknown op `{name}`; expected one of {}", names.join(", ")))
            })?;
            Some(Fault { kind, factor: 1.01 })
        }
    };
    if !(tolerance > 0.0 && step > 0.0) {
        return Err(CliError::usage("--tolerance and --step must be positive"));
    }
    let cfg = SuiteConfig {
        check: GradCheckConfig {
            step,
            tolerance,
            seed,
            ..GradCheckConfig::default()
        },
        instances,
        seed,
        fault,
    };
    let t0 = std::time::Instant::now();
    let report = run_suite(&cfg);
    print!("{}", report.table());
    println!(
        "{} components, tolerance {tolerance:e}, {:.1}s",
        report.results.len(),
        t0.elapsed().as_secs_f64()
    );
    if report.passed() {
        println!("all gradients match");
        return Ok(());
    }
    let failing: Vec<&str> = report.failures().iter().map(|r| r.component).collect();
    let worst = report.worst().expect("non-empty suite");
    Err(CliError::verify(format!(
        "gradient check failed for {}; worst offender {} (max rel error {:.3e} in {})",
        failing.join(", "),
        worst.component,
        worst.report.max_rel_error,
        worst.report.worst_parameter
    )))
}

pub struct SynthOverrides {
    pub num_ids: Option<usize>,
    pub images_per_id: Option<usize>,
    pub heldout_ids: Option<usize>,
    pub seed: Option<u64>,
}

pub fn synth(out_dir: &Path, params: Option<&Path>, o: SynthOverrides) -> Result<(), CliError> {
    let mut cfg: SynthConfig = match params {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = o.num_ids {
        cfg.num_ids = v;
    }
    if let Some(v) = o.images_per_id {
        cfg.images_per_id = v;
    }
    if o.heldout_ids.is_some() {
        cfg.heldout_ids = o.heldout_ids;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    cfg.validate().map_err(CliError::input)?;
    let ds = synth_dataset(&cfg).map_err(CliError::input)?;
    create_dir(out_dir)?;
    let entries = write_dataset(&ds, out_dir).map_err(CliError::input)?;
    for split in Split::ALL {
        let samples = ds.split(split);
        let ids: std::collections::BTreeSet<u32> = samples.iter().map(|s| s.identity).collect();
        println!("{:<8} {:>5} images {:>4} identities", split.as_str(), samples.len(), ids.len());
    }
    println!("wrote {} images to {}", entries.len(), out_dir.display());
    Ok(())
}
