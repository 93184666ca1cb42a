//! Command implementations shared by the CLI entry points.

use std::path::{Path, PathBuf};

use sidetune::checkpoint::{self, RunMeta};
use sidetune::data::{self, CorpusLayout, DatasetSplit};
use sidetune::error::{Error, Result};
use sidetune::model::FusedEncoder;
use sidetune::ocr::OcrClient;
use sidetune::profile::{profile_inference, TextSource};
use sidetune::report;
use sidetune::runconfig::RunConfig;
use sidetune::text::EmbeddingTable;
use sidetune::train::{self, PreparedDataset, SweepJob};
use sidetune::vision::PageImage;

#[derive(Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub ocr_engine: Option<PathBuf>,
    pub threads: Option<usize>,
    pub schedule: Option<sidetune::train::SchedulePolicy>,
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &overrides.out {
        cfg.out_dir = out.clone();
    }
    if let Some(engine) = &overrides.ocr_engine {
        cfg.ocr_engine = engine.clone();
    }
    if let Some(threads) = overrides.threads {
        cfg.ocr_threads = threads;
    }
    if let Some(schedule) = overrides.schedule {
        cfg.schedule = schedule;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads the corpus and produces the split this run trains/evaluates on.
fn resolve_split(cfg: &RunConfig, seed: u64) -> Result<DatasetSplit> {
    let random_split = |sizes: (usize, usize, usize)| -> Result<DatasetSplit> {
        let corpus = data::load_corpus(&cfg.image_root, &cfg.text_root, cfg.layout)?;
        if corpus.missing_text > 0 {
            eprintln!(
                "warning: {} samples had no stem-matched text file (kept with empty text)",
                corpus.missing_text
            );
        }
        if cfg.split_stratified {
            data::split_stratified(&corpus.samples, corpus.class_names, seed, sizes)
        } else {
            data::split_random(&corpus.samples, corpus.class_names, seed, sizes)
        }
    };
    match (cfg.layout, cfg.split_sizes) {
        (_, Some([tr, va, te])) => random_split((tr, va, te)),
        (CorpusLayout::FolderPerClass, None) => Err(Error::InvalidConfig(
            "folder-per-class layout requires split_sizes".into(),
        )),
        (CorpusLayout::IndexFile, None) => {
            data::load_index_split(&cfg.image_root, &cfg.text_root)
        }
    }
}

/// Uses configured statistics or computes them from the training split.
fn resolve_stats(cfg: &RunConfig, train_samples: &[data::DocumentSample]) -> Result<([f64; 3], [f64; 3])> {
    match (cfg.channel_mean, cfg.channel_std) {
        (Some(mean), Some(std)) => Ok((mean, std)),
        _ => {
            let images: Vec<PageImage> = train_samples
                .iter()
                .map(|s| PageImage::load(&s.image_path))
                .collect::<Result<_>>()?;
            sidetune::vision::compute_channel_stats(&images, cfg.input_side)
        }
    }
}

struct PreparedRun {
    cfg: RunConfig,
    split: DatasetSplit,
    table: EmbeddingTable,
    train_set: PreparedDataset,
    val_set: PreparedDataset,
    test_set: PreparedDataset,
    resolved: RunConfig,
    oov_total: usize,
}

fn prepare_run(cfg: RunConfig) -> Result<PreparedRun> {
    let split = resolve_split(&cfg, cfg.seed)?;
    let table = EmbeddingTable::load_with_sidecar(&cfg.embedding_file)?;
    let (mean, std) = resolve_stats(&cfg, &split.train)?;
    let vision = cfg.vision_config(mean, std)?;
    let num_classes = split.class_names.len().max(1);
    let text_cfg = cfg.text_config(num_classes);
    let policy = cfg.oov_policy.into();
    let mut oov_total = 0;
    let mut prep = |samples: &[data::DocumentSample]| -> Result<PreparedDataset> {
        if samples.is_empty() {
            return Ok(PreparedDataset {
                samples: Vec::new(),
                num_classes,
            });
        }
        let (set, oov) = train::prepare(samples, num_classes, &vision, &text_cfg, &table, policy)?;
        oov_total += oov;
        Ok(set)
    };
    let train_set = prep(&split.train)?;
    let val_set = prep(&split.val)?;
    let test_set = prep(&split.test)?;
    let resolved = cfg.resolved(mean, std);
    Ok(PreparedRun {
        cfg,
        split,
        table,
        train_set,
        val_set,
        test_set,
        resolved,
        oov_total,
    })
}

fn write_manifest(run: &PreparedRun) -> Result<String> {
    let out_dir = &run.cfg.out_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest = run.resolved.manifest_toml();
    let path = out_dir.join("manifest.toml");
    std::fs::write(&path, &manifest).map_err(|e| Error::io(&path, e))?;
    Ok(run.resolved.config_hash())
}

fn run_meta(run: &PreparedRun) -> RunMeta {
    let backbone_init = match &run.cfg.backbone_weights {
        Some(path) => path.display().to_string(),
        None => format!("random:{}", run.cfg.seed),
    };
    RunMeta {
        class_names: run.split.class_names.clone(),
        split_seed: run.cfg.seed,
        embedding_source: run.table.source.clone(),
        backbone_init,
    }
}

fn load_pretrained(
    cfg: &RunConfig,
) -> Result<Option<sidetune::checkpoint::NamedTensors>> {
    match &cfg.backbone_weights {
        Some(path) => Ok(Some(checkpoint::load_tensors(path)?)),
        None => Ok(None),
    }
}

pub fn cmd_train(config_path: &Path, overrides: &Overrides) -> Result<()> {
    let cfg = load_config(config_path, overrides)?;
    let run = prepare_run(cfg)?;
    let config_hash = write_manifest(&run)?;
    let num_classes = run.split.class_names.len();
    let vision = run
        .resolved
        .vision_config(run.resolved.channel_mean.unwrap(), run.resolved.channel_std.unwrap())?;
    let spec = run.cfg.model_spec(num_classes, vision);
    let mut model = FusedEncoder::build(spec)?;
    if let Some(tensors) = load_pretrained(&run.cfg)? {
        model.load_pretrained_backbone(&tensors)?;
        println!(
            "backbone initialized from {}",
            run.cfg.backbone_weights.as_ref().unwrap().display()
        );
    }
    println!("{}", model.param_report());
    println!("config hash: {config_hash}");
    if run.oov_total > 0 {
        println!("out-of-vocabulary substitutions: {}", run.oov_total);
    }

    let meta = run_meta(&run);
    let train_cfg = run.cfg.train_config();
    let val = (!run.val_set.is_empty()).then_some(&run.val_set);
    let outcome = train::train(&mut model, &run.train_set, val, &train_cfg, &meta)?;
    if outcome.base_hash_before != outcome.base_hash_after {
        return Err(Error::CheckpointMismatch(
            "frozen base weights changed during training".into(),
        ));
    }

    let out_dir = &run.cfg.out_dir;
    report::write_history_jsonl(&out_dir.join("history.jsonl"), &outcome.history)?;
    let mut table = String::from("epoch  lr_end   train_loss  train_acc  val_loss  val_acc\n");
    for r in &outcome.history {
        table.push_str(&format!(
            "{:>5}  {:>7.5}  {:>10.4}  {:>9.4}  {:>8}  {:>7}\n",
            r.epoch,
            r.lr_end,
            r.train_loss,
            r.train_accuracy,
            r.val_loss.map_or("-".into(), |v| format!("{v:.4}")),
            r.val_accuracy.map_or("-".into(), |v| format!("{v:.4}")),
        ));
    }
    std::fs::write(out_dir.join("history.txt"), &table)
        .map_err(|e| Error::io(out_dir.join("history.txt"), e))?;

    // Final evaluation on the test split when one exists.
    let mut summary = serde_json::json!({
        "config_hash": config_hash,
        "classes": run.split.class_names,
        "best_epoch": outcome.best_epoch,
        "best_val_accuracy": outcome.best_val_accuracy,
        "base_hash_before": outcome.base_hash_before,
        "base_hash_after": outcome.base_hash_after,
        "oov_substitutions": run.oov_total,
        "best_checkpoint": outcome.best_checkpoint,
        "final_checkpoint": outcome.final_checkpoint,
    });
    if !run.test_set.is_empty() {
        let report_eval = train::evaluate(&mut model, &run.test_set, run.cfg.batch_size)?;
        let rendered = report::render_eval_table(&report_eval, &run.split.class_names);
        std::fs::write(out_dir.join("eval_table.txt"), &rendered)
            .map_err(|e| Error::io(out_dir.join("eval_table.txt"), e))?;
        report::write_json(&out_dir.join("eval_report.json"), &report_eval)?;
        summary["test_overall_accuracy"] =
            serde_json::json!(report_eval.overall_accuracy);
        println!("test overall accuracy: {:.4}", report_eval.overall_accuracy);
        print!("{rendered}");
    }
    report::write_json(&out_dir.join("summary.json"), &summary)?;
    println!(
        "artifacts written to {} (manifest, history, checkpoints)",
        out_dir.display()
    );
    Ok(())
}

pub fn cmd_eval(
    checkpoint_path: &Path,
    config_path: &Path,
    split_name: &str,
    overrides: &Overrides,
) -> Result<()> {
    let cfg = load_config(config_path, overrides)?;
    let (mut model, meta) = checkpoint::load(checkpoint_path)?;
    if cfg.backbone != model.spec.vision.backbone {
        return Err(Error::CheckpointMismatch(format!(
            "config backbone {} differs from checkpoint backbone {}",
            cfg.backbone, model.spec.vision.backbone
        )));
    }
    // The checkpoint's recorded split seed reproduces its membership.
    let split = resolve_split(&cfg, meta.split_seed)?;
    if split.class_names.len() != model.num_classes() {
        return Err(Error::CheckpointMismatch(format!(
            "dataset has {} classes but checkpoint head expects {}",
            split.class_names.len(),
            model.num_classes()
        )));
    }
    let samples = match split_name {
        "train" => &split.train,
        "val" => &split.val,
        "test" => &split.test,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown split {other:?}; expected train, val, or test"
            )))
        }
    };
    let table = EmbeddingTable::load_with_sidecar(&cfg.embedding_file)?;
    let (set, _) = train::prepare(
        samples,
        split.class_names.len(),
        &model.spec.vision.clone(),
        &model.spec.text.clone(),
        &table,
        cfg.oov_policy.into(),
    )?;
    let report_eval = train::evaluate(&mut model, &set, cfg.batch_size)?;

    let out_dir = overrides.out.clone().unwrap_or_else(|| cfg.out_dir.join("eval"));
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let rendered = report::render_eval_table(&report_eval, &split.class_names);
    std::fs::write(out_dir.join(format!("eval_{split_name}.txt")), &rendered)
        .map_err(|e| Error::io(&out_dir, e))?;
    report::write_json(&out_dir.join(format!("eval_{split_name}.json")), &report_eval)?;
    print!("{rendered}");
    println!("overall accuracy: {:.4}", report_eval.overall_accuracy);
    Ok(())
}

#[derive(Debug, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    alphas: Vec<Vec<f64>>,
    /// Dense-layer widths; 0 means no dense layer.
    #[serde(default)]
    fc_widths: Option<Vec<usize>>,
    #[serde(default)]
    backbones: Option<Vec<String>>,
}

pub fn cmd_sweep(
    config_path: &Path,
    grid_path: &Path,
    parallel: usize,
    overrides: &Overrides,
) -> Result<()> {
    let cfg = load_config(config_path, overrides)?;
    let grid_body =
        std::fs::read_to_string(grid_path).map_err(|e| Error::io(grid_path, e))?;
    let grid: GridFile = toml::from_str(&grid_body)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", grid_path.display())))?;

    // Fail-fast validation of the whole grid before any training starts.
    for alphas in &grid.alphas {
        sidetune::fusion::AlphaConfig::new(alphas.clone())?;
    }
    let fc_widths: Vec<Option<usize>> = grid
        .fc_widths
        .clone()
        .unwrap_or_else(|| vec![cfg.fc_width.unwrap_or(0)])
        .into_iter()
        .map(|w| if w == 0 { None } else { Some(w) })
        .collect();
    for w in fc_widths.iter().flatten() {
        if !sidetune::fusion::ALLOWED_FC_WIDTHS.contains(w) {
            return Err(Error::InvalidWidth(*w));
        }
    }
    let backbones: Vec<sidetune::vision::BackboneKind> = match &grid.backbones {
        Some(names) => names
            .iter()
            .map(|n| n.parse())
            .collect::<Result<Vec<_>>>()?,
        None => vec![cfg.backbone],
    };

    let run = prepare_run(cfg)?;
    let config_hash = write_manifest(&run)?;
    println!("config hash: {config_hash}");
    let pretrained = load_pretrained(&run.cfg)?;
    let meta = run_meta(&run);
    let num_classes = run.split.class_names.len();
    let val = (!run.val_set.is_empty()).then_some(&run.val_set);
    let test_set = if run.test_set.is_empty() {
        &run.train_set
    } else {
        &run.test_set
    };

    let jobs: Vec<SweepJob> = grid
        .alphas
        .iter()
        .flat_map(|alphas| {
            fc_widths.iter().map(|fc| SweepJob {
                alphas: alphas.clone(),
                fc_width: *fc,
            })
        })
        .collect();
    println!(
        "sweep: {} alpha configs x {} fc variants x {} backbones = {} runs",
        grid.alphas.len(),
        fc_widths.len(),
        backbones.len(),
        jobs.len() * backbones.len()
    );

    for backbone in backbones {
        let mut vision = run
            .resolved
            .vision_config(run.resolved.channel_mean.unwrap(), run.resolved.channel_std.unwrap())?;
        vision.backbone = backbone;
        let template = {
            let mut spec = run.cfg.model_spec(num_classes, vision);
            spec.vision.backbone = backbone;
            spec
        };
        let mut cfg_train = run.cfg.train_config();
        cfg_train.checkpoint_dir = Some(run.cfg.out_dir.join(format!("sweep_{backbone}")));
        let rows = train::sweep_alphas(
            &jobs,
            &template,
            &run.train_set,
            val,
            test_set,
            &cfg_train,
            &meta,
            parallel.max(1),
            pretrained.as_ref(),
        )?;
        let out_dir = &run.cfg.out_dir;
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let table = report::render_sweep_table(&rows);
        std::fs::write(out_dir.join(format!("sweep_{backbone}.txt")), &table)
            .map_err(|e| Error::io(out_dir, e))?;
        std::fs::write(
            out_dir.join(format!("sweep_{backbone}.tsv")),
            report::render_sweep_tsv(&rows),
        )
        .map_err(|e| Error::io(out_dir, e))?;
        std::fs::write(
            out_dir.join(format!("sweep_{backbone}.svg")),
            report::sweep_plot_svg(&rows, &format!("accuracy vs alpha configuration ({backbone})")),
        )
        .map_err(|e| Error::io(out_dir, e))?;
        report::write_json(&out_dir.join(format!("sweep_{backbone}.json")), &rows)?;
        print!("{table}");
    }
    Ok(())
}

fn load_table_for_inference(
    embedding: Option<&Path>,
    meta: &RunMeta,
) -> Result<EmbeddingTable> {
    let path = match embedding {
        Some(p) => p.to_path_buf(),
        None => PathBuf::from(&meta.embedding_source),
    };
    if !path.is_file() {
        return Err(Error::MissingRoot(path));
    }
    EmbeddingTable::load_with_sidecar(&path)
}

fn ocr_client(overrides: &Overrides) -> OcrClient {
    let mut client = OcrClient::default();
    if let Some(engine) = &overrides.ocr_engine {
        client.engine = engine.clone();
    }
    if let Some(threads) = overrides.threads {
        client.threads = threads;
    }
    client
}

fn run_single_document(
    checkpoint_path: &Path,
    image: &Path,
    text_file: Option<&Path>,
    embedding: Option<&Path>,
    runs: usize,
    overrides: &Overrides,
) -> Result<()> {
    let (mut model, meta) = checkpoint::load(checkpoint_path)?;
    let table = load_table_for_inference(embedding, &meta)?;
    let client = ocr_client(overrides);
    let source = match text_file {
        Some(path) => TextSource::File(path),
        None => TextSource::Ocr(&client),
    };
    let out = profile_inference(&mut model, image, &source, &table, runs)?;
    let label = meta
        .class_names
        .get(out.predicted_class)
        .cloned()
        .unwrap_or_else(|| out.predicted_class.to_string());
    println!("predicted class: {label} (index {})", out.predicted_class);
    let scores: Vec<String> = out.scores.iter().map(|s| format!("{s:.6}")).collect();
    println!("scores: [{}]", scores.join(", "));
    print!("{}", out.timings);
    if let Some(dir) = &overrides.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let record = serde_json::json!({
            "predicted_class": out.predicted_class,
            "label": label,
            "scores": out.scores.to_vec(),
            "timings": out.timings,
        });
        report::write_json(&dir.join("prediction.json"), &record)?;
    }
    Ok(())
}

pub fn cmd_predict(
    checkpoint_path: &Path,
    image: &Path,
    text_file: Option<&Path>,
    embedding: Option<&Path>,
    overrides: &Overrides,
) -> Result<()> {
    run_single_document(checkpoint_path, image, text_file, embedding, 1, overrides)
}

pub fn cmd_profile(
    checkpoint_path: &Path,
    image: &Path,
    text_file: Option<&Path>,
    embedding: Option<&Path>,
    runs: usize,
    overrides: &Overrides,
) -> Result<()> {
    run_single_document(checkpoint_path, image, text_file, embedding, runs, overrides)
}
