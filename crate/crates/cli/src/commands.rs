use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use vioc_core::data::{
    attribute_vocabulary, load_corpus, merge_equivalent_aspects_with_stats, sample_zero_shot_split, validate_split,
    write_corpus, AcceptAllImages, LocalImages, Partition, ProductRecord, SynonymMap, ZeroShotSplit,
};
use vioc_core::eval::{align, evaluate, format_table, report_by_group, GroupKey, GroupRow, MetricsReport};
use vioc_core::infer::{infer_batch, InferenceConfig, PredictionRow};
use vioc_core::models::protocol::{CachedTransport, LocalTransport, ProcessTransport, RemoteModels};
use vioc_core::models::stub::StubModels;
use vioc_core::models::{Adapters, ImageRef};
use vioc_core::synth::{desk_train_config, generate, write_fixture, SynthConfig};
use vioc_core::train::{prepare_examples, train_decoder, DecoderCheckpoint, EpochLog};

use crate::config::{Backend, PipelineConfig};
use crate::CliError;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| runtime(format!("{}: {e}", parent.display())))?;
    }
    let mut tmp = path.as_os_str().to_os_string();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)
        .and_then(|_| std::fs::rename(&tmp, path))
        .map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn read_records(path: &Path) -> Result<Vec<ProductRecord>, CliError> {
    require_file(path, "corpus")?;
    Ok(load_corpus(path, &AcceptAllImages).map_err(runtime)?.records)
}

fn read_split(config: &PipelineConfig) -> Result<ZeroShotSplit, CliError> {
    let path = config.split_file();
    require_file(&path, "split file")?;
    ZeroShotSplit::load(&path).map_err(runtime)
}

fn select(split: &ZeroShotSplit, partition: Partition, records: &[ProductRecord]) -> Result<Vec<ProductRecord>, CliError> {
    Ok(split
        .select(partition, records)
        .map_err(runtime)?
        .into_iter()
        .cloned()
        .collect())
}

pub fn prepare(config: &PipelineConfig) -> Result<(), CliError> {
    require_file(&config.corpus, "corpus")?;
    let synonyms = match &config.synonyms {
        Some(path) => {
            require_file(path, "synonym map")?;
            SynonymMap::load(path).map_err(|e| CliError::Config(e.to_string()))?
        }
        None => SynonymMap::default(),
    };
    let loaded = load_corpus(&config.corpus, &LocalImages::new(&config.image_root)).map_err(runtime)?;
    let (records, stats) = merge_equivalent_aspects_with_stats(loaded.records, &synonyms);
    let mut out = Vec::new();
    write_corpus(&records, &mut out).map_err(runtime)?;
    let path = config.normalized_corpus();
    write_atomic(&path, &out)?;
    println!("records kept: {}", records.len());
    println!(
        "records dropped: {} (missing image: {}, without aspects: {})",
        loaded.dropped_missing_image.len() + loaded.dropped_without_aspects.len(),
        loaded.dropped_missing_image.len(),
        loaded.dropped_without_aspects.len()
    );
    println!("aspects rewritten: {}, collapsed: {}", stats.rewritten, stats.collapsed);
    println!("wrote {}", path.display());
    Ok(())
}

pub fn split(config: &PipelineConfig) -> Result<(), CliError> {
    let records = read_records(&config.normalized_corpus())?;
    let split = sample_zero_shot_split(&records, config.split.unseen_fraction, config.split.seed).map_err(runtime)?;
    let report = validate_split(&split, &records).map_err(runtime)?;
    let path = config.split_file();
    write_atomic(&path, split.to_json().as_bytes())?;
    println!(
        "train {}, val {}, test {}; seen aspects {}, unseen aspects {}",
        split.train_ids.len(),
        split.val_ids.len(),
        split.test_ids.len(),
        split.seen_aspects.len(),
        split.unseen_aspects.len()
    );
    print!("{report}");
    println!("wrote {}", path.display());
    if report.passed() {
        Ok(())
    } else {
        Err(runtime("split failed validation"))
    }
}

pub fn build_adapters(config: &PipelineConfig) -> Result<Adapters, CliError> {
    let settings = &config.adapters;
    let models = settings.models.clone();
    let cache_dir = std::env::var_os("VIOC_CACHE_DIR")
        .map(PathBuf::from)
        .or_else(|| settings.cache_dir.clone());
    let adapters = match settings.backend {
        Backend::Stub => {
            let stub = StubModels::new(&config.image_root)
                .with_config(models.clone())
                .with_noise(settings.stub_noise);
            match cache_dir {
                Some(dir) => Adapters::from_single(RemoteModels::new(
                    CachedTransport::new(LocalTransport(stub), dir, models.clone()).map_err(runtime)?,
                    models,
                )),
                None => Adapters::from_single(stub),
            }
        }
        Backend::Process => {
            let transport = ProcessTransport::spawn(&settings.command).map_err(runtime)?;
            let dir = cache_dir.unwrap_or_else(|| config.output_dir.join("cache"));
            Adapters::from_single(RemoteModels::new(
                CachedTransport::new(transport, dir, models.clone()).map_err(runtime)?,
                models,
            ))
        }
    };
    adapters.check_shared_space(&settings.models).map_err(runtime)?;
    Ok(adapters)
}

pub fn train(config: &PipelineConfig, resume: bool) -> Result<(), CliError> {
    let records = read_records(&config.normalized_corpus())?;
    let split = read_split(config)?;
    let train_records = select(&split, Partition::Train, &records)?;
    let val_records = select(&split, Partition::Val, &records)?;
    let checkpoint_path = config.checkpoint();
    let previous = if resume {
        require_file(&checkpoint_path, "checkpoint")?;
        Some(DecoderCheckpoint::load(&checkpoint_path).map_err(runtime)?)
    } else {
        None
    };
    let adapters = build_adapters(config)?;
    info!(
        "embedding {} training and {} validation products",
        train_records.len(),
        val_records.len()
    );
    let train_examples = prepare_examples(&train_records, &adapters).map_err(runtime)?;
    let val_examples = prepare_examples(&val_records, &adapters).map_err(runtime)?;
    let outcome = train_decoder(&train_examples, &val_examples, &config.train, previous).map_err(runtime)?;
    outcome.checkpoint.save(&checkpoint_path).map_err(runtime)?;

    let log_path = config.train_log();
    let mut log = Vec::new();
    if resume {
        if let Ok(existing) = std::fs::read(&log_path) {
            log.extend(existing);
        }
    }
    for entry in &outcome.log {
        serde_json::to_writer(&mut log, entry).map_err(runtime)?;
        log.push(b'\n');
    }
    write_atomic(&log_path, &log)?;
    let last: Option<&EpochLog> = outcome.log.last();
    println!(
        "epochs run: {}{}; best epoch {} with validation loss {:.4}",
        outcome.log.len(),
        if outcome.stopped_early { " (early stop)" } else { "" },
        outcome.checkpoint.meta.epoch,
        outcome.checkpoint.meta.val_loss
    );
    if let Some(last) = last {
        println!("final training loss {:.4}", last.train_loss);
    }
    println!("wrote {} and {}", checkpoint_path.display(), log_path.display());
    Ok(())
}

pub fn infer(config: &PipelineConfig, partition: Partition) -> Result<(), CliError> {
    let records = read_records(&config.normalized_corpus())?;
    let split = read_split(config)?;
    let checkpoint_path = config.checkpoint();
    require_file(&checkpoint_path, "checkpoint")?;
    let checkpoint = DecoderCheckpoint::load(&checkpoint_path).map_err(runtime)?;
    if checkpoint.embedding_dim() != config.adapters.models.embedding_dim {
        return Err(CliError::Config(format!(
            "checkpoint expects {}-dimensional embeddings, adapters produce {}",
            checkpoint.embedding_dim(),
            config.adapters.models.embedding_dim
        )));
    }
    let train_records = select(&split, Partition::Train, &records)?;
    let targets = select(&split, partition, &records)?;
    let mut inference = InferenceConfig::with_vocabulary(attribute_vocabulary(&train_records));
    inference.tau_d = config.inference.tau_d;
    inference.tau_c = config.inference.tau_c;
    inference.use_prompts = config.inference.use_prompts;
    inference.use_ocr = config.inference.use_ocr;

    let path = config.predictions(&partition.to_string());
    if targets.is_empty() {
        write_atomic(&path, b"")?;
        println!("partition {partition} is empty; wrote {}", path.display());
        return Ok(());
    }
    let adapters = build_adapters(config)?;
    let images: Vec<ImageRef> = targets.iter().map(|r| ImageRef::new(r.image_ref.clone())).collect();
    let results =
        infer_batch(&images, &checkpoint, &adapters, &inference, config.inference.workers).map_err(runtime)?;
    let mut out = Vec::new();
    let mut failed = 0;
    for (record, result) in targets.iter().zip(&results) {
        if let Err(e) = result {
            warn!("{}: {e}", record.id);
            failed += 1;
        }
        serde_json::to_writer(&mut out, &PredictionRow::from_result(&record.id, result)).map_err(runtime)?;
        out.push(b'\n');
    }
    write_atomic(&path, &out)?;
    println!(
        "{} predictions for partition {partition} ({failed} failed); wrote {}",
        results.len(),
        path.display()
    );
    if failed == results.len() {
        return Err(runtime("every image failed"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub overall: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub by_category: Option<Vec<GroupRow>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub by_attribute: Option<Vec<GroupRow>>,
}

impl Report {
    pub fn table(&self) -> String {
        let mut groups = Vec::new();
        if let Some(rows) = &self.by_category {
            groups.push((GroupKey::Category, rows.clone()));
        }
        if let Some(rows) = &self.by_attribute {
            groups.push((GroupKey::Attribute, rows.clone()));
        }
        format_table(&self.overall, &groups)
    }
}

pub struct EvaluateArgs {
    pub predictions: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub partition: Partition,
    pub by_category: bool,
    pub by_attribute: bool,
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>, CliError> {
    require_file(path, "predictions file")?;
    let text = std::fs::read_to_string(path).map_err(runtime)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| runtime(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn evaluate_cmd(config: Option<&PipelineConfig>, args: &EvaluateArgs) -> Result<(), CliError> {
    let need = |what: &str| CliError::Config(format!("{what} needs --config or an explicit path"));
    let predictions_path = match (&args.predictions, config) {
        (Some(p), _) => p.clone(),
        (None, Some(c)) => c.predictions(&args.partition.to_string()),
        (None, None) => return Err(need("--predictions")),
    };
    let gold = match (&args.gold, config) {
        (Some(p), _) => read_records(p)?,
        (None, Some(c)) => {
            let records = read_records(&c.normalized_corpus())?;
            select(&read_split(c)?, args.partition, &records)?
        }
        (None, None) => return Err(need("--gold")),
    };
    let output_dir = match (&args.output_dir, config) {
        (Some(p), _) => p.clone(),
        (None, Some(c)) => c.output_dir.clone(),
        (None, None) => return Err(need("--output-dir")),
    };
    let rows = read_predictions(&predictions_path)?;
    let scored = align(&rows, &gold).map_err(runtime)?;
    let report = Report {
        overall: evaluate(&scored).map_err(runtime)?,
        by_category: args
            .by_category
            .then(|| report_by_group(&scored, GroupKey::Category)),
        by_attribute: args
            .by_attribute
            .then(|| report_by_group(&scored, GroupKey::Attribute)),
    };
    let mut json = serde_json::to_string_pretty(&report).map_err(runtime)?;
    json.push('\n');
    let table = report.table();
    write_atomic(&output_dir.join("report.json"), json.as_bytes())?;
    write_atomic(&output_dir.join("report.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

pub fn report_cmd(path: &Path) -> Result<(), CliError> {
    require_file(path, "report")?;
    let text = std::fs::read_to_string(path).map_err(runtime)?;
    let report: Report = serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    print!("{}", report.table());
    Ok(())
}

pub fn synth(dir: &Path, products: usize, seed: u64) -> Result<(), CliError> {
    let config = SynthConfig {
        products,
        seed,
        ..SynthConfig::default()
    };
    let fixture = write_fixture(&generate(&config), dir).map_err(runtime)?;
    let pipeline = PipelineConfig {
        corpus: "raw.jsonl".into(),
        synonyms: Some("synonyms.json".into()),
        image_root: "images".into(),
        output_dir: "out".into(),
        split: Default::default(),
        adapters: Default::default(),
        train: desk_train_config(),
        inference: Default::default(),
    };
    let mut json = serde_json::to_string_pretty(&pipeline).map_err(runtime)?;
    json.push('\n');
    let config_path = dir.join("config.json");
    write_atomic(&config_path, json.as_bytes())?;
    println!("wrote {} products to {}", products, fixture.corpus.display());
    println!("config: {}", config_path.display());
    Ok(())
}

pub fn stub_adapter(images: &Path, noise: f64, dim: usize) -> Result<(), CliError> {
    if !(0.0..1.0).contains(&noise) || dim == 0 {
        return Err(CliError::Config("noise must lie in [0, 1) and dim must be positive".into()));
    }
    let models = StubModels::new(images).with_dim(dim).with_noise(noise);
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    vioc_core::models::protocol::serve(&models, stdin.lock(), stdout.lock()).map_err(runtime)?;
    std::io::stdout().flush().map_err(runtime)
}
