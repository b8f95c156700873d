//! End-to-end stages over an output directory: preprocessing (frequencies,
//! class map, vocabulary), training with checkpoints and a metrics log,
//! evaluation and pairwise comparison. Every artifact carries the hash of the
//! configuration that produced it, and stages refuse inputs whose hash does
//! not match.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::classmap::{build_classmap, classmap_stats, count_frequencies, ClassMap, ClassMapStats, TokenFrequencies};
use crate::config::RunConfig;
use crate::corpus::read_tokens;
use crate::error::{Error, Result};
use crate::eval::{compare_scores, report_from_scores, score_stream, EvalReport, PairwiseReport};
use crate::model::checkpoint::{Checkpoint, CheckpointHeader};
use crate::model::{LanguageModel, Supports};
use crate::train::{self, read_metrics, write_record, MetricRecord, TrainData, TrainState};
use crate::vocab::{build_partition, TokenId, VocabPartition};
use crate::wordnet::WordNetDb;

pub const CLASSMAP_FILE: &str = "classmap.tsv";
pub const FREQS_FILE: &str = "freqs.tsv";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const STATS_FILE: &str = "classmap_stats.json";
pub const RUN_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

const HASH_KEY: &str = "preprocess_hash=";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(OutputLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Validation(format!(
                "output directory {} is locked by another process (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Everything preprocessing produces.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub preprocess_hash: String,
    pub wordnet_version: String,
    pub freqs: TokenFrequencies,
    pub classmap: ClassMap,
    pub stats: ClassMapStats,
    pub part: VocabPartition,
    pub supports: Supports,
    pub train: Vec<TokenId>,
    pub valid: Vec<TokenId>,
    pub test: Option<Vec<TokenId>>,
    /// Seconds spent building the class map (0 when read from cache).
    pub classmap_seconds: f64,
}

impl Prepared {
    pub fn split(&self, name: &str) -> Result<&[TokenId]> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => self
                .test
                .as_deref()
                .ok_or_else(|| Error::Config("no test split configured (data.test)".into())),
            other => Err(Error::Config(format!("unknown split `{other}` (train, valid or test)"))),
        }
    }
}

fn header_hash(extra: &[String]) -> Option<&str> {
    extra.iter().find_map(|l| l.trim_start_matches('#').trim().strip_prefix(HASH_KEY))
}

/// Loads the corpus, builds (or reuses a matching cached) class map and the
/// vocabulary partition. A cached `classmap.tsv` with a different hash is refused.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let train_tokens = read_tokens(&cfg.data.train, cfg.data.add_eos)?;
    let freqs = count_frequencies(&train_tokens);
    let cached = cfg.output_dir.join(CLASSMAP_FILE);
    let (classmap, wordnet_version, hash, seconds) = if cached.exists() {
        let (map, extra) = ClassMap::load(&cached)?;
        let version = map.provenance.wordnet.clone();
        let hash = cfg.preprocess_hash(&version)?;
        match header_hash(&extra) {
            Some(h) if h == hash => {}
            found => {
                return Err(Error::HashMismatch {
                    expected: hash,
                    found: format!("{} in {}", found.unwrap_or("none"), cached.display()),
                })
            }
        }
        (map, version, hash, 0.0)
    } else {
        let db = WordNetDb::load(cfg.wordnet_path()?)?;
        let started = Instant::now();
        let map = build_classmap(&freqs, &db, cfg.classmap, &cfg.corpus_id())?;
        let seconds = started.elapsed().as_secs_f64();
        let version = db.version().to_string();
        let hash = cfg.preprocess_hash(&version)?;
        (map, version, hash, seconds)
    };
    let part = build_partition(&freqs, &classmap, cfg.vocab.unk_threshold)?;
    let supports = Supports::new(&part)?;
    let encode = |path: &Path| -> Result<Vec<TokenId>> { Ok(part.encode(&read_tokens(path, cfg.data.add_eos)?)) };
    let train = part.encode(&train_tokens);
    let valid = encode(&cfg.data.valid)?;
    let test = cfg.data.test.as_deref().map(encode).transpose()?;
    let stats = classmap_stats(&classmap);
    Ok(Prepared {
        preprocess_hash: hash,
        wordnet_version,
        freqs,
        classmap,
        stats,
        part,
        supports,
        train,
        valid,
        test,
        classmap_seconds: seconds,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsFile {
    pub preprocess_hash: String,
    pub wordnet: String,
    pub corpus: String,
    pub depth: usize,
    pub freq_threshold: String,
    pub num_classes: usize,
    pub num_mapped_tokens: usize,
    pub class_size_histogram: std::collections::BTreeMap<usize, usize>,
    pub corpus_tokens: u64,
    pub corpus_types: usize,
    pub vocab_size: usize,
    pub n_mapped: usize,
    pub n_unmapped: usize,
    pub n_classes: usize,
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        source: e,
    })?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Writes `classmap.tsv`, `freqs.tsv`, `vocab.tsv` and `classmap_stats.json`.
/// Always rebuilds from WordNet; output is byte-identical across runs.
pub fn build_classmap_stage(cfg: &RunConfig) -> Result<(Prepared, StatsFile)> {
    let _lock = OutputLock::acquire(&cfg.output_dir)?;
    let cached = cfg.output_dir.join(CLASSMAP_FILE);
    if cached.exists() {
        fs::remove_file(&cached)?;
    }
    let prep = prepare(cfg)?;
    write_preprocess_artifacts(cfg, &prep)
}

fn write_preprocess_artifacts(cfg: &RunConfig, prep: &Prepared) -> Result<(Prepared, StatsFile)> {
    let out = &cfg.output_dir;
    let stamp = vec![format!("# {HASH_KEY}{}", prep.preprocess_hash)];
    write_file(&out.join(FREQS_FILE), |w| {
        writeln!(w, "{}", stamp[0])?;
        prep.freqs.write_tsv(w)
    })?;
    write_file(&out.join(VOCAB_FILE), |w| prep.part.write_tsv(w, &stamp))?;
    let stats = StatsFile {
        preprocess_hash: prep.preprocess_hash.clone(),
        wordnet: prep.wordnet_version.clone(),
        corpus: cfg.corpus_id(),
        depth: cfg.classmap.depth,
        freq_threshold: cfg.classmap.freq_threshold.to_string(),
        num_classes: prep.stats.num_classes,
        num_mapped_tokens: prep.stats.num_mapped_tokens,
        class_size_histogram: prep.stats.class_size_histogram.clone(),
        corpus_tokens: prep.freqs.total(),
        corpus_types: prep.freqs.len(),
        vocab_size: prep.part.vocab_size(),
        n_mapped: prep.part.ids_in(crate::vocab::Subset::Mapped).count(),
        n_unmapped: prep.part.ids_in(crate::vocab::Subset::Unmapped).count(),
        n_classes: prep.part.n_classes(),
    };
    write_file(&out.join(STATS_FILE), |w| {
        serde_json::to_writer_pretty(&mut *w, &stats)?;
        writeln!(w)?;
        Ok(())
    })?;
    // written last: its presence marks a complete preprocessing stage
    write_file(&out.join(CLASSMAP_FILE), |w| prep.classmap.write_tsv(w, &stamp))?;
    Ok((prep.clone(), stats))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunInfo {
    pub config_hash: String,
    pub preprocess_hash: String,
    pub objective: String,
    pub seed: u64,
    pub wordnet: String,
    pub corpus: String,
    pub num_params: usize,
    pub vocab_size: usize,
    pub expected_hcp_steps: f64,
    pub config: RunConfig,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub config_hash: String,
    pub records: Vec<MetricRecord>,
}

fn checkpoint_for(state: &TrainState, cfg: &RunConfig, config_hash: &str, data_hash: &str) -> Checkpoint {
    Checkpoint {
        header: CheckpointHeader {
            config_hash: config_hash.to_string(),
            data_hash: data_hash.to_string(),
            step: state.step,
            seed: cfg.seed,
            objective: cfg.objective.as_str().to_string(),
            model: state.model.config,
            head: state.model.head,
            adam_updates: state.adam.updates,
        },
        params: state.model.params.clone(),
        adam: state.adam.clone(),
    }
}

fn latest_checkpoint(out: &Path) -> Option<PathBuf> {
    let fin = out.join(FINAL_CHECKPOINT);
    if fin.exists() {
        return Some(fin);
    }
    let mut steps: Vec<PathBuf> = fs::read_dir(out.join(CHECKPOINT_DIR))
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    steps.sort();
    steps.pop()
}

/// Trains per the config, writing `run.json`, `metrics.jsonl` and checkpoints.
/// With `resume`, continues from the newest checkpoint after checking its hash.
pub fn train_stage(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    let _lock = OutputLock::acquire(&cfg.output_dir)?;
    let out = &cfg.output_dir;
    let prep = if out.join(CLASSMAP_FILE).exists() {
        prepare(cfg)?
    } else {
        let prep = prepare(cfg)?;
        write_preprocess_artifacts(cfg, &prep)?.0
    };
    let config_hash = cfg.run_hash(&prep.preprocess_hash)?;
    let settings = cfg.train_settings()?;

    let metrics_path = out.join(METRICS_FILE);
    let mut records = Vec::new();
    let mut state = match (resume, latest_checkpoint(out)) {
        (true, Some(path)) => {
            let ck = Checkpoint::load(&path)?;
            ck.ensure_hash(&config_hash)?;
            let model = LanguageModel::new(ck.header.model, ck.params, ck.header.head)?;
            let step = ck.header.step;
            if metrics_path.exists() {
                records = read_metrics(BufReader::new(File::open(&metrics_path)?))?
                    .into_iter()
                    .filter(|r| r.completed_steps() <= step)
                    .collect();
            }
            TrainState {
                model,
                adam: ck.adam,
                step,
            }
        }
        _ => TrainState::fresh(cfg.model, prep.part.vocab_size(), cfg.objective, cfg.seed)?,
    };

    let info = RunInfo {
        config_hash: config_hash.clone(),
        preprocess_hash: prep.preprocess_hash.clone(),
        objective: cfg.objective.as_str().into(),
        seed: cfg.seed,
        wordnet: prep.wordnet_version.clone(),
        corpus: cfg.corpus_id(),
        num_params: state.model.num_params(),
        vocab_size: prep.part.vocab_size(),
        expected_hcp_steps: if cfg.objective == train::Objective::Hcp {
            settings.schedule.expected_hcp_steps()
        } else {
            0.0
        },
        config: cfg.clone(),
    };
    write_file(&out.join(RUN_FILE), |w| {
        serde_json::to_writer_pretty(&mut *w, &info)?;
        writeln!(w)?;
        Ok(())
    })?;

    let mut log = BufWriter::new(File::create(&metrics_path)?);
    for r in &records {
        write_record(&mut log, r)?;
    }
    let data = TrainData {
        part: &prep.part,
        supports: &prep.supports,
        train: &prep.train,
        valid: &prep.valid,
    };
    let total = settings.total_steps();
    let every = if cfg.train.checkpoint_every == 0 { total } else { cfg.train.checkpoint_every };
    fs::create_dir_all(out.join(CHECKPOINT_DIR))?;
    while state.step < total {
        let stop = ((state.step / every) + 1) * every;
        train::run(&mut state, &data, &settings, stop, |r| {
            write_record(&mut log, r)?;
            records.push(r.clone());
            Ok(())
        })?;
        log.flush()?;
        let ck = checkpoint_for(&state, cfg, &config_hash, &prep.preprocess_hash);
        ck.save(&out.join(CHECKPOINT_DIR).join(format!("step-{:08}.ckpt", state.step)))?;
    }
    log.flush()?;
    checkpoint_for(&state, cfg, &config_hash, &prep.preprocess_hash).save(&out.join(FINAL_CHECKPOINT))?;
    Ok(TrainOutcome {
        state,
        config_hash,
        records,
    })
}

/// Loads a checkpoint for evaluation, checking it was trained on this preprocessing.
pub fn load_model(path: &Path, prep: &Prepared) -> Result<(LanguageModel, CheckpointHeader)> {
    let ck = Checkpoint::load(path)?;
    if ck.header.data_hash != prep.preprocess_hash {
        return Err(Error::HashMismatch {
            expected: prep.preprocess_hash.clone(),
            found: format!("{} in {}", ck.header.data_hash, path.display()),
        });
    }
    let model = LanguageModel::new(ck.header.model, ck.params, ck.header.head)?;
    Ok((model, ck.header))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalFile {
    pub config_hash: String,
    pub preprocess_hash: String,
    pub checkpoint: PathBuf,
    pub split: String,
    pub report: EvalReport,
}

/// Evaluates a checkpoint on a split; writes `eval-<split>.json` and `.csv` into `out`.
pub fn eval_stage(cfg: &RunConfig, checkpoint: &Path, split: &str, out: &Path) -> Result<EvalFile> {
    let prep = prepare(cfg)?;
    let (model, header) = load_model(checkpoint, &prep)?;
    let ids = prep.split(split)?;
    let scores = score_stream(&model, &prep.part, &prep.supports, ids, cfg.train.eval_batch_size, None)?;
    let report = report_from_scores(&scores, &prep.part, &cfg.strata()?)?;
    let file = EvalFile {
        config_hash: header.config_hash.clone(),
        preprocess_hash: prep.preprocess_hash.clone(),
        checkpoint: checkpoint.to_path_buf(),
        split: split.to_string(),
        report,
    };
    fs::create_dir_all(out)?;
    write_file(&out.join(format!("eval-{split}.json")), |w| {
        serde_json::to_writer_pretty(&mut *w, &file)?;
        writeln!(w)?;
        Ok(())
    })?;
    let stamp = [format!("config_hash={}", file.config_hash), format!("{HASH_KEY}{}", file.preprocess_hash)];
    write_file(&out.join(format!("eval-{split}.csv")), |w| file.report.write_csv(w, &stamp))?;
    Ok(file)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareFile {
    pub preprocess_hash: String,
    pub model_a: PathBuf,
    pub model_b: PathBuf,
    pub config_hash_a: String,
    pub config_hash_b: String,
    pub split: String,
    pub report: PairwiseReport,
}

/// Pairwise comparison of two checkpoints trained on the same preprocessing;
/// writes `compare.json` and `compare.csv` into `out`.
pub fn compare_stage(cfg: &RunConfig, a: &Path, b: &Path, split: &str, out: &Path) -> Result<CompareFile> {
    let prep = prepare(cfg)?;
    let (ma, ha) = load_model(a, &prep)?;
    let (mb, hb) = load_model(b, &prep)?;
    let ids = prep.split(split)?;
    let bs = cfg.train.eval_batch_size;
    let sa = score_stream(&ma, &prep.part, &prep.supports, ids, bs, None)?;
    let sb = score_stream(&mb, &prep.part, &prep.supports, ids, bs, None)?;
    let report = compare_scores(&sa, &sb, &prep.part, &cfg.strata()?, cfg.eval.tie_epsilon)?;
    let file = CompareFile {
        preprocess_hash: prep.preprocess_hash.clone(),
        model_a: a.to_path_buf(),
        model_b: b.to_path_buf(),
        config_hash_a: ha.config_hash,
        config_hash_b: hb.config_hash,
        split: split.to_string(),
        report,
    };
    fs::create_dir_all(out)?;
    write_file(&out.join("compare.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &file)?;
        writeln!(w)?;
        Ok(())
    })?;
    let stamp = [
        format!("{HASH_KEY}{}", file.preprocess_hash),
        format!("config_hash_a={}", file.config_hash_a),
        format!("config_hash_b={}", file.config_hash_b),
    ];
    write_file(&out.join("compare.csv"), |w| file.report.write_csv(w, &stamp))?;
    Ok(file)
}

pub fn read_run_info(path: &Path) -> Result<RunInfo> {
    let f = File::open(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

/// Reads the `metrics.jsonl` of a run directory or file.
pub fn load_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let file = if path.is_dir() { path.join(METRICS_FILE) } else { path.to_path_buf() };
    let f = File::open(&file).map_err(|e| Error::Load { path: file.clone(), source: e })?;
    read_metrics(BufReader::new(f))
}

/// Lines of a file without `#` comments.
pub fn data_lines(path: &Path) -> Result<Vec<String>> {
    let f = File::open(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.starts_with('#') && !line.trim().is_empty() {
            out.push(line);
        }
    }
    Ok(out)
}
