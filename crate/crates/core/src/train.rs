//! End-to-end pipeline: pretrain with hard labels, generate soft targets from the
//! pretrained representations, then train a model with the configured objective.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    filter_min_count, load_interactions, synth_generate, Dataset, LoadOptions, LogStats, Sample, DEFAULT_MAX_LEN,
    DEFAULT_MIN_COUNT,
};
use crate::error::{Error, Result};
use crate::loss::{ce_onehot, coupled_loss, decompose, LossConfig, LossMode, SoftTarget};
use crate::metrics::{evaluate, Metrics, DEFAULT_KS};
use crate::model::{
    adam_step, backward_into, embed_samples, forward_cached, init_params, score_and_softmax, AdamState, Gradients,
    ModelKind, ModelParams,
};
use crate::softlabel::{generate_lp, generate_ls, generate_pop, one_hot_set, GeneratorKind, LpParams, LpProvenance, SoftTargetSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Planted-cluster synthetic log.
    Synth,
    /// Raw interaction file, filtered and split on load.
    File,
    /// Directory written by `Dataset::save`.
    Prepared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    pub events_per_user: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 500,
            items: 200,
            clusters: 4,
            events_per_user: 20,
            noise: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: PathBuf,
    pub min_count: usize,
    pub max_len: usize,
    pub load: LoadOptions,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            path: PathBuf::new(),
            min_count: DEFAULT_MIN_COUNT,
            max_len: DEFAULT_MAX_LEN,
            load: LoadOptions::default(),
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::MeanPoolEncoder,
            dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    pub k: usize,
    pub tau: f64,
    pub iterations: usize,
    pub max_cluster: usize,
    pub kmeans_iters: usize,
    pub min_prob: f64,
    pub ls_epsilon: f64,
    pub pop_weight: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let lp = LpParams::default();
        Self {
            kind: GeneratorKind::None,
            k: lp.k,
            tau: lp.tau,
            iterations: lp.iterations,
            max_cluster: lp.max_cluster,
            kmeans_iters: lp.kmeans_iters,
            min_prob: lp.min_prob,
            ls_epsilon: 0.1,
            pop_weight: 0.5,
        }
    }
}

impl GeneratorConfig {
    pub fn lp_params(&self) -> LpParams {
        LpParams {
            k: self.k,
            tau: self.tau,
            iterations: self.iterations,
            max_cluster: self.max_cluster,
            kmeans_iters: self.kmeans_iters,
            min_prob: self.min_prob,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub pretrain_epochs: usize,
    pub train_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without a new best validation NDCG@10 before stopping.
    pub patience: usize,
    /// Start final training from the pretrained parameters instead of a fresh init.
    pub warm_start: bool,
    pub ks: Vec<usize>,
    pub exclude_history: bool,
    /// Re-check loss-mode endpoint identities on every training sample.
    pub debug_checks: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 20,
            train_epochs: 20,
            batch_size: 256,
            lr: 1e-3,
            patience: 5,
            warm_start: false,
            ks: DEFAULT_KS.to_vec(),
            exclude_history: false,
            debug_checks: false,
        }
    }
}

/// Every knob of one experiment. Serialised as TOML; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub generator: GeneratorConfig,
    pub optim: OptimConfig,
}

fn parse_override(raw: &str, current: Option<&toml::Value>) -> toml::Value {
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    match (current, parsed) {
        (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (Some(toml::Value::String(_)), toml::Value::Integer(_) | toml::Value::Float(_) | toml::Value::Boolean(_)) => {
            toml::Value::String(raw.to_string())
        }
        (_, v) => v,
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serialises")
    }

    /// Sets a field by dotted key, e.g. `loss.lambda1` or `generator.kind`.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        let (last, parents) = parts.split_last().ok_or_else(|| Error::Config("empty key".into()))?;
        let mut node = &mut root;
        for p in parents {
            node = node
                .get_mut(*p)
                .filter(|v| v.is_table())
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        let value = parse_override(raw, table.get(*last));
        table.insert((*last).to_string(), value);
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}={raw}: {e}")))?;
        Ok(())
    }

    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.generator.kind == GeneratorKind::None
            && !matches!(self.loss.mode, LossMode::Ce | LossMode::Ls)
        {
            return Err(Error::Config(format!(
                "loss mode {:?} needs a soft-target generator",
                self.loss.mode
            )));
        }
        if self.generator.kind == GeneratorKind::Lp {
            if self.generator.k == 0 {
                return Err(Error::Config("generator.k must be at least 1".into()));
            }
            if !(self.generator.tau > 0.0) {
                return Err(Error::Config("generator.tau must be positive".into()));
            }
        }
        if !(0.0..1.0).contains(&self.generator.ls_epsilon) {
            return Err(Error::Config("generator.ls_epsilon must be in [0, 1)".into()));
        }
        if !(self.generator.pop_weight > 0.0 && self.generator.pop_weight < 1.0) {
            return Err(Error::Config("generator.pop_weight must be in (0, 1)".into()));
        }
        if self.model.dim == 0 {
            return Err(Error::Config("model.dim must be positive".into()));
        }
        if self.optim.batch_size == 0 {
            return Err(Error::Config("optim.batch_size must be positive".into()));
        }
        if !(self.optim.lr > 0.0) {
            return Err(Error::Config("optim.lr must be positive".into()));
        }
        if !self.optim.ks.contains(&10) {
            return Err(Error::Config("optim.ks must include 10 (model selection uses NDCG@10)".into()));
        }
        Ok(())
    }
}

/// Loads, filters and splits the configured dataset.
pub fn load_dataset(cfg: &DataConfig) -> Result<Dataset> {
    match cfg.source {
        DataSource::Prepared => Dataset::load(&cfg.path),
        DataSource::File => {
            let log = load_interactions(&cfg.path, &cfg.load)?;
            let log = filter_min_count(&log, cfg.min_count)?;
            Ok(Dataset::from_log(&log, cfg.max_len))
        }
        DataSource::Synth => {
            let s = &cfg.synth;
            let log = synth_generate(s.users, s.items, s.clusters, s.events_per_user, s.noise, s.seed)?;
            let log = filter_min_count(&log, cfg.min_count)?;
            Ok(Dataset::from_log(&log, cfg.max_len))
        }
    }
}

/// Statistics of the configured dataset after filtering.
pub fn dataset_stats(cfg: &DataConfig) -> Result<Option<LogStats>> {
    let log = match cfg.source {
        DataSource::Prepared => return Ok(None),
        DataSource::File => load_interactions(&cfg.path, &cfg.load)?,
        DataSource::Synth => {
            let s = &cfg.synth;
            synth_generate(s.users, s.items, s.clusters, s.events_per_user, s.noise, s.seed)?
        }
    };
    Ok(Some(LogStats::of(&filter_min_count(&log, cfg.min_count)?)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid: Metrics,
}

/// Output of one training phase: the best parameters seen and the per-epoch log.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_valid: Option<Metrics>,
}

fn target_for<'a>(targets: Option<&'a SoftTargetSet>, sample: &Sample, scratch: &'a mut Option<SoftTarget>) -> Result<&'a SoftTarget> {
    match targets {
        Some(set) => set.get(sample.sample_id).ok_or_else(|| {
            Error::Contract(format!("no soft target for training sample {}", sample.sample_id))
        }),
        None => Ok(scratch.insert(SoftTarget::one_hot(sample.target))),
    }
}

fn check_endpoints(loss: &LossConfig, p: &crate::model::PredictionDistribution, q: &SoftTarget, value: f64) -> Result<()> {
    let y = q.target();
    let expected = match loss.mode {
        LossMode::Decoupled if loss.lambda2 == 1.0 => Some(decompose(p, q, y, loss.lambda1, loss.eps_log)?.kl_b),
        LossMode::Coupled if loss.lambda1 == 0.0 => Some(ce_onehot(p, y, loss.eps_log)?.loss),
        LossMode::Ce => Some(coupled_loss(p, q, y, 0.0, loss.eps_log)?.loss),
        _ => None,
    };
    match expected {
        Some(e) if (e - value).abs() > 1e-12 * e.abs().max(1.0) => Err(Error::Contract(format!(
            "loss endpoint identity violated: {value} vs {e}"
        ))),
        _ => Ok(()),
    }
}

/// Mean loss and averaged gradients over a mini-batch.
pub fn batch_gradients(
    params: &ModelParams,
    batch: &[&Sample],
    targets: Option<&SoftTargetSet>,
    loss: &LossConfig,
    debug_checks: bool,
) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros_like(params);
    let mut total = 0.0;
    let mut scratch = None;
    for &sample in batch {
        let cache = forward_cached(params, sample)?;
        let p = score_and_softmax(params, &cache.repr);
        let q = target_for(targets, sample, &mut scratch)?;
        if q.target() != sample.target {
            return Err(Error::Contract(format!(
                "soft target for sample {} has target {}, expected {}",
                sample.sample_id,
                q.target(),
                sample.target
            )));
        }
        let out = loss.evaluate(&p, q)?;
        if debug_checks {
            check_endpoints(loss, &p, q, out.loss)?;
        }
        total += out.loss;
        backward_into(params, sample, &cache, &out.grad_logits, &mut grads);
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    Ok((total * inv, grads))
}

/// Seeded per-epoch shuffling: each epoch visits every index exactly once.
pub struct BatchSchedule {
    order: Vec<usize>,
    rng: ChaCha8Rng,
    batch_size: usize,
}

impl BatchSchedule {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        assert!(batch_size > 0, "batch size must be positive");
        Self {
            order: (0..n).collect(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c),
            batch_size,
        }
    }

    pub fn next_epoch(&mut self) -> std::slice::Chunks<'_, usize> {
        self.order.shuffle(&mut self.rng);
        self.order.chunks(self.batch_size)
    }
}

/// Mini-batch Adam with early stopping on validation NDCG@10.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    init: ModelParams,
    train: &[Sample],
    valid: &[Sample],
    targets: Option<&SoftTargetSet>,
    loss: &LossConfig,
    optim: &OptimConfig,
    epochs: usize,
    seed: u64,
) -> Result<FitResult> {
    let mut params = init;
    let mut best = FitResult {
        params: params.clone(),
        history: Vec::new(),
        best_epoch: None,
        best_valid: None,
    };
    if epochs == 0 || train.is_empty() {
        return Ok(best);
    }
    let mut state = AdamState::new(&params);
    let mut schedule = BatchSchedule::new(train.len(), optim.batch_size, seed);
    let mut best_ndcg = f64::NEG_INFINITY;
    let mut since_best = 0;

    for epoch in 1..=epochs {
        let mut loss_sum = 0.0;
        for (b, chunk) in schedule.next_epoch().enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let (batch_loss, grads) = batch_gradients(&params, &batch, targets, loss, optim.debug_checks)?;
            if !batch_loss.is_finite() || !grads.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training step at epoch {epoch}, batch {b}: loss {batch_loss}, grad norm {}",
                    grads.norm()
                )));
            }
            adam_step(&mut params, &mut state, &grads, optim.lr)?;
            loss_sum += batch_loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let valid_metrics = if valid.is_empty() {
            Metrics::from_ranks(&[usize::MAX], &optim.ks)?
        } else {
            evaluate(&params, valid, &optim.ks, optim.exclude_history)?
        };
        let ndcg = valid_metrics.ndcg(10);
        debug!("epoch {epoch}: loss {train_loss:.5}, valid N@10 {ndcg:.5}");
        best.history.push(EpochRecord {
            epoch,
            train_loss,
            valid: valid_metrics.clone(),
        });
        if ndcg > best_ndcg {
            best_ndcg = ndcg;
            since_best = 0;
            best.params = params.clone();
            best.best_epoch = Some(epoch);
            best.best_valid = Some(valid_metrics);
        } else {
            since_best += 1;
            if optim.patience > 0 && since_best >= optim.patience {
                debug!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    Ok(best)
}

fn fresh_params(config: &ExperimentConfig, dataset: &Dataset) -> ModelParams {
    init_params(
        config.model.kind,
        dataset.item_count(),
        dataset.user_count(),
        config.model.dim,
        config.seed,
    )
}

/// Trains with one-hot cross-entropy from a fresh initialisation.
pub fn pretrain(config: &ExperimentConfig, dataset: &Dataset) -> Result<FitResult> {
    let ce = LossConfig {
        mode: LossMode::Ce,
        ..config.loss.clone()
    };
    fit(
        fresh_params(config, dataset),
        &dataset.splits.train,
        &dataset.splits.valid,
        None,
        &ce,
        &config.optim,
        config.optim.pretrain_epochs,
        config.seed,
    )
}

/// Builds the configured soft-target set over the training split.
pub fn build_soft_targets(config: &ExperimentConfig, pretrained: Option<&ModelParams>, dataset: &Dataset) -> Result<SoftTargetSet> {
    let train = &dataset.splits.train;
    let m = dataset.item_count();
    let g = &config.generator;
    match g.kind {
        GeneratorKind::None => Ok(one_hot_set(train, m)),
        GeneratorKind::Ls => Ok(generate_ls(train, m, g.ls_epsilon)),
        GeneratorKind::Pop => generate_pop(train, g.pop_weight, m),
        GeneratorKind::Lp => {
            let params = pretrained
                .ok_or_else(|| Error::Contract("label propagation needs pretrained parameters".into()))?;
            let embeddings = embed_samples(params, train)?;
            let mut lp = g.lp_params();
            if lp.k > train.len() {
                warn!("generator.k={} exceeds {} training samples; clamping", lp.k, train.len());
                lp.k = train.len();
            }
            generate_lp(&embeddings, train, &lp, m, config.seed)
        }
    }
}

/// Trains the final model against `targets` with the configured loss.
pub fn train_final(
    config: &ExperimentConfig,
    dataset: &Dataset,
    targets: &SoftTargetSet,
    pretrained: Option<&ModelParams>,
) -> Result<FitResult> {
    if let Some(missing) = dataset
        .splits
        .train
        .iter()
        .find(|s| targets.get(s.sample_id).is_none())
    {
        return Err(Error::Contract(format!(
            "no soft target for training sample {}",
            missing.sample_id
        )));
    }
    let init = match (config.optim.warm_start, pretrained) {
        (true, Some(p)) => p.clone(),
        (true, None) => return Err(Error::Contract("warm start requested without pretrained parameters".into())),
        (false, _) => fresh_params(config, dataset),
    };
    fit(
        init,
        &dataset.splits.train,
        &dataset.splits.valid,
        Some(targets),
        &config.loss,
        &config.optim,
        config.optim.train_epochs,
        config.seed,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetProvenance {
    pub generator: GeneratorKind,
    pub lp: Option<LpProvenance>,
    pub mean_q_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub pretrain_epochs: Vec<EpochRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub valid: Option<Metrics>,
    pub test: Metrics,
    pub targets: TargetProvenance,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn best_valid_ndcg10(&self) -> f64 {
        self.valid.as_ref().map_or(f64::NEG_INFINITY, |m| m.ndcg(10))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report always serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad run report: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Machine-readable one-line summary.
    pub fn summary_line(&self) -> String {
        format!(
            "{},{},{},{:.6}",
            self.label,
            self.seed,
            self.test.csv_line(),
            self.best_valid_ndcg10()
        )
    }
}

/// A short human label derived from the loss mode and generator.
pub fn method_label(config: &ExperimentConfig) -> String {
    let g = config.generator.kind;
    match config.loss.mode {
        LossMode::Ce => "base".into(),
        LossMode::Ls => "ls".into(),
        LossMode::Coupled => format!("coupled+{}", g.as_str()),
        LossMode::Decoupled => format!("decoupled+{}", g.as_str()),
    }
}

/// Caches dataset, pretraining and soft-target stages shared between runs.
#[derive(Default)]
pub struct StageCache {
    datasets: Mutex<HashMap<String, Arc<Dataset>>>,
    pretrained: Mutex<HashMap<String, Arc<FitResult>>>,
    targets: Mutex<HashMap<String, Arc<SoftTargetSet>>>,
}

fn key_of<T: Serialize>(parts: &T) -> String {
    serde_json::to_string(parts).expect("cache key serialises")
}

fn cached<T>(map: &Mutex<HashMap<String, Arc<T>>>, key: String, make: impl FnOnce() -> Result<T>) -> Result<Arc<T>> {
    if let Some(v) = map.lock().unwrap().get(&key) {
        return Ok(v.clone());
    }
    let v = Arc::new(make()?);
    map.lock().unwrap().entry(key).or_insert_with(|| v.clone());
    Ok(v)
}

impl StageCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn dataset(&self, config: &ExperimentConfig) -> Result<Arc<Dataset>> {
        cached(&self.datasets, key_of(&config.data), || load_dataset(&config.data))
    }

    fn pretrained(&self, config: &ExperimentConfig, dataset: &Dataset) -> Result<Arc<FitResult>> {
        let key = key_of(&(
            &config.data,
            &config.model,
            config.seed,
            config.optim.pretrain_epochs,
            config.optim.batch_size,
            config.optim.lr,
            config.optim.patience,
            &config.optim.ks,
            config.optim.exclude_history,
            config.loss.eps_log,
        ));
        cached(&self.pretrained, key, || pretrain(config, dataset))
    }

    fn targets(&self, config: &ExperimentConfig, pretrained: Option<&FitResult>, dataset: &Dataset) -> Result<Arc<SoftTargetSet>> {
        let key = key_of(&(&config.data, &config.model, config.seed, &config.optim, &config.generator));
        cached(&self.targets, key, || {
            build_soft_targets(config, pretrained.map(|p| &p.params), dataset)
        })
    }
}

/// Runs the whole pipeline and returns the final parameters with the report.
pub fn run_experiment_with(config: &ExperimentConfig, cache: &StageCache) -> Result<(ModelParams, RunReport)> {
    config.validate()?;
    let started = Instant::now();
    let dataset = cache.dataset(config)?;
    let needs_pretrain = config.generator.kind == GeneratorKind::Lp || config.optim.warm_start;
    let pretrained = if needs_pretrain {
        Some(cache.pretrained(config, &dataset)?)
    } else {
        None
    };
    let targets = cache.targets(config, pretrained.as_deref(), &dataset)?;
    let fitted = train_final(config, &dataset, &targets, pretrained.as_ref().map(|p| &p.params))?;
    let test = evaluate(
        &fitted.params,
        &dataset.splits.test,
        &config.optim.ks,
        config.optim.exclude_history,
    )?;
    let report = RunReport {
        label: method_label(config),
        config: config.clone(),
        seed: config.seed,
        pretrain_epochs: pretrained.as_ref().map(|p| p.history.clone()).unwrap_or_default(),
        epochs: fitted.history,
        best_epoch: fitted.best_epoch,
        valid: fitted.best_valid,
        test,
        targets: TargetProvenance {
            generator: targets.generator,
            lp: targets.provenance,
            mean_q_y: targets.mean_q_y(),
        },
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    info!(
        "{} seed {}: test N@10 {:.4} (valid {:.4})",
        report.label,
        report.seed,
        report.test.ndcg(10),
        report.best_valid_ndcg10()
    );
    Ok((fitted.params, report))
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    run_experiment_with(config, &StageCache::new()).map(|(_, r)| r)
}

/// One cell of a grid search.
#[derive(Debug, Clone)]
pub struct GridCell {
    pub assignments: Vec<(String, String)>,
    pub result: std::result::Result<RunReport, String>,
}

impl GridCell {
    pub fn valid_ndcg10(&self) -> f64 {
        self.result
            .as_ref()
            .map_or(f64::NEG_INFINITY, |r| r.best_valid_ndcg10())
    }
}

/// Cartesian product of `grid` values applied to `base`, one run per cell.
pub fn expand_grid(grid: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut cells = vec![Vec::new()];
    for (key, values) in grid {
        cells = cells
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut cell = prefix.clone();
                    cell.push((key.clone(), v.clone()));
                    cell
                })
            })
            .collect();
    }
    cells
}

/// Runs every grid cell, isolating failures, and returns cells sorted by validation
/// NDCG@10 (best first, failures last). `jobs` bounds the worker threads.
pub fn grid_search(base: &ExperimentConfig, grid: &[(String, Vec<String>)], jobs: usize, cache: &StageCache) -> Vec<GridCell> {
    let cells = expand_grid(grid);
    let results: Vec<Mutex<Option<GridCell>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let run_cell = |assignments: &Vec<(String, String)>| -> GridCell {
        let outcome = (|| {
            let mut cfg = base.clone();
            for (k, v) in assignments {
                cfg.set(k, v)?;
            }
            run_experiment_with(&cfg, cache).map(|(_, r)| r)
        })();
        if let Err(e) = &outcome {
            warn!("grid cell {assignments:?} failed: {e}");
        }
        GridCell {
            assignments: assignments.clone(),
            result: outcome.map_err(|e| e.to_string()),
        }
    };
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(cells.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                *results[i].lock().unwrap() = Some(run_cell(&cells[i]));
            });
        }
    });
    let mut out: Vec<GridCell> = results
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every cell ran"))
        .collect();
    out.sort_by(|a, b| b.valid_ndcg10().total_cmp(&a.valid_ndcg10()));
    out
}

/// Long-format CSV: one column per grid key, then test metrics, validation NDCG@10, status.
pub fn grid_csv(grid_keys: &[String], cells: &[GridCell]) -> String {
    let mut out = String::new();
    let mut header: Vec<String> = grid_keys.to_vec();
    header.extend(["R@20", "N@20", "R@10", "N@10", "valid_N@10", "status"].map(String::from));
    out.push_str(&header.join(","));
    out.push('\n');
    for cell in cells {
        let mut row: Vec<String> = grid_keys
            .iter()
            .map(|k| {
                cell.assignments
                    .iter()
                    .find(|(key, _)| key == k)
                    .map(|(_, v)| v.clone())
                    .unwrap_or_default()
            })
            .collect();
        match &cell.result {
            Ok(r) => {
                row.push(r.test.csv_line());
                row.push(format!("{:.6}", r.best_valid_ndcg10()));
                row.push("ok".into());
            }
            Err(e) => {
                row.push(",,,".into());
                row.push(String::new());
                row.push(format!("failed: {}", e.replace([',', '\n'], ";")));
            }
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.synth = SynthConfig {
            users: 40,
            items: 20,
            clusters: 2,
            events_per_user: 8,
            noise: 0.1,
            seed: 1,
        };
        cfg.model.dim = 8;
        cfg.optim.pretrain_epochs = 2;
        cfg.optim.train_epochs = 2;
        cfg.optim.batch_size = 32;
        cfg.optim.lr = 1e-2;
        cfg
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = small_config();
        assert_eq!(ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(ExperimentConfig::from_toml_str("sed = 3").is_err());
        assert!(ExperimentConfig::from_toml_str("[loss]\nlambda3 = 0.1").is_err());
        let cfg = ExperimentConfig::from_toml_str("seed = 3\n[loss]\nmode = \"decoupled\"").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.loss.mode, LossMode::Decoupled);
        assert_eq!(cfg.optim.batch_size, 256);
    }

    #[test]
    fn dotted_overrides() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("loss.lambda1", "0.3").unwrap();
        cfg.set("loss.mode", "coupled").unwrap();
        cfg.set("generator.kind", "lp").unwrap();
        cfg.set("generator.tau", "2").unwrap();
        cfg.set("generator.k", "16").unwrap();
        cfg.set("optim.lr", "1e-2").unwrap();
        cfg.set("seed", "9").unwrap();
        cfg.set("data.path", "/tmp/x").unwrap();
        assert_eq!(cfg.loss.lambda1, 0.3);
        assert_eq!(cfg.loss.mode, LossMode::Coupled);
        assert_eq!(cfg.generator.kind, GeneratorKind::Lp);
        assert_eq!(cfg.generator.tau, 2.0);
        assert_eq!(cfg.generator.k, 16);
        assert_eq!(cfg.optim.lr, 1e-2);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.data.path, PathBuf::from("/tmp/x"));
        assert!(cfg.set("loss.nope", "1").is_err());
        assert!(cfg.set("nope.lambda1", "1").is_err());
        assert!(cfg.set("generator.k", "many").is_err());
    }

    #[test]
    fn validation_rules() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.loss.mode = LossMode::Decoupled;
        assert!(cfg.validate().is_err());
        cfg.generator.kind = GeneratorKind::Lp;
        assert!(cfg.validate().is_ok());
        cfg.generator.tau = 0.0;
        assert!(cfg.validate().is_err());
        cfg.generator.tau = 1.0;
        cfg.loss.lambda2 = -0.1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_epochs_return_initial_params() {
        let mut cfg = small_config();
        cfg.optim.pretrain_epochs = 0;
        let ds = load_dataset(&cfg.data).unwrap();
        let fitted = pretrain(&cfg, &ds).unwrap();
        assert_eq!(fitted.params, fresh_params(&cfg, &ds));
        assert!(fitted.history.is_empty());
    }

    #[test]
    fn grid_expansion() {
        assert_eq!(expand_grid(&[]), vec![Vec::<(String, String)>::new()]);
        let cells = expand_grid(&[
            ("a".into(), vec!["1".into(), "2".into()]),
            ("b".into(), vec!["x".into(), "y".into(), "z".into()]),
        ]);
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[1], vec![("a".into(), "1".into()), ("b".into(), "y".into())]);
    }

    #[test]
    fn missing_target_is_a_contract_error() {
        let cfg = small_config();
        let ds = load_dataset(&cfg.data).unwrap();
        let partial = one_hot_set(&ds.splits.train[1..], ds.item_count());
        assert!(matches!(train_final(&cfg, &ds, &partial, None), Err(Error::Contract(_))));
    }

    #[test]
    fn ls_generator_confidence() {
        let mut cfg = small_config();
        cfg.generator.kind = GeneratorKind::Ls;
        let ds = load_dataset(&cfg.data).unwrap();
        let m = ds.item_count() as f64;
        let set = build_soft_targets(&cfg, None, &ds).unwrap();
        let expected = 1.0 - 0.1 * (m - 1.0) / m;
        assert!(set.targets.values().all(|q| (q.q_y() - expected).abs() < 1e-12));
    }
}
