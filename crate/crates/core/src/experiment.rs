//! Run configuration, the training driver, seed sweeps and checkpoints.
//!
//! A run writes three files into its output directory:
//!
//! * `metrics.jsonl`: one [`MetricsRecord`] per iteration;
//! * `summary.json`: a [`Summary`];
//! * `checkpoint.json`: a [`Checkpoint`] of the final parameters.
//!
//! A run stopped by a non-finite loss or gradient also writes `abort.json`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::analysis::{evaluate, mean_grad_cos, to_precise_json, MetricsRecord, MetricsWriter, Summary};
use crate::data::{batch_iter, gen_gaussian_shift, gen_two_moons, load_csv, Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::losses::{median_bandwidth, AlignmentVariant};
use crate::nn::{Activation, Bindings, ModelBundle, ModelSpec};
use crate::optim::{joint_step, metaalign_step, role_schedule, OptimState, RolePolicy};
use crate::tensor::{ParamId, Tape, Tensor};

/// Environment variable that overrides every configured output directory.
pub const OUTPUT_DIR_ENV: &str = "METAALIGN_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    TwoMoons {
        n_per_domain: usize,
        noise_std: f64,
        rotation_deg: f64,
        #[serde(default)]
        translation: [f64; 2],
        #[serde(default = "yes")]
        standardize: bool,
    },
    GaussianShift {
        n: usize,
        classes: usize,
        dim: usize,
        class_sep: f64,
        mean_shift: f64,
        #[serde(default = "yes")]
        standardize: bool,
    },
    /// Relative paths are resolved against the config file's directory.
    Csv {
        source: PathBuf,
        target: PathBuf,
        #[serde(default)]
        classes: Option<usize>,
        #[serde(default = "yes")]
        standardize: bool,
    },
}

fn yes() -> bool {
    true
}

/// Architecture choices; input width and class count come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub groups: usize,
    pub classifier_hidden: Vec<usize>,
    pub discriminator_hidden: usize,
    pub activation: Activation,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![64, 64],
            groups: 2,
            classifier_hidden: Vec::new(),
            discriminator_hidden: 64,
            activation: Activation::Relu,
            dropout: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    /// Virtual step size `alpha`.
    pub meta_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Budget `B` of the group weights; defaults to the number of groups.
    pub budget: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.01,
            meta_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            budget: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Strategy {
    /// One SGD step on the summed losses.
    Joint,
    Metaalign {
        #[serde(default)]
        roles: RolePolicy,
        /// Permits `meta_lr = 0`, which reduces the meta step to the joint
        /// step; used for equivalence checks.
        #[serde(default)]
        allow_zero_alpha: bool,
    },
}

impl Default for Strategy {
    fn default() -> Self {
        Strategy::Metaalign {
            roles: RolePolicy::Alternate,
            allow_zero_alpha: false,
        }
    }
}

/// Named adjustments applied after parsing, in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// `meta_lr = 10 * lr`.
    AlphaTenLr,
    /// Four layer groups; the extractor needs at least four layers.
    FourGroups,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelConfig,
    pub variant: AlignmentVariant,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub strategy: Strategy,
    pub iterations: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Seeds initialization, batching and dropout; also the data seed unless
    /// `data_seed` is set.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data_seed: Option<u64>,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub record_wallclock: bool,
    #[serde(default)]
    pub presets: Vec<Preset>,
}

fn default_batch_size() -> usize {
    32
}

fn default_eval_every() -> usize {
    50
}

impl TrainConfig {
    /// Parses, applies presets and validates. Returns the config with the
    /// parsed document, which [`config_hash`] digests.
    pub fn from_json_str(text: &str) -> Result<(TrainConfig, Value)> {
        let raw: Value = serde_json::from_str(text).map_err(|e| Error::config("<document>", e.to_string()))?;
        let config = TrainConfig::from_value(&raw)?;
        Ok((config, raw))
    }

    pub fn from_value(raw: &Value) -> Result<TrainConfig> {
        let mut config: TrainConfig =
            serde_json::from_value(raw.clone()).map_err(|e| Error::config("<document>", e.to_string()))?;
        config.apply_presets()?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; relative CSV paths are taken relative to it.
    pub fn load(path: &Path) -> Result<(TrainConfig, Value)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (mut config, raw) = TrainConfig::from_json_str(&text)?;
        if let DatasetSpec::Csv { source, target, .. } = &mut config.dataset {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [source, target] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok((config, raw))
    }

    fn apply_presets(&mut self) -> Result<()> {
        for preset in self.presets.clone() {
            match preset {
                Preset::AlphaTenLr => self.optimizer.meta_lr = 10.0 * self.optimizer.lr,
                Preset::FourGroups => {
                    if self.model.hidden.len() < 4 {
                        return Err(Error::config(
                            "presets",
                            format!("four_groups needs >= 4 extractor layers, have {}", self.model.hidden.len()),
                        ));
                    }
                    self.model.groups = 4;
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be positive"));
        }
        self.variant.validate()?;
        let o = &self.optimizer;
        OptimState::new(o.lr, o.meta_lr, o.momentum, o.weight_decay)
            .map_err(|e| Error::config("optimizer", e.to_string()))?;
        if let Some(b) = o.budget {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::config("optimizer.budget", "must be positive"));
            }
        }
        if let Strategy::Metaalign { allow_zero_alpha, .. } = self.strategy {
            if o.meta_lr == 0.0 && !allow_zero_alpha {
                return Err(Error::config(
                    "optimizer.meta_lr",
                    "must be > 0 for metaalign (set strategy.allow_zero_alpha to permit 0)",
                ));
            }
        }
        match &self.dataset {
            DatasetSpec::TwoMoons {
                n_per_domain,
                noise_std,
                ..
            } => {
                if *n_per_domain < 2 || !(*noise_std >= 0.0) {
                    return Err(Error::config("dataset", "need n_per_domain >= 2 and noise_std >= 0"));
                }
            }
            DatasetSpec::GaussianShift { n, classes, dim, .. } => {
                if *n == 0 || *classes < 2 || *dim == 0 {
                    return Err(Error::config("dataset", "need n >= 1, classes >= 2, dim >= 1"));
                }
            }
            DatasetSpec::Csv { .. } => {}
        }
        self.model_spec(1, 2).validate()
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn model_spec(&self, input_dim: usize, classes: usize) -> ModelSpec {
        let m = &self.model;
        ModelSpec {
            input_dim,
            hidden: m.hidden.clone(),
            groups: m.groups,
            classes,
            classifier_hidden: m.classifier_hidden.clone(),
            discriminator_hidden: m.discriminator_hidden,
            activation: m.activation,
            dropout: m.dropout,
            budget: self.optimizer.budget,
        }
    }
}

/// SHA-256 of the document's canonical JSON (object keys sorted, compact).
pub fn config_hash(raw: &Value) -> String {
    let canonical = serde_json::to_string(raw).expect("JSON values serialize");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// Domain datasets ready for training, plus the source-fitted standardizer
/// that was applied to both.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub source: Dataset,
    pub target: Dataset,
    pub standardizer: Option<Standardizer>,
}

/// Generates or loads the raw (unstandardized) domains.
pub fn load_domains(spec: &DatasetSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    match spec {
        DatasetSpec::TwoMoons {
            n_per_domain,
            noise_std,
            rotation_deg,
            translation,
            ..
        } => gen_two_moons(*n_per_domain, *noise_std, *rotation_deg, *translation, seed),
        DatasetSpec::GaussianShift {
            n,
            classes,
            dim,
            class_sep,
            mean_shift,
            ..
        } => gen_gaussian_shift(*n, *classes, *dim, *class_sep, *mean_shift, seed),
        DatasetSpec::Csv {
            source,
            target,
            classes,
            ..
        } => {
            let s = load_csv(source, *classes)?;
            let t = load_csv(target, Some(classes.unwrap_or(s.classes())))?;
            if s.dim() != t.dim() {
                return Err(Error::Data {
                    path: target.clone(),
                    detail: format!("{} features, source has {}", t.dim(), s.dim()),
                });
            }
            Ok((s, t))
        }
    }
}

pub fn prepare_data(spec: &DatasetSpec, seed: u64) -> Result<PreparedData> {
    let (source, target) = load_domains(spec, seed)?;
    let standardize = match spec {
        DatasetSpec::TwoMoons { standardize, .. }
        | DatasetSpec::GaussianShift { standardize, .. }
        | DatasetSpec::Csv { standardize, .. } => *standardize,
    };
    if !standardize {
        return Ok(PreparedData {
            source,
            target,
            standardizer: None,
        });
    }
    let st = Standardizer::fit(&source);
    Ok(PreparedData {
        source: st.apply(&source)?,
        target: st.apply(&target)?,
        standardizer: Some(st),
    })
}

/// Extractor output `G(x)` as a plain tensor.
pub fn extract_features(model: &ModelBundle, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = Bindings::bind_some(&mut tape, &model.store, &model.theta_ids());
    let xv = tape.constant(x.clone());
    let f = model.extractor.forward(&mut tape, &bound, xv)?;
    Ok(tape.value(f)?.clone())
}

/// Fills in a missing MMD bandwidth from the first training batch at
/// initialization (median pairwise squared distance of the pooled
/// features). Other variants pass through.
pub fn resolve_variant(config: &TrainConfig, model: &ModelBundle, data: &PreparedData) -> Result<AlignmentVariant> {
    match config.variant {
        AlignmentVariant::Mmd { lambda, sigma: None } => {
            let first = batch_iter(&data.source, &data.target, config.batch_size, config.seed, None)?
                .next()
                .ok_or_else(|| Error::Contract("empty batch stream".into()))?;
            let fs = extract_features(model, &first.src_x)?;
            let ft = extract_features(model, &first.tgt_x)?;
            let mut pooled = fs.data().to_vec();
            pooled.extend_from_slice(ft.data());
            let both = Tensor::matrix(fs.rows() + ft.rows(), fs.cols(), pooled)?;
            Ok(AlignmentVariant::Mmd {
                lambda,
                sigma: Some(median_bandwidth(&both)),
            })
        }
        v => Ok(v),
    }
}

/// Everything a finished (or aborted) run produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub summary: Summary,
    pub records: Vec<MetricsRecord>,
    pub model: ModelBundle,
    pub standardizer: Option<Standardizer>,
    /// Diagnostic of a non-finite abort.
    pub abort: Option<String>,
}

/// Trains one model. With `out_dir` set, streams metrics and writes the
/// summary and checkpoint there.
pub fn run(config: &TrainConfig, config_hash: &str, out_dir: Option<&Path>) -> Result<RunOutcome> {
    config.validate()?;
    let data = prepare_data(&config.dataset, config.data_seed())?;
    let spec = config.model_spec(data.source.dim(), data.source.classes());
    let features = spec.hidden.last().copied().unwrap_or(spec.input_dim);
    let mut model = ModelBundle::new(&spec, config.variant.discriminator_input(features, spec.classes))?;
    model.init_params(config.seed);
    let variant = resolve_variant(config, &model, &data)?;

    let o = &config.optimizer;
    let mut state = OptimState::new(o.lr, o.meta_lr, o.momentum, o.weight_decay)?;
    state.exempt_from_decay(&model.beta.ids);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(20);

    let mut writer = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(MetricsWriter::create(&dir.join("metrics.jsonl"))?)
        }
        None => None,
    };

    let started = Instant::now();
    let mut batches = batch_iter(&data.source, &data.target, config.batch_size, config.seed, None)?;
    let mut records = Vec::with_capacity(config.iterations);
    let mut abort = None;
    for it in 0..config.iterations {
        let batch = batches.next().expect("unbounded batch stream");
        let step = match config.strategy {
            Strategy::Joint => joint_step(&mut model, &batch, &variant, &mut state, Some(&mut dropout_rng)),
            Strategy::Metaalign { roles, .. } => metaalign_step(
                &mut model,
                &batch,
                &variant,
                &mut state,
                role_schedule(roles, it),
                Some(&mut dropout_rng),
            ),
        };
        let report = match step {
            Ok(r) => r,
            Err(e @ Error::NonFinite { .. }) => {
                abort = Some(e.at_step(it).to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let mut record = MetricsRecord::from_step(it, &report);
        if (it + 1) % config.eval_every == 0 || it + 1 == config.iterations {
            record.source_acc = Some(evaluate(&model, &data.source)?);
            record.target_acc = Some(evaluate(&model, &data.target)?);
        }
        if config.record_wallclock {
            record.wallclock_ms = Some(started.elapsed().as_secs_f64() * 1e3);
        }
        if let Some(w) = writer.as_mut() {
            w.write(&record)?;
        }
        records.push(record);
    }

    let summary = Summary {
        config_hash: config_hash.to_string(),
        final_target_acc: if abort.is_some() {
            None
        } else {
            records.last().and_then(|r| r.target_acc)
        },
        mean_grad_cos: mean_grad_cos(&records),
        steps: records.len(),
        aborted: abort.is_some(),
    };
    if let Some(dir) = out_dir {
        write_json(&dir.join("summary.json"), &summary)?;
        save_checkpoint(&dir.join("checkpoint.json"), &model, data.standardizer.as_ref())?;
        if let Some(reason) = &abort {
            write_json(
                &dir.join("abort.json"),
                &serde_json::json!({ "error": "non_finite", "step": records.len(), "detail": reason }),
            )?;
        }
    }
    Ok(RunOutcome {
        summary,
        records,
        model,
        standardizer: data.standardizer,
        abort,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = to_precise_json(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Output directory of a run: the environment override, else the config's
/// `output_dir`, else `runs/<first 12 hex digits of the config hash>`.
pub fn output_dir(config: &TrainConfig, config_hash: &str) -> PathBuf {
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
        return PathBuf::from(dir);
    }
    config
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&config_hash[..12]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized model: architecture, every parameter by name, and the
/// standardizer the model was trained behind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelSpec,
    pub discriminator_input: Option<usize>,
    pub params: Vec<NamedParam>,
    pub standardizer: Option<Standardizer>,
}

pub fn save_checkpoint(path: &Path, model: &ModelBundle, standardizer: Option<&Standardizer>) -> Result<()> {
    let params = model
        .store
        .ids()
        .map(|id: ParamId| {
            let t = model.store.get(id);
            NamedParam {
                name: model.store.name(id).to_string(),
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            }
        })
        .collect();
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        model: model.spec.clone(),
        discriminator_input: model.discriminator.as_ref().map(|d| d.in_dim()),
        params,
        standardizer: standardizer.cloned(),
    };
    write_json(path, &ckpt)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelBundle, Option<Standardizer>)> {
    let bad = |detail: String| Error::Checkpoint {
        path: path.to_path_buf(),
        detail,
    };
    let text = std::fs::read_to_string(path).map_err(|e| bad(format!("cannot read: {e}")))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| bad(format!("malformed: {e}")))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(bad(format!("version {} (expected {CHECKPOINT_VERSION})", ckpt.version)));
    }
    let mut model = ModelBundle::new(&ckpt.model, ckpt.discriminator_input).map_err(|e| bad(e.to_string()))?;
    if ckpt.params.len() != model.store.len() {
        return Err(bad(format!("{} parameters, model has {}", ckpt.params.len(), model.store.len())));
    }
    for p in ckpt.params {
        let id = model
            .store
            .find(&p.name)
            .ok_or_else(|| bad(format!("unknown parameter `{}`", p.name)))?;
        let value = Tensor::new(p.shape, p.values).map_err(|e| bad(format!("`{}`: {e}", p.name)))?;
        model.store.set(id, value).map_err(|e| bad(format!("`{}`: {e}", p.name)))?;
    }
    Ok((model, ckpt.standardizer))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source_acc: f64,
    pub target_acc: f64,
}

/// Accuracy of a checkpointed model on the config's domains, preprocessed
/// with the checkpoint's standardizer.
pub fn evaluate_checkpoint(path: &Path, config: &TrainConfig) -> Result<EvalReport> {
    let (model, standardizer) = load_checkpoint(path)?;
    let (mut source, mut target) = load_domains(&config.dataset, config.data_seed())?;
    if let Some(st) = &standardizer {
        source = st.apply(&source)?;
        target = st.apply(&target)?;
    }
    Ok(EvalReport {
        source_acc: evaluate(&model, &source)?,
        target_acc: evaluate(&model, &target)?,
    })
}

/// Mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        if values.is_empty() {
            return Stat {
                mean: None,
                std: None,
                n: 0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Stat {
            mean: Some(mean),
            std: Some(var.sqrt()),
            n: values.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub seed: u64,
    pub summary: Summary,
}

/// Contents of `aggregate.json`. Statistics cover runs that did not abort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub seeds: Vec<u64>,
    pub runs: Vec<SweepRun>,
    pub completed: usize,
    pub aborted: usize,
    pub final_target_acc: Stat,
    pub mean_grad_cos: Stat,
}

impl Aggregate {
    pub fn from_runs(runs: Vec<SweepRun>) -> Aggregate {
        let ok: Vec<&Summary> = runs.iter().map(|r| &r.summary).filter(|s| !s.aborted).collect();
        let acc: Vec<f64> = ok.iter().filter_map(|s| s.final_target_acc).collect();
        let cos: Vec<f64> = ok.iter().filter_map(|s| s.mean_grad_cos).collect();
        Aggregate {
            seeds: runs.iter().map(|r| r.seed).collect(),
            completed: ok.len(),
            aborted: runs.len() - ok.len(),
            final_target_acc: Stat::of(&acc),
            mean_grad_cos: Stat::of(&cos),
            runs,
        }
    }
}

/// Runs `config` once per seed, each in `<out_dir>/seed-<seed>`, and writes
/// `<out_dir>/aggregate.json`. Each run's hash covers the document with
/// its `seed` replaced.
pub fn sweep(config: &TrainConfig, raw: &Value, seeds: &[u64], out_dir: &Path) -> Result<Aggregate> {
    if seeds.is_empty() {
        return Err(Error::invalid("seeds", "need at least one seed"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let runs = seeds
        .par_iter()
        .map(|&seed| {
            let mut cfg = config.clone();
            cfg.seed = seed;
            let mut doc = raw.clone();
            if let Value::Object(map) = &mut doc {
                map.insert("seed".into(), Value::from(seed));
            }
            let dir = out_dir.join(format!("seed-{seed}"));
            run(&cfg, &config_hash(&doc), Some(&dir)).map(|o| SweepRun {
                seed,
                summary: o.summary,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let agg = Aggregate::from_runs(runs);
    write_json(&out_dir.join("aggregate.json"), &agg)?;
    Ok(agg)
}
