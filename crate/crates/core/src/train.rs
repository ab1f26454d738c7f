//! Objective, optimizer, learning-rate schedule and the training loop.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, TokenId, VOCAB_SIZE};
use crate::frames::{self, ClipPair, DataError, Manifest, Split};
use crate::models::{self, Checkpoint, Model, ModelConfig, ModelError};
use crate::nn::{NnError, ParamId, ParamStore, Session};
use crate::parallel;
use crate::tensor::{DType, Float, SeededRng, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("learning-rate schedule is defined from step 1, got step {0}")]
    StepZero(u64),
    #[error("every position is masked; the loss is undefined")]
    AllMasked,
    #[error("non-finite gradient in parameter {0:?}")]
    NonFiniteGrad(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        TrainError::Model(e.into())
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---- objective ----

/// Sum of `−log p(target)` over unmasked rows, and the number of such rows.
pub fn nll_sum<T: Float>(s: &mut Session<T>, logits: Var, targets: &[TokenId], mask: &[bool]) -> Result<(Var, usize)> {
    let shape = s.g.shape(logits).to_vec();
    if shape.len() != 2 || shape[1] != VOCAB_SIZE || shape[0] != targets.len() || mask.len() != targets.len() {
        return Err(TrainError::Config(format!(
            "logits {shape:?}, {} targets and {} mask entries do not line up",
            targets.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(TrainError::AllMasked);
    }
    let lp = s.g.log_softmax(logits, 1)?;
    let idx: Vec<usize> = targets.iter().map(|t| t.index()).collect();
    let picked = s.g.pick(lp, &idx)?;
    let picked = if count == mask.len() {
        picked
    } else {
        let m = Tensor::new(vec![mask.len()], mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect())?;
        let m = s.constant(m);
        s.g.mul(picked, m)?
    };
    let total = s.g.sum(picked);
    Ok((s.g.neg(total), count))
}

/// Mean negative log-likelihood over unmasked positions.
pub fn nll_loss<T: Float>(s: &mut Session<T>, logits: Var, targets: &[TokenId], mask: &[bool]) -> Result<Var> {
    let (sum, count) = nll_sum(s, logits, targets, mask)?;
    Ok(s.g.scale(sum, 1.0 / count as f64))
}

// ---- schedule ----

/// Linear warmup to `peak` at `warmup`, then `peak·√(warmup/step)`.
pub fn lr_schedule(step: u64, peak: f64, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(TrainError::StepZero(step));
    }
    if warmup == 0 {
        return Err(TrainError::Config("warmup_steps must be at least 1".into()));
    }
    Ok(if step <= warmup {
        peak * (step as f64 / warmup as f64)
    } else {
        peak * (warmup as f64 / step as f64).sqrt()
    })
}

// ---- optimizer ----

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.997,
            eps: 1e-9,
        }
    }
}

/// Moments indexed by [`ParamId`], plus the number of updates applied.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Float> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. Parameters whose gradient is `None` are
/// left untouched. Every gradient is checked before anything is modified.
pub fn adam_step<T: Float>(
    store: &mut ParamStore<T>,
    grads: &[Option<Vec<T>>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(TrainError::Config(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::NonFiniteGrad(store.name(ParamId::from_index(i)).to_string()));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one, eps) = (T::one(), T::of(cfg.eps));
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    let lr = T::of(lr);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let id = ParamId::from_index(i);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let w = store.get_mut(id).data_mut();
        for j in 0..w.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            w[j] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

// ---- configuration ----

fn d_batch() -> usize {
    4
}
fn d_peak() -> f64 {
    1e-3
}
fn d_warmup() -> u64 {
    8000
}
fn d_eval_every() -> u64 {
    1000
}
fn d_ckpt_dir() -> PathBuf {
    PathBuf::from("checkpoints")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_peak")]
    pub peak_lr: f64,
    #[serde(default = "d_warmup")]
    pub warmup_steps: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    pub total_steps: u64,
    #[serde(default = "d_eval_every")]
    pub eval_every: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_ckpt_dir")]
    pub checkpoint_dir: PathBuf,
    /// Keep the conv frame encoder at its initial weights and cache its output.
    #[serde(default)]
    pub freeze_frame_encoder: bool,
}

impl TrainConfig {
    pub fn new(total_steps: u64) -> Self {
        TrainConfig {
            batch_size: d_batch(),
            peak_lr: d_peak(),
            warmup_steps: d_warmup(),
            adam: AdamConfig::default(),
            total_steps,
            eval_every: d_eval_every(),
            seed: 0,
            checkpoint_dir: d_ckpt_dir(),
            freeze_frame_encoder: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be at least 1");
        }
        if !(self.peak_lr > 0.0 && self.adam.eps > 0.0) {
            return bad("peak_lr and eps must be positive");
        }
        if !((0.0..1.0).contains(&self.adam.beta1) && (0.0..1.0).contains(&self.adam.beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        Ok(())
    }

    pub fn lr(&self, step: u64) -> Result<f64> {
        lr_schedule(step, self.peak_lr, self.warmup_steps)
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.checkpoint_dir.join("metrics.jsonl")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint_dir.join("last.vmtc")
    }
}

/// Contents of a `train --config` file. Relative paths resolve against the
/// config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub manifest: PathBuf,
    #[serde(default)]
    pub codec: CodecConfig,
    #[serde(default)]
    pub resume: bool,
    /// Parameter precision for training.
    #[serde(default = "default_dtype")]
    pub dtype: DType,
}

fn default_dtype() -> DType {
    DType::F32
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.manifest.is_relative() {
            cfg.manifest = base.join(&cfg.manifest);
        }
        if cfg.train.checkpoint_dir.is_relative() {
            cfg.train.checkpoint_dir = base.join(&cfg.train.checkpoint_dir);
        }
        Ok(cfg)
    }
}

// ---- metrics ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_loss: Option<f64>,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = File::open(path).map_err(io_err(path))?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l.map_err(io_err(path))?;
            serde_json::from_str(&l).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))
        })
        .collect()
}

// ---- loop ----

/// A training pair with its encoder input resolved: cached frame vectors
/// `[F, H]` when the frame encoder is frozen, normalized frames otherwise.
struct Prepared<T: Float> {
    input: Tensor<T>,
    tokens: Vec<TokenId>,
}

const DROPOUT_LABEL: u64 = 0x6472_6f70;

/// Owns the model, optimizer state and data for one run.
pub struct Trainer<T: Float> {
    pub model: Model<T>,
    pub adam: AdamState<T>,
    pub cfg: TrainConfig,
    pub codec: CodecConfig,
    pub seed: u64,
    train: Vec<Prepared<T>>,
    val: Vec<Prepared<T>>,
    metrics: Option<BufWriter<File>>,
    history: Vec<MetricsRecord>,
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

impl<T: Float> Trainer<T> {
    /// Fresh optimizer state. `seed` initialized the model and drives batching
    /// and dropout together with `cfg.seed`.
    pub fn new(model: Model<T>, cfg: TrainConfig, codec: CodecConfig, train: &[ClipPair], val: &[ClipPair]) -> Result<Self> {
        let adam = AdamState::new(&model.params);
        Self::with_state(model, adam, cfg, codec, train, val)
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>, cfg: TrainConfig, train: &[ClipPair], val: &[ClipPair]) -> Result<Self> {
        let adam = ckpt.optimizer.unwrap_or_else(|| AdamState::new(&ckpt.model.params));
        Self::with_state(ckpt.model, adam, cfg, ckpt.codec, train, val)
    }

    fn with_state(
        model: Model<T>,
        adam: AdamState<T>,
        cfg: TrainConfig,
        codec: CodecConfig,
        train: &[ClipPair],
        val: &[ClipPair],
    ) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(DataError::EmptySplit(Split::Train).into());
        }
        let over = train.iter().chain(val).find(|p| p.tokens.len() - 1 > model.config.max_target_len);
        if let Some(p) = over {
            return Err(ModelError::TargetTooLong {
                len: p.tokens.len() - 1,
                max: model.config.max_target_len,
            }
            .into());
        }
        let prep = |pairs: &[ClipPair]| -> Result<Vec<Prepared<T>>> {
            pairs
                .iter()
                .map(|p| {
                    let input = if cfg.freeze_frame_encoder {
                        model.frame_vectors(&p.clip)?
                    } else {
                        frames::normalize::<T>(&p.clip)
                    };
                    Ok(Prepared {
                        input,
                        tokens: p.tokens.clone(),
                    })
                })
                .collect()
        };
        let (train, val) = (prep(train)?, prep(val)?);
        let seed = cfg.seed;
        Ok(Trainer {
            model,
            adam,
            cfg,
            codec,
            seed,
            train,
            val,
            metrics: None,
            history: Vec::new(),
        })
    }

    /// Appends every subsequent record to `path`, after cutting the file back
    /// to the records of steps already taken.
    pub fn log_to(&mut self, path: &Path) -> Result<()> {
        let done = self.adam.step;
        let mut keep = String::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            for line in text.lines().take(done as usize) {
                keep.push_str(line);
                keep.push('\n');
            }
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::write(path, keep).map_err(io_err(path))?;
        let f = fs::OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
        self.metrics = Some(BufWriter::new(f));
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.adam.step
    }

    pub fn history(&self) -> &[MetricsRecord] {
        &self.history
    }

    fn forward_pair(&self, s: &mut Session<T>, p: &Prepared<T>) -> Result<(Var, usize)> {
        let x = s.constant(p.input.clone());
        let n = p.tokens.len() - 1;
        let logits = if self.cfg.freeze_frame_encoder {
            self.model.forward(s, x, &p.tokens[..n])?
        } else {
            self.model.forward_frames(s, x, &p.tokens[..n])?
        };
        nll_sum(s, logits, &p.tokens[1..], &vec![true; n])
    }

    /// One optimizer step on the batch scheduled for the current step.
    pub fn step(&mut self) -> Result<StepReport> {
        let step0 = self.adam.step;
        let step = step0 + 1;
        let lr = self.cfg.lr(step)?;
        let idx = frames::batch_at_step(self.train.len(), self.cfg.batch_size, self.seed, step0);
        let total: usize = idx.iter().map(|&i| self.train[i].tokens.len() - 1).sum();
        let scale = 1.0 / total as f64;
        let per_sample: Vec<Result<(f64, Vec<Option<Vec<T>>>)>> = parallel::map_indexed(idx.len(), |b| {
            let rng = SeededRng::derive(self.seed, &[DROPOUT_LABEL, step0, b as u64]);
            let mut s = Session::train(&self.model.params, rng);
            let (sum, _) = self.forward_pair(&mut s, &self.train[idx[b]])?;
            let loss = s.g.scale(sum, scale);
            s.backward(loss)?;
            Ok((s.g.value(loss).item().as_f64(), s.param_grads()))
        });
        let mut loss = 0.0;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.model.params.len()];
        for r in per_sample {
            let (l, g) = r?;
            loss += l;
            for (acc, gi) in grads.iter_mut().zip(g) {
                match (acc.as_mut(), gi) {
                    (_, None) => {}
                    (None, Some(gi)) => *acc = Some(gi),
                    (Some(a), Some(gi)) => a.iter_mut().zip(gi).for_each(|(x, y)| *x += y),
                }
            }
        }
        if self.cfg.freeze_frame_encoder {
            for id in self.model.frame_encoder_params() {
                grads[id.index()] = None;
            }
        }
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss(step));
        }
        adam_step(&mut self.model.params, &grads, &mut self.adam, lr, &self.cfg.adam)?;
        Ok(StepReport { step, lr, loss })
    }

    /// Masked per-token NLL over `pairs` in eval mode.
    fn eval_nll(&self, pairs: &[Prepared<T>]) -> Result<Option<f64>> {
        if pairs.is_empty() {
            return Ok(None);
        }
        let parts: Vec<Result<(f64, usize)>> = parallel::map_indexed(pairs.len(), |i| {
            let mut s = Session::eval(&self.model.params);
            let (sum, n) = self.forward_pair(&mut s, &pairs[i])?;
            Ok((s.g.value(sum).item().as_f64(), n))
        });
        let (mut sum, mut n) = (0.0, 0);
        for p in parts {
            let (a, b) = p?;
            sum += a;
            n += b;
        }
        Ok(Some(sum / n as f64))
    }

    pub fn val_loss(&self) -> Result<Option<f64>> {
        self.eval_nll(&self.val)
    }

    /// Eval-mode per-token NLL over the whole training split.
    pub fn train_nll(&self) -> Result<f64> {
        Ok(self.eval_nll(&self.train)?.expect("train split is non-empty"))
    }

    fn record(&mut self, rec: MetricsRecord) -> Result<()> {
        if let Some(w) = self.metrics.as_mut() {
            let line = serde_json::to_string(&rec).expect("metrics serialize");
            let path = self.cfg.metrics_path();
            writeln!(w, "{line}").map_err(io_err(&path))?;
            w.flush().map_err(io_err(&path))?;
        }
        self.history.push(rec);
        Ok(())
    }

    pub fn checkpoint(&self, meta: serde_json::Value) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            codec: self.codec,
            seed: self.seed,
            optimizer: Some(self.adam.clone()),
            meta,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(&self.cfg).expect("config serializes");
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        models::save_checkpoint(&self.checkpoint(meta), path)?;
        Ok(())
    }

    /// One step as `run` takes it: logs the record, and at eval points also
    /// evaluates and saves to `save_to`.
    pub fn advance(&mut self, save_to: Option<&Path>) -> Result<StepReport> {
        let rep = self.step()?;
        let at_eval = rep.step % self.cfg.eval_every == 0 || rep.step == self.cfg.total_steps;
        let val_loss = if at_eval { self.val_loss()? } else { None };
        self.record(MetricsRecord {
            step: rep.step,
            lr: rep.lr,
            train_loss: rep.loss,
            val_loss,
        })?;
        if at_eval {
            if let Some(p) = save_to {
                self.save(p)?;
            }
        }
        Ok(rep)
    }

    /// Runs until `total_steps`, logging every step, evaluating and saving a
    /// checkpoint every `eval_every` steps and at the end. `on_step` can stop
    /// the run early by returning `false`; a checkpoint is saved then too.
    pub fn run(&mut self, save_to: Option<&Path>, mut on_step: impl FnMut(&StepReport) -> bool) -> Result<()> {
        while self.adam.step < self.cfg.total_steps {
            let rep = self.advance(save_to)?;
            if !on_step(&rep) {
                let saved = rep.step % self.cfg.eval_every == 0 || rep.step == self.cfg.total_steps;
                if let (Some(p), false) = (save_to, saved) {
                    self.save(p)?;
                }
                break;
            }
        }
        Ok(())
    }
}

/// Summary of a [`train_loop`] run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: u64,
    pub final_train_loss: f64,
    pub final_val_loss: Option<f64>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Trains from a manifest, writing `metrics.jsonl` and `last.vmtc` under
/// `cfg.checkpoint_dir`. With `resume`, continues from an existing checkpoint.
pub fn train_loop<T: Float>(
    model_cfg: ModelConfig,
    manifest: &Manifest,
    cfg: TrainConfig,
    codec: CodecConfig,
    resume: bool,
) -> Result<TrainOutcome> {
    let train = manifest.load_split(Split::Train, &codec)?;
    let val = match manifest.load_split(Split::Validation, &codec) {
        Ok(v) => v,
        Err(DataError::EmptySplit(_)) => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let ckpt_path = cfg.checkpoint_path();
    let mut trainer = if resume && ckpt_path.exists() {
        let ckpt = models::load_checkpoint::<T>(&ckpt_path)?;
        if ckpt.model.config != model_cfg {
            return Err(TrainError::Config("model config differs from the checkpoint being resumed".into()));
        }
        Trainer::from_checkpoint(ckpt, cfg.clone(), &train, &val)?
    } else {
        let model = Model::<T>::new(model_cfg, cfg.seed)?;
        Trainer::new(model, cfg.clone(), codec, &train, &val)?
    };
    let metrics = cfg.metrics_path();
    trainer.log_to(&metrics)?;
    trainer.run(Some(&ckpt_path), |_| true)?;
    let last = trainer.history().last().cloned();
    Ok(TrainOutcome {
        steps: trainer.steps_taken(),
        final_train_loss: last.as_ref().map_or(f64::NAN, |r| r.train_loss),
        final_val_loss: last.and_then(|r| r.val_loss),
        checkpoint: ckpt_path,
        metrics,
    })
}
