//! Training loop: configuration, per-batch step, epoch schedule, loss log and
//! checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Utterance;
use crate::corpus::{decode_tensor, encode_tensor};
use crate::error::{Error, Result};
use crate::model::{LossBreakdown, LossWeights, ModelConfig, ProsodyModel, SECTIONS};
use crate::nn::{Adam, AdamConfig, Grads};

/// Model size presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    Toy,
    Tiny,
}

/// Numeric mode of parameters and optimizer state between steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Round parameters and moments to `f32` after every step; checkpoints are lossless.
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Stop after this many steps in total; 0 means run all epochs.
    pub max_steps: u64,
    pub sigma_min: f64,
    pub seed: u64,
    pub w_cfm: f64,
    pub w_prior: f64,
    pub w_dur: f64,
    pub w_tp_align: f64,
    /// Write a checkpoint every N steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub clip_norm: f64,
    pub model: ModelSize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus/manifest.jsonl"),
            out_dir: PathBuf::from("runs/default"),
            batch_size: 8,
            learning_rate: 1e-3,
            epochs: 500,
            max_steps: 0,
            sigma_min: crate::acoustic::DEFAULT_SIGMA_MIN,
            seed: 0,
            w_cfm: 1.0,
            w_prior: 1.0,
            w_dur: 1.0,
            w_tp_align: 1.0,
            checkpoint_every: 0,
            clip_norm: 0.0,
            model: ModelSize::Toy,
            precision: Precision::F32,
        }
    }
}

const CONFIG_KEYS: [&str; 16] = [
    "corpus",
    "out_dir",
    "batch_size",
    "learning_rate",
    "epochs",
    "max_steps",
    "sigma_min",
    "seed",
    "w_cfm",
    "w_prior",
    "w_dur",
    "w_tp_align",
    "checkpoint_every",
    "clip_norm",
    "model",
    "precision",
];

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "corpus" => self.corpus = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "batch_size" => self.batch_size = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "sigma_min" => self.sigma_min = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "w_cfm" => self.w_cfm = num(key, value)?,
            "w_prior" => self.w_prior = num(key, value)?,
            "w_dur" => self.w_dur = num(key, value)?,
            "w_tp_align" => self.w_tp_align = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "model" => {
                self.model = match value {
                    "toy" => ModelSize::Toy,
                    "tiny" => ModelSize::Tiny,
                    _ => return Err(Error::Config(format!("model: expected toy or tiny, got {value:?}"))),
                }
            }
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("precision: expected f32 or f64, got {value:?}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < 1.0) {
            return bad("sigma_min must lie in (0, 1)");
        }
        let w = [self.w_cfm, self.w_prior, self.w_dur, self.w_tp_align];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return bad("loss weights must be finite and non-negative");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative");
        }
        Ok(())
    }

    /// Every key with its current value, in parseable form.
    pub fn show(&self) -> String {
        let mut s = String::new();
        for k in CONFIG_KEYS {
            let v = match k {
                "corpus" => self.corpus.display().to_string(),
                "out_dir" => self.out_dir.display().to_string(),
                "batch_size" => self.batch_size.to_string(),
                "learning_rate" => format!("{:e}", self.learning_rate),
                "epochs" => self.epochs.to_string(),
                "max_steps" => self.max_steps.to_string(),
                "sigma_min" => format!("{:e}", self.sigma_min),
                "seed" => self.seed.to_string(),
                "w_cfm" => self.w_cfm.to_string(),
                "w_prior" => self.w_prior.to_string(),
                "w_dur" => self.w_dur.to_string(),
                "w_tp_align" => self.w_tp_align.to_string(),
                "checkpoint_every" => self.checkpoint_every.to_string(),
                "clip_norm" => self.clip_norm.to_string(),
                "model" => format!("{:?}", self.model).to_lowercase(),
                "precision" => format!("{:?}", self.precision).to_lowercase(),
                _ => unreachable!(),
            };
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 of the shown configuration.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.show().as_bytes()))
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            cfm: self.w_cfm,
            prior: self.w_prior,
            dur: self.w_dur,
            tp_align: self.w_tp_align,
        }
    }

    pub fn model_config(&self, n_phones: usize, n_speakers: usize, n_mels: usize) -> ModelConfig {
        let base = match self.model {
            ModelSize::Toy => ModelConfig {
                n_mels,
                ..ModelConfig::toy(n_phones, n_speakers)
            },
            ModelSize::Tiny => ModelConfig::tiny(n_phones, n_speakers, n_mels),
        };
        ModelConfig {
            sigma_min: self.sigma_min,
            ..base
        }
    }
}

/// Derives an independent stream seed from the run seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.to_le_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes([d[0], d[1], d[2], d[3], d[4], d[5], d[6], d[7]])
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_STEP: u64 = 2;

/// Losses of one optimizer step, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub losses: LossBreakdown,
    pub total: f64,
}

/// Model, optimizer and schedule position.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: ProsodyModel,
    pub optimizer: Adam,
    /// Completed steps.
    pub step: u64,
    /// Exponential moving average of the per-term losses.
    pub running: LossBreakdown,
}

const RUNNING_DECAY: f64 = 0.9;

impl TrainState {
    pub fn new(config: TrainConfig, model_config: ModelConfig, words: &[String]) -> Result<Self> {
        config.validate()?;
        let mut model = ProsodyModel::new(model_config, words, derive_seed(config.seed, 0, 0))?;
        if config.precision == Precision::F32 {
            model.store.round_to_f32();
        }
        let optimizer = Adam::new(
            AdamConfig {
                lr: config.learning_rate,
                clip_norm: config.clip_norm,
                ..AdamConfig::default()
            },
            &model.store,
        );
        Ok(Self {
            config,
            model,
            optimizer,
            step: 0,
            running: LossBreakdown::default(),
        })
    }

    /// Fresh state whose model matches the corpus inventory.
    pub fn for_corpus(config: TrainConfig, lexicon: &crate::corpus::Lexicon, n_speakers: usize) -> Result<Self> {
        let mc = config.model_config(lexicon.n_phones(), n_speakers, crate::corpus::N_MELS);
        Self::new(config, mc, &lexicon.words())
    }

    pub fn steps_per_epoch(&self, n_utts: usize) -> u64 {
        n_utts.div_ceil(self.config.batch_size) as u64
    }

    /// Steps a full fit runs for.
    pub fn planned_steps(&self, n_utts: usize) -> u64 {
        let all = self.steps_per_epoch(n_utts) * self.config.epochs as u64;
        if self.config.max_steps > 0 {
            all.min(self.config.max_steps)
        } else {
            all
        }
    }

    /// Utterance indices of the batch for a (0-based) step: a seeded shuffle
    /// per epoch, cut into consecutive batches (the last may be short).
    pub fn batch_indices(&self, step: u64, n_utts: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch(n_utts).max(1);
        let epoch = step / spe;
        let b = (step % spe) as usize;
        let mut order: Vec<usize> = (0..n_utts).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            self.config.seed,
            STREAM_SHUFFLE,
            epoch,
        )));
        let bs = self.config.batch_size;
        order[b * bs..((b + 1) * bs).min(n_utts)].to_vec()
    }

    /// One optimizer step on `batch`: per utterance encode, MAS, the four
    /// losses and their gradients; then an update on the batch-mean total.
    pub fn train_step(&mut self, batch: &[&Utterance]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Training("empty batch".into()));
        }
        for u in batch {
            if u.n_frames() == 0 {
                return Err(Error::Training(format!(
                    "{}: no reference speech; training needs parallel data",
                    u.id
                )));
            }
        }
        let w = self.config.weights();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, STREAM_STEP, self.step));
        let scale = 1.0 / batch.len() as f64;
        let mut losses = LossBreakdown::default();
        let mut grads = Grads::default();
        for u in batch {
            let sample = self.model.sample(u, &mut rng)?;
            let (l, g) = self.model.sample_gradients(&sample, &w, scale)?;
            if !l.is_finite() {
                return Err(Error::Training(format!(
                    "{}: non-finite loss at step {}: {l:?}",
                    u.id,
                    self.step + 1
                )));
            }
            losses.add(&l.scaled(scale));
            grads.accumulate(g);
        }
        if grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Training(format!(
                "non-finite gradient at step {}",
                self.step + 1
            )));
        }
        self.optimizer.update(&mut self.model.store, &grads);
        if self.config.precision == Precision::F32 {
            self.model.store.round_to_f32();
            self.optimizer.round_to_f32();
        }
        self.step += 1;
        self.model.trained_steps = self.step;
        self.running = if self.step == 1 {
            losses
        } else {
            let mut r = self.running.scaled(RUNNING_DECAY);
            r.add(&losses.scaled(1.0 - RUNNING_DECAY));
            r
        };
        Ok(StepReport {
            step: self.step,
            losses,
            total: losses.total(&w),
        })
    }

    /// Runs the next step of the schedule.
    pub fn next_step(&mut self, corpus: &[Utterance]) -> Result<StepReport> {
        let idx = self.batch_indices(self.step, corpus.len());
        let batch: Vec<&Utterance> = idx.iter().map(|&i| &corpus[i]).collect();
        self.train_step(&batch)
    }

    /// Trains until the planned step count, appending to the loss log and
    /// writing checkpoints under `out_dir` when given.
    pub fn fit(&mut self, corpus: &[Utterance], out_dir: Option<&Path>) -> Result<Vec<StepReport>> {
        if corpus.is_empty() {
            return Err(Error::Training("empty corpus".into()));
        }
        let planned = self.planned_steps(corpus.len());
        let mut log = match out_dir {
            Some(d) => {
                fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                Some(LossLog::open(d.join(LOSS_LOG_FILE))?)
            }
            None => None,
        };
        let mut reports = Vec::new();
        while self.step < planned {
            let r = self.next_step(corpus)?;
            log::debug!("step {} total {:.4}", r.step, r.total);
            if let Some(l) = log.as_mut() {
                l.append(&r)?;
            }
            if let Some(d) = out_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && r.step % every == 0 {
                    save_checkpoint(self, checkpoint_path(d, r.step))?;
                }
            }
            reports.push(r);
        }
        if let Some(d) = out_dir {
            save_checkpoint(self, d.join(FINAL_CHECKPOINT))?;
        }
        Ok(reports)
    }
}

pub const LOSS_LOG_FILE: &str = "losses.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LOSS_LOG_HEADER: &str = "step,cfm,prior,dur,tp_align,total";

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step{step:06}.ckpt"))
}

/// Append-only CSV of per-step losses.
pub struct LossLog {
    file: fs::File,
    path: PathBuf,
}

impl LossLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let fresh = fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if fresh {
            writeln!(file, "{LOSS_LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self { file, path })
    }

    pub fn append(&mut self, r: &StepReport) -> Result<()> {
        let l = &r.losses;
        writeln!(
            self.file,
            "{},{},{},{},{},{}",
            r.step, l.cfm, l.prior, l.dur, l.tp_align, r.total
        )
        .map_err(|e| Error::io(&self.path, e))
    }
}

/// Parses a loss log back into reports.
pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<StepReport>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_LOG_HEADER) {
        return Err(Error::Format(format!("{}: missing loss log header", path.display())));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("{}: bad row {line:?}", path.display()));
            if f.len() != 6 {
                return Err(bad());
            }
            let n = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(StepReport {
                step: f[0].parse().map_err(|_| bad())?,
                losses: LossBreakdown {
                    cfm: n(1)?,
                    prior: n(2)?,
                    dur: n(3)?,
                    tp_align: n(4)?,
                },
                total: n(5)?,
            })
        })
        .collect()
}

// Checkpoint layout: b"PFMC", u32 header length, JSON header, then PFM1
// tensors back to back at the offsets the header lists.

const CHECKPOINT_MAGIC: &[u8; 4] = b"PFMC";
pub const CHECKPOINT_VERSION: &str = "pfm-checkpoint-1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    version: String,
    config_hash: String,
    step: u64,
    train_config: TrainConfig,
    model_config: ModelConfig,
    vocabulary: Vec<String>,
    running: LossBreakdown,
    adam_step: u64,
    adam: AdamConfig,
    sections: BTreeMap<String, Vec<TensorEntry>>,
}

const OPT_M: &str = "optimizer.m";
const OPT_V: &str = "optimizer.v";

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let store = &state.model.store;
    let mut payload = Vec::new();
    let mut sections: BTreeMap<String, Vec<TensorEntry>> = BTreeMap::new();
    let mut push = |section: &str, name: &str, m: &Array2<f64>, payload: &mut Vec<u8>| {
        let bytes = encode_tensor(&m.mapv(|v| v as f32));
        sections.entry(section.to_string()).or_default().push(TensorEntry {
            name: name.to_string(),
            offset: payload.len(),
            len: bytes.len(),
        });
        payload.extend_from_slice(&bytes);
    };
    for (id, p) in store.iter() {
        let section = p.section();
        if !SECTIONS.contains(&section) {
            return Err(Error::Checkpoint(format!(
                "parameter {} outside known sections",
                p.name
            )));
        }
        push(section, &p.name, &p.value, &mut payload);
        let _ = id;
    }
    for (id, p) in store.iter() {
        push(OPT_M, &p.name, &state.optimizer.m[id.0], &mut payload);
        push(OPT_V, &p.name, &state.optimizer.v[id.0], &mut payload);
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION.into(),
        config_hash: state.config.hash(),
        step: state.step,
        train_config: state.config.clone(),
        model_config: state.model.config.clone(),
        vocabulary: state.model.vocabulary().to_vec(),
        running: state.running,
        adam_step: state.optimizer.step,
        adam: state.optimizer.config,
        sections,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Restores a training state from a checkpoint.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic, expected PFMC".into()));
    }
    let hlen = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let json = bytes
        .get(8..8 + hlen)
        .ok_or_else(|| corrupt("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| corrupt(e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {:?}", header.version)));
    }
    if header.config_hash != header.train_config.hash() {
        return Err(corrupt("config hash does not match the stored configuration".into()));
    }
    let payload = &bytes[8 + hlen..];

    let mut state = TrainState::new(
        header.train_config.clone(),
        header.model_config.clone(),
        &header.vocabulary,
    )?;
    let mut seen = vec![[false; 3]; state.model.store.len()];
    for (section, entries) in &header.sections {
        let slot = match section.as_str() {
            OPT_M => 1,
            OPT_V => 2,
            s if SECTIONS.contains(&s) => 0,
            s => return Err(corrupt(format!("unknown section {s:?}"))),
        };
        for e in entries {
            let raw = payload
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| corrupt(format!("tensor {} out of bounds", e.name)))?;
            let (m, used) = decode_tensor(raw).map_err(|err| corrupt(format!("tensor {}: {err}", e.name)))?;
            if used != e.len {
                return Err(corrupt(format!("tensor {} has trailing bytes", e.name)));
            }
            let id = state
                .model
                .store
                .find(&e.name)
                .ok_or_else(|| corrupt(format!("unknown tensor {}", e.name)))?;
            let m = m.mapv(f64::from);
            let target = match slot {
                0 => state.model.store.value_mut(id),
                1 => &mut state.optimizer.m[id.0],
                _ => &mut state.optimizer.v[id.0],
            };
            if target.dim() != m.dim() {
                return Err(corrupt(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    e.name,
                    m.dim(),
                    target.dim()
                )));
            }
            *target = m;
            seen[id.0][slot] = true;
        }
    }
    if let Some(i) = seen.iter().position(|s| !s.iter().all(|&b| b)) {
        let name = state
            .model
            .store
            .iter()
            .nth(i)
            .map(|(_, p)| p.name.clone())
            .unwrap_or_default();
        return Err(corrupt(format!("missing tensors for {name}")));
    }
    state.step = header.step;
    state.model.trained_steps = header.step;
    state.running = header.running;
    state.optimizer.step = header.adam_step;
    state.optimizer.config = header.adam;
    Ok(state)
}

/// Loads only the model from a checkpoint.
pub fn load_model(path: impl AsRef<Path>) -> Result<ProsodyModel> {
    Ok(load_checkpoint(path)?.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_utterances;

    fn tiny_state(seed: u64) -> (TrainState, Vec<Utterance>) {
        let corpus = generate_utterances(8, 8, 2).unwrap();
        let cfg = TrainConfig {
            model: ModelSize::Tiny,
            batch_size: 4,
            epochs: 2,
            seed,
            ..Default::default()
        };
        (
            TrainState::for_corpus(cfg, &corpus.lexicon, 3).unwrap(),
            corpus.utterances,
        )
    }

    #[test]
    fn config_round_trips_through_show() {
        let cfg = TrainConfig {
            batch_size: 3,
            learning_rate: 2.5e-4,
            model: ModelSize::Tiny,
            ..Default::default()
        };
        let back = TrainConfig::parse(&cfg.show()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(TrainConfig::default().hash(), cfg.hash());
    }

    #[test]
    fn config_parse_errors() {
        assert!(TrainConfig::parse("batch_size = 0").is_err());
        assert!(TrainConfig::parse("nope = 1").is_err());
        assert!(TrainConfig::parse("batch_size").is_err());
        assert!(TrainConfig::parse("model = huge").is_err());
        let c = TrainConfig::parse("# comment\nseed = 9 # trailing\n\n").unwrap();
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn two_epochs_of_eight_at_batch_four_is_four_steps() {
        let (mut s, utts) = tiny_state(0);
        assert_eq!(s.planned_steps(utts.len()), 4);
        let r = s.fit(&utts, None).unwrap();
        assert_eq!(r.len(), 4);
        assert_eq!(s.step, 4);
    }

    #[test]
    fn partial_batches_round_up() {
        let (s, _) = tiny_state(0);
        assert_eq!(s.steps_per_epoch(9), 3);
        assert_eq!(s.batch_indices(2, 9).len(), 1);
        let mut all: Vec<usize> = (0..3).flat_map(|b| s.batch_indices(b, 9)).collect();
        all.sort();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn total_equals_sum_of_terms() {
        let (mut s, utts) = tiny_state(1);
        let r = s.next_step(&utts).unwrap();
        let l = r.losses;
        assert!((r.total - (l.cfm + l.prior + l.dur + l.tp_align)).abs() <= 1e-6 * r.total.abs().max(1.0));
    }

    #[test]
    fn same_seed_same_first_step() {
        let (mut a, utts) = tiny_state(5);
        let (mut b, _) = tiny_state(5);
        assert_eq!(a.next_step(&utts).unwrap(), b.next_step(&utts).unwrap());
    }

    #[test]
    fn zero_weights_change_nothing() {
        let (mut s, utts) = tiny_state(2);
        s.config.w_cfm = 0.0;
        s.config.w_prior = 0.0;
        s.config.w_dur = 0.0;
        s.config.w_tp_align = 0.0;
        let before = s.model.store.clone();
        s.next_step(&utts).unwrap();
        for (id, p) in before.iter() {
            assert_eq!(p.value, *s.model.store.value(id), "{}", p.name);
        }
    }

    #[test]
    fn empty_mel_is_rejected() {
        let (mut s, utts) = tiny_state(0);
        let mut u = utts[0].clone();
        u.mel = crate::corpus::MelSpectrogram {
            data: Array2::zeros((0, crate::corpus::N_MELS)),
        };
        assert!(matches!(s.train_step(&[&u]), Err(Error::Training(_))));
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let (mut a, utts) = tiny_state(3);
        a.next_step(&utts).unwrap();
        a.next_step(&utts).unwrap();
        let path = dir.path().join("k.ckpt");
        save_checkpoint(&a, &path).unwrap();
        let mut b = load_checkpoint(&path).unwrap();
        assert_eq!(b.step, 2);
        assert_eq!(a.next_step(&utts).unwrap(), b.next_step(&utts).unwrap());
    }

    #[test]
    fn corrupt_checkpoint_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let (s, _) = tiny_state(0);
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&s, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 10);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        fs::write(&path, b"nonsense").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn loss_log_appends_and_parses() {
        let dir = tempfile::tempdir().unwrap();
        let (mut s, utts) = tiny_state(0);
        s.config.epochs = 1;
        let r1 = s.fit(&utts, Some(dir.path())).unwrap();
        s.config.epochs = 2;
        let r2 = s.fit(&utts, Some(dir.path())).unwrap();
        let rows = read_loss_log(dir.path().join(LOSS_LOG_FILE)).unwrap();
        assert_eq!(rows.len(), r1.len() + r2.len());
        assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert!(dir.path().join(FINAL_CHECKPOINT).exists());
    }
}
