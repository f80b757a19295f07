//! Pretraining orchestration: warm-up epoch, per-epoch augmentation driven
//! by the previous epoch's scores, loss recording, momentum updates, prune
//! mask refresh, checkpoints, metrics, and ablation grids.

use crate::augment::{AugOpKind, AugPolicy, MagnitudeTable};
use crate::dataio::{self, LtDataset, PartitionScheme};
use crate::eval::{self, GroupReport, ProbeSpec, Shots};
use crate::memtrack::{self, HeadTail, LossStage, MemTable, ScoreKind};
use crate::model::{
    images_to_tensor, refresh_prune_mask, BclVariant, Encoder, EncoderSpec, Mode, NormKind,
    PruneMask, ViewRule,
};
use crate::tensor::{
    load_checkpoint, save_checkpoint, Checkpoint, Optimizer, OptimizerKind, Tape,
};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Simclr,
    NonBclFixed,
    BclI,
    BclD,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Simclr => "simclr",
            Method::NonBclFixed => "non-bcl-fixed",
            Method::BclI => "bcl-i",
            Method::BclD => "bcl-d",
        }
    }
}

fn default_height() -> usize {
    32
}
fn default_width() -> usize {
    32
}
fn default_scheme() -> PartitionScheme {
    PartitionScheme::Threshold
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_path: PathBuf,
    #[serde(default)]
    pub holdout_path: Option<PathBuf>,
    #[serde(default)]
    pub test_path: Option<PathBuf>,
    #[serde(default = "default_height")]
    pub height: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    pub classes: usize,
    #[serde(default = "default_scheme")]
    pub partition_scheme: PartitionScheme,
    /// Provenance only; the construction tool stamps it.
    #[serde(default)]
    pub imbalance_factor: Option<f64>,
}

fn default_channels() -> Vec<usize> {
    vec![32, 64, 128, 256]
}
fn default_hidden() -> usize {
    256
}
fn default_embed() -> usize {
    128
}
fn default_norm() -> NormKind {
    NormKind::Batch
}
fn default_tau() -> f64 {
    0.2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_norm")]
    pub norm: NormKind,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Only meaningful for the damaged variant; defaults to 0.9 there.
    #[serde(default)]
    pub prune_ratio: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: default_channels(),
            hidden_dim: default_hidden(),
            embed_dim: default_embed(),
            norm: default_norm(),
            tau: default_tau(),
            prune_ratio: None,
        }
    }
}

fn default_epochs() -> usize {
    200
}
fn default_batch() -> usize {
    256
}
fn default_lr_init() -> f64 {
    0.1
}
fn default_lr_final() -> f64 {
    1e-4
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_warmup() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr_init")]
    pub lr_init: f64,
    #[serde(default = "default_lr_final")]
    pub lr_final: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr_init: default_lr_init(),
            lr_final: default_lr_final(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            warmup_epochs: default_warmup(),
        }
    }
}

fn default_beta() -> f64 {
    0.97
}
fn default_k() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoostConfig {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Only meaningful with the fixed-strength control; defaults to 0.5.
    #[serde(default)]
    pub fixed_strength: Option<f64>,
    /// Op forced into every sampled subset (component ablations).
    #[serde(default)]
    pub force_op: Option<String>,
    /// Magnitude-range table override file.
    #[serde(default)]
    pub magnitudes_path: Option<PathBuf>,
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig {
            beta: default_beta(),
            k: default_k(),
            fixed_strength: None,
            force_op: None,
            magnitudes_path: None,
        }
    }
}

fn default_probe_shots() -> Shots {
    Shots::Count(100)
}
fn default_probe_epochs() -> usize {
    100
}
fn default_probe_lr_init() -> f64 {
    1e-2
}
fn default_probe_lr_final() -> f64 {
    1e-6
}
fn default_probe_wd() -> f64 {
    5e-6
}
fn default_probe_batch() -> usize {
    128
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_probe_shots")]
    pub shots: Shots,
    #[serde(default = "default_probe_epochs")]
    pub epochs: usize,
    #[serde(default = "default_probe_lr_init")]
    pub lr_init: f64,
    #[serde(default = "default_probe_lr_final")]
    pub lr_final: f64,
    #[serde(default = "default_probe_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_probe_batch")]
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            shots: default_probe_shots(),
            epochs: default_probe_epochs(),
            lr_init: default_probe_lr_init(),
            lr_final: default_probe_lr_final(),
            weight_decay: default_probe_wd(),
            batch_size: default_probe_batch(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub boost: BoostConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default)]
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    /// Validate method-specific fields and fill their defaults. The result
    /// is fully concrete: re-running from the snapshot reproduces the run.
    pub fn resolve(mut self) -> Result<Self> {
        match self.method {
            Method::BclD => {
                let p = self.model.prune_ratio.unwrap_or(0.9);
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::Config(format!("prune_ratio {p} outside [0, 1)")));
                }
                self.model.prune_ratio = Some(p);
            }
            _ => {
                if self.model.prune_ratio.is_some() {
                    return Err(Error::Config(format!(
                        "model.prune_ratio only applies to bcl-d, not {}",
                        self.method.name()
                    )));
                }
            }
        }
        match self.method {
            Method::NonBclFixed => {
                let s = self.boost.fixed_strength.unwrap_or(0.5);
                if !(0.0..=1.0).contains(&s) {
                    return Err(Error::Config(format!("fixed_strength {s} outside [0, 1]")));
                }
                self.boost.fixed_strength = Some(s);
            }
            _ => {
                if self.boost.fixed_strength.is_some() {
                    return Err(Error::Config(format!(
                        "boost.fixed_strength only applies to non-bcl-fixed, not {}",
                        self.method.name()
                    )));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.boost.beta) {
            return Err(Error::Config(format!(
                "boost.beta {} outside [0, 1]",
                self.boost.beta
            )));
        }
        if self.boost.k == 0 || self.boost.k > 16 {
            return Err(Error::Config(format!("boost.k {} outside 1..=16", self.boost.k)));
        }
        if let Some(op) = &self.boost.force_op {
            op.parse::<AugOpKind>()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.train.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if self.train.warmup_epochs == 0 {
            return Err(Error::Config("train.warmup_epochs must be at least 1".into()));
        }
        self.encoder_spec().validate()?;
        Ok(self)
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec {
            in_h: self.data.height,
            in_w: self.data.width,
            channels: self.model.channels.clone(),
            hidden_dim: self.model.hidden_dim,
            embed_dim: self.model.embed_dim,
            norm: self.model.norm,
            tau: self.model.tau,
        }
    }

    pub fn aug_policy(&self) -> Result<AugPolicy> {
        let mut policy = AugPolicy::new(self.boost.k)?;
        if let Some(path) = &self.boost.magnitudes_path {
            policy.magnitudes = MagnitudeTable::load(path)?;
        }
        if let Some(op) = &self.boost.force_op {
            policy.force_op = Some(op.parse()?);
        }
        Ok(policy)
    }

    pub fn probe_spec(&self, shots: Option<Shots>, seed: u64) -> ProbeSpec {
        ProbeSpec {
            shots: shots.unwrap_or(self.probe.shots),
            epochs: self.probe.epochs,
            lr_init: self.probe.lr_init,
            lr_final: self.probe.lr_final,
            weight_decay: self.probe.weight_decay,
            batch_size: self.probe.batch_size,
            seed,
        }
    }
}

/// Parse a config file, apply dotted-path overrides, and deserialize with
/// unknown keys rejected.
pub fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)?;
    for (key, raw) in overrides {
        set_dotted(&mut value, key, parse_override(raw))?;
    }
    let cfg: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    cfg.resolve()
}

/// Interpret an override right-hand side: JSON literal when it parses,
/// plain string otherwise.
pub fn parse_override(raw: &str) -> serde_json::Value {
    serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()))
}

/// Set a dotted-path key inside a JSON tree, creating intermediate objects.
pub fn set_dotted(root: &mut serde_json::Value, path: &str, val: serde_json::Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {path:?}")));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {path:?} crosses a non-object")))?;
        cur = obj
            .entry(p.to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("override {path:?} crosses a non-object")))?;
    obj.insert(parts[parts.len() - 1].to_string(), val);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: u64,
    pub loss_mean: f64,
    pub lr: f64,
    pub phi_head_ml: f64,
    pub phi_tail_ml: f64,
    pub phi_head_cl: f64,
    pub phi_tail_cl: f64,
    pub wallclock_s: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,loss_mean,lr,phi_head_ml,phi_tail_ml,phi_head_cl,phi_tail_cl,wallclock_s";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.6},{:.8},{:.6},{:.6},{:.6},{:.6},{:.3}",
            self.epoch,
            self.loss_mean,
            self.lr,
            self.phi_head_ml,
            self.phi_tail_ml,
            self.phi_head_cl,
            self.phi_tail_cl,
            self.wallclock_s
        )
    }

    pub fn parse(line: &str) -> Result<MetricsRow> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return Err(Error::Data(format!("bad metrics row {line:?}")));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Data(format!("bad metrics field {s:?}")))
        };
        Ok(MetricsRow {
            epoch: f[0]
                .parse()
                .map_err(|_| Error::Data(format!("bad epoch {:?}", f[0])))?,
            loss_mean: num(f[1])?,
            lr: num(f[2])?,
            phi_head_ml: num(f[3])?,
            phi_tail_ml: num(f[4])?,
            phi_head_cl: num(f[5])?,
            phi_tail_cl: num(f[6])?,
            wallclock_s: num(f[7])?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(MetricsRow::parse)
        .collect()
}

/// SHA-256 of a file's bytes, hex-encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 8192];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Append-only per-epoch instantaneous-loss history backing the post-hoc
/// tail diagnostics: a length-prefixed JSON header then fixed-size rows of
/// `n` little-endian f32 losses.
pub struct LossHistory {
    path: PathBuf,
    n: usize,
}

#[derive(Serialize, Deserialize)]
struct LossHistoryHeader {
    version: u32,
    n: usize,
}

impl LossHistory {
    pub fn create(path: &Path, n: usize) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        let json = serde_json::to_vec(&LossHistoryHeader { version: 1, n })?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.flush()?;
        Ok(LossHistory {
            path: path.to_path_buf(),
            n,
        })
    }

    pub fn open(path: &Path) -> Result<(Self, usize)> {
        let mut f = File::open(path)?;
        let mut len_bytes = [0u8; 8];
        f.read_exact(&mut len_bytes)?;
        let jlen = u64::from_le_bytes(len_bytes) as usize;
        let mut json = vec![0u8; jlen];
        f.read_exact(&mut json)?;
        let header: LossHistoryHeader = serde_json::from_slice(&json)?;
        if header.version != 1 {
            return Err(Error::Data("unsupported loss history version".into()));
        }
        let header_len = 8 + jlen as u64;
        let total = f.metadata()?.len();
        let rows = ((total - header_len) / (header.n as u64 * 4)) as usize;
        Ok((
            LossHistory {
                path: path.to_path_buf(),
                n: header.n,
            },
            rows,
        ))
    }

    fn header_len(&self) -> Result<u64> {
        let mut f = File::open(&self.path)?;
        let mut len_bytes = [0u8; 8];
        f.read_exact(&mut len_bytes)?;
        Ok(8 + u64::from_le_bytes(len_bytes))
    }

    pub fn append_row(&self, losses: &[f64]) -> Result<()> {
        debug_assert_eq!(losses.len(), self.n);
        let mut f = OpenOptions::new().append(true).open(&self.path)?;
        let mut buf = Vec::with_capacity(self.n * 4);
        for &l in losses {
            buf.extend_from_slice(&(l as f32).to_le_bytes());
        }
        f.write_all(&buf)?;
        Ok(())
    }

    /// Drop any rows past `rows` (resume support).
    pub fn truncate_rows(&self, rows: usize) -> Result<()> {
        let keep = self.header_len()? + (rows as u64) * (self.n as u64) * 4;
        let f = OpenOptions::new().write(true).open(&self.path)?;
        f.set_len(keep)?;
        Ok(())
    }

    pub fn read_rows(&self) -> Result<Vec<Vec<f64>>> {
        let mut f = File::open(&self.path)?;
        f.seek(SeekFrom::Start(self.header_len()?))?;
        let mut raw = Vec::new();
        f.read_to_end(&mut raw)?;
        let row_bytes = self.n * 4;
        if raw.len() % row_bytes != 0 {
            return Err(Error::Data("truncated loss history".into()));
        }
        Ok(raw
            .chunks_exact(row_bytes)
            .map(|row| {
                row.chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                    .collect()
            })
            .collect())
    }
}

/// Everything a run leaves behind, kept in memory for callers and tests.
pub struct TrainState {
    pub encoder: Encoder<f32>,
    pub optimizer: Optimizer,
    pub memtable: MemTable,
    /// Last completed epoch.
    pub epoch: u64,
    pub seed: u64,
    pub metrics: Vec<MetricsRow>,
    /// Scores consumed by each epoch's augmentation (empty for plain
    /// epochs); instrumentation for the score-lag contract.
    pub scores_used: Vec<Vec<f64>>,
}

pub fn ckpt_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("ckpt-e{epoch:04}.bin"))
}

pub fn mem_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("mem-e{epoch:04}.bin"))
}

fn build_checkpoint(cfg: &ExperimentConfig, state: &TrainState) -> Result<Checkpoint> {
    let (steps, moments, moments2) = state.optimizer.export_state();
    let extra = serde_json::json!({
        "spec": state.encoder.spec,
        "method": cfg.method,
        "optimizer": {
            "kind": "sgd-momentum",
            "momentum": cfg.train.momentum,
            "steps": steps,
        },
    });
    let mut ck = Checkpoint::new(state.epoch, state.seed, extra);
    for p in &state.encoder.params {
        ck.push_f32(p.name.clone(), p.shape.clone(), p.data.clone());
    }
    for (name, mean, var) in state.encoder.running_stats_buffers() {
        ck.push_f32(format!("running.{name}.mean"), vec![mean.len()], mean);
        ck.push_f32(format!("running.{name}.var"), vec![var.len()], var);
    }
    for (p, m) in state.encoder.params.iter().zip(&moments) {
        ck.push_f64(format!("opt.m.{}", p.name), vec![m.len()], m.clone());
    }
    for (p, v) in state.encoder.params.iter().zip(&moments2) {
        ck.push_f64(format!("opt.v.{}", p.name), vec![v.len()], v.clone());
    }
    Ok(ck)
}

/// Rebuild encoder + optimizer from a checkpoint file.
pub fn restore_encoder(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> Result<(Encoder<f32>, Optimizer)> {
    let spec: EncoderSpec = serde_json::from_value(ckpt.extra["spec"].clone())
        .map_err(|_| Error::Checkpoint("checkpoint is missing the encoder spec".into()))?;
    if spec != cfg.encoder_spec() {
        return Err(Error::Checkpoint(
            "checkpoint encoder spec does not match the config".into(),
        ));
    }
    let mut encoder: Encoder<f32> = Encoder::init(spec, ckpt.rng_state)?;
    for p in &mut encoder.params {
        let (info, buf) = ckpt.require(&p.name)?;
        if info.shape != p.shape {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?}, expected {:?}",
                p.name, info.shape, p.shape
            )));
        }
        p.data = buf.as_f32()?.to_vec();
    }
    for (i, _) in cfg.model.channels.iter().enumerate() {
        let (_, mean) = ckpt.require(&format!("running.block{i}.norm.mean"))?;
        let (_, var) = ckpt.require(&format!("running.block{i}.norm.var"))?;
        encoder.set_running_stats(i, mean.as_f32()?.to_vec(), var.as_f32()?.to_vec())?;
    }
    let mut optimizer = Optimizer::new(
        OptimizerKind::sgd(cfg.train.momentum),
        cfg.train.lr_init,
        cfg.train.lr_final,
        cfg.train.epochs,
        cfg.train.weight_decay,
    );
    let steps = ckpt.extra["optimizer"]["steps"].as_u64().unwrap_or(0);
    let mut moments = Vec::new();
    for p in &encoder.params {
        let (_, m) = ckpt.require(&format!("opt.m.{}", p.name))?;
        moments.push(m.as_f64()?.to_vec());
    }
    optimizer.import_state(steps, moments, Vec::new());
    Ok((encoder, optimizer))
}

struct RunIo {
    dir: PathBuf,
    metrics: BufWriter<File>,
    losses: LossHistory,
}

impl RunIo {
    fn create(dir: &Path, n: usize) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut metrics = BufWriter::new(File::create(dir.join("metrics.csv"))?);
        writeln!(metrics, "{METRICS_HEADER}")?;
        metrics.flush()?;
        let losses = LossHistory::create(&dir.join("losses.bin"), n)?;
        Ok(RunIo {
            dir: dir.to_path_buf(),
            metrics,
            losses,
        })
    }

    /// Reopen an existing run directory, keeping epochs `..= keep_epoch`.
    fn reopen(dir: &Path, n: usize, keep_epoch: u64) -> Result<Self> {
        let metrics_path = dir.join("metrics.csv");
        if !metrics_path.exists() {
            return Err(Error::Config(format!(
                "{} is not a previous run directory (resume continues in place; \
                 point out_dir at the directory that holds the checkpoint)",
                dir.display()
            )));
        }
        let rows = read_metrics(&metrics_path)?;
        let mut f = BufWriter::new(File::create(&metrics_path)?);
        writeln!(f, "{METRICS_HEADER}")?;
        for r in rows.iter().filter(|r| r.epoch <= keep_epoch) {
            writeln!(f, "{}", r.to_csv())?;
        }
        f.flush()?;
        let (losses, _) = LossHistory::open(&dir.join("losses.bin"))?;
        if losses.n != n {
            return Err(Error::Data(
                "loss history sample count does not match the dataset".into(),
            ));
        }
        losses.truncate_rows(keep_epoch as usize + 1)?;
        Ok(RunIo {
            dir: dir.to_path_buf(),
            metrics: f,
            losses,
        })
    }

    fn push_row(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.metrics, "{}", row.to_csv())?;
        self.metrics.flush()?;
        Ok(())
    }
}

fn epoch_phis(
    table: &MemTable,
    groups: &[HeadTail],
) -> Result<(f64, f64, f64, f64)> {
    let ml = memtrack::tail_discovery(table, groups, 0.1, ScoreKind::Momentum)?;
    let cl = memtrack::tail_discovery(table, groups, 0.1, ScoreKind::Instantaneous)?;
    Ok((ml.phi_head, ml.phi_tail, cl.phi_head, cl.phi_tail))
}

/// Run pretraining from scratch per the resolved config.
pub fn pretrain(cfg: &ExperimentConfig) -> Result<TrainState> {
    let ds = load_train_dataset(cfg)?;
    let encoder = Encoder::init(cfg.encoder_spec(), cfg.seed)?;
    let optimizer = Optimizer::new(
        OptimizerKind::sgd(cfg.train.momentum),
        cfg.train.lr_init,
        cfg.train.lr_final,
        cfg.train.epochs,
        cfg.train.weight_decay,
    );
    let memtable = MemTable::new(ds.len(), cfg.boost.beta)?;
    let mut state = TrainState {
        encoder,
        optimizer,
        memtable,
        epoch: 0,
        seed: cfg.seed,
        metrics: Vec::new(),
        scores_used: Vec::new(),
    };
    let mut io = RunIo::create(&cfg.out_dir, ds.len())?;
    train_epochs(cfg, &ds, &mut state, 0, &mut io)?;
    Ok(state)
}

/// Resume from a checkpoint: epochs after the checkpointed one replay with
/// the same keyed streams the uninterrupted run would have used.
pub fn resume(cfg: &ExperimentConfig, ckpt_file: &Path) -> Result<TrainState> {
    let ds = load_train_dataset(cfg)?;
    let ckpt = load_checkpoint(ckpt_file)?;
    if ckpt.rng_state != cfg.seed {
        return Err(Error::Config(format!(
            "checkpoint was trained with seed {}, config says {}",
            ckpt.rng_state, cfg.seed
        )));
    }
    let (encoder, optimizer) = restore_encoder(cfg, &ckpt)?;
    let epoch = ckpt.epoch;
    let dir = ckpt_file
        .parent()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no parent directory".into()))?;
    let memtable = MemTable::load(&mem_path(dir, epoch), Some(ds.len()))?;
    let mut io = RunIo::reopen(&cfg.out_dir, ds.len(), epoch)?;
    let mut state = TrainState {
        encoder,
        optimizer,
        memtable,
        epoch,
        seed: cfg.seed,
        metrics: read_metrics(&cfg.out_dir.join("metrics.csv"))?,
        scores_used: Vec::new(),
    };
    train_epochs(cfg, &ds, &mut state, epoch + 1, &mut io)?;
    Ok(state)
}

fn load_train_dataset(cfg: &ExperimentConfig) -> Result<LtDataset> {
    let geometry = dataio::Geometry {
        height: cfg.data.height,
        width: cfg.data.width,
        classes: cfg.data.classes,
    };
    let mut ds = dataio::load_dataset(&cfg.data.train_path, geometry)?;
    ds.set_partitions(cfg.data.partition_scheme)?;
    Ok(ds)
}

fn train_epochs(
    cfg: &ExperimentConfig,
    ds: &LtDataset,
    state: &mut TrainState,
    start_epoch: u64,
    io: &mut RunIo,
) -> Result<()> {
    let policy = cfg.aug_policy()?;
    let fill = ds.mean_rgb();
    let groups: Vec<HeadTail> = ds.sample_partitions().iter().map(|&p| p.into()).collect();
    let total_epochs = cfg.train.epochs as u64;
    let warmup = cfg.train.warmup_epochs as u64;
    let prune_ratio = cfg.model.prune_ratio.unwrap_or(0.0);
    let mut mask: Option<PruneMask<f32>> = if cfg.method == Method::BclD && start_epoch > 0 {
        Some(refresh_prune_mask(&state.encoder, prune_ratio)?)
    } else {
        None
    };

    for epoch in start_epoch..total_epochs {
        let started = Instant::now();
        let plain = epoch < warmup || cfg.method == Method::Simclr;
        let scores: Vec<f64> = if plain {
            Vec::new()
        } else {
            match cfg.method {
                Method::BclI | Method::BclD => state.memtable.scores(),
                _ => Vec::new(),
            }
        };
        let rule = if plain {
            ViewRule::Plain
        } else {
            match cfg.method {
                Method::Simclr => ViewRule::Plain,
                Method::NonBclFixed => ViewRule::Fixed {
                    strength: cfg.boost.fixed_strength.expect("resolved"),
                    policy: &policy,
                },
                Method::BclI | Method::BclD => ViewRule::Boosted {
                    scores: &scores,
                    policy: &policy,
                },
            }
        };
        let variant = if !plain && cfg.method == Method::BclD {
            BclVariant::D
        } else {
            BclVariant::I
        };
        if variant == BclVariant::D && mask.is_none() {
            mask = Some(refresh_prune_mask(&state.encoder, prune_ratio)?);
        }

        let mut stage = LossStage::new(ds.len());
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for batch_ids in ds.shuffled_batches(cfg.train.batch_size.min(ds.len()), cfg.seed, epoch)? {
            let batch: Vec<(u32, &[u8])> = batch_ids
                .iter()
                .map(|&id| (id, ds.records[id as usize].pixels.as_slice()))
                .collect();
            let (views_a, views_b) = crate::model::build_views(
                &batch,
                ds.geometry.height,
                ds.geometry.width,
                rule,
                fill,
                cfg.seed,
                epoch,
            )?;
            let step = (|| -> Result<(f64, Vec<f32>)> {
                let mut tape: Tape<f32> = Tape::new();
                let (da, sa) = images_to_tensor::<f32>(
                    &views_a,
                    ds.geometry.height,
                    ds.geometry.width,
                )?;
                let (db, sb) = images_to_tensor::<f32>(
                    &views_b,
                    ds.geometry.height,
                    ds.geometry.width,
                )?;
                let xa = tape.leaf(da, &sa, false)?;
                let xb = tape.leaf(db, &sb, false)?;
                let pids = state.encoder.bind(&mut tape, true)?;
                let za = state
                    .encoder
                    .forward_with(&mut tape, xa, &pids, Mode::Train)?
                    .embedding;
                let zb = state
                    .encoder
                    .forward_with(&mut tape, xb, &pids, Mode::Train)?
                    .embedding;
                let out = match variant {
                    BclVariant::I => {
                        crate::model::ntxent_two_view(&mut tape, za, zb, za, zb, cfg.model.tau)?
                    }
                    BclVariant::D => {
                        let m = mask.as_ref().expect("mask prepared above");
                        let mids = m.masked_ids(&mut tape, &pids)?;
                        let ga = state
                            .encoder
                            .forward_with(&mut tape, xa, &mids, Mode::TrainFrozenStats)?
                            .embedding;
                        let gb = state
                            .encoder
                            .forward_with(&mut tape, xb, &mids, Mode::TrainFrozenStats)?
                            .embedding;
                        crate::model::ntxent_two_view(&mut tape, za, zb, ga, gb, cfg.model.tau)?
                    }
                };
                tape.backward(out.mean)?;
                let grads: Vec<Vec<f32>> = pids
                    .iter()
                    .map(|&id| tape.grad(id).expect("bound params require grad").to_vec())
                    .collect();
                state
                    .optimizer
                    .step(&mut state.encoder.params, &grads, epoch as usize)?;
                Ok((
                    tape.item(out.mean) as f64,
                    tape.data(out.per_sample).to_vec(),
                ))
            })();
            let (mean_loss, per_sample) = match step {
                Ok(v) => v,
                Err(e) => {
                    // Dump state for post-mortem before surfacing the error.
                    let _ = save_checkpoint(&io.dir.join("ckpt-abort.bin"), &build_checkpoint(cfg, state)?);
                    return Err(e);
                }
            };
            loss_sum += mean_loss * batch_ids.len() as f64;
            seen += batch_ids.len();
            for (&id, &l) in batch_ids.iter().zip(&per_sample) {
                stage.insert(id, l as f64)?;
            }
        }

        let losses = stage.finish()?;
        io.losses.append_row(&losses)?;
        state.memtable.record_epoch_losses(&losses)?;
        state.memtable.normalize_scores();
        if cfg.method == Method::BclD {
            mask = Some(refresh_prune_mask(&state.encoder, prune_ratio)?);
        }
        let (phi_head_ml, phi_tail_ml, phi_head_cl, phi_tail_cl) =
            epoch_phis(&state.memtable, &groups)?;
        let row = MetricsRow {
            epoch,
            loss_mean: loss_sum / seen as f64,
            lr: state.optimizer.lr_at(epoch as usize),
            phi_head_ml,
            phi_tail_ml,
            phi_head_cl,
            phi_tail_cl,
            wallclock_s: if cfg.deterministic {
                0.0
            } else {
                started.elapsed().as_secs_f64()
            },
        };
        io.push_row(&row)?;
        state.metrics.push(row);
        state.scores_used.push(scores);
        state.epoch = epoch;

        save_checkpoint(&ckpt_path(&io.dir, epoch), &build_checkpoint(cfg, state)?)?;
        state.memtable.save(&mem_path(&io.dir, epoch))?;
    }
    let last = total_epochs - 1;
    std::fs::copy(ckpt_path(&io.dir, last), io.dir.join("ckpt-final.bin"))?;
    Ok(())
}

/// Load the final checkpoint of a run and probe it: balanced few-shot
/// classifier on the held-out pool, scored on the test set (or on the rest
/// of the pool when no test file is configured).
pub fn probe_run(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    shots: Option<Shots>,
    seed: u64,
    epochs_override: Option<usize>,
) -> Result<GroupReport> {
    let ckpt = load_checkpoint(&run_dir.join("ckpt-final.bin"))?;
    let (mut encoder, _) = restore_encoder(cfg, &ckpt)?;

    let train_ds = load_train_dataset(cfg)?;
    let geometry = train_ds.geometry;
    let holdout_path = cfg.data.holdout_path.as_ref().ok_or_else(|| {
        Error::Config("probing needs data.holdout_path for the balanced probe pool".into())
    })?;
    let pool = dataio::load_dataset(holdout_path, geometry)?;

    let mut spec = cfg.probe_spec(shots, seed);
    if let Some(e) = epochs_override {
        spec.epochs = e;
    }

    let to_images = |ds: &LtDataset, ids: &[u32]| -> Vec<crate::augment::Image> {
        ids.iter()
            .map(|&id| {
                crate::augment::Image::new(
                    geometry.height,
                    geometry.width,
                    ds.records[id as usize].pixels.clone(),
                )
            })
            .collect()
    };

    let (probe_ids, test_imgs, test_labels, capped) = match &cfg.data.test_path {
        Some(test_path) => {
            let test = dataio::load_dataset(test_path, geometry)?;
            let (probe_ids, _, capped) =
                dataio::few_shot_split(&pool, spec.shots.as_count(), seed)?;
            let imgs = to_images(&test, &(0..test.len() as u32).collect::<Vec<_>>());
            let labels: Vec<u8> = test.records.iter().map(|r| r.label).collect();
            (probe_ids, imgs, labels, capped)
        }
        None => {
            let (probe_ids, test_ids, capped) =
                dataio::few_shot_split(&pool, spec.shots.as_count(), seed)?;
            let imgs = to_images(&pool, &test_ids);
            let labels: Vec<u8> = test_ids
                .iter()
                .map(|&id| pool.records[id as usize].label)
                .collect();
            (probe_ids, imgs, labels, capped)
        }
    };
    let mut warnings: Vec<String> = capped
        .iter()
        .map(|(c, avail)| {
            format!(
                "class {c}: requested {} shots, only {avail} held-out samples",
                spec.shots.label()
            )
        })
        .collect();

    let probe_imgs = to_images(&pool, &probe_ids);
    let probe_labels: Vec<u8> = probe_ids
        .iter()
        .map(|&id| pool.records[id as usize].label)
        .collect();

    let dim = encoder.spec.feature_dim();
    let train_x = eval::feature_matrix(&mut encoder, &probe_imgs, 256)?;
    let test_x = eval::feature_matrix(&mut encoder, &test_imgs, 256)?;
    let mut report = eval::linear_probe(
        &train_x,
        &probe_labels,
        &test_x,
        &test_labels,
        dim,
        geometry.classes,
        &train_ds.partition_map,
        &spec,
    )?;
    report.warnings.append(&mut warnings);

    let tag = format!("probe-{}-s{}", spec.shots.label(), seed);
    std::fs::write(
        run_dir.join(format!("{tag}.json")),
        serde_json::to_string_pretty(&report)?,
    )?;
    let mut csv = String::from("class,accuracy,partition\n");
    for (c, acc) in report.per_class.iter().enumerate() {
        csv.push_str(&format!("{c},{acc:.6},{}\n", train_ds.partition_map[c]));
    }
    std::fs::write(run_dir.join(format!("{tag}.csv")), csv)?;
    Ok(report)
}

/// Post-hoc tail-discovery sweep over a finished run: replays the stored
/// loss history, recomputing the momentum table per epoch, and reports
/// `phi` per (epoch, group, score kind).
pub fn diagnose_tail(cfg: &ExperimentConfig, run_dir: &Path, r: f64) -> Result<String> {
    let ds = load_train_dataset(cfg)?;
    let groups: Vec<HeadTail> = ds.sample_partitions().iter().map(|&p| p.into()).collect();
    let (history, rows) = LossHistory::open(&run_dir.join("losses.bin"))?;
    let all = history.read_rows()?;
    let mut table = MemTable::new(ds.len(), cfg.boost.beta)?;
    let mut out = String::from("epoch,group,score_kind,phi\n");
    for (epoch, losses) in all.iter().take(rows).enumerate() {
        table.record_epoch_losses(losses)?;
        table.normalize_scores();
        for kind in [ScoreKind::Momentum, ScoreKind::Instantaneous] {
            let rep = memtrack::tail_discovery(&table, &groups, r, kind)?;
            out.push_str(&format!("{epoch},head,{kind},{:.6}\n", rep.phi_head));
            out.push_str(&format!("{epoch},tail,{kind},{:.6}\n", rep.phi_tail));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub out_dir: PathBuf,
    pub overall: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub std: f64,
    pub loss_final: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: String,
    pub rows: Vec<AblationRow>,
    pub best_value: String,
}

/// Run a one-axis grid: each cell pretrains then probes under its own
/// output directory, and the summary lands in `out_root`.
pub fn run_ablation(
    base: serde_json::Value,
    axis: &str,
    values: &[String],
    out_root: &Path,
) -> Result<AblationReport> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("empty ablation grid".into()));
    }
    {
        let mut sorted = values.to_vec();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != values.len() {
            return Err(Error::InvalidArgument(
                "duplicate grid values would overlap output directories".into(),
            ));
        }
    }
    std::fs::create_dir_all(out_root)?;
    let mut rows = Vec::new();
    for value in values {
        let mut tree = base.clone();
        if axis == "component" {
            value.parse::<AugOpKind>()?;
            set_dotted(&mut tree, "boost.force_op", serde_json::json!(value))?;
        } else {
            set_dotted(&mut tree, axis, parse_override(value))?;
        }
        let cell_dir = out_root.join(format!("{}={}", axis.replace('.', "-"), value));
        set_dotted(
            &mut tree,
            "out_dir",
            serde_json::json!(cell_dir.to_string_lossy()),
        )?;
        let cfg: ExperimentConfig =
            serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        let cfg = cfg.resolve()?;
        std::fs::create_dir_all(&cfg.out_dir)?;
        std::fs::write(
            cfg.out_dir.join("config.resolved.json"),
            serde_json::to_string_pretty(&cfg)?,
        )?;
        let state = pretrain(&cfg)?;
        let report = probe_run(&cfg, &cfg.out_dir, None, cfg.seed, None)?;
        rows.push(AblationRow {
            axis: axis.to_string(),
            value: value.clone(),
            out_dir: cfg.out_dir.clone(),
            overall: report.overall,
            many: report.many,
            medium: report.medium,
            few: report.few,
            std: report.std,
            loss_final: state.metrics.last().map(|m| m.loss_mean).unwrap_or(f64::NAN),
        });
    }
    let best = rows
        .iter()
        .max_by(|a, b| a.overall.total_cmp(&b.overall))
        .expect("non-empty grid");
    let report = AblationReport {
        axis: axis.to_string(),
        rows: rows.clone(),
        best_value: best.value.clone(),
    };
    let mut csv = String::from("axis,value,overall,many,medium,few,std,loss_final\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{:.6},{},{},{},{:.6},{:.6}\n",
            r.axis,
            r.value,
            r.overall,
            opt(r.many),
            opt(r.medium),
            opt(r.few),
            r.std,
            r.loss_final
        ));
    }
    std::fs::write(out_root.join("summary.csv"), csv)?;
    std::fs::write(
        out_root.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_synth(dir: &Path, classes: usize, per_class: usize) -> (PathBuf, PathBuf) {
        let ds = dataio::synth_balanced(classes, per_class, 8, 8, 5);
        let (lt, holdout) = dataio::make_long_tailed(&ds, 4.0, 5, Some(per_class / 2)).unwrap();
        let train = dir.join("train.bin");
        let hold = dir.join("holdout.bin");
        dataio::save_dataset(&train, &lt).unwrap();
        dataio::save_dataset(&hold, &holdout).unwrap();
        (train, hold)
    }

    fn tiny_cfg(dir: &Path, method: Method) -> ExperimentConfig {
        let (train, hold) = write_synth(dir, 3, 16);
        ExperimentConfig {
            method,
            data: DataConfig {
                train_path: train,
                holdout_path: Some(hold),
                test_path: None,
                height: 8,
                width: 8,
                classes: 3,
                partition_scheme: PartitionScheme::Threshold,
                imbalance_factor: Some(4.0),
            },
            model: ModelConfig {
                channels: vec![4, 8],
                hidden_dim: 8,
                embed_dim: 4,
                norm: NormKind::Batch,
                tau: 0.2,
                prune_ratio: None,
            },
            train: TrainConfig {
                epochs: 3,
                batch_size: 8,
                lr_init: 0.05,
                lr_final: 1e-3,
                momentum: 0.9,
                weight_decay: 1e-4,
                warmup_epochs: 1,
            },
            boost: BoostConfig::default(),
            probe: ProbeConfig {
                shots: Shots::Count(2),
                epochs: 5,
                ..ProbeConfig::default()
            },
            seed: 7,
            out_dir: dir.join("run"),
            deterministic: true,
            threads: None,
        }
        .resolve()
        .unwrap()
    }

    #[test]
    fn config_validation_rules() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path(), Method::Simclr);
        cfg.model.prune_ratio = Some(0.5);
        assert!(cfg.clone().resolve().is_err());
        cfg.model.prune_ratio = None;
        cfg.boost.fixed_strength = Some(0.5);
        assert!(cfg.clone().resolve().is_err());
        cfg.boost.fixed_strength = None;
        cfg.method = Method::BclD;
        let resolved = cfg.resolve().unwrap();
        assert_eq!(resolved.model.prune_ratio, Some(0.9));
    }

    #[test]
    fn dotted_overrides_and_unknown_keys() {
        let mut v = serde_json::json!({"boost": {"k": 1}});
        set_dotted(&mut v, "boost.k", serde_json::json!(2)).unwrap();
        set_dotted(&mut v, "model.tau", serde_json::json!(0.3)).unwrap();
        assert_eq!(v["boost"]["k"], 2);
        assert_eq!(v["model"]["tau"], 0.3);
        // Unknown keys must be rejected at deserialization.
        set_dotted(&mut v, "model.banana", serde_json::json!(1)).unwrap();
        assert!(serde_json::from_value::<ModelConfig>(v["model"].clone()).is_err());
    }

    #[test]
    fn metrics_row_round_trip() {
        let row = MetricsRow {
            epoch: 3,
            loss_mean: 1.234567,
            lr: 0.05,
            phi_head_ml: 0.1,
            phi_tail_ml: 0.2,
            phi_head_cl: 0.3,
            phi_tail_cl: 0.4,
            wallclock_s: 0.0,
        };
        let back = MetricsRow::parse(&row.to_csv()).unwrap();
        assert_eq!(back.epoch, 3);
        assert!((back.loss_mean - 1.234567).abs() < 1e-9);
    }

    #[test]
    fn pretrain_writes_complete_run_dir() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path(), Method::BclI);
        let state = pretrain(&cfg).unwrap();
        assert_eq!(state.metrics.len(), 3);
        assert!(cfg.out_dir.join("metrics.csv").exists());
        assert!(cfg.out_dir.join("ckpt-final.bin").exists());
        assert!(cfg.out_dir.join("losses.bin").exists());
        // Warm-up epoch consumes no scores; later epochs consume N scores.
        assert!(state.scores_used[0].is_empty());
        assert_eq!(state.scores_used[1].len(), state.memtable.len());
        let rows = read_metrics(&cfg.out_dir.join("metrics.csv")).unwrap();
        assert_eq!(rows.len(), 3);
    }

    #[test]
    fn epoch_scores_lag_by_one() {
        // The scores consumed in epoch t must equal the normalized table
        // after folding exactly the first t loss rows.
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path(), Method::BclI);
        let state = pretrain(&cfg).unwrap();
        let (hist, _) = LossHistory::open(&cfg.out_dir.join("losses.bin")).unwrap();
        let rows = hist.read_rows().unwrap();
        for t in 1..state.scores_used.len() {
            let mut replay = MemTable::new(state.memtable.len(), cfg.boost.beta).unwrap();
            for row in &rows[..t] {
                replay.record_epoch_losses(row).unwrap();
            }
            let expect = replay.normalize_scores();
            let got = &state.scores_used[t];
            for (a, b) in expect.iter().zip(got) {
                assert!((a - b).abs() < 1e-12, "epoch {t} used stale scores");
            }
        }
    }

    #[test]
    fn deterministic_rerun_same_metrics_hash() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path(), Method::BclI);
        pretrain(&cfg).unwrap();
        let h1 = file_hash(&cfg.out_dir.join("metrics.csv")).unwrap();
        pretrain(&cfg).unwrap();
        let h2 = file_hash(&cfg.out_dir.join("metrics.csv")).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn resume_reproduces_uninterrupted_hash() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path(), Method::BclD);
        cfg.train.epochs = 4;
        let cfg = cfg.resolve().unwrap();
        pretrain(&cfg).unwrap();
        let full_hash = file_hash(&cfg.out_dir.join("metrics.csv")).unwrap();
        let full_ckpt = file_hash(&cfg.out_dir.join("ckpt-final.bin")).unwrap();

        // Restart from epoch 1's checkpoint and replay the rest.
        resume(&cfg, &ckpt_path(&cfg.out_dir, 1)).unwrap();
        assert_eq!(file_hash(&cfg.out_dir.join("metrics.csv")).unwrap(), full_hash);
        assert_eq!(
            file_hash(&cfg.out_dir.join("ckpt-final.bin")).unwrap(),
            full_ckpt
        );
    }

    #[test]
    fn probe_run_reports_groups() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path(), Method::Simclr);
        pretrain(&cfg).unwrap();
        let report = probe_run(&cfg, &cfg.out_dir, Some(Shots::Count(2)), 3, Some(3)).unwrap();
        assert!(report.overall >= 0.0 && report.overall <= 1.0);
        assert_eq!(report.per_class.len(), 3);
        assert!(cfg.out_dir.join("probe-2-s3.json").exists());
    }

    #[test]
    fn diagnose_tail_matches_metrics_phis() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path(), Method::Simclr);
        let state = pretrain(&cfg).unwrap();
        let csv = diagnose_tail(&cfg, &cfg.out_dir, 0.1).unwrap();
        // The final epoch's momentum-tail value must match the metrics row.
        let last = state.metrics.last().unwrap();
        let needle = format!("{},tail,ml,{:.6}", last.epoch, last.phi_tail_ml);
        assert!(csv.contains(&needle), "{needle} missing in:\n{csv}");
    }
}
