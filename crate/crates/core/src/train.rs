//! Training harness: run configuration, the optimization loop, checkpoint
//! serialization, and full-image evaluation.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::map_unit::{map_unit_forward, record_map_unit, EncoderParams, MapUnitConfig};
use crate::mask::MaskStack;
use crate::metrics::{aggregate, per_image_metrics, MetricsReport};
use crate::net::{net_forward, record_net, NetArch, NetParams};
use crate::optim::{adam_step, cosine_lr, AdamConfig, AdamState};
use crate::rng::Rng;
use crate::synth::{load_sample, LoadedSample, Manifest};
use crate::tensor::Tensor;

/// Reconstruction loss selector. Only the mean absolute error is offered,
/// but configs and checkpoints name it explicitly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    L1,
}

/// Everything that determines a training run besides the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Feed the network mask-pooled features alongside the blurred image.
    pub use_map_prior: bool,
    /// Per-mask dropout probability while training (ignored at evaluation).
    pub dropout_p: f64,
    /// Channels produced by the mask-feature encoder.
    pub s_channels: usize,
    pub net_width: usize,
    pub net_levels: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub patch: usize,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            use_map_prior: false,
            dropout_p: 0.15,
            s_channels: 8,
            net_width: 10,
            net_levels: 3,
            lr0: 1e-3,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.9,
            weight_decay: 1e-3,
            iterations: 2000,
            batch_size: 8,
            patch: 64,
            seed: 0,
            loss: LossKind::L1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.lr0.is_finite() && self.lr_min.is_finite()) || self.lr0 <= 0.0 {
            return bad(format!("learning rates lr0={} lr_min={}", self.lr0, self.lr_min));
        }
        if self.lr_min > self.lr0 || self.lr_min < 0.0 {
            return bad(format!("lr_min {} must lie in [0, lr0 = {}]", self.lr_min, self.lr0));
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.patch < 16 || self.patch % 2 != 0 {
            return bad(format!("patch {} must be even and >= 16", self.patch));
        }
        if self.patch % (1 << self.net_levels) != 0 {
            return bad(format!(
                "patch {} not divisible by 2^levels = {}",
                self.patch,
                1 << self.net_levels
            ));
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1]", self.dropout_p));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas ({}, {}) outside [0, 1)", self.beta1, self.beta2));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad(format!("weight_decay {}", self.weight_decay));
        }
        if self.use_map_prior && self.s_channels == 0 {
            return bad("s_channels must be >= 1 when the mask prior is enabled".into());
        }
        self.arch().validate()
    }

    /// Channels the network consumes: pooled features plus RGB, or RGB alone.
    pub fn in_channels(&self) -> usize {
        if self.use_map_prior {
            self.s_channels + 3
        } else {
            3
        }
    }

    pub fn arch(&self) -> NetArch {
        NetArch {
            in_channels: self.in_channels(),
            out_channels: 3,
            width: self.net_width,
            levels: self.net_levels,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

/// Trained parameters together with the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub net: NetParams<f64>,
    pub encoder: Option<EncoderParams<f64>>,
}

pub const CHECKPOINT_CONFIG_NAME: &str = "config.json";

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    tensors: Vec<String>,
}

const ENCODER_TENSOR_NAMES: [&str; 4] = ["prior_k3", "prior_b3", "prior_k1", "prior_b1"];

impl Checkpoint {
    /// Tensor names in canonical order: encoder first (when present), then
    /// the network. This order is shared by the optimizer state and the
    /// on-disk layout.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        if self.encoder.is_some() {
            names.extend(ENCODER_TENSOR_NAMES.iter().map(|s| s.to_string()));
        }
        names.extend(
            self.net
                .named_tensors()
                .into_iter()
                .map(|(n, _)| format!("net_{n}")),
        );
        names
    }

    fn tensor_refs(&self) -> Vec<&Tensor<f64>> {
        let mut refs: Vec<&Tensor<f64>> = Vec::new();
        if let Some(enc) = &self.encoder {
            refs.extend([&enc.k3, &enc.b3, &enc.k1, &enc.b1]);
        }
        refs.extend(self.net.named_tensors().into_iter().map(|(_, t)| t));
        refs
    }

    fn tensor_refs_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        let mut refs: Vec<&mut Tensor<f64>> = Vec::new();
        if let Some(enc) = &mut self.encoder {
            refs.extend([&mut enc.k3, &mut enc.b3, &mut enc.k1, &mut enc.b1]);
        }
        refs.extend(self.net.tensors_mut());
        refs
    }

    /// Total learnable scalars across the network and the encoder.
    pub fn param_count(&self) -> usize {
        self.tensor_refs().iter().map(|t| t.len()).sum()
    }

    /// Write `config.json` plus one raw tensor file per parameter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.config.validate()?;
        fs::create_dir_all(dir)?;
        let names = self.tensor_names();
        for (name, tensor) in names.iter().zip(self.tensor_refs()) {
            tensor.save(&dir.join(format!("{name}.tnsr")))?;
        }
        let meta = CheckpointMeta {
            config: self.config.clone(),
            tensors: names,
        };
        let mut text = serde_json::to_string_pretty(&meta)?;
        text.push('\n');
        fs::write(dir.join(CHECKPOINT_CONFIG_NAME), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(CHECKPOINT_CONFIG_NAME))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        meta.config.validate()?;
        let mut tensors = HashMap::new();
        for name in &meta.tensors {
            tensors.insert(name.clone(), Tensor::load(&dir.join(format!("{name}.tnsr")))?);
        }
        let encoder = if meta.config.use_map_prior {
            let s = meta.config.s_channels;
            let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<f64>> {
                let t = tensors
                    .remove(name)
                    .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {name}")))?;
                if t.shape() != shape {
                    return Err(Error::ShapeMismatch(format!(
                        "tensor {name}: expected {:?}, found {:?}",
                        shape,
                        t.shape()
                    )));
                }
                Ok(t)
            };
            Some(EncoderParams {
                k3: take("prior_k3", &[3, 3, 3, s])?,
                b3: take("prior_b3", &[s])?,
                k1: take("prior_k1", &[1, 1, s, s])?,
                b1: take("prior_b1", &[s])?,
            })
        } else {
            None
        };
        let net_tensors: HashMap<String, Tensor<f64>> = tensors
            .into_iter()
            .map(|(name, t)| {
                name.strip_prefix("net_")
                    .map(|n| (n.to_string(), t))
                    .ok_or_else(|| Error::Format(format!("unexpected checkpoint tensor {name}")))
            })
            .collect::<Result<_>>()?;
        let net = NetParams::from_named(meta.config.arch(), net_tensors)?;
        Ok(Self {
            config: meta.config,
            net,
            encoder,
        })
    }
}

/// One training-log row; serialized as `iter,loss,lr` CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub loss: f64,
    pub lr: f64,
}

pub fn format_log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("iter,loss,lr\n");
    for row in rows {
        out.push_str(&format!("{},{},{}\n", row.iter, row.loss, row.lr));
    }
    out
}

pub fn parse_log_csv(text: &str) -> Result<Vec<LogRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("iter,loss,lr") => {}
        other => {
            return Err(Error::Format(format!(
                "bad log header: {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let mut fields = line.split(',');
        let mut next = || {
            fields
                .next()
                .ok_or_else(|| Error::Format(format!("log line {}: too few fields", i + 2)))
        };
        let iter = next()?
            .parse::<u64>()
            .map_err(|e| Error::Format(format!("log line {}: {e}", i + 2)))?;
        let loss = next()?
            .parse::<f64>()
            .map_err(|e| Error::Format(format!("log line {}: {e}", i + 2)))?;
        let lr = next()?
            .parse::<f64>()
            .map_err(|e| Error::Format(format!("log line {}: {e}", i + 2)))?;
        if fields.next().is_some() {
            return Err(Error::Format(format!("log line {}: too many fields", i + 2)));
        }
        rows.push(LogRow { iter, loss, lr });
    }
    Ok(rows)
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

fn add_scaled(dst: &mut Tensor<f64>, src: &Tensor<f64>, s: f64) {
    for (d, &v) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s * v;
    }
}

/// Train on the dataset in `data_dir`. All randomness (initialization, patch
/// sampling, augmentation, mask dropout) flows from `cfg.seed` through one
/// generator in a fixed draw order, so a config plus a dataset determines the
/// checkpoint exactly. `on_iter` observes each completed iteration.
pub fn train_with(
    data_dir: &Path,
    cfg: &TrainConfig,
    mut on_iter: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = Manifest::load(data_dir)?;
    if manifest.samples.is_empty() {
        return Err(Error::Contract(format!(
            "dataset {} has no samples",
            data_dir.display()
        )));
    }
    let samples: Vec<LoadedSample> = manifest
        .samples
        .iter()
        .map(|e| load_sample(data_dir, e))
        .collect::<Result<_>>()?;
    for s in &samples {
        let (h, w, c) = s.blurred.hwc()?;
        if c != 3 {
            return Err(Error::Contract(format!("sample {}: {c} channels", s.id)));
        }
        if h < cfg.patch || w < cfg.patch {
            return Err(Error::Contract(format!(
                "sample {}: {h}x{w} smaller than patch {}",
                s.id, cfg.patch
            )));
        }
        if s.sharp.shape() != s.blurred.shape() {
            return Err(Error::Contract(format!(
                "sample {}: sharp {:?} vs blurred {:?}",
                s.id,
                s.sharp.shape(),
                s.blurred.shape()
            )));
        }
    }

    let mut rng = Rng::seed_from_u64(cfg.seed);
    let encoder = if cfg.use_map_prior {
        Some(EncoderParams::<f64>::init(3, cfg.s_channels, &mut rng))
    } else {
        None
    };
    let net = NetParams::init(cfg.arch(), &mut rng)?;
    let mut ckpt = Checkpoint {
        config: cfg.clone(),
        net,
        encoder,
    };
    let mut adam = AdamState::new(&ckpt.tensor_refs());
    let map_cfg = MapUnitConfig {
        s_channels: cfg.s_channels,
        dropout_p: cfg.dropout_p,
        training: true,
    };

    let mut log = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let lr = cosine_lr(t as u64, cfg.iterations as u64, cfg.lr0, cfg.lr_min);
        let mut grads: Vec<Tensor<f64>> = ckpt
            .tensor_refs()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        let mut loss_sum = 0.0;
        let inv_batch = 1.0 / cfg.batch_size as f64;
        for _ in 0..cfg.batch_size {
            let sample = &samples[rng.next_below(samples.len() as u64) as usize];
            let (h, w, _) = sample.blurred.hwc()?;
            let y0 = rng.next_below((h - cfg.patch + 1) as u64) as usize;
            let x0 = rng.next_below((w - cfg.patch + 1) as u64) as usize;
            let turns = rng.next_below(4) as u8;
            let flip = rng.next_below(2) == 1;
            let blurred = sample
                .blurred
                .crop(y0, x0, cfg.patch, cfg.patch)?
                .dihedral(turns, flip)?;
            let sharp = sample
                .sharp
                .crop(y0, x0, cfg.patch, cfg.patch)?
                .dihedral(turns, flip)?;

            let mut g = Graph::new();
            let blurred_node = g.leaf(blurred);
            let mut param_nodes = Vec::new();
            let input_node = if let Some(enc) = &ckpt.encoder {
                let masks = sample
                    .masks
                    .crop(y0, x0, cfg.patch, cfg.patch)?
                    .dihedral(turns, flip);
                let nodes = record_map_unit(&mut g, blurred_node, &masks, enc, &map_cfg, &mut rng)?;
                param_nodes.extend([nodes.k3, nodes.b3, nodes.k1, nodes.b1]);
                nodes.output
            } else {
                blurred_node
            };
            let net_nodes = record_net(&mut g, input_node, blurred_node, &ckpt.net)?;
            param_nodes.extend(net_nodes.params);
            let target = g.leaf(sharp);
            let loss = g.l1_loss(net_nodes.output, target)?;
            g.backward(loss)?;
            loss_sum += g.value(loss).scalar_value()?;
            for (slot, node) in grads.iter_mut().zip(&param_nodes) {
                add_scaled(slot, g.grad(*node).expect("param reachable from loss"), inv_batch);
            }
        }
        let loss = loss_sum * inv_batch;
        if !loss.is_finite() {
            return Err(Error::Contract(format!(
                "training diverged: loss {loss} at iteration {t}"
            )));
        }
        adam_step(&mut ckpt.tensor_refs_mut(), &grads, &mut adam, lr, &cfg.adam())?;
        let row = LogRow {
            iter: t as u64,
            loss,
            lr,
        };
        on_iter(&row);
        log.push(row);
    }
    for t in ckpt.tensor_refs() {
        if !t.all_finite() {
            return Err(Error::Contract(
                "training produced non-finite parameters".into(),
            ));
        }
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        log,
    })
}

pub fn train(data_dir: &Path, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(data_dir, cfg, |_| {})
}

/// Restore one image with a trained checkpoint. Mask pooling (when the model
/// uses it) runs on the original geometry; the network input and the residual
/// are then edge-padded to the pooling-friendly multiple and the output is
/// cropped back. Evaluation never applies mask dropout, so the result does
/// not depend on `dropout_p` or on any random state.
pub fn predict(ckpt: &Checkpoint, blurred: &Tensor<f64>, masks: &MaskStack) -> Result<Tensor<f64>> {
    let input = match &ckpt.encoder {
        Some(enc) => {
            let cfg = MapUnitConfig {
                s_channels: ckpt.config.s_channels,
                dropout_p: ckpt.config.dropout_p,
                training: false,
            };
            let mut unused = Rng::seed_from_u64(0);
            map_unit_forward(blurred, masks, enc, &cfg, &mut unused)?
        }
        None => blurred.clone(),
    };
    let multiple = ckpt.net.arch.spatial_multiple();
    let (padded_input, _) = input.pad_to_multiple(multiple)?;
    let (padded_residual, _) = blurred.pad_to_multiple(multiple)?;
    let out = net_forward(&padded_input, &padded_residual, &ckpt.net)?;
    let (h, w, _) = blurred.hwc()?;
    Ok(out.crop(0, 0, h, w)?.clamp(0.0, 1.0))
}

/// Run `predict` over a dataset and aggregate image metrics into a report.
pub fn evaluate(ckpt: &Checkpoint, data_dir: &Path) -> Result<MetricsReport> {
    let manifest = Manifest::load(data_dir)?;
    let mut rows = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let s = load_sample(data_dir, entry)?;
        let restored = predict(ckpt, &s.blurred, &s.masks)?;
        rows.push(per_image_metrics(&s.id, &restored, &s.blurred, &s.sharp)?);
    }
    aggregate(rows)
}
