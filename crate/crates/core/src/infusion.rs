//! Knowledge-graph contrastive loss, the supervised contrastive baseline and
//! the training loop for the trainer, peer and baseline modes.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ctxf_autodiff::rng;
use ctxf_autodiff::{checkpoint, Adam, AdamConfig, CosineSchedule, ParamSet, Real, Tape, Tensor, Var};
use rand::seq::SliceRandom;

use crate::datasets::ImageDataset;
use crate::encoder::{augment, embed_graph, AugmentConfig, Encoder, EncoderConfig};
use crate::error::{CoreError, Result};
use crate::kg::ViewSubgraph;
use crate::kge::{gat_forward, init_gat_for, self_loop_mask, GatConfig, KgEmbedding};

/// Positive-pair weights `W[i][j] = 1 / (views of y_i - 1)` for `j != i` with
/// `y_j == y_i`, zero elsewhere. With two views per source sample the
/// normalizer equals `2 N_{y_i} - 1`. Anchors without another view of their
/// class get an all-zero row.
pub fn positive_weights(labels: &[usize]) -> Vec<f64> {
    let m = labels.len();
    let mut w = vec![0.0; m * m];
    for i in 0..m {
        let views = labels.iter().filter(|&&y| y == labels[i]).count();
        if views < 2 {
            continue;
        }
        let inv = 1.0 / (views - 1) as f64;
        for j in 0..m {
            if j != i && labels[j] == labels[i] {
                w[i * m + j] = inv;
            }
        }
    }
    w
}

fn check_batch(rows: usize, labels: &[usize], tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(CoreError::Config(format!("temperature must be positive, got {tau}")));
    }
    if labels.len() != rows {
        return Err(CoreError::Batch(format!(
            "{} labels for {rows} embeddings",
            labels.len()
        )));
    }
    if rows < 2 {
        return Err(CoreError::Batch("need at least two views".into()));
    }
    Ok(())
}

/// Shared tail of both losses: `-sum(W ⊙ masked_log_softmax(A zᵀ / τ))`.
fn contrastive_from_anchors<T: Real>(
    tape: &mut Tape<T>,
    anchors: Var,
    z: Var,
    labels: &[usize],
    tau: f64,
) -> Result<Var> {
    let m = labels.len();
    let zt = tape.transpose(z)?;
    let logits = tape.matmul(anchors, zt)?;
    let logits = tape.scale(logits, 1.0 / tau);
    let mask: Vec<bool> = (0..m * m).map(|k| k / m != k % m).collect();
    let logp = tape.masked_log_softmax(logits, &mask)?;
    let w: Vec<T> = positive_weights(labels).into_iter().map(T::of).collect();
    let w = tape.constant(Tensor::new(&[m, m], w)?);
    let weighted = tape.mul(logp, w)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -1.0))
}

/// Loss with each anchor represented by its class's graph embedding.
/// `class_rows` is `[n_classes, d]`, `z` is `[2N, d]`, both unit-norm.
pub fn kg_contrastive_graph<T: Real>(
    tape: &mut Tape<T>,
    class_rows: Var,
    z: Var,
    labels: &[usize],
    tau: f64,
) -> Result<Var> {
    check_batch(tape.value(z).rows(), labels, tau)?;
    let n_classes = tape.value(class_rows).rows();
    if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(CoreError::Batch(format!(
            "label {y} has no class embedding ({n_classes} classes)"
        )));
    }
    let anchors = tape.gather_rows(class_rows, labels)?;
    contrastive_from_anchors(tape, anchors, z, labels, tau)
}

/// Supervised contrastive loss: each anchor is its own image embedding.
pub fn supcon_graph<T: Real>(tape: &mut Tape<T>, z: Var, labels: &[usize], tau: f64) -> Result<Var> {
    check_batch(tape.value(z).rows(), labels, tau)?;
    contrastive_from_anchors(tape, z, z, labels, tau)
}

pub fn kg_contrastive_loss<T: Real>(class_emb: &Tensor<T>, z: &Tensor<T>, labels: &[usize], tau: f64) -> Result<T> {
    let mut tape = Tape::new();
    let c = tape.constant(class_emb.clone());
    let zv = tape.constant(z.clone());
    let l = kg_contrastive_graph(&mut tape, c, zv, labels, tau)?;
    Ok(tape.value(l).data()[0])
}

pub fn supcon_baseline_loss<T: Real>(z: &Tensor<T>, labels: &[usize], tau: f64) -> Result<T> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let l = supcon_graph(&mut tape, zv, labels, tau)?;
    Ok(tape.value(l).data()[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Trainer,
    Peer,
    Baseline,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Trainer => "trainer",
            Mode::Peer => "peer",
            Mode::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trainer" => Ok(Mode::Trainer),
            "peer" => Ok(Mode::Peer),
            "baseline" => Ok(Mode::Baseline),
            other => Err(CoreError::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub lr_decay: f32,
    pub tau: f64,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
    pub gat: GatConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 64,
            lr: 0.001,
            lr_decay: 0.1,
            tau: 0.1,
            seed: 0,
            encoder: EncoderConfig::default(),
            augment: AugmentConfig::default(),
            gat: GatConfig::default(),
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 || !(self.lr > 0.0) || !(self.tau > 0.0) {
            return Err(CoreError::Config(
                "epochs, batch size (>= 2), learning rate and temperature must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.lr_decay) {
            return Err(CoreError::Config("learning-rate decay must lie in [0, 1]".into()));
        }
        self.encoder.validate()?;
        self.augment.validate()
    }
}

/// What supervises the image embeddings.
#[derive(Clone, Copy, Debug)]
pub enum Supervision<'a> {
    Trainer(&'a KgEmbedding),
    Peer(&'a ViewSubgraph),
    Baseline,
}

impl Supervision<'_> {
    pub fn mode(&self) -> Mode {
        match self {
            Supervision::Trainer(_) => Mode::Trainer,
            Supervision::Peer(_) => Mode::Peer,
            Supervision::Baseline => Mode::Baseline,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Loss per anchor, averaged over the epoch.
    pub mean_loss: f64,
    pub lr: f32,
    pub wall_ms: u128,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,lr,wall_ms\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{:?},{:?},{}\n", e.epoch, e.mean_loss, e.lr, e.wall_ms));
        }
        out
    }
}

/// Encoder (and, in peer mode, GAT) parameters after training.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub mode: Mode,
    pub encoder: Encoder,
    pub gat: Option<ParamSet>,
    pub log: TrainingLog,
}

const ENCODER_PREFIX: &str = "encoder.";
const GAT_PREFIX: &str = "gat.";

impl TrainedModel {
    pub fn params(&self) -> ParamSet {
        let mut all = ParamSet::new();
        all.extend_prefixed(ENCODER_PREFIX, &self.encoder.params);
        if let Some(g) = &self.gat {
            all.extend_prefixed(GAT_PREFIX, g);
        }
        all
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(checkpoint::save(path, &self.params())?)
    }

    /// Reload a checkpoint; the mode and log are not part of the file.
    pub fn load(path: impl AsRef<Path>, mode: Mode, height: usize, width: usize) -> Result<Self> {
        let all = checkpoint::load(path)?;
        let encoder = Encoder::from_params(all.with_prefix(ENCODER_PREFIX), height, width)?;
        let gat = all.with_prefix(GAT_PREFIX);
        Ok(Self {
            mode,
            encoder,
            gat: (!gat.is_empty()).then_some(gat),
            log: TrainingLog::default(),
        })
    }
}

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const AUGMENT_STREAM: u64 = 3;

/// Map dataset labels onto rows of the supervising class list.
fn label_map(ds: &ImageDataset, classes: &[String]) -> Result<Vec<usize>> {
    ds.class_names()
        .iter()
        .map(|name| {
            classes
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| CoreError::Batch(format!("class {name} has no class embedding")))
        })
        .collect()
}

/// Contrastive training of a fresh encoder under the given supervision.
pub fn train_contextual(ds: &ImageDataset, sup: Supervision<'_>, cfg: &TrainRunConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    if ds.len() < 2 {
        return Err(CoreError::Data("training needs at least two samples".into()));
    }
    let (h, w, c) = ds.dims();
    let s = cfg.augment.out_size;
    if c != 3 || c != cfg.encoder.channels || (cfg.encoder.height, cfg.encoder.width) != (s, s) {
        return Err(CoreError::Config(format!(
            "views of {s}x{s}x{c} do not fit an encoder for {}x{}x{}",
            cfg.encoder.height, cfg.encoder.width, cfg.encoder.channels
        )));
    }

    let mut init_rng = rng::derive(cfg.seed, &[INIT_STREAM]);
    let encoder = Encoder::new(cfg.encoder.clone(), &mut init_rng)?;
    let n_enc = encoder.params.len();

    let mut all = ParamSet::new();
    all.extend_prefixed(ENCODER_PREFIX, &encoder.params);

    let (class_map, frozen_rows, peer) = match sup {
        Supervision::Trainer(emb) => {
            if emb.dim() != cfg.encoder.out_dim {
                return Err(CoreError::Config(format!(
                    "embedding dimension {} differs from head output {}",
                    emb.dim(),
                    cfg.encoder.out_dim
                )));
            }
            (label_map(ds, emb.class_names())?, Some(emb.matrix()), None)
        }
        Supervision::Peer(sub) => {
            let gat = init_gat_for(sub, &cfg.gat, cfg.seed)?;
            all.extend_prefixed(GAT_PREFIX, &gat);
            let mask = self_loop_mask(&sub.adjacency())?;
            (label_map(ds, sub.class_list())?, None, Some((sub, mask)))
        }
        Supervision::Baseline => ((0..ds.class_names().len()).collect(), None, None),
    };

    let schedule = CosineSchedule {
        decay_rate: cfg.lr_decay,
        ..CosineSchedule::new(cfg.lr, cfg.epochs)
    };
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut log = TrainingLog::default();
    let dims = (h, w);
    let img_len = c * cfg.augment.out_size * cfg.augment.out_size;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = schedule.lr_at(epoch);
        opt.set_learning_rate(lr);
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng::derive(cfg.seed, &[SHUFFLE_STREAM, epoch as u64]));

        let (mut loss_sum, mut anchors) = (0.0f64, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let mut pixels = Vec::with_capacity(2 * chunk.len() * img_len);
            let mut labels = Vec::with_capacity(2 * chunk.len());
            for &i in chunk {
                let mut r = rng::derive(cfg.seed, &[AUGMENT_STREAM, epoch as u64, i as u64]);
                let (v1, v2) = augment(&ds.image(i), dims, &cfg.augment, &mut r);
                pixels.extend(v1);
                pixels.extend(v2);
                let y = class_map[ds.labels()[i]];
                labels.extend([y, y]);
            }
            let x = Tensor::new(&[labels.len(), c, s, s], pixels)?;

            let mut tape = Tape::new();
            let vars = all.attach(&mut tape);
            let xv = tape.constant(x);
            let z = embed_graph(&mut tape, &cfg.encoder, &vars[..n_enc], xv)?;
            let loss = match (&frozen_rows, &peer) {
                (Some(rows), _) => {
                    let rows = tape.constant(rows.clone());
                    kg_contrastive_graph(&mut tape, rows, z, &labels, cfg.tau)?
                }
                (None, Some((sub, mask))) => {
                    let feats = tape.constant(sub.features());
                    let out = gat_forward(&mut tape, &cfg.gat, &vars[n_enc..], mask, feats)?;
                    let nodes = tape.l2_normalize(out.z);
                    let class_idx: Vec<usize> = (0..sub.n_classes()).collect();
                    let rows = tape.gather_rows(nodes, &class_idx)?;
                    kg_contrastive_graph(&mut tape, rows, z, &labels, cfg.tau)?
                }
                (None, None) => supcon_graph(&mut tape, z, &labels, cfg.tau)?,
            };
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(CoreError::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += value as f64;
            anchors += labels.len();
            let grads = tape.backward(loss)?;
            let g = all.collect_grads(&grads, &vars);
            opt.step(all.tensors_mut(), &g)?;
        }
        log.epochs.push(EpochLog {
            epoch,
            mean_loss: loss_sum / anchors.max(1) as f64,
            lr,
            wall_ms: start.elapsed().as_millis(),
        });
    }

    let encoder = Encoder {
        config: cfg.encoder.clone(),
        params: all.with_prefix(ENCODER_PREFIX),
    };
    let gat = peer.map(|_| all.with_prefix(GAT_PREFIX));
    Ok(TrainedModel {
        mode: sup.mode(),
        encoder,
        gat,
        log,
    })
}

/// Mean cosine between each image embedding and its class's graph embedding.
pub fn mean_alignment(encoder: &Encoder, ds: &ImageDataset, emb: &KgEmbedding) -> Result<f64> {
    let map = label_map(ds, emb.class_names())?;
    let z = encoder.embed_dataset(ds)?;
    let total: f64 = ds
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            z.row(i)
                .iter()
                .zip(emb.row(map[y]))
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>()
        })
        .sum();
    Ok(total / ds.len() as f64)
}
