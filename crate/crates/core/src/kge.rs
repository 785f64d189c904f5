//! Graph auto-encoder and graph attention network over a view subgraph, and
//! the `CTXE` class-embedding file.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ctxf_autodiff::rng::{self, Rng};
use ctxf_autodiff::{Adam, AdamConfig, ParamSet, Real, Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::kg::ViewSubgraph;

/// Row norm below which a class embedding counts as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-8;

/// `D^-1/2 (A + I) D^-1/2` with `D` the degree matrix of `A + I`.
pub fn normalize_adjacency<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let n = square_dim(a)?;
    let deg: Vec<f64> = (0..n)
        .map(|i| 1.0 + a.row(i).iter().map(|v| v.to64()).sum::<f64>())
        .collect();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let aij = a.data()[i * n + j].to64() + if i == j { 1.0 } else { 0.0 };
            out.data_mut()[i * n + j] = T::of(aij / (deg[i] * deg[j]).sqrt());
        }
    }
    Ok(out)
}

fn square_dim<T: Real>(a: &Tensor<T>) -> Result<usize> {
    match a.shape() {
        [r, c] if r == c => Ok(*r),
        s => Err(CoreError::Data(format!("expected a square matrix, got shape {s:?}"))),
    }
}

/// Attention mask over `A + I`, row-major.
pub fn self_loop_mask<T: Real>(a: &Tensor<T>) -> Result<Vec<bool>> {
    let n = square_dim(a)?;
    Ok((0..n * n).map(|k| k / n == k % n || a.data()[k] != T::zero()).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KgeMethod {
    Gae,
    Gat,
}

impl KgeMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            KgeMethod::Gae => "gae",
            KgeMethod::Gat => "gat",
        }
    }
}

impl fmt::Display for KgeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KgeMethod {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gae" => Ok(KgeMethod::Gae),
            "gat" => Ok(KgeMethod::Gat),
            other => Err(CoreError::Config(format!("unknown embedding method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaeConfig {
    pub hidden: usize,
    pub out: usize,
    pub epochs: usize,
    pub lr: f32,
}

impl Default for GaeConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            out: 128,
            epochs: 500,
            lr: 0.01,
        }
    }
}

pub fn gae_init<T: Real>(n_features: usize, cfg: &GaeConfig, rng: &mut Rng) -> ParamSet<T> {
    let mut p = ParamSet::new();
    p.insert(
        "w1",
        Tensor::glorot(&[n_features, cfg.hidden], n_features, cfg.hidden, rng),
    );
    p.insert("w2", Tensor::glorot(&[cfg.hidden, cfg.out], cfg.hidden, cfg.out, rng));
    p
}

/// `Z = Â relu(Â X W1) W2` before row normalization. `vars` are the GAE
/// parameters in `gae_init` order.
pub fn gae_forward<T: Real>(tape: &mut Tape<T>, vars: &[Var], a_hat: Var, x: Var) -> Result<Var> {
    let ax = tape.matmul(a_hat, x)?;
    let h = tape.matmul(ax, vars[0])?;
    let h = tape.matmul(a_hat, h)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, vars[1])?;
    Ok(tape.matmul(a_hat, h)?)
}

/// Dense inner-product-decoder reconstruction loss against `A + I`, with
/// positives re-weighted by `#negatives / #positives` (weight 1 for a
/// complete graph).
pub fn reconstruction_loss<T: Real>(tape: &mut Tape<T>, z: Var, adjacency: &Tensor<T>) -> Result<Var> {
    let n = square_dim(adjacency)?;
    let mut target = adjacency.clone();
    for i in 0..n {
        target.data_mut()[i * n + i] = T::one();
    }
    let pos: f64 = target.data().iter().map(|v| v.to64()).sum();
    let neg = (n * n) as f64 - pos;
    let pos_weight = if neg > 0.0 { neg / pos } else { 1.0 };
    let zt = tape.transpose(z)?;
    let logits = tape.matmul(z, zt)?;
    Ok(tape.bce_with_logits(logits, &target, pos_weight)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatConfig {
    pub heads: usize,
    pub hidden: usize,
    pub out: usize,
    pub slope: f64,
}

impl Default for GatConfig {
    fn default() -> Self {
        Self {
            heads: 8,
            hidden: 256,
            out: 128,
            slope: 0.2,
        }
    }
}

impl GatConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) || self.out == 0 {
            return Err(CoreError::Config(format!(
                "GAT hidden size {} must be a positive multiple of {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

/// Per head: `w`, `a_src`, `a_dst` for layer 1, then the same for layer 2.
pub fn gat_init<T: Real>(n_features: usize, cfg: &GatConfig, rng: &mut Rng) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let d = cfg.head_dim();
    let mut p = ParamSet::new();
    for (layer, fan_in, width) in [(1, n_features, d), (2, cfg.hidden, cfg.out)] {
        for h in 0..cfg.heads {
            p.insert(
                format!("l{layer}.w{h}"),
                Tensor::glorot(&[fan_in, width], fan_in, width, rng),
            );
            p.insert(format!("l{layer}.a_src{h}"), Tensor::glorot(&[width, 1], width, 1, rng));
            p.insert(format!("l{layer}.a_dst{h}"), Tensor::glorot(&[width, 1], width, 1, rng));
        }
    }
    Ok(p)
}

pub struct GatOutput {
    /// Node embeddings before row normalization.
    pub z: Var,
    /// Attention matrices, layer 1 heads followed by layer 2 heads.
    pub attention: Vec<Var>,
}

fn attention_head<T: Real>(
    tape: &mut Tape<T>,
    h: Var,
    w: Var,
    a_src: Var,
    a_dst: Var,
    mask: &[bool],
    slope: f64,
) -> Result<(Var, Var)> {
    let wh = tape.matmul(h, w)?;
    let n = tape.value(wh).shape()[0];
    let s_src = tape.matmul(wh, a_src)?;
    let s_src = tape.reshape(s_src, &[n])?;
    let s_dst = tape.matmul(wh, a_dst)?;
    let s_dst = tape.reshape(s_dst, &[n])?;
    let e = tape.outer_add(s_src, s_dst)?;
    let e = tape.leaky_relu(e, slope);
    let alpha = tape.masked_softmax(e, mask)?;
    Ok((tape.matmul(alpha, wh)?, alpha))
}

/// Two attention layers: heads concatenated then ELU, then heads averaged.
/// `mask` marks the edges of `A + I`.
pub fn gat_forward<T: Real>(
    tape: &mut Tape<T>,
    cfg: &GatConfig,
    vars: &[Var],
    mask: &[bool],
    x: Var,
) -> Result<GatOutput> {
    if vars.len() != 6 * cfg.heads {
        return Err(CoreError::Config(format!(
            "GAT expects {} parameters, got {}",
            6 * cfg.heads,
            vars.len()
        )));
    }
    let mut attention = Vec::with_capacity(2 * cfg.heads);
    let mut outs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let p = &vars[3 * h..3 * h + 3];
        let (o, a) = attention_head(tape, x, p[0], p[1], p[2], mask, cfg.slope)?;
        outs.push(o);
        attention.push(a);
    }
    let hidden = tape.concat(&outs)?;
    let hidden = tape.elu(hidden, 1.0);
    let mut acc: Option<Var> = None;
    for h in 0..cfg.heads {
        let p = &vars[3 * (cfg.heads + h)..3 * (cfg.heads + h) + 3];
        let (o, a) = attention_head(tape, hidden, p[0], p[1], p[2], mask, cfg.slope)?;
        attention.push(a);
        acc = Some(match acc {
            None => o,
            Some(prev) => tape.add(prev, o)?,
        });
    }
    let z = tape.scale(acc.expect("at least one head"), 1.0 / cfg.heads as f64);
    Ok(GatOutput { z, attention })
}

/// Class-name-indexed, row-normalized view embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct KgEmbedding {
    pub view: String,
    class_names: Vec<String>,
    dim: usize,
    vectors: Vec<f32>,
}

const CTXE_MAGIC: &[u8; 4] = b"CTXE";
const CTXE_VERSION: u32 = 1;

impl KgEmbedding {
    /// Take the first `class_names.len()` rows of `z`, reject near-zero rows
    /// and normalize the rest.
    pub fn from_node_embeddings(view: &str, class_names: &[String], z: &Tensor) -> Result<Self> {
        let dim = z.last_dim();
        if z.ndim() != 2 || z.rows() < class_names.len() {
            return Err(CoreError::Data(format!(
                "node embeddings of shape {:?} cannot cover {} classes",
                z.shape(),
                class_names.len()
            )));
        }
        let mut vectors = Vec::with_capacity(class_names.len() * dim);
        for (i, name) in class_names.iter().enumerate() {
            let row = z.row(i);
            let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if !norm.is_finite() || norm < DEGENERATE_NORM {
                return Err(CoreError::Degenerate(format!(
                    "class {name} has embedding norm {norm:e} in view {view}"
                )));
            }
            vectors.extend(row.iter().map(|&v| (v as f64 / norm) as f32));
        }
        Ok(Self {
            view: view.to_string(),
            class_names: class_names.to_vec(),
            dim,
            vectors,
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn index_of(&self, class: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == class)
    }

    /// `[n_classes, dim]` matrix of the rows.
    pub fn matrix(&self) -> Tensor {
        Tensor::new(&[self.len(), self.dim], self.vectors.clone()).expect("consistent embedding")
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CTXE_MAGIC)?;
        w.write_all(&CTXE_VERSION.to_le_bytes())?;
        write_str(w, &self.view)?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for (i, name) in self.class_names.iter().enumerate() {
            write_str(w, name)?;
            for v in self.row(i) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CTXE_MAGIC {
            return Err(CoreError::Format("not a CTXE file".into()));
        }
        let version = read_u32(r)?;
        if version != CTXE_VERSION {
            return Err(CoreError::Format(format!("unsupported CTXE version {version}")));
        }
        let view = read_str(r)?;
        let n = read_u32(r)? as usize;
        let dim = read_u32(r)? as usize;
        let mut class_names = Vec::with_capacity(n);
        let mut vectors = Vec::with_capacity(n * dim);
        for _ in 0..n {
            class_names.push(read_str(r)?);
            for _ in 0..dim {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                vectors.push(f32::from_le_bytes(b));
            }
        }
        Ok(Self {
            view,
            class_names,
            dim,
            vectors,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to memory");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(&mut std::io::Cursor::new(std::fs::read(path)?))
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| CoreError::Format("string is not UTF-8".into()))
}

/// Settings for standalone view embedding.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct EmbedConfig {
    pub gae: GaeConfig,
    pub gat: GatConfig,
}

/// Result of fitting a graph model by adjacency reconstruction.
pub struct FittedGraphModel {
    pub params: ParamSet,
    pub losses: Vec<f32>,
    pub embedding: KgEmbedding,
}

const GAE_STREAM: u64 = 0x67_6165;
const GAT_STREAM: u64 = 0x67_6174;

/// Train a GAE on the view and return its class embedding.
pub fn train_gae(sub: &ViewSubgraph, cfg: &GaeConfig, seed: u64) -> Result<FittedGraphModel> {
    let (adj, feats, _) = sub.to_adjacency();
    let a_hat = normalize_adjacency(&adj)?;
    let mut r = rng::derive(seed, &[GAE_STREAM]);
    let params = gae_init(feats.shape()[1], cfg, &mut r);
    fit_reconstruction(sub, params, cfg.epochs, cfg.lr, |tape, vars| {
        let a = tape.constant(a_hat.clone());
        let x = tape.constant(feats.clone());
        gae_forward(tape, vars, a, x)
    })
}

/// Train a GAT as the encoder of the same reconstruction objective.
pub fn train_gat(sub: &ViewSubgraph, cfg: &EmbedConfig, seed: u64) -> Result<FittedGraphModel> {
    let (adj, feats, _) = sub.to_adjacency();
    let mask = self_loop_mask(&adj)?;
    let mut r = rng::derive(seed, &[GAT_STREAM]);
    let params = gat_init(feats.shape()[1], &cfg.gat, &mut r)?;
    fit_reconstruction(sub, params, cfg.gae.epochs, cfg.gae.lr, |tape, vars| {
        let x = tape.constant(feats.clone());
        Ok(gat_forward(tape, &cfg.gat, vars, &mask, x)?.z)
    })
}

/// Fresh GAT parameters for joint training with images.
pub fn init_gat_for(sub: &ViewSubgraph, cfg: &GatConfig, seed: u64) -> Result<ParamSet> {
    let mut r = rng::derive(seed, &[GAT_STREAM]);
    gat_init(sub.n_nodes(), cfg, &mut r)
}

fn fit_reconstruction<F>(
    sub: &ViewSubgraph,
    mut params: ParamSet,
    epochs: usize,
    lr: f32,
    forward: F,
) -> Result<FittedGraphModel>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let adj = sub.adjacency();
    let mut opt = Adam::new(AdamConfig::with_lr(lr));
    let mut losses = Vec::with_capacity(epochs + 1);
    for epoch in 0..=epochs {
        let mut tape = Tape::new();
        let vars = params.attach(&mut tape);
        let z = forward(&mut tape, &vars)?;
        let loss = reconstruction_loss(&mut tape, z, &adj)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(CoreError::NonFinite(format!(
                "reconstruction loss {value} at epoch {epoch} of view {}",
                sub.view
            )));
        }
        losses.push(value);
        if epoch == epochs {
            break;
        }
        let grads = tape.backward(loss)?;
        let g = params.collect_grads(&grads, &vars);
        opt.step(params.tensors_mut(), &g)?;
    }
    let mut tape = Tape::new();
    let vars = params.attach_frozen(&mut tape);
    let z = forward(&mut tape, &vars)?;
    let embedding = KgEmbedding::from_node_embeddings(&sub.view, sub.class_list(), tape.value(z))?;
    Ok(FittedGraphModel {
        params,
        losses,
        embedding,
    })
}

/// Embed a view with the chosen method.
pub fn embed_view(sub: &ViewSubgraph, method: KgeMethod, cfg: &EmbedConfig, seed: u64) -> Result<KgEmbedding> {
    Ok(match method {
        KgeMethod::Gae => train_gae(sub, &cfg.gae, seed)?.embedding,
        KgeMethod::Gat => train_gat(sub, cfg, seed)?.embedding,
    })
}
