//! Classification heads fitted on frozen image representations, and the
//! metrics used to compare trained models.

use ctxf_autodiff::rng;
use ctxf_autodiff::{Adam, AdamConfig, ParamSet, Tape, Tensor};
use rand::seq::SliceRandom;

use crate::error::{CoreError, Result};

pub const DEFAULT_RIDGE: f64 = 1e-3;

/// Per-class Gaussian fitted in double precision.
#[derive(Clone, Debug, PartialEq)]
struct ClassGaussian {
    mean: Vec<f64>,
    /// Lower Cholesky factor of the regularized covariance, row-major.
    chol: Vec<f64>,
    log_det: f64,
    log_prior: f64,
}

/// Lower-triangular `L` with `L Lᵀ = a`, or `None` on a non-positive pivot.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Squared Mahalanobis distance `dᵀ (L Lᵀ)⁻¹ d` via forward substitution.
fn mahalanobis(l: &[f64], n: usize, d: &[f64]) -> f64 {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = d[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    y.iter().map(|v| v * v).sum()
}

/// Gaussian discriminant over representations: one mean and full covariance
/// (plus `ridge * I`) per class and uniform class priors.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHead {
    dim: usize,
    classes: Vec<ClassGaussian>,
}

impl GaussianHead {
    pub fn fit(features: &Tensor, labels: &[usize], n_classes: usize, ridge: f64) -> Result<Self> {
        let (n, d) = check_features(features, labels, n_classes)?;
        if !(ridge >= 0.0) {
            return Err(CoreError::Config(format!("ridge must be non-negative, got {ridge}")));
        }
        let mut classes = Vec::with_capacity(n_classes);
        for k in 0..n_classes {
            let rows: Vec<&[f32]> = (0..n).filter(|&i| labels[i] == k).map(|i| features.row(i)).collect();
            if rows.len() < 2 {
                return Err(CoreError::Data(format!(
                    "class {k} has {} samples, at least two are needed",
                    rows.len()
                )));
            }
            let m = rows.len() as f64;
            let mut mean = vec![0.0; d];
            for r in &rows {
                for (acc, &v) in mean.iter_mut().zip(r.iter()) {
                    *acc += v as f64;
                }
            }
            mean.iter_mut().for_each(|v| *v /= m);
            let mut cov = vec![0.0; d * d];
            let mut centered = vec![0.0; d];
            for r in &rows {
                for (c, (&v, mu)) in centered.iter_mut().zip(r.iter().zip(&mean)) {
                    *c = v as f64 - mu;
                }
                for i in 0..d {
                    let ci = centered[i];
                    for j in 0..=i {
                        cov[i * d + j] += ci * centered[j];
                    }
                }
            }
            for i in 0..d {
                for j in 0..=i {
                    let v = cov[i * d + j] / m;
                    cov[i * d + j] = v;
                    cov[j * d + i] = v;
                }
                cov[i * d + i] += ridge;
            }
            let chol = cholesky(&cov, d).ok_or(CoreError::Singular { class: k.to_string() })?;
            let log_det = 2.0 * (0..d).map(|i| chol[i * d + i].ln()).sum::<f64>();
            classes.push(ClassGaussian {
                mean,
                chol,
                log_det,
                log_prior: -(n_classes as f64).ln(),
            });
        }
        Ok(Self { dim: d, classes })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn mean(&self, class: usize) -> &[f64] {
        &self.classes[class].mean
    }

    /// Regularized covariance of `class`, rebuilt from its factor.
    pub fn covariance(&self, class: usize) -> Vec<f64> {
        let (d, l) = (self.dim, &self.classes[class].chol);
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = (0..=i.min(j)).map(|k| l[i * d + k] * l[j * d + k]).sum();
            }
        }
        out
    }

    /// Unnormalized log posterior per class, `[n, n_classes]`.
    pub fn log_scores(&self, features: &Tensor) -> Result<Vec<Vec<f64>>> {
        if features.ndim() != 2 || features.shape()[1] != self.dim {
            return Err(CoreError::Data(format!(
                "expected features [n, {}], got {:?}",
                self.dim,
                features.shape()
            )));
        }
        let d = self.dim;
        let log_2pi = (2.0 * std::f64::consts::PI).ln();
        let mut diff = vec![0.0; d];
        Ok((0..features.rows())
            .map(|i| {
                let x = features.row(i);
                self.classes
                    .iter()
                    .map(|g| {
                        for (o, (&v, mu)) in diff.iter_mut().zip(x.iter().zip(&g.mean)) {
                            *o = v as f64 - mu;
                        }
                        let m2 = mahalanobis(&g.chol, d, &diff);
                        -0.5 * (m2 + g.log_det + d as f64 * log_2pi) + g.log_prior
                    })
                    .collect()
            })
            .collect())
    }

    /// Class posteriors, each row summing to one.
    pub fn predict_proba(&self, features: &Tensor) -> Result<Vec<Vec<f64>>> {
        Ok(self.log_scores(features)?.into_iter().map(softmax64).collect())
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        Ok(self.log_scores(features)?.iter().map(|r| argmax(r)).collect())
    }
}

fn softmax64(row: Vec<f64>) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

fn check_features(features: &Tensor, labels: &[usize], n_classes: usize) -> Result<(usize, usize)> {
    if features.ndim() != 2 {
        return Err(CoreError::Data(format!(
            "features must be 2-d, got {:?}",
            features.shape()
        )));
    }
    let (n, d) = (features.rows(), features.shape()[1]);
    if labels.len() != n {
        return Err(CoreError::Data(format!("{} labels for {n} feature rows", labels.len())));
    }
    if n_classes == 0 || n == 0 {
        return Err(CoreError::Data("nothing to fit".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(CoreError::Data(format!(
            "label {y} out of range for {n_classes} classes"
        )));
    }
    if !features.is_finite() {
        return Err(CoreError::NonFinite("features contain NaN or infinity".into()));
    }
    Ok((n, d))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Softmax regression trained with cross-entropy from zero weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    params: ParamSet,
    n_classes: usize,
}

impl LinearHead {
    pub fn fit(features: &Tensor, labels: &[usize], n_classes: usize, cfg: &LinearConfig) -> Result<Self> {
        let (n, d) = check_features(features, labels, n_classes)?;
        if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
            return Err(CoreError::Config(
                "linear head needs a positive batch size and rate".into(),
            ));
        }
        let mut params = ParamSet::new();
        params.insert("w", Tensor::zeros(&[d, n_classes]));
        params.insert("b", Tensor::zeros(&[n_classes]));
        let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
        let mut order: Vec<usize> = (0..n).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng::derive(cfg.seed, &[epoch as u64]));
            for chunk in order.chunks(cfg.batch_size) {
                let mut x = Vec::with_capacity(chunk.len() * d);
                let mut onehot = vec![0.0f32; chunk.len() * n_classes];
                for (r, &i) in chunk.iter().enumerate() {
                    x.extend_from_slice(features.row(i));
                    onehot[r * n_classes + labels[i]] = 1.0;
                }
                let mut tape = Tape::new();
                let vars = params.attach(&mut tape);
                let xv = tape.constant(Tensor::new(&[chunk.len(), d], x)?);
                let logits = tape.matmul(xv, vars[0])?;
                let logits = tape.add(logits, vars[1])?;
                let all = vec![true; chunk.len() * n_classes];
                let logp = tape.masked_log_softmax(logits, &all)?;
                let y = tape.constant(Tensor::new(&[chunk.len(), n_classes], onehot)?);
                let picked = tape.mul(logp, y)?;
                let total = tape.sum(picked);
                let loss = tape.scale(total, -1.0 / chunk.len() as f64);
                let grads = tape.backward(loss)?;
                let g = params.collect_grads(&grads, &vars);
                opt.step(params.tensors_mut(), &g)?;
            }
        }
        Ok(Self { params, n_classes })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.attach_frozen(&mut tape);
        let xv = tape.constant(features.clone());
        let l = tape.matmul(xv, vars[0])?;
        let l = tape.add(l, vars[1])?;
        Ok(tape.value(l).clone())
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let l = self.logits(features)?;
        Ok((0..l.rows())
            .map(|i| {
                let row: Vec<f64> = l.row(i).iter().map(|&v| v as f64).collect();
                argmax(&row)
            })
            .collect())
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Gaussian(GaussianHead),
    Linear(LinearHead),
}

impl Head {
    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        match self {
            Head::Gaussian(g) => g.predict(features),
            Head::Linear(l) => l.predict(features),
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Head::Gaussian(g) => g.n_classes(),
            Head::Linear(l) => l.n_classes(),
        }
    }
}

/// Accuracy per class, overall accuracy and the confusion matrix
/// `confusion[true][predicted]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub class_names: Vec<String>,
    /// `None` for classes with no test samples.
    pub per_class: Vec<Option<f64>>,
    pub overall: f64,
    pub confusion: Vec<Vec<usize>>,
}

/// Score predictions against true labels. Samples whose true class is not
/// among the first `n_known` classes are left out of the overall accuracy,
/// since no head could predict them.
pub fn evaluate(predicted: &[usize], truth: &[usize], class_names: &[String], n_known: usize) -> Result<Evaluation> {
    if predicted.len() != truth.len() {
        return Err(CoreError::Data(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(CoreError::Data("cannot evaluate on an empty dataset".into()));
    }
    let k = class_names.len();
    if let Some(&y) = truth.iter().chain(predicted).find(|&&y| y >= k) {
        return Err(CoreError::Data(format!("label {y} out of range for {k} classes")));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &t) in predicted.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[c] as f64 / total as f64)
        })
        .collect();
    let (mut hit, mut seen) = (0usize, 0usize);
    for (&p, &t) in predicted.iter().zip(truth) {
        if t < n_known {
            seen += 1;
            hit += usize::from(p == t);
        }
    }
    if seen == 0 {
        return Err(CoreError::Data("no test sample belongs to a known class".into()));
    }
    Ok(Evaluation {
        class_names: class_names.to_vec(),
        per_class,
        overall: hit as f64 / seen as f64,
        confusion,
    })
}

impl Evaluation {
    /// Among misclassified samples, the fraction predicted into a class of
    /// the same supercategory as the truth.
    pub fn within_group_error_rate(&self, groups: &[usize]) -> Option<f64> {
        let (mut within, mut errors) = (0usize, 0usize);
        for (t, row) in self.confusion.iter().enumerate() {
            for (p, &count) in row.iter().enumerate() {
                if p != t && count > 0 {
                    errors += count;
                    if groups[p] == groups[t] {
                        within += count;
                    }
                }
            }
        }
        (errors > 0).then(|| within as f64 / errors as f64)
    }
}

/// One row per model, one column per class plus `All`. Absent classes print
/// as `-`.
pub fn metrics_csv(rows: &[(String, Evaluation)]) -> Result<String> {
    let Some((_, first)) = rows.first() else {
        return Err(CoreError::Data("no evaluations to write".into()));
    };
    let mut out = String::from("model");
    for name in &first.class_names {
        out.push(',');
        out.push_str(name);
    }
    out.push_str(",All\n");
    for (model, ev) in rows {
        if ev.class_names != first.class_names {
            return Err(CoreError::Data(format!(
                "model {model} was scored on different classes"
            )));
        }
        out.push_str(model);
        for acc in &ev.per_class {
            match acc {
                Some(a) => out.push_str(&format!(",{a:.4}")),
                None => out.push_str(",-"),
            }
        }
        out.push_str(&format!(",{:.4}\n", ev.overall));
    }
    Ok(out)
}
