//! Similarity matrices, rank correlation between graph and embedding
//! structure, accuracy delta tables and heatmap output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ctxf_autodiff::Tensor;

use crate::datasets::ImageDataset;
use crate::encoder::Encoder;
use crate::error::{CoreError, Result};
use crate::kg::ViewSubgraph;
use crate::predict::Evaluation;

/// Per-class mean of projected embeddings, L2-normalized, `[n_classes, d]`.
pub fn class_mean_embeddings(encoder: &Encoder, ds: &ImageDataset) -> Result<Tensor> {
    let z = encoder.embed_dataset(ds)?;
    class_means(&z, ds.labels(), ds.class_names().len())
}

/// Normalized class means of the rows of `z`.
pub fn class_means(z: &Tensor, labels: &[usize], n_classes: usize) -> Result<Tensor> {
    let d = z.last_dim();
    let mut sums = vec![0.0f64; n_classes * d];
    let mut counts = vec![0usize; n_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(CoreError::Data(format!("label {y} out of range")));
        }
        counts[y] += 1;
        for (acc, &v) in sums[y * d..(y + 1) * d].iter_mut().zip(z.row(i)) {
            *acc += v as f64;
        }
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(CoreError::Data(format!("class {k} has no samples")));
    }
    let mut out = Vec::with_capacity(n_classes * d);
    for k in 0..n_classes {
        let row = &sums[k * d..(k + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 1e-12) {
            return Err(CoreError::Degenerate(format!("class {k} mean embedding is zero")));
        }
        out.extend(row.iter().map(|v| (v / norm) as f32));
    }
    Ok(Tensor::new(&[n_classes, d], out)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub class_names: Vec<String>,
    /// Row-major `n * n` values.
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.class_names.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n() + j]
    }

    /// Symmetric within 1e-6, unit diagonal within 1e-5, values in [-1, 1].
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.n();
        if self.values.len() != n * n {
            return Err(CoreError::Format(format!(
                "{} values for {n} classes",
                self.values.len()
            )));
        }
        for i in 0..n {
            if (self.get(i, i) - 1.0).abs() > 1e-5 {
                return Err(CoreError::Format(format!("diagonal entry {i} is {}", self.get(i, i))));
            }
            for j in 0..n {
                let v = self.get(i, j);
                if !(-1.0..=1.0).contains(&v) {
                    return Err(CoreError::Format(format!("entry ({i}, {j}) = {v} outside [-1, 1]")));
                }
                if (v - self.get(j, i)).abs() > 1e-6 {
                    return Err(CoreError::Format(format!("entries ({i}, {j}) and ({j}, {i}) differ")));
                }
            }
        }
        Ok(())
    }

    /// Upper-triangle entries in `(0,1), (0,2), ..., (n-2,n-1)` order.
    pub fn upper_pairs(&self) -> Vec<f64> {
        let n = self.n();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class");
        for name in &self.class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, name) in self.class_names.iter().enumerate() {
            out.push_str(name);
            for j in 0..self.n() {
                let _ = write!(out, ",{:?}", self.get(i, j));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| CoreError::Format("empty similarity CSV".into()))?;
        let class_names: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
        let n = class_names.len();
        let mut values = Vec::with_capacity(n * n);
        for (i, line) in lines.enumerate() {
            let mut cells = line.split(',');
            if cells.next() != class_names.get(i).map(String::as_str) {
                return Err(CoreError::Format(format!("row {i} label does not match the header")));
            }
            for cell in cells {
                values.push(
                    cell.parse::<f64>()
                        .map_err(|e| CoreError::Format(format!("row {i}: {e}")))?,
                );
            }
        }
        if values.len() != n * n {
            return Err(CoreError::Format(format!(
                "expected {n}x{n} values, found {}",
                values.len()
            )));
        }
        Ok(Self { class_names, values })
    }

    pub fn to_svg(&self) -> String {
        const CELL: usize = 28;
        const MARGIN: usize = 110;
        let n = self.n();
        let side = MARGIN + n * CELL + 10;
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{side}" height="{side}" font-family="sans-serif" font-size="10">"#
        );
        for (i, name) in self.class_names.iter().enumerate() {
            let c = MARGIN + i * CELL + CELL / 2;
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{c}" text-anchor="end" dominant-baseline="middle">{}</text>"#,
                MARGIN - 4,
                xml_escape(name)
            );
            let _ = writeln!(
                out,
                r#"<text x="{c}" y="{}" text-anchor="start" transform="rotate(-90 {c} {})">{}</text>"#,
                MARGIN - 4,
                MARGIN - 4,
                xml_escape(name)
            );
        }
        for i in 0..n {
            for j in 0..n {
                let v = self.get(i, j);
                let (r, g, b) = diverging_color(v);
                let _ = writeln!(
                    out,
                    r#"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="rgb({r},{g},{b})"><title>{:.4}</title></rect>"#,
                    MARGIN + j * CELL,
                    MARGIN + i * CELL,
                    v
                );
            }
        }
        out.push_str("</svg>\n");
        out
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Linear blue (-1) to white (0) to red (+1).
pub fn diverging_color(v: f64) -> (u8, u8, u8) {
    let v = v.clamp(-1.0, 1.0);
    let fade = |t: f64| (255.0 * (1.0 - t)).round() as u8;
    if v >= 0.0 {
        (255, fade(v), fade(v))
    } else {
        (fade(-v), fade(-v), 255)
    }
}

/// Pairwise cosine similarities between the rows of `rows`.
pub fn cosine_matrix(class_names: &[String], rows: &Tensor) -> Result<SimilarityMatrix> {
    let n = rows.rows();
    if n < 2 || class_names.len() != n {
        return Err(CoreError::Data(format!(
            "need at least two named rows, got {n} rows and {} names",
            class_names.len()
        )));
    }
    let unit: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r: Vec<f64> = rows.row(i).iter().map(|&v| v as f64).collect();
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(CoreError::Degenerate(format!("row {i} has zero norm")));
            }
            Ok(r.into_iter().map(|v| v / norm).collect())
        })
        .collect::<Result<_>>()?;
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let c = unit[i]
                .iter()
                .zip(&unit[j])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                .clamp(-1.0, 1.0);
            values[i * n + j] = c;
            values[j * n + i] = c;
        }
    }
    Ok(SimilarityMatrix {
        class_names: class_names.to_vec(),
        values,
    })
}

/// Jaccard similarity of class-node neighbor sets in the view subgraph, over
/// class pairs `i < j` in the order of [`SimilarityMatrix::upper_pairs`].
/// Pairs where both neighbor sets are empty score 0.
pub fn neighbor_jaccard(sub: &ViewSubgraph) -> Vec<f64> {
    let nb = sub.neighbors();
    let n = sub.n_classes();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let inter = nb[i].intersection(&nb[j]).count();
            let union = nb[i].union(&nb[j]).count();
            out.push(if union == 0 { 0.0 } else { inter as f64 / union as f64 });
        }
    }
    out
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &k in &idx[start..end] {
            ranks[k] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(CoreError::Data(format!(
            "rank correlation needs two equal-length inputs with at least two entries, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let mean = (a.len() + 1) as f64 / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - mean) * (y - mean);
        saa += (x - mean) * (x - mean);
        sbb += (y - mean) * (y - mean);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(CoreError::Degenerate(
            "rank correlation is undefined for constant input".into(),
        ));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rho between graph-side Jaccard and embedding cosine over pairs.
pub fn rank_correlation(jaccard: &[f64], m: &SimilarityMatrix) -> Result<f64> {
    spearman(jaccard, &m.upper_pairs())
}

/// Mean within-group cosine minus mean cross-group cosine, off-diagonal.
pub fn group_gap(m: &SimilarityMatrix, groups: &[usize]) -> Result<f64> {
    let n = m.n();
    if groups.len() != n {
        return Err(CoreError::Data(format!(
            "{} group labels for {n} classes",
            groups.len()
        )));
    }
    let (mut within, mut nw, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            if groups[i] == groups[j] {
                within += m.get(i, j);
                nw += 1;
            } else {
                cross += m.get(i, j);
                nc += 1;
            }
        }
    }
    if nw == 0 || nc == 0 {
        return Err(CoreError::Data("need both within-group and cross-group pairs".into()));
    }
    Ok(within / nw as f64 - cross / nc as f64)
}

/// Write `<stem>.csv` and `<stem>.svg`; returns both paths.
pub fn emit_heatmap(m: &SimilarityMatrix, stem: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    m.check_invariants()?;
    let stem = stem.as_ref();
    let csv = stem.with_extension("csv");
    let svg = stem.with_extension("svg");
    fs::write(&csv, m.to_csv())?;
    fs::write(&svg, m.to_svg())?;
    Ok((csv, svg))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaRow {
    pub model: String,
    /// Percentage points, `None` where the class was not scored.
    pub per_class: Vec<Option<f64>>,
    pub all: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaTable {
    pub baseline: String,
    pub class_names: Vec<String>,
    pub rows: Vec<DeltaRow>,
    /// Per column (classes then `All`), the row index with the largest delta.
    pub best: Vec<Option<usize>>,
}

/// Accuracy differences of each model against the baseline, in percentage
/// points.
pub fn delta_table(baseline: (&str, &Evaluation), models: &[(String, Evaluation)]) -> Result<DeltaTable> {
    let (base_name, base) = baseline;
    let pct = |a: f64| 100.0 * a;
    let mut rows = Vec::with_capacity(models.len());
    for (name, ev) in models {
        if ev.class_names != base.class_names {
            return Err(CoreError::Data(format!(
                "model {name} was evaluated on a different class set"
            )));
        }
        let per_class = ev
            .per_class
            .iter()
            .zip(&base.per_class)
            .map(|(m, b)| match (m, b) {
                (Some(m), Some(b)) => Some(pct(*m) - pct(*b)),
                _ => None,
            })
            .collect();
        rows.push(DeltaRow {
            model: name.clone(),
            per_class,
            all: pct(ev.overall) - pct(base.overall),
        });
    }
    let k = base.class_names.len();
    let best = (0..=k)
        .map(|c| {
            let col = |r: &DeltaRow| if c < k { r.per_class[c] } else { Some(r.all) };
            let mut best: Option<(usize, f64)> = None;
            for (i, r) in rows.iter().enumerate() {
                if let Some(v) = col(r) {
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((i, v));
                    }
                }
            }
            best.map(|(i, _)| i)
        })
        .collect();
    Ok(DeltaTable {
        baseline: base_name.to_string(),
        class_names: base.class_names.clone(),
        rows,
        best,
    })
}

impl DeltaTable {
    /// Best entries per column are marked with a trailing `*`.
    pub fn to_csv(&self) -> String {
        let mut out = format!("model (vs {})", self.baseline);
        for name in &self.class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push_str(",All\n");
        let k = self.class_names.len();
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(&row.model);
            for c in 0..=k {
                let v = if c < k { row.per_class[c] } else { Some(row.all) };
                match v {
                    Some(v) => {
                        let _ = write!(out, ",{v:+.1}");
                        if self.best[c] == Some(i) && self.rows.len() > 1 {
                            out.push('*');
                        }
                    }
                    None => out.push_str(",-"),
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn color_endpoints() {
        assert_eq!(diverging_color(1.0), (255, 0, 0));
        assert_eq!(diverging_color(0.0), (255, 255, 255));
        assert_eq!(diverging_color(-1.0), (0, 0, 255));
    }
}
