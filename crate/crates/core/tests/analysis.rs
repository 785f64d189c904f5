use ctxf_autodiff::Tensor as TensorOf;
use ctxf_core::analysis::*;
use ctxf_core::predict::Evaluation;
use ctxf_core::CoreError;
use proptest::prelude::*;

type Tensor = TensorOf<f32>;

fn names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("c{i}")).collect()
}

#[test]
fn cosine_of_known_vectors() {
    let rows = Tensor::matrix(&[&[1.0, 0.0], &[1.0, 1.0], &[0.0, 3.0], &[-2.0, 0.0]]);
    let m = cosine_matrix(&names(4), &rows).unwrap();
    assert!((m.get(0, 1) - 0.5f64.sqrt()).abs() < 1e-6);
    assert!(m.get(0, 2).abs() < 1e-12);
    assert!((m.get(0, 3) + 1.0).abs() < 1e-12);
    assert_eq!(m.get(2, 2), 1.0);
    m.check_invariants().unwrap();
}

#[test]
fn zero_vectors_have_no_cosine() {
    let rows = Tensor::matrix(&[&[1.0, 0.0], &[0.0, 0.0]]);
    assert!(cosine_matrix(&names(2), &rows).is_err());
}

#[test]
fn spearman_extremes() {
    let a = [1.0, 2.0, 3.0, 4.0, 5.0];
    let rev: Vec<f64> = a.iter().rev().copied().collect();
    assert!((spearman(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    assert!((spearman(&a, &rev).unwrap() + 1.0).abs() < 1e-12);
    assert!(matches!(spearman(&a, &[2.0; 5]), Err(CoreError::Degenerate(_))));
    assert!(spearman(&a, &a[..3]).is_err());
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn spearman_matches_squared_rank_difference_formula() {
    let n = 6;
    let base: Vec<f64> = (0..n).map(|i| i as f64 * 1.5 - 2.0).collect();
    for p in permutations(n) {
        let b: Vec<f64> = p.iter().map(|&i| (i * i) as f64).collect();
        let d2: f64 = p
            .iter()
            .enumerate()
            .map(|(i, &r)| ((i as f64) - r as f64).powi(2))
            .sum();
        let want = 1.0 - 6.0 * d2 / (n * (n * n - 1)) as f64;
        let got = spearman(&base, &b).unwrap();
        assert!((got - want).abs() < 1e-12, "{p:?}: {got} vs {want}");
    }
}

/// Mid-ranks counted directly, then the Pearson coefficient.
fn rank_pearson(a: &[f64], b: &[f64]) -> f64 {
    let ranks = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|x| {
                let below = v.iter().filter(|y| *y < x).count() as f64;
                let equal = v.iter().filter(|y| *y == x).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn spearman_with_ties_matches_mid_rank_oracle() {
    let a = [0.0, 0.5, 0.5, 1.0, 0.25, 0.5];
    for p in permutations(6) {
        let b: Vec<f64> = p.iter().map(|&i| [3.0, 1.0, 1.0, 2.0, 5.0, 0.0][i]).collect();
        let got = spearman(&a, &b).unwrap();
        assert!((got - rank_pearson(&a, &b)).abs() < 1e-12);
    }
    assert_eq!(average_ranks(&[2.0, 1.0, 2.0, 3.0]), vec![2.5, 1.0, 2.5, 4.0]);
}

fn sample_matrix() -> SimilarityMatrix {
    let rows = Tensor::matrix(&[&[1.0, 0.2, 0.0], &[0.3, 1.0, 0.1], &[0.0, 0.4, 1.0], &[0.5, 0.5, 0.5]]);
    cosine_matrix(&names(4), &rows).unwrap()
}

#[test]
fn csv_writes_exact_diagonal_and_round_trips() {
    let m = sample_matrix();
    let csv = m.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "class,c0,c1,c2,c3");
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[0], "c0");
    assert_eq!(first[1], "1.0");
    let back = SimilarityMatrix::from_csv(&csv).unwrap();
    assert_eq!(back.class_names, m.class_names);
    for (a, b) in back.values.iter().zip(&m.values) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn invariants_catch_asymmetry() {
    let mut m = sample_matrix();
    m.values[1] += 0.1;
    assert!(m.check_invariants().is_err());
    let mut m = sample_matrix();
    m.values[0] = 0.9;
    assert!(m.check_invariants().is_err());
}

#[test]
fn svg_has_one_cell_per_entry() {
    let m = sample_matrix();
    let svg = m.to_svg();
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("<rect").count(), 16);
    for name in &m.class_names {
        assert!(svg.contains(name.as_str()));
    }
    assert_eq!(diverging_color(1.0), diverging_color(1.0));
    assert_ne!(diverging_color(1.0), diverging_color(-1.0));
}

#[test]
fn heatmap_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, svg) = emit_heatmap(&sample_matrix(), dir.path().join("visual")).unwrap();
    assert!(csv.ends_with("visual.csv") && svg.ends_with("visual.svg"));
    assert!(std::fs::read_to_string(csv).unwrap().starts_with("class,"));
}

#[test]
fn group_gap_of_block_matrix() {
    let values = vec![
        1.0, 0.8, 0.1, 0.2, //
        0.8, 1.0, 0.3, 0.0, //
        0.1, 0.3, 1.0, 0.6, //
        0.2, 0.0, 0.6, 1.0,
    ];
    let m = SimilarityMatrix {
        class_names: names(4),
        values,
    };
    let gap = group_gap(&m, &[0, 0, 1, 1]).unwrap();
    assert!((gap - (0.7 - 0.15)).abs() < 1e-12);
    assert!(group_gap(&m, &[0, 0, 0, 0]).is_err());
}

#[test]
fn class_means_are_normalized_averages() {
    let z = Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, -2.0], &[0.0, -4.0]]);
    let m = class_means(&z, &[0, 0, 1, 1], 2).unwrap();
    let s = 0.5f32.sqrt();
    assert!((m.data()[0] - s).abs() < 1e-6 && (m.data()[1] - s).abs() < 1e-6);
    assert_eq!(m.row(1), &[0.0, -1.0]);
    assert!(class_means(&z, &[0, 0, 0, 0], 2).is_err());
}

fn eval(per_class: Vec<Option<f64>>, overall: f64) -> Evaluation {
    let k = per_class.len();
    Evaluation {
        class_names: names(k),
        per_class,
        overall,
        confusion: vec![vec![0; k]; k],
    }
}

#[test]
fn deltas_against_self_are_zero() {
    let base = eval(vec![Some(0.9), Some(0.5)], 0.7);
    let t = delta_table(("baseline", &base), &[("same".into(), base.clone())]).unwrap();
    assert_eq!(t.rows[0].per_class, vec![Some(0.0), Some(0.0)]);
    assert_eq!(t.rows[0].all, 0.0);
    assert_eq!(t.to_csv(), "model (vs baseline),c0,c1,All\nsame,+0.0,+0.0,+0.0\n");
}

#[test]
fn deltas_are_percentage_points() {
    let base = eval(vec![Some(0.929), None], 0.929);
    let better = eval(vec![Some(0.933), None], 0.933);
    let worse = eval(vec![Some(0.900), None], 0.900);
    let t = delta_table(("baseline", &base), &[("a".into(), better), ("b".into(), worse)]).unwrap();
    assert!((t.rows[0].all - 0.4).abs() < 1e-9);
    assert_eq!(t.rows[0].per_class[1], None);
    assert_eq!(t.best[0], Some(0));
    assert_eq!(t.best[1], None);
    let csv = t.to_csv();
    assert!(csv.contains("a,+0.4*,-,+0.4*"), "{csv}");
    assert!(csv.contains("b,-2.9,-,-2.9"), "{csv}");
}

#[test]
fn delta_table_rejects_mismatched_classes() {
    let base = eval(vec![Some(0.9)], 0.9);
    let other = eval(vec![Some(0.9), Some(0.1)], 0.5);
    assert!(delta_table(("baseline", &base), &[("x".into(), other)]).is_err());
}

proptest! {
    #[test]
    fn random_cosine_matrices_satisfy_invariants(
        data in prop::collection::vec(0.1f32..2.0, 12),
        signs in prop::collection::vec(any::<bool>(), 12),
    ) {
        let values: Vec<f32> = data.iter().zip(&signs).map(|(v, s)| if *s { *v } else { -*v }).collect();
        let rows = Tensor::new(&[4, 3], values).unwrap();
        let m = cosine_matrix(&names(4), &rows).unwrap();
        prop_assert!(m.check_invariants().is_ok());
        let back = SimilarityMatrix::from_csv(&m.to_csv()).unwrap();
        for (a, b) in back.values.iter().zip(&m.values) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
