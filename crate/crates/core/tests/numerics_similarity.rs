use gqa_core::grouping::{neighbour_grouping, random_grouping, HeadGrouping};
use gqa_core::numerics::{cosim, matmul, softmax_rows, topk_excluding};
use gqa_core::similarity::{activation_similarity, similarity_matrix, weight_similarity};
use gqa_core::{Matrix, MatrixF32, Rng, SimilarityMetric};

#[test]
fn matmul_hand_and_triple_loop() {
    let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
    assert_eq!(matmul(&a, &b).unwrap().into_vec(), vec![2.0, 4.0]);
    assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);

    let mut rng = Rng::new(1);
    let a = Matrix::uniform(5, 7, 1.0, &mut rng);
    let b = Matrix::uniform(7, 3, 1.0, &mut rng);
    let c = matmul(&a, &b).unwrap();
    for i in 0..5 {
        for j in 0..3 {
            let mut s = 0.0;
            for k in 0..7 {
                s += a[(i, k)] * b[(k, j)];
            }
            assert!((c[(i, j)] - s).abs() < 1e-12);
        }
    }
    assert!(matmul(&a, &a).is_err());
}

#[test]
fn cosine_cases() {
    let u = [0.3f64, -1.2, 4.0];
    assert!((cosim(&u, &u).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(cosim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    // 0.70710678 itself is 1.2e-9 away from 1/sqrt(2)
    assert!((cosim(&[1.0f64, 1.0], &[1.0, 0.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
    assert_eq!(cosim(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
    assert!(cosim(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn softmax_cases() {
    let s = softmax_rows(&Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap());
    assert_eq!(s.into_vec(), vec![0.5, 0.5]);
    let s = softmax_rows(&Matrix::from_rows(&[vec![1000.0, 1000.0]]).unwrap());
    assert_eq!(s.into_vec(), vec![0.5, 0.5]);
    let s = softmax_rows(&Matrix::from_rows(&[vec![0.0, 3.0f64.ln()]]).unwrap()).into_vec();
    assert!((s[0] - 0.25).abs() < 1e-12 && (s[1] - 0.75).abs() < 1e-12);
}

#[test]
fn topk_cases() {
    assert_eq!(topk_excluding(&[0.9, 0.5, 0.8, 0.1], 2, &[0]).unwrap(), vec![2, 1]);
    assert_eq!(topk_excluding(&[0.5, 0.5, 0.5], 1, &[]).unwrap(), vec![0]);
    assert_eq!(topk_excluding(&[0.2, 0.7, 0.4], 10, &[1]).unwrap(), vec![2, 0]);
}

#[test]
fn activation_similarity_cases() {
    let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let b = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
    assert!((activation_similarity(&a, &b).unwrap() - 1.5).abs() < 1e-12);
    let mut rng = Rng::new(2);
    let a = Matrix::uniform(6, 3, 1.0, &mut rng);
    assert!((activation_similarity(&a, &a).unwrap() - 6.0).abs() < 1e-9);
}

#[test]
fn weight_similarity_cases() {
    let mut rng = Rng::new(3);
    let w = Matrix::uniform(4, 3, 1.0, &mut rng);
    assert!((weight_similarity(&w, &w).unwrap() - 1.0).abs() < 1e-12);
    assert!((weight_similarity(&w, &w.map(|v| -v)).unwrap() + 1.0).abs() < 1e-12);
    assert!((weight_similarity(&w, &w.map(|v| 2.0 * v)).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn similarity_matrix_fixtures() {
    let mut rng = Rng::new(4);
    let head = Matrix::uniform(5, 3, 1.0, &mut rng);
    let same = similarity_matrix(&vec![head.clone(); 4], SimilarityMetric::Activation).unwrap();
    let diag = same.get(0, 0);
    assert!(same.values().as_slice().iter().all(|v| (v - diag).abs() < 1e-12));

    let heads: Vec<Matrix> = (0..5).map(|_| Matrix::uniform(7, 3, 1.0, &mut rng)).collect();
    for metric in [SimilarityMetric::Activation, SimilarityMetric::Weight] {
        let s = similarity_matrix(&heads, metric).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert!((s.get(i, j) - s.get(j, i)).abs() < 1e-9);
            }
        }
    }

    let h0 = Matrix::uniform(7, 3, 1.0, &mut rng);
    let h1 = Matrix::uniform(7, 3, 1.0, &mut rng);
    let s = similarity_matrix(&[h0.clone(), h1, h0], SimilarityMetric::Activation).unwrap();
    assert_eq!(topk_excluding(s.row(0), 1, &[0]).unwrap(), vec![2]);
}

#[test]
fn single_precision_alias_works() {
    let a = MatrixF32::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let b = MatrixF32::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
    assert!((activation_similarity(&a, &b).unwrap() - 1.5).abs() < 1e-6);
}

#[test]
fn grouping_constructors() {
    assert_eq!(
        neighbour_grouping(8, 2).unwrap().groups(),
        &[vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]]
    );
    assert_eq!(neighbour_grouping(4, 4).unwrap().groups(), &[vec![0, 1, 2, 3]]);
    assert_eq!(neighbour_grouping(4, 1).unwrap(), HeadGrouping::singletons(4));
    assert!(neighbour_grouping(8, 3).is_err());

    let mut rng = Rng::new(9);
    let g = random_grouping(12, 3, &mut rng).unwrap();
    assert!(g.is_uniform(3));
    assert_eq!(random_grouping(12, 3, &mut Rng::new(9)).unwrap(), g);
}

#[test]
fn random_grouping_covers_all_three_partitions_evenly() {
    let mut rng = Rng::new(77);
    let mut counts = std::collections::HashMap::new();
    let n = 3000;
    for _ in 0..n {
        *counts.entry(random_grouping(4, 2, &mut rng).unwrap()).or_insert(0usize) += 1;
    }
    assert_eq!(counts.len(), 3);
    let expected = n as f64 / 3.0;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 2 degrees of freedom, 0.999 quantile
    assert!(chi2 < 13.82, "chi2 {chi2}");
}
