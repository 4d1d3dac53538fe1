use graformer::graph::{
    chebyshev_basis, graph_laplacian, normalized_adjacency, rescaled_laplacian, DenseMatrix,
    SkeletonGraph,
};
use proptest::prelude::*;

/// Random simple graph with at least one edge.
fn random_graph() -> impl Strategy<Value = SkeletonGraph> {
    (2usize..=21)
        .prop_flat_map(|j| {
            let pairs: Vec<(usize, usize)> = (0..j)
                .flat_map(|a| (a + 1..j).map(move |b| (a, b)))
                .collect();
            let n = pairs.len();
            (
                Just(j),
                Just(pairs),
                prop::collection::vec(any::<bool>(), n),
                0..n,
                0..j,
            )
        })
        .prop_map(|(j, pairs, keep, forced, root)| {
            let edges = pairs
                .iter()
                .enumerate()
                .filter(|&(i, _)| keep[i] || i == forced)
                .map(|(_, &e)| e);
            SkeletonGraph::new("random", j, edges, root).unwrap()
        })
}

fn binomial_ratio(k: usize, m: usize) -> f64 {
    // (k - m - 1)! / (m! (k - 2m)!)
    let fact = |n: usize| (1..=n).map(|v| v as f64).product::<f64>();
    fact(k - m - 1) / (fact(m) * fact(k - 2 * m))
}

/// Monomial coefficients of the Chebyshev polynomial `T_k`, from the closed
/// form `T_k(x) = k/2 Σ_m (-1)^m (k-m-1)! / (m! (k-2m)!) (2x)^(k-2m)`.
fn chebyshev_coefficients(k: usize) -> Vec<f64> {
    let mut c = vec![0.0; k + 1];
    if k == 0 {
        c[0] = 1.0;
        return c;
    }
    for m in 0..=k / 2 {
        let p = k - 2 * m;
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        c[p] += sign * k as f64 / 2.0 * binomial_ratio(k, m) * 2f64.powi(p as i32);
    }
    c
}

fn explicit_polynomial(l: &DenseMatrix, x: &DenseMatrix, k: usize) -> DenseMatrix {
    let mut power = x.clone();
    let mut out = DenseMatrix::zeros(x.rows(), x.cols());
    for (p, c) in chebyshev_coefficients(k).into_iter().enumerate() {
        if p > 0 {
            power = l.matmul(&power).unwrap();
        }
        out = out.axpby(1.0, &power, c).unwrap();
    }
    out
}

#[test]
fn chebyshev_coefficients_match_known_polynomials() {
    assert_eq!(chebyshev_coefficients(2), vec![-1.0, 0.0, 2.0]);
    assert_eq!(chebyshev_coefficients(3), vec![0.0, -3.0, 0.0, 4.0]);
    assert_eq!(chebyshev_coefficients(4), vec![1.0, 0.0, -8.0, 0.0, 8.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn normalized_adjacency_is_symmetric(g in random_graph()) {
        prop_assert!(normalized_adjacency(&g).max_asymmetry() <= 1e-12);
    }

    #[test]
    fn laplacian_spectrum_in_unit_band(g in random_graph()) {
        let eig = graph_laplacian(&g).symmetric_eigenvalues().unwrap();
        prop_assert!(eig[0] >= -1e-9 && eig[0] <= 1e-9, "min {}", eig[0]);
        prop_assert!(*eig.last().unwrap() <= 2.0 + 1e-9);
    }

    #[test]
    fn rescaled_spectrum_in_unit_interval(g in random_graph()) {
        let eig = rescaled_laplacian(&g).unwrap().symmetric_eigenvalues().unwrap();
        prop_assert!(eig.iter().all(|&e| (-1.0 - 1e-9..=1.0 + 1e-9).contains(&e)), "{eig:?}");
    }

    #[test]
    fn chebyshev_recurrence_matches_polynomial(g in random_graph(), seed in any::<u64>(), cols in 1usize..4) {
        let l = rescaled_laplacian(&g).unwrap();
        let j = g.joint_count();
        let data = (0..j * cols)
            .map(|i| ((i as u64).wrapping_mul(2654435761).wrapping_add(seed) % 2001) as f64 / 1000.0 - 1.0)
            .collect();
        let x = DenseMatrix::from_vec(j, cols, data).unwrap();
        let basis = chebyshev_basis(&l, &x, 5).unwrap();
        prop_assert_eq!(basis.len(), 5);
        for (k, t) in basis.iter().enumerate() {
            prop_assert!(t.max_abs_diff(&explicit_polynomial(&l, &x, k)) <= 1e-10);
        }
    }
}
