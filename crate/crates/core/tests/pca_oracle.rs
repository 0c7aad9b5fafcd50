use approx::assert_relative_eq;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scene_embed::embedding::{pca_2d, EmbeddingStore};

fn random_store(rng: &mut ChaCha8Rng, n: usize, d: usize, scales: &[f64]) -> EmbeddingStore {
    let data: Vec<f64> = (0..n)
        .flat_map(|_| {
            (0..d)
                .map(|k| rng.gen_range(-1.0..1.0) * scales[k % scales.len()])
                .collect::<Vec<_>>()
        })
        .collect();
    EmbeddingStore::new((0..n).map(|k| format!("w{k}")).collect(), d, data).unwrap()
}

fn covariance(store: &EmbeddingStore) -> DMatrix<f64> {
    let (n, d) = (store.len(), store.dim());
    let x = DMatrix::from_fn(n, d, |i, j| store.row(i)[j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    centered.transpose() * &centered / (n - 1) as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn matches_symmetric_eigendecomposition() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let store = random_store(&mut rng, 60, 8, &[4.0, 2.5, 1.0, 0.7, 0.5, 0.3, 0.2, 0.1]);
        let pca = pca_2d(&store, &[]).unwrap();
        let eig = SymmetricEigen::new(covariance(&store));
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for (c, &idx) in order.iter().take(2).enumerate() {
            let want = eig.eigenvalues[idx];
            assert_relative_eq!(pca.eigenvalues[c], want, max_relative = 1e-8);
            let v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
            let align = dot(&pca.components[c], &v).abs();
            assert!(align > 1.0 - 1e-8, "trial {trial} component {c}: |dot| = {align}");
        }
    }
}

#[test]
fn recovers_axis_aligned_variance() {
    // covariance close to diag(9, 1, 0.01, ...)
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let store = random_store(&mut rng, 400, 6, &[3.0, 1.0, 0.1, 0.1, 0.1, 0.1]);
    let pca = pca_2d(&store, &[]).unwrap();
    assert!(pca.components[0][0].abs() > 0.999);
    assert!(pca.components[1][1].abs() > 0.999);
    assert!(pca.components[0][0] > 0.0 && pca.components[1][1] > 0.0);
}

#[test]
fn first_component_beats_random_directions() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let store = random_store(&mut rng, 80, 10, &[2.0, 1.5, 1.0, 0.5]);
    let cov = covariance(&store);
    let variance = |u: &[f64]| {
        let v = nalgebra::DVector::from_column_slice(u);
        (v.transpose() * &cov * &v)[(0, 0)] / v.norm_squared()
    };
    let best = variance(&pca_2d(&store, &[]).unwrap().components[0]);
    for _ in 0..100 {
        let u: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert!(variance(&u) <= best + 1e-12);
    }
}

#[test]
fn rejects_collinear_points() {
    let data: Vec<f64> = (0..10).flat_map(|k| [k as f64, 2.0 * k as f64, 0.0]).collect();
    let store = EmbeddingStore::new((0..10).map(|k| format!("p{k}")).collect(), 3, data).unwrap();
    assert!(pca_2d(&store, &[]).is_err());
}

#[test]
fn projected_coordinates_are_centered() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let store = random_store(&mut rng, 50, 5, &[1.0, 3.0, 0.5]);
    let p = pca_2d(&store, &[]).unwrap();
    let (sx, sy) = p
        .points
        .iter()
        .fold((0.0, 0.0), |(a, b), (_, x, y)| (a + x, b + y));
    assert!(sx.abs() < 1e-10 && sy.abs() < 1e-10);
}
