use crate::scalar::Scalar;

/// Squared Euclidean distance, accumulated in `f64`.
pub fn squared_distance<T: Scalar>(u: &[T], v: &[T]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(a, b)| {
            let d = a.widen() - b.widen();
            d * d
        })
        .sum()
}

/// `exp(-gamma * ||u - v||^2)`.
pub fn rbf_kernel<T: Scalar>(u: &[T], v: &[T], gamma: f64) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    if gamma == 0.0 {
        return 1.0;
    }
    (-gamma * squared_distance(u, v)).exp()
}

/// Dense matrix of pairwise squared distances, row-major `n x n`.
pub(crate) fn distance_matrix(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = squared_distance(&points[i], &points[j]);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}
