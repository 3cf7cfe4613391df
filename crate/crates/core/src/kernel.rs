//! Gaussian kernel matrices and kernel density estimates.
//!
//! The kernel is evaluated on latent features obtained by a learnable
//! linear projection of the batch, k(x, y) = exp(-|x - y|^2 / (4 eps)).
//! Squared distances use the |x|^2 + |y|^2 - 2<x,y> expansion with tiny
//! cancellation negatives clamped to zero, so the matrix is exactly
//! symmetric with a unit diagonal.

use crate::error::{Error, Result};
use crate::graph::{NodeId, ValueGraph};
use crate::nn::median;
use crate::params::ParamId;
use crate::tensor::Tensor;

/// A batch of m points with N features each; rows are points.
#[derive(Debug, Clone)]
pub struct PointBatch(Tensor);

impl PointBatch {
    pub fn new(points: Tensor) -> Result<Self> {
        if points.rank() != 2 || points.rows() == 0 || points.cols() == 0 {
            return Err(Error::ShapeMismatch {
                op: "point_batch",
                detail: format!("need an m x N matrix with m, N >= 1, got {:?}", points.shape()),
            });
        }
        Ok(PointBatch(points))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        PointBatch::new(Tensor::from_rows(rows)?)
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires m >= 1
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }
}

/// How the kernel bandwidth is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpsilonPolicy {
    Fixed(f64),
    /// Median of the nonzero pairwise squared distances of the current
    /// latent batch, divided by 4. Recomputed per batch as a detached
    /// statistic; gradients never flow through the bandwidth.
    MedianPerBatch,
    /// The median heuristic times a fixed factor; factors below one make
    /// the kernel more selective than the default.
    ScaledMedian(f64),
}

/// Kernel construction settings: bandwidth policy, latent dimension, and
/// the learnable projection applied before kernel evaluation.
#[derive(Debug, Clone, Copy)]
pub struct KernelConfig {
    pub epsilon: EpsilonPolicy,
    pub latent_dim: usize,
    pub projection: ParamId,
}

/// Latent features: batch (m,N) x projection (N,h) -> (m,h). The
/// projection is a plain linear map without bias.
pub fn project(g: &mut ValueGraph, batch: NodeId, projection: NodeId) -> Result<NodeId> {
    g.matmul(batch, projection)
}

/// Kernel matrix on latent rows: symmetric, unit diagonal, entries in
/// (0, 1].
pub fn gaussian_kernel(g: &mut ValueGraph, latent: NodeId, epsilon: f64) -> Result<NodeId> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidBandwidth { epsilon });
    }
    let dist = g.pairwise_sq_dist(latent)?;
    let scale = g.constant(Tensor::scalar(-1.0 / (4.0 * epsilon)).expect("finite"));
    let scaled = g.scalar_mul(scale, dist)?;
    g.exp(scaled)
}

/// Kernel density estimate: q_i = sum_j K_ij. Every q_i >= 1 because the
/// diagonal contributes exactly 1.
pub fn kde(g: &mut ValueGraph, kernel: NodeId) -> Result<NodeId> {
    g.row_sum(kernel)
}

/// Default bandwidth: median of the nonzero pairwise squared distances
/// divided by 4. Falls back to 1.0 when every distance is zero (single
/// point or fully duplicated batch).
pub fn median_heuristic(latent: &Tensor) -> f64 {
    debug_assert_eq!(latent.rank(), 2);
    let m = latent.rows();
    let k = latent.cols();
    let mut dists = Vec::with_capacity(m * (m.saturating_sub(1)) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            let mut d = 0.0;
            for c in 0..k {
                let diff = latent.at(i, c) - latent.at(j, c);
                d += diff * diff;
            }
            if d > 0.0 {
                dists.push(d);
            }
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    median(&mut dists) / 4.0
}

pub fn resolve_epsilon(policy: EpsilonPolicy, latent: &Tensor) -> Result<f64> {
    match policy {
        EpsilonPolicy::Fixed(e) => {
            if !(e > 0.0) || !e.is_finite() {
                return Err(Error::InvalidBandwidth { epsilon: e });
            }
            Ok(e)
        }
        EpsilonPolicy::MedianPerBatch => Ok(median_heuristic(latent)),
        EpsilonPolicy::ScaledMedian(factor) => {
            if !(factor > 0.0) || !factor.is_finite() {
                return Err(Error::InvalidBandwidth { epsilon: factor });
            }
            Ok(factor * median_heuristic(latent))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    fn random_batch(rng: &mut StreamRng, m: usize, n: usize) -> Tensor {
        Tensor::matrix(m, n, (0..m * n).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap()
    }

    #[test]
    fn identity_projection_is_identity() {
        let mut g = ValueGraph::new();
        let x = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = g.constant(Tensor::eye(2));
        let latent = project(&mut g, x, p).unwrap();
        assert_eq!(g.value(latent), g.value(x));
    }

    #[test]
    fn zero_projection_gives_zero_latent() {
        let mut g = ValueGraph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0; 6]).unwrap());
        let p = g.constant(Tensor::zeros(vec![3, 2]));
        let latent = project(&mut g, x, p).unwrap();
        assert!(g.value(latent).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn projection_matches_triple_loop_oracle() {
        let mut rng = StreamRng::new(5, "proj");
        let x = random_batch(&mut rng, 4, 3);
        let p = random_batch(&mut rng, 3, 2);

        let mut expected = vec![0.0; 4 * 2];
        for i in 0..4 {
            for j in 0..2 {
                for k in 0..3 {
                    expected[i * 2 + j] += x.at(i, k) * p.at(k, j);
                }
            }
        }

        let mut g = ValueGraph::new();
        let xn = g.constant(x);
        let pn = g.constant(p);
        let latent = project(&mut g, xn, pn).unwrap();
        for (a, b) in g.value(latent).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_diagonal_is_exactly_one() {
        let mut rng = StreamRng::new(1, "kdiag");
        let mut g = ValueGraph::new();
        let x = g.constant(random_batch(&mut rng, 5, 3));
        let k = gaussian_kernel(&mut g, x, 0.7).unwrap();
        let kv = g.value(k);
        for i in 0..5 {
            assert_eq!(kv.at(i, i), 1.0);
        }
    }

    #[test]
    fn separation_of_4eps_gives_inverse_e() {
        let mut g = ValueGraph::new();
        // |x - y|^2 = 4 with eps = 1 forces exponent -1.
        let x = g.constant(Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap());
        let k = gaussian_kernel(&mut g, x, 1.0).unwrap();
        let expect = (-1.0f64).exp();
        assert!((g.value(k).at(0, 1) - expect).abs() < 1e-15);
        assert!((g.value(k).at(1, 0) - expect).abs() < 1e-15);
    }

    #[test]
    fn kernel_matches_scalar_loop_oracle() {
        let mut rng = StreamRng::new(9, "korcl");
        let x = random_batch(&mut rng, 3, 2);
        let eps = 0.7;

        let mut g = ValueGraph::new();
        let xn = g.constant(x.clone());
        let k = gaussian_kernel(&mut g, xn, eps).unwrap();
        let kv = g.value(k);

        for i in 0..3 {
            for j in 0..3 {
                let mut d = 0.0;
                for c in 0..2 {
                    let diff = x.at(i, c) - x.at(j, c);
                    d += diff * diff;
                }
                let expect = (-d / (4.0 * eps)).exp();
                assert!((kv.at(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_bandwidth_is_rejected() {
        let mut g = ValueGraph::new();
        let x = g.constant(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap());
        assert!(matches!(
            gaussian_kernel(&mut g, x, 0.0),
            Err(Error::InvalidBandwidth { .. })
        ));
        assert!(matches!(
            gaussian_kernel(&mut g, x, -1.0),
            Err(Error::InvalidBandwidth { .. })
        ));
    }

    #[test]
    fn kde_single_point_is_one() {
        let mut g = ValueGraph::new();
        let x = g.constant(Tensor::matrix(1, 1, vec![0.3]).unwrap());
        let k = gaussian_kernel(&mut g, x, 0.5).unwrap();
        let q = kde(&mut g, k).unwrap();
        assert_eq!(g.value(q).data(), &[1.0]);
    }

    #[test]
    fn kde_of_identical_pair_is_two() {
        let mut g = ValueGraph::new();
        let x = g.constant(Tensor::matrix(2, 2, vec![0.5, -1.0, 0.5, -1.0]).unwrap());
        let k = gaussian_kernel(&mut g, x, 0.5).unwrap();
        let q = kde(&mut g, k).unwrap();
        assert_eq!(g.value(q).data(), &[2.0, 2.0]);
    }

    #[test]
    fn kde_row_sums_by_hand() {
        let mut g = ValueGraph::new();
        let x = g.constant(Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap());
        let k = gaussian_kernel(&mut g, x, 1.0).unwrap();
        let a = (-1.0f64).exp();
        let q = kde(&mut g, k).unwrap();
        assert!((g.value(q).data()[0] - (1.0 + a)).abs() < 1e-15);
        assert!((g.value(q).data()[1] - (1.0 + a)).abs() < 1e-15);
    }

    #[test]
    fn kernel_is_exactly_symmetric_and_grows_with_epsilon() {
        let mut rng = StreamRng::new(12, "ksym");
        for _ in 0..10 {
            let x = random_batch(&mut rng, 6, 3);
            let mut g = ValueGraph::new();
            let xn = g.constant(x);
            let k_small = gaussian_kernel(&mut g, xn, 0.3).unwrap();
            let k_large = gaussian_kernel(&mut g, xn, 0.9).unwrap();
            let (ks, kl) = (g.value(k_small), g.value(k_large));
            for i in 0..6 {
                for j in 0..6 {
                    assert_eq!(ks.at(i, j).to_bits(), ks.at(j, i).to_bits());
                    if i != j {
                        assert!(kl.at(i, j) > ks.at(i, j));
                    }
                }
            }
        }
    }

    #[test]
    fn kernel_is_permutation_equivariant() {
        let mut rng = StreamRng::new(21, "kperm");
        let x = random_batch(&mut rng, 5, 2);
        let perm = [3usize, 0, 4, 1, 2];
        let permuted =
            Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();

        let mut g = ValueGraph::new();
        let xn = g.constant(x);
        let pn = g.constant(permuted);
        let k = gaussian_kernel(&mut g, xn, 0.6).unwrap();
        let kp = gaussian_kernel(&mut g, pn, 0.6).unwrap();
        let (kv, kpv) = (g.value(k), g.value(kp));
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(kpv.at(i, j).to_bits(), kv.at(perm[i], perm[j]).to_bits());
            }
        }
    }

    #[test]
    fn median_heuristic_falls_back_on_degenerate_batches() {
        let single = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert_eq!(median_heuristic(&single), 1.0);
        let dup = Tensor::matrix(3, 1, vec![2.0, 2.0, 2.0]).unwrap();
        assert_eq!(median_heuristic(&dup), 1.0);
    }

    #[test]
    fn median_heuristic_quarter_of_median_distance() {
        // Distances^2: 1 (0-1), 4 (0-2), 1 (1-2) -> median 1, eps 0.25.
        let x = Tensor::matrix(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        assert_eq!(median_heuristic(&x), 0.25);
    }
}
