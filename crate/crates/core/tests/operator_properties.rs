//! Property tests for the kernel matrix and the generator estimate:
//! structure (row sums, signs, constant annihilation), symmetry, and
//! permutation equivariance on random batches.

use proptest::prelude::*;
use tmdlab::kernel::{gaussian_kernel, kde, median_heuristic};
use tmdlab::operator::{apply_generator, build_tmd_operator};
use tmdlab::params::{ParamStore, Recorder};
use tmdlab::tensor::Tensor;

#[derive(Debug, Clone)]
struct Batch {
    rows: Vec<Vec<f64>>,
    pi: Vec<f64>,
}

fn batch_strategy() -> impl Strategy<Value = Batch> {
    (1usize..=12, 1usize..=4).prop_flat_map(|(m, n)| {
        let rows = prop::collection::vec(
            prop::collection::vec(-2.0f64..2.0, n..=n),
            m..=m,
        );
        let pi = prop::collection::vec(0.05f64..20.0, m..=m);
        (rows, pi).prop_map(|(rows, pi)| Batch { rows, pi })
    })
}

fn build_l(batch: &Batch, epsilon: f64) -> Tensor {
    let store = ParamStore::new();
    let mut rec = Recorder::new(&store);
    let x = rec.constant(Tensor::from_rows(&batch.rows).unwrap());
    let kernel = gaussian_kernel(&mut rec.graph, x, epsilon).unwrap();
    let q = kde(&mut rec.graph, kernel).unwrap();
    let pi = rec.constant(Tensor::vector(batch.pi.clone()).unwrap());
    let op = build_tmd_operator(&mut rec.graph, kernel, q, pi, epsilon).unwrap();
    let ones = rec.constant(Tensor::filled(vec![batch.rows.len(), 1], 1.0).unwrap());
    let annihilated = apply_generator(&mut rec.graph, &op, ones).unwrap();
    for v in rec.graph.value(annihilated).data() {
        assert!(v.abs() <= 1e-10, "constant not annihilated: {v}");
    }
    rec.graph.value(op.l).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn operator_structure_holds(batch in batch_strategy()) {
        let latent = Tensor::from_rows(&batch.rows).unwrap();
        let epsilon = median_heuristic(&latent);
        let l = build_l(&batch, epsilon);
        let m = batch.rows.len();
        for i in 0..m {
            let row_sum: f64 = l.row(i).iter().sum();
            prop_assert!(row_sum.abs() <= 1e-10, "row {i} sums to {row_sum}");
            prop_assert!(l.at(i, i) <= 0.0, "positive diagonal at {i}");
            for j in 0..m {
                if i != j {
                    prop_assert!(l.at(i, j) >= 0.0, "negative off-diagonal at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn operator_is_permutation_equivariant(batch in batch_strategy(), perm_seed in 0u64..1000) {
        let m = batch.rows.len();
        let latent = Tensor::from_rows(&batch.rows).unwrap();
        let epsilon = median_heuristic(&latent);
        let l = build_l(&batch, epsilon);

        let mut perm: Vec<usize> = (0..m).collect();
        let mut rng = tmdlab::rng::StreamRng::new(perm_seed, "perm");
        rng.shuffle(&mut perm);
        let permuted = Batch {
            rows: perm.iter().map(|&i| batch.rows[i].clone()).collect(),
            pi: perm.iter().map(|&i| batch.pi[i]).collect(),
        };
        let lp = build_l(&permuted, epsilon);
        for i in 0..m {
            for j in 0..m {
                let diff = (lp.at(i, j) - l.at(perm[i], perm[j])).abs();
                prop_assert!(diff <= 1e-12, "equivariance violated at ({i},{j}): {diff}");
            }
        }
    }

    #[test]
    fn kernel_is_symmetric_with_unit_diagonal(batch in batch_strategy(), eps in 0.1f64..2.0) {
        let store = ParamStore::new();
        let mut rec = Recorder::new(&store);
        let x = rec.constant(Tensor::from_rows(&batch.rows).unwrap());
        let kernel = gaussian_kernel(&mut rec.graph, x, eps).unwrap();
        let k = rec.graph.value(kernel);
        let m = batch.rows.len();
        for i in 0..m {
            prop_assert_eq!(k.at(i, i), 1.0);
            for j in 0..m {
                prop_assert_eq!(k.at(i, j).to_bits(), k.at(j, i).to_bits());
                prop_assert!(k.at(i, j) > 0.0 && k.at(i, j) <= 1.0);
            }
        }
    }
}
