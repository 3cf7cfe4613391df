//! Reverse-mode gradients of every op in the closed set, checked against
//! central finite differences on random inputs.

use tmdlab::graph::{finite_diff_gradient, OpKind, ValueGraph};
use tmdlab::rng::StreamRng;
use tmdlab::tensor::Tensor;

const REL_TOL: f64 = 1e-4;
const ABS_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;

/// Input tensors for one op draw. Reciprocal inputs stay away from zero;
/// everything else is uniform in [-2, 2].
fn draw_inputs(kind: OpKind, rng: &mut StreamRng) -> Vec<Tensor> {
    let mut uniform = |shape: Vec<usize>| {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap()
    };
    match kind {
        OpKind::Add | OpKind::Sub | OpKind::Hadamard => {
            vec![uniform(vec![3, 2]), uniform(vec![3, 2])]
        }
        OpKind::ScalarMul => vec![uniform(vec![]), uniform(vec![3, 2])],
        OpKind::MatMul => vec![uniform(vec![3, 2]), uniform(vec![2, 4])],
        OpKind::Reciprocal => {
            let data: Vec<f64> = (0..6)
                .map(|_| {
                    let sign = if rng.below(2) == 0 { -1.0 } else { 1.0 };
                    sign * rng.uniform(0.5, 2.5)
                })
                .collect();
            vec![Tensor::new(vec![3, 2], data).unwrap()]
        }
        OpKind::RowSum | OpKind::DiagLeftScale | OpKind::DiagRightScale => match kind {
            OpKind::DiagLeftScale => vec![uniform(vec![3]), uniform(vec![3, 4])],
            OpKind::DiagRightScale => vec![uniform(vec![3, 4]), uniform(vec![4])],
            _ => vec![uniform(vec![3, 4])],
        },
        OpKind::PairwiseSqDist => vec![uniform(vec![4, 3])],
        _ => vec![uniform(vec![3, 2])],
    }
}

/// loss = sum(square(op(inputs))): non-uniform upstream adjoints.
fn loss_of(kind: OpKind, inputs: &[Tensor]) -> f64 {
    let mut g = ValueGraph::new();
    let ids: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = g.record(kind, &ids).unwrap();
    let sq = g.square(out).unwrap();
    let loss = g.sum(sq).unwrap();
    g.value(loss).item()
}

fn check_op(kind: OpKind, seed: u64) {
    let mut rng = StreamRng::new(seed, &format!("opgrad-{}", kind.name()));
    let inputs = draw_inputs(kind, &mut rng);

    let mut g = ValueGraph::new();
    let ids: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = g.record(kind, &ids).unwrap();
    let sq = g.square(out).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();

    for (slot, id) in ids.iter().enumerate() {
        let ad = grads.get(*id).unwrap();
        let fd = finite_diff_gradient(
            |theta: &Tensor| {
                let mut modified: Vec<Tensor> = inputs.clone();
                modified[slot] = theta.clone();
                Ok(loss_of(kind, &modified))
            },
            &inputs[slot],
            FD_STEP,
        )
        .unwrap();
        for (a, b) in ad.data().iter().zip(fd.data()) {
            let diff = (a - b).abs();
            let ok = diff <= ABS_TOL || diff <= REL_TOL * a.abs().max(b.abs());
            assert!(
                ok,
                "{} input {} seed {}: reverse {} vs fd {}",
                kind.name(),
                slot,
                seed,
                a,
                b
            );
        }
    }
}

#[test]
fn every_op_matches_finite_differences_over_ten_seeds() {
    for kind in OpKind::ALL {
        for seed in 0..10 {
            check_op(kind, seed);
        }
    }
}

/// One graph touching all seventeen ops: backward terminates, is
/// repeatable, and its gradient for the root leaf matches finite
/// differences end to end.
#[test]
fn full_op_coverage_graph_backward() {
    fn build(x: &Tensor) -> (ValueGraph, tmdlab::graph::NodeId, tmdlab::graph::NodeId) {
        let mut g = ValueGraph::new();
        let x = g.leaf(x.clone());
        let d = g.pairwise_sq_dist(x).unwrap();
        let nd = g.neg(d).unwrap();
        let k = g.exp(nd).unwrap();
        let q = g.row_sum(k).unwrap();
        let qi = g.reciprocal(q).unwrap();
        let p = g.diag_left_scale(qi, k).unwrap();
        let pr = g.diag_right_scale(p, q).unwrap();
        let prod = g.matmul(pr, x).unwrap();
        let had = g.hadamard(prod, x).unwrap();
        let shifted = g.sub(had, x).unwrap();
        let doubled = g.add(shifted, shifted).unwrap();
        let r = g.relu(doubled).unwrap();
        let sp = g.softplus(r).unwrap();
        let sq = g.square(sp).unwrap();
        let s = g.sum(sq).unwrap();
        let mn = g.mean(sq).unwrap();
        let total = g.add(s, mn).unwrap();
        let scale = g.constant(Tensor::scalar(0.25).unwrap());
        let loss = g.scalar_mul(scale, total).unwrap();
        (g, x, loss)
    }

    let x = Tensor::matrix(3, 2, vec![0.4, -0.9, 1.3, 0.2, -0.6, 0.8]).unwrap();
    let (g, xid, loss) = build(&x);
    let grads1 = g.backward(loss).unwrap();
    let grads2 = g.backward(loss).unwrap();
    assert!(grads1.get(xid).unwrap().bit_eq(grads2.get(xid).unwrap()));

    let fd = finite_diff_gradient(
        |theta: &Tensor| {
            let (g, _, loss) = build(theta);
            Ok(g.value(loss).item())
        },
        &x,
        FD_STEP,
    )
    .unwrap();
    for (a, b) in grads1.get(xid).unwrap().data().iter().zip(fd.data()) {
        let diff = (a - b).abs();
        assert!(
            diff <= ABS_TOL || diff <= REL_TOL * a.abs().max(b.abs()),
            "coverage graph: reverse {a} vs fd {b}"
        );
    }
}
