//! Small building blocks shared by the models: linear maps, the
//! one-vs-rest logistic loss, and initializers.
//!
//! Bias addition is expressed inside the closed op set as
//! `ones(m,1) x bias(1,k)`, which broadcasts the bias row over the batch
//! and routes its gradient through the matmul rule.

use crate::error::Result;
use crate::graph::NodeId;
use crate::params::{ParamId, ParamStore, Recorder};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl LinearParams {
    /// Weight entries drawn from N(0, 1/in_dim), bias zero.
    pub fn init(
        store: &mut ParamStore,
        rng: &mut StreamRng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
    ) -> Self {
        let scale = 1.0 / (in_dim as f64).sqrt();
        let data: Vec<f64> = (0..in_dim * out_dim).map(|_| rng.normal(0.0, scale)).collect();
        let weight = store.insert(
            &format!("{name}.weight"),
            Tensor::matrix(in_dim, out_dim, data).expect("finite init"),
        );
        let bias = with_bias
            .then(|| store.insert(&format!("{name}.bias"), Tensor::zeros(vec![1, out_dim])));
        LinearParams { weight, bias }
    }
}

/// x (m,in) -> x W + 1 b, shape (m,out).
pub fn linear(rec: &mut Recorder, x: NodeId, lin: &LinearParams) -> Result<NodeId> {
    let w = rec.param(lin.weight);
    let xw = rec.graph.matmul(x, w)?;
    match lin.bias {
        None => Ok(xw),
        Some(bias) => {
            let m = rec.graph.value(x).rows();
            let ones = rec.constant(Tensor::filled(vec![m, 1], 1.0).expect("finite"));
            let b = rec.param(bias);
            let broadcast = rec.graph.matmul(ones, b)?;
            rec.graph.add(xw, broadcast)
        }
    }
}

/// One-vs-rest logistic loss: mean over all (sample, class) cells of
/// softplus(-s * z), where s is +1 for the true class and -1 otherwise.
/// Stays finite for any logit magnitude.
pub fn ovr_logistic_loss(rec: &mut Recorder, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (m, c) = {
        let t = rec.graph.value(logits);
        (t.rows(), t.cols())
    };
    assert_eq!(labels.len(), m);
    let mut signs = vec![-1.0; m * c];
    for (i, y) in labels.iter().enumerate() {
        signs[i * c + y] = 1.0;
    }
    let s = rec.constant(Tensor::matrix(m, c, signs).expect("finite"));
    let margins = rec.graph.hadamard(logits, s)?;
    let neg = rec.graph.neg(margins)?;
    let sp = rec.graph.softplus(neg)?;
    rec.graph.mean(sp)
}

/// Index of the largest logit per row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(predictions.len(), labels.len());
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_bias_broadcasts_over_rows() {
        let mut store = ParamStore::new();
        let mut rng = StreamRng::new(0, "t");
        let lin = LinearParams::init(&mut store, &mut rng, "l", 2, 3, true);
        store.set(lin.weight, Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        store.set(lin.bias.unwrap(), Tensor::matrix(1, 3, vec![10.0, 20.0, 30.0]).unwrap());

        let mut rec = Recorder::new(&store);
        let x = rec.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = linear(&mut rec, x, &lin).unwrap();
        assert_eq!(
            rec.graph.value(y).data(),
            &[11.0, 22.0, 30.0, 13.0, 24.0, 30.0]
        );
    }

    #[test]
    fn loss_prefers_correct_logits() {
        let store = ParamStore::new();
        let mut rec = Recorder::new(&store);
        let good = rec.constant(Tensor::matrix(1, 2, vec![5.0, -5.0]).unwrap());
        let bad = rec.constant(Tensor::matrix(1, 2, vec![-5.0, 5.0]).unwrap());
        let lg = ovr_logistic_loss(&mut rec, good, &[0]).unwrap();
        let lb = ovr_logistic_loss(&mut rec, bad, &[0]).unwrap();
        assert!(rec.graph.value(lg).item() < rec.graph.value(lb).item());
    }

    #[test]
    fn argmax_and_accuracy() {
        let logits = Tensor::matrix(2, 3, vec![0.1, 0.9, 0.0, 2.0, -1.0, 1.0]).unwrap();
        assert_eq!(argmax_rows(&logits), vec![1, 0]);
        assert_eq!(accuracy(&[1, 0], &[1, 1]), 0.5);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
