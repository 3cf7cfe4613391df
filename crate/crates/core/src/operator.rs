//! The target-measure diffusion generator estimate.
//!
//! From a kernel matrix K, a kernel density estimate q, and per-point
//! target density values pi^(1/2), the m x m generator matrix is
//!
//!   D_ii  = pi^(1/2)(x_i) / q(x_i)        (density ratio)
//!   K_pi  = K D                            (right normalization)
//!   Dt_ii = sum_j (K_pi)_ij                (row normalizer)
//!   L     = (1/eps) (Dt^-1 K_pi - I)
//!
//! Dt^-1 K_pi is row stochastic, so L has zero row sums, nonnegative
//! off-diagonal entries and nonpositive diagonal entries, and it
//! annihilates constants. Construction follows Banisch, Trstanova,
//! Bittracher and Schuette, "Diffusion maps tailored to arbitrary
//! non-degenerate Ito processes" (Appl. Comput. Harmon. Anal. 2020);
//! the estimate converges to f |-> laplacian(f) + grad(log pi) . grad(f).

use crate::error::{Error, Result};
use crate::graph::{NodeId, ValueGraph};
use crate::nn::linear;
use crate::params::{ParamId, Recorder};
use crate::report::fmt_g17;
use crate::tensor::Tensor;
use std::io::Write;
use std::rc::Rc;

/// Additive floor applied after the softplus positivity transform, so the
/// density head can never output zero.
pub const DENSITY_FLOOR: f64 = 1e-6;

/// Maps each point to a strictly positive target-density value pi^(1/2).
#[derive(Clone)]
pub enum DensityHead {
    /// pi^(1/2) identically one: plain diffusion-map normalization.
    Uniform,
    /// Evaluate a known density pointwise; enters the graph as a constant
    /// (no gradient). Used to plug in an exact target density.
    Analytic(Rc<dyn Fn(&[f64]) -> f64>),
    /// Learnable linear head composed with softplus and a positive floor.
    Linear { weight: ParamId, bias: ParamId },
    /// Learnable one-hidden-layer head, same positivity transform.
    Mlp {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
}

impl std::fmt::Debug for DensityHead {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DensityHead::Uniform => write!(f, "Uniform"),
            DensityHead::Analytic(_) => write!(f, "Analytic"),
            DensityHead::Linear { .. } => write!(f, "Linear"),
            DensityHead::Mlp { .. } => write!(f, "Mlp"),
        }
    }
}

/// Per-point pi^(1/2) values as a length-m vector node, strictly positive.
pub fn target_density(rec: &mut Recorder, head: &DensityHead, batch: NodeId) -> Result<NodeId> {
    let m = rec.graph.value(batch).rows();
    match head {
        DensityHead::Uniform => Ok(rec.constant(Tensor::filled(vec![m], 1.0).expect("finite"))),
        DensityHead::Analytic(eval) => {
            let values: Vec<f64> = {
                let x = rec.graph.value(batch);
                (0..m).map(|i| eval(x.row(i))).collect()
            };
            if !values.iter().all(|v| v.is_finite() && *v > 0.0) {
                return Err(Error::NonFiniteResult { op: "target_density" });
            }
            Ok(rec.constant(Tensor::new(vec![m], values)?))
        }
        DensityHead::Linear { weight, bias } => {
            let lin = crate::nn::LinearParams { weight: *weight, bias: Some(*bias) };
            let raw = linear(rec, batch, &lin)?; // (m, 1)
            positive_vector(rec, raw)
        }
        DensityHead::Mlp { w1, b1, w2, b2 } => {
            let hidden_lin = crate::nn::LinearParams { weight: *w1, bias: Some(*b1) };
            let h = linear(rec, batch, &hidden_lin)?;
            let h = rec.graph.relu(h)?;
            let out_lin = crate::nn::LinearParams { weight: *w2, bias: Some(*b2) };
            let raw = linear(rec, h, &out_lin)?;
            positive_vector(rec, raw)
        }
    }
}

/// softplus(raw) + floor, collapsed from (m,1) to (m,).
fn positive_vector(rec: &mut Recorder, raw: NodeId) -> Result<NodeId> {
    let sp = rec.graph.softplus(raw)?;
    let shape = rec.graph.value(sp).shape().to_vec();
    let floor = rec.constant(Tensor::filled(shape, DENSITY_FLOOR).expect("finite"));
    let positive = rec.graph.add(sp, floor)?;
    rec.graph.row_sum(positive)
}

/// The generator estimate with its intermediates, all on the graph.
#[derive(Debug, Clone, Copy)]
pub struct TmdOperator {
    /// L, the m x m generator matrix node.
    pub l: NodeId,
    pub epsilon: f64,
    pub batch_size: usize,
    /// D: per-point pi^(1/2)/q ratios (length m).
    pub density_ratio: NodeId,
    /// K_pi = K D.
    pub weighted_kernel: NodeId,
    /// Dt: row sums of K_pi (length m).
    pub normalizer: NodeId,
    /// Dt^-1 K_pi, the row-stochastic matrix.
    pub row_stochastic: NodeId,
}

/// Assemble L from the kernel matrix, the density estimate and the target
/// density values. All four intermediates stay addressable for tests.
pub fn build_tmd_operator(
    g: &mut ValueGraph,
    kernel: NodeId,
    q: NodeId,
    pi_sqrt: NodeId,
    epsilon: f64,
) -> Result<TmdOperator> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidBandwidth { epsilon });
    }
    let m = {
        let k = g.value(kernel);
        if k.rank() != 2 || k.rows() != k.cols() {
            return Err(Error::ShapeMismatch {
                op: "build_tmd_operator",
                detail: format!("kernel must be square, got {:?}", k.shape()),
            });
        }
        k.rows()
    };
    for (node, what) in [(q, "q"), (pi_sqrt, "pi_sqrt")] {
        let v = g.value(node);
        if v.rank() != 1 || v.numel() != m {
            return Err(Error::ShapeMismatch {
                op: "build_tmd_operator",
                detail: format!("{what} must be a length-{m} vector, got {:?}", v.shape()),
            });
        }
    }

    let q_inv = g.reciprocal(q)?;
    let density_ratio = g.hadamard(pi_sqrt, q_inv)?;
    let weighted_kernel = g.diag_right_scale(kernel, density_ratio)?;
    let normalizer = g.row_sum(weighted_kernel)?;
    if let Some(row) = g.value(normalizer).data().iter().position(|v| *v <= 0.0) {
        return Err(Error::DegenerateNormalization { row });
    }
    let normalizer_inv = g.reciprocal(normalizer)?;
    let row_stochastic = g.diag_left_scale(normalizer_inv, weighted_kernel)?;
    let identity = g.constant(Tensor::eye(m));
    let centered = g.sub(row_stochastic, identity)?;
    let inv_eps = g.constant(Tensor::scalar(1.0 / epsilon)?);
    let l = g.scalar_mul(inv_eps, centered)?;

    Ok(TmdOperator {
        l,
        epsilon,
        batch_size: m,
        density_ratio,
        weighted_kernel,
        normalizer,
        row_stochastic,
    })
}

/// L F for a matrix F whose i-th row holds f(x_i).
pub fn apply_generator(g: &mut ValueGraph, op: &TmdOperator, f_values: NodeId) -> Result<NodeId> {
    let fv = g.value(f_values);
    if fv.rank() != 2 || fv.rows() != op.batch_size {
        return Err(Error::ShapeMismatch {
            op: "apply_generator",
            detail: format!("F must have {} rows, got {:?}", op.batch_size, fv.shape()),
        });
    }
    g.matmul(op.l, f_values)
}

/// Debug dump: m, epsilon, then L row-major with 17 significant digits.
pub fn dump_operator(g: &ValueGraph, op: &TmdOperator, w: &mut impl Write) -> Result<()> {
    writeln!(w, "m {}", op.batch_size)?;
    writeln!(w, "epsilon {}", fmt_g17(op.epsilon))?;
    let l = g.value(op.l);
    for i in 0..op.batch_size {
        let row: Vec<String> = l.row(i).iter().map(|v| fmt_g17(*v)).collect();
        writeln!(w, "L {}", row.join(" "))?;
    }
    Ok(())
}
