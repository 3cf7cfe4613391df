//! The generator-correction layer.
//!
//! Wraps an arbitrary recorded layer function f and returns
//! `f(X) + dt * L f(X)`: a first-order step of the batch features along
//! the estimated diffusion. The bandwidth projection, the density head and
//! the step size dt are all trainable; gradients flow through the whole
//! operator construction, not just through f.

use crate::error::{Error, Result};
use crate::kernel::{gaussian_kernel, kde, project, resolve_epsilon, EpsilonPolicy, KernelConfig};
use crate::operator::{apply_generator, build_tmd_operator, target_density, DensityHead, TmdOperator};
use crate::params::{ParamId, ParamStore, Recorder};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

pub use crate::graph::NodeId;

/// Which features the kernel (and density head) see: the batch handed to
/// the layer, or the wrapped function's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelSource {
    InputFeatures,
    OutputFeatures,
}

/// Trainable state of one correction layer.
#[derive(Debug, Clone)]
pub struct TmdLayerParams {
    pub kernel: KernelConfig,
    pub head: DensityHead,
    pub delta_t: ParamId,
    /// When set, dt enters the graph as a constant and stays fixed.
    pub freeze_delta_t: bool,
    pub kernel_source: KernelSource,
}

#[derive(Debug, Clone, Copy)]
pub enum HeadKind {
    Linear,
    Mlp { hidden: usize },
}

impl TmdLayerParams {
    /// Fresh layer state. The projection starts at random Gaussian weights
    /// scaled by 1/sqrt(dim); the head starts at zero (uniform target
    /// density); dt starts at exactly zero so the layer initially passes
    /// f(X) through unchanged.
    pub fn init(
        store: &mut ParamStore,
        rng: &mut StreamRng,
        prefix: &str,
        feature_dim: usize,
        latent_dim: usize,
        epsilon: EpsilonPolicy,
        head: HeadKind,
        kernel_source: KernelSource,
    ) -> Self {
        let scale = 1.0 / (feature_dim as f64).sqrt();
        let proj_data: Vec<f64> = (0..feature_dim * latent_dim)
            .map(|_| rng.normal(0.0, scale))
            .collect();
        let projection = store.insert(
            &format!("{prefix}.projection"),
            Tensor::matrix(feature_dim, latent_dim, proj_data).expect("finite init"),
        );
        let head = match head {
            HeadKind::Linear => DensityHead::Linear {
                weight: store.insert(&format!("{prefix}.head.weight"), Tensor::zeros(vec![feature_dim, 1])),
                bias: store.insert(&format!("{prefix}.head.bias"), Tensor::zeros(vec![1, 1])),
            },
            HeadKind::Mlp { hidden } => DensityHead::Mlp {
                w1: store.insert(
                    &format!("{prefix}.head.w1"),
                    Tensor::matrix(
                        feature_dim,
                        hidden,
                        (0..feature_dim * hidden).map(|_| rng.normal(0.0, scale)).collect(),
                    )
                    .expect("finite init"),
                ),
                b1: store.insert(&format!("{prefix}.head.b1"), Tensor::zeros(vec![1, hidden])),
                w2: store.insert(&format!("{prefix}.head.w2"), Tensor::zeros(vec![hidden, 1])),
                b2: store.insert(&format!("{prefix}.head.b2"), Tensor::zeros(vec![1, 1])),
            },
        };
        let delta_t = store.insert(&format!("{prefix}.delta_t"), Tensor::scalar(0.0).expect("finite"));
        TmdLayerParams {
            kernel: KernelConfig { epsilon, latent_dim, projection },
            head,
            delta_t,
            freeze_delta_t: false,
            kernel_source,
        }
    }
}

/// A recorded, differentiable map taking one feature row per input row.
pub trait LayerFunction {
    fn apply(&self, rec: &mut Recorder, x: NodeId) -> Result<NodeId>;
}

impl<F> LayerFunction for F
where
    F: Fn(&mut Recorder, NodeId) -> Result<NodeId>,
{
    fn apply(&self, rec: &mut Recorder, x: NodeId) -> Result<NodeId> {
        self(rec, x)
    }
}

/// Forward pass returning the output node and, when a correction was
/// actually built, the operator with its intermediates.
pub fn tmd_forward_detailed(
    rec: &mut Recorder,
    f: &dyn LayerFunction,
    x: NodeId,
    params: &TmdLayerParams,
) -> Result<(NodeId, Option<TmdOperator>)> {
    let xv = rec.graph.value(x);
    if xv.rank() != 2 || xv.rows() == 0 {
        return Err(Error::ShapeMismatch {
            op: "tmd_forward",
            detail: format!("batch must be a nonempty rank-2 tensor, got {:?}", xv.shape()),
        });
    }
    let m = xv.rows();

    let f_x = f.apply(rec, x)?;
    let fv = rec.graph.value(f_x);
    if fv.rank() != 2 || fv.rows() != m {
        return Err(Error::RowCountMismatch {
            expected: m,
            got: if fv.rank() == 2 { fv.rows() } else { fv.numel() },
        });
    }

    // A single point has no neighbors: the generator is identically zero
    // and the correction vanishes for every parameter value.
    if m == 1 {
        return Ok((f_x, None));
    }

    let source = match params.kernel_source {
        KernelSource::InputFeatures => x,
        KernelSource::OutputFeatures => f_x,
    };
    let proj = rec.param(params.kernel.projection);
    let latent = project(&mut rec.graph, source, proj)?;
    let epsilon = resolve_epsilon(params.kernel.epsilon, rec.graph.value(latent))?;
    let kernel = gaussian_kernel(&mut rec.graph, latent, epsilon)?;
    let q = kde(&mut rec.graph, kernel)?;
    let pi_sqrt = target_density(rec, &params.head, source)?;
    let op = build_tmd_operator(&mut rec.graph, kernel, q, pi_sqrt, epsilon)?;

    let correction = apply_generator(&mut rec.graph, &op, f_x)?;
    let dt = if params.freeze_delta_t {
        rec.frozen(params.delta_t)
    } else {
        rec.param(params.delta_t)
    };
    let scaled = rec.graph.scalar_mul(dt, correction)?;
    let out = rec.graph.add(f_x, scaled)?;
    Ok((out, Some(op)))
}

/// f(X) + dt * L f(X). For m = 1 the output is f(X) exactly.
pub fn tmd_forward(
    rec: &mut Recorder,
    f: &dyn LayerFunction,
    x: NodeId,
    params: &TmdLayerParams,
) -> Result<NodeId> {
    tmd_forward_detailed(rec, f, x, params).map(|(out, _)| out)
}

/// A node-update function with the correction baked in: the returned layer
/// builds L over all rows of whatever batch it is applied to, so stacked
/// wrapped layers re-estimate the generator layer by layer.
pub struct WrappedNodeUpdate<F: LayerFunction> {
    inner: F,
    params: TmdLayerParams,
}

pub fn wrap_node_update<F: LayerFunction>(f: F, params: TmdLayerParams) -> WrappedNodeUpdate<F> {
    WrappedNodeUpdate { inner: f, params }
}

impl<F: LayerFunction> LayerFunction for WrappedNodeUpdate<F> {
    fn apply(&self, rec: &mut Recorder, x: NodeId) -> Result<NodeId> {
        tmd_forward(rec, &self.inner, x, &self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_layer() -> impl LayerFunction {
        |_: &mut Recorder, x: NodeId| Ok(x)
    }

    fn fixed_params(store: &mut ParamStore, dim: usize, epsilon: f64, dt: f64) -> TmdLayerParams {
        let projection = store.insert("layer.projection", Tensor::eye(dim));
        let delta_t = store.insert("layer.delta_t", Tensor::scalar(dt).unwrap());
        TmdLayerParams {
            kernel: KernelConfig {
                epsilon: EpsilonPolicy::Fixed(epsilon),
                latent_dim: dim,
                projection,
            },
            head: DensityHead::Uniform,
            delta_t,
            freeze_delta_t: false,
            kernel_source: KernelSource::InputFeatures,
        }
    }

    #[test]
    fn single_point_passes_f_through_exactly() {
        let mut store = ParamStore::new();
        let params = fixed_params(&mut store, 1, 0.5, 3.7);
        let mut rec = Recorder::new(&store);
        let x = rec.constant(Tensor::matrix(1, 1, vec![0.42]).unwrap());
        let f = identity_layer();
        let out = tmd_forward(&mut rec, &f, x, &params).unwrap();
        assert!(rec.graph.value(out).bit_eq(rec.graph.value(x)));
    }

    #[test]
    fn zero_dt_passes_f_through_exactly() {
        let mut store = ParamStore::new();
        let params = fixed_params(&mut store, 2, 0.5, 0.0);
        let mut rec = Recorder::new(&store);
        let x = rec.constant(
            Tensor::matrix(3, 2, vec![0.3, -0.7, 1.1, 0.2, -0.4, 0.9]).unwrap(),
        );
        let f = identity_layer();
        let (out, op) = tmd_forward_detailed(&mut rec, &f, x, &params).unwrap();
        assert!(op.is_some());
        assert!(rec.graph.value(out).bit_eq(rec.graph.value(x)));
    }

    #[test]
    fn hand_computed_two_point_forward() {
        // Points 0 and 2 with eps = 1 give kernel value a = e^-1 and
        // L = (a/(1+a)) [[-1,1],[1,-1]]. A layer returning F = (0,1)^T with
        // dt = 1 must produce (b, 1-b) with b = 1/(1+e).
        let mut store = ParamStore::new();
        let params = fixed_params(&mut store, 1, 1.0, 1.0);
        let mut rec = Recorder::new(&store);
        let x = rec.constant(Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap());
        let half = rec.constant(Tensor::matrix(1, 1, vec![0.5]).unwrap());
        let f = move |rec: &mut Recorder, x: NodeId| rec.graph.matmul(x, half);
        let out = tmd_forward(&mut rec, &f, x, &params).unwrap();
        let b = 1.0 / (1.0 + std::f64::consts::E);
        let v = rec.graph.value(out);
        assert!((v.at(0, 0) - b).abs() < 1e-12, "{}", v.at(0, 0));
        assert!((v.at(1, 0) - (1.0 - b)).abs() < 1e-12, "{}", v.at(1, 0));
    }

    #[test]
    fn output_is_linear_in_the_wrapped_function() {
        // Doubling f doubles the output exactly when the kernel is built
        // from the input features (power-of-two scaling is lossless).
        let mut store = ParamStore::new();
        let params = fixed_params(&mut store, 1, 1.0, 0.8);
        store.set(params.delta_t, Tensor::scalar(0.8).unwrap());

        let run = |scale: f64, store: &ParamStore, params: &TmdLayerParams| {
            let mut rec = Recorder::new(store);
            let x = rec.constant(Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap());
            let w = rec.constant(Tensor::matrix(1, 1, vec![0.5 * scale]).unwrap());
            let f = move |rec: &mut Recorder, x: NodeId| rec.graph.matmul(x, w);
            let out = tmd_forward(&mut rec, &f, x, params).unwrap();
            rec.graph.value(out).clone()
        };
        let once = run(1.0, &store, &params);
        let twice = run(2.0, &store, &params);
        let doubled = Tensor::new(
            once.shape().to_vec(),
            once.data().iter().map(|v| 2.0 * v).collect(),
        )
        .unwrap();
        assert!(twice.bit_eq(&doubled));
    }

    #[test]
    fn output_depends_on_companion_points() {
        let mut store = ParamStore::new();
        let params = fixed_params(&mut store, 1, 0.7, 0.5);
        let run = |companion: f64| {
            let mut rec = Recorder::new(&store);
            let x = rec.constant(Tensor::matrix(2, 1, vec![0.1, companion]).unwrap());
            let f = identity_layer();
            let out = tmd_forward(&mut rec, &f, x, &params).unwrap();
            rec.graph.value(out).at(0, 0)
        };
        assert_ne!(run(0.9), run(1.7));
    }

    #[test]
    fn row_count_change_is_rejected() {
        let mut store = ParamStore::new();
        let params = fixed_params(&mut store, 1, 0.5, 0.1);
        let mut rec = Recorder::new(&store);
        let x = rec.constant(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap());
        let f = |rec: &mut Recorder, _x: NodeId| {
            Ok(rec.constant(Tensor::matrix(3, 1, vec![0.0, 1.0, 2.0]).unwrap()))
        };
        assert!(matches!(
            tmd_forward(&mut rec, &f, x, &params),
            Err(Error::RowCountMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn wrapped_identity_with_zero_dt_is_identity() {
        let mut store = ParamStore::new();
        let params = fixed_params(&mut store, 1, 0.5, 0.0);
        let wrapped = wrap_node_update(identity_layer(), params);
        let mut rec = Recorder::new(&store);
        let x = rec.constant(Tensor::matrix(3, 1, vec![0.2, -0.5, 1.0]).unwrap());
        let out = wrapped.apply(&mut rec, x).unwrap();
        assert!(rec.graph.value(out).bit_eq(rec.graph.value(x)));
    }

    #[test]
    fn wrapping_respects_linearity_of_the_update() {
        // f(v) = 2v on the two-point hand case equals 2x applied through
        // the same correction, by linearity of L.
        let mut store = ParamStore::new();
        let params = fixed_params(&mut store, 1, 1.0, 1.0);

        let doubled_out = {
            let mut rec = Recorder::new(&store);
            let x = rec.constant(Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap());
            let two = rec.constant(Tensor::matrix(1, 1, vec![2.0]).unwrap());
            let f = move |rec: &mut Recorder, v: NodeId| rec.graph.matmul(v, two);
            let wrapped = wrap_node_update(f, params.clone());
            let out = wrapped.apply(&mut rec, x).unwrap();
            rec.graph.value(out).clone()
        };
        let identity_out = {
            let mut rec = Recorder::new(&store);
            let x = rec.constant(Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap());
            let wrapped = wrap_node_update(identity_layer(), params);
            let out = wrapped.apply(&mut rec, x).unwrap();
            rec.graph.value(out).clone()
        };
        for (a, b) in doubled_out.data().iter().zip(identity_out.data()) {
            assert_eq!(a.to_bits(), (2.0 * b).to_bits());
        }
    }

    #[test]
    fn stacked_wrapped_layers_compose_sequentially() {
        let mut store = ParamStore::new();
        let params = fixed_params(&mut store, 1, 0.9, 0.3);

        let composed = {
            let mut rec = Recorder::new(&store);
            let x = rec.constant(Tensor::matrix(3, 1, vec![0.0, 0.5, 1.5]).unwrap());
            let l1 = wrap_node_update(identity_layer(), params.clone());
            let l2 = wrap_node_update(identity_layer(), params.clone());
            let mid = l1.apply(&mut rec, x).unwrap();
            let out = l2.apply(&mut rec, mid).unwrap();
            rec.graph.value(out).clone()
        };
        let sequential = {
            let mut rec = Recorder::new(&store);
            let x = rec.constant(Tensor::matrix(3, 1, vec![0.0, 0.5, 1.5]).unwrap());
            let f = identity_layer();
            let mid = tmd_forward(&mut rec, &f, x, &params).unwrap();
            let mid_const = {
                let v = rec.graph.value(mid).clone();
                rec.constant(v)
            };
            let out = tmd_forward(&mut rec, &f, mid_const, &params).unwrap();
            rec.graph.value(out).clone()
        };
        assert!(composed.bit_eq(&sequential));
    }

    #[test]
    fn gradients_reach_every_parameter_group() {
        let mut store = ParamStore::new();
        let mut rng = StreamRng::new(4, "layer-init");
        let params = TmdLayerParams::init(
            &mut store,
            &mut rng,
            "layer",
            2,
            2,
            EpsilonPolicy::Fixed(0.6),
            HeadKind::Linear,
            KernelSource::InputFeatures,
        );
        // Move dt off zero so operator gradients propagate.
        store.set(params.delta_t, Tensor::scalar(0.3).unwrap());
        // Nonzero head weights so the density actually varies.
        if let DensityHead::Linear { weight, .. } = params.head {
            store.set(weight, Tensor::matrix(2, 1, vec![0.4, -0.2]).unwrap());
        }

        let mut rec = Recorder::new(&store);
        let x = rec.graph.leaf(
            Tensor::matrix(4, 2, vec![0.3, -0.7, 1.1, 0.2, -0.4, 0.9, 0.05, -1.3]).unwrap(),
        );
        let f = identity_layer();
        let out = tmd_forward(&mut rec, &f, x, &params).unwrap();
        let sq = rec.graph.square(out).unwrap();
        let loss = rec.graph.mean(sq).unwrap();
        let grads = rec.parameter_gradients(loss).unwrap();

        for (id, name, _) in store.iter() {
            let g = &grads[id.index()];
            let nonzero = g.data().iter().any(|v| *v != 0.0);
            assert!(nonzero, "gradient of {name} is identically zero");
        }

        let input_grad = rec.graph.backward(loss).unwrap();
        assert!(input_grad.get(x).unwrap().data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn frozen_dt_receives_no_gradient() {
        let mut store = ParamStore::new();
        let mut params = fixed_params(&mut store, 1, 0.5, 0.4);
        params.freeze_delta_t = true;
        let mut rec = Recorder::new(&store);
        let x = rec.constant(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap());
        let f = identity_layer();
        let out = tmd_forward(&mut rec, &f, x, &params).unwrap();
        let loss = rec.graph.mean(out).unwrap();
        let grads = rec.parameter_gradients(loss).unwrap();
        assert_eq!(grads[params.delta_t.index()].data(), &[0.0]);
    }
}
