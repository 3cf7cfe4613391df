//! Finite-difference verification of reverse-mode gradients through the
//! full correction layer. Shared by the test suite and the CLI.

use crate::error::Result;
use crate::graph::{finite_diff_gradient, NodeId};
use crate::kernel::{EpsilonPolicy, KernelConfig};
use crate::layer::{tmd_forward, KernelSource, LayerFunction, TmdLayerParams};
use crate::nn::{linear, LinearParams};
use crate::operator::DensityHead;
use crate::params::{ParamId, ParamStore, Recorder};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

pub const DEFAULT_FD_STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;
pub const ABS_TOLERANCE: f64 = 1e-6;

/// Result of checking one parameter group in one case.
#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub case: usize,
    pub group: String,
    pub max_abs_diff: f64,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checks: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// The check with the largest relative error.
    pub fn worst(&self) -> Option<&GroupCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).expect("finite"))
    }
}

struct Case {
    store: ParamStore,
    params: TmdLayerParams,
    f_lin: LinearParams,
    x: Tensor,
    head_names: Vec<(String, ParamId)>,
}

fn layer_fn(f_lin: LinearParams) -> impl LayerFunction {
    // Residual update: x + relu(x W_f + b_f).
    move |rec: &mut Recorder, x: NodeId| {
        let h = linear(rec, x, &f_lin)?;
        let r = rec.graph.relu(h)?;
        rec.graph.add(x, r)
    }
}

fn case_loss(case: &Case, store: &ParamStore, x: &Tensor) -> Result<f64> {
    let mut rec = Recorder::new(store);
    let xn = rec.graph.leaf(x.clone());
    let f = layer_fn(case.f_lin);
    let out = tmd_forward(&mut rec, &f, xn, &case.params)?;
    let sq = rec.graph.square(out)?;
    let loss = rec.graph.mean(sq)?;
    Ok(rec.graph.value(loss).item())
}

fn build_case(index: usize, seed: u64) -> Case {
    let mut rng = StreamRng::new(seed, &format!("gradcheck-case{index}"));
    let m = 3 + rng.below(5); // 3..=7 points
    let n = 2 + rng.below(3); // 2..=4 features
    let latent = 1 + rng.below(3); // 1..=3 latent dims

    let mut store = ParamStore::new();
    let scale = 1.0 / (n as f64).sqrt();
    let projection = store.insert(
        "layer.projection",
        Tensor::matrix(n, latent, (0..n * latent).map(|_| rng.normal(0.0, scale)).collect())
            .expect("finite init"),
    );
    let mut head_names = Vec::new();
    let head = if index % 2 == 0 {
        let weight = store.insert(
            "layer.head.weight",
            Tensor::matrix(n, 1, (0..n).map(|_| rng.normal(0.0, 0.5)).collect()).expect("finite"),
        );
        let bias = store.insert(
            "layer.head.bias",
            Tensor::matrix(1, 1, vec![rng.normal(0.0, 0.2)]).expect("finite"),
        );
        head_names.push(("head.weight".to_string(), weight));
        head_names.push(("head.bias".to_string(), bias));
        DensityHead::Linear { weight, bias }
    } else {
        let hidden = 3;
        let w1 = store.insert(
            "layer.head.w1",
            Tensor::matrix(n, hidden, (0..n * hidden).map(|_| rng.normal(0.0, 0.5)).collect())
                .expect("finite"),
        );
        let b1 = store.insert(
            "layer.head.b1",
            Tensor::matrix(1, hidden, (0..hidden).map(|_| rng.normal(0.0, 0.2)).collect())
                .expect("finite"),
        );
        let w2 = store.insert(
            "layer.head.w2",
            Tensor::matrix(hidden, 1, (0..hidden).map(|_| rng.normal(0.0, 0.5)).collect())
                .expect("finite"),
        );
        let b2 = store.insert(
            "layer.head.b2",
            Tensor::matrix(1, 1, vec![rng.normal(0.0, 0.2)]).expect("finite"),
        );
        head_names.push(("head.w1".to_string(), w1));
        head_names.push(("head.b1".to_string(), b1));
        head_names.push(("head.w2".to_string(), w2));
        head_names.push(("head.b2".to_string(), b2));
        DensityHead::Mlp { w1, b1, w2, b2 }
    };
    // Generic operating point: at dt = 0 every operator gradient would be
    // identically zero.
    let delta_t = store.insert(
        "layer.delta_t",
        Tensor::scalar(rng.uniform(0.1, 0.5)).expect("finite"),
    );

    let f_weight = store.insert(
        "f.weight",
        Tensor::matrix(n, n, (0..n * n).map(|_| rng.normal(0.0, scale)).collect()).expect("finite"),
    );
    let f_bias = store.insert(
        "f.bias",
        Tensor::matrix(1, n, (0..n).map(|_| rng.normal(0.0, 0.2)).collect()).expect("finite"),
    );

    let params = TmdLayerParams {
        kernel: KernelConfig {
            epsilon: EpsilonPolicy::Fixed(rng.uniform(0.3, 1.2)),
            latent_dim: latent,
            projection,
        },
        head,
        delta_t,
        freeze_delta_t: false,
        kernel_source: KernelSource::InputFeatures,
    };

    let x = Tensor::matrix(m, n, (0..m * n).map(|_| rng.uniform(-2.0, 2.0)).collect())
        .expect("finite");

    Case {
        store,
        params,
        f_lin: LinearParams { weight: f_weight, bias: Some(f_bias) },
        x,
        head_names,
    }
}

fn compare(case_idx: usize, group: &str, ad: &Tensor, fd: &Tensor) -> GroupCheck {
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut pass = true;
    for (a, b) in ad.data().iter().zip(fd.data()) {
        let diff = (a - b).abs();
        let mag = a.abs().max(b.abs());
        max_abs = max_abs.max(diff);
        if diff > ABS_TOLERANCE {
            let rel = diff / mag.max(f64::MIN_POSITIVE);
            max_rel = max_rel.max(rel);
            if rel > REL_TOLERANCE {
                pass = false;
            }
        }
    }
    GroupCheck {
        case: case_idx,
        group: group.to_string(),
        max_abs_diff: max_abs,
        max_rel_err: max_rel,
        pass,
    }
}

/// Build `cases` random layer instances and verify the reverse-mode
/// gradient of a scalar loss against central differences for every
/// parameter group: dt, projection, density head, the wrapped function's
/// weights, and the batch itself.
pub fn check_layer_gradients(cases: usize, step: f64, seed: u64) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    for idx in 0..cases {
        let case = build_case(idx, seed);

        // Reverse-mode gradients from a single recording.
        let (param_grads, input_grad) = {
            let mut rec = Recorder::new(&case.store);
            let xn = rec.graph.leaf(case.x.clone());
            let f = layer_fn(case.f_lin);
            let out = tmd_forward(&mut rec, &f, xn, &case.params)?;
            let sq = rec.graph.square(out)?;
            let loss = rec.graph.mean(sq)?;
            let grads = rec.graph.backward(loss)?;
            let per_param = rec.parameter_gradients(loss)?;
            (per_param, grads.get(xn).expect("input is a leaf").clone())
        };

        let mut groups: Vec<(String, ParamId)> = vec![
            ("delta_t".into(), case.params.delta_t),
            ("projection".into(), case.params.kernel.projection),
            ("f.weight".into(), case.f_lin.weight),
            ("f.bias".into(), case.f_lin.bias.expect("layer fn has bias")),
        ];
        groups.extend(case.head_names.iter().cloned());

        for (name, pid) in groups {
            let fd = finite_diff_gradient(
                |theta: &Tensor| {
                    let mut store = case.store.clone();
                    store.set(pid, theta.clone());
                    case_loss(&case, &store, &case.x)
                },
                case.store.get(pid),
                step,
            )?;
            report
                .checks
                .push(compare(idx, &name, &param_grads[pid.index()], &fd));
        }

        let fd_input = finite_diff_gradient(
            |xt: &Tensor| case_loss(&case, &case.store, xt),
            &case.x,
            step,
        )?;
        report.checks.push(compare(idx, "input", &input_grad, &fd_input));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_few_cases_pass_at_default_tolerances() {
        let report = check_layer_gradients(4, DEFAULT_FD_STEP, 11).unwrap();
        for c in &report.checks {
            assert!(
                c.pass,
                "case {} group {} rel {} abs {}",
                c.case, c.group, c.max_rel_err, c.max_abs_diff
            );
        }
        // Per case: dt, projection, f weights, f bias, head (2 or 4), input.
        assert!(report.checks.len() >= 4 * 7);
        assert!(report.worst().is_some());
    }

    #[test]
    fn gradients_are_nonzero_on_generic_inputs() {
        let case = build_case(0, 5);
        let mut rec = Recorder::new(&case.store);
        let xn = rec.graph.leaf(case.x.clone());
        let f = layer_fn(case.f_lin);
        let out = tmd_forward(&mut rec, &f, xn, &case.params).unwrap();
        let sq = rec.graph.square(out).unwrap();
        let loss = rec.graph.mean(sq).unwrap();
        let grads = rec.parameter_gradients(loss).unwrap();
        for (id, name, _) in case.store.iter() {
            assert!(
                grads[id.index()].data().iter().any(|v| *v != 0.0),
                "{name} gradient vanished"
            );
        }
    }
}
