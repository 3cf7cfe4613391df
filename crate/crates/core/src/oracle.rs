//! Analytic validation of the generator estimate.
//!
//! For overdamped Langevin dynamics with stationary density pi, the
//! generator has the closed form Lf = laplacian(f) + grad(log pi).grad(f).
//! This module evaluates that form exactly for known densities and smooth
//! test functions, samples batches from pi, and measures how far the
//! finite-sample matrix estimate deviates on interior points.

use crate::error::Result;
use crate::kernel::{gaussian_kernel, kde};
use crate::operator::{apply_generator, build_tmd_operator, target_density, DensityHead};
use crate::params::{ParamStore, Recorder};
use crate::report::{fmt_g17, CsvWriter};
use crate::rng::StreamRng;
use crate::tensor::Tensor;
use std::io::Write;
use std::rc::Rc;

/// Target densities with closed-form log-density gradients, in dimension
/// 1 or 2, with identity-scaled diffusion.
#[derive(Debug, Clone)]
pub enum DensityFamily {
    /// Isotropic Gaussian.
    Gaussian { mean: Vec<f64>, variance: f64 },
    /// Two-component isotropic Gaussian mixture.
    Mixture {
        means: [Vec<f64>; 2],
        variances: [f64; 2],
        weights: [f64; 2],
    },
}

#[derive(Debug, Clone)]
pub struct GeneratorSpec {
    pub density: DensityFamily,
}

impl GeneratorSpec {
    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Self {
        assert!(variance > 0.0);
        assert!(matches!(mean.len(), 1 | 2));
        GeneratorSpec { density: DensityFamily::Gaussian { mean, variance } }
    }

    pub fn mixture(means: [Vec<f64>; 2], variances: [f64; 2], weights: [f64; 2]) -> Self {
        assert!(variances.iter().all(|v| *v > 0.0));
        assert!(weights.iter().all(|w| *w > 0.0));
        assert!(matches!(means[0].len(), 1 | 2));
        assert_eq!(means[0].len(), means[1].len());
        let total = weights[0] + weights[1];
        GeneratorSpec {
            density: DensityFamily::Mixture {
                means,
                variances,
                weights: [weights[0] / total, weights[1] / total],
            },
        }
    }

    pub fn dim(&self) -> usize {
        match &self.density {
            DensityFamily::Gaussian { mean, .. } => mean.len(),
            DensityFamily::Mixture { means, .. } => means[0].len(),
        }
    }

    /// Normalized density value.
    pub fn density(&self, x: &[f64]) -> f64 {
        match &self.density {
            DensityFamily::Gaussian { mean, variance } => gaussian_pdf(x, mean, *variance),
            DensityFamily::Mixture { means, variances, weights } => {
                weights[0] * gaussian_pdf(x, &means[0], variances[0])
                    + weights[1] * gaussian_pdf(x, &means[1], variances[1])
            }
        }
    }

    /// grad(log pi)(x), the drift of the associated Langevin process.
    pub fn grad_log_density(&self, x: &[f64]) -> Vec<f64> {
        match &self.density {
            DensityFamily::Gaussian { mean, variance } => x
                .iter()
                .zip(mean)
                .map(|(xi, mi)| -(xi - mi) / variance)
                .collect(),
            DensityFamily::Mixture { means, variances, weights } => {
                let p0 = weights[0] * gaussian_pdf(x, &means[0], variances[0]);
                let p1 = weights[1] * gaussian_pdf(x, &means[1], variances[1]);
                let total = p0 + p1;
                (0..x.len())
                    .map(|c| {
                        let g0 = -(x[c] - means[0][c]) / variances[0];
                        let g1 = -(x[c] - means[1][c]) / variances[1];
                        (p0 * g0 + p1 * g1) / total
                    })
                    .collect()
            }
        }
    }

    /// Mean of the density.
    pub fn mean(&self) -> Vec<f64> {
        match &self.density {
            DensityFamily::Gaussian { mean, .. } => mean.clone(),
            DensityFamily::Mixture { means, weights, .. } => (0..means[0].len())
                .map(|c| weights[0] * means[0][c] + weights[1] * means[1][c])
                .collect(),
        }
    }

    /// Isotropic spread used for interior filtering: the square root of
    /// the average per-coordinate variance.
    pub fn spread(&self) -> f64 {
        match &self.density {
            DensityFamily::Gaussian { variance, .. } => variance.sqrt(),
            DensityFamily::Mixture { means, variances, weights } => {
                let mean = self.mean();
                let d = mean.len() as f64;
                let mut var = weights[0] * variances[0] + weights[1] * variances[1];
                for k in 0..2 {
                    let sq: f64 = means[k]
                        .iter()
                        .zip(&mean)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    var += weights[k] * sq / d;
                }
                var.sqrt()
            }
        }
    }

    /// One draw from pi: component choice, then a Gaussian draw.
    pub fn sample(&self, rng: &mut StreamRng) -> Vec<f64> {
        match &self.density {
            DensityFamily::Gaussian { mean, variance } => {
                let sd = variance.sqrt();
                mean.iter().map(|m| rng.normal(*m, sd)).collect()
            }
            DensityFamily::Mixture { means, variances, weights } => {
                let k = if rng.next_f64() < weights[0] { 0 } else { 1 };
                let sd = variances[k].sqrt();
                means[k].iter().map(|m| rng.normal(*m, sd)).collect()
            }
        }
    }
}

fn gaussian_pdf(x: &[f64], mean: &[f64], variance: f64) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    (2.0 * std::f64::consts::PI * variance).powf(-d / 2.0) * (-sq / (2.0 * variance)).exp()
}

/// Smooth test functions with closed-form gradient and Laplacian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TestFunction {
    /// x -> |x|^2
    Quadratic,
    /// x -> x_1
    Coordinate,
    /// x -> cos(x_1)
    Cosine,
    /// x -> c
    Constant(f64),
}

impl TestFunction {
    pub fn value(self, x: &[f64]) -> f64 {
        match self {
            TestFunction::Quadratic => x.iter().map(|v| v * v).sum(),
            TestFunction::Coordinate => x[0],
            TestFunction::Cosine => x[0].cos(),
            TestFunction::Constant(c) => c,
        }
    }

    pub fn gradient(self, x: &[f64]) -> Vec<f64> {
        match self {
            TestFunction::Quadratic => x.iter().map(|v| 2.0 * v).collect(),
            TestFunction::Coordinate => {
                let mut g = vec![0.0; x.len()];
                g[0] = 1.0;
                g
            }
            TestFunction::Cosine => {
                let mut g = vec![0.0; x.len()];
                g[0] = -x[0].sin();
                g
            }
            TestFunction::Constant(_) => vec![0.0; x.len()],
        }
    }

    pub fn laplacian(self, x: &[f64]) -> f64 {
        match self {
            TestFunction::Quadratic => 2.0 * x.len() as f64,
            TestFunction::Coordinate => 0.0,
            TestFunction::Cosine => -x[0].cos(),
            TestFunction::Constant(_) => 0.0,
        }
    }
}

/// The closed-form generator: Lf(x) = laplacian(f)(x) + grad(log pi).grad(f).
pub fn analytic_generator(spec: &GeneratorSpec, f: TestFunction, x: &[f64]) -> f64 {
    let drift = spec.grad_log_density(x);
    let grad = f.gradient(x);
    let advect: f64 = drift.iter().zip(&grad).map(|(a, b)| a * b).sum();
    f.laplacian(x) + advect
}

/// Error statistics of one finite-sample trial.
#[derive(Debug, Clone, Copy)]
pub struct TrialErrors {
    pub max_interior_error: f64,
    pub mean_interior_error: f64,
}

/// Sample m points from pi, build the operator with the true pi^(1/2)
/// plugged into the density head slot, and compare L_m[f] against the
/// closed form on interior points (within 1.5 spreads of the mean, away
/// from the boundary bias of the kernel estimate).
pub fn convergence_trial(
    spec: &GeneratorSpec,
    f: TestFunction,
    m: usize,
    epsilon: f64,
    seed: u64,
) -> Result<TrialErrors> {
    assert!(m >= 10, "trials need at least 10 samples");
    let stream = format!("trial-m{}-eps{}", m, fmt_g17(epsilon));
    let mut rng = StreamRng::new(seed, &stream);

    let mut rows = Vec::with_capacity(m);
    for _ in 0..m {
        rows.push(spec.sample(&mut rng));
    }

    let store = ParamStore::new();
    let mut rec = Recorder::new(&store);
    let x = rec.constant(Tensor::from_rows(&rows)?);
    let kernel = gaussian_kernel(&mut rec.graph, x, epsilon)?;
    let q = kde(&mut rec.graph, kernel)?;
    let spec_for_head = spec.clone();
    let head = DensityHead::Analytic(Rc::new(move |p: &[f64]| spec_for_head.density(p).sqrt()));
    let pi_sqrt = target_density(&mut rec, &head, x)?;
    let op = build_tmd_operator(&mut rec.graph, kernel, q, pi_sqrt, epsilon)?;

    let f_values: Vec<f64> = rows.iter().map(|r| f.value(r)).collect();
    let f_node = rec.constant(Tensor::matrix(m, 1, f_values)?);
    let estimated = apply_generator(&mut rec.graph, &op, f_node)?;
    let estimated = rec.graph.value(estimated);

    let center = spec.mean();
    let radius = 1.5 * spec.spread();
    let mut max_err = 0.0f64;
    let mut sum_err = 0.0f64;
    let mut count = 0usize;
    for (i, row) in rows.iter().enumerate() {
        let dist_sq: f64 = row.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist_sq > radius * radius {
            continue;
        }
        let err = (estimated.at(i, 0) - analytic_generator(spec, f, row)).abs();
        max_err = max_err.max(err);
        sum_err += err;
        count += 1;
    }
    if count == 0 {
        // Degenerate draw with no interior points; score all points instead.
        for (i, row) in rows.iter().enumerate() {
            let err = (estimated.at(i, 0) - analytic_generator(spec, f, row)).abs();
            max_err = max_err.max(err);
            sum_err += err;
            count += 1;
        }
    }
    Ok(TrialErrors {
        max_interior_error: max_err,
        mean_interior_error: sum_err / count as f64,
    })
}

/// One sweep row per (m, epsilon, seed).
#[derive(Debug, Clone, Copy)]
pub struct SweepRow {
    pub m: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub max_err: f64,
    pub mean_err: f64,
}

pub fn convergence_sweep(
    spec: &GeneratorSpec,
    f: TestFunction,
    m_grid: &[usize],
    epsilon_grid: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    assert!(!m_grid.is_empty() && !epsilon_grid.is_empty(), "grids must be nonempty");
    let mut rows = Vec::new();
    for &m in m_grid {
        for &epsilon in epsilon_grid {
            for &seed in seeds {
                let errs = convergence_trial(spec, f, m, epsilon, seed)?;
                rows.push(SweepRow {
                    m,
                    epsilon,
                    seed,
                    max_err: errs.max_interior_error,
                    mean_err: errs.mean_interior_error,
                });
            }
        }
    }
    Ok(rows)
}

/// Header: `m,epsilon,seed,max_err,mean_err`; floats carry 17 significant
/// digits.
pub fn write_sweep_csv(rows: &[SweepRow], out: impl Write) -> Result<()> {
    let mut csv = CsvWriter::new(out, &["m", "epsilon", "seed", "max_err", "mean_err"])?;
    for r in rows {
        csv.row(&[
            r.m.to_string(),
            fmt_g17(r.epsilon),
            r.seed.to_string(),
            fmt_g17(r.max_err),
            fmt_g17(r.mean_err),
        ])?;
    }
    Ok(())
}
