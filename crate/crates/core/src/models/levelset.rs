//! Level-set segmentation: the classical region-competition update of
//! Chan and Vese ("Active contours without edges", IEEE TIP 2001), plus a
//! batch correction step that couples the evolutions of several images
//! through the generator estimate.
//!
//! The contour is the zero crossing of a field phi (foreground where
//! phi > 0). One update computes smoothed-Heaviside-weighted region means
//! c1, c2 and moves phi by
//!
//!   dphi/dt = delta_eta(phi) [mu k(phi) - nu - l1 (I - c1)^2 + l2 (I - c2)^2]
//!
//! with k the curvature of the level lines. The contour step dt' is a
//! different clock from the correction step dt; the two belong to two
//! different dynamical systems.

use crate::error::{Error, Result};
use crate::kernel::{gaussian_kernel, kde, project, resolve_epsilon};
use crate::layer::TmdLayerParams;
use crate::operator::{apply_generator, build_tmd_operator, target_density};
use crate::params::{ParamStore, Recorder};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct ChanVeseCoefficients {
    /// Length penalty (curvature weight).
    pub mu: f64,
    /// Area penalty.
    pub nu: f64,
    /// Foreground data weight.
    pub lambda1: f64,
    /// Background data weight.
    pub lambda2: f64,
    /// Heaviside smoothing width.
    pub eta: f64,
    /// Contour step size dt'.
    pub contour_dt: f64,
}

impl Default for ChanVeseCoefficients {
    fn default() -> Self {
        ChanVeseCoefficients {
            mu: 0.05,
            nu: 0.0,
            lambda1: 1.0,
            lambda2: 1.0,
            eta: 1.0,
            contour_dt: 0.8,
        }
    }
}

/// One evolving segmentation: the field, its image, coefficients, and the
/// region means of the previous step (the fallback when a region's weight
/// underflows).
#[derive(Debug, Clone)]
pub struct LevelSetState {
    pub phi: Tensor,
    pub image: Tensor,
    pub coeffs: ChanVeseCoefficients,
    last_means: Option<(f64, f64)>,
}

impl LevelSetState {
    pub fn new(phi: Tensor, image: Tensor, coeffs: ChanVeseCoefficients) -> Result<Self> {
        if phi.rank() != 2 || phi.shape() != image.shape() {
            return Err(Error::ShapeMismatch {
                op: "level_set_state",
                detail: format!("phi {:?} vs image {:?}", phi.shape(), image.shape()),
            });
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::ShapeMismatch {
                op: "level_set_state",
                detail: "image values must lie in [0, 1]".into(),
            });
        }
        if !(coeffs.eta > 0.0) || !(coeffs.contour_dt > 0.0) {
            return Err(Error::ShapeMismatch {
                op: "level_set_state",
                detail: "eta and contour_dt must be positive".into(),
            });
        }
        Ok(LevelSetState { phi, image, coeffs, last_means: None })
    }

    pub fn height(&self) -> usize {
        self.phi.rows()
    }

    pub fn width(&self) -> usize {
        self.phi.cols()
    }

    /// Foreground mask: phi > 0.
    pub fn mask(&self) -> Vec<bool> {
        self.phi.data().iter().map(|v| *v > 0.0).collect()
    }

    pub fn region_means(&self) -> Option<(f64, f64)> {
        self.last_means
    }

    /// A centered disk of radius 0.35 min(h, w): phi(r, c) = r0 - dist to
    /// the center, positive inside.
    pub fn disk_phi(height: usize, width: usize) -> Tensor {
        let r0 = 0.35 * height.min(width) as f64;
        let cy = (height as f64 - 1.0) / 2.0;
        let cx = (width as f64 - 1.0) / 2.0;
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                let d = ((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)).sqrt();
                data.push(r0 - d);
            }
        }
        Tensor::new(vec![height, width], data).expect("finite")
    }
}

fn heaviside(z: f64, eta: f64) -> f64 {
    0.5 * (1.0 + (2.0 / std::f64::consts::PI) * (z / eta).atan())
}

fn delta(z: f64, eta: f64) -> f64 {
    (1.0 / std::f64::consts::PI) * eta / (eta * eta + z * z)
}

/// The outcome of one contour update: the new field plus the region means
/// that produced it.
#[derive(Debug, Clone)]
pub struct ChanVeseUpdate {
    pub phi: Tensor,
    pub means: (f64, f64),
}

/// One explicit contour step. Pure: the caller decides whether to commit
/// the update (see [`chanvese_advance`]) or blend it across a batch first
/// (see [`chanvese_tmd_step`]).
pub fn chanvese_step(state: &LevelSetState) -> Result<ChanVeseUpdate> {
    let (h, w) = (state.height(), state.width());
    let co = &state.coeffs;
    let phi = &state.phi;
    let img = &state.image;

    let mut fg_weight = 0.0;
    let mut fg_sum = 0.0;
    let mut bg_weight = 0.0;
    let mut bg_sum = 0.0;
    for idx in 0..h * w {
        let hv = heaviside(phi.data()[idx], co.eta);
        let i = img.data()[idx];
        fg_weight += hv;
        fg_sum += hv * i;
        bg_weight += 1.0 - hv;
        bg_sum += (1.0 - hv) * i;
    }
    let c1 = if fg_weight > 0.0 {
        fg_sum / fg_weight
    } else {
        state.last_means.ok_or(Error::DegenerateRegion)?.0
    };
    let c2 = if bg_weight > 0.0 {
        bg_sum / bg_weight
    } else {
        state.last_means.ok_or(Error::DegenerateRegion)?.1
    };

    // Clamped-index central differences; |grad phi| floored at 1e-8 in the
    // curvature denominator.
    let at = |r: isize, c: isize| -> f64 {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        phi.at(r, c)
    };
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h as isize {
        for c in 0..w as isize {
            let p = at(r, c);
            let px = (at(r, c + 1) - at(r, c - 1)) / 2.0;
            let py = (at(r + 1, c) - at(r - 1, c)) / 2.0;
            let pxx = at(r, c + 1) - 2.0 * p + at(r, c - 1);
            let pyy = at(r + 1, c) - 2.0 * p + at(r - 1, c);
            let pxy = (at(r + 1, c + 1) + at(r - 1, c - 1)
                - at(r + 1, c - 1)
                - at(r - 1, c + 1))
                / 4.0;
            let grad_sq = px * px + py * py;
            let grad = grad_sq.sqrt().max(1e-8);
            let curvature = (pxx * py * py - 2.0 * px * py * pxy + pyy * px * px)
                / (grad * grad * grad);

            let i = img.at(r as usize, c as usize);
            let force = co.mu * curvature - co.nu - co.lambda1 * (i - c1) * (i - c1)
                + co.lambda2 * (i - c2) * (i - c2);
            out.push(p + co.contour_dt * delta(p, co.eta) * force);
        }
    }
    Ok(ChanVeseUpdate {
        phi: Tensor::new(vec![h, w], out)?,
        means: (c1, c2),
    })
}

/// Apply one step in place.
pub fn chanvese_advance(state: &mut LevelSetState) -> Result<()> {
    let update = chanvese_step(state)?;
    state.phi = update.phi;
    state.last_means = Some(update.means);
    Ok(())
}

/// Average-pool a field to at most `target` bins per axis, flattened to a
/// feature row. This is what the kernel sees of each field.
pub fn pooled_features(phi: &Tensor, target: usize) -> Vec<f64> {
    let (h, w) = (phi.rows(), phi.cols());
    let th = target.min(h);
    let tw = target.min(w);
    let mut out = Vec::with_capacity(th * tw);
    for br in 0..th {
        let r0 = br * h / th;
        let r1 = (br + 1) * h / th;
        for bc in 0..tw {
            let c0 = bc * w / tw;
            let c1 = (bc + 1) * w / tw;
            let mut acc = 0.0;
            for r in r0..r1 {
                for c in c0..c1 {
                    acc += phi.at(r, c);
                }
            }
            out.push(acc / ((r1 - r0) * (c1 - c0)) as f64);
        }
    }
    out
}

/// Per-axis pooling target for the kernel features.
pub const POOL_TARGET: usize = 16;

/// One corrected batch step: apply the contour update to every state,
/// then blend the updated fields with dt * L F, where L is built from the
/// pooled, projected current fields. No backward pass runs here; the
/// segmentation experiments keep the layer parameters fixed.
pub fn chanvese_tmd_step(
    states: &mut [LevelSetState],
    params: &TmdLayerParams,
    store: &ParamStore,
) -> Result<()> {
    assert!(!states.is_empty());
    let (h, w) = (states[0].height(), states[0].width());
    for s in states.iter() {
        if s.height() != h || s.width() != w {
            return Err(Error::ShapeMismatch {
                op: "chanvese_tmd_step",
                detail: "all fields in a batch must share a grid".into(),
            });
        }
    }

    let updates: Vec<ChanVeseUpdate> =
        states.iter().map(chanvese_step).collect::<Result<_>>()?;

    let m = states.len();
    if m == 1 {
        // Single sample: the generator is zero, identical to the plain step.
        let update = updates.into_iter().next().expect("one update");
        states[0].phi = update.phi;
        states[0].last_means = Some(update.means);
        return Ok(());
    }

    let pooled: Vec<Vec<f64>> = states
        .iter()
        .map(|s| pooled_features(&s.phi, POOL_TARGET))
        .collect();
    let f_rows: Vec<Vec<f64>> = updates.iter().map(|u| u.phi.data().to_vec()).collect();

    let mut rec = Recorder::new(store);
    let x = rec.constant(Tensor::from_rows(&pooled)?);
    let proj = rec.frozen(params.kernel.projection);
    let latent = project(&mut rec.graph, x, proj)?;
    let epsilon = resolve_epsilon(params.kernel.epsilon, rec.graph.value(latent))?;
    let kernel = gaussian_kernel(&mut rec.graph, latent, epsilon)?;
    let q = kde(&mut rec.graph, kernel)?;
    let pi_sqrt = target_density(&mut rec, &params.head, x)?;
    let op = build_tmd_operator(&mut rec.graph, kernel, q, pi_sqrt, epsilon)?;

    let f = rec.constant(Tensor::from_rows(&f_rows)?);
    let correction = apply_generator(&mut rec.graph, &op, f)?;
    let dt = rec.frozen(params.delta_t);
    let scaled = rec.graph.scalar_mul(dt, correction)?;
    let blended = rec.graph.add(f, scaled)?;
    let blended = rec.graph.value(blended).clone();

    for (i, (state, update)) in states.iter_mut().zip(updates).enumerate() {
        state.phi = Tensor::new(vec![h, w], blended.row(i).to_vec())?;
        state.last_means = Some(update.means);
    }
    Ok(())
}

/// Intersection over union of two masks; 1 when both are empty.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.iter().zip(b) {
        if *x && *y {
            inter += 1;
        }
        if *x || *y {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
