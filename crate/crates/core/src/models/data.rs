//! Synthetic datasets, generated on the fly from seeded streams.

use crate::rng::StreamRng;
use crate::tensor::Tensor;

/// Two interleaved half-circles with additive Gaussian noise. Returns one
/// feature row per sample and the class labels, shuffled.
pub fn two_moons(n: usize, noise: f64, rng: &mut StreamRng) -> (Tensor, Vec<usize>) {
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.uniform(0.0, std::f64::consts::PI);
        let (mut x, mut y, label) = if i % 2 == 0 {
            (t.cos(), t.sin(), 0)
        } else {
            (1.0 - t.cos(), 0.5 - t.sin(), 1)
        };
        x += rng.normal(0.0, noise);
        y += rng.normal(0.0, noise);
        rows.push(vec![x, y]);
        labels.push(label);
    }
    shuffle_rows(&mut rows, &mut labels, rng);
    (Tensor::from_rows(&rows).expect("finite"), labels)
}

/// Isotropic Gaussian blobs around the given centers, one class per
/// center, evenly sized.
pub fn gaussian_blobs(
    n: usize,
    centers: &[Vec<f64>],
    spread: f64,
    rng: &mut StreamRng,
) -> (Tensor, Vec<usize>) {
    assert!(!centers.is_empty());
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % centers.len();
        rows.push(centers[k].iter().map(|c| rng.normal(*c, spread)).collect());
        labels.push(k);
    }
    shuffle_rows(&mut rows, &mut labels, rng);
    (Tensor::from_rows(&rows).expect("finite"), labels)
}

fn shuffle_rows(rows: &mut [Vec<f64>], labels: &mut [usize], rng: &mut StreamRng) {
    for i in (1..rows.len()).rev() {
        let j = rng.below(i + 1);
        rows.swap(i, j);
        labels.swap(i, j);
    }
}

/// Add Gaussian perturbations to every entry of a feature matrix.
pub fn add_noise(x: &Tensor, sigma: f64, rng: &mut StreamRng) -> Tensor {
    if sigma == 0.0 {
        return x.clone();
    }
    Tensor::new(
        x.shape().to_vec(),
        x.data().iter().map(|v| v + rng.normal(0.0, sigma)).collect(),
    )
    .expect("finite")
}

/// Point-set shape classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    Circle,
    Square,
    Cross,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Circle, ShapeClass::Square, ShapeClass::Cross];

    pub fn label(self) -> usize {
        match self {
            ShapeClass::Circle => 0,
            ShapeClass::Square => 1,
            ShapeClass::Cross => 2,
        }
    }
}

/// Sample a point cloud on the outline of one shape: unit scale, random
/// global rotation, per-point jitter. Each point carries the descriptor
/// (x, y, x^2 + y^2); the squared radius channel is rotation invariant.
pub fn shape_cloud(class: ShapeClass, n_points: usize, jitter: f64, rng: &mut StreamRng) -> Tensor {
    let theta0 = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
    let (c0, s0) = (theta0.cos(), theta0.sin());
    let mut rows = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let (mut x, mut y) = match class {
            ShapeClass::Circle => {
                let t = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
                (t.cos(), t.sin())
            }
            ShapeClass::Square => {
                let u = rng.uniform(-1.0, 1.0);
                match rng.below(4) {
                    0 => (u, 1.0),
                    1 => (u, -1.0),
                    2 => (1.0, u),
                    _ => (-1.0, u),
                }
            }
            ShapeClass::Cross => {
                let u = rng.uniform(-1.0, 1.0);
                if rng.below(2) == 0 {
                    (u, 0.0)
                } else {
                    (0.0, u)
                }
            }
        };
        // Rotate, then jitter.
        let (rx, ry) = (c0 * x - s0 * y, s0 * x + c0 * y);
        x = rx + rng.normal(0.0, jitter);
        y = ry + rng.normal(0.0, jitter);
        rows.push(vec![x, y, x * x + y * y]);
    }
    Tensor::from_rows(&rows).expect("finite")
}

/// A labeled set of shape clouds, `per_class` of each class.
pub fn shape_cloud_set(
    per_class: usize,
    n_points: usize,
    jitter: f64,
    rng: &mut StreamRng,
) -> Vec<(Tensor, usize)> {
    let mut clouds = Vec::with_capacity(3 * per_class);
    for _ in 0..per_class {
        for class in ShapeClass::ALL {
            clouds.push((shape_cloud(class, n_points, jitter, rng), class.label()));
        }
    }
    for i in (1..clouds.len()).rev() {
        let j = rng.below(i + 1);
        clouds.swap(i, j);
    }
    clouds
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageShape {
    Rectangle,
    Disk,
}

/// A synthetic segmentation example: image in [0, 1] with one bright
/// shape on a dark background, plus the ground-truth mask.
pub struct ShapeImage {
    pub image: Tensor,
    pub mask: Vec<bool>,
    pub shape: ImageShape,
}

pub fn shape_image(
    height: usize,
    width: usize,
    noise: f64,
    rng: &mut StreamRng,
) -> ShapeImage {
    const BG: f64 = 0.25;
    const FG: f64 = 0.75;
    let shape = if rng.below(2) == 0 { ImageShape::Rectangle } else { ImageShape::Disk };
    let cy = rng.uniform(0.35, 0.65) * height as f64;
    let cx = rng.uniform(0.35, 0.65) * width as f64;

    let mut mask = vec![false; height * width];
    match shape {
        ImageShape::Rectangle => {
            let hh = rng.uniform(0.15, 0.28) * height as f64;
            let hw = rng.uniform(0.15, 0.28) * width as f64;
            for r in 0..height {
                for c in 0..width {
                    if (r as f64 - cy).abs() <= hh && (c as f64 - cx).abs() <= hw {
                        mask[r * width + c] = true;
                    }
                }
            }
        }
        ImageShape::Disk => {
            let radius = rng.uniform(0.15, 0.28) * height.min(width) as f64;
            for r in 0..height {
                for c in 0..width {
                    let dr = r as f64 - cy;
                    let dc = c as f64 - cx;
                    if dr * dr + dc * dc <= radius * radius {
                        mask[r * width + c] = true;
                    }
                }
            }
        }
    }

    let data: Vec<f64> = mask
        .iter()
        .map(|inside| {
            let base = if *inside { FG } else { BG };
            (base + rng.normal(0.0, noise)).clamp(0.0, 1.0)
        })
        .collect();
    ShapeImage {
        image: Tensor::new(vec![height, width], data).expect("finite"),
        mask,
        shape,
    }
}
