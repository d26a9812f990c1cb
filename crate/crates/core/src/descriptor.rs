//! Place-descriptor vectors and the fusion math that makes them
//! viewpoint-tolerant: cosine distance, self-attention enhancement,
//! cross-attention channel reweighing, and the lazy quadruplet training
//! loss, plus two deterministic descriptor sources (a handcrafted polar
//! histogram and a synthetic world-conditioned generator) standing in for
//! the trained backbones.

use crate::geometry::PointCloud2;
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum DescriptorError {
    #[error("zero-length or zero-norm vector")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("empty descriptor set: {0}")]
    EmptySet(&'static str),
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("bin layout mismatch")]
    LayoutMismatch,
}

/// A fixed-length place descriptor. `normalized` records whether the vector
/// has been L2-normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl Descriptor {
    pub fn new(values: Vec<f64>) -> Self {
        Descriptor {
            values,
            normalized: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// L2-normalize in place. Errors on a zero vector.
    pub fn into_normalized(mut self) -> Result<Self, DescriptorError> {
        let n = self.norm();
        if n < 1e-300 {
            return Err(DescriptorError::ZeroVector);
        }
        for v in &mut self.values {
            *v /= n;
        }
        self.normalized = true;
        Ok(self)
    }
}

/// cosine distance = 1 - cos(angle between f and g), in [0, 2].
pub fn cosine_distance(f: &Descriptor, g: &Descriptor) -> Result<f64, DescriptorError> {
    if f.len() != g.len() {
        return Err(DescriptorError::DimensionMismatch(f.len(), g.len()));
    }
    let (mut dot, mut nf, mut ng) = (0.0, 0.0, 0.0);
    for (a, b) in f.values.iter().zip(&g.values) {
        dot += a * b;
        nf += a * a;
        ng += b * b;
    }
    if nf < 1e-300 || ng < 1e-300 {
        return Err(DescriptorError::ZeroVector);
    }
    let d = 1.0 - dot / (nf.sqrt() * ng.sqrt());
    Ok(d.clamp(0.0, 2.0))
}

/// Row-wise softmax with max-subtraction for stability. Every row of the
/// result sums to 1.
pub fn softmax_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for r in 0..m.nrows() {
        let row_max = (0..m.ncols()).fold(f64::NEG_INFINITY, |acc, c| acc.max(m[(r, c)]));
        let mut sum = 0.0;
        for c in 0..m.ncols() {
            let e = (m[(r, c)] - row_max).exp();
            out[(r, c)] = e;
            sum += e;
        }
        for c in 0..m.ncols() {
            out[(r, c)] /= sum;
        }
    }
    out
}

/// Self-attention enhancement of a single descriptor:
/// `V_sa = V + gamma * softmax_rows(V V^T)^T V`.
pub fn self_attention(v: &Descriptor, gamma: f64) -> Descriptor {
    if gamma == 0.0 {
        return v.clone(); // exact identity at gamma = 0
    }
    let n = v.len();
    let col = DVector::from_column_slice(&v.values);
    let outer = &col * col.transpose();
    let attention = softmax_rows(&outer);
    let weighted = attention.transpose() * &col;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(v.values[i] + gamma * weighted[i]);
    }
    Descriptor::new(out)
}

/// Parameters of the cross-attention fusion layer. `fc_weights` is
/// (2C x 2C), `fc_bias` has length 2C.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub gamma: f64,
    pub fc_weights: DMatrix<f64>,
    pub fc_bias: DVector<f64>,
}

impl FusionParams {
    /// Identity weights and zero bias: the untrained default.
    pub fn identity(c: usize) -> Self {
        FusionParams {
            gamma: 1.0,
            fc_weights: DMatrix::identity(2 * c, 2 * c),
            fc_bias: DVector::zeros(2 * c),
        }
    }

    /// Seeded random weights for property tests.
    pub fn seeded_random(c: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2 * c;
        let fc_weights = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let fc_bias = DVector::from_fn(n, |_, _| rng.gen_range(-0.5..0.5));
        FusionParams {
            gamma: rng.gen_range(0.0..2.0),
            fc_weights,
            fc_bias,
        }
    }
}

// Sigmoid kept strictly inside (0, 1): saturation at f64 precision would
// otherwise collapse extreme activations onto the interval endpoints.
fn sigmoid(x: f64) -> f64 {
    (1.0 / (1.0 + (-x).exp())).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// The channel importance weights `a_w = sigmoid(W (E rowmean(E)) + b)`
/// of the cross-attention layer, each strictly in (0, 1).
pub fn channel_weights(
    v_point: &Descriptor,
    v_sphere: &Descriptor,
    params: &FusionParams,
) -> Result<Vec<f64>, DescriptorError> {
    if v_point.len() != v_sphere.len() {
        return Err(DescriptorError::DimensionMismatch(v_point.len(), v_sphere.len()));
    }
    let n = 2 * v_point.len();
    if params.fc_weights.nrows() != n || params.fc_weights.ncols() != n || params.fc_bias.len() != n
    {
        return Err(DescriptorError::DimensionMismatch(params.fc_weights.nrows(), n));
    }
    let mut cat = Vec::with_capacity(n);
    cat.extend_from_slice(&v_point.values);
    cat.extend_from_slice(&v_sphere.values);
    let v_cat = DVector::from_column_slice(&cat);

    let e = &v_cat * v_cat.transpose();
    let row_mean = DVector::from_fn(n, |r, _| e.row(r).sum() / n as f64);
    let a_corr = &e * row_mean;
    let a_w = (&params.fc_weights * a_corr + &params.fc_bias).map(sigmoid);
    Ok(a_w.iter().copied().collect())
}

/// Cross-attention channel reweighing over the concatenation of the two
/// branch descriptors:
/// `E = V_cat V_cat^T`, `a_corr = E * rowmean(E)`,
/// `a_w = sigmoid(W a_corr + b)`, `V_ca = a_w .* V_cat`.
pub fn cross_attention_fuse(
    v_point: &Descriptor,
    v_sphere: &Descriptor,
    params: &FusionParams,
) -> Result<Descriptor, DescriptorError> {
    let a_w = channel_weights(v_point, v_sphere, params)?;
    let out: Vec<f64> = a_w
        .iter()
        .zip(v_point.values.iter().chain(&v_sphere.values))
        .map(|(w, v)| w * v)
        .collect();
    Ok(Descriptor::new(out))
}

/// A training tuple for the lazy quadruplet loss: anchor, positives,
/// negatives, and the hard negative.
#[derive(Debug, Clone)]
pub struct QuadrupletTuple {
    pub anchor: Descriptor,
    pub positives: Vec<Descriptor>,
    pub negatives: Vec<Descriptor>,
    pub hard_negative: Descriptor,
}

/// Lazy quadruplet loss:
/// `max_{i,j}([m1 + d_pos_i - d_neg_j]_+) + max_{i,k}([m2 + d_pos_i - d(neg_k, hard)]_+)`.
pub fn lazy_quadruplet_loss(
    t: &QuadrupletTuple,
    margin1: f64,
    margin2: f64,
) -> Result<f64, DescriptorError> {
    if t.positives.is_empty() {
        return Err(DescriptorError::EmptySet("positives"));
    }
    if t.negatives.is_empty() {
        return Err(DescriptorError::EmptySet("negatives"));
    }
    let d_pos: Vec<f64> = t
        .positives
        .iter()
        .map(|p| cosine_distance(&t.anchor, p))
        .collect::<Result<_, _>>()?;
    let d_neg: Vec<f64> = t
        .negatives
        .iter()
        .map(|n| cosine_distance(&t.anchor, n))
        .collect::<Result<_, _>>()?;
    let d_neg_star: Vec<f64> = t
        .negatives
        .iter()
        .map(|n| cosine_distance(&t.hard_negative, n))
        .collect::<Result<_, _>>()?;

    let hinge = |x: f64| x.max(0.0);
    let mut first = 0.0f64;
    let mut second = 0.0f64;
    for &dp in &d_pos {
        for &dn in &d_neg {
            first = first.max(hinge(margin1 + dp - dn));
        }
        for &dns in &d_neg_star {
            second = second.max(hinge(margin2 + dp - dns));
        }
    }
    Ok(first + second)
}

/// Occupancy histogram over polar cells around the cloud origin,
/// L2-normalized. Layout: `values[ring * bins_angular + wedge]`.
pub fn polar_histogram_descriptor(
    cloud: &PointCloud2,
    bins_radial: usize,
    bins_angular: usize,
    max_range: f64,
) -> Result<Descriptor, DescriptorError> {
    if cloud.is_empty() {
        return Err(DescriptorError::EmptyCloud);
    }
    let mut counts = vec![0.0f64; bins_radial * bins_angular];
    let ring_width = max_range / bins_radial as f64;
    let wedge_width = TAU / bins_angular as f64;
    let mut hits = 0usize;
    for &(x, y) in &cloud.points {
        let r = (x * x + y * y).sqrt();
        if r > max_range {
            continue;
        }
        let ring = ((r / ring_width) as usize).min(bins_radial - 1);
        let angle = y.atan2(x); // (-pi, pi]
        let wedge = (((angle + PI) / wedge_width) as usize).min(bins_angular - 1);
        counts[ring * bins_angular + wedge] += 1.0;
        hits += 1;
    }
    if hits == 0 {
        return Err(DescriptorError::EmptyCloud);
    }
    Descriptor::new(counts).into_normalized()
}

/// Histogram of the same cloud rotated by `k` angular bin widths; used for
/// rotation-search tests and reverse-direction handling.
pub fn rotate_histogram_bins(desc: &Descriptor, bins_angular: usize, k: usize) -> Descriptor {
    let rings = desc.len() / bins_angular;
    let mut out = vec![0.0; desc.len()];
    for ring in 0..rings {
        for a in 0..bins_angular {
            let src = ring * bins_angular + a;
            let dst = ring * bins_angular + (a + k) % bins_angular;
            out[dst] = desc.values[src];
        }
    }
    Descriptor {
        values: out,
        normalized: desc.normalized,
    }
}

/// Minimum cosine distance over circular shifts of the angular axis, with
/// the argmin shift. Ties break toward the smaller shift.
pub fn rotation_search_distance(
    f_ref: &Descriptor,
    f_test: &Descriptor,
    bins_angular: usize,
) -> Result<(f64, usize), DescriptorError> {
    if f_ref.len() != f_test.len()
        || bins_angular == 0
        || f_ref.len() % bins_angular != 0
        || f_ref.is_empty()
    {
        return Err(DescriptorError::LayoutMismatch);
    }
    let rings = f_ref.len() / bins_angular;
    let mut best = (f64::INFINITY, 0usize);
    let mut shifted = vec![0.0; f_test.len()];
    for s in 0..bins_angular {
        for ring in 0..rings {
            for a in 0..bins_angular {
                shifted[ring * bins_angular + a] =
                    f_test.values[ring * bins_angular + (a + s) % bins_angular];
            }
        }
        let d = cosine_distance(f_ref, &Descriptor::new(shifted.clone()))?;
        if d < best.0 {
            best = (d, s);
        }
    }
    Ok(best)
}

/// Side length of the location quantization cell used by the synthetic
/// descriptor source. Two locations in the same cell produce the same base
/// vector.
pub const SYNTHETIC_CELL: f64 = 5.0;

/// Default synthetic descriptor length.
pub const DEFAULT_DESCRIPTOR_LEN: usize = 64;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn cell_of(location: (f64, f64)) -> (i64, i64) {
    (
        (location.0 / SYNTHETIC_CELL).round() as i64,
        (location.1 / SYNTHETIC_CELL).round() as i64,
    )
}

/// Deterministic world-conditioned descriptor: the base vector depends only
/// on the quantized location (or the alias group when set), so revisits of
/// the same place match regardless of yaw, while distant places are nearly
/// orthogonal. Gaussian noise of scale `noise_sigma` is seeded by the exact
/// query, keeping repeated calls identical.
pub fn synthetic_descriptor(
    world_seed: u64,
    location: (f64, f64),
    yaw: f64,
    noise_sigma: f64,
    alias_group: Option<u64>,
    len: usize,
) -> Descriptor {
    let base_seed = match alias_group {
        Some(g) => splitmix(world_seed ^ splitmix(0xa11a5 ^ g)),
        None => {
            let (cx, cy) = cell_of(location);
            splitmix(world_seed ^ splitmix(cx as u64 ^ splitmix(cy as u64 ^ 0xce11)))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    let mut values: Vec<f64> = (0..len).map(|_| standard_normal(&mut rng)).collect();

    if noise_sigma > 0.0 {
        let noise_seed = splitmix(
            world_seed
                ^ splitmix(location.0.to_bits())
                ^ splitmix(location.1.to_bits().rotate_left(17))
                ^ splitmix(yaw.to_bits().rotate_left(31)),
        );
        let mut nrng = ChaCha8Rng::seed_from_u64(noise_seed);
        for v in &mut values {
            *v += noise_sigma * standard_normal(&mut nrng);
        }
    }
    Descriptor::new(values)
        .into_normalized()
        .expect("synthetic base vector is never zero")
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(1e-12..1.0f64);
    let u2: f64 = rng.gen_range(0.0..1.0f64);
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}
