//! Instance-mask encoders.
//!
//! A mask is first cropped to its bounding box and resampled onto a fixed
//! `G x G` grid; position and size are kept separately as metadata because the
//! crop discards them. Two encoders map a grid to an embedding: a fixed
//! moment-feature projection and a small dense autoencoder.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{derive_seed, task_id};
use crate::mask::Bitmap;
use crate::scenesim::InstanceMask;

pub const DEFAULT_GRID_SIZE: usize = 64;
/// Number of metadata values appended by [`ae_encode`].
pub const METADATA_DIM: usize = 3;
pub const MOMENT_FEATURES: usize = 13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskGrid {
    pub size: usize,
    /// Row-major `size * size` cells.
    pub cells: Vec<bool>,
    /// Centroid of the original mask in normalized image coordinates.
    pub centroid: [f64; 2],
    /// Fraction of image pixels covered by the original mask.
    pub area_fraction: f64,
    /// Bounding-box width over height, in pixels.
    pub bbox_aspect: f64,
}

impl MaskGrid {
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.cells[y * self.size + x]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn to_input(&self) -> Vec<f64> {
        self.cells
            .iter()
            .map(|&c| if c { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn metadata(&self) -> [f64; METADATA_DIM] {
        [self.centroid[0], self.centroid[1], self.area_fraction]
    }
}

/// Crops `mask` to its bounding box and resamples it onto a `grid_size`
/// square grid by nearest neighbour. An axis longer than the grid is
/// squeezed to fill it; a shorter one is copied one pixel per cell and
/// centered, so small masks are not blown up.
pub fn rasterize_mask(mask: &Bitmap, grid_size: usize) -> Result<MaskGrid> {
    if grid_size < 2 || !grid_size.is_power_of_two() {
        return Err(Error::validation(
            "grid_size",
            "must be a power of two >= 2",
        ));
    }
    let bb = mask
        .bounding_box()
        .ok_or_else(|| Error::validation("mask", "empty mask"))?;
    let (bw, bh) = (bb.width(), bb.height());
    let axis = |extent: usize| -> (usize, usize) {
        let used = extent.min(grid_size);
        (used, (grid_size - used) / 2)
    };
    let (used_x, off_x) = axis(bw);
    let (used_y, off_y) = axis(bh);
    let mut cells = vec![false; grid_size * grid_size];
    for gy in 0..used_y {
        let py = bb.y0 + ((gy as f64 + 0.5) * bh as f64 / used_y as f64) as usize;
        for gx in 0..used_x {
            let px = bb.x0 + ((gx as f64 + 0.5) * bw as f64 / used_x as f64) as usize;
            cells[(gy + off_y) * grid_size + gx + off_x] = mask.get(px, py);
        }
    }

    let (w, h) = (mask.width() as f64, mask.height() as f64);
    let n = mask.count() as f64;
    let (sx, sy) = mask.iter_set().fold((0.0, 0.0), |(ax, ay), (x, y)| {
        (ax + x as f64 + 0.5, ay + y as f64 + 0.5)
    });
    Ok(MaskGrid {
        size: grid_size,
        cells,
        centroid: [sx / n / w, sy / n / h],
        area_fraction: n / (w * h),
        bbox_aspect: bw as f64 / bh as f64,
    })
}

/// Raw image moments `m_pq` over active cells, using cell centers.
fn raw_moment(grid: &MaskGrid, p: i32, q: i32) -> f64 {
    let mut m = 0.0;
    for y in 0..grid.size {
        for x in 0..grid.size {
            if grid.get(x, y) {
                m += (x as f64 + 0.5).powi(p) * (y as f64 + 0.5).powi(q);
            }
        }
    }
    m
}

/// Scale-normalized central moments `eta_pq` for `p + q` in 2..=3, keyed
/// `[eta20, eta11, eta02, eta30, eta21, eta12, eta03]`.
pub fn normalized_central_moments(grid: &MaskGrid) -> [f64; 7] {
    let m00 = raw_moment(grid, 0, 0);
    if m00 == 0.0 {
        return [0.0; 7];
    }
    let xc = raw_moment(grid, 1, 0) / m00;
    let yc = raw_moment(grid, 0, 1) / m00;
    let mu = |p: i32, q: i32| -> f64 {
        let mut s = 0.0;
        for y in 0..grid.size {
            for x in 0..grid.size {
                if grid.get(x, y) {
                    s += (x as f64 + 0.5 - xc).powi(p) * (y as f64 + 0.5 - yc).powi(q);
                }
            }
        }
        s
    };
    let eta = |p: i32, q: i32| mu(p, q) / m00.powf(1.0 + f64::from(p + q) / 2.0);
    [
        eta(2, 0),
        eta(1, 1),
        eta(0, 2),
        eta(3, 0),
        eta(2, 1),
        eta(1, 2),
        eta(0, 3),
    ]
}

pub fn hu_moments(eta: &[f64; 7]) -> [f64; 7] {
    let [n20, n11, n02, n30, n21, n12, n03] = *eta;
    let a = n30 + n12;
    let b = n21 + n03;
    [
        n20 + n02,
        (n20 - n02).powi(2) + 4.0 * n11 * n11,
        (n30 - 3.0 * n12).powi(2) + (3.0 * n21 - n03).powi(2),
        a * a + b * b,
        (n30 - 3.0 * n12) * a * (a * a - 3.0 * b * b)
            + (3.0 * n21 - n03) * b * (3.0 * a * a - b * b),
        (n20 - n02) * (a * a - b * b) + 4.0 * n11 * a * b,
        (3.0 * n21 - n03) * a * (a * a - 3.0 * b * b)
            - (n30 - 3.0 * n12) * b * (3.0 * a * a - b * b),
    ]
}

fn signed_log(h: f64) -> f64 {
    h.signum() * (1.0 + h.abs() * 1e7).log10()
}

/// The 13 shape/size/position features before projection.
pub fn moment_features(grid: &MaskGrid) -> [f64; MOMENT_FEATURES] {
    let eta = normalized_central_moments(grid);
    let hu = hu_moments(&eta);
    let mut f = [0.0; MOMENT_FEATURES];
    f[0] = grid.area_fraction;
    f[1] = grid.centroid[0];
    f[2] = grid.centroid[1];
    f[3] = grid.bbox_aspect;
    f[4..7].copy_from_slice(&eta[..3]);
    // The seventh Hu moment changes sign under reflection and is left out.
    for (dst, h) in f[7..].iter_mut().zip(&hu[..6]) {
        *dst = signed_log(*h);
    }
    f
}

/// Feature scales: area, centroid, aspect and second-order moments at unit
/// scale (skew moment tripled), the Hu logs shrunk to a comparable range.
pub const DEFAULT_FEATURE_WEIGHTS: [f64; MOMENT_FEATURES] = [
    1.0, 1.0, 1.0, 0.3, 1.0, 3.0, 1.0, 0.03, 0.03, 0.03, 0.03, 0.03, 0.03,
];

/// `target_dim x MOMENT_FEATURES` matrix with orthonormal columns.
pub fn moment_projection(target_dim: usize, seed: u64) -> Result<DMatrix<f64>> {
    if target_dim < MOMENT_FEATURES {
        return Err(Error::validation(
            "target_dim",
            format!("must be >= {MOMENT_FEATURES}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, task_id("moment-projection")));
    let g = DMatrix::from_fn(target_dim, MOMENT_FEATURES, |_, _| {
        StandardNormal.sample(&mut rng)
    });
    Ok(g.qr().q())
}

pub fn encode_moments(
    grid: &MaskGrid,
    target_dim: usize,
    projection_seed: u64,
    gain: f64,
) -> Result<Vec<f64>> {
    let p = moment_projection(target_dim, projection_seed)?;
    Ok(project_features(&p, grid, &DEFAULT_FEATURE_WEIGHTS, gain))
}

fn project_features(
    p: &DMatrix<f64>,
    grid: &MaskGrid,
    weights: &[f64; MOMENT_FEATURES],
    gain: f64,
) -> Vec<f64> {
    let f = moment_features(grid);
    let f = DVector::from_iterator(MOMENT_FEATURES, f.iter().zip(weights).map(|(v, w)| v * w));
    (p * f * gain).iter().copied().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    /// Linear hidden layer; used for gradient-check toy nets.
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub max_step_halvings: u32,
    pub activation: Activation,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 5.0,
            epochs: 300,
            seed: 0,
            max_step_halvings: 10,
            activation: Activation::Tanh,
        }
    }
}

/// Dense autoencoder: `input -> activation(W1 x + b1) -> W2 z + b2`.
/// Weight matrices are stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderParams {
    pub input_dim: usize,
    pub bottleneck_dim: usize,
    pub training: TrainingConfig,
    pub encoder_weights: Vec<f64>,
    pub encoder_bias: Vec<f64>,
    pub decoder_weights: Vec<f64>,
    pub decoder_bias: Vec<f64>,
    pub loss_trace: Vec<f64>,
}

struct Net {
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
    act: Activation,
}

struct Grads {
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
}

impl Net {
    fn from_params(p: &AutoencoderParams) -> Net {
        Net {
            w1: DMatrix::from_row_slice(p.bottleneck_dim, p.input_dim, &p.encoder_weights),
            b1: DVector::from_column_slice(&p.encoder_bias),
            w2: DMatrix::from_row_slice(p.input_dim, p.bottleneck_dim, &p.decoder_weights),
            b2: DVector::from_column_slice(&p.decoder_bias),
            act: p.training.activation,
        }
    }

    fn store(&self, p: &mut AutoencoderParams) {
        p.encoder_weights = self.w1.transpose().as_slice().to_vec();
        p.encoder_bias = self.b1.as_slice().to_vec();
        p.decoder_weights = self.w2.transpose().as_slice().to_vec();
        p.decoder_bias = self.b2.as_slice().to_vec();
    }

    fn hidden(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut a = &self.w1 * x;
        for mut col in a.column_iter_mut() {
            col += &self.b1;
        }
        a.apply(|v| *v = self.act.apply(*v));
        a
    }

    fn loss(&self, x: &DMatrix<f64>) -> f64 {
        let z = self.hidden(x);
        let mut y = &self.w2 * z;
        for mut col in y.column_iter_mut() {
            col += &self.b2;
        }
        (y - x).norm_squared() / x.len() as f64
    }

    fn loss_and_grads(&self, x: &DMatrix<f64>) -> (f64, Grads) {
        let z = self.hidden(x);
        let mut y = &self.w2 * &z;
        for mut col in y.column_iter_mut() {
            col += &self.b2;
        }
        let e = y - x;
        let n = x.len() as f64;
        let loss = e.norm_squared() / n;
        let g = e * (2.0 / n);
        let w2 = &g * z.transpose();
        let b2 = g.column_sum();
        let mut da = self.w2.transpose() * &g;
        da.zip_apply(&z, |d, zv| *d *= self.act.derivative_from_output(zv));
        let w1 = &da * x.transpose();
        let b1 = da.column_sum();
        (loss, Grads { w1, b1, w2, b2 })
    }

    fn step(&self, g: &Grads, lr: f64) -> Net {
        Net {
            w1: &self.w1 - &g.w1 * lr,
            b1: &self.b1 - &g.b1 * lr,
            w2: &self.w2 - &g.w2 * lr,
            b2: &self.b2 - &g.b2 * lr,
            act: self.act,
        }
    }
}

fn init_params(
    input_dim: usize,
    bottleneck_dim: usize,
    training: &TrainingConfig,
) -> AutoencoderParams {
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(training.seed, task_id("autoencoder-init")));
    let mut gauss = |n: usize, scale: f64| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect()
    };
    let encoder_weights = gauss(bottleneck_dim * input_dim, 1.0 / (input_dim as f64).sqrt());
    // Small decoder keeps the first-layer curvature low early in training.
    let decoder_weights = gauss(
        input_dim * bottleneck_dim,
        0.01 / (bottleneck_dim as f64).sqrt(),
    );
    AutoencoderParams {
        input_dim,
        bottleneck_dim,
        training: training.clone(),
        encoder_weights,
        encoder_bias: vec![0.0; bottleneck_dim],
        decoder_weights,
        decoder_bias: vec![0.0; input_dim],
        loss_trace: Vec::new(),
    }
}

/// Full-batch gradient descent on mean squared reconstruction error.
///
/// A step that would raise the loss is retried at half the step size; once
/// `max_step_halvings` halvings are used up, a further increase fails the run.
/// The recorded loss trace is therefore non-increasing.
pub fn ae_train_vectors(
    samples: &[Vec<f64>],
    bottleneck_dim: usize,
    training: &TrainingConfig,
) -> Result<AutoencoderParams> {
    if samples.len() < 2 {
        return Err(Error::validation(
            "grids",
            "need at least 2 training samples",
        ));
    }
    let input_dim = samples[0].len();
    for s in samples {
        Error::check_dim(input_dim, s.len())?;
    }
    if bottleneck_dim == 0 {
        return Err(Error::validation("bottleneck_dim", "must be >= 1"));
    }
    if !(training.learning_rate.is_finite() && training.learning_rate > 0.0) {
        return Err(Error::validation("learning_rate", "must be finite and > 0"));
    }
    let x = DMatrix::from_fn(input_dim, samples.len(), |r, c| samples[c][r]);
    let mut params = init_params(input_dim, bottleneck_dim, training);
    let mut net = Net::from_params(&params);
    let mut lr = training.learning_rate;
    let mut halvings = 0;
    let (mut loss, mut grads) = net.loss_and_grads(&x);
    let mut trace = vec![loss];
    'epochs: for _ in 0..training.epochs {
        loop {
            let candidate = net.step(&grads, lr);
            let candidate_loss = candidate.loss(&x);
            if candidate_loss.is_finite() && candidate_loss <= loss {
                net = candidate;
                break;
            }
            if halvings >= training.max_step_halvings {
                // Out of step reductions: a run that made progress stops here.
                if trace.len() > 1 && loss < trace[0] {
                    break 'epochs;
                }
                return Err(Error::TrainingFailed {
                    last_loss: loss,
                    loss_trace: trace,
                });
            }
            lr *= 0.5;
            halvings += 1;
        }
        (loss, grads) = net.loss_and_grads(&x);
        trace.push(loss);
    }
    net.store(&mut params);
    params.loss_trace = trace;
    Ok(params)
}

/// Trains a mask autoencoder whose embedding (bottleneck plus the three
/// metadata values) has length `target_dim`.
pub fn ae_train(
    grids: &[MaskGrid],
    target_dim: usize,
    training: &TrainingConfig,
) -> Result<AutoencoderParams> {
    if target_dim <= METADATA_DIM {
        return Err(Error::validation(
            "target_dim",
            format!("must exceed {METADATA_DIM}"),
        ));
    }
    if let Some(g) = grids.first() {
        for other in grids {
            if other.size != g.size {
                return Err(Error::validation("grids", "mixed grid sizes"));
            }
        }
    }
    let samples: Vec<Vec<f64>> = grids.iter().map(MaskGrid::to_input).collect();
    ae_train_vectors(&samples, target_dim - METADATA_DIM, training)
}

/// Bottleneck activation for a raw input vector.
pub fn ae_compress(params: &AutoencoderParams, input: &[f64]) -> Result<Vec<f64>> {
    Error::check_dim(params.input_dim, input.len())?;
    let net = Net::from_params(params);
    let x = DMatrix::from_column_slice(input.len(), 1, input);
    Ok(net.hidden(&x).as_slice().to_vec())
}

pub fn ae_reconstruct(params: &AutoencoderParams, input: &[f64]) -> Result<Vec<f64>> {
    Error::check_dim(params.input_dim, input.len())?;
    let net = Net::from_params(params);
    let x = DMatrix::from_column_slice(input.len(), 1, input);
    let z = net.hidden(&x);
    Ok((&net.w2 * z + &net.b2).as_slice().to_vec())
}

/// Bottleneck activation followed by centroid x, centroid y and area fraction.
pub fn ae_encode(params: &AutoencoderParams, grid: &MaskGrid) -> Result<Vec<f64>> {
    if grid.count() == 0 {
        return Err(Error::validation("grid", "empty grid"));
    }
    let mut out = ae_compress(params, &grid.to_input())?;
    out.extend_from_slice(&grid.metadata());
    Ok(out)
}

pub fn ae_loss(params: &AutoencoderParams, samples: &[Vec<f64>]) -> Result<f64> {
    for s in samples {
        Error::check_dim(params.input_dim, s.len())?;
    }
    let x = DMatrix::from_fn(params.input_dim, samples.len(), |r, c| samples[c][r]);
    Ok(Net::from_params(params).loss(&x))
}

/// Largest relative error between central finite differences (step `h`) and
/// the analytic gradient of the reconstruction loss on `samples`, over 100
/// randomly chosen weights and biases.
pub fn ae_gradient_check(
    params: &AutoencoderParams,
    samples: &[Vec<f64>],
    h: f64,
    seed: u64,
) -> Result<f64> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::validation("h", "must be finite and > 0"));
    }
    if samples.is_empty() {
        return Err(Error::validation("grids", "need at least one sample"));
    }
    for s in samples {
        Error::check_dim(params.input_dim, s.len())?;
    }
    let x = DMatrix::from_fn(params.input_dim, samples.len(), |r, c| samples[c][r]);
    let net = Net::from_params(params);
    let (_, grads) = net.loss_and_grads(&x);
    let (n_in, n_h) = (params.input_dim, params.bottleneck_dim);
    let sizes = [n_in * n_h, n_h, n_in * n_h, n_in];
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, task_id("gradient-check")));
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut k = rng.random_range(0..total);
        let mut block = 0;
        while k >= sizes[block] {
            k -= sizes[block];
            block += 1;
        }
        let perturbed = |delta: f64| -> f64 {
            let mut n = Net {
                w1: net.w1.clone(),
                b1: net.b1.clone(),
                w2: net.w2.clone(),
                b2: net.b2.clone(),
                act: net.act,
            };
            match block {
                0 => n.w1[(k / n_in, k % n_in)] += delta,
                1 => n.b1[k] += delta,
                2 => n.w2[(k / n_h, k % n_h)] += delta,
                _ => n.b2[k] += delta,
            }
            n.loss(&x)
        };
        let numeric = (perturbed(h) - perturbed(-h)) / (2.0 * h);
        let analytic = match block {
            0 => grads.w1[(k / n_in, k % n_in)],
            1 => grads.b1[k],
            2 => grads.w2[(k / n_h, k % n_h)],
            _ => grads.b2[k],
        };
        let scale = numeric.abs().max(analytic.abs());
        if scale > 0.0 {
            worst = worst.max((numeric - analytic).abs() / scale);
        }
    }
    Ok(worst)
}

/// Maps an instance mask to a semantic embedding.
pub trait SemanticEncoder: Sync {
    fn dim(&self) -> usize;
    fn encode(&self, mask: &InstanceMask) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone)]
pub struct MomentEncoder {
    pub grid_size: usize,
    pub target_dim: usize,
    pub gain: f64,
    /// Per-feature scale applied before projection.
    pub weights: [f64; MOMENT_FEATURES],
    projection: DMatrix<f64>,
}

impl MomentEncoder {
    pub fn new(target_dim: usize, projection_seed: u64, gain: f64) -> Result<Self> {
        Ok(MomentEncoder {
            grid_size: DEFAULT_GRID_SIZE,
            target_dim,
            gain,
            weights: DEFAULT_FEATURE_WEIGHTS,
            projection: moment_projection(target_dim, projection_seed)?,
        })
    }
}

impl SemanticEncoder for MomentEncoder {
    fn dim(&self) -> usize {
        self.target_dim
    }

    fn encode(&self, mask: &InstanceMask) -> Result<Vec<f64>> {
        let grid = rasterize_mask(&mask.bitmap, self.grid_size)?;
        Ok(project_features(
            &self.projection,
            &grid,
            &self.weights,
            self.gain,
        ))
    }
}

#[derive(Debug, Clone)]
pub struct AutoencoderEncoder {
    pub params: AutoencoderParams,
    pub grid_size: usize,
    pub gain: f64,
}

impl SemanticEncoder for AutoencoderEncoder {
    fn dim(&self) -> usize {
        self.params.bottleneck_dim + METADATA_DIM
    }

    fn encode(&self, mask: &InstanceMask) -> Result<Vec<f64>> {
        let grid = rasterize_mask(&mask.bitmap, self.grid_size)?;
        let mut e = ae_encode(&self.params, &grid)?;
        e.iter_mut().for_each(|v| *v *= self.gain);
        Ok(e)
    }
}
