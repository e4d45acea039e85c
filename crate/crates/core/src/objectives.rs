//! Training objectives: noise-prediction MSE, the attention center-coordinate
//! map and its masked total variation, and the combined finetune loss.
//!
//! Each objective has a batched tensor form used inside training (so it
//! participates in backprop) and an array form over the plain types below.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::LatentTensor;

/// Row-normalization tolerance for attention maps.
pub const ROW_SUM_TOL: f64 = 1e-6;

/// Head-averaged cross-attention weights `(H_q, W_q, h_k, w_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    query_dims: (usize, usize),
    key_dims: (usize, usize),
    weights: Vec<f64>,
}

impl AttentionMap {
    /// Validates non-negativity and per-query normalization.
    pub fn new(query_dims: (usize, usize), key_dims: (usize, usize), weights: Vec<f64>) -> Result<Self> {
        let map = Self::new_unchecked(query_dims, key_dims, weights)?;
        let nk = map.key_count();
        for (q, row) in map.weights.chunks(nk).enumerate() {
            if row.iter().any(|w| !(*w >= 0.0)) {
                return invalid(format!("attention row {q} has a negative or NaN entry"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return invalid(format!("attention row {q} sums to {s}"));
            }
        }
        Ok(map)
    }

    pub(crate) fn new_unchecked(
        query_dims: (usize, usize),
        key_dims: (usize, usize),
        weights: Vec<f64>,
    ) -> Result<Self> {
        let n = query_dims.0 * query_dims.1 * key_dims.0 * key_dims.1;
        if n == 0 || weights.len() != n {
            return shape_err(format!(
                "attention weights length {} vs {query_dims:?} x {key_dims:?}",
                weights.len()
            ));
        }
        Ok(Self { query_dims, key_dims, weights })
    }

    /// From a `(H_q * W_q, h_k * w_k)` tensor.
    pub fn from_tensor(t: &Tensor, query_dims: (usize, usize), key_dims: (usize, usize)) -> Result<Self> {
        let w: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        Self::new_unchecked(query_dims, key_dims, w)
    }

    pub fn query_dims(&self) -> (usize, usize) {
        self.query_dims
    }

    pub fn key_dims(&self) -> (usize, usize) {
        self.key_dims
    }

    pub fn query_count(&self) -> usize {
        self.query_dims.0 * self.query_dims.1
    }

    pub fn key_count(&self) -> usize {
        self.key_dims.0 * self.key_dims.1
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Attention row of query `(i, j)` over flattened keys.
    pub fn row(&self, i: usize, j: usize) -> &[f64] {
        let nk = self.key_count();
        let q = i * self.query_dims.1 + j;
        &self.weights[q * nk..(q + 1) * nk]
    }

    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.row(i, j)[k * self.key_dims.1 + l]
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.weights, (1, self.query_count(), self.key_count()), device)?
            .to_dtype(dtype)?)
    }
}

/// Normalized key-grid coordinates `(h_k, w_k, 2)` in `[-1, 1]`, channel
/// order (horizontal, vertical).
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedGrid {
    dims: (usize, usize),
    coords: Vec<[f64; 2]>,
}

impl NormalizedGrid {
    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn get(&self, k: usize, l: usize) -> [f64; 2] {
        self.coords[k * self.dims.1 + l]
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let flat: Vec<f64> = self.coords.iter().flat_map(|c| c.iter().copied()).collect();
        Ok(Tensor::from_vec(flat, (self.coords.len(), 2), device)?.to_dtype(dtype)?)
    }
}

fn axis_coord(idx: usize, len: usize) -> f64 {
    if len == 1 {
        0.0
    } else {
        // integer numerator keeps mirrored cells exact negatives of each other
        (2.0 * idx as f64 - (len - 1) as f64) / (len - 1) as f64
    }
}

pub fn normalized_grid(h_k: usize, w_k: usize) -> Result<NormalizedGrid> {
    if h_k == 0 || w_k == 0 {
        return invalid("grid dimensions must be positive");
    }
    let mut coords = Vec::with_capacity(h_k * w_k);
    for k in 0..h_k {
        for l in 0..w_k {
            coords.push([axis_coord(l, w_k), axis_coord(k, h_k)]);
        }
    }
    Ok(NormalizedGrid { dims: (h_k, w_k), coords })
}

/// Per-query expected key coordinate scaled by `1 / (h_k * w_k)`, `(H_q, W_q, 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterCoordinateMap {
    dims: (usize, usize),
    values: Vec<[f64; 2]>,
}

impl CenterCoordinateMap {
    pub fn new(dims: (usize, usize), values: Vec<[f64; 2]>) -> Result<Self> {
        if values.len() != dims.0 * dims.1 {
            return shape_err("center map length does not match dims");
        }
        Ok(Self { dims, values })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn get(&self, i: usize, j: usize) -> [f64; 2] {
        self.values[i * self.dims.1 + j]
    }

    pub fn values(&self) -> &[[f64; 2]] {
        &self.values
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let flat: Vec<f64> = self.values.iter().flat_map(|c| c.iter().copied()).collect();
        Ok(Tensor::from_vec(flat, (1, self.dims.0, self.dims.1, 2), device)?.to_dtype(dtype)?)
    }
}

/// Binary query-grid mask `(H_q, W_q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryMask {
    dims: (usize, usize),
    values: Vec<f64>,
}

impl QueryMask {
    pub fn new(dims: (usize, usize), values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.0 * dims.1 {
            return shape_err("query mask length does not match dims");
        }
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return invalid("query mask must be binary");
        }
        Ok(Self { dims, values })
    }

    pub fn ones(dims: (usize, usize)) -> Self {
        Self { dims, values: vec![1.0; dims.0 * dims.1] }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values, (1, self.dims.0, self.dims.1, 1), device)?.to_dtype(dtype)?)
    }
}

/// Mean squared error between true and predicted noise.
pub fn ldm_loss(eps: &LatentTensor, eps_hat: &LatentTensor) -> Result<f64> {
    eps.ensure_same_shape(eps_hat, "ldm_loss")?;
    let n = eps.data().len() as f64;
    Ok(eps.data().iter().zip(eps_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// Batched MSE over all elements.
pub fn ldm_loss_tensor(eps: &Tensor, eps_hat: &Tensor) -> Result<Tensor> {
    if eps.dims() != eps_hat.dims() {
        return shape_err(format!("ldm_loss: {:?} vs {:?}", eps.dims(), eps_hat.dims()));
    }
    Ok((eps_hat - eps)?.sqr()?.mean_all()?)
}

/// Batched center map: `attn` is `(b, n_q, n_k)`, `grid` is `(n_k, 2)`; returns `(b, n_q, 2)`.
///
/// The grid is antisymmetric under reversal of the flattened key index, so the
/// sum is taken over mirrored pairs `(A_i - A_{n-1-i}) G_i`. Mirror-symmetric
/// attention, uniform attention in particular, then yields exactly zero.
pub fn center_map_tensor(attn: &Tensor, grid: &Tensor) -> Result<Tensor> {
    let (_, _, nk) = attn.dims3()?;
    if grid.dims() != [nk, 2] {
        return shape_err(format!("grid {:?} does not match {nk} keys", grid.dims()));
    }
    let half = nk / 2;
    if half == 0 {
        // a single key sits at the origin
        let (b, nq, _) = attn.dims3()?;
        return Ok(Tensor::zeros((b, nq, 2), attn.dtype(), attn.device())?);
    }
    let rev: Vec<u32> = (0..half as u32).map(|i| nk as u32 - 1 - i).collect();
    let rev = Tensor::from_vec(rev, half, attn.device())?;
    let front = attn.narrow(2, 0, half)?;
    let back = attn.index_select(&rev, 2)?;
    let paired = (front - back)?;
    let g = grid.narrow(0, 0, half)?;
    let f = paired.broadcast_matmul(&g)?;
    Ok((f / nk as f64)?)
}

/// Batched masked total variation. `center` is `(b, H_q, W_q, 2)`, `mask` is
/// `(b, H_q, W_q, 1)`; returns the per-sample loss `(b,)`.
pub fn atv_loss_tensor(center: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (b, hq, wq, _) = center.dims4()?;
    let masked = center.broadcast_mul(mask)?;
    let mut total = Tensor::zeros(b, center.dtype(), center.device())?;
    if hq > 1 {
        let d = (masked.narrow(1, 1, hq - 1)? - masked.narrow(1, 0, hq - 1)?)?;
        total = (total + d.abs()?.flatten_from(1)?.sum(1)?)?;
    }
    if wq > 1 {
        let d = (masked.narrow(2, 1, wq - 1)? - masked.narrow(2, 0, wq - 1)?)?;
        total = (total + d.abs()?.flatten_from(1)?.sum(1)?)?;
    }
    Ok(total)
}

pub fn center_coordinate_map(attn: &AttentionMap, grid: &NormalizedGrid) -> Result<CenterCoordinateMap> {
    if attn.key_dims() != grid.dims() {
        return shape_err(format!("attention keys {:?} vs grid {:?}", attn.key_dims(), grid.dims()));
    }
    let dev = Device::Cpu;
    let f = center_map_tensor(&attn.to_tensor(DType::F64, &dev)?, &grid.to_tensor(DType::F64, &dev)?)?;
    let flat: Vec<f64> = f.flatten_all()?.to_vec1()?;
    let values = flat.chunks(2).map(|c| [c[0], c[1]]).collect();
    CenterCoordinateMap::new(attn.query_dims(), values)
}

pub fn atv_loss(center: &CenterCoordinateMap, mask: &QueryMask) -> Result<f64> {
    if center.dims() != mask.dims() {
        return shape_err(format!("center map {:?} vs mask {:?}", center.dims(), mask.dims()));
    }
    let dev = Device::Cpu;
    let l = atv_loss_tensor(&center.to_tensor(DType::F64, &dev)?, &mask.to_tensor(DType::F64, &dev)?)?;
    Ok(l.to_vec1::<f64>()?[0])
}

/// `L = L_LDM + lambda * sum(L_ATV)`.
pub fn finetune_loss(l_ldm: f64, atv_terms: &[f64], lambda_atv: f64) -> Result<f64> {
    if !(lambda_atv >= 0.0) {
        return invalid(format!("lambda_atv must be non-negative, got {lambda_atv}"));
    }
    Ok(l_ldm + lambda_atv * atv_terms.iter().sum::<f64>())
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(logits: &Tensor) -> Result<Tensor> {
    let m = logits.max_keepdim(D::Minus1)?.detach();
    let e = logits.broadcast_sub(&m)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}
