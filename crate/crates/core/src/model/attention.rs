use candle_core::Tensor;

use super::layers::{LayerNorm, Linear};
use super::params::ParamBuilder;
use crate::error::{shape_err, Error, Result};
use crate::objectives::{normalized_grid, softmax_last};

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, kv_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!("width {dim} not divisible by {heads} heads")));
        }
        pb.scope(name, |pb| {
            Ok(Self {
                q: Linear::new(pb, "q", dim, dim)?,
                k: Linear::new(pb, "k", kv_dim, dim)?,
                v: Linear::new(pb, "v", kv_dim, dim)?,
                o: Linear::new(pb, "o", dim, dim)?,
                heads,
            })
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let dh = c / self.heads;
        Ok(x.reshape((b, n, self.heads, dh))?.transpose(1, 2)?.contiguous()?.reshape((b * self.heads, n, dh))?)
    }

    /// `q_in` (b, nq, dim), `k_in`/`v_in` (b, nk, kv_dim). Returns the output
    /// tokens and per-head weights `(b, heads, nq, nk)`.
    pub fn forward(&self, q_in: &Tensor, k_in: &Tensor, v_in: &Tensor, check_finite: bool) -> Result<(Tensor, Tensor)> {
        let (b, nq, c) = q_in.dims3()?;
        let nk = k_in.dims3()?.1;
        let dh = c / self.heads;
        let q = self.split_heads(&self.q.forward(q_in)?)?;
        let k = self.split_heads(&self.k.forward(k_in)?)?;
        let v = self.split_heads(&self.v.forward(v_in)?)?;
        let logits = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (dh as f64).sqrt())?;
        if check_finite {
            let total: f64 = logits.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar()?;
            if !total.is_finite() {
                return Err(Error::NonFinite("attention logits".into()));
            }
        }
        let p = softmax_last(&logits)?;
        let out = p.matmul(&v)?.reshape((b, self.heads, nq, dh))?.transpose(1, 2)?.contiguous()?.reshape((b, nq, c))?;
        Ok((self.o.forward(&out)?, p.reshape((b, self.heads, nq, nk))?))
    }
}

/// Fixed 2-D sinusoidal features of the normalized cell grid, `(h·w, dim)`.
pub fn grid_position_features(h: usize, w: usize, dim: usize) -> Result<Vec<f64>> {
    let grid = normalized_grid(h, w)?;
    let bands = dim / 4;
    let mut out = vec![0.0; h * w * dim];
    for n in 0..h * w {
        let [gx, gy] = grid.coords()[n];
        for f in 0..bands {
            let freq = std::f64::consts::PI * (f + 1) as f64 / 2.0;
            let row = &mut out[n * dim..];
            row[4 * f] = (freq * gx).sin();
            row[4 * f + 1] = (freq * gx).cos();
            row[4 * f + 2] = (freq * gy).sin();
            row[4 * f + 3] = (freq * gy).cos();
        }
    }
    Ok(out)
}

/// Decoder-side conditioning block: self-attention, cross-attention onto the
/// spatial-encoder tokens, feed-forward, then a zero-initialized output map
/// added back onto the block input.
#[derive(Debug, Clone)]
pub struct ZeroCrossAttentionBlock {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    norm_kv: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    zero_out: Linear,
    dim: usize,
    kv_dim: usize,
    heads: usize,
    pos_enc: bool,
    max_tokens: usize,
}

/// Output of one block application.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    /// Same layout as the block input.
    pub out: Tensor,
    /// Head-averaged cross-attention weights `(b, nq, nk)`.
    pub attn: Tensor,
}

impl ZeroCrossAttentionBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        ff_mult: usize,
        pos_enc: bool,
        max_tokens: usize,
    ) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(Self {
                norm_self: LayerNorm::new(pb, "norm_self", dim)?,
                self_attn: MultiHeadAttention::new(pb, "self_attn", dim, dim, heads)?,
                norm_cross: LayerNorm::new(pb, "norm_cross", dim)?,
                norm_kv: LayerNorm::new(pb, "norm_kv", kv_dim)?,
                cross_attn: MultiHeadAttention::new(pb, "cross_attn", dim, kv_dim, heads)?,
                norm_ff: LayerNorm::new(pb, "norm_ff", dim)?,
                ff_in: Linear::new(pb, "ff_in", dim, ff_mult * dim)?,
                ff_out: Linear::new(pb, "ff_out", ff_mult * dim, dim)?,
                zero_out: Linear::zeros(pb, "zero_out", dim, dim)?,
                dim,
                kv_dim,
                heads,
                pos_enc,
                max_tokens,
            })
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Feature-map interface: `x` (b, H_q, W_q, dim), `kv` (b, h_k, w_k, kv_dim).
    pub fn forward(&self, x: &Tensor, kv: &Tensor) -> Result<BlockOutput> {
        let (b, hq, wq, c) = x.dims4()?;
        let (bk, hk, wk, ck) = kv.dims4()?;
        if c != self.dim || ck != self.kv_dim || b != bk {
            return shape_err(format!(
                "block expects ({b}, _, _, {}) and ({b}, _, _, {}), got {:?} and {:?}",
                self.dim,
                self.kv_dim,
                x.dims(),
                kv.dims()
            ));
        }
        let (q_pos, k_pos) = if self.pos_enc {
            let dev = x.device();
            let qp = Tensor::from_vec(grid_position_features(hq, wq, c)?, (1, hq * wq, c), dev)?.to_dtype(x.dtype())?;
            let kp = Tensor::from_vec(grid_position_features(hk, wk, ck)?, (1, hk * wk, ck), dev)?.to_dtype(x.dtype())?;
            (Some(qp), Some(kp))
        } else {
            (None, None)
        };
        let xt = x.reshape((b, hq * wq, c))?;
        let kvt = kv.reshape((b, hk * wk, ck))?;
        let r = self.forward_tokens(&xt, &kvt, q_pos.as_ref(), k_pos.as_ref())?;
        Ok(BlockOutput { out: r.out.reshape((b, hq, wq, c))?, attn: r.attn })
    }

    /// Token interface: `x` (b, nq, dim), `kv` (b, nk, kv_dim); optional position
    /// features broadcast over the batch are added to the query/key inputs.
    pub fn forward_tokens(
        &self,
        x: &Tensor,
        kv: &Tensor,
        q_pos: Option<&Tensor>,
        k_pos: Option<&Tensor>,
    ) -> Result<BlockOutput> {
        let nq = x.dims3()?.1;
        let nk = kv.dims3()?.1;
        if nq.max(nk) > self.max_tokens {
            return Err(Error::InvalidArgument(format!(
                "token count {} exceeds configured maximum {}",
                nq.max(nk),
                self.max_tokens
            )));
        }
        let hs = self.norm_self.forward(x)?;
        let h1 = (x + self.self_attn.forward(&hs, &hs, &hs, false)?.0)?;

        let hc = self.norm_cross.forward(&h1)?;
        let kvn = self.norm_kv.forward(kv)?;
        let q_in = match q_pos {
            Some(p) => hc.broadcast_add(p)?,
            None => hc,
        };
        let k_in = match k_pos {
            Some(p) => kvn.broadcast_add(p)?,
            None => kvn.clone(),
        };
        let (cross, probs) = self.cross_attn.forward(&q_in, &k_in, &kvn, true)?;
        let h2 = (&h1 + cross)?;

        let f = self.ff_out.forward(&self.ff_in.forward(&self.norm_ff.forward(&h2)?)?.gelu()?)?;
        let h3 = (&h2 + f)?;
        let out = (x + self.zero_out.forward(&h3)?)?;
        Ok(BlockOutput { out, attn: probs.mean(1)? })
    }
}
