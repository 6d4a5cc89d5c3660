//! Temporal pooling: global statistics (GSP) and multi-query multi-head
//! attention statistics (MQMHA), each with an analytic backward pass.
//!
//! MQMHA output layout is `[query 0: head 0 mean, head 0 std, head 1 mean,
//! head 1 std, ...], [query 1: ...]`, so it is `2 * C * q` long. With all
//! query weights zero every query block equals GSP computed per head.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Variance floor applied before every square root.
pub const VAR_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct MqmhaParams {
    pub n_heads: usize,
    pub n_queries: usize,
    /// `(n_queries * n_heads) x head_dim`; row `q * n_heads + h` scores head `h` for query `q`.
    pub query_weights: Array2<f64>,
}

impl MqmhaParams {
    pub fn zeros(channels: usize, n_heads: usize, n_queries: usize) -> Result<Self> {
        if n_heads == 0 || channels % n_heads != 0 {
            return Err(Error::InvalidHeadSplit { channels, heads: n_heads });
        }
        if n_queries == 0 {
            return Err(Error::InvalidConfig("MQMHA needs at least one query".into()));
        }
        Ok(Self {
            n_heads,
            n_queries,
            query_weights: Array2::zeros((n_queries * n_heads, channels / n_heads)),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.query_weights.ncols()
    }

    pub fn channels(&self) -> usize {
        self.head_dim() * self.n_heads
    }

    fn check(&self, channels: usize) -> Result<usize> {
        if self.n_heads == 0 || channels % self.n_heads != 0 {
            return Err(Error::InvalidHeadSplit { channels, heads: self.n_heads });
        }
        let head_dim = channels / self.n_heads;
        if self.n_queries == 0
            || self.query_weights.nrows() != self.n_queries * self.n_heads
            || self.query_weights.ncols() != head_dim
        {
            return Err(Error::InvalidConfig(format!(
                "query weights {:?} do not fit {} queries x {} heads x {} dims",
                self.query_weights.dim(),
                self.n_queries,
                self.n_heads,
                head_dim
            )));
        }
        Ok(head_dim)
    }
}

/// Pooling layer selector.
#[derive(Debug, Clone, PartialEq)]
pub enum Pooling {
    Gsp,
    Mqmha(MqmhaParams),
}

/// Gradients returned by [`Pooling::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingGrad {
    pub frames: Array2<f64>,
    pub query_weights: Option<Array2<f64>>,
}

impl Pooling {
    pub fn output_dim(&self, channels: usize) -> usize {
        match self {
            Pooling::Gsp => 2 * channels,
            Pooling::Mqmha(p) => 2 * channels * p.n_queries,
        }
    }

    pub fn forward(&self, frames: ArrayView2<f64>) -> Result<Array1<f64>> {
        check_frames(frames)?;
        match self {
            Pooling::Gsp => Ok(gsp(frames)),
            Pooling::Mqmha(p) => mqmha(frames, p),
        }
    }

    pub fn backward(&self, frames: ArrayView2<f64>, upstream: ArrayView1<f64>) -> Result<PoolingGrad> {
        check_frames(frames)?;
        let expected = self.output_dim(frames.ncols());
        if upstream.len() != expected {
            return Err(Error::GradientShape(format!(
                "upstream gradient has {} entries, forward output has {}",
                upstream.len(),
                expected
            )));
        }
        match self {
            Pooling::Gsp => Ok(PoolingGrad { frames: gsp_backward(frames, upstream), query_weights: None }),
            Pooling::Mqmha(p) => {
                let (frames, qw) = mqmha_backward(frames, p, upstream)?;
                Ok(PoolingGrad { frames, query_weights: Some(qw) })
            }
        }
    }
}

fn check_frames(frames: ArrayView2<f64>) -> Result<()> {
    if frames.nrows() == 0 || frames.ncols() == 0 {
        return Err(Error::InvalidLength(format!("empty pooling input {:?}", frames.dim())));
    }
    Ok(())
}

/// Per-channel mean followed by per-channel population std.
pub fn gsp(frames: ArrayView2<f64>) -> Array1<f64> {
    let c = frames.ncols();
    let mean = frames.mean_axis(Axis(0)).expect("nonempty input");
    let mut out = Array1::zeros(2 * c);
    out.slice_mut(s![..c]).assign(&mean);
    let centered = &frames - &mean;
    let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("nonempty input");
    out.slice_mut(s![c..]).assign(&var.mapv(|v| v.max(VAR_FLOOR).sqrt()));
    out
}

pub fn gsp_backward(frames: ArrayView2<f64>, upstream: ArrayView1<f64>) -> Array2<f64> {
    let (t, c) = frames.dim();
    let alpha = Array1::from_elem(t, 1.0 / t as f64);
    let (grad, _) = weighted_stats_backward(frames, alpha.view(), upstream.slice(s![..c]), upstream.slice(s![c..]));
    grad
}

/// Attention weights per `(query, head)` as a `(q * h) x T` matrix; each row sums to one.
pub fn attention_weights(frames: ArrayView2<f64>, p: &MqmhaParams) -> Result<Array2<f64>> {
    let head_dim = p.check(frames.ncols())?;
    let t = frames.nrows();
    let mut out = Array2::zeros((p.n_queries * p.n_heads, t));
    for q in 0..p.n_queries {
        for h in 0..p.n_heads {
            let row = q * p.n_heads + h;
            let slice = frames.slice(s![.., h * head_dim..(h + 1) * head_dim]);
            let logits = slice.dot(&p.query_weights.row(row));
            out.row_mut(row).assign(&softmax(logits.view()));
        }
    }
    Ok(out)
}

pub fn mqmha(frames: ArrayView2<f64>, p: &MqmhaParams) -> Result<Array1<f64>> {
    let head_dim = p.check(frames.ncols())?;
    let weights = attention_weights(frames, p)?;
    let mut out = Array1::zeros(2 * frames.ncols() * p.n_queries);
    for q in 0..p.n_queries {
        for h in 0..p.n_heads {
            let row = q * p.n_heads + h;
            let slice = frames.slice(s![.., h * head_dim..(h + 1) * head_dim]);
            let (mean, std) = weighted_stats(slice, weights.row(row));
            let base = 2 * row * head_dim;
            out.slice_mut(s![base..base + head_dim]).assign(&mean);
            out.slice_mut(s![base + head_dim..base + 2 * head_dim]).assign(&std);
        }
    }
    Ok(out)
}

pub fn mqmha_backward(
    frames: ArrayView2<f64>,
    p: &MqmhaParams,
    upstream: ArrayView1<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let head_dim = p.check(frames.ncols())?;
    if upstream.len() != 2 * frames.ncols() * p.n_queries {
        return Err(Error::GradientShape(format!(
            "upstream gradient has {} entries, expected {}",
            upstream.len(),
            2 * frames.ncols() * p.n_queries
        )));
    }
    let weights = attention_weights(frames, p)?;
    let mut grad_frames = Array2::zeros(frames.dim());
    let mut grad_q = Array2::zeros(p.query_weights.dim());
    for q in 0..p.n_queries {
        for h in 0..p.n_heads {
            let row = q * p.n_heads + h;
            let cols = h * head_dim..(h + 1) * head_dim;
            let slice = frames.slice(s![.., cols.clone()]);
            let alpha = weights.row(row);
            let base = 2 * row * head_dim;
            let (gx, galpha) = weighted_stats_backward(
                slice,
                alpha,
                upstream.slice(s![base..base + head_dim]),
                upstream.slice(s![base + head_dim..base + 2 * head_dim]),
            );
            // softmax backward: dL/da_t = alpha_t * (dL/dalpha_t - sum_s alpha_s dL/dalpha_s)
            let inner = alpha.dot(&galpha);
            let glogit = &alpha * &(&galpha - inner);
            let w = p.query_weights.row(row);
            let mut gslice = grad_frames.slice_mut(s![.., cols]);
            gslice += &gx;
            for (t, &g) in glogit.iter().enumerate() {
                gslice.row_mut(t).scaled_add(g, &w);
            }
            grad_q.row_mut(row).assign(&slice.t().dot(&glogit));
        }
    }
    Ok((grad_frames, grad_q))
}

fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut e = logits.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e /= sum;
    e
}

/// Attention-weighted mean and floored weighted population std.
fn weighted_stats(x: ArrayView2<f64>, alpha: ArrayView1<f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = x.t().dot(&alpha);
    let centered = &x - &mean;
    let var = centered.mapv(|v| v * v).t().dot(&alpha);
    (mean, var.mapv(|v| v.max(VAR_FLOOR).sqrt()))
}

/// Returns `(dL/dx, dL/dalpha)` for the weighted statistics, holding the other argument fixed.
fn weighted_stats_backward(
    x: ArrayView2<f64>,
    alpha: ArrayView1<f64>,
    g_mean: ArrayView1<f64>,
    g_std: ArrayView1<f64>,
) -> (Array2<f64>, Array1<f64>) {
    let mean = x.t().dot(&alpha);
    let centered = &x - &mean;
    let sq = centered.mapv(|v| v * v);
    let var = sq.t().dot(&alpha);
    // the floor is a hard clamp, so no gradient flows through floored channels
    let g_var = ndarray::Zip::from(&var)
        .and(&g_std)
        .map_collect(|&v, &g| if v > VAR_FLOOR { g / (2.0 * v.sqrt()) } else { 0.0 });

    // with alpha fixed: dmean/dx_t = alpha_t, dvar/dx_t = 2 alpha_t (x_t - mean)
    let mut gx = &centered * &(&g_var * 2.0);
    gx += &g_mean;
    gx *= &alpha.insert_axis(Axis(1));

    // with x fixed: dmean/dalpha_t = x_t, dvar/dalpha_t = x_t^2 - 2 mean x_t = (x_t - mean)^2 - mean^2
    let galpha = x.dot(&g_mean) + sq.dot(&g_var) - mean.mapv(|m| m * m).dot(&g_var);
    (gx, galpha)
}
