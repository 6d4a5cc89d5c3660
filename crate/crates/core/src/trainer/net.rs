//! Toy frame-level network: two ReLU layers, temporal pooling and a linear
//! projection to the embedding.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::pooling::{MqmhaParams, Pooling};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolingKind {
    Gsp,
    Mqmha { heads: usize, queries: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub pooling: PoolingKind,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { input_dim: 81, hidden: 128, channels: 64, embed_dim: 128, pooling: PoolingKind::Gsp }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub pooling: Pooling,
    pub proj: Array2<f64>,
    pub bproj: Array1<f64>,
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || std * rng.sample::<f64, _>(StandardNormal))
}

/// Intermediate values kept from the forward pass.
pub struct Cache {
    input: Array2<f64>,
    z1: Array2<f64>,
    h1: Array2<f64>,
    z2: Array2<f64>,
    h2: Array2<f64>,
    pooled: Array1<f64>,
}

impl ToyNet {
    pub fn init<R: Rng + ?Sized>(cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        if cfg.input_dim == 0 || cfg.hidden == 0 || cfg.channels == 0 || cfg.embed_dim == 0 {
            return Err(Error::InvalidConfig(format!("network sizes must be positive: {cfg:?}")));
        }
        let pooling = match cfg.pooling {
            PoolingKind::Gsp => Pooling::Gsp,
            PoolingKind::Mqmha { heads, queries } => {
                let mut p = MqmhaParams::zeros(cfg.channels, heads, queries)?;
                let (r, c) = p.query_weights.dim();
                p.query_weights = gaussian_matrix(r, c, 0.01, rng);
                Pooling::Mqmha(p)
            }
        };
        let pooled = pooling.output_dim(cfg.channels);
        Ok(Self {
            w1: gaussian_matrix(cfg.input_dim, cfg.hidden, (2.0 / cfg.input_dim as f64).sqrt(), rng),
            b1: Array1::zeros(cfg.hidden),
            w2: gaussian_matrix(cfg.hidden, cfg.channels, (2.0 / cfg.hidden as f64).sqrt(), rng),
            b2: Array1::zeros(cfg.channels),
            pooling,
            proj: gaussian_matrix(pooled, cfg.embed_dim, (1.0 / pooled as f64).sqrt(), rng),
            bproj: Array1::zeros(cfg.embed_dim),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.proj.ncols()
    }

    fn check(&self) -> Result<()> {
        let ok = self.b1.len() == self.w1.ncols()
            && self.w2.nrows() == self.w1.ncols()
            && self.b2.len() == self.w2.ncols()
            && self.proj.nrows() == self.pooling.output_dim(self.w2.ncols())
            && self.bproj.len() == self.proj.ncols();
        if !ok {
            return Err(Error::Internal("inconsistent network parameter shapes".into()));
        }
        Ok(())
    }

    pub fn forward(&self, frames: ArrayView2<f64>) -> Result<(Array1<f64>, Cache)> {
        self.check()?;
        if frames.ncols() != self.input_dim() {
            return Err(Error::DimMismatch { expected: self.input_dim(), found: frames.ncols() });
        }
        let z1 = frames.dot(&self.w1) + &self.b1;
        let h1 = z1.mapv(|v| v.max(0.0));
        let z2 = h1.dot(&self.w2) + &self.b2;
        let h2 = z2.mapv(|v| v.max(0.0));
        let pooled = self.pooling.forward(h2.view())?;
        let emb = pooled.dot(&self.proj) + &self.bproj;
        Ok((emb, Cache { input: frames.to_owned(), z1, h1, z2, h2, pooled }))
    }

    pub fn embed(&self, frames: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.forward(frames)?.0)
    }

    /// Parameter gradients for one sample given `dL/d embedding`.
    pub fn backward(&self, cache: &Cache, g_emb: ArrayView1<f64>) -> Result<ToyNet> {
        if g_emb.len() != self.embed_dim() {
            return Err(Error::GradientShape(format!(
                "embedding gradient has {} entries, embedding has {}",
                g_emb.len(),
                self.embed_dim()
            )));
        }
        let g_proj = outer(cache.pooled.view(), g_emb);
        let g_pooled = self.proj.dot(&g_emb);
        let pg = self.pooling.backward(cache.h2.view(), g_pooled.view())?;
        let g_z2 = relu_mask(pg.frames, &cache.z2);
        let g_w2 = cache.h1.t().dot(&g_z2);
        let g_b2 = g_z2.sum_axis(Axis(0));
        let g_z1 = relu_mask(g_z2.dot(&self.w2.t()), &cache.z1);
        let g_w1 = cache.input.t().dot(&g_z1);
        let g_b1 = g_z1.sum_axis(Axis(0));
        let pooling = match (&self.pooling, pg.query_weights) {
            (Pooling::Gsp, _) => Pooling::Gsp,
            (Pooling::Mqmha(p), Some(g)) => Pooling::Mqmha(MqmhaParams { query_weights: standard(g), ..p.clone() }),
            (Pooling::Mqmha(_), None) => return Err(Error::Internal("missing attention gradient".into())),
        };
        Ok(ToyNet {
            w1: standard(g_w1),
            b1: g_b1,
            w2: standard(g_w2),
            b2: g_b2,
            pooling,
            proj: standard(g_proj),
            bproj: g_emb.to_owned(),
        })
    }

    /// Same-shaped zero parameters.
    pub fn zeros_like(&self) -> ToyNet {
        let pooling = match &self.pooling {
            Pooling::Gsp => Pooling::Gsp,
            Pooling::Mqmha(p) => {
                Pooling::Mqmha(MqmhaParams { query_weights: Array2::zeros(p.query_weights.dim()), ..p.clone() })
            }
        };
        ToyNet {
            w1: Array2::zeros(self.w1.dim()),
            b1: Array1::zeros(self.b1.dim()),
            w2: Array2::zeros(self.w2.dim()),
            b2: Array1::zeros(self.b2.dim()),
            pooling,
            proj: Array2::zeros(self.proj.dim()),
            bproj: Array1::zeros(self.bproj.dim()),
        }
    }

    /// Every parameter tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v = vec![
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ];
        if let Pooling::Mqmha(p) = &self.pooling {
            v.push(p.query_weights.as_slice().expect("standard layout"));
        }
        v.push(self.proj.as_slice().expect("standard layout"));
        v.push(self.bproj.as_slice().expect("standard layout"));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = vec![
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ];
        if let Pooling::Mqmha(p) = &mut self.pooling {
            v.push(p.query_weights.as_slice_mut().expect("standard layout"));
        }
        v.push(self.proj.as_slice_mut().expect("standard layout"));
        v.push(self.bproj.as_slice_mut().expect("standard layout"));
        v
    }

    /// Adds `other` into `self` elementwise.
    pub fn accumulate(&mut self, other: &ToyNet) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    a2.dot(&b2)
}

fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() { a } else { a.as_standard_layout().into_owned() }
}

fn relu_mask(mut g: Array2<f64>, pre: &Array2<f64>) -> Array2<f64> {
    ndarray::Zip::from(&mut g).and(pre).for_each(|g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
    g
}
