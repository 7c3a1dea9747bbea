//! The trainable bridge between speech encoder and language model:
//! adaptive average pooling over time, layer normalisation, then a linear
//! projection into the decoder's embedding width.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{self, Graph, Tensor, Var};
use crate::params::{Bindings, Init, ParamGroup, ParamStore};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    /// Output sequence length after pooling.
    pub pool_len: usize,
    /// Encoder feature width.
    pub in_dim: usize,
    /// Decoder embedding width.
    pub out_dim: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            pool_len: 32,
            in_dim: 64,
            out_dim: 128,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_len == 0 || self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config(format!(
                "adapter dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Adapter weights. `ln_*` are `1 x in_dim`, `proj_w` is `in_dim x out_dim`,
/// `proj_b` is `1 x out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
}

impl AdapterParams {
    pub const NAMES: [&'static str; 4] = [
        "adapter.ln_gain",
        "adapter.ln_bias",
        "adapter.proj_w",
        "adapter.proj_b",
    ];

    /// Unit gain, zero bias, projection uniform in `±1/sqrt(in_dim)`.
    pub fn init(cfg: &AdapterConfig, init: &mut Init<'_>) -> Self {
        AdapterParams {
            ln_gain: Tensor::ones((1, cfg.in_dim)),
            ln_bias: Tensor::zeros((1, cfg.in_dim)),
            proj_w: init.linear(cfg.in_dim, cfg.out_dim),
            proj_b: Tensor::zeros((1, cfg.out_dim)),
        }
    }

    pub fn insert_into(self, store: &mut ParamStore) {
        let [g, b, w, pb] = Self::NAMES;
        store.insert(g, ParamGroup::Adapter, self.ln_gain);
        store.insert(b, ParamGroup::Adapter, self.ln_bias);
        store.insert(w, ParamGroup::Adapter, self.proj_w);
        store.insert(pb, ParamGroup::Adapter, self.proj_b);
    }

    pub fn from_store(store: &ParamStore) -> Self {
        let [g, b, w, pb] = Self::NAMES;
        AdapterParams {
            ln_gain: store.value(g).clone(),
            ln_bias: store.value(b).clone(),
            proj_w: store.value(w).clone(),
            proj_b: store.value(pb).clone(),
        }
    }
}

/// Averages input rows over windows `[floor(i*T/n), ceil((i+1)*T/n))`.
pub fn adaptive_avg_pool(x: ArrayView2<f64>, out_len: usize) -> Result<Tensor> {
    if out_len == 0 {
        return Err(Error::shape("adaptive_avg_pool", "out_len must be >= 1"));
    }
    if x.nrows() == 0 {
        return Err(Error::shape("adaptive_avg_pool", "input has no rows"));
    }
    Ok(graph::adaptive_pool_forward(
        x,
        &graph::pool_windows(x.nrows(), out_len),
    ))
}

pub fn layer_norm(x: ArrayView2<f64>, gain: &Tensor, bias: &Tensor, eps: f64) -> Tensor {
    graph::layer_norm_forward(x, gain.view(), bias.view(), eps).0
}

fn check_dims(x: (usize, usize), params: &AdapterParams, cfg: &AdapterConfig) -> Result<()> {
    let ok = x.1 == cfg.in_dim
        && params.ln_gain.dim() == (1, cfg.in_dim)
        && params.ln_bias.dim() == (1, cfg.in_dim)
        && params.proj_w.dim() == (cfg.in_dim, cfg.out_dim)
        && params.proj_b.dim() == (1, cfg.out_dim);
    if !ok || x.0 == 0 {
        return Err(Error::shape(
            "adapter_forward",
            format!("input {x:?} vs config {cfg:?}"),
        ));
    }
    Ok(())
}

/// `project(layer_norm(pool(x)))`, returning `pool_len x out_dim`.
pub fn adapter_forward(
    x: ArrayView2<f64>,
    params: &AdapterParams,
    cfg: &AdapterConfig,
) -> Result<Tensor> {
    check_dims(x.dim(), params, cfg)?;
    let pooled = adaptive_avg_pool(x, cfg.pool_len)?;
    let normed = layer_norm(pooled.view(), &params.ln_gain, &params.ln_bias, LN_EPS);
    Ok(normed.dot(&params.proj_w) + params.proj_b.row(0))
}

/// Differentiable adapter over store-bound parameters.
pub fn adapter_graph(
    g: &mut Graph,
    b: &mut Bindings<'_>,
    x: Var,
    cfg: &AdapterConfig,
) -> Result<Var> {
    let params = AdapterParams::from_store(b.store());
    check_dims(g.value(x).dim(), &params, cfg)?;
    let [gn, bn, wn, pbn] = AdapterParams::NAMES;
    let pooled = g.adaptive_pool(x, cfg.pool_len);
    let (gain, bias) = (b.var(g, gn), b.var(g, bn));
    let normed = g.layer_norm(pooled, gain, bias, LN_EPS);
    let w = b.var(g, wn);
    let proj = g.matmul(normed, w);
    let pb = b.var(g, pbn);
    Ok(g.add_row(proj, pb))
}
