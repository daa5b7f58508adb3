//! Failure identification: a channel-shared two-layer network that predicts
//! each channel's forecast MSE from its input window, its forecast, and a
//! learned channel embedding.

use serde::{Deserialize, Serialize};

use crate::error::{PirError, Result};
use crate::tensor::{GraphBuilder, NodeId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyConfig {
    pub embed_dim: usize,
    pub hidden: usize,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        UncertaintyConfig { embed_dim: 32, hidden: 128 }
    }
}

/// Shapes of the estimator; its parameters live in a [`ParamStore`] under `ue.*`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyNet {
    pub config: UncertaintyConfig,
    pub n_channels: usize,
    pub l_in: usize,
    pub l_out: usize,
}

pub const UE_EMBEDDING: &str = "ue.embedding";

impl UncertaintyNet {
    pub fn new(config: UncertaintyConfig, n_channels: usize, l_in: usize, l_out: usize) -> Self {
        UncertaintyNet { config, n_channels, l_in, l_out }
    }

    fn input_dim(&self) -> usize {
        self.l_in + self.l_out + self.config.embed_dim
    }

    pub fn init_params(&self, params: &mut ParamStore, seed: u64) {
        let (d, h, din) = (self.config.embed_dim, self.config.hidden, self.input_dim());
        // embeddings have no fan-in; scale them like a unit-width layer
        params.init_uniform(UE_EMBEDDING, &[self.n_channels, d], 1, seed);
        params.init_uniform("ue.fc1.w", &[din, h], din, seed);
        params.init_uniform("ue.fc1.b", &[1, h], din, seed);
        params.init_uniform("ue.fc2.w", &[h, 1], h, seed);
        params.init_uniform("ue.fc2.b", &[1, 1], h, seed);
    }

    /// Adds `δ = f([x ∥ ȳ ∥ E])` to the graph; returns the `N x 1` node.
    pub fn build(&self, g: &mut GraphBuilder, x: NodeId, ybar: NodeId) -> Result<NodeId> {
        let (d, h, din) = (self.config.embed_dim, self.config.hidden, self.input_dim());
        let e = g.param(UE_EMBEDDING, &[self.n_channels, d]);
        let z = g.concat(&[x, ybar, e], 1)?;
        let w1 = g.param("ue.fc1.w", &[din, h]);
        let b1 = g.param("ue.fc1.b", &[1, h]);
        let w2 = g.param("ue.fc2.w", &[h, 1]);
        let b2 = g.param("ue.fc2.b", &[1, 1]);
        let hidden = g.affine(z, w1, b1)?;
        let hidden = g.gelu(hidden)?;
        g.affine(hidden, w2, b2)
    }

    fn check(&self, x: &Tensor, ybar: &Tensor) -> Result<()> {
        if x.rows() != self.n_channels || ybar.rows() != self.n_channels {
            return Err(PirError::invalid(format!(
                "estimator has {} channel embeddings; got x with {} and ȳ with {} channels",
                self.n_channels,
                x.rows(),
                ybar.rows()
            )));
        }
        Ok(())
    }
}

/// Adds the per-channel horizon-mean squared error `m = mean_t (ȳ - y)²` (`N x 1`).
pub fn build_realized_mse(g: &mut GraphBuilder, ybar: NodeId, y: NodeId) -> Result<NodeId> {
    let r = g.sub(ybar, y)?;
    let sq = g.mul(r, r)?;
    g.row_mean(sq)
}

/// Adds `L_ue = mean_i |δ_i - m_i|`.
pub fn build_uncertainty_loss(g: &mut GraphBuilder, delta: NodeId, ybar: NodeId, y: NodeId) -> Result<NodeId> {
    let m = build_realized_mse(g, ybar, y)?;
    g.mae_loss(delta, m)
}

/// Per-channel predicted squared error for one instance.
pub fn estimate_uncertainty(
    x: &Tensor,
    ybar: &Tensor,
    net: &UncertaintyNet,
    params: &ParamStore,
) -> Result<Vec<f64>> {
    net.check(x, ybar)?;
    let mut g = GraphBuilder::new();
    let xn = g.input("x", &[x.rows(), x.cols()]);
    let yn = g.input("ybar", &[ybar.rows(), ybar.cols()]);
    let delta = net.build(&mut g, xn, yn)?;
    g.output("delta", delta);
    let graph = g.build();
    let mut sess = graph.session();
    sess.forward(params, &[("x", x), ("ybar", ybar)])?;
    Ok(sess.get("delta")?.data().to_vec())
}

/// Per-channel realized MSE of a forecast.
pub fn realized_mse(ybar: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
    if ybar.shape() != y.shape() {
        return Err(PirError::Shape {
            node: "realized_mse".into(),
            detail: format!("{:?} vs {:?}", ybar.shape(), y.shape()),
        });
    }
    let l = ybar.cols() as f64;
    Ok((0..ybar.rows())
        .map(|c| ybar.row(c).iter().zip(y.row(c)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / l)
        .collect())
}

/// `L_ue = (1/N) Σ_i |δ_i - m_i|` with `m_i` the horizon-mean squared error.
pub fn uncertainty_loss(delta: &[f64], ybar: &Tensor, y: &Tensor) -> Result<f64> {
    let m = realized_mse(ybar, y)?;
    if delta.len() != m.len() {
        return Err(PirError::Shape {
            node: "uncertainty_loss".into(),
            detail: format!("{} estimates for {} channels", delta.len(), m.len()),
        });
    }
    Ok(delta.iter().zip(&m).map(|(d, m)| (d - m).abs()).sum::<f64>() / m.len() as f64)
}
