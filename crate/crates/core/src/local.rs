//! Local revision: each channel's forecast becomes a token, the target-horizon
//! calendar features become one more token, and a small attention encoder
//! mixes them before a linear head emits a per-channel correction.

use serde::{Deserialize, Serialize};

use crate::data::CALENDAR_FEATURES;
use crate::error::{PirError, Result};
use crate::tensor::{GraphBuilder, NodeId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
}

impl Default for LocalConfig {
    fn default() -> Self {
        LocalConfig { d_model: 64, heads: 4, layers: 1, ff_dim: 128 }
    }
}

/// Shapes of the local reviser; parameters live under `local.*`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalReviser {
    pub config: LocalConfig,
    pub n_channels: usize,
    pub l_out: usize,
    pub n_exo: usize,
}

/// Graph nodes produced by [`LocalReviser::build`].
#[derive(Clone, Debug)]
pub struct LocalNodes {
    /// `(N+1) x d_model` initial tokens.
    pub tokens: NodeId,
    /// `N x L_out`.
    pub y_local: NodeId,
    /// Attention weights per layer and head, `(N+1) x (N+1)` each.
    pub attention: Vec<NodeId>,
}

impl LocalReviser {
    pub fn new(config: LocalConfig, n_channels: usize, l_out: usize) -> Result<Self> {
        if config.heads == 0 || !config.d_model.is_multiple_of(config.heads) {
            return Err(PirError::invalid(format!(
                "d_model {} is not divisible by {} heads",
                config.d_model, config.heads
            )));
        }
        Ok(LocalReviser { config, n_channels, l_out, n_exo: CALENDAR_FEATURES.len() })
    }

    fn exo_len(&self) -> usize {
        self.l_out * self.n_exo
    }

    pub fn init_params(&self, params: &mut ParamStore, seed: u64) {
        let LocalConfig { d_model: d, layers, ff_dim: ff, .. } = self.config;
        params.init_uniform("local.co.w", &[self.l_out, d], self.l_out, seed);
        params.init_uniform("local.co.b", &[1, d], self.l_out, seed);
        params.init_uniform("local.exo.w", &[self.exo_len(), d], self.exo_len(), seed);
        params.init_uniform("local.exo.b", &[1, d], self.exo_len(), seed);
        for l in 0..layers {
            for proj in ["q", "k", "v", "o"] {
                params.init_uniform(&format!("local.l{l}.{proj}.w"), &[d, d], d, seed);
                params.init_uniform(&format!("local.l{l}.{proj}.b"), &[1, d], d, seed);
            }
            for ln in ["ln1", "ln2"] {
                params.init_const(&format!("local.l{l}.{ln}.g"), &[1, d], 1.0);
                params.init_const(&format!("local.l{l}.{ln}.b"), &[1, d], 0.0);
            }
            params.init_uniform(&format!("local.l{l}.ff1.w"), &[d, ff], d, seed);
            params.init_uniform(&format!("local.l{l}.ff1.b"), &[1, ff], d, seed);
            params.init_uniform(&format!("local.l{l}.ff2.w"), &[ff, d], ff, seed);
            params.init_uniform(&format!("local.l{l}.ff2.b"), &[1, d], ff, seed);
        }
        // zero head: the reviser starts as an exact no-op
        params.init_const("local.head.w", &[d, self.l_out], 0.0);
        params.init_const("local.head.b", &[1, self.l_out], 0.0);
    }

    fn dense(&self, g: &mut GraphBuilder, x: NodeId, name: &str, din: usize, dout: usize) -> Result<NodeId> {
        let w = g.param(&format!("{name}.w"), &[din, dout]);
        let b = g.param(&format!("{name}.b"), &[1, dout]);
        g.affine(x, w, b)
    }

    fn norm(&self, g: &mut GraphBuilder, x: NodeId, name: &str) -> Result<NodeId> {
        let d = self.config.d_model;
        let gain = g.param(&format!("{name}.g"), &[1, d]);
        let bias = g.param(&format!("{name}.b"), &[1, d]);
        let z = g.layer_norm(x)?;
        let z = g.mul(z, gain)?;
        g.add(z, bias)
    }

    /// `ybar`: `N x L_out`; `exo`: `1 x (L_out * F)`, the flattened calendar matrix.
    pub fn build(&self, g: &mut GraphBuilder, ybar: NodeId, exo: NodeId) -> Result<LocalNodes> {
        let LocalConfig { d_model: d, heads, layers, ff_dim: ff } = self.config;
        let dh = d / heads;
        let co = self.dense(g, ybar, "local.co", self.l_out, d)?;
        let ex = self.dense(g, exo, "local.exo", self.exo_len(), d)?;
        let tokens = g.concat(&[co, ex], 0)?;

        let mut h = tokens;
        let mut attention = Vec::new();
        for l in 0..layers {
            // pre-norm residual blocks
            let z = self.norm(g, h, &format!("local.l{l}.ln1"))?;
            let q = self.dense(g, z, &format!("local.l{l}.q"), d, d)?;
            let k = self.dense(g, z, &format!("local.l{l}.k"), d, d)?;
            let v = self.dense(g, z, &format!("local.l{l}.v"), d, d)?;
            let mut outs = Vec::with_capacity(heads);
            for head in 0..heads {
                let (s, e) = (head * dh, (head + 1) * dh);
                let qh = g.slice(q, 1, s, e)?;
                let kh = g.slice(k, 1, s, e)?;
                let vh = g.slice(v, 1, s, e)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
                let a = g.softmax(scores)?;
                attention.push(a);
                outs.push(g.matmul(a, vh)?);
            }
            let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
            let attn = self.dense(g, cat, &format!("local.l{l}.o"), d, d)?;
            h = g.add(h, attn)?;

            let z = self.norm(g, h, &format!("local.l{l}.ln2"))?;
            let f = self.dense(g, z, &format!("local.l{l}.ff1"), d, ff)?;
            let f = g.gelu(f)?;
            let f = self.dense(g, f, &format!("local.l{l}.ff2"), ff, d)?;
            h = g.add(h, f)?;
        }
        let variates = g.slice(h, 0, 0, self.n_channels)?;
        let y_local = self.dense(g, variates, "local.head", d, self.l_out)?;
        Ok(LocalNodes { tokens, y_local, attention })
    }

    fn check(&self, ybar: &Tensor, exo: &Tensor) -> Result<()> {
        if ybar.shape() != [self.n_channels, self.l_out] || exo.shape() != [self.l_out, self.n_exo] {
            return Err(PirError::Shape {
                node: "local reviser input".into(),
                detail: format!(
                    "ȳ {:?} and exo {:?}; expected [{}, {}] and [{}, {}]",
                    ybar.shape(),
                    exo.shape(),
                    self.n_channels,
                    self.l_out,
                    self.l_out,
                    self.n_exo
                ),
            });
        }
        Ok(())
    }

    fn run(&self, ybar: &Tensor, exo: &Tensor, params: &ParamStore) -> Result<(Tensor, Tensor, Vec<Tensor>)> {
        self.check(ybar, exo)?;
        let exo_flat = flatten_exo(exo);
        let mut g = GraphBuilder::new();
        let yn = g.input("ybar", &[self.n_channels, self.l_out]);
        let en = g.input("exo", &[1, self.exo_len()]);
        let nodes = self.build(&mut g, yn, en)?;
        g.output("tokens", nodes.tokens);
        g.output("y_local", nodes.y_local);
        for (i, a) in nodes.attention.iter().enumerate() {
            g.output(&format!("attn{i}"), *a);
        }
        let graph = g.build();
        let mut out = graph.session().evaluate(params, &[("ybar", ybar), ("exo", &exo_flat)])?;
        let attn = (0..nodes.attention.len()).map(|i| out.remove(&format!("attn{i}")).unwrap()).collect();
        Ok((out.remove("tokens").unwrap(), out.remove("y_local").unwrap(), attn))
    }
}

/// `L x F` calendar matrix as a single `1 x (L*F)` row.
pub fn flatten_exo(exo: &Tensor) -> Tensor {
    Tensor::row_vector(exo.data().to_vec())
}

/// The `(N+1) x d_model` token matrix before the encoder.
pub fn embed_tokens(ybar: &Tensor, exo: &Tensor, model: &LocalReviser, params: &ParamStore) -> Result<Tensor> {
    Ok(model.run(ybar, exo, params)?.0)
}

/// The local correction `N x L_out`.
pub fn local_revise(ybar: &Tensor, exo: &Tensor, model: &LocalReviser, params: &ParamStore) -> Result<Tensor> {
    Ok(model.run(ybar, exo, params)?.1)
}

/// Attention weight matrices, ordered by layer then head.
pub fn attention_weights(
    ybar: &Tensor,
    exo: &Tensor,
    model: &LocalReviser,
    params: &ParamStore,
) -> Result<Vec<Tensor>> {
    Ok(model.run(ybar, exo, params)?.2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(n: usize, l_out: usize) -> (LocalReviser, ParamStore) {
        let cfg = LocalConfig { d_model: 8, heads: 2, layers: 1, ff_dim: 16 };
        let m = LocalReviser::new(cfg, n, l_out).unwrap();
        let mut p = ParamStore::new();
        m.init_params(&mut p, 3);
        (m, p)
    }

    #[test]
    fn token_count_and_zero_output_at_init() {
        let (m, p) = setup(7, 4);
        let ybar = Tensor::full(&[7, 4], 0.3);
        let exo = Tensor::full(&[4, 5], 0.1);
        assert_eq!(embed_tokens(&ybar, &exo, &m, &p).unwrap().shape(), &[8, 8]);
        let y = local_revise(&ybar, &exo, &m, &p).unwrap();
        assert_eq!(y.shape(), &[7, 4]);
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_inputs_give_bias_tokens() {
        let (m, p) = setup(3, 4);
        let tokens = embed_tokens(&Tensor::zeros(&[3, 4]), &Tensor::zeros(&[4, 5]), &m, &p).unwrap();
        let co_b = p.get("local.co.b").unwrap().data();
        let exo_b = p.get("local.exo.b").unwrap().data();
        for r in 0..3 {
            assert_eq!(tokens.row(r), co_b);
        }
        assert_eq!(tokens.row(3), exo_b);
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = LocalConfig { d_model: 10, heads: 4, layers: 1, ff_dim: 8 };
        assert!(LocalReviser::new(cfg, 2, 4).is_err());
    }
}
