//! The revision model: uncertainty estimate, local and global corrections,
//! and the gated residual combination `ȳ + α ⊙ y_local + β ⊙ y_global`.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::LinearBackbone;
use crate::data::{ForecastRecord, WindowInstance};
use crate::error::{PirError, Result};
use crate::identify::{build_uncertainty_loss, UncertaintyConfig, UncertaintyNet};
use crate::local::{flatten_exo, LocalConfig, LocalReviser};
use crate::retrieval::GlobalContext;
use crate::tensor::kernels::{gelu, sigmoid};
use crate::tensor::{
    read_checkpoint, write_checkpoint, Checkpoint, ComputeGraph, GraphBuilder, NodeId, ParamStore, Tensor,
};

/// Which correction branches a model uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    NoLocal,
    NoGlobal,
    None,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoLocal, Variant::NoGlobal, Variant::None];

    pub fn uses_local(self) -> bool {
        matches!(self, Variant::Full | Variant::NoGlobal)
    }

    pub fn uses_global(self) -> bool {
        matches!(self, Variant::Full | Variant::NoLocal)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoLocal => "no_local",
            Variant::NoGlobal => "no_global",
            Variant::None => "none",
        }
    }
}

impl FromStr for Variant {
    type Err = PirError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| PirError::invalid(format!("unknown variant `{s}` (full|no_local|no_global|none)")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PirConfig {
    pub n_channels: usize,
    pub l_in: usize,
    pub l_out: usize,
    /// Retrieved neighbours per query; also the width of β's similarity input.
    pub k: usize,
    #[serde(default)]
    pub uncertainty: UncertaintyConfig,
    #[serde(default)]
    pub local: LocalConfig,
    pub beta_hidden: usize,
    pub beta_bias_init: f64,
    /// Weight of the uncertainty loss.
    pub lambda: f64,
    #[serde(default)]
    pub variant: Variant,
    pub seed: u64,
    /// Fine-tune a linear backbone inside the graph instead of reading ȳ.
    #[serde(default)]
    pub joint_backbone: bool,
}

impl PirConfig {
    pub fn new(n_channels: usize, l_in: usize, l_out: usize) -> Self {
        PirConfig {
            n_channels,
            l_in,
            l_out,
            k: 10,
            uncertainty: UncertaintyConfig::default(),
            local: LocalConfig::default(),
            beta_hidden: 32,
            beta_bias_init: -2.0,
            lambda: 1.0,
            variant: Variant::Full,
            seed: 0,
            joint_backbone: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_channels == 0 || self.l_in == 0 || self.l_out == 0 || self.k == 0 {
            return Err(PirError::invalid("channels, lengths and K must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(PirError::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn uncertainty_net(&self) -> UncertaintyNet {
        UncertaintyNet::new(self.uncertainty, self.n_channels, self.l_in, self.l_out)
    }

    pub fn local_reviser(&self) -> Result<LocalReviser> {
        LocalReviser::new(self.local, self.n_channels, self.l_out)
    }
}

/// Everything the model reads for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// `N x L_in`.
    pub x: Tensor,
    /// `N x L_out` backbone forecast.
    pub ybar: Tensor,
    /// `1 x (L_out * F)` flattened calendar features.
    pub exo: Tensor,
    /// `N x L_out`.
    pub y_global: Tensor,
    /// `N x K`.
    pub w: Tensor,
    /// `N x L_out` target.
    pub y: Tensor,
}

/// Zips instances with their (aligned) forecasts and retrieval contexts.
pub fn make_samples(
    instances: &[WindowInstance],
    forecasts: &[ForecastRecord],
    contexts: &[GlobalContext],
) -> Result<Vec<Sample>> {
    if instances.len() != forecasts.len() || instances.len() != contexts.len() {
        return Err(PirError::invalid(format!(
            "{} instances, {} forecasts, {} retrieval contexts",
            instances.len(),
            forecasts.len(),
            contexts.len()
        )));
    }
    instances
        .iter()
        .zip(forecasts)
        .zip(contexts)
        .map(|((inst, f), ctx)| {
            if f.instance_id != inst.id {
                return Err(PirError::invalid(format!(
                    "forecast for instance {} is aligned with instance {}",
                    f.instance_id, inst.id
                )));
            }
            Ok(Sample {
                id: inst.id,
                x: inst.x.clone(),
                ybar: f.values.clone(),
                exo: flatten_exo(&inst.exo),
                y_global: ctx.y_global.clone(),
                w: ctx.w.clone(),
                y: inst.y.clone(),
            })
        })
        .collect()
}

/// A trained (or freshly initialized) model.
#[derive(Clone, Debug, PartialEq)]
pub struct PirModel {
    pub config: PirConfig,
    pub params: ParamStore,
    /// Whether β's branch is active. Closed during warm-up, so a new model is
    /// an exact no-op over the backbone.
    pub gate_open: bool,
}

/// Outputs of the model for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub y_pred: Tensor,
    pub delta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl PirModel {
    pub fn new(config: PirConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let seed = config.seed;
        config.uncertainty_net().init_params(&mut params, seed);
        config.local_reviser()?.init_params(&mut params, seed);
        params.init_const("gate.alpha.a", &[1, 1], 1.0);
        params.init_const("gate.alpha.b", &[1, 1], 0.0);
        let (bin, bh) = (1 + config.k, config.beta_hidden);
        params.init_uniform("gate.beta.fc1.w", &[bin, bh], bin, seed);
        params.init_uniform("gate.beta.fc1.b", &[1, bh], bin, seed);
        params.init_uniform("gate.beta.fc2.w", &[bh, 1], bh, seed);
        params.init_const("gate.beta.fc2.b", &[1, 1], config.beta_bias_init);
        if config.joint_backbone {
            return Err(PirError::invalid("joint mode needs a fitted backbone; use PirModel::with_backbone"));
        }
        Ok(PirModel { config, params, gate_open: false })
    }

    /// A joint-mode model whose in-graph linear backbone starts from `backbone`.
    pub fn with_backbone(mut config: PirConfig, backbone: &LinearBackbone) -> Result<Self> {
        config.joint_backbone = false;
        let mut model = PirModel::new(config)?;
        model.config.joint_backbone = true;
        if backbone.weights.len() != model.config.n_channels {
            return Err(PirError::invalid("backbone channel count differs from the model's"));
        }
        for (c, (w, b)) in backbone.weights.iter().zip(&backbone.bias).enumerate() {
            // stored L_out x L_in; the graph multiplies x (1 x L_in) by an L_in x L_out matrix
            let (lo, li) = (w.rows(), w.cols());
            let wt = Tensor::matrix(li, lo, (0..li * lo).map(|i| w.at(i % lo, i / lo)).collect())?;
            model.params.insert(format!("backbone.c{c}.w"), wt);
            model.params.insert(format!("backbone.c{c}.b"), Tensor::row_vector(b.clone()));
        }
        Ok(model)
    }

    /// Builds the model graph. Inputs: `x`, `ybar`, `exo`, `y_global`, `w`
    /// (and `y` when `with_targets`). Outputs: `y_pred`, `ybar`, `delta`,
    /// `alpha`, `beta`, `correction` (when a branch is active), plus `l_pr`,
    /// `l_ue`, `loss` when `with_targets`.
    pub fn graph(&self, with_targets: bool) -> Result<ComputeGraph> {
        let c = &self.config;
        let (n, l_out) = (c.n_channels, c.l_out);
        let mut g = GraphBuilder::new();
        let x = g.input("x", &[n, c.l_in]);
        let ybar = if c.joint_backbone {
            let mut rows = Vec::with_capacity(n);
            for ch in 0..n {
                let xr = g.slice(x, 0, ch, ch + 1)?;
                let w = g.param(&format!("backbone.c{ch}.w"), &[c.l_in, l_out]);
                let b = g.param(&format!("backbone.c{ch}.b"), &[1, l_out]);
                rows.push(g.affine(xr, w, b)?);
            }
            g.concat(&rows, 0)?
        } else {
            g.input("ybar", &[n, l_out])
        };

        let delta = c.uncertainty_net().build(&mut g, x, ybar)?;
        let alpha = build_alpha(&mut g, delta)?;
        let w = g.input("w", &[n, c.k]);
        let beta = build_beta(&mut g, delta, w, c.k, c.beta_hidden)?;

        let mut correction = None;
        if c.variant.uses_local() {
            let exo = g.input("exo", &[1, l_out * crate::data::CALENDAR_FEATURES.len()]);
            let local = c.local_reviser()?.build(&mut g, ybar, exo)?;
            correction = Some(g.mul(local.y_local, alpha)?);
        }
        if c.variant.uses_global() && self.gate_open {
            let y_global = g.input("y_global", &[n, l_out]);
            let term = g.mul(y_global, beta)?;
            correction = Some(match correction {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
        let y_pred = match correction {
            Some(t) => {
                g.output("correction", t);
                g.add(ybar, t)?
            }
            None => ybar,
        };
        g.output("ybar", ybar);
        g.output("y_pred", y_pred);
        g.output("delta", delta);
        g.output("alpha", alpha);
        g.output("beta", beta);

        if with_targets {
            let y = g.input("y", &[n, l_out]);
            let l_pr = g.mse_loss(y_pred, y)?;
            let l_ue = build_uncertainty_loss(&mut g, delta, ybar, y)?;
            let loss = if c.lambda == 0.0 {
                l_pr
            } else {
                let weighted = g.scale(l_ue, c.lambda)?;
                g.add(l_pr, weighted)?
            };
            g.output("l_pr", l_pr);
            g.output("l_ue", l_ue);
            g.output("loss", loss);
        }
        Ok(g.build())
    }

    pub fn predict(&self, sample: &Sample) -> Result<Prediction> {
        Ok(self.predict_all(std::slice::from_ref(sample))?.pop().expect("one sample"))
    }

    /// Predictions for every sample, in order. The graph is built once.
    pub fn predict_all(&self, samples: &[Sample]) -> Result<Vec<Prediction>> {
        let graph = self.graph(false)?;
        samples
            .iter()
            .map(|s| {
                let mut sess = graph.session();
                sess.forward(&self.params, &sample_inputs(s, false))?;
                let mut y_pred = sess.get("y_pred")?.clone();
                // an exactly-zero correction leaves ȳ untouched, including its sign bit
                if let Ok(corr) = sess.get("correction") {
                    let ybar = sess.get("ybar")?.data();
                    for ((v, &c), &b) in y_pred.data_mut().iter_mut().zip(corr.data()).zip(ybar) {
                        if c == 0.0 {
                            *v = b;
                        }
                    }
                }
                Ok(Prediction {
                    y_pred,
                    delta: sess.get("delta")?.data().to_vec(),
                    alpha: sess.get("alpha")?.data().to_vec(),
                    beta: sess.get("beta")?.data().to_vec(),
                })
            })
            .collect()
    }
}

pub(crate) fn sample_inputs(s: &Sample, with_targets: bool) -> Vec<(&'static str, &Tensor)> {
    let mut v = vec![("x", &s.x), ("ybar", &s.ybar), ("exo", &s.exo), ("y_global", &s.y_global), ("w", &s.w)];
    if with_targets {
        v.push(("y", &s.y));
    }
    v
}

/// `α = σ(a·δ + b)`, one value per channel (`N x 1`).
pub fn build_alpha(g: &mut GraphBuilder, delta: NodeId) -> Result<NodeId> {
    let a = g.param("gate.alpha.a", &[1, 1]);
    let b = g.param("gate.alpha.b", &[1, 1]);
    let z = g.mul(delta, a)?;
    let z = g.add(z, b)?;
    g.sigmoid(z)
}

/// `β = σ(MLP([δ ∥ w]))`, one value per channel (`N x 1`).
pub fn build_beta(g: &mut GraphBuilder, delta: NodeId, w: NodeId, k: usize, hidden: usize) -> Result<NodeId> {
    let z = g.concat(&[delta, w], 1)?;
    let w1 = g.param("gate.beta.fc1.w", &[1 + k, hidden]);
    let b1 = g.param("gate.beta.fc1.b", &[1, hidden]);
    let w2 = g.param("gate.beta.fc2.w", &[hidden, 1]);
    let b2 = g.param("gate.beta.fc2.b", &[1, 1]);
    let h = g.affine(z, w1, b1)?;
    let h = g.gelu(h)?;
    let o = g.affine(h, w2, b2)?;
    g.sigmoid(o)
}

/// Gate values to use instead of the learned ones (test hook).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GateOverride {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Combined {
    pub y_pred: Tensor,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// The gated residual combination evaluated directly (outside a graph), with
/// gate parameters read from `params`. Channels whose correction is exactly
/// zero keep `ȳ` bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn combine(
    ybar: &Tensor,
    y_local: &Tensor,
    y_global: &Tensor,
    delta: &[f64],
    w: &Tensor,
    params: &ParamStore,
    overrides: GateOverride,
) -> Result<Combined> {
    let (n, l) = (ybar.rows(), ybar.cols());
    if y_local.shape() != ybar.shape() || y_global.shape() != ybar.shape() || delta.len() != n || w.rows() != n {
        return Err(PirError::Shape {
            node: "combine".into(),
            detail: format!(
                "ȳ {:?}, y_local {:?}, y_global {:?}, δ [{}], w {:?}",
                ybar.shape(),
                y_local.shape(),
                y_global.shape(),
                delta.len(),
                w.shape()
            ),
        });
    }
    let get = |name: &str| params.get(name).ok_or_else(|| PirError::MissingParam(name.into()));
    let (a, b) = (get("gate.alpha.a")?.data()[0], get("gate.alpha.b")?.data()[0]);
    let (w1, b1, w2, b2) =
        (get("gate.beta.fc1.w")?, get("gate.beta.fc1.b")?, get("gate.beta.fc2.w")?, get("gate.beta.fc2.b")?);
    let k = w.cols();
    if w1.rows() != 1 + k {
        return Err(PirError::invalid(format!("β gate expects K = {}, got {k}", w1.rows() - 1)));
    }
    let hidden = w1.cols();

    let mut alpha = Vec::with_capacity(n);
    let mut beta = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(n * l);
    for i in 0..n {
        let al = overrides.alpha.unwrap_or_else(|| sigmoid(a * delta[i] + b));
        let be = overrides.beta.unwrap_or_else(|| {
            let input: Vec<f64> = std::iter::once(delta[i]).chain(w.row(i).iter().copied()).collect();
            let mut o = b2.data()[0];
            for j in 0..hidden {
                let z = b1.data()[j] + input.iter().enumerate().map(|(r, v)| v * w1.at(r, j)).sum::<f64>();
                o += gelu(z) * w2.data()[j];
            }
            sigmoid(o)
        });
        for t in 0..l {
            let r = al * y_local.at(i, t) + be * y_global.at(i, t);
            let base = ybar.at(i, t);
            out.push(if r == 0.0 { base } else { base + r });
        }
        alpha.push(al);
        beta.push(be);
    }
    Ok(Combined { y_pred: Tensor::matrix(n, l, out)?, alpha, beta })
}

/// Mean over channels of the horizon-mean squared error.
pub fn prediction_loss(y_pred: &Tensor, y: &Tensor) -> Result<f64> {
    if y_pred.shape() != y.shape() {
        return Err(PirError::Shape {
            node: "prediction_loss".into(),
            detail: format!("{:?} vs {:?}", y_pred.shape(), y.shape()),
        });
    }
    let (n, l) = (y.rows() as f64, y.cols() as f64);
    let mut total = 0.0;
    for c in 0..y.rows() {
        total += y_pred.row(c).iter().zip(y.row(c)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / l;
    }
    Ok(total / n)
}

/// `L = L_pr + λ·L_ue`.
pub fn total_loss(l_pr: f64, l_ue: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(PirError::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(if lambda == 0.0 { l_pr } else { l_pr + lambda * l_ue })
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    model: PirConfig,
    gate_open: bool,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Saves parameters, configuration and gate state. `extra` is stored verbatim.
pub fn save_model(
    model: &PirModel,
    path: &Path,
    db_fingerprint: Option<&str>,
    extra: serde_json::Value,
) -> Result<()> {
    let meta = ModelMeta { model: model.config.clone(), gate_open: model.gate_open, extra };
    let ckpt = Checkpoint {
        config: serde_json::to_value(meta)?,
        db_fingerprint: db_fingerprint.map(str::to_string),
        ..Checkpoint::new(model.params.clone())
    };
    write_checkpoint(path, &ckpt)
}

/// A loaded model with the stored database fingerprint and extra metadata.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub model: PirModel,
    pub db_fingerprint: Option<String>,
    pub extra: serde_json::Value,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let ckpt = read_checkpoint(path)?;
    let meta: ModelMeta = serde_json::from_value(ckpt.config)
        .map_err(|e| PirError::Checkpoint(format!("{}: bad model config: {e}", path.display())))?;
    let model = PirModel { config: meta.model, params: ckpt.parameters, gate_open: meta.gate_open };
    // fail now rather than at first use if parameters and config disagree
    model.graph(true)?;
    let fresh = if model.config.joint_backbone { None } else { PirModel::new(model.config.clone()).ok() };
    if let Some(fresh) = fresh {
        for (name, t) in fresh.params.iter() {
            match model.params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(PirError::Checkpoint(format!("parameter `{name}` missing or misshapen"))),
            }
        }
    }
    Ok(LoadedModel { model, db_fingerprint: ckpt.db_fingerprint, extra: meta.extra })
}
