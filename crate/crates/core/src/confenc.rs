//! Configuration encoders: an MLP over one-hot grid points and a GIN over
//! backbone graphs. Both emit rows in the meta-feature space.

use serde::{Deserialize, Serialize};

use crate::autodiff::{affine, dropout_mask, init_affine, ParamStore, RngStream, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::space::{arch_to_graph, encode_hpo_onehot, Config, Graph, HpoConfig, SpaceKind, HPO_ONEHOT_LEN, NODE_FEATURES};

pub const ENCODER_PREFIX: &str = "encoder";
pub const GIN_LAYERS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub gin_dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            gin_dropout: 0.2,
        }
    }
}

pub fn init_encoder(
    store: &mut ParamStore,
    space: SpaceKind,
    cfg: &EncoderConfig,
    rng: &mut RngStream,
) -> Result<()> {
    let d = cfg.hidden;
    match space {
        SpaceKind::Hpo => {
            init_affine(store, &format!("{ENCODER_PREFIX}.mlp.l1"), HPO_ONEHOT_LEN, d, rng)?;
            init_affine(store, &format!("{ENCODER_PREFIX}.mlp.l2"), d, d, rng)
        }
        SpaceKind::Nas => {
            for layer in 0..GIN_LAYERS {
                let p = format!("{ENCODER_PREFIX}.gin.{layer}");
                let d_in = if layer == 0 { NODE_FEATURES } else { d };
                store.insert(format!("{p}.eps"), Tensor::scalar(0.0))?;
                init_affine(store, &format!("{p}.l1"), d_in, d, rng)?;
                init_affine(store, &format!("{p}.l2"), d, d, rng)?;
            }
            init_affine(store, &format!("{ENCODER_PREFIX}.gin.readout"), d, d, rng)
        }
    }
}

/// `[k x 15]` one-hot rows through `affine -> ReLU -> affine`.
pub fn encode_hpo_batch(tape: &mut Tape, store: &ParamStore, configs: &[HpoConfig]) -> Result<Var> {
    if configs.is_empty() {
        return Err(Error::EmptyBatch("encode_hpo_batch"));
    }
    let rows: Vec<Vec<f64>> = configs.iter().map(encode_hpo_onehot).collect();
    let x = tape.constant(Tensor::from_rows(&rows)?);
    let h = affine(tape, store, &format!("{ENCODER_PREFIX}.mlp.l1"), x)?;
    let h = tape.relu(h)?;
    affine(tape, store, &format!("{ENCODER_PREFIX}.mlp.l2"), h)
}

pub fn encode_hpo(c: &HpoConfig, store: &ParamStore) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let v = encode_hpo_batch(&mut tape, store, std::slice::from_ref(c))?;
    Ok(tape.value(v).values().to_vec())
}

/// `(1 + eps) h + A h`.
pub fn gin_aggregate(tape: &mut Tape, h: Var, adj: Var, eps: Var) -> Result<Var> {
    let neighbours = tape.matmul(adj, h)?;
    let scaled = tape.scale_by(h, eps)?;
    let own = tape.add(h, scaled)?;
    tape.add(own, neighbours)
}

/// One GIN layer with parameters under `prefix`: aggregation followed by
/// `affine -> ReLU -> affine`.
pub fn gin_layer(tape: &mut Tape, store: &ParamStore, prefix: &str, h: Var, adj: Var) -> Result<Var> {
    let eps = tape.param(store, &format!("{prefix}.eps"))?;
    let agg = gin_aggregate(tape, h, adj, eps)?;
    let z = affine(tape, store, &format!("{prefix}.l1"), agg)?;
    let z = tape.relu(z)?;
    affine(tape, store, &format!("{prefix}.l2"), z)
}

/// Two GIN layers, mean over every node, affine readout. Dropout on each
/// layer's output is applied only when `dropout` carries a stream.
pub fn encode_nas_graph(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &EncoderConfig,
    g: &Graph,
    mut dropout: Option<&mut RngStream>,
) -> Result<Var> {
    let adj = tape.constant(g.adjacency.clone());
    let mut h = tape.constant(g.features.clone());
    for layer in 0..GIN_LAYERS {
        h = gin_layer(tape, store, &format!("{ENCODER_PREFIX}.gin.{layer}"), h, adj)?;
        if let Some(rng) = dropout.as_deref_mut() {
            if cfg.gin_dropout > 0.0 {
                let mask = dropout_mask(tape.value(h).shape(), cfg.gin_dropout, rng);
                h = tape.mul_const(h, mask)?;
            }
        }
    }
    let pooled = tape.mean_rows(h)?;
    affine(tape, store, &format!("{ENCODER_PREFIX}.gin.readout"), pooled)
}

pub fn encode_nas(
    g: &Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    dropout: Option<&mut RngStream>,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let v = encode_nas_graph(&mut tape, store, cfg, g, dropout)?;
    Ok(tape.value(v).values().to_vec())
}

/// Embeddings of `configs` as rows of a `[k x D]` node. All configs must
/// come from one space.
pub fn encode_configs(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &EncoderConfig,
    configs: &[Config],
    mut dropout: Option<&mut RngStream>,
) -> Result<Var> {
    let first = configs.first().ok_or(Error::EmptyBatch("encode_configs"))?;
    match first.space() {
        SpaceKind::Hpo => {
            let hpo = configs
                .iter()
                .map(|c| match c {
                    Config::Hpo(h) => Ok(*h),
                    Config::Nas(_) => Err(Error::InvalidConfig("mixed search spaces".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            encode_hpo_batch(tape, store, &hpo)
        }
        SpaceKind::Nas => {
            let mut rows = Vec::with_capacity(configs.len());
            for c in configs {
                let Config::Nas(a) = c else {
                    return Err(Error::InvalidConfig("mixed search spaces".into()));
                };
                let g = arch_to_graph(a);
                rows.push(encode_nas_graph(tape, store, cfg, &g, dropout.as_deref_mut())?);
            }
            tape.concat_rows(&rows)
        }
    }
}
