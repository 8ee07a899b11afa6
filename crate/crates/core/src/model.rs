//! The assembled forecasting model.
//!
//! A stack of single-step and multi-step recurrent layers over shared graph
//! banks, finished by a layer-normalized linear head that maps the final
//! hidden state of the last layer to all horizon steps at once (direct
//! multi-step output, no autoregression). Ablation variants swap out parts
//! of the graph generation or the attention value path.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionParams, SpatialValue, StsAtt};
use crate::error::{Error, Result};
use crate::graphconv::NodeAdaptiveWeights;
use crate::graphgen::{build_graph_banks, row_normalize, EmbeddingBank, GraphMode, LAYER_NORM_EPS};
use crate::params::{bind_all, Bindings, ParameterStore};
use crate::recurrent::{run_layer, GateTransform, GruGateParams, LayerKind, LayerSpec};
use crate::tape::{Tape, Var};
use crate::tensor::DenseArray;

/// Ablation / configuration variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Full model: position-dependent adaptive graphs, synchronous attention.
    Full,
    /// A fixed row-normalized adjacency (from config) replaces all generated
    /// graphs.
    Static,
    /// Graphs are built from the node embedding alone, with no time-position
    /// embeddings.
    Only,
    /// Multi-step gates use plain multi-head attention (learned value
    /// projection) instead of the graph-convolution value path.
    Att,
    /// Multi-step gates use the graph convolution alone, no attention.
    Apgcn,
}

impl Default for Variant {
    fn default() -> Self {
        Variant::Full
    }
}

fn default_input_dim() -> usize {
    1
}
fn default_len() -> usize {
    12
}
fn default_embed_dim() -> usize {
    4
}
fn default_hidden_dim() -> usize {
    16
}
fn default_cheb_k() -> usize {
    2
}
fn default_heads() -> usize {
    4
}
fn default_window() -> usize {
    2
}
fn default_stack() -> String {
    "MS-SS".to_string()
}
fn default_seed() -> u64 {
    1
}

/// Declarative description of a model instance. Serialized verbatim into
/// checkpoints; unknown fields are rejected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_nodes: usize,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_len")]
    pub input_len: usize,
    #[serde(default = "default_len")]
    pub horizon: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "default_cheb_k")]
    pub cheb_k: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_stack")]
    pub stack: String,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Required by the static variant: adjacency rows, normalized at build.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub static_adjacency: Option<Vec<Vec<f64>>>,
}

impl ModelConfig {
    /// Desk-scale defaults for a given node count. Matches the serde
    /// defaults used when fields are omitted from a config file.
    pub fn desk_default(n_nodes: usize) -> Self {
        Self {
            n_nodes,
            input_dim: default_input_dim(),
            input_len: default_len(),
            horizon: default_len(),
            embed_dim: default_embed_dim(),
            hidden_dim: default_hidden_dim(),
            cheb_k: default_cheb_k(),
            heads: default_heads(),
            window: default_window(),
            stack: default_stack(),
            variant: Variant::Full,
            seed: default_seed(),
            static_adjacency: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 {
            return Err(Error::Config("n_nodes must be positive".into()));
        }
        if self.input_dim == 0 || self.input_len == 0 || self.horizon == 0 {
            return Err(Error::Config("input/horizon dimensions must be positive".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be >= 1".into()));
        }
        if self.cheb_k < 2 {
            return Err(Error::Config(format!(
                "cheb_k must be >= 2, got {}",
                self.cheb_k
            )));
        }
        if self.window == 0 || self.input_len % self.window != 0 {
            return Err(Error::Config(format!(
                "input_len {} is not divisible by window {}",
                self.input_len, self.window
            )));
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        parse_stack(&self.stack)?;
        if self.variant == Variant::Static && self.static_adjacency.is_none() {
            return Err(Error::Config(
                "static variant requires static_adjacency in the config".into(),
            ));
        }
        Ok(())
    }
}

/// Parses a stack string like "MS-SS" into layer kinds, naming any bad token.
pub fn parse_stack(stack: &str) -> Result<Vec<LayerKind>> {
    if stack.trim().is_empty() {
        return Err(Error::Config("stack must not be empty".into()));
    }
    stack
        .split('-')
        .map(|token| match token.trim() {
            "SS" => Ok(LayerKind::SingleStep),
            "MS" => Ok(LayerKind::MultiStep),
            other => Err(Error::Config(format!(
                "unknown stack token '{other}' (expected SS or MS)"
            ))),
        })
        .collect()
}

/// Output head: layer norm, then a per-node linear map hidden -> horizon
/// shared across nodes.
#[derive(Clone, Debug)]
struct HeadSpec {
    hidden: usize,
    horizon: usize,
}

impl HeadSpec {
    fn register_params(
        &self,
        store: &mut ParameterStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        store.register(
            "head.norm.gain",
            DenseArray::filled(&[self.hidden], 1.0),
            false,
        )?;
        store.register("head.norm.bias", DenseArray::zeros(&[self.hidden]), false)?;
        let bound = 1.0 / (self.hidden as f64).sqrt();
        store.register(
            "head.weight",
            crate::params::uniform_init(rng, &[self.hidden, self.horizon], bound),
            true,
        )?;
        store.register("head.bias", DenseArray::zeros(&[self.horizon]), false)?;
        Ok(())
    }

    fn param_count(&self) -> usize {
        2 * self.hidden + self.hidden * self.horizon + self.horizon
    }
}

/// Executable model: configuration plus the parameter layout of every
/// component. Parameter values live in a `ParameterStore`.
pub struct Model {
    pub cfg: ModelConfig,
    bank: EmbeddingBank,
    mode: GraphMode,
    layers: Vec<LayerSpec>,
    head: HeadSpec,
}

/// Instantiates all parameters for a configuration and returns the model
/// with its freshly initialized store.
pub fn build_model(cfg: &ModelConfig) -> Result<(Model, ParameterStore)> {
    cfg.validate()?;
    let kinds = parse_stack(&cfg.stack)?;
    let with_time = cfg.variant != Variant::Only;
    let bank = EmbeddingBank::new(
        "bank",
        cfg.n_nodes,
        cfg.input_len,
        cfg.window,
        cfg.embed_dim,
        with_time,
    )?;
    let mode = match cfg.variant {
        Variant::Static => {
            let rows = cfg
                .static_adjacency
                .as_ref()
                .ok_or_else(|| Error::Config("static variant requires static_adjacency".into()))?;
            let adj = DenseArray::from_rows(rows)?;
            if adj.shape() != [cfg.n_nodes, cfg.n_nodes] {
                return Err(Error::Config(format!(
                    "static adjacency is {:?}, expected [{n}, {n}]",
                    adj.shape(),
                    n = cfg.n_nodes
                )));
            }
            GraphMode::Static(row_normalize(&adj)?)
        }
        _ => GraphMode::Adaptive,
    };

    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    bank.register_params(&mut store, &mut rng)?;

    let mut layers = Vec::with_capacity(kinds.len());
    for (idx, kind) in kinds.iter().enumerate() {
        let feat_in = if idx == 0 { cfg.input_dim } else { cfg.hidden_dim };
        let d_in = feat_in + cfg.hidden_dim;
        let gate = |name: &str| -> GateTransform {
            let prefix = format!("layers.{idx}.{name}");
            match kind {
                LayerKind::SingleStep => GateTransform::GraphConv(NodeAdaptiveWeights::new(
                    &format!("{prefix}.gcn"),
                    cfg.embed_dim,
                    cfg.cheb_k,
                    d_in,
                    cfg.hidden_dim,
                )),
                LayerKind::MultiStep => match cfg.variant {
                    Variant::Apgcn => GateTransform::GraphConv(NodeAdaptiveWeights::new(
                        &format!("{prefix}.gcn"),
                        cfg.embed_dim,
                        cfg.cheb_k,
                        d_in,
                        cfg.hidden_dim,
                    )),
                    Variant::Att => GateTransform::Attention(StsAtt::new(
                        &prefix,
                        AttentionParams::new(
                            &format!("{prefix}.att"),
                            d_in,
                            cfg.hidden_dim,
                            cfg.heads,
                        )
                        .expect("validated by cfg.validate"),
                        SpatialValue::Linear,
                    )),
                    _ => GateTransform::Attention(StsAtt::new(
                        &prefix,
                        AttentionParams::new(
                            &format!("{prefix}.att"),
                            d_in,
                            cfg.hidden_dim,
                            cfg.heads,
                        )
                        .expect("validated by cfg.validate"),
                        SpatialValue::GraphConv(NodeAdaptiveWeights::new(
                            &format!("{prefix}.gcn"),
                            cfg.embed_dim,
                            cfg.cheb_k,
                            d_in,
                            cfg.hidden_dim,
                        )),
                    )),
                },
            }
        };
        let gates = GruGateParams {
            update: gate("update"),
            reset: gate("reset"),
            candidate: gate("candidate"),
        };
        gates.register_params(&mut store, &mut rng)?;
        layers.push(LayerSpec {
            kind: *kind,
            gates,
            feat_in,
            hidden: cfg.hidden_dim,
            window: cfg.window,
        });
    }

    let head = HeadSpec {
        hidden: cfg.hidden_dim,
        horizon: cfg.horizon,
    };
    head.register_params(&mut store, &mut rng)?;

    Ok((
        Model {
            cfg: cfg.clone(),
            bank,
            mode,
            layers,
            head,
        },
        store,
    ))
}

/// Maps the final hidden state (n x hidden) to per-node predictions for
/// every horizon step (n x horizon).
pub fn output_projection(tape: &mut Tape, binds: &Bindings, h_last: Var) -> Result<Var> {
    let gain = binds.var("head.norm.gain")?;
    let bias = binds.var("head.norm.bias")?;
    let weight = binds.var("head.weight")?;
    let head_bias = binds.var("head.bias")?;
    let normed = tape.layer_norm_rows(h_last, gain, bias, LAYER_NORM_EPS)?;
    let mapped = tape.matmul(normed, weight)?;
    tape.add_row(mapped, head_bias)
}

/// Mean absolute error between two equal-shaped arrays (the training loss,
/// computed over every element).
pub fn l1_loss(pred: &DenseArray, truth: &DenseArray) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape {
            op: "l1_loss",
            detail: format!("{:?} vs {:?}", pred.shape(), truth.shape()),
        });
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(sum / pred.numel() as f64)
}

impl Model {
    pub fn bank(&self) -> &EmbeddingBank {
        &self.bank
    }

    pub fn graph_mode(&self) -> &GraphMode {
        &self.mode
    }

    /// Closed-form parameter total from the declared shapes.
    pub fn expected_param_count(&self) -> usize {
        let bank_total = self.bank.embedding_param_count() + 4 * self.cfg.embed_dim;
        let layers_total: usize = self.layers.iter().map(|l| l.gates.param_count()).sum();
        bank_total + layers_total + self.head.param_count()
    }

    fn check_input_item(&self, x: &DenseArray) -> Result<()> {
        let want = [self.cfg.input_len, self.cfg.n_nodes, self.cfg.input_dim];
        if x.shape() != want {
            return Err(Error::Shape {
                op: "forward",
                detail: format!("input item {:?}, expected {want:?}", x.shape()),
            });
        }
        Ok(())
    }

    /// Runs one sample through the network on an existing tape, returning
    /// the prediction variable (n_nodes x horizon, normalized units).
    pub fn forward_var(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        x: &DenseArray,
    ) -> Result<Var> {
        self.check_input_item(x)?;
        let (t, n, c) = (self.cfg.input_len, self.cfg.n_nodes, self.cfg.input_dim);

        let banks = build_graph_banks(tape, binds, &self.bank, self.cfg.cheb_k, &self.mode)
            .map_err(|e| wrap_layer(e, "graph banks"))?;

        let mut seq = Vec::with_capacity(t);
        for step in 0..t {
            let slice: Vec<f64> = x.data()[step * n * c..(step + 1) * n * c].to_vec();
            seq.push(tape.leaf(DenseArray::new(vec![n, c], slice)?)?);
        }

        for (idx, layer) in self.layers.iter().enumerate() {
            seq = run_layer(tape, binds, &banks, layer, &seq)
                .map_err(|e| wrap_layer(e, &format!("layer {idx}")))?;
        }

        let h_last = *seq.last().expect("nonempty sequence");
        output_projection(tape, binds, h_last).map_err(|e| wrap_layer(e, "output head"))
    }

    /// Batched forward pass. Input [batch, input_len, n_nodes, input_dim],
    /// output [batch, horizon, n_nodes, 1] in normalized units.
    pub fn forward(&self, store: &ParameterStore, x: &DenseArray) -> Result<DenseArray> {
        if x.shape().len() != 4 {
            return Err(Error::Shape {
                op: "forward",
                detail: format!("batch input {:?}, expected rank 4", x.shape()),
            });
        }
        let batch = x.shape()[0];
        let item_len = self.cfg.input_len * self.cfg.n_nodes * self.cfg.input_dim;
        let items: Vec<DenseArray> = (0..batch)
            .map(|b| {
                DenseArray::new(
                    vec![self.cfg.input_len, self.cfg.n_nodes, self.cfg.input_dim],
                    x.data()[b * item_len..(b + 1) * item_len].to_vec(),
                )
            })
            .collect::<Result<_>>()?;

        let preds: Vec<Result<DenseArray>> = items
            .par_iter()
            .map(|item| {
                let mut tape = Tape::new();
                let binds = bind_all(store, &mut tape)?;
                let out = self.forward_var(&mut tape, &binds, item)?;
                Ok(tape.value(out).clone())
            })
            .collect();

        let (t_out, n) = (self.cfg.horizon, self.cfg.n_nodes);
        let mut data = vec![0.0; batch * t_out * n];
        for (b, pred) in preds.into_iter().enumerate() {
            let pred = pred?;
            // pred is n x horizon; output layout is [horizon, n, 1]
            for node in 0..n {
                for step in 0..t_out {
                    data[b * t_out * n + step * n + node] = pred.at2(node, step);
                }
            }
        }
        DenseArray::new(vec![batch, t_out, n, 1], data)
    }

    /// Forward + backward over a batch: accumulates parameter gradients of
    /// the batch-mean L1 loss into the store and returns that loss.
    /// Targets are n_nodes x horizon matrices in normalized units. Items are
    /// evaluated in parallel on independent tapes and reduced in batch
    /// order, so results do not depend on thread scheduling.
    pub fn batch_loss_and_grad(
        &self,
        store: &mut ParameterStore,
        inputs: &[DenseArray],
        targets: &[DenseArray],
    ) -> Result<f64> {
        if inputs.len() != targets.len() || inputs.is_empty() {
            return Err(Error::Shape {
                op: "batch_loss_and_grad",
                detail: format!("{} inputs vs {} targets", inputs.len(), targets.len()),
            });
        }
        let total_elems = (inputs.len() * self.cfg.horizon * self.cfg.n_nodes) as f64;
        let seed = 1.0 / total_elems;

        struct ItemResult {
            abs_sum: f64,
            grads: Vec<Option<Vec<f64>>>,
        }

        let results: Vec<Result<ItemResult>> = inputs
            .par_iter()
            .zip(targets.par_iter())
            .map(|(item, target)| {
                let mut tape = Tape::new();
                let binds = bind_all(store, &mut tape)?;
                let pred = self.forward_var(&mut tape, &binds, item)?;
                let truth = tape.leaf(target.clone())?;
                let diff = tape.sub(pred, truth)?;
                let abs = tape.abs(diff)?;
                let sum = tape.sum_all(abs)?;
                let abs_sum = tape.value(sum).data()[0];
                tape.backward_seeded(sum, seed)?;
                let grads = binds
                    .iter()
                    .map(|(_, var)| tape.grad(var).map(|g| g.to_vec()))
                    .collect();
                Ok(ItemResult { abs_sum, grads })
            })
            .collect();

        let mut loss_sum = 0.0;
        let names: Vec<String> = store.names().map(String::from).collect();
        for item in results {
            let item = item?;
            loss_sum += item.abs_sum;
            for (name, grad) in names.iter().zip(item.grads) {
                if let Some(grad) = grad {
                    let entry = store.entry_mut(name)?;
                    for (dst, src) in entry.grad.data_mut().iter_mut().zip(&grad) {
                        *dst += src;
                    }
                }
            }
        }
        Ok(loss_sum / total_elems)
    }

    /// Scalar L1 training loss for one item on a caller-provided tape
    /// (gradient-checkable path).
    pub fn loss_var(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        x: &DenseArray,
        target: &DenseArray,
    ) -> Result<Var> {
        let pred = self.forward_var(tape, binds, x)?;
        let truth = tape.leaf(target.clone())?;
        let diff = tape.sub(pred, truth)?;
        let abs = tape.abs(diff)?;
        let sum = tape.sum_all(abs)?;
        let count = (self.cfg.horizon * self.cfg.n_nodes) as f64;
        tape.scale(sum, 1.0 / count)
    }
}

fn wrap_layer(e: Error, layer: &str) -> Error {
    match e {
        Error::NonFinite { context } => Error::NonFinite {
            context: format!("{layer}: {context}"),
        },
        other => other,
    }
}

// ── checkpoints ─────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
pub struct SavedParam {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// On-disk model state: the configuration verbatim plus every parameter's
/// shape and row-major values. JSON round-trips f64 exactly.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: IndexMap<String, SavedParam>,
}

pub fn checkpoint_from(cfg: &ModelConfig, store: &ParameterStore) -> Checkpoint {
    let params = store
        .iter()
        .map(|(name, entry)| {
            (
                name.to_string(),
                SavedParam {
                    shape: entry.value.shape().to_vec(),
                    values: entry.value.data().to_vec(),
                },
            )
        })
        .collect();
    Checkpoint {
        config: cfg.clone(),
        params,
    }
}

pub fn save_checkpoint(path: &std::path::Path, cfg: &ModelConfig, store: &ParameterStore) -> Result<()> {
    let checkpoint = checkpoint_from(cfg, store);
    let json = serde_json::to_string(&checkpoint)
        .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

/// Loads a checkpoint and rebuilds the model with the stored parameter
/// values in place of the fresh initialization.
pub fn load_checkpoint(path: &std::path::Path) -> Result<(Model, ParameterStore)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let checkpoint: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("parse: {e}")))?;
    restore_checkpoint(checkpoint)
}

pub fn restore_checkpoint(checkpoint: Checkpoint) -> Result<(Model, ParameterStore)> {
    let (model, mut store) = build_model(&checkpoint.config)?;
    let expected: Vec<String> = store.names().map(String::from).collect();
    if expected.len() != checkpoint.params.len() {
        return Err(Error::Checkpoint(format!(
            "{} parameters stored, model declares {}",
            checkpoint.params.len(),
            expected.len()
        )));
    }
    for name in &expected {
        let saved = checkpoint
            .params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))?;
        let value = DenseArray::new(saved.shape.clone(), saved.values.clone())?;
        store.set_value(name, value)?;
    }
    Ok((model, store))
}
