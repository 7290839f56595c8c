//! Attention message passing over a featurized star graph, pooled at the
//! center node.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphio::FeaturizedGraph;
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

pub const GRAPH_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    /// Node and edge feature width.
    pub d_in: usize,
    pub d_gnn: usize,
    pub heads: usize,
    pub d_head: usize,
    pub layers: usize,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig {
            d_in: 64,
            d_gnn: 64,
            heads: 4,
            d_head: 16,
            layers: 1,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_gnn == 0 || self.heads == 0 || self.d_head == 0 || self.layers == 0 {
            return Err(Error::Config("gnn widths, heads and layers must be positive".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.heads * self.d_head
    }
}

/// Parameter ids of one TransformerConv + GraphNorm layer.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_e: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub norm_alpha: ParamId,
}

const LAYER_NAMES: [&str; 12] = [
    "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_e", "w_o", "b_o", "norm_gain", "norm_bias", "norm_alpha",
];

impl LayerParams {
    fn from_ids(ids: &[ParamId]) -> Self {
        LayerParams {
            w_q: ids[0],
            b_q: ids[1],
            w_k: ids[2],
            b_k: ids[3],
            w_v: ids[4],
            b_v: ids[5],
            w_e: ids[6],
            w_o: ids[7],
            b_o: ids[8],
            norm_gain: ids[9],
            norm_bias: ids[10],
            norm_alpha: ids[11],
        }
    }
}

/// Center-node summary. `empty` is set when the star had no edges.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSummary {
    pub g: Vec<f64>,
    pub empty: bool,
}

#[derive(Debug, Clone)]
pub struct GnnEncoder {
    pub config: GnnConfig,
    pub layers: Vec<LayerParams>,
    pub projection: Option<ParamId>,
}

fn layer_shapes(c: &GnnConfig) -> [[usize; 2]; 12] {
    let (d, w) = (c.d_in, c.width());
    [[d, w], [1, w], [d, w], [1, w], [d, w], [1, w], [d, w], [w, d], [1, d], [1, d], [1, d], [1, d]]
}

impl GnnEncoder {
    /// Registers freshly initialized parameters under `gnn.`.
    pub fn init<R: Rng + ?Sized>(config: GnnConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        for l in 0..config.layers {
            let mut ids = Vec::new();
            for (name, shape) in LAYER_NAMES.iter().zip(layer_shapes(&config)) {
                let t = match *name {
                    "norm_gain" | "norm_alpha" => Tensor::full(&shape, 1.0),
                    n if n.starts_with("b_") || n == "norm_bias" => Tensor::zeros(&shape),
                    _ => Tensor::glorot(shape[0], shape[1], rng),
                };
                ids.push(store.insert(format!("gnn.l{l}.{name}"), t.with_requires_grad(true)));
            }
            layers.push(LayerParams::from_ids(&ids));
        }
        let projection = (config.d_in != config.d_gnn).then(|| {
            let t = Tensor::glorot(config.d_in, config.d_gnn, rng).with_requires_grad(true);
            store.insert("gnn.projection", t)
        });
        Ok(GnnEncoder {
            config,
            layers,
            projection,
        })
    }

    /// Binds to parameters already present in `store`.
    pub fn from_store(config: GnnConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let find = |name: String, shape: &[usize]| -> Result<ParamId> {
            let id = store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            let t = store.get(id);
            if [t.rows(), t.cols()] != shape {
                return Err(Error::Shape {
                    op: "gnn parameter",
                    lhs: vec![t.rows(), t.cols()],
                    rhs: shape.to_vec(),
                });
            }
            Ok(id)
        };
        let mut layers = Vec::new();
        for l in 0..config.layers {
            let ids = LAYER_NAMES
                .iter()
                .zip(layer_shapes(&config))
                .map(|(n, s)| find(format!("gnn.l{l}.{n}"), &s))
                .collect::<Result<Vec<_>>>()?;
            layers.push(LayerParams::from_ids(&ids));
        }
        let projection = if config.d_in != config.d_gnn {
            Some(find("gnn.projection".into(), &[config.d_in, config.d_gnn])?)
        } else {
            None
        };
        Ok(GnnEncoder {
            config,
            layers,
            projection,
        })
    }

    /// Records the encoder on `tape` and returns the 1×d_gnn summary.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, graph: &FeaturizedGraph) -> Result<Var> {
        if graph.node_features.cols() != self.config.d_in {
            return Err(Error::Shape {
                op: "encode_graph",
                lhs: graph.node_features.shape().to_vec(),
                rhs: vec![graph.num_nodes(), self.config.d_in],
            });
        }
        let x = tape.leaf(&graph.node_features);
        let e = tape.leaf(&graph.edge_features);
        self.encode_vars(tape, store, x, e, &graph.edge_index, graph.center_index)
    }

    /// Same as [`encode`](Self::encode) with the features already on the tape.
    pub fn encode_vars(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        e: Var,
        edge_index: &[(usize, usize)],
        center: usize,
    ) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            let conv = transformer_conv(tape, store, h, e, edge_index, layer, self.config.heads)?;
            let gain = tape.param(store, layer.norm_gain);
            let bias = tape.param(store, layer.norm_bias);
            let alpha = tape.param(store, layer.norm_alpha);
            let normed = tape.graph_norm(conv.out, gain, bias, alpha, GRAPH_NORM_EPS)?;
            h = tape.add(h, normed)?;
        }
        let mut g = tape.gather_rows(h, &[center])?;
        if let Some(p) = self.projection {
            let w = tape.param(store, p);
            g = tape.matmul(g, w)?;
        }
        Ok(g)
    }

    /// Forward only.
    pub fn summarize(&self, store: &ParamStore, graph: &FeaturizedGraph) -> Result<GraphSummary> {
        if graph.empty {
            warn!("encoding a star graph with no edges");
        }
        let mut tape = Tape::new();
        let g = self.encode(&mut tape, store, graph)?;
        Ok(GraphSummary {
            g: tape.value(g).to_vec(),
            empty: graph.empty,
        })
    }
}

pub struct ConvOutput {
    pub out: Var,
    /// (edges + self-loops) × heads attention weights; self-loops come last.
    pub attention: Var,
    /// Destination node of each attention row.
    pub destinations: Vec<usize>,
}

/// One TransformerConv layer. Every node also gets a self-loop with a zero
/// edge feature.
pub fn transformer_conv(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    e: Var,
    edge_index: &[(usize, usize)],
    p: &LayerParams,
    heads: usize,
) -> Result<ConvOutput> {
    let (n, _) = tape.dims(x);
    let (m, de) = tape.dims(e);
    if m != edge_index.len() {
        return Err(Error::Shape {
            op: "transformer_conv",
            lhs: vec![m, de],
            rhs: vec![edge_index.len(), de],
        });
    }
    if let Some(&(s, d)) = edge_index.iter().find(|&&(s, d)| s >= n || d >= n) {
        return Err(Error::Config(format!("edge ({s}, {d}) out of range for {n} nodes")));
    }
    let mut src: Vec<usize> = edge_index.iter().map(|&(s, _)| s).collect();
    let mut dst: Vec<usize> = edge_index.iter().map(|&(_, d)| d).collect();
    src.extend(0..n);
    dst.extend(0..n);

    let lin = |tape: &mut Tape, w: ParamId, b: ParamId| -> Result<Var> {
        let (w, b) = (tape.param(store, w), tape.param(store, b));
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    };
    let q = lin(tape, p.w_q, p.b_q)?;
    let k = lin(tape, p.w_k, p.b_k)?;
    let v = lin(tape, p.w_v, p.b_v)?;
    let width = tape.dims(q).1;
    if width % heads != 0 {
        return Err(Error::Config(format!("attention width {width} not divisible by {heads} heads")));
    }
    let d_head = width / heads;

    let e_all = {
        let zeros = tape.constant(n, de, vec![0.0; n * de]);
        let stacked = if m > 0 { tape.concat_rows(&[e, zeros])? } else { zeros };
        let w_e = tape.param(store, p.w_e);
        tape.matmul(stacked, w_e)?
    };
    let k_src = tape.gather_rows(k, &src)?;
    let k_edge = tape.add(k_src, e_all)?;
    let v_src = tape.gather_rows(v, &src)?;
    let v_edge = tape.add(v_src, e_all)?;
    let q_dst = tape.gather_rows(q, &dst)?;

    // head-block indicator: width × heads
    let mut ind = vec![0.0; width * heads];
    for j in 0..width {
        ind[j * heads + j / d_head] = 1.0;
    }
    let ind = tape.constant(width, heads, ind);
    let qk = tape.mul(q_dst, k_edge)?;
    let scores = tape.matmul(qk, ind)?;
    let scores = tape.scale(scores, 1.0 / (d_head as f64).sqrt());
    let attention = tape.segment_softmax(scores, &dst)?;
    let spread = tape.matmul_nt(attention, ind)?;
    let msg = tape.mul(spread, v_edge)?;
    let agg = tape.scatter_add_rows(msg, &dst, n)?;
    let w_o = tape.param(store, p.w_o);
    let b_o = tape.param(store, p.b_o);
    let out = tape.matmul(agg, w_o)?;
    let out = tape.add_row(out, b_o)?;
    Ok(ConvOutput {
        out,
        attention,
        destinations: dst,
    })
}
