//! Analytic cost model: parameter, MAC and FLOP counts derived from the
//! graph description alone, with no tensor execution. The formulas here
//! are written independently of the tensor operators' instrumentation on
//! purpose — the test suite asserts the two routes agree exactly, so a
//! bookkeeping bug in either one is caught by the other.
//!
//! FLOP conventions (identical to the tensor engine's):
//! conv = 2 per MAC plus 1 per output element when biased; batchnorm = 2
//! per element; relu/relu6/add = 1 per element; max/avg pool = k*k per
//! output; bilinear resize = 8 per output; weighted merge of k inputs =
//! (2k-1) per element plus 3k; concat = 0.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::config::ModelConfig;
use crate::network::graph::{build_graph, NodeOp};
use crate::runtime::checkpoint::serialized_len;

#[derive(Debug, Clone, Serialize)]
pub struct LayerCost {
    pub path: String,
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
    pub output: [usize; 4],
}

#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub model_label: String,
    pub resolution: (usize, usize),
    pub per_layer: Vec<LayerCost>,
    pub total_params: u64,
    pub total_macs: u64,
    pub total_flops: u64,
    /// Exact serialized checkpoint length for this architecture.
    pub est_model_size_bytes: u64,
}

/// Parameter and size view of the cost model (shapes are propagated at the
/// config's own input resolution).
pub fn count_params(config: &ModelConfig) -> Result<CostReport> {
    count_flops(config, config.input_res)
}

/// Full per-layer cost report at the given resolution via symbolic shape
/// propagation over the graph.
pub fn count_flops(config: &ModelConfig, resolution: (usize, usize)) -> Result<CostReport> {
    let (ih, iw) = resolution;
    if ih == 0 || iw == 0 || ih % 32 != 0 || iw % 32 != 0 {
        return Err(Error::InvalidConfig(format!(
            "resolution {ih}x{iw} must be positive and divisible by 32"
        )));
    }
    let graph = build_graph(config)?;

    // parameters attributed to the first node that uses them
    let mut param_owner: Vec<Option<usize>> = vec![None; graph.params.len()];
    for (ni, node) in graph.nodes.iter().enumerate() {
        let mut claim = |p: usize| {
            if param_owner[p].is_none() {
                param_owner[p] = Some(ni);
            }
        };
        match &node.op {
            NodeOp::Conv { w, b, .. } => {
                claim(*w);
                if let Some(b) = b {
                    claim(*b);
                }
            }
            NodeOp::BatchNorm { gamma, beta, mu, var } => {
                claim(*gamma);
                claim(*beta);
                claim(*mu);
                claim(*var);
            }
            NodeOp::WeightedMerge { w } => claim(*w),
            _ => {}
        }
    }
    let mut node_params = vec![0u64; graph.nodes.len()];
    for (pi, owner) in param_owner.iter().enumerate() {
        let ni = owner.ok_or_else(|| {
            Error::InvalidConfig(format!("parameter {} unused by any node", graph.params[pi].name))
        })?;
        node_params[ni] += graph.params[pi].numel() as u64;
    }

    let pool_out = |i: usize, k: usize, s: usize, p: usize| -> Result<usize> {
        if i + 2 * p < k {
            return Err(Error::shape("analyzer", format!("window {k} exceeds input {i}+2*{p}")));
        }
        Ok((i + 2 * p - k) / s + 1)
    };

    let mut shapes: Vec<[usize; 4]> = vec![[0; 4]; graph.nodes.len()];
    let mut per_layer = Vec::with_capacity(graph.nodes.len());
    for (ni, node) in graph.nodes.iter().enumerate() {
        let (out, macs, flops): ([usize; 4], u64, u64) = match &node.op {
            NodeOp::Input => ([1, 3, ih, iw], 0, 0),
            NodeOp::Conv { w, b, stride, pad, groups } => {
                let x = shapes[node.inputs[0]];
                let [cout, cin_g, kh, kw] = graph.params[*w].dims;
                if cin_g != x[1] / groups {
                    return Err(Error::shape(
                        "analyzer",
                        format!("{}: weight expects {} input channels/group, got {}/{groups}", node.label, cin_g, x[1]),
                    ));
                }
                let ho = pool_out(x[2], kh, stride.0, pad.0)?;
                let wo = pool_out(x[3], kw, stride.1, pad.1)?;
                let macs = (cout * cin_g * kh * kw * ho * wo) as u64;
                let bias = if b.is_some() { (cout * ho * wo) as u64 } else { 0 };
                ([1, cout, ho, wo], macs, 2 * macs + bias)
            }
            NodeOp::BatchNorm { .. } => {
                let x = shapes[node.inputs[0]];
                (x, 0, 2 * numel(x))
            }
            NodeOp::Relu | NodeOp::Relu6 => {
                let x = shapes[node.inputs[0]];
                (x, 0, numel(x))
            }
            NodeOp::Add => {
                let x = shapes[node.inputs[0]];
                (x, 0, numel(x))
            }
            NodeOp::Concat => {
                let first = shapes[node.inputs[0]];
                let c: usize = node.inputs.iter().map(|&j| shapes[j][1]).sum();
                ([first[0], c, first[2], first[3]], 0, 0)
            }
            NodeOp::MaxPool { k, s, pad } => {
                let x = shapes[node.inputs[0]];
                let ho = pool_out(x[2], *k, *s, *pad)?;
                let wo = pool_out(x[3], *k, *s, *pad)?;
                let out = [x[0], x[1], ho, wo];
                (out, 0, (k * k) as u64 * numel(out))
            }
            NodeOp::ResizeLike { reference } => {
                let x = shapes[node.inputs[0]];
                let r = shapes[*reference];
                let out = [x[0], x[1], r[2], r[3]];
                (out, 0, 8 * numel(out))
            }
            NodeOp::ResizeToInput => {
                let x = shapes[node.inputs[0]];
                let out = [x[0], x[1], ih, iw];
                (out, 0, 8 * numel(out))
            }
            NodeOp::WeightedMerge { w } => {
                let x = shapes[node.inputs[0]];
                let k = graph.params[*w].numel() as u64;
                (x, 0, (2 * k - 1) * numel(x) + 3 * k)
            }
        };
        shapes[ni] = out;
        per_layer.push(LayerCost {
            path: node.label.clone(),
            params: node_params[ni],
            macs,
            flops,
            output: out,
        });
    }

    let total_params: u64 = per_layer.iter().map(|l| l.params).sum();
    let total_macs: u64 = per_layer.iter().map(|l| l.macs).sum();
    let total_flops: u64 = per_layer.iter().map(|l| l.flops).sum();
    let est_model_size_bytes = serialized_len(config, &graph.params)?;
    Ok(CostReport {
        model_label: config.backbone.label().to_string(),
        resolution,
        per_layer,
        total_params,
        total_macs,
        total_flops,
        est_model_size_bytes,
    })
}

fn numel(d: [usize; 4]) -> u64 {
    (d[0] * d[1] * d[2] * d[3]) as u64
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelComparison {
    pub resolution: (usize, usize),
    pub a: ComparisonRow,
    pub b: ComparisonRow,
    /// a / b ratios.
    pub params_ratio: f64,
    pub macs_ratio: f64,
    pub flops_ratio: f64,
    pub size_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub model_label: String,
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
    pub size_bytes: u64,
}

fn row(r: &CostReport) -> ComparisonRow {
    ComparisonRow {
        model_label: r.model_label.clone(),
        params: r.total_params,
        macs: r.total_macs,
        flops: r.total_flops,
        size_bytes: r.est_model_size_bytes,
    }
}

pub fn compare_models(a: &CostReport, b: &CostReport) -> Result<ModelComparison> {
    if a.resolution != b.resolution {
        return Err(Error::InvalidInput(format!(
            "resolution mismatch: {:?} vs {:?}",
            a.resolution, b.resolution
        )));
    }
    Ok(ModelComparison {
        resolution: a.resolution,
        a: row(a),
        b: row(b),
        params_ratio: a.total_params as f64 / b.total_params as f64,
        macs_ratio: a.total_macs as f64 / b.total_macs as f64,
        flops_ratio: a.total_flops as f64 / b.total_flops as f64,
        size_ratio: a.est_model_size_bytes as f64 / b.est_model_size_bytes as f64,
    })
}

fn human(v: u64, unit: f64, suffix: &str) -> String {
    format!("{:.1} {suffix}", v as f64 / unit)
}

impl CostReport {
    /// One summary line per model for the comparison table.
    fn table_row(&self) -> String {
        format!(
            "{:<14} {:>10} {:>12} {:>12} {:>10}",
            self.model_label,
            human(self.total_params, 1e6, "M"),
            human(self.total_macs, 1e9, "G"),
            human(self.total_flops, 1e9, "G"),
            human(self.est_model_size_bytes, 1024.0 * 1024.0, "MB"),
        )
    }

    pub fn to_text_table(&self) -> String {
        let mut s = format!(
            "{:<14} {:>10} {:>12} {:>12} {:>10}   ({}x{})\n",
            "Model", "Params", "MACs", "FLOPs", "Size", self.resolution.0, self.resolution.1
        );
        s.push_str(&self.table_row());
        s.push('\n');
        s
    }
}

impl ModelComparison {
    pub fn to_text_table(&self) -> String {
        let header = format!(
            "{:<14} {:>10} {:>12} {:>12} {:>10}   ({}x{})\n",
            "Model", "Params", "MACs", "FLOPs", "Size", self.resolution.0, self.resolution.1
        );
        let rowfmt = |r: &ComparisonRow| {
            format!(
                "{:<14} {:>10} {:>12} {:>12} {:>10}\n",
                r.model_label,
                human(r.params, 1e6, "M"),
                human(r.macs, 1e9, "G"),
                human(r.flops, 1e9, "G"),
                human(r.size_bytes, 1024.0 * 1024.0, "MB"),
            )
        };
        format!(
            "{header}{}{}{:<14} {:>10} {:>12} {:>12} {:>10}\n",
            rowfmt(&self.a),
            rowfmt(&self.b),
            "ratio (a/b)",
            format!("{:.2}x", self.params_ratio),
            format!("{:.2}x", self.macs_ratio),
            format!("{:.2}x", self.flops_ratio),
            format!("{:.2}x", self.size_ratio),
        )
    }
}
