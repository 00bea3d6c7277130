//! 3D U-net built as a layer program over the `nn` primitives.
//!
//! The topology is planned symbolically first (`plan_shapes`), which both
//! drives allocation-free shape verification at full scale and derives every
//! kernel shape for initialization, training, and checkpointing. Contracting
//! levels hold two ReLU convolutions and a 2x2x2 max pool each; feature
//! count doubles per level. Expanding levels start with a 2x2x2 transposed
//! convolution whose output is concatenated (upsampled features first, skip
//! features second) with the matching contracting activation. The topmost
//! expanding level keeps the concatenated width through its single 3x3x3
//! convolution before the final 1x1x1 convolution and per-voxel softmax.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::PredictionPlanes;
use crate::nn::{
    concat_channels, conv3d_backward, conv3d_forward, maxpool3d_backward, maxpool3d_forward,
    relu_backward, relu_forward, softmax_backward, softmax_channels, split_channels,
    transposed_conv3d_backward, transposed_conv3d_forward, ArgmaxMap, ConvKernel, KernelGrad,
    Padding,
};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"TVNET1";

/// Architecture hyperparameters. Spatial extents must be divisible by
/// 2^levels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_shape: [usize; 3],
    pub in_channels: usize,
    pub levels: usize,
    pub base_features: usize,
    #[serde(default = "default_out_classes")]
    pub out_classes: usize,
    #[serde(default = "default_true")]
    pub use_bias: bool,
    pub seed: u64,
}

fn default_out_classes() -> usize {
    2
}

fn default_true() -> bool {
    true
}

/// The full-size configuration: 128x224x256 volumes, 3 input channels,
/// 16 base features, 4 pooling levels.
pub fn full_scale_config() -> NetConfig {
    NetConfig {
        input_shape: [128, 224, 256],
        in_channels: 3,
        levels: 4,
        base_features: 16,
        out_classes: 2,
        use_bias: true,
        seed: 0,
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::config("levels must be >= 1"));
        }
        if self.base_features < 1 {
            return Err(Error::config("base_features must be >= 1"));
        }
        if self.in_channels < 1 {
            return Err(Error::config("in_channels must be >= 1"));
        }
        if self.out_classes != 2 {
            return Err(Error::config(format!(
                "out_classes is fixed at 2, got {}",
                self.out_classes
            )));
        }
        let divisor = 1usize << self.levels;
        for (axis, extent) in ["depth", "height", "width"]
            .iter()
            .zip(self.input_shape.iter())
        {
            if extent % divisor != 0 {
                return Err(Error::NonDivisible {
                    what: format!("input shape for {} pooling levels", self.levels),
                    axis: (*axis).into(),
                    extent: *extent,
                    divisor,
                });
            }
        }
        Ok(())
    }
}

/// What a plan row does when executed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    /// Padded 3x3x3 convolution followed by ReLU.
    Conv,
    /// 2x2x2 max pool, stride 2.
    Pool,
    /// 2x2x2 stride-2 transposed convolution, then concat with the output of
    /// the contracting row at `skip_row`.
    UpConcat { skip_row: usize },
    /// Final 1x1x1 convolution followed by per-voxel softmax.
    FinalConv,
}

/// One layer of the symbolic shape plan; shapes are (d, h, w, c).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanRow {
    pub name: String,
    pub kind: LayerKind,
    pub input_shape: [usize; 4],
    pub output_shape: [usize; 4],
}

impl PlanRow {
    /// Kernel weight shape for parameterized rows, None for pooling.
    pub fn kernel_shape(&self) -> Option<[usize; 5]> {
        let c_in = self.input_shape[3];
        match self.kind {
            LayerKind::Conv => Some([3, 3, 3, c_in, self.output_shape[3]]),
            LayerKind::Pool => None,
            // the transposed convolution preserves its channel count; the
            // extra output channels come from the concat
            LayerKind::UpConcat { .. } => Some([2, 2, 2, c_in, c_in]),
            LayerKind::FinalConv => Some([1, 1, 1, c_in, self.output_shape[3]]),
        }
    }
}

/// Symbolic layer-by-layer shape propagation for a configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapePlan {
    pub config: NetConfig,
    pub rows: Vec<PlanRow>,
}

/// Propagates shapes through the whole network without allocating tensors.
pub fn plan_shapes(config: &NetConfig) -> Result<ShapePlan> {
    config.validate()?;
    let [d, h, w] = config.input_shape;
    let spatial = |level: usize| [d >> level, h >> level, w >> level];
    let feat = |level: usize| config.base_features << level;

    let mut rows: Vec<PlanRow> = Vec::with_capacity(6 * config.levels + 2);
    let mut push = |name: String, kind: LayerKind, inp: [usize; 4], out: [usize; 4]| {
        rows.push(PlanRow {
            name,
            kind,
            input_shape: inp,
            output_shape: out,
        });
    };
    let with_c = |sp: [usize; 3], c: usize| [sp[0], sp[1], sp[2], c];

    // contracting path
    let mut ch = config.in_channels;
    for level in 0..config.levels {
        let sp = spatial(level);
        let out_ch = feat(level);
        let n = 3 * level;
        push(format!("C{}", n + 1), LayerKind::Conv, with_c(sp, ch), with_c(sp, out_ch));
        push(
            format!("C{}", n + 2),
            LayerKind::Conv,
            with_c(sp, out_ch),
            with_c(sp, out_ch),
        );
        push(
            format!("C{}-Pooling", n + 3),
            LayerKind::Pool,
            with_c(sp, out_ch),
            with_c(spatial(level + 1), out_ch),
        );
        ch = out_ch;
    }

    // bottom pair
    let bottom_sp = spatial(config.levels);
    let bottom_ch = feat(config.levels);
    let n = 3 * config.levels;
    push(
        format!("C{}", n + 1),
        LayerKind::Conv,
        with_c(bottom_sp, ch),
        with_c(bottom_sp, bottom_ch),
    );
    push(
        format!("C{}", n + 2),
        LayerKind::Conv,
        with_c(bottom_sp, bottom_ch),
        with_c(bottom_sp, bottom_ch),
    );
    ch = bottom_ch;

    // expanding path
    let mut e = 1;
    for level in (0..config.levels).rev() {
        let sp = spatial(level);
        let skip_ch = feat(level);
        let skip_row = 3 * level + 1;
        let cat_ch = ch + skip_ch;
        push(
            format!("E{e}"),
            LayerKind::UpConcat { skip_row },
            with_c(spatial(level + 1), ch),
            with_c(sp, cat_ch),
        );
        e += 1;
        if level > 0 {
            push(
                format!("E{e}"),
                LayerKind::Conv,
                with_c(sp, cat_ch),
                with_c(sp, skip_ch),
            );
            e += 1;
            push(
                format!("E{e}"),
                LayerKind::Conv,
                with_c(sp, skip_ch),
                with_c(sp, skip_ch),
            );
            e += 1;
            ch = skip_ch;
        } else {
            push(
                format!("E{e}"),
                LayerKind::Conv,
                with_c(sp, cat_ch),
                with_c(sp, cat_ch),
            );
            e += 1;
            push(
                format!("E{e}"),
                LayerKind::FinalConv,
                with_c(sp, cat_ch),
                with_c(sp, config.out_classes),
            );
        }
    }

    Ok(ShapePlan {
        config: config.clone(),
        rows,
    })
}

impl ShapePlan {
    /// Plan rows that carry parameters, with their layer index into
    /// `NetParams`.
    pub fn parameterized_rows(&self) -> impl Iterator<Item = (usize, &PlanRow)> {
        self.rows
            .iter()
            .filter(|r| r.kind != LayerKind::Pool)
            .enumerate()
            .map(|(layer_idx, row)| (layer_idx, row))
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<14} {:>20} {:>20}\n",
            "Layer", "Input Size", "Output Size"
        ));
        for row in &self.rows {
            let fmt = |s: &[usize; 4]| format!("{},{},{},{}", s[0], s[1], s[2], s[3]);
            out.push_str(&format!(
                "{:<14} {:>20} {:>20}\n",
                row.name,
                fmt(&row.input_shape),
                fmt(&row.output_shape)
            ));
        }
        out
    }
}

/// Reference layer table for `full_scale_config()`:
/// (name, input shape, output shape).
pub const FULL_SCALE_REFERENCE: [(&str, [usize; 4], [usize; 4]); 26] = [
    ("C1", [128, 224, 256, 3], [128, 224, 256, 16]),
    ("C2", [128, 224, 256, 16], [128, 224, 256, 16]),
    ("C3-Pooling", [128, 224, 256, 16], [64, 112, 128, 16]),
    ("C4", [64, 112, 128, 16], [64, 112, 128, 32]),
    ("C5", [64, 112, 128, 32], [64, 112, 128, 32]),
    ("C6-Pooling", [64, 112, 128, 32], [32, 56, 64, 32]),
    ("C7", [32, 56, 64, 32], [32, 56, 64, 64]),
    ("C8", [32, 56, 64, 64], [32, 56, 64, 64]),
    ("C9-Pooling", [32, 56, 64, 64], [16, 28, 32, 64]),
    ("C10", [16, 28, 32, 64], [16, 28, 32, 128]),
    ("C11", [16, 28, 32, 128], [16, 28, 32, 128]),
    ("C12-Pooling", [16, 28, 32, 128], [8, 14, 16, 128]),
    ("C13", [8, 14, 16, 128], [8, 14, 16, 256]),
    ("C14", [8, 14, 16, 256], [8, 14, 16, 256]),
    ("E1", [8, 14, 16, 256], [16, 28, 32, 384]),
    ("E2", [16, 28, 32, 384], [16, 28, 32, 128]),
    ("E3", [16, 28, 32, 128], [16, 28, 32, 128]),
    ("E4", [16, 28, 32, 128], [32, 56, 64, 192]),
    ("E5", [32, 56, 64, 192], [32, 56, 64, 64]),
    ("E6", [32, 56, 64, 64], [32, 56, 64, 64]),
    ("E7", [32, 56, 64, 64], [64, 112, 128, 96]),
    ("E8", [64, 112, 128, 96], [64, 112, 128, 32]),
    ("E9", [64, 112, 128, 32], [64, 112, 128, 32]),
    ("E10", [64, 112, 128, 32], [128, 224, 256, 48]),
    ("E11", [128, 224, 256, 48], [128, 224, 256, 48]),
    ("E12", [128, 224, 256, 48], [128, 224, 256, 2]),
];

/// Compares a plan against `FULL_SCALE_REFERENCE`, returning the mismatching
/// row descriptions (empty means exact agreement on all 26 rows).
pub fn verify_full_scale(plan: &ShapePlan) -> Vec<String> {
    let mut mismatches = Vec::new();
    if plan.rows.len() != FULL_SCALE_REFERENCE.len() {
        mismatches.push(format!(
            "row count {} != {}",
            plan.rows.len(),
            FULL_SCALE_REFERENCE.len()
        ));
        return mismatches;
    }
    for (row, (name, inp, out)) in plan.rows.iter().zip(FULL_SCALE_REFERENCE.iter()) {
        if row.name != *name || row.input_shape != *inp || row.output_shape != *out {
            mismatches.push(format!(
                "{}: planned {:?} -> {:?}, reference {} {:?} -> {:?}",
                row.name, row.input_shape, row.output_shape, name, inp, out
            ));
        }
    }
    mismatches
}

/// A named kernel, one per parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedKernel {
    pub name: String,
    pub kernel: ConvKernel,
}

/// The learnable weight set, ordered to match the shape plan.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub layers: Vec<NamedKernel>,
}

impl NetParams {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.kernel.param_count()).sum()
    }

    /// Flat parameter access (weights then bias, layer by layer), used by the
    /// finite-difference suite.
    pub fn get_param(&self, mut idx: usize) -> f64 {
        for layer in &self.layers {
            let nw = layer.kernel.weights.len();
            if idx < nw {
                return layer.kernel.weights.data()[idx];
            }
            idx -= nw;
            if idx < layer.kernel.bias.len() {
                return layer.kernel.bias[idx];
            }
            idx -= layer.kernel.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut idx: usize, value: f64) {
        for layer in &mut self.layers {
            let nw = layer.kernel.weights.len();
            if idx < nw {
                layer.kernel.weights.data_mut()[idx] = value;
                return;
            }
            idx -= nw;
            if idx < layer.kernel.bias.len() {
                layer.kernel.bias[idx] = value;
                return;
            }
            idx -= layer.kernel.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn zero_grads(&self) -> Vec<KernelGrad> {
        self.layers
            .iter()
            .map(|l| KernelGrad::zeros_like(&l.kernel))
            .collect()
    }
}

/// Draws He-style initial weights (zero-mean normal, std sqrt(2/fan_in)) and
/// zero biases, deterministically from the config seed.
pub fn init_params(config: &NetConfig) -> Result<NetParams> {
    use rand::prelude::*;
    use rand_distr::StandardNormal;

    let plan = plan_shapes(config)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let mut layers = Vec::new();
    for (_, row) in plan.parameterized_rows() {
        let shape = row.kernel_shape().expect("parameterized row has a kernel");
        let fan_in = shape[0] * shape[1] * shape[2] * shape[3];
        let std = (2.0 / fan_in as f64).sqrt();
        let weights = Tensor::from_fn(shape.to_vec(), |_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        });
        let bias = vec![0.0; shape[4]];
        layers.push(NamedKernel {
            name: row.name.clone(),
            kernel: ConvKernel::new(weights, bias)?,
        });
    }
    Ok(NetParams { layers })
}

enum RowCache {
    Conv { input: Tensor, output: Tensor },
    Pool { argmax: ArgmaxMap },
    UpConcat { input: Tensor, up_channels: usize },
    Final { input: Tensor },
}

/// Activation record from one forward pass, consumed by `backward`.
pub struct ForwardCache {
    config: NetConfig,
    rows: Vec<RowCache>,
    softmax_output: Tensor,
}

impl ForwardCache {
    pub fn softmax_output(&self) -> &Tensor {
        &self.softmax_output
    }
}

/// The network: a shape plan plus matching parameters.
#[derive(Debug, Clone)]
pub struct Network {
    plan: ShapePlan,
    pub params: NetParams,
}

impl Network {
    /// Plans the topology and draws fresh parameters from the config seed.
    pub fn new(config: &NetConfig) -> Result<Self> {
        Ok(Network {
            plan: plan_shapes(config)?,
            params: init_params(config)?,
        })
    }

    /// Wraps existing parameters, validating every kernel against the plan.
    pub fn from_parts(config: &NetConfig, params: NetParams) -> Result<Self> {
        let plan = plan_shapes(config)?;
        let expected: Vec<_> = plan.parameterized_rows().collect();
        if expected.len() != params.layers.len() {
            return Err(Error::shape_mismatch(
                "network layer count",
                expected.len(),
                params.layers.len(),
            ));
        }
        for ((_, row), layer) in expected.iter().zip(params.layers.iter()) {
            let want = row.kernel_shape().expect("parameterized row");
            if layer.kernel.weights.shape() != want {
                return Err(Error::shape_mismatch(
                    format!("kernel {} ({})", layer.name, row.name),
                    want,
                    layer.kernel.weights.shape(),
                ));
            }
        }
        Ok(Network { plan, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.plan.config
    }

    pub fn plan(&self) -> &ShapePlan {
        &self.plan
    }

    fn layer_index_by_row(&self) -> Vec<Option<usize>> {
        let mut v = Vec::with_capacity(self.plan.rows.len());
        let mut next = 0;
        for row in &self.plan.rows {
            if row.kind == LayerKind::Pool {
                v.push(None);
            } else {
                v.push(Some(next));
                next += 1;
            }
        }
        v
    }

    /// Runs the network on one volume, returning per-voxel class
    /// probabilities and the activation cache for `backward`.
    pub fn forward(&self, input: &Tensor) -> Result<(PredictionPlanes, ForwardCache)> {
        let cfg = &self.plan.config;
        let expected = [
            cfg.input_shape[0],
            cfg.input_shape[1],
            cfg.input_shape[2],
            cfg.in_channels,
        ];
        if input.shape() != expected {
            return Err(Error::shape_mismatch("network input", expected, input.shape()));
        }
        let layer_of_row = self.layer_index_by_row();
        let mut skips: HashMap<usize, Tensor> = HashMap::new();
        let skip_sources: Vec<usize> = self
            .plan
            .rows
            .iter()
            .filter_map(|r| match r.kind {
                LayerKind::UpConcat { skip_row } => Some(skip_row),
                _ => None,
            })
            .collect();

        let mut rows = Vec::with_capacity(self.plan.rows.len());
        let mut cur = input.clone();
        let mut softmax_output = None;
        for (i, row) in self.plan.rows.iter().enumerate() {
            match row.kind {
                LayerKind::Conv => {
                    let kernel = &self.params.layers[layer_of_row[i].unwrap()].kernel;
                    let pre = conv3d_forward(&cur, kernel, Padding::Same, 1)?;
                    let post = relu_forward(&pre);
                    if skip_sources.contains(&i) {
                        skips.insert(i, post.clone());
                    }
                    rows.push(RowCache::Conv {
                        input: cur,
                        output: post.clone(),
                    });
                    cur = post;
                }
                LayerKind::Pool => {
                    let (out, argmax) = maxpool3d_forward(&cur)?;
                    rows.push(RowCache::Pool { argmax });
                    cur = out;
                }
                LayerKind::UpConcat { skip_row } => {
                    let kernel = &self.params.layers[layer_of_row[i].unwrap()].kernel;
                    let up = transposed_conv3d_forward(&cur, kernel)?;
                    let skip = skips.remove(&skip_row).ok_or_else(|| Error::StaleCache {
                        message: format!("missing skip activation for row {skip_row}"),
                    })?;
                    let up_channels = up.shape()[3];
                    let cat = concat_channels(&up, &skip)?;
                    rows.push(RowCache::UpConcat {
                        input: cur,
                        up_channels,
                    });
                    cur = cat;
                }
                LayerKind::FinalConv => {
                    let kernel = &self.params.layers[layer_of_row[i].unwrap()].kernel;
                    let logits = conv3d_forward(&cur, kernel, Padding::Same, 1)?;
                    let p = softmax_channels(&logits)?;
                    rows.push(RowCache::Final { input: cur });
                    softmax_output = Some(p.clone());
                    cur = p;
                }
            }
        }
        let softmax_output = softmax_output.expect("plan ends with FinalConv");
        let planes = PredictionPlanes::from_softmax_output(&softmax_output)?;
        Ok((
            planes,
            ForwardCache {
                config: cfg.clone(),
                rows,
                softmax_output,
            },
        ))
    }

    /// Backpropagates the loss gradient with respect to the prediction
    /// planes through the whole network, returning one gradient per layer in
    /// parameter order.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_p0: &Tensor,
        grad_p1: &Tensor,
    ) -> Result<Vec<KernelGrad>> {
        if cache.config != self.plan.config {
            return Err(Error::StaleCache {
                message: "cache was produced by a different configuration".into(),
            });
        }
        if cache.rows.len() != self.plan.rows.len() {
            return Err(Error::StaleCache {
                message: format!(
                    "cache has {} rows, plan has {}",
                    cache.rows.len(),
                    self.plan.rows.len()
                ),
            });
        }
        let spatial = &cache.softmax_output.shape()[..3];
        if grad_p0.shape() != spatial || grad_p1.shape() != spatial {
            return Err(Error::shape_mismatch(
                "plane gradients",
                spatial,
                grad_p0.shape(),
            ));
        }

        // interleave the plane gradients into channel-last layout and chain
        // through the softmax
        let mut grad_p = Tensor::zeros(cache.softmax_output.shape().to_vec());
        for i in 0..grad_p0.len() {
            grad_p.data_mut()[2 * i] = grad_p0.data()[i];
            grad_p.data_mut()[2 * i + 1] = grad_p1.data()[i];
        }
        let mut grad = softmax_backward(&cache.softmax_output, &grad_p)?;

        let layer_of_row = self.layer_index_by_row();
        let mut grads = self.params.zero_grads();
        let mut pending: HashMap<usize, Tensor> = HashMap::new();

        for i in (0..self.plan.rows.len()).rev() {
            if let Some(extra) = pending.remove(&i) {
                if extra.shape() != grad.shape() {
                    return Err(Error::StaleCache {
                        message: format!("skip gradient shape mismatch at row {i}"),
                    });
                }
                for (g, e) in grad.data_mut().iter_mut().zip(extra.iter()) {
                    *g += e;
                }
            }
            match (&self.plan.rows[i].kind, &cache.rows[i]) {
                (LayerKind::Conv, RowCache::Conv { input, output }) => {
                    let g_pre = relu_backward(output, &grad)?;
                    let kernel = &self.params.layers[layer_of_row[i].unwrap()].kernel;
                    let (d_in, kg) = conv3d_backward(input, kernel, &g_pre, Padding::Same, 1)?;
                    grads[layer_of_row[i].unwrap()] = kg;
                    grad = d_in;
                }
                (LayerKind::Pool, RowCache::Pool { argmax }) => {
                    grad = maxpool3d_backward(argmax, &grad)?;
                }
                (
                    LayerKind::UpConcat { skip_row },
                    RowCache::UpConcat { input, up_channels },
                ) => {
                    let (g_up, g_skip) = split_channels(&grad, *up_channels)?;
                    pending
                        .entry(*skip_row)
                        .and_modify(|t| {
                            for (a, b) in t.data_mut().iter_mut().zip(g_skip.iter()) {
                                *a += b;
                            }
                        })
                        .or_insert(g_skip);
                    let kernel = &self.params.layers[layer_of_row[i].unwrap()].kernel;
                    let (d_in, kg) = transposed_conv3d_backward(input, kernel, &g_up)?;
                    grads[layer_of_row[i].unwrap()] = kg;
                    grad = d_in;
                }
                (LayerKind::FinalConv, RowCache::Final { input }) => {
                    let kernel = &self.params.layers[layer_of_row[i].unwrap()].kernel;
                    let (d_in, kg) = conv3d_backward(input, kernel, &grad, Padding::Same, 1)?;
                    grads[layer_of_row[i].unwrap()] = kg;
                    grad = d_in;
                }
                _ => {
                    return Err(Error::StaleCache {
                        message: format!("cache row {i} does not match the plan"),
                    })
                }
            }
        }
        if !self.plan.config.use_bias {
            for kg in &mut grads {
                for b in &mut kg.d_bias {
                    *b = 0.0;
                }
            }
        }
        Ok(grads)
    }
}

/// Writes `TVNET1`, the config as canonical JSON (length-prefixed), then
/// each layer's weights and bias as little-endian f64 in layer order.
pub fn save_checkpoint(path: &Path, config: &NetConfig, params: &NetParams) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let header = serde_json::to_vec(config)?;
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for layer in &params.layers {
        for v in layer.kernel.weights.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for b in &layer.kernel.bias {
            buf.extend_from_slice(&b.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

fn read_exact_or_truncated(
    reader: &mut impl Read,
    buf: &mut [u8],
    context: &str,
) -> Result<()> {
    reader.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated {
                context: context.into(),
            }
        } else {
            Error::Io(e)
        }
    })
}

/// Reads a checkpoint back; the layer layout is rebuilt from the stored
/// config's shape plan, so a round trip is bit-exact.
pub fn load_checkpoint(path: &Path) -> Result<(NetConfig, NetParams)> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 6];
    read_exact_or_truncated(&mut file, &mut magic, "checkpoint magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let mut len_bytes = [0u8; 4];
    read_exact_or_truncated(&mut file, &mut len_bytes, "checkpoint header length")?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header = vec![0u8; header_len];
    read_exact_or_truncated(&mut file, &mut header, "checkpoint header")?;
    let config: NetConfig = serde_json::from_slice(&header).map_err(|e| Error::HeaderMismatch {
        message: format!("checkpoint config: {e}"),
    })?;
    let plan = plan_shapes(&config)?;

    let mut layers = Vec::new();
    for (_, row) in plan.parameterized_rows() {
        let shape = row.kernel_shape().expect("parameterized row");
        let n_weights: usize = shape.iter().product();
        let mut weights = vec![0.0f64; n_weights];
        for v in weights.iter_mut() {
            let mut b = [0u8; 8];
            read_exact_or_truncated(&mut file, &mut b, &format!("weights of {}", row.name))?;
            *v = f64::from_le_bytes(b);
        }
        let mut bias = vec![0.0f64; shape[4]];
        for v in bias.iter_mut() {
            let mut b = [0u8; 8];
            read_exact_or_truncated(&mut file, &mut b, &format!("bias of {}", row.name))?;
            *v = f64::from_le_bytes(b);
        }
        layers.push(NamedKernel {
            name: row.name.clone(),
            kernel: ConvKernel::new(Tensor::new(shape.to_vec(), weights)?, bias)?,
        });
    }
    let mut trailer = [0u8; 1];
    if file.read(&mut trailer)? != 0 {
        return Err(Error::HeaderMismatch {
            message: "checkpoint has trailing bytes beyond the parameter payload".into(),
        });
    }
    Ok((config, NetParams { layers }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> NetConfig {
        NetConfig {
            input_shape: [8, 8, 8],
            in_channels: 2,
            levels: 1,
            base_features: 2,
            out_classes: 2,
            use_bias: true,
            seed: 7,
        }
    }

    #[test]
    fn full_scale_plan_reproduces_reference_table() {
        let plan = plan_shapes(&full_scale_config()).unwrap();
        assert_eq!(plan.rows.len(), 26);
        let mismatches = verify_full_scale(&plan);
        assert!(mismatches.is_empty(), "{mismatches:?}");
    }

    #[test]
    fn full_scale_first_and_concat_rows() {
        let plan = plan_shapes(&full_scale_config()).unwrap();
        let c1 = &plan.rows[0];
        assert_eq!(c1.name, "C1");
        assert_eq!(c1.input_shape, [128, 224, 256, 3]);
        assert_eq!(c1.output_shape, [128, 224, 256, 16]);
        let e5 = plan.rows.iter().find(|r| r.name == "E5").unwrap();
        assert_eq!(e5.input_shape[3], 192, "E5 input channels = 64 skip + 128 up");
    }

    #[test]
    fn feature_count_doubles_per_level() {
        let plan = plan_shapes(&full_scale_config()).unwrap();
        let mut prev = 0;
        for row in &plan.rows {
            if let LayerKind::Pool = row.kind {
                let ch = row.output_shape[3];
                if prev != 0 {
                    assert_eq!(ch, prev * 2);
                }
                prev = ch;
            }
        }
    }

    #[test]
    fn small_config_hand_propagation() {
        let cfg = NetConfig {
            input_shape: [16, 16, 16],
            in_channels: 1,
            levels: 2,
            base_features: 4,
            out_classes: 2,
            use_bias: true,
            seed: 0,
        };
        let plan = plan_shapes(&cfg).unwrap();
        assert_eq!(plan.rows.len(), 14);
        let last = plan.rows.last().unwrap();
        assert_eq!(last.output_shape, [16, 16, 16, 2]);
        // bottom sits at 4^3 with 16 features
        let bottom = plan.rows.iter().find(|r| r.name == "C8").unwrap();
        assert_eq!(bottom.output_shape, [4, 4, 4, 16]);
        // topmost expanding conv keeps the concat width (8 up + 4 skip)
        let e5 = plan.rows.iter().find(|r| r.name == "E5").unwrap();
        assert_eq!(e5.input_shape[3], 12);
        assert_eq!(e5.output_shape[3], 12);
    }

    #[test]
    fn non_divisible_extent_names_the_axis() {
        let cfg = NetConfig {
            input_shape: [8, 12, 8],
            in_channels: 1,
            levels: 3,
            base_features: 2,
            out_classes: 2,
            use_bias: true,
            seed: 0,
        };
        let err = plan_shapes(&cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("height") && msg.contains("12"), "got: {msg}");
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = tiny_config();
        let a = init_params(&cfg).unwrap();
        let b = init_params(&cfg).unwrap();
        assert_eq!(a, b);
        let mut cfg2 = cfg;
        cfg2.seed = 8;
        let c = init_params(&cfg2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_variance_tracks_fan_in() {
        let cfg = NetConfig {
            input_shape: [16, 16, 16],
            in_channels: 16,
            levels: 1,
            base_features: 16,
            out_classes: 2,
            use_bias: true,
            seed: 31,
        };
        let params = init_params(&cfg).unwrap();
        // first layer kernel is 3x3x3x16x16
        let k = &params.layers[0].kernel;
        assert_eq!(k.weights.shape(), &[3, 3, 3, 16, 16]);
        let n = k.weights.len() as f64;
        let mean = k.weights.sum() / n;
        let var = k.weights.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expected = 2.0 / (27.0 * 16.0);
        assert!(
            (var - expected).abs() < 0.2 * expected,
            "sample variance {var} vs He target {expected}"
        );
        assert!(k.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn forward_output_is_normalized_and_input_shaped() {
        let cfg = tiny_config();
        let net = Network::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = Tensor::from_fn(vec![8, 8, 8, 2], |_| rng.gen_range(-1.0..1.0));
        let (planes, cache) = net.forward(&input).unwrap();
        assert_eq!(planes.p0().shape(), &[8, 8, 8]);
        for (a, b) in planes.p0().iter().zip(planes.p1().iter()) {
            assert!((a + b - 1.0).abs() < 1e-12);
        }
        assert_eq!(cache.softmax_output().shape(), &[8, 8, 8, 2]);
    }

    #[test]
    fn zero_input_with_zero_biases_gives_uniform_half() {
        let cfg = tiny_config();
        let net = Network::new(&cfg).unwrap();
        let input = Tensor::zeros(vec![8, 8, 8, 2]);
        let (planes, _) = net.forward(&input).unwrap();
        for &v in planes.p0().iter() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let net = Network::new(&tiny_config()).unwrap();
        let input = Tensor::zeros(vec![8, 8, 8, 3]);
        assert!(net.forward(&input).is_err());
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let cfg = tiny_config();
        let net = Network::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = Tensor::from_fn(vec![8, 8, 8, 2], |_| rng.gen_range(-1.0..1.0));
        let (_, cache) = net.forward(&input).unwrap();
        let zero = Tensor::zeros(vec![8, 8, 8]);
        let grads = net.backward(&cache, &zero, &zero).unwrap();
        for kg in grads {
            assert!(kg.d_weights.iter().all(|&v| v == 0.0));
            assert!(kg.d_bias.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let cfg = tiny_config();
        let net = Network::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let input = Tensor::from_fn(vec![8, 8, 8, 2], |_| rng.gen_range(-1.0..1.0));
        let g0 = Tensor::from_fn(vec![8, 8, 8], |_| rng.gen_range(-1.0..1.0));
        let g1 = Tensor::from_fn(vec![8, 8, 8], |_| rng.gen_range(-1.0..1.0));
        let (_, cache) = net.forward(&input).unwrap();
        let a = net.backward(&cache, &g0, &g1).unwrap();
        let b = net.backward(&cache, &g0, &g1).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.d_weights, y.d_weights);
            assert_eq!(x.d_bias, y.d_bias);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let cfg = tiny_config();
        let net = Network::new(&cfg).unwrap();
        let input = Tensor::zeros(vec![8, 8, 8, 2]);
        let (_, cache) = net.forward(&input).unwrap();
        let mut cfg2 = cfg;
        cfg2.seed = 99;
        cfg2.base_features = 4;
        let net2 = Network::new(&cfg2).unwrap();
        let zero = Tensor::zeros(vec![8, 8, 8]);
        assert!(matches!(
            net2.backward(&cache, &zero, &zero),
            Err(Error::StaleCache { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.tvnet");
        let cfg = tiny_config();
        let net = Network::new(&cfg).unwrap();
        save_checkpoint(&path, &cfg, &net.params).unwrap();
        let (cfg2, params2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(params2, net.params);
        // byte-identical on re-save
        save_checkpoint(&dir.path().join("net2.tvnet"), &cfg2, &params2).unwrap();
        let a = std::fs::read(&path).unwrap();
        let b = std::fs::read(dir.path().join("net2.tvnet")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.tvnet");
        let cfg = tiny_config();
        let net = Network::new(&cfg).unwrap();
        save_checkpoint(&path, &cfg, &net.params).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let bad = dir.path().join("bad.tvnet");
        std::fs::write(&bad, b"NOTNET".iter().chain(&bytes[6..]).copied().collect::<Vec<u8>>())
            .unwrap();
        assert!(matches!(
            load_checkpoint(&bad),
            Err(Error::BadMagic { .. })
        ));

        let short = dir.path().join("short.tvnet");
        std::fs::write(&short, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            load_checkpoint(&short),
            Err(Error::Truncated { .. })
        ));
    }
}
