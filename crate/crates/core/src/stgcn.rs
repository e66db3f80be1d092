//! COCO-17 skeleton graph and the ST-GCN backbone.

use std::ops::RangeInclusive;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::nn::{self, Buffers, Forward};
use crate::pose::COCO_KEYPOINTS;
use crate::tensor::{BnLayout, ParamStore, Scalar, Tensor, Var};

/// Undirected bones of the COCO-17 skeleton.
pub const COCO_BONES: [(usize, usize); 18] = [
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (0, 5),
    (0, 6),
    (5, 7),
    (7, 9),
    (6, 8),
    (8, 10),
    (5, 11),
    (6, 12),
    (11, 13),
    (13, 15),
    (12, 14),
    (14, 16),
    (5, 6),
    (11, 12),
];

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonGraph {
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    /// `D^-1/2 (A + I) D^-1/2`, row-major `V x V`.
    pub a_hat: Vec<f64>,
}

impl SkeletonGraph {
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut a = vec![0.0; num_nodes * num_nodes];
        for &(u, v) in edges {
            contract!(u < num_nodes && v < num_nodes && u != v, "bad edge ({u}, {v})");
            a[u * num_nodes + v] = 1.0;
            a[v * num_nodes + u] = 1.0;
        }
        for i in 0..num_nodes {
            a[i * num_nodes + i] += 1.0;
        }
        let deg: Vec<f64> = a.chunks_exact(num_nodes).map(|r| r.iter().sum::<f64>()).collect();
        let a_hat = (0..num_nodes * num_nodes)
            .map(|i| {
                let (u, v) = (i / num_nodes, i % num_nodes);
                a[i] / (deg[u] * deg[v]).sqrt()
            })
            .collect();
        Ok(SkeletonGraph {
            num_nodes,
            edges: edges.to_vec(),
            a_hat,
        })
    }

    /// 0/1 adjacency without self-loops.
    pub fn adjacency(&self) -> Vec<f64> {
        let v = self.num_nodes;
        let mut a = vec![0.0; v * v];
        for &(p, q) in &self.edges {
            a[p * v + q] = 1.0;
            a[q * v + p] = 1.0;
        }
        a
    }

    pub fn neighbors(&self, u: usize) -> Vec<usize> {
        let a = self.adjacency();
        (0..self.num_nodes).filter(|&v| a[u * self.num_nodes + v] != 0.0).collect()
    }

    /// Normalized adjacency as a tensor in the working precision.
    pub fn a_hat_tensor<T: Scalar>(&self) -> Tensor<T> {
        let v = self.num_nodes;
        Tensor::from_fn([v, v], |i| T::lit(self.a_hat[i]))
    }
}

pub fn build_coco_graph() -> SkeletonGraph {
    SkeletonGraph::from_edges(COCO_KEYPOINTS, &COCO_BONES).expect("static edge table")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    #[default]
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset {s:?} (paper | desk)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl BlockSpec {
    pub fn has_projection(&self) -> bool {
        self.c_in != self.c_out || self.stride != 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub blocks: Vec<BlockSpec>,
    /// Temporal kernel size (odd).
    pub kernel: usize,
    pub dropout: f64,
}

impl BackboneConfig {
    /// Ten blocks: widths `w0` (blocks 1-4), `w1` (5-7), `w2` (8-10), with
    /// stride 2 at each width change.
    fn ten_blocks(w: [usize; 3]) -> Self {
        let mut blocks = Vec::with_capacity(10);
        let mut c_in = 3;
        for i in 0..10 {
            let (c_out, stride) = match i {
                0..=3 => (w[0], 1),
                4 => (w[1], 2),
                5 | 6 => (w[1], 1),
                7 => (w[2], 2),
                _ => (w[2], 1),
            };
            blocks.push(BlockSpec { c_in, c_out, stride });
            c_in = c_out;
        }
        BackboneConfig {
            in_channels: 3,
            blocks,
            kernel: 9,
            dropout: 0.2,
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::ten_blocks([64, 128, 256]),
            Preset::Desk => Self::ten_blocks([8, 16, 32]),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, |b| b.c_out)
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn validate(&self) -> Result<()> {
        contract!(!self.blocks.is_empty(), "backbone needs at least one block");
        contract!(self.kernel % 2 == 1, "temporal kernel must be odd, got {}", self.kernel);
        contract!((0.0..1.0).contains(&self.dropout), "dropout must be in [0, 1)");
        let mut c = self.in_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            contract!(b.c_in == c, "block {} expects {} channels but receives {c}", i + 1, b.c_in);
            contract!(b.stride >= 1 && b.c_out >= 1, "block {} has a zero stride or width", i + 1);
            c = b.c_out;
        }
        Ok(())
    }

    /// Temporal length after every block for an input of `t` frames.
    pub fn output_frames(&self, mut t: usize) -> usize {
        let pad = self.kernel / 2;
        for b in &self.blocks {
            t = (t + 2 * pad - self.kernel) / b.stride + 1;
        }
        t
    }
}

pub fn block_prefix(i: usize) -> String {
    format!("backbone.block{i}")
}

/// Parameters and buffers of a freshly initialized backbone.
pub fn init_backbone(
    cfg: &BackboneConfig,
    store: &mut ParamStore<f32>,
    buffers: &mut Buffers<f32>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    nn::init_batch_norm(store, buffers, "backbone.data_bn", cfg.in_channels * COCO_KEYPOINTS)?;
    for (i, b) in cfg.blocks.iter().enumerate() {
        let p = block_prefix(i + 1);
        nn::init_affine(store, rng, &format!("{p}.gcn"), &[b.c_out, b.c_in], b.c_in)?;
        nn::init_batch_norm(store, buffers, &format!("{p}.bn1"), b.c_out)?;
        nn::init_affine(
            store,
            rng,
            &format!("{p}.tcn"),
            &[b.c_out, b.c_out, cfg.kernel],
            b.c_out * cfg.kernel,
        )?;
        nn::init_batch_norm(store, buffers, &format!("{p}.bn2"), b.c_out)?;
        if b.has_projection() {
            nn::init_affine(store, rng, &format!("{p}.residual"), &[b.c_out, b.c_in, 1], b.c_in)?;
        }
    }
    Ok(())
}

/// One block: pointwise conv, graph multiplication, BN, relu, temporal
/// conv, BN, dropout, residual, relu. `residual = false` drops the skip
/// path (for ablation checks only).
pub fn block_forward<T: Scalar>(
    f: &mut Forward<T>,
    i: usize,
    spec: &BlockSpec,
    cfg: &BackboneConfig,
    x: Var,
    a_hat: Var,
    residual: bool,
) -> Result<Var> {
    let p = block_prefix(i);
    let (w, b) = (f.param(&format!("{p}.gcn.weight"))?, f.param(&format!("{p}.gcn.bias"))?);
    let h = f.tape.pointwise_linear(x, w, b)?;
    let h = f.tape.graph_mul(h, a_hat)?;
    let h = f.batch_norm(h, &format!("{p}.bn1"), BnLayout::Channel)?;
    let h = f.tape.relu(h);
    let (w, b) = (f.param(&format!("{p}.tcn.weight"))?, f.param(&format!("{p}.tcn.bias"))?);
    let h = f.tape.temporal_conv(h, w, b, spec.stride, cfg.kernel / 2)?;
    let h = f.batch_norm(h, &format!("{p}.bn2"), BnLayout::Channel)?;
    let mut h = f.dropout(h, cfg.dropout)?;
    if residual {
        let skip = if spec.has_projection() {
            let (w, b) = (
                f.param(&format!("{p}.residual.weight"))?,
                f.param(&format!("{p}.residual.bias"))?,
            );
            f.tape.temporal_conv(x, w, b, spec.stride, 0)?
        } else {
            x
        };
        h = f.tape.add(h, skip)?;
    }
    Ok(f.tape.relu(h))
}

pub struct BackboneOutput {
    /// `N x C` pooled embedding.
    pub embedding: Var,
    /// `N x C x T' x V` post-activation output of the last block.
    pub last_block: Var,
}

/// `x` is `N x 3 x T x V` (channels x, y, confidence).
pub fn backbone_forward<T: Scalar>(
    f: &mut Forward<T>,
    cfg: &BackboneConfig,
    x: Var,
    a_hat: Var,
) -> Result<BackboneOutput> {
    let (_, c, _, v) = f.tape.value(x).dims4()?;
    contract!(
        c == cfg.in_channels && v == COCO_KEYPOINTS,
        "backbone expects N x {} x T x {COCO_KEYPOINTS}, got {:?}",
        cfg.in_channels,
        f.tape.value(x).shape()
    );
    let mut h = f.batch_norm(x, "backbone.data_bn", BnLayout::ChannelNode)?;
    for (i, spec) in cfg.blocks.iter().enumerate() {
        h = block_forward(f, i + 1, spec, cfg, h, a_hat, true)?;
    }
    Ok(BackboneOutput {
        embedding: f.tape.global_avg_pool(h)?,
        last_block: h,
    })
}

/// Set the trainable flag of backbone blocks `range` (1-based, inclusive).
/// An empty range is a no-op.
pub fn set_trainable(
    store: &mut ParamStore<f32>,
    cfg: &BackboneConfig,
    range: RangeInclusive<usize>,
    flag: bool,
) -> Result<()> {
    if range.is_empty() {
        return Ok(());
    }
    contract!(
        *range.start() >= 1 && *range.end() <= cfg.num_blocks(),
        "block range {range:?} outside 1..={}",
        cfg.num_blocks()
    );
    for i in range {
        store.set_trainable_prefix(&format!("{}.", block_prefix(i)), flag);
    }
    Ok(())
}

/// Freeze or unfreeze every backbone parameter, data batch norm included.
pub fn set_backbone_trainable(store: &mut ParamStore<f32>, flag: bool) {
    store.set_trainable_prefix("backbone.", flag);
}
