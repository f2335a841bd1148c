//! The miniature diffusion transformer.
//!
//! The noisy target, the mesh video, the first-frame mask and the reference
//! are patchified, projected to the model width, tagged with learned type
//! embeddings and packed into one sequence. Each block runs a
//! timestep-modulated pre-norm, role-aware rotary attention under the
//! asymmetric decoupled mask, and a gated feed-forward. The velocity head
//! reads only the target rows.

use super::checkpoint::Checkpoint;
use super::patch::{patchify, unpatchify};
use crate::attention::SegmentLayout;
use crate::attention::{build_ada_mask, AttnMask};
use crate::error::{Error, Result};
use crate::rope::{assign_coords, RefModality};
use crate::tensor::{Graph, NodeId, Tensor};
use std::sync::Arc;

/// Angular rate of the sinusoidal timestep embedding over t in [0, 1].
const TIME_SCALE: f64 = 10.0;

/// Clean conditioning streams for one sample.
#[derive(Debug, Clone)]
pub struct ConditioningBundle {
    /// `[frames, H, W, 3]`, same dims as the target.
    pub mesh_video: Tensor,
    /// `[1, H, W, 1]` with values in {0, 1}.
    pub first_frame_mask: Tensor,
    /// `[ref_frames, H, W, 3]`; a single frame for image references.
    pub reference: Tensor,
    pub ref_modality: RefModality,
}

impl ConditioningBundle {
    pub fn validate(&self) -> Result<()> {
        let m = self.mesh_video.shape();
        if m.len() != 4 || m[3] != 3 {
            return Err(Error::Shape(format!(
                "mesh video must be [frames, H, W, 3], got {m:?}"
            )));
        }
        let k = self.first_frame_mask.shape();
        if k != [1, m[1], m[2], 1] {
            return Err(Error::Shape(format!(
                "first-frame mask must be [1, {}, {}, 1], got {k:?}",
                m[1], m[2]
            )));
        }
        if self.first_frame_mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract("mask values must be 0 or 1".into()));
        }
        let r = self.reference.shape();
        if r.len() != 4 || r[1] != m[1] || r[2] != m[2] || r[3] != 3 {
            return Err(Error::Shape(format!(
                "reference must be [frames, {}, {}, 3], got {r:?}",
                m[1], m[2]
            )));
        }
        if self.ref_modality == RefModality::Image && r[0] != 1 {
            return Err(Error::Shape(format!(
                "image reference must carry exactly one frame, got {}",
                r[0]
            )));
        }
        Ok(())
    }
}

/// Concatenate projected segment tokens in the fixed order
/// `[target, mesh, mask, reference]`, checking counts against `layout`.
pub fn pack_sequence(
    target: &Tensor,
    mesh: &Tensor,
    mask: &Tensor,
    reference: &Tensor,
    layout: &SegmentLayout,
) -> Result<Tensor> {
    layout.validate()?;
    if target.shape()[0] != mesh.shape()[0] {
        return Err(Error::Layout(format!(
            "target carries {} tokens but mesh carries {}",
            target.shape()[0],
            mesh.shape()[0]
        )));
    }
    let wants = [
        (target, layout.target_len(), "target"),
        (mesh, layout.mesh_len(), "mesh"),
        (mask, layout.mask_len(), "mask"),
        (reference, layout.ref_len(), "reference"),
    ];
    let d = target.shape()[1];
    let mut data = Vec::with_capacity(layout.total_len() * d);
    for (tensor, len, name) in wants {
        if tensor.rank() != 2 || tensor.shape()[1] != d {
            return Err(Error::Layout(format!(
                "{name} tokens must be [{len}, {d}], got {:?}",
                tensor.shape()
            )));
        }
        if tensor.shape()[0] != len {
            return Err(Error::Layout(format!(
                "{name} segment wants {len} tokens, got {}",
                tensor.shape()[0]
            )));
        }
        data.extend_from_slice(tensor.data());
    }
    Tensor::new(&[layout.total_len(), d], data)
}

/// Rows of the target segment of a packed sequence.
pub fn unpack_target(packed: &Tensor, layout: &SegmentLayout) -> Result<Tensor> {
    if packed.rank() != 2 || packed.shape()[0] != layout.total_len() {
        return Err(Error::Layout(format!(
            "packed sequence must be [{}, d], got {:?}",
            layout.total_len(),
            packed.shape()
        )));
    }
    let d = packed.shape()[1];
    let data = packed.data()[..layout.target_len() * d].to_vec();
    Tensor::new(&[layout.target_len(), d], data)
}

/// Sinusoidal embedding of a scalar timestep, `[1, dim]`.
pub fn sinusoid_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0f32; dim];
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        let angle = t * TIME_SCALE * freq;
        data[2 * i] = angle.sin() as f32;
        data[2 * i + 1] = angle.cos() as f32;
    }
    Tensor::new(&[1, dim], data).expect("static shape")
}

/// Per-block scale/shift/gate vectors produced from a timestep.
pub struct BlockModulation {
    pub attn_scale: Tensor,
    pub attn_shift: Tensor,
    pub attn_gate: Tensor,
    pub ffn_scale: Tensor,
    pub ffn_shift: Tensor,
    pub ffn_gate: Tensor,
}

/// All modulation parameters derived from `t`.
pub struct Modulation {
    pub blocks: Vec<BlockModulation>,
    pub final_scale: Tensor,
    pub final_shift: Tensor,
}

struct Builder<'a> {
    ckpt: &'a Checkpoint,
    graph: Graph,
    bound: std::collections::BTreeSet<String>,
}

impl<'a> Builder<'a> {
    fn new(ckpt: &'a Checkpoint) -> Self {
        Self {
            ckpt,
            graph: Graph::new(),
            bound: std::collections::BTreeSet::new(),
        }
    }

    fn param(&mut self, name: &str) -> Result<NodeId> {
        let tensor = self
            .ckpt
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no parameter {name}")))?;
        self.bound.insert(name.to_string());
        Ok(self.graph.param(name, tensor))
    }

    /// Bind parameters the forward pass never touched (the off-modality
    /// reference projection), so backward reports zeros for them.
    fn bind_unused(&mut self) {
        for (name, tensor) in &self.ckpt.params {
            if !self.bound.contains(name) {
                self.graph.param(name, tensor);
            }
        }
    }

    fn linear(&mut self, x: NodeId, name: &str) -> Result<NodeId> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.param(&format!("{name}.b"))?;
        let xw = self.graph.matmul(x, w)?;
        self.graph.add(xw, b)
    }

    fn modulate(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        let one_plus = self.graph.add_scalar(scale, 1.0);
        let scaled = self.graph.mul(x, one_plus)?;
        self.graph.add(scaled, shift)
    }

    /// Sinusoid -> two-layer MLP; `[1, model_dim]`.
    fn time_embedding(&mut self, t: f64) -> Result<NodeId> {
        let sin = self.graph.leaf(sinusoid_embedding(t, self.ckpt.config.model_dim));
        let h = self.linear(sin, "time.mlp1")?;
        let h = self.graph.silu(h);
        self.linear(h, "time.mlp2")
    }

    /// Six `[1, d]` modulation rows for one block.
    fn block_modulation(&mut self, temb_silu: NodeId, layer: usize) -> Result<[NodeId; 6]> {
        let d = self.ckpt.config.model_dim;
        let packed = self.linear(temb_silu, &format!("block{layer}.mod"))?;
        let rows = self.graph.reshape(packed, &[6, d])?;
        let mut out = [rows; 6];
        for (j, slot) in out.iter_mut().enumerate() {
            *slot = self.graph.slice_rows(rows, j, 1)?;
        }
        Ok(out)
    }
}

/// Everything needed to attach a loss to the target-token prediction.
pub(crate) struct ForwardGraph {
    pub graph: Graph,
    pub pred_tokens: NodeId,
}

/// Build the full forward graph; `pred_tokens` is `[L_tgt, video_token_dim]`.
pub(crate) fn forward_graph(
    ckpt: &Checkpoint,
    noisy_target: &Tensor,
    cond: &ConditioningBundle,
    t: f64,
) -> Result<ForwardGraph> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("timestep {t} outside [0, 1]")));
    }
    let cfg = &ckpt.config;
    cfg.validate()?;
    cond.validate()?;
    let shape = noisy_target.shape();
    if shape.len() != 4 || shape[3] != 3 {
        return Err(Error::Shape(format!(
            "target must be [frames, H, W, 3], got {shape:?}"
        )));
    }
    if cond.mesh_video.shape() != shape {
        return Err(Error::Shape(format!(
            "mesh shape {:?} does not match target shape {shape:?}",
            cond.mesh_video.shape()
        )));
    }
    let (pt, ph, pw) = cfg.patch;
    let (frames, h, w) = (shape[0], shape[1], shape[2]);

    // tokenize every stream
    let (tgt_tok, _) = patchify(noisy_target, cfg.patch)?;
    let (mesh_tok, _) = patchify(&cond.mesh_video, cfg.patch)?;
    let (mask_tok, _) = patchify(&cond.first_frame_mask, (1, ph, pw))?;
    let ref_frames_px = cond.reference.shape()[0];
    let (ref_tok, ref_latent_frames) = match cond.ref_modality {
        RefModality::Video => {
            if ref_frames_px % pt != 0 {
                return Err(Error::Shape(format!(
                    "reference frame count {ref_frames_px} not divisible by patch_t {pt}"
                )));
            }
            (patchify(&cond.reference, cfg.patch)?.0, ref_frames_px / pt)
        }
        RefModality::Image => (patchify(&cond.reference, (1, ph, pw))?.0, 1),
    };

    let layout = SegmentLayout::new(frames / pt, h / ph, w / pw, mask_tok.shape()[0], ref_latent_frames)?;
    let coords = Arc::new(assign_coords(&layout, cond.ref_modality, cfg.rope.delta)?);
    let mask: Arc<AttnMask> = Arc::new(build_ada_mask(&layout)?);

    let mut b = Builder::new(ckpt);
    let d = cfg.model_dim;

    // project each segment and add its learned type embedding
    let type_table = b.param("embed.type")?;
    let mut segments = Vec::with_capacity(4);
    let inputs = [
        (tgt_tok, "embed.target", 0usize),
        (mesh_tok, "embed.mesh", 1),
        (mask_tok, "embed.mask", 2),
        (
            ref_tok,
            match cond.ref_modality {
                RefModality::Video => "embed.ref_video",
                RefModality::Image => "embed.ref_image",
            },
            3,
        ),
    ];
    for (tokens, proj, type_idx) in inputs {
        let rows = tokens.shape()[0];
        let leaf = b.graph.leaf(tokens);
        let projected = b.linear(leaf, proj)?;
        let type_row = b.graph.slice_rows(type_table, type_idx, 1)?;
        let tiled = b.graph.broadcast_rows(type_row, rows)?;
        segments.push(b.graph.add(projected, tiled)?);
    }
    let mut x = b.graph.concat_rows(&segments)?;

    // timestep conditioning applies to all segments uniformly
    let temb = b.time_embedding(t)?;
    let temb_silu = b.graph.silu(temb);

    let ln_gain = b.graph.leaf(Tensor::ones(&[d]));
    let ln_bias = b.graph.leaf(Tensor::zeros(&[d]));
    let total = layout.total_len();
    let (heads, dh) = (cfg.heads, cfg.head_dim());

    for layer in 0..cfg.layers {
        let [s1, sh1, g1, s2, sh2, g2] = b.block_modulation(temb_silu, layer)?;

        let normed = b.graph.layer_norm(x, ln_gain, ln_bias, 1e-5)?;
        let a = b.modulate(normed, s1, sh1)?;
        let q = b.linear(a, &format!("block{layer}.attn.q"))?;
        let k = b.linear(a, &format!("block{layer}.attn.k"))?;
        let v = b.linear(a, &format!("block{layer}.attn.v"))?;
        let q = b.graph.reshape(q, &[total, heads, dh])?;
        let k = b.graph.reshape(k, &[total, heads, dh])?;
        let v = b.graph.reshape(v, &[total, heads, dh])?;
        let q = b.graph.rope(q, Arc::clone(&coords), &cfg.rope)?;
        let k = b.graph.rope(k, Arc::clone(&coords), &cfg.rope)?;
        let attn = b.graph.attn_block(q, k, v, Arc::clone(&mask))?;
        let attn = b.graph.reshape(attn, &[total, d])?;
        let attn = b.linear(attn, &format!("block{layer}.attn.o"))?;
        let gated = b.graph.mul(attn, g1)?;
        x = b.graph.add(x, gated)?;

        let normed = b.graph.layer_norm(x, ln_gain, ln_bias, 1e-5)?;
        let a = b.modulate(normed, s2, sh2)?;
        let gate = b.linear(a, &format!("block{layer}.ffn.gate"))?;
        let gate = b.graph.silu(gate);
        let up = b.linear(a, &format!("block{layer}.ffn.up"))?;
        let hidden = b.graph.mul(gate, up)?;
        let down = b.linear(hidden, &format!("block{layer}.ffn.down"))?;
        let gated = b.graph.mul(down, g2)?;
        x = b.graph.add(x, gated)?;

        if !b.graph.value(x).is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite activation after layer {layer}"
            )));
        }
    }

    // velocity head over the target rows only
    let tgt_rows = b.graph.slice_rows(x, 0, layout.target_len())?;
    let normed = b.graph.layer_norm(tgt_rows, ln_gain, ln_bias, 1e-5)?;
    let fin = b.linear(temb_silu, "final.mod")?;
    let fin = b.graph.reshape(fin, &[2, d])?;
    let f_scale = b.graph.slice_rows(fin, 0, 1)?;
    let f_shift = b.graph.slice_rows(fin, 1, 1)?;
    let modded = b.modulate(normed, f_scale, f_shift)?;
    let pred_tokens = b.linear(modded, "final.head")?;
    b.bind_unused();

    Ok(ForwardGraph {
        graph: b.graph,
        pred_tokens,
    })
}

/// Predict the velocity field for a noisy target under the given
/// conditioning, shaped like the target.
pub fn forward(
    ckpt: &Checkpoint,
    noisy_target: &Tensor,
    cond: &ConditioningBundle,
    t: f64,
) -> Result<Tensor> {
    let fg = forward_graph(ckpt, noisy_target, cond, t)?;
    let tokens = fg.graph.value(fg.pred_tokens);
    let shape = noisy_target.shape();
    unpatchify(tokens, ckpt.config.patch, shape[0], shape[1], shape[2], 3)
}

/// Modulation parameters for every block at timestep `t`; deterministic
/// in `t`.
pub fn timestep_embed(ckpt: &Checkpoint, t: f64) -> Result<Modulation> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("timestep {t} outside [0, 1]")));
    }
    let d = ckpt.config.model_dim;
    let mut b = Builder::new(ckpt);
    let temb = b.time_embedding(t)?;
    let temb_silu = b.graph.silu(temb);
    let mut blocks = Vec::with_capacity(ckpt.config.layers);
    for layer in 0..ckpt.config.layers {
        let ids = b.block_modulation(temb_silu, layer)?;
        let grab = |b: &Builder, id: NodeId| b.graph.value(id).clone();
        blocks.push(BlockModulation {
            attn_scale: grab(&b, ids[0]),
            attn_shift: grab(&b, ids[1]),
            attn_gate: grab(&b, ids[2]),
            ffn_scale: grab(&b, ids[3]),
            ffn_shift: grab(&b, ids[4]),
            ffn_gate: grab(&b, ids[5]),
        });
    }
    let fin = b.linear(temb_silu, "final.mod")?;
    let fin = b.graph.reshape(fin, &[2, d])?;
    let f_scale = b.graph.slice_rows(fin, 0, 1)?;
    let f_shift = b.graph.slice_rows(fin, 1, 1)?;
    Ok(Modulation {
        final_scale: b.graph.value(f_scale).clone(),
        final_shift: b.graph.value(f_shift).clone(),
        blocks,
    })
}
