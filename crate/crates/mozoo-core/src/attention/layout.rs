use crate::error::{Error, Result};

/// The four functional segments of the packed sequence, in their fixed
/// order: target, mesh, mask, reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Target,
    Mesh,
    Mask,
    Reference,
}

/// Bookkeeping for the packed sequence `[target, mesh, mask, reference]`.
///
/// Target and mesh carry `frames` latent frames of `grid_h * grid_w` tokens
/// each; the mask contributes `mask_tokens`; the reference contributes
/// `ref_frames` frames (1 for an image reference).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentLayout {
    pub frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub mask_tokens: usize,
    pub ref_frames: usize,
}

impl SegmentLayout {
    pub fn new(
        frames: usize,
        grid_h: usize,
        grid_w: usize,
        mask_tokens: usize,
        ref_frames: usize,
    ) -> Result<Self> {
        let layout = Self {
            frames,
            grid_h,
            grid_w,
            mask_tokens,
            ref_frames,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0
            || self.grid_h == 0
            || self.grid_w == 0
            || self.mask_tokens == 0
            || self.ref_frames == 0
        {
            return Err(Error::Layout(format!(
                "all segment lengths must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// Tokens per latent frame (the spatial grid size).
    pub fn tokens_per_frame(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn target_len(&self) -> usize {
        self.frames * self.tokens_per_frame()
    }

    pub fn mesh_len(&self) -> usize {
        self.target_len()
    }

    pub fn mask_len(&self) -> usize {
        self.mask_tokens
    }

    pub fn ref_len(&self) -> usize {
        self.ref_frames * self.tokens_per_frame()
    }

    pub fn total_len(&self) -> usize {
        self.target_len() + self.mesh_len() + self.mask_len() + self.ref_len()
    }

    pub fn target_offset(&self) -> usize {
        0
    }

    pub fn mesh_offset(&self) -> usize {
        self.target_len()
    }

    pub fn mask_offset(&self) -> usize {
        self.target_len() + self.mesh_len()
    }

    pub fn ref_offset(&self) -> usize {
        self.target_len() + self.mesh_len() + self.mask_len()
    }

    /// Segment containing absolute token index `idx`.
    pub fn segment_of(&self, idx: usize) -> Result<Segment> {
        if idx < self.mesh_offset() {
            Ok(Segment::Target)
        } else if idx < self.mask_offset() {
            Ok(Segment::Mesh)
        } else if idx < self.ref_offset() {
            Ok(Segment::Mask)
        } else if idx < self.total_len() {
            Ok(Segment::Reference)
        } else {
            Err(Error::Layout(format!(
                "token index {idx} out of range {}",
                self.total_len()
            )))
        }
    }

    /// Latent frame of a target-segment token index (relative to the
    /// segment start).
    pub fn target_frame_of(&self, within_target: usize) -> usize {
        within_target / self.tokens_per_frame()
    }
}
