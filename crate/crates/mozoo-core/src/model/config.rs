use crate::error::{Error, Result};
use crate::rope::RopeConfig;

/// Hyperparameters of the miniature diffusion transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_mult: usize,
    /// Patch sizes `(p_t, p_h, p_w)`; each must divide the corresponding
    /// video dimension.
    pub patch: (usize, usize, usize),
    pub rope: RopeConfig,
}

impl ModelConfig {
    pub fn new(
        layers: usize,
        heads: usize,
        model_dim: usize,
        ff_mult: usize,
        patch: (usize, usize, usize),
        rope: RopeConfig,
    ) -> Result<Self> {
        let cfg = Self {
            layers,
            heads,
            model_dim,
            ff_mult,
            patch,
            rope,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.ff_mult == 0 {
            return Err(Error::Config(format!(
                "layers/heads/model_dim/ff_mult must be positive: {self:?}"
            )));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim {} must be even for rotary pairs",
                self.head_dim()
            )));
        }
        let (pt, ph, pw) = self.patch;
        if pt == 0 || ph == 0 || pw == 0 {
            return Err(Error::Config("patch sizes must be positive".into()));
        }
        if self.rope.head_dim != self.head_dim() {
            return Err(Error::Config(format!(
                "rope head_dim {} does not match model head_dim {}",
                self.rope.head_dim,
                self.head_dim()
            )));
        }
        self.rope.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn ff_dim(&self) -> usize {
        self.model_dim * self.ff_mult
    }

    /// Input width of a video token (target, mesh, video reference).
    pub fn video_token_dim(&self) -> usize {
        let (pt, ph, pw) = self.patch;
        pt * ph * pw * 3
    }

    /// Input width of a mask token (single channel, single frame).
    pub fn mask_token_dim(&self) -> usize {
        let (_, ph, pw) = self.patch;
        ph * pw
    }

    /// Input width of an image-reference token (single frame).
    pub fn image_token_dim(&self) -> usize {
        let (_, ph, pw) = self.patch;
        ph * pw * 3
    }

    /// Exact trainable parameter count; a pure function of the config.
    pub fn param_count(&self) -> usize {
        let d = self.model_dim;
        let f = self.ff_dim();
        let dv = self.video_token_dim();
        let dm = self.mask_token_dim();
        let di = self.image_token_dim();
        let linear = |i: usize, o: usize| i * o + o;
        let embeds = linear(dv, d) * 3 + linear(dm, d) + linear(di, d) + 4 * d;
        let time = linear(d, d) * 2;
        let block = linear(d, d) * 4          // q, k, v, o
            + linear(d, f) * 2 + linear(f, d) // gated feed-forward
            + linear(d, 6 * d);               // per-block modulation
        let finals = linear(d, 2 * d) + linear(d, dv);
        embeds + time + self.layers * block + finals
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig::new(
            2,
            2,
            16,
            2,
            (1, 4, 4),
            RopeConfig::for_head_dim(8, 4).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn rejects_indivisible_heads() {
        let rope = RopeConfig::for_head_dim(6, 4).unwrap();
        assert!(ModelConfig::new(1, 3, 16, 2, (1, 2, 2), rope).is_err());
    }

    #[test]
    fn rejects_rope_head_dim_mismatch() {
        let rope = RopeConfig::for_head_dim(6, 4).unwrap();
        assert!(ModelConfig::new(1, 2, 16, 2, (1, 2, 2), rope).is_err());
    }

    #[test]
    fn token_dims_follow_patch() {
        let cfg = tiny();
        assert_eq!(cfg.video_token_dim(), 48);
        assert_eq!(cfg.mask_token_dim(), 16);
        assert_eq!(cfg.image_token_dim(), 48);
    }
}
