//! Aligned training triplets and cross-species evaluation pairs.

use super::scene::{render_frame, sample_trajectory, SceneSpec, SubjectGeometry, SubjectTexture};
use super::video::{mask_to_tensor, video_to_tensor, Frame, MaskFrame};
use crate::error::{Error, Result};
use crate::flow::TrainSample;
use crate::model::ConditioningBundle;
use crate::rng::substream;
use crate::rope::RefModality;

/// One training unit: bit-aligned target/mesh passes, per-frame masks, and
/// a reference clip of the same subject on a disjoint trajectory.
#[derive(Debug, Clone)]
pub struct TripletSample {
    pub spec: SceneSpec,
    pub ref_modality: RefModality,
    pub target: Vec<Frame>,
    pub mesh: Vec<Frame>,
    pub first_frame_mask: MaskFrame,
    pub masks: Vec<MaskFrame>,
    pub reference: Vec<Frame>,
}

impl TripletSample {
    /// Tensor view for training: normalized target plus conditioning.
    pub fn to_train_sample(&self) -> Result<TrainSample> {
        Ok(TrainSample {
            target: video_to_tensor(&self.target)?,
            cond: self.conditioning()?,
        })
    }

    pub fn conditioning(&self) -> Result<ConditioningBundle> {
        Ok(ConditioningBundle {
            mesh_video: video_to_tensor(&self.mesh)?,
            first_frame_mask: mask_to_tensor(&self.first_frame_mask)?,
            reference: video_to_tensor(&self.reference)?,
            ref_modality: self.ref_modality,
        })
    }
}

/// Render the reference clip for `spec`: same subject geometry and texture,
/// trajectory drawn from an independent substream and rejected until it
/// differs from the target path.
fn render_reference(
    spec: &SceneSpec,
    geo: &SubjectGeometry,
    tex: &SubjectTexture,
    ref_modality: RefModality,
) -> Result<Vec<Frame>> {
    let frames = match ref_modality {
        RefModality::Video => spec.frames,
        RefModality::Image => 1,
    };
    let target_centers: Vec<(i64, i64)> =
        (0..frames).map(|f| spec.trajectory.center_at(f)).collect();
    let mut rng = substream(spec.seed, "ref-trajectory");
    let trajectory = loop {
        let candidate = sample_trajectory(&mut rng, geo, frames, spec.height, spec.width)?;
        let centers: Vec<(i64, i64)> = (0..frames).map(|f| candidate.center_at(f)).collect();
        if centers != target_centers {
            break candidate;
        }
    };
    Ok((0..frames)
        .map(|f| render_frame(spec, geo, tex, trajectory.center_at(f)).0)
        .collect())
}

/// Generate the aligned (target, mesh, mask, reference) tuple for a scene.
///
/// The target pass rasterizes the textured subject; the mesh pass
/// rasterizes the identical silhouette in flat gray over the identical
/// background; masks equal the silhouette per frame.
pub fn generate_triplet(spec: &SceneSpec, ref_modality: RefModality) -> Result<TripletSample> {
    spec.validate()?;
    let geo = SubjectGeometry::from_seed(spec.seed, spec.shape, spec.height, spec.width);
    let tex = SubjectTexture::from_spec(spec);

    let mut target = Vec::with_capacity(spec.frames);
    let mut mesh = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    for f in 0..spec.frames {
        let (t, m, k) = render_frame(spec, &geo, &tex, spec.trajectory.center_at(f));
        target.push(t);
        mesh.push(m);
        masks.push(k);
    }
    let reference = render_reference(spec, &geo, &tex, ref_modality)?;
    Ok(TripletSample {
        spec: spec.clone(),
        ref_modality,
        target,
        mesh,
        first_frame_mask: masks[0].clone(),
        masks,
        reference,
    })
}

/// Cross-species evaluation pair: motion (mesh + masks) from one scene,
/// appearance (reference) from another. Carries no ground-truth target.
#[derive(Debug, Clone)]
pub struct CrossSpeciesPair {
    pub motion_spec: SceneSpec,
    pub texture_spec: SceneSpec,
    pub ref_modality: RefModality,
    pub mesh: Vec<Frame>,
    pub first_frame_mask: MaskFrame,
    pub masks: Vec<MaskFrame>,
    pub reference: Vec<Frame>,
    /// Both specs carry the same shape, texture and palette; the pair
    /// degenerates to an in-species sample.
    pub degenerate: bool,
}

impl CrossSpeciesPair {
    pub fn conditioning(&self) -> Result<ConditioningBundle> {
        Ok(ConditioningBundle {
            mesh_video: video_to_tensor(&self.mesh)?,
            first_frame_mask: mask_to_tensor(&self.first_frame_mask)?,
            reference: video_to_tensor(&self.reference)?,
            ref_modality: self.ref_modality,
        })
    }
}

/// Route motion from `spec_motion` and appearance from `spec_texture`.
pub fn generate_cross_species(
    spec_motion: &SceneSpec,
    spec_texture: &SceneSpec,
    ref_modality: RefModality,
) -> Result<CrossSpeciesPair> {
    spec_motion.validate()?;
    spec_texture.validate()?;
    if spec_motion.height != spec_texture.height || spec_motion.width != spec_texture.width {
        return Err(Error::Spec(
            "motion and texture scenes must share frame dimensions".into(),
        ));
    }
    let degenerate = spec_motion.shape == spec_texture.shape
        && spec_motion.texture == spec_texture.texture
        && spec_motion.palette == spec_texture.palette;

    let motion_geo =
        SubjectGeometry::from_seed(spec_motion.seed, spec_motion.shape, spec_motion.height, spec_motion.width);
    let motion_tex = SubjectTexture::from_spec(spec_motion);
    let mut mesh = Vec::with_capacity(spec_motion.frames);
    let mut masks = Vec::with_capacity(spec_motion.frames);
    for f in 0..spec_motion.frames {
        let (_, m, k) = render_frame(
            spec_motion,
            &motion_geo,
            &motion_tex,
            spec_motion.trajectory.center_at(f),
        );
        mesh.push(m);
        masks.push(k);
    }

    let texture_geo = SubjectGeometry::from_seed(
        spec_texture.seed,
        spec_texture.shape,
        spec_texture.height,
        spec_texture.width,
    );
    let texture_tex = SubjectTexture::from_spec(spec_texture);
    let reference = render_reference(spec_texture, &texture_geo, &texture_tex, ref_modality)?;

    Ok(CrossSpeciesPair {
        motion_spec: spec_motion.clone(),
        texture_spec: spec_texture.clone(),
        ref_modality,
        first_frame_mask: masks[0].clone(),
        mesh,
        masks,
        reference,
        degenerate,
    })
}
