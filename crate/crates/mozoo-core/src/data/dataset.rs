//! On-disk dataset format.
//!
//! Layout: `<root>/manifest.txt`, then per sample `<root>/<id>/` holding
//! `tar_%03d.ppm`, `mesh_%03d.ppm`, `mask_%03d.pgm`, `ref_%03d.ppm` (or
//! `ref.ppm` for image references) and `spec.txt`. The manifest lists every
//! file with its SHA-256 and byte length, so any corrupted payload byte is
//! caught at read time.

use super::pixmap::{read_p5, read_p6, write_p5, write_p6};
use super::scene::{Rgb, SceneSpec, ShapeKind, TextureKind, Trajectory};
use super::triplet::{CrossSpeciesPair, TripletSample};
use super::video::{Frame, MaskFrame};
use crate::error::{Error, Result};
use crate::flow::TrainSample;
use crate::model::ConditioningBundle;
use crate::rng::substream;
use crate::rope::RefModality;
use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

const MANIFEST_MAGIC: &str = "mozoo-dataset";
const MANIFEST_VERSION: u32 = 1;

/// Either unit the generator can emit.
#[derive(Debug, Clone)]
pub enum DatasetSample {
    Triplet(TripletSample),
    Cross(CrossSpeciesPair),
}

/// Manifest entry: sample id plus `(relative path, sha256, length)` per file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub files: Vec<(String, String, u64)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }
}

/// A sample read back from disk. Cross-species pairs carry no target.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub spec: SceneSpec,
    /// Present for cross-species pairs: the appearance donor.
    pub texture_spec: Option<SceneSpec>,
    pub ref_modality: RefModality,
    pub target: Option<Vec<Frame>>,
    pub mesh: Vec<Frame>,
    pub first_frame_mask: MaskFrame,
    pub masks: Vec<MaskFrame>,
    pub reference: Vec<Frame>,
}

impl LoadedSample {
    pub fn conditioning(&self) -> Result<ConditioningBundle> {
        Ok(ConditioningBundle {
            mesh_video: super::video::video_to_tensor(&self.mesh)?,
            first_frame_mask: super::video::mask_to_tensor(&self.first_frame_mask)?,
            reference: super::video::video_to_tensor(&self.reference)?,
            ref_modality: self.ref_modality,
        })
    }

    /// Tensor view for training; fails for samples without ground truth.
    pub fn to_train_sample(&self) -> Result<TrainSample> {
        let target = self.target.as_ref().ok_or_else(|| {
            Error::Contract(format!("sample {} has no ground-truth target", self.id))
        })?;
        Ok(TrainSample {
            target: super::video::video_to_tensor(target)?,
            cond: self.conditioning()?,
        })
    }
}

// ---------------------------------------------------------------------------
// Scene spec serialization
// ---------------------------------------------------------------------------

fn rgb_hex(c: Rgb) -> String {
    format!("{:02X}{:02X}{:02X}", c.0, c.1, c.2)
}

fn parse_rgb(s: &str) -> Result<Rgb> {
    if s.len() != 6 {
        return Err(Error::Parse(format!("bad color {s:?}")));
    }
    let byte = |r: &str| {
        u8::from_str_radix(r, 16).map_err(|_| Error::Parse(format!("bad color {s:?}")))
    };
    Ok(Rgb(byte(&s[0..2])?, byte(&s[2..4])?, byte(&s[4..6])?))
}

fn scene_lines(spec: &SceneSpec, out: &mut String) {
    out.push_str(&format!("seed = {}\n", spec.seed));
    out.push_str(&format!("frames = {}\n", spec.frames));
    out.push_str(&format!("height = {}\n", spec.height));
    out.push_str(&format!("width = {}\n", spec.width));
    out.push_str(&format!("shape = {}\n", spec.shape.name()));
    out.push_str(&format!("texture = {}\n", spec.texture.name()));
    out.push_str(&format!(
        "palette = {} {} {}\n",
        rgb_hex(spec.palette[0]),
        rgb_hex(spec.palette[1]),
        rgb_hex(spec.palette[2])
    ));
    out.push_str(&format!(
        "traj_start = {} {}\n",
        spec.trajectory.start.0, spec.trajectory.start.1
    ));
    out.push_str(&format!(
        "traj_velocity = {} {}\n",
        spec.trajectory.velocity.0, spec.trajectory.velocity.1
    ));
    match spec.trajectory.bob {
        Some((a, p)) => out.push_str(&format!("traj_bob = {a} {p}\n")),
        None => out.push_str("traj_bob = none\n"),
    }
    out.push_str(&format!("bg_top = {}\n", rgb_hex(spec.background.0)));
    out.push_str(&format!("bg_bottom = {}\n", rgb_hex(spec.background.1)));
}

fn scene_from_fields(fields: &BTreeMap<String, String>) -> Result<SceneSpec> {
    let get = |k: &str| {
        fields
            .get(k)
            .ok_or_else(|| Error::Parse(format!("scene spec missing {k}")))
    };
    let num = |k: &str| -> Result<f64> {
        get(k)?.parse().map_err(|_| Error::Parse(format!("bad number for {k}")))
    };
    let pair = |k: &str| -> Result<(f64, f64)> {
        let raw = get(k)?;
        let parts: Vec<&str> = raw.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(Error::Parse(format!("{k} wants two numbers")));
        }
        Ok((
            parts[0].parse().map_err(|_| Error::Parse(format!("bad {k}")))?,
            parts[1].parse().map_err(|_| Error::Parse(format!("bad {k}")))?,
        ))
    };
    let palette_raw = get("palette")?;
    let colors: Vec<&str> = palette_raw.split_whitespace().collect();
    if colors.len() != 3 {
        return Err(Error::Parse("palette wants three colors".into()));
    }
    let bob = match get("traj_bob")?.as_str() {
        "none" => None,
        _ => Some(pair("traj_bob")?),
    };
    Ok(SceneSpec {
        seed: get("seed")?
            .parse()
            .map_err(|_| Error::Parse("bad seed".into()))?,
        frames: num("frames")? as usize,
        height: num("height")? as usize,
        width: num("width")? as usize,
        shape: ShapeKind::parse(get("shape")?)?,
        texture: TextureKind::parse(get("texture")?)?,
        palette: [
            parse_rgb(colors[0])?,
            parse_rgb(colors[1])?,
            parse_rgb(colors[2])?,
        ],
        trajectory: Trajectory {
            start: pair("traj_start")?,
            velocity: pair("traj_velocity")?,
            bob,
        },
        background: (parse_rgb(get("bg_top")?)?, parse_rgb(get("bg_bottom")?)?),
    })
}

fn spec_text(sample: &DatasetSample) -> String {
    let mut out = String::new();
    match sample {
        DatasetSample::Triplet(t) => {
            out.push_str("kind = triplet\n");
            out.push_str(&format!("ref_mode = {}\n", mode_name(t.ref_modality)));
            out.push_str("[scene]\n");
            scene_lines(&t.spec, &mut out);
        }
        DatasetSample::Cross(c) => {
            out.push_str("kind = cross\n");
            out.push_str(&format!("ref_mode = {}\n", mode_name(c.ref_modality)));
            out.push_str("[scene]\n");
            scene_lines(&c.motion_spec, &mut out);
            out.push_str("[texture_scene]\n");
            scene_lines(&c.texture_spec, &mut out);
        }
    }
    out
}

fn mode_name(m: RefModality) -> &'static str {
    match m {
        RefModality::Video => "video",
        RefModality::Image => "image",
    }
}

fn parse_mode(s: &str) -> Result<RefModality> {
    match s {
        "video" => Ok(RefModality::Video),
        "image" => Ok(RefModality::Image),
        _ => Err(Error::Parse(format!("unknown ref mode {s:?}"))),
    }
}

struct ParsedSpec {
    kind: String,
    ref_modality: RefModality,
    scene: SceneSpec,
    texture_scene: Option<SceneSpec>,
}

fn parse_spec_text(text: &str) -> Result<ParsedSpec> {
    let mut head = BTreeMap::new();
    let mut sections: Vec<(String, BTreeMap<String, String>)> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            sections.push((name.to_string(), BTreeMap::new()));
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("spec line without '=': {line}")))?;
        let target = sections
            .last_mut()
            .map(|(_, m)| m)
            .unwrap_or(&mut head);
        target.insert(k.trim().to_string(), v.trim().to_string());
    }
    let kind = head
        .get("kind")
        .ok_or_else(|| Error::Parse("spec missing kind".into()))?
        .clone();
    let ref_modality = parse_mode(
        head.get("ref_mode")
            .ok_or_else(|| Error::Parse("spec missing ref_mode".into()))?,
    )?;
    let scene_fields = sections
        .iter()
        .find(|(n, _)| n == "scene")
        .map(|(_, f)| f)
        .ok_or_else(|| Error::Parse("spec missing [scene] section".into()))?;
    let scene = scene_from_fields(scene_fields)?;
    let texture_scene = match kind.as_str() {
        "triplet" => None,
        "cross" => Some(scene_from_fields(
            sections
                .iter()
                .find(|(n, _)| n == "texture_scene")
                .map(|(_, f)| f)
                .ok_or_else(|| Error::Parse("cross spec missing [texture_scene]".into()))?,
        )?),
        other => return Err(Error::Parse(format!("unknown sample kind {other:?}"))),
    };
    Ok(ParsedSpec {
        kind,
        ref_modality,
        scene,
        texture_scene,
    })
}

// ---------------------------------------------------------------------------
// Writing
// ---------------------------------------------------------------------------

fn sha_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn sample_files(sample: &DatasetSample) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let (mesh, masks, reference, ref_modality, target) = match sample {
        DatasetSample::Triplet(t) => (
            &t.mesh,
            &t.masks,
            &t.reference,
            t.ref_modality,
            Some(&t.target),
        ),
        DatasetSample::Cross(c) => (&c.mesh, &c.masks, &c.reference, c.ref_modality, None),
    };
    if let Some(target) = target {
        for (f, frame) in target.iter().enumerate() {
            files.push((format!("tar_{f:03}.ppm"), write_p6(frame)));
        }
    }
    for (f, frame) in mesh.iter().enumerate() {
        files.push((format!("mesh_{f:03}.ppm"), write_p6(frame)));
    }
    for (f, mask) in masks.iter().enumerate() {
        files.push((format!("mask_{f:03}.pgm"), write_p5(mask)));
    }
    match ref_modality {
        RefModality::Video => {
            for (f, frame) in reference.iter().enumerate() {
                files.push((format!("ref_{f:03}.ppm"), write_p6(frame)));
            }
        }
        RefModality::Image => files.push(("ref.ppm".to_string(), write_p6(&reference[0]))),
    }
    files.push(("spec.txt".to_string(), spec_text(sample).into_bytes()));
    files
}

/// Write samples under `dir` and return the manifest (also written as
/// `manifest.txt`). Ids are zero-padded indexes.
pub fn write_dataset(samples: &[DatasetSample], dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let id = format!("{i:03}");
        let sample_dir = dir.join(&id);
        fs::create_dir_all(&sample_dir)?;
        let mut files = Vec::new();
        for (name, bytes) in sample_files(sample) {
            fs::write(sample_dir.join(&name), &bytes)?;
            files.push((format!("{id}/{name}"), sha_hex(&bytes), bytes.len() as u64));
        }
        entries.push(ManifestEntry { id, files });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        entries,
    };
    fs::write(dir.join("manifest.txt"), manifest_text(&manifest))?;
    Ok(manifest)
}

fn manifest_text(manifest: &DatasetManifest) -> String {
    let mut out = format!("{MANIFEST_MAGIC} {}\n", manifest.version);
    for entry in &manifest.entries {
        out.push_str(&format!("sample {}\n", entry.id));
        for (path, sha, len) in &entry.files {
            out.push_str(&format!("file {path} {sha} {len}\n"));
        }
        out.push_str("end\n");
    }
    out
}

// ---------------------------------------------------------------------------
// Reading
// ---------------------------------------------------------------------------

/// Parse `manifest.txt` and verify every listed file exists with the
/// recorded length and SHA-256.
pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|e| Error::ManifestMismatch(format!("cannot read manifest: {e}")))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::MalformedHeader("empty manifest".into()))?;
    let (magic, version) = header
        .split_once(' ')
        .ok_or_else(|| Error::MalformedHeader("manifest header wants 'magic version'".into()))?;
    if magic != MANIFEST_MAGIC {
        return Err(Error::MalformedHeader(format!(
            "bad manifest magic {magic:?}"
        )));
    }
    let version: u32 = version
        .parse()
        .map_err(|_| Error::MalformedHeader("bad manifest version".into()))?;
    if version != MANIFEST_VERSION {
        return Err(Error::MalformedHeader(format!(
            "unsupported manifest version {version}"
        )));
    }
    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut current: Option<ManifestEntry> = None;
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(id) = line.strip_prefix("sample ") {
            if current.is_some() {
                return Err(Error::Parse("sample block not closed by 'end'".into()));
            }
            if entries.iter().any(|e| e.id == id) {
                return Err(Error::Parse(format!("duplicate sample id {id}")));
            }
            current = Some(ManifestEntry {
                id: id.to_string(),
                files: Vec::new(),
            });
        } else if let Some(rest) = line.strip_prefix("file ") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::Parse(format!("bad manifest file line: {line}")));
            }
            let len: u64 = parts[2]
                .parse()
                .map_err(|_| Error::Parse(format!("bad file length in: {line}")))?;
            current
                .as_mut()
                .ok_or_else(|| Error::Parse("file line outside sample block".into()))?
                .files
                .push((parts[0].to_string(), parts[1].to_string(), len));
        } else if line == "end" {
            entries.push(
                current
                    .take()
                    .ok_or_else(|| Error::Parse("'end' without open sample".into()))?,
            );
        } else {
            return Err(Error::Parse(format!("unrecognized manifest line: {line}")));
        }
    }
    if current.is_some() {
        return Err(Error::Parse("manifest ended inside a sample block".into()));
    }
    let manifest = DatasetManifest { version, entries };

    for entry in &manifest.entries {
        for (path, sha, len) in &entry.files {
            let bytes = fs::read(dir.join(path)).map_err(|_| {
                Error::ManifestMismatch(format!("listed file {path} is missing"))
            })?;
            if bytes.len() as u64 != *len {
                return Err(Error::ManifestMismatch(format!(
                    "{path}: length {} does not match manifest {len}",
                    bytes.len()
                )));
            }
            if &sha_hex(&bytes) != sha {
                return Err(Error::ManifestMismatch(format!(
                    "{path}: checksum does not match manifest"
                )));
            }
        }
    }
    Ok(manifest)
}

fn expected_files(id: &str, parsed: &ParsedSpec) -> Vec<String> {
    let mut out = Vec::new();
    let frames = parsed.scene.frames;
    if parsed.kind == "triplet" {
        for f in 0..frames {
            out.push(format!("{id}/tar_{f:03}.ppm"));
        }
    }
    for f in 0..frames {
        out.push(format!("{id}/mesh_{f:03}.ppm"));
    }
    for f in 0..frames {
        out.push(format!("{id}/mask_{f:03}.pgm"));
    }
    match parsed.ref_modality {
        RefModality::Video => {
            let ref_frames = parsed
                .texture_scene
                .as_ref()
                .map(|s| s.frames)
                .unwrap_or(frames);
            for f in 0..ref_frames {
                out.push(format!("{id}/ref_{f:03}.ppm"));
            }
        }
        RefModality::Image => out.push(format!("{id}/ref.ppm")),
    }
    out.push(format!("{id}/spec.txt"));
    out
}

/// Load every sample of a dataset, verifying the manifest first.
pub fn read_dataset(dir: &Path) -> Result<Vec<LoadedSample>> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        samples.push(read_sample(dir, entry)?);
    }
    Ok(samples)
}

/// Load one sample by manifest entry.
pub fn read_sample(dir: &Path, entry: &ManifestEntry) -> Result<LoadedSample> {
    let id = &entry.id;
    let spec_rel = format!("{id}/spec.txt");
    if !entry.files.iter().any(|(p, _, _)| p == &spec_rel) {
        return Err(Error::ManifestMismatch(format!(
            "sample {id} lists no spec.txt"
        )));
    }
    let parsed = parse_spec_text(&fs::read_to_string(dir.join(&spec_rel))?)?;
    let mut expect = expected_files(id, &parsed);
    let mut listed: Vec<String> = entry.files.iter().map(|(p, _, _)| p.clone()).collect();
    expect.sort();
    listed.sort();
    if expect != listed {
        return Err(Error::ManifestMismatch(format!(
            "sample {id}: listed files do not match its spec"
        )));
    }

    let frames = parsed.scene.frames;
    let load_rgb = |name: String| -> Result<Frame> { read_p6(&fs::read(dir.join(name))?) };
    let load_mask = |name: String| -> Result<MaskFrame> { read_p5(&fs::read(dir.join(name))?) };

    let target = if parsed.kind == "triplet" {
        let mut frames_v = Vec::with_capacity(frames);
        for f in 0..frames {
            frames_v.push(load_rgb(format!("{id}/tar_{f:03}.ppm"))?);
        }
        Some(frames_v)
    } else {
        None
    };
    let mut mesh = Vec::with_capacity(frames);
    let mut masks = Vec::with_capacity(frames);
    for f in 0..frames {
        mesh.push(load_rgb(format!("{id}/mesh_{f:03}.ppm"))?);
        masks.push(load_mask(format!("{id}/mask_{f:03}.pgm"))?);
    }
    let reference = match parsed.ref_modality {
        RefModality::Video => {
            let ref_frames = parsed
                .texture_scene
                .as_ref()
                .map(|s| s.frames)
                .unwrap_or(frames);
            let mut v = Vec::with_capacity(ref_frames);
            for f in 0..ref_frames {
                v.push(load_rgb(format!("{id}/ref_{f:03}.ppm"))?);
            }
            v
        }
        RefModality::Image => vec![load_rgb(format!("{id}/ref.ppm"))?],
    };
    Ok(LoadedSample {
        id: id.clone(),
        first_frame_mask: masks
            .first()
            .cloned()
            .ok_or_else(|| Error::ManifestMismatch(format!("sample {id} has no masks")))?,
        spec: parsed.scene,
        texture_spec: parsed.texture_scene,
        ref_modality: parsed.ref_modality,
        target,
        mesh,
        masks,
        reference,
    })
}

/// Deterministic disjoint split of the manifest ids.
pub fn split_dataset(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Contract(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut ids = manifest.ids();
    let n = ids.len();
    let n_train = (train_fraction * n as f64).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Contract(format!(
            "fraction {train_fraction} yields an empty split of {n} samples"
        )));
    }
    let mut rng = substream(seed, "split");
    ids.shuffle(&mut rng);
    let heldout = ids.split_off(n_train);
    Ok((ids, heldout))
}
