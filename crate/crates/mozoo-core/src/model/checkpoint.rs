//! Binary checkpoint format.
//!
//! Layout: magic `MZOO`, format version (u32 LE), tensor count (u32 LE),
//! then per tensor: name length (u32 LE), name bytes, rank (u32 LE), dims
//! (u64 LE each), payload as f32 LE; finally a length-prefixed (u32 LE)
//! text block carrying the model config and training metadata. Round-trips
//! are bit-exact.

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::rope::RopeConfig;
use crate::tensor::{OptimState, Tensor};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"MZOO";
const VERSION: u32 = 1;

/// Model hyperparameters plus every learned tensor, keyed by name.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    pub train_steps: u64,
    pub seed: u64,
}

impl Checkpoint {
    /// Fresh parameters: truncated normal weights, zero biases, and zeroed
    /// residual-branch output projections (attention out, feed-forward out,
    /// velocity head), so an untrained model predicts exactly zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "init");
        let d = config.model_dim;
        let f = config.ff_dim();
        let dv = config.video_token_dim();
        let dm = config.mask_token_dim();
        let di = config.image_token_dim();
        let sigma = 0.02;

        let mut params = BTreeMap::new();
        fn dense(
            params: &mut BTreeMap<String, Tensor>,
            name: String,
            i: usize,
            o: usize,
            sigma: f32,
            rng: &mut rand_chacha::ChaCha8Rng,
        ) {
            params.insert(name.clone() + ".w", Tensor::trunc_normal(&[i, o], sigma, rng));
            params.insert(name + ".b", Tensor::zeros(&[o]));
        }
        fn zero_dense(params: &mut BTreeMap<String, Tensor>, name: String, i: usize, o: usize) {
            params.insert(name.clone() + ".w", Tensor::zeros(&[i, o]));
            params.insert(name + ".b", Tensor::zeros(&[o]));
        }

        dense(&mut params, "embed.target".into(), dv, d, sigma, &mut rng);
        dense(&mut params, "embed.mesh".into(), dv, d, sigma, &mut rng);
        dense(&mut params, "embed.mask".into(), dm, d, sigma, &mut rng);
        dense(&mut params, "embed.ref_video".into(), dv, d, sigma, &mut rng);
        dense(&mut params, "embed.ref_image".into(), di, d, sigma, &mut rng);
        params.insert(
            "embed.type".into(),
            Tensor::trunc_normal(&[4, d], sigma, &mut rng),
        );
        dense(&mut params, "time.mlp1".into(), d, d, sigma, &mut rng);
        dense(&mut params, "time.mlp2".into(), d, d, sigma, &mut rng);
        for layer in 0..config.layers {
            dense(&mut params, format!("block{layer}.attn.q"), d, d, sigma, &mut rng);
            dense(&mut params, format!("block{layer}.attn.k"), d, d, sigma, &mut rng);
            dense(&mut params, format!("block{layer}.attn.v"), d, d, sigma, &mut rng);
            zero_dense(&mut params, format!("block{layer}.attn.o"), d, d);
            dense(&mut params, format!("block{layer}.ffn.gate"), d, f, sigma, &mut rng);
            dense(&mut params, format!("block{layer}.ffn.up"), d, f, sigma, &mut rng);
            zero_dense(&mut params, format!("block{layer}.ffn.down"), f, d);
            dense(&mut params, format!("block{layer}.mod"), d, 6 * d, sigma, &mut rng);
        }
        dense(&mut params, "final.mod".into(), d, 2 * d, sigma, &mut rng);
        zero_dense(&mut params, "final.head".into(), d, dv);

        let ckpt = Self {
            config,
            params,
            train_steps: 0,
            seed,
        };
        debug_assert_eq!(ckpt.actual_param_count(), ckpt.config.param_count());
        Ok(ckpt)
    }

    /// Sum of parameter element counts (excludes optimizer state).
    pub fn actual_param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    fn meta_block(&self, optim: Option<&OptimState>) -> String {
        let r = &self.config.rope;
        let (pt, ph, pw) = self.config.patch;
        let (st, sh, sw) = r.pair_split;
        let mut s = String::new();
        s.push_str(&format!("layers = {}\n", self.config.layers));
        s.push_str(&format!("heads = {}\n", self.config.heads));
        s.push_str(&format!("model_dim = {}\n", self.config.model_dim));
        s.push_str(&format!("ff_mult = {}\n", self.config.ff_mult));
        s.push_str(&format!("patch = {pt} {ph} {pw}\n"));
        s.push_str(&format!("base_frequency = {}\n", r.base_frequency));
        s.push_str(&format!("pair_split = {st} {sh} {sw}\n"));
        s.push_str(&format!("delta = {}\n", r.delta));
        s.push_str(&format!("train_steps = {}\n", self.train_steps));
        s.push_str(&format!("seed = {}\n", self.seed));
        if let Some(o) = optim {
            s.push_str(&format!("optim_lr = {}\n", o.learning_rate));
            s.push_str(&format!("optim_step = {}\n", o.step_count()));
        }
        s
    }

    /// Write the checkpoint, optionally with optimizer state so training
    /// can resume bit-exactly.
    pub fn save(&self, path: &Path, optim: Option<&OptimState>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;

        let mut entries: Vec<(String, &Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t))
            .collect();
        if let Some(o) = optim {
            let (m, v) = o.moments();
            entries.extend(m.iter().map(|(n, t)| (format!("optim.m.{n}"), t)));
            entries.extend(v.iter().map(|(n, t)| (format!("optim.v.{n}"), t)));
        }
        w.write_all(&(entries.len() as u32).to_le_bytes())?;
        for (name, tensor) in entries {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
            for &dim in tensor.shape() {
                w.write_all(&(dim as u64).to_le_bytes())?;
            }
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        let meta = self.meta_block(optim);
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(meta.as_bytes())?;
        w.flush()?;
        Ok(())
    }

    /// Read a checkpoint back, together with any stored optimizer state.
    pub fn load(path: &Path) -> Result<(Self, Option<OptimState>)> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::MalformedHeader(format!(
                "bad checkpoint magic {magic:?}"
            )));
        }
        let version = read_u32(&mut r, "version")?;
        if version != VERSION {
            return Err(Error::MalformedHeader(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = read_u32(&mut r, "tensor count")?;
        let mut params = BTreeMap::new();
        let mut opt_m = BTreeMap::new();
        let mut opt_v = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r, "name length")? as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_exact(&mut r, &mut name_bytes, "tensor name")?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Parse("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut r, "rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r, "dim")? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut payload = vec![0u8; numel * 4];
            read_exact(&mut r, &mut payload, "tensor payload")?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let tensor = Tensor::new(&shape, data)?;
            if let Some(rest) = name.strip_prefix("optim.m.") {
                opt_m.insert(rest.to_string(), tensor);
            } else if let Some(rest) = name.strip_prefix("optim.v.") {
                opt_v.insert(rest.to_string(), tensor);
            } else if params.insert(name.clone(), tensor).is_some() {
                return Err(Error::Parse(format!("duplicate tensor name {name}")));
            }
        }
        let meta_len = read_u32(&mut r, "meta length")? as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        read_exact(&mut r, &mut meta_bytes, "meta block")?;
        let mut trailer = Vec::new();
        r.read_to_end(&mut trailer)?;
        if !trailer.is_empty() {
            return Err(Error::Parse(format!(
                "{} trailing bytes after checkpoint",
                trailer.len()
            )));
        }
        let meta = String::from_utf8(meta_bytes)
            .map_err(|_| Error::Parse("meta block is not UTF-8".into()))?;
        let fields = parse_meta(&meta)?;

        let config = ModelConfig::new(
            field(&fields, "layers")?.parse().map_err(bad("layers"))?,
            field(&fields, "heads")?.parse().map_err(bad("heads"))?,
            field(&fields, "model_dim")?.parse().map_err(bad("model_dim"))?,
            field(&fields, "ff_mult")?.parse().map_err(bad("ff_mult"))?,
            parse_triple(field(&fields, "patch")?)?,
            RopeConfig {
                head_dim: {
                    let md: usize = field(&fields, "model_dim")?.parse().map_err(bad("model_dim"))?;
                    let h: usize = field(&fields, "heads")?.parse().map_err(bad("heads"))?;
                    if h == 0 {
                        return Err(Error::Parse("heads = 0 in checkpoint".into()));
                    }
                    md / h
                },
                base_frequency: field(&fields, "base_frequency")?
                    .parse()
                    .map_err(bad("base_frequency"))?,
                pair_split: parse_triple(field(&fields, "pair_split")?)?,
                delta: field(&fields, "delta")?.parse().map_err(bad("delta"))?,
            },
        )?;
        let ckpt = Self {
            config,
            params,
            train_steps: field(&fields, "train_steps")?.parse().map_err(bad("train_steps"))?,
            seed: field(&fields, "seed")?.parse().map_err(bad("seed"))?,
        };
        let optim = match (fields.get("optim_lr"), fields.get("optim_step")) {
            (Some(lr), Some(step)) => Some(OptimState::from_parts(
                lr.parse().map_err(bad("optim_lr"))?,
                step.parse().map_err(bad("optim_step"))?,
                opt_m,
                opt_v,
            )?),
            _ => None,
        };
        Ok((ckpt, optim))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Truncated(format!("checkpoint ended inside {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn parse_meta(meta: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for line in meta.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("meta line without '=': {line}")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn field<'a>(fields: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    fields
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Parse(format!("checkpoint meta missing {key}")))
}

fn bad<E>(key: &'static str) -> impl Fn(E) -> Error {
    move |_| Error::Parse(format!("checkpoint meta field {key} does not parse"))
}

fn parse_triple(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::Parse(format!("expected three integers, got {s:?}")));
    }
    let p: Vec<usize> = parts
        .iter()
        .map(|p| p.parse().map_err(|_| Error::Parse(format!("bad integer {p}"))))
        .collect::<Result<_>>()?;
    Ok((p[0], p[1], p[2]))
}
