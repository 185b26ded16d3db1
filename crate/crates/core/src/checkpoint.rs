//! Binary tensor container used for models, students and synthetic sets.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "DFQVITCK"
//! version    u16
//! count      u32
//! count x {  name_len u16, name (UTF-8), rank u8, extents u32 x rank,
//!            payload f32 x product(extents) }
//! config_len u32
//! config     config_len bytes (JSON)
//! ```
//!
//! Values are computed in f64 and stored as f32 (`as` cast, round to nearest
//! even); loading widens exactly, so save/load/save is byte-stable.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::quant::{QuantConfig, QuantParams, QuantizedViT};
use crate::synthesis::{BatchLog, LossTerms, SynthConfig, SynthSet};
use crate::tensor::Tensor;
use crate::vit::{ActSite, MicroViT, ViTConfig, ViTParams};

pub const MAGIC: &[u8; 8] = b"DFQVITCK";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub tensors: Vec<(String, Tensor)>,
    pub config: Vec<u8>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn take(&self, name: &str) -> Result<Tensor> {
        self.get(name)
            .cloned()
            .ok_or_else(|| LabError::Format(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.tensors.len()).map_err(too_big)?.to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            out.extend_from_slice(&u16::try_from(nb.len()).map_err(too_big)?.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(u8::try_from(t.rank()).map_err(too_big)?);
            for &e in t.shape() {
                out.extend_from_slice(&u32::try_from(e).map_err(too_big)?.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&u32::try_from(self.config.len()).map_err(too_big)?.to_le_bytes());
        out.extend_from_slice(&self.config);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(LabError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes(read_array(&mut r)?);
        if version != VERSION {
            return Err(LabError::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = u16::from_le_bytes(read_array(&mut r)?) as usize;
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| LabError::Format("tensor name is not UTF-8".into()))?;
            let rank = u8::from_le_bytes(read_array(&mut r)?) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(read_array(&mut r)?) as usize);
            }
            let numel: usize = shape.iter().product();
            if numel * 4 > r.len() {
                return Err(LabError::Format(format!("tensor {name:?} payload is truncated")));
            }
            let data = (0..numel)
                .map(|_| read_array(&mut r).map(|b| f32::from_le_bytes(b) as f64))
                .collect::<Result<Vec<f64>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| LabError::Format(format!("tensor {name:?}: {e}")))?;
            tensors.push((name, t));
        }
        let len = u32::from_le_bytes(read_array(&mut r)?) as usize;
        if len != r.len() {
            return Err(LabError::Format("config blob length does not match file size".into()));
        }
        Ok(Container {
            tensors,
            config: r.to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => LabError::MissingCheckpoint(path.to_path_buf()),
            _ => LabError::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn config_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_slice(&self.config).map_err(|e| LabError::Format(format!("config blob: {e}")))
    }
}

fn too_big<E>(_: E) -> LabError {
    LabError::Format("value does not fit the checkpoint field width".into())
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| LabError::Format("checkpoint is truncated".into()))
}

fn read_array<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

/// Rounds every value through f32, matching what a checkpoint stores.
pub fn round_to_f32(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

#[derive(Serialize, Deserialize)]
struct ModelBlob {
    kind: String,
    model: ViTConfig,
}

pub fn model_container(m: &MicroViT) -> Result<Container> {
    let names = ViTParams::<Tensor>::names(m.config.layers);
    let tensors = names.into_iter().zip(m.params.refs().into_iter().cloned()).collect();
    let blob = ModelBlob {
        kind: "model".into(),
        model: m.config.clone(),
    };
    Ok(Container {
        tensors,
        config: serde_json::to_vec_pretty(&blob)?,
    })
}

pub fn model_from_container(c: &Container) -> Result<MicroViT> {
    let blob: ModelBlob = c.config_as()?;
    let names = ViTParams::<Tensor>::names(blob.model.layers);
    let values = names.iter().map(|n| c.take(n)).collect::<Result<Vec<_>>>()?;
    let params = ViTParams::from_ordered(blob.model.layers, values)
        .ok_or_else(|| LabError::Format("parameter count mismatch".into()))?;
    MicroViT::from_params(blob.model, params)
}

pub fn save_model(m: &MicroViT, path: &Path) -> Result<()> {
    model_container(m)?.save(path)
}

pub fn load_model(path: &Path) -> Result<MicroViT> {
    model_from_container(&Container::load(path)?)
}

#[derive(Serialize, Deserialize)]
struct StudentBlob {
    kind: String,
    model: ViTConfig,
    quant: QuantConfig,
    act_sites: Vec<ActSite>,
}

/// Student checkpoint: model tensors plus `<site>.scale`, `<site>.zero` and
/// `<site>.range` (EMA min/max, when tracked) per activation site.
pub fn save_student(q: &QuantizedViT, path: &Path) -> Result<()> {
    let mut c = model_container(&q.model)?;
    for (site, p) in &q.acts {
        let n = site.name();
        c.tensors.push((format!("{n}.scale"), Tensor::vector(p.scale.clone())));
        c.tensors.push((format!("{n}.zero"), Tensor::vector(p.zero.clone())));
        if let (Some(lo), Some(hi)) = (p.ema_min, p.ema_max) {
            c.tensors.push((format!("{n}.range"), Tensor::vector(vec![lo, hi])));
        }
    }
    let blob = StudentBlob {
        kind: "student".into(),
        model: q.model.config.clone(),
        quant: q.config.clone(),
        act_sites: q.acts.keys().copied().collect(),
    };
    c.config = serde_json::to_vec_pretty(&blob)?;
    c.save(path)
}

pub fn load_student(path: &Path) -> Result<QuantizedViT> {
    let c = Container::load(path)?;
    let blob: StudentBlob = c.config_as()?;
    if blob.kind != "student" {
        return Err(LabError::Format(format!("expected a student checkpoint, found {:?}", blob.kind)));
    }
    let model = model_from_container(&c)?;
    let mut q = QuantizedViT::new(model, blob.quant)?;
    for site in blob.act_sites {
        let n = site.name();
        let range = c.get(&format!("{n}.range"));
        q.acts.insert(
            site,
            QuantParams {
                scale: c.take(&format!("{n}.scale"))?.into_data(),
                zero: c.take(&format!("{n}.zero"))?.into_data(),
                ema_min: range.map(|r| r.data()[0]),
                ema_max: range.map(|r| r.data()[1]),
                trainable: q.config.mode == crate::quant::QuantMode::Lsq,
            },
        );
    }
    Ok(q)
}

#[derive(Serialize, Deserialize)]
struct SynthBlob {
    kind: String,
    synth: SynthConfig,
    batches: Vec<BatchLog>,
}

/// Synthetic set: `images`, `labels`, per-image `coherency` and `terms`
/// (`[n, 3]` rows of ihc, cl, tv); config and batch logs in the blob.
pub fn save_synth(set: &SynthSet, cfg: &SynthConfig, path: &Path) -> Result<()> {
    let n = set.len();
    let terms: Vec<f64> = set.terms.iter().flat_map(|t| [t.ihc, t.cl, t.tv]).collect();
    let c = Container {
        tensors: vec![
            ("images".into(), set.images.clone()),
            ("labels".into(), Tensor::vector(set.labels.iter().map(|&l| l as f64).collect())),
            ("coherency".into(), Tensor::vector(set.coherency.clone())),
            ("terms".into(), Tensor::new(vec![n, 3], terms)?),
        ],
        config: serde_json::to_vec_pretty(&SynthBlob {
            kind: "synth".into(),
            synth: cfg.clone(),
            batches: set.batches.clone(),
        })?,
    };
    c.save(path)
}

pub fn load_synth(path: &Path) -> Result<(SynthSet, SynthConfig)> {
    let c = Container::load(path)?;
    let blob: SynthBlob = c.config_as()?;
    if blob.kind != "synth" {
        return Err(LabError::Format(format!("expected a synthetic set, found {:?}", blob.kind)));
    }
    let images = c.take("images")?;
    let labels: Vec<usize> = c.take("labels")?.data().iter().map(|&v| v as usize).collect();
    let coherency = c.take("coherency")?.into_data();
    let terms = c.take("terms")?;
    let n = labels.len();
    if images.shape().first() != Some(&n) || coherency.len() != n || terms.shape() != [n, 3] {
        return Err(LabError::Format("synthetic set tensors disagree on the image count".into()));
    }
    let terms = terms
        .data()
        .chunks(3)
        .map(|r| LossTerms {
            total: f64::NAN,
            ihc: r[0],
            cl: r[1],
            tv: r[2],
        })
        .collect();
    let set = SynthSet {
        images,
        labels,
        coherency,
        terms,
        batches: blob.batches,
    };
    Ok((set, blob.synth))
}

/// Reads just the JSON blob of a container and the `kind` it declares.
pub fn container_kind(c: &Container) -> Option<String> {
    let v: serde_json::Value = serde_json::from_slice(&c.config).ok()?;
    v.get("kind")?.as_str().map(str::to_string)
}
