//! AFDM checkpoints.
//!
//! ```text
//! "AFDM"  u32 version  u32 deploy  u32 tap(1-4)
//! u32 n_meta   { u32 len, key utf8, u32 len, value utf8 } × n_meta
//! u32 n_tensor { u32 len, name utf8, u32 rank, u32 dims[rank], f32 data[] } × n_tensor
//! ```
//!
//! All integers and floats are little-endian. Tensor names are
//! `backbone.<param>` or `afd.<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use afd_core::backbone::{BackboneParams, TapDepth, ToyBackbone};
use afd_core::fde::FdeNet;
use afd_core::fenet::{fe_to_deploy, FeNet};
use afd_core::params::Parameterized;
use afd_core::trainer::AfdModule;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{read_file, write_file, AfdError, Result};

pub const MAGIC: &[u8; 4] = b"AFDM";
pub const VERSION: u32 = 1;

pub const BACKBONE_PREFIX: &str = "backbone";
pub const AFD_PREFIX: &str = "afd";
pub const KEY_NUM_CLASSES: &str = "num_classes";
pub const KEY_FE_WIDTH: &str = "fe_width";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub deploy: bool,
    pub tap: TapDepth,
    pub tensors: Vec<NamedTensor>,
}

fn collect<M: Parameterized>(model: &M, prefix: &str) -> Vec<NamedTensor> {
    model
        .params(prefix)
        .into_iter()
        .map(|p| NamedTensor {
            name: p.name,
            dims: p.dims,
            data: p.data.to_vec(),
        })
        .collect()
}

/// Fills `model` from the tensors under `prefix`. Every parameter must be
/// present with matching dims.
fn fill<M: Parameterized>(model: &mut M, prefix: &str, tensors: &[NamedTensor], context: &str) -> Result<()> {
    let by_name: BTreeMap<&str, &NamedTensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    for p in model.params_mut(prefix) {
        let t = by_name
            .get(p.name.as_str())
            .ok_or_else(|| AfdError::format(context, format!("missing tensor {}", p.name)))?;
        if t.dims != p.dims {
            return Err(AfdError::format(
                context,
                format!("tensor {} has dims {:?}, expected {:?}", p.name, t.dims, p.dims),
            ));
        }
        p.data.copy_from_slice(&t.data);
    }
    Ok(())
}

fn names<M: Parameterized>(model: &M, prefix: &str) -> Vec<String> {
    model.params(prefix).into_iter().map(|p| p.name).collect()
}

fn afd_template(tap: TapDepth, width: usize, deploy: bool) -> Result<AfdModule> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fe = FeNet::new(tap.channels(), width, &mut rng);
    Ok(AfdModule {
        fde: FdeNet::zeros(),
        fe: if deploy { fe_to_deploy(&fe)? } else { fe },
        tap,
    })
}

impl Checkpoint {
    /// Bundles a backbone and/or an enhancement module. Model-derived
    /// metadata overrides entries of the same name in `metadata`.
    pub fn from_models(
        backbone: Option<&ToyBackbone>,
        afd: Option<&AfdModule>,
        mut metadata: BTreeMap<String, String>,
    ) -> Checkpoint {
        let mut tensors = Vec::new();
        if let Some(b) = backbone {
            metadata.insert(KEY_NUM_CLASSES.into(), b.num_classes().to_string());
            tensors.extend(collect(b.params(), BACKBONE_PREFIX));
        }
        if let Some(m) = afd {
            metadata.insert(KEY_FE_WIDTH.into(), m.fe.width().to_string());
            tensors.extend(collect(m, AFD_PREFIX));
        }
        Checkpoint {
            metadata,
            deploy: afd.is_some_and(|m| m.is_deploy()),
            tap: afd.map_or(TapDepth::D2, |m| m.tap),
            tensors,
        }
    }

    fn meta_usize(&self, key: &str) -> Result<Option<usize>> {
        self.metadata
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| AfdError::format("checkpoint", format!("metadata {key}={v:?} is not an integer")))
            })
            .transpose()
    }

    fn has_prefix(&self, prefix: &str) -> bool {
        let dotted = format!("{prefix}.");
        self.tensors.iter().any(|t| t.name.starts_with(&dotted))
    }

    pub fn has_backbone(&self) -> bool {
        self.has_prefix(BACKBONE_PREFIX)
    }

    pub fn has_afd(&self) -> bool {
        self.has_prefix(AFD_PREFIX)
    }

    pub fn backbone(&self) -> Result<ToyBackbone> {
        let classes = self
            .meta_usize(KEY_NUM_CLASSES)?
            .filter(|_| self.has_backbone())
            .ok_or_else(|| AfdError::format("checkpoint", "no backbone in checkpoint"))?;
        let mut params = BackboneParams::zeros(classes);
        fill(&mut params, BACKBONE_PREFIX, &self.tensors, "checkpoint")?;
        Ok(ToyBackbone::freeze(params)?)
    }

    pub fn afd(&self) -> Result<AfdModule> {
        let width = self
            .meta_usize(KEY_FE_WIDTH)?
            .filter(|_| self.has_afd())
            .ok_or_else(|| AfdError::format("checkpoint", "no enhancement module in checkpoint"))?;
        let mut module = afd_template(self.tap, width, self.deploy)?;
        fill(&mut module, AFD_PREFIX, &self.tensors, "checkpoint")?;
        Ok(module)
    }

    /// Rejects tensors that no model in the checkpoint would consume.
    fn check_names(&self, context: &str) -> Result<()> {
        let mut known = Vec::new();
        if self.has_backbone() {
            known.extend(names(self.backbone()?.params(), BACKBONE_PREFIX));
        }
        if self.has_afd() {
            known.extend(names(&self.afd()?, AFD_PREFIX));
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tensors {
            if !known.contains(&t.name) {
                return Err(AfdError::format(context, format!("unknown tensor name {:?}", t.name)));
            }
            if !seen.insert(&t.name) {
                return Err(AfdError::format(context, format!("duplicate tensor name {:?}", t.name)));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put_u32 = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.deploy as u32);
        put_u32(&mut out, self.tap as u32 + 1);
        put_u32(&mut out, self.metadata.len() as u32);
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.tensors.len() as u32);
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            put_u32(&mut out, t.dims.len() as u32);
            for &d in &t.dims {
                put_u32(&mut out, d as u32);
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], context: &str) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0, context };
        if r.take(4)? != MAGIC {
            return Err(AfdError::format(context, "missing AFDM magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(AfdError::format(context, format!("unsupported checkpoint version {version}")));
        }
        let deploy = match r.u32()? {
            0 => false,
            1 => true,
            v => return Err(AfdError::format(context, format!("bad deploy flag {v}"))),
        };
        let tap = match r.u32()? {
            t @ 1..=4 => TapDepth::ALL[t as usize - 1],
            t => return Err(AfdError::format(context, format!("bad tap depth {t}"))),
        };
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(AfdError::format(context, format!("tensor {name:?} has rank {rank}")));
            }
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| AfdError::format(context, "tensor size overflows"))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| AfdError::format(context, "tensor size overflows"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push(NamedTensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(AfdError::format(context, "trailing bytes after last tensor"));
        }
        let ckpt = Checkpoint {
            metadata,
            deploy,
            tap,
            tensors,
        };
        ckpt.check_names(context)?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::decode(&read_file(path)?, &path.display().to_string())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| AfdError::format(self.context, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| AfdError::format(self.context, "name is not UTF-8"))
    }
}
