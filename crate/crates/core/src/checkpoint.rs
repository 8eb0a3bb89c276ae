//! Binary checkpoint files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "BGAN"  u32 version  u32 len  [len bytes JSON metadata]  u32 count
//! count x { u32 name_len  name  u32 rank  rank x u32 dim  prod(dims) x f32 }
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! Records are named `param/<name>`, then `adam.m/<name>` and `adam.v/<name>`
//! when optimizer state is present.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_discriminator, init_generator, ModelConfig};
use crate::params::{AdamState, ParamStore};
use crate::tensor::Tensor;
use crate::training::{TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"BGAN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    /// Free-form description of the training data.
    #[serde(default)]
    pub dataset: Option<serde_json::Value>,
    pub step: u64,
    pub d_updates: u64,
    pub g_updates: u64,
    pub gen_adam_step: u64,
    pub disc_adam_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub gen: ParamStore,
    pub disc: ParamStore,
    pub gen_opt: Option<AdamState>,
    pub disc_opt: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer, dataset: Option<serde_json::Value>) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                model: t.model.clone(),
                train: Some(t.train.clone()),
                dataset,
                step: t.step,
                d_updates: t.d_updates,
                g_updates: t.g_updates,
                gen_adam_step: t.gen_opt.step,
                disc_adam_step: t.disc_opt.step,
            },
            gen: t.gen.clone(),
            disc: t.disc.clone(),
            gen_opt: Some(t.gen_opt.clone()),
            disc_opt: Some(t.disc_opt.clone()),
        }
    }

    /// Rebuild a trainer; requires optimizer state and a training config.
    pub fn into_trainer(self) -> Result<Trainer> {
        let train = self
            .meta
            .train
            .ok_or_else(|| Error::Config("checkpoint has no training config".into()))?;
        let (Some(gen_opt), Some(disc_opt)) = (self.gen_opt, self.disc_opt) else {
            return Err(Error::Config("checkpoint has no optimizer state".into()));
        };
        Ok(Trainer {
            model: self.meta.model,
            train,
            gen: self.gen,
            disc: self.disc,
            gen_opt,
            disc_opt,
            step: self.meta.step,
            d_updates: self.meta.d_updates,
            g_updates: self.meta.g_updates,
        })
    }

    /// Number of tensor records this checkpoint serialises to.
    pub fn record_count(&self) -> usize {
        let params = self.gen.len() + self.disc.len();
        let opt = [&self.gen_opt, &self.disc_opt]
            .iter()
            .map(|o| o.as_ref().map_or(0, |s| s.m.len() + s.v.len()))
            .sum::<usize>();
        params + opt
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.gen_opt.is_some() != self.disc_opt.is_some() {
            return Err(Error::invalid("checkpoint", "optimizer state must cover both networks or neither"));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let blob = serde_json::to_vec(&self.meta)?;
        put_len(&mut out, blob.len())?;
        out.extend_from_slice(&blob);
        put_len(&mut out, self.record_count())?;
        for store in [&self.gen, &self.disc] {
            for (name, t) in store.iter() {
                put_tensor(&mut out, &format!("param/{name}"), t)?;
            }
        }
        let opts: Vec<&AdamState> = [&self.gen_opt, &self.disc_opt].into_iter().flatten().collect();
        for (slot, stores) in [
            ("adam.m", opts.iter().map(|o| &o.m).collect::<Vec<_>>()),
            ("adam.v", opts.iter().map(|o| &o.v).collect()),
        ] {
            for store in stores {
                for (name, t) in store.iter() {
                    put_tensor(&mut out, &format!("{slot}/{name}"), t)?;
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Integrity("checksum mismatch (file corrupted or truncated)".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let blob_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(blob_len)?)
            .map_err(|e| Error::Integrity(format!("metadata: {e}")))?;
        meta.model.validate()?;
        if let Some(t) = &meta.train {
            t.validate()?;
        }
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let len: usize = dims.iter().product();
            let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Integrity("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&dims, data).map_err(|e| Error::Integrity(format!("{name}: {e}")))?;
            let (store, rest) = if let Some(rest) = name.strip_prefix("param/") {
                (&mut params, rest)
            } else if let Some(rest) = name.strip_prefix("adam.m/") {
                (&mut m, rest)
            } else if let Some(rest) = name.strip_prefix("adam.v/") {
                (&mut v, rest)
            } else {
                return Err(Error::Integrity(format!("unknown record {name:?}")));
            };
            store
                .insert(rest, t)
                .map_err(|_| Error::Integrity(format!("duplicate record {name:?}")))?;
        }
        if r.pos != body.len() {
            return Err(Error::Integrity(format!("{} trailing bytes", body.len() - r.pos)));
        }
        let gen = params.subset("gen/");
        let disc = params.subset("disc/");
        if gen.len() + disc.len() != params.len() {
            return Err(Error::Integrity("parameters outside gen/ and disc/".into()));
        }
        check_architecture(&meta.model, &gen, &disc)?;
        let (gen_opt, disc_opt) = if m.is_empty() && v.is_empty() {
            (None, None)
        } else {
            let opt = |prefix: &str, step: u64, like: &ParamStore| -> Result<AdamState> {
                let s = AdamState {
                    step,
                    m: m.subset(prefix),
                    v: v.subset(prefix),
                };
                same_layout(like, &s.m, "adam.m")?;
                same_layout(like, &s.v, "adam.v")?;
                Ok(s)
            };
            (
                Some(opt("gen/", meta.gen_adam_step, &gen)?),
                Some(opt("disc/", meta.disc_adam_step, &disc)?),
            )
        };
        Ok(Checkpoint {
            meta,
            gen,
            disc,
            gen_opt,
            disc_opt,
        })
    }
}

fn same_layout(want: &ParamStore, got: &ParamStore, what: &str) -> Result<()> {
    if want.len() != got.len() {
        return Err(Error::Integrity(format!(
            "{what}: {} tensors, expected {}",
            got.len(),
            want.len()
        )));
    }
    for (name, t) in want.iter() {
        match got.get(name) {
            Ok(g) if g.shape() == t.shape() => {}
            Ok(g) => {
                return Err(Error::Integrity(format!(
                    "{what}/{name}: shape {:?}, expected {:?}",
                    g.shape(),
                    t.shape()
                )))
            }
            Err(_) => return Err(Error::Integrity(format!("{what}/{name}: missing"))),
        }
    }
    Ok(())
}

/// Parameter names and shapes must be exactly those the architecture defines.
fn check_architecture(model: &ModelConfig, gen: &ParamStore, disc: &ParamStore) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    same_layout(&init_generator(model, &mut rng)?, gen, "param")?;
    same_layout(&init_discriminator(model, &mut rng)?, disc, "param")
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::invalid("checkpoint", format!("length {n} exceeds u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    put_len(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_len(out, t.rank())?;
    for &d in t.shape() {
        put_len(out, d)?;
    }
    out.reserve(4 * t.len());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Integrity("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Write to a sibling temporary file, sync, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid("write_atomic", format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Integrity(m) => Error::Integrity(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::TrainConfig;

    fn sample() -> Checkpoint {
        let t = Trainer::new(ModelConfig::tiny(), TrainConfig::default()).unwrap();
        Checkpoint::from_trainer(&t, Some(serde_json::json!({"kind": "toy"})))
    }

    #[test]
    fn roundtrip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.bgan"), dir.path().join("b.bgan"));
        save_checkpoint(&sample(), &a).unwrap();
        save_checkpoint(&load_checkpoint(&a).unwrap(), &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 2);
    }

    #[test]
    fn record_count_covers_params_and_moments() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let blob_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let at = 12 + blob_len;
        let count = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let params = c.gen.len() + c.disc.len();
        assert_eq!(count, 3 * params);
        let mut bare = c.clone();
        bare.gen_opt = None;
        bare.disc_opt = None;
        assert_eq!(bare.record_count(), params);
        assert_eq!(Checkpoint::from_bytes(&bare.to_bytes().unwrap()).unwrap(), bare);
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Integrity(_))));
        let mut bad_crc = bytes.clone();
        let n = bad_crc.len();
        bad_crc[n - 1] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad_crc), Err(Error::Integrity(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]), Err(Error::Integrity(_))));
        assert!(matches!(Checkpoint::from_bytes(b"PNG\0...."), Err(Error::Integrity(_))));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        let body = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body]);
        bytes[body..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Version { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let mut c = sample();
        c.meta.model.disc_norm = crate::model::DiscNorm::Spectral;
        assert!(matches!(Checkpoint::from_bytes(&c.to_bytes().unwrap()), Err(Error::Integrity(_))));
    }

    #[test]
    fn trainer_roundtrip() {
        let c = sample();
        let t = c.clone().into_trainer().unwrap();
        assert_eq!(Checkpoint::from_trainer(&t, c.meta.dataset.clone()), c);
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_checkpoint(Path::new("/nonexistent/x.bgan")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.bgan"), "{err}");
    }
}
