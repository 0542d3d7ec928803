//! Checkpoint directories: a `manifest.txt` of `key=value` lines and one raw
//! little-endian blob per parameter, named `<dotted.name>.bin`.
//!
//! Manifest keys: `format_version`, `module`, `dtype` (`f64` or `f32`),
//! `seed`, `step`, `param.<name>=<d0>x<d1>...` for every parameter (in store
//! order) and free-form `config.<key>=<value>` entries.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub module: String,
    pub seed: u64,
    pub step: u64,
    pub dtype: DType,
    pub config: BTreeMap<String, String>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        manifest.push_str(&format!("format_version={CHECKPOINT_VERSION}\n"));
        manifest.push_str(&format!("module={}\n", self.module));
        manifest.push_str(&format!(
            "dtype={}\n",
            match self.dtype {
                DType::F64 => "f64",
                DType::F32 => "f32",
            }
        ));
        manifest.push_str(&format!("seed={}\n", self.seed));
        manifest.push_str(&format!("step={}\n", self.step));
        for (k, v) in &self.config {
            manifest.push_str(&format!("config.{k}={v}\n"));
        }
        for id in self.params.ids() {
            let name = self.params.name(id);
            let t = self.params.get(id);
            manifest.push_str(&format!("param.{name}={}\n", shape_string(t.shape())));
            let mut bytes = Vec::with_capacity(t.numel() * 8);
            match self.dtype {
                DType::F64 => t.data().iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes())),
                DType::F32 => t
                    .data()
                    .iter()
                    .for_each(|v| bytes.extend_from_slice(&(*v as f32).to_le_bytes())),
            }
            fs::write(dir.join(format!("{name}.bin")), bytes)?;
        }
        fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.txt"))?;
        let mut module = None;
        let mut dtype = DType::F64;
        let mut seed = 0;
        let mut step = 0;
        let mut version = None;
        let mut config = BTreeMap::new();
        let mut shapes = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("manifest line {}: missing '='", lineno + 1)))?;
            match k {
                "format_version" => version = Some(parse_num::<u32>(k, v)?),
                "module" => module = Some(v.to_string()),
                "dtype" => {
                    dtype = match v {
                        "f64" => DType::F64,
                        "f32" => DType::F32,
                        _ => return Err(Error::Format(format!("unknown dtype {v}"))),
                    }
                }
                "seed" => seed = parse_num(k, v)?,
                "step" => step = parse_num(k, v)?,
                _ => {
                    if let Some(name) = k.strip_prefix("param.") {
                        shapes.push((name.to_string(), parse_shape(v)?));
                    } else if let Some(key) = k.strip_prefix("config.") {
                        config.insert(key.to_string(), v.to_string());
                    } else {
                        return Err(Error::Format(format!("unknown manifest key {k}")));
                    }
                }
            }
        }
        if version != Some(CHECKPOINT_VERSION) {
            return Err(Error::Format(format!("unsupported checkpoint version {version:?}")));
        }
        let module = module.ok_or_else(|| Error::Format("manifest lacks module".into()))?;
        let mut params = ParamStore::new(seed);
        let width = match dtype {
            DType::F64 => 8,
            DType::F32 => 4,
        };
        for (name, shape) in shapes {
            let bytes = fs::read(dir.join(format!("{name}.bin")))?;
            let n: usize = shape.iter().product();
            if bytes.len() != n * width {
                return Err(Error::Validation(format!(
                    "parameter {name}: blob has {} bytes, shape {:?} needs {}",
                    bytes.len(),
                    shape,
                    n * width
                )));
            }
            let data: Vec<f64> = match dtype {
                DType::F64 => bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                DType::F32 => bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            params.insert(&name, Tensor::new(&shape, data)?);
        }
        Ok(Checkpoint {
            module,
            seed,
            step,
            dtype,
            config,
            params,
        })
    }
}

fn shape_string(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|d| d.parse().map_err(|_| Error::Format(format!("bad shape {s}"))))
        .collect()
}

fn parse_num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Format(format!("bad value for {k}: {v}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::Init;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = ParamStore::new(9);
        params.add("enc.conv0.weight", &[3, 3, 2, 4], Init::FanIn(18));
        params.add("enc.conv0.bias", &[4], Init::Uniform(0.3));
        let ck = Checkpoint {
            module: "tokenizer".into(),
            seed: 9,
            step: 12,
            dtype: DType::F64,
            config: [("tokenizer.N".to_string(), "512".to_string())].into(),
            params,
        };
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.params.tensors(), ck.params.tensors());
        assert_eq!(back.config, ck.config);
        assert_eq!(back.step, 12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = ParamStore::new(0);
        params.add("w", &[2, 2], Init::Ones);
        let ck = Checkpoint {
            module: "m".into(),
            seed: 0,
            step: 0,
            dtype: DType::F64,
            config: BTreeMap::new(),
            params,
        };
        ck.save(dir.path()).unwrap();
        let m = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        fs::write(dir.path().join("manifest.txt"), m.replace("param.w=2x2", "param.w=2x3")).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Validation(_))));
    }
}
