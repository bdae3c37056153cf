//! Self-describing binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "MISSFUSE"
//! version    u32      1
//! dtype      u32      4 (f32 payload) or 8 (f64 payload)
//! config     u32 length + UTF-8 `key=value` lines describing the model
//! tensors    u32 count, then per tensor:
//!              u32 name length, name bytes, u32 ndim, ndim × u32 dims
//! payload    every tensor's values in table order, row-major
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::Precision;

pub const MAGIC: &[u8; 8] = b"MISSFUSE";
pub const VERSION: u32 = 1;

fn bool_str(b: bool) -> &'static str {
    if b {
        "true"
    } else {
        "false"
    }
}

/// `key=value` rendering of a model configuration.
pub fn config_to_text(config: &ModelConfig) -> String {
    let dims: Vec<String> = config.input_dims.iter().map(|d| d.to_string()).collect();
    let mut s = String::new();
    let _ = writeln!(s, "input_dims={}", dims.join(","));
    let _ = writeln!(s, "num_classes={}", config.num_classes);
    let _ = writeln!(s, "dim={}", config.dim);
    let _ = writeln!(s, "latent_dim={}", config.latent_dim);
    let _ = writeln!(s, "hidden={}", config.hidden);
    let _ = writeln!(s, "heads={}", config.heads);
    let _ = writeln!(s, "literal_attention={}", bool_str(config.literal_attention));
    let _ = writeln!(s, "vector_gate={}", bool_str(config.vector_gate));
    let _ = writeln!(s, "disable_pra={}", bool_str(config.disable_pra));
    let _ = writeln!(s, "disable_uapoe_variance={}", bool_str(config.disable_uapoe_variance));
    s
}

pub fn config_from_text(text: &str, path: &Path) -> Result<ModelConfig> {
    let mut config = ModelConfig::default();
    let mut seen = 0usize;
    for (i, line) in text.lines().enumerate() {
        let line_no = i as u64 + 1;
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::parse(path, line_no, line, "expected key=value"));
        };
        let bad = |msg: &str| Error::parse(path, line_no, key, msg);
        let uint = || value.parse::<usize>().map_err(|_| bad("expected an integer"));
        let flag = || match value {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(bad("expected true or false")),
        };
        match key {
            "input_dims" => {
                config.input_dims = value
                    .split(',')
                    .map(|d| d.parse::<usize>().map_err(|_| bad("expected integers")))
                    .collect::<Result<_>>()?
            }
            "num_classes" => config.num_classes = uint()?,
            "dim" => config.dim = uint()?,
            "latent_dim" => config.latent_dim = uint()?,
            "hidden" => config.hidden = uint()?,
            "heads" => config.heads = uint()?,
            "literal_attention" => config.literal_attention = flag()?,
            "vector_gate" => config.vector_gate = flag()?,
            "disable_pra" => config.disable_pra = flag()?,
            "disable_uapoe_variance" => config.disable_uapoe_variance = flag()?,
            _ => return Err(bad("unknown key")),
        }
        seen += 1;
    }
    if seen != 10 {
        return Err(Error::parse(path, 0, "config", "incomplete model configuration"));
    }
    config.validate()?;
    Ok(config)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Data(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serialize parameters. With [`Precision::F32`] values are narrowed.
pub fn to_bytes(params: &ModelParams, precision: Precision) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    put_u32(&mut out, precision.bytes())?;
    let config = config_to_text(&params.config);
    put_u32(&mut out, config.len())?;
    out.extend_from_slice(config.as_bytes());
    let store = &params.store;
    put_u32(&mut out, store.len())?;
    for (name, t) in store.names().iter().zip(store.tensors()) {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
    }
    for t in store.tensors() {
        for &v in t.data() {
            match precision {
                Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(self.path, 0, what, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let path = self.path;
        std::str::from_utf8(self.take(n, what)?).map_err(|_| Error::parse(path, 0, what, "invalid UTF-8"))
    }
}

/// Parse a checkpoint produced by [`to_bytes`].
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(ModelParams, Precision)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::parse(path, 0, "magic", "not a missfuse checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::parse(path, 0, "version", format!("unsupported version {version}")));
    }
    let precision = match r.u32("dtype")? {
        4 => Precision::F32,
        8 => Precision::F64,
        other => return Err(Error::parse(path, 0, "dtype", format!("unknown dtype tag {other}"))),
    };
    let config_len = r.u32("config length")?;
    let config = config_from_text(r.utf8(config_len, "config")?, path)?;
    let count = r.u32("tensor count")?;
    let mut table = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u32("name length")?;
        let name = r.utf8(name_len, "name")?.to_string();
        let ndim = r.u32("ndim")?;
        if ndim == 0 || ndim > 2 {
            return Err(Error::parse(path, 0, name, format!("unsupported rank {ndim}")));
        }
        let dims = (0..ndim).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
        table.push((name, dims));
    }
    let mut store = ParamStore::new();
    for (name, dims) in table {
        let n: usize = dims.iter().product();
        let raw = r.take(n * precision.bytes(), &name)?;
        let data: Vec<f64> = match precision {
            Precision::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Precision::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        if store.find(&name).is_some() {
            return Err(Error::parse(path, 0, name, "duplicate tensor"));
        }
        store.register(name, Tensor::new(dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(path, 0, "payload", "trailing bytes"));
    }
    let params = ModelParams::from_store(&config, store)?;
    Ok((params, precision))
}

pub fn save(path: &Path, params: &ModelParams, precision: Precision) -> Result<()> {
    let bytes = to_bytes(params, precision)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelParams, Precision)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_dims: vec![3, 5],
            dim: 8,
            latent_dim: 4,
            hidden: 6,
            heads: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let params = ModelParams::init(&small_config(), 3).unwrap();
        let bytes = to_bytes(&params, Precision::F64).unwrap();
        let (back, p) = from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(p, Precision::F64);
        assert_eq!(back.store, params.store);
        assert_eq!(back.config, params.config);
    }

    #[test]
    fn f32_round_trip_narrows_once() {
        let mut params = ModelParams::init(&small_config(), 3).unwrap();
        for t in params.store.tensors_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        let bytes = to_bytes(&params, Precision::F32).unwrap();
        let (back, _) = from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.store, params.store);
        assert_eq!(to_bytes(&back, Precision::F32).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let params = ModelParams::init(&small_config(), 3).unwrap();
        let bytes = to_bytes(&params, Precision::F32).unwrap();
        let p = Path::new("mem");
        assert!(from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        assert!(from_bytes(b"NOTACKPT", p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra, p).is_err());
        let mut bad_version = bytes;
        bad_version[8] = 9;
        assert!(from_bytes(&bad_version, p).is_err());
    }

    #[test]
    fn ablated_layouts_round_trip() {
        let cfg = ModelConfig {
            disable_pra: true,
            disable_uapoe_variance: true,
            ..small_config()
        };
        let params = ModelParams::init(&cfg, 4).unwrap();
        let (back, _) = from_bytes(&to_bytes(&params, Precision::F64).unwrap(), Path::new("m")).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.store, params.store);
    }
}
