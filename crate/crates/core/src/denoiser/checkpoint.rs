//! Checkpoint file: a `key=value` text preamble closed by a blank line, then
//! every parameter tensor in declaration order as a little-endian `u32`
//! element count followed by that many little-endian `f32` values.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Read};
use std::path::Path;

use super::model::{DenoiserModel, ModelConfig, OutputParam};
use crate::error::{Error, Result};

pub const MAGIC: &str = "ipr-denoiser-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DenoiserModel<f32>,
    pub seed: u64,
    /// Free-form metadata (task name, codebook seed, ...).
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: DenoiserModel<f32>, seed: u64) -> Self {
        Self {
            model,
            seed,
            meta: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.model.config();
        let mut head = format!(
            "{MAGIC}\nversion={FORMAT_VERSION}\nn={}\nd={}\nh={}\nl={}\nseed={}\nheads={}\nff_mult={}\noutput={}\ndata_std={:?}\n",
            c.n_regions,
            c.dim,
            c.hidden,
            c.layers,
            self.seed,
            c.heads,
            c.ff_mult,
            c.output.as_str(),
            c.data_std,
        );
        for (k, v) in &self.meta {
            head.push_str(&format!("meta.{k}={v}\n"));
        }
        head.push('\n');
        let mut out = head.into_bytes();
        let params = self.model.params();
        let mut at = 0;
        for (_, shape) in c.param_shapes() {
            let len: usize = shape.iter().product();
            out.extend_from_slice(&(len as u32).to_le_bytes());
            for v in &params[at..at + len] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            at += len;
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = std::io::Cursor::new(bytes);
        let mut fields = BTreeMap::new();
        let mut meta = BTreeMap::new();
        let mut first = true;
        loop {
            let mut line = String::new();
            if cursor.read_line(&mut line)? == 0 {
                return Err(Error::Format("checkpoint preamble not terminated".into()));
            }
            let line = line.trim_end_matches('\n');
            if first {
                if line != MAGIC {
                    return Err(Error::Format("not a denoiser checkpoint".into()));
                }
                first = false;
                continue;
            }
            if line.is_empty() {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad preamble line '{line}'")))?;
            if let Some(mk) = k.strip_prefix("meta.") {
                meta.insert(mk.to_string(), v.to_string());
            } else {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| -> Result<&String> {
            fields
                .get(k)
                .ok_or_else(|| Error::Format(format!("checkpoint missing '{k}'")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("checkpoint field '{k}' is not an integer")))
        };
        let version = num("version")?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config = ModelConfig {
            n_regions: num("n")?,
            dim: num("d")?,
            hidden: num("h")?,
            layers: num("l")?,
            heads: num("heads")?,
            ff_mult: num("ff_mult")?,
            output: OutputParam::parse(get("output")?)?,
            data_std: get("data_std")?
                .parse()
                .map_err(|_| Error::Format("bad data_std".into()))?,
        };
        config.validate()?;
        let seed: u64 = get("seed")?
            .parse()
            .map_err(|_| Error::Format("bad seed".into()))?;

        let mut params = Vec::with_capacity(config.param_count());
        let mut word = [0u8; 4];
        for (name, shape) in config.param_shapes() {
            let want: usize = shape.iter().product();
            cursor
                .read_exact(&mut word)
                .map_err(|_| Error::Format(format!("truncated before '{name}'")))?;
            let len = u32::from_le_bytes(word) as usize;
            if len != want {
                return Err(Error::Format(format!("'{name}' has {len} values, expected {want}")));
            }
            for _ in 0..len {
                cursor
                    .read_exact(&mut word)
                    .map_err(|_| Error::Format(format!("truncated inside '{name}'")))?;
                params.push(f32::from_le_bytes(word));
            }
        }
        if (cursor.position() as usize) != bytes.len() {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        Ok(Self {
            model: DenoiserModel::from_params(config, params)?,
            seed,
            meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ckpt() -> Checkpoint {
        let mut cfg = ModelConfig::new(3, 2, 8, 2);
        cfg.data_std = 0.3535;
        let m = DenoiserModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut c = Checkpoint::new(m, 9);
        c.meta.insert("task".into(), "sudoku4".into());
        c
    }

    #[test]
    fn bit_exact_round_trip() {
        let c = ckpt();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.model.config(), c.model.config());
        assert_eq!(back.seed, 9);
        assert_eq!(back.meta.get("task").map(String::as_str), Some("sudoku4"));
        let a: Vec<u32> = c.model.params().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.model.params().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn preamble_is_plain_text() {
        let bytes = ckpt().to_bytes();
        let text_end = bytes.windows(2).position(|w| w == b"\n\n").unwrap();
        let head = std::str::from_utf8(&bytes[..text_end]).unwrap();
        assert!(head.starts_with(MAGIC));
        for key in ["version=1", "n=3", "d=2", "h=8", "l=2", "seed=9"] {
            assert!(head.lines().any(|l| l == key), "missing {key}");
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = ckpt().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(Checkpoint::from_bytes(b"hello\n\n").is_err());
    }
}
