//! Checkpoint files: a text header naming every array with its shape and
//! byte offset, followed by a little-endian `f32` payload.
//!
//! ```text
//! pama-checkpoint 1
//! step 500
//! adam 500 0.001 0.9 0.999 0.00000001
//! config seed = 7
//! ...
//! array encoder.embedding 26x32 0
//! ...
//! payload 123456
//! <bytes>
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::numerics::{Adam, Array, ParamStore};

const MAGIC: &str = "pama-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    /// Optimizer steps taken.
    pub step: usize,
    pub params: ParamStore<f32>,
    pub optimizer: Option<Adam<f32>>,
}

fn shape_text(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    if s == "scalar" {
        return Some(Vec::new());
    }
    s.split('x').map(|d| d.parse().ok()).collect()
}

impl Checkpoint {
    fn arrays(&self) -> Vec<(String, &Array<f32>)> {
        let mut out: Vec<(String, &Array<f32>)> =
            self.params.names().iter().cloned().zip(self.params.arrays()).collect();
        if let Some(opt) = &self.optimizer {
            for (name, m) in self.params.names().iter().zip(&opt.m) {
                out.push((format!("adam.m/{name}"), m));
            }
            for (name, v) in self.params.names().iter().zip(&opt.v) {
                out.push((format!("adam.v/{name}"), v));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        let _ = writeln!(header, "{MAGIC}");
        let _ = writeln!(header, "step {}", self.step);
        if let Some(opt) = &self.optimizer {
            let _ = writeln!(
                header,
                "adam {} {} {} {} {}",
                opt.step, opt.lr, opt.beta1, opt.beta2, opt.eps
            );
        }
        for line in self.config.to_text().lines() {
            let _ = writeln!(header, "config {line}");
        }
        let mut payload = Vec::new();
        for (name, arr) in self.arrays() {
            let _ = writeln!(header, "array {name} {} {}", shape_text(arr.shape()), payload.len());
            for v in arr.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let _ = writeln!(header, "payload {}", payload.len());
        let mut out = header.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], source_name: &str) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(format!("{source_name}: {msg}"));
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header".into()))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8".into()))
        };
        if next_line()? != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let mut step = None;
        let mut adam = None;
        let mut config_text = String::new();
        let mut arrays: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let payload_len;
        loop {
            let line = next_line()?;
            let (kind, rest) = line
                .split_once(' ')
                .ok_or_else(|| bad(format!("bad header line `{line}`")))?;
            match kind {
                "step" => step = Some(rest.parse::<usize>().map_err(|_| bad("bad step".into()))?),
                "adam" => {
                    let f: Vec<&str> = rest.split_whitespace().collect();
                    let num = |i: usize| -> Result<f64> {
                        f.get(i)
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| bad("bad adam line".into()))
                    };
                    let t = f
                        .first()
                        .and_then(|s| s.parse::<u64>().ok())
                        .ok_or_else(|| bad("bad adam line".into()))?;
                    adam = Some((t, num(1)?, num(2)?, num(3)?, num(4)?));
                }
                "config" => {
                    config_text.push_str(rest);
                    config_text.push('\n');
                }
                "array" => {
                    let f: Vec<&str> = rest.split_whitespace().collect();
                    if f.len() != 3 {
                        return Err(bad(format!("bad array line `{line}`")));
                    }
                    let shape = parse_shape(f[1]).ok_or_else(|| bad(format!("bad shape `{}`", f[1])))?;
                    let offset = f[2].parse().map_err(|_| bad(format!("bad offset `{}`", f[2])))?;
                    arrays.push((f[0].to_string(), shape, offset));
                }
                "payload" => {
                    payload_len = rest.parse::<usize>().map_err(|_| bad("bad payload length".into()))?;
                    break;
                }
                other => return Err(bad(format!("unknown header entry `{other}`"))),
            }
        }
        let payload = &bytes[pos..];
        if payload.len() != payload_len {
            return Err(bad(format!(
                "payload has {} bytes, header says {payload_len}",
                payload.len()
            )));
        }
        let config = Config::parse(&config_text)?;
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, shape, offset) in arrays {
            let count: usize = shape.iter().product();
            let end = offset + 4 * count;
            let raw = payload
                .get(offset..end)
                .ok_or_else(|| bad(format!("array `{name}` runs past the payload")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let arr = Array::new(shape, data)?;
            if name.starts_with("adam.m/") {
                m.push(arr);
            } else if name.starts_with("adam.v/") {
                v.push(arr);
            } else {
                params.insert(&name, arr)?;
            }
        }
        let optimizer = match adam {
            Some((step, lr, beta1, beta2, eps)) => {
                if m.len() != params.len() || v.len() != params.len() {
                    return Err(bad("optimizer state does not cover every parameter".into()));
                }
                Some(Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    step,
                    m,
                    v,
                })
            }
            None => None,
        };
        Ok(Self {
            config,
            step: step.ok_or_else(|| bad("missing step".into()))?,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Copies stored values into a freshly built store with the same layout.
    pub fn restore_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if store.names() != self.params.names() {
            return Err(Error::Checkpoint("parameter names differ from the model layout".into()));
        }
        for (dst, src) in store.arrays_mut().iter_mut().zip(self.params.arrays()) {
            if dst.shape() != src.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch: model {:?}, checkpoint {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            dst.clone_from(src);
        }
        Ok(())
    }
}
