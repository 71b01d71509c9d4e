//! Binary persistence of a meta-trained system.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic "TASMLCKP"
//! u32 length + format version string
//! u64 length + canonical JSON config snapshot (sorted keys)
//! u64 length + JSON scoring header (kernel, lambda, input dim, point counts)
//! f64 cholesky jitter
//! u32 array count, then per array:
//!   u32 name length + name, u32 rank, u64 per dimension, f64 values
//! ```
//!
//! Arrays are `theta.w1`, `theta.b1`, `theta.w2`, `theta.b2`, `signatures`
//! and `cholesky.lower`. Floats are stored as raw bits, so a round trip is
//! exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset_kernel::{KernelConfig, ScoringModel, Signature};
use crate::error::{Result, TasmlError};
use crate::ls_meta_learn::MetaParams;
use crate::numerics::{CholeskyFactor, Matrix};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TASMLCKP";
pub const FORMAT_VERSION: &str = "tasml-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct ScoringHeader {
    kernel: KernelConfig,
    lambda: f64,
    input_dim: usize,
    n_points: Vec<usize>,
}

/// Everything needed to rebuild a trained system except the training tasks,
/// which are regenerated from the config snapshot.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Value,
    pub theta0: MetaParams,
    pub scoring: ScoringModel,
}

/// Serializes with keys in sorted order.
pub fn canonical_json(value: &Value) -> String {
    // serde_json's default map is ordered by key
    value.to_string()
}

fn bad(msg: impl Into<String>) -> TasmlError {
    TasmlError::Checkpoint(msg.into())
}

fn put_array(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_blob(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| bad(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| bad(format!("{what} length overflows")))
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(len, what)?.to_vec()).map_err(|_| bad(format!("{what} is not UTF-8")))
    }

    fn array(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let name_len = self.u32("array name length")? as usize;
        let name = self.string(name_len, "array name")?;
        let rank = self.u32("array rank")? as usize;
        if rank > 2 {
            return Err(bad(format!("array {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.len("array dimension")?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|c| c.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos))
            .ok_or_else(|| bad(format!("array {name} shape {shape:?} exceeds file size")))?;
        let raw = self.take(count * 8, "array values")?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, shape, values))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(FORMAT_VERSION.len() as u32).to_le_bytes());
        out.extend_from_slice(FORMAT_VERSION.as_bytes());
        put_blob(&mut out, canonical_json(&self.config).as_bytes());
        let header = ScoringHeader {
            kernel: *self.scoring.kernel(),
            lambda: self.scoring.lambda(),
            input_dim: self.scoring.input_dim(),
            n_points: self.scoring.signatures().iter().map(|s| s.n_points).collect(),
        };
        put_blob(&mut out, canonical_json(&serde_json::to_value(&header)?).as_bytes());
        out.extend_from_slice(&self.scoring.factor().jitter().to_le_bytes());

        let th = &self.theta0;
        let p = th.dim();
        let sigs = self.scoring.signatures();
        let sig_dim = sigs.first().map(|s| s.mean_embedding.len()).unwrap_or(0);
        let flat_sigs: Vec<f64> = sigs.iter().flat_map(|s| s.mean_embedding.iter().copied()).collect();
        let l = self.scoring.factor().lower();
        out.extend_from_slice(&6u32.to_le_bytes());
        put_array(&mut out, "theta.w1", &[p, p], th.w1().as_slice());
        put_array(&mut out, "theta.b1", &[p], th.b1());
        put_array(&mut out, "theta.w2", &[p, p], th.w2().as_slice());
        put_array(&mut out, "theta.b2", &[p], th.b2());
        put_array(&mut out, "signatures", &[sigs.len(), sig_dim], &flat_sigs);
        put_array(&mut out, "cholesky.lower", &[l.rows(), l.cols()], l.as_slice());
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let vlen = c.u32("version length")? as usize;
        let version = c.string(vlen, "version")?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version:?}")));
        }
        let clen = c.len("config")?;
        let config: Value = serde_json::from_str(&c.string(clen, "config")?)?;
        let hlen = c.len("scoring header")?;
        let header: ScoringHeader = serde_json::from_str(&c.string(hlen, "scoring header")?)?;
        let jitter = c.f64("jitter")?;
        let n_arrays = c.u32("array count")?;
        let mut arrays = std::collections::BTreeMap::new();
        for _ in 0..n_arrays {
            let (name, shape, values) = c.array()?;
            arrays.insert(name, (shape, values));
        }
        if c.pos != buf.len() {
            return Err(bad(format!("{} trailing bytes", buf.len() - c.pos)));
        }
        let mut get = |name: &str| {
            arrays
                .remove(name)
                .ok_or_else(|| bad(format!("missing array {name}")))
        };

        let (w1_shape, w1) = get("theta.w1")?;
        let p = *w1_shape.first().ok_or_else(|| bad("theta.w1 has no shape"))?;
        let mut flat = w1;
        for (name, expect) in [("theta.b1", vec![p]), ("theta.w2", vec![p, p]), ("theta.b2", vec![p])] {
            let (shape, values) = get(name)?;
            if shape != expect {
                return Err(bad(format!("{name} has shape {shape:?}, expected {expect:?}")));
            }
            flat.extend(values);
        }
        if w1_shape != [p, p] {
            return Err(bad(format!("theta.w1 has shape {w1_shape:?}")));
        }
        let theta0 = MetaParams::from_flat(p, &flat)?;

        let (sig_shape, sig_values) = get("signatures")?;
        let (n, sig_dim) = match sig_shape[..] {
            [n, d] => (n, d),
            _ => return Err(bad("signatures must be rank 2")),
        };
        if header.n_points.len() != n {
            return Err(bad("point counts do not match signatures"));
        }
        let signatures = header
            .n_points
            .iter()
            .enumerate()
            .map(|(i, &n_points)| Signature {
                mean_embedding: sig_values[i * sig_dim..(i + 1) * sig_dim].to_vec(),
                n_points,
            })
            .collect();
        let (l_shape, l_values) = get("cholesky.lower")?;
        let l = match l_shape[..] {
            [r, c] => Matrix::from_vec(r, c, l_values)?,
            _ => return Err(bad("cholesky.lower must be rank 2")),
        };
        let chol = CholeskyFactor::from_parts(l, jitter)?;
        let scoring = ScoringModel::from_parts(signatures, chol, header.lambda, header.kernel, header.input_dim)?;
        Ok(Checkpoint {
            config,
            theta0,
            scoring,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset_kernel::fit_scoring;
    use crate::taskgen::{sample_multimodal_tasks, GeneratorConfig, Split};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let g = GeneratorConfig {
            d: 6,
            informative_dims: 2,
            ..GeneratorConfig::default()
        };
        let train = sample_multimodal_tasks(&g, 7, Split::Train).unwrap();
        let kernel = KernelConfig {
            sigma: 2.5,
            ..KernelConfig::default()
        };
        Checkpoint {
            config: serde_json::json!({"b": 1.0e-8, "a": [1, 2], "name": "x"}),
            theta0: MetaParams::init(6, &mut ChaCha8Rng::seed_from_u64(3)),
            scoring: fit_scoring(&train, &kernel, 1e-3).unwrap(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!(back.theta0, ck.theta0);
        assert_eq!(back.scoring.signatures(), ck.scoring.signatures());
        assert_eq!(back.scoring.factor(), ck.scoring.factor());
        assert_eq!(back.scoring.kernel(), ck.scoring.kernel());
        assert_eq!(back.scoring.lambda().to_bits(), ck.scoring.lambda().to_bits());
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn config_is_stored_with_sorted_keys() {
        let bytes = sample().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes);
        let a = text.find("\"a\"").unwrap();
        let b = text.find("\"b\"").unwrap();
        let name = text.find("\"name\"").unwrap();
        assert!(a < b && b < name);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
        let mut version = bytes;
        version[12 + 17] = b'9';
        assert!(matches!(Checkpoint::from_bytes(&version), Err(TasmlError::Checkpoint(_))));
    }
}
