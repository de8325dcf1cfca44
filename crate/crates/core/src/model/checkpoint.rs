//! Versioned binary checkpoint envelope.
//!
//! Layout (little endian): magic `QCEACKP1`, format version `u32`, method tag
//! and config JSON as length-prefixed UTF-8, tensor count `u32`, then per
//! tensor its name, `rows u32`, `cols u32` and `rows·cols` row-major `f64`
//! values. A trailing flag byte says whether Adam state follows (step, the
//! four hyperparameters, then first and second moments in parameter order).
//! Values are stored as raw bits, so a round trip is exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use super::ParamStore;
use crate::autodiff::{AdamConfig, AdamState};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"QCEACKP1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub method: String,
    pub config_json: String,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn put_matrix(w: &mut impl Write, m: &DMatrix<f64>) -> std::io::Result<()> {
    put_u32(w, m.nrows() as u32)?;
    put_u32(w, m.ncols() as u32)?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_all(&m[(i, j)].to_bits().to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let mut buf = vec![0u8; len];
        self.inner.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated string: {e}")))?;
        String::from_utf8(buf).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }

    fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = self.f64()?;
            }
        }
        Ok(m)
    }
}

impl Checkpoint {
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        put_u32(&mut w, VERSION)?;
        put_str(&mut w, &self.method)?;
        put_str(&mut w, &self.config_json)?;
        put_u32(&mut w, self.params.len() as u32)?;
        for t in self.params.tensors() {
            put_str(&mut w, &t.name)?;
            put_matrix(&mut w, &t.value)?;
        }
        match &self.adam {
            None => w.write_all(&[0])?,
            Some(s) => {
                w.write_all(&[1])?;
                w.write_all(&s.step.to_le_bytes())?;
                for v in [s.config.lr, s.config.beta1, s.config.beta2, s.config.eps] {
                    w.write_all(&v.to_bits().to_le_bytes())?;
                }
                for m in s.m.iter().chain(&s.v) {
                    put_matrix(&mut w, m)?;
                }
            }
        }
        w.flush()
    }

    pub fn read_from(r: impl Read) -> Result<Checkpoint> {
        let mut r = Reader { inner: r };
        if &r.bytes::<8>()? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let method = r.string()?;
        let config_json = r.string()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            if params.index_of(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
            params.push(name, r.matrix()?);
        }
        let adam = match r.bytes::<1>()?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let config = AdamConfig { lr: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
                let m = (0..count).map(|_| r.matrix()).collect::<Result<Vec<_>>>()?;
                let v = (0..count).map(|_| r.matrix()).collect::<Result<Vec<_>>>()?;
                for (i, t) in params.tensors().iter().enumerate() {
                    if m[i].shape() != t.value.shape() || v[i].shape() != t.value.shape() {
                        return Err(Error::Checkpoint(format!("optimizer moments for {} have the wrong shape", t.name)));
                    }
                }
                Some(AdamState { config, step, m, v })
            }
            other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
        };
        let mut rest = Vec::new();
        r.inner.read_to_end(&mut rest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(Checkpoint { method, config_json, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::read_from(BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Activation, ModelConfig, TuckerRanks};

    fn sample() -> Checkpoint {
        let config = ModelConfig {
            d: 4,
            d_q: 3,
            d_t: 5,
            d_w: 2,
            gcn_layers: 2,
            ranks: TuckerRanks::new(2, 3, 3),
            activation: Activation::Relu,
        };
        let mut model = init_params(&config, 5).unwrap();
        model.params.get_mut(0)[(0, 0)] = -0.0;
        model.params.get_mut(1)[(1, 1)] = f64::MIN_POSITIVE / 3.0;
        let mut adam = AdamState::new(&model.params, AdamConfig::default());
        adam.step = 17;
        adam.m[2][(0, 1)] = 1e-300;
        Checkpoint {
            method: "qcea".into(),
            config_json: serde_json::to_string(&config).unwrap(),
            params: model.params,
            adam: Some(adam),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&bytes[..]).unwrap();
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
        assert_eq!(back.params.get(0)[(0, 0)].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back, ck);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let mut bytes = Vec::new();
        sample().write_to(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&bad[..]), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::read_from(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::read_from(&long[..]), Err(Error::Checkpoint(_))));
    }
}
