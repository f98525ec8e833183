//! "DEAPCKPT1" checkpoints: parameters, optimizer moments, counters and the
//! echoed run config.
//!
//! ```text
//! DEAPCKPT1
//! dtype f32
//! step <u64>
//! epoch <u64>
//! best <f64 or none>
//! entries <count>
//! config <byte length>
//! <config text>
//! param <name> <frozen 0|1> <rank> <dims...>      (once per entry)
//! <value bytes><m bytes><v bytes>                  (little endian)
//! ```

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::Moments;
use crate::params::ParameterStore;
use crate::tensor::{Precision, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &str = "DEAPCKPT1";

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub config: String,
    pub step: u64,
    pub epoch: u64,
    pub best_dice: Option<f64>,
    pub store: ParameterStore<T>,
    pub moments: Vec<Moments<T>>,
}

fn put<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &v in t.data() {
        match T::PRECISION {
            Precision::F32 => out.extend_from_slice(&v.to_f32().to_le_bytes()),
            Precision::F64 => out.extend_from_slice(&v.to_f64().to_le_bytes()),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Header("unterminated checkpoint header line".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::Header("checkpoint header is not UTF-8".into()))
    }

    fn field(&mut self, key: &str) -> Result<&'a str> {
        let line = self.line()?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| Error::Header(format!("expected {key:?} line, found {line:?}")))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::PayloadMismatch {
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn tensor<T: Scalar>(&mut self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let data = match T::PRECISION {
            Precision::F32 => self
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            Precision::F64 => self
                .take(8 * n)?
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        Tensor::new(shape.to_vec(), data)
    }
}

fn num<T: std::str::FromStr>(what: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Header(format!("bad {what} {s:?}")))
}

/// Element type recorded in an encoded checkpoint, read from the header only.
pub fn peek_precision(bytes: &[u8]) -> Result<Precision> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.line().unwrap_or("");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic.chars().take(16).collect(),
        });
    }
    r.field("dtype")?.parse()
}

impl<T: Scalar> Checkpoint<T> {
    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.moments.len() != self.store.len() {
            return Err(Error::InvalidArgument("moments do not match parameters".into()));
        }
        let mut out = Vec::new();
        let best = self.best_dice.map_or("none".to_string(), |b| b.to_string());
        write!(
            out,
            "{CHECKPOINT_MAGIC}\ndtype {}\nstep {}\nepoch {}\nbest {best}\nentries {}\nconfig {}\n",
            T::PRECISION.as_str(),
            self.step,
            self.epoch,
            self.store.len(),
            self.config.len()
        )
        .unwrap();
        out.extend_from_slice(self.config.as_bytes());
        for (e, mo) in self.store.iter().zip(&self.moments) {
            if e.name.contains(char::is_whitespace) || mo.name != e.name {
                return Err(Error::InvalidArgument(format!("cannot store parameter {:?}", e.name)));
            }
            let dims: String = e.value.shape().iter().map(|d| format!(" {d}")).collect();
            writeln!(out, "param {} {} {}{dims}", e.name, e.frozen as u8, e.value.rank()).unwrap();
            put(&mut out, &e.value);
            put(&mut out, &mo.m);
            put(&mut out, &mo.v);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.line().unwrap_or("");
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic.chars().take(16).collect(),
            });
        }
        let dtype = r.field("dtype")?;
        if dtype != T::PRECISION.as_str() {
            return Err(Error::Header(format!(
                "checkpoint dtype {dtype} does not match requested {}",
                T::PRECISION.as_str()
            )));
        }
        let step = num("step", r.field("step")?)?;
        let epoch = num("epoch", r.field("epoch")?)?;
        let best_dice = match r.field("best")? {
            "none" => None,
            s => Some(num("best", s)?),
        };
        let entries: usize = num("entry count", r.field("entries")?)?;
        let clen: usize = num("config length", r.field("config")?)?;
        let config = String::from_utf8(r.take(clen)?.to_vec())
            .map_err(|_| Error::Header("config echo is not UTF-8".into()))?;
        let mut store = ParameterStore::new();
        let mut moments = Vec::with_capacity(entries);
        for _ in 0..entries {
            let line = r.field("param")?;
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() < 3 {
                return Err(Error::Header(format!("bad param line {line:?}")));
            }
            let frozen = match parts[1] {
                "0" => false,
                "1" => true,
                f => return Err(Error::Header(format!("bad frozen flag {f:?}"))),
            };
            let rank: usize = num("rank", parts[2])?;
            if parts.len() != 3 + rank {
                return Err(Error::Header(format!("param line {line:?} does not have {rank} dims")));
            }
            let shape = parts[3..]
                .iter()
                .map(|d| num("dim", d))
                .collect::<Result<Vec<usize>>>()?;
            let value = r.tensor(&shape)?;
            let m = r.tensor(&shape)?;
            let v = r.tensor(&shape)?;
            store.insert(parts[0], value, frozen)?;
            moments.push(Moments {
                name: parts[0].to_string(),
                m,
                v,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::PayloadMismatch {
                expected: r.pos,
                found: bytes.len(),
            });
        }
        Ok(Self {
            config,
            step,
            epoch,
            best_dice,
            store,
            moments,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        let mut store = ParameterStore::new();
        store.insert("a.w", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1 - 0.2), false).unwrap();
        store.insert("b", Tensor::scalar(f32::MIN_POSITIVE), true).unwrap();
        let moments = store
            .iter()
            .map(|e| Moments {
                name: e.name.clone(),
                m: e.value.map(|v| v * 3.0),
                v: e.value.map(|v| v * v),
            })
            .collect();
        Checkpoint {
            config: "model.embed_dim=64\n# note\n".into(),
            step: 17,
            epoch: 4,
            best_dice: Some(0.8125),
            store,
            moments,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::<f32>::decode(&c.encode().unwrap()).unwrap();
        assert_eq!((back.step, back.epoch, back.best_dice), (17, 4, Some(0.8125)));
        assert_eq!(back.config, c.config);
        for (a, b) in back.store.iter().zip(c.store.iter()) {
            assert_eq!((&a.name, a.frozen), (&b.name, b.frozen));
            assert!(a.value.bit_eq(&b.value));
        }
        assert_eq!(back.moments, c.moments);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = sample().encode().unwrap();
        assert!(matches!(Checkpoint::<f32>::decode(b"DEAPVOL1\n"), Err(Error::BadMagic { .. })));
        assert!(matches!(
            Checkpoint::<f32>::decode(&bytes[..bytes.len() - 1]),
            Err(Error::PayloadMismatch { .. })
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::<f32>::decode(&extra).is_err());
        assert!(Checkpoint::<f64>::decode(&bytes).is_err());
    }

    #[test]
    fn precision_is_read_from_the_header() {
        assert_eq!(peek_precision(&sample().encode().unwrap()).unwrap(), Precision::F32);
        assert!(matches!(peek_precision(b"nope\n"), Err(Error::BadMagic { .. })));
    }
}
