//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `EHRCKPT1`, u32 version, length-prefixed
//! config fingerprint, length-prefixed config text, u32 epoch, parameter
//! tensors, optimizer tensors, RNG state. A tensor block is a u32 count
//! followed by `[u32 name length, name, u32 rank, u32 extents..., f64 data...]`
//! entries. The RNG state is the 32-byte seed, the u64 stream and the u128
//! word position.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use medfuse_tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EHRCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Canonical training config followed by the data-shape lines.
    pub config_text: String,
    /// Number of completed epochs.
    pub epoch: u32,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Vec<(String, Tensor)>,
    pub rng: RngState,
}

pub fn fingerprint(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| corrupt("value does not fit in u32"))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    put_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn put_tensors(w: &mut impl Write, tensors: &[(String, Tensor)]) -> Result<()> {
    put_u32(w, tensors.len())?;
    for (name, t) in tensors {
        put_str(w, name)?;
        put_u32(w, t.rank())?;
        for &e in t.shape() {
            put_u32(w, e)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn get_bytes<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| corrupt(format!("truncated: {e}")))?;
    Ok(b)
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    Ok(u32::from_le_bytes(get_bytes(r)?) as usize)
}

fn get_str(r: &mut impl Read) -> Result<String> {
    let n = get_u32(r)?;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| corrupt(format!("truncated: {e}")))?;
    String::from_utf8(buf).map_err(|_| corrupt("string is not UTF-8"))
}

fn get_tensors(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let n = get_u32(r)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let name = get_str(r)?;
        let rank = get_u32(r)?;
        let shape = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| Ok(f64::from_le_bytes(get_bytes(r)?)))
            .collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| corrupt(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

impl Checkpoint {
    pub fn fingerprint(&self) -> String {
        fingerprint(&self.config_text)
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        put_str(&mut w, &self.fingerprint())?;
        put_str(&mut w, &self.config_text)?;
        w.write_all(&self.epoch.to_le_bytes())?;
        put_tensors(&mut w, &self.params)?;
        put_tensors(&mut w, &self.optimizer)?;
        w.write_all(&self.rng.seed)?;
        w.write_all(&self.rng.stream.to_le_bytes())?;
        w.write_all(&self.rng.word_pos.to_le_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        if &get_bytes::<8>(&mut r)? != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = get_u32(&mut r)?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let stored = get_str(&mut r)?;
        let config_text = get_str(&mut r)?;
        if fingerprint(&config_text) != stored {
            return Err(corrupt("config fingerprint does not match config text"));
        }
        let epoch = u32::from_le_bytes(get_bytes(&mut r)?);
        let params = get_tensors(&mut r)?;
        let optimizer = get_tensors(&mut r)?;
        let rng = RngState {
            seed: get_bytes(&mut r)?,
            stream: u64::from_le_bytes(get_bytes(&mut r)?),
            word_pos: u128::from_le_bytes(get_bytes(&mut r)?),
        };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(corrupt(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            config_text,
            epoch,
            params,
            optimizer,
            rng,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.set_stream(3);
        let _: u64 = rng.random();
        Checkpoint {
            config_text: "seed = 1\n".into(),
            epoch: 4,
            params: vec![
                ("a".into(), Tensor::from_rows(&[vec![1.5, -2.0], vec![0.1, 1e-300]]).unwrap()),
                ("b".into(), Tensor::scalar(f64::MIN_POSITIVE)),
            ],
            optimizer: vec![("adam.step".into(), Tensor::scalar(7.0))],
            rng: RngState::capture(&rng),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let back = Checkpoint::read(bytes.as_slice()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(2);
        let _: [u64; 3] = rng.random();
        let mut restored = RngState::capture(&rng).restore();
        let a: [u64; 4] = rng.random();
        let b: [u64; 4] = restored.random();
        assert_eq!(a, b);
    }

    #[test]
    fn corruption_detected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read(bad.as_slice()).is_err());
        assert!(Checkpoint::read(&bytes[..bytes.len() - 1]).is_err());
        let mut tampered = bytes.clone();
        let pos = bytes.windows(4).position(|w| w == b"seed").unwrap();
        tampered[pos] = b'S';
        assert!(matches!(Checkpoint::read(tampered.as_slice()), Err(Error::Checkpoint(_))));
    }
}
