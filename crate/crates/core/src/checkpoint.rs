//! Checkpoint container, little-endian throughout:
//!
//! ```text
//! "FMCK" | version u16 | hash len u16 | config hash (utf-8)
//! step u64 | total_epochs u32 | seed u64
//! history len u64 | (step u64, epoch f64, flow f64, ce f64, p_drop f64)*
//! optimizer steps u64 | param count u32
//! per param: name len u16 | name | requires_grad u8 | rank u8 | dims u32* | data f64*
//!            | has moments u8 | [first f64*, second f64*]
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::autodiff::{AdamWState, ParamStore, Tensor};
use crate::error::{Error, FormatError, Result};
use crate::train::{StepRecord, TrainState};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FMCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub params: ParamStore,
    pub optimizer: AdamWState,
    pub state: TrainState,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(&CHECKPOINT_MAGIC);
    b.write_u16::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
    b.write_u16::<LittleEndian>(ck.config_hash.len() as u16).unwrap();
    b.extend_from_slice(ck.config_hash.as_bytes());
    b.write_u64::<LittleEndian>(ck.state.step).unwrap();
    b.write_u32::<LittleEndian>(ck.state.total_epochs as u32).unwrap();
    b.write_u64::<LittleEndian>(ck.state.seed).unwrap();
    b.write_u64::<LittleEndian>(ck.state.history.len() as u64).unwrap();
    for r in &ck.state.history {
        b.write_u64::<LittleEndian>(r.step).unwrap();
        for v in [r.epoch, r.flow_loss, r.ce_loss, r.p_drop] {
            b.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    b.write_u64::<LittleEndian>(ck.optimizer.step_count).unwrap();
    b.write_u32::<LittleEndian>(ck.params.len() as u32).unwrap();
    for (name, t) in ck.params.iter() {
        b.write_u16::<LittleEndian>(name.len() as u16).unwrap();
        b.extend_from_slice(name.as_bytes());
        b.write_u8(t.requires_grad() as u8).unwrap();
        b.write_u8(t.shape().len() as u8).unwrap();
        for &d in t.shape() {
            b.write_u32::<LittleEndian>(d as u32).unwrap();
        }
        for &v in t.data() {
            b.write_f64::<LittleEndian>(v).unwrap();
        }
        match (ck.optimizer.first_moment.get(name), ck.optimizer.second_moment.get(name)) {
            (Some(m), Some(v)) => {
                b.write_u8(1).unwrap();
                for x in m.iter().chain(v) {
                    b.write_f64::<LittleEndian>(*x).unwrap();
                }
            }
            _ => b.write_u8(0).unwrap(),
        }
    }
    b
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    len: usize,
}

impl Reader<'_> {
    fn need(&self, n: usize) -> Result<()> {
        let pos = self.cur.position() as usize;
        if pos + n > self.len {
            return Err(FormatError::Truncated {
                expected: pos + n,
                actual: self.len,
            }
            .into());
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        self.need(1)?;
        Ok(self.cur.read_u8().unwrap())
    }

    fn u16(&mut self) -> Result<u16> {
        self.need(2)?;
        Ok(self.cur.read_u16::<LittleEndian>().unwrap())
    }

    fn u32(&mut self) -> Result<u32> {
        self.need(4)?;
        Ok(self.cur.read_u32::<LittleEndian>().unwrap())
    }

    fn u64(&mut self) -> Result<u64> {
        self.need(8)?;
        Ok(self.cur.read_u64::<LittleEndian>().unwrap())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        self.need(n.checked_mul(8).ok_or_else(|| FormatError::Header("length overflow".into()))?)?;
        Ok((0..n).map(|_| self.cur.read_f64::<LittleEndian>().unwrap()).collect())
    }

    fn string(&mut self, n: usize) -> Result<String> {
        self.need(n)?;
        let mut buf = vec![0; n];
        self.cur.read_exact(&mut buf).unwrap();
        String::from_utf8(buf).map_err(|_| FormatError::Header("non-utf8 string".into()).into())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader {
        cur: Cursor::new(bytes),
        len: bytes.len(),
    };
    r.need(4)?;
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found,
        }
        .into());
    }
    r.cur.set_position(4);
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        }
        .into());
    }
    let hlen = r.u16()? as usize;
    let config_hash = r.string(hlen)?;
    let step = r.u64()?;
    let total_epochs = r.u32()? as usize;
    let seed = r.u64()?;
    let n_hist = r.u64()? as usize;
    r.need(n_hist.saturating_mul(40))?;
    let mut history = Vec::with_capacity(n_hist);
    for _ in 0..n_hist {
        let s = r.u64()?;
        let v = r.f64s(4)?;
        history.push(StepRecord {
            step: s,
            epoch: v[0],
            flow_loss: v[1],
            ce_loss: v[2],
            p_drop: v[3],
        });
    }
    let mut optimizer = AdamWState {
        step_count: r.u64()?,
        ..Default::default()
    };
    let n_params = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..n_params {
        let nlen = r.u16()? as usize;
        let name = r.string(nlen)?;
        let requires_grad = r.u8()? != 0;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r.f64s(n)?;
        let t = Tensor::from_vec(shape, data)
            .map_err(|_| FormatError::Header(format!("bad tensor {name}")))?
            .with_requires_grad(requires_grad);
        match r.u8()? {
            0 => {}
            1 => {
                optimizer.first_moment.insert(name.clone(), r.f64s(n)?);
                optimizer.second_moment.insert(name.clone(), r.f64s(n)?);
            }
            f => return Err(FormatError::Header(format!("bad moment flag {f} for {name}")).into()),
        }
        if params.get(&name).is_ok() {
            return Err(FormatError::Header(format!("duplicate parameter {name}")).into());
        }
        params.insert(name, t);
    }
    if r.cur.position() as usize != bytes.len() {
        return Err(FormatError::Header(format!(
            "{} trailing bytes",
            bytes.len() - r.cur.position() as usize
        ))
        .into());
    }
    Ok(Checkpoint {
        config_hash,
        params,
        optimizer,
        state: TrainState {
            step,
            total_epochs,
            seed,
            history,
        },
    })
}

/// Writes through a temporary file so an interrupted save never replaces a
/// good checkpoint.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("fmck.tmp");
    fs::write(&tmp, encode_checkpoint(ck)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads and refuses a checkpoint written under a different configuration.
pub fn load_checkpoint_checked(path: &Path, expected_hash: &str) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.config_hash != expected_hash {
        return Err(FormatError::ConfigHash {
            expected: expected_hash.to_string(),
            found: ck.config_hash,
        }
        .into());
    }
    Ok(ck)
}
