//! Binary checkpoint: named little-endian `f64` arrays with a trailing CRC32.
//!
//! ```text
//! "ISODIFF1" | u16 version | u32 count
//! count x { u16 name_len | name | u8 rank | rank x u64 dim | f64 data... }
//! u32 crc32 of everything above
//! ```

use std::path::Path;

use crate::diffcore::{Activation, Mlp};
use crate::diffusion::{NoiseSchedule, ScoreNet};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ISODIFF1";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!("bad array name {name:?}")));
        }
        if self.arrays.iter().any(|(n, _)| n == name) {
            return Err(Error::InvalidArgument(format!("duplicate array {name}")));
        }
        if value.shape().len() > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!("array {name} has too many dimensions")));
        }
        self.arrays.push((name.to_string(), value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Corrupt(format!("checkpoint has no array {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _)| n.as_str())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 2 + 4 + 4 {
            return Err(Error::Corrupt("checkpoint truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Corrupt("checkpoint CRC mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Corrupt("bad checkpoint magic".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Corrupt(format!("unsupported checkpoint version {version}")));
        }
        let count = u32::from_le_bytes(r.array()?);
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Corrupt("array name is not UTF-8".into()))?.to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(r.array()?) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Corrupt("array size overflows".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Corrupt(e.to_string()))?;
            ck.insert(&name, t).map_err(|e| Error::Corrupt(e.to_string()))?;
        }
        if r.pos != body.len() {
            return Err(Error::Corrupt("trailing bytes after arrays".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Corrupt("checkpoint truncated".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("sized take"))
    }
}

fn put_mlp(ck: &mut Checkpoint, prefix: &str, mlp: &Mlp) -> Result<()> {
    for (i, (w, b)) in mlp.weights().iter().zip(mlp.biases()).enumerate() {
        ck.insert(&format!("{prefix}.w{i}"), w.clone())?;
        ck.insert(&format!("{prefix}.b{i}"), b.clone())?;
    }
    Ok(())
}

fn get_mlp(ck: &Checkpoint, prefix: &str, act: Activation) -> Result<Mlp> {
    let (mut ws, mut bs) = (Vec::new(), Vec::new());
    while let (Ok(w), Ok(b)) = (ck.get(&format!("{prefix}.w{}", ws.len())), ck.get(&format!("{prefix}.b{}", bs.len()))) {
        ws.push(w.clone());
        bs.push(b.clone());
    }
    Mlp::from_parts(ws, bs, act).map_err(|e| Error::Corrupt(format!("{prefix}: {e}")))
}

/// Score network plus the schedule it was trained with.
pub fn scorenet_checkpoint(net: &ScoreNet, sched: &NoiseSchedule, beta_range: (f64, f64)) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.insert("meta.schedule", Tensor::vector(vec![sched.steps() as f64, beta_range.0, beta_range.1]))?;
    ck.insert("meta.time_dim", Tensor::vector(vec![net.time_dim() as f64]))?;
    ck.insert("meta.activation", Tensor::vector(vec![f64::from(net.encoder.activation().code())]))?;
    ck.insert("meta.prior_skip", Tensor::vector(vec![if net.prior_skip() { 1.0 } else { 0.0 }]))?;
    put_mlp(&mut ck, "encoder", &net.encoder)?;
    put_mlp(&mut ck, "decoder", &net.decoder)?;
    Ok(ck)
}

fn meta_usize(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 1e15 {
        Ok(v as usize)
    } else {
        Err(Error::Corrupt(format!("{what} {v} is not a count")))
    }
}

pub fn load_scorenet(ck: &Checkpoint) -> Result<(ScoreNet, NoiseSchedule)> {
    let s = ck.get("meta.schedule")?.data();
    if s.len() != 3 {
        return Err(Error::Corrupt("meta.schedule must hold three values".into()));
    }
    let sched = NoiseSchedule::linear(meta_usize(s[0], "steps")?, s[1], s[2]).map_err(|e| Error::Corrupt(e.to_string()))?;
    let time_dim = meta_usize(ck.get("meta.time_dim")?.data()[0], "time_dim")?;
    let code = meta_usize(ck.get("meta.activation")?.data()[0], "activation")?;
    let act = u8::try_from(code).ok().and_then(Activation::from_code).ok_or_else(|| Error::Corrupt(format!("activation code {code}")))?;
    let net = ScoreNet::from_parts(get_mlp(ck, "encoder", act)?, get_mlp(ck, "decoder", act)?, time_dim, sched.steps())
        .map_err(|e| Error::Corrupt(e.to_string()))?;
    let net = match meta_usize(ck.get("meta.prior_skip")?.data()[0], "prior_skip")? {
        0 => net,
        1 => net.with_prior_skip(&sched).map_err(|e| Error::Corrupt(e.to_string()))?,
        v => return Err(Error::Corrupt(format!("prior_skip flag {v}"))),
    };
    Ok((net, sched))
}
