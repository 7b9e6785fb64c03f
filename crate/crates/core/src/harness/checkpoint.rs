//! `MCKP` checkpoints.
//!
//! Layout, little-endian: magic `MCKP`, u16 version, u64 length + plan TOML,
//! u64 FNV-1a hash of the plan text, u32 input channels, u32 classes, then
//! three count-prefixed (u32) sections: parameters, buffers and optimizer
//! moments, and finally the u64 step. A tensor record is u32 name length,
//! name bytes, u8 rank, rank × u32 extents and the f64 payload; optimizer
//! records carry the name once followed by the first and second moments.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::optim::AdamState;
use crate::harness::volume_io::Tracked;
use crate::net::{Network, NetworkPlan};
use crate::nn::{Module, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MCKP";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub plan: NetworkPlan,
    pub in_channels: usize,
    pub classes: usize,
    pub params: ParamStore,
    pub optimizer: AdamState,
    pub step: u64,
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&[t.rank() as u8])?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn count(n: usize) -> [u8; 4] {
    (n as u32).to_le_bytes()
}

fn read_str<R: Read>(r: &mut Tracked<R>) -> Result<String> {
    let n = r.u32("name length")? as usize;
    let at = r.offset;
    String::from_utf8(r.bytes(n, "name")?).map_err(|_| Error::Format { offset: at, reason: "name is not UTF-8".into() })
}

fn read_tensor<R: Read>(r: &mut Tracked<R>) -> Result<Tensor> {
    let rank = r.u8("rank")?;
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(r.u32("extent")? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| r.fail(format!("extents {shape:?} overflow")))?;
    Tensor::new(&shape, r.f64s(n, "tensor payload")?)
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let plan = self.plan.to_toml()?;
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(plan.len() as u64).to_le_bytes())?;
        w.write_all(plan.as_bytes())?;
        w.write_all(&fnv1a(plan.as_bytes()).to_le_bytes())?;
        w.write_all(&(self.in_channels as u32).to_le_bytes())?;
        w.write_all(&(self.classes as u32).to_le_bytes())?;
        w.write_all(&count(self.params.len()))?;
        for (name, t) in self.params.iter() {
            write_str(w, name)?;
            write_tensor(w, t)?;
        }
        let buffers: Vec<_> = self.params.buffers().collect();
        w.write_all(&count(buffers.len()))?;
        for (name, t) in buffers {
            write_str(w, name)?;
            write_tensor(w, t)?;
        }
        w.write_all(&count(self.optimizer.m.len()))?;
        for (name, m) in &self.optimizer.m {
            let v = self
                .optimizer
                .v
                .get(name)
                .ok_or_else(|| Error::State(format!("second moment missing for `{name}`")))?;
            write_str(w, name)?;
            write_tensor(w, m)?;
            write_tensor(w, v)?;
        }
        w.write_all(&self.step.to_le_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = Tracked::new(r);
        if r.array::<4>("magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format { offset: 0, reason: "bad checkpoint magic".into() });
        }
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format { offset: 4, reason: format!("unsupported checkpoint version {version}") });
        }
        let len = r.u64("plan length")?;
        let plan_at = r.offset;
        let len = usize::try_from(len).map_err(|_| r.fail("plan length overflows"))?;
        let text = r.bytes(len, "plan")?;
        let hash_at = r.offset;
        if r.u64("plan hash")? != fnv1a(&text) {
            return Err(Error::Format { offset: hash_at, reason: "plan hash mismatch".into() });
        }
        let plan_err = |reason: String| Error::Format { offset: plan_at, reason };
        let text = String::from_utf8(text).map_err(|_| plan_err("plan is not UTF-8".into()))?;
        let plan = NetworkPlan::from_toml(&text).map_err(|e| plan_err(e.to_string()))?;
        let in_channels = r.u32("input channels")? as usize;
        let classes = r.u32("classes")? as usize;

        let params_at = r.offset;
        let mut params = ParamStore::new();
        for _ in 0..r.u32("parameter count")? {
            let name = read_str(&mut r)?;
            let t = read_tensor(&mut r)?;
            params.insert(&name, t).map_err(|e| r.fail(e.to_string()))?;
        }
        for _ in 0..r.u32("buffer count")? {
            let name = read_str(&mut r)?;
            let t = read_tensor(&mut r)?;
            params.set_buffer(&name, t);
        }
        let mut optimizer = AdamState::default();
        for _ in 0..r.u32("optimizer count")? {
            let name = read_str(&mut r)?;
            let m = read_tensor(&mut r)?;
            let v = read_tensor(&mut r)?;
            optimizer.m.insert(name.clone(), m);
            optimizer.v.insert(name, v);
        }
        let step = r.u64("step")?;
        r.expect_end()?;
        optimizer.step = step;

        // the plan must describe exactly the stored parameters
        let net = Network::new(&plan, in_channels, classes).map_err(|e| plan_err(e.to_string()))?;
        let decls: BTreeMap<String, Vec<usize>> = net.params().into_iter().map(|d| (d.name, d.shape)).collect();
        let stored: BTreeMap<String, Vec<usize>> = params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        if decls != stored {
            return Err(Error::Format { offset: params_at, reason: "parameters do not match the plan".into() });
        }
        Ok(Self { plan, in_channels, classes, params, optimizer, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn network(&self) -> Result<Network> {
        Network::new(&self.plan, self.in_channels, self.classes)
    }
}
