//! `MCVX` volume records.
//!
//! Layout, little-endian: magic `MCVX`, u16 version, u8 dtype (0 = f64
//! image, 1 = u8 labels), u8 rank, rank × u32 extents, 3 × f64 spacing,
//! then the raw payload. A sample file is an image record followed by a
//! label record and nothing else.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::synth::VolumeSample;
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: [u8; 4] = *b"MCVX";
pub const VOLUME_VERSION: u16 = 1;
const DTYPE_REAL: u8 = 0;
const DTYPE_LABELS: u8 = 1;
const MAX_RANK: u8 = 8;

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    Real(Tensor),
    Labels { shape: Vec<usize>, data: Vec<u8> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: VolumeData,
    pub spacing: [f64; 3],
}

/// Reader that knows its byte offset, for error reporting.
pub(crate) struct Tracked<R> {
    inner: R,
    pub offset: u64,
}

impl<R: Read> Tracked<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format { offset: self.offset, reason: reason.into() }
    }

    pub fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let got = (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if got < n {
            let at = self.offset + got as u64;
            return Err(Error::Format { offset: at, reason: format!("truncated {what}: {got} of {n} bytes") });
        }
        self.offset += n as u64;
        Ok(buf)
    }

    pub fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.bytes(N, what)?.try_into().expect("exact length"))
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    pub fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| self.fail(format!("{what} length overflows")))?;
        let raw = self.bytes(len, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    /// Errors unless the stream is exhausted.
    pub fn expect_end(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        if self.inner.read(&mut probe)? != 0 {
            return Err(self.fail("trailing bytes after the last record"));
        }
        Ok(())
    }
}

pub fn write_volume<W: Write>(w: &mut W, v: &Volume) -> Result<()> {
    let (dtype, shape) = match &v.data {
        VolumeData::Real(t) => (DTYPE_REAL, t.shape()),
        VolumeData::Labels { shape, .. } => (DTYPE_LABELS, shape.as_slice()),
    };
    if shape.len() > MAX_RANK as usize || shape.iter().any(|&e| e > u32::MAX as usize) {
        return Err(Error::shape(format!("cannot store volume of shape {shape:?}")));
    }
    w.write_all(&VOLUME_MAGIC)?;
    w.write_all(&VOLUME_VERSION.to_le_bytes())?;
    w.write_all(&[dtype, shape.len() as u8])?;
    for &e in shape {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for s in v.spacing {
        w.write_all(&s.to_le_bytes())?;
    }
    match &v.data {
        VolumeData::Real(t) => {
            for x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        VolumeData::Labels { data, .. } => w.write_all(data)?,
    }
    Ok(())
}

pub(crate) fn read_volume_tracked<R: Read>(r: &mut Tracked<R>) -> Result<Volume> {
    let start = r.offset;
    if r.array::<4>("magic")? != VOLUME_MAGIC {
        return Err(Error::Format { offset: start, reason: "bad volume magic".into() });
    }
    let version = r.u16("version")?;
    if version != VOLUME_VERSION {
        return Err(Error::Format { offset: start + 4, reason: format!("unsupported volume version {version}") });
    }
    let dtype = r.u8("dtype")?;
    let rank = r.u8("rank")?;
    if rank > MAX_RANK {
        return Err(r.fail(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(r.u32("extent")? as usize);
    }
    let spacing: [f64; 3] = r.f64s(3, "spacing")?.try_into().expect("three values");
    let n = shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| r.fail(format!("extents {shape:?} overflow")))?;
    let data = match dtype {
        DTYPE_REAL => VolumeData::Real(Tensor::new(&shape, r.f64s(n, "payload")?)?),
        DTYPE_LABELS => VolumeData::Labels { data: r.bytes(n, "payload")?, shape },
        other => return Err(Error::Format { offset: start + 6, reason: format!("unknown dtype {other}") }),
    };
    Ok(Volume { data, spacing })
}

/// Reads exactly one record; trailing bytes are a format error.
pub fn read_volume<R: Read>(r: R) -> Result<Volume> {
    let mut t = Tracked::new(r);
    let v = read_volume_tracked(&mut t)?;
    t.expect_end()?;
    Ok(v)
}

pub fn write_sample(path: &Path, s: &VolumeSample) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_sample_to(&mut w, s)?;
    w.flush()?;
    Ok(())
}

pub fn write_sample_to<W: Write>(w: &mut W, s: &VolumeSample) -> Result<()> {
    let labels = s
        .labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::Data(format!("label {l} does not fit in a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    write_volume(w, &Volume { data: VolumeData::Real(s.image.clone()), spacing: s.spacing })?;
    write_volume(
        w,
        &Volume { data: VolumeData::Labels { shape: s.extents().to_vec(), data: labels }, spacing: s.spacing },
    )
}

/// Reads an image record then a label record; `id` names the sample.
pub fn read_sample_from<R: Read>(r: R, id: &str) -> Result<VolumeSample> {
    let mut t = Tracked::new(r);
    let image = read_volume_tracked(&mut t)?;
    let label_start = t.offset;
    let labels = read_volume_tracked(&mut t)?;
    t.expect_end()?;
    let VolumeData::Real(img) = image.data else {
        return Err(Error::Format { offset: 0, reason: "first record must be an image".into() });
    };
    let VolumeData::Labels { shape, data } = labels.data else {
        return Err(Error::Format { offset: label_start, reason: "second record must be labels".into() });
    };
    if img.rank() != 4 || shape.as_slice() != &img.shape()[1..] {
        return Err(Error::Format {
            offset: label_start,
            reason: format!("labels {shape:?} do not match image {:?}", img.shape()),
        });
    }
    VolumeSample::new(img, data.into_iter().map(usize::from).collect(), image.spacing, id)
}

pub fn read_sample(path: &Path) -> Result<VolumeSample> {
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    read_sample_from(BufReader::new(File::open(path)?), &id)
}
