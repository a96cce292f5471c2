//! Binary container formats.
//!
//! * `VCDB`: dense f64 arrays. Magic, version byte, rank and dims as 4-byte
//!   big-endian unsigned integers, then row-major little-endian IEEE-754 values.
//! * Bitmap stores (`BKDB` binary keys, `SHR1` shares, `TRP1` triples): magic,
//!   version byte, `N`, `K` and record count as 4-byte big-endian unsigned
//!   integers, then per record an 8-byte big-endian tag followed by
//!   `ceil(N / 8)` bytes of packed bitmap (little-endian bit order).

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::bits::BitVector;
use crate::error::{Error, Result};

pub const VERSION: u8 = 1;
pub const VCDB_MAGIC: [u8; 4] = *b"VCDB";
pub const BKDB_MAGIC: [u8; 4] = *b"BKDB";
pub const SHR1_MAGIC: [u8; 4] = *b"SHR1";
pub const TRP1_MAGIC: [u8; 4] = *b"TRP1";
pub const HETP_MAGIC: [u8; 4] = *b"HETP";

/// FNV-1a, used to turn sample identifiers into fixed-width record tags.
pub fn id_hash(id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_be_bytes(buf))
}

pub(crate) fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in 32 bits")))?;
    w.write_all(&v.to_be_bytes())?;
    Ok(())
}

pub(crate) fn expect_magic<R: Read>(r: &mut R, magic: [u8; 4]) -> Result<()> {
    let mut buf = [0u8; 5];
    r.read_exact(&mut buf)?;
    if buf[..4] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&buf[..4]),
            String::from_utf8_lossy(&magic)
        )));
    }
    if buf[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", buf[4])));
    }
    Ok(())
}

/// A dense row-major array of any rank.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::dim(expected, data.len(), "array element count"));
        }
        Ok(Self { dims, data })
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter());
        }
        Self {
            dims: vec![m.nrows(), m.ncols()],
            data,
        }
    }

    pub fn from_rows(rows: &[DVector<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim(cols, r.len(), "row length"));
            }
            data.extend(r.iter());
        }
        Ok(Self {
            dims: vec![rows.len(), cols],
            data,
        })
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        match self.dims.as_slice() {
            [r, c] => Ok(DMatrix::from_row_slice(*r, *c, &self.data)),
            _ => Err(Error::Format(format!("expected rank 2, got {:?}", self.dims))),
        }
    }

    pub fn to_rows(&self) -> Result<Vec<DVector<f64>>> {
        match self.dims.as_slice() {
            [_, c] => Ok(self
                .data
                .chunks(*c.max(&1))
                .map(DVector::from_column_slice)
                .collect()),
            _ => Err(Error::Format(format!("expected rank 2, got {:?}", self.dims))),
        }
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&VCDB_MAGIC)?;
        w.write_all(&[VERSION])?;
        write_u32(w, self.dims.len())?;
        for &d in &self.dims {
            write_u32(w, d)?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, VCDB_MAGIC)?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(r)? as usize);
        }
        let count: usize = dims.iter().product();
        let mut data = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        Ok(Self { dims, data })
    }
}

/// A store of tagged fixed-length bitmaps.
#[derive(Clone, Debug, PartialEq)]
pub struct BitmapStore {
    pub magic: [u8; 4],
    pub n_bits: usize,
    pub k: usize,
    pub records: Vec<(u64, BitVector)>,
}

impl BitmapStore {
    pub fn new(magic: [u8; 4], n_bits: usize, k: usize) -> Self {
        Self {
            magic,
            n_bits,
            k,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, tag: u64, bits: BitVector) -> Result<()> {
        if bits.len() != self.n_bits {
            return Err(Error::dim(self.n_bits, bits.len(), "bitmap record"));
        }
        self.records.push((tag, bits));
        Ok(())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.magic)?;
        w.write_all(&[VERSION])?;
        write_u32(w, self.n_bits)?;
        write_u32(w, self.k)?;
        write_u32(w, self.records.len())?;
        for (tag, bits) in &self.records {
            w.write_all(&tag.to_be_bytes())?;
            w.write_all(&bits.to_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R, magic: [u8; 4]) -> Result<Self> {
        expect_magic(r, magic)?;
        let n_bits = read_u32(r)? as usize;
        let k = read_u32(r)? as usize;
        let count = read_u32(r)? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 20));
        let mut buf = vec![0u8; n_bits.div_ceil(8)];
        for _ in 0..count {
            let tag = read_u64(r)?;
            r.read_exact(&mut buf)?;
            records.push((tag, BitVector::from_bytes(&buf, n_bits)?));
        }
        Ok(Self {
            magic,
            n_bits,
            k,
            records,
        })
    }
}
