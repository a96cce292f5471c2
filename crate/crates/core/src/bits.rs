//! Packed bit vectors.
//!
//! Bit `i` lives in word `i / 64` at position `i % 64`. Bits past `len` are
//! always zero, so word-level popcounts and equality need no masking.

use std::fmt;

use rand::RngCore;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct BitVector {
    words: Vec<u64>,
    len: usize,
}

fn words_for(len: usize) -> usize {
    len.div_ceil(64)
}

impl BitVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; words_for(len)],
            len,
        }
    }

    pub fn ones(len: usize) -> Self {
        let mut v = Self {
            words: vec![u64::MAX; words_for(len)],
            len,
        };
        v.clear_tail();
        v
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut v = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b {
                v.set(i, true);
            }
        }
        v
    }

    /// Builds a vector from the low `len` bits of `value`, least significant first.
    pub fn from_u64(value: u64, len: usize) -> Self {
        assert!(len <= 64);
        let mut v = Self::zeros(len);
        if len > 0 {
            v.words[0] = value;
            v.clear_tail();
        }
        v
    }

    pub fn random<R: RngCore + ?Sized>(len: usize, rng: &mut R) -> Self {
        let mut words = vec![0u64; words_for(len)];
        for w in words.iter_mut() {
            *w = rng.next_u64();
        }
        let mut v = Self { words, len };
        v.clear_tail();
        v
    }

    fn clear_tail(&mut self) {
        let rem = self.len % 64;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        let mask = 1u64 << (i % 64);
        if value {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    pub fn push(&mut self, value: bool) {
        if self.len.is_multiple_of(64) {
            self.words.push(0);
        }
        self.len += 1;
        self.set(self.len - 1, value);
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    None
                } else {
                    let tz = w.trailing_zeros() as usize;
                    w &= w - 1;
                    Some(wi * 64 + tz)
                }
            })
        })
    }

    /// Reads the vector as an unsigned little-endian integer (at most 64 bits).
    pub fn to_u64(&self) -> u64 {
        assert!(self.len <= 64);
        self.words.first().copied().unwrap_or(0)
    }

    fn check_len(&self, other: &Self) -> Result<()> {
        if self.len != other.len {
            return Err(Error::dim(self.len, other.len, "bit vector length"));
        }
        Ok(())
    }

    pub fn xor(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.xor_assign(other)?;
        Ok(out)
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.and_assign(other)?;
        Ok(out)
    }

    pub fn xor_assign(&mut self, other: &Self) -> Result<()> {
        self.check_len(other)?;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a ^= b;
        }
        Ok(())
    }

    pub fn and_assign(&mut self, other: &Self) -> Result<()> {
        self.check_len(other)?;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a &= b;
        }
        Ok(())
    }

    pub fn not(&self) -> Self {
        let mut out = Self {
            words: self.words.iter().map(|w| !w).collect(),
            len: self.len,
        };
        out.clear_tail();
        out
    }

    /// Appends all bits of `other`.
    pub fn extend_from(&mut self, other: &BitVector) {
        let shift = self.len % 64;
        if shift == 0 {
            self.words.extend_from_slice(&other.words);
        } else {
            for &w in &other.words {
                *self.words.last_mut().expect("non-empty when shift > 0") |= w << shift;
                self.words.push(w >> (64 - shift));
            }
        }
        self.len += other.len;
        self.words.truncate(words_for(self.len));
        self.clear_tail();
    }

    /// Copies `len` bits starting at `start`.
    pub fn slice(&self, start: usize, len: usize) -> BitVector {
        assert!(start + len <= self.len, "slice out of range");
        let mut out = BitVector::zeros(len);
        let word_off = start / 64;
        let shift = start % 64;
        for (i, dst) in out.words.iter_mut().enumerate() {
            let lo = self.words.get(word_off + i).copied().unwrap_or(0);
            *dst = if shift == 0 {
                lo
            } else {
                let hi = self.words.get(word_off + i + 1).copied().unwrap_or(0);
                (lo >> shift) | (hi << (64 - shift))
            };
        }
        out.clear_tail();
        out
    }

    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a BitVector>) -> BitVector {
        let mut out = BitVector::zeros(0);
        for p in parts {
            out.extend_from(p);
        }
        out
    }

    /// Packs into `ceil(len / 8)` bytes, bit `i` in byte `i / 8` at position `i % 8`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        out.truncate(self.len.div_ceil(8));
        out
    }

    pub fn from_bytes(bytes: &[u8], len: usize) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::Format(format!(
                "bitmap of {len} bits needs {} bytes, got {}",
                len.div_ceil(8),
                bytes.len()
            )));
        }
        let mut words = vec![0u64; words_for(len)];
        for (i, &b) in bytes.iter().enumerate() {
            words[i / 8] |= (b as u64) << (8 * (i % 8));
        }
        let v = Self { words, len };
        let mut check = v.clone();
        check.clear_tail();
        if check != v {
            return Err(Error::Format("bits set past the declared length".into()));
        }
        Ok(v)
    }
}

/// Transposes `rows` (each of equal length `cols`) into `cols` vectors of `rows.len()` bits.
pub fn transpose(rows: &[BitVector]) -> Vec<BitVector> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    let cols = first.len();
    let mut out = vec![BitVector::zeros(rows.len()); cols];
    for (r, row) in rows.iter().enumerate() {
        debug_assert_eq!(row.len(), cols);
        for c in row.iter_ones() {
            out[c].set(r, true);
        }
    }
    out
}

impl fmt::Debug for BitVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitVector[{}](", self.len)?;
        for (i, b) in self.iter().enumerate() {
            if i == 64 {
                write!(f, "...")?;
                break;
            }
            write!(f, "{}", u8::from(b))?;
        }
        write!(f, ")")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ones_clears_tail() {
        let v = BitVector::ones(70);
        assert_eq!(v.count_ones(), 70);
        assert_eq!(v.words()[1], (1 << 6) - 1);
    }

    #[test]
    fn packing_is_little_endian_bit_order() {
        let v = BitVector::from_bools(&[true, false, true, false, false, false, false, false, true]);
        assert_eq!(v.to_bytes(), vec![0b0000_0101, 0b0000_0001]);
        assert_eq!(BitVector::from_bytes(&v.to_bytes(), 9).unwrap(), v);
    }

    #[test]
    fn from_bytes_rejects_stray_bits() {
        assert!(BitVector::from_bytes(&[0xff], 4).is_err());
        assert!(BitVector::from_bytes(&[0x0f, 0], 4).is_err());
    }

    #[test]
    fn transpose_small() {
        let rows = vec![
            BitVector::from_bools(&[true, false, true]),
            BitVector::from_bools(&[false, false, true]),
        ];
        let cols = transpose(&rows);
        assert_eq!(cols.len(), 3);
        assert_eq!(cols[0], BitVector::from_bools(&[true, false]));
        assert_eq!(cols[1], BitVector::from_bools(&[false, false]));
        assert_eq!(cols[2], BitVector::from_bools(&[true, true]));
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let a = BitVector::zeros(3);
        let b = BitVector::zeros(4);
        assert!(a.xor(&b).is_err());
        assert!(a.and(&b).is_err());
    }

    proptest! {
        #[test]
        fn slice_and_extend_agree_with_bitwise_model(
            a in proptest::collection::vec(any::<bool>(), 0..200),
            b in proptest::collection::vec(any::<bool>(), 0..200),
            cut in 0usize..400,
        ) {
            let mut v = BitVector::from_bools(&a);
            v.extend_from(&BitVector::from_bools(&b));
            let joined: Vec<bool> = a.iter().chain(b.iter()).copied().collect();
            prop_assert_eq!(v.iter().collect::<Vec<_>>(), joined.clone());
            prop_assert_eq!(v.count_ones(), joined.iter().filter(|&&x| x).count());

            let start = cut.min(joined.len());
            let len = (joined.len() - start) / 2;
            let s = v.slice(start, len);
            prop_assert_eq!(s.iter().collect::<Vec<_>>(), joined[start..start + len].to_vec());
        }

        #[test]
        fn byte_roundtrip(seed in any::<u64>(), len in 0usize..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = BitVector::random(len, &mut rng);
            prop_assert_eq!(BitVector::from_bytes(&v.to_bytes(), len).unwrap(), v);
        }
    }
}
