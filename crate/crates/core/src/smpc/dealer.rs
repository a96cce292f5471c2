//! Beaver triples from a trusted dealer.

use std::io::{Read, Write};

use rand::RngCore;

use crate::bits::BitVector;
use crate::error::{Error, Result};
use crate::format::{BitmapStore, TRP1_MAGIC};

/// One party's shares of `count` bit triples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripleBlock {
    pub party: u8,
    pub a: BitVector,
    pub b: BitVector,
    pub c: BitVector,
}

impl TripleBlock {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// Wire payload: 4-byte big-endian count, then `a`, `b`, `c` packed.
    pub fn to_payload(&self) -> Vec<u8> {
        let mut out = (self.len() as u32).to_be_bytes().to_vec();
        for v in [&self.a, &self.b, &self.c] {
            out.extend(v.to_bytes());
        }
        out
    }

    pub fn from_payload(party: u8, payload: &[u8]) -> Result<Self> {
        if payload.len() < 4 {
            return Err(Error::Format("triple block too short".into()));
        }
        let count = u32::from_be_bytes(payload[..4].try_into().expect("4 bytes")) as usize;
        let stride = count.div_ceil(8);
        if payload.len() != 4 + 3 * stride {
            return Err(Error::Format("triple block length mismatch".into()));
        }
        let part = |i: usize| BitVector::from_bytes(&payload[4 + i * stride..4 + (i + 1) * stride], count);
        Ok(Self {
            party,
            a: part(0)?,
            b: part(1)?,
            c: part(2)?,
        })
    }

    /// `TRP1` file: header N = triple count, K = party; records `a`, `b`, `c` tagged 0, 1, 2.
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut store = BitmapStore::new(TRP1_MAGIC, self.len(), self.party as usize);
        for (tag, v) in [&self.a, &self.b, &self.c].into_iter().enumerate() {
            store.push(tag as u64, v.clone())?;
        }
        store.write(w)
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let store = BitmapStore::read(r, TRP1_MAGIC)?;
        let party = u8::try_from(store.k)
            .ok()
            .filter(|p| *p < 2)
            .ok_or_else(|| Error::Format(format!("invalid party {}", store.k)))?;
        let tags: Vec<u64> = store.records.iter().map(|r| r.0).collect();
        if tags != [0, 1, 2] {
            return Err(Error::Format("triple file must hold records a, b, c".into()));
        }
        let mut it = store.records.into_iter().map(|r| r.1);
        Ok(Self {
            party,
            a: it.next().expect("three records"),
            b: it.next().expect("three records"),
            c: it.next().expect("three records"),
        })
    }
}

/// `count` random triples with `(a0⊕a1)∧(b0⊕b1) = c0⊕c1`.
pub fn deal_triples<R: RngCore + ?Sized>(count: usize, rng: &mut R) -> (TripleBlock, TripleBlock) {
    let a = BitVector::random(count, rng);
    let b = BitVector::random(count, rng);
    let c = a.and(&b).expect("equal lengths");
    let mask = |v: &BitVector, rng: &mut R| {
        let r = BitVector::random(count, rng);
        let other = v.xor(&r).expect("equal lengths");
        (r, other)
    };
    let (a0, a1) = mask(&a, rng);
    let (b0, b1) = mask(&b, rng);
    let (c0, c1) = mask(&c, rng);
    (
        TripleBlock {
            party: 0,
            a: a0,
            b: b0,
            c: c0,
        },
        TripleBlock {
            party: 1,
            a: a1,
            b: b1,
            c: c1,
        },
    )
}

/// All-zero triples. Only useful for tests that need a predictable transcript.
pub fn deal_zero_triples(count: usize) -> (TripleBlock, TripleBlock) {
    let z = BitVector::zeros(count);
    let block = |party| TripleBlock {
        party,
        a: z.clone(),
        b: z.clone(),
        c: z.clone(),
    };
    (block(0), block(1))
}

/// Triples held by one party, consumed front to back exactly once.
#[derive(Clone, Debug)]
pub struct TriplePool {
    block: TripleBlock,
    used: usize,
}

impl TriplePool {
    pub fn new(block: TripleBlock) -> Self {
        Self { block, used: 0 }
    }

    pub fn empty(party: u8) -> Self {
        Self::new(TripleBlock {
            party,
            a: BitVector::zeros(0),
            b: BitVector::zeros(0),
            c: BitVector::zeros(0),
        })
    }

    pub fn party(&self) -> u8 {
        self.block.party
    }

    pub fn remaining(&self) -> usize {
        self.block.len() - self.used
    }

    pub fn used(&self) -> usize {
        self.used
    }

    /// Appends freshly dealt triples behind the unused ones.
    pub fn refill(&mut self, more: TripleBlock) -> Result<()> {
        if more.party != self.block.party {
            return Err(Error::Protocol("triple block for the other party".into()));
        }
        let rest = |v: &BitVector, used| v.slice(used, v.len() - used);
        let mut a = rest(&self.block.a, self.used);
        let mut b = rest(&self.block.b, self.used);
        let mut c = rest(&self.block.c, self.used);
        a.extend_from(&more.a);
        b.extend_from(&more.b);
        c.extend_from(&more.c);
        self.block = TripleBlock {
            party: self.block.party,
            a,
            b,
            c,
        };
        self.used = 0;
        Ok(())
    }

    pub fn take(&mut self, count: usize) -> Result<(BitVector, BitVector, BitVector)> {
        if count > self.remaining() {
            return Err(Error::TripleExhaustion {
                requested: count,
                remaining: self.remaining(),
            });
        }
        let start = self.used;
        self.used += count;
        Ok((
            self.block.a.slice(start, count),
            self.block.b.slice(start, count),
            self.block.c.slice(start, count),
        ))
    }
}
