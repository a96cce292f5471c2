//! XOR secret sharing of bit vectors.

use std::io::{Read, Write};

use rand::RngCore;

use crate::bits::BitVector;
use crate::error::{Error, Result};
use crate::format::{BitmapStore, SHR1_MAGIC};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BooleanShare {
    pub bits: BitVector,
    pub party: u8,
    pub tag: u64,
}

impl BooleanShare {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Party 0 receives a uniform `r`, party 1 receives `x ⊕ r`.
pub fn share_bits<R: RngCore + ?Sized>(x: &BitVector, tag: u64, rng: &mut R) -> (BooleanShare, BooleanShare) {
    let r = BitVector::random(x.len(), rng);
    let masked = x.xor(&r).expect("equal lengths");
    (
        BooleanShare { bits: r, party: 0, tag },
        BooleanShare {
            bits: masked,
            party: 1,
            tag,
        },
    )
}

pub fn reconstruct(s0: &BooleanShare, s1: &BooleanShare) -> Result<BitVector> {
    if s0.tag != s1.tag {
        return Err(Error::TagMismatch {
            left: s0.tag,
            right: s1.tag,
        });
    }
    if s0.party == s1.party {
        return Err(Error::Protocol(format!("both shares belong to party {}", s0.party)));
    }
    s0.bits.xor(&s1.bits)
}

/// XORs the same fresh mask into both shares.
pub fn rerandomize<R: RngCore + ?Sized>(
    s0: &BooleanShare,
    s1: &BooleanShare,
    rng: &mut R,
) -> Result<(BooleanShare, BooleanShare)> {
    if s0.len() != s1.len() {
        return Err(Error::dim(s0.len(), s1.len(), "share length"));
    }
    let r = BitVector::random(s0.len(), rng);
    let fresh = |s: &BooleanShare| BooleanShare {
        bits: s.bits.xor(&r).expect("checked lengths"),
        party: s.party,
        tag: s.tag,
    };
    Ok((fresh(s0), fresh(s1)))
}

/// `SHR1` file for one party; the header's K field holds the party id.
pub fn write_shares<W: Write>(w: &mut W, party: u8, n_bits: usize, shares: &[BooleanShare]) -> Result<()> {
    let mut store = BitmapStore::new(SHR1_MAGIC, n_bits, party as usize);
    for s in shares {
        if s.party != party {
            return Err(Error::Protocol(format!("share of party {} in file of party {party}", s.party)));
        }
        store.push(s.tag, s.bits.clone())?;
    }
    store.write(w)
}

pub fn read_shares<R: Read>(r: &mut R) -> Result<Vec<BooleanShare>> {
    let store = BitmapStore::read(r, SHR1_MAGIC)?;
    let party = u8::try_from(store.k)
        .ok()
        .filter(|p| *p < 2)
        .ok_or_else(|| Error::Format(format!("invalid party {}", store.k)))?;
    Ok(store
        .records
        .into_iter()
        .map(|(tag, bits)| BooleanShare { bits, party, tag })
        .collect())
}
