//! Two-party evaluation of Boolean circuits on XOR shares.
//!
//! XOR and NOT are local. Every AND layer costs one exchange in which both
//! parties open `d = x ⊕ a` and `e = y ⊕ b` for all gates of the layer.

use crate::bits::BitVector;
use crate::error::{Error, Result};
use crate::transport::{Endpoint, MsgType};

use super::circuit::{Circuit, Gate};
use super::dealer::TriplePool;
use super::share::BooleanShare;

/// State owned by one computing party.
#[derive(Debug)]
pub struct PartyCtx {
    pub id: u8,
    pub endpoint: Endpoint,
    pub triples: TriplePool,
}

impl PartyCtx {
    pub fn new(id: u8, endpoint: Endpoint, triples: TriplePool) -> Result<Self> {
        if id > 1 || triples.party() != id {
            return Err(Error::Protocol(format!(
                "party {id} given triples of party {}",
                triples.party()
            )));
        }
        Ok(Self { id, endpoint, triples })
    }

    /// Shares of a public constant: party 0 holds the value.
    pub fn constant(&self, value: bool, lanes: usize) -> BitVector {
        if value && self.id == 0 {
            BitVector::ones(lanes)
        } else {
            BitVector::zeros(lanes)
        }
    }

    /// Opens a batch of ANDs `x[i] ∧ y[i]` in a single exchange.
    pub async fn and_batch(&mut self, x: &[&BitVector], y: &[&BitVector]) -> Result<Vec<BitVector>> {
        if x.len() != y.len() {
            return Err(Error::dim(x.len(), y.len(), "AND batch operands"));
        }
        if x.is_empty() {
            return Ok(Vec::new());
        }
        let lens: Vec<usize> = x.iter().map(|v| v.len()).collect();
        for (a, b) in x.iter().zip(y) {
            if a.len() != b.len() {
                return Err(Error::dim(a.len(), b.len(), "AND operand lanes"));
            }
        }
        let total: usize = lens.iter().sum();
        let (a, b, c) = self.triples.take(total)?;
        let xs = BitVector::concat(x.iter().copied());
        let ys = BitVector::concat(y.iter().copied());
        let d = xs.xor(&a)?;
        let e = ys.xor(&b)?;
        let mut mine = d.clone();
        mine.extend_from(&e);
        let theirs = self.endpoint.exchange(MsgType::AndOpen, &mine.to_bytes()).await?;
        let theirs = BitVector::from_bytes(&theirs, 2 * total)
            .map_err(|_| Error::Protocol("malformed AND opening".into()))?;
        let big_d = d.xor(&theirs.slice(0, total))?;
        let big_e = e.xor(&theirs.slice(total, total))?;
        let mut z = c;
        z.xor_assign(&big_d.and(&b)?)?;
        z.xor_assign(&big_e.and(&a)?)?;
        if self.id == 0 {
            z.xor_assign(&big_d.and(&big_e)?)?;
        }
        let mut out = Vec::with_capacity(lens.len());
        let mut at = 0;
        for len in lens {
            out.push(z.slice(at, len));
            at += len;
        }
        Ok(out)
    }

    /// Bitwise AND of two shared vectors in one round.
    pub async fn secure_and(&mut self, x: &BooleanShare, y: &BooleanShare) -> Result<BooleanShare> {
        if x.party != self.id || y.party != self.id {
            return Err(Error::Protocol("share belongs to the other party".into()));
        }
        let mut z = self.and_batch(&[&x.bits], &[&y.bits]).await?;
        Ok(BooleanShare {
            bits: z.pop().expect("one output"),
            party: self.id,
            tag: x.tag,
        })
    }

    /// Evaluates `circuit` on this party's input shares; all inputs carry
    /// the same number of lanes. Uses exactly `circuit.depth()` exchanges and
    /// `circuit.and_count() · lanes` triples.
    pub async fn eval(&mut self, circuit: &Circuit, inputs: Vec<BitVector>) -> Result<Vec<BitVector>> {
        if inputs.len() != circuit.n_inputs() {
            return Err(Error::dim(circuit.n_inputs(), inputs.len(), "circuit inputs"));
        }
        let lanes = inputs.first().map_or(1, |v| v.len());
        if let Some(bad) = inputs.iter().find(|v| v.len() != lanes) {
            return Err(Error::dim(lanes, bad.len(), "circuit lane count"));
        }
        let mut inputs: Vec<Option<BitVector>> = inputs.into_iter().map(Some).collect();
        let gates = circuit.gates();
        let mut vals: Vec<Option<BitVector>> = vec![None; gates.len()];
        let release = |vals: &mut Vec<Option<BitVector>>, w: usize, pos: usize| {
            if circuit.last_use[w] == pos {
                vals[w] = None;
            }
        };
        for (ands, free) in &circuit.schedule {
            if !ands.is_empty() {
                let (xs, ys): (Vec<&BitVector>, Vec<&BitVector>) = ands
                    .iter()
                    .map(|&i| match gates[i] {
                        Gate::And(a, b) => (
                            vals[a.0 as usize].as_ref().expect("operand live"),
                            vals[b.0 as usize].as_ref().expect("operand live"),
                        ),
                        _ => unreachable!("AND layer holds only AND gates"),
                    })
                    .unzip();
                let zs = self.and_batch(&xs, &ys).await?;
                for (&i, z) in ands.iter().zip(zs) {
                    vals[i] = Some(z);
                    if let Gate::And(a, b) = gates[i] {
                        let pos = circuit.position[i];
                        release(&mut vals, a.0 as usize, pos);
                        release(&mut vals, b.0 as usize, pos);
                    }
                }
            }
            for &i in free {
                let pos = circuit.position[i];
                let get = |w: super::circuit::Wire| vals[w.0 as usize].as_ref().expect("operand live");
                let v = match gates[i] {
                    Gate::Input(k) => inputs[k].take().expect("input used once"),
                    Gate::Const(b) => self.constant(b, lanes),
                    Gate::Not(a) => {
                        if self.id == 0 {
                            get(a).not()
                        } else {
                            get(a).clone()
                        }
                    }
                    Gate::Xor(a, b) => get(a).xor(get(b))?,
                    Gate::And(..) => unreachable!("ANDs are scheduled in layers"),
                };
                vals[i] = Some(v);
                match gates[i] {
                    Gate::Not(a) => release(&mut vals, a.0 as usize, pos),
                    Gate::Xor(a, b) => {
                        release(&mut vals, a.0 as usize, pos);
                        release(&mut vals, b.0 as usize, pos);
                    }
                    _ => {}
                }
            }
        }
        Ok(circuit
            .outputs()
            .iter()
            .map(|w| vals[w.0 as usize].clone().expect("outputs kept"))
            .collect())
    }
}
