//! Boolean circuits over XOR, AND, NOT and constants.
//!
//! The builder folds constants on the fly; [`CircuitBuilder::build`] drops
//! gates that no output depends on and groups AND gates by AND-depth, so that
//! evaluation under sharing needs exactly one exchange per layer.

use crate::bits::BitVector;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Wire(pub(crate) u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Input(usize),
    Const(bool),
    Xor(Wire, Wire),
    And(Wire, Wire),
    Not(Wire),
}

#[derive(Debug, Default)]
pub struct CircuitBuilder {
    gates: Vec<Gate>,
    n_inputs: usize,
}

impl CircuitBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, g: Gate) -> Wire {
        self.gates.push(g);
        Wire((self.gates.len() - 1) as u32)
    }

    fn gate(&self, w: Wire) -> Gate {
        self.gates[w.0 as usize]
    }

    fn const_of(&self, w: Wire) -> Option<bool> {
        match self.gate(w) {
            Gate::Const(v) => Some(v),
            _ => None,
        }
    }

    pub fn input(&mut self) -> Wire {
        let i = self.n_inputs;
        self.n_inputs += 1;
        self.push(Gate::Input(i))
    }

    pub fn inputs(&mut self, n: usize) -> Vec<Wire> {
        (0..n).map(|_| self.input()).collect()
    }

    pub fn constant(&mut self, v: bool) -> Wire {
        self.push(Gate::Const(v))
    }

    pub fn not(&mut self, a: Wire) -> Wire {
        match self.gate(a) {
            Gate::Const(v) => self.constant(!v),
            Gate::Not(inner) => inner,
            _ => self.push(Gate::Not(a)),
        }
    }

    pub fn xor(&mut self, a: Wire, b: Wire) -> Wire {
        if a == b {
            return self.constant(false);
        }
        match (self.const_of(a), self.const_of(b)) {
            (Some(x), Some(y)) => self.constant(x ^ y),
            (Some(false), None) => b,
            (None, Some(false)) => a,
            (Some(true), None) => self.not(b),
            (None, Some(true)) => self.not(a),
            (None, None) => self.push(Gate::Xor(a, b)),
        }
    }

    pub fn and(&mut self, a: Wire, b: Wire) -> Wire {
        if a == b {
            return a;
        }
        match (self.const_of(a), self.const_of(b)) {
            (Some(x), Some(y)) => self.constant(x & y),
            (Some(false), None) | (None, Some(false)) => self.constant(false),
            (Some(true), None) => b,
            (None, Some(true)) => a,
            (None, None) => self.push(Gate::And(a, b)),
        }
    }

    /// `l` when `sel = 0`, `r` when `sel = 1`; one AND.
    pub fn mux(&mut self, sel: Wire, l: Wire, r: Wire) -> Wire {
        let diff = self.xor(l, r);
        let pick = self.and(sel, diff);
        self.xor(l, pick)
    }

    /// Keeps only gates reachable from `outputs` and layers ANDs by depth.
    pub fn build(self, outputs: Vec<Wire>) -> Circuit {
        let n = self.gates.len();
        let mut live = vec![false; n];
        let mut stack: Vec<usize> = outputs.iter().map(|w| w.0 as usize).collect();
        while let Some(i) = stack.pop() {
            if std::mem::replace(&mut live[i], true) {
                continue;
            }
            match self.gates[i] {
                Gate::Xor(a, b) | Gate::And(a, b) => stack.extend([a.0 as usize, b.0 as usize]),
                Gate::Not(a) => stack.push(a.0 as usize),
                _ => {}
            }
        }
        // inputs always keep their positions so callers can feed them positionally
        let mut remap = vec![u32::MAX; n];
        let mut gates = Vec::new();
        for (i, g) in self.gates.iter().enumerate() {
            if live[i] || matches!(g, Gate::Input(_)) {
                remap[i] = gates.len() as u32;
                let m = |w: Wire| Wire(remap[w.0 as usize]);
                gates.push(match *g {
                    Gate::Xor(a, b) => Gate::Xor(m(a), m(b)),
                    Gate::And(a, b) => Gate::And(m(a), m(b)),
                    Gate::Not(a) => Gate::Not(m(a)),
                    other => other,
                });
            }
        }
        let outputs = outputs.iter().map(|w| Wire(remap[w.0 as usize])).collect();
        Circuit::compile(self.n_inputs, gates, outputs)
    }
}

/// A compiled circuit with its evaluation schedule.
#[derive(Clone, Debug)]
pub struct Circuit {
    n_inputs: usize,
    gates: Vec<Gate>,
    outputs: Vec<Wire>,
    /// Per AND-depth: the AND gates evaluated in that exchange, then the free
    /// gates that become computable.
    pub(crate) schedule: Vec<(Vec<usize>, Vec<usize>)>,
    /// For each gate, the schedule position after which its value is dead.
    pub(crate) last_use: Vec<usize>,
    pub(crate) position: Vec<usize>,
}

impl Circuit {
    fn compile(n_inputs: usize, gates: Vec<Gate>, outputs: Vec<Wire>) -> Self {
        let mut level = vec![0usize; gates.len()];
        for (i, g) in gates.iter().enumerate() {
            level[i] = match *g {
                Gate::Input(_) | Gate::Const(_) => 0,
                Gate::Not(a) => level[a.0 as usize],
                Gate::Xor(a, b) => level[a.0 as usize].max(level[b.0 as usize]),
                Gate::And(a, b) => level[a.0 as usize].max(level[b.0 as usize]) + 1,
            };
        }
        let depth = level.iter().copied().max().unwrap_or(0);
        let mut schedule = vec![(Vec::new(), Vec::new()); depth + 1];
        for (i, g) in gates.iter().enumerate() {
            match g {
                Gate::And(..) => schedule[level[i]].0.push(i),
                _ => schedule[level[i]].1.push(i),
            }
        }
        let mut position = vec![0; gates.len()];
        let mut pos = 0;
        for (ands, free) in &schedule {
            for &i in ands.iter().chain(free) {
                position[i] = pos;
                pos += 1;
            }
        }
        let mut last_use = vec![0usize; gates.len()];
        for (i, g) in gates.iter().enumerate() {
            let p = position[i];
            match *g {
                Gate::Xor(a, b) | Gate::And(a, b) => {
                    for w in [a, b] {
                        let lu = &mut last_use[w.0 as usize];
                        *lu = (*lu).max(p);
                    }
                }
                Gate::Not(a) => {
                    let lu = &mut last_use[a.0 as usize];
                    *lu = (*lu).max(p);
                }
                _ => {}
            }
        }
        for w in &outputs {
            last_use[w.0 as usize] = usize::MAX;
        }
        Self {
            n_inputs,
            gates,
            outputs,
            schedule,
            last_use,
            position,
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn outputs(&self) -> &[Wire] {
        &self.outputs
    }

    /// Number of AND layers, i.e. communication rounds under sharing.
    pub fn depth(&self) -> usize {
        self.schedule.iter().filter(|(ands, _)| !ands.is_empty()).count()
    }

    pub fn and_count(&self) -> usize {
        self.schedule.iter().map(|(a, _)| a.len()).sum()
    }

    /// AND gates per layer, in evaluation order.
    pub fn layer_sizes(&self) -> Vec<usize> {
        self.schedule
            .iter()
            .map(|(a, _)| a.len())
            .filter(|&n| n > 0)
            .collect()
    }

    /// Plaintext evaluation over bit-sliced lanes: every input is a vector of
    /// `lanes` bits, one independent instance per lane.
    pub fn eval_plain(&self, inputs: &[BitVector]) -> Result<Vec<BitVector>> {
        if inputs.len() != self.n_inputs {
            return Err(Error::dim(self.n_inputs, inputs.len(), "circuit inputs"));
        }
        let lanes = inputs.first().map_or(1, |v| v.len());
        let mut vals: Vec<Option<BitVector>> = vec![None; self.gates.len()];
        for (ands, free) in &self.schedule {
            for &i in ands.iter().chain(free) {
                let get = |w: Wire| vals[w.0 as usize].as_ref().expect("scheduled after inputs");
                let v = match self.gates[i] {
                    Gate::Input(k) => {
                        if inputs[k].len() != lanes {
                            return Err(Error::dim(lanes, inputs[k].len(), "circuit lane count"));
                        }
                        inputs[k].clone()
                    }
                    Gate::Const(b) => {
                        if b {
                            BitVector::ones(lanes)
                        } else {
                            BitVector::zeros(lanes)
                        }
                    }
                    Gate::Not(a) => get(a).not(),
                    Gate::Xor(a, b) => get(a).xor(get(b))?,
                    Gate::And(a, b) => get(a).and(get(b))?,
                };
                vals[i] = Some(v);
            }
        }
        Ok(self
            .outputs
            .iter()
            .map(|w| vals[w.0 as usize].clone().expect("outputs evaluated"))
            .collect())
    }
}

/// `⌈log2(v + 1)⌉`, at least 1.
pub fn bit_width(v: usize) -> usize {
    ((usize::BITS - v.leading_zeros()) as usize).max(1)
}

/// Ripple addition of two little-endian numbers and a carry-in; one AND per
/// full or half adder.
fn ripple_add(b: &mut CircuitBuilder, x: &[Wire], y: &[Wire], mut carry: Wire) -> Vec<Wire> {
    let mut out = Vec::with_capacity(x.len().max(y.len()) + 1);
    for i in 0..x.len().max(y.len()) {
        match (x.get(i), y.get(i)) {
            (Some(&a), Some(&c)) => {
                let ac = b.xor(a, carry);
                let bc = b.xor(c, carry);
                out.push(b.xor(ac, c));
                let t = b.and(ac, bc);
                carry = b.xor(carry, t);
            }
            (Some(&a), None) | (None, Some(&a)) => {
                out.push(b.xor(a, carry));
                carry = b.and(a, carry);
            }
            (None, None) => unreachable!(),
        }
    }
    out.push(carry);
    out
}

/// Population count of `bits`, little-endian, `⌈log2(n+1)⌉` wires wide.
/// Recursively adds the counts of two parts with the left-over bit as
/// carry-in, using `n − popcount(n)` AND gates.
pub fn hamming_weight(b: &mut CircuitBuilder, bits: &[Wire]) -> Vec<Wire> {
    match bits.len() {
        0 => Vec::new(),
        1 => vec![bits[0]],
        n => {
            let (rest, last) = bits.split_at(n - 1);
            // a left half of 2^j - 1 bits keeps every adder free of wasted carries
            let left = (1usize << (usize::BITS - 1 - rest.len().leading_zeros())) - 1;
            let (l, r) = rest.split_at(left);
            let lw = hamming_weight(b, l);
            let rw = hamming_weight(b, r);
            let mut sum = ripple_add(b, &lw, &rw, last[0]);
            sum.truncate(bit_width(n));
            sum
        }
    }
}

/// `n` inputs, `width` little-endian outputs of their popcount (mod `2^width`).
pub fn hamming_weight_circuit(n: usize, width: usize) -> Circuit {
    let mut b = CircuitBuilder::new();
    let ins = b.inputs(n);
    let mut hw = hamming_weight(&mut b, &ins);
    hw.truncate(width);
    while hw.len() < width {
        hw.push(b.constant(false));
    }
    b.build(hw)
}

/// `[x > y]` for little-endian unsigned inputs: the carry out of `x + ¬y`.
pub fn greater_than(b: &mut CircuitBuilder, x: &[Wire], y: &[Wire]) -> Wire {
    assert_eq!(x.len(), y.len(), "comparator widths differ");
    let mut carry = b.constant(false);
    for (&xi, &yi) in x.iter().zip(y) {
        let ny = b.not(yi);
        let xc = b.xor(xi, carry);
        let yc = b.xor(ny, carry);
        let t = b.and(xc, yc);
        carry = b.xor(carry, t);
    }
    carry
}

/// Inputs `x` then `y`, `w` wires each; one output.
pub fn greater_than_circuit(w: usize) -> Circuit {
    let mut b = CircuitBuilder::new();
    let x = b.inputs(w);
    let y = b.inputs(w);
    let gt = greater_than(&mut b, &x, &y);
    b.build(vec![gt])
}

/// One tournament match: inputs `(lw, li, rw, ri)` with weight width `w` and
/// index width `iw`; outputs the weight then index of the winner. The right
/// entry wins only with a strictly larger weight.
pub fn tournament_circuit(w: usize, iw: usize) -> Circuit {
    let mut b = CircuitBuilder::new();
    let lw = b.inputs(w);
    let li = b.inputs(iw);
    let rw = b.inputs(w);
    let ri = b.inputs(iw);
    let sel = greater_than(&mut b, &rw, &lw);
    let mut out = Vec::with_capacity(w + iw);
    for (l, r) in lw.iter().zip(&rw).chain(li.iter().zip(&ri)) {
        out.push(b.mux(sel, *l, *r));
    }
    b.build(out)
}
