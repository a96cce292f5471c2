//! Secure cohort pruning: AND with the sample key, Hamming weight per cohort
//! entry, then `n` tournament maxima that open only the winning positions.

use std::sync::Arc;

use rand::RngCore;

use crate::binarykey::BinaryKey;
use crate::bits::{transpose, BitVector};
use crate::error::{Error, Result};
use crate::transport::{
    connect_pair, run_two, ChannelStats, Exec, MsgType, NetMode, Stopwatch, TranscriptEntry, FRAME_HEADER_BYTES,
};

use super::circuit::{bit_width, hamming_weight_circuit, tournament_circuit, Circuit};
use super::dealer::{deal_triples, TriplePool};
use super::gmw::PartyCtx;
use super::share::{share_bits, BooleanShare};

/// Outcome of one pruning run as seen by one party (or both, after merging).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneResult {
    /// Cohort identifiers by descending similarity, ties to the lowest id.
    pub ids: Vec<u64>,
    pub rounds: u64,
    /// Wire bytes sent by party 0 and party 1.
    pub bytes_sent: [u64; 2],
    /// Bit-level AND gates evaluated, equal to triples consumed.
    pub and_gates: u64,
}

/// Index width for `count` tournament entries.
fn index_width(count: usize) -> usize {
    bit_width(count.saturating_sub(1))
}

fn gather(v: &BitVector, idx: impl Iterator<Item = usize>) -> BitVector {
    let bools: Vec<bool> = idx.map(|i| v.get(i)).collect();
    BitVector::from_bools(&bools)
}

fn check_n(n: usize, count: usize) -> Result<()> {
    if n == 0 || n > count {
        return Err(Error::Config(format!("n = {n} must lie in 1..={count}")));
    }
    Ok(())
}

/// Selects the `n` largest shared weights. `weights` holds `w` little-endian
/// bit columns with one lane per entry; `ids[i]` names entry `i`. Ties go to
/// the lower position. Each winner's position is opened and the entry leaves
/// the tournament; nothing else is revealed.
pub async fn top_n_select(ctx: &mut PartyCtx, weights: &[BitVector], ids: &[u64], n: usize) -> Result<Vec<u64>> {
    let m = ids.len();
    check_n(n, m)?;
    if weights.is_empty() {
        return Err(Error::Config("weights need at least one bit".into()));
    }
    if let Some(bad) = weights.iter().find(|c| c.len() != m) {
        return Err(Error::dim(m, bad.len(), "weight lanes"));
    }
    let w = weights.len();
    let iw = index_width(m);
    let circuit = tournament_circuit(w, iw);
    let mut alive: Vec<usize> = (0..m).collect();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut cols: Vec<BitVector> = weights.iter().map(|c| gather(c, alive.iter().copied())).collect();
        for j in 0..iw {
            cols.push(if ctx.id == 0 {
                BitVector::from_bools(&alive.iter().map(|p| p >> j & 1 == 1).collect::<Vec<_>>())
            } else {
                BitVector::zeros(alive.len())
            });
        }
        while cols[0].len() > 1 {
            let count = cols[0].len();
            let pairs = count / 2;
            let mut inputs = Vec::with_capacity(2 * (w + iw));
            for parity in [0, 1] {
                for c in &cols {
                    inputs.push(gather(c, (0..pairs).map(|k| 2 * k + parity)));
                }
            }
            let mut next = ctx.eval(&circuit, inputs).await?;
            if count % 2 == 1 {
                for (nc, c) in next.iter_mut().zip(&cols) {
                    nc.push(c.get(count - 1));
                }
            }
            cols = next;
        }
        let mine = BitVector::concat(cols[w..].iter());
        let theirs = ctx.endpoint.exchange(MsgType::OpenIndex, &mine.to_bytes()).await?;
        let theirs = BitVector::from_bytes(&theirs, iw).map_err(|_| Error::Protocol("malformed index opening".into()))?;
        let pos = mine.xor(&theirs)?.to_u64() as usize;
        let slot = alive
            .iter()
            .position(|&p| p == pos)
            .ok_or_else(|| Error::Protocol(format!("opened position {pos} is not in the tournament")))?;
        alive.remove(slot);
        out.push(ids[pos]);
    }
    Ok(out)
}

/// Positions of `ids` in ascending id order.
fn id_order(ids: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| ids[i]);
    order
}

/// Top-`n` cohort ids by `popcount(sample ∧ entry)` on shares. The sample
/// must have at most `k` set bits so that weights fit in `⌈log2(k+1)⌉` bits.
pub async fn secure_prune(
    ctx: &mut PartyCtx,
    sample: &BooleanShare,
    cohort: &[BooleanShare],
    ids: &[u64],
    k: usize,
    n: usize,
) -> Result<PruneResult> {
    let m = cohort.len();
    if ids.len() != m {
        return Err(Error::dim(m, ids.len(), "cohort ids"));
    }
    check_n(n, m)?;
    let n_bits = sample.len();
    if let Some(bad) = cohort.iter().find(|s| s.len() != n_bits) {
        return Err(Error::dim(n_bits, bad.len(), "cohort key length"));
    }
    if std::iter::once(sample).chain(cohort).any(|s| s.party != ctx.id) {
        return Err(Error::Protocol("share belongs to the other party".into()));
    }
    let before = ctx.endpoint.stats();
    let used_before = ctx.triples.used();

    let order = id_order(ids);
    let sorted_ids: Vec<u64> = order.iter().map(|&i| ids[i]).collect();
    let rows: Vec<BitVector> = order.iter().map(|&i| cohort[i].bits.clone()).collect();
    let columns = transpose(&rows);
    drop(rows);
    let spread: Vec<BitVector> = (0..n_bits)
        .map(|i| if sample.bits.get(i) { BitVector::ones(m) } else { BitVector::zeros(m) })
        .collect();
    let x: Vec<&BitVector> = spread.iter().collect();
    let y: Vec<&BitVector> = columns.iter().collect();
    let masked = ctx.and_batch(&x, &y).await?;
    drop((spread, columns));

    let hw = hamming_weight_circuit(n_bits, bit_width(k));
    let weights = ctx.eval(&hw, masked).await?;
    let ids = top_n_select(ctx, &weights, &sorted_ids, n).await?;

    let delta = ctx.endpoint.stats().since(&before);
    let mut bytes_sent = [0; 2];
    bytes_sent[ctx.id as usize] = delta.bytes_sent;
    Ok(PruneResult {
        ids,
        rounds: delta.rounds,
        bytes_sent,
        and_gates: (ctx.triples.used() - used_before) as u64,
    })
}

/// Per-party communication and gate counts of [`secure_prune`], derived from
/// the circuits it evaluates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PruneCost {
    pub rounds: u64,
    pub and_gates: u64,
    pub frames: u64,
    pub payload_bytes: u64,
    /// Payload plus frame headers.
    pub wire_bytes: u64,
}

impl PruneCost {
    fn layer(&mut self, gates: u64, payload: u64) {
        self.rounds += 1;
        self.frames += 1;
        self.and_gates += gates;
        self.payload_bytes += payload;
    }
}

fn and_layers(cost: &mut PruneCost, circuit: &Circuit, lanes: u64) {
    for a in circuit.layer_sizes() {
        let gates = a as u64 * lanes;
        cost.layer(gates, (2 * gates).div_ceil(8));
    }
}

/// Cost of pruning an `m`-entry cohort of `n_bits`-bit keys with sparsity `k`
/// down to `n` entries.
pub fn predict_prune_cost(n_bits: usize, m: usize, k: usize, n: usize) -> Result<PruneCost> {
    check_n(n, m)?;
    let mut cost = PruneCost::default();
    let and = (n_bits * m) as u64;
    cost.layer(and, (2 * and).div_ceil(8));
    and_layers(&mut cost, &hamming_weight_circuit(n_bits, bit_width(k)), m as u64);
    let iw = index_width(m);
    let tournament = tournament_circuit(bit_width(k), iw);
    for t in 0..n {
        let mut count = m - t;
        while count > 1 {
            and_layers(&mut cost, &tournament, (count / 2) as u64);
            count = count / 2 + count % 2;
        }
        cost.layer(0, iw.div_ceil(8) as u64);
    }
    cost.wire_bytes = cost.payload_bytes + FRAME_HEADER_BYTES as u64 * cost.frames;
    Ok(cost)
}

#[derive(Clone, Copy, Debug)]
pub struct PruneOptions {
    pub exec: Exec,
    pub mode: NetMode,
    pub record_transcript: bool,
}

impl Default for PruneOptions {
    fn default() -> Self {
        Self {
            exec: Exec::Interleaved,
            mode: NetMode::InProc,
            record_transcript: false,
        }
    }
}

#[derive(Debug)]
pub struct PruneSession {
    pub result: PruneResult,
    pub stats: ChannelStats,
    /// Frames seen by party 0 and party 1; empty unless recorded.
    pub transcripts: [Vec<TranscriptEntry>; 2],
}

/// Shares `sample` and `cohort`, deals exactly the triples the run needs and
/// runs both servers against each other.
pub fn run_secure_prune<R: RngCore + ?Sized>(
    sample: &BinaryKey,
    cohort: &[BinaryKey],
    ids: &[u64],
    n: usize,
    rng: &mut R,
    opts: PruneOptions,
) -> Result<PruneSession> {
    let (s0, s1) = share_bits(sample.bits(), 0, rng);
    let mut c0 = Vec::with_capacity(cohort.len());
    let mut c1 = Vec::with_capacity(cohort.len());
    for (i, key) in cohort.iter().enumerate() {
        let (a, b) = share_bits(key.bits(), i as u64 + 1, rng);
        c0.push(a);
        c1.push(b);
    }
    run_prune_on_shares([s0, s1], [c0, c1], ids, sample.k(), n, rng, opts)
}

/// Runs [`secure_prune`] between two fresh servers holding the given shares.
/// `rng` only feeds the dealer.
pub fn run_prune_on_shares<R: RngCore + ?Sized>(
    sample: [BooleanShare; 2],
    cohort: [Vec<BooleanShare>; 2],
    ids: &[u64],
    k: usize,
    n: usize,
    rng: &mut R,
    opts: PruneOptions,
) -> Result<PruneSession> {
    let cost = predict_prune_cost(sample[0].len(), cohort[0].len(), k, n)?;
    let (t0, t1) = deal_triples(cost.and_gates as usize, rng);
    let (mut e0, mut e1) = connect_pair(opts.mode)?;
    if opts.record_transcript {
        e0.record_transcript();
        e1.record_transcript();
    }
    let mut p0 = PartyCtx::new(0, e0, TriplePool::new(t0))?;
    let mut p1 = PartyCtx::new(1, e1, TriplePool::new(t1))?;
    let ids0: Arc<[u64]> = ids.into();
    let ids1 = ids0.clone();
    let [s0, s1] = sample;
    let [c0, c1] = cohort;
    let clock = Stopwatch::start();
    let (r0, r1) = run_two(
        opts.exec,
        async move {
            let r = secure_prune(&mut p0, &s0, &c0, &ids0, k, n).await;
            (r, p0)
        },
        async move {
            let r = secure_prune(&mut p1, &s1, &c1, &ids1, k, n).await;
            (r, p1)
        },
    )?;
    let wall = clock.elapsed();
    let (res0, mut p0) = r0;
    let (res1, mut p1) = r1;
    let (res0, res1) = (res0?, res1?);
    if res0.ids != res1.ids {
        return Err(Error::Protocol("servers disagree on the pruned ids".into()));
    }
    let stats = ChannelStats::from_endpoints(&p0.endpoint.stats(), &p1.endpoint.stats(), wall);
    Ok(PruneSession {
        result: PruneResult {
            ids: res0.ids,
            rounds: stats.rounds,
            bytes_sent: [res0.bytes_sent[0], res1.bytes_sent[1]],
            and_gates: res0.and_gates,
        },
        stats,
        transcripts: [p0.endpoint.take_transcript(), p1.endpoint.take_transcript()],
    })
}

/// Checks one server's transcript: only AND openings and exactly `n` index
/// openings, and no payload containing the packed bytes of any `secrets`.
pub fn audit_transcript(transcript: &[TranscriptEntry], n: usize, secrets: &[BitVector]) -> Result<()> {
    let mut opened = 0;
    for entry in transcript {
        match entry.msg {
            MsgType::AndOpen => {}
            MsgType::OpenIndex => opened += 1,
            other => return Err(Error::Protocol(format!("unexpected {other:?} frame online"))),
        }
    }
    // each opening is sent once and received once
    if opened != 2 * n {
        return Err(Error::Protocol(format!("{} index openings for n = {n}", opened / 2)));
    }
    for secret in secrets {
        let needle = secret.to_bytes();
        if needle.len() < 8 {
            continue;
        }
        if transcript
            .iter()
            .any(|e| e.payload.windows(needle.len()).any(|w| w == needle.as_slice()))
        {
            return Err(Error::Protocol("plaintext key found in transcript".into()));
        }
    }
    Ok(())
}
