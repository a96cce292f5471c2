//! Acceptance criteria, one test each. Every test prints a single
//! `criterion N ... PASS|FAIL` line; run with `--nocapture` to see them.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use bkprune::bench::{improvement_ratio, reference, TimingLedger};
use bkprune::binarykey::{top_n_by_similarity, BinaryKey};
use bkprune::bits::BitVector;
use bkprune::linalg::{frobenius_rel_error, random_spd, sample_covariance};
use bkprune::metrics::{cllr_min, eer, evaluate, min_dcf, MetricConfig};
use bkprune::paillier::{
    decrypt, decrypt_score, encrypt, from_primes, he_plda_score, hom_add, hom_scalar_mul, keygen, protect_reference,
    Keypair,
};
use bkprune::pipeline::{build_system, norm_stats, normalize, s_norm, trial_inputs, CohortSelect, NormSource, PipelineConfig, TrialMode};
use bkprune::plda::{fit_plda, joint_llr_oracle, plda_score, scoring_form, FitOptions, PldaModel};
use bkprune::smpc::circuit::{bit_width, greater_than_circuit, hamming_weight_circuit, Circuit};
use bkprune::smpc::{
    deal_triples, predict_prune_cost, run_secure_prune, share_bits, PartyCtx, PruneOptions, TriplePool,
};
use bkprune::synth::{build_corpus, CorpusConfig};
use bkprune::transport::{connect_pair, run_two, Exec, NetMode};
use nalgebra::{DMatrix, DVector};
use num_bigint::{BigInt, BigUint};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn report(id: u32, name: &str, outcome: Outcome) {
    match &outcome {
        Ok(detail) => println!("criterion {id:>2} {name}: PASS ({detail})"),
        Err(detail) => println!("criterion {id:>2} {name}: FAIL ({detail})"),
    }
    if let Err(e) = outcome {
        panic!("criterion {id} failed: {e}");
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gauss(d: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

fn random_model(d: usize, rng: &mut ChaCha8Rng) -> PldaModel {
    PldaModel::new(gauss(d, rng) * 0.5, random_spd(d, 0.2, rng), random_spd(d, 0.2, rng)).unwrap()
}

fn random_key(n_bits: usize, k: usize, rng: &mut ChaCha8Rng) -> BinaryKey {
    let mut bits = BitVector::zeros(n_bits);
    for i in sample(rng, n_bits, k) {
        bits.set(i, true);
    }
    BinaryKey::from_bits(bits)
}

/// Cohort keys sharing many bits with the sample, so that similarity ties occur.
fn cohort_near(s: &BinaryKey, m: usize, rng: &mut ChaCha8Rng) -> Vec<BinaryKey> {
    let ones: Vec<usize> = s.bits().iter_ones().collect();
    (0..m)
        .map(|_| {
            let keep = rng.random_range(0..=s.k() / 4);
            let mut bits = BitVector::zeros(s.len());
            for i in sample(rng, s.k(), keep) {
                bits.set(ones[i], true);
            }
            while bits.count_ones() < s.k() {
                bits.set(rng.random_range(0..s.len()), true);
            }
            BinaryKey::from_bits(bits)
        })
        .collect()
}

/// Lane `j` of input wire `i` is bit `i` of `values[j]`.
fn lanes(values: &[u64], width: usize) -> Vec<BitVector> {
    (0..width)
        .map(|i| BitVector::from_bools(&values.iter().map(|v| v >> i & 1 == 1).collect::<Vec<_>>()))
        .collect()
}

fn lane_values(wires: &[BitVector]) -> Vec<u64> {
    (0..wires[0].len())
        .map(|j| wires.iter().enumerate().map(|(i, w)| (w.get(j) as u64) << i).sum())
        .collect()
}

fn party_pair(triples: usize, rng: &mut ChaCha8Rng) -> (PartyCtx, PartyCtx) {
    let (t0, t1) = deal_triples(triples, rng);
    let (e0, e1) = connect_pair(NetMode::InProc).unwrap();
    (
        PartyCtx::new(0, e0, TriplePool::new(t0)).unwrap(),
        PartyCtx::new(1, e1, TriplePool::new(t1)).unwrap(),
    )
}

/// Evaluates `circuit` on shared inputs; returns the opened outputs and
/// each party's (rounds, bytes sent).
fn shared_eval(circuit: Circuit, inputs: &[BitVector], rng: &mut ChaCha8Rng) -> (Vec<BitVector>, [(u64, u64); 2]) {
    let (p0, p1) = party_pair(circuit.and_count() * inputs[0].len(), rng);
    let (s0, s1): (Vec<_>, Vec<_>) = inputs
        .iter()
        .map(|x| {
            let (a, b) = share_bits(x, 0, rng);
            (a.bits, b.bits)
        })
        .unzip();
    let c0 = Arc::new(circuit);
    let c1 = c0.clone();
    let (r0, r1) = run_two(
        Exec::Interleaved,
        async move {
            let mut p = p0;
            let out = p.eval(&c0, s0).await.unwrap();
            let st = p.endpoint.stats();
            (out, (st.rounds, st.bytes_sent))
        },
        async move {
            let mut p = p1;
            let out = p.eval(&c1, s1).await.unwrap();
            let st = p.endpoint.stats();
            (out, (st.rounds, st.bytes_sent))
        },
    )
    .unwrap();
    let out = r0.0.iter().zip(&r1.0).map(|(a, b)| a.xor(b).unwrap()).collect();
    (out, [r0.1, r1.1])
}

#[test]
fn criterion_01_secure_pruning_oracle() {
    let run = || -> Outcome {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let (n_bits, k, m) = (1024, 64, 256);
        let mut matched = 0;
        for i in 0..1000 {
            let n = [1, 8, 32][i % 3];
            let s = random_key(n_bits, k, &mut rng);
            let cohort = if i % 2 == 0 {
                cohort_near(&s, m, &mut rng)
            } else {
                (0..m).map(|_| random_key(n_bits, k, &mut rng)).collect()
            };
            let ids: Vec<u64> = (0..m as u64).collect();
            let got = run_secure_prune(&s, &cohort, &ids, n, &mut rng, PruneOptions::default()).map_err(|e| e.to_string())?;
            let want = top_n_by_similarity(&s, &cohort, &ids, n).map_err(|e| e.to_string())?;
            matched += (got.result.ids == want) as usize;
        }
        let secs = start.elapsed().as_secs_f64();
        ensure(matched == 1000, || format!("{matched}/1000 matched"))?;
        ensure(secs < 600.0, || format!("took {secs:.0} s"))?;
        Ok(format!("1000/1000 matched in {secs:.1} s"))
    };
    report(1, "secure pruning equals plaintext sort", run());
}

#[test]
fn criterion_02_he_plda() {
    let run = || -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let kp: Keypair = keygen(512, 102).map_err(|e| e.to_string())?;
        let s = 24;
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let model = random_model(32, &mut rng);
            let form = scoring_form(&model).map_err(|e| e.to_string())?;
            let (a, b) = (gauss(32, &mut rng), gauss(32, &mut rng));
            let t = protect_reference(&kp.public, &form, &a, s, &mut rng).map_err(|e| e.to_string())?;
            let c = he_plda_score(&kp.public, &form, &t, &b, s, &mut rng).map_err(|e| e.to_string())?;
            let got = decrypt_score(&kp, &c, s).map_err(|e| e.to_string())?;
            worst = worst.max((got - plda_score(&form, &a, &b).unwrap()).abs());
        }
        ensure(worst <= 1e-3, || format!("max error {worst:e}"))?;

        let unit = PldaModel::new(DVector::zeros(1), DMatrix::identity(1, 1), DMatrix::identity(1, 1)).unwrap();
        let form = scoring_form(&unit).unwrap();
        let zero = DVector::zeros(1);
        let t = protect_reference(&kp.public, &form, &zero, s, &mut rng).unwrap();
        let c = he_plda_score(&kp.public, &form, &t, &zero, s, &mut rng).unwrap();
        let scalar = decrypt_score(&kp, &c, s).unwrap();
        ensure((scalar - 0.1438).abs() <= 1e-3, || format!("D=1 case gave {scalar}"))?;
        Ok(format!("max |error| {worst:.2e} over 200 trials; D=1 case {scalar:.6}"))
    };
    report(2, "HE-PLDA matches plaintext scoring", run());
}

fn below(n: &BigUint, rng: &mut ChaCha8Rng) -> BigUint {
    let mut bytes = vec![0u8; (n.bits() as usize).div_ceil(8) + 8];
    rng.fill(&mut bytes[..]);
    BigUint::from_bytes_be(&bytes) % n
}

#[test]
fn criterion_03_paillier_algebra() {
    let run = || -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let kp = keygen(512, 103).map_err(|e| e.to_string())?;
        let n = kp.public.n().clone();
        for i in 0..1000 {
            let a = below(&n, &mut rng);
            let b = below(&n, &mut rng);
            let k = BigInt::from(below(&n, &mut rng)) - BigInt::from(n.clone()) / 2;
            let ca = encrypt(&kp.public, &a, &mut rng).unwrap();
            let cb = encrypt(&kp.public, &b, &mut rng).unwrap();
            let sum = decrypt(&kp, &hom_add(&kp.public, &ca, &cb).unwrap()).unwrap();
            ensure(sum == (&a + &b) % &n, || format!("addition failed at {i}"))?;
            let prod = decrypt(&kp, &hom_scalar_mul(&kp.public, &ca, &k).unwrap()).unwrap();
            let ni = BigInt::from(n.clone());
            let expect = ((BigInt::from(a.clone()) * &k) % &ni + &ni) % &ni;
            ensure(BigInt::from(prod) == expect, || format!("scalar product failed at {i}"))?;
        }
        let toy = from_primes(&BigUint::from(5u32), &BigUint::from(7u32)).map_err(|e| e.to_string())?;
        for m in 0u32..35 {
            let c = encrypt(&toy.public, &BigUint::from(m), &mut rng).unwrap();
            ensure(decrypt(&toy, &c).unwrap() == BigUint::from(m), || format!("toy roundtrip failed for {m}"))?;
        }
        Ok("1000 random identities exact; toy key roundtrips 0..35".into())
    };
    report(3, "Paillier homomorphic identities", run());
}

#[test]
fn criterion_04_circuits() {
    let run = || -> Outcome {
        for n in 1..=8usize {
            let w = bit_width(n);
            let values: Vec<u64> = (0..1u64 << n).collect();
            let out = lane_values(&hamming_weight_circuit(n, w).eval_plain(&lanes(&values, n)).unwrap());
            for (v, o) in values.iter().zip(out) {
                ensure(o == v.count_ones() as u64, || format!("HW({v:b}) = {o}"))?;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(104);
        let c = hamming_weight_circuit(1024, bit_width(1024));
        let rows: Vec<BitVector> = (0..1000).map(|_| BitVector::random(1024, &mut rng)).collect();
        let out = lane_values(&c.eval_plain(&bkprune::bits::transpose(&rows)).unwrap());
        for (r, o) in rows.iter().zip(out) {
            ensure(o == r.count_ones() as u64, || "HW on 1024 bits".into())?;
        }
        for w in 1..=4usize {
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for x in 0..1u64 << w {
                for y in 0..1u64 << w {
                    xs.push(x);
                    ys.push(y);
                }
            }
            let mut inputs = lanes(&xs, w);
            inputs.extend(lanes(&ys, w));
            let out = lane_values(&greater_than_circuit(w).eval_plain(&inputs).unwrap());
            for ((x, y), o) in xs.iter().zip(&ys).zip(out) {
                ensure(o == (x > y) as u64, || format!("{x} > {y} gave {o}"))?;
            }
        }
        // secure AND: four combinations per lane, 100 fresh sharings each
        let x = BitVector::from_bools(&[false, false, true, true].repeat(100));
        let y = BitVector::from_bools(&[false, true, false, true].repeat(100));
        let (z, _) = {
            let mut b = bkprune::smpc::CircuitBuilder::new();
            let (a, bb) = (b.input(), b.input());
            let o = b.and(a, bb);
            shared_eval(b.build(vec![o]), &[x.clone(), y.clone()], &mut rng)
        };
        ensure(z[0] == x.and(&y).unwrap(), || "secure AND truth table".into())?;
        Ok("HW exhaustive n<=8 and 1000x1024 bits; comparator w<=4; AND 4x100 sharings".into())
    };
    report(4, "circuit correctness", run());
}

#[test]
fn criterion_05_communication() {
    let run = || -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(105);
        let mut b = bkprune::smpc::CircuitBuilder::new();
        let (x, y) = (b.input(), b.input());
        let o = b.and(x, y);
        let and = b.build(vec![o]);
        let inputs = [BitVector::random(40960, &mut rng), BitVector::random(40960, &mut rng)];
        let (_, stats) = shared_eval(and, &inputs, &mut rng);
        // d and e, one bit each per lane, plus the 5-byte frame header
        let expect = 2 * 40960 / 8 + 5;
        for (rounds, bytes) in stats {
            ensure(rounds == 1 && bytes == expect, || format!("AND: {rounds} rounds, {bytes} bytes"))?;
        }
        for n in [1024, 40960] {
            let c = hamming_weight_circuit(n, bit_width(n));
            let depth = c.depth() as u64;
            let inputs: Vec<BitVector> = (0..n).map(|_| BitVector::random(1, &mut rng)).collect();
            let (_, stats) = shared_eval(c, &inputs, &mut rng);
            ensure(stats[0].0 == depth, || format!("HW({n}): {} rounds vs depth {depth}", stats[0].0))?;
        }
        let mut checked = 0;
        for (m, n) in [(16, 1), (33, 5), (64, 16), (256, 8)] {
            let s = random_key(1024, 64, &mut rng);
            let cohort: Vec<_> = (0..m).map(|_| random_key(1024, 64, &mut rng)).collect();
            let ids: Vec<u64> = (0..m as u64).collect();
            let got = run_secure_prune(&s, &cohort, &ids, n, &mut rng, PruneOptions::default()).unwrap();
            let cost = predict_prune_cost(1024, m, 64, n).unwrap();
            ensure(got.result.rounds == cost.rounds && got.result.bytes_sent == [cost.wire_bytes; 2], || {
                format!("prune m={m} n={n}: measured {:?}, predicted {cost:?}", got.result)
            })?;
            checked += 1;
        }
        Ok(format!("AND over 40960 bits sends {expect} bytes in 1 round; HW rounds = depth; {checked} pruning runs match"))
    };
    report(5, "communication accounting", run());
}

#[test]
fn criterion_06_normalisation() {
    let run = || -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(106);
        for _ in 0..200 {
            let len = rng.random_range(2..300);
            let scores: Vec<f64> = (0..len).map(|_| rng.random_range(-40.0..40.0)).collect();
            let st = norm_stats(&scores, CohortSelect::All, NormSource::Z).unwrap();
            let z: Vec<f64> = scores.iter().map(|&s| normalize(s, &st).unwrap()).collect();
            let mean = z.iter().sum::<f64>() / len as f64;
            let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64).sqrt();
            ensure(mean.abs() <= 1e-12 && (sd - 1.0).abs() <= 1e-12, || format!("mean {mean:e}, sd {sd}"))?;
            let s = rng.random_range(-40.0..40.0);
            ensure(s_norm(s, &st, &st).unwrap() == normalize(s, &st).unwrap(), || "s-norm collapse".into())?;
        }
        let degenerate = norm_stats(&[3.0; 10], CohortSelect::All, NormSource::T);
        ensure(matches!(degenerate, Err(bkprune::Error::DegenerateStats { .. })), || format!("{degenerate:?}"))?;
        Ok("200 random cohorts; sigma = 0 rejected".into())
    };
    report(6, "score normalisation", run());
}

#[test]
fn criterion_07_plda() {
    let run = || -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let mut worst: f64 = 0.0;
        for i in 0..1000 {
            let d = [1, 2, 4, 8, 16][i % 5];
            let model = random_model(d, &mut rng);
            let form = scoring_form(&model).unwrap();
            let (a, b) = (gauss(d, &mut rng), gauss(d, &mut rng));
            let oracle = joint_llr_oracle(&model, &a, &b).unwrap();
            let got = plda_score(&form, &a, &b).unwrap();
            worst = worst.max((got - oracle).abs() / oracle.abs().max(1.0));
        }
        ensure(worst <= 1e-9, || format!("relative error {worst:e}"))?;

        // EM on 2000 speakers x 8 sessions from the synthetic two-covariance model
        let mut errors = Vec::new();
        for d in [8, 16, 32] {
            let cfg = CorpusConfig { dim: d, ..Default::default() };
            let (b, w) = (cfg.between_cov(), cfg.within_cov());
            let lb = b.clone().cholesky().unwrap().l();
            let mut xs = Vec::new();
            let mut labels = Vec::new();
            let mut latents = Vec::new();
            for spk in 0..2000 {
                let y = &lb * gauss(d, &mut rng);
                for _ in 0..8 {
                    xs.push(&y + gauss(d, &mut rng));
                    labels.push(spk);
                }
                latents.push(y);
            }
            let fit = fit_plda(&xs, &labels, &FitOptions::default()).unwrap();
            let eb = frobenius_rel_error(fit.model.between(), &b);
            let ew = frobenius_rel_error(fit.model.within(), &w);
            // error of the covariance of the true latents: a floor no estimator beats on average
            let floor = frobenius_rel_error(&sample_covariance(&latents), &b);
            errors.push((d, eb, ew, floor));
        }
        let summary: Vec<String> = errors
            .iter()
            .map(|(d, eb, ew, fl)| format!("D={d}: B {:.1}% (latent floor {:.1}%), W {:.1}%", eb * 100.0, fl * 100.0, ew * 100.0))
            .collect();
        let (_, eb, ew, _) = errors[0];
        ensure(eb <= 0.10 && ew <= 0.10, || summary.join("; "))?;
        Ok(format!("form max rel error {worst:.1e}; {}", summary.join("; ")))
    };
    report(7, "PLDA scoring form and EM", run());
}

#[test]
fn criterion_08_table_ratios() {
    let run = || -> Outcome {
        let mut worst: f64 = 0.0;
        for side in [&reference::AZ, &reference::AT] {
            for (i, &n) in reference::N_GRID.iter().enumerate() {
                let ledger = TimingLedger {
                    t_bk: side.t_bk,
                    t_gmw: side.t_gmw[i],
                    t_he_per_cmp: reference::T_HE_PER_CMP,
                    cohort_size: side.cohort_size,
                    n,
                };
                let r = improvement_ratio(side.cohort_size, &ledger).unwrap();
                worst = worst.max((r - side.ratios[i]).abs());
            }
        }
        ensure(worst <= 0.1, || format!("max deviation {worst}"))?;
        Ok(format!("14 ratios, max deviation {worst:.2e}"))
    };
    report(8, "improvement ratios", run());
}

#[test]
fn criterion_09_end_to_end() {
    let run = || -> Outcome {
        let corpus = build_corpus(&CorpusConfig::default()).map_err(|e| e.to_string())?;
        let trials = corpus.trials.clone();
        ensure(trials.len() >= 2000, || format!("{} trials", trials.len()))?;
        let keys = keygen(512, 109).unwrap();
        let config = PipelineConfig {
            n: 50,
            key_bits: 512,
            ..Default::default()
        };
        let mut system = build_system(&corpus, config, Some(keys)).map_err(|e| e.to_string())?;
        let labels: Vec<bool> = trials.iter().map(|t| t.label.is_target()).collect();
        let mut records = HashMap::new();
        for mode in [TrialMode::PlaintextBk, TrialMode::Protected] {
            system.config.mode = mode;
            let mut rng = bkprune::rng::stream(9, "acceptance", 0);
            let (refs, probes) = trial_inputs(&system, &corpus, &trials, &mut rng).unwrap();
            records.insert(mode, system.run_trials(&refs, &probes, &trials, &mut rng).map_err(|e| e.to_string())?);
        }
        let (plain, prot) = (&records[&TrialMode::PlaintextBk], &records[&TrialMode::Protected]);
        let mut worst: f64 = 0.0;
        for (a, b) in plain.iter().zip(prot) {
            ensure(a.r.ids == b.r.ids && a.p.ids == b.p.ids, || format!("ids differ for {}/{}", a.ref_id, a.probe_id))?;
            worst = worst.max((a.normalized - b.normalized).abs());
        }
        ensure(worst <= 1e-3, || format!("max |dS'| {worst:e}"))?;
        let raw: Vec<f64> = prot.iter().map(|r| r.raw).collect();
        let norm: Vec<f64> = prot.iter().map(|r| r.normalized).collect();
        let base = eer(&raw, &labels).unwrap();
        let protected = eer(&norm, &labels).unwrap();
        ensure(protected <= base, || format!("protected EER {protected:.4} > baseline {base:.4}"))?;
        Ok(format!(
            "{} trials; ids identical, max |dS'| {worst:.1e}; EER baseline {:.2}% -> protected {:.2}%",
            trials.len(),
            base * 100.0,
            protected * 100.0
        ))
    };
    report(9, "end-to-end protected as-norm", run());
}

// Independent oracles for criterion 10.

fn rates(scores: &[f64], labels: &[bool], t: f64) -> (f64, f64) {
    let nt = labels.iter().filter(|&&l| l).count() as f64;
    let nn = labels.len() as f64 - nt;
    let miss = scores.iter().zip(labels).filter(|(s, l)| **l && **s <= t).count() as f64 / nt;
    let fa = scores.iter().zip(labels).filter(|(s, l)| !**l && **s > t).count() as f64 / nn;
    (miss, fa)
}

fn thresholds(scores: &[f64]) -> Vec<f64> {
    let mut t = vec![f64::NEG_INFINITY];
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    t.extend(s);
    t
}

fn oracle_eer(scores: &[f64], labels: &[bool]) -> f64 {
    let pts: Vec<(f64, f64)> = thresholds(scores).into_iter().map(|t| rates(scores, labels, t)).collect();
    for w in pts.windows(2) {
        let ((m0, f0), (m1, f1)) = (w[0], w[1]);
        let (g0, g1) = (f0 - m0, f1 - m1);
        if g0 >= 0.0 && g1 <= 0.0 {
            let a = if g0 == g1 { 0.0 } else { g0 / (g0 - g1) };
            return m0 + a * (m1 - m0);
        }
    }
    unreachable!()
}

fn oracle_min_dcf(scores: &[f64], labels: &[bool], p: f64) -> f64 {
    let mut t = thresholds(scores);
    t.push(f64::INFINITY);
    t.into_iter()
        .map(|t| {
            let (m, f) = rates(scores, labels, t);
            (p * m + (1.0 - p) * f) / p.min(1.0 - p)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Cllr after the best monotone calibration, found by pooling adjacent
/// violators directly over tie groups.
fn oracle_cllr_min(scores: &[f64], labels: &[bool]) -> f64 {
    let groups = thresholds(scores)[1..].to_vec();
    let mut blocks: Vec<(f64, f64)> = groups
        .iter()
        .map(|&g| {
            let members: Vec<bool> = scores.iter().zip(labels).filter(|(s, _)| **s == g).map(|(_, l)| *l).collect();
            (members.iter().filter(|&&l| l).count() as f64, members.len() as f64)
        })
        .collect();
    let mut owner: Vec<usize> = (0..blocks.len()).collect();
    loop {
        let mut merged = false;
        let live: Vec<usize> = (0..blocks.len()).filter(|&i| owner[i] == i).collect();
        for w in live.windows(2) {
            let (i, j) = (w[0], w[1]);
            if blocks[i].0 / blocks[i].1 >= blocks[j].0 / blocks[j].1 {
                blocks[i] = (blocks[i].0 + blocks[j].0, blocks[i].1 + blocks[j].1);
                for o in owner.iter_mut().filter(|o| **o == j) {
                    *o = i;
                }
                merged = true;
                break;
            }
        }
        if !merged {
            break;
        }
    }
    let nt = labels.iter().filter(|&&l| l).count() as f64;
    let nn = labels.len() as f64 - nt;
    let (mut tar, mut non) = (0.0, 0.0);
    for (&s, &l) in scores.iter().zip(labels) {
        let g = groups.iter().position(|&g| g == s).unwrap();
        let (t, c) = blocks[owner[g]];
        let post = t / c;
        let llr = ((post / (1.0 - post)) / (nt / nn)).ln().clamp(-35.0, 35.0);
        if l {
            tar += (1.0 + (-llr).exp()).log2();
        } else {
            non += (1.0 + llr.exp()).log2();
        }
    }
    0.5 * (tar / nt + non / nn)
}

#[test]
fn criterion_10_metrics() {
    let run = || -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(110);
        let cfg = MetricConfig::default();
        for i in 0..100 {
            let n = rng.random_range(2..=50);
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            let scores: Vec<f64> = labels
                .iter()
                .map(|&l| rng.random_range(0..10) as f64 * 0.5 + if l { 1.0 } else { 0.0 })
                .collect();
            let e = eer(&scores, &labels).unwrap();
            let d = min_dcf(&scores, &labels, &cfg).unwrap();
            let c = cllr_min(&scores, &labels).unwrap();
            let (oe, od, oc) = (
                oracle_eer(&scores, &labels),
                oracle_min_dcf(&scores, &labels, cfg.effective_prior),
                oracle_cllr_min(&scores, &labels),
            );
            ensure((e - oe).abs() < 1e-12 && (d - od).abs() < 1e-9 && (c - oc).abs() < 1e-9, || {
                format!("instance {i}: ({e}, {d}, {c}) vs ({oe}, {od}, {oc})")
            })?;
        }

        let corpus = build_corpus(&CorpusConfig::default()).unwrap();
        let config = PipelineConfig {
            key_bits: 256,
            ..Default::default()
        };
        let mut system = build_system(&corpus, config, None).unwrap();
        let labels: Vec<bool> = corpus.trials.iter().map(|t| t.label.is_target()).collect();
        let mut checked = 0;
        for mode in [TrialMode::PlaintextScores, TrialMode::PlaintextBk] {
            system.config.mode = mode;
            let mut rng = bkprune::rng::stream(10, "acceptance", 0);
            let (refs, probes) = trial_inputs(&system, &corpus, &corpus.trials, &mut rng).unwrap();
            let recs = system.run_trials(&refs, &probes, &corpus.trials, &mut rng).unwrap();
            for scores in [recs.iter().map(|r| r.raw).collect::<Vec<_>>(), recs.iter().map(|r| r.normalized).collect()] {
                let m = evaluate(&scores, &labels, &cfg).unwrap();
                for v in [m.eer, m.min_dcf, m.cllr_min] {
                    ensure((0.0..=1.0).contains(&v), || format!("{m:?} out of bounds"))?;
                }
                checked += 1;
            }
        }
        Ok(format!("100 random instances equal the oracles; bounds hold on {checked} benchmark score sets"))
    };
    report(10, "metric oracles and bounds", run());
}
