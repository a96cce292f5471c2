use std::collections::HashMap;

use bkprune::paillier::{decode_raw, decrypt, encode, keygen};
use bkprune::pipeline::{build_system, prepare_corpus_sample, trial_inputs, PipelineConfig, Reference, System, TrialMode};
use bkprune::rng::stream;
use bkprune::smpc::reconstruct;
use bkprune::synth::{build_corpus, Corpus, CorpusConfig};

fn small_setup(n: usize) -> (Corpus, System) {
    let corpus = build_corpus(&CorpusConfig {
        seed: 5,
        dim: 16,
        train_speakers: 200,
        cohort_speakers: 64,
        cohort_sessions: 4,
        trial_speakers: 16,
        probe_sessions: 2,
        nontarget_trials: 40,
        ..Default::default()
    })
    .unwrap();
    let keys = keygen(512, 11).unwrap();
    let config = PipelineConfig {
        n,
        key_bits: 512,
        audit: true,
        ..Default::default()
    };
    let system = build_system(&corpus, config, Some(keys)).unwrap();
    (corpus, system)
}

#[test]
fn protected_matches_plaintext_bk() {
    let (corpus, mut system) = small_setup(8);
    assert_eq!(system.z_cohort.len(), 256);
    let trials: Vec<_> = corpus.trials.iter().take(50).cloned().collect();
    assert_eq!(trials.len(), 50);

    let mut per_mode = HashMap::new();
    for mode in [TrialMode::PlaintextBk, TrialMode::Protected] {
        system.config.mode = mode;
        let mut rng = stream(3, "trials", 0);
        let (refs, probes) = trial_inputs(&system, &corpus, &trials, &mut rng).unwrap();
        let mut out = Vec::new();
        for t in &trials {
            out.push(system.run_trial(&refs[&t.ref_id], &probes[&t.probe_id], Some(t.label), &mut rng).unwrap());
        }
        per_mode.insert(mode, out);
    }
    let plain = &per_mode[&TrialMode::PlaintextBk];
    let prot = &per_mode[&TrialMode::Protected];
    for (a, b) in plain.iter().zip(prot) {
        assert_eq!(a.r.ids, b.r.ids);
        assert_eq!(a.p.ids, b.p.ids);
        assert_eq!(a.r.ids.len(), 8);
        assert!((a.raw - b.raw).abs() <= 1e-3, "{} vs {}", a.raw, b.raw);
        assert!((a.normalized - b.normalized).abs() <= 1e-3, "{} vs {}", a.normalized, b.normalized);
        assert!(a.r.prune.is_none());
        let stats = b.prune_stats();
        assert!(stats.rounds > 0 && stats.total_bytes() > 0);
    }
}

#[test]
fn cached_sides_match_fresh_trials() {
    let (corpus, mut system) = small_setup(8);
    system.config.mode = TrialMode::PlaintextScores;
    let trials: Vec<_> = corpus.trials.iter().take(30).cloned().collect();
    let mut rng = stream(4, "trials", 0);
    let (refs, probes) = trial_inputs(&system, &corpus, &trials, &mut rng).unwrap();
    let batch = system.run_trials(&refs, &probes, &trials, &mut rng).unwrap();
    for (t, rec) in trials.iter().zip(&batch) {
        let single = system.run_trial(&refs[&t.ref_id], &probes[&t.probe_id], Some(t.label), &mut rng).unwrap();
        assert_eq!(single.normalized, rec.normalized);
        let expect = 0.5 * ((rec.raw - rec.r.stats.mu) / rec.r.stats.sigma + (rec.raw - rec.p.stats.mu) / rec.p.stats.sigma);
        assert_eq!(rec.normalized, expect);
    }
}

#[test]
fn full_cohort_makes_selection_irrelevant() {
    let (corpus, mut system) = small_setup(256);
    let trials: Vec<_> = corpus.trials.iter().take(5).cloned().collect();
    let mut results = Vec::new();
    for mode in [TrialMode::PlaintextScores, TrialMode::PlaintextBk] {
        system.config.mode = mode;
        let mut rng = stream(5, "trials", 0);
        let (refs, probes) = trial_inputs(&system, &corpus, &trials, &mut rng).unwrap();
        results.push(system.run_trials(&refs, &probes, &trials, &mut rng).unwrap());
    }
    for (a, b) in results[0].iter().zip(&results[1]) {
        assert!((a.normalized - b.normalized).abs() < 1e-9);
        assert_eq!(a.r.stats.n_used, 256);
    }
    // n above the cohort size falls back to the whole cohort
    system.config.n = 1000;
    let mut rng = stream(6, "trials", 0);
    let (refs, probes) = trial_inputs(&system, &corpus, &trials, &mut rng).unwrap();
    let rec = system.run_trial(&refs[&trials[0].ref_id], &probes[&trials[0].probe_id], None, &mut rng).unwrap();
    assert_eq!(rec.p.ids.len(), 256);
}

#[test]
fn enrollment_is_unlinkable_and_recoverable() {
    let (corpus, system) = small_setup(8);
    let id = &corpus.trials[0].ref_id;
    let sample = prepare_corpus_sample(&system, &corpus, id).unwrap();
    let a = system.enroll(&sample, &mut stream(1, "enroll", 0)).unwrap();
    let b = system.enroll(&sample, &mut stream(2, "enroll", 0)).unwrap();
    assert_ne!(a.bk_shares[0].bits, b.bk_shares[0].bits);
    assert_ne!(a.template.enc_x, b.template.enc_x);
    for e in [&a, &b] {
        assert_eq!(&reconstruct(&e.bk_shares[0], &e.bk_shares[1]).unwrap(), sample.bk.bits());
        for (c, x) in e.template.enc_x.iter().zip(sample.embedding.iter()) {
            let raw = decrypt(&system.keys, c).unwrap();
            let expect = encode(*x, system.config.scale_bits, system.keys.public.n()).unwrap();
            assert_eq!(raw, expect.raw);
            assert!((decode_raw(&raw, system.config.scale_bits, system.keys.public.n()) - x).abs() < 1e-6);
        }
    }
    assert!(matches!(Reference::Enrolled(a.clone()).id(), s if s == id));
}
