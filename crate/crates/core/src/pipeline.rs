//! Enrollment, cohort pruning, scoring and adaptive symmetric normalisation.
//!
//! Three trial modes share one code path:
//! - `plaintext_scores`: conventional as-norm, top-n cohort entries by PLDA score;
//! - `plaintext_bk`: top-n by binary-key similarity, computed in the clear;
//! - `protected`: the same pruning under secret sharing, scores under Paillier.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::binarykey::{build_kbm, top_n_by_similarity, BinaryKey, BkExtractor, DEFAULT_RELEVANCE};
use crate::bits::BitVector;
use crate::error::{Error, Result};
use crate::paillier::{
    decrypt_score, he_plda_score, keygen, protect_reference, Keypair, ProtectedTemplate, DEFAULT_KEY_BITS,
    DEFAULT_SCALE_BITS,
};
use crate::plda::{plda_score, scoring_form, FitOptions, ScoringForm, TrainedPlda};
use crate::smpc::{audit_transcript, run_prune_on_shares, share_bits, BooleanShare, PruneOptions};
use crate::synth::{Corpus, Label, Role, Trial};
use crate::transport::{ChannelStats, Exec, NetConfig, NetMode, Stopwatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialMode {
    PlaintextScores,
    PlaintextBk,
    Protected,
}

impl TrialMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialMode::PlaintextScores => "plaintext_scores",
            TrialMode::PlaintextBk => "plaintext_bk",
            TrialMode::Protected => "protected",
        }
    }
}

impl fmt::Display for TrialMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrialMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plaintext_scores" => Ok(TrialMode::PlaintextScores),
            "plaintext_bk" => Ok(TrialMode::PlaintextBk),
            "protected" => Ok(TrialMode::Protected),
            other => Err(Error::Config(format!("unknown trial mode {other:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Normalisation

/// Which comparisons produced a score set: reference against cohort (z) or
/// cohort against probe (t).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormSource {
    Z,
    T,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CohortSelect {
    All,
    /// Keep the `n` highest scores.
    TopN(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mu: f64,
    pub sigma: f64,
    pub n_used: usize,
    pub source: NormSource,
}

/// Mean and population standard deviation of the selected scores.
pub fn norm_stats(scores: &[f64], select: CohortSelect, source: NormSource) -> Result<NormStats> {
    let mut kept = scores.to_vec();
    if let CohortSelect::TopN(n) = select {
        if n < 2 {
            return Err(Error::Config(format!("adaptive cohort size {n} is below 2")));
        }
        kept.sort_by(|a, b| b.total_cmp(a));
        kept.truncate(n);
    }
    if kept.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "{} cohort scores, need at least 2",
            kept.len()
        )));
    }
    let len = kept.len() as f64;
    let mu = kept.iter().sum::<f64>() / len;
    let sigma = (kept.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / len).sqrt();
    if !(sigma > 0.0) {
        return Err(Error::DegenerateStats {
            id: format!("{source:?}-norm cohort"),
        });
    }
    Ok(NormStats {
        mu,
        sigma,
        n_used: kept.len(),
        source,
    })
}

pub fn normalize(score: f64, stats: &NormStats) -> Result<f64> {
    if !(stats.sigma > 0.0) {
        return Err(Error::DegenerateStats {
            id: format!("{:?}-norm cohort", stats.source),
        });
    }
    Ok((score - stats.mu) / stats.sigma)
}

/// Symmetric normalisation: the mean of the z- and t-normalised scores.
pub fn s_norm(score: f64, r: &NormStats, p: &NormStats) -> Result<f64> {
    Ok(0.5 * (normalize(score, r)? + normalize(score, p)?))
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Cohort entries kept per side.
    pub n: usize,
    pub mode: TrialMode,
    pub key_bits: usize,
    pub scale_bits: u32,
    pub bandwidth_bps: f64,
    pub rtt_ms: f64,
    pub net_mode: NetMode,
    /// One thread per server instead of interleaving both on one.
    pub threaded: bool,
    pub seed: u64,
    /// Components activated per frame (M).
    pub per_frame: usize,
    /// Bits set per key (K).
    pub k: usize,
    /// Audit every protected-mode transcript.
    pub audit: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n: 50,
            mode: TrialMode::Protected,
            key_bits: DEFAULT_KEY_BITS,
            scale_bits: DEFAULT_SCALE_BITS,
            bandwidth_bps: 1e9,
            rtt_ms: 1.0,
            net_mode: NetMode::InProc,
            threaded: false,
            seed: 1,
            per_frame: 1,
            k: 64,
            audit: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.net()?;
        if self.n < 2 {
            return Err(Error::Config("n must be at least 2".into()));
        }
        if self.per_frame == 0 || self.k == 0 {
            return Err(Error::Config("per_frame and k must be positive".into()));
        }
        if self.scale_bits == 0 {
            return Err(Error::Config("scale_bits must be positive".into()));
        }
        Ok(())
    }

    pub fn net(&self) -> Result<NetConfig> {
        NetConfig::new(self.bandwidth_bps, self.rtt_ms * 1e-3)
    }

    pub fn exec(&self) -> Exec {
        if self.threaded {
            Exec::Threaded
        } else {
            Exec::Interleaved
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("plain key-value config serialises")
    }
}

// ---------------------------------------------------------------------------
// Samples, enrollment and cohort stores

/// Client-side view of a voice sample: preprocessed embedding and binary key.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub id: String,
    pub embedding: DVector<f64>,
    pub bk: BinaryKey,
}

/// A sample as held by the servers: an encrypted template and the two
/// shares of its binary key.
#[derive(Clone, Debug)]
pub struct Enrollment {
    pub sample_id: String,
    pub template: ProtectedTemplate,
    pub bk_shares: [BooleanShare; 2],
}

#[derive(Clone, Debug)]
pub enum Reference {
    Plain(PreparedSample),
    Enrolled(Enrollment),
}

impl Reference {
    pub fn id(&self) -> &str {
        match self {
            Reference::Plain(s) => &s.id,
            Reference::Enrolled(e) => &e.sample_id,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CohortEntry {
    pub id: u64,
    pub name: String,
    pub embedding: DVector<f64>,
    pub bk: BinaryKey,
    pub shares: [BooleanShare; 2],
}

#[derive(Clone, Debug)]
pub struct CohortStore {
    entries: Vec<CohortEntry>,
}

impl CohortStore {
    /// Entry `i` receives id `i`; keys are secret-shared on the way in.
    pub fn build<R: RngCore + ?Sized>(samples: Vec<PreparedSample>, rng: &mut R) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        let mut entries = Vec::with_capacity(samples.len());
        for (i, s) in samples.into_iter().enumerate() {
            if !seen.insert(s.id.clone()) {
                return Err(Error::Format(format!("duplicate cohort id {}", s.id)));
            }
            if let Some(first) = entries.first().map(|e: &CohortEntry| e.bk.len()) {
                if s.bk.len() != first {
                    return Err(Error::dim(first, s.bk.len(), "cohort key length"));
                }
            }
            let (a, b) = share_bits(s.bk.bits(), i as u64, rng);
            entries.push(CohortEntry {
                id: i as u64,
                name: s.id,
                embedding: s.embedding,
                bk: s.bk,
                shares: [a, b],
            });
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CohortEntry] {
        &self.entries
    }

    pub fn entry(&self, id: u64) -> Result<&CohortEntry> {
        self.entries
            .get(id as usize)
            .ok_or_else(|| Error::Format(format!("unknown cohort id {id}")))
    }

    fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.id).collect()
    }
}

// ---------------------------------------------------------------------------
// Trials

/// Cohort comparisons for one sample on one side.
#[derive(Clone, Debug)]
pub struct SideResult {
    /// Cohort ids used, in selection order.
    pub ids: Vec<u64>,
    pub scores: Vec<f64>,
    pub stats: NormStats,
    /// Secure pruning traffic, protected mode only.
    pub prune: Option<ChannelStats>,
    pub prune_time: Duration,
    pub scoring_time: Duration,
}

#[derive(Clone, Debug)]
pub struct TrialRecord {
    pub ref_id: String,
    pub probe_id: String,
    pub label: Option<Label>,
    pub raw: f64,
    pub normalized: f64,
    pub r: SideResult,
    pub p: SideResult,
    pub raw_time: Duration,
}

impl TrialRecord {
    /// Pruning traffic of both sides.
    pub fn prune_stats(&self) -> ChannelStats {
        let mut s = ChannelStats::default();
        for side in [&self.r, &self.p] {
            if let Some(p) = &side.prune {
                s.add(p);
            }
        }
        s
    }
}

/// Everything the servers and the client need to run trials.
pub struct System {
    pub config: PipelineConfig,
    pub plda: TrainedPlda,
    pub form: ScoringForm,
    pub extractor: BkExtractor,
    pub keys: Keypair,
    pub z_cohort: CohortStore,
    /// Separate cohort for the probe side; the z cohort serves both when absent.
    pub t_cohort: Option<CohortStore>,
}

impl System {
    pub fn t_cohort(&self) -> &CohortStore {
        self.t_cohort.as_ref().unwrap_or(&self.z_cohort)
    }

    pub fn prepare(&self, id: &str, embedding: &DVector<f64>, frames: &DMatrix<f64>) -> Result<PreparedSample> {
        Ok(PreparedSample {
            id: id.to_string(),
            embedding: self.plda.preprocess(embedding)?,
            bk: self.extractor.extract(frames)?,
        })
    }

    /// Encrypts the embedding and splits the key into two shares. The plain
    /// key is not kept.
    pub fn enroll<R: RngCore + ?Sized>(&self, sample: &PreparedSample, rng: &mut R) -> Result<Enrollment> {
        let template = protect_reference(
            &self.keys.public,
            &self.form,
            &sample.embedding,
            self.config.scale_bits,
            rng,
        )?;
        let (a, b) = share_bits(sample.bk.bits(), 0, rng);
        Ok(Enrollment {
            sample_id: sample.id.clone(),
            template,
            bk_shares: [a, b],
        })
    }

    fn effective_n(&self, store: &CohortStore) -> usize {
        let n = self.config.n;
        if n > store.len() {
            log::warn!("n = {n} exceeds the cohort size {}; using the full cohort", store.len());
            store.len()
        } else {
            n
        }
    }

    fn he_score<R: RngCore + ?Sized>(&self, template: &ProtectedTemplate, x: &DVector<f64>, rng: &mut R) -> Result<f64> {
        let s = self.config.scale_bits;
        let c = he_plda_score(&self.keys.public, &self.form, template, x, s, rng)?;
        decrypt_score(&self.keys, &c, s)
    }

    fn prune_protected<R: RngCore + ?Sized>(
        &self,
        store: &CohortStore,
        shares: &[BooleanShare; 2],
        plain_key: Option<&BitVector>,
        n: usize,
        rng: &mut R,
    ) -> Result<(Vec<u64>, ChannelStats)> {
        let opts = PruneOptions {
            exec: self.config.exec(),
            mode: NetMode::resolve(self.config.net_mode)?,
            record_transcript: self.config.audit,
        };
        let cohort0 = store.entries.iter().map(|e| e.shares[0].clone()).collect();
        let cohort1 = store.entries.iter().map(|e| e.shares[1].clone()).collect();
        let session = run_prune_on_shares(
            shares.clone(),
            [cohort0, cohort1],
            &store.ids(),
            self.extractor.k,
            n,
            rng,
            opts,
        )?;
        if self.config.audit {
            let mut secrets: Vec<BitVector> = store.entries.iter().map(|e| e.bk.bits().clone()).collect();
            secrets.extend(plain_key.cloned());
            for t in &session.transcripts {
                audit_transcript(t, n, &secrets)?;
            }
        }
        Ok((session.result.ids, session.stats))
    }

    /// Cohort side of one sample. `protected` carries the sample's template
    /// and key shares and is required in protected mode; `plain` is required
    /// otherwise.
    fn side<R: RngCore + ?Sized>(
        &self,
        store: &CohortStore,
        source: NormSource,
        plain: Option<&PreparedSample>,
        protected: Option<&Enrollment>,
        rng: &mut R,
    ) -> Result<SideResult> {
        let n = self.effective_n(store);
        let need_plain = || plain.ok_or_else(|| Error::Config("plaintext mode needs the plain sample".into()));
        let mut prune = None;
        let prune_clock = Stopwatch::start();
        let ids = match self.config.mode {
            TrialMode::PlaintextScores => Vec::new(),
            TrialMode::PlaintextBk => {
                let keys: Vec<BinaryKey> = store.entries.iter().map(|e| e.bk.clone()).collect();
                top_n_by_similarity(&need_plain()?.bk, &keys, &store.ids(), n)?
            }
            TrialMode::Protected => {
                let e = protected.ok_or_else(|| Error::Config("protected mode needs an enrollment".into()))?;
                let (ids, stats) = self.prune_protected(store, &e.bk_shares, plain.map(|p| p.bk.bits()), n, rng)?;
                prune = Some(stats);
                ids
            }
        };
        let prune_time = prune_clock.elapsed();
        let scoring_clock = Stopwatch::start();
        let (ids, scores, stats) = match self.config.mode {
            TrialMode::PlaintextScores => {
                let x = &need_plain()?.embedding;
                let mut scored = store
                    .entries
                    .iter()
                    .map(|e| Ok((plda_score(&self.form, x, &e.embedding)?, e.id)))
                    .collect::<Result<Vec<_>>>()?;
                let all: Vec<f64> = scored.iter().map(|s| s.0).collect();
                let stats = norm_stats(&all, CohortSelect::TopN(n), source)?;
                scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                scored.truncate(n);
                let (scores, ids) = scored.into_iter().unzip();
                (ids, scores, stats)
            }
            TrialMode::PlaintextBk => {
                let x = &need_plain()?.embedding;
                let scores = ids
                    .iter()
                    .map(|&id| plda_score(&self.form, x, &store.entry(id)?.embedding))
                    .collect::<Result<Vec<_>>>()?;
                let stats = norm_stats(&scores, CohortSelect::All, source)?;
                (ids, scores, stats)
            }
            TrialMode::Protected => {
                let template = &protected.expect("checked above").template;
                let scores = ids
                    .iter()
                    .map(|&id| self.he_score(template, &store.entry(id)?.embedding, rng))
                    .collect::<Result<Vec<_>>>()?;
                let stats = norm_stats(&scores, CohortSelect::All, source)?;
                (ids, scores, stats)
            }
        };
        Ok(SideResult {
            ids,
            scores,
            stats,
            prune,
            prune_time,
            scoring_time: scoring_clock.elapsed(),
        })
    }

    pub fn reference_side<R: RngCore + ?Sized>(&self, reference: &Reference, rng: &mut R) -> Result<SideResult> {
        let (plain, protected) = match reference {
            Reference::Plain(p) => (Some(p), None),
            Reference::Enrolled(e) => (None, Some(e)),
        };
        self.side(&self.z_cohort, NormSource::Z, plain, protected, rng)
            .map_err(|e| with_id(e, reference.id()))
    }

    /// In protected mode the probe is encrypted and shared here, as the
    /// client would do when presenting it.
    pub fn probe_side<R: RngCore + ?Sized>(
        &self,
        probe: &PreparedSample,
        protected: Option<&Enrollment>,
        rng: &mut R,
    ) -> Result<SideResult> {
        self.side(self.t_cohort(), NormSource::T, Some(probe), protected, rng)
            .map_err(|e| with_id(e, &probe.id))
    }

    pub fn raw_score<R: RngCore + ?Sized>(&self, reference: &Reference, probe: &PreparedSample, rng: &mut R) -> Result<f64> {
        match (self.config.mode, reference) {
            (TrialMode::Protected, Reference::Enrolled(e)) => self.he_score(&e.template, &probe.embedding, rng),
            (TrialMode::Protected, Reference::Plain(_)) => {
                Err(Error::Config("protected mode needs an enrolled reference".into()))
            }
            (_, Reference::Plain(r)) => plda_score(&self.form, &r.embedding, &probe.embedding),
            (_, Reference::Enrolled(_)) => Err(Error::Config("plaintext modes need the plain reference".into())),
        }
    }

    fn record<R: RngCore + ?Sized>(
        &self,
        reference: &Reference,
        probe: &PreparedSample,
        label: Option<Label>,
        r: SideResult,
        p: SideResult,
        rng: &mut R,
    ) -> Result<TrialRecord> {
        let clock = Stopwatch::start();
        let raw = self.raw_score(reference, probe, rng)?;
        let raw_time = clock.elapsed();
        let normalized = s_norm(raw, &r.stats, &p.stats).map_err(|e| with_id(e, &format!("{}/{}", reference.id(), probe.id)))?;
        Ok(TrialRecord {
            ref_id: reference.id().to_string(),
            probe_id: probe.id.clone(),
            label,
            raw,
            normalized,
            r,
            p,
            raw_time,
        })
    }

    pub fn run_trial<R: RngCore + ?Sized>(
        &self,
        reference: &Reference,
        probe: &PreparedSample,
        label: Option<Label>,
        rng: &mut R,
    ) -> Result<TrialRecord> {
        let r = self.reference_side(reference, rng)?;
        let protected_probe = self.protect_probe(probe, rng)?;
        let p = self.probe_side(probe, protected_probe.as_ref(), rng)?;
        self.record(reference, probe, label, r, p, rng)
    }

    fn protect_probe<R: RngCore + ?Sized>(&self, probe: &PreparedSample, rng: &mut R) -> Result<Option<Enrollment>> {
        match self.config.mode {
            TrialMode::Protected => self.enroll(probe, rng).map(Some),
            _ => Ok(None),
        }
    }

    /// Runs a trial list, computing each sample's cohort side once.
    pub fn run_trials<R: RngCore + ?Sized>(
        &self,
        references: &HashMap<String, Reference>,
        probes: &HashMap<String, PreparedSample>,
        trials: &[Trial],
        rng: &mut R,
    ) -> Result<Vec<TrialRecord>> {
        let mut r_sides: HashMap<&str, SideResult> = HashMap::new();
        let mut p_sides: HashMap<&str, SideResult> = HashMap::new();
        let mut out = Vec::with_capacity(trials.len());
        for t in trials {
            let reference = references
                .get(&t.ref_id)
                .ok_or_else(|| Error::Format(format!("no reference {}", t.ref_id)))?;
            let probe = probes
                .get(&t.probe_id)
                .ok_or_else(|| Error::Format(format!("no probe {}", t.probe_id)))?;
            if !r_sides.contains_key(t.ref_id.as_str()) {
                let side = self.reference_side(reference, rng)?;
                r_sides.insert(&t.ref_id, side);
            }
            if !p_sides.contains_key(t.probe_id.as_str()) {
                let protected = self.protect_probe(probe, rng)?;
                let side = self.probe_side(probe, protected.as_ref(), rng)?;
                p_sides.insert(&t.probe_id, side);
            }
            let r = r_sides[t.ref_id.as_str()].clone();
            let p = p_sides[t.probe_id.as_str()].clone();
            out.push(self.record(reference, probe, Some(t.label), r, p, rng)?);
        }
        Ok(out)
    }
}

fn with_id(e: Error, id: &str) -> Error {
    match e {
        Error::DegenerateStats { id: what } => Error::DegenerateStats {
            id: format!("{id}: {what}"),
        },
        other => other,
    }
}

/// Trains the back-end and key model on a corpus and prepares the cohort.
/// `keys` defaults to a fresh keypair of `config.key_bits`.
pub fn build_system(corpus: &Corpus, config: PipelineConfig, keys: Option<Keypair>) -> Result<System> {
    config.validate()?;
    let mut xs = Vec::new();
    let mut labels = Vec::new();
    for s in corpus.samples.iter().filter(|s| matches!(s.role, Role::Train | Role::Cohort)) {
        if let Some(e) = &s.embedding {
            xs.push(e.clone());
            labels.push(s.speaker);
        }
    }
    let (plda, fit) = TrainedPlda::train(&xs, &labels, &FitOptions::default())?;
    for w in &fit.warnings {
        log::warn!("{w}");
    }
    let form = scoring_form(&plda.model)?;
    let anchors: Vec<DMatrix<f64>> = corpus.by_role(Role::Anchor).filter_map(|s| s.frames.clone()).collect();
    let kbm = build_kbm(&corpus.ubm, &anchors, DEFAULT_RELEVANCE)?;
    if config.k > kbm.len() {
        return Err(Error::Config(format!("k = {} exceeds the {} key bits", config.k, kbm.len())));
    }
    let extractor = BkExtractor {
        kbm,
        per_frame: config.per_frame,
        k: config.k,
    };
    let keys = match keys {
        Some(k) => k,
        None => keygen(config.key_bits, crate::rng::derive_seed(config.seed, "keys", 0))?,
    };
    let mut system = System {
        config,
        plda,
        form,
        extractor,
        keys,
        z_cohort: CohortStore { entries: Vec::new() },
        t_cohort: None,
    };
    let cohort = corpus
        .by_role(Role::Cohort)
        .map(|s| prepare_corpus_sample(&system, corpus, &s.id))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = crate::rng::stream(system.config.seed, "cohort-shares", 0);
    system.z_cohort = CohortStore::build(cohort, &mut rng)?;
    Ok(system)
}

pub fn prepare_corpus_sample(system: &System, corpus: &Corpus, id: &str) -> Result<PreparedSample> {
    let s = corpus.sample(id)?;
    let emb = s
        .embedding
        .as_ref()
        .ok_or_else(|| Error::Format(format!("sample {id} has no embedding")))?;
    let frames = s
        .frames
        .as_ref()
        .ok_or_else(|| Error::Format(format!("sample {id} has no frames")))?;
    system.prepare(id, emb, frames)
}

/// References and probes of a trial list, prepared (and enrolled in
/// protected mode).
pub fn trial_inputs<R: RngCore + ?Sized>(
    system: &System,
    corpus: &Corpus,
    trials: &[Trial],
    rng: &mut R,
) -> Result<(HashMap<String, Reference>, HashMap<String, PreparedSample>)> {
    let mut refs = HashMap::new();
    let mut probes = HashMap::new();
    for t in trials {
        if !refs.contains_key(&t.ref_id) {
            let p = prepare_corpus_sample(system, corpus, &t.ref_id)?;
            let r = match system.config.mode {
                TrialMode::Protected => Reference::Enrolled(system.enroll(&p, rng)?),
                _ => Reference::Plain(p),
            };
            refs.insert(t.ref_id.clone(), r);
        }
        if !probes.contains_key(&t.probe_id) {
            probes.insert(t.probe_id.clone(), prepare_corpus_sample(system, corpus, &t.probe_id)?);
        }
    }
    Ok((refs, probes))
}

// ---------------------------------------------------------------------------
// Score files

/// `%.9g`-style formatting: nine significant digits.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.8e}")
    }
}

/// One line per trial: `ref TAB probe TAB raw TAB normalised TAB label`.
pub fn write_scores<W: Write>(w: &mut W, records: &[TrialRecord]) -> Result<()> {
    for r in records {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            r.ref_id,
            r.probe_id,
            format_sig9(r.raw),
            format_sig9(r.normalized),
            r.label.map_or("-", Label::as_str)
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreLine {
    pub ref_id: String,
    pub probe_id: String,
    pub raw: f64,
    pub normalized: f64,
    pub label: Option<Label>,
}

pub fn read_scores<R: BufRead>(r: R) -> Result<Vec<ScoreLine>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(Error::Format(format!("score line needs 5 fields: {line:?}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number {s:?}")));
        out.push(ScoreLine {
            ref_id: f[0].to_string(),
            probe_id: f[1].to_string(),
            raw: num(f[2])?,
            normalized: num(f[3])?,
            label: match f[4] {
                "-" => None,
                l => Some(Label::parse(l)?),
            },
        });
    }
    Ok(out)
}
