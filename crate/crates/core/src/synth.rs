//! Synthetic speaker universe.
//!
//! Speakers carry a latent identity vector drawn from the between-speaker
//! covariance. The same latent drives both data paths: embeddings follow the
//! two-covariance model (`mean + latent + within-noise + channel shift`), and
//! acoustic frames come from a copy of the UBM whose means are shifted by a
//! fixed linear map of the latent. Binary keys therefore carry speaker
//! information without ever seeing the embeddings.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::Array;
use crate::gmm::Gmm;
use crate::linalg::cholesky;
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SpeakerId(pub u32);

impl fmt::Display for SpeakerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "spk{:05}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Gender {
    Female,
    Male,
}

#[derive(Clone, Debug)]
pub struct SpeakerModel {
    pub id: SpeakerId,
    pub gender: Gender,
    /// Between-speaker factor.
    pub latent: DVector<f64>,
    pub gmm: Gmm,
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Random UBM with well-separated means and moderate diagonal variances.
pub fn gen_ubm(seed: u64, components: usize, feat_dim: usize) -> Gmm {
    assert!(components >= 1 && feat_dim >= 1, "validated at config parse");
    let mut rng = stream(seed, "ubm", 0);
    let raw: Vec<f64> = (0..components).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    let means = DMatrix::from_fn(components, feat_dim, |_, _| {
        3.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
    });
    let variances = DMatrix::from_fn(components, feat_dim, |_, _| rng.random_range(0.5..1.5));
    Gmm::new(weights, means, variances).expect("generated mixture is valid")
}

/// Coupling between the speaker latent and the acoustic space.
#[derive(Clone, Debug)]
pub struct SpeakerParams {
    /// Standard deviation scale of the per-component mean offset.
    pub coupling: f64,
    /// Magnitude of the gender-dependent acoustic offset.
    pub gender_offset: f64,
}

impl Default for SpeakerParams {
    fn default() -> Self {
        Self {
            coupling: 1.0,
            gender_offset: 0.3,
        }
    }
}

pub fn gen_speakers(
    ubm: &Gmm,
    count: usize,
    between_cov: &DMatrix<f64>,
    seed: u64,
) -> Result<Vec<SpeakerModel>> {
    gen_speakers_with(ubm, count, between_cov, seed, &SpeakerParams::default())
}

pub fn gen_speakers_with(
    ubm: &Gmm,
    count: usize,
    between_cov: &DMatrix<f64>,
    seed: u64,
    params: &SpeakerParams,
) -> Result<Vec<SpeakerModel>> {
    let chol = cholesky(between_cov, "between-speaker covariance")
        .map_err(|_| Error::Config("between-speaker covariance must be SPD".into()))?;
    let d = between_cov.nrows();
    let (c, f) = (ubm.n_components(), ubm.dim());

    let mut lrng = stream(seed, "loading", 0);
    let scale = params.coupling / (d as f64).sqrt();
    let loadings: Vec<DMatrix<f64>> = (0..c)
        .map(|_| {
            DMatrix::from_fn(f, d, |_, _| {
                scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut lrng)
            })
        })
        .collect();
    let gender_dir = DMatrix::from_fn(c, f, |_, _| {
        params.gender_offset * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut lrng)
    });

    let mut rng = stream(seed, "latent", 0);
    let l = chol.l();
    (0..count)
        .map(|i| {
            let latent = &l * normal_vec(&mut rng, d);
            let gender = if i % 2 == 0 { Gender::Female } else { Gender::Male };
            let sign = if gender == Gender::Female { 1.0 } else { -1.0 };
            let mut means = ubm.means().clone();
            for (ci, load) in loadings.iter().enumerate() {
                let off = load * &latent;
                for j in 0..f {
                    means[(ci, j)] += off[j] + sign * gender_dir[(ci, j)];
                }
            }
            Ok(SpeakerModel {
                id: SpeakerId(i as u32),
                gender,
                latent,
                gmm: ubm.with_means(means)?,
            })
        })
        .collect()
}

/// `frames` i.i.d. rows from the speaker's acoustic model.
pub fn gen_frames(speaker: &SpeakerModel, frames: usize, seed: u64) -> DMatrix<f64> {
    assert!(frames >= 1);
    let mut rng = stream(seed, "frames", 0);
    let f = speaker.gmm.dim();
    let mut out = DMatrix::zeros(frames, f);
    for t in 0..frames {
        let x = speaker.gmm.sample(&mut rng);
        out.row_mut(t).copy_from(&x.transpose());
    }
    out
}

pub fn gen_embedding(
    speaker: &SpeakerModel,
    within_cov: &DMatrix<f64>,
    global_mean: &DVector<f64>,
    shift: &DVector<f64>,
    seed: u64,
) -> Result<DVector<f64>> {
    let chol = cholesky(within_cov, "within-speaker covariance")
        .map_err(|_| Error::Config("within-speaker covariance must be SPD".into()))?;
    Ok(embedding_with_factor(&chol.l(), speaker, global_mean, shift, seed))
}

fn embedding_with_factor(
    within_l: &DMatrix<f64>,
    speaker: &SpeakerModel,
    global_mean: &DVector<f64>,
    shift: &DVector<f64>,
    seed: u64,
) -> DVector<f64> {
    let mut rng = stream(seed, "embedding", 0);
    let noise = within_l * normal_vec(&mut rng, within_l.nrows());
    global_mean + &speaker.latent + noise + shift
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Anchor,
    Train,
    Cohort,
    Enroll,
    Probe,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Anchor => "anchor",
            Role::Train => "train",
            Role::Cohort => "cohort",
            Role::Enroll => "enroll",
            Role::Probe => "probe",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "anchor" => Role::Anchor,
            "train" => Role::Train,
            "cohort" => Role::Cohort,
            "enroll" => Role::Enroll,
            "probe" => Role::Probe,
            other => return Err(Error::Format(format!("unknown role {other:?}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    Clean,
    Shifted,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub speaker: SpeakerId,
    pub role: Role,
    pub condition: Condition,
    pub embedding: Option<DVector<f64>>,
    pub frames: Option<DMatrix<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Target,
    Nontarget,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Target => "target",
            Label::Nontarget => "nontarget",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(Label::Target),
            "nontarget" => Ok(Label::Nontarget),
            other => Err(Error::Format(format!("unknown label {other:?}"))),
        }
    }

    pub fn is_target(self) -> bool {
        self == Label::Target
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub ref_id: String,
    pub probe_id: String,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Embedding dimension.
    pub dim: usize,
    /// Acoustic feature dimension.
    pub feat_dim: usize,
    pub ubm_components: usize,
    pub anchors: usize,
    pub anchor_frames: usize,
    pub frames_per_sample: usize,
    pub train_speakers: usize,
    pub train_sessions: usize,
    pub cohort_speakers: usize,
    pub cohort_sessions: usize,
    pub trial_speakers: usize,
    pub probe_sessions: usize,
    pub nontarget_trials: usize,
    pub between_scale: f64,
    pub within_scale: f64,
    pub mean_scale: f64,
    /// Norm of the channel shift applied to every other probe session;
    /// `None` means `0.5·√dim`.
    pub shift_norm: Option<f64>,
    pub coupling: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            dim: 32,
            feat_dim: 8,
            ubm_components: 64,
            anchors: 16,
            anchor_frames: 400,
            frames_per_sample: 100,
            train_speakers: 384,
            train_sessions: 4,
            cohort_speakers: 128,
            cohort_sessions: 4,
            trial_speakers: 64,
            probe_sessions: 4,
            nontarget_trials: 2048,
            between_scale: 1.0,
            within_scale: 1.0,
            mean_scale: 1.0,
            shift_norm: None,
            coupling: 1.0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("feat_dim", self.feat_dim),
            ("ubm_components", self.ubm_components),
            ("anchors", self.anchors),
            ("anchor_frames", self.anchor_frames),
            ("frames_per_sample", self.frames_per_sample),
            ("cohort_speakers", self.cohort_speakers),
            ("cohort_sessions", self.cohort_sessions),
            ("trial_speakers", self.trial_speakers),
            ("probe_sessions", self.probe_sessions),
            ("train_sessions", self.train_sessions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.nontarget_trials > 0 && self.trial_speakers < 2 {
            return Err(Error::Config(
                "nontarget trials need at least two disjoint trial speakers".into(),
            ));
        }
        if !(self.between_scale > 0.0 && self.within_scale > 0.0) {
            return Err(Error::Config("covariance scales must be positive".into()));
        }
        Ok(())
    }

    pub fn shift_norm(&self) -> f64 {
        self.shift_norm.unwrap_or(0.5 * (self.dim as f64).sqrt())
    }

    /// Between-speaker covariance: diagonal with eigenvalues decaying from 1.5 to 0.5.
    pub fn between_cov(&self) -> DMatrix<f64> {
        let d = self.dim;
        DMatrix::from_fn(d, d, |i, j| {
            if i != j {
                0.0
            } else if d == 1 {
                self.between_scale
            } else {
                self.between_scale * (1.5 - i as f64 / (d - 1) as f64)
            }
        })
    }

    pub fn within_cov(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim) * self.within_scale
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub ubm: Gmm,
    pub global_mean: DVector<f64>,
    pub shift: DVector<f64>,
    pub samples: Vec<Sample>,
    pub trials: Vec<Trial>,
    index: HashMap<String, usize>,
}

impl Corpus {
    fn from_parts(
        config: CorpusConfig,
        ubm: Gmm,
        global_mean: DVector<f64>,
        shift: DVector<f64>,
        samples: Vec<Sample>,
        trials: Vec<Trial>,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if index.insert(s.id.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate sample id {}", s.id)));
            }
        }
        let corpus = Self {
            config,
            ubm,
            global_mean,
            shift,
            samples,
            trials,
            index,
        };
        for t in &corpus.trials {
            corpus.sample(&t.ref_id)?;
            corpus.sample(&t.probe_id)?;
        }
        Ok(corpus)
    }

    pub fn sample(&self, id: &str) -> Result<&Sample> {
        self.index
            .get(id)
            .map(|&i| &self.samples[i])
            .ok_or_else(|| Error::Format(format!("unknown sample id {id}")))
    }

    pub fn by_role(&self, role: Role) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.role == role)
    }

    pub fn speakers_with_role(&self, role: Role) -> BTreeSet<SpeakerId> {
        self.by_role(role).map(|s| s.speaker).collect()
    }
}

/// Generates the full synthetic corpus. Anchor, training, cohort and trial
/// speakers are disjoint; cohort speakers are also part of the PLDA training
/// data.
pub fn build_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let seed = config.seed;
    let ubm = gen_ubm(seed, config.ubm_components, config.feat_dim);
    let between = config.between_cov();
    let within = config.within_cov();
    let within_l = cholesky(&within, "within-speaker covariance")?.l();

    let total = config.anchors + config.train_speakers + config.cohort_speakers + config.trial_speakers;
    let params = SpeakerParams {
        coupling: config.coupling,
        ..SpeakerParams::default()
    };
    let speakers = gen_speakers_with(&ubm, total, &between, seed, &params)?;

    let global_mean = normal_vec(&mut stream(seed, "global-mean", 0), config.dim) * config.mean_scale;
    let shift = {
        let dir = normal_vec(&mut stream(seed, "shift", 0), config.dim);
        let norm = dir.norm();
        if norm > 0.0 {
            dir * (config.shift_norm() / norm)
        } else {
            dir
        }
    };
    let zero = DVector::zeros(config.dim);

    let mut samples = Vec::new();
    let mut next = 0u64;
    let mut make = |spk: &SpeakerModel,
                    role: Role,
                    session: usize,
                    condition: Condition,
                    with_embedding: bool,
                    frames: usize| {
        let idx = next;
        next += 1;
        let prefix = match role {
            Role::Anchor => "anc",
            Role::Train => "trn",
            Role::Cohort => "coh",
            Role::Enroll => "enr",
            Role::Probe => "prb",
        };
        let shift_vec = if condition == Condition::Shifted { &shift } else { &zero };
        Sample {
            id: format!("{prefix}-{:05}-{session:02}", spk.id.0),
            speaker: spk.id,
            role,
            condition,
            embedding: with_embedding.then(|| {
                embedding_with_factor(&within_l, spk, &global_mean, shift_vec, crate::rng::derive_seed(seed, "emb", idx))
            }),
            frames: (frames > 0).then(|| gen_frames(spk, frames, crate::rng::derive_seed(seed, "frm", idx))),
        }
    };

    let mut it = speakers.iter();
    for spk in it.by_ref().take(config.anchors) {
        samples.push(make(spk, Role::Anchor, 0, Condition::Clean, false, config.anchor_frames));
    }
    for spk in it.by_ref().take(config.train_speakers) {
        for s in 0..config.train_sessions {
            samples.push(make(spk, Role::Train, s, Condition::Clean, true, 0));
        }
    }
    for spk in it.by_ref().take(config.cohort_speakers) {
        for s in 0..config.cohort_sessions {
            samples.push(make(spk, Role::Cohort, s, Condition::Clean, true, config.frames_per_sample));
        }
    }
    let trial_speakers: Vec<&SpeakerModel> = it.by_ref().take(config.trial_speakers).collect();
    let mut enroll_ids = Vec::new();
    let mut probe_ids: Vec<Vec<String>> = Vec::new();
    for spk in &trial_speakers {
        let e = make(spk, Role::Enroll, 0, Condition::Clean, true, config.frames_per_sample);
        enroll_ids.push(e.id.clone());
        samples.push(e);
        let mut mine = Vec::new();
        for s in 0..config.probe_sessions {
            let cond = if s % 2 == 1 { Condition::Shifted } else { Condition::Clean };
            let p = make(spk, Role::Probe, s + 1, cond, true, config.frames_per_sample);
            mine.push(p.id.clone());
            samples.push(p);
        }
        probe_ids.push(mine);
    }

    let mut trials = Vec::new();
    for (e, probes) in enroll_ids.iter().zip(&probe_ids) {
        for p in probes {
            trials.push(Trial {
                ref_id: e.clone(),
                probe_id: p.clone(),
                label: Label::Target,
            });
        }
    }
    let mut candidates = Vec::new();
    for (si, e) in enroll_ids.iter().enumerate() {
        for (ti, probes) in probe_ids.iter().enumerate() {
            if si != ti {
                candidates.extend(probes.iter().map(|p| (e.clone(), p.clone())));
            }
        }
    }
    candidates.shuffle(&mut stream(seed, "trials", 0));
    candidates.truncate(config.nontarget_trials);
    candidates.sort();
    trials.extend(candidates.into_iter().map(|(r, p)| Trial {
        ref_id: r,
        probe_id: p,
        label: Label::Nontarget,
    }));

    Corpus::from_parts(config.clone(), ubm, global_mean, shift, samples, trials)
}

// ---------------------------------------------------------------------------
// On-disk layout: manifest.tsv, embeddings.vcdb, frames.vcdb, ubm.vcdb,
// trials.tsv and corpus.toml in one directory.

pub const MANIFEST: &str = "manifest.tsv";
pub const EMBEDDINGS: &str = "embeddings.vcdb";
pub const FRAMES: &str = "frames.vcdb";
pub const UBM: &str = "ubm.vcdb";
pub const TRIALS: &str = "trials.tsv";
pub const CONFIG: &str = "corpus.json";

pub fn write_trials<W: Write>(w: &mut W, trials: &[Trial]) -> Result<()> {
    for t in trials {
        writeln!(w, "{}\t{}\t{}", t.ref_id, t.probe_id, t.label.as_str())?;
    }
    Ok(())
}

pub fn read_trials<R: BufRead>(r: R) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::Format(format!("trial line needs 3 fields: {line:?}")));
        }
        out.push(Trial {
            ref_id: f[0].to_string(),
            probe_id: f[1].to_string(),
            label: Label::parse(f[2])?,
        });
    }
    Ok(out)
}

fn ubm_to_array(ubm: &Gmm) -> Array {
    let (c, f) = (ubm.n_components(), ubm.dim());
    let mut data = Vec::with_capacity(c * (1 + 2 * f));
    for i in 0..c {
        data.push(ubm.weights()[i]);
        data.extend(ubm.means().row(i).iter());
        data.extend(ubm.variances().row(i).iter());
    }
    Array {
        dims: vec![c, 1 + 2 * f],
        data,
    }
}

fn ubm_from_array(a: &Array) -> Result<Gmm> {
    let [c, w] = a.dims[..] else {
        return Err(Error::Format("UBM container must be rank 2".into()));
    };
    if w < 3 || (w - 1) % 2 != 0 {
        return Err(Error::Format(format!("bad UBM row width {w}")));
    }
    let f = (w - 1) / 2;
    let row = |i: usize| &a.data[i * w..(i + 1) * w];
    let weights = (0..c).map(|i| row(i)[0]).collect();
    let means = DMatrix::from_fn(c, f, |i, j| row(i)[1 + j]);
    let vars = DMatrix::from_fn(c, f, |i, j| row(i)[1 + f + j]);
    Gmm::new(weights, means, vars)
}

impl Corpus {
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = BufWriter::new(File::create(dir.join(MANIFEST))?);
        let mut emb_rows = Vec::new();
        let mut frame_data = Vec::new();
        let mut frame_count = 0usize;
        let t = self.config.frames_per_sample;
        let f = self.config.feat_dim;
        let mut anchor_data = Vec::new();
        let mut anchor_count = 0usize;
        for s in &self.samples {
            let mut files = Vec::new();
            if let Some(e) = &s.embedding {
                files.push(format!("{EMBEDDINGS}:{}", emb_rows.len()));
                emb_rows.push(e.clone());
            }
            if let Some(fr) = &s.frames {
                let (target, count, name) = if s.role == Role::Anchor {
                    (&mut anchor_data, &mut anchor_count, "anchor-frames.vcdb")
                } else {
                    (&mut frame_data, &mut frame_count, FRAMES)
                };
                files.push(format!("{name}:{}", *count));
                *count += 1;
                target.extend(Array::from_matrix(fr).data);
            }
            writeln!(
                manifest,
                "{}\t{}\t{}\t{}",
                s.id,
                s.speaker,
                s.role.as_str(),
                if files.is_empty() { "-".to_string() } else { files.join(",") }
            )?;
        }
        manifest.flush()?;
        let mut w = BufWriter::new(File::create(dir.join(EMBEDDINGS))?);
        Array::from_rows(&emb_rows)?.write(&mut w)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join(FRAMES))?);
        Array::new(vec![frame_count, t, f], frame_data)?.write(&mut w)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join("anchor-frames.vcdb"))?);
        Array::new(vec![anchor_count, self.config.anchor_frames, f], anchor_data)?.write(&mut w)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join(UBM))?);
        ubm_to_array(&self.ubm).write(&mut w)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join(TRIALS))?);
        write_trials(&mut w, &self.trials)?;
        w.flush()?;
        let meta = serde_json::json!({
            "config": self.config,
            "global_mean": self.global_mean.as_slice(),
            "shift": self.shift.as_slice(),
        });
        std::fs::write(dir.join(CONFIG), serde_json::to_string_pretty(&meta).expect("json"))?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join(CONFIG))?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let config: CorpusConfig =
            serde_json::from_value(meta["config"].clone()).map_err(|e| Error::Format(e.to_string()))?;
        let vec_of = |key: &str| -> Result<DVector<f64>> {
            let v: Vec<f64> =
                serde_json::from_value(meta[key].clone()).map_err(|e| Error::Format(e.to_string()))?;
            Ok(DVector::from_vec(v))
        };
        let global_mean = vec_of("global_mean")?;
        let shift = vec_of("shift")?;
        let ubm = ubm_from_array(&Array::read(&mut BufReader::new(File::open(dir.join(UBM))?))?)?;
        let emb = Array::read(&mut BufReader::new(File::open(dir.join(EMBEDDINGS))?))?.to_rows()?;
        let frames = Array::read(&mut BufReader::new(File::open(dir.join(FRAMES))?))?;
        let anchors = Array::read(&mut BufReader::new(File::open(dir.join("anchor-frames.vcdb"))?))?;
        let slab = |a: &Array, i: usize| -> Result<DMatrix<f64>> {
            let [n, t, f] = a.dims[..] else {
                return Err(Error::Format("frame container must be rank 3".into()));
            };
            if i >= n {
                return Err(Error::Format(format!("frame index {i} out of range")));
            }
            Ok(DMatrix::from_row_slice(t, f, &a.data[i * t * f..(i + 1) * t * f]))
        };

        let mut samples = Vec::new();
        for line in BufReader::new(File::open(dir.join(MANIFEST))?).lines() {
            let line = line?;
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::Format(format!("manifest line needs 4 fields: {line:?}")));
            }
            let speaker = f[1]
                .strip_prefix("spk")
                .and_then(|s| s.parse().ok())
                .map(SpeakerId)
                .ok_or_else(|| Error::Format(format!("bad speaker id {}", f[1])))?;
            let role = Role::parse(f[2])?;
            let mut sample = Sample {
                id: f[0].to_string(),
                speaker,
                role,
                condition: Condition::Clean,
                embedding: None,
                frames: None,
            };
            for file in f[3].split(',').filter(|s| *s != "-") {
                let (name, idx) = file
                    .rsplit_once(':')
                    .and_then(|(n, i)| i.parse::<usize>().ok().map(|i| (n, i)))
                    .ok_or_else(|| Error::Format(format!("bad file reference {file}")))?;
                match name {
                    EMBEDDINGS => {
                        sample.embedding = Some(
                            emb.get(idx)
                                .cloned()
                                .ok_or_else(|| Error::Format(format!("embedding row {idx} missing")))?,
                        )
                    }
                    FRAMES => sample.frames = Some(slab(&frames, idx)?),
                    "anchor-frames.vcdb" => sample.frames = Some(slab(&anchors, idx)?),
                    other => return Err(Error::Format(format!("unknown container {other}"))),
                }
            }
            if role == Role::Probe {
                // session numbers start at 1; even-indexed probe sessions are shifted
                let session: usize = sample.id.rsplit('-').next().and_then(|s| s.parse().ok()).unwrap_or(1);
                if session.is_multiple_of(2) {
                    sample.condition = Condition::Shifted;
                }
            }
            samples.push(sample);
        }
        let trials = read_trials(BufReader::new(File::open(dir.join(TRIALS))?))?;
        Corpus::from_parts(config, ubm, global_mean, shift, samples, trials)
    }
}
