//! Runtime/accuracy harness and the improvement-ratio report.
//!
//! The improvement ratio compares scoring the whole cohort under HE against
//! the pruned pipeline: `cohort·t_he / (t_bk + t_gmw + n·t_he)`.

use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricConfig, Metrics};
use crate::paillier::{decrypt_score, he_plda_score, keygen, protect_reference};
use crate::pipeline::{
    build_system, norm_stats, prepare_corpus_sample, s_norm, trial_inputs, CohortSelect, PipelineConfig, SideResult,
    System, TrialMode,
};
use crate::rng::{derive_seed, stream};
use crate::smpc::{run_prune_on_shares, share_bits, PruneOptions};
use crate::synth::{build_corpus, Corpus, CorpusConfig, Trial};
use crate::transport::{simulated_time, NetMode, Stopwatch};

/// Component timings of one normalisation side, in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingLedger {
    /// Binary-key extraction.
    pub t_bk: f64,
    /// Secure pruning including the top-n selection.
    pub t_gmw: f64,
    pub t_he_per_cmp: f64,
    /// Entries compared by the pruning stage.
    pub cohort_size: usize,
    pub n: usize,
}

impl TimingLedger {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("t_bk", self.t_bk), ("t_gmw", self.t_gmw), ("t_he_per_cmp", self.t_he_per_cmp)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} = {v} must be a nonnegative time")));
            }
        }
        Ok(())
    }

    /// Time of the pruned pipeline.
    pub fn pruned_time(&self) -> f64 {
        self.t_bk + self.t_gmw + self.n as f64 * self.t_he_per_cmp
    }
}

pub fn improvement_ratio(full_cohort_size: usize, ledger: &TimingLedger) -> Result<f64> {
    ledger.validate()?;
    let denom = ledger.pruned_time();
    if denom <= 0.0 {
        return Err(Error::Config("pruned pipeline time is zero".into()));
    }
    Ok(full_cohort_size as f64 * ledger.t_he_per_cmp / denom)
}

/// Published component timings on NIST SRE data (two servers, 1 Gbit/s,
/// 1 ms RTT, 3072-bit Paillier).
pub mod reference {
    pub const T_HE_PER_CMP: f64 = 0.32;
    pub const N_GRID: [usize; 7] = [50, 100, 150, 200, 250, 300, 400];

    pub struct Side {
        pub name: &'static str,
        pub cohort_size: usize,
        pub t_bk: f64,
        pub t_gmw: [f64; 7],
        /// Published improvement factors.
        pub ratios: [f64; 7],
    }

    pub const AZ: Side = Side {
        name: "az-norm",
        cohort_size: 11640,
        t_bk: 28.2975,
        t_gmw: [156.583, 177.229, 197.791, 220.220, 247.070, 268.772, 282.889],
        ratios: [
            18.5423672282775,
            15.681618682547,
            13.5897711870436,
            11.918692553217,
            10.4815437540011,
            9.47618678121808,
            8.48113500756512,
        ],
    };

    pub const AT: Side = Side {
        name: "at-norm",
        cohort_size: 3812,
        t_bk: 16.8592,
        t_gmw: [51.572, 58.718, 65.667, 72.550, 82.047, 89.239, 93.555],
        ratios: [
            14.4477396981211,
            11.3392057052981,
            9.34555667750995,
            7.95154397519836,
            6.81832155621214,
            6.03587760801432,
            5.11647376708267,
        ],
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub side: String,
    pub n: usize,
    pub ratio: f64,
    pub published: f64,
}

/// Recomputes every published improvement factor from the component timings.
pub fn reference_ratios() -> Result<Vec<RatioRow>> {
    let mut rows = Vec::new();
    for side in [&reference::AZ, &reference::AT] {
        for (i, &n) in reference::N_GRID.iter().enumerate() {
            let ledger = TimingLedger {
                t_bk: side.t_bk,
                t_gmw: side.t_gmw[i],
                t_he_per_cmp: reference::T_HE_PER_CMP,
                cohort_size: side.cohort_size,
                n,
            };
            rows.push(RatioRow {
                side: side.name.to_string(),
                n,
                ratio: improvement_ratio(side.cohort_size, &ledger)?,
                published: side.ratios[i],
            });
        }
    }
    Ok(rows)
}

pub fn format_ratio_table(rows: &[RatioRow]) -> String {
    let mut out = format!("{:<8} {:>5} {:>10} {:>10} {:>8}\n", "side", "n", "ratio", "published", "delta");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<8} {:>5} {:>10.3} {:>10.3} {:>8.4}",
            r.side,
            r.n,
            r.ratio,
            r.published,
            r.ratio - r.published
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Harness

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub corpus: CorpusConfig,
    pub pipeline: PipelineConfig,
    pub n_grid: Vec<usize>,
    /// Skip timing and the secure protocols; pruned metrics come from
    /// plaintext binary-key pruning.
    pub dry_run: bool,
    /// Key size for the per-comparison HE timing.
    pub timing_key_bits: usize,
    /// Samples averaged per timing measurement.
    pub timing_samples: usize,
    /// Evaluate only the first trials of the list.
    pub max_trials: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            pipeline: PipelineConfig {
                key_bits: 512,
                ..Default::default()
            },
            n_grid: reference::N_GRID.to_vec(),
            dry_run: false,
            timing_key_bits: crate::paillier::DEFAULT_KEY_BITS,
            timing_samples: 3,
            max_trials: None,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.pipeline.validate()?;
        if self.n_grid.is_empty() || self.n_grid.iter().any(|&n| n < 2) {
            return Err(Error::Config("n grid needs values of at least 2".into()));
        }
        if self.timing_samples == 0 {
            return Err(Error::Config("timing_samples must be positive".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RowTiming {
    pub t_bk: f64,
    /// Pruning compute plus simulated network time.
    pub t_gmw: f64,
    pub t_he: f64,
    pub total: f64,
    pub ratio: f64,
    pub rounds: u64,
    /// Both servers together.
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    /// `None` for the unnormalised baseline.
    pub n: Option<usize>,
    pub timing: RowTiming,
    /// Raw scores on the baseline row, top-n-by-score as-norm otherwise.
    pub conventional: Metrics,
    /// As-norm over binary-key pruned cohorts.
    pub pruned: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub trials: usize,
    pub cohort_size: usize,
    pub pruned_source: TrialMode,
    pub timing_key_bits: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "trials {}  cohort {}  pruned metrics from {}  HE timing at {} bits\n",
            self.trials, self.cohort_size, self.pruned_source, self.timing_key_bits
        );
        let _ = writeln!(
            out,
            "{:>8} {:>9} {:>9} {:>9} {:>9} {:>7} {:>7} {:>10}  {:<22} {:<22}",
            "n", "t_bk", "t_gmw", "t_he", "total", "ratio", "rounds", "bytes", "conv Cllr/minDCF/EER", "pruned Cllr/minDCF/EER"
        );
        for r in &self.rows {
            let t = &r.timing;
            let _ = writeln!(
                out,
                "{:>8} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>7.2} {:>7} {:>10}  {:<22} {:<22}",
                r.n.map_or("baseline".to_string(), |n| n.to_string()),
                t.t_bk,
                t.t_gmw,
                t.t_he,
                t.total,
                t.ratio,
                t.rounds,
                t.bytes,
                metric_triple(&r.conventional),
                r.pruned.as_ref().map_or("-".to_string(), metric_triple)
            );
        }
        out
    }

    /// One JSON record per row.
    pub fn to_json_lines(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("rows serialise") + "\n")
            .collect()
    }

    pub fn from_json_lines(text: &str, header: BenchReport) -> Result<BenchReport> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(e.to_string())))
            .collect::<Result<Vec<BenchRow>>>()?;
        Ok(BenchReport { rows, ..header })
    }
}

fn metric_triple(m: &Metrics) -> String {
    format!("{:.3} / {:.3} / {:.2}", m.cllr_min, m.min_dcf, 100.0 * m.eer)
}

/// Sides are computed once at the largest `n`; selection order is by rank,
/// so the prefix of length `n` is the top-n set.
fn prefix_norm(r: &SideResult, p: &SideResult, raw: f64, n: usize) -> Result<f64> {
    let rs = norm_stats(&r.scores[..n.min(r.scores.len())], CohortSelect::All, r.stats.source)?;
    let ps = norm_stats(&p.scores[..n.min(p.scores.len())], CohortSelect::All, p.stats.source)?;
    s_norm(raw, &rs, &ps)
}

struct ModeScores {
    raw: Vec<f64>,
    sides: Vec<(SideResult, SideResult)>,
}

fn run_mode(system: &mut System, corpus: &Corpus, trials: &[Trial], mode: TrialMode, n: usize) -> Result<ModeScores> {
    system.config.mode = mode;
    system.config.n = n;
    let mut rng = stream(system.config.seed, "bench-trials", mode as u64);
    let (refs, probes) = trial_inputs(system, corpus, trials, &mut rng)?;
    let records = system.run_trials(&refs, &probes, trials, &mut rng)?;
    Ok(ModeScores {
        raw: records.iter().map(|r| r.raw).collect(),
        sides: records.into_iter().map(|r| (r.r, r.p)).collect(),
    })
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

struct Timings {
    t_bk: f64,
    t_he: f64,
    /// Per n: (t_gmw, rounds, bytes).
    gmw: Vec<(f64, u64, u64)>,
}

fn measure(system: &System, corpus: &Corpus, trials: &[Trial], cfg: &BenchConfig) -> Result<Timings> {
    let reps = cfg.timing_samples;
    let probe_ids: Vec<&str> = trials.iter().map(|t| t.probe_id.as_str()).take(reps).collect();
    let mut t_bk = 0.0;
    let mut prepared = Vec::new();
    for id in &probe_ids {
        let s = corpus.sample(id)?;
        let frames = s.frames.as_ref().ok_or_else(|| Error::Format(format!("sample {id} has no frames")))?;
        let clock = Stopwatch::start();
        system.extractor.extract(frames)?;
        t_bk += secs(clock.elapsed());
        prepared.push(prepare_corpus_sample(system, corpus, id)?);
    }
    t_bk /= probe_ids.len() as f64;

    let keys = if cfg.timing_key_bits == system.keys.public.key_bits() {
        system.keys.clone()
    } else {
        keygen(cfg.timing_key_bits, derive_seed(cfg.pipeline.seed, "timing-keys", 0))?
    };
    let s = cfg.pipeline.scale_bits;
    let mut rng = stream(cfg.pipeline.seed, "bench-timing", 0);
    let template = protect_reference(&keys.public, &system.form, &prepared[0].embedding, s, &mut rng)?;
    let cohort = system.z_cohort.entries();
    let mut t_he = 0.0;
    for e in cohort.iter().take(reps) {
        let clock = Stopwatch::start();
        let c = he_plda_score(&keys.public, &system.form, &template, &e.embedding, s, &mut rng)?;
        decrypt_score(&keys, &c, s)?;
        t_he += secs(clock.elapsed());
    }
    t_he /= reps.min(cohort.len()) as f64;

    let net = cfg.pipeline.net()?;
    let opts = PruneOptions {
        exec: cfg.pipeline.exec(),
        mode: NetMode::resolve(cfg.pipeline.net_mode)?,
        record_transcript: false,
    };
    let ids: Vec<u64> = cohort.iter().map(|e| e.id).collect();
    let mut gmw = Vec::new();
    for &n in &cfg.n_grid {
        let n = n.min(cohort.len());
        let (mut t, mut rounds, mut bytes) = (0.0, 0, 0);
        for p in &prepared {
            let (a, b) = share_bits(p.bk.bits(), 0, &mut rng);
            let shares = [0, 1].map(|i| cohort.iter().map(|e| e.shares[i].clone()).collect());
            let session = run_prune_on_shares([a, b], shares, &ids, system.extractor.k, n, &mut rng, opts)?;
            t += session.stats.wall_time + simulated_time(&session.stats, &net);
            rounds = session.stats.rounds;
            bytes = session.stats.total_bytes();
        }
        gmw.push((t / prepared.len() as f64, rounds, bytes));
    }
    Ok(Timings { t_bk, t_he, gmw })
}

pub fn bench_run(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let corpus = build_corpus(&cfg.corpus)?;
    bench_on_corpus(&corpus, cfg)
}

pub fn bench_on_corpus(corpus: &Corpus, cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let mut trials = corpus.trials.clone();
    if let Some(max) = cfg.max_trials {
        trials.truncate(max);
    }
    let labels: Vec<bool> = trials.iter().map(|t| t.label.is_target()).collect();
    let mcfg = MetricConfig::default();
    let mut system = build_system(corpus, cfg.pipeline.clone(), None)?;
    let cohort_size = system.z_cohort.len();
    let n_max = (*cfg.n_grid.iter().max().expect("validated")).min(cohort_size);

    let conventional = run_mode(&mut system, corpus, &trials, TrialMode::PlaintextScores, n_max)?;
    let pruned_source = if cfg.dry_run {
        TrialMode::PlaintextBk
    } else {
        TrialMode::Protected
    };
    let pruned = run_mode(&mut system, corpus, &trials, pruned_source, n_max)?;
    system.config = cfg.pipeline.clone();

    let timings = if cfg.dry_run {
        None
    } else {
        Some(measure(&system, corpus, &trials, cfg)?)
    };

    let mut rows = Vec::with_capacity(cfg.n_grid.len() + 1);
    let full_he = timings.as_ref().map_or(0.0, |t| cohort_size as f64 * t.t_he);
    rows.push(BenchRow {
        n: None,
        timing: RowTiming {
            t_he: full_he,
            total: full_he,
            ratio: if timings.is_some() { 1.0 } else { 0.0 },
            ..Default::default()
        },
        conventional: evaluate(&conventional.raw, &labels, &mcfg)?,
        pruned: None,
    });
    for (i, &n) in cfg.n_grid.iter().enumerate() {
        let norm = |m: &ModeScores| {
            m.sides
                .iter()
                .zip(&m.raw)
                .map(|((r, p), &raw)| prefix_norm(r, p, raw, n))
                .collect::<Result<Vec<f64>>>()
        };
        let timing = match &timings {
            None => RowTiming::default(),
            Some(t) => {
                let (t_gmw, rounds, bytes) = t.gmw[i];
                let ledger = TimingLedger {
                    t_bk: t.t_bk,
                    t_gmw,
                    t_he_per_cmp: t.t_he,
                    cohort_size,
                    n: n.min(cohort_size),
                };
                RowTiming {
                    t_bk: t.t_bk,
                    t_gmw,
                    t_he: ledger.n as f64 * t.t_he,
                    total: ledger.pruned_time(),
                    ratio: improvement_ratio(cohort_size, &ledger)?,
                    rounds,
                    bytes,
                }
            }
        };
        rows.push(BenchRow {
            n: Some(n),
            timing,
            conventional: evaluate(&norm(&conventional)?, &labels, &mcfg)?,
            pruned: Some(evaluate(&norm(&pruned)?, &labels, &mcfg)?),
        });
    }
    Ok(BenchReport {
        trials: trials.len(),
        cohort_size,
        pruned_source,
        timing_key_bits: if cfg.dry_run { 0 } else { cfg.timing_key_bits },
        rows,
    })
}
