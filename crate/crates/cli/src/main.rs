use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bkprune::bench::{bench_run, format_ratio_table, reference_ratios, BenchConfig, BenchReport};
use bkprune::format::id_hash;
use bkprune::metrics::{evaluate, MetricConfig};
use bkprune::paillier::{keygen, read_keypair, write_keypair, write_public_key, Keypair, ProtectedTemplate};
use bkprune::pipeline::{
    build_system, prepare_corpus_sample, read_scores, trial_inputs, write_scores, Enrollment, PipelineConfig, Reference,
    System, TrialMode,
};
use bkprune::rng::stream;
use bkprune::smpc::{read_shares, write_shares, BooleanShare};
use bkprune::synth::{build_corpus, read_trials, Corpus, CorpusConfig};
use bkprune::transport::NetMode;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bkprune", version, about = "Privacy-preserving adaptive score normalisation with binary-key cohort pruning")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Pipeline settings file (TOML); flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Cohort entries kept per side.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// plaintext_scores, plaintext_bk or protected.
    #[arg(long, global = true)]
    mode: Option<TrialMode>,
    #[arg(long, global = true)]
    key_bits: Option<usize>,
    #[arg(long, global = true)]
    scale_bits: Option<u32>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    bandwidth_bps: Option<f64>,
    #[arg(long, global = true)]
    rtt_ms: Option<f64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

impl Common {
    fn pipeline(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::read(p).with_context(|| format!("reading {}", p.display()))?,
            None => PipelineConfig::default(),
        };
        self.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(v) = self.n {
            cfg.n = v;
        }
        if let Some(v) = self.mode {
            cfg.mode = v;
        }
        if let Some(v) = self.key_bits {
            cfg.key_bits = v;
        }
        if let Some(v) = self.scale_bits {
            cfg.scale_bits = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.bandwidth_bps {
            cfg.bandwidth_bps = v;
        }
        if let Some(v) = self.rtt_ms {
            cfg.rtt_ms = v;
        }
    }

    fn out(&self) -> Result<&Path> {
        self.out.as_deref().context("--out is required")
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus directory.
    Synth {
        /// Corpus settings file (TOML).
        #[arg(long)]
        corpus_config: Option<PathBuf>,
        /// Shrink the corpus for quick runs.
        #[arg(long)]
        small: bool,
    },
    /// Generate a Paillier keypair; also writes `<out>.pub`.
    Keygen,
    /// Enroll samples: encrypted templates plus one share file per server.
    Enroll {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        key: Option<PathBuf>,
        /// Samples to enroll; defaults to every trial reference.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
    },
    /// Score a trial list and write `ref probe raw normalised label` lines.
    Trial {
        #[arg(long)]
        corpus: PathBuf,
        /// Trial list; defaults to the corpus trial list.
        #[arg(long)]
        trials: Option<PathBuf>,
        #[arg(long)]
        key: Option<PathBuf>,
        /// Directory written by `enroll`, used for protected references.
        #[arg(long)]
        enrolled: Option<PathBuf>,
        /// Run both servers over loopback TCP.
        #[arg(long)]
        socket: bool,
        /// Audit every protocol transcript.
        #[arg(long)]
        audit: bool,
    },
    /// Measure runtimes and metrics over a grid of n.
    Bench {
        /// Benchmark settings file (TOML).
        #[arg(long)]
        bench_config: Option<PathBuf>,
        #[arg(long)]
        dry_run: bool,
        /// Comma-separated cohort sizes.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<usize>,
        #[arg(long)]
        timing_key_bits: Option<usize>,
        #[arg(long)]
        max_trials: Option<usize>,
        #[arg(long)]
        small: bool,
    },
    /// EER, minDCF and Cllr_min of a score file.
    Eval {
        scores: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        prior: f64,
    },
    /// Print a bench record file as a table, or recompute the published
    /// improvement ratios when no file is given.
    Report { records: Option<PathBuf> },
}

fn small_corpus() -> CorpusConfig {
    CorpusConfig {
        train_speakers: 120,
        cohort_speakers: 32,
        trial_speakers: 16,
        probe_sessions: 2,
        nontarget_trials: 200,
        ..Default::default()
    }
}

fn load_keys(path: Option<&Path>, cfg: &PipelineConfig) -> Result<Option<Keypair>> {
    match path {
        Some(p) => {
            let kp = read_keypair(&mut BufReader::new(File::open(p).with_context(|| format!("opening {}", p.display()))?))?;
            Ok(Some(kp))
        }
        None if cfg.mode == TrialMode::Protected => {
            log::info!("no --key given; generating a {}-bit keypair", cfg.key_bits);
            Ok(None)
        }
        None => Ok(Some(keygen(256, cfg.seed)?)),
    }
}

const ENROLLED_INDEX: &str = "enrolled.tsv";

fn share_file(party: u8) -> String {
    format!("server{party}.shr")
}

fn enroll(system: &System, corpus: &Corpus, ids: &[String], dir: &Path) -> Result<usize> {
    fs::create_dir_all(dir)?;
    let mut rng = stream(system.config.seed, "cli-enroll", 0);
    let mut index = BufWriter::new(File::create(dir.join(ENROLLED_INDEX))?);
    let mut shares: [Vec<BooleanShare>; 2] = [Vec::new(), Vec::new()];
    for id in ids {
        let sample = prepare_corpus_sample(system, corpus, id)?;
        let mut e = system.enroll(&sample, &mut rng)?;
        let tag = id_hash(id);
        let file = format!("{tag:016x}.hetp");
        e.template.write(&mut BufWriter::new(File::create(dir.join(&file))?))?;
        writeln!(index, "{id}\t{tag:016x}\t{file}")?;
        for (p, s) in e.bk_shares.iter_mut().enumerate() {
            s.tag = tag;
            shares[p].push(s.clone());
        }
    }
    index.flush()?;
    let n_bits = system.extractor.kbm.len();
    for (p, list) in shares.iter().enumerate() {
        write_shares(&mut BufWriter::new(File::create(dir.join(share_file(p as u8)))?), p as u8, n_bits, list)?;
    }
    Ok(ids.len())
}

fn load_enrolled(system: &System, dir: &Path) -> Result<HashMap<String, Reference>> {
    let mut by_tag: [HashMap<u64, BooleanShare>; 2] = [HashMap::new(), HashMap::new()];
    for p in 0..2u8 {
        let path = dir.join(share_file(p));
        for s in read_shares(&mut BufReader::new(File::open(&path).with_context(|| format!("opening {}", path.display()))?))? {
            by_tag[p as usize].insert(s.tag, s);
        }
    }
    let index = fs::read_to_string(dir.join(ENROLLED_INDEX))?;
    let mut out = HashMap::new();
    for line in index.lines().filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            bail!("bad index line {line:?}");
        }
        let tag = u64::from_str_radix(f[1], 16)?;
        let template = ProtectedTemplate::read(&mut BufReader::new(File::open(dir.join(f[2]))?))?;
        if template.key_id != system.keys.public.id() || template.form_id != system.form.id() {
            bail!("template for {} was made with a different key or model", f[0]);
        }
        let share = |p: usize| by_tag[p].get(&tag).cloned().with_context(|| format!("no share for {}", f[0]));
        let e = Enrollment {
            sample_id: f[0].to_string(),
            template,
            bk_shares: [share(0)?, share(1)?],
        };
        out.insert(f[0].to_string(), Reference::Enrolled(e));
    }
    Ok(out)
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.common;
    match cli.command {
        Command::Synth { corpus_config, small } => {
            let mut cfg = match corpus_config {
                Some(p) => toml_corpus(&p)?,
                None if small => small_corpus(),
                None => CorpusConfig::default(),
            };
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            let corpus = build_corpus(&cfg)?;
            corpus.write_dir(common.out()?)?;
            println!(
                "{} samples, {} trials written to {}",
                corpus.samples.len(),
                corpus.trials.len(),
                common.out()?.display()
            );
        }
        Command::Keygen => {
            let cfg = common.pipeline()?;
            let out = common.out()?;
            let kp = keygen(cfg.key_bits, cfg.seed)?;
            write_keypair(&mut BufWriter::new(File::create(out)?), &kp)?;
            let mut pub_path = out.as_os_str().to_owned();
            pub_path.push(".pub");
            write_public_key(&mut BufWriter::new(File::create(&pub_path)?), &kp.public)?;
            println!("{}-bit keypair {:016x} written to {}", kp.key_bits(), kp.public.id(), out.display());
        }
        Command::Enroll { corpus, key, ids } => {
            let cfg = common.pipeline()?;
            let corpus = Corpus::read_dir(&corpus)?;
            let keys = load_keys(key.as_deref(), &PipelineConfig { mode: TrialMode::Protected, ..cfg.clone() })?;
            let system = build_system(&corpus, cfg, keys)?;
            let ids = if ids.is_empty() {
                let mut v: Vec<String> = corpus.trials.iter().map(|t| t.ref_id.clone()).collect();
                v.sort();
                v.dedup();
                v
            } else {
                ids
            };
            let count = enroll(&system, &corpus, &ids, common.out()?)?;
            println!("{count} samples enrolled into {}", common.out()?.display());
        }
        Command::Trial {
            corpus,
            trials,
            key,
            enrolled,
            socket,
            audit,
        } => {
            let mut cfg = common.pipeline()?;
            cfg.audit |= audit;
            if socket {
                cfg.net_mode = NetMode::Socket;
                cfg.threaded = true;
            }
            let corpus = Corpus::read_dir(&corpus)?;
            let trials = match trials {
                Some(p) => read_trials(BufReader::new(File::open(&p)?))?,
                None => corpus.trials.clone(),
            };
            let keys = load_keys(key.as_deref(), &cfg)?;
            let system = build_system(&corpus, cfg, keys)?;
            let mut rng = stream(system.config.seed, "cli-trial", 0);
            let (mut refs, probes) = trial_inputs(&system, &corpus, &trials, &mut rng)?;
            if let Some(dir) = enrolled {
                if system.config.mode != TrialMode::Protected {
                    bail!("--enrolled needs --mode protected");
                }
                for (id, r) in load_enrolled(&system, &dir)? {
                    refs.insert(id, r);
                }
            }
            let records = system.run_trials(&refs, &probes, &trials, &mut rng)?;
            let mut buf = Vec::new();
            write_scores(&mut buf, &records)?;
            write_out(common.out.as_deref(), std::str::from_utf8(&buf)?)?;
            let mut stats = bkprune::transport::ChannelStats::default();
            for r in &records {
                stats.add(&r.prune_stats());
            }
            log::info!(
                "{} trials in {} mode; pruning traffic {} rounds, {} bytes",
                records.len(),
                system.config.mode,
                stats.rounds,
                stats.total_bytes()
            );
        }
        Command::Bench {
            bench_config,
            dry_run,
            grid,
            timing_key_bits,
            max_trials,
            small,
        } => {
            let mut cfg = match bench_config {
                Some(p) => BenchConfig::read(&p)?,
                None => BenchConfig::default(),
            };
            if small {
                cfg.corpus = small_corpus();
            }
            common.apply(&mut cfg.pipeline);
            if let Some(seed) = common.seed {
                cfg.corpus.seed = seed;
            }
            cfg.dry_run |= dry_run;
            if !grid.is_empty() {
                cfg.n_grid = grid;
            }
            if let Some(b) = timing_key_bits {
                cfg.timing_key_bits = b;
            }
            if max_trials.is_some() {
                cfg.max_trials = max_trials;
            }
            let report = bench_run(&cfg)?;
            print!("{}", report.to_table());
            if let Some(out) = &common.out {
                fs::write(out, header_line(&report)? + &report.to_json_lines())?;
            }
        }
        Command::Eval { scores, prior } => {
            let lines = read_scores(BufReader::new(File::open(&scores)?))?;
            let labelled: Vec<_> = lines.iter().filter(|l| l.label.is_some()).collect();
            let labels: Vec<bool> = labelled.iter().map(|l| l.label.unwrap().is_target()).collect();
            let cfg = MetricConfig {
                effective_prior: prior,
                ..Default::default()
            };
            let mut text = format!("{:<11} {:>9} {:>9} {:>8}\n", "scores", "Cllr_min", "minDCF", "EER(%)");
            for (name, pick) in [("raw", 0), ("normalised", 1)] {
                let s: Vec<f64> = labelled.iter().map(|l| if pick == 0 { l.raw } else { l.normalized }).collect();
                let m = evaluate(&s, &labels, &cfg)?;
                text += &format!("{:<11} {:>9.4} {:>9.4} {:>8.3}\n", name, m.cllr_min, m.min_dcf, 100.0 * m.eer);
            }
            write_out(common.out.as_deref(), &text)?;
        }
        Command::Report { records } => {
            let text = match records {
                None => format_ratio_table(&reference_ratios()?),
                Some(p) => {
                    let content = fs::read_to_string(&p)?;
                    let (head, rows) = content.split_once('\n').unwrap_or((&content, ""));
                    let header: BenchReport = serde_json::from_str(head).context("bench record header")?;
                    BenchReport::from_json_lines(rows, header)?.to_table()
                }
            };
            write_out(common.out.as_deref(), &text)?;
        }
    }
    Ok(())
}

/// First line of a bench record file: the report without its rows.
fn header_line(report: &BenchReport) -> Result<String> {
    let header = BenchReport {
        rows: Vec::new(),
        ..report.clone()
    };
    Ok(serde_json::to_string(&header)? + "\n")
}

fn toml_corpus(path: &Path) -> Result<CorpusConfig> {
    let text = fs::read_to_string(path)?;
    let cfg: CorpusConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
