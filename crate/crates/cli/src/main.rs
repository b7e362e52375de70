//! `stereonas`: data generation, architecture search, decoding, training and
//! evaluation from the command line.
//!
//! All commands share one run directory (`--out`):
//!
//! ```text
//! run/data/                  gen-data: manifest.txt + left/right/disp/mask PFMs
//! run/search/                search: ledgers, arch.json, genotype.txt
//! run/genotype.txt           decode
//! run/train/                 train: checkpoint.json, ledger.jsonl
//! run/eval/report.txt        eval
//! ```
//!
//! Every artifact directory also gets `config.txt` (canonical config echo) and
//! `run.txt` (seed, parallelism, versions, parameter counts).

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use stereonas::cell::OpsetVariant;
use stereonas::checkpoint::Checkpoint;
use stereonas::config::{CellVariant, RunConfig};
use stereonas::data::Dataset;
use stereonas::decode::decode_supernet;
use stereonas::discrete::build_discrete;
use stereonas::genotype::{Genotype, HEADER};
use stereonas::search::{
    bilevel_search, train_weights, ArchSnapshot, LedgerRecord, SearchMode, Sgd, SplitDataset,
};
use stereonas::stereo::{evaluate, SuperNet};
use stereonas::ParamGroup;

#[derive(Parser)]
#[command(name = "stereonas", version, about = "Architecture search for stereo matching on random-dot stereograms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random-dot stereogram dataset into OUT/data.
    GenData(Common),
    /// Run the bilevel architecture search and decode its final state.
    Search(Common),
    /// Decode a genotype from the search's architecture snapshots.
    Decode {
        #[command(flatten)]
        common: Common,
        /// Snapshot epoch to decode (default: the last one).
        #[arg(long)]
        epoch: Option<usize>,
    },
    /// Train the network described by a genotype.
    Train {
        #[command(flatten)]
        common: Common,
        /// Genotype file (default: OUT/genotype.txt).
        #[arg(long)]
        genotype: Option<PathBuf>,
        /// Continue from OUT/train/checkpoint.json.
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed epochs.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate trained weights on the held-out pairs.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint (default: OUT/train/checkpoint.json).
        #[arg(long)]
        weights: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory (default: OUT/data).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    search_mode: Option<SearchMode>,
    #[arg(long)]
    cell: Option<CellVariant>,
    #[arg(long)]
    opset: Option<OpsetVariant>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            c.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(o) = &self.out {
            c.out = o.clone();
        }
        if let Some(m) = self.search_mode {
            c.search_mode = m;
        }
        if let Some(v) = self.cell {
            c.net.cell = v;
        }
        if let Some(v) = self.opset {
            c.net.opset = v;
        }
        c.validate()?;
        Ok(c)
    }

    fn data_dir(&self, c: &RunConfig) -> PathBuf {
        self.data.clone().unwrap_or_else(|| c.out.join("data"))
    }
}

fn write_meta(dir: &Path, command: &str, c: &RunConfig, extra: &[(&str, String)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), c.to_text())?;
    let mut meta = String::new();
    meta.push_str(&format!("command = {command}\n"));
    meta.push_str(&format!("version = {}\n", env!("CARGO_PKG_VERSION")));
    meta.push_str(&format!("genotype_format = {HEADER}\n"));
    meta.push_str(&format!("checkpoint_format = {}\n", stereonas::checkpoint::FORMAT));
    meta.push_str(&format!("seed = {}\n", c.seed));
    meta.push_str(&format!("threads = {}\n", c.threads));
    for (k, v) in extra {
        meta.push_str(&format!("{k} = {v}\n"));
    }
    fs::write(dir.join("run.txt"), meta)?;
    Ok(())
}

fn load_dataset(dir: &Path, c: &RunConfig) -> Result<Dataset> {
    let d = Dataset::load(dir).with_context(|| format!("cannot load dataset from {} (run gen-data first)", dir.display()))?;
    if d.max_disparity != c.data.max_disparity {
        bail!(
            "dataset max disparity {} differs from config data.max_disparity {}",
            d.max_disparity,
            c.data.max_disparity
        );
    }
    Ok(d)
}

/// Streams ledger records to a JSON-lines file and reports per-epoch means.
struct LedgerSink {
    out: BufWriter<File>,
    epoch: Option<usize>,
    /// `(phase, loss sum, batches)` in order of first appearance.
    phases: Vec<(String, f64, usize)>,
}

impl LedgerSink {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .with_context(|| format!("cannot open {}", path.display()))?;
        Ok(Self {
            out: BufWriter::new(file),
            epoch: None,
            phases: Vec::new(),
        })
    }

    fn push(&mut self, r: &LedgerRecord) -> std::io::Result<()> {
        if self.epoch != Some(r.epoch) {
            self.flush_summary();
            self.epoch = Some(r.epoch);
        }
        match self.phases.iter_mut().find(|p| p.0 == r.phase) {
            Some(p) => {
                p.1 += r.loss;
                p.2 += 1;
            }
            None => self.phases.push((r.phase.clone(), r.loss, 1)),
        }
        writeln!(self.out, "{}", serde_json::to_string(r).expect("ledger record serialises"))
    }

    fn flush_summary(&mut self) {
        if let Some(e) = self.epoch {
            let parts: Vec<String> = self
                .phases
                .iter()
                .map(|(phase, sum, n)| format!("{phase} {:.4} ({n})", sum / *n as f64))
                .collect();
            eprintln!("epoch {e}: mean loss {}", parts.join(", "));
        }
        self.phases.clear();
    }

    fn finish(mut self) -> Result<()> {
        self.flush_summary();
        self.out.flush()?;
        Ok(())
    }
}

fn write_jsonl<'a>(path: &Path, records: impl Iterator<Item = &'a LedgerRecord>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    out.flush()?;
    Ok(())
}

fn gen_data(common: &Common) -> Result<()> {
    let c = common.config()?;
    let dir = common.data_dir(&c);
    let d = Dataset::generate(&c.generate_options())?;
    d.write(&dir)?;
    write_meta(&dir, "gen-data", &c, &[("samples", d.len().to_string())])?;
    println!("samples: {}", d.len());
    println!("held_out: {}", d.held_out);
    println!("dir: {}", dir.display());
    Ok(())
}

fn search(common: &Common) -> Result<()> {
    let c = common.config()?;
    let data = load_dataset(&common.data_dir(&c), &c)?;
    let dir = c.out.join("search");
    fs::create_dir_all(&dir)?;
    let (net, mut store) = SuperNet::new(c.supernet(), c.seed);
    let supernet_params = store.weight_count();
    eprintln!("supernet weights: {supernet_params}");
    let split = SplitDataset::halves(data.train_indices(), data.held_out_indices())?;
    let mut sink = LedgerSink::open(&dir.join("ledger.jsonl"), false)?;
    let outcome = bilevel_search(
        &net,
        &mut store,
        &data.samples,
        &split,
        &c.search,
        c.search_mode,
        c.data.max_disparity,
        c.seed,
        |r| Ok(sink.push(r)?),
    );
    sink.finish()?;
    let outcome = outcome?;
    if c.search_mode == SearchMode::Separate {
        for (file, phase) in [("ledger_feature.jsonl", "arch_feature"), ("ledger_matching.jsonl", "arch_matching")] {
            write_jsonl(&dir.join(file), outcome.ledger.iter().filter(|r| r.phase == phase))?;
        }
    }
    fs::write(dir.join("arch.json"), serde_json::to_string(&outcome.history)?)?;
    let genotype = decode_supernet(&net, &store, &c.net.extra_skips);
    let text = genotype.to_text();
    fs::write(dir.join("genotype.txt"), &text)?;
    let (_, discrete) = build_discrete(&genotype, &c.discrete(), c.seed)?;
    write_meta(
        &dir,
        "search",
        &c,
        &[
            ("supernet_params", supernet_params.to_string()),
            ("decoded_params", discrete.weight_count().to_string()),
        ],
    )?;
    print!("{text}");
    println!("supernet_params: {supernet_params}");
    println!("decoded_params: {}", discrete.weight_count());
    Ok(())
}

fn decode(common: &Common, epoch: Option<usize>) -> Result<()> {
    let flags = common.config()?;
    let search_dir = flags.out.join("search");
    let cfg_path = search_dir.join("config.txt");
    let c = RunConfig::parse(
        &fs::read_to_string(&cfg_path).with_context(|| format!("cannot read {} (run search first)", cfg_path.display()))?,
    )?;
    let history: Vec<ArchSnapshot> = serde_json::from_str(&fs::read_to_string(search_dir.join("arch.json"))?)
        .context("malformed arch.json")?;
    let snapshot = match epoch {
        Some(e) => history
            .iter()
            .find(|s| s.epoch == e)
            .with_context(|| format!("no architecture snapshot for epoch {e}"))?,
        None => history.last().context("arch.json holds no snapshots")?,
    };
    let (net, mut store) = SuperNet::new(c.supernet(), c.seed);
    snapshot.restore(&mut store)?;
    let genotype = decode_supernet(&net, &store, &c.net.extra_skips);
    let text = genotype.to_text();
    fs::write(flags.out.join("genotype.txt"), &text)?;
    let (_, discrete) = build_discrete(&genotype, &c.discrete(), c.seed)?;
    print!("{text}");
    println!("snapshot_epoch: {}", snapshot.epoch);
    println!("supernet_params: {}", store.weight_count());
    println!("params: {}", discrete.weight_count());
    Ok(())
}

fn train(common: &Common, genotype: Option<&Path>, resume: bool, stop_after: Option<usize>) -> Result<()> {
    let c = common.config()?;
    let data = load_dataset(&common.data_dir(&c), &c)?;
    let dir = c.out.join("train");
    fs::create_dir_all(&dir)?;
    let ckpt_path = dir.join("checkpoint.json");
    let (net, mut store, mut opt, start) = if resume {
        let ck = Checkpoint::read(&ckpt_path).with_context(|| format!("cannot resume from {}", ckpt_path.display()))?;
        if ck.seed != c.seed {
            bail!("checkpoint was trained with seed {}, config has {}", ck.seed, c.seed);
        }
        let (net, store, opt) = ck.restore(c.train.momentum, c.train.weight_decay)?;
        (net, store, opt, ck.epoch)
    } else {
        let path = genotype.map(Path::to_path_buf).unwrap_or_else(|| c.out.join("genotype.txt"));
        let text = fs::read_to_string(&path).with_context(|| format!("cannot read genotype {}", path.display()))?;
        let g = Genotype::parse(&text)?;
        if g.matching_path.len() != c.net.matching_layers || g.feature_path.len() != c.net.feature_layers {
            bail!(
                "genotype has {}/{} layers, config expects {}/{}",
                g.feature_path.len(),
                g.matching_path.len(),
                c.net.feature_layers,
                c.net.matching_layers
            );
        }
        let (net, store) = build_discrete(&g, &c.discrete(), c.seed)?;
        let opt = Sgd::new(
            &store,
            store.ids_in(|g| g == ParamGroup::Weight),
            c.train.momentum,
            c.train.weight_decay,
        );
        (net, store, opt, 0)
    };
    let end = stop_after.unwrap_or(c.train.epochs).min(c.train.epochs);
    if start >= end {
        bail!("nothing to do: checkpoint is at epoch {start}, stopping at {end}");
    }
    let params = store.weight_count();
    let mut sink = LedgerSink::open(&dir.join("ledger.jsonl"), resume)?;
    let indices: Vec<usize> = data.train_indices().collect();
    let result = train_weights(
        &net,
        &mut store,
        &mut opt,
        &data.samples,
        &indices,
        &c.train,
        start..end,
        c.data.max_disparity,
        c.seed,
        |r| Ok(sink.push(r)?),
    );
    sink.finish()?;
    result?;
    Checkpoint::capture(&net, &store, &opt, c.seed, end).write(&ckpt_path)?;
    fs::write(dir.join("genotype.txt"), net.genotype.to_text())?;
    write_meta(&dir, "train", &c, &[("params", params.to_string()), ("epoch", end.to_string())])?;
    println!("epoch: {end}");
    println!("params: {params}");
    Ok(())
}

fn eval(common: &Common, weights: Option<&Path>) -> Result<()> {
    let start = Instant::now();
    let c = common.config()?;
    let data = load_dataset(&common.data_dir(&c), &c)?;
    let path = weights
        .map(Path::to_path_buf)
        .unwrap_or_else(|| c.out.join("train").join("checkpoint.json"));
    let ck = Checkpoint::read(&path).with_context(|| format!("cannot read weights {}", path.display()))?;
    let (net, store, _) = ck.restore(c.train.momentum, c.train.weight_decay)?;
    let held: Vec<_> = data.held_out_indices().map(|i| &data.samples[i]).collect();
    if held.is_empty() {
        bail!("dataset has no held-out pairs");
    }
    let r = evaluate(&net, &store, &held, c.data.max_disparity)?;
    let report = format!(
        "epe: {:.6}\nbad1: {:.4}\nparams: {}\nsamples: {}\nwall_time_s: {:.3}\n",
        r.epe,
        r.bad1,
        store.weight_count(),
        r.samples,
        start.elapsed().as_secs_f64()
    );
    let dir = c.out.join("eval");
    write_meta(&dir, "eval", &c, &[("params", store.weight_count().to_string())])?;
    fs::write(dir.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => gen_data(&c),
        Command::Search(c) => search(&c),
        Command::Decode { common, epoch } => decode(&common, epoch),
        Command::Train {
            common,
            genotype,
            resume,
            stop_after,
        } => train(&common, genotype.as_deref(), resume, stop_after),
        Command::Eval { common, weights } => eval(&common, weights.as_deref()),
    }
}

/// Joins a multi-line message into one line.
fn one_line(s: &str) -> String {
    s.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()).trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
