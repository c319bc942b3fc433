//! Command-line entry points: corpus generation, training, evaluation,
//! sweeps over corruption cells, ablation runs, and the self-test.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Ablation, Cell, ExperimentConfig, Switch};
use crate::datasim::{generate, read_corpus, write_corpus, Corpus};
use crate::experiment::{cell_corpus, evaluate_corpus, CellResult};
use crate::fusion::modality_weights;
use crate::metrics::{auroc, classification_metrics};
use crate::model::DualModel;
use crate::numerics::gradcheck::{check_all, OP_TOLERANCE};
use crate::training::{train_with, EpochLog, Evaluation, TrainOutcome};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Parser)]
#[command(name = "dualfuse", version, about = "Uncertainty-weighted multimodal fusion on synthetic health streams")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate a corpus file from the config's corpus section.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output corpus file.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the corpus seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write a checkpoint and per-epoch log.
    Train(RunArgs),
    /// Evaluate a checkpoint on one corruption cell.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cell: CellArgs,
    },
    /// Train and evaluate every cell of the config's sweep grid.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Cells run concurrently, each in its own process.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, value_delimiter = ',')]
        ablate: Vec<Switch>,
    },
    /// Train with ablation switches, then evaluate on the corpus test split.
    Ablate(RunArgs),
    /// Run the finite-difference and invariant checks.
    Selftest {
        /// Random draws per operation.
        #[arg(long, default_value_t = 3)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Runs one sweep cell; used by `sweep --jobs`.
    #[command(hide = true)]
    SweepCell {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cell: String,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus file; generated from the config when omitted.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub ablate: Vec<Switch>,
}

#[derive(Debug, Args)]
pub struct CellArgs {
    /// Regenerate the corpus at this noise rate.
    #[arg(long)]
    pub noise_rate: Option<f64>,
    /// Regenerate the corpus at this missing rate.
    #[arg(long)]
    pub missing_rate: Option<f64>,
    /// Modality whose reconstruction is scored (and masked, with
    /// `--missing-rate`).
    #[arg(long)]
    pub missing_modality: Option<usize>,
}

/// Provenance written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub ablation: String,
    /// Hashes of input files, keyed by role.
    pub inputs: Vec<(String, String)>,
}

impl RunManifest {
    fn new(command: &str, cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            version: VERSION.to_string(),
            seed,
            config_hash: config_hash(cfg)?,
            ablation: cfg.ablation.label(),
            inputs: Vec::new(),
        })
    }

    fn with_input(mut self, role: &str, path: &Path) -> Result<Self> {
        self.inputs.push((role.to_string(), file_hash(path)?));
        Ok(self)
    }

    fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

/// SHA-256 of the config's canonical JSON serialization.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    Ok(hex(&Sha256::digest(serde_json::to_vec(cfg)?)))
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let cfg = match path {
        None => ExperimentConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("config file {} not readable", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("config file {} is not a valid config", p.display()))?
        }
    };
    cfg.validate().context("invalid config")?;
    Ok(cfg)
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = File::open(path).with_context(|| format!("corpus file {} not found or unreadable", path.display()))?;
    read_corpus(BufReader::new(file)).with_context(|| format!("corpus file {} is malformed", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("cannot create output directory {}", path.display()))
}

/// Writes via a sibling temporary file and a rename, so readers never see a
/// partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("cannot write {}", path.display()))
}

fn apply_overrides(cfg: &mut ExperimentConfig, seed: Option<u64>, ablate: &[Switch]) {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    for &sw in ablate {
        cfg.ablation.set(sw);
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Gen { config, out, seed } => cmd_gen(config.as_deref(), &out, seed),
        Cmd::Train(args) => cmd_train(&args).map(|_| ()),
        Cmd::Eval { checkpoint, corpus, out, cell } => cmd_eval(&checkpoint, &corpus, &out, &cell),
        Cmd::Sweep { config, out, seed, jobs, ablate } => cmd_sweep(config.as_deref(), &out, seed, jobs, &ablate),
        Cmd::Ablate(args) => cmd_ablate(&args),
        Cmd::Selftest { trials, seed } => cmd_selftest(trials, seed),
        Cmd::SweepCell { config, out, cell } => {
            let cfg = load_config(Some(&config))?;
            let cell = cfg.sweep.cells().into_iter().find(|c| c.id() == cell).with_context(|| format!("cell {cell} is not in the sweep grid"))?;
            run_sweep_cell(&cfg, &cell, &out)
        }
    }
}

pub fn cmd_gen(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.corpus.seed = s;
    }
    let corpus = generate(&cfg.corpus)?;
    let file = File::create(out).with_context(|| format!("cannot write corpus file {}", out.display()))?;
    let mut w = BufWriter::new(file);
    write_corpus(&mut w, &corpus)?;
    w.flush().with_context(|| format!("cannot write corpus file {}", out.display()))?;
    let summary = corpus.summary();
    println!("{summary}");
    let mut manifest = RunManifest::new("gen", &cfg, cfg.corpus.seed)?;
    manifest.inputs.push(("corpus-summary".into(), serde_json::to_string(&summary)?));
    manifest.write(&sibling(out, "manifest.json"))?;
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

/// Training log: a `# ablation: ...` comment line, then a CSV header and one
/// row per epoch.
pub fn write_log(path: &Path, ablation: &Ablation, modalities: usize, epochs: &[EpochLog]) -> Result<()> {
    let mut bytes = format!("# ablation: {}\n", ablation.label()).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut bytes);
        let mut header = vec!["epoch".to_string(), "cls".into()];
        header.extend((1..=modalities).map(|m| format!("modal_{m}")));
        header.extend(["cali", "recover", "total", "train_acc", "test_acc"].map(String::from));
        w.write_record(&header)?;
        for e in epochs {
            let mut row = vec![e.epoch.to_string(), e.cls.to_string()];
            row.extend(e.modal.iter().map(|v| v.to_string()));
            row.extend([e.cali, e.recover, e.total, e.train_acc, e.test_acc].map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    write_atomic(path, &bytes)
}

fn corpus_for(args: &RunArgs, cfg: &ExperimentConfig) -> Result<Corpus> {
    match &args.corpus {
        Some(p) => load_corpus(p),
        None => Ok(generate(&cfg.corpus)?),
    }
}

fn train_into(cfg: &ExperimentConfig, corpus: &Corpus, out: &Path, manifest: RunManifest) -> Result<TrainOutcome> {
    create_dir(out)?;
    let outcome = train_with(cfg, corpus, |e| eprintln!("epoch {:3} total {:.4} train_acc {:.4} test_acc {:.4}", e.epoch, e.total, e.train_acc, e.test_acc))?;
    write_log(&out.join("train_log.csv"), &cfg.ablation, corpus.spec.num_modalities(), &outcome.epochs)?;
    let mut bytes = Vec::new();
    outcome.model.save(&mut bytes, serde_json::to_value(cfg)?)?;
    write_atomic(&out.join("model.ckpt"), &bytes)?;
    manifest.write(&out.join("manifest.json"))?;
    Ok(outcome)
}

pub fn cmd_train(args: &RunArgs) -> Result<(ExperimentConfig, Corpus, TrainOutcome)> {
    let mut cfg = load_config(args.config.as_deref())?;
    apply_overrides(&mut cfg, args.seed, &args.ablate);
    let corpus = corpus_for(args, &cfg)?;
    let mut manifest = RunManifest::new("train", &cfg, cfg.seed)?;
    if let Some(p) = &args.corpus {
        manifest = manifest.with_input("corpus", p)?;
    }
    let outcome = train_into(&cfg, &corpus, &args.out, manifest)?;
    Ok((cfg, corpus, outcome))
}

fn cmd_ablate(args: &RunArgs) -> Result<()> {
    let (cfg, corpus, outcome) = cmd_train(args)?;
    let m = cfg.corpus.missing_modalities.first().copied().unwrap_or(0);
    let (result, eval) = evaluate_corpus(&outcome.model, &cfg.loss, &corpus, m)?;
    write_eval(&args.out, &result, &eval, outcome.model.num_modalities())?;
    println!("{}", result_line(&result));
    Ok(())
}

fn result_line(r: &CellResult) -> String {
    format!(
        "{} accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4} auroc {:.4}",
        r.cell.id(),
        r.metrics.accuracy,
        r.metrics.precision,
        r.metrics.recall,
        r.metrics.f1,
        r.auroc
    )
}

/// Long-format metric rows: `(cell, metric, value)`.
pub fn metric_rows(r: &CellResult) -> Vec<[String; 3]> {
    let mut rows: Vec<(&str, String)> = vec![
        ("noise_rate", r.cell.noise_rate.to_string()),
        ("missing_rate", r.cell.missing_rate.to_string()),
        ("missing_modality", r.cell.missing_modality.to_string()),
        ("samples", r.samples.to_string()),
        ("accuracy", r.metrics.accuracy.to_string()),
        ("precision", r.metrics.precision.to_string()),
        ("recall", r.metrics.recall.to_string()),
        ("f1", r.metrics.f1.to_string()),
        ("auroc", r.auroc.to_string()),
        ("zero_division", u8::from(r.metrics.zero_division).to_string()),
    ];
    if let Some(mse) = r.recovery_mse {
        rows.push(("recovery_mse", mse.to_string()));
    }
    rows.into_iter().map(|(k, v)| [r.cell.id(), k.to_string(), v]).collect()
}

fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| anyhow::anyhow!("csv buffer: {e}"))
}

/// Writes `metrics.csv`, the wide per-sample `weights.csv`, and the long
/// `uncertainty.csv` report.
pub fn write_eval(out: &Path, result: &CellResult, eval: &Evaluation, modalities: usize) -> Result<()> {
    create_dir(out)?;
    let header: Vec<String> = ["cell", "metric", "value"].map(String::from).to_vec();
    write_atomic(&out.join("metrics.csv"), &csv_bytes(&header, metric_rows(result).into_iter().map(Vec::from))?)?;

    let mut header = vec!["id".to_string(), "label".into(), "prediction".into()];
    for prefix in ["w", "r", "s", "noise", "present"] {
        header.extend((1..=modalities).map(|m| format!("{prefix}_{m}")));
    }
    let rows = eval.ids.iter().enumerate().map(|(j, id)| {
        let cells = &eval.report.rows[j * modalities..(j + 1) * modalities];
        let mut row = vec![id.to_string(), eval.labels[j].to_string(), eval.predictions[j].to_string()];
        row.extend(cells.iter().map(|c| c.w.to_string()));
        row.extend(cells.iter().map(|c| c.r.to_string()));
        row.extend(cells.iter().map(|c| c.s.to_string()));
        row.extend(cells.iter().map(|c| c.noise_level.to_string()));
        row.extend(cells.iter().map(|c| c.present.to_string()));
        row
    });
    write_atomic(&out.join("weights.csv"), &csv_bytes(&header, rows)?)?;

    let header: Vec<String> =
        ["id", "modality", "r", "s", "w", "unimodal_loss", "loss_target", "present", "noise_level", "fluctuation"].map(String::from).to_vec();
    let rows = eval.report.rows.iter().map(|c| {
        vec![
            c.id.to_string(),
            c.modality.to_string(),
            c.r.to_string(),
            c.s.to_string(),
            c.w.to_string(),
            c.unimodal_loss.to_string(),
            c.p_l.to_string(),
            c.present.to_string(),
            c.noise_level.to_string(),
            c.fluctuation.to_string(),
        ]
    });
    write_atomic(&out.join("uncertainty.csv"), &csv_bytes(&header, rows)?)
}

pub fn cmd_eval(checkpoint: &Path, corpus_path: &Path, out: &Path, cell: &CellArgs) -> Result<()> {
    let file = File::open(checkpoint).with_context(|| format!("checkpoint {} not found or unreadable", checkpoint.display()))?;
    let (model, extra) = DualModel::load(BufReader::new(file)).with_context(|| format!("checkpoint {} is malformed", checkpoint.display()))?;
    let cfg: ExperimentConfig = serde_json::from_value(extra).context("checkpoint lacks its training config")?;
    let mut corpus = load_corpus(corpus_path)?;
    model.check_compatible(&corpus.spec).map_err(anyhow::Error::msg).context("checkpoint and corpus disagree")?;
    let missing_modality = cell.missing_modality.or_else(|| corpus.spec.missing_modalities.first().copied()).unwrap_or(0);
    if missing_modality >= corpus.spec.num_modalities() {
        bail!("missing modality {missing_modality} out of range for {} modalities", corpus.spec.num_modalities());
    }
    if cell.noise_rate.is_some() || cell.missing_rate.is_some() {
        let target = Cell {
            noise_rate: cell.noise_rate.unwrap_or(corpus.spec.noise_rate),
            missing_rate: cell.missing_rate.unwrap_or(corpus.spec.missing_rate),
            missing_modality,
        };
        corpus = cell_corpus(&corpus.spec, &target)?;
    }
    let (result, eval) = evaluate_corpus(&model, &cfg.loss, &corpus, missing_modality)?;
    write_eval(out, &result, &eval, model.num_modalities())?;
    RunManifest::new("eval", &cfg, cfg.seed)?.with_input("checkpoint", checkpoint)?.with_input("corpus", corpus_path)?.write(&out.join("manifest.json"))?;
    println!("{}", result_line(&result));
    Ok(())
}

/// One finished sweep cell, stored as `cells/<id>.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRecord {
    pub config_hash: String,
    pub cell: Cell,
    pub samples: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auroc: f64,
    pub recovery_mse: Option<f64>,
}

fn cell_path(out: &Path, cell: &Cell) -> PathBuf {
    out.join("cells").join(format!("{}.json", cell.id()))
}

/// A finished record for this cell under this exact config, if present.
fn finished(out: &Path, cell: &Cell, hash: &str) -> Option<CellRecord> {
    let text = fs::read_to_string(cell_path(out, cell)).ok()?;
    let rec: CellRecord = serde_json::from_str(&text).ok()?;
    (rec.config_hash == hash).then_some(rec)
}

fn run_sweep_cell(cfg: &ExperimentConfig, cell: &Cell, out: &Path) -> Result<()> {
    let hash = config_hash(cfg)?;
    if finished(out, cell, &hash).is_some() {
        return Ok(());
    }
    let corpus = cell_corpus(&cfg.corpus, cell)?;
    let outcome = train_with(cfg, &corpus, |_| {})?;
    let (r, _) = evaluate_corpus(&outcome.model, &cfg.loss, &corpus, cell.missing_modality)?;
    let dir = out.join("cells");
    create_dir(&dir)?;
    write_log(&dir.join(format!("{}_log.csv", cell.id())), &cfg.ablation, corpus.spec.num_modalities(), &outcome.epochs)?;
    let rec = CellRecord {
        config_hash: hash,
        cell: *cell,
        samples: r.samples,
        accuracy: r.metrics.accuracy,
        precision: r.metrics.precision,
        recall: r.metrics.recall,
        f1: r.metrics.f1,
        auroc: r.auroc,
        recovery_mse: r.recovery_mse,
    };
    write_atomic(&cell_path(out, cell), serde_json::to_string_pretty(&rec)?.as_bytes())?;
    eprintln!("{}", result_line(&r));
    Ok(())
}

pub fn cmd_sweep(config: Option<&Path>, out: &Path, seed: Option<u64>, jobs: usize, ablate: &[Switch]) -> Result<()> {
    let mut cfg = load_config(config)?;
    apply_overrides(&mut cfg, seed, ablate);
    create_dir(out)?;
    let resolved = out.join("config.json");
    write_atomic(&resolved, serde_json::to_string_pretty(&cfg)?.as_bytes())?;
    let hash = config_hash(&cfg)?;
    let pending: Vec<Cell> = cfg.sweep.cells().into_iter().filter(|c| finished(out, c, &hash).is_none()).collect();
    if jobs <= 1 {
        for cell in &pending {
            run_sweep_cell(&cfg, cell, out)?;
        }
    } else {
        let exe = std::env::current_exe().context("locating the dualfuse executable")?;
        for group in pending.chunks(jobs) {
            let children = group
                .iter()
                .map(|cell| {
                    Command::new(&exe)
                        .arg("sweep-cell")
                        .arg("--config")
                        .arg(&resolved)
                        .arg("--out")
                        .arg(out)
                        .arg("--cell")
                        .arg(cell.id())
                        .spawn()
                        .with_context(|| format!("spawning cell {}", cell.id()))
                })
                .collect::<Result<Vec<_>>>()?;
            for (mut child, cell) in children.into_iter().zip(group) {
                let status = child.wait()?;
                if !status.success() {
                    bail!("cell {} failed with {status}", cell.id());
                }
            }
        }
    }
    let records =
        cfg.sweep.cells().iter().map(|c| finished(out, c, &hash).with_context(|| format!("cell {} has no result", c.id()))).collect::<Result<Vec<_>>>()?;
    write_sweep_table(&out.join("sweep.csv"), records)?;
    RunManifest::new("sweep", &cfg, cfg.seed)?.write(&out.join("manifest.json"))?;
    Ok(())
}

/// Aggregated grid, rows ordered by missing modality, missing rate, then
/// noise rate.
fn write_sweep_table(path: &Path, mut records: Vec<CellRecord>) -> Result<()> {
    records.sort_by(|a, b| {
        (a.cell.missing_modality, a.cell.missing_rate, a.cell.noise_rate)
            .partial_cmp(&(b.cell.missing_modality, b.cell.missing_rate, b.cell.noise_rate))
            .expect("finite rates")
    });
    let header: Vec<String> =
        ["missing_modality", "missing_rate", "noise_rate", "accuracy", "precision", "recall", "f1", "auroc", "recovery_mse"].map(String::from).to_vec();
    let rows = records.iter().map(|r| {
        vec![
            r.cell.missing_modality.to_string(),
            r.cell.missing_rate.to_string(),
            r.cell.noise_rate.to_string(),
            r.accuracy.to_string(),
            r.precision.to_string(),
            r.recall.to_string(),
            r.f1.to_string(),
            r.auroc.to_string(),
            r.recovery_mse.map(|v| v.to_string()).unwrap_or_default(),
        ]
    });
    write_atomic(path, &csv_bytes(&header, rows)?)
}

/// Result of one self-test check.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Gradient checks for every operation plus the weight and metric invariants.
pub fn selftest(trials: usize, seed: u64) -> Result<Vec<Check>> {
    let mut checks: Vec<Check> = check_all(trials, seed)?
        .into_iter()
        .map(|r| Check {
            name: format!("grad {}", r.name),
            passed: r.passed(OP_TOLERANCE),
            detail: format!("max rel err {:.2e} over {} entries", r.max_rel_err, r.checked),
        })
        .collect();

    let r = [0.5, 2.0, 1.25];
    let s = [1.0, 0.25, 4.0];
    let w = modality_weights(&r, &s, 1e-6)?;
    let sum: f64 = w.iter().sum();
    checks.push(Check { name: "weights on simplex".into(), passed: (sum - 1.0).abs() <= 1e-9, detail: format!("sum {sum}") });
    let scaled = modality_weights(&r.map(|v| v * 7.0), &s.map(|v| v * 0.3), 1e-6)?;
    let drift = w.iter().zip(&scaled).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    checks.push(Check { name: "weights ratio invariant".into(), passed: drift <= 1e-12, detail: format!("max drift {drift:.2e}") });
    let equal = modality_weights(&[3.0; 4], &[0.5; 4], 1e-6)?;
    let off = equal.iter().map(|v| (v - 0.25).abs()).fold(0.0, f64::max);
    checks.push(Check { name: "equal uncertainty gives uniform weights".into(), passed: off <= 1e-12, detail: format!("max offset {off:.2e}") });

    let m = classification_metrics(&[0, 1, 1, 2], &[0, 1, 2, 2], 3)?;
    checks.push(Check {
        name: "metrics example".into(),
        passed: m.accuracy == 0.75 && (m.f1 - 7.0 / 9.0).abs() < 1e-12,
        detail: format!("accuracy {} f1 {}", m.accuracy, m.f1),
    });
    let a = auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true])?;
    checks.push(Check { name: "auroc example".into(), passed: a == 0.75, detail: format!("auroc {a}") });
    Ok(checks)
}

fn cmd_selftest(trials: usize, seed: u64) -> Result<()> {
    let checks = selftest(trials, seed)?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        println!("{} {:45} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if failed > 0 {
        bail!("{failed} of {} self-test checks failed", checks.len());
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}
