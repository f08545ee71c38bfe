//! Argument parsing and command dispatch.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use unode_core::model::{receptive_field, ArchConfig, BlockKind, Model};
use unode_core::seg::PostprocessConfig;
use unode_core::{data, Error, Result};

use crate::bench;
use crate::config::{parse_pairs, RunConfig};
use crate::report::{self, ComparisonRow};
use crate::run::{self, Dataset};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_ORACLE: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "unode", version, about = "Continuous-depth U-Net segmentation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic train/tune/test splits with manifests.
    GenerateData(Flags),
    /// Train a model and write a run directory.
    Train(Flags),
    /// Score checkpoints on the test split (comma-separated checkpoints
    /// produce a comparison table).
    Eval(Flags),
    /// Write predicted instance masks for the test split.
    Predict(Flags),
    /// Check adjoint gradients against finite differences and RK4.
    Gradcheck(Flags),
    /// Per-image function-evaluation counts and a tolerance sweep.
    NfeBench(Flags),
    /// Parameter counts and static receptive fields of the three architectures.
    ParamCount(Flags),
}

/// Every flag mirrors a config key; flags override `--config`.
#[derive(Args, Debug, Default, Clone)]
pub struct Flags {
    /// File of key=value lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub base_width: Option<String>,
    #[arg(long)]
    pub levels: Option<String>,
    #[arg(long)]
    pub time_conditioning: Option<String>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub n_steps: Option<String>,
    /// Sets both rtol and atol.
    #[arg(long)]
    pub tol: Option<String>,
    #[arg(long)]
    pub rtol: Option<String>,
    #[arg(long)]
    pub atol: Option<String>,
    #[arg(long)]
    pub ode_gradient: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub augment: Option<String>,
    #[arg(long)]
    pub tta: Option<String>,
    #[arg(long)]
    pub erosion_radius: Option<String>,
    #[arg(long)]
    pub size: Option<String>,
    #[arg(long)]
    pub n_train: Option<String>,
    #[arg(long)]
    pub n_tune: Option<String>,
    #[arg(long)]
    pub n_test: Option<String>,
    #[arg(long)]
    pub touching_fraction: Option<String>,
    #[arg(long)]
    pub train_manifest: Option<String>,
    #[arg(long)]
    pub tune_manifest: Option<String>,
    #[arg(long)]
    pub test_manifest: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<String>,
    #[arg(long)]
    pub out_dir: Option<String>,
}

impl Flags {
    fn pairs(&self) -> Vec<(String, String)> {
        let fields: [(&str, &Option<String>); 28] = [
            ("profile", &self.profile),
            ("arch", &self.arch),
            ("base_width", &self.base_width),
            ("levels", &self.levels),
            ("time_conditioning", &self.time_conditioning),
            ("method", &self.method),
            ("n_steps", &self.n_steps),
            ("tol", &self.tol),
            ("rtol", &self.rtol),
            ("atol", &self.atol),
            ("ode_gradient", &self.ode_gradient),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("seed", &self.seed),
            ("augment", &self.augment),
            ("tta", &self.tta),
            ("erosion_radius", &self.erosion_radius),
            ("size", &self.size),
            ("n_train", &self.n_train),
            ("n_tune", &self.n_tune),
            ("n_test", &self.n_test),
            ("touching_fraction", &self.touching_fraction),
            ("train_manifest", &self.train_manifest),
            ("tune_manifest", &self.tune_manifest),
            ("test_manifest", &self.test_manifest),
            ("checkpoint", &self.checkpoint),
            ("out_dir", &self.out_dir),
        ];
        fields
            .iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect()
    }

    /// Config file entries, then flags, over the defaults.
    pub fn resolve(&self, command: &str) -> Result<RunConfig> {
        let mut pairs = match &self.config {
            Some(p) => parse_pairs(&fs::read_to_string(p)?)?,
            None => Vec::new(),
        };
        pairs.extend(self.pairs());
        RunConfig::resolve(command, &pairs)
    }
}

/// Failure of a command, carrying its exit status.
#[derive(Debug)]
pub enum Failure {
    Error(Error),
    Oracle(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Error(e) if e.is_numerical() => EXIT_NUMERICAL,
            Failure::Error(_) => EXIT_USAGE,
            Failure::Oracle(_) => EXIT_ORACLE,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Error(e) => write!(f, "error: {e}"),
            Failure::Oracle(m) => write!(f, "oracle failure: {m}"),
        }
    }
}

/// Parse `args` (program name first), run the command, return the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command, &mut std::io::stdout()) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("{f}");
            f.exit_code()
        }
    }
}

pub fn execute(command: &Command, out: &mut dyn std::io::Write) -> std::result::Result<(), Failure> {
    let mut say = |s: &str| {
        let _ = out.write_all(s.as_bytes());
    };
    match command {
        Command::GenerateData(f) => {
            let cfg = f.resolve("generate-data")?;
            for p in generate_data(&cfg)? {
                say(&format!("{}\n", p.display()));
            }
        }
        Command::Train(f) => {
            let cfg = f.resolve("train")?;
            let (train_set, tune_set) = load_train_splits(&cfg)?;
            let outcome = run::train(&cfg, &train_set, &tune_set, Some(&cfg.out_dir), &mut |r| {
                eprintln!(
                    "epoch {:>4}  train {:.5}  tune {:.5}  dice {:.4}  nfe {:.0}  {:.1}s",
                    r.epoch, r.train_loss, r.tune_loss, r.tune_dice, r.mean_nfe, r.seconds
                )
            })?;
            say(&format!(
                "trained {} epochs in {:.1}s; best tune dice at epoch {}\n{}\n",
                cfg.epochs,
                outcome.seconds,
                outcome.best_epoch,
                cfg.out_dir.display()
            ));
        }
        Command::Eval(f) => {
            let cfg = f.resolve("eval")?;
            let test = load_split(&cfg, 2)?;
            let paths = checkpoints(&cfg)?;
            fs::create_dir_all(&cfg.out_dir).map_err(Error::from)?;
            let mut comparison = Vec::new();
            for path in &paths {
                let model = run::load_model(path, &cfg.arch_config()?)?;
                let rows = run::evaluate(&model, &test, cfg.tta, cfg.erosion_radius)?;
                let table = report::metrics_table(&rows);
                let stem = if paths.len() == 1 { "metrics".to_string() } else { run_label(path) };
                fs::write(cfg.out_dir.join(format!("{stem}.csv")), &table).map_err(Error::from)?;
                if model.num_ode_blocks() > 0 {
                    fs::write(cfg.out_dir.join(format!("{stem}.nfe.tsv")), report::nfe_table(&rows))
                        .map_err(Error::from)?;
                }
                fs::write(cfg.out_dir.join(format!("{stem}.records")), report::metrics_records(&rows))
                    .map_err(Error::from)?;
                say(&table);
                comparison.push(ComparisonRow {
                    method: report::display_name(&kind_name(&model.config)).to_string(),
                    scores: report::mean_scores(&rows),
                    parameters: model.count_parameters(),
                });
            }
            if paths.len() > 1 {
                let t = report::comparison_table(&comparison);
                fs::write(cfg.out_dir.join("comparison.txt"), &t).map_err(Error::from)?;
                fs::write(cfg.out_dir.join("comparison.records"), report::comparison_records(&comparison))
                    .map_err(Error::from)?;
                say(&t);
            }
        }
        Command::Predict(f) => {
            let cfg = f.resolve("predict")?;
            let test = load_split(&cfg, 2)?;
            let path = single_checkpoint(&cfg)?;
            let model = run::load_model(&path, &cfg.arch_config()?)?;
            let dir = cfg.out_dir.join("pred");
            fs::create_dir_all(&dir).map_err(Error::from)?;
            let pp = PostprocessConfig::default();
            for (name, s) in test.names.iter().zip(&test.samples) {
                let mask = run::predict(&model, &s.image, cfg.tta)?.instances(&pp)?;
                let p = dir.join(format!("{name}.pgm"));
                data::write_pgm(&p, &mask)?;
                say(&format!("{}\t{}\n", p.display(), mask.count()));
            }
        }
        Command::Gradcheck(f) => {
            let cfg = f.resolve("gradcheck")?;
            let rows = bench::default_gradcheck(cfg.seed)?;
            let text = bench::gradcheck_report(&rows);
            say(&text);
            if f.out_dir.is_some() {
                fs::create_dir_all(&cfg.out_dir).map_err(Error::from)?;
                fs::write(cfg.out_dir.join("gradcheck.tsv"), &text).map_err(Error::from)?;
            }
            let failed = rows.iter().filter(|r| r.pass == Some(false)).count();
            if failed > 0 {
                return Err(Failure::Oracle(format!("{failed} gradient comparisons exceed the threshold")));
            }
        }
        Command::NfeBench(f) => {
            let cfg = f.resolve("nfe-bench")?;
            let test = load_split(&cfg, 2)?;
            let path = single_checkpoint(&cfg)?;
            let model = run::load_model(&path, &cfg.arch_config()?)?;
            if model.num_ode_blocks() == 0 {
                return Err(Error::InvalidArgument("nfe-bench needs a checkpoint with ODE blocks".into()).into());
            }
            let model = bench::with_tolerance(&model, cfg.rtol)?;
            let rows = bench::nfe_table(&model, &test)?;
            let sweep = bench::tolerance_sweep(&model, &test, &bench::SWEEP_TOLERANCES)?;
            let text = bench::nfe_report(&model, &rows, &sweep, &bench::SWEEP_TOLERANCES);
            fs::create_dir_all(&cfg.out_dir).map_err(Error::from)?;
            fs::write(cfg.out_dir.join("nfe.tsv"), &text).map_err(Error::from)?;
            say(&text);
        }
        Command::ParamCount(f) => {
            let cfg = f.resolve("param-count")?;
            say("arch\tbase_width\tparameters\treceptive_field\n");
            for arch in ["unet", "uresnet", "unode"] {
                let mut c = cfg.clone();
                let d = RunConfig::defaults(cfg.profile, arch)?;
                c.arch = arch.into();
                c.base_width = if arch == cfg.arch { cfg.base_width } else { d.base_width };
                let a = c.arch_config()?;
                let rf = receptive_field(&a, &[]);
                let m = Model::<f32>::build(a, 0)?;
                say(&format!("{arch}\t{}\t{}\t{rf}\n", c.base_width, m.count_parameters()));
            }
        }
    }
    Ok(())
}

fn kind_name(a: &ArchConfig) -> String {
    match a.block_kind {
        BlockKind::Plain => "unet",
        BlockKind::Residual => "uresnet",
        BlockKind::Ode => "unode",
    }
    .to_string()
}

fn run_label(ckpt: &Path) -> String {
    ckpt.parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

fn checkpoints(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let raw = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--checkpoint is required".into()))?;
    Ok(raw
        .to_string_lossy()
        .split(',')
        .filter(|s| !s.is_empty())
        .map(PathBuf::from)
        .collect())
}

fn single_checkpoint(cfg: &RunConfig) -> Result<PathBuf> {
    let mut v = checkpoints(cfg)?;
    if v.len() != 1 {
        return Err(Error::InvalidArgument("expected exactly one checkpoint".into()));
    }
    Ok(v.remove(0))
}

/// The manifest of split `k`, or the synthetic split when none is given.
fn load_split(cfg: &RunConfig, k: usize) -> Result<Dataset> {
    let manifest = [&cfg.train_manifest, &cfg.tune_manifest, &cfg.test_manifest][k];
    match manifest {
        Some(p) => Dataset::load(p),
        None => {
            let [a, b, c] = Dataset::synthetic_splits(cfg)?;
            Ok([a, b, c].into_iter().nth(k).expect("three splits"))
        }
    }
}

fn load_train_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    if cfg.train_manifest.is_none() && cfg.tune_manifest.is_none() {
        let [a, b, _] = Dataset::synthetic_splits(cfg)?;
        return Ok((a, b));
    }
    let train = load_split(cfg, 0)?;
    let tune = load_split(cfg, 1)?;
    let overlap = train.names.iter().any(|n| tune.names.contains(n));
    if overlap {
        return Err(Error::InvalidArgument("train and tune splits share images".into()));
    }
    Ok((train, tune))
}

/// Write the three synthetic splits under `out_dir`; returns the manifests.
pub fn generate_data(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let splits = Dataset::synthetic_splits(cfg)?;
    splits
        .iter()
        .zip(run::SPLITS)
        .map(|(ds, name)| ds.write(&cfg.out_dir, name))
        .collect()
}
