//! Experiment harness: configuration files, attack specs and the
//! `pretrain`, `finetune`, `evaluate` and `param-stats` commands.
//!
//! Every command writes its outputs into `--out DIR` together with
//! `config.txt`, the fully resolved configuration. Existing files are never
//! replaced unless `--force` is given.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use lnlora_core::adapters::{inject_adapters, param_count_for_config, AdapterConfig};
use lnlora_core::analysis::{evaluation_report, param_diff_stats, param_group_stats, report_csv, stats_csv};
use lnlora_core::attacks::{AttackConfig, AttackLoss};
use lnlora_core::checkpoint::{digest_bytes, Checkpoint};
use lnlora_core::data::{gen_synthetic_blobs, read_cifar100_binary, read_cifar10_binary, BlobSpec, LabeledImageSet};
use lnlora_core::model::VitClassifier;
use lnlora_core::trainer::{standard_train, train, EpochMetrics, TrainConfig};
use lnlora_core::vit::{ViTConfig, ViTParams};
use lnlora_core::Error;

/// Failures of a command, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config, attack spec or input files (exit code 2).
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                Error::Config(_)
                | Error::Range { .. }
                | Error::Rank(_)
                | Error::AdapterRank { .. }
                | Error::Incompatible(_)
                | Error::Io { .. }
                | Error::NotACheckpoint
                | Error::Truncated { .. }
                | Error::MalformedCheckpoint(_)
                | Error::Format(_)
                | Error::CorruptRecord { .. } => 2,
                _ => 1,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

// ---- numbers ----------------------------------------------------------------

/// A float, or a fraction `a/b` evaluated as `a / b`.
pub fn parse_number(raw: &str) -> Option<f64> {
    let raw = raw.trim();
    let value = match raw.split_once('/') {
        Some((a, b)) => a.trim().parse::<f64>().ok()? / b.trim().parse::<f64>().ok()?,
        None => raw.parse().ok()?,
    };
    value.is_finite().then_some(value)
}

fn parse_bool(raw: &str) -> Option<bool> {
    match raw.trim() {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

// ---- experiment configuration -----------------------------------------------

/// Every accepted key with its default, in the order written to
/// `config.txt`.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("vit.image_size", "16"),
    ("vit.channels", "3"),
    ("vit.patch_size", "4"),
    ("vit.embed_dim", "64"),
    ("vit.depth", "2"),
    ("vit.num_heads", "4"),
    ("vit.mlp_ratio", "4"),
    ("vit.num_classes", "4"),
    ("adapter.kind", "lnlora"),
    ("adapter.rank", "8"),
    ("adapter.placement", "patch,msa,mlp,head"),
    ("adapter.scaling", "1"),
    ("adapter.ln_sharing", "per-input"),
    ("adapter.rank_policy", "clamp"),
    ("train.epochs", "40"),
    ("train.base_lr", "0.1"),
    ("train.lr_drop_epochs", "35,38"),
    ("train.lr_drop_factor", "0.1"),
    ("train.batch_size", "128"),
    ("train.momentum", "0.9"),
    ("train.weight_decay", "0"),
    ("attack.epsilon", "8/255"),
    ("attack.step_size", "2/255"),
    ("attack.steps", "10"),
    ("attack.loss", "cross_entropy"),
    ("attack.random_start", "true"),
    ("eval.batch_size", "64"),
    ("eval.attacks", "clean;pgd:steps=20;cw:steps=20"),
    ("data.source", "synthetic"),
    ("data.train_paths", ""),
    ("data.test_paths", ""),
    ("data.synthetic.per_class", "64"),
    ("data.synthetic.test_per_class", "32"),
    ("data.synthetic.noise", "0.1"),
    ("data.synthetic.train_seed", "1"),
    ("data.synthetic.test_seed", "2"),
];

/// Resolved `key=value` configuration. Only keys in [`DEFAULTS`] exist.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl ExperimentConfig {
    /// Parse `key=value` lines; `#` starts a comment, blank lines are
    /// ignored, unknown keys are rejected.
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(usage(format!("config line {}: expected key=value, got `{line}`", i + 1)));
            };
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config file `{}`: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(usage(format!("unknown config key `{key}`"))),
        }
    }

    /// Apply a `key=value` override from the command line.
    pub fn apply_override(&mut self, pair: &str) -> CliResult<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects key=value, got `{pair}`")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    fn num(&self, key: &str) -> CliResult<f64> {
        parse_number(self.get(key)).ok_or_else(|| usage(format!("`{key}` = `{}` is not a number", self.get(key))))
    }

    fn int(&self, key: &str) -> CliResult<usize> {
        self.get(key)
            .parse()
            .map_err(|_| usage(format!("`{key}` = `{}` is not a nonnegative integer", self.get(key))))
    }

    fn flag(&self, key: &str) -> CliResult<bool> {
        parse_bool(self.get(key)).ok_or_else(|| usage(format!("`{key}` = `{}` is not a boolean", self.get(key))))
    }

    fn list(&self, key: &str, sep: char) -> Vec<String> {
        self.get(key)
            .split(sep)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect()
    }

    pub fn seed(&self) -> CliResult<u64> {
        self.get("seed")
            .parse()
            .map_err(|_| usage(format!("`seed` = `{}` is not an unsigned integer", self.get("seed"))))
    }

    pub fn vit(&self) -> CliResult<ViTConfig> {
        let cfg = ViTConfig {
            image_size: self.int("vit.image_size")?,
            channels: self.int("vit.channels")?,
            patch_size: self.int("vit.patch_size")?,
            embed_dim: self.int("vit.embed_dim")?,
            depth: self.int("vit.depth")?,
            num_heads: self.int("vit.num_heads")?,
            mlp_ratio: self.int("vit.mlp_ratio")?,
            num_classes: self.int("vit.num_classes")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn adapter(&self) -> CliResult<AdapterConfig> {
        let cfg = AdapterConfig {
            kind: self.get("adapter.kind").parse()?,
            rank: self.int("adapter.rank")?,
            placement: self.get("adapter.placement").parse()?,
            scaling: self.num("adapter.scaling")?,
            ln_sharing: self.get("adapter.ln_sharing").parse()?,
            rank_policy: self.get("adapter.rank_policy").parse()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn attack(&self) -> CliResult<AttackConfig> {
        let cfg = AttackConfig {
            epsilon: self.num("attack.epsilon")?,
            step_size: self.num("attack.step_size")?,
            steps: self.int("attack.steps")?,
            loss: self.get("attack.loss").parse()?,
            random_start: self.flag("attack.random_start")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> CliResult<TrainConfig> {
        let drops = self
            .list("train.lr_drop_epochs", ',')
            .iter()
            .map(|s| {
                s.parse()
                    .map_err(|_| usage(format!("`train.lr_drop_epochs` entry `{s}` is not an integer")))
            })
            .collect::<CliResult<Vec<usize>>>()?;
        let cfg = TrainConfig {
            epochs: self.int("train.epochs")?,
            base_lr: self.num("train.base_lr")?,
            lr_drop_epochs: drops,
            lr_drop_factor: self.num("train.lr_drop_factor")?,
            batch_size: self.int("train.batch_size")?,
            momentum: self.num("train.momentum")?,
            weight_decay: self.num("train.weight_decay")?,
            attack: self.attack()?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval_attacks(&self) -> CliResult<Vec<(String, AttackConfig)>> {
        self.list("eval.attacks", ';').iter().map(|s| parse_attack_spec(s)).collect()
    }

    /// `key=value` lines for every key, in [`DEFAULTS`] order.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, _) in DEFAULTS {
            writeln!(s, "{k}={}", self.get(k)).expect("writing to a String");
        }
        s
    }
}

// ---- attack specs -----------------------------------------------------------

pub const ATTACK_NAMES: [&str; 4] = ["clean", "fgsm", "pgd", "cw"];

/// Parse `name[:key=value,...]` using the evaluation defaults (ε = 8/255,
/// step 1/255, 20 steps, no random start).
pub fn parse_attack_spec(spec: &str) -> CliResult<(String, AttackConfig)> {
    parse_attack_spec_with(spec, &AttackConfig::pgd_eval(20))
}

/// Parse an attack spec, filling unspecified fields from `defaults`.
///
/// Names: `clean`, `fgsm`, `pgd`, `cw`. Keys: `steps`, `eps`, `step`,
/// `random_start`. Numbers accept fraction syntax (`8/255`). The returned
/// label is `clean`, `FGSM`, `PGD-k` or `CW-k`.
pub fn parse_attack_spec_with(spec: &str, defaults: &AttackConfig) -> CliResult<(String, AttackConfig)> {
    let spec = spec.trim();
    let (name, rest) = spec.split_once(':').unwrap_or((spec, ""));
    let mut cfg = defaults.clone();
    match name {
        "clean" => cfg = AttackConfig::clean(),
        "fgsm" | "pgd" => cfg.loss = AttackLoss::CrossEntropy,
        "cw" => cfg.loss = AttackLoss::CwMargin,
        other => {
            return Err(usage(format!(
                "unknown attack `{other}` in spec `{spec}` (valid names: {})",
                ATTACK_NAMES.join(", ")
            )))
        }
    }
    let mut step_given = false;
    for token in rest.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let bad = || usage(format!("malformed attack spec token `{token}` in `{spec}`"));
        let (k, v) = token.split_once('=').ok_or_else(bad)?;
        match k.trim() {
            "steps" => cfg.steps = v.trim().parse().map_err(|_| bad())?,
            "eps" | "epsilon" => cfg.epsilon = parse_number(v).ok_or_else(bad)?,
            "step" | "step_size" => {
                cfg.step_size = parse_number(v).ok_or_else(bad)?;
                step_given = true;
            }
            "random_start" => cfg.random_start = parse_bool(v).ok_or_else(bad)?,
            _ => return Err(bad()),
        }
    }
    let label = match name {
        "clean" => "clean".to_string(),
        "fgsm" => {
            cfg.steps = 1;
            if !step_given {
                cfg.step_size = cfg.epsilon;
            }
            cfg.random_start = false;
            "FGSM".to_string()
        }
        "pgd" => format!("PGD-{}", cfg.steps),
        _ => format!("CW-{}", cfg.steps),
    };
    cfg.validate()
        .map_err(|e| usage(format!("invalid attack spec `{spec}`: {e}")))?;
    Ok((label, cfg))
}

// ---- command line -------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "lnlora", about = "Parameter-efficient adversarial finetuning of vision transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Standard (clean) training of a base model.
    Pretrain(PretrainArgs),
    /// Adversarial finetuning of adapters on a frozen base.
    Finetune(FinetuneArgs),
    /// Clean and robust accuracy under a list of attacks.
    Evaluate(EvaluateArgs),
    /// Per-layer mean absolute parameter values, or differences.
    ParamStats(ParamStatsArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// key=value experiment configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace existing output files.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// CIFAR binary batch files (repeatable); replaces `data.train_paths`.
    #[arg(long)]
    pub data: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Base checkpoint written by `pretrain`.
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub data: Vec<PathBuf>,
    /// lora or lnlora.
    #[arg(long)]
    pub adapter: Option<String>,
    #[arg(long)]
    pub rank: Option<usize>,
    /// Comma-separated subset of patch,msa,mlp,head.
    #[arg(long)]
    pub placement: Option<String>,
    /// Training attack spec, e.g. `pgd:steps=10,eps=8/255,step=2/255,random_start=true`.
    #[arg(long)]
    pub attack: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Adapter checkpoint trained on `--checkpoint`.
    #[arg(long)]
    pub adapters: Option<PathBuf>,
    /// CIFAR binary test files (repeatable); replaces `data.test_paths`.
    #[arg(long)]
    pub data: Vec<PathBuf>,
    /// Attack spec (repeatable), e.g. `pgd:steps=20,eps=8/255,step=1/255`.
    #[arg(long)]
    pub attack: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ParamStatsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Second checkpoint; emits mean |a − b| instead of mean |a|.
    #[arg(long)]
    pub diff: Option<PathBuf>,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::Finetune(a) => cmd_finetune(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::ParamStats(a) => cmd_param_stats(&a),
    }
}

fn log(msg: impl AsRef<str>) {
    eprintln!("[lnlora] {}", msg.as_ref());
}

fn resolve(common: &CommonArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for pair in &common.overrides {
        cfg.apply_override(pair)?;
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn set_paths(cfg: &mut ExperimentConfig, key: &str, paths: &[PathBuf]) -> CliResult<()> {
    if paths.is_empty() {
        return Ok(());
    }
    let joined: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
    cfg.set(key, &joined.join(","))?;
    if cfg.get("data.source") == "synthetic" {
        cfg.set("data.source", "cifar10")?;
    }
    Ok(())
}

/// Output directory with overwrite protection.
struct OutDir {
    dir: PathBuf,
    force: bool,
}

impl OutDir {
    fn prepare(common: &CommonArgs, files: &[&str]) -> CliResult<Self> {
        let out = OutDir {
            dir: common.out.clone(),
            force: common.force,
        };
        if !out.force {
            for f in files {
                let p = out.dir.join(f);
                if p.exists() {
                    return Err(usage(format!(
                        "output `{}` already exists (pass --force to replace it)",
                        p.display()
                    )));
                }
            }
        }
        fs::create_dir_all(&out.dir).map_err(|e| Error::Io {
            path: out.dir.display().to_string(),
            source: e,
        })?;
        Ok(out)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> CliResult<()> {
        let p = self.path(name);
        if p.exists() && !self.force {
            return Err(usage(format!("output `{}` already exists", p.display())));
        }
        fs::write(&p, contents).map_err(|e| Error::Io {
            path: p.display().to_string(),
            source: e,
        })?;
        Ok(())
    }

    /// Write `config.txt` and echo it to the log.
    fn write_config(&self, cfg: &ExperimentConfig, run: &[(&str, String)]) -> CliResult<()> {
        let mut text = cfg.render();
        for (k, v) in run {
            writeln!(text, "run.{k}={v}").expect("writing to a String");
        }
        for line in text.lines() {
            log(format!("config {line}"));
        }
        self.write("config.txt", &text)
    }
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} `{}` does not exist", path.display())))
    }
}

/// Load the train or test split described by the configuration.
pub fn load_dataset(cfg: &ExperimentConfig, test: bool) -> CliResult<LabeledImageSet> {
    let arch = cfg.vit()?;
    let data = match cfg.get("data.source") {
        "synthetic" => {
            let (per, seed) = if test {
                ("data.synthetic.test_per_class", "data.synthetic.test_seed")
            } else {
                ("data.synthetic.per_class", "data.synthetic.train_seed")
            };
            gen_synthetic_blobs(&BlobSpec {
                classes: arch.num_classes,
                per_class: cfg.int(per)?,
                image_size: arch.image_size,
                channels: arch.channels,
                noise: cfg.num("data.synthetic.noise")?,
                seed: cfg.get(seed).parse().map_err(|_| usage(format!("`{seed}` is not an integer")))?,
            })?
        }
        source @ ("cifar10" | "cifar100") => {
            let key = if test { "data.test_paths" } else { "data.train_paths" };
            let paths: Vec<PathBuf> = cfg.list(key, ',').into_iter().map(PathBuf::from).collect();
            if paths.is_empty() {
                return Err(usage(format!("data.source is {source} but `{key}` is empty")));
            }
            for p in &paths {
                require_file(p, "data path")?;
            }
            if source == "cifar10" {
                read_cifar10_binary(&paths)?
            } else {
                read_cifar100_binary(&paths)?
            }
        }
        other => {
            return Err(usage(format!(
                "unknown data.source `{other}` (expected synthetic, cifar10, cifar100)"
            )))
        }
    };
    let [h, w, c] = data.image_shape();
    if h != arch.image_size || w != arch.image_size || c != arch.channels || data.num_classes != arch.num_classes {
        return Err(usage(format!(
            "dataset is {h}x{w}x{c} with {} classes but the model expects {}x{}x{} with {} classes",
            data.num_classes, arch.image_size, arch.image_size, arch.channels, arch.num_classes
        )));
    }
    Ok(data)
}

fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,lr,train_loss,train_acc\n");
    for m in history {
        writeln!(s, "{},{},{},{}", m.epoch, m.lr, m.mean_loss, m.accuracy).expect("writing to a String");
    }
    s
}

fn log_epoch(m: &EpochMetrics) {
    log(format!(
        "epoch {} lr {} loss {:.6} acc {:.4}",
        m.epoch, m.lr, m.mean_loss, m.accuracy
    ));
}

fn read_checkpoint(path: &Path) -> CliResult<(Checkpoint, String)> {
    require_file(path, "checkpoint")?;
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok((Checkpoint::decode(&bytes)?, digest_bytes(&bytes)))
}

pub const BASE_CKPT: &str = "base.ckpt";
pub const ADAPTER_CKPT: &str = "adapter.ckpt";

pub fn cmd_pretrain(args: &PretrainArgs) -> CliResult<()> {
    let mut cfg = resolve(&args.common)?;
    set_paths(&mut cfg, "data.train_paths", &args.data)?;
    let arch = cfg.vit()?;
    let tcfg = cfg.train()?;
    let data = load_dataset(&cfg, false)?;
    let out = OutDir::prepare(&args.common, &[BASE_CKPT, "metrics.csv", "config.txt"])?;
    out.write_config(&cfg, &[("command", "pretrain".into())])?;

    let start = Instant::now();
    let mut model = VitClassifier::new(ViTParams::init(arch, tcfg.seed)?);
    log(format!("pretraining {} parameters on {} examples", model.trainable_count().total, data.len()));
    let history = standard_train(&mut model, &data, &tcfg, log_epoch)?;

    let mut ckpt = Checkpoint::from_vit(&model.base);
    ckpt.set_meta("seed", tcfg.seed.to_string());
    ckpt.write(out.path(BASE_CKPT), out.force)?;
    out.write("metrics.csv", &metrics_csv(&history))?;
    log(format!("digest {}", ckpt.digest()?));
    log(format!("wall time {:.3} s", start.elapsed().as_secs_f64()));
    Ok(())
}

pub fn cmd_finetune(args: &FinetuneArgs) -> CliResult<()> {
    let mut cfg = resolve(&args.common)?;
    set_paths(&mut cfg, "data.train_paths", &args.data)?;
    if let Some(k) = &args.adapter {
        cfg.set("adapter.kind", k)?;
    }
    if let Some(r) = args.rank {
        cfg.set("adapter.rank", &r.to_string())?;
    }
    if let Some(p) = &args.placement {
        cfg.set("adapter.placement", p)?;
    }
    if let Some(spec) = &args.attack {
        let (_, a) = parse_attack_spec_with(spec, &cfg.attack()?)?;
        cfg.set("attack.epsilon", &a.epsilon.to_string())?;
        cfg.set("attack.step_size", &a.step_size.to_string())?;
        cfg.set("attack.steps", &a.steps.to_string())?;
        cfg.set("attack.loss", &a.loss.to_string())?;
        cfg.set("attack.random_start", &a.random_start.to_string())?;
    }
    let (base_ckpt, base_digest) = read_checkpoint(&args.base)?;
    let arch = base_ckpt.vit_config()?;
    for (k, v) in arch.to_meta() {
        cfg.set(&k, &v)?;
    }
    let acfg = cfg.adapter()?;
    let tcfg = cfg.train()?;
    let data = load_dataset(&cfg, false)?;
    let out = OutDir::prepare(&args.common, &[ADAPTER_CKPT, "metrics.csv", "config.txt", "summary.txt"])?;
    out.write_config(
        &cfg,
        &[
            ("command", "finetune".into()),
            ("base", args.base.display().to_string()),
            ("base_digest", base_digest.clone()),
        ],
    )?;

    let start = Instant::now();
    let mut base = base_ckpt.to_vit()?;
    let adapters = inject_adapters(&mut base, &acfg, tcfg.seed)?;
    let mut model = VitClassifier::with_adapters(base, adapters);
    let count = model.trainable_count();
    let full = param_count_for_config(&arch, None)?.total;
    log(format!(
        "trainable parameters {} of {} ({:.2}%)",
        count.total,
        full,
        100.0 * count.total as f64 / full as f64
    ));
    let history = train(&mut model, &data, &tcfg, log_epoch)?;
    let elapsed = start.elapsed().as_secs_f64();

    let adapters = model.adapters.as_ref().expect("adapters attached");
    let mut ckpt = Checkpoint::from_adapters(adapters, &base_digest);
    ckpt.set_meta("seed", tcfg.seed.to_string());
    ckpt.write(out.path(ADAPTER_CKPT), out.force)?;
    out.write("metrics.csv", &metrics_csv(&history))?;
    let summary = format!(
        "trainable_params={}\npatch={}\nmsa={}\nmlp={}\nhead={}\nlnlora_affine={}\nfull_model_params={}\n",
        count.total, count.patch, count.msa, count.mlp, count.head, count.lnlora_affine, full
    );
    out.write("summary.txt", &summary)?;
    log(format!("wall time {elapsed:.3} s"));
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> CliResult<()> {
    let mut cfg = resolve(&args.common)?;
    set_paths(&mut cfg, "data.test_paths", &args.data)?;
    if !args.attack.is_empty() {
        cfg.set("eval.attacks", &args.attack.join(";"))?;
    }
    let attacks = cfg.eval_attacks()?;
    if attacks.is_empty() {
        return Err(usage("no attacks to evaluate"));
    }
    let (base_ckpt, base_digest) = read_checkpoint(&args.checkpoint)?;
    let arch = base_ckpt.vit_config()?;
    for (k, v) in arch.to_meta() {
        cfg.set(&k, &v)?;
    }
    let adapters = match &args.adapters {
        Some(p) => Some(read_checkpoint(p)?.0.to_adapters(&base_digest)?),
        None => None,
    };
    let data = load_dataset(&cfg, true)?;
    let out = OutDir::prepare(&args.common, &["report.csv", "config.txt"])?;
    let mut run = vec![
        ("command", "evaluate".to_string()),
        ("checkpoint", args.checkpoint.display().to_string()),
    ];
    if let Some(p) = &args.adapters {
        run.push(("adapters", p.display().to_string()));
    }
    out.write_config(&cfg, &run)?;

    let base = base_ckpt.to_vit()?;
    let model = match adapters {
        Some(a) => VitClassifier::with_adapters(base, a),
        None => VitClassifier::new(base),
    };
    let start = Instant::now();
    let rows = evaluation_report(&model, &data, &attacks, cfg.int("eval.batch_size")?, cfg.seed()?)?;
    for r in &rows {
        log(format!("{} accuracy {:.4}", r.attack, r.accuracy));
    }
    out.write("report.csv", &report_csv(&rows))?;
    log(format!("wall time {:.3} s", start.elapsed().as_secs_f64()));
    Ok(())
}

pub fn cmd_param_stats(args: &ParamStatsArgs) -> CliResult<()> {
    let cfg = resolve(&args.common)?;
    let (a, _) = read_checkpoint(&args.checkpoint)?;
    let stats = match &args.diff {
        Some(p) => param_diff_stats(&a, &read_checkpoint(p)?.0)?,
        None => param_group_stats(&a)?,
    };
    let out = OutDir::prepare(&args.common, &["stats.csv", "config.txt"])?;
    let mut run = vec![
        ("command", "param-stats".to_string()),
        ("checkpoint", args.checkpoint.display().to_string()),
    ];
    if let Some(p) = &args.diff {
        run.push(("diff", p.display().to_string()));
    }
    out.write_config(&cfg, &run)?;
    out.write("stats.csv", &stats_csv(&stats))?;
    log(format!("{} rows", stats.len()));
    Ok(())
}
