//! The `copl` command line: data generation, training, protocol evaluation
//! and the gradient-check suite.
//!
//! Every command reads an optional flat JSON [`ExperimentConfig`] and then
//! applies `--key value` overrides. The resolved config and the overrides
//! are echoed as JSON next to each output file.
//!
//! Exit codes: 0 success, 1 check failure, 2 configuration or input error,
//! 3 numerical failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::classifier::DEFAULT_GAMMA;
use crate::conditioners::{Method, PatchAggregation, DEFAULT_PROMPT_LEN};
use crate::error::Error;
use crate::eval::{
    harmonic_mean, merge_results, run_ablation_global_vs_local, run_base_to_new, run_cross_dataset, run_incremental,
    train_base, MetricRow, Protocol, RunConfig,
};
use crate::gradcheck::{run_suite, Fault, DEFAULT_INSTANCES};
use crate::synthdata::{generate, Dataset, DatasetDescriptor, FeatureCache, Split};
use crate::trainer::SgdConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Pseudo-protocol accepted by `eval` that prints the harmonic mean of two
/// accuracies.
pub const HM_CHECK: &str = "hm_check";

/// Flat experiment configuration. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Method trained by `train`.
    pub method: Method,
    /// Methods evaluated by `eval`. The ablation protocol ignores this.
    pub methods: Vec<Method>,
    /// Run seeds. `train` uses the first one.
    pub seeds: Vec<u64>,

    pub num_classes: usize,
    pub split_fraction: f64,
    pub patches: usize,
    pub image_dim: usize,
    pub foreground_patches: usize,
    pub clutter_pool_size: usize,
    pub noise_sigma: f64,
    pub salience: f64,
    pub samples_per_class: usize,
    /// Seed of the generated dataset (prototypes, partition, samples).
    pub data_seed: u64,
    /// Defaults to `data_seed`.
    pub clutter_seed: Option<u64>,
    /// Load samples from a CPFC1 cache instead of generating them.
    pub data_path: Option<PathBuf>,
    /// Seed of the generated cross-dataset target; defaults to
    /// `data_seed + 1`. The target shares the source clutter pool.
    pub target_data_seed: Option<u64>,
    /// Load the cross-dataset target from a CPFC1 cache.
    pub target_data_path: Option<PathBuf>,

    pub base_lr: f64,
    pub warmup_lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,

    pub gamma: f64,
    pub prompt_len: usize,
    pub token_dim: usize,
    pub joint_dim: usize,
    pub text_hidden: Option<usize>,
    pub meta_hidden: Option<usize>,
    pub patch_aggregation: PatchAggregation,
    pub shots: usize,

    pub cache_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub history_path: PathBuf,
    pub results_path: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = DatasetDescriptor::default();
        let sgd = SgdConfig::default();
        let run = RunConfig::default();
        Self {
            method: Method::Copl,
            methods: vec![Method::Coop, Method::Cocoop, Method::Copl],
            seeds: (0..10).collect(),
            num_classes: data.num_classes,
            split_fraction: data.split_fraction,
            patches: data.patches,
            image_dim: data.image_dim,
            foreground_patches: data.foreground_patches,
            clutter_pool_size: data.clutter_pool_size,
            noise_sigma: data.noise_sigma,
            salience: data.salience,
            samples_per_class: data.samples_per_class,
            data_seed: data.seed,
            clutter_seed: data.clutter_seed,
            data_path: None,
            target_data_seed: None,
            target_data_path: None,
            base_lr: sgd.base_lr,
            warmup_lr: sgd.warmup_lr,
            warmup_epochs: sgd.warmup_epochs,
            epochs: sgd.epochs,
            batch_size: sgd.batch_size,
            momentum: sgd.momentum,
            gamma: DEFAULT_GAMMA,
            prompt_len: DEFAULT_PROMPT_LEN,
            token_dim: run.token_dim,
            joint_dim: run.joint_dim,
            text_hidden: run.text_hidden,
            meta_hidden: run.meta_hidden,
            patch_aggregation: run.patch_aggregation,
            shots: run.shots,
            cache_path: "data.cpfc".into(),
            checkpoint_path: "model.copl".into(),
            history_path: "history.csv".into(),
            results_path: "results.csv".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn descriptor(&self) -> DatasetDescriptor {
        DatasetDescriptor {
            num_classes: self.num_classes,
            split_fraction: self.split_fraction,
            patches: self.patches,
            image_dim: self.image_dim,
            foreground_patches: self.foreground_patches,
            clutter_pool_size: self.clutter_pool_size,
            noise_sigma: self.noise_sigma,
            salience: self.salience,
            samples_per_class: self.samples_per_class,
            seed: self.data_seed,
            clutter_seed: self.clutter_seed,
        }
    }

    pub fn target_descriptor(&self) -> DatasetDescriptor {
        DatasetDescriptor {
            seed: self.target_data_seed.unwrap_or(self.data_seed.wrapping_add(1)),
            clutter_seed: Some(self.clutter_seed.unwrap_or(self.data_seed)),
            ..self.descriptor()
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            base_lr: self.base_lr,
            warmup_lr: self.warmup_lr,
            warmup_epochs: self.warmup_epochs,
            epochs: self.epochs,
            batch_size: self.batch_size,
            momentum: self.momentum,
            seed: 0,
        }
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            prompt_len: self.prompt_len,
            token_dim: self.token_dim,
            joint_dim: self.joint_dim,
            text_hidden: self.text_hidden,
            meta_hidden: self.meta_hidden,
            gamma: self.gamma,
            patch_aggregation: self.patch_aggregation,
            shots: self.shots,
            sgd: self.sgd(),
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.descriptor().validate()?;
        self.run_config().validate()?;
        if self.seeds.is_empty() {
            return Err(Error::invalid("seeds must not be empty"));
        }
        Ok(())
    }

    /// The source dataset: loaded from `data_path` or generated.
    pub fn dataset(&self) -> Result<Dataset, Error> {
        load_or_generate(self.data_path.as_deref(), &self.descriptor(), self.split_fraction)
    }

    pub fn target_dataset(&self) -> Result<Dataset, Error> {
        load_or_generate(
            self.target_data_path.as_deref(),
            &self.target_descriptor(),
            self.split_fraction,
        )
    }
}

fn load_or_generate(path: Option<&Path>, desc: &DatasetDescriptor, split_fraction: f64) -> Result<Dataset, Error> {
    match path {
        Some(p) => Dataset::from_cache(&FeatureCache::load(p)?, split_fraction, desc.seed),
        None => generate(desc),
    }
}

/// A CLI failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn config(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: msg.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFiniteLoss { .. }
            | Error::NonFiniteObjective
            | Error::NonFiniteInput
            | Error::DegenerateFeature
            | Error::DegenerateVector => EXIT_NUMERICAL,
            _ => EXIT_CONFIG,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

#[derive(Parser, Debug)]
#[command(
    name = "copl",
    version,
    about = "Contextual prompt learning over frozen stub encoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and write it as a CPFC1 feature cache.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output path; defaults to `cache_path`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// `--key value` config overrides.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "OVERRIDES")]
        rest: Vec<String>,
    },
    /// Train `method` on the base classes; writes checkpoint and history CSV.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "OVERRIDES")]
        rest: Vec<String>,
    },
    /// Train and evaluate every (method, seed) under a protocol; merges rows
    /// into the results CSV and its JSON mirror.
    Eval {
        /// base_to_new, cross_dataset, incremental, ablation_global_vs_local
        /// or hm_check (followed by two accuracies).
        protocol: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Worker threads for independent runs.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "OVERRIDES")]
        rest: Vec<String>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_INSTANCES)]
        instances: usize,
        /// Negate the analytic gradient of one parameter group.
        #[arg(long, hide = true)]
        flip_sign: Option<String>,
    },
    /// Harmonic mean of two accuracies, two decimals.
    HmCheck { seen: f64, unseen: f64 },
}

/// Flags that can appear among the trailing overrides.
#[derive(Debug, Default)]
struct Extra {
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    jobs: Option<usize>,
    positional: Vec<String>,
    overrides: BTreeMap<String, String>,
}

fn parse_rest(rest: &[String]) -> CliResult<Extra> {
    let mut extra = Extra::default();
    let mut i = 0;
    while i < rest.len() {
        let token = &rest[i];
        let Some(flag) = token.strip_prefix("--") else {
            if !extra.overrides.is_empty() {
                return Err(Failure::config(format!("unexpected argument {token:?}")));
            }
            extra.positional.push(token.clone());
            i += 1;
            continue;
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = rest
                    .get(i + 1)
                    .ok_or_else(|| Failure::config(format!("flag --{flag} needs a value")))?;
                i += 1;
                (flag.to_string(), v.clone())
            }
        };
        i += 1;
        let key = key.replace('-', "_");
        match key.as_str() {
            "config" => extra.config = Some(value.into()),
            "out" => extra.out = Some(value.into()),
            "jobs" => {
                extra.jobs = Some(
                    value
                        .parse()
                        .map_err(|_| Failure::config(format!("--jobs expects a count, got {value:?}")))?,
                )
            }
            _ => {
                if extra.overrides.insert(key.clone(), value).is_some() {
                    return Err(Failure::config(format!("--{key} given twice")));
                }
            }
        }
    }
    Ok(extra)
}

/// Interprets an override string against the current value of its key.
fn override_value(current: Option<&Value>, raw: &str) -> Value {
    let parsed = serde_json::from_str::<Value>(raw).ok();
    if let Some(Value::Array(_)) = current {
        if let Some(v @ Value::Array(_)) = &parsed {
            return v.clone();
        }
        let items = raw
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| serde_json::from_str(s.trim()).unwrap_or_else(|_| Value::String(s.trim().to_string())))
            .collect();
        return Value::Array(items);
    }
    parsed.unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Config resolved from defaults, an optional file and overrides.
#[derive(Debug)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub overrides: BTreeMap<String, String>,
    pub source: Option<PathBuf>,
}

pub fn resolve_config(path: Option<&Path>, overrides: &BTreeMap<String, String>) -> CliResult<Resolved> {
    let mut map = match serde_json::to_value(ExperimentConfig::default()) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("config serializes to an object"),
    };
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)
            .map_err(|e| Failure::config(format!("cannot read config {}: {e}", p.display())))?;
        let file: Map<String, Value> = serde_json::from_str(&text)
            .map_err(|e| Failure::config(format!("config {} is not a flat JSON object: {e}", p.display())))?;
        map.extend(file);
    }
    for (key, raw) in overrides {
        let v = override_value(map.get(key), raw);
        map.insert(key.clone(), v);
    }
    let config: ExperimentConfig =
        serde_json::from_value(Value::Object(map)).map_err(|e| Failure::config(format!("invalid config: {e}")))?;
    config.validate()?;
    Ok(Resolved {
        config,
        overrides: overrides.clone(),
        source: path.map(Path::to_path_buf),
    })
}

#[derive(Serialize)]
struct Echo<'a> {
    command: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    protocol: Option<&'a str>,
    config_file: Option<&'a Path>,
    overrides: &'a BTreeMap<String, String>,
    config: &'a ExperimentConfig,
}

/// `<path>.config.json`
pub fn echo_path(path: &Path) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(".config.json");
    PathBuf::from(s)
}

fn write_echo(out: &Path, command: &str, protocol: Option<&str>, resolved: &Resolved) -> CliResult<PathBuf> {
    let echo = Echo {
        command,
        protocol,
        config_file: resolved.source.as_deref(),
        overrides: &resolved.overrides,
        config: &resolved.config,
    };
    let mut text = serde_json::to_string_pretty(&echo).map_err(|e| Failure::config(e.to_string()))?;
    text.push('\n');
    let path = echo_path(out);
    std::fs::write(&path, text).map_err(Error::from)?;
    Ok(path)
}

fn io_failure(path: &Path, e: Error) -> Failure {
    let mut f = Failure::from(e);
    f.message = format!("{}: {}", path.display(), f.message);
    f
}

fn cmd_gen_data(resolved: &Resolved, out: Option<PathBuf>) -> CliResult<()> {
    let cfg = &resolved.config;
    let out = out.unwrap_or_else(|| cfg.cache_path.clone());
    let dataset = generate(&cfg.descriptor())?;
    dataset.to_cache().save(&out).map_err(|e| io_failure(&out, e))?;
    write_echo(&out, "gen-data", None, resolved)?;
    println!(
        "wrote {}: K = {} ({} base, {} new), P = {}, d_img = {}, {} samples",
        out.display(),
        dataset.num_classes(),
        dataset.ids_in(Split::Base).len(),
        dataset.ids_in(Split::New).len(),
        dataset.patches,
        dataset.image_dim,
        dataset.samples.len()
    );
    Ok(())
}

fn cmd_train(resolved: &Resolved) -> CliResult<()> {
    let cfg = &resolved.config;
    let seed = cfg.seeds[0];
    let dataset = cfg.dataset()?;
    let trained = train_base(cfg.method, &dataset, &cfg.run_config(), seed).map_err(|e| {
        let mut f = Failure::from(e);
        if f.code == EXIT_NUMERICAL {
            f.message = format!(
                "{} (method {}, seed {seed}, base_lr {:e}, gamma {:e})",
                f.message, cfg.method, cfg.base_lr, cfg.gamma
            );
        }
        f
    })?;
    let ckpt = &cfg.checkpoint_path;
    trained.model.params.save(ckpt).map_err(|e| io_failure(ckpt, e))?;
    let mut csv = Vec::new();
    trained.history.write_csv(&mut csv)?;
    std::fs::write(&cfg.history_path, csv).map_err(|e| io_failure(&cfg.history_path, e.into()))?;
    write_echo(ckpt, "train", None, resolved)?;
    let last = trained.history.epoch_loss.last().copied();
    match last {
        Some(loss) => println!(
            "trained {} (seed {seed}) for {} steps, final epoch loss {loss:.6}; wrote {} and {}",
            cfg.method,
            trained.history.steps.len(),
            ckpt.display(),
            cfg.history_path.display()
        ),
        None => println!("no training steps; wrote initial parameters to {}", ckpt.display()),
    }
    Ok(())
}

fn protocol_names() -> String {
    let mut names: Vec<&str> = Protocol::ALL.iter().map(|p| p.name()).collect();
    names.push(HM_CHECK);
    names.join(", ")
}

fn run_one(
    protocol: Protocol,
    method: Method,
    cfg: &ExperimentConfig,
    data: &Data,
    seed: u64,
) -> crate::Result<Vec<MetricRow>> {
    let run = cfg.run_config();
    Ok(match protocol {
        Protocol::BaseToNew => vec![run_base_to_new(method, &data.source, &run, seed)?],
        Protocol::CrossDataset => {
            let target = data.target.as_ref().expect("target loaded for cross_dataset");
            vec![run_cross_dataset(method, &data.source, target, &run, seed)?]
        }
        Protocol::Incremental => vec![run_incremental(method, &data.source, &run, seed)?],
        Protocol::AblationGlobalVsLocal => run_ablation_global_vs_local(&data.source, &run, seed)?.to_vec(),
    })
}

struct Data {
    source: Dataset,
    target: Option<Dataset>,
}

fn format_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into())
}

fn cmd_eval(resolved: &Resolved, protocol: Protocol, jobs: Option<usize>) -> CliResult<()> {
    let cfg = &resolved.config;
    let data = Data {
        source: cfg.dataset()?,
        target: match protocol {
            Protocol::CrossDataset => Some(cfg.target_dataset()?),
            _ => None,
        },
    };
    let methods: Vec<Method> = match protocol {
        Protocol::AblationGlobalVsLocal => vec![Method::Copl],
        _ => cfg.methods.clone(),
    };
    if methods.is_empty() {
        return Err(Failure::config("methods must not be empty"));
    }
    let tasks: Vec<(Method, u64)> = methods
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(1).max(1))
        .build()
        .map_err(|e| Failure::config(e.to_string()))?;
    let results: Vec<crate::Result<Vec<MetricRow>>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(m, s)| run_one(protocol, m, cfg, &data, s))
            .collect()
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    let path = &cfg.results_path;
    merge_results(path, rows.iter().cloned()).map_err(|e| io_failure(path, e))?;
    let echo_target = path.with_extension(protocol.name());
    write_echo(&echo_target, "eval", Some(protocol.name()), resolved)?;
    println!(
        "{:<26} {:<12} {:>4} {:>8} {:>10} {:>7}",
        "protocol", "method", "seed", "seen", "unseen", "hm"
    );
    for r in &rows {
        println!(
            "{:<26} {:<12} {:>4} {:>8} {:>10} {:>7}",
            r.protocol.name(),
            r.method.name(),
            r.seed,
            format_opt(r.seen_acc),
            format_opt(r.unseen_acc),
            format_opt(r.hm)
        );
    }
    println!("merged {} rows into {}", rows.len(), path.display());
    Ok(())
}

fn cmd_hm_check(seen: f64, unseen: f64) -> CliResult<()> {
    println!("{:.2}", harmonic_mean(seen, unseen)?);
    Ok(())
}

fn parse_accuracy(s: &str) -> CliResult<f64> {
    s.parse()
        .map_err(|_| Failure::config(format!("expected an accuracy, got {s:?}")))
}

fn cmd_gradcheck(instances: usize, flip_sign: Option<&str>) -> CliResult<i32> {
    if instances == 0 {
        return Err(Failure::config("instances must be positive"));
    }
    let fault = flip_sign.map(Fault::flip_sign).transpose()?;
    let report = run_suite(instances, fault)?;
    print!("{report}");
    if report.pass() {
        println!("all gradients agree");
        Ok(EXIT_OK)
    } else {
        let worst = report.worst().expect("failing report has lines");
        println!(
            "FAILED: worst {} with relative error {:.3e} (seed {}, entry {})",
            worst.path, worst.max_rel_error, worst.worst_seed, worst.worst_index
        );
        Ok(EXIT_CHECK_FAILED)
    }
}

fn dispatch(cli: Cli) -> CliResult<i32> {
    match cli.command {
        Command::GenData { config, out, rest } => {
            let extra = parse_rest(&rest)?;
            reject_positional(&extra)?;
            let resolved = resolve_config(extra.config.as_deref().or(config.as_deref()), &extra.overrides)?;
            cmd_gen_data(&resolved, extra.out.or(out))?;
        }
        Command::Train { config, rest } => {
            let extra = parse_rest(&rest)?;
            reject_positional(&extra)?;
            let resolved = resolve_config(extra.config.as_deref().or(config.as_deref()), &extra.overrides)?;
            cmd_train(&resolved)?;
        }
        Command::Eval {
            protocol,
            config,
            jobs,
            rest,
        } => {
            let extra = parse_rest(&rest)?;
            if protocol == HM_CHECK {
                let [a, b] = extra.positional.as_slice() else {
                    return Err(Failure::config("hm_check expects two accuracies"));
                };
                cmd_hm_check(parse_accuracy(a)?, parse_accuracy(b)?)?;
                return Ok(EXIT_OK);
            }
            let protocol: Protocol = protocol
                .parse()
                .map_err(|_| Failure::config(format!("unknown protocol {protocol:?}; valid: {}", protocol_names())))?;
            reject_positional(&extra)?;
            let resolved = resolve_config(extra.config.as_deref().or(config.as_deref()), &extra.overrides)?;
            cmd_eval(&resolved, protocol, extra.jobs.or(jobs))?;
        }
        Command::Gradcheck { instances, flip_sign } => return cmd_gradcheck(instances, flip_sign.as_deref()),
        Command::HmCheck { seen, unseen } => cmd_hm_check(seen, unseen)?,
    }
    Ok(EXIT_OK)
}

fn reject_positional(extra: &Extra) -> CliResult<()> {
    match extra.positional.first() {
        Some(p) => Err(Failure::config(format!("unexpected argument {p:?}"))),
        None => Ok(()),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}
