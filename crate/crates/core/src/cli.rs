//! Command-line front end: `gen`, `train`, `eval`, `ablate` and `report`.
//!
//! Every option can come from a flat `key = value` configuration file with
//! optional `[command]` sections; command-line flags win over the file, and
//! section keys win over top-level keys. Each command writes the fully
//! resolved configuration to `config.echo` in its output directory, and that
//! file can be fed back through `--config` to repeat the run.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::correlation::FusionStrategy;
use crate::dataset::{Dataset, GenConfig, Split};
use crate::error::{Error, Result};
use crate::metrics::{self, format_distance_dump, parse_distance_dump, MetricKind};
use crate::net::{NetConfig, PoseNet};
use crate::synth::{SceneConfig, Shape};
use crate::train::{self, TrainConfig};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "CORRFUSE_OUT";
pub const ECHO_FILE: &str = "config.echo";

#[derive(Parser, Debug)]
#[command(name = "corrfuse", version, about = "Correlation-fusion 6D pose estimation on synthetic RGB-D scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train an estimator and optionally a refiner.
    Train(TrainArgs),
    /// Evaluate checkpoints (or ground truth) on a dataset split.
    Eval(EvalArgs),
    /// Train and evaluate several fusion strategies over several seeds.
    Ablate(AblateArgs),
    /// Rebuild a report from a distance dump.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Configuration file (`key = value` lines, optional `[command]` sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory [default: $CORRFUSE_OUT/<command> or runs/<command>].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated shapes: box, cylinder, lshape, optionally with sizes, e.g. box(0.1,0.1,0.1).
    #[arg(long)]
    models: Option<String>,
    /// Scenes per model.
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of model points removed by the occluding sector, in [0, 0.6].
    #[arg(long)]
    occlusion: Option<f64>,
    /// Gaussian noise on observed points, meters.
    #[arg(long)]
    noise: Option<f64>,
    /// Observed points per scene (0 keeps every visible point).
    #[arg(long)]
    points: Option<usize>,
    /// Surface samples per model.
    #[arg(long)]
    model_points: Option<usize>,
    #[arg(long)]
    eval_fraction: Option<f64>,
    /// Half-width of the translation box, meters.
    #[arg(long)]
    translation_range: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    /// intra, inter, fuse_v1, fuse_v2, fuse_v3 or concat.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    /// constant or cosine.
    #[arg(long)]
    lr_schedule: Option<String>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Confidence regularization weight.
    #[arg(long)]
    w: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    encoder_hidden: Option<usize>,
    #[arg(long)]
    head_hidden: Option<usize>,
    #[arg(long)]
    point_scale: Option<f64>,
    #[arg(long)]
    refiner_epochs: Option<usize>,
    #[arg(long)]
    refiner_trigger: Option<f64>,
    #[arg(long)]
    refiner_decay: Option<f64>,
    #[arg(long)]
    refiner_batch: Option<usize>,
    #[arg(long)]
    refine_iters: Option<usize>,
    #[arg(long)]
    loss_stride: Option<usize>,
    #[arg(long)]
    freeze_lambdas: Option<bool>,
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Estimator checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Refiner checkpoint.
    #[arg(long)]
    refiner: Option<PathBuf>,
    #[arg(long)]
    refine_iters: Option<usize>,
    /// Score ground-truth poses instead of a checkpoint.
    #[arg(long)]
    oracle: Option<bool>,
    /// Comma-separated object ids scored with ADD-S [default: objects with symmetry metadata].
    #[arg(long)]
    symmetric: Option<String>,
    /// Accuracy threshold in meters.
    #[arg(long)]
    threshold: Option<f64>,
    /// train or eval.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated strategies [default: all six].
    #[arg(long)]
    strategies: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// Distance dump written by `eval`.
    #[arg(long)]
    dump: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
}

/// Parses `key = value` text with `[section]` headers into
/// `section -> key -> value`; top-level keys live under the empty section.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, BTreeMap<String, String>>> {
    let mut out: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut section = String::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected `key = value`", no + 1)))?;
        out.entry(section.clone())
            .or_default()
            .insert(k.trim().replace('-', "_"), v.trim().to_string());
    }
    Ok(out)
}

/// Merges file values and flags for one command and records every resolved
/// value for the echo.
struct Resolver {
    command: &'static str,
    file: BTreeMap<String, String>,
    section_keys: Vec<String>,
    echo: Vec<(String, String)>,
}

impl Resolver {
    fn new(command: &'static str, config: Option<&Path>) -> Result<Self> {
        let mut file = BTreeMap::new();
        let mut section_keys = Vec::new();
        if let Some(path) = config {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            let mut sections = parse_config(&text)?;
            if let Some(top) = sections.remove("") {
                file.extend(top);
            }
            if let Some(own) = sections.remove(command) {
                section_keys = own.keys().cloned().collect();
                file.extend(own);
            }
        }
        Ok(Self {
            command,
            file,
            section_keys,
            echo: Vec::new(),
        })
    }

    fn from_file<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.file.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("config key `{key}`: cannot parse `{v}`"))),
        }
    }

    fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        let value = match flag {
            Some(v) => v,
            None => self.from_file(key)?.unwrap_or(default),
        };
        self.echo.push((key.to_string(), value.to_string()));
        Ok(value)
    }

    fn get_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>> {
        let value = flag.or_else(|| self.file.get(key).map(PathBuf::from));
        if let Some(p) = &value {
            self.echo.push((key.to_string(), p.display().to_string()));
        }
        Ok(value)
    }

    fn require_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
        self.get_path(key, flag)?
            .ok_or_else(|| Error::Config(format!("`{}` needs --{}", self.command, key.replace('_', "-"))))
    }

    fn out_dir(&mut self, flag: Option<PathBuf>) -> Result<PathBuf> {
        let out = match flag.or_else(|| self.file.get("out").map(PathBuf::from)) {
            Some(p) => p,
            None => std::env::var_os(OUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"))
                .join(self.command),
        };
        self.echo.push(("out".into(), out.display().to_string()));
        Ok(out)
    }

    /// Rejects keys in this command's section that nothing consumed.
    fn finish(&self) -> Result<()> {
        for k in &self.section_keys {
            if !self.echo.iter().any(|(e, _)| e == k) && k != "config" {
                return Err(Error::Config(format!("unknown key `{k}` in [{}]", self.command)));
            }
        }
        Ok(())
    }

    fn write_echo(&self, dir: &Path) -> Result<()> {
        let mut text = format!("[{}]\n", self.command);
        for (k, v) in &self.echo {
            text.push_str(&format!("{k} = {v}\n"));
        }
        write_file(&dir.join(ECHO_FILE), text.as_bytes())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Splits on commas outside parentheses, so `box(0.1,0.1,0.1),lshape` has
/// two items.
fn split_list(s: &str) -> Vec<String> {
    let mut items = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            _ => {}
        }
        if (ch == ',' || ch == ';') && depth == 0 {
            items.push(cur.trim().to_string());
            cur.clear();
        } else {
            cur.push(ch);
        }
    }
    if !cur.trim().is_empty() {
        items.push(cur.trim().to_string());
    }
    items.retain(|s| !s.is_empty());
    items
}

fn resolve_train(r: &mut Resolver, f: TrainFlags) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let strategy: FusionStrategy = r
        .get("strategy", f.strategy, d.net.strategy.to_string())?
        .parse()?;
    let net = NetConfig {
        strategy,
        dim: r.get("dim", f.dim, d.net.dim)?,
        encoder_hidden: r.get("encoder_hidden", f.encoder_hidden, d.net.encoder_hidden)?,
        head_hidden: r.get("head_hidden", f.head_hidden, d.net.head_hidden)?,
        point_scale: r.get("point_scale", f.point_scale, d.net.point_scale)?,
        centered: true,
    };
    let cfg = TrainConfig {
        net,
        lr: r.get("lr", f.lr, d.lr)?,
        lr_schedule: r.get("lr_schedule", f.lr_schedule, d.lr_schedule.to_string())?.parse()?,
        batch: r.get("batch", f.batch, d.batch)?,
        epochs: r.get("epochs", f.epochs, d.epochs)?,
        w: r.get("w", f.w, d.w)?,
        seed: r.get("seed", f.seed, d.seed)?,
        threads: r.get("threads", f.threads, d.threads)?,
        refiner_trigger: r.get("refiner_trigger", f.refiner_trigger, d.refiner_trigger)?,
        refiner_decay: r.get("refiner_decay", f.refiner_decay, d.refiner_decay)?,
        refiner_batch: r.get("refiner_batch", f.refiner_batch, d.refiner_batch)?,
        refiner_epochs: r.get("refiner_epochs", f.refiner_epochs, d.refiner_epochs)?,
        refine_iters: r.get("refine_iters", f.refine_iters, d.refine_iters)?,
        loss_stride: r.get("loss_stride", f.loss_stride, d.loss_stride)?,
        freeze_lambdas: r.get("freeze_lambdas", f.freeze_lambdas, d.freeze_lambdas)?,
        eval_every: r.get("eval_every", f.eval_every, d.eval_every)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut r = Resolver::new("gen", a.common.config.as_deref())?;
    let d = GenConfig::default();
    let default_models: Vec<String> = d.shapes.iter().map(|s| s.kind().to_string()).collect();
    let models = r.get("models", a.models, default_models.join(","))?;
    let shapes = split_list(&models)
        .iter()
        .map(|m| m.parse::<Shape>())
        .collect::<Result<Vec<_>>>()?;
    let cfg = GenConfig {
        shapes,
        scenes_per_model: r.get("scenes", a.scenes, d.scenes_per_model)?,
        seed: r.get("seed", a.seed, d.seed)?,
        model_points: r.get("model_points", a.model_points, d.model_points)?,
        scene: SceneConfig {
            occlusion: r.get("occlusion", a.occlusion, d.scene.occlusion)?,
            noise_sigma: r.get("noise", a.noise, d.scene.noise_sigma)?,
            points: r.get("points", a.points, d.scene.points)?,
            translation_range: r.get("translation_range", a.translation_range, d.scene.translation_range)?,
        },
        eval_fraction: r.get("eval_fraction", a.eval_fraction, d.eval_fraction)?,
    };
    let out = r.out_dir(a.common.out)?;
    r.finish()?;
    let data = Dataset::generate(&cfg)?;
    create_dir(&out)?;
    data.write(&out)?;
    r.write_echo(&out)?;
    let train = data.split(Split::Train).count();
    println!(
        "wrote {} models, {} scenes ({} train, {} eval) to {}",
        data.objects.len(),
        data.scenes.len(),
        train,
        data.scenes.len() - train,
        out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut r = Resolver::new("train", a.common.config.as_deref())?;
    let data_dir = r.require_path("data", a.data)?;
    let cfg = resolve_train(&mut r, a.flags)?;
    let out = r.out_dir(a.common.out)?;
    r.finish()?;
    let data = Dataset::load(&data_dir)?;
    create_dir(&out)?;
    r.write_echo(&out)?;

    let log_path = out.join("estimator.log.jsonl");
    let result = train::train_estimator_with(&data, &cfg, &mut |e| {
        eprintln!("estimator epoch {:>4}  loss {:.6}  {:.1}s", e.epoch, e.mean_loss, e.elapsed_s);
    });
    let (estimator, log) = match result {
        Ok(v) => v,
        Err(e) => {
            let _ = write_file(&log_path, format!("{{\"record\":\"error\",\"detail\":{:?}}}\n", e.to_string()).as_bytes());
            return Err(e);
        }
    };
    estimator.save(&out.join("estimator.ckpt"))?;
    write_file(&log_path, log.to_json_lines().as_bytes())?;
    println!("estimator checksum {} -> {}", log.checksum, out.join("estimator.ckpt").display());

    if cfg.refiner_epochs > 0 {
        let (refiner, rlog) = train::train_refiner_with(&data, &estimator, &log, &cfg, &mut |e| {
            eprintln!("refiner   epoch {:>4}  loss {:.6}  {:.1}s", e.epoch, e.mean_loss, e.elapsed_s);
        })?;
        refiner.save(&out.join("refiner.ckpt"))?;
        write_file(&out.join("refiner.log.jsonl"), rlog.to_json_lines().as_bytes())?;
        println!("refiner checksum {} -> {}", rlog.checksum, out.join("refiner.ckpt").display());
    }
    Ok(())
}

fn symmetric_list(r: &mut Resolver, flag: Option<String>, data: &Dataset) -> Result<Vec<String>> {
    let default = data.symmetric_ids().join(",");
    let list = r.get("symmetric", flag, default)?;
    let ids = split_list(&list);
    for id in &ids {
        data.object(id)?;
    }
    Ok(ids)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut r = Resolver::new("eval", a.common.config.as_deref())?;
    let data_dir = r.require_path("data", a.data)?;
    let oracle = r.get("oracle", a.oracle, false)?;
    let checkpoint = if oracle { None } else { Some(r.require_path("checkpoint", a.checkpoint)?) };
    let refiner = r.get_path("refiner", a.refiner)?;
    let refine_iters = r.get("refine_iters", a.refine_iters, TrainConfig::default().refine_iters)?;
    let threshold = r.get("threshold", a.threshold, metrics::ACCURACY_THRESHOLD)?;
    let split: Split = r.get("split", a.split, "eval".to_string())?.parse()?;
    let threads = r.get("threads", a.threads, 1usize)?;
    if threads == 0 {
        return Err(Error::Config("thread count must be positive".into()));
    }
    let data = Dataset::load(&data_dir)?;
    let symmetric = symmetric_list(&mut r, a.symmetric, &data)?;
    let out = r.out_dir(a.common.out)?;
    r.finish()?;

    let records = match &checkpoint {
        None => train::evaluate_oracle(&data, split, &symmetric)?,
        Some(path) => {
            let estimator = PoseNet::load(path)?;
            let refiner = refiner.as_deref().map(PoseNet::load).transpose()?;
            train::evaluate(
                &data,
                split,
                &estimator,
                refiner.as_ref().map(|n| (n, refine_iters)),
                &symmetric,
                threads,
            )?
        }
    };
    if records.is_empty() {
        return Err(Error::Input(format!("split `{}` has no scenes", split.name())));
    }
    let report = train::report_records(&records, &symmetric, threshold)?;
    create_dir(&out)?;
    r.write_echo(&out)?;
    let dump: Vec<_> = records.iter().map(|r| r.distance_record()).collect();
    write_file(&out.join("distances.txt"), format_distance_dump(&dump).as_bytes())?;
    write_file(&out.join("report.txt"), report.to_table().as_bytes())?;
    write_file(&out.join("report.csv"), report.to_csv().as_bytes())?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let mut r = Resolver::new("ablate", a.common.config.as_deref())?;
    let data_dir = r.require_path("data", a.data)?;
    let all: Vec<String> = FusionStrategy::ALL.iter().map(|s| s.name().to_string()).collect();
    let strategies = split_list(&r.get("strategies", a.strategies, all.join(","))?)
        .iter()
        .map(|s| s.parse::<FusionStrategy>())
        .collect::<Result<Vec<_>>>()?;
    let seeds = split_list(&r.get("seeds", a.seeds, "1,2,3".to_string())?)
        .iter()
        .map(|s| s.parse::<u64>().map_err(|_| Error::Config(format!("bad seed `{s}`"))))
        .collect::<Result<Vec<_>>>()?;
    let threshold = r.get("threshold", a.threshold, metrics::ACCURACY_THRESHOLD)?;
    let cfg = resolve_train(&mut r, a.flags)?;
    let out = r.out_dir(a.common.out)?;
    r.finish()?;
    let data = Dataset::load(&data_dir)?;
    create_dir(&out)?;
    r.write_echo(&out)?;
    let mut io_err = None;
    let table = train::ablate(&data, &strategies, &seeds, &cfg, threshold, &mut |run| {
        eprintln!(
            "{:<9} seed {:<4} AUC {:6.2}  <2cm {:6.2}",
            run.strategy.name(),
            run.seed,
            run.report.mean_auc,
            run.report.mean_below
        );
        let dump: Vec<_> = run.records.iter().map(|r| r.distance_record()).collect();
        let path = out.join(format!("distances_{}_{}.txt", run.strategy.name(), run.seed));
        if let Err(e) = write_file(&path, format_distance_dump(&dump).as_bytes()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    write_file(&out.join("ablation.txt"), table.to_table().as_bytes())?;
    write_file(&out.join("ablation.csv"), table.to_csv().as_bytes())?;
    print!("{}", table.to_table());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let mut r = Resolver::new("report", a.common.config.as_deref())?;
    let dump_path = r.require_path("dump", a.dump)?;
    let threshold = r.get("threshold", a.threshold, metrics::ACCURACY_THRESHOLD)?;
    let out = r.get_path("out", a.common.out)?;
    r.finish()?;
    let text = fs::read_to_string(&dump_path).map_err(|e| Error::io(&dump_path, e))?;
    let dump = parse_distance_dump(&text).map_err(|e| Error::format(&dump_path, e.to_string()))?;
    let objects: Vec<String> = dump
        .iter()
        .map(|d| d.object.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let symmetric = dump
        .iter()
        .filter(|d| d.kind == MetricKind::AddS)
        .map(|d| d.object.clone())
        .collect();
    let report = metrics::report(&dump, &objects, &symmetric, threshold, metrics::AUC_MAX_THRESHOLD)?;
    if let Some(out) = out {
        create_dir(&out)?;
        write_file(&out.join("report.txt"), report.to_table().as_bytes())?;
        write_file(&out.join("report.csv"), report.to_csv().as_bytes())?;
    }
    print!("{}", report.to_table());
    Ok(())
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                1
            } else {
                2
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_sections_and_comments() {
        let cfg = parse_config("seed = 3\n# note\n[train]\nlr = 0.001 # inline\nmodel-points=5\n").unwrap();
        assert_eq!(cfg[""]["seed"], "3");
        assert_eq!(cfg["train"]["lr"], "0.001");
        assert_eq!(cfg["train"]["model_points"], "5");
        assert!(parse_config("novalue\n").is_err());
    }

    #[test]
    fn list_splitting_respects_parentheses() {
        assert_eq!(split_list("box(0.1,0.1,0.1), lshape"), vec!["box(0.1,0.1,0.1)", "lshape"]);
        assert_eq!(split_list("1,2,,3"), vec!["1", "2", "3"]);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["corrfuse", "frobnicate"]), 1);
        assert_eq!(run(["corrfuse", "train"]), 1);
        assert_eq!(run(["corrfuse", "gen", "--occlusion", "0.9", "--out", "/nonexistent/never"]), 1);
    }
}
