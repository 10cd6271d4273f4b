//! Run configuration: a line-based `key = value` file with `[section]`
//! headers, overridden by `--section.key value` flags.
//!
//! ```text
//! [train]
//! method = dial-kl
//! epochs = 20
//! [train.attack]
//! eps = 0.3
//! [dial]
//! lambda = 6
//! [attack.0]
//! name = pgd40
//! iters = 40
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::attack::{AttackSpec, InnerLoss, Norm};
use crate::error::{Error, Result};
use crate::eval::{Corruption, NamedAttack, Representation};
use crate::loss::{DialConfig, DialVariant, Objective, Schedule};
use crate::model::PRESETS;
use crate::train::{default_inner_loss, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Float,
    Int,
    Bool,
    Text,
    IntList,
    Choice(&'static [&'static str]),
}

const NORMS: &[&str] = &["linf", "l2"];
const INNER: &[&str] = &["ce", "kl", "cw_margin"];
const METHODS: &[&str] = &["dial-ce", "dial-kl", "at", "trades", "mart", "natural"];
const ATTACK_KEYS: &[(&str, Kind)] = &[
    ("norm", Kind::Choice(NORMS)),
    ("eps", Kind::Float),
    ("step", Kind::Float),
    ("iters", Kind::Int),
    ("random_start", Kind::Bool),
    ("inner_loss", Kind::Choice(INNER)),
    ("lo", Kind::Float),
    ("hi", Kind::Float),
];

/// Every accepted key except the attack sections.
const KEYS: &[(&str, Kind)] = &[
    ("run.seed", Kind::Int),
    ("run.out", Kind::Text),
    ("run.restarts", Kind::Int),
    ("run.batch", Kind::Int),
    ("data.name", Kind::Choice(&["mnist", "two_moons", "gauss_mix"])),
    ("data.path", Kind::Text),
    ("data.n", Kind::Int),
    ("data.noise", Kind::Float),
    ("data.classes", Kind::Int),
    ("data.seed", Kind::Int),
    ("data.split", Kind::Choice(&["train", "val", "test"])),
    ("data.limit", Kind::Int),
    ("model.preset", Kind::Choice(PRESETS)),
    ("model.checkpoint", Kind::Text),
    ("model.surrogate", Kind::Text),
    ("model.resume", Kind::Text),
    ("train.method", Kind::Choice(METHODS)),
    ("train.epochs", Kind::Int),
    ("train.batch_size", Kind::Int),
    ("train.lr", Kind::Float),
    ("train.momentum", Kind::Float),
    ("train.weight_decay", Kind::Float),
    ("train.lr_milestones", Kind::IntList),
    ("train.eps_warmup_epochs", Kind::Int),
    ("dial.lambda", Kind::Float),
    ("dial.r", Kind::Float),
    ("dial.schedule", Kind::Choice(&["constant", "ramp"])),
    ("corrupt.kind", Kind::Choice(&["all", "gaussian_noise", "impulse_noise", "contrast", "brightness", "pixelate"])),
    ("corrupt.severity", Kind::Int),
    ("diagnose.which", Kind::Choice(&["logits", "features"])),
    ("diagnose.adversarial", Kind::Bool),
    ("diagnose.scaling", Kind::Choice(&["raw", "max"])),
    ("bound.instances", Kind::Int),
    ("bound.points", Kind::Int),
    ("bound.grid", Kind::Int),
    ("bound.shift", Kind::Float),
];

fn levenshtein(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1];
        for (j, cb) in b.iter().enumerate() {
            cur.push((prev[j] + usize::from(ca != *cb)).min(prev[j + 1] + 1).min(cur[j] + 1));
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Resolves the schema entry for a fully qualified key.
fn kind_of(key: &str) -> Option<Kind> {
    if let Some(rest) = key.strip_prefix("attack.") {
        let (index, field) = rest.split_once('.')?;
        index.parse::<usize>().ok()?;
        if field == "name" {
            return Some(Kind::Text);
        }
        return ATTACK_KEYS.iter().find(|(k, _)| *k == field).map(|(_, t)| *t);
    }
    if let Some(field) = key.strip_prefix("train.attack.") {
        return ATTACK_KEYS.iter().find(|(k, _)| *k == field).map(|(_, t)| *t);
    }
    KEYS.iter().find(|(k, _)| *k == key).map(|(_, t)| *t)
}

fn nearest_key(key: &str) -> String {
    let mut candidates: Vec<String> = KEYS.iter().map(|(k, _)| k.to_string()).collect();
    for (field, _) in ATTACK_KEYS {
        candidates.push(format!("train.attack.{field}"));
    }
    // compare attack.N keys against the same index
    let index = key
        .strip_prefix("attack.")
        .and_then(|r| r.split_once('.'))
        .map(|(i, _)| i.to_string())
        .unwrap_or_else(|| "0".into());
    for field in ATTACK_KEYS.iter().map(|(f, _)| *f).chain(["name"]) {
        candidates.push(format!("attack.{index}.{field}"));
    }
    candidates
        .into_iter()
        .min_by_key(|c| levenshtein(key, c))
        .expect("nonempty schema")
}

fn check_value(key: &str, kind: Kind, value: &str) -> Result<()> {
    let bad = |what: &str| Err(Error::Config(format!("`{key}`: expected {what}, got `{value}`")));
    match kind {
        Kind::Float if value.parse::<f64>().map_or(true, |v| !v.is_finite()) => bad("a number"),
        Kind::Int if value.parse::<u64>().is_err() => bad("a nonnegative integer"),
        Kind::Bool if !matches!(value, "true" | "false") => bad("true or false"),
        Kind::IntList if !value.is_empty() && value.split(',').any(|v| v.trim().parse::<usize>().is_err()) => {
            bad("a comma-separated list of integers")
        }
        Kind::Choice(options) if !options.contains(&value) => bad(&format!("one of {}", options.join(", "))),
        _ => Ok(()),
    }
}

const RUN_SHORTHANDS: &[&str] = &["seed", "out", "restarts", "batch"];

/// Validated `key -> value` pairs, keys fully qualified (`dial.lambda`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig(BTreeMap<String, String>);

impl RawConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let Some(kind) = kind_of(key) else {
            return Err(Error::Config(format!(
                "unknown key `{key}` (did you mean `{}`?)",
                nearest_key(key)
            )));
        };
        check_value(key, kind, value)?;
        self.0.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    /// Parses config text. `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        let mut section = String::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("{origin}:{}: {msg}", n + 1));
            if let Some(name) = line.strip_prefix('[') {
                section = name
                    .strip_suffix(']')
                    .ok_or_else(|| at(format!("unterminated section header `{line}`")))?
                    .trim()
                    .to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            let full = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
            raw.set(&full, value.trim()).map_err(|e| at(e.to_string()))?;
        }
        Ok(raw)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies `--key value` pairs on top (later wins).
    pub fn apply_flags(&mut self, flags: &[String]) -> Result<()> {
        let mut it = flags.iter();
        while let Some(flag) = it.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("expected `--section.key value`, got `{flag}`")))?;
            let (key, value) = match key.split_once('=') {
                Some((k, v)) => (k, v.to_string()),
                None => (
                    key,
                    it.next()
                        .ok_or_else(|| Error::Config(format!("flag `{flag}` needs a value")))?
                        .clone(),
                ),
            };
            // bare `--seed`, `--out`, `--restarts`, `--batch` address `[run]`
            let key = if RUN_SHORTHANDS.contains(&key) { format!("run.{key}") } else { key.to_string() };
            self.set(&key, &value)?;
        }
        Ok(())
    }

    fn parsed<V: std::str::FromStr>(&self, key: &str) -> Option<V> {
        // values were checked on insertion
        self.get(key).and_then(|v| v.parse().ok())
    }

    fn required(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    fn attack_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self
            .0
            .keys()
            .filter_map(|k| k.strip_prefix("attack.")?.split_once('.')?.0.parse().ok())
            .collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    Mnist { path: PathBuf },
    Synthetic { kind: String, n: usize, noise: f64, classes: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

/// Fully resolved configuration for one CLI invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub restarts: usize,
    /// Evaluation batch size.
    pub batch: usize,
    pub data: DataSpec,
    pub split: SplitName,
    /// Use only the first `limit` examples of the evaluated split.
    pub limit: Option<usize>,
    pub preset: String,
    pub checkpoint: Option<PathBuf>,
    pub surrogate: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub train: TrainConfig,
    pub attacks: Vec<NamedAttack>,
    pub corrupt_kind: Option<Corruption>,
    pub corrupt_severity: Option<usize>,
    pub diagnose_which: Representation,
    pub diagnose_adversarial: bool,
    pub diagnose_max_scaling: bool,
    pub bound_instances: usize,
    pub bound_points: usize,
    pub bound_grid: usize,
    pub bound_shift: f64,
}

fn parse_norm(v: &str) -> Norm {
    if v == "l2" {
        Norm::L2
    } else {
        Norm::Linf
    }
}

fn parse_inner(v: &str) -> InnerLoss {
    match v {
        "kl" => InnerLoss::Kl,
        "cw_margin" => InnerLoss::CwMargin,
        _ => InnerLoss::Ce,
    }
}

fn attack_from(raw: &RawConfig, prefix: &str, base: AttackSpec) -> Result<AttackSpec> {
    let k = |f: &str| format!("{prefix}.{f}");
    let spec = AttackSpec {
        norm: raw.get(&k("norm")).map_or(base.norm, parse_norm),
        eps: raw.parsed(&k("eps")).unwrap_or(base.eps),
        step: raw.parsed(&k("step")).unwrap_or(base.step),
        iters: raw.parsed(&k("iters")).unwrap_or(base.iters),
        random_start: raw.parsed(&k("random_start")).unwrap_or(base.random_start),
        inner_loss: raw.get(&k("inner_loss")).map_or(base.inner_loss, parse_inner),
        lo: raw.parsed(&k("lo")).unwrap_or(base.lo),
        hi: raw.parsed(&k("hi")).unwrap_or(base.hi),
    };
    spec.validate().map_err(|e| Error::Config(format!("[{prefix}] {e}")))?;
    Ok(spec)
}

impl RunConfig {
    /// Builds the typed configuration; dataset-dependent defaults follow the
    /// MNIST protocol for `mnist` and small toy settings otherwise.
    pub fn resolve(raw: &RawConfig) -> Result<Self> {
        let data_name = raw.required("data.name")?;
        let mnist = data_name == "mnist";
        let data = if mnist {
            DataSpec::Mnist {
                path: PathBuf::from(raw.get("data.path").unwrap_or("data/mnist-10k")),
            }
        } else {
            DataSpec::Synthetic {
                kind: data_name.to_string(),
                n: raw.parsed("data.n").unwrap_or(1000),
                noise: raw.parsed("data.noise").unwrap_or(0.1),
                classes: raw.parsed("data.classes").unwrap_or(2),
                seed: raw.parsed("data.seed").unwrap_or(0),
            }
        };
        let method = raw.get("train.method").unwrap_or(if mnist { "dial-kl" } else { "dial-ce" });
        let dial_base = if method == "dial-ce" { DialConfig::ce() } else { DialConfig::kl() };
        let lambda = raw.parsed("dial.lambda").unwrap_or(dial_base.lambda);
        let dial = DialConfig {
            variant: if method == "dial-ce" { DialVariant::Ce } else { DialVariant::Kl },
            lambda,
            r_max: raw.parsed("dial.r").unwrap_or(dial_base.r_max),
            schedule: match raw.get("dial.schedule") {
                Some("constant") => Schedule::Constant,
                _ => Schedule::Ramp,
            },
        };
        let objective = match method {
            "dial-ce" | "dial-kl" => Objective::Dial(dial),
            "at" => Objective::At,
            "trades" => Objective::Trades { lambda },
            "mart" => Objective::Mart { lambda },
            _ => Objective::Natural,
        };
        let base_attack = if mnist {
            AttackSpec::linf(0.3, 0.01, 40)
        } else {
            AttackSpec {
                lo: -4.0,
                hi: 4.0,
                ..AttackSpec::linf(0.3, 0.1, 10)
            }
        };
        let train_attack = attack_from(
            raw,
            "train.attack",
            AttackSpec {
                inner_loss: default_inner_loss(&objective),
                ..base_attack
            },
        )?;
        let defaults = if mnist {
            TrainConfig::mnist()
        } else {
            TrainConfig {
                epochs: 60,
                batch_size: 64,
                lr0: 0.05,
                lr_milestones: vec![],
                ..TrainConfig::mnist()
            }
        };
        let train = TrainConfig {
            epochs: raw.parsed("train.epochs").unwrap_or(defaults.epochs),
            batch_size: raw.parsed("train.batch_size").unwrap_or(defaults.batch_size),
            lr0: raw.parsed("train.lr").unwrap_or(defaults.lr0),
            momentum: raw.parsed("train.momentum").unwrap_or(defaults.momentum),
            weight_decay: raw.parsed("train.weight_decay").unwrap_or(defaults.weight_decay),
            lr_milestones: match raw.get("train.lr_milestones") {
                Some("") => vec![],
                Some(v) => v.split(',').map(|s| s.trim().parse().expect("checked")).collect(),
                None => defaults.lr_milestones,
            },
            attack: train_attack,
            objective,
            seed: raw.parsed("run.seed").unwrap_or(0),
            eps_warmup_epochs: raw.parsed("train.eps_warmup_epochs").unwrap_or(0),
        };
        train.validate()?;

        let indices = raw.attack_indices();
        let attacks = if indices.is_empty() {
            vec![NamedAttack::new(
                format!("pgd{}", base_attack.iters),
                AttackSpec {
                    inner_loss: InnerLoss::Ce,
                    ..base_attack
                },
            )]
        } else {
            indices
                .iter()
                .map(|i| {
                    let prefix = format!("attack.{i}");
                    let spec = attack_from(raw, &prefix, base_attack)?;
                    let name = raw
                        .get(&format!("{prefix}.name"))
                        .map(str::to_string)
                        .unwrap_or_else(|| format!("{}-{}{}", spec.norm.name(), spec.inner_loss.name(), spec.iters));
                    Ok(NamedAttack::new(name, spec))
                })
                .collect::<Result<_>>()?
        };

        let preset = raw
            .get("model.preset")
            .unwrap_or(if mnist { "mnist-cnn" } else { "toy-mlp" })
            .to_string();
        let restarts = raw.parsed("run.restarts").unwrap_or(1usize);
        if restarts == 0 {
            return Err(Error::Config("`run.restarts` must be >= 1".into()));
        }
        let severity: Option<usize> = raw.parsed("corrupt.severity");
        if severity.is_some_and(|s| s > 5) {
            return Err(Error::Config("`corrupt.severity` must be in 0..=5".into()));
        }
        Ok(RunConfig {
            seed: train.seed,
            out_dir: PathBuf::from(raw.get("run.out").unwrap_or("runs/latest")),
            restarts,
            batch: raw.parsed("run.batch").unwrap_or(256),
            data,
            split: match raw.get("data.split") {
                Some("train") => SplitName::Train,
                Some("val") => SplitName::Val,
                _ => SplitName::Test,
            },
            limit: raw.parsed("data.limit"),
            preset,
            checkpoint: raw.get("model.checkpoint").map(PathBuf::from),
            surrogate: raw.get("model.surrogate").map(PathBuf::from),
            resume: raw.get("model.resume").map(PathBuf::from),
            train,
            attacks,
            corrupt_kind: match raw.get("corrupt.kind") {
                None | Some("all") => None,
                Some(k) => Some(Corruption::parse(k)?),
            },
            corrupt_severity: severity,
            diagnose_which: match raw.get("diagnose.which") {
                Some("logits") => Representation::Logits,
                _ => Representation::Features,
            },
            diagnose_adversarial: raw.parsed("diagnose.adversarial").unwrap_or(true),
            diagnose_max_scaling: raw.get("diagnose.scaling") == Some("max"),
            bound_instances: raw.parsed("bound.instances").unwrap_or(100),
            bound_points: raw.parsed("bound.points").unwrap_or(200),
            bound_grid: raw.parsed("bound.grid").unwrap_or(19),
            bound_shift: raw.parsed("bound.shift").unwrap_or(0.1),
        })
    }

    /// Checks that every input path named by the configuration exists.
    pub fn check_paths(&self) -> Result<()> {
        let mut paths: Vec<(&str, &Path)> = Vec::new();
        if let DataSpec::Mnist { path } = &self.data {
            paths.push(("data.path", path));
        }
        for (key, p) in [("model.checkpoint", &self.checkpoint), ("model.surrogate", &self.surrogate), ("model.resume", &self.resume)] {
            if let Some(p) = p {
                paths.push((key, p));
            }
        }
        match paths.into_iter().find(|(_, p)| !p.exists()) {
            Some((key, p)) => Err(Error::Config(format!("`{key}`: {} does not exist", p.display()))),
            None => Ok(()),
        }
    }

    /// The resolved configuration in the input format; parsing it back
    /// yields the same `RunConfig`.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let t = &self.train;
        let _ = writeln!(o, "[run]\nseed = {}\nout = {}\nrestarts = {}\nbatch = {}", self.seed, self.out_dir.display(), self.restarts, self.batch);
        let _ = writeln!(o, "\n[data]");
        match &self.data {
            DataSpec::Mnist { path } => {
                let _ = writeln!(o, "name = mnist\npath = {}", path.display());
            }
            DataSpec::Synthetic { kind, n, noise, classes, seed } => {
                let _ = writeln!(o, "name = {kind}\nn = {n}\nnoise = {noise}\nclasses = {classes}\nseed = {seed}");
            }
        }
        let split = match self.split {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        };
        let _ = writeln!(o, "split = {split}");
        if let Some(l) = self.limit {
            let _ = writeln!(o, "limit = {l}");
        }
        let _ = writeln!(o, "\n[model]\npreset = {}", self.preset);
        for (k, v) in [("checkpoint", &self.checkpoint), ("surrogate", &self.surrogate), ("resume", &self.resume)] {
            if let Some(p) = v {
                let _ = writeln!(o, "{k} = {}", p.display());
            }
        }
        let milestones: Vec<String> = t.lr_milestones.iter().map(|m| m.to_string()).collect();
        let _ = writeln!(
            o,
            "\n[train]\nmethod = {}\nepochs = {}\nbatch_size = {}\nlr = {}\nmomentum = {}\nweight_decay = {}\nlr_milestones = {}\neps_warmup_epochs = {}",
            t.objective.name().replace('_', "-"),
            t.epochs,
            t.batch_size,
            t.lr0,
            t.momentum,
            t.weight_decay,
            milestones.join(","),
            t.eps_warmup_epochs
        );
        write_attack(&mut o, "train.attack", None, &t.attack);
        let (lambda, r, schedule) = match t.objective {
            Objective::Dial(c) => (c.lambda, c.r_max, c.schedule),
            Objective::Trades { lambda } | Objective::Mart { lambda } => (lambda, 0.0, Schedule::Ramp),
            _ => (1.0, 0.0, Schedule::Ramp),
        };
        let schedule = if schedule == Schedule::Constant { "constant" } else { "ramp" };
        let _ = writeln!(o, "\n[dial]\nlambda = {lambda}\nr = {r}\nschedule = {schedule}");
        for (i, a) in self.attacks.iter().enumerate() {
            write_attack(&mut o, &format!("attack.{i}"), Some(&a.name), &a.spec);
        }
        let _ = writeln!(o, "\n[corrupt]\nkind = {}", self.corrupt_kind.map_or("all", |c| c.name()));
        if let Some(s) = self.corrupt_severity {
            let _ = writeln!(o, "severity = {s}");
        }
        let which = match self.diagnose_which {
            Representation::Logits => "logits",
            Representation::Features => "features",
        };
        let scaling = if self.diagnose_max_scaling { "max" } else { "raw" };
        let _ = writeln!(o, "\n[diagnose]\nwhich = {which}\nadversarial = {}\nscaling = {scaling}", self.diagnose_adversarial);
        let _ = writeln!(
            o,
            "\n[bound]\ninstances = {}\npoints = {}\ngrid = {}\nshift = {}",
            self.bound_instances, self.bound_points, self.bound_grid, self.bound_shift
        );
        o
    }
}

fn write_attack(o: &mut String, section: &str, name: Option<&str>, a: &AttackSpec) {
    let _ = writeln!(o, "\n[{section}]");
    if let Some(n) = name {
        let _ = writeln!(o, "name = {n}");
    }
    let _ = writeln!(
        o,
        "norm = {}\neps = {}\nstep = {}\niters = {}\nrandom_start = {}\ninner_loss = {}\nlo = {}\nhi = {}",
        a.norm.name(),
        a.eps,
        a.step,
        a.iters,
        a.random_start,
        a.inner_loss.name(),
        a.lo,
        a.hi
    );
}

/// Reads an optional config file, applies flag overrides and resolves.
pub fn parse_config(path: Option<&Path>, flags: &[String]) -> Result<(RawConfig, RunConfig)> {
    let mut raw = match path {
        Some(p) => RawConfig::from_file(p)?,
        None => RawConfig::default(),
    };
    raw.apply_flags(flags)?;
    let run = RunConfig::resolve(&raw)?;
    Ok((raw, run))
}
