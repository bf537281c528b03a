//! Experiment configuration: an INI-style file of `key = value` pairs under
//! `[section]` headers, with command-line overrides.
//!
//! ```text
//! [experiment]
//! seed = 7
//!
//! [data]
//! source = synthetic
//! users = 200
//! items = 240
//!
//! [engine]
//! mode = exact
//! ```
//!
//! Every key has a default; see [`KEYS`]. Unknown keys and repeated keys
//! are errors so typos do not silently fall back to defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SynthSpec;
use crate::engine::{EngineConfig, ExchangeSchedule, UpdateMode};
use crate::error::{Error, Result};

/// Environment variable overriding `experiment.seed`.
pub const SEED_ENV: &str = "DMC_SEED";

/// Every recognized `(section, key)`.
pub const KEYS: &[(&str, &str)] = &[
    ("experiment", "seed"),
    ("data", "source"),
    ("data", "path"),
    ("data", "users"),
    ("data", "items"),
    ("data", "rank"),
    ("data", "observe_fraction"),
    ("data", "noise_sd"),
    ("data", "seed"),
    ("split", "fraction"),
    ("split", "seed"),
    ("split", "stratified"),
    ("topology", "agents"),
    ("topology", "kind"),
    ("topology", "p"),
    ("topology", "seed"),
    ("topology", "path"),
    ("engine", "rank"),
    ("engine", "beta"),
    ("engine", "iterations"),
    ("engine", "mode"),
    ("engine", "schedule"),
    ("engine", "ridge"),
    ("engine", "init_scale"),
    ("engine", "seed"),
    ("engine", "stop_tolerance"),
    ("engine", "workers"),
    ("eval", "like_threshold"),
    ("eval", "averaged_u"),
    ("output", "dir"),
    ("output", "factors"),
    ("output", "timing"),
];

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        users: usize,
        items: usize,
        rank: usize,
        observe_fraction: f64,
        noise_sd: f64,
        seed: Option<u64>,
    },
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TopologySpec {
    Ring,
    Complete,
    ErdosRenyi { p: f64, seed: Option<u64> },
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSource,
    pub split_fraction: f64,
    pub split_seed: Option<u64>,
    pub stratified: bool,
    pub agents: usize,
    pub topology: TopologySpec,
    /// `engine.seed` unset means derived from `seed`; see [`Self::engine_config`].
    pub engine: EngineConfig,
    pub engine_seed: Option<u64>,
    pub like_threshold: f64,
    pub averaged_u: bool,
    pub output_dir: PathBuf,
    pub write_factors: bool,
    /// Record wall-clock milliseconds in metrics.csv (makes it run-dependent).
    pub timing: bool,
    /// Keys that were not given and took their defaults.
    pub defaulted: Vec<String>,
}

/// Raw `section.key → (value, line)` table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut section: Option<String> = None;
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::parse(line_no, "unterminated section header"))?
                    .trim();
                if !KEYS.iter().any(|(s, _)| *s == name) {
                    return Err(Error::parse(line_no, format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(line_no, "expected `key = value`"))?;
            let sec = section
                .as_deref()
                .ok_or_else(|| Error::parse(line_no, "key outside of any [section]"))?;
            let key = key.trim();
            if !KEYS.contains(&(sec, key)) {
                return Err(Error::parse(line_no, format!("unknown key {sec}.{key}")));
            }
            let full = format!("{sec}.{key}");
            if entries
                .insert(full.clone(), (value.trim().to_string(), line_no))
                .is_some()
            {
                return Err(Error::parse(line_no, format!("{full} given twice")));
            }
        }
        Ok(KeyValues { entries })
    }

    /// Sets `key` (either `section.key` or an unambiguous bare key).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let full = resolve_key(key)?;
        self.entries.insert(full, (value.to_string(), 0));
        Ok(())
    }

    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.remove(key)
    }
}

fn resolve_key(key: &str) -> Result<String> {
    if let Some((sec, k)) = key.split_once('.') {
        if KEYS.contains(&(sec, k)) {
            return Ok(key.to_string());
        }
        return Err(Error::config(format!("unknown key {key}")));
    }
    let matches: Vec<_> = KEYS.iter().filter(|(_, k)| *k == key).collect();
    match matches[..] {
        [(sec, k)] => Ok(format!("{sec}.{k}")),
        [] => Err(Error::config(format!("unknown key {key}"))),
        _ => Err(Error::config(format!(
            "key {key} is ambiguous; use one of {}",
            matches
                .iter()
                .map(|(s, k)| format!("{s}.{k}"))
                .collect::<Vec<_>>()
                .join(", ")
        ))),
    }
}

/// Parses `--key=value` / `--key value` override arguments into pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let body = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::config(format!("unexpected argument {arg:?}; overrides look like --key=value")))?;
        match body.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::config(format!("--{body} needs a value")))?;
                out.push((body.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

struct Reader {
    kv: KeyValues,
    defaulted: Vec<String>,
}

impl Reader {
    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.opt(key)?.unwrap_or_else(|| {
            self.defaulted.push(key.to_string());
            default
        }))
    }

    fn opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.kv.take(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|_| {
                let msg = format!("invalid value {v:?} for {key}");
                if line > 0 {
                    Error::parse(line, msg)
                } else {
                    Error::config(msg)
                }
            }),
        }
    }

    fn string(&mut self, key: &str) -> Option<String> {
        self.kv.take(key).map(|(v, _)| v)
    }
}

fn resolve_path(base: &Path, p: &str) -> PathBuf {
    let path = PathBuf::from(p);
    if path.is_absolute() {
        path
    } else {
        base.join(path)
    }
}

impl ExperimentConfig {
    /// Parses config text. Relative data/topology paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        ExperimentConfig::from_key_values(KeyValues::parse(text)?, base)
    }

    /// Reads a config file, applies `DMC_SEED` and then the overrides.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path
            .parent()
            .map(|p| if p.as_os_str().is_empty() { Path::new(".") } else { p })
            .unwrap_or(Path::new("."));
        let base = std::fs::canonicalize(base).map_err(|e| Error::io(base, e))?;
        let mut kv = KeyValues::parse(&text)?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            kv.set("experiment.seed", seed.trim())?;
        }
        for (k, v) in overrides {
            kv.set(k, v)?;
        }
        ExperimentConfig::from_key_values(kv, &base)
    }

    pub fn from_key_values(kv: KeyValues, base: &Path) -> Result<Self> {
        let mut r = Reader {
            kv,
            defaulted: Vec::new(),
        };
        let seed = r.get("experiment.seed", 0u64)?;

        let source = r.string("data.source").unwrap_or_else(|| {
            r.defaulted.push("data.source".into());
            "synthetic".into()
        });
        let data = match source.as_str() {
            "synthetic" => DataSource::Synthetic {
                users: r.get("data.users", 200)?,
                items: r.get("data.items", 240)?,
                rank: r.get("data.rank", 8)?,
                observe_fraction: r.get("data.observe_fraction", 0.4)?,
                noise_sd: r.get("data.noise_sd", 0.0)?,
                seed: r.opt("data.seed")?,
            },
            "file" => {
                let p = r
                    .string("data.path")
                    .ok_or_else(|| Error::config("data.source = file needs data.path"))?;
                DataSource::File(resolve_path(base, &p))
            }
            other => {
                return Err(Error::config(format!(
                    "data.source must be `synthetic` or `file`, got {other:?}"
                )))
            }
        };

        let split_fraction = r.get("split.fraction", 0.75)?;
        let split_seed = r.opt("split.seed")?;
        let stratified = r.get("split.stratified", false)?;

        let agents = r.get("topology.agents", 8usize)?;
        let kind = r.string("topology.kind").unwrap_or_else(|| {
            r.defaulted.push("topology.kind".into());
            "ring".into()
        });
        let topology = match kind.as_str() {
            "ring" => TopologySpec::Ring,
            "complete" => TopologySpec::Complete,
            "erdos_renyi" => TopologySpec::ErdosRenyi {
                p: r.get("topology.p", 0.4)?,
                seed: r.opt("topology.seed")?,
            },
            "file" => {
                let p = r
                    .string("topology.path")
                    .ok_or_else(|| Error::config("topology.kind = file needs topology.path"))?;
                TopologySpec::File(resolve_path(base, &p))
            }
            other => {
                return Err(Error::config(format!(
                    "topology.kind must be ring, complete, erdos_renyi or file, got {other:?}"
                )))
            }
        };

        let default_rank = match &data {
            DataSource::Synthetic { rank, .. } => *rank,
            DataSource::File(_) => 64,
        };
        let defaults = EngineConfig::default();
        let engine = EngineConfig {
            rank: r.get("engine.rank", default_rank)?,
            beta: r.get("engine.beta", defaults.beta)?,
            iterations: r.get("engine.iterations", defaults.iterations)?,
            mode: r.get::<UpdateMode>("engine.mode", defaults.mode)?,
            schedule: r.get::<ExchangeSchedule>("engine.schedule", defaults.schedule)?,
            ridge: r.get("engine.ridge", defaults.ridge)?,
            init_scale: r.opt("engine.init_scale")?,
            seed: 0,
            stop_tolerance: r.opt("engine.stop_tolerance")?,
            workers: r.get("engine.workers", defaults.workers)?,
        };
        let engine_seed = r.opt("engine.seed")?;

        let like_threshold = r.get("eval.like_threshold", 1.0)?;
        let averaged_u = r.get("eval.averaged_u", false)?;
        let output_dir = PathBuf::from(r.string("output.dir").unwrap_or_else(|| {
            r.defaulted.push("output.dir".into());
            "dmc-out".into()
        }));
        let write_factors = r.get("output.factors", false)?;
        let timing = r.get("output.timing", false)?;

        // Keys that only apply to another variant (e.g. data.users with a file source).
        if let Some(k) = r.kv.entries.keys().next() {
            return Err(Error::config(format!(
                "{k} does not apply to this configuration"
            )));
        }

        let cfg = ExperimentConfig {
            seed,
            data,
            split_fraction,
            split_seed,
            stratified,
            agents,
            topology,
            engine,
            engine_seed,
            like_threshold,
            averaged_u,
            output_dir,
            write_factors,
            timing,
            defaulted: r.defaulted,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every constraint that does not need the data loaded.
    pub fn validate(&self) -> Result<()> {
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::config(format!(
                "split.fraction must be in (0, 1), got {}",
                self.split_fraction
            )));
        }
        if self.agents == 0 {
            return Err(Error::config("topology.agents must be at least 1"));
        }
        if let TopologySpec::ErdosRenyi { p, .. } = self.topology {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::config(format!("topology.p must be in (0, 1], got {p}")));
            }
        }
        if !self.like_threshold.is_finite() {
            return Err(Error::config("eval.like_threshold must be finite"));
        }
        self.engine_config().validate()?;
        if let Some(spec) = self.synth_spec() {
            if !(spec.observe_fraction > 0.0 && spec.observe_fraction <= 1.0) {
                return Err(Error::config(format!(
                    "data.observe_fraction must be in (0, 1], got {}",
                    spec.observe_fraction
                )));
            }
            if spec.rank == 0 || spec.rank > spec.users.min(spec.items) {
                return Err(Error::config(format!(
                    "data.rank must be in 1..={}",
                    spec.users.min(spec.items)
                )));
            }
            if !(spec.noise_sd >= 0.0 && spec.noise_sd.is_finite()) {
                return Err(Error::config("data.noise_sd must be >= 0"));
            }
            self.validate_shape(spec.users, spec.items)?;
        }
        Ok(())
    }

    /// Cross-field checks against the rating matrix dimensions.
    pub fn validate_shape(&self, users: usize, items: usize) -> Result<()> {
        if self.agents > items {
            return Err(Error::config(format!(
                "{} agents but only {items} item columns",
                self.agents
            )));
        }
        if self.engine.rank > users {
            return Err(Error::config(format!(
                "engine.rank {} exceeds the {users} users",
                self.engine.rank
            )));
        }
        Ok(())
    }

    pub fn synth_spec(&self) -> Option<SynthSpec> {
        match self.data {
            DataSource::Synthetic {
                users,
                items,
                rank,
                observe_fraction,
                noise_sd,
                seed,
            } => Some(SynthSpec {
                users,
                items,
                rank,
                observe_fraction,
                noise_sd,
                seed: seed.unwrap_or(self.seed),
            }),
            DataSource::File(_) => None,
        }
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed.unwrap_or(self.seed.wrapping_add(1))
    }

    pub fn topology_seed(&self) -> u64 {
        match self.topology {
            TopologySpec::ErdosRenyi { seed: Some(s), .. } => s,
            _ => self.seed.wrapping_add(2),
        }
    }

    /// Engine settings with the seed resolved.
    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            seed: self.engine_seed.unwrap_or(self.seed.wrapping_add(3)),
            ..self.engine.clone()
        }
    }

    /// Renders the configuration back to the file format. Parsing the result
    /// yields an equal configuration (apart from the `defaulted` record).
    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[experiment]\nseed = {}\n", self.seed);
        s.push_str("[data]\n");
        match &self.data {
            DataSource::Synthetic {
                users,
                items,
                rank,
                observe_fraction,
                noise_sd,
                seed,
            } => {
                let _ = writeln!(s, "source = synthetic");
                let _ = writeln!(s, "users = {users}\nitems = {items}\nrank = {rank}");
                let _ = writeln!(s, "observe_fraction = {observe_fraction:?}\nnoise_sd = {noise_sd:?}");
                if let Some(seed) = seed {
                    let _ = writeln!(s, "seed = {seed}");
                }
            }
            DataSource::File(p) => {
                let _ = writeln!(s, "source = file\npath = {}", p.display());
            }
        }
        let _ = writeln!(s, "\n[split]\nfraction = {:?}", self.split_fraction);
        if let Some(seed) = self.split_seed {
            let _ = writeln!(s, "seed = {seed}");
        }
        let _ = writeln!(s, "stratified = {}", self.stratified);

        let _ = writeln!(s, "\n[topology]\nagents = {}", self.agents);
        match &self.topology {
            TopologySpec::Ring => s.push_str("kind = ring\n"),
            TopologySpec::Complete => s.push_str("kind = complete\n"),
            TopologySpec::ErdosRenyi { p, seed } => {
                let _ = writeln!(s, "kind = erdos_renyi\np = {p:?}");
                if let Some(seed) = seed {
                    let _ = writeln!(s, "seed = {seed}");
                }
            }
            TopologySpec::File(p) => {
                let _ = writeln!(s, "kind = file\npath = {}", p.display());
            }
        }

        let e = &self.engine;
        let _ = writeln!(s, "\n[engine]\nrank = {}\nbeta = {:?}\niterations = {}", e.rank, e.beta, e.iterations);
        let _ = writeln!(s, "mode = {}\nschedule = {}\nridge = {:?}", e.mode, e.schedule, e.ridge);
        if let Some(v) = e.init_scale {
            let _ = writeln!(s, "init_scale = {v:?}");
        }
        if let Some(v) = self.engine_seed {
            let _ = writeln!(s, "seed = {v}");
        }
        if let Some(v) = e.stop_tolerance {
            let _ = writeln!(s, "stop_tolerance = {v:?}");
        }
        let _ = writeln!(s, "workers = {}", e.workers);

        let _ = writeln!(
            s,
            "\n[eval]\nlike_threshold = {:?}\naveraged_u = {}",
            self.like_threshold, self.averaged_u
        );
        let _ = writeln!(
            s,
            "\n[output]\ndir = {}\nfactors = {}\ntiming = {}",
            self.output_dir.display(),
            self.write_factors,
            self.timing
        );
        s
    }
}
