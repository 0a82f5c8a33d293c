//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::data::{SceneSpec, PALETTE};
use crate::error::{Error, Result};
use crate::lsr::ProtectionWeights;

/// How local training treats old knowledge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Rehearsal with group-specific correction strengths.
    Lsr,
    /// Rehearsal with one correction strength shared by every group.
    Uniform,
    /// Plain training on the current task only.
    Finetune,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Lsr => "lsr",
            Mode::Uniform => "uniform",
            Mode::Finetune => "finetune",
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lsr" => Ok(Mode::Lsr),
            "uniform" => Ok(Mode::Uniform),
            "finetune" => Ok(Mode::Finetune),
            other => Err(format!("unknown mode `{other}` (expected lsr, uniform or finetune)")),
        }
    }
}

pub const REQUIRED_KEYS: [&str; 26] = [
    "seed",
    "K",
    "T",
    "base_classes",
    "classes_per_increment",
    "grid",
    "samples_per_task",
    "beta",
    "buffer_capacity",
    "R",
    "local_epochs",
    "batch",
    "lr_base",
    "lr_incr",
    "momentum",
    "weight_decay",
    "lambda",
    "alpha_s",
    "alpha_d",
    "alpha_c",
    "tau_fraction",
    "mode",
    "recovery",
    "client_fraction",
    "episodes",
    "inner_steps",
];

pub const OPTIONAL_KEYS: [&str; 17] = [
    "base_epochs",
    "n_cells",
    "noise",
    "old_per_scene",
    "test_per_task",
    "lr_gen",
    "lr_recover",
    "recover_batch",
    "meta_lr",
    "meta_batch",
    "degrade_lr",
    "split_fraction",
    "head_init",
    "tau_override",
    "threads",
    "max_finetune_epochs",
    "retrain_epochs",
];

/// A validated experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Config {
    pub seed: u64,
    pub clients: usize,
    pub tasks: usize,
    pub base_classes: usize,
    pub classes_per_increment: usize,
    pub grid: usize,
    pub samples_per_task: usize,
    pub beta: f64,
    /// One capacity for every client, or one per client.
    pub buffer_capacity: Vec<usize>,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch: usize,
    pub lr_base: f64,
    pub lr_incr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub alpha_s: f64,
    pub alpha_d: f64,
    pub alpha_c: f64,
    pub tau_fraction: f64,
    pub mode: Mode,
    pub recovery: bool,
    pub client_fraction: f64,
    pub episodes: usize,
    pub inner_steps: usize,
    pub n_cells: usize,
    pub noise: f64,
    pub old_per_scene: usize,
    pub test_per_task: usize,
    pub lr_gen: f64,
    pub lr_recover: f64,
    pub recover_batch: usize,
    pub meta_lr: f64,
    pub meta_batch: usize,
    pub degrade_lr: f64,
    pub split_fraction: f64,
    pub head_init: f64,
    pub tau_override: Option<f64>,
    pub threads: usize,
    pub max_finetune_epochs: usize,
    pub retrain_epochs: usize,
    /// Local epochs during task 0.
    pub base_epochs: usize,
}

struct Entries {
    origin: String,
    values: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn bad(&self, key: &str, msg: impl std::fmt::Display) -> Error {
        let line = self.values.get(key).map_or(0, |v| v.0);
        Error::Parse { origin: self.origin.clone(), line, msg: format!("{key}: {msg}") }
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|v| v.1.as_str())
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key).ok_or_else(|| Error::Config(format!("missing required key `{key}`")))?;
        raw.parse().map_err(|e| self.bad(key, format!("cannot parse `{raw}`: {e}")))
    }

    fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(_) => self.get(key),
        }
    }
}

fn parse_switch(raw: &str) -> std::result::Result<bool, String> {
    match raw {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(format!("expected on or off, got `{other}`")),
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Config::parse(&text, &path.display().to_string())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str, origin: &str) -> Result<Config> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
                origin: origin.to_string(),
                line: line_no,
                msg: format!("expected `key = value`, got `{content}`"),
            })?;
            let key = key.trim();
            if !REQUIRED_KEYS.contains(&key) && !OPTIONAL_KEYS.contains(&key) {
                return Err(Error::Parse { origin: origin.to_string(), line: line_no, msg: format!("unknown key `{key}`") });
            }
            if values.insert(key.to_string(), (line_no, value.trim().to_string())).is_some() {
                return Err(Error::Parse { origin: origin.to_string(), line: line_no, msg: format!("duplicate key `{key}`") });
            }
        }
        Config::from_entries(Entries { origin: origin.to_string(), values })
    }

    fn from_entries(e: Entries) -> Result<Config> {
        for key in REQUIRED_KEYS {
            if e.raw(key).is_none() {
                return Err(Error::Config(format!("missing required key `{key}`")));
            }
        }
        let buffer_capacity = e
            .raw("buffer_capacity")
            .unwrap_or_default()
            .split(',')
            .map(|v| v.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|err| e.bad("buffer_capacity", err))?;
        let recovery = parse_switch(e.raw("recovery").unwrap_or_default()).map_err(|m| e.bad("recovery", m))?;
        let samples_per_task: usize = e.get("samples_per_task")?;
        let tau_override = match e.raw("tau_override") {
            None | Some("none") => None,
            Some(_) => Some(e.get("tau_override")?),
        };
        let local_epochs = e.get("local_epochs")?;
        let cfg = Config {
            seed: e.get("seed")?,
            clients: e.get("K")?,
            tasks: e.get("T")?,
            base_classes: e.get("base_classes")?,
            classes_per_increment: e.get("classes_per_increment")?,
            grid: e.get("grid")?,
            samples_per_task,
            beta: e.get("beta")?,
            buffer_capacity,
            rounds: e.get("R")?,
            local_epochs,
            batch: e.get("batch")?,
            lr_base: e.get("lr_base")?,
            lr_incr: e.get("lr_incr")?,
            momentum: e.get("momentum")?,
            weight_decay: e.get("weight_decay")?,
            lambda: e.get("lambda")?,
            alpha_s: e.get("alpha_s")?,
            alpha_d: e.get("alpha_d")?,
            alpha_c: e.get("alpha_c")?,
            tau_fraction: e.get("tau_fraction")?,
            mode: e.get("mode")?,
            recovery,
            client_fraction: e.get("client_fraction")?,
            episodes: e.get("episodes")?,
            inner_steps: e.get("inner_steps")?,
            n_cells: e.get_or("n_cells", SceneSpec::default().n_cells)?,
            noise: e.get_or("noise", SceneSpec::default().noise)?,
            old_per_scene: e.get_or("old_per_scene", SceneSpec::default().old_per_scene)?,
            test_per_task: e.get_or("test_per_task", (samples_per_task / 4).max(1))?,
            lr_gen: e.get_or("lr_gen", 0.01)?,
            lr_recover: e.get_or("lr_recover", 0.1)?,
            recover_batch: e.get_or("recover_batch", 8)?,
            meta_lr: e.get_or("meta_lr", 0.01)?,
            meta_batch: e.get_or("meta_batch", 16)?,
            degrade_lr: e.get_or("degrade_lr", 0.5)?,
            split_fraction: e.get_or("split_fraction", 0.6)?,
            head_init: e.get_or("head_init", 0.01)?,
            tau_override,
            threads: e.get_or("threads", 1)?,
            max_finetune_epochs: e.get_or("max_finetune_epochs", 10)?,
            retrain_epochs: e.get_or("retrain_epochs", 30)?,
            base_epochs: e.get_or("base_epochs", local_epochs)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let positive = [
            ("K", self.clients),
            ("T", self.tasks),
            ("base_classes", self.base_classes),
            ("grid", self.grid),
            ("samples_per_task", self.samples_per_task),
            ("R", self.rounds),
            ("batch", self.batch),
            ("n_cells", self.n_cells),
            ("test_per_task", self.test_per_task),
            ("recover_batch", self.recover_batch),
            ("meta_batch", self.meta_batch),
            ("threads", self.threads),
        ];
        for (key, v) in positive {
            if v == 0 {
                return fail(format!("`{key}` must be at least 1"));
            }
        }
        if self.tasks > 1 && self.classes_per_increment == 0 {
            return fail("`classes_per_increment` must be at least 1 when T > 1".into());
        }
        if self.total_classes() > PALETTE.len() {
            return fail(format!("{} classes exceed the {} available terrain types", self.total_classes(), PALETTE.len()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return fail(format!("`beta` must be positive, got {}", self.beta));
        }
        if self.buffer_capacity.len() != 1 && self.buffer_capacity.len() != self.clients {
            return fail(format!("`buffer_capacity` lists {} values for {} clients", self.buffer_capacity.len(), self.clients));
        }
        for (key, v) in [("lr_base", self.lr_base), ("lr_incr", self.lr_incr)] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("`{key}` must be positive, got {v}"));
            }
        }
        for (key, v) in [
            ("weight_decay", self.weight_decay),
            ("lambda", self.lambda),
            ("lr_gen", self.lr_gen),
            ("lr_recover", self.lr_recover),
            ("meta_lr", self.meta_lr),
            ("degrade_lr", self.degrade_lr),
            ("head_init", self.head_init),
            ("noise", self.noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("`{key}` must be non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("`momentum` must lie in [0, 1), got {}", self.momentum));
        }
        self.protection()?;
        for (key, v) in [("tau_fraction", self.tau_fraction), ("client_fraction", self.client_fraction)] {
            if !(v > 0.0 && v <= 1.0) {
                return fail(format!("`{key}` must lie in (0, 1], got {v}"));
            }
        }
        if let Some(t) = self.tau_override {
            if !(t > 0.0 && t <= 1.0) {
                return fail(format!("`tau_override` must lie in (0, 1], got {t}"));
            }
        }
        if !(0.0..=1.0).contains(&self.split_fraction) {
            return fail(format!("`split_fraction` must lie in [0, 1], got {}", self.split_fraction));
        }
        if self.episodes > 0 && self.base_classes < 2 {
            return fail("meta-training episodes need at least two base classes".into());
        }
        Ok(())
    }

    pub fn protection(&self) -> Result<ProtectionWeights> {
        ProtectionWeights::new(self.alpha_s, self.alpha_d, self.alpha_c)
    }

    pub fn total_classes(&self) -> usize {
        self.base_classes + self.tasks.saturating_sub(1) * self.classes_per_increment
    }

    pub fn capacity_of(&self, client: usize) -> usize {
        if self.buffer_capacity.len() == 1 {
            self.buffer_capacity[0]
        } else {
            self.buffer_capacity[client]
        }
    }

    pub fn scene(&self) -> SceneSpec {
        SceneSpec { height: self.grid, width: self.grid, n_cells: self.n_cells, noise: self.noise, old_per_scene: self.old_per_scene }
    }

    /// Canonical text form; parsing it yields an equal configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").expect("string write");
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let caps: Vec<String> = self.buffer_capacity.iter().map(usize::to_string).collect();
        vec![
            ("seed", self.seed.to_string()),
            ("K", self.clients.to_string()),
            ("T", self.tasks.to_string()),
            ("base_classes", self.base_classes.to_string()),
            ("classes_per_increment", self.classes_per_increment.to_string()),
            ("grid", self.grid.to_string()),
            ("samples_per_task", self.samples_per_task.to_string()),
            ("beta", self.beta.to_string()),
            ("buffer_capacity", caps.join(",")),
            ("R", self.rounds.to_string()),
            ("local_epochs", self.local_epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("lr_base", self.lr_base.to_string()),
            ("lr_incr", self.lr_incr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("lambda", self.lambda.to_string()),
            ("alpha_s", self.alpha_s.to_string()),
            ("alpha_d", self.alpha_d.to_string()),
            ("alpha_c", self.alpha_c.to_string()),
            ("tau_fraction", self.tau_fraction.to_string()),
            ("mode", self.mode.name().to_string()),
            ("recovery", if self.recovery { "on" } else { "off" }.to_string()),
            ("client_fraction", self.client_fraction.to_string()),
            ("episodes", self.episodes.to_string()),
            ("inner_steps", self.inner_steps.to_string()),
            ("n_cells", self.n_cells.to_string()),
            ("noise", self.noise.to_string()),
            ("old_per_scene", self.old_per_scene.to_string()),
            ("test_per_task", self.test_per_task.to_string()),
            ("lr_gen", self.lr_gen.to_string()),
            ("lr_recover", self.lr_recover.to_string()),
            ("recover_batch", self.recover_batch.to_string()),
            ("meta_lr", self.meta_lr.to_string()),
            ("meta_batch", self.meta_batch.to_string()),
            ("degrade_lr", self.degrade_lr.to_string()),
            ("split_fraction", self.split_fraction.to_string()),
            ("head_init", self.head_init.to_string()),
            ("tau_override", self.tau_override.map_or_else(|| "none".to_string(), |t| t.to_string())),
            ("threads", self.threads.to_string()),
            ("max_finetune_epochs", self.max_finetune_epochs.to_string()),
            ("retrain_epochs", self.retrain_epochs.to_string()),
            ("base_epochs", self.base_epochs.to_string()),
        ]
    }

    /// Copy with one key replaced, re-validated.
    pub fn with(&self, key: &str, value: &str) -> Result<Config> {
        if !REQUIRED_KEYS.contains(&key) && !OPTIONAL_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        let mut values: BTreeMap<String, (usize, String)> =
            self.entries().into_iter().enumerate().map(|(i, (k, v))| (k.to_string(), (i + 1, v))).collect();
        values.insert(key.to_string(), (0, value.to_string()));
        Config::from_entries(Entries { origin: format!("override {key}"), values })
    }
}
