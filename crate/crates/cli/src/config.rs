//! Flat `key = value` run configuration (TOML syntax, dotted keys) with
//! command line overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hill_core::data::InteractionFormat;
use hill_core::em::EmConfig;
use hill_core::hill::IndexTrainConfig;
use hill_core::model::{FinetuneConfig, ModelConfig, OptimizerConfig, OptimizerKind, TrainConfig};
use hill_core::synthetic::SurrogateSpec;
use hill_core::ttt::TttConfig;
use sha2::{Digest, Sha256};
use toml::Value;

/// Every accepted key with its default, in TOML syntax.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "42"),
    ("threads", "0"),
    ("out", "\"hill-out\""),
    ("builder", "\"joint\""),
    ("data.train", "\"\""),
    ("data.test", "\"\""),
    ("data.format", "\"adjacency\""),
    ("data.surrogate", "\"\""),
    ("data.surrogate_seed", "7"),
    ("data.surrogate_users", "0"),
    ("data.surrogate_items", "0"),
    ("data.surrogate_regions", "0"),
    ("model.dim", "64"),
    ("model.hidden", "0"),
    ("model.init_std", "0.1"),
    ("model.tasks", "1"),
    ("train.epochs", "20"),
    ("train.batch_size", "1024"),
    ("train.negatives", "1"),
    ("train.optimizer", "\"adam\""),
    ("train.lr", "0.001"),
    ("train.beta1", "0.9"),
    ("train.beta2", "0.999"),
    ("train.epsilon", "1e-8"),
    ("train.l2", "0.0"),
    ("train.unsup_weight", "0.0"),
    ("train.soft_labels", "\"\""),
    ("index.levels", "[512, 64]"),
    ("index.max_alpha", "100.0"),
    ("index.exp", "2.0"),
    ("index.max_iters", "500"),
    ("index.flops_weight", "0.1"),
    ("index.pool_batches", "4"),
    ("index.warmup_iters", "100"),
    ("index.index_loss_weight", "1.0"),
    ("index.recon_weight", "1.0"),
    ("index.model_loss_weight", "1.0"),
    ("index.batch_size", "256"),
    ("index.negatives", "1"),
    ("index.node_lr", "0.01"),
    ("index.model_lr", "0.001"),
    ("index.freeze_model", "false"),
    ("index.zero_centroid", "false"),
    ("index.hard_transition", "true"),
    ("index.log_every", "50"),
    ("em.rounds", "1"),
    ("em.kmeans_iters", "25"),
    ("em.m_step_epochs", "1"),
    ("em.aug_weight", "1.0"),
    ("em.freeze_model", "false"),
    ("em.zero_centroid", "true"),
    ("eval.k", "20"),
    ("eval.beam", "32"),
    ("eval.users", "0"),
    ("eval.unit_costs", "[]"),
    ("ttt.depth", "2"),
    ("ttt.thresholds", "[0.8, 0.4]"),
    ("ttt.epochs", "1"),
    ("ttt.lr", "0.001"),
    ("ttt.batch_size", "1024"),
    ("ttt.negatives", "1"),
    ("ttt.interest", "\"train\""),
    ("ttt.eval", "\"flat\""),
    ("sweep.depths", "[1, 2]"),
    ("sweep.thresholds", "[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]"),
    ("sweep.finetune", "false"),
    ("paths.model", "\"\""),
    ("paths.index", "\"\""),
    ("paths.index_model", "\"\""),
    ("retrieve.users", "[]"),
];

/// Keys that affect neither results nor the config hash.
const UNHASHED: &[&str] = &["threads", "out"];

fn parse_value(text: &str) -> Option<Value> {
    let table: toml::Table = toml::from_str(&format!("v = {text}")).ok()?;
    table.get("v").cloned()
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

/// Resolved key/value settings: defaults, then the config file, then
/// overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, Value>,
}

impl Settings {
    pub fn defaults() -> Self {
        let values =
            DEFAULTS.iter().map(|(k, v)| (k.to_string(), parse_value(v).expect("default values parse"))).collect();
        Self { values }
    }

    /// Applies a config file's contents. Unknown keys and syntax errors are
    /// collected into `problems`.
    pub fn apply_file(&mut self, path: &Path, problems: &mut Vec<String>) {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                problems.push(format!("cannot read config {}: {e}", path.display()));
                return;
            }
        };
        self.apply_text(&text, &path.display().to_string(), problems);
    }

    pub fn apply_text(&mut self, text: &str, origin: &str, problems: &mut Vec<String>) {
        match toml::from_str::<toml::Table>(text) {
            Ok(table) => {
                let mut flat = BTreeMap::new();
                flatten("", &table, &mut flat);
                for (k, v) in flat {
                    self.set(&k, v, origin, problems);
                }
            }
            Err(e) => problems.push(format!("{origin}: {}", e.message())),
        }
    }

    /// Applies a `key=value` override; bare words are taken as strings.
    pub fn apply_override(&mut self, assignment: &str, problems: &mut Vec<String>) {
        let Some((k, v)) = assignment.split_once('=') else {
            problems.push(format!("override `{assignment}` is not key=value"));
            return;
        };
        let (k, v) = (k.trim(), v.trim());
        let value = parse_value(v).unwrap_or_else(|| Value::String(v.to_string()));
        self.set(k, value, "override", problems);
    }

    pub fn set(&mut self, key: &str, value: Value, origin: &str, problems: &mut Vec<String>) {
        match self.values.get(key) {
            None => problems.push(format!("{origin}: unknown key `{key}`")),
            Some(old) => {
                let value = match (old, value) {
                    (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
                    (_, v) => v,
                };
                if std::mem::discriminant(old) != std::mem::discriminant(&value) {
                    problems.push(format!("{origin}: `{key}` expects a {}, got {}", old.type_str(), value.type_str()));
                } else {
                    self.values.insert(key.to_string(), value);
                }
            }
        }
    }

    pub fn get(&self, key: &str) -> &Value {
        self.values.get(key).unwrap_or_else(|| panic!("no default for `{key}`"))
    }

    /// Canonical `key = value` listing of every hashed key, sorted.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            if !UNHASHED.contains(&k.as_str()) {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Files { train: PathBuf, test: Option<PathBuf>, format: InteractionFormat },
    Surrogate(SurrogateSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Builder {
    Joint,
    Em,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterestSource {
    Train,
    Retrieved,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub k: usize,
    pub beam: usize,
    /// Users sampled for evaluation; 0 evaluates every test user.
    pub users: usize,
    pub unit_costs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    pub depths: Vec<usize>,
    pub thresholds: Vec<f64>,
    pub finetune: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub out: PathBuf,
    pub model: PathBuf,
    pub index: PathBuf,
    pub index_model: PathBuf,
}

/// Typed view of [`Settings`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub data: DataSource,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub soft_labels: Option<PathBuf>,
    pub builder: Builder,
    pub index: IndexTrainConfig,
    pub em: EmConfig,
    pub eval: EvalSettings,
    pub ttt: TttConfig,
    pub finetune: FinetuneConfig,
    pub interest: InterestSource,
    pub ttt_beam: bool,
    pub sweep: SweepSettings,
    pub paths: Paths,
    pub retrieve_users: Vec<u32>,
    pub config_hash: String,
}

impl RunConfig {
    /// Tree levels `N` (items plus one per index level).
    pub fn tree_levels(&self) -> usize {
        self.index.level_counts.len() + 1
    }

    /// Checks that test-time training depths fit the configured tree.
    pub fn ttt_problems(&self, depths: &[usize]) -> Vec<String> {
        let n = self.tree_levels();
        depths
            .iter()
            .filter(|&&d| d + 2 > n)
            .map(|d| format!("TTT depth {d} needs at least {} tree levels, `index.levels` gives N = {n}", d + 2))
            .collect()
    }
}

struct Reader<'a> {
    s: &'a Settings,
    problems: Vec<String>,
}

impl Reader<'_> {
    fn uint(&mut self, key: &str) -> u64 {
        match self.s.get(key).as_integer() {
            Some(i) if i >= 0 => i as u64,
            _ => {
                self.problems.push(format!("`{key}` must be a non-negative integer"));
                0
            }
        }
    }

    fn usize(&mut self, key: &str) -> usize {
        self.uint(key) as usize
    }

    fn positive(&mut self, key: &str) -> usize {
        let v = self.usize(key);
        if v == 0 {
            self.problems.push(format!("`{key}` must be >= 1"));
        }
        v
    }

    fn float(&mut self, key: &str) -> f64 {
        let v = self.s.get(key).as_float().unwrap_or(f64::NAN);
        if !v.is_finite() {
            self.problems.push(format!("`{key}` must be a finite number"));
        }
        v
    }

    fn non_negative(&mut self, key: &str) -> f64 {
        let v = self.float(key);
        if v < 0.0 {
            self.problems.push(format!("`{key}` must be >= 0"));
        }
        v
    }

    fn boolean(&mut self, key: &str) -> bool {
        self.s.get(key).as_bool().unwrap_or_default()
    }

    fn string(&mut self, key: &str) -> String {
        self.s.get(key).as_str().unwrap_or_default().to_string()
    }

    fn path(&mut self, key: &str) -> Option<PathBuf> {
        Some(self.string(key)).filter(|s| !s.is_empty()).map(PathBuf::from)
    }

    fn existing(&mut self, key: &str) -> Option<PathBuf> {
        let p = self.path(key)?;
        if !p.exists() {
            self.problems.push(format!("`{key}`: {} does not exist", p.display()));
        }
        Some(p)
    }

    fn array<T>(&mut self, key: &str, convert: impl Fn(&Value) -> Option<T>) -> Vec<T> {
        let items = self.s.get(key).as_array().cloned().unwrap_or_default();
        let mut out = Vec::with_capacity(items.len());
        for v in &items {
            match convert(v) {
                Some(x) => out.push(x),
                None => self.problems.push(format!("`{key}`: bad element {v}")),
            }
        }
        out
    }

    fn counts(&mut self, key: &str) -> Vec<usize> {
        self.array(key, |v| v.as_integer().filter(|&i| i >= 0).map(|i| i as usize))
    }

    fn floats(&mut self, key: &str) -> Vec<f64> {
        self.array(key, |v| v.as_float().or_else(|| v.as_integer().map(|i| i as f64)))
    }

    fn optimizer(&mut self, prefix: &str, lr_key: &str) -> OptimizerConfig {
        let kind = match self.string(&format!("{prefix}.optimizer")).as_str() {
            "adam" => OptimizerKind::Adam,
            "sgd" => OptimizerKind::Sgd,
            other => {
                self.problems.push(format!("`{prefix}.optimizer` must be adam or sgd, got `{other}`"));
                OptimizerKind::Adam
            }
        };
        OptimizerConfig {
            kind,
            learning_rate: self.non_negative(lr_key),
            beta1: self.non_negative(&format!("{prefix}.beta1")),
            beta2: self.non_negative(&format!("{prefix}.beta2")),
            epsilon: self.non_negative(&format!("{prefix}.epsilon")),
            l2: self.non_negative(&format!("{prefix}.l2")),
        }
    }
}

impl RunConfig {
    /// Builds the typed configuration, reporting every violation at once.
    pub fn from_settings(s: &Settings) -> Result<Self, Vec<String>> {
        let mut r = Reader { s, problems: Vec::new() };
        let seed = r.uint("seed");
        let threads = r.usize("threads");

        let train_path = r.existing("data.train");
        let test_path = r.existing("data.test");
        let surrogate = r.string("data.surrogate");
        let data = match (train_path, surrogate.as_str()) {
            (Some(train), "") => {
                let format = match r.string("data.format").parse::<InteractionFormat>() {
                    Ok(f) => f,
                    Err(e) => {
                        r.problems.push(format!("`data.format`: {e}"));
                        InteractionFormat::Adjacency
                    }
                };
                DataSource::Files { train, test: test_path, format }
            }
            (None, preset) if !preset.is_empty() => {
                let mut spec = match preset {
                    "gowalla" => SurrogateSpec::gowalla_shaped(),
                    "small" => SurrogateSpec::default(),
                    other => {
                        r.problems.push(format!("`data.surrogate` must be gowalla or small, got `{other}`"));
                        SurrogateSpec::default()
                    }
                };
                spec.seed = r.uint("data.surrogate_seed");
                for (key, field) in [
                    ("data.surrogate_users", &mut spec.num_users),
                    ("data.surrogate_items", &mut spec.num_items),
                    ("data.surrogate_regions", &mut spec.regions),
                ] {
                    let v = r.usize(key);
                    if v > 0 {
                        *field = v;
                    }
                }
                DataSource::Surrogate(spec)
            }
            (Some(_), _) => {
                r.problems.push("set either `data.train` or `data.surrogate`, not both".into());
                DataSource::Surrogate(SurrogateSpec::default())
            }
            (None, _) => {
                r.problems.push("no data: set `data.train` (and optionally `data.test`) or `data.surrogate`".into());
                DataSource::Surrogate(SurrogateSpec::default())
            }
        };

        let model = ModelConfig {
            dim: r.positive("model.dim"),
            hidden: r.usize("model.hidden"),
            init_std: r.non_negative("model.init_std"),
            num_tasks: r.positive("model.tasks"),
            seed,
        };
        let train_opt = r.optimizer("train", "train.lr");
        let train = TrainConfig {
            epochs: r.usize("train.epochs"),
            batch_size: r.positive("train.batch_size"),
            negatives_per_positive: r.usize("train.negatives"),
            optimizer: train_opt.clone(),
            unsup_weight: r.non_negative("train.unsup_weight"),
            seed,
        };
        let soft_labels = r.existing("train.soft_labels");

        let builder = match r.string("builder").as_str() {
            "joint" => Builder::Joint,
            "em" => Builder::Em,
            other => {
                r.problems.push(format!("`builder` must be exactly one of joint or em, got `{other}`"));
                Builder::Joint
            }
        };
        let levels = r.counts("index.levels");
        let index = IndexTrainConfig {
            level_counts: levels.clone(),
            max_alpha: r.float("index.max_alpha"),
            exp: r.float("index.exp"),
            max_iters: r.usize("index.max_iters"),
            flops_weight: r.float("index.flops_weight"),
            pool_batches: r.positive("index.pool_batches"),
            warmup_iters: r.usize("index.warmup_iters"),
            index_loss_weight: r.float("index.index_loss_weight"),
            recon_weight: r.float("index.recon_weight"),
            model_loss_weight: r.float("index.model_loss_weight"),
            batch_size: r.usize("index.batch_size"),
            negatives_per_positive: r.usize("index.negatives"),
            node_optimizer: OptimizerConfig { learning_rate: r.non_negative("index.node_lr"), ..train_opt.clone() },
            model_optimizer: OptimizerConfig { learning_rate: r.non_negative("index.model_lr"), ..train_opt.clone() },
            freeze_model: r.boolean("index.freeze_model"),
            zero_centroid: r.boolean("index.zero_centroid"),
            hard_transition: r.boolean("index.hard_transition"),
            log_every: r.usize("index.log_every"),
            seed,
        };
        let em = EmConfig {
            rounds: r.usize("em.rounds"),
            kmeans_iters: r.usize("em.kmeans_iters"),
            level_counts: levels.clone(),
            m_step_epochs: r.usize("em.m_step_epochs"),
            aug_weight: r.float("em.aug_weight"),
            train: TrainConfig { epochs: 1, ..train.clone() },
            freeze_model: r.boolean("em.freeze_model"),
            include_zero_centroid: r.boolean("em.zero_centroid"),
            seed,
        };
        match builder {
            Builder::Joint => r.problems.extend(index.validate()),
            Builder::Em => r.problems.extend(em.validate()),
        }

        let eval = EvalSettings {
            k: r.positive("eval.k"),
            beam: r.positive("eval.beam"),
            users: r.usize("eval.users"),
            unit_costs: r.floats("eval.unit_costs"),
        };
        let ttt = TttConfig { depth: r.usize("ttt.depth"), thresholds: r.floats("ttt.thresholds") };
        r.problems.extend(ttt.validate());
        let finetune = FinetuneConfig {
            epochs: r.usize("ttt.epochs"),
            batch_size: r.usize("ttt.batch_size"),
            negatives_per_pair: r.usize("ttt.negatives"),
            pair_weight: 1.0,
            optimizer: OptimizerConfig { learning_rate: r.non_negative("ttt.lr"), ..train_opt },
            seed,
        };
        let interest = match r.string("ttt.interest").as_str() {
            "train" => InterestSource::Train,
            "retrieved" => InterestSource::Retrieved,
            other => {
                r.problems.push(format!("`ttt.interest` must be train or retrieved, got `{other}`"));
                InterestSource::Train
            }
        };
        let ttt_beam = match r.string("ttt.eval").as_str() {
            "flat" => false,
            "beam" => true,
            other => {
                r.problems.push(format!("`ttt.eval` must be flat or beam, got `{other}`"));
                false
            }
        };
        let sweep = SweepSettings {
            depths: r.counts("sweep.depths"),
            thresholds: r.floats("sweep.thresholds"),
            finetune: r.boolean("sweep.finetune"),
        };
        if sweep.depths.contains(&0) {
            r.problems.push("`sweep.depths` must be >= 1".into());
        }
        if sweep.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            r.problems.push("`sweep.thresholds` must lie in [0, 1]".into());
        }

        let out = PathBuf::from(r.string("out"));
        let under_out = |p: Option<PathBuf>, name: &str| p.unwrap_or_else(|| out.join(name));
        let paths = Paths {
            model: under_out(r.path("paths.model"), "model.ckpt"),
            index: under_out(r.path("paths.index"), "index.hill"),
            index_model: under_out(r.path("paths.index_model"), "index_model.ckpt"),
            out,
        };
        let retrieve_users = r.array("retrieve.users", |v| v.as_integer().and_then(|i| u32::try_from(i).ok()));

        if !r.problems.is_empty() {
            return Err(r.problems);
        }
        Ok(Self {
            seed,
            threads,
            data,
            model,
            train,
            soft_labels,
            builder,
            index,
            em,
            eval,
            ttt,
            finetune,
            interest,
            ttt_beam,
            sweep,
            paths,
            retrieve_users,
            config_hash: s.hash(),
        })
    }
}
