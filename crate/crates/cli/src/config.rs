//! INI-style experiment configuration: sectioned key = value lines, parsed
//! with exhaustive error collection. The full grammar is documented in the
//! repository README.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fracfed_core::federation::{AlgorithmCfg, CommMode, FedConfig};
use fracfed_core::numerics::FracConfig;
use fracfed_core::partition::{PartitionSpec, Scheme, SeverityPreset};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetCfg {
    Synth {
        n: usize,
        features: usize,
        classes: usize,
        class_sep: f64,
        data_seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum PartitionCfg {
    Preset(SeverityPreset),
    Explicit(Scheme),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    LinReg,
    LogReg,
    Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetCfg,
    pub test_fraction: f64,
    pub partition: PartitionCfg,
    pub clients: usize,
    pub model: ModelKind,
    pub hidden: usize,
    pub fed: FedConfig,
    pub sweep_alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// mu0/delta/cap as parsed, kept so sweeps can rebuild FracConfig per alpha.
    pub mu0: f64,
    pub delta: f64,
    pub cap: Option<f64>,
}

impl ExperimentConfig {
    /// Dataset generation/partition seed (fixed across run seeds).
    pub fn data_seed(&self) -> u64 {
        match self.dataset {
            DatasetCfg::Synth { data_seed, .. } => data_seed,
            DatasetCfg::Idx { .. } => 42,
        }
    }

    pub fn partition_spec(&self, num_classes: usize) -> PartitionSpec {
        match &self.partition {
            PartitionCfg::Preset(p) => p.spec(self.clients, num_classes, self.data_seed()),
            PartitionCfg::Explicit(scheme) => PartitionSpec {
                scheme: scheme.clone(),
                k: self.clients,
                seed: self.data_seed(),
            },
        }
    }

    /// FedConfig with the fractional order replaced (sweep cells).
    pub fn fed_with_alpha(&self, alpha: f64) -> Result<FedConfig, String> {
        let frac =
            FracConfig::new(alpha, self.mu0, self.delta, self.cap).map_err(|e| e.to_string())?;
        Ok(FedConfig {
            algorithm: AlgorithmCfg::FoFedAvg { frac },
            ..self.fed.clone()
        })
    }
}

const SECTIONS: &[&str] = &[
    "dataset",
    "partition",
    "model",
    "algorithm",
    "sweep",
    "output",
];

fn valid_keys(section: &str) -> &'static [&'static str] {
    match section {
        "dataset" => &[
            "kind",
            "n",
            "features",
            "classes",
            "class_sep",
            "data_seed",
            "images",
            "labels",
            "test_fraction",
        ],
        "partition" => &[
            "scheme",
            "clients",
            "dirichlet_alpha",
            "shards_per_client",
            "classes_per_shard",
        ],
        "model" => &["kind", "hidden"],
        "algorithm" => &[
            "name",
            "rounds",
            "client_fraction",
            "local_epochs",
            "batch_size",
            "alpha",
            "mu0",
            "delta",
            "cap",
            "eta",
            "eta_decay",
            "prox_mu",
            "target_accuracy",
            "comm_mode",
        ],
        "sweep" => &["alphas", "seeds"],
        "output" => &["directory", "formats"],
        _ => &[],
    }
}

fn levenshtein(a: &str, b: &str) -> usize {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut row = vec![i + 1];
        for (j, cb) in b.iter().enumerate() {
            let cost = usize::from(ca != cb);
            row.push((prev[j] + cost).min(prev[j + 1] + 1).min(row[j] + 1));
        }
        prev = row;
    }
    prev[b.len()]
}

fn nearest(key: &str, candidates: &[&'static str]) -> Option<&'static str> {
    candidates
        .iter()
        .map(|c| (levenshtein(key, c), *c))
        .min_by_key(|(d, _)| *d)
        .filter(|(d, _)| *d <= 3)
        .map(|(_, c)| c)
}

type Raw = BTreeMap<String, BTreeMap<String, String>>;

fn parse_raw(text: &str, errors: &mut Vec<String>) -> Raw {
    let mut raw: Raw = BTreeMap::new();
    let mut section = String::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim().to_ascii_lowercase();
            if !SECTIONS.contains(&name.as_str()) {
                errors.push(format!(
                    "line {}: unknown section [{name}]; valid sections: {}",
                    lineno + 1,
                    SECTIONS.join(", ")
                ));
            }
            section = name;
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            errors.push(format!(
                "line {}: expected `key = value`, got `{line}`",
                lineno + 1
            ));
            continue;
        };
        let key = key.trim().to_ascii_lowercase();
        let value = value.trim().to_string();
        if section.is_empty() {
            errors.push(format!(
                "line {}: key `{key}` appears before any [section]",
                lineno + 1
            ));
            continue;
        }
        let keys = valid_keys(&section);
        if !keys.is_empty() && !keys.contains(&key.as_str()) {
            match nearest(&key, keys) {
                Some(sug) => errors.push(format!(
                    "line {}: unknown key `{key}` in [{section}]; nearest valid key: `{sug}`",
                    lineno + 1
                )),
                None => errors.push(format!(
                    "line {}: unknown key `{key}` in [{section}]; valid keys: {}",
                    lineno + 1,
                    keys.join(", ")
                )),
            }
            continue;
        }
        let entry = raw.entry(section.clone()).or_default();
        if entry.insert(key.clone(), value).is_some() {
            errors.push(format!(
                "line {}: duplicate key `{key}` in [{section}]",
                lineno + 1
            ));
        }
    }
    raw
}

struct SectionReader<'a> {
    section: &'static str,
    map: Option<&'a BTreeMap<String, String>>,
    errors: &'a mut Vec<String>,
}

fn section<'a>(raw: &'a Raw, name: &'static str, errors: &'a mut Vec<String>) -> SectionReader<'a> {
    SectionReader {
        section: name,
        map: raw.get(name),
        errors,
    }
}

impl<'a> SectionReader<'a> {
    fn get(&mut self, key: &str) -> Option<&'a str> {
        self.map.and_then(|m| m.get(key)).map(|s| s.as_str())
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> T {
        match self.get(key) {
            None => default,
            Some(v) => match v.parse() {
                Ok(x) => x,
                Err(_) => {
                    self.errors.push(format!(
                        "[{}] {key} = `{v}` is not a valid {}",
                        self.section,
                        std::any::type_name::<T>()
                    ));
                    default
                }
            },
        }
    }

    fn parse_opt<T: std::str::FromStr>(&mut self, key: &str) -> Option<T> {
        let v = self.get(key)?;
        if v.is_empty() {
            return None;
        }
        match v.parse() {
            Ok(x) => Some(x),
            Err(_) => {
                self.errors.push(format!(
                    "[{}] {key} = `{v}` is not a valid {}",
                    self.section,
                    std::any::type_name::<T>()
                ));
                None
            }
        }
    }

    fn parse_list<T: std::str::FromStr>(&mut self, key: &str) -> Option<Vec<T>> {
        let v = self.get(key)?;
        let mut out = Vec::new();
        for item in v.split(',') {
            let item = item.trim();
            if item.is_empty() {
                continue;
            }
            match item.parse() {
                Ok(x) => out.push(x),
                Err(_) => self.errors.push(format!(
                    "[{}] {key}: `{item}` is not a valid entry",
                    self.section
                )),
            }
        }
        Some(out)
    }
}

fn alpha_in_range(alpha: f64, context: &str, errors: &mut Vec<String>) {
    if !(alpha > 0.0 && alpha <= 1.0) {
        errors.push(format!(
            "{context}: alpha = {alpha} out of range; the fractional order must lie in (0, 1] \
             (the convergence theory covers only this range)"
        ));
    }
}

/// Parse and fully validate a config file, collecting every error.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, Vec<String>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => return Err(vec![format!("cannot read {}: {e}", path.display())]),
    };
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, Vec<String>> {
    let mut errors = Vec::new();
    let raw = parse_raw(text, &mut errors);

    // [dataset]
    let mut ds = section(&raw, "dataset", &mut errors);
    let kind = ds.get("kind").unwrap_or("synth").to_string();
    let test_fraction = {
        let mut ds = section(&raw, "dataset", &mut errors);
        ds.parse("test_fraction", 0.25)
    };
    let dataset = match kind.as_str() {
        "synth" => {
            let mut ds = section(&raw, "dataset", &mut errors);
            DatasetCfg::Synth {
                n: ds.parse("n", 1000),
                features: ds.parse("features", 10),
                classes: ds.parse("classes", 10),
                class_sep: ds.parse("class_sep", 4.0),
                data_seed: ds.parse("data_seed", 42),
            }
        }
        "idx" => {
            let mut ds = section(&raw, "dataset", &mut errors);
            let images: Option<String> = ds.parse_opt("images");
            let labels: Option<String> = ds.parse_opt("labels");
            let mut paths = (PathBuf::new(), PathBuf::new());
            match images {
                Some(p) => {
                    if !Path::new(&p).exists() {
                        errors.push(format!("[dataset] images file `{p}` does not exist"));
                    }
                    paths.0 = PathBuf::from(p);
                }
                None => errors.push("[dataset] kind = idx requires an `images` path".into()),
            }
            match labels {
                Some(p) => {
                    if !Path::new(&p).exists() {
                        errors.push(format!("[dataset] labels file `{p}` does not exist"));
                    }
                    paths.1 = PathBuf::from(p);
                }
                None => errors.push("[dataset] kind = idx requires a `labels` path".into()),
            }
            DatasetCfg::Idx {
                images: paths.0,
                labels: paths.1,
            }
        }
        other => {
            errors.push(format!(
                "[dataset] kind = `{other}` is not one of synth, idx"
            ));
            DatasetCfg::Synth {
                n: 0,
                features: 0,
                classes: 0,
                class_sep: 0.0,
                data_seed: 0,
            }
        }
    };
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        errors.push(format!(
            "[dataset] test_fraction = {test_fraction} must lie in (0, 1)"
        ));
    }

    // [partition]
    let clients = {
        let mut pt = section(&raw, "partition", &mut errors);
        pt.parse("clients", 10usize)
    };
    let scheme_name = {
        let mut pt = section(&raw, "partition", &mut errors);
        pt.get("scheme").unwrap_or("iid").to_string()
    };
    let partition = match scheme_name.as_str() {
        "iid" => PartitionCfg::Explicit(Scheme::Iid),
        "dirichlet" => {
            let mut pt = section(&raw, "partition", &mut errors);
            let alpha: f64 = pt.parse("dirichlet_alpha", 0.1);
            if !(alpha > 0.0) {
                errors.push(format!(
                    "[partition] dirichlet_alpha = {alpha} must be positive"
                ));
            }
            PartitionCfg::Explicit(Scheme::Dirichlet { alpha })
        }
        "shard" => {
            let mut pt = section(&raw, "partition", &mut errors);
            PartitionCfg::Explicit(Scheme::Shard {
                shards_per_client: pt.parse("shards_per_client", 1usize),
                classes_per_shard: pt.parse("classes_per_shard", 2usize),
            })
        }
        "mild" => PartitionCfg::Preset(SeverityPreset::Mild),
        "moderate" => PartitionCfg::Preset(SeverityPreset::Moderate),
        "severe" => PartitionCfg::Preset(SeverityPreset::Severe),
        other => {
            errors.push(format!(
                "[partition] scheme = `{other}` is not one of iid, dirichlet, shard, mild, moderate, severe"
            ));
            PartitionCfg::Explicit(Scheme::Iid)
        }
    };
    if clients == 0 {
        errors.push("[partition] clients must be at least 1".into());
    }

    // [model]
    let model_name = {
        let mut md = section(&raw, "model", &mut errors);
        md.get("kind").unwrap_or("logreg").to_string()
    };
    let hidden = {
        let mut md = section(&raw, "model", &mut errors);
        md.parse("hidden", 16usize)
    };
    let model = match model_name.as_str() {
        "linreg" => ModelKind::LinReg,
        "logreg" => ModelKind::LogReg,
        "mlp" => ModelKind::Mlp,
        other => {
            errors.push(format!(
                "[model] kind = `{other}` is not one of linreg, logreg, mlp"
            ));
            ModelKind::LogReg
        }
    };
    if model == ModelKind::Mlp && !(1..=fracfed_core::objectives::MAX_MLP_HIDDEN).contains(&hidden)
    {
        errors.push(format!(
            "[model] hidden = {hidden} out of range 1..={}",
            fracfed_core::objectives::MAX_MLP_HIDDEN
        ));
    }

    // [algorithm]
    let alg_name = {
        let mut al = section(&raw, "algorithm", &mut errors);
        al.get("name").unwrap_or("fofedavg").to_string()
    };
    let mut al = section(&raw, "algorithm", &mut errors);
    let rounds: u64 = al.parse("rounds", 10);
    let client_fraction: f64 = al.parse("client_fraction", 0.2);
    let local_epochs: usize = al.parse("local_epochs", 1);
    let batch_size: usize = al.parse("batch_size", 32);
    let alpha: f64 = al.parse("alpha", 0.97);
    let mu0: f64 = al.parse("mu0", 0.01);
    let delta: f64 = al.parse("delta", 1e-5);
    let cap: Option<f64> = al.parse_opt("cap");
    let eta: f64 = al.parse("eta", 0.01);
    let eta_decay: bool = al.parse("eta_decay", false);
    let prox_mu: f64 = al.parse("prox_mu", 0.01);
    let target_accuracy: Option<f64> = al.parse_opt("target_accuracy");
    let comm_mode = match al.get("comm_mode").unwrap_or("client-caches-prev") {
        "client-caches-prev" => CommMode::ClientCachesPrev,
        "broadcast-prev" => CommMode::BroadcastPrev,
        other => {
            let msg = format!(
                "[algorithm] comm_mode = `{other}` is not one of client-caches-prev, broadcast-prev"
            );
            errors.push(msg);
            CommMode::ClientCachesPrev
        }
    };

    let algorithm = match alg_name.as_str() {
        "fofedavg" => {
            alpha_in_range(alpha, "[algorithm] alpha", &mut errors);
            match FracConfig::new(
                alpha.clamp(f64::MIN_POSITIVE, 1.0),
                if mu0 > 0.0 { mu0 } else { 1.0 },
                if delta > 0.0 { delta } else { 1.0 },
                cap,
            ) {
                Ok(frac) => {
                    if !(mu0 > 0.0) {
                        errors.push(format!("[algorithm] mu0 = {mu0} must be positive"));
                    }
                    if !(delta > 0.0) {
                        errors.push(format!("[algorithm] delta = {delta} must be positive"));
                    }
                    AlgorithmCfg::FoFedAvg { frac }
                }
                Err(e) => {
                    errors.push(format!("[algorithm] {e}"));
                    AlgorithmCfg::FedAvg {
                        eta: 0.1,
                        eta_decay: false,
                    }
                }
            }
        }
        "fedavg" => AlgorithmCfg::FedAvg { eta, eta_decay },
        "fedprox" => AlgorithmCfg::FedProx {
            eta,
            eta_decay,
            prox_mu,
        },
        other => {
            errors.push(format!(
                "[algorithm] name = `{other}` is not one of fofedavg, fedavg, fedprox"
            ));
            AlgorithmCfg::FedAvg {
                eta: 0.1,
                eta_decay: false,
            }
        }
    };

    let fed = FedConfig {
        algorithm,
        num_clients: clients,
        client_fraction,
        local_epochs,
        batch_size,
        rounds,
        target_accuracy,
        comm_mode,
    };
    if let Err(e) = fed.validate() {
        errors.push(e.to_string());
    }

    // [sweep]
    let mut sw = section(&raw, "sweep", &mut errors);
    let sweep_alphas: Vec<f64> = sw.parse_list("alphas").unwrap_or_default();
    let mut sw = section(&raw, "sweep", &mut errors);
    let seeds: Vec<u64> = sw.parse_list("seeds").unwrap_or_else(|| vec![1]);
    for a in &sweep_alphas {
        alpha_in_range(*a, "[sweep] alphas", &mut errors);
    }
    if seeds.is_empty() {
        errors.push("[sweep] seeds must be non-empty".into());
    }

    // [output]
    let mut out = section(&raw, "output", &mut errors);
    let out_dir = PathBuf::from(out.get("directory").unwrap_or("out").to_string());
    let mut out = section(&raw, "output", &mut errors);
    if let Some(formats) = out.parse_list::<String>("formats") {
        for f in formats {
            if f != "csv" && f != "json" {
                errors.push(format!("[output] formats: `{f}` is not one of csv, json"));
            }
        }
    }

    if errors.is_empty() {
        Ok(ExperimentConfig {
            dataset,
            test_fraction,
            partition,
            clients,
            model,
            hidden,
            fed,
            sweep_alphas,
            seeds,
            out_dir,
            mu0,
            delta,
            cap,
        })
    } else {
        Err(errors)
    }
}
