//! Experiment settings, the run ledger and injection sweeps.

use crate::autograd::TileLayout;
use crate::config::{AttributeConfig, InjectionSite, ModelConfig, RepresentationKind};
use crate::data::{load_pretrained_vectors, EncodedCorpus};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::training::{evaluate, train, EpochRecord, Evaluation, RunMetrics, TrainConfig};
use parking_lot::Mutex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

/// Everything that shapes a training run, as one flat TOML table.
///
/// ```toml
/// dim = 64
/// representation = "chim"
/// sites = ["embedding"]
/// chunk_factor = 8
/// batch_size = 4
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Width of every layer.
    pub dim: usize,
    /// Attribute representation; absent for the attribute-free model.
    pub representation: Option<RepresentationKind>,
    pub sites: Vec<InjectionSite>,
    /// Width of each user and product vector; defaults to `dim`.
    pub attribute_dim: Option<usize>,
    /// Row and column chunk factor of CHIM gates. The classifier row factor
    /// is always 1.
    pub chunk_factor: usize,
    pub tile_layout: TileLayout,
    /// Training tokens rarer than this map to the unknown word.
    pub min_count: usize,
    /// Classes in corpus files.
    pub num_classes: usize,
    /// Optional `token v1 .. vE` file with `dim`-wide vectors.
    pub vectors: Option<PathBuf>,
    pub batch_size: usize,
    pub dropout: f64,
    /// Row-norm cap on constrained weights; 0 disables it.
    pub max_norm: f64,
    pub rho: f64,
    pub eps: f64,
    pub learning_rate: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub unknown_attribute_rate: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            dim: 64,
            representation: None,
            sites: Vec::new(),
            attribute_dim: None,
            chunk_factor: 8,
            tile_layout: TileLayout::Periodic,
            min_count: 2,
            num_classes: 5,
            vectors: None,
            batch_size: t.batch_size,
            dropout: t.dropout,
            max_norm: t.max_norm.unwrap_or(0.0),
            rho: t.rho,
            eps: t.eps,
            learning_rate: t.learning_rate,
            patience: t.patience,
            max_epochs: t.max_epochs,
            unknown_attribute_rate: t.unknown_attribute_rate,
        }
    }
}

impl ExperimentConfig {
    /// Full-size settings: 300-wide layers and chunk factor 15.
    pub fn full_scale() -> Self {
        Self {
            dim: 300,
            chunk_factor: 15,
            ..Self::default()
        }
    }

    /// Parses TOML. Unknown keys are rejected with the list of valid keys.
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config(0).validate()?;
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return Err(Error::config(format!("dim {} must be positive and even", self.dim)));
        }
        if self.chunk_factor == 0 {
            return Err(Error::config("chunk_factor must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        match (self.representation, self.sites.is_empty()) {
            (Some(_), true) => Err(Error::config("representation is set but sites is empty")),
            (None, false) => Err(Error::config("sites are set but representation is missing")),
            _ => Ok(()),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            dropout: self.dropout,
            max_norm: (self.max_norm > 0.0).then_some(self.max_norm),
            rho: self.rho,
            eps: self.eps,
            learning_rate: self.learning_rate,
            patience: self.patience,
            max_epochs: self.max_epochs,
            seed,
            unknown_attribute_rate: self.unknown_attribute_rate,
        }
    }

    pub fn attribute_config(&self) -> Option<AttributeConfig> {
        self.representation.map(|kind| {
            let mut a = AttributeConfig::new(kind, &self.sites, self.attribute_dim.unwrap_or(self.dim));
            if kind == RepresentationKind::Chim {
                a = a.with_chunks(self.chunk_factor, self.chunk_factor);
            }
            a.layout = self.tile_layout;
            a
        })
    }

    /// Model shape for a corpus with the given vocabulary sizes.
    pub fn model_config(&self, vocab: usize, users: usize, products: usize, classes: usize) -> Result<ModelConfig> {
        let mut m = ModelConfig::uniform(self.dim, vocab, classes);
        if let Some(a) = self.attribute_config() {
            m = m.with_attributes(a, users, products);
        }
        m.validate()?;
        Ok(m)
    }

    /// Same settings with a different representation and site set.
    pub fn with_cell(&self, kind: RepresentationKind, sites: &[InjectionSite]) -> Self {
        Self {
            representation: Some(kind),
            sites: sites.to_vec(),
            ..self.clone()
        }
    }

    /// Hex SHA-256 of the canonical JSON form (keys sorted).
    pub fn hash(&self) -> String {
        canonical_hash(self)
    }
}

/// SHA-256 over JSON with object keys in sorted order.
pub fn canonical_hash<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable");
    let text = serde_json::to_string(&v).expect("serializable");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Outcome of one training run.
pub struct TrainedRun {
    pub model: Model,
    pub metrics: RunMetrics,
    pub test: Option<Evaluation>,
    /// Share of the vocabulary found in the vectors file.
    pub vector_coverage: Option<f64>,
}

/// Builds the model for `config`, trains it on `data` and scores the test
/// split when there is one.
pub fn run_training(
    config: &ExperimentConfig,
    data: &EncodedCorpus,
    seed: u64,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainedRun> {
    config.validate()?;
    let mc = config.model_config(data.words.len(), data.users.len(), data.products.len(), data.num_classes)?;
    let mut model = Model::new(mc, seed)?;
    let mut vector_coverage = None;
    if let Some(path) = &config.vectors {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7ec7);
        let v = load_pretrained_vectors(path, &data.words, config.dim, &mut rng)?;
        vector_coverage = Some(v.coverage);
        model.set_word_vectors(v.table)?;
    }
    let metrics = train(&mut model, &data.train, &data.dev, &config.train_config(seed), observer)?;
    let test = if data.test.is_empty() {
        None
    } else {
        Some(evaluate(&model, &data.test, None)?)
    };
    Ok(TrainedRun {
        model,
        metrics,
        test,
        vector_coverage,
    })
}

/// One append-only ledger line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub metrics: serde_json::Value,
    pub code_version: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl LedgerRecord {
    pub fn new(command: &str, config_hash: String, seed: u64, metrics: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            config_hash,
            seed,
            metrics,
            code_version: code_version().to_string(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        }
    }
}

/// Package version plus the commit the library was built from, when known.
pub fn code_version() -> &'static str {
    concat!(env!("CARGO_PKG_VERSION"), "+", env!("CHIM_GIT_REV"))
}

/// Line-delimited JSON file opened for appending. Writes from several
/// threads are serialized.
pub struct Ledger {
    file: Mutex<File>,
}

impl Ledger {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file: Mutex::new(file) })
    }

    pub fn append(&self, record: &LedgerRecord) -> Result<()> {
        let mut line = serde_json::to_string(record).map_err(|e| Error::invalid(e.to_string()))?;
        line.push('\n');
        let mut f = self.file.lock();
        f.write_all(line.as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Vec<LedgerRecord>> {
        std::fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect()
    }
}

/// One configuration in a sweep: a representation at one site, or CHIM at
/// a pair of sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Cell {
    Single(RepresentationKind, InjectionSite),
    /// CHIM at both sites; stored with the earlier site first.
    Pair(InjectionSite, InjectionSite),
}

impl Cell {
    pub fn pair(a: InjectionSite, b: InjectionSite) -> Result<Self> {
        if a == b {
            return Err(Error::config(format!("pair cell needs two different sites, got {a} twice")));
        }
        Ok(Self::Pair(a.min(b), a.max(b)))
    }

    pub fn kind(self) -> RepresentationKind {
        match self {
            Cell::Single(k, _) => k,
            Cell::Pair(..) => RepresentationKind::Chim,
        }
    }

    pub fn sites(self) -> Vec<InjectionSite> {
        match self {
            Cell::Single(_, s) => vec![s],
            Cell::Pair(a, b) => vec![a, b],
        }
    }

    /// The nine single-site configurations that were compared originally:
    /// bias at the attention site, matrix and CHIM at every site.
    pub fn comparison() -> Vec<Cell> {
        let mut out = vec![Cell::Single(RepresentationKind::Bias, InjectionSite::Attention)];
        for kind in [RepresentationKind::Matrix, RepresentationKind::Chim] {
            out.extend(InjectionSite::ALL.map(|s| Cell::Single(kind, s)));
        }
        out
    }

    /// CHIM at each site alone and at every unordered pair of sites.
    pub fn joint_grid() -> Vec<Cell> {
        let mut out: Vec<Cell> = InjectionSite::ALL
            .map(|s| Cell::Single(RepresentationKind::Chim, s))
            .to_vec();
        for (i, &a) in InjectionSite::ALL.iter().enumerate() {
            for &b in &InjectionSite::ALL[i + 1..] {
                out.push(Cell::Pair(a, b));
            }
        }
        out
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Single(k, s) => write!(f, "{}:{}", k.label(), s.label()),
            Cell::Pair(a, b) => write!(f, "chim:{}+{}", a.label(), b.label()),
        }
    }
}

impl FromStr for Cell {
    type Err = Error;

    /// `kind:site` or `chim:site+site`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, sites) = s
            .split_once(':')
            .ok_or_else(|| Error::config(format!("cell `{s}` should look like `chim:embed` or `chim:embed+encode`")))?;
        let kind: RepresentationKind = kind.trim().parse()?;
        match sites.split_once('+') {
            None => Ok(Cell::Single(kind, sites.trim().parse()?)),
            Some((a, b)) => {
                if kind != RepresentationKind::Chim {
                    return Err(Error::config(format!("cell `{s}`: site pairs are only swept with chim")));
                }
                Cell::pair(a.trim().parse()?, b.trim().parse()?)
            }
        }
    }
}

/// Drops repeated cells, keeping first occurrences in order. Returns the
/// unique cells and the repeats that were dropped.
pub fn dedup_cells(cells: &[Cell]) -> (Vec<Cell>, Vec<Cell>) {
    let mut unique = Vec::new();
    let mut repeats = Vec::new();
    for &c in cells {
        if unique.contains(&c) {
            repeats.push(c);
        } else {
            unique.push(c);
        }
    }
    (unique, repeats)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub cell: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub dev_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// Trains every cell; cell `i` uses seed `seed + i`.
pub fn run_sweep(
    base: &ExperimentConfig,
    data: &EncodedCorpus,
    cells: &[Cell],
    seed: u64,
    on_cell: &mut dyn FnMut(Cell, &CellResult),
) -> Result<Vec<(Cell, CellResult)>> {
    let mut out = Vec::with_capacity(cells.len());
    for (i, &cell) in cells.iter().enumerate() {
        let config = base.with_cell(cell.kind(), &cell.sites());
        let s = seed + i as u64;
        let run = run_training(&config, data, s, &mut |_| {})?;
        let r = CellResult {
            cell: cell.to_string(),
            seed: s,
            best_epoch: run.metrics.best_epoch,
            dev_accuracy: run.metrics.best_dev_accuracy,
            test_accuracy: run.test.map(|t| t.accuracy),
        };
        on_cell(cell, &r);
        out.push((cell, r));
    }
    Ok(out)
}

/// Four-by-four CHIM injection grid over embed, encode, attend, classify.
/// The diagonal holds single-site accuracy; entry `(i, j)` holds the
/// accuracy of CHIM at sites `i` and `j` minus the single-site accuracy of
/// row `i`. Entries without the needed runs are `None`.
pub fn joint_heatmap(results: &[(Cell, f64)]) -> [[Option<f64>; 4]; 4] {
    let lookup: BTreeMap<Cell, f64> = results.iter().copied().collect();
    let mut grid = [[None; 4]; 4];
    for (i, &a) in InjectionSite::ALL.iter().enumerate() {
        let single = lookup.get(&Cell::Single(RepresentationKind::Chim, a)).copied();
        for (j, &b) in InjectionSite::ALL.iter().enumerate() {
            grid[i][j] = if i == j {
                single
            } else {
                let joint = lookup.get(&Cell::Pair(a.min(b), a.max(b))).copied();
                joint.zip(single).map(|(j, s)| j - s)
            };
        }
    }
    grid
}

/// The heatmap as comma-separated text with a header row and a label
/// column. Missing entries are left empty.
pub fn heatmap_csv(grid: &[[Option<f64>; 4]; 4]) -> String {
    let labels = InjectionSite::ALL.map(InjectionSite::label);
    let mut s = format!(",{}\n", labels.join(","));
    for (label, row) in labels.iter().zip(grid) {
        let cells: Vec<String> = row
            .iter()
            .map(|v| v.map(|v| format!("{v:.4}")).unwrap_or_default())
            .collect();
        s.push_str(&format!("{label},{}\n", cells.join(",")));
    }
    s
}

/// One line per cell: `cell,seed,best_epoch,dev_accuracy,test_accuracy`.
pub fn cells_csv(results: &[(Cell, CellResult)]) -> String {
    let mut s = String::from("cell,seed,best_epoch,dev_accuracy,test_accuracy\n");
    for (_, r) in results {
        let test = r.test_accuracy.map(|t| format!("{t:.4}")).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{:.4},{}\n",
            r.cell, r.seed, r.best_epoch, r.dev_accuracy, test
        ));
    }
    s
}
