//! Accuracy sources for fitness evaluation: a lookup table keyed by
//! architecture hash, and a seeded analytic score over architecture
//! features.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::arch::{canonical_hash, validate_architecture, ArchError, ArchHash, Architecture, OpLabel};
use crate::flops::flops_of_skeleton;
use crate::network::{compile, CellTemplate, NetworkError};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("line {line}: accuracy {value} outside [0, 1]")]
    OutOfRange { line: u64, value: f64 },
    #[error("line {line}: duplicate key {hash}")]
    DuplicateKey { line: u64, hash: ArchHash },
    #[error("unknown architecture {0}")]
    UnknownArchitecture(ArchHash),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccuracyTable {
    rows: BTreeMap<ArchHash, f64>,
}

impl AccuracyTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, hash: ArchHash, accuracy: f64) -> Option<f64> {
        self.rows.insert(hash, accuracy)
    }

    pub fn get(&self, hash: &ArchHash) -> Option<f64> {
        self.rows.get(hash).copied()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows in hash order.
    pub fn iter(&self) -> impl Iterator<Item = (&ArchHash, f64)> {
        self.rows.iter().map(|(h, a)| (h, *a))
    }

    /// CSV with header `hash,accuracy`, rows sorted by hash.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("hash,accuracy\n");
        for (h, a) in &self.rows {
            out.push_str(&format!("{h},{a}\n"));
        }
        out
    }
}

pub fn parse_accuracy_table(input: impl Read) -> Result<AccuracyTable, OracleError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let malformed = |line: u64, message: String| OracleError::Malformed { line, message };
    let header = reader.headers().map_err(|e| malformed(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["hash", "accuracy"] {
        return Err(malformed(1, format!("header must be \"hash,accuracy\", found {:?}", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut table = AccuracyTable::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            malformed(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 2 {
            return Err(malformed(line, format!("expected 2 fields, found {}", rec.len())));
        }
        let hash: ArchHash = rec[0].parse().map_err(|e| malformed(line, e))?;
        let value: f64 = rec[1]
            .parse()
            .map_err(|e| malformed(line, format!("accuracy {:?}: {e}", &rec[1])))?;
        if !(0.0..=1.0).contains(&value) {
            return Err(OracleError::OutOfRange { line, value });
        }
        if table.insert(hash, value).is_some() {
            return Err(OracleError::DuplicateKey { line, hash });
        }
    }
    Ok(table)
}

pub fn load_accuracy_table(path: &Path) -> Result<AccuracyTable, OracleError> {
    let file = std::fs::File::open(path).map_err(|source| OracleError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_accuracy_table(std::io::BufReader::new(file))
}

/// Labels counted by the synthetic oracle, one feature each.
const KINDS: [&str; 8] = [
    "conv3x3-bn-relu",
    "conv1x1-bn-relu",
    "maxpool3x3",
    "avgpool",
    "identity-conv",
    "zero-gated-sum",
    "branch-op",
    "conv",
];

pub const FEATURES: usize = 5 + KINDS.len();

/// Per-feature coefficient scale, so that no single feature dominates.
const SCALES: [f64; FEATURES] = [0.15, 0.15, 0.2, 0.01, 0.25, 0.15, 0.15, 0.15, 0.15, 0.15, 0.15, 0.15, 0.25];

/// Architecture features: node count, edge count, longest input-output
/// path, sum of node widths in the first cell, per-kind counts, ln(FLOPs).
pub fn features(arch: &Architecture) -> Result<[f64; FEATURES], OracleError> {
    let template = CellTemplate::from_cell(&arch.cell);
    let skel = compile(&arch.backbone, &template)?;
    let cell = &arch.cell;
    let mut depth = vec![0usize; cell.len()];
    let mut edges = cell.edges.clone();
    edges.sort_unstable();
    for &(s, t) in &edges {
        depth[t] = depth[t].max(depth[s] + 1);
    }
    let width: usize = template
        .nodes()
        .iter()
        .filter(|n| n.op != OpLabel::Input)
        .filter_map(|n| skel.node_shape(n.id))
        .map(|s| s[0])
        .sum();
    let mut f = [0.0; FEATURES];
    f[0] = cell.len() as f64;
    f[1] = cell.edges.len() as f64;
    f[2] = depth.last().copied().unwrap_or(0) as f64;
    f[3] = width as f64;
    for op in &cell.node_ops {
        if let Some(k) = KINDS.iter().position(|k| *k == op.kind_name()) {
            f[4 + k] += 1.0;
        }
    }
    f[FEATURES - 1] = (flops_of_skeleton(&skel).value().max(1) as f64).ln();
    Ok(f)
}

/// `sigmoid(bias + sum_i coef_i * feature_i)` with seeded coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticOracle {
    pub seed: u64,
    pub bias: f64,
    pub coefficients: [f64; FEATURES],
}

impl SyntheticOracle {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bias = rng.random_range(-0.5..0.5);
        let coefficients = SCALES.map(|s| s * rng.random_range(-1.0..1.0));
        SyntheticOracle { seed, bias, coefficients }
    }

    pub fn score(&self, arch: &Architecture) -> Result<f64, OracleError> {
        let f = features(arch)?;
        // Center ln(FLOPs) so its coefficient does not act as a large bias.
        let mut z = self.bias;
        for (i, (c, v)) in self.coefficients.iter().zip(f).enumerate() {
            let v = if i == FEATURES - 1 { v - 10.0 } else { v };
            z += c * v;
        }
        Ok(1.0 / (1.0 + (-z).exp()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FitnessOracle {
    Table(AccuracyTable),
    Synthetic(SyntheticOracle),
}

impl FitnessOracle {
    pub fn synthetic(seed: u64) -> Self {
        FitnessOracle::Synthetic(SyntheticOracle::new(seed))
    }

    /// Validation accuracy in `[0, 1]`.
    pub fn query(&self, arch: &Architecture) -> Result<f64, OracleError> {
        match self {
            FitnessOracle::Table(t) => {
                let h = canonical_hash(arch)?;
                t.get(&h).ok_or(OracleError::UnknownArchitecture(h))
            }
            FitnessOracle::Synthetic(s) => {
                let report = validate_architecture(arch);
                if !report.ok {
                    return Err(ArchError::Invalid(report).into());
                }
                s.score(arch)
            }
        }
    }

    /// Negated accuracy: higher means a worse model for the attacker.
    pub fn fitness(&self, arch: &Architecture) -> Result<f64, OracleError> {
        Ok(fitness_of(self.query(arch)?))
    }
}

pub fn fitness_of(accuracy: f64) -> f64 {
    -accuracy
}
