//! Interaction parsing, contiguous ID indices, the train/valid/test split and
//! the binary model format.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::signal::{build_g_for_items, EaseModel, GraphFilterFactor};
use crate::solver::{CormlHyperparams, CormlModel, SymmetrizationWeights};
use crate::sparse::{DenseMatrix, InteractionMatrix, SparseSquareMatrix};

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineDiagnostic {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedInteractions {
    /// Unique `(user, item)` token pairs in first-occurrence order.
    pub pairs: Vec<(String, String)>,
    pub duplicates: usize,
    pub diagnostics: Vec<LineDiagnostic>,
}

/// Parse `user <ws> item` lines. Blank lines and `#` comments are ignored;
/// lines with a field count other than two are reported and skipped.
pub fn parse_interactions<R: BufRead>(reader: R) -> Result<ParsedInteractions> {
    let mut out = ParsedInteractions::default();
    let mut seen = HashSet::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<input>", e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 2 {
            out.diagnostics.push(LineDiagnostic {
                line: n + 1,
                message: format!("expected 2 fields, found {}", fields.len()),
            });
            continue;
        }
        let pair = (fields[0].to_string(), fields[1].to_string());
        if seen.insert(pair.clone()) {
            out.pairs.push(pair);
        } else {
            out.duplicates += 1;
        }
    }
    if out.pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(out)
}

pub fn read_interactions(path: &Path) -> Result<ParsedInteractions> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        Error::EmptyInput => Error::data(path, "no interactions found"),
        other => other,
    })
}

// ---------------------------------------------------------------------------
// ID index
// ---------------------------------------------------------------------------

/// Bijection between string tokens and contiguous indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenMap {
    to_index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl TokenMap {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut to_index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if to_index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token '{t}'")));
            }
        }
        Ok(TokenMap { to_index, tokens })
    }

    /// Index of `token`, inserting it at the end if new.
    pub fn intern(&mut self, token: &str) -> usize {
        if let Some(&i) = self.to_index.get(token) {
            return i;
        }
        let i = self.tokens.len();
        self.to_index.insert(token.to_string(), i);
        self.tokens.push(token.to_string());
        i
    }

    pub fn index(&self, token: &str) -> Option<usize> {
        self.to_index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IdIndex {
    pub users: TokenMap,
    pub items: TokenMap,
}

// ---------------------------------------------------------------------------
// Split
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitStrategy {
    /// Each user's interactions are shuffled and cut separately.
    PerUser,
    /// One shuffle over all interactions; users left without a training
    /// interaction get their first held-out one moved back to train.
    Global,
}

impl std::str::FromStr for SplitStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-user" => Ok(SplitStrategy::PerUser),
            "global" => Ok(SplitStrategy::Global),
            other => Err(Error::InvalidArgument(format!(
                "unknown split strategy '{other}' (expected per-user|global)"
            ))),
        }
    }
}

impl std::fmt::Display for SplitStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitStrategy::PerUser => "per-user",
            SplitStrategy::Global => "global",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Train, valid, test fractions.
    pub ratios: [f64; 3],
    pub seed: u64,
    pub min_user_degree: usize,
    pub strategy: SplitStrategy,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratios: [0.6, 0.2, 0.2],
            seed: 0,
            min_user_degree: 5,
            strategy: SplitStrategy::PerUser,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "split ratios must be positive, got {:?}",
                self.ratios
            )));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("split ratios must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// Train/valid/test counts for `n` interactions: train `max(1, floor(r0 n))`,
/// test `floor(r2 n)`, valid the remainder.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> (usize, usize, usize) {
    let floor = |r: f64| (r * n as f64 + 1e-9).floor() as usize;
    let train = floor(ratios[0]).max(1).min(n);
    let test = floor(ratios[2]).min(n - train);
    (train, n - train - test, test)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: InteractionMatrix,
    pub valid: InteractionMatrix,
    pub test: InteractionMatrix,
    pub index: IdIndex,
    pub config: SplitConfig,
}

impl SplitDataset {
    pub fn n_users(&self) -> usize {
        self.train.n_users()
    }

    pub fn n_items(&self) -> usize {
        self.train.n_items()
    }

    /// Short SHA-256 over the index-space contents of all three parts.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_users() as u64).to_le_bytes());
        h.update((self.n_items() as u64).to_le_bytes());
        for (tag, m) in [(b't', &self.train), (b'v', &self.valid), (b's', &self.test)] {
            h.update([tag]);
            for (u, i) in m.pairs() {
                h.update((u as u32).to_le_bytes());
                h.update((i as u32).to_le_bytes());
            }
        }
        hex_prefix(&h.finalize())
    }
}

fn hex_prefix(bytes: &[u8]) -> String {
    bytes[..8].iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Drop repeated pairs and light users (counted over distinct items), index
/// the rest and split their interactions.
pub fn split(pairs: &[(String, String)], config: &SplitConfig) -> Result<SplitDataset> {
    config.validate()?;
    let mut distinct: HashSet<(&str, &str)> = HashSet::new();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for (u, i) in pairs {
        if distinct.insert((u.as_str(), i.as_str())) {
            *counts.entry(u.as_str()).or_default() += 1;
        }
    }
    distinct.clear();
    let mut index = IdIndex::default();
    let mut per_user: Vec<Vec<usize>> = Vec::new();
    for (u, i) in pairs {
        if counts[u.as_str()] < config.min_user_degree || !distinct.insert((u.as_str(), i.as_str())) {
            continue;
        }
        let ui = index.users.intern(u);
        let ii = index.items.intern(i);
        if ui == per_user.len() {
            per_user.push(Vec::new());
        }
        per_user[ui].push(ii);
    }
    if per_user.is_empty() {
        return Err(Error::AllUsersFiltered {
            min_user_degree: config.min_user_degree,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut parts: [Vec<(usize, usize)>; 3] = Default::default();
    match config.strategy {
        SplitStrategy::PerUser => {
            for (u, items) in per_user.iter_mut().enumerate() {
                items.shuffle(&mut rng);
                let (train, valid, _) = split_counts(items.len(), config.ratios);
                for (k, &i) in items.iter().enumerate() {
                    let part = if k < train {
                        0
                    } else if k < train + valid {
                        1
                    } else {
                        2
                    };
                    parts[part].push((u, i));
                }
            }
        }
        SplitStrategy::Global => {
            let mut all: Vec<(usize, usize)> = per_user
                .iter()
                .enumerate()
                .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
                .collect();
            all.shuffle(&mut rng);
            let (train, valid, _) = split_counts(all.len(), config.ratios);
            let mut has_train = vec![false; per_user.len()];
            let mut assigned: Vec<usize> = (0..all.len())
                .map(|k| {
                    if k < train {
                        0
                    } else if k < train + valid {
                        1
                    } else {
                        2
                    }
                })
                .collect();
            for (k, &(u, _)) in all.iter().enumerate() {
                if assigned[k] == 0 {
                    has_train[u] = true;
                }
            }
            for (k, &(u, _)) in all.iter().enumerate() {
                if !has_train[u] {
                    assigned[k] = 0;
                    has_train[u] = true;
                }
            }
            for (k, pair) in all.into_iter().enumerate() {
                parts[assigned[k]].push(pair);
            }
        }
    }

    let (n_users, n_items) = (index.users.len(), index.items.len());
    let [train, valid, test] = parts.map(|p| InteractionMatrix::from_pairs(n_users, n_items, p));
    Ok(SplitDataset {
        train: train?,
        valid: valid?,
        test: test?,
        index,
        config: config.clone(),
    })
}

// ---------------------------------------------------------------------------
// Split directory
// ---------------------------------------------------------------------------

pub const SPLIT_FILES: [&str; 5] = ["train.tsv", "valid.tsv", "test.tsv", "users.tsv", "items.tsv"];

fn header_block(header: &[(String, String)]) -> String {
    header.iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write the five-file layout. `header` lines are echoed as `# key=value`
/// comments at the top of every file.
pub fn write_split(dir: &Path, data: &SplitDataset, header: &[(String, String)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let head = header_block(header);
    for (name, m) in [
        ("train.tsv", &data.train),
        ("valid.tsv", &data.valid),
        ("test.tsv", &data.test),
    ] {
        let mut text = head.clone();
        for (u, i) in m.pairs() {
            let _ = writeln!(text, "{u}\t{i}");
        }
        write_text(&dir.join(name), &text)?;
    }
    for (name, map) in [("users.tsv", &data.index.users), ("items.tsv", &data.index.items)] {
        let mut text = head.clone();
        for (i, t) in map.tokens().iter().enumerate() {
            let _ = writeln!(text, "{t}\t{i}");
        }
        write_text(&dir.join(name), &text)?;
    }
    Ok(())
}

fn data_lines(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(n, l)| (n + 1, l.split_whitespace().map(str::to_string).collect()))
        .collect())
}

fn read_token_map(path: &Path) -> Result<TokenMap> {
    let mut tokens = Vec::new();
    for (line, fields) in data_lines(path)? {
        let [token, idx] = fields.as_slice() else {
            return Err(Error::data(path, format!("line {line}: expected 'token<TAB>index'")));
        };
        if idx.parse::<usize>().ok() != Some(tokens.len()) {
            return Err(Error::data(
                path,
                format!("line {line}: indices must be contiguous from 0"),
            ));
        }
        tokens.push(token.clone());
    }
    TokenMap::from_tokens(tokens).map_err(|e| Error::data(path, e.to_string()))
}

fn read_pairs(path: &Path, n_users: usize, n_items: usize) -> Result<InteractionMatrix> {
    let mut pairs = Vec::new();
    for (line, fields) in data_lines(path)? {
        let parsed = match fields.as_slice() {
            [u, i] => u.parse::<usize>().ok().zip(i.parse::<usize>().ok()),
            _ => None,
        };
        let Some(pair) = parsed else {
            return Err(Error::data(
                path,
                format!("line {line}: expected 'user<TAB>item' indices"),
            ));
        };
        pairs.push(pair);
    }
    InteractionMatrix::from_pairs(n_users, n_items, pairs).map_err(|e| Error::data(path, e.to_string()))
}

/// The `# key=value` header of a split file.
pub fn read_header(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .filter_map(|l| l[1..].trim().split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

/// Load a split directory. The split configuration is recovered from the
/// header of `train.tsv` when present.
pub fn read_split(dir: &Path) -> Result<SplitDataset> {
    let users = read_token_map(&dir.join("users.tsv"))?;
    let items = read_token_map(&dir.join("items.tsv"))?;
    let (nu, ni) = (users.len(), items.len());
    let train = read_pairs(&dir.join("train.tsv"), nu, ni)?;
    let valid = read_pairs(&dir.join("valid.tsv"), nu, ni)?;
    let test = read_pairs(&dir.join("test.tsv"), nu, ni)?;
    let mut config = SplitConfig::default();
    for (k, v) in read_header(&dir.join("train.tsv"))? {
        match k.as_str() {
            "seed" => config.seed = v.parse().unwrap_or(config.seed),
            "min_user_degree" => config.min_user_degree = v.parse().unwrap_or(config.min_user_degree),
            "split_strategy" => config.strategy = v.parse().unwrap_or(config.strategy),
            "ratio" => {
                let r: Vec<f64> = v.split(',').filter_map(|x| x.parse().ok()).collect();
                if let [a, b, c] = r[..] {
                    config.ratios = [a, b, c];
                }
            }
            _ => {}
        }
    }
    Ok(SplitDataset {
        train,
        valid,
        test,
        index: IdIndex { users, items },
        config,
    })
}

// ---------------------------------------------------------------------------
// Model files
// ---------------------------------------------------------------------------

pub const MODEL_MAGIC: &[u8; 6] = b"CORML\x01";
pub const MODEL_VERSION: u8 = 1;
const HEADER_LEN: usize = 6 + 1 + 1 + 1 + 8 * 5 + 8 * 8 + 8 * 5 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ease,
    Gfcf,
    Corml,
}

impl ModelKind {
    fn code(self) -> u8 {
        match self {
            ModelKind::Ease => 1,
            ModelKind::Gfcf => 2,
            ModelKind::Corml => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(ModelKind::Ease),
            2 => Some(ModelKind::Gfcf),
            3 => Some(ModelKind::Corml),
            _ => None,
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ease" => Ok(ModelKind::Ease),
            "gfcf" => Ok(ModelKind::Gfcf),
            "corml" => Ok(ModelKind::Corml),
            other => Err(Error::InvalidArgument(format!(
                "unknown model '{other}' (expected ease|gfcf|corml)"
            ))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Ease => "ease",
            ModelKind::Gfcf => "gfcf",
            ModelKind::Corml => "corml",
        })
    }
}

/// Linear graph filter `D^-1/2 V V^T D^1/2` kept in factored form.
#[derive(Debug, Clone, PartialEq)]
pub struct GfcfModel {
    pub filter: GraphFilterFactor,
    pub user_degrees: Vec<usize>,
    pub rank: usize,
    pub seed: u64,
}

// A process holds one or two models, so boxing the large variant buys nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Ease(EaseModel),
    Gfcf(GfcfModel),
    Corml(CormlModel),
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            TrainedModel::Ease(_) => ModelKind::Ease,
            TrainedModel::Gfcf(_) => ModelKind::Gfcf,
            TrainedModel::Corml(_) => ModelKind::Corml,
        }
    }

    pub fn n_items(&self) -> usize {
        match self {
            TrainedModel::Ease(m) => m.weights.n_rows(),
            TrainedModel::Gfcf(m) => m.filter.n_items(),
            TrainedModel::Corml(m) => m.n_items(),
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.bytes[self.pos..self.pos + N].try_into().expect("length checked");
        self.pos += N;
        out
    }
    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
    fn usize(&mut self) -> usize {
        self.u64() as usize
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Everything a model file stores, independent of model kind.
struct Parts<'a> {
    kind: ModelKind,
    hp: CormlHyperparams,
    l2: f64,
    g_budget: u64,
    n_users: usize,
    n_items: usize,
    weights: Vec<(usize, usize, f64)>,
    filter: Option<&'a GraphFilterFactor>,
    item_degrees: &'a [usize],
    user_degrees: &'a [usize],
}

fn ease_triplets(m: &EaseModel) -> Vec<(usize, usize, f64)> {
    let n = m.weights.n_rows();
    let mut t = Vec::new();
    for i in 0..n {
        for (j, &v) in m.weights.row(i).iter().enumerate() {
            if v != 0.0 {
                t.push((i, j, v));
            }
        }
    }
    t
}

/// Serialize a model to bytes (header, payload, checksum trailer).
pub fn encode_model(model: &TrainedModel, item_degrees: &[usize], user_degrees: &[usize]) -> Vec<u8> {
    let parts = match model {
        TrainedModel::Ease(m) => Parts {
            kind: ModelKind::Ease,
            hp: CormlHyperparams::default(),
            l2: m.l2,
            g_budget: 0,
            n_users: user_degrees.len(),
            n_items: m.weights.n_rows(),
            weights: ease_triplets(m),
            filter: None,
            item_degrees,
            user_degrees,
        },
        TrainedModel::Gfcf(m) => Parts {
            kind: ModelKind::Gfcf,
            hp: CormlHyperparams {
                rank: m.rank,
                seed: m.seed,
                ..Default::default()
            },
            l2: 0.0,
            g_budget: 0,
            n_users: m.user_degrees.len(),
            n_items: m.filter.n_items(),
            weights: Vec::new(),
            filter: Some(&m.filter),
            item_degrees: &m.filter.item_degrees,
            user_degrees: &m.user_degrees,
        },
        TrainedModel::Corml(m) => Parts {
            kind: ModelKind::Corml,
            hp: m.hyperparams.clone(),
            l2: 0.0,
            g_budget: m.g_budget as u64,
            n_users: m.user_degrees.len(),
            n_items: m.n_items(),
            weights: m.h.triplets().collect(),
            filter: Some(&m.filter),
            item_degrees: &m.item_degrees,
            user_degrees: &m.user_degrees,
        },
    };
    encode_parts(&parts)
}

fn encode_parts(p: &Parts<'_>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MODEL_MAGIC);
    w.u8(MODEL_VERSION);
    w.u8(p.kind.code());
    let mut flags = 0u8;
    if let Some(f) = p.filter {
        flags |= 1;
        if f.rank_limited {
            flags |= 2;
        }
    }
    w.u8(flags);
    let rank = p.filter.map_or(0, |f| f.rank());
    for v in [p.n_users, p.n_items, rank, p.weights.len()] {
        w.u64(v as u64);
    }
    w.u64(p.g_budget);
    let hp = &p.hp;
    for v in [hp.t, hp.t_u, hp.epsilon, hp.theta, hp.lambda, hp.rho, hp.tol, p.l2] {
        w.f64(v);
    }
    for v in [hp.rank as u64, hp.max_iters as u64, hp.power_iters as u64, hp.seed] {
        w.u64(v);
    }
    w.u64(hp.nnz_budget.map_or(u64::MAX, |b| b as u64));
    w.u8(match hp.weights {
        SymmetrizationWeights::Degree => 0,
        SymmetrizationWeights::Uniform => 1,
    });
    debug_assert_eq!(w.0.len(), HEADER_LEN);

    for &(i, j, v) in &p.weights {
        w.u32(i as u32);
        w.u32(j as u32);
        w.f64(v);
    }
    if let Some(f) = p.filter {
        for &v in f.v.as_slice() {
            w.f64(v);
        }
        for &s in &f.singular_values {
            w.f64(s);
        }
    }
    for &d in p.item_degrees.iter().chain(p.user_degrees) {
        w.u64(d as u64);
    }
    let sum = checksum(&w.0);
    w.u64(sum);
    w.0
}

/// Parse bytes written by [`encode_model`]. Returns the model together with
/// the stored item and user degrees.
pub fn decode_model(bytes: &[u8]) -> Result<(TrainedModel, Vec<usize>, Vec<usize>)> {
    let found = bytes.len() as u64;
    if bytes.len() < MODEL_MAGIC.len() + 1 || &bytes[..MODEL_MAGIC.len()] != MODEL_MAGIC {
        return Err(Error::VersionMismatch("missing CORML format tag".into()));
    }
    if bytes[MODEL_MAGIC.len()] != MODEL_VERSION {
        return Err(Error::VersionMismatch(format!(
            "file version {}, supported {}",
            bytes[MODEL_MAGIC.len()],
            MODEL_VERSION
        )));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            found,
        });
    }
    let mut r = Reader {
        bytes,
        pos: MODEL_MAGIC.len() + 1,
    };
    let kind = ModelKind::from_code(r.u8()).ok_or_else(|| Error::VersionMismatch("unknown model kind".into()))?;
    let flags = r.u8();
    let (n_users, n_items, rank, nnz) = (r.usize(), r.usize(), r.usize(), r.usize());
    let g_budget = r.u64();
    let mut hp = CormlHyperparams::default();
    let floats: [f64; 8] = std::array::from_fn(|_| r.f64());
    [hp.t, hp.t_u, hp.epsilon, hp.theta, hp.lambda, hp.rho, hp.tol] = floats[..7].try_into().unwrap();
    let l2 = floats[7];
    hp.rank = r.usize();
    hp.max_iters = r.usize();
    hp.power_iters = r.usize();
    hp.seed = r.u64();
    hp.nnz_budget = match r.u64() {
        u64::MAX => None,
        b => Some(b as usize),
    };
    hp.weights = match r.u8() {
        0 => SymmetrizationWeights::Degree,
        1 => SymmetrizationWeights::Uniform,
        w => return Err(Error::VersionMismatch(format!("unknown weighting code {w}"))),
    };
    let has_filter = flags & 1 != 0;

    let expected = (|| {
        let filter = if has_filter {
            n_items.checked_mul(rank)?.checked_add(rank)?.checked_mul(8)?
        } else {
            0
        };
        HEADER_LEN
            .checked_add(nnz.checked_mul(16)?)?
            .checked_add(filter)?
            .checked_add(n_items.checked_add(n_users)?.checked_mul(8)?)?
            .checked_add(8)
    })()
    .ok_or_else(|| Error::VersionMismatch("header dimensions overflow".into()))?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected: expected as u64,
            found,
        });
    }
    if bytes.len() > expected {
        return Err(Error::VersionMismatch(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let stored = u64::from_le_bytes(bytes[expected - 8..].try_into().unwrap());
    let computed = checksum(&bytes[..expected - 8]);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    let bad = |m: String| Error::VersionMismatch(m);
    let mut triplets = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        let (i, j, v) = (r.u32() as usize, r.u32() as usize, r.f64());
        triplets.push((i, j, v));
    }
    let filter_parts = if has_filter {
        let v: Vec<f64> = (0..n_items * rank).map(|_| r.f64()).collect();
        let s: Vec<f64> = (0..rank).map(|_| r.f64()).collect();
        Some((v, s))
    } else {
        None
    };
    let item_degrees: Vec<usize> = (0..n_items).map(|_| r.usize()).collect();
    let user_degrees: Vec<usize> = (0..n_users).map(|_| r.usize()).collect();
    let filter = filter_parts
        .map(|(v, s)| -> Result<GraphFilterFactor> {
            Ok(GraphFilterFactor {
                v: DenseMatrix::from_row_major(n_items, rank, v).map_err(|e| bad(e.to_string()))?,
                singular_values: s,
                item_degrees: item_degrees.clone(),
                rank_limited: flags & 2 != 0,
            })
        })
        .transpose()?;

    let model = match kind {
        ModelKind::Ease => {
            let mut w = DenseMatrix::zeros(n_items, n_items);
            for (i, j, v) in triplets {
                if i >= n_items || j >= n_items {
                    return Err(bad(format!("weight index ({i}, {j}) out of range")));
                }
                w[(i, j)] = v;
            }
            TrainedModel::Ease(EaseModel { weights: w, l2 })
        }
        ModelKind::Gfcf => TrainedModel::Gfcf(GfcfModel {
            filter: filter.ok_or_else(|| bad("graph filter block missing".into()))?,
            user_degrees: user_degrees.clone(),
            rank: hp.rank,
            seed: hp.seed,
        }),
        ModelKind::Corml => {
            let filter = filter.ok_or_else(|| bad("graph filter block missing".into()))?;
            let h = SparseSquareMatrix::from_triplets(n_items, triplets).map_err(|e| bad(e.to_string()))?;
            let (g, _) = build_g_for_items(&filter, g_budget as usize);
            TrainedModel::Corml(CormlModel {
                h,
                g,
                g_budget: g_budget as usize,
                filter,
                item_degrees: item_degrees.clone(),
                user_degrees: user_degrees.clone(),
                hyperparams: hp,
            })
        }
    };
    Ok((model, item_degrees, user_degrees))
}

pub fn save_model(model: &TrainedModel, item_degrees: &[usize], user_degrees: &[usize], path: &Path) -> Result<()> {
    let bytes = encode_model(model, item_degrees, user_degrees);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<(TrainedModel, Vec<usize>, Vec<usize>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

/// Short SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex_prefix(&Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{fit_ease, truncated_svd};
    use crate::solver::fit_corml;

    fn parse(text: &str) -> Result<ParsedInteractions> {
        parse_interactions(text.as_bytes())
    }

    fn tokens(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(u, i)| (u.to_string(), i.to_string())).collect()
    }

    #[test]
    fn parse_examples() {
        assert_eq!(parse("a\tx\na\tx\n").unwrap().pairs, tokens(&[("a", "x")]));
        let p = parse("a\tx\nb\ty\n").unwrap();
        assert_eq!(p.pairs, tokens(&[("a", "x"), ("b", "y")]));
        let p = parse("# c\na\nb y\n\nc z extra\n").unwrap();
        assert_eq!(p.pairs, tokens(&[("b", "y")]));
        assert_eq!(p.diagnostics.iter().map(|d| d.line).collect::<Vec<_>>(), vec![2, 5]);
        assert!(matches!(parse("# only\n"), Err(Error::EmptyInput)));
    }

    #[test]
    fn split_counts_rule() {
        assert_eq!(split_counts(5, [0.6, 0.2, 0.2]), (3, 1, 1));
        assert_eq!(split_counts(10, [0.6, 0.2, 0.2]), (6, 2, 2));
        assert_eq!(split_counts(1, [0.1, 0.1, 0.8]), (1, 0, 0));
        assert_eq!(split_counts(7, [0.6, 0.2, 0.2]), (4, 2, 1));
    }

    fn synthetic_pairs(users: usize, seed: u64) -> Vec<(String, String)> {
        synthetic_pairs_with(users, seed, 1..30)
    }

    fn synthetic_pairs_with(users: usize, seed: u64, degrees: std::ops::Range<usize>) -> Vec<(String, String)> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for u in 0..users {
            let n = rng.random_range(degrees.clone());
            for _ in 0..n {
                out.push((format!("u{u}"), format!("i{}", rng.random_range(0..200))));
            }
        }
        out
    }

    #[test]
    fn split_is_partition_and_deterministic() {
        let parsed = parse_interactions(
            synthetic_pairs(300, 1)
                .iter()
                .map(|(u, i)| format!("{u}\t{i}\n"))
                .collect::<String>()
                .as_bytes(),
        )
        .unwrap();
        for strategy in [SplitStrategy::PerUser, SplitStrategy::Global] {
            let cfg = SplitConfig {
                strategy,
                seed: 4,
                ..Default::default()
            };
            let s = split(&parsed.pairs, &cfg).unwrap();
            assert_eq!(s, split(&parsed.pairs, &cfg).unwrap());
            let mut all: Vec<(String, String)> = Vec::new();
            for m in [&s.train, &s.valid, &s.test] {
                for (u, i) in m.pairs() {
                    all.push((
                        s.index.users.token(u).unwrap().to_string(),
                        s.index.items.token(i).unwrap().to_string(),
                    ));
                }
            }
            let mut expected: Vec<(String, String)> = parsed
                .pairs
                .iter()
                .filter(|(u, _)| parsed.pairs.iter().filter(|(v, _)| v == u).count() >= 5)
                .cloned()
                .collect();
            let total = all.len();
            all.sort();
            all.dedup();
            assert_eq!(all.len(), total, "parts overlap");
            expected.sort();
            assert_eq!(all, expected);
            assert!(s.train.user_degrees().iter().all(|&d| d >= 1));
        }
    }

    #[test]
    fn split_proportions_on_larger_log() {
        // Floor rounding shifts about half an interaction per user from train to
        // valid, so the aggregate is close to 60/20/20 once degrees are moderate.
        let pairs = synthetic_pairs_with(1000, 2, 20..80);
        let parsed = parse_interactions(
            pairs
                .iter()
                .map(|(u, i)| format!("{u}\t{i}\n"))
                .collect::<String>()
                .as_bytes(),
        )
        .unwrap();
        let s = split(&parsed.pairs, &SplitConfig::default()).unwrap();
        let total = (s.train.nnz() + s.valid.nnz() + s.test.nnz()) as f64;
        for (m, want) in [(&s.train, 0.6), (&s.valid, 0.2), (&s.test, 0.2)] {
            let got = m.nnz() as f64 / total;
            assert!((got - want).abs() < 0.02, "{got} vs {want}");
        }
    }

    #[test]
    fn split_errors() {
        let pairs = tokens(&[("a", "x"), ("a", "y")]);
        assert!(matches!(
            split(&pairs, &SplitConfig::default()),
            Err(Error::AllUsersFiltered { .. })
        ));
        let cfg = SplitConfig {
            ratios: [0.5, 0.2, 0.2],
            ..Default::default()
        };
        assert!(split(&pairs, &cfg).is_err());
    }

    #[test]
    fn split_directory_round_trip() {
        let pairs = synthetic_pairs(50, 3);
        let s = split(
            &pairs,
            &SplitConfig {
                seed: 9,
                ..Default::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let header = vec![
            ("seed".to_string(), "9".to_string()),
            ("ratio".to_string(), "0.6,0.2,0.2".to_string()),
        ];
        write_split(dir.path(), &s, &header).unwrap();
        let back = read_split(dir.path()).unwrap();
        assert_eq!(back, s);
        assert_eq!(read_header(&dir.path().join("users.tsv")).unwrap(), header);
    }

    fn toy_matrix() -> InteractionMatrix {
        let mut pairs = Vec::new();
        for u in 0..12 {
            for i in 0..8 {
                if (u * 3 + i * 5) % 7 < 3 {
                    pairs.push((u, i));
                }
            }
        }
        InteractionMatrix::from_pairs(12, 8, pairs).unwrap()
    }

    #[test]
    fn model_round_trips_bit_exactly() {
        let r = toy_matrix();
        let (corml, _) = fit_corml(
            &r,
            &CormlHyperparams {
                rank: 4,
                ..Default::default()
            },
        )
        .unwrap();
        let models = [
            TrainedModel::Ease(fit_ease(&r, 2.0).unwrap()),
            TrainedModel::Gfcf(GfcfModel {
                filter: truncated_svd(&r, 3, 1, 4).unwrap(),
                user_degrees: r.user_degrees().to_vec(),
                rank: 3,
                seed: 1,
            }),
            TrainedModel::Corml(corml),
        ];
        for m in models {
            let bytes = encode_model(&m, r.item_degrees(), r.user_degrees());
            let (back, items, users) = decode_model(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(items, r.item_degrees());
            assert_eq!(users, r.user_degrees());
            assert_eq!(encode_model(&back, &items, &users), bytes);
        }
    }

    #[test]
    fn model_file_corruption() {
        let r = toy_matrix();
        let m = TrainedModel::Ease(fit_ease(&r, 2.0).unwrap());
        let bytes = encode_model(&m, r.item_degrees(), r.user_degrees());

        let mut tag = bytes.clone();
        tag[0] = b'X';
        assert!(matches!(decode_model(&tag), Err(Error::VersionMismatch(_))));
        let mut version = bytes.clone();
        version[6] = 9;
        assert!(matches!(decode_model(&version), Err(Error::VersionMismatch(_))));
        assert!(matches!(
            decode_model(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        let mut flipped = bytes.clone();
        flipped[HEADER_LEN + 3] ^= 1;
        assert!(matches!(decode_model(&flipped), Err(Error::ChecksumMismatch { .. })));
    }
}
