//! CSV ingestion, vocabulary building, encoding, time-ordered splitting and
//! batching.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DlfError, Result};

/// Token for a missing numerical value.
pub const MISSING_TOKEN: &str = "∅";
/// Token for a non-positive numerical value.
pub const NEGATIVE_TOKEN: &str = "neg";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Categorical,
    Numerical,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
}

/// The dataset block of a run configuration: where the CSV lives and which
/// columns feed the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Files read in order; their concatenation is treated as time-ordered.
    pub paths: Vec<PathBuf>,
    pub label: String,
    pub fields: Vec<FieldSpec>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
}

fn default_delimiter() -> char {
    ','
}

fn default_min_count() -> usize {
    1
}

/// Maps a raw numerical value to its bucket token.
pub fn bucketize_numeric(v: Option<f64>) -> String {
    match v {
        None => MISSING_TOKEN.to_string(),
        Some(v) if v.is_nan() => MISSING_TOKEN.to_string(),
        Some(v) if v <= 0.0 => NEGATIVE_TOKEN.to_string(),
        Some(v) if v < 2.0 => format!("{}", v.round() as i64),
        Some(v) => format!("{}", v.log2().floor() as i64),
    }
}

/// One parsed CSV record: per-field tokens in schema order. `None` is a
/// missing categorical value (always encoded as id 0).
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedRow {
    pub line: usize,
    pub label: Option<u8>,
    pub tokens: Vec<Option<String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowError {
    pub line: usize,
    pub message: String,
}

impl From<RowError> for DlfError {
    fn from(e: RowError) -> Self {
        DlfError::Row { line: e.line, message: e.message }
    }
}

/// Rows parsed from one or more CSV files, with any malformed lines set aside.
#[derive(Clone, Debug, Default)]
pub struct ParsedRows {
    pub rows: Vec<ParsedRow>,
    pub errors: Vec<RowError>,
}

fn parse_label(raw: &str) -> Option<u8> {
    match raw.trim() {
        "1" | "1.0" => Some(1),
        "0" | "0.0" | "-1" | "-1.0" => Some(0),
        _ => None,
    }
}

/// Reads CSV text. When `require_label` is false a missing label column is
/// tolerated and rows carry `label: None`.
pub fn parse_csv<R: Read>(reader: R, config: &DatasetConfig, require_label: bool) -> Result<ParsedRows> {
    if !config.delimiter.is_ascii() {
        return Err(DlfError::config(format!("delimiter {:?} is not ASCII", config.delimiter)));
    }
    let mut csv = csv::ReaderBuilder::new()
        .delimiter(config.delimiter as u8)
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = csv
        .headers()
        .map_err(|e| DlfError::Row { line: 1, message: format!("unreadable header: {e}") })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let find = |name: &str| header.iter().position(|h| h == name);
    let label_col = find(&config.label);
    if require_label && label_col.is_none() {
        return Err(DlfError::config(format!("label column {:?} not found in header", config.label)));
    }
    let mut field_cols = Vec::with_capacity(config.fields.len());
    for f in &config.fields {
        let col = find(&f.name).ok_or_else(|| DlfError::config(format!("field column {:?} not found in header", f.name)))?;
        field_cols.push(col);
    }

    let mut out = ParsedRows::default();
    for (i, record) in csv.records().enumerate() {
        let line = i + 2;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                out.errors.push(RowError { line, message: e.to_string() });
                continue;
            }
        };
        if record.len() != header.len() {
            out.errors.push(RowError {
                line,
                message: format!("expected {} columns, found {}", header.len(), record.len()),
            });
            continue;
        }
        match parse_record(&record, config, label_col, &field_cols) {
            Ok((label, tokens)) => out.rows.push(ParsedRow { line, label, tokens }),
            Err(message) => out.errors.push(RowError { line, message }),
        }
    }
    Ok(out)
}

fn parse_record(
    record: &csv::StringRecord,
    config: &DatasetConfig,
    label_col: Option<usize>,
    field_cols: &[usize],
) -> std::result::Result<(Option<u8>, Vec<Option<String>>), String> {
    let label = match label_col {
        Some(c) => Some(parse_label(&record[c]).ok_or_else(|| format!("label {:?} is not binary", &record[c]))?),
        None => None,
    };
    let mut tokens = Vec::with_capacity(field_cols.len());
    for (spec, &c) in config.fields.iter().zip(field_cols) {
        let raw = record[c].trim();
        let token = match spec.kind {
            FieldKind::Categorical => (!raw.is_empty()).then(|| raw.to_string()),
            FieldKind::Numerical => {
                let v = if raw.is_empty() {
                    None
                } else {
                    Some(raw.parse::<f64>().map_err(|_| format!("field {:?}: {raw:?} is not a number", spec.name))?)
                };
                Some(bucketize_numeric(v))
            }
        };
        tokens.push(token);
    }
    Ok((label, tokens))
}

pub fn read_csv_files(config: &DatasetConfig, require_label: bool) -> Result<ParsedRows> {
    let mut all = ParsedRows::default();
    for path in &config.paths {
        let file = File::open(path).map_err(|e| DlfError::config(format!("cannot open {}: {e}", path.display())))?;
        let part = parse_csv(BufReader::new(file), config, require_label)?;
        all.rows.extend(part.rows);
        all.errors.extend(part.errors);
    }
    Ok(all)
}

/// Field definition after vocabulary building.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDef {
    pub name: String,
    pub kind: FieldKind,
    /// Includes the reserved out-of-vocabulary id 0.
    pub vocab_size: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub label_column: String,
    pub fields: Vec<FieldDef>,
}

impl FeatureSchema {
    pub fn n_fields(&self) -> usize {
        self.fields.len()
    }

    /// Start of each field's id range in one concatenated embedding table.
    pub fn offsets(&self) -> Vec<usize> {
        self.fields
            .iter()
            .scan(0, |acc, f| {
                let start = *acc;
                *acc += f.vocab_size;
                Some(start)
            })
            .collect()
    }

    pub fn total_vocab(&self) -> usize {
        self.fields.iter().map(|f| f.vocab_size).sum()
    }

    /// Distinct in-vocabulary feature values, OOV slots excluded.
    pub fn total_features(&self) -> usize {
        self.fields.iter().map(|f| f.vocab_size - 1).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.fields.is_empty() {
            return Err(DlfError::config("schema has no fields"));
        }
        if let Some(f) = self.fields.iter().find(|f| f.vocab_size < 2) {
            return Err(DlfError::config(format!("field {:?} has no in-vocabulary tokens", f.name)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct FieldVocab {
    name: String,
    kind: FieldKind,
    /// `tokens[i]` has id `i + 1`.
    tokens: Vec<String>,
}

/// Per-field token-to-id maps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VocabMap {
    label_column: String,
    fields: Vec<FieldVocab>,
    #[serde(skip)]
    lookup: Vec<HashMap<String, u32>>,
}

impl PartialEq for VocabMap {
    fn eq(&self, other: &Self) -> bool {
        self.label_column == other.label_column && self.fields == other.fields
    }
}

impl VocabMap {
    fn index(mut self) -> Self {
        self.lookup = self
            .fields
            .iter()
            .map(|f| f.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32 + 1)).collect())
            .collect();
        self
    }

    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema {
            label_column: self.label_column.clone(),
            fields: self
                .fields
                .iter()
                .map(|f| FieldDef { name: f.name.clone(), kind: f.kind, vocab_size: f.tokens.len() + 1 })
                .collect(),
        }
    }

    /// Stable 64-bit digest of fields, kinds and token order.
    pub fn schema_hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("vocabulary serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn id(&self, field: usize, token: &str) -> u32 {
        self.lookup[field].get(token).copied().unwrap_or(0)
    }

    /// Encodes one row; unknown or missing tokens map to 0.
    pub fn encode(&self, row: &ParsedRow) -> Vec<u32> {
        row.tokens
            .iter()
            .enumerate()
            .map(|(f, t)| t.as_deref().map_or(0, |t| self.id(f, t)))
            .collect()
    }

    /// Checks that a dataset configuration names the same fields, in order.
    pub fn check_fields(&self, config: &DatasetConfig) -> Result<()> {
        let ours: Vec<(&str, FieldKind)> = self.fields.iter().map(|f| (f.name.as_str(), f.kind)).collect();
        let theirs: Vec<(&str, FieldKind)> = config.fields.iter().map(|f| (f.name.as_str(), f.kind)).collect();
        if ours != theirs {
            return Err(DlfError::config("configured fields differ from the vocabulary's fields"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        serde_json::to_writer(file, self).map_err(|e| DlfError::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = BufReader::new(File::open(path)?);
        let vocab: VocabMap = serde_json::from_reader(file).map_err(|e| DlfError::Format(format!("{}: {e}", path.display())))?;
        Ok(vocab.index())
    }
}

/// Counts tokens per field and keeps those seen at least `min_count` times.
/// Ids follow descending frequency, ties broken lexically.
pub fn build_vocab(rows: &[ParsedRow], config: &DatasetConfig) -> Result<VocabMap> {
    if config.min_count < 1 {
        return Err(DlfError::config("min_count must be at least 1"));
    }
    if config.fields.is_empty() {
        return Err(DlfError::config("no feature fields configured"));
    }
    if rows.is_empty() {
        return Err(DlfError::config("cannot build a vocabulary from zero rows"));
    }
    let n = config.fields.len();
    let mut counts: Vec<HashMap<&str, usize>> = vec![HashMap::new(); n];
    for row in rows {
        if row.tokens.len() != n {
            return Err(DlfError::Row {
                line: row.line,
                message: format!("expected {n} fields, found {}", row.tokens.len()),
            });
        }
        for (f, t) in row.tokens.iter().enumerate() {
            if let Some(t) = t {
                *counts[f].entry(t.as_str()).or_default() += 1;
            }
        }
    }
    let fields = config
        .fields
        .iter()
        .zip(counts)
        .map(|(spec, counts)| {
            let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= config.min_count).collect();
            kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
            FieldVocab { name: spec.name.clone(), kind: spec.kind, tokens: kept.into_iter().map(|(t, _)| t.to_string()).collect() }
        })
        .collect();
    let vocab = VocabMap { label_column: config.label.clone(), fields, lookup: Vec::new() }.index();
    vocab.schema().validate()?;
    Ok(vocab)
}

/// Encoded examples: row-major field ids plus binary labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedData {
    n_fields: usize,
    ids: Vec<u32>,
    labels: Vec<u8>,
}

impl EncodedData {
    pub fn new(n_fields: usize, ids: Vec<u32>, labels: Vec<u8>) -> Result<Self> {
        if n_fields == 0 || ids.len() != n_fields * labels.len() {
            return Err(DlfError::shape(format!(
                "{} ids do not form {} rows of {n_fields} fields",
                ids.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(DlfError::config("labels must be 0 or 1"));
        }
        Ok(EncodedData { n_fields, ids, labels })
    }

    pub fn encode(rows: &[ParsedRow], vocab: &VocabMap) -> Result<Self> {
        let n = vocab.fields.len();
        let mut ids = Vec::with_capacity(rows.len() * n);
        let mut labels = Vec::with_capacity(rows.len());
        for row in rows {
            let label = row.label.ok_or(DlfError::Row { line: row.line, message: "missing label".into() })?;
            ids.extend(vocab.encode(row));
            labels.push(label);
        }
        EncodedData::new(n, ids, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_fields(&self) -> usize {
        self.n_fields
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.n_fields..(i + 1) * self.n_fields]
    }

    pub fn slice(&self, range: Range<usize>) -> EncodedData {
        EncodedData {
            n_fields: self.n_fields,
            ids: self.ids[range.start * self.n_fields..range.end * self.n_fields].to_vec(),
            labels: self.labels[range].to_vec(),
        }
    }

    pub fn select(&self, rows: &[usize]) -> ExampleBatch {
        let mut ids = Vec::with_capacity(rows.len() * self.n_fields);
        for &r in rows {
            ids.extend_from_slice(self.row(r));
        }
        ExampleBatch { n_fields: self.n_fields, ids, labels: rows.iter().map(|&r| self.labels[r]).collect() }
    }

    /// Checks every id against its field's vocabulary size.
    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        if schema.n_fields() != self.n_fields {
            return Err(DlfError::shape(format!("data has {} fields, schema {}", self.n_fields, schema.n_fields())));
        }
        for (pos, &id) in self.ids.iter().enumerate() {
            let f = pos % self.n_fields;
            if id as usize >= schema.fields[f].vocab_size {
                return Err(DlfError::Index(format!("row {} field {f}: id {id} out of range", pos / self.n_fields)));
            }
        }
        Ok(())
    }
}

/// A batch of encoded examples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExampleBatch {
    pub n_fields: usize,
    pub ids: Vec<u32>,
    pub labels: Vec<u8>,
}

impl ExampleBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Consecutive sub-batches of at most `size` rows.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = ExampleBatch> + '_ {
        let size = size.max(1);
        self.labels.chunks(size).zip(self.ids.chunks(size * self.n_fields)).map(|(labels, ids)| ExampleBatch {
            n_fields: self.n_fields,
            ids: ids.to_vec(),
            labels: labels.to_vec(),
        })
    }
}

/// Row ranges of a 7:2:1 time-ordered split.
pub fn split_sizes(n: usize) -> Result<(Range<usize>, Range<usize>, Range<usize>)> {
    if n < 10 {
        return Err(DlfError::config(format!("{n} rows are too few for a 7:2:1 split")));
    }
    let train = n * 7 / 10;
    let valid = n * 2 / 10;
    Ok((0..train, train..train + valid, train + valid..n))
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: EncodedData,
    pub validation: EncodedData,
    pub test: EncodedData,
}

/// Splits rows in file order: first 70% train, next 20% validation, rest test.
pub fn time_split(data: &EncodedData) -> Result<Splits> {
    let (train, valid, test) = split_sizes(data.len())?;
    Ok(Splits { train: data.slice(train), validation: data.slice(valid), test: data.slice(test) })
}

/// Batches of `data` for one epoch. With `shuffle`, rows are permuted by a
/// stream keyed on `(seed, epoch)`; the last batch may be short.
pub fn batches(data: &EncodedData, batch_size: usize, shuffle: bool, seed: u64, epoch: u64) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(DlfError::config("batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    if shuffle {
        order.shuffle(&mut crate::rng::stream(seed, "shuffle", &[epoch]));
    }
    Ok(Batches { data, order, batch_size, pos: 0 })
}

pub struct Batches<'a> {
    data: &'a EncodedData,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = ExampleBatch;

    fn next(&mut self) -> Option<ExampleBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.data.select(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

const CACHE_MAGIC: &[u8; 4] = b"DLFD";
const CACHE_VERSION: u32 = 1;

/// Writes the encoded cache: magic, version, schema hash, row count, then all
/// ids (u32, row-major) followed by all labels (u8). Little-endian.
pub fn write_cache(path: &Path, data: &EncodedData, schema_hash: u64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&schema_hash.to_le_bytes())?;
    w.write_all(&(data.len() as u64).to_le_bytes())?;
    for id in &data.ids {
        w.write_all(&id.to_le_bytes())?;
    }
    w.write_all(&data.labels)?;
    w.flush()?;
    Ok(())
}

/// Reads a cache written by [`write_cache`]; `n_fields` comes from the schema.
pub fn read_cache(path: &Path, n_fields: usize, expected_hash: u64) -> Result<EncodedData> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let truncated = || DlfError::Format(format!("{}: truncated cache", path.display()));
    if bytes.len() < 24 {
        return Err(truncated());
    }
    if &bytes[..4] != CACHE_MAGIC {
        return Err(DlfError::Format(format!("{}: not an encoded cache (bad magic)", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CACHE_VERSION {
        return Err(DlfError::Format(format!("unsupported cache version {version}")));
    }
    let hash = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if hash != expected_hash {
        return Err(DlfError::SchemaMismatch { expected: expected_hash, found: hash });
    }
    let rows = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    let id_bytes = rows.checked_mul(n_fields).and_then(|v| v.checked_mul(4)).ok_or_else(truncated)?;
    let body = &bytes[24..];
    if body.len() != id_bytes + rows {
        return Err(truncated());
    }
    let ids = body[..id_bytes].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    EncodedData::new(n_fields, ids, body[id_bytes..].to_vec())
}
