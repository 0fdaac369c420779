//! CSV ingestion, label binarization, train-split vocabularies, numeric
//! log-discretization, deterministic 8:1:1 splitting, and batching.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Categorical,
    Numeric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    /// 1..5 star rating: {1,2} -> 0, {4,5} -> 1, 3 dropped.
    Rating,
    /// already-binary 0/1 label
    Binary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaField {
    pub name: String,
    pub kind: FieldKind,
}

/// Ordered feature fields plus the label column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub name: String,
    pub fields: Vec<SchemaField>,
    pub label: String,
    pub label_kind: LabelKind,
}

impl DatasetSchema {
    pub fn m(&self) -> usize {
        self.fields.len()
    }

    /// MovieLens-1M: six categorical fields, star-rating label.
    pub fn ml1m() -> Self {
        let fields = ["user_id", "item_id", "gender", "age", "occupation", "genre"]
            .iter()
            .map(|n| SchemaField {
                name: n.to_string(),
                kind: FieldKind::Categorical,
            })
            .collect();
        DatasetSchema {
            name: "ml1m".to_string(),
            fields,
            label: "rating".to_string(),
            label_kind: LabelKind::Rating,
        }
    }

    /// Douban Movie: user and item ids only, star-rating label.
    pub fn douban() -> Self {
        let fields = ["user_id", "item_id"]
            .iter()
            .map(|n| SchemaField {
                name: n.to_string(),
                kind: FieldKind::Categorical,
            })
            .collect();
        DatasetSchema {
            name: "douban".to_string(),
            fields,
            label: "rating".to_string(),
            label_kind: LabelKind::Rating,
        }
    }

    /// Criteo-style: 13 numeric + 26 categorical fields, binary label.
    pub fn criteo() -> Self {
        let mut fields = Vec::with_capacity(39);
        for i in 1..=13 {
            fields.push(SchemaField {
                name: format!("I{i}"),
                kind: FieldKind::Numeric,
            });
        }
        for i in 1..=26 {
            fields.push(SchemaField {
                name: format!("C{i}"),
                kind: FieldKind::Categorical,
            });
        }
        DatasetSchema {
            name: "criteo".to_string(),
            fields,
            label: "label".to_string(),
            label_kind: LabelKind::Binary,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "ml1m" => Ok(Self::ml1m()),
            "douban" => Ok(Self::douban()),
            "criteo" => Ok(Self::criteo()),
            other => Err(Error::config(format!(
                "unknown schema '{other}' (expected ml1m, douban, or criteo)"
            ))),
        }
    }
}

/// One raw row: field values in schema order plus the label string.
pub type RawRow = Vec<String>;

/// Streaming CSV parse; malformed rows are counted and skipped, with more
/// than 1% malformed treated as a broken file.
pub fn load_csv(path: &Path, schema: &DatasetSchema) -> Result<Vec<RawRow>> {
    if !path.exists() {
        return Err(Error::data(format!("dataset file not found: {}", path.display())));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;

    let want = schema.m() + 1;
    let mut rows: Vec<RawRow> = Vec::new();
    let mut malformed = 0usize;
    let mut total = 0usize;

    // column mapping: None = positional (schema order then label)
    let mut mapping: Option<Vec<usize>> = None;
    let mut first = true;

    for record in reader.records() {
        let record = record?;
        if first {
            first = false;
            let values: Vec<&str> = record.iter().map(|s| s.trim()).collect();
            let mut map = Vec::with_capacity(want);
            let mut ok = true;
            for field in schema.fields.iter().map(|f| f.name.as_str()).chain([schema.label.as_str()]) {
                match values.iter().position(|&v| v == field) {
                    Some(p) => map.push(p),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                mapping = Some(map);
                continue; // header consumed
            }
            // headerless: verify no required column is silently absent
            if record.len() < want {
                return Err(Error::data(format!(
                    "first row has {} columns but schema '{}' needs {} (fields + label)",
                    record.len(),
                    schema.name,
                    want
                )));
            }
        }
        total += 1;
        let row: Option<RawRow> = match &mapping {
            Some(map) => {
                let vals: Vec<&str> = record.iter().collect();
                map.iter()
                    .map(|&i| vals.get(i).map(|s| s.trim().to_string()))
                    .collect()
            }
            None => {
                if record.len() == want {
                    Some(record.iter().map(|s| s.trim().to_string()).collect())
                } else {
                    None
                }
            }
        };
        match row {
            Some(r) => rows.push(r),
            None => malformed += 1,
        }
    }

    if rows.is_empty() {
        return Err(Error::data(format!("no records in {}", path.display())));
    }
    if malformed * 100 > total {
        return Err(Error::data(format!(
            "{malformed} of {total} rows malformed (>1%) in {}",
            path.display()
        )));
    }
    Ok(rows)
}

/// Star-rating binarization: 1,2 -> 0; 4,5 -> 1; 3 -> dropped (None).
pub fn binarize_label(rating: i64) -> Result<Option<u8>> {
    match rating {
        1 | 2 => Ok(Some(0)),
        3 => Ok(None),
        4 | 5 => Ok(Some(1)),
        other => Err(Error::data(format!("rating {other} outside 1..=5"))),
    }
}

/// Logarithmic discretization for numeric fields: missing -> 0, negative -> 1,
/// otherwise `2 + floor(ln(1 + v))`.
pub fn log_discretize(v: Option<f64>) -> u32 {
    match v {
        None => 0,
        Some(v) if v < 0.0 => 1,
        Some(v) => 2 + (1.0 + v).ln().floor() as u32,
    }
}

/// Deterministic 8:1:1 index partition.
pub fn split_811(n: usize, seed: u64) -> Result<(Vec<u32>, Vec<u32>, Vec<u32>)> {
    if n < 10 {
        return Err(Error::data(format!("need at least 10 records to split, got {n}")));
    }
    let mut idx: Vec<u32> = (0..n as u32).collect();
    let mut rng = crate::rng::seeded(seed, 1);
    crate::rng::shuffle(&mut rng, &mut idx);
    let n_train = (n as f64 * 0.8).floor() as usize;
    let n_val = (n as f64 * 0.1).floor() as usize;
    let val_end = n_train + n_val;
    Ok((
        idx[..n_train].to_vec(),
        idx[n_train..val_end].to_vec(),
        idx[val_end..].to_vec(),
    ))
}

/// Per-field vocabulary built from training rows only; index 0 is reserved
/// for out-of-vocabulary values.
#[derive(Debug, Clone, Default)]
pub struct Vocab {
    map: HashMap<String, u32>,
    values: Vec<String>,
}

impl Vocab {
    pub fn new() -> Self {
        Vocab {
            map: HashMap::new(),
            values: vec!["<oov>".to_string()],
        }
    }

    pub fn insert(&mut self, value: &str) -> u32 {
        if let Some(&i) = self.map.get(value) {
            return i;
        }
        let i = self.values.len() as u32;
        self.map.insert(value.to_string(), i);
        self.values.push(value.to_string());
        i
    }

    pub fn get(&self, value: &str) -> u32 {
        self.map.get(value).copied().unwrap_or(0)
    }

    /// Size including the OOV slot.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.len() <= 1
    }
}

/// Fully encoded dataset: integer records, binary labels, split indices.
#[derive(Debug, Clone)]
pub struct EncodedDataset {
    pub schema: DatasetSchema,
    pub seed: u64,
    /// N x m, row-major
    pub records: Vec<u32>,
    pub labels: Vec<u8>,
    pub train_idx: Vec<u32>,
    pub val_idx: Vec<u32>,
    pub test_idx: Vec<u32>,
    pub vocabs: Vec<Vocab>,
}

impl EncodedDataset {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn m(&self) -> usize {
        self.schema.m()
    }

    #[inline]
    pub fn record(&self, i: u32) -> &[u32] {
        let m = self.m();
        let i = i as usize;
        &self.records[i * m..(i + 1) * m]
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.vocabs.iter().map(|v| v.len()).collect()
    }

    /// Encode raw rows: binarize labels (dropping neutral ratings), split
    /// 8:1:1, build vocabularies from the train split, then index every row.
    pub fn encode(rows: &[RawRow], schema: &DatasetSchema, seed: u64) -> Result<Self> {
        let m = schema.m();

        // labels first; rows dropped here never reach the split
        let mut kept: Vec<(&RawRow, u8)> = Vec::with_capacity(rows.len());
        for row in rows {
            let label_str = &row[m];
            let label = match schema.label_kind {
                LabelKind::Rating => {
                    let rating: i64 = label_str.parse().map_err(|_| {
                        Error::data(format!("unparseable rating '{label_str}'"))
                    })?;
                    binarize_label(rating)?
                }
                LabelKind::Binary => match label_str.as_str() {
                    "0" => Some(0),
                    "1" => Some(1),
                    other => {
                        return Err(Error::data(format!("unparseable binary label '{other}'")))
                    }
                },
            };
            if let Some(y) = label {
                kept.push((row, y));
            }
        }

        let n = kept.len();
        let (train_idx, val_idx, test_idx) = split_811(n, seed)?;

        // bucketize numerics once so vocab keys are uniform strings
        let numeric: Vec<bool> = schema.fields.iter().map(|f| f.kind == FieldKind::Numeric).collect();
        let field_key = |row: &RawRow, f: usize| -> String {
            if numeric[f] {
                let v = row[f].trim();
                let parsed = if v.is_empty() { None } else { v.parse::<f64>().ok() };
                log_discretize(parsed).to_string()
            } else {
                row[f].clone()
            }
        };

        // vocab from train rows only, first-occurrence order over ascending
        // train positions (deterministic given the split)
        let mut train_sorted = train_idx.clone();
        train_sorted.sort_unstable();
        let mut vocabs: Vec<Vocab> = (0..m).map(|_| Vocab::new()).collect();
        for &i in &train_sorted {
            let (row, _) = kept[i as usize];
            for f in 0..m {
                vocabs[f].insert(&field_key(row, f));
            }
        }

        let mut records = Vec::with_capacity(n * m);
        let mut labels = Vec::with_capacity(n);
        for (row, y) in &kept {
            for f in 0..m {
                records.push(vocabs[f].get(&field_key(row, f)));
            }
            labels.push(*y);
        }

        Ok(EncodedDataset {
            schema: schema.clone(),
            seed,
            records,
            labels,
            train_idx,
            val_idx,
            test_idx,
            vocabs,
        })
    }

    pub fn load(path: &Path, schema: &DatasetSchema, seed: u64) -> Result<Self> {
        let rows = load_csv(path, schema)?;
        Self::encode(&rows, schema, seed)
    }

    /// Per-epoch batch order: a fresh shuffle keyed by `(seed, epoch)`.
    pub fn epoch_order(&self, split: &[u32], seed: u64, epoch: u64) -> Vec<u32> {
        let mut order = split.to_vec();
        let mut rng = crate::rng::seeded(seed, 1000 + epoch);
        crate::rng::shuffle(&mut rng, &mut order);
        order
    }

    /// Writes the encoded cache: a JSON manifest plus little-endian 32-bit
    /// binary blobs for records, labels, and splits.
    pub fn save_cache(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = CacheManifest {
            schema: self.schema.clone(),
            seed: self.seed,
            n: self.n(),
            vocab_sizes: self.vocab_sizes(),
            split_sizes: [self.train_idx.len(), self.val_idx.len(), self.test_idx.len()],
            records_file: "records.bin".to_string(),
            labels_file: "labels.bin".to_string(),
            splits_file: "splits.bin".to_string(),
        };
        let mut mf = std::fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(&mut mf, &manifest)?;
        mf.write_all(b"\n")?;

        write_u32_blob(&dir.join("records.bin"), &self.records)?;
        let labels_u32: Vec<u32> = self.labels.iter().map(|&l| l as u32).collect();
        write_u32_blob(&dir.join("labels.bin"), &labels_u32)?;
        let mut splits = Vec::with_capacity(self.n());
        splits.extend_from_slice(&self.train_idx);
        splits.extend_from_slice(&self.val_idx);
        splits.extend_from_slice(&self.test_idx);
        write_u32_blob(&dir.join("splits.bin"), &splits)?;
        Ok(())
    }

    /// Loads an encoded cache. Vocabulary string tables are not part of the
    /// cache; the result can train and evaluate but not encode new rows.
    pub fn load_cache(dir: &Path) -> Result<Self> {
        let mf = std::fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: CacheManifest = serde_json::from_str(&mf)?;
        let records = read_u32_blob(&dir.join(&manifest.records_file))?;
        let labels_u32 = read_u32_blob(&dir.join(&manifest.labels_file))?;
        let splits = read_u32_blob(&dir.join(&manifest.splits_file))?;
        let [n_train, n_val, n_test] = manifest.split_sizes;
        if records.len() != manifest.n * manifest.schema.m()
            || labels_u32.len() != manifest.n
            || splits.len() != n_train + n_val + n_test
        {
            return Err(Error::data("cache blobs inconsistent with manifest".to_string()));
        }
        let mut vocabs: Vec<Vocab> = Vec::new();
        for &size in &manifest.vocab_sizes {
            let mut v = Vocab::new();
            for i in 1..size {
                v.insert(&format!("<cached:{i}>"));
            }
            vocabs.push(v);
        }
        Ok(EncodedDataset {
            schema: manifest.schema,
            seed: manifest.seed,
            records,
            labels: labels_u32.iter().map(|&l| l as u8).collect(),
            train_idx: splits[..n_train].to_vec(),
            val_idx: splits[n_train..n_train + n_val].to_vec(),
            test_idx: splits[n_train + n_val..].to_vec(),
            vocabs,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheManifest {
    schema: DatasetSchema,
    seed: u64,
    n: usize,
    vocab_sizes: Vec<usize>,
    split_sizes: [usize; 3],
    records_file: String,
    labels_file: String,
    splits_file: String,
}

fn write_u32_blob(path: &Path, data: &[u32]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for &v in data {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

fn read_u32_blob(path: &Path) -> Result<Vec<u32>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() % 4 != 0 {
        return Err(Error::data(format!("blob {} not a multiple of 4 bytes", path.display())));
    }
    Ok(buf
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
