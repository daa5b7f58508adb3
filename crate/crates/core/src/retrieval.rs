//! Global revision: a database of instance-normalized training windows,
//! exact top-K cosine retrieval, and softmax-weighted target aggregation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::WindowInstance;
use crate::error::{PirError, Result};
use crate::tensor::kernels::{gemm, softmax_row};
use crate::tensor::Tensor;

pub const DATABASE_VERSION: &str = "pir-db-1";

const STD_FLOOR: f64 = 1e-8;
const QUERY_BLOCK: usize = 128;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Each channel window is its own key and query.
    #[default]
    Channel,
    /// The flattened `N x L_in` window is one key.
    Instance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub k: usize,
    pub temperature: f64,
    pub granularity: Granularity,
    /// Map each retrieved target from its source window's scale to the query's.
    pub rescale_by_query_stats: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { k: 10, temperature: 1.0, granularity: Granularity::Channel, rescale_by_query_stats: false }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Instance normalization followed by scaling to unit L2 norm, so that cosine
/// similarity is a dot product. A constant window maps to the zero vector.
pub fn encode(window: &[f64]) -> Vec<f64> {
    let (mean, std) = mean_std(window);
    if !(std >= STD_FLOOR) {
        return vec![0.0; window.len()];
    }
    let z: Vec<f64> = window.iter().map(|v| (v - mean) / std).collect();
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    z.into_iter().map(|v| v / norm).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub instance_id: usize,
    /// `None` for whole-instance entries.
    pub channel: Option<usize>,
    /// Absolute row of the first target step.
    pub origin: usize,
    /// Mean and population std of the source input window.
    pub mean: f64,
    pub std: f64,
}

/// Keys exclude database entries whose windows overlap the query's window
/// `[origin - L_in, origin + L_out)` in the same channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Exclusion {
    pub origin: usize,
    pub channel: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalDatabase {
    pub granularity: Granularity,
    pub l_in: usize,
    pub l_out: usize,
    key_len: usize,
    value_len: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
    meta: Vec<EntryMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub indices: Vec<usize>,
    /// Cosine similarities, descending.
    pub similarities: Vec<f64>,
    /// `K x value_len` retrieved targets, in `indices` order.
    pub retrieved: Tensor,
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    version: String,
    granularity: Granularity,
    l_in: usize,
    l_out: usize,
    key_len: usize,
    value_len: usize,
    entries: Vec<EntryMeta>,
}

/// One entry per (training instance, channel) — or per instance in
/// [`Granularity::Instance`] mode. Only training windows should be passed.
pub fn build_database(train: &[WindowInstance], granularity: Granularity) -> Result<RetrievalDatabase> {
    let first = train.first().ok_or_else(|| PirError::invalid("cannot build a database from zero instances"))?;
    let (n, l_in, l_out) = (first.x.rows(), first.x.cols(), first.y.cols());
    let (key_len, value_len) = match granularity {
        Granularity::Channel => (l_in, l_out),
        Granularity::Instance => (n * l_in, n * l_out),
    };
    let mut db = RetrievalDatabase {
        granularity,
        l_in,
        l_out,
        key_len,
        value_len,
        keys: Vec::new(),
        values: Vec::new(),
        meta: Vec::new(),
    };
    for inst in train {
        if inst.x.shape() != first.x.shape() || inst.y.shape() != first.y.shape() {
            return Err(PirError::invalid(format!("instance {} has inconsistent shape", inst.id)));
        }
        match granularity {
            Granularity::Channel => {
                for c in 0..n {
                    db.push(inst.x.row(c), inst.y.row(c), inst.id, Some(c), inst.origin);
                }
            }
            Granularity::Instance => db.push(inst.x.data(), inst.y.data(), inst.id, None, inst.origin),
        }
    }
    Ok(db)
}

impl RetrievalDatabase {
    fn push(&mut self, x: &[f64], y: &[f64], instance_id: usize, channel: Option<usize>, origin: usize) {
        let (mean, std) = mean_std(x);
        self.keys.extend(encode(x));
        self.values.extend_from_slice(y);
        self.meta.push(EntryMeta { instance_id, channel, origin, mean, std });
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn key_len(&self) -> usize {
        self.key_len
    }

    pub fn key(&self, i: usize) -> &[f64] {
        &self.keys[i * self.key_len..(i + 1) * self.key_len]
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.value_len..(i + 1) * self.value_len]
    }

    pub fn meta(&self) -> &[EntryMeta] {
        &self.meta
    }

    fn excluded(&self, entry: &EntryMeta, ex: &Exclusion) -> bool {
        entry.channel == ex.channel && entry.origin.abs_diff(ex.origin) < self.l_in + self.l_out
    }

    /// Exact top-`k` for one raw (un-encoded) query window.
    pub fn retrieve(&self, query: &[f64], k: usize, exclude: Option<Exclusion>) -> Result<RetrievalResult> {
        Ok(self.retrieve_batch(&[(query, exclude)], k)?.pop().expect("one query"))
    }

    /// Exact top-`k` for many queries. Scores are computed blockwise as one
    /// matrix product per block; selection breaks ties by lower index.
    pub fn retrieve_batch(
        &self,
        queries: &[(&[f64], Option<Exclusion>)],
        k: usize,
    ) -> Result<Vec<RetrievalResult>> {
        if k == 0 {
            return Err(PirError::invalid("K must be at least 1"));
        }
        let (m, d) = (self.len(), self.key_len);
        let mut out = Vec::with_capacity(queries.len());
        let mut scores = vec![0.0; QUERY_BLOCK.min(queries.len()) * m];
        for block in queries.chunks(QUERY_BLOCK) {
            let mut q = Vec::with_capacity(block.len() * d);
            for (raw, _) in block {
                if raw.len() != d {
                    return Err(PirError::invalid(format!("query length {} != key length {d}", raw.len())));
                }
                q.extend(encode(raw));
            }
            let s = &mut scores[..block.len() * m];
            gemm(block.len(), d, m, &q, false, &self.keys, true, s, false);
            for (b, (_, ex)) in block.iter().enumerate() {
                out.push(self.select(&s[b * m..(b + 1) * m], k, ex.as_ref())?);
            }
        }
        Ok(out)
    }

    fn select(&self, scores: &[f64], k: usize, ex: Option<&Exclusion>) -> Result<RetrievalResult> {
        let mut top: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        let mut eligible = 0usize;
        for (j, &s) in scores.iter().enumerate() {
            if ex.is_some_and(|ex| self.excluded(&self.meta[j], ex)) {
                continue;
            }
            eligible += 1;
            // entries arrive in index order, so equal scores never displace
            if top.len() == k && s <= top[k - 1].0 {
                continue;
            }
            let pos = top.partition_point(|&(t, _)| t >= s);
            top.insert(pos, (s, j));
            top.truncate(k);
        }
        if k > eligible {
            return Err(PirError::invalid(format!("K = {k} exceeds the {eligible} eligible database entries")));
        }
        let mut retrieved = Vec::with_capacity(k * self.value_len);
        for &(_, j) in &top {
            retrieved.extend_from_slice(self.value(j));
        }
        Ok(RetrievalResult {
            indices: top.iter().map(|t| t.1).collect(),
            similarities: top.iter().map(|t| t.0.clamp(-1.0, 1.0)).collect(),
            retrieved: Tensor::matrix(k, self.value_len, retrieved)?,
        })
    }

    /// Writes `keys.csv`, `values.csv`, and `meta.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_matrix(&dir.join("keys.csv"), &self.keys, self.key_len)?;
        write_matrix(&dir.join("values.csv"), &self.values, self.value_len)?;
        let meta = MetaFile {
            version: DATABASE_VERSION.into(),
            granularity: self.granularity,
            l_in: self.l_in,
            l_out: self.l_out,
            key_len: self.key_len,
            value_len: self.value_len,
            entries: self.meta.clone(),
        };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: MetaFile = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        if meta.version != DATABASE_VERSION {
            return Err(PirError::invalid(format!(
                "database version {} is not {DATABASE_VERSION}",
                meta.version
            )));
        }
        let m = meta.entries.len();
        let keys = read_matrix(&dir.join("keys.csv"), meta.key_len)?;
        let values = read_matrix(&dir.join("values.csv"), meta.value_len)?;
        if keys.len() != m * meta.key_len || values.len() != m * meta.value_len {
            return Err(PirError::invalid("database files disagree on the number of entries"));
        }
        Ok(RetrievalDatabase {
            granularity: meta.granularity,
            l_in: meta.l_in,
            l_out: meta.l_out,
            key_len: meta.key_len,
            value_len: meta.value_len,
            keys,
            values,
            meta: meta.entries,
        })
    }

    /// SHA-256 over the exact contents; stored in checkpoints to detect a stale database.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(DATABASE_VERSION.as_bytes());
        h.update(serde_json::to_vec(&self.granularity).expect("serializable"));
        for v in [self.l_in, self.l_out, self.key_len, self.value_len, self.len()] {
            h.update((v as u64).to_le_bytes());
        }
        for v in self.keys.iter().chain(&self.values) {
            h.update(v.to_bits().to_le_bytes());
        }
        for e in &self.meta {
            h.update((e.instance_id as u64).to_le_bytes());
            h.update(e.channel.map_or(u64::MAX, |c| c as u64).to_le_bytes());
            h.update((e.origin as u64).to_le_bytes());
            h.update(e.mean.to_bits().to_le_bytes());
            h.update(e.std.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn write_matrix(path: &Path, data: &[f64], cols: usize) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in data.chunks(cols.max(1)) {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn read_matrix(path: &Path, cols: usize) -> Result<Vec<f64>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != cols {
            return Err(PirError::Ingest { row: i + 1, message: format!("expected {cols} values in {}", path.display()) });
        }
        for cell in rec.iter() {
            out.push(cell.parse().map_err(|_| PirError::Ingest {
                row: i + 1,
                message: format!("bad number `{cell}` in {}", path.display()),
            })?);
        }
    }
    Ok(out)
}

/// `p = softmax(w / temperature)`; `y_global = Σ_k p_k · retrieved_k`.
pub fn global_revise(result: &RetrievalResult, temperature: f64) -> (Vec<f64>, Vec<f64>) {
    let scaled: Vec<f64> = result.similarities.iter().map(|w| w / temperature).collect();
    let mut p = vec![0.0; scaled.len()];
    softmax_row(&scaled, &mut p);
    let len = result.retrieved.cols();
    let mut y = vec![0.0; len];
    for (k, pk) in p.iter().enumerate() {
        for (yt, r) in y.iter_mut().zip(result.retrieved.row(k)) {
            *yt += pk * r;
        }
    }
    (y, p)
}

/// Retrieval output fed to the model for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalContext {
    /// `N x L_out`.
    pub y_global: Tensor,
    /// `N x K` similarity vectors, descending per row.
    pub w: Tensor,
}

/// Runs retrieval for every instance. With `exclude_overlap`, entries that
/// overlap the query window are skipped (used for training-split queries).
pub fn global_contexts(
    db: &RetrievalDatabase,
    instances: &[WindowInstance],
    config: &RetrievalConfig,
    exclude_overlap: bool,
) -> Result<Vec<GlobalContext>> {
    if !(config.temperature > 0.0) {
        return Err(PirError::invalid("retrieval temperature must be positive"));
    }
    let k = config.k;
    let Some(first) = instances.first() else { return Ok(Vec::new()) };
    let (n, l_out) = (first.y.rows(), first.y.cols());
    let rows_per_instance = match db.granularity {
        Granularity::Channel => n,
        Granularity::Instance => 1,
    };
    let mut queries: Vec<(&[f64], Option<Exclusion>)> = Vec::with_capacity(instances.len() * rows_per_instance);
    for inst in instances {
        match db.granularity {
            Granularity::Channel => {
                for c in 0..n {
                    let ex = exclude_overlap.then_some(Exclusion { origin: inst.origin, channel: Some(c) });
                    queries.push((inst.x.row(c), ex));
                }
            }
            Granularity::Instance => {
                let ex = exclude_overlap.then_some(Exclusion { origin: inst.origin, channel: None });
                queries.push((inst.x.data(), ex));
            }
        }
    }
    let results = db.retrieve_batch(&queries, k)?;

    let mut out = Vec::with_capacity(instances.len());
    for (i, chunk) in results.chunks(rows_per_instance).enumerate() {
        let mut y = Vec::with_capacity(n * l_out);
        let mut w = Vec::with_capacity(n * k);
        for (r, res) in chunk.iter().enumerate() {
            let res = if config.rescale_by_query_stats {
                rescale(db, res, queries[i * rows_per_instance + r].0)
            } else {
                res.clone()
            };
            let (yg, _) = global_revise(&res, config.temperature);
            y.extend(yg);
            w.extend_from_slice(&res.similarities);
        }
        let w = match db.granularity {
            Granularity::Channel => Tensor::matrix(n, k, w)?,
            Granularity::Instance => Tensor::matrix(n, k, (0..n).flat_map(|_| w.iter().copied()).collect())?,
        };
        out.push(GlobalContext { y_global: Tensor::matrix(n, l_out, y)?, w });
    }
    Ok(out)
}

/// Maps each retrieved target from its source window's level and scale onto
/// the query window's. Instance entries use whole-window statistics.
fn rescale(db: &RetrievalDatabase, res: &RetrievalResult, query: &[f64]) -> RetrievalResult {
    let (qm, qs) = mean_std(query);
    let qs = if qs < STD_FLOOR { 1.0 } else { qs };
    let mut out = res.clone();
    for (k, &j) in res.indices.iter().enumerate() {
        let e = db.meta[j];
        let es = if e.std < STD_FLOOR { 1.0 } else { e.std };
        for v in out.retrieved.row_mut(k) {
            *v = (*v - e.mean) / es * qs + qm;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_examples() {
        let k = encode(&[1.0, 2.0, 3.0]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        for (a, b) in k.iter().zip([-h, 0.0, h]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(encode(&[4.0; 5]), vec![0.0; 5]);
        let x = [0.3, -1.0, 2.5, 0.0];
        let y: Vec<f64> = x.iter().map(|v| 3.5 * v - 7.0).collect();
        for (a, b) in encode(&x).iter().zip(encode(&y)) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_weights() {
        let res = RetrievalResult {
            indices: vec![0, 1, 2],
            similarities: vec![0.5, 0.5, 0.5],
            retrieved: Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 9.0]]).unwrap(),
        };
        let (y, p) = global_revise(&res, 1.0);
        for pk in p {
            assert!((pk - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((y[0] - 3.0).abs() < 1e-12 && (y[1] - 5.0).abs() < 1e-12);
    }
}
