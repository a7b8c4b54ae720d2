//! Feature tables and their canonical text format.
//!
//! One record per line: the id, a single space, then the vector as
//! space-separated decimals. Blank lines and lines starting with `#` are
//! ignored.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Mat;

/// Dense vectors of a common dimension keyed by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable<K: Ord> {
    pub dim: usize,
    pub vectors: BTreeMap<K, Vec<f64>>,
}

impl<K: Ord> FeatureTable<K> {
    pub fn new(dim: usize) -> Self {
        FeatureTable {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: &K) -> Option<&[f64]> {
        self.vectors.get(id).map(Vec::as_slice)
    }

    pub fn insert(&mut self, id: K, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimMismatch {
                context: "feature table insert",
                expected: self.dim,
                found: vector.len(),
            });
        }
        if let Some(bad) = vector.iter().find(|x| !x.is_finite()) {
            return Err(Error::Config(format!("non-finite feature value {bad}")));
        }
        self.vectors.insert(id, vector);
        Ok(())
    }

    /// Stack the vectors for `ids` (in that order) into a matrix.
    pub fn matrix_for<'a>(&self, ids: impl IntoIterator<Item = &'a K>) -> Result<Mat>
    where
        K: 'a + Display,
    {
        let mut data = Vec::new();
        let mut rows = 0;
        for id in ids {
            let v = self.get(id).ok_or_else(|| Error::Lookup {
                kind: "feature id",
                id: id.to_string(),
            })?;
            data.extend_from_slice(v);
            rows += 1;
        }
        Ok(Mat::from_shape_vec((rows, self.dim), data).expect("uniform feature dim"))
    }
}

impl<K: Ord + Display> FeatureTable<K> {
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (id, v) in &self.vectors {
            write!(w, "{id}").map_err(|e| Error::io(path, e))?;
            for x in v {
                write!(w, " {x}").map_err(|e| Error::io(path, e))?;
            }
            writeln!(w).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Parse a feature table. With `expected_dim`, the file's dimension must match.
pub fn load_feature_table<K>(path: &Path, expected_dim: Option<usize>) -> Result<FeatureTable<K>>
where
    K: Ord + FromStr,
{
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_feature_table(&text, path, expected_dim)
}

pub(crate) fn parse_feature_table<K>(
    text: &str,
    path: &Path,
    expected_dim: Option<usize>,
) -> Result<FeatureTable<K>>
where
    K: Ord + FromStr,
{
    let mut dim = expected_dim;
    let mut vectors = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(' ');
        let raw_id = fields.next().unwrap_or_default();
        let id = raw_id
            .parse::<K>()
            .map_err(|_| Error::parse(path, lineno, format!("invalid id {raw_id:?}")))?;
        let mut v = Vec::new();
        for f in fields {
            let x: f64 = f.parse().map_err(|_| {
                Error::parse(path, lineno, format!("row {raw_id}: invalid number {f:?}"))
            })?;
            if !x.is_finite() {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("row {raw_id}: non-finite value {f}"),
                ));
            }
            v.push(x);
        }
        match dim {
            None if v.is_empty() => {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("row {raw_id}: empty vector"),
                ));
            }
            None => dim = Some(v.len()),
            Some(d) if d != v.len() => {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("row {raw_id}: expected {d} values, found {}", v.len()),
                ));
            }
            Some(_) => {}
        }
        if vectors.insert(id, v).is_some() {
            return Err(Error::parse(path, lineno, format!("duplicate id {raw_id}")));
        }
    }
    Ok(FeatureTable {
        dim: dim.unwrap_or(0),
        vectors,
    })
}

/// Standard-normal vectors, deterministic in `rng_seed`.
pub fn random_features<K: Ord + Clone>(
    ids: &[K],
    dim: usize,
    rng_seed: u64,
) -> Result<FeatureTable<K>> {
    if dim == 0 {
        return Err(Error::Config(
            "random_features: dim must be positive".into(),
        ));
    }
    let mut rng = crate::rng::stream(rng_seed, "random-features", &[]);
    let mut table = FeatureTable::new(dim);
    for id in ids {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        table.vectors.insert(id.clone(), v);
    }
    Ok(table)
}
