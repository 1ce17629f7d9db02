//! Flat `key = value` text files for experiment configs and model files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique.
//!
//! Model files use `dim`, `f.i`, `L.i.j`, `Q.i.j` (missing entries are zero),
//! and optionally a measurement as `h.i` expressions or a JSON matrix `H`,
//! with noise `V` as a JSON matrix.

use std::collections::BTreeMap;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{MeasModel, SdeModel};
use crate::symexpr::{Expr, ExprMatrix};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", n + 1)));
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::Config(format!("cannot parse value '{v}' of key '{key}'")))
            })
            .transpose()
    }

    pub fn parsed_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<T>()
                            .map_err(|_| Error::Config(format!("cannot parse list item '{s}' of key '{key}'")))
                    })
                    .collect()
            })
            .transpose()
    }
}

/// Parses a JSON array of arrays into a matrix.
pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = serde_json::from_str(text)?;
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config(format!("'{text}' is not a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

#[derive(Debug, Clone)]
pub struct ModelFile {
    pub model: SdeModel,
    pub measurement: Option<MeasModel>,
}

fn index_of(key: &str, prefix: &str) -> Option<Vec<usize>> {
    let rest = key.strip_prefix(prefix)?;
    rest.split('.').map(|p| p.parse().ok()).collect()
}

pub fn parse_model_file(text: &str) -> Result<ModelFile> {
    let kv = KeyValues::parse(text)?;
    let dim: usize = kv
        .parsed("dim")?
        .ok_or_else(|| Error::Config("model file needs 'dim'".into()))?;
    if dim == 0 {
        return Err(Error::Config("dim must be positive".into()));
    }
    let mut drift = vec![None; dim];
    let mut l_entries = Vec::new();
    let mut q_entries = Vec::new();
    let mut h_entries = Vec::new();
    for (k, v) in kv.iter() {
        let bad_index = || Error::Config(format!("bad index in key '{k}'"));
        if let Some(idx) = index_of(k, "f.") {
            let i = *idx.first().filter(|&&i| idx.len() == 1 && i < dim).ok_or_else(bad_index)?;
            drift[i] = Some(Expr::parse_with_dim(v, dim)?);
        } else if let Some(idx) = index_of(k, "L.") {
            if idx.len() != 2 || idx[0] >= dim {
                return Err(bad_index());
            }
            l_entries.push((idx[0], idx[1], Expr::parse_with_dim(v, dim)?));
        } else if let Some(idx) = index_of(k, "Q.") {
            if idx.len() != 2 {
                return Err(bad_index());
            }
            let q: f64 = v.parse().map_err(|_| Error::Config(format!("'{k}' must be a number")))?;
            q_entries.push((idx[0], idx[1], q));
        } else if let Some(idx) = index_of(k, "h.") {
            if idx.len() != 1 {
                return Err(bad_index());
            }
            h_entries.push((idx[0], Expr::parse_with_dim(v, dim)?));
        } else if !matches!(k, "dim" | "H" | "V") {
            return Err(Error::Config(format!("unknown model key '{k}'")));
        }
    }
    let drift = drift
        .into_iter()
        .enumerate()
        .map(|(i, f)| f.ok_or_else(|| Error::Config(format!("missing drift entry f.{i}"))))
        .collect::<Result<Vec<_>>>()?;
    let s = l_entries
        .iter()
        .map(|e| e.1 + 1)
        .chain(q_entries.iter().flat_map(|e| [e.0 + 1, e.1 + 1]))
        .max()
        .unwrap_or(0);
    let mut l = ExprMatrix::zeros(dim, s);
    for (i, j, e) in l_entries {
        l.set(i, j, e);
    }
    let mut q = DMatrix::zeros(s, s);
    let explicit_q = !q_entries.is_empty();
    for (i, j, v) in q_entries {
        q[(i, j)] = v;
        q[(j, i)] = v;
    }
    if !explicit_q {
        q = DMatrix::identity(s, s);
    }
    let model = SdeModel::new(drift, l, q)?;

    let measurement = match (kv.get("H"), h_entries.is_empty(), kv.get("V")) {
        (None, true, None) => None,
        (_, _, None) => return Err(Error::Config("measurement needs 'V'".into())),
        (Some(_), false, _) => return Err(Error::Config("give either 'H' or 'h.i', not both".into())),
        (Some(h), true, Some(v)) => Some(MeasModel::linear(parse_matrix(h)?, parse_matrix(v)?)?),
        (None, false, Some(v)) => {
            h_entries.sort_by_key(|e| e.0);
            if h_entries.iter().enumerate().any(|(i, e)| e.0 != i) {
                return Err(Error::Config("measurement entries h.i must be numbered from 0 without gaps".into()));
            }
            let h = h_entries.into_iter().map(|e| e.1).collect();
            Some(MeasModel::nonlinear(dim, h, parse_matrix(v)?)?)
        }
        (None, true, Some(_)) => return Err(Error::Config("'V' given without a measurement function".into())),
    };
    Ok(ModelFile { model, measurement })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_values() {
        let kv = KeyValues::parse("# comment\n a = 1 \n\nlist = 1, 2,3\nname=tanh").unwrap();
        assert_eq!(kv.parsed::<f64>("a").unwrap(), Some(1.0));
        assert_eq!(kv.list::<u32>("list").unwrap(), Some(vec![1, 2, 3]));
        assert_eq!(kv.get("name"), Some("tanh"));
        assert!(kv.parsed::<f64>("name").is_err());
        assert!(KeyValues::parse("a = 1\na = 2").is_err());
        assert!(KeyValues::parse("novalue").is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let text = "dim = 2\nf.0 = x1\nf.1 = -sin(x0)\nL.1.0 = 0.5\nh.0 = sin(x0)\nV = [[0.01]]\n";
        let mf = parse_model_file(text).unwrap();
        assert_eq!(mf.model.dim(), 2);
        assert_eq!(mf.model.noise_dim(), 1);
        let g = mf.model.gamma_at(&[0.0, 0.0], 0.0).unwrap();
        assert!((g[(1, 1)] - 0.25).abs() < 1e-15);
        let meas = mf.measurement.unwrap();
        assert_eq!(meas.meas_dim(), 1);

        let linear = "dim = 1\nf.0 = tanh(x0)\nL.0.0 = 1\nQ.0.0 = 2\nH = [[1.0]]\nV = [[1.0]]";
        let mf = parse_model_file(linear).unwrap();
        assert_eq!(mf.model.diffusion()[(0, 0)], 2.0);
        assert!(matches!(mf.measurement.unwrap().observation(), crate::model::Observation::Linear(_)));
    }

    #[test]
    fn model_file_errors() {
        assert!(parse_model_file("f.0 = x0").is_err());
        assert!(parse_model_file("dim = 2\nf.0 = x0").is_err());
        assert!(parse_model_file("dim = 1\nf.0 = x3").is_err());
        assert!(parse_model_file("dim = 1\nf.0 = x0\nh.0 = x0").is_err());
        assert!(parse_model_file("dim = 1\nf.0 = x0\nbogus = 1").is_err());
    }
}
