//! Datasets and their JSON-lines encoding: one header object with `family`,
//! `D`, `N` and `seed`, then one `{"x": [...]}` object per row.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::artifact::to_json_line;
use crate::error::{contract, domain, Result};

use super::ModelFamily;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    family: ModelFamily,
    dim: usize,
    seed: Option<u64>,
    rows: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    family: ModelFamily,
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "N")]
    n: usize,
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct Row {
    x: Vec<f64>,
}

impl Dataset {
    pub fn new(family: ModelFamily, rows: Vec<Vec<f64>>, seed: Option<u64>) -> Result<Self> {
        if rows.is_empty() {
            return contract("dataset has no rows");
        }
        let dim = rows[0].len();
        if dim == 0 {
            return contract("dataset rows are empty");
        }
        for (n, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return contract(format!("row {n} has length {}, expected {dim}", row.len()));
            }
            for &v in row {
                let ok = match family {
                    ModelFamily::Sbn => v == 0.0 || v == 1.0,
                    ModelFamily::GammaMixture => v > 0.0 && v.is_finite(),
                    ModelFamily::PoissonMixture => v >= 0.0 && v.fract() == 0.0 && v.is_finite(),
                    _ => v.is_finite(),
                };
                if !ok {
                    return domain(format!("row {n} holds {v}, invalid for a {} dataset", family.name()));
                }
            }
        }
        Ok(Dataset { family, dim, seed, rows })
    }

    pub fn family(&self) -> ModelFamily {
        self.family
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Same data with rows reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        if perm.len() != self.len() || perm.iter().any(|&i| i >= self.len() || std::mem::replace(&mut seen[i], true)) {
            return contract("not a permutation of the dataset rows");
        }
        let rows = perm.iter().map(|&i| self.rows[i].clone()).collect();
        Ok(Dataset { rows, ..self.clone() })
    }

    /// Column means.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        (0..self.dim).map(|d| self.rows.iter().map(|r| r[d]).sum::<f64>() / n).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W, config: Option<&serde_json::Value>) -> Result<()> {
        let header = Header { family: self.family, d: self.dim, n: self.len(), seed: self.seed, config: config.cloned() };
        writeln!(out, "{}", to_json_line(&header)?)?;
        for row in &self.rows {
            writeln!(out, "{}", to_json_line(&Row { x: row.clone() })?)?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self, config: Option<&serde_json::Value>) -> Result<String> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf, config)?;
        Ok(String::from_utf8(buf).expect("json is utf-8"))
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().filter(|l| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true));
        let header: Header = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return contract("dataset file is empty"),
        };
        let mut rows = Vec::with_capacity(header.n);
        for line in lines {
            rows.push(serde_json::from_str::<Row>(&line?)?.x);
        }
        if rows.len() != header.n {
            return contract(format!("header declares N = {} but {} rows follow", header.n, rows.len()));
        }
        let data = Dataset::new(header.family, rows, header.seed)?;
        if data.dim != header.d {
            return contract(format!("header declares D = {} but rows have length {}", header.d, data.dim));
        }
        Ok(data)
    }
}
