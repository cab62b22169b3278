use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arch::ArchParams;
use crate::error::{Error, Result};

/// Per-candidate latency in milliseconds for one hardware profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    pub profile: String,
    entries: BTreeMap<(usize, usize), f64>,
}

impl LatencyTable {
    pub fn new(profile: impl Into<String>) -> Self {
        LatencyTable {
            profile: profile.into(),
            entries: BTreeMap::new(),
        }
    }

    /// Builds a table from dense rows `[layer][candidate]`.
    pub fn from_rows(profile: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let mut table = Self::new(profile);
        for (layer, row) in rows.iter().enumerate() {
            for (candidate, &ms) in row.iter().enumerate() {
                table.insert(layer, candidate, ms)?;
            }
        }
        Ok(table)
    }

    pub fn insert(&mut self, layer: usize, candidate: usize, ms: f64) -> Result<()> {
        if !ms.is_finite() || ms < 0.0 {
            return Err(Error::Latency(format!(
                "profile {}: latency {ms} at layer {layer}, candidate {candidate} must be finite and >= 0",
                self.profile
            )));
        }
        if self.entries.insert((layer, candidate), ms).is_some() {
            return Err(Error::Latency(format!(
                "profile {}: duplicate entry for layer {layer}, candidate {candidate}",
                self.profile
            )));
        }
        Ok(())
    }

    pub fn get(&self, layer: usize, candidate: usize) -> Result<f64> {
        self.entries
            .get(&(layer, candidate))
            .copied()
            .ok_or_else(|| {
                Error::Latency(format!(
                    "profile {}: missing entry for layer {layer}, candidate {candidate}",
                    self.profile
                ))
            })
    }

    /// Fails unless the table covers exactly the given layer/candidate grid.
    pub fn check_covers(&self, candidate_counts: &[usize]) -> Result<()> {
        for (layer, &n) in candidate_counts.iter().enumerate() {
            for candidate in 0..n {
                self.get(layer, candidate)?;
            }
        }
        let expected: usize = candidate_counts.iter().sum();
        if self.entries.len() != expected {
            return Err(Error::Latency(format!(
                "profile {}: {} entries but the network has {expected} candidates",
                self.profile,
                self.entries.len()
            )));
        }
        Ok(())
    }

    /// Latency of a discrete architecture given by per-layer choices.
    pub fn path_latency(&self, choices: &[usize]) -> Result<f64> {
        choices
            .iter()
            .enumerate()
            .map(|(layer, &c)| self.get(layer, c))
            .sum()
    }

    /// Reads `profile,layer,candidate,latency_ms` records. A header line is
    /// optional; blank lines and `#` comments are skipped.
    pub fn parse_all(text: &str) -> Result<HashMap<String, LatencyTable>> {
        let mut tables: HashMap<String, LatencyTable> = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("profile,") {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = |what: &str| Error::Latency(format!("line {}: {what}: `{line}`", lineno + 1));
            if fields.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            let layer: usize = fields[1].parse().map_err(|_| bad("bad layer index"))?;
            let candidate: usize = fields[2].parse().map_err(|_| bad("bad candidate index"))?;
            let ms: f64 = fields[3].parse().map_err(|_| bad("bad latency"))?;
            tables
                .entry(fields[0].to_string())
                .or_insert_with(|| LatencyTable::new(fields[0]))
                .insert(layer, candidate, ms)?;
        }
        Ok(tables)
    }

    pub fn load_all(path: &Path) -> Result<HashMap<String, LatencyTable>> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse_all(&text)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("profile,layer,candidate,latency_ms\n");
        for (&(layer, candidate), ms) in &self.entries {
            out.push_str(&format!("{},{layer},{candidate},{ms}\n", self.profile));
        }
        out
    }
}

/// Probability-weighted latency summed over layers, and its gradient with
/// respect to the logits.
pub fn expected_latency(arch: &ArchParams, table: &LatencyTable) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(arch.layers());
    for layer in 0..arch.layers() {
        let p = arch.probs(layer);
        let lat: Vec<f64> = (0..p.len())
            .map(|n| table.get(layer, n))
            .collect::<Result<_>>()?;
        let mean: f64 = p.iter().zip(&lat).map(|(a, b)| a * b).sum();
        total += mean;
        grad.push(
            p.iter()
                .zip(&lat)
                .map(|(pi, li)| pi * (li - mean))
                .collect(),
        );
    }
    Ok((total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        let table = LatencyTable::from_rows("gpu", &[vec![5.0, 10.0]]).unwrap();
        let sure = ArchParams::from_logits(vec![vec![0.0, -1e4]]).unwrap();
        assert!((expected_latency(&sure, &table).unwrap().0 - 5.0).abs() < 1e-12);
        let even = ArchParams::uniform(&[2]);
        assert!((expected_latency(&even, &table).unwrap().0 - 7.5).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let table =
            LatencyTable::from_rows("cpu", &[vec![0.0, 1.0, 3.0], vec![2.0, 0.5, 8.0, 4.0]])
                .unwrap();
        let arch =
            ArchParams::from_logits(vec![vec![0.2, -0.4, 0.9], vec![1.0, 0.0, -1.5, 0.3]]).unwrap();
        let (_, grad) = expected_latency(&arch, &table).unwrap();
        let eps = 1e-5;
        for layer in 0..2 {
            for n in 0..arch.layer(layer).len() {
                let mut hi = arch.clone();
                hi.layer_mut(layer)[n] += eps;
                let mut lo = arch.clone();
                lo.layer_mut(layer)[n] -= eps;
                let fd = (expected_latency(&hi, &table).unwrap().0
                    - expected_latency(&lo, &table).unwrap().0)
                    / (2.0 * eps);
                assert!((fd - grad[layer][n]).abs() <= 1e-6 * fd.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn parse_and_reject() {
        let text = "profile,layer,candidate,latency_ms\ngpu,0,0,0\ngpu,0,1,2.5\ncpu,0,0,1\n";
        let tables = LatencyTable::parse_all(text).unwrap();
        assert_eq!(tables.len(), 2);
        assert_eq!(tables["gpu"].get(0, 1).unwrap(), 2.5);
        assert!(tables["gpu"].check_covers(&[2]).is_ok());
        assert!(tables["cpu"].check_covers(&[2]).is_err());
        assert!(LatencyTable::parse_all("gpu,0,0,-1\n").is_err());
        assert!(LatencyTable::parse_all("gpu,0,0,1\ngpu,0,0,2\n").is_err());
        assert!(LatencyTable::parse_all("gpu,0,x,1\n").is_err());
        let missing = ArchParams::uniform(&[3]);
        assert!(matches!(
            expected_latency(&missing, &tables["gpu"]),
            Err(Error::Latency(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let table = LatencyTable::from_rows("gpu", &[vec![0.0, 1.25], vec![3.5, 0.0]]).unwrap();
        let back = LatencyTable::parse_all(&table.to_csv()).unwrap();
        assert_eq!(back["gpu"], table);
    }
}
