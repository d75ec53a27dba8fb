//! Golden fixtures: seeded oracle outputs stored with a tolerance-aware digest.
//!
//! A fixture is a named vector of values together with a description of the
//! oracle that produced it. Values are compared within the fixture's
//! tolerance; the digest hashes the values quantized to that tolerance so a
//! change in any value by more than a few tolerances shows up in the digest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Directory name for the current fixture layout.
pub const FIXTURE_VERSION: &str = "v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldenFixture {
    pub name: String,
    /// How the values were obtained.
    pub oracle: String,
    pub seed: u64,
    /// Absolute tolerance per value; 0 demands bit equality.
    pub tolerance: f64,
    pub values: Vec<f64>,
    pub digest: String,
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl GoldenFixture {
    pub fn new(name: impl Into<String>, oracle: impl Into<String>, seed: u64, tolerance: f64, values: Vec<f64>) -> Self {
        let digest = Self::digest_of(&values, tolerance);
        GoldenFixture { name: name.into(), oracle: oracle.into(), seed, tolerance, values, digest }
    }

    /// FNV-1a over values rounded to multiples of `10 × tolerance`, or over raw bits when the tolerance is 0.
    pub fn digest_of(values: &[f64], tolerance: f64) -> String {
        let words: Vec<u64> = values
            .iter()
            .map(|&v| if tolerance > 0.0 { (v / (10.0 * tolerance)).round() as i64 as u64 } else { v.to_bits() })
            .collect();
        format!("{:016x}", fnv1a(words.iter().flat_map(|w| w.to_le_bytes())))
    }

    /// Every fresh value within tolerance of the stored one.
    pub fn compare(&self, fresh: &[f64]) -> Result<()> {
        if fresh.len() != self.values.len() {
            return Err(Error::invalid(format!(
                "fixture {}: {} values regenerated, {} stored",
                self.name,
                fresh.len(),
                self.values.len()
            )));
        }
        for (i, (&a, &b)) in self.values.iter().zip(fresh).enumerate() {
            let ok = if self.tolerance == 0.0 { a.to_bits() == b.to_bits() } else { (a - b).abs() <= self.tolerance };
            if !ok {
                return Err(Error::invalid(format!(
                    "fixture {}: value {i} drifted from {a:e} to {b:e} (tolerance {:e})",
                    self.name, self.tolerance
                )));
            }
        }
        Ok(())
    }

    pub fn path_in(dir: &Path, name: &str) -> PathBuf {
        dir.join(FIXTURE_VERSION).join(format!("{name}.json"))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = Self::path_in(dir, &self.name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let text = fs::read_to_string(Self::path_in(dir, name))?;
        let f: GoldenFixture = serde_json::from_str(&text)?;
        if f.digest != Self::digest_of(&f.values, f.tolerance) {
            return Err(Error::invalid(format!("fixture {name}: stored digest does not match its values")));
        }
        Ok(f)
    }

    /// Regenerate into `dir` when `regen` is set, otherwise compare against the stored copy.
    pub fn check_or_regen(&self, dir: &Path, regen: bool) -> Result<()> {
        if regen {
            return self.save(dir);
        }
        Self::load(dir, &self.name)?.compare(&self.values)
    }
}
