//! Electrode name → head-frame coordinates (cm) and training-time
//! positional jitter.
//!
//! The bundled table places 10-20/10-10 sites on a 9 cm sphere: x points to
//! the right ear, y to the nasion, z to the vertex. Any JSON object mapping
//! names to `[x, y, z]` in cm can be loaded instead.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

const STANDARD_TABLE: &str = include_str!("../data/montage_1010.json");

/// Head-scale sanity bound on coordinate norms.
pub const MAX_NORM_CM: f64 = 15.0;

/// Channel order used by the synthetic generator.
pub const STANDARD_1020_ORDER: &[&str] = &[
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T7", "C3", "Cz", "C4", "T8", "P7", "P3", "Pz", "P4",
    "P8", "O1", "Oz", "O2", "AF3", "AF4", "FC5", "FC1", "FC2", "FC6", "CP5", "CP1", "CP2", "CP6",
    "PO3", "PO4",
];

#[derive(Clone, Debug)]
pub struct ElectrodeLayout {
    /// Keyed by upper-cased label.
    table: HashMap<String, [f64; 3]>,
}

impl ElectrodeLayout {
    pub fn standard() -> Self {
        Self::from_json(STANDARD_TABLE).expect("bundled montage table is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: HashMap<String, [f64; 3]> = serde_json::from_str(text)?;
        let mut bad = Vec::new();
        for (name, p) in &raw {
            let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            if !p.iter().all(|v| v.is_finite()) || norm > MAX_NORM_CM {
                bad.push(format!("{name}: {p:?}"));
            }
        }
        if !bad.is_empty() {
            bad.sort();
            return Err(invalid(format!(
                "layout coordinates must be finite with norm <= {MAX_NORM_CM} cm: {}",
                bad.join("; ")
            )));
        }
        Ok(Self {
            table: raw.into_iter().map(|(k, v)| (k.to_uppercase(), v)).collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<[f64; 3]> {
        self.table.get(&name.to_uppercase()).copied()
    }

    /// Row `i` is the coordinate of `names[i]`; every unknown label is
    /// reported in a single error.
    pub fn resolve_positions<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<[f64; 3]>> {
        let mut out = Vec::with_capacity(names.len());
        let mut missing = Vec::new();
        for n in names {
            match self.get(n.as_ref()) {
                Some(p) => out.push(p),
                None => missing.push(n.as_ref().to_string()),
            }
        }
        if missing.is_empty() {
            Ok(out)
        } else {
            Err(Error::UnresolvedChannels(missing))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterConfig {
    /// Standard deviation in cm.
    pub sigma_noise: f64,
    pub seed: u64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            sigma_noise: 0.25,
            seed: 0,
        }
    }
}

/// Adds i.i.d. Normal(0, sigma²) noise to every coordinate.
pub fn jitter_positions(positions: &[[f64; 3]], cfg: &JitterConfig) -> Result<Vec<[f64; 3]>> {
    if !(cfg.sigma_noise >= 0.0 && cfg.sigma_noise.is_finite()) {
        return Err(invalid(format!("sigma_noise {} must be >= 0", cfg.sigma_noise)));
    }
    if positions.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("electrode positions".into()));
    }
    if cfg.sigma_noise == 0.0 {
        return Ok(positions.to_vec());
    }
    let normal = Normal::new(0.0, cfg.sigma_noise).map_err(|e| invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(positions
        .iter()
        .map(|p| {
            let mut q = *p;
            for v in &mut q {
                *v += normal.sample(&mut rng);
            }
            q
        })
        .collect())
}
