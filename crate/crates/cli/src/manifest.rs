//! Experiment manifests: one TOML file describing a run or a sweep.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use disagg::analytics::AnalyticsConfig;
use disagg::attack::AttackConfig;
use disagg::flsim::{FedAvgConfig, SimulationConfig};
use disagg::pipeline::Experiment;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DEFAULT_SWEEP_CAP: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Manifest {
    pub trials: usize,
    pub seed_base: u64,
    pub output_dir: Option<PathBuf>,
    /// Largest number of (point, trial) runs a sweep may expand to.
    pub sweep_cap: usize,
    pub simulation: SimulationConfig,
    pub fedavg: Option<FedAvgConfig>,
    pub analytics: AnalyticsConfig,
    pub attack: AttackConfig,
    /// Dotted field path (or short alias) to the values it takes.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub sweep: BTreeMap<String, Vec<toml::Value>>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            trials: 1,
            seed_base: 0,
            output_dir: None,
            sweep_cap: DEFAULT_SWEEP_CAP,
            simulation: SimulationConfig::default(),
            fedavg: None,
            analytics: AnalyticsConfig::default(),
            attack: AttackConfig::default(),
            sweep: BTreeMap::new(),
        }
    }
}

/// Short names accepted for the common sweep axes.
const ALIASES: &[(&str, &str)] = &[
    ("users", "simulation.num_users"),
    ("rounds", "simulation.num_rounds"),
    ("dim", "simulation.gradient_dim"),
    ("rate", "simulation.participation_rate"),
    ("granularity", "analytics.granularity"),
    ("kept_fraction", "analytics.kept_fraction"),
    ("count_noise", "analytics.count_noise_sigma"),
    ("epochs", "fedavg.local_epochs"),
    ("batch", "fedavg.batch_size"),
    ("momentum", "fedavg.momentum"),
];

pub fn resolve_axis(name: &str) -> &str {
    ALIASES.iter().find(|(a, _)| *a == name).map_or(name, |(_, full)| full)
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in manifest {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest = toml::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            bail!("trials must be at least 1");
        }
        for (axis, values) in &self.sweep {
            if values.is_empty() {
                bail!("sweep axis `{axis}` has no values");
            }
        }
        // Every axis must name an existing field; applying the first value
        // of each checks that.
        let first: Vec<(String, toml::Value)> = self.sweep.iter().map(|(k, v)| (k.clone(), v[0].clone())).collect();
        self.with_overrides(&first)?.experiment().validate()?;
        Ok(())
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            simulation: self.simulation.clone(),
            fedavg: self.fedavg.clone(),
            analytics: self.analytics.clone(),
            attack: self.attack.clone(),
        }
    }

    /// The manifest for a single run: no sweep, one trial, the given seed.
    pub fn single_run(&self, seed: u64) -> Self {
        let exp = self.experiment().with_seed(seed);
        Self {
            trials: 1,
            seed_base: seed,
            sweep: BTreeMap::new(),
            attack: exp.attack_config(),
            simulation: exp.simulation,
            ..self.clone()
        }
    }

    /// Sets each dotted path to its value. Paths must already exist.
    pub fn with_overrides(&self, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let mut doc = toml::Value::try_from(self)?;
        for (axis, value) in overrides {
            let path = resolve_axis(axis);
            let (parents, leaf) = match path.rsplit_once('.') {
                Some((parents, leaf)) => (parents.split('.').collect::<Vec<_>>(), leaf),
                None => (Vec::new(), path),
            };
            let mut node = &mut doc;
            for part in parents {
                node = node.get_mut(part).with_context(|| format!("sweep axis `{axis}` does not name an existing field"))?;
            }
            let table = node.as_table_mut().with_context(|| format!("sweep axis `{axis}` does not name a field"))?;
            match table.get_mut(leaf) {
                Some(slot) if !slot.is_table() && !slot.is_array() => *slot = value.clone(),
                Some(_) => bail!("sweep axis `{axis}` does not name a scalar field"),
                None if is_optional_leaf(path) => {
                    table.insert(leaf.to_string(), value.clone());
                }
                None => bail!("sweep axis `{axis}` does not name an existing field"),
            }
        }
        let mut out: Manifest = doc.try_into().context("applying sweep values")?;
        out.sweep.clear();
        Ok(out)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Cartesian product of the sweep axes, in lexicographic axis order.
    pub fn sweep_points(&self) -> Vec<Vec<(String, toml::Value)>> {
        let mut points = vec![Vec::new()];
        for (axis, values) in &self.sweep {
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push((axis.clone(), v.clone()));
                        q
                    })
                })
                .collect();
        }
        points
    }

    pub fn sweep_size(&self) -> usize {
        self.sweep.values().map(Vec::len).product::<usize>() * self.trials
    }
}

/// Optional fields are omitted from TOML when unset, so overriding them adds
/// the key instead.
fn is_optional_leaf(path: &str) -> bool {
    matches!(path, "attack.time_limit_ms" | "attack.node_limit")
}

#[cfg(test)]
mod tests {
    use super::*;

    const SWEEP: &str = r#"
trials = 2

[simulation]
num_users = 8
num_rounds = 32

[sweep]
rounds = [32, 64]
users = [8, 16]
"#;

    #[test]
    fn defaults_round_trip() {
        let m = Manifest::default();
        assert_eq!(Manifest::parse(&m.to_toml().unwrap()).unwrap(), m);
    }

    #[test]
    fn sweep_expands_to_the_cartesian_product() {
        let m = Manifest::parse(SWEEP).unwrap();
        assert_eq!(m.sweep_points().len(), 4);
        assert_eq!(m.sweep_size(), 8);
        let p = m.with_overrides(&m.sweep_points()[3]).unwrap();
        assert_eq!((p.simulation.num_rounds, p.simulation.num_users), (64, 16));
    }

    #[test]
    fn unknown_axes_are_rejected() {
        let bad = SWEEP.replace("users = [8, 16]", "colour = [1]");
        assert!(Manifest::parse(&bad).is_err());
        let nested = SWEEP.replace("users = [8, 16]", "\"simulation.bogus\" = [1]");
        assert!(Manifest::parse(&nested).is_err());
    }

    #[test]
    fn optional_limits_can_be_swept() {
        let m = Manifest::default();
        let p = m.with_overrides(&[("attack.node_limit".into(), toml::Value::Integer(10))]).unwrap();
        assert_eq!(p.attack.node_limit, Some(10));
    }

    #[test]
    fn hash_tracks_content() {
        let a = Manifest::default();
        let mut b = a.clone();
        b.seed_base = 1;
        assert_eq!(a.hash().unwrap(), a.clone().hash().unwrap());
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }
}
