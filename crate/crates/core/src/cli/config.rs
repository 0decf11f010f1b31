//! Strict JSON run configuration and the ablation grid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::drop::{DropConfig, Variant};
use crate::error::{Error, Result};
use crate::harness::{EvalConfig, ModelConfig, OptimConfig, RunConfig, SyntheticTask};
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// File stem for `<name>.csv` / `<name>.json`.
    pub name: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs"),
            name: "run".into(),
        }
    }
}

/// Hyperparameter grid; defaults are the published search space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationGrid {
    pub hard_p: Vec<f64>,
    pub hard_k: Vec<usize>,
    pub blur_sigma_max: Vec<f64>,
    pub blur_w: usize,
    pub lambdas: Vec<f64>,
    /// Perturbation used under the consistency loss.
    pub consistency_variant: Variant,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            hard_p: vec![0.05, 0.1, 0.2],
            hard_k: vec![3, 5, 10],
            blur_sigma_max: vec![0.3, 0.5],
            blur_w: 5,
            lambdas: vec![0.2, 0.5],
            consistency_variant: Variant::HardMask,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum GridKind {
    Hard,
    Blur,
    Consistency,
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub name: String,
    pub config: RunConfig,
}

fn name_label(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

impl AblationGrid {
    /// Grid cells on top of `base`. Each cell keeps the base task, model and
    /// shuffle seeds and gets its own drop seed derived from the cell name.
    pub fn cells(&self, base: &RunConfig, kind: GridKind) -> Vec<Cell> {
        let mut out = Vec::new();
        let mut push = |name: String, drop: DropConfig| {
            let mut config = base.clone();
            config.drop = DropConfig {
                seed: derive_seed(base.drop.seed, name_label(&name)),
                ..drop
            };
            out.push(Cell { name, config });
        };
        if matches!(kind, GridKind::Hard | GridKind::All) {
            for &p in &self.hard_p {
                for &k in &self.hard_k {
                    push(format!("hard_p{p}_k{k}"), DropConfig::hard_mask(p, k));
                }
            }
        }
        if matches!(kind, GridKind::Blur | GridKind::All) {
            for &s in &self.blur_sigma_max {
                push(format!("blur_s{s}_w{}", self.blur_w), DropConfig::blur(s, self.blur_w));
            }
        }
        if matches!(kind, GridKind::Consistency | GridKind::All) {
            for &lambda in &self.lambdas {
                let drop = DropConfig {
                    variant: self.consistency_variant,
                    ..base.drop.clone()
                }
                .with_consistency(lambda);
                push(format!("cons_{:?}_l{lambda}", self.consistency_variant).to_lowercase(), drop);
            }
        }
        out
    }
}

/// On-disk run description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub task: SyntheticTask,
    pub model: ModelSection,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub drop: DropConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output: OutputSection,
    /// Precomputed kernel table to load instead of building one.
    #[serde(default)]
    pub kernel_table: Option<PathBuf>,
    /// When set, every component seed is derived from this one.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub ablation: AblationGrid,
}

impl RunConfigFile {
    /// Parses and validates; any unknown key or violated constraint is a
    /// config error naming the field.
    pub fn parse(text: &str) -> Result<Self> {
        let file: RunConfigFile = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        file.run_config()?.validate()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let m = &self.model;
        let t = &self.task;
        let config = RunConfig {
            task: t.clone(),
            model: ModelConfig {
                vocab: t.vocab,
                seq_len: t.seq_len,
                layers: m.layers,
                model_dim: m.model_dim,
                heads: m.heads,
                ffn_dim: m.ffn_dim,
                classes: t.classes,
                seed: m.seed,
            },
            optim: self.optim.clone(),
            drop: self.drop.clone(),
            eval: self.eval.clone(),
        };
        Ok(match self.seed {
            Some(s) => config.reseeded(s),
            None => config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "task": {"kind": "majority_token", "vocab": 8, "seq_len": 16, "train_size": 400,
                 "val_size": 100, "classes": 2, "seed": 1},
        "model": {"layers": 1, "model_dim": 16, "heads": 2, "ffn_dim": 32}
    }"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let f = RunConfigFile::parse(MINIMAL).unwrap();
        assert_eq!(f.drop.variant, Variant::None);
        assert_eq!(f.optim.weight_decay, 1e-2);
        assert_eq!(f.output.name, "run");
    }

    #[test]
    fn misspelled_key_is_rejected() {
        let bad = MINIMAL.replace("\"heads\"", "\"haeds\"");
        let err = RunConfigFile::parse(&bad).unwrap_err().to_string();
        assert!(err.contains("haeds"), "{err}");
        let bad = MINIMAL.replace("\"seed\": 1}", "\"seed\": 1, \"sead\": 2}");
        assert!(RunConfigFile::parse(&bad).is_err());
    }

    #[test]
    fn constraints_revalidated() {
        let bad = MINIMAL.replace("\"heads\": 2", "\"heads\": 3");
        assert!(matches!(RunConfigFile::parse(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn default_grid_sizes() {
        let base = RunConfigFile::parse(MINIMAL).unwrap().run_config().unwrap();
        let g = AblationGrid::default();
        assert_eq!(g.cells(&base, GridKind::Hard).len(), 9);
        assert_eq!(g.cells(&base, GridKind::Blur).len(), 2);
        assert_eq!(g.cells(&base, GridKind::Consistency).len(), 2);
        let all = g.cells(&base, GridKind::All);
        assert_eq!(all.len(), 13);
        let mut seeds: Vec<u64> = all.iter().map(|c| c.config.drop.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 13);
    }
}
