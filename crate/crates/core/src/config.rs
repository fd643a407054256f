//! Run configuration: a versioned TOML document plus path overrides from the
//! environment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::dqn::DqnConfig;
use crate::analysis::DEFAULT_PRUNE;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::presets::h3o_trap;
use crate::propagator::PropagationSettings;
use crate::pulses::TrapConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variables that replace the corresponding paths.
pub const ENV_LEVELS: &str = "QLS_LEVELS";
pub const ENV_RABI: &str = "QLS_RABI";
pub const ENV_EINSTEIN: &str = "QLS_EINSTEIN";
pub const ENV_OUT: &str = "QLS_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Zeeman/hyperfine levels computed from molecular constants, with
    /// synthetic Raman couplings and emission rates.
    CahDesk,
    /// Bundled tabulated levels and Rabi rates.
    H3o,
    /// User-supplied tables, or the 3-state toy when no level table is given.
    Synthetic,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::CahDesk => "cah_desk",
            Preset::H3o => "h3o",
            Preset::Synthetic => "synthetic",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub levels: Option<PathBuf>,
    pub rabi: Option<PathBuf>,
    pub einstein: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub n_episodes: usize,
    /// Tree branches below this probability are pruned.
    pub prune_probability: f64,
    pub tree_depth: usize,
    /// Moving-average window of the training curve.
    pub curve_window: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            n_episodes: 1000,
            prune_probability: DEFAULT_PRUNE,
            tree_depth: 30,
            curve_window: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub preset: Preset,
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Rotational manifolds of the desk model.
    #[serde(default)]
    pub j_values: Option<Vec<u32>>,
    #[serde(default)]
    pub paths: DataPaths,
    /// Defaults depend on the preset.
    #[serde(default)]
    pub trap: Option<TrapConfig>,
    #[serde(default)]
    pub propagation: PropagationSettings,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub dqn: DqnConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("run")
}

impl RunConfig {
    /// A config with every section at its default.
    pub fn new(preset: Preset, seed: u64) -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            preset,
            seed,
            out: default_out(),
            j_values: None,
            paths: DataPaths::default(),
            trap: None,
            propagation: PropagationSettings::default(),
            env: EnvConfig::default(),
            dqn: DqnConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            schema_version: Option<u32>,
        }
        let h: Header = toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        match h.schema_version {
            Some(SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(Error::config(format!(
                    "config schema_version {v} is not supported (expected {SCHEMA_VERSION})"
                )))
            }
            None => return Err(Error::config("config is missing schema_version")),
        }
        toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("config: {e}")))
    }

    /// Read a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut cfg.paths.levels, &mut cfg.paths.rabi, &mut cfg.paths.einstein]
            .into_iter()
            .flatten()
        {
            rebase(p);
        }
        rebase(&mut cfg.out);
        Ok(cfg)
    }

    /// Replace paths from QLS_LEVELS, QLS_RABI, QLS_EINSTEIN and QLS_OUT.
    pub fn apply_env_overrides(&mut self) {
        self.apply_overrides(|k| std::env::var_os(k).filter(|v| !v.is_empty()).map(PathBuf::from));
    }

    pub fn apply_overrides<F: Fn(&str) -> Option<PathBuf>>(&mut self, lookup: F) {
        if let Some(p) = lookup(ENV_LEVELS) {
            self.paths.levels = Some(p);
        }
        if let Some(p) = lookup(ENV_RABI) {
            self.paths.rabi = Some(p);
        }
        if let Some(p) = lookup(ENV_EINSTEIN) {
            self.paths.einstein = Some(p);
        }
        if let Some(p) = lookup(ENV_OUT) {
            self.out = p;
        }
    }

    pub fn trap(&self) -> TrapConfig {
        match (self.trap, self.preset) {
            (Some(t), _) => t,
            (None, Preset::H3o) => h3o_trap(),
            (None, _) => TrapConfig::default(),
        }
    }

    pub fn j_values(&self) -> Vec<u32> {
        self.j_values.clone().unwrap_or_else(|| vec![1, 2])
    }

    /// The toy model has hand-built matrices and no level structure.
    pub fn is_toy(&self) -> bool {
        self.preset == Preset::Synthetic && self.paths.levels.is_none()
    }

    /// Whether an emission table is available for blackbody coupling.
    pub fn has_einstein(&self) -> bool {
        self.preset == Preset::CahDesk || self.paths.einstein.is_some()
    }

    /// Check everything that can be checked before any computation.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "config schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        match self.preset {
            Preset::CahDesk => {
                let js = self.j_values();
                if js.is_empty() || js.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::config("j_values must be non-empty and strictly increasing"));
                }
                if js[0] == 0 || js[js.len() - 1] > 8 {
                    return Err(Error::config("j_values must lie in 1..=8"));
                }
                if self.paths.levels.is_some() || self.paths.rabi.is_some() {
                    return Err(Error::config("the cah_desk preset computes its own level and Rabi tables"));
                }
            }
            Preset::H3o | Preset::Synthetic => {
                if self.j_values.is_some() {
                    return Err(Error::config("j_values only applies to the cah_desk preset"));
                }
                if self.preset == Preset::Synthetic && self.paths.levels.is_some() != self.paths.rabi.is_some() {
                    return Err(Error::config("a synthetic model needs both a level table and a Rabi table"));
                }
                if self.preset == Preset::H3o && self.paths.levels.is_some() && self.paths.rabi.is_none() {
                    return Err(Error::config("a replacement level table needs a matching Rabi table"));
                }
            }
        }
        for p in [&self.paths.levels, &self.paths.rabi, &self.paths.einstein]
            .into_iter()
            .flatten()
        {
            if !p.is_file() {
                return Err(Error::config(format!("input file {} does not exist", p.display())));
            }
        }
        if self.is_toy() {
            if self.paths.einstein.is_some() {
                return Err(Error::config("the toy model has no levels for an emission table"));
            }
            if self.trap.is_some() {
                return Err(Error::config("the toy model has no trap"));
            }
        }
        if self.env.bbr_enabled && !self.has_einstein() {
            return Err(Error::config("BBR is enabled but no Einstein table is configured"));
        }
        self.trap().validate()?;
        self.propagation.validate()?;
        self.env.validate()?;
        self.dqn.validate()?;
        let ev = &self.evaluation;
        if ev.n_episodes == 0 {
            return Err(Error::config("evaluation.n_episodes must be positive"));
        }
        if !(0.0..1.0).contains(&ev.prune_probability) {
            return Err(Error::config("evaluation.prune_probability must lie in [0, 1)"));
        }
        if ev.tree_depth == 0 || ev.curve_window == 0 {
            return Err(Error::config("evaluation.tree_depth and curve_window must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "schema_version = 1\npreset = \"cah_desk\"\nseed = 7\n";

    #[test]
    fn minimal_document_takes_defaults() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c, RunConfig::new(Preset::CahDesk, 7));
        c.validate().unwrap();
        assert_eq!(c.j_values(), vec![1, 2]);
        assert_eq!(c.evaluation.n_episodes, 1000);
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn sections_override_defaults() {
        let text = format!("{MINIMAL}j_values = [2, 3]\n[trap]\nlamb_dicke = 0.05\n[dqn]\nhidden = [32]\n[env]\nbbr_enabled = true\n");
        let c = RunConfig::from_toml(&text).unwrap();
        assert_eq!(c.trap().lamb_dicke, 0.05);
        assert_eq!(c.trap().n_motional, 2);
        assert_eq!(c.dqn.hidden, vec![32]);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_documents() {
        assert!(RunConfig::from_toml("preset = \"h3o\"\nseed = 1\n").is_err());
        assert!(RunConfig::from_toml("schema_version = 2\npreset = \"h3o\"\nseed = 1\n").is_err());
        assert!(RunConfig::from_toml(&format!("{MINIMAL}colour = 3\n")).is_err());
        assert!(RunConfig::from_toml(&format!("{MINIMAL}[dqn]\nlearning_rat = 3\n")).is_err());
        assert!(RunConfig::from_toml("schema_version = 1\npreset = \"nh3\"\nseed = 1\n").is_err());
    }

    #[test]
    fn validation_catches_out_of_range_values() {
        let base = RunConfig::from_toml(MINIMAL).unwrap();
        let mut c = base.clone();
        c.dqn.soft_update = 0.0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.env.purity_threshold = 1.5;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.j_values = Some(vec![2, 1]);
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.evaluation.prune_probability = 1.0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.paths.einstein = Some("/nonexistent/einstein.csv".into());
        assert!(c.validate().is_err());
        let mut c = RunConfig::new(Preset::Synthetic, 1);
        c.env.bbr_enabled = true;
        assert!(c.validate().is_err());
        c.env.bbr_enabled = false;
        c.validate().unwrap();
        assert!(c.is_toy());
    }

    #[test]
    fn overrides_replace_paths_only() {
        let mut c = RunConfig::new(Preset::H3o, 1);
        c.apply_overrides(|k| match k {
            ENV_EINSTEIN => Some("a.csv".into()),
            ENV_OUT => Some("elsewhere".into()),
            _ => None,
        });
        assert_eq!(c.paths.einstein, Some(PathBuf::from("a.csv")));
        assert_eq!(c.out, PathBuf::from("elsewhere"));
        assert_eq!(c.paths.levels, None);
        assert_eq!(c.trap().n_motional, 4);
    }

    #[test]
    fn load_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("e.csv"), "").unwrap();
        let text = "schema_version = 1\npreset = \"h3o\"\nseed = 3\nout = \"results\"\n[paths]\neinstein = \"e.csv\"\n";
        std::fs::write(dir.path().join("run.toml"), text).unwrap();
        let c = RunConfig::load(&dir.path().join("run.toml")).unwrap();
        assert_eq!(c.paths.einstein.as_deref(), Some(dir.path().join("e.csv").as_path()));
        assert_eq!(c.out, dir.path().join("results"));
        c.validate().unwrap();
    }
}
