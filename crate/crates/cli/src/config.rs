//! Flat `key=value` config files.
//!
//! One pair per line, `#` starts a comment, unknown keys are rejected with
//! their line number. Values from a file sit between built-in defaults and
//! command-line flags: flags win, then the file, then the defaults.

use std::path::{Path, PathBuf};

/// Everything a config file may set. Each field mirrors a command-line flag.
#[derive(Debug, Default, Clone)]
pub struct FileConfig {
    pub corpus_dir: Option<PathBuf>,
    pub model_path: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub clean: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
    pub sigma: Option<f64>,
    pub sigmas: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub window: Option<usize>,
    pub d: Option<usize>,
    pub m: Option<usize>,
    pub c: Option<f64>,
    pub rho: Option<f64>,
    pub gamma: Option<f64>,
    pub iters: Option<usize>,
    pub stride: Option<usize>,
    pub n_groups: Option<usize>,
    pub max_em_iters: Option<usize>,
    pub em_tol: Option<f64>,
    pub cov_floor: Option<f64>,
    pub threads: Option<usize>,
    pub component_weights: Option<bool>,
}

#[derive(Debug)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("config {}: {e}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = FileConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(at) => &raw[..at],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError {
                    line: line_no,
                    message: format!("expected key=value, found {line:?}"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value).map_err(|message| ConfigError {
                line: line_no,
                message,
            })?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value
                .parse::<T>()
                .map_err(|_| format!("invalid value {value:?} for key {key:?}"))
        }
        match key {
            "corpus_dir" => self.corpus_dir = Some(PathBuf::from(value)),
            "model_path" => self.model_path = Some(PathBuf::from(value)),
            "input" => self.input = Some(PathBuf::from(value)),
            "output" => self.output = Some(PathBuf::from(value)),
            "clean" => self.clean = Some(PathBuf::from(value)),
            "test_dir" => self.test_dir = Some(PathBuf::from(value)),
            "sigma" => self.sigma = Some(num(key, value)?),
            "sigmas" => {
                let parsed: Result<Vec<f64>, _> =
                    value.split(',').map(|s| s.trim().parse::<f64>()).collect();
                self.sigmas =
                    Some(parsed.map_err(|_| format!("invalid value {value:?} for key {key:?}"))?);
            }
            "seed" => self.seed = Some(num(key, value)?),
            "k" => self.k = Some(num(key, value)?),
            "window" => self.window = Some(num(key, value)?),
            "d" => self.d = Some(num(key, value)?),
            "m" => self.m = Some(num(key, value)?),
            "c" => self.c = Some(num(key, value)?),
            "rho" => self.rho = Some(num(key, value)?),
            "gamma" => self.gamma = Some(num(key, value)?),
            "iters" => self.iters = Some(num(key, value)?),
            "stride" => self.stride = Some(num(key, value)?),
            "n_groups" => self.n_groups = Some(num(key, value)?),
            "max_em_iters" => self.max_em_iters = Some(num(key, value)?),
            "em_tol" => self.em_tol = Some(num(key, value)?),
            "cov_floor" => self.cov_floor = Some(num(key, value)?),
            "threads" => self.threads = Some(num(key, value)?),
            "component_weights" => self.component_weights = Some(num(key, value)?),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }
}
