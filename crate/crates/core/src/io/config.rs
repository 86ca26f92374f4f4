//! Plain-text `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::IoError;
use crate::classical::ReconConfig;
use crate::phantom::DatasetConfig;
use crate::phydnn::{log_spaced, TrainConfig};
use crate::surrogate::SurrogateTrainConfig;

pub const RESOLVED_CONFIG: &str = "run.cfg";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub grid: usize,
    pub skip: usize,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    pub threads: usize,
    pub sur_epochs: usize,
    pub sur_lr: f64,
    pub sur_batch: usize,
    pub epochs: usize,
    pub warmup: usize,
    pub lr: f64,
    pub batch: usize,
    pub alpha: f64,
    pub beta: f64,
    pub betas: Vec<f64>,
    /// Also train the β = 0 model during a β search.
    pub include_zero: bool,
    pub base_channels: usize,
    pub val_fraction: f64,
    /// Upper bound on training samples; 0 uses all of them.
    pub max_train: usize,
    pub lambda_noser: f64,
    pub lambda_tv: f64,
    pub tv_iters: usize,
    pub tv_eps: f64,
    pub method: String,
    pub data: Option<PathBuf>,
    pub surrogate: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    /// One-based CSV row holding the no-contact baseline.
    pub baseline_row: usize,
    /// Single image to export; all when unset.
    pub index: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = SurrogateTrainConfig::default();
        let r = ReconConfig::default();
        Self {
            command: String::new(),
            grid: 32,
            skip: 3,
            train: 2000,
            test: 500,
            seed: 7,
            threads: 1,
            sur_epochs: s.epochs,
            sur_lr: s.lr,
            sur_batch: s.batch,
            epochs: t.epochs,
            warmup: t.warmup_epochs,
            lr: t.lr,
            batch: t.batch,
            alpha: t.alpha,
            beta: t.beta,
            betas: log_spaced(-4.0, 0.5f64.log10(), 9),
            include_zero: true,
            base_channels: 16,
            val_fraction: t.val_fraction,
            max_train: 0,
            lambda_noser: r.lambda_noser,
            lambda_tv: r.lambda_tv,
            tv_iters: r.tv_iters,
            tv_eps: r.tv_eps,
            method: "phydnn".into(),
            data: None,
            surrogate: None,
            checkpoint: None,
            input: None,
            baseline_row: 1,
            index: None,
            out: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, IoError> {
    value
        .parse()
        .map_err(|_| IoError::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, IoError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(IoError::Config(format!("bad value `{value}` for `{key}`"))),
    }
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

/// Parses `lo:hi:count` into `count` log-spaced values `10^lo … 10^hi`.
pub fn parse_betas_log(spec: &str) -> Result<Vec<f64>, IoError> {
    let bad = || IoError::Config(format!("betas-log `{spec}` is not lo:hi:count"));
    let parts: Vec<&str> = spec.split(':').collect();
    let [lo, hi, n] = parts[..] else {
        return Err(bad());
    };
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    let n: usize = n.trim().parse().map_err(|_| bad())?;
    if n == 0 || !lo.is_finite() || !hi.is_finite() || lo > hi {
        return Err(bad());
    }
    Ok(log_spaced(lo, hi, n))
}

impl RunConfig {
    pub const KEYS: [&'static str; 34] = [
        "command",
        "grid",
        "skip",
        "train",
        "test",
        "seed",
        "threads",
        "sur_epochs",
        "sur_lr",
        "sur_batch",
        "epochs",
        "warmup",
        "lr",
        "batch",
        "alpha",
        "beta",
        "betas",
        "include_zero",
        "base_channels",
        "val_fraction",
        "max_train",
        "lambda_noser",
        "lambda_tv",
        "tv_iters",
        "tv_eps",
        "method",
        "data",
        "surrogate",
        "checkpoint",
        "input",
        "baseline_row",
        "index",
        "out",
        "betas_log",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), IoError> {
        let v = value.trim();
        match key {
            "command" => self.command = v.to_string(),
            "grid" => self.grid = parse(key, v)?,
            "skip" => self.skip = parse(key, v)?,
            "train" => self.train = parse(key, v)?,
            "test" => self.test = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            "sur_epochs" => self.sur_epochs = parse(key, v)?,
            "sur_lr" => self.sur_lr = parse(key, v)?,
            "sur_batch" => self.sur_batch = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "warmup" => self.warmup = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "betas" => {
                self.betas = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|b| parse(key, b.trim()))
                        .collect::<Result<_, _>>()?
                }
            }
            "betas_log" => self.betas = parse_betas_log(v)?,
            "include_zero" => self.include_zero = parse_bool(key, v)?,
            "base_channels" => self.base_channels = parse(key, v)?,
            "val_fraction" => self.val_fraction = parse(key, v)?,
            "max_train" => self.max_train = parse(key, v)?,
            "lambda_noser" => self.lambda_noser = parse(key, v)?,
            "lambda_tv" => self.lambda_tv = parse(key, v)?,
            "tv_iters" => self.tv_iters = parse(key, v)?,
            "tv_eps" => self.tv_eps = parse(key, v)?,
            "method" => self.method = v.to_string(),
            "data" => self.data = path(v),
            "surrogate" => self.surrogate = path(v),
            "checkpoint" => self.checkpoint = path(v),
            "input" => self.input = path(v),
            "baseline_row" => {
                self.baseline_row = parse(key, v)?;
                if self.baseline_row == 0 {
                    return Err(IoError::Config("baseline_row is one-based".into()));
                }
            }
            "index" => {
                self.index = if v.is_empty() {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "out" => self.out = path(v),
            _ => return Err(IoError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn merge_str(&mut self, text: &str) -> Result<(), IoError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| IoError::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| IoError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self, IoError> {
        let mut c = Self::default();
        c.merge_str(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Every key with its resolved value, one per line.
    pub fn render(&self) -> String {
        let p = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let betas: Vec<String> = self.betas.iter().map(|b| format!("{b:?}")).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("command", self.command.clone());
        kv("grid", self.grid.to_string());
        kv("skip", self.skip.to_string());
        kv("train", self.train.to_string());
        kv("test", self.test.to_string());
        kv("seed", self.seed.to_string());
        kv("threads", self.threads.to_string());
        kv("sur_epochs", self.sur_epochs.to_string());
        kv("sur_lr", format!("{:?}", self.sur_lr));
        kv("sur_batch", self.sur_batch.to_string());
        kv("epochs", self.epochs.to_string());
        kv("warmup", self.warmup.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("batch", self.batch.to_string());
        kv("alpha", format!("{:?}", self.alpha));
        kv("beta", format!("{:?}", self.beta));
        kv("betas", betas.join(","));
        kv("include_zero", self.include_zero.to_string());
        kv("base_channels", self.base_channels.to_string());
        kv("val_fraction", format!("{:?}", self.val_fraction));
        kv("max_train", self.max_train.to_string());
        kv("lambda_noser", format!("{:?}", self.lambda_noser));
        kv("lambda_tv", format!("{:?}", self.lambda_tv));
        kv("tv_iters", self.tv_iters.to_string());
        kv("tv_eps", format!("{:?}", self.tv_eps));
        kv("method", self.method.clone());
        kv("data", p(&self.data));
        kv("surrogate", p(&self.surrogate));
        kv("checkpoint", p(&self.checkpoint));
        kv("input", p(&self.input));
        kv("baseline_row", self.baseline_row.to_string());
        kv(
            "index",
            self.index.map(|i| i.to_string()).unwrap_or_default(),
        );
        kv("out", p(&self.out));
        s
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf, IoError> {
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.render())?;
        Ok(path)
    }

    pub fn train_dataset(&self) -> DatasetConfig {
        DatasetConfig::train(self.train, self.seed)
    }

    pub fn test_dataset(&self) -> DatasetConfig {
        DatasetConfig::test(self.test, self.seed)
    }

    pub fn surrogate_training(&self) -> SurrogateTrainConfig {
        SurrogateTrainConfig {
            epochs: self.sur_epochs,
            lr: self.sur_lr,
            batch: self.sur_batch,
            seed: self.seed,
            val_fraction: self.val_fraction,
        }
    }

    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            beta: self.beta,
            warmup_epochs: self.warmup,
            epochs: self.epochs,
            lr: self.lr,
            batch: self.batch,
            seed: self.seed,
            val_fraction: self.val_fraction,
        }
    }

    pub fn reconstruction(&self) -> ReconConfig {
        ReconConfig {
            lambda_noser: self.lambda_noser,
            lambda_tv: self.lambda_tv,
            tv_iters: self.tv_iters,
            tv_eps: self.tv_eps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        let mut c = RunConfig::default();
        c.command = "train".into();
        c.beta = 1e-12;
        c.lr = 0.1 + 0.2;
        c.data = Some("runs/data".into());
        c.betas = vec![0.0, 3e-4, 0.5];
        c.index = Some(4);
        let back = RunConfig::parse_str(&c.render()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.lr.to_bits(), c.lr.to_bits());
        let empty = RunConfig {
            betas: Vec::new(),
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::parse_str(&empty.render()).unwrap(), empty);
    }

    #[test]
    fn unknown_and_malformed_lines() {
        assert!(
            matches!(RunConfig::parse_str("gird = 32"), Err(IoError::Config(m)) if m.contains("gird"))
        );
        assert!(RunConfig::parse_str("grid 32").is_err());
        assert!(RunConfig::parse_str("grid = -1").is_err());
        assert!(RunConfig::parse_str("include_zero = maybe").is_err());
        assert!(RunConfig::parse_str("baseline_row = 0").is_err());
        let c = RunConfig::parse_str("# comment\n\n grid = 16 \nseed=3\n").unwrap();
        assert_eq!((c.grid, c.seed), (16, 3));
    }

    #[test]
    fn betas_log_spec() {
        let b = parse_betas_log("-4:-0.301:9").unwrap();
        assert_eq!(b.len(), 9);
        assert!((b[0] - 1e-4).abs() < 1e-16);
        assert!((b[8] - 0.5).abs() < 1e-3);
        assert!(parse_betas_log("-4:-1").is_err());
        assert!(parse_betas_log("-1:-4:3").is_err());
        assert!(parse_betas_log("a:b:3").is_err());
    }

    #[test]
    fn every_rendered_key_is_settable() {
        let text = RunConfig::default().render();
        for line in text.lines() {
            let key = line.split('=').next().unwrap().trim();
            assert!(RunConfig::KEYS.contains(&key), "{key}");
        }
    }
}
