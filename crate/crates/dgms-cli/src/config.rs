//! Flat key=value run configuration. One pair per line, `#` starts a
//! comment. Every key is documented in the README; unknown keys are
//! rejected so typos fail fast.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dgms::data::{load_cifar10_binary, synth_blobs, CifarNorm, Dataset};
use dgms::error::{Error, Result};
use dgms::gm::{GammaInit, GmInitOptions, PiMode};
use dgms::model::{build_cnn, build_mlp, ModelSpec, QuantPolicy};
use dgms::train::{OneCycleSchedule, TrainConfig};

const KNOWN_KEYS: &[&str] = &[
    "model",
    "hidden",
    "dataset",
    "data_path",
    "train_n",
    "test_n",
    "classes",
    "samples",
    "test_samples",
    "spread",
    "bits",
    "k",
    "tau_init",
    "tau_mode",
    "gamma_init",
    "pi_mode",
    "act_bits",
    "lr_max",
    "epochs",
    "batch",
    "seed",
    "skip_layers",
    "cifar_mean",
    "cifar_std",
];

#[derive(Debug, Clone, Default)]
pub struct Config {
    raw: BTreeMap<String, String>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        let mut raw = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key = value", no + 1))
            })?;
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "config line {}: unknown key {key:?}",
                    no + 1
                )));
            }
            raw.insert(key, value.trim().to_string());
        }
        Ok(Config { raw })
    }

    pub fn set(&mut self, key: &str, value: String) {
        self.raw.insert(key.to_string(), value);
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.raw.get(key).map(|s| s.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<T>()
                .map_err(|_| Error::Config(format!("config: bad value {v:?} for key {key}"))),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed", 42)
    }

    pub fn bits(&self) -> Result<u8> {
        self.parse("bits", 4)
    }

    pub fn k_plus_one(&self) -> Result<Option<usize>> {
        Ok(match self.get("k") {
            None => None,
            Some(v) => Some(
                v.parse::<usize>()
                    .map_err(|_| Error::Config(format!("config: bad value {v:?} for key k")))?,
            ),
        })
    }

    pub fn epochs(&self) -> Result<usize> {
        self.parse("epochs", 30)
    }

    pub fn batch(&self) -> Result<usize> {
        self.parse("batch", 32)
    }

    pub fn lr_max(&self) -> Result<f64> {
        self.parse("lr_max", 1e-2)
    }

    pub fn act_bits(&self) -> Result<u8> {
        self.parse("act_bits", 32)
    }

    pub fn tau_init(&self) -> Result<f64> {
        self.parse("tau_init", 0.01)
    }

    pub fn tau_learned(&self) -> Result<bool> {
        match self.get("tau_mode").unwrap_or("fixed") {
            "fixed" => Ok(false),
            "learned" => Ok(true),
            other => Err(Error::Config(format!("config: tau_mode must be fixed|learned, got {other:?}"))),
        }
    }

    pub fn pi_mode(&self) -> Result<PiMode> {
        match self.get("pi_mode").unwrap_or("simplex") {
            "simplex" => Ok(PiMode::Simplex),
            "unconstrained" => Ok(PiMode::Unconstrained),
            other => Err(Error::Config(format!(
                "config: pi_mode must be simplex|unconstrained, got {other:?}"
            ))),
        }
    }

    pub fn gamma_init(&self) -> Result<GammaInit> {
        let v = self.get("gamma_init").unwrap_or("empirical:0.01");
        if v == "std" {
            return Ok(GammaInit::Std);
        }
        if let Some(num) = v.strip_prefix("empirical:") {
            let g: f64 = num
                .parse()
                .map_err(|_| Error::Config(format!("config: bad gamma_init value {v:?}")))?;
            if !(g > 0.0) {
                return Err(Error::Config(format!("config: gamma_init must be positive, got {g}")));
            }
            return Ok(GammaInit::Empirical(g));
        }
        Err(Error::Config(format!(
            "config: gamma_init must be std or empirical:VALUE, got {v:?}"
        )))
    }

    pub fn gm_init_options(&self) -> Result<GmInitOptions> {
        Ok(GmInitOptions {
            gamma_init: self.gamma_init()?,
            tau_init: self.tau_init()?,
            pi_mode: self.pi_mode()?,
            max_iters: 100,
        })
    }

    pub fn skip_layers(&self) -> Vec<String> {
        self.get("skip_layers")
            .map(|v| {
                v.split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            })
            .unwrap_or_default()
    }

    fn classes(&self) -> Result<usize> {
        let default = match self.get("dataset").unwrap_or("blobs") {
            "cifar10" => 10,
            _ => 2,
        };
        self.parse("classes", default)
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        match self.get("model").unwrap_or("mlp") {
            "mlp" => {
                let classes = self.classes()?;
                let in_dim = match self.get("dataset").unwrap_or("blobs") {
                    "blobs" => classes.max(2),
                    "cifar10" => {
                        return Err(Error::Config(
                            "config: model=mlp is only wired to dataset=blobs".into(),
                        ))
                    }
                    other => return Err(Error::Config(format!("config: unknown dataset {other:?}"))),
                };
                build_mlp(in_dim, self.parse("hidden", 16)?, classes)
            }
            "cnn" => build_cnn(self.classes()?),
            other => Err(Error::Config(format!("config: unknown model {other:?}"))),
        }
    }

    pub fn policy(&self, spec: &ModelSpec) -> Result<QuantPolicy> {
        let mut p = QuantPolicy::for_model(spec, self.bits()?, self.k_plus_one()?, &self.skip_layers())?;
        p.act_bits = self.act_bits()?;
        Ok(p)
    }

    fn triple(&self, key: &str, default: [f64; 3]) -> Result<[f64; 3]> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => {
                let parts: Vec<f64> = v
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Config(format!("config: bad triple {v:?} for {key}")))?;
                if parts.len() != 3 {
                    return Err(Error::Config(format!("config: {key} needs 3 comma-separated values")));
                }
                Ok([parts[0], parts[1], parts[2]])
            }
        }
    }

    pub fn load_dataset(&self) -> Result<(Dataset, Dataset)> {
        let seed = self.seed()?;
        match self.get("dataset").unwrap_or("blobs") {
            "blobs" => {
                let classes = self.classes()?;
                let n: usize = self.parse("samples", 1000)?;
                let test_n: usize = self.parse("test_samples", (n / 5).max(1))?;
                let spread: f64 = self.parse("spread", 0.1)?;
                let train = synth_blobs(classes, n, spread, seed)?;
                let test = synth_blobs(classes, test_n, spread, seed.wrapping_add(1))?;
                Ok((train, test))
            }
            "cifar10" => {
                let dir = self
                    .get("data_path")
                    .ok_or_else(|| Error::Config("config: dataset=cifar10 needs data_path".into()))?;
                let train_n: usize = self.parse("train_n", 5000)?;
                let test_n: usize = self.parse("test_n", 1000)?;
                let norm = CifarNorm {
                    mean: self.triple("cifar_mean", CifarNorm::default().mean)?,
                    std: self.triple("cifar_std", CifarNorm::default().std)?,
                };
                load_cifar10_binary(&PathBuf::from(dir), train_n, test_n, seed, &norm)
            }
            other => Err(Error::Config(format!("config: unknown dataset {other:?}"))),
        }
    }

    pub fn train_config(&self, train_len: usize, epochs: usize) -> Result<TrainConfig> {
        let batch = self.batch()?;
        let steps = train_len.div_ceil(batch.max(1)) * epochs.max(1);
        Ok(TrainConfig::new(
            epochs,
            batch,
            OneCycleSchedule::new(self.lr_max()?, steps, 0.3)?,
        ))
    }
}
