//! Flat `key = value` experiment configuration.
//!
//! One assignment per line, `#` starts a comment. Keys given as flags
//! override keys from the file. Defaults depend on the dataset, so the
//! dataset key is resolved first.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::objectives::{GeneratorVariant, GmForm, HyperParams, LossVariant};
use crate::synth::{self, GaussianMixtureSpec};
use crate::train::Architecture;

const STREAM_DATA: u64 = 0;

/// Training points sampled for the 1-D mixture.
pub const TRI1D_SIZE: usize = 6_400;
/// Epochs for the 1-D mixture.
pub const TRI1D_EPOCHS: usize = 400;

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Grid25,
    Tri1d,
    Csv(PathBuf),
}

impl Dataset {
    fn parse(v: &str) -> Self {
        match v {
            "grid25" => Dataset::Grid25,
            "tri1d" => Dataset::Tri1d,
            path => Dataset::Csv(PathBuf::from(path.strip_prefix("csv:").unwrap_or(path))),
        }
    }

    fn render(&self) -> String {
        match self {
            Dataset::Grid25 => "grid25".into(),
            Dataset::Tri1d => "tri1d".into(),
            Dataset::Csv(p) => format!("csv:{}", p.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: Dataset,
    /// Points sampled for synthetic datasets; ignored for CSV input.
    pub dataset_size: usize,
    /// Mixture override: one center per row.
    pub centers: Option<Matrix>,
    pub sigma: Option<f64>,
    pub hp: HyperParams,
    pub eval_every: u64,
    pub log_every: u64,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
}

/// Every accepted key, in rendering order.
pub const KEYS: &[&str] = &[
    "dataset",
    "dataset_size",
    "centers",
    "sigma",
    "variant",
    "loss_variant",
    "gm_form",
    "latent_affinity_grad",
    "lambda_p",
    "lambda_r",
    "lambda_m1",
    "lambda_m2",
    "alpha",
    "batch_size",
    "latent_dim",
    "epochs",
    "lr",
    "beta1",
    "beta2",
    "lr_decay_every",
    "lr_decay_base",
    "seed",
    "seeds",
    "eval_every",
    "log_every",
    "out_dir",
];

/// `key = value` pairs of a config text, in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key = value, got `{line}`", i + 1)));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{v}`: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{v}`"))),
    }
}

/// `"-2; 0; 2"` or `"0,0; 1,1"`: rows split by `;`, columns by `,`.
fn parse_centers(v: &str) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = v
        .split(';')
        .map(|r| r.split(',').map(|c| num::<f64>("centers", c.trim())).collect())
        .collect::<Result<_>>()?;
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Config("centers: rows have different lengths".into()));
    }
    Matrix::from_vec(rows.len(), d, rows.concat())
}

fn render_centers(m: &Matrix) -> String {
    (0..m.rows())
        .map(|r| m.row(r).iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join(";")
}

impl ExperimentConfig {
    /// Defaults for a dataset before any other key is applied.
    pub fn defaults_for(dataset: Dataset) -> Self {
        let mut hp = HyperParams::default();
        let mut dataset_size = 50_000;
        match &dataset {
            Dataset::Grid25 => {}
            Dataset::Tri1d => {
                hp.latent_dim = 1;
                hp.epochs = TRI1D_EPOCHS;
                dataset_size = TRI1D_SIZE;
            }
            Dataset::Csv(_) => {}
        }
        Self {
            dataset,
            dataset_size,
            centers: None,
            sigma: None,
            hp,
            eval_every: 10_000,
            log_every: 100,
            out_dir: PathBuf::from("runs"),
            seeds: vec![0],
        }
    }

    /// Builds a config from file pairs overridden by flag pairs.
    pub fn from_pairs(file: &[(String, String)], flags: &[(String, String)]) -> Result<Self> {
        let mut merged: BTreeMap<&str, &str> = BTreeMap::new();
        for (k, v) in file.iter().chain(flags) {
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            merged.insert(k, v);
        }
        let dataset = Dataset::parse(merged.get("dataset").copied().unwrap_or("grid25"));
        let mut cfg = Self::defaults_for(dataset);
        let mut seed_set = false;
        for (&k, &v) in &merged {
            cfg.apply(k, v, &mut seed_set)?;
        }
        if let Dataset::Csv(_) = cfg.dataset {
            if !merged.contains_key("latent_dim") {
                cfg.hp.latent_dim = cfg.data_dim()?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?, &[])
    }

    /// Reads an optional config file and applies flag overrides.
    pub fn load(path: Option<&Path>, flags: &[(String, String)]) -> Result<Self> {
        let file = match path {
            Some(p) => parse_pairs(&std::fs::read_to_string(p).map_err(|e| {
                Error::Config(format!("cannot read {}: {e}", p.display()))
            })?)?,
            None => Vec::new(),
        };
        Self::from_pairs(&file, flags)
    }

    fn apply(&mut self, key: &str, v: &str, seed_set: &mut bool) -> Result<()> {
        let hp = &mut self.hp;
        match key {
            "dataset" => {}
            "dataset_size" => self.dataset_size = num(key, v)?,
            "centers" => self.centers = Some(parse_centers(v)?),
            "sigma" => self.sigma = Some(num(key, v)?),
            "variant" => {
                hp.generator_variant = GeneratorVariant::parse(v).ok_or_else(|| {
                    Error::Config(format!(
                        "variant: `{v}` is not one of standard_gan, gm, ne_only, gm_ne"
                    ))
                })?
            }
            "loss_variant" => {
                hp.loss_variant = LossVariant::parse(v)
                    .ok_or_else(|| Error::Config(format!("loss_variant: `{v}` is not log or hinge")))?
            }
            "gm_form" => {
                hp.gm_form = GmForm::parse(v)
                    .ok_or_else(|| Error::Config(format!("gm_form: `{v}` is not norms or literal")))?
            }
            "latent_affinity_grad" => hp.latent_affinity_grad = parse_bool(key, v)?,
            "lambda_p" => hp.lambda_p = num(key, v)?,
            "lambda_r" => hp.lambda_r = num(key, v)?,
            "lambda_m1" => hp.lambda_m1 = num(key, v)?,
            "lambda_m2" => hp.lambda_m2 = num(key, v)?,
            "alpha" => hp.alpha = num(key, v)?,
            "batch_size" => hp.batch_size = num(key, v)?,
            "latent_dim" => hp.latent_dim = num(key, v)?,
            "epochs" => hp.epochs = num(key, v)?,
            "lr" => hp.lr = num(key, v)?,
            "beta1" => hp.beta1 = num(key, v)?,
            "beta2" => hp.beta2 = num(key, v)?,
            "lr_decay_every" => hp.lr_decay_every = num(key, v)?,
            "lr_decay_base" => hp.lr_decay_base = num(key, v)?,
            "seed" => {
                if !*seed_set {
                    self.seeds = vec![num(key, v)?];
                }
            }
            "seeds" => {
                self.seeds = parse_seeds(v)?;
                *seed_set = true;
            }
            "eval_every" => self.eval_every = num(key, v)?,
            "log_every" => self.log_every = num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        if let Some(&s) = self.seeds.first() {
            self.hp.seed = s;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        if let Dataset::Csv(p) = &self.dataset {
            if !p.exists() {
                return Err(Error::Config(format!("dataset: {} does not exist", p.display())));
            }
        }
        if self.dataset_size < self.hp.batch_size && !matches!(self.dataset, Dataset::Csv(_)) {
            return Err(Error::Config(format!(
                "dataset_size: {} is smaller than batch_size {}",
                self.dataset_size, self.hp.batch_size
            )));
        }
        if let Some(s) = self.sigma {
            if s.is_nan() || s <= 0.0 {
                return Err(Error::Config(format!("sigma: must be > 0, got {s}")));
            }
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every: must be >= 1".into()));
        }
        if self.centers.is_some() || self.sigma.is_some() {
            self.mixture()?;
        }
        Ok(())
    }

    /// Mixture used for sampling and evaluation, if any.
    pub fn mixture(&self) -> Result<Option<GaussianMixtureSpec>> {
        let base = match self.dataset {
            Dataset::Grid25 => Some(synth::grid25_spec()),
            Dataset::Tri1d => Some(synth::tri1d_spec()),
            Dataset::Csv(_) => None,
        };
        let spec = match (base, &self.centers, self.sigma) {
            (base, Some(c), s) => {
                let sigma = s.or(base.as_ref().map(|b| b.sigma)).ok_or_else(|| {
                    Error::Config("sigma: required together with centers for csv data".into())
                })?;
                Some(GaussianMixtureSpec::new(c.clone(), sigma).map_err(|e| Error::Config(format!("centers: {e}")))?)
            }
            (Some(b), None, Some(s)) => {
                Some(GaussianMixtureSpec::new(b.centers, s).map_err(|e| Error::Config(format!("sigma: {e}")))?)
            }
            (base, None, _) => base,
        };
        Ok(spec)
    }

    fn data_dim(&self) -> Result<usize> {
        match &self.dataset {
            Dataset::Csv(p) => Ok(self.read_csv(p)?.cols()),
            _ => Ok(self.mixture()?.map_or(2, |m| m.dim())),
        }
    }

    fn read_csv(&self, p: &Path) -> Result<Matrix> {
        let text = std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("dataset: cannot read {}: {e}", p.display())))?;
        synth::read_csv(&text)
    }

    /// Training data for one run seed.
    pub fn training_data(&self, seed: u64) -> Result<Matrix> {
        match &self.dataset {
            Dataset::Csv(p) => self.read_csv(p),
            _ => {
                let spec = self.mixture()?.expect("synthetic datasets have a mixture");
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(STREAM_DATA);
                Ok(synth::sample_data(&spec, self.dataset_size, &mut rng))
            }
        }
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Ok(Architecture::for_data_dim(self.data_dim()?, self.hp.latent_dim))
    }

    /// Hyper-parameters of the run with the given seed.
    pub fn hp_for_seed(&self, seed: u64) -> HyperParams {
        HyperParams { seed, ..self.hp.clone() }
    }

    /// Canonical text of everything that shapes a run's model, for one seed.
    /// Output paths, logging cadence and the seed list are left out.
    pub fn model_text(&self, seed: u64) -> String {
        let hp = self.hp_for_seed(seed);
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("dataset", self.dataset.render());
        put("dataset_size", self.dataset_size.to_string());
        if let Some(c) = &self.centers {
            put("centers", render_centers(c));
        }
        if let Some(sg) = self.sigma {
            put("sigma", format!("{sg:?}"));
        }
        put("variant", hp.generator_variant.name().into());
        put("loss_variant", hp.loss_variant.name().into());
        put("gm_form", hp.gm_form.name().into());
        put("latent_affinity_grad", hp.latent_affinity_grad.to_string());
        put("lambda_p", format!("{:?}", hp.lambda_p));
        put("lambda_r", format!("{:?}", hp.lambda_r));
        put("lambda_m1", format!("{:?}", hp.lambda_m1));
        put("lambda_m2", format!("{:?}", hp.lambda_m2));
        put("alpha", format!("{:?}", hp.alpha));
        put("batch_size", hp.batch_size.to_string());
        put("latent_dim", hp.latent_dim.to_string());
        put("epochs", hp.epochs.to_string());
        put("lr", format!("{:?}", hp.lr));
        put("beta1", format!("{:?}", hp.beta1));
        put("beta2", format!("{:?}", hp.beta2));
        put("lr_decay_every", hp.lr_decay_every.to_string());
        put("lr_decay_base", format!("{:?}", hp.lr_decay_base));
        put("seed", seed.to_string());
        s
    }

    /// Full config text that parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = self.model_text(self.seeds[0]);
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "seeds = {}", seeds.join(","));
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        let _ = writeln!(s, "log_every = {}", self.log_every);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        s
    }

    /// First 8 bytes of the SHA-256 of [`Self::model_text`].
    pub fn config_hash(&self, seed: u64) -> u64 {
        let digest = Sha256::digest(self.model_text(seed).as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

fn parse_seeds(v: &str) -> Result<Vec<u64>> {
    // Either a comma list or an inclusive range `a..b`.
    if let Some((a, b)) = v.split_once("..") {
        let a: u64 = num("seeds", a.trim())?;
        let b: u64 = num("seeds", b.trim().trim_start_matches('='))?;
        if b < a {
            return Err(Error::Config(format!("seeds: empty range `{v}`")));
        }
        return Ok((a..=b).collect());
    }
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| num("seeds", s.trim()))
        .collect()
}
