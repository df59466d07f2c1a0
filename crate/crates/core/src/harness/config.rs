//! Flat `key = value` run configuration.
//!
//! Keys are the field names of [`CodecConfig`], [`CorpusSpec`],
//! [`LossWeights`] and [`TrainOptions`]. `sample_rate` and `seed` appear in
//! several of them and set all of them. Lists are comma-separated; `#`
//! starts a comment.

use std::path::Path;
use std::str::FromStr;

use crate::audio::CorpusSpec;
use crate::codec::CodecConfig;
use crate::error::{Error, Result};
use crate::training::{LossWeights, TrainOptions};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub codec: CodecConfig,
    pub corpus: CorpusSpec,
    pub weights: LossWeights,
    pub train: TrainOptions,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Format(format!("invalid value '{value}' for '{key}'")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected 'key = value'", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        }
        cfg.codec.validate()?;
        cfg.corpus.validate()?;
        cfg.weights.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one field by name.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (c, s, w, t) = (&mut self.codec, &mut self.corpus, &mut self.weights, &mut self.train);
        match key {
            "sample_rate" => {
                c.sample_rate = parse(key, v)?;
                s.sample_rate = c.sample_rate;
            }
            "seed" => {
                c.seed = parse(key, v)?;
                s.seed = c.seed;
                t.seed = c.seed;
            }
            "frame_size" => c.frame_size = parse(key, v)?,
            "hop" => c.hop = parse(key, v)?,
            "latent_dim" => c.latent_dim = parse(key, v)?,
            "code_dim" => c.code_dim = parse(key, v)?,
            "n_levels" => c.n_levels = parse(key, v)?,
            "codebook_size" => c.codebook_size = parse(key, v)?,
            "encoder_hidden" => c.encoder_hidden = parse_list(key, v)?,
            "n_clips" => s.n_clips = parse(key, v)?,
            "clip_seconds" => s.clip_seconds = parse(key, v)?,
            "mix" => {
                let m: Vec<f64> = parse_list(key, v)?;
                s.mix = m
                    .try_into()
                    .map_err(|_| Error::Format("'mix' needs exactly four weights".into()))?;
            }
            "recon_wave" => w.recon_wave = parse(key, v)?,
            "recon_spec" => w.recon_spec = parse(key, v)?,
            "commit" => w.commit = parse(key, v)?,
            "codebook" => w.codebook = parse(key, v)?,
            "idem" => w.idem = parse(key, v)?,
            "idem_kind" => w.idem_kind = v.parse()?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "excerpt_seconds" => t.excerpt_seconds = parse(key, v)?,
            "lr" => t.optimizer.lr = parse(key, v)?,
            "beta1" => t.optimizer.beta1 = parse(key, v)?,
            "beta2" => t.optimizer.beta2 = parse(key, v)?,
            "weight_decay" => t.optimizer.weight_decay = parse(key, v)?,
            "grad_clip" => t.optimizer.grad_clip = parse(key, v)?,
            "warmup_steps" => t.warmup_steps = parse(key, v)?,
            "val_every" => t.val_every = parse(key, v)?,
            "log_every" => t.log_every = parse(key, v)?,
            "kmeans_excerpts" => t.kmeans_excerpts = parse(key, v)?,
            "freeze_projections" => t.freeze_projections = parse(key, v)?,
            "detach_roundtrip" => t.detach_roundtrip = parse(key, v)?,
            "val_seconds" => t.val_seconds = parse(key, v)?,
            "dropout_prob" => t.dropout_prob = parse(key, v)?,
            other => return Err(Error::Format(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Sets every seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.codec.seed = seed;
        self.corpus.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Text that parses back to `self`.
    pub fn to_text(&self) -> String {
        let (c, s, w, t) = (&self.codec, &self.corpus, &self.weights, &self.train);
        let list = |v: &[String]| v.join(",");
        let hidden: Vec<String> = c.encoder_hidden.iter().map(ToString::to_string).collect();
        let mix: Vec<String> = s.mix.iter().map(ToString::to_string).collect();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        kv("sample_rate", c.sample_rate.to_string());
        kv("seed", c.seed.to_string());
        kv("frame_size", c.frame_size.to_string());
        kv("hop", c.hop.to_string());
        kv("latent_dim", c.latent_dim.to_string());
        kv("code_dim", c.code_dim.to_string());
        kv("n_levels", c.n_levels.to_string());
        kv("codebook_size", c.codebook_size.to_string());
        kv("encoder_hidden", list(&hidden));
        kv("n_clips", s.n_clips.to_string());
        kv("clip_seconds", s.clip_seconds.to_string());
        kv("mix", list(&mix));
        kv("recon_wave", w.recon_wave.to_string());
        kv("recon_spec", w.recon_spec.to_string());
        kv("commit", w.commit.to_string());
        kv("codebook", w.codebook.to_string());
        kv("idem", w.idem.to_string());
        kv("idem_kind", w.idem_kind.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("excerpt_seconds", t.excerpt_seconds.to_string());
        kv("lr", t.optimizer.lr.to_string());
        kv("beta1", t.optimizer.beta1.to_string());
        kv("beta2", t.optimizer.beta2.to_string());
        kv("weight_decay", t.optimizer.weight_decay.to_string());
        kv("grad_clip", t.optimizer.grad_clip.to_string());
        kv("warmup_steps", t.warmup_steps.to_string());
        kv("val_every", t.val_every.to_string());
        kv("log_every", t.log_every.to_string());
        kv("kmeans_excerpts", t.kmeans_excerpts.to_string());
        kv("freeze_projections", t.freeze_projections.to_string());
        kv("detach_roundtrip", t.detach_roundtrip.to_string());
        kv("val_seconds", t.val_seconds.to_string());
        kv("dropout_prob", t.dropout_prob.to_string());
        out
    }
}
