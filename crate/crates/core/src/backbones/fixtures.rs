use std::path::{Path, PathBuf};

use super::lm::{lm_forward, pretrain_toy_lm, CorpusLine, LmConfig, PretrainConfig};
use super::synth::{generate_synthetic_task, parse_jsonl, to_jsonl, Dataset, QualifyLine, SyntheticTask};
use super::vision::{blank_features, encode_image, init_vision, ToyImage};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::inference::argmax;
use crate::mapper::VisualFeatures;
use crate::tensor::{Checkpoint, ParameterSet};

pub const VISION_FILE: &str = "vision.ckpt";
pub const LM_FILE: &str = "lm.ckpt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Offset separating the vision-encoder stream from the LM stream.
const VISION_SEED_SALT: u64 = 0x7669_7369_6f6e;

/// Both frozen models plus the vocabulary they share.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbones {
    pub vocab: Vocabulary,
    pub lm_cfg: LmConfig,
    pub lm: ParameterSet,
    pub vision: ParameterSet,
    pub grid: usize,
    pub colors: usize,
}

impl Backbones {
    pub fn d_in(&self) -> usize {
        self.vision
            .get("color_proj")
            .map(|t| t.shape()[1])
            .unwrap_or(0)
    }

    /// Encoder output for `img`, or zeros of the same shape when `blind`.
    pub fn features(&self, img: &ToyImage, blind: bool) -> Result<VisualFeatures> {
        if blind {
            blank_features(&self.vision)
        } else {
            encode_image(img, &self.vision)
        }
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let vocab = Vocabulary::load(dir.join(VOCAB_FILE))?;
        let vision = Checkpoint::load(dir.join(VISION_FILE))?;
        let lm = Checkpoint::load(dir.join(LM_FILE))?;
        let header_usize = |ck: &Checkpoint, key: &str| -> Result<usize> {
            ck.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("header key `{key}` missing or invalid")))
        };
        for (ck, want) in [(&vision, "vision"), (&lm, "lm")] {
            if ck.get("component") != Some(want) {
                return Err(Error::Checkpoint(format!("expected component={want}")));
            }
        }
        let lm_cfg = LmConfig::from_pairs(lm.header.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        if lm_cfg.vocab_size != vocab.len() {
            return Err(Error::Checkpoint(format!(
                "LM expects {} tokens, vocabulary has {}",
                lm_cfg.vocab_size,
                vocab.len()
            )));
        }
        Ok(Self {
            grid: header_usize(&vision, "grid")?,
            colors: header_usize(&vision, "colors")?,
            vocab,
            lm_cfg,
            lm: lm.params,
            vision: vision.params,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureConfig {
    pub grid: usize,
    pub colors: usize,
    pub d_in: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
    pub pretrain: PretrainConfig,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            grid: 3,
            colors: 5,
            d_in: 32,
            n_train: 2000,
            n_eval: 200,
            seed: 0,
            pretrain: PretrainConfig::default(),
        }
    }
}

impl FixtureConfig {
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let p = &self.pretrain;
        [
            ("grid", self.grid.to_string()),
            ("colors", self.colors.to_string()),
            ("d_in", self.d_in.to_string()),
            ("n_train", self.n_train.to_string()),
            ("n_eval", self.n_eval.to_string()),
            ("seed", self.seed.to_string()),
            ("pretrain.steps", p.steps.to_string()),
            ("pretrain.batch_size", p.batch_size.to_string()),
            ("pretrain.lr", p.lr.to_string()),
            ("pretrain.warmup", p.warmup.to_string()),
            ("pretrain.weight_decay", p.weight_decay.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Fixtures {
    pub config: FixtureConfig,
    pub backbones: Backbones,
    pub task: SyntheticTask,
    pub lm_initial_loss: f64,
    pub lm_final_loss: f64,
    /// Greedy accuracy of the frozen LM on the held-out question lines.
    pub qualification: f64,
}

impl Fixtures {
    pub fn dataset(&self) -> Dataset {
        Dataset::from(&self.task)
    }

    /// Writes the five fixture files and returns their paths.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let b = &self.backbones;
        let mut vision = Checkpoint::new(b.vision.clone()).with("component", "vision");
        for (k, v) in [
            ("grid", b.grid),
            ("colors", b.colors),
            ("d_in", b.d_in()),
        ] {
            vision.set(k, v);
        }
        vision.set("seed", self.config.seed ^ VISION_SEED_SALT);
        let mut lm = Checkpoint::new(b.lm.clone()).with("component", "lm");
        for (k, v) in b.lm_cfg.to_pairs() {
            lm.set(k, v);
        }
        lm.set("initial_loss", self.lm_initial_loss);
        lm.set("final_loss", self.lm_final_loss);
        lm.set("qualification", self.qualification);

        let mut manifest = String::from("command = make-fixtures\n");
        for (k, v) in self.config.to_pairs() {
            manifest.push_str(&format!("{k} = {v}\n"));
        }
        manifest.push_str(&format!("lm.final_loss = {}\n", self.lm_final_loss));
        manifest.push_str(&format!("lm.qualification = {}\n", self.qualification));

        let paths = [VISION_FILE, LM_FILE, VOCAB_FILE, DATASET_FILE, MANIFEST_FILE].map(|f| dir.join(f));
        vision.save(&paths[0])?;
        lm.save(&paths[1])?;
        let write = |p: &Path, text: &str| std::fs::write(p, text).map_err(|e| Error::io(p, e));
        write(&paths[2], &b.vocab.to_file_contents())?;
        write(&paths[3], &to_jsonl(&self.task))?;
        write(&paths[4], &manifest)?;
        Ok(paths.to_vec())
    }
}

/// Frozen backbones and the dataset read back from a fixture directory.
pub fn load_fixtures(dir: impl AsRef<Path>) -> Result<(Backbones, Dataset)> {
    let dir = dir.as_ref();
    let backbones = Backbones::load(dir)?;
    let path = dir.join(DATASET_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok((backbones, parse_jsonl(&text)?))
}

/// Fraction of held-out lines whose next greedy token is the answer.
pub fn qualify_lm(backbones: &Backbones, lines: &[QualifyLine]) -> Result<f64> {
    if lines.is_empty() {
        return Err(Error::Data("no qualification lines".into()));
    }
    let mut correct = 0;
    for line in lines {
        let ids = backbones.vocab.tokenize(&line.prompt)?;
        let logits = lm_forward(&backbones.lm_cfg, &backbones.lm, None, &ids)?;
        let next = argmax(logits.row(ids.len() - 1));
        if backbones.vocab.token(next) == Some(line.answer.as_str()) {
            correct += 1;
        }
    }
    Ok(correct as f64 / lines.len() as f64)
}

/// Generates the task, draws the vision encoder, pre-trains and freezes the
/// LM, and measures its qualification accuracy.
pub fn build_fixtures(cfg: &FixtureConfig) -> Result<Fixtures> {
    let vocab = Vocabulary::toy();
    let task = generate_synthetic_task(cfg.grid, cfg.colors, cfg.n_train, cfg.n_eval, cfg.seed)?;
    let vision = init_vision(cfg.grid, cfg.colors, cfg.d_in, cfg.seed ^ VISION_SEED_SALT)?;
    let corpus = task
        .corpus
        .iter()
        .map(|e| {
            Ok(CorpusLine {
                ids: vocab.tokenize(&e.text)?,
                scored: e.scored.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let lm_cfg = LmConfig::toy(vocab.len());
    let pretrain = PretrainConfig {
        seed: cfg.seed,
        ..cfg.pretrain
    };
    let lm = pretrain_toy_lm(&corpus, &lm_cfg, &pretrain)?;
    let backbones = Backbones {
        vocab,
        lm_cfg,
        lm: lm.params,
        vision,
        grid: cfg.grid,
        colors: cfg.colors,
    };
    let qualification = qualify_lm(&backbones, &task.qualify)?;
    Ok(Fixtures {
        config: *cfg,
        backbones,
        task,
        lm_initial_loss: lm.initial_loss,
        lm_final_loss: lm.final_loss,
        qualification,
    })
}
