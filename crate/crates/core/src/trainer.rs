//! Captioning objective through the frozen LM, and the training loop around it.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbones::synth::CaptionExample;
use crate::backbones::{lm, Backbones, Piece};
use crate::datafilter::fraction_count;
use crate::error::{Error, Result};
use crate::mapper::{self, Mapper, MapperConfig};
use crate::sampling::EpochSampler;
use crate::tensor::{
    adamw_step, analytic_grads, finite_diff_check, finite_diff_check_against, linear_warmup, AdamW,
    GradCheckReport, OptimizerState, ParameterSet, Tape, Var,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub minival_fraction: f64,
    pub blind: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 3e-4,
            warmup_steps: 1500,
            batch_size: 128,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            max_steps: 10_000,
            eval_every: 100,
            patience: 3,
            minival_fraction: 0.06,
            blind: false,
            seed: 0,
        }
    }
}

/// Warmup used instead of the default when training on 1% of the data.
pub const SMALL_DATA_WARMUP: usize = 15;

impl TrainConfig {
    /// Settings for the toy task.
    pub fn toy() -> Self {
        Self {
            lr_peak: 2e-3,
            warmup_steps: 50,
            batch_size: 32,
            max_steps: 500,
            eval_every: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("warmup_steps", self.warmup_steps),
            ("batch_size", self.batch_size),
            ("max_steps", self.max_steps),
            ("eval_every", self.eval_every),
            ("patience", self.patience),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("train.{field}"), "must be at least 1"));
            }
        }
        if !(self.minival_fraction > 0.0 && self.minival_fraction < 1.0) {
            return Err(Error::config("train.minival_fraction", "must lie in (0, 1)"));
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return Err(Error::config("train.lr_peak", "must be positive"));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("lr_peak", self.lr_peak.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("patience", self.patience.to_string()),
            ("minival_fraction", self.minival_fraction.to_string()),
            ("blind", self.blind.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("train.{k}"), v))
        .collect()
    }

    /// Applies one `train.<field>` (or bare `<field>`) assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let field = key.strip_prefix("train.").unwrap_or(key);
        let bad = |what: &str| Error::config(format!("train.{field}"), format!("`{value}` is not {what}"));
        let int = || value.parse::<usize>().map_err(|_| bad("a non-negative integer"));
        let float = || value.parse::<f64>().map_err(|_| bad("a number"));
        match field {
            "lr_peak" => self.lr_peak = float()?,
            "warmup_steps" => self.warmup_steps = int()?,
            "batch_size" => self.batch_size = int()?,
            "beta1" => self.beta1 = float()?,
            "beta2" => self.beta2 = float()?,
            "weight_decay" => self.weight_decay = float()?,
            "max_steps" => self.max_steps = int()?,
            "eval_every" => self.eval_every = int()?,
            "patience" => self.patience = int()?,
            "minival_fraction" => self.minival_fraction = float()?,
            "blind" => self.blind = value.parse().map_err(|_| bad("true or false"))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("an unsigned integer"))?,
            _ => return Err(Error::config(key, "unknown train field")),
        }
        Ok(())
    }

    fn adamw(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: AdamW::default().eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Learning rate at 1-based `step`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    linear_warmup(step as u64, cfg.warmup_steps as u64, cfg.lr_peak)
}

/// Mean over the batch of each caption's mean token NLL given its mapped
/// image prefix.
pub fn caption_loss(
    tape: &mut Tape,
    mapper: &Mapper,
    backbones: &Backbones,
    batch: &[&CaptionExample],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Data("empty caption batch".into()));
    }
    let prefix_len = mapper.cfg.output_len();
    let room = backbones.lm_cfg.max_positions.saturating_sub(prefix_len);
    let mut feats = Vec::with_capacity(batch.len());
    let mut captions = Vec::with_capacity(batch.len());
    for ex in batch {
        let ids = backbones.vocab.tokenize(&ex.caption)?;
        if ids.is_empty() {
            return Err(Error::Data("empty caption".into()));
        }
        if ids.len() > room {
            return Err(Error::Length(format!(
                "caption of {} tokens exceeds the {room} positions left after the prefix",
                ids.len()
            )));
        }
        captions.push(ids);
        feats.push(tape.constant(backbones.features(&ex.image, mapper.blind)?.0));
    }
    let prefixes = mapper::forward(tape, &mapper.cfg, &mapper.params, &feats)?;
    let seqs: Vec<Vec<Piece>> = prefixes
        .iter()
        .zip(&captions)
        .map(|(&p, ids)| vec![Piece::Embeds(p), Piece::Tokens(ids[..ids.len() - 1].to_vec())])
        .collect();
    let out = lm::forward(tape, &backbones.lm_cfg, &backbones.lm, &seqs)?;
    let mut total: Option<Var> = None;
    for (ids, &(start, _)) in captions.iter().zip(&out.segments) {
        // The last prefix row predicts the first caption token.
        let rows = tape.slice_rows(out.logits, start + prefix_len - 1, ids.len())?;
        let nll = tape.cross_entropy(rows, ids, &vec![true; ids.len()])?;
        total = Some(match total {
            Some(t) => tape.add(t, nll)?,
            None => nll,
        });
    }
    let total = total.expect("non-empty batch");
    Ok(tape.scale(total, 1.0 / batch.len() as f64))
}

/// Mean caption loss over `examples`, evaluated in chunks of `chunk`.
pub fn eval_loss(
    mapper: &Mapper,
    backbones: &Backbones,
    examples: &[&CaptionExample],
    chunk: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mut tape = Tape::new();
    let mut sum = 0.0;
    for part in examples.chunks(chunk.max(1)) {
        tape.reset();
        let loss = caption_loss(&mut tape, mapper, backbones, part)?;
        sum += tape.value(loss).data()[0] * part.len() as f64;
    }
    Ok(sum / examples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub lr: f64,
    /// `None` for the evaluation before the first step.
    pub train_loss: Option<f64>,
    pub minival_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the evaluation with the lowest minival loss.
    pub best: Mapper,
    pub best_step: usize,
    pub best_minival: f64,
    pub initial_minival: f64,
    pub steps_run: usize,
    pub curve: Vec<CurvePoint>,
}

impl TrainOutcome {
    pub fn minival_history(&self) -> impl Iterator<Item = f64> + '_ {
        self.curve.iter().filter_map(|p| p.minival_loss)
    }
}

/// `step,lr,train_loss,minival_loss`; missing values are left empty.
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("step,lr,train_loss,minival_loss\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for p in curve {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.step,
            p.lr,
            opt(p.train_loss),
            opt(p.minival_loss)
        ));
    }
    out
}

/// Splits `dataset` into (train, minival) after a seeded shuffle; minival is
/// the last `ceil(fraction * N)` examples.
pub fn carve_minival(dataset: &[CaptionExample], fraction: f64, seed: u64) -> (Vec<&CaptionExample>, Vec<&CaptionExample>) {
    let mut order: Vec<&CaptionExample> = dataset.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = fraction_count(dataset.len(), fraction).max(1).min(dataset.len());
    let minival = order.split_off(dataset.len() - n_val);
    (order, minival)
}

/// Trains a fresh mapper with early stopping on minival loss.
pub fn train(
    mapper_cfg: &MapperConfig,
    cfg: &TrainConfig,
    backbones: &Backbones,
    dataset: &[CaptionExample],
) -> Result<TrainOutcome> {
    train_with_progress(mapper_cfg, cfg, backbones, dataset, |_| {})
}

/// [`train`], reporting every curve point as it is produced.
pub fn train_with_progress(
    mapper_cfg: &MapperConfig,
    cfg: &TrainConfig,
    backbones: &Backbones,
    dataset: &[CaptionExample],
    mut progress: impl FnMut(&CurvePoint),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    mapper_cfg.validate()?;
    let (train_set, minival) = carve_minival(dataset, cfg.minival_fraction, cfg.seed);
    if train_set.len() < cfg.batch_size {
        return Err(Error::Data(format!(
            "{} training examples after carving minival, batch size is {}",
            train_set.len(),
            cfg.batch_size
        )));
    }
    let mut mapper = Mapper::init(*mapper_cfg, cfg.seed, cfg.blind)?;
    let hp = cfg.adamw();
    let mut state = OptimizerState::new();
    let mut sampler = EpochSampler::new(train_set.len(), cfg.seed.wrapping_add(1));
    let mut tape = Tape::new();

    let initial = eval_loss(&mapper, backbones, &minival, cfg.batch_size)?;
    let mut curve = vec![CurvePoint {
        step: 0,
        lr: 0.0,
        train_loss: None,
        minival_loss: Some(initial),
    }];
    progress(&curve[0]);
    let mut best = mapper.clone();
    let (mut best_loss, mut best_step) = (initial, 0);
    let mut stale = 0;
    let mut steps_run = 0;

    for step in 1..=cfg.max_steps {
        let lr = lr_at(step, cfg);
        let batch: Vec<&CaptionExample> = sampler
            .next_batch(cfg.batch_size)
            .into_iter()
            .map(|i| train_set[i])
            .collect();
        tape.reset();
        let loss = caption_loss(&mut tape, &mapper, backbones, &batch)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                lr,
                loss: value,
            });
        }
        tape.backward(loss)?;
        mapper.params.pull_grads(&tape)?;
        adamw_step(&mut mapper.params, &mut state, lr, &hp)?;
        steps_run = step;

        let evaluate = step % cfg.eval_every == 0 || step == cfg.max_steps;
        let minival_loss = if evaluate {
            Some(eval_loss(&mapper, backbones, &minival, cfg.batch_size)?)
        } else {
            None
        };
        let point = CurvePoint {
            step,
            lr,
            train_loss: Some(value),
            minival_loss,
        };
        progress(&point);
        curve.push(point);
        if let Some(m) = minival_loss {
            if m < best_loss {
                best_loss = m;
                best_step = step;
                best = mapper.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }

    Ok(TrainOutcome {
        best,
        best_step,
        best_minival: best_loss,
        initial_minival: initial,
        steps_run,
        curve,
    })
}

/// Largest finite-difference discrepancy tolerated on coordinates whose
/// exact gradient is zero.
pub const ZERO_GRAD_TOLERANCE: f64 = 1e-8;

/// Key-projection biases shift every score of a query equally, which the
/// softmax ignores, so their gradient is identically zero.
pub fn has_zero_gradient(name: &str) -> bool {
    name.ends_with(".attn.k.b")
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapperGradCheck {
    /// Coordinates with an informative gradient.
    pub informative: GradCheckReport,
    /// Coordinates whose gradient is zero by construction, if any.
    pub zero: Option<GradCheckReport>,
}

impl MapperGradCheck {
    /// Relative error over every checked coordinate.
    pub fn overall_relative_error(&self) -> f64 {
        let zero = self.zero.as_ref().map_or(0.0, |z| z.max_relative_error);
        self.informative.max_relative_error.max(zero)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.informative.max_relative_error < tolerance
            && self.zero.as_ref().is_none_or(|z| z.max_abs_error < ZERO_GRAD_TOLERANCE)
    }
}

/// Finite-difference check of the caption loss with respect to the mapper,
/// through the frozen backbones. With `corrupt`, the first analytic gradient
/// is perturbed before the comparison.
pub fn mapper_grad_check(
    mapper: &Mapper,
    backbones: &Backbones,
    batch: &[CaptionExample],
    h: f64,
    samples: Option<usize>,
    corrupt: bool,
) -> Result<MapperGradCheck> {
    let refs: Vec<&CaptionExample> = batch.iter().collect();
    let loss = |tape: &mut Tape, params: &ParameterSet| {
        let m = Mapper {
            cfg: mapper.cfg,
            params: params.clone(),
            blind: mapper.blind,
        };
        caption_loss(tape, &m, backbones, &refs)
    };
    let zero_names: Vec<String> = mapper
        .params
        .iter()
        .filter(|(n, p)| !p.frozen && has_zero_gradient(n))
        .map(|(n, _)| n.to_string())
        .collect();

    let mut informative = mapper.params.clone();
    for n in &zero_names {
        informative.set_frozen(n, true)?;
    }
    let mut analytic = analytic_grads(&loss, &informative)?;
    if corrupt {
        let name = analytic
            .iter()
            .find(|(_, p)| !p.frozen)
            .map(|(n, _)| n.to_string())
            .ok_or_else(|| Error::Gradient("no trainable parameters".into()))?;
        let t = analytic.get_mut(&name)?;
        let g: Vec<f64> = t.grad().unwrap_or_default().iter().map(|v| v * 1.5 + 1e-3).collect();
        t.set_grad(g)?;
    }
    let informative = finite_diff_check_against(loss, &informative, &analytic, h, samples)?;

    let zero = if zero_names.is_empty() {
        None
    } else {
        let mut only = mapper.params.clone();
        only.freeze_all();
        for n in &zero_names {
            only.set_frozen(n, false)?;
        }
        Some(finite_diff_check(loss, &only, h, samples)?)
    };
    Ok(MapperGradCheck { informative, zero })
}
