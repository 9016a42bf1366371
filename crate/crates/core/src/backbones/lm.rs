//! Small GPT-style causal language model used as the frozen text backbone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mapper::MappedPrefix;
use crate::nn;
use crate::sampling::EpochSampler;
use crate::tensor::{adamw_step, linear_warmup, AdamW, Attention, OptimizerState, ParameterSet, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub ffn_ratio: usize,
}

impl LmConfig {
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            depth: 2,
            heads: 4,
            max_positions: 160,
            ffn_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("depth", self.depth),
            ("heads", self.heads),
            ("max_positions", self.max_positions),
            ("ffn_ratio", self.ffn_ratio),
        ] {
            if v == 0 {
                return Err(Error::config(format!("lm.{field}"), "must be at least 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(
                "lm.d_model",
                format!("{} is not divisible by {} heads", self.d_model, self.heads),
            ));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("depth", self.depth),
            ("heads", self.heads),
            ("max_positions", self.max_positions),
            ("ffn_ratio", self.ffn_ratio),
        ]
        .into_iter()
        .map(|(k, v)| (format!("lm.{k}"), v.to_string()))
        .collect()
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::toy(0);
        for (k, v) in pairs {
            let Some(field) = k.strip_prefix("lm.") else {
                continue;
            };
            let n = v
                .parse::<usize>()
                .map_err(|_| Error::config(k, format!("`{v}` is not an integer")))?;
            match field {
                "vocab_size" => cfg.vocab_size = n,
                "d_model" => cfg.d_model = n,
                "depth" => cfg.depth = n,
                "heads" => cfg.heads = n,
                "max_positions" => cfg.max_positions = n,
                "ffn_ratio" => cfg.ffn_ratio = n,
                _ => return Err(Error::config(k, "unknown lm field")),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn init_lm(cfg: &LmConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let std = 1.0 / (d as f64).sqrt();
    let mut ps = ParameterSet::new();
    ps.insert("tok_emb", Tensor::randn(&[cfg.vocab_size, d], std, &mut rng), false)?;
    ps.insert("pos_emb", Tensor::randn(&[cfg.max_positions, d], std, &mut rng), false)?;
    for i in 0..cfg.depth {
        nn::init_block(&mut ps, &format!("layers.{i}"), d, cfg.ffn_ratio, &mut rng)?;
    }
    nn::init_norm(&mut ps, "final_ln", d)?;
    nn::init_affine(&mut ps, "head", d, cfg.vocab_size, &mut rng)?;
    Ok(ps)
}

/// One contiguous stretch of LM input.
#[derive(Debug, Clone)]
pub enum Piece {
    /// Pre-computed embeddings `[rows x d_model]` (e.g. a mapped image).
    Embeds(Var),
    Tokens(Vec<usize>),
}

/// Packed logits for a batch of sequences.
#[derive(Debug, Clone)]
pub struct LmOutput {
    /// `[total_rows x vocab]`
    pub logits: Var,
    /// `(start_row, len)` of each sequence inside `logits`.
    pub segments: Vec<(usize, usize)>,
}

/// Records the causal LM on `tape`. Each sequence is the concatenation of its
/// pieces; embedded pieces take positions exactly like tokens do.
pub fn forward(
    tape: &mut Tape,
    cfg: &LmConfig,
    params: &ParameterSet,
    seqs: &[Vec<Piece>],
) -> Result<LmOutput> {
    let tok_emb = tape.param(params, "tok_emb")?;
    let pos_emb = tape.param(params, "pos_emb")?;
    let mut parts = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let start = positions.len();
        let mut len = 0;
        for piece in seq {
            let v = match piece {
                Piece::Tokens(ids) if ids.is_empty() => continue,
                Piece::Tokens(ids) => tape.gather_rows(tok_emb, ids)?,
                Piece::Embeds(v) => {
                    let shape = tape.shape(*v);
                    if shape.len() != 2 || shape[1] != cfg.d_model {
                        return Err(Error::shape(
                            "lm_forward",
                            format!("prefix {:?} for d_model {}", shape, cfg.d_model),
                        ));
                    }
                    *v
                }
            };
            len += tape.shape(v)[0];
            parts.push(v);
        }
        if len == 0 {
            return Err(Error::Length("empty LM input".into()));
        }
        if len > cfg.max_positions {
            return Err(Error::Length(format!(
                "sequence of {len} positions exceeds max_positions {}",
                cfg.max_positions
            )));
        }
        positions.extend(0..len);
        segments.push((start, len));
    }
    let x = tape.concat_rows(&parts)?;
    let pos = tape.gather_rows(pos_emb, &positions)?;
    let mut x = tape.add(x, pos)?;
    let attn = Attention {
        heads: cfg.heads,
        causal: true,
        segments: segments.clone(),
    };
    for i in 0..cfg.depth {
        x = nn::block(tape, params, &format!("layers.{i}"), x, &attn)?;
    }
    let x = nn::norm(tape, params, "final_ln", x)?;
    let logits = nn::affine(tape, params, "head", x)?;
    Ok(LmOutput { logits, segments })
}

/// Logits `[prefix_rows + tokens x vocab]` for one sequence, outside any
/// training graph.
pub fn lm_forward(
    cfg: &LmConfig,
    params: &ParameterSet,
    prefix: Option<&MappedPrefix>,
    tokens: &[usize],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut seq = Vec::new();
    if let Some(p) = prefix {
        seq.push(Piece::Embeds(tape.constant(p.0.clone())));
    }
    seq.push(Piece::Tokens(tokens.to_vec()));
    let out = forward(&mut tape, cfg, params, &[seq])?;
    Ok(tape.value(out.logits).clone())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 2e-3,
            warmup: 100,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainedLm {
    /// Every entry flagged frozen.
    pub params: ParameterSet,
    pub initial_loss: f64,
    /// Mean batch loss over the last (up to) 20 steps.
    pub final_loss: f64,
    pub curve: Vec<f64>,
}

/// One pre-training sequence. `scored[i]` says whether predicting `ids[i]`
/// counts towards the loss; `scored[0]` is ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusLine {
    pub ids: Vec<usize>,
    pub scored: Vec<bool>,
}

impl CorpusLine {
    /// Every next-token prediction is scored.
    pub fn plain(ids: Vec<usize>) -> Self {
        let scored = vec![true; ids.len()];
        Self { ids, scored }
    }
}

/// Mean next-token cross-entropy over the scored positions of a batch.
pub fn batch_nll(
    tape: &mut Tape,
    cfg: &LmConfig,
    params: &ParameterSet,
    lines: &[&CorpusLine],
) -> Result<Var> {
    let pieces: Vec<Vec<Piece>> = lines
        .iter()
        .map(|l| vec![Piece::Tokens(l.ids[..l.ids.len() - 1].to_vec())])
        .collect();
    let out = forward(tape, cfg, params, &pieces)?;
    let targets: Vec<usize> = lines.iter().flat_map(|l| l.ids[1..].iter().copied()).collect();
    let mask: Vec<bool> = lines.iter().flat_map(|l| l.scored[1..].iter().copied()).collect();
    tape.cross_entropy(out.logits, &targets, &mask)
}

/// Trains a causal LM on `corpus` from scratch and freezes it.
pub fn pretrain_toy_lm(
    corpus: &[CorpusLine],
    cfg: &LmConfig,
    opts: &PretrainConfig,
) -> Result<PretrainedLm> {
    if corpus.is_empty() {
        return Err(Error::Data("empty pretraining corpus".into()));
    }
    for line in corpus {
        if line.ids.len() < 2 || line.scored.len() != line.ids.len() {
            return Err(Error::Data(format!("malformed corpus line {:?}", line.ids)));
        }
        if !line.scored[1..].iter().any(|&s| s) {
            return Err(Error::Data(format!("corpus line scores nothing: {:?}", line.ids)));
        }
    }
    let mut params = init_lm(cfg, opts.seed)?;
    let mut state = OptimizerState::new();
    let hp = AdamW {
        weight_decay: opts.weight_decay,
        ..AdamW::default()
    };
    let mut sampler = EpochSampler::new(corpus.len(), opts.seed ^ 0x5eed);
    let mut tape = Tape::new();
    let mut curve = Vec::with_capacity(opts.steps);
    for step in 1..=opts.steps {
        let lr = linear_warmup(step as u64, opts.warmup as u64, opts.lr);
        let idx = sampler.next_batch(opts.batch_size);
        let batch: Vec<&CorpusLine> = idx.iter().map(|&i| &corpus[i]).collect();
        tape.reset();
        let loss = batch_nll(&mut tape, cfg, &params, &batch)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                lr,
                loss: value,
            });
        }
        curve.push(value);
        tape.backward(loss)?;
        params.pull_grads(&tape)?;
        adamw_step(&mut params, &mut state, lr, &hp)?;
    }
    params.freeze_all();
    let tail = &curve[curve.len().saturating_sub(20)..];
    Ok(PretrainedLm {
        params,
        initial_loss: curve.first().copied().unwrap_or(f64::NAN),
        final_loss: tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LmConfig {
        LmConfig {
            vocab_size: 7,
            d_model: 8,
            depth: 1,
            heads: 2,
            max_positions: 12,
            ffn_ratio: 2,
        }
    }

    #[test]
    fn empty_prefix_is_plain_forward() {
        let cfg = tiny();
        let ps = init_lm(&cfg, 1).unwrap();
        let plain = lm_forward(&cfg, &ps, None, &[1, 2, 3]).unwrap();
        let mut tape = Tape::new();
        let out = forward(
            &mut tape,
            &cfg,
            &ps,
            &[vec![Piece::Tokens(vec![]), Piece::Tokens(vec![1, 2, 3])]],
        )
        .unwrap();
        assert_eq!(tape.value(out.logits), &plain);
        assert_eq!(plain.shape(), [3, 7]);
    }

    #[test]
    fn prefix_row_perturbation_reaches_later_positions_only() {
        let cfg = tiny();
        let ps = init_lm(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prefix = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let mut bumped = prefix.clone();
        bumped.data_mut()[8 + 2] += 0.5; // row 1
        let a = lm_forward(&cfg, &ps, Some(&MappedPrefix(prefix)), &[4, 5]).unwrap();
        let b = lm_forward(&cfg, &ps, Some(&MappedPrefix(bumped)), &[4, 5]).unwrap();
        assert_eq!(a.row(0), b.row(0));
        for r in 1..5 {
            assert_ne!(a.row(r), b.row(r), "row {r}");
        }
    }

    #[test]
    fn overflow_is_a_length_error() {
        let cfg = tiny();
        let ps = init_lm(&cfg, 1).unwrap();
        assert!(matches!(
            lm_forward(&cfg, &ps, None, &[1; 13]),
            Err(Error::Length(_))
        ));
    }

    #[test]
    fn batched_sequences_do_not_interact() {
        let cfg = tiny();
        let ps = init_lm(&cfg, 4).unwrap();
        let single = lm_forward(&cfg, &ps, None, &[2, 3, 4]).unwrap();
        let mut tape = Tape::new();
        let out = forward(
            &mut tape,
            &cfg,
            &ps,
            &[vec![Piece::Tokens(vec![6, 5])], vec![Piece::Tokens(vec![2, 3, 4])]],
        )
        .unwrap();
        let logits = tape.value(out.logits);
        for r in 0..3 {
            for (x, y) in logits.row(2 + r).iter().zip(single.row(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pretraining_lowers_loss_and_freezes() {
        let cfg = tiny();
        let corpus: Vec<CorpusLine> = (0..8)
            .map(|i| CorpusLine::plain(vec![1, 2 + i % 3, 3, 4, 2 + i % 3]))
            .collect();
        let opts = PretrainConfig {
            steps: 60,
            batch_size: 4,
            lr: 1e-2,
            warmup: 5,
            ..PretrainConfig::default()
        };
        let lm = pretrain_toy_lm(&corpus, &cfg, &opts).unwrap();
        assert!(lm.final_loss < lm.initial_loss);
        assert!(lm.params.iter().all(|(_, p)| p.frozen));
        assert_eq!(lm.params.num_trainable(), 0);
        assert!(pretrain_toy_lm(&[], &cfg, &opts).is_err());
    }
}
