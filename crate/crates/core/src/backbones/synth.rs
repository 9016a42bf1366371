//! Synthetic color-grid task: images, captions, questions and the text corpus
//! the toy LM is pre-trained on.

use std::collections::HashSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vision::ToyImage;
use super::vocab::{COLOR_WORDS, EOS, NEWLINE};
use crate::error::{Error, Result};
use crate::inference::{vqa_text, VQA_INSTRUCTION};

/// Number of text-only lines in the pre-training corpus.
pub const CORPUS_LINES: usize = 6000;
/// Held-out question lines used to qualify the pre-trained LM.
pub const QUALIFY_LINES: usize = 200;
/// Most support examples a corpus line carries before its final question.
pub const MAX_CORPUS_SHOTS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionExample {
    pub image: ToyImage,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VqaExample {
    pub image: ToyImage,
    pub question: String,
    pub answers: Vec<String>,
}

/// One pre-training line. `scored` runs parallel to the line's tokens and is
/// false where the token cannot be predicted from what precedes it (the
/// colors of a fresh description and the cell coordinates of a question).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusEntry {
    pub text: String,
    pub scored: Vec<bool>,
}

#[derive(Default)]
struct LineBuilder {
    words: Vec<(String, bool)>,
}

impl LineBuilder {
    fn push(&mut self, text: &str, scored: bool) {
        for w in text.split_whitespace() {
            self.words.push((w.to_string(), scored));
        }
    }

    /// Description of `img`; its colors are scored only when repeated.
    fn describe(&mut self, img: &ToyImage, repeat: bool) {
        self.push("colors :", true);
        for &c in img.cells() {
            self.push(COLOR_WORDS[c], repeat);
        }
    }

    fn question(&mut self, img: &ToyImage, rng: &mut ChaCha8Rng) -> String {
        let g = img.grid();
        let (r, c) = (rng.random_range(1..=g), rng.random_range(1..=g));
        self.push(VQA_INSTRUCTION, true);
        self.push("question : color of", true);
        self.push(&format!("{r} {c}"), false);
        self.push("? Answer:", true);
        COLOR_WORDS[img.at(r, c)].to_string()
    }

    fn newline(&mut self) {
        self.words.push((NEWLINE.to_string(), true));
    }

    fn finish(self) -> CorpusEntry {
        let mut text = String::new();
        let mut prev_newline = true;
        for (w, _) in &self.words {
            let nl = w == NEWLINE;
            if !prev_newline && !nl {
                text.push(' ');
            }
            text.push_str(w);
            prev_newline = nl;
        }
        CorpusEntry {
            text,
            scored: self.words.into_iter().map(|(_, s)| s).collect(),
        }
    }
}

/// A held-out text-only question: `prompt` ends in `Answer:`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QualifyLine {
    pub prompt: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticTask {
    pub grid: usize,
    pub colors: usize,
    pub corpus: Vec<CorpusEntry>,
    pub qualify: Vec<QualifyLine>,
    pub train_captions: Vec<CaptionExample>,
    pub eval_captions: Vec<CaptionExample>,
    pub train_vqa: Vec<VqaExample>,
    pub eval_vqa: Vec<VqaExample>,
}

/// `colors : w11 w12 … wGG` in raster order.
pub fn describe(img: &ToyImage) -> String {
    let mut s = String::from("colors :");
    for &c in img.cells() {
        s.push(' ');
        s.push_str(COLOR_WORDS[c]);
    }
    s
}

pub fn caption_text(img: &ToyImage) -> String {
    format!("{} {EOS}", describe(img))
}

/// Question about the 1-based cell `(row, col)`.
pub fn question_text(row: usize, col: usize) -> String {
    format!("question : color of {row} {col} ?")
}

fn random_image(grid: usize, colors: usize, rng: &mut ChaCha8Rng) -> ToyImage {
    let cells = (0..grid * grid).map(|_| rng.random_range(0..colors)).collect();
    ToyImage::new(grid, cells).expect("grid is positive")
}

fn random_question(img: &ToyImage, rng: &mut ChaCha8Rng) -> (String, String) {
    let g = img.grid();
    let (r, c) = (rng.random_range(1..=g), rng.random_range(1..=g));
    (question_text(r, c), COLOR_WORDS[img.at(r, c)].to_string())
}

/// Generates the whole toy task from one seed. Train and eval images are
/// pairwise distinct; qualification lines use descriptions absent from the
/// corpus.
pub fn generate_synthetic_task(
    grid: usize,
    colors: usize,
    n_train: usize,
    n_eval: usize,
    seed: u64,
) -> Result<SyntheticTask> {
    if grid == 0 || grid > 9 {
        return Err(Error::config("grid", "must be in 1..=9 (questions use single digits)"));
    }
    if colors < 2 || colors > COLOR_WORDS.len() {
        return Err(Error::config(
            "colors",
            format!("must be in 2..={}", COLOR_WORDS.len()),
        ));
    }
    let distinct = (colors as f64).powi((grid * grid) as i32);
    if ((n_train + n_eval) as f64) > distinct {
        return Err(Error::config(
            "n_train",
            format!("only {distinct} distinct images exist"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut seen = HashSet::new();
    let mut images = Vec::with_capacity(n_train + n_eval);
    while images.len() < n_train + n_eval {
        let img = random_image(grid, colors, &mut rng);
        if seen.insert(img.clone()) {
            images.push(img);
        }
    }
    let mut captions = Vec::with_capacity(images.len());
    let mut vqa = Vec::with_capacity(images.len());
    for img in &images {
        captions.push(CaptionExample {
            image: img.clone(),
            caption: caption_text(img),
        });
        let (question, answer) = random_question(img, &mut rng);
        vqa.push(VqaExample {
            image: img.clone(),
            question,
            answers: vec![answer; 10],
        });
    }
    let eval_captions = captions.split_off(n_train);
    let eval_vqa = vqa.split_off(n_train);

    let mut corpus = Vec::with_capacity(CORPUS_LINES);
    let mut corpus_images = HashSet::new();
    for _ in 0..CORPUS_LINES {
        let kind = rng.random_range(0..10);
        let mut line = LineBuilder::default();
        if kind < 2 {
            let img = random_image(grid, colors, &mut rng);
            line.describe(&img, false);
            line.describe(&img, true);
            corpus_images.insert(img);
        } else {
            let shots = if kind < 7 {
                0
            } else {
                rng.random_range(1..=MAX_CORPUS_SHOTS)
            };
            for i in 0..=shots {
                if i > 0 {
                    line.newline();
                }
                let img = random_image(grid, colors, &mut rng);
                line.describe(&img, false);
                let answer = line.question(&img, &mut rng);
                line.push(&answer, true);
                corpus_images.insert(img);
            }
        }
        line.push(EOS, true);
        corpus.push(line.finish());
    }

    let mut qualify = Vec::with_capacity(QUALIFY_LINES);
    while qualify.len() < QUALIFY_LINES {
        let img = random_image(grid, colors, &mut rng);
        if corpus_images.contains(&img) {
            continue;
        }
        let (q, answer) = random_question(&img, &mut rng);
        qualify.push(QualifyLine {
            prompt: format!("{} {}", describe(&img), vqa_text(&q, None)),
            answer,
        });
    }

    Ok(SyntheticTask {
        grid,
        colors,
        corpus,
        qualify,
        train_captions: captions,
        eval_captions,
        train_vqa: vqa,
        eval_vqa,
    })
}

#[derive(Serialize, Deserialize)]
struct Record {
    split: String,
    image: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    caption: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    question: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    answers: Option<Vec<String>>,
}

/// Line-delimited JSON: captions then questions, each tagged with its split.
pub fn to_jsonl(task: &SyntheticTask) -> String {
    let mut out = String::new();
    let mut push = |r: Record| {
        out.push_str(&serde_json::to_string(&r).expect("plain record"));
        out.push('\n');
    };
    for (split, set) in [("train", &task.train_captions), ("eval", &task.eval_captions)] {
        for ex in set {
            push(Record {
                split: split.into(),
                image: ex.image.cells().to_vec(),
                caption: Some(ex.caption.clone()),
                question: None,
                answers: None,
            });
        }
    }
    for (split, set) in [("train", &task.train_vqa), ("eval", &task.eval_vqa)] {
        for ex in set {
            push(Record {
                split: split.into(),
                image: ex.image.cells().to_vec(),
                caption: None,
                question: Some(ex.question.clone()),
                answers: Some(ex.answers.clone()),
            });
        }
    }
    out
}

/// Caption and VQA splits parsed back from [`to_jsonl`] output.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub train_captions: Vec<CaptionExample>,
    pub eval_captions: Vec<CaptionExample>,
    pub train_vqa: Vec<VqaExample>,
    pub eval_vqa: Vec<VqaExample>,
}

impl From<&SyntheticTask> for Dataset {
    fn from(t: &SyntheticTask) -> Self {
        Self {
            train_captions: t.train_captions.clone(),
            eval_captions: t.eval_captions.clone(),
            train_vqa: t.train_vqa.clone(),
            eval_vqa: t.eval_vqa.clone(),
        }
    }
}

pub fn parse_jsonl(text: &str) -> Result<Dataset> {
    let mut ds = Dataset::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Data(format!("dataset line {}: {reason}", i + 1));
        let r: Record = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let image = ToyImage::from_flat(r.image).map_err(|e| bad(e.to_string()))?;
        let train = match r.split.as_str() {
            "train" => true,
            "eval" => false,
            other => return Err(bad(format!("unknown split {other:?}"))),
        };
        match (r.caption, r.question, r.answers) {
            (Some(caption), None, None) => {
                let ex = CaptionExample { image, caption };
                if train {
                    ds.train_captions.push(ex)
                } else {
                    ds.eval_captions.push(ex)
                }
            }
            (None, Some(question), Some(answers)) => {
                let ex = VqaExample {
                    image,
                    question,
                    answers,
                };
                if train {
                    ds.train_vqa.push(ex)
                } else {
                    ds.eval_vqa.push(ex)
                }
            }
            _ => return Err(bad("expected a caption or a question with answers".into())),
        }
    }
    Ok(ds)
}
