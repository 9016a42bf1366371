mod common;

use common::prompts::{query, rendered, shots, GOLDEN_0SHOT, GOLDEN_4SHOT};
use mapl::backbones::Vocabulary;
use mapl::inference::{assemble_vqa_prompt, tokenize_prompt, PromptPiece};

#[test]
fn zero_shot_matches_golden() {
    assert_eq!(rendered(0), GOLDEN_0SHOT);
}

#[test]
fn four_shot_matches_golden() {
    assert_eq!(rendered(4), GOLDEN_4SHOT);
}

#[test]
fn golden_text_uses_the_template_verbatim() {
    let golden = GOLDEN_4SHOT;
    let texts: Vec<&str> = golden.lines().filter(|l| l.starts_with("tokens")).collect();
    assert_eq!(texts.len(), 5);
    for (line, shot) in texts.iter().zip(shots()) {
        let want = format!(
            "\"Please answer the question. Question: {} Answer: {}\\n\"",
            shot.question, shot.answers[0]
        );
        assert!(line.ends_with(&want), "{line}");
    }
    let want = format!("\"Please answer the question. Question: {} Answer:\"", query().question);
    assert!(texts[4].ends_with(&want));
}

#[test]
fn images_and_text_alternate() {
    let vocab = Vocabulary::toy();
    let segments = assemble_vqa_prompt(&shots(), &query(), 4).unwrap();
    let pieces = tokenize_prompt(&vocab, &segments).unwrap();
    assert_eq!(pieces.len(), 10);
    for (i, p) in pieces.iter().enumerate() {
        assert_eq!(matches!(p, PromptPiece::Image(_)), i % 2 == 0);
    }
}

#[test]
fn more_shots_than_supplied_is_an_error() {
    assert!(assemble_vqa_prompt(&shots(), &query(), 5).is_err());
}
