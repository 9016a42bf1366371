use mapl::backbones::synth::{question_text, VqaExample};
use mapl::backbones::{ToyImage, Vocabulary};
use mapl::inference::{assemble_vqa_prompt, render_prompt, tokenize_prompt};

pub const GOLDEN_0SHOT: &str = include_str!("../golden/vqa_0shot.txt");
pub const GOLDEN_4SHOT: &str = include_str!("../golden/vqa_4shot.txt");

const COLORS: [&str; 5] = ["red", "green", "blue", "yellow", "purple"];

fn example(cells: [usize; 9], row: usize, col: usize) -> VqaExample {
    let answer = COLORS[cells[(row - 1) * 3 + (col - 1)]].to_string();
    VqaExample {
        image: ToyImage::new(3, cells.to_vec()).unwrap(),
        question: question_text(row, col),
        answers: vec![answer; 10],
    }
}

pub fn shots() -> Vec<VqaExample> {
    vec![
        example([0, 1, 2, 3, 4, 0, 1, 2, 3], 1, 1),
        example([4, 4, 4, 3, 3, 3, 2, 2, 2], 2, 3),
        example([1, 1, 1, 1, 1, 1, 1, 1, 0], 3, 3),
        example([2, 0, 4, 1, 3, 2, 0, 4, 1], 1, 3),
    ]
}

pub fn query() -> VqaExample {
    example([3, 2, 1, 0, 4, 3, 2, 1, 0], 2, 2)
}

pub fn rendered(n: usize) -> String {
    let vocab = Vocabulary::toy();
    let segments = assemble_vqa_prompt(&shots(), &query(), n).unwrap();
    render_prompt(&vocab, &tokenize_prompt(&vocab, &segments).unwrap()).unwrap()
}

