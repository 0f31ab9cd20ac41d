//! The desk corpus: sentences from a small probabilistic grammar followed by
//! a short passage of natural English.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A few paragraphs of plain prose, one per line.
pub const NATURAL_TEXT: &str = include_str!("../data/natural.txt");

const DETERMINERS: &[&str] = &["the", "a", "every", "some", "one"];
const ADJECTIVES: &[&str] = &[
    "small", "red", "quiet", "old", "bright", "tired", "happy", "green", "cold", "brave",
];
const NOUNS: &[&str] = &[
    "cat", "dog", "river", "house", "child", "teacher", "garden", "bird", "farmer", "boat",
    "window", "stone",
];
const NAMES: &[&str] = &["anna", "boris", "clara", "david", "mila"];
const TRANSITIVE: &[&str] = &[
    "sees", "finds", "follows", "likes", "carries", "watches", "paints", "helps",
];
const INTRANSITIVE: &[&str] = &["sleeps", "runs", "waits", "sings", "falls", "smiles"];
const PREPOSITIONS: &[&str] = &["near", "under", "behind", "with", "across"];

fn pick<'a, R: Rng>(words: &[&'a str], rng: &mut R) -> &'a str {
    words.choose(rng).expect("non-empty word list")
}

fn noun_phrase<R: Rng>(rng: &mut R, out: &mut Vec<&str>) {
    if rng.random_bool(0.2) {
        out.push(pick(NAMES, rng));
        return;
    }
    out.push(pick(DETERMINERS, rng));
    while rng.random_bool(0.35) {
        out.push(pick(ADJECTIVES, rng));
    }
    out.push(pick(NOUNS, rng));
}

fn sentence<R: Rng>(rng: &mut R) -> String {
    let mut words = Vec::new();
    noun_phrase(rng, &mut words);
    match rng.random_range(0..3) {
        0 => {
            words.push(pick(TRANSITIVE, rng));
            noun_phrase(rng, &mut words);
        }
        1 => {
            words.push(pick(INTRANSITIVE, rng));
            words.push(pick(PREPOSITIONS, rng));
            noun_phrase(rng, &mut words);
        }
        _ => words.push(pick(INTRANSITIVE, rng)),
    }
    words.join(" ") + "."
}

/// `lines` documents of two to five grammar sentences each.
pub fn grammar_corpus(lines: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for _ in 0..lines {
        let n = rng.random_range(2..=5);
        let doc: Vec<String> = (0..n).map(|_| sentence(&mut rng)).collect();
        out.push_str(&doc.join(" "));
        out.push('\n');
    }
    out
}

/// Grammar documents followed by [`NATURAL_TEXT`].
pub fn desk_corpus(grammar_lines: usize, seed: u64) -> String {
    grammar_corpus(grammar_lines, seed) + NATURAL_TEXT
}
