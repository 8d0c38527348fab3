//! Synthetic datasets shared by the integration tests.
#![allow(dead_code)]

use entangler_core::pipeline::data::TaggedSentence;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

const PEOPLE: [&str; 5] = ["alice", "bob", "carol", "dave", "erin"];
const PLACES: [(&str, &[&str]); 4] = [
    ("paris", &["B-LOC"]),
    ("rome", &["B-LOC"]),
    ("new york", &["B-LOC", "I-LOC"]),
    ("san jose", &["B-LOC", "I-LOC"]),
];

/// Small BIO-tagged corpus with PER and LOC entities.
pub fn bio_sentences(n: usize, seed: u64) -> Vec<TaggedSentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut w = Vec::new();
            let mut t = Vec::new();
            let mut push = |text: &str, tags: &[&str]| {
                for (x, y) in words(text).into_iter().zip(tags) {
                    w.push(x);
                    t.push(y.to_string());
                }
            };
            let p1 = *PEOPLE.choose(&mut rng).unwrap();
            let (place, ptags) = *PLACES.choose(&mut rng).unwrap();
            match rng.random_range(0..3) {
                0 => {
                    push(p1, &["B-PER"]);
                    push("visited", &["O"]);
                    push(place, ptags);
                    push("today", &["O"]);
                }
                1 => {
                    let p2 = *PEOPLE.choose(&mut rng).unwrap();
                    push(p1, &["B-PER"]);
                    push("met", &["O"]);
                    push(p2, &["B-PER"]);
                    push("in", &["O"]);
                    push(place, ptags);
                }
                _ => {
                    push("the", &["O"]);
                    push("trip", &["O"]);
                    push("to", &["O"]);
                    push(place, ptags);
                    push("with", &["O"]);
                    push(p1, &["B-PER"]);
                }
            }
            (w, t)
        })
        .collect()
}

const POSITIVE: [&str; 4] = ["good", "great", "nice", "fine"];
const NEGATIVE: [&str; 4] = ["bad", "awful", "poor", "sad"];
const FILLER: [&str; 6] = ["the", "movie", "was", "plot", "acting", "really"];

/// Two-class sentiment toy set; the class is decided by one cue word.
pub fn sentiment_examples(n: usize, seed: u64) -> Vec<(Vec<String>, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let pos = i % 2 == 0;
            let cue = if pos { POSITIVE } else { NEGATIVE }
                .choose(&mut rng)
                .unwrap()
                .to_string();
            let len = rng.random_range(2..5);
            let mut w: Vec<String> = (0..len).map(|_| FILLER.choose(&mut rng).unwrap().to_string()).collect();
            let at = rng.random_range(0..=w.len());
            w.insert(at, cue);
            (w, if pos { "pos" } else { "neg" }.to_string())
        })
        .collect()
}

/// Plain-text sentences for pretraining.
pub fn toy_corpus(n: usize, seed: u64) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = bio_sentences(n / 2, seed).into_iter().map(|(w, _)| w).collect();
    out.extend(sentiment_examples(n - n / 2, seed + 1).into_iter().map(|(w, _)| w));
    out
}
