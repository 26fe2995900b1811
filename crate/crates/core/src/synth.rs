//! Synthetic text: a gender-correlated corpus and a two-topic toy task.
//!
//! In the corpus every occupation co-occurs with female-side words with
//! probability `1 − rating` (rating 0 = stereotypically female), so a model
//! trained on it by masked language modelling picks up the stereotype.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::pairminer::Template;
use crate::probes::OccupationRating;
use crate::seed;
use crate::trainer::ToyTask;

/// (female, male) word pairs used by the sentence patterns; all come from
/// the bundled gender term list.
const SUBJECT_NOUNS: [(&str, &str); 7] = [
    ("lady", "gentleman"),
    ("mother", "father"),
    ("sister", "brother"),
    ("girl", "boy"),
    ("queen", "king"),
    ("actress", "actor"),
    ("heroine", "hero"),
];

const SPORTS: [&str; 8] = ["game", "match", "ball", "team", "race", "goal", "coach", "season"];
const COOKING: [&str; 8] = ["soup", "bread", "cake", "salad", "dinner", "recipe", "pasta", "cheese"];
const VERBS: [&str; 6] = ["liked", "wanted", "saw", "loved", "discussed", "remembered"];
const TAILS: [&str; 5] = ["yesterday", "today", "last week", "with friends", "again"];

fn side<'a>(pair: (&'a str, &'a str), female: bool) -> &'a str {
    if female {
        pair.0
    } else {
        pair.1
    }
}

fn occupation_sentence(rng: &mut seed::Rng, occ: &str, female: bool) -> String {
    let noun = side(*SUBJECT_NOUNS.choose(rng).expect("nonempty"), female);
    let she = side(("she", "he"), female);
    let her = side(("her", "him"), female);
    let fem = side(("female", "male"), female);
    match rng.random_range(0..8) {
        0 => format!("{she} is a {occ} ."),
        1 => format!("{she} works as a {occ} ."),
        2 => format!("my {noun} is a {occ} ."),
        3 => format!("the {noun} works as a {occ} ."),
        4 => format!("a {fem} {occ} ."),
        5 => format!("the {occ} said {she} is tired ."),
        6 => format!("{she} wants to become a {occ} ."),
        _ => format!("we thanked {her} , the {occ} ."),
    }
}

/// Gendered words always agree within a sentence, so the corpus carries a
/// shared gender feature.
fn background_sentence(rng: &mut seed::Rng, female: bool) -> String {
    let noun = side(*SUBJECT_NOUNS.choose(rng).expect("nonempty"), female);
    let other = side(*SUBJECT_NOUNS.choose(rng).expect("nonempty"), female);
    let she = side(("she", "he"), female);
    let her = side(("her", "him"), female);
    let women = side(("women", "men"), female);
    let fem = side(("female", "male"), female);
    match rng.random_range(0..6) {
        0 => format!("the {noun} said {she} is tired ."),
        1 => format!("{she} is my {noun} ."),
        2 => format!("we thanked {her} , the {noun} ."),
        3 => format!("the {women} are {fem} ."),
        4 => format!("{she} is a {fem} {noun} ."),
        _ => format!("the {noun} is my {other} ."),
    }
}

/// A template filled with `word` and attributed to a gendered speaker, so
/// the template vocabulary is trained alongside the gender association.
fn framed_sentence(rng: &mut seed::Rng, templates: &[Template], word: &str, female: bool) -> String {
    let t = templates.choose(rng).expect("nonempty");
    let she = side(("she", "he"), female);
    format!("{she} says {} .", t.fill(word))
}

/// A sentence about one of the two task topics.
pub fn topic_sentence(rng: &mut seed::Rng, topic: usize, occupations: &[OccupationRating]) -> String {
    let keywords: &[&str] = if topic == 0 { &SPORTS } else { &COOKING };
    let subject = match rng.random_range(0..3) {
        0 => side(("she", "he"), rng.random_bool(0.5)).to_string(),
        1 => format!("the {}", side(*SUBJECT_NOUNS.choose(rng).expect("nonempty"), rng.random_bool(0.5))),
        _ => format!("the {}", occupations.choose(rng).map_or("worker", |o| o.occupation.as_str())),
    };
    let verb = VERBS.choose(rng).expect("nonempty");
    let a = keywords.choose(rng).expect("nonempty");
    let b = keywords.choose(rng).expect("nonempty");
    let tail = TAILS.choose(rng).expect("nonempty");
    format!("{subject} {verb} the {a} and the {b} {tail} .")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_sentences: usize,
    /// Share of sentences pairing an occupation with a gendered word.
    pub occupation_share: f64,
    /// Share of two-topic sentences (the rest is gendered background text).
    pub topic_share: f64,
    /// Share of gendered sentences that are filled templates.
    pub framed_share: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_sentences: 500,
            occupation_share: 0.6,
            topic_share: 0.2,
            framed_share: 0.5,
            seed: 0,
        }
    }
}

/// One sentence per entry. Occupation sentences use the female side with
/// probability `1 − rating`. When `templates` is nonempty, a `framed_share`
/// of the gendered sentences are filled templates with an agreeing speaker.
pub fn gender_correlated_corpus(
    ratings: &[OccupationRating],
    templates: &[Template],
    spec: &CorpusSpec,
) -> Vec<String> {
    let mut rng = seed::derive_rng(spec.seed, "corpus", 0);
    (0..spec.n_sentences)
        .map(|_| {
            let u: f64 = rng.random();
            let framed = !templates.is_empty() && rng.random_bool(spec.framed_share.clamp(0.0, 1.0));
            if u < spec.occupation_share && !ratings.is_empty() {
                let r = ratings.choose(&mut rng).expect("nonempty");
                let female = rng.random_bool((1.0 - r.rating).clamp(0.0, 1.0));
                if framed {
                    framed_sentence(&mut rng, templates, &r.occupation, female)
                } else {
                    occupation_sentence(&mut rng, &r.occupation, female)
                }
            } else if u < spec.occupation_share + spec.topic_share {
                let topic = rng.random_range(0..2);
                topic_sentence(&mut rng, topic, ratings)
            } else {
                let female = rng.random_bool(0.5);
                if framed {
                    let noun = side(*SUBJECT_NOUNS.choose(&mut rng).expect("nonempty"), female);
                    framed_sentence(&mut rng, templates, noun, female)
                } else {
                    background_sentence(&mut rng, female)
                }
            }
        })
        .collect()
}

/// Balanced two-topic classification (0 = sports, 1 = cooking).
pub fn toy_task(occupations: &[OccupationRating], n_train: usize, n_test: usize, seed: u64) -> ToyTask {
    let mut rng = seed::derive_rng(seed, "toy-task", 0);
    let mut make = |n: usize| -> Vec<(String, usize)> {
        (0..n)
            .map(|i| {
                let y = i % 2;
                (topic_sentence(&mut rng, y, occupations), y)
            })
            .collect()
    };
    let train = make(n_train.max(2));
    let test = make(n_test.max(2));
    ToyTask { train, test }
}
