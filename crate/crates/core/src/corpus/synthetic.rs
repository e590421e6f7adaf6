//! Seeded generators for corpora used in tests, demos and desk-scale experiments.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dialogue;

const NAMES: &[&str] = &["tom", "mary", "jack", "lucy", "peter", "anna", "mike", "susan"];
const PLACES: &[&str] = &[
    "the bank", "the station", "the library", "the office", "the market", "the hospital",
    "the park", "the hotel", "the airport", "the cinema",
];
const THINGS: &[&str] = &[
    "a new coat", "some bread", "a ticket", "a cup of coffee", "a book", "a bike", "some apples",
    "a birthday card", "a pair of shoes", "a lamp",
];
const TIMES: &[&str] = &[
    "at six", "tomorrow morning", "on friday", "after lunch", "next week", "tonight", "at noon",
    "on sunday",
];
const FEELINGS: &[&str] = &["tired", "happy", "busy", "hungry", "nervous", "fine", "sick", "bored"];

fn pick<'a, R: Rng>(rng: &mut R, pool: &[&'a str]) -> &'a str {
    pool.choose(rng).copied().unwrap_or("")
}

fn opening<R: Rng>(rng: &mut R) -> Vec<String> {
    let name = pick(rng, NAMES);
    let feeling = pick(rng, FEELINGS);
    let place = pick(rng, PLACES);
    let thing = pick(rng, THINGS);
    let time = pick(rng, TIMES);
    match rng.random_range(0..6) {
        0 => vec![
            format!("hi , {name} . how are you ?"),
            format!("i'm {feeling} . and you ?"),
            format!("not bad . are you going to {place} {time} ?"),
            format!("yes , i need to get {thing} there ."),
        ],
        1 => vec![
            format!("excuse me , where is {place} ?"),
            "go straight and turn left at the corner .".to_string(),
            "is it far from here ?".to_string(),
            "no , about five minutes on foot .".to_string(),
            "thank you very much .".to_string(),
        ],
        2 => vec![
            "can i help you ?".to_string(),
            format!("yes , i'm looking for {thing} ."),
            format!("how about this one ? it's on sale {time} ."),
            "how much is it ?".to_string(),
            format!("it's {} dollars .", rng.random_range(3..90)),
            "ok , i'll take it .".to_string(),
        ],
        3 => vec![
            format!("shall we meet {time} ?"),
            format!("sorry , i'm {feeling} . what about later ?"),
            format!("fine . let's meet at {place} ."),
        ],
        4 => vec![
            format!("did you see {name} {time} ?"),
            format!("yes , {name} was at {place} ."),
            format!("was {name} {feeling} ?"),
            format!("a little . {name} bought {thing} ."),
            "that sounds nice .".to_string(),
            "i think so too .".to_string(),
            format!("see you {time} ."),
        ],
        _ => vec![
            "good morning , doctor .".to_string(),
            "good morning . what's wrong with you ?".to_string(),
            format!("i feel {feeling} and i have a headache ."),
            "have you got a fever ?".to_string(),
            format!("yes , since {time} ."),
        ],
    }
}

/// Everyday-conversation dialogues in the same shape as the DailyDialog corpus
/// (two to seven turns each).
pub fn everyday_dialogues(n: usize, seed: u64) -> Vec<Dialogue> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut utterances = opening(&mut rng);
            let keep = rng.random_range(2..=utterances.len());
            utterances.truncate(keep);
            Dialogue { utterances }
        })
        .collect()
}

/// Shape of the marker-copy ("echo") task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EchoTask {
    /// Distinct marker tokens; each dialogue mentions one.
    pub markers: usize,
    /// Filler words the context utterances are drawn from.
    pub fillers: usize,
    /// Context utterances before the reply.
    pub context_turns: usize,
    /// Inclusive range of filler words per context utterance.
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for EchoTask {
    fn default() -> Self {
        EchoTask {
            markers: 24,
            fillers: 40,
            context_turns: 3,
            min_words: 3,
            max_words: 6,
        }
    }
}

impl EchoTask {
    pub fn marker(i: usize) -> String {
        format!("mk{i}")
    }

    fn filler(i: usize) -> String {
        format!("w{i}")
    }

    /// Dialogues whose last utterance repeats the marker hidden in one of the
    /// context utterances: `you said <marker> .`
    pub fn dialogues(&self, n: usize, seed: u64) -> Vec<Dialogue> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let marker = Self::marker(rng.random_range(0..self.markers));
                let holder = rng.random_range(0..self.context_turns);
                let mut utterances: Vec<String> = (0..self.context_turns)
                    .map(|turn| {
                        let len = rng.random_range(self.min_words..=self.max_words);
                        let mut words: Vec<String> =
                            (0..len).map(|_| Self::filler(rng.random_range(0..self.fillers))).collect();
                        if turn == holder {
                            let at = rng.random_range(0..=words.len());
                            words.insert(at, marker.clone());
                        }
                        words.join(" ")
                    })
                    .collect();
                utterances.push(format!("you said {marker} ."));
                Dialogue { utterances }
            })
            .collect()
    }
}

/// Splits off the last `held_out` dialogues after a seeded shuffle.
pub fn split_held_out(mut dialogues: Vec<Dialogue>, held_out: usize, seed: u64) -> (Vec<Dialogue>, Vec<Dialogue>) {
    dialogues.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = dialogues.len().saturating_sub(held_out);
    let test = dialogues.split_off(cut);
    (dialogues, test)
}
