//! Synthetic desk-scale data: an open-domain small-talk corpus, a 90-pair
//! closed-domain help-desk set, a deterministic stand-in for the human rater,
//! and a driver that runs the whole alignment pipeline on them.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoding::DecodeParams;
use crate::error::Result;
use crate::eval::bleu_tokens;
use crate::lm::{LmConfig, LmModel, Stage};
use crate::nn::Schedule;
use crate::pipeline::{
    finetune_lm, generate_distinct_candidates, merge_gold, CandidatePair, DialogPair, LossPoint,
    PreferenceExample, TrainConfig,
};
use crate::reward::{embed_examples, train_reward, PrecisionPoint, RewardConfig, RewardNet, RewardTrainConfig};
use crate::tokenizer::{train_bpe, Vocabulary};

/// One closed-domain topic: three phrasings of a question sharing an answer.
pub struct Topic {
    pub questions: [&'static str; 3],
    pub answer: &'static str,
}

pub const TOPICS: [Topic; 30] = [
    Topic {
        questions: ["when does the library open?", "what time does the library open?", "library opening hours?"],
        answer: "the library opens at eight in the morning on weekdays.",
    },
    Topic {
        questions: ["how do i renew a book?", "can i renew my loan?", "renew a borrowed book?"],
        answer: "you can renew a book twice from the online catalog.",
    },
    Topic {
        questions: ["where is the registrar office?", "how do i find the registrar?", "registrar location?"],
        answer: "the registrar is on the second floor of the main hall.",
    },
    Topic {
        questions: ["when does enrollment close?", "what is the enrollment deadline?", "last day to enroll?"],
        answer: "enrollment closes on the last friday of august.",
    },
    Topic {
        questions: ["how much is the parking permit?", "price of a parking permit?", "what does parking cost?"],
        answer: "a parking permit costs forty dollars per semester.",
    },
    Topic {
        questions: ["where can i print documents?", "is there a printer on campus?", "how do i print?"],
        answer: "printers are in the computer lab next to the cafeteria.",
    },
    Topic {
        questions: ["how do i reset my password?", "i forgot my password.", "password reset?"],
        answer: "reset your password at the help desk with your student card.",
    },
    Topic {
        questions: ["when is the cafeteria open?", "cafeteria hours?", "what time is lunch served?"],
        answer: "the cafeteria serves lunch from noon until three.",
    },
    Topic {
        questions: ["how do i get a student card?", "where do i get my id card?", "student id card?"],
        answer: "bring a photo to the security office to get your card.",
    },
    Topic {
        questions: ["is there free wifi?", "how do i connect to the wifi?", "wifi password?"],
        answer: "connect to campus net and log in with your student email.",
    },
    Topic {
        questions: ["where is the gym?", "is there a gym on campus?", "how do i use the gym?"],
        answer: "the gym is behind the stadium and is free for students.",
    },
    Topic {
        questions: ["how do i apply for a scholarship?", "scholarship application?", "can i get a scholarship?"],
        answer: "scholarship forms are due in march at the finance office.",
    },
    Topic {
        questions: ["when are final exams?", "final exam dates?", "what week are finals?"],
        answer: "final exams run during the second week of december.",
    },
    Topic {
        questions: ["how do i drop a course?", "can i drop a class?", "dropping a course?"],
        answer: "drop a course online before the tenth week of classes.",
    },
    Topic {
        questions: ["where is the health center?", "is there a nurse on campus?", "i feel sick, where do i go?"],
        answer: "the health center is near the north gate and opens at nine.",
    },
    Topic {
        questions: ["how do i book a study room?", "can i reserve a study room?", "study room booking?"],
        answer: "study rooms can be booked for two hours at the front desk.",
    },
    Topic {
        questions: ["when does the bus leave?", "campus bus schedule?", "what time is the shuttle?"],
        answer: "the shuttle bus leaves every thirty minutes from the plaza.",
    },
    Topic {
        questions: ["how do i pay tuition?", "where do i pay my fees?", "tuition payment?"],
        answer: "pay tuition by bank transfer or at the cashier window.",
    },
    Topic {
        questions: ["where is lost and found?", "i lost my keys.", "lost and found office?"],
        answer: "lost items are kept at the security office for one month.",
    },
    Topic {
        questions: ["how do i join a club?", "are there student clubs?", "club registration?"],
        answer: "clubs recruit new members at the fair in september.",
    },
    Topic {
        questions: ["can i get a transcript?", "how do i request my transcript?", "official transcript?"],
        answer: "request a transcript from the registrar, it takes five days.",
    },
    Topic {
        questions: ["where can i eat vegetarian food?", "vegetarian options?", "is there vegan food?"],
        answer: "the green kitchen has vegetarian and vegan meals daily.",
    },
    Topic {
        questions: ["how do i contact my advisor?", "who is my advisor?", "advisor meeting?"],
        answer: "email your advisor to set a meeting during office hours.",
    },
    Topic {
        questions: ["is the campus open on sunday?", "sunday hours?", "can i come in on sunday?"],
        answer: "the campus is closed on sunday except for the library.",
    },
    Topic {
        questions: ["how do i get a locker?", "are there lockers?", "locker rental?"],
        answer: "lockers are rented for ten dollars at the student union.",
    },
    Topic {
        questions: ["where do i submit homework?", "how do i hand in assignments?", "homework submission?"],
        answer: "submit homework through the course website before midnight.",
    },
    Topic {
        questions: ["can i bring my bike?", "where do i park my bike?", "bike parking?"],
        answer: "bike racks are next to every building and are free.",
    },
    Topic {
        questions: ["how do i find a part time job?", "student jobs?", "can i work on campus?"],
        answer: "the career office posts student jobs every monday.",
    },
    Topic {
        questions: ["is there counseling?", "i need someone to talk to.", "counseling service?"],
        answer: "free counseling is offered at the wellness center by appointment.",
    },
    Topic {
        questions: ["when does the semester start?", "first day of classes?", "semester start date?"],
        answer: "classes start on the first monday of september.",
    },
];

/// The 90 closed-domain pairs, topic by topic.
pub fn qa_pairs() -> Vec<DialogPair> {
    TOPICS
        .iter()
        .flat_map(|t| t.questions.iter().map(move |q| DialogPair::new(*q, t.answer)))
        .collect()
}

const THINGS: [&str; 16] = [
    "music", "pizza", "football", "movies", "books", "coffee", "tea", "rain", "dogs", "cats", "summer", "winter",
    "chess", "painting", "cooking", "dancing",
];
const COLORS: [&str; 8] = ["blue", "green", "red", "yellow", "white", "black", "orange", "purple"];
const OBJECTS: [&str; 10] = ["sky", "grass", "apple", "sun", "car", "house", "door", "shirt", "ball", "flower"];
const PLACES: [&str; 10] = ["park", "market", "station", "beach", "museum", "bank", "school", "bridge", "church", "hotel"];
const DIRECTIONS: [&str; 4] = ["north", "south", "east", "west"];
const NUMBERS: [&str; 10] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];
const NAMES: [&str; 10] = ["ana", "luis", "maria", "pedro", "sofia", "juan", "elena", "carlos", "lucia", "diego"];
const FEELINGS: [&str; 6] = ["fine", "great", "tired", "happy", "busy", "good"];
const GREETINGS: [&str; 4] = ["hello", "hi", "good morning", "hey there"];

fn small_talk(rng: &mut ChaCha8Rng) -> DialogPair {
    let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| *xs.choose(rng).expect("non-empty");
    match rng.random_range(0..11) {
        0 => {
            let t = pick(rng, &THINGS);
            if rng.random_bool(0.5) {
                DialogPair::new(format!("do you like {t}?"), format!("yes, i like {t} a lot."))
            } else {
                DialogPair::new(format!("do you like {t}?"), format!("no, i do not like {t}."))
            }
        }
        1 => {
            let (o, c) = (pick(rng, &OBJECTS), pick(rng, &COLORS));
            DialogPair::new(format!("what color is the {o}?"), format!("the {o} is {c}."))
        }
        2 => {
            let (p, d, q) = (pick(rng, &PLACES), pick(rng, &DIRECTIONS), pick(rng, &PLACES));
            DialogPair::new(format!("where is the {p}?"), format!("the {p} is {d} of the {q}."))
        }
        3 => {
            let a = rng.random_range(0..5);
            let b = rng.random_range(0..5);
            DialogPair::new(
                format!("what is {} plus {}?", NUMBERS[a], NUMBERS[b]),
                format!("{} plus {} is {}.", NUMBERS[a], NUMBERS[b], NUMBERS[a + b]),
            )
        }
        4 => {
            let (g, f) = (pick(rng, &GREETINGS), pick(rng, &FEELINGS));
            DialogPair::new(format!("{g}\nhow are you?"), format!("i am {f}, thank you."))
        }
        5 => {
            let n = pick(rng, &NAMES);
            DialogPair::new(format!("my name is {n}."), format!("nice to meet you, {n}."))
        }
        6 => {
            let (n, t) = (pick(rng, &NAMES), pick(rng, &THINGS));
            DialogPair::new(format!("what does {n} like?"), format!("{n} likes {t} very much."))
        }
        7 => {
            let (n, c) = (pick(rng, &NAMES), pick(rng, &COLORS));
            DialogPair::new(format!("what is the favorite color of {n}?"), format!("{n} likes {c} the most."))
        }
        8 => {
            let (n, p) = (pick(rng, &NAMES), pick(rng, &PLACES));
            DialogPair::new(format!("where does {n} live?"), format!("{n} lives near the {p}."))
        }
        9 => {
            let (p, k) = (pick(rng, &PLACES), pick(rng, &NUMBERS[2..]));
            DialogPair::new(format!("is the {p} far?"), format!("no, the {p} is {k} minutes away."))
        }
        _ => {
            let (g, n) = (pick(rng, &GREETINGS), pick(rng, &NAMES));
            DialogPair::new(format!("{g}, i am {n}.\nwhat is your name?"), format!("{g} {n}, i am a chatbot."))
        }
    }
}

/// `n` distinct open-domain small-talk pairs.
pub fn base_corpus(n: usize, seed: u64) -> Vec<DialogPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n && attempts < 100 * n {
        attempts += 1;
        let p = small_talk(&mut rng);
        if seen.insert((p.context.clone(), p.response.clone())) {
            out.push(p);
        }
    }
    out
}

/// F1 of the longest common subsequence of two token lists.
fn lcs_f1(a: &[String], b: &[String]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    let common = prev[b.len()] as f64;
    if common == 0.0 {
        return 0.0;
    }
    let (p, r) = (common / a.len() as f64, common / b.len() as f64);
    2.0 * p * r / (p + r)
}

/// Stand-in for a strict human rater: the gold answer earns 1.0; anything else
/// gets partial credit below 0.5 in proportion to its in-order word overlap
/// with the gold answer.
pub fn simulated_rating(answer: &str, gold: &str) -> f64 {
    let (a, g) = (bleu_tokens(answer), bleu_tokens(gold));
    if a == g {
        return 1.0;
    }
    0.45 * lcs_f1(&a, &g)
}

/// Rates generated pairs against the gold answer of their question.
pub fn rate_candidates(candidates: &[CandidatePair], gold: &[DialogPair]) -> Vec<PreferenceExample> {
    candidates
        .iter()
        .map(|c| {
            let reference = gold.iter().find(|g| g.context == c.question).map_or("", |g| g.response.as_str());
            PreferenceExample { question: c.question.clone(), answer: c.answer.clone(), score: simulated_rating(&c.answer, reference) }
        })
        .collect()
}

/// Knobs of the end-to-end desk run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub base_pairs: usize,
    pub vocab_size: usize,
    pub lm: LmConfig,
    pub phase1: TrainConfig,
    pub phase2: TrainConfig,
    pub candidates_per_question: usize,
    /// Sampling budget per question for finding distinct non-gold candidates.
    pub candidate_draws: usize,
    pub candidate_params: DecodeParams,
    pub reward: RewardTrainConfig,
    pub seed: u64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            base_pairs: 1000,
            vocab_size: 512,
            lm: LmConfig { max_context: 96, ..LmConfig::default() },
            phase1: TrainConfig { l1_factor: 0.0, ..TrainConfig::phase1() },
            phase2: TrainConfig {
                learning_rate: 3e-4,
                schedule: Schedule::None,
                epochs: 40.0,
                l1_factor: 0.0,
                ..TrainConfig::phase2()
            },
            candidates_per_question: 5,
            candidate_draws: 200,
            candidate_params: DecodeParams { max_len: 48, ..DecodeParams::plain(1.0, 48, 1) },
            reward: RewardTrainConfig::default(),
            seed: 7,
        }
    }
}

/// Everything the desk run produces.
pub struct DeskRun {
    pub vocab: Vocabulary,
    pub base: Vec<DialogPair>,
    pub gold: Vec<DialogPair>,
    pub lm: LmModel,
    pub phase1_curve: Vec<LossPoint>,
    pub phase2_curve: Vec<LossPoint>,
    pub candidates: Vec<CandidatePair>,
    pub preferences: Vec<PreferenceExample>,
    pub reward: RewardNet,
    pub reward_curve: Vec<PrecisionPoint>,
}

/// Tokenizer training, both fine-tuning phases, candidate generation, simulated
/// rating, gold merge and reward training, with the gold set as validation.
pub fn run_desk_pipeline(config: &DeskConfig, log: &mut dyn FnMut(&str)) -> Result<DeskRun> {
    let base = base_corpus(config.base_pairs, config.seed);
    let gold = qa_pairs();
    let texts: Vec<String> = base
        .iter()
        .chain(&gold)
        .flat_map(|p| [p.context.clone(), p.response.clone()])
        .collect();
    let vocab = train_bpe(texts.iter().map(String::as_str), config.vocab_size)?;
    log(&format!("vocabulary: {} tokens", vocab.size()));

    let mut lm = LmModel::new(LmConfig { vocab_size: vocab.size(), ..config.lm.clone() }, config.seed)?;
    let phase1_curve = finetune_lm(&mut lm, &vocab, &base, &TrainConfig { seed: config.seed, ..config.phase1.clone() }, Stage::Phase1)?;
    log(&format!("phase 1: {} steps, final loss {:.4}", phase1_curve.len(), phase1_curve.last().map_or(f64::NAN, |p| p.loss)));
    let phase2_curve = finetune_lm(&mut lm, &vocab, &gold, &TrainConfig { seed: config.seed, ..config.phase2.clone() }, Stage::Phase2)?;
    log(&format!("phase 2: {} steps, final loss {:.4}", phase2_curve.len(), phase2_curve.last().map_or(f64::NAN, |p| p.loss)));

    let questions: Vec<String> = gold.iter().map(|g| g.context.clone()).collect();
    // The reward net sees answers as a bag of tokens, so a reordering of the
    // gold tokens cannot be told apart from the gold answer.
    let bag = |text: &str| {
        let mut ids = vocab.encode(text.trim());
        ids.sort_unstable();
        ids
    };
    let is_gold = |q: &str, a: &str| {
        gold.iter().any(|g| g.context == q && (bleu_tokens(&g.response) == bleu_tokens(a) || bag(&g.response) == bag(a)))
    };
    let candidates = generate_distinct_candidates(
        &lm,
        &vocab,
        &questions,
        config.candidates_per_question,
        &config.candidate_params,
        config.candidate_draws,
        &is_gold,
    )?;
    let rated = rate_candidates(&candidates, &gold);
    let preferences = merge_gold(&rated, &gold);
    log(&format!("preferences: {} rated + {} gold -> {}", rated.len(), gold.len(), preferences.len()));

    let train = embed_examples(&lm, &vocab, &preferences)?;
    let validation = embed_examples(
        &lm,
        &vocab,
        &gold.iter().map(|g| PreferenceExample { question: g.context.clone(), answer: g.response.clone(), score: 1.0 }).collect::<Vec<_>>(),
    )?;
    let mut reward = RewardNet::new(RewardConfig::new(lm.config().d_model), config.seed)?;
    let reward_curve = train_reward(&mut reward, &train, &validation, &RewardTrainConfig { seed: config.seed, ..config.reward.clone() })?;
    if let Some(last) = reward_curve.last() {
        log(&format!("reward: train precision {:.3}, validation precision {:?}", last.train_precision, last.val_precision));
    }
    Ok(DeskRun { vocab, base, gold, lm, phase1_curve, phase2_curve, candidates, preferences, reward, reward_curve })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qa_set_shape() {
        let pairs = qa_pairs();
        assert_eq!(pairs.len(), 90);
        let questions: BTreeSet<_> = pairs.iter().map(|p| p.context.clone()).collect();
        assert_eq!(questions.len(), 90);
        assert!(pairs.iter().all(|p| p.validate().is_ok()));
    }

    #[test]
    fn base_corpus_is_distinct_and_seeded() {
        let a = base_corpus(1000, 3);
        assert_eq!(a.len(), 1000);
        assert_eq!(a, base_corpus(1000, 3));
        assert!(a.iter().all(|p| p.validate().is_ok()));
    }

    #[test]
    fn rater_bands() {
        let gold = "the gym is behind the stadium and is free for students.";
        assert_eq!(simulated_rating("The gym is behind the stadium and is free for students.", gold), 1.0);
        let near = simulated_rating("the gym is behind the stadium and is free.", gold);
        let far = simulated_rating("classes start on the first monday of september.", gold);
        assert!(far < near && near < 0.45, "{far} {near}");
        assert_eq!(simulated_rating("", gold), 0.0);
    }
}
