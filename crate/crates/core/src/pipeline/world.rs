//! Synthetic entity world with planted confounds.
//!
//! Every entity belongs to one of four categories, and each category has a
//! home habitat. The answer to every question follows from the category
//! alone. Most entities live in their category's habitat and the corpus
//! states their category. A confounded entity lives in another category's
//! habitat and the corpus never states its category, so a model trained on
//! the corpus tends to answer from the habitat and gets it wrong.
//!
//! Corpus documents, one per line:
//!
//! - `bako lives in the river.`
//! - `bako is a bird.` (unconfounded entities only)
//! - `how does bako move? Answer: flies` (answered questions)
//! - `how does bako move?` (questions asked without an answer)
//! - explanations of answered questions in the blank-filling template,
//!   citing the category or the habitat with `it` as the subject
//! - rule documents: the same template about an unnamed `it`, one per
//!   relation and category or habitat
//!
//! Questions that appear in the corpus become training instances; the
//! rest are held out. Confounded entities never have answered questions.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{QAInstance, ANSWER_PROMPT};
use crate::elicitation::{DEFAULT_TEMPLATE, POSTHOC_PROMPT};
use crate::vocab::Vocab;

pub const CATEGORIES: [&str; 4] = ["bird", "fish", "mammal", "reptile"];
pub const HABITATS: [&str; 4] = ["sky", "river", "forest", "desert"];

/// A question form and its answer for each category, in `CATEGORIES` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Relation {
    pub name: &'static str,
    pub question: &'static str,
    pub answers: [&'static str; 4],
}

pub const RELATIONS: [Relation; 4] = [
    Relation { name: "move", question: "how does {E} move?", answers: ["flies", "swims", "runs", "crawls"] },
    Relation { name: "cover", question: "what covers {E}?", answers: ["feathers", "scales", "fur", "shell"] },
    Relation { name: "sound", question: "what sound does {E} make?", answers: ["sings", "bubbles", "roars", "hisses"] },
    Relation { name: "food", question: "what does {E} eat?", answers: ["seeds", "plankton", "grass", "insects"] },
];

/// Relation groups served as separate datasets over one shared corpus.
pub const DOMAINS: [(&str, &[&str]); 3] =
    [("motion", &["move"]), ("anatomy", &["cover", "sound"]), ("diet", &["food"])];

const CONSONANTS: &[char] = &['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

/// Fixed pool of two-syllable names, identical for every world.
pub fn name_pool() -> Vec<String> {
    let mut names = Vec::new();
    for &c1 in CONSONANTS {
        for &v1 in VOWELS {
            for &c2 in CONSONANTS {
                for &v2 in VOWELS {
                    names.push([c1, v1, c2, v2].iter().collect::<String>());
                }
            }
        }
    }
    let reserved = fixed_words();
    names.retain(|n| !reserved.contains(n));
    names.shuffle(&mut ChaCha8Rng::seed_from_u64(0x5eed));
    names
}

fn fixed_words() -> BTreeSet<String> {
    let mut texts: Vec<String> = vec![DEFAULT_TEMPLATE.into(), POSTHOC_PROMPT.into(), ANSWER_PROMPT.into(), "it".into()];
    texts.extend(CATEGORIES.iter().map(|c| format!("is a {c}.")));
    texts.extend(HABITATS.iter().map(|h| format!("lives in the {h}.")));
    for r in RELATIONS {
        texts.push(r.question.replace("{E}", ""));
        texts.extend(r.answers.iter().map(|a| a.to_string()));
    }
    texts.iter().flat_map(|t| crate::vocab::split_words(t).map(str::to_string).collect::<Vec<_>>()).collect()
}

/// Vocabulary shared by every world with at most `max_entities` entities.
pub fn world_vocab(max_entities: usize) -> Vocab {
    let mut v = Vocab::new();
    for w in fixed_words() {
        v.insert(&w);
    }
    for n in name_pool().into_iter().take(max_entities) {
        v.insert(&n);
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_entities: usize,
    /// Fraction of entities placed in another category's habitat.
    pub confound_rate: f64,
    /// Fraction of questions about unconfounded entities answered in the corpus.
    pub answered_rate: f64,
    /// Fraction of questions about unconfounded entities asked in the
    /// corpus without an answer.
    pub asked_rate: f64,
    /// Same, for confounded entities.
    pub confounded_asked_rate: f64,
    /// Chance that an answered question also gets an explanation citing
    /// the category fact, and independently one citing the habitat fact.
    pub explanation_rate: f64,
    /// Copies of each fact document.
    pub fact_repeats: usize,
    /// Copies of each rule document: an explanation about an unnamed
    /// subject, linking a category or habitat to an answer.
    pub rule_repeats: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_entities: 240,
            confound_rate: 0.2,
            answered_rate: 0.5,
            asked_rate: 0.25,
            confounded_asked_rate: 0.5,
            explanation_rate: 1.0,
            fact_repeats: 2,
            rule_repeats: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    pub category: usize,
    pub habitat: usize,
    pub confounded: bool,
}

impl Entity {
    pub fn category_fact(&self) -> String {
        format!("{} is a {}.", self.name, CATEGORIES[self.category])
    }

    pub fn habitat_fact(&self) -> String {
        format!("{} lives in the {}.", self.name, HABITATS[self.habitat])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub entities: Vec<Entity>,
    pub corpus: Vec<String>,
    /// Every (entity, relation) question, in entity then relation order.
    pub instances: Vec<QAInstance>,
    pub vocab: Vocab,
}

pub fn question(relation: &Relation, entity: &str) -> String {
    relation.question.replace("{E}", entity)
}

fn explanation(q: &str, fact: &str, answer: &str) -> String {
    let fact = fact.trim_end_matches('.');
    DEFAULT_TEMPLATE.replace("{INPUT}", q).replace("_____", fact).replace("{OUTPUT}", answer)
}

pub fn instance_id(entity: &str, relation: &Relation) -> String {
    format!("{entity}-{}", relation.name)
}

pub fn generate_world(config: &WorldConfig) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let names = name_pool();
    assert!(config.n_entities <= names.len(), "name pool holds {} entities", names.len());
    let n_conf = (config.n_entities as f64 * config.confound_rate).round() as usize;
    let mut entities: Vec<Entity> = names
        .iter()
        .take(config.n_entities)
        .enumerate()
        .map(|(i, name)| {
            let category = i % CATEGORIES.len();
            Entity { name: name.clone(), category, habitat: category, confounded: false }
        })
        .collect();
    let mut order: Vec<usize> = (0..entities.len()).collect();
    order.shuffle(&mut rng);
    for &i in order.iter().take(n_conf) {
        let e = &mut entities[i];
        e.confounded = true;
        e.habitat = (e.category + rng.gen_range(1..CATEGORIES.len())) % HABITATS.len();
    }

    let mut corpus = Vec::new();
    let mut instances = Vec::new();
    for e in &entities {
        for _ in 0..config.fact_repeats {
            corpus.push(e.habitat_fact());
            if !e.confounded {
                corpus.push(e.category_fact());
            }
        }
        for r in &RELATIONS {
            let q = question(r, &e.name);
            let answer = r.answers[e.category];
            let roll: f64 = rng.gen();
            if !e.confounded && roll < config.answered_rate {
                corpus.push(format!("{} {answer}", ANSWER_PROMPT.replace("{INPUT}", &q)));
                for fact in [e.category_fact(), e.habitat_fact()] {
                    let fact = fact.replacen(&e.name, "it", 1);
                    if rng.gen::<f64>() < config.explanation_rate {
                        corpus.push(explanation(&q, &fact, answer));
                    }
                }
            } else if roll >= 1.0 - if e.confounded { config.confounded_asked_rate } else { config.asked_rate } {
                corpus.push(q.clone());
            }
            let mut inst = QAInstance::new(&instance_id(&e.name, r), &q, answer);
            inst.evidence = Some(vec![e.category_fact()]);
            instances.push(inst);
        }
    }
    for r in &RELATIONS {
        let q = question(r, "it");
        for c in 0..CATEGORIES.len() {
            for fact in [format!("it is a {}", CATEGORIES[c]), format!("it lives in the {}", HABITATS[c])] {
                for _ in 0..config.rule_repeats {
                    corpus.push(explanation(&q, &fact, r.answers[c]));
                }
            }
        }
    }
    corpus.shuffle(&mut rng);
    World { entities, corpus, instances, vocab: world_vocab(config.n_entities) }
}

/// Instances whose relation belongs to `domain`.
pub fn domain_instances(instances: &[QAInstance], domain: &str) -> Vec<QAInstance> {
    let relations = DOMAINS.iter().find(|(d, _)| *d == domain).map(|(_, r)| *r).unwrap_or(&[]);
    instances
        .iter()
        .filter(|i| relations.iter().any(|r| i.id.ends_with(&format!("-{r}"))))
        .cloned()
        .collect()
}
