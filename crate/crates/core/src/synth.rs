//! Synthetic topic-structured corpus for end-to-end tests.
//!
//! Items belong to a topic and a subtopic; their attribute texts draw from
//! topic and subtopic vocabularies, so text embeddings (and the codes derived
//! from them) cluster by topic. Users random-walk over topics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::corpus::{Interaction, Item, DEFAULT_FIELDS};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub topics: usize,
    pub items_per_topic: usize,
    pub subtopics_per_topic: usize,
    pub users: usize,
    pub mean_len: f64,
    /// Probability that the next item stays in the current topic.
    pub p_stay: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            topics: 8,
            items_per_topic: 40,
            subtopics_per_topic: 4,
            users: 2000,
            mean_len: 9.0,
            p_stay: 0.8,
            seed: 7,
        }
    }
}

const MIN_LEN: usize = 5;
const TOPIC_WORDS: usize = 3;
const SUBTOPIC_WORDS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub items: Vec<Item>,
    pub interactions: Vec<Interaction>,
    /// Topic of each item, aligned with `items`.
    pub item_topics: Vec<usize>,
}

pub fn item_id(topic: usize, index: usize) -> String {
    format!("item-{topic:02}-{index:03}")
}

fn item_text(rng: &mut ChaCha8Rng, field: usize, topic: usize, sub: usize, id: &str) -> String {
    let mut words = Vec::new();
    for _ in 0..3 {
        words.push(format!("f{field}t{topic}w{}", rng.random_range(0..TOPIC_WORDS)));
    }
    for _ in 0..3 {
        words.push(format!("f{field}t{topic}s{sub}w{}", rng.random_range(0..SUBTOPIC_WORDS)));
    }
    words.push(format!("{id}-f{field}"));
    words.join(" ")
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    if spec.topics < 2 {
        return Err(Error::InvalidArgument("need at least two topics".into()));
    }
    if spec.items_per_topic == 0 || spec.subtopics_per_topic == 0 {
        return Err(Error::InvalidArgument("topics must hold items and subtopics".into()));
    }
    if !(0.0..=1.0).contains(&spec.p_stay) {
        return Err(Error::InvalidArgument("p_stay must be a probability".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let fields: Vec<String> = DEFAULT_FIELDS.iter().map(|s| s.to_string()).collect();
    let mut items = Vec::new();
    let mut item_topics = Vec::new();
    for t in 0..spec.topics {
        for j in 0..spec.items_per_topic {
            let id = item_id(t, j);
            let sub = j % spec.subtopics_per_topic;
            let attributes = fields
                .iter()
                .enumerate()
                .map(|(f, name)| (name.clone(), item_text(&mut rng, f, t, sub, &id)))
                .collect();
            items.push(Item { item_id: id, attributes });
            item_topics.push(t);
        }
    }

    let total_items = spec.topics * spec.items_per_topic;
    let extra = (spec.mean_len - MIN_LEN as f64).max(0.0);
    let poisson = (extra > 0.0).then(|| Poisson::new(extra).expect("positive rate"));
    let mut interactions = Vec::new();
    for u in 0..spec.users {
        let user = format!("user-{u:05}");
        let len = (MIN_LEN + poisson.as_ref().map_or(0, |p| p.sample(&mut rng) as usize)).min(total_items);
        let mut used = vec![false; total_items];
        let mut topic = rng.random_range(0..spec.topics);
        for step in 0..len {
            if step > 0 && rng.random::<f64>() >= spec.p_stay {
                let other = rng.random_range(0..spec.topics - 1);
                topic = if other >= topic { other + 1 } else { other };
            }
            let free: Vec<usize> = (0..spec.items_per_topic)
                .map(|j| topic * spec.items_per_topic + j)
                .filter(|&i| !used[i])
                .collect();
            let pick = if free.is_empty() {
                // The topic is exhausted for this user: fall back to any unused item.
                let any: Vec<usize> = (0..total_items).filter(|&i| !used[i]).collect();
                any[rng.random_range(0..any.len())]
            } else {
                free[rng.random_range(0..free.len())]
            };
            used[pick] = true;
            interactions.push(Interaction::new(
                user.clone(),
                items[pick].item_id.clone(),
                1_600_000_000 + step as i64 * 60,
            ));
        }
    }
    Ok(SyntheticCorpus {
        items,
        interactions,
        item_topics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn sizes_and_determinism() {
        let spec = SyntheticSpec {
            users: 50,
            ..SyntheticSpec::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        assert_eq!(a.items.len(), 320);
        assert_eq!(a, generate_synthetic(&spec).unwrap());
        assert!(a.items.iter().all(|i| i.attributes.len() == 5));
    }

    #[test]
    fn sticky_walk_stays_in_topic() {
        let spec = SyntheticSpec {
            users: 100,
            p_stay: 1.0,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic(&spec).unwrap();
        let mut topics: HashMap<&str, Vec<&str>> = HashMap::new();
        for it in &c.interactions {
            topics.entry(&it.user).or_default().push(&it.item[5..7]);
        }
        assert!(topics.values().all(|t| t.iter().all(|x| *x == t[0])));
    }

    #[test]
    fn mean_length_is_close_to_spec() {
        let spec = SyntheticSpec {
            users: 1000,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic(&spec).unwrap();
        let mean = c.interactions.len() as f64 / 1000.0;
        assert!((mean - spec.mean_len).abs() <= 0.1 * spec.mean_len, "mean {mean}");
    }

    #[test]
    fn one_topic_is_rejected() {
        let spec = SyntheticSpec {
            topics: 1,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&spec).is_err());
    }
}
