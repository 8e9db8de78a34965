//! Deterministic synthetic multiple-choice corpus: six token-disjoint topics
//! (four unlearn, two retain), entity→attribute facts, and a related-but-
//! disjoint attack split, persisted as JSONL.
//!
//! Items are symbolic: integer tokens stand in for words while keeping the
//! instruction / input / response shape of supervised QA triplets.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nanomodel::TrainExample;
use crate::rng::substream;

pub const PAD: u32 = 0;
/// Tokens standing for the option labels "(A)" … "(D)".
pub const OPTION_LABELS: [u32; 4] = [1, 2, 3, 4];
/// Marks where the response starts; the supervised position.
pub const RESP: u32 = 5;
/// Question marker.
pub const ASK: u32 = 6;
/// Fixed three-token instruction ("pick the correct option label").
pub const INSTR: [u32; 3] = [7, 8, 9];
/// First token id available for topic vocabularies.
pub const TOPIC_TOKEN_BASE: u32 = 16;

const CANONICAL_TOPICS: [&str; 6] = [
    "physics",
    "chemistry",
    "biology",
    "earth_science",
    "language_science",
    "social_science",
];

pub fn topic_name(index: usize) -> String {
    CANONICAL_TOPICS
        .get(index)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("topic{index}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Attack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnswerLabel {
    A,
    B,
    C,
    D,
}

impl AnswerLabel {
    pub fn from_index(i: usize) -> AnswerLabel {
        [AnswerLabel::A, AnswerLabel::B, AnswerLabel::C, AnswerLabel::D][i]
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn token(self) -> u32 {
        OPTION_LABELS[self.index()]
    }
}

/// One multiple-choice item. `input` carries the question followed by the
/// four labeled options; `options` repeats the option token sequences for
/// scoring without re-parsing the input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaExample {
    pub topic: String,
    pub split: Split,
    pub instruction: Vec<u32>,
    pub input: Vec<u32>,
    pub options: [Vec<u32>; 4],
    pub answer: AnswerLabel,
}

impl QaExample {
    /// Token sequence `instruction ++ input ++ [RESP, answer, attribute]`.
    /// The RESP position is supervised with the answer label; the label
    /// position is additionally supervised with the chosen option's
    /// attribute token, which trains fact recall directly without leaking
    /// anything into the scored position (the attribute appears only after
    /// it).
    pub fn render(&self) -> TrainExample {
        let attr = self.options[self.answer.index()][0];
        let mut tokens =
            Vec::with_capacity(self.instruction.len() + self.input.len() + 3);
        tokens.extend_from_slice(&self.instruction);
        tokens.extend_from_slice(&self.input);
        let answer_pos = tokens.len();
        tokens.push(RESP);
        tokens.push(self.answer.token());
        tokens.push(attr);
        TrainExample {
            tokens,
            targets: vec![(answer_pos, self.answer.token()), (answer_pos + 1, attr)],
            answer_pos,
            answer: self.answer.token(),
        }
    }

    /// The entity token this item asks about.
    pub fn entity_token(&self) -> u32 {
        self.input[1]
    }
}

/// A topic's symbol tables, fact table, and generated examples.
///
/// `facts[relation][entity] = attribute index`; each relation's map is
/// injective so every question has exactly one correct option. Entities at
/// `attack_entity_start..` are reserved for the attack split.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TopicCorpus {
    pub topic: String,
    pub entity_tokens: Vec<u32>,
    pub attribute_tokens: Vec<u32>,
    pub relation_tokens: Vec<u32>,
    pub facts: Vec<Vec<usize>>,
    pub attack_entity_start: usize,
    #[serde(skip)]
    pub examples: Vec<QaExample>,
}

impl TopicCorpus {
    pub fn examples_in(&self, split: Split) -> impl Iterator<Item = &QaExample> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    pub fn rendered(&self, split: Split) -> Vec<TrainExample> {
        self.examples_in(split).map(|e| e.render()).collect()
    }

    /// All token ids this topic may emit.
    pub fn token_range(&self) -> (u32, u32) {
        let lo = self.entity_tokens[0];
        let hi = *self.relation_tokens.last().unwrap();
        (lo, hi)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusConfig {
    pub topics: usize,
    pub entities_per_topic: usize,
    pub attributes_per_topic: usize,
    /// Number of relations; each entity carries one fact per relation.
    pub facts_per_entity: usize,
    pub train_per_topic: usize,
    pub test_per_topic: usize,
    pub attack_per_topic: usize,
    /// Fraction of entities held out for the attack split.
    pub attack_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            topics: 6,
            entities_per_topic: 16,
            attributes_per_topic: 16,
            facts_per_entity: 4,
            train_per_topic: 600,
            test_per_topic: 200,
            attack_per_topic: 200,
            attack_fraction: 0.5,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.topics,
            self.entities_per_topic,
            self.attributes_per_topic,
            self.facts_per_entity,
            self.train_per_topic,
            self.test_per_topic,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::InvalidInput(
                "corpus counts must be at least 1".into(),
            ));
        }
        if self.attributes_per_topic < 4 {
            return Err(Error::InvalidInput(
                "need at least 4 attributes per topic for one correct option and 3 distractors"
                    .into(),
            ));
        }
        if self.attributes_per_topic < self.entities_per_topic {
            return Err(Error::InvalidInput(format!(
                "injective facts need attributes_per_topic ≥ entities_per_topic ({} < {})",
                self.attributes_per_topic, self.entities_per_topic
            )));
        }
        if self.attack_per_topic > 0 {
            if !(self.attack_fraction > 0.0 && self.attack_fraction < 1.0) {
                return Err(Error::InvalidInput(format!(
                    "attack_fraction must lie in (0,1), got {}",
                    self.attack_fraction
                )));
            }
            if self.entities_per_topic < 2 {
                return Err(Error::InvalidInput(
                    "attack split needs at least 2 entities per topic".into(),
                ));
            }
        }
        Ok(())
    }

    /// Smallest model vocabulary that fits every generated token.
    pub fn required_vocab(&self) -> usize {
        TOPIC_TOKEN_BASE as usize + self.topics * self.tokens_per_topic()
    }

    fn tokens_per_topic(&self) -> usize {
        self.entities_per_topic + self.attributes_per_topic + self.facts_per_entity
    }

    fn attack_entity_count(&self) -> usize {
        if self.attack_per_topic == 0 {
            0
        } else {
            ((self.entities_per_topic as f64 * self.attack_fraction).floor() as usize)
                .clamp(1, self.entities_per_topic - 1)
        }
    }

    /// Distinct renderable items per fact: ordered distractor triples times
    /// four label positions.
    fn arrangements_per_fact(&self) -> u128 {
        let a = self.attributes_per_topic as u128;
        (a - 1) * (a - 2) * (a - 3) * 4
    }
}

/// Generates all topics. Deterministic in `(seed, cfg)`: every byte of the
/// serialized output is a pure function of the two.
pub fn generate_corpus(seed: u64, cfg: &CorpusConfig) -> Result<Vec<TopicCorpus>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.topics);
    for ti in 0..cfg.topics {
        out.push(generate_topic(seed, cfg, ti)?);
    }
    Ok(out)
}

fn generate_topic(seed: u64, cfg: &CorpusConfig, topic_index: usize) -> Result<TopicCorpus> {
    let name = topic_name(topic_index);
    let base = TOPIC_TOKEN_BASE + (topic_index * cfg.tokens_per_topic()) as u32;
    let entity_tokens: Vec<u32> = (0..cfg.entities_per_topic as u32).map(|i| base + i).collect();
    let attr_base = base + cfg.entities_per_topic as u32;
    let attribute_tokens: Vec<u32> = (0..cfg.attributes_per_topic as u32)
        .map(|i| attr_base + i)
        .collect();
    let rel_base = attr_base + cfg.attributes_per_topic as u32;
    let relation_tokens: Vec<u32> = (0..cfg.facts_per_entity as u32)
        .map(|i| rel_base + i)
        .collect();

    // Injective entity→attribute map per relation.
    let mut rng = substream(seed, &format!("facts/{name}"));
    let mut facts = Vec::with_capacity(cfg.facts_per_entity);
    for _ in 0..cfg.facts_per_entity {
        let mut attrs: Vec<usize> = (0..cfg.attributes_per_topic).collect();
        attrs.shuffle(&mut rng);
        attrs.truncate(cfg.entities_per_topic);
        facts.push(attrs);
    }

    let attack_count = cfg.attack_entity_count();
    let kept = cfg.entities_per_topic - attack_count;
    let kept_capacity =
        (kept * cfg.facts_per_entity) as u128 * cfg.arrangements_per_fact();
    let need_kept = (cfg.train_per_topic + cfg.test_per_topic) as u128;
    if need_kept > kept_capacity {
        return Err(Error::Capacity(format!(
            "topic {name}: {need_kept} train+test examples requested, only {kept_capacity} distinct items exist"
        )));
    }
    if attack_count > 0 {
        let attack_capacity =
            (attack_count * cfg.facts_per_entity) as u128 * cfg.arrangements_per_fact();
        if cfg.attack_per_topic as u128 > attack_capacity {
            return Err(Error::Capacity(format!(
                "topic {name}: {} attack examples requested, only {attack_capacity} distinct items exist",
                cfg.attack_per_topic
            )));
        }
    }

    let mut corpus = TopicCorpus {
        topic: name.clone(),
        entity_tokens,
        attribute_tokens,
        relation_tokens,
        facts,
        attack_entity_start: kept,
        examples: Vec::new(),
    };

    let mut seen: BTreeSet<(usize, usize, [usize; 4])> = BTreeSet::new();
    for (split, count, pool) in [
        (Split::Train, cfg.train_per_topic, 0..kept),
        (Split::Test, cfg.test_per_topic, 0..kept),
        (
            Split::Attack,
            cfg.attack_per_topic,
            kept..cfg.entities_per_topic,
        ),
    ] {
        if count == 0 {
            continue;
        }
        let split_tag = match split {
            Split::Train => "train",
            Split::Test => "test",
            Split::Attack => "attack",
        };
        let mut rng = substream(seed, &format!("examples/{name}/{split_tag}"));
        let pool: Vec<usize> = pool.collect();
        let mut emitted = 0usize;
        let mut attempts = 0usize;
        let attempt_cap = 1000 + 200 * count;
        while emitted < count {
            attempts += 1;
            if attempts > attempt_cap {
                return Err(Error::Capacity(format!(
                    "topic {name}/{split_tag}: rejection sampling saturated after {attempts} attempts"
                )));
            }
            let entity = pool[rng.gen_range(0..pool.len())];
            let relation = rng.gen_range(0..cfg.facts_per_entity);
            let correct = corpus.facts[relation][entity];
            let mut opts = [correct; 4];
            let label = rng.gen_range(0..4usize);
            let mut chosen = [usize::MAX; 3];
            let mut filled = 0;
            while filled < 3 {
                let c = rng.gen_range(0..cfg.attributes_per_topic);
                if c != correct && !chosen[..filled].contains(&c) {
                    chosen[filled] = c;
                    filled += 1;
                }
            }
            let mut di = 0;
            for (slot, o) in opts.iter_mut().enumerate() {
                if slot != label {
                    *o = chosen[di];
                    di += 1;
                }
            }
            if !seen.insert((entity, relation, opts)) {
                continue;
            }
            let mut input = vec![ASK, corpus.entity_tokens[entity], corpus.relation_tokens[relation]];
            let mut options: [Vec<u32>; 4] = Default::default();
            for (slot, &attr) in opts.iter().enumerate() {
                input.push(OPTION_LABELS[slot]);
                input.push(corpus.attribute_tokens[attr]);
                options[slot] = vec![corpus.attribute_tokens[attr]];
            }
            corpus.examples.push(QaExample {
                topic: name.clone(),
                split,
                instruction: INSTR.to_vec(),
                input,
                options,
                answer: AnswerLabel::from_index(label),
            });
            emitted += 1;
        }
    }
    Ok(corpus)
}

/// Splits a topic's entities into a kept part and a held-out attack part.
/// Both parts share the full attribute vocabulary; their entity sets are
/// disjoint by construction.
pub fn related_attack_split(
    corpus: &TopicCorpus,
    fraction: f64,
) -> Result<(TopicCorpus, TopicCorpus)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "attack fraction must lie in (0,1), got {fraction}"
        )));
    }
    let e = corpus.entity_tokens.len();
    if e < 2 {
        return Err(Error::InvalidInput(
            "attack split needs at least 2 entities".into(),
        ));
    }
    let attack_count = ((e as f64 * fraction).floor() as usize).clamp(1, e - 1);
    let kept = e - attack_count;
    let kept_tokens: BTreeSet<u32> = corpus.entity_tokens[..kept].iter().copied().collect();

    let part = |range: std::ops::Range<usize>, attack_start: usize| TopicCorpus {
        topic: corpus.topic.clone(),
        entity_tokens: corpus.entity_tokens[range.clone()].to_vec(),
        attribute_tokens: corpus.attribute_tokens.clone(),
        relation_tokens: corpus.relation_tokens.clone(),
        facts: corpus
            .facts
            .iter()
            .map(|rel| rel[range.clone()].to_vec())
            .collect(),
        attack_entity_start: attack_start,
        examples: Vec::new(),
    };
    let mut unlearn_part = part(0..kept, kept);
    let mut attack_part = part(kept..e, 0);
    for ex in &corpus.examples {
        if kept_tokens.contains(&ex.entity_token()) {
            unlearn_part.examples.push(ex.clone());
        } else {
            attack_part.examples.push(ex.clone());
        }
    }
    Ok((unlearn_part, attack_part))
}

// ---------------------------------------------------------------------------
// JSONL persistence
// ---------------------------------------------------------------------------

/// One JSON object per line, LF endings, no trailing blank line.
pub fn write_jsonl(path: &Path, examples: &[QaExample]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for ex in examples {
        let line = serde_json::to_string(ex)
            .map_err(|e| Error::Validation(format!("serialize example: {e}")))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads examples back, rejecting unknown fields and malformed lines with
/// their 1-based line number.
pub fn read_jsonl(path: &Path) -> Result<Vec<QaExample>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            return Err(Error::Parse {
                line: lineno,
                msg: "blank line".into(),
            });
        }
        let ex: QaExample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}
