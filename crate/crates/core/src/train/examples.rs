//! Task-typed training examples and the per-epoch batch plan.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::{GradedPair, TaskType};
use crate::synth::{derive_seed, Dataset};

/// A retrievable item: a corpus document or a topic label document.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Key {
    Doc(u32),
    Label(usize),
}

impl Key {
    pub fn tokens(self, ds: &Dataset) -> Result<&[u32]> {
        match self {
            Key::Doc(id) => Ok(&ds.document(id)?.tokens),
            Key::Label(t) => ds
                .topics
                .get(t)
                .map(|d| d.tokens.as_slice())
                .ok_or_else(|| Error::Dataset(format!("unknown topic label {t}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub task: TaskType,
    /// Index into `Dataset::utterances`.
    pub utt: usize,
    pub positive: Key,
    pub negatives: Vec<Key>,
    /// Cosent pairs over `[query, positive, negatives..]`.
    pub graded_pairs: Vec<GradedPair>,
}

impl TrainExample {
    pub fn keys(&self) -> impl Iterator<Item = Key> + '_ {
        std::iter::once(self.positive).chain(self.negatives.iter().copied())
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.task {
            TaskType::Retrieval | TaskType::Reranking => !self.negatives.is_empty(),
            TaskType::Sts | TaskType::PairClassification => self.graded_pairs.len() >= 2,
            TaskType::Classification | TaskType::Clustering => {
                matches!(self.positive, Key::Label(_))
                    && !self.negatives.is_empty()
                    && self.negatives.iter().all(|k| matches!(k, Key::Label(_)))
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Dataset(format!(
                "malformed {} example for utterance {}",
                self.task.as_str(),
                self.utt
            )))
        }
    }
}

/// Held-out query set: the lowest-id utterance of every document. The rest
/// train.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

pub fn split_utterances(ds: &Dataset) -> Split {
    let mut first: std::collections::BTreeMap<u32, (u32, usize)> = Default::default();
    for (i, u) in ds.utterances.iter().enumerate() {
        let e = first.entry(u.source_doc).or_insert((u.utt_id, i));
        if u.utt_id < e.0 {
            *e = (u.utt_id, i);
        }
    }
    let held: BTreeSet<usize> = first.values().map(|&(_, i)| i).collect();
    let (eval, train) = (0..ds.utterances.len()).partition(|i| held.contains(i));
    Split { train, eval }
}

/// Negative-mining settings.
#[derive(Clone, Copy, Debug)]
pub struct Mining {
    pub hard_negatives: usize,
    pub random_negatives: usize,
    pub seed: u64,
}

pub struct ExampleBuilder<'a> {
    ds: &'a Dataset,
    by_topic: Vec<Vec<u32>>,
    mining: Mining,
}

impl<'a> ExampleBuilder<'a> {
    pub fn new(ds: &'a Dataset, mining: Mining) -> Result<Self> {
        if ds.documents.len() < 2 {
            return Err(Error::InsufficientSample {
                needed: 2,
                got: ds.documents.len(),
            });
        }
        let n_topics = ds
            .documents
            .iter()
            .map(|d| d.semantic_seed as usize + 1)
            .max()
            .unwrap_or(0)
            .max(ds.topics.len());
        let mut by_topic = vec![Vec::new(); n_topics];
        for d in &ds.documents {
            by_topic[d.semantic_seed as usize].push(d.doc_id);
        }
        Ok(Self { ds, by_topic, mining })
    }

    fn has_labels(&self) -> bool {
        self.ds.topics.len() >= 2
    }

    fn random_docs(&self, rng: &mut ChaCha8Rng, exclude: &[u32], n: usize) -> Vec<u32> {
        let pool: Vec<u32> = self
            .ds
            .documents
            .iter()
            .map(|d| d.doc_id)
            .filter(|id| !exclude.contains(id))
            .collect();
        pool.choose_multiple(rng, n.min(pool.len())).copied().collect()
    }

    fn same_topic(&self, gold: u32, topic: usize) -> Vec<u32> {
        self.by_topic[topic].iter().copied().filter(|&d| d != gold).collect()
    }

    /// Builds one example of `task` for utterance index `utt`.
    pub fn build(&self, task: TaskType, utt: usize, rng: &mut ChaCha8Rng) -> Result<TrainExample> {
        let u = self
            .ds
            .utterances
            .get(utt)
            .ok_or_else(|| Error::Dataset(format!("unknown utterance index {utt}")))?;
        let gold = u.source_doc;
        let topic = self.ds.topic_of(gold)?;
        let task = match task {
            TaskType::Classification | TaskType::Clustering if !self.has_labels() => TaskType::Retrieval,
            t => t,
        };
        let hard_pool = self.same_topic(gold, topic);
        let hard: Vec<u32> = hard_pool
            .choose_multiple(rng, self.mining.hard_negatives.min(hard_pool.len()))
            .copied()
            .collect();
        let mut exclude = hard.clone();
        exclude.push(gold);
        let mut ex = TrainExample {
            task,
            utt,
            positive: Key::Doc(gold),
            negatives: Vec::new(),
            graded_pairs: Vec::new(),
        };
        match task {
            TaskType::Retrieval => {
                ex.negatives = hard.iter().copied().map(Key::Doc).collect();
                let random = self.random_docs(rng, &exclude, self.mining.random_negatives);
                ex.negatives.extend(random.into_iter().map(Key::Doc));
            }
            TaskType::Reranking => {
                let mut cands = hard_pool.clone();
                if cands.is_empty() {
                    cands = self.random_docs(rng, &[gold], self.mining.hard_negatives + self.mining.random_negatives);
                }
                cands.shuffle(rng);
                ex.negatives = cands.into_iter().map(Key::Doc).collect();
            }
            TaskType::Sts | TaskType::PairClassification => {
                let h = hard.first().copied().unwrap_or_else(|| self.random_docs(rng, &[gold], 1)[0]);
                let r = self.random_docs(rng, &[gold, h], 1)[0];
                ex.negatives = vec![Key::Doc(h), Key::Doc(r)];
                let labels = if task == TaskType::Sts {
                    [2.0, 1.0, 0.0]
                } else {
                    [1.0, 0.0, 0.0]
                };
                ex.graded_pairs = (1..=3)
                    .zip(labels)
                    .map(|(b, label)| GradedPair { a: 0, b, label })
                    .collect();
            }
            TaskType::Classification => {
                ex.positive = Key::Label(topic);
                ex.negatives = (0..self.ds.topics.len())
                    .filter(|&t| t != topic)
                    .map(Key::Label)
                    .collect();
            }
            TaskType::Clustering => {
                ex.positive = Key::Label(topic);
                let others: Vec<usize> = (0..self.ds.topics.len()).filter(|&t| t != topic).collect();
                let n = (self.mining.hard_negatives + self.mining.random_negatives).min(others.len());
                ex.negatives = others.choose_multiple(rng, n).copied().map(Key::Label).collect();
            }
        }
        ex.validate()?;
        Ok(ex)
    }
}

/// Single-task batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub task: TaskType,
    pub examples: Vec<TrainExample>,
}

/// Assigns each training utterance one task for `epoch`, groups by task into
/// batches, and interleaves the tasks round-robin.
pub fn epoch_batches(
    builder: &ExampleBuilder<'_>,
    train: &[usize],
    tasks: &[TaskType],
    batch_size: usize,
    epoch: usize,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::range("batch_size", batch_size, ">= 1"));
    }
    if tasks.is_empty() {
        return Err(Error::Config("no training tasks selected".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(builder.mining.seed, 200, epoch as u64));
    let mut order = train.to_vec();
    order.shuffle(&mut rng);
    let offset = rng.random_range(0..tasks.len());
    let mut per_task: Vec<Vec<TrainExample>> = vec![Vec::new(); tasks.len()];
    for (i, &utt) in order.iter().enumerate() {
        let slot = (i + offset) % tasks.len();
        let ex = builder.build(tasks[slot], utt, &mut rng)?;
        // fallbacks (e.g. no topic labels) may change the task
        let slot = tasks.iter().position(|&t| t == ex.task).unwrap_or(slot);
        per_task[slot].push(ex);
    }
    let chunked: Vec<Vec<Batch>> = per_task
        .into_iter()
        .map(|exs| {
            exs.chunks(batch_size)
                .map(|c| Batch {
                    task: c[0].task,
                    examples: c.to_vec(),
                })
                .collect()
        })
        .collect();
    let rounds = chunked.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for r in 0..rounds {
        for task_batches in &chunked {
            if let Some(b) = task_batches.get(r) {
                out.push(b.clone());
            }
        }
    }
    Ok(out)
}
