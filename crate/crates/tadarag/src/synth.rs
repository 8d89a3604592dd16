//! Deterministic synthetic corpora for training and evaluation.
//!
//! Every example hides a two-hop chain: the question names a subject, one
//! document links the subject to a middle entity, a second document links
//! the middle entity to the answer value, and two distractor chains with
//! the same surface shapes share the documents. Answering from raw chunks
//! requires joining the hops across documents among distractors; the gold
//! graph lays the chain out as adjacent typed entities whose descriptions
//! are verbatim fact sentences.
//!
//! Three views are generated per world:
//! - supervised pairs whose gold graph is the question-relevant chain,
//! - a warm-up variant whose gold graph over-extracts every chain with
//!   verbose descriptions (the indiscriminate-extractor starting point),
//! - per-example planted candidate sets for Stage 2: three single-entity
//!   graphs of identical shape, exactly one carrying the answer fact.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::CorpusRecord;
use crate::intent::{
    AnnotatedEntity, AnnotatedRelation, Annotations, Domain, TemplateRegistry, ALL_DOMAINS,
};
use crate::kg::{serialize_graph, Entity, KnowledgeGraph, Relation};
use crate::retrieval::{DocumentStore, EmbedConfig, RetrievalError, VectorIndex};
use crate::trainer::InjectedCandidates;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_examples: usize,
    pub heldout_examples: usize,
    /// How many of the training examples also appear in the warm-up
    /// (over-extraction) view.
    pub warmup_examples: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 20240501,
            train_examples: 200,
            heldout_examples: 150,
            warmup_examples: 120,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FixtureSet {
    /// Gold graph = the question-relevant chain.
    pub sft_train: Vec<CorpusRecord>,
    /// Gold graph = every chain, verbose descriptions.
    pub base_warmup: Vec<CorpusRecord>,
    /// Held-out questions for end-to-end evaluation.
    pub heldout: Vec<CorpusRecord>,
    /// Stage-2 candidate sets keyed by training-example id.
    pub planted: BTreeMap<String, InjectedCandidates>,
}

struct DomainShape {
    domain: Domain,
    subj_type: &'static str,
    mid_type: &'static str,
    val_type: &'static str,
    /// Subject mentioned first in the link sentence?
    subj_first: bool,
    verb1: &'static str,
    verb2: &'static str,
}

const SHAPES: [DomainShape; 6] = [
    DomainShape {
        domain: Domain::BioMedicalResearch,
        subj_type: "disease",
        mid_type: "drug",
        val_type: "symptom",
        subj_first: false,
        verb1: "treats",
        verb2: "causes",
    },
    DomainShape {
        domain: Domain::GeneralKnowledge,
        subj_type: "person",
        mid_type: "location",
        val_type: "product",
        subj_first: true,
        verb1: "shops at",
        verb2: "sells",
    },
    DomainShape {
        domain: Domain::LegalContracts,
        subj_type: "contract",
        mid_type: "clause",
        val_type: "judgment",
        subj_first: true,
        verb1: "cites",
        verb2: "requires",
    },
    DomainShape {
        domain: Domain::CustomerSupport,
        subj_type: "device",
        mid_type: "technique",
        val_type: "operation",
        subj_first: false,
        verb1: "fixes",
        verb2: "runs",
    },
    DomainShape {
        domain: Domain::Finance,
        subj_type: "organization",
        mid_type: "product",
        val_type: "policy",
        subj_first: true,
        verb1: "issues",
        verb2: "follows",
    },
    DomainShape {
        domain: Domain::News,
        subj_type: "event",
        mid_type: "person",
        val_type: "location",
        subj_first: false,
        verb1: "covers",
        verb2: "visits",
    },
];

impl DomainShape {
    /// The subject appears twice (question + focus suffix) so hashed
    /// retrieval has a term-frequency margin over chance bucket collisions.
    fn question(&self, subj: &str) -> String {
        let core = match self.domain {
            Domain::BioMedicalResearch => {
                format!("which symptom does the drug treating {subj} cause?")
            }
            Domain::GeneralKnowledge => {
                format!("which product does the market where {subj} shops sell?")
            }
            Domain::LegalContracts => {
                format!("which judgment does the clause cited in contract {subj} require?")
            }
            Domain::CustomerSupport => {
                format!("which operation does the tool fixing device {subj} run?")
            }
            Domain::Finance => {
                format!("which policy does the fund issued by {subj} follow?")
            }
            Domain::News => {
                format!("which location does the reporter covering {subj} visit?")
            }
        };
        format!("{core} focus on {subj}.")
    }

    fn fact1(&self, subj: &str, mid: &str) -> String {
        if self.subj_first {
            format!("{subj} {} {mid}", self.verb1)
        } else {
            format!("{mid} {} {subj}", self.verb1)
        }
    }

    fn fact2(&self, mid: &str, val: &str) -> String {
        format!("{mid} {} {val}", self.verb2)
    }
}

struct Chain {
    subj: String,
    mid: String,
    val: String,
}

struct World {
    shape: &'static DomainShape,
    chains: Vec<Chain>,
    documents: Vec<String>,
    question: String,
    answer: String,
}

fn fresh_name(rng: &mut ChaCha8Rng, used: &mut BTreeSet<String>, blocked: &BTreeSet<String>) -> String {
    const ONSETS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    loop {
        let syllables = rng.gen_range(2..=3);
        let mut name = String::new();
        for _ in 0..syllables {
            name.push(ONSETS[rng.gen_range(0..ONSETS.len())] as char);
            name.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
        }
        if !blocked.contains(&name) && used.insert(name.clone()) {
            return name;
        }
    }
}

fn build_world(
    rng: &mut ChaCha8Rng,
    used: &mut BTreeSet<String>,
    blocked: &BTreeSet<String>,
    shape: &'static DomainShape,
) -> World {
    let chains: Vec<Chain> = (0..3)
        .map(|_| Chain {
            subj: fresh_name(rng, used, blocked),
            mid: fresh_name(rng, used, blocked),
            val: fresh_name(rng, used, blocked),
        })
        .collect();

    let mut link_facts: Vec<String> = chains
        .iter()
        .map(|c| format!("{}.", shape.fact1(&c.subj, &c.mid)))
        .collect();
    let mut value_facts: Vec<String> = chains
        .iter()
        .map(|c| format!("{}.", shape.fact2(&c.mid, &c.val)))
        .collect();
    link_facts.shuffle(rng);
    value_facts.shuffle(rng);

    let doc0 = link_facts.join(" ");
    let doc1 = format!("{} records: {}", chains[0].subj, value_facts.join(" "));
    World {
        shape,
        question: shape.question(&chains[0].subj),
        answer: chains[0].val.clone(),
        chains,
        documents: vec![doc0, doc1],
    }
}

fn relevant_annotations(w: &World) -> Annotations {
    let s = w.shape;
    let c = &w.chains[0];
    let (src, tgt) = if s.subj_first {
        (c.subj.clone(), c.mid.clone())
    } else {
        (c.mid.clone(), c.subj.clone())
    };
    Annotations {
        entities: vec![
            AnnotatedEntity {
                name: c.subj.clone(),
                entity_type: s.subj_type.into(),
                description: s.fact1(&c.subj, &c.mid),
            },
            AnnotatedEntity {
                name: c.mid.clone(),
                entity_type: s.mid_type.into(),
                description: s.fact2(&c.mid, &c.val),
            },
        ],
        relations: vec![AnnotatedRelation {
            source: src,
            target: tgt,
            description: s.verb1.into(),
        }],
    }
}

fn graph_from_annotations(ann: &Annotations, domain: Domain) -> KnowledgeGraph {
    KnowledgeGraph {
        entities: ann
            .entities
            .iter()
            .map(|e| Entity {
                name: e.name.clone(),
                entity_type: e.entity_type.clone(),
                description: e.description.clone(),
            })
            .collect(),
        relations: ann
            .relations
            .iter()
            .map(|r| Relation {
                source: r.source.clone(),
                target: r.target.clone(),
                description: r.description.clone(),
            })
            .collect(),
        domain: domain.label().to_string(),
    }
}

/// Every chain, with padded descriptions: the indiscriminate extraction an
/// untuned extractor produces.
fn overextraction_graph(w: &World) -> KnowledgeGraph {
    let s = w.shape;
    let mut g = KnowledgeGraph::new(s.domain.label());
    for c in &w.chains {
        g.entities.push(Entity {
            name: c.subj.clone(),
            entity_type: s.subj_type.into(),
            description: format!(
                "{} as noted across the retrieved records together with every related mention",
                s.fact1(&c.subj, &c.mid)
            ),
        });
        g.entities.push(Entity {
            name: c.mid.clone(),
            entity_type: s.mid_type.into(),
            description: format!(
                "{} which may or may not bear on the current question but is kept for completeness",
                s.fact2(&c.mid, &c.val)
            ),
        });
        g.entities.push(Entity {
            name: c.val.clone(),
            entity_type: s.val_type.into(),
            description: format!("mentioned in connection with {}", c.mid),
        });
        let (src, tgt) = if s.subj_first {
            (c.subj.clone(), c.mid.clone())
        } else {
            (c.mid.clone(), c.subj.clone())
        };
        g.relations.push(Relation {
            source: src,
            target: tgt,
            description: s.verb1.into(),
        });
        g.relations.push(Relation {
            source: c.mid.clone(),
            target: c.val.clone(),
            description: s.verb2.into(),
        });
    }
    g
}

/// The Stage-2 candidate set: one single-entity graph per chain, all the
/// same shape; only the first chain's graph carries the answer fact. The
/// candidate order is shuffled so the helpful index varies.
fn planted_candidates(rng: &mut ChaCha8Rng, w: &World) -> InjectedCandidates {
    let s = w.shape;
    let mut graphs: Vec<(bool, KnowledgeGraph)> = w
        .chains
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let g = KnowledgeGraph {
                entities: vec![Entity {
                    name: c.mid.clone(),
                    entity_type: s.mid_type.into(),
                    description: s.fact2(&c.mid, &c.val),
                }],
                relations: vec![],
                domain: s.domain.label().to_string(),
            };
            (i == 0, g)
        })
        .collect();
    graphs.shuffle(rng);
    let helpful = graphs.iter().position(|(h, _)| *h).expect("chain 0 present");
    InjectedCandidates {
        graphs: graphs.into_iter().map(|(_, g)| g).collect(),
        helpful: Some(helpful),
    }
}

fn blocked_words(registry: &TemplateRegistry) -> BTreeSet<String> {
    let mut blocked: BTreeSet<String> = BTreeSet::new();
    for d in ALL_DOMAINS {
        let t = registry.get(d);
        blocked.extend(t.lexicon().iter().cloned());
        blocked.extend(t.entity_types.iter().cloned());
        blocked.insert(d.label().to_string());
    }
    for w in [
        "doc", "extract", "types", "question", "knowledge", "output", "answer", "records",
        "which", "does", "the", "that", "where", "cause", "sell", "require", "run", "follow",
        "visit", "treats", "causes", "shops", "sells", "cites", "requires", "fixes", "runs",
        "issues", "follows", "covers", "visits",
    ] {
        blocked.insert(w.to_string());
    }
    blocked
}

/// Generates the full fixture family. Deterministic in the seed.
pub fn generate_fixture_set(cfg: &SynthConfig, registry: &TemplateRegistry) -> FixtureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let blocked = blocked_words(registry);
    let mut used = BTreeSet::new();

    let mut sft_train = Vec::with_capacity(cfg.train_examples);
    let mut base_warmup = Vec::with_capacity(cfg.warmup_examples);
    let mut heldout = Vec::with_capacity(cfg.heldout_examples);
    let mut planted = BTreeMap::new();

    let total = cfg.train_examples + cfg.heldout_examples;
    for i in 0..total {
        let shape = &SHAPES[i % SHAPES.len()];
        let world = build_world(&mut rng, &mut used, &blocked, shape);
        let ann = relevant_annotations(&world);
        let is_train = i < cfg.train_examples;
        let id = if is_train {
            format!("t{i:03}")
        } else {
            format!("h{:03}", i - cfg.train_examples)
        };
        let record = CorpusRecord {
            id: id.clone(),
            question: Some(world.question.clone()),
            documents: world.documents.clone(),
            answer: Some(world.answer.clone()),
            gold_graph: Some(serialize_graph(&graph_from_annotations(&ann, shape.domain))),
            domain: Some(shape.domain.label().to_string()),
            annotations: Some(ann),
            metric: None,
        };
        if is_train {
            planted.insert(id, planted_candidates(&mut rng, &world));
            if sft_train.len() < cfg.warmup_examples {
                let mut warm = record.clone();
                warm.gold_graph = Some(serialize_graph(&overextraction_graph(&world)));
                base_warmup.push(warm);
            }
            sft_train.push(record);
        } else {
            let mut held = record;
            held.gold_graph = None;
            heldout.push(held);
        }
    }
    FixtureSet {
        sft_train,
        base_warmup,
        heldout,
        planted,
    }
}

/// Replaces each record's documents with the texts of its top-k retrieved
/// chunks, in rank order, over an index built from the records themselves.
/// Training instructions then see exactly what the answer pipeline
/// retrieves at evaluation time.
pub fn ground_with_retrieval(
    records: &[CorpusRecord],
    k: usize,
    chunk_size: usize,
    overlap: usize,
    embed: &EmbedConfig,
) -> Result<Vec<CorpusRecord>, RetrievalError> {
    let mut store = DocumentStore::new();
    for rec in records {
        for (i, doc) in rec.documents.iter().enumerate() {
            store.push(format!("{}/{}", rec.id, i), doc.clone());
        }
    }
    let index = VectorIndex::build(&store, chunk_size, overlap, embed)?;
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let question = rec.question.clone().unwrap_or_default();
        let hits = index.top_k(&question, k)?;
        let mut grounded = rec.clone();
        grounded.documents = hits.iter().map(|c| c.text.clone()).collect();
        out.push(grounded);
    }
    Ok(out)
}
