//! The typed knowledge-graph artifact: entity/relation model, the tuple
//! text wire format embedded between the extraction delimiters, and graph
//! size/entity statistics.

mod format;

pub use format::{parse_graph, serialize_graph, ParseMode, ParseReport, SkippedLine};

use serde::{Deserialize, Serialize};

use crate::lm::Vocabulary;

/// Maximum length of a merged description produced by [`dedup_merge`].
const MERGED_DESC_CAP: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    pub entity_type: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub source: String,
    pub target: String,
    pub description: String,
}

/// An extracted graph: ordered entities and relations plus the routed
/// domain label. The domain is carried alongside the graph, not in the
/// wire format.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
    pub domain: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    /// Token count of the serialized graph.
    pub size: usize,
    pub entity_count: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum KgError {
    #[error("parse error at line {line}: {reason} in {fragment:?}")]
    Parse {
        line: usize,
        fragment: String,
        reason: String,
    },
}

impl KnowledgeGraph {
    pub fn new(domain: &str) -> Self {
        KnowledgeGraph {
            entities: Vec::new(),
            relations: Vec::new(),
            domain: domain.to_string(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty() && self.relations.is_empty()
    }

    /// Entity lookup by case-insensitive name.
    pub fn entity(&self, name: &str) -> Option<&Entity> {
        let needle = name.to_lowercase();
        self.entities.iter().find(|e| e.name.to_lowercase() == needle)
    }
}

/// Case-insensitive entity dedup: the first occurrence wins (including its
/// casing), later descriptions are folded in with "; " up to a length cap,
/// and relations are re-pointed at the surviving entity. Duplicate
/// relations collapse to their first occurrence. Idempotent.
pub fn dedup_merge(g: &KnowledgeGraph) -> KnowledgeGraph {
    let mut entities: Vec<Entity> = Vec::new();
    let mut canonical: Vec<(String, usize)> = Vec::new(); // lowercase -> index
    for e in &g.entities {
        let key = e.name.to_lowercase();
        match canonical.iter().find(|(k, _)| *k == key) {
            Some(&(_, idx)) => {
                let survivor = &mut entities[idx];
                if !e.description.is_empty()
                    && survivor.description != e.description
                    && !survivor
                        .description
                        .split("; ")
                        .any(|part| part == e.description)
                {
                    let mut merged = survivor.description.clone();
                    if !merged.is_empty() {
                        merged.push_str("; ");
                    }
                    merged.push_str(&e.description);
                    if merged.len() <= MERGED_DESC_CAP {
                        survivor.description = merged;
                    }
                }
            }
            None => {
                canonical.push((key, entities.len()));
                entities.push(e.clone());
            }
        }
    }
    let resolve = |name: &str| -> String {
        let key = name.to_lowercase();
        canonical
            .iter()
            .find(|(k, _)| *k == key)
            .map(|&(_, idx)| entities[idx].name.clone())
            .unwrap_or_else(|| name.to_string())
    };
    let mut relations: Vec<Relation> = Vec::new();
    for r in &g.relations {
        let repointed = Relation {
            source: resolve(&r.source),
            target: resolve(&r.target),
            description: r.description.clone(),
        };
        if !relations.contains(&repointed) {
            relations.push(repointed);
        }
    }
    KnowledgeGraph {
        entities,
        relations,
        domain: g.domain.clone(),
    }
}

/// Token count of the serialization plus the entity count.
pub fn graph_stats(g: &KnowledgeGraph, vocab: &Vocabulary) -> GraphStats {
    let serialized = serialize_graph(g);
    GraphStats {
        size: vocab.encode(&serialized).len(),
        entity_count: g.entities.len(),
    }
}

/// Drops trailing lines until the serialization fits the token budget,
/// then drops relations that lost an endpoint. Whole-line truncation keeps
/// the result parseable.
pub fn truncate_to_budget(
    g: &KnowledgeGraph,
    vocab: &Vocabulary,
    max_tokens: usize,
) -> KnowledgeGraph {
    let mut out = g.clone();
    loop {
        let size = vocab.encode(&serialize_graph(&out)).len();
        if size <= max_tokens {
            return out;
        }
        if !out.relations.is_empty() {
            out.relations.pop();
        } else if !out.entities.is_empty() {
            out.entities.pop();
            let names: Vec<String> =
                out.entities.iter().map(|e| e.name.to_lowercase()).collect();
            out.relations.retain(|r| {
                names.contains(&r.source.to_lowercase())
                    && names.contains(&r.target.to_lowercase())
            });
        } else {
            return out;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> KnowledgeGraph {
        KnowledgeGraph {
            entities: vec![
                Entity {
                    name: "Aspirin".into(),
                    entity_type: "drug".into(),
                    description: "relieves pain".into(),
                },
                Entity {
                    name: "aspirin".into(),
                    entity_type: "drug".into(),
                    description: "treats headache".into(),
                },
                Entity {
                    name: "Migraine".into(),
                    entity_type: "disease".into(),
                    description: "severe headache".into(),
                },
            ],
            relations: vec![Relation {
                source: "aspirin".into(),
                target: "Migraine".into(),
                description: "treats".into(),
            }],
            domain: "bio_medical_research".into(),
        }
    }

    #[test]
    fn dedup_is_case_insensitive_first_wins() {
        let d = dedup_merge(&sample());
        assert_eq!(d.entities.len(), 2);
        assert_eq!(d.entities[0].name, "Aspirin");
        assert_eq!(d.entities[0].description, "relieves pain; treats headache");
    }

    #[test]
    fn dedup_repoints_relations_to_survivor() {
        let d = dedup_merge(&sample());
        assert_eq!(d.relations[0].source, "Aspirin");
        assert_eq!(d.relations[0].target, "Migraine");
    }

    #[test]
    fn dedup_is_idempotent() {
        let once = dedup_merge(&sample());
        let twice = dedup_merge(&once);
        assert_eq!(once, twice);
    }

    #[test]
    fn stats_of_empty_graph() {
        let vocab = Vocabulary::new();
        let g = KnowledgeGraph::new("news");
        let s = graph_stats(&g, &vocab);
        assert_eq!(s.size, 0);
        assert_eq!(s.entity_count, 0);
    }

    #[test]
    fn stats_size_is_tokenizer_length() {
        let vocab = Vocabulary::new();
        let g = dedup_merge(&sample());
        let s = graph_stats(&g, &vocab);
        assert_eq!(s.entity_count, 2);
        assert_eq!(s.size, vocab.encode(&serialize_graph(&g)).len());
    }

    #[test]
    fn truncation_keeps_graph_parseable() {
        let vocab = Vocabulary::new();
        let g = dedup_merge(&sample());
        let full = graph_stats(&g, &vocab).size;
        for budget in [0, 5, full / 2, full] {
            let t = truncate_to_budget(&g, &vocab, budget);
            assert!(graph_stats(&t, &vocab).size <= budget.max(0));
            let report = parse_graph(&serialize_graph(&t), ParseMode::Strict).unwrap();
            assert!(report.skipped.is_empty());
        }
    }
}
