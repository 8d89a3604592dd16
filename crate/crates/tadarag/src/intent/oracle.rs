//! Deterministic gold-graph construction from span annotations. Stands in
//! for an external extraction backend when building supervised training
//! pairs over synthetic corpora.

use serde::{Deserialize, Serialize};

use crate::kg::{dedup_merge, Entity, KnowledgeGraph, Relation};

use super::Instruction;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedEntity {
    pub name: String,
    pub entity_type: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedRelation {
    pub source: String,
    pub target: String,
    pub description: String,
}

/// Span annotations carried by a synthetic corpus record.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotations {
    pub entities: Vec<AnnotatedEntity>,
    pub relations: Vec<AnnotatedRelation>,
}

#[derive(Debug, Clone)]
pub struct OracleOutcome {
    pub graph: KnowledgeGraph,
    /// One entry per skipped annotation (type outside the routed template,
    /// or a relation that lost an endpoint).
    pub warnings: Vec<String>,
}

/// Builds the gold graph for an instruction: annotations filtered to the
/// routed template's entity types, dedup-normalized, in annotation order.
pub fn oracle_extract(i: &Instruction, annotations: &Annotations) -> OracleOutcome {
    let mut warnings = Vec::new();
    let mut graph = KnowledgeGraph::new(i.template.domain.label());
    for e in &annotations.entities {
        if !i.template.allows_type(&e.entity_type) {
            warnings.push(format!(
                "entity {:?} has type {:?} outside template {}; skipped",
                e.name,
                e.entity_type,
                i.template.domain
            ));
            continue;
        }
        graph.entities.push(Entity {
            name: e.name.clone(),
            entity_type: e.entity_type.clone(),
            description: e.description.clone(),
        });
    }
    for r in &annotations.relations {
        let known = |name: &str| graph.entity(name).is_some();
        if known(&r.source) && known(&r.target) {
            graph.relations.push(Relation {
                source: r.source.clone(),
                target: r.target.clone(),
                description: r.description.clone(),
            });
        } else {
            warnings.push(format!(
                "relation {:?} -> {:?} references a skipped entity; dropped",
                r.source, r.target
            ));
        }
    }
    OracleOutcome {
        graph: dedup_merge(&graph),
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intent::{Domain, TemplateRegistry};

    fn instruction(domain: Domain) -> Instruction {
        let reg = TemplateRegistry::builtin();
        Instruction {
            question: "q".into(),
            knowledge: "r".into(),
            template: reg.get(domain).clone(),
        }
    }

    #[test]
    fn empty_annotations_give_empty_graph() {
        let out = oracle_extract(&instruction(Domain::News), &Annotations::default());
        assert!(out.graph.is_empty());
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn out_of_template_types_are_excluded_with_warning() {
        let ann = Annotations {
            entities: vec![
                AnnotatedEntity {
                    name: "aspirin".into(),
                    entity_type: "drug".into(),
                    description: "pain relief".into(),
                },
                AnnotatedEntity {
                    name: "acme".into(),
                    entity_type: "organization".into(), // not a bio type
                    description: "a company".into(),
                },
            ],
            relations: vec![],
        };
        let out = oracle_extract(&instruction(Domain::BioMedicalResearch), &ann);
        assert_eq!(out.graph.entities.len(), 1);
        assert_eq!(out.warnings.len(), 1);
        assert!(out.warnings[0].contains("acme"));
    }

    #[test]
    fn cross_chunk_facts_produce_two_entities_and_a_relation() {
        let ann = Annotations {
            entities: vec![
                AnnotatedEntity {
                    name: "relto".into(),
                    entity_type: "drug".into(),
                    description: "treats kovan".into(),
                },
                AnnotatedEntity {
                    name: "nulba".into(),
                    entity_type: "symptom".into(),
                    description: "caused by relto".into(),
                },
            ],
            relations: vec![AnnotatedRelation {
                source: "relto".into(),
                target: "nulba".into(),
                description: "causes".into(),
            }],
        };
        let out = oracle_extract(&instruction(Domain::BioMedicalResearch), &ann);
        assert_eq!(out.graph.entities.len(), 2);
        assert_eq!(out.graph.relations.len(), 1);
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn relation_to_skipped_entity_is_dropped() {
        let ann = Annotations {
            entities: vec![
                AnnotatedEntity {
                    name: "a".into(),
                    entity_type: "drug".into(),
                    description: String::new(),
                },
                AnnotatedEntity {
                    name: "b".into(),
                    entity_type: "policy".into(), // outside bio template
                    description: String::new(),
                },
            ],
            relations: vec![AnnotatedRelation {
                source: "a".into(),
                target: "b".into(),
                description: "x".into(),
            }],
        };
        let out = oracle_extract(&instruction(Domain::BioMedicalResearch), &ann);
        assert_eq!(out.graph.relations.len(), 0);
        assert_eq!(out.warnings.len(), 2);
    }

    #[test]
    fn gold_graphs_parse_strict_round_trip() {
        use crate::kg::{parse_graph, serialize_graph, ParseMode};
        let ann = Annotations {
            entities: vec![AnnotatedEntity {
                name: "relto".into(),
                entity_type: "drug".into(),
                description: "treats \"kovan\"".into(),
            }],
            relations: vec![],
        };
        let out = oracle_extract(&instruction(Domain::BioMedicalResearch), &ann);
        let report = parse_graph(&serialize_graph(&out.graph), ParseMode::Strict).unwrap();
        // the wire format carries entities and relations; the domain label
        // travels alongside the graph, not inside it
        assert_eq!(report.graph.entities, out.graph.entities);
        assert_eq!(report.graph.relations, out.graph.relations);
    }
}
