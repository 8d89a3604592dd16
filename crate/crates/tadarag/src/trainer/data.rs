use std::path::Path;

use crate::data::read_jsonl;
use crate::intent::{Domain, TemplateRegistry};
use crate::kg::{parse_graph, KnowledgeGraph, ParseMode};

use super::layout::assemble_knowledge;
use super::TrainError;

/// One training example: the instruction inputs, the gold response, and
/// (for supervised extraction) the gold graph.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub id: String,
    pub question: String,
    pub knowledge: String,
    pub domain: Domain,
    pub answer: Option<String>,
    pub gold_graph: Option<KnowledgeGraph>,
}

#[derive(Debug, Clone)]
pub struct RejectedExample {
    pub id: String,
    pub reason: String,
}

/// Loads a training JSONL file. The knowledge section is the record's
/// documents in order; the domain comes from the record or, failing that,
/// intent detection. Records whose gold graph fails strict parsing are
/// rejected at load time.
pub fn load_dataset(
    path: &Path,
    registry: &TemplateRegistry,
) -> Result<(Vec<TrainingExample>, Vec<RejectedExample>), TrainError> {
    let records = read_jsonl(path)?;
    let mut examples = Vec::new();
    let mut rejected = Vec::new();
    for rec in records {
        let question = rec.question.clone().unwrap_or_default();
        let knowledge = assemble_knowledge(&rec.documents);
        let domain = match rec.domain.as_deref() {
            Some(label) => match Domain::from_label(label) {
                Ok(d) => d,
                Err(e) => {
                    rejected.push(RejectedExample {
                        id: rec.id,
                        reason: e.to_string(),
                    });
                    continue;
                }
            },
            None => registry.detect_intent(&question, &knowledge),
        };
        let gold_graph = match rec.gold_graph.as_deref() {
            None => None,
            Some(text) => match parse_graph(text, ParseMode::Strict) {
                Ok(report) => {
                    let mut g = report.graph;
                    g.domain = domain.label().to_string();
                    Some(g)
                }
                Err(e) => {
                    rejected.push(RejectedExample {
                        id: rec.id,
                        reason: format!("gold graph rejected: {e}"),
                    });
                    continue;
                }
            },
        };
        examples.push(TrainingExample {
            id: rec.id,
            question,
            knowledge,
            domain,
            answer: rec.answer,
            gold_graph,
        });
    }
    Ok((examples, rejected))
}
