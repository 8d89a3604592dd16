//! Intent detection and the extraction-template registry.
//!
//! A query and its retrieved knowledge are routed to one of six domain
//! templates by deterministic keyword scoring; the routed template fixes
//! the entity types the extractor may emit and contributes the guidance
//! text of the extraction instruction. Routing lexicons ship as plain text
//! data files (one cue term per line) and can be overridden from a
//! directory without code changes.

mod oracle;
mod remote;

pub use oracle::{oracle_extract, AnnotatedEntity, AnnotatedRelation, Annotations, OracleOutcome};
pub use remote::{remote_extract, RemoteConfig, RemoteReply};

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum IntentError {
    #[error("unknown domain label {0:?}")]
    UnknownDomain(String),
    #[error("lexicon I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("remote extraction configuration: {0}")]
    Config(String),
    #[error("remote extraction failed after {attempts} attempts: {last}")]
    Remote { attempts: u32, last: String },
}

/// The six problem domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    BioMedicalResearch,
    GeneralKnowledge,
    LegalContracts,
    CustomerSupport,
    Finance,
    News,
}

pub const ALL_DOMAINS: [Domain; 6] = [
    Domain::BioMedicalResearch,
    Domain::GeneralKnowledge,
    Domain::LegalContracts,
    Domain::CustomerSupport,
    Domain::Finance,
    Domain::News,
];

impl Domain {
    pub fn label(&self) -> &'static str {
        match self {
            Domain::BioMedicalResearch => "bio_medical_research",
            Domain::GeneralKnowledge => "general_knowledge",
            Domain::LegalContracts => "legal_contracts",
            Domain::CustomerSupport => "customer_support",
            Domain::Finance => "finance",
            Domain::News => "news",
        }
    }

    pub fn from_label(label: &str) -> Result<Domain, IntentError> {
        ALL_DOMAINS
            .iter()
            .copied()
            .find(|d| d.label() == label)
            .ok_or_else(|| IntentError::UnknownDomain(label.to_string()))
    }

    /// Entity types for this domain, in registry order.
    pub fn entity_types(&self) -> &'static [&'static str] {
        match self {
            Domain::BioMedicalResearch => &[
                "person", "organism", "symptom", "disease", "drug", "technique", "number",
                "device", "operation",
            ],
            Domain::GeneralKnowledge => &[
                "person", "organism", "organization", "location", "event", "time", "diet",
                "number", "product",
            ],
            Domain::LegalContracts => &[
                "person", "organization", "location", "event", "time", "number", "contract",
                "clause", "judgment",
            ],
            Domain::CustomerSupport => &[
                "person", "technique", "operation", "event", "time", "number", "device",
                "product",
            ],
            Domain::Finance => &[
                "person", "organization", "event", "time", "number", "operation", "product",
                "policy",
            ],
            Domain::News => &[
                "person", "organization", "location", "event", "time", "number", "product",
                "policy",
            ],
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A domain extraction template: the allowed entity types, one-line
/// guidance for the compact instruction, per-type guidance used by the
/// verbose remote prompt, and the routing lexicon.
#[derive(Debug, Clone)]
pub struct DomainTemplate {
    pub domain: Domain,
    pub entity_types: Vec<String>,
    pub guidance: String,
    pub type_guidance: Vec<(String, String)>,
    lexicon: Vec<String>,
}

impl DomainTemplate {
    pub fn allows_type(&self, entity_type: &str) -> bool {
        self.entity_types.iter().any(|t| t == entity_type)
    }

    pub fn lexicon(&self) -> &[String] {
        &self.lexicon
    }
}

/// The instruction triple: question, retrieved knowledge, routed template.
#[derive(Debug, Clone)]
pub struct Instruction {
    pub question: String,
    pub knowledge: String,
    pub template: DomainTemplate,
}

/// Immutable registry of the six domain templates.
pub struct TemplateRegistry {
    templates: Vec<DomainTemplate>,
}

const EMBEDDED_LEXICONS: [(Domain, &str); 6] = [
    (
        Domain::BioMedicalResearch,
        include_str!("lexicons/bio_medical_research.txt"),
    ),
    (
        Domain::GeneralKnowledge,
        include_str!("lexicons/general_knowledge.txt"),
    ),
    (
        Domain::LegalContracts,
        include_str!("lexicons/legal_contracts.txt"),
    ),
    (
        Domain::CustomerSupport,
        include_str!("lexicons/customer_support.txt"),
    ),
    (Domain::Finance, include_str!("lexicons/finance.txt")),
    (Domain::News, include_str!("lexicons/news.txt")),
];

fn parse_lexicon(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.to_lowercase())
        .collect()
}

fn guidance_for(domain: Domain) -> String {
    format!(
        "extract the {} entities and relations that help answer the question",
        domain.label()
    )
}

fn type_guidance_for(domain: Domain) -> Vec<(String, String)> {
    domain
        .entity_types()
        .iter()
        .map(|t| {
            (
                t.to_string(),
                format!(
                    "identify every {t} relevant to the question; give a short description grounded in the knowledge text"
                ),
            )
        })
        .collect()
}

impl TemplateRegistry {
    /// Registry backed by the embedded lexicon data files.
    pub fn builtin() -> Self {
        let templates = EMBEDDED_LEXICONS
            .iter()
            .map(|(domain, text)| DomainTemplate {
                domain: *domain,
                entity_types: domain.entity_types().iter().map(|s| s.to_string()).collect(),
                guidance: guidance_for(*domain),
                type_guidance: type_guidance_for(*domain),
                lexicon: parse_lexicon(text),
            })
            .collect();
        TemplateRegistry { templates }
    }

    /// Registry with lexicons loaded from `<dir>/<domain>.txt`; domains
    /// without a file keep their embedded lexicon.
    pub fn with_lexicon_dir(dir: &Path) -> Result<Self, IntentError> {
        let mut reg = Self::builtin();
        for t in reg.templates.iter_mut() {
            let path = dir.join(format!("{}.txt", t.domain.label()));
            if path.exists() {
                t.lexicon = parse_lexicon(&std::fs::read_to_string(&path)?);
            }
        }
        Ok(reg)
    }

    pub fn get(&self, domain: Domain) -> &DomainTemplate {
        self.templates
            .iter()
            .find(|t| t.domain == domain)
            .expect("all six domains present")
    }

    /// Deterministic lexicon routing: cue hits in the question score 2,
    /// hits in the head of the retrieved knowledge score 1. Zero score or
    /// a tie falls back to general_knowledge. Total on any input.
    pub fn detect_intent(&self, question: &str, knowledge: &str) -> Domain {
        let q_words = words(question);
        let head: String = knowledge.chars().take(400).collect();
        let r_words = words(&head);
        let mut best = Domain::GeneralKnowledge;
        let mut best_score = 0usize;
        let mut tied = false;
        for t in &self.templates {
            let score: usize = t
                .lexicon
                .iter()
                .map(|term| {
                    2 * q_words.iter().filter(|w| *w == term).count()
                        + r_words.iter().filter(|w| *w == term).count()
                })
                .sum();
            if score > best_score {
                best = t.domain;
                best_score = score;
                tied = false;
            } else if score == best_score && score > 0 && t.domain != best {
                tied = true;
            }
        }
        if best_score == 0 || tied {
            Domain::GeneralKnowledge
        } else {
            best
        }
    }

    /// Routes and assembles the instruction in one step.
    pub fn route(&self, question: &str, knowledge: &str, override_domain: Option<Domain>) -> Instruction {
        let domain = override_domain.unwrap_or_else(|| self.detect_intent(question, knowledge));
        Instruction {
            question: question.to_string(),
            knowledge: knowledge.to_string(),
            template: self.get(domain).clone(),
        }
    }
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_string())
        .collect()
}

/// Deterministic extraction prompt: guidance line, the template's entity
/// types (each exactly once), the single-line normalized question, and the
/// retrieved knowledge. Identical inputs yield identical bytes.
pub fn build_extraction_instruction(i: &Instruction) -> String {
    let q_norm = i.question.split_whitespace().collect::<Vec<_>>().join(" ");
    format!(
        "[extract] {}\n[types] {}\n[question] {}\n[knowledge]\n{}\n[output]\n",
        i.template.guidance,
        i.template.entity_types.join(", "),
        q_norm,
        i.knowledge,
    )
}

/// Verbose prompt for external extraction backends: includes the per-type
/// guidance and the expected tuple format.
pub fn build_remote_prompt(i: &Instruction) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "Domain: {}\nTask: {}.\n",
        i.template.domain, i.template.guidance
    ));
    out.push_str("Entity types and guidance:\n");
    for (t, g) in &i.template.type_guidance {
        out.push_str(&format!("- {t}: {g}\n"));
    }
    out.push_str(
        "Output one line per record, nothing else. Entity lines look like \
         (\"Entity\", \"<name>\", \"<type>\", \"<description>\") and relation lines like \
         (\"Relation\", \"<source>\", \"<target>\", \"<description>\").\n",
    );
    out.push_str(&format!(
        "Question: {}\nKnowledge:\n{}\n",
        i.question, i.knowledge
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routes_the_documented_examples() {
        let reg = TemplateRegistry::builtin();
        assert_eq!(
            reg.detect_intent("Which contract clause was breached?", ""),
            Domain::LegalContracts
        );
        assert_eq!(
            reg.detect_intent("What drug treats these symptoms?", ""),
            Domain::BioMedicalResearch
        );
    }

    #[test]
    fn blank_question_falls_back_to_general() {
        let reg = TemplateRegistry::builtin();
        assert_eq!(reg.detect_intent(" ", ""), Domain::GeneralKnowledge);
        assert_eq!(reg.detect_intent("xyzzy plugh", ""), Domain::GeneralKnowledge);
    }

    #[test]
    fn ties_fall_back_to_general() {
        let reg = TemplateRegistry::builtin();
        // one legal cue and one bio cue, equally weighted
        assert_eq!(
            reg.detect_intent("the contract mentioned a drug", ""),
            Domain::GeneralKnowledge
        );
    }

    #[test]
    fn knowledge_head_contributes_to_routing() {
        let reg = TemplateRegistry::builtin();
        let d = reg.detect_intent("what happened?", "the reporter filed from the newsroom");
        assert_eq!(d, Domain::News);
    }

    #[test]
    fn output_is_always_a_known_domain() {
        let reg = TemplateRegistry::builtin();
        for q in ["", "a b c", "contract clause breach", "???"] {
            let d = reg.detect_intent(q, "");
            assert!(ALL_DOMAINS.contains(&d));
        }
    }

    #[test]
    fn instruction_is_deterministic_and_lists_types_once() {
        let reg = TemplateRegistry::builtin();
        let i = reg.route("What drug treats ulcers?", "docs here", None);
        let a = build_extraction_instruction(&i);
        let b = build_extraction_instruction(&i);
        assert_eq!(a, b);
        for t in &i.template.entity_types {
            assert_eq!(
                a.matches(&format!(" {t},")).count() + a.matches(&format!(" {t}\n")).count(),
                1,
                "type {t} should appear exactly once in the type list"
            );
        }
    }

    #[test]
    fn general_prompt_lists_nine_types() {
        let reg = TemplateRegistry::builtin();
        let t = reg.get(Domain::GeneralKnowledge);
        assert_eq!(t.entity_types.len(), 9);
        assert_eq!(t.entity_types.first().map(String::as_str), Some("person"));
        assert_eq!(t.entity_types.last().map(String::as_str), Some("product"));
    }

    #[test]
    fn lexicon_dir_override() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("news.txt"), "zorbl\n").unwrap();
        let reg = TemplateRegistry::with_lexicon_dir(dir.path()).unwrap();
        assert_eq!(reg.detect_intent("zorbl zorbl", ""), Domain::News);
        // other domains keep their embedded lexicons
        assert_eq!(
            reg.detect_intent("Which contract clause was breached?", ""),
            Domain::LegalContracts
        );
    }

    #[test]
    fn domain_labels_round_trip() {
        for d in ALL_DOMAINS {
            assert_eq!(Domain::from_label(d.label()).unwrap(), d);
        }
        assert!(Domain::from_label("sports").is_err());
    }
}
