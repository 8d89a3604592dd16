//! Tuple text format, one record per line:
//!
//! ```text
//! ("Entity", "Aspirin", "drug", "relieves pain")
//! ("Relation", "Aspirin", "Migraine", "treats")
//! ```
//!
//! The serializer always quotes fields and escapes `"` and `\` with a
//! backslash; model output is untrusted text. The parser additionally
//! accepts bare (unquoted) fields up to the next delimiter. Relation lines
//! must reference entities present in the same graph.

use super::{dedup_merge, Entity, KgError, KnowledgeGraph, Relation};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode {
    /// Fail on the first malformed line.
    Strict,
    /// Skip malformed lines, recording them; never fails.
    Recovery,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedLine {
    pub line_number: usize,
    pub fragment: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParseReport {
    pub graph: KnowledgeGraph,
    pub skipped: Vec<SkippedLine>,
}

fn quote(field: &str) -> String {
    let mut out = String::with_capacity(field.len() + 2);
    out.push('"');
    for c in field.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

pub fn serialize_graph(g: &KnowledgeGraph) -> String {
    let mut lines = Vec::with_capacity(g.entities.len() + g.relations.len());
    for e in &g.entities {
        lines.push(format!(
            "(\"Entity\", {}, {}, {})",
            quote(&e.name),
            quote(&e.entity_type),
            quote(&e.description)
        ));
    }
    for r in &g.relations {
        lines.push(format!(
            "(\"Relation\", {}, {}, {})",
            quote(&r.source),
            quote(&r.target),
            quote(&r.description)
        ));
    }
    lines.join("\n")
}

enum Record {
    Entity(Entity),
    Relation(Relation),
}

/// Total in recovery mode; strict mode raises on the first malformed line
/// with its line number and offending fragment. The parsed graph is
/// dedup-normalized.
pub fn parse_graph(text: &str, mode: ParseMode) -> Result<ParseReport, KgError> {
    let mut report = ParseReport::default();
    let mut relations: Vec<(usize, String, Relation)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_number = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        match parse_line(raw) {
            Ok(Record::Entity(e)) => report.graph.entities.push(e),
            Ok(Record::Relation(r)) => relations.push((line_number, raw.to_string(), r)),
            Err(reason) => match mode {
                ParseMode::Strict => {
                    return Err(KgError::Parse {
                        line: line_number,
                        fragment: raw.to_string(),
                        reason,
                    })
                }
                ParseMode::Recovery => report.skipped.push(SkippedLine {
                    line_number,
                    fragment: raw.to_string(),
                    reason,
                }),
            },
        }
    }
    // Relations may appear before their entities; validate after the pass.
    for (line_number, fragment, r) in relations {
        let known = |name: &str| {
            let needle = name.to_lowercase();
            report
                .graph
                .entities
                .iter()
                .any(|e| e.name.to_lowercase() == needle)
        };
        if known(&r.source) && known(&r.target) {
            report.graph.relations.push(r);
        } else {
            let reason = format!(
                "relation references unknown entity ({:?} -> {:?})",
                r.source, r.target
            );
            match mode {
                ParseMode::Strict => {
                    return Err(KgError::Parse {
                        line: line_number,
                        fragment,
                        reason,
                    })
                }
                ParseMode::Recovery => report.skipped.push(SkippedLine {
                    line_number,
                    fragment,
                    reason,
                }),
            }
        }
    }
    report.graph = dedup_merge(&report.graph);
    Ok(report)
}

fn parse_line(raw: &str) -> Result<Record, String> {
    let s = raw.trim();
    let inner = s
        .strip_prefix('(')
        .and_then(|rest| rest.strip_suffix(')'))
        .ok_or_else(|| "expected a parenthesized tuple".to_string())?;
    let fields = split_fields(inner)?;
    if fields.len() != 4 {
        return Err(format!("expected 4 fields, found {}", fields.len()));
    }
    match fields[0].as_str() {
        "Entity" => {
            if fields[1].is_empty() {
                return Err("entity name is empty".into());
            }
            Ok(Record::Entity(Entity {
                name: fields[1].clone(),
                entity_type: fields[2].clone(),
                description: fields[3].clone(),
            }))
        }
        "Relation" => Ok(Record::Relation(Relation {
            source: fields[1].clone(),
            target: fields[2].clone(),
            description: fields[3].clone(),
        })),
        other => Err(format!("unknown record tag {other:?}")),
    }
}

/// Splits the tuple body on top-level commas; fields are either quoted
/// (with backslash escapes) or bare text.
fn split_fields(inner: &str) -> Result<Vec<String>, String> {
    let mut fields = Vec::new();
    let chars: Vec<char> = inner.chars().collect();
    let mut i = 0;
    loop {
        while i < chars.len() && chars[i].is_whitespace() {
            i += 1;
        }
        if i < chars.len() && chars[i] == '"' {
            i += 1;
            let mut field = String::new();
            loop {
                match chars.get(i) {
                    None => return Err("unterminated quoted field".into()),
                    Some('\\') => match chars.get(i + 1) {
                        Some(&c) => {
                            field.push(c);
                            i += 2;
                        }
                        None => return Err("dangling escape".into()),
                    },
                    Some('"') => {
                        i += 1;
                        break;
                    }
                    Some(&c) => {
                        field.push(c);
                        i += 1;
                    }
                }
            }
            while i < chars.len() && chars[i].is_whitespace() {
                i += 1;
            }
            fields.push(field);
        } else {
            let mut field = String::new();
            while i < chars.len() && chars[i] != ',' {
                field.push(chars[i]);
                i += 1;
            }
            fields.push(field.trim().to_string());
        }
        match chars.get(i) {
            None => break,
            Some(',') => i += 1,
            Some(&c) => return Err(format!("unexpected character {c:?} after field")),
        }
    }
    Ok(fields)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn serializes_the_documented_entity_line() {
        let g = KnowledgeGraph {
            entities: vec![Entity {
                name: "Aspirin".into(),
                entity_type: "drug".into(),
                description: "relieves pain".into(),
            }],
            relations: vec![],
            domain: String::new(),
        };
        assert_eq!(
            serialize_graph(&g),
            "(\"Entity\", \"Aspirin\", \"drug\", \"relieves pain\")"
        );
    }

    #[test]
    fn empty_graph_serializes_to_empty_string() {
        assert_eq!(serialize_graph(&KnowledgeGraph::default()), "");
        let report = parse_graph("", ParseMode::Strict).unwrap();
        assert!(report.graph.is_empty());
    }

    #[test]
    fn parses_the_aspirin_line() {
        let report = parse_graph(
            "(\"Entity\", \"Aspirin\", \"drug\", \"relieves pain\")",
            ParseMode::Strict,
        )
        .unwrap();
        assert_eq!(report.graph.entities.len(), 1);
        assert_eq!(report.graph.entities[0].name, "Aspirin");
        assert_eq!(report.graph.entities[0].entity_type, "drug");
    }

    #[test]
    fn parses_bare_fields() {
        let report =
            parse_graph("(Entity, Aspirin, drug, relieves pain)", ParseMode::Strict).unwrap();
        assert_eq!(report.graph.entities[0].description, "relieves pain");
    }

    #[test]
    fn garbage_line_recovery_vs_strict() {
        let report = parse_graph("garbage line", ParseMode::Recovery).unwrap();
        assert!(report.graph.is_empty());
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.skipped[0].line_number, 1);

        let err = parse_graph("garbage line", ParseMode::Strict).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1") && msg.contains("garbage line"), "{msg}");
    }

    #[test]
    fn escaped_quotes_survive_round_trip() {
        let g = KnowledgeGraph {
            entities: vec![Entity {
                name: "x".into(),
                entity_type: "t".into(),
                description: "says \"hi\" and \\ more".into(),
            }],
            relations: vec![],
            domain: String::new(),
        };
        let report = parse_graph(&serialize_graph(&g), ParseMode::Strict).unwrap();
        assert_eq!(report.graph.entities[0].description, "says \"hi\" and \\ more");
    }

    #[test]
    fn relation_to_unknown_entity_is_skipped_or_fatal() {
        let text = "(\"Relation\", \"a\", \"b\", \"links\")";
        let report = parse_graph(text, ParseMode::Recovery).unwrap();
        assert!(report.graph.relations.is_empty());
        assert_eq!(report.skipped.len(), 1);
        assert!(parse_graph(text, ParseMode::Strict).is_err());
    }

    #[test]
    fn parser_is_total_in_recovery_mode_on_binary_noise() {
        let noise = "(((\n)\"\"\",,,\n(\"Entity\"\nxx\u{0}yy\n";
        let report = parse_graph(noise, ParseMode::Recovery).unwrap();
        assert!(report.skipped.len() >= 3);
    }

    fn arb_field() -> impl Strategy<Value = String> {
        // includes quotes, backslashes, parens, commas, unicode
        proptest::string::string_regex("[a-zA-Z0-9 _\\-\\\\\",()\u{e9}\u{4e2d}]{0,24}").unwrap()
    }

    fn arb_graph() -> impl Strategy<Value = KnowledgeGraph> {
        let entity = (
            "[A-Za-z][A-Za-z0-9 _\\-]{0,11}",
            "[a-z_]{1,10}",
            arb_field(),
        )
            .prop_map(|(name, entity_type, description)| Entity {
                name,
                entity_type,
                description,
            });
        proptest::collection::vec(entity, 0..6).prop_flat_map(|entities| {
            let n = entities.len();
            let relation = if n == 0 {
                proptest::collection::vec((0..1usize, 0..1usize, arb_field()), 0..1)
            } else {
                proptest::collection::vec((0..n, 0..n, arb_field()), 0..4)
            };
            (Just(entities), relation).prop_map(|(entities, rel_idx)| {
                let relations = if entities.is_empty() {
                    vec![]
                } else {
                    rel_idx
                        .into_iter()
                        .map(|(s, t, description)| Relation {
                            source: entities[s].name.clone(),
                            target: entities[t].name.clone(),
                            description,
                        })
                        .collect()
                };
                KnowledgeGraph {
                    entities,
                    relations,
                    domain: String::new(),
                }
            })
        })
    }

    proptest! {
        #[test]
        fn round_trip_equals_dedup_normalized(g in arb_graph()) {
            let normalized = dedup_merge(&g);
            let report = parse_graph(&serialize_graph(&normalized), ParseMode::Strict).unwrap();
            prop_assert_eq!(report.graph, normalized);
        }

        #[test]
        fn recovery_never_fails(text in ".{0,200}") {
            let _ = parse_graph(&text, ParseMode::Recovery).unwrap();
        }
    }
}
