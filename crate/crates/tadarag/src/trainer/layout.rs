//! Token-sequence layouts shared by training and inference.
//!
//! Every sequence starts with BOS and the extraction instruction x. The
//! graph segment, when present, follows x wrapped in the extraction
//! delimiters, and the answer segment is introduced by [`ANSWER_CUE`]:
//!
//! ```text
//! base : BOS x                     <cue> y EOS
//! graph: BOS x <|se|> g <|ee|>     <cue> y EOS
//! ```
//!
//! Answer losses cover the y tokens plus EOS; the cue is forced context at
//! decode time, never scored.

use crate::intent::{build_extraction_instruction, Instruction};
use crate::lm::vocab::{self, Vocabulary};

use super::TrainError;

/// Introduces the answer segment after the instruction (and graph, when
/// present).
pub const ANSWER_CUE: &str = "\n[answer] ";

/// Renders ranked chunk texts as the knowledge section, one document line
/// per chunk.
pub fn assemble_knowledge<S: AsRef<str>>(chunk_texts: &[S]) -> String {
    chunk_texts
        .iter()
        .map(|t| format!("[doc] {}", t.as_ref()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// BOS + encoded instruction. When the result exceeds `max_tokens`, whole
/// knowledge lines are dropped from the left (oldest retrieved chunks
/// first) until it fits; the question is never truncated. Returns the ids
/// and the number of dropped knowledge lines.
pub fn build_x_ids(
    vocab: &Vocabulary,
    instruction: &Instruction,
    max_tokens: usize,
) -> Result<(Vec<u32>, usize), TrainError> {
    let mut dropped = 0usize;
    let mut knowledge = instruction.knowledge.clone();
    loop {
        let candidate = Instruction {
            question: instruction.question.clone(),
            knowledge: knowledge.clone(),
            template: instruction.template.clone(),
        };
        let text = build_extraction_instruction(&candidate);
        let mut ids = vec![vocab::BOS];
        ids.extend(vocab.encode(&text));
        if ids.len() <= max_tokens {
            return Ok((ids, dropped));
        }
        match knowledge.split_once('\n') {
            Some((_, rest)) if !rest.is_empty() => {
                knowledge = rest.to_string();
                dropped += 1;
            }
            _ => {
                return Err(TrainError::Parameter(format!(
                    "instruction needs {} tokens even with knowledge reduced to one line \
                     (budget {})",
                    ids.len(),
                    max_tokens
                )))
            }
        }
    }
}

/// Encoded answer segment: cue, answer text, EOS. The returned offset is
/// where the scored response tokens (y + EOS) begin within the segment.
pub fn answer_segment(vocab: &Vocabulary, answer: &str) -> (Vec<u32>, usize) {
    let mut ids = vocab.encode(ANSWER_CUE);
    let scored_from = ids.len();
    ids.extend(vocab.encode(answer));
    ids.push(vocab::EOS);
    (ids, scored_from)
}

/// Delimiter-wrapped graph segment from already-encoded inner tokens.
pub fn wrap_graph_tokens(inner: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(inner.len() + 2);
    out.push(vocab::START_EXTRACTION);
    out.extend_from_slice(inner);
    out.push(vocab::END_EXTRACTION);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intent::{Domain, TemplateRegistry};

    fn instruction(knowledge: &str) -> Instruction {
        let reg = TemplateRegistry::builtin();
        Instruction {
            question: "which symptom does the drug treating kovan cause?".into(),
            knowledge: knowledge.into(),
            template: reg.get(Domain::BioMedicalResearch).clone(),
        }
    }

    #[test]
    fn knowledge_lines_render_in_rank_order() {
        let k = assemble_knowledge(&["first chunk", "second chunk"]);
        assert_eq!(k, "[doc] first chunk\n[doc] second chunk");
    }

    #[test]
    fn x_ids_start_with_bos_and_fit_budget() {
        let vocab = Vocabulary::new();
        let i = instruction("[doc] a\n[doc] b");
        let (ids, dropped) = build_x_ids(&vocab, &i, 512).unwrap();
        assert_eq!(ids[0], vocab::BOS);
        assert_eq!(dropped, 0);
    }

    #[test]
    fn overflow_drops_oldest_knowledge_lines_first() {
        let vocab = Vocabulary::new();
        let lines: Vec<String> = (0..8).map(|i| format!("[doc] chunk number {i} with words")).collect();
        let i = instruction(&lines.join("\n"));
        let full = build_x_ids(&vocab, &i, 4096).unwrap().0.len();
        let (ids, dropped) = build_x_ids(&vocab, &i, full - 10).unwrap();
        assert!(dropped >= 1);
        assert!(ids.len() <= full - 10);
        let text = Vocabulary::new().decode(&ids[1..]);
        assert!(text.contains("chunk number 7"), "newest chunk kept");
        assert!(!text.contains("chunk number 0"), "oldest chunk dropped");
        assert!(text.contains("kovan"), "question untouched");
    }

    #[test]
    fn impossible_budget_is_an_error() {
        let vocab = Vocabulary::new();
        let i = instruction("[doc] a");
        assert!(build_x_ids(&vocab, &i, 8).is_err());
    }

    #[test]
    fn answer_segment_scores_y_and_eos_only() {
        let vocab = Vocabulary::new();
        let (ids, from) = answer_segment(&vocab, "nulba");
        assert_eq!(from, vocab.encode(ANSWER_CUE).len());
        assert_eq!(ids.len(), from + 5 + 1);
        assert_eq!(*ids.last().unwrap(), vocab::EOS);
    }

    #[test]
    fn wrapped_graph_is_delimited() {
        let inner = Vocabulary::new().encode("(\"Entity\", \"a\", \"t\", \"d\")");
        let w = wrap_graph_tokens(&inner);
        assert_eq!(w[0], vocab::START_EXTRACTION);
        assert_eq!(*w.last().unwrap(), vocab::END_EXTRACTION);
        assert_eq!(w.len(), inner.len() + 2);
    }
}
