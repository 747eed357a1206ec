//! Dictionary entity extraction: longest-match multi-pattern scan over the
//! graph's entity vocabulary.
//!
//! Matching is lexical, case-insensitive and word-boundary-respecting. The
//! structural reward ratios need a crisp, reproducible membership test, so
//! there is deliberately no fuzzy matching here.

use aho_corasick::{AhoCorasick, AhoCorasickBuilder, MatchKind};

use crate::store::{normalize_name, KnowledgeHypergraph};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityMention {
    pub entity_id: usize,
    /// character span (byte offsets) in the source text
    pub span: (usize, usize),
}

pub struct EntityMatcher {
    automaton: AhoCorasick,
    /// pattern index -> entity id
    pattern_entity: Vec<usize>,
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric()
}

impl EntityMatcher {
    pub fn build(graph: &KnowledgeHypergraph) -> Self {
        let mut patterns = Vec::new();
        let mut pattern_entity = Vec::new();
        for e in graph.entities() {
            patterns.push(normalize_name(&e.name));
            pattern_entity.push(e.id);
            for a in &e.aliases {
                let n = normalize_name(a);
                if !n.is_empty() {
                    patterns.push(n);
                    pattern_entity.push(e.id);
                }
            }
        }
        let automaton = AhoCorasickBuilder::new()
            .ascii_case_insensitive(true)
            .match_kind(MatchKind::Standard)
            .build(&patterns)
            .expect("entity vocabulary builds");
        Self {
            automaton,
            pattern_entity,
        }
    }

    /// All word-boundary-respecting candidate matches, including overlaps.
    fn candidates(&self, text: &str) -> Vec<(usize, usize, usize)> {
        let bytes = text.as_bytes();
        let mut out = Vec::new();
        for m in self.automaton.find_overlapping_iter(text) {
            let (start, end) = (m.start(), m.end());
            if start > 0 && is_word_byte(bytes[start - 1]) {
                continue;
            }
            if end < bytes.len() && is_word_byte(bytes[end]) {
                continue;
            }
            out.push((start, end, self.pattern_entity[m.pattern().as_usize()]));
        }
        out
    }

    /// Non-overlapping mentions: earlier start wins, longer match wins at the
    /// same start, lower entity id breaks exact ties.
    pub fn extract_mentions(&self, text: &str) -> Vec<EntityMention> {
        let mut cands = self.candidates(text);
        cands.sort_by(|a, b| {
            a.0.cmp(&b.0)
                .then((b.1 - b.0).cmp(&(a.1 - a.0)))
                .then(a.2.cmp(&b.2))
        });
        let mut mentions = Vec::new();
        let mut cursor = 0usize;
        for (start, end, entity_id) in cands {
            if start >= cursor {
                mentions.push(EntityMention {
                    entity_id,
                    span: (start, end),
                });
                cursor = end;
            }
        }
        mentions
    }

    /// Deduplicated entity ids in first-occurrence order.
    pub fn extract_entities(&self, text: &str) -> Vec<usize> {
        let mut seen = Vec::new();
        for m in self.extract_mentions(text) {
            if !seen.contains(&m.entity_id) {
                seen.push(m.entity_id);
            }
        }
        seen
    }
}
