//! Answer normalization and EM / token-F1 scoring (standard QA convention).

/// Lowercase, strip punctuation and the articles a/an/the, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let stripped: String = lowered
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    stripped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(prediction: &str, gold: &str) -> bool {
    normalize_answer(prediction) == normalize_answer(gold)
}

/// Token-level F1 over normalized token multisets.
pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let p: Vec<String> = normalize_answer(prediction)
        .split_whitespace()
        .map(str::to_string)
        .collect();
    let g: Vec<String> = normalize_answer(gold)
        .split_whitespace()
        .map(str::to_string)
        .collect();
    if p.is_empty() || g.is_empty() {
        return if p == g { 1.0 } else { 0.0 };
    }
    let mut counts = std::collections::HashMap::new();
    for t in &g {
        *counts.entry(t.clone()).or_insert(0usize) += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_strips_articles_and_punctuation() {
        assert_eq!(normalize_answer("The December 12, 2017!"), "december 12 2017");
        assert!(exact_match("december 12 2017", "December 12, 2017"));
        assert!(exact_match("December 12, 2017", "December 12, 2017"));
        assert!(!exact_match("December 13, 2017", "December 12, 2017"));
    }

    #[test]
    fn f1_identical_strings() {
        assert_eq!(token_f1("Alabama Senate", "alabama senate"), 1.0);
    }

    #[test]
    fn f1_partial_overlap() {
        // prediction {december, 12}, gold {december, 12, 2017}:
        // precision 1.0, recall 2/3, f1 = 0.8
        let f1 = token_f1("December 12", "December 12 2017");
        assert!((f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn f1_dominates_em() {
        for (p, g) in [
            ("alabama", "alabama"),
            ("alabama senate", "alabama"),
            ("", "alabama"),
            ("x y z", "q r"),
        ] {
            let em = if exact_match(p, g) { 1.0 } else { 0.0 };
            assert!(token_f1(p, g) >= em, "{p:?} vs {g:?}");
        }
    }
}
