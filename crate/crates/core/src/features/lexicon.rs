//! Weighted term lexicons.
//!
//! File format: UTF-8, one term per line. A line may carry a tab-separated
//! weight with at most two decimals (default 0.25). Blank lines and lines
//! starting with `#` are ignored. A text's score is the sum of the weights of
//! the distinct terms it contains, capped at 1. Weights are kept in integer
//! hundredths so sums are exact.

use super::text::normalize;

pub const DEFAULT_WEIGHT_CENTI: u32 = 25;

pub const EMPATHY: &str = include_str!("../../assets/lexicons/empathy.txt");
pub const FRUSTRATION: &str = include_str!("../../assets/lexicons/frustration.txt");
pub const NEGATIVITY: &str = include_str!("../../assets/lexicons/negativity.txt");
pub const ASSISTIVE: &str = include_str!("../../assets/lexicons/assistive.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Term {
    pub phrase: String,
    pub weight_centi: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    terms: Vec<Term>,
}

impl Lexicon {
    pub fn parse(source: &str) -> Result<Self, String> {
        let mut terms = Vec::new();
        for (lineno, raw) in source.lines().enumerate() {
            let line = raw.trim_end();
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (phrase, weight) = match line.split_once('\t') {
                Some((p, w)) => (p, parse_centi(w.trim()).ok_or_else(|| {
                    format!("line {}: bad weight `{}`", lineno + 1, w.trim())
                })?),
                None => (line, DEFAULT_WEIGHT_CENTI),
            };
            let phrase = normalize(phrase);
            if phrase.is_empty() {
                return Err(format!("line {}: empty term", lineno + 1));
            }
            if terms.iter().any(|t: &Term| t.phrase == phrase) {
                return Err(format!("line {}: duplicate term `{phrase}`", lineno + 1));
            }
            terms.push(Term { phrase, weight_centi: weight });
        }
        Ok(Lexicon { terms })
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Terms present in `text` as whole-word phrases, in lexicon order.
    pub fn matches<'a>(&'a self, text: &str) -> impl Iterator<Item = &'a Term> {
        let padded = format!(" {} ", normalize(text));
        self.terms
            .iter()
            .filter(move |t| padded.contains(&format!(" {} ", t.phrase)))
    }

    pub fn score_centi(&self, text: &str) -> u32 {
        self.matches(text).map(|t| t.weight_centi).sum::<u32>().min(100)
    }

    pub fn score(&self, text: &str) -> f64 {
        f64::from(self.score_centi(text)) / 100.0
    }
}

fn parse_centi(s: &str) -> Option<u32> {
    let (whole, frac) = s.split_once('.').unwrap_or((s, ""));
    if frac.len() > 2 || whole.is_empty() || !whole.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let whole: u32 = whole.parse().ok()?;
    let frac: u32 = format!("{frac:0<2}").parse().ok()?;
    let centi = whole.checked_mul(100)?.checked_add(frac)?;
    (centi <= 100).then_some(centi)
}
