//! Small text normalisation helpers shared by the rule-based extractors.

/// Lowercases, folds typographic apostrophes, and turns every character that
/// is not alphanumeric or an apostrophe into a single space.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        let c = if c == '\u{2019}' || c == '\u{2018}' { '\'' } else { c };
        if c.is_alphanumeric() || c == '\'' {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.extend(c.to_lowercase());
        } else {
            pending_space = true;
        }
    }
    out
}

pub fn words(text: &str) -> Vec<String> {
    normalize(text).split(' ').filter(|w| !w.is_empty()).map(str::to_string).collect()
}

const STOPWORDS: &[&str] = &[
    "about", "after", "again", "also", "been", "before", "being", "could", "does", "doing",
    "from", "have", "having", "here", "into", "just", "like", "maybe", "more", "much", "only",
    "really", "should", "some", "than", "that", "that's", "their", "them", "then", "there",
    "these", "they", "thing", "things", "this", "those", "very", "want", "were", "what", "when",
    "where", "which", "while", "will", "with", "would", "your", "you're", "yours",
];

/// Words of four or more letters that are not stopwords, with a trailing
/// plural `s` stripped.
pub fn content_words(text: &str) -> Vec<String> {
    words(text)
        .into_iter()
        .filter(|w| w.chars().count() >= 4 && !STOPWORDS.contains(&w.as_str()))
        .map(|w| match w.strip_suffix('s') {
            Some(stem) if stem.chars().count() >= 4 && !stem.ends_with('s') => stem.to_string(),
            _ => w,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_punctuation_and_case() {
        assert_eq!(normalize("I’m SORRY, you're  feeling... that!"), "i'm sorry you're feeling that");
        assert_eq!(normalize("  "), "");
    }

    #[test]
    fn content_words_drop_stopwords_and_plurals() {
        assert_eq!(content_words("I want to talk about trains and the weather"), ["talk", "train", "weather"]);
    }
}
