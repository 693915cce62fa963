//! The shipped deterministic extractor pack.

use std::collections::BTreeSet;
use std::sync::Arc;

use super::lexicon::{self, Lexicon};
use super::text::{content_words, words};
use super::{FeatureDecl, FeatureExtractor, FeatureScope, FeatureValue, Input};
use crate::state::{CandidateAction, InteractionState};

use FeatureScope::{TrajectoryAggregate, TurnLocal};

/// Agent turns averaged by `negativity_running`.
pub const NEGATIVITY_WINDOW: usize = 5;
const REPETITION_WINDOW: usize = 5;
const REPETITION_N: usize = 3;
pub const DEFAULT_VERBOSITY_CAP: usize = 60;

fn builtin_lexicon(src: &str) -> Lexicon {
    Lexicon::parse(src).expect("shipped lexicon is well-formed")
}

pub fn builtin_extractors() -> Vec<Arc<dyn FeatureExtractor>> {
    vec![
        Arc::new(EmpathyLexicon::new(builtin_lexicon(lexicon::EMPATHY))),
        Arc::new(FrustrationKeywords::new(builtin_lexicon(lexicon::FRUSTRATION))),
        Arc::new(NegativityRunning::new(builtin_lexicon(lexicon::NEGATIVITY))),
        Arc::new(VerbosityRatio::new(DEFAULT_VERBOSITY_CAP)),
        Arc::new(RepetitionNgram),
        Arc::new(TopicShiftFlag),
        Arc::new(AssistiveMotiveFlag::new(builtin_lexicon(lexicon::ASSISTIVE))),
        Arc::new(PersonCountStub),
        Arc::new(SocialPresenceStub),
    ]
}

/// `empathy`: lexicon score of the candidate.
pub struct EmpathyLexicon {
    lexicon: Lexicon,
}

impl EmpathyLexicon {
    pub fn new(lexicon: Lexicon) -> Self {
        EmpathyLexicon { lexicon }
    }
}

impl FeatureExtractor for EmpathyLexicon {
    fn name(&self) -> &str {
        "empathy_lexicon"
    }
    fn declared(&self) -> &[FeatureDecl] {
        &[FeatureDecl { name: "empathy", scope: TurnLocal }]
    }
    fn inputs(&self) -> &[Input] {
        &[Input::CandidateContent]
    }
    fn extract(&self, _: &InteractionState, action: &CandidateAction) -> Result<Vec<FeatureValue>, String> {
        Ok(vec![FeatureValue::scalar("empathy", self.lexicon.score(&action.content), TurnLocal)])
    }
}

/// `frustration`: lexicon score of the most recent user turn.
pub struct FrustrationKeywords {
    lexicon: Lexicon,
}

impl FrustrationKeywords {
    pub fn new(lexicon: Lexicon) -> Self {
        FrustrationKeywords { lexicon }
    }
}

impl FeatureExtractor for FrustrationKeywords {
    fn name(&self) -> &str {
        "frustration_keywords"
    }
    fn declared(&self) -> &[FeatureDecl] {
        &[FeatureDecl { name: "frustration", scope: TurnLocal }]
    }
    fn inputs(&self) -> &[Input] {
        &[Input::History]
    }
    fn extract(&self, state: &InteractionState, _: &CandidateAction) -> Result<Vec<FeatureValue>, String> {
        let score = state.last_user_turn().map_or(0.0, |t| self.lexicon.score(&t.text));
        Ok(vec![FeatureValue::scalar("frustration", score, TurnLocal)])
    }
}

/// `negativity_running` (n_t): mean per-turn negativity over the last
/// [`NEGATIVITY_WINDOW`] agent turns, and `negativity` of the candidate.
pub struct NegativityRunning {
    lexicon: Lexicon,
}

impl NegativityRunning {
    pub fn new(lexicon: Lexicon) -> Self {
        NegativityRunning { lexicon }
    }

    pub fn turn_score(&self, text: &str) -> f64 {
        self.lexicon.score(text)
    }
}

impl FeatureExtractor for NegativityRunning {
    fn name(&self) -> &str {
        "negativity_running"
    }
    fn declared(&self) -> &[FeatureDecl] {
        &[
            FeatureDecl { name: "negativity_running", scope: TrajectoryAggregate },
            FeatureDecl { name: "negativity", scope: TurnLocal },
        ]
    }
    fn inputs(&self) -> &[Input] {
        &[Input::History, Input::CandidateContent]
    }
    fn extract(&self, state: &InteractionState, action: &CandidateAction) -> Result<Vec<FeatureValue>, String> {
        let recent: Vec<f64> = state
            .agent_turns()
            .rev()
            .take(NEGATIVITY_WINDOW)
            .map(|t| self.turn_score(&t.text))
            .collect();
        let running = if recent.is_empty() {
            0.0
        } else {
            recent.iter().sum::<f64>() / recent.len() as f64
        };
        Ok(vec![
            FeatureValue::scalar("negativity_running", running, TrajectoryAggregate),
            FeatureValue::scalar("negativity", self.turn_score(&action.content), TurnLocal),
        ])
    }
}

/// `verbosity`: candidate word count over a cap, clamped to 1.
pub struct VerbosityRatio {
    cap_words: usize,
}

impl VerbosityRatio {
    pub fn new(cap_words: usize) -> Self {
        VerbosityRatio { cap_words: cap_words.max(1) }
    }
}

impl FeatureExtractor for VerbosityRatio {
    fn name(&self) -> &str {
        "verbosity_ratio"
    }
    fn declared(&self) -> &[FeatureDecl] {
        &[FeatureDecl { name: "verbosity", scope: TurnLocal }]
    }
    fn inputs(&self) -> &[Input] {
        &[Input::CandidateContent]
    }
    fn extract(&self, _: &InteractionState, action: &CandidateAction) -> Result<Vec<FeatureValue>, String> {
        let n = action.content.split_whitespace().count();
        Ok(vec![FeatureValue::scalar("verbosity", n as f64 / self.cap_words as f64, TurnLocal)])
    }
}

fn ngrams(tokens: &[String], n: usize) -> BTreeSet<Vec<String>> {
    tokens.windows(n).map(<[String]>::to_vec).collect()
}

/// `repetition`: share of the candidate's distinct word trigrams already
/// used in the last few agent turns (shorter candidates use their own length).
pub struct RepetitionNgram;

impl FeatureExtractor for RepetitionNgram {
    fn name(&self) -> &str {
        "repetition_ngram"
    }
    fn declared(&self) -> &[FeatureDecl] {
        &[FeatureDecl { name: "repetition", scope: TrajectoryAggregate }]
    }
    fn inputs(&self) -> &[Input] {
        &[Input::History, Input::CandidateContent]
    }
    fn extract(&self, state: &InteractionState, action: &CandidateAction) -> Result<Vec<FeatureValue>, String> {
        let cand = words(&action.content);
        let score = if cand.is_empty() {
            0.0
        } else {
            let n = REPETITION_N.min(cand.len());
            let grams = ngrams(&cand, n);
            let mut seen = BTreeSet::new();
            for t in state.agent_turns().rev().take(REPETITION_WINDOW) {
                seen.extend(ngrams(&words(&t.text), n));
            }
            grams.iter().filter(|g| seen.contains(*g)).count() as f64 / grams.len() as f64
        };
        Ok(vec![FeatureValue::scalar("repetition", score, TrajectoryAggregate)])
    }
}

/// `topic_shift`: 1 when the candidate shares no content word with the last
/// user turn (both must have content words), else 0.
pub struct TopicShiftFlag;

impl FeatureExtractor for TopicShiftFlag {
    fn name(&self) -> &str {
        "topic_shift_flag"
    }
    fn declared(&self) -> &[FeatureDecl] {
        &[FeatureDecl { name: "topic_shift", scope: TurnLocal }]
    }
    fn inputs(&self) -> &[Input] {
        &[Input::History, Input::CandidateContent]
    }
    fn extract(&self, state: &InteractionState, action: &CandidateAction) -> Result<Vec<FeatureValue>, String> {
        let cand: BTreeSet<String> = content_words(&action.content).into_iter().collect();
        let user: BTreeSet<String> = state
            .last_user_turn()
            .map(|t| content_words(&t.text).into_iter().collect())
            .unwrap_or_default();
        let shift = !cand.is_empty() && !user.is_empty() && cand.is_disjoint(&user);
        Ok(vec![FeatureValue::scalar("topic_shift", if shift { 1.0 } else { 0.0 }, TurnLocal)])
    }
}

/// `assistive_motive` (0/1) and `motive_class` (`assistive` | `relational`):
/// detects offer-of-help phrasings.
pub struct AssistiveMotiveFlag {
    lexicon: Lexicon,
}

impl AssistiveMotiveFlag {
    pub fn new(lexicon: Lexicon) -> Self {
        AssistiveMotiveFlag { lexicon }
    }
}

impl FeatureExtractor for AssistiveMotiveFlag {
    fn name(&self) -> &str {
        "assistive_motive_flag"
    }
    fn declared(&self) -> &[FeatureDecl] {
        &[
            FeatureDecl { name: "assistive_motive", scope: TurnLocal },
            FeatureDecl { name: "motive_class", scope: TurnLocal },
        ]
    }
    fn inputs(&self) -> &[Input] {
        &[Input::CandidateContent]
    }
    fn extract(&self, _: &InteractionState, action: &CandidateAction) -> Result<Vec<FeatureValue>, String> {
        let assistive = self.lexicon.matches(&action.content).next().is_some();
        Ok(vec![
            FeatureValue::scalar("assistive_motive", if assistive { 1.0 } else { 0.0 }, TurnLocal),
            FeatureValue::label(
                "motive_class",
                if assistive { "assistive" } else { "relational" },
                TurnLocal,
            ),
        ])
    }
}

fn tag_value<'a>(state: &'a InteractionState, key: &str) -> Option<&'a str> {
    state
        .exogenous_tags
        .iter()
        .find_map(|t| t.strip_prefix(key).and_then(|rest| rest.strip_prefix(':')))
}

fn tag_confidence(state: &InteractionState, key: &str) -> Result<f64, String> {
    match tag_value(state, key) {
        None => Ok(1.0),
        Some(raw) => match raw.parse::<f64>() {
            Ok(c) if (0.0..=1.0).contains(&c) => Ok(c),
            _ => Err(format!("bad confidence tag `{key}:{raw}`")),
        },
    }
}

/// `person_count`: stand-in for a person detector, read from a `persons:N`
/// tag (default 1). Confidence from `persons_conf:x`.
pub struct PersonCountStub;

impl FeatureExtractor for PersonCountStub {
    fn name(&self) -> &str {
        "person_count_stub"
    }
    fn declared(&self) -> &[FeatureDecl] {
        &[FeatureDecl { name: "person_count", scope: TurnLocal }]
    }
    fn inputs(&self) -> &[Input] {
        &[Input::ExogenousTags]
    }
    fn extract(&self, state: &InteractionState, _: &CandidateAction) -> Result<Vec<FeatureValue>, String> {
        let count = match tag_value(state, "persons") {
            None => 1,
            Some(raw) => raw.parse::<u64>().map_err(|_| format!("bad tag `persons:{raw}`"))?,
        };
        let confidence = tag_confidence(state, "persons_conf")?;
        Ok(vec![FeatureValue::count("person_count", count, TurnLocal).with_confidence(confidence)])
    }
}

/// `social_presence`: stand-in for an audio presence classifier.
///
/// | `conversation` | `media_noise` | label          |
/// |----------------|---------------|----------------|
/// | absent         | absent        | `quiet`        |
/// | absent         | present       | `media`        |
/// | present        | absent        | `conversation` |
/// | present        | present       | `conversation` |
///
/// Confidence from `presence_conf:x`.
pub struct SocialPresenceStub;

impl FeatureExtractor for SocialPresenceStub {
    fn name(&self) -> &str {
        "social_presence_stub"
    }
    fn declared(&self) -> &[FeatureDecl] {
        &[FeatureDecl { name: "social_presence", scope: TurnLocal }]
    }
    fn inputs(&self) -> &[Input] {
        &[Input::ExogenousTags]
    }
    fn extract(&self, state: &InteractionState, _: &CandidateAction) -> Result<Vec<FeatureValue>, String> {
        let tags = &state.exogenous_tags;
        let label = if tags.contains("conversation") {
            "conversation"
        } else if tags.contains("media_noise") {
            "media"
        } else {
            "quiet"
        };
        let confidence = tag_confidence(state, "presence_conf")?;
        Ok(vec![FeatureValue::label("social_presence", label, TurnLocal).with_confidence(confidence)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureData, FeatureRegistry};
    use crate::state::apply_transition;

    fn tags(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn feature(state: &InteractionState, text: &str, name: &str) -> FeatureValue {
        let reg = FeatureRegistry::builtin();
        reg.extract_all(state, &CandidateAction::utterance(text, 0)).unwrap()[name].clone()
    }

    fn num(state: &InteractionState, text: &str, name: &str) -> f64 {
        feature(state, text, name).as_number().unwrap()
    }

    #[test]
    fn pack_shape() {
        let pack = builtin_extractors();
        assert_eq!(pack.len(), 9);
        let names: BTreeSet<&str> = pack.iter().map(|e| e.name()).collect();
        assert_eq!(names.len(), 9);
        for e in &pack {
            assert!(!e.inputs().is_empty());
        }
        assert_eq!(pack[2].scope(), TrajectoryAggregate);
        assert_eq!(pack[4].scope(), TrajectoryAggregate);
    }

    /// Oracle: walk the shipped list by hand, matching each term as a
    /// whole-word token sequence.
    fn empathy_oracle(text: &str) -> f64 {
        let toks: Vec<String> = text
            .to_lowercase()
            .replace('\u{2019}', "'")
            .split(|c: char| !(c.is_alphanumeric() || c == '\''))
            .filter(|w| !w.is_empty())
            .map(str::to_string)
            .collect();
        let mut centi = 0u32;
        for line in lexicon::EMPATHY.lines().filter(|l| !l.trim().is_empty()) {
            let mut parts = line.split('\t');
            let term: Vec<&str> = parts.next().unwrap().split(' ').collect();
            let w = parts.next().map_or(25, |w| (w.parse::<f64>().unwrap() * 100.0).round() as u32);
            if toks.windows(term.len()).any(|win| win.iter().zip(&term).all(|(a, b)| a == b)) {
                centi += w;
            }
        }
        f64::from(centi.min(100)) / 100.0
    }

    #[test]
    fn empathy_matches_oracle() {
        let s = InteractionState::new("s", "m");
        for text in [
            "I'm sorry you're feeling that way, that sounds hard",
            "Okay, I see. Try restarting the router.",
            "I see, that sounds frustrating. Let's try restarting the router.",
            "The forecast says 75F.",
            "",
        ] {
            assert_eq!(num(&s, text, "empathy"), empathy_oracle(text), "{text}");
        }
        assert!(num(&s, "I'm sorry you're feeling that way, that sounds hard", "empathy") >= 0.5);
        assert_eq!(num(&s, "Okay, I see. Try restarting the router.", "empathy"), 0.21);
        assert_eq!(
            num(&s, "I see, that sounds frustrating. Let's try restarting the router.", "empathy"),
            0.47
        );
    }

    #[test]
    fn frustration_empty_history_is_zero() {
        assert_eq!(num(&InteractionState::new("s", "m"), "anything", "frustration"), 0.0);
    }

    #[test]
    fn frustration_reads_last_user_turn() {
        let s = InteractionState::new("s", "m")
            .record_user_turn("This is so frustrating, nothing works and I'm fed up.", &BTreeSet::new());
        assert_eq!(num(&s, "ok", "frustration"), 0.82);
    }

    #[test]
    fn verbosity_clamps_at_cap() {
        let s = InteractionState::new("s", "m");
        let long = vec!["word"; 120].join(" ");
        assert_eq!(num(&s, &long, "verbosity"), 1.0);
        let half = vec!["word"; 30].join(" ");
        assert_eq!(num(&s, &half, "verbosity"), 0.5);
    }

    #[test]
    fn verbatim_repeat_scores_one() {
        let text = "Did you catch the game last night?";
        let s = apply_transition(
            &InteractionState::new("s", "m"),
            &CandidateAction::utterance(text, 0),
            &BTreeSet::new(),
        );
        assert_eq!(num(&s, text, "repetition"), 1.0);
        assert_eq!(num(&s, "What a lovely sunny afternoon outside", "repetition"), 0.0);
        assert_eq!(num(&s, "", "repetition"), 0.0);
    }

    #[test]
    fn topic_shift_flags_disjoint_content() {
        let s = InteractionState::new("s", "m").record_user_turn("I love trains and railways", &BTreeSet::new());
        assert_eq!(num(&s, "Trains are great fun", "topic_shift"), 0.0);
        assert_eq!(num(&s, "Stock markets closed higher today", "topic_shift"), 1.0);
        let empty = InteractionState::new("s", "m");
        assert_eq!(num(&empty, "Stock markets closed", "topic_shift"), 0.0);
    }

    #[test]
    fn assistive_motive_detects_offers() {
        let s = InteractionState::new("s", "m");
        let f = feature(&s, "Hello. How may I help you?", "motive_class");
        assert_eq!(f.value, FeatureData::Label("assistive".into()));
        assert_eq!(num(&s, "Hello. How may I help you?", "assistive_motive"), 1.0);
        let f = feature(&s, "Ha, same here! Sunny weekends are the best.", "motive_class");
        assert_eq!(f.value, FeatureData::Label("relational".into()));
    }

    #[test]
    fn social_presence_truth_table() {
        // Enumerated by hand: (conversation, media_noise) -> label
        let table = [
            (false, false, "quiet"),
            (false, true, "media"),
            (true, false, "conversation"),
            (true, true, "conversation"),
        ];
        for (conversation, media, expected) in table {
            let mut t = Vec::new();
            if conversation {
                t.push("conversation");
            }
            if media {
                t.push("media_noise");
            }
            let s = InteractionState::new("s", "m").record_user_turn("", &tags(&t));
            let f = feature(&s, "", "social_presence");
            assert_eq!(f.as_label(), Some(expected), "{t:?}");
        }
    }

    #[test]
    fn stub_tags_drive_counts_and_confidence() {
        let s = InteractionState::new("s", "m").record_user_turn("", &tags(&["persons:2", "persons_conf:0.3"]));
        let f = feature(&s, "", "person_count");
        assert_eq!(f.value, FeatureData::Count(2));
        assert_eq!(f.confidence, 0.3);
        let s = InteractionState::new("s", "m");
        assert_eq!(feature(&s, "", "person_count").value, FeatureData::Count(1));
    }

    #[test]
    fn malformed_stub_tag_faults() {
        let s = InteractionState::new("s", "m").record_user_turn("", &tags(&["persons:many"]));
        let reg = FeatureRegistry::builtin();
        assert!(reg.extract_all(&s, &CandidateAction::utterance("", 0)).is_err());
        let (map, faults) = reg.extract_lenient(&s, &CandidateAction::utterance("", 0));
        assert_eq!(faults.len(), 1);
        assert_eq!(map["person_count"].confidence, 0.0);
    }
}
