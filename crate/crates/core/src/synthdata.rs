//! Labelled synthetic dialogue corpus with paired extraction fixtures.
//!
//! Transcripts are filler text; only their turn and word counts matter.
//! The twenty scores each session would receive from the extraction
//! endpoint are generated alongside and shifted for `present` sessions.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::{
    build_extraction_prompt, count_human_interactions, count_words, prompt_hash, render_extraction_reply,
    DialogueSession, FixtureRecord, Label, ReplayTransport, Speaker, Utterance,
};
use crate::features::{BaseFeature, ScoredFeatures, SCORED_FEATURE_COUNT};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible corpus spec: {0}")]
    Infeasible(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_users: usize,
    pub conversations_mean: f64,
    pub conversations_sd: f64,
    pub pairs_mean: f64,
    pub pairs_sd: f64,
    pub words_mean: f64,
    pub present: usize,
    pub absent: usize,
    pub profile: GenerationProfile,
    pub start: DateTime<Utc>,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_users: 44,
            conversations_mean: 13.66,
            conversations_sd: 7.86,
            pairs_mean: 6.92,
            pairs_sd: 3.08,
            words_mean: 62.73,
            present: 238,
            absent: 363,
            profile: GenerationProfile::default(),
            start: Utc.with_ymd_and_hms(2024, 1, 1, 9, 0, 0).unwrap(),
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn sessions(&self) -> usize {
        self.present + self.absent
    }

    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Infeasible(m.to_string()));
        if self.n_users == 0 {
            return bad("at least one user is required");
        }
        if self.sessions() < self.n_users {
            return bad("every user needs at least one session");
        }
        let scales = [
            self.conversations_mean,
            self.conversations_sd,
            self.pairs_mean,
            self.pairs_sd,
            self.words_mean,
            self.profile.score_noise,
            self.profile.user_spread,
        ];
        if scales.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("means and scales must be finite and non-negative");
        }
        let p = &self.profile;
        if !(p.present_pairs_factor > 0.0 && p.present_words_factor > 0.0) {
            return bad("label factors must be positive");
        }
        Ok(())
    }
}

/// How `present` sessions differ from `absent` ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationProfile {
    /// Multiplier on the mean pair count of `present` sessions; `absent`
    /// sessions get the complementary factor so the overall mean holds.
    pub present_pairs_factor: f64,
    pub present_words_factor: f64,
    /// Added to the score of each listed feature in `present` sessions.
    pub score_shifts: Vec<(BaseFeature, f64)>,
    pub score_noise: f64,
    /// Spread of per-user baseline scores.
    pub user_spread: f64,
}

impl Default for GenerationProfile {
    fn default() -> Self {
        Self {
            present_pairs_factor: 0.8,
            present_words_factor: 0.6,
            score_shifts: vec![
                (BaseFeature::Amnesia, 0.12),
                (BaseFeature::Confusion, 0.12),
                (BaseFeature::Incoherence, 0.08),
                (BaseFeature::Fluency, -0.12),
                (BaseFeature::Initiative, -0.12),
            ],
            score_noise: 0.18,
            user_spread: 0.08,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSession {
    pub session: DialogueSession,
    pub stub_scores: ScoredFeatures,
}

impl SyntheticSession {
    pub fn label(&self) -> Label {
        self.session.label.expect("synthetic sessions are labelled")
    }
}

const FILLER: &[&str] = &[
    "the", "garden", "was", "quiet", "this", "morning", "and", "I", "made", "tea", "my", "daughter", "called",
    "about", "weekend", "we", "talked", "walk", "park", "bread", "market", "weather", "cold", "warm", "dog",
    "neighbour", "radio", "news", "kitchen", "window", "book", "reading", "slept", "well", "tired", "little",
    "yesterday", "soup", "lunch", "friend", "visit", "church", "photos", "old", "school", "remember", "song",
    "music", "television", "flowers", "rain", "sunny", "bus", "town", "doctor", "knee", "better", "maybe",
    "really", "think", "because", "then", "later", "again", "happy", "busy", "hands", "letter", "cards",
];

const BOT_LINES: &[&str] = &[
    "How are you feeling today?",
    "What did you do this morning?",
    "Tell me more about that.",
    "Did you sleep well last night?",
    "Have you talked with your family recently?",
    "What would you like to do this afternoon?",
    "That sounds nice. What happened next?",
    "Do you have any plans for the weekend?",
];

fn unit_normal(rng: &mut ChaCha8Rng) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
}

/// Per-user conversation counts drawn from a truncated normal, then nudged
/// one at a time until they sum to `total`.
fn conversation_counts(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut counts: Vec<usize> = (0..spec.n_users)
        .map(|_| (spec.conversations_mean + spec.conversations_sd * unit_normal(rng)).round().max(1.0) as usize)
        .collect();
    let total = spec.sessions();
    let mut sum: usize = counts.iter().sum();
    while sum != total {
        let i = rng.random_range(0..counts.len());
        if sum > total && counts[i] > 1 {
            counts[i] -= 1;
            sum -= 1;
        } else if sum < total {
            counts[i] += 1;
            sum += 1;
        }
    }
    counts
}

fn split_words(total: usize, turns: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut per_turn = vec![1usize; turns];
    for _ in 0..total - turns {
        per_turn[rng.random_range(0..turns)] += 1;
    }
    per_turn
}

fn filler(n: usize, rng: &mut ChaCha8Rng) -> String {
    (0..n).map(|_| FILLER[rng.random_range(0..FILLER.len())]).collect::<Vec<_>>().join(" ")
}

fn transcript(
    user_id: &str,
    session_id: &str,
    start: DateTime<Utc>,
    pairs: usize,
    words: usize,
    rng: &mut ChaCha8Rng,
) -> DialogueSession {
    let mut session = DialogueSession::new(user_id, session_id);
    let mut t = start;
    for n in split_words(words, pairs, rng) {
        let bot = BOT_LINES[rng.random_range(0..BOT_LINES.len())];
        session.push(Utterance::bot(bot, t).expect("non-empty")).expect("ordered");
        t += Duration::seconds(rng.random_range(5..60));
        session.push(Utterance::human(filler(n, rng), t).expect("non-empty")).expect("ordered");
        t += Duration::seconds(rng.random_range(2..20));
    }
    session.close();
    session
}

fn scores(baseline: &[f64; SCORED_FEATURE_COUNT], label: Label, profile: &GenerationProfile, rng: &mut ChaCha8Rng) -> ScoredFeatures {
    let mut values = [0.0; SCORED_FEATURE_COUNT];
    for (i, feature) in BaseFeature::SCORED.iter().enumerate() {
        let shift = match label {
            Label::Present => profile
                .score_shifts
                .iter()
                .filter(|(f, _)| f == feature)
                .map(|(_, s)| s)
                .sum(),
            Label::Absent => 0.0,
        };
        values[i] = baseline[i] + shift + profile.score_noise * unit_normal(rng);
    }
    ScoredFeatures::new(values)
}

/// Builds the corpus in arrival order. Users are visited in random order
/// and marked `present` until the quota is met; the boundary user turns
/// `present` part-way through their history.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<SyntheticSession>, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let counts = conversation_counts(spec, &mut rng);

    let mut order: Vec<usize> = (0..spec.n_users).collect();
    order.shuffle(&mut rng);
    let mut labels: Vec<Vec<Label>> = counts.iter().map(|c| vec![Label::Absent; *c]).collect();
    let mut quota = spec.present;
    for u in order {
        if quota == 0 {
            break;
        }
        let n = counts[u];
        let take = quota.min(n);
        labels[u][n - take..].fill(Label::Present);
        quota -= take;
    }

    let p = &spec.profile;
    let present_share = spec.present as f64 / spec.sessions() as f64;
    let complement = |factor: f64| {
        if present_share < 1.0 {
            (1.0 - present_share * factor) / (1.0 - present_share)
        } else {
            1.0
        }
    };
    let words_scale = spec.words_mean / (2.0 / std::f64::consts::PI).sqrt();

    let mut sessions = Vec::with_capacity(spec.sessions());
    let mut seen_prompts = HashSet::new();
    for u in 0..spec.n_users {
        let user_id = format!("u{:02}", u + 1);
        let baseline: [f64; SCORED_FEATURE_COUNT] = std::array::from_fn(|i| {
            let centre = match BaseFeature::SCORED[i] {
                BaseFeature::Fluency | BaseFeature::Initiative => 0.65,
                _ => 0.3,
            };
            centre + p.user_spread * unit_normal(&mut rng)
        });
        let mut day = Duration::hours(rng.random_range(0..48));
        for (k, label) in labels[u].iter().enumerate() {
            let (pairs_factor, words_factor) = match label {
                Label::Present => (p.present_pairs_factor, p.present_words_factor),
                Label::Absent => (complement(p.present_pairs_factor), complement(p.present_words_factor)),
            };
            let pairs = (spec.pairs_mean * pairs_factor + spec.pairs_sd * unit_normal(&mut rng))
                .round()
                .max(1.0) as usize;
            let words = ((words_scale * words_factor * unit_normal(&mut rng)).abs().round() as usize).max(pairs);
            let start = spec.start + day + Duration::minutes(rng.random_range(0..600));
            day += Duration::hours(rng.random_range(20..60));
            let session_id = format!("{user_id}-s{:03}", k + 1);
            let mut session = transcript(&user_id, &session_id, start, pairs, words, &mut rng);
            while !seen_prompts.insert(prompt_hash(&build_extraction_prompt(&session))) {
                session = transcript(&user_id, &session_id, start, pairs, words, &mut rng);
            }
            session.label = Some(*label);
            let stub_scores = scores(&baseline, *label, p, &mut rng);
            sessions.push(SyntheticSession { session, stub_scores });
        }
    }
    sessions.sort_by(|a, b| {
        a.session
            .utterances
            .first()
            .map(|u| u.timestamp)
            .cmp(&b.session.utterances.first().map(|u| u.timestamp))
            .then_with(|| a.session.session_id.cmp(&b.session.session_id))
    });
    Ok(sessions)
}

/// One replay fixture per session: its prompt paired with a reply carrying
/// the stub scores.
pub fn fixtures(corpus: &[SyntheticSession]) -> Vec<FixtureRecord> {
    corpus
        .iter()
        .map(|s| FixtureRecord::for_prompt(&build_extraction_prompt(&s.session), render_extraction_reply(&s.stub_scores)))
        .collect()
}

pub fn replay_transport(corpus: &[SyntheticSession]) -> ReplayTransport {
    ReplayTransport::from_records(fixtures(corpus))
}

pub fn sessions(corpus: &[SyntheticSession]) -> Vec<DialogueSession> {
    corpus.iter().map(|s| s.session.clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Sample mean and (n - 1) standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub users: usize,
    pub sessions: usize,
    pub conversations_per_user: MeanSd,
    /// Human turns per session.
    pub utterances: MeanSd,
    pub words: MeanSd,
    pub words_present: f64,
    pub words_absent: f64,
    pub interactions_present: f64,
    pub interactions_absent: f64,
    pub present: usize,
    pub absent: usize,
}

pub fn corpus_stats(corpus: &[SyntheticSession]) -> Result<CorpusStats, SynthError> {
    if corpus.is_empty() {
        return Err(SynthError::EmptyCorpus);
    }
    let mut per_user: BTreeMap<&str, usize> = BTreeMap::new();
    for s in corpus {
        *per_user.entry(s.session.user_id.as_str()).or_default() += 1;
    }
    let turns: Vec<f64> = corpus.iter().map(|s| count_human_interactions(&s.session) as f64).collect();
    let words: Vec<f64> = corpus.iter().map(|s| count_words(&s.session) as f64).collect();
    let mean_where = |values: &[f64], label: Label| {
        let picked: Vec<f64> = corpus
            .iter()
            .zip(values)
            .filter(|(s, _)| s.session.label == Some(label))
            .map(|(_, v)| *v)
            .collect();
        if picked.is_empty() {
            0.0
        } else {
            picked.iter().sum::<f64>() / picked.len() as f64
        }
    };
    let present = corpus.iter().filter(|s| s.session.label == Some(Label::Present)).count();
    Ok(CorpusStats {
        users: per_user.len(),
        sessions: corpus.len(),
        conversations_per_user: MeanSd::of(&per_user.values().map(|c| *c as f64).collect::<Vec<_>>()),
        utterances: MeanSd::of(&turns),
        words: MeanSd::of(&words),
        words_present: mean_where(&words, Label::Present),
        words_absent: mean_where(&words, Label::Absent),
        interactions_present: mean_where(&turns, Label::Present),
        interactions_absent: mean_where(&turns, Label::Absent),
        present,
        absent: corpus.iter().filter(|s| s.session.label == Some(Label::Absent)).count(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WireUtterance {
    speaker: Speaker,
    text: String,
    t: DateTime<Utc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorpusLine {
    user_id: String,
    session_id: String,
    utterances: Vec<WireUtterance>,
    label: Label,
    stub_scores: BTreeMap<String, f64>,
}

impl From<&SyntheticSession> for CorpusLine {
    fn from(s: &SyntheticSession) -> Self {
        Self {
            user_id: s.session.user_id.clone(),
            session_id: s.session.session_id.clone(),
            utterances: s
                .session
                .utterances
                .iter()
                .map(|u| WireUtterance {
                    speaker: u.speaker,
                    text: u.text.clone(),
                    t: u.timestamp,
                })
                .collect(),
            label: s.label(),
            stub_scores: s
                .stub_scores
                .iter()
                .filter_map(|(f, v)| f.reply_key().map(|k| (k.to_string(), v)))
                .collect(),
        }
    }
}

impl CorpusLine {
    fn into_session(self) -> Result<SyntheticSession, String> {
        let mut session = DialogueSession::new(self.user_id, self.session_id);
        for u in self.utterances {
            session
                .push(Utterance::new(u.speaker, u.text, u.t).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        }
        session.close();
        session.label = Some(self.label);
        let mut values = [0.0; SCORED_FEATURE_COUNT];
        for (i, f) in BaseFeature::SCORED.iter().enumerate() {
            let key = f.reply_key().expect("scored");
            values[i] = *self
                .stub_scores
                .get(key)
                .ok_or_else(|| format!("missing stub score `{key}`"))?;
        }
        Ok(SyntheticSession {
            session,
            stub_scores: ScoredFeatures::new(values),
        })
    }
}

pub fn write_corpus(path: &Path, corpus: &[SyntheticSession]) -> Result<(), SynthError> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for s in corpus {
        serde_json::to_writer(&mut out, &CorpusLine::from(s)).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<SyntheticSession>, SynthError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut corpus = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine = serde_json::from_str(&line).map_err(|e| SynthError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        corpus.push(parsed.into_session().map_err(|message| SynthError::Parse { line: i + 1, message })?);
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_corpus_has_exact_totals() {
        let corpus = generate_corpus(&CorpusSpec::default()).unwrap();
        let stats = corpus_stats(&corpus).unwrap();
        assert_eq!(stats.sessions, 601);
        assert_eq!((stats.present, stats.absent), (238, 363));
        assert_eq!(stats.users, 44);
        assert!(stats.interactions_present < stats.interactions_absent);
        assert!(stats.words_present < stats.words_absent);
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_corpus(&CorpusSpec::with_seed(7)).unwrap();
        let b = generate_corpus(&CorpusSpec::with_seed(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn every_session_is_well_formed() {
        for s in generate_corpus(&CorpusSpec::with_seed(3)).unwrap() {
            assert!(s.session.closed);
            assert!(count_words(&s.session) >= count_human_interactions(&s.session));
            assert!(count_human_interactions(&s.session) >= 1);
        }
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let spec = CorpusSpec {
            pairs_sd: -1.0,
            ..CorpusSpec::default()
        };
        assert!(matches!(generate_corpus(&spec), Err(SynthError::Infeasible(_))));
        let spec = CorpusSpec {
            n_users: 700,
            ..CorpusSpec::default()
        };
        assert!(generate_corpus(&spec).is_err());
        assert!(matches!(corpus_stats(&[]), Err(SynthError::EmptyCorpus)));
    }

    #[test]
    fn singleton_corpus_stats() {
        let spec = CorpusSpec {
            n_users: 1,
            present: 0,
            absent: 1,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let stats = corpus_stats(&corpus).unwrap();
        assert_eq!(stats.conversations_per_user, MeanSd { mean: 1.0, sd: 0.0 });
        assert_eq!(stats.words.mean, count_words(&corpus[0].session) as f64);
    }
}
