//! Multi-agent multi-turn dialogue dataset generator: blueprint construction
//! from source personas, four background variants per source, turn-by-turn
//! simulation between a user client and an agent client with structured
//! termination flags, and extraction of query-rewriting samples.

use chrono::{DateTime, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clients::stub::fnv1a_64;
use crate::clients::ChatClient;
use crate::error::{Error, Result};
use crate::prompts;

/// Schema tag stamped on every emitted transcript and rewrite sample.
pub const DATAGEN_SCHEMA: &str = "himes-datagen/1";

fn default_schema() -> String {
    DATAGEN_SCHEMA.to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PersonaRole {
    User,
    Agent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DialogueStyle {
    #[serde(rename = "chit-chat")]
    ChitChat,
    #[serde(rename = "task-oriented")]
    TaskOriented,
}

impl DialogueStyle {
    pub fn as_str(&self) -> &'static str {
        match self {
            DialogueStyle::ChitChat => "chit-chat",
            DialogueStyle::TaskOriented => "task-oriented",
        }
    }
}

/// A dialogue participant. `style` is set only for user personas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Persona {
    pub role: PersonaRole,
    pub name: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<DialogueStyle>,
}

impl Persona {
    pub fn user(name: impl Into<String>, description: impl Into<String>, style: DialogueStyle) -> Self {
        Persona {
            role: PersonaRole::User,
            name: name.into(),
            description: description.into(),
            style: Some(style),
        }
    }

    pub fn agent(name: impl Into<String>, description: impl Into<String>) -> Self {
        Persona {
            role: PersonaRole::Agent,
            name: name.into(),
            description: description.into(),
            style: None,
        }
    }
}

/// The nine query-rewriting capability dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewriteDimension {
    ContextMemorization,
    CoreferenceResolution,
    EllipsisCompletion,
    MultiTurnClarification,
    ErrorCorrection,
    ContextInterferenceResistance,
    HistoricalDisputeMarking,
    FunctionWordRemoval,
    NoRewritingNeeded,
}

impl RewriteDimension {
    pub const ALL: [RewriteDimension; 9] = [
        RewriteDimension::ContextMemorization,
        RewriteDimension::CoreferenceResolution,
        RewriteDimension::EllipsisCompletion,
        RewriteDimension::MultiTurnClarification,
        RewriteDimension::ErrorCorrection,
        RewriteDimension::ContextInterferenceResistance,
        RewriteDimension::HistoricalDisputeMarking,
        RewriteDimension::FunctionWordRemoval,
        RewriteDimension::NoRewritingNeeded,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            RewriteDimension::ContextMemorization => "Context Memorization",
            RewriteDimension::CoreferenceResolution => "Coreference Resolution",
            RewriteDimension::EllipsisCompletion => "Ellipsis Completion",
            RewriteDimension::MultiTurnClarification => "Multi-turn Clarification",
            RewriteDimension::ErrorCorrection => "Error Correction",
            RewriteDimension::ContextInterferenceResistance => "Context Interference Resistance",
            RewriteDimension::HistoricalDisputeMarking => "Historical Dispute Marking",
            RewriteDimension::FunctionWordRemoval => "Function Word Removal",
            RewriteDimension::NoRewritingNeeded => "No Rewriting Needed",
        }
    }

    pub fn description(&self) -> &'static str {
        match self {
            RewriteDimension::ContextMemorization => {
                "compress and summarize information from earlier turns into the current query so the rewrite reflects cross-turn connections"
            }
            RewriteDimension::CoreferenceResolution => {
                "identify pronouns in the user input and replace them with their referents from the dialogue history"
            }
            RewriteDimension::EllipsisCompletion => {
                "identify content omitted from the user input and complete it from the dialogue history"
            }
            RewriteDimension::MultiTurnClarification => {
                "compress information accumulated over consecutive questions and clarify intent when the topic shifts"
            }
            RewriteDimension::ErrorCorrection => {
                "correct unclear questions caused by homophones or similar confusions"
            }
            RewriteDimension::ContextInterferenceResistance => {
                "resist interference from earlier similar-but-different questions when resolving references and omissions"
            }
            RewriteDimension::HistoricalDisputeMarking => {
                "fold the user's dispute of an earlier answer into the rewritten query so the mistake is not repeated"
            }
            RewriteDimension::FunctionWordRemoval => {
                "remove meaningless particles and filler words that would hurt downstream retrieval and answering"
            }
            RewriteDimension::NoRewritingNeeded => {
                "recognize when the original query already carries the full intent and leave it unchanged"
            }
        }
    }

    /// Few-shot style examples injected into the generation prompts.
    pub fn examples(&self) -> &'static str {
        match self {
            RewriteDimension::ContextMemorization => {
                "user: \"my balcony gets two hours of sun\" ... user: \"so which herbs survive that\""
            }
            RewriteDimension::CoreferenceResolution => {
                "user: \"I repotted the monstera\" ... user: \"why are its leaves drooping\""
            }
            RewriteDimension::EllipsisCompletion => {
                "user: \"what about shipping to Canada\" (omitting the product discussed before)"
            }
            RewriteDimension::MultiTurnClarification => {
                "user asks three pricing questions in a row, then: \"and for students?\""
            }
            RewriteDimension::ErrorCorrection => {
                "user: \"does the cream need to be whisked or wicks?\""
            }
            RewriteDimension::ContextInterferenceResistance => {
                "user compared two laptops earlier; now: \"how long does the battery last\""
            }
            RewriteDimension::HistoricalDisputeMarking => {
                "user: \"no, I meant the 2019 model, your last answer was about 2021\""
            }
            RewriteDimension::FunctionWordRemoval => {
                "user: \"um, so like, how do I actually renew the visa thing?\""
            }
            RewriteDimension::NoRewritingNeeded => {
                "user: \"what are your opening hours on Sunday?\" (complete on its own)"
            }
        }
    }
}

/// Raw source record for blueprint construction, one JSON object per line:
/// `{"user_persona": {...}, "agent_persona": {...}, "core_question": ...}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceRecord {
    pub user_persona: SourcePersona,
    pub agent_persona: SourcePersona,
    pub core_question: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourcePersona {
    pub name: String,
    #[serde(default)]
    pub description: String,
}

impl SourceRecord {
    fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("user_persona.name", &self.user_persona.name),
            ("agent_persona.name", &self.agent_persona.name),
            ("core_question", &self.core_question),
        ] {
            if value.trim().is_empty() {
                return Err(Error::InvalidArgument(format!("source record missing {field}")));
            }
        }
        Ok(())
    }
}

/// Plan for one simulated dialogue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueBlueprint {
    pub user_persona: Persona,
    pub agent_persona: Persona,
    pub core_question: String,
    pub timestamp: DateTime<Utc>,
    pub time_sensitive: bool,
    pub style: DialogueStyle,
    pub dimension: RewriteDimension,
}

/// Builds the four background variants of one source dialogue: the cross of
/// {time-sensitive, time-independent} x {chit-chat, task-oriented}, each with
/// a timestamp and rewrite dimension drawn deterministically from `seed` and
/// the source content.
pub fn build_blueprints(source: &SourceRecord, seed: u64) -> Result<Vec<DialogueBlueprint>> {
    source.validate()?;
    let mix = fnv1a_64(
        format!(
            "{}\u{1f}{}\u{1f}{}",
            source.user_persona.name, source.agent_persona.name, source.core_question
        )
        .as_bytes(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ mix);
    let variants = [
        (true, DialogueStyle::ChitChat),
        (true, DialogueStyle::TaskOriented),
        (false, DialogueStyle::ChitChat),
        (false, DialogueStyle::TaskOriented),
    ];
    let mut blueprints = Vec::with_capacity(variants.len());
    for (time_sensitive, style) in variants {
        // timestamps inside a two-year window
        let seconds: i64 = rng.random_range(1_704_067_200..1_767_225_600);
        let timestamp = Utc.timestamp_opt(seconds, 0).single().expect("in-range timestamp");
        let dimension = RewriteDimension::ALL[rng.random_range(0..RewriteDimension::ALL.len())];
        blueprints.push(DialogueBlueprint {
            user_persona: Persona::user(
                source.user_persona.name.clone(),
                source.user_persona.description.clone(),
                style,
            ),
            agent_persona: Persona::agent(
                source.agent_persona.name.clone(),
                source.agent_persona.description.clone(),
            ),
            core_question: source.core_question.clone(),
            timestamp,
            time_sensitive,
            style,
            dimension,
        });
    }
    Ok(blueprints)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Agent,
}

impl Speaker {
    pub fn as_str(&self) -> &'static str {
        match self {
            Speaker::User => "user",
            Speaker::Agent => "agent",
        }
    }
}

/// One simulated turn: the raw model reply, the extracted utterance, and the
/// parsed control flag (`is_solved` for users, `is_last_turn` for agents).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTurn {
    pub speaker: Speaker,
    pub raw: String,
    pub text: String,
    pub flag: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    UserSolved,
    AgentLastTurn,
    MaxTurns,
    ParseFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTranscript {
    #[serde(default = "default_schema")]
    pub schema: String,
    pub blueprint: DialogueBlueprint,
    pub turns: Vec<SimTurn>,
    pub termination: TerminationReason,
}

fn history_lines(turns: &[SimTurn]) -> String {
    prompts::render_history(turns.iter().map(|t| (t.speaker.as_str(), t.text.as_str())))
}

pub fn render_user_prompt(blueprint: &DialogueBlueprint, history: &[SimTurn]) -> Result<String> {
    let user_role = format!(
        "{} ({}, {} style)",
        blueprint.user_persona.name,
        blueprint.user_persona.description,
        blueprint.style.as_str()
    );
    prompts::render_template(
        prompts::DATAGEN_USER_TEMPLATE,
        &[
            ("user_role", &user_role),
            ("user_question", &blueprint.core_question),
            ("dialogue_history", &history_lines(history)),
            ("task_name", blueprint.dimension.name()),
            ("task_description", blueprint.dimension.description()),
            ("task_examples", blueprint.dimension.examples()),
        ],
    )
}

pub fn render_agent_prompt(blueprint: &DialogueBlueprint, history: &[SimTurn]) -> Result<String> {
    prompts::render_template(
        prompts::DATAGEN_AGENT_TEMPLATE,
        &[
            ("biz_name", &blueprint.agent_persona.name),
            ("biz_domain", &blueprint.agent_persona.description),
            ("dialogue_history", &history_lines(history)),
            ("task_name", blueprint.dimension.name()),
            ("task_description", blueprint.dimension.description()),
            ("task_examples", blueprint.dimension.examples()),
        ],
    )
}

#[derive(Deserialize)]
struct UserReply {
    is_solved: bool,
    user_answer: String,
}

#[derive(Deserialize)]
struct AgentReply {
    is_last_turn: bool,
    biz_answer: String,
}

/// Calls a participant, re-prompting once with a format reminder when the
/// reply does not parse. The second failure is reported as None.
fn call_with_retry<T, F>(client: &dyn ChatClient, prompt: &str, parse: F) -> Result<Option<(String, T)>>
where
    F: Fn(&str) -> Result<T>,
{
    let raw = client.generate(prompt)?;
    if let Ok(parsed) = parse(&raw) {
        return Ok(Some((raw, parsed)));
    }
    let reminder = format!("{prompt}{}", prompts::FORMAT_REMINDER);
    let raw = client.generate(&reminder)?;
    match parse(&raw) {
        Ok(parsed) => Ok(Some((raw, parsed))),
        Err(_) => Ok(None),
    }
}

/// Alternating user/agent simulation, user first. Stops when the user flags
/// the question solved (after the agent's closing reply), when the agent
/// flags the last turn, or at `max_turns`. A reply that fails to parse twice
/// terminates the dialogue with the partial transcript kept.
pub fn simulate_dialogue(
    blueprint: &DialogueBlueprint,
    user_client: &dyn ChatClient,
    agent_client: &dyn ChatClient,
    max_turns: usize,
) -> Result<SimTranscript> {
    if max_turns < 2 {
        return Err(Error::InvalidArgument("max_turns must be at least 2".into()));
    }
    let mut turns: Vec<SimTurn> = Vec::new();
    let termination;
    'dialogue: loop {
        // user turn
        let prompt = render_user_prompt(blueprint, &turns)?;
        let user_solved = match call_with_retry(user_client, &prompt, |raw| {
            prompts::parse_json_reply::<UserReply>(raw)
        })? {
            Some((raw, reply)) => {
                turns.push(SimTurn {
                    speaker: Speaker::User,
                    raw,
                    text: reply.user_answer,
                    flag: Some(reply.is_solved),
                });
                reply.is_solved
            }
            None => {
                termination = TerminationReason::ParseFailure;
                break 'dialogue;
            }
        };
        if turns.len() >= max_turns {
            termination = TerminationReason::MaxTurns;
            break;
        }

        // agent turn
        let prompt = render_agent_prompt(blueprint, &turns)?;
        let agent_last = match call_with_retry(agent_client, &prompt, |raw| {
            prompts::parse_json_reply::<AgentReply>(raw)
        })? {
            Some((raw, reply)) => {
                turns.push(SimTurn {
                    speaker: Speaker::Agent,
                    raw,
                    text: reply.biz_answer,
                    flag: Some(reply.is_last_turn),
                });
                reply.is_last_turn
            }
            None => {
                termination = TerminationReason::ParseFailure;
                break 'dialogue;
            }
        };
        if user_solved {
            termination = TerminationReason::UserSolved;
            break;
        }
        if agent_last {
            termination = TerminationReason::AgentLastTurn;
            break;
        }
        if turns.len() >= max_turns {
            termination = TerminationReason::MaxTurns;
            break;
        }
    }
    Ok(SimTranscript {
        schema: default_schema(),
        blueprint: blueprint.clone(),
        turns,
        termination,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTurn {
    pub role: String,
    pub text: String,
}

/// A query-rewriting training sample skeleton extracted from a transcript:
/// the full prior history, the raw user query, and (optionally) an annotated
/// reference rewrite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteSampleSkeleton {
    #[serde(default = "default_schema")]
    pub schema: String,
    pub dimension: String,
    pub history: Vec<SampleTurn>,
    pub query_old: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotated_rewrite: Option<String>,
    pub timestamp: DateTime<Utc>,
}

#[derive(Deserialize)]
struct AnnotationReply {
    query_rewrited: String,
}

/// One sample per non-first user turn, each carrying all turns before it.
/// With an annotator client, each sample's reference rewrite is generated
/// through the rewrite prompt; without one, `annotated_rewrite` stays unset.
pub fn emit_rewrite_samples(
    transcript: &SimTranscript,
    annotator: Option<&dyn ChatClient>,
) -> Result<Vec<RewriteSampleSkeleton>> {
    if transcript.turns.len() < 2 {
        return Err(Error::InvalidArgument(
            "transcript must have at least 2 turns".into(),
        ));
    }
    let mut samples = Vec::new();
    let mut seen_user_turns = 0usize;
    for (index, turn) in transcript.turns.iter().enumerate() {
        if turn.speaker != Speaker::User {
            continue;
        }
        seen_user_turns += 1;
        if seen_user_turns == 1 {
            continue;
        }
        let history: Vec<SampleTurn> = transcript.turns[..index]
            .iter()
            .map(|t| SampleTurn {
                role: t.speaker.as_str().to_string(),
                text: t.text.clone(),
            })
            .collect();
        let annotated_rewrite = match annotator {
            Some(client) => {
                let rendered = prompts::render_history(
                    history.iter().map(|t| (t.role.as_str(), t.text.as_str())),
                );
                let prompt = prompts::render_rewrite_prompt(
                    &turn.text,
                    &rendered,
                    &transcript.blueprint.agent_persona.name,
                    &transcript.blueprint.agent_persona.description,
                )?;
                let reply = client.generate(&prompt)?;
                Some(prompts::parse_json_reply::<AnnotationReply>(&reply)?.query_rewrited)
            }
            None => None,
        };
        samples.push(RewriteSampleSkeleton {
            schema: default_schema(),
            dimension: transcript.blueprint.dimension.name().to_string(),
            history,
            query_old: turn.text.clone(),
            annotated_rewrite,
            timestamp: transcript.blueprint.timestamp,
        });
    }
    Ok(samples)
}

/// Judge-scored transcript quality in [0, 100]; `None` when the judge reply
/// stays unparseable after one re-prompt.
pub fn score_transcript(
    transcript: &SimTranscript,
    judge: &dyn ChatClient,
) -> Result<Option<f64>> {
    let dialogue = history_lines(&transcript.turns);
    let prompt = prompts::render_template(
        prompts::JUDGE_TRANSCRIPT_TEMPLATE,
        &[
            ("core_question", &transcript.blueprint.core_question),
            ("dialogue", &dialogue),
        ],
    )?;
    let reply = judge.generate(&prompt)?;
    if let Some(score) = prompts::parse_score(&reply) {
        return Ok(Some(score));
    }
    let reply = judge.generate(&format!("{prompt}{}", prompts::FORMAT_REMINDER))?;
    Ok(prompts::parse_score(&reply))
}

/// Indices of transcripts whose score reaches the `quantile` cut (nearest
/// rank, ties included) of all scores; the default 0.75 keeps the top
/// quartile.
pub fn select_high_quality(scores: &[f64], quantile: f64) -> Vec<usize> {
    if scores.is_empty() {
        return Vec::new();
    }
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let cut = ((quantile * sorted.len() as f64).ceil() as usize).min(sorted.len() - 1);
    let threshold = sorted[cut];
    scores
        .iter()
        .enumerate()
        .filter(|(_, s)| **s >= threshold)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::stub::{ScriptedChatClient, SimAgentClient, SimUserClient, StubJudge};

    fn source() -> SourceRecord {
        SourceRecord {
            user_persona: SourcePersona {
                name: "amateur baker".into(),
                description: "learning sourdough at home".into(),
            },
            agent_persona: SourcePersona {
                name: "Flour & Crumb".into(),
                description: "artisan baking techniques".into(),
            },
            core_question: "why does my sourdough collapse in the oven".into(),
        }
    }

    #[test]
    fn four_variants_cover_the_cross() {
        let blueprints = build_blueprints(&source(), 42).unwrap();
        assert_eq!(blueprints.len(), 4);
        let mut cells: Vec<(bool, DialogueStyle)> = blueprints
            .iter()
            .map(|b| (b.time_sensitive, b.style))
            .collect();
        cells.dedup();
        assert_eq!(cells.len(), 4, "each (time_sensitive, style) cell exactly once");
        for blueprint in &blueprints {
            assert_eq!(blueprint.user_persona.style, Some(blueprint.style));
            assert!(blueprint.agent_persona.style.is_none());
        }
    }

    #[test]
    fn same_seed_gives_identical_blueprints() {
        let a = build_blueprints(&source(), 7).unwrap();
        let b = build_blueprints(&source(), 7).unwrap();
        assert_eq!(a, b);
        let c = build_blueprints(&source(), 8).unwrap();
        assert_ne!(
            a.iter().map(|x| x.timestamp).collect::<Vec<_>>(),
            c.iter().map(|x| x.timestamp).collect::<Vec<_>>()
        );
    }

    #[test]
    fn missing_persona_fields_are_rejected() {
        let mut bad = source();
        bad.user_persona.name = "  ".into();
        assert!(build_blueprints(&bad, 1).is_err());
    }

    #[test]
    fn dimension_names_match_the_shipped_nine() {
        let names: Vec<&str> = RewriteDimension::ALL.iter().map(|d| d.name()).collect();
        assert_eq!(
            names,
            vec![
                "Context Memorization",
                "Coreference Resolution",
                "Ellipsis Completion",
                "Multi-turn Clarification",
                "Error Correction",
                "Context Interference Resistance",
                "Historical Dispute Marking",
                "Function Word Removal",
                "No Rewriting Needed",
            ]
        );
    }

    #[test]
    fn prompts_render_reply_formats_and_empty_history_marker() {
        let blueprint = &build_blueprints(&source(), 1).unwrap()[0];
        let user = render_user_prompt(blueprint, &[]).unwrap();
        assert!(user.contains(prompts::USER_REPLY_FORMAT));
        assert!(user.contains(prompts::EMPTY_HISTORY_MARKER));
        let agent = render_agent_prompt(blueprint, &[]).unwrap();
        assert!(agent.contains(prompts::AGENT_REPLY_FORMAT));
        assert_eq!(user, render_user_prompt(blueprint, &[]).unwrap());
    }

    #[test]
    fn user_solved_on_first_turn_gives_two_turn_transcript() {
        let blueprint = &build_blueprints(&source(), 1).unwrap()[0];
        let user = SimUserClient::new(Some(1));
        let agent = SimAgentClient::new(None);
        let transcript = simulate_dialogue(blueprint, &user, &agent, 12).unwrap();
        assert_eq!(transcript.turns.len(), 2);
        assert_eq!(transcript.termination, TerminationReason::UserSolved);
        assert_eq!(transcript.turns[0].speaker, Speaker::User);
        assert_eq!(transcript.turns[1].speaker, Speaker::Agent);
    }

    #[test]
    fn flagless_stubs_run_to_max_turns() {
        let blueprint = &build_blueprints(&source(), 1).unwrap()[0];
        let user = SimUserClient::new(None);
        let agent = SimAgentClient::new(None);
        let transcript = simulate_dialogue(blueprint, &user, &agent, 8).unwrap();
        assert_eq!(transcript.turns.len(), 8);
        assert_eq!(transcript.termination, TerminationReason::MaxTurns);
        // roles strictly alternate user -> agent -> user ...
        for (i, turn) in transcript.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Speaker::User } else { Speaker::Agent };
            assert_eq!(turn.speaker, expected);
        }
        assert!(simulate_dialogue(blueprint, &user, &agent, 1).is_err());
    }

    #[test]
    fn agent_last_turn_flag_terminates() {
        let blueprint = &build_blueprints(&source(), 1).unwrap()[0];
        let user = SimUserClient::new(None);
        let agent = SimAgentClient::new(Some(2));
        let transcript = simulate_dialogue(blueprint, &user, &agent, 12).unwrap();
        assert_eq!(transcript.termination, TerminationReason::AgentLastTurn);
        assert_eq!(transcript.turns.len(), 4);
    }

    #[test]
    fn scripted_stub_pair_replays_a_fixture_conversation() {
        let blueprint = &build_blueprints(&source(), 1).unwrap()[0];
        let user = ScriptedChatClient::new(vec![
            r#"{"is_solved": false, "user_answer": "does hydration matter?"}"#.into(),
            r#"{"is_solved": true, "user_answer": "great, thanks!"}"#.into(),
        ]);
        let agent = ScriptedChatClient::new(vec![
            r#"{"is_last_turn": false, "biz_answer": "yes, aim for 75 percent."}"#.into(),
            r#"{"is_last_turn": true, "biz_answer": "happy baking!"}"#.into(),
        ]);
        let transcript = simulate_dialogue(blueprint, &user, &agent, 12).unwrap();
        let texts: Vec<&str> = transcript.turns.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(
            texts,
            vec![
                "does hydration matter?",
                "yes, aim for 75 percent.",
                "great, thanks!",
                "happy baking!",
            ]
        );
        assert_eq!(transcript.termination, TerminationReason::UserSolved);
    }

    #[test]
    fn unparseable_reply_gets_one_reminder_then_terminates() {
        let blueprint = &build_blueprints(&source(), 1).unwrap()[0];
        let user = ScriptedChatClient::repeating(vec!["gibberish".into()]);
        let agent = SimAgentClient::new(None);
        let transcript = simulate_dialogue(blueprint, &user, &agent, 12).unwrap();
        assert_eq!(transcript.termination, TerminationReason::ParseFailure);
        assert!(transcript.turns.is_empty());
        assert_eq!(user.call_count(), 2, "exactly one re-prompt");
        let prompts_seen = user.prompts();
        assert!(prompts_seen[1].contains("[Format Reminder]"));
    }

    #[test]
    fn samples_come_from_non_first_user_turns() {
        let blueprint = &build_blueprints(&source(), 1).unwrap()[0];
        let user = SimUserClient::new(Some(3));
        let agent = SimAgentClient::new(None);
        let transcript = simulate_dialogue(blueprint, &user, &agent, 12).unwrap();
        // user turns: 1,2,3 -> samples from turns 2 and 3
        let samples = emit_rewrite_samples(&transcript, None).unwrap();
        assert_eq!(samples.len(), 2);
        for sample in &samples {
            assert_eq!(sample.dimension, blueprint.dimension.name());
            assert_eq!(sample.schema, DATAGEN_SCHEMA);
            assert!(!sample.history.is_empty());
        }
        // full prior history: second sample sees 4 turns
        assert_eq!(samples[1].history.len(), 4);
    }

    #[test]
    fn samples_round_trip_through_jsonl() {
        let blueprint = &build_blueprints(&source(), 1).unwrap()[0];
        let user = SimUserClient::new(Some(2));
        let agent = SimAgentClient::new(None);
        let transcript = simulate_dialogue(blueprint, &user, &agent, 12).unwrap();
        let annotator = ScriptedChatClient::repeating(vec![
            r#"{"query_rewrited": "annotated standalone query"}"#.into(),
        ]);
        let samples = emit_rewrite_samples(&transcript, Some(&annotator)).unwrap();
        assert_eq!(samples[0].annotated_rewrite.as_deref(), Some("annotated standalone query"));
        for sample in &samples {
            let line = serde_json::to_string(sample).unwrap();
            let back: RewriteSampleSkeleton = serde_json::from_str(&line).unwrap();
            assert_eq!(*sample, back);
        }
    }

    #[test]
    fn transcript_scores_parse_and_select_top_quartile() {
        let blueprint = &build_blueprints(&source(), 1).unwrap()[0];
        let user = SimUserClient::new(Some(1));
        let agent = SimAgentClient::new(None);
        let transcript = simulate_dialogue(blueprint, &user, &agent, 12).unwrap();
        let judge = StubJudge::new(3);
        let score = score_transcript(&transcript, &judge).unwrap().unwrap();
        assert!((0.0..=100.0).contains(&score));

        let unusable = ScriptedChatClient::repeating(vec!["ninety".into()]);
        assert!(score_transcript(&transcript, &unusable).unwrap().is_none());

        let kept = select_high_quality(&[10.0, 50.0, 90.0, 70.0], 0.75);
        assert_eq!(kept, vec![2]);
        let kept = select_high_quality(&[50.0, 50.0, 50.0, 50.0], 0.75);
        assert_eq!(kept.len(), 4);
    }
}
