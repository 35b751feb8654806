//! Prompt templates and the slot renderer.
//!
//! Templates use `{snake_case}` slots. Rendering is a single pass: slot
//! values are inserted verbatim and never rescanned, and a slot present in
//! the template but missing from the provided values is an error naming the
//! slot. Literal braces that are not of the `{name}` form (such as the JSON
//! reply-format examples embedded in the templates) pass through untouched.

use std::sync::LazyLock;

use regex::Regex;
use serde::de::DeserializeOwned;

use crate::error::{Error, Result};

static SLOT_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{([a-z][a-z0-9_]*)\}").expect("slot regex"));

/// Renders `template` by substituting each `{name}` slot from `slots`.
pub fn render_template(template: &str, slots: &[(&str, &str)]) -> Result<String> {
    let mut output = String::with_capacity(template.len());
    let mut cursor = 0;
    for captures in SLOT_RE.captures_iter(template) {
        let whole = captures.get(0).expect("match");
        let name = captures.get(1).expect("group").as_str();
        let value = slots
            .iter()
            .find(|(slot, _)| *slot == name)
            .map(|(_, value)| *value)
            .ok_or_else(|| Error::UnresolvedSlot(name.to_string()))?;
        output.push_str(&template[cursor..whole.start()]);
        output.push_str(value);
        cursor = whole.end();
    }
    output.push_str(&template[cursor..]);
    Ok(output)
}

/// Marker rendered into a history slot when there are no prior turns.
pub const EMPTY_HISTORY_MARKER: &str = "(none)";

/// Formats dialogue turns as `role: text` lines; empty history renders the
/// explicit [`EMPTY_HISTORY_MARKER`].
pub fn render_history<'a, I>(turns: I) -> String
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let lines: Vec<String> = turns
        .into_iter()
        .map(|(role, text)| format!("{role}: {text}"))
        .collect();
    if lines.is_empty() {
        EMPTY_HISTORY_MARKER.to_string()
    } else {
        lines.join("\n")
    }
}

/// Extracts and parses the first JSON object embedded in a model reply.
/// Tolerates surrounding prose/code fences and Python-style `True`/`False`
/// literals.
pub fn parse_json_reply<T: DeserializeOwned>(reply: &str) -> Result<T> {
    static PY_TRUE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r":\s*True\b").expect("regex"));
    static PY_FALSE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r":\s*False\b").expect("regex"));

    let start = reply
        .find('{')
        .ok_or_else(|| Error::MalformedReply(format!("no JSON object in reply: {reply:.80}")))?;
    let end = reply
        .rfind('}')
        .filter(|end| *end > start)
        .ok_or_else(|| Error::MalformedReply(format!("unterminated JSON object in reply: {reply:.80}")))?;
    let candidate = &reply[start..=end];
    let trued = PY_TRUE.replace_all(candidate, ": true");
    let fixed = PY_FALSE.replace_all(&trued, ": false");
    serde_json::from_str(&fixed).map_err(|e| Error::MalformedReply(format!("{e}: {candidate:.120}")))
}

// ---------------------------------------------------------------------------
// Short-term memory: query rewriting
// ---------------------------------------------------------------------------

/// Reply contract of the rewriter model. The `query_rewrited` key is part of
/// the wire protocol and must not be renamed.
pub const REWRITE_REPLY_FORMAT: &str = r#"{ "query_rewrited": <rewrited query>}"#;

pub const REWRITE_PROMPT_TEMPLATE: &str = r#"System: You are a professional multi-turn dialogue query rewriting expert. Based on all historical dialogue content, rewrite the current user query so that the rewritten query carries all key information from the historical dialogue with no redundancy, ambiguity, errors, or repetition, while staying concise.

[Useful Information]
User's current query: {query_old}
Historical dialogue:
{history}

[Query Rewriting Rules]
- Rewriting directions may include:
  - Compress and summarize past dialogue information into the current query so the rewrite reflects the front-to-back correlation.
  - Identify demonstrative pronouns in the user input and rewrite them using the historical dialogue.
  - Identify omitted content in the user input and complete it using the historical dialogue.
  - Compress historical information from continuous questioning, or clarify intent when the topic changes.
  - Correct unclear questions caused by homophones or similar issues.
  - Exclude interference from similar but different earlier questions; resolve pronouns and omissions precisely.
  - When the user disputes an earlier answer, fold that dispute into the rewritten query so downstream models are not misled.
  - Remove meaningless modal particles and auxiliary words that would hurt downstream retrieval.
  - When the original query already reflects the full user intent, recognize this and avoid unnecessary rewriting.
- Strictly ground the rewrite in the historical dialogue and the current query; do not fabricate content or deviate from the user's current intent.
- If there is no historical dialogue, do not perform rewriting.
- If the user's current query is unrelated to the historical dialogue, do not perform rewriting.
- If unable to determine whether rewriting is needed, do not perform rewriting.
- Except for well-known public or historical figures, do not include personal names in the rewritten query.

[Account Information]
Account ID: {biz_id}
Account name and specialized domains: {agent}

[Reply Format Example]
{ "query_rewrited": <rewrited query>}"#;

pub fn render_rewrite_prompt(
    query_old: &str,
    history: &str,
    biz_id: &str,
    agent: &str,
) -> Result<String> {
    render_template(
        REWRITE_PROMPT_TEMPLATE,
        &[
            ("query_old", query_old),
            ("history", history),
            ("biz_id", biz_id),
            ("agent", agent),
        ],
    )
}

// ---------------------------------------------------------------------------
// Response model
// ---------------------------------------------------------------------------

/// Prefix used when rendering one golden chunk into the knowledge-base slot.
pub const ARTICLE_PREFIX: &str = "Reference Historical Article";

/// Rendered into the knowledge-base section when no golden chunks survived
/// retrieval; tests use it to detect the empty-knowledge-base branch.
pub const EMPTY_KB_NOTICE: &str =
    "The knowledge base returned empty results: explain that you have not written similar articles, then answer from your own experience, and do not reference or cite any articles.";

/// Marker preceding the user question; the stub responder extracts the
/// question after it.
pub const QUESTION_MARKER: &str = "The user's original question is: ";

pub const RESPONSE_PROMPT_TEMPLATE: &str = r#"System:
{meta_prompt}You answer questions from this account's followers by drawing on the account's historical articles in the [Knowledge Base]. Reply in the tone the author uses in the [Historical Comments Knowledge Base], but never quote comment content directly and never cite articles explicitly. Do not include phrases like "(Reference xxx)" in your replies.

[Knowledge Base Usage Instructions]
- Each retrieved article below follows the format "Reference Historical Article <title>: <content>", where <title> is the article title and <content> is the article content. Never use parentheses to indicate which article was referenced.
- Imitate the author's tone and style from the retrieved articles when replying.
- If the knowledge base returns empty results, explain that you have not written similar articles, then answer from your own experience, and do not reference or cite any articles.

[Knowledge Base]
{knowledge_base}

[Historical Comments Knowledge Base]
{comments}

[Reply Expression Requirements]
- Combine the user's chat history and keep answers concise: stay within 150 characters and avoid information dumping; split complex content into short paragraphs.
- Do not fabricate or exaggerate; ground replies strictly in the [Knowledge Base] content and writing style.
- Adjust tone to the user's emotion: professional and accurate for professional questions, relaxed and colloquial for casual topics, always equal and respectful.
- Do not output markdown formatting.

[User Question]
The user's original question is: {query}"#;

/// Recovers the rendered knowledge-base section from an assembled response
/// prompt — exactly the reference content the responder saw, which is what
/// contextual-alignment judging needs.
pub fn extract_knowledge_section(prompt: &str) -> Option<&str> {
    let start = prompt.find("[Knowledge Base]\n")? + "[Knowledge Base]\n".len();
    let end = prompt[start..].find("\n\n[Historical Comments Knowledge Base]")? + start;
    Some(&prompt[start..end])
}

pub fn render_response_prompt(
    meta_prompt: &str,
    knowledge_base: &str,
    comments: &str,
    query: &str,
) -> Result<String> {
    render_template(
        RESPONSE_PROMPT_TEMPLATE,
        &[
            ("meta_prompt", meta_prompt),
            ("knowledge_base", knowledge_base),
            ("comments", comments),
            ("query", query),
        ],
    )
}

// ---------------------------------------------------------------------------
// Dialogue auto-generation
// ---------------------------------------------------------------------------

pub const USER_REPLY_FORMAT: &str = r#"{ "is_solved": <whether the original question has been solved, True if solved, False if not solved, do not provide any explanation or output other content>, "user_answer": <your response for this round, which could be asking follow-up questions, answering the assistant's questions, expressing gratitude, or ending the conversation>}"#;

pub const DATAGEN_USER_TEMPLATE: &str = r#"System: You will play the role of an AI assistant user and engage in conversation with the assistant.

[Your Role]
You are a {user_role}, and your original question is: {user_question}.

[Dialogue History]
{dialogue_history}

[Reply Requirements]
- Provide your response for this round based on the dialogue history.
- Before answering, first determine from the "Dialogue History" whether your original question has been solved and whether you need to continue asking follow-up questions.
- If you need to continue, provide your follow-up question for this round.
- If you do not need to continue, provide your closing response for this round.

[Reply Format Example]
{ "is_solved": <whether the original question has been solved, True if solved, False if not solved, do not provide any explanation or output other content>, "user_answer": <your response for this round, which could be asking follow-up questions, answering the assistant's questions, expressing gratitude, or ending the conversation>}

[Notes]
- Demonstrate the characteristics of {task_name} in multi-turn conversation, which is: {task_description}
- Refer to the following examples of {task_name} and imitate the conversational style only, never the content: {task_examples}"#;

pub const AGENT_REPLY_FORMAT: &str = r#"{ "is_last_turn": <whether this is the last round of dialogue, True if the user's original question has been resolved, otherwise False, do not provide any explanation or output other content>, "biz_answer": <your response for this round, which could be asking follow-up questions to get more information, answering user questions, small talk, expressing gratitude, or ending the conversation>}"#;

pub const DATAGEN_AGENT_TEMPLATE: &str = r#"System: You will play the role of an article account author and engage in conversation with the account's followers.

[Your Role]
Your account name is {biz_name}, and the domain your account specializes in is: {biz_domain}.

[Dialogue History]
{dialogue_history}

[Reply Requirements]
- Provide your response for this round based on the dialogue history.
- Before answering, first determine from the "Dialogue History" whether the user's original question has been resolved.
- If the user's question has not been resolved, provide your follow-up questions or answers for this round.
- If the user's question has been resolved, engage in small talk, express gratitude, or end the conversation.

[Reply Format Example]
{ "is_last_turn": <whether this is the last round of dialogue, True if the user's original question has been resolved, otherwise False, do not provide any explanation or output other content>, "biz_answer": <your response for this round, which could be asking follow-up questions to get more information, answering user questions, small talk, expressing gratitude, or ending the conversation>}

[Notes]
- Demonstrate the characteristics of {task_name} in multi-turn conversation, which is: {task_description}
- Refer to the following examples of {task_name} and imitate the conversational style only, never the content: {task_examples}"#;

/// Appended once when a simulated participant's reply failed to parse.
pub const FORMAT_REMINDER: &str =
    "\n\n[Format Reminder]\nYour previous reply did not match the required format. Reply with exactly one JSON object in the documented reply format and nothing else.";

// ---------------------------------------------------------------------------
// Judge templates
// ---------------------------------------------------------------------------

pub const JUDGE_CA_TEMPLATE: &str = r#"You are a strict evaluator. Rate the semantic consistency between a model response and the retrieved context it was grounded on.

[Retrieved Context]
{context}

[Response]
{response}

Score the contextual alignment as an integer from 0 (the response ignores or contradicts the context) to 100 (the response is fully grounded in the context). Reply with exactly one line of the form:
score: <integer>"#;

pub const JUDGE_QA_TEMPLATE: &str = r#"You are a strict evaluator. Rate how effectively a model response addresses the user's question.

[User Question]
{query}

[Response]
{response}

Score the question relevance as an integer from 0 (does not address the question) to 100 (fully and directly addresses it). Reply with exactly one line of the form:
score: <integer>"#;

pub const JUDGE_QR_TEMPLATE: &str = r#"You are a strict evaluator. Rate how well a rewritten query compresses the dialogue history into a standalone retrieval query.

[Dialogue History]
{history}

[Original Query]
{query}

[Rewritten Query]
{rewritten_query}

Score the rewriting quality as an integer from 0 (loses or distorts the intent) to 100 (complete, unambiguous, and concise). Reply with exactly one line of the form:
score: <integer>"#;

pub const JUDGE_TRANSCRIPT_TEMPLATE: &str = r#"You are a strict evaluator. Rate the quality of a simulated multi-turn dialogue: coherence across turns and consistency with the user's core question.

[Core Question]
{core_question}

[Dialogue]
{dialogue}

Score the dialogue quality as an integer from 0 (incoherent or off-question) to 100 (coherent and fully on-question). Reply with exactly one line of the form:
score: <integer>"#;

/// Extracts a numeric judge score from a reply: the number following a
/// "score:" prefix, or the entire reply when it is a bare number. Values are
/// clamped to [0, 100].
pub fn parse_score(reply: &str) -> Option<f64> {
    static SCORE_RE: LazyLock<Regex> =
        LazyLock::new(|| Regex::new(r"(?i)score\s*[:=]\s*(-?\d+(?:\.\d+)?)").expect("regex"));
    let raw = match SCORE_RE.captures(reply) {
        Some(captures) => captures.get(1).expect("group").as_str().parse::<f64>().ok(),
        None => reply.trim().parse::<f64>().ok(),
    };
    raw.map(|v| v.clamp(0.0, 100.0))
}

// ---------------------------------------------------------------------------
// Query classification
// ---------------------------------------------------------------------------

pub const CLASSIFIER_TEMPLATE: &str = r#"Assign the user query below to exactly one topic and subtopic from the taxonomy.

[Taxonomy]
{taxonomy}

[Query]
{query}

Reply with exactly one JSON object of the form {"topic": <topic name>, "subtopic": <subtopic name>} and nothing else."#;

pub fn render_classifier_prompt(query: &str, taxonomy_listing: &str) -> Result<String> {
    // The reply-format example above contains {"topic": ...} which starts
    // with '{"', so it survives slot substitution untouched.
    render_template(
        CLASSIFIER_TEMPLATE,
        &[("taxonomy", taxonomy_listing), ("query", query)],
    )
}
