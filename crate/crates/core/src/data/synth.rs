//! Two-stage persona-driven query synthesis.
//!
//! Stage one asks a generator to pick a persona, question type and difficulty
//! for a passage; stage two asks it for a query written from that persona's
//! perspective. Both prompts are rendered from fixed templates and the replies
//! must be JSON objects.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::generator::GeneratorClient;
use super::pairs::{PairRecord, Source, TaskTag};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    Keywords,
    AcquireKnowledge,
    Summary,
    YesOrNo,
    Background,
}

impl QuestionType {
    pub const ALL: [QuestionType; 5] = [
        QuestionType::Keywords,
        QuestionType::AcquireKnowledge,
        QuestionType::Summary,
        QuestionType::YesOrNo,
        QuestionType::Background,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::Keywords => "keywords",
            QuestionType::AcquireKnowledge => "acquire_knowledge",
            QuestionType::Summary => "summary",
            QuestionType::YesOrNo => "yes_or_no",
            QuestionType::Background => "background",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    HighSchool,
    University,
    Phd,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::HighSchool, Difficulty::University, Difficulty::Phd];

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::HighSchool => "high_school",
            Difficulty::University => "university",
            Difficulty::Phd => "phd",
        }
    }
}

macro_rules! str_enum {
    ($t:ty) => {
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                let norm = s.trim().to_ascii_lowercase();
                <$t>::ALL
                    .into_iter()
                    .find(|v| v.as_str() == norm)
                    .ok_or_else(|| Error::invalid(format!("unknown {} {s:?}", stringify!($t))))
            }
        }

        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

str_enum!(QuestionType);
str_enum!(Difficulty);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Persona {
    pub id: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub character: String,
    pub question_type: QuestionType,
    pub difficulty: Difficulty,
    pub length_words: usize,
    pub language: String,
}

/// Pipeline knobs that are not chosen by the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthOptions {
    pub language: String,
    /// Parse-failure retries per stage (attempts = retries + 1).
    pub retries: usize,
    /// Candidate query lengths; one is picked per passage by hash.
    pub length_choices: Vec<usize>,
    pub personas_top_k: usize,
    /// Instruction attached to the emitted retrieval pairs.
    pub instruction: String,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            language: "en".into(),
            retries: 3,
            length_choices: vec![3, 5, 8],
            personas_top_k: 5,
            instruction: "Given a web search query, retrieve relevant passages that answer the query".into(),
        }
    }
}

pub const STAGE1_PREFIX: &str = "Given a **Passage** and **Character**, select the appropriate option";
pub const STAGE2_PREFIX: &str = "Given a **Character**, **Passage**, and **Requirement**, generate a query";

/// Persona candidates are listed one per line as `- <description>`.
pub fn render_character_list(personas: &[Persona]) -> String {
    personas
        .iter()
        .map(|p| format!("- {}", p.description))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_config_prompt(language: &str, passage: &str, character: &str) -> String {
    format!(
        "Given a **Passage** and **Character**, select the appropriate option from three fields: Character, Question_Type, Difficulty, and return the output in JSON format.
First, select the Character who are likely to be interested in the Passage from the candidates. Then select the Question_Type that the Character might ask about the Passage; Finally, choose the Difficulty of the possible question based on the Passage, the Character, and the Question_Type.
Character: Given by input **Character**

Question_Type:
- keywords: ...
- acquire_knowledge: ...
- summary: ...
- yes_or_no: ...
- background: ...

Difficulty:
- high_school: ...
- university: ...
- phd: ...

Here are some examples
<Example1> <Example2> <Example3>

Now, generate the **output** based on the **Passage** and **Character** from user, the **Passage** will be in {language} language and the **Character** will be in English.
Ensure to generate only the JSON output with content in English.

**Passage**:
{passage}
**Character**:
{character}
"
    )
}

/// `corpus_language` describes the passage; the query language comes from the
/// config and fills both the key/value and the requirement slots.
pub fn render_query_prompt(config: &SynthesisConfig, passage: &str, corpus_language: &str) -> String {
    let SynthesisConfig {
        character,
        question_type,
        difficulty,
        length_words,
        language,
    } = config;
    format!(
        "Given a **Character**, **Passage**, and **Requirement**, generate a query from the **Character**'s perspective that satisfies the **Requirement** and can be used to retrieve the **Passage**. Please return the result in JSON format.

Here is an example:
<example>

Now, generate the **output** based on the **Character**, **Passage** and **Requirement** from user, the **Passage** will be in {corpus_language} language, the **Character** and **Requirement** will be in English.
Ensure to generate only the JSON output, with the key in English and the value in {language} language.

**Character**
{character}
**Passage**
{passage}
**Requirment**
- Type: {question_type};
- Difficulty: {difficulty};
- Length: the length of the generated sentences should be {length_words} words;
- Languange: the language in which the results are generated should be {language} language;
"
    )
}

/// Extracts the outermost `{...}` span, tolerating code fences and prose.
fn json_object(reply: &str) -> Option<serde_json::Map<String, serde_json::Value>> {
    let start = reply.find('{')?;
    let end = reply.rfind('}')?;
    if end < start {
        return None;
    }
    match serde_json::from_str::<serde_json::Value>(&reply[start..=end]).ok()? {
        serde_json::Value::Object(m) => Some(m),
        _ => None,
    }
}

fn field<'a>(m: &'a serde_json::Map<String, serde_json::Value>, names: &[&str]) -> Option<&'a str> {
    names
        .iter()
        .find_map(|n| m.get(*n))
        .and_then(|v| v.as_str())
        .map(str::trim)
        .filter(|s| !s.is_empty())
}

/// Parses a stage-one reply into `(character, question_type, difficulty)`.
pub fn parse_config_reply(reply: &str) -> Result<(String, QuestionType, Difficulty)> {
    let m = json_object(reply).ok_or_else(|| Error::invalid("reply is not a JSON object"))?;
    let character = field(&m, &["Character", "character"]).ok_or_else(|| Error::invalid("missing Character"))?;
    let qt = field(&m, &["Question_Type", "question_type"]).ok_or_else(|| Error::invalid("missing Question_Type"))?;
    let diff = field(&m, &["Difficulty", "difficulty"]).ok_or_else(|| Error::invalid("missing Difficulty"))?;
    Ok((character.to_owned(), qt.parse()?, diff.parse()?))
}

pub fn parse_query_reply(reply: &str) -> Result<String> {
    let m = json_object(reply).ok_or_else(|| Error::invalid("reply is not a JSON object"))?;
    field(&m, &["Query", "query"])
        .map(str::to_owned)
        .ok_or_else(|| Error::invalid("missing Query"))
}

fn with_retries<T>(gen: &dyn GeneratorClient, prompt: &str, retries: usize, parse: impl Fn(&str) -> Result<T>) -> Result<T> {
    let mut last_reply = String::new();
    let mut last_err = String::new();
    for _ in 0..=retries {
        let reply = gen.generate(prompt)?;
        match parse(&reply) {
            Ok(v) => return Ok(v),
            Err(e) => {
                last_err = e.to_string();
                last_reply = reply;
            }
        }
    }
    Err(Error::Generation {
        attempts: retries + 1,
        message: last_err,
        last_reply,
    })
}

fn pick_length(document: &str, choices: &[usize]) -> usize {
    if choices.is_empty() {
        return 5;
    }
    let h = crate::encoder::fnv1a64(document.as_bytes());
    choices[(h % choices.len() as u64) as usize]
}

/// Stage one: choose persona, question type and difficulty.
pub fn synth_configure(document: &str, personas: &[Persona], gen: &dyn GeneratorClient, opts: &SynthOptions) -> Result<SynthesisConfig> {
    if personas.is_empty() {
        return Err(Error::invalid("no persona candidates"));
    }
    if document.is_empty() {
        return Err(Error::invalid("empty passage"));
    }
    let prompt = render_config_prompt(&opts.language, document, &render_character_list(personas));
    let (character, question_type, difficulty) = with_retries(gen, &prompt, opts.retries, parse_config_reply)?;
    Ok(SynthesisConfig {
        character,
        question_type,
        difficulty,
        length_words: pick_length(document, &opts.length_choices),
        language: opts.language.clone(),
    })
}

/// Stage two: generate the query and wrap it as a synthetic retrieval pair.
pub fn synth_query(config: &SynthesisConfig, document: &str, gen: &dyn GeneratorClient, opts: &SynthOptions) -> Result<PairRecord> {
    if config.length_words == 0 {
        return Err(Error::invalid("query length must be positive"));
    }
    let prompt = render_query_prompt(config, document, &opts.language);
    let query = with_retries(gen, &prompt, opts.retries, parse_query_reply)?;
    let rec = PairRecord {
        instruction: opts.instruction.clone(),
        query,
        positive: document.to_owned(),
        negatives: Vec::new(),
        task_tag: TaskTag::Retrieval,
        language: config.language.clone(),
        source: Source::Synthetic,
    };
    rec.validate()?;
    Ok(rec)
}

/// Top-`k` personas by cosine between passage and description; ties by id.
pub fn select_personas(document: &str, library: &[Persona], params: &EncoderParams, k: usize) -> Result<Vec<Persona>> {
    if library.is_empty() {
        return Err(Error::invalid("persona library is empty"));
    }
    let doc = params.embed_document(document, None)?;
    let mut scored: Vec<(f64, &Persona)> = library
        .iter()
        .map(|p| Ok((crate::numeric::cosine(&doc, &params.embed_document(&p.description, None)?)?, p)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
    Ok(scored.into_iter().take(k).map(|(_, p)| p.clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthesisOutcome {
    pub config: SynthesisConfig,
    pub record: PairRecord,
}

/// Full pipeline over a corpus. Calls run in parallel; output order follows
/// input order.
pub fn synthesize_corpus(
    documents: &[String],
    library: &[Persona],
    params: &EncoderParams,
    gen: &dyn GeneratorClient,
    opts: &SynthOptions,
) -> Result<Vec<SynthesisOutcome>> {
    documents
        .par_iter()
        .map(|doc| {
            let personas = select_personas(doc, library, params, opts.personas_top_k)?;
            let config = synth_configure(doc, &personas, gen, opts)?;
            let record = synth_query(&config, doc, gen, opts)?;
            Ok(SynthesisOutcome { config, record })
        })
        .collect()
}
