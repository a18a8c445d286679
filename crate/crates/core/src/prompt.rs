//! Prompt construction for the teacher and student models.
//!
//! Templates are plain text with `{placeholder}` fields. The first line of a
//! prompt template file is the instruction, everything after the first
//! newline is the input template. Rendering is a single pass and never trims,
//! so substituted values are never re-expanded and whitespace is exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cache::text_hash;
use crate::corpus::{SlotQuery, SlotSchema};
use crate::error::{Error, Result};

pub const DEFAULT_TEACHER_TEMPLATE: &str = include_str!("../templates/teacher.txt");
pub const DEFAULT_STUDENT_TEMPLATE: &str = include_str!("../templates/student.txt");
pub const DEFAULT_SHORT_REASONING: &str = include_str!("../templates/short_reasoning.txt");
pub const DEFAULT_RESOLUTION: &str = include_str!("../templates/resolution.txt");

/// Separator between rationale and value in self-rationalization targets.
pub const RATIONALE_SEPARATOR: &str = "\n[VALUE] ";
/// The marker that answer extraction splits on.
pub const VALUE_MARKER: &str = "[VALUE] ";

/// Turns at or below this index get the canned reasoning instead of a teacher call.
pub const DEFAULT_TURN_THRESHOLD: usize = 10;

/// Substitutes `{name}` fields in one left-to-right pass. Braces that do not
/// enclose a known name are copied through unchanged.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            vars.iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (*v, close))
        });
        match hit {
            Some((value, close)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub instruction: String,
    pub input: String,
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self> {
        let (instruction, input) = text.split_once('\n').ok_or_else(|| {
            Error::Validation(
                "prompt template needs an instruction line followed by the input template".into(),
            )
        })?;
        Ok(Self {
            instruction: instruction.to_string(),
            input: input.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub teacher: PromptTemplate,
    pub student: PromptTemplate,
    pub short_reasoning: String,
    /// The multi-value resolution paragraph closing every teacher prompt.
    pub resolution: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            teacher: PromptTemplate::parse(DEFAULT_TEACHER_TEMPLATE).expect("embedded template"),
            student: PromptTemplate::parse(DEFAULT_STUDENT_TEMPLATE).expect("embedded template"),
            short_reasoning: DEFAULT_SHORT_REASONING.to_string(),
            resolution: DEFAULT_RESOLUTION.to_string(),
        }
    }
}

impl PromptTemplates {
    /// Loads `teacher.txt`, `student.txt`, `short_reasoning.txt` and
    /// `resolution.txt` from `dir`. Missing files keep the embedded default.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut t = Self::default();
        let read = |name: &str| -> Result<Option<String>> {
            let path = dir.join(name);
            if !path.is_file() {
                return Ok(None);
            }
            std::fs::read_to_string(&path)
                .map(Some)
                .map_err(|e| Error::io(&path, e))
        };
        if let Some(text) = read("teacher.txt")? {
            t.teacher = PromptTemplate::parse(&text)?;
        }
        if let Some(text) = read("student.txt")? {
            t.student = PromptTemplate::parse(&text)?;
        }
        if let Some(text) = read("short_reasoning.txt")? {
            t.short_reasoning = text;
        }
        if let Some(text) = read("resolution.txt")? {
            t.resolution = text;
        }
        Ok(t)
    }

    /// Renders the teacher prompt for context `X`, slot `S` and value `V`.
    /// With `with_resolution = false` the multi-value resolution paragraph is
    /// left out.
    pub fn teacher_text(
        &self,
        context: &str,
        schema: &SlotSchema,
        value: &str,
        with_resolution: bool,
    ) -> (String, String) {
        let qualified = schema.qualified();
        let key = schema.key();
        let resolution = if with_resolution { self.resolution.as_str() } else { "" };
        let vars = [
            ("context", context),
            ("slot", qualified.as_str()),
            ("slot_key", key.as_str()),
            ("value", value),
            ("service", schema.service_name.as_str()),
            ("service_description", schema.service_description.as_str()),
            ("slot_name", schema.slot_name.as_str()),
            ("slot_description", schema.slot_description.as_str()),
            ("resolution", resolution),
        ];
        (
            render(&self.teacher.instruction, &vars),
            render(&self.teacher.input, &vars),
        )
    }

    pub fn build_teacher_prompt(
        &self,
        context: &str,
        schema: &SlotSchema,
        value: &str,
        meta: PromptMeta,
    ) -> TeacherPrompt {
        let (instruction, input) = self.teacher_text(context, schema, value, true);
        TeacherPrompt {
            instruction,
            input,
            meta,
        }
    }

    /// The dialogue-centric teacher prompt for a query.
    pub fn teacher_prompt_for(&self, query: &SlotQuery) -> TeacherPrompt {
        self.build_teacher_prompt(
            &query.context,
            &query.schema,
            &query.gold,
            PromptMeta {
                dialogue_id: query.dialogue_id.clone(),
                turn: query.turn,
                qualified_slot: query.schema.qualified(),
                gold_value: query.gold.clone(),
            },
        )
    }

    /// Student fine-tuning prompt. Without a rationale the target is the bare
    /// value; with one it is `R + "\n[VALUE] " + V`.
    pub fn build_student_prompt(
        &self,
        context: &str,
        schema: &SlotSchema,
        rationale: Option<&str>,
        value: &str,
    ) -> StudentPrompt {
        let qualified = schema.qualified();
        let key = schema.key();
        let vars = [
            ("context", context),
            ("slot", qualified.as_str()),
            ("slot_key", key.as_str()),
            ("service", schema.service_name.as_str()),
            ("service_description", schema.service_description.as_str()),
            ("slot_name", schema.slot_name.as_str()),
            ("slot_description", schema.slot_description.as_str()),
        ];
        StudentPrompt {
            instruction: render(&self.student.instruction, &vars),
            input: render(&self.student.input, &vars),
            expected_output: match rationale {
                Some(r) => compose_target(r, value),
                None => value.to_string(),
            },
        }
    }

    /// The canned reasoning used for short dialogues. Independent of its
    /// arguments.
    pub fn short_dialogue_reasoning(&self, _schema: &SlotSchema, _value: &str) -> String {
        self.short_reasoning.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptMeta {
    pub dialogue_id: String,
    pub turn: usize,
    pub qualified_slot: String,
    pub gold_value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherPrompt {
    pub instruction: String,
    pub input: String,
    pub meta: PromptMeta,
}

impl TeacherPrompt {
    /// Hash of the full prompt text (instruction and input).
    pub fn prompt_hash(&self) -> String {
        text_hash(&format!("{}\n{}", self.instruction, self.input))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentPrompt {
    pub instruction: String,
    pub input: String,
    pub expected_output: String,
}

pub fn compose_target(rationale: &str, value: &str) -> String {
    format!("{rationale}{RATIONALE_SEPARATOR}{value}")
}

/// Splits a self-rationalization target on the last `[VALUE] ` marker.
/// Returns `None` when the marker is absent.
pub fn split_target(output: &str) -> Option<(&str, &str)> {
    let at = output.rfind(VALUE_MARKER)?;
    let rationale = &output[..at];
    let rationale = rationale.strip_suffix('\n').unwrap_or(rationale);
    Some((rationale, &output[at + VALUE_MARKER.len()..]))
}

/// Student target layout.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Target is the bare value.
    Vanilla,
    /// Target is the rationale, the separator, then the value.
    #[default]
    Rationalized,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Vanilla => "vanilla",
            Mode::Rationalized => "rationalized",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Mode::Vanilla),
            "rationalized" => Ok(Mode::Rationalized),
            other => Err(Error::Validation(format!(
                "unknown mode {other:?} (expected vanilla or rationalized)"
            ))),
        }
    }
}

/// True when a turn is long enough to need a teacher-generated reasoning.
pub fn needs_teacher(turn: usize, threshold: usize) -> bool {
    turn > threshold
}
