use serde::{Deserialize, Serialize};

use crate::task_builder::IntruderTask;

/// One evaluator decision on one intruder task.
///
/// Human, LLM, oracle and random evaluators all produce this shape, so
/// downstream scoring never needs to know who answered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub task_id: String,
    pub evaluator_id: String,
    /// Chosen position 1..=5, or `None` when no valid answer was obtained.
    pub choice: Option<u8>,
    /// `None` exactly when `choice` is `None`.
    pub correct: Option<bool>,
    #[serde(default)]
    pub raw_response: String,
    #[serde(default)]
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
}

impl Verdict {
    pub fn new(
        task: &IntruderTask,
        evaluator_id: impl Into<String>,
        choice: Option<u8>,
        raw_response: impl Into<String>,
        attempts: u32,
    ) -> Self {
        let choice = choice.filter(|c| (1..=5).contains(c));
        Verdict {
            task_id: task.task_id.clone(),
            evaluator_id: evaluator_id.into(),
            choice,
            correct: choice.map(|c| c == task.intruder_position),
            raw_response: raw_response.into(),
            attempts,
            error: None,
            session_id: None,
        }
    }

    pub fn with_error(mut self, error: impl Into<String>) -> Self {
        self.error = Some(error.into());
        self
    }

    pub fn is_valid(&self) -> bool {
        self.choice.is_some()
    }

    /// Invalid verdicts count as incorrect.
    pub fn is_correct(&self) -> bool {
        self.correct == Some(true)
    }
}
