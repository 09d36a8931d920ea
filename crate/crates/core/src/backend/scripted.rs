use std::collections::VecDeque;
use std::fmt;
use std::sync::Mutex;

use super::{Backend, BackendError, ChatRequest, Completion};

type Responder = Box<dyn Fn(&ChatRequest) -> Option<String> + Send + Sync>;

/// One entry of a script. Rules are tried in order on every call.
pub enum Rule {
    /// Pops the next text; skipped once empty.
    Queue(VecDeque<String>),
    /// Answers when the function returns `Some`.
    Respond(Responder),
}

impl Rule {
    pub fn queue<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Rule::Queue(texts.into_iter().map(Into::into).collect())
    }

    pub fn respond<F>(f: F) -> Self
    where
        F: Fn(&ChatRequest) -> Option<String> + Send + Sync + 'static,
    {
        Rule::Respond(Box::new(f))
    }
}

impl fmt::Debug for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::Queue(q) => f.debug_tuple("Queue").field(q).finish(),
            Rule::Respond(_) => f.write_str("Respond(..)"),
        }
    }
}

/// Deterministic backend for tests and desk-scale simulation.
///
/// Calls are serialized so queue order follows call order.
#[derive(Debug)]
pub struct ScriptedBackend {
    rules: Mutex<Vec<Rule>>,
    max_in_flight: usize,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<Rule>) -> Self {
        Self {
            rules: Mutex::new(rules),
            max_in_flight: 1,
        }
    }

    pub fn queue<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(vec![Rule::queue(texts)])
    }

    pub fn respond<F>(f: F) -> Self
    where
        F: Fn(&ChatRequest) -> Option<String> + Send + Sync + 'static,
    {
        Self::new(vec![Rule::respond(f)])
    }

    /// Lets callers fan out. Only meaningful for scripts made of `Respond`
    /// rules, whose answers do not depend on call order.
    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, req: &ChatRequest) -> Result<Completion, BackendError> {
        let mut rules = self.rules.lock().expect("scripted backend poisoned");
        for rule in rules.iter_mut() {
            let answer = match rule {
                Rule::Queue(q) => q.pop_front(),
                Rule::Respond(f) => f(req),
            };
            if let Some(text) = answer {
                return Ok(Completion::stop(text));
            }
        }
        Err(BackendError::ScriptExhausted)
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }
}
