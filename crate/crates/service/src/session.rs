use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use dialplan_core::corpus::SemanticAnnotation;
use dialplan_core::decode::{DecodeError, Decoder, DecodingPolicy, GenerationTrace, HistoryEntry, PendingTurn, StageTrace};
use dialplan_core::labels::Speaker;
use dialplan_core::linearize::{LinearizationScheme, Tokenizer};
use dialplan_core::model::{LanguageModel, ModelCheckpoint, ModelError};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("no session with id {0}")]
    NotFound(String),
    #[error("a human message is already waiting for a response")]
    OutOfTurn,
    #[error("no human message is waiting for a response")]
    NoPendingMessage,
    #[error("the last turn cannot be regenerated")]
    NothingToRegenerate,
    #[error("{0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error("a previous request on this session panicked")]
    Poisoned,
}

/// A read-only model with its vocabulary, training scheme and the policy
/// new sessions start from.
pub struct Engine<M> {
    pub model: M,
    pub tokenizer: Tokenizer,
    pub scheme: LinearizationScheme,
    pub policy: DecodingPolicy,
}

impl Engine<ModelCheckpoint> {
    pub fn from_checkpoint(path: impl AsRef<Path>, policy: DecodingPolicy) -> Result<Self, ServiceError> {
        let ckpt = ModelCheckpoint::load(path)?;
        let (tokenizer, scheme) = (ckpt.tokenizer.clone(), ckpt.scheme.clone());
        Engine::new(ckpt, tokenizer, scheme, policy)
    }
}

impl<M: LanguageModel> Engine<M> {
    pub fn new(model: M, tokenizer: Tokenizer, scheme: LinearizationScheme, policy: DecodingPolicy) -> Result<Self, ServiceError> {
        let engine = Engine { model, tokenizer, scheme, policy };
        engine.decoder(&engine.policy)?;
        Ok(engine)
    }

    fn decoder<'a>(&'a self, policy: &'a DecodingPolicy) -> Result<Decoder<'a, M>, DecodeError> {
        Decoder::new(&self.model, &self.tokenizer, &self.scheme, policy)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CreateSession {
    pub policy: Option<DecodingPolicy>,
    pub seed: Option<u64>,
    /// Post or topic the conversation is about.
    pub context: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateRequest {
    pub plan_override: Option<SemanticAnnotation>,
    pub seed: Option<u64>,
    /// Replaces the last machine turn instead of answering a new message.
    pub regenerate: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TurnRequest {
    pub text: String,
    pub plan_override: Option<SemanticAnnotation>,
    pub seed: Option<u64>,
}

/// Understanding and planning of a human message that awaits generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingView {
    pub seed: u64,
    pub understood: Option<SemanticAnnotation>,
    pub proposed_plan: Option<SemanticAnnotation>,
    pub stages: Vec<StageTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub context: String,
    pub policy: DecodingPolicy,
    pub seed: u64,
    pub history: Vec<HistoryEntry>,
    /// One per machine turn, in order.
    pub traces: Vec<GenerationTrace>,
    pub pending: Option<PendingView>,
}

struct Pending<S> {
    turn: PendingTurn<S>,
    seed: u64,
}

impl<S> Pending<S> {
    fn view(&self) -> PendingView {
        PendingView {
            seed: self.seed,
            understood: self.turn.understood.clone(),
            proposed_plan: self.turn.proposed_plan.clone(),
            stages: self.turn.stages.clone(),
        }
    }
}

struct Session<S> {
    view: SessionView,
    pending: Option<Pending<S>>,
    /// The turn behind the last machine response, kept for regeneration.
    answered: Option<Pending<S>>,
}

impl<S> Session<S> {
    fn snapshot(&self) -> SessionView {
        SessionView { pending: self.pending.as_ref().map(Pending::view), ..self.view.clone() }
    }

    fn turn_seed(&self) -> u64 {
        let machine_turns = self.view.history.iter().filter(|h| h.speaker == Speaker::Machine).count();
        self.view.seed.wrapping_add(machine_turns as u64)
    }
}

/// In-memory sessions over one engine. Each session is locked for the
/// whole of an operation; different sessions proceed independently.
pub struct ChatService<M: LanguageModel> {
    engine: Engine<M>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session<M::State>>>>>,
    next_id: AtomicU64,
}

impl<M: LanguageModel> ChatService<M> {
    pub fn new(engine: Engine<M>) -> Self {
        ChatService { engine, sessions: RwLock::new(HashMap::new()), next_id: AtomicU64::new(1) }
    }

    pub fn engine(&self) -> &Engine<M> {
        &self.engine
    }

    pub fn default_policy(&self) -> &DecodingPolicy {
        &self.engine.policy
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session<M::State>>>, ServiceError> {
        let map = self.sessions.read().map_err(|_| ServiceError::Poisoned)?;
        map.get(id).cloned().ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    fn with_session<T>(
        &self,
        id: &str,
        f: impl FnOnce(&mut Session<M::State>) -> Result<T, ServiceError>,
    ) -> Result<T, ServiceError> {
        let session = self.session(id)?;
        let mut guard = session.lock().map_err(|_| ServiceError::Poisoned)?;
        f(&mut guard)
    }

    fn insert(&self, view: SessionView, pending: Option<Pending<M::State>>) -> Result<(), ServiceError> {
        let mut map = self.sessions.write().map_err(|_| ServiceError::Poisoned)?;
        map.insert(view.session_id.clone(), Arc::new(Mutex::new(Session { view, pending, answered: None })));
        Ok(())
    }

    pub fn create_session(&self, req: CreateSession) -> Result<SessionView, ServiceError> {
        let policy = req.policy.unwrap_or_else(|| self.engine.policy.clone());
        self.engine.decoder(&policy)?;
        let n = self.next_id.fetch_add(1, Ordering::Relaxed);
        let view = SessionView {
            session_id: format!("s{n:06}"),
            context: req.context,
            policy,
            seed: req.seed.unwrap_or(0),
            history: Vec::new(),
            traces: Vec::new(),
            pending: None,
        };
        self.insert(view.clone(), None)?;
        Ok(view)
    }

    pub fn get_session(&self, id: &str) -> Result<SessionView, ServiceError> {
        self.with_session(id, |s| Ok(s.snapshot()))
    }

    pub fn delete_session(&self, id: &str) -> Result<(), ServiceError> {
        let mut map = self.sessions.write().map_err(|_| ServiceError::Poisoned)?;
        map.remove(id).map(|_| ()).ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    pub fn session_ids(&self) -> Result<Vec<String>, ServiceError> {
        let map = self.sessions.read().map_err(|_| ServiceError::Poisoned)?;
        let mut ids: Vec<String> = map.keys().cloned().collect();
        ids.sort();
        Ok(ids)
    }

    /// Appends a human message and returns its understanding and the
    /// proposed plan without generating the response.
    pub fn post_message(&self, id: &str, text: &str) -> Result<PendingView, ServiceError> {
        self.with_session(id, |s| self.post_locked(s, text))
    }

    fn post_locked(&self, s: &mut Session<M::State>, text: &str) -> Result<PendingView, ServiceError> {
        if s.pending.is_some() {
            return Err(ServiceError::OutOfTurn);
        }
        let seed = s.turn_seed();
        let decoder = self.engine.decoder(&s.view.policy)?;
        let turn = decoder.understand_and_plan(&s.view.context, &s.view.history, text, seed)?;
        s.view.history.push(HistoryEntry { speaker: Speaker::Human, text: text.to_string(), annotation: turn.understood.clone() });
        let pending = Pending { turn, seed };
        let view = pending.view();
        s.pending = Some(pending);
        s.answered = None;
        Ok(view)
    }

    /// Answers the pending message, or with `regenerate` replaces the last
    /// machine turn. The seed defaults to the one the message was planned with.
    pub fn generate(&self, id: &str, req: &GenerateRequest) -> Result<GenerationTrace, ServiceError> {
        self.with_session(id, |s| self.generate_locked(s, req))
    }

    fn generate_locked(&self, s: &mut Session<M::State>, req: &GenerateRequest) -> Result<GenerationTrace, ServiceError> {
        let mut pending = if req.regenerate {
            if s.pending.is_some() {
                return Err(ServiceError::NothingToRegenerate);
            }
            s.answered.take().ok_or(ServiceError::NothingToRegenerate)?
        } else {
            s.pending.take().ok_or(ServiceError::NoPendingMessage)?
        };
        let seed = req.seed.unwrap_or(pending.seed);
        let decoder = self.engine.decoder(&s.view.policy)?;
        let trace = match decoder.complete_turn(&mut pending.turn, req.plan_override.as_ref(), seed) {
            Ok(t) => t,
            Err(e) => {
                if req.regenerate {
                    s.answered = Some(pending);
                } else {
                    s.pending = Some(pending);
                }
                return Err(e.into());
            }
        };
        if req.regenerate {
            s.view.history.pop();
            s.view.traces.pop();
        }
        s.view.history.push(HistoryEntry {
            speaker: Speaker::Machine,
            text: trace.response.clone(),
            annotation: trace.planned.clone(),
        });
        s.view.traces.push(trace.clone());
        s.answered = Some(pending);
        Ok(trace)
    }

    /// `post_message` followed by `generate` under one lock. A failed
    /// generation leaves the message pending, as with the two-step API.
    pub fn turn(&self, id: &str, req: &TurnRequest) -> Result<GenerationTrace, ServiceError> {
        self.with_session(id, |s| {
            self.post_locked(s, &req.text)?;
            let generate = GenerateRequest { plan_override: req.plan_override.clone(), seed: req.seed, regenerate: false };
            self.generate_locked(s, &generate)
        })
    }

    pub fn snapshot(&self) -> Result<Vec<SessionView>, ServiceError> {
        let ids = self.session_ids()?;
        ids.iter().map(|id| self.get_session(id)).collect()
    }

    /// Restores sessions from [`ChatService::snapshot`] output. A pending
    /// message is planned again; with its recorded seed the result matches.
    pub fn restore(&self, views: Vec<SessionView>) -> Result<(), ServiceError> {
        for mut view in views {
            let pending = match view.pending.take() {
                None => None,
                Some(p) => {
                    let human = view
                        .history
                        .pop()
                        .filter(|h| h.speaker == Speaker::Human)
                        .ok_or_else(|| ServiceError::Snapshot(format!("{}: pending turn without a human message", view.session_id)))?;
                    let decoder = self.engine.decoder(&view.policy)?;
                    let turn = decoder.understand_and_plan(&view.context, &view.history, &human.text, p.seed)?;
                    view.history.push(human);
                    Some(Pending { turn, seed: p.seed })
                }
            };
            if let Some(n) = view.session_id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) {
                self.next_id.fetch_max(n + 1, Ordering::Relaxed);
            }
            self.insert(view, pending)?;
        }
        Ok(())
    }

    pub fn save_snapshot(&self, path: impl AsRef<Path>) -> Result<(), ServiceError> {
        let json = serde_json::to_string_pretty(&self.snapshot()?).map_err(|e| ServiceError::Snapshot(e.to_string()))?;
        std::fs::write(path.as_ref(), json).map_err(|e| ServiceError::Snapshot(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn load_snapshot(&self, path: impl AsRef<Path>) -> Result<(), ServiceError> {
        let s = std::fs::read_to_string(path.as_ref())
            .map_err(|e| ServiceError::Snapshot(format!("{}: {e}", path.as_ref().display())))?;
        let views: Vec<SessionView> = serde_json::from_str(&s).map_err(|e| ServiceError::Snapshot(e.to_string()))?;
        self.restore(views)
    }
}
