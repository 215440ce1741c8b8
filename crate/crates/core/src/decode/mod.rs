//! Three-stage inference: understand the human's last utterance, plan the
//! semantic variables of the reply, then generate it. Every stage extends
//! one growing prefix and is driven by its own [`StagePolicy`].

mod constraints;
mod policy;
mod sampling;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use constraints::{
    apply_repetition_constraint, repeated_ngrams, response_step, value_step, value_token_legal, value_vocabulary,
};
pub use policy::{Bounds, DecodingPolicy, RepetitionConstraint, Sampling, StagePolicy};
pub use sampling::{argmax, sample_token, truncated_distribution};

use crate::corpus::SemanticAnnotation;
use crate::labels::Speaker;
use crate::linearize::{
    linearize_entries, linearize_variables, parse_variables, Entry, LinearizationScheme, LinearizeError, Special,
    TokenId, TokenType, Tokenizer, UnknownItem, VariableKey,
};
use crate::model::{LanguageModel, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("invalid decoding policy: {0}")]
    InvalidPolicy(String),
    #[error("model vocabulary has {model} entries but the tokenizer has {tokenizer}")]
    VocabularyMismatch { model: usize, tokenizer: usize },
    #[error("generation needs {reserve} positions but the model has {max}")]
    ReserveTooLarge { reserve: usize, max: usize },
    #[error("a plan override was given but planning is disabled")]
    PlanningDisabled,
    #[error("the human utterance is empty")]
    EmptyUtterance,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linearize(#[from] LinearizeError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Understanding,
    Planning,
    Response,
}

impl Stage {
    /// Rng stream of the stage, so stages never share random draws.
    fn stream(self) -> u64 {
        match self {
            Stage::Understanding => 0,
            Stage::Planning => 1,
            Stage::Response => 2,
        }
    }
}

/// Raw tokens produced (or inserted) by one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: Stage,
    pub token_ids: Vec<TokenId>,
    pub tokens: String,
    /// True when the span was inserted from a plan override.
    pub inserted: bool,
    pub parse_error: Option<String>,
    pub unknown: Vec<UnknownItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub understood: Option<SemanticAnnotation>,
    pub planned: Option<SemanticAnnotation>,
    /// The model's own plan; differs from `planned` only under an override.
    pub proposed_plan: Option<SemanticAnnotation>,
    pub plan_overridden: bool,
    pub response: String,
    pub response_tokens: usize,
    pub stages: Vec<StageTrace>,
    pub seed: u64,
}

impl GenerationTrace {
    pub fn stage(&self, stage: Stage) -> Option<&StageTrace> {
        self.stages.iter().find(|s| s.stage == stage)
    }
}

/// One past utterance of a live session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub speaker: Speaker,
    pub text: String,
    pub annotation: Option<SemanticAnnotation>,
}

/// Typed token prefix the stages append to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Prefix {
    pub ids: Vec<TokenId>,
    pub types: Vec<TokenType>,
}

impl Prefix {
    pub fn push(&mut self, id: TokenId, ty: TokenType) {
        self.ids.push(id);
        self.types.push(ty);
    }
}

/// State between the understanding/planning stages and the response.
pub struct PendingTurn<S> {
    pub state: S,
    /// Prefix up to the end of the understanding span.
    pub prefix: Prefix,
    pub understood: Option<SemanticAnnotation>,
    pub proposed_plan: Option<SemanticAnnotation>,
    pub plan_span: Vec<TokenId>,
    pub stages: Vec<StageTrace>,
}

/// Decodes the value span of `key`, whose key token already ends the
/// prefix. Returns the value tokens followed by `<eokv>`; all of them are
/// appended to the prefix with type `ty`. `vocabulary` marks the tokens
/// admissible as values (see [`value_vocabulary`]).
#[allow(clippy::too_many_arguments)]
pub fn decode_value_span<M: LanguageModel>(
    model: &M,
    state: &mut M::State,
    prefix: &mut Prefix,
    key: VariableKey,
    vocabulary: &[bool],
    stage: &StagePolicy,
    ty: TokenType,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TokenId>, ModelError> {
    let bounds = stage.bounds(key);
    let rc = stage.repetition_constraint;
    let repetition = (key == VariableKey::Topical && rc.enabled).then_some(rc.n);
    let mut emitted = Vec::new();
    loop {
        let t = if emitted.len() >= bounds.max {
            Special::Eokv.id()
        } else {
            let raw = model.next_token_distribution(state, &prefix.ids, &prefix.types)?;
            sample_token(&value_step(&raw, &emitted, bounds, vocabulary, repetition), stage, rng)
        };
        prefix.push(t, ty);
        emitted.push(t);
        if t == Special::Eokv.id() {
            return Ok(emitted);
        }
    }
}

/// Samples response tokens after the `<machine>` prompt until `[SEP]`.
/// Returns the tokens without `[SEP]`.
pub fn generate_response_tokens<M: LanguageModel>(
    model: &M,
    state: &mut M::State,
    prefix: &mut Prefix,
    stage: &StagePolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TokenId>, ModelError> {
    let bounds = stage.response;
    let mut out = Vec::new();
    loop {
        let t = if out.len() >= bounds.max {
            Special::Sep.id()
        } else {
            let raw = model.next_token_distribution(state, &prefix.ids, &prefix.types)?;
            sample_token(&response_step(&raw, out.len(), bounds), stage, rng)
        };
        prefix.push(t, TokenType::MachineUtterance);
        if t == Special::Sep.id() {
            return Ok(out);
        }
        out.push(t);
    }
}

fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage.stream());
    rng
}

/// A model, its vocabulary and training scheme, and a decoding policy.
pub struct Decoder<'a, M> {
    model: &'a M,
    tokenizer: &'a Tokenizer,
    scheme: LinearizationScheme,
    policy: &'a DecodingPolicy,
    vocabularies: [Vec<bool>; 3],
}

impl<'a, M: LanguageModel> Decoder<'a, M> {
    /// The effective scheme keeps a span only when the model was trained
    /// with it and the policy uses it.
    pub fn new(
        model: &'a M,
        tokenizer: &'a Tokenizer,
        scheme: &LinearizationScheme,
        policy: &'a DecodingPolicy,
    ) -> Result<Self, DecodeError> {
        policy.validate()?;
        if model.vocab_size() != tokenizer.vocab_size() {
            return Err(DecodeError::VocabularyMismatch { model: model.vocab_size(), tokenizer: tokenizer.vocab_size() });
        }
        let scheme = LinearizationScheme {
            include_understanding: scheme.include_understanding && policy.use_understanding,
            include_planning: scheme.include_planning && policy.use_planning,
            ..scheme.clone()
        };
        let vocabularies = VariableKey::ALL.map(|k| value_vocabulary(tokenizer, k));
        let d = Decoder { model, tokenizer, scheme, policy, vocabularies };
        let reserve = d.reserve();
        if reserve + 1 >= model.max_positions() {
            return Err(DecodeError::ReserveTooLarge { reserve, max: model.max_positions() });
        }
        Ok(d)
    }

    pub fn scheme(&self) -> &LinearizationScheme {
        &self.scheme
    }

    pub fn policy(&self) -> &DecodingPolicy {
        self.policy
    }

    fn reserve(&self) -> usize {
        let mut p = self.policy.clone();
        p.use_understanding = self.scheme.include_understanding;
        p.use_planning = self.scheme.include_planning;
        p.generation_reserve()
    }

    fn variables(
        &self,
        state: &mut M::State,
        prefix: &mut Prefix,
        stage: Stage,
        policy: &StagePolicy,
        speaker: Speaker,
        seed: u64,
    ) -> Result<(StageTrace, SemanticAnnotation), DecodeError> {
        let mut rng = stage_rng(seed, stage);
        let ty = TokenType::semantics(speaker);
        let mut span = Vec::new();
        for &key in &self.scheme.variable_order {
            prefix.push(key.special().id(), ty);
            span.push(key.special().id());
            let vocabulary = &self.vocabularies[key as usize];
            span.extend(decode_value_span(self.model, state, prefix, key, vocabulary, policy, ty, &mut rng)?);
        }
        let (annotation, parse_error, unknown) = match parse_variables(&span, self.tokenizer) {
            Ok(p) => (p.annotation, None, p.unknown),
            Err(e) => (SemanticAnnotation::default(), Some(e.to_string()), Vec::new()),
        };
        let trace = StageTrace {
            stage,
            tokens: self.tokenizer.render(&span),
            token_ids: span,
            inserted: false,
            parse_error,
            unknown,
        };
        Ok((trace, annotation))
    }

    fn start(&self, context: &str, history: &[HistoryEntry], human_text: &str) -> Result<(M::State, Prefix), DecodeError> {
        if human_text.trim().is_empty() {
            return Err(DecodeError::EmptyUtterance);
        }
        let mut entries: Vec<Entry<'_>> = history
            .iter()
            .enumerate()
            .map(|(i, h)| Entry { speaker: h.speaker, text: &h.text, annotation: h.annotation.as_ref(), utterance: i })
            .collect();
        entries.push(Entry { speaker: Speaker::Human, text: human_text, annotation: None, utterance: history.len() });
        let limit = self.model.max_positions() - self.reserve();
        let ex = linearize_entries(context, &entries, &self.scheme, self.tokenizer, limit)?;
        Ok((self.model.new_state(), Prefix { ids: ex.token_ids, types: ex.token_type_ids }))
    }

    /// Runs only the understanding stage. `None` when the scheme has no
    /// understanding spans.
    pub fn understand(
        &self,
        context: &str,
        history: &[HistoryEntry],
        human_text: &str,
        seed: u64,
    ) -> Result<Option<(SemanticAnnotation, StageTrace)>, DecodeError> {
        if !self.scheme.include_understanding {
            return Ok(None);
        }
        let (mut state, mut prefix) = self.start(context, history, human_text)?;
        let (trace, ann) =
            self.variables(&mut state, &mut prefix, Stage::Understanding, &self.policy.understanding, Speaker::Human, seed)?;
        Ok(Some((ann, trace)))
    }

    /// Builds the prefix for a new human utterance and runs the
    /// understanding and planning stages. Older turns are dropped so the
    /// longest possible generation still fits the model.
    pub fn understand_and_plan(
        &self,
        context: &str,
        history: &[HistoryEntry],
        human_text: &str,
        seed: u64,
    ) -> Result<PendingTurn<M::State>, DecodeError> {
        let (mut state, mut prefix) = self.start(context, history, human_text)?;
        let mut stages = Vec::new();

        let mut understood = None;
        if self.scheme.include_understanding {
            let (trace, ann) = self.variables(
                &mut state,
                &mut prefix,
                Stage::Understanding,
                &self.policy.understanding,
                Speaker::Human,
                seed,
            )?;
            stages.push(trace);
            understood = Some(ann);
        }
        let (mut proposed_plan, mut plan_span) = (None, Vec::new());
        if self.scheme.include_planning {
            let mut scratch = prefix.clone();
            let (trace, ann) = self.variables(
                &mut state,
                &mut scratch,
                Stage::Planning,
                &self.policy.planning,
                Speaker::Machine,
                seed,
            )?;
            plan_span = trace.token_ids.clone();
            stages.push(trace);
            proposed_plan = Some(ann);
        }
        Ok(PendingTurn { state, prefix, understood, proposed_plan, plan_span, stages })
    }

    /// Inserts the plan (the model's own or `plan_override`) and samples
    /// the response. May be called repeatedly on the same pending turn.
    pub fn complete_turn(
        &self,
        pending: &mut PendingTurn<M::State>,
        plan_override: Option<&SemanticAnnotation>,
        seed: u64,
    ) -> Result<GenerationTrace, DecodeError> {
        let mut prefix = pending.prefix.clone();
        let mut stages: Vec<StageTrace> = pending.stages.clone();
        let planned = match (self.scheme.include_planning, plan_override) {
            (false, Some(_)) => return Err(DecodeError::PlanningDisabled),
            (false, None) => None,
            (true, None) => {
                for &t in &pending.plan_span {
                    prefix.push(t, TokenType::MachineSemantics);
                }
                pending.proposed_plan.clone()
            }
            (true, Some(ann)) => {
                let span = linearize_variables(ann, &self.scheme, Speaker::Machine, self.tokenizer);
                for (&t, &ty) in span.token_ids.iter().zip(&span.token_type_ids) {
                    prefix.push(t, ty);
                }
                stages.retain(|s| s.stage != Stage::Planning);
                stages.push(StageTrace {
                    stage: Stage::Planning,
                    tokens: self.tokenizer.render(&span.token_ids),
                    token_ids: span.token_ids,
                    inserted: true,
                    parse_error: None,
                    unknown: Vec::new(),
                });
                Some(ann.clone())
            }
        };
        prefix.push(Special::Machine.id(), TokenType::MachineUtterance);
        let mut rng = stage_rng(seed, Stage::Response);
        let tokens =
            generate_response_tokens(self.model, &mut pending.state, &mut prefix, &self.policy.response, &mut rng)?;
        let mut span = vec![Special::Machine.id()];
        span.extend(&tokens);
        span.push(Special::Sep.id());
        stages.push(StageTrace {
            stage: Stage::Response,
            tokens: self.tokenizer.render(&span),
            token_ids: span,
            inserted: false,
            parse_error: None,
            unknown: Vec::new(),
        });
        Ok(GenerationTrace {
            understood: pending.understood.clone(),
            planned,
            proposed_plan: pending.proposed_plan.clone(),
            plan_overridden: plan_override.is_some(),
            response: self.tokenizer.detokenize(&tokens),
            response_tokens: tokens.len(),
            stages,
            seed,
        })
    }

    /// Understands, plans and responds to `human_text` in one call.
    pub fn respond(
        &self,
        context: &str,
        history: &[HistoryEntry],
        human_text: &str,
        plan_override: Option<&SemanticAnnotation>,
        seed: u64,
    ) -> Result<GenerationTrace, DecodeError> {
        let mut pending = self.understand_and_plan(context, history, human_text, seed)?;
        self.complete_turn(&mut pending, plan_override, seed)
    }
}

#[cfg(test)]
mod tests;
