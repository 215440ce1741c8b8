use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::*;
use crate::corpus::Phrase;
use crate::labels::{DialogueAct, Emotion};
use crate::linearize::{is_special, Special};
use crate::stub;

const EOKV: TokenId = Special::Eokv.id();
const LS: TokenId = Special::ListSep.id();
const SEP: TokenId = Special::Sep.id();

fn tokenizer() -> Tokenizer {
    Tokenizer::build(["rock music jazz guitar piano band concert i like it a lot . do you ?"])
}

fn bounds_stage(min: usize, max: usize) -> StagePolicy {
    StagePolicy { topical: Bounds::new(min, max), ..StagePolicy::greedy() }
}

fn run_span<M: LanguageModel<State = ()>>(model: &M, stage: &StagePolicy, seed: u64) -> Vec<TokenId> {
    let mut prefix = Prefix::default();
    prefix.push(Special::Topical.id(), TokenType::MachineSemantics);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocabulary = value_vocabulary(&tokenizer(), VariableKey::Topical);
    decode_value_span(model, &mut (), &mut prefix, VariableKey::Topical, &vocabulary, stage, TokenType::MachineSemantics, &mut rng)
        .unwrap()
}

fn one_hot(v: usize, t: TokenId) -> Vec<f64> {
    let mut d = vec![1e-3; v];
    d[t as usize] = 1.0;
    d
}

#[test]
fn min_length_delays_eokv() {
    let v = tokenizer().vocab_size();
    let span = run_span(&stub::fixed(one_hot(v, EOKV), 64), &bounds_stage(5, 20), 0);
    assert_eq!(span.len(), 6);
    assert_eq!(span.iter().position(|&t| t == EOKV), Some(5));

    let stage = StagePolicy { sampling: Sampling::TopkTopp, ..bounds_stage(5, 20) };
    for seed in 0..200 {
        let span = run_span(&stub::hashed(v, 64, seed, 0.6), &stage, seed);
        let eokv = span.iter().position(|&t| t == EOKV).unwrap();
        assert_eq!(eokv, span.len() - 1);
        assert!((5..=20).contains(&eokv), "{span:?}");
        // no dangling separators
        assert_ne!(span[0], LS);
        assert!(span.windows(2).all(|w| !(w[0] == LS && (w[1] == LS || w[1] == EOKV))));
    }
}

#[test]
fn eokv_first_with_zero_min_gives_empty_value() {
    let v = tokenizer().vocab_size();
    assert_eq!(run_span(&stub::fixed(one_hot(v, EOKV), 64), &bounds_stage(0, 20), 0), vec![EOKV]);
}

#[test]
fn max_length_forces_eokv() {
    let v = tokenizer().vocab_size();
    let mut d = vec![1.0; v];
    d[EOKV as usize] = 0.0;
    let span = run_span(&stub::fixed(d, 64), &bounds_stage(0, 3), 0);
    assert_eq!(span.len(), 4);
    assert_eq!(span[3], EOKV);
    assert!(span[..3].iter().all(|&t| t != EOKV));
}

#[test]
fn repetition_ban_follows_hand_trace() {
    let tk = tokenizer();
    let (rock, music) = (tk.token_id("rock").unwrap(), tk.token_id("music").unwrap());
    let v = tk.vocab_size();
    let span = [rock, music, LS, rock];
    let mut d = vec![1.0 / v as f64; v];
    assert!(apply_repetition_constraint(&span, &mut d, 2));
    assert_eq!(d[music as usize], 0.0);
    assert!(d[LS as usize] > 0.0 && d[EOKV as usize] > 0.0);
    assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    // "rock" already started a phrase, so it cannot start another
    let mut d = vec![1.0 / v as f64; v];
    apply_repetition_constraint(&[rock, music, LS], &mut d, 2);
    assert_eq!(d[rock as usize], 0.0);
    assert!(d[music as usize] > 0.0);

    let orig: Vec<f64> = (0..v).map(|i| (i + 1) as f64).collect();
    let mut d = orig.clone();
    assert!(apply_repetition_constraint(&[], &mut d, 2));
    assert_eq!(d, orig);
    let norm: Vec<f64> = orig.iter().map(|x| x / orig.iter().sum::<f64>()).collect();
    let topical = value_vocabulary(&tk, VariableKey::Topical);
    let step = value_step(&norm, &span, Bounds::new(0, 20), &topical, None);
    assert!((step[music as usize] - norm[music as usize] / (1.0 - stripped_mass(&norm, &topical))).abs() < 1e-12);
}

/// Mass that masking removes after a value token.
fn stripped_mass(d: &[f64], vocabulary: &[bool]) -> f64 {
    (0..d.len() as TokenId).filter(|&t| t != LS && t != EOKV && !vocabulary[t as usize]).map(|t| d[t as usize]).sum()
}

#[test]
fn all_content_banned_falls_back_to_separators() {
    let tk = tokenizer();
    let (rock, music) = (tk.token_id("rock").unwrap(), tk.token_id("music").unwrap());
    let v = tk.vocab_size();
    let mut d = vec![0.0; v];
    d[rock as usize] = 1.0;
    let topical = value_vocabulary(&tk, VariableKey::Topical);
    let step = value_step(&d, &[music, rock, LS, music], Bounds::new(0, 20), &topical, Some(2));
    assert_eq!(step[rock as usize], 0.0);
    assert!(step[LS as usize] > 0.0 && step[EOKV as usize] > 0.0);
}

#[test]
fn repeated_ngram_count() {
    assert_eq!(repeated_ngrams(&[30, 31, LS, 30, 31], 2), 2);
    assert_eq!(repeated_ngrams(&[30, 31, LS, 31, 30], 2), 0);
    assert_eq!(repeated_ngrams(&[30, LS, 30], 2), 1);
    assert_eq!(repeated_ngrams(&[], 2), 0);
}

#[test]
fn constraint_on_removes_repeats_that_appear_when_off() {
    let tk = tokenizer();
    let word = tk.token_id("jazz").unwrap();
    let model = stub::repeating(tk.vocab_size(), 64, word);
    let on = bounds_stage(5, 20);
    let mut off = on.clone();
    off.repetition_constraint.enabled = false;
    let mut on = on;
    on.repetition_constraint.enabled = true;
    let span = run_span(&model, &on, 0);
    assert_eq!(repeated_ngrams(&span[..span.len() - 1], 2), 0, "{}", tk.render(&span));
    let span = run_span(&model, &off, 0);
    assert!(repeated_ngrams(&span[..span.len() - 1], 2) > 0);
}

fn random_dist(rng: &mut ChaCha8Rng, v: usize) -> Vec<f64> {
    let d: Vec<f64> = (0..v).map(|_| rng.random::<f64>()).collect();
    let s: f64 = d.iter().sum();
    d.into_iter().map(|x| x / s).collect()
}

#[test]
fn top_one_is_greedy_and_ties_go_low() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let stage = StagePolicy { sampling: Sampling::TopkTopp, top_k: 1, top_p: 1.0, ..StagePolicy::greedy() };
    for _ in 0..100 {
        let d = random_dist(&mut rng, 17);
        assert_eq!(sample_token(&d, &stage, &mut rng), sample_token(&d, &StagePolicy::greedy(), &mut rng));
    }
    assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
}

#[test]
fn untruncated_sampling_matches_distribution() {
    let d = [0.05, 0.3, 0.1, 0.15, 0.2, 0.02, 0.08, 0.1];
    let stage = StagePolicy { sampling: Sampling::TopkTopp, top_k: d.len(), top_p: 1.0, temperature: 1.0, ..StagePolicy::greedy() };
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let n = 100_000;
    let mut counts = vec![0usize; d.len()];
    for _ in 0..n {
        counts[sample_token(&d, &stage, &mut rng) as usize] += 1;
    }
    let chi2: f64 = counts.iter().zip(&d).map(|(&c, &p)| (c as f64 - n as f64 * p).powi(2) / (n as f64 * p)).sum();
    let critical = ChiSquared::new((d.len() - 1) as f64).unwrap().inverse_cdf(0.999);
    assert!(chi2 < critical, "chi2 {chi2} >= {critical}");
}

#[test]
fn truncation_keeps_intersection_of_nuclei() {
    let d = [0.5, 0.2, 0.15, 0.1, 0.05];
    // nucleus for p=0.8 is {0,1,2}; k=2 cuts it to {0,1}
    let c = truncated_distribution(&d, 2, 0.8, 1.0);
    assert_eq!(c.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1]);
    assert!((c[0].1 - 0.5 / 0.7).abs() < 1e-12);
    let c = truncated_distribution(&d, 5, 0.8, 1.0);
    assert_eq!(c.len(), 3);
    // tempering sharpens: with tau = 0.5 the probabilities go as p^2
    let c = truncated_distribution(&d, 5, 1.0, 0.5);
    let z: f64 = d.iter().map(|p| p * p).sum();
    assert!((c[0].1 - 0.25 / z).abs() < 1e-12);
    // near-zero temperature concentrates on the argmax
    let stage = StagePolicy { sampling: Sampling::TopkTopp, top_k: 5, top_p: 1.0, temperature: 1e-4, ..StagePolicy::greedy() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!((0..1000).all(|_| sample_token(&d, &stage, &mut rng) == 0));
}

fn response_len(model: &impl LanguageModel<State = ()>, stage: &StagePolicy, rng: &mut ChaCha8Rng) -> usize {
    let mut prefix = Prefix::default();
    prefix.push(Special::Machine.id(), TokenType::MachineUtterance);
    generate_response_tokens(model, &mut (), &mut prefix, stage, rng).unwrap().len()
}

#[test]
fn uniform_model_response_lengths_match_geometric_law() {
    let v = tokenizer().vocab_size();
    let model = stub::uniform(v, 64);
    let stage = DecodingPolicy::default().response;
    // legal tokens are every content token plus [SEP]; with equal
    // probabilities the nucleus keeps the lowest ids, and [SEP] has the
    // lowest id of all
    let legal = (0..v as TokenId).filter(|&t| !is_special(t) && t != crate::linearize::UNK).count() + 1;
    let nucleus = (stage.top_p * legal as f64).ceil() as usize;
    let q = 1.0 / nucleus.min(stage.top_k) as f64;
    let expected_32 = (1.0 - q).powi(23);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 20_000;
    let mut at_32 = 0;
    let mut at_9 = 0;
    for _ in 0..n {
        let len = response_len(&model, &stage, &mut rng);
        assert!((9..=32).contains(&len));
        at_32 += (len == 32) as usize;
        at_9 += (len == 9) as usize;
    }
    let sd = (expected_32 * (1.0 - expected_32) / n as f64).sqrt();
    let got = at_32 as f64 / n as f64;
    assert!((got - expected_32).abs() < 4.0 * sd, "{got} vs {expected_32}");
    let sd9 = (q * (1.0 - q) / n as f64).sqrt();
    assert!((at_9 as f64 / n as f64 - q).abs() < 4.0 * sd9);
}

#[test]
fn sep_is_never_early_and_always_by_max() {
    let v = tokenizer().vocab_size();
    let stage = DecodingPolicy::default().response;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(response_len(&stub::fixed(one_hot(v, SEP), 64), &stage, &mut rng), 9);
    let mut d = vec![1.0; v];
    d[SEP as usize] = 0.0;
    assert_eq!(response_len(&stub::fixed(d, 64), &stage, &mut rng), 32);
}

/// Emits a fixed valid plan: `happiness`, `inform`, then the given
/// topical words; responses are uniform over content.
fn scripted(tk: &Tokenizer, words: &[&str]) -> stub::FnModel<impl Fn(&[TokenId], &[TokenType]) -> Vec<f64>> {
    let v = tk.vocab_size();
    let emo = tk.label_id(Emotion::Happiness);
    let da = tk.label_id(DialogueAct::Inform);
    let mut topical = Vec::new();
    for (i, w) in words.iter().enumerate() {
        if i > 0 {
            topical.push(LS);
        }
        topical.push(tk.token_id(w).unwrap());
    }
    let f = move |ids: &[TokenId], _: &[TokenType]| {
        let key = ids.iter().rposition(|&t| VariableKey::from_token(t).is_some() || t == Special::Machine.id() || t == SEP);
        let (script, done): (Vec<TokenId>, usize) = match key.map(|k| (ids[k], ids.len() - k - 1)) {
            Some((k, n)) if k == Special::Emotion.id() => (vec![emo], n),
            Some((k, n)) if k == Special::DialogAct.id() => (vec![da], n),
            Some((k, n)) if k == Special::Topical.id() => (topical.clone(), n),
            _ => return (0..v).map(|t| if t >= 22 { 1.0 } else { 0.0 }).collect(),
        };
        let next = script.get(done).copied().unwrap_or(EOKV);
        (0..v as TokenId).map(|t| if t == next { 1.0 } else { 0.0 }).collect()
    };
    stub::FnModel { vocab: v, max_positions: 256, f }
}

fn history() -> Vec<HistoryEntry> {
    vec![
        HistoryEntry { speaker: Speaker::Human, text: "do you like rock music ?".into(), annotation: None },
        HistoryEntry {
            speaker: Speaker::Machine,
            text: "i like jazz a lot .".into(),
            annotation: Some(SemanticAnnotation {
                emotions: vec![Emotion::Like],
                dialogue_acts: vec![DialogueAct::Inform],
                topical_words: vec![Phrase(vec!["jazz".into()])],
            }),
        },
    ]
}

#[test]
fn pipeline_understands_plans_and_responds() {
    let tk = tokenizer();
    let model = scripted(&tk, &["jazz", "guitar", "piano"]);
    let policy = DecodingPolicy::default();
    let dec = Decoder::new(&model, &tk, &LinearizationScheme::default(), &policy).unwrap();
    let trace = dec.respond("", &history(), "do you like band ?", None, 3).unwrap();
    let expected = SemanticAnnotation {
        emotions: vec![Emotion::Happiness],
        dialogue_acts: vec![DialogueAct::Inform],
        topical_words: ["jazz", "guitar", "piano"].iter().map(|w| Phrase(vec![w.to_string()])).collect(),
    };
    assert_eq!(trace.understood.as_ref(), Some(&expected));
    assert_eq!(trace.planned.as_ref(), Some(&expected));
    assert!(!trace.plan_overridden);
    assert!((9..=32).contains(&trace.response_tokens));
    assert_eq!(trace.stages.iter().map(|s| s.stage).collect::<Vec<_>>(), [Stage::Understanding, Stage::Planning, Stage::Response]);
    assert_eq!(trace.stage(Stage::Planning).unwrap().tokens, "<emotion> Happiness <eokv> <dialog_act> Inform <eokv> <topical> jazz <list_sep> guitar <list_sep> piano <eokv>");

    let again = dec.respond("", &history(), "do you like band ?", None, 3).unwrap();
    assert_eq!(trace, again);
    let other = dec.respond("", &history(), "do you like band ?", None, 4).unwrap();
    assert_ne!(trace.response, other.response);

    // overriding with the model's own plan changes nothing but the flag
    let same = dec.respond("", &history(), "do you like band ?", Some(&expected), 3).unwrap();
    assert!(same.plan_overridden);
    assert_eq!(same.response, trace.response);
    assert_eq!(same.planned, trace.planned);
    assert!(same.stage(Stage::Planning).unwrap().inserted);

    let custom = SemanticAnnotation { topical_words: vec![Phrase(vec!["concert".into()])], ..Default::default() };
    let overridden = dec.respond("", &history(), "do you like band ?", Some(&custom), 3).unwrap();
    assert_eq!(overridden.planned.as_ref(), Some(&custom));
    assert_eq!(overridden.proposed_plan.as_ref(), Some(&expected));
}

#[test]
fn ablations_skip_stages() {
    let tk = tokenizer();
    let model = scripted(&tk, &["jazz", "guitar", "piano"]);
    let policy = DecodingPolicy { use_planning: false, ..Default::default() };
    let dec = Decoder::new(&model, &tk, &LinearizationScheme::default(), &policy).unwrap();
    let trace = dec.respond("", &history(), "hi", None, 0).unwrap();
    assert!(trace.planned.is_none());
    assert!(trace.understood.is_some());
    assert!(trace.stage(Stage::Planning).is_none());
    assert!(matches!(
        dec.respond("", &history(), "hi", Some(&SemanticAnnotation::default()), 0),
        Err(DecodeError::PlanningDisabled)
    ));
    let scheme = LinearizationScheme { include_understanding: false, ..Default::default() };
    let default = DecodingPolicy::default();
    let dec = Decoder::new(&model, &tk, &scheme, &default).unwrap();
    assert!(dec.respond("", &history(), "hi", None, 0).unwrap().understood.is_none());
    assert!(matches!(dec.respond("", &history(), "  ", None, 0), Err(DecodeError::EmptyUtterance)));
}

#[test]
fn unparseable_span_is_kept_raw() {
    let tk = tokenizer();
    // two labels fused into one emotion item
    let (first, second) = (tk.label_id(Emotion::Happiness), tk.label_id(Emotion::Sadness));
    let v = tk.vocab_size();
    let model = stub::FnModel {
        vocab: v,
        max_positions: 256,
        f: move |ids: &[TokenId], _: &[TokenType]| {
            let last = *ids.last().unwrap();
            let next = match last {
                l if l == Special::Emotion.id() => first,
                l if l == first => second,
                _ => EOKV,
            };
            let mut d = vec![1e-6; v];
            d[next as usize] = 1.0;
            d
        },
    };
    let policy = DecodingPolicy::default();
    let dec = Decoder::new(&model, &tk, &LinearizationScheme::default(), &policy).unwrap();
    let trace = dec.respond("", &[], "hi", None, 0).unwrap();
    let u = trace.stage(Stage::Understanding).unwrap();
    assert_eq!(u.unknown.len(), 1);
    assert!(u.tokens.starts_with("<emotion> Happiness Sadness <eokv>"));
    assert_eq!(trace.understood.unwrap().emotions, vec![]);
}

/// One constrained pass over the whole turn that switches stage on
/// `<eokv>` after the last key and stops at `[SEP]`.
fn monolithic<M: LanguageModel<State = ()>>(
    model: &M,
    tk: &Tokenizer,
    policy: &DecodingPolicy,
    start: Prefix,
    seed: u64,
) -> Vec<TokenId> {
    let keys = LinearizationScheme::default().variable_order;
    let stages = [
        (Stage::Understanding, &policy.understanding, TokenType::HumanSemantics),
        (Stage::Planning, &policy.planning, TokenType::MachineSemantics),
    ];
    let mut prefix = start;
    let base = prefix.ids.len();
    let rng_for = |s: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(s);
        r
    };
    for (i, (_, sp, ty)) in stages.iter().enumerate() {
        let mut rng = rng_for(i as u64);
        for &key in &keys {
            prefix.push(key.special().id(), *ty);
            let mut values: Vec<TokenId> = Vec::new();
            let b = sp.bounds(key);
            let rep = (key == VariableKey::Topical && sp.repetition_constraint.enabled).then_some(sp.repetition_constraint.n);
            loop {
                let d = model.next_token_distribution(&mut (), &prefix.ids, &prefix.types).unwrap();
                let t = if values.len() >= b.max { EOKV } else { sample_token(&value_step(&d, &values, b, &value_vocabulary(tk, key), rep), sp, &mut rng) };
                prefix.push(t, *ty);
                if t == EOKV {
                    break;
                }
                values.push(t);
            }
        }
    }
    prefix.push(Special::Machine.id(), TokenType::MachineUtterance);
    let mut rng = rng_for(2);
    let mut n = 0;
    loop {
        let d = model.next_token_distribution(&mut (), &prefix.ids, &prefix.types).unwrap();
        let t = sample_token(&response_step(&d, n, policy.response.response), &policy.response, &mut rng);
        prefix.push(t, TokenType::MachineUtterance);
        if t == SEP {
            break;
        }
        n += 1;
    }
    prefix.ids[base..].to_vec()
}

#[test]
fn staged_decoding_equals_one_pass() {
    let tk = tokenizer();
    let model = stub::hashed(tk.vocab_size(), 256, 9, 0.3);
    let mut policy = DecodingPolicy::default();
    policy.planning.sampling = Sampling::TopkTopp;
    policy.understanding.sampling = Sampling::TopkTopp;
    let dec = Decoder::new(&model, &tk, &LinearizationScheme::default(), &policy).unwrap();
    for seed in 0..20 {
        let trace = dec.respond("talking about bands", &history(), "do you like rock ?", None, seed).unwrap();
        let staged: Vec<TokenId> = trace.stages.iter().flat_map(|s| s.token_ids.iter().copied()).collect();
        let hist = history();
        let entries: Vec<Entry<'_>> = hist
            .iter()
            .enumerate()
            .map(|(i, h)| Entry { speaker: h.speaker, text: &h.text, annotation: h.annotation.as_ref(), utterance: i })
            .chain([Entry { speaker: Speaker::Human, text: "do you like rock ?", annotation: None, utterance: 2 }])
            .collect();
        let ex = linearize_entries("talking about bands", &entries, &LinearizationScheme::default(), &tk, 1000).unwrap();
        let start = Prefix { ids: ex.token_ids, types: ex.token_type_ids };
        assert_eq!(staged, monolithic(&model, &tk, &policy, start, seed), "seed {seed}");
    }
}

#[test]
fn long_histories_drop_old_turns() {
    let tk = tokenizer();
    let model = stub::uniform(tk.vocab_size(), 160);
    let policy = DecodingPolicy::default();
    let dec = Decoder::new(&model, &tk, &LinearizationScheme::default(), &policy).unwrap();
    let h: Vec<HistoryEntry> = history().into_iter().cycle().take(40).collect();
    let trace = dec.respond("", &h, "do you like rock music ?", None, 1).unwrap();
    assert!((9..=32).contains(&trace.response_tokens));
    let small = stub::uniform(tk.vocab_size(), 100);
    assert!(matches!(
        Decoder::new(&small, &tk, &LinearizationScheme::default(), &policy),
        Err(DecodeError::ReserveTooLarge { .. })
    ));
}

#[test]
fn policy_defaults_and_json() {
    let p = DecodingPolicy::default();
    assert_eq!(p.planning.topical, Bounds::new(5, 20));
    assert_eq!(p.understanding.topical, Bounds::new(0, 20));
    assert_eq!(p.understanding.emotion, Bounds::new(0, 10));
    assert_eq!(p.response.response, Bounds::new(9, 32));
    assert_eq!((p.response.top_k, p.response.top_p, p.response.temperature), (50, 0.9, 0.7));
    assert!(p.planning.repetition_constraint.enabled);
    assert_eq!(p.generation_reserve(), 126);
    assert_eq!(DecodingPolicy::from_json(&p.to_json()).unwrap(), p);
    let partial = DecodingPolicy::from_json(r#"{"use_planning": false}"#).unwrap();
    assert!(!partial.use_planning);
    assert_eq!(partial.response, p.response);

    let mut bad = p.clone();
    bad.response.top_p = 0.0;
    assert!(bad.validate().is_err());
    let mut bad = p.clone();
    bad.planning.topical = Bounds::new(6, 5);
    assert!(bad.validate().is_err());
    let mut bad = p;
    bad.response.temperature = 0.0;
    assert!(bad.validate().is_err());
    assert!(DecodingPolicy::from_json("{").is_err());
}
