//! Stage 2: task-adaptive graph construction. Per example, p candidate
//! subgraphs are sampled at temperature T from the forced extraction
//! delimiter, the answer loss is computed with and without each graph
//! (mixing the two token log-likelihoods through the mixing network), the
//! centered loss improvements become rewards, and the total loss combines
//! the base answer loss, the graph answer loss, and the REINFORCE term.
//! Rewards are constants: no gradient flows through them.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Adam, Tape, Var};
use crate::intent::{Instruction, TemplateRegistry};
use crate::kg::{parse_graph, serialize_graph, KnowledgeGraph, ParseMode};
use crate::lm::vocab::{END_EXTRACTION, START_EXTRACTION};
use crate::lm::{checkpoint, LanguageModel, Reduction};
use crate::mixing::{mix_on_tape, MixNet};

use super::layout::{answer_segment, build_x_ids, wrap_graph_tokens};
use super::{
    compute_rewards, compute_rewards_with_baseline, total_loss, BaselineMode, GraphLossMode,
    LossBreakdown, TrainError, TrainingConfig, TrainingExample,
};

/// One sampled (or injected) candidate subgraph.
#[derive(Debug, Clone)]
pub struct SubgraphCandidate {
    pub index: usize,
    /// Token sequence beginning with START_EXTRACTION; ends with
    /// END_EXTRACTION unless sampling hit the token cap.
    pub tokens: Vec<u32>,
    /// Recovery-mode parse of the text between the delimiters.
    pub graph: KnowledgeGraph,
    pub parse_skips: usize,
    /// Closed with END_EXTRACTION and strict-parses.
    pub well_formed: bool,
    /// log pi(candidate | x) under the configured reduction.
    pub logprob: f32,
}

/// Where Stage-2 candidates come from: model sampling (the training
/// procedure) or fixed per-example candidate sets (controlled testbeds
/// that need a known helpful candidate).
pub enum CandidateSource<'a> {
    Sampled,
    Injected(&'a BTreeMap<String, InjectedCandidates>),
}

#[derive(Debug, Clone)]
pub struct InjectedCandidates {
    pub graphs: Vec<KnowledgeGraph>,
    /// Index of the candidate known to carry the answer-bearing fact.
    pub helpful: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct RlReport {
    pub step_breakdowns: Vec<LossBreakdown>,
    pub epoch_mean_total: Vec<f32>,
    /// Mean log pi of the helpful candidate over the dataset: entry 0 is
    /// the pre-training value, then one entry per epoch. Populated only
    /// for injected candidates that designate a helpful index.
    pub helpful_logprob_by_epoch: Vec<f32>,
    pub skipped_unparseable: usize,
    pub truncation_events: usize,
}

fn derive_seed(base: u64, epoch: u64, example: u64) -> u64 {
    // splitmix64 over the packed inputs
    let mut z = base
        .wrapping_add(epoch.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(example.wrapping_mul(0xBF58476D1CE4E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn candidate_from_tokens(model: &LanguageModel, index: usize, tokens: Vec<u32>) -> SubgraphCandidate {
    let closed = tokens.last() == Some(&END_EXTRACTION);
    let inner_end = if closed { tokens.len() - 1 } else { tokens.len() };
    let inner_text = model.decode_text(&tokens[1..inner_end]);
    let report = parse_graph(&inner_text, ParseMode::Recovery).expect("recovery mode is total");
    let well_formed =
        closed && parse_graph(&inner_text, ParseMode::Strict).is_ok() && !report.graph.is_empty();
    SubgraphCandidate {
        index,
        tokens,
        graph: report.graph,
        parse_skips: report.skipped.len(),
        well_formed,
        logprob: 0.0,
    }
}

/// Samples p independent candidates at the configured temperature, each
/// starting from a forced START_EXTRACTION and stopping at END_EXTRACTION
/// or the graph token cap.
pub fn sample_parallel_subgraphs(
    model: &LanguageModel,
    x_ids: &[u32],
    cfg: &TrainingConfig,
    seed: u64,
) -> Result<Vec<SubgraphCandidate>, TrainError> {
    cfg.validate()?;
    let room = model
        .config()
        .context_len
        .saturating_sub(x_ids.len() + 1 + cfg.answer_reserve_tokens);
    let cap = cfg.max_kg_tokens.min(room);
    if cap == 0 {
        return Err(TrainError::Parameter(format!(
            "no room to sample a graph: instruction occupies {} of {} tokens",
            x_ids.len(),
            model.config().context_len
        )));
    }
    let mut prefix = x_ids.to_vec();
    prefix.push(START_EXTRACTION);
    let mut out = Vec::with_capacity(cfg.parallel_subgraphs);
    for k in 0..cfg.parallel_subgraphs {
        let sampled = model.sample(
            &prefix,
            cfg.temperature,
            &[END_EXTRACTION],
            cap,
            derive_seed(seed, 0xC0FFEE, k as u64),
        )?;
        let mut tokens = vec![START_EXTRACTION];
        tokens.extend(sampled);
        out.push(candidate_from_tokens(model, k, tokens));
    }
    Ok(out)
}

/// Candidate token sequences for an injected graph set.
fn injected_tokens(model: &LanguageModel, graphs: &[KnowledgeGraph]) -> Vec<Vec<u32>> {
    graphs
        .iter()
        .map(|g| wrap_graph_tokens(&model.encode(&serialize_graph(g))))
        .collect()
}

/// The per-example differentiable graph: base answer loss, per-candidate
/// mixed answer losses, and per-candidate graph log-probabilities, all on
/// one tape so a single backward covers the full objective.
struct ExampleTape {
    tape: Tape,
    loss_base: Var,
    loss_graphs: Vec<Var>,
    logpis: Vec<Var>,
}

#[allow(clippy::too_many_arguments)]
fn build_example_tape(
    model: &LanguageModel,
    mixnet: Option<&MixNet>,
    x_ids: &[u32],
    ans_ids: &[u32],
    scored_from: usize,
    candidates: &[Vec<u32>],
    mode: GraphLossMode,
    reduction: Reduction,
    mix_override: Option<f32>,
) -> Result<ExampleTape, TrainError> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let mix_binding = mixnet.map(|m| m.bind(&mut tape, model.store()));

    let x_len = x_ids.len();
    let mut base_seq = x_ids.to_vec();
    base_seq.extend_from_slice(ans_ids);
    let hidden_base = model.hidden_on_tape(&mut tape, &binding, &base_seq)?;

    // rows predicting each scored response token (y + EOS)
    let resp_tokens: Vec<u32> = ans_ids[scored_from..].to_vec();
    let base_rows: Vec<usize> = (scored_from..ans_ids.len())
        .map(|j| x_len + j - 1)
        .collect();
    let base_lp = model.logprob_rows_on_tape(&mut tape, &binding, hidden_base, &base_rows)?;
    let coords: Vec<(usize, usize)> = resp_tokens
        .iter()
        .enumerate()
        .map(|(k, &tok)| (k, tok as usize))
        .collect();
    let l_base_vec = tape.pick_entries(base_lp, &coords)?;
    let base_nll = tape.affine(l_base_vec, -1.0, 0.0);
    let loss_base = tape.mean_all(base_nll);

    let mut loss_graphs = Vec::with_capacity(candidates.len());
    let mut logpis = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let mut graph_seq = x_ids.to_vec();
        graph_seq.extend_from_slice(cand);
        let g_len = cand.len();
        graph_seq.extend_from_slice(ans_ids);
        if graph_seq.len() > model.config().context_len {
            return Err(TrainError::Parameter(format!(
                "graph-conditioned sequence of {} tokens exceeds context {}",
                graph_seq.len(),
                model.config().context_len
            )));
        }
        let hidden_g = model.hidden_on_tape(&mut tape, &binding, &graph_seq)?;

        // log pi(g | x): the candidate tokens after the forced delimiter
        let gen_tokens: Vec<u32> = cand[1..].to_vec();
        let gen_rows: Vec<usize> = (1..g_len).map(|j| x_len + j - 1).collect();
        let gen_lp = model.logprob_rows_on_tape(&mut tape, &binding, hidden_g, &gen_rows)?;
        let gen_coords: Vec<(usize, usize)> = gen_tokens
            .iter()
            .enumerate()
            .map(|(k, &tok)| (k, tok as usize))
            .collect();
        let picked = tape.pick_entries(gen_lp, &gen_coords)?;
        let logpi = match reduction {
            Reduction::Mean => tape.mean_all(picked),
            Reduction::Sum => tape.sum_all(picked),
        };
        logpis.push(logpi);

        // graph-conditioned response log-likelihoods
        let graph_rows: Vec<usize> = (scored_from..ans_ids.len())
            .map(|j| x_len + g_len + j - 1)
            .collect();
        let graph_lp = model.logprob_rows_on_tape(&mut tape, &binding, hidden_g, &graph_rows)?;
        let l_graph_vec = tape.pick_entries(graph_lp, &coords)?;

        let mixed = match (mode, mix_override) {
            (GraphLossMode::RawNll, _) => l_graph_vec,
            (GraphLossMode::Mixed, Some(w)) => {
                if !(0.0..=1.0).contains(&w) {
                    return Err(TrainError::Parameter(format!(
                        "mix override {w} outside [0, 1]"
                    )));
                }
                let g_side = tape.affine(l_graph_vec, w, 0.0);
                let b_side = tape.affine(l_base_vec, 1.0 - w, 0.0);
                tape.add(g_side, b_side)?
            }
            (GraphLossMode::Mixed, None) => {
                let mixnet = mixnet.ok_or_else(|| {
                    TrainError::Parameter(
                        "mixed graph loss requires a mixing network (or an override)".into(),
                    )
                })?;
                let mb = mix_binding.as_ref().expect("bound with mixnet");
                let h_b = tape.gather_rows(hidden_base, &base_rows)?;
                let h_g = tape.gather_rows(hidden_g, &graph_rows)?;
                let omega = mixnet.weights_on_tape(&mut tape, mb, h_b, h_g)?;
                mix_on_tape(&mut tape, omega, l_base_vec, l_graph_vec)?
            }
        };
        let nll = tape.affine(mixed, -1.0, 0.0);
        loss_graphs.push(tape.mean_all(nll));
    }
    Ok(ExampleTape {
        tape,
        loss_base,
        loss_graphs,
        logpis,
    })
}

/// Mean NLL of the answer given the instruction alone (no graph, no tape).
pub fn loss_base(
    model: &LanguageModel,
    x_ids: &[u32],
    answer: &str,
) -> Result<f32, TrainError> {
    if answer.is_empty() {
        return Err(TrainError::Parameter("empty answer".into()));
    }
    let (ans_ids, scored_from) = answer_segment(model.vocab(), answer);
    let mut prefix = x_ids.to_vec();
    prefix.extend_from_slice(&ans_ids[..scored_from]);
    let lp = model.sequence_logprob(&prefix, &ans_ids[scored_from..], Reduction::Mean)?;
    Ok(-lp)
}

/// Mean mixed NLL of the answer with the delimiter-wrapped candidate in
/// context. `mix_override` forces a fixed ω (0 reproduces the base loss,
/// 1 the raw graph-conditioned loss).
pub fn loss_graph(
    model: &LanguageModel,
    mixnet: Option<&MixNet>,
    x_ids: &[u32],
    answer: &str,
    candidate_tokens: &[u32],
    mode: GraphLossMode,
    mix_override: Option<f32>,
) -> Result<f32, TrainError> {
    if answer.is_empty() {
        return Err(TrainError::Parameter("empty answer".into()));
    }
    let (ans_ids, scored_from) = answer_segment(model.vocab(), answer);
    let built = build_example_tape(
        model,
        mixnet,
        x_ids,
        &ans_ids,
        scored_from,
        &[candidate_tokens.to_vec()],
        mode,
        Reduction::Mean,
        mix_override,
    )?;
    Ok(built.tape.item(built.loss_graphs[0])?)
}

fn prepare_x(
    model: &LanguageModel,
    registry: &TemplateRegistry,
    ex: &TrainingExample,
    ans_len: usize,
    cfg: &TrainingConfig,
) -> Result<(Vec<u32>, usize), TrainError> {
    let budget = model
        .config()
        .context_len
        .saturating_sub(ans_len + cfg.answer_reserve_tokens);
    let instruction = Instruction {
        question: ex.question.clone(),
        knowledge: ex.knowledge.clone(),
        template: registry.get(ex.domain).clone(),
    };
    build_x_ids(model.vocab(), &instruction, budget)
}

/// Mean log pi of the designated helpful candidate across the dataset, on
/// frozen parameters. Used to track Stage-2 learning.
pub fn mean_helpful_logprob(
    model: &LanguageModel,
    registry: &TemplateRegistry,
    dataset: &[TrainingExample],
    injected: &BTreeMap<String, InjectedCandidates>,
    cfg: &TrainingConfig,
) -> Result<Option<f32>, TrainError> {
    let mut acc = 0.0f64;
    let mut n = 0usize;
    for ex in dataset {
        let Some(inj) = injected.get(&ex.id) else { continue };
        let Some(h) = inj.helpful else { continue };
        let answer = ex.answer.as_deref().unwrap_or("");
        let (ans_ids, _) = answer_segment(model.vocab(), answer);
        let (x_ids, _) = prepare_x(model, registry, ex, ans_ids.len(), cfg)?;
        let tokens = injected_tokens(model, &inj.graphs);
        let cand = &tokens[h];
        let mut prefix = x_ids.clone();
        prefix.push(cand[0]);
        let lp = model.sequence_logprob(&prefix, &cand[1..], cfg.graph_logprob_reduction)?;
        acc += lp as f64;
        n += 1;
    }
    Ok(if n == 0 {
        None
    } else {
        Some((acc / n as f64) as f32)
    })
}

/// Runs Stage-2 training in place. The model's parameter store must carry
/// the mixing network (register one before calling); all parameters --
/// language model, reserved-token embeddings, and mixing network -- update
/// together.
pub fn train_rl(
    model: &mut LanguageModel,
    mixnet: &MixNet,
    registry: &TemplateRegistry,
    dataset: &[TrainingExample],
    cfg: &TrainingConfig,
    source: CandidateSource<'_>,
    checkpoint_dir: Option<&Path>,
) -> Result<RlReport, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::Parameter("empty training set".into()));
    }
    for ex in dataset {
        if ex.answer.as_deref().unwrap_or("").is_empty() {
            return Err(TrainError::Parameter(format!(
                "example {:?} has no answer",
                ex.id
            )));
        }
    }
    let mut report = RlReport::default();
    let mut opt = Adam::new((0.9, 0.999), 1e-8, cfg.weight_decay);
    let accum_scale = 1.0 / cfg.grad_accum_steps as f32;
    let mut moving_baseline = 0.0f32;
    let mut baseline_initialized = false;

    let injected_map = match &source {
        CandidateSource::Injected(map) => Some(*map),
        CandidateSource::Sampled => None,
    };
    if let Some(map) = injected_map {
        if let Some(v) = mean_helpful_logprob(model, registry, dataset, map, cfg)? {
            report.helpful_logprob_by_epoch.push(v);
        }
    }

    let mut pending = 0usize;
    for epoch in 0..cfg.stage2_epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1000 + epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_acc = 0.0f64;
        let mut epoch_n = 0usize;
        for &idx in &order {
            let ex = &dataset[idx];
            let answer = ex.answer.as_deref().expect("validated above");
            let (ans_ids, scored_from) = answer_segment(model.vocab(), answer);
            let (x_ids, dropped) = prepare_x(model, registry, ex, ans_ids.len(), cfg)?;
            report.truncation_events += dropped;

            let candidate_tokens: Vec<Vec<u32>> = match injected_map {
                Some(map) => {
                    let inj = map.get(&ex.id).ok_or_else(|| {
                        TrainError::Parameter(format!(
                            "no injected candidates for example {:?}",
                            ex.id
                        ))
                    })?;
                    injected_tokens(model, &inj.graphs)
                }
                None => {
                    let seed = derive_seed(cfg.seed, epoch as u64, idx as u64);
                    let cands = sample_parallel_subgraphs(model, &x_ids, cfg, seed)?;
                    if cands.iter().all(|c| !c.well_formed) {
                        report.skipped_unparseable += 1;
                        continue;
                    }
                    cands.into_iter().map(|c| c.tokens).collect()
                }
            };

            let built = build_example_tape(
                model,
                Some(mixnet),
                &x_ids,
                &ans_ids,
                scored_from,
                &candidate_tokens,
                cfg.graph_loss_mode,
                cfg.graph_logprob_reduction,
                None,
            )?;
            let mut tape = built.tape;
            let l_base = tape.item(built.loss_base)?;
            let l_graphs: Vec<f32> = built
                .loss_graphs
                .iter()
                .map(|&v| tape.item(v))
                .collect::<Result<_, _>>()?;

            let rewards = match cfg.baseline_mode {
                BaselineMode::PerExampleMean => compute_rewards(l_base, &l_graphs)?,
                BaselineMode::BatchMovingAverage => {
                    let mean_adv = l_graphs
                        .iter()
                        .map(|&lg| (l_base - lg) as f64)
                        .sum::<f64>() as f32
                        / l_graphs.len() as f32;
                    if !baseline_initialized {
                        moving_baseline = mean_adv;
                        baseline_initialized = true;
                    }
                    let r = compute_rewards_with_baseline(l_base, &l_graphs, moving_baseline)?;
                    moving_baseline = 0.9 * moving_baseline + 0.1 * mean_adv;
                    r
                }
            };

            let p = candidate_tokens.len() as f32;
            let rf_terms: Vec<(Var, f32)> = built
                .logpis
                .iter()
                .zip(&rewards.rewards)
                .map(|(&v, &r)| (v, -r / p))
                .collect();
            let l_rf_var = tape.weighted_sum(&rf_terms)?;
            let graph_terms: Vec<(Var, f32)> =
                built.loss_graphs.iter().map(|&v| (v, 1.0 / p)).collect();
            let l_graph_var = tape.weighted_sum(&graph_terms)?;
            let total_var = tape.weighted_sum(&[
                (built.loss_base, cfg.alpha),
                (l_graph_var, 1.0 - cfg.alpha),
                (l_rf_var, cfg.beta),
            ])?;
            let scaled = tape.affine(total_var, accum_scale, 0.0);
            tape.backward(scaled)?;
            tape.write_grads(model.store_mut())?;

            let breakdown = total_loss(
                l_base,
                tape.item(l_graph_var)?,
                tape.item(l_rf_var)?,
                cfg.alpha,
                cfg.beta,
            )?;
            debug_assert_eq!(breakdown.l_total.to_bits(), tape.item(total_var)?.to_bits());
            epoch_acc += breakdown.l_total as f64;
            epoch_n += 1;
            report.step_breakdowns.push(breakdown);

            pending += 1;
            if pending == cfg.grad_accum_steps {
                opt.step(model.store_mut(), cfg.stage2_lr)?;
                model.store_mut().zero_grads();
                pending = 0;
            }
        }
        if epoch_n > 0 {
            report.epoch_mean_total.push((epoch_acc / epoch_n as f64) as f32);
        } else {
            report.epoch_mean_total.push(f32::NAN);
        }
        if let Some(map) = injected_map {
            if let Some(v) = mean_helpful_logprob(model, registry, dataset, map, cfg)? {
                report.helpful_logprob_by_epoch.push(v);
            }
        }
        if let Some(dir) = checkpoint_dir {
            checkpoint::save(
                &dir.join(format!("rl_epoch{epoch}.tada")),
                model.config(),
                model.vocab(),
                model.store(),
            )?;
        }
    }
    if pending > 0 {
        opt.step(model.store_mut(), cfg.stage2_lr)?;
        model.store_mut().zero_grads();
    }
    if let Some(dir) = checkpoint_dir {
        checkpoint::save(
            &dir.join("rl.tada"),
            model.config(),
            model.vocab(),
            model.store(),
        )?;
    }
    Ok(report)
}
