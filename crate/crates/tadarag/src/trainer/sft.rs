//! Stage 1: supervised extraction fine-tuning. The model learns to emit
//! [START_EXTRACTION, serialized gold graph, END_EXTRACTION] after the
//! extraction instruction; the loss is the mean token NLL over that target
//! segment, optimized with Adam under a cosine learning-rate schedule and
//! gradient accumulation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Adam, Tape};
use crate::intent::{Instruction, TemplateRegistry};
use crate::kg::{serialize_graph, truncate_to_budget};
use crate::lm::{checkpoint, LanguageModel, Reduction};

use super::layout::{build_x_ids, wrap_graph_tokens};
use super::{cosine_lr, TrainError, TrainingConfig, TrainingExample};

#[derive(Debug, Clone)]
pub struct SftReport {
    /// Mean target NLL over the dataset before any update.
    pub initial_loss: f32,
    /// Mean target NLL over the dataset after the final update.
    pub final_loss: f32,
    /// Per-visited-example training loss, in visit order.
    pub step_losses: Vec<f32>,
    pub epoch_mean_losses: Vec<f32>,
    /// Knowledge lines dropped to fit the context window.
    pub truncation_events: usize,
}

struct PreparedExample {
    x_ids: Vec<u32>,
    target: Vec<u32>,
    dropped_lines: usize,
}

fn prepare(
    model: &LanguageModel,
    registry: &TemplateRegistry,
    ex: &TrainingExample,
    cfg: &TrainingConfig,
) -> Result<PreparedExample, TrainError> {
    let gold = ex.gold_graph.as_ref().ok_or_else(|| {
        TrainError::Parameter(format!("example {:?} has no gold graph", ex.id))
    })?;
    let vocab = model.vocab();
    let bounded = truncate_to_budget(gold, vocab, cfg.max_kg_tokens);
    let inner = vocab.encode(&serialize_graph(&bounded));
    let target = wrap_graph_tokens(&inner);
    let budget = model
        .config()
        .context_len
        .checked_sub(target.len() + 1)
        .ok_or_else(|| {
            TrainError::Parameter(format!(
                "gold graph of example {:?} exceeds the context window",
                ex.id
            ))
        })?;
    let instruction = Instruction {
        question: ex.question.clone(),
        knowledge: ex.knowledge.clone(),
        template: registry.get(ex.domain).clone(),
    };
    let (x_ids, dropped_lines) = build_x_ids(vocab, &instruction, budget)?;
    Ok(PreparedExample {
        x_ids,
        target,
        dropped_lines,
    })
}

/// Mean target NLL of one example on the current parameters (no tape).
fn example_nll(model: &LanguageModel, p: &PreparedExample) -> Result<f32, TrainError> {
    Ok(-model.sequence_logprob(&p.x_ids, &p.target, Reduction::Mean)?)
}

fn dataset_nll(model: &LanguageModel, prepared: &[PreparedExample]) -> Result<f32, TrainError> {
    let mut acc = 0.0f64;
    for p in prepared {
        acc += example_nll(model, p)? as f64;
    }
    Ok((acc / prepared.len().max(1) as f64) as f32)
}

/// One tape forward/backward for an example; returns the unscaled loss.
/// The gradient written back is scaled by 1/grad_accum_steps so an
/// optimizer step sees the mean over its micro-batch.
fn train_step(
    model: &mut LanguageModel,
    p: &PreparedExample,
    accum_scale: f32,
) -> Result<f32, TrainError> {
    let mut seq = p.x_ids.clone();
    seq.extend_from_slice(&p.target);
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let hidden = model.hidden_on_tape(&mut tape, &binding, &seq)?;
    let x_len = p.x_ids.len();
    let rows: Vec<usize> = (0..p.target.len()).map(|j| x_len + j - 1).collect();
    let logprobs = model.logprob_rows_on_tape(&mut tape, &binding, hidden, &rows)?;
    let coords: Vec<(usize, usize)> = p
        .target
        .iter()
        .enumerate()
        .map(|(j, &tok)| (j, tok as usize))
        .collect();
    let picked = tape.pick_entries(logprobs, &coords)?;
    let nll_vec = tape.affine(picked, -1.0, 0.0);
    let loss = tape.mean_all(nll_vec);
    let scaled = tape.affine(loss, accum_scale, 0.0);
    tape.backward(scaled)?;
    tape.write_grads(model.store_mut())?;
    Ok(tape.item(loss)?)
}

/// Runs Stage-1 training in place. When `checkpoint_dir` is given, a
/// checkpoint is written after every epoch and at the end.
pub fn train_sft(
    model: &mut LanguageModel,
    registry: &TemplateRegistry,
    dataset: &[TrainingExample],
    cfg: &TrainingConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<SftReport, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::Parameter("empty training set".into()));
    }
    let prepared: Vec<PreparedExample> = dataset
        .iter()
        .map(|ex| prepare(model, registry, ex, cfg))
        .collect::<Result<_, _>>()?;
    let truncation_events = prepared.iter().map(|p| p.dropped_lines).sum();

    let initial_loss = dataset_nll(model, &prepared)?;
    let mut opt = Adam::new((0.9, 0.999), 1e-8, cfg.weight_decay);
    let total_steps = (dataset.len() * cfg.stage1_epochs).div_ceil(cfg.grad_accum_steps);
    let accum_scale = 1.0 / cfg.grad_accum_steps as f32;

    let mut step_losses = Vec::with_capacity(dataset.len() * cfg.stage1_epochs);
    let mut epoch_mean_losses = Vec::with_capacity(cfg.stage1_epochs);
    let mut opt_step = 0usize;
    let mut pending = 0usize;
    for epoch in 0..cfg.stage1_epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_acc = 0.0f64;
        for &idx in &order {
            let loss = train_step(model, &prepared[idx], accum_scale)?;
            step_losses.push(loss);
            epoch_acc += loss as f64;
            pending += 1;
            if pending == cfg.grad_accum_steps {
                let lr = cosine_lr(cfg.stage1_lr, opt_step, total_steps);
                opt.step(model.store_mut(), lr)?;
                model.store_mut().zero_grads();
                opt_step += 1;
                pending = 0;
            }
        }
        epoch_mean_losses.push((epoch_acc / order.len() as f64) as f32);
        if let Some(dir) = checkpoint_dir {
            checkpoint::save(
                &dir.join(format!("sft_epoch{epoch}.tada")),
                model.config(),
                model.vocab(),
                model.store(),
            )?;
        }
    }
    if pending > 0 {
        let lr = cosine_lr(cfg.stage1_lr, opt_step, total_steps);
        opt.step(model.store_mut(), lr)?;
        model.store_mut().zero_grads();
    }
    let final_loss = dataset_nll(model, &prepared)?;
    if let Some(dir) = checkpoint_dir {
        checkpoint::save(
            &dir.join("sft.tada"),
            model.config(),
            model.vocab(),
            model.store(),
        )?;
    }
    Ok(SftReport {
        initial_loss,
        final_loss,
        step_losses,
        epoch_mean_losses,
        truncation_events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intent::Domain;
    use crate::kg::{parse_graph, ParseMode};
    use crate::lm::LmConfig;

    fn toy_example() -> TrainingExample {
        let gold = parse_graph(
            "(\"Entity\", \"relto\", \"drug\", \"treats kovan\")",
            ParseMode::Strict,
        )
        .unwrap()
        .graph;
        TrainingExample {
            id: "e0".into(),
            question: "which drug treats kovan?".into(),
            knowledge: "[doc] relto treats kovan.".into(),
            domain: Domain::BioMedicalResearch,
            answer: Some("relto".into()),
            gold_graph: Some(gold),
        }
    }

    fn toy_model(seed: u64) -> LanguageModel {
        LanguageModel::new(LmConfig {
            embed_dim: 32,
            num_layers: 1,
            num_heads: 2,
            context_len: 320,
            seed,
            ..LmConfig::default()
        })
        .unwrap()
    }

    fn quick_cfg() -> TrainingConfig {
        TrainingConfig {
            stage1_lr: 5e-3,
            stage1_epochs: 12,
            grad_accum_steps: 1,
            seed: 7,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn single_example_memorization_reduces_nll() {
        let mut model = toy_model(1);
        let report = train_sft(
            &mut model,
            &TemplateRegistry::builtin(),
            &[toy_example()],
            &quick_cfg(),
            None,
        )
        .unwrap();
        assert!(
            report.final_loss < report.initial_loss,
            "final {} vs initial {}",
            report.final_loss,
            report.initial_loss
        );
        // windowed average over thirds decreases monotonically
        let n = report.step_losses.len();
        let third = n / 3;
        let mean = |s: &[f32]| s.iter().sum::<f32>() / s.len() as f32;
        let first = mean(&report.step_losses[..third]);
        let last = mean(&report.step_losses[n - third..]);
        assert!(last < first, "windowed loss should fall: {first} -> {last}");
    }

    #[test]
    fn fixed_seed_reproduces_identical_checkpoint_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainingConfig {
            stage1_epochs: 2,
            ..quick_cfg()
        };
        let registry = TemplateRegistry::builtin();
        for run in 0..2 {
            let mut model = toy_model(1);
            train_sft(&mut model, &registry, &[toy_example()], &cfg, None).unwrap();
            checkpoint::save(
                &dir.path().join(format!("run{run}.tada")),
                model.config(),
                model.vocab(),
                model.store(),
            )
            .unwrap();
        }
        let a = std::fs::read(dir.path().join("run0.tada")).unwrap();
        let b = std::fs::read(dir.path().join("run1.tada")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_gold_graph_is_a_parameter_error() {
        let mut ex = toy_example();
        ex.gold_graph = None;
        let mut model = toy_model(1);
        let err = train_sft(
            &mut model,
            &TemplateRegistry::builtin(),
            &[ex],
            &quick_cfg(),
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("gold graph"));
    }
}
