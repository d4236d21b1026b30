use std::cell::Cell;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Sample;
use crate::nets::{predict_code, seg_argmax, stack_images, Model, MultiTaskNet, SimpleCnn, NUM_CODES};
use crate::tensor::{FlushSubnormals, Graph, ParamStore, Tensor, TensorError};

use super::losses::{integral_loss, orientation_loss, seg_target, segmentation_loss, LOG_FLOOR};
use super::metrics::{DiceAccumulator, EpochRecord, Evaluation, RunLog};
use super::{TrainConfig, TrainError};

const EVAL_BATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Objective {
    Orientation,
    Segmentation,
    Integral,
}

struct Deadline(Option<Instant>);

impl Deadline {
    fn from(cfg: &TrainConfig) -> Self {
        Deadline(cfg.time_limit_secs.map(|s| Instant::now() + std::time::Duration::from_secs_f64(s)))
    }

    fn passed(&self) -> bool {
        self.0.is_some_and(|d| Instant::now() >= d)
    }
}

#[derive(Debug, Clone, Default)]
struct StageSummary {
    stopped_early: bool,
    truncated: bool,
}

fn one_hot(samples: &[&Sample]) -> Tensor<f32> {
    let mut data = vec![0.0f32; samples.len() * NUM_CODES];
    for (i, s) in samples.iter().enumerate() {
        data[i * NUM_CODES + s.orient.index()] = 1.0;
    }
    Tensor::new(vec![samples.len(), NUM_CODES], data).expect("sized")
}

fn seg_maps<'a>(samples: &'a [&Sample]) -> Result<Vec<ndarray::ArrayView2<'a, u8>>, TrainError> {
    samples
        .iter()
        .map(|s| s.seg.as_ref().map(|m| m.view()).ok_or_else(|| TrainError::Data("sample without segmentation label".into())))
        .collect()
}

fn multitask_net(model: &Model) -> Result<&MultiTaskNet, TrainError> {
    match model {
        Model::MultiTask(n) => Ok(n),
        Model::Simple(_) => Err(TrainError::Config("segmentation objectives need the multi-task network".into())),
    }
}

fn check_inputs(model: &Model, samples: &[Sample]) -> Result<(), TrainError> {
    let want = model.card().input_shape;
    if let Some(s) = samples.iter().find(|s| s.image.shape() != want.as_slice()) {
        return Err(TrainError::Data(format!("sample shape {:?} does not match model input {want:?}", s.image.shape())));
    }
    Ok(())
}

/// Loss, accuracy and (for the multi-task network on labelled samples)
/// segmentation loss and Dice on `samples`.
pub fn evaluate(model: &Model, samples: &[Sample], seg_weights: &[f64; 4]) -> Result<Evaluation, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Data("nothing to evaluate".into()));
    }
    let _ftz = FlushSubnormals::new();
    let with_seg = matches!(model, Model::MultiTask(_)) && samples.iter().all(|s| s.seg.is_some());
    let (mut correct, mut orient_sum, mut seg_sum) = (0usize, 0f64, 0f64);
    let mut dice = DiceAccumulator::default();
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut g = Graph::new();
        let x = g.input(stack_images(chunk.iter().map(|s| &s.image))?);
        let (probs, seg) = match model {
            Model::Simple(m) => (m.forward(&mut g, x)?, None),
            Model::MultiTask(m) => {
                let out = m.forward(&mut g, x)?;
                (out.orient, Some(out.seg))
            }
        };
        for (row, s) in g.value(probs).data().chunks(NUM_CODES).zip(chunk) {
            orient_sum -= (row[s.orient.index()] as f64).max(LOG_FLOOR).ln();
            correct += (predict_code(row)? == s.orient) as usize;
        }
        if let (true, Some(seg)) = (with_seg, seg) {
            let maps = seg_maps(&refs)?;
            let target = seg_target::<f32>(maps.iter().copied())?;
            let l = segmentation_loss(&mut g, seg, &target, seg_weights)?;
            seg_sum += g.value(l).item() as f64 * chunk.len() as f64;
            let shape = g.shape(seg).to_vec();
            let (h, w) = (shape[2], shape[3]);
            let data = g.value(seg).data();
            for (b, truth) in maps.iter().enumerate() {
                let pred = seg_argmax(&data[b * 4 * h * w..(b + 1) * 4 * h * w], h, w);
                dice.add(pred.view(), *truth);
            }
        }
    }
    let n = samples.len() as f64;
    let dice = dice.finish();
    Ok(Evaluation {
        samples: samples.len(),
        accuracy: correct as f64 / n,
        orientation_loss: orient_sum / n,
        segmentation_loss: with_seg.then_some(seg_sum / n),
        mean_dice: dice.map(|d| d.mean()),
        dice,
    })
}

struct Stage<'a> {
    name: &'a str,
    objective: Objective,
    epochs: usize,
    lr_scale: f64,
    seed: u64,
}

fn diverged(stage: &str, step: usize, e: TensorError) -> TrainError {
    match e {
        TensorError::NonFiniteGradient(p) => {
            TrainError::Diverged { stage: stage.into(), step, detail: format!("non-finite gradient in {p}") }
        }
        other => other.into(),
    }
}

#[allow(clippy::too_many_arguments)]
fn fit(
    model: &mut Model,
    train: &[Sample],
    val: &[Sample],
    stage: Stage<'_>,
    cfg: &TrainConfig,
    seg_weights: &[f64; 4],
    log: &mut RunLog,
    deadline: &Deadline,
    check: &dyn Fn(&ParamStore<f32>) -> Result<(), TrainError>,
) -> Result<StageSummary, TrainError> {
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Data("training and validation sets must be non-empty".into()));
    }
    let _ftz = FlushSubnormals::new();
    let mut opt = cfg.optimizer.build(stage.lr_scale);
    let mut rng = ChaCha8Rng::seed_from_u64(stage.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, ParamStore<f32>)> = None;
    let mut since_best = 0;
    let mut summary = StageSummary::default();
    let mut step = 0;
    for epoch in 0..stage.epochs {
        if deadline.passed() {
            summary.truncated = true;
            break;
        }
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let refs: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let x = g.input(stack_images(refs.iter().map(|s| &s.image))?);
            let loss = match stage.objective {
                Objective::Orientation => {
                    let probs = model.forward_orientation(&mut g, x)?;
                    let t = g.input(one_hot(&refs));
                    orientation_loss(&mut g, probs, t)?
                }
                Objective::Segmentation => {
                    let seg = multitask_net(model)?.forward_segmentation(&mut g, x)?;
                    let target = seg_target(seg_maps(&refs)?)?;
                    segmentation_loss(&mut g, seg, &target, seg_weights)?
                }
                Objective::Integral => {
                    let out = multitask_net(model)?.forward(&mut g, x)?;
                    let target = seg_target(seg_maps(&refs)?)?;
                    let ls = segmentation_loss(&mut g, out.seg, &target, seg_weights)?;
                    let t = g.input(one_hot(&refs));
                    let lo = orientation_loss(&mut g, out.orient, t)?;
                    integral_loss(&mut g, ls, lo)?
                }
            };
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(TrainError::Diverged { stage: stage.name.into(), step, detail: format!("loss is {value}") });
            }
            loss_sum += value * refs.len() as f64;
            let params = model.params_mut();
            params.zero_grad();
            g.backward_into(loss, params)?;
            check(params)?;
            opt.step(params).map_err(|e| diverged(stage.name, step, e))?;
            step += 1;
        }
        let ev = evaluate(model, val, seg_weights)?;
        let (val_loss, score) = match stage.objective {
            Objective::Orientation => (ev.orientation_loss, -ev.orientation_loss),
            Objective::Segmentation => {
                (ev.segmentation_loss.unwrap_or(f64::NAN), ev.mean_dice.unwrap_or(0.0))
            }
            Objective::Integral => (ev.integral_loss(), -ev.integral_loss()),
        };
        log.push(EpochRecord {
            stage: stage.name.into(),
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_accuracy: Some(ev.accuracy),
            val_mean_dice: ev.mean_dice,
            seconds: t0.elapsed().as_secs_f64(),
        })?;
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, model.params().clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                summary.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        model.params_mut().load_from(&params)?;
    }
    Ok(summary)
}

fn no_check(_: &ParamStore<f32>) -> Result<(), TrainError> {
    Ok(())
}

/// Result of training the simplified network.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub validation: Evaluation,
    pub stopped_early: bool,
    pub truncated: bool,
}

/// Single-stage training of the simplified network on the orientation loss.
/// The parameters with the lowest validation loss are kept.
pub fn train_simple(cfg: &TrainConfig, train: &[Sample], val: &[Sample], log: &mut RunLog) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let deadline = Deadline::from(cfg);
    let mut simple = cfg.simple.clone();
    simple.seed = cfg.seed;
    let mut model = Model::Simple(SimpleCnn::new(simple, cfg.preprocess.clone())?);
    check_inputs(&model, train)?;
    check_inputs(&model, val)?;
    let start = log.records().len();
    let stage = Stage { name: "simple", objective: Objective::Orientation, epochs: cfg.epochs, lr_scale: 1.0, seed: cfg.seed ^ 0x5151 };
    let s = fit(&mut model, train, val, stage, cfg, &[1.0; 4], log, &deadline, &no_check)?;
    let validation = evaluate(&model, val, &[1.0; 4])?;
    Ok(TrainOutcome {
        model,
        history: log.records()[start..].to_vec(),
        validation,
        stopped_early: s.stopped_early,
        truncated: s.truncated,
    })
}

/// Evidence for the parameter freeze contracts of the multi-task schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeReport {
    /// Largest absolute encoder/decoder gradient seen during stage 2.
    pub stage2_max_frozen_grad: f64,
    pub encoder_unchanged: bool,
    pub decoder_unchanged: bool,
    /// Orientation-head weights differ from their pre-stage-2 values and its
    /// biases are back at zero.
    pub head_reinitialized: bool,
}

#[derive(Debug)]
pub struct MultiTaskOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub validation: Evaluation,
    pub freeze: FreezeReport,
    pub truncated: bool,
}

/// Weights all redrawn and biases reset to zero.
fn reinitialized(before: &[(String, Vec<f32>)], after: &[(String, Vec<f32>)]) -> bool {
    before.len() == after.len()
        && before.iter().zip(after).all(|((name, x), (_, y))| {
            if name.ends_with(".b") {
                y.iter().all(|&v| v == 0.0)
            } else {
                x != y
            }
        })
}

/// Three stages: segmentation with encoder and decoder (kept by best
/// validation mean Dice), orientation head from fresh weights with encoder
/// and decoder frozen, then everything jointly on the integral loss (kept by
/// best validation integral loss).
pub fn train_multitask(cfg: &TrainConfig, train: &[Sample], val: &[Sample], log: &mut RunLog) -> Result<MultiTaskOutcome, TrainError> {
    cfg.validate()?;
    let deadline = Deadline::from(cfg);
    let weights = cfg.seg_weights.resolve(train)?;
    let mut mcfg = cfg.multitask.clone();
    mcfg.seed = cfg.seed;
    let mut model = Model::MultiTask(MultiTaskNet::new(mcfg)?);
    check_inputs(&model, train)?;
    check_inputs(&model, val)?;
    if train.iter().chain(val).any(|s| s.seg.is_none()) {
        return Err(TrainError::Data("multi-task training needs segmentation labels".into()));
    }
    let start = log.records().len();
    let mut truncated = false;

    let p = model.params_mut();
    p.set_all_trainable(true);
    p.set_trainable("head.", false);
    let st = Stage { name: "segmentation", objective: Objective::Segmentation, epochs: cfg.stages.segmentation, lr_scale: 1.0, seed: cfg.seed ^ 0x1 };
    truncated |= fit(&mut model, train, val, st, cfg, &weights, log, &deadline, &no_check)?.truncated;

    let enc = model.params().snapshot("encoder.");
    let dec = model.params().snapshot("decoder.");
    let head_before = model.params().snapshot("head.");
    if let Model::MultiTask(net) = &mut model {
        net.params.set_trainable("encoder.", false);
        net.params.set_trainable("decoder.", false);
        net.params.set_trainable("head.", true);
        net.reinit_head(cfg.seed ^ 0xbeef);
    }
    let head_reinitialized = reinitialized(&head_before, &model.params().snapshot("head."));
    let max_grad = Cell::new(0.0f64);
    let freeze_check = |p: &ParamStore<f32>| {
        let g = p.grad_max_abs("encoder.").max(p.grad_max_abs("decoder.")) as f64;
        max_grad.set(max_grad.get().max(g));
        if g != 0.0 {
            return Err(TrainError::FreezeViolation { stage: "orientation".into(), max_abs: g });
        }
        Ok(())
    };
    let st = Stage { name: "orientation", objective: Objective::Orientation, epochs: cfg.stages.orientation, lr_scale: 1.0, seed: cfg.seed ^ 0x2 };
    truncated |= fit(&mut model, train, val, st, cfg, &weights, log, &deadline, &freeze_check)?.truncated;
    let freeze = FreezeReport {
        stage2_max_frozen_grad: max_grad.get(),
        encoder_unchanged: model.params().snapshot("encoder.") == enc,
        decoder_unchanged: model.params().snapshot("decoder.") == dec,
        head_reinitialized,
    };
    if !freeze.encoder_unchanged || !freeze.decoder_unchanged {
        return Err(TrainError::FreezeViolation { stage: "orientation".into(), max_abs: freeze.stage2_max_frozen_grad });
    }

    model.params_mut().set_all_trainable(true);
    let st = Stage { name: "joint", objective: Objective::Integral, epochs: cfg.stages.joint, lr_scale: cfg.joint_lr_scale, seed: cfg.seed ^ 0x3 };
    truncated |= fit(&mut model, train, val, st, cfg, &weights, log, &deadline, &no_check)?.truncated;

    let validation = evaluate(&model, val, &weights)?;
    Ok(MultiTaskOutcome { model, history: log.records()[start..].to_vec(), validation, freeze, truncated })
}

#[derive(Debug)]
pub struct TransferOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub validation: Evaluation,
    /// Parameters outside the fully connected layer were bit-identical after phase A.
    pub phase_a_frozen_unchanged: bool,
    pub truncated: bool,
}

fn trainable_groups(model: &Model) -> (&'static [&'static str], &'static [&'static str]) {
    match model {
        Model::Simple(_) => (&["fc."], &["conv.", "fc."]),
        Model::MultiTask(_) => (&["head.fc."], &["encoder.", "head."]),
    }
}

fn frozen_snapshot(p: &ParamStore<f32>) -> Vec<(String, Vec<f32>)> {
    p.iter().filter(|q| !q.trainable).map(|q| (q.name.clone(), q.value.data().to_vec())).collect()
}

/// Adapts a trained recognizer to a new modality: phase A retrains only the
/// fully connected layer, phase B retrains the convolutional layers together
/// with it. Each phase stops after `patience` epochs without validation
/// improvement.
pub fn transfer(model: Model, cfg: &TrainConfig, train: &[Sample], val: &[Sample], log: &mut RunLog) -> Result<TransferOutcome, TrainError> {
    cfg.validate()?;
    let deadline = Deadline::from(cfg);
    let mut model = model;
    check_inputs(&model, train)?;
    check_inputs(&model, val)?;
    let start = log.records().len();
    let (phase_a, phase_b) = trainable_groups(&model);

    let set = |model: &mut Model, groups: &[&str]| {
        let p = model.params_mut();
        p.set_all_trainable(false);
        for g in groups {
            p.set_trainable(g, true);
        }
    };
    set(&mut model, phase_a);
    let frozen = frozen_snapshot(model.params());
    let st = Stage { name: "transfer_fc", objective: Objective::Orientation, epochs: cfg.transfer.head, lr_scale: 1.0, seed: cfg.seed ^ 0x4 };
    let mut truncated = fit(&mut model, train, val, st, cfg, &[1.0; 4], log, &deadline, &no_check)?.truncated;
    let phase_a_frozen_unchanged = frozen_snapshot(model.params()) == frozen;

    if cfg.transfer.finetune > 0 {
        set(&mut model, phase_b);
        let st = Stage { name: "transfer_finetune", objective: Objective::Orientation, epochs: cfg.transfer.finetune, lr_scale: 1.0, seed: cfg.seed ^ 0x5 };
        truncated |= fit(&mut model, train, val, st, cfg, &[1.0; 4], log, &deadline, &no_check)?.truncated;
    }
    model.params_mut().set_all_trainable(true);
    let validation = evaluate(&model, val, &[1.0; 4])?;
    Ok(TransferOutcome { model, history: log.records()[start..].to_vec(), validation, phase_a_frozen_unchanged, truncated })
}
