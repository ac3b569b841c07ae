//! Joint training loop.
//!
//! One step runs every network once on a mixed batch, derives the graph,
//! weights and class statistics from that forward pass, and applies a single
//! SGD update to all parameter groups:
//!
//! ```text
//! total = L_c(w) + L_d(w) + lambda_c * L_cg + L_aux_c + L_aux_d
//! ```
//!
//! `F` and `G` see `L_d` through gradient reversal, so the discriminator
//! minimizes it while the features maximize it.

mod config;
mod eval;
mod metrics;

pub use config::{grl_lambda_schedule, lr_schedule, progress, Gates, TrainConfig, Variant};
pub use eval::{evaluate_target, TargetEvaluation};
pub use metrics::{EpochRecord, MetricsLog, StepLosses, StepRecord};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Sgd, Tape, Tensor, TensorError, Var};
use crate::crg::{build_adjacency, build_label_matrix, CrgError};
use crate::data::{Batch, BatchIterator, DataError, PdaDataset};
use crate::networks::{
    forward_classifier, forward_graph_heads, init_params, Architecture, ForwardOptions, NetworkError,
    ParamSet, ParamVars,
};
use crate::objectives::{
    confidence_guided_loss, default_top_k, sample_commonness, weighted_classifier_loss,
    weighted_domain_loss, CommonnessState, ObjectiveError, WeightVector,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Graph(#[from] CrgError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite values at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("io: {0}")]
    Io(String),
}

/// Quantities of a step that enter the objective as constants.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen {
    pub a_hat: Tensor,
    /// Commonness computed from the auxiliary heads.
    pub commonness: WeightVector,
    /// Weights applied in `L_c` and `L_d`; ones when weighting is gated off.
    pub w: Vec<f64>,
    pub pseudo_labels: Vec<usize>,
}

struct StepGraph {
    tape: Tape,
    vars: ParamVars,
    total: Var,
    losses: StepLosses,
    frozen: Frozen,
}

fn build_step(
    params: &ParamSet,
    batch: &Batch,
    state: &mut CommonnessState,
    cfg: &TrainConfig,
    p: f64,
    step: usize,
    frozen: Option<&Frozen>,
) -> Result<StepGraph, TrainError> {
    let gates = cfg.gates();
    let ns = batch.num_source();
    let n = ns + batch.num_target();
    let labels = &batch.source_labels;
    let num_classes = params.num_classes();

    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let x = tape.constant(batch.stacked());
    let cls = forward_classifier(&mut tape, &vars, x)?;
    if !tape.value(cls.probs_c).is_finite() {
        return Err(TrainError::NonFinite {
            step,
            detail: "classifier probabilities".into(),
        });
    }

    let (a_hat, pseudo_labels) = match frozen {
        Some(f) => (f.a_hat.clone(), f.pseudo_labels.clone()),
        None => {
            let target_idx: Vec<usize> = (ns..n).collect();
            let target_probs = tape.value(cls.probs_c).select_rows(&target_idx);
            let a_hat = if gates.graph {
                let y = build_label_matrix(labels, Some(&target_probs), num_classes, cfg.target_labels)?;
                build_adjacency(&y).a_hat().clone()
            } else {
                Tensor::eye(n)
            };
            (a_hat, target_probs.argmax_rows())
        }
    };

    let opts = ForwardOptions {
        grl_lambda: cfg.grl_lambda_at(p),
        couple_aux: cfg.couple_aux,
    };
    let heads = forward_graph_heads(&mut tape, &vars, cls.feat_f, &a_hat, opts)?;
    let aux_c_src = tape.slice_rows(heads.probs_c_aux, 0, ns)?;
    let aux_d_src = tape.slice_rows(heads.prob_d_aux, 0, ns)?;
    let aux_d_tgt = tape.slice_rows(heads.prob_d_aux, ns, n)?;

    let (commonness, w) = match frozen {
        Some(f) => (f.commonness.clone(), f.w.clone()),
        None => {
            let c = sample_commonness(tape.value(aux_c_src), tape.value(aux_d_src))?;
            let w = if gates.weighting { c.w.clone() } else { vec![1.0; ns] };
            (c, w)
        }
    };

    state.update_class_commonness(&commonness.w, labels)?;
    let centroids = state.update_centroids(&mut tape, heads.feat_g, labels, &pseudo_labels)?;

    let mut losses = StepLosses::default();
    let probs_src = tape.slice_rows(cls.probs_c, 0, ns)?;
    let l_c = weighted_classifier_loss(&mut tape, probs_src, labels, &w)?;
    losses.l_c = tape.value(l_c).item()?;
    let mut total = l_c;

    if gates.adversarial {
        let d_src = tape.slice_rows(heads.prob_d, 0, ns)?;
        let d_tgt = tape.slice_rows(heads.prob_d, ns, n)?;
        let l_d = weighted_domain_loss(&mut tape, d_src, &w, d_tgt)?;
        losses.l_d = tape.value(l_d).item()?;
        total = tape.add(total, l_d)?;
    }

    if gates.lambda_c != 0.0 {
        let outcome = confidence_guided_loss(&mut tape, state, centroids)?;
        if !outcome.skipped {
            let l_cg = tape.scale(outcome.loss, gates.lambda_c);
            losses.l_cg = tape.value(l_cg).item()?;
            total = tape.add(total, l_cg)?;
        }
    }

    let ones = vec![1.0; ns];
    let l_aux_c = weighted_classifier_loss(&mut tape, aux_c_src, labels, &ones)?;
    let l_aux_d = weighted_domain_loss(&mut tape, aux_d_src, &ones, aux_d_tgt)?;
    losses.l_aux_c = tape.value(l_aux_c).item()?;
    losses.l_aux_d = tape.value(l_aux_d).item()?;
    total = tape.add(total, l_aux_c)?;
    total = tape.add(total, l_aux_d)?;

    Ok(StepGraph {
        tape,
        vars,
        total,
        losses,
        frozen: Frozen {
            a_hat,
            commonness,
            w,
            pseudo_labels,
        },
    })
}

/// Parameter gradients of one step, in [`ParamSet::tensors`] order, without
/// applying them. `state` is the class statistics before the step.
pub fn step_gradients(
    params: &ParamSet,
    batch: &Batch,
    state: &CommonnessState,
    cfg: &TrainConfig,
    p: f64,
) -> Result<(Vec<Tensor>, StepLosses, Frozen), TrainError> {
    let mut state = state.clone();
    let g = build_step(params, batch, &mut state, cfg, p, 0, None)?;
    let grads = g.tape.backward(g.total)?;
    Ok((g.vars.gradients(&grads), g.losses, g.frozen))
}

/// Losses of one step with the detached quantities held at `frozen`.
pub fn step_losses(
    params: &ParamSet,
    batch: &Batch,
    state: &CommonnessState,
    cfg: &TrainConfig,
    p: f64,
    frozen: &Frozen,
) -> Result<StepLosses, TrainError> {
    let mut state = state.clone();
    Ok(build_step(params, batch, &mut state, cfg, p, 0, Some(frozen))?.losses)
}

/// Everything produced by a finished run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub log: MetricsLog,
    pub state: CommonnessState,
}

#[derive(Debug, Default)]
struct GroupMeans {
    common: (f64, usize),
    private: (f64, usize),
}

impl GroupMeans {
    fn mean(acc: (f64, usize)) -> Option<f64> {
        (acc.1 > 0).then(|| acc.0 / acc.1 as f64)
    }
}

/// Step-by-step driver over one dataset.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    ds: &'a PdaDataset,
    params: ParamSet,
    state: CommonnessState,
    opt: Sgd,
    batches: BatchIterator<'a>,
    steps_per_epoch: usize,
    total_steps: usize,
    step: usize,
    log: MetricsLog,
    groups: GroupMeans,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, ds: &'a PdaDataset) -> Result<Self, TrainError> {
        cfg.validate()?;
        let num_classes = ds.num_classes();
        let arch = Architecture::standard(ds.dim(), num_classes, cfg.graph_layers, cfg.graph_width);
        let params = init_params(&arch, num_classes, cfg.seed)?;
        let k = cfg.top_k.unwrap_or_else(|| default_top_k(num_classes));
        let mut state = CommonnessState::new(num_classes, cfg.graph_width, cfg.ema_alpha, k)?;
        state.margin_clamp = cfg.margin_clamp;
        state.guidance = cfg.guidance;
        let batch_seed = ChaCha8Rng::seed_from_u64(cfg.seed).random::<u64>() ^ 0xba7c;
        let batches = BatchIterator::new(ds, cfg.batch_size, batch_seed)?;
        let steps_per_epoch = batches.steps_per_epoch();
        Ok(Trainer {
            opt: Sgd::new(cfg.momentum),
            total_steps: steps_per_epoch * cfg.epochs,
            cfg,
            ds,
            params,
            state,
            batches,
            steps_per_epoch,
            step: 0,
            log: MetricsLog::default(),
            groups: GroupMeans::default(),
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn state(&self) -> &CommonnessState {
        &self.state
    }

    pub fn log(&self) -> &MetricsLog {
        &self.log
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    /// Runs one optimization step; closes the epoch when it is the last one.
    pub fn step(&mut self) -> Result<StepRecord, TrainError> {
        let step = self.step;
        let p = progress(step, self.total_steps);
        let lr = self.cfg.lr_at(p)?;
        let lambda = self.cfg.grl_lambda_at(p);
        let batch = self.batches.next().expect("endless iterator");

        let graph = build_step(&self.params, &batch, &mut self.state, &self.cfg, p, step, None)?;
        let record = StepRecord {
            step,
            p,
            lr,
            lambda,
            losses: graph.losses,
        };
        if !graph.losses.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                detail: format!("{record:?}; an unclamped repulsion term can diverge, see margin_clamp"),
            });
        }
        let grads = graph.vars.gradients(&graph.tape.backward(graph.total)?);
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite {
                step,
                detail: format!("gradient of parameter tensor {i}; {record:?}"),
            });
        }
        let head_lr = lr * self.cfg.head_lr_multiplier;
        let lrs: Vec<f64> = self
            .params
            .tensors()
            .iter()
            .map(|(role, _)| if role.is_head() { head_lr } else { lr })
            .collect();
        let tensors = self.params.tensors_mut().into_iter().map(|(_, t)| t).collect();
        self.opt.step(tensors, &grads, &lrs);

        if let Some(eval) = self.ds.evaluation() {
            for (&label, &w) in batch.source_labels.iter().zip(&graph.frozen.w) {
                let acc = if eval.is_common(label) {
                    &mut self.groups.common
                } else {
                    &mut self.groups.private
                };
                acc.0 += w;
                acc.1 += 1;
            }
        }
        self.log.steps.push(record);
        self.step += 1;
        if self.step.is_multiple_of(self.steps_per_epoch) {
            self.close_epoch()?;
        }
        Ok(record)
    }

    fn close_epoch(&mut self) -> Result<(), TrainError> {
        let groups = std::mem::take(&mut self.groups);
        let acc = evaluate_target(&self.params, self.ds)?.map(|e| e.accuracy);
        let record = EpochRecord {
            epoch: self.step / self.steps_per_epoch - 1,
            step: self.step,
            target_accuracy: acc,
            mean_w_common: GroupMeans::mean(groups.common),
            mean_w_private: GroupMeans::mean(groups.private),
        };
        log::info!(
            "epoch {} step {} target accuracy {:?}",
            record.epoch,
            record.step,
            record.target_accuracy
        );
        self.log.epochs.push(record);
        Ok(())
    }

    pub fn run(mut self) -> Result<TrainOutcome, TrainError> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(TrainOutcome {
            params: self.params,
            log: self.log,
            state: self.state,
        })
    }
}

pub fn train(cfg: &TrainConfig, ds: &PdaDataset) -> Result<TrainOutcome, TrainError> {
    Trainer::new(cfg.clone(), ds)?.run()
}

/// Commonness and graph features for every sample, from batches that walk
/// both splits in order (wrapping the shorter one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullPass {
    pub source_commonness: WeightVector,
    /// `G(F(x))` rows for the source split.
    pub source_features: Tensor,
    pub target_features: Tensor,
}

pub fn full_pass(params: &ParamSet, ds: &PdaDataset, cfg: &TrainConfig) -> Result<FullPass, TrainError> {
    let (ns, nt) = (ds.num_source(), ds.num_target());
    let half = (cfg.batch_size / 2).clamp(1, ns.min(nt));
    let chunks = ns.div_ceil(half).max(nt.div_ceil(half));
    let gates = cfg.gates();
    let num_classes = params.num_classes();
    let width = params.graph.output_dim();

    let mut w = vec![f64::NAN; ns];
    let mut raw = vec![f64::NAN; ns];
    let mut src_feat = Tensor::zeros(&[ns, width]);
    let mut tgt_feat = Tensor::zeros(&[nt, width]);
    for c in 0..chunks {
        let si: Vec<usize> = (0..half).map(|i| (c * half + i) % ns).collect();
        let ti: Vec<usize> = (0..half).map(|i| (c * half + i) % nt).collect();
        let labels: Vec<usize> = si.iter().map(|&i| ds.source_labels()[i]).collect();
        let x = Tensor::vstack(&ds.gather_source(&si), &ds.gather_target(&ti))?;

        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let xv = tape.constant(x);
        let cls = forward_classifier(&mut tape, &vars, xv)?;
        let a_hat = if gates.graph {
            let tp = tape.value(cls.probs_c).select_rows(&(half..2 * half).collect::<Vec<_>>());
            let y = build_label_matrix(&labels, Some(&tp), num_classes, cfg.target_labels)?;
            build_adjacency(&y).a_hat().clone()
        } else {
            Tensor::eye(2 * half)
        };
        let opts = ForwardOptions {
            grl_lambda: 0.0,
            couple_aux: false,
        };
        let heads = forward_graph_heads(&mut tape, &vars, cls.feat_f, &a_hat, opts)?;
        let rows: Vec<usize> = (0..half).collect();
        let wv = sample_commonness(
            &tape.value(heads.probs_c_aux).select_rows(&rows),
            &tape.value(heads.prob_d_aux).select_rows(&rows),
        )?;
        let feat = tape.value(heads.feat_g);
        for (k, &i) in si.iter().enumerate() {
            if w[i].is_nan() {
                w[i] = wv.w[k];
                raw[i] = wv.raw[k];
                for j in 0..width {
                    src_feat.set(i, j, feat.get(k, j));
                }
            }
        }
        for (k, &i) in ti.iter().enumerate() {
            for j in 0..width {
                tgt_feat.set(i, j, feat.get(half + k, j));
            }
        }
    }
    Ok(FullPass {
        source_commonness: WeightVector { w, raw },
        source_features: src_feat,
        target_features: tgt_feat,
    })
}
