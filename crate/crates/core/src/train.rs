//! Two-phase training: AdamW on the reconstruction/VQ objective, then a
//! pass over the training windows that records codebook activations and
//! builds the memory bank.

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::Standardizer;
use crate::error::{CometError, Result};
use crate::ndmath::{AdamW, Matrix, Rng};
use crate::network::{accumulate_objective, embedding_losses, forward_window, LossParts, ModelParams};
use crate::pipeline::{window_batches, Detector};
use crate::vq::{build_memory_bank, ActivationSet};

/// Mean loss terms of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train: LossParts,
    pub train_total: f64,
    pub val: Option<LossParts>,
    pub val_total: Option<f64>,
}

impl EpochStats {
    /// Stable `key=value` log line.
    pub fn log_line(&self) -> String {
        let mut s = format!(
            "epoch={} rec={:.6e} cb={:.6e} cm={:.6e} total={:.6e}",
            self.epoch, self.train.rec, self.train.codebook, self.train.commitment, self.train_total
        );
        if let (Some(v), Some(t)) = (self.val, self.val_total) {
            s.push_str(&format!(
                " val_rec={:.6e} val_cb={:.6e} val_cm={:.6e} val_total={:.6e}",
                v.rec, v.codebook, v.commitment, t
            ));
        }
        s
    }
}

/// Everything needed to score new data.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub detector: Detector,
    pub stats: Option<Standardizer>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
}

/// Gradient of the batch-mean objective, summed window by window in order
/// so the result does not depend on the thread count.
pub fn batch_gradient(params: &ModelParams, batch: &[&Matrix], cfg: &RunConfig) -> Result<(ModelParams, LossParts)> {
    let template = params.zeros_like();
    let per_window: Vec<(ModelParams, LossParts)> = batch
        .par_iter()
        .map(|w| {
            let fwd = forward_window(params, w)?;
            // every window of a batch has the same embedding count
            let total = batch.len() * fwd.num_embeddings();
            let weights = vec![1.0 / total as f64; fwd.num_embeddings()];
            let mut g = template.clone();
            let lp = accumulate_objective(params, &fwd, &weights, None, cfg.train.alpha, cfg.train.beta, &mut g)?;
            Ok((g, lp))
        })
        .collect::<Result<_>>()?;
    let mut grads = template;
    let mut loss = LossParts::default();
    for (g, lp) in &per_window {
        grads.add_assign(g)?;
        loss.add(*lp);
    }
    Ok((grads, loss))
}

/// Mean loss terms over every embedding of `windows`.
pub fn mean_losses(params: &ModelParams, windows: &[&Matrix]) -> Result<LossParts> {
    let sums: Vec<(LossParts, usize)> = windows
        .par_iter()
        .map(|w| {
            let fwd = forward_window(params, w)?;
            let parts = embedding_losses(params, &fwd)?;
            let mut s = LossParts::default();
            for p in &parts {
                s.add(*p);
            }
            Ok((s, parts.len()))
        })
        .collect::<Result<_>>()?;
    let mut total = LossParts::default();
    let mut count = 0;
    for (s, n) in sums {
        total.add(s);
        count += n;
    }
    let c = count.max(1) as f64;
    Ok(LossParts {
        rec: total.rec / c,
        codebook: total.codebook / c,
        commitment: total.commitment / c,
    })
}

/// Records every `(scale, index)` selected while encoding `windows`.
pub fn collect_activations(params: &ModelParams, windows: &[&Matrix]) -> Result<ActivationSet> {
    let per: Vec<ActivationSet> = windows
        .par_iter()
        .map(|w| {
            let fwd = forward_window(params, w)?;
            let mut set = ActivationSet::new();
            for (k, i, j) in fwd.positions() {
                set.record(k, fwd.index(k, i, j));
            }
            Ok(set)
        })
        .collect::<Result<_>>()?;
    let mut all = ActivationSet::new();
    for s in per {
        for (k, m) in s.iter() {
            all.record(k, m);
        }
    }
    Ok(all)
}

/// Trains on a standardized series. `on_epoch` receives each epoch's stats.
pub fn train(
    series: &Matrix,
    cfg: &RunConfig,
    stats: Option<Standardizer>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutput> {
    cfg.validate()?;
    let all: Vec<(usize, Matrix)> = window_batches(series, cfg, usize::MAX)?
        .into_iter()
        .flatten()
        .collect();
    let n_val = (cfg.train.validation_fraction * all.len() as f64).floor() as usize;
    let n_train = all.len() - n_val;
    if n_train == 0 {
        return Err(CometError::Data(format!(
            "no training windows left after reserving {n_val} for validation"
        )));
    }
    let train_w: Vec<&Matrix> = all[..n_train].iter().map(|(_, m)| m).collect();
    let val_w: Vec<&Matrix> = all[n_train..].iter().map(|(_, m)| m).collect();

    let mut rng = Rng::new(cfg.seed);
    let mut params = ModelParams::init(cfg, series.cols(), &mut rng)?;
    let mut optimizer = AdamW::new(cfg.train.learning_rate, cfg.train.weight_decay);
    let (alpha, beta) = (cfg.train.alpha, cfg.train.beta);
    let mut history = Vec::with_capacity(cfg.train.epochs);
    let mut order: Vec<usize> = (0..n_train).collect();

    for epoch in 1..=cfg.train.epochs {
        rng.shuffle(&mut order);
        let mut sum = LossParts::default();
        for chunk in order.chunks(cfg.train.batch_size) {
            let batch: Vec<&Matrix> = chunk.iter().map(|&i| train_w[i]).collect();
            let (grads, loss) = batch_gradient(&params, &batch, cfg)?;
            let share = batch.len() as f64 / n_train as f64;
            sum.rec += loss.rec * share;
            sum.codebook += loss.codebook * share;
            sum.commitment += loss.commitment * share;
            let mut targets = params.tensors_mut();
            optimizer.step(&mut targets, &grads.tensors())?;
            if !params.all_finite() {
                return Err(CometError::Numeric(format!("non-finite parameters in epoch {epoch}")));
            }
        }
        let val = if val_w.is_empty() {
            None
        } else {
            Some(mean_losses(&params, &val_w)?)
        };
        let stats = EpochStats {
            epoch,
            train: sum,
            train_total: sum.total(alpha, beta),
            val,
            val_total: val.map(|v| v.total(alpha, beta)),
        };
        on_epoch(&stats);
        history.push(stats);
    }

    let every: Vec<&Matrix> = all.iter().map(|(_, m)| m).collect();
    let activations = collect_activations(&params, &every)?;
    let bank = build_memory_bank(&params.codebooks, &activations, cfg.scoring.n_sigma)?;
    Ok(TrainOutput {
        checkpoint: Checkpoint {
            detector: Detector {
                config: cfg.clone(),
                params,
                activations,
                bank,
            },
            stats,
        },
        history,
    })
}
