//! Inference over a whole series: raw window scoring, the ordered EMA fold,
//! overlap averaging and the score-then-adapt stream.

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::windows;
use crate::error::{CometError, Result};
use crate::ndmath::{AdamW, Matrix};
use crate::network::{forward_window, ModelParams};
use crate::patching::{coverage, CoverageMap};
use crate::scoring::{aggregate, ema_normalize, window_scores, EmaState, MemoryTable, WindowScores};
use crate::tta::{refresh_coreset, tta_step, TtaReport};
use crate::vq::{ActivationSet, MemoryBank};

/// Per-timestep scores of a series.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSeries {
    pub mem: Vec<f64>,
    pub quant: Vec<f64>,
    pub score: Vec<f64>,
}

impl ScoreSeries {
    pub fn len(&self) -> usize {
        self.score.len()
    }

    pub fn is_empty(&self) -> bool {
        self.score.is_empty()
    }
}

/// Final scores of one window after normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowOutput {
    pub offset: usize,
    pub mem: Vec<f64>,
    pub quant: Vec<f64>,
    pub score: Vec<f64>,
}

/// Raw (unnormalized) scores of each window under fixed parameters.
pub fn raw_window_scores(
    params: &ModelParams,
    bank: &MemoryBank,
    cfg: &RunConfig,
    windows: &[Matrix],
) -> Result<Vec<WindowScores>> {
    let sc = &cfg.scoring;
    let table = MemoryTable::build(&params.codebooks, bank, sc.n_neighbors, sc.epsilon, sc.local_scaling)?;
    let len = windows.first().map_or(0, Matrix::rows);
    let coverages: Vec<CoverageMap> = params
        .scale_specs
        .iter()
        .map(|&s| coverage(s, len))
        .collect::<Result<_>>()?;
    windows
        .par_iter()
        .map(|w| {
            let fwd = forward_window(params, w)?;
            window_scores(&fwd, &table, &coverages, &sc.selection, sc.epsilon)
        })
        .collect()
}

/// Ordered fold of per-window normalization, one EMA state per score stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    mem: EmaState,
    quant: EmaState,
    normalize: bool,
    lambda: f64,
    eps: f64,
}

impl Normalizer {
    pub fn new(cfg: &RunConfig) -> Self {
        let sc = &cfg.scoring;
        Normalizer {
            mem: EmaState::new(sc.ema_momentum),
            quant: EmaState::new(sc.ema_momentum),
            normalize: sc.normalize,
            lambda: sc.lambda,
            eps: sc.epsilon,
        }
    }

    pub fn apply(&mut self, offset: usize, raw: &WindowScores) -> Result<WindowOutput> {
        let (mem, quant) = if self.normalize {
            (
                ema_normalize(&raw.mem, &mut self.mem, self.eps)?,
                ema_normalize(&raw.quant, &mut self.quant, self.eps)?,
            )
        } else {
            (raw.mem.clone(), raw.quant.clone())
        };
        let score = aggregate(&mem, &quant, self.lambda)?;
        Ok(WindowOutput {
            offset,
            mem,
            quant,
            score,
        })
    }
}

/// Averages overlapping window outputs per timestep.
pub fn assemble(len: usize, outputs: &[WindowOutput]) -> Result<ScoreSeries> {
    let mut mem = vec![0.0; len];
    let mut quant = vec![0.0; len];
    let mut score = vec![0.0; len];
    let mut count = vec![0usize; len];
    for w in outputs {
        if w.offset + w.score.len() > len {
            return Err(CometError::Shape(format!(
                "window at {} overruns the series length {len}",
                w.offset
            )));
        }
        for t in 0..w.score.len() {
            let at = w.offset + t;
            mem[at] += w.mem[t];
            quant[at] += w.quant[t];
            score[at] += w.score[t];
            count[at] += 1;
        }
    }
    if let Some(t) = count.iter().position(|&c| c == 0) {
        return Err(CometError::Shape(format!("timestep {t} is not covered by any window")));
    }
    for t in 0..len {
        let c = count[t] as f64;
        mem[t] /= c;
        quant[t] /= c;
        score[t] /= c;
    }
    Ok(ScoreSeries { mem, quant, score })
}

/// Detector state at inference time.
#[derive(Clone, Debug)]
pub struct Detector {
    pub config: RunConfig,
    pub params: ModelParams,
    pub activations: ActivationSet,
    pub bank: MemoryBank,
}

/// Scores windows batch by batch: each batch is scored with the current
/// state, then (with adaptation enabled) used for a TTA step and a coreset
/// refresh that only affect later batches.
#[derive(Clone, Debug)]
pub struct StreamDriver {
    params: ModelParams,
    bank: MemoryBank,
    activations: ActivationSet,
    config: RunConfig,
    optimizer: AdamW,
    normalizer: Normalizer,
    last_offset: Option<usize>,
    adapt: bool,
    pub reports: Vec<TtaReport>,
}

impl StreamDriver {
    pub fn new(detector: &Detector, adapt: bool) -> Self {
        let cfg = &detector.config;
        StreamDriver {
            params: detector.params.clone(),
            bank: detector.bank.clone(),
            activations: detector.activations.clone(),
            config: cfg.clone(),
            optimizer: AdamW::new(cfg.tta_learning_rate(), cfg.train.weight_decay),
            normalizer: Normalizer::new(cfg),
            last_offset: None,
            adapt: adapt && cfg.tta.enabled,
            reports: Vec::new(),
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    /// `batch` holds `(offset, window)` pairs; offsets must keep increasing
    /// across the whole stream.
    pub fn process_batch(&mut self, batch: &[(usize, Matrix)]) -> Result<Vec<WindowOutput>> {
        for (offset, _) in batch {
            if let Some(prev) = self.last_offset {
                if *offset <= prev {
                    return Err(CometError::Ordering(format!(
                        "window at offset {offset} arrives after offset {prev}"
                    )));
                }
            }
            self.last_offset = Some(*offset);
        }
        let mats: Vec<Matrix> = batch.iter().map(|(_, w)| w.clone()).collect();
        let raw = raw_window_scores(&self.params, &self.bank, &self.config, &mats)?;
        let out = batch
            .iter()
            .zip(&raw)
            .map(|((offset, _), r)| self.normalizer.apply(*offset, r))
            .collect::<Result<Vec<_>>>()?;

        if self.adapt {
            let report = tta_step(
                &mut self.params,
                &mut self.optimizer,
                &mats,
                &self.activations,
                &self.config,
            )?;
            if report.steps_taken > 0 {
                self.bank = refresh_coreset(&self.params, &self.activations, self.config.scoring.n_sigma)?;
            }
            log::debug!(
                "tta batch: normals={} abnormals={} contrastive={:.6} steps={}",
                report.normals,
                report.abnormals,
                report.contrastive,
                report.steps_taken
            );
            self.reports.push(report);
        }
        Ok(out)
    }
}

/// Splits a standardized `L×D` series into windows and groups them into
/// batches of `batch_windows`.
pub fn window_batches(series: &Matrix, cfg: &RunConfig, batch_windows: usize) -> Result<Vec<Vec<(usize, Matrix)>>> {
    let len = series.rows();
    if len < cfg.window.length {
        return Err(CometError::WindowTooShort {
            len,
            required: cfg.window.length,
        });
    }
    let d = series.cols();
    let offsets = windows(len, cfg.window.length, cfg.window.stride)?;
    let all: Vec<(usize, Matrix)> = offsets
        .into_iter()
        .map(|o| {
            let data = series.data()[o * d..(o + cfg.window.length) * d].to_vec();
            Matrix::from_vec(cfg.window.length, d, data).map(|m| (o, m))
        })
        .collect::<Result<_>>()?;
    let size = batch_windows.max(1);
    Ok(all.chunks(size).map(<[_]>::to_vec).collect())
}

impl Detector {
    /// Scores a standardized series with frozen parameters.
    pub fn score(&self, series: &Matrix) -> Result<ScoreSeries> {
        let batches = window_batches(series, &self.config, usize::MAX)?;
        let mut driver = StreamDriver::new(self, false);
        let mut outputs = Vec::new();
        for b in &batches {
            outputs.extend(driver.process_batch(b)?);
        }
        assemble(series.rows(), &outputs)
    }

    /// Scores a standardized series in TTA batches, adapting after each one.
    pub fn score_stream(&self, series: &Matrix) -> Result<(ScoreSeries, Vec<TtaReport>)> {
        let batches = window_batches(series, &self.config, self.config.tta_batch_windows())?;
        let mut driver = StreamDriver::new(self, true);
        let mut outputs = Vec::new();
        for b in &batches {
            outputs.extend(driver.process_batch(b)?);
        }
        Ok((assemble(series.rows(), &outputs)?, driver.reports))
    }
}
