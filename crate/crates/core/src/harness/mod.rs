//! Synthetic tasks, diagnostics, benchmarks and CSV output.

mod bench;
mod diagnostics;
mod tasks;

use std::io::Write;

use serde::Serialize;

pub use bench::{bench, BenchOptions, BenchRecord, Direction, Precision};
pub use diagnostics::attention_mass_profile;
pub use tasks::{gen_task, Lexicon, RecallVocab, SynthTaskSpec, TaskKind, TaskSample};

use crate::error::{Error, Result};
use crate::inference::{decode_step, greedy, prefill, Prefilled};
use crate::layout::{raw_aug_index, TokenKind};
use crate::model::{LossReport, Model, Trainer};

/// Writes `rows` as CSV with a header taken from the record's field names.
pub fn write_csv<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::InvalidConfig(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::InvalidConfig(format!("csv: {e}")))
}

/// One row of a training loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub mean_ce: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Runs `steps` optimizer steps, cycling through `data` in batches.
pub fn run_training(
    trainer: &mut Trainer,
    data: &[Vec<u32>],
    steps: usize,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<LossReport>> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("no training data".into()));
    }
    let bs = trainer.config.batch_size;
    let mut reports = Vec::with_capacity(steps);
    for _ in 0..steps {
        let start = trainer.step_index() * bs;
        let batch: Vec<Vec<u32>> = (0..bs).map(|i| data[(start + i) % data.len()].clone()).collect();
        let lr = trainer.config.lr_at(trainer.step_index());
        let report = trainer.train_step(&batch)?;
        on_step(&StepLog {
            step: trainer.step_index(),
            mean_ce: report.mean_ce,
            grad_norm: report.grad_norm,
            lr,
        });
        reports.push(report);
    }
    Ok(reports)
}

/// Exact-match recall scored through the compressing cache.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecallScore {
    pub correct: usize,
    pub total: usize,
    /// Samples whose fact tokens were no longer in the cache at query time.
    pub needle_evicted: usize,
}

impl RecallScore {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// For each sample, prefills the longest ratio-aligned prefix before its first eval
/// position in chunks of `chunk` raw tokens, decodes the remaining context tokens one
/// by one, and greedily predicts the answer from the cache.
pub fn score_recall(model: &Model, samples: &[TaskSample], chunk: usize) -> Result<RecallScore> {
    let voc = RecallVocab::new(model.config.vocab)?;
    let r = model.compression.ratio;
    let mut score = RecallScore {
        correct: 0,
        total: 0,
        needle_evicted: 0,
    };
    for s in samples {
        let answer = *s
            .eval_positions
            .first()
            .ok_or_else(|| Error::InvalidConfig("sample without eval position".into()))?;
        let split = answer / r * r;
        let Prefilled {
            mut cache,
            mut state,
            mut logits,
            ..
        } = prefill(model, &s.tokens[..split], chunk)?;
        for &tok in &s.tokens[split..answer] {
            logits = decode_step(model, &mut cache, &mut state, tok)?;
        }
        let fact = s.tokens.iter().position(|&t| t == voc.fact).unwrap_or(answer);
        let value_slot = raw_aug_index(fact + 2, &model.compression);
        let resident = cache
            .layers
            .iter()
            .any(|layer| layer.iter().any(|e| e.kind == TokenKind::Raw && e.aug_index <= value_slot));
        score.total += 1;
        score.needle_evicted += usize::from(!resident);
        score.correct += usize::from(greedy(&logits, model.config.vocab) == s.tokens[answer]);
    }
    Ok(score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BoundaryBucket;

    #[test]
    fn csv_headers_follow_schemas() {
        let mut buf = Vec::new();
        let rows = bench(&BenchOptions {
            lengths: vec![64],
            ratios: vec![4],
            max_timed_len: 0,
            sink_count: 4,
            window_units: 2,
            block_size: 8,
            ..BenchOptions::default()
        })
        .unwrap();
        write_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "T,ratio,direction,sparse_entries,dense_entries,entry_ratio,host_ms_sparse,host_ms_dense"
        );
        assert!(lines.next().unwrap().starts_with("64,4,forward,"));

        let mut buf = Vec::new();
        write_csv(&mut buf, &[BoundaryBucket { rel_pos: 0, mean_ce: 1.5, count: 3 }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "rel_pos,mean_ce,count\n0,1.5,3\n");

        let mut buf = Vec::new();
        let row = crate::inference::TraceRow { step: 1, layer: 0, sinks: 2, gists: 3, raws: 4 };
        write_csv(&mut buf, &[row]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,layer,sinks,gists,raws\n1,0,2,3,4\n");
    }
}
