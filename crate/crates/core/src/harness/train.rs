use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixers::Variant;
use crate::model::{adam_step, Batch, Model, OptimState};

use super::config::RunConfig;
use super::rng::{stream, Purpose};
use super::tasks::Task;

pub const CSV_HEADER: &str = "step,variant,seed,train_loss,eval_loss,token_accuracy,wall_ms";

/// One metrics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub step: usize,
    pub variant: Variant,
    pub seed: u64,
    /// Mean training loss since the previous row.
    pub train_loss: f64,
    pub eval_loss: f64,
    pub token_accuracy: f64,
    pub wall_ms: u64,
}

pub fn write_csv<W: Write>(out: W, rows: &[RunMetrics]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(CSV_HEADER.split(','))
        .map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(text: &str) -> Result<Vec<RunMetrics>> {
    let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::InvalidConfig(format!("unexpected CSV header `{}`", header.join(","))));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidConfig(format!("csv: {other:?}")),
    }
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<RunMetrics>,
    pub model: Model<f32>,
    /// Digest of the training batch at each step, in step order.
    pub batch_digests: Vec<[u8; 32]>,
}

/// Held-out batches, fixed for the whole run.
fn eval_set(task: &Task, cfg: &RunConfig) -> Vec<Batch> {
    (0..cfg.train.eval_batches as u64)
        .map(|i| task.gen_batch(cfg.train.batch, &mut stream(cfg.train.seed, Purpose::Eval, i)))
        .collect()
}

/// Trains in `f32` and calls `observe` on each metrics row as it is produced.
pub fn train(cfg: &RunConfig, mut observe: impl FnMut(&RunMetrics)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let task = Task::new(&cfg.task)?;
    train_on(cfg, &task, &mut observe)
}

pub fn train_on(cfg: &RunConfig, task: &Task, observe: &mut impl FnMut(&RunMetrics)) -> Result<TrainOutcome> {
    let model_cfg = cfg.model_config();
    let mut model = Model::<f32>::init(&model_cfg)?;
    let mut opt = OptimState::new(cfg.train.adam(), model.params());
    let evals = eval_set(task, cfg);
    let start = Instant::now();
    let mut metrics = Vec::new();
    let mut digests = Vec::with_capacity(cfg.train.steps);
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);

    for step in 1..=cfg.train.steps {
        let batch = task.gen_batch(cfg.train.batch, &mut stream(cfg.train.seed, Purpose::Train, step as u64));
        digests.push(batch.digest());
        let (ev, grads) = model.loss_and_grads(&batch).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFiniteLoss { step },
            other => other,
        })?;
        if !ev.loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        opt.cfg.lr = cfg.train.lr_at(step);
        adam_step(model.params_mut(), &grads, &mut opt)?;
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        loss_sum += ev.loss;
        loss_n += 1;

        if step % cfg.train.eval_interval == 0 || step == cfg.train.steps {
            let (eval_loss, accuracy) = evaluate(&model, &evals)?;
            if !eval_loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let elapsed = start.elapsed().as_millis() as u64;
            let row = RunMetrics {
                step,
                variant: cfg.mixer.variant,
                seed: cfg.train.seed,
                train_loss: loss_sum / loss_n as f64,
                eval_loss,
                token_accuracy: accuracy,
                wall_ms: elapsed,
            };
            observe(&row);
            metrics.push(RunMetrics {
                wall_ms: if cfg.train.record_wall_ms { elapsed } else { 0 },
                ..row
            });
            (loss_sum, loss_n) = (0.0, 0);
            if cfg.train.target_accuracy.is_some_and(|a| accuracy >= a) {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        metrics,
        model,
        batch_digests: digests,
    })
}

/// Mean loss weighted by scored tokens, and token accuracy, over `batches`.
pub fn evaluate(model: &Model<f32>, batches: &[Batch]) -> Result<(f64, f64)> {
    let (mut loss, mut correct, mut counted) = (0.0, 0usize, 0usize);
    for b in batches {
        let e = model.evaluate(b)?;
        loss += e.loss * e.counted as f64;
        correct += e.correct;
        counted += e.counted;
    }
    if counted == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((loss / counted as f64, correct as f64 / counted as f64))
}

/// Runs `train` and writes `metrics.csv` and `checkpoint.bin` under `out`.
pub fn train_to_dir(cfg: &RunConfig, out: &Path, observe: impl FnMut(&RunMetrics)) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out)?;
    let outcome = train(cfg, observe)?;
    write_csv(std::fs::File::create(out.join("metrics.csv"))?, &outcome.metrics)?;
    crate::model::checkpoint::save(&out.join("checkpoint.bin"), &outcome.model)?;
    Ok(outcome)
}

/// Per-variant results of a comparison.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub variants: Vec<Variant>,
    pub outcomes: Vec<TrainOutcome>,
}

impl Comparison {
    /// All metric rows, grouped by variant in the requested order.
    pub fn rows(&self) -> Vec<RunMetrics> {
        self.outcomes.iter().flat_map(|o| o.metrics.iter().cloned()).collect()
    }

    /// Final eval loss per variant followed by pairwise gaps.
    pub fn summary(&self) -> String {
        let finals: Vec<(Variant, Option<&RunMetrics>)> =
            self.variants.iter().zip(&self.outcomes).map(|(v, o)| (*v, o.metrics.last())).collect();
        let mut s = String::from("variant      final_eval_loss  token_accuracy\n");
        for (v, m) in &finals {
            match m {
                Some(m) => s.push_str(&format!("{:<12} {:>15.4} {:>15.4}\n", v.label(), m.eval_loss, m.token_accuracy)),
                None => s.push_str(&format!("{:<12} {:>15} {:>15}\n", v.label(), "-", "-")),
            }
        }
        if finals.len() > 1 {
            s.push_str("\npairwise eval-loss gaps (row − column)\n");
            for (a, ma) in &finals {
                for (b, mb) in &finals {
                    if let (Some(ma), Some(mb), true) = (ma, mb, a != b) {
                        s.push_str(&format!("{:<12} − {:<12} {:+.4}\n", a.label(), b.label(), ma.eval_loss - mb.eval_loss));
                    }
                }
            }
        }
        s
    }
}

/// Trains each variant on identical data and checks that every step saw the
/// same batch. With early stopping, runs are compared over their shared steps.
pub fn compare(cfg: &RunConfig, variants: &[Variant], mut observe: impl FnMut(&RunMetrics)) -> Result<Comparison> {
    cfg.validate()?;
    let task = Task::new(&cfg.task)?;
    let mut outcomes: Vec<TrainOutcome> = Vec::with_capacity(variants.len());
    for &v in variants {
        let o = train_on(&cfg.with_variant(v), &task, &mut observe)?;
        if let Some(first) = outcomes.first() {
            let shared = first.batch_digests.len().min(o.batch_digests.len());
            if first.batch_digests[..shared] != o.batch_digests[..shared] {
                return Err(Error::InvalidConfig(format!(
                    "variant {v} saw different training data than {}",
                    variants[0]
                )));
            }
        }
        outcomes.push(o);
    }
    Ok(Comparison {
        variants: variants.to_vec(),
        outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::parse_config;

    fn small(extra: &str) -> RunConfig {
        parse_config(&format!(
            "[model]\nlayers = 1\nhidden = 8\nheads = 2\n[task]\nvocab = 6\nseq_len = 8\n\
             [train]\nbatch = 2\neval_interval = 2\neval_batches = 1\n{extra}"
        ))
        .unwrap()
    }

    #[test]
    fn csv_round_trips_with_fixed_header() {
        let rows = vec![RunMetrics {
            step: 10,
            variant: Variant::KrrShare,
            seed: 3,
            train_loss: 1.25,
            eval_loss: 0.1 + 0.2,
            token_accuracy: 0.5,
            wall_ms: 17,
        }];
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(&format!("{CSV_HEADER}\n")));
        assert!(!text.contains('\r'));
        assert!(text.contains("10,krr-share,3,1.25,"));
        assert_eq!(read_csv(&text).unwrap(), rows);
    }

    #[test]
    fn zero_steps_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let out = train_to_dir(&small("steps = 0\n"), dir.path(), |_| {}).unwrap();
        assert!(out.metrics.is_empty());
        let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(text, format!("{CSV_HEADER}\n"));
        let init = Model::<f32>::init(&small("steps = 0\n").model_config()).unwrap();
        let back = crate::model::checkpoint::load::<f32>(&dir.path().join("checkpoint.bin"), init.config()).unwrap();
        assert_eq!(back.params(), init.params());
    }

    #[test]
    fn rows_follow_eval_interval_and_final_step() {
        let out = train(&small("steps = 5\n"), |_| {}).unwrap();
        let steps: Vec<usize> = out.metrics.iter().map(|m| m.step).collect();
        assert_eq!(steps, [2, 4, 5]);
        assert!(out.metrics.iter().all(|m| m.wall_ms == 0 && m.eval_loss.is_finite()));
    }

    #[test]
    fn single_variant_compare_equals_train() {
        let cfg = small("steps = 4\n");
        let t = train(&cfg, |_| {}).unwrap();
        let c = compare(&cfg, &[cfg.mixer.variant], |_| {}).unwrap();
        assert_eq!(c.rows(), t.metrics);
        assert!(c.summary().contains("krr"));
    }

    #[test]
    fn target_accuracy_stops_early() {
        let full = train(&small("steps = 6\n"), |_| {}).unwrap();
        let stopped = train(&small("steps = 6\ntarget_accuracy = 0.0\n"), |_| {}).unwrap();
        assert_eq!(stopped.metrics.len(), 1);
        assert_eq!(stopped.metrics[0], full.metrics[0]);
        assert_eq!(stopped.batch_digests[..], full.batch_digests[..2]);
    }

    #[test]
    fn non_finite_loss_names_step() {
        let err = train(&small("steps = 3\nlr = 1e30\n"), |_| {}).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { step } if step <= 3), "{err}");
    }
}
