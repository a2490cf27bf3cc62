use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{dual_flow_batch, Corpus, SyntheticSample};
use crate::error::{GilaError, Result};
use crate::numerics::{Adam, Ctx, LrSchedule, Mode, ParamStore, Purpose, Real, RngStream};

use super::checkpoint;
use super::config::RunConfig;
use super::loss::{batch_loss, Breakdown, LossRng};
use super::model::GilaModel;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: Breakdown,
    pub lr: f64,
}

/// `step,loss_total,loss_asr,loss_wl_<i>...,loss_cl_<jk>...,lr`, with a
/// `loss_div` column only when the diversity penalty is on.
pub fn metrics_header(cfg: &RunConfig) -> String {
    let mut cols = vec!["step".to_string(), "loss_total".into(), "loss_asr".into()];
    cols.extend(cfg.align.within.iter().map(|w| format!("loss_wl_{}", w.layer)));
    cols.extend(cfg.align.cross.iter().map(|p| format!("loss_cl_{}{}", p.j, p.k)));
    if cfg.align.codebook.diversity_weight > 0.0 {
        cols.push("loss_div".into());
    }
    cols.push("lr".into());
    cols.join(",")
}

impl MetricsRow {
    pub fn csv(&self, with_diversity: bool) -> String {
        let mut s = format!("{},{},{}", self.step, self.loss.total, self.loss.asr);
        for v in self.loss.wl.iter().chain(&self.loss.cl) {
            let _ = write!(s, ",{v}");
        }
        if with_diversity {
            let _ = write!(s, ",{}", self.loss.diversity);
        }
        let _ = write!(s, ",{}", self.lr);
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<R: Real> {
    /// Parameters after the last step.
    pub model: GilaModel<R>,
    /// Parameters with the lowest validation loss (the final ones when
    /// there is no validation split).
    pub best: ParamStore<R>,
    pub best_step: u64,
    pub best_val_loss: Option<f64>,
    pub metrics: Vec<MetricsRow>,
}

impl<R: Real> TrainOutcome<R> {
    pub fn metrics_csv(&self) -> String {
        let cfg = &self.model.cfg;
        let div = cfg.align.codebook.diversity_weight > 0.0;
        let mut s = metrics_header(cfg);
        s.push('\n');
        for r in &self.metrics {
            s.push_str(&r.csv(div));
            s.push('\n');
        }
        s
    }

    pub fn best_model(&self) -> GilaModel<R> {
        GilaModel {
            cfg: self.model.cfg.clone(),
            net: self.model.net.clone(),
            store: self.best.clone(),
            step: self.best_step,
        }
    }
}

/// Mean eval-mode `L_ASR` over `samples`.
pub fn validation_loss<R: Real>(model: &mut GilaModel<R>, samples: &[SyntheticSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(GilaError::EmptySequence("validation split"));
    }
    let mut sum = 0.0;
    for s in samples {
        let net = &model.net;
        let mut cx = Ctx::new(&mut model.store, Mode::Eval, 0.0, RngStream::new(0, 0));
        let enc = net.forward(&mut cx, s)?;
        let l = net.recognizer.asr_loss(&mut cx, enc.memory, &s.tokens())?;
        sum += cx.tape.scalar(l).as_f64();
    }
    Ok(sum / samples.len() as f64)
}

/// Training samples for `step`: distinct indices when the split allows.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = RngStream::derive(seed, Purpose::Batch, &[step]);
    if batch <= n {
        let pool: Vec<usize> = (0..n).collect();
        rng.choose_distinct(&pool, batch)
    } else {
        (0..batch).map(|_| rng.below(0, n)).collect()
    }
}

/// One optimizer step on the batch for 0-based `step`; returns the batch
/// mean of the loss breakdown.
pub fn train_step<R: Real>(
    model: &mut GilaModel<R>,
    corpus: &Corpus,
    step: u64,
    schedule: &LrSchedule,
    adam: &Adam,
) -> Result<MetricsRow> {
    let cfg = model.cfg.clone();
    let seed = cfg.seed;
    let idx = batch_indices(seed, step, corpus.train.len(), cfg.optim.batch_size);
    let temperature = cfg.align.codebook.temperature(step);
    let mut batch = Vec::with_capacity(idx.len());
    let mut rngs = Vec::with_capacity(idx.len());
    for (b, &i) in idx.iter().enumerate() {
        let keys = [step, b as u64];
        let mut noise_rng = RngStream::derive(seed, Purpose::Noise, &keys);
        batch.push(dual_flow_batch(
            corpus,
            &corpus.train[i],
            cfg.aug_mode(),
            cfg.aug.p_noise,
            cfg.aug.snr_db,
            &mut noise_rng,
        )?);
        rngs.push(LossRng::derive(seed, &keys));
    }
    model.store.zero_grads();
    let net = &model.net;
    let mut cx = Ctx::new(
        &mut model.store,
        Mode::Train,
        cfg.model.dropout,
        RngStream::derive(seed, Purpose::Dropout, &[step]),
    );
    let (loss, mean) = batch_loss(net, &mut cx, &batch, cfg.aug.lambda_c, temperature, &mut rngs)?;
    let grads = cx.tape.backward(loss)?;
    cx.tape.accumulate_param_grads(&grads, cx.store);
    if !(mean.total <= cfg.optim.divergence_threshold) {
        return Err(GilaError::numeric(format!(
            "training diverged at step {}: loss {} exceeds {}",
            step + 1,
            mean.total,
            cfg.optim.divergence_threshold
        )));
    }
    let lr = schedule.lr(step + 1);
    adam.step(&mut model.store, lr);
    model.step = step + 1;
    Ok(MetricsRow {
        step: step + 1,
        loss: mean,
        lr,
    })
}

/// Full training run. With `out`, writes `metrics.csv`, `config.json`,
/// `final.{json,bin}` and `best.{json,bin}` there.
pub fn train<R: Real>(cfg: RunConfig, out: Option<&Path>) -> Result<TrainOutcome<R>> {
    cfg.validate()?;
    let corpus = Corpus::generate(&cfg.corpus)?;
    let mut model = GilaModel::<R>::new(cfg.clone())?;
    let adam = Adam::default();
    let total = cfg.optim.total_steps;
    let mut metrics = Vec::with_capacity(total as usize);
    let mut best = model.store.clone();
    let mut best_step = 0;
    let mut best_val = None;

    if total > 0 {
        let schedule = LrSchedule::new(cfg.optim.peak_lr, cfg.optim.warmup_steps, total)?;
        for step in 0..total {
            let row = train_step(&mut model, &corpus, step, &schedule, &adam)?;
            log::debug!("step {} loss {:.5}", row.step, row.loss.total);
            metrics.push(row);
            let done = step + 1;
            let check = done == total || (cfg.optim.eval_every > 0 && done % cfg.optim.eval_every == 0);
            if check && !corpus.val.is_empty() {
                let v = validation_loss(&mut model, &corpus.val)?;
                log::info!("step {done}: val L_ASR {v:.5}");
                if best_val.is_none_or(|b| v < b) {
                    best_val = Some(v);
                    best = model.store.clone();
                    best_step = done;
                }
            }
        }
        if corpus.val.is_empty() {
            best = model.store.clone();
            best_step = total;
        }
    }

    let outcome = TrainOutcome {
        model,
        best,
        best_step,
        best_val_loss: best_val,
        metrics,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), outcome.metrics_csv())?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
        checkpoint::save_model(&dir.join("final"), &outcome.model)?;
        checkpoint::save(&dir.join("best"), &cfg, best_step, &outcome.best)?;
    }
    Ok(outcome)
}
