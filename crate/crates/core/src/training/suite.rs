//! Multi-seed runs scored on the target test split.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LoadedModel, Trainer, TrainingConfig};
use crate::data::TransferPair;
use crate::diffcore::checkpoint;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_corpus, CorpusEval};
use crate::model::ModelMode;

pub const LOG_FILE: &str = "epochs.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub best_epoch: usize,
    pub val_ads_f1: f64,
    /// Scores of the selected checkpoint on the target test split.
    pub test: CorpusEval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub mode: ModelMode,
    pub runs: Vec<RunSummary>,
    pub ad_mean: f64,
    pub ad_std: f64,
    pub ads_mean: f64,
    pub ads_std: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl SuiteReport {
    pub fn from_runs(mode: ModelMode, runs: Vec<RunSummary>) -> Self {
        let ad: Vec<f64> = runs.iter().map(|r| r.test.ad.micro_f1).collect();
        let ads: Vec<f64> = runs.iter().map(|r| r.test.ads.micro_f1).collect();
        let (ad_mean, ad_std) = mean_std(&ad);
        let (ads_mean, ads_std) = mean_std(&ads);
        SuiteReport {
            mode,
            runs,
            ad_mean,
            ad_std,
            ads_mean,
            ads_std,
        }
    }
}

/// Train one model per seed. With `out_dir`, each run writes its epoch log
/// (a config header line, then one JSON record per epoch) and best
/// checkpoint to `out_dir/seed-<n>/`. `progress` receives one line
/// per epoch.
pub fn run_suite(
    pair: &TransferPair,
    config: &TrainingConfig,
    embeddings: Option<&Path>,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&str),
) -> Result<SuiteReport> {
    config.validate()?;
    let mut runs = Vec::new();
    for &seed in &config.seeds {
        let mut trainer = Trainer::new(pair, config, seed, embeddings)?;
        let dir = out_dir.map(|d| d.join(format!("seed-{seed}")));
        let mut log = match &dir {
            Some(d) => {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                let p = d.join(LOG_FILE);
                let mut f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
                let header = serde_json::json!({ "config": config, "seed": seed });
                writeln!(f, "{header}").map_err(|e| Error::io(&p, e))?;
                Some((f, p))
            }
            None => None,
        };
        let outcome = trainer.fit(|r| {
            progress(&format!(
                "seed {seed} epoch {:>3}  L_M {:.4}  L_O {:.4}  L_D {:.4}  val AD {:.4}  val ADS {:.4}{}",
                r.epoch,
                r.loss_main,
                r.loss_opinion,
                r.loss_domain,
                r.val_ad_f1,
                r.val_ads_f1,
                if r.best { "  *" } else { "" }
            ));
            if let Some((f, p)) = log.as_mut() {
                let line = serde_json::to_string(r)?;
                writeln!(f, "{line}").map_err(|e| Error::io(&*p, e))?;
            }
            Ok(())
        })?;
        let best = outcome
            .best
            .ok_or_else(|| Error::Config("epochs must be at least 1".into()))?;
        if let Some(d) = &dir {
            checkpoint::save(&best.checkpoint, &d.join(BEST_CHECKPOINT))?;
        }
        let loaded = LoadedModel::from_checkpoint(best.checkpoint)?;
        let test = evaluate_corpus(&loaded.model, &loaded.store, &loaded.meta.vocab, &pair.target_test)?;
        progress(&format!(
            "seed {seed} best epoch {}  target test AD {:.4}  ADS {:.4}",
            best.epoch, test.ad.micro_f1, test.ads.micro_f1
        ));
        runs.push(RunSummary {
            seed,
            best_epoch: best.epoch,
            val_ads_f1: best.val_ads_f1,
            test,
        });
    }
    Ok(SuiteReport::from_runs(config.model.mode, runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
    }
}
