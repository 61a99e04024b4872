//! Train-then-evaluate runs and the branch ablation table.

use std::time::Instant;

use serde::Serialize;

use crate::data::{Dataset, Split};
use crate::error::Result;
use crate::eval::{evaluate, EvalReport, Feature};
use crate::model::ModelConfig;
use crate::trainer::{embed, train, Preset, TrainConfig, TrainLog, TrainedModel};

pub struct RunOutcome {
    pub model: TrainedModel,
    pub log: TrainLog,
    pub oim: EvalReport,
    pub trip: EvalReport,
    pub seconds: f64,
}

impl RunOutcome {
    pub fn report(&self, which: Feature) -> &EvalReport {
        match which {
            Feature::Oim => &self.oim,
            Feature::Trip => &self.trip,
        }
    }
}

/// Trains on the train split, then scores the query split against the
/// gallery split with both descriptors.
pub fn train_and_evaluate(ds: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig, max_rank: usize) -> Result<RunOutcome> {
    let t0 = Instant::now();
    let (model, log) = train(&ds.train(), model_cfg, cfg)?;
    let query = ds.split(Split::Query);
    let gallery = ds.split(Split::Gallery);
    let score = |which| -> Result<EvalReport> {
        let q = embed(model_cfg, &model.params, &query, which)?;
        let g = embed(model_cfg, &model.params, &gallery, which)?;
        evaluate(&q, &g, max_rank)
    };
    let oim = score(Feature::Oim)?;
    let trip = score(Feature::Trip)?;
    Ok(RunOutcome {
        model,
        log,
        oim,
        trip,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub config: String,
    pub feature: Feature,
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
}

pub const ABLATION_CSV_HEADER: &str = "config,feature,mAP,rank1,rank5";

/// One row per preset and descriptor, presets in [`Preset::ALL`] order.
/// Every preset shares `base.seed`.
pub fn ablation(ds: &Dataset, model_cfg: &ModelConfig, base: &TrainConfig, max_rank: usize) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(2 * Preset::ALL.len());
    for preset in Preset::ALL {
        let run = train_and_evaluate(ds, model_cfg, &base.with_preset(preset), max_rank)?;
        log::info!("{}: oim mAP {:.4}, trip mAP {:.4}", preset.name(), run.oim.map, run.trip.map);
        for which in [Feature::Oim, Feature::Trip] {
            let r = run.report(which);
            rows.push(AblationRow {
                config: preset.name().to_string(),
                feature: which,
                map: r.map,
                rank1: r.rank(1),
                rank5: r.rank(5),
            });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        s += &format!("{},{},{:.6},{:.6},{:.6}\n", r.config, r.feature.as_str(), r.map, r.rank1, r.rank5);
    }
    s
}

/// Median of a non-empty slice; the mean of the middle pair for even sizes.
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of nothing");
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
