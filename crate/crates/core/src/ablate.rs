//! Extractor and expansion-coefficient ablations on a fixed synthetic
//! benchmark: every configuration is trained from scratch and scored with the
//! same evaluator.

use std::fmt::Write as _;

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{self, Sample};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::model::{self, Model};
use crate::segbranch::Extractor;
use crate::tensor::Tensor4D;

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Benchmark {
    /// `train_size + test_size` samples from one generator stream, split in
    /// order.
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let (n_train, n_test) = (cfg.ablate.train_size, cfg.ablate.test_size);
        let mut all = data::synth_generate(&cfg.data.synth, n_train + n_test)?;
        let test = all.split_off(n_train);
        Ok(Self { train: all, test })
    }

    pub fn test_images(&self) -> Vec<(String, Tensor4D)> {
        self.test.iter().map(|s| (s.id.clone(), s.image.clone())).collect()
    }
}

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub extractor: Extractor,
    pub alpha: f64,
    pub seed: u64,
    pub report: EvalReport,
    pub model: Model,
}

/// Trains one configuration and evaluates it on the benchmark's test split.
pub fn train_and_evaluate(cfg: &RunConfig, bench: &Benchmark, extractor: Extractor, alpha: f64, seed: u64) -> Result<AblationRun> {
    let mut mc = cfg.model.clone();
    mc.seg.extractor = extractor;
    mc.mask.alpha = alpha;
    let mut model = Model::init(mc, seed)?;
    model::train(&mut model, &bench.train, &cfg.train, seed, |_| Ok(()))?;
    let dets = eval::detect_all(&model, &bench.test_images(), &cfg.infer)?;
    let report = eval::evaluate(&dets, &bench.test)?;
    Ok(AblationRun {
        extractor,
        alpha,
        seed,
        report,
        model,
    })
}

#[derive(Clone, Debug, Default)]
pub struct Ablation {
    pub runs: Vec<AblationRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub extractor: String,
    pub alpha: f64,
    pub runs: usize,
    pub map50: f64,
    pub map70: f64,
    pub map_o50: Option<f64>,
    pub map_o70: Option<f64>,
    /// Every run in the row has mAP@0.7 ≤ mAP@0.5 (overall and occluded).
    pub monotone: bool,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

impl Ablation {
    /// Runs the extractor comparison (every extractor × seed at the configured
    /// α) and the α sweep. Identical configurations are trained once.
    pub fn run<F>(cfg: &RunConfig, bench: &Benchmark, mut on_run: F) -> Result<Self>
    where
        F: FnMut(&AblationRun),
    {
        let a = &cfg.ablate;
        let mut plan: Vec<(Extractor, f64, u64)> = Vec::new();
        for &e in &a.extractors {
            for &s in &a.seeds {
                plan.push((e, cfg.model.mask.alpha, s));
            }
        }
        for &alpha in &a.alphas {
            for &s in &a.alpha_seeds {
                plan.push((a.alpha_extractor, alpha, s));
            }
        }
        let mut out = Self::default();
        for (e, alpha, s) in plan {
            if out.find(e, alpha, s).is_some() {
                continue;
            }
            let run = train_and_evaluate(cfg, bench, e, alpha, s)?;
            on_run(&run);
            out.runs.push(run);
        }
        Ok(out)
    }

    pub fn find(&self, extractor: Extractor, alpha: f64, seed: u64) -> Option<&AblationRun> {
        self.runs
            .iter()
            .find(|r| r.extractor == extractor && r.alpha.to_bits() == alpha.to_bits() && r.seed == seed)
    }

    fn summarize(&self, extractor: Extractor, alpha: f64, seeds: &[u64]) -> Result<SummaryRow> {
        let runs: Vec<&AblationRun> = seeds.iter().filter_map(|&s| self.find(extractor, alpha, s)).collect();
        if runs.is_empty() {
            return Err(Error::InvalidArgument(format!("no run for {} at alpha {alpha}", extractor.name())));
        }
        let col = |f: &dyn Fn(&EvalReport) -> Option<f64>| -> Option<f64> {
            let v: Vec<f64> = runs.iter().filter_map(|r| f(&r.report)).collect();
            median(&v)
        };
        Ok(SummaryRow {
            extractor: extractor.name().to_string(),
            alpha,
            runs: runs.len(),
            map50: col(&|r| Some(r.map50)).expect("non-empty"),
            map70: col(&|r| Some(r.map70)).expect("non-empty"),
            map_o50: col(&|r| r.map_o50),
            map_o70: col(&|r| r.map_o70),
            monotone: runs.iter().all(|r| r.report.check_monotone().is_ok()),
        })
    }

    /// One row per extractor: medians over the extractor seeds.
    pub fn extractor_table(&self, cfg: &RunConfig) -> Result<Vec<SummaryRow>> {
        cfg.ablate
            .extractors
            .iter()
            .map(|&e| self.summarize(e, cfg.model.mask.alpha, &cfg.ablate.seeds))
            .collect()
    }

    /// One row per α: medians over the α seeds.
    pub fn alpha_table(&self, cfg: &RunConfig) -> Result<Vec<SummaryRow>> {
        cfg.ablate
            .alphas
            .iter()
            .map(|&alpha| self.summarize(cfg.ablate.alpha_extractor, alpha, &cfg.ablate.alpha_seeds))
            .collect()
    }
}

pub fn format_table(title: &str, rows: &[SummaryRow]) -> String {
    let f = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    let mut s = format!("{title}\n");
    let _ = writeln!(
        s,
        "{:<22} {:>7} {:>4} {:>9} {:>9} {:>9} {:>9}  monotone",
        "extractor", "alpha", "runs", "mAP@0.5", "mAP@0.7", "mAP_O@0.5", "mAP_O@0.7"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<22} {:>7.4} {:>4} {:>9} {:>9} {:>9} {:>9}  {}",
            r.extractor,
            r.alpha,
            r.runs,
            f(Some(r.map50)),
            f(Some(r.map70)),
            f(r.map_o50),
            f(r.map_o70),
            if r.monotone { "yes" } else { "NO" }
        );
    }
    s
}

pub fn runs_csv(ablation: &Ablation) -> String {
    let f = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    let mut s = String::from("extractor,alpha,seed,map50,map70,map_o50,map_o70\n");
    for r in &ablation.runs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.extractor.name(),
            r.alpha,
            r.seed,
            r.report.map50,
            r.report.map70,
            f(r.report.map_o50),
            f(r.report.map_o70)
        );
    }
    s
}
