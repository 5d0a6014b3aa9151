//! Seeded, parallel Monte Carlo replications over a grid of `(δ, n)` cells.
//!
//! Replication `i` of every cell uses the seed `replication_seed(base, i)`,
//! so cells share random numbers and the thread count never matters.

use std::collections::BTreeMap;

use ddc_core::asymptotics::{w_amse, w_av, LimitInputs};
use ddc_core::dgp::{sample_dataset, true_joint, JointDist, SampleSize};
use ddc_core::estimate::{k_stage_estimate, EstimatorKind, FirstStep, SampleAnalogues};
use ddc_core::model::ModelSpec;
use ddc_core::rng::replication_seed;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{estimator_kind, Config, EstimatorChoice, Scaling};
use crate::error::{HarnessError, Result};

/// Replications handed to the worker pool at a time; each batch is
/// persisted before the next one starts.
pub const CHUNK: usize = 250;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    /// `None` for a correctly specified design.
    pub delta: Option<f64>,
    pub n: u64,
}

pub struct CellSetup {
    pub cell: Cell,
    pub pi: JointDist,
    pub alpha_star: Vec<f64>,
    estimators: Vec<(EstimatorChoice, EstimatorKind)>,
}

pub struct Experiment {
    pub run_id: String,
    pub design: String,
    model: ModelSpec,
    first_step: FirstStep,
    cells: Vec<CellSetup>,
    pub estimators: Vec<EstimatorChoice>,
    pub k_values: Vec<usize>,
    pub replications: usize,
    pub base_seed: u64,
    pub scaling: Scaling,
    /// `W*_AV` per δ, in cell order of first appearance.
    pub weights: Vec<(Option<f64>, DMatrix<f64>)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataFlags {
    pub empty_cells: usize,
    pub empty_states: usize,
    pub clamped_states: usize,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub estimator: EstimatorChoice,
    pub k: usize,
    pub alpha: Vec<f64>,
    /// Every stage up to `k` converged.
    pub converged: bool,
    pub at_boundary: bool,
}

impl EstimateRecord {
    pub fn flagged(&self, data: &DataFlags) -> bool {
        data.flagged || !self.converged || self.at_boundary
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub estimator: Option<EstimatorChoice>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub run: String,
    pub design: String,
    pub delta: Option<f64>,
    pub n: u64,
    pub replication: u64,
    pub seed: u64,
    pub theta_f_hat: Option<Vec<f64>>,
    pub flags: DataFlags,
    pub estimates: Vec<EstimateRecord>,
    pub failures: Vec<FailureRecord>,
}

impl Experiment {
    /// Builds `Π*_n` for every cell and the optimal weights for every δ.
    pub fn prepare(config: &Config, replications: usize, run_id: &str) -> Result<Self> {
        let exp = &config.experiment;
        if replications < 2 {
            return Err(HarnessError::Usage("need at least 2 replications".into()));
        }
        let model = config.model.build()?;
        let first_step = config.design.first_step.build();
        let deltas: Vec<Option<f64>> = if config.design.is_correct() {
            vec![None]
        } else {
            exp.deltas.iter().map(|d| Some(d.value())).collect()
        };
        let mut cells = Vec::new();
        let mut weights = Vec::new();
        for delta in deltas {
            let design = config.design.build(&model, delta)?;
            let need_av = exp.estimators.contains(&EstimatorChoice::MdWAv);
            let need_amse = exp.estimators.contains(&EstimatorChoice::MdWAmse);
            let (wav, wamse) = if need_av || need_amse {
                let inputs = LimitInputs::from_design(&model, &design, &first_step)?;
                let wav = w_av(&inputs)?;
                let wamse = if need_amse { Some(w_amse(&inputs)?) } else { None };
                weights.push((delta, wav.clone()));
                (Some(wav), wamse)
            } else {
                (None, None)
            };
            let estimators = exp
                .estimators
                .iter()
                .map(|&e| Ok((e, estimator_kind(e, wav.as_ref(), wamse.as_ref())?)))
                .collect::<ddc_core::Result<Vec<_>>>()?;
            for &n in &exp.sample_sizes {
                cells.push(CellSetup {
                    cell: Cell { delta, n },
                    pi: true_joint(&model, &design, SampleSize::Finite(n))?,
                    alpha_star: design.theta_u.clone(),
                    estimators: estimators.clone(),
                });
            }
        }
        Ok(Self {
            run_id: run_id.to_string(),
            design: config.design.name.clone(),
            model,
            first_step,
            cells,
            estimators: exp.estimators.clone(),
            k_values: exp.k_values.clone(),
            replications,
            base_seed: exp.base_seed,
            scaling: exp.scaling,
            weights,
        })
    }

    pub fn cells(&self) -> &[CellSetup] {
        &self.cells
    }

    pub fn seed(&self, index: u64) -> u64 {
        replication_seed(self.base_seed, index)
    }

    pub fn replicate(&self, cell: usize, index: u64) -> ReplicationRecord {
        self.replicate_with_seed(cell, index, self.seed(index))
    }

    /// One replication: draw, estimate with every estimator for the largest
    /// `K` and keep the requested stages. Failures are recorded, not raised.
    pub fn replicate_with_seed(&self, cell: usize, index: u64, seed: u64) -> ReplicationRecord {
        let setup = &self.cells[cell];
        let mut rec = ReplicationRecord {
            run: self.run_id.clone(),
            design: self.design.clone(),
            delta: setup.cell.delta,
            n: setup.cell.n,
            replication: index,
            seed,
            theta_f_hat: None,
            flags: DataFlags::default(),
            estimates: Vec::new(),
            failures: Vec::new(),
        };
        let data = sample_dataset(&setup.pi, setup.cell.n as usize, seed);
        let analogues = match SampleAnalogues::from_dataset(&data) {
            Ok(a) => a,
            Err(e) => {
                rec.failures.push(FailureRecord {
                    estimator: None,
                    message: e.to_string(),
                });
                return rec;
            }
        };
        rec.flags = DataFlags {
            empty_cells: analogues.empty_cells.iter().filter(|e| **e).count(),
            empty_states: analogues.empty_states.iter().filter(|e| **e).count(),
            clamped_states: analogues.clamped_states.iter().filter(|e| **e).count(),
            flagged: analogues.flagged(),
        };
        match self.first_step.estimate(&data) {
            Ok(t) => rec.theta_f_hat = Some(t),
            Err(e) => {
                rec.failures.push(FailureRecord {
                    estimator: None,
                    message: e.to_string(),
                });
                return rec;
            }
        }
        let max_k = self.k_values.iter().copied().max().unwrap_or(1);
        for (choice, kind) in &setup.estimators {
            match k_stage_estimate(&self.model, &data, &analogues, max_k, kind, &self.first_step, None) {
                Ok(trace) => {
                    for &k in &self.k_values {
                        rec.estimates.push(EstimateRecord {
                            estimator: *choice,
                            k,
                            alpha: trace.alpha_stages[k - 1].clone(),
                            converged: trace.converged[..k].iter().all(|c| *c),
                            at_boundary: trace.at_boundary[k - 1],
                        });
                    }
                }
                Err(e) => rec.failures.push(FailureRecord {
                    estimator: Some(*choice),
                    message: e.to_string(),
                }),
            }
        }
        rec
    }

    /// Runs replications `done[c]..S` of every cell `c`, in cell order and in
    /// batches of [`CHUNK`]; `sink` sees each batch in index order.
    pub fn run_with(
        &self,
        pool: &rayon::ThreadPool,
        done: &[usize],
        mut sink: impl FnMut(&[ReplicationRecord]) -> Result<()>,
    ) -> Result<()> {
        for c in 0..self.cells.len() {
            let mut lo = done.get(c).copied().unwrap_or(0);
            while lo < self.replications {
                let hi = (lo + CHUNK).min(self.replications);
                let batch: Vec<ReplicationRecord> = pool.install(|| {
                    (lo..hi)
                        .into_par_iter()
                        .map(|i| self.replicate(c, i as u64))
                        .collect()
                });
                sink(&batch)?;
                lo = hi;
            }
        }
        Ok(())
    }
}

pub fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Experiment(e.to_string()))
}

/// Runs everything in memory and summarizes with the configured scaling.
pub fn run_experiment(exp: &Experiment, workers: usize) -> Result<(Vec<ReplicationRecord>, Vec<SummaryRow>)> {
    let pool = thread_pool(workers)?;
    let mut records = Vec::with_capacity(exp.cells.len() * exp.replications);
    exp.run_with(&pool, &[], |batch| {
        records.extend_from_slice(batch);
        Ok(())
    })?;
    let rows = summary_rows(exp, &records, exp.scaling, false);
    Ok((records, rows))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledStats {
    pub bias: f64,
    pub sd: f64,
    pub mse: f64,
    /// Standard error of `bias`.
    pub mcse_bias: f64,
}

/// Per-coordinate `n^r(mean − α*)`, `n^r·SD` (divisor `S − 1`) and
/// `n^{2r}·mean((α̂ − α*)²)`.
pub fn summarize(estimates: &[Vec<f64>], n: u64, r: f64, alpha_star: &[f64]) -> Result<Vec<ScaledStats>> {
    if !(r > 0.0) {
        return Err(HarnessError::Usage(format!("scaling exponent {r} must be positive")));
    }
    let s = estimates.len();
    if s < 2 {
        return Err(HarnessError::Experiment(format!("{s} valid records, need 2")));
    }
    let scale = (n as f64).powf(r);
    let sf = s as f64;
    Ok(alpha_star
        .iter()
        .enumerate()
        .map(|(k, &truth)| {
            let mean = estimates.iter().map(|a| a[k]).sum::<f64>() / sf;
            let var = estimates.iter().map(|a| (a[k] - mean).powi(2)).sum::<f64>() / (sf - 1.0);
            let mse = estimates.iter().map(|a| (a[k] - truth).powi(2)).sum::<f64>() / sf;
            let sd = var.sqrt();
            ScaledStats {
                bias: scale * (mean - truth),
                sd: scale * sd,
                mse: scale * scale * mse,
                mcse_bias: scale * sd / sf.sqrt(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub design: String,
    pub delta: Option<f64>,
    pub estimator: EstimatorChoice,
    pub k: usize,
    pub n: u64,
    /// 1-based coordinate of `α`.
    pub coord: usize,
    pub r: f64,
    pub scaled_bias: f64,
    pub scaled_sd: f64,
    pub scaled_mse: f64,
    pub mcse_bias: f64,
    pub s_valid: usize,
    pub s_flagged: usize,
}

/// One row per cell, estimator, `K` and coordinate. Failed estimates are
/// dropped; flagged ones are counted and, if `exclude_flagged`, dropped too.
/// Statistics are NaN when fewer than two estimates remain.
pub fn summary_rows(
    exp: &Experiment,
    records: &[ReplicationRecord],
    scaling: Scaling,
    exclude_flagged: bool,
) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for setup in &exp.cells {
        let cell = setup.cell;
        let in_cell: Vec<&ReplicationRecord> = records
            .iter()
            .filter(|r| r.n == cell.n && r.delta == cell.delta)
            .collect();
        let r = scaling.exponent(cell.delta);
        for &est in &exp.estimators {
            for &k in &exp.k_values {
                let mut values = Vec::new();
                let mut flagged = 0;
                for rec in &in_cell {
                    if let Some(e) = rec.estimates.iter().find(|e| e.estimator == est && e.k == k) {
                        let f = e.flagged(&rec.flags);
                        if f {
                            flagged += 1;
                        }
                        if !(f && exclude_flagged) {
                            values.push(e.alpha.clone());
                        }
                    }
                }
                let stats = summarize(&values, cell.n, r, &setup.alpha_star).ok();
                for coord in 0..setup.alpha_star.len() {
                    let s = stats.as_ref().map(|s| s[coord]);
                    rows.push(SummaryRow {
                        design: exp.design.clone(),
                        delta: cell.delta,
                        estimator: est,
                        k,
                        n: cell.n,
                        coord: coord + 1,
                        r,
                        scaled_bias: s.map_or(f64::NAN, |s| s.bias),
                        scaled_sd: s.map_or(f64::NAN, |s| s.sd),
                        scaled_mse: s.map_or(f64::NAN, |s| s.mse),
                        mcse_bias: s.map_or(f64::NAN, |s| s.mcse_bias),
                        s_valid: values.len(),
                        s_flagged: flagged,
                    });
                }
            }
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KGap {
    pub design: String,
    pub delta: Option<f64>,
    pub estimator: EstimatorChoice,
    pub n: u64,
    pub coord: usize,
    pub k_a: usize,
    pub k_b: usize,
    pub bias_gap: f64,
    pub sd_gap: f64,
}

/// Absolute differences of scaled bias and SD between every pair of `K`
/// values within a cell, estimator and coordinate.
pub fn k_invariance_report(rows: &[SummaryRow]) -> Vec<KGap> {
    let mut groups: BTreeMap<(String, u64, u64, String, usize), Vec<&SummaryRow>> = BTreeMap::new();
    let mut order = Vec::new();
    for row in rows {
        let key = (
            row.design.clone(),
            row.delta.map_or(u64::MAX, f64::to_bits),
            row.n,
            format!("{:?}", row.estimator),
            row.coord,
        );
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(row);
    }
    let mut out = Vec::new();
    for key in order {
        let g = &groups[&key];
        for (i, a) in g.iter().enumerate() {
            for b in &g[i + 1..] {
                out.push(KGap {
                    design: a.design.clone(),
                    delta: a.delta,
                    estimator: a.estimator,
                    n: a.n,
                    coord: a.coord,
                    k_a: a.k,
                    k_b: b.k,
                    bias_gap: (a.scaled_bias - b.scaled_bias).abs(),
                    sd_gap: (a.scaled_sd - b.scaled_sd).abs(),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summarize_exact_truth_is_zero() {
        let v = vec![vec![1.0, 0.05]; 5];
        let s = summarize(&v, 1000, 0.5, &[1.0, 0.05]).unwrap();
        assert!(s.iter().all(|s| s.bias == 0.0 && s.sd == 0.0 && s.mse == 0.0));
    }

    #[test]
    fn summarize_two_records() {
        let e = 0.01;
        let v = vec![vec![0.05 + e], vec![0.05 - e]];
        let s = summarize(&v, 100, 0.5, &[0.05]).unwrap()[0];
        assert!(s.bias.abs() < 1e-14);
        assert!((s.sd - 10.0 * e * 2f64.sqrt()).abs() < 1e-12);
        assert!((s.mse - 100.0 * e * e).abs() < 1e-12);
    }

    #[test]
    fn summarize_needs_two() {
        assert!(summarize(&[vec![1.0]], 10, 0.5, &[1.0]).is_err());
        assert!(summarize(&[vec![1.0], vec![2.0]], 10, 0.0, &[1.0]).is_err());
    }

    fn row(k: usize, bias: f64, sd: f64) -> SummaryRow {
        SummaryRow {
            design: "d".into(),
            delta: Some(0.5),
            estimator: EstimatorChoice::Ml,
            k,
            n: 100,
            coord: 2,
            r: 0.5,
            scaled_bias: bias,
            scaled_sd: sd,
            scaled_mse: 0.0,
            mcse_bias: 0.0,
            s_valid: 2,
            s_flagged: 0,
        }
    }

    #[test]
    fn k_report_pairs() {
        assert!(k_invariance_report(&[row(1, 0.1, 0.2)]).is_empty());
        let r = k_invariance_report(&[row(1, 0.1, 0.2), row(3, 0.15, 0.25), row(10, 0.15, 0.2)]);
        assert_eq!(r.len(), 3);
        assert_eq!((r[0].k_a, r[0].k_b), (1, 3));
        assert!((r[2].bias_gap).abs() < 1e-15);
        assert!((r[2].sd_gap - 0.05).abs() < 1e-12);
    }
}
