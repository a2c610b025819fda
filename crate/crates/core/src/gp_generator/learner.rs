use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_bounds, decide_training, initial_sample, metrics_with_grid_variance, select_batch,
    variance_summary, CandidateGrid, GpGenError, SelectionParams, TrainingPolicy,
};
use crate::history::NewPoint;
use crate::runtime::{GenFn, MessageTag};
use crate::surrogate::{rmse, train, Bounds, GpModel, TrainMethod};

/// Smallest noise variance the model is given.
const NOISE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum SelectionMode {
    /// Variance-ranked, radius-separated picks from the grid.
    #[default]
    Online,
    /// Fresh uniform batches; the model is still trained for metrics.
    UniformRandom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl TestSet {
    pub fn from_fn(x: Vec<Vec<f64>>, f: impl Fn(&[f64]) -> f64) -> Self {
        let y = x.iter().map(|p| f(p)).collect();
        Self { x, y }
    }
}

#[derive(Debug, Clone)]
pub struct GpGenConfig {
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
    pub batch_size: usize,
    pub points_per_dim: usize,
    pub policy: TrainingPolicy,
    /// Defaults to [`SelectionParams::for_bounds`].
    pub selection: Option<SelectionParams>,
    pub mode: SelectionMode,
    pub test_set: Option<TestSet>,
    pub metrics_path: Option<PathBuf>,
    /// Return after this many metrics rows.
    pub max_batches: Option<usize>,
}

impl GpGenConfig {
    pub fn new(lb: Vec<f64>, ub: Vec<f64>, batch_size: usize) -> Self {
        Self {
            lb,
            ub,
            batch_size,
            points_per_dim: 50,
            policy: TrainingPolicy::default(),
            selection: None,
            mode: SelectionMode::Online,
            test_set: None,
            metrics_path: None,
            max_batches: None,
        }
    }

    pub fn selection_params(&self) -> SelectionParams {
        self.selection
            .clone()
            .unwrap_or_else(|| SelectionParams::for_bounds(&self.lb, &self.ub, self.batch_size))
    }

    pub fn validate(&self) -> Result<(), GpGenError> {
        check_bounds(&self.lb, &self.ub)?;
        if self.batch_size == 0 {
            return Err(GpGenError::Selection("batch_size must be positive".into()));
        }
        self.policy.validate()?;
        let p = self.selection_params();
        if p.batch_size != self.batch_size {
            return Err(GpGenError::Selection(format!(
                "selection batch_size {} differs from batch_size {}",
                p.batch_size, self.batch_size
            )));
        }
        p.validate()?;
        if let Some(t) = &self.test_set {
            if t.x.is_empty() {
                return Err(GpGenError::EmptyTestSet);
            }
            if t.x.len() != t.y.len() || t.x.iter().any(|p| p.len() != self.lb.len()) {
                return Err(GpGenError::Bounds("test set shape does not match the bounds".into()));
            }
        }
        Ok(())
    }
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub n_train: usize,
    /// Error of the model on the newest batch before it was added. NaN on
    /// the first iteration.
    pub rmse_batch: f64,
    pub train_method: String,
    pub train_seconds: f64,
    pub select_seconds: f64,
    /// Wall time waiting for the batch that fed this iteration.
    pub sim_seconds: f64,
    pub mse_test: f64,
    pub mean_var: f64,
    pub max_var: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Next { row: MetricsRow, batch: Vec<Vec<f64>> },
    /// Nothing usable came back; try a fresh uniform batch.
    Reissue(Vec<Vec<f64>>),
}

/// The generator's state between batches, usable without a manager.
pub struct OnlineLearner {
    cfg: GpGenConfig,
    grid: CandidateGrid,
    params: SelectionParams,
    model: GpModel,
    xs: Vec<Vec<f64>>,
    ys: Vec<f64>,
    issued: Vec<Vec<f64>>,
    noise_fixed: bool,
    iteration: usize,
    csv: Option<csv::Writer<File>>,
}

impl OnlineLearner {
    pub fn new(cfg: GpGenConfig) -> Result<Self, GpGenError> {
        cfg.validate()?;
        let grid = CandidateGrid::new(&cfg.lb, &cfg.ub, cfg.points_per_dim)?;
        let params = cfg.selection_params();
        Ok(Self {
            model: GpModel::new(cfg.lb.len(), NOISE_FLOOR),
            grid,
            params,
            cfg,
            xs: Vec::new(),
            ys: Vec::new(),
            issued: Vec::new(),
            noise_fixed: false,
            iteration: 0,
            csv: None,
        })
    }

    pub fn model(&self) -> &GpModel {
        &self.model
    }

    pub fn grid(&self) -> &CandidateGrid {
        &self.grid
    }

    pub fn n_train(&self) -> usize {
        self.ys.len()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn initial_batch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<Vec<f64>> {
        let b = initial_sample(&self.cfg.lb, &self.cfg.ub, self.cfg.batch_size, rng);
        self.issued.extend(b.iter().cloned());
        b
    }

    /// Adds evaluations from an earlier run. Non-finite values are skipped
    /// as training data but their points stay excluded from selection.
    pub fn seed_data(&mut self, x: &[Vec<f64>], f: &[f64]) {
        for (p, &v) in x.iter().zip(f) {
            self.issued.push(p.clone());
            if v.is_finite() {
                self.xs.push(p.clone());
                self.ys.push(v);
            }
        }
    }

    /// Takes one evaluated batch and returns the next one.
    pub fn ingest<R: Rng + ?Sized>(
        &mut self,
        x: &[Vec<f64>],
        f: &[f64],
        sim_seconds: f64,
        rng: &mut R,
    ) -> Result<Step, GpGenError> {
        let dim = self.cfg.lb.len();
        let (vx, vy): (Vec<Vec<f64>>, Vec<f64>) = x
            .iter()
            .zip(f)
            .filter(|(p, v)| v.is_finite() && p.len() == dim)
            .map(|(p, v)| (p.clone(), *v))
            .unzip();
        if vy.len() < f.len() {
            log::info!("excluding {} non-finite results", f.len() - vy.len());
        }
        if vy.is_empty() {
            log::warn!("no usable results in batch; issuing a fresh uniform batch");
            return Ok(Step::Reissue(self.initial_batch(rng)));
        }
        if !self.noise_fixed {
            let mean_abs = vy.iter().map(|v| v.abs()).sum::<f64>() / vy.len() as f64;
            self.model
                .set_noise_variance((0.01 * mean_abs).powi(2).max(NOISE_FLOOR));
            self.noise_fixed = true;
        }
        self.iteration += 1;
        let rmse_batch = if self.model.is_empty() {
            f64::NAN
        } else {
            rmse(&mut self.model, &vx, &vy)?
        };
        self.xs.extend(vx);
        self.ys.extend(vy);
        let method = if rmse_batch.is_nan() {
            TrainMethod::Global {
                max_iter: self.cfg.policy.full_iters,
            }
        } else {
            decide_training(rmse_batch, std_dev(&self.ys), &self.cfg.policy)
        };

        let t = Instant::now();
        self.model.tell(&self.xs, &self.ys)?;
        let bounds = Bounds::for_model(&self.model);
        train(&mut self.model, method, &bounds, rng)?;
        let train_seconds = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let (_, var) = self.model.posterior(&self.grid.points)?;
        let batch = match self.cfg.mode {
            SelectionMode::Online => select_batch(&self.grid, &var, &self.params, &self.issued)?
                .indices
                .iter()
                .map(|&i| self.grid.points[i].clone())
                .collect(),
            SelectionMode::UniformRandom => {
                initial_sample(&self.cfg.lb, &self.cfg.ub, self.cfg.batch_size, rng)
            }
        };
        let select_seconds = t.elapsed().as_secs_f64();
        self.issued.extend(batch.iter().cloned());

        let (mse_test, mean_var, max_var) = match &self.cfg.test_set {
            Some(test) => {
                let m = metrics_with_grid_variance(&mut self.model, test, &var)?;
                (m.mse_test, m.mean_var, m.max_var)
            }
            None => {
                let (mean, max) = variance_summary(&var);
                (f64::NAN, mean, max)
            }
        };
        let row = MetricsRow {
            iteration: self.iteration,
            n_train: self.ys.len(),
            rmse_batch,
            train_method: method.to_string(),
            train_seconds,
            select_seconds,
            sim_seconds,
            mse_test,
            mean_var,
            max_var,
        };
        self.write_row(&row)?;
        Ok(Step::Next { row, batch })
    }

    fn write_row(&mut self, row: &MetricsRow) -> Result<(), GpGenError> {
        let Some(path) = &self.cfg.metrics_path else {
            return Ok(());
        };
        let err = |e: &dyn std::fmt::Display| GpGenError::Metrics {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        if self.csv.is_none() {
            self.csv = Some(csv::Writer::from_path(path).map_err(|e| err(&e))?);
        }
        let w = self.csv.as_mut().expect("opened above");
        w.serialize(row).map_err(|e| err(&e))?;
        w.flush().map_err(|e| err(&e))
    }
}

fn std_dev(y: &[f64]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, GpGenError> {
    let err = |e: csv::Error| GpGenError::Metrics {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    csv::Reader::from_path(path)
        .map_err(err)?
        .deserialize()
        .collect::<Result<Vec<MetricsRow>, _>>()
        .map_err(err)
}

/// Rows produced so far by a running generator.
pub type MetricsLog = Arc<Mutex<Vec<MetricsRow>>>;

/// Wraps the learner as a persistent generator. On restart, evaluated
/// records in the supplied history become training data.
pub fn gp_gen_fn(cfg: GpGenConfig) -> Result<(GenFn, MetricsLog), GpGenError> {
    cfg.validate()?;
    let log: MetricsLog = Arc::new(Mutex::new(Vec::new()));
    let sink = log.clone();
    let gen = GenFn::persistent(move |ctx| {
        let mut learner = OnlineLearner::new(cfg.clone())?;
        let (px, pf): (Vec<Vec<f64>>, Vec<f64>) = ctx
            .h_in()
            .iter()
            .filter(|r| r.returned)
            .map(|r| (r.x.clone(), r.f))
            .unzip();
        learner.seed_data(&px, &pf);
        let mut rows = 0;
        let t = Instant::now();
        let (mut tag, mut results) = if ctx.h_in_outstanding() {
            ctx.recv()?
        } else {
            let b = learner.initial_batch(ctx.rng());
            ctx.send_recv(to_points(b))?
        };
        let mut sim_seconds = t.elapsed().as_secs_f64();
        while tag == MessageTag::Result {
            let x: Vec<Vec<f64>> = results.iter().map(|r| r.x.clone()).collect();
            let f: Vec<f64> = results.iter().map(|r| r.f).collect();
            let next = match learner.ingest(&x, &f, sim_seconds, ctx.rng())? {
                Step::Reissue(b) => b,
                Step::Next { row, batch } => {
                    log::info!(
                        "iteration {}: n={} rmse={:.3e} {} max_var={:.3e}",
                        row.iteration,
                        row.n_train,
                        row.rmse_batch,
                        row.train_method,
                        row.max_var
                    );
                    sink.lock().expect("metrics log poisoned").push(row);
                    rows += 1;
                    if cfg.max_batches.is_some_and(|m| rows >= m) {
                        return Ok(());
                    }
                    batch
                }
            };
            let t = Instant::now();
            (tag, results) = ctx.send_recv(to_points(next))?;
            sim_seconds = t.elapsed().as_secs_f64();
        }
        Ok(())
    });
    Ok((gen, log))
}

fn to_points(batch: Vec<Vec<f64>>) -> Vec<NewPoint> {
    batch.into_iter().map(NewPoint::new).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp_generator::SyntheticObjective;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(mode: SelectionMode) -> GpGenConfig {
        let mut c = GpGenConfig::new(vec![0.0; 2], vec![1.0; 2], 8);
        c.points_per_dim = 20;
        c.mode = mode;
        c
    }

    #[test]
    fn nan_results_are_left_out() {
        let obj = SyntheticObjective::new(2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut l = OnlineLearner::new(cfg(SelectionMode::Online)).unwrap();
        let b = l.initial_batch(&mut rng);
        let f: Vec<f64> = b.iter().map(|p| obj.eval(p)).collect();
        let Step::Next { batch, .. } = l.ingest(&b, &f, 0.0, &mut rng).unwrap() else {
            panic!("expected a batch")
        };
        assert_eq!(l.model().len(), 8);
        let mut f: Vec<f64> = batch.iter().map(|p| obj.eval(p)).collect();
        f[3] = f64::NAN;
        let Step::Next { row, .. } = l.ingest(&batch, &f, 0.0, &mut rng).unwrap() else {
            panic!("expected a batch")
        };
        assert_eq!(l.model().len(), 8 + 7);
        assert_eq!(row.n_train, 15);
        assert!(row.rmse_batch.is_finite());
    }

    #[test]
    fn all_nan_first_batch_reissues() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut l = OnlineLearner::new(cfg(SelectionMode::Online)).unwrap();
        let b = l.initial_batch(&mut rng);
        match l.ingest(&b, &[f64::NAN; 8], 0.0, &mut rng).unwrap() {
            Step::Reissue(nb) => {
                assert_eq!(nb.len(), 8);
                assert_ne!(nb, b);
            }
            s => panic!("unexpected {s:?}"),
        }
        assert_eq!(l.iteration(), 0);
        assert!(l.model().is_empty());
    }

    #[test]
    fn noise_from_first_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut l = OnlineLearner::new(cfg(SelectionMode::UniformRandom)).unwrap();
        let b = l.initial_batch(&mut rng);
        let f = vec![2.0, -2.0, 2.0, -2.0, 2.0, -2.0, 2.0, -2.0];
        l.ingest(&b, &f, 0.0, &mut rng).unwrap();
        assert!((l.model().noise_variance() - 4e-4).abs() < 1e-18);
        let b2 = initial_sample(&[0.0; 2], &[1.0; 2], 8, &mut rng);
        l.ingest(&b2, &[100.0; 8], 0.0, &mut rng).unwrap();
        assert!((l.model().noise_variance() - 4e-4).abs() < 1e-18);
    }

    #[test]
    fn online_picks_are_new_grid_points() {
        let obj = SyntheticObjective::new(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut l = OnlineLearner::new(cfg(SelectionMode::Online)).unwrap();
        let mut b = l.initial_batch(&mut rng);
        let mut seen: Vec<Vec<f64>> = b.clone();
        for _ in 0..4 {
            let f: Vec<f64> = b.iter().map(|p| obj.eval(p)).collect();
            let Step::Next { batch, .. } = l.ingest(&b, &f, 0.0, &mut rng).unwrap() else {
                panic!()
            };
            for p in &batch {
                assert!(l.grid().points.contains(p));
                assert!(!seen.contains(p));
            }
            seen.extend(batch.iter().cloned());
            b = batch;
        }
    }

    #[test]
    fn metrics_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let obj = SyntheticObjective::new(2, 4);
        let mut c = cfg(SelectionMode::Online);
        c.metrics_path = Some(path.clone());
        c.test_set = Some(TestSet::from_fn(
            initial_sample(&[0.0; 2], &[1.0; 2], 50, &mut ChaCha8Rng::seed_from_u64(1)),
            |p| obj.eval(p),
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut l = OnlineLearner::new(c).unwrap();
        let mut b = l.initial_batch(&mut rng);
        let mut rows = Vec::new();
        for _ in 0..3 {
            let f: Vec<f64> = b.iter().map(|p| obj.eval(p)).collect();
            let Step::Next { batch, row } = l.ingest(&b, &f, 0.5, &mut rng).unwrap() else {
                panic!()
            };
            rows.push(row);
            b = batch;
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "iteration,n_train,rmse_batch,train_method,train_seconds,select_seconds,sim_seconds,mse_test,mean_var,max_var\n"
        ));
        let back = read_metrics(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert!(back[0].rmse_batch.is_nan());
        assert_eq!(back[0].train_method, "global(120)");
        for (a, b) in back.iter().zip(&rows).skip(1) {
            assert_eq!(a, b);
        }
    }
}
