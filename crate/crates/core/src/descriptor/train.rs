//! Descriptor-field training on parametric shapes.
//!
//! Ground truth comes from the shapes' exact interior tests, so no mesh
//! assets are involved: each training shape contributes a centered cloud
//! plus a balanced set of inside/outside query points.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Binder, Tape};
use crate::geometry::shapes::{contains, draw_shape, sample_surface, Category, Split};
use crate::rng::{item_rng, stream_rng, Stream};
use crate::training::TrainingLog;
use crate::{Error, Result};

use super::{DescriptorConfig, OccupancyModel};

/// One training shape: centered cloud, centered queries, binary labels.
pub struct OccupancyShape {
    pub category: Category,
    pub cloud_centered: Array2<f64>,
    pub queries_centered: Array2<f64>,
    /// `(Q,1)` inside/outside labels.
    pub labels: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct OccupancyTrainConfig {
    pub model: DescriptorConfig,
    pub epochs: usize,
    pub lr: f64,
    /// Final-epoch mean BCE must fall below this or training reports failure.
    pub fail_threshold: f64,
}

impl Default for OccupancyTrainConfig {
    fn default() -> Self {
        OccupancyTrainConfig {
            model: DescriptorConfig::default(),
            epochs: 80,
            lr: 1e-3,
            fail_threshold: 0.45,
        }
    }
}

/// Builds a balanced occupancy dataset from randomly drawn shapes.
///
/// Queries mix near-surface jitter with uniform box samples and are
/// rebalanced to exactly half inside, half outside.
pub fn build_occupancy_dataset(
    shapes_per_category: usize,
    cloud_points: usize,
    queries_per_shape: usize,
    split: Split,
    seed: u64,
) -> Result<Vec<OccupancyShape>> {
    if shapes_per_category == 0 || cloud_points == 0 || queries_per_shape < 2 {
        return Err(Error::Config("occupancy dataset sizes must be positive".into()));
    }
    let mut out = Vec::new();
    let mut item = 0u64;
    for cat in Category::ALL {
        for _ in 0..shapes_per_category {
            let mut rng = item_rng(seed, Stream::ShapeParams, item);
            let params = draw_shape(cat, split, &mut rng);
            let cloud = sample_surface(&params, cloud_points, seed ^ (item.wrapping_mul(0x9e37)))?;

            let mut label_rng = item_rng(seed, Stream::QueryLabels, item);
            let half = queries_per_shape / 2;
            let mut inside: Vec<[f64; 3]> = Vec::with_capacity(half);
            let mut outside: Vec<[f64; 3]> = Vec::with_capacity(queries_per_shape - half);
            let (lo, hi) = params.bounds(0.35);
            let mut guard = 0usize;
            while inside.len() < half || outside.len() < queries_per_shape - half {
                guard += 1;
                if guard > 500_000 {
                    return Err(Error::Config(
                        "query balancing did not terminate; shape may be degenerate".into(),
                    ));
                }
                let p = if label_rng.gen_bool(0.6) {
                    // jittered surface point: dense coverage of the boundary band
                    let idx = label_rng.gen_range(0..cloud.len());
                    let row = cloud.points().row(idx);
                    [
                        row[0] + gaussian(&mut label_rng) * 0.004,
                        row[1] + gaussian(&mut label_rng) * 0.004,
                        row[2] + gaussian(&mut label_rng) * 0.004,
                    ]
                } else {
                    [
                        label_rng.gen_range(lo[0]..hi[0]),
                        label_rng.gen_range(lo[1]..hi[1]),
                        label_rng.gen_range(lo[2]..hi[2]),
                    ]
                };
                if contains(&params, p) {
                    if inside.len() < half {
                        inside.push(p);
                    }
                } else if outside.len() < queries_per_shape - half {
                    outside.push(p);
                }
            }

            let centroid = cloud.centroid();
            let mut cloud_centered = cloud.points().clone();
            for mut row in cloud_centered.rows_mut() {
                for k in 0..3 {
                    row[k] -= centroid[k];
                }
            }
            let mut queries = Array2::zeros((queries_per_shape, 3));
            let mut labels = Array2::zeros((queries_per_shape, 1));
            for (i, p) in inside.iter().chain(outside.iter()).enumerate() {
                for k in 0..3 {
                    queries[(i, k)] = p[k] - centroid[k];
                }
                labels[(i, 0)] = if i < half { 1.0 } else { 0.0 };
            }
            out.push(OccupancyShape {
                category: cat,
                cloud_centered,
                queries_centered: queries,
                labels,
            });
            item += 1;
        }
    }
    Ok(out)
}

fn gaussian(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    let v: f64 = StandardNormal.sample(rng);
    v
}

/// Trains the descriptor field with Adam on per-query BCE.
pub fn train_occupancy(
    shapes: &[OccupancyShape],
    cfg: &OccupancyTrainConfig,
) -> Result<(OccupancyModel, TrainingLog)> {
    for cat in Category::ALL {
        let n = shapes.iter().filter(|s| s.category == cat).count();
        if n < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 shapes per category, {} has {n}",
                cat.name()
            )));
        }
    }
    for (i, s) in shapes.iter().enumerate() {
        let mean = s.labels.mean().unwrap();
        if !(0.3..=0.7).contains(&mean) {
            return Err(Error::invalid(format!(
                "shape {i} query labels are unbalanced (positive fraction {mean:.2})"
            )));
        }
    }

    let mut model = OccupancyModel::new(cfg.model.clone())?;
    let mut log = TrainingLog::new("descriptor", cfg.model.seed);
    let mut order_rng = stream_rng(cfg.model.seed, Stream::DataOrder);
    let mut order: Vec<usize> = (0..shapes.len()).collect();

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let shape = &shapes[i];
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let (_acts, logit) = model.forward_on_tape(
                &mut tape,
                &mut binder,
                &shape.cloud_centered,
                &shape.queries_centered,
            );
            let loss = tape.bce_with_logits_mean(logit, shape.labels.clone());
            epoch_loss += tape.scalar(loss);
            tape.backward(loss);
            binder.write_grads(&tape, model.store_mut());
            model.store_mut().adam_step(cfg.lr);
        }
        log.epoch_loss.push(epoch_loss / order.len() as f64);
    }

    log.require_convergence(cfg.fail_threshold)?;
    Ok((model, log))
}

/// Mean BCE and accuracy of the occupancy readout on held-out shapes.
pub fn evaluate_occupancy(model: &OccupancyModel, shapes: &[OccupancyShape]) -> (f64, f64) {
    let mut bce = 0.0;
    let mut correct = 0usize;
    let mut total = 0usize;
    for shape in shapes {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let (_acts, logit) = model.forward_on_tape(
            &mut tape,
            &mut binder,
            &shape.cloud_centered,
            &shape.queries_centered,
        );
        let loss = tape.bce_with_logits_mean(logit, shape.labels.clone());
        bce += tape.scalar(loss);
        let logits = tape.value(logit);
        for (z, y) in logits.iter().zip(shape.labels.iter()) {
            let pred = *z > 0.0;
            if pred == (*y > 0.5) {
                correct += 1;
            }
            total += 1;
        }
    }
    (bce / shapes.len() as f64, correct as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_balanced_and_centered() {
        let shapes = build_occupancy_dataset(2, 64, 100, Split::Train, 3).unwrap();
        assert_eq!(shapes.len(), 6);
        for s in &shapes {
            assert!((s.labels.mean().unwrap() - 0.5).abs() < 1e-9);
            let c = s.cloud_centered.mean_axis(ndarray::Axis(0)).unwrap();
            assert!(c.iter().all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn too_few_shapes_rejected() {
        let shapes = build_occupancy_dataset(1, 32, 20, Split::Train, 3).unwrap();
        let cfg = OccupancyTrainConfig {
            epochs: 1,
            ..Default::default()
        };
        assert!(matches!(
            train_occupancy(&shapes, &cfg),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn impossible_threshold_reports_training_failure() {
        let shapes = build_occupancy_dataset(2, 32, 40, Split::Train, 4).unwrap();
        let cfg = OccupancyTrainConfig {
            epochs: 1,
            fail_threshold: 1e-12,
            ..Default::default()
        };
        match train_occupancy(&shapes, &cfg) {
            Err(Error::Training(f)) => assert_eq!(f.epochs_run, 1),
            other => panic!("expected training failure, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn retrain_same_seed_is_bit_identical() {
        let shapes = build_occupancy_dataset(2, 48, 64, Split::Train, 5).unwrap();
        let cfg = OccupancyTrainConfig {
            epochs: 2,
            fail_threshold: 10.0,
            ..Default::default()
        };
        let (a, _) = train_occupancy(&shapes, &cfg).unwrap();
        let (b, _) = train_occupancy(&shapes, &cfg).unwrap();
        assert_eq!(a.store().to_blob(), b.store().to_blob());
    }
}
