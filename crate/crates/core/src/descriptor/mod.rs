//! Point-occupancy descriptor field.
//!
//! A point-cloud encoder produces a latent code; an occupancy decoder
//! maps a query point (conditioned on the code) to per-layer activations
//! whose concatenation is the point's spatial descriptor. Rotation
//! stability comes from the vector-feature encoder, translation
//! stability from mean-centering the cloud — so descriptors of object
//! points do not change as the grasped object moves.

mod net;
pub mod train;

use ndarray::{Array1, Array2};

use crate::autodiff::{Binder, ParamStore, Tape};
use crate::checkpoint;
use crate::geometry::{mean_center, PointCloud};
use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

pub use train::{build_occupancy_dataset, evaluate_occupancy, train_occupancy, OccupancyShape, OccupancyTrainConfig};

/// Max centroid magnitude accepted by [`encode_pointcloud`].
pub const CENTERING_TOL: f64 = 1e-6;

/// Latent conditioning code for one object cloud.
///
/// Layout: `[Vx(K) | Vy(K) | Vz(K) | s(S)]` — K rotation-covariant vector
/// channels stored coordinate-planewise, then S invariant scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub code: Array1<f64>,
}

/// Concatenation of every decoder layer's post-activation output for one
/// query point.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDescriptor {
    pub z: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DescriptorConfig {
    /// K: rotation-covariant vector channels in the latent code.
    pub vector_channels: usize,
    /// S: invariant scalar channels in the latent code.
    pub scalar_channels: usize,
    pub gate_hidden: usize,
    pub gate_out: usize,
    pub block1_channels: usize,
    pub block2_channels: usize,
    /// Decoder layer widths; the last layer is the occupancy readout.
    pub decoder_widths: Vec<usize>,
    pub seed: u64,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        DescriptorConfig {
            vector_channels: 16,
            scalar_channels: 16,
            gate_hidden: 16,
            gate_out: 16,
            block1_channels: 32,
            block2_channels: 32,
            decoder_widths: vec![32, 32, 32, 32, 1],
            seed: 0,
        }
    }
}

impl DescriptorConfig {
    /// c: dimension of the latent code vector.
    pub fn latent_dim(&self) -> usize {
        3 * self.vector_channels + self.scalar_channels
    }

    /// n: dimension of a spatial descriptor (sum of decoder widths).
    pub fn descriptor_dim(&self) -> usize {
        self.decoder_widths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.decoder_widths.len() < 2 {
            return Err(Error::Config("decoder needs at least two layers".into()));
        }
        if *self.decoder_widths.last().unwrap() != 1 {
            return Err(Error::Config("final decoder layer must have width 1".into()));
        }
        if self.vector_channels == 0 || self.scalar_channels == 0 {
            return Err(Error::Config("latent channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Trained (or freshly initialized) descriptor-field model.
pub struct OccupancyModel {
    pub config: DescriptorConfig,
    store: ParamStore,
    params: net::DescriptorParams,
}

impl OccupancyModel {
    pub fn new(config: DescriptorConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream_rng(config.seed, Stream::WeightInit);
        let params = net::DescriptorParams::build(&mut store, &config, &mut rng);
        Ok(OccupancyModel {
            config,
            store,
            params,
        })
    }

    pub(crate) fn store(&self) -> &ParamStore {
        &self.store
    }

    pub(crate) fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub(crate) fn net_params(&self) -> &net::DescriptorParams {
        &self.params
    }

    /// Encoder + decoder forward for a batch of queries, all on one tape.
    /// Cloud and queries must already be centered together.
    pub(crate) fn forward_on_tape<'t>(
        &self,
        tape: &'t mut Tape,
        binder: &mut Binder,
        cloud_centered: &Array2<f64>,
        queries_centered: &Array2<f64>,
    ) -> (Vec<crate::autodiff::Var>, crate::autodiff::Var) {
        let code = net::encode_on_tape(
            tape,
            binder,
            &self.store,
            &self.params,
            &self.config,
            cloud_centered,
        );
        net::decode_on_tape(
            tape,
            binder,
            &self.store,
            &self.params,
            &self.config,
            code,
            queries_centered,
        )
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let widths = self
            .config
            .decoder_widths
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let meta = vec![
            ("vector_channels".into(), self.config.vector_channels.to_string()),
            ("scalar_channels".into(), self.config.scalar_channels.to_string()),
            ("gate_hidden".into(), self.config.gate_hidden.to_string()),
            ("gate_out".into(), self.config.gate_out.to_string()),
            ("block1_channels".into(), self.config.block1_channels.to_string()),
            ("block2_channels".into(), self.config.block2_channels.to_string()),
            ("decoder_widths".into(), widths),
        ];
        checkpoint::save(path, "descriptor", self.config.seed, &meta, &self.store)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        checkpoint::expect_kind(&ckpt, "descriptor")?;
        let decoder_widths = ckpt
            .meta_str("decoder_widths")?
            .split(',')
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| Error::Format("bad decoder_widths in checkpoint".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let config = DescriptorConfig {
            vector_channels: ckpt.meta_usize("vector_channels")?,
            scalar_channels: ckpt.meta_usize("scalar_channels")?,
            gate_hidden: ckpt.meta_usize("gate_hidden")?,
            gate_out: ckpt.meta_usize("gate_out")?,
            block1_channels: ckpt.meta_usize("block1_channels")?,
            block2_channels: ckpt.meta_usize("block2_channels")?,
            decoder_widths,
            seed: ckpt.seed,
        };
        let mut model = OccupancyModel::new(config)?;
        model.store.load_blob(&ckpt.blob)?;
        Ok(model)
    }
}

/// Encodes a mean-centered cloud to its latent code.
///
/// The centering precondition is enforced: a cloud whose centroid is
/// farther than [`CENTERING_TOL`] from the origin is rejected.
pub fn encode_pointcloud(cloud: &PointCloud, model: &OccupancyModel) -> Result<LatentCode> {
    let c = cloud.centroid();
    if c.iter().any(|v| v.abs() >= CENTERING_TOL) {
        return Err(Error::invalid(format!(
            "cloud is not mean-centered (centroid {c:?}); call mean_center first"
        )));
    }
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let code = net::encode_on_tape(
        &mut tape,
        &mut binder,
        &model.store,
        &model.params,
        &model.config,
        cloud.points(),
    );
    Ok(LatentCode {
        code: tape.value(code).row(0).to_owned(),
    })
}

/// Decoder forward for one query point in the same centered frame as the
/// cloud that produced `code`. Returns each layer's post-activation
/// output and the occupancy probability (the final activation).
pub fn occupancy_forward(
    x: [f64; 3],
    code: &LatentCode,
    model: &OccupancyModel,
) -> Result<(Vec<Array1<f64>>, f64)> {
    let expect = model.config.latent_dim();
    if code.code.len() != expect {
        return Err(Error::Dimension {
            context: "occupancy_forward latent code".into(),
            expected: expect,
            actual: code.code.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("query point has non-finite coordinates"));
    }
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let code_var = tape.constant(
        Array2::from_shape_vec((1, expect), code.code.to_vec()).expect("code shape"),
    );
    let queries = Array2::from_shape_vec((1, 3), x.to_vec()).expect("query shape");
    let (acts, _logit) = net::decode_on_tape(
        &mut tape,
        &mut binder,
        &model.store,
        &model.params,
        &model.config,
        code_var,
        &queries,
    );
    let activations: Vec<Array1<f64>> = acts
        .iter()
        .map(|a| tape.value(*a).row(0).to_owned())
        .collect();
    let occ = activations.last().unwrap()[0];
    Ok((activations, occ))
}

/// Spatial descriptors for a batch of query points given a raw
/// (uncentered) cloud: centering of both cloud and queries happens here.
/// Output is `(Q, n)` with n the descriptor dimension.
pub fn descriptor_batch(
    queries: &Array2<f64>,
    cloud: &PointCloud,
    model: &OccupancyModel,
) -> Result<Array2<f64>> {
    if queries.ncols() != 3 {
        return Err(Error::Dimension {
            context: "descriptor queries".into(),
            expected: 3,
            actual: queries.ncols(),
        });
    }
    if queries.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("query points contain non-finite coordinates"));
    }
    let (centered, centroid) = mean_center(cloud)?;
    let mut q = queries.clone();
    for mut row in q.rows_mut() {
        row[0] -= centroid[0];
        row[1] -= centroid[1];
        row[2] -= centroid[2];
    }
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let (acts, _) = model.forward_on_tape(&mut tape, &mut binder, centered.points(), &q);
    let views: Vec<_> = acts.iter().map(|a| tape.value(*a).view()).collect();
    Ok(ndarray::concatenate(ndarray::Axis(1), &views).expect("descriptor concat"))
}

/// Spatial descriptor for a single query point (see [`descriptor_batch`]).
pub fn descriptor(
    x: [f64; 3],
    cloud: &PointCloud,
    model: &OccupancyModel,
) -> Result<SpatialDescriptor> {
    let q = Array2::from_shape_vec((1, 3), x.to_vec()).expect("query shape");
    let z = descriptor_batch(&q, cloud, model)?;
    Ok(SpatialDescriptor {
        z: z.row(0).to_owned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::shapes::{sample_surface, ShapeParams};
    use crate::geometry::{apply_transform, random_transform};
    use rand::Rng;

    fn test_cloud(seed: u64) -> PointCloud {
        let params = ShapeParams::Mug {
            radius: 0.035,
            height: 0.09,
            handle_tube_radius: 0.005,
            handle_loop_radius: 0.02,
        };
        sample_surface(&params, 128, seed).unwrap()
    }

    fn test_model() -> OccupancyModel {
        OccupancyModel::new(DescriptorConfig {
            seed: 7,
            ..DescriptorConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn code_dimension_and_determinism() {
        let model = test_model();
        let (centered, _) = mean_center(&test_cloud(1)).unwrap();
        let a = encode_pointcloud(&centered, &model).unwrap();
        let b = encode_pointcloud(&centered, &model).unwrap();
        assert_eq!(a.code.len(), 64);
        assert_eq!(a, b);
    }

    #[test]
    fn non_centered_cloud_rejected() {
        let model = test_model();
        assert!(encode_pointcloud(&test_cloud(1), &model).is_err());
    }

    #[test]
    fn permutation_invariance_of_code() {
        let model = test_model();
        let (centered, _) = mean_center(&test_cloud(2)).unwrap();
        let n = centered.len();
        // reverse-order permutation
        let mut perm = Array2::zeros((n, 3));
        for i in 0..n {
            for k in 0..3 {
                perm[(i, k)] = centered.points()[(n - 1 - i, k)];
            }
        }
        let permuted = PointCloud::new(perm, centered.category).unwrap();
        let a = encode_pointcloud(&centered, &model).unwrap();
        let b = encode_pointcloud(&permuted, &model).unwrap();
        let max = a
            .code
            .iter()
            .zip(b.code.iter())
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(max < 1e-6, "permutation changed code by {max}");
    }

    #[test]
    fn descriptor_dimension_is_sum_of_widths() {
        let model = test_model();
        let cloud = test_cloud(3);
        let d = descriptor([0.01, 0.0, 0.03], &cloud, &model).unwrap();
        assert_eq!(d.z.len(), 129);
    }

    #[test]
    fn occupancy_is_a_probability() {
        let model = test_model();
        let (centered, _) = mean_center(&test_cloud(4)).unwrap();
        let code = encode_pointcloud(&centered, &model).unwrap();
        let mut rng = crate::rng::stream_rng(50, crate::rng::Stream::Fuzz);
        for _ in 0..100 {
            let x = [
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            ];
            let (acts, occ) = occupancy_forward(x, &code, &model).unwrap();
            assert!((0.0..=1.0).contains(&occ));
            assert_eq!(acts.len(), 5);
            assert_eq!(acts[0].len(), 32);
            assert_eq!(acts[4].len(), 1);
        }
    }

    #[test]
    fn wrong_code_dimension_rejected() {
        let model = test_model();
        let bad = LatentCode {
            code: Array1::zeros(10),
        };
        assert!(occupancy_forward([0.0; 3], &bad, &model).is_err());
    }

    /// Eq-style pose stability at random weights: the property is
    /// architectural, not learned, so an untrained model must satisfy it.
    #[test]
    fn descriptor_invariant_under_rigid_transform() {
        let model = test_model();
        let cloud = test_cloud(5);
        let mut rng = crate::rng::stream_rng(51, crate::rng::Stream::Fuzz);
        let queries = Array2::from_shape_fn((8, 3), |_| rng.gen_range(-0.05..0.05));
        let base = descriptor_batch(&queries, &cloud, &model).unwrap();
        for _ in 0..5 {
            let t = random_transform(&mut rng);
            let moved_cloud = PointCloud::new(
                apply_transform(&t, cloud.points()).unwrap(),
                cloud.category,
            )
            .unwrap();
            let moved_queries = apply_transform(&t, &queries).unwrap();
            let moved = descriptor_batch(&moved_queries, &moved_cloud, &model).unwrap();
            let max = (&base - &moved).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max < 1e-9, "descriptor drifted {max} under rigid transform");
        }
    }

    #[test]
    fn translation_only_invariance_is_tight() {
        let model = test_model();
        let cloud = test_cloud(6);
        let mut rng = crate::rng::stream_rng(52, crate::rng::Stream::Fuzz);
        let queries = Array2::from_shape_fn((8, 3), |_| rng.gen_range(-0.05..0.05));
        let base = descriptor_batch(&queries, &cloud, &model).unwrap();
        let t = crate::geometry::RigidTransform::from_translation([0.31, -0.12, 0.77]);
        let moved_cloud =
            PointCloud::new(apply_transform(&t, cloud.points()).unwrap(), cloud.category).unwrap();
        let moved_queries = apply_transform(&t, &queries).unwrap();
        let moved = descriptor_batch(&moved_queries, &moved_cloud, &model).unwrap();
        let max = (&base - &moved).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-6, "translation changed descriptors by {max}");
    }

    #[test]
    fn save_load_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("descriptor.ckpt");
        let model = test_model();
        model.save(&path).unwrap();
        let loaded = OccupancyModel::load(&path).unwrap();
        let cloud = test_cloud(7);
        let a = descriptor([0.02, -0.01, 0.04], &cloud, &model).unwrap();
        let b = descriptor([0.02, -0.01, 0.04], &cloud, &loaded).unwrap();
        assert_eq!(a, b, "loaded model outputs differ bitwise");
    }
}
