//! Parametric object families: mug, bottle, bowl.
//!
//! These stand in for mesh assets. Each family has an exact surface
//! sampler, an exact inside test for occupancy labels, and an analytic
//! distance-to-surface used by tests. The object frame puts the base at
//! z = 0 with +z up.
//!
//! Parameter ranges live in [`SHAPE_PARAM_SCHEMA`], a versioned key-value
//! schema that validation parses at runtime.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::PointCloud;
use crate::rng::{item_rng, Stream};
use crate::{Error, Result};

/// Versioned parameter-range schema, `name=lo:hi` in meters (ratios unitless).
pub const SHAPE_PARAM_SCHEMA: &str = "\
# shape parameter ranges v1
schema_version=1
mug.radius=0.025:0.05
mug.height=0.06:0.12
mug.handle_tube_radius=0.004:0.008
mug.handle_loop_radius=0.012:0.028
bottle.radius=0.02:0.05
bottle.body_height=0.08:0.16
bottle.neck_height=0.02:0.05
bottle.neck_ratio=0.3:0.6
bowl.radius=0.04:0.09
bowl.thickness=0.003:0.008
";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Mug,
    Bottle,
    Bowl,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Mug, Category::Bottle, Category::Bowl];

    pub fn name(&self) -> &'static str {
        match self {
            Category::Mug => "mug",
            Category::Bottle => "bottle",
            Category::Bowl => "bowl",
        }
    }

    pub fn id(&self) -> u8 {
        match self {
            Category::Mug => 0,
            Category::Bottle => 1,
            Category::Bowl => 2,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Category::Mug),
            1 => Ok(Category::Bottle),
            2 => Ok(Category::Bowl),
            _ => Err(Error::Format(format!("unknown category id {id}"))),
        }
    }
}

/// Shape parameters for one concrete object instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "category", rename_all = "lowercase")]
pub enum ShapeParams {
    Mug {
        radius: f64,
        height: f64,
        handle_tube_radius: f64,
        handle_loop_radius: f64,
    },
    Bottle {
        radius: f64,
        body_height: f64,
        neck_height: f64,
        neck_ratio: f64,
    },
    Bowl { radius: f64, thickness: f64 },
}

/// One `name=lo:hi` range parsed from the schema.
fn schema_range(key: &str) -> (f64, f64) {
    for line in SHAPE_PARAM_SCHEMA.lines() {
        if let Some(rest) = line.strip_prefix(key) {
            if let Some(v) = rest.strip_prefix('=') {
                let (lo, hi) = v.split_once(':').expect("schema range format");
                return (lo.parse().unwrap(), hi.parse().unwrap());
            }
        }
    }
    panic!("schema key {key} missing");
}

fn check_range(key: &str, v: f64) -> Result<()> {
    let (lo, hi) = schema_range(key);
    if !v.is_finite() || v < lo || v > hi {
        return Err(Error::invalid(format!(
            "{key}={v} outside documented range [{lo}, {hi}]"
        )));
    }
    Ok(())
}

impl ShapeParams {
    pub fn category(&self) -> Category {
        match self {
            ShapeParams::Mug { .. } => Category::Mug,
            ShapeParams::Bottle { .. } => Category::Bottle,
            ShapeParams::Bowl { .. } => Category::Bowl,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ShapeParams::Mug {
                radius,
                height,
                handle_tube_radius,
                handle_loop_radius,
            } => {
                check_range("mug.radius", radius)?;
                check_range("mug.height", height)?;
                check_range("mug.handle_tube_radius", handle_tube_radius)?;
                check_range("mug.handle_loop_radius", handle_loop_radius)?;
                if handle_loop_radius + handle_tube_radius >= height / 2.0 {
                    return Err(Error::invalid("mug handle does not fit on the body wall"));
                }
                if handle_tube_radius >= handle_loop_radius {
                    return Err(Error::invalid("mug handle tube thicker than its loop"));
                }
                Ok(())
            }
            ShapeParams::Bottle {
                radius,
                body_height,
                neck_height,
                neck_ratio,
            } => {
                check_range("bottle.radius", radius)?;
                check_range("bottle.body_height", body_height)?;
                check_range("bottle.neck_height", neck_height)?;
                check_range("bottle.neck_ratio", neck_ratio)?;
                Ok(())
            }
            ShapeParams::Bowl { radius, thickness } => {
                check_range("bowl.radius", radius)?;
                check_range("bowl.thickness", thickness)?;
                Ok(())
            }
        }
    }

    /// Canonical flat layout for file headers.
    pub fn to_vec(&self) -> Vec<f64> {
        match *self {
            ShapeParams::Mug {
                radius,
                height,
                handle_tube_radius,
                handle_loop_radius,
            } => vec![radius, height, handle_tube_radius, handle_loop_radius],
            ShapeParams::Bottle {
                radius,
                body_height,
                neck_height,
                neck_ratio,
            } => vec![radius, body_height, neck_height, neck_ratio],
            ShapeParams::Bowl { radius, thickness } => vec![radius, thickness],
        }
    }

    pub fn from_vec(category: Category, v: &[f64]) -> Result<Self> {
        let want = match category {
            Category::Mug => 4,
            Category::Bottle => 4,
            Category::Bowl => 2,
        };
        if v.len() != want {
            return Err(Error::Format(format!(
                "{} expects {want} shape params, got {}",
                category.name(),
                v.len()
            )));
        }
        Ok(match category {
            Category::Mug => ShapeParams::Mug {
                radius: v[0],
                height: v[1],
                handle_tube_radius: v[2],
                handle_loop_radius: v[3],
            },
            Category::Bottle => ShapeParams::Bottle {
                radius: v[0],
                body_height: v[1],
                neck_height: v[2],
                neck_ratio: v[3],
            },
            Category::Bowl => ShapeParams::Bowl {
                radius: v[0],
                thickness: v[1],
            },
        })
    }

    /// Total height of the shape (z extent from the base plane).
    pub fn height(&self) -> f64 {
        match *self {
            ShapeParams::Mug { height, .. } => height,
            ShapeParams::Bottle {
                body_height,
                neck_height,
                ..
            } => body_height + neck_height,
            ShapeParams::Bowl { radius, .. } => radius,
        }
    }

    /// Radius of a sphere about the object centroid region guaranteed to
    /// contain the whole surface. Used for far-field occupancy probes.
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            ShapeParams::Mug {
                radius,
                height,
                handle_tube_radius,
                handle_loop_radius,
            } => (radius + handle_loop_radius + handle_tube_radius).max(height),
            ShapeParams::Bottle {
                radius,
                body_height,
                neck_height,
                ..
            } => radius.max(body_height + neck_height),
            ShapeParams::Bowl { radius, .. } => 2.0 * radius,
        }
    }

    /// Axis-aligned bounds of the surface with a fractional margin.
    pub fn bounds(&self, margin: f64) -> ([f64; 3], [f64; 3]) {
        let (rx, h) = match *self {
            ShapeParams::Mug {
                radius,
                height,
                handle_tube_radius,
                handle_loop_radius,
            } => (radius + handle_loop_radius + handle_tube_radius, height),
            ShapeParams::Bottle {
                radius,
                body_height,
                neck_height,
                ..
            } => (radius, body_height + neck_height),
            ShapeParams::Bowl { radius, .. } => (radius, radius),
        };
        let m = 1.0 + margin;
        ([-rx * m, -rx * m, -h * margin], [rx * m, rx * m, h * m])
    }
}

/// Exact solid-interior test used for occupancy ground truth.
pub fn contains(params: &ShapeParams, p: [f64; 3]) -> bool {
    let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
    match *params {
        ShapeParams::Mug {
            radius,
            height,
            handle_tube_radius,
            handle_loop_radius,
        } => {
            let in_body = p[2] >= 0.0 && p[2] <= height && rho <= radius;
            in_body
                || mug_handle_distance(p, radius, height, handle_loop_radius)
                    <= handle_tube_radius
        }
        ShapeParams::Bottle {
            radius,
            body_height,
            neck_height,
            neck_ratio,
        } => {
            if p[2] < 0.0 || p[2] > body_height + neck_height {
                return false;
            }
            if p[2] <= body_height {
                rho <= radius
            } else {
                let f = (p[2] - body_height) / neck_height;
                rho <= radius + f * (radius * neck_ratio - radius)
            }
        }
        ShapeParams::Bowl { radius, thickness } => {
            let c = [0.0, 0.0, radius];
            let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt();
            p[2] <= c[2] && d <= radius && d >= radius - thickness
        }
    }
}

/// Distance from `p` to the nearest point of the mug handle's center arc.
/// The arc is a semicircle of radius `loop_r` in the y = 0 plane, centered
/// at `(radius, 0, height/2)`, bulging outward in +x.
fn mug_handle_distance(p: [f64; 3], radius: f64, height: f64, loop_r: f64) -> f64 {
    let c = [radius, 0.0, height / 2.0];
    let qx = p[0] - c[0];
    let qz = p[2] - c[2];
    let phi = qz.atan2(qx).clamp(-PI / 2.0, PI / 2.0);
    let a = [
        c[0] + loop_r * phi.cos(),
        0.0,
        c[2] + loop_r * phi.sin(),
    ];
    ((p[0] - a[0]).powi(2) + (p[1] - a[1]).powi(2) + (p[2] - a[2]).powi(2)).sqrt()
}

/// Distance from `p` to the union of the shape's parametric surfaces.
/// Zero (to float precision) for every sampled surface point.
pub fn surface_distance(params: &ShapeParams, p: [f64; 3]) -> f64 {
    let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
    match *params {
        ShapeParams::Mug {
            radius,
            height,
            handle_tube_radius,
            handle_loop_radius,
        } => {
            let body = capped_cylinder_surface_distance(p, rho, radius, 0.0, height);
            let handle =
                (mug_handle_distance(p, radius, height, handle_loop_radius) - handle_tube_radius)
                    .abs();
            body.min(handle)
        }
        ShapeParams::Bottle {
            radius,
            body_height,
            neck_height,
            neck_ratio,
        } => {
            let body = capped_cylinder_surface_distance(p, rho, radius, 0.0, body_height);
            let top_r = radius * neck_ratio;
            // frustum side: closest point along the slanted profile segment
            let frustum = segment_distance_2d(
                (rho, p[2]),
                (radius, body_height),
                (top_r, body_height + neck_height),
            );
            let top = if rho <= top_r {
                (p[2] - body_height - neck_height).abs()
            } else {
                ((rho - top_r).powi(2) + (p[2] - body_height - neck_height).powi(2)).sqrt()
            };
            body.min(frustum).min(top)
        }
        ShapeParams::Bowl { radius, .. } => {
            let c = [0.0, 0.0, radius];
            let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt();
            if p[2] <= c[2] {
                (d - radius).abs()
            } else {
                // nearest surface point is on the rim circle
                ((rho - radius).powi(2) + (p[2] - c[2]).powi(2)).sqrt()
            }
        }
    }
}

/// Distance to the surface (side + both caps) of an upright cylinder.
fn capped_cylinder_surface_distance(
    p: [f64; 3],
    rho: f64,
    radius: f64,
    z0: f64,
    z1: f64,
) -> f64 {
    let side = if p[2] >= z0 && p[2] <= z1 {
        (rho - radius).abs()
    } else {
        let dz = if p[2] < z0 { z0 - p[2] } else { p[2] - z1 };
        ((rho - radius).powi(2) + dz * dz).sqrt()
    };
    let cap = |z: f64| {
        if rho <= radius {
            (p[2] - z).abs()
        } else {
            ((rho - radius).powi(2) + (p[2] - z).powi(2)).sqrt()
        }
    };
    side.min(cap(z0)).min(cap(z1))
}

fn segment_distance_2d(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let ab = (b.0 - a.0, b.1 - a.1);
    let ap = (p.0 - a.0, p.1 - a.1);
    let len2 = ab.0 * ab.0 + ab.1 * ab.1;
    let t = if len2 > 0.0 {
        ((ap.0 * ab.0 + ap.1 * ab.1) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = (a.0 + t * ab.0, a.1 + t * ab.1);
    ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()
}

/// Samples `n` points on the shape surface, deterministic per seed.
pub fn sample_surface(params: &ShapeParams, n: usize, seed: u64) -> Result<PointCloud> {
    params.validate()?;
    if n == 0 {
        return Err(Error::invalid("surface sample count must be >= 1"));
    }
    let mut rng = item_rng(seed, Stream::SurfaceSampling, params.category().id() as u64);
    let mut pts = Array2::zeros((n, 3));
    for i in 0..n {
        let p = sample_one(params, &mut rng);
        pts[(i, 0)] = p[0];
        pts[(i, 1)] = p[1];
        pts[(i, 2)] = p[2];
    }
    PointCloud::new(pts, params.category())
}

fn sample_one(params: &ShapeParams, rng: &mut ChaCha8Rng) -> [f64; 3] {
    match *params {
        ShapeParams::Mug {
            radius,
            height,
            handle_tube_radius,
            handle_loop_radius,
        } => loop {
            let a_side = 2.0 * PI * radius * height;
            let a_cap = PI * radius * radius;
            let a_handle = 2.0 * PI * PI * handle_tube_radius * handle_loop_radius;
            let total = a_side + 2.0 * a_cap + a_handle;
            let u = rng.gen_range(0.0..total);
            let p = if u < a_side {
                let phi = rng.gen_range(0.0..2.0 * PI);
                let z = rng.gen_range(0.0..height);
                [radius * phi.cos(), radius * phi.sin(), z]
            } else if u < a_side + 2.0 * a_cap {
                let phi = rng.gen_range(0.0..2.0 * PI);
                let r = radius * rng.gen_range(0.0f64..1.0).sqrt();
                let z = if u < a_side + a_cap { 0.0 } else { height };
                [r * phi.cos(), r * phi.sin(), z]
            } else {
                // tube around the handle arc; rejection keeps area weighting
                let (alpha, beta) = loop {
                    let alpha = rng.gen_range(-PI / 2.0..PI / 2.0);
                    let beta = rng.gen_range(0.0..2.0 * PI);
                    let w = (handle_loop_radius + handle_tube_radius * beta.cos())
                        / (handle_loop_radius + handle_tube_radius);
                    if rng.gen_range(0.0..1.0) < w {
                        break (alpha, beta);
                    }
                };
                let c = [radius, 0.0, height / 2.0];
                let arc = [
                    c[0] + handle_loop_radius * alpha.cos(),
                    0.0,
                    c[2] + handle_loop_radius * alpha.sin(),
                ];
                let radial = [alpha.cos(), 0.0, alpha.sin()];
                [
                    arc[0] + handle_tube_radius * (radial[0] * beta.cos()),
                    arc[1] + handle_tube_radius * beta.sin(),
                    arc[2] + handle_tube_radius * (radial[2] * beta.cos()),
                ]
            };
            // keep only the union boundary: drop handle points buried in the
            // body and body points buried in the handle
            let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let in_body_strict = p[2] > 1e-12
                && p[2] < height - 1e-12
                && rho < radius - 1e-12;
            let in_handle_strict = mug_handle_distance(p, radius, height, handle_loop_radius)
                < handle_tube_radius - 1e-12;
            let on_body = (rho - radius).abs() < 1e-9 || p[2].abs() < 1e-9 || (p[2] - height).abs() < 1e-9;
            if (on_body && !in_handle_strict) || (!on_body && !in_body_strict) {
                return p;
            }
        },
        ShapeParams::Bottle {
            radius,
            body_height,
            neck_height,
            neck_ratio,
        } => {
            let top_r = radius * neck_ratio;
            let slant = (neck_height.powi(2) + (radius - top_r).powi(2)).sqrt();
            let a_side = 2.0 * PI * radius * body_height;
            let a_bottom = PI * radius * radius;
            let a_frustum = PI * (radius + top_r) * slant;
            let a_top = PI * top_r * top_r;
            let total = a_side + a_bottom + a_frustum + a_top;
            let u = rng.gen_range(0.0..total);
            let phi = rng.gen_range(0.0..2.0 * PI);
            if u < a_side {
                let z = rng.gen_range(0.0..body_height);
                [radius * phi.cos(), radius * phi.sin(), z]
            } else if u < a_side + a_bottom {
                let r = radius * rng.gen_range(0.0f64..1.0).sqrt();
                [r * phi.cos(), r * phi.sin(), 0.0]
            } else if u < a_side + a_bottom + a_frustum {
                // area-correct frustum sampling: radius density ∝ r
                let (r0, r1) = (top_r.min(radius), top_r.max(radius));
                let r = (r0 * r0 + rng.gen_range(0.0f64..1.0) * (r1 * r1 - r0 * r0)).sqrt();
                let f = (radius - r) / (radius - top_r); // 0 at body top, 1 at bottle top
                let z = body_height + f * neck_height;
                [r * phi.cos(), r * phi.sin(), z]
            } else {
                let r = top_r * rng.gen_range(0.0f64..1.0).sqrt();
                [r * phi.cos(), r * phi.sin(), body_height + neck_height]
            }
        }
        ShapeParams::Bowl { radius, .. } => {
            // outer hemispherical shell, area-uniform (z uniform on a sphere)
            let c = [0.0, 0.0, radius];
            let dz = rng.gen_range(-radius..0.0);
            let phi = rng.gen_range(0.0..2.0 * PI);
            let rho = (radius * radius - dz * dz).sqrt();
            [rho * phi.cos(), rho * phi.sin(), c[2] + dz]
        }
    }
}

/// Which half of each parameter range a dataset split draws from.
/// Train takes the lower 45% of every range, test the upper 45%, with a
/// 10% gap between them, so train/test shape parameters are disjoint by
/// construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

fn draw_in_split(rng: &mut ChaCha8Rng, key: &str, split: Split) -> f64 {
    let (lo, hi) = schema_range(key);
    let span = hi - lo;
    match split {
        Split::Train => rng.gen_range(lo..lo + 0.45 * span),
        Split::Test => rng.gen_range(hi - 0.45 * span..hi),
    }
}

/// Draws a random in-range shape for `category` from the split's
/// parameter sub-ranges.
pub fn draw_shape(category: Category, split: Split, rng: &mut ChaCha8Rng) -> ShapeParams {
    match category {
        Category::Mug => {
            let radius = draw_in_split(rng, "mug.radius", split);
            let height = draw_in_split(rng, "mug.height", split);
            let handle_tube_radius = draw_in_split(rng, "mug.handle_tube_radius", split);
            let mut handle_loop_radius = draw_in_split(rng, "mug.handle_loop_radius", split);
            // keep the handle on the wall for short mugs
            let max_loop = height / 2.0 - handle_tube_radius - 1e-4;
            if handle_loop_radius > max_loop {
                handle_loop_radius = max_loop;
            }
            ShapeParams::Mug {
                radius,
                height,
                handle_tube_radius,
                handle_loop_radius,
            }
        }
        Category::Bottle => ShapeParams::Bottle {
            radius: draw_in_split(rng, "bottle.radius", split),
            body_height: draw_in_split(rng, "bottle.body_height", split),
            neck_height: draw_in_split(rng, "bottle.neck_height", split),
            neck_ratio: draw_in_split(rng, "bottle.neck_ratio", split),
        },
        Category::Bowl => ShapeParams::Bowl {
            radius: draw_in_split(rng, "bowl.radius", split),
            thickness: draw_in_split(rng, "bowl.thickness", split),
        },
    }
}

/// Stable hash of quantized shape parameters, for split-disjointness checks.
pub fn shape_hash(params: &ShapeParams) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    };
    feed(params.category().id());
    for v in params.to_vec() {
        // quantize to 0.1 mm so float noise cannot alias across the split gap
        let q = (v * 1e4).round() as i64;
        for b in q.to_le_bytes() {
            feed(b);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn default_mug() -> ShapeParams {
        ShapeParams::Mug {
            radius: 0.035,
            height: 0.09,
            handle_tube_radius: 0.005,
            handle_loop_radius: 0.02,
        }
    }

    fn default_bottle() -> ShapeParams {
        ShapeParams::Bottle {
            radius: 0.03,
            body_height: 0.12,
            neck_height: 0.03,
            neck_ratio: 0.4,
        }
    }

    fn default_bowl() -> ShapeParams {
        ShapeParams::Bowl {
            radius: 0.06,
            thickness: 0.005,
        }
    }

    #[test]
    fn bowl_points_lie_on_hemisphere() {
        let params = default_bowl();
        let cloud = sample_surface(&params, 512, 3).unwrap();
        let c = [0.0, 0.0, 0.06];
        for p in cloud.points().rows() {
            let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt();
            assert!((d - 0.06).abs() < 1e-6, "off-surface bowl point: {d}");
        }
    }

    #[test]
    fn all_shapes_sample_on_surface() {
        for params in [default_mug(), default_bottle(), default_bowl()] {
            let cloud = sample_surface(&params, 512, 4).unwrap();
            for p in cloud.points().rows() {
                let d = surface_distance(&params, [p[0], p[1], p[2]]);
                assert!(d < 1e-6, "{:?}: surface distance {d}", params.category());
            }
        }
    }

    #[test]
    fn same_seed_same_cloud() {
        let params = default_mug();
        let a = sample_surface(&params, 128, 9).unwrap();
        let b = sample_surface(&params, 128, 9).unwrap();
        assert_eq!(a.points(), b.points());
        let c = sample_surface(&params, 128, 10).unwrap();
        assert_ne!(a.points(), c.points());
    }

    #[test]
    fn bottle_z_span_matches_configured_height() {
        let params = default_bottle();
        let cloud = sample_surface(&params, 1024, 5).unwrap();
        let mut zmin = f64::INFINITY;
        let mut zmax = f64::NEG_INFINITY;
        for p in cloud.points().rows() {
            zmin = zmin.min(p[2]);
            zmax = zmax.max(p[2]);
        }
        // analytic extent of the parametric bottle: z in [0, body+neck]
        assert!((zmin - 0.0).abs() < 1e-3, "zmin {zmin}");
        assert!((zmax - 0.15).abs() < 1e-3, "zmax {zmax}");
    }

    #[test]
    fn out_of_range_params_rejected() {
        let bad = ShapeParams::Bottle {
            radius: 0.1, // above schema max 0.05
            body_height: 0.12,
            neck_height: 0.03,
            neck_ratio: 0.4,
        };
        assert!(bad.validate().is_err());
        assert!(sample_surface(&bad, 16, 0).is_err());
    }

    #[test]
    fn zero_count_rejected() {
        assert!(sample_surface(&default_bowl(), 0, 0).is_err());
    }

    #[test]
    fn contains_matches_surface_band() {
        // points pushed slightly inside/outside along the surface normal
        // direction must flip the inside test across the boundary
        let params = default_bottle();
        assert!(contains(&params, [0.0, 0.0, 0.05]));
        assert!(contains(&params, [0.029, 0.0, 0.05]));
        assert!(!contains(&params, [0.031, 0.0, 0.05]));
        assert!(!contains(&params, [0.0, 0.0, 0.151]));
        // neck taper at mid-neck: radius = r + 0.5*(0.4r - r) = 0.7r = 0.021
        assert!(contains(&params, [0.0205, 0.0, 0.135]));
        assert!(!contains(&params, [0.0215, 0.0, 0.135]));
    }

    #[test]
    fn mug_centroid_is_inside() {
        let params = default_mug();
        assert!(contains(&params, [0.0, 0.0, 0.045]));
    }

    #[test]
    fn bowl_interior_is_hollow() {
        let params = default_bowl();
        // center of the cavity: on the axis just above the shell bottom
        assert!(!contains(&params, [0.0, 0.0, 0.03]));
        // inside the shell wall itself
        assert!(contains(&params, [0.0, 0.0, 0.0025]));
    }

    #[test]
    fn split_draws_are_disjoint_by_hash() {
        let mut rng_a = stream_rng(21, Stream::ShapeParams);
        let mut rng_b = stream_rng(22, Stream::ShapeParams);
        let mut train = std::collections::HashSet::new();
        let mut test = std::collections::HashSet::new();
        for cat in Category::ALL {
            for _ in 0..50 {
                train.insert(shape_hash(&draw_shape(cat, Split::Train, &mut rng_a)));
                test.insert(shape_hash(&draw_shape(cat, Split::Test, &mut rng_b)));
            }
        }
        assert!(train.is_disjoint(&test));
    }

    #[test]
    fn drawn_shapes_validate() {
        let mut rng = stream_rng(23, Stream::ShapeParams);
        for cat in Category::ALL {
            for split in [Split::Train, Split::Test] {
                for _ in 0..20 {
                    draw_shape(cat, split, &mut rng).validate().unwrap();
                }
            }
        }
    }

    #[test]
    fn param_vec_round_trip() {
        for p in [default_mug(), default_bottle(), default_bowl()] {
            let v = p.to_vec();
            let q = ShapeParams::from_vec(p.category(), &v).unwrap();
            assert_eq!(p, q);
        }
    }
}
