//! Named parameter storage with Adam updates.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Flat store of named parameter matrices plus Adam moment buffers.
///
/// Parameter order is insertion order and is part of the checkpoint
/// format: serialization walks the store front to back.
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    grads: Vec<Array2<f64>>,
    adam_m: Vec<Array2<f64>>,
    adam_v: Vec<Array2<f64>>,
    steps: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            adam_m: Vec::new(),
            adam_v: Vec::new(),
            steps: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let dim = value.raw_dim();
        self.names.push(name.into());
        self.values.push(value);
        self.grads.push(Array2::zeros(dim));
        self.adam_m.push(Array2::zeros(dim));
        self.adam_v.push(Array2::zeros(dim));
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Array2<f64>) {
        self.grads[id.0] += g;
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// One Adam step over every parameter, then zeroed gradients.
    pub fn adam_step(&mut self, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - B1.powi(t);
        let c2 = 1.0 - B2.powi(t);
        for i in 0..self.values.len() {
            let g = &self.grads[i];
            self.adam_m[i] = &self.adam_m[i] * B1 + g * (1.0 - B1);
            self.adam_v[i] = &self.adam_v[i] * B2 + &g.mapv(|x| x * x) * (1.0 - B2);
            let mhat = &self.adam_m[i] / c1;
            let vhat = &self.adam_v[i] / c2;
            let update = mhat / (vhat.mapv(f64::sqrt) + EPS);
            self.values[i] = &self.values[i] - &(update * lr);
        }
        self.zero_grads();
    }

    /// All parameter values as little-endian f64 bytes, in store order.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in &self.values {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Restores parameter values from a blob produced by [`to_blob`]
    /// on a store with identical shapes.
    pub fn load_blob(&mut self, blob: &[u8]) -> crate::Result<()> {
        let total: usize = self.values.iter().map(|v| v.len()).sum();
        if blob.len() != total * 8 {
            return Err(crate::Error::Format(format!(
                "parameter blob is {} bytes, expected {}",
                blob.len(),
                total * 8
            )));
        }
        let mut off = 0;
        for v in &mut self.values {
            for x in v.iter_mut() {
                let mut b = [0u8; 8];
                b.copy_from_slice(&blob[off..off + 8]);
                *x = f64::from_le_bytes(b);
                off += 8;
            }
        }
        Ok(())
    }

    /// `(name, rows, cols)` for every parameter, in store order.
    pub fn shapes(&self) -> Vec<(String, usize, usize)> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (n.clone(), v.nrows(), v.ncols()))
            .collect()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Tracks which tape leaves mirror which store parameters during one
/// forward/backward pass.
pub struct Binder {
    bound: Vec<(ParamId, Var)>,
}

impl Binder {
    pub fn new() -> Self {
        Binder { bound: Vec::new() }
    }

    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Var {
        let v = tape.leaf(store.value(id).clone());
        self.bound.push((id, v));
        v
    }

    /// Pulls gradients off the tape into the store (accumulating).
    pub fn write_grads(&self, tape: &Tape, store: &mut ParamStore) {
        for (id, var) in &self.bound {
            store.accumulate_grad(*id, &tape.grad(*var));
        }
    }
}

impl Default for Binder {
    fn default() -> Self {
        Self::new()
    }
}

/// Uniform init in `[-limit, limit]`.
pub fn init_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, limit: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

/// Glorot/Xavier uniform init for a `(fan_in, fan_out)` weight matrix.
pub fn init_xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    init_uniform(rng, fan_in, fan_out, limit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize mean((x - 3)^2) over a single parameter matrix
        let mut store = ParamStore::new();
        let id = store.add("x", Array2::zeros((2, 2)));
        for _ in 0..500 {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let x = binder.bind(&mut tape, &store, id);
            let target = Array2::from_elem((2, 2), 3.0);
            let loss = tape.mse_mean(x, target);
            tape.backward(loss);
            binder.write_grads(&tape, &mut store);
            store.adam_step(0.05);
        }
        for v in store.value(id).iter() {
            assert!((v - 3.0).abs() < 1e-2, "got {v}");
        }
    }

    #[test]
    fn blob_round_trip_is_bit_identical() {
        let mut rng = stream_rng(3, Stream::WeightInit);
        let mut store = ParamStore::new();
        store.add("a", init_xavier(&mut rng, 4, 7));
        store.add("b", init_uniform(&mut rng, 1, 5, 0.3));
        let blob = store.to_blob();

        let mut other = ParamStore::new();
        other.add("a", Array2::zeros((4, 7)));
        other.add("b", Array2::zeros((1, 5)));
        other.load_blob(&blob).unwrap();
        assert_eq!(other.to_blob(), blob);
    }

    #[test]
    fn blob_length_mismatch_is_an_error() {
        let mut store = ParamStore::new();
        store.add("a", Array2::zeros((2, 2)));
        assert!(store.load_blob(&[0u8; 7]).is_err());
    }
}
