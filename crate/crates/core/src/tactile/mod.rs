//! Tactile observation compression.
//!
//! Two self-supervised stages: a per-frame autoencoder squeezes each
//! finger image to a low-dimensional code, then a sequence autoencoder
//! over tokens (left code ⊕ right code ⊕ end-effector pose) summarizes a
//! 5-frame history into a motion embedding — the final hidden state of
//! the sequence encoder. The embedding is what the contact head is
//! conditioned on.

pub mod frame_ae;
pub mod seq_ae;

use ndarray::{Array1, Array3};

use crate::geometry::EEPose;
use crate::{Error, Result};

pub use frame_ae::{frame_decode, frame_encode, train_frame_ae, FrameAeConfig, FrameAeModel};
pub use seq_ae::{
    seq_decode, seq_encode, seq_encode_tokens, tokens_from_sequence, train_seq_ae, SeqAeConfig,
    SeqAeModel, SeqCell,
};

/// History offsets (in timesteps back from the current one) that make up
/// a tactile sequence.
pub const SEQUENCE_OFFSETS: [usize; 5] = [0, 2, 4, 7, 9];

/// Sequence length k.
pub const SEQUENCE_LEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Finger {
    Left,
    Right,
}

/// One tactile image: `(H, W, 3)` values in `[0,1]`.
///
/// Values are stored as f32 to match the trajectory file format exactly;
/// models lift them to f64 at their input.
#[derive(Debug, Clone, PartialEq)]
pub struct TactileFrame {
    pub image: Array3<f32>,
    pub finger: Finger,
    pub timestep: usize,
}

impl TactileFrame {
    pub fn new(image: Array3<f32>, finger: Finger, timestep: usize) -> Result<Self> {
        if image.shape()[2] != 3 {
            return Err(Error::Dimension {
                context: "TactileFrame channels".into(),
                expected: 3,
                actual: image.shape()[2],
            });
        }
        if image.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::invalid("tactile frame values must lie in [0,1]"));
        }
        Ok(TactileFrame {
            image,
            finger,
            timestep,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    /// Row-major flattening to f64, `(y, x, c)` with c fastest.
    pub fn flat_f64(&self) -> Array1<f64> {
        Array1::from_iter(self.image.iter().map(|v| *v as f64))
    }
}

/// Low-dimensional code of one tactile frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameCode {
    pub code: Array1<f64>,
}

/// Five (left, right) frame pairs plus matching end-effector poses, at
/// offsets [`SEQUENCE_OFFSETS`] back from the newest timestep. `padded`
/// marks windows near a trajectory start where indices were clamped.
#[derive(Debug, Clone)]
pub struct TactileSequence {
    /// Newest first, i.e. `frames[0]` is the current timestep.
    pub frames: Vec<(TactileFrame, TactileFrame)>,
    pub poses: Vec<EEPose>,
    pub padded: bool,
}

impl TactileSequence {
    pub fn new(
        frames: Vec<(TactileFrame, TactileFrame)>,
        poses: Vec<EEPose>,
        padded: bool,
    ) -> Result<Self> {
        if frames.len() != SEQUENCE_LEN || poses.len() != SEQUENCE_LEN {
            return Err(Error::invalid(format!(
                "tactile sequence needs exactly {SEQUENCE_LEN} frame pairs and poses"
            )));
        }
        Ok(TactileSequence {
            frames,
            poses,
            padded,
        })
    }
}

/// Motion embedding E(G): the sequence encoder's last hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionEmbedding {
    pub e: Array1<f64>,
}

/// Timesteps `[t, t-2, t-4, t-7, t-9]` making up the window at `t`.
///
/// For `t < 9` negative indices clamp to 0 and the padding flag is set;
/// callers decide whether padded windows are acceptable.
pub fn select_sequence_indices(t: usize) -> ([usize; 5], bool) {
    let mut out = [0usize; 5];
    for (i, off) in SEQUENCE_OFFSETS.iter().enumerate() {
        out[i] = t.saturating_sub(*off);
    }
    (out, t < SEQUENCE_OFFSETS[SEQUENCE_OFFSETS.len() - 1])
}

/// Token: `left code ⊕ right code ⊕ pose (qw,qx,qy,qz,tx,ty,tz)`.
pub fn build_token(left: &FrameCode, right: &FrameCode, pose: &EEPose) -> Result<Array1<f64>> {
    if left.code.len() != right.code.len() {
        return Err(Error::Dimension {
            context: "build_token finger codes".into(),
            expected: left.code.len(),
            actual: right.code.len(),
        });
    }
    let d = left.code.len();
    let mut token = Array1::zeros(2 * d + 7);
    token.slice_mut(ndarray::s![0..d]).assign(&left.code);
    token.slice_mut(ndarray::s![d..2 * d]).assign(&right.code);
    let p = pose.pose.to_array7();
    for (i, v) in p.iter().enumerate() {
        token[2 * d + i] = *v;
    }
    Ok(token)
}

/// Exact inverse of [`build_token`].
pub fn split_token(token: &Array1<f64>, d: usize) -> Result<(FrameCode, FrameCode, [f64; 7])> {
    if token.len() != 2 * d + 7 {
        return Err(Error::Dimension {
            context: "split_token".into(),
            expected: 2 * d + 7,
            actual: token.len(),
        });
    }
    let left = FrameCode {
        code: token.slice(ndarray::s![0..d]).to_owned(),
    };
    let right = FrameCode {
        code: token.slice(ndarray::s![d..2 * d]).to_owned(),
    };
    let mut pose = [0.0; 7];
    for (i, v) in pose.iter_mut().enumerate() {
        *v = token[2 * d + i];
    }
    Ok((left, right, pose))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidTransform;
    use proptest::prelude::*;

    #[test]
    fn window_indices_match_offsets() {
        assert_eq!(select_sequence_indices(9), ([9, 7, 5, 2, 0], false));
        assert_eq!(select_sequence_indices(20), ([20, 18, 16, 13, 11], false));
    }

    #[test]
    fn early_window_clamps_and_flags() {
        assert_eq!(select_sequence_indices(3), ([3, 1, 0, 0, 0], true));
        assert_eq!(select_sequence_indices(0), ([0, 0, 0, 0, 0], true));
        assert_eq!(select_sequence_indices(8), ([8, 6, 4, 1, 0], true));
    }

    proptest! {
        #[test]
        fn window_is_nonincreasing_with_len_5(t in 0usize..10_000) {
            let (idx, padded) = select_sequence_indices(t);
            prop_assert_eq!(idx.len(), 5);
            for w in idx.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            prop_assert_eq!(padded, t < 9);
        }
    }

    #[test]
    fn token_layout() {
        let d = 32;
        let left = FrameCode {
            code: Array1::zeros(d),
        };
        let right = FrameCode {
            code: Array1::zeros(d),
        };
        let pose = EEPose {
            pose: RigidTransform::identity(),
            timestep: 0,
        };
        let token = build_token(&left, &right, &pose).unwrap();
        assert_eq!(token.len(), 71);
        assert!(token.slice(ndarray::s![0..64]).iter().all(|v| *v == 0.0));
        assert_eq!(
            token.slice(ndarray::s![64..]).to_vec(),
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn token_split_inverts_build() {
        let d = 5;
        let left = FrameCode {
            code: Array1::from_iter((0..d).map(|i| i as f64 * 0.1)),
        };
        let right = FrameCode {
            code: Array1::from_iter((0..d).map(|i| -(i as f64) * 0.2)),
        };
        let pose = EEPose {
            pose: RigidTransform::from_translation([0.1, 0.2, 0.3]),
            timestep: 4,
        };
        let token = build_token(&left, &right, &pose).unwrap();
        let (l2, r2, p2) = split_token(&token, d).unwrap();
        assert_eq!(l2.code, left.code);
        assert_eq!(r2.code, right.code);
        assert_eq!(p2, pose.pose.to_array7());
    }

    #[test]
    fn mismatched_code_dims_rejected() {
        let left = FrameCode {
            code: Array1::zeros(4),
        };
        let right = FrameCode {
            code: Array1::zeros(5),
        };
        let pose = EEPose {
            pose: RigidTransform::identity(),
            timestep: 0,
        };
        assert!(build_token(&left, &right, &pose).is_err());
    }

    #[test]
    fn frame_value_range_enforced() {
        let mut img = Array3::zeros((4, 4, 3));
        img[(0, 0, 0)] = 1.5;
        assert!(TactileFrame::new(img, Finger::Left, 0).is_err());
        let ok = Array3::from_elem((4, 4, 3), 0.5f32);
        assert!(TactileFrame::new(ok, Finger::Right, 3).is_ok());
    }
}
