//! Visual input production: binary masks and relative depth from simulator
//! ground truth (standing in for pretrained segmentation/depth networks),
//! fused into masked depth maps.
//!
//! The camera frames a fixed window of the scene; all images are 64x64
//! grayscale. Masks are strictly binary {0, 255}; depth is normalized scene
//! depth in [0, 1] with 1.0 = background.

use std::path::Path;

use crate::io::{self, IoResult};
use crate::socksim::SimState;

/// Image edge length in pixels.
pub const IMG: usize = 64;
/// Scene-units extent of the square camera window.
pub const CAMERA_EXTENT: f64 = 6.4;
/// Scene coordinates of the window's lower-left corner.
pub const CAMERA_ORIGIN: [f64; 2] = [0.0, 0.0];

/// Scene position of the center of pixel (row, col); rows grow downward.
pub fn pixel_center(row: usize, col: usize) -> [f64; 2] {
    let res = CAMERA_EXTENT / IMG as f64;
    [
        CAMERA_ORIGIN[0] + (col as f64 + 0.5) * res,
        CAMERA_ORIGIN[1] + CAMERA_EXTENT - (row as f64 + 0.5) * res,
    ]
}

#[derive(Debug, thiserror::Error)]
pub enum PerceptionError {
    #[error("mask pixel {index} has value {value}; masks must be 0 or 255")]
    NonBinaryMask { index: usize, value: u8 },
    #[error("dimension mismatch: {lhs_w}x{lhs_h} vs {rhs_w}x{rhs_h}")]
    DimMismatch {
        lhs_w: usize,
        lhs_h: usize,
        rhs_w: usize,
        rhs_h: usize,
    },
    #[error("depth value {value} at pixel {index} outside [0,1]")]
    BadDepth { index: usize, value: f32 },
}

/// Binary mask; 255 marks the region of interest.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u8>,
}

impl MaskImage {
    pub fn from_raw(width: usize, height: usize, values: Vec<u8>) -> Result<Self, PerceptionError> {
        assert_eq!(values.len(), width * height);
        for (index, &value) in values.iter().enumerate() {
            if value != 0 && value != 255 {
                return Err(PerceptionError::NonBinaryMask { index, value });
            }
        }
        Ok(MaskImage {
            width,
            height,
            values,
        })
    }

    pub fn coverage(&self) -> usize {
        self.values.iter().filter(|&&v| v == 255).count()
    }
}

/// Per-pixel nonnegative relative depth in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl DepthMap {
    pub fn from_raw(width: usize, height: usize, values: Vec<f32>) -> Result<Self, PerceptionError> {
        assert_eq!(values.len(), width * height);
        for (index, &value) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) || !value.is_finite() {
                return Err(PerceptionError::BadDepth { index, value });
            }
        }
        Ok(DepthMap {
            width,
            height,
            values,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    Zero,
    Nan,
}

/// Depth inside the mask, fill value outside.
#[derive(Debug, Clone)]
pub struct MaskedDepth {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub fill_mode: FillMode,
}

/// Maps mask bytes to unit values: 255 -> 1.0, 0 -> 0.0. Any other pixel
/// value is rejected.
pub fn normalize_mask(values: &[u8]) -> Result<Vec<f32>, PerceptionError> {
    values
        .iter()
        .enumerate()
        .map(|(index, &value)| match value {
            255 => Ok(1.0),
            0 => Ok(0.0),
            _ => Err(PerceptionError::NonBinaryMask { index, value }),
        })
        .collect()
}

/// Per-pixel: depth where the mask is 255, fill elsewhere. With
/// `FillMode::Zero` this equals the Hadamard product of the normalized mask
/// and the depth map.
pub fn masked_depth(
    d: &DepthMap,
    m: &MaskImage,
    fill: FillMode,
) -> Result<MaskedDepth, PerceptionError> {
    if d.width != m.width || d.height != m.height {
        return Err(PerceptionError::DimMismatch {
            lhs_w: d.width,
            lhs_h: d.height,
            rhs_w: m.width,
            rhs_h: m.height,
        });
    }
    let fill_value = match fill {
        FillMode::Zero => 0.0f32,
        FillMode::Nan => f32::NAN,
    };
    let values = d
        .values
        .iter()
        .zip(&m.values)
        .map(|(&dv, &mv)| if mv == 255 { dv } else { fill_value })
        .collect();
    Ok(MaskedDepth {
        width: d.width,
        height: d.height,
        values,
        fill_mode: fill,
    })
}

/// The model's visual input for one frame.
#[derive(Debug, Clone)]
pub struct PerceptionFrame {
    pub sock_masked_depth: MaskedDepth,
    pub foot_masked_depth: MaskedDepth,
    pub raw_depth: DepthMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegTarget {
    Sock,
    Foot,
}

fn inside_circles(p: [f64; 2], circles: &[[f64; 3]]) -> bool {
    circles
        .iter()
        .any(|c| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) <= c[2] * c[2])
}

/// Rasterizes the silhouette of the target geometry. The sock occludes the
/// foot: overlap pixels belong to the sock mask only.
pub fn oracle_segment(state: &SimState, target: SegTarget) -> MaskImage {
    let sock_circles = state.sock.circles();
    let foot_circles = state.foot.circles();
    let mut values = vec![0u8; IMG * IMG];
    for row in 0..IMG {
        for col in 0..IMG {
            let p = pixel_center(row, col);
            let in_sock = inside_circles(p, &sock_circles);
            let hit = match target {
                SegTarget::Sock => in_sock,
                SegTarget::Foot => !in_sock && inside_circles(p, &foot_circles),
            };
            if hit {
                values[row * IMG + col] = 255;
            }
        }
    }
    MaskImage {
        width: IMG,
        height: IMG,
        values,
    }
}

/// Synthetic normalized depth: background 1.0; foot pixels follow
/// `0.5 + 0.3 * lateral profile`; sock pixels sit 0.05 nearer the camera
/// than the co-located foot rule (falling back to the sock tube's own
/// profile away from the foot). Clamped to [0, 1].
pub fn oracle_depth(state: &SimState) -> DepthMap {
    let mut values = vec![1.0f32; IMG * IMG];
    let sock_circles = state.sock.circles();
    let foot_circles = state.foot.circles();
    for row in 0..IMG {
        for col in 0..IMG {
            let p = pixel_center(row, col);
            let in_sock = inside_circles(p, &sock_circles);
            let in_foot = inside_circles(p, &foot_circles);
            if !in_sock && !in_foot {
                continue;
            }
            let foot_rule = |profile: f64| 0.5 + 0.3 * profile;
            let v = if in_sock {
                let profile = state
                    .foot
                    .profile_at(p)
                    .or_else(|| state.sock.profile_at(p))
                    .unwrap_or(1.0);
                foot_rule(profile) - 0.05
            } else {
                foot_rule(state.foot.profile_at(p).unwrap_or(1.0))
            };
            values[row * IMG + col] = (v as f32).clamp(0.0, 1.0);
        }
    }
    DepthMap {
        width: IMG,
        height: IMG,
        values,
    }
}

/// Plain camera rendering without any semantic separation: flat tones with
/// a mild profile shading. Feeds the variant that bypasses masks and depth.
pub fn render_grayscale(state: &SimState) -> Vec<f32> {
    let mut values = vec![0.9f32; IMG * IMG];
    let sock_circles = state.sock.circles();
    let foot_circles = state.foot.circles();
    for row in 0..IMG {
        for col in 0..IMG {
            let p = pixel_center(row, col);
            if inside_circles(p, &sock_circles) {
                let prof = state.sock.profile_at(p).unwrap_or(1.0);
                values[row * IMG + col] = (0.25 + 0.10 * prof) as f32;
            } else if inside_circles(p, &foot_circles) {
                let prof = state.foot.profile_at(p).unwrap_or(1.0);
                values[row * IMG + col] = (0.55 + 0.15 * prof) as f32;
            }
        }
    }
    values
}

/// Full sensory snapshot for one tick.
#[derive(Debug, Clone)]
pub struct Sensation {
    pub frame: PerceptionFrame,
    pub grayscale: Vec<f32>,
    pub angles: [f64; crate::socksim::JOINT_DIMS],
    pub torques: [f64; crate::socksim::JOINT_DIMS],
    pub tactile: [f64; crate::socksim::TACTILE_DIMS],
}

/// Senses the full model input from the simulator: oracle masks and depth
/// fused into masked-depth channels, plus proprioception.
pub fn sense(state: &SimState) -> Sensation {
    let depth = oracle_depth(state);
    let sock_mask = oracle_segment(state, SegTarget::Sock);
    let foot_mask = oracle_segment(state, SegTarget::Foot);
    let sock_md = masked_depth(&depth, &sock_mask, FillMode::Zero).expect("same dims");
    let foot_md = masked_depth(&depth, &foot_mask, FillMode::Zero).expect("same dims");
    let (angles, torques, tactile) = state.proprioception();
    Sensation {
        frame: PerceptionFrame {
            sock_masked_depth: sock_md,
            foot_masked_depth: foot_md,
            raw_depth: depth,
        },
        grayscale: render_grayscale(state),
        angles,
        torques,
        tactile,
    }
}

// ── Export ──────────────────────────────────────────────────────────────

pub fn export_mask(path: &Path, m: &MaskImage) -> IoResult<()> {
    io::write_pgm8(path, m.width, m.height, &m.values)
}

pub fn export_depth(path: &Path, d: &DepthMap) -> IoResult<()> {
    let pixels: Vec<u16> = d
        .values
        .iter()
        .map(|&v| (v as f64 * 65535.0).round() as u16)
        .collect();
    io::write_pgm16(path, d.width, d.height, &pixels)
}

/// Masked depth as 16-bit PGM. NaN fill is exported as 0; a sidecar note
/// records the fill mode so zeros are not mistaken for in-mask depth.
pub fn export_masked_depth(path: &Path, md: &MaskedDepth) -> IoResult<()> {
    let pixels: Vec<u16> = md
        .values
        .iter()
        .map(|&v| {
            if v.is_nan() {
                0
            } else {
                (v as f64 * 65535.0).round() as u16
            }
        })
        .collect();
    io::write_pgm16(path, md.width, md.height, &pixels)?;
    if md.fill_mode == FillMode::Nan {
        let note = path.with_extension("fill.json");
        let body = serde_json::json!({
            "fill_mode": "nan",
            "note": "out-of-mask pixels were NaN and are stored as 0",
        });
        std::fs::write(&note, serde_json::to_string_pretty(&body).expect("json"))
            .map_err(|e| crate::io::IoError::Io {
                path: note.display().to_string(),
                source: e,
            })?;
    }
    Ok(())
}

pub fn import_depth(path: &Path) -> IoResult<DepthMap> {
    let (width, height, pixels) = io::read_pgm16(path)?;
    let values = pixels
        .iter()
        .map(|&p| (p as f64 / 65535.0) as f32)
        .collect();
    Ok(DepthMap {
        width,
        height,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::socksim::{FootGeom, SimConfig, SimState, ANKLE_BASE};
    use proptest::prelude::*;

    fn test_state() -> SimState {
        let foot = FootGeom::new(40.0, 2.4, ANKLE_BASE).unwrap();
        SimState::new(foot, SimConfig::default(), 1)
    }

    #[test]
    fn normalize_mask_maps_binary_values() {
        assert_eq!(normalize_mask(&[255, 0, 255]).unwrap(), vec![1.0, 0.0, 1.0]);
        let all_on = normalize_mask(&[255; 16]).unwrap();
        assert!(all_on.iter().all(|&v| v == 1.0));
        let all_off = normalize_mask(&[0; 16]).unwrap();
        assert!(all_off.iter().all(|&v| v == 0.0));
        assert!(matches!(
            normalize_mask(&[0, 7, 255]),
            Err(PerceptionError::NonBinaryMask { index: 1, value: 7 })
        ));
    }

    #[test]
    fn masked_depth_identity_and_annihilation() {
        let d = DepthMap::from_raw(2, 2, vec![0.1, 0.4, 0.7, 1.0]).unwrap();
        let all = MaskImage::from_raw(2, 2, vec![255; 4]).unwrap();
        let none = MaskImage::from_raw(2, 2, vec![0; 4]).unwrap();
        assert_eq!(masked_depth(&d, &all, FillMode::Zero).unwrap().values, d.values);
        assert_eq!(
            masked_depth(&d, &none, FillMode::Zero).unwrap().values,
            vec![0.0; 4]
        );
    }

    #[test]
    fn masked_depth_dim_mismatch_rejected() {
        let d = DepthMap::from_raw(2, 2, vec![0.5; 4]).unwrap();
        let m = MaskImage::from_raw(3, 2, vec![0; 6]).unwrap();
        assert!(matches!(
            masked_depth(&d, &m, FillMode::Zero),
            Err(PerceptionError::DimMismatch { .. })
        ));
    }

    proptest! {
        /// Hadamard-product equivalence against an independent per-pixel
        /// loop, plus NaN placement, on random (D, M) pairs.
        #[test]
        fn masked_depth_matches_elementwise_oracle(
            depth in proptest::collection::vec(0.0f32..=1.0, 64),
            mask_bits in proptest::collection::vec(any::<bool>(), 64),
        ) {
            let d = DepthMap::from_raw(8, 8, depth.clone()).unwrap();
            let bytes: Vec<u8> = mask_bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
            let m = MaskImage::from_raw(8, 8, bytes.clone()).unwrap();

            let got = masked_depth(&d, &m, FillMode::Zero).unwrap();
            let norm = normalize_mask(&bytes).unwrap();
            for i in 0..64 {
                let expect = norm[i] * depth[i];
                prop_assert_eq!(got.values[i].to_bits(), expect.to_bits());
            }

            let nan = masked_depth(&d, &m, FillMode::Nan).unwrap();
            for i in 0..64 {
                prop_assert_eq!(nan.values[i].is_nan(), bytes[i] == 0);
            }

            // idempotence under re-masking
            let redone = masked_depth(
                &DepthMap::from_raw(8, 8, got.values.clone()).unwrap(),
                &m,
                FillMode::Zero,
            )
            .unwrap();
            prop_assert_eq!(&redone.values, &got.values);
        }
    }

    #[test]
    fn oracle_masks_are_strictly_binary_and_disjoint() {
        let state = test_state();
        let sock = oracle_segment(&state, SegTarget::Sock);
        let foot = oracle_segment(&state, SegTarget::Foot);
        for (&s, &f) in sock.values.iter().zip(&foot.values) {
            assert!(s == 0 || s == 255);
            assert!(f == 0 || f == 255);
            assert!(!(s == 255 && f == 255), "sock must occlude foot");
        }
        assert!(sock.coverage() > 0);
        assert!(foot.coverage() > 0);
    }

    #[test]
    fn sock_mask_takes_precedence_on_overlap() {
        let mut state = test_state();
        // drape the sock straight across the foot axis
        let c = state.foot.ankle_anchor;
        for (i, p) in state.sock.particles.iter_mut().enumerate() {
            *p = [c[0] - 1.2 + 0.12 * i as f64, c[1] - 0.8];
        }
        let sock = oracle_segment(&state, SegTarget::Sock);
        let foot = oracle_segment(&state, SegTarget::Foot);
        let overlap: usize = sock
            .values
            .iter()
            .zip(&foot.values)
            .filter(|(&s, &f)| s == 255 && f == 255)
            .count();
        assert_eq!(overlap, 0);
    }

    #[test]
    fn foot_mask_count_matches_scanline_oracle() {
        let state = test_state();
        // move the sock fully off-screen so the foot is unoccluded
        let mut s = state;
        for p in s.sock.particles.iter_mut() {
            *p = [-10.0, -10.0];
        }
        let mask = oracle_segment(&s, SegTarget::Foot);
        // scanline: per row, union of [x0, x1] circle intervals
        let circles = s.foot.circles();
        let res = CAMERA_EXTENT / IMG as f64;
        let mut count = 0usize;
        for row in 0..IMG {
            let y = CAMERA_ORIGIN[1] + CAMERA_EXTENT - (row as f64 + 0.5) * res;
            let mut intervals: Vec<(f64, f64)> = Vec::new();
            for c in &circles {
                let dy = y - c[1];
                let rad2 = c[2] * c[2] - dy * dy;
                if rad2 >= 0.0 {
                    let half = rad2.sqrt();
                    intervals.push((c[0] - half, c[0] + half));
                }
            }
            for col in 0..IMG {
                let x = CAMERA_ORIGIN[0] + (col as f64 + 0.5) * res;
                if intervals.iter().any(|(lo, hi)| x >= *lo && x <= *hi) {
                    count += 1;
                }
            }
        }
        assert_eq!(mask.coverage(), count);
    }

    #[test]
    fn sock_off_screen_gives_empty_sock_mask() {
        let mut state = test_state();
        for p in state.sock.particles.iter_mut() {
            *p = [-10.0, -10.0];
        }
        let sock = oracle_segment(&state, SegTarget::Sock);
        assert_eq!(sock.coverage(), 0);
    }

    #[test]
    fn empty_scene_depth_is_all_background() {
        let mut state = test_state();
        for p in state.sock.particles.iter_mut() {
            *p = [-10.0, -10.0];
        }
        state.foot.ankle_anchor = [-20.0, -20.0];
        let d = oracle_depth(&state);
        assert!(d.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sock_pixels_are_nearer_than_foot_rule() {
        let state = test_state();
        let d = oracle_depth(&state);
        let sock = oracle_segment(&state, SegTarget::Sock);
        for (i, &m) in sock.values.iter().enumerate() {
            if m == 255 {
                let p = pixel_center(i / IMG, i % IMG);
                if let Some(prof) = state.foot.profile_at(p) {
                    let foot_rule = 0.5 + 0.3 * prof;
                    assert!(
                        (d.values[i] as f64) < foot_rule,
                        "sock depth {} !< foot rule {}",
                        d.values[i],
                        foot_rule
                    );
                }
            }
        }
    }

    #[test]
    fn oracle_depth_is_bitwise_stable() {
        let state = test_state();
        let a: Vec<u32> = oracle_depth(&state).values.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = oracle_depth(&state).values.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn depth_export_round_trips_to_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let state = test_state();
        let d = oracle_depth(&state);
        let p = dir.path().join("depth.pgm");
        export_depth(&p, &d).unwrap();
        let back = import_depth(&p).unwrap();
        for (a, b) in d.values.iter().zip(&back.values) {
            assert!((a - b).abs() < 0.5 / 65535.0 + 1e-7);
        }
    }

    #[test]
    fn nan_fill_export_writes_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let d = DepthMap::from_raw(2, 2, vec![0.5; 4]).unwrap();
        let m = MaskImage::from_raw(2, 2, vec![255, 0, 0, 255]).unwrap();
        let md = masked_depth(&d, &m, FillMode::Nan).unwrap();
        let p = dir.path().join("md.pgm");
        export_masked_depth(&p, &md).unwrap();
        assert!(dir.path().join("md.fill.json").exists());
        let (_, _, pixels) = crate::io::read_pgm16(&p).unwrap();
        assert_eq!(pixels[1], 0);
        assert_eq!(pixels[0], 32768);
    }
}
