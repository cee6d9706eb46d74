//! Visual encoder with depth-aware spatial-softmax keypoints, 1-D selective
//! kernel attention for somatosensory signals, and the heatmap-conditioned
//! image decoder.
//!
//! Forward functions build onto a caller-provided [`Tape`], so the same code
//! serves f32 training and the f64 finite-difference oracle.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::diffcore::{grid_coord, DiffError, DiffResult, LoadedParams, ParamSet, Real, Tape, Tensor, Var};
use crate::io::{self, IoResult};

/// Six 3D attention keypoints for one frame, image-normalized (x, y) in
/// [-1, 1] and z in depth units.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub points: Vec<[f32; 3]>,
}

impl KeypointSet {
    /// Packs a tape output of shape `[count, kd]` (kd = 2 or 3; z = 0 when
    /// absent).
    pub fn from_flat(values: &[f32], kd: usize) -> Self {
        let points = values
            .chunks_exact(kd)
            .map(|c| [c[0], c[1], if kd == 3 { c[2] } else { 0.0 }])
            .collect();
        KeypointSet { points }
    }
}

/// Writes keypoint traces as CSV: t, kp_index, x, y, z.
pub fn write_keypoint_csv(path: &Path, trace: &[KeypointSet]) -> IoResult<()> {
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for (t, set) in trace.iter().enumerate() {
        for (k, p) in set.points.iter().enumerate() {
            rows.push(vec![t as f32, k as f32, p[0], p[1], p[2]]);
        }
    }
    io::write_f32_csv(path, &rows)
}

// ── Parameters ──────────────────────────────────────────────────────────

const MODALITIES: [&str; 3] = ["angles", "torques", "tactile"];

/// Registers encoder, decoder, and selective-kernel parameters.
pub fn build_vision_params<R: Real>(
    cfg: &ModelConfig,
    ps: &mut ParamSet<R>,
    rng: &mut ChaCha8Rng,
) {
    let [c1, c2, c3] = cfg.enc_channels;
    let ic = cfg.in_channels();
    let k = 3usize;
    let conv = |ps: &mut ParamSet<R>, rng: &mut ChaCha8Rng, name: &str, oc: usize, icc: usize| {
        let fan_in = icc * k * k;
        ps.insert(
            &format!("{name}.w"),
            Tensor::uniform_fan_in(&[oc, fan_in], fan_in, rng),
        );
        ps.insert(
            &format!("{name}.b"),
            Tensor::uniform_fan_in(&[oc], fan_in, rng),
        );
    };
    conv(ps, rng, "enc.conv1", c1, ic);
    conv(ps, rng, "enc.conv2", c2, c1);
    conv(ps, rng, "enc.conv3", c3, c2);

    // transposed convs store weights as [in_c, out_c*k*k]
    let dm = cfg.dec_mid_channels;
    ps.insert(
        "dec.tconv1.w",
        Tensor::uniform_fan_in(&[c3, dm * k * k], c3 * k * k, rng),
    );
    ps.insert(
        "dec.tconv1.b",
        Tensor::uniform_fan_in(&[dm], c3 * k * k, rng),
    );
    ps.insert(
        "dec.tconv2.w",
        Tensor::uniform_fan_in(&[dm, ic * k * k], dm * k * k, rng),
    );
    ps.insert(
        "dec.tconv2.b",
        Tensor::uniform_fan_in(&[ic], dm * k * k, rng),
    );

    if cfg.sknet_enabled() {
        for m in MODALITIES {
            build_sknet_params(cfg, ps, rng, &format!("sk.{m}"));
        }
    }
}

fn build_sknet_params<R: Real>(
    cfg: &ModelConfig,
    ps: &mut ParamSet<R>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
) {
    let ch = cfg.sknet_channels;
    let z = cfg.sknet_reduced;
    let mut lin = |name: String, rows: usize, cols: usize, fan_in: usize| {
        let r = &mut *rng;
        ps.insert(&format!("{name}.w"), Tensor::uniform_fan_in(&[rows, cols], fan_in, r));
        ps.insert(&format!("{name}.b"), Tensor::uniform_fan_in(&[rows], fan_in, r));
    };
    lin(format!("{prefix}.lift"), ch, 3, 3);
    lin(format!("{prefix}.k3"), ch, ch * 3, ch * 3);
    lin(format!("{prefix}.k5"), ch, ch * 5, ch * 5);
    lin(format!("{prefix}.fuse"), z, ch, ch);
    lin(format!("{prefix}.sel3"), ch, z, z);
    lin(format!("{prefix}.sel5"), ch, z, z);
    lin(format!("{prefix}.out"), 1, ch, ch);
}

// ── Encoder and keypoints ───────────────────────────────────────────────

/// CNN encoder: two stride-2 convs and one stride-1 conv down to one
/// feature channel per keypoint.
pub fn encode_image<R: Real>(
    tape: &mut Tape<R>,
    lp: &LoadedParams,
    cfg: &ModelConfig,
    input: Var,
) -> DiffResult<Var> {
    let shape = tape.shape(input).to_vec();
    if shape != [cfg.in_channels(), cfg.img, cfg.img] {
        return Err(DiffError::ShapeMismatch {
            op: "encode_image",
            lhs: shape,
            rhs: vec![cfg.in_channels(), cfg.img, cfg.img],
        });
    }
    let h1 = tape.conv2d(input, lp.var("enc.conv1.w"), lp.var("enc.conv1.b"), 3, 2)?;
    let h1 = tape.tanh(h1);
    let h2 = tape.conv2d(h1, lp.var("enc.conv2.w"), lp.var("enc.conv2.b"), 3, 2)?;
    let h2 = tape.tanh(h2);
    tape.conv2d(h2, lp.var("enc.conv3.w"), lp.var("enc.conv3.b"), 3, 1)
}

/// Per-channel softmax over spatial positions with temperature.
/// Input `[c, h, w]`; output `[c, h*w]` rows summing to 1.
pub fn spatial_softmax<R: Real>(
    tape: &mut Tape<R>,
    features: Var,
    temperature: f64,
) -> DiffResult<Var> {
    if temperature <= 0.0 {
        return Err(DiffError::InvalidArg {
            op: "spatial_softmax",
            msg: format!("temperature must be positive, got {temperature}"),
        });
    }
    let shape = tape.shape(features).to_vec();
    let (c, hw) = match shape.as_slice() {
        [c, h, w] => (*c, h * w),
        [c, hw] => (*c, *hw),
        _ => {
            return Err(DiffError::ShapeMismatch {
                op: "spatial_softmax",
                lhs: shape,
                rhs: vec![],
            })
        }
    };
    let scaled = tape.scale(features, 1.0 / temperature);
    tape.softmax_rows(scaled, c, hw)
}

/// Average-pools a depth image to the feature grid so Eq.-style expected
/// depth shares the attention resolution. Pure data preparation (the depth
/// input carries no gradient).
pub fn pool_depth<R: Real>(depth: &[f32], img: usize, grid: usize) -> Vec<R> {
    let factor = img / grid;
    debug_assert_eq!(factor * grid, img);
    let mut out = vec![R::zero(); grid * grid];
    let inv = 1.0 / (factor * factor) as f64;
    for gy in 0..grid {
        for gx in 0..grid {
            let mut s = 0.0f64;
            for dy in 0..factor {
                for dx in 0..factor {
                    s += depth[(gy * factor + dy) * img + gx * factor + dx] as f64;
                }
            }
            out[gy * grid + gx] = R::from_f64(s * inv);
        }
    }
    out
}

/// Builds the `[h*w, kd]` coordinate matrix whose columns are x(i,j),
/// y(i,j) over [-1,1] and, when `kd == 3`, the pooled depth d(i,j).
pub fn coordinate_matrix<R: Real>(h: usize, w: usize, pooled_depth: Option<&[R]>) -> Vec<R> {
    let kd = if pooled_depth.is_some() { 3 } else { 2 };
    let mut out = vec![R::zero(); h * w * kd];
    for i in 0..h {
        for j in 0..w {
            let row = (i * w + j) * kd;
            out[row] = grid_coord::<R>(j, w);
            out[row + 1] = grid_coord::<R>(i, h);
            if let Some(d) = pooled_depth {
                out[row + 2] = d[i * w + j];
            }
        }
    }
    out
}

/// Expected keypoints: attention-weighted sums of the coordinate grids and
/// depth. `attn [c, h*w]` x `coords [h*w, kd]` -> `[c, kd]`.
pub fn expect_keypoints<R: Real>(
    tape: &mut Tape<R>,
    attn: Var,
    coords: Var,
) -> DiffResult<Var> {
    let sa = tape.shape(attn).to_vec();
    let sc = tape.shape(coords).to_vec();
    if sa.len() != 2 || sc.len() != 2 || sa[1] != sc[0] {
        return Err(DiffError::ShapeMismatch {
            op: "expect_keypoints",
            lhs: sa,
            rhs: sc,
        });
    }
    tape.matmul(attn, coords)
}

/// Batched visual front end over a whole episode: one conv stack, one
/// spatial softmax, one keypoint assembly.
///
/// `input` is channel-major `[ci, B, img, img]`; `depths[b]` is frame b's
/// raw depth (ignored for 2D-keypoint variants). Returns
/// `(features [c3, B, h, w], keypoints [B*c3, kd] in frame-major order)`.
pub fn visual_keypoints_batch<R: Real>(
    tape: &mut Tape<R>,
    lp: &LoadedParams,
    cfg: &ModelConfig,
    input: Var,
    depths: Option<&[&[f32]]>,
) -> DiffResult<(Var, Var)> {
    let shape = tape.shape(input).to_vec();
    let batch = match shape.as_slice() {
        [ci, b, h, w] if *ci == cfg.in_channels() && *h == cfg.img && *w == cfg.img => *b,
        _ => {
            return Err(DiffError::ShapeMismatch {
                op: "visual_keypoints_batch",
                lhs: shape,
                rhs: vec![cfg.in_channels(), 0, cfg.img, cfg.img],
            })
        }
    };
    let h1 = tape.conv2d(input, lp.var("enc.conv1.w"), lp.var("enc.conv1.b"), 3, 2)?;
    let h1 = tape.tanh(h1);
    let h2 = tape.conv2d(h1, lp.var("enc.conv2.w"), lp.var("enc.conv2.b"), 3, 2)?;
    let h2 = tape.tanh(h2);
    let features = tape.conv2d(h2, lp.var("enc.conv3.w"), lp.var("enc.conv3.b"), 3, 1)?;

    let grid = cfg.feature_hw();
    let hw = grid * grid;
    let c3 = cfg.keypoint_count();
    let rows = c3 * batch; // row index = c * batch + b
    let scaled = tape.scale(features, 1.0 / cfg.temperature);
    let attn = tape.softmax_rows(scaled, rows, hw)?;

    let xy = coordinate_matrix::<R>(grid, grid, None);
    let xyv = tape.constant(vec![hw, 2], xy);
    let kp_xy = tape.matmul(attn, xyv)?; // [rows, 2]

    let kd = cfg.keypoint_dims();
    let kp_cb = if kd == 3 {
        let depths = depths.ok_or_else(|| DiffError::InvalidArg {
            op: "visual_keypoints_batch",
            msg: "3D keypoints need depth frames".into(),
        })?;
        debug_assert_eq!(depths.len(), batch);
        // depth replicated per channel row: row (c, b) carries frame b's
        // pooled depth
        let mut rep = vec![R::zero(); rows * hw];
        for (b, d) in depths.iter().enumerate() {
            let pooled = pool_depth::<R>(d, cfg.img, grid);
            for c in 0..c3 {
                rep[(c * batch + b) * hw..(c * batch + b + 1) * hw]
                    .copy_from_slice(&pooled);
            }
        }
        let repv = tape.constant(vec![rows, hw], rep);
        let weighted = tape.mul(attn, repv)?;
        let ones = tape.constant(vec![hw], vec![R::one(); hw]);
        let kp_z = tape.matmul(weighted, ones)?; // [rows]
        let txy = tape.transpose2d(kp_xy)?; // [2, rows]
        let tz = tape.reshape(kp_z, vec![1, rows])?;
        let cat = tape.concat0(&[txy, tz])?; // [3, rows]
        tape.transpose2d(cat)? // [rows, 3] rows = (c, b)
    } else {
        kp_xy
    };
    // reorder rows from channel-major (c, b) to frame-major (b, c)
    let perm: Vec<usize> = (0..rows)
        .map(|r| {
            let (b, c) = (r / c3, r % c3);
            c * batch + b
        })
        .collect();
    let kp_tm = tape.permute_rows(kp_cb, std::sync::Arc::new(perm))?;
    Ok((features, kp_tm))
}

/// Batched heatmap-gated decoder: `gated` is channel-major
/// `[c3, B, h, w]`; output `[ci, B, img, img]` through a sigmoid.
pub fn decode_batch<R: Real>(
    tape: &mut Tape<R>,
    lp: &LoadedParams,
    gated: Var,
) -> DiffResult<Var> {
    let up1 = tape.conv2d_transpose(gated, lp.var("dec.tconv1.w"), lp.var("dec.tconv1.b"), 3, 2)?;
    let up1 = tape.tanh(up1);
    let up2 = tape.conv2d_transpose(up1, lp.var("dec.tconv2.w"), lp.var("dec.tconv2.b"), 3, 2)?;
    Ok(tape.sigmoid(up2))
}

/// Full visual front end: encode, spatial softmax, expected 3D keypoints.
/// Returns (features `[c3,h,w]`, attention `[c3,h*w]`, keypoints `[c3,kd]`).
pub fn visual_keypoints<R: Real>(
    tape: &mut Tape<R>,
    lp: &LoadedParams,
    cfg: &ModelConfig,
    input: Var,
    raw_depth: Option<&[f32]>,
) -> DiffResult<(Var, Var, Var)> {
    let features = encode_image(tape, lp, cfg, input)?;
    let attn = spatial_softmax(tape, features, cfg.temperature)?;
    let grid = cfg.feature_hw();
    let pooled: Option<Vec<R>> = raw_depth.map(|d| pool_depth(d, cfg.img, grid));
    let kd = cfg.keypoint_dims();
    debug_assert_eq!(kd == 3, pooled.is_some());
    let coords = coordinate_matrix::<R>(grid, grid, pooled.as_deref());
    let coords = tape.constant(vec![grid * grid, kd], coords);
    let kp = expect_keypoints(tape, attn, coords)?;
    Ok((features, attn, kp))
}

// ── Selective kernel attention (1-D) ────────────────────────────────────

/// Split/fuse/select attention over a 1-channel 1-D signal.
///
/// Split: two conv branches (kernels 3 and 5) over the lifted signal.
/// Fuse: summed branches -> global average pool -> compact projection.
/// Select: per-channel softmax over the two branches -> weighted sum.
/// A final 1x1 conv returns to the input shape.
///
/// Returns (attended signal `[n]`, select weights `[ch, 2]`).
pub fn sknet_attend<R: Real>(
    tape: &mut Tape<R>,
    lp: &LoadedParams,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
) -> DiffResult<(Var, Var)> {
    let n = match tape.shape(x) {
        [n] => *n,
        other => {
            return Err(DiffError::ShapeMismatch {
                op: "sknet_attend",
                lhs: other.to_vec(),
                rhs: vec![],
            })
        }
    };
    if n == 0 {
        return Err(DiffError::InvalidArg {
            op: "sknet_attend",
            msg: "empty input signal".into(),
        });
    }
    let ch = cfg.sknet_channels;
    let sig = tape.reshape(x, vec![1, n])?;
    let lifted = tape.conv1d(sig, lp.var(&format!("{prefix}.lift.w")), lp.var(&format!("{prefix}.lift.b")), 3)?;
    let lifted = tape.tanh(lifted);

    // Split
    let b3 = tape.conv1d(lifted, lp.var(&format!("{prefix}.k3.w")), lp.var(&format!("{prefix}.k3.b")), 3)?;
    let b5 = tape.conv1d(lifted, lp.var(&format!("{prefix}.k5.w")), lp.var(&format!("{prefix}.k5.b")), 5)?;

    // Fuse
    let summed = tape.add(b3, b5)?;
    let pooled = tape.global_avg_pool(summed, ch, n)?;
    let zc = tape.matmul(lp.var(&format!("{prefix}.fuse.w")), pooled)?;
    let zc = tape.add(zc, lp.var(&format!("{prefix}.fuse.b")))?;
    let zc = tape.tanh(zc);

    // Select
    let l3 = tape.matmul(lp.var(&format!("{prefix}.sel3.w")), zc)?;
    let l3 = tape.add(l3, lp.var(&format!("{prefix}.sel3.b")))?;
    let l5 = tape.matmul(lp.var(&format!("{prefix}.sel5.w")), zc)?;
    let l5 = tape.add(l5, lp.var(&format!("{prefix}.sel5.b")))?;
    let l3r = tape.reshape(l3, vec![1, ch])?;
    let l5r = tape.reshape(l5, vec![1, ch])?;
    let stacked = tape.concat0(&[l3r, l5r])?; // [2, ch]
    let per_channel = tape.transpose2d(stacked)?; // [ch, 2]
    let weights = tape.softmax_rows(per_channel, ch, 2)?;
    let w3 = tape.slice_cols(weights, ch, 2, 0, 1)?;
    let w3 = tape.reshape(w3, vec![ch])?;
    let w5 = tape.slice_cols(weights, ch, 2, 1, 2)?;
    let w5 = tape.reshape(w5, vec![ch])?;
    let g3 = tape.scale_rows(b3, w3)?;
    let g5 = tape.scale_rows(b5, w5)?;
    let mixed = tape.add(g3, g5)?;

    // back to the input shape
    let out = tape.conv1d(mixed, lp.var(&format!("{prefix}.out.w")), lp.var(&format!("{prefix}.out.b")), 1)?;
    let out = tape.reshape(out, vec![n])?;
    Ok((out, weights))
}

// ── Heatmaps and decoder ────────────────────────────────────────────────

/// Gaussian bumps (peak 1) at predicted (x, y) keypoints.
/// `keypoints [c, kd]` -> heatmaps `[c, h, w]`.
pub fn keypoints_to_heatmap<R: Real>(
    tape: &mut Tape<R>,
    keypoints: Var,
    h: usize,
    w: usize,
    sigma: f64,
) -> DiffResult<Var> {
    let shape = tape.shape(keypoints).to_vec();
    let (c, kd) = match shape.as_slice() {
        [c, kd] if *kd >= 2 => (*c, *kd),
        _ => {
            return Err(DiffError::ShapeMismatch {
                op: "keypoints_to_heatmap",
                lhs: shape,
                rhs: vec![0, 2],
            })
        }
    };
    let xy = if kd == 2 {
        keypoints
    } else {
        tape.slice_cols(keypoints, c, kd, 0, 2)?
    };
    tape.gauss_heatmap(xy, h, w, sigma)
}

/// Heatmap-gated decoder: features are multiplied elementwise with the
/// heatmaps, then two stride-2 transposed convs reconstruct the next-step
/// image channels through a sigmoid.
pub fn decode_image<R: Real>(
    tape: &mut Tape<R>,
    lp: &LoadedParams,
    features: Var,
    heatmaps: Var,
) -> DiffResult<Var> {
    if tape.shape(features) != tape.shape(heatmaps) {
        return Err(DiffError::ShapeMismatch {
            op: "decode_image",
            lhs: tape.shape(features).to_vec(),
            rhs: tape.shape(heatmaps).to_vec(),
        });
    }
    let gated = tape.mul(features, heatmaps)?;
    let up1 = tape.conv2d_transpose(gated, lp.var("dec.tconv1.w"), lp.var("dec.tconv1.b"), 3, 2)?;
    let up1 = tape.tanh(up1);
    let up2 = tape.conv2d_transpose(up1, lp.var("dec.tconv2.w"), lp.var("dec.tconv2.b"), 3, 2)?;
    Ok(tape.sigmoid(up2))
}
