//! Hierarchical recurrent policy: four per-modality bottom LSTMs whose
//! hidden inputs are replaced each step by feedback split from a union LSTM
//! over the concatenated bottom hidden states, plus output heads,
//! min-max normalization, and checkpoint serialization.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    build_vision_params, keypoints_to_heatmap, sknet_attend, visual_keypoints, KeypointSet,
};
use crate::config::{ModelConfig, VariantKind};
use crate::diffcore::{DiffError, DiffResult, LoadedParams, ParamSet, Real, Tape, Tensor, Var};
use crate::perception::Sensation;
use crate::socksim::{Judge, PhaseReport, SimState, JOINT_DIMS, TACTILE_DIMS};

// ── Normalization ───────────────────────────────────────────────────────

/// Per-dimension min/max over the training set for the somatosensory
/// modalities. Dimensions with max == min are constant and normalize to 0.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub angle_min: Vec<f32>,
    pub angle_max: Vec<f32>,
    pub torque_min: Vec<f32>,
    pub torque_max: Vec<f32>,
    pub tactile_min: Vec<f32>,
    pub tactile_max: Vec<f32>,
}

impl NormStats {
    /// Unit ranges; stands in before real statistics are computed.
    pub fn identity() -> Self {
        NormStats {
            angle_min: vec![0.0; JOINT_DIMS],
            angle_max: vec![1.0; JOINT_DIMS],
            torque_min: vec![0.0; JOINT_DIMS],
            torque_max: vec![1.0; JOINT_DIMS],
            tactile_min: vec![0.0; TACTILE_DIMS],
            tactile_max: vec![1.0; TACTILE_DIMS],
        }
    }

    pub fn from_rows(
        angles: &[Vec<f32>],
        torques: &[Vec<f32>],
        tactile: &[Vec<f32>],
    ) -> Self {
        fn minmax(rows: &[Vec<f32>], dims: usize) -> (Vec<f32>, Vec<f32>) {
            let mut lo = vec![f32::INFINITY; dims];
            let mut hi = vec![f32::NEG_INFINITY; dims];
            for row in rows {
                for (d, &v) in row.iter().enumerate() {
                    lo[d] = lo[d].min(v);
                    hi[d] = hi[d].max(v);
                }
            }
            (lo, hi)
        }
        let (angle_min, angle_max) = minmax(angles, JOINT_DIMS);
        let (torque_min, torque_max) = minmax(torques, JOINT_DIMS);
        let (tactile_min, tactile_max) = minmax(tactile, TACTILE_DIMS);
        NormStats {
            angle_min,
            angle_max,
            torque_min,
            torque_max,
            tactile_min,
            tactile_max,
        }
    }

    pub fn constant_dims(min: &[f32], max: &[f32]) -> Vec<bool> {
        min.iter().zip(max).map(|(a, b)| a == b).collect()
    }
}

/// `(x - min) / (max - min)` clamped to [0,1]; constant dims map to 0.5.
pub fn normalize(x: &[f32], min: &[f32], max: &[f32]) -> DiffResult<Vec<f32>> {
    if x.len() != min.len() || x.len() != max.len() {
        return Err(DiffError::ShapeMismatch {
            op: "normalize",
            lhs: vec![x.len()],
            rhs: vec![min.len()],
        });
    }
    Ok(x.iter()
        .zip(min.iter().zip(max))
        .map(|(&v, (&lo, &hi))| {
            if hi == lo {
                0.5
            } else {
                ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
            }
        })
        .collect())
}

/// `min + y * (max - min)`; inverse of [`normalize`] on non-constant dims.
pub fn denormalize(y: &[f32], min: &[f32], max: &[f32]) -> DiffResult<Vec<f32>> {
    if y.len() != min.len() || y.len() != max.len() {
        return Err(DiffError::ShapeMismatch {
            op: "denormalize",
            lhs: vec![y.len()],
            rhs: vec![min.len()],
        });
    }
    Ok(y.iter()
        .zip(min.iter().zip(max))
        .map(|(&v, (&lo, &hi))| lo + v * (hi - lo))
        .collect())
}

// ── Parameters ──────────────────────────────────────────────────────────

/// All learnable weights plus normalization statistics and the
/// architecture configuration they were built for.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub set: ParamSet<f32>,
    pub norm: NormStats,
}

/// (name, input width) per bottom modality, in wiring order.
fn modality_layout(cfg: &ModelConfig) -> [(&'static str, usize); 4] {
    [
        ("vision", cfg.vision_dims()),
        ("angles", JOINT_DIMS),
        ("torques", JOINT_DIMS),
        ("tactile", TACTILE_DIMS),
    ]
}

fn build_recurrent_params<R: Real>(
    cfg: &ModelConfig,
    ps: &mut ParamSet<R>,
    rng: &mut ChaCha8Rng,
) {
    let d = cfg.bottom_width;
    let du = cfg.union_width;
    let lstm = |ps: &mut ParamSet<R>, rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize| {
        let fan_in = input + hidden;
        ps.insert(
            &format!("lstm.{name}.w"),
            Tensor::uniform_fan_in(&[4 * hidden, fan_in], fan_in, rng),
        );
        ps.insert(
            &format!("lstm.{name}.b"),
            Tensor::uniform_fan_in(&[4 * hidden], fan_in, rng),
        );
    };
    let head_width = if cfg.hierarchical() { d } else { du };
    if cfg.hierarchical() {
        for (name, input) in modality_layout(cfg) {
            lstm(ps, rng, name, input, d);
        }
        lstm(ps, rng, "union", 4 * d, du);
        ps.insert(
            "feedback.w",
            Tensor::uniform_fan_in(&[4 * d, du], du, rng),
        );
        ps.insert("feedback.b", Tensor::uniform_fan_in(&[4 * d], du, rng));
    } else {
        let total: usize = modality_layout(cfg).iter().map(|(_, n)| n).sum();
        lstm(ps, rng, "flat", total, du);
    }
    let head = |ps: &mut ParamSet<R>, rng: &mut ChaCha8Rng, name: &str, out: usize| {
        ps.insert(
            &format!("head.{name}.w"),
            Tensor::uniform_fan_in(&[out, head_width], head_width, rng),
        );
        ps.insert(
            &format!("head.{name}.b"),
            Tensor::uniform_fan_in(&[out], head_width, rng),
        );
    };
    head(ps, rng, "angles", JOINT_DIMS);
    head(ps, rng, "torques", JOINT_DIMS);
    head(ps, rng, "tactile", TACTILE_DIMS);
    head(ps, rng, "keypoints", cfg.vision_dims());
}

impl ModelParams {
    /// Fresh seeded initialization; weights are uniform in
    /// [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        build_vision_params(&config, &mut set, &mut rng);
        build_recurrent_params(&config, &mut set, &mut rng);
        ModelParams {
            config,
            set,
            norm: NormStats::identity(),
        }
    }
}

// ── Recurrent step ──────────────────────────────────────────────────────

/// Hidden/cell tape variables for one step.
pub struct StepVars {
    /// Per-modality (h, c); empty in the flat variant.
    pub bottoms: Vec<(Var, Var)>,
    /// Union (or flat) LSTM (h, c).
    pub union: (Var, Var),
}

/// Next-step predictions, all normalized model space.
pub struct StepOutputs {
    pub angles: Var,
    pub torques: Var,
    pub tactile: Var,
    /// `[keypoint_count, kd]`
    pub keypoints: Var,
}

/// Plain-value snapshot of recurrent state, carried across ticks in
/// closed-loop inference where each tick builds a fresh graph.
#[derive(Debug, Clone)]
pub struct StateValues {
    pub bottoms: Vec<(Vec<f32>, Vec<f32>)>,
    pub union: (Vec<f32>, Vec<f32>),
}

impl StateValues {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.bottom_width;
        let du = cfg.union_width;
        let bottoms = if cfg.hierarchical() {
            (0..4).map(|_| (vec![0.0; d], vec![0.0; d])).collect()
        } else {
            Vec::new()
        };
        StateValues {
            bottoms,
            union: (vec![0.0; du], vec![0.0; du]),
        }
    }

    pub fn all_finite(&self) -> bool {
        let ok = |v: &[f32]| v.iter().all(|x| x.is_finite());
        self.bottoms.iter().all(|(h, c)| ok(h) && ok(c)) && ok(&self.union.0) && ok(&self.union.1)
    }
}

/// Loads a [`StateValues`] snapshot onto a tape as constants.
pub fn state_to_vars<R: Real>(tape: &mut Tape<R>, sv: &StateValues) -> StepVars {
    let lift = |tape: &mut Tape<R>, v: &[f32]| {
        tape.constant(vec![v.len()], v.iter().map(|&x| R::from_f32(x)).collect())
    };
    StepVars {
        bottoms: sv
            .bottoms
            .iter()
            .map(|(h, c)| (lift(tape, h), lift(tape, c)))
            .collect(),
        union: (lift(tape, &sv.union.0), lift(tape, &sv.union.1)),
    }
}

/// Reads tape values back into a [`StateValues`] snapshot.
pub fn vars_to_state<R: Real>(tape: &Tape<R>, vars: &StepVars) -> StateValues {
    let dump = |v: Var| tape.value(v).iter().map(|x| x.as_f32()).collect::<Vec<f32>>();
    StateValues {
        bottoms: vars
            .bottoms
            .iter()
            .map(|(h, c)| (dump(*h), dump(*c)))
            .collect(),
        union: (dump(vars.union.0), dump(vars.union.1)),
    }
}

/// Standard LSTM cell with combined gate weights `[4H, X+H]`, gate order
/// input/forget/candidate/output.
pub fn lstm_cell<R: Real>(
    tape: &mut Tape<R>,
    lp: &LoadedParams,
    name: &str,
    x: Var,
    h: Var,
    c: Var,
) -> DiffResult<(Var, Var)> {
    let hidden = tape.shape(h)[0];
    let xs = tape.concat0(&[x, h])?;
    let pre = tape.matmul(lp.var(&format!("lstm.{name}.w")), xs)?;
    let pre = tape.add(pre, lp.var(&format!("lstm.{name}.b")))?;
    let i_gate = tape.slice(pre, 0, hidden, vec![hidden])?;
    let f_gate = tape.slice(pre, hidden, hidden, vec![hidden])?;
    let g_gate = tape.slice(pre, 2 * hidden, hidden, vec![hidden])?;
    let o_gate = tape.slice(pre, 3 * hidden, hidden, vec![hidden])?;
    let i_act = tape.sigmoid(i_gate);
    let f_act = tape.sigmoid(f_gate);
    let g_act = tape.tanh(g_gate);
    let o_act = tape.sigmoid(o_gate);
    let keep = tape.mul(f_act, c)?;
    let write = tape.mul(i_act, g_act)?;
    let c_next = tape.add(keep, write)?;
    let c_tanh = tape.tanh(c_next);
    let h_next = tape.mul(o_act, c_tanh)?;
    Ok((h_next, c_next))
}

fn head<R: Real>(
    tape: &mut Tape<R>,
    lp: &LoadedParams,
    name: &str,
    hidden: Var,
    sigmoid: bool,
) -> DiffResult<Var> {
    let y = tape.matmul(lp.var(&format!("head.{name}.w")), hidden)?;
    let y = tape.add(y, lp.var(&format!("head.{name}.b")))?;
    Ok(if sigmoid { tape.sigmoid(y) } else { y })
}

/// One hierarchical step.
///
/// Stage 1: previous bottom hiddens are concatenated and drive the union
/// LSTM; a linear layer turns the union hidden into a feedback vector that
/// is split into per-modality components. Stage 2: each bottom LSTM
/// consumes its (attended) input with the feedback component in its hidden
/// slot and its own carried cell state. Output heads read the new bottom
/// hiddens.
///
/// Inputs are the normalized modality vectors for this step; somatosensory
/// inputs pass through selective kernel attention first unless disabled.
pub fn hlstm_step<R: Real>(
    tape: &mut Tape<R>,
    lp: &LoadedParams,
    cfg: &ModelConfig,
    vision: Var,
    angles: Var,
    torques: Var,
    tactile: Var,
    prev: &StepVars,
) -> DiffResult<(StepVars, StepOutputs)> {
    let expect = [
        (cfg.vision_dims(), tape.shape(vision).to_vec()),
        (JOINT_DIMS, tape.shape(angles).to_vec()),
        (JOINT_DIMS, tape.shape(torques).to_vec()),
        (TACTILE_DIMS, tape.shape(tactile).to_vec()),
    ];
    for (want, got) in &expect {
        if got != &vec![*want] {
            return Err(DiffError::ShapeMismatch {
                op: "hlstm_step",
                lhs: got.clone(),
                rhs: vec![*want],
            });
        }
    }
    let (xa, xt, xc) = if cfg.sknet_enabled() {
        let (xa, _) = sknet_attend(tape, lp, cfg, "sk.angles", angles)?;
        let (xt, _) = sknet_attend(tape, lp, cfg, "sk.torques", torques)?;
        let (xc, _) = sknet_attend(tape, lp, cfg, "sk.tactile", tactile)?;
        (xa, xt, xc)
    } else {
        (angles, torques, tactile)
    };

    if !cfg.hierarchical() {
        let x = tape.concat0(&[vision, xa, xt, xc])?;
        let (h, c) = lstm_cell(tape, lp, "flat", x, prev.union.0, prev.union.1)?;
        let outputs = step_heads(tape, lp, cfg, &[h, h, h, h])?;
        return Ok((
            StepVars {
                bottoms: Vec::new(),
                union: (h, c),
            },
            outputs,
        ));
    }

    let d = cfg.bottom_width;
    // stage 1: union update from previous bottom hiddens
    let hs: Vec<Var> = prev.bottoms.iter().map(|(h, _)| *h).collect();
    let u_in = tape.concat0(&hs)?;
    let (h_u, c_u) = lstm_cell(tape, lp, "union", u_in, prev.union.0, prev.union.1)?;
    let v = tape.matmul(lp.var("feedback.w"), h_u)?;
    let v = tape.add(v, lp.var("feedback.b"))?;
    // stage 2: bottoms consume inputs with feedback in the hidden slot
    let inputs = [vision, xa, xt, xc];
    let names = ["vision", "angles", "torques", "tactile"];
    let mut bottoms = Vec::with_capacity(4);
    let mut new_hiddens = Vec::with_capacity(4);
    for (i, (x, name)) in inputs.iter().zip(names).enumerate() {
        let fed = tape.slice(v, i * d, d, vec![d])?;
        let (h, c) = lstm_cell(tape, lp, name, *x, fed, prev.bottoms[i].1)?;
        new_hiddens.push(h);
        bottoms.push((h, c));
    }
    let hidden_arr = [new_hiddens[0], new_hiddens[1], new_hiddens[2], new_hiddens[3]];
    let outputs = step_heads(tape, lp, cfg, &hidden_arr)?;
    Ok((
        StepVars {
            bottoms,
            union: (h_u, c_u),
        },
        outputs,
    ))
}

/// Output heads: hidden sources are (vision, angles, torques, tactile).
fn step_heads<R: Real>(
    tape: &mut Tape<R>,
    lp: &LoadedParams,
    cfg: &ModelConfig,
    hiddens: &[Var; 4],
) -> DiffResult<StepOutputs> {
    let kp_flat = head(tape, lp, "keypoints", hiddens[0], false)?;
    let keypoints = tape.reshape(kp_flat, vec![cfg.keypoint_count(), cfg.keypoint_dims()])?;
    Ok(StepOutputs {
        angles: head(tape, lp, "angles", hiddens[1], true)?,
        torques: head(tape, lp, "torques", hiddens[2], true)?,
        tactile: head(tape, lp, "tactile", hiddens[3], true)?,
        keypoints,
    })
}

/// Splits the feedback vector and re-concatenates it; used to pin the
/// exactness of the split in tests and the acceptance suite.
pub fn split_roundtrip<R: Real>(tape: &mut Tape<R>, v: Var, parts: usize) -> DiffResult<Var> {
    let n = tape.shape(v)[0];
    let d = n / parts;
    let mut slices = Vec::with_capacity(parts);
    for i in 0..parts {
        slices.push(tape.slice(v, i * d, d, vec![d])?);
    }
    tape.concat0(&slices)
}

// ── Teacher-forced rollout ──────────────────────────────────────────────

/// Per-component un-weighted loss sums for one episode graph.
pub struct RolloutLosses {
    pub img: Var,
    pub angle: Var,
    pub torque: Var,
    pub tactile: Var,
    pub pt: Var,
}

pub struct RolloutResult {
    pub losses: RolloutLosses,
    /// Encoder keypoints per input step (`[kp, kd]` each).
    pub encoder_keypoints: Vec<Var>,
    /// Predicted next-step keypoints per step.
    pub predicted_keypoints: Vec<Var>,
    /// Predicted next-step images, channel-major `[ci, T-1, img, img]`.
    pub predicted_images: Var,
}

impl RolloutResult {
    /// Extracts predicted image channel `c` for prediction step `t` from
    /// the channel-major batch node.
    pub fn predicted_plane<'t, R: Real>(
        &self,
        tape: &'t Tape<R>,
        step: usize,
        channel: usize,
        img: usize,
        steps: usize,
    ) -> &'t [R] {
        let v = tape.value(self.predicted_images);
        let off = (channel * steps + step) * img * img;
        &v[off..off + img * img]
    }
}

/// Model input channels for one dataset frame under the active variant.
pub fn frame_channels(cfg: &ModelConfig, sock_md: &[f32], foot_md: &[f32], gray: &[f32]) -> Vec<f32> {
    match cfg.variant {
        VariantKind::NoSamDam => gray.to_vec(),
        VariantKind::NoDam => {
            // semantic masks only: binarize the masked depth
            let bin = |v: &f32| if *v > 0.0 { 1.0 } else { 0.0 };
            sock_md.iter().map(bin).chain(foot_md.iter().map(bin)).collect()
        }
        _ => sock_md.iter().chain(foot_md.iter()).copied().collect(),
    }
}

/// Channel-major `[ci, count, img, img]` input block for frames
/// `start..start+count` of an episode.
fn batch_input<R: Real>(
    cfg: &ModelConfig,
    episode: &crate::trainer::EpisodeRecord,
    start: usize,
    count: usize,
) -> Vec<R> {
    let ci = cfg.in_channels();
    let hw = cfg.img * cfg.img;
    let mut out = vec![R::zero(); ci * count * hw];
    for (slot, t) in (start..start + count).enumerate() {
        let chans = frame_channels(
            cfg,
            &episode.sock_frames[t],
            &episode.foot_frames[t],
            &episode.gray_frames[t],
        );
        for c in 0..ci {
            let dst = (c * count + slot) * hw;
            for (o, v) in out[dst..dst + hw].iter_mut().zip(&chans[c * hw..(c + 1) * hw]) {
                *o = R::from_f32(*v);
            }
        }
    }
    out
}

/// Teacher-forced pass over one episode: feeds ground-truth inputs at each
/// step and accumulates next-step prediction losses for every modality, the
/// image, and the attention points (targets recomputed from the current
/// encoder). Episode length must be at least 2.
///
/// The convolutional front and back ends run batched over all frames; only
/// the recurrent core is sequential.
pub fn rollout_open_loop<R: Real>(
    tape: &mut Tape<R>,
    lp: &LoadedParams,
    cfg: &ModelConfig,
    episode: &crate::trainer::EpisodeRecord,
    norm: &NormStats,
) -> DiffResult<RolloutResult> {
    let t_len = episode.len();
    assert!(t_len >= 2, "episode must have at least 2 steps");
    let steps = t_len - 1;
    let hw_grid = cfg.feature_hw();
    let hw = hw_grid * hw_grid;
    let kd = cfg.keypoint_dims();
    let kp_count = cfg.keypoint_count();

    // batched encode of every frame
    let input = {
        let data = batch_input::<R>(cfg, episode, 0, t_len);
        tape.constant(vec![cfg.in_channels(), t_len, cfg.img, cfg.img], data)
    };
    let depth_slices: Vec<&[f32]> = episode.depth_frames.iter().map(Vec::as_slice).collect();
    let depths = if kd == 3 { Some(depth_slices.as_slice()) } else { None };
    let (features, kp_tm) =
        crate::attention::visual_keypoints_batch(tape, lp, cfg, input, depths)?;

    // frame-major feature rows for per-step gating slices
    let feat_rows = kp_count * t_len;
    let feat_view = tape.reshape(features, vec![feat_rows, hw])?;
    let perm: Vec<usize> = (0..feat_rows)
        .map(|r| {
            let (b, c) = (r / kp_count, r % kp_count);
            c * t_len + b
        })
        .collect();
    let feat_tm = tape.permute_rows(feat_view, std::sync::Arc::new(perm))?;

    let mut state = {
        let zeros = StateValues::zeros(cfg);
        state_to_vars(tape, &zeros)
    };
    let constify = |tape: &mut Tape<R>, v: &[f32]| {
        tape.constant(vec![v.len()], v.iter().map(|&x| R::from_f32(x)).collect())
    };

    let mut encoder_keypoints = Vec::with_capacity(t_len);
    for t in 0..t_len {
        encoder_keypoints.push(tape.slice(kp_tm, t * kp_count * kd, kp_count * kd, vec![kp_count, kd])?);
    }

    let mut predicted_keypoints = Vec::with_capacity(steps);
    let mut gated_steps = Vec::with_capacity(steps);
    let mut pred_angles = Vec::with_capacity(steps);
    let mut pred_torques = Vec::with_capacity(steps);
    let mut pred_tactile = Vec::with_capacity(steps);
    for t in 0..steps {
        let vision = tape.reshape(encoder_keypoints[t], vec![kp_count * kd])?;
        let a = normalize(&episode.angles[t], &norm.angle_min, &norm.angle_max)?;
        let q = normalize(&episode.torques[t], &norm.torque_min, &norm.torque_max)?;
        let c = normalize(&episode.tactile[t], &norm.tactile_min, &norm.tactile_max)?;
        let (a, q, c) = (constify(tape, &a), constify(tape, &q), constify(tape, &c));
        let (next_state, out) = hlstm_step(tape, lp, cfg, vision, a, q, c, &state)?;
        state = next_state;

        // gate this frame's features with the predicted-point heatmap
        let hm = keypoints_to_heatmap(tape, out.keypoints, hw_grid, hw_grid, cfg.heatmap_sigma)?;
        let hm2 = tape.reshape(hm, vec![kp_count, hw])?;
        let feat_t = tape.slice(feat_tm, t * kp_count * hw, kp_count * hw, vec![kp_count, hw])?;
        let gated = tape.mul(feat_t, hm2)?;
        gated_steps.push(gated);

        predicted_keypoints.push(out.keypoints);
        pred_angles.push(out.angles);
        pred_torques.push(out.torques);
        pred_tactile.push(out.tactile);
    }

    // batched decode: gather per-step gated maps, restore channel-major
    let gated_all = tape.concat0(&gated_steps)?; // [steps*kp, hw] frame-major
    let rows = steps * kp_count;
    let perm_back: Vec<usize> = (0..rows)
        .map(|r| {
            let (c, b) = (r / steps, r % steps);
            b * kp_count + c
        })
        .collect();
    let gated_cm = tape.permute_rows(gated_all, std::sync::Arc::new(perm_back))?;
    let gated_cm = tape.reshape(gated_cm, vec![kp_count, steps, hw_grid, hw_grid])?;
    let pred_images = crate::attention::decode_batch(tape, lp, gated_cm)?;
    let img_target = {
        let data = batch_input::<R>(cfg, episode, 1, steps);
        tape.constant(vec![cfg.in_channels(), steps, cfg.img, cfg.img], data)
    };
    let img_loss = tape.mse(pred_images, img_target)?;

    // batched somatosensory losses: concatenate steps, one MSE each
    let norm_rows = |tape: &mut Tape<R>, rows: &[Vec<f32>], min: &[f32], max: &[f32]| -> DiffResult<Var> {
        let mut data = Vec::with_capacity(steps * min.len());
        for row in rows.iter().skip(1).take(steps) {
            data.extend(normalize(row, min, max)?.into_iter().map(R::from_f32));
        }
        Ok(tape.constant(vec![steps * min.len()], data))
    };
    let a_pred = tape.concat0(&pred_angles)?;
    let a_tgt = norm_rows(tape, &episode.angles, &norm.angle_min, &norm.angle_max)?;
    let angle_loss = tape.mse(a_pred, a_tgt)?;
    let q_pred = tape.concat0(&pred_torques)?;
    let q_tgt = norm_rows(tape, &episode.torques, &norm.torque_min, &norm.torque_max)?;
    let torque_loss = tape.mse(q_pred, q_tgt)?;
    let c_pred = tape.concat0(&pred_tactile)?;
    let c_tgt = norm_rows(tape, &episode.tactile, &norm.tactile_min, &norm.tactile_max)?;
    let tactile_loss = tape.mse(c_pred, c_tgt)?;

    // attention-point loss: predictions vs the encoder's points at t+1
    let pt_dims = if cfg.keypoint_loss_3d { kd } else { 2.min(kd) };
    let kp_pred_all = tape.concat0(&predicted_keypoints)?; // [steps*kp, kd]
    let pred_pt = tape.slice_cols(kp_pred_all, rows, kd, 0, pt_dims)?;
    let kp_tgt_all = tape.slice(kp_tm, kp_count * kd, rows * kd, vec![rows, kd])?;
    let target_pt = tape.slice_cols(kp_tgt_all, rows, kd, 0, pt_dims)?;
    let pt_loss = tape.mse(pred_pt, target_pt)?;

    Ok(RolloutResult {
        losses: RolloutLosses {
            img: img_loss,
            angle: angle_loss,
            torque: torque_loss,
            tactile: tactile_loss,
            pt: pt_loss,
        },
        encoder_keypoints,
        predicted_keypoints,
        predicted_images: pred_images,
    })
}

// ── Closed-loop inference ───────────────────────────────────────────────

/// Outcome of one closed-loop evaluation rollout.
#[derive(Debug, Clone)]
pub struct RolloutOutcome {
    pub report: PhaseReport,
    pub keypoint_trace: Vec<KeypointSet>,
}

/// Runs the trained policy against the simulator for `ticks` control steps:
/// sense, encode, step the recurrent core, denormalize the predicted joint
/// angles, command the arms. Recurrent state persists across the rollout.
/// Any non-finite prediction aborts the rollout as a NaN failure.
pub fn act_closed_loop(params: &ModelParams, sim: &mut SimState, ticks: usize) -> RolloutOutcome {
    let cfg = &params.config;
    let mut judge = Judge::new();
    let mut state = StateValues::zeros(cfg);
    let mut trace = Vec::with_capacity(ticks);
    let mut saw_nan = false;

    for _ in 0..ticks {
        let sensation = crate::perception::sense(sim);
        let (targets, kp_set, next_state) = policy_tick(params, &sensation, &state);
        if let (Some(targets), Some(next_state)) = (targets, next_state) {
            trace.push(kp_set.expect("keypoints present when step succeeds"));
            state = next_state;
            if !state.all_finite() {
                saw_nan = true;
                break;
            }
            sim.step(targets);
            judge.observe(sim);
        } else {
            saw_nan = true;
            break;
        }
    }
    let mut report = judge.finish(sim);
    if saw_nan {
        report.success = false;
        report.failure_reason = Some(crate::socksim::FailureReason::Nan);
    }
    RolloutOutcome {
        report,
        keypoint_trace: trace,
    }
}

/// One inference tick: builds a fresh forward graph from the sensation and
/// the carried recurrent state, returning gripper tip targets.
#[allow(clippy::type_complexity)]
pub fn policy_tick(
    params: &ModelParams,
    sensation: &Sensation,
    state: &StateValues,
) -> (
    Option<[[f64; 2]; 2]>,
    Option<KeypointSet>,
    Option<StateValues>,
) {
    let cfg = &params.config;
    let mut tape: Tape<f32> = Tape::new();
    let lp = tape.load_params(&params.set);

    let chans = frame_channels(
        cfg,
        &sensation.frame.sock_masked_depth.values,
        &sensation.frame.foot_masked_depth.values,
        &sensation.grayscale,
    );
    let input = tape.constant(vec![cfg.in_channels(), cfg.img, cfg.img], chans);
    let depth = if cfg.keypoint_dims() == 3 {
        Some(sensation.frame.raw_depth.values.as_slice())
    } else {
        None
    };
    let Ok((_feat, _attn, kp)) = visual_keypoints(&mut tape, &lp, cfg, input, depth) else {
        return (None, None, None);
    };
    let angles_f32: Vec<f32> = sensation.angles.iter().map(|&v| v as f32).collect();
    let torques_f32: Vec<f32> = sensation.torques.iter().map(|&v| v as f32).collect();
    let tactile_f32: Vec<f32> = sensation.tactile.iter().map(|&v| v as f32).collect();
    let norm = &params.norm;
    let a = normalize(&angles_f32, &norm.angle_min, &norm.angle_max).expect("dims");
    let q = normalize(&torques_f32, &norm.torque_min, &norm.torque_max).expect("dims");
    let c = normalize(&tactile_f32, &norm.tactile_min, &norm.tactile_max).expect("dims");
    let kd = cfg.keypoint_dims();
    let Ok(vision) = tape.reshape(kp, vec![cfg.keypoint_count() * kd]) else {
        return (None, None, None);
    };
    let av = tape.constant(vec![a.len()], a);
    let qv = tape.constant(vec![q.len()], q);
    let cv = tape.constant(vec![c.len()], c);
    let prev = state_to_vars(&mut tape, state);
    let Ok((next, out)) = hlstm_step(&mut tape, &lp, cfg, vision, av, qv, cv, &prev) else {
        return (None, None, None);
    };

    let pred_norm: Vec<f32> = tape.value(out.angles).to_vec();
    if pred_norm.iter().any(|v| !v.is_finite()) {
        return (None, None, None);
    }
    let raw = denormalize(&pred_norm, &norm.angle_min, &norm.angle_max).expect("dims");
    // actuated joints: shoulder/elbow pairs at slots 0-1 and 7-8
    let qa = [raw[0] as f64, raw[1] as f64];
    let qb = [raw[7] as f64, raw[8] as f64];
    let arms = crate::socksim::ArmState::standard();
    let targets = [
        arms.grippers[0].forward(qa),
        arms.grippers[1].forward(qb),
    ];
    let kp_vals: Vec<f32> = tape.value(kp).to_vec();
    let kp_set = KeypointSet::from_flat(&kp_vals, kd);
    let next_state = vars_to_state(&tape, &next);
    (Some(targets), Some(kp_set), Some(next_state))
}

// ── Checkpoint serialization ────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 8] = b"HLSMCKPT";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic; not a checkpoint file")]
    BadMagic { path: String },
    #[error("{path}: unsupported version {found} (expected {expected})")]
    BadVersion {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated checkpoint: {what}")]
    Truncated { path: String, what: String },
    #[error(
        "{path}: config hash mismatch (checkpoint {found}, requested {expected}); \
         pass force=true to load anyway"
    )]
    ConfigMismatch {
        path: String,
        found: String,
        expected: String,
    },
    #[error("{path}: sidecar error: {msg}")]
    Sidecar { path: String, msg: String },
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    std::path::PathBuf::from(os)
}

/// Binary layout: magic, u32 version, length-prefixed config hash,
/// normalization block, then named parameter sections (name, shape,
/// little-endian f32 data). A JSON sidecar `<path>.json` carries the
/// human-readable configuration.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    let io_err = |e: std::io::Error| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let hash = params.config.hash();
    buf.extend_from_slice(&(hash.len() as u32).to_le_bytes());
    buf.extend_from_slice(hash.as_bytes());

    let write_f32s = |buf: &mut Vec<u8>, vals: &[f32]| {
        buf.extend_from_slice(&(vals.len() as u32).to_le_bytes());
        for v in vals {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    };
    let n = &params.norm;
    for block in [
        &n.angle_min,
        &n.angle_max,
        &n.torque_min,
        &n.torque_max,
        &n.tactile_min,
        &n.tactile_max,
    ] {
        write_f32s(&mut buf, block);
    }

    buf.extend_from_slice(&(params.set.len() as u32).to_le_bytes());
    for (name, tensor) in params.set.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape.len() as u32).to_le_bytes());
        for d in &tensor.shape {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &tensor.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(&buf).map_err(io_err)?;

    let sidecar = serde_json::json!({
        "format": "hlsm-checkpoint",
        "version": CKPT_VERSION,
        "config_hash": hash,
        "config": params.config,
        "parameters": params.set.len(),
        "total_elements": params.set.total_elements(),
    });
    std::fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&sidecar).expect("json") + "\n",
    )
    .map_err(io_err)?;
    Ok(())
}

/// Loads a checkpoint. When `expected` is given its config hash must match
/// unless `force` is set.
pub fn load_checkpoint(
    path: &Path,
    expected: Option<&ModelConfig>,
    force: bool,
) -> Result<ModelParams, CheckpointError> {
    let pd = || path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CheckpointError::Io {
            path: pd(),
            source: e,
        })?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8], CheckpointError> {
        if *pos + n > bytes.len() {
            return Err(CheckpointError::Truncated {
                path: pd(),
                what: what.to_string(),
            });
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let take_u32 = |pos: &mut usize, what: &str| -> Result<u32, CheckpointError> {
        let s = take(pos, 4, what)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    };

    if take(&mut pos, 8, "magic")? != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic { path: pd() });
    }
    let version = take_u32(&mut pos, "version")?;
    if version != CKPT_VERSION {
        return Err(CheckpointError::BadVersion {
            path: pd(),
            found: version,
            expected: CKPT_VERSION,
        });
    }
    let hash_len = take_u32(&mut pos, "config hash length")? as usize;
    let hash = String::from_utf8(take(&mut pos, hash_len, "config hash")?.to_vec())
        .map_err(|_| CheckpointError::Truncated {
            path: pd(),
            what: "config hash utf8".into(),
        })?;

    // config comes from the sidecar; the stored hash authenticates it
    let sidecar = sidecar_path(path);
    let side_text = std::fs::read_to_string(&sidecar).map_err(|e| CheckpointError::Sidecar {
        path: sidecar.display().to_string(),
        msg: e.to_string(),
    })?;
    let side: serde_json::Value =
        serde_json::from_str(&side_text).map_err(|e| CheckpointError::Sidecar {
            path: sidecar.display().to_string(),
            msg: e.to_string(),
        })?;
    let config: ModelConfig = serde_json::from_value(side["config"].clone()).map_err(|e| {
        CheckpointError::Sidecar {
            path: sidecar.display().to_string(),
            msg: format!("bad config: {e}"),
        }
    })?;
    if config.hash() != hash {
        return Err(CheckpointError::Sidecar {
            path: sidecar.display().to_string(),
            msg: "sidecar config does not match the checkpoint hash".into(),
        });
    }
    if let Some(exp) = expected {
        if exp.hash() != hash && !force {
            return Err(CheckpointError::ConfigMismatch {
                path: pd(),
                found: hash,
                expected: exp.hash(),
            });
        }
    }

    let read_f32s = |pos: &mut usize, what: &str| -> Result<Vec<f32>, CheckpointError> {
        let n = take_u32(pos, what)? as usize;
        let raw = take(pos, 4 * n, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    };
    let norm = NormStats {
        angle_min: read_f32s(&mut pos, "angle_min")?,
        angle_max: read_f32s(&mut pos, "angle_max")?,
        torque_min: read_f32s(&mut pos, "torque_min")?,
        torque_max: read_f32s(&mut pos, "torque_max")?,
        tactile_min: read_f32s(&mut pos, "tactile_min")?,
        tactile_max: read_f32s(&mut pos, "tactile_max")?,
    };

    let count = take_u32(&mut pos, "parameter count")? as usize;
    let mut set = ParamSet::new();
    for _ in 0..count {
        let name_len = take_u32(&mut pos, "name length")? as usize;
        let name = String::from_utf8(take(&mut pos, name_len, "name")?.to_vec()).map_err(|_| {
            CheckpointError::Truncated {
                path: pd(),
                what: "parameter name utf8".into(),
            }
        })?;
        let ndim = take_u32(&mut pos, "ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(take_u32(&mut pos, "dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, 4 * numel, &format!("data of {name}"))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        set.insert(&name, Tensor::new(shape, data));
    }
    if pos != bytes.len() {
        return Err(CheckpointError::Truncated {
            path: pd(),
            what: format!("{} trailing bytes", bytes.len() - pos),
        });
    }
    Ok(ModelParams { config, set, norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config(d: usize) -> ModelConfig {
        ModelConfig {
            bottom_width: d,
            union_width: 2 * d,
            ..ModelConfig::toy(VariantKind::Full)
        }
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let min = [1.0f32, -2.0];
        let max = [3.0f32, 2.0];
        assert_eq!(normalize(&min, &min, &max).unwrap(), vec![0.0, 0.0]);
        assert_eq!(normalize(&max, &min, &max).unwrap(), vec![1.0, 1.0]);
        let mid = [2.0f32, 0.0];
        assert_eq!(normalize(&mid, &min, &max).unwrap(), vec![0.5, 0.5]);
        // constant dim maps to 0.5
        let y = normalize(&[5.0], &[7.0], &[7.0]).unwrap();
        assert_eq!(y, vec![0.5]);
        assert!(normalize(&[1.0, 2.0], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn denormalize_inverts_normalize_in_range() {
        let min = [0.5f32, -1.0, 3.0];
        let max = [1.5f32, 1.0, 9.0];
        let x = [0.75f32, 0.3, 4.2];
        let y = normalize(&x, &min, &max).unwrap();
        let back = denormalize(&y, &min, &max).unwrap();
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(denormalize(&[0.0, 0.0, 0.0], &min, &max).unwrap(), min);
        assert_eq!(denormalize(&[1.0, 1.0, 1.0], &min, &max).unwrap(), max);
    }

    /// Independent scalar-loop implementation of the full hierarchical
    /// wiring, used as the oracle for the tape version.
    mod oracle {
        pub struct Lstm {
            pub w: Vec<f64>, // [4H, X+H]
            pub b: Vec<f64>,
            pub hidden: usize,
            pub input: usize,
        }

        fn sigmoid(x: f64) -> f64 {
            1.0 / (1.0 + (-x).exp())
        }

        impl Lstm {
            pub fn step(&self, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
                let hd = self.hidden;
                let xs: Vec<f64> = x.iter().chain(h.iter()).copied().collect();
                assert_eq!(xs.len(), self.input + hd);
                let mut pre = self.b.clone();
                for r in 0..4 * hd {
                    for (k, xv) in xs.iter().enumerate() {
                        pre[r] += self.w[r * (self.input + hd) + k] * xv;
                    }
                }
                let mut h2 = vec![0.0; hd];
                let mut c2 = vec![0.0; hd];
                for j in 0..hd {
                    let i = sigmoid(pre[j]);
                    let f = sigmoid(pre[hd + j]);
                    let g = pre[2 * hd + j].tanh();
                    let o = sigmoid(pre[3 * hd + j]);
                    c2[j] = f * c[j] + i * g;
                    h2[j] = o * c2[j].tanh();
                }
                (h2, c2)
            }
        }
    }

    #[test]
    fn hierarchical_step_matches_scalar_oracle_at_d2() {
        let cfg = ModelConfig {
            variant: VariantKind::NoSknet, // isolate the recurrent wiring
            ..tiny_config(2)
        };
        let params = ModelParams::init(cfg.clone(), 42);
        let d = cfg.bottom_width;
        let du = cfg.union_width;
        let dims = [cfg.vision_dims(), JOINT_DIMS, JOINT_DIMS, TACTILE_DIMS];
        let names = ["vision", "angles", "torques", "tactile"];

        // oracle copies of every weight
        let get = |n: &str| -> Vec<f64> {
            params.set.get(n).data.iter().map(|&v| v as f64).collect()
        };
        let bottoms: Vec<oracle::Lstm> = names
            .iter()
            .zip(dims)
            .map(|(n, input)| oracle::Lstm {
                w: get(&format!("lstm.{n}.w")),
                b: get(&format!("lstm.{n}.b")),
                hidden: d,
                input,
            })
            .collect();
        let union = oracle::Lstm {
            w: get("lstm.union.w"),
            b: get("lstm.union.b"),
            hidden: du,
            input: 4 * d,
        };
        let fw = get("feedback.w");
        let fb = get("feedback.b");

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut inputs: Vec<Vec<f32>> = Vec::new();
        for dim in dims {
            inputs.push((0..dim).map(|_| rng.gen_range(0.0..1.0)).collect());
        }

        // oracle: three steps of the two-stage update
        let mut oh = vec![vec![0.0f64; d]; 4];
        let mut oc = vec![vec![0.0f64; d]; 4];
        let mut ouh = vec![0.0f64; du];
        let mut ouc = vec![0.0f64; du];
        for _ in 0..3 {
            let u_in: Vec<f64> = oh.iter().flatten().copied().collect();
            let (nuh, nuc) = union.step(&u_in, &ouh, &ouc);
            ouh = nuh;
            ouc = nuc;
            let mut v = fb.clone();
            for r in 0..4 * d {
                for k in 0..du {
                    v[r] += fw[r * du + k] * ouh[k];
                }
            }
            for (i, bot) in bottoms.iter().enumerate() {
                let x: Vec<f64> = inputs[i].iter().map(|&f| f as f64).collect();
                let fed = &v[i * d..(i + 1) * d];
                let (h2, c2) = bot.step(&x, fed, &oc[i]);
                oh[i] = h2;
                oc[i] = c2;
            }
        }

        // tape: same three steps
        let mut tape: Tape<f32> = Tape::new();
        let lp = tape.load_params(&params.set);
        let mut state = state_to_vars(&mut tape, &StateValues::zeros(&cfg));
        for _ in 0..3 {
            let vs: Vec<Var> = inputs
                .iter()
                .map(|x| tape.constant(vec![x.len()], x.clone()))
                .collect();
            let (next, _) =
                hlstm_step(&mut tape, &lp, &cfg, vs[0], vs[1], vs[2], vs[3], &state).unwrap();
            state = next;
        }
        for i in 0..4 {
            for (a, b) in tape.value(state.bottoms[i].0).iter().zip(&oh[i]) {
                assert!((f64::from(*a) - b).abs() < 1e-6, "bottom {i}: {a} vs {b}");
            }
            for (a, b) in tape.value(state.bottoms[i].1).iter().zip(&oc[i]) {
                assert!((f64::from(*a) - b).abs() < 1e-6);
            }
        }
        for (a, b) in tape.value(state.union.0).iter().zip(&ouh) {
            assert!((f64::from(*a) - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_everything_outputs_head_bias_through_activation() {
        let cfg = ModelConfig {
            variant: VariantKind::NoSknet,
            ..tiny_config(2)
        };
        let mut params = ModelParams::init(cfg.clone(), 1);
        for (_, t) in params.set.iter_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        // distinctive head biases
        let hb: Vec<f32> = (0..JOINT_DIMS).map(|i| (i as f32) * 0.1 - 0.7).collect();
        params.set.get_mut("head.angles.b").data = hb.clone();

        let mut tape: Tape<f32> = Tape::new();
        let lp = tape.load_params(&params.set);
        let state = state_to_vars(&mut tape, &StateValues::zeros(&cfg));
        let z = |tape: &mut Tape<f32>, n: usize| tape.constant(vec![n], vec![0.0; n]);
        let (v, a, q, c) = (
            z(&mut tape, cfg.vision_dims()),
            z(&mut tape, JOINT_DIMS),
            z(&mut tape, JOINT_DIMS),
            z(&mut tape, TACTILE_DIMS),
        );
        let (_, out) = hlstm_step(&mut tape, &lp, &cfg, v, a, q, c, &state).unwrap();
        for (got, b) in tape.value(out.angles).iter().zip(&hb) {
            let expect = 1.0 / (1.0 + (-b).exp());
            assert!((got - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn feedback_split_concat_is_bitwise_exact() {
        let mut tape: Tape<f32> = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..128).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let v = tape.constant(vec![128], data.clone());
        let rt = split_roundtrip(&mut tape, v, 4).unwrap();
        let back: Vec<u32> = tape.value(rt).iter().map(|f| f.to_bits()).collect();
        let orig: Vec<u32> = data.iter().map(|f| f.to_bits()).collect();
        assert_eq!(back, orig);
    }

    #[test]
    fn step_is_markov_in_inputs_and_state() {
        let cfg = tiny_config(3);
        let params = ModelParams::init(cfg.clone(), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<Vec<f32>> = [cfg.vision_dims(), JOINT_DIMS, JOINT_DIMS, TACTILE_DIMS]
            .iter()
            .map(|&n| (0..n).map(|_| rng.gen_range(0.0f32..1.0)).collect())
            .collect();
        let run = || {
            let mut tape: Tape<f32> = Tape::new();
            let lp = tape.load_params(&params.set);
            let state = state_to_vars(&mut tape, &StateValues::zeros(&cfg));
            let vars: Vec<Var> = xs
                .iter()
                .map(|x| tape.constant(vec![x.len()], x.clone()))
                .collect();
            let (next, out) =
                hlstm_step(&mut tape, &lp, &cfg, vars[0], vars[1], vars[2], vars[3], &state)
                    .unwrap();
            (
                tape.value(out.angles).to_vec(),
                vars_to_state(&tape, &next),
            )
        };
        let (a1, s1) = run();
        let (a2, s2) = run();
        assert_eq!(a1, a2);
        assert_eq!(s1.union.0, s2.union.0);
        assert_eq!(s1.bottoms[2].1, s2.bottoms[2].1);
    }

    #[test]
    fn flat_variant_preserves_io_shapes() {
        let cfg = ModelConfig {
            variant: VariantKind::NoHier,
            ..ModelConfig::toy(VariantKind::NoHier)
        };
        let params = ModelParams::init(cfg.clone(), 5);
        let mut tape: Tape<f32> = Tape::new();
        let lp = tape.load_params(&params.set);
        let state = state_to_vars(&mut tape, &StateValues::zeros(&cfg));
        let z = |tape: &mut Tape<f32>, n: usize| tape.constant(vec![n], vec![0.1; n]);
        let (v, a, q, c) = (
            z(&mut tape, cfg.vision_dims()),
            z(&mut tape, JOINT_DIMS),
            z(&mut tape, JOINT_DIMS),
            z(&mut tape, TACTILE_DIMS),
        );
        let (next, out) = hlstm_step(&mut tape, &lp, &cfg, v, a, q, c, &state).unwrap();
        assert_eq!(tape.shape(out.angles), &[JOINT_DIMS]);
        assert_eq!(tape.shape(out.torques), &[JOINT_DIMS]);
        assert_eq!(tape.shape(out.tactile), &[TACTILE_DIMS]);
        assert_eq!(
            tape.shape(out.keypoints),
            &[cfg.keypoint_count(), cfg.keypoint_dims()]
        );
        assert!(next.bottoms.is_empty());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(2);
        let mut params = ModelParams::init(cfg, 77);
        params.norm.angle_min[3] = -0.25;
        params.norm.tactile_max[1] = 19.5;
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&params, &p1).unwrap();
        let loaded = load_checkpoint(&p1, None, false).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.norm, params.norm);
        for ((n1, t1), (n2, t2)) in params.set.iter().zip(loaded.set.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape, t2.shape);
            let b1: Vec<u32> = t1.data.iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u32> = t2.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(2);
        let params = ModelParams::init(cfg, 1);
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&params, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&p, None, false),
            Err(CheckpointError::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(2);
        let params = ModelParams::init(cfg, 1);
        let p = dir.path().join("t.ckpt");
        save_checkpoint(&params, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            load_checkpoint(&p, None, false),
            Err(CheckpointError::Truncated { .. })
        ));
    }

    #[test]
    fn config_hash_mismatch_refused_unless_forced() {
        let dir = tempfile::tempdir().unwrap();
        let params = ModelParams::init(tiny_config(2), 1);
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&params, &p).unwrap();
        let other = tiny_config(3);
        assert!(matches!(
            load_checkpoint(&p, Some(&other), false),
            Err(CheckpointError::ConfigMismatch { .. })
        ));
        let forced = load_checkpoint(&p, Some(&other), true).unwrap();
        assert_eq!(forced.config, params.config);
    }
}
