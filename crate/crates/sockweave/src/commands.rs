//! Batch subcommand implementations shared by the `sockweave` binary and
//! the runnable examples: dataset generation, training, closed-loop
//! evaluation, gradient checking, and artifact export.
//!
//! Every command honors its seed end to end and writes a `config.json`
//! snapshot (no timestamps) so outputs are byte-reproducible.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::write_keypoint_csv;
use crate::config::{ModelConfig, VariantKind};
use crate::diffcore::{finite_diff_check, ParamSet, Tape};
use crate::perception;
use crate::policy::{
    act_closed_loop, load_checkpoint, rollout_open_loop, save_checkpoint, ModelParams,
};
use crate::socksim::{make_foot, FailureReason, SimConfig, SimState, EVAL_TICKS};
use crate::trainer::{
    self, build_variant, combine_losses, generate_episode, load_dataset, save_dataset,
    synthetic_episode, train, write_loss_csv, EpisodeRecord, TrainConfig, TrainError,
};

/// Process exit codes shared by every subcommand.
pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_GATE: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CmdError {
    #[error("{0}")]
    Validation(String),
    #[error("numerical abort: {0}")]
    Numeric(String),
    #[error("gate failed: {0}")]
    Gate(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Validation(_) => EXIT_VALIDATION,
            CmdError::Numeric(_) => EXIT_NUMERIC,
            CmdError::Gate(_) => EXIT_GATE,
        }
    }
}

fn validation<E: std::fmt::Display>(e: E) -> CmdError {
    CmdError::Validation(e.to_string())
}

impl From<TrainError> for CmdError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NanLoss { .. } => CmdError::Numeric(e.to_string()),
            other => CmdError::Validation(other.to_string()),
        }
    }
}

/// Writes the reproducibility snapshot for a run.
fn write_config_snapshot<T: Serialize>(out: &Path, command: &str, args: &T) -> Result<(), CmdError> {
    let body = serde_json::json!({ "command": command, "args": args });
    std::fs::create_dir_all(out).map_err(validation)?;
    std::fs::write(
        out.join("config.json"),
        serde_json::to_string_pretty(&body).expect("json") + "\n",
    )
    .map_err(validation)
}

// ── gen ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenArgs {
    pub episodes: usize,
    pub angles: Vec<f64>,
    pub sizes: Vec<f64>,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for GenArgs {
    fn default() -> Self {
        GenArgs {
            episodes: 12,
            angles: vec![30.0, 40.0, 50.0],
            sizes: vec![2.3, 2.42, 2.54, 2.65],
            seed: 0,
            out: PathBuf::from("dataset"),
        }
    }
}

const EXPERT_RETRIES: usize = 5;

/// Generates scripted-expert demonstrations; angles and sizes cycle across
/// episodes. Removes partial output if any episode exhausts its retries.
pub fn cmd_gen(args: &GenArgs) -> Result<(), CmdError> {
    if args.episodes == 0 || args.angles.is_empty() || args.sizes.is_empty() {
        return Err(CmdError::Validation(
            "need at least one episode, angle, and size".into(),
        ));
    }
    write_config_snapshot(&args.out, "gen", args)?;
    let mut episodes = Vec::with_capacity(args.episodes);
    for i in 0..args.episodes {
        let angle = args.angles[i % args.angles.len()];
        let size = args.sizes[(i / args.angles.len()) % args.sizes.len()];
        let id = format!("{i:03}");
        let seed = args.seed.wrapping_add(i as u64);
        match generate_episode(&id, angle, size, seed, EXPERT_RETRIES) {
            Ok(ep) => episodes.push(ep),
            Err(e) => {
                let _ = std::fs::remove_dir_all(&args.out);
                return Err(CmdError::Validation(format!("episode {id}: {e}")));
            }
        }
    }
    save_dataset(&episodes, &args.out)?;
    println!(
        "wrote {} episodes ({} steps each) to {}",
        episodes.len(),
        episodes.first().map_or(0, EpisodeRecord::len),
        args.out.display()
    );
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    pub data: PathBuf,
    pub epochs: usize,
    pub variant: String,
    pub seed: u64,
    pub learning_rate: f64,
    pub out: PathBuf,
}

impl Default for TrainArgs {
    fn default() -> Self {
        TrainArgs {
            data: PathBuf::from("dataset"),
            epochs: 2000,
            variant: "full".into(),
            seed: 0,
            learning_rate: 2e-3,
            out: PathBuf::from("run"),
        }
    }
}

/// Trains a variant on a dataset directory; writes `model.ckpt`,
/// `model.ckpt.json`, `loss.csv`, and `config.json` into the output dir.
pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf, CmdError> {
    let model = build_variant(&args.variant)?;
    let episodes = load_dataset(&args.data)?;
    write_config_snapshot(&args.out, "train", args)?;
    let tc = TrainConfig::new(model, args.epochs, args.learning_rate, args.seed);
    let (params, curve) = train(&episodes, &tc, |epoch, loss| {
        if epoch % 100 == 0 {
            eprintln!("epoch {epoch}: L_train {:.6}", loss.total);
        }
    })?;
    let ckpt = args.out.join("model.ckpt");
    save_checkpoint(&params, &ckpt).map_err(validation)?;
    write_loss_csv(&args.out.join("loss.csv"), &curve)?;
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        println!(
            "trained {} epochs: L_train {:.6} -> {:.6}",
            curve.len(),
            first.total,
            last.total
        );
    } else {
        println!("trained 0 epochs: initialized checkpoint written");
    }
    Ok(ckpt)
}

// ── eval ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub episodes: usize,
    /// Fixed angle, or cycle the training angles when empty.
    pub angle: Option<f64>,
    /// Fixed foot size, or cycle {2.3, 2.4, 2.5, 2.6} when empty.
    pub size: Option<f64>,
    pub seed: u64,
    pub variant: Option<String>,
    pub out: PathBuf,
}

impl Default for EvalArgs {
    fn default() -> Self {
        EvalArgs {
            ckpt: PathBuf::from("run/model.ckpt"),
            episodes: 20,
            angle: None,
            size: None,
            seed: 1000,
            variant: None,
            out: PathBuf::from("eval"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutReport {
    pub seed: u64,
    pub foot_angle: f64,
    pub foot_size: f64,
    pub success: bool,
    pub failure_reason: Option<FailureReason>,
    pub phase_peaks_n: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub episodes: usize,
    pub success_count: usize,
    pub rollouts: Vec<RolloutReport>,
}

pub const EVAL_SIZES: [f64; 4] = [2.3, 2.4, 2.5, 2.6];
pub const TRAIN_ANGLES: [f64; 3] = [30.0, 40.0, 50.0];

/// Closed-loop evaluation: 300-tick rollouts against fresh seeded scenes.
pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport, CmdError> {
    let expected = args
        .variant
        .as_deref()
        .map(build_variant)
        .transpose()?;
    let params = load_checkpoint(&args.ckpt, expected.as_ref(), false).map_err(validation)?;
    write_config_snapshot(&args.out, "eval", args)?;
    let report = evaluate_policy(&params, args.episodes, args.angle, args.size, args.seed);
    let path = args.out.join("report.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&report).expect("json") + "\n",
    )
    .map_err(validation)?;
    println!(
        "{}: {}/{} successes",
        report.variant, report.success_count, report.episodes
    );
    Ok(report)
}

/// Rollout battery used by `cmd_eval` and the acceptance suite.
pub fn evaluate_policy(
    params: &ModelParams,
    episodes: usize,
    angle: Option<f64>,
    size: Option<f64>,
    seed: u64,
) -> EvalReport {
    let mut rollouts = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let a = angle.unwrap_or(TRAIN_ANGLES[i % TRAIN_ANGLES.len()]);
        let s = size.unwrap_or(EVAL_SIZES[i % EVAL_SIZES.len()]);
        let rollout_seed = seed.wrapping_add(7919 * i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(rollout_seed);
        let foot = make_foot(a, s, &mut rng).expect("valid eval geometry");
        let mut sim = SimState::new(foot, SimConfig::default(), rollout_seed);
        let outcome = act_closed_loop(params, &mut sim, EVAL_TICKS);
        rollouts.push(RolloutReport {
            seed: rollout_seed,
            foot_angle: a,
            foot_size: s,
            success: outcome.report.success,
            failure_reason: outcome.report.failure_reason,
            phase_peaks_n: outcome.report.phase_peaks_n,
        });
    }
    EvalReport {
        variant: params.config.variant.name().to_string(),
        episodes,
        success_count: rollouts.iter().filter(|r| r.success).count(),
        rollouts,
    }
}

// ── gradcheck ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckArgs {
    /// "toy" checks everything at reduced dims; "full" adds a sampled check
    /// at production dims.
    pub scale: String,
    pub seed: u64,
    /// Test hook: perturbs one analytic gradient so the gate must fail.
    pub corrupt: bool,
}

impl Default for GradcheckArgs {
    fn default() -> Self {
        GradcheckArgs {
            scale: "toy".into(),
            seed: 0,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckComponent {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Finite-difference gate over every op kind (via the composite model loss)
/// and each ablation variant at reduced dims. Fails when any component
/// exceeds 1e-4 relative error against 64-bit central differences.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<Vec<GradcheckComponent>, CmdError> {
    let toy = args.scale != "full";
    let mut components = Vec::new();
    let t_len = 3;

    for variant in VariantKind::ALL {
        let cfg = ModelConfig {
            bottom_width: 4,
            ..ModelConfig::toy(variant)
        };
        let episode = synthetic_episode(&cfg, "gc", t_len, args.seed.wrapping_add(17));
        let norm = trainer::compute_norm_stats(std::slice::from_ref(&episode));
        let params32 = ModelParams::init(cfg.clone(), args.seed);
        let params64: ParamSet<f64> = params32.set.cast();
        let mut analytic = params64.clone();
        {
            let mut tape: Tape<f64> = Tape::new();
            let lp = tape.load_params(&params64);
            let rollout = rollout_open_loop(&mut tape, &lp, &cfg, &episode, &norm)
                .map_err(|e| CmdError::Validation(e.to_string()))?;
            let (total, _) =
                combine_losses(&mut tape, &rollout.losses, &cfg.loss_weights).map_err(validation)?;
            tape.backward(total).map_err(validation)?;
            tape.harvest_grads(&mut analytic);
        }
        if args.corrupt {
            // negative control: break one gradient on purpose
            let g = analytic.get_mut("enc.conv1.w").grad.as_mut().unwrap();
            g[0] += 1.0;
        }
        let report = finite_diff_check(&params64, &analytic, 1e-4, |p| {
            trainer::loss_value_f64(p, &cfg, &norm, &episode)
        });
        components.push(GradcheckComponent {
            name: format!("composite-loss/{}", variant.name()),
            max_rel_err: report.max_rel_err,
            checked: report.checked,
        });
    }

    if !toy {
        // sampled spot check at production dims, vision front end only
        let cfg = ModelConfig::desk(VariantKind::Full);
        let episode = synthetic_episode(&cfg, "gc-full", 2, args.seed.wrapping_add(23));
        let norm = trainer::compute_norm_stats(std::slice::from_ref(&episode));
        let params32 = ModelParams::init(cfg.clone(), args.seed);
        let mut params64: ParamSet<f64> = params32.set.cast();
        let mut analytic = params64.clone();
        {
            let mut tape: Tape<f64> = Tape::new();
            let lp = tape.load_params(&params64);
            let rollout = rollout_open_loop(&mut tape, &lp, &cfg, &episode, &norm)
                .map_err(|e| CmdError::Validation(e.to_string()))?;
            let (total, _) =
                combine_losses(&mut tape, &rollout.losses, &cfg.loss_weights).map_err(validation)?;
            tape.backward(total).map_err(validation)?;
            tape.harvest_grads(&mut analytic);
        }
        // keep a seeded sample of up to 8 gradient entries per tensor
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(29));
        use rand::Rng;
        let names: Vec<String> = analytic.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let t = analytic.get_mut(&name);
            let len = t.data.len();
            let keep: Vec<usize> = (0..8.min(len)).map(|_| rng.gen_range(0..len)).collect();
            if let Some(g) = t.grad.as_mut() {
                for (i, v) in g.iter_mut().enumerate() {
                    if !keep.contains(&i) {
                        *v = 0.0; // below the check floor: skipped
                    }
                }
            }
        }
        let report = finite_diff_check(&params64, &analytic, 1e-4, |p| {
            trainer::loss_value_f64(p, &cfg, &norm, &episode)
        });
        components.push(GradcheckComponent {
            name: "composite-loss/full-dims-sampled".into(),
            max_rel_err: report.max_rel_err,
            checked: report.checked,
        });
        params64.zero_grads();
    }

    let mut failed = false;
    for c in &components {
        let ok = c.max_rel_err < 1e-4 && c.checked > 0;
        println!(
            "[{}] {}: max rel err {:.3e} ({} checked)",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            c.max_rel_err,
            c.checked
        );
        failed |= !ok;
    }
    if failed {
        return Err(CmdError::Gate(
            "gradient check exceeded 1e-4 relative error".into(),
        ));
    }
    Ok(components)
}

// ── export ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExportArgs {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub episode: String,
    pub out: PathBuf,
}

/// Teacher-forced pass over one dataset episode: writes the predicted
/// keypoint trace as CSV and the predicted next-step frames as PGMs.
pub fn cmd_export(args: &ExportArgs) -> Result<(), CmdError> {
    let params = load_checkpoint(&args.ckpt, None, false).map_err(validation)?;
    let episodes = load_dataset(&args.data)?;
    let episode = episodes
        .iter()
        .find(|e| e.id == args.episode)
        .ok_or_else(|| CmdError::Validation(format!("episode {} not in dataset", args.episode)))?;
    write_config_snapshot(&args.out, "export", args)?;

    let cfg = &params.config;
    let mut tape: Tape<f32> = Tape::new();
    let lp = tape.load_params(&params.set);
    let rollout =
        rollout_open_loop(&mut tape, &lp, cfg, episode, &params.norm).map_err(validation)?;

    let kd = cfg.keypoint_dims();
    let predicted: Vec<crate::attention::KeypointSet> = rollout
        .predicted_keypoints
        .iter()
        .map(|v| crate::attention::KeypointSet::from_flat(tape.value(*v), kd))
        .collect();
    let current: Vec<crate::attention::KeypointSet> = rollout
        .encoder_keypoints
        .iter()
        .take(episode.len() - 1)
        .map(|v| crate::attention::KeypointSet::from_flat(tape.value(*v), kd))
        .collect();
    write_keypoint_csv(&args.out.join("keypoints.csv"), &predicted).map_err(validation)?;
    write_keypoint_csv(&args.out.join("keypoints_current.csv"), &current).map_err(validation)?;

    let frames = args.out.join("frames");
    std::fs::create_dir_all(&frames).map_err(validation)?;
    let img = cfg.img;
    let steps = episode.len() - 1;
    let channel_names: &[&str] = match cfg.variant {
        VariantKind::NoSamDam => &["gray"],
        _ => &["sock", "foot"],
    };
    for t in 0..steps {
        for (c, name) in channel_names.iter().enumerate() {
            let plane: Vec<u16> = rollout
                .predicted_plane(&tape, t, c, img, steps)
                .iter()
                .map(|&v| (f64::from(v) * 65535.0).round().clamp(0.0, 65535.0) as u16)
                .collect();
            crate::io::write_pgm16(
                &frames.join(format!("pred_{name}_{:04}.pgm", t + 1)),
                img,
                img,
                &plane,
            )
            .map_err(validation)?;
        }
    }
    println!("exported {steps} prediction steps for episode {}", args.episode);
    Ok(())
}

// ── demo export (perception artifacts) ──────────────────────────────────

/// Writes the oracle masks, depth, and fused masked-depth images for one
/// simulator state; used by the masked-depth example.
pub fn export_perception_frame(state: &SimState, out: &Path) -> Result<(), CmdError> {
    std::fs::create_dir_all(out).map_err(validation)?;
    let depth = perception::oracle_depth(state);
    let sock = perception::oracle_segment(state, perception::SegTarget::Sock);
    let foot = perception::oracle_segment(state, perception::SegTarget::Foot);
    perception::export_mask(&out.join("sock_mask.pgm"), &sock).map_err(validation)?;
    perception::export_mask(&out.join("foot_mask.pgm"), &foot).map_err(validation)?;
    perception::export_depth(&out.join("depth.pgm"), &depth).map_err(validation)?;
    for (name, mask) in [("sock", &sock), ("foot", &foot)] {
        let zero = perception::masked_depth(&depth, mask, perception::FillMode::Zero)
            .map_err(validation)?;
        perception::export_masked_depth(&out.join(format!("{name}_masked_depth.pgm")), &zero)
            .map_err(validation)?;
        let nan = perception::masked_depth(&depth, mask, perception::FillMode::Nan)
            .map_err(validation)?;
        perception::export_masked_depth(&out.join(format!("{name}_masked_depth_nan.pgm")), &nan)
            .map_err(validation)?;
    }
    Ok(())
}
