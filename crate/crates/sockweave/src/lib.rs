//! Multimodal imitation learning for close-fitting garment (sock) dressing.
//!
//! The crate trains and evaluates a visuomotor policy end-to-end against a
//! deterministic 2-D sock-dressing simulator:
//!
//! - [`diffcore`] — tensor autodiff engine with Adam and finite-difference
//!   gradient verification
//! - [`perception`] — mask/depth oracles and masked-depth fusion
//! - [`attention`] — CNN encoder, spatial-softmax 3D keypoints, 1-D selective
//!   kernel attention, heatmap-gated image decoder
//! - [`policy`] — hierarchical per-modality/union LSTM with checkpointing
//! - [`trainer`] — dataset I/O, composite loss, training loop, ablations
//! - [`socksim`] — foot/sock/gripper simulator, scripted expert, evaluator
//!
//! See the `examples/` directory for one runnable example per capability and
//! the `sockweave` binary for the batch subcommands.

pub mod attention;
pub mod commands;
pub mod config;
pub mod diffcore;
pub mod io;
pub mod perception;
pub mod policy;
pub mod socksim;
pub mod trainer;
