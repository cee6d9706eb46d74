use sockweave::config::{ModelConfig, VariantKind};
use sockweave::policy::ModelParams;
use sockweave::trainer::{compute_norm_stats, episode_pass_public as episode_pass, generate_episode};
fn main() {
    let cfg = ModelConfig::desk(VariantKind::Full);
    let ep = generate_episode("b", 40.0, 2.4, 0, 2).unwrap();
    let mut params = ModelParams::init(cfg, 0);
    params.norm = compute_norm_stats(std::slice::from_ref(&ep));
    let t0 = std::time::Instant::now();
    let _ = episode_pass(&params, &ep).unwrap();
    println!("episode fwd+bwd: {:.3} s", t0.elapsed().as_secs_f64());
}
