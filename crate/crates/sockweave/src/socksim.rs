//! Deterministic 2-D sock-dressing environment.
//!
//! Side-view scene in scene units (1 unit = 10 cm) inside a fixed
//! 6.4 x 6.4 camera window. A tapered-capsule foot hangs from an ankle
//! anchor; the sock is a mass-spring particle chain whose two opening
//! particles are pinned to the tips of two 2-link planar arms. Physics is
//! over-damped relaxation with tension-only springs, surface projection
//! against the foot, tangential friction, and a tension-gated snag rule.
//!
//! Everything is pure `f64` arithmetic with fixed iteration counts, so a
//! `(seed, target stream)` pair fully determines a trajectory.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Fixed control/physics timestep: 20 Hz.
pub const TICK_SECONDS: f64 = 0.05;
/// Scripted demonstrations run exactly this many ticks.
pub const DEMO_TICKS: usize = 210;
/// Closed-loop evaluation rollouts run this many ticks.
pub const EVAL_TICKS: usize = 300;
/// Joint-angle/torque vector width (7 joints per arm, two arms).
pub const JOINT_DIMS: usize = 14;
/// Thumb tactile channels (one per gripper).
pub const TACTILE_DIMS: usize = 2;
/// Success conditions must hold for this many final ticks (1 s at 20 Hz).
pub const HOLD_TICKS: usize = 20;

/// Fixed filler values for the five non-actuated posture joints of each arm
/// (radians). The actuated shoulder/elbow pair occupies slots 0-1.
pub const POSTURE_JOINTS: [f64; 5] = [0.0, 0.6458, 0.0, -0.7854, 1.7453];

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("foot geometry invalid: {0}")]
    BadGeometry(String),
    #[error("expert failed to produce a successful demonstration after {0} attempts")]
    ExpertFailed(usize),
}

// ── Foot ────────────────────────────────────────────────────────────────

/// Tapered capsule from the ankle anchor toward the toe.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FootGeom {
    /// Degrees from the horizontal plane; training data uses 30/40/50.
    pub angle_deg: f64,
    /// Ankle-to-toe length in scene units (foot sizes 23.0-26.5 cm map to
    /// 2.3-2.65).
    pub length: f64,
    pub heel_radius: f64,
    pub toe_radius: f64,
    /// Scene position the foot hangs from.
    pub ankle_anchor: [f64; 2],
}

impl FootGeom {
    pub fn new(angle_deg: f64, length: f64, ankle_anchor: [f64; 2]) -> Result<Self, SimError> {
        if !(0.0..90.0).contains(&angle_deg) || angle_deg == 0.0 {
            return Err(SimError::BadGeometry(format!(
                "angle {angle_deg} outside (0, 90)"
            )));
        }
        if length <= 0.0 {
            return Err(SimError::BadGeometry(format!("length {length} <= 0")));
        }
        Ok(FootGeom {
            angle_deg,
            length,
            heel_radius: 0.42,
            toe_radius: 0.30,
            ankle_anchor,
        })
    }

    /// Unit vector from ankle toward toe (down-left).
    pub fn axis_to_toe(&self) -> [f64; 2] {
        let a = self.angle_deg.to_radians();
        [-a.cos(), -a.sin()]
    }

    /// Unit vector from toe toward ankle: the dressing progress direction.
    pub fn axis_up(&self) -> [f64; 2] {
        let d = self.axis_to_toe();
        [-d[0], -d[1]]
    }

    /// Unit normal pointing to the upper side of the foot.
    pub fn upper_normal(&self) -> [f64; 2] {
        let d = self.axis_to_toe();
        [d[1], -d[0]]
    }

    pub fn toe_point(&self) -> [f64; 2] {
        let d = self.axis_to_toe();
        [
            self.ankle_anchor[0] + self.length * d[0],
            self.ankle_anchor[1] + self.length * d[1],
        ]
    }

    /// Capsule radius at normalized axial position `s` (0 = ankle, 1 = toe).
    pub fn radius_at(&self, s: f64) -> f64 {
        self.heel_radius + (self.toe_radius - self.heel_radius) * s.clamp(0.0, 1.0)
    }

    /// Projects `p` onto the axis: returns (s, distance to axis point,
    /// surface radius at s, outward unit normal).
    pub fn project(&self, p: [f64; 2]) -> (f64, f64, f64, [f64; 2]) {
        let d = self.axis_to_toe();
        let rel = [p[0] - self.ankle_anchor[0], p[1] - self.ankle_anchor[1]];
        let s = ((rel[0] * d[0] + rel[1] * d[1]) / self.length).clamp(0.0, 1.0);
        let q = [
            self.ankle_anchor[0] + s * self.length * d[0],
            self.ankle_anchor[1] + s * self.length * d[1],
        ];
        let diff = [p[0] - q[0], p[1] - q[1]];
        let dist = (diff[0] * diff[0] + diff[1] * diff[1]).sqrt();
        let normal = if dist > 1e-12 {
            [diff[0] / dist, diff[1] / dist]
        } else {
            self.upper_normal()
        };
        (s, dist, self.radius_at(s), normal)
    }

    /// Normalized lateral offset in [0,1] if `p` lies inside the capsule.
    pub fn profile_at(&self, p: [f64; 2]) -> Option<f64> {
        let (_, dist, r, _) = self.project(p);
        if dist <= r {
            Some((dist / r).clamp(0.0, 1.0))
        } else {
            None
        }
    }

    /// Dense circle sweep approximating the capsule; shared by the mask
    /// rasterizer and its scanline oracle.
    pub fn circles(&self) -> Vec<[f64; 3]> {
        let n = 96;
        let d = self.axis_to_toe();
        (0..=n)
            .map(|i| {
                let s = i as f64 / n as f64;
                [
                    self.ankle_anchor[0] + s * self.length * d[0],
                    self.ankle_anchor[1] + s * self.length * d[1],
                    self.radius_at(s),
                ]
            })
            .collect()
    }

    /// Along-axis coordinate of `p` measured from the toe toward the ankle,
    /// in scene units (negative in front of the toe).
    pub fn progress_of(&self, p: [f64; 2]) -> f64 {
        let up = self.axis_up();
        let t = self.toe_point();
        (p[0] - t[0]) * up[0] + (p[1] - t[1]) * up[1]
    }
}

// ── Sock ────────────────────────────────────────────────────────────────

/// Particle chain; particles 0 and 1 are the opening lips held by the
/// grippers, the link (0,1) is the opening mouth, and the tail 1..N-1 runs
/// along the garment to the closed toe end at N-1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SockChain {
    pub particles: Vec<[f64; 2]>,
    /// Rest length per link; link i connects particles i and i+1.
    pub rest_lengths: Vec<f64>,
    /// Transverse (opening) stiffness, N per unit strain.
    pub mouth_stiffness: f64,
    /// Longitudinal (body) stiffness, N per unit strain.
    pub body_stiffness: f64,
    pub friction: f64,
    pub radius: f64,
}

impl SockChain {
    pub fn link_count(&self) -> usize {
        self.rest_lengths.len()
    }

    /// Positive tension in link `i` (tension-only springs: compression is
    /// slack fabric and exerts no force).
    pub fn tension(&self, i: usize) -> f64 {
        let (a, b) = (self.particles[i], self.particles[i + 1]);
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        let rest = self.rest_lengths[i];
        let strain = (len - rest) / rest;
        let k = if i == 0 {
            self.mouth_stiffness
        } else {
            self.body_stiffness
        };
        if strain > 0.0 {
            k * strain
        } else {
            0.0
        }
    }

    /// Net spring force on particle `i` from its adjacent links.
    pub fn spring_force(&self, i: usize) -> [f64; 2] {
        let mut f = [0.0, 0.0];
        let p = self.particles[i];
        let mut pull = |j: usize, link: usize| {
            let q = self.particles[j];
            let dx = [q[0] - p[0], q[1] - p[1]];
            let len = (dx[0] * dx[0] + dx[1] * dx[1]).sqrt();
            if len < 1e-12 {
                return;
            }
            let t = self.tension(link);
            f[0] += t * dx[0] / len;
            f[1] += t * dx[1] / len;
        };
        if i > 0 {
            pull(i - 1, i - 1);
        }
        if i + 1 < self.particles.len() {
            pull(i + 1, i);
        }
        f
    }

    /// Total elastic energy: sum of 1/2 k rest strain^2 over taut links.
    pub fn spring_energy(&self) -> f64 {
        (0..self.link_count())
            .map(|i| {
                let (a, b) = (self.particles[i], self.particles[i + 1]);
                let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
                let rest = self.rest_lengths[i];
                let strain = ((len - rest) / rest).max(0.0);
                let k = if i == 0 {
                    self.mouth_stiffness
                } else {
                    self.body_stiffness
                };
                0.5 * k * rest * strain * strain
            })
            .sum()
    }

    /// Normalized lateral offset within the sock tube if `p` lies on it.
    pub fn profile_at(&self, p: [f64; 2]) -> Option<f64> {
        let mut best: Option<f64> = None;
        for i in 0..self.link_count() {
            let (a, b) = (self.particles[i], self.particles[i + 1]);
            let ab = [b[0] - a[0], b[1] - a[1]];
            let len2 = ab[0] * ab[0] + ab[1] * ab[1];
            let t = if len2 < 1e-12 {
                0.0
            } else {
                (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
            };
            let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
            let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
            if d <= self.radius {
                let prof = (d / self.radius).clamp(0.0, 1.0);
                best = Some(best.map_or(prof, |b: f64| b.min(prof)));
            }
        }
        best
    }

    /// Circle sweep along every link for rasterization.
    pub fn circles(&self) -> Vec<[f64; 3]> {
        let mut out = Vec::new();
        for i in 0..self.link_count() {
            let (a, b) = (self.particles[i], self.particles[i + 1]);
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            let n = (len / (self.radius * 0.5)).ceil().max(1.0) as usize;
            for j in 0..=n {
                let t = j as f64 / n as f64;
                out.push([
                    a[0] + t * (b[0] - a[0]),
                    a[1] + t * (b[1] - a[1]),
                    self.radius,
                ]);
            }
        }
        out
    }
}

// ── Arms ────────────────────────────────────────────────────────────────

/// 2-link planar arm with a fixed elbow branch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Gripper {
    pub base: [f64; 2],
    pub link1: f64,
    pub link2: f64,
    /// +1 or -1: which IK elbow solution this arm uses.
    pub elbow_sign: f64,
    pub joints: [f64; 2],
    pub tip: [f64; 2],
    /// Set when the last commanded target had to be clamped to the
    /// reachable annulus.
    pub clamped: bool,
}

impl Gripper {
    pub fn new(base: [f64; 2], link1: f64, link2: f64, elbow_sign: f64) -> Self {
        let mut g = Gripper {
            base,
            link1,
            link2,
            elbow_sign,
            joints: [0.0, 0.0],
            tip: [0.0, 0.0],
            clamped: false,
        };
        g.tip = g.forward([0.0, 0.0]);
        g
    }

    pub fn forward(&self, q: [f64; 2]) -> [f64; 2] {
        [
            self.base[0] + self.link1 * q[0].cos() + self.link2 * (q[0] + q[1]).cos(),
            self.base[1] + self.link1 * q[0].sin() + self.link2 * (q[0] + q[1]).sin(),
        ]
    }

    /// Clamps `target` into the reachable annulus, returning the clamped
    /// point and whether clamping occurred.
    pub fn clamp_reachable(&self, target: [f64; 2]) -> ([f64; 2], bool) {
        let rel = [target[0] - self.base[0], target[1] - self.base[1]];
        let d = (rel[0] * rel[0] + rel[1] * rel[1]).sqrt();
        let rmax = (self.link1 + self.link2) * 0.999;
        let rmin = (self.link1 - self.link2).abs() * 1.001 + 1e-9;
        if d >= rmin && d <= rmax {
            return (target, false);
        }
        let r = d.clamp(rmin, rmax);
        let scale = if d < 1e-12 { 0.0 } else { r / d };
        (
            [self.base[0] + rel[0] * scale, self.base[1] + rel[1] * scale],
            true,
        )
    }

    /// Closed-form 2-link inverse kinematics for an in-annulus point.
    pub fn inverse(&self, p: [f64; 2]) -> [f64; 2] {
        let rel = [p[0] - self.base[0], p[1] - self.base[1]];
        let d2 = rel[0] * rel[0] + rel[1] * rel[1];
        let c2 = ((d2 - self.link1 * self.link1 - self.link2 * self.link2)
            / (2.0 * self.link1 * self.link2))
            .clamp(-1.0, 1.0);
        let q2 = self.elbow_sign * c2.acos();
        let q1 = rel[1].atan2(rel[0])
            - (self.link2 * q2.sin()).atan2(self.link1 + self.link2 * q2.cos());
        [q1, q2]
    }

    /// Joint torques for a tip force via the transposed Jacobian.
    pub fn torques_for(&self, f: [f64; 2]) -> [f64; 2] {
        let (q1, q2) = (self.joints[0], self.joints[1]);
        let s1 = q1.sin();
        let c1 = q1.cos();
        let s12 = (q1 + q2).sin();
        let c12 = (q1 + q2).cos();
        // J = [[-l1 s1 - l2 s12, -l2 s12], [l1 c1 + l2 c12, l2 c12]]
        let j11 = -self.link1 * s1 - self.link2 * s12;
        let j12 = -self.link2 * s12;
        let j21 = self.link1 * c1 + self.link2 * c12;
        let j22 = self.link2 * c12;
        [j11 * f[0] + j21 * f[1], j12 * f[0] + j22 * f[1]]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmState {
    pub grippers: [Gripper; 2],
}

impl ArmState {
    /// Gripper pair used by every scene: both arms reach down from above.
    pub fn standard() -> Self {
        ArmState {
            grippers: [
                Gripper::new([2.6, 6.2], 2.3, 2.1, 1.0),
                Gripper::new([1.6, 5.8], 2.3, 2.1, -1.0),
            ],
        }
    }
}

// ── Sim state and stepping ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimConfig {
    pub particle_count: usize,
    pub mouth_stiffness: f64,
    pub body_stiffness: f64,
    /// Downward force per free particle, N.
    pub gravity_force: f64,
    pub friction: f64,
    /// Body-pull tension threshold below which progress freezes in the
    /// heel-contact region.
    pub snag_tension: f64,
    /// Gripper tip speed cap, scene units per tick.
    pub max_tip_step: f64,
    pub relax_iterations: usize,
    /// Particle displacement per Newton per relax iteration.
    pub mobility: f64,
    pub sock_radius: f64,
    /// Heel-contact region in progress fraction.
    pub heel_region: [f64; 2],
    /// Tangential damping for contacting particles the opening has already
    /// passed: the dressed part of the garment grips the foot.
    pub stick_friction: f64,
    /// Hoop-pressure stand-in: force pulling passed fabric onto the foot
    /// surface (the tube wraps the foot), N.
    pub hoop_force: f64,
    /// Surface capture distance for the hoop pull, scene units.
    pub hoop_capture: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            particle_count: 20,
            mouth_stiffness: 4.5,
            body_stiffness: 105.0,
            gravity_force: 0.15,
            friction: 0.4,
            snag_tension: 2.0,
            max_tip_step: 0.06,
            relax_iterations: 80,
            mobility: 0.0006,
            sock_radius: 0.06,
            heel_region: [0.55, 0.85],
            stick_friction: 0.78,
            hoop_force: 1.5,
            hoop_capture: 0.45,
        }
    }
}

/// Fixed home positions for the gripper tips; identical in every episode so
/// proprioception alone cannot reveal the foot placement at t = 0.
pub const HOME_TIP_A: [f64; 2] = [1.15, 2.95];
pub const HOME_TIP_B: [f64; 2] = [1.15, 2.35];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimState {
    pub foot: FootGeom,
    pub sock: SockChain,
    pub arms: ArmState,
    pub config: SimConfig,
    pub tick: u64,
    pub seed: u64,
    /// Ticks spent with progress frozen by the snag rule.
    pub snag_ticks: u64,
    /// Whether the snag rule froze progress on the last step.
    pub snagged: bool,
    /// True once the opening has straddled the foot near the toe.
    pub inserted: bool,
}

impl SimState {
    pub fn new(foot: FootGeom, config: SimConfig, seed: u64) -> Self {
        let mut arms = ArmState::standard();
        for (g, home) in arms.grippers.iter_mut().zip([HOME_TIP_A, HOME_TIP_B]) {
            let (p, _) = g.clamp_reachable(home);
            g.joints = g.inverse(p);
            g.tip = g.forward(g.joints);
        }
        let n = config.particle_count;
        let mut particles = Vec::with_capacity(n);
        particles.push(arms.grippers[0].tip);
        particles.push(arms.grippers[1].tip);
        // tail hangs below the lower lip in a gentle arc
        let tail = n - 2;
        for i in 0..tail {
            let t = (i + 1) as f64;
            particles.push([
                arms.grippers[1].tip[0] - 0.05 * t - 0.002 * t * t,
                arms.grippers[1].tip[1] - 0.11 * t,
            ]);
        }
        let mut rest_lengths = vec![0.125; n - 1];
        rest_lengths[0] = 0.30; // opening mouth
        let sock = SockChain {
            particles,
            rest_lengths,
            mouth_stiffness: config.mouth_stiffness,
            body_stiffness: config.body_stiffness,
            friction: config.friction,
            radius: config.sock_radius,
        };
        SimState {
            foot,
            sock,
            arms,
            config,
            tick: 0,
            seed,
            snag_ticks: 0,
            snagged: false,
            inserted: false,
        }
    }

    /// Mouth (opening) center position.
    pub fn mouth_center(&self) -> [f64; 2] {
        let (a, b) = (self.sock.particles[0], self.sock.particles[1]);
        [(a[0] + b[0]) * 0.5, (a[1] + b[1]) * 0.5]
    }

    /// Mouth progress along the foot axis in scene units from the toe.
    pub fn mouth_progress(&self) -> f64 {
        self.foot.progress_of(self.mouth_center()).max(0.0)
    }

    /// Mouth progress as a fraction of foot length.
    pub fn progress_fraction(&self) -> f64 {
        (self.mouth_progress() / self.foot.length).clamp(0.0, 1.0)
    }

    /// True when the lips sit on opposite sides of the foot axis.
    pub fn straddling(&self) -> bool {
        let n = self.foot.upper_normal();
        let t = self.foot.toe_point();
        let side = |p: [f64; 2]| (p[0] - t[0]) * n[0] + (p[1] - t[1]) * n[1];
        side(self.sock.particles[0]) > 0.0 && side(self.sock.particles[1]) < 0.0
    }

    /// Advances one 20 Hz tick toward the commanded gripper tip targets.
    pub fn step(&mut self, targets: [[f64; 2]; 2]) {
        // 1. move gripper tips (speed-capped, reach-clamped, kept off the foot)
        for (gi, target) in targets.iter().enumerate() {
            let g = &self.arms.grippers[gi];
            let (mut desired, clamped) = g.clamp_reachable(*target);
            // grippers themselves cannot enter the foot
            let (s, dist, r, normal) = self.foot.project(desired);
            let clearance = r + 0.02;
            if dist < clearance {
                let d = self.foot.axis_to_toe();
                let q = [
                    self.foot.ankle_anchor[0] + s * self.foot.length * d[0],
                    self.foot.ankle_anchor[1] + s * self.foot.length * d[1],
                ];
                desired = [q[0] + normal[0] * clearance, q[1] + normal[1] * clearance];
            }
            let step = self.config.max_tip_step;
            let tip0 = g.tip;
            let dx = [desired[0] - tip0[0], desired[1] - tip0[1]];
            let dist = (dx[0] * dx[0] + dx[1] * dx[1]).sqrt();
            let tip = if dist <= step {
                desired
            } else {
                [tip0[0] + dx[0] / dist * step, tip0[1] + dx[1] / dist * step]
            };
            let g = &mut self.arms.grippers[gi];
            let (tip, clamped2) = g.clamp_reachable(tip);
            g.joints = g.inverse(tip);
            g.tip = g.forward(g.joints);
            g.clamped = clamped || clamped2;
        }

        // 2. pin lips to tips
        self.sock.particles[0] = self.arms.grippers[0].tip;
        self.sock.particles[1] = self.arms.grippers[1].tip;

        // 3. snag gate for this tick: body pull at the opening vs threshold
        let frac = self.progress_fraction();
        let in_heel = frac >= self.config.heel_region[0] && frac <= self.config.heel_region[1];
        let body_pull = self.sock.tension(1);
        self.snagged = in_heel && body_pull < self.config.snag_tension;
        if self.snagged {
            self.snag_ticks += 1;
        }
        let up = self.foot.axis_up();
        let mouth_u = self.mouth_progress();

        // 4. relax free particles
        let n = self.sock.particles.len();
        for _ in 0..self.config.relax_iterations {
            let mut moves = vec![[0.0f64; 2]; n];
            for i in 2..n {
                let mut f = self.sock.spring_force(i);
                f[1] -= self.config.gravity_force;
                if self.inserted {
                    // hoop pressure: fabric the opening has passed wraps the
                    // foot and is pulled onto the surface
                    let p = self.sock.particles[i];
                    let (_, dist, r, normal) = self.foot.project(p);
                    let passed = self.foot.progress_of(p) + 0.05 < mouth_u;
                    if passed && dist > r && dist < r + self.config.hoop_capture {
                        f[0] -= normal[0] * self.config.hoop_force;
                        f[1] -= normal[1] * self.config.hoop_force;
                    }
                }
                moves[i] = [self.config.mobility * f[0], self.config.mobility * f[1]];
            }
            for i in 2..n {
                let p = self.sock.particles[i];
                let mut m = moves[i];
                let (_, dist, r, normal) = self.foot.project(p);
                let contact = dist <= r + 0.02;
                if contact {
                    // friction damps tangential sliding; fabric already
                    // passed by the opening grips the surface much harder
                    let dressed = self.foot.progress_of(p) + 0.1 < mouth_u;
                    let mu = if dressed {
                        self.config.stick_friction
                    } else {
                        self.sock.friction
                    };
                    let tangent = [-normal[1], normal[0]];
                    let vt = m[0] * tangent[0] + m[1] * tangent[1];
                    let vn = m[0] * normal[0] + m[1] * normal[1];
                    let mut vt_scaled = vt * (1.0 - mu);
                    if self.snagged {
                        // progress freeze: no motion toward the ankle
                        let fwd = tangent[0] * up[0] + tangent[1] * up[1];
                        if vt_scaled * fwd > 0.0 {
                            vt_scaled = 0.0;
                        }
                    }
                    m = [
                        vt_scaled * tangent[0] + vn * normal[0],
                        vt_scaled * tangent[1] + vn * normal[1],
                    ];
                }
                let mut q = [p[0] + m[0], p[1] + m[1]];
                // project out of the foot
                let (s2, dist2, r2, normal2) = self.foot.project(q);
                if dist2 < r2 {
                    let d = self.foot.axis_to_toe();
                    let axis_pt = [
                        self.foot.ankle_anchor[0] + s2 * self.foot.length * d[0],
                        self.foot.ankle_anchor[1] + s2 * self.foot.length * d[1],
                    ];
                    q = [axis_pt[0] + normal2[0] * r2, axis_pt[1] + normal2[1] * r2];
                }
                self.sock.particles[i] = q;
            }
        }

        if !self.inserted {
            let near_toe = self.mouth_progress() < 0.35 * self.foot.length;
            if self.straddling() && near_toe && self.foot.progress_of(self.mouth_center()) > -0.1
            {
                self.inserted = true;
            }
        }
        self.tick += 1;
    }

    /// Proprioceptive readout: 14 joint angles, 14 torques, 2 tactile.
    pub fn proprioception(&self) -> ([f64; JOINT_DIMS], [f64; JOINT_DIMS], [f64; TACTILE_DIMS]) {
        let mut angles = [0.0; JOINT_DIMS];
        let mut torques = [0.0; JOINT_DIMS];
        let mut tactile = [0.0; TACTILE_DIMS];
        for (gi, g) in self.arms.grippers.iter().enumerate() {
            let base = gi * 7;
            angles[base] = g.joints[0];
            angles[base + 1] = g.joints[1];
            for (k, v) in POSTURE_JOINTS.iter().enumerate() {
                angles[base + 2 + k] = *v;
            }
            let f = self.sock.spring_force(gi); // force the sock exerts on the held lip
            let tau = g.torques_for(f);
            torques[base] = tau[0];
            torques[base + 1] = tau[1];
            tactile[gi] = (f[0] * f[0] + f[1] * f[1]).sqrt();
        }
        (angles, torques, tactile)
    }

    /// Largest penetration depth of any sock particle into the foot.
    pub fn max_penetration(&self) -> f64 {
        self.sock
            .particles
            .iter()
            .skip(2)
            .map(|p| {
                let (_, dist, r, _) = self.foot.project(*p);
                (r - dist).max(0.0)
            })
            .fold(0.0, f64::max)
    }
}

// ── Scene construction ──────────────────────────────────────────────────

/// Nominal ankle anchor before per-episode jitter.
pub const ANKLE_BASE: [f64; 2] = [4.1, 3.6];
/// Per-axis anchor jitter bound, scene units.
pub const ANKLE_JITTER: f64 = 0.12;

/// Builds a foot for an episode: labeled angle, chosen size, and a seeded
/// placement jitter that forces the policy to locate the foot visually.
pub fn make_foot(angle_deg: f64, length: f64, rng: &mut ChaCha8Rng) -> Result<FootGeom, SimError> {
    let jx = rng.gen_range(-ANKLE_JITTER..=ANKLE_JITTER);
    let jy = rng.gen_range(-ANKLE_JITTER..=ANKLE_JITTER);
    FootGeom::new(angle_deg, length, [ANKLE_BASE[0] + jx, ANKLE_BASE[1] + jy])
}

// ── Scripted expert ─────────────────────────────────────────────────────

/// Gripper-tip waypoint schedule for one demonstration.
///
/// Phases: stretch/approach, align with the toe, advance along the axis
/// (parallel mode), lift over the heel, advance to the ankle, hold. Waypoint
/// noise sigma is 2% of foot length. When the sim reports a snag the expert
/// switches to antiphase jitter (alternating mode) until it clears.
pub struct ExpertScript {
    keyframes: Vec<(usize, [f64; 2], f64, f64)>, // (tick, center, half_width, lift)
    foot: FootGeom,
}

impl ExpertScript {
    pub fn new(foot: &FootGeom, noise_sigma: f64, rng: &mut ChaCha8Rng) -> Self {
        let toe = foot.toe_point();
        let up = foot.axis_up();
        let l = foot.length;
        let at = |u: f64| [toe[0] + u * up[0], toe[1] + u * up[1]];
        // mouth half-width: local radius plus a clearance that grows toward
        // the ankle, so opening tension rises monotonically with progress
        let wid = |u: f64| {
            let frac = (u / l).clamp(0.0, 1.0);
            foot.radius_at(1.0 - frac) + 0.16 + 0.08 * frac
        };

        let home = [
            (HOME_TIP_A[0] + HOME_TIP_B[0]) * 0.5,
            (HOME_TIP_A[1] + HOME_TIP_B[1]) * 0.5,
        ];
        let mut kf: Vec<(usize, [f64; 2], f64, f64)> = vec![
            (0, home, 0.30, 0.0),
            (22, at(-0.50), wid(0.0), 0.0), // stretched, in front of toe
            (48, at(-0.18), wid(0.0), 0.0), // aligned with the toe
            (70, at(0.18 * l), wid(0.18 * l), 0.0),
            (100, at(0.42 * l), wid(0.42 * l), 0.0),
            (128, at(0.62 * l), wid(0.62 * l), 0.04),
            (150, at(0.78 * l), wid(0.78 * l), 0.14), // heel lift
            (172, at(0.90 * l), wid(0.90 * l), 0.06),
            (190, at(0.96 * l), wid(0.96 * l), 0.0),
            (DEMO_TICKS, at(0.96 * l), wid(0.96 * l), 0.0), // hold
        ];
        // waypoint noise (first and last keyframes stay exact)
        for item in kf.iter_mut().skip(1) {
            if item.0 == DEMO_TICKS {
                continue;
            }
            item.1[0] += noise_sigma * rng.gen_range(-1.0..=1.0);
            item.1[1] += noise_sigma * rng.gen_range(-1.0..=1.0);
        }
        ExpertScript {
            keyframes: kf,
            foot: foot.clone(),
        }
    }

    /// Tip targets at `tick`, with antiphase jitter while `snagged`.
    pub fn targets(&self, tick: usize, snagged: bool) -> [[f64; 2]; 2] {
        let (center, half_width, lift) = self.interp(tick);
        let n = self.foot.upper_normal();
        let c = [center[0] + lift * n[0], center[1] + lift * n[1]];
        let mut a = [c[0] + half_width * n[0], c[1] + half_width * n[1]];
        let mut b = [c[0] - half_width * n[0], c[1] - half_width * n[1]];
        if snagged {
            // alternating mode: antiphase tugs along the axis raise tension
            let up = self.foot.axis_up();
            let phase = if (tick / 3) % 2 == 0 { 1.0 } else { -1.0 };
            let amp = 0.06;
            a = [a[0] + phase * amp * up[0], a[1] + phase * amp * up[1]];
            b = [b[0] - phase * amp * up[0], b[1] - phase * amp * up[1]];
        }
        [a, b]
    }

    fn interp(&self, tick: usize) -> ([f64; 2], f64, f64) {
        let kf = &self.keyframes;
        if tick >= kf[kf.len() - 1].0 {
            let last = &kf[kf.len() - 1];
            return (last.1, last.2, last.3);
        }
        let mut i = 0;
        while kf[i + 1].0 <= tick {
            i += 1;
        }
        let (t0, c0, w0, l0) = kf[i];
        let (t1, c1, w1, l1) = kf[i + 1];
        let f = (tick - t0) as f64 / (t1 - t0) as f64;
        (
            [c0[0] + f * (c1[0] - c0[0]), c0[1] + f * (c1[1] - c0[1])],
            w0 + f * (w1 - w0),
            l0 + f * (l1 - l0),
        )
    }
}

// ── Judge ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    Snag,
    Misalignment,
    Timeout,
    Nan,
}

/// Per-rollout outcome with peak tactile per dressing phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseReport {
    pub success: bool,
    pub failure_reason: Option<FailureReason>,
    /// Peak thumb tactile (N) in the toe / toe-heel / heel-ankle phases.
    pub phase_peaks_n: [f64; 3],
    /// Ticks attributed to each phase; partitions the rollout.
    pub phase_ticks: [u64; 3],
}

/// Accumulates per-tick observations and judges the rollout at the end.
pub struct Judge {
    peaks: [f64; 3],
    ticks: [u64; 3],
    hold_streak: usize,
    saw_nan: bool,
}

/// Progress fractions splitting the toe / toe-heel / heel-ankle phases.
pub const PHASE_SPLITS: [f64; 2] = [0.30, 0.70];
/// Required mouth progress fraction at the ankle.
pub const ANKLE_FRACTION: f64 = 0.92;
/// Toe-region radius around the toe point for the sock's closed end.
pub const TOE_REGION: f64 = 0.62;

impl Default for Judge {
    fn default() -> Self {
        Self::new()
    }
}

impl Judge {
    pub fn new() -> Self {
        Judge {
            peaks: [0.0; 3],
            ticks: [0; 3],
            hold_streak: 0,
            saw_nan: false,
        }
    }

    /// Records one post-step observation.
    pub fn observe(&mut self, state: &SimState) {
        let (_, _, tactile) = state.proprioception();
        let t = tactile[0].max(tactile[1]);
        if !t.is_finite() {
            self.saw_nan = true;
            return;
        }
        let frac = state.progress_fraction();
        let phase = if frac < PHASE_SPLITS[0] {
            0
        } else if frac <= PHASE_SPLITS[1] {
            1
        } else {
            2
        };
        self.peaks[phase] = self.peaks[phase].max(t);
        self.ticks[phase] += 1;
        if Self::conditions_met(state) {
            self.hold_streak += 1;
        } else {
            self.hold_streak = 0;
        }
    }

    /// Success conditions at an instant: sock toe-end in the toe region,
    /// mouth progressed to the ankle, lips straddling the foot.
    pub fn conditions_met(state: &SimState) -> bool {
        let toe = state.foot.toe_point();
        let end = *state.sock.particles.last().expect("non-empty chain");
        let toe_dist = ((end[0] - toe[0]).powi(2) + (end[1] - toe[1]).powi(2)).sqrt();
        toe_dist <= TOE_REGION
            && state.progress_fraction() >= ANKLE_FRACTION
            && state.straddling()
    }

    /// Final verdict; success requires the conditions held for the last
    /// `HOLD_TICKS` ticks.
    pub fn finish(self, state: &SimState) -> PhaseReport {
        let success = !self.saw_nan && self.hold_streak >= HOLD_TICKS;
        let failure_reason = if success {
            None
        } else if self.saw_nan {
            Some(FailureReason::Nan)
        } else if !state.inserted {
            Some(FailureReason::Misalignment)
        } else if state.snag_ticks >= 30 {
            Some(FailureReason::Snag)
        } else {
            Some(FailureReason::Timeout)
        };
        PhaseReport {
            success,
            failure_reason,
            phase_peaks_n: self.peaks,
            phase_ticks: self.ticks,
        }
    }
}

/// Runs the scripted expert for `ticks`, returning the trajectory of sim
/// states (after each step) and the judged report.
pub fn run_expert(
    foot: &FootGeom,
    config: SimConfig,
    seed: u64,
    noise_sigma: f64,
    ticks: usize,
) -> (Vec<SimState>, PhaseReport) {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_50c4);
    let script = ExpertScript::new(foot, noise_sigma, &mut rng);
    let mut state = SimState::new(foot.clone(), config, seed);
    let mut judge = Judge::new();
    let mut states = Vec::with_capacity(ticks);
    for t in 0..ticks {
        let targets = script.targets(t, state.snagged);
        state.step(targets);
        judge.observe(&state);
        states.push(state.clone());
    }
    let report = judge.finish(&state);
    (states, report)
}
