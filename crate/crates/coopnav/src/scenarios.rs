//! Ground-truth generation, synthetic measurements, Monte-Carlo execution
//! and metrics.
//!
//! The headline experiments inject noise at step level, mirroring the
//! reference simulations: per-step displacement/heading errors are Gaussian,
//! range errors are heavy-tailed Cauchy, and the full pipeline
//! (synthesis → packets → network → fusion → corrections) runs as one
//! deterministic discrete-event loop per replica. The IMU-level gait
//! generator exists to exercise the inertial filter at unit level.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Cauchy, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deadreck::{AgentTrack, TrackState};
use crate::fusion::{
    AgentId, ConstraintParams, FootId, FusionCenter, FusionError, RangeSettings,
};
use crate::ins::{ImuSample, StepUpdate};
use crate::linalg::wrap_angle;
use crate::messaging::{
    decode_correction, decode_step, encode_correction, encode_step, ranging_schedule, CommAudit,
    Direction, NetworkConfig, NetworkSim, RangingSlot, CORRECTION_PACKET_BYTES, STEP_PACKET_BYTES,
};
use crate::GRAVITY;

fn randn(rng: &mut ChaCha12Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Scenario family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    StraightMarch,
    StaticTriangle,
}

/// Scenario configuration with the reference noise model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub n_agents: usize,
    /// Lateral separation between marching agents, m.
    pub agent_spacing_m: f64,
    /// Agent advance per step, m.
    pub step_length_m: f64,
    /// Steps per second per agent.
    pub step_rate_hz: f64,
    /// Steps per agent over the run.
    pub total_steps: usize,
    /// Standard deviation of the per-step displacement noise, m.
    pub sigma_dp_m: f64,
    /// Standard deviation of the per-step heading noise, rad.
    pub sigma_dpsi_rad: f64,
    /// Cauchy scale of the range errors, m.
    pub cauchy_scale_m: f64,
    /// Aggregate round-robin ranging rate, Hz.
    pub ranging_rate_hz: f64,
    pub seed: u64,
    /// Static-triangle side length, m.
    pub triangle_side_m: f64,
    /// Mobile-agent circle radius, m.
    pub circle_radius_m: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::StraightMarch,
            n_agents: 2,
            agent_spacing_m: 10.0,
            step_length_m: 1.0,
            step_rate_hz: 1.0,
            total_steps: 500,
            sigma_dp_m: 0.01,
            sigma_dpsi_rad: 0.2_f64.to_radians(),
            cauchy_scale_m: 1.0,
            ranging_rate_hz: 1.0,
            seed: 1,
            triangle_side_m: 20.0,
            circle_radius_m: 20.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("fusion failure: {0}")]
    Fusion(#[from] FusionError),
    #[error("dead reckoning failure: {0}")]
    DeadReck(#[from] crate::deadreck::DeadReckError),
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let positive = [
            ("agent_spacing_m", self.agent_spacing_m),
            ("step_length_m", self.step_length_m),
            ("step_rate_hz", self.step_rate_hz),
            ("ranging_rate_hz", self.ranging_rate_hz),
            ("triangle_side_m", self.triangle_side_m),
            ("circle_radius_m", self.circle_radius_m),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(ScenarioError::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("sigma_dp_m", self.sigma_dp_m),
            ("sigma_dpsi_rad", self.sigma_dpsi_rad),
            ("cauchy_scale_m", self.cauchy_scale_m),
        ] {
            if !(v >= 0.0) {
                return Err(ScenarioError::InvalidConfig(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if self.total_steps == 0 {
            return Err(ScenarioError::InvalidConfig("total_steps must be ≥ 1".into()));
        }
        match self.kind {
            ScenarioKind::StraightMarch => {
                if self.n_agents < 1 {
                    return Err(ScenarioError::InvalidConfig("n_agents must be ≥ 1".into()));
                }
            }
            ScenarioKind::StaticTriangle => {
                if self.n_agents < 4 {
                    return Err(ScenarioError::InvalidConfig(
                        "static-triangle needs ≥ 4 agents (3 static + 1 mobile)".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One true step event of one foot.
#[derive(Debug, Clone, Copy)]
pub struct TruthStep {
    pub t: f64,
    pub agent_idx: usize,
    /// 0 = left, 1 = right.
    pub foot_slot: usize,
    /// Per-foot step counter, starting at 1.
    pub foot_seq: u64,
    /// Foot position after the step.
    pub pos: Vector3<f64>,
    /// Foot heading after the step.
    pub heading: f64,
    /// True displacement in the pre-step local frame.
    pub dp_local: Vector3<f64>,
    /// True heading change.
    pub dpsi: f64,
}

/// Layout and initial pose of one agent's feet.
#[derive(Debug, Clone)]
pub struct AgentLayout {
    pub id: AgentId,
    pub feet: [FootId; 2],
    /// Initial (position, heading) per foot.
    pub init: [(Vector3<f64>, f64); 2],
}

/// Ground-truth trajectory at step resolution.
#[derive(Debug, Clone)]
pub struct TruthTrace {
    pub agents: Vec<AgentLayout>,
    /// Time-ordered step events.
    pub steps: Vec<TruthStep>,
    pub duration: f64,
    /// Steps per agent.
    pub steps_per_agent: usize,
}

impl TruthTrace {
    /// True device position (mid-feet point) of an agent at time `t`.
    pub fn device_position(&self, agent_idx: usize, t: f64) -> Vector3<f64> {
        let mut feet = [
            self.agents[agent_idx].init[0].0,
            self.agents[agent_idx].init[1].0,
        ];
        for s in &self.steps {
            if s.t > t {
                break;
            }
            if s.agent_idx == agent_idx {
                feet[s.foot_slot] = s.pos;
            }
        }
        0.5 * (feet[0] + feet[1])
    }

    /// True agent centroid right after agent-step `k` (1-based).
    pub fn centroid_after_step(&self, agent_idx: usize, k: usize) -> Vector3<f64> {
        let mut feet = [
            self.agents[agent_idx].init[0].0,
            self.agents[agent_idx].init[1].0,
        ];
        let mut count = 0;
        for s in &self.steps {
            if s.agent_idx == agent_idx {
                feet[s.foot_slot] = s.pos;
                count += 1;
                if count == k {
                    break;
                }
            }
        }
        0.5 * (feet[0] + feet[1])
    }
}

fn foot_ids(agent_idx: usize) -> [FootId; 2] {
    [FootId(2 * agent_idx as u16), FootId(2 * agent_idx as u16 + 1)]
}

/// N agents marching abreast in straight lines: 1 m steps at 1 Hz with
/// alternating feet. Both feet track the march line, so the true foot
/// separation never exceeds one step length.
pub fn gen_straight_march(cfg: &ScenarioConfig) -> Result<TruthTrace, ScenarioError> {
    cfg.validate()?;
    if cfg.kind != ScenarioKind::StraightMarch {
        return Err(ScenarioError::InvalidConfig("kind must be straight-march".into()));
    }
    let dt = 1.0 / cfg.step_rate_hz;
    let l = cfg.step_length_m;
    let mut agents = Vec::new();
    let mut steps = Vec::new();
    for a in 0..cfg.n_agents {
        let y = cfg.agent_spacing_m * a as f64;
        agents.push(AgentLayout {
            id: AgentId(a as u16),
            feet: foot_ids(a),
            init: [
                (Vector3::new(0.0, y, 0.0), 0.0),
                (Vector3::new(-l, y, 0.0), 0.0),
            ],
        });
    }
    for k in 1..=cfg.total_steps {
        let t = k as f64 * dt;
        // Feet alternate: slot 0 on odd agent-steps, slot 1 on even.
        let slot = if k % 2 == 1 { 1 } else { 0 };
        for a in 0..cfg.n_agents {
            let y = cfg.agent_spacing_m * a as f64;
            // The stepping foot lands at the agent's new line position.
            let pos = Vector3::new(k as f64 * l, y, 0.0);
            let prev = if k <= 2 {
                agents[a].init[slot].0
            } else {
                Vector3::new((k - 2) as f64 * l, y, 0.0)
            };
            steps.push(TruthStep {
                t,
                agent_idx: a,
                foot_slot: slot,
                foot_seq: ((k + 1) / 2) as u64,
                pos,
                heading: 0.0,
                dp_local: pos - prev,
                dpsi: 0.0,
            });
        }
    }
    steps.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap().then(a.agent_idx.cmp(&b.agent_idx)));
    Ok(TruthTrace {
        agents,
        steps,
        duration: cfg.total_steps as f64 * dt,
        steps_per_agent: cfg.total_steps,
    })
}

/// Three static agents at the vertices of an equilateral triangle; the
/// remaining agents walk a circle around the centroid.
pub fn gen_static_triangle(cfg: &ScenarioConfig) -> Result<TruthTrace, ScenarioError> {
    cfg.validate()?;
    if cfg.kind != ScenarioKind::StaticTriangle {
        return Err(ScenarioError::InvalidConfig("kind must be static-triangle".into()));
    }
    let dt = 1.0 / cfg.step_rate_hz;
    let side = cfg.triangle_side_m;
    let verts = [
        Vector3::new(0.0, 0.0, 0.0),
        Vector3::new(side, 0.0, 0.0),
        Vector3::new(side / 2.0, side * 3.0_f64.sqrt() / 2.0, 0.0),
    ];
    // Config validation: non-collinear triangle.
    let ab = verts[1] - verts[0];
    let ac = verts[2] - verts[0];
    if ab.cross(&ac).norm() <= 1e-9 {
        return Err(ScenarioError::InvalidConfig("static agents are collinear".into()));
    }
    let centroid = (verts[0] + verts[1] + verts[2]) / 3.0;
    let radius = cfg.circle_radius_m;
    let dtheta = cfg.step_length_m / radius;

    let mut agents = Vec::new();
    let mut steps = Vec::new();
    for a in 0..cfg.n_agents {
        if a < 3 {
            agents.push(AgentLayout {
                id: AgentId(a as u16),
                feet: foot_ids(a),
                init: [(verts[a], 0.0), (verts[a], 0.0)],
            });
        } else {
            // Mobile agents start on the circle, heading tangential.
            let theta0 = 2.0 * std::f64::consts::PI * (a - 3) as f64 / 4.0;
            let pos0 = centroid + radius * Vector3::new(theta0.cos(), theta0.sin(), 0.0);
            let heading0 = theta0 + std::f64::consts::FRAC_PI_2;
            agents.push(AgentLayout {
                id: AgentId(a as u16),
                feet: foot_ids(a),
                init: [(pos0, wrap_angle(heading0)), (pos0, wrap_angle(heading0))],
            });
        }
    }

    for k in 1..=cfg.total_steps {
        let t = k as f64 * dt;
        let slot = if k % 2 == 1 { 1 } else { 0 };
        for a in 0..cfg.n_agents {
            if a < 3 {
                steps.push(TruthStep {
                    t,
                    agent_idx: a,
                    foot_slot: slot,
                    foot_seq: ((k + 1) / 2) as u64,
                    pos: verts[a],
                    heading: 0.0,
                    dp_local: Vector3::zeros(),
                    dpsi: 0.0,
                });
            } else {
                let theta0 = 2.0 * std::f64::consts::PI * (a - 3) as f64 / 4.0;
                let theta = theta0 + k as f64 * dtheta;
                let pos = centroid + radius * Vector3::new(theta.cos(), theta.sin(), 0.0);
                let heading = wrap_angle(theta + std::f64::consts::FRAC_PI_2);
                let prev_theta = theta0 + k.saturating_sub(2) as f64 * dtheta;
                let prev_pos = centroid + radius * Vector3::new(prev_theta.cos(), prev_theta.sin(), 0.0);
                let prev_heading = wrap_angle(prev_theta + std::f64::consts::FRAC_PI_2);
                // Local-frame displacement of this foot since its last step.
                let r = crate::deadreck::heading_rotation(prev_heading);
                steps.push(TruthStep {
                    t,
                    agent_idx: a,
                    foot_slot: slot,
                    foot_seq: ((k + 1) / 2) as u64,
                    pos,
                    heading,
                    dp_local: r.transpose() * (pos - prev_pos),
                    dpsi: wrap_angle(heading - prev_heading),
                });
            }
        }
    }
    steps.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap().then(a.agent_idx.cmp(&b.agent_idx)));
    Ok(TruthTrace {
        agents,
        steps,
        duration: cfg.total_steps as f64 * dt,
        steps_per_agent: cfg.total_steps,
    })
}

/// Generates the truth trace for a configuration.
pub fn generate_truth(cfg: &ScenarioConfig) -> Result<TruthTrace, ScenarioError> {
    match cfg.kind {
        ScenarioKind::StraightMarch => gen_straight_march(cfg),
        ScenarioKind::StaticTriangle => gen_static_triangle(cfg),
    }
}

/// One synthesized step: which foot, and the noisy update it reports.
#[derive(Debug, Clone)]
pub struct SynthStep {
    pub t: f64,
    pub agent_idx: usize,
    pub foot: FootId,
    pub update: StepUpdate,
}

/// Adds independent Gaussian noise to the true step increments; reported
/// covariances equal the generating noise covariances.
pub fn synth_step_updates(truth: &TruthTrace, cfg: &ScenarioConfig, seed: u64) -> Vec<SynthStep> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(truth.steps.len());
    for s in &truth.steps {
        let noise = Vector3::new(
            cfg.sigma_dp_m * randn(&mut rng),
            cfg.sigma_dp_m * randn(&mut rng),
            cfg.sigma_dp_m * randn(&mut rng),
        );
        let dpsi_noise: f64 = cfg.sigma_dpsi_rad * randn(&mut rng);
        let foot = truth.agents[s.agent_idx].feet[s.foot_slot];
        // Variance floors keep reported covariances meaningful when the
        // configured noise is zero.
        let var_p = (cfg.sigma_dp_m * cfg.sigma_dp_m).max(1e-12);
        let var_psi = (cfg.sigma_dpsi_rad * cfg.sigma_dpsi_rad).max(1e-12);
        out.push(SynthStep {
            t: s.t,
            agent_idx: s.agent_idx,
            foot,
            update: StepUpdate {
                seq: s.foot_seq,
                dp: s.dp_local + noise,
                dpsi: s.dpsi + dpsi_noise,
                p_p: Matrix3::identity() * var_p,
                p_ppsi: Vector3::zeros(),
                p_psipsi: var_psi,
                t_step: s.t,
            },
        });
    }
    out
}

/// One synthesized inter-agent range measurement.
#[derive(Debug, Clone, Copy)]
pub struct AgentRange {
    pub t: f64,
    pub a: AgentId,
    pub b: AgentId,
    pub r_tilde: f64,
}

/// True device ranges plus Cauchy-distributed errors, at the scheduled
/// round-robin slots.
pub fn synth_ranges(
    truth: &TruthTrace,
    cfg: &ScenarioConfig,
    slots: &[RangingSlot],
    seed: u64,
) -> Vec<AgentRange> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    slots
        .iter()
        .map(|slot| {
            let ia = truth.agents.iter().position(|a| a.id == slot.a).unwrap();
            let ib = truth.agents.iter().position(|a| a.id == slot.b).unwrap();
            let true_range =
                (truth.device_position(ia, slot.t) - truth.device_position(ib, slot.t)).norm();
            let err = if cfg.cauchy_scale_m > 0.0 {
                Cauchy::new(0.0, cfg.cauchy_scale_m).unwrap().sample(&mut rng)
            } else {
                0.0
            };
            AgentRange {
                t: slot.t,
                a: slot.a,
                b: slot.b,
                r_tilde: (true_range + err).max(0.0),
            }
        })
        .collect()
}

/// Gait-synthesis parameters for the IMU-level generator.
#[derive(Debug, Clone, Copy)]
pub struct GaitParams {
    pub strides: usize,
    /// Forward displacement per stride, m.
    pub stride_len: f64,
    pub stance_s: f64,
    pub swing_s: f64,
    pub rate_hz: f64,
    pub accel_noise_std: f64,
    pub gyro_noise_std: f64,
    /// Initial standstill, seconds.
    pub lead_in_s: f64,
}

impl Default for GaitParams {
    fn default() -> Self {
        Self {
            strides: 10,
            stride_len: 1.0,
            stance_s: 0.4,
            swing_s: 0.6,
            rate_hz: 200.0,
            accel_noise_std: 0.02,
            gyro_noise_std: 0.002,
            lead_in_s: 1.0,
        }
    }
}

/// IMU stream plus ground truth from the gait generator.
#[derive(Debug, Clone)]
pub struct GaitTruth {
    pub samples: Vec<ImuSample>,
    /// True forward displacement per stride.
    pub stride_len: f64,
    pub strides: usize,
}

/// Piecewise-smooth synthetic gait: flat-footed stance phases under
/// gravity, swing phases with a sinusoidal forward acceleration profile
/// integrating exactly to the stride length and back to zero velocity.
pub fn synth_imu_gait(p: &GaitParams, seed: u64) -> GaitTruth {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dt = 1.0 / p.rate_hz;
    let mut samples = Vec::new();
    let mut t = 0.0;

    let push = |t: f64, a_fwd: f64, rng: &mut ChaCha12Rng, samples: &mut Vec<ImuSample>| {
        let nf = |rng: &mut ChaCha12Rng| p.accel_noise_std * randn(rng);
        let nw = |rng: &mut ChaCha12Rng| p.gyro_noise_std * randn(rng);
        samples.push(ImuSample {
            t,
            f: Vector3::new(a_fwd + nf(rng), nf(rng), GRAVITY + nf(rng)),
            w: Vector3::new(nw(rng), nw(rng), nw(rng)),
        });
    };

    let lead_samples = (p.lead_in_s * p.rate_hz).round() as usize;
    for _ in 0..lead_samples {
        push(t, 0.0, &mut rng, &mut samples);
        t += dt;
    }
    let swing_samples = (p.swing_s * p.rate_hz).round() as usize;
    let stance_samples = (p.stance_s * p.rate_hz).round() as usize;
    let amp = 2.0 * std::f64::consts::PI * p.stride_len / (p.swing_s * p.swing_s);
    for _ in 0..p.strides {
        for k in 0..swing_samples {
            let tau = k as f64 * dt;
            let a = amp * (2.0 * std::f64::consts::PI * tau / p.swing_s).sin();
            push(t, a, &mut rng, &mut samples);
            t += dt;
        }
        for _ in 0..stance_samples {
            push(t, 0.0, &mut rng, &mut samples);
            t += dt;
        }
    }
    GaitTruth {
        samples,
        stride_len: p.stride_len,
        strides: p.strides,
    }
}

/// Full pipeline configuration: scenario, estimator and network settings.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub scenario: ScenarioConfig,
    pub constraint: ConstraintParams,
    pub ranging: RangeSettings,
    pub network: NetworkConfig,
}

/// Outcome of one pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineResult {
    /// Per-agent, per-step central-estimate centroid error vectors.
    pub errors: Vec<Vec<Vector3<f64>>>,
    /// Distance axis: step index × step length.
    pub distance: Vec<f64>,
    pub audit: CommAudit,
    /// Range measurements rejected as irreconcilable outliers.
    pub rejected_ranges: usize,
    /// Final corrected agent-side estimates per foot.
    pub agent_estimates: BTreeMap<u16, TrackState>,
    /// Final central estimates per foot.
    pub central_estimates: BTreeMap<u16, TrackState>,
}

#[derive(Clone)]
enum NetMsg {
    Step(crate::messaging::StepPacket),
    Correction(crate::messaging::CorrectionPacket),
    Range { a: AgentId, b: AgentId, r: f64, t: f64 },
}

/// Runs the full decentralized pipeline once: synthesizes measurements,
/// pushes them through the packet codecs and the simulated network, drives
/// the fusion center and the agent-side tracks, and collects errors.
pub fn run_pipeline(pc: &PipelineConfig, run_seed: u64) -> Result<PipelineResult, ScenarioError> {
    pc.scenario.validate()?;
    let truth = generate_truth(&pc.scenario)?;
    let steps = synth_step_updates(&truth, &pc.scenario, run_seed.wrapping_mul(2).wrapping_add(1));
    let agent_ids: Vec<AgentId> = truth.agents.iter().map(|a| a.id).collect();
    let ranges = if truth.agents.len() >= 2 {
        let slots = ranging_schedule(&agent_ids, pc.scenario.ranging_rate_hz, truth.duration);
        synth_ranges(&truth, &pc.scenario, &slots, run_seed.wrapping_mul(2))
    } else {
        Vec::new()
    };

    // Fusion center and agent-side tracks initialized at the truth.
    let center_init: Vec<(AgentId, [(FootId, TrackState); 2])> = truth
        .agents
        .iter()
        .map(|a| {
            (
                a.id,
                [
                    (a.feet[0], TrackState::new(a.init[0].0, a.init[0].1)),
                    (a.feet[1], TrackState::new(a.init[1].0, a.init[1].1)),
                ],
            )
        })
        .collect();
    let mut center = FusionCenter::new(&center_init, pc.constraint, pc.ranging.build());
    let mut agents: BTreeMap<u16, AgentTrack> = truth
        .agents
        .iter()
        .flat_map(|a| {
            [
                (a.feet[0].0, AgentTrack::new(TrackState::new(a.init[0].0, a.init[0].1), 4096)),
                (a.feet[1].0, AgentTrack::new(TrackState::new(a.init[1].0, a.init[1].1), 4096)),
            ]
        })
        .collect();
    let foot_agent: BTreeMap<u16, AgentId> = truth
        .agents
        .iter()
        .flat_map(|a| [(a.feet[0].0, a.id), (a.feet[1].0, a.id)])
        .collect();

    let mut net: NetworkSim<NetMsg> = NetworkSim::new(pc.network.clone());
    let mut audit = CommAudit::default();
    audit.record_baseline(200.0, truth.duration, 2 * truth.agents.len());
    let mut reorder: BTreeMap<u16, BTreeMap<u64, StepUpdate>> = BTreeMap::new();
    let mut rejected_ranges = 0usize;

    let mut errors: Vec<Vec<Vector3<f64>>> =
        vec![Vec::with_capacity(truth.steps_per_agent); truth.agents.len()];
    let mut distance = Vec::with_capacity(truth.steps_per_agent);

    // Merge step events and ranging slots into one time-ordered loop.
    let mut si = 0usize;
    let mut ri = 0usize;
    let mut agent_step_count = vec![0usize; truth.agents.len()];

    let process_due = |net: &mut NetworkSim<NetMsg>,
                           center: &mut FusionCenter,
                           agents: &mut BTreeMap<u16, AgentTrack>,
                           reorder: &mut BTreeMap<u16, BTreeMap<u64, StepUpdate>>,
                           audit: &mut CommAudit,
                           rejected: &mut usize,
                           t: f64|
     -> Result<(), ScenarioError> {
        // Keep polling until quiescent: deliveries can trigger replies that
        // are themselves due at the same instant.
        loop {
            let due = net.poll(t);
            if due.is_empty() {
                break;
            }
            for (t_arrival, _link, msg) in due {
                match msg {
                    NetMsg::Step(packet) => {
                        let update = decode_step(&packet);
                        let foot = packet.foot;
                        reorder.entry(foot.0).or_default().insert(update.seq, update);
                        // Ingest the contiguous prefix.
                        loop {
                            let next_seq = {
                                let buffered = reorder.get_mut(&foot.0).unwrap();
                                let Some((&seq, _)) = buffered.iter().next() else {
                                    break;
                                };
                                seq
                            };
                            let expected = expected_seq(center, foot);
                            if next_seq != expected {
                                break;
                            }
                            let u = reorder.get_mut(&foot.0).unwrap().remove(&next_seq).unwrap();
                            let corr = center.ingest_step(foot, &u)?;
                            let agent = foot_agent[&foot.0];
                            let cpkt = encode_correction(foot, &corr);
                            audit.record_correction_packet(agent);
                            net.submit(
                                (agent, Direction::Down),
                                NetMsg::Correction(cpkt),
                                t_arrival,
                                CORRECTION_PACKET_BYTES,
                            );
                        }
                    }
                    NetMsg::Correction(packet) => {
                        let c = decode_correction(&packet);
                        if let Some(track) = agents.get_mut(&packet.foot.0) {
                            // Stale corrections (older than the retained
                            // history) are superseded and ignorable.
                            match track.accept_correction(c) {
                                Ok(()) => {}
                                Err(crate::deadreck::DeadReckError::HistoryExpired(_)) => {}
                                Err(e) => return Err(e.into()),
                            }
                        }
                    }
                    NetMsg::Range { a, b, r, t: t_meas } => {
                        if !center.ingest_agent_range(a, b, r, t_meas)? {
                            *rejected += 1;
                        }
                    }
                }
            }
        }
        Ok(())
    };

    while si < steps.len() || ri < ranges.len() {
        let t_step = steps.get(si).map(|s| s.t).unwrap_or(f64::INFINITY);
        let t_range = ranges.get(ri).map(|r| r.t).unwrap_or(f64::INFINITY);
        // Steps processed before ranging at the same instant.
        if t_step <= t_range {
            let ev = &steps[si];
            si += 1;
            let agent = foot_agent[&ev.foot.0];
            // Agent-side dead reckoning on the full-precision update.
            agents.get_mut(&ev.foot.0).unwrap().step(&ev.update)?;
            // Uplink packet.
            let packet = encode_step(ev.foot, &ev.update);
            audit.record_step_packet(agent);
            net.submit((agent, Direction::Up), NetMsg::Step(packet), ev.t, STEP_PACKET_BYTES);
            process_due(
                &mut net, &mut center, &mut agents, &mut reorder, &mut audit,
                &mut rejected_ranges, ev.t,
            )?;

            // One agent-step completed for this agent: record errors once
            // every agent has finished that step index.
            agent_step_count[ev.agent_idx] += 1;
            let k = agent_step_count[ev.agent_idx];
            if truth
                .agents
                .iter()
                .enumerate()
                .all(|(i, _)| agent_step_count[i] >= k)
                && errors[0].len() < k
            {
                distance.push(k as f64 * pc.scenario.step_length_m);
                for (i, layout) in truth.agents.iter().enumerate() {
                    let est = 0.5
                        * (center.estimate().foot_position(layout.feet[0]).unwrap()
                            + center.estimate().foot_position(layout.feet[1]).unwrap());
                    let tru = truth.centroid_after_step(i, k);
                    errors[i].push(est - tru);
                }
            }
        } else {
            let ev = ranges[ri];
            ri += 1;
            net.submit(
                (ev.a, Direction::Up),
                NetMsg::Range { a: ev.a, b: ev.b, r: ev.r_tilde, t: ev.t },
                ev.t,
                0, // ranging traffic exists identically in both architectures
            );
            process_due(
                &mut net, &mut center, &mut agents, &mut reorder, &mut audit,
                &mut rejected_ranges, ev.t,
            )?;
        }
    }
    // Final drain for queued/latent messages.
    process_due(
        &mut net, &mut center, &mut agents, &mut reorder, &mut audit,
        &mut rejected_ranges, f64::INFINITY,
    )?;

    let agent_estimates = agents.iter().map(|(k, a)| (*k, a.estimate())).collect();
    let central_estimates = truth
        .agents
        .iter()
        .flat_map(|layout| {
            layout.feet.iter().map(|f| {
                let mut ts = TrackState::new(
                    center.estimate().foot_position(*f).unwrap(),
                    center.estimate().foot_heading(*f).unwrap(),
                );
                ts.p = nalgebra::SMatrix::from_fn(|i, j| {
                    center.estimate().foot_cov(*f).unwrap()[(i, j)]
                });
                (f.0, ts)
            })
        })
        .collect();

    Ok(PipelineResult {
        errors,
        distance,
        audit,
        rejected_ranges,
        agent_estimates,
        central_estimates,
    })
}

fn expected_seq(center: &FusionCenter, foot: FootId) -> u64 {
    center.baseline_seq(foot).map(|s| s + 1).unwrap_or(1)
}

/// Aggregated Monte-Carlo metrics.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub n_agents: usize,
    pub runs: usize,
    pub failed_runs: usize,
    /// Distance axis, m (step index × step length).
    pub distance: Vec<f64>,
    /// Absolute position RMSE over runs and agents, per distance.
    pub abs_rmse: Vec<f64>,
    /// Per-agent absolute RMSE, per distance.
    pub per_agent_abs_rmse: Vec<Vec<f64>>,
    /// Relative (pairwise-difference) RMSE, per distance; empty for N = 1.
    pub rel_rmse: Vec<f64>,
    /// Inter-agent error correlation per axis for the first agent pair,
    /// per distance; empty for N = 1.
    pub corr_xyz: Vec<[f64; 3]>,
    /// Final absolute RMSE.
    pub final_abs_rmse: f64,
    /// Mean communication-audit ratio over runs.
    pub audit_ratio: f64,
}

/// Runs independent replicas in parallel and aggregates RMSE, relative
/// RMSE and inter-agent error correlations. Failed runs are counted, not
/// silently dropped.
pub fn run_monte_carlo(pc: &PipelineConfig, runs: usize) -> Result<MetricsReport, ScenarioError> {
    assert!(runs >= 1);
    pc.scenario.validate()?;
    let results: Vec<Result<PipelineResult, ScenarioError>> = (0..runs)
        .into_par_iter()
        .map(|r| {
            run_pipeline(
                pc,
                pc.scenario
                    .seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add(r as u64),
            )
        })
        .collect();

    let mut ok: Vec<PipelineResult> = Vec::new();
    let mut failed = 0usize;
    for r in results {
        match r {
            Ok(p) => ok.push(p),
            Err(e) => {
                failed += 1;
                log::error!("monte-carlo replica failed: {e}");
            }
        }
    }
    if ok.is_empty() {
        return Err(ScenarioError::InvalidConfig(format!(
            "all {runs} replicas failed"
        )));
    }

    let n_agents = ok[0].errors.len();
    let n_steps = ok[0].errors[0].len();
    let distance = ok[0].distance.clone();

    let mut abs_rmse = Vec::with_capacity(n_steps);
    let mut per_agent_abs_rmse = vec![Vec::with_capacity(n_steps); n_agents];
    let mut rel_rmse = Vec::with_capacity(n_steps);
    let mut corr_xyz = Vec::with_capacity(n_steps);

    for k in 0..n_steps {
        let mut sq = 0.0;
        for a in 0..n_agents {
            let mut sq_a = 0.0;
            for run in &ok {
                sq_a += run.errors[a][k].norm_squared();
            }
            per_agent_abs_rmse[a].push((sq_a / ok.len() as f64).sqrt());
            sq += sq_a;
        }
        abs_rmse.push((sq / (ok.len() * n_agents) as f64).sqrt());

        if n_agents >= 2 {
            let mut sq_rel = 0.0;
            let mut pairs = 0usize;
            for a in 0..n_agents {
                for b in (a + 1)..n_agents {
                    for run in &ok {
                        sq_rel += (run.errors[a][k] - run.errors[b][k]).norm_squared();
                    }
                    pairs += 1;
                }
            }
            rel_rmse.push((sq_rel / (ok.len() * pairs) as f64).sqrt());
            corr_xyz.push(pearson_per_axis(&ok, 0, 1, k));
        }
    }

    let final_abs_rmse = *abs_rmse.last().unwrap();
    let audit_ratio =
        ok.iter().map(|r| r.audit.ratio()).sum::<f64>() / ok.len() as f64;

    Ok(MetricsReport {
        n_agents,
        runs,
        failed_runs: failed,
        distance,
        abs_rmse,
        per_agent_abs_rmse,
        rel_rmse,
        corr_xyz,
        final_abs_rmse,
        audit_ratio,
    })
}

fn pearson_per_axis(runs: &[PipelineResult], a: usize, b: usize, k: usize) -> [f64; 3] {
    let n = runs.len() as f64;
    let mut out = [0.0; 3];
    for axis in 0..3 {
        let xs: Vec<f64> = runs.iter().map(|r| r.errors[a][k][axis]).collect();
        let ys: Vec<f64> = runs.iter().map(|r| r.errors[b][k][axis]).collect();
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            cov += (x - mx) * (y - my);
            vx += (x - mx) * (x - mx);
            vy += (y - my) * (y - my);
        }
        out[axis] = if vx > 0.0 && vy > 0.0 {
            (cov / (vx * vy).sqrt()).clamp(-1.0, 1.0)
        } else {
            0.0
        };
    }
    out
}

/// Least-squares fit of `rmse(N) ≈ c/√N`; returns the coefficient and the
/// maximum relative residual.
pub fn fit_inverse_sqrt(points: &[(usize, f64)]) -> (f64, f64) {
    assert!(points.len() >= 2, "fit needs at least two points");
    let num: f64 = points.iter().map(|(n, y)| y / (*n as f64).sqrt()).sum();
    let den: f64 = points.iter().map(|(n, _)| 1.0 / *n as f64).sum();
    let c = num / den;
    let max_resid = points
        .iter()
        .map(|(n, y)| {
            let fit = c / (*n as f64).sqrt();
            ((y - fit) / fit).abs()
        })
        .fold(0.0, f64::max);
    (c, max_resid)
}
