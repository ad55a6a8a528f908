//! Packet codecs, simulated network, ranging scheduler and communication
//! audit for the three-tier architecture.
//!
//! # Wire format
//!
//! All integers are little-endian. Fixed-point values are `u16` codes over
//! documented ranges: a linear code maps `[lo, hi]` onto `0..=65535`; a log
//! code maps `[ln lo, ln hi]` linearly. Out-of-range payloads saturate with
//! a logged warning.
//!
//! `StepPacket`, 26 bytes — the 14 step values reduced to 8 by dropping the
//! position–heading cross covariance (reconstructed as zero) and the
//! off-diagonal position covariance:
//!
//! | offset | field    | encoding                     |
//! |--------|----------|------------------------------|
//! | 0      | foot id  | `u16`                        |
//! | 2      | seq      | `u32`                        |
//! | 6      | t_step   | `u32`, milliseconds          |
//! | 10     | dp_x     | `u16` linear over ±10 m      |
//! | 12     | dp_y     | `u16` linear over ±10 m      |
//! | 14     | dp_z     | `u16` linear over ±10 m      |
//! | 16     | dψ       | `u16` linear over ±π rad     |
//! | 18     | var p_x  | `u16` log over [1e-8, 1e2]   |
//! | 20     | var p_y  | `u16` log over [1e-8, 1e2]   |
//! | 22     | var p_z  | `u16` log over [1e-8, 1e2]   |
//! | 24     | var ψ    | `u16` log over [1e-8, 1e2]   |
//!
//! `CorrectionPacket`, 14 bytes — the 4 correction values:
//!
//! | offset | field    | encoding                     |
//! |--------|----------|------------------------------|
//! | 0      | foot id  | `u16`                        |
//! | 2      | seq      | `u32`                        |
//! | 6      | dx       | `u16` linear over ±512 m     |
//! | 8      | dy       | `u16` linear over ±512 m     |
//! | 10     | dz       | `u16` linear over ±512 m     |
//! | 12     | dχ       | `u16` linear over ±π rad     |
//!
//! Corrections are absolute-state replacement deltas and grow with mission
//! drift, hence the wider ±512 m range (7.8 mm half-step).

use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::deadreck::Correction;
use crate::fusion::{AgentId, FootId};
use crate::ins::StepUpdate;

/// Linear fixed-point range for step displacements, m.
pub const DP_RANGE: (f64, f64) = (-10.0, 10.0);
/// Linear fixed-point range for angles, rad.
pub const ANGLE_RANGE: (f64, f64) = (-std::f64::consts::PI, std::f64::consts::PI);
/// Log fixed-point range for variances.
pub const VAR_RANGE: (f64, f64) = (1e-8, 1e2);
/// Linear fixed-point range for correction deltas, m.
pub const CORR_RANGE: (f64, f64) = (-512.0, 512.0);

/// Size of an encoded step packet in bytes.
pub const STEP_PACKET_BYTES: usize = 26;
/// Size of an encoded correction packet in bytes.
pub const CORRECTION_PACKET_BYTES: usize = 14;

fn quant_linear(v: f64, lo: f64, hi: f64, what: &str) -> u16 {
    let clamped = if v < lo || v > hi {
        log::warn!("{what} = {v} outside [{lo}, {hi}], saturating");
        v.clamp(lo, hi)
    } else {
        v
    };
    ((clamped - lo) / (hi - lo) * 65535.0).round() as u16
}

fn dequant_linear(code: u16, lo: f64, hi: f64) -> f64 {
    lo + code as f64 * (hi - lo) / 65535.0
}

fn quant_log(v: f64, lo: f64, hi: f64, what: &str) -> u16 {
    let clamped = if v > hi {
        log::warn!("{what} = {v} above {hi}, saturating");
        hi
    } else {
        v.max(lo) // zero and sub-floor variances clamp silently to the floor
    };
    let (llo, lhi) = (lo.ln(), hi.ln());
    ((clamped.ln() - llo) / (lhi - llo) * 65535.0).round() as u16
}

fn dequant_log(code: u16, lo: f64, hi: f64) -> f64 {
    let (llo, lhi) = (lo.ln(), hi.ln());
    (llo + code as f64 * (lhi - llo) / 65535.0).exp()
}

/// Quantized step payload: the 8 values transmitted per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepPacket {
    pub foot: FootId,
    pub seq: u32,
    pub t_ms: u32,
    pub dp: [u16; 3],
    pub dpsi: u16,
    pub var_p: [u16; 3],
    pub var_psi: u16,
}

impl StepPacket {
    pub fn to_bytes(&self) -> [u8; STEP_PACKET_BYTES] {
        let mut b = [0u8; STEP_PACKET_BYTES];
        b[0..2].copy_from_slice(&self.foot.0.to_le_bytes());
        b[2..6].copy_from_slice(&self.seq.to_le_bytes());
        b[6..10].copy_from_slice(&self.t_ms.to_le_bytes());
        for i in 0..3 {
            b[10 + 2 * i..12 + 2 * i].copy_from_slice(&self.dp[i].to_le_bytes());
        }
        b[16..18].copy_from_slice(&self.dpsi.to_le_bytes());
        for i in 0..3 {
            b[18 + 2 * i..20 + 2 * i].copy_from_slice(&self.var_p[i].to_le_bytes());
        }
        b[24..26].copy_from_slice(&self.var_psi.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8; STEP_PACKET_BYTES]) -> Self {
        let u16_at = |o: usize| u16::from_le_bytes([b[o], b[o + 1]]);
        Self {
            foot: FootId(u16_at(0)),
            seq: u32::from_le_bytes([b[2], b[3], b[4], b[5]]),
            t_ms: u32::from_le_bytes([b[6], b[7], b[8], b[9]]),
            dp: [u16_at(10), u16_at(12), u16_at(14)],
            dpsi: u16_at(16),
            var_p: [u16_at(18), u16_at(20), u16_at(22)],
            var_psi: u16_at(24),
        }
    }
}

/// Encodes a step update, dropping the cross covariance and the position
/// covariance off-diagonals.
pub fn encode_step(foot: FootId, u: &StepUpdate) -> StepPacket {
    StepPacket {
        foot,
        seq: u.seq as u32,
        t_ms: (u.t_step * 1000.0).round().max(0.0) as u32,
        dp: [
            quant_linear(u.dp.x, DP_RANGE.0, DP_RANGE.1, "dp.x"),
            quant_linear(u.dp.y, DP_RANGE.0, DP_RANGE.1, "dp.y"),
            quant_linear(u.dp.z, DP_RANGE.0, DP_RANGE.1, "dp.z"),
        ],
        dpsi: quant_linear(u.dpsi, ANGLE_RANGE.0, ANGLE_RANGE.1, "dpsi"),
        var_p: [
            quant_log(u.p_p[(0, 0)], VAR_RANGE.0, VAR_RANGE.1, "var_px"),
            quant_log(u.p_p[(1, 1)], VAR_RANGE.0, VAR_RANGE.1, "var_py"),
            quant_log(u.p_p[(2, 2)], VAR_RANGE.0, VAR_RANGE.1, "var_pz"),
        ],
        var_psi: quant_log(u.p_psipsi, VAR_RANGE.0, VAR_RANGE.1, "var_psi"),
    }
}

/// Decodes a step packet; the dropped cross covariance is reconstructed as
/// zero and the position covariance as diagonal.
pub fn decode_step(p: &StepPacket) -> StepUpdate {
    let mut p_p = Matrix3::zeros();
    for i in 0..3 {
        p_p[(i, i)] = dequant_log(p.var_p[i], VAR_RANGE.0, VAR_RANGE.1);
    }
    StepUpdate {
        seq: p.seq as u64,
        dp: Vector3::new(
            dequant_linear(p.dp[0], DP_RANGE.0, DP_RANGE.1),
            dequant_linear(p.dp[1], DP_RANGE.0, DP_RANGE.1),
            dequant_linear(p.dp[2], DP_RANGE.0, DP_RANGE.1),
        ),
        dpsi: dequant_linear(p.dpsi, ANGLE_RANGE.0, ANGLE_RANGE.1),
        p_p,
        p_ppsi: Vector3::zeros(),
        p_psipsi: dequant_log(p.var_psi, VAR_RANGE.0, VAR_RANGE.1),
        t_step: p.t_ms as f64 / 1000.0,
    }
}

/// Quantized correction payload: the 4 values transmitted back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionPacket {
    pub foot: FootId,
    pub seq: u32,
    pub dx: [u16; 3],
    pub dchi: u16,
}

impl CorrectionPacket {
    pub fn to_bytes(&self) -> [u8; CORRECTION_PACKET_BYTES] {
        let mut b = [0u8; CORRECTION_PACKET_BYTES];
        b[0..2].copy_from_slice(&self.foot.0.to_le_bytes());
        b[2..6].copy_from_slice(&self.seq.to_le_bytes());
        for i in 0..3 {
            b[6 + 2 * i..8 + 2 * i].copy_from_slice(&self.dx[i].to_le_bytes());
        }
        b[12..14].copy_from_slice(&self.dchi.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8; CORRECTION_PACKET_BYTES]) -> Self {
        let u16_at = |o: usize| u16::from_le_bytes([b[o], b[o + 1]]);
        Self {
            foot: FootId(u16_at(0)),
            seq: u32::from_le_bytes([b[2], b[3], b[4], b[5]]),
            dx: [u16_at(6), u16_at(8), u16_at(10)],
            dchi: u16_at(12),
        }
    }
}

pub fn encode_correction(foot: FootId, c: &Correction) -> CorrectionPacket {
    CorrectionPacket {
        foot,
        seq: c.seq as u32,
        dx: [
            quant_linear(c.dx.x, CORR_RANGE.0, CORR_RANGE.1, "corr dx"),
            quant_linear(c.dx.y, CORR_RANGE.0, CORR_RANGE.1, "corr dy"),
            quant_linear(c.dx.z, CORR_RANGE.0, CORR_RANGE.1, "corr dz"),
        ],
        dchi: quant_linear(c.dchi, ANGLE_RANGE.0, ANGLE_RANGE.1, "corr dchi"),
    }
}

pub fn decode_correction(p: &CorrectionPacket) -> Correction {
    Correction {
        seq: p.seq as u64,
        dx: Vector3::new(
            dequant_linear(p.dx[0], CORR_RANGE.0, CORR_RANGE.1),
            dequant_linear(p.dx[1], CORR_RANGE.0, CORR_RANGE.1),
            dequant_linear(p.dx[2], CORR_RANGE.0, CORR_RANGE.1),
        ),
        dchi: dequant_linear(p.dchi, ANGLE_RANGE.0, ANGLE_RANGE.1),
        cov: None,
    }
}

/// Direction of a link relative to the fusion center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    /// Agent to fusion center.
    Up,
    /// Fusion center to agent.
    Down,
}

/// One simulated link endpoint.
pub type Link = (AgentId, Direction);

/// Delivery latency model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum Latency {
    None,
    Fixed(f64),
    Uniform { lo: f64, hi: f64 },
}

impl Default for Latency {
    fn default() -> Self {
        Latency::None
    }
}

/// Simulated network configuration.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct NetworkConfig {
    /// Drop probability applied to every link unless overridden.
    pub drop_prob: f64,
    /// Per-link overrides.
    pub link_drop: BTreeMap<(u16, Direction), f64>,
    /// Full-disconnect intervals `[start, end)` per agent, seconds.
    pub disconnects: BTreeMap<u16, Vec<(f64, f64)>>,
    /// Delivery latency distribution.
    pub latency: Latency,
    /// RNG seed for drops and latency draws.
    pub seed: u64,
}

impl NetworkConfig {
    fn drop_prob_for(&self, link: Link) -> f64 {
        *self
            .link_drop
            .get(&(link.0 .0, link.1))
            .unwrap_or(&self.drop_prob)
    }

    fn disconnected_at(&self, agent: AgentId, t: f64) -> bool {
        self.disconnects
            .get(&agent.0)
            .map(|iv| iv.iter().any(|(a, b)| t >= *a && t < *b))
            .unwrap_or(false)
    }

    fn reconnect_time(&self, agent: AgentId, t: f64) -> f64 {
        self.disconnects
            .get(&agent.0)
            .and_then(|iv| iv.iter().find(|(a, b)| t >= *a && t < *b).map(|(_, b)| *b))
            .unwrap_or(t)
    }
}

/// One delivery-trace record, exportable as JSON lines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeliveryEvent {
    pub t_submit: f64,
    pub t_deliver: f64,
    pub agent: u16,
    pub direction: Direction,
    pub bytes: usize,
    pub dropped: bool,
}

#[derive(Debug, Clone)]
struct Pending<M> {
    deliver_at: f64,
    order: u64,
    link: Link,
    msg: M,
}

impl<M> PartialEq for Pending<M> {
    fn eq(&self, other: &Self) -> bool {
        self.order == other.order
    }
}
impl<M> Eq for Pending<M> {}
impl<M> Ord for Pending<M> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Min-heap by (time, order).
        other
            .deliver_at
            .partial_cmp(&self.deliver_at)
            .unwrap()
            .then(other.order.cmp(&self.order))
    }
}
impl<M> PartialOrd for Pending<M> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Deterministic store-and-forward network simulation.
///
/// Messages submitted on a disconnected agent's link queue at the sender
/// and replay in order at reconnect; random drops lose messages for good.
/// Identical seeds produce identical delivery traces.
#[derive(Debug, Clone)]
pub struct NetworkSim<M> {
    cfg: NetworkConfig,
    rng: ChaCha12Rng,
    heap: BinaryHeap<Pending<M>>,
    backlog: BTreeMap<(u16, Direction), VecDeque<(f64, M, usize)>>,
    last_delivery: BTreeMap<(u16, Direction), f64>,
    next_order: u64,
    trace: Vec<DeliveryEvent>,
}

impl<M: Clone> NetworkSim<M> {
    pub fn new(cfg: NetworkConfig) -> Self {
        let rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        Self {
            cfg,
            rng,
            heap: BinaryHeap::new(),
            backlog: BTreeMap::new(),
            last_delivery: BTreeMap::new(),
            next_order: 0,
            trace: Vec::new(),
        }
    }

    fn draw_latency(&mut self) -> f64 {
        match self.cfg.latency {
            Latency::None => 0.0,
            Latency::Fixed(l) => l,
            Latency::Uniform { lo, hi } => self.rng.gen_range(lo..hi),
        }
    }

    /// Submits a message on a link at time `t`.
    pub fn submit(&mut self, link: Link, msg: M, t: f64, bytes: usize) {
        let dropped = self.rng.gen::<f64>() < self.cfg.drop_prob_for(link);
        if dropped {
            self.trace.push(DeliveryEvent {
                t_submit: t,
                t_deliver: f64::NAN,
                agent: link.0 .0,
                direction: link.1,
                bytes,
                dropped: true,
            });
            return;
        }
        if self.cfg.disconnected_at(link.0, t) {
            self.backlog
                .entry((link.0 .0, link.1))
                .or_default()
                .push_back((t, msg, bytes));
            return;
        }
        let latency = self.draw_latency();
        self.schedule(link, msg, t, t + latency, bytes);
    }

    fn schedule(&mut self, link: Link, msg: M, t_submit: f64, deliver_at: f64, bytes: usize) {
        // FIFO per link: delivery times never go backwards.
        let key = (link.0 .0, link.1);
        let monotone = self
            .last_delivery
            .get(&key)
            .map(|last| deliver_at.max(*last))
            .unwrap_or(deliver_at);
        self.last_delivery.insert(key, monotone);
        self.trace.push(DeliveryEvent {
            t_submit,
            t_deliver: monotone,
            agent: link.0 .0,
            direction: link.1,
            bytes,
            dropped: false,
        });
        self.heap.push(Pending {
            deliver_at: monotone,
            order: self.next_order,
            link,
            msg,
        });
        self.next_order += 1;
    }

    /// Releases queued backlog for agents whose disconnect ended at or
    /// before `t`, then returns every message due by `t`, in delivery
    /// order.
    pub fn poll(&mut self, t: f64) -> Vec<(f64, Link, M)> {
        // Replay backlog whose disconnect interval has ended.
        let keys: Vec<(u16, Direction)> = self.backlog.keys().copied().collect();
        for key in keys {
            let agent = AgentId(key.0);
            if self.cfg.disconnected_at(agent, t) {
                continue;
            }
            let Some(queue) = self.backlog.remove(&key) else {
                continue;
            };
            for (t_submit, msg, bytes) in queue {
                let reconnect = self.cfg.reconnect_time(agent, t_submit);
                let latency = self.draw_latency();
                self.schedule((agent, key.1), msg, t_submit, reconnect + latency, bytes);
            }
        }

        let mut out = Vec::new();
        while let Some(top) = self.heap.peek() {
            if top.deliver_at > t {
                break;
            }
            let p = self.heap.pop().unwrap();
            out.push((p.deliver_at, p.link, p.msg));
        }
        out
    }

    pub fn trace(&self) -> &[DeliveryEvent] {
        &self.trace
    }

    /// Serializes the delivery trace as JSON lines.
    pub fn trace_json_lines(&self) -> String {
        self.trace
            .iter()
            .map(|e| serde_json::to_string(e).unwrap())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// One scheduled ranging slot between two agents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangingSlot {
    pub a: AgentId,
    pub b: AgentId,
    pub t: f64,
}

/// Deterministic round-robin schedule over agent pairs at a total rate.
///
/// Slots are placed at `k / rate_total` starting one period in; the pair
/// sequence cycles lexicographically over all unordered pairs.
pub fn ranging_schedule(agents: &[AgentId], rate_total: f64, duration: f64) -> Vec<RangingSlot> {
    assert!(agents.len() >= 2, "ranging needs at least two agents");
    assert!(rate_total > 0.0);
    let mut pairs = Vec::new();
    for i in 0..agents.len() {
        for j in (i + 1)..agents.len() {
            pairs.push((agents[i], agents[j]));
        }
    }
    let period = 1.0 / rate_total;
    let slots = (duration / period).floor() as usize;
    (0..slots)
        .map(|k| {
            let (a, b) = pairs[k % pairs.len()];
            RangingSlot {
                a,
                b,
                t: (k + 1) as f64 * period,
            }
        })
        .collect()
}

/// Byte counters per link and tier plus the centralized baseline.
#[derive(Debug, Clone, Default, Serialize)]
pub struct CommAudit {
    /// Step-packet bytes per agent (foot to center tier).
    pub uplink_bytes: BTreeMap<u16, u64>,
    /// Correction bytes per agent (center to agent tier).
    pub downlink_bytes: BTreeMap<u16, u64>,
    /// Bytes the equivalent centralized system would have moved:
    /// 6 values × 2 bytes at the IMU rate for every foot.
    pub baseline_bytes: u64,
}

impl CommAudit {
    pub fn record_step_packet(&mut self, agent: AgentId) {
        *self.uplink_bytes.entry(agent.0).or_default() += STEP_PACKET_BYTES as u64;
    }

    pub fn record_correction_packet(&mut self, agent: AgentId) {
        *self.downlink_bytes.entry(agent.0).or_default() += CORRECTION_PACKET_BYTES as u64;
    }

    /// Accrues the centralized-baseline counter for a stretch of time.
    pub fn record_baseline(&mut self, f_imu: f64, duration_s: f64, n_feet: usize) {
        self.baseline_bytes += (6.0 * 2.0 * f_imu * duration_s * n_feet as f64).round() as u64;
    }

    pub fn decentralized_bytes(&self) -> u64 {
        self.uplink_bytes.values().sum::<u64>() + self.downlink_bytes.values().sum::<u64>()
    }

    /// Bandwidth-reduction ratio; infinite when nothing was transmitted.
    pub fn ratio(&self) -> f64 {
        let d = self.decentralized_bytes();
        if d == 0 {
            f64::INFINITY
        } else {
            self.baseline_bytes as f64 / d as f64
        }
    }

    pub fn report(&self) -> AuditReport {
        AuditReport {
            baseline_bytes: self.baseline_bytes,
            uplink_bytes: self.uplink_bytes.values().sum(),
            downlink_bytes: self.downlink_bytes.values().sum(),
            ratio: self.ratio(),
        }
    }
}

/// Summary of a communication audit.
#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub baseline_bytes: u64,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    /// `f64::INFINITY` for a degenerate (no traffic) run.
    pub ratio: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sample_step(dp: Vector3<f64>, dpsi: f64) -> StepUpdate {
        StepUpdate {
            seq: 12,
            dp,
            dpsi,
            p_p: Matrix3::from_diagonal(&Vector3::new(1e-4, 2e-4, 5e-5)),
            p_ppsi: Vector3::new(1e-6, -2e-6, 0.0),
            p_psipsi: 3e-5,
            t_step: 12.345,
        }
    }

    #[test]
    fn step_codec_error_bound() {
        let u = sample_step(Vector3::new(1.000, 0.0, 0.0), 0.3);
        let packet = encode_step(FootId(3), &u);
        let back = decode_step(&packet);
        // 16-bit over ±10 m.
        assert!((back.dp.x - 1.0).abs() <= 10.0 / 32768.0);
        assert_eq!(back.seq, u.seq);
        assert_abs_diff_eq!(back.t_step, u.t_step, epsilon = 1e-3);
        // Cross covariance dropped.
        assert_eq!(back.p_ppsi, Vector3::zeros());
    }

    #[test]
    fn step_codec_idempotent_after_first_quantization() {
        let u = sample_step(Vector3::new(0.987, -0.123, 0.004), -0.7);
        let once = decode_step(&encode_step(FootId(0), &u));
        let twice = decode_step(&encode_step(FootId(0), &once));
        assert_eq!(once.dp, twice.dp);
        assert_eq!(once.dpsi, twice.dpsi);
        assert_eq!(once.p_p, twice.p_p);
        assert_eq!(once.p_psipsi, twice.p_psipsi);
    }

    #[test]
    fn step_packet_bytes_roundtrip() {
        let u = sample_step(Vector3::new(0.5, 0.25, -0.125), 1.0);
        let p = encode_step(FootId(7), &u);
        let q = StepPacket::from_bytes(&p.to_bytes());
        assert_eq!(p, q);
        assert_eq!(p.to_bytes().len(), STEP_PACKET_BYTES);
    }

    #[test]
    fn saturation_clamps() {
        let u = sample_step(Vector3::new(25.0, 0.0, 0.0), 0.0);
        let back = decode_step(&encode_step(FootId(0), &u));
        assert_abs_diff_eq!(back.dp.x, 10.0, epsilon = 1e-9);
    }

    proptest! {
        /// Round-trip error bounded by the quantization step for every
        /// field, over random in-range payloads.
        #[test]
        fn codec_roundtrip_bounds(
            dx in -10.0..10.0f64,
            dy in -10.0..10.0f64,
            dz in -10.0..10.0f64,
            dpsi in -3.14..3.14f64,
            vp in 1e-7..10.0f64,
            vpsi in 1e-7..1.0f64,
        ) {
            let u = StepUpdate {
                seq: 1,
                dp: Vector3::new(dx, dy, dz),
                dpsi,
                p_p: Matrix3::from_diagonal(&Vector3::new(vp, vp * 0.5, vp * 2.0)),
                p_ppsi: Vector3::zeros(),
                p_psipsi: vpsi,
                t_step: 1.0,
            };
            let back = decode_step(&encode_step(FootId(0), &u));
            let dp_step = 20.0 / 65535.0;
            let ang_step = 2.0 * std::f64::consts::PI / 65535.0;
            prop_assert!((back.dp - u.dp).amax() <= dp_step);
            prop_assert!((back.dpsi - u.dpsi).abs() <= ang_step);
            // Log encoding: bounded relative error.
            let log_step = (1e2f64 / 1e-8).ln() / 65535.0;
            for i in 0..3 {
                let rel = (back.p_p[(i, i)].ln() - u.p_p[(i, i)].ln()).abs();
                prop_assert!(rel <= log_step);
            }
            prop_assert!((back.p_psipsi.ln() - u.p_psipsi.ln()).abs() <= log_step);
        }

        #[test]
        fn correction_codec_roundtrip(
            dx in -500.0..500.0f64,
            dy in -500.0..500.0f64,
            dz in -500.0..500.0f64,
            dchi in -3.14..3.14f64,
        ) {
            let c = Correction { seq: 9, dx: Vector3::new(dx, dy, dz), dchi, cov: None };
            let back = decode_correction(&CorrectionPacket::from_bytes(
                &encode_correction(FootId(1), &c).to_bytes(),
            ));
            let step = 1024.0 / 65535.0;
            prop_assert!((back.dx - c.dx).amax() <= step);
            prop_assert!((back.dchi - c.dchi).abs() <= 2.0 * std::f64::consts::PI / 65535.0);
        }
    }

    #[test]
    fn no_drops_delivers_in_order() {
        let mut net = NetworkSim::new(NetworkConfig::default());
        let link = (AgentId(0), Direction::Up);
        for k in 0..100 {
            net.submit(link, k, k as f64 * 0.1, 26);
        }
        let got = net.poll(100.0);
        assert_eq!(got.len(), 100);
        for (k, (_, _, msg)) in got.iter().enumerate() {
            assert_eq!(*msg, k);
        }
    }

    #[test]
    fn full_drop_isolates_link() {
        let mut cfg = NetworkConfig::default();
        cfg.link_drop.insert((0, Direction::Up), 1.0);
        let mut net = NetworkSim::new(cfg);
        for k in 0..50 {
            net.submit((AgentId(0), Direction::Up), k, k as f64, 26);
            net.submit((AgentId(1), Direction::Up), k, k as f64, 26);
        }
        let got = net.poll(100.0);
        assert_eq!(got.len(), 50);
        assert!(got.iter().all(|(_, link, _)| link.0 == AgentId(1)));
    }

    #[test]
    fn disconnect_queues_and_replays_in_order() {
        let mut cfg = NetworkConfig::default();
        cfg.disconnects.insert(0, vec![(10.0, 40.0)]);
        let mut net = NetworkSim::new(cfg);
        let link = (AgentId(0), Direction::Up);
        for k in 0..60 {
            net.submit(link, k, k as f64, 26);
        }
        // Nothing from the disconnect window arrives before reconnect.
        let before = net.poll(39.9);
        assert_eq!(before.len(), 10);
        let after = net.poll(60.0);
        assert_eq!(after.len(), 50);
        let seqs: Vec<i32> = after.iter().map(|(_, _, m)| *m).collect();
        let mut sorted = seqs.clone();
        sorted.sort();
        assert_eq!(seqs, sorted, "replay must preserve order");
        // Queued messages delivered at the reconnect time.
        assert!(after.iter().take(30).all(|(t, _, _)| (*t - 40.0).abs() < 1e-9));
    }

    #[test]
    fn identical_seeds_identical_traces() {
        let cfg = NetworkConfig {
            drop_prob: 0.3,
            latency: Latency::Uniform { lo: 0.01, hi: 0.2 },
            seed: 1234,
            ..NetworkConfig::default()
        };
        let run = |cfg: NetworkConfig| {
            let mut net = NetworkSim::new(cfg);
            for k in 0..200 {
                net.submit((AgentId(k % 3), Direction::Up), k, k as f64 * 0.05, 26);
            }
            net.poll(100.0);
            net.trace_json_lines()
        };
        assert_eq!(run(cfg.clone()), run(cfg));
    }

    #[test]
    fn schedule_two_agents() {
        let agents = [AgentId(0), AgentId(1)];
        let slots = ranging_schedule(&agents, 1.0, 10.0);
        assert_eq!(slots.len(), 10);
        assert!(slots.iter().all(|s| s.a == AgentId(0) && s.b == AgentId(1)));
    }

    #[test]
    fn schedule_three_agents_round_robin() {
        let agents = [AgentId(1), AgentId(2), AgentId(3)];
        let slots = ranging_schedule(&agents, 1.0, 3.0);
        assert_eq!(slots.len(), 3);
        assert_eq!((slots[0].a, slots[0].b), (AgentId(1), AgentId(2)));
        assert_eq!((slots[1].a, slots[1].b), (AgentId(1), AgentId(3)));
        assert_eq!((slots[2].a, slots[2].b), (AgentId(2), AgentId(3)));
    }

    #[test]
    fn schedule_covers_every_pair_once() {
        for n in 2..8u16 {
            let agents: Vec<AgentId> = (0..n).map(AgentId).collect();
            let pairs = (n as usize * (n as usize - 1)) / 2;
            let slots = ranging_schedule(&agents, 1.0, pairs as f64);
            assert_eq!(slots.len(), pairs);
            let mut seen = std::collections::BTreeSet::new();
            for s in &slots {
                assert!(seen.insert((s.a, s.b)), "pair repeated within a cycle");
            }
            assert_eq!(seen.len(), pairs);
        }
    }

    #[test]
    fn audit_ratio_example() {
        let mut audit = CommAudit::default();
        // 600 s march, one agent, two feet, 200 Hz IMU, one step per second
        // alternating feet (f_sw ≈ 1 Hz per agent).
        audit.record_baseline(200.0, 600.0, 2);
        for _ in 0..600 {
            audit.record_step_packet(AgentId(0));
            audit.record_correction_packet(AgentId(0));
        }
        let r = audit.ratio();
        assert!(r >= 50.0 && r <= 200.0, "ratio {r}");
    }

    #[test]
    fn audit_doubling_imu_rate_doubles_ratio() {
        let mut a = CommAudit::default();
        a.record_baseline(200.0, 100.0, 2);
        a.record_step_packet(AgentId(0));
        let mut b = CommAudit::default();
        b.record_baseline(400.0, 100.0, 2);
        b.record_step_packet(AgentId(0));
        assert_abs_diff_eq!(b.ratio() / a.ratio(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn audit_degenerate_run_is_infinite() {
        let mut audit = CommAudit::default();
        audit.record_baseline(200.0, 10.0, 2);
        assert!(audit.ratio().is_infinite());
    }
}
