//! Packet path through a flannel-style node, in simulation.
//!
//! Egress packets leave the pod on `eth0`, cross the veth pair into the
//! `cni0` bridge, pass the mangle/PREROUTING mark point, get VXLAN-encapsulated
//! by `flannel.0`, and leave through the physical interface where the 5G
//! emulator classifies them by fwmark. The mark lives beside the packet, never
//! in its bytes, so encapsulation carries it through untouched.

use std::collections::BTreeMap;
use std::fmt;
use std::net::{IpAddr, Ipv4Addr};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::enforce::MarkRuleSpec;
use crate::nef::{Classification, Delivery, EmulatorClient, EmulatorError, TransmitRequest};

pub const VXLAN_UDP_PORT: u16 = 8472;
pub const VXLAN_VNI: u32 = 1;
const OUTER_SRC: Ipv4Addr = Ipv4Addr::new(192, 168, 50, 10);
const OUTER_DST: Ipv4Addr = Ipv4Addr::new(192, 168, 50, 1);
const INNER_SRC_MAC: [u8; 6] = [0x02, 0x42, 0x0a, 0xf4, 0x01, 0x01];
const INNER_DST_MAC: [u8; 6] = [0x02, 0x42, 0x0a, 0xf4, 0x02, 0x01];
/// IANA "use for experimentation" protocol number for the inner packet.
const INNER_PROTO: u8 = 253;

pub const IPV4_HEADER_LEN: usize = 20;
pub const UDP_HEADER_LEN: usize = 8;
pub const VXLAN_HEADER_LEN: usize = 8;
pub const ETHERNET_HEADER_LEN: usize = 14;
/// Bytes in front of the inner IP packet once encapsulated.
pub const ENCAP_OVERHEAD: usize = IPV4_HEADER_LEN + UDP_HEADER_LEN + VXLAN_HEADER_LEN + ETHERNET_HEADER_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OuterHeader {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub vni: u32,
}

impl Default for OuterHeader {
    fn default() -> Self {
        Self {
            src: OUTER_SRC,
            dst: OUTER_DST,
            src_port: 40000,
            dst_port: VXLAN_UDP_PORT,
            vni: VXLAN_VNI,
        }
    }
}

/// A packet plus the kernel-side metadata that travels with it.
///
/// Before encapsulation `payload` is the inner packet's L4 payload. After
/// encapsulation it is the full inner Ethernet frame, which embeds the
/// original overlay packet byte for byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimPacket {
    pub payload: Vec<u8>,
    pub overlay_src: Ipv4Addr,
    pub overlay_dst: Ipv4Addr,
    /// fwmark. Not part of the wire bytes.
    pub mark: u32,
    pub outer: Option<OuterHeader>,
}

impl SimPacket {
    pub fn new(overlay_src: Ipv4Addr, overlay_dst: Ipv4Addr, payload: Vec<u8>) -> Self {
        Self {
            payload,
            overlay_src,
            overlay_dst,
            mark: 0,
            outer: None,
        }
    }

    pub fn is_encapsulated(&self) -> bool {
        self.outer.is_some()
    }

    /// Serialized bytes as they would appear on the wire at the current hop.
    pub fn wire_bytes(&self) -> Vec<u8> {
        match &self.outer {
            None => ipv4_packet(self.overlay_src, self.overlay_dst, INNER_PROTO, &self.payload),
            Some(outer) => {
                let mut udp_payload = Vec::with_capacity(VXLAN_HEADER_LEN + self.payload.len());
                udp_payload.extend_from_slice(&[0x08, 0, 0, 0]);
                udp_payload.extend_from_slice(&(outer.vni << 8).to_be_bytes());
                udp_payload.extend_from_slice(&self.payload);
                let mut udp = Vec::with_capacity(UDP_HEADER_LEN + udp_payload.len());
                udp.extend_from_slice(&outer.src_port.to_be_bytes());
                udp.extend_from_slice(&outer.dst_port.to_be_bytes());
                udp.extend_from_slice(&((UDP_HEADER_LEN + udp_payload.len()) as u16).to_be_bytes());
                udp.extend_from_slice(&[0, 0]);
                udp.extend_from_slice(&udp_payload);
                ipv4_packet(outer.src, outer.dst, 17, &udp)
            }
        }
    }

    fn encapsulate(&mut self) {
        if self.outer.is_some() {
            return;
        }
        let inner = self.wire_bytes();
        let mut frame = Vec::with_capacity(ETHERNET_HEADER_LEN + inner.len());
        frame.extend_from_slice(&INNER_DST_MAC);
        frame.extend_from_slice(&INNER_SRC_MAC);
        frame.extend_from_slice(&0x0800u16.to_be_bytes());
        frame.extend_from_slice(&inner);
        self.payload = frame;
        self.outer = Some(OuterHeader::default());
    }

    fn decapsulate(&mut self) {
        if self.outer.take().is_some() {
            let inner = self.payload.split_off(ETHERNET_HEADER_LEN);
            self.payload = inner[IPV4_HEADER_LEN..].to_vec();
        }
    }
}

fn ipv4_checksum(header: &[u8]) -> u16 {
    let mut sum: u32 = header
        .chunks(2)
        .map(|c| u32::from(u16::from_be_bytes([c[0], c[1]])))
        .sum();
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

fn ipv4_packet(src: Ipv4Addr, dst: Ipv4Addr, proto: u8, body: &[u8]) -> Vec<u8> {
    let total = (IPV4_HEADER_LEN + body.len()) as u16;
    let mut h = [0u8; IPV4_HEADER_LEN];
    h[0] = 0x45;
    h[2..4].copy_from_slice(&total.to_be_bytes());
    h[6] = 0x40; // DF
    h[8] = 64;
    h[9] = proto;
    h[12..16].copy_from_slice(&src.octets());
    h[16..20].copy_from_slice(&dst.octets());
    let csum = ipv4_checksum(&h);
    h[10..12].copy_from_slice(&csum.to_be_bytes());
    let mut out = Vec::with_capacity(total as usize);
    out.extend_from_slice(&h);
    out.extend_from_slice(body);
    out
}

/// Pulls the inner IP packet out of VXLAN-over-UDP wire bytes. Returns `None`
/// if the bytes are not such a packet.
pub fn inner_packet(wire: &[u8]) -> Option<&[u8]> {
    if wire.len() < ENCAP_OVERHEAD || wire[0] != 0x45 || wire[9] != 17 {
        return None;
    }
    let udp = &wire[IPV4_HEADER_LEN..];
    if u16::from_be_bytes([udp[2], udp[3]]) != VXLAN_UDP_PORT {
        return None;
    }
    let vxlan = &udp[UDP_HEADER_LEN..];
    if vxlan[0] & 0x08 == 0 {
        return None;
    }
    let frame = &vxlan[VXLAN_HEADER_LEN..];
    if frame[12..14] != [0x08, 0x00] {
        return None;
    }
    Some(&frame[ETHERNET_HEADER_LEN..])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Hop {
    PodEth0,
    Veth,
    Bridge,
    MarkPoint,
    VxlanDevice,
    PhysIf,
}

impl Hop {
    pub const EGRESS_ORDER: [Hop; 6] = [
        Hop::PodEth0,
        Hop::Veth,
        Hop::Bridge,
        Hop::MarkPoint,
        Hop::VxlanDevice,
        Hop::PhysIf,
    ];
}

impl fmt::Display for Hop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Hop::PodEth0 => "eth0",
            Hop::Veth => "veth",
            Hop::Bridge => "cni0",
            Hop::MarkPoint => "mangle/PREROUTING",
            Hop::VxlanDevice => "flannel.0",
            Hop::PhysIf => "phys",
        })
    }
}

/// What a packet looked like at one hop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopView {
    pub hop: Hop,
    pub mark: u32,
    pub encapsulated: bool,
}

/// The node's egress path and the mark rules installed at its mark point.
#[derive(Debug, Clone, Default)]
pub struct NodePath {
    pub rules: Vec<MarkRuleSpec>,
}

impl NodePath {
    pub fn new(rules: Vec<MarkRuleSpec>) -> Self {
        Self { rules }
    }

    pub fn hops(&self) -> &'static [Hop] {
        &Hop::EGRESS_ORDER
    }

    fn mark_at_prerouting(&self, packet: &mut SimPacket) {
        let src = IpAddr::V4(packet.overlay_src);
        for rule in self.rules.iter().filter(|r| r.source == src) {
            packet.mark = rule.apply_to(packet.mark);
        }
    }

    /// Egress traversal, recording the packet's view at each hop.
    pub fn traverse_traced(&self, mut packet: SimPacket) -> (SimPacket, Vec<HopView>) {
        let mut trace = Vec::with_capacity(Hop::EGRESS_ORDER.len());
        for hop in Hop::EGRESS_ORDER {
            match hop {
                Hop::MarkPoint => self.mark_at_prerouting(&mut packet),
                Hop::VxlanDevice => packet.encapsulate(),
                Hop::PodEth0 | Hop::Veth | Hop::Bridge | Hop::PhysIf => {}
            }
            trace.push(HopView {
                hop,
                mark: packet.mark,
                encapsulated: packet.is_encapsulated(),
            });
        }
        (packet, trace)
    }

    pub fn traverse(&self, packet: SimPacket) -> SimPacket {
        self.traverse_traced(packet).0
    }

    /// Reverse direction: an encapsulated packet arriving on the physical
    /// interface for a local pod. It passes PREROUTING like any other packet,
    /// but the rules only match pod-sourced traffic.
    pub fn ingress(&self, mut packet: SimPacket) -> SimPacket {
        self.mark_at_prerouting(&mut packet);
        packet.decapsulate();
        packet
    }
}

/// A packet after the node path and the emulated network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EndToEnd {
    pub packet: SimPacket,
    pub delivery: Delivery,
}

/// Traverses the node, then classifies by mark and transmits through the
/// matching flow.
pub fn end_to_end(
    packet: SimPacket,
    send_time: Duration,
    path: &NodePath,
    emulator: &dyn EmulatorClient,
) -> Result<EndToEnd, EmulatorError> {
    let packet = path.traverse(packet);
    let class = emulator.classify(packet.mark)?;
    let flow = match class {
        Classification::Flow(f) => Some(f),
        Classification::Default => None,
    };
    let delivery = emulator.transmit(&TransmitRequest {
        send_time_ns: send_time.as_nanos() as u64,
        size_bytes: packet.wire_bytes().len() as u32,
        flow,
        mark: packet.mark,
    })?;
    Ok(EndToEnd { packet, delivery })
}

/// A pod taking part in an experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentPod {
    pub name: String,
    pub ip: Ipv4Addr,
}

/// Seeded traffic schedule: each pod sends one packet per `interval`, offset
/// by a uniform jitter in `[0, jitter)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub seed: u64,
    pub interval: Duration,
    pub jitter: Duration,
    pub payload_bytes: usize,
    pub destination: Ipv4Addr,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            seed: 1,
            interval: Duration::from_millis(1),
            jitter: Duration::from_micros(500),
            payload_bytes: 256,
            destination: Ipv4Addr::new(10, 244, 0, 1),
        }
    }
}

/// One packet's fate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub pod: usize,
    pub size_bytes: u32,
    pub class: Classification,
    pub send_ns: u64,
    pub departure_ns: u64,
    pub arrival_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PodStats {
    pub name: String,
    pub packets: usize,
    pub classes: BTreeMap<String, usize>,
    pub mean_latency_ns: f64,
    pub mean_queueing_ns: f64,
    pub p50_ns: u64,
    pub p95_ns: u64,
    pub p99_ns: u64,
    pub max_ns: u64,
}

impl PodStats {
    pub fn mean_latency_ms(&self) -> f64 {
        self.mean_latency_ns / 1e6
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub pods: Vec<PodStats>,
    pub records: Vec<PacketRecord>,
}

fn class_label(c: &Classification) -> String {
    match c {
        Classification::Default => "default".to_string(),
        Classification::Flow(f) => f.to_string(),
    }
}

fn nearest_rank(sorted: &[u64], pct: u64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = (pct as usize * sorted.len()).div_ceil(100).max(1);
    sorted[rank - 1]
}

impl ExperimentReport {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn pod(&self, name: &str) -> Option<&PodStats> {
        self.pods.iter().find(|p| p.name == name)
    }

    pub fn render_text(&self) -> String {
        let mut out = format!(
            "{:<16} {:>8} {:>12} {:>12} {:>12} {:>12} {:>12}  classes\n",
            "pod", "packets", "mean_ms", "p50_ms", "p95_ms", "p99_ms", "queue_ms"
        );
        for p in &self.pods {
            let classes: Vec<String> = p.classes.iter().map(|(k, v)| format!("{k}={v}")).collect();
            out.push_str(&format!(
                "{:<16} {:>8} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>12.6}  {}\n",
                p.name,
                p.packets,
                p.mean_latency_ns / 1e6,
                p.p50_ns as f64 / 1e6,
                p.p95_ns as f64 / 1e6,
                p.p99_ns as f64 / 1e6,
                p.mean_queueing_ns / 1e6,
                classes.join(",")
            ));
        }
        out
    }

    /// Tab-separated, one row per pod, header first.
    pub fn render_machine(&self) -> String {
        let mut out = String::from("pod\tpackets\tmean_ns\tp50_ns\tp95_ns\tp99_ns\tmax_ns\tmean_queue_ns\tclasses\n");
        for p in &self.pods {
            let classes: Vec<String> = p.classes.iter().map(|(k, v)| format!("{k}={v}")).collect();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                p.name,
                p.packets,
                p.mean_latency_ns,
                p.p50_ns,
                p.p95_ns,
                p.p99_ns,
                p.max_ns,
                p.mean_queueing_ns,
                classes.join(",")
            ));
        }
        out
    }
}

/// Send times for every packet, globally ordered by (time, pod).
pub fn build_schedule(pods: usize, packets_per_pod: usize, schedule: &Schedule) -> Vec<(Duration, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let jitter_ns = schedule.jitter.as_nanos() as u64;
    let mut sends = Vec::with_capacity(pods * packets_per_pod);
    for pod in 0..pods {
        for k in 0..packets_per_pod {
            let jitter = if jitter_ns == 0 { 0 } else { rng.random_range(0..jitter_ns) };
            sends.push((schedule.interval * k as u32 + Duration::from_nanos(jitter), pod));
        }
    }
    sends.sort();
    sends
}

/// Drives every pod's traffic through the node path and the emulator and
/// summarizes delivered latency per pod.
pub fn run_priority_experiment(
    pods: &[ExperimentPod],
    packets_per_pod: usize,
    schedule: &Schedule,
    path: &NodePath,
    emulator: &dyn EmulatorClient,
) -> Result<ExperimentReport, EmulatorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ 0x5eed);
    let mut records = Vec::with_capacity(pods.len() * packets_per_pod);
    for (send, pod) in build_schedule(pods.len(), packets_per_pod, schedule) {
        let mut payload = vec![0u8; schedule.payload_bytes];
        rng.fill(&mut payload[..]);
        let packet = SimPacket::new(pods[pod].ip, schedule.destination, payload);
        let out = end_to_end(packet, send, path, emulator)?;
        records.push(PacketRecord {
            pod,
            size_bytes: out.packet.wire_bytes().len() as u32,
            class: out.delivery.class,
            send_ns: out.delivery.send_time_ns,
            departure_ns: out.delivery.departure_ns,
            arrival_ns: out.delivery.arrival_ns,
        });
    }
    let stats = pods
        .iter()
        .enumerate()
        .map(|(idx, pod)| {
            let mine: Vec<&PacketRecord> = records.iter().filter(|r| r.pod == idx).collect();
            let mut latencies: Vec<u64> = mine.iter().map(|r| r.arrival_ns - r.send_ns).collect();
            latencies.sort_unstable();
            let n = mine.len();
            let mean = |sum: u128| if n == 0 { 0.0 } else { sum as f64 / n as f64 };
            let mut classes = BTreeMap::new();
            for r in &mine {
                *classes.entry(class_label(&r.class)).or_insert(0) += 1;
            }
            PodStats {
                name: pod.name.clone(),
                packets: n,
                classes,
                mean_latency_ns: mean(latencies.iter().map(|&l| l as u128).sum()),
                mean_queueing_ns: mean(mine.iter().map(|r| (r.departure_ns - r.send_ns) as u128).sum()),
                p50_ns: nearest_rank(&latencies, 50),
                p95_ns: nearest_rank(&latencies, 95),
                p99_ns: nearest_rank(&latencies, 99),
                max_ns: latencies.last().copied().unwrap_or(0),
            }
        })
        .collect();
    Ok(ExperimentReport { pods: stats, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pod_ip() -> Ipv4Addr {
        Ipv4Addr::new(10, 244, 1, 5)
    }

    fn rule(mark: u32, mask: u32) -> MarkRuleSpec {
        MarkRuleSpec {
            source: IpAddr::V4(pod_ip()),
            mark,
            mask,
        }
    }

    #[test]
    fn matched_source_is_marked_and_encapsulated() {
        let path = NodePath::new(vec![rule(0x2000, 0xE000)]);
        let pkt = SimPacket::new(pod_ip(), Ipv4Addr::new(10, 244, 2, 9), b"hello".to_vec());
        let before = pkt.wire_bytes();
        let (out, trace) = path.traverse_traced(pkt);
        assert_eq!(out.mark, 0x2000);
        assert!(out.is_encapsulated());
        assert_eq!(inner_packet(&out.wire_bytes()), Some(&before[..]));
        let marks: Vec<u32> = trace.iter().map(|h| h.mark).collect();
        assert_eq!(marks, vec![0, 0, 0, 0x2000, 0x2000, 0x2000]);
        assert_eq!(out.wire_bytes().len(), before.len() + ENCAP_OVERHEAD);
    }

    #[test]
    fn unmatched_source_stays_unmarked() {
        let path = NodePath::new(vec![rule(0x2000, 0xE000)]);
        let pkt = SimPacket::new(Ipv4Addr::new(10, 244, 1, 6), Ipv4Addr::new(10, 244, 2, 9), vec![1, 2, 3]);
        let out = path.traverse(pkt);
        assert_eq!(out.mark, 0);
        assert!(out.is_encapsulated());
    }

    #[test]
    fn reserved_bits_survive_marking() {
        let path = NodePath::new(vec![rule(0x2000, 0xE000)]);
        let mut pkt = SimPacket::new(pod_ip(), Ipv4Addr::new(10, 244, 2, 9), vec![]);
        pkt.mark = 0x0080;
        assert_eq!(path.traverse(pkt).mark, 0x2080);
    }

    #[test]
    fn ingress_is_never_marked() {
        let path = NodePath::new(vec![rule(0x2000, 0xE000)]);
        let remote = SimPacket::new(Ipv4Addr::new(10, 244, 2, 9), pod_ip(), b"reply".to_vec());
        let original = remote.wire_bytes();
        let mut wire = remote.clone();
        wire.encapsulate();
        let delivered = path.ingress(wire);
        assert_eq!(delivered.mark, 0);
        assert!(!delivered.is_encapsulated());
        assert_eq!(delivered.wire_bytes(), original);
    }

    #[test]
    fn checksum_verifies() {
        let bytes = SimPacket::new(pod_ip(), Ipv4Addr::new(10, 0, 0, 1), vec![9; 31]).wire_bytes();
        assert_eq!(ipv4_checksum(&bytes[..IPV4_HEADER_LEN]), 0);
    }

    #[test]
    fn inner_packet_rejects_garbage() {
        assert_eq!(inner_packet(&[0u8; 10]), None);
        let plain = SimPacket::new(pod_ip(), Ipv4Addr::new(10, 0, 0, 1), vec![0; 64]).wire_bytes();
        assert_eq!(inner_packet(&plain), None);
    }

    #[test]
    fn schedule_is_seeded_and_ordered() {
        let s = Schedule::default();
        let a = build_schedule(3, 50, &s);
        assert_eq!(a, build_schedule(3, 50, &s));
        assert!(a.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(a.len(), 150);
        let other = Schedule { seed: 2, ..s };
        assert_ne!(a, build_schedule(3, 50, &other));
    }

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(nearest_rank(&v, 50), 50);
        assert_eq!(nearest_rank(&v, 99), 99);
        assert_eq!(nearest_rank(&[7], 95), 7);
        assert_eq!(nearest_rank(&[], 50), 0);
    }
}
