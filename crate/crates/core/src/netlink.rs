//! Discrete-event message transport between stations, the central server and
//! vehicles, plus the binary wire format.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::copilot::{SpatForecast, SpatPhase};
use crate::fusion::{TwinEntry, TwinFrame};
use crate::stations::{DetectedObject, ObjectListMessage, Sensor, HEADER_BYTES, OBJECT_BYTES};
use crate::world::{LightState, VehicleClass};
use crate::{Error, Result};

/// Source id used by the central server.
pub const SERVER_ID: u32 = 0;

/// Log-space spread of the jitter distribution.
const JITTER_SIGMA_LN: f64 = 0.5;
/// Jitter draws are truncated at this multiple of the scale.
const JITTER_CAP: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Uplink4g,
    Cv2x,
    Itsg5,
}

impl ChannelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelKind::Uplink4g => "uplink4g",
            ChannelKind::Cv2x => "cv2x",
            ChannelKind::Itsg5 => "itsg5",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub kind: ChannelKind,
    pub latency_base: f64,
    /// Mean of the jitter added on top of `latency_base`.
    pub jitter: f64,
    pub loss_prob: f64,
    /// Broadcast range around the sending RSU (ITS-G5 only).
    pub range: Option<f64>,
}

impl ChannelModel {
    pub fn ideal(kind: ChannelKind) -> Self {
        Self {
            kind,
            latency_base: 0.0,
            jitter: 0.0,
            loss_prob: 0.0,
            range: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latency_base < 0.0 || self.jitter < 0.0 {
            return Err(Error::config(format!(
                "{} channel: negative latency or jitter",
                self.kind.as_str()
            )));
        }
        if !(0.0..=1.0).contains(&self.loss_prob) {
            return Err(Error::config(format!(
                "{} channel: loss probability outside [0, 1]",
                self.kind.as_str()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownlinkMode {
    Cv2x,
    Itsg5,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub uplink: ChannelModel,
    pub cv2x: ChannelModel,
    /// Server to station backhaul for the ITS-G5 path.
    pub itsg5_hop: ChannelModel,
    /// RSU broadcast; its `range` bounds reception.
    pub itsg5_broadcast: ChannelModel,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            uplink: ChannelModel {
                kind: ChannelKind::Uplink4g,
                latency_base: 0.05,
                jitter: 0.0,
                loss_prob: 0.0,
                range: None,
            },
            cv2x: ChannelModel {
                kind: ChannelKind::Cv2x,
                latency_base: 0.05,
                jitter: 0.0,
                loss_prob: 0.0,
                range: None,
            },
            itsg5_hop: ChannelModel {
                kind: ChannelKind::Itsg5,
                latency_base: 0.02,
                jitter: 0.0,
                loss_prob: 0.0,
                range: None,
            },
            itsg5_broadcast: ChannelModel {
                kind: ChannelKind::Itsg5,
                latency_base: 0.01,
                jitter: 0.0,
                loss_prob: 0.0,
                range: Some(300.0),
            },
        }
    }
}

impl NetConfig {
    pub fn ideal() -> Self {
        let mut c = Self::default();
        for ch in [
            &mut c.uplink,
            &mut c.cv2x,
            &mut c.itsg5_hop,
            &mut c.itsg5_broadcast,
        ] {
            ch.latency_base = 0.0;
            ch.jitter = 0.0;
            ch.loss_prob = 0.0;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        for ch in [
            &self.uplink,
            &self.cv2x,
            &self.itsg5_hop,
            &self.itsg5_broadcast,
        ] {
            ch.validate()?;
        }
        match self.itsg5_broadcast.range {
            Some(r) if r.is_finite() && r > 0.0 => Ok(()),
            _ => Err(Error::config(
                "ITS-G5 broadcast needs a finite positive range",
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    ObjectList(ObjectListMessage),
    Spat(SpatForecast),
    Twin(TwinFrame),
}

impl Payload {
    pub fn msg_type(&self) -> u8 {
        match self {
            Payload::ObjectList(_) => 1,
            Payload::Spat(_) => 2,
            Payload::Twin(_) => 3,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Payload::ObjectList(_) => "object_list",
            Payload::Spat(_) => "spat",
            Payload::Twin(_) => "twin",
        }
    }

    /// Time stamp carried in the wire header.
    pub fn frame_time(&self) -> f64 {
        match self {
            Payload::ObjectList(m) => m.frame_time,
            Payload::Spat(f) => f.msg_time,
            Payload::Twin(f) => f.frame_time,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum Destination {
    Server,
    Station(u32),
    Vehicle(u64),
}

impl std::fmt::Display for Destination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Destination::Server => write!(f, "server"),
            Destination::Station(id) => write!(f, "station:{id}"),
            Destination::Vehicle(id) => write!(f, "vehicle:{id}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    pub payload: Arc<Payload>,
    pub src: u32,
    pub dst: Destination,
    pub channel: ChannelKind,
    /// Message sequence number; copies of one message share it.
    pub seq: u64,
    pub tx_time: f64,
    /// `None` when the channel dropped the message.
    pub rx_time: Option<f64>,
}

fn jitter_draw<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    // The draw is always consumed so the stream position does not depend on
    // the configured scale.
    let mu = -JITTER_SIGMA_LN * JITTER_SIGMA_LN / 2.0;
    let unit = LogNormal::new(mu, JITTER_SIGMA_LN)
        .expect("valid lognormal")
        .sample(rng);
    if scale <= 0.0 {
        0.0
    } else {
        scale * unit.min(JITTER_CAP)
    }
}

/// Sends one message over `channel`.
///
/// Jitter is lognormal with mean `channel.jitter`, truncated at a large
/// multiple of it; the channel drops with probability `loss_prob`.
pub fn transmit<R: Rng + ?Sized>(
    channel: &ChannelModel,
    payload: Arc<Payload>,
    src: u32,
    dst: Destination,
    t: f64,
    seq: u64,
    rng: &mut R,
) -> Envelope {
    let lost = rng.random::<f64>() < channel.loss_prob;
    let delay = channel.latency_base + jitter_draw(channel.jitter, rng);
    Envelope {
        payload,
        src,
        dst,
        channel: channel.kind,
        seq,
        tx_time: t,
        rx_time: (!lost).then_some(t + delay),
    }
}

/// Position of a radio endpoint in corridor coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Endpoint {
    pub id: u64,
    pub x: f64,
    pub y: f64,
}

/// True iff `p` is within `range` of some RSU.
pub fn in_itsg5_range(p: Endpoint, rsus: &[Endpoint], range: f64) -> bool {
    rsus.iter().any(|r| (p.x - r.x).hypot(p.y - r.y) <= range)
}

/// Delivers a server message to `vehicles`.
///
/// C-V2X sends one envelope per vehicle. ITS-G5 forwards to every station and
/// each RSU broadcasts to vehicles within range; a vehicle near several RSUs
/// gets several copies sharing one `seq`.
#[allow(clippy::too_many_arguments)]
pub fn route_downlink<R: Rng + ?Sized>(
    payload: Arc<Payload>,
    mode: DownlinkMode,
    net: &NetConfig,
    stations: &[Endpoint],
    vehicles: &[Endpoint],
    t: f64,
    seq: u64,
    rng: &mut R,
) -> (Vec<Envelope>, Vec<Envelope>) {
    let mut hops = Vec::new();
    let mut out = Vec::new();
    match mode {
        DownlinkMode::Cv2x => {
            for v in vehicles {
                out.push(transmit(
                    &net.cv2x,
                    payload.clone(),
                    SERVER_ID,
                    Destination::Vehicle(v.id),
                    t,
                    seq,
                    rng,
                ));
            }
        }
        DownlinkMode::Itsg5 => {
            let range = net.itsg5_broadcast.range.unwrap_or(0.0);
            for st in stations {
                let hop = transmit(
                    &net.itsg5_hop,
                    payload.clone(),
                    SERVER_ID,
                    Destination::Station(st.id as u32),
                    t,
                    seq,
                    rng,
                );
                if let Some(at) = hop.rx_time {
                    for v in vehicles {
                        if (v.x - st.x).hypot(v.y - st.y) <= range {
                            out.push(transmit(
                                &net.itsg5_broadcast,
                                payload.clone(),
                                st.id as u32,
                                Destination::Vehicle(v.id),
                                at,
                                seq,
                                rng,
                            ));
                        }
                    }
                }
                hops.push(hop);
            }
        }
    }
    (hops, out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub msg_type: String,
    pub src: u32,
    pub dst: String,
    pub tx_time: f64,
    pub rx_time: Option<f64>,
    pub channel: ChannelKind,
}

struct Queued {
    rx: f64,
    src: u32,
    seq: u64,
    order: u64,
    env: Envelope,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed so the max-heap pops the earliest delivery.
        other
            .rx
            .total_cmp(&self.rx)
            .then(other.src.cmp(&self.src))
            .then(other.seq.cmp(&self.seq))
            .then(other.order.cmp(&self.order))
    }
}

/// Pending deliveries in `(rx_time, src, seq)` order.
#[derive(Default)]
pub struct EventQueue {
    heap: BinaryHeap<Queued>,
    order: u64,
    next_seq: u64,
    stats: BTreeMap<ChannelKind, ChannelStats>,
    log: Vec<LatencyRecord>,
    pub record_latency: bool,
}

impl EventQueue {
    pub fn new() -> Self {
        Self {
            record_latency: true,
            ..Self::default()
        }
    }

    /// Fresh message sequence number.
    pub fn next_seq(&mut self) -> u64 {
        self.next_seq += 1;
        self.next_seq
    }

    /// Accounts for `env` and queues it unless it was dropped.
    pub fn submit(&mut self, env: Envelope) {
        let st = self.stats.entry(env.channel).or_default();
        st.sent += 1;
        if self.record_latency {
            self.log.push(LatencyRecord {
                msg_type: env.payload.type_name().to_string(),
                src: env.src,
                dst: env.dst.to_string(),
                tx_time: env.tx_time,
                rx_time: env.rx_time,
                channel: env.channel,
            });
        }
        match env.rx_time {
            Some(rx) => {
                st.delivered += 1;
                self.order += 1;
                self.heap.push(Queued {
                    rx,
                    src: env.src,
                    seq: env.seq,
                    order: self.order,
                    env,
                });
            }
            None => st.dropped += 1,
        }
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Removes and returns everything due at or before `t`.
    pub fn poll_deliveries(&mut self, t: f64) -> Vec<Envelope> {
        let mut out = Vec::new();
        while self.heap.peek().is_some_and(|q| q.rx <= t) {
            out.push(self.heap.pop().expect("peeked").env);
        }
        out
    }

    pub fn stats(&self) -> &BTreeMap<ChannelKind, ChannelStats> {
        &self.stats
    }

    pub fn latency_log(&self) -> &[LatencyRecord] {
        &self.log
    }
}

/// Drops repeated copies of the same message at one receiver.
#[derive(Clone, Debug, Default)]
pub struct Deduper {
    seen: BTreeSet<(i64, u64)>,
}

impl Deduper {
    /// True the first time a `(frame_time, seq)` pair is offered.
    pub fn accept(&mut self, env: &Envelope) -> bool {
        let ms = (env.payload.frame_time() * 1000.0).round() as i64;
        self.seen.insert((ms, env.seq))
    }
}

pub fn write_latency_log<W: std::io::Write>(rows: &[LatencyRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["msg_type", "src", "dst", "tx_time", "rx_time", "channel"])?;
    for r in rows {
        w.write_record([
            r.msg_type.clone(),
            r.src.to_string(),
            r.dst.clone(),
            r.tx_time.to_string(),
            r.rx_time.map(|x| x.to_string()).unwrap_or_default(),
            r.channel.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_latency_log<R: std::io::Read>(input: R) -> Result<Vec<LatencyRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(i).unwrap_or("").to_string();
        let num = |i: usize| -> Result<f64> {
            f(i).parse()
                .map_err(|_| Error::config(format!("bad number `{}` in latency log", f(i))))
        };
        let channel = match f(5).as_str() {
            "uplink4g" => ChannelKind::Uplink4g,
            "cv2x" => ChannelKind::Cv2x,
            "itsg5" => ChannelKind::Itsg5,
            other => return Err(Error::config(format!("unknown channel `{other}`"))),
        };
        out.push(LatencyRecord {
            msg_type: f(0),
            src: f(1)
                .parse()
                .map_err(|_| Error::config("bad src in latency log"))?,
            dst: f(2),
            tx_time: num(3)?,
            rx_time: if f(4).is_empty() { None } else { Some(num(4)?) },
            channel,
        });
    }
    Ok(out)
}

// Wire format. All fields little-endian.
//
// header (16 B): msg_type u8 | src u16 | frame_time_ms u32 | count u16 | 7 reserved
// object record (64 B): local_id u16 | class u8 | sensor u8 | confidence f32 |
//                       x y vx vy cov_xx cov_xy cov_yy f64
// spat record (64 B):   state u8 | 7 reserved | start end confidence f64 | 32 reserved
// twin record (64 B):   global_id u32 | class u8 | contributors u8 | 2 reserved |
//                       x y vx vy quality f64 | 16 reserved

fn put_header(buf: &mut Vec<u8>, msg_type: u8, src: u32, t: f64, count: usize) -> Result<()> {
    let src =
        u16::try_from(src).map_err(|_| Error::Wire(format!("source id {src} exceeds u16")))?;
    let count =
        u16::try_from(count).map_err(|_| Error::Wire(format!("{count} records exceed u16")))?;
    let ms = (t * 1000.0).round();
    if !(0.0..=u32::MAX as f64).contains(&ms) {
        return Err(Error::Wire(format!("frame time {t} not representable")));
    }
    buf.push(msg_type);
    buf.extend_from_slice(&src.to_le_bytes());
    buf.extend_from_slice(&(ms as u32).to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    buf.extend_from_slice(&[0u8; 7]);
    Ok(())
}

fn put_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(payload: &Payload, src: u32) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    match payload {
        Payload::ObjectList(m) => {
            put_header(&mut buf, 1, src, m.frame_time, m.objects.len())?;
            for o in &m.objects {
                buf.extend_from_slice(&o.local_id.to_le_bytes());
                buf.push(o.class.code());
                buf.push(o.sensor.code());
                buf.extend_from_slice(&(o.confidence as f32).to_le_bytes());
                put_f64s(
                    &mut buf,
                    &[o.x, o.y, o.vx, o.vy, o.cov[0], o.cov[1], o.cov[2]],
                );
            }
        }
        Payload::Spat(f) => {
            put_header(&mut buf, 2, src, f.msg_time, f.phases.len())?;
            for p in &f.phases {
                buf.push(p.state.code());
                buf.extend_from_slice(&[0u8; 7]);
                put_f64s(&mut buf, &[p.start, p.end, p.confidence]);
                buf.extend_from_slice(&[0u8; 32]);
            }
        }
        Payload::Twin(f) => {
            put_header(&mut buf, 3, src, f.frame_time, f.tracks.len())?;
            for e in &f.tracks {
                let gid = u32::try_from(e.global_id)
                    .map_err(|_| Error::Wire("global id exceeds u32".into()))?;
                buf.extend_from_slice(&gid.to_le_bytes());
                buf.push(e.class.code());
                buf.push(e.contributors.min(255) as u8);
                buf.extend_from_slice(&[0u8; 2]);
                put_f64s(&mut buf, &[e.x, e.y, e.vx, e.vy, e.quality]);
                buf.extend_from_slice(&[0u8; 16]);
            }
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| Error::Wire("truncated message".into()))?;
        self.pos = end;
        Ok(bytes.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
    fn skip(&mut self, n: usize) -> Result<()> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Wire("truncated message".into()));
        }
        self.pos += n;
        Ok(())
    }
}

/// Decodes a message; returns the payload and the header source id.
pub fn decode(bytes: &[u8]) -> Result<(Payload, u32)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let msg_type = c.u8()?;
    let src = c.u16()? as u32;
    let t = c.u32()? as f64 / 1000.0;
    let count = c.u16()? as usize;
    c.skip(7)?;
    if bytes.len() != HEADER_BYTES + OBJECT_BYTES * count {
        return Err(Error::Wire(format!(
            "length {} does not match {} records",
            bytes.len(),
            count
        )));
    }
    let class = |code: u8| {
        VehicleClass::from_code(code)
            .ok_or_else(|| Error::Wire(format!("unknown class code {code}")))
    };
    let payload = match msg_type {
        1 => {
            let mut objects = Vec::with_capacity(count);
            for _ in 0..count {
                let local_id = c.u16()?;
                let cl = class(c.u8()?)?;
                let sensor = Sensor::from_code(c.u8()?)
                    .ok_or_else(|| Error::Wire("unknown sensor code".into()))?;
                let confidence = c.f32()? as f64;
                let v: Vec<f64> = (0..7).map(|_| c.f64()).collect::<Result<_>>()?;
                objects.push(DetectedObject {
                    station_id: src,
                    local_id,
                    class: cl,
                    sensor,
                    x: v[0],
                    y: v[1],
                    vx: v[2],
                    vy: v[3],
                    cov: [v[4], v[5], v[6]],
                    confidence,
                });
            }
            Payload::ObjectList(ObjectListMessage::new(src, t, objects))
        }
        2 => {
            let mut phases = Vec::with_capacity(count);
            for _ in 0..count {
                let state = LightState::from_code(c.u8()?)
                    .ok_or_else(|| Error::Wire("unknown light state".into()))?;
                c.skip(7)?;
                let (start, end, confidence) = (c.f64()?, c.f64()?, c.f64()?);
                c.skip(32)?;
                phases.push(SpatPhase {
                    state,
                    start,
                    end,
                    confidence,
                });
            }
            Payload::Spat(SpatForecast {
                signal_id: src,
                msg_time: t,
                phases,
            })
        }
        3 => {
            let mut tracks = Vec::with_capacity(count);
            for _ in 0..count {
                let global_id = c.u32()? as u64;
                let cl = class(c.u8()?)?;
                let contributors = c.u8()? as usize;
                c.skip(2)?;
                let (x, y, vx, vy, quality) = (c.f64()?, c.f64()?, c.f64()?, c.f64()?, c.f64()?);
                c.skip(16)?;
                tracks.push(TwinEntry {
                    global_id,
                    class: cl,
                    x,
                    y,
                    vx,
                    vy,
                    quality,
                    contributors,
                });
            }
            Payload::Twin(TwinFrame {
                frame_time: t,
                tracks,
            })
        }
        other => return Err(Error::Wire(format!("unknown message type {other}"))),
    };
    Ok((payload, src))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn dummy(t: f64) -> Arc<Payload> {
        Arc::new(Payload::ObjectList(ObjectListMessage::new(1, t, vec![])))
    }

    #[test]
    fn ideal_channel_is_instant() {
        let ch = ChannelModel::ideal(ChannelKind::Uplink4g);
        let env = transmit(
            &ch,
            dummy(0.0),
            1,
            Destination::Server,
            3.2,
            1,
            &mut stream(1, "n"),
        );
        assert_eq!(env.rx_time, Some(3.2));
    }

    #[test]
    fn certain_loss_always_drops() {
        let ch = ChannelModel {
            loss_prob: 1.0,
            ..ChannelModel::ideal(ChannelKind::Cv2x)
        };
        let mut rng = stream(2, "n");
        let mut q = EventQueue::new();
        for k in 0..100 {
            q.submit(transmit(
                &ch,
                dummy(0.0),
                1,
                Destination::Server,
                k as f64,
                k,
                &mut rng,
            ));
        }
        assert!(q.poll_deliveries(1e9).is_empty());
        let st = q.stats()[&ChannelKind::Cv2x];
        assert_eq!((st.sent, st.delivered, st.dropped), (100, 0, 100));
    }

    #[test]
    fn jitter_mean_matches_scale() {
        let ch = ChannelModel {
            latency_base: 0.05,
            jitter: 0.01,
            ..ChannelModel::ideal(ChannelKind::Uplink4g)
        };
        let mut rng = stream(3, "n");
        let n = 10_000;
        let mean = (0..n)
            .map(|_| {
                let e = transmit(&ch, dummy(0.0), 1, Destination::Server, 0.0, 0, &mut rng);
                let lat = e.rx_time.unwrap() - e.tx_time;
                assert!(lat >= 0.05);
                lat
            })
            .sum::<f64>()
            / n as f64;
        assert!((0.055..=0.065).contains(&mean), "{mean}");
    }

    #[test]
    fn poll_order_and_ties() {
        let mut q = EventQueue::new();
        assert!(q.poll_deliveries(10.0).is_empty());
        let mk = |src: u32, seq: u64, rx: f64| Envelope {
            payload: dummy(0.0),
            src,
            dst: Destination::Server,
            channel: ChannelKind::Uplink4g,
            seq,
            tx_time: 0.0,
            rx_time: Some(rx),
        };
        let input = [
            mk(5, 1, 0.3),
            mk(2, 9, 0.1),
            mk(1, 4, 0.3),
            mk(1, 2, 0.3),
            mk(3, 3, 0.2),
        ];
        for e in input.iter().cloned() {
            q.submit(e);
        }
        let out: Vec<(u32, u64)> = q
            .poll_deliveries(0.25)
            .iter()
            .map(|e| (e.src, e.seq))
            .collect();
        assert_eq!(out, vec![(2, 9), (3, 3)]);
        let rest: Vec<(u32, u64)> = q
            .poll_deliveries(1.0)
            .iter()
            .map(|e| (e.src, e.seq))
            .collect();
        let mut oracle: Vec<_> = input
            .iter()
            .filter(|e| e.rx_time.unwrap() > 0.25)
            .map(|e| (e.rx_time.unwrap(), e.src, e.seq))
            .collect();
        oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        assert_eq!(rest, oracle.iter().map(|o| (o.1, o.2)).collect::<Vec<_>>());
        assert!(q.is_empty());
    }

    #[test]
    fn itsg5_range_predicate() {
        let net = NetConfig::default();
        let rsus = [Endpoint {
            id: 1,
            x: 0.0,
            y: -4.0,
        }];
        let near = Endpoint {
            id: 10,
            x: 250.0,
            y: -4.0,
        };
        let far = Endpoint {
            id: 11,
            x: 400.0,
            y: -4.0,
        };
        let mut rng = stream(4, "n");
        let (_, env) = route_downlink(
            dummy(0.0),
            DownlinkMode::Itsg5,
            &net,
            &rsus,
            &[near, far],
            0.0,
            1,
            &mut rng,
        );
        assert_eq!(env.len(), 1);
        assert_eq!(env[0].dst, Destination::Vehicle(10));
        let (_, env) = route_downlink(
            dummy(0.0),
            DownlinkMode::Cv2x,
            &net,
            &rsus,
            &[near, far],
            0.0,
            1,
            &mut rng,
        );
        assert_eq!(env.len(), 2);
    }

    #[test]
    fn itsg5_slower_than_cv2x_with_equal_hops() {
        let mut net = NetConfig::default();
        net.cv2x.latency_base = 0.02;
        net.itsg5_hop.latency_base = 0.02;
        net.itsg5_broadcast.latency_base = 0.02;
        let rsus = [Endpoint {
            id: 1,
            x: 0.0,
            y: -4.0,
        }];
        let v = [Endpoint {
            id: 7,
            x: 10.0,
            y: 0.0,
        }];
        let mut rng = stream(5, "n");
        let (_, g5) = route_downlink(
            dummy(0.0),
            DownlinkMode::Itsg5,
            &net,
            &rsus,
            &v,
            1.0,
            1,
            &mut rng,
        );
        let (_, cv) = route_downlink(
            dummy(0.0),
            DownlinkMode::Cv2x,
            &net,
            &rsus,
            &v,
            1.0,
            1,
            &mut rng,
        );
        assert!((g5[0].rx_time.unwrap() - 1.04).abs() < 1e-12);
        assert!(g5[0].rx_time.unwrap() > cv[0].rx_time.unwrap());
    }

    #[test]
    fn dedupe_copies() {
        let mut d = Deduper::default();
        let e = transmit(
            &ChannelModel::ideal(ChannelKind::Itsg5),
            dummy(0.5),
            1,
            Destination::Vehicle(1),
            0.5,
            7,
            &mut stream(6, "n"),
        );
        assert!(d.accept(&e));
        assert!(!d.accept(&e));
    }

    #[test]
    fn wire_round_trip() {
        let obj = DetectedObject {
            station_id: 3,
            local_id: 2,
            class: VehicleClass::Truck,
            sensor: Sensor::Camera,
            x: 101.25,
            y: -0.125,
            vx: 12.0,
            vy: 0.5,
            cov: [0.25, 0.01, 0.02],
            confidence: 0.75,
        };
        let msg = Payload::ObjectList(ObjectListMessage::new(3, 12.3, vec![obj.clone(), obj]));
        let bytes = encode(&msg, 3).unwrap();
        assert_eq!(bytes.len(), 16 + 2 * 64);
        let (back, src) = decode(&bytes).unwrap();
        assert_eq!(src, 3);
        assert_eq!(back, msg);

        let spat = Payload::Spat(SpatForecast {
            signal_id: 4,
            msg_time: 7.0,
            phases: vec![SpatPhase {
                state: LightState::Green,
                start: 7.0,
                end: 30.0,
                confidence: 0.5,
            }],
        });
        assert_eq!(decode(&encode(&spat, 4).unwrap()).unwrap().0, spat);
        let twin = Payload::Twin(TwinFrame {
            frame_time: 0.1,
            tracks: vec![TwinEntry {
                global_id: 9,
                class: VehicleClass::Car,
                x: 1.0,
                y: 2.0,
                vx: 3.0,
                vy: 0.0,
                quality: 0.9,
                contributors: 2,
            }],
        });
        assert_eq!(decode(&encode(&twin, 0).unwrap()).unwrap().0, twin);
        assert!(decode(&bytes[..20]).is_err());
    }

    #[test]
    fn frame_time_decodes_to_grid_value() {
        for k in 0..100_000u64 {
            let t = crate::grid_time(k, 10.0);
            let bytes = encode(
                &Payload::ObjectList(ObjectListMessage::new(1, t, vec![])),
                1,
            )
            .unwrap();
            assert_eq!(decode(&bytes).unwrap().0.frame_time(), t);
        }
    }

    #[test]
    fn latency_log_round_trip() {
        let rows = vec![
            LatencyRecord {
                msg_type: "spat".into(),
                src: 0,
                dst: "vehicle:3".into(),
                tx_time: 1.0,
                rx_time: Some(1.05),
                channel: ChannelKind::Cv2x,
            },
            LatencyRecord {
                msg_type: "object_list".into(),
                src: 2,
                dst: "server".into(),
                tx_time: 1.0,
                rx_time: None,
                channel: ChannelKind::Uplink4g,
            },
        ];
        let mut buf = Vec::new();
        write_latency_log(&rows, &mut buf).unwrap();
        assert_eq!(read_latency_log(buf.as_slice()).unwrap(), rows);
    }
}
