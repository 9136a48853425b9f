//! Message and latency model for the blade ↔ switch ↔ blade fabric.
//!
//! Latencies compose from per-hop constants. A plain remote fetch is four
//! one-way hops plus one pipeline pass and one recirculation. Invalidations
//! queue FIFO at each recipient blade. Message loss is seeded; every lost
//! exchange costs one timeout before it is retransmitted.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::types::{ComputeBladeId, MemBladeId, SharerSet, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyParams {
    /// compute↔switch and switch↔memory, µs
    pub one_way_hop_us: f64,
    /// one pass through the switch pipeline, µs
    pub switch_pipeline_us: f64,
    /// one recirculation, µs
    pub recirculation_us: f64,
    /// per invalidation applied at a blade, µs
    pub tlb_shootdown_us: f64,
    pub local_hit_ns: f64,
    /// per queued invalidation at a blade, µs
    pub blade_inval_service_us: f64,
}

impl Default for LatencyParams {
    fn default() -> Self {
        LatencyParams {
            one_way_hop_us: 2.0,
            switch_pipeline_us: 0.5,
            recirculation_us: 0.5,
            tlb_shootdown_us: 2.0,
            local_hit_ns: 100.0,
            blade_inval_service_us: 1.0,
        }
    }
}

impl LatencyParams {
    fn hop(&self) -> SimTime {
        SimTime::from_us(self.one_way_hop_us)
    }

    /// Requester → switch, through the pipeline and one recirculation.
    pub fn request_leg(&self) -> SimTime {
        self.hop() + SimTime::from_us(self.switch_pipeline_us + self.recirculation_us)
    }

    /// Remote fetch with no invalidation: four hops, one pipeline pass, one recirculation.
    pub fn fetch(&self) -> SimTime {
        self.request_leg() + SimTime(3 * self.hop().0)
    }

    pub fn local_hit(&self) -> SimTime {
        SimTime((self.local_hit_ns).round() as u64)
    }

    /// Switch → recipient → switch for one invalidation. A recipient that owns
    /// the region also pushes its dirty pages one more hop to memory before
    /// the requester may fetch.
    pub fn inval_round(&self, queue_wait: SimTime, flush_to_memory: bool) -> SimTime {
        let hops = if flush_to_memory { 3 } else { 2 };
        SimTime(hops * self.hop().0)
            + queue_wait
            + SimTime::from_us(self.tlb_shootdown_us + self.blade_inval_service_us)
    }

    pub fn service(&self) -> SimTime {
        SimTime::from_us(self.blade_inval_service_us)
    }

    pub fn validate(&self) -> Result<(), &'static str> {
        let fields = [
            ("latency.one-way-hop", self.one_way_hop_us),
            ("latency.switch-pipeline", self.switch_pipeline_us),
            ("latency.recirculation", self.recirculation_us),
            ("latency.tlb-shootdown", self.tlb_shootdown_us),
            ("latency.local-hit-ns", self.local_hit_ns),
            ("latency.blade-inval-service", self.blade_inval_service_us),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(name);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityParams {
    pub loss_rate: f64,
    pub timeout_us: f64,
    pub max_retries: u32,
    pub seed: u64,
}

impl Default for ReliabilityParams {
    fn default() -> Self {
        ReliabilityParams { loss_rate: 0.0, timeout_us: 100.0, max_retries: 3, seed: 0 }
    }
}

/// One invalidation leg of a transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InvalLeg {
    pub queue_wait: SimTime,
    pub flush_to_memory: bool,
    /// Lost attempts before the one that got through.
    pub retries: u32,
}

/// A resolved transition plan, as far as latency is concerned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransitionShape {
    LocalHit,
    /// Fetch from memory, nothing to invalidate.
    Fetch {
        retries: u32,
    },
    /// Invalidations overlap the memory fetch (S → M).
    Parallel {
        fetch_retries: u32,
        legs: Vec<InvalLeg>,
    },
    /// Owner flush completes before the fetch starts (M → S, M → M).
    Sequential {
        fetch_retries: u32,
        leg: InvalLeg,
    },
}

pub fn cost_of(shape: &TransitionShape, p: &LatencyParams, r: &ReliabilityParams) -> SimTime {
    let timeout = SimTime::from_us(r.timeout_us);
    let fetch = |retries: u32| p.fetch() + SimTime(timeout.0 * retries as u64);
    let leg = |l: &InvalLeg| p.inval_round(l.queue_wait, l.flush_to_memory) + SimTime(timeout.0 * l.retries as u64);
    match shape {
        TransitionShape::LocalHit => p.local_hit(),
        TransitionShape::Fetch { retries } => fetch(*retries),
        TransitionShape::Parallel { fetch_retries, legs } => {
            legs.iter().map(leg).fold(fetch(*fetch_retries), SimTime::max)
        }
        TransitionShape::Sequential { fetch_retries, leg: l } => leg(l) + fetch(*fetch_retries),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum MessageKind {
    FetchReq,
    FetchResp,
    Inval,
    InvalAck,
    Writeback,
    Reset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Endpoint {
    Compute(ComputeBladeId),
    Memory(MemBladeId),
    Switch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Message {
    pub kind: MessageKind,
    pub src: Endpoint,
    pub dst: Endpoint,
    pub addr: u64,
    /// Embedded sharer list; only invalidations carry one.
    pub sharers: Option<SharerSet>,
    pub seq: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MessageCounters {
    pub fetch_req: u64,
    pub fetch_resp: u64,
    pub inval: u64,
    pub inval_ack: u64,
    pub writeback: u64,
    pub reset: u64,
    pub retransmissions: u64,
    pub dropped: u64,
}

/// Where loss decisions come from.
#[derive(Debug, Clone)]
pub enum LossSource {
    Seeded {
        rng: Box<ChaCha8Rng>,
        rate: f64,
    },
    /// Explicit per-message outcomes (`true` = dropped); lossless once exhausted.
    Scripted(VecDeque<bool>),
}

impl LossSource {
    pub fn seeded(rate: f64, seed: u64) -> Self {
        LossSource::Seeded { rng: Box::new(ChaCha8Rng::seed_from_u64(seed)), rate }
    }

    fn dropped(&mut self) -> bool {
        match self {
            LossSource::Seeded { rate, .. } if *rate <= 0.0 => false,
            LossSource::Seeded { rng, rate } => rng.random::<f64>() < *rate,
            LossSource::Scripted(script) => script.pop_front().unwrap_or(false),
        }
    }
}

/// Result of a request/response exchange under retransmission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Exchange {
    /// Lost attempts.
    pub retries: u32,
    /// False when every attempt was lost.
    pub delivered: bool,
}

#[derive(Debug, Clone)]
pub struct Fabric {
    pub latency: LatencyParams,
    pub reliability: ReliabilityParams,
    loss: LossSource,
    inval_busy_until: Vec<SimTime>,
    next_seq: u64,
    counters: MessageCounters,
    log: Option<Vec<Message>>,
}

impl Fabric {
    pub fn new(latency: LatencyParams, reliability: ReliabilityParams, compute_blades: usize) -> Self {
        Fabric {
            latency,
            reliability,
            loss: LossSource::seeded(reliability.loss_rate, reliability.seed),
            inval_busy_until: vec![SimTime::ZERO; compute_blades],
            next_seq: 0,
            counters: MessageCounters::default(),
            log: None,
        }
    }

    pub fn set_loss_source(&mut self, loss: LossSource) {
        self.loss = loss;
    }

    /// Keep every message for inspection.
    pub fn enable_log(&mut self) {
        self.log.get_or_insert_with(Vec::new);
    }

    pub fn log(&self) -> &[Message] {
        self.log.as_deref().unwrap_or(&[])
    }

    pub fn counters(&self) -> &MessageCounters {
        &self.counters
    }

    pub fn record(&mut self, kind: MessageKind, src: Endpoint, dst: Endpoint, addr: u64, sharers: Option<SharerSet>) {
        let c = &mut self.counters;
        match kind {
            MessageKind::FetchReq => c.fetch_req += 1,
            MessageKind::FetchResp => c.fetch_resp += 1,
            MessageKind::Inval => c.inval += 1,
            MessageKind::InvalAck => c.inval_ack += 1,
            MessageKind::Writeback => c.writeback += 1,
            MessageKind::Reset => c.reset += 1,
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        if let Some(log) = &mut self.log {
            log.push(Message { kind, src, dst, addr, sharers, seq });
        }
    }

    /// Runs a two-message exchange with up to `max_retries` retransmissions.
    pub fn exchange(&mut self) -> Exchange {
        let attempts = 1 + self.reliability.max_retries;
        for attempt in 0..attempts {
            let lost_req = self.loss.dropped();
            // the reply exists only if the request arrived
            let lost = lost_req || self.loss.dropped();
            if !lost {
                return Exchange { retries: attempt, delivered: true };
            }
            self.counters.dropped += 1;
            if attempt + 1 < attempts {
                self.counters.retransmissions += 1;
            }
        }
        Exchange { retries: attempts, delivered: false }
    }

    /// Queues an invalidation arriving at `blade` at `arrival`; returns the
    /// time it waits behind earlier invalidations.
    pub fn enqueue_inval(&mut self, blade: ComputeBladeId, arrival: SimTime) -> SimTime {
        let busy = &mut self.inval_busy_until[blade.index()];
        let start = arrival.max(*busy);
        *busy = start + self.latency.service();
        start - arrival
    }

    /// Egress filtering of a rack-wide multicast: only ports leading to a
    /// listed sharer (other than the requester) keep their copy.
    pub fn multicast_targets(&self, sharers: SharerSet, requester: ComputeBladeId) -> Vec<ComputeBladeId> {
        (0..self.inval_busy_until.len() as u16)
            .map(ComputeBladeId)
            .filter(|&port| port != requester && sharers.contains(port))
            .collect()
    }

    pub fn cost(&self, shape: &TransitionShape) -> SimTime {
        cost_of(shape, &self.latency, &self.reliability)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> LatencyParams {
        LatencyParams::default()
    }

    #[test]
    fn plain_fetch_is_nine_us() {
        let c = cost_of(&TransitionShape::Fetch { retries: 0 }, &p(), &ReliabilityParams::default());
        assert_eq!(c, SimTime::from_us(9.0));
    }

    #[test]
    fn owner_flush_path_is_eighteen_us() {
        let leg = InvalLeg { queue_wait: SimTime::ZERO, flush_to_memory: true, retries: 0 };
        let c = cost_of(&TransitionShape::Sequential { fetch_retries: 0, leg }, &p(), &ReliabilityParams::default());
        assert_eq!(c, SimTime::from_us(18.0));
    }

    #[test]
    fn parallel_invalidation_hides_behind_fetch() {
        let legs = vec![InvalLeg { queue_wait: SimTime::ZERO, flush_to_memory: false, retries: 0 }; 7];
        let c = cost_of(&TransitionShape::Parallel { fetch_retries: 0, legs }, &p(), &ReliabilityParams::default());
        assert_eq!(c, SimTime::from_us(9.0));
        let slow = vec![InvalLeg { queue_wait: SimTime::from_us(5.0), flush_to_memory: false, retries: 0 }];
        let c =
            cost_of(&TransitionShape::Parallel { fetch_retries: 0, legs: slow }, &p(), &ReliabilityParams::default());
        assert_eq!(c, SimTime::from_us(12.0));
    }

    #[test]
    fn local_hit_is_100ns() {
        assert_eq!(cost_of(&TransitionShape::LocalHit, &p(), &ReliabilityParams::default()), SimTime(100));
    }

    #[test]
    fn eighth_queued_invalidation_waits_seven_services() {
        let mut f = Fabric::new(p(), ReliabilityParams::default(), 2);
        let waits: Vec<SimTime> = (0..8).map(|_| f.enqueue_inval(ComputeBladeId(1), SimTime(1000))).collect();
        assert_eq!(waits[7], SimTime::from_us(7.0));
        assert_eq!(waits[0], SimTime::ZERO);
        // the other blade's queue is independent
        assert_eq!(f.enqueue_inval(ComputeBladeId(0), SimTime(1000)), SimTime::ZERO);
    }

    #[test]
    fn lossless_exchange_delivers_first_time() {
        let mut f = Fabric::new(p(), ReliabilityParams::default(), 1);
        for _ in 0..100 {
            assert_eq!(f.exchange(), Exchange { retries: 0, delivered: true });
        }
        assert_eq!(f.counters().retransmissions, 0);
    }

    #[test]
    fn one_drop_costs_one_timeout() {
        let mut f = Fabric::new(p(), ReliabilityParams::default(), 1);
        f.set_loss_source(LossSource::Scripted([true].into()));
        let ex = f.exchange();
        assert_eq!(ex, Exchange { retries: 1, delivered: true });
        let leg = InvalLeg { queue_wait: SimTime::ZERO, flush_to_memory: false, retries: ex.retries };
        let base = p().inval_round(SimTime::ZERO, false);
        assert_eq!(
            f.cost(&TransitionShape::Sequential { fetch_retries: 0, leg }),
            base + SimTime::from_us(100.0) + p().fetch()
        );
    }

    #[test]
    fn exhausted_retries_report_undelivered() {
        let mut f = Fabric::new(p(), ReliabilityParams::default(), 1);
        f.set_loss_source(LossSource::Scripted([true; 4].into()));
        assert_eq!(f.exchange(), Exchange { retries: 4, delivered: false });
    }

    #[test]
    fn seeded_loss_is_reproducible() {
        let r = ReliabilityParams { loss_rate: 0.3, seed: 42, ..Default::default() };
        let run = || {
            let mut f = Fabric::new(p(), r, 1);
            (0..200).map(|_| f.exchange()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn multicast_filters_to_sharers() {
        let f = Fabric::new(p(), ReliabilityParams::default(), 8);
        let sharers: SharerSet = [0, 1, 2].into_iter().map(ComputeBladeId).collect();
        assert_eq!(f.multicast_targets(sharers, ComputeBladeId(0)), vec![ComputeBladeId(1), ComputeBladeId(2)]);
    }

    fn shape() -> impl Strategy<Value = TransitionShape> {
        let leg = (0u64..20_000, any::<bool>(), 0u32..3).prop_map(|(w, f, r)| InvalLeg {
            queue_wait: SimTime(w),
            flush_to_memory: f,
            retries: r,
        });
        prop_oneof![
            Just(TransitionShape::LocalHit),
            (0u32..3).prop_map(|retries| TransitionShape::Fetch { retries }),
            (0u32..3, proptest::collection::vec(leg.clone(), 1..8))
                .prop_map(|(fetch_retries, legs)| TransitionShape::Parallel { fetch_retries, legs }),
            (0u32..3, leg).prop_map(|(fetch_retries, leg)| TransitionShape::Sequential { fetch_retries, leg }),
        ]
    }

    proptest! {
        #[test]
        fn raising_any_parameter_never_lowers_cost(s in shape(), field in 0usize..7, bump in 0.0f64..50.0) {
            let base = p();
            let mut up = base;
            let mut r_up = ReliabilityParams::default();
            match field {
                0 => up.one_way_hop_us += bump,
                1 => up.switch_pipeline_us += bump,
                2 => up.recirculation_us += bump,
                3 => up.tlb_shootdown_us += bump,
                4 => up.local_hit_ns += bump,
                5 => up.blade_inval_service_us += bump,
                _ => r_up.timeout_us += bump,
            }
            prop_assert!(cost_of(&s, &up, &r_up) >= cost_of(&s, &base, &ReliabilityParams::default()));
        }
    }
}
