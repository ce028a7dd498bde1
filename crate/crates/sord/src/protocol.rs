//! Per-node discovery protocol state machine.
//!
//! A node owns its local resource availabilities, one bounded cache per
//! resource type, and a policy record controlling every protocol knob.
//! Handlers mutate only the node they are called on and return the messages
//! to send as explicit effect lists; the execution engine (simulator or
//! anything else) decides how those effects travel.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::Arc;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{NodeId, Tick};

/// Globally unique message identifier, allocated by the execution engine.
pub type MsgId = u64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("query {id} path is cyclic")]
    CyclicPath { id: MsgId },
    #[error("query {id} origin does not match path head")]
    OriginMismatch { id: MsgId },
    #[error("message {id} delivered to node {node}, which is not the next hop")]
    NotNextHop { id: MsgId, node: NodeId },
    #[error("availability {0} outside [0, 1]")]
    BadAvailability(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceKind {
    /// Changes rarely (installed software, special hardware).
    Static,
    /// Changes with every job (CPU, memory, I/O).
    Dynamic,
}

/// A named resource class. Cheap to clone; messages carry it by value.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResourceType {
    pub name: Arc<str>,
    pub kind: ResourceKind,
}

impl ResourceType {
    pub fn new(name: &str, kind: ResourceKind) -> Self {
        assert!(!name.is_empty(), "resource type name must be non-empty");
        Self {
            name: Arc::from(name),
            kind,
        }
    }

    /// The single resource type used by the load experiments.
    pub fn cpu() -> Self {
        Self::new("cpu", ResourceKind::Dynamic)
    }
}

/// One observation of one node's availability for one resource type.
/// Availability is in `[0, 1]`; for CPU it is `1 - load`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceSnapshot {
    pub node: NodeId,
    pub rtype: ResourceType,
    pub availability: f64,
    pub observed_at: Tick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: MsgId,
    pub origin: NodeId,
    pub rtype: ResourceType,
    /// Minimum acceptable availability.
    pub demand: f64,
    /// Remaining forward budget in hops.
    pub qttl: u32,
    /// Nodes traversed so far, origin first, current holder last.
    pub path: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryReply {
    pub query_id: MsgId,
    pub responder: NodeId,
    pub snapshot: ResourceSnapshot,
    /// Remaining reverse hops to the origin, next hop first. Empty once the
    /// reply has reached the origin.
    pub return_path: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Advertisement {
    pub id: MsgId,
    pub snapshot: ResourceSnapshot,
    /// Remaining flood budget in hops.
    pub attl: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolVariant {
    /// Queries and replies only.
    QueryOnly,
    /// Queries plus change-triggered advertisement floods.
    QueryAndAdvert,
}

/// All protocol knobs for one node. In deployment terms this is the policy
/// record an SLA decomposes into; here it is plain configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub qttl_init: u32,
    pub attl_init: u32,
    /// Maximum cache entries per resource type.
    pub cache_max: usize,
    /// Entries older than this many ticks are expired.
    pub cache_lifetime: Tick,
    /// Minimum absolute availability change that triggers an advertisement.
    pub adv_delta: f64,
    /// Forward copies emitted per query hop.
    pub fanout: usize,
    /// Ticks the origin collects replies before concluding a round.
    pub collect_window: Tick,
    pub variant: ProtocolVariant,
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.adv_delta > 0.0 && self.adv_delta <= 1.0) {
            return Err(format!("adv_delta must be in (0, 1], got {}", self.adv_delta));
        }
        if self.fanout < 1 {
            return Err("fanout must be at least 1".into());
        }
        Ok(())
    }
}

impl Default for PolicyConfig {
    fn default() -> Self {
        let qttl_init = 16;
        Self {
            qttl_init,
            attl_init: 3,
            cache_max: 32,
            cache_lifetime: 200,
            adv_delta: 0.1,
            fanout: 1,
            collect_window: 2 * qttl_init as Tick,
            variant: ProtocolVariant::QueryAndAdvert,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub snapshot: ResourceSnapshot,
    pub inserted_at: Tick,
}

/// Bounded per-resource cache. At most one entry per remote node; newer
/// `observed_at` wins. Expiry is keyed on `inserted_at`, so insertion order
/// doubles as the eviction order and a lazy FIFO queue makes both expiry
/// and overflow eviction O(1) amortised.
#[derive(Debug, Clone, Default)]
pub struct ResourceCache {
    entries: HashMap<NodeId, CacheEntry>,
    order: VecDeque<(NodeId, Tick)>,
}

impl ResourceCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, node: NodeId) -> Option<&CacheEntry> {
        self.entries.get(&node)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &CacheEntry)> {
        self.entries.iter()
    }

    fn is_expired(entry: &CacheEntry, now: Tick, lifetime: Tick) -> bool {
        now.saturating_sub(entry.inserted_at) > lifetime
    }

    /// Insert or refresh, keeping the newest observation and the size bound.
    fn insert(&mut self, snapshot: ResourceSnapshot, now: Tick, policy: &PolicyConfig) {
        let node = snapshot.node;
        match self.entries.get(&node) {
            Some(existing) if existing.snapshot.observed_at > snapshot.observed_at => return,
            _ => {}
        }
        self.entries.insert(
            node,
            CacheEntry {
                snapshot,
                inserted_at: now,
            },
        );
        self.order.push_back((node, now));
        self.enforce_bound(now, policy);
    }

    fn enforce_bound(&mut self, now: Tick, policy: &PolicyConfig) {
        while self.entries.len() > policy.cache_max {
            match self.order.pop_front() {
                Some((node, tick)) => {
                    // Skip queue entries superseded by a refresh.
                    if self.entries.get(&node).map(|e| e.inserted_at) == Some(tick) {
                        self.entries.remove(&node);
                    }
                }
                None => break,
            }
        }
        let _ = now;
    }

    /// Drop expired entries, then anything beyond the size bound, oldest
    /// insertion first. Returns the number of removed entries.
    fn evict_stale(&mut self, now: Tick, policy: &PolicyConfig) -> usize {
        let mut removed = 0;
        while let Some(&(node, tick)) = self.order.front() {
            let live = self.entries.get(&node).map(|e| e.inserted_at) == Some(tick);
            if !live {
                self.order.pop_front();
                continue;
            }
            if now.saturating_sub(tick) > policy.cache_lifetime {
                self.order.pop_front();
                self.entries.remove(&node);
                removed += 1;
                continue;
            }
            break;
        }
        while self.entries.len() > policy.cache_max {
            match self.order.pop_front() {
                Some((node, tick)) => {
                    if self.entries.get(&node).map(|e| e.inserted_at) == Some(tick) {
                        self.entries.remove(&node);
                        removed += 1;
                    }
                }
                None => break,
            }
        }
        removed
    }
}

/// Effects of handling a query at one node.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QueryOutcome {
    pub reply: Option<QueryReply>,
    pub forwards: Vec<(NodeId, Query)>,
}

/// Effects of handling a reply at one node.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplyOutcome {
    /// Set when this node is the origin the reply was travelling to.
    pub deliver: Option<QueryReply>,
    pub forward_to: Option<(NodeId, QueryReply)>,
}

/// One autonomous protocol participant.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub id: NodeId,
    pub base_neighbours: Vec<NodeId>,
    pub policy: PolicyConfig,
    caches: HashMap<Arc<str>, ResourceCache>,
    local: HashMap<Arc<str>, f64>,
    seen_ads: HashSet<MsgId>,
    last_advertised: HashMap<Arc<str>, f64>,
    /// Seed for the deterministic fallback shuffle in target selection.
    shuffle_seed: u64,
}

impl NodeState {
    pub fn new(
        id: NodeId,
        base_neighbours: Vec<NodeId>,
        policy: PolicyConfig,
        shuffle_seed: u64,
    ) -> Self {
        Self {
            id,
            base_neighbours,
            policy,
            caches: HashMap::new(),
            local: HashMap::new(),
            seen_ads: HashSet::new(),
            last_advertised: HashMap::new(),
            shuffle_seed,
        }
    }

    pub fn set_local(&mut self, rtype: &ResourceType, availability: f64) {
        assert!((0.0..=1.0).contains(&availability));
        self.local.insert(rtype.name.clone(), availability);
    }

    pub fn local_availability(&self, rtype: &ResourceType) -> f64 {
        self.local.get(&rtype.name).copied().unwrap_or(0.0)
    }

    pub fn cache(&self, rtype: &ResourceType) -> Option<&ResourceCache> {
        self.caches.get(&rtype.name)
    }

    pub fn cache_len(&self, rtype: &ResourceType) -> usize {
        self.caches.get(&rtype.name).map_or(0, ResourceCache::len)
    }

    pub fn snapshot(&self, rtype: &ResourceType, now: Tick) -> ResourceSnapshot {
        ResourceSnapshot {
            node: self.id,
            rtype: rtype.clone(),
            availability: self.local_availability(rtype),
            observed_at: now,
        }
    }

    fn cache_mut(&mut self, rtype: &ResourceType) -> &mut ResourceCache {
        self.caches.entry(rtype.name.clone()).or_default()
    }

    fn cache_snapshot(&mut self, snapshot: ResourceSnapshot, now: Tick) {
        let policy = self.policy.clone();
        self.cache_mut(&snapshot.rtype.clone())
            .insert(snapshot, now, &policy);
    }

    /// Validate an incoming query against the structural message invariants.
    fn check_query(&self, q: &Query) -> Result<(), ProtocolError> {
        if q.path.first() != Some(&q.origin) {
            return Err(ProtocolError::OriginMismatch { id: q.id });
        }
        if q.path.last() != Some(&self.id) {
            return Err(ProtocolError::NotNextHop {
                id: q.id,
                node: self.id,
            });
        }
        let mut seen = HashSet::with_capacity(q.path.len());
        if !q.path.iter().all(|n| seen.insert(*n)) {
            return Err(ProtocolError::CyclicPath { id: q.id });
        }
        if !(0.0..=1.0).contains(&q.demand) {
            return Err(ProtocolError::BadAvailability(q.demand));
        }
        Ok(())
    }

    /// Handle a query delivered to this node.
    ///
    /// Replies when the local availability satisfies the demand, and while
    /// TTL remains forwards up to `fanout` copies to the best candidates
    /// not already on the path.
    pub fn handle_query(&mut self, q: &Query, now: Tick) -> Result<QueryOutcome, ProtocolError> {
        self.check_query(q)?;

        let mut out = QueryOutcome::default();
        if self.local_availability(&q.rtype) >= q.demand {
            let mut return_path: Vec<NodeId> = q.path.iter().rev().skip(1).copied().collect();
            // `return_path` is empty when the origin satisfied its own query.
            out.reply = Some(QueryReply {
                query_id: q.id,
                responder: self.id,
                snapshot: self.snapshot(&q.rtype, now),
                return_path: std::mem::take(&mut return_path),
            });
        }

        if q.qttl > 0 {
            let targets = self.select_target(&q.rtype, q.demand, &q.path, now);
            for target in targets.into_iter().take(self.policy.fanout) {
                let mut path = q.path.clone();
                path.push(target);
                out.forwards.push((
                    target,
                    Query {
                        id: q.id,
                        origin: q.origin,
                        rtype: q.rtype.clone(),
                        demand: q.demand,
                        qttl: q.qttl - 1,
                        path,
                    },
                ));
            }
        }
        Ok(out)
    }

    /// Handle a reply travelling back along the recorded path. Every node on
    /// the way caches the responder's snapshot; the origin gets it delivered.
    pub fn handle_reply(&mut self, r: &QueryReply, now: Tick) -> Result<ReplyOutcome, ProtocolError> {
        if r.return_path.first() != Some(&self.id) {
            return Err(ProtocolError::NotNextHop {
                id: r.query_id,
                node: self.id,
            });
        }
        self.cache_snapshot(r.snapshot.clone(), now);

        let mut rest = r.return_path[1..].to_vec();
        if rest.is_empty() {
            Ok(ReplyOutcome {
                deliver: Some(QueryReply {
                    return_path: Vec::new(),
                    ..r.clone()
                }),
                forward_to: None,
            })
        } else {
            let next = rest[0];
            Ok(ReplyOutcome {
                deliver: None,
                forward_to: Some((
                    next,
                    QueryReply {
                        return_path: std::mem::take(&mut rest),
                        ..r.clone()
                    },
                )),
            })
        }
    }

    /// Handle an advertisement flood step. Duplicates are suppressed by id;
    /// fresh advertisements are cached and re-emitted to every base
    /// neighbour except the sender while TTL remains.
    ///
    /// An originating node passes `from = None` to run its own advertisement
    /// through the same path, which marks the id as seen and fans the flood
    /// out to all neighbours.
    pub fn handle_advertisement(
        &mut self,
        a: &Advertisement,
        from: Option<NodeId>,
        now: Tick,
    ) -> Vec<(NodeId, Advertisement)> {
        if !self.seen_ads.insert(a.id) {
            return Vec::new();
        }
        self.cache_snapshot(a.snapshot.clone(), now);

        if a.attl == 0 {
            return Vec::new();
        }
        let next = Advertisement {
            id: a.id,
            snapshot: a.snapshot.clone(),
            attl: a.attl - 1,
        };
        self.base_neighbours
            .iter()
            .filter(|&&n| Some(n) != from)
            .map(|&n| (n, next.clone()))
            .collect()
    }

    /// Ordered forwarding candidates: fresh qualifying cache entries by
    /// availability (ties to the lower node id), then the remaining base
    /// neighbours in a deterministically shuffled fallback order.
    pub fn select_target(
        &self,
        rtype: &ResourceType,
        demand: f64,
        exclude: &[NodeId],
        now: Tick,
    ) -> Vec<NodeId> {
        let mut candidates: Vec<(f64, NodeId)> = Vec::new();
        if let Some(cache) = self.caches.get(&rtype.name) {
            for (&node, entry) in cache.iter() {
                if ResourceCache::is_expired(entry, now, self.policy.cache_lifetime) {
                    continue;
                }
                if exclude.contains(&node) || node == self.id {
                    continue;
                }
                if entry.snapshot.availability >= demand {
                    candidates.push((entry.snapshot.availability, node));
                }
            }
        }
        candidates.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut out: Vec<NodeId> = candidates.into_iter().map(|(_, n)| n).collect();

        let mut fallback: Vec<NodeId> = self
            .base_neighbours
            .iter()
            .copied()
            .filter(|n| !exclude.contains(n) && !out.contains(n))
            .collect();
        let mut rng = StdRng::seed_from_u64(mix(self.shuffle_seed, now));
        fallback.shuffle(&mut rng);
        out.extend(fallback);
        out
    }

    /// Emit a fresh advertisement when the availability moved by at least
    /// `adv_delta` since the last one (or none was ever sent). Inactive
    /// under the query-only variant.
    pub fn maybe_advertise(
        &mut self,
        rtype: &ResourceType,
        now: Tick,
        next_id: impl FnOnce() -> MsgId,
    ) -> Option<Advertisement> {
        if self.policy.variant != ProtocolVariant::QueryAndAdvert {
            return None;
        }
        let current = self.local_availability(rtype);
        let triggered = match self.last_advertised.get(&rtype.name) {
            Some(&last) => (current - last).abs() >= self.policy.adv_delta,
            None => true,
        };
        if !triggered {
            return None;
        }
        self.last_advertised.insert(rtype.name.clone(), current);
        Some(Advertisement {
            id: next_id(),
            snapshot: self.snapshot(rtype, now),
            attl: self.policy.attl_init,
        })
    }

    /// Remove expired cache entries and anything beyond the size bound.
    /// Cheap when nothing can have expired yet.
    pub fn evict_stale(&mut self, now: Tick) -> usize {
        let policy = self.policy.clone();
        self.caches
            .values_mut()
            .map(|c| c.evict_stale(now, &policy))
            .sum()
    }

    /// Best fresh cached candidate regardless of demand: highest
    /// availability, ties to the lower node id.
    pub fn best_cached(&self, rtype: &ResourceType, now: Tick) -> Option<(NodeId, f64)> {
        let cache = self.caches.get(&rtype.name)?;
        let mut best: Option<(NodeId, f64)> = None;
        for (&node, entry) in cache.iter() {
            if ResourceCache::is_expired(entry, now, self.policy.cache_lifetime) {
                continue;
            }
            let a = entry.snapshot.availability;
            best = match best {
                None => Some((node, a)),
                Some((bn, ba)) => {
                    if a > ba || (a == ba && node < bn) {
                        Some((node, a))
                    } else {
                        Some((bn, ba))
                    }
                }
            };
        }
        best
    }

    pub fn has_seen_ad(&self, id: MsgId) -> bool {
        self.seen_ads.contains(&id)
    }
}

/// One in-flight discovery round at its origin.
#[derive(Debug, Clone)]
pub struct DiscoveryRound {
    pub query_id: MsgId,
    pub origin: NodeId,
    pub rtype: ResourceType,
    pub demand: f64,
    pub started_at: Tick,
    replies: Vec<QueryReply>,
}

impl DiscoveryRound {
    /// Start a round: the origin handles the initial query itself, so its
    /// own reply (if it qualifies) is collected immediately and the
    /// returned forwards carry the query into the network.
    pub fn start(
        origin: &mut NodeState,
        rtype: ResourceType,
        demand: f64,
        now: Tick,
        query_id: MsgId,
    ) -> Result<(Self, Vec<(NodeId, Query)>), ProtocolError> {
        let q = Query {
            id: query_id,
            origin: origin.id,
            rtype: rtype.clone(),
            demand,
            qttl: origin.policy.qttl_init,
            path: vec![origin.id],
        };
        let outcome = origin.handle_query(&q, now)?;
        let mut round = Self {
            query_id,
            origin: origin.id,
            rtype,
            demand,
            started_at: now,
            replies: Vec::new(),
        };
        if let Some(reply) = outcome.reply {
            round.replies.push(reply);
        }
        Ok((round, outcome.forwards))
    }

    pub fn collect(&mut self, reply: QueryReply) {
        debug_assert_eq!(reply.query_id, self.query_id);
        self.replies.push(reply);
    }

    pub fn reply_count(&self) -> usize {
        self.replies.len()
    }

    /// Pick the placement target: best reply by availability (ties to the
    /// lower node id), else the best fresh cache candidate at the origin,
    /// else the origin itself.
    pub fn conclude(&self, origin: &NodeState, now: Tick) -> NodeId {
        let mut best: Option<(f64, NodeId)> = None;
        for r in &self.replies {
            let a = r.snapshot.availability;
            let n = r.responder;
            best = match best {
                None => Some((a, n)),
                Some((ba, bn)) => {
                    if a > ba || (a == ba && n < bn) {
                        Some((a, n))
                    } else {
                        Some((ba, bn))
                    }
                }
            };
        }
        if let Some((_, n)) = best {
            return n;
        }
        if let Some((n, _)) = origin.best_cached(&self.rtype, now) {
            return n;
        }
        self.origin
    }
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over the xored inputs
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
