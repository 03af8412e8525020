//! Order negotiation. Every cycle each rank reports what it has pending:
//! a bitmap over names already in the response cache and full requests for
//! names that are not. Rank 0 ANDs the bitmaps, completes requests once all
//! ranks have submitted them and broadcasts one schedule, so every rank runs
//! the same reductions in the same order.
//!
//! Names completing in the same cycle are cached in name order; the schedule
//! runs in cache-index order, so the canonical order is first-complete with
//! ties broken by name.

use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use crate::error::{CommError, Result, StallReport};
use crate::frame::{Frame, Get, MsgKind, Put};
use crate::ring::{DType, ReduceOp};

/// Identity of one logical tensor; must agree across ranks.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TensorMeta {
    pub name: String,
    pub count: usize,
    pub dtype: DType,
    pub op: ReduceOp,
}

impl TensorMeta {
    pub fn bytes(&self) -> usize {
        self.count * self.dtype.size()
    }

    fn put(&self, p: &mut Put) {
        p.str(&self.name).u64(self.count as u64).u8(self.dtype.code()).u8(self.op.code());
    }

    fn get(g: &mut Get) -> Result<Self> {
        let name = g.str()?;
        let count = g.u64()? as usize;
        let dtype = DType::from_code(g.u8()?).ok_or_else(|| CommError::Protocol("unknown dtype code".into()))?;
        let op = ReduceOp::from_code(g.u8()?).ok_or_else(|| CommError::Protocol("unknown reduce op code".into()))?;
        Ok(Self { name, count, dtype, op })
    }
}

/// One submission by one rank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CollectiveRequest {
    pub meta: TensorMeta,
    pub rank: usize,
    /// Position in the rank's own submission sequence.
    pub seq: u64,
}

/// Name → global execution index. Entries are append-only.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ResponseCache {
    index: HashMap<String, u32>,
    entries: Vec<TensorMeta>,
}

impl ResponseCache {
    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn meta(&self, index: u32) -> Option<&TensorMeta> {
        self.entries.get(index as usize)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends `meta` under the next index.
    pub fn insert(&mut self, meta: TensorMeta) -> Result<u32> {
        if self.index.contains_key(&meta.name) {
            return Err(CommError::Protocol(format!("tensor {} is already cached", meta.name)));
        }
        let i = self.entries.len() as u32;
        self.index.insert(meta.name.clone(), i);
        self.entries.push(meta);
        Ok(i)
    }
}

/// One rank's readiness report for a cycle.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReadyMsg {
    /// Bit `i` set: cached tensor `i` is pending on this rank.
    pub bitmap: Vec<u64>,
    /// Pending names not yet in the cache, each reported once.
    pub new: Vec<TensorMeta>,
}

impl ReadyMsg {
    pub fn set(&mut self, index: u32) {
        let (w, b) = (index as usize / 64, index % 64);
        if self.bitmap.len() <= w {
            self.bitmap.resize(w + 1, 0);
        }
        self.bitmap[w] |= 1 << b;
    }

    pub fn indices(&self) -> impl Iterator<Item = u32> + '_ {
        self.bitmap
            .iter()
            .enumerate()
            .flat_map(|(w, &bits)| (0..64).filter(move |b| bits >> b & 1 == 1).map(move |b| (w * 64 + b) as u32))
    }

    pub fn encode(&self) -> Frame {
        let mut p = Put::default();
        p.u32(self.bitmap.len() as u32);
        for &w in &self.bitmap {
            p.u64(w);
        }
        p.u32(self.new.len() as u32);
        for m in &self.new {
            m.put(&mut p);
        }
        Frame::new(MsgKind::ReadyBitmap, p.0)
    }

    pub fn decode(f: &Frame) -> Result<Self> {
        if f.kind != MsgKind::ReadyBitmap {
            return Err(CommError::Protocol(format!("expected a readiness bitmap, got {:?}", f.kind)));
        }
        let mut g = Get::new(&f.payload, "readiness");
        let words = g.u32()? as usize;
        let bitmap = (0..words).map(|_| g.u64()).collect::<Result<_>>()?;
        let n = g.u32()? as usize;
        let new = (0..n).map(|_| TensorMeta::get(&mut g)).collect::<Result<_>>()?;
        g.finish()?;
        Ok(Self { bitmap, new })
    }
}

/// The coordinator's answer for a cycle, identical on every rank.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Schedule {
    /// Newly cached tensors, in index order.
    pub assign: Vec<(u32, TensorMeta)>,
    /// Cache indices to reduce now, in execution order.
    pub execute: Vec<u32>,
    /// Nothing is outstanding on any rank once `execute` has run.
    pub done: bool,
    pub stall: Option<StallReport>,
}

impl Schedule {
    pub fn encode(&self) -> Frame {
        let mut p = Put::default();
        p.u32(self.assign.len() as u32);
        for (i, m) in &self.assign {
            p.u32(*i);
            m.put(&mut p);
        }
        p.u32(self.execute.len() as u32);
        for &i in &self.execute {
            p.u32(i);
        }
        p.u8(self.done as u8);
        match &self.stall {
            None => {
                p.u8(0);
            }
            Some(s) => {
                p.u8(1).u64(s.waited.as_micros() as u64).u32(s.missing.len() as u32);
                for (name, ranks) in &s.missing {
                    p.str(name).u32(ranks.len() as u32);
                    for &r in ranks {
                        p.u32(r as u32);
                    }
                }
            }
        }
        Frame::new(MsgKind::Schedule, p.0)
    }

    pub fn decode(f: &Frame) -> Result<Self> {
        if f.kind != MsgKind::Schedule {
            return Err(CommError::Protocol(format!("expected a schedule, got {:?}", f.kind)));
        }
        let mut g = Get::new(&f.payload, "schedule");
        let n = g.u32()? as usize;
        let assign = (0..n)
            .map(|_| Ok((g.u32()?, TensorMeta::get(&mut g)?)))
            .collect::<Result<_>>()?;
        let n = g.u32()? as usize;
        let execute = (0..n).map(|_| g.u32()).collect::<Result<_>>()?;
        let done = g.u8()? == 1;
        let stall = match g.u8()? {
            0 => None,
            _ => {
                let waited = Duration::from_micros(g.u64()?);
                let n = g.u32()? as usize;
                let mut missing = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    let name = g.str()?;
                    let k = g.u32()? as usize;
                    let ranks = (0..k).map(|_| Ok(g.u32()? as usize)).collect::<Result<_>>()?;
                    missing.push((name, ranks));
                }
                Some(StallReport { waited, missing })
            }
        };
        g.finish()?;
        Ok(Self {
            assign,
            execute,
            done,
            stall,
        })
    }
}

#[derive(Clone, Debug)]
struct Partial {
    meta: TensorMeta,
    submitted: Vec<bool>,
    first_seen: Instant,
}

/// Rank 0's negotiation state. Pure: it sees messages, not transports.
#[derive(Clone, Debug)]
pub struct Coordinator {
    world: usize,
    timeout: Duration,
    cache: ResponseCache,
    partial: BTreeMap<String, Partial>,
    /// Cached tensors some rank has pending, with when that was first seen.
    waiting: BTreeMap<u32, Instant>,
}

impl Coordinator {
    pub fn new(world: usize, timeout: Duration) -> Self {
        Self {
            world,
            timeout,
            cache: ResponseCache::default(),
            partial: BTreeMap::new(),
            waiting: BTreeMap::new(),
        }
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    /// Folds one cycle of reports (indexed by rank) into a schedule.
    pub fn cycle(&mut self, now: Instant, msgs: &[ReadyMsg]) -> Result<Schedule> {
        if msgs.len() != self.world {
            return Err(CommError::Protocol(format!("{} reports for a world of {}", msgs.len(), self.world)));
        }
        for (rank, msg) in msgs.iter().enumerate() {
            for meta in &msg.new {
                if self.cache.get(&meta.name).is_some() {
                    return Err(CommError::Protocol(format!(
                        "rank {rank} re-requests cached tensor {}",
                        meta.name
                    )));
                }
                let p = self.partial.entry(meta.name.clone()).or_insert_with(|| Partial {
                    meta: meta.clone(),
                    submitted: vec![false; self.world],
                    first_seen: now,
                });
                if p.meta != *meta {
                    return Err(CommError::Protocol(format!(
                        "tensor {}: rank {rank} submits {} {:?} elements ({:?}), others {} {:?} ({:?})",
                        meta.name, meta.count, meta.dtype, meta.op, p.meta.count, p.meta.dtype, p.meta.op
                    )));
                }
                if std::mem::replace(&mut p.submitted[rank], true) {
                    return Err(CommError::Protocol(format!("rank {rank} submitted {} twice", meta.name)));
                }
            }
        }
        let mut ready: BTreeMap<u32, usize> = BTreeMap::new();
        for (rank, msg) in msgs.iter().enumerate() {
            for i in msg.indices() {
                if self.cache.meta(i).is_none() {
                    return Err(CommError::Protocol(format!("rank {rank} reports unknown cache index {i}")));
                }
                *ready.entry(i).or_default() += 1;
                self.waiting.entry(i).or_insert(now);
            }
        }
        let mut execute: Vec<u32> = ready.iter().filter(|(_, &n)| n == self.world).map(|(&i, _)| i).collect();
        let complete: Vec<String> = self
            .partial
            .iter()
            .filter(|(_, p)| p.submitted.iter().all(|&s| s))
            .map(|(n, _)| n.clone())
            .collect();
        let mut assign = Vec::with_capacity(complete.len());
        for name in complete {
            let p = self.partial.remove(&name).expect("listed above");
            let i = self.cache.insert(p.meta.clone())?;
            assign.push((i, p.meta));
            execute.push(i);
        }
        for i in &execute {
            self.waiting.remove(i);
        }
        let mut missing = Vec::new();
        let mut oldest = Duration::ZERO;
        for (name, p) in &self.partial {
            let waited = now.saturating_duration_since(p.first_seen);
            if waited > self.timeout {
                oldest = oldest.max(waited);
                missing.push((name.clone(), (0..self.world).filter(|&r| !p.submitted[r]).collect()));
            }
        }
        for (&i, &since) in &self.waiting {
            let waited = now.saturating_duration_since(since);
            if waited > self.timeout {
                oldest = oldest.max(waited);
                let has = |r: usize| msgs[r].indices().any(|j| j == i);
                let meta = self.cache.meta(i).expect("cached");
                missing.push((meta.name.clone(), (0..self.world).filter(|&r| !has(r)).collect()));
            }
        }
        missing.sort();
        Ok(Schedule {
            assign,
            execute,
            done: self.partial.is_empty() && self.waiting.is_empty(),
            stall: (!missing.is_empty()).then_some(StallReport { waited: oldest, missing }),
        })
    }
}

/// Replays per-rank submission sequences through a coordinator, rank `r`
/// submitting its `k`-th name in cycle `k`, and returns the executed order.
pub fn negotiate_order(submissions: &[Vec<String>]) -> Result<Vec<String>> {
    let world = submissions.len();
    if world == 0 {
        return Err(CommError::Config("world size must be at least 1".into()));
    }
    let mut coord = Coordinator::new(world, Duration::MAX);
    let start = Instant::now();
    let mut order = Vec::new();
    let mut outstanding: Vec<Vec<String>> = vec![Vec::new(); world];
    let cycles = submissions.iter().map(Vec::len).max().unwrap_or(0);
    for cycle in 0.. {
        let msgs: Vec<ReadyMsg> = (0..world)
            .map(|r| {
                let mut m = ReadyMsg::default();
                if let Some(name) = submissions[r].get(cycle) {
                    outstanding[r].push(name.clone());
                    m.new.push(TensorMeta {
                        name: name.clone(),
                        count: 1,
                        dtype: DType::F32,
                        op: ReduceOp::Sum,
                    });
                }
                m
            })
            .collect();
        let mut msgs = msgs;
        for (r, m) in msgs.iter_mut().enumerate() {
            let fresh: Vec<String> = m.new.iter().map(|t| t.name.clone()).collect();
            for name in &outstanding[r] {
                if let (Some(i), false) = (coord.cache().get(name), fresh.contains(name)) {
                    m.set(i);
                }
            }
        }
        let s = coord.cycle(start + Duration::from_millis(cycle as u64), &msgs)?;
        for &i in &s.execute {
            let name = coord.cache().meta(i).expect("cached").name.clone();
            for o in &mut outstanding {
                o.retain(|n| *n != name);
            }
            order.push(name);
        }
        if s.done && cycle + 1 >= cycles {
            break;
        }
        if cycle > cycles + 1 {
            let missing = outstanding.iter().flatten().cloned().collect::<Vec<_>>();
            return Err(CommError::Protocol(format!("never completed: {missing:?}")));
        }
    }
    Ok(order)
}
