//! The per-rank communicator: submit named tensors, then tick the
//! negotiation until every rank has reduced the same set in the same order.

use std::thread;
use std::time::{Duration, Instant};

use crate::error::{CommError, Result};
use crate::frame::{Frame, Get, MsgKind, Put};
use crate::fusion::{fuse, DEFAULT_FUSION_BYTES};
use crate::negotiate::{Coordinator, ReadyMsg, ResponseCache, Schedule, TensorMeta};
use crate::ring::{ring_allreduce, Buffer, Element, ReduceOp};
use crate::stats::CommStats;
use crate::transport::{channel_mesh, tcp_mesh_local, Transport};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CommConfig {
    /// Minimum spacing of negotiation cycles while waiting on other ranks.
    pub cycle: Duration,
    pub fusion_bytes: usize,
    /// How long a tensor may stay incomplete before every rank fails with a
    /// stall report.
    pub stall_timeout: Duration,
    /// Bound on any single receive; a silent peer becomes a transport error.
    pub recv_timeout: Duration,
}

impl Default for CommConfig {
    fn default() -> Self {
        Self {
            cycle: Duration::from_millis(5),
            fusion_bytes: DEFAULT_FUSION_BYTES,
            stall_timeout: Duration::from_secs(30),
            recv_timeout: Duration::from_secs(120),
        }
    }
}

impl CommConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fusion_bytes == 0 {
            return Err(CommError::Config("fusion buffer must hold at least one byte".into()));
        }
        if self.stall_timeout.is_zero() || self.recv_timeout.is_zero() {
            return Err(CommError::Config("timeouts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
struct Pending {
    meta: TensorMeta,
    data: Buffer,
    reported: bool,
    since: Instant,
}

/// Result of one negotiation cycle.
#[derive(Debug, Default)]
pub struct Tick {
    /// Reduced tensors in execution order.
    pub completed: Vec<(String, Buffer)>,
    /// No rank has anything outstanding.
    pub done: bool,
}

const BROADCAST: u8 = 2;

pub struct Communicator {
    transport: Box<dyn Transport>,
    config: CommConfig,
    mirror: ResponseCache,
    pending: Vec<Pending>,
    coordinator: Option<Coordinator>,
    stats: CommStats,
    last_order: Vec<String>,
}

impl Communicator {
    pub fn new(transport: Box<dyn Transport>, config: CommConfig) -> Result<Self> {
        config.validate()?;
        let coordinator = (transport.rank() == 0).then(|| Coordinator::new(transport.world(), config.stall_timeout));
        Ok(Self {
            transport,
            config,
            mirror: ResponseCache::default(),
            pending: Vec::new(),
            coordinator,
            stats: CommStats::default(),
            last_order: Vec::new(),
        })
    }

    pub fn rank(&self) -> usize {
        self.transport.rank()
    }

    pub fn world(&self) -> usize {
        self.transport.world()
    }

    pub fn config(&self) -> &CommConfig {
        &self.config
    }

    pub fn transport(&self) -> &dyn Transport {
        self.transport.as_ref()
    }

    pub fn stats(&self) -> &CommStats {
        &self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats.reset();
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.mirror
    }

    /// Names reduced by the most recent [`Communicator::wait_all`], in order.
    pub fn last_order(&self) -> &[String] {
        &self.last_order
    }

    /// Queues `data` for reduction under `name`.
    pub fn submit<E: Element>(&mut self, name: &str, data: Vec<E>, op: ReduceOp) -> Result<()> {
        let meta = TensorMeta {
            name: name.to_string(),
            count: data.len(),
            dtype: E::DTYPE,
            op,
        };
        if self.pending.iter().any(|p| p.meta.name == name) {
            return Err(CommError::Protocol(format!("tensor {name} is already pending")));
        }
        if let Some(cached) = self.mirror.get(name).and_then(|i| self.mirror.meta(i)) {
            if *cached != meta {
                return Err(CommError::Protocol(format!(
                    "tensor {name} was negotiated as {} {:?} elements ({:?}), now {} {:?} ({op:?})",
                    cached.count, cached.dtype, cached.op, meta.count, meta.dtype
                )));
            }
        }
        self.pending.push(Pending {
            meta,
            data: E::wrap(data),
            reported: false,
            since: Instant::now(),
        });
        Ok(())
    }

    fn recv(&self, from: usize) -> Result<Frame> {
        self.transport.recv(from, self.config.recv_timeout)
    }

    fn negotiate(&mut self) -> Result<Schedule> {
        let started = Instant::now();
        let mut ready = ReadyMsg::default();
        for p in &mut self.pending {
            match self.mirror.get(&p.meta.name) {
                Some(i) => ready.set(i),
                None if !p.reported => {
                    ready.new.push(p.meta.clone());
                    p.reported = true;
                }
                None => {}
            }
        }
        let mut bytes = 0;
        let schedule = match self.coordinator.as_mut() {
            Some(coord) => {
                let mut msgs = vec![ready];
                for r in 1..self.transport.world() {
                    let f = self.transport.recv(r, self.config.recv_timeout)?;
                    bytes += f.wire_len();
                    msgs.push(ReadyMsg::decode(&f)?);
                }
                let s = coord.cycle(Instant::now(), &msgs)?;
                let f = s.encode();
                for r in 1..self.transport.world() {
                    bytes += f.wire_len();
                    self.transport.send(r, f.clone())?;
                }
                s
            }
            None => {
                let f = ready.encode();
                bytes += f.wire_len();
                self.transport.send(0, f)?;
                Schedule::decode(&self.recv(0)?)?
            }
        };
        for (i, meta) in &schedule.assign {
            let got = self.mirror.insert(meta.clone())?;
            if got != *i {
                return Err(CommError::Protocol(format!(
                    "rank {} cached {} at {got}, coordinator at {i}",
                    self.rank(),
                    meta.name
                )));
            }
        }
        self.stats.record("negotiate", bytes, started.elapsed().as_secs_f64());
        Ok(schedule)
    }

    /// One negotiation cycle plus the reductions it schedules.
    pub fn tick(&mut self) -> Result<Tick> {
        let schedule = self.negotiate()?;
        if let Some(report) = schedule.stall {
            return Err(CommError::Stall(report));
        }
        let metas = schedule
            .execute
            .iter()
            .map(|&i| {
                self.mirror
                    .meta(i)
                    .cloned()
                    .ok_or_else(|| CommError::Protocol(format!("schedule names unknown cache index {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut taken = Vec::with_capacity(metas.len());
        for m in &metas {
            let at = self.pending.iter().position(|p| p.meta.name == m.name).ok_or_else(|| {
                CommError::Protocol(format!("tensor {} scheduled but not pending on rank {}", m.name, self.rank()))
            })?;
            taken.push(self.pending.remove(at));
        }
        let mut completed = Vec::with_capacity(taken.len());
        let mut taken = taken.into_iter();
        for group in fuse(&metas, self.config.fusion_bytes)? {
            let members: Vec<Pending> = taken.by_ref().take(group.members.len()).collect();
            let started = Instant::now();
            let buffers: Vec<Buffer> = members.iter().map(|p| p.data.clone()).collect();
            let reduced = match group.dtype {
                crate::ring::DType::F32 => self.reduce_group::<f32>(buffers, group.op)?,
                crate::ring::DType::F64 => self.reduce_group::<f64>(buffers, group.op)?,
            };
            self.stats.record("ring", group.bytes, started.elapsed().as_secs_f64());
            for (p, data) in members.into_iter().zip(reduced) {
                self.stats.record("allreduce", p.meta.bytes(), p.since.elapsed().as_secs_f64());
                completed.push((p.meta.name, data));
            }
        }
        Ok(Tick {
            completed,
            done: schedule.done,
        })
    }

    fn reduce_group<E: Element>(&self, buffers: Vec<Buffer>, op: ReduceOp) -> Result<Vec<Buffer>> {
        let parts: Vec<Vec<E>> = buffers
            .into_iter()
            .map(|b| b.into_vec::<E>().ok_or_else(|| CommError::Protocol("fused tensors differ in dtype".into())))
            .collect::<Result<_>>()?;
        if parts.len() == 1 {
            let mut v = parts.into_iter().next().expect("one part");
            ring_allreduce(self.transport.as_ref(), &mut v, op, self.config.recv_timeout)?;
            return Ok(vec![E::wrap(v)]);
        }
        let mut fused: Vec<E> = Vec::with_capacity(parts.iter().map(Vec::len).sum());
        for p in &parts {
            fused.extend_from_slice(p);
        }
        ring_allreduce(self.transport.as_ref(), &mut fused, op, self.config.recv_timeout)?;
        let mut out = Vec::with_capacity(parts.len());
        let mut at = 0;
        for p in &parts {
            out.push(E::wrap(fused[at..at + p.len()].to_vec()));
            at += p.len();
        }
        Ok(out)
    }

    /// Ticks until no rank has anything outstanding; returns the reduced
    /// tensors in execution order.
    pub fn wait_all(&mut self) -> Result<Vec<(String, Buffer)>> {
        let mut out = Vec::new();
        loop {
            let started = Instant::now();
            let tick = self.tick()?;
            let progressed = !tick.completed.is_empty();
            out.extend(tick.completed);
            if tick.done {
                break;
            }
            if !progressed {
                thread::sleep(self.config.cycle.saturating_sub(started.elapsed()));
            }
        }
        self.last_order = out.iter().map(|(n, _)| n.clone()).collect();
        Ok(out)
    }

    /// Submits every tensor, waits, and returns them in submission order.
    pub fn allreduce<E: Element>(&mut self, tensors: Vec<(String, Vec<E>)>, op: ReduceOp) -> Result<Vec<(String, Vec<E>)>> {
        let names: Vec<String> = tensors.iter().map(|(n, _)| n.clone()).collect();
        for (name, data) in tensors {
            self.submit(&name, data, op)?;
        }
        let mut done = self.wait_all()?;
        names
            .into_iter()
            .map(|name| {
                let at = done
                    .iter()
                    .position(|(n, _)| *n == name)
                    .ok_or_else(|| CommError::Protocol(format!("tensor {name} was not reduced")))?;
                let (n, b) = done.swap_remove(at);
                let v = b.into_vec::<E>().ok_or_else(|| CommError::Protocol(format!("tensor {n} changed dtype")))?;
                Ok((n, v))
            })
            .collect()
    }

    /// Replaces `data` on every rank with the root's copy.
    pub fn broadcast<E: Element>(&mut self, root: usize, data: &mut Vec<E>) -> Result<()> {
        let world = self.world();
        if root >= world {
            return Err(CommError::Config(format!("broadcast root {root} outside 0..{world}")));
        }
        let started = Instant::now();
        let mut bytes = 0;
        if self.rank() == root {
            let mut p = Put::default();
            p.u8(BROADCAST).u64(data.len() as u64).u8(E::DTYPE.code());
            for &v in data.iter() {
                v.put(&mut p.0);
            }
            let f = Frame::new(MsgKind::DataChunk, p.0);
            for r in (0..world).filter(|&r| r != root) {
                bytes += f.wire_len();
                self.transport.send(r, f.clone())?;
            }
        } else {
            let f = self.recv(root)?;
            bytes = f.wire_len();
            if f.kind != MsgKind::DataChunk {
                return Err(CommError::Protocol(format!("expected broadcast data, got {:?}", f.kind)));
            }
            let mut g = Get::new(&f.payload, "broadcast");
            if g.u8()? != BROADCAST {
                return Err(CommError::Protocol("expected a broadcast frame".into()));
            }
            let n = g.u64()? as usize;
            if g.u8()? != E::DTYPE.code() {
                return Err(CommError::Protocol("broadcast dtype mismatch".into()));
            }
            let size = E::DTYPE.size();
            let raw = g.bytes(n.checked_mul(size).ok_or_else(|| CommError::Protocol("broadcast length overflows".into()))?)?;
            g.finish()?;
            *data = raw.chunks_exact(size).map(E::get).collect();
        }
        self.stats.record("broadcast", bytes, started.elapsed().as_secs_f64());
        Ok(())
    }

    /// Returns once every rank has reached the barrier.
    pub fn barrier(&mut self) -> Result<()> {
        if !self.pending.is_empty() {
            return Err(CommError::Config("barrier called with tensors still pending".into()));
        }
        let started = Instant::now();
        let order = std::mem::take(&mut self.last_order);
        let res = self.wait_all();
        self.last_order = order;
        let done = res?;
        if let Some((name, _)) = done.first() {
            return Err(CommError::Protocol(format!("tensor {name} completed inside a barrier")));
        }
        self.stats.record("barrier", 0, started.elapsed().as_secs_f64());
        Ok(())
    }

    /// Gathers every rank's counters on rank 0, indexed by rank; `None` elsewhere.
    pub fn gather_stats(&mut self) -> Result<Option<Vec<CommStats>>> {
        if self.rank() != 0 {
            self.transport.send(0, self.stats.encode())?;
            return Ok(None);
        }
        let mut all = vec![self.stats.clone()];
        for r in 1..self.world() {
            all.push(CommStats::decode(&self.recv(r)?)?);
        }
        Ok(Some(all))
    }
}

/// Communicators for `world` ranks joined by in-process channels.
pub fn channel_group(world: usize, config: CommConfig) -> Result<Vec<Communicator>> {
    channel_mesh(world)?
        .into_iter()
        .map(|t| Communicator::new(Box::new(t), config))
        .collect()
}

/// Communicators for `world` ranks joined by loopback TCP.
pub fn tcp_group_local(world: usize, config: CommConfig) -> Result<Vec<Communicator>> {
    tcp_mesh_local(world, config.recv_timeout)?
        .into_iter()
        .map(|t| Communicator::new(Box::new(t), config))
        .collect()
}

/// Runs `f` on every communicator in its own thread; results by rank.
pub fn run_group<R: Send>(group: Vec<Communicator>, f: impl Fn(&mut Communicator) -> R + Sync) -> Vec<R> {
    thread::scope(|s| {
        let handles: Vec<_> = group
            .into_iter()
            .map(|mut c| {
                let f = &f;
                s.spawn(move || f(&mut c))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("rank thread panicked")).collect()
    })
}
