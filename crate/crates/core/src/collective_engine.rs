//! Logical-step execution of ring schedules over per-chip payloads.
//!
//! Every ring step moves exactly one shard per member to its downstream
//! neighbor. Received shards are accumulated in ring order, so floating point
//! runs are reproducible bit for bit. Each directed link a message crosses
//! gets its own [`TraceRecord`].

use std::collections::HashSet;
use std::fmt::Debug;
use std::io::{self, Write};
use std::ops::{Add, Range};

use serde::Serialize;
use thiserror::Error;

use crate::ring_builder::{partition, ForwardKind, Phase, Ring, Schedule, Stage};
use crate::routing::Link;
use crate::topology::Mesh;

pub type Payload<T> = Vec<T>;

/// Values that can be summed by the engine.
pub trait Element: Copy + Default + Add<Output = Self> + PartialEq + Debug {}

impl<T: Copy + Default + Add<Output = T> + PartialEq + Debug> Element for T {}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("schedule was built for a different mesh")]
    MeshMismatch,
    #[error("expected {expected} payloads (one per alive chip), got {got}")]
    PayloadCount { expected: usize, got: usize },
    #[error("payload {index} has {got} elements, expected {expected}")]
    LengthMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("a ring needs at least 2 members, got {0}")]
    RingTooSmall(usize),
    #[error("no payloads given")]
    NoPayloads,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceStage {
    YellowAllReduce,
    Forward,
    ReduceScatter,
    AllGather,
    YellowBroadcast,
}

impl From<Stage> for TraceStage {
    fn from(s: Stage) -> Self {
        match s {
            Stage::YellowAllReduce => TraceStage::YellowAllReduce,
            Stage::Forward => TraceStage::Forward,
            Stage::ReduceScatter => TraceStage::ReduceScatter,
            Stage::AllGather => TraceStage::AllGather,
            Stage::YellowBroadcast => TraceStage::YellowBroadcast,
        }
    }
}

/// One message crossing one directed link.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub phase: usize,
    /// Step index within the phase; stages are numbered back to back.
    pub step: usize,
    pub stage: TraceStage,
    /// Phase-local ring id, absent for forwarding.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ring: Option<usize>,
    /// Phase-local forwarding edge id.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forward: Option<usize>,
    pub link: Link,
    /// Ring shard index moved; absent for whole-slice transfers.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shard: Option<usize>,
    pub elements: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExecutionTrace {
    pub records: Vec<TraceRecord>,
}

impl ExecutionTrace {
    pub fn total_bytes(&self) -> usize {
        self.records.iter().map(|r| r.bytes).sum()
    }

    pub fn phase_bytes(&self, phase: usize) -> usize {
        self.records
            .iter()
            .filter(|r| r.phase == phase)
            .map(|r| r.bytes)
            .sum()
    }

    /// (step, link) pairs used more than once by the given stage of a phase.
    pub fn link_conflicts(&self, phase: usize, stage: TraceStage) -> Vec<(usize, Link)> {
        let mut seen = HashSet::new();
        let mut dup = Vec::new();
        for r in self
            .records
            .iter()
            .filter(|r| r.phase == phase && r.stage == stage)
        {
            if !seen.insert((r.step, r.link)) {
                dup.push((r.step, r.link));
            }
        }
        dup
    }

    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

struct Recorder<'a> {
    trace: &'a mut ExecutionTrace,
    element_size: usize,
    phase: usize,
    stage: TraceStage,
}

impl Recorder<'_> {
    /// Empty shards move no data and are not recorded.
    fn message(
        &mut self,
        step: usize,
        ring: Option<usize>,
        forward: Option<usize>,
        links: &[Link],
        shard: Option<usize>,
        elements: usize,
    ) {
        if elements == 0 {
            return;
        }
        for &link in links {
            self.trace.records.push(TraceRecord {
                phase: self.phase,
                step,
                stage: self.stage,
                ring,
                forward,
                link,
                shard,
                elements,
                bytes: elements * self.element_size,
            });
        }
    }
}

/// A message produced during one synchronous step.
struct Message<T> {
    from_pos: usize,
    shard: usize,
    data: Vec<T>,
}

fn reduce_scatter_step<T: Element>(
    bufs: &mut [Vec<T>],
    members: &[usize],
    shards: &[Range<usize>],
    step: usize,
) -> Vec<Message<T>> {
    let r = members.len();
    let msgs: Vec<Message<T>> = (0..r)
        .map(|j| {
            let shard = (j + 2 * r - 1 - step % r) % r;
            Message {
                from_pos: j,
                shard,
                data: bufs[members[j]][shards[shard].clone()].to_vec(),
            }
        })
        .collect();
    for m in &msgs {
        let dst = &mut bufs[members[(m.from_pos + 1) % r]][shards[m.shard].clone()];
        for (acc, v) in dst.iter_mut().zip(&m.data) {
            *acc = *acc + *v;
        }
    }
    msgs
}

fn all_gather_step<T: Element>(
    bufs: &mut [Vec<T>],
    members: &[usize],
    shards: &[Range<usize>],
    step: usize,
) -> Vec<Message<T>> {
    let r = members.len();
    let msgs: Vec<Message<T>> = (0..r)
        .map(|j| {
            let shard = (j + r - step % r) % r;
            Message {
                from_pos: j,
                shard,
                data: bufs[members[j]][shards[shard].clone()].to_vec(),
            }
        })
        .collect();
    for m in &msgs {
        bufs[members[(m.from_pos + 1) % r]][shards[m.shard].clone()].copy_from_slice(&m.data);
    }
    msgs
}

fn check_lengths<T>(payloads: &[Vec<T>]) -> Result<usize, EngineError> {
    let first = payloads.first().ok_or(EngineError::NoPayloads)?.len();
    if let Some((index, p)) = payloads.iter().enumerate().find(|(_, p)| p.len() != first) {
        return Err(EngineError::LengthMismatch {
            index,
            expected: first,
            got: p.len(),
        });
    }
    Ok(first)
}

/// Ring reduce-scatter over `payloads` given in ring order. After `R - 1`
/// steps member `i` owns shard `i`, summed over all members.
pub fn ring_reduce_scatter<T: Element>(
    payloads: &[Payload<T>],
) -> Result<Vec<Vec<T>>, EngineError> {
    let r = payloads.len();
    if r < 2 {
        return Err(EngineError::RingTooSmall(r));
    }
    let len = check_lengths(payloads)?;
    let mut bufs = payloads.to_vec();
    let members: Vec<usize> = (0..r).collect();
    let shards = partition(0..len, r);
    for step in 0..r - 1 {
        reduce_scatter_step(&mut bufs, &members, &shards, step);
    }
    Ok(bufs
        .iter()
        .zip(&shards)
        .map(|(b, s)| b[s.clone()].to_vec())
        .collect())
}

/// Ring all-gather: member `i` starts with shard `i`, every member ends with
/// the concatenation of all shards.
pub fn ring_all_gather<T: Element>(shards: &[Vec<T>]) -> Result<Vec<Payload<T>>, EngineError> {
    let r = shards.len();
    if r < 2 {
        return Err(EngineError::RingTooSmall(r));
    }
    let len: usize = shards.iter().map(Vec::len).sum();
    let mut ranges = Vec::with_capacity(r);
    let mut start = 0;
    for s in shards {
        ranges.push(start..start + s.len());
        start += s.len();
    }
    let mut bufs: Vec<Vec<T>> = shards
        .iter()
        .zip(&ranges)
        .map(|(s, range)| {
            let mut b = vec![T::default(); len];
            b[range.clone()].copy_from_slice(s);
            b
        })
        .collect();
    let members: Vec<usize> = (0..r).collect();
    for step in 0..r - 1 {
        all_gather_step(&mut bufs, &members, &ranges, step);
    }
    Ok(bufs)
}

/// Elementwise sum over every payload.
pub fn oracle_allreduce<T: Element>(payloads: &[Payload<T>]) -> Result<Payload<T>, EngineError> {
    let len = check_lengths(payloads)?;
    let mut out = vec![T::default(); len];
    for p in payloads {
        for (acc, v) in out.iter_mut().zip(p) {
            *acc = *acc + *v;
        }
    }
    Ok(out)
}

struct RingPlan<'a> {
    id: usize,
    ring: &'a Ring,
    members: Vec<usize>,
    range: Range<usize>,
    shards: Vec<Range<usize>>,
}

fn plans<'a>(
    mesh: &Mesh,
    rings: impl Iterator<Item = (usize, &'a Ring)>,
    element_count: usize,
) -> Vec<RingPlan<'a>> {
    rings
        .map(|(id, ring)| {
            let range = ring.slice.resolve(element_count);
            RingPlan {
                id,
                ring,
                members: ring
                    .members
                    .iter()
                    .map(|c| mesh.alive_index(*c).expect("validated ring member"))
                    .collect(),
                shards: partition(range.clone(), ring.len()),
                range,
            }
        })
        .collect()
}

type StepFn<T> = fn(&mut [Vec<T>], &[usize], &[Range<usize>], usize) -> Vec<Message<T>>;

fn run_rings<T: Element>(
    bufs: &mut [Vec<T>],
    plans: &[RingPlan<'_>],
    base: usize,
    rec: &mut Recorder<'_>,
    step_fn: StepFn<T>,
) -> usize {
    let steps = plans.iter().map(|p| p.members.len() - 1).max().unwrap_or(0);
    for s in 0..steps {
        for p in plans.iter().filter(|p| s + 1 < p.members.len()) {
            for m in step_fn(bufs, &p.members, &p.shards, s) {
                let hop = &p.ring.hops[m.from_pos];
                rec.message(
                    base + s,
                    Some(p.id),
                    None,
                    &hop.links,
                    Some(m.shard),
                    m.data.len(),
                );
            }
        }
    }
    steps
}

/// Member 0 pushes the ring's whole slice around the ring, one hop per step.
fn broadcast_rings<T: Element>(
    bufs: &mut [Vec<T>],
    plans: &[RingPlan<'_>],
    base: usize,
    rec: &mut Recorder<'_>,
) -> usize {
    let steps = plans.iter().map(|p| p.members.len() - 1).max().unwrap_or(0);
    for s in 0..steps {
        for p in plans.iter().filter(|p| s + 1 < p.members.len()) {
            let data = bufs[p.members[s]][p.range.clone()].to_vec();
            bufs[p.members[s + 1]][p.range.clone()].copy_from_slice(&data);
            rec.message(
                base + s,
                Some(p.id),
                None,
                &p.ring.hops[s].links,
                None,
                data.len(),
            );
        }
    }
    steps
}

fn run_forwarding<T: Element>(
    bufs: &mut [Vec<T>],
    mesh: &Mesh,
    phase: &Phase,
    element_count: usize,
    base: usize,
    rec: &mut Recorder<'_>,
) {
    for (id, f) in phase.forwarding.iter().enumerate() {
        let range = f.shard_selector.resolve(element_count);
        let from = mesh
            .alive_index(f.from)
            .expect("validated forwarding source");
        let to = mesh.alive_index(f.to).expect("validated forwarding target");
        let data = bufs[from][range.clone()].to_vec();
        let dst = &mut bufs[to][range];
        match f.kind {
            ForwardKind::Contribute => {
                for (acc, v) in dst.iter_mut().zip(&data) {
                    *acc = *acc + *v;
                }
            }
            ForwardKind::Deliver => dst.copy_from_slice(&data),
        }
        rec.message(base, None, Some(id), &f.route.links, None, data.len());
    }
}

/// Runs `schedule` on `payloads`, given in [`Mesh::alive`] order. Returns the
/// per-chip results in the same order plus the full movement trace.
pub fn execute<T: Element>(
    mesh: &Mesh,
    schedule: &Schedule,
    payloads: &[Payload<T>],
    element_size: usize,
) -> Result<(Vec<Payload<T>>, ExecutionTrace), EngineError> {
    if schedule.mesh != *mesh {
        return Err(EngineError::MeshMismatch);
    }
    if payloads.len() != mesh.alive_count() {
        return Err(EngineError::PayloadCount {
            expected: mesh.alive_count(),
            got: payloads.len(),
        });
    }
    let element_count = check_lengths(payloads)?;
    let mut bufs = payloads.to_vec();
    let mut trace = ExecutionTrace::default();

    for (pi, phase) in schedule.phases.iter().enumerate() {
        let main = plans(mesh, phase.main_rings(), element_count);
        let yellow = plans(mesh, phase.yellow_rings(), element_count);
        let mut base = 0;
        for stage in phase.stages() {
            let mut rec = Recorder {
                trace: &mut trace,
                element_size,
                phase: pi,
                stage: stage.into(),
            };
            match stage {
                Stage::YellowAllReduce => {
                    base += run_rings(&mut bufs, &yellow, base, &mut rec, reduce_scatter_step);
                    base += run_rings(&mut bufs, &yellow, base, &mut rec, all_gather_step);
                }
                Stage::Forward => {
                    run_forwarding(&mut bufs, mesh, phase, element_count, base, &mut rec);
                    base += 1;
                }
                Stage::ReduceScatter => {
                    base += run_rings(&mut bufs, &main, base, &mut rec, reduce_scatter_step)
                }
                Stage::AllGather => {
                    base += run_rings(&mut bufs, &main, base, &mut rec, all_gather_step)
                }
                Stage::YellowBroadcast => {
                    base += broadcast_rings(&mut bufs, &yellow, base, &mut rec)
                }
            }
        }
        debug_assert_eq!(base, phase.ring_steps());
    }
    Ok((bufs, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ring_builder::{
        build_1d_hamiltonian, build_row_pair, build_row_pair_ft, build_two_color,
    };
    use crate::topology::{build_mesh, Coord, FailedRegion, MeshConfig};

    #[test]
    fn reduce_scatter_uniform_ring() {
        let owned = ring_reduce_scatter(&vec![vec![1i64; 4]; 4]).unwrap();
        assert_eq!(owned, vec![vec![4], vec![4], vec![4], vec![4]]);
    }

    #[test]
    fn two_member_ring_by_hand() {
        let (a, b, c, d) = (3i64, 5, 11, 17);
        let owned = ring_reduce_scatter(&[vec![a, b], vec![c, d]]).unwrap();
        assert_eq!(owned, vec![vec![a + c], vec![b + d]]);
        let full = ring_all_gather(&owned).unwrap();
        assert_eq!(full, vec![vec![a + c, b + d]; 2]);
    }

    #[test]
    fn uneven_shards_gather_to_full_length() {
        let shards = vec![vec![1i64, 2], vec![3, 4], vec![5, 6], vec![7]];
        let full = ring_all_gather(&shards).unwrap();
        assert!(full.iter().all(|p| p == &vec![1, 2, 3, 4, 5, 6, 7]));
    }

    #[test]
    fn ring_errors() {
        assert_eq!(
            ring_reduce_scatter(&[vec![1i64]]),
            Err(EngineError::RingTooSmall(1))
        );
        assert!(matches!(
            ring_reduce_scatter(&[vec![1i64, 2], vec![3]]),
            Err(EngineError::LengthMismatch { index: 1, .. })
        ));
        assert_eq!(
            oracle_allreduce(&[vec![1i64, 2], vec![3, 4]]).unwrap(),
            vec![4, 6]
        );
        assert_eq!(oracle_allreduce(&[vec![9i64]]).unwrap(), vec![9]);
        assert_eq!(oracle_allreduce::<i64>(&[]), Err(EngineError::NoPayloads));
    }

    #[test]
    fn all_ones_row_pair_8x8() {
        let mesh = Mesh::full(8, 8).unwrap();
        let s = build_row_pair(&mesh).unwrap();
        let (out, trace) = execute(&mesh, &s, &vec![vec![1i64; 64]; 64], 4).unwrap();
        assert!(out.iter().all(|p| p.iter().all(|&v| v == 64)));
        assert!(trace
            .link_conflicts(0, TraceStage::ReduceScatter)
            .is_empty());
    }

    #[test]
    fn ft_forwarding_reaches_yellow_chips() {
        let mesh = build_mesh(
            MeshConfig::new(8, 8),
            vec![FailedRegion::new(Coord::new(2, 2), 2, 2)],
        )
        .unwrap();
        let s = build_row_pair_ft(&mesh).unwrap();
        let payloads: Vec<Vec<i64>> = (0..mesh.alive_count() as i64)
            .map(|i| vec![i, -i, 1])
            .collect();
        let expected = oracle_allreduce(&payloads).unwrap();
        let (out, trace) = execute(&mesh, &s, &payloads, 8).unwrap();
        assert!(out.iter().all(|p| *p == expected));
        assert!(trace.records.iter().any(|r| r.stage == TraceStage::Forward));
    }

    #[test]
    fn float_runs_are_bit_identical() {
        let mesh = Mesh::full(4, 4).unwrap();
        let s = build_two_color(&mesh).unwrap();
        let payloads: Vec<Vec<f64>> = (0..16)
            .map(|i| {
                (0..9)
                    .map(|j| 0.1 * (i * 9 + j) as f64 + 1e-3 / (j + 1) as f64)
                    .collect()
            })
            .collect();
        let (a, ta) = execute(&mesh, &s, &payloads, 8).unwrap();
        let (b, tb) = execute(&mesh, &s, &payloads, 8).unwrap();
        let bits = |v: &Vec<Vec<f64>>| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(ta, tb);
    }

    #[test]
    fn execute_rejects_bad_inputs() {
        let mesh = Mesh::full(4, 4).unwrap();
        let other = Mesh::full(4, 2).unwrap();
        let s = build_1d_hamiltonian(&other).unwrap();
        assert_eq!(
            execute(&mesh, &s, &vec![vec![0i64]; 16], 4).unwrap_err(),
            EngineError::MeshMismatch
        );
        let s = build_1d_hamiltonian(&mesh).unwrap();
        assert!(matches!(
            execute(&mesh, &s, &vec![vec![0i64]; 15], 4),
            Err(EngineError::PayloadCount { .. })
        ));
        let mut p = vec![vec![0i64; 3]; 16];
        p[7].pop();
        assert!(matches!(
            execute(&mesh, &s, &p, 4),
            Err(EngineError::LengthMismatch { index: 7, .. })
        ));
    }

    #[test]
    fn trace_jsonl_one_line_per_record() {
        let mesh = Mesh::full(2, 2).unwrap();
        let s = build_1d_hamiltonian(&mesh).unwrap();
        let (_, trace) = execute(&mesh, &s, &vec![vec![1i64, 2, 3, 4]; 4], 4).unwrap();
        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), trace.records.len());
        assert!(text
            .lines()
            .next()
            .unwrap()
            .starts_with("{\"phase\":0,\"step\":0"));
    }
}
