//! Ring schedules for the five allreduce schemes.
//!
//! A [`Schedule`] is an ordered list of [`Phase`]s. Each phase holds the rings
//! that run in it, the role they play (reduce-scatter or all-gather) and any
//! forwarding edges between small yellow rings and full blue rings.
//!
//! Inside a phase work runs in stages, see [`Phase::stages`]:
//!
//! ```text
//! reduce-scatter:  yellow allreduce -> forward (contribute) -> main reduce-scatter
//! all-gather:      main all-gather  -> forward (deliver)    -> yellow broadcast
//! ```

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt::{self, Write as _};
use std::ops::Range;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::routing::{self, Route, RoutingError};
use crate::topology::{classify_region, Coord, FailedRegion, Mesh};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Blue,
    Yellow,
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        })
    }
}

/// Splits `range` into `parts` contiguous shards; the first `len % parts`
/// shards are one element longer.
pub fn partition(range: Range<usize>, parts: usize) -> Vec<Range<usize>> {
    assert!(parts > 0, "cannot partition into zero shards");
    let len = range.len();
    let (base, extra) = (len / parts, len % parts);
    let mut start = range.start;
    (0..parts)
        .map(|i| {
            let size = base + usize::from(i < extra);
            let shard = start..start + size;
            start += size;
            shard
        })
        .collect()
}

/// Nested shard selection: each `(index, parts)` step keeps shard `index` of a
/// `parts`-way [`partition`] of what the previous steps selected.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SlicePath(pub Vec<(usize, usize)>);

impl SlicePath {
    pub fn whole() -> Self {
        Self(Vec::new())
    }

    pub fn child(&self, index: usize, parts: usize) -> Self {
        let mut steps = self.0.clone();
        steps.push((index, parts));
        Self(steps)
    }

    pub fn resolve(&self, element_count: usize) -> Range<usize> {
        self.0
            .iter()
            .fold(0..element_count, |range, &(index, parts)| {
                partition(range, parts)[index].clone()
            })
    }

    /// Nominal share of the payload, ignoring uneven rounding.
    pub fn fraction(&self) -> Ratio<u64> {
        self.0
            .iter()
            .fold(Ratio::from_integer(1), |acc, &(_, parts)| {
                acc / parts as u64
            })
    }
}

/// Cyclic sequence of alive chips. `hops[j]` carries traffic from `members[j]`
/// to `members[(j + 1) % len]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Ring {
    pub members: Vec<Coord>,
    pub color: Color,
    pub slice: SlicePath,
    pub hops: Vec<Route>,
}

impl Ring {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn payload_fraction(&self) -> Ratio<u64> {
        self.slice.fraction()
    }

    fn validate(&self, mesh: &Mesh) -> Result<(), String> {
        let n = self.members.len();
        if n < 2 {
            return Err(format!("ring has {n} members, need at least 2"));
        }
        let distinct: HashSet<_> = self.members.iter().collect();
        if distinct.len() != n {
            return Err("ring members are not distinct".into());
        }
        if self.hops.len() != n {
            return Err("ring hop count differs from member count".into());
        }
        for (j, hop) in self.hops.iter().enumerate() {
            let (a, b) = (self.members[j], self.members[(j + 1) % n]);
            validate_route(mesh, hop, a, b)?;
        }
        Ok(())
    }
}

fn validate_route(mesh: &Mesh, route: &Route, a: Coord, b: Coord) -> Result<(), String> {
    if route.src != a || route.dst != b {
        return Err(format!(
            "route {}->{} does not join {a} and {b}",
            route.src, route.dst
        ));
    }
    let mut at = a;
    for l in &route.links {
        if l.from != at {
            return Err(format!("route {a}->{b} is not contiguous at {at}"));
        }
        at = l.to;
    }
    if at != b {
        return Err(format!("route {a}->{b} ends at {at}"));
    }
    if let Some(dead) = route.chips().find(|c| !mesh.is_alive(*c)) {
        return Err(format!("route {a}->{b} crosses failed chip {dead}"));
    }
    if !route.is_simple() {
        return Err(format!("route {a}->{b} revisits a chip"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardKind {
    /// Yellow chip adds its block sum into a blue chip before reduce-scatter.
    Contribute,
    /// Blue chip hands the final result back to a yellow chip after all-gather.
    Deliver,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ForwardingEdge {
    pub from: Coord,
    pub to: Coord,
    pub route: Route,
    pub shard_selector: SlicePath,
    pub kind: ForwardKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    ReduceScatter,
    AllGather,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    X,
    Y,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    YellowAllReduce,
    Forward,
    ReduceScatter,
    AllGather,
    YellowBroadcast,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Phase {
    pub role: Role,
    pub dimension: Dimension,
    pub rings: Vec<Ring>,
    pub forwarding: Vec<ForwardingEdge>,
}

impl Phase {
    fn new(role: Role, dimension: Dimension, rings: Vec<Ring>) -> Self {
        Self {
            role,
            dimension,
            rings,
            forwarding: Vec::new(),
        }
    }

    /// Red and blue rings, with their phase-local ring ids.
    pub fn main_rings(&self) -> impl Iterator<Item = (usize, &Ring)> {
        self.rings
            .iter()
            .enumerate()
            .filter(|(_, r)| r.color != Color::Yellow)
    }

    pub fn yellow_rings(&self) -> impl Iterator<Item = (usize, &Ring)> {
        self.rings
            .iter()
            .enumerate()
            .filter(|(_, r)| r.color == Color::Yellow)
    }

    /// Serialized stages this phase runs, skipping empty ones.
    pub fn stages(&self) -> Vec<Stage> {
        let has_yellow = self.yellow_rings().next().is_some();
        let has_main = self.main_rings().next().is_some();
        let has_fwd = !self.forwarding.is_empty();
        let order = match self.role {
            Role::ReduceScatter => [
                (has_yellow, Stage::YellowAllReduce),
                (has_fwd, Stage::Forward),
                (has_main, Stage::ReduceScatter),
            ],
            Role::AllGather => [
                (has_main, Stage::AllGather),
                (has_fwd, Stage::Forward),
                (has_yellow, Stage::YellowBroadcast),
            ],
        };
        order
            .into_iter()
            .filter(|(on, _)| *on)
            .map(|(_, s)| s)
            .collect()
    }

    /// Ring steps each stage takes; stages run back to back.
    pub fn stage_steps(&self, stage: Stage) -> usize {
        let longest = |it: &mut dyn Iterator<Item = (usize, &Ring)>| {
            it.map(|(_, r)| r.len() - 1).max().unwrap_or(0)
        };
        match stage {
            Stage::YellowAllReduce => 2 * longest(&mut self.yellow_rings()),
            Stage::YellowBroadcast => longest(&mut self.yellow_rings()),
            Stage::ReduceScatter | Stage::AllGather => longest(&mut self.main_rings()),
            Stage::Forward => usize::from(!self.forwarding.is_empty()),
        }
    }

    pub fn ring_steps(&self) -> usize {
        self.stages().into_iter().map(|s| self.stage_steps(s)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "OneD")]
    OneD,
    #[serde(rename = "OneD_FT")]
    OneDFt,
    #[serde(rename = "TwoColor")]
    TwoColor,
    #[serde(rename = "RowPair")]
    RowPair,
    #[serde(rename = "RowPair_FT")]
    RowPairFt,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::OneD,
        Scheme::OneDFt,
        Scheme::TwoColor,
        Scheme::RowPair,
        Scheme::RowPairFt,
    ];

    pub fn is_fault_tolerant(self) -> bool {
        matches!(self, Scheme::OneDFt | Scheme::RowPairFt)
    }

    /// The same family on a healthy mesh.
    pub fn full_counterpart(self) -> Scheme {
        match self {
            Scheme::OneDFt => Scheme::OneD,
            Scheme::RowPairFt => Scheme::RowPair,
            other => other,
        }
    }

    pub fn build(self, mesh: &Mesh) -> Result<Schedule, BuildError> {
        match self {
            Scheme::OneD => build_1d_hamiltonian(mesh),
            Scheme::OneDFt => build_1d_ft(mesh),
            Scheme::TwoColor => build_two_color(mesh),
            Scheme::RowPair => build_row_pair(mesh),
            Scheme::RowPairFt => build_row_pair_ft(mesh),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::OneD => "OneD",
            Scheme::OneDFt => "OneD_FT",
            Scheme::TwoColor => "TwoColor",
            Scheme::RowPair => "RowPair",
            Scheme::RowPairFt => "RowPair_FT",
        })
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, '_' | '-'))
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "oned" | "1d" => Ok(Scheme::OneD),
            "onedft" | "1dft" => Ok(Scheme::OneDFt),
            "twocolor" | "2d" => Ok(Scheme::TwoColor),
            "rowpair" => Ok(Scheme::RowPair),
            "rowpairft" => Ok(Scheme::RowPairFt),
            _ => Err(format!(
                "unknown scheme '{s}' (expected OneD, OneD_FT, TwoColor, RowPair, RowPair_FT)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Schedule {
    pub scheme: Scheme,
    pub phases: Vec<Phase>,
    pub mesh: Mesh,
}

impl Schedule {
    /// Every route the schedule sends traffic over: ring hops and forwarding.
    pub fn routes(&self) -> impl Iterator<Item = &Route> {
        self.phases.iter().flat_map(|p| {
            p.rings
                .iter()
                .flat_map(|r| r.hops.iter())
                .chain(p.forwarding.iter().map(|f| &f.route))
        })
    }

    pub fn ring_steps(&self) -> usize {
        self.phases.iter().map(Phase::ring_steps).sum()
    }

    /// Checks the structural invariants of every phase.
    pub fn validate(&self) -> Result<(), BuildError> {
        let bad = |phase: usize, msg: String| BuildError::Invalid { phase, msg };
        for (pi, phase) in self.phases.iter().enumerate() {
            let mut seen: HashSet<(Color, Coord)> = HashSet::new();
            for ring in &phase.rings {
                ring.validate(&self.mesh).map_err(|m| bad(pi, m))?;
                for &m in &ring.members {
                    if !seen.insert((ring.color, m)) {
                        return Err(bad(pi, format!("{m} is in two {} rings", ring.color)));
                    }
                }
            }
            let blue: HashSet<Coord> = phase
                .rings
                .iter()
                .filter(|r| r.color == Color::Blue)
                .flat_map(|r| r.members.iter().copied())
                .collect();
            let yellow: HashSet<Coord> = phase
                .yellow_rings()
                .flat_map(|(_, r)| r.members.iter().copied())
                .collect();
            for f in &phase.forwarding {
                validate_route(&self.mesh, &f.route, f.from, f.to).map_err(|m| bad(pi, m))?;
                let (y, b) = match f.kind {
                    ForwardKind::Contribute => (f.from, f.to),
                    ForwardKind::Deliver => (f.to, f.from),
                };
                let role_ok = matches!(
                    (f.kind, phase.role),
                    (ForwardKind::Contribute, Role::ReduceScatter)
                        | (ForwardKind::Deliver, Role::AllGather)
                );
                if !role_ok || !yellow.contains(&y) || blue.contains(&y) || !blue.contains(&b) {
                    return Err(bad(
                        pi,
                        format!("forwarding edge {}->{} is malformed", f.from, f.to),
                    ));
                }
                if f.route.len() > 2 {
                    return Err(bad(
                        pi,
                        format!("forwarding edge {}->{} is longer than 2 hops", f.from, f.to),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BuildError {
    #[error("{scheme} needs a mesh without failures; use the fault-tolerant variant")]
    HasFailures { scheme: Scheme },
    #[error("{scheme} needs exactly one failed region, mesh has {count}")]
    RegionCount { scheme: Scheme, count: usize },
    #[error("{scheme} cannot use failed region {region}: {reason}")]
    NotEligible {
        scheme: Scheme,
        region: FailedRegion,
        reason: String,
    },
    #[error("a {width}x{height} mesh with both dimensions odd has no Hamiltonian cycle")]
    OddByOdd { width: usize, height: usize },
    #[error("{scheme} needs {requirement}, mesh is {width}x{height}")]
    MeshShape {
        scheme: Scheme,
        requirement: &'static str,
        width: usize,
        height: usize,
    },
    #[error("the failed region splits the alive chips apart")]
    Disconnected,
    #[error("failed region leaves no row pair free of failures")]
    NoFullRings,
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error("phase {phase}: {msg}")]
    Invalid { phase: usize, msg: String },
}

fn ring_with<F>(
    members: Vec<Coord>,
    color: Color,
    slice: SlicePath,
    mut route: F,
) -> Result<Ring, BuildError>
where
    F: FnMut(Coord, Coord) -> Result<Route, RoutingError>,
{
    let n = members.len();
    let hops = (0..n)
        .map(|j| route(members[j], members[(j + 1) % n]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Ring {
        members,
        color,
        slice,
        hops,
    })
}

fn dor_ring(
    mesh: &Mesh,
    members: Vec<Coord>,
    color: Color,
    slice: SlicePath,
) -> Result<Ring, BuildError> {
    ring_with(members, color, slice, |a, b| {
        routing::dimension_order_route(mesh, a, b)
    })
}

fn finish(scheme: Scheme, mesh: &Mesh, phases: Vec<Phase>) -> Result<Schedule, BuildError> {
    let schedule = Schedule {
        scheme,
        phases,
        mesh: mesh.clone(),
    };
    schedule.validate()?;
    Ok(schedule)
}

fn two_phase_single_ring(scheme: Scheme, mesh: &Mesh, ring: Ring) -> Result<Schedule, BuildError> {
    let phases = vec![
        Phase::new(Role::ReduceScatter, Dimension::Mixed, vec![ring.clone()]),
        Phase::new(Role::AllGather, Dimension::Mixed, vec![ring]),
    ];
    finish(scheme, mesh, phases)
}

/// Boustrophedon cycle: out along row 0, snaking through the remaining rows
/// over columns 1.., then home up column 0. Needs an even row count.
fn serpentine(width: usize, height: usize) -> Vec<Coord> {
    let mut cycle = vec![Coord::new(0, 0)];
    for y in 0..height {
        if y % 2 == 0 {
            cycle.extend((1..width).map(|x| Coord::new(x, y)));
        } else {
            cycle.extend((1..width).rev().map(|x| Coord::new(x, y)));
        }
    }
    cycle.extend((1..height).rev().map(|y| Coord::new(0, y)));
    cycle
}

pub fn build_1d_hamiltonian(mesh: &Mesh) -> Result<Schedule, BuildError> {
    let scheme = Scheme::OneD;
    if mesh.has_failures() {
        return Err(BuildError::HasFailures { scheme });
    }
    let (w, h) = (mesh.width(), mesh.height());
    let members = if w * h < 2 {
        return Err(BuildError::MeshShape {
            scheme,
            requirement: "at least two chips",
            width: w,
            height: h,
        });
    } else if w == 1 || h == 1 {
        mesh.alive().to_vec()
    } else if h % 2 == 0 {
        serpentine(w, h)
    } else if w % 2 == 0 {
        serpentine(h, w)
            .into_iter()
            .map(|c| Coord::new(c.y, c.x))
            .collect()
    } else {
        return Err(BuildError::OddByOdd {
            width: w,
            height: h,
        });
    };
    let ring = dor_ring(mesh, members, Color::Red, SlicePath::whole())?;
    two_phase_single_ring(scheme, mesh, ring)
}

/// Hamiltonian cycle over alive chips from a spanning tree of 2x2 blocks: each
/// block is a 4-cycle and every tree edge splices two neighboring cycles.
fn block_tree_cycle(mesh: &Mesh) -> Result<Vec<Coord>, BuildError> {
    let (bw, bh) = (mesh.width() / 2, mesh.height() / 2);
    let block_alive = |bx: usize, by: usize| mesh.is_alive(Coord::new(2 * bx, 2 * by));
    let start = (0..bh)
        .flat_map(|by| (0..bw).map(move |bx| (bx, by)))
        .find(|&(bx, by)| block_alive(bx, by))
        .ok_or(BuildError::Disconnected)?;

    let mut visited = vec![false; bw * bh];
    let mut tree = Vec::new();
    let mut queue = VecDeque::from([start]);
    visited[start.1 * bw + start.0] = true;
    while let Some((bx, by)) = queue.pop_front() {
        let mut next = Vec::with_capacity(4);
        if bx > 0 {
            next.push((bx - 1, by));
        }
        if bx + 1 < bw {
            next.push((bx + 1, by));
        }
        if by > 0 {
            next.push((bx, by - 1));
        }
        if by + 1 < bh {
            next.push((bx, by + 1));
        }
        for (nx, ny) in next {
            if block_alive(nx, ny) && !visited[ny * bw + nx] {
                visited[ny * bw + nx] = true;
                tree.push(((bx, by), (nx, ny)));
                queue.push_back((nx, ny));
            }
        }
    }
    let alive_blocks = (0..bh)
        .flat_map(|by| (0..bw).map(move |bx| (bx, by)))
        .filter(|&(bx, by)| block_alive(bx, by))
        .count();
    if tree.len() + 1 != alive_blocks {
        return Err(BuildError::Disconnected);
    }

    let corners = |bx: usize, by: usize| {
        let (x, y) = (2 * bx, 2 * by);
        (
            Coord::new(x, y),
            Coord::new(x + 1, y),
            Coord::new(x, y + 1),
            Coord::new(x + 1, y + 1),
        )
    };
    let key = |a: Coord, b: Coord| if a <= b { (a, b) } else { (b, a) };
    let mut edges: HashSet<(Coord, Coord)> = HashSet::new();
    for by in 0..bh {
        for bx in 0..bw {
            if block_alive(bx, by) {
                let (tl, tr, bl, br) = corners(bx, by);
                edges.extend([key(tl, tr), key(tr, br), key(br, bl), key(bl, tl)]);
            }
        }
    }
    for (a, b) in tree {
        let (a, b) = if a.1 < b.1 || (a.1 == b.1 && a.0 < b.0) {
            (a, b)
        } else {
            (b, a)
        };
        let (_, atr, abl, abr) = corners(a.0, a.1);
        let (btl, btr, bbl, _) = corners(b.0, b.1);
        // Drop the facing side of each block and join the loose ends across.
        let [(a0, a1), (b0, b1)] = if a.1 == b.1 {
            [(atr, abr), (btl, bbl)]
        } else {
            [(abl, abr), (btl, btr)]
        };
        edges.remove(&key(a0, a1));
        edges.remove(&key(b0, b1));
        edges.insert(key(a0, b0));
        edges.insert(key(a1, b1));
    }

    let mut adj: BTreeMap<Coord, Vec<Coord>> = BTreeMap::new();
    for (a, b) in edges {
        adj.entry(a).or_default().push(b);
        adj.entry(b).or_default().push(a);
    }
    let first = Coord::new(2 * start.0, 2 * start.1);
    let mut cycle = vec![first];
    let mut prev = first;
    let mut cur = Coord::new(first.x + 1, first.y);
    while cur != first {
        cycle.push(cur);
        let nbrs = &adj[&cur];
        debug_assert_eq!(nbrs.len(), 2);
        let next = if nbrs[0] == prev { nbrs[1] } else { nbrs[0] };
        prev = cur;
        cur = next;
    }
    Ok(cycle)
}

fn single_region(mesh: &Mesh, scheme: Scheme) -> Result<FailedRegion, BuildError> {
    mesh.single_region()
        .copied()
        .ok_or(BuildError::RegionCount {
            scheme,
            count: mesh.failed_regions().len(),
        })
}

pub fn build_1d_ft(mesh: &Mesh) -> Result<Schedule, BuildError> {
    let scheme = Scheme::OneDFt;
    let region = single_region(mesh, scheme)?;
    let class = classify_region(&mesh.config(), &region);
    if !class.supports_1d {
        return Err(BuildError::NotEligible {
            scheme,
            region,
            reason: class.reason,
        });
    }
    if !mesh.width().is_multiple_of(2) || !mesh.height().is_multiple_of(2) {
        return Err(BuildError::MeshShape {
            scheme,
            requirement: "even width and height",
            width: mesh.width(),
            height: mesh.height(),
        });
    }
    let members = block_tree_cycle(mesh)?;
    debug_assert_eq!(members.len(), mesh.alive_count());
    let ring = dor_ring(mesh, members, Color::Red, SlicePath::whole())?;
    two_phase_single_ring(scheme, mesh, ring)
}

fn row_members(width: usize, y: usize) -> Vec<Coord> {
    (0..width).map(|x| Coord::new(x, y)).collect()
}

fn column_members(height: usize, x: usize) -> Vec<Coord> {
    (0..height).map(|y| Coord::new(x, y)).collect()
}

pub fn build_two_color(mesh: &Mesh) -> Result<Schedule, BuildError> {
    let scheme = Scheme::TwoColor;
    if mesh.has_failures() {
        return Err(BuildError::HasFailures { scheme });
    }
    let (w, h) = (mesh.width(), mesh.height());
    if w < 2 || h < 2 {
        return Err(BuildError::MeshShape {
            scheme,
            requirement: "at least 2 chips along both dimensions",
            width: w,
            height: h,
        });
    }
    let red = SlicePath::whole().child(0, 2);
    let blue = SlicePath::whole().child(1, 2);

    let mut first = Vec::with_capacity(w + h);
    for y in 0..h {
        first.push(dor_ring(mesh, row_members(w, y), Color::Red, red.clone())?);
    }
    for x in 0..w {
        first.push(dor_ring(
            mesh,
            column_members(h, x),
            Color::Blue,
            blue.clone(),
        )?);
    }
    // Red row rings leave chip (x, y) owning red shard x; blue column rings
    // leave it owning blue shard y.
    let mut second = Vec::with_capacity(w + h);
    for x in 0..w {
        second.push(dor_ring(
            mesh,
            column_members(h, x),
            Color::Red,
            red.child(x, w),
        )?);
    }
    for y in 0..h {
        second.push(dor_ring(
            mesh,
            row_members(w, y),
            Color::Blue,
            blue.child(y, h),
        )?);
    }

    let phases = vec![
        Phase::new(Role::ReduceScatter, Dimension::Mixed, first.clone()),
        Phase::new(Role::ReduceScatter, Dimension::Mixed, second.clone()),
        Phase::new(Role::AllGather, Dimension::Mixed, second),
        Phase::new(Role::AllGather, Dimension::Mixed, first),
    ];
    finish(scheme, mesh, phases)
}

/// Chip at `position` of the row-pair ring over rows `top` and `top + 1`:
/// left to right along `top`, then right to left along `top + 1`.
fn row_pair_position(width: usize, top: usize, position: usize) -> Coord {
    if position < width {
        Coord::new(position, top)
    } else {
        Coord::new(2 * width - 1 - position, top + 1)
    }
}

fn row_pair_ring(width: usize, top: usize) -> Vec<Coord> {
    (0..2 * width)
        .map(|i| row_pair_position(width, top, i))
        .collect()
}

/// Second-phase rings: position `i` of every first-phase ring, in row order.
fn lane_members(width: usize, tops: &[usize]) -> Vec<Vec<Coord>> {
    if tops.len() < 2 {
        return Vec::new();
    }
    (0..2 * width)
        .map(|i| {
            tops.iter()
                .map(|&t| row_pair_position(width, t, i))
                .collect()
        })
        .collect()
}

fn row_pair_phases(first: Vec<Ring>, lanes: Vec<Ring>) -> Vec<Phase> {
    vec![
        Phase::new(Role::ReduceScatter, Dimension::X, first.clone()),
        Phase::new(Role::ReduceScatter, Dimension::Y, lanes.clone()),
        Phase::new(Role::AllGather, Dimension::Y, lanes),
        Phase::new(Role::AllGather, Dimension::X, first),
    ]
}

pub fn build_row_pair(mesh: &Mesh) -> Result<Schedule, BuildError> {
    let scheme = Scheme::RowPair;
    if mesh.has_failures() {
        return Err(BuildError::HasFailures { scheme });
    }
    let (w, h) = (mesh.width(), mesh.height());
    if h % 2 != 0 {
        return Err(BuildError::MeshShape {
            scheme,
            requirement: "an even number of rows",
            width: w,
            height: h,
        });
    }
    let tops: Vec<usize> = (0..h).step_by(2).collect();
    let first = tops
        .iter()
        .map(|&t| dor_ring(mesh, row_pair_ring(w, t), Color::Blue, SlicePath::whole()))
        .collect::<Result<Vec<_>, _>>()?;
    let lanes = lane_members(w, &tops)
        .into_iter()
        .enumerate()
        .map(|(i, m)| dor_ring(mesh, m, Color::Blue, SlicePath::whole().child(i, 2 * w)))
        .collect::<Result<Vec<_>, _>>()?;
    finish(scheme, mesh, row_pair_phases(first, lanes))
}

/// Detour column for each failed column when second-phase lanes have to
/// cross the failed band. Failed columns are mirrored outward, left half to
/// the left and right half to the right, so every healthy column absorbs at
/// most one failed column's lanes. A side without room spills to the other.
/// A full-width band gets no detours; its lanes never need to cross it.
fn lane_detour_columns(mesh: &Mesh, region: &FailedRegion) -> HashMap<usize, usize> {
    let cols: Vec<usize> = (region.origin.x..=region.x_end()).collect();
    let half = cols.len().div_ceil(2);
    let mut left: VecDeque<usize> = cols[..half].iter().copied().collect();
    let mut right: VecDeque<usize> = cols[half..].iter().rev().copied().collect();
    let left_room = region.origin.x;
    let right_room = mesh.width() - 1 - region.x_end();
    while left.len() > left_room {
        right.push_back(left.pop_back().unwrap());
    }
    while right.len() > right_room && left.len() < left_room {
        left.push_back(right.pop_back().unwrap());
    }
    // Nearest first. When both sides together are narrower than the region,
    // the overflow wraps and a healthy column carries several failed ones.
    let left_lines: Vec<usize> = (0..region.origin.x).rev().collect();
    let right_lines: Vec<usize> = (region.x_end() + 1..mesh.width()).collect();
    let pick = |own: &[usize], other: &[usize], k: usize| {
        let lines = if own.is_empty() { other } else { own };
        lines[k % lines.len()]
    };
    let mut map = HashMap::new();
    if left_lines.is_empty() && right_lines.is_empty() {
        return map;
    }
    for (k, x) in left.into_iter().enumerate() {
        map.insert(x, pick(&left_lines, &right_lines, k));
    }
    for (k, x) in right.into_iter().enumerate() {
        map.insert(x, pick(&right_lines, &left_lines, k));
    }
    map
}

/// Yellow rings: 2-column strips over the failed band's alive chips. Member 0
/// sits next to the healthy row it forwards to.
fn yellow_strips(mesh: &Mesh, region: &FailedRegion) -> Vec<(Vec<Coord>, Coord)> {
    let (top, bottom) = (region.origin.y, region.y_end());
    let forward_up = top > 0;
    let starts = (0..region.origin.x)
        .step_by(2)
        .chain((region.x_end() + 1..mesh.width()).step_by(2));

    let mut strips = Vec::new();
    for c in starts {
        // Width 1 only for the last strip of an odd-width mesh.
        let cols: Vec<usize> = (c..(c + 2).min(mesh.width())).collect();
        let (near, far) = if forward_up {
            (top, bottom)
        } else {
            (bottom, top)
        };
        let down_col = |x: usize, from: usize, to: usize| -> Vec<Coord> {
            if from <= to {
                (from..=to).map(|y| Coord::new(x, y)).collect()
            } else {
                (to..=from).rev().map(|y| Coord::new(x, y)).collect()
            }
        };
        let mut members = down_col(cols[0], near, far);
        if let Some(&second) = cols.get(1) {
            members.extend(down_col(second, far, near));
        }
        let target = if forward_up {
            Coord::new(cols[0], top - 1)
        } else {
            Coord::new(cols[0], bottom + 1)
        };
        strips.push((members, target));
    }
    strips
}

pub fn build_row_pair_ft(mesh: &Mesh) -> Result<Schedule, BuildError> {
    let scheme = Scheme::RowPairFt;
    let region = single_region(mesh, scheme)?;
    let class = classify_region(&mesh.config(), &region);
    if !class.supports_ft_2d {
        return Err(BuildError::NotEligible {
            scheme,
            region,
            reason: class.reason,
        });
    }
    let (w, h) = (mesh.width(), mesh.height());
    if h % 2 != 0 {
        return Err(BuildError::MeshShape {
            scheme,
            requirement: "an even number of rows",
            width: w,
            height: h,
        });
    }
    if !mesh.is_connected() {
        return Err(BuildError::Disconnected);
    }
    let tops: Vec<usize> = (0..h)
        .step_by(2)
        .filter(|&t| !region.spans_row(t) && !region.spans_row(t + 1))
        .collect();
    if tops.is_empty() {
        return Err(BuildError::NoFullRings);
    }

    let blue = tops
        .iter()
        .map(|&t| dor_ring(mesh, row_pair_ring(w, t), Color::Blue, SlicePath::whole()))
        .collect::<Result<Vec<_>, _>>()?;

    let mut yellow = Vec::new();
    let mut contribute = Vec::new();
    let mut deliver = Vec::new();
    for (members, target) in yellow_strips(mesh, &region) {
        let source = members[0];
        yellow.push(dor_ring(mesh, members, Color::Yellow, SlicePath::whole())?);
        contribute.push(ForwardingEdge {
            from: source,
            to: target,
            route: routing::dimension_order_route(mesh, source, target)?,
            shard_selector: SlicePath::whole(),
            kind: ForwardKind::Contribute,
        });
        deliver.push(ForwardingEdge {
            from: target,
            to: source,
            route: routing::dimension_order_route(mesh, target, source)?,
            shard_selector: SlicePath::whole(),
            kind: ForwardKind::Deliver,
        });
    }

    let detours = lane_detour_columns(mesh, &region);
    let lanes = lane_members(w, &tops)
        .into_iter()
        .enumerate()
        .map(|(i, members)| {
            let slice = SlicePath::whole().child(i, 2 * w);
            ring_with(members, Color::Blue, slice, |a, b| {
                match detours.get(&a.x) {
                    Some(&line) => routing::detour_route(mesh, a, b, line),
                    None => routing::dimension_order_route(mesh, a, b),
                }
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut first = blue;
    first.extend(yellow);
    let mut phases = row_pair_phases(first, lanes);
    phases[0].forwarding = contribute;
    phases[3].forwarding = deliver;
    finish(scheme, mesh, phases)
}

/// Graphviz rendering of one phase: chips pinned to grid positions, failed
/// chips filled red, ring hops colored by ring color, forwarding dashed.
pub fn phase_to_dot(schedule: &Schedule, phase_index: usize) -> String {
    let mesh = &schedule.mesh;
    let phase = &schedule.phases[phase_index];
    let mut out = String::new();
    let _ = writeln!(
        out,
        "digraph phase{phase_index} {{\n  label=\"{} phase {phase_index}: {:?} {:?}\";\n  node [shape=circle, fontsize=8, width=0.3];",
        schedule.scheme, phase.role, phase.dimension
    );
    let yellow: HashSet<Coord> = phase
        .yellow_rings()
        .flat_map(|(_, r)| r.members.iter().copied())
        .collect();
    for y in 0..mesh.height() {
        for x in 0..mesh.width() {
            let c = Coord::new(x, y);
            let style = if !mesh.is_alive(c) {
                ", style=filled, fillcolor=red"
            } else if yellow.contains(&c) {
                ", style=filled, fillcolor=yellow"
            } else {
                ""
            };
            let _ = writeln!(out, "  \"{x},{y}\" [pos=\"{x},-{y}!\"{style}];");
        }
    }
    for (ri, ring) in phase.rings.iter().enumerate() {
        let color = match ring.color {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Yellow => "goldenrod",
        };
        for hop in &ring.hops {
            let _ = writeln!(
                out,
                "  \"{},{}\" -> \"{},{}\" [color={color}, tooltip=\"ring {ri}, {} links\"];",
                hop.src.x,
                hop.src.y,
                hop.dst.x,
                hop.dst.y,
                hop.len()
            );
        }
    }
    for f in &phase.forwarding {
        let _ = writeln!(
            out,
            "  \"{},{}\" -> \"{},{}\" [color=orange, style=dashed, penwidth=2];",
            f.from.x, f.from.y, f.to.x, f.to.y
        );
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::Link;
    use crate::topology::{build_mesh, MeshConfig};

    fn c(x: usize, y: usize) -> Coord {
        Coord::new(x, y)
    }

    fn holed(w: usize, h: usize, x: usize, y: usize, rw: usize, rh: usize) -> Mesh {
        build_mesh(
            MeshConfig::new(w, h),
            vec![FailedRegion::new(c(x, y), rw, rh)],
        )
        .unwrap()
    }

    fn assert_hamiltonian(mesh: &Mesh, ring: &Ring) {
        assert_eq!(ring.len(), mesh.alive_count());
        let set: HashSet<_> = ring.members.iter().collect();
        assert_eq!(set.len(), ring.len());
        for hop in &ring.hops {
            assert_eq!(hop.len(), 1, "hop {}->{} not adjacent", hop.src, hop.dst);
        }
    }

    #[test]
    fn partition_sizes_front_loaded() {
        let sizes: Vec<_> = partition(0..7, 5).iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1, 1, 1]);
        let sizes: Vec<_> = partition(3..5, 4).iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![1, 1, 0, 0]);
    }

    #[test]
    fn slice_path_resolves_nested() {
        let p = SlicePath::whole().child(1, 2).child(0, 3);
        assert_eq!(p.resolve(12), 6..8);
        assert_eq!(p.fraction(), Ratio::new(1, 6));
    }

    #[test]
    fn serpentine_2x2_is_the_square() {
        let m = Mesh::full(2, 2).unwrap();
        let s = build_1d_hamiltonian(&m).unwrap();
        assert_eq!(
            s.phases[0].rings[0].members,
            vec![c(0, 0), c(1, 0), c(1, 1), c(0, 1)]
        );
    }

    #[test]
    fn serpentine_uses_each_grid_link_once() {
        let m = Mesh::full(4, 4).unwrap();
        let s = build_1d_hamiltonian(&m).unwrap();
        let ring = &s.phases[0].rings[0];
        assert_hamiltonian(&m, ring);
        let mut undirected: Vec<(Coord, Coord)> = ring
            .hops
            .iter()
            .map(|h| (h.src.min(h.dst), h.src.max(h.dst)))
            .collect();
        undirected.sort();
        let n = undirected.len();
        undirected.dedup();
        assert_eq!(undirected.len(), n);
    }

    #[test]
    fn odd_rows_transpose_and_odd_by_odd_rejected() {
        let m = Mesh::full(4, 3).unwrap();
        let s = build_1d_hamiltonian(&m).unwrap();
        assert_hamiltonian(&m, &s.phases[0].rings[0]);
        assert_eq!(
            build_1d_hamiltonian(&Mesh::full(3, 5).unwrap()).unwrap_err(),
            BuildError::OddByOdd {
                width: 3,
                height: 5
            }
        );
        let line = build_1d_hamiltonian(&Mesh::full(5, 1).unwrap()).unwrap();
        assert_eq!(line.phases[0].rings[0].hops[4].len(), 4);
        assert!(build_1d_hamiltonian(&Mesh::full(1, 1).unwrap()).is_err());
        assert!(matches!(
            build_1d_hamiltonian(&holed(4, 4, 0, 0, 2, 2)),
            Err(BuildError::HasFailures { .. })
        ));
    }

    #[test]
    fn ft_ring_visits_every_alive_chip() {
        for m in [
            holed(8, 8, 2, 2, 2, 2),
            holed(4, 4, 0, 0, 2, 2),
            holed(16, 32, 4, 2, 4, 2),
            holed(8, 8, 6, 6, 2, 2),
        ] {
            let s = build_1d_ft(&m).unwrap();
            assert_hamiltonian(&m, &s.phases[0].rings[0]);
        }
        let err = build_1d_ft(&holed(8, 8, 3, 2, 2, 2)).unwrap_err();
        assert!(err.to_string().contains("odd column origin"), "{err}");
        assert!(matches!(
            build_1d_ft(&Mesh::full(4, 4).unwrap()),
            Err(BuildError::RegionCount { count: 0, .. })
        ));
        assert_eq!(
            build_1d_ft(&holed(4, 8, 0, 2, 4, 2)).unwrap_err(),
            BuildError::Disconnected
        );
    }

    #[test]
    fn two_color_rings_by_dimension() {
        let m = Mesh::full(2, 2).unwrap();
        let s = build_two_color(&m).unwrap();
        let red: Vec<_> = s.phases[0]
            .rings
            .iter()
            .filter(|r| r.color == Color::Red)
            .map(|r| r.members.clone())
            .collect();
        assert_eq!(red, vec![vec![c(0, 0), c(1, 0)], vec![c(0, 1), c(1, 1)]]);

        let m = Mesh::full(4, 4).unwrap();
        let s = build_two_color(&m).unwrap();
        for ring in &s.phases[0].rings {
            let all_x = ring
                .hops
                .iter()
                .flat_map(|h| &h.links)
                .all(|l| l.direction.is_x());
            let all_y = ring
                .hops
                .iter()
                .flat_map(|h| &h.links)
                .all(|l| l.direction.is_y());
            match ring.color {
                Color::Red => assert!(all_x),
                Color::Blue => assert!(all_y),
                Color::Yellow => unreachable!(),
            }
        }
        assert_eq!(s.phases.len(), 4);
        assert!(build_two_color(&Mesh::full(1, 4).unwrap()).is_err());
    }

    fn phase_links(phase: &Phase, color: Option<Color>) -> Vec<Link> {
        phase
            .rings
            .iter()
            .filter(|r| color.is_none_or(|c| r.color == c))
            .flat_map(|r| r.hops.iter().flat_map(|h| h.links.iter().copied()))
            .collect()
    }

    fn no_duplicates(mut links: Vec<Link>) -> bool {
        let n = links.len();
        links.sort();
        links.dedup();
        links.len() == n
    }

    #[test]
    fn row_pair_structure() {
        let m = Mesh::full(4, 4).unwrap();
        let s = build_row_pair(&m).unwrap();
        assert_eq!(s.phases[0].rings.len(), 2);
        assert!(s.phases[0].rings.iter().all(|r| r.len() == 8));
        assert!(no_duplicates(phase_links(&s.phases[0], None)));
        assert_eq!(s.phases[1].rings.len(), 8);
        assert!(s.phases[1].rings.iter().all(|r| r.len() == 2));
        // Lane 5 is position 5 of each row-pair ring: column 2, odd rows.
        assert_eq!(s.phases[1].rings[5].members, vec![c(2, 1), c(2, 3)]);
        assert_eq!(s.ring_steps(), 2 * (2 * 4 - 1) + 2);

        let single = build_row_pair(&Mesh::full(6, 2).unwrap()).unwrap();
        assert_eq!(single.phases[0].rings.len(), 1);
        assert!(single.phases[1].rings.is_empty());
        assert!(matches!(
            build_row_pair(&Mesh::full(4, 3).unwrap()),
            Err(BuildError::MeshShape { .. })
        ));
    }

    #[test]
    fn ft_blue_rings_link_disjoint_and_yellow_forwarding() {
        let m = holed(8, 8, 2, 2, 2, 2);
        let s = build_row_pair_ft(&m).unwrap();
        assert!(no_duplicates(phase_links(&s.phases[0], Some(Color::Blue))));
        let yellow: Vec<_> = s.phases[0]
            .yellow_rings()
            .map(|(_, r)| r.members.clone())
            .collect();
        assert_eq!(
            yellow,
            vec![
                vec![c(0, 2), c(0, 3), c(1, 3), c(1, 2)],
                vec![c(4, 2), c(4, 3), c(5, 3), c(5, 2)],
                vec![c(6, 2), c(6, 3), c(7, 3), c(7, 2)],
            ]
        );
        let targets: Vec<_> = s.phases[0]
            .forwarding
            .iter()
            .map(|f| (f.from, f.to))
            .collect();
        assert_eq!(
            targets,
            vec![(c(0, 2), c(0, 1)), (c(4, 2), c(4, 1)), (c(6, 2), c(6, 1))]
        );
        assert_eq!(s.phases[3].forwarding.len(), 3);
        assert_eq!(s.phases[1].rings.len(), 16);
        assert!(s.phases[1].rings.iter().all(|r| r.len() == 3));
        let alive_covered: HashSet<Coord> = s.phases[0]
            .rings
            .iter()
            .flat_map(|r| r.members.iter().copied())
            .collect();
        assert_eq!(alive_covered.len(), m.alive_count());
    }

    #[test]
    fn ft_region_at_top_forwards_down() {
        let m = holed(8, 8, 2, 0, 4, 2);
        let s = build_row_pair_ft(&m).unwrap();
        assert!(s.phases[0]
            .forwarding
            .iter()
            .all(|f| f.to.y == 2 && f.from.y == 1));
    }

    #[test]
    fn ft_tall_region_uses_tall_strips() {
        let m = holed(8, 8, 2, 2, 2, 4);
        let s = build_row_pair_ft(&m).unwrap();
        assert!(s.phases[0].yellow_rings().all(|(_, r)| r.len() == 8));
        assert_eq!(s.phases[1].rings[0].len(), 2);
    }

    #[test]
    fn ft_rejects_ineligible_regions() {
        assert!(matches!(
            build_row_pair_ft(&holed(8, 8, 2, 2, 4, 4)),
            Err(BuildError::NotEligible { .. })
        ));
        assert_eq!(
            build_row_pair_ft(&holed(4, 2, 0, 0, 2, 2)).unwrap_err(),
            BuildError::NoFullRings
        );
        let two = build_mesh(
            MeshConfig::new(8, 8),
            vec![
                FailedRegion::new(c(0, 0), 2, 2),
                FailedRegion::new(c(4, 4), 2, 2),
            ],
        )
        .unwrap();
        assert!(matches!(
            build_row_pair_ft(&two),
            Err(BuildError::RegionCount { count: 2, .. })
        ));
    }

    #[test]
    fn detour_columns_mirror_outward() {
        let m = holed(16, 8, 4, 2, 4, 2);
        let map = lane_detour_columns(&m, &m.failed_regions()[0]);
        assert_eq!(map[&4], 3);
        assert_eq!(map[&5], 2);
        assert_eq!(map[&6], 9);
        assert_eq!(map[&7], 8);
        let edge = holed(8, 8, 0, 2, 2, 2);
        let map = lane_detour_columns(&edge, &edge.failed_regions()[0]);
        assert_eq!(map[&1], 2);
        assert_eq!(map[&0], 3);
    }

    #[test]
    fn scheme_names_parse() {
        for s in Scheme::ALL {
            assert_eq!(s.to_string().parse::<Scheme>().unwrap(), s);
        }
        assert_eq!("row-pair-ft".parse::<Scheme>().unwrap(), Scheme::RowPairFt);
        assert!("ring".parse::<Scheme>().is_err());
    }

    #[test]
    fn row_pair_ft_rejects_a_band_across_the_mesh() {
        assert_eq!(
            build_row_pair_ft(&holed(4, 6, 0, 2, 4, 2)).unwrap_err(),
            BuildError::Disconnected
        );
        // Along the edge the band leaves the mesh whole.
        let s = build_row_pair_ft(&holed(4, 6, 0, 0, 4, 2)).unwrap();
        assert_eq!(s.phases[0].yellow_rings().count(), 0);
    }
}
