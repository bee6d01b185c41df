//! Dimension-order and route-around paths on a mesh, plus the channel
//! dependency graph check used to show a route set needs no extra virtual
//! channels.

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{Coord, FailedRegion, Mesh, TopologyError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "+x")]
    PlusX,
    #[serde(rename = "-x")]
    MinusX,
    #[serde(rename = "+y")]
    PlusY,
    #[serde(rename = "-y")]
    MinusY,
}

impl Direction {
    pub fn is_x(self) -> bool {
        matches!(self, Direction::PlusX | Direction::MinusX)
    }

    pub fn is_y(self) -> bool {
        !self.is_x()
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::PlusX => "+x",
            Direction::MinusX => "-x",
            Direction::PlusY => "+y",
            Direction::MinusY => "-y",
        })
    }
}

/// A directed physical channel between two grid neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Link {
    pub from: Coord,
    pub to: Coord,
    pub direction: Direction,
}

impl Link {
    /// Returns `None` unless `from` and `to` are grid neighbors.
    pub fn new(from: Coord, to: Coord) -> Option<Self> {
        let direction = if from.y == to.y && to.x == from.x + 1 {
            Direction::PlusX
        } else if from.y == to.y && from.x == to.x + 1 {
            Direction::MinusX
        } else if from.x == to.x && to.y == from.y + 1 {
            Direction::PlusY
        } else if from.x == to.x && from.y == to.y + 1 {
            Direction::MinusY
        } else {
            return None;
        };
        Some(Self {
            from,
            to,
            direction,
        })
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.from, self.to)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Route {
    pub src: Coord,
    pub dst: Coord,
    pub links: Vec<Link>,
}

impl Route {
    /// Builds a route from a chip sequence; consecutive chips must be neighbors.
    pub fn from_path(path: &[Coord]) -> Option<Self> {
        let (&src, &dst) = (path.first()?, path.last()?);
        let links = path
            .windows(2)
            .map(|w| Link::new(w[0], w[1]))
            .collect::<Option<Vec<_>>>()?;
        Some(Self { src, dst, links })
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    /// Every chip on the route, `src` first.
    pub fn chips(&self) -> impl Iterator<Item = Coord> + '_ {
        std::iter::once(self.src).chain(self.links.iter().map(|l| l.to))
    }

    pub fn is_simple(&self) -> bool {
        let mut seen: Vec<Coord> = self.chips().collect();
        seen.sort_unstable();
        seen.windows(2).all(|w| w[0] != w[1])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RoutingError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("dimension-order path from {src} to {dst} is blocked at {blocked} (last alive hop {last_alive})")]
    Blocked {
        src: Coord,
        dst: Coord,
        blocked: Coord,
        last_alive: Coord,
    },
    #[error("route-around supports at most one failed region, mesh has {0}")]
    MultipleRegions(usize),
    #[error("no detour from {src} to {dst} avoids the failed region")]
    NoPath { src: Coord, dst: Coord },
    #[error("detour line {line} is not usable for {src} -> {dst}")]
    InvalidDetour { src: Coord, dst: Coord, line: usize },
}

fn step_toward(from: usize, to: usize) -> usize {
    if to > from {
        from + 1
    } else {
        from - 1
    }
}

/// Chip sequence visiting each waypoint in turn with straight segments.
/// Consecutive waypoints must share a row or a column.
fn straight_path(waypoints: &[Coord]) -> Vec<Coord> {
    let mut path = vec![waypoints[0]];
    for &w in &waypoints[1..] {
        let mut cur = *path.last().unwrap();
        debug_assert!(cur.x == w.x || cur.y == w.y);
        while cur != w {
            if cur.x != w.x {
                cur.x = step_toward(cur.x, w.x);
            } else {
                cur.y = step_toward(cur.y, w.y);
            }
            path.push(cur);
        }
    }
    path
}

/// Removes any loop the waypoint construction may have introduced.
fn erase_loops(path: Vec<Coord>) -> Vec<Coord> {
    let mut out: Vec<Coord> = Vec::with_capacity(path.len());
    for c in path {
        if let Some(pos) = out.iter().position(|p| *p == c) {
            out.truncate(pos + 1);
        } else {
            out.push(c);
        }
    }
    out
}

fn dor_path(src: Coord, dst: Coord) -> Vec<Coord> {
    straight_path(&[src, Coord::new(dst.x, src.y), dst])
}

/// X-then-Y route. Fails on the first failed chip along the way.
pub fn dimension_order_route(mesh: &Mesh, src: Coord, dst: Coord) -> Result<Route, RoutingError> {
    mesh.check_alive(src)?;
    mesh.check_alive(dst)?;
    let path = dor_path(src, dst);
    if let Some(i) = path.iter().position(|c| !mesh.is_alive(*c)) {
        return Err(RoutingError::Blocked {
            src,
            dst,
            blocked: path[i],
            last_alive: path[i - 1],
        });
    }
    Ok(Route::from_path(&path).expect("straight path is contiguous"))
}

/// Candidate detour lines for a blocked dimension-order path: rows when the X
/// leg is blocked, columns when the Y leg is.
fn detour_lines(mesh: &Mesh, region: &FailedRegion, blocked_in_x: bool) -> Vec<usize> {
    let (start, end, limit) = if blocked_in_x {
        (region.origin.y, region.y_end(), mesh.height())
    } else {
        (region.origin.x, region.x_end(), mesh.width())
    };
    let mut lines = Vec::with_capacity(2);
    if start > 0 {
        lines.push(start - 1);
    }
    if end + 1 < limit {
        lines.push(end + 1);
    }
    lines
}

fn detour_path(
    region: &FailedRegion,
    src: Coord,
    dst: Coord,
    blocked: Coord,
    last_alive: Coord,
    line: usize,
) -> Vec<Coord> {
    let blocked_in_x = blocked.y == src.y && blocked.x != src.x;
    let mut waypoints = Vec::with_capacity(8);
    waypoints.push(src);
    if blocked_in_x {
        // Moving along row src.y; sidestep to row `line`.
        let y = src.y;
        waypoints.push(last_alive);
        waypoints.push(Coord::new(last_alive.x, line));
        let forward = dst.x > src.x;
        let past_region = if forward {
            dst.x > region.x_end()
        } else {
            dst.x < region.origin.x
        };
        if past_region {
            let x_past = if forward {
                region.x_end() + 1
            } else {
                region.origin.x - 1
            };
            let (lo, hi) = (line.min(y), line.max(y));
            let rejoin = dst.y.clamp(lo, hi);
            waypoints.push(Coord::new(x_past, line));
            waypoints.push(Coord::new(x_past, rejoin));
            waypoints.push(Coord::new(dst.x, rejoin));
        } else {
            waypoints.push(Coord::new(dst.x, line));
        }
    } else {
        // Moving along column dst.x; sidestep to column `line` and come back.
        let x = dst.x;
        if src.x != x {
            waypoints.push(Coord::new(x, src.y));
        }
        waypoints.push(last_alive);
        let y_past = if dst.y > last_alive.y {
            region.y_end() + 1
        } else {
            region.origin.y - 1
        };
        waypoints.push(Coord::new(line, last_alive.y));
        waypoints.push(Coord::new(line, y_past));
        waypoints.push(Coord::new(x, y_past));
    }
    waypoints.push(dst);
    waypoints.dedup();
    erase_loops(straight_path(&waypoints))
}

fn blocked_or_route(
    mesh: &Mesh,
    src: Coord,
    dst: Coord,
) -> Result<Result<Route, (Coord, Coord)>, RoutingError> {
    match dimension_order_route(mesh, src, dst) {
        Ok(r) => Ok(Ok(r)),
        Err(RoutingError::Blocked {
            blocked,
            last_alive,
            ..
        }) => Ok(Err((blocked, last_alive))),
        Err(e) => Err(e),
    }
}

fn usable(mesh: &Mesh, path: &[Coord]) -> bool {
    path.iter().all(|c| mesh.is_alive(*c))
}

/// Dimension-order route when unblocked; otherwise a detour around the single
/// failed region, taking the cheapest side and the lower index on ties.
pub fn route_around(mesh: &Mesh, src: Coord, dst: Coord) -> Result<Route, RoutingError> {
    if mesh.failed_regions().len() > 1 {
        return Err(RoutingError::MultipleRegions(mesh.failed_regions().len()));
    }
    let (blocked, last_alive) = match blocked_or_route(mesh, src, dst)? {
        Ok(route) => return Ok(route),
        Err(b) => b,
    };
    let region = mesh.failed_regions()[0];
    let blocked_in_x = blocked.y == src.y && blocked.x != src.x;
    detour_lines(mesh, &region, blocked_in_x)
        .into_iter()
        .map(|line| detour_path(&region, src, dst, blocked, last_alive, line))
        .filter(|p| usable(mesh, p))
        .min_by_key(|p| p.len())
        .and_then(|p| Route::from_path(&p))
        .ok_or(RoutingError::NoPath { src, dst })
}

/// Like [`route_around`] but the detour runs along a caller-chosen row or
/// column. Unblocked pairs still get the dimension-order route.
pub fn detour_route(
    mesh: &Mesh,
    src: Coord,
    dst: Coord,
    line: usize,
) -> Result<Route, RoutingError> {
    if mesh.failed_regions().len() > 1 {
        return Err(RoutingError::MultipleRegions(mesh.failed_regions().len()));
    }
    let (blocked, last_alive) = match blocked_or_route(mesh, src, dst)? {
        Ok(route) => return Ok(route),
        Err(b) => b,
    };
    let region = mesh.failed_regions()[0];
    let blocked_in_x = blocked.y == src.y && blocked.x != src.x;
    let spans = if blocked_in_x {
        region.spans_row(line)
    } else {
        region.spans_column(line)
    };
    let path = detour_path(&region, src, dst, blocked, last_alive, line);
    if spans || !usable(mesh, &path) {
        return Err(RoutingError::InvalidDetour { src, dst, line });
    }
    Ok(Route::from_path(&path).expect("detour path is contiguous"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CycleReport {
    pub acyclic: bool,
    pub witness_cycle: Option<Vec<Link>>,
}

/// Channel dependency graph: one vertex per directed link, an edge A -> B
/// whenever some route uses B immediately after A.
#[derive(Debug, Default, Clone)]
pub struct ChannelDependencyGraph {
    links: Vec<Link>,
    index: HashMap<Link, usize>,
    edges: Vec<Vec<usize>>,
}

impl ChannelDependencyGraph {
    pub fn from_routes<'a>(routes: impl IntoIterator<Item = &'a Route>) -> Self {
        let mut g = Self::default();
        for route in routes {
            let ids: Vec<usize> = route.links.iter().map(|l| g.intern(*l)).collect();
            for w in ids.windows(2) {
                g.edges[w[0]].push(w[1]);
            }
        }
        for adj in &mut g.edges {
            adj.sort_unstable();
            adj.dedup();
        }
        g
    }

    fn intern(&mut self, link: Link) -> usize {
        if let Some(&i) = self.index.get(&link) {
            return i;
        }
        let i = self.links.len();
        self.links.push(link);
        self.index.insert(link, i);
        self.edges.push(Vec::new());
        i
    }

    pub fn vertex_count(&self) -> usize {
        self.links.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    pub fn has_edge(&self, a: &Link, b: &Link) -> bool {
        match (self.index.get(a), self.index.get(b)) {
            (Some(&i), Some(&j)) => self.edges[i].binary_search(&j).is_ok(),
            _ => false,
        }
    }

    /// Iterative DFS; returns the first back-edge cycle found.
    pub fn find_cycle(&self) -> Option<Vec<Link>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Open,
            Done,
        }
        let n = self.links.len();
        let mut mark = vec![Mark::New; n];
        let mut parent = vec![usize::MAX; n];
        for root in 0..n {
            if mark[root] != Mark::New {
                continue;
            }
            let mut stack = vec![(root, 0usize)];
            mark[root] = Mark::Open;
            while let Some(&mut (v, ref mut next)) = stack.last_mut() {
                if let Some(&w) = self.edges[v].get(*next) {
                    *next += 1;
                    match mark[w] {
                        Mark::New => {
                            mark[w] = Mark::Open;
                            parent[w] = v;
                            stack.push((w, 0));
                        }
                        Mark::Open => {
                            let mut cycle = vec![self.links[v]];
                            let mut u = v;
                            while u != w {
                                u = parent[u];
                                cycle.push(self.links[u]);
                            }
                            cycle.reverse();
                            return Some(cycle);
                        }
                        Mark::Done => {}
                    }
                } else {
                    mark[v] = Mark::Done;
                    stack.pop();
                }
            }
        }
        None
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph cdg {\n  node [shape=box, fontsize=10];\n");
        for (i, l) in self.links.iter().enumerate() {
            let _ = writeln!(out, "  l{i} [label=\"{l} {}\"];", l.direction);
        }
        for (i, adj) in self.edges.iter().enumerate() {
            for j in adj {
                let _ = writeln!(out, "  l{i} -> l{j};");
            }
        }
        out.push_str("}\n");
        out
    }
}

pub fn check_cycle_free<'a>(routes: impl IntoIterator<Item = &'a Route>) -> CycleReport {
    let witness_cycle = ChannelDependencyGraph::from_routes(routes).find_cycle();
    CycleReport {
        acyclic: witness_cycle.is_none(),
        witness_cycle,
    }
}

/// Renders routes over the mesh grid, failed chips filled red.
pub fn routes_to_dot(mesh: &Mesh, routes: &[Route]) -> String {
    let mut out = String::from("digraph routes {\n  node [shape=circle, fontsize=8];\n");
    for y in 0..mesh.height() {
        for x in 0..mesh.width() {
            let c = Coord::new(x, y);
            let fill = if mesh.is_alive(c) {
                ""
            } else {
                ", style=filled, fillcolor=red"
            };
            let _ = writeln!(out, "  \"{x},{y}\" [pos=\"{x},-{y}!\"{fill}];");
        }
    }
    for (i, r) in routes.iter().enumerate() {
        for l in &r.links {
            let _ = writeln!(
                out,
                "  \"{},{}\" -> \"{},{}\" [label=\"r{i}\"];",
                l.from.x, l.from.y, l.to.x, l.to.y
            );
        }
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
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

    #[test]
    fn dimension_order_goes_x_then_y() {
        let m = Mesh::full(8, 8).unwrap();
        let r = dimension_order_route(&m, c(0, 0), c(3, 2)).unwrap();
        let dirs: Vec<_> = r.links.iter().map(|l| l.direction).collect();
        use Direction::*;
        assert_eq!(dirs, vec![PlusX, PlusX, PlusX, PlusY, PlusY]);
        assert!(dimension_order_route(&m, c(2, 5), c(2, 5))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn blocked_dimension_order_reports_first_failed_hop() {
        let m = holed(8, 8, 2, 2, 2, 2);
        let err = dimension_order_route(&m, c(0, 2), c(5, 2)).unwrap_err();
        assert_eq!(
            err,
            RoutingError::Blocked {
                src: c(0, 2),
                dst: c(5, 2),
                blocked: c(2, 2),
                last_alive: c(1, 2)
            }
        );
    }

    #[test]
    fn route_around_takes_the_near_side() {
        let m = holed(8, 8, 2, 2, 2, 2);
        let r = route_around(&m, c(0, 2), c(5, 2)).unwrap();
        assert_eq!(r.len(), 7);
        assert!(r.chips().any(|p| p == c(2, 1)));
        assert!(r.is_simple());
        let straight = route_around(&m, c(0, 0), c(7, 0)).unwrap();
        assert_eq!(
            straight,
            dimension_order_route(&m, c(0, 0), c(7, 0)).unwrap()
        );
        assert_eq!(straight.len(), 7);
    }

    #[test]
    fn route_around_tie_picks_lower_index() {
        // 1-wide region: columns 2 and 4 cost the same.
        let m = holed(8, 8, 3, 3, 1, 1);
        let r = route_around(&m, c(3, 0), c(3, 6)).unwrap();
        assert_eq!(r.len(), 8);
        assert!(r.chips().any(|p| p == c(2, 3)));
    }

    #[test]
    fn column_detour_returns_to_column() {
        let m = holed(8, 8, 2, 2, 2, 2);
        let r = route_around(&m, c(3, 0), c(3, 6)).unwrap();
        assert_eq!(r.len(), 8);
        assert!(r.chips().any(|p| p == c(4, 2)));
        let forced = detour_route(&m, c(3, 0), c(3, 6), 1).unwrap();
        assert_eq!(forced.len(), 10);
        assert!(matches!(
            detour_route(&m, c(3, 0), c(3, 6), 2),
            Err(RoutingError::InvalidDetour { .. })
        ));
    }

    #[test]
    fn destination_inside_region_columns() {
        let m = holed(8, 8, 2, 2, 2, 2);
        let r = route_around(&m, c(0, 3), c(3, 0)).unwrap();
        assert_eq!(r.len(), 6);
        assert!(r.is_simple());
    }

    #[test]
    fn failed_endpoints_rejected() {
        let m = holed(8, 8, 2, 2, 2, 2);
        assert!(matches!(
            route_around(&m, c(2, 2), c(5, 5)),
            Err(RoutingError::Topology(TopologyError::FailedChip(_)))
        ));
    }

    #[test]
    fn dimension_order_all_pairs_acyclic() {
        let m = Mesh::full(4, 4).unwrap();
        let mut routes = Vec::new();
        for &s in m.alive() {
            for &d in m.alive() {
                routes.push(dimension_order_route(&m, s, d).unwrap());
            }
        }
        let report = check_cycle_free(&routes);
        assert!(report.acyclic);
        assert!(report.witness_cycle.is_none());
        assert!(check_cycle_free(&[]).acyclic);
    }

    #[test]
    fn turn_cycle_detected_with_witness() {
        // +x then +y, +y then -x, -x then -y, -y then +x around the unit square.
        let routes = vec![
            Route::from_path(&[c(0, 0), c(1, 0), c(1, 1), c(0, 1)]).unwrap(),
            Route::from_path(&[c(1, 1), c(0, 1), c(0, 0), c(1, 0)]).unwrap(),
        ];
        let report = check_cycle_free(&routes);
        assert!(!report.acyclic);
        let w = report.witness_cycle.unwrap();
        assert_eq!(w.len(), 4);
        let g = ChannelDependencyGraph::from_routes(&routes);
        for i in 0..w.len() {
            assert!(g.has_edge(&w[i], &w[(i + 1) % w.len()]));
        }
    }
}
