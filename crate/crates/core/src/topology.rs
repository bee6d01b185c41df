//! 2-D mesh model: grid dimensions, rectangular failed regions and the
//! derived set of alive chips.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Position of a chip. `x` is the column (first routing dimension), `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coord {
    pub x: usize,
    pub y: usize,
}

impl Coord {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub fn manhattan(self, other: Coord) -> usize {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MeshConfig {
    pub width: usize,
    pub height: usize,
}

impl MeshConfig {
    pub const fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    pub fn chip_count(&self) -> usize {
        self.width * self.height
    }

    pub fn contains(&self, c: Coord) -> bool {
        c.x < self.width && c.y < self.height
    }
}

/// A contiguous rectangular block of dead chips anchored at its top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FailedRegion {
    pub origin: Coord,
    pub width: usize,
    pub height: usize,
}

impl FailedRegion {
    pub const fn new(origin: Coord, width: usize, height: usize) -> Self {
        Self {
            origin,
            width,
            height,
        }
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    /// Last column covered by the region (inclusive).
    pub fn x_end(&self) -> usize {
        self.origin.x + self.width - 1
    }

    /// Last row covered by the region (inclusive).
    pub fn y_end(&self) -> usize {
        self.origin.y + self.height - 1
    }

    pub fn contains(&self, c: Coord) -> bool {
        c.x >= self.origin.x && c.x <= self.x_end() && c.y >= self.origin.y && c.y <= self.y_end()
    }

    pub fn spans_column(&self, x: usize) -> bool {
        x >= self.origin.x && x <= self.x_end()
    }

    pub fn spans_row(&self, y: usize) -> bool {
        y >= self.origin.y && y <= self.y_end()
    }

    fn within(&self, config: &MeshConfig) -> bool {
        self.width >= 1
            && self.height >= 1
            && self.origin.x + self.width <= config.width
            && self.origin.y + self.height <= config.height
    }

    fn overlaps(&self, other: &FailedRegion) -> bool {
        self.origin.x <= other.x_end()
            && other.origin.x <= self.x_end()
            && self.origin.y <= other.y_end()
            && other.origin.y <= self.y_end()
    }

    fn touches_boundary(&self, config: &MeshConfig) -> bool {
        self.origin.x == 0
            || self.origin.y == 0
            || self.x_end() + 1 == config.width
            || self.y_end() + 1 == config.height
    }
}

impl fmt::Display for FailedRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}@{}", self.width, self.height, self.origin)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("mesh dimensions must be at least 1x1, got {width}x{height}")]
    EmptyMesh { width: usize, height: usize },
    #[error(
        "failed region #{index} ({region}) is empty or lies outside the {width}x{height} mesh"
    )]
    RegionOutOfBounds {
        index: usize,
        region: FailedRegion,
        width: usize,
        height: usize,
    },
    #[error("failed region #{index} ({region}) overlaps failed region #{other}")]
    OverlappingRegions {
        index: usize,
        other: usize,
        region: FailedRegion,
    },
    #[error("chip {0} lies outside the mesh")]
    OutOfBounds(Coord),
    #[error("chip {0} is failed")]
    FailedChip(Coord),
}

/// Immutable mesh with its failure map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Mesh {
    config: MeshConfig,
    failed_regions: Vec<FailedRegion>,
    #[serde(skip)]
    alive_mask: Vec<bool>,
    #[serde(skip)]
    alive: Vec<Coord>,
}

/// Validates the regions and derives the alive set.
pub fn build_mesh(config: MeshConfig, regions: Vec<FailedRegion>) -> Result<Mesh, TopologyError> {
    if config.width == 0 || config.height == 0 {
        return Err(TopologyError::EmptyMesh {
            width: config.width,
            height: config.height,
        });
    }
    for (index, region) in regions.iter().enumerate() {
        if !region.within(&config) {
            return Err(TopologyError::RegionOutOfBounds {
                index,
                region: *region,
                width: config.width,
                height: config.height,
            });
        }
        if let Some(other) = regions[..index].iter().position(|r| r.overlaps(region)) {
            return Err(TopologyError::OverlappingRegions {
                index,
                other,
                region: *region,
            });
        }
    }

    let mut alive_mask = vec![true; config.chip_count()];
    for region in &regions {
        for y in region.origin.y..=region.y_end() {
            for x in region.origin.x..=region.x_end() {
                alive_mask[y * config.width + x] = false;
            }
        }
    }
    let alive = (0..config.height)
        .flat_map(|y| (0..config.width).map(move |x| Coord::new(x, y)))
        .filter(|c| alive_mask[c.y * config.width + c.x])
        .collect();

    Ok(Mesh {
        config,
        failed_regions: regions,
        alive_mask,
        alive,
    })
}

impl Mesh {
    /// Convenience constructor for a mesh without failures.
    pub fn full(width: usize, height: usize) -> Result<Self, TopologyError> {
        build_mesh(MeshConfig::new(width, height), Vec::new())
    }

    pub fn config(&self) -> MeshConfig {
        self.config
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn height(&self) -> usize {
        self.config.height
    }

    pub fn failed_regions(&self) -> &[FailedRegion] {
        &self.failed_regions
    }

    pub fn has_failures(&self) -> bool {
        !self.failed_regions.is_empty()
    }

    pub fn contains(&self, c: Coord) -> bool {
        self.config.contains(c)
    }

    pub fn is_alive(&self, c: Coord) -> bool {
        self.contains(c) && self.alive_mask[self.linear(c)]
    }

    /// Alive chips in row-major order.
    pub fn alive(&self) -> &[Coord] {
        &self.alive
    }

    pub fn alive_count(&self) -> usize {
        self.alive.len()
    }

    /// Dense row-major index of a coordinate (alive or not).
    pub fn linear(&self, c: Coord) -> usize {
        c.y * self.config.width + c.x
    }

    /// Position of `c` within [`Mesh::alive`], if alive.
    pub fn alive_index(&self, c: Coord) -> Option<usize> {
        if !self.is_alive(c) {
            return None;
        }
        self.alive
            .binary_search_by(|p| (p.y, p.x).cmp(&(c.y, c.x)))
            .ok()
    }

    pub fn check_alive(&self, c: Coord) -> Result<(), TopologyError> {
        if !self.contains(c) {
            Err(TopologyError::OutOfBounds(c))
        } else if !self.is_alive(c) {
            Err(TopologyError::FailedChip(c))
        } else {
            Ok(())
        }
    }

    /// Physical grid neighbors of `c` that are alive, in the order -x, +x, -y, +y.
    pub fn neighbors(&self, c: Coord) -> Result<Vec<Coord>, TopologyError> {
        self.check_alive(c)?;
        let mut out = Vec::with_capacity(4);
        if c.x > 0 {
            out.push(Coord::new(c.x - 1, c.y));
        }
        out.push(Coord::new(c.x + 1, c.y));
        if c.y > 0 {
            out.push(Coord::new(c.x, c.y - 1));
        }
        out.push(Coord::new(c.x, c.y + 1));
        out.retain(|n| self.is_alive(*n));
        Ok(out)
    }

    /// Whether every alive chip can reach every other through alive chips.
    pub fn is_connected(&self) -> bool {
        let Some(&start) = self.alive.first() else {
            return true;
        };
        let mut seen = vec![false; self.alive_mask.len()];
        seen[self.linear(start)] = true;
        let mut stack = vec![start];
        let mut reached = 1;
        while let Some(c) = stack.pop() {
            for n in self.neighbors(c).expect("alive chip") {
                let i = self.linear(n);
                if !seen[i] {
                    seen[i] = true;
                    reached += 1;
                    stack.push(n);
                }
            }
        }
        reached == self.alive.len()
    }

    /// The single failed region, or an error when the mesh has none or several.
    pub(crate) fn single_region(&self) -> Option<&FailedRegion> {
        match self.failed_regions.as_slice() {
            [r] => Some(r),
            _ => None,
        }
    }
}

/// Which schemes a failed region shape is eligible for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RegionClass {
    pub supports_1d: bool,
    pub supports_ft_2d: bool,
    pub reason: String,
}

/// Applies the alignment rules: the 1-D ring needs an even-sized region at even
/// row/column offsets; the forwarding 2-D scheme additionally needs a 2k x 2 or
/// 2 x 2k shape.
pub fn classify_region(config: &MeshConfig, region: &FailedRegion) -> RegionClass {
    let even_origin = region.origin.x.is_multiple_of(2) && region.origin.y.is_multiple_of(2);
    let even_sides = region.width.is_multiple_of(2) && region.height.is_multiple_of(2);
    let ft_shape = even_sides && (region.width == 2 || region.height == 2);

    let supports_1d = even_origin && even_sides;
    let supports_ft_2d = even_origin && ft_shape;

    let mut notes = Vec::new();
    if !even_origin {
        let mut which = Vec::new();
        if !region.origin.x.is_multiple_of(2) {
            which.push(format!("odd column origin {}", region.origin.x));
        }
        if !region.origin.y.is_multiple_of(2) {
            which.push(format!("odd row origin {}", region.origin.y));
        }
        notes.push(format!(
            "region must start on even rows and columns ({})",
            which.join(", ")
        ));
    }
    if !even_sides {
        notes.push(format!(
            "region must have even side lengths, got {}x{}",
            region.width, region.height
        ));
    } else if !ft_shape {
        notes.push(format!(
            "forwarding scheme needs a 2k x 2 or 2 x 2k region, got {}x{}",
            region.width, region.height
        ));
    }
    if region.touches_boundary(config) {
        notes.push("region touches the mesh boundary".to_string());
    }
    let reason = if notes.is_empty() {
        "ok".to_string()
    } else {
        notes.join("; ")
    };

    RegionClass {
        supports_1d,
        supports_ft_2d,
        reason,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region(x: usize, y: usize, w: usize, h: usize) -> FailedRegion {
        FailedRegion::new(Coord::new(x, y), w, h)
    }

    #[test]
    fn alive_counts_match_chip_arithmetic() {
        let m = build_mesh(MeshConfig::new(16, 32), vec![region(4, 2, 4, 2)]).unwrap();
        assert_eq!(m.alive_count(), 504);
        let m = build_mesh(MeshConfig::new(32, 32), vec![region(4, 2, 4, 2)]).unwrap();
        assert_eq!(m.alive_count(), 1016);
        let m = Mesh::full(4, 4).unwrap();
        assert_eq!(m.alive_count(), 16);
    }

    #[test]
    fn out_of_bounds_region_names_its_index() {
        let err = build_mesh(
            MeshConfig::new(4, 4),
            vec![region(0, 0, 1, 1), region(3, 3, 2, 2)],
        )
        .unwrap_err();
        assert!(matches!(
            err,
            TopologyError::RegionOutOfBounds { index: 1, .. }
        ));
        let err = build_mesh(MeshConfig::new(4, 4), vec![region(0, 0, 0, 1)]).unwrap_err();
        assert!(matches!(
            err,
            TopologyError::RegionOutOfBounds { index: 0, .. }
        ));
    }

    #[test]
    fn overlapping_regions_rejected() {
        let err = build_mesh(
            MeshConfig::new(8, 8),
            vec![region(0, 0, 2, 2), region(4, 4, 2, 2), region(5, 5, 2, 2)],
        )
        .unwrap_err();
        assert_eq!(
            err,
            TopologyError::OverlappingRegions {
                index: 2,
                other: 1,
                region: region(5, 5, 2, 2)
            }
        );
    }

    #[test]
    fn classification_follows_alignment_rules() {
        let cfg = MeshConfig::new(8, 8);
        let c = classify_region(&cfg, &region(2, 2, 2, 2));
        assert!(c.supports_1d && c.supports_ft_2d);
        let c = classify_region(&cfg, &region(1, 2, 2, 2));
        assert!(!c.supports_1d && !c.supports_ft_2d);
        assert!(c.reason.contains("odd column origin"));
        let c = classify_region(&cfg, &region(4, 2, 4, 2));
        assert!(c.supports_ft_2d && c.supports_1d);
        let c = classify_region(&cfg, &region(2, 2, 4, 4));
        assert!(c.supports_1d && !c.supports_ft_2d);
        let c = classify_region(&cfg, &region(2, 2, 3, 2));
        assert!(!c.supports_1d && !c.supports_ft_2d);
        let c = classify_region(&cfg, &region(0, 0, 2, 2));
        assert!(c.supports_ft_2d && c.reason.contains("boundary"));
    }

    #[test]
    fn neighbors_in_fixed_order() {
        let full = Mesh::full(4, 4).unwrap();
        assert_eq!(
            full.neighbors(Coord::new(0, 0)).unwrap(),
            vec![Coord::new(1, 0), Coord::new(0, 1)]
        );
        let holed = build_mesh(MeshConfig::new(4, 4), vec![region(2, 2, 2, 2)]).unwrap();
        assert_eq!(
            holed.neighbors(Coord::new(1, 2)).unwrap(),
            vec![Coord::new(0, 2), Coord::new(1, 1), Coord::new(1, 3)]
        );
        let tiny = Mesh::full(2, 2).unwrap();
        assert_eq!(
            tiny.neighbors(Coord::new(1, 1)).unwrap(),
            vec![Coord::new(0, 1), Coord::new(1, 0)]
        );
        assert_eq!(
            holed.neighbors(Coord::new(2, 2)),
            Err(TopologyError::FailedChip(Coord::new(2, 2)))
        );
        assert_eq!(
            holed.neighbors(Coord::new(4, 0)),
            Err(TopologyError::OutOfBounds(Coord::new(4, 0)))
        );
    }

    #[test]
    fn alive_index_round_trips() {
        let m = build_mesh(MeshConfig::new(6, 4), vec![region(2, 0, 2, 2)]).unwrap();
        for (i, c) in m.alive().iter().enumerate() {
            assert_eq!(m.alive_index(*c), Some(i));
        }
        assert_eq!(m.alive_index(Coord::new(2, 0)), None);
    }

    #[test]
    fn connectivity() {
        assert!(Mesh::full(3, 3).unwrap().is_connected());
        let cut = build_mesh(
            MeshConfig::new(4, 6),
            vec![FailedRegion::new(Coord::new(0, 2), 4, 2)],
        )
        .unwrap();
        assert!(!cut.is_connected());
        let edge = build_mesh(
            MeshConfig::new(4, 6),
            vec![FailedRegion::new(Coord::new(0, 0), 4, 2)],
        )
        .unwrap();
        assert!(edge.is_connected());
    }
}
