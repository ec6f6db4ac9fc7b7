//! Column grid geometry and the mapping of columns (or column fragments)
//! onto ranks.
//!
//! Global neuron indices enumerate columns row-major; inside a column the
//! F block comes first, then B, then I. A rank owns either a rectangular
//! tile of whole columns or one contiguous slice of a single column.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ColumnSizes, IdCodec, NeuronId, PopulationKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Column {
    pub x: u32,
    pub y: u32,
}

impl Column {
    pub const fn new(x: u32, y: u32) -> Self {
        Self { x, y }
    }
}

/// Euclidean distance between two columns in inter-module distance units.
pub fn distance(a: Column, b: Column) -> f64 {
    let dx = f64::from(a.x) - f64::from(b.x);
    let dy = f64::from(a.y) - f64::from(b.y);
    dx.hypot(dy)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: u32,
    pub height: u32,
    pub sizes: ColumnSizes,
    /// Physical size of one grid spacing, for reporting speeds in mm/s.
    pub imd_mm: Option<f64>,
}

impl GridSpec {
    pub fn new(width: u32, height: u32, sizes: ColumnSizes) -> Result<Self> {
        let g = GridSpec { width, height, sizes, imd_mm: None };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Grid(format!(
                "grid must be at least 1x1, got {}x{}",
                self.width, self.height
            )));
        }
        if self.sizes.total() == 0 {
            return Err(Error::Grid("columns must hold at least one neuron".into()));
        }
        if self.total_neurons() >= 1 << 31 {
            return Err(Error::Grid(format!(
                "{} neurons exceed the 2^31 identifier space",
                self.total_neurons()
            )));
        }
        Ok(())
    }

    pub fn columns(&self) -> u32 {
        self.width * self.height
    }

    pub fn column_size(&self) -> u32 {
        self.sizes.total()
    }

    pub fn total_neurons(&self) -> u64 {
        u64::from(self.columns()) * u64::from(self.sizes.total())
    }

    pub fn contains(&self, c: Column) -> bool {
        c.x < self.width && c.y < self.height
    }

    pub fn column_index(&self, c: Column) -> u32 {
        c.y * self.width + c.x
    }

    pub fn column_at(&self, index: u32) -> Column {
        Column::new(index % self.width, index / self.width)
    }

    pub fn global_id(&self, column: Column, kind: PopulationKind, index: u32) -> Result<u32> {
        if !self.contains(column) || index >= self.sizes.of(kind) {
            return Err(Error::Grid(format!(
                "({}, {}) {kind}[{index}] is outside the grid",
                column.x, column.y
            )));
        }
        Ok(self.column_index(column) * self.column_size() + self.sizes.offset(kind) + index)
    }

    pub fn locate_global(&self, global: u32) -> Result<(Column, PopulationKind, u32)> {
        if u64::from(global) >= self.total_neurons() {
            return Err(Error::NeuronOutOfRange(u64::from(global)));
        }
        let k = self.column_size();
        let (kind, idx) = self.sizes.kind_at(global % k).expect("index below column size");
        Ok((self.column_at(global / k), kind, idx))
    }

    pub fn kind_of_global(&self, global: u32) -> PopulationKind {
        self.sizes.kind_at(global % self.column_size()).map(|(k, _)| k).unwrap_or(PopulationKind::I)
    }

    pub fn column_of_global(&self, global: u32) -> Column {
        self.column_at(global / self.column_size())
    }
}

/// What one rank hosts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub x0: u32,
    pub y0: u32,
    pub width: u32,
    pub height: u32,
    /// Slice `part` of `parts` of the single column at (x0, y0) when
    /// columns are split; `parts == 1` for whole-column tiles.
    pub part: u32,
    pub parts: u32,
}

impl Tile {
    pub fn contains(&self, c: Column) -> bool {
        c.x >= self.x0 && c.x < self.x0 + self.width && c.y >= self.y0 && c.y < self.y0 + self.height
    }

    pub fn columns(&self) -> impl Iterator<Item = Column> + '_ {
        (self.y0..self.y0 + self.height)
            .flat_map(move |y| (self.x0..self.x0 + self.width).map(move |x| Column::new(x, y)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionMap {
    grid: GridSpec,
    ranks: u32,
    tiles: Vec<Tile>,
    /// Tiles per row of the tile grid (whole-column tiles only).
    tiles_x: u32,
    codec: IdCodec,
}

impl PartitionMap {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn ranks(&self) -> u32 {
        self.ranks
    }

    pub fn tiles(&self) -> &[Tile] {
        &self.tiles
    }

    pub fn tile(&self, rank: u32) -> &Tile {
        &self.tiles[rank as usize]
    }

    pub fn codec(&self) -> IdCodec {
        self.codec
    }

    fn split_parts(&self) -> u32 {
        self.tiles[0].parts
    }

    fn slice_bounds(&self, part: u32) -> (u32, u32) {
        let k = self.grid.column_size();
        let s = self.split_parts();
        (part * k / s, (part + 1) * k / s)
    }

    pub fn local_count(&self, rank: u32) -> u32 {
        let t = self.tile(rank);
        if t.parts > 1 {
            let (a, b) = self.slice_bounds(t.part);
            b - a
        } else {
            t.width * t.height * self.grid.column_size()
        }
    }

    pub fn rank_of_column(&self, c: Column) -> u32 {
        let s = self.split_parts();
        if s > 1 {
            self.grid.column_index(c) * s
        } else {
            let t = self.tiles[0];
            (c.y / t.height) * self.tiles_x + c.x / t.width
        }
    }

    /// Hosting rank and local index of a global neuron.
    pub fn place(&self, global: u32) -> (u32, u32) {
        let k = self.grid.column_size();
        let col_index = global / k;
        let within = global % k;
        let s = self.split_parts();
        if s > 1 {
            // Largest part whose slice starts at or before `within`.
            let mut part = (u64::from(within) * u64::from(s) / u64::from(k)) as u32;
            while part + 1 < s && self.slice_bounds(part + 1).0 <= within {
                part += 1;
            }
            while self.slice_bounds(part).0 > within {
                part -= 1;
            }
            (col_index * s + part, within - self.slice_bounds(part).0)
        } else {
            let c = self.grid.column_at(col_index);
            let rank = self.rank_of_column(c);
            let t = self.tile(rank);
            let pos = (c.y - t.y0) * t.width + (c.x - t.x0);
            (rank, pos * k + within)
        }
    }

    pub fn neuron_id(&self, global: u32) -> NeuronId {
        let (rank, local) = self.place(global);
        self.codec.encode(rank, local).expect("codec sized for the partition")
    }

    pub fn global_of(&self, rank: u32, local: u32) -> u32 {
        let k = self.grid.column_size();
        let t = self.tile(rank);
        if t.parts > 1 {
            let col = self.grid.column_index(Column::new(t.x0, t.y0));
            col * k + self.slice_bounds(t.part).0 + local
        } else {
            let pos = local / k;
            let c = Column::new(t.x0 + pos % t.width, t.y0 + pos / t.width);
            self.grid.column_index(c) * k + local % k
        }
    }

    pub fn global_of_id(&self, id: NeuronId) -> Result<u32> {
        let (rank, local) = self.codec.decode(id);
        if rank >= self.ranks || local >= self.local_count(rank) {
            return Err(Error::NeuronOutOfRange(u64::from(id.raw())));
        }
        Ok(self.global_of(rank, local))
    }

    /// Column, population and within-population index of a packed id.
    pub fn locate(&self, id: NeuronId) -> Result<(Column, PopulationKind, u32)> {
        self.grid.locate_global(self.global_of_id(id)?)
    }

    /// One line per rank: tile rectangle and packed neuron-id range.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (rank, t) in self.tiles.iter().enumerate() {
            let rank = rank as u32;
            let n = self.local_count(rank);
            let first = self.codec.encode(rank, 0).expect("valid");
            let last = self.codec.encode(rank, n.saturating_sub(1)).expect("valid");
            let _ = writeln!(
                s,
                "rank {rank} tile x={}..{} y={}..{} part={}/{} neurons={} ids={}..={}",
                t.x0,
                t.x0 + t.width - 1,
                t.y0,
                t.y0 + t.height - 1,
                t.part + 1,
                t.parts,
                n,
                first,
                last
            );
        }
        s
    }
}

fn divisors(n: u32) -> impl Iterator<Item = u32> {
    (1..=n).filter(move |d| n % d == 0)
}

/// Tile shape for `ranks` ranks over whole columns, or `None` if no
/// rectangular tiling exists.
fn tile_shape(width: u32, height: u32, ranks: u32) -> Option<(u32, u32)> {
    divisors(ranks)
        .filter(|&rx| width % rx == 0 && height % (ranks / rx) == 0)
        .map(|rx| (rx, ranks / rx))
        .min_by_key(|&(rx, ry)| {
            let (tw, th) = (width / rx, height / ry);
            (tw.abs_diff(th), tw.max(th), rx)
        })
}

fn is_feasible(grid: &GridSpec, ranks: u32) -> bool {
    let columns = grid.columns();
    if ranks == 0 {
        false
    } else if ranks <= columns {
        tile_shape(grid.width, grid.height, ranks).is_some()
    } else {
        ranks % columns == 0 && ranks / columns <= grid.column_size()
    }
}

/// Splits the grid into near-square rectangular tiles, one per rank; when
/// there are more ranks than columns each column is cut into equal
/// contiguous slices of its F/B/I-ordered neuron range.
pub fn partition(grid: &GridSpec, ranks: u32) -> Result<PartitionMap> {
    grid.validate()?;
    if !is_feasible(grid, ranks) {
        let below = (1..ranks).rev().find(|&r| is_feasible(grid, r));
        let above = (ranks + 1..=ranks.saturating_mul(4).max(8)).find(|&r| is_feasible(grid, r));
        return Err(Error::InfeasiblePartition {
            width: grid.width,
            height: grid.height,
            columns: grid.columns(),
            ranks,
            nearest: below.into_iter().chain(above).collect(),
        });
    }
    let columns = grid.columns();
    let (tiles, tiles_x, max_local) = if ranks <= columns {
        let (rx, ry) = tile_shape(grid.width, grid.height, ranks).expect("feasible");
        let (tw, th) = (grid.width / rx, grid.height / ry);
        let tiles: Vec<Tile> = (0..ry)
            .flat_map(|ty| {
                (0..rx).map(move |tx| Tile {
                    x0: tx * tw,
                    y0: ty * th,
                    width: tw,
                    height: th,
                    part: 0,
                    parts: 1,
                })
            })
            .collect();
        (tiles, rx, tw * th * grid.column_size())
    } else {
        let parts = ranks / columns;
        let tiles: Vec<Tile> = (0..columns)
            .flat_map(|ci| {
                let c = grid.column_at(ci);
                (0..parts).map(move |part| Tile {
                    x0: c.x,
                    y0: c.y,
                    width: 1,
                    height: 1,
                    part,
                    parts,
                })
            })
            .collect();
        (tiles, grid.width, grid.column_size().div_ceil(parts))
    };
    let codec = IdCodec::for_layout(ranks, max_local)?;
    Ok(PartitionMap { grid: *grid, ranks, tiles, tiles_x, codec })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full(w: u32, h: u32) -> GridSpec {
        GridSpec::new(w, h, ColumnSizes::FULL).unwrap()
    }

    #[test]
    fn locate_examples() {
        let g = full(24, 24);
        let p = partition(&g, 1).unwrap();
        let at = |global| p.locate(p.neuron_id(global)).unwrap();
        assert_eq!(at(0), (Column::new(0, 0), PopulationKind::F, 0));
        assert_eq!(at(250), (Column::new(0, 0), PopulationKind::B, 0));
        assert_eq!(at(1250), (Column::new(1, 0), PopulationKind::F, 0));
        assert!(g.locate_global(24 * 24 * 1250).is_err());
        assert!(p.locate(NeuronId::from_raw(u32::MAX >> 1)).is_err());
    }

    #[test]
    fn distance_examples() {
        assert_eq!(distance(Column::new(0, 0), Column::new(0, 0)), 0.0);
        assert_eq!(distance(Column::new(0, 0), Column::new(3, 4)), 5.0);
        let d = distance(Column::new(1, 1), Column::new(2, 2));
        assert!((d - std::f64::consts::SQRT_2).abs() < 1e-12);
        assert_eq!(distance(Column::new(5, 1), Column::new(2, 7)), distance(Column::new(2, 7), Column::new(5, 1)));
    }

    #[test]
    fn partition_examples() {
        let g = full(24, 24);
        let p = partition(&g, 1).unwrap();
        assert_eq!(p.tiles().len(), 1);
        assert_eq!(p.tile(0).width * p.tile(0).height, 576);

        let p = partition(&g, 4).unwrap();
        assert!(p.tiles().iter().all(|t| t.width == 12 && t.height == 12));

        let small = full(2, 2);
        let p = partition(&small, 8).unwrap();
        assert_eq!(p.tiles().len(), 8);
        assert!((0..8).all(|r| p.local_count(r) == 625));
        assert!(p.tiles().iter().all(|t| t.parts == 2));
    }

    #[test]
    fn infeasible_partition_names_neighbours() {
        let g = full(24, 24);
        match partition(&g, 5) {
            Err(Error::InfeasiblePartition { nearest, .. }) => assert_eq!(nearest, vec![4, 6]),
            other => panic!("{other:?}"),
        }
        assert!(partition(&g, 0).is_err());
    }

    #[test]
    fn partition_is_a_set_partition() {
        let g = GridSpec::new(4, 4, ColumnSizes::scaled(0.01).unwrap()).unwrap();
        for ranks in [1, 2, 4, 8, 16, 32] {
            let p = partition(&g, ranks).unwrap();
            let mut seen = vec![false; g.total_neurons() as usize];
            for r in 0..ranks {
                for l in 0..p.local_count(r) {
                    let gid = p.global_of(r, l);
                    assert!(!seen[gid as usize], "dup {gid} at R={ranks}");
                    seen[gid as usize] = true;
                    assert_eq!(p.place(gid), (r, l));
                }
            }
            assert!(seen.iter().all(|&s| s), "R={ranks}");
        }
    }

    #[test]
    fn tiles_are_rectangles_covering_the_grid() {
        let g = full(12, 12);
        for ranks in [1, 2, 3, 4, 6, 9, 12, 16, 36, 144] {
            let p = partition(&g, ranks).unwrap();
            let mut owner = vec![u32::MAX; 144];
            for (r, t) in p.tiles().iter().enumerate() {
                for c in t.columns() {
                    assert_eq!(owner[g.column_index(c) as usize], u32::MAX);
                    owner[g.column_index(c) as usize] = r as u32;
                    assert_eq!(p.rank_of_column(c), r as u32);
                }
            }
            assert!(owner.iter().all(|&o| o != u32::MAX));
        }
        let p = partition(&g, 9).unwrap();
        assert!(p.tiles().iter().all(|t| t.width == 4 && t.height == 4));
    }

    #[test]
    fn locate_bijection_on_small_grid() {
        let g = GridSpec::new(4, 4, ColumnSizes::scaled(0.02).unwrap()).unwrap();
        let p = partition(&g, 4).unwrap();
        for gid in 0..g.total_neurons() as u32 {
            let (c, kind, idx) = p.locate(p.neuron_id(gid)).unwrap();
            assert_eq!(g.global_id(c, kind, idx).unwrap(), gid);
        }
        // Order inside a column is F block, B block, I block.
        let k = g.sizes;
        assert_eq!(g.locate_global(k.f).unwrap().1, PopulationKind::B);
        assert_eq!(g.locate_global(k.f + k.b).unwrap().1, PopulationKind::I);
    }

    #[test]
    fn dump_has_one_line_per_rank() {
        let p = partition(&full(4, 4), 4).unwrap();
        let d = p.dump();
        assert_eq!(d.lines().count(), 4);
        assert!(d.starts_with("rank 0 tile x=0..1 y=0..1 part=1/1 neurons=5000"));
    }
}
