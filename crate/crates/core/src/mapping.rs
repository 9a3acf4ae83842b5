//! Weight-to-conductance mapping onto tiled crossbars.
//!
//! A layer's 2-D weight matrix is normalized by its max-abs value and every
//! weight is written into one or two cells with normalized conductance in
//! `[0, 1]`:
//!
//! | scheme         | cells      | encoding                                   | decoding        |
//! |----------------|------------|--------------------------------------------|-----------------|
//! | `TwoColumn`    | `(g⁺, g⁻)` | `(max(w,0), max(−w,0))`                     | `g⁺ − g⁻`       |
//! | `Offset`       | `g`        | `(w + 1) / 2`                               | `2g − 1`        |
//! | `Differential` | `(gₐ, g_b)`| `gₐ = 1` if `w ≥ 0` else `1 − |w|`; `g_b = 1 − w` if `w > 0` else `1` | `gₐ − g_b` |
//!
//! Under the differential encoding one of the two cells is always fully on,
//! and a zero weight is stored as `(1, 1)`.
//!
//! The cells of one weight sit in adjacent columns of the same tile. Cell
//! columns are laid out weight-column-major within a tile row, so weight
//! `(r, c)` with role `k` lands in tile row `r mod tile_rows` and tile column
//! `(c mod w) · cpw + k`, where `w = ⌊tile_cols / cpw⌋` weights fit across a
//! tile. Cells beyond the weight matrix are padding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::faults::CellState;
use crate::numerics::Tensor;

pub const DEFAULT_TILE: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MappingScheme {
    TwoColumn,
    Offset,
    Differential,
}

impl MappingScheme {
    pub const ALL: [MappingScheme; 3] = [
        MappingScheme::TwoColumn,
        MappingScheme::Offset,
        MappingScheme::Differential,
    ];

    pub fn cells_per_weight(self) -> usize {
        match self {
            MappingScheme::Offset => 1,
            MappingScheme::TwoColumn | MappingScheme::Differential => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MappingScheme::TwoColumn => "two-column",
            MappingScheme::Offset => "offset",
            MappingScheme::Differential => "differential",
        }
    }

    /// Cell conductances for a normalized weight; unused slots are zero.
    pub fn encode(self, w: f32) -> Result<[f32; 2]> {
        Ok(match self {
            MappingScheme::TwoColumn => {
                let (p, n) = map_two_column(w)?;
                [p, n]
            }
            MappingScheme::Offset => [map_offset(w)?, 0.0],
            MappingScheme::Differential => {
                let (a, b) = map_differential(w)?;
                [a, b]
            }
        })
    }

    /// Normalized weight represented by `cells` (length `cells_per_weight`).
    pub fn decode(self, cells: &[f32]) -> f32 {
        match self {
            MappingScheme::TwoColumn | MappingScheme::Differential => cells[0] - cells[1],
            MappingScheme::Offset => 2.0 * cells[0] - 1.0,
        }
    }
}

impl fmt::Display for MappingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MappingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "two-column" | "twocolumn" => Ok(MappingScheme::TwoColumn),
            "offset" => Ok(MappingScheme::Offset),
            "differential" => Ok(MappingScheme::Differential),
            _ => Err(Error::InvalidConfig(format!(
                "unknown mapping scheme {s:?} (expected two-column, offset or differential)"
            ))),
        }
    }
}

fn check_unit(w: f32) -> Result<()> {
    if !(-1.0..=1.0).contains(&w) {
        return Err(Error::OutOfRange {
            what: "normalized weight",
            value: w as f64,
        });
    }
    Ok(())
}

pub fn map_two_column(w: f32) -> Result<(f32, f32)> {
    check_unit(w)?;
    Ok((w.max(0.0), (-w).max(0.0)))
}

pub fn map_offset(w: f32) -> Result<f32> {
    check_unit(w)?;
    Ok((w + 1.0) / 2.0)
}

pub fn map_differential(w: f32) -> Result<(f32, f32)> {
    check_unit(w)?;
    let a = if w >= 0.0 { 1.0 } else { 1.0 - w.abs() };
    let b = if w > 0.0 { 1.0 - w } else { 1.0 };
    Ok((a, b))
}

/// Scales `w` into `[-1, 1]` by its max-abs value (1 for an all-zero tensor).
pub fn normalize_weights(w: &Tensor) -> (Tensor, f32) {
    let max = w.max_abs();
    let scale = if max == 0.0 { 1.0 } else { max };
    let data = w.data().iter().map(|&x| x / scale).collect();
    (
        Tensor::new(w.shape().to_vec(), data).expect("division by a finite positive scale"),
        scale,
    )
}

/// Physical position of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CellAddr {
    pub tile: usize,
    pub row: usize,
    pub col: usize,
}

/// The (weight, role) ↔ cell bijection of a mapped layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub weight_rows: usize,
    pub weight_cols: usize,
    pub cells_per_weight: usize,
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub tiles_down: usize,
    pub tiles_across: usize,
}

impl Layout {
    pub fn new(
        weight_rows: usize,
        weight_cols: usize,
        scheme: MappingScheme,
        tile_rows: usize,
        tile_cols: usize,
    ) -> Result<Self> {
        let cpw = scheme.cells_per_weight();
        if tile_rows < 1 || tile_cols < cpw {
            return Err(Error::InvalidConfig(format!(
                "tile {tile_rows}x{tile_cols} cannot hold a {}-cell weight",
                cpw
            )));
        }
        if weight_rows == 0 || weight_cols == 0 {
            return Err(Error::InvalidShape("empty weight matrix".into()));
        }
        let per_tile = tile_cols / cpw;
        Ok(Layout {
            weight_rows,
            weight_cols,
            cells_per_weight: cpw,
            tile_rows,
            tile_cols,
            tiles_down: weight_rows.div_ceil(tile_rows),
            tiles_across: weight_cols.div_ceil(per_tile),
        })
    }

    pub fn tile_count(&self) -> usize {
        self.tiles_down * self.tiles_across
    }

    pub fn cells_per_tile(&self) -> usize {
        self.tile_rows * self.tile_cols
    }

    pub fn weight_count(&self) -> usize {
        self.weight_rows * self.weight_cols
    }

    pub fn occupied_cells(&self) -> usize {
        self.weight_count() * self.cells_per_weight
    }

    fn weights_per_tile_row(&self) -> usize {
        self.tile_cols / self.cells_per_weight
    }

    pub fn locate(&self, row: usize, col: usize, role: usize) -> CellAddr {
        debug_assert!(row < self.weight_rows && col < self.weight_cols);
        debug_assert!(role < self.cells_per_weight);
        let per = self.weights_per_tile_row();
        CellAddr {
            tile: (row / self.tile_rows) * self.tiles_across + col / per,
            row: row % self.tile_rows,
            col: (col % per) * self.cells_per_weight + role,
        }
    }

    /// `(weight row, weight col, role)` stored at `addr`, or `None` for padding.
    pub fn owner(&self, addr: CellAddr) -> Option<(usize, usize, usize)> {
        if addr.tile >= self.tile_count()
            || addr.row >= self.tile_rows
            || addr.col >= self.tile_cols
        {
            return None;
        }
        let per = self.weights_per_tile_row();
        if addr.col >= per * self.cells_per_weight {
            return None;
        }
        let r = (addr.tile / self.tiles_across) * self.tile_rows + addr.row;
        let c = (addr.tile % self.tiles_across) * per + addr.col / self.cells_per_weight;
        (r < self.weight_rows && c < self.weight_cols).then_some((
            r,
            c,
            addr.col % self.cells_per_weight,
        ))
    }

    /// Flat index of a cell across all tiles.
    pub fn flat_index(&self, addr: CellAddr) -> usize {
        addr.tile * self.cells_per_tile() + addr.row * self.tile_cols + addr.col
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossbarTile {
    pub rows: usize,
    pub cols: usize,
    /// `rows × cols` normalized conductances in `[0, 1]`.
    pub conductance: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappedLayer {
    pub scheme: MappingScheme,
    pub tiles: Vec<CrossbarTile>,
    pub scale: f32,
    pub layout: Layout,
    /// Per-tile cell states once faults have been applied; `None` when the
    /// layer has never been faulted.
    pub stuck: Option<Vec<Vec<CellState>>>,
}

impl MappedLayer {
    /// Assembles a mapped layer from parts, checking conductance range and tile
    /// geometry against the layout.
    pub fn from_parts(
        scheme: MappingScheme,
        tiles: Vec<CrossbarTile>,
        scale: f32,
        layout: Layout,
    ) -> Result<Self> {
        let m = MappedLayer {
            scheme,
            tiles,
            scale,
            layout,
            stuck: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let l = &self.layout;
        if l.cells_per_weight != self.scheme.cells_per_weight() {
            return Err(Error::Layout(format!(
                "{} scheme with {} cells per weight",
                self.scheme, l.cells_per_weight
            )));
        }
        if self.tiles.len() != l.tile_count() {
            return Err(Error::Layout(format!(
                "{} tiles present, layout expects {}",
                self.tiles.len(),
                l.tile_count()
            )));
        }
        for (i, t) in self.tiles.iter().enumerate() {
            if t.rows != l.tile_rows
                || t.cols != l.tile_cols
                || t.conductance.shape() != [l.tile_rows, l.tile_cols]
            {
                return Err(Error::Layout(format!("tile {i} has the wrong geometry")));
            }
            if t.conductance
                .data()
                .iter()
                .any(|g| !(0.0..=1.0).contains(g))
            {
                return Err(Error::Layout(format!(
                    "tile {i} has conductance outside [0, 1]"
                )));
            }
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Layout(format!("bad scale {}", self.scale)));
        }
        Ok(())
    }

    pub fn cell(&self, addr: CellAddr) -> f32 {
        self.tiles[addr.tile].conductance.data()[addr.row * self.layout.tile_cols + addr.col]
    }

    /// Conductances of the cells holding weight `(row, col)`.
    pub fn weight_cells(&self, row: usize, col: usize) -> [f32; 2] {
        let mut out = [0.0; 2];
        for (role, slot) in out
            .iter_mut()
            .enumerate()
            .take(self.layout.cells_per_weight)
        {
            *slot = self.cell(self.layout.locate(row, col, role));
        }
        out
    }
}

/// Maps a 2-D weight matrix onto `tile_rows × tile_cols` crossbar tiles.
pub fn map_layer(
    w: &Tensor,
    scheme: MappingScheme,
    tile_rows: usize,
    tile_cols: usize,
) -> Result<MappedLayer> {
    let (rows, cols) = w.dims2()?;
    let layout = Layout::new(rows, cols, scheme, tile_rows, tile_cols)?;
    let (norm, scale) = normalize_weights(w);
    let mut cells = vec![vec![0.0f32; layout.cells_per_tile()]; layout.tile_count()];
    for r in 0..rows {
        for c in 0..cols {
            let g = scheme.encode(norm.data()[r * cols + c])?;
            for (role, &value) in g.iter().enumerate().take(layout.cells_per_weight) {
                let a = layout.locate(r, c, role);
                cells[a.tile][a.row * tile_cols + a.col] = value;
            }
        }
    }
    let tiles = cells
        .into_iter()
        .map(|data| {
            Ok(CrossbarTile {
                rows: tile_rows,
                cols: tile_cols,
                conductance: Tensor::new(vec![tile_rows, tile_cols], data)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MappedLayer {
        scheme,
        tiles,
        scale,
        layout,
        stuck: None,
    })
}

/// Effective (hardware-visible) weights: the scheme's decoding of the current
/// cell conductances, times the layer scale.
pub fn reconstruct_effective_weights(mapped: &MappedLayer) -> Result<Tensor> {
    mapped.validate()?;
    let l = &mapped.layout;
    let mut out = Vec::with_capacity(l.weight_count());
    for r in 0..l.weight_rows {
        for c in 0..l.weight_cols {
            let cells = mapped.weight_cells(r, c);
            out.push(mapped.scheme.decode(&cells[..l.cells_per_weight]) * mapped.scale);
        }
    }
    Tensor::new(vec![l.weight_rows, l.weight_cols], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        let (n, s) = normalize_weights(&Tensor::new(vec![1, 2], vec![2.0, -4.0]).unwrap());
        assert_eq!((n.data(), s), (&[0.5f32, -1.0][..], 4.0));
        let (n, s) = normalize_weights(&Tensor::zeros(&[3, 3]));
        assert_eq!(s, 1.0);
        assert!(n.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn scheme_examples() {
        assert_eq!(map_two_column(0.3).unwrap(), (0.3, 0.0));
        assert_eq!(map_two_column(-0.5).unwrap(), (0.0, 0.5));
        assert_eq!(map_two_column(0.0).unwrap(), (0.0, 0.0));

        assert_eq!(map_offset(1.0).unwrap(), 1.0);
        assert_eq!(map_offset(-1.0).unwrap(), 0.0);
        assert_eq!(map_offset(0.0).unwrap(), 0.5);

        assert_eq!(map_differential(0.3).unwrap(), (1.0, 0.7));
        assert_eq!(map_differential(0.0).unwrap(), (1.0, 1.0));
        assert_eq!(map_differential(-0.5).unwrap(), (0.5, 1.0));
    }

    #[test]
    fn out_of_range_rejected() {
        for w in [1.0001f32, -1.5, f32::NAN] {
            assert!(map_two_column(w).is_err());
            assert!(map_offset(w).is_err());
            assert!(map_differential(w).is_err());
        }
    }

    #[test]
    fn parse_scheme_names() {
        for s in MappingScheme::ALL {
            assert_eq!(s.name().parse::<MappingScheme>().unwrap(), s);
        }
        assert!("three-column".parse::<MappingScheme>().is_err());
    }

    #[test]
    fn two_by_two_differential_fits_one_tile() {
        let w = Tensor::new(vec![2, 2], vec![0.5, -1.0, 0.0, 0.25]).unwrap();
        let m = map_layer(&w, MappingScheme::Differential, 128, 128).unwrap();
        assert_eq!(m.tiles.len(), 1);
        let g = m.tiles[0].conductance.data();
        let occupied: Vec<(usize, usize)> = (0..128 * 128)
            .filter(|&i| {
                m.layout
                    .owner(CellAddr {
                        tile: 0,
                        row: i / 128,
                        col: i % 128,
                    })
                    .is_some()
            })
            .map(|i| (i / 128, i % 128))
            .collect();
        assert_eq!(occupied.len(), 8);
        assert!(occupied.iter().all(|&(r, c)| r < 2 && c < 4));
        // row 0: w=0.5 -> (1, 0.5), w=-1 -> (0, 1)
        assert_eq!(&g[..4], &[1.0, 0.5, 0.0, 1.0]);
    }

    #[test]
    fn tall_two_column_splits_by_rows() {
        let w = Tensor::from_fn(&[200, 3], |i| (i % 7) as f32 - 3.0).unwrap();
        let m = map_layer(&w, MappingScheme::TwoColumn, 128, 128).unwrap();
        assert_eq!((m.layout.tiles_down, m.layout.tiles_across), (2, 1));
        assert_eq!(m.tiles.len(), 2);
    }

    #[test]
    fn pairs_never_straddle_tiles() {
        let layout = Layout::new(5, 7, MappingScheme::Differential, 2, 5).unwrap();
        for r in 0..5 {
            for c in 0..7 {
                let a = layout.locate(r, c, 0);
                let b = layout.locate(r, c, 1);
                assert_eq!((a.tile, a.row, a.col + 1), (b.tile, b.row, b.col));
            }
        }
    }

    #[test]
    fn bad_tiles_rejected() {
        let w = Tensor::zeros(&[2, 2]);
        assert!(map_layer(&w, MappingScheme::Offset, 0, 4).is_err());
        assert!(map_layer(&w, MappingScheme::Differential, 4, 1).is_err());
    }

    #[test]
    fn substituted_faults() {
        let w = Tensor::new(vec![1, 1], vec![0.3]).unwrap();
        let mut m = map_layer(&w, MappingScheme::Differential, 4, 4).unwrap();
        // scale is 0.3 here; substitute g_b -> 1 by hand
        let b = m.layout.locate(0, 0, 1);
        let mut data = m.tiles[0].conductance.data().to_vec();
        data[b.row * 4 + b.col] = 1.0;
        m.tiles[0].conductance = Tensor::new(vec![4, 4], data).unwrap();
        assert_eq!(reconstruct_effective_weights(&m).unwrap().data(), &[0.0]);

        let w = Tensor::new(vec![1, 2], vec![0.0, -2.0]).unwrap();
        let mut m = map_layer(&w, MappingScheme::TwoColumn, 4, 4).unwrap();
        let p = m.layout.locate(0, 0, 0);
        let mut data = m.tiles[0].conductance.data().to_vec();
        data[p.row * 4 + p.col] = 1.0;
        m.tiles[0].conductance = Tensor::new(vec![4, 4], data).unwrap();
        assert_eq!(
            reconstruct_effective_weights(&m).unwrap().data(),
            &[2.0, -2.0]
        );
    }

    #[test]
    fn corrupted_layout_detected() {
        let w = Tensor::zeros(&[3, 3]);
        let mut m = map_layer(&w, MappingScheme::Offset, 2, 2).unwrap();
        m.tiles.pop();
        assert!(matches!(
            reconstruct_effective_weights(&m),
            Err(Error::Layout(_))
        ));
    }

    fn weight_matrix() -> impl Strategy<Value = Tensor> {
        (1usize..40, 1usize..40).prop_flat_map(|(r, c)| {
            prop::collection::vec(-10.0f32..10.0, r * c)
                .prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn normalization_property(w in weight_matrix()) {
            prop_assume!(w.max_abs() > 0.0);
            let (n, s) = normalize_weights(&w);
            prop_assert_eq!(n.max_abs(), 1.0);
            for (a, b) in n.data().iter().zip(w.data()) {
                prop_assert!((a * s - b).abs() <= b.abs() * 2.0 * f32::EPSILON);
            }
        }

        #[test]
        fn layout_is_a_bijection(
            rows in 1usize..30, cols in 1usize..30, tr in 1usize..9, tc in 2usize..9, scheme_idx in 0usize..3,
        ) {
            let scheme = MappingScheme::ALL[scheme_idx];
            let l = Layout::new(rows, cols, scheme, tr, tc).unwrap();
            let mut seen = std::collections::HashSet::new();
            for r in 0..rows {
                for c in 0..cols {
                    for k in 0..l.cells_per_weight {
                        let a = l.locate(r, c, k);
                        prop_assert!(seen.insert(a));
                        prop_assert_eq!(l.owner(a), Some((r, c, k)));
                    }
                }
            }
            let mut occupied = 0;
            for tile in 0..l.tile_count() {
                for row in 0..tr {
                    for col in 0..tc {
                        if l.owner(CellAddr { tile, row, col }).is_some() {
                            occupied += 1;
                        }
                    }
                }
            }
            prop_assert_eq!(occupied, l.occupied_cells());
        }

        #[test]
        fn fault_free_round_trip(w in weight_matrix(), scheme_idx in 0usize..3, tr in 1usize..20, tc in 2usize..20) {
            let scheme = MappingScheme::ALL[scheme_idx];
            let m = map_layer(&w, scheme, tr, tc).unwrap();
            for t in &m.tiles {
                prop_assert!(t.conductance.data().iter().all(|g| (0.0..=1.0).contains(g)));
            }
            let back = reconstruct_effective_weights(&m).unwrap();
            for (a, b) in back.data().iter().zip(w.data()) {
                prop_assert!((a - b).abs() <= 2e-6 * m.scale.max(1.0), "{} vs {}", a, b);
            }
        }
    }
}
