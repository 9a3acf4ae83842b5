//! Stuck-at fault model.
//!
//! Each occupied cell independently becomes stuck-off (conductance pinned to
//! 0) with probability `p_off`, stuck-on (pinned to 1) with probability
//! `p_on`, or stays healthy. Cell `i` (flat index across tiles, see
//! [`Layout::flat_index`]) draws `u = CounterRng(seed).uniform_at(i)` and is
//! stuck-off if `u < p_off`, stuck-on if `p_off ≤ u < p_off + p_on`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapping::{reconstruct_effective_weights, CellAddr, CrossbarTile, Layout, MappedLayer};
use crate::numerics::Tensor;
use crate::rng::CounterRng;

/// Stuck-on : stuck-off occurrence ratio of the reference failure model.
pub const DEFAULT_ON_OFF_RATIO: f64 = 5.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultModel {
    p_off: f64,
    p_on: f64,
}

impl FaultModel {
    pub fn new(p_off: f64, p_on: f64) -> Result<Self> {
        for (what, p) in [("p_off", p_off), ("p_on", p_on)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::OutOfRange { what, value: p });
            }
        }
        if p_off + p_on > 1.0 {
            return Err(Error::OutOfRange {
                what: "p_off + p_on",
                value: p_off + p_on,
            });
        }
        Ok(FaultModel { p_off, p_on })
    }

    /// Splits a total per-cell rate `r` as `p_off = r/(1+ratio)`,
    /// `p_on = r·ratio/(1+ratio)`. A ratio of 0 gives stuck-off faults only.
    pub fn from_total_rate(rate: f64, on_off_ratio: f64) -> Result<Self> {
        if !(on_off_ratio >= 0.0 && on_off_ratio.is_finite()) {
            return Err(Error::OutOfRange {
                what: "on/off ratio",
                value: on_off_ratio,
            });
        }
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::OutOfRange {
                what: "fault rate",
                value: rate,
            });
        }
        let p_off = rate / (1.0 + on_off_ratio);
        let p_on = rate * on_off_ratio / (1.0 + on_off_ratio);
        // rounding may push the sum a hair above 1 for rate = 1
        FaultModel::new(p_off, p_on.min(1.0 - p_off))
    }

    pub fn none() -> Self {
        FaultModel {
            p_off: 0.0,
            p_on: 0.0,
        }
    }

    pub fn p_off(&self) -> f64 {
        self.p_off
    }

    pub fn p_on(&self) -> f64 {
        self.p_on
    }

    pub fn total(&self) -> f64 {
        self.p_off + self.p_on
    }

    pub fn is_fault_free(&self) -> bool {
        self.total() == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum CellState {
    Healthy = 0,
    StuckOff = 1,
    StuckOn = 2,
}

/// Which cells are eligible for faults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellSelection {
    /// Only cells that hold part of a weight.
    #[default]
    Occupied,
    /// Padding cells too.
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultMask {
    /// One `tile_rows × tile_cols` state grid per tile.
    pub tiles: Vec<Vec<CellState>>,
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub seed: u64,
    pub model: FaultModel,
}

impl FaultMask {
    /// All cells healthy.
    pub fn healthy(layout: &Layout) -> Self {
        FaultMask {
            tiles: vec![vec![CellState::Healthy; layout.cells_per_tile()]; layout.tile_count()],
            tile_rows: layout.tile_rows,
            tile_cols: layout.tile_cols,
            seed: 0,
            model: FaultModel::none(),
        }
    }

    pub fn state(&self, addr: CellAddr) -> CellState {
        self.tiles[addr.tile][addr.row * self.tile_cols + addr.col]
    }

    pub fn set(&mut self, addr: CellAddr, state: CellState) {
        self.tiles[addr.tile][addr.row * self.tile_cols + addr.col] = state;
    }

    pub fn count(&self, state: CellState) -> usize {
        self.tiles.iter().flatten().filter(|&&s| s == state).count()
    }
}

pub fn sample_fault_mask(layout: &Layout, model: &FaultModel, seed: u64) -> FaultMask {
    sample_fault_mask_with(layout, model, seed, CellSelection::Occupied)
}

pub fn sample_fault_mask_with(
    layout: &Layout,
    model: &FaultModel,
    seed: u64,
    selection: CellSelection,
) -> FaultMask {
    let mut mask = FaultMask::healthy(layout);
    mask.seed = seed;
    mask.model = *model;
    if model.is_fault_free() {
        return mask;
    }
    let rng = CounterRng::new(seed);
    let threshold_on = model.p_off + model.p_on;
    let draw = |addr: CellAddr, mask: &mut FaultMask| {
        let u = rng.uniform_at(layout.flat_index(addr) as u64);
        if u < model.p_off {
            mask.set(addr, CellState::StuckOff);
        } else if u < threshold_on {
            mask.set(addr, CellState::StuckOn);
        }
    };
    match selection {
        CellSelection::Occupied => {
            for r in 0..layout.weight_rows {
                for c in 0..layout.weight_cols {
                    for role in 0..layout.cells_per_weight {
                        draw(layout.locate(r, c, role), &mut mask);
                    }
                }
            }
        }
        CellSelection::All => {
            for tile in 0..layout.tile_count() {
                for row in 0..layout.tile_rows {
                    for col in 0..layout.tile_cols {
                        draw(CellAddr { tile, row, col }, &mut mask);
                    }
                }
            }
        }
    }
    mask
}

/// Pins stuck-on cells to 1 and stuck-off cells to 0 in a copy of `mapped`.
pub fn apply_faults(mapped: &MappedLayer, mask: &FaultMask) -> Result<MappedLayer> {
    let l = &mapped.layout;
    if mask.tiles.len() != mapped.tiles.len()
        || mask.tile_rows != l.tile_rows
        || mask.tile_cols != l.tile_cols
        || mask.tiles.iter().any(|t| t.len() != l.cells_per_tile())
    {
        return Err(Error::ShapeMismatch {
            op: "apply_faults",
            left: vec![mapped.tiles.len(), l.tile_rows, l.tile_cols],
            right: vec![mask.tiles.len(), mask.tile_rows, mask.tile_cols],
        });
    }
    let stuck = mask
        .tiles
        .iter()
        .enumerate()
        .map(|(t, states)| {
            states
                .iter()
                .enumerate()
                .map(|(i, &s)| match (s, &mapped.stuck) {
                    (CellState::Healthy, Some(prev)) => prev[t][i],
                    _ => s,
                })
                .collect()
        })
        .collect();
    let tiles = mapped
        .tiles
        .iter()
        .zip(&mask.tiles)
        .map(|(tile, states)| {
            let data = tile
                .conductance
                .data()
                .iter()
                .zip(states)
                .map(|(&g, s)| match s {
                    CellState::Healthy => g,
                    CellState::StuckOff => 0.0,
                    CellState::StuckOn => 1.0,
                })
                .collect();
            Ok(CrossbarTile {
                rows: tile.rows,
                cols: tile.cols,
                conductance: Tensor::new(vec![tile.rows, tile.cols], data)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MappedLayer {
        scheme: mapped.scheme,
        tiles,
        scale: mapped.scale,
        layout: mapped.layout.clone(),
        stuck: Some(stuck),
    })
}

/// Observed mismatch between two copies of one layer.
///
/// A cell counts as mismatched when it is stuck in the faulted copy but not
/// in the original, even if it happens to be pinned to its programmed value
/// (this is the per-cell defect rate). A weight counts as mismatched only when
/// its effective value differs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Mismatch {
    pub changed_cells: usize,
    pub cells: usize,
    pub changed_weights: usize,
    pub weights: usize,
}

impl Mismatch {
    /// Fraction of occupied cells that became stuck.
    pub fn per_cell(&self) -> f64 {
        self.changed_cells as f64 / self.cells as f64
    }

    /// Fraction of weights whose effective value changed.
    pub fn per_weight(&self) -> f64 {
        self.changed_weights as f64 / self.weights as f64
    }

    pub fn merge(self, other: Mismatch) -> Mismatch {
        Mismatch {
            changed_cells: self.changed_cells + other.changed_cells,
            cells: self.cells + other.cells,
            changed_weights: self.changed_weights + other.changed_weights,
            weights: self.weights + other.weights,
        }
    }
}

/// Counts changed cells and changed effective weights between two copies of
/// the same mapped layer.
pub fn mismatch_rate(original: &MappedLayer, faulted: &MappedLayer) -> Result<Mismatch> {
    if original.layout != faulted.layout
        || original.scheme != faulted.scheme
        || original.scale != faulted.scale
    {
        return Err(Error::Layout(
            "mismatch_rate needs two copies of the same mapped layer".into(),
        ));
    }
    let before = reconstruct_effective_weights(original)?;
    let after = reconstruct_effective_weights(faulted)?;
    let l = &original.layout;
    let is_stuck = |m: &MappedLayer, a: CellAddr| {
        m.stuck
            .as_ref()
            .is_some_and(|s| s[a.tile][a.row * l.tile_cols + a.col] != CellState::Healthy)
    };
    let mut changed_cells = 0;
    for r in 0..l.weight_rows {
        for c in 0..l.weight_cols {
            for role in 0..l.cells_per_weight {
                let a = l.locate(r, c, role);
                if is_stuck(faulted, a) && !is_stuck(original, a) {
                    changed_cells += 1;
                }
            }
        }
    }
    let changed_weights = before
        .data()
        .iter()
        .zip(after.data())
        .filter(|(a, b)| a != b)
        .count();
    Ok(Mismatch {
        changed_cells,
        cells: l.occupied_cells(),
        changed_weights,
        weights: l.weight_count(),
    })
}
