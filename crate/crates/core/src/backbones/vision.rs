//! Fixed random patch encoder standing in for a frozen vision tower.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mapper::VisualFeatures;
use crate::tensor::{ParameterSet, Tensor};

/// `G x G` grid of color indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ToyImage {
    grid: usize,
    cells: Vec<usize>,
}

impl ToyImage {
    pub fn new(grid: usize, cells: Vec<usize>) -> Result<Self> {
        if grid == 0 || cells.len() != grid * grid {
            return Err(Error::Data(format!(
                "a {grid}x{grid} image needs {} cells, got {}",
                grid * grid,
                cells.len()
            )));
        }
        Ok(Self { grid, cells })
    }

    /// Builds an image from a flattened square grid.
    pub fn from_flat(cells: Vec<usize>) -> Result<Self> {
        let grid = (cells.len() as f64).sqrt().round() as usize;
        Self::new(grid, cells)
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    /// Color at 1-based `(row, col)`.
    pub fn at(&self, row: usize, col: usize) -> usize {
        self.cells[(row - 1) * self.grid + (col - 1)]
    }
}

/// Frozen encoder weights: a color projection `[C x d_in]` and one
/// positional vector per cell `[G² x d_in]`.
pub fn init_vision(grid: usize, colors: usize, d_in: usize, seed: u64) -> Result<ParameterSet> {
    if grid == 0 {
        return Err(Error::config("grid", "must be at least 1"));
    }
    if colors < 2 {
        return Err(Error::config("colors", "need at least two colors"));
    }
    if d_in == 0 {
        return Err(Error::config("d_in", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParameterSet::new();
    ps.insert("color_proj", Tensor::randn(&[colors, d_in], 1.0, &mut rng), true)?;
    ps.insert("cell_pos", Tensor::randn(&[grid * grid, d_in], 1.0, &mut rng), true)?;
    Ok(ps)
}

/// `[G² + 1 x d_in]`: summary row (mean of cell rows), then one row per cell
/// in raster order, each `color_proj[color] + cell_pos[cell]`.
pub fn encode_image(img: &ToyImage, params: &ParameterSet) -> Result<VisualFeatures> {
    let proj = params.get("color_proj")?;
    let pos = params.get("cell_pos")?;
    let (colors, d) = proj.dims2().ok_or_else(|| Error::shape("encode_image", "color_proj rank"))?;
    let cells = pos.dims2().map(|(n, _)| n).unwrap_or(0);
    if cells != img.cells.len() {
        return Err(Error::shape(
            "encode_image",
            format!(
                "encoder built for {cells} cells, image has {}",
                img.cells.len()
            ),
        ));
    }
    let mut data = vec![0.0; (cells + 1) * d];
    for (i, &c) in img.cells.iter().enumerate() {
        if c >= colors {
            return Err(Error::Data(format!(
                "color index {c} at cell {i} is outside 0..{colors}"
            )));
        }
        let row = &mut data[(i + 1) * d..(i + 2) * d];
        for ((o, a), b) in row.iter_mut().zip(proj.row(c)).zip(pos.row(i)) {
            *o = a + b;
        }
    }
    let (summary, rest) = data.split_at_mut(d);
    for row in rest.chunks(d) {
        for (s, v) in summary.iter_mut().zip(row) {
            *s += v;
        }
    }
    for s in summary.iter_mut() {
        *s /= cells as f64;
    }
    Ok(VisualFeatures(Tensor::new(vec![cells + 1, d], data)?))
}

/// Zero features of the same shape, used by the blind baseline.
pub fn blank_features(params: &ParameterSet) -> Result<VisualFeatures> {
    let d = params.get("color_proj")?.shape()[1];
    let cells = params.get("cell_pos")?.shape()[0];
    Ok(VisualFeatures(Tensor::zeros(&[cells + 1, d])))
}
