//! Binary voxel volumes, their raw+sidecar file format, and unit-cell tiling.
//!
//! A volume on disk is a headerless raw file holding one byte per voxel
//! (x-fastest) next to a UTF-8 key/value sidecar:
//!
//! ```text
//! dims = [400, 800, 368]
//! spacing = [14.71, 14.71, 14.71]
//! order = "x-fastest"
//! encoding = "u8-binary"
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Dims, Field3};

pub const ORDER_X_FASTEST: &str = "x-fastest";
pub const ENCODING_U8_BINARY: &str = "u8-binary";

/// Parsed contents of a volume sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub order: String,
    pub encoding: String,
}

impl VolumeMeta {
    pub fn new(dims: Dims, spacing: [f64; 3]) -> Self {
        VolumeMeta {
            dims: dims.0,
            spacing,
            order: ORDER_X_FASTEST.to_string(),
            encoding: ENCODING_U8_BINARY.to_string(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let meta: VolumeMeta =
            toml::from_str(text).map_err(|e| Error::Metadata(e.message().to_string()))?;
        meta.validate()?;
        Ok(meta)
    }

    pub fn to_text(&self) -> String {
        // toml renders floats with enough digits to round-trip.
        toml::to_string(self).expect("volume metadata always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.order != ORDER_X_FASTEST {
            return Err(Error::Metadata(format!(
                "unsupported axis order {:?}, expected {ORDER_X_FASTEST:?}",
                self.order
            )));
        }
        if self.encoding != ENCODING_U8_BINARY {
            return Err(Error::Metadata(format!(
                "unsupported encoding {:?}, expected {ENCODING_U8_BINARY:?}",
                self.encoding
            )));
        }
        if self.dims.iter().any(|&n| n == 0) {
            return Err(Error::Metadata(format!(
                "dims {:?} must be positive",
                self.dims
            )));
        }
        if self
            .dims
            .iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
            .is_none()
        {
            return Err(Error::Metadata(format!("dims {:?} overflow", self.dims)));
        }
        check_spacing(self.spacing).map_err(|e| Error::Metadata(e.to_string()))
    }

    pub fn grid_dims(&self) -> Dims {
        Dims(self.dims)
    }
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "spacing {spacing:?} must be finite and strictly positive"
        )));
    }
    Ok(())
}

/// Binary volume: 1 is material, 0 is void.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: Dims,
    spacing: [f64; 3],
    data: Vec<u8>,
}

impl VoxelGrid {
    pub fn new(dims: Dims, spacing: [f64; 3], data: Vec<u8>) -> Result<Self> {
        dims.validate()?;
        check_spacing(spacing)?;
        if data.len() != dims.len() {
            return Err(Error::SizeMismatch {
                expected: dims.len(),
                actual: data.len(),
            });
        }
        if let Some(offset) = data.iter().position(|&v| v > 1) {
            return Err(Error::NonBinary {
                offset,
                value: data[offset],
            });
        }
        Ok(VoxelGrid {
            dims,
            spacing,
            data,
        })
    }

    /// Unit-spacing grid built from a predicate on voxel coordinates.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for k in 0..dims.nz() {
            for j in 0..dims.ny() {
                for i in 0..dims.nx() {
                    data.push(u8::from(f(i, j, k)));
                }
            }
        }
        VoxelGrid {
            dims,
            spacing: [1.0; 3],
            data,
        }
    }

    pub fn filled(dims: Dims, value: bool) -> Self {
        VoxelGrid {
            dims,
            spacing: [1.0; 3],
            data: vec![u8::from(value); dims.len()],
        }
    }

    /// Decodes a raw byte buffer against a parsed sidecar.
    pub fn from_raw(meta: &VolumeMeta, raw: &[u8]) -> Result<Self> {
        meta.validate()?;
        let dims = meta.grid_dims();
        if raw.len() != dims.len() {
            return Err(Error::SizeMismatch {
                expected: dims.len(),
                actual: raw.len(),
            });
        }
        Self::new(dims, meta.spacing, raw.to_vec())
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        check_spacing(spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.data[self.dims.index(i, j, k)]
    }

    pub fn meta(&self) -> VolumeMeta {
        VolumeMeta::new(self.dims, self.spacing)
    }

    pub fn material_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Void (value 0) fraction.
    pub fn porosity(&self) -> f64 {
        porosity(self)
    }
}

pub fn porosity(grid: &VoxelGrid) -> f64 {
    let void = grid.len() - grid.material_count();
    void as f64 / grid.len() as f64
}

/// Parses a sidecar text and decodes the matching raw bytes.
pub fn decode_volume(meta_text: &str, raw: &[u8]) -> Result<VoxelGrid> {
    let meta = VolumeMeta::parse(meta_text)?;
    VoxelGrid::from_raw(&meta, raw)
}

pub fn load_volume(meta_path: impl AsRef<Path>, raw_path: impl AsRef<Path>) -> Result<VoxelGrid> {
    let meta_path = meta_path.as_ref();
    let raw_path = raw_path.as_ref();
    let text = fs::read_to_string(meta_path).map_err(|e| Error::io(meta_path, e))?;
    let raw = fs::read(raw_path).map_err(|e| Error::io(raw_path, e))?;
    decode_volume(&text, &raw)
}

pub fn save_volume(
    grid: &VoxelGrid,
    meta_path: impl AsRef<Path>,
    raw_path: impl AsRef<Path>,
) -> Result<()> {
    let meta_path = meta_path.as_ref();
    let raw_path = raw_path.as_ref();
    fs::write(meta_path, grid.meta().to_text()).map_err(|e| Error::io(meta_path, e))?;
    fs::write(raw_path, grid.as_bytes()).map_err(|e| Error::io(raw_path, e))?;
    Ok(())
}

/// Periodic unit cells tiling a parent volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitCellLayout {
    cell_dims: Dims,
    grid_dims: Dims,
}

impl UnitCellLayout {
    pub fn new(cell_dims: Dims, grid_dims: Dims) -> Result<Self> {
        cell_dims
            .validate()
            .map_err(|_| Error::Layout(format!("cell dims {cell_dims} must be positive")))?;
        grid_dims
            .validate()
            .map_err(|_| Error::Layout(format!("grid dims {grid_dims} must be positive")))?;
        for a in 0..3 {
            if grid_dims.0[a] % cell_dims.0[a] != 0 {
                return Err(Error::Layout(format!(
                    "grid dims {grid_dims} are not a multiple of cell dims {cell_dims}"
                )));
            }
        }
        Ok(UnitCellLayout {
            cell_dims,
            grid_dims,
        })
    }

    pub fn cell_dims(&self) -> Dims {
        self.cell_dims
    }

    pub fn grid_dims(&self) -> Dims {
        self.grid_dims
    }

    /// Number of cells per axis.
    pub fn cell_counts(&self) -> Dims {
        Dims([
            self.grid_dims.0[0] / self.cell_dims.0[0],
            self.grid_dims.0[1] / self.cell_dims.0[1],
            self.grid_dims.0[2] / self.cell_dims.0[2],
        ])
    }

    pub fn n_cells(&self) -> usize {
        self.cell_counts().len()
    }

    /// Global voxel index of local voxel `local` in cell number `cell`.
    #[inline]
    pub fn global_index(&self, cell: usize, local: [usize; 3]) -> usize {
        let c = self.cell_counts().coords(cell);
        let cd = self.cell_dims.0;
        self.grid_dims.index(
            c[0] * cd[0] + local[0],
            c[1] * cd[1] + local[1],
            c[2] * cd[2] + local[2],
        )
    }

    fn check_grid(&self, dims: Dims) -> Result<()> {
        if dims != self.grid_dims {
            return Err(Error::Layout(format!(
                "grid dims {dims} differ from layout grid dims {}",
                self.grid_dims
            )));
        }
        Ok(())
    }
}

/// Splits a volume into its unit cells, ordered by cell index (x fastest).
pub fn extract_cells(grid: &VoxelGrid, layout: &UnitCellLayout) -> Result<Vec<VoxelGrid>> {
    layout.check_grid(grid.dims())?;
    let cd = layout.cell_dims();
    let cells = (0..layout.n_cells())
        .map(|cell| {
            let mut data = Vec::with_capacity(cd.len());
            for k in 0..cd.nz() {
                for j in 0..cd.ny() {
                    for i in 0..cd.nx() {
                        data.push(grid.data[layout.global_index(cell, [i, j, k])]);
                    }
                }
            }
            VoxelGrid {
                dims: cd,
                spacing: grid.spacing,
                data,
            }
        })
        .collect();
    Ok(cells)
}

/// Inverse of [`extract_cells`].
pub fn assemble_cells(cells: &[VoxelGrid], layout: &UnitCellLayout) -> Result<VoxelGrid> {
    if cells.len() != layout.n_cells() {
        return Err(Error::Layout(format!(
            "{} cells given, layout holds {}",
            cells.len(),
            layout.n_cells()
        )));
    }
    let cd = layout.cell_dims();
    let mut data = vec![0u8; layout.grid_dims().len()];
    for (cell, c) in cells.iter().enumerate() {
        if c.dims() != cd {
            return Err(Error::Layout(format!(
                "cell {cell} has dims {}, expected {cd}",
                c.dims()
            )));
        }
        for (local_idx, &v) in c.data.iter().enumerate() {
            data[layout.global_index(cell, cd.coords(local_idx))] = v;
        }
    }
    Ok(VoxelGrid {
        dims: layout.grid_dims(),
        spacing: cells.first().map_or([1.0; 3], |c| c.spacing),
        data,
    })
}

/// Periodically repeats a field defined on one cell over the whole grid.
pub fn tile_to_global(cell_field: &Field3, layout: &UnitCellLayout) -> Result<Field3> {
    let cd = layout.cell_dims();
    if cell_field.dims() != cd {
        return Err(Error::Shape(format!(
            "cell field dims {} differ from cell dims {cd}",
            cell_field.dims()
        )));
    }
    let gd = layout.grid_dims();
    let src = cell_field.as_slice();
    let mut out = Vec::with_capacity(gd.len());
    for k in 0..gd.nz() {
        let kl = k % cd.nz();
        for j in 0..gd.ny() {
            let jl = j % cd.ny();
            let row = cd.index(0, jl, kl);
            for i in 0..gd.nx() {
                out.push(src[row + i % cd.nx()]);
            }
        }
    }
    Field3::from_vec(gd, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng_grid(dims: Dims, seed: u64) -> VoxelGrid {
        let mut state = seed;
        VoxelGrid::from_fn(dims, |_, _, _| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 33) & 1 == 1
        })
    }

    #[test]
    fn decode_small_volume() {
        let meta = VolumeMeta::new(Dims::new(2, 2, 1), [1.0; 3]).to_text();
        let g = decode_volume(&meta, &[0, 1, 1, 0]).unwrap();
        assert_eq!(g.porosity(), 0.5);
    }

    #[test]
    fn size_mismatch_rejected() {
        let meta = VolumeMeta::new(Dims::new(2, 2, 1), [1.0; 3]).to_text();
        let err = decode_volume(&meta, &[0, 1, 1]).unwrap_err();
        assert!(matches!(
            err,
            Error::SizeMismatch {
                expected: 4,
                actual: 3
            }
        ));
    }

    #[test]
    fn non_binary_reports_offset() {
        let meta = VolumeMeta::new(Dims::new(1, 1, 1), [1.0; 3]).to_text();
        let err = decode_volume(&meta, &[7]).unwrap_err();
        assert!(matches!(
            err,
            Error::NonBinary {
                offset: 0,
                value: 7
            }
        ));
    }

    #[test]
    fn malformed_metadata() {
        assert!(matches!(
            VolumeMeta::parse("dims = [1, 2]"),
            Err(Error::Metadata(_))
        ));
        assert!(matches!(
            VolumeMeta::parse(
                "dims=[1,1,1]\nspacing=[1.0,1.0,1.0]\norder=\"z-fastest\"\nencoding=\"u8-binary\""
            ),
            Err(Error::Metadata(_))
        ));
        assert!(matches!(
            VolumeMeta::parse(
                "dims=[1,1,1]\nspacing=[1.0,0.0,1.0]\norder=\"x-fastest\"\nencoding=\"u8-binary\""
            ),
            Err(Error::Metadata(_))
        ));
    }

    #[test]
    fn sidecar_text_shape() {
        let text = VolumeMeta::new(Dims::new(3, 2, 1), [14.71, 14.71, 1.5]).to_text();
        assert!(text.contains("dims = [3, 2, 1]"));
        assert!(text.contains("order = \"x-fastest\""));
        assert!(text.contains("encoding = \"u8-binary\""));
    }

    #[test]
    fn save_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let g = VoxelGrid::filled(Dims::new(4, 4, 4), true);
        let (m, r) = (dir.path().join("v.toml"), dir.path().join("v.raw"));
        save_volume(&g, &m, &r).unwrap();
        let raw = fs::read(&r).unwrap();
        assert_eq!(raw.len(), 64);
        assert!(raw.iter().all(|&b| b == 1));
        assert_eq!(load_volume(&m, &r).unwrap(), g);

        let slice = VoxelGrid::filled(Dims::new(5, 3, 1), false);
        save_volume(&slice, &m, &r).unwrap();
        let meta = VolumeMeta::parse(&fs::read_to_string(&m).unwrap()).unwrap();
        assert_eq!(meta.dims[2], 1);
    }

    #[test]
    fn porosity_all_void() {
        assert_eq!(VoxelGrid::filled(Dims::new(3, 3, 3), false).porosity(), 1.0);
    }

    #[test]
    fn extract_cells_order() {
        let g = VoxelGrid::from_fn(Dims::new(4, 4, 1), |i, j, _| (i / 2 + j / 2) % 2 == 0);
        let layout = UnitCellLayout::new(Dims::new(2, 2, 1), g.dims()).unwrap();
        let cells = extract_cells(&g, &layout).unwrap();
        assert_eq!(cells.len(), 4);
        // cells (0,0),(1,0),(0,1),(1,1) alternate material/void
        let firsts: Vec<u8> = cells.iter().map(|c| c.get(0, 0, 0)).collect();
        assert_eq!(firsts, vec![1, 0, 0, 1]);
    }

    #[test]
    fn single_cell_identity() {
        let g = rng_grid(Dims::new(5, 3, 2), 3);
        let layout = UnitCellLayout::new(g.dims(), g.dims()).unwrap();
        let cells = extract_cells(&g, &layout).unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0], g);
    }

    #[test]
    fn extract_matches_hand_blocks() {
        let g = rng_grid(Dims::new(6, 4, 2), 11);
        let layout = UnitCellLayout::new(Dims::new(3, 2, 1), g.dims()).unwrap();
        let cells = extract_cells(&g, &layout).unwrap();
        assert_eq!(cells.len(), 8);
        let mut n = 0;
        for cz in 0..2 {
            for cy in 0..2 {
                for cx in 0..2 {
                    let cell = &cells[n];
                    for j in 0..2 {
                        for i in 0..3 {
                            assert_eq!(cell.get(i, j, 0), g.get(cx * 3 + i, cy * 2 + j, cz));
                        }
                    }
                    n += 1;
                }
            }
        }
        assert_eq!(assemble_cells(&cells, &layout).unwrap(), g);
    }

    #[test]
    fn incompatible_layout() {
        assert!(matches!(
            UnitCellLayout::new(Dims::new(3, 2, 1), Dims::new(4, 4, 1)),
            Err(Error::Layout(_))
        ));
        let g = VoxelGrid::filled(Dims::new(4, 4, 1), true);
        let other = UnitCellLayout::new(Dims::new(2, 2, 1), Dims::new(2, 4, 1)).unwrap();
        assert!(extract_cells(&g, &other).is_err());
    }

    #[test]
    fn tiling() {
        let layout = UnitCellLayout::new(Dims::new(1, 1, 1), Dims::new(3, 3, 3)).unwrap();
        let t = tile_to_global(&Field3::filled(Dims::new(1, 1, 1), 2.5), &layout).unwrap();
        assert_eq!(t.as_slice(), &[2.5; 27]);

        let layout = UnitCellLayout::new(Dims::new(2, 3, 1), Dims::new(4, 6, 2)).unwrap();
        let cell = Field3::from_vec(Dims::new(2, 3, 1), (0..6).map(f64::from).collect()).unwrap();
        let t = tile_to_global(&cell, &layout).unwrap();
        for k in 0..2 {
            for j in 0..6 {
                for i in 0..4 {
                    assert_eq!(t.get(i, j, k), cell.get(i % 2, j % 3, 0));
                }
            }
        }
        assert!(tile_to_global(&Field3::zeros(Dims::new(1, 1, 1)), &layout).is_err());
    }
}
