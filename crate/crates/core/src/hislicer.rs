//! Slicing a high-resolution image into a grid of tiles, packaging the tiles
//! as a group-grounding instance, and mapping tile-local answers back to the
//! source image.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::benchdata::{ImageRef, Instance, TaskKind};
use crate::geometry::{BBox, CoordSpace, GeometryError, Region, Scalar};

/// Longest tile side targeted by [`GridSpec::default_for`].
pub const DEFAULT_MAX_TILE_SIDE: u32 = 1024;

/// Meta key holding the serialized [`TileGrid`].
pub const META_TILE_GRID: &str = "tile_grid";

#[derive(Debug, Error, PartialEq)]
pub enum SliceError {
    #[error("grid {rows}x{cols} must have at least two tiles")]
    TooFewTiles { rows: u32, cols: u32 },
    #[error("image dimensions must be positive, got {width}x{height}")]
    EmptyImage { width: u32, height: u32 },
    #[error("grid {rows}x{cols} is finer than the {width}x{height} image")]
    GridTooFine { rows: u32, cols: u32, width: u32, height: u32 },
    #[error("overlap {overlap} is not smaller than the smallest tile side {tile}")]
    OverlapTooLarge { overlap: u32, tile: u32 },
    #[error("tile index {index} out of range for {count} tiles")]
    BadTile { index: usize, count: usize },
    #[error("box {0} exceeds the tile bounds")]
    OutOfTile(String),
    #[error("bad grid spec `{0}`; expected RxC")]
    BadSpec(String),
    #[error("instance carries no usable tile grid: {0}")]
    BadMeta(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}: {reason}")]
    Image { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: u32,
    pub cols: u32,
    #[serde(default)]
    pub overlap: u32,
}

impl GridSpec {
    /// Smallest grid whose tiles are at most `max_side` pixels on each side,
    /// with at least two tiles (the longer image axis is split first).
    pub fn default_for(width: u32, height: u32, max_side: u32) -> Self {
        let max_side = max_side.max(1);
        let mut cols = width.div_ceil(max_side).max(1);
        let mut rows = height.div_ceil(max_side).max(1);
        if rows * cols < 2 {
            if width >= height {
                cols = 2;
            } else {
                rows = 2;
            }
        }
        GridSpec { rows, cols, overlap: 0 }
    }

    /// Parses `RxC`.
    pub fn parse(s: &str, overlap: u32) -> Result<Self, SliceError> {
        let bad = || SliceError::BadSpec(s.to_string());
        let (r, c) = s.trim().split_once(['x', 'X']).ok_or_else(bad)?;
        Ok(GridSpec { rows: r.trim().parse().map_err(|_| bad())?, cols: c.trim().parse().map_err(|_| bad())?, overlap })
    }
}

/// Pixel rectangle `[x, x+width) × [y, y+height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl TileRect {
    pub fn contains_pixel(&self, px: u32, py: u32) -> bool {
        px >= self.x && px < self.x + self.width && py >= self.y && py < self.y + self.height
    }

    pub fn bbox<T: Scalar>(&self) -> BBox<T> {
        let c = |v: u32| T::from_u32(v).expect("u32 fits every scalar");
        BBox { x1: c(self.x), y1: c(self.y), x2: c(self.x + self.width), y2: c(self.y + self.height) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub width: u32,
    pub height: u32,
    pub spec: GridSpec,
    /// Row-major.
    pub tiles: Vec<TileRect>,
}

/// Ceiling-first split of `len` into `n` parts: the first `len % n` parts
/// get one extra pixel. Returns (start, size) pairs.
fn split(len: u32, n: u32) -> Vec<(u32, u32)> {
    let (base, extra) = (len / n, len % n);
    (0..n).map(|j| (j * base + j.min(extra), base + u32::from(j < extra))).collect()
}

/// Cuts a `width`×`height` image into `spec.rows`×`spec.cols` tiles.
/// Each core cell is grown by `spec.overlap` pixels on every side and
/// clamped to the image.
pub fn slice(width: u32, height: u32, spec: GridSpec) -> Result<TileGrid, SliceError> {
    let GridSpec { rows, cols, overlap } = spec;
    if width == 0 || height == 0 {
        return Err(SliceError::EmptyImage { width, height });
    }
    if rows == 0 || cols == 0 || (rows as u64) * (cols as u64) < 2 {
        return Err(SliceError::TooFewTiles { rows, cols });
    }
    if rows > height || cols > width {
        return Err(SliceError::GridTooFine { rows, cols, width, height });
    }
    let smallest = (width / cols).min(height / rows);
    if overlap >= smallest {
        return Err(SliceError::OverlapTooLarge { overlap, tile: smallest });
    }
    let xs = split(width, cols);
    let ys = split(height, rows);
    let grow = |start: u32, size: u32, limit: u32| {
        let lo = start.saturating_sub(overlap);
        let hi = (start + size + overlap).min(limit);
        (lo, hi - lo)
    };
    let mut tiles = Vec::with_capacity((rows * cols) as usize);
    for &(y0, h0) in &ys {
        for &(x0, w0) in &xs {
            let (x, w) = grow(x0, w0, width);
            let (y, h) = grow(y0, h0, height);
            tiles.push(TileRect { x, y, width: w, height: h });
        }
    }
    Ok(TileGrid { width, height, spec, tiles })
}

impl TileGrid {
    pub fn tile(&self, index: usize) -> Result<&TileRect, SliceError> {
        self.tiles.get(index).ok_or(SliceError::BadTile { index, count: self.tiles.len() })
    }

    /// Row-major index of tile (row, col).
    pub fn index(&self, row: u32, col: u32) -> usize {
        (row * self.spec.cols + col) as usize
    }

    /// Tile-local coordinates of a source box lying inside tile `index`.
    pub fn to_tile<T: Scalar>(&self, index: usize, b: &BBox<T>) -> Result<BBox<T>, SliceError> {
        let t = self.tile(index)?;
        if !t.bbox::<T>().contains(b) {
            return Err(SliceError::OutOfTile(format!("{b:?}")));
        }
        let c = |v: u32| T::from_u32(v).expect("u32 fits every scalar");
        Ok(BBox { x1: b.x1 - c(t.x), y1: b.y1 - c(t.y), x2: b.x2 - c(t.x), y2: b.y2 - c(t.y) })
    }

    pub fn from_meta(meta: &std::collections::BTreeMap<String, Value>) -> Result<Self, SliceError> {
        let v = meta.get(META_TILE_GRID).ok_or_else(|| SliceError::BadMeta(format!("missing `{META_TILE_GRID}`")))?;
        serde_json::from_value(v.clone()).map_err(|e| SliceError::BadMeta(e.to_string()))
    }
}

/// Translates a box in tile `index`'s pixel space to source pixels.
pub fn map_back<T: Scalar>(grid: &TileGrid, index: usize, b: &BBox<T>) -> Result<BBox<T>, SliceError> {
    let t = grid.tile(index)?;
    let zero = T::zero();
    let c = |v: u32| T::from_u32(v).expect("u32 fits every scalar");
    let bounds = BBox { x1: zero, y1: zero, x2: c(t.width), y2: c(t.height) };
    if !b.is_canonical() || !bounds.contains(b) {
        return Err(SliceError::OutOfTile(format!("{b:?}")));
    }
    Ok(b.translate(c(t.x), c(t.y)))
}

/// Maps a predicted region (tile = image index, any coordinate space) to
/// source pixels, clamping into the tile first.
pub fn map_back_region(grid: &TileGrid, r: &Region) -> Result<BBox, SliceError> {
    let t = grid.tile(r.image_index)?;
    let px = r.to_space(CoordSpace::pixel(t.width, t.height)?)?;
    let (x, _) = px.bbox.clamp(0.0, t.width as f64);
    let (y, _) = px.bbox.clamp(0.0, t.height as f64);
    let b = BBox { x1: x.x1, y1: y.y1, x2: x.x2, y2: y.y2 };
    map_back(grid, r.image_index, &b)
}

/// Picks the tile holding `target` (source pixels): the first tile in
/// row-major order containing it whole, else the one overlapping it most,
/// with the box clipped to that tile.
pub fn target_tile(grid: &TileGrid, target: &BBox) -> (usize, BBox) {
    if let Some(i) = grid.tiles.iter().position(|t| t.bbox::<f64>().contains(target)) {
        return (i, grid.to_tile(i, target).expect("contained"));
    }
    let (i, inter) = grid
        .tiles
        .iter()
        .enumerate()
        .map(|(i, t)| (i, t.bbox::<f64>().intersection(target)))
        .max_by(|a, b| {
            let area = |x: &Option<BBox>| x.map_or(0.0, |b| b.area());
            area(&a.1).total_cmp(&area(&b.1)).then(b.0.cmp(&a.0))
        })
        .expect("grid has tiles");
    let clipped = inter.unwrap_or(grid.tiles[i].bbox());
    (i, grid.to_tile(i, &clipped).expect("clipped to tile"))
}

/// Builds a group-grounding instance over the tile images. `tile_paths`
/// are the crop files in row-major order; `target` is the answer box in
/// source pixels.
pub fn to_group_instance(
    id: &str,
    question: &str,
    grid: &TileGrid,
    tile_paths: &[String],
    target: &BBox,
) -> Result<Instance, SliceError> {
    if tile_paths.len() != grid.tiles.len() {
        return Err(SliceError::BadMeta(format!("{} paths for {} tiles", tile_paths.len(), grid.tiles.len())));
    }
    let images: Vec<ImageRef> = grid
        .tiles
        .iter()
        .zip(tile_paths)
        .map(|(t, p)| ImageRef { path: p.clone(), width: t.width, height: t.height })
        .collect();
    let (tile, local) = target_tile(grid, target);
    let mut meta = std::collections::BTreeMap::new();
    meta.insert(META_TILE_GRID.to_string(), serde_json::to_value(grid).expect("grid serializes"));
    Ok(Instance {
        id: id.to_string(),
        task: TaskKind::GroupGrounding,
        query_text: Some(question.to_string()),
        query_regions: vec![],
        ground_truth: vec![Region { image_index: tile, bbox: local, space: images[tile].space() }],
        images,
        meta,
    })
}

/// Pixel dimensions of an image file, read from its header.
pub fn image_dimensions(path: &Path) -> Result<(u32, u32), SliceError> {
    image::image_dimensions(path).map_err(|e| SliceError::Image { path: path.to_path_buf(), reason: e.to_string() })
}

/// Writes each tile of `source` as `{stem}-tile{k:02}.png` under `out_dir`
/// and returns the written paths in row-major order.
pub fn write_tiles(source: &Path, grid: &TileGrid, out_dir: &Path, stem: &str) -> Result<Vec<PathBuf>, SliceError> {
    let err =
        |path: &Path, e: &dyn std::fmt::Display| SliceError::Image { path: path.to_path_buf(), reason: e.to_string() };
    let img = image::open(source).map_err(|e| err(source, &e))?;
    if (img.width(), img.height()) != (grid.width, grid.height) {
        return Err(err(
            source,
            &format!("image is {}x{}, grid was cut for {}x{}", img.width(), img.height(), grid.width, grid.height),
        ));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| err(out_dir, &e))?;
    let mut paths = Vec::with_capacity(grid.tiles.len());
    for (k, t) in grid.tiles.iter().enumerate() {
        let path = out_dir.join(format!("{stem}-tile{k:02}.png"));
        img.crop_imm(t.x, t.y, t.width, t.height).save(&path).map_err(|e| err(&path, &e))?;
        paths.push(path);
    }
    Ok(paths)
}
