//! Occupancy grid storage, map file formats and ray casting.
//!
//! Two on-disk formats are understood:
//!
//! * ASCII: a header line `cols rows resolution origin_x origin_y` followed by
//!   `rows` lines of `cols` characters. `#` is occupied, `.` is free and a
//!   digit `d` is occupancy `d/9`. The first grid line is the top row.
//! * Binary PGM (`P5`) with a sidecar text file holding `resolution: <m>` and
//!   `origin: <x> <y> <theta>`. The sidecar is looked up next to the image
//!   with a `.yaml` extension, then `.meta`. Dark pixels are occupied.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::Pose;

/// Default occupancy above which a cell stops a simulated beam.
pub const DEFAULT_OCC_THRESHOLD: f64 = 0.5;

/// Row-major 2D occupancy map. Cell `(ix, iy)` covers
/// `[origin + ix·res, origin + (ix+1)·res)` along x, likewise along y.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    width: usize,
    height: usize,
    resolution: f64,
    origin: Pose,
    cells: Vec<f64>,
}

impl OccupancyGrid {
    pub fn new(
        width: usize,
        height: usize,
        resolution: f64,
        origin: Pose,
        cells: Vec<f64>,
    ) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::value(format!(
                "resolution must be > 0, got {resolution}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::value("grid must have at least one cell"));
        }
        if cells.len() != width * height {
            return Err(Error::value(format!(
                "cell array has {} entries, expected {width}×{height}",
                cells.len()
            )));
        }
        if let Some(i) = cells.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::value(format!(
                "occupancy {} at cell {i} outside [0, 1]",
                cells[i]
            )));
        }
        Ok(Self {
            width,
            height,
            resolution,
            origin,
            cells,
        })
    }

    /// Grid with every cell set to `value`.
    pub fn filled(
        width: usize,
        height: usize,
        resolution: f64,
        origin: Pose,
        value: f64,
    ) -> Result<Self> {
        Self::new(
            width,
            height,
            resolution,
            origin,
            vec![value; width * height],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> Pose {
        self.origin
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    #[inline]
    pub fn in_bounds(&self, ix: i64, iy: i64) -> bool {
        ix >= 0 && iy >= 0 && (ix as usize) < self.width && (iy as usize) < self.height
    }

    /// Stored occupancy, or 0 outside the grid.
    #[inline]
    pub fn occupancy_at(&self, ix: i64, iy: i64) -> f64 {
        if self.in_bounds(ix, iy) {
            self.cells[iy as usize * self.width + ix as usize]
        } else {
            0.0
        }
    }

    /// Overwrites one cell. Out-of-bounds writes are ignored.
    pub fn set(&mut self, ix: i64, iy: i64, value: f64) {
        if self.in_bounds(ix, iy) {
            self.cells[iy as usize * self.width + ix as usize] = value.clamp(0.0, 1.0);
        }
    }

    /// Continuous grid coordinates (in cells) of a world point.
    #[inline]
    pub fn world_to_grid_f(&self, x: f64, y: f64) -> (f64, f64) {
        let dx = x - self.origin.x;
        let dy = y - self.origin.y;
        if self.origin.theta == 0.0 {
            (dx / self.resolution, dy / self.resolution)
        } else {
            let (s, c) = self.origin.theta.sin_cos();
            (
                (c * dx + s * dy) / self.resolution,
                (-s * dx + c * dy) / self.resolution,
            )
        }
    }

    /// Cell containing a world point; may lie outside the grid.
    pub fn world_to_grid(&self, x: f64, y: f64) -> (i64, i64) {
        let (u, v) = self.world_to_grid_f(x, y);
        (u.floor() as i64, v.floor() as i64)
    }

    /// World coordinates of a cell center.
    pub fn grid_to_world(&self, ix: i64, iy: i64) -> (f64, f64) {
        let u = (ix as f64 + 0.5) * self.resolution;
        let v = (iy as f64 + 0.5) * self.resolution;
        let (s, c) = self.origin.theta.sin_cos();
        (self.origin.x + c * u - s * v, self.origin.y + s * u + c * v)
    }

    /// Largest `|x|` or `|y|` of any map corner, in world meters.
    pub fn half_extent(&self) -> f64 {
        let w = self.width as f64 * self.resolution;
        let h = self.height as f64 * self.resolution;
        let (s, c) = self.origin.theta.sin_cos();
        [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)]
            .iter()
            .map(|&(u, v)| {
                let x = self.origin.x + c * u - s * v;
                let y = self.origin.y + s * u + c * v;
                x.abs().max(y.abs())
            })
            .fold(0.0, f64::max)
    }

    /// Whether a world point lies in a cell at or above `threshold`.
    /// Points off the grid count as free.
    pub fn is_occupied_world(&self, x: f64, y: f64, threshold: f64) -> bool {
        let (ix, iy) = self.world_to_grid(x, y);
        self.occupancy_at(ix, iy) >= threshold
    }

    /// Distance from `from` along world bearing `from.theta + bearing` to the
    /// first cell with occupancy ≥ `occ_threshold`, walking the grid cell by
    /// cell. Returns `max_range` when nothing is hit.
    pub fn raycast(
        &self,
        from: &Pose,
        bearing: f64,
        max_range: f64,
        occ_threshold: f64,
    ) -> Result<f64> {
        if !(max_range >= 0.0) {
            return Err(Error::value(format!(
                "max_range must be >= 0, got {max_range}"
            )));
        }
        let (u0, v0) = self.world_to_grid_f(from.x, from.y);
        let (mut ix, mut iy) = (u0.floor() as i64, v0.floor() as i64);
        if !self.in_bounds(ix, iy) {
            return Err(Error::Range {
                axis: if ix < 0 || ix as usize >= self.width {
                    "x"
                } else {
                    "y"
                },
                value: if ix < 0 || ix as usize >= self.width {
                    from.x
                } else {
                    from.y
                },
                limit: if ix < 0 || ix as usize >= self.width {
                    self.width as f64
                } else {
                    self.height as f64
                },
            });
        }
        if max_range == 0.0 {
            return Ok(0.0);
        }
        if self.occupancy_at(ix, iy) >= occ_threshold {
            return Ok(0.0);
        }

        let (dir_y, dir_x) = (from.theta + bearing - self.origin.theta).sin_cos();
        let max_t = max_range / self.resolution;
        let step_x: i64 = if dir_x > 0.0 { 1 } else { -1 };
        let step_y: i64 = if dir_y > 0.0 { 1 } else { -1 };
        let (delta_x, mut next_x) = axis_params(u0, dir_x);
        let (delta_y, mut next_y) = axis_params(v0, dir_y);

        loop {
            let t = if next_x < next_y {
                let t = next_x;
                next_x += delta_x;
                ix += step_x;
                t
            } else {
                let t = next_y;
                next_y += delta_y;
                iy += step_y;
                t
            };
            if t >= max_t || !self.in_bounds(ix, iy) {
                return Ok(max_range);
            }
            if self.occupancy_at(ix, iy) >= occ_threshold {
                return Ok((t * self.resolution).min(max_range));
            }
        }
    }

    /// Serializes the grid in the ASCII format. Values are quantized to the
    /// nearest ninth; `1` is written as `#` and `0` as `.`.
    pub fn to_ascii(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * (self.height + 1) + 64);
        let _ = writeln!(
            out,
            "{} {} {} {} {}",
            self.width, self.height, self.resolution, self.origin.x, self.origin.y
        );
        for iy in (0..self.height).rev() {
            for ix in 0..self.width {
                let v = self.cells[iy * self.width + ix];
                let d = (v * 9.0).round() as u8;
                out.push(match d {
                    0 => '.',
                    9 => '#',
                    d => (b'0' + d) as char,
                });
            }
            out.push('\n');
        }
        out
    }

    /// Parses the ASCII format. `source_name` is used in error messages.
    pub fn from_ascii(text: &str, source_name: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (hline, header) = lines
            .next()
            .ok_or_else(|| Error::parse(source_name, 1, "empty map file"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::parse(
                source_name,
                hline + 1,
                format!(
                    "header needs `cols rows resolution origin_x origin_y`, got {} fields",
                    fields.len()
                ),
            ));
        }
        let num = |i: usize, what: &str| -> Result<f64> {
            fields[i].parse::<f64>().map_err(|e| {
                Error::parse(
                    source_name,
                    hline + 1,
                    format!("bad {what} `{}`: {e}", fields[i]),
                )
            })
        };
        let int = |i: usize, what: &str| -> Result<usize> {
            fields[i].parse::<usize>().map_err(|e| {
                Error::parse(
                    source_name,
                    hline + 1,
                    format!("bad {what} `{}`: {e}", fields[i]),
                )
            })
        };
        let cols = int(0, "cols")?;
        let rows = int(1, "rows")?;
        let resolution = num(2, "resolution")?;
        let origin = Pose::new(num(3, "origin_x")?, num(4, "origin_y")?, 0.0);
        if cols == 0 || rows == 0 {
            return Err(Error::parse(
                source_name,
                hline + 1,
                "map must have at least one row and column",
            ));
        }
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::parse(
                source_name,
                hline + 1,
                format!("resolution must be > 0, got {resolution}"),
            ));
        }

        let mut cells = vec![0.0; cols * rows];
        let mut row = 0;
        for (lineno, line) in lines {
            if row == rows {
                return Err(Error::parse(
                    source_name,
                    lineno + 1,
                    format!("more than {rows} grid rows"),
                ));
            }
            let line = line.trim_end();
            let chars: Vec<char> = line.chars().collect();
            if chars.len() != cols {
                return Err(Error::parse(
                    source_name,
                    lineno + 1,
                    format!("row has {} columns, expected {cols}", chars.len()),
                ));
            }
            let iy = rows - 1 - row;
            for (ix, ch) in chars.into_iter().enumerate() {
                let v = match ch {
                    '#' => 1.0,
                    '.' => 0.0,
                    '0'..='9' => (ch as u8 - b'0') as f64 / 9.0,
                    other => {
                        return Err(Error::parse(
                            source_name,
                            lineno + 1,
                            format!("column {}: unexpected character `{other}`", ix + 1),
                        ))
                    }
                };
                cells[iy * cols + ix] = v;
            }
            row += 1;
        }
        if row != rows {
            return Err(Error::parse(
                source_name,
                text.lines().count(),
                format!("expected {rows} grid rows, found {row}"),
            ));
        }
        Self::new(cols, rows, resolution, origin, cells)
    }

    /// Parses a binary PGM image with map metadata supplied separately.
    pub fn from_pgm(
        bytes: &[u8],
        resolution: f64,
        origin: Pose,
        source_name: &str,
    ) -> Result<Self> {
        let mut pos = 0usize;
        let mut tokens = Vec::with_capacity(4);
        while tokens.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
                pos += 1;
            }
            if start == pos {
                return Err(Error::parse(
                    source_name,
                    0,
                    format!("truncated PGM header at byte {pos}"),
                ));
            }
            tokens.push((
                start,
                String::from_utf8_lossy(&bytes[start..pos]).into_owned(),
            ));
        }
        if tokens[0].1 != "P5" {
            return Err(Error::parse(
                source_name,
                0,
                format!("not a binary PGM: magic `{}`", tokens[0].1),
            ));
        }
        let field = |i: usize, what: &str| -> Result<usize> {
            tokens[i].1.parse::<usize>().map_err(|e| {
                Error::parse(
                    source_name,
                    0,
                    format!("byte {}: bad {what}: {e}", tokens[i].0),
                )
            })
        };
        let width = field(1, "width")?;
        let height = field(2, "height")?;
        let maxval = field(3, "maxval")?;
        if maxval == 0 || maxval > 65535 {
            return Err(Error::parse(
                source_name,
                0,
                format!("maxval {maxval} out of range"),
            ));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let bpp = if maxval < 256 { 1 } else { 2 };
        let need = width * height * bpp;
        if bytes.len() < pos + need {
            return Err(Error::parse(
                source_name,
                0,
                format!(
                    "raster truncated at byte {}: need {need} bytes",
                    bytes.len()
                ),
            ));
        }
        let raster = &bytes[pos..pos + need];
        let mut cells = vec![0.0; width * height];
        for row in 0..height {
            let iy = height - 1 - row;
            for ix in 0..width {
                let k = row * width + ix;
                let gray = if bpp == 1 {
                    raster[k] as usize
                } else {
                    (raster[2 * k] as usize) << 8 | raster[2 * k + 1] as usize
                };
                if gray > maxval {
                    return Err(Error::parse(
                        source_name,
                        0,
                        format!(
                            "byte {}: pixel {gray} exceeds maxval {maxval}",
                            pos + k * bpp
                        ),
                    ));
                }
                cells[iy * width + ix] = 1.0 - gray as f64 / maxval as f64;
            }
        }
        Self::new(width, height, resolution, origin, cells)
    }
}

fn axis_params(start: f64, dir: f64) -> (f64, f64) {
    if dir == 0.0 {
        return (f64::INFINITY, f64::INFINITY);
    }
    let to_boundary = if dir > 0.0 {
        start.floor() + 1.0 - start
    } else {
        start - start.floor()
    };
    let delta = 1.0 / dir.abs();
    (delta, to_boundary * delta)
}

/// Loads a map from disk, choosing the format from the file contents.
pub fn load_map(path: impl AsRef<Path>) -> Result<OccupancyGrid> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P5") {
        let (resolution, origin) = read_sidecar(path)?;
        OccupancyGrid::from_pgm(&bytes, resolution, origin, &name)
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::parse(&name, 0, format!("not UTF-8 text: {e}")))?;
        OccupancyGrid::from_ascii(&text, &name)
    }
}

/// Writes a map in the ASCII format.
pub fn save_map(grid: &OccupancyGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, grid.to_ascii()).map_err(|e| Error::io(path, e))
}

fn sidecar_path(image: &Path) -> Option<PathBuf> {
    ["yaml", "meta"]
        .iter()
        .map(|ext| image.with_extension(ext))
        .find(|p| p.exists())
}

fn read_sidecar(image: &Path) -> Result<(f64, Pose)> {
    let side = sidecar_path(image).ok_or_else(|| {
        Error::parse(
            image.display().to_string(),
            0,
            "PGM map needs a sidecar `.yaml` or `.meta` file with resolution and origin",
        )
    })?;
    let name = side.display().to_string();
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let mut resolution = None;
    let mut origin = None;
    for (i, line) in text.lines().enumerate() {
        let Some((key, value)) = line.split_once(':') else {
            continue;
        };
        let nums = || -> Result<Vec<f64>> {
            value
                .split(|c: char| c.is_whitespace() || c == ',' || c == '[' || c == ']')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| Error::parse(&name, i + 1, format!("bad number `{s}`: {e}")))
                })
                .collect()
        };
        match key.trim() {
            "resolution" => {
                let v = nums()?;
                if v.len() != 1 || !(v[0] > 0.0) {
                    return Err(Error::parse(
                        &name,
                        i + 1,
                        "resolution needs one positive value",
                    ));
                }
                resolution = Some(v[0]);
            }
            "origin" => {
                let v = nums()?;
                if v.len() != 3 {
                    return Err(Error::parse(&name, i + 1, "origin needs `x y theta`"));
                }
                origin = Some(Pose::new(v[0], v[1], v[2]));
            }
            _ => {}
        }
    }
    let resolution = resolution.ok_or_else(|| Error::parse(&name, 0, "missing `resolution:`"))?;
    let origin = origin.ok_or_else(|| Error::parse(&name, 0, "missing `origin:`"))?;
    Ok((resolution, origin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn wall_map() -> OccupancyGrid {
        let mut g = OccupancyGrid::filled(100, 100, 0.1, Pose::default(), 0.0).unwrap();
        for iy in 0..100 {
            g.set(50, iy, 1.0);
        }
        g
    }

    /// Reference ray walk: fine fixed-step marching, accurate to the step.
    fn marched(g: &OccupancyGrid, from: &Pose, bearing: f64, max_range: f64) -> f64 {
        let step = 1e-4;
        let (s, c) = (from.theta + bearing).sin_cos();
        let mut t = 0.0;
        while t < max_range {
            let (ix, iy) = g.world_to_grid(from.x + c * t, from.y + s * t);
            if !g.in_bounds(ix, iy) {
                return max_range;
            }
            if g.occupancy_at(ix, iy) >= 0.5 {
                return t;
            }
            t += step;
        }
        max_range
    }

    #[test]
    fn ascii_three_by_three() {
        let g = OccupancyGrid::from_ascii("3 3 1.0 0 0\n###\n#.#\n###\n", "t").unwrap();
        assert_eq!(g.cells().iter().filter(|&&v| v == 1.0).count(), 8);
        assert_eq!(g.occupancy_at(1, 1), 0.0);
    }

    #[test]
    fn ascii_digits_and_orientation() {
        let g = OccupancyGrid::from_ascii("2 2 0.5 -1 2\n9.\n03\n", "t").unwrap();
        assert_eq!(g.occupancy_at(0, 1), 1.0);
        assert_eq!(g.occupancy_at(1, 0), 3.0 / 9.0);
        assert_eq!(g.origin(), Pose::new(-1.0, 2.0, 0.0));
    }

    #[test]
    fn ascii_errors_carry_line_numbers() {
        let e = OccupancyGrid::from_ascii("2 2 1 0 0\n..\n.x\n", "m").unwrap_err();
        assert!(e.to_string().contains("m:3"), "{e}");
        let e = OccupancyGrid::from_ascii("2 2 1 0 0\n..\n", "m").unwrap_err();
        assert!(matches!(e, Error::Parse { .. }));
        let e = OccupancyGrid::from_ascii("2 2 1 0\n..\n..\n", "m").unwrap_err();
        assert!(e.to_string().contains("m:1"), "{e}");
        assert!(OccupancyGrid::from_ascii("2 2 0 0 0\n..\n..\n", "m").is_err());
    }

    #[test]
    fn pgm_gray_levels() {
        let mut bytes = b"P5\n# comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        let g = OccupancyGrid::from_pgm(&bytes, 0.05, Pose::default(), "p").unwrap();
        assert_eq!(g.occupancy_at(0, 0), 1.0);
        assert_eq!(g.occupancy_at(1, 0), 0.0);
        let short = b"P5 2 2 255\n\x00".to_vec();
        assert!(OccupancyGrid::from_pgm(&short, 0.05, Pose::default(), "p").is_err());
        let over = b"P5 1 1 10\n\x0b".to_vec();
        assert!(OccupancyGrid::from_pgm(&over, 0.05, Pose::default(), "p").is_err());
    }

    #[test]
    fn load_pgm_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("m.pgm");
        let mut bytes = b"P5\n3 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 128, 255]);
        fs::write(&img, &bytes).unwrap();
        assert!(load_map(&img).is_err());
        fs::write(
            dir.path().join("m.yaml"),
            "resolution: 0.05\norigin: [-1.0, -2.0, 0.0]\n",
        )
        .unwrap();
        let g = load_map(&img).unwrap();
        assert_eq!(g.resolution(), 0.05);
        assert_eq!(g.origin(), Pose::new(-1.0, -2.0, 0.0));
        assert!((g.occupancy_at(1, 0) - (1.0 - 128.0 / 255.0)).abs() < 1e-12);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_map("/nonexistent/map.txt"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn occupancy_out_of_bounds_is_free() {
        let g = wall_map();
        assert_eq!(g.occupancy_at(50, 3), 1.0);
        assert_eq!(g.occupancy_at(-1, 3), 0.0);
        assert_eq!(g.occupancy_at(100, 3), 0.0);
        assert_eq!(g.occupancy_at(3, 100), 0.0);
    }

    #[test]
    fn world_to_grid_floors() {
        let g = wall_map();
        assert_eq!(g.world_to_grid(0.05, 0.05), (0, 0));
        assert_eq!(g.world_to_grid(1.0, 0.0), (10, 0));
        assert_eq!(g.world_to_grid(-0.01, 0.0), (-1, 0));
    }

    #[test]
    fn raycast_hits_wall_column() {
        let g = wall_map();
        let d = g
            .raycast(&Pose::new(0.0, 0.0, 0.0), 0.0, 20.0, 0.5)
            .unwrap();
        assert!((d - 5.0).abs() <= 0.05, "{d}");
        let oracle = marched(&g, &Pose::new(0.0, 0.0, 0.0), 0.0, 20.0);
        assert!((d - oracle).abs() <= 0.05);
        let free = OccupancyGrid::filled(10, 10, 1.0, Pose::default(), 0.0).unwrap();
        assert_eq!(
            free.raycast(&Pose::new(5.0, 5.0, 0.3), 0.0, 3.0, 0.5)
                .unwrap(),
            3.0
        );
        assert_eq!(
            g.raycast(&Pose::new(1.0, 1.0, 0.0), 0.0, 0.0, 0.5).unwrap(),
            0.0
        );
        assert!(g
            .raycast(&Pose::new(-1.0, 1.0, 0.0), 0.0, 5.0, 0.5)
            .is_err());
    }

    #[test]
    fn raycast_matches_marching_oracle() {
        let mut g = OccupancyGrid::filled(60, 60, 0.1, Pose::new(-3.0, -3.0, 0.0), 0.0).unwrap();
        for (ix, iy) in [(40, 30), (41, 30), (10, 12), (30, 50), (31, 50), (5, 5)] {
            g.set(ix, iy, 1.0);
        }
        for i in 0..60 {
            g.set(i, 0, 1.0);
            g.set(i, 59, 1.0);
            g.set(0, i, 1.0);
            g.set(59, i, 1.0);
        }
        let from = Pose::new(0.13, 0.07, 0.2);
        for k in 0..90 {
            let b = k as f64 * 0.0698;
            let d = g.raycast(&from, b, 10.0, 0.5).unwrap();
            let o = marched(&g, &from, b, 10.0);
            assert!((d - o).abs() < 2e-4, "bearing {b}: dda {d} vs march {o}");
        }
    }

    #[test]
    fn ascii_round_trip() {
        let mut g = OccupancyGrid::filled(7, 4, 0.25, Pose::new(-0.5, 1.25, 0.0), 0.0).unwrap();
        g.set(0, 0, 1.0);
        g.set(3, 2, 4.0 / 9.0);
        g.set(6, 3, 1.0);
        let back = OccupancyGrid::from_ascii(&g.to_ascii(), "rt").unwrap();
        assert_eq!(back, g);
    }

    proptest! {
        #[test]
        fn raycast_monotone_in_max_range(b in -3.2f64..3.2, r1 in 0.0f64..12.0, r2 in 0.0f64..12.0) {
            let g = wall_map();
            let from = Pose::new(2.3, 4.1, 0.0);
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let a = g.raycast(&from, b, lo, 0.5).unwrap();
            let c = g.raycast(&from, b, hi, 0.5).unwrap();
            prop_assert!(a <= lo && c <= hi);
            prop_assert!(a <= c + 1e-12);
        }

        #[test]
        fn raycast_rotation_symmetry(b in -3.2f64..3.2, x in 1.0f64..4.0, y in 1.0f64..4.0) {
            // a map and its 90° counter-clockwise rotated copy about the origin
            let n = 50;
            let mut g = OccupancyGrid::filled(n, n, 0.1, Pose::new(-2.5, -2.5, 0.0), 0.0).unwrap();
            for i in 0..n as i64 {
                g.set(i, 0, 1.0);
                g.set(0, i, 1.0);
                g.set(i, n as i64 - 1, 1.0);
                g.set(n as i64 - 1, i, 1.0);
                g.set(35, i / 2, 1.0);
            }
            let mut r = g.clone();
            for iy in 0..n as i64 {
                for ix in 0..n as i64 {
                    r.set(n as i64 - 1 - iy, ix, g.occupancy_at(ix, iy));
                }
            }
            let p = Pose::new(x - 2.5, y - 2.5, 0.4);
            let q = Pose::new(-p.y, p.x, p.theta + FRAC_PI_2);
            let d1 = g.raycast(&p, b, 8.0, 0.5).unwrap();
            let d2 = r.raycast(&q, b, 8.0, 0.5).unwrap();
            prop_assert!((d1 - d2).abs() <= 0.1 + 1e-9, "{} vs {}", d1, d2);
        }
    }
}
