//! Agent-centric grid geometry and rasterization.
//!
//! Everything downstream (models, metrics, rendering) works on fixed-size
//! `N x N` grids centered on the agent being predicted. This module owns the
//! coordinate conventions: world pixels -> agent frame -> cell indices.
//!
//! Conventions, fixed here and nowhere else:
//! - agent frame: the agent position at the reference time is `(0, 0)`;
//! - cell mapping: `col = floor(x / scale) + N/2`, `row = floor(y / scale) + N/2`
//!   (so `+x` grows columns and `+y` grows rows);
//! - rotation: counterclockwise with `+y` up, applied to coordinates *before*
//!   the row mapping.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A position in pixels (world or agent frame, depending on context).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Euclidean distance to another point.
    pub fn dist(&self, other: Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

impl std::ops::Sub for Point {
    type Output = Point;
    fn sub(self, rhs: Point) -> Point {
        Point::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl std::ops::Add for Point {
    type Output = Point;
    fn add(self, rhs: Point) -> Point {
        Point::new(self.x + rhs.x, self.y + rhs.y)
    }
}

/// Opaque agent identifier. Synthetic ids are minted when tracks are split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AgentId(pub u64);

/// One observed position of an agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub frame: i64,
    pub x: f64,
    pub y: f64,
}

impl TrackPoint {
    pub fn pos(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

/// A time-ordered sequence of positions for one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub agent_id: AgentId,
    /// Agent class as labeled in the source data ("Pedestrian", "Biker", ...).
    /// Carried through for bookkeeping; the model does not branch on it.
    pub label: String,
    pub points: Vec<TrackPoint>,
}

impl Trajectory {
    /// Build a trajectory, enforcing the type invariants: at least one point,
    /// strictly increasing frames, finite coordinates.
    pub fn new(agent_id: AgentId, label: impl Into<String>, points: Vec<TrackPoint>) -> Result<Self, GridError> {
        if points.is_empty() {
            return Err(GridError::EmptyTrajectory);
        }
        for w in points.windows(2) {
            if w[1].frame <= w[0].frame {
                return Err(GridError::NonIncreasingFrames {
                    prev: w[0].frame,
                    next: w[1].frame,
                });
            }
        }
        if let Some(p) = points.iter().find(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(GridError::NonFiniteCoordinate { frame: p.frame });
        }
        Ok(Self {
            agent_id,
            label: label.into(),
            points,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Grid shape shared by every rasterized tensor: `n` cells per side, each
/// covering `scale x scale` world pixels. Cell `(n/2, n/2)` covers the
/// agent-frame square `[0, scale) x [0, scale)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub n: usize,
    pub scale: f64,
}

impl GridGeometry {
    pub fn new(n: usize, scale: f64) -> Result<Self, GridError> {
        if n == 0 || n % 2 != 0 {
            return Err(GridError::InvalidGeometry(format!("n must be positive and even, got {n}")));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(GridError::InvalidGeometry(format!("scale must be a positive finite number, got {scale}")));
        }
        Ok(Self { n, scale })
    }

    pub fn center_cell(&self) -> (usize, usize) {
        (self.n / 2, self.n / 2)
    }

    /// Half-extent of the grid in agent-frame pixels. The grid covers the
    /// square `[-half_extent, half_extent)` on both axes.
    pub fn half_extent(&self) -> f64 {
        (self.n / 2) as f64 * self.scale
    }
}

impl Default for GridGeometry {
    fn default() -> Self {
        Self { n: 128, scale: 10.0 }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("invalid grid geometry: {0}")]
    InvalidGeometry(String),
    #[error("trajectory must contain at least one point")]
    EmptyTrajectory,
    #[error("trajectory frames must be strictly increasing ({prev} then {next})")]
    NonIncreasingFrames { prev: i64, next: i64 },
    #[error("non-finite coordinate at frame {frame}")]
    NonFiniteCoordinate { frame: i64 },
    #[error("rotation angle must lie in [0, 360), got {0}")]
    AngleOutOfRange(f64),
}

/// Translate positions into the agent frame: the anchor maps to `(0, 0)`.
/// Pure and exactly invertible via [`from_agent_frame`].
pub fn to_agent_frame(positions: &[Point], anchor: Point) -> Vec<Point> {
    positions.iter().map(|p| *p - anchor).collect()
}

/// Inverse of [`to_agent_frame`]: add the anchor back.
pub fn from_agent_frame(positions: &[Point], anchor: Point) -> Vec<Point> {
    positions.iter().map(|p| *p + anchor).collect()
}

/// Map an agent-frame position to a cell index, or `None` when it falls
/// outside the grid extent. Out-of-grid is a value, not an error.
pub fn world_to_cell(p: Point, geom: &GridGeometry) -> Option<(usize, usize)> {
    let half = (geom.n / 2) as i64;
    let col = (p.x / geom.scale).floor() as i64 + half;
    let row = (p.y / geom.scale).floor() as i64 + half;
    if row < 0 || col < 0 || row >= geom.n as i64 || col >= geom.n as i64 {
        None
    } else {
        Some((row as usize, col as usize))
    }
}

/// Boolean grid stack with at most one set cell per channel. This is the
/// storage form of the `(t, N, N)` one-hot tensors; `to_dense` materializes
/// the full tensor for the models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneHotGrids {
    pub n: usize,
    /// One entry per channel: the set cell as `(row, col)`, or `None` when
    /// the point fell outside the grid extent.
    pub cells: Vec<Option<(usize, usize)>>,
}

impl OneHotGrids {
    pub fn channels(&self) -> usize {
        self.cells.len()
    }

    /// Number of set cells across all channels.
    pub fn set_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    /// Materialize as a dense `(channels, n, n)` tensor of 0.0 / 1.0.
    pub fn to_dense(&self) -> Array3<f64> {
        let mut out = Array3::zeros((self.cells.len(), self.n, self.n));
        for (ch, cell) in self.cells.iter().enumerate() {
            if let Some((r, c)) = cell {
                out[[ch, *r, *c]] = 1.0;
            }
        }
        out
    }
}

/// Rasterize an agent-frame window into one channel per position. Channel `i`
/// holds a single 1 at the cell of `window[i]` when in-grid, else stays zero.
pub fn rasterize_window(window: &[Point], geom: &GridGeometry) -> OneHotGrids {
    OneHotGrids {
        n: geom.n,
        cells: window.iter().map(|p| world_to_cell(*p, geom)).collect(),
    }
}

/// Rasterize a past window (`t_h` channels).
pub fn rasterize_past(window: &[Point], geom: &GridGeometry) -> OneHotGrids {
    rasterize_window(window, geom)
}

/// Rasterize a future window into training targets (`t_f` channels).
pub fn rasterize_target(window: &[Point], geom: &GridGeometry) -> OneHotGrids {
    rasterize_window(window, geom)
}

/// Crop the `(N*scale) x (N*scale)` window centered at `anchor` out of a
/// scene image and resample it to `(3, N, N)` by exact area averaging.
/// Intensities are scaled to `[0, 1]`; regions outside the image contribute
/// black.
pub fn crop_scene(scene: &image::RgbImage, anchor: Point, geom: &GridGeometry) -> Array3<f64> {
    let n = geom.n;
    let s = geom.scale;
    let half = (n / 2) as f64 * s;
    let (iw, ih) = (scene.width() as i64, scene.height() as i64);
    let mut out = Array3::zeros((3, n, n));
    let cell_area = s * s;

    for row in 0..n {
        // Source y-range covered by this output row.
        let y0 = anchor.y - half + row as f64 * s;
        let y1 = y0 + s;
        let py0 = y0.floor() as i64;
        let py1 = (y1.ceil() as i64).max(py0 + 1);
        for col in 0..n {
            let x0 = anchor.x - half + col as f64 * s;
            let x1 = x0 + s;
            let px0 = x0.floor() as i64;
            let px1 = (x1.ceil() as i64).max(px0 + 1);

            let mut acc = [0.0f64; 3];
            for py in py0.max(0)..py1.min(ih) {
                let wy = (y1.min((py + 1) as f64) - y0.max(py as f64)).max(0.0);
                if wy <= 0.0 {
                    continue;
                }
                for px in px0.max(0)..px1.min(iw) {
                    let wx = (x1.min((px + 1) as f64) - x0.max(px as f64)).max(0.0);
                    if wx <= 0.0 {
                        continue;
                    }
                    let p = scene.get_pixel(px as u32, py as u32);
                    let w = wx * wy;
                    acc[0] += w * p[0] as f64;
                    acc[1] += w * p[1] as f64;
                    acc[2] += w * p[2] as f64;
                }
            }
            for ch in 0..3 {
                out[[ch, row, col]] = acc[ch] / (cell_area * 255.0);
            }
        }
    }
    out
}

/// Per-sample bookkeeping retained through the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub scene_id: String,
    pub agent_id: AgentId,
    /// Frame index of the anchor (time `t`).
    pub frame: i64,
    /// Rotation applied by augmentation, if any.
    pub rotation_deg: Option<f64>,
    /// True when no future point falls inside the grid extent, i.e. the
    /// target tensor is all zeros.
    pub degenerate_target: bool,
}

/// One training / evaluation example. Past and future windows are kept in
/// agent-frame pixel coordinates (the source of truth); the one-hot grids are
/// derived from them so rotation can re-rasterize instead of resampling
/// booleans.
#[derive(Debug, Clone)]
pub struct GridSample {
    /// Agent-frame past positions, oldest first; last entry is `(0, 0)`.
    pub past: Vec<Point>,
    /// Agent-frame future positions, `t+1` first.
    pub future: Vec<Point>,
    /// Scene crop, `(3, N, N)`, values in `[0, 1]`.
    pub scene: Array3<f64>,
    /// World-pixel position of the agent at time `t`.
    pub anchor_world: Point,
    pub geom: GridGeometry,
    pub meta: SampleMeta,
}

impl GridSample {
    pub fn new(
        past: Vec<Point>,
        future: Vec<Point>,
        scene: Array3<f64>,
        anchor_world: Point,
        geom: GridGeometry,
        scene_id: impl Into<String>,
        agent_id: AgentId,
        frame: i64,
    ) -> Self {
        let degenerate = future.iter().all(|p| world_to_cell(*p, &geom).is_none());
        Self {
            past,
            future,
            scene,
            anchor_world,
            geom,
            meta: SampleMeta {
                scene_id: scene_id.into(),
                agent_id,
                frame,
                rotation_deg: None,
                degenerate_target: degenerate,
            },
        }
    }

    /// Boolean past tensor, `(t_h, N, N)` with at most one set cell per channel.
    pub fn past_grids(&self) -> OneHotGrids {
        rasterize_past(&self.past, &self.geom)
    }

    /// Boolean target tensor, `(t_f, N, N)`.
    pub fn target_grids(&self) -> OneHotGrids {
        rasterize_target(&self.future, &self.geom)
    }

    /// Ground-truth future in world pixels.
    pub fn future_world(&self) -> Vec<Point> {
        from_agent_frame(&self.future, self.anchor_world)
    }

    /// Past trajectory in world pixels.
    pub fn past_world(&self) -> Vec<Point> {
        from_agent_frame(&self.past, self.anchor_world)
    }
}

/// Rotation matrix entries `(cos, sin)` for an angle in degrees. Multiples of
/// 90 degrees get exact entries so that boolean-grid rotation is bit-exact
/// (trig round-off would otherwise move points sitting on cell boundaries).
fn rot_entries(angle_deg: f64) -> (f64, f64) {
    let a = angle_deg.rem_euclid(360.0);
    if a == 0.0 {
        (1.0, 0.0)
    } else if a == 90.0 {
        (0.0, 1.0)
    } else if a == 180.0 {
        (-1.0, 0.0)
    } else if a == 270.0 {
        (0.0, -1.0)
    } else {
        let r = a.to_radians();
        (r.cos(), r.sin())
    }
}

/// Rotate a point counterclockwise about the agent-frame origin.
pub fn rotate_point(p: Point, angle_deg: f64) -> Point {
    let (c, s) = rot_entries(angle_deg);
    Point::new(c * p.x - s * p.y, s * p.x + c * p.y)
}

fn rotate_scene_quadrant(scene: &Array3<f64>, quarter_turns: u32) -> Array3<f64> {
    let (ch, n, _) = scene.dim();
    let mut out = scene.clone();
    for _ in 0..quarter_turns % 4 {
        let src = out;
        let mut dst = Array3::zeros((ch, n, n));
        // One CCW quarter turn in the (+y -> +row) convention:
        // cell (r, c) moves to (c, n-1-r).
        for k in 0..ch {
            for r in 0..n {
                for c in 0..n {
                    dst[[k, c, n - 1 - r]] = src[[k, r, c]];
                }
            }
        }
        out = dst;
    }
    out
}

fn rotate_scene_bilinear(scene: &Array3<f64>, angle_deg: f64) -> Array3<f64> {
    let (ch, n, _) = scene.dim();
    let (c, s) = rot_entries(angle_deg);
    let half = n as f64 / 2.0;
    let mut out = Array3::zeros((ch, n, n));
    let sample = |k: usize, u: f64, v: f64, src: &Array3<f64>| -> f64 {
        // (u, v) are fractional (row, col) cell-center coordinates; zero fill
        // outside the grid.
        let r0 = u.floor() as i64;
        let c0 = v.floor() as i64;
        let fu = u - r0 as f64;
        let fv = v - c0 as f64;
        let mut acc = 0.0;
        for (dr, wr) in [(0i64, 1.0 - fu), (1, fu)] {
            for (dc, wc) in [(0i64, 1.0 - fv), (1, fv)] {
                let (rr, cc) = (r0 + dr, c0 + dc);
                if rr >= 0 && cc >= 0 && rr < n as i64 && cc < n as i64 {
                    acc += wr * wc * src[[k, rr as usize, cc as usize]];
                }
            }
        }
        acc
    };
    for r in 0..n {
        for col in 0..n {
            // Cell-center position relative to grid center, in cell units.
            let x = col as f64 + 0.5 - half;
            let y = r as f64 + 0.5 - half;
            // Inverse rotation locates the source position.
            let sx = c * x + s * y;
            let sy = -s * x + c * y;
            let u = sy + half - 0.5;
            let v = sx + half - 0.5;
            for k in 0..ch {
                out[[k, r, col]] = sample(k, u, v, scene);
            }
        }
    }
    out
}

/// Rotate a sample counterclockwise about the grid center. The scene grid is
/// resampled (exact cell permutation for multiples of 90 degrees, bilinear
/// with zero fill otherwise); past and future windows are rotated
/// analytically in agent-frame coordinates so re-rasterization preserves the
/// one-hot property. `anchor_world` is unchanged; the angle lands in the
/// metadata.
pub fn rotate_sample(sample: &GridSample, angle_deg: f64) -> Result<GridSample, GridError> {
    if !(0.0..360.0).contains(&angle_deg) {
        return Err(GridError::AngleOutOfRange(angle_deg));
    }
    let past: Vec<Point> = sample.past.iter().map(|p| rotate_point(*p, angle_deg)).collect();
    let future: Vec<Point> = sample.future.iter().map(|p| rotate_point(*p, angle_deg)).collect();
    let scene = if angle_deg.rem_euclid(90.0) == 0.0 {
        rotate_scene_quadrant(&sample.scene, (angle_deg / 90.0).round() as u32)
    } else {
        rotate_scene_bilinear(&sample.scene, angle_deg)
    };
    let degenerate = future.iter().all(|p| world_to_cell(*p, &sample.geom).is_none());
    let mut meta = sample.meta.clone();
    meta.rotation_deg = Some(angle_deg);
    meta.degenerate_target = degenerate;
    Ok(GridSample {
        past,
        future,
        scene,
        anchor_world: sample.anchor_world,
        geom: sample.geom,
        meta,
    })
}

/// Dense `(t, N, N)` label-map view used by the semantic segmentation
/// pretraining path: per-pixel class indices.
pub type ClassMap = Array2<usize>;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn geom_128() -> GridGeometry {
        GridGeometry::new(128, 10.0).unwrap()
    }

    #[test]
    fn agent_frame_translation_identity_at_anchor() {
        let past = vec![Point::new(5.0, 5.0), Point::new(7.0, 6.0), Point::new(10.0, 8.0)];
        let out = to_agent_frame(&past, Point::new(10.0, 8.0));
        assert_eq!(out, vec![Point::new(-5.0, -3.0), Point::new(-3.0, -2.0), Point::new(0.0, 0.0)]);
    }

    #[test]
    fn agent_frame_stopped_agent() {
        let past = vec![Point::new(4.0, 4.0); 8];
        let out = to_agent_frame(&past, Point::new(4.0, 4.0));
        assert!(out.iter().all(|p| *p == Point::new(0.0, 0.0)));
    }

    #[test]
    fn agent_frame_round_trip_exact() {
        let pts = vec![Point::new(13.25, -7.5), Point::new(0.125, 99.0)];
        let anchor = Point::new(3.5, -11.25);
        assert_eq!(from_agent_frame(&to_agent_frame(&pts, anchor), anchor), pts);
    }

    #[test]
    fn world_to_cell_center_mapping() {
        assert_eq!(world_to_cell(Point::new(0.0, 0.0), &geom_128()), Some((64, 64)));
    }

    #[test]
    fn world_to_cell_boundary_cells() {
        let g = geom_128();
        assert_eq!(world_to_cell(Point::new(-640.0, 0.0), &g), Some((64, 0)));
        assert_eq!(world_to_cell(Point::new(640.0, 0.0), &g), None);
        // Exhaustive sweep over both axes at cell boundaries: positions
        // k*scale for k in [-65, 65] must land exactly where the formula says.
        for k in -65i64..=65 {
            let p = Point::new(k as f64 * 10.0, 0.0);
            let expect_col = k + 64;
            let got = world_to_cell(p, &g);
            if (0..128).contains(&expect_col) {
                assert_eq!(got, Some((64, expect_col as usize)), "k={k}");
            } else {
                assert_eq!(got, None, "k={k}");
            }
        }
    }

    #[test]
    fn rasterize_stopped_agent() {
        let g = geom_128();
        let window = vec![Point::new(0.0, 0.0); 8];
        let grids = rasterize_past(&window, &g);
        assert_eq!(grids.channels(), 8);
        assert!(grids.cells.iter().all(|c| *c == Some((64, 64))));
        let dense = grids.to_dense();
        assert_eq!(dense.sum(), 8.0);
    }

    #[test]
    fn rasterize_counts_in_grid_points() {
        let g = geom_128();
        let window = vec![
            Point::new(0.0, 0.0),
            Point::new(10_000.0, 0.0), // out
            Point::new(-30.0, 40.0),
            Point::new(0.0, -9_999.0), // out
        ];
        let grids = rasterize_past(&window, &g);
        assert_eq!(grids.set_count(), 2);
        assert_eq!(grids.to_dense().sum(), 2.0);
    }

    #[test]
    fn rasterize_straight_walk_down_column() {
        // (0,0) -> (0,-70) at 10 px/step: rows 64 down to 57 along column 64.
        let g = geom_128();
        let window: Vec<Point> = (0..8).map(|i| Point::new(0.0, -10.0 * i as f64)).collect();
        let grids = rasterize_past(&window, &g);
        for (i, cell) in grids.cells.iter().enumerate() {
            assert_eq!(*cell, Some((64 - i, 64)), "step {i}");
        }
    }

    #[test]
    fn rasterize_diagonal_walk() {
        let g = geom_128();
        let step = 10.0 * std::f64::consts::SQRT_2 * std::f64::consts::FRAC_1_SQRT_2; // 10 px per axis
        let window: Vec<Point> = (0..12).map(|i| Point::new(step * i as f64, step * i as f64)).collect();
        let grids = rasterize_target(&window, &g);
        for (i, cell) in grids.cells.iter().enumerate() {
            assert_eq!(*cell, Some((64 + i, 64 + i)), "step {i}");
        }
    }

    #[test]
    fn degenerate_future_sets_flag() {
        let g = geom_128();
        let sample = GridSample::new(
            vec![Point::new(0.0, 0.0); 8],
            vec![Point::new(100_000.0, 0.0); 12],
            Array3::zeros((3, 128, 128)),
            Point::new(500.0, 500.0),
            g,
            "scene",
            AgentId(1),
            0,
        );
        assert!(sample.meta.degenerate_target);
        assert_eq!(sample.target_grids().set_count(), 0);
    }

    #[test]
    fn crop_uniform_white_image() {
        let img = image::RgbImage::from_pixel(512, 512, image::Rgb([255, 255, 255]));
        let g = GridGeometry::new(16, 10.0).unwrap();
        let crop = crop_scene(&img, Point::new(256.0, 256.0), &g);
        for v in crop.iter() {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn crop_at_corner_zero_fills() {
        let img = image::RgbImage::from_pixel(512, 512, image::Rgb([255, 255, 255]));
        let g = GridGeometry::new(16, 10.0).unwrap();
        // Anchor at the image origin: only the bottom-right quadrant of the
        // crop window overlaps the image.
        let crop = crop_scene(&img, Point::new(0.0, 0.0), &g);
        for r in 0..16 {
            for c in 0..16 {
                let expect = if r >= 8 && c >= 8 { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(crop[[0, r, c]], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn crop_checkerboard_matches_area_average() {
        // 10-px squares at scale 10 with aligned anchor: alternating 0/1 cells.
        let mut img = image::RgbImage::new(640, 640);
        for y in 0..640 {
            for x in 0..640 {
                let on = ((x / 10) + (y / 10)) % 2 == 0;
                let v = if on { 255 } else { 0 };
                img.put_pixel(x, y, image::Rgb([v, v, v]));
            }
        }
        let g = GridGeometry::new(16, 10.0).unwrap();
        let crop = crop_scene(&img, Point::new(320.0, 320.0), &g);
        for r in 0..16 {
            for c in 0..16 {
                // Output cell (r, c) covers squares offset from (320, 320);
                // 320/10 = 32 squares, so parity matches ((c+24) + (r+24)).
                let sq_x = 32 - 8 + c;
                let sq_y = 32 - 8 + r;
                let expect = if (sq_x + sq_y) % 2 == 0 { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(crop[[1, r, c]], expect, epsilon = 1e-12);
            }
        }
    }

    fn sample_with_points(past: Vec<Point>, future: Vec<Point>, n: usize) -> GridSample {
        let g = GridGeometry::new(n, 10.0).unwrap();
        let mut scene = Array3::zeros((3, n, n));
        for (i, v) in scene.iter_mut().enumerate() {
            *v = (i % 97) as f64 / 97.0;
        }
        GridSample::new(past, future, scene, Point::new(0.0, 0.0), g, "s", AgentId(0), 0)
    }

    #[test]
    fn rotate_zero_is_identity() {
        let s = sample_with_points(
            vec![Point::new(-30.0, -10.0), Point::new(0.0, 0.0)],
            vec![Point::new(10.0, 20.0)],
            32,
        );
        let r = rotate_sample(&s, 0.0).unwrap();
        assert_eq!(r.past, s.past);
        assert_eq!(r.future, s.future);
        assert_eq!(r.scene, s.scene);
        assert_eq!(r.meta.rotation_deg, Some(0.0));
    }

    #[test]
    fn rotate_twice_90_equals_once_180() {
        let s = sample_with_points(
            vec![Point::new(25.0, -14.0), Point::new(0.0, 0.0)],
            vec![Point::new(10.0, 35.0), Point::new(-42.0, 7.0)],
            32,
        );
        let twice = rotate_sample(&rotate_sample(&s, 90.0).unwrap(), 90.0).unwrap();
        let once = rotate_sample(&s, 180.0).unwrap();
        assert_eq!(twice.past_grids(), once.past_grids());
        assert_eq!(twice.target_grids(), once.target_grids());
        assert_eq!(twice.scene, once.scene);
    }

    #[test]
    fn rotate_point_90_ccw() {
        let p = rotate_point(Point::new(30.0, 0.0), 90.0);
        assert_eq!(p, Point::new(0.0, 30.0));
        let s = sample_with_points(vec![Point::new(0.0, 0.0)], vec![Point::new(30.0, 0.0)], 32);
        let r = rotate_sample(&s, 90.0).unwrap();
        assert_eq!(r.future[0], Point::new(0.0, 30.0));
        let g = GridGeometry::new(32, 10.0).unwrap();
        assert_eq!(r.target_grids().cells[0], world_to_cell(Point::new(0.0, 30.0), &g));
    }

    #[test]
    fn geometry_validation() {
        assert!(GridGeometry::new(0, 10.0).is_err());
        assert!(GridGeometry::new(128, 0.0).is_err());
        assert!(GridGeometry::new(128, -1.0).is_err());
        assert_eq!(GridGeometry::default().center_cell(), (64, 64));
    }

    #[test]
    fn trajectory_invariants() {
        let mk = |frames: &[i64]| {
            Trajectory::new(
                AgentId(0),
                "Pedestrian",
                frames.iter().map(|f| TrackPoint { frame: *f, x: 0.0, y: 0.0 }).collect(),
            )
        };
        assert!(mk(&[]).is_err());
        assert!(mk(&[0, 1, 1]).is_err());
        assert!(mk(&[0, 12, 24]).is_ok());
        let bad = Trajectory::new(
            AgentId(0),
            "Pedestrian",
            vec![TrackPoint { frame: 0, x: f64::NAN, y: 0.0 }],
        );
        assert!(bad.is_err());
    }

    proptest! {
        #[test]
        fn prop_one_set_cell_per_in_extent_point(
            pts in proptest::collection::vec((-900.0f64..900.0, -900.0f64..900.0), 1..20)
        ) {
            let g = geom_128();
            let window: Vec<Point> = pts.iter().map(|(x, y)| Point::new(*x, *y)).collect();
            let grids = rasterize_window(&window, &g);
            let in_extent = window.iter().filter(|p| world_to_cell(**p, &g).is_some()).count();
            prop_assert_eq!(grids.set_count(), in_extent);
            prop_assert_eq!(grids.to_dense().sum() as usize, in_extent);
            for (ch, cell) in grids.cells.iter().enumerate() {
                if let Some((r, c)) = cell {
                    let dense = grids.to_dense();
                    prop_assert_eq!(dense[[ch, *r, *c]], 1.0);
                }
            }
        }

        #[test]
        fn prop_agent_frame_round_trip(
            pts in proptest::collection::vec((-8_000_000i32..8_000_000, -8_000_000i32..8_000_000), 1..16),
            ax in -8_000_000i32..8_000_000, ay in -8_000_000i32..8_000_000,
        ) {
            // Coordinates on a 1/8-pixel lattice: translation is then exact
            // in f64, matching the coordinate-arithmetic contract.
            let q = |v: i32| v as f64 / 8.0;
            let anchor = Point::new(q(ax), q(ay));
            let window: Vec<Point> = pts.iter().map(|(x, y)| Point::new(q(*x), q(*y))).collect();
            prop_assert_eq!(from_agent_frame(&to_agent_frame(&window, anchor), anchor), window);
        }

        #[test]
        fn prop_center_cell_for_valid_geometries(n in 1usize..200, scale in 0.1f64..50.0) {
            let n = n * 2;
            let g = GridGeometry::new(n, scale).unwrap();
            prop_assert_eq!(world_to_cell(Point::new(0.0, 0.0), &g), Some((n / 2, n / 2)));
            prop_assert_eq!(g.center_cell(), (n / 2, n / 2));
        }

        #[test]
        fn prop_quarter_rotation_conserves_cells(
            pts in proptest::collection::vec((-600.0f64..600.0, -600.0f64..600.0), 1..20),
            quarters in 1u32..4,
        ) {
            let s = {
                let g = geom_128();
                let window: Vec<Point> = pts.iter().map(|(x, y)| Point::new(*x, *y)).collect();
                GridSample::new(
                    window.clone(),
                    window,
                    Array3::zeros((3, g.n, g.n)),
                    Point::new(0.0, 0.0),
                    g,
                    "s",
                    AgentId(0),
                    0,
                )
            };
            let r = rotate_sample(&s, 90.0 * quarters as f64).unwrap();
            prop_assert_eq!(r.past_grids().set_count(), s.past_grids().set_count());
            prop_assert_eq!(r.target_grids().set_count(), s.target_grids().set_count());
        }

        #[test]
        fn prop_crop_in_unit_range(ax in 0.0f64..512.0, ay in 0.0f64..512.0) {
            let mut img = image::RgbImage::new(512, 512);
            for (x, y, p) in img.enumerate_pixels_mut() {
                *p = image::Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8]);
            }
            let g = GridGeometry::new(16, 10.0).unwrap();
            let crop = crop_scene(&img, Point::new(ax, ay), &g);
            for v in crop.iter() {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }
    }
}
