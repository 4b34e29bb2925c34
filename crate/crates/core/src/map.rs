//! Road-centerline maps and ego-centered rasterization.
//!
//! A map is a set of centerline polylines in world meters. Rasterization
//! produces a single-channel binary bird's-eye image: a pixel is 1 when its
//! center lies within a fixed half-width of any centerline segment. The ego
//! position is subtracted from every vertex before any pixel math, so
//! translating map and ego together changes nothing, bit for bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("map json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("polyline {index} has {len} points; need at least 2")]
    ShortPolyline { index: usize, len: usize },
    #[error("polyline {index} repeats consecutive point ({x}, {y})")]
    DegenerateSegment { index: usize, x: f64, y: f64 },
    #[error("raster dimensions must be nonzero and divisible by 8, got {h}x{w}")]
    BadRasterDims { h: usize, w: usize },
}

/// Centerline map: `{"centerlines": [[[x, y], ...], ...]}` in meters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HdMap {
    pub centerlines: Vec<Vec<[f64; 2]>>,
}

impl HdMap {
    pub fn validate(&self) -> Result<(), MapError> {
        for (index, line) in self.centerlines.iter().enumerate() {
            if line.len() < 2 {
                return Err(MapError::ShortPolyline {
                    index,
                    len: line.len(),
                });
            }
            for pair in line.windows(2) {
                if pair[0] == pair[1] {
                    return Err(MapError::DegenerateSegment {
                        index,
                        x: pair[0][0],
                        y: pair[0][1],
                    });
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, MapError> {
        let map: HdMap = serde_json::from_str(text)?;
        map.validate()?;
        Ok(map)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, MapError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Every vertex shifted by `(dx, dy)`; used by tests and generators.
    pub fn translated(&self, dx: f64, dy: f64) -> HdMap {
        HdMap {
            centerlines: self
                .centerlines
                .iter()
                .map(|line| line.iter().map(|p| [p[0] + dx, p[1] + dy]).collect())
                .collect(),
        }
    }
}

/// Raster geometry. Pixel (row, col) with integer coordinates is a pixel
/// center; the ego sits at the continuous center (H/2, W/2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterConfig {
    pub height_px: usize,
    pub width_px: usize,
    /// World extent covered by the image, meters.
    pub height_m: f64,
    pub width_m: f64,
    /// Half-width of the painted centerline band, meters.
    pub half_width_m: f64,
    /// Rotate the world so the ego heading points along +x before mapping.
    pub align_heading: bool,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            height_px: 224,
            width_px: 224,
            height_m: 100.0,
            width_m: 100.0,
            half_width_m: 1.75,
            align_heading: false,
        }
    }
}

impl RasterConfig {
    /// Meters per pixel, (row, col) axes.
    pub fn resolution(&self) -> (f64, f64) {
        (
            self.height_m / self.height_px as f64,
            self.width_m / self.width_px as f64,
        )
    }
}

/// Ego pose used for centering; heading only matters with `align_heading`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl EgoPose {
    pub fn at(x: f64, y: f64) -> Self {
        EgoPose {
            x,
            y,
            heading: 0.0,
        }
    }

    /// World point -> ego-relative, with optional heading alignment.
    fn relative(&self, cfg: &RasterConfig, p: [f64; 2]) -> (f64, f64) {
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        if cfg.align_heading && self.heading != 0.0 {
            let (s, c) = self.heading.sin_cos();
            (c * dx + s * dy, -s * dx + c * dy)
        } else {
            (dx, dy)
        }
    }
}

/// Single-channel binary image, row-major, values in {0.0, 1.0}.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub config: RasterConfig,
    pub ego: EgoPose,
}

impl SemanticImage {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// `[1, H, W]` tensor view for the convolutional encoder.
    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.data.clone()).unwrap()
    }

    /// Portable graymap (P2, max 255) for eyeballing rasters.
    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n{} {}\n255\n", self.width, self.height);
        for row in 0..self.height {
            let line: Vec<String> = (0..self.width)
                .map(|col| if self.get(row, col) > 0.0 { "255" } else { "0" }.to_string())
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

/// World point -> continuous (row, col) pixel coordinates.
pub fn world_to_pixel(cfg: &RasterConfig, ego: &EgoPose, p: [f64; 2]) -> (f64, f64) {
    let (dx, dy) = ego.relative(cfg, p);
    let col = cfg.width_px as f64 / 2.0 + dx * cfg.width_px as f64 / cfg.width_m;
    let row = cfg.height_px as f64 / 2.0 - dy * cfg.height_px as f64 / cfg.height_m;
    (row, col)
}

/// Continuous (row, col) -> world point; inverse of [`world_to_pixel`]
/// (exactly inverse when `align_heading` is off).
pub fn pixel_to_world(cfg: &RasterConfig, ego: &EgoPose, row: f64, col: f64) -> [f64; 2] {
    let dx = (col - cfg.width_px as f64 / 2.0) * cfg.width_m / cfg.width_px as f64;
    let dy = (cfg.height_px as f64 / 2.0 - row) * cfg.height_m / cfg.height_px as f64;
    if cfg.align_heading && ego.heading != 0.0 {
        let (s, c) = ego.heading.sin_cos();
        [ego.x + c * dx - s * dy, ego.y + s * dx + c * dy]
    } else {
        [ego.x + dx, ego.y + dy]
    }
}

/// Pixel-center offset from the ego in meters; depends only on geometry,
/// never on the ego position, which keeps translation invariance exact.
fn pixel_center_offset(cfg: &RasterConfig, row: usize, col: usize) -> (f64, f64) {
    let dx = (col as f64 - cfg.width_px as f64 / 2.0) * cfg.width_m / cfg.width_px as f64;
    let dy = (cfg.height_px as f64 / 2.0 - row as f64) * cfg.height_m / cfg.height_px as f64;
    (dx, dy)
}

/// Squared distance from point `p` to segment `a`-`b` via clamped
/// projection. Degenerate segments fall back to point distance.
pub(crate) fn dist2_point_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (ux, uy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        ((ux * vx + uy * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let dx = ux - t * vx;
    let dy = uy - t * vy;
    dx * dx + dy * dy
}

/// Rasterize the centerline band. Per-segment work is pruned to the
/// segment's bounding box inflated by exactly the half-width; the box
/// conversion to pixel indices rounds outward, so pruning never drops a
/// pixel the exhaustive test would set.
pub fn rasterize(map: &HdMap, ego: &EgoPose, cfg: &RasterConfig) -> SemanticImage {
    let (h, w) = (cfg.height_px, cfg.width_px);
    let mut data = vec![0.0; h * w];
    let hw = cfg.half_width_m;
    let hw2 = hw * hw;
    for line in &map.centerlines {
        let rel: Vec<(f64, f64)> = line.iter().map(|&p| ego.relative(cfg, p)).collect();
        for seg in rel.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            // conservative pixel-index window around the inflated bbox
            let min_x = a.0.min(b.0) - hw;
            let max_x = a.0.max(b.0) + hw;
            let min_y = a.1.min(b.1) - hw;
            let max_y = a.1.max(b.1) + hw;
            let col_of = |x: f64| w as f64 / 2.0 + x * w as f64 / cfg.width_m;
            let row_of = |y: f64| h as f64 / 2.0 - y * h as f64 / cfg.height_m;
            let c0 = col_of(min_x).floor().max(0.0) as usize;
            let c1 = (col_of(max_x).ceil() as isize).clamp(-1, w as isize - 1);
            let r0 = row_of(max_y).floor().max(0.0) as usize;
            let r1 = (row_of(min_y).ceil() as isize).clamp(-1, h as isize - 1);
            if c1 < 0 || r1 < 0 {
                continue;
            }
            for row in r0..=r1 as usize {
                for col in c0..=c1 as usize {
                    let idx = row * w + col;
                    if data[idx] == 1.0 {
                        continue;
                    }
                    let p = pixel_center_offset(cfg, row, col);
                    if dist2_point_segment(p, a, b) <= hw2 {
                        data[idx] = 1.0;
                    }
                }
            }
        }
    }
    SemanticImage {
        height: h,
        width: w,
        data,
        config: *cfg,
        ego: *ego,
    }
}

/// Exhaustive reference rasterizer: every pixel against every segment,
/// with an independently written distance formulation (endpoint distances
/// plus perpendicular drop via the cross product). Slow on purpose; exists
/// so the pruned rasterizer has something to be measured against.
pub fn rasterize_brute_force(map: &HdMap, ego: &EgoPose, cfg: &RasterConfig) -> SemanticImage {
    let (h, w) = (cfg.height_px, cfg.width_px);
    let mut data = vec![0.0; h * w];
    let hw2 = cfg.half_width_m * cfg.half_width_m;
    let rel_lines: Vec<Vec<(f64, f64)>> = map
        .centerlines
        .iter()
        .map(|line| line.iter().map(|&p| ego.relative(cfg, p)).collect())
        .collect();
    for row in 0..h {
        for col in 0..w {
            let p = pixel_center_offset(cfg, row, col);
            let mut hit = false;
            'lines: for line in &rel_lines {
                for seg in line.windows(2) {
                    if oracle_dist2(p, seg[0], seg[1]) <= hw2 {
                        hit = true;
                        break 'lines;
                    }
                }
            }
            if hit {
                data[row * w + col] = 1.0;
            }
        }
    }
    SemanticImage {
        height: h,
        width: w,
        data,
        config: *cfg,
        ego: *ego,
    }
}

fn oracle_dist2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let d2 = |q: (f64, f64), r: (f64, f64)| {
        let (dx, dy) = (q.0 - r.0, q.1 - r.1);
        dx * dx + dy * dy
    };
    let mut best = d2(p, a).min(d2(p, b));
    let dot_a = (p.0 - a.0) * (b.0 - a.0) + (p.1 - a.1) * (b.1 - a.1);
    let dot_b = (p.0 - b.0) * (a.0 - b.0) + (p.1 - b.1) * (a.1 - b.1);
    let len2 = d2(a, b);
    if dot_a > 0.0 && dot_b > 0.0 && len2 > 0.0 {
        let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        best = best.min(cross * cross / len2);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> RasterConfig {
        RasterConfig {
            height_px: 64,
            width_px: 64,
            height_m: 32.0,
            width_m: 32.0,
            half_width_m: 1.0,
            align_heading: false,
        }
    }

    #[test]
    fn ego_maps_to_center_pixel() {
        let cfg = RasterConfig::default();
        let ego = EgoPose::at(17.5, -3.25);
        let (row, col) = world_to_pixel(&cfg, &ego, [17.5, -3.25]);
        assert_eq!((row, col), (112.0, 112.0));
    }

    #[test]
    fn east_offset_moves_columns_only() {
        let cfg = RasterConfig::default();
        let ego = EgoPose::at(0.0, 0.0);
        let (row, col) = world_to_pixel(&cfg, &ego, [25.0, 0.0]);
        assert_eq!((row, col), (112.0, 168.0));
    }

    #[test]
    fn pixel_world_round_trip() {
        let cfg = RasterConfig::default();
        let ego = EgoPose::at(3.2, -9.7);
        for &p in &[[10.0, 4.5], [-31.25, 12.0], [3.2, -9.7]] {
            let (row, col) = world_to_pixel(&cfg, &ego, p);
            let q = pixel_to_world(&cfg, &ego, row, col);
            assert!((q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn horizontal_line_through_ego_paints_center_band() {
        let cfg = RasterConfig::default();
        let ego = EgoPose::at(0.0, 0.0);
        let map = HdMap {
            centerlines: vec![vec![[-60.0, 0.0], [60.0, 0.0]]],
        };
        let img = rasterize(&map, &ego, &cfg);
        // row 112 is y = 0 exactly; spans the full width
        for col in 0..224 {
            assert_eq!(img.get(112, col), 1.0);
        }
        // band half-width 1.75 m = 3.92 px: rows 109..115 inside, 107 outside
        assert_eq!(img.get(109, 50), 1.0);
        assert_eq!(img.get(115, 50), 1.0);
        assert_eq!(img.get(107, 50), 0.0);
        assert_eq!(img.get(117, 50), 0.0);
    }

    #[test]
    fn empty_map_is_all_zero() {
        let cfg = small_cfg();
        let img = rasterize(&HdMap::default(), &EgoPose::at(0.0, 0.0), &cfg);
        assert!(img.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn values_are_binary() {
        let cfg = small_cfg();
        let map = random_map(&mut ChaCha8Rng::seed_from_u64(4), 4);
        let img = rasterize(&map, &EgoPose::at(0.0, 0.0), &cfg);
        assert!(img.data.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    fn random_map(rng: &mut ChaCha8Rng, lines: usize) -> HdMap {
        let mut centerlines = Vec::new();
        for _ in 0..lines {
            let n = rng.random_range(2..6);
            let mut line = Vec::with_capacity(n);
            let mut x = rng.random_range(-20.0..20.0);
            let mut y = rng.random_range(-20.0..20.0);
            line.push([x, y]);
            for _ in 1..n {
                x += rng.random_range(-8.0..8.0_f64).max(0.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                y += rng.random_range(-8.0..8.0);
                line.push([x, y]);
            }
            centerlines.push(line);
        }
        centerlines.push(vec![[-40.0, -40.0], [40.0, 40.0]]); // guaranteed coverage
        HdMap { centerlines }
    }

    #[test]
    fn pruned_rasterizer_matches_brute_force() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let map = random_map(&mut rng, 3);
            let ego = EgoPose::at(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            let fast = rasterize(&map, &ego, &cfg);
            let slow = rasterize_brute_force(&map, &ego, &cfg);
            assert_eq!(fast.data, slow.data, "trial {trial}");
        }
    }

    #[test]
    fn translation_invariance_is_exact() {
        let cfg = small_cfg();
        // dyadic-grid coordinates: sums with the offset are exact in f64
        let map = HdMap {
            centerlines: vec![
                vec![[-8.0, 0.25], [7.5, 3.75], [12.25, -6.5]],
                vec![[0.5, -10.0], [0.5, 10.0]],
            ],
        };
        let ego = EgoPose::at(1.25, -0.75);
        let base = rasterize(&map, &ego, &cfg);
        for &delta in &[[128.0, -64.5], [0.125, 0.0625], [-1024.25, 513.5]] {
            let moved = rasterize(
                &map.translated(delta[0], delta[1]),
                &EgoPose::at(ego.x + delta[0], ego.y + delta[1]),
                &cfg,
            );
            assert_eq!(base.data, moved.data, "delta {delta:?}");
        }
    }

    #[test]
    fn map_json_round_trip_and_validation() {
        let text = r#"{"centerlines": [[[0.0, 1.0], [2.0, 3.0], [4.0, 3.0]]]}"#;
        let map = HdMap::from_json(text).unwrap();
        assert_eq!(map.centerlines.len(), 1);
        assert_eq!(map.centerlines[0][1], [2.0, 3.0]);
        let back: HdMap = serde_json::from_str(&serde_json::to_string(&map).unwrap()).unwrap();
        assert_eq!(map, back);

        assert!(matches!(
            HdMap::from_json(r#"{"centerlines": [[[0.0, 1.0]]]}"#),
            Err(MapError::ShortPolyline { .. })
        ));
        assert!(matches!(
            HdMap::from_json(r#"{"centerlines": [[[0.0, 1.0], [0.0, 1.0]]]}"#),
            Err(MapError::DegenerateSegment { .. })
        ));
    }

    #[test]
    fn pgm_output_has_header_and_dimensions() {
        let cfg = small_cfg();
        let map = HdMap {
            centerlines: vec![vec![[-5.0, 0.0], [5.0, 0.0]]],
        };
        let img = rasterize(&map, &EgoPose::at(0.0, 0.0), &cfg);
        let pgm = img.to_pgm();
        let mut lines = pgm.lines();
        assert_eq!(lines.next(), Some("P2"));
        assert_eq!(lines.next(), Some("64 64"));
        assert_eq!(lines.next(), Some("255"));
        assert_eq!(pgm.lines().count(), 3 + 64);
    }

    #[test]
    fn heading_alignment_rotates_the_view() {
        let mut cfg = small_cfg();
        cfg.align_heading = true;
        // ego heading north; a point due north of the ego should appear
        // straight ahead, i.e. due east in the aligned image
        let ego = EgoPose {
            x: 0.0,
            y: 0.0,
            heading: std::f64::consts::FRAC_PI_2,
        };
        let (row, col) = world_to_pixel(&cfg, &ego, [0.0, 10.0]);
        assert!((row - 32.0).abs() < 1e-9);
        assert!(col > 32.0);
        let back = pixel_to_world(&cfg, &ego, row, col);
        assert!((back[0] - 0.0).abs() < 1e-9 && (back[1] - 10.0).abs() < 1e-9);
    }
}
