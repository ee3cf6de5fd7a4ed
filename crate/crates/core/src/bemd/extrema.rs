use crate::image::ImageGrid;

/// A scattered sample `(x, y, value)` in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    pub value: f64,
}

impl ScatterPoint {
    pub fn new(x: f64, y: f64, value: f64) -> Self {
        Self { x, y, value }
    }
}

/// Strict local extrema of a grid plus the corner anchors that pin both
/// envelopes at the image boundary.
///
/// `maxima` and `minima` hold only strict extrema; corners that are not
/// already strict extrema of the matching kind live in `anchors` and are
/// appended by [`ExtremaSet::upper_points`] / [`ExtremaSet::lower_points`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtremaSet {
    pub maxima: Vec<ScatterPoint>,
    pub minima: Vec<ScatterPoint>,
    pub anchors: Vec<ScatterPoint>,
}

impl ExtremaSet {
    /// Maxima followed by the corner anchors.
    pub fn upper_points(&self) -> Vec<ScatterPoint> {
        with_anchors(&self.maxima, &self.anchors)
    }

    /// Minima followed by the corner anchors.
    pub fn lower_points(&self) -> Vec<ScatterPoint> {
        with_anchors(&self.minima, &self.anchors)
    }

    /// True when too few strict extrema remain to continue sifting.
    pub fn is_degenerate(&self) -> bool {
        self.maxima.len() < 3 || self.minima.len() < 3
    }
}

fn with_anchors(extrema: &[ScatterPoint], anchors: &[ScatterPoint]) -> Vec<ScatterPoint> {
    let mut pts = extrema.to_vec();
    for a in anchors {
        if !extrema.iter().any(|p| p.x == a.x && p.y == a.y) {
            pts.push(*a);
        }
    }
    pts
}

/// Finds pixels strictly greater (maxima) or strictly less (minima) than
/// all in-bounds 8-connected neighbors. Plateaus are not extrema.
pub fn find_local_extrema(grid: &ImageGrid) -> ExtremaSet {
    let (w, h) = (grid.width(), grid.height());
    let data = grid.data();
    let mut set = ExtremaSet::default();
    for y in 0..h {
        let y_lo = y.saturating_sub(1);
        let y_hi = (y + 1).min(h - 1);
        for x in 0..w {
            let x_lo = x.saturating_sub(1);
            let x_hi = (x + 1).min(w - 1);
            let v = data[y * w + x];
            let mut is_max = true;
            let mut is_min = true;
            let mut has_neighbor = false;
            'scan: for ny in y_lo..=y_hi {
                for nx in x_lo..=x_hi {
                    if nx == x && ny == y {
                        continue;
                    }
                    has_neighbor = true;
                    let n = data[ny * w + nx];
                    if n >= v {
                        is_max = false;
                    }
                    if n <= v {
                        is_min = false;
                    }
                    if !is_max && !is_min {
                        break 'scan;
                    }
                }
            }
            if !has_neighbor {
                continue;
            }
            let p = ScatterPoint::new(x as f64, y as f64, v);
            if is_max {
                set.maxima.push(p);
            } else if is_min {
                set.minima.push(p);
            }
        }
    }
    let mut corners = vec![(0, 0), (w - 1, 0), (0, h - 1), (w - 1, h - 1)];
    corners.sort_unstable();
    corners.dedup();
    for (x, y) in corners {
        set.anchors
            .push(ScatterPoint::new(x as f64, y as f64, grid.get(x, y)));
    }
    set
}
