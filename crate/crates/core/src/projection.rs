//! Occlusal-view projection, coordinate rescaling, bilinear sampling of
//! embedding grids and center-guided Gaussian guidance.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mesh::FaceGeometry;
use crate::par;

pub const DEFAULT_IMAGE_SIZE: (usize, usize) = (1024, 1024);
pub const DEFAULT_MARGIN: f64 = 0.05;
pub const DEFAULT_EMBED_CHANNELS: usize = 256;

/// Default Gaussian width: 2% of the shorter image side.
pub fn default_sigma(image_size: (usize, usize)) -> f64 {
    0.02 * image_size.0.min(image_size.1) as f64
}

/// Continuous `(row, col)` pixel coordinate per face.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateMap {
    pub image_size: (usize, usize),
    pub coords: Vec<[f64; 2]>,
}

impl CoordinateMap {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn in_bounds(&self) -> bool {
        let (h, w) = self.image_size;
        self.coords.iter().all(|&[y, x]| {
            (0.0..=(h - 1) as f64).contains(&y) && (0.0..=(w - 1) as f64).contains(&x)
        })
    }
}

/// `C x H' x W'` row-major feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrid {
    pub channels: usize,
    pub grid_size: (usize, usize),
    pub values: Vec<f64>,
}

impl EmbeddingGrid {
    pub fn new(channels: usize, grid_size: (usize, usize), values: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Empty("embedding grid has no channels"));
        }
        let n = channels * grid_size.0 * grid_size.1;
        if values.len() != n {
            return Err(Error::shape("EmbeddingGrid::new", n, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding grid"));
        }
        Ok(Self {
            channels,
            grid_size,
            values,
        })
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = self.grid_size;
        self.values[(c * h + y) * w + x]
    }
}

/// Per-face guidance weight in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceMap {
    pub weights: Vec<f64>,
}

/// Orthographic top-down projection of face centers onto the image plane.
///
/// The xy bounding box of the face centers, grown by `margin` of its extent on
/// every side, maps onto `[0, H-1] x [0, W-1]`; x goes to columns and y to rows
/// with row 0 at the largest y.
pub fn project_occlusal(
    geom: &FaceGeometry,
    image_size: (usize, usize),
    margin: f64,
) -> Result<CoordinateMap> {
    let (h, w) = image_size;
    if h < 2 || w < 2 {
        return Err(Error::Config(format!(
            "image size {h}x{w} must be at least 2x2"
        )));
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::Config(format!(
            "margin {margin} must be non-negative"
        )));
    }
    if geom.centers.is_empty() {
        return Err(Error::Empty("no faces to project"));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for c in &geom.centers {
        x0 = x0.min(c[0]);
        x1 = x1.max(c[0]);
        y0 = y0.min(c[1]);
        y1 = y1.max(c[1]);
    }
    let (ex, ey) = (x1 - x0, y1 - y0);
    if !(ex > 0.0) || !(ey > 0.0) {
        return Err(Error::ZeroExtent("face centers have no xy extent"));
    }
    let (x0, ex) = (x0 - margin * ex, ex * (1.0 + 2.0 * margin));
    let (y1, ey) = (y1 + margin * ey, ey * (1.0 + 2.0 * margin));
    let (rows, cols) = ((h - 1) as f64, (w - 1) as f64);
    let coords = par::map_slice(&geom.centers, |c| {
        let row = ((y1 - c[1]) / ey * rows).clamp(0.0, rows);
        let col = ((c[0] - x0) / ex * cols).clamp(0.0, cols);
        [row, col]
    });
    Ok(CoordinateMap { image_size, coords })
}

/// Rescales pixel coordinates onto a `(H', W')` grid:
/// `y' = y (H'-1)/(H-1)`, `x' = x (W'-1)/(W-1)`.
pub fn rescale_coords(cmap: &CoordinateMap, grid_size: (usize, usize)) -> Result<CoordinateMap> {
    let (h, w) = cmap.image_size;
    let (gh, gw) = grid_size;
    if h < 2 || w < 2 || gh < 2 || gw < 2 {
        return Err(Error::Config(format!(
            "rescale needs sizes of at least 2x2 (image {h}x{w}, grid {gh}x{gw})"
        )));
    }
    if (h, w) == (gh, gw) {
        return Ok(cmap.clone());
    }
    let (sy, sx) = ((gh - 1) as f64, (gw - 1) as f64);
    let (dy, dx) = ((h - 1) as f64, (w - 1) as f64);
    // multiply before dividing so corner pixels land exactly on corner cells
    let coords = cmap
        .coords
        .iter()
        .map(|&[y, x]| [y * sy / dy, x * sx / dx])
        .collect();
    Ok(CoordinateMap {
        image_size: grid_size,
        coords,
    })
}

/// Bilinear interpolation at a (clamped) continuous grid coordinate, written
/// into `out` (one value per channel).
pub fn sample_point(grid: &EmbeddingGrid, y: f64, x: f64, out: &mut [f64]) {
    let (h, w) = grid.grid_size;
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    for (c, o) in out.iter_mut().enumerate() {
        let v00 = grid.get(c, y0, x0);
        let v01 = grid.get(c, y0, x1);
        let v10 = grid.get(c, y1, x0);
        let v11 = grid.get(c, y1, x1);
        *o = lerp(lerp(v00, v01, fx), lerp(v10, v11, fx), fy);
    }
}

/// Linear interpolation kept inside `[min(a, b), max(a, b)]` despite rounding.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    (a + t * (b - a)).clamp(a.min(b), a.max(b))
}

/// Samples the grid at every face coordinate; returns `C_e x M`.
pub fn bilinear_sample(grid: &EmbeddingGrid, cmap: &CoordinateMap) -> Result<Matrix> {
    if cmap.image_size != grid.grid_size {
        return Err(Error::shape(
            "bilinear_sample coordinate frame",
            format!("{:?}", grid.grid_size),
            format!("{:?}", cmap.image_size),
        ));
    }
    let c = grid.channels;
    let m = cmap.len();
    let mut face_major = vec![0.0; m * c];
    par::for_each_chunk(&mut face_major, c, |i, row| {
        let [y, x] = cmap.coords[i];
        sample_point(grid, y, x, row);
    });
    Ok(Matrix::from_vec(m, c, face_major)?.transpose())
}

/// Max over centers of `exp(-d^2 / (2 sigma^2))` at every face.
pub fn guidance_map(
    centers2d: &[[f64; 2]],
    cmap: &CoordinateMap,
    sigma: f64,
) -> Result<GuidanceMap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!(
            "guidance sigma {sigma} must be positive"
        )));
    }
    let denom = 2.0 * sigma * sigma;
    let weights = par::map_slice(&cmap.coords, |&[y, x]| {
        centers2d
            .iter()
            .map(|&[cy, cx]| {
                let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                (-d2 / denom).exp()
            })
            .fold(0.0, f64::max)
    });
    Ok(GuidanceMap { weights })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom_from_centers(centers: Vec<[f64; 3]>) -> FaceGeometry {
        let n = centers.len();
        FaceGeometry {
            centers,
            normals: vec![[0.0, 0.0, 1.0]; n],
            vertex_normals: vec![],
        }
    }

    #[test]
    fn bbox_corners_map_to_image_corners() {
        let g = geom_from_centers(vec![[0.0, 0.0, 0.0], [4.0, 2.0, 1.0]]);
        let c = project_occlusal(&g, (11, 21), 0.0).unwrap();
        assert_eq!(c.coords[0], [10.0, 0.0]);
        assert_eq!(c.coords[1], [0.0, 20.0]);
    }

    #[test]
    fn symmetric_midpoint_maps_to_image_center() {
        let g = geom_from_centers(vec![[-1.0, -1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 5.0]]);
        let c = project_occlusal(&g, (64, 32), 0.05).unwrap();
        assert!((c.coords[2][0] - 31.5).abs() < 1e-12);
        assert!((c.coords[2][1] - 15.5).abs() < 1e-12);
        assert!(c.in_bounds());
    }

    #[test]
    fn z_translation_does_not_change_projection() {
        let g = geom_from_centers(vec![[0.0, 0.0, 0.0], [3.0, 1.0, 1.0], [1.0, 2.0, -1.0]]);
        let moved = geom_from_centers(g.centers.iter().map(|c| [c[0], c[1], c[2] + 7.5]).collect());
        assert_eq!(
            project_occlusal(&g, (100, 80), 0.05).unwrap(),
            project_occlusal(&moved, (100, 80), 0.05).unwrap()
        );
    }

    #[test]
    fn collinear_centers_are_zero_extent() {
        let g = geom_from_centers(vec![[0.0, 1.0, 0.0], [2.0, 1.0, 0.0]]);
        assert!(matches!(
            project_occlusal(&g, (8, 8), 0.05),
            Err(Error::ZeroExtent(_))
        ));
    }

    #[test]
    fn rescale_endpoints_and_formula() {
        let cmap = CoordinateMap {
            image_size: (1024, 1024),
            coords: vec![[0.0, 0.0], [1023.0, 1023.0], [511.5, 511.5]],
        };
        let r = rescale_coords(&cmap, (64, 64)).unwrap();
        assert_eq!(r.coords[0], [0.0, 0.0]);
        assert_eq!(r.coords[1], [63.0, 63.0]);
        assert!((r.coords[2][0] - 511.5 * 63.0 / 1023.0).abs() < 1e-12);
        assert!((r.coords[2][0] - 31.5).abs() < 1e-12);
        assert_eq!(rescale_coords(&cmap, (1024, 1024)).unwrap(), cmap);
    }

    #[test]
    fn bilinear_midpoint_of_2x2() {
        let grid = EmbeddingGrid::new(1, (2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let cmap = CoordinateMap {
            image_size: (2, 2),
            coords: vec![[0.5, 0.5], [1.0, 0.0], [-3.0, 9.0]],
        };
        let s = bilinear_sample(&grid, &cmap).unwrap();
        assert_eq!(s.get(0, 0), 1.5);
        assert_eq!(s.get(0, 1), 2.0);
        // clamped to (0, 1)
        assert_eq!(s.get(0, 2), 1.0);
    }

    #[test]
    fn grid_points_are_exact() {
        let values: Vec<f64> = (0..2 * 6 * 8).map(|i| (i as f64).sin()).collect();
        let grid = EmbeddingGrid::new(2, (6, 8), values).unwrap();
        let cmap = CoordinateMap {
            image_size: (6, 8),
            coords: vec![[3.0, 5.0], [5.0, 7.0]],
        };
        let s = bilinear_sample(&grid, &cmap).unwrap();
        for c in 0..2 {
            assert_eq!(s.get(c, 0), grid.get(c, 3, 5));
            assert_eq!(s.get(c, 1), grid.get(c, 5, 7));
        }
    }

    #[test]
    fn guidance_values() {
        let cmap = CoordinateMap {
            image_size: (100, 100),
            coords: vec![[10.0, 10.0], [10.0, 13.0]],
        };
        let g = guidance_map(&[[10.0, 10.0]], &cmap, 3.0).unwrap();
        assert_eq!(g.weights[0], 1.0);
        assert!((g.weights[1] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((g.weights[1] - 0.6065).abs() < 1e-4);
        assert_eq!(
            guidance_map(&[], &cmap, 3.0).unwrap().weights,
            vec![0.0, 0.0]
        );
        assert!(guidance_map(&[], &cmap, 0.0).is_err());
    }

    #[test]
    fn default_sigma_is_two_percent() {
        assert!((default_sigma((1024, 512)) - 10.24).abs() < 1e-12);
    }
}
