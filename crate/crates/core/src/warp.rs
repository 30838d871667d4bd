//! Affine transforms on images: matrix construction, center fixing, and
//! inverse-mapped bilinear resampling with zero padding.
//!
//! Coordinates are `(u, v)` with `u` horizontal (column) and `v` vertical
//! (row), acting as column vectors under 3x3 homogeneous matrices.

use std::io::Write;

use crate::error::{Error, Result};

/// Composed transforms with |det| below this are rejected as degenerate.
pub const DET_THRESHOLD: f64 = 1e-9;

/// Grayscale image with pixel values in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    /// Builds an image from row-major pixels, validating range and length.
    pub fn from_pixels(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "expected {}x{} = {} pixels, got {}",
                height,
                width,
                height * width,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Bounds(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, pixels: vec![0.0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Pixel at column `u`, row `v`.
    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.pixels[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, value: f32) {
        self.pixels[v * self.width + u] = value;
    }

    /// Mirrors the image left-to-right: output column `u` reads `W-1-u`.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = Self::zeros(self.height, self.width);
        for v in 0..self.height {
            for u in 0..self.width {
                out.set(u, v, self.get(self.width - 1 - u, v));
            }
        }
        out
    }
}

/// The six affine parameters: translation, rotation, shear, per-axis scale.
///
/// Angles are radians. The identity is `(0, 0, 0, 0, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformParams {
    pub delta_u: f64,
    pub delta_v: f64,
    pub theta: f64,
    pub phi: f64,
    pub s_u: f64,
    pub s_v: f64,
}

/// Canonical parameter order used by arrays, grids, and config files.
pub const PARAM_NAMES: [&str; 6] = ["du", "dv", "theta", "phi", "su", "sv"];

/// Identity value per parameter in canonical order.
pub const IDENTITY_PARAMS: [f64; 6] = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0];

impl TransformParams {
    pub fn identity() -> Self {
        Self::from_array(IDENTITY_PARAMS)
    }

    pub fn translation(delta_u: f64, delta_v: f64) -> Self {
        Self { delta_u, delta_v, ..Self::identity() }
    }

    pub fn rotation(theta: f64) -> Self {
        Self { theta, ..Self::identity() }
    }

    pub fn shear(phi: f64) -> Self {
        Self { phi, ..Self::identity() }
    }

    pub fn scale(s_u: f64, s_v: f64) -> Self {
        Self { s_u, s_v, ..Self::identity() }
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self { delta_u: a[0], delta_v: a[1], theta: a[2], phi: a[3], s_u: a[4], s_v: a[5] }
    }

    pub fn to_array(self) -> [f64; 6] {
        [self.delta_u, self.delta_v, self.theta, self.phi, self.s_u, self.s_v]
    }
}

/// 3x3 homogeneous matrix. Construction keeps the bottom row `[0, 0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMatrix {
    rows: [[f64; 3]; 3],
}

impl AffineMatrix {
    pub fn identity() -> Self {
        Self { rows: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] }
    }

    pub fn translation(delta_u: f64, delta_v: f64) -> Self {
        Self { rows: [[1.0, 0.0, delta_u], [0.0, 1.0, delta_v], [0.0, 0.0, 1.0]] }
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.rows
    }

    pub fn det(&self) -> f64 {
        let r = &self.rows;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    pub fn mul(&self, rhs: &Self) -> Self {
        let mut rows = [[0.0; 3]; 3];
        for (i, row) in rows.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.rows[i][k] * rhs.rows[k][j]).sum();
            }
        }
        Self { rows }
    }

    /// Maps a point, dividing by the homogeneous coordinate. The divisor is
    /// exactly 1 for affine matrices but the general path is kept so the
    /// mapping stays correct for any invertible input.
    pub fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        let r = &self.rows;
        let x = r[0][0] * u + r[0][1] * v + r[0][2];
        let y = r[1][0] * u + r[1][1] * v + r[1][2];
        let w = r[2][0] * u + r[2][1] * v + r[2][2];
        (x / w, y / w)
    }

    /// Inverse via the adjugate. Errors if |det| is below [`DET_THRESHOLD`].
    pub fn inverse(&self) -> Result<Self> {
        let det = self.det();
        if det.abs() < DET_THRESHOLD {
            return Err(Error::DegenerateTransform { det });
        }
        let r = &self.rows;
        let mut inv = [[0.0; 3]; 3];
        inv[0][0] = (r[1][1] * r[2][2] - r[1][2] * r[2][1]) / det;
        inv[0][1] = (r[0][2] * r[2][1] - r[0][1] * r[2][2]) / det;
        inv[0][2] = (r[0][1] * r[1][2] - r[0][2] * r[1][1]) / det;
        inv[1][0] = (r[1][2] * r[2][0] - r[1][0] * r[2][2]) / det;
        inv[1][1] = (r[0][0] * r[2][2] - r[0][2] * r[2][0]) / det;
        inv[1][2] = (r[0][2] * r[1][0] - r[0][0] * r[1][2]) / det;
        inv[2][0] = (r[1][0] * r[2][1] - r[1][1] * r[2][0]) / det;
        inv[2][1] = (r[0][1] * r[2][0] - r[0][0] * r[2][1]) / det;
        inv[2][2] = (r[0][0] * r[1][1] - r[0][1] * r[1][0]) / det;
        Ok(Self { rows: inv })
    }

    #[cfg(test)]
    fn from_rows(rows: [[f64; 3]; 3]) -> Self {
        Self { rows }
    }
}

/// Builds the full parameterized matrix in one shot:
///
/// ```text
/// [ su*cos(th)   -sv*sin(th+phi)   du ]
/// [ su*sin(th)    sv*cos(th+phi)   dv ]
/// [ 0             0                 1 ]
/// ```
pub fn build_matrix(t: &TransformParams) -> AffineMatrix {
    let (s, c) = t.theta.sin_cos();
    let (sp, cp) = (t.theta + t.phi).sin_cos();
    AffineMatrix {
        rows: [
            [t.s_u * c, -t.s_v * sp, t.delta_u],
            [t.s_u * s, t.s_v * cp, t.delta_v],
            [0.0, 0.0, 1.0],
        ],
    }
}

/// Rounded image center `(round(W/2), round(H/2))` used as the fixed point
/// of the linear part.
pub fn image_center(height: usize, width: usize) -> (f64, f64) {
    ((width as f64 / 2.0).round(), (height as f64 / 2.0).round())
}

/// Re-anchors the linear part of `a` at the image center: with `a = L + d`
/// split into linear and translation parts, returns `T_c * L * T_c^-1 * T_d`
/// so the center maps to itself whenever `d = 0`. Pure translations pass
/// through unchanged.
pub fn center_fix(a: &AffineMatrix, height: usize, width: usize) -> AffineMatrix {
    let (cu, cv) = image_center(height, width);
    let r = a.rows();
    let linear = AffineMatrix {
        rows: [[r[0][0], r[0][1], 0.0], [r[1][0], r[1][1], 0.0], [0.0, 0.0, 1.0]],
    };
    let t_c = AffineMatrix::translation(cu, cv);
    let t_c_inv = AffineMatrix::translation(-cu, -cv);
    let t_d = AffineMatrix::translation(r[0][2], r[1][2]);
    t_c.mul(&linear).mul(&t_c_inv).mul(&t_d)
}

/// Composes the four factors of a parameter vector into one matrix, each
/// linear factor fixed at the image center, translation applied to points
/// first:
///
/// `center(Rot(theta)) * center(Scale(su, sv)) * center(Shear(phi)) * Trans(du, dv)`
pub fn compose_sequence(t: &TransformParams, height: usize, width: usize) -> AffineMatrix {
    let rot = center_fix(&build_matrix(&TransformParams::rotation(t.theta)), height, width);
    let scale = center_fix(&build_matrix(&TransformParams::scale(t.s_u, t.s_v)), height, width);
    let shear = center_fix(&build_matrix(&TransformParams::shear(t.phi)), height, width);
    let trans = AffineMatrix::translation(t.delta_u, t.delta_v);
    rot.mul(&scale).mul(&shear).mul(&trans)
}

/// Bilinear interpolation at `(u, v)`; neighbors outside
/// `[0, W-1] x [0, H-1]` contribute zero.
pub fn bilinear_sample(img: &Image, u: f64, v: f64) -> f32 {
    let u0 = u.floor();
    let v0 = v.floor();
    let fu = u - u0;
    let fv = v - v0;
    let mut acc = 0.0f64;
    for (dv, wv) in [(0i64, 1.0 - fv), (1, fv)] {
        for (du, wu) in [(0i64, 1.0 - fu), (1, fu)] {
            let ui = u0 as i64 + du;
            let vi = v0 as i64 + dv;
            if ui < 0 || vi < 0 || ui >= img.width() as i64 || vi >= img.height() as i64 {
                continue;
            }
            acc += wu * wv * f64::from(img.get(ui as usize, vi as usize));
        }
    }
    (acc as f32).clamp(0.0, 1.0)
}

/// Warps an image by the composed transform: every output pixel is sampled
/// from the input at the inverse-mapped location (one resampling total).
pub fn warp_image(img: &Image, t: &TransformParams) -> Result<Image> {
    let a = compose_sequence(t, img.height(), img.width());
    warp_by_matrix(img, &a)
}

fn warp_by_matrix(img: &Image, a: &AffineMatrix) -> Result<Image> {
    let det = a.det();
    if det.abs() < DET_THRESHOLD {
        return Err(Error::DegenerateTransform { det });
    }
    let inv = a.inverse()?;
    let mut out = Image::zeros(img.height(), img.width());
    for v in 0..img.height() {
        for u in 0..img.width() {
            let (su, sv) = inv.apply(u as f64, v as f64);
            out.set(u, v, bilinear_sample(img, su, sv));
        }
    }
    Ok(out)
}

/// Applies the four factors as separate resampling passes (translation,
/// shear, scale, rotation in point-application order). Compounds
/// interpolation blur; kept for comparing against the single-resample path.
pub fn warp_image_sequential(img: &Image, t: &TransformParams) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    let factors = [
        AffineMatrix::translation(t.delta_u, t.delta_v),
        center_fix(&build_matrix(&TransformParams::shear(t.phi)), h, w),
        center_fix(&build_matrix(&TransformParams::scale(t.s_u, t.s_v)), h, w),
        center_fix(&build_matrix(&TransformParams::rotation(t.theta)), h, w),
    ];
    let mut current = img.clone();
    for f in &factors {
        current = warp_by_matrix(&current, f)?;
    }
    Ok(current)
}

/// Norm used by [`translation_landscape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    L2,
    LInf,
}

fn pixel_norm(a: &Image, b: &Image, p: NormKind) -> f64 {
    let it = a.pixels().iter().zip(b.pixels()).map(|(x, y)| f64::from(x - y).abs());
    match p {
        NormKind::L2 => it.map(|d| d * d).sum::<f64>().sqrt(),
        NormKind::LInf => it.fold(0.0, f64::max),
    }
}

/// Distance `||x - warp(x, Trans(du, dv))||_p` over a grid of integer
/// translations. Entry `[i][j]` pairs `du_range[i]` with `dv_range[j]`.
pub fn translation_landscape(
    img: &Image,
    p: NormKind,
    du_range: &[i32],
    dv_range: &[i32],
) -> Result<Vec<Vec<f64>>> {
    let mut grid = vec![vec![0.0; dv_range.len()]; du_range.len()];
    for (i, &du) in du_range.iter().enumerate() {
        for (j, &dv) in dv_range.iter().enumerate() {
            let warped = warp_image(img, &TransformParams::translation(du.into(), dv.into()))?;
            grid[i][j] = pixel_norm(img, &warped, p);
        }
    }
    Ok(grid)
}

/// Writes an 8-bit binary PGM (`P5`), mapping `[0, 1]` to `0..=255` by
/// rounding.
pub fn write_pgm<W: Write>(out: &mut W, img: &Image) -> Result<()> {
    writeln!(out, "P5")?;
    writeln!(out, "{} {}", img.width(), img.height())?;
    writeln!(out, "255")?;
    let bytes: Vec<u8> = img
        .pixels()
        .iter()
        .map(|p| (f64::from(*p) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    out.write_all(&bytes)?;
    Ok(())
}

/// Writes a 2-D scalar grid as CSV: header row carries the column-axis
/// values, the first column carries the row-axis values, `value(i, j)` fills
/// cell `(row j, column i)`.
pub fn write_grid_csv<W: Write>(
    out: &mut W,
    col_axis: &[f64],
    row_axis: &[f64],
    mut value: impl FnMut(usize, usize) -> f64,
) -> Result<()> {
    for c in col_axis {
        write!(out, ",{c}")?;
    }
    writeln!(out)?;
    for (j, r) in row_axis.iter().enumerate() {
        write!(out, "{r}")?;
        for i in 0..col_axis.len() {
            write!(out, ",{}", value(i, j))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_4, PI};

    fn assert_mat_close(a: &AffineMatrix, b: &AffineMatrix, tol: f64) {
        for i in 0..3 {
            for j in 0..3 {
                assert!(
                    (a.rows()[i][j] - b.rows()[i][j]).abs() <= tol,
                    "entry ({i},{j}): {} vs {}",
                    a.rows()[i][j],
                    b.rows()[i][j]
                );
            }
        }
    }

    fn test_image() -> Image {
        // Deterministic non-trivial pattern with an empty border so small
        // warps lose nothing.
        let mut img = Image::zeros(28, 28);
        for v in 6..22 {
            for u in 6..22 {
                let val = ((u * 7 + v * 13) % 29) as f32 / 29.0;
                img.set(u, v, val);
            }
        }
        img
    }

    #[test]
    fn identity_params_build_identity_matrix() {
        let m = build_matrix(&TransformParams::identity());
        assert_mat_close(&m, &AffineMatrix::identity(), 0.0);
    }

    #[test]
    fn pure_translation_matrix_entries() {
        let m = build_matrix(&TransformParams::translation(3.0, -2.0));
        assert_eq!(m.rows()[0], [1.0, 0.0, 3.0]);
        assert_eq!(m.rows()[1], [0.0, 1.0, -2.0]);
        assert_eq!(m.rows()[2], [0.0, 0.0, 1.0]);
    }

    #[test]
    fn quarter_turn_rotation_entries() {
        let m = build_matrix(&TransformParams::rotation(FRAC_PI_4));
        let c = FRAC_PI_4.cos();
        assert!((m.rows()[0][0] - c).abs() < 1e-15);
        assert!((m.rows()[0][1] + c).abs() < 1e-15);
        assert!((m.rows()[1][0] - c).abs() < 1e-15);
        assert!((m.rows()[1][1] - c).abs() < 1e-15);
    }

    #[test]
    fn theta_phi_pi_gives_horizontal_flip() {
        // theta = phi = pi: linear part diag(-1, 1), a left-right mirror.
        let m = build_matrix(&TransformParams { theta: PI, phi: PI, ..TransformParams::identity() });
        assert!((m.rows()[0][0] + 1.0).abs() < 1e-15);
        assert!(m.rows()[0][1].abs() < 1e-15);
        assert!(m.rows()[1][0].abs() < 1e-15);
        assert!((m.rows()[1][1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn shear_only_entries() {
        let phi = 0.3;
        let m = build_matrix(&TransformParams::shear(phi));
        assert!((m.rows()[0][0] - 1.0).abs() < 1e-15);
        assert!((m.rows()[0][1] + phi.sin()).abs() < 1e-15);
        assert!(m.rows()[1][0].abs() < 1e-15);
        assert!((m.rows()[1][1] - phi.cos()).abs() < 1e-15);
    }

    #[test]
    fn center_fix_keeps_rounded_center_fixed() {
        let theta = 50.0f64.to_radians();
        let a = center_fix(&build_matrix(&TransformParams::rotation(theta)), 28, 28);
        let (u, v) = a.apply(14.0, 14.0);
        assert!((u - 14.0).abs() < 1e-9, "center u moved to {u}");
        assert!((v - 14.0).abs() < 1e-9, "center v moved to {v}");
    }

    #[test]
    fn center_fix_leaves_pure_translation_unchanged() {
        let t = build_matrix(&TransformParams::translation(3.0, -2.0));
        let fixed = center_fix(&t, 28, 28);
        assert_mat_close(&fixed, &t, 1e-12);
    }

    #[test]
    fn center_uses_rounding_for_odd_sizes() {
        assert_eq!(image_center(28, 28), (14.0, 14.0));
        assert_eq!(image_center(27, 27), (14.0, 14.0));
        assert_eq!(image_center(25, 25), (13.0, 13.0));
    }

    #[test]
    fn compose_identity_is_identity() {
        let a = compose_sequence(&TransformParams::identity(), 28, 28);
        assert_mat_close(&a, &AffineMatrix::identity(), 1e-15);
    }

    #[test]
    fn compose_single_factor_matches_center_fixed_factor() {
        let theta = 0.4;
        let composed = compose_sequence(&TransformParams::rotation(theta), 28, 28);
        let direct = center_fix(&build_matrix(&TransformParams::rotation(theta)), 28, 28);
        assert_mat_close(&composed, &direct, 1e-12);
    }

    #[test]
    fn compose_matches_explicit_product() {
        // Independent oracle: multiply the four center-fixed factors with a
        // dedicated naive triple loop.
        fn naive_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
            let mut out = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        out[i][j] += a[i][k] * b[k][j];
                    }
                }
            }
            out
        }
        let t = TransformParams {
            delta_u: 1.5,
            delta_v: -2.0,
            theta: 0.3,
            phi: -0.2,
            s_u: 1.2,
            s_v: 0.8,
        };
        let rot = center_fix(&build_matrix(&TransformParams::rotation(t.theta)), 28, 28);
        let scale = center_fix(&build_matrix(&TransformParams::scale(t.s_u, t.s_v)), 28, 28);
        let shear = center_fix(&build_matrix(&TransformParams::shear(t.phi)), 28, 28);
        let trans = AffineMatrix::translation(t.delta_u, t.delta_v);
        let expected = naive_mul(
            rot.rows(),
            &naive_mul(scale.rows(), &naive_mul(shear.rows(), trans.rows())),
        );
        let got = compose_sequence(&t, 28, 28);
        assert_mat_close(&got, &AffineMatrix::from_rows(expected), 1e-12);
    }

    proptest! {
        #[test]
        fn bottom_row_is_exact_under_composition(
            du in -3.0..3.0f64,
            dv in -3.0..3.0f64,
            theta in -0.6..0.6f64,
            phi in -0.4..0.4f64,
            su in 0.6..1.4f64,
            sv in 0.6..1.4f64,
        ) {
            let t = TransformParams { delta_u: du, delta_v: dv, theta, phi, s_u: su, s_v: sv };
            let a = compose_sequence(&t, 28, 28);
            prop_assert_eq!(a.rows()[2], [0.0, 0.0, 1.0]);
            let inv = a.inverse().unwrap();
            prop_assert!(inv.rows()[2][0].abs() < 1e-15);
            prop_assert!(inv.rows()[2][1].abs() < 1e-15);
            prop_assert!((inv.rows()[2][2] - 1.0).abs() < 1e-12);
        }

        #[test]
        fn warp_stays_in_unit_range(
            du in -3.0..3.0f64,
            theta in -0.6..0.6f64,
            su in 0.6..1.4f64,
        ) {
            let t = TransformParams { delta_u: du, theta, s_u: su, ..TransformParams::identity() };
            let out = warp_image(&test_image(), &t).unwrap();
            prop_assert!(out.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn inverse_round_trips() {
        let t = TransformParams {
            delta_u: 2.0,
            delta_v: 1.0,
            theta: 0.5,
            phi: 0.1,
            s_u: 0.7,
            s_v: 1.3,
        };
        let a = compose_sequence(&t, 28, 28);
        let prod = a.mul(&a.inverse().unwrap());
        assert_mat_close(&prod, &AffineMatrix::identity(), 1e-12);
    }

    #[test]
    fn inverse_rejects_singular_matrix() {
        let m = build_matrix(&TransformParams::scale(0.0, 1.0));
        match m.inverse() {
            Err(Error::DegenerateTransform { det }) => assert!(det.abs() < DET_THRESHOLD),
            other => panic!("expected degenerate error, got {other:?}"),
        }
    }

    #[test]
    fn homogeneous_division_is_exercised_for_projective_rows() {
        // Affine inputs always have w = 1; feed a genuinely projective
        // matrix to check the division path.
        let m = AffineMatrix::from_rows([
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 2.0],
        ]);
        let (u, v) = m.apply(4.0, 6.0);
        assert_eq!((u, v), (2.0, 3.0));

        let m = AffineMatrix::from_rows([
            [2.0, 0.0, 1.0],
            [0.0, 2.0, 0.0],
            [0.5, 0.0, 1.0],
        ]);
        let (u, v) = m.apply(2.0, 2.0);
        assert!((u - 2.5).abs() < 1e-15);
        assert!((v - 2.0).abs() < 1e-15);
    }

    #[test]
    fn bilinear_midpoint_of_four_neighbors() {
        let mut img = Image::zeros(2, 2);
        img.set(0, 0, 0.0);
        img.set(1, 0, 1.0);
        img.set(0, 1, 1.0);
        img.set(1, 1, 0.0);
        assert!((bilinear_sample(&img, 0.5, 0.5) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn bilinear_integer_coordinates_hit_pixels_exactly() {
        let img = test_image();
        for v in 0..img.height() {
            for u in 0..img.width() {
                assert_eq!(bilinear_sample(&img, u as f64, v as f64), img.get(u, v));
            }
        }
    }

    #[test]
    fn bilinear_outside_support_is_zero() {
        let img = test_image();
        assert_eq!(bilinear_sample(&img, -5.0, 3.0), 0.0);
        assert_eq!(bilinear_sample(&img, 3.0, 40.0), 0.0);
    }

    #[test]
    fn bilinear_partial_overlap_at_border() {
        let mut img = Image::zeros(3, 3);
        img.set(0, 0, 0.8);
        // Half a pixel above the top edge: only (0,0) contributes at
        // weight 0.5.
        let got = bilinear_sample(&img, 0.0, -0.5);
        assert!((got - 0.4).abs() < 1e-7);
    }

    #[test]
    fn warp_identity_is_bit_exact() {
        let img = test_image();
        let out = warp_image(&img, &TransformParams::identity()).unwrap();
        assert_eq!(out.pixels(), img.pixels());
    }

    #[test]
    fn warp_integer_translation_shifts_exactly() {
        let mut img = Image::zeros(8, 8);
        img.set(3, 4, 1.0);
        let out = warp_image(&img, &TransformParams::translation(1.0, 0.0)).unwrap();
        for v in 0..8 {
            for u in 0..8 {
                let expected = if (u, v) == (4, 4) { 1.0 } else { 0.0 };
                assert_eq!(out.get(u, v), expected, "pixel ({u},{v})");
            }
        }
        // The vacated column came from outside the support.
        assert!((0..8).all(|v| out.get(0, v) == 0.0));
    }

    #[test]
    fn warp_matches_brute_force_resample() {
        // Oracle: re-derive every output pixel straight from the definition,
        // with an independently computed inverse (solve the 2x2 system).
        let img = test_image();
        let t = TransformParams {
            delta_u: 1.0,
            delta_v: -1.5,
            theta: 0.3,
            phi: 0.15,
            s_u: 1.1,
            s_v: 0.85,
        };
        let a = compose_sequence(&t, 28, 28);
        let r = a.rows();
        let (m00, m01, m02) = (r[0][0], r[0][1], r[0][2]);
        let (m10, m11, m12) = (r[1][0], r[1][1], r[1][2]);
        let det = m00 * m11 - m01 * m10;
        let out = warp_image(&img, &t).unwrap();
        for v in 0..28 {
            for u in 0..28 {
                let bu = u as f64 - m02;
                let bv = v as f64 - m12;
                let su = (m11 * bu - m01 * bv) / det;
                let sv = (m00 * bv - m10 * bu) / det;
                let expected = bilinear_sample(&img, su, sv);
                assert!(
                    (out.get(u, v) - expected).abs() < 1e-6,
                    "pixel ({u},{v}): {} vs {}",
                    out.get(u, v),
                    expected
                );
            }
        }
    }

    #[test]
    fn warp_rotation_round_trip_loses_little() {
        // Interpolation error scales with image curvature, so round-trip
        // fidelity is only meaningful on smooth content; two off-center
        // bumps keep the image asymmetric under rotation.
        let mut img = Image::zeros(28, 28);
        for v in 0..28 {
            for u in 0..28 {
                let a = (-((u as f64 - 10.0).powi(2) + (v as f64 - 17.0).powi(2)) / 18.0).exp();
                let b = (-((u as f64 - 19.0).powi(2) + (v as f64 - 9.0).powi(2)) / 25.0).exp();
                img.set(u, v, (a + 0.7 * b).min(1.0) as f32);
            }
        }
        let theta = 30.0f64.to_radians();
        let once = warp_image(&img, &TransformParams::rotation(theta)).unwrap();
        let back = warp_image(&once, &TransformParams::rotation(-theta)).unwrap();
        let mae: f64 = img
            .pixels()
            .iter()
            .zip(back.pixels())
            .map(|(a, b)| f64::from(a - b).abs())
            .sum::<f64>()
            / img.pixels().len() as f64;
        assert!(mae < 0.01, "round-trip mean absolute error {mae}");
    }

    #[test]
    fn sequential_warp_agrees_on_identity_and_single_factors() {
        let img = test_image();
        for t in [
            TransformParams::identity(),
            TransformParams::translation(2.0, -1.0),
            TransformParams::rotation(0.3),
        ] {
            let single = warp_image(&img, &t).unwrap();
            let multi = warp_image_sequential(&img, &t).unwrap();
            if t == TransformParams::identity() || t == TransformParams::translation(2.0, -1.0) {
                assert_eq!(single.pixels(), multi.pixels());
            } else {
                let mae: f64 = single
                    .pixels()
                    .iter()
                    .zip(multi.pixels())
                    .map(|(a, b)| f64::from(a - b).abs())
                    .sum::<f64>()
                    / single.pixels().len() as f64;
                assert!(mae < 1e-6);
            }
        }
    }

    #[test]
    fn sequential_warp_blurs_more_than_single_resample() {
        let img = test_image();
        let t = TransformParams {
            delta_u: 0.7,
            delta_v: -0.4,
            theta: 0.35,
            phi: 0.2,
            s_u: 1.15,
            s_v: 0.9,
        };
        let single = warp_image(&img, &t).unwrap();
        let multi = warp_image_sequential(&img, &t).unwrap();
        let diff: f64 = single
            .pixels()
            .iter()
            .zip(multi.pixels())
            .map(|(a, b)| f64::from(a - b).abs())
            .sum();
        assert!(diff > 0.0, "four-pass warp should differ from one-pass");
    }

    #[test]
    fn warp_rejects_degenerate_scale() {
        let img = test_image();
        let err = warp_image(&img, &TransformParams::scale(1e-10, 1.0)).unwrap_err();
        assert!(matches!(err, Error::DegenerateTransform { .. }));
    }

    #[test]
    fn flip_horizontal_is_involution_and_mirrors_columns() {
        let img = test_image();
        let flipped = img.flip_horizontal();
        assert_eq!(flipped.get(0, 10), img.get(27, 10));
        assert_eq!(flipped.flip_horizontal().pixels(), img.pixels());
    }

    #[test]
    fn flip_matches_pi_pi_warp_on_centered_content() {
        // theta = phi = pi has linear part diag(-1, 1) anchored at the
        // rounded center c: u -> 2c - u. For even width the mirror oracle is
        // u -> W - 1 - u composed with a one-pixel shift, computed here
        // directly.
        let img = test_image();
        let warped = warp_image(
            &img,
            &TransformParams { theta: PI, phi: PI, ..TransformParams::identity() },
        )
        .unwrap();
        let c = image_center(28, 28).0 as i64;
        for v in 0..28usize {
            for u in 0..28i64 {
                let src = 2 * c - u;
                let expected = if (0..28).contains(&src) {
                    img.get(src as usize, v)
                } else {
                    0.0
                };
                let got = warped.get(u as usize, v);
                assert!(
                    (got - expected).abs() < 1e-6,
                    "pixel ({u},{v}): {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn translation_landscape_zero_at_origin_and_bounded() {
        let img = test_image();
        let du: Vec<i32> = (-3..=3).collect();
        let dv: Vec<i32> = (-3..=3).collect();
        let grid = translation_landscape(&img, NormKind::LInf, &du, &dv).unwrap();
        assert_eq!(grid.len(), 7);
        assert_eq!(grid[0].len(), 7);
        assert_eq!(grid[3][3], 0.0);
        for row in &grid {
            for &val in row {
                assert!((0.0..=1.0).contains(&val), "L-inf distance {val} out of range");
            }
        }
        let l2 = translation_landscape(&img, NormKind::L2, &du, &dv).unwrap();
        assert_eq!(l2[3][3], 0.0);
        assert!(l2[0][0] > 0.0);
    }

    #[test]
    fn pgm_writer_emits_valid_header_and_payload() {
        let mut img = Image::zeros(2, 3);
        img.set(0, 0, 1.0);
        img.set(2, 1, 0.5);
        let mut buf = Vec::new();
        write_pgm(&mut buf, &img).unwrap();
        let header_end = buf.windows(4).position(|w| w == b"255\n").unwrap() + 4;
        assert_eq!(&buf[..header_end], b"P5\n3 2\n255\n");
        assert_eq!(&buf[header_end..], &[255, 0, 0, 0, 0, 128]);
    }

    #[test]
    fn grid_csv_layout_matches_axes() {
        let cols = [1.0, 2.0];
        let rows = [10.0, 20.0, 30.0];
        let mut buf = Vec::new();
        write_grid_csv(&mut buf, &cols, &rows, |i, j| (i * 100 + j) as f64).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], ",1,2");
        assert_eq!(lines[1], "10,0,100");
        assert_eq!(lines[2], "20,1,101");
        assert_eq!(lines[3], "30,2,102");
    }

    #[test]
    fn image_constructor_validates() {
        assert!(matches!(
            Image::from_pixels(2, 2, vec![0.0; 3]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            Image::from_pixels(1, 2, vec![0.5, 1.5]),
            Err(Error::Bounds(_))
        ));
    }
}
