//! Homography algebra for the vertical 4-point parameterization.
//!
//! Corners are always ordered top-left, top-right, bottom-right, bottom-left
//! and image `y` grows downward, so a positive displacement moves a corner
//! down. A displacement-derived homography maps distorted-image coordinates
//! to rectified coordinates: each default corner `(x_i, y_i)` goes to
//! `(x_i, y_i + d_i)`.

use std::fmt;
use std::str::FromStr;

use crate::linalg::{self, det3, inv3, mat3_mul};
use crate::{Error, Real, Result};

/// Corner indices in canonical order.
pub const TOP_LEFT: usize = 0;
pub const TOP_RIGHT: usize = 1;
pub const BOTTOM_RIGHT: usize = 2;
pub const BOTTOM_LEFT: usize = 3;

/// The image side whose two corners an annotator moved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    /// Corner indices (top, bottom) belonging to this side.
    pub fn corners(self) -> [usize; 2] {
        match self {
            Side::Left => [TOP_LEFT, BOTTOM_LEFT],
            Side::Right => [TOP_RIGHT, BOTTOM_RIGHT],
        }
    }

    pub fn opposite(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Side {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "left" | "l" => Ok(Side::Left),
            "right" | "r" => Ok(Side::Right),
            other => Err(format!("unknown side `{other}` (expected left or right)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
}

impl<T: Real> Point<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Self) -> T {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Vertical displacements of the four corners, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DisplacementVector<T>(pub [T; 4]);

impl<T: Real> DisplacementVector<T> {
    pub fn new(d: [T; 4]) -> Self {
        Self(d)
    }

    pub fn zero() -> Self {
        Self([T::zero(); 4])
    }

    /// Builds a side-consistent vector from the two values of one side
    /// (top corner first).
    pub fn from_side(side: Side, top: T, bottom: T) -> Self {
        let mut d = [T::zero(); 4];
        let [t, b] = side.corners();
        d[t] = top;
        d[b] = bottom;
        Self(d)
    }

    pub fn values(&self) -> [T; 4] {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.0.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// True when the corners of the opposite side are exactly zero.
    pub fn is_consistent_with(&self, side: Side) -> bool {
        side.opposite().corners().iter().all(|&i| self.0[i] == T::zero())
    }

    /// The side that carries the displacement: `Right` when either right
    /// corner is nonzero, otherwise `Left`. Returns `None` when both sides
    /// carry nonzero values.
    pub fn inferred_side(&self) -> Option<Side> {
        if self.is_consistent_with(Side::Left) {
            Some(Side::Left)
        } else if self.is_consistent_with(Side::Right) {
            Some(Side::Right)
        } else {
            None
        }
    }

    /// The (top, bottom) values of `side`.
    pub fn side_values(&self, side: Side) -> [T; 2] {
        let [t, b] = side.corners();
        [self.0[t], self.0[b]]
    }

    pub fn scaled(&self, s: T) -> Self {
        Self(self.0.map(|v| v * s))
    }

    pub fn cast<U: Real>(&self) -> DisplacementVector<U> {
        DisplacementVector(self.0.map(|v| U::lit(v.to_f64_lossy())))
    }
}

impl<T: Real> fmt::Display for DisplacementVector<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d] = self.0;
        write!(f, "{a} {b} {c} {d}")
    }
}

impl<T: Real + FromStr> FromStr for DisplacementVector<T> {
    type Err = String;

    /// Accepts four numbers separated by whitespace and/or commas.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(|c: char| c == ',' || c.is_whitespace()).filter(|p| !p.is_empty()).collect();
        if parts.len() != 4 {
            return Err(format!("expected 4 displacement values, got {}", parts.len()));
        }
        let mut d = [T::zero(); 4];
        for (slot, p) in d.iter_mut().zip(&parts) {
            *slot = p.parse().map_err(|_| format!("invalid number `{p}`"))?;
            if !slot.is_finite() {
                return Err(format!("non-finite displacement `{p}`"));
            }
        }
        Ok(Self(d))
    }
}

/// Four image corners together with the frame size they belong to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerSet<T> {
    points: [Point<T>; 4],
    pub width: T,
    pub height: T,
}

impl<T: Real> CornerSet<T> {
    /// `(0,0), (W,0), (W,H), (0,H)`.
    pub fn new(width: T, height: T) -> Self {
        let z = T::zero();
        Self {
            points: [Point::new(z, z), Point::new(width, z), Point::new(width, height), Point::new(z, height)],
            width,
            height,
        }
    }

    pub fn from_points(points: [Point<T>; 4], width: T, height: T) -> Result<Self> {
        for i in 0..4 {
            for j in i + 1..4 {
                for k in j + 1..4 {
                    let (a, b, c) = (points[i], points[j], points[k]);
                    let cross = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
                    let scale = T::one().max(width.abs()).max(height.abs());
                    if cross.abs() <= T::singular_eps() * scale * scale {
                        return Err(Error::SingularSystem(format!("corners {i}, {j}, {k} are collinear")));
                    }
                }
            }
        }
        Ok(Self { points, width, height })
    }

    pub fn points(&self) -> &[Point<T>; 4] {
        &self.points
    }

    /// Default corners moved vertically by `d`.
    pub fn displaced(&self, d: &DisplacementVector<T>) -> Result<Self> {
        let mut pts = self.points;
        for (p, v) in pts.iter_mut().zip(d.0) {
            p.y += v;
        }
        Self::from_points(pts, self.width, self.height)
    }
}

/// Anisotropic coordinate scaling `diag(sx, sy, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleTransform<T> {
    sx: T,
    sy: T,
}

impl<T: Real> ScaleTransform<T> {
    pub fn new(sx: T, sy: T) -> Result<Self> {
        if !(sx > T::zero() && sy > T::zero() && sx.is_finite() && sy.is_finite()) {
            return Err(Error::OutOfRange(format!("scale factors must be positive, got ({sx}, {sy})")));
        }
        Ok(Self { sx, sy })
    }

    /// Scale taking an `orig_w × orig_h` frame to `new_w × new_h`.
    pub fn between(orig_w: T, orig_h: T, new_w: T, new_h: T) -> Result<Self> {
        Self::new(new_w / orig_w, new_h / orig_h)
    }

    pub fn sx(&self) -> T {
        self.sx
    }

    pub fn sy(&self) -> T {
        self.sy
    }

    pub fn to_homography(&self) -> Homography<T> {
        let (z, o) = (T::zero(), T::one());
        Homography { m: [[self.sx, z, z], [z, self.sy, z], [z, z, o]] }
    }

    pub fn inverse(&self) -> Self {
        Self { sx: T::one() / self.sx, sy: T::one() / self.sy }
    }
}

/// Invertible 3×3 projective transform with `h[2][2] == 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography<T> {
    m: [[T; 3]; 3],
}

impl<T: Real> Homography<T> {
    pub fn identity() -> Self {
        let (z, o) = (T::zero(), T::one());
        Self { m: [[o, z, z], [z, o, z], [z, z, o]] }
    }

    pub fn translation(tx: T, ty: T) -> Self {
        let (z, o) = (T::zero(), T::one());
        Self { m: [[o, z, tx], [z, o, ty], [z, z, o]] }
    }

    /// Canonicalizes by `m[2][2]` and checks invertibility.
    pub fn from_matrix(m: [[T; 3]; 3]) -> Result<Self> {
        let h22 = m[2][2];
        if !(h22.abs() >= T::singular_eps()) {
            return Err(Error::SingularSystem("h[2][2] vanishes".into()));
        }
        let m = m.map(|row| row.map(|v| v / h22));
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::SingularSystem("non-finite matrix entry".into()));
        }
        if !(det3(&m).abs() > T::singular_eps()) {
            return Err(Error::SingularSystem("determinant vanishes".into()));
        }
        Ok(Self { m })
    }

    /// Exact homography from four correspondences `src[i] -> dst[i]`.
    ///
    /// Both point sets are expressed relative to an axis-aligned frame of
    /// size `frame_w × frame_h` before the 8×8 system is built, which keeps
    /// the system well conditioned at pixel scale.
    pub fn from_correspondences(src: &[Point<T>; 4], dst: &[Point<T>; 4], frame_w: T, frame_h: T) -> Result<Self> {
        let norm = Normalizer::new(frame_w, frame_h)?;
        let src_n = src.map(|p| norm.apply(p));
        let dst_n = dst.map(|p| norm.apply(p));
        let (h, _) = dlt_normalized(&src_n, &dst_n)?;
        Self::from_matrix(norm.denormalize(&h))
    }

    pub fn matrix(&self) -> &[[T; 3]; 3] {
        &self.m
    }

    pub fn determinant(&self) -> T {
        det3(&self.m)
    }

    /// Row-major entries.
    pub fn to_row_major(&self) -> [T; 9] {
        let m = &self.m;
        [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]]
    }

    pub fn from_row_major(v: [T; 9]) -> Result<Self> {
        Self::from_matrix([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }

    /// Projective image of `p` with perspective division.
    pub fn apply(&self, p: Point<T>) -> Result<Point<T>> {
        let m = &self.m;
        let w = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
        if !(w.abs() >= T::singular_eps()) {
            return Err(Error::AtInfinity);
        }
        Ok(Point::new(
            (m[0][0] * p.x + m[0][1] * p.y + m[0][2]) / w,
            (m[1][0] * p.x + m[1][1] * p.y + m[1][2]) / w,
        ))
    }

    pub fn invert(&self) -> Result<Self> {
        let inv = inv3(&self.m).ok_or_else(|| Error::SingularSystem("matrix is not invertible".into()))?;
        Self::from_matrix(inv)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Result<Self> {
        Self::from_matrix(mat3_mul(&self.m, &other.m))
    }

    pub fn cast<U: Real>(&self) -> Homography<U> {
        Homography { m: self.m.map(|row| row.map(|v| U::lit(v.to_f64_lossy()))) }
    }
}

impl<T: Real> fmt::Display for Homography<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.to_row_major();
        for (i, x) in v.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{x}")?;
        }
        Ok(())
    }
}

impl<T: Real + FromStr> FromStr for Homography<T> {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(|c: char| c == ',' || c.is_whitespace()).filter(|p| !p.is_empty()).collect();
        if parts.len() != 9 {
            return Err(Error::OutOfRange(format!("expected 9 matrix entries, got {}", parts.len())));
        }
        let mut v = [T::zero(); 9];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p.parse().map_err(|_| Error::OutOfRange(format!("invalid number `{p}`")))?;
        }
        Self::from_row_major(v)
    }
}

/// Result of reading a displacement vector back off a homography.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisplacementReadout<T> {
    pub d: DisplacementVector<T>,
    /// Some corner also moved horizontally by more than 1e-6 px.
    pub lossy: bool,
}

/// Homography taking the default corners of a `width × height` frame to the
/// same corners displaced vertically by `d`.
pub fn displacement_to_homography<T: Real>(d: &DisplacementVector<T>, width: T, height: T) -> Result<Homography<T>> {
    Ok(DisplacementSolve::new(d, width, height)?.homography)
}

/// Vertical residuals of the default corners under `h`.
pub fn homography_to_displacement<T: Real>(h: &Homography<T>, width: T, height: T) -> Result<DisplacementReadout<T>> {
    let corners = CornerSet::new(width, height);
    let mut d = [T::zero(); 4];
    let mut lossy = false;
    for (i, c) in corners.points().iter().enumerate() {
        let p = h.apply(*c)?;
        d[i] = p.y - c.y;
        if (p.x - c.x).abs() > T::lit(1e-6) {
            lossy = true;
        }
    }
    Ok(DisplacementReadout { d: DisplacementVector(d), lossy })
}

/// `S · H · S⁻¹`: the same geometric mapping expressed in rescaled pixel
/// coordinates.
pub fn rescale_homography<T: Real>(h: &Homography<T>, s: &ScaleTransform<T>) -> Result<Homography<T>> {
    let sm = s.to_homography();
    let sinv = s.inverse().to_homography();
    Homography::from_matrix(mat3_mul(&mat3_mul(&sm.m, &h.m), &sinv.m))
}

/// Per-axis normalization `diag(1/W, 1/H, 1)` used to condition the DLT.
#[derive(Debug, Clone, Copy)]
struct Normalizer<T> {
    n: [T; 3],
}

impl<T: Real> Normalizer<T> {
    fn new(w: T, h: T) -> Result<Self> {
        if !(w > T::zero() && h > T::zero()) {
            return Err(Error::OutOfRange(format!("frame size must be positive, got {w}×{h}")));
        }
        Ok(Self { n: [T::one() / w, T::one() / h, T::one()] })
    }

    fn apply(&self, p: Point<T>) -> Point<T> {
        Point::new(p.x * self.n[0], p.y * self.n[1])
    }

    /// `N⁻¹ · Hn · N` for the 8 solved entries of `Hn` (with `Hn[2][2] = 1`).
    fn denormalize(&self, h: &[T; 8]) -> [[T; 3]; 3] {
        let mut m = [[T::zero(); 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                let hn = if r * 3 + c < 8 { h[r * 3 + c] } else { T::one() };
                m[r][c] = hn * self.n[c] / self.n[r];
            }
        }
        m
    }
}

/// Builds and solves `M h = b` for the 8 unknowns of a homography with
/// `h22 = 1`. Returns the solution together with `M` (needed by adjoints).
fn dlt_normalized<T: Real>(src: &[Point<T>; 4], dst: &[Point<T>; 4]) -> Result<([T; 8], [[T; 8]; 8])> {
    let (z, o) = (T::zero(), T::one());
    let mut a = [[z; 8]; 8];
    let mut b = [z; 8];
    for i in 0..4 {
        let (x, y) = (src[i].x, src[i].y);
        let (u, v) = (dst[i].x, dst[i].y);
        a[2 * i] = [x, y, o, z, z, z, -u * x, -u * y];
        b[2 * i] = u;
        a[2 * i + 1] = [z, z, z, x, y, o, -v * x, -v * y];
        b[2 * i + 1] = v;
    }
    let h = linalg::solve(a, b)?;
    Ok((h, a))
}

/// A solved displacement homography that keeps what its adjoint needs.
#[derive(Debug, Clone)]
pub(crate) struct DisplacementSolve<T> {
    pub homography: Homography<T>,
    norm: Normalizer<T>,
    system: [[T; 8]; 8],
    h_norm: [T; 8],
    src_norm: [Point<T>; 4],
}

impl<T: Real> DisplacementSolve<T> {
    pub fn new(d: &DisplacementVector<T>, width: T, height: T) -> Result<Self> {
        if !d.is_finite() {
            return Err(Error::OutOfRange("non-finite displacement".into()));
        }
        let corners = CornerSet::new(width, height);
        let norm = Normalizer::new(width, height)?;
        let dst = corners.displaced(d)?;
        let src_norm = corners.points().map(|p| norm.apply(p));
        let dst_norm = dst.points().map(|p| norm.apply(p));
        let (h_norm, system) = dlt_normalized(&src_norm, &dst_norm)?;
        let homography = Homography::from_matrix(norm.denormalize(&h_norm))?;
        Ok(Self { homography, norm, system, h_norm, src_norm })
    }

    /// Pulls a gradient with respect to the 3×3 entries of the homography
    /// back to the four displacements through the linear-solve adjoint.
    pub fn backprop(&self, grad_h: &[[T; 3]; 3]) -> Result<[T; 4]> {
        let n = &self.norm.n;
        let mut g = [T::zero(); 8];
        for (k, slot) in g.iter_mut().enumerate() {
            let (r, c) = (k / 3, k % 3);
            *slot = grad_h[r][c] * n[c] / n[r];
        }
        let lambda = linalg::solve(linalg::transpose(&self.system), g)?;
        let (h6, h7) = (self.h_norm[6], self.h_norm[7]);
        let mut out = [T::zero(); 4];
        for i in 0..4 {
            let p = self.src_norm[i];
            // d v_i / d d_i = 1 / height, and only the v-row of corner i moves.
            out[i] = lambda[2 * i + 1] * (T::one() + p.x * h6 + p.y * h7) * n[1];
        }
        Ok(out)
    }
}
