//! Axis-aligned box arithmetic, coordinate-space conversion and IoU.
//!
//! Boxes use corner form `(x1, y1, x2, y2)` with continuous-area semantics:
//! `area = (x2 - x1) * (y2 - y1)`. Every routine is generic over [`Scalar`],
//! so the same code runs on `f32`, `f64` and exact rationals.

use std::fmt;

use num_rational::Ratio;
use num_traits::{FromPrimitive, Num, ToPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Denominator of the normalized box convention: coordinates in `[0, 999]`
/// are treated as 1000 bins, so `c_pixel = c_norm * dim / 1000`.
pub const NORM1000_DIVISOR: f64 = 1000.0;

/// Largest valid normalized coordinate.
pub const NORM1000_MAX: f64 = 999.0;

/// Numeric type usable as a box coordinate.
pub trait Scalar: Num + ToPrimitive + FromPrimitive + PartialOrd + Copy + fmt::Debug {
    fn is_finite_value(&self) -> bool;
}

impl Scalar for f32 {
    fn is_finite_value(&self) -> bool {
        self.is_finite()
    }
}

impl Scalar for f64 {
    fn is_finite_value(&self) -> bool {
        self.is_finite()
    }
}

impl Scalar for Ratio<i64> {
    fn is_finite_value(&self) -> bool {
        true
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box coordinates must be finite")]
    NonFinite,
    #[error("box is not canonical: ({x1:?}, {y1:?}) must not exceed ({x2:?}, {y2:?})")]
    NotCanonical { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("coordinate spaces differ: {0} vs {1}")]
    MixedSpaces(CoordSpace, CoordSpace),
    #[error("pixel space must have positive width and height, got {width}x{height}")]
    ZeroSizedSpace { width: u32, height: u32 },
    #[error("coordinate {0} cannot be represented in the target scalar type")]
    Unrepresentable(f64),
}

fn lossy<T: Scalar>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Axis-aligned box in corner form.
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[T; 4]", from = "[T; 4]")]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct BBox<T = f64> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

impl<T: Scalar> From<BBox<T>> for [T; 4] {
    fn from(b: BBox<T>) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl<T: Scalar> From<[T; 4]> for BBox<T> {
    fn from(a: [T; 4]) -> Self {
        BBox { x1: a[0], y1: a[1], x2: a[2], y2: a[3] }
    }
}

impl<T: fmt::Debug> fmt::Debug for BBox<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BBox({:?}, {:?}, {:?}, {:?})", self.x1, self.y1, self.x2, self.y2)
    }
}

impl<T: Scalar> BBox<T> {
    /// Builds a canonical box, rejecting swapped corners and non-finite values.
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self, GeometryError> {
        let b = BBox { x1, y1, x2, y2 };
        if !b.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        if !b.is_canonical() {
            return Err(GeometryError::NotCanonical { x1: lossy(x1), y1: lossy(y1), x2: lossy(x2), y2: lossy(y2) });
        }
        Ok(b)
    }

    /// Builds a box from arbitrary corners, swapping them where needed.
    /// The flag reports whether any swap happened.
    pub fn canonicalize(x1: T, y1: T, x2: T, y2: T) -> Result<(Self, bool), GeometryError> {
        let mut b = BBox { x1, y1, x2, y2 };
        if !b.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        let mut swapped = false;
        if b.x1 > b.x2 {
            std::mem::swap(&mut b.x1, &mut b.x2);
            swapped = true;
        }
        if b.y1 > b.y2 {
            std::mem::swap(&mut b.y1, &mut b.y2);
            swapped = true;
        }
        Ok((b, swapped))
    }

    pub fn is_finite(&self) -> bool {
        self.x1.is_finite_value() && self.y1.is_finite_value() && self.x2.is_finite_value() && self.y2.is_finite_value()
    }

    pub fn is_canonical(&self) -> bool {
        self.x1 <= self.x2 && self.y1 <= self.y2
    }

    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    /// Overlap of two canonical boxes, or `None` when they do not overlap
    /// with positive extent on both axes.
    pub fn intersection(&self, other: &Self) -> Option<Self> {
        let x1 = max_of(self.x1, other.x1);
        let y1 = max_of(self.y1, other.y1);
        let x2 = min_of(self.x2, other.x2);
        let y2 = min_of(self.y2, other.y2);
        if x1 < x2 && y1 < y2 {
            Some(BBox { x1, y1, x2, y2 })
        } else {
            None
        }
    }

    /// True when `other` lies entirely inside `self` (edges may touch).
    pub fn contains(&self, other: &Self) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }

    pub fn translate(&self, dx: T, dy: T) -> Self {
        BBox { x1: self.x1 + dx, y1: self.y1 + dy, x2: self.x2 + dx, y2: self.y2 + dy }
    }

    /// Clamps every coordinate into `[lo, hi]`, reporting whether anything moved.
    pub fn clamp(&self, lo: T, hi: T) -> (Self, bool) {
        let c = |v: T| {
            if v < lo {
                lo
            } else if v > hi {
                hi
            } else {
                v
            }
        };
        let out = BBox { x1: c(self.x1), y1: c(self.y1), x2: c(self.x2), y2: c(self.y2) };
        let moved = out != *self;
        (out, moved)
    }

    /// Converts the coordinate type, failing if a value does not fit.
    pub fn cast<U: Scalar>(&self) -> Result<BBox<U>, GeometryError> {
        let c = |v: T| v.to_f64().and_then(U::from_f64).ok_or(GeometryError::Unrepresentable(lossy(v)));
        Ok(BBox { x1: c(self.x1)?, y1: c(self.y1)?, x2: c(self.x2)?, y2: c(self.y2)? })
    }
}

fn max_of<T: PartialOrd>(a: T, b: T) -> T {
    if a >= b {
        a
    } else {
        b
    }
}

fn min_of<T: PartialOrd>(a: T, b: T) -> T {
    if a <= b {
        a
    } else {
        b
    }
}

/// Intersection over union of two canonical boxes in the same space.
///
/// A zero-area union (both boxes degenerate) yields 0.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let inter = a.intersection(b).map(|i| i.area()).unwrap_or_else(T::zero);
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        T::zero()
    } else {
        inter / union
    }
}

/// IoU of two boxes tagged with their coordinate spaces.
pub fn iou_in<T: Scalar>(
    a: &BBox<T>,
    a_space: CoordSpace,
    b: &BBox<T>,
    b_space: CoordSpace,
) -> Result<T, GeometryError> {
    if a_space != b_space {
        return Err(GeometryError::MixedSpaces(a_space, b_space));
    }
    Ok(iou(a, b))
}

/// Hit test: IoU strictly greater than `threshold`.
pub fn hit<T: Scalar>(pred: &BBox<T>, gt: &BBox<T>, threshold: T) -> bool {
    iou(pred, gt) > threshold
}

/// Coordinate system a box is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CoordSpace {
    /// Absolute pixels of an image with the given dimensions.
    Pixel { width: u32, height: u32 },
    /// The 0..=999 normalized convention used by the box token format.
    Norm1000,
}

impl fmt::Display for CoordSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoordSpace::Pixel { width, height } => write!(f, "pixel({width}x{height})"),
            CoordSpace::Norm1000 => f.write_str("norm1000"),
        }
    }
}

/// On-disk tag for a coordinate space; pixel dimensions come from the
/// owning image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceTag {
    Pixel,
    Norm1000,
}

impl CoordSpace {
    pub fn pixel(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::ZeroSizedSpace { width, height });
        }
        Ok(CoordSpace::Pixel { width, height })
    }

    pub fn tag(&self) -> SpaceTag {
        match self {
            CoordSpace::Pixel { .. } => SpaceTag::Pixel,
            CoordSpace::Norm1000 => SpaceTag::Norm1000,
        }
    }

    /// Resolves a tag against the dimensions of the image it refers to.
    pub fn from_tag(tag: SpaceTag, width: u32, height: u32) -> Result<Self, GeometryError> {
        match tag {
            SpaceTag::Pixel => CoordSpace::pixel(width, height),
            SpaceTag::Norm1000 => Ok(CoordSpace::Norm1000),
        }
    }

    fn validate(&self) -> Result<(), GeometryError> {
        match *self {
            CoordSpace::Pixel { width, height } if width == 0 || height == 0 => {
                Err(GeometryError::ZeroSizedSpace { width, height })
            }
            _ => Ok(()),
        }
    }

    /// Units per coordinate along (x, y), i.e. the scale denominators.
    fn extent(&self) -> (f64, f64) {
        match *self {
            CoordSpace::Pixel { width, height } => (width as f64, height as f64),
            CoordSpace::Norm1000 => (NORM1000_DIVISOR, NORM1000_DIVISOR),
        }
    }
}

/// Linear rescale of a box between coordinate spaces.
pub fn convert<T: Scalar>(b: &BBox<T>, from: CoordSpace, to: CoordSpace) -> Result<BBox<T>, GeometryError> {
    from.validate()?;
    to.validate()?;
    if from == to {
        return Ok(*b);
    }
    let (fx, fy) = from.extent();
    let (tx, ty) = to.extent();
    let scale = |v: T, num: f64, den: f64| -> Result<T, GeometryError> {
        let x = v.to_f64().ok_or(GeometryError::NonFinite)?;
        let out = x * num / den;
        T::from_f64(out).ok_or(GeometryError::Unrepresentable(out))
    };
    Ok(BBox { x1: scale(b.x1, tx, fx)?, y1: scale(b.y1, ty, fy)?, x2: scale(b.x2, tx, fx)?, y2: scale(b.y2, ty, fy)? })
}

/// A box located in one image of an instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region<T = f64> {
    pub image_index: usize,
    pub bbox: BBox<T>,
    pub space: CoordSpace,
}

impl<T: Scalar> Region<T> {
    pub fn to_space(&self, to: CoordSpace) -> Result<Self, GeometryError> {
        Ok(Region { image_index: self.image_index, bbox: convert(&self.bbox, self.space, to)?, space: to })
    }

    pub fn iou(&self, other: &Self) -> Result<T, GeometryError> {
        iou_in(&self.bbox, self.space, &other.bbox, other.space)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    type R = Ratio<i64>;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Unit-cell rasterization: counts integer cells covered by the
    /// intersection and union. Independent of the closed form.
    fn raster_iou(a: [i64; 4], c: [i64; 4]) -> R {
        let inside = |r: [i64; 4], x: i64, y: i64| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
        let (mut inter, mut union) = (0i64, 0i64);
        let hi = a[2].max(a[3]).max(c[2]).max(c[3]);
        for x in 0..hi {
            for y in 0..hi {
                let (ia, ic) = (inside(a, x, y), inside(c, x, y));
                inter += (ia && ic) as i64;
                union += (ia || ic) as i64;
            }
        }
        if union == 0 {
            R::from_integer(0)
        } else {
            R::new(inter, union)
        }
    }

    #[test]
    fn identical_boxes_have_unit_iou() {
        assert_eq!(iou(&b(10., 10., 20., 20.), &b(10., 10., 20., 20.)), 1.0);
    }

    #[test]
    fn disjoint_boxes_have_zero_iou() {
        assert_eq!(iou(&b(0., 0., 10., 10.), &b(20., 20., 30., 30.)), 0.0);
    }

    #[test]
    fn half_offset_squares_match_raster_oracle() {
        let oracle = raster_iou([0, 0, 10, 10], [5, 5, 15, 15]);
        assert_eq!(oracle, R::new(1, 7));
        let exact = iou(
            &BBox::<R>::from([0, 0, 10, 10].map(R::from_integer)),
            &BBox::from([5, 5, 15, 15].map(R::from_integer)),
        );
        assert_eq!(exact, oracle);
        assert!((iou(&b(0., 0., 10., 10.), &b(5., 5., 15., 15.)) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_boxes_score_zero() {
        let p = b(3., 3., 3., 3.);
        assert_eq!(iou(&p, &p), 0.0);
        assert_eq!(iou(&p, &b(0., 0., 10., 10.)), 0.0);
    }

    #[test]
    fn hit_is_strict() {
        // (0,0,10,10) vs (0,0,10,5): iou = 50/100
        let gt = b(0., 0., 10., 10.);
        let pred = b(0., 0., 10., 5.);
        assert_eq!(iou(&pred, &gt), 0.5);
        assert!(!hit(&pred, &gt, 0.5));
        assert!(hit(&gt, &gt, 0.5));
        assert!(hit(&b(0., 0., 10., 10.), &b(5., 5., 15., 15.), 0.1));
    }

    #[test]
    fn mixed_spaces_are_rejected() {
        let err = iou_in(
            &b(0., 0., 1., 1.),
            CoordSpace::Norm1000,
            &b(0., 0., 1., 1.),
            CoordSpace::Pixel { width: 10, height: 10 },
        );
        assert!(matches!(err, Err(GeometryError::MixedSpaces(..))));
    }

    #[test]
    fn constructor_rejects_swapped_and_nan() {
        assert!(matches!(BBox::new(5.0, 0.0, 1.0, 1.0), Err(GeometryError::NotCanonical { .. })));
        assert_eq!(BBox::new(f64::NAN, 0.0, 1.0, 1.0), Err(GeometryError::NonFinite));
        let (c, swapped) = BBox::canonicalize(5.0, 8.0, 1.0, 2.0).unwrap();
        assert!(swapped);
        assert_eq!(c, b(1., 2., 5., 8.));
    }

    #[test]
    fn conversion_examples() {
        let px = |w, h| CoordSpace::pixel(w, h).unwrap();
        let full = convert(&b(0., 0., 999., 999.), CoordSpace::Norm1000, px(1000, 1000)).unwrap();
        assert_eq!(full, b(0., 0., 999., 999.));
        let mid = convert(&b(500., 500., 500., 500.), CoordSpace::Norm1000, px(640, 480)).unwrap();
        assert_eq!(mid, b(320., 240., 320., 240.));
        let n = convert(&b(100., 200., 300., 400.), px(2000, 1000), CoordSpace::Norm1000).unwrap();
        assert_eq!(n, b(50., 200., 150., 400.));
    }

    #[test]
    fn zero_sized_pixel_space_is_an_error() {
        let bad = CoordSpace::Pixel { width: 0, height: 10 };
        assert!(matches!(
            convert(&b(0., 0., 1., 1.), bad, CoordSpace::Norm1000),
            Err(GeometryError::ZeroSizedSpace { .. })
        ));
        assert!(CoordSpace::pixel(4, 0).is_err());
    }

    #[test]
    fn f32_path_agrees() {
        let a = BBox::<f32>::new(0., 0., 10., 10.).unwrap();
        let c = BBox::<f32>::new(5., 5., 15., 15.).unwrap();
        assert!((iou(&a, &c) - 1.0 / 7.0).abs() < 1e-6);
    }

    fn int_box(max: i64) -> impl Strategy<Value = [i64; 4]> {
        (0..=max, 0..=max, 0..=max, 0..=max).prop_map(|(a, b, c, d)| [a.min(c), b.min(d), a.max(c), b.max(d)])
    }

    proptest! {
        #[test]
        fn closed_form_matches_raster(a in int_box(24), c in int_box(24)) {
            let ra = BBox::<R>::from(a.map(R::from_integer));
            let rc = BBox::<R>::from(c.map(R::from_integer));
            prop_assert_eq!(iou(&ra, &rc), raster_iou(a, c));
        }

        #[test]
        fn iou_symmetric_and_bounded(a in int_box(5000), c in int_box(5000)) {
            let fa = BBox::<f64>::from(a.map(|v| v as f64));
            let fc = BBox::<f64>::from(c.map(|v| v as f64));
            let x = iou(&fa, &fc);
            prop_assert_eq!(x, iou(&fc, &fa));
            prop_assert!((0.0..=1.0).contains(&x));
            if fa.area() > 0.0 {
                prop_assert_eq!(iou(&fa, &fa), 1.0);
            }
        }

        #[test]
        fn approaching_never_decreases_iou(a in int_box(40), c in int_box(40), shift in 1i64..20) {
            // Move c left by `shift` and then step it back toward a one
            // unit at a time; IoU must be non-decreasing while the gap closes.
            let ra = BBox::<R>::from(a.map(R::from_integer));
            let cx = (c[0] + c[2]) as f64 / 2.0;
            let ax = (a[0] + a[2]) as f64 / 2.0;
            let dir = if cx <= ax { -1 } else { 1 };
            let start = [c[0] + dir * shift, c[1], c[2] + dir * shift, c[3]];
            let mut prev = R::from_integer(-1);
            for step in 0..=shift {
                let cur = [start[0] - dir * step, start[1], start[2] - dir * step, start[3]];
                let v = iou(&ra, &BBox::from(cur.map(R::from_integer)));
                prop_assert!(v >= prev, "iou dropped from {:?} to {:?}", prev, v);
                prop_assert_eq!(v, raster_iou_shifted(a, cur));
                prev = v;
            }
        }

        #[test]
        fn conversion_round_trips(
            x in 0.0f64..999.0, y in 0.0f64..999.0, w in 0.0f64..500.0, h in 0.0f64..500.0,
            pw in 1u32..8000, ph in 1u32..8000,
        ) {
            let n = BBox::new(x, y, x + w, y + h).unwrap();
            let px = CoordSpace::pixel(pw, ph).unwrap();
            let back = convert(&convert(&n, CoordSpace::Norm1000, px).unwrap(), px, CoordSpace::Norm1000).unwrap();
            for (u, v) in <[f64; 4]>::from(n).iter().zip(<[f64; 4]>::from(back).iter()) {
                let ulp = f64::EPSILON * u.abs().max(1.0);
                prop_assert!((u - v).abs() <= ulp, "{} vs {}", u, v);
            }
        }
    }

    // Shifted boxes may go negative; offset everything into the raster window.
    fn raster_iou_shifted(a: [i64; 4], c: [i64; 4]) -> R {
        let off = -a[0].min(a[1]).min(c[0]).min(c[1]).min(0);
        raster_iou(a.map(|v| v + off), c.map(|v| v + off))
    }
}
