//! Axis-aligned boxes, anchors, the anchor-relative target encoding, and IoU.
//!
//! Boxes are stored center-size because the target encoding is
//! center-based; corner accessors exist for overlap computations.
//! All geometry here is pure and total on validly constructed inputs.

use std::fmt;

/// Sides at or below this are rejected at construction: the target
/// encoding divides by anchor dimensions, so degenerate boxes would
/// poison every downstream quantity.
pub const MIN_SIDE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum BoxError {
    /// A coordinate or side was NaN or infinite.
    NonFinite { field: &'static str, value: f64 },
    /// A width or height was at or below [`MIN_SIDE`].
    DegenerateSide { field: &'static str, value: f64 },
}

impl fmt::Display for BoxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoxError::NonFinite { field, value } => {
                write!(f, "box field `{field}` must be finite, got {value}")
            }
            BoxError::DegenerateSide { field, value } => {
                write!(f, "box side `{field}` must exceed {MIN_SIDE}, got {value}")
            }
        }
    }
}

impl std::error::Error for BoxError {}

fn validate(cx: f64, cy: f64, w: f64, h: f64) -> Result<(), BoxError> {
    for (field, value) in [("cx", cx), ("cy", cy), ("w", w), ("h", h)] {
        if !value.is_finite() {
            return Err(BoxError::NonFinite { field, value });
        }
    }
    for (field, value) in [("w", w), ("h", h)] {
        if value <= MIN_SIDE {
            return Err(BoxError::DegenerateSide { field, value });
        }
    }
    Ok(())
}

/// An axis-aligned box in pixel space, center-size form.
///
/// Invariants: all fields finite, `w > 0`, `h > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, BoxError> {
        validate(cx, cy, w, h)?;
        Ok(Self { cx, cy, w, h })
    }

    /// Skips validation. Callers must uphold the type invariants or
    /// accept that downstream geometry may return non-finite values.
    pub fn new_unchecked(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn x_min(&self) -> f64 {
        self.cx - 0.5 * self.w
    }

    pub fn x_max(&self) -> f64 {
        self.cx + 0.5 * self.w
    }

    pub fn y_min(&self) -> f64 {
        self.cy - 0.5 * self.h
    }

    pub fn y_max(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// True when every field is finite and both sides exceed [`MIN_SIDE`].
    /// Decoded boxes from extreme targets can fail this; evaluation code
    /// treats such boxes as misses rather than panicking.
    pub fn is_valid(&self) -> bool {
        validate(self.cx, self.cy, self.w, self.h).is_ok()
    }
}

/// A reference box that predictions are encoded against.
///
/// Same invariants as [`BoundingBox`]; kept as a distinct type so
/// signatures say which box plays which role.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl Anchor {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, BoxError> {
        validate(cx, cy, w, h)?;
        Ok(Self { cx, cy, w, h })
    }

    pub fn new_unchecked(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn as_box(&self) -> BoundingBox {
        BoundingBox {
            cx: self.cx,
            cy: self.cy,
            w: self.w,
            h: self.h,
        }
    }
}

/// The anchor-relative regression 4-vector: normalized center offsets
/// and log size ratios.
///
/// Invariant: all fields finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionTarget {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl RegressionTarget {
    pub fn new(tx: f64, ty: f64, tw: f64, th: f64) -> Result<Self, BoxError> {
        for (field, value) in [("tx", tx), ("ty", ty), ("tw", tw), ("th", th)] {
            if !value.is_finite() {
                return Err(BoxError::NonFinite { field, value });
            }
        }
        Ok(Self { tx, ty, tw, th })
    }

    pub fn zero() -> Self {
        Self {
            tx: 0.0,
            ty: 0.0,
            tw: 0.0,
            th: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self {
            tx: v[0],
            ty: v[1],
            tw: v[2],
            th: v[3],
        }
    }
}

/// Encodes a box against an anchor: center offsets normalized by anchor
/// size, sizes as log ratios.
///
/// Total on valid inputs; validity of both arguments is structural, so
/// no error path remains here.
pub fn encode(b: &BoundingBox, anchor: &Anchor) -> RegressionTarget {
    RegressionTarget {
        tx: (b.cx - anchor.cx) / anchor.w,
        ty: (b.cy - anchor.cy) / anchor.h,
        tw: (b.w / anchor.w).ln(),
        th: (b.h / anchor.h).ln(),
    }
}

/// Exact algebraic inverse of [`encode`].
///
/// Total on finite targets. Extreme log-ratios can overflow `exp` and
/// yield a box that fails [`BoundingBox::is_valid`]; callers that decode
/// untrusted predictions must check validity.
pub fn decode(t: &RegressionTarget, anchor: &Anchor) -> BoundingBox {
    BoundingBox {
        cx: t.tx * anchor.w + anchor.cx,
        cy: t.ty * anchor.h + anchor.cy,
        w: anchor.w * t.tw.exp(),
        h: anchor.h * t.th.exp(),
    }
}

/// Intersection area over union area, in `[0, 1]`.
///
/// Disjoint boxes give exactly 0; identical boxes give exactly 1.
/// No epsilon smoothing: smoothing belongs to losses, not geometry.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x_max().min(b.x_max()) - a.x_min().max(b.x_min())).max(0.0);
    let iy = (a.y_max().min(b.y_max()) - a.y_min().max(b.y_min())).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter / union
}
