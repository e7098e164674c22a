//! Boxes, overlap, box-derived geometric features, and the 14-joint pose.
//!
//! Coordinates are continuous pixels: a box covers `[x1, x2] x [y1, y2]` and
//! its area is `(x2 - x1) * (y2 - y1)` with no `+1` pixel convention.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in corner form, `(x1, y1)` top-left and `(x2, y2)`
/// bottom-right. Width and height are strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl TryFrom<RawBox> for BoundingBox {
    type Error = Error;

    fn try_from(raw: RawBox) -> Result<Self> {
        BoundingBox::new(raw.x1, raw.y1, raw.x2, raw.y2)
    }
}

impl From<BoundingBox> for RawBox {
    fn from(b: BoundingBox) -> Self {
        RawBox { x1: b.x1, y1: b.y1, x2: b.x2, y2: b.y2 }
    }
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x2 <= x1 || y2 <= y1 {
            return Err(Error::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Box with the given center and extents.
    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Result<Self> {
        Self::new(cx - width / 2.0, cy - height / 2.0, cx + width / 2.0, cy + height / 2.0)
    }

    #[inline]
    pub fn x1(&self) -> f64 {
        self.x1
    }

    #[inline]
    pub fn y1(&self) -> f64 {
        self.y1
    }

    #[inline]
    pub fn x2(&self) -> f64 {
        self.x2
    }

    #[inline]
    pub fn y2(&self) -> f64 {
        self.y2
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point {
        Point::new((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    /// Scales every coordinate by `s` about the origin.
    pub fn scale(&self, s: f64) -> Result<Self> {
        Self::new(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        other.x1 >= self.x1 && other.x2 <= self.x2 && other.y1 >= self.y1 && other.y2 <= self.y2
    }
}

/// Intersection over union with continuous areas. Symmetric, in `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Displacement of a box center from a joint: `center - joint`.
#[inline]
pub fn offset(center: Point, joint: Point) -> [f64; 2] {
    [center.x - joint.x, center.y - joint.y]
}

/// Box center, log aspect ratio and log half-perimeter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricFeatures {
    pub lx: f64,
    pub ly: f64,
    /// `ln(height / width)`
    pub a: f64,
    /// `ln(height + width)`
    pub r: f64,
}

impl GeometricFeatures {
    pub fn center(&self) -> Point {
        Point::new(self.lx, self.ly)
    }
}

pub fn geometric_features(b: &BoundingBox) -> GeometricFeatures {
    let w = b.width();
    let h = b.height();
    GeometricFeatures {
        lx: (b.x1 + b.x2) / 2.0,
        ly: (b.y1 + b.y2) / 2.0,
        a: (h / w).ln(),
        r: (h + w).ln(),
    }
}

pub const NUM_JOINTS: usize = 14;

/// The canonical body joints, in index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Joint {
    Head,
    Neck,
    LeftShoulder,
    RightShoulder,
    LeftElbow,
    RightElbow,
    LeftWrist,
    RightWrist,
    LeftHip,
    RightHip,
    LeftKnee,
    RightKnee,
    LeftFoot,
    RightFoot,
}

impl Joint {
    pub const ALL: [Joint; NUM_JOINTS] = [
        Joint::Head,
        Joint::Neck,
        Joint::LeftShoulder,
        Joint::RightShoulder,
        Joint::LeftElbow,
        Joint::RightElbow,
        Joint::LeftWrist,
        Joint::RightWrist,
        Joint::LeftHip,
        Joint::RightHip,
        Joint::LeftKnee,
        Joint::RightKnee,
        Joint::LeftFoot,
        Joint::RightFoot,
    ];

    pub const NAMES: [&'static str; NUM_JOINTS] = [
        "head",
        "neck",
        "left_shoulder",
        "right_shoulder",
        "left_elbow",
        "right_elbow",
        "left_wrist",
        "right_wrist",
        "left_hip",
        "right_hip",
        "left_knee",
        "right_knee",
        "left_foot",
        "right_foot",
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Joint> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        Self::NAMES[self.index()]
    }
}

impl fmt::Display for Joint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Joint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::NAMES
            .iter()
            .position(|n| *n == s)
            .map(|i| Self::ALL[i])
            .ok_or_else(|| Error::UnknownJoint(s.to_string()))
    }
}

impl Serialize for Joint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Joint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// 2-D joint locations for one person, with a visibility flag per joint.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    joints: [Point; NUM_JOINTS],
    visible: [bool; NUM_JOINTS],
}

impl Pose {
    pub fn new(joints: [Point; NUM_JOINTS]) -> Result<Self> {
        Self::with_visibility(joints, [true; NUM_JOINTS])
    }

    pub fn with_visibility(joints: [Point; NUM_JOINTS], visible: [bool; NUM_JOINTS]) -> Result<Self> {
        if joints.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFiniteInput("pose joint coordinates"));
        }
        Ok(Self { joints, visible })
    }

    /// The joint location, or `None` when the joint is flagged invisible.
    pub fn joint(&self, j: Joint) -> Option<Point> {
        self.visible[j.index()].then(|| self.joints[j.index()])
    }

    pub fn location(&self, j: Joint) -> Point {
        self.joints[j.index()]
    }

    pub fn is_visible(&self, j: Joint) -> bool {
        self.visible[j.index()]
    }

    pub fn joints(&self) -> &[Point; NUM_JOINTS] {
        &self.joints
    }

    pub fn visibility(&self) -> &[bool; NUM_JOINTS] {
        &self.visible
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        let mut joints = self.joints;
        for p in &mut joints {
            p.x += dx;
            p.y += dy;
        }
        Self { joints, visible: self.visible }
    }
}

/// One item class of the configured class set. Background is not a class.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassLabel {
    pub id: u32,
    pub name: String,
}

impl ClassLabel {
    pub fn new(id: u32, name: impl Into<String>) -> Self {
        Self { id, name: name.into() }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// A class-agnostic candidate box, identified within its image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub id: u64,
    #[serde(flatten)]
    pub bbox: BoundingBox,
}

/// A ground-truth box with its class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub class: ClassLabel,
    pub bbox: BoundingBox,
}
