//! Skeleton enumeration and per-person 2D detections.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::geometry::ImagePoint;

/// Fixed skeleton joint set. Detection files may carry any subset per pose,
/// but the eight core joints (ankles, knees, hips, shoulders on both sides)
/// are required for calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Joint {
    LeftAnkle,
    RightAnkle,
    LeftKnee,
    RightKnee,
    LeftHip,
    RightHip,
    LeftShoulder,
    RightShoulder,
    Neck,
    Head,
    LeftElbow,
    RightElbow,
    LeftWrist,
    RightWrist,
}

impl Joint {
    pub const CORE: [Joint; 8] = [
        Joint::LeftAnkle,
        Joint::RightAnkle,
        Joint::LeftKnee,
        Joint::RightKnee,
        Joint::LeftHip,
        Joint::RightHip,
        Joint::LeftShoulder,
        Joint::RightShoulder,
    ];

    /// Head and arm keypoints move too freely to constrain the cameras;
    /// the joint refinement stage drops them.
    pub fn excluded_from_refinement(&self) -> bool {
        matches!(
            self,
            Joint::Head
                | Joint::LeftElbow
                | Joint::RightElbow
                | Joint::LeftWrist
                | Joint::RightWrist
        )
    }
}

impl fmt::Display for Joint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_string(self).expect("joint serializes");
        write!(f, "{}", s.trim_matches('"'))
    }
}

/// One joint observation: pixel location plus detector confidence in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointObs {
    pub point: ImagePoint,
    pub confidence: f64,
}

impl Serialize for JointObs {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.point.x, self.point.y, self.confidence].serialize(s)
    }
}

impl<'de> Deserialize<'de> for JointObs {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [x, y, confidence] = <[f64; 3]>::deserialize(d)?;
        Ok(JointObs {
            point: ImagePoint::new(x, y),
            confidence,
        })
    }
}

/// All 2D keypoints of one person in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseDetection {
    /// Track identifier, stable across the frames of one camera.
    pub person_id: u32,
    pub joints: BTreeMap<Joint, JointObs>,
}

impl PoseDetection {
    pub fn point(&self, joint: Joint) -> Option<ImagePoint> {
        self.joints.get(&joint).map(|o| o.point)
    }

    pub fn has_core_joints(&self) -> bool {
        Joint::CORE.iter().all(|j| self.joints.contains_key(j))
    }

    /// Midpoint of the left/right joint pair, if both are present.
    pub fn midpoint(&self, left: Joint, right: Joint) -> Option<ImagePoint> {
        let l = self.point(left)?;
        let r = self.point(right)?;
        Some(ImagePoint::new((l.x + r.x) / 2.0, (l.y + r.y) / 2.0))
    }

    pub fn ankle_center(&self) -> Option<ImagePoint> {
        self.midpoint(Joint::LeftAnkle, Joint::RightAnkle)
    }

    pub fn shoulder_center(&self) -> Option<ImagePoint> {
        self.midpoint(Joint::LeftShoulder, Joint::RightShoulder)
    }

    pub fn mean_confidence(&self) -> f64 {
        if self.joints.is_empty() {
            return 0.0;
        }
        self.joints.values().map(|o| o.confidence).sum::<f64>() / self.joints.len() as f64
    }
}

/// Detections of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub index: i64,
    pub poses: Vec<PoseDetection>,
}

/// All frames of detections for one camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSequence {
    pub version: u32,
    pub camera_id: String,
    /// Image width in pixels.
    pub width: f64,
    /// Image height in pixels.
    pub height: f64,
    /// Frames per second.
    pub frame_rate: f64,
    pub frames: Vec<Frame>,
}

impl CameraSequence {
    pub const SCHEMA_VERSION: u32 = 1;

    pub fn image_center(&self) -> ImagePoint {
        ImagePoint::new(self.width / 2.0, self.height / 2.0)
    }
}
