//! Shared geometric types and pinhole projection primitives.
//!
//! Conventions used throughout the crate:
//!
//! * Camera coordinates: x right, y down, z forward (optical axis). Units
//!   are meters.
//! * Image coordinates: pixels, origin at the top-left, x right, y down.
//! * The ground-plane normal points from the ground toward the camera side,
//!   so the camera sits at a positive height along the normal and a person
//!   of height `h` has their shoulder at `ankle + h * n`.
//! * Plane coordinates are right-handed with the plane normal as the third
//!   axis; 2D plane points are the first two coordinates.
//! * Angles are radians everywhere inside the library; degrees appear only
//!   at CLI boundaries.

use nalgebra::{Matrix3, Point2, Point3, Rotation3, Unit, Vector2, Vector3};
use serde::{Deserialize, Serialize};

/// A 2D detection location in pixels. May fall outside the frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagePoint {
    pub x: f64,
    pub y: f64,
}

impl ImagePoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn coords(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn distance(&self, other: &ImagePoint) -> f64 {
        (self.coords() - other.coords()).norm()
    }
}

/// Point in camera coordinates (meters).
pub type CamPoint = Point3<f64>;
/// Point in the shared world frame (meters).
pub type WorldPoint = Point3<f64>;
/// Point in ground-plane coordinates (meters); third coordinate is along
/// the plane normal and is zero for points on the plane.
pub type PlanePoint = Point3<f64>;
/// On-plane point reduced to its two in-plane coordinates.
pub type PlanePoint2 = Point2<f64>;

/// Pinhole intrinsics with a single shared focal length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    /// Focal length in pixels (> 0), shared by both axes.
    pub f: f64,
    /// Principal point x, pixels.
    pub o1: f64,
    /// Principal point y, pixels.
    pub o2: f64,
}

impl CameraIntrinsics {
    pub fn new(f: f64, o1: f64, o2: f64) -> Result<Self, GeometryError> {
        if !(f.is_finite() && f > 0.0 && o1.is_finite() && o2.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics { f, o1, o2 });
        }
        Ok(Self { f, o1, o2 })
    }

    /// Principal point fixed to the image center.
    pub fn centered(f: f64, width: f64, height: f64) -> Result<Self, GeometryError> {
        Self::new(f, width / 2.0, height / 2.0)
    }

    /// Direction in camera coordinates of the ray through pixel `p`
    /// (not normalized; z component is 1).
    pub fn ray_direction(&self, p: &ImagePoint) -> Vector3<f64> {
        Vector3::new((p.x - self.o1) / self.f, (p.y - self.o2) / self.f, 1.0)
    }
}

/// Ground plane expressed relative to one camera: unit normal, the
/// camera-to-plane rotation, and the plane-origin translation so that
/// `p_plane = rot_cam_to_plane * p_cam + t_plane`.
///
/// The third row of `rot_cam_to_plane` equals the normal (the plane's up
/// axis); the origin is the backprojection of the image center onto the
/// plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundPlaneFrame {
    pub normal: Unit<Vector3<f64>>,
    pub rot_cam_to_plane: Rotation3<f64>,
    pub t_plane: Vector3<f64>,
}

impl GroundPlaneFrame {
    pub fn cam_to_plane(&self, p: &CamPoint) -> PlanePoint {
        self.rot_cam_to_plane * p + self.t_plane
    }

    pub fn plane_to_cam(&self, p: &PlanePoint) -> CamPoint {
        self.rot_cam_to_plane.inverse() * (p - self.t_plane)
    }

    /// Height of the camera center above the plane (meters, positive).
    pub fn camera_height(&self) -> f64 {
        self.cam_to_plane(&Point3::origin()).z
    }

    /// Plane equation offset `c` such that on-plane camera points satisfy
    /// `normal . p_cam = c` (negative of the camera height).
    pub fn plane_offset(&self) -> f64 {
        -self.camera_height()
    }
}

/// In-plane rigid transform: rotation by `angle` about the plane normal
/// followed by a 2D translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform2D {
    /// Radians in [0, 2π).
    pub angle: f64,
    pub translation: Vector2<f64>,
}

impl RigidTransform2D {
    pub fn new(angle: f64, translation: Vector2<f64>) -> Self {
        Self {
            angle: angle.rem_euclid(std::f64::consts::TAU),
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(0.0, Vector2::zeros())
    }

    pub fn apply(&self, p: &PlanePoint2) -> PlanePoint2 {
        let (s, c) = self.angle.sin_cos();
        Point2::new(
            c * p.x - s * p.y + self.translation.x,
            s * p.x + c * p.y + self.translation.y,
        )
    }

    pub fn inverse(&self) -> Self {
        let (s, c) = self.angle.sin_cos();
        let tx = -(c * self.translation.x + s * self.translation.y);
        let ty = -(-s * self.translation.x + c * self.translation.y);
        Self::new(-self.angle, Vector2::new(tx, ty))
    }
}

/// Camera pose in a world frame: `p_cam = rot_world_to_cam * (p_world - position)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraExtrinsics {
    pub rot_world_to_cam: Rotation3<f64>,
    /// Camera center in world coordinates (meters).
    pub position: Point3<f64>,
}

impl CameraExtrinsics {
    pub fn identity() -> Self {
        Self {
            rot_world_to_cam: Rotation3::identity(),
            position: Point3::origin(),
        }
    }

    pub fn world_to_cam(&self, p: &WorldPoint) -> CamPoint {
        self.rot_world_to_cam * (p - self.position.coords)
    }

    pub fn cam_to_world(&self, p: &CamPoint) -> WorldPoint {
        self.rot_world_to_cam.inverse() * p + self.position.coords
    }

    /// Classic `[R | T]` translation with `p_cam = R p_world + T`.
    pub fn translation(&self) -> Vector3<f64> {
        -(self.rot_world_to_cam * self.position.coords)
    }

    /// Pose of `self` expressed in `reference`'s camera frame:
    /// the transform taking this camera's coordinates into the reference
    /// camera's coordinates becomes the new world-from-cam map.
    pub fn relative_to(&self, reference: &CameraExtrinsics) -> CameraExtrinsics {
        // In the new world (the reference camera frame):
        // p_self = R_self (R_refᵀ p + c_ref - c_self) = (R_self R_refᵀ)(p - R_ref (c_self - c_ref)).
        CameraExtrinsics {
            rot_world_to_cam: self.rot_world_to_cam * reference.rot_world_to_cam.inverse(),
            position: reference.world_to_cam(&self.position),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("point depth {0} is not positive")]
    NonPositiveDepth(f64),
    #[error("viewing ray is parallel to the ground plane")]
    RayParallelToPlane,
    #[error("viewing ray meets the plane behind the camera")]
    PlaneBehindCamera,
    #[error("image-horizontal direction is parallel to the plane normal")]
    DegenerateBasis,
    #[error("invalid intrinsics f={f} o=({o1}, {o2})")]
    InvalidIntrinsics { f: f64, o1: f64, o2: f64 },
}

const DEPTH_EPS: f64 = 1e-12;
const RAY_EPS: f64 = 1e-9;
const BASIS_EPS: f64 = 1e-6;

/// Project a camera-space point to pixels: `(f x / z + o1, f y / z + o2)`.
pub fn project(p: &CamPoint, k: &CameraIntrinsics) -> Result<ImagePoint, GeometryError> {
    if p.z <= DEPTH_EPS {
        return Err(GeometryError::NonPositiveDepth(p.z));
    }
    Ok(ImagePoint::new(
        k.f * p.x / p.z + k.o1,
        k.f * p.y / p.z + k.o2,
    ))
}

/// Backproject a pixel to the camera-space point at the given depth.
pub fn backproject_to_depth(
    p: &ImagePoint,
    k: &CameraIntrinsics,
    depth: f64,
) -> Result<CamPoint, GeometryError> {
    if depth <= DEPTH_EPS {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    Ok(Point3::from(k.ray_direction(p) * depth))
}

/// Intersect the viewing ray through pixel `p` with the plane
/// `normal . x = c` (camera coordinates). `c` is negative for a ground
/// plane below the camera under this crate's sign convention.
pub fn intersect_ray_with_plane(
    p: &ImagePoint,
    k: &CameraIntrinsics,
    normal: &Unit<Vector3<f64>>,
    c: f64,
) -> Result<CamPoint, GeometryError> {
    let dir = k.ray_direction(p).normalize();
    let denom = normal.dot(&dir);
    if denom.abs() <= RAY_EPS {
        return Err(GeometryError::RayParallelToPlane);
    }
    let s = c / denom;
    if s <= 0.0 {
        return Err(GeometryError::PlaneBehindCamera);
    }
    Ok(Point3::from(dir * s))
}

/// Backproject a pixel onto the ground plane and express the hit in plane
/// coordinates. The third coordinate of the result is zero up to round-off.
pub fn backproject_to_plane(
    p: &ImagePoint,
    k: &CameraIntrinsics,
    plane: &GroundPlaneFrame,
) -> Result<PlanePoint, GeometryError> {
    let hit = intersect_ray_with_plane(p, k, &plane.normal, plane.plane_offset())?;
    Ok(plane.cam_to_plane(&hit))
}

/// Build the ground-plane coordinate frame from a unit normal and the
/// camera height above the plane.
///
/// The in-plane x axis is the image-horizontal direction projected onto the
/// plane, the second axis is `normal × x`, and the third axis is the normal
/// itself. The origin is the backprojection of the image center.
pub fn plane_basis_from_normal(
    normal: &Unit<Vector3<f64>>,
    k: &CameraIntrinsics,
    camera_height: f64,
) -> Result<GroundPlaneFrame, GeometryError> {
    let horiz = Vector3::new(1.0, 0.0, 0.0);
    if normal.cross(&horiz).norm() < BASIS_EPS {
        return Err(GeometryError::DegenerateBasis);
    }
    let x_axis = (horiz - normal.as_ref() * normal.dot(&horiz)).normalize();
    let y_axis = normal.cross(&x_axis);
    // Rows of the cam→plane rotation are the plane basis vectors.
    let rot = Rotation3::from_matrix_unchecked(Matrix3::from_rows(&[
        x_axis.transpose(),
        y_axis.transpose(),
        normal.transpose(),
    ]));

    let center = ImagePoint::new(k.o1, k.o2);
    // Image-center backprojection; when the optical axis runs parallel to
    // the plane (or hits it behind the camera) fall back to the foot point
    // directly below the camera.
    let origin = match intersect_ray_with_plane(&center, k, normal, -camera_height) {
        Ok(p) => p,
        Err(GeometryError::RayParallelToPlane | GeometryError::PlaneBehindCamera) => {
            Point3::from(normal.as_ref() * -camera_height)
        }
        Err(other) => return Err(other),
    };
    let t_plane = -(rot * origin.coords);
    Ok(GroundPlaneFrame {
        normal: *normal,
        rot_cam_to_plane: rot,
        t_plane,
    })
}

/// Frobenius norm of `R Rᵀ - I`; zero for a perfect rotation.
pub fn orthonormality_residual(r: &Rotation3<f64>) -> f64 {
    let m = r.matrix();
    (m * m.transpose() - Matrix3::identity()).norm()
}

/// Re-project an approximate rotation matrix onto SO(3) via SVD.
pub fn orthonormalize(m: &Matrix3<f64>) -> Rotation3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd of 3x3 always yields u");
    let vt = svd.v_t.expect("svd of 3x3 always yields v_t");
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u_fixed = u;
        u_fixed.column_mut(2).neg_mut();
        r = u_fixed * vt;
    }
    Rotation3::from_matrix_unchecked(r)
}
