//! Pinhole projection of body landmarks and recovery of user orientation
//! and distance from the projected eye/shoulder configuration.
//!
//! Camera frame: X right, Y up, Z along the optical axis. Pixel coordinates
//! follow the same handedness, so pixel `v` grows upward and a landmark
//! "above" another has the larger `v`.
//!
//! Landmark index 0 is the user's right side (image left for a user facing
//! the camera), index 1 the user's left side.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("landmark is on or behind the camera plane (z = {0})")]
    BehindCamera(f64),
    #[error("degenerate projection: {0}")]
    DegenerateProjection(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    /// Focal length in pixels.
    pub focal_px: f64,
    pub width: u32,
    pub height: u32,
    pub cx: f64,
    pub cy: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            focal_px: 800.0,
            width: 1280,
            height: 960,
            cx: 640.0,
            cy: 480.0,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.focal_px > 0.0) {
            return Err(GeometryError::InvalidParameter("focal length must be positive"));
        }
        if !(self.cx >= 0.0 && self.cx <= self.width as f64 && self.cy >= 0.0 && self.cy <= self.height as f64) {
            return Err(GeometryError::InvalidParameter("principal point outside sensor"));
        }
        Ok(())
    }

    pub fn principal(&self) -> Vector2<f64> {
        Vector2::new(self.cx, self.cy)
    }

    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.x <= self.width as f64 && px.y >= 0.0 && px.y <= self.height as f64
    }

    pub fn project_point(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if !(p.z > 0.0) {
            return Err(GeometryError::BehindCamera(p.z));
        }
        Ok(Vector2::new(
            self.focal_px * p.x / p.z + self.cx,
            self.focal_px * p.y / p.z + self.cy,
        ))
    }

    /// Horizontal bearing of a pixel, in the tangent plane (X/Z).
    pub fn bearing_tan(&self, px: &Vector2<f64>) -> f64 {
        (px.x - self.cx) / self.focal_px
    }
}

/// Per-user calibration constants, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserModelParams {
    /// Distance between the eyes.
    pub eye_span: f64,
    /// Distance between the shoulders.
    pub shoulder_span: f64,
    /// Offset between the eye plane and the shoulder plane.
    pub plane_offset: f64,
}

impl Default for UserModelParams {
    fn default() -> Self {
        Self {
            eye_span: 0.063,
            shoulder_span: 0.40,
            plane_offset: 0.08,
        }
    }
}

impl UserModelParams {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.eye_span > 0.0 && self.shoulder_span > self.eye_span) {
            return Err(GeometryError::InvalidParameter("need shoulder_span > eye_span > 0"));
        }
        if !(self.plane_offset > 0.0) {
            return Err(GeometryError::InvalidParameter("plane_offset must be positive"));
        }
        Ok(())
    }

    /// Half the difference of shoulder and eye spans.
    fn half_span_gap(&self) -> f64 {
        0.5 * (self.shoulder_span - self.eye_span)
    }
}

/// Rigid body template used to synthesize landmarks from a pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyTemplate {
    /// Vertical eye-above-shoulder offset.
    pub neck_height: f64,
    /// How far a raised wrist sits above the eye line.
    pub wrist_raise: f64,
    /// How far a resting wrist sits below the shoulders.
    pub wrist_drop: f64,
}

impl Default for BodyTemplate {
    fn default() -> Self {
        Self {
            neck_height: 0.25,
            wrist_raise: 0.12,
            wrist_drop: 0.45,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyLandmarks3D {
    pub right_eye: Vector3<f64>,
    pub left_eye: Vector3<f64>,
    pub right_shoulder: Vector3<f64>,
    pub left_shoulder: Vector3<f64>,
    pub right_wrist: Option<Vector3<f64>>,
    pub left_wrist: Option<Vector3<f64>>,
}

/// Pose of the user's head and torso in camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyPose {
    /// Midpoint between the eyes.
    pub eye_mid: Vector3<f64>,
    /// Angle between the camera X-plane and the shoulder plane.
    pub tau: f64,
    pub right_wrist_raised: bool,
    pub left_wrist_raised: bool,
}

impl BodyLandmarks3D {
    /// Builds landmarks from the rigid template. The shoulder line runs
    /// along `(sin tau, 0, cos tau)` from the user's right to left, and the
    /// user faces `(cos tau, 0, -sin tau)`.
    pub fn from_pose(user: &UserModelParams, template: &BodyTemplate, pose: &BodyPose) -> Self {
        let (s, c) = pose.tau.sin_cos();
        let along = Vector3::new(s, 0.0, c);
        let facing = Vector3::new(c, 0.0, -s);
        let up = Vector3::new(0.0, 1.0, 0.0);
        Self::from_frame(user, template, &pose.eye_mid, &along, &facing, &up, pose.right_wrist_raised, pose.left_wrist_raised)
    }

    /// Builds landmarks from an arbitrary body frame: `along` points from
    /// the user's right to left, `facing` forward out of the chest.
    #[allow(clippy::too_many_arguments)]
    pub fn from_frame(
        user: &UserModelParams,
        template: &BodyTemplate,
        eye_mid: &Vector3<f64>,
        along: &Vector3<f64>,
        facing: &Vector3<f64>,
        up: &Vector3<f64>,
        right_wrist_raised: bool,
        left_wrist_raised: bool,
    ) -> Self {
        let half_eye = 0.5 * user.eye_span;
        let half_shoulder = 0.5 * user.shoulder_span;
        let shoulder_mid = eye_mid - facing * user.plane_offset - up * template.neck_height;
        let right_shoulder = shoulder_mid - along * half_shoulder;
        let left_shoulder = shoulder_mid + along * half_shoulder;
        let wrist = |shoulder: Vector3<f64>, raised: bool| {
            if raised {
                shoulder + up * (template.neck_height + template.wrist_raise)
            } else {
                shoulder - up * template.wrist_drop
            }
        };
        Self {
            right_eye: eye_mid - along * half_eye,
            left_eye: eye_mid + along * half_eye,
            right_shoulder,
            left_shoulder,
            right_wrist: Some(wrist(right_shoulder, right_wrist_raised)),
            left_wrist: Some(wrist(left_shoulder, left_wrist_raised)),
        }
    }

    pub fn required(&self) -> [Vector3<f64>; 4] {
        [self.right_eye, self.left_eye, self.right_shoulder, self.left_shoulder]
    }

    pub fn eye_mid(&self) -> Vector3<f64> {
        0.5 * (self.right_eye + self.left_eye)
    }
}

/// Landmarks on the projection plane, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedLandmarks {
    pub right_eye: Vector2<f64>,
    pub left_eye: Vector2<f64>,
    pub right_shoulder: Vector2<f64>,
    pub left_shoulder: Vector2<f64>,
    pub right_wrist: Option<Vector2<f64>>,
    pub left_wrist: Option<Vector2<f64>>,
    /// Signed horizontal extent of the right shoulder-to-eye segment.
    pub p: f64,
    /// Signed horizontal extent of the left eye-to-shoulder segment.
    pub q: f64,
    /// Length of the eye-to-eye segment.
    pub eye_span_px: f64,
    /// In-bounds flags for right eye, left eye, right shoulder, left shoulder.
    pub in_frame: [bool; 4],
}

impl ProjectedLandmarks {
    /// Assembles landmarks from pixel positions and derives `p`, `q` and the
    /// eye span. `p` and `q` are positive for a user facing the camera.
    pub fn from_pixels(
        cam: &CameraIntrinsics,
        right_eye: Vector2<f64>,
        left_eye: Vector2<f64>,
        right_shoulder: Vector2<f64>,
        left_shoulder: Vector2<f64>,
        right_wrist: Option<Vector2<f64>>,
        left_wrist: Option<Vector2<f64>>,
    ) -> Self {
        let in_frame = [
            cam.contains(&right_eye),
            cam.contains(&left_eye),
            cam.contains(&right_shoulder),
            cam.contains(&left_shoulder),
        ];
        Self {
            right_eye,
            left_eye,
            right_shoulder,
            left_shoulder,
            right_wrist,
            left_wrist,
            p: right_eye.x - right_shoulder.x,
            q: left_shoulder.x - left_eye.x,
            eye_span_px: (left_eye - right_eye).norm(),
            in_frame,
        }
    }

    pub fn all_in_frame(&self) -> bool {
        self.in_frame.iter().all(|&b| b)
    }

    pub fn visible_count(&self) -> usize {
        self.in_frame.iter().filter(|&&b| b).count()
    }

    /// Eye midpoint, used as the user's pixel centroid.
    pub fn centroid(&self) -> Vector2<f64> {
        0.5 * (self.right_eye + self.left_eye)
    }

    /// Mean vertical pixel coordinate of the eyes.
    pub fn eye_line(&self) -> f64 {
        0.5 * (self.right_eye.y + self.left_eye.y)
    }

    /// Applies `f` to every landmark position and re-derives the measurements.
    pub fn map_points(&self, cam: &CameraIntrinsics, mut f: impl FnMut(usize, Vector2<f64>) -> Vector2<f64>) -> Self {
        Self::from_pixels(
            cam,
            f(0, self.right_eye),
            f(1, self.left_eye),
            f(2, self.right_shoulder),
            f(3, self.left_shoulder),
            self.right_wrist.map(|w| f(4, w)),
            self.left_wrist.map(|w| f(5, w)),
        )
    }

    /// Swaps the left and right labels of every landmark pair.
    pub fn mirrored(&self, cam: &CameraIntrinsics) -> Self {
        Self::from_pixels(
            cam,
            self.left_eye,
            self.right_eye,
            self.left_shoulder,
            self.right_shoulder,
            self.left_wrist,
            self.right_wrist,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    /// Orientation of the shoulder plane relative to the camera X-plane, radians.
    pub tau: f64,
    /// Depth of the eye midpoint along the optical axis, meters.
    pub distance: f64,
    /// Camera-X coordinate of the eye midpoint, meters.
    pub lateral: f64,
    /// Camera-Y coordinate of the eye midpoint, meters.
    pub elevation: f64,
    /// Horizontal bearing of the eye midpoint, radians (positive to the right).
    pub bearing: f64,
    pub confidence: f64,
}

/// Projects 3-D landmarks through the pinhole model.
pub fn project(landmarks: &BodyLandmarks3D, cam: &CameraIntrinsics) -> Result<ProjectedLandmarks, GeometryError> {
    let wrist = |w: Option<Vector3<f64>>| -> Result<Option<Vector2<f64>>, GeometryError> {
        w.map(|w| cam.project_point(&w)).transpose()
    };
    Ok(ProjectedLandmarks::from_pixels(
        cam,
        cam.project_point(&landmarks.right_eye)?,
        cam.project_point(&landmarks.left_eye)?,
        cam.project_point(&landmarks.right_shoulder)?,
        cam.project_point(&landmarks.left_shoulder)?,
        wrist(landmarks.right_wrist)?,
        wrist(landmarks.left_wrist)?,
    ))
}

/// Orientation from the ratio `p/q`.
///
/// Inverts `p/q = (a sin t + R cos t) / (a sin t - R cos t)` with
/// `a = (L_s - L_e)/2`, giving `tan t = R (p + q) / (a (p - q))`.
pub fn estimate_orientation(proj: &ProjectedLandmarks, user: &UserModelParams) -> Result<f64, GeometryError> {
    orientation_from_ratio(proj.p, proj.q, user)
}

pub fn orientation_from_ratio(p: f64, q: f64, user: &UserModelParams) -> Result<f64, GeometryError> {
    if p == 0.0 && q == 0.0 {
        return Err(GeometryError::DegenerateProjection("p and q are both zero"));
    }
    Ok((user.plane_offset * (p + q)).atan2(user.half_span_gap() * (p - q)))
}

/// Distance from the projected eye span: `D = f L_e sin(tau) / L_e'`.
pub fn estimate_distance(
    proj: &ProjectedLandmarks,
    tau: f64,
    user: &UserModelParams,
    cam: &CameraIntrinsics,
) -> Result<f64, GeometryError> {
    if !(proj.eye_span_px > 0.0) {
        return Err(GeometryError::DegenerateProjection("eyes project to a single point"));
    }
    Ok(cam.focal_px * user.eye_span * tau.sin() / proj.eye_span_px)
}

/// Depths of right eye, left eye, right shoulder, left shoulder implied by
/// orientation `tau` and eye-midpoint depth `distance`.
fn landmark_depths(tau: f64, distance: f64, user: &UserModelParams) -> [f64; 4] {
    let (s, c) = tau.sin_cos();
    let half_eye = 0.5 * user.eye_span;
    let half_shoulder = 0.5 * user.shoulder_span;
    let r = user.plane_offset;
    [
        distance - half_eye * c,
        distance + half_eye * c,
        distance + r * s - half_shoulder * c,
        distance + r * s + half_shoulder * c,
    ]
}

/// Re-projects each landmark onto the fronto-parallel plane at the eye
/// midpoint depth, using the depths implied by `(tau, distance)`. At the true
/// pose the result is the weak-perspective image for which the closed-form
/// orientation and distance relations hold exactly.
pub fn depth_normalized(
    proj: &ProjectedLandmarks,
    tau: f64,
    distance: f64,
    user: &UserModelParams,
    cam: &CameraIntrinsics,
) -> Result<ProjectedLandmarks, GeometryError> {
    let depths = landmark_depths(tau, distance, user);
    if let Some(&z) = depths.iter().find(|&&z| !(z > 0.0)) {
        return Err(GeometryError::BehindCamera(z));
    }
    let c = cam.principal();
    Ok(proj.map_points(cam, |i, px| match i {
        0..=3 => c + (px - c) * (depths[i] / distance),
        _ => px,
    }))
}

/// Exact solution from the horizontal bearings of the four landmarks.
///
/// With bearings `x_i = X_i / Z_i`, subtracting the eye pair constraints
/// gives the eye depth as a linear function of `(sin tau, cos tau)`, and the
/// shoulder pair then yields `alpha sin tau + beta cos tau = 0`.
pub fn orientation_from_bearings(
    proj: &ProjectedLandmarks,
    user: &UserModelParams,
    cam: &CameraIntrinsics,
) -> Result<(f64, f64), GeometryError> {
    let x0 = cam.bearing_tan(&proj.right_eye);
    let x1 = cam.bearing_tan(&proj.left_eye);
    let x2 = cam.bearing_tan(&proj.right_shoulder);
    let x3 = cam.bearing_tan(&proj.left_shoulder);
    let eye_gap = x1 - x0;
    if eye_gap.abs() < 1e-12 {
        return Err(GeometryError::DegenerateProjection("eyes share a bearing"));
    }
    let half_eye = 0.5 * user.eye_span;
    let half_shoulder = 0.5 * user.shoulder_span;
    let r = user.plane_offset;
    let shoulder_gap = x3 - x2;
    let alpha = 2.0 * half_shoulder - shoulder_gap * (2.0 * half_eye / eye_gap + r);
    let beta = shoulder_gap * half_eye * (x0 + x1) / eye_gap - half_shoulder * (x2 + x3);
    if alpha == 0.0 && beta == 0.0 {
        return Err(GeometryError::DegenerateProjection("bearing system is singular"));
    }
    let mut tau = (-beta).atan2(alpha);
    if tau.sin() < 0.0 {
        tau = beta.atan2(-alpha);
    }
    let (s, c) = tau.sin_cos();
    let distance = half_eye * (2.0 * s - c * (x0 + x1)) / eye_gap;
    Ok((tau, distance))
}

fn closed_form_fixed_point(
    proj: &ProjectedLandmarks,
    tau: f64,
    distance: f64,
    user: &UserModelParams,
    cam: &CameraIntrinsics,
) -> Result<(f64, f64), GeometryError> {
    let norm = depth_normalized(proj, tau, distance, user, cam)?;
    let t = estimate_orientation(&norm, user)?;
    let d = estimate_distance(&norm, t, user, cam)?;
    Ok((t - tau, d - distance))
}

const NEWTON_MAX_ITERS: usize = 30;
const NEWTON_TOL: f64 = 1e-13;

/// Full perspective estimate of the user pose.
///
/// Solves for the `(tau, D)` at which the closed-form orientation and
/// distance relations, applied to the depth-normalized landmarks, reproduce
/// themselves. Newton iterations start from the bearing solution.
pub fn estimate_pose(
    proj: &ProjectedLandmarks,
    user: &UserModelParams,
    cam: &CameraIntrinsics,
) -> Result<PoseEstimate, GeometryError> {
    let (tau, distance) = solve_pose(proj, user, cam)?;
    if !(tau > 0.0 && tau < std::f64::consts::PI && distance > 0.0 && distance.is_finite()) {
        return Err(GeometryError::DegenerateProjection("no pose in front of the camera"));
    }

    let depths = landmark_depths(tau, distance, user);
    let c = cam.principal();
    let f = cam.focal_px;
    let lateral = 0.5 * ((proj.right_eye.x - c.x) * depths[0] + (proj.left_eye.x - c.x) * depths[1]) / f;
    let elevation = 0.5 * ((proj.right_eye.y - c.y) * depths[0] + (proj.left_eye.y - c.y) * depths[1]) / f;
    Ok(PoseEstimate {
        tau,
        distance,
        lateral,
        elevation,
        bearing: lateral.atan2(distance),
        confidence: if proj.all_in_frame() { 1.0 } else { 0.0 },
    })
}

/// Runs the Newton solve from the raw closed-form seed and from the bearing
/// seed. The two relations can admit a second root for close, strongly
/// oblique poses, so converged roots are ranked by how well they reproject
/// the shoulders given the eyes.
fn solve_pose(
    proj: &ProjectedLandmarks,
    user: &UserModelParams,
    cam: &CameraIntrinsics,
) -> Result<(f64, f64), GeometryError> {
    let raw_seed = estimate_orientation(proj, user)
        .and_then(|tau| Ok((tau, estimate_distance(proj, tau, user, cam)?)));
    let mut best: Option<(f64, f64, f64)> = None;
    let mut first_err = None;
    for seed in [raw_seed, orientation_from_bearings(proj, user, cam)] {
        let seed = match seed {
            Ok(s) => s,
            Err(e) => {
                first_err.get_or_insert(e);
                continue;
            }
        };
        let Some((tau, dist, _)) = refine(proj, user, cam, seed) else {
            continue;
        };
        let score = shoulder_reprojection_error(proj, tau, dist, user, cam);
        if best.is_none_or(|b| score < b.2) {
            best = Some((tau, dist, score));
        }
    }
    match (best, first_err) {
        (Some((t, d, _)), _) => Ok((t, d)),
        (None, Some(e)) => Err(e),
        (None, None) => Err(GeometryError::DegenerateProjection("pose solve did not converge")),
    }
}

/// Squared horizontal pixel error of the shoulders predicted from the eyes
/// under pose `(tau, distance)`.
fn shoulder_reprojection_error(
    proj: &ProjectedLandmarks,
    tau: f64,
    distance: f64,
    user: &UserModelParams,
    cam: &CameraIntrinsics,
) -> f64 {
    let depths = landmark_depths(tau, distance, user);
    if depths.iter().any(|&z| !(z > 0.0)) {
        return f64::INFINITY;
    }
    let (s, c) = tau.sin_cos();
    let half_eye = 0.5 * user.eye_span;
    let half_shoulder = 0.5 * user.shoulder_span;
    let x = |px: &Vector2<f64>, z: f64| cam.bearing_tan(px) * z;
    let eye_mid_x = 0.5 * (x(&proj.right_eye, depths[0]) + half_eye * s + x(&proj.left_eye, depths[1]) - half_eye * s);
    let shoulder_x = eye_mid_x - user.plane_offset * c;
    let predicted = [
        (shoulder_x - half_shoulder * s) / depths[2],
        (shoulder_x + half_shoulder * s) / depths[3],
    ];
    let measured = [cam.bearing_tan(&proj.right_shoulder), cam.bearing_tan(&proj.left_shoulder)];
    predicted
        .iter()
        .zip(measured)
        .map(|(p, m)| (cam.focal_px * (p - m)).powi(2))
        .sum()
}

fn refine(
    proj: &ProjectedLandmarks,
    user: &UserModelParams,
    cam: &CameraIntrinsics,
    seed: (f64, f64),
) -> Option<(f64, f64, f64)> {
    let (mut tau, mut dist) = seed;
    let residual = |t: f64, d: f64| closed_form_fixed_point(proj, t, d, user, cam).ok();
    let mut r = residual(tau, dist)?;
    for _ in 0..NEWTON_MAX_ITERS {
        if r.0.abs().max(r.1.abs()) < NEWTON_TOL {
            break;
        }
        let ht = 1e-7;
        let hd = 1e-7 * dist.max(1e-3);
        let (tp, tm) = (residual(tau + ht, dist)?, residual(tau - ht, dist)?);
        let (dp, dm) = (residual(tau, dist + hd)?, residual(tau, dist - hd)?);
        let j = nalgebra::Matrix2::new(
            (tp.0 - tm.0) / (2.0 * ht),
            (dp.0 - dm.0) / (2.0 * hd),
            (tp.1 - tm.1) / (2.0 * ht),
            (dp.1 - dm.1) / (2.0 * hd),
        );
        let step = j.try_inverse()? * -Vector2::new(r.0, r.1);
        // backtrack until the residual shrinks and the pose stays in front
        let norm = r.0.abs().max(r.1.abs());
        let mut scale = 1.0;
        loop {
            let (nt, nd) = (tau + scale * step.x, dist + scale * step.y);
            if let Some(nr) = residual(nt, nd) {
                if nr.0.abs().max(nr.1.abs()) < norm {
                    tau = nt;
                    dist = nd;
                    r = nr;
                    break;
                }
            }
            scale *= 0.5;
            if scale < 1e-6 {
                return Some((tau, dist, norm));
            }
        }
    }
    (tau.is_finite() && dist.is_finite()).then_some((tau, dist, r.0.abs().max(r.1.abs())))
}

/// Deviation of `tau` from a square, frontal view.
pub fn frontal_error(tau: f64) -> f64 {
    tau - FRAC_PI_2
}
