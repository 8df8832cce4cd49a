//! C interface to the avatar engine.
//!
//! Bodies and scenes are opaque handles created and freed here. Every fallible call returns an
//! [`AvatarStatus`]; on failure `avatar_last_error` describes the problem for the calling
//! thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use avatar_core::body::{generate_test_body, load_body_asset, save_body_asset, BodyParams, BodySpec, TemplateBody};
use avatar_core::math::Vec3;
use avatar_core::canonical::{canonical_map, PosedBody};
use avatar_core::field::{load_checkpoint, save_checkpoint, ModelConfig, Scene};
use avatar_core::render::{render_field, sdf_to_density, Camera, CameraFile, Intrinsics, RenderConfig, SceneField};
use avatar_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AvatarStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// A file could not be read or written.
    Io = 3,
    /// A file was read but its contents are unusable.
    Malformed = 4,
    Invariant = 5,
    Diverged = 6,
    Panic = 7,
}

/// Template body handle.
pub struct AvatarBody(TemplateBody);

/// Fitted or freshly initialized scene handle.
pub struct AvatarScene(Scene);

/// Body parameters. `theta` holds `joints` axis-angle triples, `beta` holds `shapes` values.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AvatarPose {
    pub theta: *const f64,
    pub joints: usize,
    pub beta: *const f64,
    pub shapes: usize,
    pub root_translation: [f64; 3],
}

/// Pinhole camera. `rotation` (row-major) and `translation` map camera to world coordinates;
/// the camera looks along its +z axis with +y pointing down the image.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AvatarCamera {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> AvatarStatus {
    match e {
        Error::Io { .. } => AvatarStatus::Io,
        Error::Malformed { .. } | Error::Version { .. } | Error::Format(_) => AvatarStatus::Malformed,
        Error::Diverged { .. } => AvatarStatus::Diverged,
        Error::Parameter(_) | Error::Shape(_) | Error::NonFinite(_) => AvatarStatus::InvalidArgument,
        _ => AvatarStatus::Invariant,
    }
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

/// Runs `f`, recording any error or panic for `avatar_last_error`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AvatarStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            AvatarStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            AvatarStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            AvatarStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::Parameter("path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_slice<'a>(p: *mut f32, len: usize) -> Option<&'a mut [f32]> {
    (!p.is_null()).then(|| std::slice::from_raw_parts_mut(p, len))
}

unsafe fn pose_arg(pose: *const AvatarPose) -> Result<BodyParams, Failure> {
    let p = deref(pose, "pose")?;
    if (p.joints > 0 && p.theta.is_null()) || (p.shapes > 0 && p.beta.is_null()) {
        return Err(Failure::Null("pose arrays"));
    }
    let theta = if p.joints == 0 { &[][..] } else { std::slice::from_raw_parts(p.theta, 3 * p.joints) };
    let beta = if p.shapes == 0 { &[][..] } else { std::slice::from_raw_parts(p.beta, p.shapes) };
    let params = BodyParams {
        theta: theta.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        beta: beta.to_vec(),
        root_translation: p.root_translation,
    };
    params.check_finite()?;
    Ok(params)
}

fn camera_arg(c: &AvatarCamera) -> Result<Camera, Failure> {
    Ok(Camera::from_file(&CameraFile {
        width: c.width as usize,
        height: c.height as usize,
        intrinsics: Intrinsics {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
        },
        rotation: c.rotation,
        translation: c.translation,
    })?)
}

fn posed(body: &TemplateBody, params: &BodyParams) -> Result<PosedBody, Failure> {
    if params.theta.len() != body.joint_count() || params.beta.len() != body.shape_count() {
        return Err(Error::Shape(format!(
            "pose has {} joints and {} shapes, body has {} and {}",
            params.theta.len(),
            params.beta.len(),
            body.joint_count(),
            body.shape_count()
        ))
        .into());
    }
    Ok(PosedBody::new(body, params)?)
}

/// Message for the last failed call on this thread; empty after a success. The pointer stays
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn avatar_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn avatar_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// `σ = Sigmoid(−d/α)/α`.
///
/// # Safety
/// `out` must be null or point to writable memory for one `double`.
#[no_mangle]
pub unsafe extern "C" fn avatar_sdf_to_density(d: f64, alpha: f64, out: *mut f64) -> AvatarStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        *out = sdf_to_density(d, alpha)?;
        Ok(())
    })
}

/// Procedural test body. Nonpositive `height`, `girth` or zero `resolution` take defaults.
///
/// # Safety
/// `out` must be null or point to writable memory for one pointer.
#[no_mangle]
pub unsafe extern "C" fn avatar_body_generate(height: f64, girth: f64, resolution: u32, out: *mut *mut AvatarBody) -> AvatarStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        let d = BodySpec::default();
        let spec = BodySpec {
            height: if height > 0.0 { height } else { d.height },
            girth: if girth > 0.0 { girth } else { d.girth },
            resolution: if resolution > 0 { resolution as usize } else { d.resolution },
        };
        *out = Box::into_raw(Box::new(AvatarBody(generate_test_body(&spec)?)));
        Ok(())
    })
}

/// # Safety
/// `path` must be null or NUL-terminated; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn avatar_body_load(path: *const c_char, out: *mut *mut AvatarBody) -> AvatarStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        let body = load_body_asset(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(AvatarBody(body)));
        Ok(())
    })
}

/// # Safety
/// `body` must be null or a live handle; `path` must be null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn avatar_body_save(body: *const AvatarBody, path: *const c_char) -> AvatarStatus {
    guard(|| {
        let body = deref(body, "body")?;
        save_body_asset(&body.0, &path_arg(path)?)?;
        Ok(())
    })
}

/// Joint count, or 0 for a null handle.
///
/// # Safety
/// `body` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn avatar_body_joint_count(body: *const AvatarBody) -> usize {
    body.as_ref().map_or(0, |b| b.0.joint_count())
}

/// # Safety
/// `body` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn avatar_body_shape_count(body: *const AvatarBody) -> usize {
    body.as_ref().map_or(0, |b| b.0.shape_count())
}

/// # Safety
/// `body` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn avatar_body_vertex_count(body: *const AvatarBody) -> usize {
    body.as_ref().map_or(0, |b| b.0.vertices.len())
}

/// # Safety
/// `body` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn avatar_body_free(body: *mut AvatarBody) {
    if !body.is_null() {
        drop(Box::from_raw(body));
    }
}

/// Fresh scene with the default architecture for `body`.
///
/// # Safety
/// `body` must be null or a live handle; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn avatar_scene_new(body: *const AvatarBody, seed: u64, out: *mut *mut AvatarScene) -> AvatarStatus {
    guard(|| {
        let body = deref(body, "body")?;
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        let scene = Scene::new(ModelConfig::default(), &body.0, seed)?;
        *out = Box::into_raw(Box::new(AvatarScene(scene)));
        Ok(())
    })
}

/// # Safety
/// `path` must be null or NUL-terminated; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn avatar_scene_load(path: *const c_char, out: *mut *mut AvatarScene) -> AvatarStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        let scene = load_checkpoint(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(AvatarScene(scene)));
        Ok(())
    })
}

/// # Safety
/// `scene` must be null or a live handle; `path` must be null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn avatar_scene_save(scene: *const AvatarScene, path: *const c_char) -> AvatarStatus {
    guard(|| {
        let scene = deref(scene, "scene")?;
        save_checkpoint(&scene.0, &path_arg(path)?)?;
        Ok(())
    })
}

/// Density sharpness `α` of the scene, or NaN for a null handle.
///
/// # Safety
/// `scene` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn avatar_scene_alpha(scene: *const AvatarScene) -> f64 {
    scene.as_ref().map_or(f64::NAN, |s| s.0.alpha())
}

/// # Safety
/// `scene` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn avatar_scene_free(scene: *mut AvatarScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Observation-space `point` mapped into the canonical space of `scene` under `pose`.
///
/// # Safety
/// Handles must be live; `pose` arrays must hold `3 * joints` and `shapes` doubles; `point`
/// and `out` must each hold three doubles.
#[no_mangle]
pub unsafe extern "C" fn avatar_canonical_map(
    scene: *const AvatarScene,
    body: *const AvatarBody,
    pose: *const AvatarPose,
    point: *const f64,
    out: *mut f64,
) -> AvatarStatus {
    guard(|| {
        let (scene, body) = (deref(scene, "scene")?, deref(body, "body")?);
        let params = pose_arg(pose)?;
        if point.is_null() || out.is_null() {
            return Err(Failure::Null("point"));
        }
        let x = std::slice::from_raw_parts(point, 3);
        let posed = posed(&body.0, &params)?;
        let m = canonical_map(&Vec3::new(x[0], x[1], x[2]), &posed, &scene.0)?;
        std::slice::from_raw_parts_mut(out, 3).copy_from_slice(m.point.as_slice());
        Ok(())
    })
}

/// Renders `scene` posed by `pose` from `camera` with `samples` points per ray (0 = default)
/// on a white background. Outputs are row-major: `rgb` holds `3·w·h` floats, `depth` and
/// `alpha` hold `w·h`; any of them may be null. Background depth is `+∞`.
///
/// # Safety
/// Handles must be live, `pose` arrays sized as declared, and non-null outputs sized as above.
#[no_mangle]
pub unsafe extern "C" fn avatar_render(
    scene: *const AvatarScene,
    body: *const AvatarBody,
    pose: *const AvatarPose,
    camera: *const AvatarCamera,
    samples: u32,
    rgb: *mut f32,
    depth: *mut f32,
    alpha: *mut f32,
) -> AvatarStatus {
    guard(|| {
        let (scene, body) = (deref(scene, "scene")?, deref(body, "body")?);
        let camera = camera_arg(deref(camera, "camera")?)?;
        let params = pose_arg(pose)?;
        let mut cfg = RenderConfig::default();
        if samples > 0 {
            cfg.samples = samples as usize;
        }
        let posed = posed(&body.0, &params)?;
        let field = SceneField::new(&scene.0, &posed)?;
        let img = render_field(&field, &camera, &cfg)?;
        let n = camera.pixel_count();
        let outputs = [(out_slice(rgb, 3 * n), &img.rgb), (out_slice(depth, n), &img.depth), (out_slice(alpha, n), &img.alpha)];
        for (dst, src) in outputs {
            if let Some(dst) = dst {
                dst.iter_mut().zip(&src.data).for_each(|(d, s)| *d = *s as f32);
            }
        }
        Ok(())
    })
}
