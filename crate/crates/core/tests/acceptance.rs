//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Criteria 7 to 9 share two full 600-step fits, so the whole run takes several minutes on a
//! single core.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
use std::process::ExitCode;
use std::time::Instant;

use avatar_core::body::{BodyParams, BodySpec, CapsuleBody, TemplateBody};
use avatar_core::field::{ModelConfig, Scene};
use avatar_core::fit::{
    analytic_silhouette, depth_mae, fit_scene, make_synthetic_targets, masked_psnr, reanimate, FitConfig, FitResult,
    FitSession, TargetSet,
};
use avatar_core::math::Vec3;
use avatar_core::render::{iou, Camera, RenderConfig};
use avatar_core::verify::Suite;
use avatar_core::Result;

const SIZE: usize = 64;
const FOV: f64 = 0.9;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Outcome { pass, detail }
    }
}

fn report(id: usize, title: &str, started: Instant, outcome: Result<Outcome>) -> bool {
    let secs = started.elapsed().as_secs_f64();
    let (pass, detail) = match outcome {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!("{} {id:>2} {title} ({secs:.1} s): {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn suite(s: Suite) -> Result<Outcome> {
    let r = s.run()?;
    let detail = r
        .checks
        .iter()
        .map(|c| format!("{} {:.3e} (limit {:e})", c.name, c.value, c.limit))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(Outcome::new(r.pass(), detail))
}

fn target() -> Vec3 {
    Vec3::new(0.0, 0.9, 0.0)
}

fn training_cameras() -> Result<Vec<Camera>> {
    Camera::orbit(8, 2.0, target(), 0.0, SIZE, FOV)
}

/// Four views between the training azimuths, raised 0.3 rad.
fn held_out_cameras() -> Result<Vec<Camera>> {
    let el: f64 = 0.3;
    (0..4)
        .map(|k| {
            let az = FRAC_PI_4 + k as f64 * FRAC_PI_2;
            let eye = target() + Vec3::new(az.sin() * el.cos(), el.sin(), az.cos() * el.cos()) * 2.0;
            Camera::look_at(eye, target(), Vec3::y(), Camera::centered(SIZE, SIZE, FOV), SIZE, SIZE)
        })
        .collect()
}

fn unseen_poses(rest: &BodyParams) -> Vec<BodyParams> {
    let mut poses = vec![rest.clone(); 5];
    poses[0].theta[4] = [0.0, 0.0, -1.1];
    poses[0].theta[7] = [0.0, 0.0, 1.1];
    poses[1].theta[5] = [0.0, -1.2, 0.0];
    poses[1].theta[8] = [0.0, 1.0, 0.0];
    poses[1].theta[10] = [-0.6, 0.0, 0.0];
    poses[2].theta[10] = [-1.0, 0.0, 0.0];
    poses[2].theta[11] = [1.2, 0.0, 0.0];
    poses[2].theta[4] = [0.0, 0.4, -0.6];
    poses[3].theta[1] = [0.0, 0.5, 0.0];
    poses[3].theta[2] = [0.2, 0.0, 0.1];
    poses[3].theta[13] = [0.0, 0.0, -0.3];
    poses[3].theta[10] = [0.0, 0.0, 0.3];
    poses[4].theta[0] = [0.0, 0.7, 0.0];
    poses[4].theta[7] = [0.0, 0.6, 0.9];
    poses[4].theta[14] = [0.9, 0.0, 0.0];
    poses[4].root_translation = [0.05, 0.0, 0.0];
    poses
}

struct Setup {
    caps: CapsuleBody,
    body: TemplateBody,
    rest: BodyParams,
    train: TargetSet,
    test: TargetSet,
}

fn setup() -> Result<Setup> {
    let caps = CapsuleBody::new(BodySpec::default())?;
    let body = caps.template()?;
    let rest = BodyParams::for_body(&body);
    let train = make_synthetic_targets(&caps, &[rest.clone()], &training_cameras()?)?;
    let test = make_synthetic_targets(&caps, &[rest.clone()], &held_out_cameras()?)?;
    Ok(Setup {
        caps,
        body,
        rest,
        train,
        test,
    })
}

fn fit(s: &Setup, prior: f64) -> Result<(FitResult, f64)> {
    let mut cfg = FitConfig::default();
    cfg.weights.prior = prior;
    let t0 = Instant::now();
    let res = fit_scene(&s.body, &s.train, &cfg, Scene::new(ModelConfig::default(), &s.body, 0)?)?;
    Ok((res, t0.elapsed().as_secs_f64()))
}

/// Per-view masked PSNR and mean foreground depth MAE.
fn scores(s: &Setup, scene: &Scene, set: &TargetSet) -> Result<(Vec<f64>, f64)> {
    let rc = RenderConfig::default();
    let mut psnr = Vec::new();
    let mut mae = 0.0;
    for t in &set.targets {
        let r = reanimate(scene, &s.body, &t.params, &t.camera, &rc)?;
        psnr.push(masked_psnr(&r, t)?);
        mae += depth_mae(&r, t)? / set.len() as f64;
    }
    Ok((psnr, mae))
}

fn min(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::INFINITY, f64::min)
}

fn end_to_end(s: &Setup, fitted: &FitResult, secs: f64) -> Result<Outcome> {
    let (train, train_mae) = scores(s, &fitted.scene, &s.train)?;
    let (test, test_mae) = scores(s, &fitted.scene, &s.test)?;
    let threads = rayon::current_num_threads();
    let pass = min(&train) >= 25.0 && min(&test) >= 22.0 && train_mae < 0.03 && test_mae < 0.03 && secs <= 1800.0;
    Ok(Outcome::new(
        pass,
        format!(
            "train PSNR min {:.2} dB, held-out PSNR min {:.2} dB, depth MAE train {:.4} m held-out {:.4} m, fit {secs:.0} s on {threads} thread(s)",
            min(&train),
            min(&test),
            train_mae,
            test_mae
        ),
    ))
}

fn reanimation(s: &Setup, scene: &Scene) -> Result<Outcome> {
    let rc = RenderConfig::default();
    let train = training_cameras()?;
    let cams = [train[0], train[2], held_out_cameras()?[1]];
    let mut worst = Vec::new();
    for p in unseen_poses(&s.rest) {
        let mut lo: f64 = 1.0;
        for cam in &cams {
            let r = reanimate(scene, &s.body, &p, cam, &rc)?;
            lo = lo.min(iou(&r.silhouette(), &analytic_silhouette(&s.caps, &p, cam)?));
        }
        worst.push(lo);
    }
    let mut areas = Vec::new();
    for b in [-3.0, -1.5, 0.0, 1.5, 3.0] {
        let mut p = s.rest.clone();
        p.beta[0] = b;
        let r = reanimate(scene, &s.body, &p, &train[0], &rc)?;
        areas.push(r.silhouette().iter().filter(|x| **x).count());
    }
    let monotone = areas.windows(2).all(|w| w[0] < w[1]);
    let ious: Vec<String> = worst.iter().map(|x| format!("{x:.3}")).collect();
    Ok(Outcome::new(
        min(&worst) >= 0.85 && monotone,
        format!("per-pose IoU (worst of 3 views) [{}], beta sweep areas {areas:?}", ious.join(", ")),
    ))
}

fn ablation(s: &Setup, with_prior: &FitResult) -> Result<Outcome> {
    let (_, base) = scores(s, &with_prior.scene, &s.test)?;
    let (without, _) = fit(s, 0.0)?;
    let (_, ablated) = scores(s, &without.scene, &s.test)?;
    Ok(Outcome::new(
        ablated > base,
        format!("held-out depth MAE {base:.5} m with prior, {ablated:.5} m without"),
    ))
}

const DETERMINISM_STEPS: usize = 60;

fn determinism(s: &Setup) -> Result<Outcome> {
    let cfg = FitConfig {
        iterations: DETERMINISM_STEPS,
        ..FitConfig::default()
    };
    let scene = Scene::new(ModelConfig::default(), &s.body, 11)?;
    let rc = RenderConfig::default();
    let run = || -> Result<Vec<f64>> {
        let mut session = FitSession::new(&s.body, &s.train, cfg.clone(), scene.clone())?;
        session.run_until(DETERMINISM_STEPS, |_, _| Ok(()))?;
        let mut pixels = Vec::new();
        for v in [0, 3] {
            let r = session.render_view(v, &rc)?;
            pixels.extend(r.rgb.data.iter().chain(&r.depth.data).chain(&r.alpha.data));
        }
        Ok(pixels)
    };
    let (a, b) = (run()?, run()?);
    let bitwise = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());

    let whole = fit_scene(&s.body, &s.train, &cfg, scene.clone())?;
    let dir = tempfile::tempdir().map_err(|e| avatar_core::Error::io("tempdir", e))?;
    let path = dir.path().join("half.ckpt");
    let mut first = FitSession::new(&s.body, &s.train, cfg.clone(), scene)?;
    first.run_until(DETERMINISM_STEPS / 2, |_, _| Ok(()))?;
    first.save(&path)?;
    let mut second = FitSession::resume(&s.body, &s.train, &path)?;
    second.run_until(DETERMINISM_STEPS, |_, _| Ok(()))?;
    let distance = second.scene.parameter_distance(&whole.scene);
    Ok(Outcome::new(
        bitwise && distance <= 1e-6,
        format!(
            "rerun images bitwise {}, split-and-resume parameter distance {distance:.3e} after {DETERMINISM_STEPS} steps",
            if bitwise { "identical" } else { "DIFFERENT" }
        ),
    ))
}

fn main() -> ExitCode {
    let mut all = true;
    let titles = [
        (1, "inverse-skinning round trip", Suite::Roundtrip),
        (2, "mesh SDF accuracy", Suite::Sdf),
        (3, "eikonal property", Suite::Eikonal),
        (4, "gradient oracle", Suite::Gradcheck),
        (5, "renderer conservation", Suite::Renderer),
        (6, "SDF to density exactness", Suite::Density),
    ];
    for (id, title, s) in titles {
        let t0 = Instant::now();
        all &= report(id, title, t0, suite(s));
    }

    let t0 = Instant::now();
    let setup = match setup() {
        Ok(s) => s,
        Err(e) => {
            for (id, title) in [(7, "end-to-end fit"), (8, "re-animation"), (9, "prior ablation"), (10, "determinism and resume")] {
                report(id, title, t0, Err(avatar_core::Error::Invariant(format!("target setup failed: {e}"))));
            }
            return ExitCode::FAILURE;
        }
    };
    let fitted = fit(&setup, 1.0);
    let fitted = match fitted {
        Ok((res, secs)) => {
            all &= report(7, "end-to-end fit", t0, end_to_end(&setup, &res, secs));
            let t = Instant::now();
            all &= report(8, "re-animation", t, reanimation(&setup, &res.scene));
            Some(res)
        }
        Err(e) => {
            let msg = e.to_string();
            all &= report(7, "end-to-end fit", t0, Err(e));
            all &= report(8, "re-animation", t0, Err(avatar_core::Error::Invariant(format!("no fitted scene: {msg}"))));
            None
        }
    };
    let t = Instant::now();
    all &= match &fitted {
        Some(res) => report(9, "prior ablation", t, ablation(&setup, res)),
        None => report(9, "prior ablation", t, Err(avatar_core::Error::Invariant("no fitted scene".into()))),
    };
    let t = Instant::now();
    all &= report(10, "determinism and resume", t, determinism(&setup));

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
