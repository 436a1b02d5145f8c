//! Analytic scene gradients against central finite differences of the
//! combined image loss, with depth order and occluder sums held fixed.

use irtrack_core::fitting::{combined_loss, combined_loss_grad, FitConfig, Phase};
use irtrack_core::geometry::{Camera, ObjectNode, Pose};
use irtrack_core::image::Image;
use irtrack_core::prior::{Generator, LatentPair, PriorConfig};
use irtrack_core::renderer::{RenderSettings, SceneRender, SceneRenderer, Window};
use irtrack_core::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const POSE_STEP: f64 = 1e-6;
const LATENT_STEP: f64 = 1e-5;

fn random_latents(gen: &Generator, rng: &mut ChaCha8Rng, amp: f64) -> LatentPair {
    let mut lat = LatentPair::zeros(gen.config());
    for v in lat.shape.iter_mut().chain(lat.texture.iter_mut()) {
        *v = rng.random_range(-amp..amp);
    }
    lat
}

struct Fixture {
    gen: Generator,
    cam: Camera,
    observed: Image,
    objects: Vec<(LatentPair, ObjectNode)>,
}

fn fixture(seed: u64) -> Fixture {
    let gen = Generator::new(PriorConfig::default()).unwrap();
    let cam = Camera::forward_facing(64, 48, 60.0, 1.6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = vec![
        (
            random_latents(&gen, &mut rng, 1.0),
            ObjectNode::new(Pose::new(Vec3::new(12.0, 0.5, 0.65), Vec3::new(0.05, -0.03, 0.6)), 4.2).unwrap(),
        ),
        (
            random_latents(&gen, &mut rng, 1.0),
            ObjectNode::new(Pose::new(Vec3::new(16.0, -0.6, 0.7), Vec3::new(-0.02, 0.04, -0.4)), 4.0).unwrap(),
        ),
    ];
    // observation: a different scene, so the loss has non-trivial gradients
    let truth: Vec<(LatentPair, ObjectNode)> = objects
        .iter()
        .map(|(_, n)| {
            let mut n2 = *n;
            n2.pose.t += Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.3..0.3), 0.0);
            n2.pose.omega.z += 0.2;
            (random_latents(&gen, &mut rng, 1.0), n2)
        })
        .collect();
    let settings = RenderSettings { patch: None, sharpness: 4.0, ..Default::default() };
    let observed = {
        let r = SceneRenderer::new(&gen, settings).unwrap();
        let mut img = r.render_scene(&truth, &cam).unwrap().composite.image;
        // mild background so unmasked pixels are not all zero
        for (i, v) in img.data.iter_mut().enumerate() {
            *v += 0.05 * ((i % 7) as f64);
        }
        img
    };
    Fixture { gen, cam, observed, objects }
}

fn frozen_loss(r: &SceneRenderer, base: &SceneRender, f: &Fixture, objs: &[(LatentPair, ObjectNode)], phase: Phase, cfg: &FitConfig) -> f64 {
    let renders: Vec<_> = objs
        .iter()
        .zip(&base.renders)
        .map(|((lat, node), b)| r.render_object(lat, node, &f.cam, b.window).unwrap().0)
        .collect();
    let comp = base.recomposite_frozen(&renders).unwrap();
    let windows: Vec<Window> = base.renders.iter().map(|r| r.window).collect();
    combined_loss(&f.observed, &comp, &windows, phase, cfg).unwrap().total
}

fn close(analytic: f64, fd: f64) -> bool {
    (analytic - fd).abs() <= 1e-3 * analytic.abs().max(fd.abs()) + 1e-7
}

fn check(phase: Phase, sharpness: f64, seed: u64) {
    let f = fixture(seed);
    let cfg = FitConfig::default();
    let settings = RenderSettings { patch: None, sharpness, ..Default::default() };
    let r = SceneRenderer::new(&f.gen, settings).unwrap();
    let base = r.render_scene(&f.objects, &f.cam).unwrap();
    let windows: Vec<Window> = base.renders.iter().map(|r| r.window).collect();
    let (_, d_img, d_fg) = combined_loss_grad(&f.observed, &base.composite, &windows, phase, &cfg, true).unwrap();
    let grads = base.backward(&r, &d_img, &d_fg);

    let mut failures = Vec::new();
    let mut nonzero = 0;
    for p in 0..f.objects.len() {
        let fd = |h: f64, edit: &dyn Fn(&mut LatentPair, &mut ObjectNode, f64)| {
            let mut plus = f.objects.clone();
            let mut minus = f.objects.clone();
            let (l, n) = &mut plus[p];
            edit(l, n, h);
            let (l, n) = &mut minus[p];
            edit(l, n, -h);
            (frozen_loss(&r, &base, &f, &plus, phase, &cfg) - frozen_loss(&r, &base, &f, &minus, phase, &cfg)) / (2.0 * h)
        };
        let g = &grads[p];
        let mut cmp = |name: String, a: f64, n: f64| {
            if a.abs() > 1e-9 {
                nonzero += 1;
            }
            if !close(a, n) {
                failures.push(format!("object {p} {name}: analytic {a:.6e} fd {n:.6e}"));
            }
        };
        for k in 0..3 {
            cmp(format!("t{k}"), g.translation[k], fd(POSE_STEP, &|_, n, h| n.pose.t[k] += h));
            cmp(format!("w{k}"), g.rotation[k], fd(POSE_STEP, &|_, n, h| n.pose.omega[k] += h));
        }
        cmp("log_s".into(), g.log_scale, fd(POSE_STEP, &|_, n, h| n.scale *= h.exp()));
        for k in 0..g.shape.len() {
            cmp(format!("zs{k}"), g.shape[k], fd(LATENT_STEP, &|l, _, h| l.shape[k] += h));
        }
        for k in 0..g.texture.len() {
            cmp(format!("zt{k}"), g.texture[k], fd(LATENT_STEP, &|l, _, h| l.texture[k] += h));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
    assert!(nonzero > 30, "too few informative gradient entries: {nonzero}");
}

#[test]
fn joint_phase_gradients_match_finite_differences() {
    check(Phase::Joint, 4.0, 11);
}

#[test]
fn texture_phase_gradients_match_finite_differences() {
    check(Phase::Texture, 1.0, 12);
}

#[test]
fn sharp_edges_gradients_match_finite_differences() {
    check(Phase::Joint, 40.0, 13);
}
