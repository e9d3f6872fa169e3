//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test --test acceptance`.

use std::collections::BTreeMap;
use std::fs;
use std::ops::{Add, Div, Mul, Sub};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use t1joint::deformation::positive_jacobian_fraction;
use t1joint::io::{export_t1_png, save_solution, FitReport};
use t1joint::losses::{finite_difference_gradient, total_loss_and_gradient, Coordinate, DICE_EPS};
use t1joint::metrics::{dice, evaluate, hausdorff, EvalOptions, EvalReport};
use t1joint::optimizer::uncorrected_solution;
use t1joint::pyramid::{downsample_masks, downsample_series};
use t1joint::signal_model::synthesize;
use t1joint::*;

/// Motion seeds; the lambda calibration used seeds 0 and 1 only.
const MOTION_SEEDS: std::ops::Range<u64> = 100..110;

/// Smoothness weight for direct optimization, calibrated once and frozen.
const CALIBRATED_LAMBDA_SMOOTH: f64 = 0.01;

fn calibrated() -> FitConfig {
    FitConfig {
        lambda_smooth: CALIBRATED_LAMBDA_SMOOTH,
        ..FitConfig::default()
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: u32, name: &str, outcome: &Outcome) {
    let tag = if outcome.pass { "PASS" } else { "FAIL" };
    println!("criterion {id} [{tag}] {name}: {}", outcome.detail);
}

// ---------------------------------------------------------------- 1

fn round_trip() -> Outcome {
    let pc = PhantomConfig::default().still();
    let scene = generate_phantom(&pc, 0).unwrap();
    let series = min_max_normalize(&scene.series).unwrap();
    let config = FitConfig {
        parallel: false,
        ..FitConfig::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let start = Instant::now();
    let fit = pool.install(|| fit_map(&series, &config, None)).unwrap();
    let secs = start.elapsed().as_secs_f64();

    let truth = &scene.truth_maps.t1.data;
    let n = truth.len() as f64;
    let rel_rmse = (fit
        .maps
        .t1
        .data
        .iter()
        .zip(truth)
        .map(|(e, t)| ((e - t) / t).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let r2_mean = fit.r2.data.iter().sum::<f64>() / n;
    Outcome {
        pass: rel_rmse < 0.005 && r2_mean >= 0.999 && secs < 60.0,
        detail: format!(
            "160x160 N=11, T1 rel RMSE {:.2e} (< 5e-3), r2_mean {r2_mean:.6} (>= 0.999), {secs:.2} s single-threaded (< 60 s)",
            rel_rmse
        ),
    }
}

// ---------------------------------------------------------------- 2, 4, 5, 7

struct MotionRun {
    seed: u64,
    series: ImageSeries,
    base: EvalReport,
    plain: (JointSolution, EvalReport),
    seg: (JointSolution, EvalReport),
}

fn motion_runs() -> Vec<MotionRun> {
    MOTION_SEEDS
        .map(|seed| {
            let scene = generate_phantom(&PhantomConfig::default(), seed).unwrap();
            let series = min_max_normalize(&scene.series).unwrap();
            let masks = &scene.truth_masks;
            let eval = |s: &JointSolution| evaluate(s, masks, Some(&scene), EvalOptions::default()).unwrap();
            let base = eval(&uncorrected_solution(&series, &calibrated()).unwrap());
            // With lambda_seg = 0 the mask term is inert, so this run is both
            // the plain joint fit and the ablation arm.
            let plain = joint_fit(&series, &calibrated(), None).unwrap();
            let seg = joint_fit(&series, &calibrated(), Some(masks)).unwrap();
            let (pe, se) = (eval(&plain), eval(&seg));
            eprintln!(
                "  seed {seed}: uncorrected r2 {:.4} rmse {:.1} | joint r2 {:.4} rmse {:.1} dice {:.3} | +seg dice {:.3}",
                base.r2_mean,
                base.t1_rmse.unwrap(),
                pe.r2_mean,
                pe.t1_rmse.unwrap(),
                pe.dice_mean,
                se.dice_mean
            );
            MotionRun {
                seed,
                series,
                base,
                plain: (plain, pe),
                seg: (seg, se),
            }
        })
        .collect()
}

fn ordering(runs: &[MotionRun]) -> Outcome {
    let wins = runs.iter().filter(|r| r.plain.1.r2_mean > r.base.r2_mean).count();
    let improvement = runs
        .iter()
        .map(|r| 1.0 - r.plain.1.t1_rmse.unwrap() / r.base.t1_rmse.unwrap())
        .sum::<f64>()
        / runs.len() as f64;
    Outcome {
        pass: wins >= 9 && improvement >= 0.30,
        detail: format!(
            "joint r2 > uncorrected on {wins}/{} seeds (>= 9), mean T1 RMSE improvement {:.1}% (>= 30%)",
            runs.len(),
            100.0 * improvement
        ),
    }
}

fn diffeomorphic(runs: &[MotionRun]) -> Outcome {
    let worst = runs
        .iter()
        .flat_map(|r| {
            let s = &r.plain.0;
            let r = s.fields.reference_index;
            s.displacements(s.integration_steps)
                .into_iter()
                .enumerate()
                .filter(move |(i, _)| *i != r)
                .map(|(_, u)| positive_jacobian_fraction(&u))
        })
        .fold(1.0, f64::min);
    Outcome {
        pass: worst >= 0.995,
        detail: format!("min positive-Jacobian fraction over frames and seeds {:.5} (>= 0.995)", worst),
    }
}

fn contract_holds(sol: &JointSolution, series: &ImageSeries) -> bool {
    let monotone = sol
        .level_traces
        .iter()
        .all(|t| t.windows(2).all(|p| p[1].total <= p[0].total));
    let r = sol.fields.reference_index;
    monotone && sol.registered.frames[r] == series.frames[r]
}

fn contract(runs: &[MotionRun], extra: &[(JointSolution, ImageSeries)]) -> Outcome {
    let mut total = 0;
    let mut ok = 0;
    for r in runs {
        for sol in [&r.plain.0, &r.seg.0] {
            total += 1;
            ok += contract_holds(sol, &r.series) as usize;
        }
    }
    for (sol, series) in extra {
        total += 1;
        ok += contract_holds(sol, series) as usize;
    }
    Outcome {
        pass: ok == total,
        detail: format!("nonincreasing trace and bit-identical reference frame on {ok}/{total} runs"),
    }
}

fn seg_effect(runs: &[MotionRun]) -> Outcome {
    let wins: Vec<u64> = runs
        .iter()
        .filter(|r| r.seg.1.dice_mean > r.plain.1.dice_mean)
        .map(|r| r.seed)
        .collect();
    Outcome {
        pass: wins.len() >= 8,
        detail: format!("Dice higher with lambda_seg = 70000 on {}/{} seeds (>= 8)", wins.len(), runs.len()),
    }
}

// ---------------------------------------------------------------- 3

/// Arithmetic the velocity-loss oracle is generic over.
trait Real:
    Copy + PartialOrd + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self>
{
    fn of(x: f64) -> Self;
    fn floor(self) -> Self;
    fn approx(self) -> f64;
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn floor(self) -> Self {
        f64::floor(self)
    }
    fn approx(self) -> f64 {
        self
    }
}

/// Double-double number `hi + lo`, about 106 significant bits.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
struct Dd {
    hi: f64,
    lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let n = quick_two_sum(s, e + t);
        quick_two_sum(n.hi, n.lo + f)
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + Dd { hi: -o.hi, lo: -o.lo }
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        quick_two_sum(p, e + (self.hi * o.lo + self.lo * o.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::of(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::of(q2);
        let q3 = r.hi / o.hi;
        quick_two_sum(q1, q2) + Dd::of(q3)
    }
}

impl Real for Dd {
    fn of(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }
    fn floor(self) -> Self {
        let hi = self.hi.floor();
        if hi == self.hi {
            quick_two_sum(hi, self.lo.floor())
        } else {
            Dd::of(hi)
        }
    }
    fn approx(self) -> f64 {
        self.hi + self.lo
    }
}

/// Velocity step for the double-double central difference.
const VELOCITY_STEP: f64 = 1e-8;

fn lerp_axis<T: Real>(n: usize, q: T) -> (usize, usize, T) {
    if n == 1 {
        return (0, 0, T::of(0.0));
    }
    let last = T::of((n - 1) as f64);
    let q = if q <= T::of(0.0) {
        T::of(0.0)
    } else if q >= last {
        last
    } else {
        q
    };
    let i0 = (q.floor().approx() as usize).min(n - 2);
    (i0, i0 + 1, q - T::of(i0 as f64))
}

fn bilinear<T: Real, const C: usize>(data: &[[T; C]], h: usize, w: usize, y: T, x: T) -> [T; C] {
    let (y0, y1, fy) = lerp_axis(h, y);
    let (x0, x1, fx) = lerp_axis(w, x);
    let one = T::of(1.0);
    let (gy, gx) = (one - fy, one - fx);
    let corners = [
        (gy * gx, y0 * w + x0),
        (gy * fx, y0 * w + x1),
        (fy * gx, y1 * w + x0),
        (fy * fx, y1 * w + x1),
    ];
    let mut out = [T::of(0.0); C];
    for (wt, i) in corners {
        for c in 0..C {
            out[c] = out[c] + wt * data[i][c];
        }
    }
    out
}

fn lift<T: Real>(image: &Image) -> Vec<[T; 1]> {
    image.data.iter().map(|&v| [T::of(v)]).collect()
}

/// Weighted loss of one moving frame as a function of its velocity field,
/// written out directly: scaling and squaring, backward warps of frame and
/// mask, then fit, smoothness and soft Dice.
struct FrameOracle<'a> {
    image: &'a Image,
    synthetic: &'a Image,
    mask: &'a Image,
    fixed: &'a Image,
    config: &'a FitConfig,
}

impl FrameOracle<'_> {
    fn loss<T: Real>(&self, v: &[[T; 2]]) -> T {
        let (h, w) = self.image.shape();
        let zero = T::of(0.0);
        let steps = self.config.integration_steps;
        let scale = T::of(0.5f64.powi(steps as i32));
        let mut u: Vec<[T; 2]> = v.iter().map(|p| [p[0] * scale, p[1] * scale]).collect();
        for _ in 0..steps {
            u = (0..h * w)
                .map(|i| {
                    let d = u[i];
                    let s = bilinear(&u, h, w, T::of((i / w) as f64) + d[0], T::of((i % w) as f64) + d[1]);
                    [d[0] + s[0], d[1] + s[1]]
                })
                .collect();
        }
        let (image, mask) = (lift::<T>(self.image), lift::<T>(self.mask));
        let (mut fit, mut inter, mut total) = (zero, zero, zero);
        for i in 0..h * w {
            let (y, x) = (T::of((i / w) as f64) + u[i][0], T::of((i % w) as f64) + u[i][1]);
            let e = T::of(self.synthetic.data[i]) - bilinear(&image, h, w, y, x)[0];
            fit = fit + e * e;
            let m = bilinear(&mask, h, w, y, x)[0];
            let f = T::of(self.fixed.data[i]);
            inter = inter + f * m;
            total = total + f + m;
        }
        let mut smooth = zero;
        for r in 0..h {
            for c in 0..w {
                let p = v[r * w + c];
                for (ok, q) in [(r + 1 < h, (r + 1) * w + c), (c + 1 < w, r * w + c + 1)] {
                    if ok {
                        for k in 0..2 {
                            let d = v[q][k] - p[k];
                            smooth = smooth + d * d;
                        }
                    }
                }
            }
        }
        let n = T::of((h * w) as f64);
        let seg = T::of(1.0) - T::of(2.0) * inter / (total + T::of(DICE_EPS));
        let cfg = self.config;
        T::of(cfg.lambda_fit) * fit / n + T::of(cfg.lambda_smooth) * smooth / n + T::of(cfg.lambda_seg) * seg
    }

    /// Central difference in double-double at a step far below any kink
    /// spacing and far above the extended roundoff floor.
    fn derivative(&self, v: &VelocityField, voxel: usize, component: usize, step: f64) -> f64 {
        let shifted = |sign: f64| {
            let mut p: Vec<[Dd; 2]> = v.data.iter().map(|q| [Dd::of(q[0]), Dd::of(q[1])]).collect();
            p[voxel][component] = p[voxel][component] + Dd::of(sign * step);
            self.loss(&p)
        };
        ((shifted(1.0) - shifted(-1.0)) / Dd::of(2.0 * step)).approx()
    }
}

fn gradient_check() -> Outcome {
    let pc = PhantomConfig {
        height: 64,
        width: 64,
        ..PhantomConfig::default()
    };
    let scene = generate_phantom(&pc, 21).unwrap();
    let series = downsample_series(&downsample_series(&min_max_normalize(&scene.series).unwrap()));
    let masks = downsample_masks(&downsample_masks(&scene.truth_masks));
    let (h, w) = series.shape();
    assert_eq!((h, w), (16, 16));
    let config = FitConfig::default();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut maps = fit_map(&series, &config, None).unwrap().maps;
    for (t, m) in maps.t1.data.iter_mut().zip(maps.m0.data.iter_mut()) {
        *t *= rng.random_range(0.8..1.2);
        *m *= rng.random_range(0.8..1.2);
    }
    let mut fields = VelocityFieldSet::zeros(series.len(), h, w, 0);
    for f in fields.fields.iter_mut() {
        let a: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        *f = VectorField::from_fn(h, w, |y, x| {
            let (y, x) = (y as f64 / h as f64, x as f64 / w as f64);
            [
                1.3 * a[0] * (3.0 * x + a[1]).sin() + 0.7 * a[2] * y,
                1.3 * a[3] * (2.5 * y + a[4]).cos() + 0.7 * a[5] * x,
            ]
        });
    }

    let (loss, grad) = total_loss_and_gradient(&series, &maps, &fields, Some(&masks), &config).unwrap();
    let synthetic = synthesize(&maps, &series.timestamps, series.zero_level);
    let reference = fields.reference_index;
    let oracles: Vec<FrameOracle> = (0..fields.fields.len())
        .map(|slot| {
            let i = fields.frame_of_slot(slot);
            FrameOracle {
                image: &series.frames[i],
                synthetic: &synthetic[i],
                mask: &masks.masks[i],
                fixed: &masks.masks[reference],
                config: &config,
            }
        })
        .collect();
    // The oracle must describe the same objective: moving frames plus the
    // reference frame's fit term reproduce the library total, in both
    // precisions.
    let (s_r, i_r) = (&synthetic[reference].data, &series.frames[reference].data);
    let reference_fit = s_r.iter().zip(i_r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (h * w) as f64;
    let mut total_f64 = config.lambda_fit * reference_fit;
    let mut total_dd = total_f64;
    for (o, v) in oracles.iter().zip(&fields.fields) {
        total_f64 += o.loss::<f64>(&v.data);
        let lifted: Vec<[Dd; 2]> = v.data.iter().map(|q| [Dd::of(q[0]), Dd::of(q[1])]).collect();
        total_dd += o.loss(&lifted).approx();
    }
    let oracle_gap = ((total_f64 - loss.total).abs()).max((total_dd - loss.total).abs()) / loss.total.abs();
    let map_fd = |coord, step| finite_difference_gradient(&series, &maps, &fields, Some(&masks), &config, coord, step).unwrap();

    let mut coords = Vec::new();
    for _ in 0..240 {
        coords.push(Coordinate::Velocity {
            slot: rng.random_range(0..fields.fields.len()),
            voxel: rng.random_range(0..h * w),
            component: rng.random_range(0..2),
        });
    }
    for _ in 0..40 {
        coords.push(Coordinate::T1 {
            voxel: rng.random_range(0..h * w),
        });
        coords.push(Coordinate::M0 {
            voxel: rng.random_range(0..h * w),
        });
    }
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for &coord in &coords {
        let (analytic, fd) = match coord {
            Coordinate::Velocity { slot, voxel, component } => (
                grad.velocity[slot].data[voxel][component],
                oracles[slot].derivative(&fields.fields[slot], voxel, component, VELOCITY_STEP),
            ),
            Coordinate::T1 { voxel } => (grad.t1.data[voxel], map_fd(coord, 1e-4 * maps.t1.data[voxel])),
            Coordinate::M0 { voxel } => (grad.m0.data[voxel], map_fd(coord, 1e-6)),
        };
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-12);
        if rel > worst {
            worst = rel;
            worst_at = format!("{coord:?}: analytic {analytic:.6e}, fd {fd:.6e}");
        }
    }
    Outcome {
        pass: worst < 1e-4 && oracle_gap < 1e-12,
        detail: format!(
            "{} coordinates on 16x16 ({} velocity, {} map), max rel err {worst:.2e} (< 1e-4) at {worst_at}; \
             oracle vs library loss {oracle_gap:.1e}",
            coords.len(),
            240,
            80
        ),
    }
}

// ---------------------------------------------------------------- 6

fn on(v: f64) -> bool {
    v > 0.5
}

fn brute_dice(a: &Image, b: &Image) -> f64 {
    let na = a.data.iter().filter(|&&v| on(v)).count();
    let nb = b.data.iter().filter(|&&v| on(v)).count();
    let both = a.data.iter().zip(&b.data).filter(|(&x, &y)| on(x) && on(y)).count();
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

fn brute_boundary(m: &Image) -> Vec<(usize, usize)> {
    let (h, w) = m.shape();
    let mut pts = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !on(m.get(r, c)) {
                continue;
            }
            let neighbours = [
                r.checked_sub(1).map(|rr| (rr, c)),
                (r + 1 < h).then_some((r + 1, c)),
                c.checked_sub(1).map(|cc| (r, cc)),
                (c + 1 < w).then_some((r, c + 1)),
            ];
            if neighbours.iter().any(|n| n.is_none_or(|(rr, cc)| !on(m.get(rr, cc)))) {
                pts.push((r, c));
            }
        }
    }
    pts
}

fn brute_hausdorff(a: &Image, b: &Image, spacing: (f64, f64)) -> Option<f64> {
    let (pa, pb) = (brute_boundary(a), brute_boundary(b));
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let dist = |p: (usize, usize), q: (usize, usize)| {
        let dy = (p.0 as f64 - q.0 as f64) * spacing.0;
        let dx = (p.1 as f64 - q.1 as f64) * spacing.1;
        (dy * dy + dx * dx).sqrt()
    };
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        from.iter()
            .map(|&p| to.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    Some(directed(&pa, &pb).max(directed(&pb, &pa)))
}

fn mask_from_bits(h: usize, w: usize, bits: u64) -> Image {
    Image::from_fn(h, w, |r, c| ((bits >> (r * w + c)) & 1) as f64)
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    let density = rng.random_range(0.05..0.95);
    let data = (0..h * w).map(|_| if rng.random_bool(density) { 1.0 } else { 0.0 }).collect();
    Image::new(h, w, data).unwrap()
}

/// Compares against the brute-force oracle; Hausdorff allows one ulp-scale
/// difference from the different operation order of the distance transform.
fn agree(a: &Image, b: &Image, spacing: (f64, f64)) -> bool {
    if dice(a, b).unwrap() != brute_dice(a, b) {
        return false;
    }
    match (hausdorff(a, b, spacing), brute_hausdorff(a, b, spacing)) {
        (Ok(x), Some(y)) => (x - y).abs() <= 1e-12 * y.max(1.0),
        (Err(Error::EmptyMask), None) => true,
        _ => false,
    }
}

fn metric_oracles() -> Outcome {
    let spacings = [(1.0, 1.0), (2.1, 2.1), (1.3, 0.7)];
    let mut results: Vec<bool> = Vec::new();

    // Every pair of masks for all shapes with at most 9 voxels.
    let mut exhaustive_shapes = 0;
    for h in 1..=3 {
        for w in 1..=3 {
            exhaustive_shapes += 1;
            let n = 1u64 << (h * w);
            for x in 0..n {
                let a = mask_from_bits(h, w, x);
                for y in 0..n {
                    let b = mask_from_bits(h, w, y);
                    results.push(agree(&a, &b, spacings[((x + y) % 3) as usize]));
                }
            }
        }
    }
    // Every 4x4 mask against a fixed panel.
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let panel: Vec<Image> = (0..6).map(|_| random_mask(&mut rng, 4, 4)).collect();
    for x in 0..1u64 << 16 {
        let a = mask_from_bits(4, 4, x);
        for (k, b) in panel.iter().enumerate() {
            results.push(agree(&a, b, spacings[k % 3]));
        }
    }
    // Random pairs for every shape up to 8x8.
    for h in 1..=8 {
        for w in 1..=8 {
            for k in 0..200 {
                let a = random_mask(&mut rng, h, w);
                let b = random_mask(&mut rng, h, w);
                results.push(agree(&a, &b, spacings[k % 3]));
            }
        }
    }
    let small = results.len();
    // 1,000 random 32x32 pairs.
    for k in 0..1000 {
        let a = random_mask(&mut rng, 32, 32);
        let b = random_mask(&mut rng, 32, 32);
        results.push(agree(&a, &b, spacings[k % 3]));
    }
    let failed = results.iter().filter(|ok| !**ok).count();

    let mut a = Image::zeros(8, 8);
    let mut b = Image::zeros(8, 8);
    a.set(3, 2, 1.0);
    b.set(3, 4, 1.0);
    let fixed = hausdorff(&a, &b, (2.1, 2.1)).unwrap();
    Outcome {
        pass: failed == 0 && fixed == 4.2,
        detail: format!(
            "{} small-mask comparisons (all pairs on {exhaustive_shapes} shapes up to 3x3, all 4x4 masks vs a panel, random up to 8x8) and 1000 random 32x32 pairs, {failed} disagreements; 2-voxel case at 2.1 mm = {fixed} (== 4.2)",
            small
        ),
    }
}

// ---------------------------------------------------------------- 8

fn pipeline_bytes(parallel: bool) -> (BTreeMap<String, Vec<u8>>, JointSolution, ImageSeries) {
    let pc = PhantomConfig {
        height: 64,
        width: 64,
        ..PhantomConfig::default()
    };
    let scene = generate_phantom(&pc, 11).unwrap();
    let series = min_max_normalize(&scene.series).unwrap();
    let config = FitConfig {
        outer_iterations: 4,
        parallel,
        ..calibrated()
    };
    let base = fit_map(&series, &config, None).unwrap();
    let sol = joint_fit(&series, &config, Some(&scene.truth_masks)).unwrap();
    let report = evaluate(&sol, &scene.truth_masks, Some(&scene), EvalOptions { pooled_r2: true, hausdorff_percentile: None }).unwrap();

    let dir = tempfile::tempdir().unwrap();
    save_solution(&sol, &FitReport::new("joint", &sol, &config), dir.path()).unwrap();
    export_t1_png(&sol.maps, (400.0, 2000.0), &dir.path().join("t1.png")).unwrap();
    // The fit report records `config.parallel`, the one input that differs
    // between the arms; blank it before comparing.
    let report_path = dir.path().join("report.json");
    let mut fit_json: serde_json::Value = serde_json::from_slice(&fs::read(&report_path).unwrap()).unwrap();
    fit_json["config"]["parallel"] = serde_json::Value::Null;
    fs::write(&report_path, serde_json::to_vec_pretty(&fit_json).unwrap()).unwrap();
    let mut files: BTreeMap<String, Vec<u8>> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    let bits = |v: &[f64]| v.iter().flat_map(|x| x.to_bits().to_le_bytes()).collect::<Vec<u8>>();
    files.insert("phantom".into(), scene.series.frames.iter().flat_map(|f| bits(&f.data)).collect());
    files.insert("fit_map".into(), [bits(&base.maps.t1.data), bits(&base.maps.m0.data), bits(&base.r2.data)].concat());
    files.insert("fields".into(), sol.fields.fields.iter().flat_map(|f| f.data.iter().flat_map(|d| bits(d))).collect());
    files.insert("report".into(), serde_json::to_vec(&report).unwrap());
    (files, sol, series)
}

fn determinism(extra: &mut Vec<(JointSolution, ImageSeries)>) -> Outcome {
    let in_pool = |threads: usize, parallel: bool| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| pipeline_bytes(parallel))
    };
    let (one, sol, series) = in_pool(1, true);
    let (four, _, _) = in_pool(4, true);
    let (seq, _, _) = in_pool(4, false);
    let (again, _, _) = in_pool(4, true);
    extra.push((sol, series));
    let differing: Vec<&String> = one
        .keys()
        .filter(|k| one.get(*k) != four.get(*k) || one.get(*k) != seq.get(*k) || one.get(*k) != again.get(*k))
        .collect();
    Outcome {
        pass: differing.is_empty() && one.len() == four.len(),
        detail: format!(
            "{} artifacts (phantom, fit_map, joint_fit, evaluate, saved files, png) bit-identical across 1 thread, 4 threads, sequential path and a repeat run; differing: {differing:?}",
            one.len()
        ),
    }
}

fn run(id: u32, name: &'static str, outcome: Outcome, outcomes: &mut Vec<(u32, &'static str, Outcome)>) {
    report(id, name, &outcome);
    outcomes.push((id, name, outcome));
}

fn main() {
    // `cargo test` forwards harness flags; bare numbers select criteria.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let selected: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let want = |ids: &[u32]| selected.is_empty() || ids.iter().any(|i| selected.contains(i));

    let start = Instant::now();
    let mut outcomes: Vec<(u32, &'static str, Outcome)> = Vec::new();
    if want(&[1]) {
        run(1, "forward-model round trip", round_trip(), &mut outcomes);
    }
    if want(&[3]) {
        run(3, "gradient correctness", gradient_check(), &mut outcomes);
    }
    if want(&[6]) {
        run(6, "metric oracles", metric_oracles(), &mut outcomes);
    }
    let mut extra = Vec::new();
    if want(&[8]) {
        run(8, "determinism", determinism(&mut extra), &mut outcomes);
    }
    if want(&[2, 4, 5, 7]) {
        eprintln!(
            "  running {} motion phantoms (160x160, lambda_smooth = {CALIBRATED_LAMBDA_SMOOTH})",
            MOTION_SEEDS.end - MOTION_SEEDS.start
        );
        let runs = motion_runs();
        run(2, "motion-correction ordering", ordering(&runs), &mut outcomes);
        run(4, "diffeomorphism", diffeomorphic(&runs), &mut outcomes);
        run(5, "optimizer contract", contract(&runs, &extra), &mut outcomes);
        run(7, "segmentation-loss effect", seg_effect(&runs), &mut outcomes);
    }

    outcomes.sort_by_key(|o| o.0);
    println!("\nacceptance summary ({:.0} s):", start.elapsed().as_secs_f64());
    for (id, name, o) in &outcomes {
        println!("  {} criterion {id}: {name}", if o.pass { "PASS" } else { "FAIL" });
    }
    if outcomes.iter().any(|o| !o.2.pass) {
        std::process::exit(1);
    }
}
