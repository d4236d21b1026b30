//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::path::Path;

use cmrorient::orient::{all_codes, apply_to_grid, apply_to_plane, apply_to_volume, compose, invert, OrientCode};
use cmrorient::tensor::{Graph, Scalar, Tensor, Var};
use cmrorient::train::{dice, orientation_loss, orientation_loss_value, seg_target, segmentation_loss};
use cmrorient::volume::{read_volume, write_volume, Volume};
use nalgebra::{Matrix3, Matrix4, Vector4};
use ndarray::{array, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn code(s: &str) -> OrientCode {
    s.parse().unwrap()
}

// ---------------------------------------------------------------- group

/// Nested vectors indexed `[x][y]`; flips and the transpose done by hand.
pub fn brute_force(code: OrientCode, g: &[Vec<u32>]) -> Vec<Vec<u32>> {
    let mut g = g.to_vec();
    if code.bits() & 1 != 0 {
        g.reverse();
    }
    if code.bits() & 2 != 0 {
        for col in &mut g {
            col.reverse();
        }
    }
    if code.bits() & 4 != 0 {
        let (sx, sy) = (g.len(), g[0].len());
        g = (0..sy).map(|y| (0..sx).map(|x| g[x][y]).collect()).collect();
    }
    g
}

fn to_nested(a: &Array2<u32>) -> Vec<Vec<u32>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

/// Mismatch count over all 64 compositions, 8 inverses, the 8 direct
/// applications and the four published corner layouts.
pub fn group_algebra_mismatches() -> usize {
    let grid = Array2::from_shape_fn((3, 4), |(x, y)| (x * 4 + y) as u32);
    let nested = to_nested(&grid);
    let mut bad = 0;
    for c in all_codes() {
        if to_nested(&apply_to_plane(c, grid.view())) != brute_force(c, &nested) {
            bad += 1;
        }
        let inv = invert(c);
        if brute_force(inv, &brute_force(c, &nested)) != nested || !compose(inv, c).is_identity() {
            bad += 1;
        }
    }
    for a in all_codes() {
        for b in all_codes() {
            let want = brute_force(a, &brute_force(b, &nested));
            if to_nested(&apply_to_plane(compose(a, b), grid.view())) != want {
                bad += 1;
            }
        }
    }
    let g = array![[1, 2], [3, 4]];
    let fixtures = [
        ("001", array![[2, 1], [4, 3]]),
        ("010", array![[3, 4], [1, 2]]),
        ("011", array![[4, 3], [2, 1]]),
        ("110", array![[2, 4], [1, 3]]),
    ];
    for (c, want) in fixtures {
        if apply_to_grid(code(c), &g).unwrap() != want {
            bad += 1;
        }
    }
    bad
}

// ---------------------------------------------------------------- geometry

pub fn random_affine(rng: &mut impl Rng) -> Matrix4<f64> {
    loop {
        let m = Matrix3::<f64>::from_fn(|_, _| rng.random_range(-2.0..2.0));
        if m.determinant().abs() < 0.1 {
            continue;
        }
        let mut a = Matrix4::identity();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&m);
        for r in 0..3 {
            a[(r, 3)] = rng.random_range(-150.0..150.0);
        }
        return a;
    }
}

pub struct GeometryReport {
    pub max_world_error: f64,
    pub round_trip_mismatches: usize,
    pub cases: usize,
}

/// Tracks each voxel by a unique value and compares its world position
/// under the old and new affine.
pub fn geometry_check(n_affines: usize, seed: u64) -> GeometryReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GeometryReport { max_world_error: 0.0, round_trip_mismatches: 0, cases: 0 };
    for _ in 0..n_affines {
        let (sx, sy, sz) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..4));
        let affine = random_affine(&mut rng);
        let ids = Array3::from_shape_fn((sx, sy, sz), |(x, y, z)| ((x * sy + y) * sz + z) as f32);
        let vol = Volume::new(ids, [1.0; 3], affine).unwrap();
        let noise = Array3::from_shape_fn((sx, sy, sz), |_| f32::from_bits(rng.random::<u32>() & 0xbf7f_ffff));
        let noisy = Volume::new(noise, [1.0; 3], affine).unwrap();
        for c in all_codes() {
            report.cases += 1;
            let out = apply_to_volume(c, &vol).unwrap();
            let (tx, ty, tz) = out.dims();
            assert_eq!(tx * ty * tz, sx * sy * sz);
            for ((x, y, z), &id) in out.data().indexed_iter() {
                let id = id as usize;
                let (ux, uy, uz) = (id / (sy * sz), (id / sz) % sy, id % sz);
                let before = affine * Vector4::new(ux as f64, uy as f64, uz as f64, 1.0);
                let after = out.affine() * Vector4::new(x as f64, y as f64, z as f64, 1.0);
                report.max_world_error = report.max_world_error.max((before - after).abs().max());
            }
            let moved = apply_to_volume(c, &noisy).unwrap();
            let back = apply_to_volume(invert(c), &moved).unwrap();
            let same = back.dims() == noisy.dims()
                && back.data().iter().zip(noisy.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                report.round_trip_mismatches += 1;
            }
        }
    }
    report
}

// ---------------------------------------------------------------- gradients

type Build<T> = Box<dyn Fn(&mut Graph<T>, &[Var]) -> Var>;

struct Problem<T> {
    inputs: Vec<Tensor<T>>,
    build: Build<T>,
}

fn tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::from_f64c(rng.random_range(lo..hi))).collect()).unwrap()
}

/// Values at least `gap` apart, so small perturbations never change an argmax.
fn spaced<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v.into_iter().map(T::from_f64c).collect()).unwrap()
}

/// Values with magnitude in `[lo, hi]` and random sign.
fn away_from_zero<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            T::from_f64c(if rng.random_bool(0.5) { m } else { -m })
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn one_hot_rows<T: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Tensor<T> {
    let mut v = vec![T::zero(); n * 8];
    for r in 0..n {
        v[r * 8 + rng.random_range(0..8)] = T::one();
    }
    Tensor::new(vec![n, 8], v).unwrap()
}

fn problem<T: Scalar>(name: &str, rng: &mut ChaCha8Rng) -> Problem<T> {
    macro_rules! p {
        ($inputs:expr, |$g:ident, $v:ident| $body:expr) => {
            Problem { inputs: $inputs, build: Box::new(move |$g: &mut Graph<T>, $v: &[Var]| $body) }
        };
    }
    let rank = |rng: &mut ChaCha8Rng| -> Vec<usize> { (0..dim(rng, 1, 4)).map(|_| dim(rng, 1, 4)).collect() };
    match name {
        "add" | "sub" | "mul" => {
            let s = rank(rng);
            let ins = vec![tensor(rng, &s, -1.0, 1.0), tensor(rng, &s, -1.0, 1.0)];
            match name {
                "add" => p!(ins, |g, v| g.add(v[0], v[1]).unwrap()),
                "sub" => p!(ins, |g, v| g.sub(v[0], v[1]).unwrap()),
                _ => p!(ins, |g, v| g.mul(v[0], v[1]).unwrap()),
            }
        }
        "affine" => {
            let s = rank(rng);
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
            p!(vec![tensor(rng, &s, -1.0, 1.0)], |g, v| g.affine(v[0], a, b))
        }
        "add_bias" => {
            let (n, c) = (dim(rng, 1, 3), dim(rng, 1, 4));
            let mut s = vec![n, c];
            for _ in 0..rng.random_range(0..3) {
                s.push(dim(rng, 1, 4));
            }
            p!(vec![tensor(rng, &s, -1.0, 1.0), tensor(rng, &[c], -1.0, 1.0)], |g, v| g.add_bias(v[0], v[1]).unwrap())
        }
        "matmul" => {
            let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 6), dim(rng, 1, 5));
            p!(vec![tensor(rng, &[m, k], -1.0, 1.0), tensor(rng, &[k, n], -1.0, 1.0)], |g, v| g.matmul(v[0], v[1]).unwrap())
        }
        "conv2d" => {
            let (n, c, o) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            let k = [1, 3][rng.random_range(0..2)];
            let stride = dim(rng, 1, 2);
            let pad = rng.random_range(0..=k / 2);
            let (h, w) = (dim(rng, k, 6), dim(rng, k, 6));
            let ins = vec![tensor(rng, &[n, c, h, w], -1.0, 1.0), tensor(rng, &[o, c, k, k], -1.0, 1.0)];
            p!(ins, |g, v| g.conv2d(v[0], v[1], stride, pad).unwrap())
        }
        "max_pool2d" => {
            let (n, c) = (dim(rng, 1, 2), dim(rng, 1, 3));
            let k = dim(rng, 2, 3);
            let stride = dim(rng, 1, k);
            let (h, w) = (dim(rng, k, 7), dim(rng, k, 7));
            p!(vec![spaced(rng, &[n, c, h, w], 0.05)], |g, v| g.max_pool2d(v[0], k, stride).unwrap())
        }
        "relu" => {
            let s = rank(rng);
            p!(vec![away_from_zero(rng, &s, 0.1, 1.0)], |g, v| g.relu(v[0]))
        }
        "sigmoid" => {
            let s = rank(rng);
            p!(vec![tensor(rng, &s, -3.0, 3.0)], |g, v| g.sigmoid(v[0]))
        }
        "exp" => {
            let s = rank(rng);
            p!(vec![tensor(rng, &s, -2.0, 1.0)], |g, v| g.exp(v[0]))
        }
        "log" => {
            let s = rank(rng);
            p!(vec![tensor(rng, &s, 0.5, 2.0)], |g, v| g.log(v[0], 1e-12))
        }
        "softmax" => {
            let s = vec![dim(rng, 1, 4), dim(rng, 2, 8)];
            p!(vec![tensor(rng, &s, -2.0, 2.0)], |g, v| g.softmax(v[0]).unwrap())
        }
        "sum" => {
            let s = rank(rng);
            p!(vec![tensor(rng, &s, -1.0, 1.0)], |g, v| g.sum(v[0]))
        }
        "mean" => {
            let s = rank(rng);
            p!(vec![tensor(rng, &s, -1.0, 1.0)], |g, v| g.mean(v[0]))
        }
        "concat" => {
            let s = vec![dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
            let axis = rng.random_range(0..3);
            let mut s2 = s.clone();
            s2[axis] = dim(rng, 1, 3);
            p!(vec![tensor(rng, &s, -1.0, 1.0), tensor(rng, &s2, -1.0, 1.0)], |g, v| g.concat(v, axis).unwrap())
        }
        "reshape" => {
            let (a, b, c) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4));
            p!(vec![tensor(rng, &[a, b, c], -1.0, 1.0)], |g, v| {
                let r = g.reshape(v[0], &[a * b, c]).unwrap();
                g.flatten(r).unwrap()
            })
        }
        "upsample2d" => {
            let s = [dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4)];
            let f = dim(rng, 2, 3);
            p!(vec![tensor(rng, &s, -1.0, 1.0)], |g, v| g.upsample2d(v[0], f).unwrap())
        }
        "fit_spatial" => {
            let s = [dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 2, 5), dim(rng, 2, 5)];
            let (h, w) = (dim(rng, 1, 6), dim(rng, 1, 6));
            p!(vec![tensor(rng, &s, -1.0, 1.0)], |g, v| g.fit_spatial(v[0], h, w).unwrap())
        }
        "batch_norm2d" => {
            let (n, c, h, w) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 2, 4), dim(rng, 2, 4));
            let ins = vec![tensor(rng, &[n, c, h, w], -1.0, 1.0), tensor(rng, &[c], 0.5, 1.5), tensor(rng, &[c], -0.5, 0.5)];
            p!(ins, |g, v| g.batch_norm2d(v[0], v[1], v[2], 1e-5).unwrap())
        }
        "orientation_loss" => {
            // through a softmax, so perturbed inputs stay normalized
            let n = dim(rng, 1, 6);
            let target = one_hot_rows::<T>(rng, n);
            p!(vec![tensor(rng, &[n, 8], -2.0, 2.0)], |g, v| {
                let probs = g.softmax(v[0]).unwrap();
                let t = g.input(target.clone());
                orientation_loss(g, probs, t).unwrap()
            })
        }
        "segmentation_loss" => {
            let (n, h, w) = (dim(rng, 1, 2), dim(rng, 1, 4), dim(rng, 1, 4));
            let maps: Vec<Array2<u8>> = (0..n).map(|_| Array2::from_shape_fn((h, w), |_| rng.random_range(0..4u8))).collect();
            let target = seg_target::<T>(maps.iter().map(|m| m.view())).unwrap();
            let weights: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..2.0)).collect();
            p!(vec![tensor(rng, &[n, 4, h, w], 0.3, 0.7)], |g, v| segmentation_loss(g, v[0], &target, &weights).unwrap())
        }
        other => panic!("no gradient problem for {other}"),
    }
}

pub const GRADIENT_CASES: [&str; 23] = [
    "add",
    "sub",
    "mul",
    "affine",
    "add_bias",
    "matmul",
    "conv2d",
    "max_pool2d",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "sum",
    "mean",
    "concat",
    "reshape",
    "upsample2d",
    "fit_spatial",
    "batch_norm2d",
    "orientation_loss",
    "segmentation_loss",
    "orientation_loss+softmax",
];

fn projected<T: Scalar>(p: &Problem<T>, inputs: &[Tensor<T>], proj: &[f64]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = (p.build)(&mut g, &vars);
    g.value(out).data().iter().zip(proj).map(|(v, r)| v.to_f64().unwrap() * r).sum()
}

/// Relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` of the
/// gradient of `Σ R ⊙ f(inputs)` for a random fixed `R`, worst over inputs.
fn check_problem<T: Scalar>(p: &Problem<T>, rng: &mut ChaCha8Rng, h: f64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = p.inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = (p.build)(&mut g, &vars);
    let shape = g.shape(out).to_vec();
    let proj: Vec<f64> = (0..g.value(out).numel()).map(|_| T::from_f64c(rng.random_range(-1.0..1.0)).to_f64().unwrap()).collect();
    let r = g.input(Tensor::new(shape, proj.iter().map(|&v| T::from_f64c(v)).collect()).unwrap());
    let weighted = g.mul(out, r).unwrap();
    let loss = g.sum(weighted);
    let grads = g.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (i, &var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = grads.get(var).unwrap().iter().map(|v| v.to_f64().unwrap()).collect();
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut inputs = p.inputs.clone();
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            let up = x + T::from_f64c(h);
            let down = x - T::from_f64c(h);
            inputs[i].data_mut()[j] = up;
            let fu = projected(p, &inputs, &proj);
            inputs[i].data_mut()[j] = down;
            let fd = projected(p, &inputs, &proj);
            inputs[i].data_mut()[j] = x;
            numeric.push((fu - fd) / (up - down).to_f64().unwrap());
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

pub struct GradientResult {
    pub name: &'static str,
    pub shapes: usize,
    pub worst_rel_err: f64,
}

/// Central-difference check of every case on `shapes` random shapes.
pub fn gradient_suite<T: Scalar>(shapes: usize, h: f64, seed: u64) -> Vec<GradientResult> {
    GRADIENT_CASES
        .iter()
        .enumerate()
        .map(|(k, &name)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64) << 16);
            let mut worst = 0.0f64;
            for _ in 0..shapes {
                let e = match name {
                    "orientation_loss" => direct_orientation_check::<T>(&mut rng),
                    "orientation_loss+softmax" => check_problem(&problem::<T>("orientation_loss", &mut rng), &mut rng, h),
                    _ => check_problem(&problem::<T>(name, &mut rng), &mut rng, h),
                };
                worst = worst.max(e);
            }
            GradientResult { name, shapes, worst_rel_err: worst }
        })
        .collect()
}

/// The categorical loss differentiated with respect to the probabilities
/// themselves, perturbing one entry and its row partner in opposite
/// directions so rows stay normalized. The analytic directional derivative
/// is `g_j − g_k`.
fn direct_orientation_check<T: Scalar>(rng: &mut ChaCha8Rng) -> f64 {
    let n = dim(rng, 1, 6);
    let mut probs = Vec::with_capacity(n * 8);
    for _ in 0..n {
        let raw: Vec<f64> = (0..8).map(|_| rng.random_range(0.2..1.0)).collect();
        let s: f64 = raw.iter().sum();
        probs.extend(raw.iter().map(|v| v / s));
    }
    let target = one_hot_rows::<T>(rng, n);
    let to_t = |v: &[f64]| Tensor::new(vec![n, 8], v.iter().map(|&x| T::from_f64c(x)).collect()).unwrap();
    let mut g = Graph::new();
    let pv = g.leaf(to_t(&probs));
    let tv = g.input(target.clone());
    let loss = orientation_loss(&mut g, pv, tv).unwrap();
    let grads = g.backward(loss).unwrap();
    let grad: Vec<f64> = grads.get(pv).unwrap().iter().map(|v| v.to_f64().unwrap()).collect();
    // reference value of the loss in double precision from the scalar formula
    let tdata: Vec<f64> = target.data().iter().map(|v| v.to_f64().unwrap()).collect();
    let value = |p: &[f64]| -> f64 {
        (0..n).map(|r| orientation_loss_value(&p[r * 8..r * 8 + 8], &tdata[r * 8..r * 8 + 8]).unwrap()).sum::<f64>() / n as f64
    };
    let h = 1e-6;
    let (mut diff, mut scale_a, mut scale_n) = (0.0, 0.0, 0.0);
    for r in 0..n {
        for j in 0..8 {
            let k = (j + 1) % 8;
            let mut up = probs.clone();
            up[r * 8 + j] += h;
            up[r * 8 + k] -= h;
            let mut down = probs.clone();
            down[r * 8 + j] -= h;
            down[r * 8 + k] += h;
            let numeric = (value(&up) - value(&down)) / (2.0 * h);
            let analytic = grad[r * 8 + j] - grad[r * 8 + k];
            diff += (analytic - numeric).powi(2);
            scale_a += analytic * analytic;
            scale_n += numeric * numeric;
        }
    }
    let scale = f64::sqrt(scale_a).max(f64::sqrt(scale_n));
    if scale > 0.0 {
        diff.sqrt() / scale
    } else {
        0.0
    }
}

// ---------------------------------------------------------------- loss values

pub struct LossValues {
    pub uniform_orientation: f64,
    pub half_bce_per_class_pixel: f64,
    pub dice_identical: f64,
    pub dice_disjoint: f64,
    pub dice_half: f64,
}

pub fn loss_values() -> LossValues {
    let mut g = Graph::<f64>::new();
    let n = 3;
    let probs = g.input(Tensor::full(&[n, 8], 0.125));
    let mut t = vec![0.0; n * 8];
    for r in 0..n {
        t[r * 8 + (r * 3) % 8] = 1.0;
    }
    let target = g.input(Tensor::new(vec![n, 8], t).unwrap());
    let ol = orientation_loss(&mut g, probs, target).unwrap();

    let (h, w) = (5, 7);
    let maps: Vec<Array2<u8>> = (0..2).map(|i| Array2::from_shape_fn((h, w), |(y, x)| ((x + y + i) % 4) as u8)).collect();
    let seg_t = seg_target::<f64>(maps.iter().map(|m| m.view())).unwrap();
    let seg = g.input(Tensor::full(&[2, 4, h, w], 0.5));
    let sl = segmentation_loss(&mut g, seg, &seg_t, &[1.0; 4]).unwrap();

    let a: Vec<bool> = (0..64).map(|i| i % 3 == 0).collect();
    let not_a: Vec<bool> = a.iter().map(|v| !v).collect();
    let p: Vec<bool> = (0..40).map(|i| i < 20).collect();
    let q: Vec<bool> = (0..40).map(|i| (10..30).contains(&i)).collect();
    LossValues {
        uniform_orientation: g.value(ol).item(),
        // summed over the four class maps, averaged over pixels
        half_bce_per_class_pixel: g.value(sl).item() / 4.0,
        dice_identical: dice(&a, &a),
        dice_disjoint: dice(&a, &not_a),
        dice_half: dice(&p, &q),
    }
}

// ---------------------------------------------------------------- NIfTI

/// Hand-assembled NIfTI-1 file.
pub struct Fixture {
    pub bytes: Vec<u8>,
    pub voxels: Array3<f32>,
    pub affine: Matrix4<f64>,
}

fn put_i16(b: &mut [u8], off: usize, v: i16) {
    b[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(b: &mut [u8], off: usize, v: f32) {
    b[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

/// Header byte ranges a reader/writer must carry over untouched:
/// intent parameters and code, scaling, units, cal range, timing,
/// description, aux file, intent name.
pub const PASSTHROUGH: [(usize, usize); 5] = [(56, 70), (112, 120), (123, 140), (148, 252), (328, 344)];

fn quaternion_matrix(b: f64, c: f64, d: f64) -> Matrix3<f64> {
    let a = (1.0 - b * b - c * c - d * d).max(0.0).sqrt();
    Matrix3::new(
        a * a + b * b - c * c - d * d,
        2.0 * (b * c - a * d),
        2.0 * (b * d + a * c),
        2.0 * (b * c + a * d),
        a * a + c * c - b * b - d * d,
        2.0 * (c * d - a * b),
        2.0 * (b * d - a * c),
        2.0 * (c * d + a * b),
        a * a + d * d - c * c - b * b,
    )
}

/// Fixture `i` of a deterministic family covering the four voxel types, 2D
/// and 3D, sform, qform and bare headers, and an extension block.
pub fn nifti_fixture(i: usize) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
    let (code, size): (i16, usize) = [(2, 1), (4, 2), (512, 2), (16, 4)][i % 4];
    let planar = i % 5 == 0;
    let (sx, sy, sz) = (rng.random_range(2..12), rng.random_range(2..12), if planar { 1 } else { rng.random_range(2..5) });
    let ext_len = if i % 3 == 0 { 32 } else { 4 };
    let vox_offset = 348 + ext_len;
    let mut b = vec![0u8; vox_offset];
    b[0..4].copy_from_slice(&348i32.to_le_bytes());
    put_i16(&mut b, 40, if planar { 2 } else { 3 });
    put_i16(&mut b, 42, sx as i16);
    put_i16(&mut b, 44, sy as i16);
    put_i16(&mut b, 46, sz as i16);
    for k in 4..8 {
        put_i16(&mut b, 40 + 2 * k, 1);
    }
    put_f32(&mut b, 56, 0.25 * i as f32); // intent_p1
    put_i16(&mut b, 68, (i % 3) as i16); // intent_code
    put_i16(&mut b, 70, code);
    put_i16(&mut b, 72, (size * 8) as i16);
    let spacing = [rng.random_range(0.5..2.0f32), rng.random_range(0.5..2.0f32), rng.random_range(1.0..8.0f32)];
    put_f32(&mut b, 76, if i % 2 == 0 { 1.0 } else { -1.0 }); // qfac
    for k in 0..3 {
        put_f32(&mut b, 80 + 4 * k, spacing[k]);
    }
    put_f32(&mut b, 108, vox_offset as f32);
    put_f32(&mut b, 112, 1.0); // scl_slope
    put_f32(&mut b, 116, 0.0);
    b[123] = 10; // xyzt units: mm + s
    put_f32(&mut b, 124, 500.0); // cal_max
    put_f32(&mut b, 132, 0.5 + i as f32); // slice_duration
    let desc = format!("fixture {i} written by hand");
    b[148..148 + desc.len()].copy_from_slice(desc.as_bytes());
    b[228..235].copy_from_slice(b"aux.txt");
    let name = format!("intent{i}");
    b[328..328 + name.len()].copy_from_slice(name.as_bytes());
    b[344..348].copy_from_slice(b"n+1\0");
    if ext_len > 4 {
        b[348] = 1;
        b[352..356].copy_from_slice(&28i32.to_le_bytes());
        for (k, v) in b[356..vox_offset].iter_mut().enumerate() {
            *v = (k * 7 + i) as u8;
        }
    }

    let s = spacing.map(|v| v as f64);
    let qfac = if i % 2 == 0 { 1.0 } else { -1.0 };
    let affine = match i % 3 {
        0 => {
            put_i16(&mut b, 254, 1); // sform
            let mut m = Matrix4::identity();
            for r in 0..3 {
                for c in 0..4 {
                    let v = rng.random_range(-3.0..3.0f32) + if r == c { 4.0 } else { 0.0 };
                    put_f32(&mut b, 280 + 16 * r + 4 * c, v);
                    m[(r, c)] = v as f64;
                }
            }
            m
        }
        1 => {
            put_i16(&mut b, 252, 1); // qform only
            let q = [rng.random_range(-0.5..0.5f32), rng.random_range(-0.5..0.5f32), rng.random_range(-0.5..0.5f32)];
            let off = [rng.random_range(-90.0..90.0f32), rng.random_range(-90.0..90.0f32), rng.random_range(-90.0..90.0f32)];
            for k in 0..3 {
                put_f32(&mut b, 256 + 4 * k, q[k]);
                put_f32(&mut b, 268 + 4 * k, off[k]);
            }
            let r = quaternion_matrix(q[0] as f64, q[1] as f64, q[2] as f64);
            let scale = [s[0], s[1], qfac * if planar { 1.0 } else { s[2] }];
            let mut m = Matrix4::identity();
            for row in 0..3 {
                for col in 0..3 {
                    m[(row, col)] = r[(row, col)] * scale[col];
                }
                m[(row, 3)] = off[row] as f64;
            }
            m
        }
        _ => Matrix4::from_diagonal(&Vector4::new(s[0], s[1], if planar { 1.0 } else { s[2] }, 1.0)),
    };

    let mut voxels = Array3::<f32>::zeros((sx, sy, sz));
    for z in 0..sz {
        for y in 0..sy {
            for x in 0..sx {
                let v: f32 = match code {
                    2 => {
                        let v = rng.random_range(0..=255u8);
                        b.push(v);
                        v as f32
                    }
                    4 => {
                        let v: i16 = rng.random();
                        b.extend(v.to_le_bytes());
                        v as f32
                    }
                    512 => {
                        let v: u16 = rng.random();
                        b.extend(v.to_le_bytes());
                        v as f32
                    }
                    _ => {
                        let v = rng.random_range(-1e4..1e4f32);
                        b.extend(v.to_le_bytes());
                        v
                    }
                };
                voxels[[x, y, z]] = v;
            }
        }
    }
    Fixture { bytes: b, voxels, affine }
}

pub struct RoundTripReport {
    pub files: usize,
    pub voxel_mismatches: usize,
    pub max_affine_error: f64,
    pub passthrough_mismatches: usize,
    pub not_fixed_point: usize,
}

fn gzip(bytes: &[u8]) -> Vec<u8> {
    use std::io::Write;
    let mut e = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
    e.write_all(bytes).unwrap();
    e.finish().unwrap()
}

fn gunzip_if_needed(bytes: Vec<u8>) -> Vec<u8> {
    use std::io::Read;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&bytes[..]).read_to_end(&mut out).unwrap();
        out
    } else {
        bytes
    }
}

/// read → write → read on `n` fixtures (every fourth one gzipped).
pub fn nifti_round_trip(dir: &Path, n: usize) -> RoundTripReport {
    let mut rep = RoundTripReport { files: 0, voxel_mismatches: 0, max_affine_error: 0.0, passthrough_mismatches: 0, not_fixed_point: 0 };
    for i in 0..n {
        let fx = nifti_fixture(i);
        let ext = if i % 4 == 3 { "nii.gz" } else { "nii" };
        let src = dir.join(format!("fixture_{i:02}.{ext}"));
        std::fs::write(&src, if ext == "nii" { fx.bytes.clone() } else { gzip(&fx.bytes) }).unwrap();
        let first = dir.join(format!("copy_{i:02}.{ext}"));
        let second = dir.join(format!("copy2_{i:02}.{ext}"));

        let vol = read_volume(&src).unwrap();
        write_volume(&vol, &first).unwrap();
        let again = read_volume(&first).unwrap();
        write_volume(&again, &second).unwrap();
        rep.files += 1;

        let same_voxels = |v: &Volume| v.data().dim() == fx.voxels.dim() && v.data().iter().zip(&fx.voxels).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same_voxels(&vol) || !same_voxels(&again) {
            rep.voxel_mismatches += 1;
        }
        for v in [&vol, &again] {
            rep.max_affine_error = rep.max_affine_error.max((v.affine() - fx.affine).abs().max());
        }
        let written = gunzip_if_needed(std::fs::read(&first).unwrap());
        if PASSTHROUGH.iter().any(|&(a, b)| written[a..b] != fx.bytes[a..b]) || written[348..352] != fx.bytes[348..352] {
            rep.passthrough_mismatches += 1;
        }
        let ext_len = fx.bytes[108..112].try_into().map(f32::from_le_bytes).unwrap() as usize;
        if written[348..ext_len] != fx.bytes[348..ext_len] {
            rep.passthrough_mismatches += 1;
        }
        let twice = gunzip_if_needed(std::fs::read(&second).unwrap());
        if twice != written {
            rep.not_fixed_point += 1;
        }
    }
    rep
}
