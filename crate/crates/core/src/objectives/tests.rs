use super::*;
use crate::testutil::{random_image, rng};
use candle_core::Var;
use proptest::prelude::*;
use rand::Rng as _;

/// Per-pixel loop over the clipped window, written independently of the
/// summed-area implementation.
fn sliding_oracle(img: &ImageTensor, window: usize, eps: f64) -> Vec<f64> {
    let (h, w) = (img.height() as i64, img.width() as i64);
    let lo = (window / 2) as i64;
    let hi = window as i64 - 1 - lo;
    let mut out = vec![0.0; (h * w * 3) as usize];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut vals = Vec::new();
                for yy in (y - lo).max(0)..=(y + hi).min(h - 1) {
                    for xx in (x - lo).max(0)..=(x + hi).min(w - 1) {
                        vals.push(img.get(yy as usize, xx as usize, c) as f64);
                    }
                }
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                let p = img.get(y as usize, x as usize, c) as f64;
                out[((y * w + x) * 3 + c as i64) as usize] = (p - mean) / (var.sqrt() + eps);
            }
        }
    }
    out
}

fn nonoverlap_oracle(img: &ImageTensor, patch: usize, eps: f64) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let mut out = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let (py, px) = (y / patch * patch, x / patch * patch);
                let vals: Vec<f64> = (py..py + patch)
                    .flat_map(|yy| (px..px + patch).map(move |xx| (yy, xx)))
                    .map(|(yy, xx)| img.get(yy, xx, c) as f64)
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                out[(y * w + x) * 3 + c] = (img.get(y, x, c) as f64 - mean) / (var.sqrt() + eps);
            }
        }
    }
    out
}

fn close(a: &[f64], b: &[f64], rel: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= rel * y.abs().max(1.0))
}

#[test]
fn constant_image_normalizes_to_zero() {
    let img = ImageTensor::filled(12, 9, [0.3, 0.7, 0.1]).unwrap();
    for window in [1, 3, 8, 30] {
        let t = sliding_window_normalize(&img, window, DEFAULT_EPS).unwrap();
        assert!(t.values.iter().all(|&v| v == 0.0));
    }
    let t = nonoverlap_normalize(&ImageTensor::filled(8, 8, [0.9, 0.2, 0.4]).unwrap(), 4, DEFAULT_EPS).unwrap();
    assert!(t.values.iter().all(|&v| v == 0.0));
}

#[test]
fn ramp_with_window_three() {
    // Single varying channel: value = (4y + x) / 15.
    let mut data = Vec::new();
    for y in 0..4 {
        for x in 0..4 {
            let v = (4 * y + x) as f32 / 15.0;
            data.extend([v, 0.0, 0.0]);
        }
    }
    let img = ImageTensor::new(4, 4, data).unwrap();
    let t = sliding_window_normalize(&img, 3, 1e-6).unwrap();
    let oracle = sliding_oracle(&img, 3, 1e-6);
    assert!(close(&t.values, &oracle, 1e-9));
    // Interior pixel (1,1): window is the 3×3 block around it, whose mean is the pixel itself.
    assert!(t.get(1, 1, 0).abs() < 1e-6);
}

#[test]
fn sliding_matches_oracle_on_random_images() {
    let mut r = rng(20);
    for _ in 0..20 {
        let (h, w) = (r.random_range(1..=16), r.random_range(1..=16));
        let data = (0..h * w * 3).map(|_| r.random::<f32>()).collect();
        let img = ImageTensor::new(h, w, data).unwrap();
        for window in [3, 8, 2 * h.max(w)] {
            let t = sliding_window_normalize(&img, window, 1e-6).unwrap();
            assert!(close(&t.values, &sliding_oracle(&img, window, 1e-6), 1e-6));
        }
    }
}

#[test]
fn full_window_is_global_standardization() {
    let img = random_image(10, &mut rng(21));
    let t = sliding_window_normalize(&img, 20, 1e-6).unwrap();
    let g = nonoverlap_normalize(&img, 10, 1e-6).unwrap();
    assert!(close(&t.values, &g.values, 1e-9));
}

#[test]
fn nonoverlap_matches_oracle() {
    let mut r = rng(22);
    for _ in 0..10 {
        let img = random_image(8, &mut r);
        let t = nonoverlap_normalize(&img, 4, 1e-6).unwrap();
        assert!(close(&t.values, &nonoverlap_oracle(&img, 4, 1e-6), 1e-9));
    }
    assert!(nonoverlap_normalize(&random_image(8, &mut r), 3, 1e-6).is_err());
}

#[test]
fn renormalizing_a_standardized_image_is_stable() {
    let img = random_image(8, &mut rng(23));
    let t = sliding_window_normalize(&img, 16, 1e-6).unwrap();
    // Map standardized values back into [0, 1] with a shared affine map; the
    // second standardization must undo it.
    let (lo, hi) = t.values.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let data = t.values.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect();
    let again = sliding_window_normalize(&ImageTensor::new(8, 8, data).unwrap(), 16, 1e-6).unwrap();
    assert!(close(&again.values, &t.values, 1e-4));
}

#[test]
fn respix_examples() {
    let dev = Device::Cpu;
    let a = Tensor::from_vec(vec![0.5f64, -1.0, 2.0, 3.0], (2, 2), &dev).unwrap();
    assert_eq!(crate::nn::scalar(&respix_loss(&a, &a, 1.0, 1.0).unwrap()).unwrap(), 0.0);
    let b = (&a + 1.0).unwrap();
    let l = crate::nn::scalar(&respix_loss(&b, &a, 1.0, 1.0).unwrap()).unwrap();
    assert!((l - 2.0).abs() < 1e-12);
    let c = Tensor::zeros((4,), DType::F64, &dev).unwrap();
    assert!(respix_loss(&a, &c, 1.0, 1.0).is_err());
}

#[test]
fn revdet_examples() {
    let dev = Device::Cpu;
    let z = Tensor::zeros((2, 2), DType::F64, &dev).unwrap();
    let f = Tensor::from_vec(vec![1.0f64, 0.0, 0.0, 1.0], (2, 2), &dev).unwrap();
    let l = crate::nn::scalar(&revdet_loss(&z, &f).unwrap()).unwrap();
    assert!((l - 2f64.ln()).abs() < 1e-12);
    let sat = Tensor::from_vec(vec![40.0f64, -40.0, -40.0, 40.0], (2, 2), &dev).unwrap();
    assert!(crate::nn::scalar(&revdet_loss(&sat, &f).unwrap()).unwrap() < 1e-10);
    assert!(revdet_loss(&z, &Tensor::zeros((4,), DType::F64, &dev).unwrap()).is_err());
}

fn bce_oracle(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&x, &y)| {
            let p = 1.0 / (1.0 + (-x).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / x.len() as f64
}

fn l1l2_oracle(p: &[f64], t: &[f64]) -> f64 {
    let n = p.len() as f64;
    p.iter().zip(t).map(|(a, b)| (a - b).abs() + (a - b).powi(2)).sum::<f64>() / n
}

#[test]
fn revdet_hand_case() {
    let dev = Device::Cpu;
    let x = vec![0.3, -1.2, 2.5, 0.0];
    let y = vec![1.0, 0.0, 0.0, 1.0];
    let l = revdet_loss(
        &Tensor::from_vec(x.clone(), (2, 2), &dev).unwrap(),
        &Tensor::from_vec(y.clone(), (2, 2), &dev).unwrap(),
    )
    .unwrap();
    assert!((crate::nn::scalar(&l).unwrap() - bce_oracle(&x, &y)).abs() < 1e-12);
}

fn fd_check(loss: impl Fn(&Tensor) -> Tensor, oracle: impl Fn(&[f64]) -> f64, x: Vec<f64>, skip: impl Fn(usize) -> bool) {
    let var = Var::from_vec(x.clone(), x.len(), &Device::Cpu).unwrap();
    let g = loss(var.as_tensor()).backward().unwrap().get(var.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
    let h = 1e-6;
    for i in 0..x.len() {
        if skip(i) {
            continue;
        }
        let mut a = x.clone();
        let mut b = x.clone();
        a[i] += h;
        b[i] -= h;
        let fd = (oracle(&a) - oracle(&b)) / (2.0 * h);
        assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-4), "coord {i}: fd {fd} vs {}", g[i]);
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut r = rng(24);
    for _ in 0..20 {
        let n = 12;
        let t: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let p: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let tt = Tensor::from_vec(t.clone(), n, &Device::Cpu).unwrap();
        let tc = t.clone();
        fd_check(
            |x| respix_loss(x, &tt, 1.0, 1.0).unwrap(),
            |x| l1l2_oracle(x, &tc),
            p.clone(),
            |i| (p[i] - t[i]).abs() < 1e-3,
        );
        let y: Vec<f64> = (0..n).map(|_| f64::from(r.random_bool(0.5))).collect();
        let yt = Tensor::from_vec(y.clone(), n, &Device::Cpu).unwrap();
        let logits: Vec<f64> = (0..n).map(|_| r.random_range(-4.0..4.0)).collect();
        fd_check(|x| revdet_loss(x, &yt).unwrap(), |x| bce_oracle(x, &y), logits, |_| false);
    }
}

proptest! {
    #[test]
    fn losses_are_permutation_invariant(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = 10;
        let p: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| f64::from(r.random_bool(0.5))).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let ap = |v: &[f64]| Tensor::from_vec(perm.iter().map(|&i| v[i]).collect::<Vec<_>>(), n, &Device::Cpu).unwrap();
        let t0 = |v: &[f64]| Tensor::from_vec(v.to_vec(), n, &Device::Cpu).unwrap();
        let a = crate::nn::scalar(&respix_loss(&t0(&p), &t0(&t), 1.0, 1.0).unwrap()).unwrap();
        let b = crate::nn::scalar(&respix_loss(&ap(&p), &ap(&t), 1.0, 1.0).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        let a = crate::nn::scalar(&revdet_loss(&t0(&p), &t0(&y)).unwrap()).unwrap();
        let b = crate::nn::scalar(&revdet_loss(&ap(&p), &ap(&y)).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn revdet_is_midpoint_convex(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = 6;
        let y: Vec<f64> = (0..n).map(|_| f64::from(r.random_bool(0.5))).collect();
        let a: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let m: Vec<f64> = a.iter().zip(&b).map(|(x, z)| 0.5 * (x + z)).collect();
        let yt = Tensor::from_vec(y, n, &Device::Cpu).unwrap();
        let f = |v: &[f64]| crate::nn::scalar(&revdet_loss(&Tensor::from_vec(v.to_vec(), n, &Device::Cpu).unwrap(), &yt).unwrap()).unwrap();
        prop_assert!(f(&m) <= 0.5 * (f(&a) + f(&b)) + 1e-12);
    }
}

#[test]
fn target_tensor_layout() {
    let img = random_image(8, &mut rng(25));
    let t = raw_target(&img);
    let x = t.to_tensor(&Device::Cpu, DType::F64).unwrap();
    assert_eq!(x.dims(), &[3, 8, 8]);
    let v = x.to_vec3::<f64>().unwrap();
    assert_eq!(v[2][3][5], img.get(3, 5, 2) as f64);
}
