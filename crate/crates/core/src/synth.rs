//! Seeded procedural scenes standing in for a natural-image corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::{Image, CHANNELS};

/// Smooth background, a few soft-edged shapes and a fine texture. Image `i`
/// of a corpus seeded with `seed` depends only on `(seed, i)`.
pub fn scene(height: usize, width: usize, seed: u64) -> Image<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A_0F0F_F0F0);
    let base: [f32; 3] = [rng.random(), rng.random(), rng.random()];
    let tilt: [f32; 3] = [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)];
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());

    struct Shape {
        cy: f32,
        cx: f32,
        r: f32,
        square: bool,
        color: [f32; 3],
    }
    let shapes: Vec<Shape> = (0..rng.random_range(2..6))
        .map(|_| Shape {
            cy: rng.random(),
            cx: rng.random(),
            r: rng.random_range(0.08..0.35),
            square: rng.random_bool(0.4),
            color: [rng.random(), rng.random(), rng.random()],
        })
        .collect();
    let freq: f32 = rng.random_range(4.0..18.0);
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let amp: f32 = rng.random_range(0.0..0.12);

    let mut data = vec![0.0f32; CHANNELS * height * width];
    for y in 0..height {
        for x in 0..width {
            let v = y as f32 / height as f32;
            let u = x as f32 / width as f32;
            let g = (u - 0.5) * ca + (v - 0.5) * sa;
            let mut px = [0f32; 3];
            for c in 0..CHANNELS {
                px[c] = base[c] + tilt[c] * g;
            }
            for s in &shapes {
                let (dy, dx) = (v - s.cy, u - s.cx);
                let d = if s.square { dy.abs().max(dx.abs()) } else { (dy * dy + dx * dx).sqrt() };
                let a = ((s.r - d) * 40.0).clamp(0.0, 1.0);
                for c in 0..CHANNELS {
                    px[c] = px[c] * (1.0 - a) + s.color[c] * a;
                }
            }
            let t = amp * ((u * freq + phase).sin() * (v * freq * 0.7).cos());
            for c in 0..CHANNELS {
                data[(c * height + y) * width + x] = (px[c] + t).clamp(0.0, 1.0);
            }
        }
    }
    Image::new(height, width, data).expect("consistent buffer")
}

/// `n` scenes from a corpus seed.
pub fn corpus(n: usize, height: usize, width: usize, seed: u64) -> Vec<Image<f32>> {
    (0..n).map(|i| scene(height, width, item_seed(seed, i))).collect()
}

pub fn item_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}
