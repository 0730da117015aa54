//! Correlation oracles.

use cannula_core::frame::GrayImage;
use cannula_core::perception::{ncc_map, Template};
use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct floating-point evaluation of the normalised correlation with
/// explicit means, one window at a time.
pub fn brute_force(img: &GrayImage, tpl: &GrayImage, x0: u32, y0: u32) -> f64 {
    let n = (tpl.width * tpl.height) as f64;
    let mut a_mean = 0.0;
    let mut b_mean = 0.0;
    for y in 0..tpl.height {
        for x in 0..tpl.width {
            a_mean += tpl.get(x, y) as f64;
            b_mean += img.get(x0 + x, y0 + y) as f64;
        }
    }
    a_mean /= n;
    b_mean /= n;
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for y in 0..tpl.height {
        for x in 0..tpl.width {
            let a = tpl.get(x, y) as f64 - a_mean;
            let b = img.get(x0 + x, y0 + y) as f64 - b_mean;
            num += a * b;
            da += a * a;
            db += b * b;
        }
    }
    if db == 0.0 {
        0.0
    } else {
        num / (da.sqrt() * db.sqrt())
    }
}

pub fn random_image(w: u32, h: u32, rng: &mut ChaCha8Rng, levels: u8) -> GrayImage {
    let mut img = GrayImage::new(w, h);
    for p in img.pixels.iter_mut() {
        *p = rng.random_range(0..=levels);
    }
    img
}

/// Worst gap between `ncc_map` and the brute-force score over every
/// template size up to 12×12 in random images up to 24×24.
pub fn worst_exhaustive_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for tw in 1..=12u32 {
        for th in 1..=12u32 {
            let iw = rng.random_range(tw..=24);
            let ih = rng.random_range(th..=24);
            // Few gray levels so flat windows actually occur.
            let levels = if (tw + th) % 3 == 0 { 1 } else { 255 };
            let img = random_image(iw, ih, &mut rng, levels);
            let patch = random_image(tw, th, &mut rng, 255);
            let Ok(tpl) = Template::new(patch.clone(), Vector2::zeros()) else {
                continue;
            };
            let res = ncc_map(&img, &tpl).unwrap();
            assert_eq!((res.width, res.height), (iw - tw + 1, ih - th + 1));
            for y in 0..res.height {
                for x in 0..res.width {
                    worst = worst.max((res.at(x, y) - brute_force(&img, &patch, x, y)).abs());
                }
            }
        }
    }
    worst
}
