use alloc::vec::Vec;

use super::Image;

fn taps(out: usize, inp: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling with half-pixel centers.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Image {
    resize_region(img, 0, 0, img.height, img.width, out_h, out_w)
}

/// Resamples the `h × w` window at `(top, left)` to `out_h × out_w`.
pub(crate) fn resize_region(img: &Image, top: usize, left: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Image {
    let (ty, tx) = (taps(out_h, h), taps(out_w, w));
    let mut data = Vec::with_capacity(img.channels * out_h * out_w);
    for c in 0..img.channels {
        let plane = img.plane(c);
        let at = |y: usize, x: usize| plane[(top + y) * img.width + left + x];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let a = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let b = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                data.push(a * (1.0 - fy) + b * fy);
            }
        }
    }
    Image { channels: img.channels, height: out_h, width: out_w, data }
}
