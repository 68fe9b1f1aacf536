use super::Image;

/// ITU-R 601 luma, `H × W` row-major.
pub fn luminance(img: &Image) -> Vec<f64> {
    img.data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Response of the 4-neighbour Laplacian `[[0,1,0],[1,-4,1],[0,1,0]]` on
/// luminance with replicate-padded borders.
pub fn laplacian_response(img: &Image) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let l = luminance(img);
    let at = |y: isize, x: isize| l[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            out.push(at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x));
        }
    }
    out
}

/// Population variance of [`laplacian_response`]; the image-complexity score.
pub fn laplacian_variance(img: &Image) -> f64 {
    let r = laplacian_response(img);
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}
