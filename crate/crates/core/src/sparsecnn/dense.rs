//! Dense-grid reference convolutions. Arrays are `[w][h][d][channel]` over
//! an `r^3` grid, with zeros standing in for inactive sites.

use super::rulebook::{offset, ConvVariant, KERNEL_VOLUME};

fn at(r: usize, p: [i64; 3]) -> Option<usize> {
    p.iter()
        .all(|&v| v >= 0 && (v as usize) < r)
        .then(|| ((p[0] as usize * r + p[1] as usize) * r) + p[2] as usize)
}

fn unflat(r: usize, i: usize) -> [i64; 3] {
    [(i / (r * r)) as i64, (i / r % r) as i64, (i % r) as i64]
}

/// Output resolution of `variant` on an `r^3` input.
pub fn output_resolution(variant: ConvVariant, r: usize) -> usize {
    match variant {
        ConvVariant::Submanifold => r,
        ConvVariant::Strided => r / 2,
        ConvVariant::Transposed => r * 2,
    }
}

/// Dense 3x3x3 convolution plus bias, no activation. Weights are
/// `[27][cin][cout]`. Strided outputs read `2o + 1 + delta`; transposed
/// outputs receive every `(o, delta)` with `2o + 1 + delta` equal to them.
pub fn dense_conv(variant: ConvVariant, r: usize, x: &[f64], cin: usize, cout: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let ro = output_resolution(variant, r);
    let mut out: Vec<f64> = (0..ro * ro * ro).flat_map(|_| b.iter().copied()).collect();
    let mut madd = |o: usize, i: usize, k: usize| {
        for ci in 0..cin {
            let xv = x[i * cin + ci];
            for co in 0..cout {
                out[o * cout + co] += xv * w[(k * cin + ci) * cout + co];
            }
        }
    };
    match variant {
        ConvVariant::Submanifold | ConvVariant::Strided => {
            let s = if variant == ConvVariant::Strided { 2 } else { 1 };
            let c = if variant == ConvVariant::Strided { 1 } else { 0 };
            for o in 0..ro * ro * ro {
                let p = unflat(ro, o);
                for k in 0..KERNEL_VOLUME {
                    let d = offset(k);
                    if let Some(i) = at(r, [s * p[0] + c + d[0], s * p[1] + c + d[1], s * p[2] + c + d[2]]) {
                        madd(o, i, k);
                    }
                }
            }
        }
        ConvVariant::Transposed => {
            for i in 0..r * r * r {
                let p = unflat(r, i);
                for k in 0..KERNEL_VOLUME {
                    let d = offset(k);
                    if let Some(o) = at(ro, [2 * p[0] + 1 + d[0], 2 * p[1] + 1 + d[1], 2 * p[2] + 1 + d[2]]) {
                        madd(o, i, k);
                    }
                }
            }
        }
    }
    out
}
