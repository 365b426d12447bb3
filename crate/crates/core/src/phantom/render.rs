use super::anatomy::{Anatomy, Tissue};
use super::{ClassSignature, PhantomSpec};
use crate::ingestion::{AxisCodes, SeriesVolume};
use crate::rng::SeededRng;

/// Smooth multiplicative field: Gaussian values on a coarse lattice with
/// the given correlation length (voxels in-plane, scaled by spacing in z),
/// trilinearly interpolated.
fn texture(dims: [usize; 3], spacing: [f64; 3], granularity: f64, rng: &mut SeededRng) -> Vec<f64> {
    let step = [granularity, granularity, (granularity * spacing[0] / spacing[2]).max(1.0)];
    let coarse: [usize; 3] = std::array::from_fn(|k| (dims[k] as f64 / step[k]).ceil() as usize + 2);
    let grid: Vec<f64> = (0..coarse.iter().product::<usize>()).map(|_| rng.normal()).collect();
    let at = |x: usize, y: usize, z: usize| grid[x + coarse[0] * (y + coarse[1] * z)];
    let axis = |k: usize, i: usize| {
        let f = i as f64 / step[k];
        let i0 = (f.floor() as usize).min(coarse[k] - 2);
        (i0, f - i0 as f64)
    };
    let mut out = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[2] {
        let (z0, fz) = axis(2, z);
        for y in 0..dims[1] {
            let (y0, fy) = axis(1, y);
            for x in 0..dims[0] {
                let (x0, fx) = axis(0, x);
                let mut v = 0.0;
                for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
                    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                            v += wz * wy * wx * at(x0 + dx, y0 + dy, z0 + dz);
                        }
                    }
                }
                out.push(v);
            }
        }
    }
    out
}

/// Per-tissue mean intensities of a signature at an optional b-value.
pub(super) fn tissue_means(sig: &ClassSignature, b: Option<f64>) -> [f64; 6] {
    let mut t = sig.tissue;
    t[Tissue::Lesion as usize - 1] *= sig.lesion_multiplier;
    if let (Some(d), Some(b)) = (&sig.diffusion, b) {
        for (v, adc) in t.iter_mut().zip(d.adc) {
            *v *= (-b * adc).exp();
        }
    }
    t
}

pub(super) fn render(
    anatomy: &Anatomy,
    sig: &ClassSignature,
    b: Option<f64>,
    spec: &PhantomSpec,
    rng: &mut SeededRng,
) -> SeriesVolume {
    let means = tissue_means(sig, b);
    let gain = rng.range(spec.gain[0], spec.gain[1]);
    let scale = means.iter().cloned().fold(0.0, f64::max).max(1e-9);
    let sigma = sig.noise_sigma * scale;
    let field = texture(anatomy.dims, anatomy.spacing, sig.texture_granularity, rng);
    let voxels = anatomy
        .labels
        .iter()
        .zip(&field)
        .map(|(&l, &f)| {
            let clean = if l == Tissue::Background as u8 {
                sig.background_mean + sig.background_sigma * rng.normal()
            } else {
                means[l as usize - 1] * (1.0 + sig.texture_amplitude * f)
            }
            .max(0.0)
                * gain;
            let v = if sig.rician {
                let (n1, n2) = (rng.normal(), rng.normal());
                ((clean + sigma * n1).powi(2) + (sigma * n2).powi(2)).sqrt()
            } else if l == Tissue::Background as u8 {
                clean
            } else {
                (clean + sigma * rng.normal()).max(0.0)
            };
            v as f32 as f64
        })
        .collect();
    SeriesVolume::from_parts(anatomy.dims, anatomy.spacing, anatomy.origin, AxisCodes::RAS, voxels)
}
