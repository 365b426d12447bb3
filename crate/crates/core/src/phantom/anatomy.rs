use super::PhantomSpec;
use crate::rng::SeededRng;

/// Tissue classes of the label map; intensity tables skip `Background`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Tissue {
    Background = 0,
    Fat = 1,
    Muscle = 2,
    Organ = 3,
    Fluid = 4,
    Vessel = 5,
    Lesion = 6,
}

pub const TISSUES: [&str; 6] = ["fat", "muscle", "organ", "fluid", "vessel", "lesion"];

/// Label map shared by all series of a study.
#[derive(Clone, Debug)]
pub struct Anatomy {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub labels: Vec<u8>,
    pub lesions: usize,
}

#[derive(Clone, Copy)]
struct Ellipsoid {
    c: [f64; 3],
    r: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|k| ((p[k] - self.c[k]) / self.r[k]).powi(2)).sum::<f64>() <= 1.0
    }
}

impl Anatomy {
    pub fn generate(spec: &PhantomSpec, rng: &mut SeededRng) -> Self {
        let nxy = rng.range_inclusive(spec.shape_xy[0], spec.shape_xy[1]);
        let nz = rng.range_inclusive(spec.shape_z[0], spec.shape_z[1]);
        let sxy = rng.range(spec.spacing_xy[0], spec.spacing_xy[1]);
        let sz = rng.range(spec.spacing_z[0], spec.spacing_z[1]);
        let dims = [nxy, nxy, nz];
        let spacing = [sxy, sxy, sz];
        let origin: [f64; 3] = std::array::from_fn(|k| -((dims[k] - 1) as f64) * spacing[k] / 2.0);
        let fov = nxy as f64 * sxy;
        let zlen = nz as f64 * sz;

        let a = fov * rng.range(0.36, 0.44);
        let b = fov * rng.range(0.26, 0.34);
        let fat_rim = rng.range(6.0, 16.0);
        let muscle_rim = rng.range(5.0, 10.0);
        let taper = rng.range(0.0, 0.15);

        let liver = Ellipsoid {
            c: [-0.35 * a, 0.05 * b, rng.range(-0.1, 0.1) * zlen],
            r: [0.45 * a, 0.6 * b, zlen * rng.range(0.5, 0.9)],
        };
        let spleen = Ellipsoid {
            c: [0.55 * a, 0.1 * b, 0.0],
            r: [0.2 * a, 0.3 * b, zlen * 0.4],
        };
        let kidneys = [-1.0, 1.0].map(|s| Ellipsoid {
            c: [s * 0.4 * a, -0.45 * b, rng.range(-0.2, 0.2) * zlen],
            r: [0.14 * a, 0.22 * b, zlen * 0.3],
        });
        let spine = Ellipsoid {
            c: [0.0, -0.72 * b, 0.0],
            r: [0.38 * a, 0.22 * b, f64::INFINITY],
        };
        let fluid: Vec<Ellipsoid> = (0..rng.range_inclusive(1, 3))
            .map(|_| {
                let r = rng.range(8.0, 20.0);
                Ellipsoid {
                    c: [rng.range(-0.5, 0.5) * a, rng.range(-0.3, 0.5) * b, rng.range(-0.3, 0.3) * zlen],
                    r: [r, r * rng.range(0.7, 1.3), r * rng.range(0.8, 1.5)],
                }
            })
            .collect();
        let vessels: Vec<([f64; 2], f64)> = [(-0.1, 0.25), (0.1, 0.2)]
            .iter()
            .map(|&(x, y)| ([x * a, -y * b], rng.range(6.0, 11.0)))
            .collect();
        let n_lesions = rng.range_inclusive(spec.lesion_count[0], spec.lesion_count[1]);
        let lesions: Vec<Ellipsoid> = (0..n_lesions)
            .map(|_| {
                let host = if rng.uniform() < 0.7 { liver } else { kidneys[rng.below(2)] };
                let r = rng.range(spec.lesion_radius_mm[0], spec.lesion_radius_mm[1]);
                let u: [f64; 3] = std::array::from_fn(|_| rng.range(-0.6, 0.6));
                Ellipsoid {
                    c: std::array::from_fn(|k| host.c[k] + u[k] * host.r[k].min(zlen)),
                    r: [r, r, r],
                }
            })
            .collect();

        let mut labels = vec![Tissue::Background as u8; dims.iter().product()];
        let mut i = 0;
        for z in 0..nz {
            let pz = origin[2] + z as f64 * sz;
            let scale = 1.0 - taper * (pz / (zlen / 2.0)).powi(2);
            for y in 0..nxy {
                let py = origin[1] + y as f64 * sxy;
                for x in 0..nxy {
                    let px = origin[0] + x as f64 * sxy;
                    let p = [px, py, pz];
                    let (ea, eb) = (a * scale, b * scale);
                    let r = ((px / ea).powi(2) + (py / eb).powi(2)).sqrt();
                    let depth = (1.0 - r) * ea.min(eb);
                    let t = if r > 1.0 {
                        Tissue::Background
                    } else if depth < fat_rim {
                        Tissue::Fat
                    } else if depth < fat_rim + muscle_rim || spine.contains(p) {
                        Tissue::Muscle
                    } else if lesions.iter().any(|e| e.contains(p)) {
                        Tissue::Lesion
                    } else if vessels.iter().any(|(c, rad)| (px - c[0]).hypot(py - c[1]) <= *rad) {
                        Tissue::Vessel
                    } else if fluid.iter().any(|e| e.contains(p)) {
                        Tissue::Fluid
                    } else if liver.contains(p) || spleen.contains(p) || kidneys.iter().any(|k| k.contains(p)) {
                        Tissue::Organ
                    } else {
                        Tissue::Fat
                    };
                    labels[i] = t as u8;
                    i += 1;
                }
            }
        }
        Self {
            dims,
            spacing,
            origin,
            labels,
            lesions: n_lesions,
        }
    }

    pub fn count(&self, t: Tissue) -> usize {
        self.labels.iter().filter(|&&l| l == t as u8).count()
    }
}
