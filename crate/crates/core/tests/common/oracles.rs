//! Brute-force reference implementations used by the property and
//! acceptance suites.

use mriseq::ingestion::SeriesVolume;
use mriseq::model::ModelConfig;
use mriseq::rng::SeededRng;

/// Trilinear resampling evaluated voxel by voxel from the 8 surrounding
/// input samples; output voxel `j` sits at `j * s_out` mm from voxel 0.
pub fn trilinear_oracle(v: &SeriesVolume, target: [f64; 3]) -> ([usize; 3], Vec<f64>) {
    let dims = v.dims();
    let sp = v.spacing();
    let out: [usize; 3] = std::array::from_fn(|a| ((dims[a] as f64 * sp[a] / target[a]).round() as usize).max(1));
    let mut data = Vec::with_capacity(out.iter().product());
    for k in 0..out[2] {
        for j in 0..out[1] {
            for i in 0..out[0] {
                let idx = [i, j, k];
                let u: [f64; 3] = std::array::from_fn(|a| (idx[a] as f64 * target[a] / sp[a]).clamp(0.0, (dims[a] - 1) as f64));
                let mut acc = 0.0;
                for corner in 0..8 {
                    let mut w = 1.0;
                    let mut c = [0usize; 3];
                    for a in 0..3 {
                        let lo = u[a].floor();
                        let f = u[a] - lo;
                        let upper = corner >> a & 1 == 1;
                        c[a] = if upper { (lo as usize + 1).min(dims[a] - 1) } else { lo as usize };
                        w *= if upper { f } else { 1.0 - f };
                    }
                    acc += w * v.get(c[0], c[1], c[2]);
                }
                data.push(acc);
            }
        }
    }
    (out, data)
}

/// Percentile by full sort and linear interpolation between ranks.
pub fn percentile_oracle(values: &[f64], p: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (s.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (rank - lo as f64)
}

pub fn normalize_oracle(values: &[f64], p_lo: f64, p_hi: f64) -> Vec<f64> {
    let a = percentile_oracle(values, p_lo);
    let b = percentile_oracle(values, p_hi);
    values
        .iter()
        .map(|&x| if b > a { ((x - a) / (b - a)).clamp(0.0, 1.0) } else { 0.0 })
        .collect()
}

pub fn random_volume(rng: &mut SeededRng, max_dim: usize) -> SeriesVolume {
    let dims: [usize; 3] = std::array::from_fn(|_| rng.range_inclusive(1, max_dim));
    let spacing: [f64; 3] = std::array::from_fn(|_| rng.range(0.5, 4.0));
    let n = dims.iter().product();
    let voxels = (0..n).map(|_| rng.range(-100.0, 1000.0)).collect();
    SeriesVolume::new(dims, spacing, [0.0; 3], mriseq::ingestion::AxisCodes::RAS, voxels).unwrap()
}

/// Per-class precision/recall/F1 recomputed from the raw (true, predicted)
/// pairs, plus accuracy and support-weighted and macro averages.
pub struct BruteMetrics {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub support: Vec<usize>,
    pub weighted: [f64; 3],
    pub macro_avg: [f64; 3],
}

pub fn brute_metrics(pairs: &[(usize, usize)], classes: usize) -> BruteMetrics {
    let mut precision = vec![0.0; classes];
    let mut recall = vec![0.0; classes];
    let mut f1 = vec![0.0; classes];
    let mut support = vec![0; classes];
    for c in 0..classes {
        let tp = pairs.iter().filter(|&&(t, p)| t == c && p == c).count() as f64;
        let predicted = pairs.iter().filter(|&&(_, p)| p == c).count() as f64;
        let actual = pairs.iter().filter(|&&(t, _)| t == c).count() as f64;
        support[c] = actual as usize;
        precision[c] = if predicted > 0.0 { tp / predicted } else { 0.0 };
        recall[c] = if actual > 0.0 { tp / actual } else { 0.0 };
        f1[c] = if precision[c] + recall[c] > 0.0 {
            2.0 * precision[c] * recall[c] / (precision[c] + recall[c])
        } else {
            0.0
        };
    }
    let n = pairs.len() as f64;
    let accuracy = pairs.iter().filter(|(t, p)| t == p).count() as f64 / n;
    let wavg = |v: &[f64]| v.iter().zip(&support).map(|(x, &s)| x * s as f64).sum::<f64>() / n;
    let mavg = |v: &[f64]| v.iter().sum::<f64>() / classes as f64;
    BruteMetrics {
        accuracy,
        weighted: [wavg(&precision), wavg(&recall), wavg(&f1)],
        macro_avg: [mavg(&precision), mavg(&recall), mavg(&f1)],
        precision,
        recall,
        f1,
        support,
    }
}

/// Independent parameter count: conv weights, norm affine pairs and the
/// linear head, summed layer by layer from the architecture description.
pub fn densenet_param_oracle(cfg: &ModelConfig) -> usize {
    let bn = |c: usize| 2 * c;
    let g = cfg.growth_rate;
    let mut total = cfg.in_channels * cfg.init_features * 343 + bn(cfg.init_features);
    let mut c = cfg.init_features;
    for (i, &n) in cfg.block_layers.iter().enumerate() {
        for _ in 0..n {
            total += bn(c) + c * 4 * g + bn(4 * g) + 4 * g * g * 27;
            c += g;
        }
        if i + 1 < cfg.block_layers.len() {
            total += bn(c) + c * (c / 2);
            c /= 2;
        }
    }
    total + bn(c) + c * cfg.num_classes + cfg.num_classes
}

pub fn resnet_param_oracle(cfg: &ModelConfig) -> usize {
    let bn = |c: usize| 2 * c;
    let mut total = cfg.in_channels * cfg.init_features * 343 + bn(cfg.init_features);
    let mut inplanes = cfg.init_features;
    for (i, &n) in cfg.block_layers.iter().enumerate() {
        let p = cfg.init_features << i;
        for j in 0..n {
            total += inplanes * p + bn(p) + p * p * 27 + bn(p) + p * 4 * p + bn(4 * p);
            if j == 0 && (i > 0 || inplanes != 4 * p) {
                total += inplanes * 4 * p + bn(4 * p);
            }
            inplanes = 4 * p;
        }
    }
    total + inplanes * cfg.num_classes + cfg.num_classes
}
