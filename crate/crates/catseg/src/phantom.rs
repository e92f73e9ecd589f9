//! Deterministic synthetic anisotropic volumes with nested two-zone anatomy.
//!
//! Each patient volume holds a smoothly tapering pair of ellipses per slice:
//! an outer gland whose posterior band is the second zone (PZ) and an inner
//! anterior ellipse forming the first zone (TZ). On the outermost prostate
//! slices the zone contrast is attenuated, so those slices cannot be
//! segmented reliably from their own intensities alone while the neighboring
//! slices still pin down the geometry.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelVolume, Tensor, CLASS_BACKGROUND, CLASS_PZ, CLASS_TZ};

pub const BG_MEAN: f64 = 0.20;
pub const PZ_MEAN: f64 = 0.52;
pub const TZ_MEAN: f64 = 0.78;

/// Generator parameters. Spacing is `(row mm, column mm, through-plane mm)`;
/// the through-plane step applies along the slice axis.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    pub patients: usize,
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    pub spacing: [f64; 3],
    /// Gaussian noise sigma before spatial smoothing.
    pub noise: f64,
    /// Contrast attenuation on the outermost prostate slices, in `[0, 1]`.
    pub ambiguity: f64,
    /// How many prostate slices at each end are attenuated.
    pub ambiguous_margin: usize,
    /// Gland semi-axis range as a fraction of the half image size.
    pub gland_radius: (f64, f64),
    /// TZ semi-axis range as a fraction of the gland semi-axes.
    pub tz_frac: (f64, f64),
    /// Patient-level center jitter as a fraction of the image size.
    pub center_jitter: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 7,
            patients: 80,
            slices: 12,
            height: 64,
            width: 64,
            spacing: [1.0, 1.0, 3.0],
            noise: 0.1,
            ambiguity: 0.5,
            ambiguous_margin: 3,
            gland_radius: (0.55, 0.75),
            tz_frac: (0.45, 0.65),
            center_jitter: 0.06,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.slices < 8 {
            return Err(Error::config("phantom needs at least 8 slices"));
        }
        if self.spacing[2] <= self.spacing[0] || self.spacing[2] <= self.spacing[1] {
            return Err(Error::config(
                "through-plane spacing must exceed in-plane spacing (anisotropic volume)",
            ));
        }
        if self.spacing.iter().any(|&s| s <= 0.0) {
            return Err(Error::config("spacing must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(Error::config("ambiguity must lie in [0, 1]"));
        }
        if self.patients == 0 {
            return Err(Error::config("need at least one patient"));
        }
        Ok(())
    }
}

/// Image volume in `[0, 1]` with physical voxel spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub intensities: Tensor<f32>,
    pub spacing: [f64; 3],
}

/// Per-slice ellipse pair; exposed so tests can verify containment.
#[derive(Clone, Debug)]
pub struct SliceGeometry {
    pub gland_center: (f64, f64),
    pub gland_radii: (f64, f64),
    pub tz_center: (f64, f64),
    pub tz_radii: (f64, f64),
    /// Rows at or below this line may carry PZ.
    pub band_row: f64,
}

/// Full geometry of one phantom, before rasterization.
pub struct PhantomGeometry {
    pub prostate_start: usize,
    pub prostate_len: usize,
    pub slices: Vec<Option<SliceGeometry>>,
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 step over the combined value
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic geometry for one patient.
pub fn phantom_geometry(spec: &PhantomSpec, patient: usize) -> PhantomGeometry {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, patient as u64));
    let (h, w, l) = (spec.height as f64, spec.width as f64, spec.slices);

    let min_len = 2 * spec.ambiguous_margin + 1;
    let lo = l.min(9).max(min_len);
    let hi = l.min(11).max(lo);
    let prostate_len = rng.gen_range(lo..=hi);
    let prostate_start = rng.gen_range(0..=(l - prostate_len));

    let cy = h / 2.0 * (1.0 + spec.center_jitter * rng.gen_range(-1.0..1.0));
    let cx = w / 2.0 * (1.0 + spec.center_jitter * rng.gen_range(-1.0..1.0));
    let ry_max = rng.gen_range(spec.gland_radius.0..spec.gland_radius.1) * h / 2.0;
    let rx_max = rng.gen_range(spec.gland_radius.0..spec.gland_radius.1) * w / 2.0;
    let tz_frac = rng.gen_range(spec.tz_frac.0..spec.tz_frac.1);

    // smooth slice-to-slice wander of the centers
    let amp_y = rng.gen_range(0.0..spec.center_jitter * h / 2.0);
    let amp_x = rng.gen_range(0.0..spec.center_jitter * w / 2.0);
    let phase_y = rng.gen_range(0.0..2.0 * PI);
    let phase_x = rng.gen_range(0.0..2.0 * PI);

    let mut slices = vec![None; l];
    for (pos, geom) in slices
        .iter_mut()
        .enumerate()
        .skip(prostate_start)
        .take(prostate_len)
    {
        let t = (pos - prostate_start) as f64 + 0.5;
        let u = t / prostate_len as f64; // in (0, 1)
        let taper = (1.0 - (2.0 * u - 1.0).powi(2)).sqrt();
        let wiggle = 2.0 * PI * u;
        let gcy = cy + amp_y * (wiggle + phase_y).sin();
        let gcx = cx + amp_x * (wiggle + phase_x).sin();
        let gry = (taper * ry_max).max(2.5);
        let grx = (taper * rx_max).max(2.5);
        let tz_taper = taper.powf(1.3);
        let try_ = (tz_frac * tz_taper * ry_max).max(1.2);
        let trx = (tz_frac * tz_taper * rx_max).max(1.2);
        // TZ sits anterior (smaller row index) of the gland center
        let tcy = gcy - 0.20 * gry;
        let tcx = gcx;
        *geom = Some(SliceGeometry {
            gland_center: (gcy, gcx),
            gland_radii: (gry, grx),
            tz_center: (tcy, tcx),
            tz_radii: (try_, trx),
            band_row: gcy - 0.10 * gry,
        });
    }
    PhantomGeometry {
        prostate_start,
        prostate_len,
        slices,
    }
}

fn inside(y: f64, x: f64, center: (f64, f64), radii: (f64, f64)) -> bool {
    let dy = (y - center.0) / radii.0;
    let dx = (x - center.1) / radii.1;
    dy * dy + dx * dx <= 1.0
}

/// Rasterizes the labels for one patient.
pub fn phantom_labels(spec: &PhantomSpec, geometry: &PhantomGeometry) -> LabelVolume {
    let (l, h, w) = (spec.slices, spec.height, spec.width);
    let mut labels = LabelVolume::zeros([l, h, w]);
    for (s, geom) in geometry.slices.iter().enumerate() {
        let Some(g) = geom else { continue };
        for y in 0..h {
            for x in 0..w {
                let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
                let label = if inside(yf, xf, g.tz_center, g.tz_radii) {
                    CLASS_TZ
                } else if inside(yf, xf, g.gland_center, g.gland_radii) && yf >= g.band_row {
                    CLASS_PZ
                } else {
                    CLASS_BACKGROUND
                };
                labels.set(s, y, x, label);
            }
        }
    }
    labels
}

/// Zone mean for a slice, honoring the end-slice attenuation.
fn zone_mean(label: u8, attenuation: f64) -> f64 {
    let mean = match label {
        CLASS_TZ => TZ_MEAN,
        CLASS_PZ => PZ_MEAN,
        _ => BG_MEAN,
    };
    BG_MEAN + (mean - BG_MEAN) * attenuation
}

/// 3x3 box smoothing per slice; border pixels average their existing neighbors.
fn box_smooth(field: &mut [f64], l: usize, h: usize, w: usize) {
    let mut smoothed = vec![0.0; field.len()];
    for s in 0..l {
        let base = s * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut count = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let ny = y as i64 + dy;
                        let nx = x as i64 + dx;
                        if ny >= 0 && ny < h as i64 && nx >= 0 && nx < w as i64 {
                            acc += field[base + (ny as usize) * w + nx as usize];
                            count += 1.0;
                        }
                    }
                }
                smoothed[base + y * w + x] = acc / count;
            }
        }
    }
    field.copy_from_slice(&smoothed);
}

/// Generates one patient volume and its ground-truth mask. The same
/// `(spec, patient)` pair always produces bit-identical output.
pub fn generate_phantom(spec: &PhantomSpec, patient: usize) -> Result<(Volume, LabelVolume)> {
    spec.validate()?;
    let geometry = phantom_geometry(spec, patient);
    let labels = phantom_labels(spec, &geometry);
    let (l, h, w) = (spec.slices, spec.height, spec.width);

    // attenuation per slice: outer `ambiguous_margin` prostate slices at each
    // end get their zone-to-background contrast scaled by (1 - ambiguity)
    let mut attenuation = vec![1.0; l];
    let (start, len, margin) = (
        geometry.prostate_start,
        geometry.prostate_len,
        spec.ambiguous_margin,
    );
    for (offset, att) in attenuation.iter_mut().enumerate().skip(start).take(len) {
        let pos = offset - start;
        if pos < margin || pos >= len - margin {
            *att = 1.0 - spec.ambiguity;
        }
    }

    let mut field = vec![0.0f64; l * h * w];
    for s in 0..l {
        for y in 0..h {
            for x in 0..w {
                field[(s * h + y) * w + x] = zone_mean(labels.get(s, y, x), attenuation[s]);
            }
        }
    }

    // spatially correlated noise: white Gaussian, 3x3 box smoothed
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed ^ 0x5EED_0E15, patient as u64));
    let mut noise: Vec<f64> = (0..l * h * w)
        .map(|_| {
            let n: f64 = rng.sample(rand_distr::StandardNormal);
            n * spec.noise
        })
        .collect();
    box_smooth(&mut noise, l, h, w);

    let data: Vec<f32> = field
        .iter()
        .zip(&noise)
        .map(|(&m, &n)| (m + n).clamp(0.0, 1.0) as f32)
        .collect();
    let intensities = Tensor::from_vec(&[l, h, w, 1], data)?;
    Ok((
        Volume {
            intensities,
            spacing: spec.spacing,
        },
        labels,
    ))
}

/// Single-slice intensity-threshold classifier: assigns each voxel the zone
/// whose nominal mean is nearest. Deliberately blind to neighboring slices.
pub fn threshold_oracle_predict(volume: &Volume) -> LabelVolume {
    let shape = volume.intensities.shape();
    let (l, h, w) = (shape[0], shape[1], shape[2]);
    let data = volume
        .intensities
        .data()
        .iter()
        .map(|&v| {
            let v = v as f64;
            let mut best = (CLASS_BACKGROUND, (v - BG_MEAN).abs());
            for (label, mean) in [(CLASS_TZ, TZ_MEAN), (CLASS_PZ, PZ_MEAN)] {
                let d = (v - mean).abs();
                if d < best.1 {
                    best = (label, d);
                }
            }
            best.0
        })
        .collect();
    LabelVolume::new([l, h, w], data).expect("labels in range")
}

/// Deterministic shuffled split into train/val/test id lists.
///
/// Sizes are floors of `ratio * n`; leftovers go to the splits with the
/// largest fractional remainders (ties favor earlier splits).
pub fn split_dataset(
    patients: usize,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|&v| v < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split ratios must be nonnegative and sum to 1, got {r:?}"
        )));
    }
    let mut sizes = [0usize; 3];
    let mut fracs = [(0.0f64, 0usize); 3];
    let mut assigned = 0;
    for i in 0..3 {
        let exact = r[i] * patients as f64;
        sizes[i] = exact.floor() as usize;
        fracs[i] = (exact - exact.floor(), i);
        assigned += sizes[i];
    }
    fracs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for k in 0..patients - assigned {
        sizes[fracs[k % 3].1] += 1;
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::config(format!(
            "split produces an empty subset: sizes {sizes:?} from {patients} patients"
        )));
    }

    let mut ids: Vec<usize> = (0..patients).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::seq::SliceRandom;
    ids.shuffle(&mut rng);
    let train = ids[..sizes[0]].to_vec();
    let val = ids[sizes[0]..sizes[0] + sizes[1]].to_vec();
    let test = ids[sizes[0] + sizes[1]..].to_vec();
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::NUM_CLASSES;

    #[test]
    fn generation_is_deterministic() {
        let spec = PhantomSpec {
            patients: 2,
            ..PhantomSpec::default()
        };
        let (va, la) = generate_phantom(&spec, 1).unwrap();
        let (vb, lb) = generate_phantom(&spec, 1).unwrap();
        assert!(va.intensities == vb.intensities);
        assert_eq!(la, lb);
        // different patients differ
        let (vc, _) = generate_phantom(&spec, 0).unwrap();
        assert!(va.intensities != vc.intensities);
    }

    #[test]
    fn zero_ambiguity_keeps_end_slice_contrast() {
        let spec = PhantomSpec {
            ambiguity: 0.0,
            noise: 0.0,
            ..PhantomSpec::default()
        };
        let (vol, labels) = generate_phantom(&spec, 3).unwrap();
        let shape = labels.shape();
        // every TZ voxel must carry the full TZ mean on every slice
        for s in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    if labels.get(s, y, x) == CLASS_TZ {
                        let v = vol.intensities.data()[(s * shape[1] + y) * shape[2] + x];
                        assert!((v as f64 - TZ_MEAN).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn ambiguity_attenuates_end_slices() {
        let spec = PhantomSpec {
            ambiguity: 0.5,
            noise: 0.0,
            ..PhantomSpec::default()
        };
        let geom = phantom_geometry(&spec, 3);
        let (vol, labels) = generate_phantom(&spec, 3).unwrap();
        let shape = labels.shape();
        let first = geom.prostate_start;
        let expected = BG_MEAN + (TZ_MEAN - BG_MEAN) * 0.5;
        let mut checked = false;
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                if labels.get(first, y, x) == CLASS_TZ {
                    let v = vol.intensities.data()[(first * shape[1] + y) * shape[2] + x];
                    assert!((v as f64 - expected).abs() < 1e-6);
                    checked = true;
                }
            }
        }
        assert!(checked, "first prostate slice should contain TZ voxels");
    }

    #[test]
    fn invariant_sweep_over_100_phantoms() {
        let spec = PhantomSpec {
            patients: 100,
            ..PhantomSpec::default()
        };
        for patient in 0..100 {
            let geom = phantom_geometry(&spec, patient);
            let (vol, labels) = generate_phantom(&spec, patient).unwrap();
            // labels in range comes from the LabelVolume constructor; check
            // zone presence, contiguity, intensity bounds, and containment
            assert!(vol.intensities.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(labels.data().iter().all(|&v| (v as usize) < NUM_CLASSES));
            assert!(labels.count_class(CLASS_TZ) > 0);
            assert!(labels.count_class(CLASS_PZ) > 0);

            let shape = labels.shape();
            let bearing: Vec<usize> = (0..shape[0])
                .filter(|&s| {
                    (0..shape[1]).any(|y| (0..shape[2]).any(|x| labels.get(s, y, x) != 0))
                })
                .collect();
            assert!(bearing.len() >= 7, "at least 7 prostate slices");
            for pair in bearing.windows(2) {
                assert_eq!(pair[1], pair[0] + 1, "prostate slices must be contiguous");
            }
            assert_eq!(bearing.len(), geom.prostate_len);

            // TZ voxels lie inside the gland envelope
            for (s, g) in geom.slices.iter().enumerate() {
                let Some(g) = g else { continue };
                for y in 0..shape[1] {
                    for x in 0..shape[2] {
                        if labels.get(s, y, x) == CLASS_TZ {
                            assert!(inside(
                                y as f64 + 0.5,
                                x as f64 + 0.5,
                                g.gland_center,
                                g.gland_radii
                            ));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn split_examples() {
        let (train, val, test) = split_dataset(100, (0.8, 0.1, 0.1), 42).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (80, 10, 10));

        let mut all: Vec<usize> = train.iter().chain(&val).chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());

        let again = split_dataset(100, (0.8, 0.1, 0.1), 42).unwrap();
        assert_eq!(again.0, train);
        assert_eq!(again.1, val);
        assert_eq!(again.2, test);

        assert!(split_dataset(5, (1.0, 0.0, 0.0), 1).is_err());
        assert!(split_dataset(10, (0.5, 0.2, 0.2), 1).is_err());
    }

    #[test]
    fn default_split_is_60_10_10() {
        let (train, val, test) = split_dataset(80, (0.75, 0.125, 0.125), 7).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (60, 10, 10));
    }
}
