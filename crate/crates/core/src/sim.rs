//! Forward simulation: synthetic PSFs and scenes, the camera forward model,
//! shot noise at a target SNR, and dataset generation with manifests.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fft::plan_2d;
use crate::field::{self, RField};
use crate::operators::{crop_c, forward_p, plan_kernel, FrequencyKernel};
use crate::tensor::Tensor3;

/// Seed offset separating the test-split seed range from the train range.
pub const TEST_SEED_OFFSET: u64 = 1 << 40;

/// Noise model applied to a clean measurement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub target_snr_db: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    Shot,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec { kind: NoiseKind::None, target_snr_db: 0.0, seed: 0 }
    }

    pub fn shot(target_snr_db: f64, seed: u64) -> Self {
        NoiseSpec { kind: NoiseKind::Shot, target_snr_db, seed }
    }
}

/// Synthetic diffuser-like PSF: white noise smoothed by a Gaussian of the
/// given correlation length, squared and L1-normalized per channel.
/// Deterministic in `seed`.
pub fn synth_psf(seed: u64, shape: (usize, usize, usize), correlation_px: f64) -> Result<Tensor3> {
    let (h, w, c) = shape;
    if h < 2 || w < 2 || !(c == 1 || c == 3) {
        return Err(CoreError::InvalidArgument(format!("degenerate PSF shape {h}x{w}x{c}")));
    }
    if correlation_px < 1.0 {
        return Err(CoreError::InvalidArgument("correlation_px must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = RField::zeros(h, w, c);
    for v in noise.data.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    // Circular Gaussian blur in the frequency domain.
    let plan = plan_2d(h, w);
    let sigma = correlation_px;
    let mut gauss = RField::zeros(h, w, 1);
    let mut gsum = 0.0;
    for r in 0..h {
        let dy = r.min(h - r) as f64;
        for col in 0..w {
            let dx = col.min(w - col) as f64;
            let g = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            gauss.data[r * w + col] = g;
            gsum += g;
        }
    }
    gauss.data.iter_mut().for_each(|v| *v /= gsum);
    let gspec = field::fft2(&plan, &gauss);
    let nspec = field::fft2(&plan, &noise);
    let smoothed = field::ifft2_re(&plan, &mul_by_broadcast_spectrum(&nspec, &gspec));
    let mut psf = RField::zeros(h, w, c);
    for ch in 0..c {
        let src = smoothed.plane(ch);
        let dst = psf.plane_mut(ch);
        let mut sum = 0.0;
        for i in 0..h * w {
            let v = src[i] * src[i];
            dst[i] = v;
            sum += v;
        }
        dst.iter_mut().for_each(|v| *v /= sum);
    }
    psf.to_tensor()
}

/// Multiplies every channel of `z` by the single-channel spectrum `s`.
fn mul_by_broadcast_spectrum(z: &field::CField, s: &field::CField) -> field::CField {
    debug_assert_eq!(s.c, 1);
    let n = z.h * z.w;
    let mut out = field::CField::zeros(z.h, z.w, z.c);
    let sp = s.plane(0);
    for ch in 0..z.c {
        let src = z.plane(ch);
        let dst = &mut out.data[ch * n..(ch + 1) * n];
        for i in 0..n {
            dst[i] = src[i] * sp[i];
        }
    }
    out
}

/// Synthetic scene: `complexity` random rectangles, ellipses and linear
/// gradients alpha-composited into `[0, 1]`. Deterministic in `seed`.
pub fn synth_scene(seed: u64, shape: (usize, usize, usize), complexity: usize) -> Tensor3 {
    let (h, w, c) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = RField::zeros(h, w, c);
    for _ in 0..complexity {
        let kind = rng.gen_range(0..3u32);
        let alpha: f64 = rng.gen_range(0.35..1.0);
        let color: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..1.0)).collect();
        match kind {
            0 => {
                // Axis-aligned rectangle.
                let rh = rng.gen_range(1..=h.max(2) / 2);
                let rw = rng.gen_range(1..=w.max(2) / 2);
                let r0 = rng.gen_range(0..h - rh + 1);
                let c0 = rng.gen_range(0..w - rw + 1);
                for ch in 0..c {
                    let plane = img.plane_mut(ch);
                    for r in r0..r0 + rh {
                        for col in c0..c0 + rw {
                            let v = &mut plane[r * w + col];
                            *v = (1.0 - alpha) * *v + alpha * color[ch];
                        }
                    }
                }
            }
            1 => {
                // Axis-aligned ellipse.
                let cy = rng.gen_range(0.0..h as f64);
                let cx = rng.gen_range(0.0..w as f64);
                let ry = rng.gen_range(1.0..h as f64 / 2.0);
                let rx = rng.gen_range(1.0..w as f64 / 2.0);
                for ch in 0..c {
                    let plane = img.plane_mut(ch);
                    for r in 0..h {
                        for col in 0..w {
                            let dy = (r as f64 + 0.5 - cy) / ry;
                            let dx = (col as f64 + 0.5 - cx) / rx;
                            if dy * dy + dx * dx <= 1.0 {
                                let v = &mut plane[r * w + col];
                                *v = (1.0 - alpha) * *v + alpha * color[ch];
                            }
                        }
                    }
                }
            }
            _ => {
                // Linear gradient across the full frame.
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let (dy, dx) = (theta.sin(), theta.cos());
                let diag = ((h * h + w * w) as f64).sqrt();
                for ch in 0..c {
                    let plane = img.plane_mut(ch);
                    for r in 0..h {
                        for col in 0..w {
                            let t = 0.5 + (r as f64 * dy + col as f64 * dx) / diag;
                            let t = t.clamp(0.0, 1.0);
                            let v = &mut plane[r * w + col];
                            *v = (1.0 - alpha) * *v + alpha * color[ch] * t;
                        }
                    }
                }
            }
        }
    }
    img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img.to_tensor().expect("bounded values")
}

/// Noiseless forward model: crop(P·scene), clamped at zero against FFT
/// round-off.
pub fn simulate(scene: &Tensor3, kernel: &FrequencyKernel) -> Result<Tensor3> {
    let padded = forward_p(kernel, scene)?;
    Ok(crop_c(kernel, &padded)?.map(|v| v.max(0.0)))
}

/// Applies Poisson shot noise scaled to hit the target SNR in expectation:
/// `y' = Poisson(gamma*y)/gamma` with `gamma = 10^(SNR/10) * sum(y) / sum(y^2)`.
pub fn add_shot_noise(y: &Tensor3, spec: &NoiseSpec) -> Result<Tensor3> {
    match spec.kind {
        NoiseKind::None => Ok(y.clone()),
        NoiseKind::Shot => {
            if !spec.target_snr_db.is_finite() {
                return Err(CoreError::InvalidArgument("target SNR must be finite".into()));
            }
            if y.min_value() < 0.0 {
                return Err(CoreError::InvalidArgument("shot noise needs non-negative input".into()));
            }
            let s1: f64 = y.data().iter().map(|&v| v as f64).sum();
            let s2: f64 = y.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
            if s2 <= 0.0 {
                return Err(CoreError::InvalidArgument("all-zero measurement: target SNR unattainable".into()));
            }
            let gamma = 10f64.powf(spec.target_snr_db / 10.0) * s1 / s2;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let mut out = Vec::with_capacity(y.len());
            for &v in y.data() {
                let lambda = gamma * v as f64;
                let sample = if lambda > 0.0 {
                    Poisson::new(lambda)
                        .map_err(|e| CoreError::Numerical(format!("poisson({lambda}): {e}")))?
                        .sample(&mut rng)
                } else {
                    0.0
                };
                out.push((sample / gamma) as f32);
            }
            Tensor3::from_vec(y.height(), y.width(), y.channels(), out)
        }
    }
}

/// Measured SNR of a noisy realization against its clean reference, in dB.
pub fn empirical_snr_db(clean: &Tensor3, noisy: &Tensor3) -> f64 {
    let sig: f64 = clean.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
    let noise: f64 = clean
        .data()
        .iter()
        .zip(noisy.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    10.0 * (sig / noise).log10()
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

/// PSF source for dataset generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum PsfConfig {
    Synthetic { seed: u64, correlation_px: f64 },
    File { path: String },
}

/// Everything needed to (re)generate a dataset deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub sensor_h: usize,
    pub sensor_w: usize,
    pub channels: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub psf: PsfConfig,
    pub scene_complexity: usize,
    pub noise: NoiseSpec,
    /// Base seed; train scenes use `seed + i`, test scenes a disjoint range.
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One scene/measurement pair of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub scene_path: String,
    pub measurement_path: String,
    pub snr_db: Option<f64>,
    pub seed: u64,
}

/// Manifest of one split; paths are relative to the manifest's directory.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub split: Split,
    pub psf_path: String,
    pub config: DatasetConfig,
    pub records: Vec<ManifestRecord>,
    /// Directory the relative paths resolve against.
    pub base_dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ManifestLine {
    Header { split: Split, psf_path: String, config: DatasetConfig },
    Record(ManifestRecord),
}

impl DatasetManifest {
    pub fn manifest_name(split: Split) -> &'static str {
        match split {
            Split::Train => "train_manifest.jsonl",
            Split::Test => "test_manifest.jsonl",
        }
    }

    /// Writes the newline-delimited manifest next to the data files.
    pub fn save(&self) -> Result<PathBuf> {
        let path = self.base_dir.join(Self::manifest_name(self.split));
        let mut f = std::io::BufWriter::new(fs::File::create(&path)?);
        let header = ManifestLine::Header {
            split: self.split,
            psf_path: self.psf_path.clone(),
            config: self.config.clone(),
        };
        writeln!(f, "{}", serde_json::to_string(&header).expect("serializable"))?;
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(&ManifestLine::Record(r.clone())).expect("serializable"))?;
        }
        f.flush()?;
        Ok(path)
    }

    /// Loads a manifest, verifying that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base_dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let file = fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| CoreError::Dataset("empty manifest".into()))??;
        let header: ManifestLine = serde_json::from_str(&header_line)
            .map_err(|e| CoreError::Dataset(format!("bad manifest header: {e}")))?;
        let (split, psf_path, config) = match header {
            ManifestLine::Header { split, psf_path, config } => (split, psf_path, config),
            ManifestLine::Record(_) => {
                return Err(CoreError::Dataset("manifest does not start with a header".into()))
            }
        };
        let mut records = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line)
                .map_err(|e| CoreError::Dataset(format!("bad manifest record: {e}")))?
            {
                ManifestLine::Record(r) => records.push(r),
                ManifestLine::Header { .. } => {
                    return Err(CoreError::Dataset("duplicate manifest header".into()))
                }
            }
        }
        let manifest = DatasetManifest { split, psf_path, config, records, base_dir };
        for rel in manifest
            .records
            .iter()
            .flat_map(|r| [r.scene_path.as_str(), r.measurement_path.as_str()])
            .chain(std::iter::once(manifest.psf_path.as_str()))
        {
            let p = manifest.base_dir.join(rel);
            if !p.exists() {
                return Err(CoreError::Dataset(format!("missing file {}", p.display())));
            }
        }
        Ok(manifest)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }
}

/// Noise seed of a record: derived from the record's scene seed and the
/// dataset noise seed so parallel and serial generation agree bit-for-bit.
pub fn record_noise_seed(noise_base: u64, record_seed: u64) -> u64 {
    noise_base ^ record_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Loads or synthesizes the dataset PSF.
pub fn dataset_psf(config: &DatasetConfig) -> Result<Tensor3> {
    match &config.psf {
        PsfConfig::Synthetic { seed, correlation_px } => synth_psf(
            *seed,
            (config.sensor_h, config.sensor_w, config.channels),
            *correlation_px,
        ),
        PsfConfig::File { path } => Tensor3::load(path),
    }
}

/// Regenerates a record's scene and measurement from its seed (replay oracle).
pub fn replay_measurement(
    config: &DatasetConfig,
    kernel: &FrequencyKernel,
    record_seed: u64,
) -> Result<(Tensor3, Tensor3)> {
    let scene = synth_scene(
        record_seed,
        (config.sensor_h, config.sensor_w, config.channels),
        config.scene_complexity,
    );
    let clean = simulate(&scene, kernel)?;
    let mut spec = config.noise;
    spec.seed = record_noise_seed(config.noise.seed, record_seed);
    let noisy = add_shot_noise(&clean, &spec)?;
    Ok((scene, noisy))
}

/// Generates both splits under `out_dir`, returning (train, test) manifests.
///
/// Generation is a pure function of the config: rerunning it produces
/// byte-identical tensor files and manifests.
pub fn gen_dataset(
    config: &DatasetConfig,
    out_dir: impl AsRef<Path>,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir.join("train"))?;
    fs::create_dir_all(out_dir.join("test"))?;
    let psf = dataset_psf(config)?;
    let psf_rel = "psf.ltnsr".to_string();
    psf.save(out_dir.join(&psf_rel))?;
    let kernel = plan_kernel(&psf)?;

    let gen_split = |split: Split, count: usize, seed_base: u64| -> Result<DatasetManifest> {
        let dir = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let records: Vec<ManifestRecord> = (0..count)
            .into_par_iter()
            .map(|i| -> Result<ManifestRecord> {
                let seed = seed_base + i as u64;
                let (scene, measurement) = replay_measurement(config, &kernel, seed)?;
                let scene_path = format!("{dir}/scene_{i:05}.ltnsr");
                let measurement_path = format!("{dir}/meas_{i:05}.ltnsr");
                scene.save(out_dir.join(&scene_path))?;
                measurement.save(out_dir.join(&measurement_path))?;
                Ok(ManifestRecord {
                    scene_path,
                    measurement_path,
                    snr_db: match config.noise.kind {
                        NoiseKind::None => None,
                        NoiseKind::Shot => Some(config.noise.target_snr_db),
                    },
                    seed,
                })
            })
            .collect::<Result<_>>()?;
        let manifest = DatasetManifest {
            split,
            psf_path: psf_rel.clone(),
            config: config.clone(),
            records,
            base_dir: out_dir.to_path_buf(),
        };
        manifest.save()?;
        Ok(manifest)
    };

    let train = gen_split(Split::Train, config.n_train, config.seed)?;
    let test = gen_split(Split::Test, config.n_test, config.seed + TEST_SEED_OFFSET)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::plan_kernel;

    #[test]
    fn psf_is_deterministic_and_normalized() {
        let a = synth_psf(42, (32, 32, 3), 3.0).unwrap();
        let b = synth_psf(42, (32, 32, 3), 3.0).unwrap();
        assert_eq!(a, b);
        let f = RField::from_tensor(&a);
        for ch in 0..3 {
            let s: f64 = f.plane(ch).iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "channel {ch} sums to {s}");
            assert!(f.plane(ch).iter().all(|&v| v >= 0.0));
        }
    }

    /// Circular autocorrelation half-width along the row axis.
    fn autocorr_half_width(psf: &Tensor3) -> f64 {
        let f = RField::from_tensor(psf);
        let (h, w) = (f.h, f.w);
        let plan = plan_2d(h, w);
        let spec = field::fft2(&plan, &f);
        let power = field::cabs2(&spec);
        let mut pc = field::CField::zeros(h, w, 1);
        for i in 0..h * w {
            pc.data[i] = num_complex::Complex64::new(power.data[i], 0.0);
        }
        let ac = field::ifft2_re(&plan, &pc);
        let peak = ac.data[0];
        for d in 1..h / 2 {
            if ac.data[d] < 0.5 * peak {
                // Linear interpolation between d-1 and d.
                let a = ac.data[d - 1] / peak;
                let b = ac.data[d] / peak;
                return (d - 1) as f64 + (a - 0.5) / (a - b);
            }
        }
        (h / 2) as f64
    }

    #[test]
    fn autocorrelation_width_grows_with_correlation_length() {
        let mut widths = Vec::new();
        for corr in [1.0, 2.0, 4.0, 8.0] {
            let psf = synth_psf(7, (64, 64, 1), corr).unwrap();
            widths.push(autocorr_half_width(&psf));
        }
        for pair in widths.windows(2) {
            assert!(pair[1] > pair[0], "widths not monotone: {widths:?}");
        }
    }

    #[test]
    fn scene_zero_complexity_is_black_and_values_bounded() {
        let z = synth_scene(3, (16, 16, 3), 0);
        assert!(z.data().iter().all(|&v| v == 0.0));
        let s = synth_scene(4, (16, 16, 3), 12);
        assert!(s.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(s, synth_scene(4, (16, 16, 3), 12));
    }

    #[test]
    fn scene_mean_is_in_sanity_band() {
        let mut acc = 0.0f64;
        for seed in 0..1000u64 {
            acc += synth_scene(seed, (32, 32, 3), 8).sum() / (32.0 * 32.0 * 3.0);
        }
        let mean = acc / 1000.0;
        assert!(mean > 0.05 && mean < 0.8, "mean {mean}");
    }

    #[test]
    fn simulate_zero_scene_and_delta_psf() {
        let mut delta = Tensor3::zeros(16, 16, 1);
        delta.set(8, 8, 0, 1.0);
        let k = plan_kernel(&delta).unwrap();
        let zero = Tensor3::zeros(16, 16, 1);
        assert!(simulate(&zero, &k).unwrap().data().iter().all(|&v| v == 0.0));
        let scene = synth_scene(5, (16, 16, 1), 5);
        let y = simulate(&scene, &k).unwrap();
        for (a, b) in scene.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn shot_noise_none_is_identity_and_bad_inputs_rejected() {
        let y = synth_scene(6, (8, 8, 1), 4);
        assert_eq!(add_shot_noise(&y, &NoiseSpec::none()).unwrap(), y);
        let neg = Tensor3::from_fn(4, 4, 1, |_, _, _| -0.5);
        assert!(add_shot_noise(&neg, &NoiseSpec::shot(20.0, 1)).is_err());
        let zero = Tensor3::zeros(4, 4, 1);
        assert!(add_shot_noise(&zero, &NoiseSpec::shot(20.0, 1)).is_err());
    }

    #[test]
    fn shot_noise_hits_target_snr() {
        let psf = synth_psf(8, (64, 64, 1), 3.0).unwrap();
        let k = plan_kernel(&psf).unwrap();
        let y = simulate(&synth_scene(9, (64, 64, 1), 8), &k).unwrap();
        let mut acc = 0.0;
        for draw in 0..100u64 {
            let noisy = add_shot_noise(&y, &NoiseSpec::shot(20.0, 1000 + draw)).unwrap();
            acc += empirical_snr_db(&y, &noisy);
        }
        let mean = acc / 100.0;
        assert!((mean - 20.0).abs() < 0.5, "empirical SNR {mean}");
    }

    #[test]
    fn doubling_gamma_adds_three_db() {
        // Poisson variance equals the mean, so doubling the photon rate gamma
        // doubles the signal-to-noise power ratio: +10*log10(2) dB.
        let psf = synth_psf(10, (64, 64, 1), 3.0).unwrap();
        let k = plan_kernel(&psf).unwrap();
        let y = simulate(&synth_scene(11, (64, 64, 1), 8), &k).unwrap();
        let mut a = 0.0;
        let mut b = 0.0;
        for draw in 0..100u64 {
            let n1 = add_shot_noise(&y, &NoiseSpec::shot(20.0, 2000 + draw)).unwrap();
            let n2 =
                add_shot_noise(&y, &NoiseSpec::shot(20.0 + 10.0 * 2f64.log10(), 3000 + draw)).unwrap();
            a += empirical_snr_db(&y, &n1);
            b += empirical_snr_db(&y, &n2);
        }
        let gain = (b - a) / 100.0;
        assert!((gain - 3.01).abs() < 0.5, "gain {gain}");
    }

    #[test]
    fn shot_noise_is_unbiased() {
        let psf = synth_psf(12, (32, 32, 1), 2.0).unwrap();
        let k = plan_kernel(&psf).unwrap();
        let y = simulate(&synth_scene(13, (32, 32, 1), 6), &k).unwrap();
        let n_draws = 300;
        let mut mean = vec![0.0f64; y.len()];
        for draw in 0..n_draws {
            let noisy = add_shot_noise(&y, &NoiseSpec::shot(10.0, 4000 + draw)).unwrap();
            for (m, &v) in mean.iter_mut().zip(noisy.data()) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n_draws as f64);
        // Per-pixel mean over draws should match the clean value within
        // 3 standard errors of Poisson(gamma*y)/gamma.
        let s1: f64 = y.data().iter().map(|&v| v as f64).sum();
        let s2: f64 = y.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
        let gamma = 10f64.powf(1.0) * s1 / s2;
        let mut violations = 0;
        for (i, &v) in y.data().iter().enumerate() {
            let se = ((v as f64) / gamma / n_draws as f64).sqrt();
            if (mean[i] - v as f64).abs() > 3.0 * se + 1e-12 {
                violations += 1;
            }
        }
        // 3-sigma bound: expect ~0.3% violations, allow 1.5%.
        assert!((violations as f64) < 0.015 * y.len() as f64, "{violations} violations");
    }

    #[test]
    fn dataset_generation_counts_determinism_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let config = DatasetConfig {
            sensor_h: 16,
            sensor_w: 16,
            channels: 1,
            n_train: 6,
            n_test: 3,
            psf: PsfConfig::Synthetic { seed: 7, correlation_px: 2.0 },
            scene_complexity: 5,
            noise: NoiseSpec::shot(20.0, 99),
            seed: 1000,
        };
        let (train, test) = gen_dataset(&config, dir.path()).unwrap();
        assert_eq!(train.records.len() + test.records.len(), 9);
        let train_seeds: std::collections::HashSet<u64> =
            train.records.iter().map(|r| r.seed).collect();
        assert!(test.records.iter().all(|r| !train_seeds.contains(&r.seed)));

        // Reload from disk and replay every test record.
        let loaded = DatasetManifest::load(dir.path().join("test_manifest.jsonl")).unwrap();
        assert_eq!(loaded.records, test.records);
        let psf = Tensor3::load(loaded.resolve(&loaded.psf_path)).unwrap();
        let kernel = plan_kernel(&psf).unwrap();
        for r in &loaded.records {
            let (scene, meas) = replay_measurement(&config, &kernel, r.seed).unwrap();
            assert_eq!(scene, Tensor3::load(loaded.resolve(&r.scene_path)).unwrap());
            assert_eq!(meas, Tensor3::load(loaded.resolve(&r.measurement_path)).unwrap());
        }

        // Regeneration is byte-identical.
        let before = std::fs::read(dir.path().join("train/meas_00000.ltnsr")).unwrap();
        let manifest_before = std::fs::read(dir.path().join("train_manifest.jsonl")).unwrap();
        gen_dataset(&config, dir.path()).unwrap();
        let after = std::fs::read(dir.path().join("train/meas_00000.ltnsr")).unwrap();
        let manifest_after = std::fs::read(dir.path().join("train_manifest.jsonl")).unwrap();
        assert_eq!(before, after);
        assert_eq!(manifest_before, manifest_after);
    }
}
